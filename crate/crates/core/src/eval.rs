//! IoU and multi-threshold Average Recall, with thing/stuff and
//! singular/plural subcategory breakdowns.

use crate::codec::BinaryMask;
use crate::{Error, Result};
use serde::{Deserialize, Serialize};

/// Countable object vs amorphous region.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ThingStuff {
    Thing,
    Stuff,
}

/// One instance vs a set of instances.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Number {
    Singular,
    Plural,
}

/// Per-phrase evaluation outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub phrase_id: String,
    /// IoU of predicted vs ground-truth mask, in [0,1].
    pub iou: f64,
    pub thing_stuff: ThingStuff,
    pub number: Number,
}

/// Strictly increasing IoU thresholds in (0,1).
#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdGrid {
    values: Vec<f64>,
}

impl ThresholdGrid {
    /// The benchmark grid: τ_k = k/10000 for k = 1..9999.
    pub fn standard() -> Self {
        Self {
            values: (1..10_000).map(|k| k as f64 / 10_000.0).collect(),
        }
    }

    /// Custom grid; must be strictly increasing within (0,1).
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::parameter("threshold grid must be nonempty"));
        }
        for w in values.windows(2) {
            if w[1] <= w[0] {
                return Err(Error::parameter("thresholds must be strictly increasing"));
            }
        }
        if values[0] <= 0.0 || *values.last().unwrap() >= 1.0 {
            return Err(Error::parameter("thresholds must lie in (0,1)"));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

impl Default for ThresholdGrid {
    fn default() -> Self {
        Self::standard()
    }
}

/// Intersection over union of two equally sized masks.
///
/// Two empty masks compare as 1.0 (a correct "nothing to segment").
pub fn iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "iou: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut inter = 0u64;
    let mut union = 0u64;
    for (&x, &y) in a.bits().iter().zip(b.bits()) {
        inter += (x & y) as u64;
        union += (x | y) as u64;
    }
    if union == 0 {
        Ok(1.0)
    } else {
        Ok(inter as f64 / union as f64)
    }
}

/// Mean over grid thresholds of the fraction of records with IoU ≥ τ.
///
/// Grid-major loop; see [`average_recall_exact`] for the record-major route.
pub fn average_recall(records: &[EvalRecord], grid: &ThresholdGrid) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::data("average_recall over empty record set"));
    }
    let n = records.len() as f64;
    let mut acc = 0.0;
    for &tau in grid.values() {
        let recalled = records.iter().filter(|r| r.iou >= tau).count();
        acc += recalled as f64 / n;
    }
    Ok(acc / grid.len() as f64)
}

/// Record-major computation of the identical quantity.
///
/// Each record contributes `(#thresholds ≤ its IoU) / (|grid|·P)`, located
/// by binary search over the sorted grid.
pub fn average_recall_exact(records: &[EvalRecord], grid: &ThresholdGrid) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::data("average_recall over empty record set"));
    }
    let taus = grid.values();
    let denom = (grid.len() * records.len()) as f64;
    let mut acc = 0.0;
    for r in records {
        let count = taus.partition_point(|&tau| tau <= r.iou);
        acc += count as f64;
    }
    Ok(acc / denom)
}

/// Average Recall over all records and over the four tag subsets.
///
/// Empty subsets are reported as absent rather than zero.
#[derive(Debug, Clone, PartialEq)]
pub struct SubcategoryReport {
    pub overall: f64,
    pub things: Option<f64>,
    pub stuff: Option<f64>,
    pub singulars: Option<f64>,
    pub plurals: Option<f64>,
}

/// Compute the overall AR plus the four subcategory ARs.
pub fn subcategory_report(records: &[EvalRecord], grid: &ThresholdGrid) -> Result<SubcategoryReport> {
    let overall = average_recall_exact(records, grid)?;
    let subset = |pred: &dyn Fn(&EvalRecord) -> bool| -> Result<Option<f64>> {
        let sel: Vec<EvalRecord> = records.iter().filter(|r| pred(r)).cloned().collect();
        if sel.is_empty() {
            Ok(None)
        } else {
            Ok(Some(average_recall_exact(&sel, grid)?))
        }
    };
    Ok(SubcategoryReport {
        overall,
        things: subset(&|r| r.thing_stuff == ThingStuff::Thing)?,
        stuff: subset(&|r| r.thing_stuff == ThingStuff::Stuff)?,
        singulars: subset(&|r| r.number == Number::Singular)?,
        plurals: subset(&|r| r.number == Number::Plural)?,
    })
}
