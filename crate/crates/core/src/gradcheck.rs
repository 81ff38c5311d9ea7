//! Finite-difference verification of the analytic gradients.
//!
//! Central differences over the trainable parameters of the denoising loss,
//! in double precision. The analytic path and the loss-value path share the
//! forward implementation but the differencing itself is independent of the
//! backward code it checks.

use crate::model::{LabelDiffusionModel, ParamGroup};
use crate::training::{denoising_loss, denoising_loss_value, SampleDraw, TrainExample};
use crate::{diffusion::NoiseSchedule, Result};
use rayon::prelude::*;

/// Differencing step and acceptance thresholds.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    pub step: f64,
    /// Maximum allowed |analytic − numeric| / max(|analytic|, |numeric|).
    pub rel_tolerance: f64,
    /// Differences below this absolute floor pass regardless of ratio.
    pub abs_floor: f64,
    /// Cap on elements checked per tensor (evenly strided); `None` checks
    /// every element.
    pub max_elements_per_tensor: Option<usize>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            rel_tolerance: 1e-4,
            abs_floor: 1e-9,
            max_elements_per_tensor: Some(256),
        }
    }
}

impl GradCheckConfig {
    /// Check every element of every tensor.
    pub fn exhaustive() -> Self {
        Self {
            max_elements_per_tensor: None,
            ..Self::default()
        }
    }
}

/// Worst-case comparison for one parameter tensor.
#[derive(Debug, Clone)]
pub struct TensorReport {
    pub name: String,
    pub elements: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub passed: bool,
}

/// Compare analytic gradients of the denoising loss against central finite
/// differences, tensor by tensor (tensors run in parallel).
pub fn check_denoising_loss_gradients(
    model: &LabelDiffusionModel<f64>,
    schedule: &NoiseSchedule<f64>,
    batch: &[TrainExample<f64>],
    draws: &[SampleDraw<f64>],
    cfg: GradCheckConfig,
) -> Result<Vec<TensorReport>> {
    let (_, analytic) = denoising_loss(model, schedule, batch, draws)?;

    // stable (name, length) table in visitation order
    let mut layout: Vec<(String, usize)> = Vec::new();
    model.visit_all(&mut |n, t| layout.push((n, t.len())));

    let jobs: Vec<(usize, String, usize)> = layout
        .iter()
        .enumerate()
        .filter(|(_, (name, _))| ParamGroup::of(name).trainable())
        .map(|(pos, (name, len))| (pos, name.clone(), *len))
        .collect();

    jobs.par_iter()
        .map(|(pos, name, len)| {
            let mut work = model.clone();
            let mut grad_vals = Vec::new();
            analytic.visit_all(&mut |n, t| {
                if &n == name {
                    grad_vals = t.data().to_vec();
                }
            });
            let indices: Vec<usize> = match cfg.max_elements_per_tensor {
                Some(cap) if *len > cap => {
                    // even stride keeps coverage spread over the tensor
                    (0..cap).map(|i| i * len / cap).collect()
                }
                _ => (0..*len).collect(),
            };
            let mut max_rel = 0.0f64;
            let mut max_abs = 0.0f64;
            for &e in &indices {
                perturb(&mut work, *pos, e, cfg.step);
                let plus = denoising_loss_value(&work, schedule, batch, draws)?;
                perturb(&mut work, *pos, e, -2.0 * cfg.step);
                let minus = denoising_loss_value(&work, schedule, batch, draws)?;
                perturb(&mut work, *pos, e, cfg.step);
                let numeric = (plus - minus) / (2.0 * cfg.step);
                let a = grad_vals[e];
                let abs = (a - numeric).abs();
                let denom = a.abs().max(numeric.abs());
                let rel = if denom > 0.0 { abs / denom } else { 0.0 };
                if abs > cfg.abs_floor {
                    max_rel = max_rel.max(rel);
                }
                max_abs = max_abs.max(abs);
            }
            Ok(TensorReport {
                name: name.clone(),
                elements: indices.len(),
                max_rel_err: max_rel,
                max_abs_err: max_abs,
                passed: max_rel <= cfg.rel_tolerance,
            })
        })
        .collect()
}

fn perturb(model: &mut LabelDiffusionModel<f64>, tensor_pos: usize, elem: usize, delta: f64) {
    let mut idx = 0usize;
    model.visit_mut_all(&mut |_, t| {
        if idx == tensor_pos {
            t.data_mut()[elem] += delta;
        }
        idx += 1;
    });
}
