//! Denoising objective with conditional dropout, the Adam optimization loop,
//! and bit-exact checkpointing.

use crate::diffusion::{forward_noise, make_linear_schedule, NoiseSchedule};
use crate::model::{LabelDiffusionModel, ModelConfig, ParamGroup};
use crate::nn::layers::adam_update_tensor;
use crate::rng::{derive_seed, rng_from_seed, RngState, SeededRng};
use crate::text::PhraseVocabulary;
use crate::{Error, LatentGrid, Result, Scalar};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

/// Optimization hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Probability of replacing a sample's conditioning by the null tokens.
    pub p_drop: f64,
    /// Diffusion steps T.
    pub total_steps: usize,
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Linear beta schedule endpoints.
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 16,
            epochs: 20,
            p_drop: 0.1,
            total_steps: 1000,
            seed: 0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(Error::parameter("learning rate must be > 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::parameter("batch size must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.p_drop) {
            return Err(Error::parameter("p_drop must lie in [0,1]"));
        }
        if self.total_steps == 0 {
            return Err(Error::parameter("total_steps must be >= 1"));
        }
        Ok(())
    }
}

/// One training sample: clean label latent, frozen image latent, phrase ids.
#[derive(Debug, Clone)]
pub struct TrainExample<T> {
    pub x0: LatentGrid<T>,
    pub image_latent: LatentGrid<T>,
    pub tokens: Vec<usize>,
}

/// Mutable training state: parameters, optimizer moments, step counter, rng.
#[derive(Debug, Clone)]
pub struct TrainState<T> {
    pub model: LabelDiffusionModel<T>,
    pub moment1: LabelDiffusionModel<T>,
    pub moment2: LabelDiffusionModel<T>,
    pub step: u64,
    pub rng: SeededRng,
    pub schedule: NoiseSchedule<T>,
    pub config: TrainConfig,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(model: LabelDiffusionModel<T>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let schedule = make_linear_schedule(config.total_steps, config.beta_start, config.beta_end)?;
        Ok(Self {
            moment1: model.zeros_like(),
            moment2: model.zeros_like(),
            rng: rng_from_seed(derive_seed(config.seed, 0x7261_696e)),
            model,
            step: 0,
            schedule,
            config,
        })
    }
}

/// Mean squared error between a prediction and the noise target.
pub fn mse_mean<T: Scalar>(pred: &LatentGrid<T>, target: &LatentGrid<T>) -> Result<f64> {
    if !pred.same_shape(target) {
        return Err(Error::shape("loss shapes differ"));
    }
    let n = pred.len() as f64;
    Ok(pred
        .values()
        .iter()
        .zip(target.values())
        .map(|(&p, &t)| {
            let d = (p - t).to_f64_c();
            d * d
        })
        .sum::<f64>()
        / n)
}

/// Per-sample randomness drawn up front so batch evaluation order cannot
/// change results.
#[derive(Debug, Clone)]
pub struct SampleDraw<T> {
    pub t: usize,
    pub eps: LatentGrid<T>,
    pub dropped: bool,
}

pub fn draw_batch_randomness<T: Scalar>(
    batch: &[TrainExample<T>],
    total_steps: usize,
    p_drop: f64,
    rng: &mut SeededRng,
) -> Vec<SampleDraw<T>> {
    batch
        .iter()
        .map(|ex| {
            let t = rng.gen_range(0..total_steps);
            let (h, w, c) = ex.x0.shape();
            let eps = LatentGrid::randn(h, w, c, rng);
            let u: f64 = rng.gen();
            SampleDraw {
                t,
                eps,
                dropped: u < p_drop,
            }
        })
        .collect()
}

fn accumulate_sample<T: Scalar>(
    model: &LabelDiffusionModel<T>,
    schedule: &NoiseSchedule<T>,
    ex: &TrainExample<T>,
    draw: &SampleDraw<T>,
    batch_size: usize,
    grads: &mut LabelDiffusionModel<T>,
) -> Result<f64> {
    let cond = if draw.dropped {
        model.null_conditioning()
    } else {
        model.phrase_conditioning(&ex.tokens)?
    };
    debug_assert_eq!(cond.is_null, draw.dropped);
    let xt = forward_noise(&ex.x0, draw.t, &draw.eps, schedule)?;
    let (pred, tape) = model.denoiser.forward_cached(&xt, &ex.image_latent, draw.t, &cond)?;
    let loss = mse_mean(&pred, &draw.eps)?;
    let scale = T::from_f64_c(2.0 / (batch_size * pred.len()) as f64);
    let d_pred = pred.zip_map(&draw.eps, |p, e| (p - e) * scale)?;
    let cond_grad = model
        .denoiser
        .backward(&tape, &cond, &d_pred, &mut grads.denoiser);
    if draw.dropped {
        model.null_cond_backward(&cond_grad, grads);
    } else {
        model.phrase_cond_backward(&ex.tokens, &cond, &cond_grad, grads);
    }
    Ok(loss)
}

fn sample_loss_value<T: Scalar>(
    model: &LabelDiffusionModel<T>,
    schedule: &NoiseSchedule<T>,
    ex: &TrainExample<T>,
    draw: &SampleDraw<T>,
) -> Result<f64> {
    let cond = if draw.dropped {
        model.null_conditioning()
    } else {
        model.phrase_conditioning(&ex.tokens)?
    };
    let xt = forward_noise(&ex.x0, draw.t, &draw.eps, schedule)?;
    let pred = model.denoiser.forward(&xt, &ex.image_latent, draw.t, &cond)?;
    mse_mean(&pred, &draw.eps)
}

/// Fixed gradient-accumulation chunk; keeping it constant makes results
/// bit-identical regardless of worker count.
const GRAD_CHUNK: usize = 2;

/// Batch loss (mean over samples and cells) plus gradients for every
/// trainable parameter. Chunks of samples run in parallel, each accumulating
/// into its own gradient buffer; buffers reduce in chunk order.
pub fn denoising_loss<T: Scalar>(
    model: &LabelDiffusionModel<T>,
    schedule: &NoiseSchedule<T>,
    batch: &[TrainExample<T>],
    draws: &[SampleDraw<T>],
) -> Result<(f64, LabelDiffusionModel<T>)> {
    if batch.is_empty() || batch.len() != draws.len() {
        return Err(Error::parameter("batch and draws must be nonempty and aligned"));
    }
    let chunks: Vec<(usize, &[TrainExample<T>], &[SampleDraw<T>])> = batch
        .chunks(GRAD_CHUNK)
        .zip(draws.chunks(GRAD_CHUNK))
        .enumerate()
        .map(|(ci, (b, d))| (ci, b, d))
        .collect();

    let per_chunk: Vec<Result<(f64, LabelDiffusionModel<T>)>> = chunks
        .par_iter()
        .map(|(ci, exs, ds)| {
            let mut grads = model.zeros_like();
            let mut loss_sum = 0.0;
            for (j, (ex, draw)) in exs.iter().zip(ds.iter()).enumerate() {
                let loss =
                    accumulate_sample(model, schedule, ex, draw, batch.len(), &mut grads)?;
                if !loss.is_finite() {
                    return Err(Error::Numeric(format!(
                        "non-finite loss at batch sample {}",
                        ci * GRAD_CHUNK + j
                    )));
                }
                loss_sum += loss;
            }
            Ok((loss_sum, grads))
        })
        .collect();

    let mut total_loss = 0.0;
    let mut acc: Option<LabelDiffusionModel<T>> = None;
    for r in per_chunk {
        let (loss, grads) = r?;
        total_loss += loss;
        match &mut acc {
            None => acc = Some(grads),
            Some(a) => {
                let mut gs = Vec::new();
                grads.visit_all(&mut |_, t| gs.push(t));
                let mut idx = 0;
                a.visit_mut_all(&mut |_, t| {
                    let src = gs[idx];
                    for (x, &y) in t.data_mut().iter_mut().zip(src.data()) {
                        *x = *x + y;
                    }
                    idx += 1;
                });
            }
        }
    }
    Ok((total_loss / batch.len() as f64, acc.expect("nonempty batch")))
}

/// Loss only (no gradients); used by finite-difference verification.
pub fn denoising_loss_value<T: Scalar>(
    model: &LabelDiffusionModel<T>,
    schedule: &NoiseSchedule<T>,
    batch: &[TrainExample<T>],
    draws: &[SampleDraw<T>],
) -> Result<f64> {
    let mut total = 0.0;
    for (ex, draw) in batch.iter().zip(draws) {
        total += sample_loss_value(model, schedule, ex, draw)?;
    }
    Ok(total / batch.len() as f64)
}

/// Outcome of one optimization step.
#[derive(Debug, Clone, Copy)]
pub struct StepReport {
    pub step: u64,
    pub loss: f64,
}

/// One training step: sample timesteps/noise/dropout, compute gradients,
/// apply the Adam update. On a numeric error the state is left unchanged.
pub fn train_step<T: Scalar>(
    state: &mut TrainState<T>,
    batch: &[TrainExample<T>],
) -> Result<StepReport> {
    let draws = draw_batch_randomness(
        batch,
        state.config.total_steps,
        state.config.p_drop,
        &mut state.rng,
    );
    let (loss, grads) = denoising_loss(&state.model, &state.schedule, batch, &draws)?;

    let mut finite = true;
    grads.visit_all(&mut |_, t| finite &= t.all_finite());
    if !finite {
        return Err(Error::Numeric("non-finite gradient; state unchanged".into()));
    }

    state.step += 1;
    let step = state.step;
    let cfg = &state.config;

    let mut gs = Vec::new();
    grads.visit_all(&mut |n, t| gs.push((n, t)));
    let mut ms = Vec::new();
    state.moment1.visit_mut_all(&mut |n, t| ms.push((n, t)));
    let mut vs = Vec::new();
    state.moment2.visit_mut_all(&mut |n, t| vs.push((n, t)));

    let mut idx = 0usize;
    let mut update_err = None;
    state.model.visit_mut_all(&mut |name, param| {
        debug_assert_eq!(name, gs[idx].0);
        if ParamGroup::of(&name).trainable() {
            adam_update_tensor(
                param,
                gs[idx].1,
                ms[idx].1,
                vs[idx].1,
                cfg.learning_rate,
                cfg.adam_beta1,
                cfg.adam_beta2,
                cfg.adam_eps,
                step,
            );
            if !param.all_finite() && update_err.is_none() {
                update_err = Some(name.clone());
            }
        }
        idx += 1;
    });
    if let Some(name) = update_err {
        return Err(Error::Numeric(format!(
            "parameter {name} became non-finite after update"
        )));
    }
    Ok(StepReport { step, loss })
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"LBLDIFF\0";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorHeader {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    model_config: ModelConfig,
    train_config: TrainConfig,
    step: u64,
    rng: RngState,
    dtype: String,
    vocab: Vec<String>,
    has_label_decoder: bool,
    tensors: Vec<TensorHeader>,
}

/// Serialize the full training state. Values are widened to f64 so both
/// scalar types round-trip bit-exactly.
pub fn save_checkpoint<T: Scalar>(
    state: &TrainState<T>,
    vocab: &PhraseVocabulary,
    path: &Path,
) -> Result<()> {
    let mut tensors: Vec<TensorHeader> = Vec::new();
    let mut blobs: Vec<&crate::nn::Tensor<T>> = Vec::new();
    state.model.visit_all(&mut |n, t| {
        tensors.push(TensorHeader {
            name: n,
            shape: t.shape().to_vec(),
        });
        blobs.push(t);
    });
    state.moment1.visit_all(&mut |n, t| {
        tensors.push(TensorHeader {
            name: format!("adam_m.{n}"),
            shape: t.shape().to_vec(),
        });
        blobs.push(t);
    });
    state.moment2.visit_all(&mut |n, t| {
        tensors.push(TensorHeader {
            name: format!("adam_v.{n}"),
            shape: t.shape().to_vec(),
        });
        blobs.push(t);
    });

    let header = CheckpointHeader {
        model_config: state.model.config.clone(),
        train_config: state.config.clone(),
        step: state.step,
        rng: RngState::capture(&state.rng),
        dtype: if std::mem::size_of::<T>() == 4 { "f32" } else { "f64" }.into(),
        vocab: (0..vocab.len()).map(|i| vocab.token(i).to_string()).collect(),
        has_label_decoder: state.model.label_decoder.is_some(),
        tensors,
    };
    let header_json = serde_json::to_vec(&header)
        .map_err(|e| Error::Checkpoint(format!("header encode: {e}")))?;

    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(CHECKPOINT_MAGIC)?;
    f.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    f.write_all(&(header_json.len() as u64).to_le_bytes())?;
    f.write_all(&header_json)?;
    for t in blobs {
        for v in t.data() {
            f.write_all(&v.to_f64_c().to_le_bytes())?;
        }
    }
    f.flush()?;
    Ok(())
}

/// Restore a training state; every tensor is validated against the stored
/// config before use.
pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<(TrainState<T>, PhraseVocabulary)> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic)
        .map_err(|_| Error::Checkpoint("truncated file: missing magic".into()))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic: not a checkpoint file".into()));
    }
    let mut vbuf = [0u8; 4];
    f.read_exact(&mut vbuf)
        .map_err(|_| Error::Checkpoint("truncated file: missing version".into()))?;
    let version = u32::from_le_bytes(vbuf);
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "version mismatch: file has {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let mut lbuf = [0u8; 8];
    f.read_exact(&mut lbuf)
        .map_err(|_| Error::Checkpoint("truncated file: missing header length".into()))?;
    let hlen = u64::from_le_bytes(lbuf) as usize;
    let mut hbuf = vec![0u8; hlen];
    f.read_exact(&mut hbuf)
        .map_err(|_| Error::Checkpoint("truncated file: incomplete header".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(&hbuf)
        .map_err(|e| Error::Checkpoint(format!("header decode: {e}")))?;

    let mut model = LabelDiffusionModel::<T>::new(header.model_config.clone(), 0)?;
    if header.has_label_decoder {
        model.label_decoder = Some(crate::codec::LabelDecoder::init(0));
    }
    let mut state = TrainState::new(model, header.train_config.clone())?;
    state.step = header.step;
    state.rng = header.rng.restore();

    // expected order: model params, then both moment sets, same visitation
    let mut expected: Vec<(String, Vec<usize>)> = Vec::new();
    state
        .model
        .visit_all(&mut |n, t| expected.push((n, t.shape().to_vec())));
    state
        .moment1
        .visit_all(&mut |n, t| expected.push((format!("adam_m.{n}"), t.shape().to_vec())));
    state
        .moment2
        .visit_all(&mut |n, t| expected.push((format!("adam_v.{n}"), t.shape().to_vec())));
    if expected.len() != header.tensors.len() {
        return Err(Error::Checkpoint(format!(
            "tensor count mismatch: file has {}, config wants {}",
            header.tensors.len(),
            expected.len()
        )));
    }
    for (e, h) in expected.iter().zip(&header.tensors) {
        if e.0 != h.name {
            return Err(Error::Checkpoint(format!(
                "unexpected tensor {} (expected {})",
                h.name, e.0
            )));
        }
        if e.1 != h.shape {
            return Err(Error::Checkpoint(format!(
                "shape mismatch for {}: file {:?}, config {:?}",
                h.name, h.shape, e.1
            )));
        }
    }

    let mut read_into = |name: &str, t: &mut crate::nn::Tensor<T>| -> Result<()> {
        let mut buf = vec![0u8; t.len() * 8];
        f.read_exact(&mut buf)
            .map_err(|_| Error::Checkpoint(format!("truncated file: tensor {name}")))?;
        for (i, v) in t.data_mut().iter_mut().enumerate() {
            let bits = u64::from_le_bytes(buf[i * 8..(i + 1) * 8].try_into().unwrap());
            *v = T::from_f64_c(f64::from_bits(bits));
        }
        Ok(())
    };
    let mut err: Option<Error> = None;
    state.model.visit_mut_all(&mut |n, t| {
        if err.is_none() {
            if let Err(e) = read_into(&n, t) {
                err = Some(e);
            }
        }
    });
    state.moment1.visit_mut_all(&mut |n, t| {
        if err.is_none() {
            if let Err(e) = read_into(&format!("adam_m.{n}"), t) {
                err = Some(e);
            }
        }
    });
    state.moment2.visit_mut_all(&mut |n, t| {
        if err.is_none() {
            if let Err(e) = read_into(&format!("adam_v.{n}"), t) {
                err = Some(e);
            }
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    if !state.model.all_finite() {
        return Err(Error::Model("checkpoint contains non-finite parameters".into()));
    }
    Ok((state, PhraseVocabulary::new(header.vocab)))
}
