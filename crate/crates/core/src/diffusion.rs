//! Noise schedules, forward noising, reverse DDPM/DDIM updates and
//! classifier-free-guidance combination.
//!
//! Everything here is a pure function of its inputs; schedules are immutable
//! after construction and safe to share across sampling workers. Timesteps
//! are indexed `0..T-1` and a sampling trajectory visits `T-1` down to `0`.

use crate::{fl, Error, LatentGrid, Result, Scalar};
use serde::{Deserialize, Serialize};

/// Per-timestep β, α = 1−β and ᾱ = Π α tables.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule<T> {
    betas: Vec<T>,
    alphas: Vec<T>,
    alpha_bars: Vec<T>,
}

impl<T: Scalar> NoiseSchedule<T> {
    /// Build the tables from explicit per-step betas.
    pub fn from_betas(betas: Vec<T>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::parameter("schedule needs at least one step"));
        }
        for (t, &b) in betas.iter().enumerate() {
            if !(b > T::zero() && b < T::one()) {
                return Err(Error::parameter(format!(
                    "beta[{t}] = {b} outside (0,1)"
                )));
            }
        }
        let alphas: Vec<T> = betas.iter().map(|&b| T::one() - b).collect();
        let mut alpha_bars = Vec::with_capacity(betas.len());
        let mut prod = T::one();
        for &a in &alphas {
            prod = prod * a;
            alpha_bars.push(prod);
        }
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
        })
    }

    /// Number of diffusion steps T.
    pub fn total_steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, t: usize) -> T {
        self.betas[t]
    }

    pub fn alpha(&self, t: usize) -> T {
        self.alphas[t]
    }

    pub fn alpha_bar(&self, t: usize) -> T {
        self.alpha_bars[t]
    }

    pub fn betas(&self) -> &[T] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[T] {
        &self.alpha_bars
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t < self.total_steps() {
            Ok(())
        } else {
            Err(Error::parameter(format!(
                "timestep {t} out of range 0..{}",
                self.total_steps()
            )))
        }
    }
}

/// Linear β interpolation from `beta_start` to `beta_end` over `0..T-1`.
pub fn make_linear_schedule<T: Scalar>(
    total_steps: usize,
    beta_start: f64,
    beta_end: f64,
) -> Result<NoiseSchedule<T>> {
    if total_steps == 0 {
        return Err(Error::parameter("total_steps must be >= 1"));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::parameter(format!(
            "need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )));
    }
    let betas = if total_steps == 1 {
        vec![fl::<T>(beta_start)]
    } else {
        (0..total_steps)
            .map(|i| {
                let frac = i as f64 / (total_steps - 1) as f64;
                fl::<T>(beta_start + (beta_end - beta_start) * frac)
            })
            .collect()
    };
    NoiseSchedule::from_betas(betas)
}

/// Which reverse-process stepper drives sampling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SamplerKind {
    /// Stochastic ancestral updates over the full chain.
    Ddpm,
    /// Deterministic strided updates (η = 0).
    Ddim,
}

/// Guidance scale and sampler selection for inference.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    /// CFG scale w; w = 1 disables the unconditional pass.
    pub scale: f64,
    pub sampler_kind: SamplerKind,
    /// Number of strided timesteps when `sampler_kind` is DDIM.
    pub ddim_steps: usize,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            scale: 7.5,
            sampler_kind: SamplerKind::Ddim,
            ddim_steps: 50,
        }
    }
}

impl GuidanceConfig {
    /// True when the unconditional branch is skipped (w = 1).
    pub fn guidance_disabled(&self) -> bool {
        self.scale == 1.0
    }
}

/// Strictly decreasing timestep subsequence from `T-1` to `0`.
///
/// `steps == 1` degenerates to `[T-1]`; `steps == T` visits every timestep.
pub fn ddim_timesteps(total_steps: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > total_steps {
        return Err(Error::parameter(format!(
            "ddim steps {steps} must lie in 1..={total_steps}"
        )));
    }
    if steps == 1 {
        return Ok(vec![total_steps - 1]);
    }
    let mut ts = Vec::with_capacity(steps);
    for k in 0..steps {
        let frac = k as f64 / (steps - 1) as f64;
        ts.push(((total_steps - 1) as f64 * (1.0 - frac)).round() as usize);
    }
    Ok(ts)
}

/// Forward noising: `√ᾱ_t·x0 + √(1−ᾱ_t)·eps`.
pub fn forward_noise<T: Scalar>(
    x0: &LatentGrid<T>,
    t: usize,
    eps: &LatentGrid<T>,
    sched: &NoiseSchedule<T>,
) -> Result<LatentGrid<T>> {
    sched.check_t(t)?;
    let ab = sched.alpha_bar(t);
    let sa = ab.sqrt();
    let sb = (T::one() - ab).sqrt();
    x0.zip_map(eps, |x, e| sa * x + sb * e)
}

/// Invert the forward process: `(xt − √(1−ᾱ_t)·eps) / √ᾱ_t`.
pub fn recover_x0<T: Scalar>(
    xt: &LatentGrid<T>,
    t: usize,
    eps: &LatentGrid<T>,
    sched: &NoiseSchedule<T>,
) -> Result<LatentGrid<T>> {
    sched.check_t(t)?;
    let ab = sched.alpha_bar(t);
    let sa = ab.sqrt();
    let sb = (T::one() - ab).sqrt();
    xt.zip_map(eps, |x, e| (x - sb * e) / sa)
}

/// Classifier-free guidance: `eps_uncond + w·(eps_cond − eps_uncond)`.
///
/// At `w = 1` the conditional prediction is returned exactly (the algebraic
/// identity, kept free of rounding).
pub fn cfg_combine<T: Scalar>(
    eps_uncond: &LatentGrid<T>,
    eps_cond: &LatentGrid<T>,
    w: T,
) -> Result<LatentGrid<T>> {
    if !eps_uncond.same_shape(eps_cond) {
        return Err(Error::shape(format!(
            "cfg_combine: {:?} vs {:?}",
            eps_uncond.shape(),
            eps_cond.shape()
        )));
    }
    if w == T::one() {
        return Ok(eps_cond.clone());
    }
    eps_uncond.zip_map(eps_cond, |u, c| u + w * (c - u))
}

/// Ancestral DDPM update from `t` to `t-1`.
///
/// Mean is `(xt − (β_t/√(1−ᾱ_t))·eps) / √α_t`; for `t > 0` adds `σ_t·noise`
/// with `σ_t² = β_t·(1−ᾱ_{t-1})/(1−ᾱ_t)`. At `t = 0` the update is
/// deterministic and `noise` is ignored.
pub fn ddpm_step<T: Scalar>(
    xt: &LatentGrid<T>,
    t: usize,
    eps_guided: &LatentGrid<T>,
    sched: &NoiseSchedule<T>,
    noise: &LatentGrid<T>,
) -> Result<LatentGrid<T>> {
    sched.check_t(t)?;
    let ab = sched.alpha_bar(t);
    let beta = sched.beta(t);
    let inv_sqrt_alpha = T::one() / sched.alpha(t).sqrt();
    let eps_coef = beta / (T::one() - ab).sqrt();
    let mean = xt.zip_map(eps_guided, |x, e| inv_sqrt_alpha * (x - eps_coef * e))?;
    if t == 0 {
        return Ok(mean);
    }
    let ab_prev = sched.alpha_bar(t - 1);
    let sigma = (beta * (T::one() - ab_prev) / (T::one() - ab)).sqrt();
    mean.zip_map(noise, |m, n| m + sigma * n)
}

/// Deterministic DDIM update from `t` to `t_prev` (η = 0).
///
/// Recovers `x̂0` from the noise prediction, then re-noises to the earlier
/// timestep. `t_prev = None` designates the step past 0 (ᾱ = 1) and returns
/// `x̂0` itself.
pub fn ddim_step<T: Scalar>(
    xt: &LatentGrid<T>,
    t: usize,
    t_prev: Option<usize>,
    eps_guided: &LatentGrid<T>,
    sched: &NoiseSchedule<T>,
) -> Result<LatentGrid<T>> {
    sched.check_t(t)?;
    if let Some(tp) = t_prev {
        if tp >= t {
            return Err(Error::parameter(format!(
                "ddim_step requires t_prev < t, got {tp} >= {t}"
            )));
        }
    }
    let x0_hat = recover_x0(xt, t, eps_guided, sched)?;
    match t_prev {
        None => Ok(x0_hat),
        Some(tp) => {
            let ab = sched.alpha_bar(tp);
            let sa = ab.sqrt();
            let sb = (T::one() - ab).sqrt();
            x0_hat.zip_map(eps_guided, |x, e| sa * x + sb * e)
        }
    }
}
