//! End-to-end mask generation: from Gaussian noise, run guided reverse
//! diffusion conditioned on the image latent and phrase, then decode the
//! final clean-latent estimate to a binary mask.

use crate::codec::{decode_label, BinaryMask, DecodeStrategy, LATENT_FACTOR};
use crate::data::ManifestIndex;
use crate::diffusion::{
    cfg_combine, ddim_step, ddim_timesteps, ddpm_step, GuidanceConfig, NoiseSchedule, SamplerKind,
};
use crate::eval::EvalRecord;
use crate::model::LabelDiffusionModel;
use crate::rng::{derive_seed, rng_from_seed};
use crate::text::PhraseVocabulary;
use crate::{fl, Error, LatentGrid, Result, Scalar};
use rayon::prelude::*;

/// One mask-generation request.
#[derive(Debug, Clone)]
pub struct SampleRequest<T> {
    /// H×W×3 image in [0,1]; dimensions must divide by 8.
    pub image: LatentGrid<T>,
    pub phrase: String,
    pub guidance: GuidanceConfig,
    pub decode: DecodeStrategy,
    pub seed: u64,
}

/// Per-request instrumentation.
#[derive(Debug, Clone, Copy, Default)]
pub struct SampleStats {
    /// Number of denoiser forward passes.
    pub denoiser_calls: usize,
    /// Max |eps_guided − eps_cond| over all steps; only populated when both
    /// branches were evaluated.
    pub max_guided_cond_gap: f64,
}

/// Denoiser invocations for one request: two per step under guidance, one
/// per step when guidance is disabled (w = 1).
pub fn count_denoiser_calls(config: &GuidanceConfig, total_steps: usize) -> usize {
    let steps = match config.sampler_kind {
        SamplerKind::Ddim => config.ddim_steps,
        SamplerKind::Ddpm => total_steps,
    };
    if config.guidance_disabled() {
        steps
    } else {
        2 * steps
    }
}

/// Shared read-only sampling context.
pub struct Sampler<'a, T> {
    model: &'a LabelDiffusionModel<T>,
    vocab: &'a PhraseVocabulary,
    schedule: &'a NoiseSchedule<T>,
}

impl<'a, T: Scalar> Sampler<'a, T> {
    /// Validates parameters once; sampling then shares them read-only.
    pub fn new(
        model: &'a LabelDiffusionModel<T>,
        vocab: &'a PhraseVocabulary,
        schedule: &'a NoiseSchedule<T>,
    ) -> Result<Self> {
        if !model.all_finite() {
            return Err(Error::Model("model parameters are not finite".into()));
        }
        Ok(Self {
            model,
            vocab,
            schedule,
        })
    }

    pub fn sample_mask(&self, req: &SampleRequest<T>) -> Result<BinaryMask> {
        Ok(self.sample_mask_with_stats(req, false)?.0)
    }

    /// Generate a mask; with `force_both_branches` the unconditional pass is
    /// evaluated even at w = 1 so instrumentation can compare branches.
    pub fn sample_mask_with_stats(
        &self,
        req: &SampleRequest<T>,
        force_both_branches: bool,
    ) -> Result<(BinaryMask, SampleStats)> {
        let (h, w, _) = req.image.shape();
        if h % LATENT_FACTOR != 0 || w % LATENT_FACTOR != 0 {
            return Err(Error::shape(format!(
                "image dims {h}x{w} not divisible by {LATENT_FACTOR}"
            )));
        }
        let image_latent = self.model.image_encoder.encode(&req.image)?;
        let cond = self
            .model
            .phrase_conditioning(&self.vocab.encode(&req.phrase)?)?;
        let null = self.model.null_conditioning();
        let mut rng = rng_from_seed(req.seed);
        let (lh, lw) = (h / LATENT_FACTOR, w / LATENT_FACTOR);
        let mut x = LatentGrid::<T>::randn(lh, lw, 1, &mut rng);
        let mut stats = SampleStats::default();
        let wscale = fl::<T>(req.guidance.scale);
        let use_uncond = !req.guidance.guidance_disabled() || force_both_branches;

        let guided_eps = |x: &LatentGrid<T>, t: usize, stats: &mut SampleStats| -> Result<LatentGrid<T>> {
            let eps_cond = self.model.denoiser.forward(x, &image_latent, t, &cond)?;
            stats.denoiser_calls += 1;
            if !use_uncond {
                return Ok(eps_cond);
            }
            let eps_uncond = self.model.denoiser.forward(x, &image_latent, t, &null)?;
            stats.denoiser_calls += 1;
            let guided = cfg_combine(&eps_uncond, &eps_cond, wscale)?;
            let gap = guided.max_abs_diff(&eps_cond)?.to_f64_c();
            stats.max_guided_cond_gap = stats.max_guided_cond_gap.max(gap);
            Ok(guided)
        };

        match req.guidance.sampler_kind {
            SamplerKind::Ddim => {
                let ts = ddim_timesteps(self.schedule.total_steps(), req.guidance.ddim_steps)?;
                for (k, &t) in ts.iter().enumerate() {
                    let eps = guided_eps(&x, t, &mut stats)?;
                    let t_prev = ts.get(k + 1).copied();
                    x = ddim_step(&x, t, t_prev, &eps, self.schedule)?;
                }
            }
            SamplerKind::Ddpm => {
                for t in (0..self.schedule.total_steps()).rev() {
                    let eps = guided_eps(&x, t, &mut stats)?;
                    let noise = if t > 0 {
                        LatentGrid::randn(lh, lw, 1, &mut rng)
                    } else {
                        LatentGrid::zeros(lh, lw, 1)
                    };
                    x = ddpm_step(&x, t, &eps, self.schedule, &noise)?;
                }
            }
        }

        if !x.all_finite() {
            return Err(Error::Model("sampling produced non-finite latents".into()));
        }
        let mask = decode_label(&x, h, w, &req.decode, self.model.label_decoder.as_ref())?;
        Ok((mask, stats))
    }

    /// Batch generation; results equal per-request [`Self::sample_mask`] with
    /// the same seeds. Image sizes must be homogeneous.
    pub fn sample_batch(&self, requests: &[SampleRequest<T>]) -> Result<Vec<BinaryMask>> {
        if requests.is_empty() {
            return Ok(Vec::new());
        }
        let first = (requests[0].image.height(), requests[0].image.width());
        for (i, r) in requests.iter().enumerate() {
            if (r.image.height(), r.image.width()) != first {
                return Err(Error::Batch(format!(
                    "request {i} has size {}x{}, batch is {}x{}",
                    r.image.height(),
                    r.image.width(),
                    first.0,
                    first.1
                )));
            }
        }
        requests.par_iter().map(|r| self.sample_mask(r)).collect()
    }

    /// Sample every phrase of the listed scenes and score it against the
    /// ground truth. Per-phrase seeds derive from `seed` and the phrase's
    /// stable position, so results are order- and thread-independent.
    pub fn evaluate_scenes(
        &self,
        index: &ManifestIndex,
        scene_indices: &[usize],
        guidance: GuidanceConfig,
        decode: DecodeStrategy,
        seed: u64,
    ) -> Result<Vec<EvalRecord>> {
        struct Item<T> {
            phrase_id: String,
            request: SampleRequest<T>,
            truth: BinaryMask,
            thing_stuff: crate::eval::ThingStuff,
            number: crate::eval::Number,
        }
        let mut items: Vec<Item<T>> = Vec::new();
        for &si in scene_indices {
            let scene = index.load_scene(si)?;
            let image = crate::codec::rgb_to_grid::<T>(&scene.image);
            for (k, phrase) in scene.phrases.iter().enumerate() {
                items.push(Item {
                    phrase_id: format!("{}_{k}", index.entries[si].id),
                    request: SampleRequest {
                        image: image.clone(),
                        phrase: phrase.text.clone(),
                        guidance,
                        decode,
                        seed: derive_seed(seed, (si as u64) << 8 | k as u64),
                    },
                    truth: phrase.mask.clone(),
                    thing_stuff: phrase.thing_stuff,
                    number: phrase.number,
                });
            }
        }
        items
            .par_iter()
            .map(|item| {
                let mask = self.sample_mask(&item.request)?;
                Ok(EvalRecord {
                    phrase_id: item.phrase_id.clone(),
                    iou: crate::eval::iou(&mask, &item.truth)?,
                    thing_stuff: item.thing_stuff,
                    number: item.number,
                })
            })
            .collect()
    }
}
