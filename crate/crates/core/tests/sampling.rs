//! Sampler behavior: guidance identities, seeded determinism, batch
//! equivalence and the denoiser call-count law.

use labeldiff_core::codec::DecodeStrategy;
use labeldiff_core::data::grammar_vocabulary;
use labeldiff_core::diffusion::{make_linear_schedule, GuidanceConfig, SamplerKind};
use labeldiff_core::model::{LabelDiffusionModel, ModelConfig};
use labeldiff_core::rng::rng_from_seed;
use labeldiff_core::sampler::{count_denoiser_calls, SampleRequest, Sampler};
use labeldiff_core::{Error, LatentGrid};
use rand::Rng;

fn fixture() -> (
    LabelDiffusionModel<f64>,
    labeldiff_core::text::PhraseVocabulary,
    labeldiff_core::diffusion::NoiseSchedule<f64>,
) {
    let vocab = grammar_vocabulary();
    let mut model = LabelDiffusionModel::<f64>::new(ModelConfig::tiny(vocab.len()), 77).unwrap();
    // activate all conditioning paths; sampling behavior must not depend on
    // training quality
    model.randomize_parameters(0.05, 123);
    let schedule = make_linear_schedule(100, 1e-4, 0.02).unwrap();
    (model, vocab, schedule)
}

fn random_image(seed: u64, size: usize) -> LatentGrid<f64> {
    let mut rng = rng_from_seed(seed);
    LatentGrid::from_fn(size, size, 3, |_, _, _| rng.gen::<f64>())
}

fn request(seed: u64, guidance: GuidanceConfig) -> SampleRequest<f64> {
    SampleRequest {
        image: random_image(500 + seed, 32),
        phrase: "red circle".into(),
        guidance,
        decode: DecodeStrategy::default(),
        seed,
    }
}

#[test]
fn guided_equals_conditional_at_unit_scale() {
    let (model, vocab, schedule) = fixture();
    let sampler = Sampler::new(&model, &vocab, &schedule).unwrap();
    let req = request(
        3,
        GuidanceConfig {
            scale: 1.0,
            sampler_kind: SamplerKind::Ddim,
            ddim_steps: 10,
        },
    );
    // force both branches so the combination is actually instrumented
    let (_, stats) = sampler.sample_mask_with_stats(&req, true).unwrap();
    assert_eq!(stats.denoiser_calls, 20);
    assert!(
        stats.max_guided_cond_gap <= 1e-12,
        "gap {}",
        stats.max_guided_cond_gap
    );
}

#[test]
fn fixed_seed_reproduces_identical_masks() {
    let (model, vocab, schedule) = fixture();
    let sampler = Sampler::new(&model, &vocab, &schedule).unwrap();
    let req = request(9, GuidanceConfig { ddim_steps: 12, ..GuidanceConfig::default() });
    let a = sampler.sample_mask(&req).unwrap();
    let b = sampler.sample_mask(&req).unwrap();
    assert_eq!(a, b);
}

#[test]
fn batch_matches_sequential_calls() {
    let (model, vocab, schedule) = fixture();
    let sampler = Sampler::new(&model, &vocab, &schedule).unwrap();
    let guidance = GuidanceConfig { ddim_steps: 6, ..GuidanceConfig::default() };
    let requests: Vec<_> = (0..16).map(|i| request(i, guidance)).collect();
    let batch = sampler.sample_batch(&requests).unwrap();
    assert_eq!(batch.len(), 16);
    for (i, r) in requests.iter().enumerate() {
        let single = sampler.sample_mask(r).unwrap();
        assert_eq!(batch[i], single, "request {i}");
    }
}

#[test]
fn batch_of_one_and_empty_batch() {
    let (model, vocab, schedule) = fixture();
    let sampler = Sampler::new(&model, &vocab, &schedule).unwrap();
    let guidance = GuidanceConfig { ddim_steps: 5, ..GuidanceConfig::default() };
    let req = request(4, guidance);
    let batch = sampler.sample_batch(std::slice::from_ref(&req)).unwrap();
    assert_eq!(batch[0], sampler.sample_mask(&req).unwrap());
    assert!(sampler.sample_batch(&[]).unwrap().is_empty());
}

#[test]
fn mixed_sizes_rejected() {
    let (model, vocab, schedule) = fixture();
    let sampler = Sampler::new(&model, &vocab, &schedule).unwrap();
    let guidance = GuidanceConfig { ddim_steps: 5, ..GuidanceConfig::default() };
    let mut reqs = vec![request(1, guidance), request(2, guidance)];
    reqs[1].image = random_image(1000, 64);
    assert!(matches!(
        sampler.sample_batch(&reqs),
        Err(Error::Batch(_))
    ));
}

#[test]
fn call_count_law() {
    let guided = |steps| GuidanceConfig {
        scale: 7.5,
        sampler_kind: SamplerKind::Ddim,
        ddim_steps: steps,
    };
    assert_eq!(count_denoiser_calls(&guided(50), 1000), 100);
    assert_eq!(count_denoiser_calls(&guided(30), 1000), 60);
    let off = GuidanceConfig {
        scale: 1.0,
        sampler_kind: SamplerKind::Ddim,
        ddim_steps: 20,
    };
    assert_eq!(count_denoiser_calls(&off, 1000), 20);
    let ddpm = GuidanceConfig {
        scale: 7.5,
        sampler_kind: SamplerKind::Ddpm,
        ddim_steps: 50,
    };
    assert_eq!(count_denoiser_calls(&ddpm, 100), 200);

    // instrumented counts match the law
    let (model, vocab, schedule) = fixture();
    let sampler = Sampler::new(&model, &vocab, &schedule).unwrap();
    let (_, stats) = sampler
        .sample_mask_with_stats(&request(5, guided(13)), false)
        .unwrap();
    assert_eq!(stats.denoiser_calls, count_denoiser_calls(&guided(13), 100));
    let (_, stats) = sampler
        .sample_mask_with_stats(&request(5, off), false)
        .unwrap();
    assert_eq!(stats.denoiser_calls, 20);
}

#[test]
fn ddpm_sampler_runs_full_chain() {
    let (model, vocab, schedule) = fixture();
    let sampler = Sampler::new(&model, &vocab, &schedule).unwrap();
    let req = request(
        6,
        GuidanceConfig {
            scale: 7.5,
            sampler_kind: SamplerKind::Ddpm,
            ddim_steps: 50,
        },
    );
    let (mask, stats) = sampler.sample_mask_with_stats(&req, false).unwrap();
    assert_eq!(stats.denoiser_calls, 200);
    assert_eq!(mask.shape(), (32, 32));
    // seeded determinism holds for the stochastic sampler too
    let (mask2, _) = sampler.sample_mask_with_stats(&req, false).unwrap();
    assert_eq!(mask, mask2);
}

#[test]
fn non_finite_parameters_rejected_at_construction() {
    let (mut model, vocab, schedule) = fixture();
    model.visit_mut_all(&mut |name, t| {
        if name == "denoiser.stem.w" {
            t.data_mut()[0] = f64::NAN;
        }
    });
    assert!(matches!(
        Sampler::new(&model, &vocab, &schedule),
        Err(Error::Model(_))
    ));
}

#[test]
fn indivisible_image_dims_rejected() {
    let (model, vocab, schedule) = fixture();
    let sampler = Sampler::new(&model, &vocab, &schedule).unwrap();
    let mut req = request(7, GuidanceConfig { ddim_steps: 5, ..GuidanceConfig::default() });
    req.image = LatentGrid::from_fn(30, 30, 3, |_, _, _| 0.5);
    assert!(matches!(sampler.sample_mask(&req), Err(Error::Shape(_))));
}
