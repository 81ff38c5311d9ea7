//! Timing probe for the training hot path (ignored by default; run with
//! `cargo test --test perf_probe -- --ignored --nocapture`).

use labeldiff_core::data::{generate_scene, grammar_vocabulary, SceneSpec};
use labeldiff_core::codec::{encode_label, rgb_to_grid};
use labeldiff_core::model::{LabelDiffusionModel, ModelConfig};
use labeldiff_core::training::{
    denoising_loss, draw_batch_randomness, TrainConfig, TrainExample, TrainState,
};
use std::time::Instant;

#[test]
#[ignore]
fn profile_train_step_parts() {
    let vocab = grammar_vocabulary();
    let model = LabelDiffusionModel::<f32>::new(ModelConfig::toy(vocab.len()), 1).unwrap();
    let mut state = TrainState::new(model, TrainConfig::default()).unwrap();
    let spec = SceneSpec::default();
    let mut examples = Vec::new();
    for i in 0..16u64 {
        let scene = generate_scene(i, &spec).unwrap();
        let image = rgb_to_grid::<f32>(&scene.image);
        let latent = state.model.image_encoder.encode(&image).unwrap();
        examples.push(TrainExample {
            x0: encode_label(&scene.phrases[0].mask).unwrap(),
            image_latent: latent,
            tokens: vocab.encode(&scene.phrases[0].text).unwrap(),
        });
    }
    let draws = draw_batch_randomness(&examples, 1000, 0.1, &mut state.rng);

    // forward only
    let t0 = Instant::now();
    let mut iters = 0;
    while t0.elapsed().as_millis() < 1000 {
        for (ex, draw) in examples.iter().zip(&draws) {
            let cond = state.model.phrase_conditioning(&ex.tokens).unwrap();
            let xt = labeldiff_core::diffusion::forward_noise(&ex.x0, draw.t, &draw.eps, &state.schedule).unwrap();
            let _ = state.model.denoiser.forward(&xt, &ex.image_latent, draw.t, &cond).unwrap();
            iters += 1;
        }
    }
    println!("forward only: {:.2} ms/call", t0.elapsed().as_millis() as f64 / iters as f64);

    // zeros_like cost
    let t0 = Instant::now();
    let mut n = 0;
    while t0.elapsed().as_millis() < 500 {
        let g = state.model.zeros_like();
        std::hint::black_box(&g);
        n += 1;
    }
    println!("zeros_like: {:.2} ms/call", t0.elapsed().as_millis() as f64 / n as f64);

    // full loss+grads over the 16-sample batch
    let t0 = Instant::now();
    let mut n = 0;
    while t0.elapsed().as_millis() < 3000 {
        let _ = denoising_loss(&state.model, &state.schedule, &examples, &draws).unwrap();
        n += 1;
    }
    println!("loss+grads batch16: {:.1} ms/step", t0.elapsed().as_millis() as f64 / n as f64);
}

#[test]
#[ignore]
fn profile_forward_vs_backward() {
    let vocab = grammar_vocabulary();
    let model = LabelDiffusionModel::<f32>::new(ModelConfig::toy(vocab.len()), 1).unwrap();
    let mut state = TrainState::new(model, TrainConfig::default()).unwrap();
    let spec = SceneSpec::default();
    let scene = generate_scene(3, &spec).unwrap();
    let image = rgb_to_grid::<f32>(&scene.image);
    let latent = state.model.image_encoder.encode(&image).unwrap();
    let ex = TrainExample {
        x0: encode_label(&scene.phrases[0].mask).unwrap(),
        image_latent: latent,
        tokens: vocab.encode(&scene.phrases[0].text).unwrap(),
    };
    let draws = draw_batch_randomness(&[ex.clone()], 1000, 0.0, &mut state.rng);
    let cond = state.model.phrase_conditioning(&ex.tokens).unwrap();
    let xt = labeldiff_core::diffusion::forward_noise(&ex.x0, draws[0].t, &draws[0].eps, &state.schedule).unwrap();

    let t0 = Instant::now();
    let mut n = 0;
    while t0.elapsed().as_millis() < 2000 {
        let (_, tape) = state.model.denoiser.forward_cached(&xt, &ex.image_latent, draws[0].t, &cond).unwrap();
        std::hint::black_box(&tape);
        n += 1;
    }
    println!("forward_cached: {:.2} ms", t0.elapsed().as_millis() as f64 / n as f64);

    let (pred, tape) = state.model.denoiser.forward_cached(&xt, &ex.image_latent, draws[0].t, &cond).unwrap();
    let d = pred.map(|v| v * 1e-3);
    let mut grads = state.model.zeros_like();
    let t0 = Instant::now();
    let mut n = 0;
    while t0.elapsed().as_millis() < 2000 {
        let cg = state.model.denoiser.backward(&tape, &cond, &d, &mut grads.denoiser);
        std::hint::black_box(&cg);
        n += 1;
    }
    println!("backward: {:.2} ms", t0.elapsed().as_millis() as f64 / n as f64);
}
