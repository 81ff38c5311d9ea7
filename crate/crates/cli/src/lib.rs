//! Command implementations behind the `labeldiff` binary: dataset
//! generation, training, sampling, evaluation and the ablation harness.
//! Each command validates its inputs up front, runs the core pipeline and
//! writes CSV/PNG/SVG artifacts plus a resolved-config echo.

pub mod config;
pub mod plot;

use clap::{Args, Parser, Subcommand};
use config::{resolve, ConfigMap, ResolvedConfig};
use labeldiff_core::codec::{encode_label, rgb_to_grid, DecodeKind, DecodeStrategy};
use labeldiff_core::data::{
    generate_dataset, grammar_vocabulary, load_manifest_index, split_dataset, ManifestIndex,
    SceneSpec,
};
use labeldiff_core::diffusion::{GuidanceConfig, SamplerKind};
use labeldiff_core::eval::{subcategory_report, EvalRecord, Number, SubcategoryReport, ThingStuff, ThresholdGrid};
use labeldiff_core::model::ModelConfig;
use labeldiff_core::rng::derive_seed;
use labeldiff_core::sampler::{SampleRequest, Sampler};
use labeldiff_core::text::PhraseVocabulary;
use labeldiff_core::training::{
    load_checkpoint, save_checkpoint, train_step, TrainConfig, TrainExample, TrainState,
};
use labeldiff_core::{Error, Result};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

#[derive(Parser)]
#[command(name = "labeldiff", version, about = "Label-space diffusion for phrase-conditioned segmentation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Generate a synthetic shapes-and-phrases dataset.
    Gen(GenArgs),
    /// Train the conditional denoiser on a dataset's train split.
    Train(TrainArgs),
    /// Generate one mask for an image and a phrase.
    Sample(SampleArgs),
    /// Evaluate a checkpoint on the test split and report Average Recall.
    Eval(EvalArgs),
    /// Sweep image size, sampling steps or guidance scale.
    Ablate(AblateArgs),
}

#[derive(Args, Debug, Clone)]
pub struct GenArgs {
    /// Output dataset directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Number of scenes.
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Square image size (multiple of 8).
    #[arg(long)]
    pub image_size: Option<usize>,
    /// key=value config file; flags override file values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Worker threads (0 = all cores).
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Args, Debug, Clone)]
pub struct TrainArgs {
    /// Dataset directory from `gen`.
    #[arg(long)]
    pub dataset: PathBuf,
    /// Output directory (checkpoint.bin, loss.csv, vocab.txt).
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub p_drop: Option<f64>,
    #[arg(long)]
    pub total_steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub train_frac: Option<f64>,
    #[arg(long)]
    pub split_seed: Option<u64>,
    /// Loss CSV row interval in steps.
    #[arg(long)]
    pub log_every: Option<usize>,
    /// Resume from an existing checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Args, Debug, Clone)]
pub struct SampleArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// RGB PNG; dimensions must be multiples of 8.
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub phrase: String,
    /// Output mask PNG path.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub scale: Option<f64>,
    /// ddim | ddpm
    #[arg(long)]
    pub sampler: Option<String>,
    /// bilinear | nearest | learned
    #[arg(long)]
    pub decode: Option<String>,
    #[arg(long)]
    pub sample_seed: Option<u64>,
    /// Also write a side-car text record (seed, steps, scale, strategy).
    #[arg(long, default_value_t = false)]
    pub sidecar: bool,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Args, Debug, Clone)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    /// Output directory (per_phrase.csv, summary.csv).
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub train_frac: Option<f64>,
    #[arg(long)]
    pub split_seed: Option<u64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub scale: Option<f64>,
    #[arg(long)]
    pub sampler: Option<String>,
    #[arg(long)]
    pub decode: Option<String>,
    #[arg(long)]
    pub eval_seed: Option<u64>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Args, Debug, Clone)]
pub struct AblateArgs {
    /// image_size | ddim_steps | guidance_scale
    #[arg(long)]
    pub axis: String,
    /// Comma-separated axis values, e.g. "50,30,20".
    #[arg(long)]
    pub values: String,
    /// Dataset for the ddim_steps / guidance_scale axes (and source of the
    /// training budget when no checkpoint is given).
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Trained checkpoint to reuse for sampling-axis sweeps.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Scenes per generated dataset on the image_size axis.
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub train_frac: Option<f64>,
    #[arg(long)]
    pub split_seed: Option<u64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub scale: Option<f64>,
    #[arg(long)]
    pub eval_seed: Option<u64>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub threads: Option<usize>,
}

/// Process exit code classes: 1 usage, 2 data, 3 numeric.
pub fn exit_code_for(err: &Error) -> i32 {
    match err {
        Error::Parameter(_) | Error::Shape(_) | Error::Batch(_) => 1,
        Error::Numeric(_) | Error::Model(_) => 3,
        _ => 2,
    }
}

pub fn error_category(err: &Error) -> &'static str {
    match exit_code_for(err) {
        1 => "usage",
        3 => "numeric",
        _ => "data",
    }
}

/// Run a closure inside a rayon pool of the given size (0 = default pool).
pub fn with_threads<R: Send>(threads: usize, f: impl FnOnce() -> R + Send) -> R {
    if threads == 0 {
        f()
    } else {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .expect("thread pool")
            .install(f)
    }
}

pub fn run(command: &Command) -> Result<()> {
    match command {
        Command::Gen(a) => run_gen(a),
        Command::Train(a) => run_train(a),
        Command::Sample(a) => run_sample(a),
        Command::Eval(a) => run_eval(a),
        Command::Ablate(a) => run_ablate(a),
    }
}

fn load_config(path: &Option<PathBuf>, allowed: &[&str]) -> Result<ConfigMap> {
    let cfg = match path {
        Some(p) => ConfigMap::load(p)?,
        None => ConfigMap::default(),
    };
    cfg.reject_unknown(allowed)?;
    Ok(cfg)
}

pub fn run_gen(args: &GenArgs) -> Result<()> {
    let cfg = load_config(&args.config, &["count", "seed", "image_size", "threads"])?;
    let count = resolve(&args.count, &cfg, "count", 2200usize)?;
    let seed = resolve(&args.seed, &cfg, "seed", 0u64)?;
    let image_size = resolve(&args.image_size, &cfg, "image_size", 64usize)?;
    let threads = resolve(&args.threads, &cfg, "threads", 0usize)?;
    if count == 0 {
        return Err(Error::Parameter("count must be >= 1".into()));
    }

    let spec = SceneSpec {
        image_size,
        ..SceneSpec::default()
    };
    with_threads(threads, || -> Result<()> {
        std::fs::create_dir_all(&args.out).map_err(|e| {
            Error::Data(format!("cannot create output dir {}: {e}", args.out.display()))
        })?;
        generate_dataset(&args.out, count, seed, &spec)?;
        grammar_vocabulary().save(&args.out.join("vocab.txt"))?;
        Ok(())
    })?;

    let mut echo = ResolvedConfig::default();
    echo.put("command", "gen");
    echo.put("count", count);
    echo.put("seed", seed);
    echo.put("image_size", image_size);
    echo.put("out", args.out.display());
    echo.write(&args.out.join("run_config.txt"))?;
    println!("generated {count} scenes in {}", args.out.display());
    Ok(())
}

/// Flatten the train-split scenes into per-phrase training examples.
pub fn build_examples(
    index: &ManifestIndex,
    scene_indices: &[usize],
    model: &labeldiff_core::Model32,
    vocab: &PhraseVocabulary,
) -> Result<Vec<TrainExample<f32>>> {
    let mut out = Vec::new();
    for &si in scene_indices {
        let scene = index.load_scene(si)?;
        let image = rgb_to_grid::<f32>(&scene.image);
        let image_latent = model.image_encoder.encode(&image)?;
        for phrase in &scene.phrases {
            out.push(TrainExample {
                x0: encode_label(&phrase.mask)?,
                image_latent: image_latent.clone(),
                tokens: vocab.encode(&phrase.text)?,
            });
        }
    }
    if out.is_empty() {
        return Err(Error::Data("train split produced no examples".into()));
    }
    Ok(out)
}

/// Epoch loop over shuffled examples; logs `step,loss,wall_ms` rows.
pub fn train_loop(
    state: &mut TrainState<f32>,
    examples: &[TrainExample<f32>],
    epochs: usize,
    log_every: usize,
    mut log: Option<&mut dyn Write>,
) -> Result<f64> {
    let start = Instant::now();
    let batch = state.config.batch_size;
    let mut last_loss = f64::NAN;
    for _epoch in 0..epochs {
        let mut order: Vec<usize> = (0..examples.len()).collect();
        labeldiff_core::rng::shuffle(&mut order, &mut state.rng);
        for chunk in order.chunks(batch) {
            let batch_examples: Vec<TrainExample<f32>> =
                chunk.iter().map(|&i| examples[i].clone()).collect();
            let report = train_step(state, &batch_examples)?;
            last_loss = report.loss;
            if let Some(w) = log.as_deref_mut() {
                if report.step % log_every as u64 == 0 {
                    writeln!(
                        w,
                        "{},{:.6},{}",
                        report.step,
                        report.loss,
                        start.elapsed().as_millis()
                    )?;
                }
            }
        }
    }
    Ok(last_loss)
}

pub fn run_train(args: &TrainArgs) -> Result<()> {
    let cfg = load_config(
        &args.config,
        &[
            "epochs", "batch_size", "learning_rate", "p_drop", "total_steps", "seed",
            "train_frac", "split_seed", "log_every", "threads",
        ],
    )?;
    let epochs = resolve(&args.epochs, &cfg, "epochs", 20usize)?;
    let batch_size = resolve(&args.batch_size, &cfg, "batch_size", 16usize)?;
    let learning_rate = resolve(&args.learning_rate, &cfg, "learning_rate", 1e-4)?;
    let p_drop = resolve(&args.p_drop, &cfg, "p_drop", 0.1)?;
    let total_steps = resolve(&args.total_steps, &cfg, "total_steps", 1000usize)?;
    let seed = resolve(&args.seed, &cfg, "seed", 0u64)?;
    let train_frac = resolve(&args.train_frac, &cfg, "train_frac", 0.909)?;
    let split_seed = resolve(&args.split_seed, &cfg, "split_seed", 0u64)?;
    let log_every = resolve(&args.log_every, &cfg, "log_every", 10usize)?;
    let threads = resolve(&args.threads, &cfg, "threads", 0usize)?;

    let index = load_manifest_index(&args.dataset)?;
    let (train_idx, _) = split_dataset(index.len(), train_frac, split_seed)?;
    let vocab = grammar_vocabulary();

    let mut state = match &args.resume {
        Some(path) => {
            let (state, _) = load_checkpoint::<f32>(path)?;
            state
        }
        None => {
            let train_config = TrainConfig {
                learning_rate,
                batch_size,
                epochs,
                p_drop,
                total_steps,
                seed,
                ..TrainConfig::default()
            };
            let model = labeldiff_core::Model32::new(ModelConfig::toy(vocab.len()), seed)?;
            TrainState::new(model, train_config)?
        }
    };

    std::fs::create_dir_all(&args.out)?;
    let examples = with_threads(threads, || build_examples(&index, &train_idx, &state.model, &vocab))?;

    let loss_path = args.out.join("loss.csv");
    let fresh_log = args.resume.is_none() || !loss_path.exists();
    let mut log_file = if fresh_log {
        let mut f = std::fs::File::create(&loss_path)?;
        writeln!(f, "step,loss,wall_ms")?;
        f
    } else {
        std::fs::OpenOptions::new().append(true).open(&loss_path)?
    };

    let final_loss = with_threads(threads, || {
        train_loop(&mut state, &examples, epochs, log_every, Some(&mut log_file))
    })?;

    save_checkpoint(&state, &vocab, &args.out.join("checkpoint.bin"))?;
    vocab.save(&args.out.join("vocab.txt"))?;

    let mut echo = ResolvedConfig::default();
    echo.put("command", "train");
    echo.put("dataset", args.dataset.display());
    echo.put("epochs", epochs);
    echo.put("batch_size", state.config.batch_size);
    echo.put("learning_rate", state.config.learning_rate);
    echo.put("p_drop", state.config.p_drop);
    echo.put("total_steps", state.config.total_steps);
    echo.put("seed", state.config.seed);
    echo.put("train_frac", train_frac);
    echo.put("split_seed", split_seed);
    echo.put("log_every", log_every);
    echo.put("resumed", args.resume.is_some());
    echo.write(&args.out.join("run_config.txt"))?;

    println!(
        "trained to step {} (loss {:.6}); checkpoint at {}",
        state.step,
        final_loss,
        args.out.join("checkpoint.bin").display()
    );
    Ok(())
}

fn parse_sampler(name: &str) -> Result<SamplerKind> {
    match name {
        "ddim" => Ok(SamplerKind::Ddim),
        "ddpm" => Ok(SamplerKind::Ddpm),
        other => Err(Error::Parameter(format!("unknown sampler `{other}`"))),
    }
}

fn parse_decode(name: &str) -> Result<DecodeKind> {
    match name {
        "bilinear" => Ok(DecodeKind::BilinearCfg),
        "nearest" => Ok(DecodeKind::Nearest),
        "learned" => Ok(DecodeKind::LearnedDecoder),
        other => Err(Error::Parameter(format!("unknown decode strategy `{other}`"))),
    }
}

pub fn run_sample(args: &SampleArgs) -> Result<()> {
    let cfg = load_config(
        &args.config,
        &["steps", "scale", "sampler", "decode", "sample_seed", "threads"],
    )?;
    let steps = resolve(&args.steps, &cfg, "steps", 50usize)?;
    let scale = resolve(&args.scale, &cfg, "scale", 7.5)?;
    let sampler_name = resolve(&args.sampler, &cfg, "sampler", "ddim".to_string())?;
    let decode_name = resolve(&args.decode, &cfg, "decode", "bilinear".to_string())?;
    let sample_seed = resolve(&args.sample_seed, &cfg, "sample_seed", 0u64)?;
    let threads = resolve(&args.threads, &cfg, "threads", 0usize)?;

    let (state, vocab) = load_checkpoint::<f32>(&args.checkpoint)?;
    let image = image::open(&args.image)
        .map_err(|e| Error::Data(format!("cannot read image {}: {e}", args.image.display())))?
        .into_rgb8();

    let request = SampleRequest {
        image: rgb_to_grid::<f32>(&image),
        phrase: args.phrase.clone(),
        guidance: GuidanceConfig {
            scale,
            sampler_kind: parse_sampler(&sampler_name)?,
            ddim_steps: steps,
        },
        decode: DecodeStrategy {
            kind: parse_decode(&decode_name)?,
            threshold: 0.0,
        },
        seed: sample_seed,
    };

    let mask = with_threads(threads, || -> Result<_> {
        let sampler = Sampler::new(&state.model, &vocab, &state.schedule)?;
        sampler.sample_mask(&request)
    })?;
    if let Some(parent) = args.out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    mask.save_png(&args.out)?;

    if args.sidecar {
        let sidecar = format!(
            "seed={sample_seed}\nsteps={steps}\nguidance_scale={scale}\nsampler={sampler_name}\ndecode={decode_name}\nthreshold=0\n"
        );
        std::fs::write(append_ext(&args.out, "txt"), sidecar)?;
    }

    let mut echo = ResolvedConfig::default();
    echo.put("command", "sample");
    echo.put("checkpoint", args.checkpoint.display());
    echo.put("image", args.image.display());
    echo.put("phrase", &args.phrase);
    echo.put("steps", steps);
    echo.put("scale", scale);
    echo.put("sampler", &sampler_name);
    echo.put("decode", &decode_name);
    echo.put("sample_seed", sample_seed);
    echo.write(&append_ext(&args.out, "config.txt"))?;
    println!("wrote {}", args.out.display());
    Ok(())
}

fn append_ext(path: &Path, ext: &str) -> PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

fn fmt_ar(v: &Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

pub fn write_eval_outputs(
    out_dir: &Path,
    records: &[EvalRecord],
    report: &SubcategoryReport,
) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    let mut per = String::from("phrase_id,iou,thing_stuff,number\n");
    for r in records {
        let ts = match r.thing_stuff {
            ThingStuff::Thing => "thing",
            ThingStuff::Stuff => "stuff",
        };
        let num = match r.number {
            Number::Singular => "singular",
            Number::Plural => "plural",
        };
        per.push_str(&format!("{},{:.6},{},{}\n", r.phrase_id, r.iou, ts, num));
    }
    std::fs::write(out_dir.join("per_phrase.csv"), per)?;

    let summary = format!(
        "overall,things,stuff,singulars,plurals\n{:.6},{},{},{},{}\n",
        report.overall,
        fmt_ar(&report.things),
        fmt_ar(&report.stuff),
        fmt_ar(&report.singulars),
        fmt_ar(&report.plurals)
    );
    std::fs::write(out_dir.join("summary.csv"), summary)?;
    Ok(())
}

/// Evaluate a trained state on a dataset's test split.
pub fn evaluate_checkpoint(
    state: &TrainState<f32>,
    vocab: &PhraseVocabulary,
    dataset: &Path,
    train_frac: f64,
    split_seed: u64,
    guidance: GuidanceConfig,
    decode: DecodeStrategy,
    eval_seed: u64,
) -> Result<(Vec<EvalRecord>, SubcategoryReport)> {
    let index = load_manifest_index(dataset)?;
    let (_, test_idx) = split_dataset(index.len(), train_frac, split_seed)?;
    if test_idx.is_empty() {
        return Err(Error::Data("empty test split".into()));
    }
    let sampler = Sampler::new(&state.model, vocab, &state.schedule)?;
    let records = sampler.evaluate_scenes(&index, &test_idx, guidance, decode, eval_seed)?;
    if records.is_empty() {
        return Err(Error::Data("test split contains no phrases".into()));
    }
    let report = subcategory_report(&records, &ThresholdGrid::standard())?;
    Ok((records, report))
}

pub fn run_eval(args: &EvalArgs) -> Result<()> {
    let cfg = load_config(
        &args.config,
        &[
            "train_frac", "split_seed", "steps", "scale", "sampler", "decode", "eval_seed",
            "threads",
        ],
    )?;
    let train_frac = resolve(&args.train_frac, &cfg, "train_frac", 0.909)?;
    let split_seed = resolve(&args.split_seed, &cfg, "split_seed", 0u64)?;
    let steps = resolve(&args.steps, &cfg, "steps", 50usize)?;
    let scale = resolve(&args.scale, &cfg, "scale", 7.5)?;
    let sampler_name = resolve(&args.sampler, &cfg, "sampler", "ddim".to_string())?;
    let decode_name = resolve(&args.decode, &cfg, "decode", "bilinear".to_string())?;
    let eval_seed = resolve(&args.eval_seed, &cfg, "eval_seed", 1u64)?;
    let threads = resolve(&args.threads, &cfg, "threads", 0usize)?;

    let (state, vocab) = load_checkpoint::<f32>(&args.checkpoint)?;
    let guidance = GuidanceConfig {
        scale,
        sampler_kind: parse_sampler(&sampler_name)?,
        ddim_steps: steps,
    };
    let decode = DecodeStrategy {
        kind: parse_decode(&decode_name)?,
        threshold: 0.0,
    };

    let (records, report) = with_threads(threads, || {
        evaluate_checkpoint(
            &state, &vocab, &args.dataset, train_frac, split_seed, guidance, decode, eval_seed,
        )
    })?;
    write_eval_outputs(&args.out, &records, &report)?;

    let mut echo = ResolvedConfig::default();
    echo.put("command", "eval");
    echo.put("checkpoint", args.checkpoint.display());
    echo.put("dataset", args.dataset.display());
    echo.put("train_frac", train_frac);
    echo.put("split_seed", split_seed);
    echo.put("steps", steps);
    echo.put("scale", scale);
    echo.put("sampler", &sampler_name);
    echo.put("decode", &decode_name);
    echo.put("eval_seed", eval_seed);
    echo.write(&args.out.join("run_config.txt"))?;

    println!(
        "overall={:.4} things={} stuff={} singulars={} plurals={}",
        report.overall,
        fmt_ar(&report.things),
        fmt_ar(&report.stuff),
        fmt_ar(&report.singulars),
        fmt_ar(&report.plurals)
    );
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum AblateAxis {
    ImageSize,
    DdimSteps,
    GuidanceScale,
}

fn parse_axis(name: &str) -> Result<AblateAxis> {
    match name.to_ascii_lowercase().as_str() {
        "image_size" => Ok(AblateAxis::ImageSize),
        "ddim_steps" => Ok(AblateAxis::DdimSteps),
        "guidance_scale" => Ok(AblateAxis::GuidanceScale),
        other => Err(Error::Parameter(format!("unknown ablation axis `{other}`"))),
    }
}

pub fn run_ablate(args: &AblateArgs) -> Result<()> {
    let cfg = load_config(
        &args.config,
        &[
            "count", "epochs", "batch_size", "learning_rate", "seed", "train_frac",
            "split_seed", "steps", "scale", "eval_seed", "threads",
        ],
    )?;
    let axis = parse_axis(&args.axis)?;
    let values: Vec<f64> = args
        .values
        .split(',')
        .map(|v| {
            v.trim()
                .parse::<f64>()
                .map_err(|_| Error::Parameter(format!("bad axis value `{v}`")))
        })
        .collect::<Result<_>>()?;
    if values.is_empty() {
        return Err(Error::Parameter("at least one axis value required".into()));
    }

    let count = resolve(&args.count, &cfg, "count", 2200usize)?;
    let epochs = resolve(&args.epochs, &cfg, "epochs", 20usize)?;
    let batch_size = resolve(&args.batch_size, &cfg, "batch_size", 16usize)?;
    let learning_rate = resolve(&args.learning_rate, &cfg, "learning_rate", 1e-4)?;
    let seed = resolve(&args.seed, &cfg, "seed", 0u64)?;
    let train_frac = resolve(&args.train_frac, &cfg, "train_frac", 0.909)?;
    let split_seed = resolve(&args.split_seed, &cfg, "split_seed", 0u64)?;
    let steps = resolve(&args.steps, &cfg, "steps", 50usize)?;
    let scale = resolve(&args.scale, &cfg, "scale", 7.5)?;
    let eval_seed = resolve(&args.eval_seed, &cfg, "eval_seed", 1u64)?;
    let threads = resolve(&args.threads, &cfg, "threads", 0usize)?;

    std::fs::create_dir_all(&args.out)?;
    let vocab = grammar_vocabulary();
    let decode = DecodeStrategy::default();

    let train_fresh = |dataset: &Path, run_seed: u64| -> Result<TrainState<f32>> {
        let index = load_manifest_index(dataset)?;
        let (train_idx, _) = split_dataset(index.len(), train_frac, split_seed)?;
        let train_config = TrainConfig {
            learning_rate,
            batch_size,
            epochs,
            seed: run_seed,
            ..TrainConfig::default()
        };
        let model = labeldiff_core::Model32::new(ModelConfig::toy(vocab.len()), run_seed)?;
        let mut state = TrainState::new(model, train_config)?;
        let examples = build_examples(&index, &train_idx, &state.model, &vocab)?;
        train_loop(&mut state, &examples, epochs, usize::MAX, None)?;
        Ok(state)
    };

    let mut rows: Vec<(f64, SubcategoryReport)> = Vec::new();
    with_threads(threads, || -> Result<()> {
        match axis {
            AblateAxis::ImageSize => {
                for &v in &values {
                    let size = v as usize;
                    if size == 0 || size % 8 != 0 {
                        return Err(Error::Parameter(format!(
                            "image size {v} must be a positive multiple of 8"
                        )));
                    }
                    let data_dir = args.out.join(format!("size_{size}/data"));
                    if !data_dir.join("manifest.txt").exists() {
                        std::fs::create_dir_all(&data_dir)?;
                        let spec = SceneSpec {
                            image_size: size,
                            ..SceneSpec::default()
                        };
                        generate_dataset(&data_dir, count, derive_seed(seed, size as u64), &spec)?;
                    }
                    let state = train_fresh(&data_dir, seed)?;
                    save_checkpoint(
                        &state,
                        &vocab,
                        &args.out.join(format!("size_{size}/checkpoint.bin")),
                    )?;
                    let guidance = GuidanceConfig {
                        scale,
                        sampler_kind: SamplerKind::Ddim,
                        ddim_steps: steps,
                    };
                    let (_, report) = evaluate_checkpoint(
                        &state, &vocab, &data_dir, train_frac, split_seed, guidance, decode,
                        eval_seed,
                    )?;
                    rows.push((v, report));
                }
            }
            AblateAxis::DdimSteps | AblateAxis::GuidanceScale => {
                let state = match (&args.checkpoint, &args.dataset) {
                    (Some(ck), _) => load_checkpoint::<f32>(ck)?.0,
                    (None, Some(dataset)) => {
                        let state = train_fresh(dataset, seed)?;
                        save_checkpoint(&state, &vocab, &args.out.join("checkpoint.bin"))?;
                        state
                    }
                    (None, None) => {
                        return Err(Error::Parameter(
                            "this axis needs --checkpoint or --dataset".into(),
                        ))
                    }
                };
                let dataset = args.dataset.as_ref().ok_or_else(|| {
                    Error::Parameter("--dataset required for evaluation".into())
                })?;
                for &v in &values {
                    let guidance = match axis {
                        AblateAxis::DdimSteps => GuidanceConfig {
                            scale,
                            sampler_kind: SamplerKind::Ddim,
                            ddim_steps: v as usize,
                        },
                        _ => GuidanceConfig {
                            scale: v,
                            sampler_kind: SamplerKind::Ddim,
                            ddim_steps: steps,
                        },
                    };
                    let (_, report) = evaluate_checkpoint(
                        &state, &vocab, dataset, train_frac, split_seed, guidance, decode,
                        eval_seed,
                    )?;
                    rows.push((v, report));
                }
            }
        }
        Ok(())
    })?;

    let mut csv = String::from("value,overall,things,stuff,singulars,plurals\n");
    for (v, r) in &rows {
        csv.push_str(&format!(
            "{},{:.6},{},{},{},{}\n",
            trim_value(*v),
            r.overall,
            fmt_ar(&r.things),
            fmt_ar(&r.stuff),
            fmt_ar(&r.singulars),
            fmt_ar(&r.plurals)
        ));
    }
    std::fs::write(args.out.join("ablation.csv"), csv)?;

    let points: Vec<(f64, f64)> = rows.iter().map(|(v, r)| (*v, r.overall)).collect();
    plot::line_plot(
        &args.out.join("ablation.svg"),
        &format!("overall average recall vs {}", args.axis),
        &args.axis,
        "overall AR",
        &points,
    )?;

    let mut echo = ResolvedConfig::default();
    echo.put("command", "ablate");
    echo.put("axis", &args.axis);
    echo.put("values", &args.values);
    echo.put("count", count);
    echo.put("epochs", epochs);
    echo.put("batch_size", batch_size);
    echo.put("learning_rate", learning_rate);
    echo.put("seed", seed);
    echo.put("train_frac", train_frac);
    echo.put("split_seed", split_seed);
    echo.put("steps", steps);
    echo.put("scale", scale);
    echo.put("eval_seed", eval_seed);
    echo.write(&args.out.join("run_config.txt"))?;

    for (v, r) in &rows {
        println!("{} -> overall {:.4}", trim_value(*v), r.overall);
    }
    Ok(())
}

fn trim_value(v: f64) -> String {
    if (v - v.round()).abs() < 1e-9 {
        format!("{}", v.round() as i64)
    } else {
        format!("{v}")
    }
}
