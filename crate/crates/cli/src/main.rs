//! `zdcflow`: data generation, training, sampling, evaluation, tuning and
//! benchmarking from one executable.
//!
//! Every command that produces artifacts also writes `manifest.json` (the
//! resolved arguments and configs, crate version and seed) so that a run can
//! be repeated from the manifest alone. Failures print a single
//! `error: <kind>: <message>` line on stderr and exit with status 1.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};

use zdcflow::baselines::{evaluate_direct, fit_knn, fit_linear, train_fm_channels, train_mlp_channels, direct_csv, ChannelPredictor, ChannelRegressor};
use zdcflow::bench::{bench_inference, ladder_csv, ladder_report, BenchConfig};
use zdcflow::config::{load_toml, BaselinesConfig, FmRunConfig, VaeRunConfig};
use zdcflow::data::{dataset_stats, load_dataset, save_dataset, split_dataset, synth_generate, Dataset, DatasetSplit, Detector, ParticleFeatures, ShowerImage, SynthConfig};
use zdcflow::flow_matching::{channels_of, sweep_csv, sweep_steps, trace_csv, train_fm, PixelFm, DEFAULT_LATENT_STEPS, DEFAULT_PIXEL_STEPS};
use zdcflow::latent::{latent_unet_config, reconstruction_wasserstein, train_latent_fm, train_vae, vae_trace_csv, LatentFm};
use zdcflow::metrics::{emit_histograms, evaluate_runs, extract_channels, histograms_csv, original_baseline_mae, original_baseline_wasserstein, ChannelVector};
use zdcflow::model::{load_checkpoint, save_checkpoint, ModelCheckpoint, ModelKind};
use zdcflow::numerics::DType;
use zdcflow::tuning::{cdf_csv, run_campaign, wasserstein_cdf, CampaignConfig, SearchSpace};
use zdcflow::Error;

#[derive(Parser, Debug)]
#[command(name = "zdcflow", version, about = "Flow-matching surrogates for zero degree calorimeter responses")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset.
    Synth(SynthArgs),
    /// Print dataset statistics as JSON.
    Stats(StatsArgs),
    /// Train a pixel-space flow-matching model.
    Train(TrainArgs),
    /// Train the VAE of the latent pipeline.
    TrainVae(TrainVaeArgs),
    /// Train flow matching in the latent space of a trained VAE.
    TrainLatent(TrainLatentArgs),
    /// Generate responses for the test-split particles.
    Sample(SampleArgs),
    /// Wasserstein and MAE of a model on the test split.
    Eval(EvalArgs),
    /// Metrics as a function of the number of Euler steps.
    Sweep(SweepArgs),
    /// Random-search hyperparameter campaign.
    Tune(TuneArgs),
    /// Per-sample inference latency ladder.
    Bench(BenchArgs),
    /// Direct channel-estimation baselines.
    Baselines(BaselinesArgs),
}

#[derive(Args, Debug, Serialize)]
struct DataArgs {
    /// Dataset file (ZDC1).
    #[arg(long)]
    data: PathBuf,
    /// Seed of the 70/10/20 train/val/test split.
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
}

impl DataArgs {
    fn load(&self) -> Result<(Dataset, DatasetSplit)> {
        let ds = load_dataset(&self.data)?;
        let split = split_dataset(ds.len(), self.split_seed)?;
        Ok((ds, split))
    }
}

#[derive(Args, Debug, Serialize)]
struct SynthArgs {
    #[arg(long)]
    detector: Detector,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Generator constants (TOML); compiled-in defaults otherwise.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct StatsArgs {
    data: PathBuf,
    #[arg(long, default_value_t = 20)]
    bins: usize,
    /// Also write stats.json and feature_histograms.csv here.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct TrainOverrides {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
}

#[derive(Args, Debug, Serialize)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    config: PathBuf,
    #[command(flatten)]
    overrides: TrainOverrides,
    #[arg(long, default_value = "run")]
    out_dir: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct TrainVaeArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    config: PathBuf,
    #[command(flatten)]
    overrides: TrainOverrides,
    /// Drop the adversarial loss term.
    #[arg(long)]
    no_adv: bool,
    /// Drop the perceptual loss term.
    #[arg(long)]
    no_perc: bool,
    #[arg(long, default_value = "run")]
    out_dir: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct TrainLatentArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    vae: PathBuf,
    #[arg(long)]
    config: PathBuf,
    #[command(flatten)]
    overrides: TrainOverrides,
    #[arg(long, default_value = "run")]
    out_dir: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct ModelArgs {
    /// Model checkpoint (pixel FM, latent FM or channel network).
    #[arg(long)]
    ckpt: PathBuf,
    /// VAE checkpoint, required for latent models.
    #[arg(long)]
    vae: Option<PathBuf>,
    /// Euler steps (default: 11 pixel, 7 latent, the trained value for fm5).
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, default_value = "f32")]
    precision: DType,
}

#[derive(Args, Debug, Serialize)]
struct SampleArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Generate for at most this many test rows.
    #[arg(long)]
    limit: Option<usize>,
    /// Output dataset (ZDC1) with the test features and generated images.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct EvalArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = zdcflow::metrics::DEFAULT_RUNS)]
    runs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 40)]
    bins: usize,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct SweepArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, value_delimiter = ',', default_values_t = [1usize, 2, 3, 5, 7, 9, 11, 15, 20, 50])]
    step_counts: Vec<usize>,
    #[arg(long, default_value_t = 1)]
    runs: usize,
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long, default_value = "sweep")]
    out_dir: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct TuneArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Model config; its [train] table is the per-trial template.
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value_t = 20)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Per-trial epoch budget.
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    /// Search space (TOML); defaults otherwise.
    #[arg(long)]
    space: Option<PathBuf>,
    #[arg(long, default_value = "tune")]
    out_dir: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct BenchArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Pixel FM checkpoint.
    #[arg(long)]
    ckpt: PathBuf,
    /// Latent FM checkpoint (adds a latent row; needs --vae).
    #[arg(long)]
    latent: Option<PathBuf>,
    #[arg(long)]
    vae: Option<PathBuf>,
    /// Pixel step counts, one row each, slowest first.
    #[arg(long, value_delimiter = ',', default_values_t = [50usize, 11])]
    step_counts: Vec<usize>,
    #[arg(long, default_value_t = 256)]
    batch_size: usize,
    #[arg(long, default_value_t = 5)]
    warmup: usize,
    #[arg(long, default_value_t = 20)]
    batches: usize,
    /// Add a multi-threaded row after the single-worker rows.
    #[arg(long)]
    threads: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "bench")]
    out_dir: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct BaselinesArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Pixel FM checkpoint to rank against the direct estimators.
    #[arg(long)]
    fm_ckpt: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "baselines")]
    out_dir: PathBuf,
}

fn error_kind(e: &anyhow::Error) -> &'static str {
    match e.downcast_ref::<Error>() {
        Some(Error::Io { .. }) => "io",
        Some(Error::Format(_) | Error::Integrity(_) | Error::Version { .. } | Error::Json(_) | Error::Toml(_)) => "format",
        Some(Error::Incompatible(_)) => "incompatible",
        Some(Error::Diverged(_)) => "diverged",
        Some(Error::InvalidArgument(_) | Error::ParamBudget { .. }) => "invalid",
        Some(_) => "numerics",
        None => "failed",
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {}: {msg}", error_kind(&e));
            ExitCode::FAILURE
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth(a) => cmd_synth(a),
        Command::Stats(a) => cmd_stats(a),
        Command::Train(a) => cmd_train(a),
        Command::TrainVae(a) => cmd_train_vae(a),
        Command::TrainLatent(a) => cmd_train_latent(a),
        Command::Sample(a) => cmd_sample(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Tune(a) => cmd_tune(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Baselines(a) => cmd_baselines(a),
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn out_dir(dir: &Path) -> Result<&Path> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn write_manifest(path: &Path, command: &str, args: &impl Serialize, resolved: Value) -> Result<()> {
    let manifest = json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "args": args,
        "resolved": resolved,
    });
    write(path, serde_json::to_string_pretty(&manifest)? + "\n")
}

fn print_json(v: &impl Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let cfg = match &a.config {
        Some(p) => SynthConfig::from_toml(&std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)?,
        None => SynthConfig::default(),
    };
    if a.n == 0 {
        bail!(Error::InvalidArgument("--n must be positive".into()));
    }
    let ds = synth_generate(a.detector, a.n, a.seed, &cfg)?;
    save_dataset(&a.out, &ds)?;
    let manifest = PathBuf::from(format!("{}.manifest.json", a.out.display()));
    write_manifest(&manifest, "synth", &a, json!({ "synth": cfg }))
}

fn cmd_stats(a: StatsArgs) -> Result<()> {
    let ds = load_dataset(&a.data)?;
    let stats = dataset_stats(&ds, a.bins);
    if let Some(dir) = &a.out_dir {
        let dir = out_dir(dir)?;
        write(&dir.join("stats.json"), serde_json::to_string_pretty(&stats)?)?;
        write(&dir.join("feature_histograms.csv"), stats.histograms_csv())?;
        write_manifest(&dir.join("manifest.json"), "stats", &a, Value::Null)?;
    }
    print_json(&stats)
}

fn apply_overrides(train: &mut zdcflow::flow_matching::FMTrainConfig, o: &TrainOverrides) {
    if let Some(e) = o.epochs {
        train.epochs = e;
    }
    if let Some(s) = o.seed {
        train.seed = s;
    }
    if let Some(lr) = o.lr {
        train.adam.lr = lr;
    }
    if let Some(b) = o.batch_size {
        train.batch_size = b;
    }
}

fn check_detector(file: Detector, ds: &Dataset) -> Result<()> {
    if file != ds.detector() {
        bail!(Error::Incompatible(format!("config is for {file}, dataset holds {} responses", ds.detector())));
    }
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let (ds, split) = a.data.load()?;
    let mut cfg: FmRunConfig = load_toml(&a.config)?;
    check_detector(cfg.detector, &ds)?;
    apply_overrides(&mut cfg.train, &a.overrides);
    let res = train_fm(&ds, &split, &cfg.unet, &cfg.train)?;
    let dir = out_dir(&a.out_dir)?;
    save_checkpoint(dir.join("best.ckpt"), &res.checkpoint)?;
    write(&dir.join("trace.csv"), trace_csv(&res.outcome.trace))?;
    write_manifest(&dir.join("manifest.json"), "train", &a, serde_json::to_value(&cfg)?)?;
    print_json(&json!({
        "best_epoch": res.outcome.best_epoch,
        "best_val_wasserstein": res.outcome.best_val_wasserstein,
        "params": res.model.unet.count_params(),
    }))
}

fn cmd_train_vae(a: TrainVaeArgs) -> Result<()> {
    let (ds, split) = a.data.load()?;
    let mut cfg: VaeRunConfig = load_toml(&a.config)?;
    check_detector(cfg.detector, &ds)?;
    let t = &mut cfg.train;
    let o = &a.overrides;
    t.epochs = o.epochs.unwrap_or(t.epochs);
    t.seed = o.seed.unwrap_or(t.seed);
    t.adam.lr = o.lr.unwrap_or(t.adam.lr);
    t.batch_size = o.batch_size.unwrap_or(t.batch_size);
    t.loss.adversarial &= !a.no_adv;
    t.loss.perceptual &= !a.no_perc;
    let res = train_vae(&ds, &split, &cfg.vae, &cfg.train)?;
    let recon = reconstruction_wasserstein(&res.vae, &ds, &split.test)?;
    let dir = out_dir(&a.out_dir)?;
    save_checkpoint(dir.join("vae.ckpt"), &res.checkpoint)?;
    write(&dir.join("trace.csv"), vae_trace_csv(&res.trace))?;
    write_manifest(&dir.join("manifest.json"), "train-vae", &a, serde_json::to_value(&cfg)?)?;
    print_json(&json!({
        "best_epoch": res.best_epoch,
        "best_val_wasserstein": res.best_val_wasserstein,
        "test_reconstruction_wasserstein": recon,
    }))
}

fn cmd_train_latent(a: TrainLatentArgs) -> Result<()> {
    let (ds, split) = a.data.load()?;
    let vae = load_checkpoint(&a.vae)?;
    let mut cfg: FmRunConfig = load_toml(&a.config)?;
    check_detector(cfg.detector, &ds)?;
    apply_overrides(&mut cfg.train, &a.overrides);
    let res = train_latent_fm(&vae, &ds, &split, &cfg.unet, &cfg.train)?;
    let dir = out_dir(&a.out_dir)?;
    save_checkpoint(dir.join("latent.ckpt"), &res.checkpoint)?;
    write(&dir.join("trace.csv"), trace_csv(&res.outcome.trace))?;
    let resolved = json!({ "config": cfg, "latent_unet": latent_unet_config(&cfg.unet, res.model.vae.config()) });
    write_manifest(&dir.join("manifest.json"), "train-latent", &a, resolved)?;
    print_json(&json!({
        "best_epoch": res.outcome.best_epoch,
        "best_val_wasserstein": res.outcome.best_val_wasserstein,
    }))
}

/// Any trained model, as loaded from its checkpoint(s).
enum Generator {
    Pixel(PixelFm),
    Latent(LatentFm),
    Channels(ChannelRegressor),
}

impl Generator {
    fn load(m: &ModelArgs) -> Result<(Self, ModelCheckpoint)> {
        let ck = load_checkpoint(&m.ckpt)?;
        let g = match ck.model_kind {
            ModelKind::UnetPixel => Self::Pixel(PixelFm::from_checkpoint(&ck)?),
            ModelKind::UnetLatent => {
                let Some(vae) = &m.vae else {
                    bail!(Error::InvalidArgument("latent models need --vae".into()));
                };
                Self::Latent(LatentFm::from_checkpoints(&load_checkpoint(vae)?, &ck)?)
            }
            ModelKind::MlpChannels => Self::Channels(ChannelRegressor::from_checkpoint(&ck)?),
            ModelKind::Vae => bail!(Error::Incompatible("a VAE checkpoint is not a generator".into())),
        };
        Ok((g, ck))
    }

    fn default_steps(&self) -> usize {
        match self {
            Self::Latent(_) => DEFAULT_LATENT_STEPS,
            _ => DEFAULT_PIXEL_STEPS,
        }
    }

    fn images(&self, feats: &[ParticleFeatures], steps: usize, seed: u64, precision: DType) -> Result<Vec<ShowerImage>> {
        Ok(match self {
            Self::Pixel(p) => p.sample_images(feats, steps, seed, precision)?,
            Self::Latent(l) => l.sample_images(feats, steps, seed, precision)?,
            Self::Channels(_) => bail!(Error::Incompatible("channel regressors do not generate images".into())),
        })
    }

    fn channels(&self, feats: &[ParticleFeatures], steps: usize, seed: u64, precision: DType) -> Result<Vec<ChannelVector>> {
        match self {
            Self::Channels(r) => Ok(r.predict_channels(feats, seed)?),
            _ => Ok(self.images(feats, steps, seed, precision)?.iter().map(extract_channels).collect()),
        }
    }
}

fn check_model_data(ck: &ModelCheckpoint, ds: &Dataset) -> Result<()> {
    if ck.detector != ds.detector() {
        bail!(Error::Incompatible(format!("checkpoint is for {}, dataset holds {} responses", ck.detector, ds.detector())));
    }
    Ok(())
}

fn test_rows(split: &DatasetSplit, limit: Option<usize>) -> Vec<usize> {
    let k = limit.unwrap_or(split.test.len()).min(split.test.len());
    split.test[..k].to_vec()
}

fn features_of(ds: &Dataset, rows: &[usize]) -> Vec<ParticleFeatures> {
    rows.iter().map(|&i| ds.features()[i]).collect()
}

fn cmd_sample(a: SampleArgs) -> Result<()> {
    let (ds, split) = a.data.load()?;
    let (gen, ck) = Generator::load(&a.model)?;
    check_model_data(&ck, &ds)?;
    let rows = test_rows(&split, a.limit);
    let feats = features_of(&ds, &rows);
    let steps = a.model.steps.unwrap_or(gen.default_steps());
    let imgs = gen.images(&feats, steps, a.seed, a.model.precision)?;
    let pixels: Vec<u16> = imgs.iter().flat_map(|im| im.pixels.iter().copied()).collect();
    save_dataset(&a.out, &Dataset::new(ds.detector(), feats, pixels)?)?;
    let manifest = PathBuf::from(format!("{}.manifest.json", a.out.display()));
    write_manifest(&manifest, "sample", &a, json!({ "steps": steps }))
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let (ds, split) = a.data.load()?;
    let (gen, ck) = Generator::load(&a.model)?;
    check_model_data(&ck, &ds)?;
    let feats = features_of(&ds, &split.test);
    let real = channels_of(&ds, &split.test);
    let steps = a.model.steps.unwrap_or(gen.default_steps());
    let mut last = Vec::new();
    let summary = evaluate_runs(&real, a.runs, |run| {
        let out = gen
            .channels(&feats, steps, zdcflow::rng::derive(a.seed, run), a.model.precision)
            .map_err(|e| match e.downcast::<Error>() {
                Ok(e) => e,
                Err(e) => Error::InvalidArgument(e.to_string()),
            })?;
        last = out.clone();
        Ok(out)
    })?;
    let report = json!({
        "steps": steps,
        "runs": a.runs,
        "wasserstein": summary.wasserstein,
        "mae": summary.mae,
        "wasserstein_runs": summary.wasserstein_runs,
        "mae_runs": summary.mae_runs,
        "baseline_wasserstein": original_baseline_wasserstein(&real, a.seed)?,
        // Undefined when no two test rows share their features.
        "baseline_mae": original_baseline_mae(&feats, &real, a.seed).ok(),
    });
    if let Some(dir) = &a.out_dir {
        let dir = out_dir(dir)?;
        write(&dir.join("eval.json"), serde_json::to_string_pretty(&report)?)?;
        write(&dir.join("histograms.csv"), histograms_csv(&emit_histograms(&real, &last, a.bins)?))?;
        write_manifest(&dir.join("manifest.json"), "eval", &a, Value::Null)?;
    }
    print_json(&report)
}

fn cmd_sweep(a: SweepArgs) -> Result<()> {
    let (ds, split) = a.data.load()?;
    let (gen, ck) = Generator::load(&a.model)?;
    check_model_data(&ck, &ds)?;
    let rows = test_rows(&split, a.limit);
    let feats = features_of(&ds, &rows);
    let real = channels_of(&ds, &rows);
    let sweep = sweep_steps(&real, &a.step_counts, a.runs, |steps, seed| {
        gen.channels(&feats, steps, seed, a.model.precision)
            .map_err(|e| Error::InvalidArgument(format!("{e:#}")))
    })?;
    let best = sweep
        .iter()
        .min_by(|x, y| x.wasserstein.total_cmp(&y.wasserstein))
        .map(|r| r.steps);
    let dir = out_dir(&a.out_dir)?;
    write(&dir.join("sweep.csv"), sweep_csv(&sweep))?;
    write_manifest(&dir.join("manifest.json"), "sweep", &a, json!({ "min_wasserstein_steps": best }))?;
    print_json(&json!({ "rows": sweep, "min_wasserstein_steps": best }))
}

fn cmd_tune(a: TuneArgs) -> Result<()> {
    let (ds, split) = a.data.load()?;
    let base: FmRunConfig = load_toml(&a.config)?;
    check_detector(base.detector, &ds)?;
    let space: SearchSpace = match &a.space {
        Some(p) => load_toml(p)?,
        None => SearchSpace::default(),
    };
    let cfg = CampaignConfig {
        n_trials: a.trials,
        seed: a.seed,
        space,
        train: zdcflow::flow_matching::FMTrainConfig { epochs: a.epochs, ..base.train.clone() },
    };
    let dir = out_dir(&a.out_dir)?;
    write_manifest(&dir.join("manifest.json"), "tune", &a, json!({ "unet": base.unet, "campaign": cfg }))?;
    let campaign = run_campaign(&ds, &split, &base.unet, &cfg, Some(dir))?;
    save_checkpoint(dir.join("best.ckpt"), &campaign.best_checkpoint)?;
    write(&dir.join("cdf.csv"), cdf_csv(&wasserstein_cdf(&campaign.records)))?;
    print_json(campaign.best_record())
}

fn cmd_bench(a: BenchArgs) -> Result<()> {
    let (ds, split) = a.data.load()?;
    let ck = load_checkpoint(&a.ckpt)?;
    check_model_data(&ck, &ds)?;
    let pixel = PixelFm::from_checkpoint(&ck)?;
    let feats = features_of(&ds, &split.test);
    let base = BenchConfig {
        batch_size: a.batch_size,
        warmup: a.warmup,
        batches: a.batches,
        seed: a.seed,
        ..BenchConfig::default()
    };
    let mut rows = Vec::new();
    for &steps in &a.step_counts {
        let cfg = BenchConfig { steps, ..base.clone() };
        rows.push(bench_inference(&format!("pixel_{steps}_steps"), &pixel, &feats, &cfg)?.0);
    }
    let last = *a.step_counts.last().context("--step-counts is empty")?;
    let f16 = BenchConfig { steps: last, precision: DType::F16, ..base.clone() };
    rows.push(bench_inference(&format!("pixel_{last}_steps_f16"), &pixel, &feats, &f16)?.0);
    if let Some(latent) = &a.latent {
        let Some(vae) = &a.vae else {
            bail!(Error::InvalidArgument("--latent needs --vae".into()));
        };
        let model = LatentFm::from_checkpoints(&load_checkpoint(vae)?, &load_checkpoint(latent)?)?;
        let cfg = BenchConfig { steps: DEFAULT_LATENT_STEPS, ..base.clone() };
        rows.push(bench_inference(&format!("latent_{DEFAULT_LATENT_STEPS}_steps"), &model, &feats, &cfg)?.0);
    }
    if a.threads {
        let cfg = BenchConfig { steps: last, multithreaded: true, ..base.clone() };
        rows.push(bench_inference(&format!("pixel_{last}_steps_threads"), &pixel, &feats, &cfg)?.0);
    }
    let ladder = ladder_report(&rows)?;
    let dir = out_dir(&a.out_dir)?;
    write(&dir.join("ladder.csv"), ladder_csv(&ladder))?;
    write_manifest(&dir.join("manifest.json"), "bench", &a, Value::Null)?;
    print!("{}", ladder_csv(&ladder));
    Ok(())
}

fn cmd_baselines(a: BaselinesArgs) -> Result<()> {
    let (ds, split) = a.data.load()?;
    let mut cfg: BaselinesConfig = match &a.config {
        Some(p) => load_toml(p)?,
        None => BaselinesConfig::default(),
    };
    cfg.mlp.seed = a.seed;
    cfg.fm5.train.seed = a.seed;
    let feats = features_of(&ds, &split.test);
    let real = channels_of(&ds, &split.test);
    let linear = fit_linear(&ds, &split)?;
    let knn = fit_knn(&ds, &split, cfg.knn_k)?;
    let mlp = train_mlp_channels(&ds, &split, &cfg.mlp)?;
    let (fm5, _) = train_fm_channels(&ds, &split, &cfg.fm5)?;
    let pixel = match &a.fm_ckpt {
        Some(p) => {
            let ck = load_checkpoint(p)?;
            check_model_data(&ck, &ds)?;
            Some(PixelFm::from_checkpoint(&ck)?)
        }
        None => None,
    };
    let mut predictors: Vec<(&str, &dyn ChannelPredictor)> = vec![("linear", &linear), ("knn", &knn), ("mlp", &mlp), ("fm5", &fm5)];
    if let Some(p) = &pixel {
        predictors.push(("full_image_fm", p));
    }
    let rows = evaluate_direct(&predictors, &feats, &real, a.seed)?;
    let dir = out_dir(&a.out_dir)?;
    write(&dir.join("direct.csv"), direct_csv(&rows))?;
    if let Some(ck) = fm5.checkpoint(ds.detector(), a.seed)? {
        save_checkpoint(dir.join("fm5.ckpt"), &ck)?;
    }
    if let Some(ck) = mlp.checkpoint(ds.detector(), a.seed)? {
        save_checkpoint(dir.join("mlp.ckpt"), &ck)?;
    }
    write_manifest(&dir.join("manifest.json"), "baselines", &a, serde_json::to_value(&cfg)?)?;
    print_json(&rows)
}
