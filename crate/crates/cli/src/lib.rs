//! Operator commands: corpus synthesis, dataset preparation, training,
//! serving, simulated sessions, reporting and single-file reconstruction.

pub mod error;

use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use tactile::corpus::{self, DatasetConfig, LabeledDataset, TextureClassSpec};
use tactile::dsp::{self, InitialPhase};
use tactile::dss::DssConfig;
use tactile::eval::{self, ClassificationRecord, Group, RegressionRow};
use tactile::init::{self, InitConfig, LatentIndex};
use tactile::model::{ModelConfig, TextureGan, TrainConfig};
use tactile::simuser::{self, OracleUser, SessionConfig, Trace};
use tactile_service::{Manifest, ServiceConfig, SessionManager};

pub use error::{CliError, Kind, Result};

#[derive(Debug, Parser)]
#[command(name = "tactile", version, about = "Vibrotactile texture workbench")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Profile {
    /// 24 x 64 segments, latent 16.
    Toy,
    /// 48 x 320 segments, latent 128.
    Full,
}

impl Profile {
    fn dataset(self) -> DatasetConfig {
        match self {
            Profile::Toy => DatasetConfig::toy(),
            Profile::Full => DatasetConfig::full(),
        }
    }

    fn model(self, n_classes: usize) -> ModelConfig {
        match self {
            Profile::Toy => ModelConfig::toy(n_classes),
            Profile::Full => ModelConfig::full(n_classes),
        }
    }

    fn train(self) -> TrainConfig {
        match self {
            Profile::Toy => TrainConfig::toy(),
            Profile::Full => TrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SpecSet {
    /// The five training archetypes.
    Train,
    /// Held-out optimization targets.
    Targets,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Writes labeled WAVs (one directory per class) and a target manifest.
    SynthCorpus(SynthArgs),
    /// Builds the segment cache from a directory of class folders.
    Prepare(PrepareArgs),
    /// Trains a model; writes a checkpoint and per-epoch metrics CSV.
    Train(TrainArgs),
    /// Runs the session server.
    Serve(ServeArgs),
    /// Runs seeded simulated-user sessions and writes one trace per session.
    Simulate(SimulateArgs),
    /// Writes reports for traces, classification records and regression rows.
    Evaluate(EvaluateArgs),
    /// WAV -> bandpass -> STFT -> Griffin-Lim -> WAV.
    Reconstruct(ReconstructArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = SpecSet::Train)]
    pub set: SpecSet,
    #[arg(long, default_value_t = 1)]
    pub per_class: usize,
    #[arg(long, default_value_t = 3.0)]
    pub duration: f64,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct PrepareArgs {
    #[arg(long)]
    pub audio: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = Profile::Toy)]
    pub profile: Profile,
    /// Accepted for uniformity; preparation is deterministic.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Profile::Toy)]
    pub profile: Profile,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long, default_value_t = 0.9)]
    pub train_fraction: f64,
    /// Seeds initialization, batching and the train/validation split.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub bind: Option<String>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub targets: Option<PathBuf>,
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    #[arg(long)]
    pub preview_iterations: Option<usize>,
    #[arg(long)]
    pub save_iterations: Option<usize>,
    /// Seeds the average-distance estimate.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    /// Target manifest (`[[target]]` id / path / class).
    #[arg(long)]
    pub targets: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub sessions: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 20)]
    pub max_iters: usize,
    #[arg(long, default_value_t = 50)]
    pub max_init_attempts: usize,
    /// Threshold profile for the oracle's ratings.
    #[arg(long, value_enum, default_value_t = Profile::Toy)]
    pub profile: Profile,
    #[arg(long)]
    pub tau_good: Option<f64>,
    #[arg(long)]
    pub tau_soso: Option<f64>,
    #[arg(long, default_value_t = 21)]
    pub grid_points: usize,
    /// Standard deviation of the jitter added to slider choices.
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    #[arg(long, default_value_t = 2000)]
    pub index_pairs: usize,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Directory of `*.jsonl` session traces.
    #[arg(long)]
    pub traces: Option<PathBuf>,
    /// CSV with predicted, actual, subject_id, group.
    #[arg(long)]
    pub records: Option<PathBuf>,
    #[arg(long)]
    pub classes: Option<usize>,
    /// CSV with c, i, acc_r, acc_g.
    #[arg(long)]
    pub regression: Option<PathBuf>,
    #[arg(long)]
    pub intercept: bool,
    #[arg(long, default_value_t = 0.05)]
    pub p_threshold: f64,
    /// Drop rows whose acc_g is more than k scaled MADs from the median; 0 disables.
    #[arg(long, default_value_t = 2.0)]
    pub mad_k: f64,
    /// Accepted for uniformity; evaluation is deterministic.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct ReconstructArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long, default_value_t = 50)]
    pub iterations: usize,
    #[arg(long, value_enum, default_value_t = Profile::Full)]
    pub profile: Profile,
    #[arg(long, value_enum, default_value_t = PhaseInit::PeakLocked)]
    pub phase_init: PhaseInit,
    /// Seeds `--phase-init random`.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PhaseInit {
    Zero,
    Random,
    PeakLocked,
}

/// Parses `args` (program name first). Help and version requests are
/// reported as `Ok(None)` after printing.
pub fn parse(args: impl IntoIterator<Item = impl Into<std::ffi::OsString> + Clone>) -> Result<Option<Cli>> {
    match Cli::try_parse_from(args) {
        Ok(cli) => Ok(Some(cli)),
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => {
            let _ = e.print();
            Ok(None)
        }
        Err(e) => {
            let text = e.to_string();
            let line = text.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            Err(CliError::usage(line))
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::SynthCorpus(a) => synth_corpus(&a),
        Command::Prepare(a) => prepare(&a),
        Command::Train(a) => train(&a).map(|_| ()),
        Command::Serve(a) => serve(&a),
        Command::Simulate(a) => simulate(&a).map(|_| ()),
        Command::Evaluate(a) => evaluate(&a),
        Command::Reconstruct(a) => reconstruct(&a).map(|_| ()),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(CliError::io(dir))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(CliError::io(path))
}

pub fn synth_corpus(a: &SynthArgs) -> Result<()> {
    let specs: Vec<TextureClassSpec> = match a.set {
        SpecSet::Train => corpus::toy_profile(),
        SpecSet::Targets => corpus::toy_targets(),
    };
    if a.per_class == 0 {
        return Err(CliError::usage("--per-class must be at least 1"));
    }
    let mut manifest = Manifest::default();
    for spec in &specs {
        let dir = a.out.join(&spec.name);
        create_dir(&dir)?;
        for j in 0..a.per_class {
            let w = corpus::synth_texture(spec, a.seed.wrapping_add(j as u64), a.duration)?;
            let name = format!("{}-{j}.wav", spec.name);
            dsp::write_wav(dir.join(&name), &w)?;
            let id = if a.per_class == 1 { spec.name.clone() } else { format!("{}-{j}", spec.name) };
            manifest.targets.push(tactile_service::targets::ManifestEntry {
                id,
                path: Path::new(&spec.name).join(&name),
                class: Some(spec.name.clone()),
            });
        }
    }
    write(&a.out.join("targets.toml"), manifest.to_toml())?;
    println!("classes={} files={} out={}", specs.len(), manifest.targets.len(), a.out.display());
    Ok(())
}

pub fn prepare(a: &PrepareArgs) -> Result<()> {
    let report = corpus::ingest_audio(&a.audio)?;
    for (path, why) in &report.rejected {
        eprintln!("skipped {}: {why}", path.display());
    }
    let waves: Vec<_> = report.items.iter().map(|i| i.waveform.clone()).collect();
    let labels: Vec<_> = report.items.iter().map(|i| i.label).collect();
    let data = corpus::build_dataset(&waves, &labels, &report.class_names, &a.profile.dataset())?;
    data.save(&a.out)?;
    println!(
        "segments={} shape={}x{} class_counts={:?} hash={}",
        data.len(),
        data.segment_shape().0,
        data.segment_shape().1,
        data.class_counts(),
        data.content_hash()
    );
    Ok(())
}

pub fn train(a: &TrainArgs) -> Result<String> {
    if !(a.train_fraction > 0.0 && a.train_fraction < 1.0) {
        return Err(CliError::usage("--train-fraction must lie in (0, 1)"));
    }
    let data = LabeledDataset::load(&a.dataset)?;
    let (train_idx, val_idx) = data.split(a.train_fraction, a.seed);
    let mut mc = a.profile.model(data.n_classes());
    mc.seed = a.seed;
    let mut model = TextureGan::for_dataset(mc, &data)?;
    let mut tc = a.profile.train();
    tc.seed = a.seed;
    if let Some(e) = a.epochs {
        tc.epochs = e;
    }
    let metrics = model.train(&data, &train_idx, &tc, |_, m| {
        eprintln!("epoch {} mse {:.5} ce {:.4} total {:.5}", m.epoch, m.mse, m.cross_entropy, m.total);
    })?;
    if let Some(path) = &a.metrics {
        let mut w = csv::Writer::from_path(path)?;
        for m in &metrics {
            w.serialize(m)?;
        }
        w.flush().map_err(CliError::io(path))?;
    }
    model.save_checkpoint(&a.out)?;
    let report = model.validate(&data, &val_idx)?;
    let hash = model.content_hash();
    println!("{}", serde_json::to_string(&report)?);
    println!("checkpoint={} hash={hash}", a.out.display());
    Ok(hash)
}

pub fn serve(a: &ServeArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => ServiceConfig::load(p)?,
        None => {
            let mut c = ServiceConfig::default();
            c.apply_env();
            c
        }
    };
    if let Some(v) = &a.bind {
        cfg.bind = v.clone();
    }
    if let Some(v) = &a.checkpoint {
        cfg.checkpoint = v.clone();
    }
    if let Some(v) = &a.dataset {
        cfg.dataset = v.clone();
    }
    if let Some(v) = &a.targets {
        cfg.targets = v.clone();
    }
    if let Some(v) = &a.data_dir {
        cfg.data_dir = v.clone();
    }
    if let Some(v) = a.preview_iterations {
        cfg.preview_iterations = v;
    }
    if let Some(v) = a.save_iterations {
        cfg.save_iterations = v;
    }
    if let Some(v) = a.seed {
        cfg.index_seed = v;
    }
    cfg.validate()?;
    let _ = tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .try_init();
    let manager = SessionManager::from_config(cfg)?;
    let rt = tokio::runtime::Runtime::new().map_err(|e| CliError::data(format!("runtime: {e}")))?;
    rt.block_on(tactile_service::serve(manager)).map_err(|e| CliError::data(format!("server: {e}")))
}

#[derive(Debug, Serialize)]
struct SessionRow {
    file: String,
    target: String,
    seed: u64,
    init_attempts: usize,
    init_exhausted: bool,
    initial_distance: f64,
    final_distance: f64,
    reduction: f64,
}

#[derive(Debug, Serialize)]
struct SimulationReport {
    tau_good: f64,
    tau_soso: f64,
    dis_avg: f64,
    step_scale: f64,
    sessions: Vec<SessionRow>,
    summary: eval::ConvergenceSummary,
}

/// Trace file name of session `i`.
pub fn trace_name(i: usize) -> String {
    format!("session-{i:03}.jsonl")
}

pub fn simulate(a: &SimulateArgs) -> Result<Vec<Trace>> {
    if a.sessions == 0 {
        return Err(CliError::usage("--sessions must be at least 1"));
    }
    let model = TextureGan::load_checkpoint(&a.checkpoint)?;
    let data = LabeledDataset::load(&a.dataset)?;
    let all: Vec<usize> = (0..data.len()).collect();
    let index = LatentIndex::from_model(&model, &data, &all)?;
    let dis_avg = init::estimate_avg_distance(&index, a.index_pairs, &mut ChaCha8Rng::seed_from_u64(a.seed))?;
    let init_cfg = InitConfig::from_avg_distance(dis_avg)?;
    let dss = DssConfig::with_unit(model.latent_dim(), init_cfg.step);

    let manifest = Manifest::load(&a.targets)?;
    if manifest.targets.is_empty() {
        return Err(CliError::data(format!("{}: no targets", a.targets.display())));
    }
    let (def_good, def_soso) = match a.profile {
        Profile::Toy => (simuser::TOY_TAU_GOOD, simuser::TOY_TAU_SOSO),
        Profile::Full => {
            let d = OracleUser::new(Vec::new());
            (d.tau_good, d.tau_soso)
        }
    };
    let (tau_good, tau_soso) = (a.tau_good.unwrap_or(def_good), a.tau_soso.unwrap_or(def_soso));
    let mut users = Vec::new();
    for t in &manifest.targets {
        let w = dsp::read_wav(&t.path)?;
        let seg = model.dataset.target_segment(&w, &model.norm_stats)?;
        let mut user = OracleUser::new(seg.into_magnitudes()).with_thresholds(tau_good, tau_soso);
        user.grid_points = a.grid_points;
        user.selection_noise = a.noise;
        user.validate()?;
        users.push((t.id.clone(), user));
    }

    create_dir(&a.out)?;
    let mut traces = Vec::new();
    let mut rows = Vec::new();
    for i in 0..a.sessions {
        let (target, user) = &users[i % users.len()];
        let seed = a.seed.wrapping_add(i as u64);
        let cfg = SessionConfig { max_iters: a.max_iters, max_init_attempts: a.max_init_attempts, seed, init: init_cfg, dss };
        let trace = simuser::run_session(user, &model, &index, &cfg)?;
        let file = trace_name(i);
        let path = a.out.join(&file);
        let mut f = fs::File::create(&path).map_err(CliError::io(&path))?;
        trace.write_jsonl(&mut f)?;
        let s = &trace.summary;
        rows.push(SessionRow {
            file,
            target: target.clone(),
            seed,
            init_attempts: s.init_attempts,
            init_exhausted: s.init_exhausted,
            initial_distance: s.initial_distance,
            final_distance: s.final_distance,
            reduction: s.reduction(),
        });
        traces.push(trace);
    }
    let summary = eval::convergence_summary(&traces)?;
    println!(
        "sessions={} median_reduction={:.4} monotone={} init_exhausted={}",
        summary.sessions, summary.median_reduction, summary.monotone_sessions, summary.init_exhausted
    );
    let report = SimulationReport { tau_good, tau_soso, dis_avg, step_scale: dss.step_scale, sessions: rows, summary };
    write(&a.out.join("summary.json"), serde_json::to_vec_pretty(&report)?)?;
    Ok(traces)
}

pub fn read_traces(dir: &Path) -> Result<Vec<Trace>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(CliError::io(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| {
            let f = fs::File::open(p).map_err(CliError::io(p))?;
            Trace::read_jsonl(BufReader::new(f)).map_err(|e| CliError::data(format!("{}: {e}", p.display())))
        })
        .collect()
}

pub fn evaluate(a: &EvaluateArgs) -> Result<()> {
    if a.traces.is_none() && a.records.is_none() && a.regression.is_none() {
        return Err(CliError::usage("nothing to evaluate: pass --traces, --records or --regression"));
    }
    create_dir(&a.out)?;
    let mut text = String::new();

    if let Some(dir) = &a.traces {
        let traces = read_traces(dir)?;
        let s = eval::convergence_summary(&traces)?;
        write(&a.out.join("convergence.json"), serde_json::to_vec_pretty(&s)?)?;
        text += &format!(
            "convergence: {} sessions, median reduction {:.4} (min {:.4}, max {:.4}), median d0 {:.4} -> {:.4}, monotone {}/{}, init exhausted {}\n",
            s.sessions,
            s.median_reduction,
            s.min_reduction,
            s.max_reduction,
            s.median_initial,
            s.median_final,
            s.monotone_sessions,
            s.sessions,
            s.init_exhausted
        );
        let curve: Vec<String> = s.mean_curve.iter().map(|d| format!("{d:.4}")).collect();
        text += &format!("mean distance by iteration: {}\n\n", curve.join(" "));
    }

    if let Some(path) = &a.records {
        let records = eval::read_records(path)?;
        let classes = a.classes.unwrap_or_else(|| records.iter().map(|r| r.actual.max(r.predicted) + 1).max().unwrap_or(0));
        let names: Vec<String> = (0..classes).map(|c| c.to_string()).collect();
        for (group, tag) in [(Group::Real, "real"), (Group::Generated, "generated")] {
            let subset: Vec<ClassificationRecord> = records.iter().copied().filter(|r| r.group == group).collect();
            if subset.is_empty() {
                continue;
            }
            let m = eval::confusion_matrix(&subset, classes)?;
            write(&a.out.join(format!("confusion_{tag}.csv")), eval::matrix_csv(&m, &names))?;
            let correct: usize = (0..classes).map(|c| m[c][c]).sum();
            text += &format!("{tag}: {} records, overall accuracy {:.4}\n", subset.len(), correct as f64 / subset.len() as f64);
            for (c, acc) in eval::per_class_accuracy(&m).iter().enumerate() {
                text += &match acc {
                    Some(v) => format!("  class {c}: {v:.4}\n"),
                    None => format!("  class {c}: no records\n"),
                };
            }
        }
        text += "\n";
    }

    if let Some(path) = &a.regression {
        let mut rdr = csv::Reader::from_path(path)?;
        let mut rows: Vec<RegressionRow> = rdr.deserialize().collect::<std::result::Result<_, _>>()?;
        if a.mad_k > 0.0 {
            let acc: Vec<f64> = rows.iter().map(|r| r.acc_g).collect();
            let keep = eval::outlier_filter(&acc, a.mad_k)?;
            text += &format!("outlier filter (k = {}): kept {} of {} rows\n", a.mad_k, keep.len(), rows.len());
            rows = keep.into_iter().map(|i| rows[i]).collect();
        }
        let full = eval::ols_interactions(&rows, a.intercept)?;
        text += &eval::format_regression("full interaction model", &full);
        let design = eval::interaction_design(&rows, a.intercept)?;
        let step = eval::stepwise_backward(&design, a.p_threshold)?;
        text += "\n";
        text += &eval::format_regression(&format!("backward elimination (p < {})", a.p_threshold), &step);
    }

    write(&a.out.join("report.txt"), &text)?;
    print!("{text}");
    Ok(())
}

/// Returns the spectral-convergence distance of the reconstruction.
pub fn reconstruct(a: &ReconstructArgs) -> Result<f64> {
    let cfg = a.profile.dataset();
    let input = dsp::read_wav(&a.input)?;
    let filtered = dsp::apply_bandpass(&input, cfg.bandpass_low_hz, cfg.bandpass_high_hz, cfg.bandpass_order)?;
    let spec = dsp::stft(&filtered, &cfg.stft)?.spectrogram;
    let init = match a.phase_init {
        PhaseInit::Zero => InitialPhase::Zero,
        PhaseInit::Random => InitialPhase::Random { seed: a.seed },
        PhaseInit::PeakLocked => InitialPhase::PeakLocked,
    };
    let out = dsp::griffin_lim_traced(&spec, a.iterations, &cfg.stft, init, input.sample_rate())?;
    dsp::write_wav(&a.output, &out.waveform)?;
    let d = dsp::spectral_convergence(&out.waveform, &spec, &cfg.stft)?;
    println!("spectral_convergence={d:.6}");
    Ok(d)
}
