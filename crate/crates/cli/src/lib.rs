//! Batch front door: config parsing, one subcommand per pipeline phase,
//! plot-ready exports. Every subcommand is deterministic given its config
//! and seeds (timing measurements excepted).

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use std::fmt;
use std::path::{Path, PathBuf};

use rislab_core::baselines::{
    build_fingerprint_db, evaluate_fingerprint, make_baseline_model, select_configs_dissimilarity,
    BaselineKind, DISSIMILARITY_CANDIDATES, FINGERPRINT_GRID_STEP,
};
use rislab_core::config::{ConfigError, RunConfig};
use rislab_core::io::{
    read_checkpoint, read_fingerprint_db, write_csv, write_fingerprint_db, ControlKind, IoError,
    FORMAT_VERSION,
};
use rislab_core::model::{unroll_episode_with_noise, ModelDims, RisControl};
use rislab_core::num_complex::Complex64;
use rislab_core::scene::Scene;
use rislab_core::training::{
    bench_timing, evaluate, generate_dataset, heatmap_for_config, load_dataset, train,
    LoadedDataset, Metrics, TrainError, TrainOptions,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_ERROR: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;

#[derive(Debug)]
pub enum CliError {
    Config(ConfigError),
    Train(TrainError),
    Io(IoError),
    Usage(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(e) => write!(f, "{e}"),
            CliError::Train(e) => write!(f, "{e}"),
            CliError::Io(e) => write!(f, "{e}"),
            CliError::Usage(m) => write!(f, "{m}"),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e)
    }
}
impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        CliError::Train(e)
    }
}
impl From<IoError> for CliError {
    fn from(e: IoError) -> Self {
        CliError::Io(e)
    }
}
impl From<rislab_core::propagation::PropagationError> for CliError {
    fn from(e: rislab_core::propagation::PropagationError) -> Self {
        CliError::Train(TrainError::Propagation(e))
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Usage(_) => EXIT_CONFIG,
            CliError::Train(TrainError::Diverged { .. }) => EXIT_DIVERGED,
            CliError::Train(TrainError::Invalid(_)) => EXIT_CONFIG,
            _ => EXIT_ERROR,
        }
    }
}

#[derive(Parser)]
#[command(
    name = "rislab",
    version,
    about = "Desk-scale lab for RIS-aided uplink localization"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Overrides applied to the loaded config before anything else runs; the
/// recorded config digest always reflects the effective values.
#[derive(Args, Debug, Clone, Default)]
pub struct Overrides {
    /// Sensing stages T.
    #[arg(long)]
    pub stages: Option<usize>,
    /// Pilots per stage L.
    #[arg(long)]
    pub per_stage: Option<usize>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub hidden_size: Option<usize>,
    /// Weight-init / calibration seed.
    #[arg(long)]
    pub init_seed: Option<u64>,
    /// Pilot-noise seed.
    #[arg(long)]
    pub noise_seed: Option<u64>,
    /// Minibatch-sampling seed.
    #[arg(long)]
    pub data_seed: Option<u64>,
}

impl Overrides {
    fn apply(&self, cfg: &mut RunConfig) {
        if let Some(v) = self.stages {
            cfg.pilots.stages = v;
        }
        if let Some(v) = self.per_stage {
            cfg.pilots.per_stage = v;
        }
        if let Some(v) = self.iterations {
            cfg.train.iterations = v;
        }
        if let Some(v) = self.batch_size {
            cfg.train.batch_size = v;
        }
        if let Some(v) = self.learning_rate {
            cfg.train.learning_rate = v;
        }
        if let Some(v) = self.hidden_size {
            cfg.model.hidden_size = v;
        }
        if let Some(v) = self.init_seed {
            cfg.seeds.init = v;
        }
        if let Some(v) = self.noise_seed {
            cfg.seeds.noise = v;
        }
        if let Some(v) = self.data_seed {
            cfg.seeds.data = v;
        }
    }
}

#[derive(Subcommand)]
pub enum Command {
    /// Synthesize a dataset of UE positions and traced path parameters.
    GenDataset {
        #[arg(long)]
        config: PathBuf,
        /// Free-form split label stored in the header ("train", "val", ...).
        #[arg(long)]
        split: String,
        #[arg(long)]
        count: u64,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the adaptive model; writes best/last checkpoints and an NDJSON
    /// metric log into --out-dir.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        train_set: PathBuf,
        #[arg(long)]
        val_set: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Continue from a snapshot with optimizer state.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many steps this invocation (snapshot stays
        /// resumable toward the full iteration target).
        #[arg(long)]
        halt_after: Option<u64>,
        #[arg(long)]
        quiet: bool,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Evaluate a checkpoint on a dataset: metrics JSON plus optional
    /// error-CDF CSV.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        cdf: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Run one noiseless episode and export the received-power map of every
    /// emitted configuration (T*L CSV files).
    Heatmap {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Transmitter position "x,y" (defaults to the region center).
        #[arg(long)]
        ue: Option<String>,
        #[arg(long, default_value_t = 0.5)]
        grid_step: f64,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Fingerprint baseline: select/build the RSS database, then match
    /// noisy queries from a test dataset.
    BaselineFingerprint {
        #[arg(long)]
        config: PathBuf,
        /// Database file; reused if present, built and saved otherwise.
        #[arg(long)]
        db: PathBuf,
        /// Test dataset; omit to only build the database.
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        cdf: Option<PathBuf>,
        /// Configurations in the database (default: the pilot budget T*L).
        #[arg(long)]
        set_size: Option<usize>,
        #[arg(long, default_value_t = DISSIMILARITY_CANDIDATES)]
        candidates: usize,
        #[arg(long, default_value_t = FINGERPRINT_GRID_STEP)]
        grid_step: f64,
        #[arg(long, default_value_t = 3)]
        k: usize,
        #[arg(long)]
        selection_seed: Option<u64>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Train the frozen random-configuration variant (parameter count
    /// matched to the adaptive model).
    BaselineRandomLstm {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        train_set: PathBuf,
        #[arg(long)]
        val_set: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Seed for the frozen configurations (default: seeds.init).
        #[arg(long)]
        control_seed: Option<u64>,
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        halt_after: Option<u64>,
        #[arg(long)]
        quiet: bool,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Per-iteration wall time and serial cell depth across (T, L) combos.
    BenchTiming {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated "TxL" list (default: the full grid
        /// {1,2,3,6,9,18} x {1,2,3,6}).
        #[arg(long)]
        combos: Option<String>,
        #[arg(long, default_value_t = 16)]
        batch: usize,
        #[arg(long, default_value_t = 3)]
        reps: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        overrides: Overrides,
    },
}

pub fn main_entry() -> i32 {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn load_config(path: &Path, overrides: &Overrides) -> Result<(RunConfig, Scene), CliError> {
    let mut cfg = RunConfig::load(path)?;
    overrides.apply(&mut cfg);
    cfg.validate()?;
    let scene = cfg.scene()?;
    Ok((cfg, scene))
}

pub fn run(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::GenDataset {
            config,
            split,
            count,
            seed,
            out,
        } => {
            let (_, scene) = load_config(&config, &Overrides::default())?;
            if count == 0 {
                return Err(CliError::Usage("--count must be at least 1".into()));
            }
            generate_dataset(&scene, count, seed, &split, &out)?;
            println!(
                "wrote {count} {split} records to {} (scene {})",
                out.display(),
                scene.scene_hash()
            );
            Ok(())
        }
        Command::Train {
            config,
            train_set,
            val_set,
            out_dir,
            resume,
            halt_after,
            quiet,
            overrides,
        } => run_training(
            &config, &overrides, &train_set, &val_set, &out_dir, resume, halt_after, quiet, None,
        ),
        Command::BaselineRandomLstm {
            config,
            train_set,
            val_set,
            out_dir,
            control_seed,
            resume,
            halt_after,
            quiet,
            overrides,
        } => run_training(
            &config,
            &overrides,
            &train_set,
            &val_set,
            &out_dir,
            resume,
            halt_after,
            quiet,
            Some(control_seed),
        ),
        Command::Eval {
            config,
            checkpoint,
            dataset,
            out,
            cdf,
            overrides,
        } => run_eval(&config, &overrides, &checkpoint, &dataset, &out, cdf.as_deref()),
        Command::Heatmap {
            config,
            checkpoint,
            out_dir,
            ue,
            grid_step,
            overrides,
        } => run_heatmap(&config, &overrides, &checkpoint, &out_dir, ue.as_deref(), grid_step),
        Command::BaselineFingerprint {
            config,
            db,
            dataset,
            out,
            cdf,
            set_size,
            candidates,
            grid_step,
            k,
            selection_seed,
            overrides,
        } => run_fingerprint(FingerprintArgs {
            config,
            db,
            dataset,
            out,
            cdf,
            set_size,
            candidates,
            grid_step,
            k,
            selection_seed,
            overrides,
        }),
        Command::BenchTiming {
            config,
            out,
            combos,
            batch,
            reps,
            seed,
            overrides,
        } => run_bench(&config, &overrides, &out, combos.as_deref(), batch, reps, seed),
    }
}

// ---------------------------------------------------------------------------
// train / baseline-random-lstm

#[allow(clippy::too_many_arguments)]
fn run_training(
    config: &Path,
    overrides: &Overrides,
    train_set: &Path,
    val_set: &Path,
    out_dir: &Path,
    resume: Option<PathBuf>,
    halt_after: Option<u64>,
    quiet: bool,
    frozen_control_seed: Option<Option<u64>>,
) -> Result<(), CliError> {
    let (cfg, scene) = load_config(config, overrides)?;
    std::fs::create_dir_all(out_dir).map_err(|e| {
        CliError::Usage(format!("cannot create {}: {e}", out_dir.display()))
    })?;

    let proposed = ModelDims::from_config(&cfg, scene.ris.num_elements());
    let (dims, control) = match frozen_control_seed {
        None => (proposed, RisControl::Learned),
        Some(seed) => {
            let b = make_baseline_model(
                BaselineKind::RandomRisLstm,
                &proposed,
                seed.unwrap_or(cfg.seeds.init),
            )?;
            (b.dims, b.control)
        }
    };

    let metrics_path = out_dir.join("metrics.ndjson");
    let mut opts = TrainOptions::new(
        cfg.train.iterations as u64,
        cfg.train.batch_size,
        cfg.train.learning_rate,
    );
    opts.data_seed = cfg.seeds.data;
    opts.noise_seed = cfg.seeds.noise;
    opts.init_seed = cfg.seeds.init;
    opts.config_digest = cfg.digest();
    opts.metrics_path = Some(metrics_path.clone());
    opts.best_checkpoint_path = Some(out_dir.join("best.ckpt"));
    opts.last_checkpoint_path = Some(out_dir.join("last.ckpt"));
    opts.halt_after = halt_after;
    opts.quiet = quiet;
    match resume {
        Some(p) => opts.resume = Some(read_checkpoint(&p)?),
        None => {
            // A fresh run owns its metric log.
            if metrics_path.exists() {
                std::fs::remove_file(&metrics_path)
                    .map_err(|e| CliError::Usage(format!("cannot reset metric log: {e}")))?;
            }
        }
    }

    // Provenance: the effective config next to the artifacts.
    std::fs::write(
        out_dir.join("config.json"),
        serde_json::to_string_pretty(&cfg).expect("config serializes") + "\n",
    )
    .map_err(|e| CliError::Usage(format!("cannot write config copy: {e}")))?;

    let train_data = load_dataset(train_set, &scene)?;
    let val_data = load_dataset(val_set, &scene)?;
    if !quiet {
        eprintln!(
            "training {} model: T={} L={} M={} H={} ({} params), {} train / {} val records",
            if control.is_learned() { "adaptive" } else { "frozen-random" },
            dims.stages,
            dims.pilots_per_stage,
            dims.elements,
            dims.hidden,
            rislab_core::baselines::param_count_for(&dims, control.is_learned()),
            train_data.len(),
            val_data.len(),
        );
    }

    let outcome = train(&scene, &dims, &control, &train_data, &val_data, &opts)?;
    println!(
        "done: best val rmse {:.4} m at iteration {} ({} log points); artifacts in {}",
        outcome.best_val_rmse,
        outcome.best_iteration,
        outcome.history.len(),
        out_dir.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// eval

#[derive(Serialize)]
struct CheckpointInfo {
    iteration: u64,
    config_digest: String,
    control: ControlKind,
    stages: usize,
    pilots_per_stage: usize,
    elements: usize,
}

#[derive(Serialize)]
struct DatasetInfo {
    path: String,
    kind: String,
    seed: u64,
    count: usize,
}

#[derive(Serialize)]
struct MetricsOut {
    count: usize,
    rmse_m: f64,
    median_m: f64,
    p90_m: f64,
}

#[derive(Serialize)]
struct EvalReport {
    format_version: u32,
    kind: &'static str,
    config_digest: String,
    scene_hash: String,
    noise_seed: u64,
    checkpoint: Option<CheckpointInfo>,
    fingerprint: Option<FingerprintInfo>,
    dataset: DatasetInfo,
    metrics: MetricsOut,
}

#[derive(Serialize)]
struct FingerprintInfo {
    k: usize,
    set_size: usize,
    grid_step: f64,
    blocks: usize,
    selection_seed: u64,
}

fn metrics_out(m: &Metrics) -> MetricsOut {
    MetricsOut {
        count: m.count,
        rmse_m: m.rmse,
        median_m: m.median,
        p90_m: m.p90,
    }
}

fn write_report(path: &Path, report: &EvalReport) -> Result<(), CliError> {
    let json = serde_json::to_string_pretty(report).expect("report serializes");
    std::fs::write(path, json + "\n")
        .map_err(|e| CliError::Usage(format!("cannot write {}: {e}", path.display())))
}

fn write_cdf(path: &Path, metrics: &Metrics, comments: &[String]) -> Result<(), CliError> {
    let refs: Vec<&str> = comments.iter().map(|s| s.as_str()).collect();
    write_csv(path, &refs, &["error_m", "cdf"], &metrics.cdf_rows())?;
    Ok(())
}

fn dataset_info(path: &Path, data: &LoadedDataset) -> DatasetInfo {
    DatasetInfo {
        path: path.display().to_string(),
        kind: data.kind.clone(),
        seed: data.seed,
        count: data.len(),
    }
}

fn run_eval(
    config: &Path,
    overrides: &Overrides,
    checkpoint: &Path,
    dataset: &Path,
    out: &Path,
    cdf: Option<&Path>,
) -> Result<(), CliError> {
    let (cfg, scene) = load_config(config, overrides)?;
    let ckpt = read_checkpoint(checkpoint)?;
    if ckpt.meta.scene_hash != scene.scene_hash() {
        return Err(CliError::Usage(format!(
            "checkpoint was trained on scene {}, config builds {}",
            ckpt.meta.scene_hash,
            scene.scene_hash()
        )));
    }
    let data = load_dataset(dataset, &scene)?;
    let noise_seed = cfg.seeds.noise;
    let metrics = evaluate(&scene, &ckpt.params, &ckpt.control, &data, noise_seed);

    let report = EvalReport {
        format_version: FORMAT_VERSION,
        kind: "eval",
        config_digest: cfg.digest(),
        scene_hash: scene.scene_hash(),
        noise_seed,
        checkpoint: Some(CheckpointInfo {
            iteration: ckpt.meta.iteration,
            config_digest: ckpt.meta.config_digest.clone(),
            control: ckpt.meta.control,
            stages: ckpt.meta.dims.stages,
            pilots_per_stage: ckpt.meta.dims.pilots_per_stage,
            elements: ckpt.meta.dims.elements,
        }),
        fingerprint: None,
        dataset: dataset_info(dataset, &data),
        metrics: metrics_out(&metrics),
    };
    write_report(out, &report)?;
    if let Some(p) = cdf {
        write_cdf(
            p,
            &metrics,
            &[
                "localization error CDF over the test set".to_string(),
                format!("config_digest {}", report.config_digest),
                format!("noise_seed {noise_seed}"),
            ],
        )?;
    }
    println!(
        "rmse {:.4} m  median {:.4} m  p90 {:.4} m over {} records -> {}",
        metrics.rmse,
        metrics.median,
        metrics.p90,
        metrics.count,
        out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// heatmap

fn parse_ue(scene: &Scene, spec: Option<&str>) -> Result<[f64; 3], CliError> {
    let z = scene.ue_region.z;
    match spec {
        None => {
            let c = scene.ue_region.center();
            Ok([c[0], c[1], z])
        }
        Some(s) => {
            let parts: Vec<&str> = s.split(',').collect();
            if parts.len() != 2 {
                return Err(CliError::Usage(format!("--ue expects \"x,y\", got {s:?}")));
            }
            let x: f64 = parts[0]
                .trim()
                .parse()
                .map_err(|_| CliError::Usage(format!("bad --ue x: {:?}", parts[0])))?;
            let y: f64 = parts[1]
                .trim()
                .parse()
                .map_err(|_| CliError::Usage(format!("bad --ue y: {:?}", parts[1])))?;
            Ok([x, y, z])
        }
    }
}

fn run_heatmap(
    config: &Path,
    overrides: &Overrides,
    checkpoint: &Path,
    out_dir: &Path,
    ue: Option<&str>,
    grid_step: f64,
) -> Result<(), CliError> {
    if !(grid_step > 0.0) {
        return Err(CliError::Usage("--grid-step must be positive".into()));
    }
    let (cfg, scene) = load_config(config, overrides)?;
    let ckpt = read_checkpoint(checkpoint)?;
    if ckpt.meta.scene_hash != scene.scene_hash() {
        return Err(CliError::Usage(format!(
            "checkpoint was trained on scene {}, config builds {}",
            ckpt.meta.scene_hash,
            scene.scene_hash()
        )));
    }
    std::fs::create_dir_all(out_dir)
        .map_err(|e| CliError::Usage(format!("cannot create {}: {e}", out_dir.display())))?;

    let ue = parse_ue(&scene, ue)?;
    let channel = rislab_core::model::CompactChannel::from(
        &rislab_core::propagation::assemble_channels(ue, &scene)?,
    );
    // Noiseless episode: the trajectory depends only on the channel.
    let dims = &ckpt.params.dims;
    let zero_noise =
        vec![vec![Complex64::new(0.0, 0.0); dims.pilots_per_stage]; dims.stages];
    let episode =
        unroll_episode_with_noise(&channel, &ckpt.params, &ckpt.control, &scene.radio, &zero_noise);

    let grid = scene.ue_region.grid(grid_step);
    let mut files = 0usize;
    for (t, stage) in episode.configs.iter().enumerate() {
        for (l, theta) in stage.iter().enumerate() {
            let map = heatmap_for_config(&scene, &grid, theta)?;
            let rows: Vec<Vec<f64>> = grid
                .centers
                .iter()
                .zip(&map)
                .map(|(c, &v)| vec![c[0], c[1], v])
                .collect();
            let comments = vec![
                "received power map (dBm) of one probing configuration".to_string(),
                "quantity: hypothetical unblocked single-bounce transmitter->surface->receiver cascade, evaluated at each grid center; in-room multipath and the direct term are excluded by construction".to_string(),
                format!("stage {t} of {}, pilot {l} of {}", dims.stages, dims.pilots_per_stage),
                format!("episode transmitter at x={} y={} (noiseless), estimate x={:.4} y={:.4}", ue[0], ue[1], episode.estimate[0], episode.estimate[1]),
                format!("grid: {} x {} blocks, step {} m", grid.nx, grid.ny, grid.step),
                format!("config_digest {}", cfg.digest()),
                format!("checkpoint iteration {}", ckpt.meta.iteration),
            ];
            let refs: Vec<&str> = comments.iter().map(|s| s.as_str()).collect();
            let path = out_dir.join(format!("heatmap_stage{t}_pilot{l}.csv"));
            write_csv(&path, &refs, &["x_m", "y_m", "rss_dbm"], &rows)?;
            files += 1;
        }
    }
    println!(
        "wrote {files} heatmap grids ({} x {} blocks each) to {}",
        grid.nx,
        grid.ny,
        out_dir.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// baseline-fingerprint

struct FingerprintArgs {
    config: PathBuf,
    db: PathBuf,
    dataset: Option<PathBuf>,
    out: Option<PathBuf>,
    cdf: Option<PathBuf>,
    set_size: Option<usize>,
    candidates: usize,
    grid_step: f64,
    k: usize,
    selection_seed: Option<u64>,
    overrides: Overrides,
}

fn run_fingerprint(args: FingerprintArgs) -> Result<(), CliError> {
    let (cfg, scene) = load_config(&args.config, &args.overrides)?;
    let selection_seed = args.selection_seed.unwrap_or(cfg.seeds.init);

    let db = if args.db.exists() {
        let db = read_fingerprint_db(&args.db)?;
        if db.scene_hash != scene.scene_hash() {
            return Err(CliError::Usage(format!(
                "database {} was built for scene {}, config builds {}",
                args.db.display(),
                db.scene_hash,
                scene.scene_hash()
            )));
        }
        println!(
            "reusing database {}: {} blocks x {} configs",
            args.db.display(),
            db.block_centers.len(),
            db.configs.len()
        );
        db
    } else {
        let set_size = args
            .set_size
            .unwrap_or(cfg.pilots.stages * cfg.pilots.per_stage);
        let selection = select_configs_dissimilarity(
            &scene,
            set_size,
            args.candidates,
            args.grid_step,
            selection_seed,
        )?;
        println!(
            "selected config set {} of {} (dissimilarity {:.4} dB)",
            selection.chosen,
            args.candidates,
            selection.scores[selection.chosen]
        );
        let db = build_fingerprint_db(&scene, &selection.configs, args.grid_step, selection_seed)?;
        write_fingerprint_db(&args.db, &db)?;
        println!(
            "built database: {} blocks x {} configs -> {}",
            db.block_centers.len(),
            db.configs.len(),
            args.db.display()
        );
        db
    };

    let Some(dataset) = args.dataset else {
        return Ok(());
    };
    let out = args.out.ok_or_else(|| {
        CliError::Usage("--out is required when --dataset is given".into())
    })?;
    let data = load_dataset(&dataset, &scene)?;
    let noise_seed = cfg.seeds.noise;
    let metrics = evaluate_fingerprint(&scene, &db, &data, args.k, noise_seed)?;

    let report = EvalReport {
        format_version: FORMAT_VERSION,
        kind: "fingerprint",
        config_digest: cfg.digest(),
        scene_hash: scene.scene_hash(),
        noise_seed,
        checkpoint: None,
        fingerprint: Some(FingerprintInfo {
            k: args.k,
            set_size: db.configs.len(),
            grid_step: db.grid_step,
            blocks: db.block_centers.len(),
            selection_seed: db.seed,
        }),
        dataset: dataset_info(&dataset, &data),
        metrics: metrics_out(&metrics),
    };
    write_report(&out, &report)?;
    if let Some(p) = args.cdf {
        write_cdf(
            &p,
            &metrics,
            &[
                "fingerprint localization error CDF".to_string(),
                format!("config_digest {}", report.config_digest),
                format!("k {} noise_seed {noise_seed}", args.k),
            ],
        )?;
    }
    println!(
        "fingerprint rmse {:.4} m  median {:.4} m  p90 {:.4} m over {} records -> {}",
        metrics.rmse,
        metrics.median,
        metrics.p90,
        metrics.count,
        out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// bench-timing

fn parse_combos(spec: Option<&str>) -> Result<Vec<(usize, usize)>, CliError> {
    match spec {
        None => {
            let mut combos = Vec::new();
            for &t in &[1usize, 2, 3, 6, 9, 18] {
                for &l in &[1usize, 2, 3, 6] {
                    combos.push((t, l));
                }
            }
            Ok(combos)
        }
        Some(s) => s
            .split(',')
            .map(|p| {
                let mut it = p.trim().split('x');
                let t = it.next().and_then(|v| v.parse().ok());
                let l = it.next().and_then(|v| v.parse().ok());
                match (t, l, it.next()) {
                    (Some(t), Some(l), None) if t > 0 && l > 0 => Ok((t, l)),
                    _ => Err(CliError::Usage(format!(
                        "bad combo {p:?}; expected \"TxL\" like \"3x6\""
                    ))),
                }
            })
            .collect(),
    }
}

fn run_bench(
    config: &Path,
    overrides: &Overrides,
    out: &Path,
    combos: Option<&str>,
    batch: usize,
    reps: usize,
    seed: Option<u64>,
) -> Result<(), CliError> {
    let (cfg, scene) = load_config(config, overrides)?;
    let combos = parse_combos(combos)?;
    if batch == 0 || reps == 0 {
        return Err(CliError::Usage("--batch and --reps must be at least 1".into()));
    }
    let rows = bench_timing(
        &scene,
        &combos,
        cfg.model.hidden_size,
        batch,
        reps,
        seed.unwrap_or(cfg.seeds.init),
    )?;
    println!("{:>6} {:>6} {:>12} {:>16}", "T", "L", "serial_depth", "ms_per_iter");
    for r in &rows {
        println!(
            "{:>6} {:>6} {:>12} {:>16.3}",
            r.stages, r.pilots_per_stage, r.serial_depth, r.wall_ms_per_iter
        );
    }
    let csv_rows: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| {
            vec![
                r.stages as f64,
                r.pilots_per_stage as f64,
                r.serial_depth as f64,
                r.wall_ms_per_iter,
            ]
        })
        .collect();
    let comments = vec![
        "forward+backward wall time per iteration; serial_depth counts serially dependent recurrent-cell evaluations".to_string(),
        format!("hidden {} batch {batch} reps {reps}", cfg.model.hidden_size),
    ];
    let refs: Vec<&str> = comments.iter().map(|s| s.as_str()).collect();
    write_csv(
        out,
        &refs,
        &["stages", "pilots_per_stage", "serial_depth", "wall_ms_per_iter"],
        &csv_rows,
    )?;
    println!("wrote timing table to {}", out.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn combo_parsing() {
        assert_eq!(parse_combos(Some("3x6")).unwrap(), vec![(3, 6)]);
        assert_eq!(
            parse_combos(Some("1x1, 18x1")).unwrap(),
            vec![(1, 1), (18, 1)]
        );
        assert_eq!(parse_combos(None).unwrap().len(), 24);
        assert!(parse_combos(Some("3x")).is_err());
        assert!(parse_combos(Some("3x6x2")).is_err());
        assert!(parse_combos(Some("0x6")).is_err());
    }

    #[test]
    fn exit_codes_map_by_error_class() {
        let usage = CliError::Usage("x".into());
        assert_eq!(usage.exit_code(), EXIT_CONFIG);
        let div = CliError::Train(TrainError::Diverged {
            iteration: 3,
            loss: f64::NAN,
        });
        assert_eq!(div.exit_code(), EXIT_DIVERGED);
        let inval = CliError::Train(TrainError::Invalid("x".into()));
        assert_eq!(inval.exit_code(), EXIT_CONFIG);
    }

    #[test]
    fn cli_parses_typical_invocations() {
        use clap::Parser;
        let cli = Cli::try_parse_from([
            "rislab",
            "gen-dataset",
            "--config",
            "c.json",
            "--split",
            "train",
            "--count",
            "10",
            "--seed",
            "1",
            "--out",
            "d.ds",
        ])
        .unwrap();
        assert!(matches!(cli.command, Command::GenDataset { count: 10, .. }));

        let cli = Cli::try_parse_from([
            "rislab",
            "train",
            "--config",
            "c.json",
            "--train-set",
            "a.ds",
            "--val-set",
            "b.ds",
            "--out-dir",
            "runs/x",
            "--stages",
            "6",
            "--per-stage",
            "3",
        ])
        .unwrap();
        match cli.command {
            Command::Train { overrides, .. } => {
                assert_eq!(overrides.stages, Some(6));
                assert_eq!(overrides.per_stage, Some(3));
            }
            _ => panic!("expected train"),
        }

        assert!(Cli::try_parse_from(["rislab", "train", "--config", "c.json"]).is_err());
    }
}
