//! Command-line entry points: dataset generation, training, evaluation,
//! swarm simulation, method comparison tables and qualitative dumps.
//!
//! Every subcommand is deterministic given its flags and seeds; rerunning
//! a command overwrites its outputs with identical bytes. Run directories
//! carry a manifest recording the resolved configuration and the SHA-256
//! of every artifact written.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};

use crate::backbone::BackboneConfig;
use crate::config::{resolve, KeyValueConfig};
use crate::error::{Error, Result};
use crate::metrics::{self, MethodRow};
use crate::scenegen::{self, Dataset, GenConfig, Preset};
use crate::swarm::{bandwidth_report, run_round, SwarmConfig, Topology};
use crate::tensor::{read_checkpoint, write_checkpoint};
use crate::train::{self, fit, Hyperparams, Method, Model, ModelConfig};
use crate::viz;

#[derive(Parser)]
#[command(
    name = "swarmfuse",
    about = "Multi-agent collaborative perception: generate scenes, train, evaluate, simulate swarms",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a multi-view dataset.
    Gen(GenArgs),
    /// Train a method on a dataset and write a run directory.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset (occluded-region metrics).
    Eval(EvalArgs),
    /// Simulate distributed rounds with message drops and report bandwidth.
    Swarm(SwarmArgs),
    /// Combine per-run metrics into one comparison table.
    Report(ReportArgs),
    /// Write qualitative images for one sample.
    Dump(DumpArgs),
}

#[derive(Args)]
struct CommonConfig {
    /// Plain-text key=value config file; flags override file values.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct GenArgs {
    #[command(flatten)]
    common: CommonConfig,
    /// Placement preset: sequence | cross.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    agents: Option<usize>,
    /// Square image extent in pixels.
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    world: Option<usize>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    shapes: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: CommonConfig,
    #[arg(long)]
    method: String,
    /// Training dataset path.
    #[arg(long)]
    data: PathBuf,
    /// Validation dataset path; defaults to a 10% tail split of --data.
    #[arg(long)]
    val: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f32>,
    #[arg(long)]
    momentum: Option<f32>,
    #[arg(long)]
    w_seg: Option<f32>,
    #[arg(long)]
    w_corr: Option<f32>,
    #[arg(long)]
    tau: Option<f32>,
    #[arg(long)]
    feature_dim: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory for checkpoint, log and manifest.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: CommonConfig,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Split name used in output file names (e.g. sequence, cross).
    #[arg(long)]
    split: String,
    #[arg(long)]
    method: String,
    #[arg(long)]
    tau: Option<f32>,
    /// Output directory; defaults to the checkpoint's directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SwarmArgs {
    #[command(flatten)]
    common: CommonConfig,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    agents: Option<usize>,
    /// fully_connected | ring | star.
    #[arg(long)]
    topology: Option<String>,
    /// Per-message drop probability.
    #[arg(long)]
    drop: Option<f64>,
    /// Number of samples to run (default: all).
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    tau: Option<f32>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Directory containing run directories with metrics CSVs.
    #[arg(long)]
    runs: PathBuf,
    /// Split whose metrics to collect (matches metrics_<split>.csv).
    #[arg(long)]
    split: String,
    /// Optional file to write the combined table to.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DumpArgs {
    #[command(flatten)]
    common: CommonConfig,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    method: String,
    /// Sample index to render.
    #[arg(long)]
    sample: usize,
    #[arg(long)]
    tau: Option<f32>,
    #[arg(long)]
    out: PathBuf,
}

/// Run the CLI on explicit arguments and return the process exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<String>,
{
    init_thread_pool();
    let argv: Vec<String> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn init_thread_pool() {
    if let Ok(raw) = std::env::var("SWARMFUSE_THREADS") {
        if let Ok(n) = raw.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Swarm(a) => cmd_swarm(a),
        Command::Report(a) => cmd_report(a),
        Command::Dump(a) => cmd_dump(a),
    }
}

fn load_config(common: &CommonConfig) -> Result<Option<KeyValueConfig>> {
    common.common_file().map(KeyValueConfig::from_file).transpose()
}

impl CommonConfig {
    fn common_file(&self) -> Option<&Path> {
        self.config.as_deref()
    }
}

fn sha256_hex(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

fn write_manifest(dir: &Path, entries: &[(&str, String)], artifacts: &[PathBuf]) -> Result<()> {
    let mut text = String::from("# swarmfuse run manifest\n");
    for (k, v) in entries {
        text.push_str(&format!("{k} = {v}\n"));
    }
    for artifact in artifacts {
        let name = artifact
            .file_name()
            .map(|n| n.to_string_lossy().to_string())
            .unwrap_or_default();
        text.push_str(&format!("sha256_{name} = {}\n", sha256_hex(artifact)?));
    }
    std::fs::write(dir.join("manifest.txt"), text)?;
    Ok(())
}

fn load_dataset(path: &Path) -> Result<Dataset> {
    scenegen::read_dataset(path)
}

// ── gen ───────────────────────────────────────────────────────────────────

fn cmd_gen(a: GenArgs) -> Result<()> {
    let file = load_config(&a.common)?;
    let cfgr = file.as_ref();
    let preset: Preset = resolve(a.preset, cfgr, "preset", "sequence".to_string())?.parse()?;
    let seed = resolve(a.seed, cfgr, "seed", 0u64)?;
    let samples = resolve(a.samples, cfgr, "samples", 100usize)?;
    let default_agents = match preset {
        Preset::Sequence => 2,
        Preset::Cross => 6,
    };
    let agents = resolve(a.agents, cfgr, "agents", default_agents)?;
    let size = resolve(a.size, cfgr, "size", 32usize)?;
    let world = resolve(a.world, cfgr, "world", (4 * size).max(128))?;
    let classes = resolve(a.classes, cfgr, "classes", 5usize)?;
    let shapes = resolve(a.shapes, cfgr, "shapes", 12usize)?;

    let gen = GenConfig {
        height: size,
        width: size,
        world_size: world,
        num_classes: classes,
        num_shapes: shapes,
        ..GenConfig::preset_defaults(preset, seed, samples, agents)
    };
    let ds = scenegen::generate_dataset(&gen)?;
    scenegen::write_dataset(&a.out, &ds)?;
    println!(
        "wrote {} samples ({} agents, {}x{}) to {}",
        ds.samples.len(),
        agents,
        size,
        size,
        a.out.display()
    );
    Ok(())
}

// ── train ─────────────────────────────────────────────────────────────────

fn cmd_train(a: TrainArgs) -> Result<()> {
    let file = load_config(&a.common)?;
    let cfgr = file.as_ref();
    let method: Method = a.method.parse()?;
    let seed = resolve(a.seed, cfgr, "seed", 0u64)?;
    let hyper = Hyperparams {
        epochs: resolve(a.epochs, cfgr, "epochs", Hyperparams::default().epochs)?,
        batch_size: resolve(a.batch, cfgr, "batch", Hyperparams::default().batch_size)?,
        lr: resolve(a.lr, cfgr, "lr", Hyperparams::default().lr)?,
        momentum: resolve(a.momentum, cfgr, "momentum", Hyperparams::default().momentum)?,
        w_seg: resolve(a.w_seg, cfgr, "w_seg", Hyperparams::default().w_seg)?,
        w_corr: resolve(a.w_corr, cfgr, "w_corr", Hyperparams::default().w_corr)?,
    };
    let tau = resolve(a.tau, cfgr, "tau", 1.0f32)?;
    let feature_dim = resolve(a.feature_dim, cfgr, "feature_dim", 16usize)?;

    let data = load_dataset(&a.data)?;
    let (train_ds, val_ds) = match &a.val {
        Some(path) => (data, load_dataset(path)?),
        None => data.split_tail(0.1),
    };

    let model_cfg = ModelConfig {
        backbone: BackboneConfig {
            height: train_ds.config.height,
            width: train_ds.config.width,
            stride: train_ds.config.stride,
            feature_dim,
            num_classes: train_ds.config.num_classes,
            ..BackboneConfig::default()
        },
        tau,
    };

    std::fs::create_dir_all(&a.out)?;
    let result = fit(&train_ds, &val_ds, method, &model_cfg, &hyper, seed)?;
    let ckpt = a.out.join("checkpoint.swfz");
    write_checkpoint(&ckpt, &result.model.params)?;
    let log_path = a.out.join("train_log.csv");
    std::fs::write(&log_path, train::log_to_csv(&result.log))?;

    write_manifest(
        &a.out,
        &[
            ("command", "train".into()),
            ("method", method.to_string()),
            ("data", a.data.display().to_string()),
            ("seed", seed.to_string()),
            ("epochs", hyper.epochs.to_string()),
            ("batch", hyper.batch_size.to_string()),
            ("lr", hyper.lr.to_string()),
            ("momentum", hyper.momentum.to_string()),
            ("w_seg", hyper.w_seg.to_string()),
            ("w_corr", hyper.w_corr.to_string()),
            ("tau", tau.to_string()),
            ("feature_dim", feature_dim.to_string()),
            ("best_epoch", result.best_epoch.to_string()),
            ("diverged", result.diverged.to_string()),
        ],
        &[ckpt, log_path],
    )?;
    if result.diverged {
        return Err(Error::NonFinite(format!(
            "training diverged; best checkpoint from epoch {} kept in {}",
            result.best_epoch,
            a.out.display()
        )));
    }
    let last = result.log.last();
    println!(
        "trained {method}: best epoch {} (val mIoU {:.4}); run dir {}",
        result.best_epoch,
        last.map(|l| l.val_miou).unwrap_or(0.0),
        a.out.display()
    );
    Ok(())
}

// ── eval ──────────────────────────────────────────────────────────────────

fn load_model(method: &str, checkpoint: &Path, ds: &Dataset, tau: f32) -> Result<Model> {
    let method: Method = method.parse()?;
    let params = read_checkpoint(checkpoint)?;
    train::model_from_checkpoint(method, params, &ds.config, tau)
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let file = load_config(&a.common)?;
    let tau = resolve(a.tau, file.as_ref(), "tau", 1.0f32)?;
    let ds = load_dataset(&a.data)?;
    let model = load_model(&a.method, &a.checkpoint, &ds, tau)?;
    let report = train::evaluate(&model, &ds)?;
    let row = report.method_row(model.method);

    let out_dir = a
        .out
        .clone()
        .or_else(|| a.checkpoint.parent().map(Path::to_path_buf))
        .unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&out_dir)?;
    let table = metrics::render_table(std::slice::from_ref(&row), ds.config.num_classes);
    let csv = metrics::render_csv(std::slice::from_ref(&row), ds.config.num_classes);
    let txt_path = out_dir.join(format!("metrics_{}.txt", a.split));
    let csv_path = out_dir.join(format!("metrics_{}.csv", a.split));
    let mut txt = table.clone();
    if let Some(acc) = report.corr_accuracy {
        txt.push_str(&format!("correspondence_accuracy = {acc:.4}\n"));
    }
    if let Some(acc) = report.corr_raw_accuracy {
        txt.push_str(&format!("correspondence_accuracy_raw = {acc:.4}\n"));
    }
    std::fs::write(&txt_path, &txt)?;
    std::fs::write(&csv_path, &csv)?;
    print!("{table}");
    if let Some(acc) = report.corr_accuracy {
        println!("correspondence accuracy: {acc:.4}");
    }
    println!("wrote {} and {}", txt_path.display(), csv_path.display());
    Ok(())
}

// ── swarm ─────────────────────────────────────────────────────────────────

fn cmd_swarm(a: SwarmArgs) -> Result<()> {
    let file = load_config(&a.common)?;
    let cfgr = file.as_ref();
    let tau = resolve(a.tau, cfgr, "tau", 1.0f32)?;
    let method = resolve(a.method, cfgr, "method", "MAIN".to_string())?;
    let ds = load_dataset(&a.data)?;
    let model = load_model(&method, &a.checkpoint, &ds, tau)?;
    let agents = resolve(a.agents, cfgr, "agents", ds.config.n_agents)?;
    if agents != ds.config.n_agents {
        return Err(Error::Config(format!(
            "dataset has {} agents, --agents asked for {agents}",
            ds.config.n_agents
        )));
    }
    let topology: Topology = resolve(a.topology, cfgr, "topology", "fully_connected".to_string())?.parse()?;
    let drop_prob = resolve(a.drop, cfgr, "drop", 0.0f64)?;
    let seed = resolve(a.seed, cfgr, "seed", 0u64)?;
    let rounds = resolve(a.rounds, cfgr, "rounds", ds.samples.len())?.min(ds.samples.len());

    let swarm_cfg = SwarmConfig { n_agents: agents, topology, drop_prob, seed };
    let mut all_stats = Vec::with_capacity(rounds);
    let mut csv = String::from("frame_id,sender,receiver,delivered,bytes\n");
    for sample in ds.samples.iter().take(rounds) {
        let out = run_round(sample, &model, &swarm_cfg)?;
        for line in out.stats.to_csv().lines().skip(1) {
            csv.push_str(line);
            csv.push('\n');
        }
        all_stats.push(out.stats);
    }
    let report = bandwidth_report(&all_stats);
    print!("{report}");
    if let Some(out_dir) = &a.out {
        std::fs::create_dir_all(out_dir)?;
        let stats_path = out_dir.join("swarm_stats.csv");
        let report_path = out_dir.join("bandwidth.txt");
        std::fs::write(&stats_path, &csv)?;
        std::fs::write(&report_path, &report)?;
        write_manifest(
            out_dir,
            &[
                ("command", "swarm".into()),
                ("method", method),
                ("agents", agents.to_string()),
                ("topology", format!("{topology:?}")),
                ("drop", drop_prob.to_string()),
                ("seed", seed.to_string()),
                ("rounds", rounds.to_string()),
            ],
            &[stats_path, report_path],
        )?;
    }
    Ok(())
}

// ── report ────────────────────────────────────────────────────────────────

fn cmd_report(a: ReportArgs) -> Result<()> {
    let mut rows: Vec<MethodRow> = Vec::new();
    let mut classes = 0usize;
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(&a.runs)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    for dir in dirs {
        let csv_path = dir.join(format!("metrics_{}.csv", a.split));
        if !csv_path.exists() {
            continue;
        }
        let text = std::fs::read_to_string(&csv_path)?;
        for row in metrics::parse_csv_rows(&text)? {
            classes = classes.max(row.class_iou.len());
            rows.push(row);
        }
    }
    if rows.is_empty() {
        return Err(Error::Config(format!(
            "no metrics_{}.csv found under {}",
            a.split,
            a.runs.display()
        )));
    }
    // Fixed comparison order: baselines, ablations, then the full method.
    let rank = |name: &str| {
        Method::ALL
            .iter()
            .position(|m| m.name() == name)
            .unwrap_or(Method::ALL.len())
    };
    rows.sort_by_key(|r| rank(&r.method));
    let table = metrics::render_table(&rows, classes);
    print!("{table}");
    if let Some(out) = &a.out {
        std::fs::write(out, &table)?;
        println!("wrote {}", out.display());
    }
    Ok(())
}

// ── dump ──────────────────────────────────────────────────────────────────

fn cmd_dump(a: DumpArgs) -> Result<()> {
    let file = load_config(&a.common)?;
    let tau = resolve(a.tau, file.as_ref(), "tau", 1.0f32)?;
    let ds = load_dataset(&a.data)?;
    let sample = ds
        .samples
        .get(a.sample)
        .ok_or_else(|| Error::Config(format!("sample {} out of range ({})", a.sample, ds.samples.len())))?;
    let model = load_model(&a.method, &a.checkpoint, &ds, tau)?;
    let files = viz::dump_sample(&model, sample, &a.out)?;
    write_manifest(
        &a.out,
        &[
            ("command", "dump".into()),
            ("method", a.method.clone()),
            ("sample", a.sample.to_string()),
        ],
        &files,
    )?;
    println!("wrote {} files to {}", files.len() + 1, a.out.display());
    Ok(())
}
