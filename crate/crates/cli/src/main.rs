mod config;
mod dataset;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use chrono::{SecondsFormat, Utc};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Map, Value};

use stagereg::data::synthetic_pair;
use stagereg::evaluation::{
    best_cell, evaluate_dataset, export_overlay, grid_search, mean_dice, warp_mask, write_grid_csv,
    write_metrics_csv,
};
use stagereg::io::{load_volume, save_field, save_mask, save_volume};
use stagereg::training::{
    fit_schedule, load_checkpoint, train, Checkpoint, CHECKPOINT_FILE, HISTORY_FILE,
};
use stagereg::Error;

use config::RunConfig;
use dataset::{Dataset, Prep};

const EXIT_CONFIG: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_DIVERGED: u8 = 3;

#[derive(Parser, Debug)]
#[command(
    name = "stagereg",
    version,
    about = "Coarse-to-fine unsupervised 3D registration"
)]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every random choice; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "stagereg-out")]
    out: PathBuf,
    /// Compute device; only `cpu` is available.
    #[arg(long, global = true, default_value = "cpu")]
    device: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model on a dataset directory.
    Train(TrainArgs),
    /// Register one moving volume onto one fixed volume.
    Register(RegisterArgs),
    /// Score a checkpoint on a dataset with masks.
    Evaluate(EvaluateArgs),
    /// Write synthetic phantoms with known deformations.
    Synth(SynthArgs),
    /// Train and score one model per (alpha, beta) cell.
    Gridsearch(GridArgs),
}

#[derive(Args, Debug, Clone, Default)]
struct Ablations {
    /// Drop the refine core (feature, difference and warped inputs).
    #[arg(long)]
    no_refine_core: bool,
    /// Drop the rigid block.
    #[arg(long)]
    no_rigid: bool,
    /// Set the range weight alpha to 0.
    #[arg(long)]
    no_range_loss: bool,
    /// Set the smoothness weight beta to 0.
    #[arg(long)]
    no_smooth_loss: bool,
}

impl Ablations {
    fn apply(&self, cfg: &mut RunConfig) {
        let t = &mut cfg.train;
        t.network.use_refine_core &= !self.no_refine_core;
        t.network.use_rigid &= !self.no_rigid;
        if self.no_range_loss {
            t.weights.alpha = 0.0;
        }
        if self.no_smooth_loss {
            t.weights.beta = 0.0;
        }
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Total steps; the schedule is cut or its last block extended.
    #[arg(long)]
    steps: Option<u64>,
    #[command(flatten)]
    ablations: Ablations,
}

#[derive(Args, Debug)]
struct RegisterArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    fixed: PathBuf,
    #[arg(long)]
    moving: PathBuf,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory with masks.
    #[arg(long)]
    data: PathBuf,
    /// Metrics CSV path [default: <out>/metrics.csv].
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Also write a mid-slice PNG overlay per pair.
    #[arg(long)]
    overlays: bool,
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Number of phantom cases.
    #[arg(long, default_value_t = 1)]
    count: usize,
    /// Cube edge length; overrides `[synth] shape`.
    #[arg(long)]
    size: Option<usize>,
}

#[derive(Args, Debug)]
struct GridArgs {
    /// Training dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Evaluation dataset directory [default: the training set].
    #[arg(long)]
    eval: Option<PathBuf>,
    /// Comma-separated alpha values; overrides `[grid] alphas`.
    #[arg(long, value_delimiter = ',')]
    alphas: Option<Vec<f64>>,
    /// Comma-separated beta values; overrides `[grid] betas`.
    #[arg(long, value_delimiter = ',')]
    betas: Option<Vec<f64>>,
    /// Steps per cell.
    #[arg(long)]
    steps: Option<u64>,
    /// Surface CSV path [default: <out>/grid.csv].
    #[arg(long)]
    csv: Option<PathBuf>,
    #[command(flatten)]
    ablations: Ablations,
}

struct Fail {
    code: u8,
    msg: String,
}

fn config_err(msg: impl ToString) -> Fail {
    Fail {
        code: EXIT_CONFIG,
        msg: msg.to_string(),
    }
}

/// Core errors met while reading inputs or running: divergence is its own
/// code, everything else is a data problem.
fn run_err(e: Error) -> Fail {
    let code = match e {
        Error::Divergence { .. } => EXIT_DIVERGED,
        _ => EXIT_DATA,
    };
    Fail {
        code,
        msg: e.to_string(),
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    version: &'a str,
    seed: u64,
    config: &'a RunConfig,
    inputs: Map<String, Value>,
    outputs: Map<String, Value>,
    started: String,
    finished: String,
    status: String,
}

struct Run {
    command: &'static str,
    out: PathBuf,
    seed: u64,
    config: RunConfig,
    inputs: Map<String, Value>,
    outputs: Map<String, Value>,
    started: String,
}

fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

impl Run {
    fn input(&mut self, name: &str, path: &Path) {
        self.inputs
            .insert(name.into(), json!(path.display().to_string()));
    }

    fn output(&mut self, name: &str, path: &Path) {
        self.outputs
            .insert(name.into(), json!(path.display().to_string()));
    }

    fn write_manifest(&self, status: &str) -> Result<(), Fail> {
        let m = Manifest {
            command: self.command,
            version: env!("CARGO_PKG_VERSION"),
            seed: self.seed,
            config: &self.config,
            inputs: self.inputs.clone(),
            outputs: self.outputs.clone(),
            started: self.started.clone(),
            finished: now(),
            status: status.into(),
        };
        let path = self.out.join("manifest.json");
        let text = serde_json::to_string_pretty(&m).map_err(config_err)?;
        fs::write(&path, text + "\n").map_err(|e| Fail {
            code: EXIT_DATA,
            msg: format!("{}: {e}", path.display()),
        })
    }

    fn prep(&self) -> Prep {
        Prep {
            target: self.config.train.network.in_shape,
            window: self.config.preprocess,
        }
    }
}

fn ensure_dir(p: &Path) -> Result<(), Fail> {
    fs::create_dir_all(p).map_err(|e| Fail {
        code: EXIT_DATA,
        msg: format!("cannot create {}: {e}", p.display()),
    })
}

fn require_dir(p: &Path) -> Result<(), Fail> {
    if p.is_dir() {
        Ok(())
    } else {
        Err(Fail {
            code: EXIT_DATA,
            msg: format!("data directory {} does not exist", p.display()),
        })
    }
}

fn load_ckpt(path: &Path) -> Result<Checkpoint<f32>, Fail> {
    load_checkpoint(path).map_err(run_err)
}

fn cmd_train(run: &mut Run, args: &TrainArgs) -> Result<(), Fail> {
    args.ablations.apply(&mut run.config);
    if let Some(n) = args.steps {
        if n == 0 {
            return Err(config_err("--steps must be >= 1"));
        }
        run.config.train.schedule = fit_schedule(&run.config.train.schedule, n);
    }
    run.config.train.validate().map_err(config_err)?;
    require_dir(&args.data)?;
    run.input("data", &args.data);
    let ds = Dataset::scan(&args.data).map_err(run_err)?;
    let pairs = ds.train_pairs(&run.prep(), run.seed).map_err(run_err)?;
    ensure_dir(&run.out)?;
    let result = train(run.config.train.clone(), &pairs, Some(&run.out));
    let ckpt = run.out.join(CHECKPOINT_FILE);
    if ckpt.exists() {
        run.output("checkpoint", &ckpt);
        run.output("loss_history", &run.out.join(HISTORY_FILE));
    }
    match result {
        Ok(outcome) => {
            if let Some(last) = outcome.history.last() {
                println!(
                    "trained {} steps, final loss {}",
                    outcome.checkpoint.step, last.report.total
                );
            }
            Ok(())
        }
        Err(e) => Err(run_err(e)),
    }
}

fn cmd_register(run: &mut Run, args: &RegisterArgs) -> Result<(), Fail> {
    run.input("checkpoint", &args.checkpoint);
    run.input("fixed", &args.fixed);
    run.input("moving", &args.moving);
    let ckpt = load_ckpt(&args.checkpoint)?;
    let net = ckpt.build_network().map_err(run_err)?;
    let prep = Prep {
        target: ckpt.network.in_shape,
        window: run.config.preprocess,
    };
    let load = |p: &Path| -> Result<_, Fail> {
        let v = load_volume::<f32>(p).map_err(run_err)?;
        prep.volume_checked(v, p).map_err(run_err)
    };
    let fixed = load(&args.fixed)?;
    let moving = load(&args.moving)?;
    let out = net.infer(&ckpt.params, &fixed, &moving).map_err(run_err)?;
    ensure_dir(&run.out)?;
    let field_path = run.out.join("field.vhdr");
    save_field(out.final_field(), &field_path).map_err(run_err)?;
    let warped_path = run.out.join("warped.nii.gz");
    save_volume(out.final_warped(), &warped_path).map_err(run_err)?;
    run.output("field", &field_path);
    run.output("warped", &warped_path);
    println!(
        "mean |phi| {} (normalized), max displacement {:.3} voxels",
        out.final_field().mean_abs(),
        out.final_field().max_voxel_norm()
    );
    Ok(())
}

fn cmd_evaluate(run: &mut Run, args: &EvaluateArgs) -> Result<(), Fail> {
    run.input("checkpoint", &args.checkpoint);
    run.input("data", &args.data);
    require_dir(&args.data)?;
    let ckpt = load_ckpt(&args.checkpoint)?;
    let net = ckpt.build_network().map_err(run_err)?;
    let ds = Dataset::scan(&args.data).map_err(run_err)?;
    let prep = Prep {
        target: ckpt.network.in_shape,
        window: run.config.preprocess,
    };
    let pairs = ds.eval_pairs(&prep, run.seed).map_err(run_err)?;
    let rows = evaluate_dataset(&net, &ckpt.params, &pairs).map_err(run_err)?;
    ensure_dir(&run.out)?;
    let csv = args
        .csv
        .clone()
        .unwrap_or_else(|| run.out.join("metrics.csv"));
    write_metrics_csv(&csv, &rows).map_err(run_err)?;
    run.output("metrics", &csv);
    if args.overlays {
        for p in &pairs {
            let out = net
                .infer(&ckpt.params, &p.fixed, &p.moving)
                .map_err(run_err)?;
            let warped_mask = warp_mask(&p.moving_mask, out.final_field()).map_err(run_err)?;
            let path = run
                .out
                .join(format!("overlay_{}_{}.png", p.fixed_id, p.moving_id));
            let k = p.fixed.shape.d / 2;
            export_overlay(&p.fixed, out.final_warped(), &[&warped_mask], 2, k, &path)
                .map_err(run_err)?;
            run.output(&format!("overlay_{}_{}", p.fixed_id, p.moving_id), &path);
        }
    }
    println!("mean dice {} over {} pairs", mean_dice(&rows), rows.len());
    Ok(())
}

fn cmd_synth(run: &mut Run, args: &SynthArgs) -> Result<(), Fail> {
    if args.count == 0 {
        return Err(config_err("--count must be >= 1"));
    }
    if let Some(n) = args.size {
        run.config.synth.shape = stagereg::volume::Shape3::cube(n);
    }
    run.config.synth.validate().map_err(config_err)?;
    ensure_dir(&run.out)?;
    for i in 0..args.count {
        let mut cfg = run.config.synth.clone();
        cfg.seed = run.seed.wrapping_add(i as u64);
        let pair = synthetic_pair::<f32>(&cfg).map_err(run_err)?;
        let id = format!("case{i:03}");
        let files = [
            (id.clone(), run.out.join(format!("{id}.nii.gz"))),
            (
                format!("{id}_mask"),
                run.out.join(format!("{id}_mask.nii.gz")),
            ),
            (
                format!("{id}_deformed"),
                run.out.join(format!("{id}_deformed.nii.gz")),
            ),
            (
                format!("{id}_field"),
                run.out.join(format!("{id}_field.vhdr")),
            ),
        ];
        save_volume(&pair.moving, &files[0].1).map_err(run_err)?;
        save_mask(&pair.moving_mask, &files[1].1).map_err(run_err)?;
        save_volume(&pair.fixed, &files[2].1).map_err(run_err)?;
        save_field(&pair.field, &files[3].1).map_err(run_err)?;
        for (name, path) in &files {
            run.output(name, path);
        }
    }
    println!(
        "wrote {} synthetic cases to {}",
        args.count,
        run.out.display()
    );
    Ok(())
}

fn cmd_gridsearch(run: &mut Run, args: &GridArgs) -> Result<(), Fail> {
    args.ablations.apply(&mut run.config);
    if let Some(a) = &args.alphas {
        run.config.grid.alphas = a.clone();
    }
    if let Some(b) = &args.betas {
        run.config.grid.betas = b.clone();
    }
    if let Some(n) = args.steps {
        if n == 0 {
            return Err(config_err("--steps must be >= 1"));
        }
        run.config.train.schedule = fit_schedule(&run.config.train.schedule, n);
    }
    run.config.train.validate().map_err(config_err)?;
    if run.config.grid.alphas.is_empty() || run.config.grid.betas.is_empty() {
        return Err(config_err("grid needs at least one alpha and one beta"));
    }
    require_dir(&args.data)?;
    run.input("data", &args.data);
    let eval_dir = args.eval.clone().unwrap_or_else(|| args.data.clone());
    require_dir(&eval_dir)?;
    run.input("eval", &eval_dir);
    let prep = run.prep();
    let train_pairs = Dataset::scan(&args.data)
        .and_then(|d| d.train_pairs(&prep, run.seed))
        .map_err(run_err)?;
    let eval_pairs = Dataset::scan(&eval_dir)
        .and_then(|d| d.eval_pairs(&prep, run.seed))
        .map_err(run_err)?;
    let cells = grid_search(
        &run.config.grid.alphas,
        &run.config.grid.betas,
        &run.config.train,
        &train_pairs,
        &eval_pairs,
    )
    .map_err(run_err)?;
    ensure_dir(&run.out)?;
    let csv = args.csv.clone().unwrap_or_else(|| run.out.join("grid.csv"));
    write_grid_csv(&csv, &cells).map_err(run_err)?;
    run.output("grid", &csv);
    match best_cell(&cells) {
        Some(b) => {
            println!(
                "best cell alpha={} beta={} mean dice {}",
                b.alpha, b.beta, b.mean_dice
            );
            Ok(())
        }
        None => Err(Fail {
            code: EXIT_DIVERGED,
            msg: "every grid cell diverged".into(),
        }),
    }
}

fn execute(cli: Cli) -> Result<(), Fail> {
    if cli.device != "cpu" {
        return Err(config_err(format!(
            "device `{}` is not available; use cpu",
            cli.device
        )));
    }
    let mut config = match &cli.config {
        Some(p) => RunConfig::load(p).map_err(config_err)?,
        None => RunConfig::default(),
    };
    let seed = config.resolve_seed(cli.seed);
    let command = match &cli.command {
        Command::Train(_) => "train",
        Command::Register(_) => "register",
        Command::Evaluate(_) => "evaluate",
        Command::Synth(_) => "synth",
        Command::Gridsearch(_) => "gridsearch",
    };
    let mut run = Run {
        command,
        out: cli.out.clone(),
        seed,
        config,
        inputs: Map::new(),
        outputs: Map::new(),
        started: now(),
    };
    if let Some(p) = &cli.config {
        run.input("config", p);
    }
    let result = match &cli.command {
        Command::Train(a) => cmd_train(&mut run, a),
        Command::Register(a) => cmd_register(&mut run, a),
        Command::Evaluate(a) => cmd_evaluate(&mut run, a),
        Command::Synth(a) => cmd_synth(&mut run, a),
        Command::Gridsearch(a) => cmd_gridsearch(&mut run, a),
    };
    match result {
        Ok(()) => run.write_manifest("ok"),
        Err(f) => {
            // Failed runs still leave a manifest when the output directory
            // can be made; the original error wins over a manifest failure.
            let status = match f.code {
                EXIT_DIVERGED => "diverged",
                EXIT_CONFIG => "config-error",
                _ => "data-error",
            };
            if fs::create_dir_all(&run.out).is_ok() {
                let _ = run.write_manifest(status);
            }
            Err(f)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("stagereg: error: {}", f.msg.replace('\n', " "));
            ExitCode::from(f.code)
        }
    }
}
