//! The `spatrob` command-line front end.
//!
//! Exit codes: 0 on success, 2 for invalid or missing flags, 1 for failures during the run.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde::Serialize;

use crate::attacks::{CombinedMode, FoConfig, LinfConfig};
use crate::data::{load_checkpoint, load_idx, save_checkpoint, subset, Dataset, Provenance};
use crate::defenses::{evaluate_with_vote, train, AugmentPolicy, VoteParams};
use crate::error::Error;
use crate::eval::{
    accuracy_of, angle_map_csv, cdf_csv, ccdf_from_summaries, evaluate_all, export, fmt_g, fooling_angle_map,
    landscape_csv, loss_landscape, outcomes_csv, report_csv, report_json, run_adversary, summarize_grids,
    AdversarySpec, EvalReport, FooledDecomposition, ReportConfig,
};
use crate::nn::{Network, TrainConfig};
use crate::warp::{sufficient_canvas_pad, AttackSpace};

#[derive(Debug, Parser, Serialize)]
#[command(name = "spatrob", version, about = "Rotation/translation adversaries and defenses for small CNN classifiers")]
pub struct Cli {
    /// Worker threads for per-example evaluation (0 = all cores). Outputs do not depend on it.
    #[arg(long, global = true, default_value_t = 0)]
    pub workers: usize,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(tag = "subcommand", rename_all = "snake_case")]
pub enum Command {
    /// Train a classifier and write a checkpoint.
    Train(TrainArgs),
    /// Run one adversary over a dataset.
    Attack(AttackArgs),
    /// Accuracy report against the adversary set.
    Evaluate(EvaluateArgs),
    /// Per-example (du, theta) loss landscapes.
    Landscape(LandscapeArgs),
    /// Fooled-set decomposition, fooling-angle maps, and fooling-fraction CCDF.
    Analyze(AnalyzeArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct DataArgs {
    /// IDX images file (optionally gzip-compressed).
    #[arg(long)]
    pub images: PathBuf,
    /// IDX labels file (optionally gzip-compressed).
    #[arg(long)]
    pub labels: PathBuf,
    /// Use a label-balanced random subset of this many examples.
    #[arg(long)]
    pub subset: Option<usize>,
    /// Base seed; example i uses seed + i.
    #[arg(long, env = "SPATROB_SEED", default_value_t = 0)]
    pub seed: u64,
    /// Zero-pad images so no in-space transform crops content.
    #[arg(long)]
    pub black_canvas: bool,
    /// Padding per side for --black-canvas (default: smallest lossless pad for the space).
    #[arg(long, requires = "black_canvas")]
    pub pad: Option<usize>,
}

#[derive(Debug, Args, Serialize, Clone, Copy)]
pub struct SpaceArgs {
    /// Translation bound per axis, in pixels.
    #[arg(long, default_value_t = 3.0)]
    pub max_trans: f64,
    /// Rotation bound, in degrees.
    #[arg(long, default_value_t = 30.0)]
    pub max_rot: f64,
    /// Grid values per translation axis (odd).
    #[arg(long, default_value_t = 5)]
    pub trans_points: usize,
    /// Grid values for rotation (odd).
    #[arg(long, default_value_t = 31)]
    pub rot_points: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyArg {
    None,
    Aug,
    WorstOfK,
    Linf,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub space: SpaceArgs,
    #[arg(long, value_enum, default_value_t = PolicyArg::None)]
    pub policy: PolicyArg,
    /// Samples per example for --policy worst-of-k.
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    /// ℓ∞ radius for --policy linf.
    #[arg(long, default_value_t = 0.3)]
    pub epsilon: f64,
    /// PGD steps for --policy linf.
    #[arg(long, default_value_t = 40)]
    pub linf_steps: usize,
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.1)]
    pub lr: f64,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    #[arg(long, default_value_t = 0)]
    pub init_seed: u64,
    #[arg(long, default_value_t = 1)]
    pub order_seed: u64,
    /// Where to write the trained checkpoint.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Directory for train_log.csv and config_echo.json.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum MethodArg {
    Grid,
    WorstOfK,
    Fo,
    Linf,
    Combined,
    Random,
    Natural,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModeArg {
    Random,
    Grid,
}

#[derive(Debug, Args, Serialize)]
pub struct AttackArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub space: SpaceArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_enum)]
    pub method: MethodArg,
    /// Samples for --method worst-of-k.
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    /// Ascent steps for --method fo.
    #[arg(long, default_value_t = 200)]
    pub steps: usize,
    /// Step as a fraction of each coordinate's range, for --method fo.
    #[arg(long, default_value_t = 0.01)]
    pub step_frac: f64,
    #[arg(long, default_value_t = 1)]
    pub restarts: usize,
    /// ℓ∞ radius for --method linf / combined.
    #[arg(long, default_value_t = 0.1)]
    pub epsilon: f64,
    #[arg(long, default_value_t = 40)]
    pub linf_steps: usize,
    /// Spatial part of --method combined.
    #[arg(long, value_enum, default_value_t = ModeArg::Grid)]
    pub mode: ModeArg,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub space: SpaceArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Fill all nine adversary columns (otherwise natural and grid only).
    #[arg(long)]
    pub all_adversaries: bool,
    /// FO ascent steps when --all-adversaries is set.
    #[arg(long, default_value_t = 200)]
    pub fo_steps: usize,
    /// Add majority-vote natural and grid columns.
    #[arg(long)]
    pub vote: bool,
    #[arg(long, default_value_t = 10, requires = "vote")]
    pub votes: usize,
    /// Vote translation bound in pixels (default: 5% of the image side).
    #[arg(long, requires = "vote")]
    pub vote_trans: Option<f64>,
    #[arg(long, default_value_t = 15.0, requires = "vote")]
    pub vote_rot: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct LandscapeArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub space: SpaceArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Number of examples (the first N of the dataset or subset).
    #[arg(long, default_value_t = 1)]
    pub examples: usize,
    #[arg(long, default_value_t = crate::eval::DEFAULT_LANDSCAPE_TRANS)]
    pub n_trans: usize,
    #[arg(long, default_value_t = crate::eval::DEFAULT_LANDSCAPE_ROT)]
    pub n_rot: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum AnalyzeMode {
    Decomposition,
    Angles,
    Cdf,
    All,
}

#[derive(Debug, Args, Serialize)]
pub struct AnalyzeArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub space: SpaceArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_enum, default_value_t = AnalyzeMode::All)]
    pub mode: AnalyzeMode,
    /// Examples for the angle map (the first N).
    #[arg(long, default_value_t = 50)]
    pub examples: usize,
    #[arg(long)]
    pub out: PathBuf,
}

/// Failure classes that map to exit codes.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Runtime(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Runtime(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn config(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

/// Parses `args` (including the program name) and runs; returns the process exit code.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let argv: Vec<String> = argv.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    match run(&cli, &argv) {
        Ok(()) => 0,
        Err(CliError::Config(m)) => {
            eprintln!("error: {m}");
            2
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e}");
            1
        }
    }
}

/// Entry point for the binary.
pub fn main() -> ! {
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).try_init();
    std::process::exit(run_from(std::env::args_os()))
}

pub fn run(cli: &Cli, argv: &[String]) -> CliResult<()> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.workers)
        .build()
        .map_err(|e| config(format!("--workers: {e}")))?;
    pool.install(|| match &cli.command {
        Command::Train(a) => cmd_train(a, cli, argv),
        Command::Attack(a) => cmd_attack(a, cli, argv),
        Command::Evaluate(a) => cmd_evaluate(a, cli, argv),
        Command::Landscape(a) => cmd_landscape(a, cli, argv),
        Command::Analyze(a) => cmd_analyze(a, cli, argv),
    })
}

impl SpaceArgs {
    pub fn space(&self) -> CliResult<AttackSpace> {
        AttackSpace::new(self.max_trans, self.max_rot, self.trans_points, self.rot_points)
            .map_err(|e| config(format!("--max-trans/--max-rot/--trans-points/--rot-points: {e}")))
    }
}

fn check_input_paths(data: &DataArgs, checkpoint: Option<&Path>) -> CliResult<()> {
    for (flag, p) in [("--images", &data.images), ("--labels", &data.labels)] {
        if !p.is_file() {
            return Err(config(format!("{flag}: no such file {}", p.display())));
        }
    }
    if let Some(c) = checkpoint {
        if !c.is_file() {
            return Err(config(format!("--checkpoint: no such file {}", c.display())));
        }
    }
    Ok(())
}

fn load_data(data: &DataArgs, space: &AttackSpace) -> CliResult<Dataset> {
    let mut ds = load_idx(&data.images, &data.labels)?;
    if let Some(n) = data.subset {
        if n == 0 || n > ds.len() {
            return Err(config(format!("--subset: must be in 1..={}, got {n}", ds.len())));
        }
        ds = subset(&ds, n, data.seed)?;
    }
    if data.black_canvas {
        let side = ds.images().first().map(|im| im.height().max(im.width())).unwrap_or(0);
        let pad = data.pad.unwrap_or_else(|| sufficient_canvas_pad(side, side, space));
        ds = ds.black_canvas(pad)?;
    }
    info!("loaded {} examples", ds.len());
    Ok(ds)
}

fn prepare_out(out: &Path) -> CliResult<()> {
    fs::create_dir_all(out).map_err(|e| config(format!("--out: cannot create {}: {e}", out.display())))
}

#[derive(Serialize)]
struct Echo<'a, T: Serialize> {
    argv: &'a [String],
    workers: usize,
    resolved: &'a T,
}

fn echo<T: Serialize>(out: &Path, argv: &[String], cli: &Cli, resolved: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(&Echo {
        argv,
        workers: cli.workers,
        resolved,
    })
    .map_err(Error::from)?;
    export(&(text + "\n"), out.join("config_echo.json"))?;
    Ok(())
}

fn load_net(path: &Path) -> CliResult<Network<f32>> {
    let (net, prov) = load_checkpoint(path)?;
    info!("loaded checkpoint {} (policy {})", path.display(), prov.policy);
    Ok(net)
}

fn cmd_train(a: &TrainArgs, cli: &Cli, argv: &[String]) -> CliResult<()> {
    let space = a.space.space()?;
    let policy = match a.policy {
        PolicyArg::None => AugmentPolicy::none(),
        PolicyArg::Aug => AugmentPolicy::random(space, a.data.seed),
        PolicyArg::WorstOfK => {
            if a.k == 0 {
                return Err(config("--k: must be >= 1"));
            }
            AugmentPolicy::worst_of_k(space, a.k, a.data.seed)
        }
        PolicyArg::Linf => {
            let mut cfg = LinfConfig::with_epsilon(a.epsilon);
            cfg.steps = a.linf_steps;
            cfg.step_size = 2.5 * a.epsilon / a.linf_steps.max(1) as f64;
            cfg.validate().map_err(|e| config(format!("--epsilon/--linf-steps: {e}")))?;
            AugmentPolicy::linf(cfg, a.data.seed)
        }
    };
    let tc = TrainConfig {
        lr: a.lr,
        batch_size: a.batch_size,
        momentum: a.momentum,
        epochs: a.epochs,
        init_seed: a.init_seed,
        order_seed: a.order_seed,
        ..TrainConfig::default()
    };
    tc.validate()
        .map_err(|e| config(format!("--lr/--batch-size/--momentum: {e}")))?;
    check_input_paths(&a.data, None)?;
    prepare_out(&a.out)?;
    #[derive(Serialize)]
    struct Resolved<'a> {
        command: &'a Command,
        policy: &'a AugmentPolicy,
        train: &'a TrainConfig,
    }
    echo(
        &a.out,
        argv,
        cli,
        &Resolved {
            command: &cli.command,
            policy: &policy,
            train: &tc,
        },
    )?;
    let ds = load_data(&a.data, &space)?;
    let trained = train::<f32>(&ds, &policy, &tc)?;
    let mut log = String::from("epoch,natural_accuracy,mean_loss\n");
    for e in &trained.log {
        log += &format!("{},{},{}\n", e.epoch, fmt_g(e.natural_accuracy), fmt_g(e.mean_loss));
    }
    export(&log, a.out.join("train_log.csv"))?;
    let prov = Provenance {
        policy: policy.name(),
        init_seed: tc.init_seed,
        order_seed: tc.order_seed,
        augment_seed: a.data.seed,
        epochs: tc.epochs,
        input_size: ds.images().first().map(|im| im.height()).unwrap_or(0),
        notes: String::new(),
    };
    save_checkpoint(&trained.net, &prov, &a.checkpoint)?;
    info!("wrote {}", a.checkpoint.display());
    Ok(())
}

fn cmd_attack(a: &AttackArgs, cli: &Cli, argv: &[String]) -> CliResult<()> {
    let space = a.space.space()?;
    let linf = || -> CliResult<LinfConfig> {
        let mut cfg = LinfConfig::with_epsilon(a.epsilon);
        cfg.steps = a.linf_steps;
        cfg.step_size = 2.5 * a.epsilon / a.linf_steps.max(1) as f64;
        cfg.validate().map_err(|e| config(format!("--epsilon: {e}")))?;
        Ok(cfg)
    };
    let spec = match a.method {
        MethodArg::Natural => AdversarySpec::Natural,
        MethodArg::Random => AdversarySpec::Random { space },
        MethodArg::Grid => AdversarySpec::Grid { space },
        MethodArg::WorstOfK => {
            if a.k == 0 {
                return Err(config("--k: must be >= 1"));
            }
            AdversarySpec::WorstOfK { space, k: a.k }
        }
        MethodArg::Fo => {
            if !(a.step_frac > 0.0) {
                return Err(config("--step-frac: must be > 0"));
            }
            if a.restarts == 0 {
                return Err(config("--restarts: must be >= 1"));
            }
            AdversarySpec::Fo {
                space,
                cfg: FoConfig {
                    steps: a.steps,
                    step_frac: a.step_frac,
                    restarts: a.restarts,
                },
            }
        }
        MethodArg::Linf => AdversarySpec::Linf { cfg: linf()? },
        MethodArg::Combined => AdversarySpec::Combined {
            space,
            cfg: linf()?,
            mode: match a.mode {
                ModeArg::Grid => CombinedMode::Grid,
                ModeArg::Random => CombinedMode::Random,
            },
        },
    };
    check_input_paths(&a.data, Some(&a.checkpoint))?;
    prepare_out(&a.out)?;
    #[derive(Serialize)]
    struct Resolved<'a> {
        command: &'a Command,
        adversary: &'a AdversarySpec,
    }
    echo(
        &a.out,
        argv,
        cli,
        &Resolved {
            command: &cli.command,
            adversary: &spec,
        },
    )?;
    let net = load_net(&a.checkpoint)?;
    let ds = load_data(&a.data, &space)?;
    let results = run_adversary(&net, &ds, &spec, a.data.seed)?;
    export(&outcomes_csv(&results), a.out.join("outcomes.csv"))?;
    #[derive(Serialize)]
    struct Summary<'a> {
        method: &'a MethodArg,
        examples: usize,
        natural_accuracy: f64,
        accuracy: f64,
        fooled: usize,
        total_queries: usize,
        base_seed: u64,
    }
    let natural = 100.0 * results.iter().filter(|r| r.clean_pred == r.label).count() as f64 / results.len() as f64;
    let summary = Summary {
        method: &a.method,
        examples: results.len(),
        natural_accuracy: crate::eval::round_g(natural),
        accuracy: crate::eval::round_g(accuracy_of(&results)),
        fooled: results.iter().filter(|r| r.fooled).count(),
        total_queries: results.iter().map(|r| r.queries).sum(),
        base_seed: a.data.seed,
    };
    export(
        &(serde_json::to_string_pretty(&summary).map_err(Error::from)? + "\n"),
        a.out.join("summary.json"),
    )?;
    info!("accuracy under {:?}: {:.2}%", a.method, summary.accuracy);
    Ok(())
}

fn cmd_evaluate(a: &EvaluateArgs, cli: &Cli, argv: &[String]) -> CliResult<()> {
    let space = a.space.space()?;
    if a.vote && a.votes == 0 {
        return Err(config("--votes: must be >= 1"));
    }
    if a.vote_trans.is_some_and(|t| !(t >= 0.0)) || !(a.vote_rot >= 0.0) {
        return Err(config("--vote-trans/--vote-rot: must be >= 0"));
    }
    check_input_paths(&a.data, Some(&a.checkpoint))?;
    prepare_out(&a.out)?;
    echo(&a.out, argv, cli, &cli.command)?;
    let net = load_net(&a.checkpoint)?;
    let ds = load_data(&a.data, &space)?;
    let model_id = a
        .checkpoint
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let mut report = if a.all_adversaries {
        let rc = ReportConfig {
            space,
            fo: Some(FoConfig {
                steps: a.fo_steps,
                ..FoConfig::default()
            }),
            worst_of_k: 10,
            base_seed: a.data.seed,
        };
        evaluate_all(&net, &ds, &rc, &model_id)?
    } else {
        let start = std::time::Instant::now();
        let grids = summarize_grids(&net, &ds, &space)?;
        let pct = |k: usize| 100.0 * k as f64 / ds.len() as f64;
        EvalReport {
            model_id,
            natural: Some(pct(grids.iter().filter(|g| g.clean_correct).count())),
            grid: Some(pct(grids.iter().filter(|g| !g.fooled_any_point).count())),
            translation_grid: Some(pct(grids.iter().filter(|g| !g.fooled_translation_only).count())),
            rotation_grid: Some(pct(grids.iter().filter(|g| !g.fooled_rotation_only).count())),
            examples: ds.len(),
            base_seed: a.data.seed,
            wall_clock_secs: start.elapsed().as_secs_f64(),
            ..EvalReport::default()
        }
    };
    if a.vote {
        let side = ds.images().first().map(|im| im.height()).unwrap_or(28);
        let mut vote = VoteParams::for_image_side(side);
        vote.n_votes = a.votes;
        vote.seed = a.data.seed;
        vote.space = AttackSpace::new(a.vote_trans.unwrap_or(vote.space.max_trans()), a.vote_rot, 1, 1)
            .map_err(|e| config(format!("--vote-trans/--vote-rot: {e}")))?;
        let start = std::time::Instant::now();
        let v = evaluate_with_vote(&net, &ds, &space, &vote)?;
        report.natural_vote = Some(v.natural_vote);
        report.grid_vote = Some(v.grid_vote);
        report.wall_clock_secs += start.elapsed().as_secs_f64();
    }
    info!("evaluation took {:.1}s", report.wall_clock_secs);
    export(&report_json(&report)?, a.out.join("summary.json"))?;
    export(&report_csv(&report), a.out.join("report.csv"))?;
    Ok(())
}

fn cmd_landscape(a: &LandscapeArgs, cli: &Cli, argv: &[String]) -> CliResult<()> {
    let space = a.space.space()?;
    if a.n_trans == 0 || a.n_rot == 0 {
        return Err(config("--n-trans/--n-rot: must be >= 1"));
    }
    check_input_paths(&a.data, Some(&a.checkpoint))?;
    prepare_out(&a.out)?;
    echo(&a.out, argv, cli, &cli.command)?;
    let net = load_net(&a.checkpoint)?;
    let ds = load_data(&a.data, &space)?;
    if a.examples > ds.len() {
        return Err(config(format!("--examples: dataset has only {} examples", ds.len())));
    }
    for i in 0..a.examples {
        let (im, y) = ds.get(i).expect("in range");
        let l = loss_landscape(&net, im, y, a.n_trans, a.n_rot, &space)?;
        export(&landscape_csv(&l), a.out.join(format!("landscape_{i}.csv")))?;
    }
    Ok(())
}

fn cmd_analyze(a: &AnalyzeArgs, cli: &Cli, argv: &[String]) -> CliResult<()> {
    let space = a.space.space()?;
    check_input_paths(&a.data, Some(&a.checkpoint))?;
    prepare_out(&a.out)?;
    echo(&a.out, argv, cli, &cli.command)?;
    let net = load_net(&a.checkpoint)?;
    let ds = load_data(&a.data, &space)?;
    let all = a.mode == AnalyzeMode::All;
    if all || a.mode != AnalyzeMode::Angles {
        let grids = summarize_grids(&net, &ds, &space)?;
        if all || a.mode == AnalyzeMode::Decomposition {
            let d = FooledDecomposition::from_summaries(&grids);
            export(
                &(serde_json::to_string_pretty(&d).map_err(Error::from)? + "\n"),
                a.out.join("decomposition.json"),
            )?;
        }
        if all || a.mode == AnalyzeMode::Cdf {
            export(&cdf_csv(&ccdf_from_summaries(&grids)), a.out.join("cdf.csv"))?;
        }
    }
    if all || a.mode == AnalyzeMode::Angles {
        if a.examples > ds.len() {
            return Err(config(format!("--examples: dataset has only {} examples", ds.len())));
        }
        let ex: Vec<_> = ds.iter().take(a.examples).map(|(im, y)| (im.clone(), y)).collect();
        let map = fooling_angle_map(&net, &ex, &space.rot_values())?;
        export(&angle_map_csv(&map), a.out.join("angles.csv"))?;
    }
    Ok(())
}
