//! Command implementations for the `handlatent` binary.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand};
use handlatent::io::write_atomic;
use handlatent::trainer::train_with;
use handlatent::{
    full_report, Ablation, AdamConfig, EvalConfig, HandSpec, LatentModel, LossWeights, PinchConfig, TrainConfig,
};
use serde::{Deserialize, Serialize};

#[derive(Debug, Parser)]
#[command(name = "handlatent", version, about = "Train and apply a shared latent action space for dexterous hands")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a latent space over one or more hands.
    Train(TrainArgs),
    /// Write the evaluation metric report for a checkpoint.
    Eval(EvalArgs),
    /// Map a joint trajectory from one hand to another.
    Retarget(RetargetArgs),
    /// Summarize a hand description or a checkpoint.
    Inspect(InspectArgs),
    /// Write uniformly sampled poses for a hand as a trajectory.
    Sample(SampleArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Hand description files.
    #[arg(long, num_args = 1.., required = true)]
    pub hands: Vec<PathBuf>,
    #[arg(long, default_value_t = 32)]
    pub latent_dim: usize,
    /// Hidden layer widths of the encoders, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "128,64")]
    pub hidden: Vec<usize>,
    #[arg(long, default_value_t = 20_000)]
    pub steps: usize,
    /// Poses sampled per hand each step.
    #[arg(long, default_value_t = 256)]
    pub batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 1e-5)]
    pub beta: f64,
    #[arg(long, default_value_t = 2000.0)]
    pub lambda_dis: f64,
    #[arg(long, default_value_t = 5.0)]
    pub lambda_dir: f64,
    #[arg(long, default_value_t = 12.0)]
    pub lambda_dis_exp: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Rewrite the checkpoint every N steps (0 writes only at the end).
    #[arg(long, default_value_t = 0)]
    pub checkpoint_every: usize,
    /// Loss term to drop: none, no-l1, no-l2, no-l2-dist, no-l2-dir.
    #[arg(long, default_value = "none")]
    pub ablation: Ablation,
    /// Checkpoint path.
    #[arg(long)]
    pub out: PathBuf,
    /// Per-step loss log (JSON lines).
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, num_args = 1.., required = true)]
    pub hands: Vec<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Report path.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 512)]
    pub samples: usize,
    #[arg(long, default_value_t = 32)]
    pub interp_steps: usize,
    #[arg(long, default_value_t = 0.05)]
    pub epsilon: f64,
    /// Largest thumb gap (meters) accepted for pinch poses.
    #[arg(long, default_value_t = 0.03)]
    pub pinch_max_distance: f64,
}

#[derive(Debug, Args)]
pub struct RetargetArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Source hand name.
    #[arg(long)]
    pub source: String,
    /// Target hand name.
    #[arg(long)]
    pub target: String,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    /// Hand description or checkpoint.
    pub path: PathBuf,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    /// Hand description file.
    #[arg(long)]
    pub hand: PathBuf,
    #[arg(long, default_value_t = 64)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 20.0)]
    pub rate_hz: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrajectoryHeader {
    hand: String,
    rate_hz: f64,
    d_h: usize,
}

/// Joint trajectory of one hand at a fixed rate.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub hand: String,
    pub rate_hz: f64,
    pub frames: Vec<Vec<f64>>,
}

impl Trajectory {
    /// Parses a header line `{hand, rate_hz, d_h}` followed by one line of
    /// whitespace separated radians per frame. Blank lines are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines.next().context("trajectory is empty")?;
        let header: TrajectoryHeader = serde_json::from_str(header).context("invalid trajectory header")?;
        ensure!(
            header.rate_hz > 0.0 && header.rate_hz.is_finite(),
            "rate_hz must be positive, got {}",
            header.rate_hz
        );
        let mut frames = Vec::new();
        for (n, line) in lines {
            let frame = line
                .split_whitespace()
                .map(|v| v.parse::<f64>())
                .collect::<Result<Vec<_>, _>>()
                .with_context(|| format!("line {}: invalid number", n + 1))?;
            ensure!(
                frame.len() == header.d_h,
                "line {}: expected {} values, got {}",
                n + 1,
                header.d_h,
                frame.len()
            );
            ensure!(frame.iter().all(|v| v.is_finite()), "line {}: non-finite value", n + 1);
            frames.push(frame);
        }
        Ok(Trajectory {
            hand: header.hand,
            rate_hz: header.rate_hz,
            frames,
        })
    }

    pub fn d_h(&self) -> usize {
        self.frames.first().map_or(0, Vec::len)
    }

    pub fn to_text(&self, d_h: usize) -> String {
        let header = TrajectoryHeader {
            hand: self.hand.clone(),
            rate_hz: self.rate_hz,
            d_h,
        };
        let mut out = serde_json::to_string(&header).expect("header serializes");
        out.push('\n');
        for frame in &self.frames {
            let row: Vec<String> = frame.iter().map(|v| v.to_string()).collect();
            out.push_str(&row.join(" "));
            out.push('\n');
        }
        out
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("invalid trajectory {}", path.display()))
    }

    pub fn save(&self, path: &Path, d_h: usize) -> Result<()> {
        write_atomic(path, self.to_text(d_h).as_bytes()).with_context(|| format!("cannot write {}", path.display()))
    }
}

fn load_specs(paths: &[PathBuf]) -> Result<Vec<HandSpec>> {
    let mut specs: Vec<HandSpec> = Vec::with_capacity(paths.len());
    for path in paths {
        let spec = HandSpec::from_path(path).with_context(|| format!("cannot load hand {}", path.display()))?;
        if specs.iter().any(|s| s.name() == spec.name()) {
            bail!("hand `{}` is given twice", spec.name());
        }
        specs.push(spec);
    }
    Ok(specs)
}

fn load_model(path: &Path) -> Result<LatentModel> {
    LatentModel::load(path).with_context(|| format!("cannot load checkpoint {}", path.display()))
}

/// Runs a parsed command, returning what it prints on success.
pub fn run(cli: Cli) -> Result<String> {
    match cli.command {
        Command::Train(args) => cmd_train(&args),
        Command::Eval(args) => cmd_eval(&args),
        Command::Retarget(args) => cmd_retarget(&args),
        Command::Inspect(args) => cmd_inspect(&args),
        Command::Sample(args) => cmd_sample(&args),
    }
}

pub fn cmd_train(args: &TrainArgs) -> Result<String> {
    let specs = load_specs(&args.hands)?;
    let config = TrainConfig {
        steps: args.steps,
        batch_per_hand: args.batch,
        adam: AdamConfig {
            learning_rate: args.lr,
            ..AdamConfig::default()
        },
        weights: LossWeights {
            beta: args.beta,
            lambda_dis: args.lambda_dis,
            lambda_dir: args.lambda_dir,
            lambda_dis_exp: args.lambda_dis_exp,
        },
        ablation: args.ablation,
        seed: args.seed,
        checkpoint_every: args.checkpoint_every,
        latent_dim: args.latent_dim,
        hidden_sizes: args.hidden.clone(),
    };
    let out = args.out.clone();
    let (model, log) = train_with(&specs, &config, |_, model| {
        model.save(&out).map_err(handlatent::TrainError::from)
    })
    .context("training failed")?;
    if let Some(path) = &args.log {
        write_atomic(path, log.to_jsonl().as_bytes()).with_context(|| format!("cannot write {}", path.display()))?;
    }
    let last = log.history.last().expect("at least one step");
    let first = &log.history[0];
    let mut msg = String::new();
    let _ = writeln!(
        msg,
        "trained {} hand(s) for {} steps in {:.1}s",
        model.heads().len(),
        log.history.len(),
        log.wall_clock.as_secs_f64()
    );
    let _ = writeln!(msg, "l1 {:.6e} -> {:.6e}", first.l1, last.l1);
    let _ = writeln!(msg, "l2 {:.6e} -> {:.6e}", first.l2, last.l2);
    let _ = writeln!(msg, "l3 {:.6e} -> {:.6e}", first.l3, last.l3);
    let _ = writeln!(msg, "checkpoint {}", args.out.display());
    Ok(msg)
}

pub fn cmd_eval(args: &EvalArgs) -> Result<String> {
    let model = load_model(&args.ckpt)?;
    let specs = load_specs(&args.hands)?;
    for spec in &specs {
        if model.head_index(spec.name()).is_err() {
            bail!("hand `{}` has no head in checkpoint {}", spec.name(), args.ckpt.display());
        }
    }
    model.check_specs(&specs)?;
    let config = EvalConfig {
        seed: args.seed,
        samples: args.samples,
        interp_steps: args.interp_steps,
        epsilon: args.epsilon,
        pinch: PinchConfig {
            max_distance: args.pinch_max_distance,
            ..PinchConfig::default()
        },
        ..EvalConfig::default()
    };
    let report = full_report(&model, &specs, &config).context("evaluation failed")?;
    let text = report.to_text();
    write_atomic(&args.out, text.as_bytes()).with_context(|| format!("cannot write {}", args.out.display()))?;
    Ok(text)
}

pub fn cmd_retarget(args: &RetargetArgs) -> Result<String> {
    let model = load_model(&args.ckpt)?;
    let traj = Trajectory::load(&args.input)?;
    if traj.hand != args.source {
        bail!(
            "trajectory is for hand `{}` but --source is `{}`",
            traj.hand,
            args.source
        );
    }
    let source = model
        .head(&args.source)
        .with_context(|| format!("source hand `{}` not in checkpoint", args.source))?;
    let target = model
        .head(&args.target)
        .with_context(|| format!("target hand `{}` not in checkpoint", args.target))?;
    for (n, frame) in traj.frames.iter().enumerate() {
        ensure!(
            frame.len() == source.dof(),
            "frame {n}: hand `{}` has {} joints, got {}",
            args.source,
            source.dof(),
            frame.len()
        );
        for (k, (&v, &(lo, hi))) in frame.iter().zip(&source.limits).enumerate() {
            ensure!(
                (lo..=hi).contains(&v),
                "frame {n}: joint {k} value {v} outside [{lo}, {hi}]"
            );
        }
    }
    let frames = model.cross_decode_batch(&args.source, &traj.frames, &args.target)?;
    let out = Trajectory {
        hand: args.target.clone(),
        rate_hz: traj.rate_hz,
        frames,
    };
    out.save(&args.out, target.dof())?;
    Ok(format!(
        "retargeted {} frames from {} to {} -> {}\n",
        out.frames.len(),
        args.source,
        args.target,
        args.out.display()
    ))
}

pub fn cmd_inspect(args: &InspectArgs) -> Result<String> {
    let text = fs::read_to_string(&args.path).with_context(|| format!("cannot read {}", args.path.display()))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).with_context(|| format!("{} is not a JSON document", args.path.display()))?;
    if value.get("format_version").is_some() {
        let model = LatentModel::from_checkpoint_str(&text)
            .with_context(|| format!("invalid checkpoint {}", args.path.display()))?;
        return Ok(describe_checkpoint(&model));
    }
    let spec = HandSpec::from_json_str(&text).with_context(|| format!("invalid hand description {}", args.path.display()))?;
    Ok(describe_hand(&spec))
}

fn describe_checkpoint(model: &LatentModel) -> String {
    let hidden: Vec<String> = model.hidden_sizes().iter().map(usize::to_string).collect();
    let mut out = String::new();
    let _ = writeln!(out, "checkpoint");
    let _ = writeln!(out, "latent_dim {}, hidden {}", model.latent_dim(), hidden.join(","));
    let _ = writeln!(out, "parameters {}", model.parameter_count());
    let _ = writeln!(out, "{:<12} {:>4}", "hand", "d_h");
    for head in model.heads() {
        let _ = writeln!(out, "{:<12} {:>4}", head.hand, head.dof());
    }
    out
}

fn describe_hand(spec: &HandSpec) -> String {
    let mut out = String::new();
    let digits: Vec<&str> = spec.digits().iter().map(|d| d.as_str()).collect();
    let _ = writeln!(out, "hand {}", spec.name());
    let _ = writeln!(
        out,
        "fingers {}, dof {}, mimic {}",
        digits.len(),
        spec.total_joints(),
        spec.mimic_count()
    );
    let _ = writeln!(out, "actuated {}", spec.actuated_dof());
    let _ = writeln!(out, "digits {}", digits.join(" "));
    let _ = writeln!(out, "{:<14} {:>9} {:>9}", "actuated joint", "lo", "hi");
    for (name, (lo, hi)) in spec.actuated_names().iter().zip(spec.actuated_limits()) {
        let _ = writeln!(out, "{name:<14} {lo:>9.4} {hi:>9.4}");
    }
    out
}

pub fn cmd_sample(args: &SampleArgs) -> Result<String> {
    use handlatent::evalmetrics::metric_rng;

    let spec = HandSpec::from_path(&args.hand).with_context(|| format!("cannot load hand {}", args.hand.display()))?;
    ensure!(args.rate_hz > 0.0 && args.rate_hz.is_finite(), "--rate-hz must be positive");
    let mut rng = metric_rng(args.seed, "sample", &[spec.name()]);
    let frames = (0..args.count).map(|_| spec.sample_pose(&mut rng).values).collect();
    let traj = Trajectory {
        hand: spec.name().to_string(),
        rate_hz: args.rate_hz,
        frames,
    };
    traj.save(&args.out, spec.actuated_dof())?;
    Ok(format!("wrote {} poses for {} -> {}\n", args.count, spec.name(), args.out.display()))
}
