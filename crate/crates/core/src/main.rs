use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use winflow::checkpoint::Checkpoint;
use winflow::config::{base_config, parse_train_config, to_config_string};
use winflow::envs::{write_trajectory_csv, EnvKind, FaultKind};
use winflow::flow::FlowNet;
use winflow::metrics::{emit_metrics, episode_seed, evaluate, metrics_csv, rollout_trajectory, EvalReport, Policy};
use winflow::replay::Phase;
use winflow::training::{run_transfer, run_variant, RunHooks, Variant};
use winflow::{Error, Real, Result, RunState, TrainConfig};

#[derive(Parser)]
#[command(name = "winflow", version, about = "Warm-up + dual training of continuous flow networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one variant from scratch.
    Train(TrainArgs),
    /// Continue a finished run in a faulty environment.
    Transfer(TransferArgs),
    /// Train all four variants with a shared seed.
    Ablate(TrainArgs),
    /// Score a checkpoint's flow policy.
    Eval(EvalArgs),
    /// Print checkpoint and buffer statistics.
    Inspect {
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

#[derive(Args, Clone)]
struct Common {
    /// Flat `section.key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// reacher2 or point_sparse.
    #[arg(long)]
    env: Option<EnvKind>,
    /// none, ad or rom.
    #[arg(long)]
    fault: Option<FaultKind>,
    /// Small budgets and networks.
    #[arg(long)]
    desk_scale: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long, default_value = "runs")]
    out: PathBuf,
}

#[derive(Args)]
struct TransferArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Empty the replay buffer(s) before resuming.
    #[arg(long)]
    reset_buffer: bool,
    #[arg(long, default_value = "runs/transfer")]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Overrides eval.episodes.
    #[arg(long)]
    episodes: Option<usize>,
    /// Write the first evaluation episode as CSV.
    #[arg(long)]
    dump_trajectory: Option<PathBuf>,
}

fn load_config(c: &Common, env: Option<EnvKind>) -> Result<TrainConfig> {
    let env = c.env.or(env);
    let mut cfg: TrainConfig = match &c.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            parse_train_config(&text, env, c.desk_scale)?
        }
        None => base_config(env.unwrap_or(EnvKind::Reacher2), c.desk_scale),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(f) = c.fault {
        cfg.fault = f;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Config(format!("cannot write {}: {e}", path.display())))
}

/// Writes the run directory: config snapshot, eval checkpoints, metrics and
/// the event log.
struct RunDir {
    dir: PathBuf,
    config: TrainConfig,
}

impl RunDir {
    fn create(dir: PathBuf, config: &TrainConfig) -> Result<Self> {
        fs::create_dir_all(dir.join("checkpoints"))
            .map_err(|e| Error::Config(format!("cannot create {}: {e}", dir.display())))?;
        write(&dir.join("config.cfg"), &to_config_string(config))?;
        Ok(Self {
            dir,
            config: config.clone(),
        })
    }

    fn finish(&self, state: &RunState, reports: &[EvalReport]) -> Result<()> {
        state
            .to_checkpoint(&self.config.env, true)
            .save(&self.dir.join("checkpoints").join("final.ckpt"))?;
        self.write_metrics(reports, Some(state))?;
        self.write_events(state)
    }

    fn write_metrics(&self, reports: &[EvalReport], state: Option<&RunState>) -> Result<()> {
        let summary = state.and_then(|s| s.summary(&self.config));
        emit_metrics(&self.dir, reports, summary.as_ref())
    }

    fn write_events(&self, state: &RunState) -> Result<()> {
        let mut text = String::new();
        for e in &state.log.events {
            text.push_str(e);
            text.push('\n');
        }
        text.push_str(&format!(
            "done: steps {} (warm-up {}, dual {}), episodes {}, flow updates {}, retrieval updates {}, clamped outflows {}\n",
            state.step,
            state.log.warmup_env_steps,
            state.log.dual_env_steps,
            state.episode,
            state.log.flow_updates,
            state.log.retrieval_updates,
            state.log.clamped_outflows
        ));
        write(&self.dir.join("events.log"), &text)
    }
}

impl RunHooks<Real> for RunDir {
    fn on_eval(&mut self, state: &RunState, report: &EvalReport) -> Result<()> {
        let path = self.dir.join("checkpoints").join(format!("step_{:09}.ckpt", report.timestep));
        state.to_checkpoint(&self.config.env, false).save(&path)
    }

    fn on_abort(&mut self, state: &RunState, error: &Error) {
        let _ = state
            .to_checkpoint(&self.config.env, true)
            .save(&self.dir.join("checkpoints").join("abort.ckpt"));
        let _ = self.write_metrics(&state.log.reports, None);
        let _ = self.write_events(state);
        eprintln!("numeric abort at step {}: {error}", state.step);
    }
}

fn train_one(cfg: &TrainConfig, dir: PathBuf) -> Result<()> {
    let mut run = RunDir::create(dir, cfg)?;
    let state = run_variant(cfg, &mut run)?;
    run.finish(&state, &state.log.reports)?;
    println!("{}: {} evaluations -> {}", cfg.variant.name(), state.log.reports.len(), run.dir.display());
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut cfg = load_config(&a.common, None)?;
    if let Some(v) = a.variant {
        cfg.variant = v;
    }
    let dir = a.out.join(format!("{}_{}_seed{}", cfg.env.kind.name(), cfg.variant.name(), cfg.seed));
    train_one(&cfg, dir)
}

fn cmd_ablate(a: TrainArgs) -> Result<()> {
    let cfg = load_config(&a.common, None)?;
    for v in Variant::ALL {
        let mut c = cfg.clone();
        c.variant = v;
        if v == Variant::V1NoWarmup {
            c.warmup_steps = 0;
        }
        train_one(&c, a.out.join(v.name()))?;
    }
    Ok(())
}

fn cmd_transfer(a: TransferArgs) -> Result<()> {
    let ckpt = Checkpoint::<Real>::load(&a.checkpoint)?;
    let cfg = load_config(&a.common, Some(ckpt.meta.env))?;
    if cfg.fault == FaultKind::None {
        eprintln!("warning: transferring without a fault (use --fault ad|rom)");
    }
    let mut run = RunDir::create(a.out, &cfg)?;
    let state = run_transfer(&ckpt, cfg.fault, &cfg, a.reset_buffer, &mut run)?;
    run.finish(&state, &state.log.reports)?;
    println!("transfer into '{}': {} evaluations -> {}", cfg.fault.name(), state.log.reports.len(), run.dir.display());
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let ckpt = Checkpoint::<Real>::load(&a.checkpoint)?;
    let cfg = load_config(&a.common, Some(ckpt.meta.env))?;
    if cfg.env.kind != ckpt.meta.env {
        return Err(Error::InvalidArgument(format!(
            "checkpoint was trained on {}, not {}",
            ckpt.meta.env.name(),
            cfg.env.kind.name()
        )));
    }
    let net = FlowNet::new(ckpt.flow.net)?;
    if net.state_dim() != cfg.env.state_dim() {
        return Err(Error::InvalidArgument("checkpoint flow net does not match the env layout".into()));
    }
    let policy = Policy::Flow {
        net: &net,
        m: cfg.candidates,
        tau: cfg.flow.tau_soft,
    };
    let fault = cfg.fault_spec();
    let n = a.episodes.unwrap_or(cfg.eval_episodes);
    let report = evaluate(policy, &cfg.env, &fault, n, ckpt.meta.step, cfg.seed)?;
    print!("{}", metrics_csv(&[report]));
    if let Some(path) = a.dump_trajectory {
        let rows = rollout_trajectory(policy, &cfg.env, &fault, episode_seed(cfg.seed, 0))?;
        write_trajectory_csv(&path, &rows)?;
    }
    Ok(())
}

fn cmd_inspect(path: &Path) -> Result<()> {
    let c = Checkpoint::<Real>::load(path)?;
    let mut out = std::io::stdout().lock();
    let m = &c.meta;
    let variant = Variant::from_code(m.variant).map_or("unknown", |v| v.name());
    let _ = writeln!(out, "env: {}", m.env.name());
    let _ = writeln!(out, "variant: {variant}");
    let _ = writeln!(out, "phase: {:?}", m.phase);
    let _ = writeln!(out, "seed: {}  step: {}  episode: {}", m.seed, m.step, m.episode);
    for (name, rec) in [("flow", &c.flow), ("retrieval", &c.retrieval)] {
        let spec = rec.net.spec();
        let _ = writeln!(
            out,
            "{name} net: {} -> {:?} -> {} ({} params, adam: {})",
            spec.input_dim,
            spec.hidden_dims,
            spec.output_dim,
            rec.net.params().len(),
            rec.adam.as_ref().map_or("none".to_string(), |a| format!("t={}", a.t))
        );
    }
    for (name, buf) in [("buffer", &c.buffer), ("flow buffer", &c.flow_buffer)] {
        match buf {
            None => {
                let _ = writeln!(out, "{name}: none");
            }
            Some(b) => {
                let warm = b.iter().filter(|t| t.phase == Phase::Warmup).count();
                let terminal = b.iter().filter(|t| t.terminal).count();
                let mean_r = if b.is_empty() {
                    0.0
                } else {
                    b.iter().map(|t| t.r).sum::<Real>() / b.len() as Real
                };
                let _ = writeln!(
                    out,
                    "{name}: {}/{} (pushed {}), warm-up {}, dual {}, terminal {}, mean reward {:.5}",
                    b.len(),
                    b.capacity(),
                    b.total_pushed(),
                    warm,
                    b.len() - warm,
                    terminal,
                    mean_r
                );
            }
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Numeric(_) => 3,
        Error::Io { .. } => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Transfer(a) => cmd_transfer(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Inspect { checkpoint } => cmd_inspect(&checkpoint),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
