//! Training orchestration: the warm-up phase, the dual-training phase, the
//! ablation variants, the pre-trained-retrieval baseline and fault transfer.
//!
//! During warm-up the agent acts uniformly at random and only the retrieval
//! network trains, with a learning rate ramped linearly from
//! `lr_warmup_start` to `lr_warmup_max`. During dual training actions are
//! drawn from the flow network's action-probability buffer and both networks
//! update after every episode from the replay buffer.

use rand::Rng;

use crate::checkpoint::{Checkpoint, Meta, NetRecord};
use crate::envs::{Action, Env, EnvConfig, FaultKind, FaultSpec, ACTION_DIM};
use crate::error::{Error, Result};
use crate::flow::{
    action_probability_buffer, flow_matching_loss, flow_matching_loss_parallel, sample_action, FlowLossConfig,
    FlowNet, FlowSample,
};
use crate::metrics::{evaluate, EvalReport, Policy, RunSummary};
use crate::nn::{adam_step, Activation, AdamState, Mlp, MlpSpec};
use crate::replay::{Phase, ReplayBuffer, Transition};
use crate::retrieval::{evaluate_mse, gather_random_dataset, pretrain_retrieval, retrieval_update, RetrievalNet};
use crate::rng::{fork, seed_stream, SeedStream};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    Winflownets,
    V1NoWarmup,
    V2SeparateBuffers,
    CflownetsPretrained,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Winflownets,
        Variant::V1NoWarmup,
        Variant::V2SeparateBuffers,
        Variant::CflownetsPretrained,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Winflownets => "winflownets",
            Variant::V1NoWarmup => "v1_no_warmup",
            Variant::V2SeparateBuffers => "v2_separate_buffers",
            Variant::CflownetsPretrained => "cflownets_pretrained",
        }
    }

    pub fn code(self) -> u8 {
        match self {
            Variant::Winflownets => 0,
            Variant::V1NoWarmup => 1,
            Variant::V2SeparateBuffers => 2,
            Variant::CflownetsPretrained => 3,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.code() == c)
    }

    pub fn has_warmup(self) -> bool {
        matches!(self, Variant::Winflownets | Variant::V2SeparateBuffers)
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "winflownets" => Ok(Variant::Winflownets),
            "v1" | "v1_no_warmup" => Ok(Variant::V1NoWarmup),
            "v2" | "v2_separate_buffers" => Ok(Variant::V2SeparateBuffers),
            "cflownets" | "cflownets_pretrained" => Ok(Variant::CflownetsPretrained),
            other => Err(Error::Config(format!(
                "unknown variant '{other}' (expected winflownets, v1_no_warmup, v2_separate_buffers, cflownets_pretrained)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

/// Retrieval pre-training schedule for the `cflownets_pretrained` baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainConfig<T> {
    pub transitions: usize,
    pub epochs: usize,
    pub lr: T,
    pub batch_size: usize,
    /// Fraction of the dataset held out for validation.
    pub holdout: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig<T> {
    pub env: EnvConfig<T>,
    pub fault: FaultKind,
    pub flow: FlowLossConfig<T>,
    pub net: NetConfig,
    pub variant: Variant,
    pub seed: u64,
    /// Warm-up length in env steps.
    pub warmup_steps: usize,
    /// Env-step budget including warm-up.
    pub total_steps: usize,
    pub lr_warmup_start: T,
    pub lr_warmup_max: T,
    pub lr_flow: T,
    pub lr_retrieval: T,
    /// Candidate actions per decision (M).
    pub candidates: usize,
    pub batch_size: usize,
    pub retrieval_batch_size: usize,
    pub buffer_capacity: usize,
    pub updates_per_episode: usize,
    pub warmup_updates_per_episode: usize,
    pub eval_interval: usize,
    pub eval_episodes: usize,
    /// Recorded only; returns are undiscounted and the losses ignore it.
    pub gamma: T,
    pub pretrain: PretrainConfig<T>,
    pub stability_window: usize,
    pub stability_rel_threshold: f64,
    pub parallel_loss: bool,
}

impl<T: Scalar> TrainConfig<T> {
    pub fn new(env: EnvConfig<T>) -> Self {
        Self {
            env,
            fault: FaultKind::None,
            flow: FlowLossConfig::default(),
            net: NetConfig {
                hidden: vec![256, 256],
                activation: Activation::Relu,
            },
            variant: Variant::Winflownets,
            seed: 0,
            warmup_steps: 100_000,
            total_steps: 1_000_000,
            lr_warmup_start: T::of(1e-4),
            lr_warmup_max: T::of(1e-3),
            lr_flow: T::of(1e-3),
            lr_retrieval: T::of(1e-3),
            candidates: 100,
            batch_size: 256,
            retrieval_batch_size: 256,
            buffer_capacity: 100_000,
            updates_per_episode: 1,
            warmup_updates_per_episode: 1,
            eval_interval: 10_000,
            eval_episodes: 10,
            gamma: T::one(),
            pretrain: PretrainConfig {
                transitions: 100_000,
                epochs: 50,
                lr: T::of(1e-3),
                batch_size: 256,
                holdout: T::of(0.1),
            },
            stability_window: 10,
            stability_rel_threshold: 0.05,
            parallel_loss: false,
        }
    }

    /// Small budgets and networks that finish in minutes on one core.
    pub fn desk_scale(env: EnvConfig<T>) -> Self {
        let mut c = Self::new(env);
        c.warmup_steps = 5_000;
        c.total_steps = 50_000;
        c.net.hidden = vec![64, 64];
        c.candidates = 32;
        c.flow.k = 8;
        c.batch_size = 32;
        c.retrieval_batch_size = 64;
        c.updates_per_episode = 2;
        c.warmup_updates_per_episode = 32;
        c.eval_interval = 1_000;
        c.pretrain.transitions = 10_000;
        c.pretrain.batch_size = 64;
        if c.env.kind == crate::envs::EnvKind::PointSparse {
            // reward every terminal position within reach of the goal
            c.env.success_radius = c.env.goal_radius;
        }
        c
    }

    /// Per-episode warm-up learning-rate increment.
    pub fn warmup_lr_increment(&self) -> T {
        if self.warmup_steps == 0 {
            return T::zero();
        }
        (self.lr_warmup_max - self.lr_warmup_start) * T::of(self.env.horizon as f64) / T::of(self.warmup_steps as f64)
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        self.env.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.flow.validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.warmup_steps > self.total_steps {
            return cfg(format!(
                "warmup_steps ({}) exceeds total_steps ({})",
                self.warmup_steps, self.total_steps
            ));
        }
        let lrs = [
            self.lr_warmup_start,
            self.lr_warmup_max,
            self.lr_flow,
            self.lr_retrieval,
            self.pretrain.lr,
        ];
        if lrs.iter().any(|&lr| !(lr > T::zero()) || !lr.is_finite()) {
            return cfg("all learning rates must be > 0".into());
        }
        if self.lr_warmup_start > self.lr_warmup_max {
            return cfg("lr_warmup_start must not exceed lr_warmup_max".into());
        }
        if self.eval_interval < 1 {
            return cfg("eval_interval must be >= 1".into());
        }
        if self.eval_episodes < 2 {
            return cfg("eval_episodes must be >= 2".into());
        }
        if self.candidates < 1 || self.batch_size < 1 || self.retrieval_batch_size < 1 || self.buffer_capacity < 1 {
            return cfg("candidates, batch sizes and buffer capacity must be >= 1".into());
        }
        if self.net.hidden.is_empty() || self.net.hidden.contains(&0) {
            return cfg("net.hidden needs at least one positive layer width".into());
        }
        if !(self.gamma >= T::zero() && self.gamma <= T::one()) {
            return cfg("gamma must lie in [0, 1]".into());
        }
        if !(self.pretrain.holdout >= T::zero() && self.pretrain.holdout < T::one()) || self.pretrain.batch_size < 1 {
            return cfg("pretrain.holdout must lie in [0, 1) and pretrain.batch_size >= 1".into());
        }
        if self.stability_window < 2 || !(self.stability_rel_threshold >= 0.0) {
            return cfg("stability window must be >= 2 and threshold >= 0".into());
        }
        Ok(())
    }

    pub fn fault_spec(&self) -> FaultSpec<T> {
        FaultSpec::from_kind(self.fault)
    }

    fn flow_spec(&self) -> Result<MlpSpec> {
        let d = self.env.state_dim();
        MlpSpec::new(d + ACTION_DIM, self.net.hidden.clone(), 1, self.net.activation)
    }

    fn retrieval_spec(&self) -> Result<MlpSpec> {
        let d = self.env.state_dim();
        MlpSpec::new(d + ACTION_DIM, self.net.hidden.clone(), d, self.net.activation)
    }
}

/// Minibatch composition of one flow-network update.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchComposition {
    pub step: u64,
    pub episode: u64,
    pub warmup: usize,
    pub total: usize,
}

/// Diagnostics accumulated over a run; not part of checkpoints.
#[derive(Debug, Clone, Default)]
pub struct RunLog<T> {
    pub reports: Vec<EvalReport>,
    pub flow_losses: Vec<T>,
    pub retrieval_losses: Vec<T>,
    /// Learning rate used by each warm-up retrieval update.
    pub warmup_lrs: Vec<T>,
    pub flow_batches: Vec<BatchComposition>,
    pub events: Vec<String>,
    pub clamped_outflows: u64,
    pub warmup_env_steps: u64,
    pub dual_env_steps: u64,
    pub flow_updates: u64,
    pub retrieval_updates: u64,
    /// Flow updates applied while the global step was below the warm-up length.
    pub flow_updates_during_warmup: u64,
    pub pretrain_curve: Vec<T>,
    pub pretrain_holdout_mse: Option<T>,
}

/// Everything a training loop mutates.
#[derive(Debug, Clone)]
pub struct RunState<T> {
    pub flow: FlowNet<T>,
    pub flow_adam: AdamState<T>,
    pub retrieval: RetrievalNet<T>,
    pub retrieval_adam: AdamState<T>,
    /// Shared buffer; in `v2_separate_buffers` the retrieval network's buffer.
    pub buffer: ReplayBuffer<T>,
    /// Flow network's own buffer (`v2_separate_buffers` only).
    pub flow_buffer: Option<ReplayBuffer<T>>,
    pub variant: Variant,
    pub step: u64,
    pub episode: u64,
    pub phase: Phase,
    pub warmup_lr: T,
    pub retrieval_frozen: bool,
    pub rng: SeedStream,
    pub seed: u64,
    pub log: RunLog<T>,
}

const TRAIN_STREAM: u64 = 3;
const EVAL_STREAM: u64 = 4;
const PRETRAIN_STREAM: u64 = 5;
const TRANSFER_STREAM: u64 = 6;

impl<T: Scalar> RunState<T> {
    pub fn new(config: &TrainConfig<T>) -> Result<Self> {
        let flow = FlowNet::new(Mlp::init_uniform(config.flow_spec()?, &mut seed_stream(config.seed, 1)))?;
        let retrieval = RetrievalNet::new(Mlp::init_uniform(config.retrieval_spec()?, &mut seed_stream(config.seed, 2)))?;
        let separate = config.variant == Variant::V2SeparateBuffers;
        Ok(Self {
            flow_adam: AdamState::new(flow.net.params().len()),
            retrieval_adam: AdamState::new(retrieval.net.params().len()),
            flow,
            retrieval,
            buffer: ReplayBuffer::new(config.buffer_capacity)?,
            flow_buffer: if separate {
                Some(ReplayBuffer::new(config.buffer_capacity)?)
            } else {
                None
            },
            variant: config.variant,
            step: 0,
            episode: 0,
            phase: if config.variant.has_warmup() && config.warmup_steps > 0 {
                Phase::Warmup
            } else {
                Phase::Dual
            },
            warmup_lr: config.lr_warmup_start,
            retrieval_frozen: config.variant == Variant::CflownetsPretrained,
            rng: seed_stream(config.seed, TRAIN_STREAM),
            seed: config.seed,
            log: RunLog::default(),
        })
    }

    pub fn to_checkpoint(&self, env: &EnvConfig<T>, include_buffers: bool) -> Checkpoint<T> {
        Checkpoint {
            meta: Meta {
                env: env.kind,
                variant: self.variant.code(),
                phase: self.phase,
                seed: self.seed,
                step: self.step,
                episode: self.episode,
            },
            flow: NetRecord {
                net: self.flow.net.clone(),
                adam: Some(self.flow_adam.clone()),
            },
            retrieval: NetRecord {
                net: self.retrieval.net.clone(),
                adam: Some(self.retrieval_adam.clone()),
            },
            buffer: include_buffers.then(|| self.buffer.clone()),
            flow_buffer: if include_buffers { self.flow_buffer.clone() } else { None },
        }
    }

    fn flow_source(&self) -> &ReplayBuffer<T> {
        self.flow_buffer.as_ref().unwrap_or(&self.buffer)
    }

    pub fn summary(&self, config: &TrainConfig<T>) -> Option<RunSummary> {
        RunSummary::from_reports(&self.log.reports, config.stability_window, config.stability_rel_threshold).ok()
    }
}

/// Callbacks for persisting progress.
pub trait RunHooks<T> {
    fn on_eval(&mut self, _state: &RunState<T>, _report: &EvalReport) -> Result<()> {
        Ok(())
    }

    /// Called before a numeric error aborts the run.
    fn on_abort(&mut self, _state: &RunState<T>, _error: &Error) {}
}

/// Hooks that do nothing.
pub struct NoHooks;

impl<T> RunHooks<T> for NoHooks {}

fn eval_seed(seed: u64, timestep: u64) -> u64 {
    seed_stream(seed, EVAL_STREAM).gen::<u64>() ^ timestep.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn evaluate_now<T: Scalar>(
    config: &TrainConfig<T>,
    env: &Env<T>,
    state: &mut RunState<T>,
    hooks: &mut dyn RunHooks<T>,
) -> Result<()> {
    let policy = Policy::Flow {
        net: &state.flow,
        m: config.candidates,
        tau: config.flow.tau_soft,
    };
    let report = evaluate(
        policy,
        &env.config,
        &env.fault,
        config.eval_episodes,
        state.step,
        eval_seed(state.seed, state.step),
    )?;
    hooks.on_eval(state, &report)?;
    state.log.reports.push(report);
    Ok(())
}

/// Plays one episode (truncated at `step_limit`) and stores its transitions.
fn run_episode<T: Scalar>(
    config: &TrainConfig<T>,
    env: &mut Env<T>,
    state: &mut RunState<T>,
    phase: Phase,
    step_limit: u64,
    hooks: &mut dyn RunHooks<T>,
) -> Result<()> {
    env.reset(&mut state.rng);
    while state.step < step_limit {
        let s_prev = env.state().clone();
        let action = match phase {
            Phase::Warmup => {
                let candidates: Vec<Action<T>> =
                    (0..config.candidates).map(|_| Action::sample_uniform(&mut state.rng)).collect();
                candidates[state.rng.gen_range(0..candidates.len())]
            }
            Phase::Dual => {
                let buf = action_probability_buffer(
                    &state.flow,
                    &s_prev,
                    config.candidates,
                    config.flow.tau_soft,
                    &mut state.rng,
                )?;
                sample_action(&buf, &mut state.rng)
            }
        };
        let res = env.step(action)?;
        let tr = Transition {
            s_prev,
            a_prev: action.clamped(),
            r: res.reward,
            s: res.next_state,
            terminal: res.terminal,
            episode_id: state.episode,
            phase,
        };
        tr.validate()?;
        if phase == Phase::Dual {
            if let Some(fb) = state.flow_buffer.as_mut() {
                fb.push(tr.clone());
            }
            state.log.dual_env_steps += 1;
        } else {
            state.log.warmup_env_steps += 1;
        }
        state.buffer.push(tr);
        state.step += 1;
        if state.step.is_multiple_of(config.eval_interval as u64) {
            evaluate_now(config, env, state, hooks)?;
        }
        if res.terminal {
            break;
        }
    }
    state.episode += 1;
    Ok(())
}

fn retrieval_step<T: Scalar>(state: &mut RunState<T>, batch_size: usize, lr: T) -> Result<()> {
    let batch = state.buffer.sample_minibatch(batch_size, &mut state.rng)?;
    let loss = retrieval_update(&mut state.retrieval, &mut state.retrieval_adam, &batch, lr)?;
    state.log.retrieval_losses.push(loss);
    state.log.retrieval_updates += 1;
    Ok(())
}

fn flow_step<T: Scalar>(config: &TrainConfig<T>, state: &mut RunState<T>, warmup_len: u64) -> Result<()> {
    let mut rng = fork(&mut state.rng, 0);
    let loss_seed: u64 = state.rng.gen();
    let batch = state.flow_source().sample_minibatch(config.batch_size, &mut rng)?;
    let warmup = batch.iter().filter(|t| t.phase == Phase::Warmup).count();
    let samples: Vec<FlowSample<'_, T>> = batch
        .iter()
        .map(|t| FlowSample {
            state: &t.s,
            reward: t.r,
            terminal: t.terminal,
        })
        .collect();
    let loss_fn = if config.parallel_loss {
        flow_matching_loss_parallel
    } else {
        flow_matching_loss
    };
    let out = loss_fn(&state.flow, &state.retrieval, &samples, &config.flow, loss_seed)?;
    let composition = BatchComposition {
        step: state.step,
        episode: state.episode,
        warmup,
        total: batch.len(),
    };
    drop(samples);
    drop(batch);
    adam_step(&mut state.flow.net, &mut state.flow_adam, &out.grad, config.lr_flow)?;
    state.log.flow_batches.push(composition);
    state.log.flow_losses.push(out.loss);
    state.log.clamped_outflows += out.clamped_outflows as u64;
    if out.clamped_outflows > 0 {
        state.log.events.push(format!(
            "step {}: clamped-outflow x{}",
            state.step, out.clamped_outflows
        ));
    }
    state.log.flow_updates += 1;
    if state.step < warmup_len {
        state.log.flow_updates_during_warmup += 1;
    }
    Ok(())
}

/// Reports a numeric failure to the hooks before propagating it.
fn guarded<T: Scalar>(
    state: &mut RunState<T>,
    hooks: &mut dyn RunHooks<T>,
    body: impl FnOnce(&mut RunState<T>, &mut dyn RunHooks<T>) -> Result<()>,
) -> Result<()> {
    let res = body(state, hooks);
    if let Err(e @ Error::Numeric(_)) = &res {
        state.log.events.push(format!("step {}: numeric abort: {e}", state.step));
        hooks.on_abort(state, e);
    }
    res
}

/// Uniform-random exploration for `warmup_steps` env steps; only the
/// retrieval network trains, once per episode, with a ramped learning rate.
pub fn run_warmup<T: Scalar>(
    config: &TrainConfig<T>,
    env: &mut Env<T>,
    state: &mut RunState<T>,
    hooks: &mut dyn RunHooks<T>,
) -> Result<()> {
    if !config.variant.has_warmup() {
        return Err(Error::Precondition(format!("variant {} has no warm-up phase", config.variant.name())));
    }
    if state.step != 0 {
        return Err(Error::Precondition("warm-up must start at step 0".into()));
    }
    let omega = config.warmup_steps as u64;
    let inc = config.warmup_lr_increment();
    state.phase = Phase::Warmup;
    state.warmup_lr = config.lr_warmup_start;
    guarded(state, hooks, |state, hooks| {
        while state.step < omega {
            run_episode(config, env, state, Phase::Warmup, omega, hooks)?;
            for _ in 0..config.warmup_updates_per_episode {
                let lr = state.warmup_lr;
                retrieval_step(state, config.retrieval_batch_size, lr)?;
                state.log.warmup_lrs.push(lr);
            }
            state.warmup_lr = (state.warmup_lr + inc).min(config.lr_warmup_max);
        }
        Ok(())
    })?;
    state.phase = Phase::Dual;
    Ok(())
}

/// Flow-guided exploration with per-episode updates of both networks until
/// the global step reaches `total_steps`.
pub fn run_dual<T: Scalar>(
    config: &TrainConfig<T>,
    env: &mut Env<T>,
    state: &mut RunState<T>,
    hooks: &mut dyn RunHooks<T>,
) -> Result<()> {
    state.phase = Phase::Dual;
    let warmup_len = if config.variant.has_warmup() { config.warmup_steps as u64 } else { 0 };
    guarded(state, hooks, |state, hooks| {
        while state.step < config.total_steps as u64 {
            run_episode(config, env, state, Phase::Dual, config.total_steps as u64, hooks)?;
            for _ in 0..config.updates_per_episode {
                flow_step(config, state, warmup_len)?;
                if !state.retrieval_frozen {
                    retrieval_step(state, config.retrieval_batch_size, config.lr_retrieval)?;
                }
            }
        }
        Ok(())
    })
}

/// Fits the retrieval network on uniform-random data before dual training.
fn pretrain_baseline<T: Scalar>(config: &TrainConfig<T>, state: &mut RunState<T>) -> Result<()> {
    let mut rng = seed_stream(config.seed, PRETRAIN_STREAM);
    let data = gather_random_dataset(&config.env, &config.fault_spec(), config.pretrain.transitions, &mut rng)?;
    let n_hold = (T::of(data.len() as f64) * config.pretrain.holdout).to_usize().unwrap_or(0);
    let (train, hold) = data.split_at(data.len() - n_hold);
    let curve = pretrain_retrieval(
        &mut state.retrieval,
        &mut state.retrieval_adam,
        train,
        config.pretrain.epochs,
        config.pretrain.lr,
        config.pretrain.batch_size,
        &mut rng,
    )?;
    state.log.pretrain_curve = curve.epoch_loss;
    if !hold.is_empty() {
        state.log.pretrain_holdout_mse = Some(evaluate_mse(&state.retrieval, hold)?);
    }
    Ok(())
}

/// Runs one variant end to end from a fresh initialization.
pub fn run_variant<T: Scalar>(config: &TrainConfig<T>, hooks: &mut dyn RunHooks<T>) -> Result<RunState<T>> {
    let mut config = config.clone();
    let mut notes = Vec::new();
    if config.variant == Variant::V1NoWarmup && config.warmup_steps > 0 {
        notes.push(format!(
            "warning: variant v1_no_warmup ignores warmup_steps = {}; forced to 0",
            config.warmup_steps
        ));
        config.warmup_steps = 0;
    }
    config.validate()?;
    let mut state = RunState::new(&config)?;
    state.log.events.extend(notes);
    let mut env = Env::new(config.env.clone(), config.fault_spec(), &mut state.rng)?;

    match config.variant {
        Variant::Winflownets | Variant::V2SeparateBuffers => {
            if config.warmup_steps > 0 {
                run_warmup(&config, &mut env, &mut state, hooks)?;
            }
            run_dual(&config, &mut env, &mut state, hooks)?;
        }
        Variant::V1NoWarmup => run_dual(&config, &mut env, &mut state, hooks)?,
        Variant::CflownetsPretrained => {
            pretrain_baseline(&config, &mut state)?;
            run_dual(&config, &mut env, &mut state, hooks)?;
        }
    }
    Ok(state)
}

/// Restores a run from `checkpoint` for continued training under `fault`.
/// The step counter restarts at 0; episode count and buffers carry over
/// unless `reset_buffer` is set.
pub fn transfer_to_fault<T: Scalar>(
    checkpoint: &Checkpoint<T>,
    fault: FaultKind,
    config: &TrainConfig<T>,
    reset_buffer: bool,
) -> Result<RunState<T>> {
    let kind = config.env.kind;
    if checkpoint.meta.env != kind {
        return Err(Error::InvalidArgument(format!(
            "checkpoint was trained on {}, config selects {}",
            checkpoint.meta.env.name(),
            kind.name()
        )));
    }
    let flow = FlowNet::new(checkpoint.flow.net.clone())?;
    let retrieval = RetrievalNet::new(checkpoint.retrieval.net.clone())?;
    if flow.state_dim() != kind.state_dim() || retrieval.state_dim() != kind.state_dim() {
        return Err(Error::InvalidArgument("checkpoint network widths do not match env layout".into()));
    }
    let variant = Variant::from_code(checkpoint.meta.variant)
        .ok_or_else(|| Error::Format(format!("unknown variant code {}", checkpoint.meta.variant)))?;
    let mut buffer = match &checkpoint.buffer {
        Some(b) => b.clone(),
        None => ReplayBuffer::new(config.buffer_capacity)?,
    };
    let mut flow_buffer = checkpoint.flow_buffer.clone();
    if variant == Variant::V2SeparateBuffers && flow_buffer.is_none() {
        flow_buffer = Some(ReplayBuffer::new(buffer.capacity())?);
    }
    if reset_buffer {
        buffer.clear();
        if let Some(b) = flow_buffer.as_mut() {
            b.clear();
        }
    }
    let flow_adam = checkpoint
        .flow
        .adam
        .clone()
        .unwrap_or_else(|| AdamState::new(flow.net.params().len()));
    let retrieval_adam = checkpoint
        .retrieval
        .adam
        .clone()
        .unwrap_or_else(|| AdamState::new(retrieval.net.params().len()));
    let mut log = RunLog::default();
    log.events.push(format!(
        "transfer from step {} into fault '{}'{}",
        checkpoint.meta.step,
        fault.name(),
        if reset_buffer { " with buffer reset" } else { "" }
    ));
    Ok(RunState {
        flow,
        flow_adam,
        retrieval,
        retrieval_adam,
        buffer,
        flow_buffer,
        variant,
        step: 0,
        episode: checkpoint.meta.episode,
        phase: Phase::Dual,
        warmup_lr: config.lr_warmup_max,
        retrieval_frozen: variant == Variant::CflownetsPretrained,
        rng: seed_stream(config.seed, TRANSFER_STREAM),
        seed: config.seed,
        log,
    })
}

/// Transfers `checkpoint` into `fault` and trains for `config.total_steps`.
pub fn run_transfer<T: Scalar>(
    checkpoint: &Checkpoint<T>,
    fault: FaultKind,
    config: &TrainConfig<T>,
    reset_buffer: bool,
    hooks: &mut dyn RunHooks<T>,
) -> Result<RunState<T>> {
    let mut config = config.clone();
    config.fault = fault;
    config.warmup_steps = 0;
    config.validate()?;
    let mut state = transfer_to_fault(checkpoint, fault, &config, reset_buffer)?;
    config.variant = state.variant;
    let mut env = Env::new(config.env.clone(), config.fault_spec(), &mut state.rng)?;
    run_dual(&config, &mut env, &mut state, hooks)?;
    Ok(state)
}
