//! Continuous control environments: a planar two-link reacher and a sparse
//! point robot, both advanced by pure step functions.

mod fault;
pub mod point;
pub mod reacher;

use std::io::Write;
use std::path::Path;

use rand::Rng;

pub use fault::{
    FaultKind, FaultSpec, ACTUATOR_DAMAGE_SCALE, NOMINAL_JOINT1_LIMITS, REDUCED_ROM_LIMITS,
};

use crate::error::{invalid, Error, Result};
use crate::scalar::{clamp, Scalar};

pub const ACTION_DIM: usize = 2;
/// Lebesgue measure of the action box `[-1, 1]²`.
pub const ACTION_SPACE_MEASURE: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EnvKind {
    Reacher2,
    PointSparse,
}

impl EnvKind {
    pub fn state_dim(self) -> usize {
        match self {
            EnvKind::Reacher2 => reacher::STATE_DIM,
            EnvKind::PointSparse => point::STATE_DIM,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            EnvKind::Reacher2 => "reacher2",
            EnvKind::PointSparse => "point_sparse",
        }
    }

    pub fn code(self) -> u8 {
        match self {
            EnvKind::Reacher2 => 1,
            EnvKind::PointSparse => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            1 => Some(EnvKind::Reacher2),
            2 => Some(EnvKind::PointSparse),
            _ => None,
        }
    }
}

impl std::str::FromStr for EnvKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reacher2" => Ok(EnvKind::Reacher2),
            "point_sparse" => Ok(EnvKind::PointSparse),
            other => Err(Error::Config(format!(
                "unknown env '{other}' (expected reacher2, point_sparse)"
            ))),
        }
    }
}

/// Fixed-width observation vector tagged with its layout.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvState<T> {
    pub kind: EnvKind,
    pub values: Vec<T>,
}

impl<T: Scalar> EnvState<T> {
    pub fn new(kind: EnvKind, values: Vec<T>) -> Result<Self> {
        if values.len() != kind.state_dim() {
            return Err(invalid!(
                "{} state needs {} values, got {}",
                kind.name(),
                kind.state_dim(),
                values.len()
            ));
        }
        Ok(Self { kind, values })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

/// Two-component action; entries are clamped to `[-1, 1]` by the environment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Action<T>(pub [T; ACTION_DIM]);

impl<T: Scalar> Action<T> {
    pub fn new(a0: T, a1: T) -> Self {
        Action([a0, a1])
    }

    pub fn zero() -> Self {
        Action([T::zero(); ACTION_DIM])
    }

    /// Uniform draw from the action box.
    pub fn sample_uniform<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Action([
            crate::rng::uniform(rng, -T::one(), T::one()),
            crate::rng::uniform(rng, -T::one(), T::one()),
        ])
    }

    pub fn clamped(self) -> Self {
        Action(self.0.map(|a| clamp(a, -T::one(), T::one())))
    }

    pub fn norm_sq(&self) -> T {
        self.0.iter().map(|&a| a * a).sum()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.0
    }

    fn check_finite(&self) -> Result<()> {
        if self.0.iter().all(|a| a.is_finite()) {
            Ok(())
        } else {
            Err(invalid!("non-finite action {:?}", self.0))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult<T> {
    pub next_state: EnvState<T>,
    pub reward: T,
    pub terminal: bool,
    /// Index of `next_state` within the episode (1 after the first step).
    pub t: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvConfig<T> {
    pub kind: EnvKind,
    pub horizon: usize,
    /// Reacher integration step, seconds.
    pub dt: T,
    pub link_lengths: (T, T),
    /// rad/s² per unit action.
    pub torque_gain: T,
    /// Linear joint damping, 1/s.
    pub damping: T,
    pub omega_max: T,
    /// Control-penalty weight.
    pub alpha: T,
    /// Minimum target distance from the base, meters.
    pub target_min_radius: T,
    /// Point-robot displacement per unit action.
    pub dt_point: T,
    pub goal_radius: T,
    /// Terminal distance to the goal within which the point robot is rewarded.
    pub success_radius: T,
    pub seed: u64,
}

impl<T: Scalar> EnvConfig<T> {
    pub fn reacher() -> Self {
        Self {
            kind: EnvKind::Reacher2,
            horizon: 50,
            dt: T::of(0.02),
            link_lengths: (T::of(0.1), T::of(0.1)),
            torque_gain: T::of(10.0),
            damping: T::of(1.0),
            omega_max: T::of(8.0),
            alpha: T::of(0.1),
            target_min_radius: T::of(0.05),
            dt_point: T::one(),
            goal_radius: T::of(10.0),
            success_radius: T::one(),
            seed: 0,
        }
    }

    pub fn point() -> Self {
        Self {
            kind: EnvKind::PointSparse,
            horizon: 12,
            ..Self::reacher()
        }
    }

    pub fn for_kind(kind: EnvKind) -> Self {
        match kind {
            EnvKind::Reacher2 => Self::reacher(),
            EnvKind::PointSparse => Self::point(),
        }
    }

    pub fn state_dim(&self) -> usize {
        self.kind.state_dim()
    }

    pub fn validate(&self) -> Result<()> {
        let pos = |v: T| v > T::zero() && v.is_finite();
        if self.horizon < 1 {
            return Err(invalid!("horizon must be >= 1"));
        }
        if !pos(self.dt) || !pos(self.dt_point) {
            return Err(invalid!("dt and dt_point must be > 0"));
        }
        if !(self.alpha >= T::zero() && self.alpha <= T::one()) {
            return Err(invalid!("alpha must lie in [0, 1], got {}", self.alpha));
        }
        if !pos(self.link_lengths.0) || !pos(self.link_lengths.1) {
            return Err(invalid!("link lengths must be > 0"));
        }
        if !pos(self.torque_gain) || !pos(self.omega_max) || !(self.damping >= T::zero()) {
            return Err(invalid!("torque_gain, omega_max must be > 0 and damping >= 0"));
        }
        if !(self.target_min_radius >= T::zero())
            || self.target_min_radius >= self.link_lengths.0 + self.link_lengths.1
        {
            return Err(invalid!("target_min_radius must lie in [0, L0 + L1)"));
        }
        if !pos(self.goal_radius) || !pos(self.success_radius) {
            return Err(invalid!("goal_radius and success_radius must be > 0"));
        }
        Ok(())
    }
}

/// Initial state of an episode.
pub fn reset<T: Scalar, R: Rng + ?Sized>(config: &EnvConfig<T>, rng: &mut R) -> EnvState<T> {
    match config.kind {
        EnvKind::Reacher2 => reacher::reset(config, rng),
        EnvKind::PointSparse => point::reset(config, rng),
    }
}

/// Advances `state` (observed at episode index `t`) by one action.
pub fn step<T: Scalar>(
    state: &EnvState<T>,
    t: usize,
    action: Action<T>,
    config: &EnvConfig<T>,
    fault: &FaultSpec<T>,
) -> Result<StepResult<T>> {
    action.check_finite()?;
    if state.kind != config.kind || state.values.len() != config.state_dim() {
        return Err(invalid!(
            "state layout {:?}/{} does not match env {}",
            state.kind,
            state.values.len(),
            config.kind.name()
        ));
    }
    let action = action.clamped();
    let (next_state, reward) = match config.kind {
        EnvKind::Reacher2 => reacher::step(state, action, config, fault),
        EnvKind::PointSparse => point::step(state, t, action, config, fault),
    };
    let t = t + 1;
    Ok(StepResult {
        next_state,
        reward,
        terminal: t >= config.horizon,
        t,
    })
}

/// An environment instance: configuration, fault, current state and step index.
#[derive(Debug, Clone)]
pub struct Env<T> {
    pub config: EnvConfig<T>,
    pub fault: FaultSpec<T>,
    state: EnvState<T>,
    t: usize,
}

impl<T: Scalar> Env<T> {
    pub fn new<R: Rng + ?Sized>(config: EnvConfig<T>, fault: FaultSpec<T>, rng: &mut R) -> Result<Self> {
        config.validate()?;
        fault.validate()?;
        let state = reset(&config, rng);
        Ok(Self {
            config,
            fault,
            state,
            t: 0,
        })
    }

    pub fn reset<R: Rng + ?Sized>(&mut self, rng: &mut R) -> &EnvState<T> {
        self.state = reset(&self.config, rng);
        self.t = 0;
        &self.state
    }

    pub fn state(&self) -> &EnvState<T> {
        &self.state
    }

    pub fn t(&self) -> usize {
        self.t
    }

    pub fn step(&mut self, action: Action<T>) -> Result<StepResult<T>> {
        let res = step(&self.state, self.t, action, &self.config, &self.fault)?;
        self.state = res.next_state.clone();
        self.t = res.t;
        Ok(res)
    }
}

/// One row of a trajectory dump.
#[derive(Debug, Clone)]
pub struct TrajectoryRow<T> {
    pub t: usize,
    pub state: Vec<T>,
    pub action: Action<T>,
    pub reward: T,
}

/// Writes `t,s0..,a0..,r` rows.
pub fn write_trajectory_csv<T: Scalar>(path: &Path, rows: &[TrajectoryRow<T>]) -> Result<()> {
    let io = |e| Error::io(path, e);
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    let state_dim = rows.first().map_or(0, |r| r.state.len());
    let mut header = vec!["t".to_string()];
    header.extend((0..state_dim).map(|i| format!("s{i}")));
    header.extend((0..ACTION_DIM).map(|i| format!("a{i}")));
    header.push("r".into());
    writeln!(f, "{}", header.join(",")).map_err(io)?;
    for row in rows {
        let mut cells = vec![row.t.to_string()];
        cells.extend(row.state.iter().map(|v| format!("{:.5}", v.as_f64())));
        cells.extend(row.action.0.iter().map(|v| format!("{:.5}", v.as_f64())));
        cells.push(format!("{:.5}", row.reward.as_f64()));
        writeln!(f, "{}", cells.join(",")).map_err(io)?;
    }
    f.flush().map_err(io)
}
