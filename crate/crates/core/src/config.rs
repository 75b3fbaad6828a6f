//! Flat `section.key = value` configuration files.
//!
//! ```text
//! # point robot, small budget
//! env.kind = point_sparse
//! train.total_steps = 20000
//! net.hidden = 64, 64
//! ```
//!
//! Every field of [`TrainConfig`] is addressable. Files are applied on top of
//! a base config chosen by `env.kind` (and the desk-scale switch), so a file
//! only needs the keys it changes. [`to_config_string`] writes every key,
//! which makes the output a complete snapshot.

use std::fmt::Display;
use std::str::FromStr;

use crate::envs::{EnvConfig, EnvKind};
use crate::error::{Error, Result};
use crate::nn::Activation;
use crate::scalar::Scalar;
use crate::training::TrainConfig;

pub const KEYS: &[&str] = &[
    "env.kind",
    "env.horizon",
    "env.dt",
    "env.link_lengths",
    "env.torque_gain",
    "env.damping",
    "env.omega_max",
    "env.alpha",
    "env.target_min_radius",
    "env.dt_point",
    "env.goal_radius",
    "env.success_radius",
    "env.seed",
    "fault.kind",
    "flow.k",
    "flow.lambda",
    "flow.epsilon",
    "flow.action_measure",
    "flow.tau_soft",
    "flow.reward_shift",
    "net.hidden",
    "net.activation",
    "train.variant",
    "train.seed",
    "train.warmup_steps",
    "train.total_steps",
    "train.lr_warmup_start",
    "train.lr_warmup_max",
    "train.lr_flow",
    "train.lr_retrieval",
    "train.candidates",
    "train.batch_size",
    "train.retrieval_batch_size",
    "train.buffer_capacity",
    "train.updates_per_episode",
    "train.warmup_updates_per_episode",
    "train.gamma",
    "train.parallel_loss",
    "eval.interval",
    "eval.episodes",
    "eval.stability_window",
    "eval.stability_rel_threshold",
    "pretrain.transitions",
    "pretrain.epochs",
    "pretrain.lr",
    "pretrain.batch_size",
    "pretrain.holdout",
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entry {
    pub key: String,
    pub value: String,
    pub line: usize,
}

/// Parsed but not yet applied key/value pairs, in file order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ConfigFile {
    pub entries: Vec<Entry>,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries: Vec<Entry> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let (k, v) = body
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {line}: expected 'key = value', got '{body}'")))?;
            let (key, value) = (k.trim(), v.trim());
            if !KEYS.contains(&key) {
                return Err(Error::Config(format!("line {line}: unknown key '{key}'")));
            }
            if value.is_empty() {
                return Err(Error::Config(format!("line {line}: empty value for '{key}'")));
            }
            if let Some(prev) = entries.iter().find(|e| e.key == key) {
                return Err(Error::Config(format!(
                    "line {line}: duplicate key '{key}' (first set on line {})",
                    prev.line
                )));
            }
            entries.push(Entry {
                key: key.to_string(),
                value: value.to_string(),
                line,
            });
        }
        Ok(Self { entries })
    }

    pub fn get(&self, key: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.key == key)
    }

    pub fn env_kind(&self) -> Result<Option<EnvKind>> {
        self.get("env.kind").map(|e| parse_value(e, &e.value)).transpose()
    }

    /// Overwrites the fields named in the file. `env.kind` must agree with
    /// `cfg.env.kind`; choose the base config with [`ConfigFile::env_kind`].
    pub fn apply<T: Scalar>(&self, cfg: &mut TrainConfig<T>) -> Result<()> {
        for e in &self.entries {
            apply_entry(cfg, e)?;
        }
        Ok(())
    }
}

fn parse_value<V: FromStr>(e: &Entry, s: &str) -> Result<V>
where
    V::Err: Display,
{
    s.trim()
        .parse()
        .map_err(|err| Error::Config(format!("line {}: bad value '{}' for {}: {err}", e.line, s.trim(), e.key)))
}

fn real<T: Scalar>(e: &Entry) -> Result<T> {
    let v: f64 = parse_value(e, &e.value)?;
    if !v.is_finite() {
        return Err(Error::Config(format!("line {}: {} must be finite", e.line, e.key)));
    }
    Ok(T::of(v))
}

fn list<V: FromStr>(e: &Entry) -> Result<Vec<V>>
where
    V::Err: Display,
{
    e.value.split(',').map(|s| parse_value(e, s)).collect()
}

fn boolean(e: &Entry) -> Result<bool> {
    match e.value.as_str() {
        "true" => Ok(true),
        "false" => Ok(false),
        other => Err(Error::Config(format!(
            "line {}: {} expects true or false, got '{other}'",
            e.line, e.key
        ))),
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            other => Err(Error::Config(format!("unknown activation '{other}'"))),
        }
    }
}

fn activation_name(a: Activation) -> &'static str {
    match a {
        Activation::Relu => "relu",
        Activation::Tanh => "tanh",
    }
}

fn apply_entry<T: Scalar>(c: &mut TrainConfig<T>, e: &Entry) -> Result<()> {
    match e.key.as_str() {
        "env.kind" => {
            let kind: EnvKind = parse_value(e, &e.value)?;
            if kind != c.env.kind {
                return Err(Error::Config(format!(
                    "line {}: env.kind {} does not match the base config ({})",
                    e.line,
                    kind.name(),
                    c.env.kind.name()
                )));
            }
        }
        "env.horizon" => c.env.horizon = parse_value(e, &e.value)?,
        "env.dt" => c.env.dt = real(e)?,
        "env.link_lengths" => {
            let v: Vec<f64> = list(e)?;
            if v.len() != 2 {
                return Err(Error::Config(format!("line {}: env.link_lengths needs two values", e.line)));
            }
            c.env.link_lengths = (T::of(v[0]), T::of(v[1]));
        }
        "env.torque_gain" => c.env.torque_gain = real(e)?,
        "env.damping" => c.env.damping = real(e)?,
        "env.omega_max" => c.env.omega_max = real(e)?,
        "env.alpha" => c.env.alpha = real(e)?,
        "env.target_min_radius" => c.env.target_min_radius = real(e)?,
        "env.dt_point" => c.env.dt_point = real(e)?,
        "env.goal_radius" => c.env.goal_radius = real(e)?,
        "env.success_radius" => c.env.success_radius = real(e)?,
        "env.seed" => c.env.seed = parse_value(e, &e.value)?,
        "fault.kind" => c.fault = parse_value(e, &e.value)?,
        "flow.k" => c.flow.k = parse_value(e, &e.value)?,
        "flow.lambda" => c.flow.lambda = real(e)?,
        "flow.epsilon" => c.flow.epsilon = real(e)?,
        "flow.action_measure" => c.flow.action_measure = real(e)?,
        "flow.tau_soft" => c.flow.tau_soft = real(e)?,
        "flow.reward_shift" => c.flow.reward_shift = real(e)?,
        "net.hidden" => c.net.hidden = list(e)?,
        "net.activation" => c.net.activation = parse_value(e, &e.value)?,
        "train.variant" => c.variant = parse_value(e, &e.value)?,
        "train.seed" => c.seed = parse_value(e, &e.value)?,
        "train.warmup_steps" => c.warmup_steps = parse_value(e, &e.value)?,
        "train.total_steps" => c.total_steps = parse_value(e, &e.value)?,
        "train.lr_warmup_start" => c.lr_warmup_start = real(e)?,
        "train.lr_warmup_max" => c.lr_warmup_max = real(e)?,
        "train.lr_flow" => c.lr_flow = real(e)?,
        "train.lr_retrieval" => c.lr_retrieval = real(e)?,
        "train.candidates" => c.candidates = parse_value(e, &e.value)?,
        "train.batch_size" => c.batch_size = parse_value(e, &e.value)?,
        "train.retrieval_batch_size" => c.retrieval_batch_size = parse_value(e, &e.value)?,
        "train.buffer_capacity" => c.buffer_capacity = parse_value(e, &e.value)?,
        "train.updates_per_episode" => c.updates_per_episode = parse_value(e, &e.value)?,
        "train.warmup_updates_per_episode" => c.warmup_updates_per_episode = parse_value(e, &e.value)?,
        "train.gamma" => c.gamma = real(e)?,
        "train.parallel_loss" => c.parallel_loss = boolean(e)?,
        "eval.interval" => c.eval_interval = parse_value(e, &e.value)?,
        "eval.episodes" => c.eval_episodes = parse_value(e, &e.value)?,
        "eval.stability_window" => c.stability_window = parse_value(e, &e.value)?,
        "eval.stability_rel_threshold" => c.stability_rel_threshold = real::<f64>(e)?,
        "pretrain.transitions" => c.pretrain.transitions = parse_value(e, &e.value)?,
        "pretrain.epochs" => c.pretrain.epochs = parse_value(e, &e.value)?,
        "pretrain.lr" => c.pretrain.lr = real(e)?,
        "pretrain.batch_size" => c.pretrain.batch_size = parse_value(e, &e.value)?,
        "pretrain.holdout" => c.pretrain.holdout = real(e)?,
        other => return Err(Error::Config(format!("line {}: unknown key '{other}'", e.line))),
    }
    Ok(())
}

/// Base config for `kind`, optionally with the desk-scale presets.
pub fn base_config<T: Scalar>(kind: EnvKind, desk_scale: bool) -> TrainConfig<T> {
    let env = EnvConfig::for_kind(kind);
    if desk_scale {
        TrainConfig::desk_scale(env)
    } else {
        TrainConfig::new(env)
    }
}

/// Parses `text` on top of the base config selected by `env` (or the file's
/// `env.kind`, defaulting to reacher2) and validates the result.
pub fn parse_train_config<T: Scalar>(text: &str, env: Option<EnvKind>, desk_scale: bool) -> Result<TrainConfig<T>> {
    let file = ConfigFile::parse(text)?;
    let kind = match (env, file.env_kind()?) {
        (Some(a), Some(b)) if a != b => {
            return Err(Error::Config(format!(
                "--env {} conflicts with env.kind = {} in the config file",
                a.name(),
                b.name()
            )))
        }
        (Some(k), _) | (None, Some(k)) => k,
        (None, None) => EnvKind::Reacher2,
    };
    let mut cfg = base_config(kind, desk_scale);
    file.apply(&mut cfg)?;
    cfg.validate()?;
    Ok(cfg)
}

/// Complete snapshot: parsing it back on any base yields `cfg` exactly.
pub fn to_config_string<T: Scalar>(c: &TrainConfig<T>) -> String {
    let join = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(", ");
    let mut out = String::new();
    let mut put = |k: &str, v: String| {
        out.push_str(k);
        out.push_str(" = ");
        out.push_str(&v);
        out.push('\n');
    };
    let e = &c.env;
    put("env.kind", e.kind.name().into());
    put("env.horizon", e.horizon.to_string());
    put("env.dt", e.dt.to_string());
    put("env.link_lengths", format!("{}, {}", e.link_lengths.0, e.link_lengths.1));
    put("env.torque_gain", e.torque_gain.to_string());
    put("env.damping", e.damping.to_string());
    put("env.omega_max", e.omega_max.to_string());
    put("env.alpha", e.alpha.to_string());
    put("env.target_min_radius", e.target_min_radius.to_string());
    put("env.dt_point", e.dt_point.to_string());
    put("env.goal_radius", e.goal_radius.to_string());
    put("env.success_radius", e.success_radius.to_string());
    put("env.seed", e.seed.to_string());
    put("fault.kind", c.fault.name().into());
    put("flow.k", c.flow.k.to_string());
    put("flow.lambda", c.flow.lambda.to_string());
    put("flow.epsilon", c.flow.epsilon.to_string());
    put("flow.action_measure", c.flow.action_measure.to_string());
    put("flow.tau_soft", c.flow.tau_soft.to_string());
    put("flow.reward_shift", c.flow.reward_shift.to_string());
    put("net.hidden", join(&c.net.hidden));
    put("net.activation", activation_name(c.net.activation).into());
    put("train.variant", c.variant.name().into());
    put("train.seed", c.seed.to_string());
    put("train.warmup_steps", c.warmup_steps.to_string());
    put("train.total_steps", c.total_steps.to_string());
    put("train.lr_warmup_start", c.lr_warmup_start.to_string());
    put("train.lr_warmup_max", c.lr_warmup_max.to_string());
    put("train.lr_flow", c.lr_flow.to_string());
    put("train.lr_retrieval", c.lr_retrieval.to_string());
    put("train.candidates", c.candidates.to_string());
    put("train.batch_size", c.batch_size.to_string());
    put("train.retrieval_batch_size", c.retrieval_batch_size.to_string());
    put("train.buffer_capacity", c.buffer_capacity.to_string());
    put("train.updates_per_episode", c.updates_per_episode.to_string());
    put("train.warmup_updates_per_episode", c.warmup_updates_per_episode.to_string());
    put("train.gamma", c.gamma.to_string());
    put("train.parallel_loss", c.parallel_loss.to_string());
    put("eval.interval", c.eval_interval.to_string());
    put("eval.episodes", c.eval_episodes.to_string());
    put("eval.stability_window", c.stability_window.to_string());
    put("eval.stability_rel_threshold", c.stability_rel_threshold.to_string());
    put("pretrain.transitions", c.pretrain.transitions.to_string());
    put("pretrain.epochs", c.pretrain.epochs.to_string());
    put("pretrain.lr", c.pretrain.lr.to_string());
    put("pretrain.batch_size", c.pretrain.batch_size.to_string());
    put("pretrain.holdout", c.pretrain.holdout.to_string());
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::FaultKind;
    use crate::training::Variant;

    #[test]
    fn snapshot_round_trips_on_any_base() {
        let mut c: TrainConfig<f64> = base_config(EnvKind::PointSparse, true);
        c.seed = 17;
        c.flow.reward_shift = 0.1 + 0.2;
        c.variant = Variant::V2SeparateBuffers;
        c.fault = FaultKind::ActuatorDamage;
        c.net.activation = Activation::Tanh;
        let text = to_config_string(&c);
        for desk in [false, true] {
            let back: TrainConfig<f64> = parse_train_config(&text, None, desk).unwrap();
            assert_eq!(back, c);
        }
        assert_eq!(text.lines().count(), KEYS.len());
        for (line, key) in text.lines().zip(KEYS) {
            assert!(line.starts_with(&format!("{key} = ")), "{line}");
        }
    }

    #[test]
    fn comments_blank_lines_and_partial_files() {
        let text = "# header\n\n env.kind = point_sparse  # trailing\ntrain.total_steps=2000\ntrain.warmup_steps = 500\n";
        let c: TrainConfig<f64> = parse_train_config(text, None, false).unwrap();
        assert_eq!(c.env.kind, EnvKind::PointSparse);
        assert_eq!(c.total_steps, 2000);
        assert_eq!(c.warmup_steps, 500);
        assert_eq!(c.candidates, 100);
    }

    #[test]
    fn errors_name_the_line() {
        let cases = [
            ("train.seed = 1\nbogus.key = 3\n", "line 2"),
            ("train.seed = x\n", "line 1"),
            ("train.seed = 1\ntrain.seed = 2\n", "duplicate"),
            ("no equals sign\n", "line 1"),
            ("train.lr_flow = nan\n", "finite"),
            ("net.hidden = 64, x\n", "line 1"),
            ("train.variant = v3\n", "unknown variant"),
            ("train.parallel_loss = yes\n", "true or false"),
        ];
        for (text, needle) in cases {
            let err = parse_train_config::<f64>(text, None, false).unwrap_err();
            assert!(matches!(err, Error::Config(_)), "{err}");
            assert!(err.to_string().contains(needle), "{text:?}: {err}");
        }
    }

    #[test]
    fn validation_runs_after_parsing() {
        let err = parse_train_config::<f64>("train.warmup_steps = 10\ntrain.total_steps = 5\n", None, false).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        let err = parse_train_config::<f64>("train.lr_flow = 0\n", None, false).unwrap_err();
        assert!(err.to_string().contains("learning rates"));
    }

    #[test]
    fn env_flag_conflict() {
        let err = parse_train_config::<f64>("env.kind = reacher2\n", Some(EnvKind::PointSparse), false).unwrap_err();
        assert!(err.to_string().contains("conflicts"));
        let c: TrainConfig<f64> = parse_train_config("", Some(EnvKind::PointSparse), false).unwrap();
        assert_eq!(c.env.kind, EnvKind::PointSparse);
    }

    #[test]
    fn f32_configs_parse() {
        let c: TrainConfig<f32> = parse_train_config("flow.lambda = 2.5\n", None, true).unwrap();
        assert_eq!(c.flow.lambda, 2.5f32);
    }
}
