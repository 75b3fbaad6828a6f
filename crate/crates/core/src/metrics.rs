//! Evaluation rollouts, run statistics and the metrics CSV files.
//!
//! Standard deviations use the population convention (divisor `n`) and the
//! confidence-interval width is `2·std/√n`.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::envs::{Action, Env, EnvConfig, FaultSpec, TrajectoryRow};
use crate::error::{Error, Result};
use crate::flow::{action_probability_buffer, sample_action, FlowNet};
use crate::rng::seed_stream;
use crate::scalar::Scalar;

/// Number of trailing evaluations used for final performance.
pub const FINAL_WINDOW: usize = 20;
pub const METRICS_HEADER: &str = "timestep,mean_reward,std_reward,ci_width,n";
pub const SUMMARY_HEADER: &str = "final_performance_mean,final_performance_std,sample_efficiency_timesteps";
pub const NOT_STABILIZED: &str = "not-stabilized";

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub timestep: u64,
    pub mean_reward: f64,
    pub std_reward: f64,
    pub ci_width: f64,
    pub n: usize,
}

impl EvalReport {
    /// Statistics of a set of episode returns. Returns are sorted first so
    /// the result does not depend on rollout completion order.
    pub fn from_returns(timestep: u64, returns: &[f64]) -> Result<Self> {
        if returns.len() < 2 {
            return Err(Error::Precondition(format!(
                "need at least 2 episode returns, got {}",
                returns.len()
            )));
        }
        let mut sorted = returns.to_vec();
        sorted.sort_by(f64::total_cmp);
        let (mean, std) = mean_std(&sorted);
        Ok(Self {
            timestep,
            mean_reward: mean,
            std_reward: std,
            ci_width: ci_width(std, sorted.len()),
            n: sorted.len(),
        })
    }
}

pub fn ci_width(std: f64, n: usize) -> f64 {
    2.0 * std / (n as f64).sqrt()
}

/// Mean and population standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Action selection used during evaluation rollouts.
#[derive(Debug, Clone, Copy)]
pub enum Policy<'a, T> {
    /// Softmax over `m` uniformly drawn candidates weighted by the flow net.
    Flow { net: &'a FlowNet<T>, m: usize, tau: T },
    Uniform,
}

/// Undiscounted return of one episode from `seed`.
pub fn rollout_return<T: Scalar>(
    policy: Policy<'_, T>,
    env: &EnvConfig<T>,
    fault: &FaultSpec<T>,
    seed: u64,
) -> Result<f64> {
    rollout(policy, env, fault, seed, None)
}

/// Same episode as [`rollout_return`] with `seed`, recorded step by step.
pub fn rollout_trajectory<T: Scalar>(
    policy: Policy<'_, T>,
    env: &EnvConfig<T>,
    fault: &FaultSpec<T>,
    seed: u64,
) -> Result<Vec<TrajectoryRow<T>>> {
    let mut rows = Vec::new();
    rollout(policy, env, fault, seed, Some(&mut rows))?;
    Ok(rows)
}

fn rollout<T: Scalar>(
    policy: Policy<'_, T>,
    env: &EnvConfig<T>,
    fault: &FaultSpec<T>,
    seed: u64,
    mut rows: Option<&mut Vec<TrajectoryRow<T>>>,
) -> Result<f64> {
    let mut rng = seed_stream(seed, 0);
    let mut env = Env::new(env.clone(), *fault, &mut rng)?;
    let mut total = 0.0;
    loop {
        let a = match policy {
            Policy::Flow { net, m, tau } => {
                let buf = action_probability_buffer(net, env.state(), m, tau, &mut rng)?;
                sample_action(&buf, &mut rng)
            }
            Policy::Uniform => Action::sample_uniform(&mut rng),
        };
        let (t, state) = (env.t(), env.state().values.clone());
        let res = env.step(a)?;
        if let Some(rows) = rows.as_deref_mut() {
            rows.push(TrajectoryRow {
                t,
                state,
                action: a.clamped(),
                reward: res.reward,
            });
        }
        total += res.reward.as_f64();
        if res.terminal {
            return Ok(total);
        }
    }
}

/// Runs `n` independent episodes (in parallel) and summarizes their returns.
pub fn evaluate<T: Scalar>(
    policy: Policy<'_, T>,
    env: &EnvConfig<T>,
    fault: &FaultSpec<T>,
    n: usize,
    timestep: u64,
    seed: u64,
) -> Result<EvalReport> {
    if n < 2 {
        return Err(Error::Precondition(format!("evaluation needs n >= 2, got {n}")));
    }
    let returns = (0..n as u64)
        .into_par_iter()
        .map(|i| rollout_return(policy, env, fault, episode_seed(seed, i)))
        .collect::<Result<Vec<f64>>>()?;
    EvalReport::from_returns(timestep, &returns)
}

/// Seed of episode `i` in an evaluation seeded with `seed`.
pub fn episode_seed(seed: u64, i: u64) -> u64 {
    rand::RngCore::next_u64(&mut seed_stream(seed, i))
}

/// Mean and std of `mean_reward` over exactly the last [`FINAL_WINDOW`] reports.
pub fn final_performance(reports: &[EvalReport]) -> Result<(f64, f64)> {
    if reports.len() < FINAL_WINDOW {
        return Err(Error::Precondition(format!(
            "final performance needs {FINAL_WINDOW} evaluations, have {}",
            reports.len()
        )));
    }
    let tail: Vec<f64> = reports[reports.len() - FINAL_WINDOW..]
        .iter()
        .map(|r| r.mean_reward)
        .collect();
    Ok(mean_std(&tail))
}

/// Timestep of the first report closing a window of `window` evaluations whose
/// std is within `rel_threshold · |mean|`; `None` when the series never settles.
pub fn sample_efficiency(reports: &[EvalReport], window: usize, rel_threshold: f64) -> Result<Option<u64>> {
    if window < 2 {
        return Err(Error::Precondition(format!("stabilization window must be >= 2, got {window}")));
    }
    if reports.len() < window {
        return Ok(None);
    }
    let series: Vec<f64> = reports.iter().map(|r| r.mean_reward).collect();
    Ok(series
        .windows(window)
        .position(|w| {
            let (mean, std) = mean_std(w);
            std <= rel_threshold * mean.abs()
        })
        .map(|start| reports[start + window - 1].timestep))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub final_performance_mean: f64,
    pub final_performance_std: f64,
    pub sample_efficiency_timesteps: Option<u64>,
}

impl RunSummary {
    pub fn from_reports(reports: &[EvalReport], window: usize, rel_threshold: f64) -> Result<Self> {
        let (mean, std) = final_performance(reports)?;
        Ok(Self {
            final_performance_mean: mean,
            final_performance_std: std,
            sample_efficiency_timesteps: sample_efficiency(reports, window, rel_threshold)?,
        })
    }
}

/// Five fixed decimals with trailing zeros removed (`-3.50000` → `-3.5`).
pub fn format_real(v: f64) -> String {
    let s = format!("{v:.5}");
    let s = if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    };
    if s == "-0" {
        "0".into()
    } else {
        s
    }
}

pub fn metrics_csv(reports: &[EvalReport]) -> String {
    let mut out = String::with_capacity(32 * (reports.len() + 1));
    out.push_str(METRICS_HEADER);
    out.push('\n');
    for r in reports {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.timestep,
            format_real(r.mean_reward),
            format_real(r.std_reward),
            format_real(ci_width(r.std_reward, r.n)),
            r.n
        );
    }
    out
}

pub fn summary_csv(summary: Option<&RunSummary>) -> String {
    let mut out = format!("{SUMMARY_HEADER}\n");
    if let Some(s) = summary {
        let eff = s
            .sample_efficiency_timesteps
            .map_or_else(|| NOT_STABILIZED.to_string(), |t| t.to_string());
        let _ = writeln!(
            out,
            "{},{},{}",
            format_real(s.final_performance_mean),
            format_real(s.final_performance_std),
            eff
        );
    }
    out
}

/// Writes `metrics.csv` and `summary.csv` into `dir`.
pub fn emit_metrics(dir: &Path, reports: &[EvalReport], summary: Option<&RunSummary>) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let m = dir.join("metrics.csv");
    std::fs::write(&m, metrics_csv(reports)).map_err(|e| Error::io(&m, e))?;
    let s = dir.join("summary.csv");
    std::fs::write(&s, summary_csv(summary)).map_err(|e| Error::io(&s, e))
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<EvalReport>> {
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(Error::Format("metrics.csv header mismatch".into()));
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let bad = || Error::Format(format!("metrics.csv row {}: '{line}'", i + 1));
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() != 5 {
                return Err(bad());
            }
            let real = |s: &str| s.parse::<f64>().map_err(|_| bad());
            Ok(EvalReport {
                timestep: cells[0].parse().map_err(|_| bad())?,
                mean_reward: real(cells[1])?,
                std_reward: real(cells[2])?,
                ci_width: real(cells[3])?,
                n: cells[4].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

pub fn read_metrics(path: &Path) -> Result<Vec<EvalReport>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_metrics_csv(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rep(t: u64, mean: f64) -> EvalReport {
        EvalReport { timestep: t, mean_reward: mean, std_reward: 0.0, ci_width: 0.0, n: 10 }
    }

    #[test]
    fn equal_returns() {
        let r = EvalReport::from_returns(5, &[-2.0; 10]).unwrap();
        assert_eq!((r.mean_reward, r.std_reward, r.ci_width), (-2.0, 0.0, 0.0));
    }

    #[test]
    fn two_returns() {
        let r = EvalReport::from_returns(0, &[0.0, 2.0]).unwrap();
        assert_eq!((r.mean_reward, r.std_reward), (1.0, 1.0));
        assert!((r.ci_width - 2.0 / 2f64.sqrt()).abs() < 1e-12);
        // golden value at the CSV resolution
        assert_eq!(format_real(r.ci_width), "1.41421");
        assert!(EvalReport::from_returns(0, &[1.0]).is_err());
    }

    #[test]
    fn ci_for_ten() {
        assert!((ci_width(1.0, 10) - 2.0 / 10f64.sqrt()).abs() <= 1e-12);
        assert!((ci_width(1.0, 10) - 0.63246).abs() < 1e-5);
    }

    #[test]
    fn final_performance_cases() {
        let same: Vec<_> = (0..20).map(|i| rep(i, 3.25)).collect();
        assert_eq!(final_performance(&same).unwrap(), (3.25, 0.0));

        let seq: Vec<_> = (1..=20).map(|i| rep(i, i as f64)).collect();
        let (m, s) = final_performance(&seq).unwrap();
        // population std of 1..=20 is sqrt((20² − 1)/12)
        assert!((m - 10.5).abs() < 1e-12);
        assert!((s - (399.0f64 / 12.0).sqrt()).abs() < 1e-12);
        assert!((s - 5.76628).abs() < 1e-5);

        let mut longer: Vec<_> = (0..5).map(|i| rep(i, 1e6)).collect();
        longer.extend(seq.iter().cloned());
        assert_eq!(final_performance(&longer).unwrap(), (m, s));

        match final_performance(&seq[..19]) {
            Err(Error::Precondition(msg)) => assert!(msg.contains("19")),
            other => panic!("{other:?}"),
        }
    }

    /// Independent brute-force scan used as the oracle for `sample_efficiency`.
    fn scan_oracle(series: &[(u64, f64)], w: usize, rel: f64) -> Option<u64> {
        for end in w - 1..series.len() {
            let vals: Vec<f64> = series[end + 1 - w..=end].iter().map(|p| p.1).collect();
            let m = vals.iter().sum::<f64>() / w as f64;
            let var = vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / w as f64;
            if var.sqrt() <= rel * m.abs() {
                return Some(series[end].0);
            }
        }
        None
    }

    #[test]
    fn sample_efficiency_cases() {
        let constant: Vec<_> = (1..=30).map(|i| rep(i * 100, 4.0)).collect();
        assert_eq!(sample_efficiency(&constant, 10, 0.05).unwrap(), Some(1000));

        let alternating: Vec<_> = (1..=50).map(|i| rep(i, if i % 2 == 0 { 10.0 } else { -10.0 })).collect();
        assert_eq!(sample_efficiency(&alternating, 10, 0.05).unwrap(), None);

        let series: Vec<(u64, f64)> = (0..60)
            .map(|i| {
                let base = 5.0 + 5.0 * (-(i as f64) / 6.0).exp();
                let wiggle = if i % 2 == 0 { 0.1 } else { -0.1 };
                ((i + 1) * 1000, base + wiggle)
            })
            .collect();
        let reports: Vec<_> = series.iter().map(|&(t, v)| rep(t, v)).collect();
        let want = scan_oracle(&series, 10, 0.05);
        assert!(want.is_some());
        assert_eq!(sample_efficiency(&reports, 10, 0.05).unwrap(), want);
        assert!(sample_efficiency(&reports, 1, 0.05).is_err());
    }

    #[test]
    fn golden_row() {
        let r = EvalReport { timestep: 110000, mean_reward: -3.5, std_reward: 0.5, ci_width: ci_width(0.5, 10), n: 10 };
        assert_eq!(metrics_csv(&[r]), format!("{METRICS_HEADER}\n110000,-3.5,0.5,0.31623,10\n"));
        assert_eq!(metrics_csv(&[]), format!("{METRICS_HEADER}\n"));
        assert_eq!(format_real(-0.000001), "0");
        assert_eq!(format_real(2.0), "2");
    }

    #[test]
    fn emit_is_idempotent() {
        let dir = tempfile::tempdir().unwrap();
        let reports: Vec<_> = (1..=25).map(|i| EvalReport::from_returns(i * 10, &[i as f64, 0.5 * i as f64]).unwrap()).collect();
        let summary = RunSummary::from_reports(&reports, 10, 0.05).unwrap();
        emit_metrics(dir.path(), &reports, Some(&summary)).unwrap();
        let a = std::fs::read(dir.path().join("metrics.csv")).unwrap();
        let sa = std::fs::read(dir.path().join("summary.csv")).unwrap();
        emit_metrics(dir.path(), &reports, Some(&summary)).unwrap();
        assert_eq!(a, std::fs::read(dir.path().join("metrics.csv")).unwrap());
        assert_eq!(sa, std::fs::read(dir.path().join("summary.csv")).unwrap());
        let text = String::from_utf8(sa).unwrap();
        assert!(text.starts_with(SUMMARY_HEADER));
        assert!(text.ends_with('\n'));
    }

    proptest! {
        #[test]
        fn csv_round_trip(rows in proptest::collection::vec((0u64..10_000_000, -100.0f64..100.0, 0.0f64..50.0, 2usize..50), 0..30)) {
            let reports: Vec<EvalReport> = rows
                .iter()
                .map(|&(t, m, s, n)| EvalReport { timestep: t, mean_reward: m, std_reward: s, ci_width: ci_width(s, n), n })
                .collect();
            for r in &reports {
                prop_assert!((ci_width(r.std_reward, r.n) - r.ci_width).abs() <= 1e-9);
            }
            let back = parse_metrics_csv(&metrics_csv(&reports)).unwrap();
            prop_assert_eq!(back.len(), reports.len());
            for (a, b) in back.iter().zip(&reports) {
                prop_assert_eq!(a.timestep, b.timestep);
                prop_assert_eq!(a.n, b.n);
                prop_assert!((a.mean_reward - b.mean_reward).abs() <= 5e-6);
                prop_assert!((a.std_reward - b.std_reward).abs() <= 5e-6);
                prop_assert!((a.ci_width - b.ci_width).abs() <= 5e-6);
            }
        }

        #[test]
        fn final_performance_ignores_prefix(
            tail in proptest::collection::vec(-50.0f64..50.0, 20),
            prefix in proptest::collection::vec(-1e3f64..1e3, 0..10),
        ) {
            let mk = |v: &[f64]| v.iter().enumerate().map(|(i, &m)| rep(i as u64, m)).collect::<Vec<_>>();
            let mut all = prefix.clone();
            all.extend(&tail);
            prop_assert_eq!(final_performance(&mk(&tail)).unwrap(), final_performance(&mk(&all)).unwrap());
        }

        #[test]
        fn refinement_does_not_delay_detection(
            level in 1.0f64..10.0,
            amp in 0.0f64..5.0,
            tau in 1.0f64..8.0,
            noise in proptest::collection::vec(-0.01f64..0.01, 80),
        ) {
            // Settling curve sampled every 2 steps (coarse) and every step (fine).
            let curve = |t: u64, k: usize| level + amp * (-(t as f64) / tau).exp() + level * noise[k];
            let interval = 2u64;
            let coarse: Vec<_> = (1..=40u64).map(|i| rep(i * interval, curve(i * interval, (2 * i - 1) as usize))).collect();
            let fine: Vec<_> = (1..=80u64).map(|t| {
                if t % 2 == 0 { coarse[(t / 2 - 1) as usize].clone() } else { rep(t, curve(t, (t - 1) as usize)) }
            }).collect();
            let c = sample_efficiency(&coarse, 10, 0.05).unwrap();
            let f = sample_efficiency(&fine, 10, 0.05).unwrap();
            if let Some(ct) = c {
                prop_assert!(f.is_some());
                prop_assert!(f.unwrap() <= ct + interval, "fine {:?} coarse {}", f, ct);
            }
        }
    }
}
