//! Flow network: log-flow evaluation, the action-probability sampling
//! policy, inflow/outflow estimates and the continuous flow-matching loss.
//!
//! The loss for one state `s` with reward `r` is
//!
//! ```text
//! ( log(ε + Σₖ exp F(G(s, aₖ), aₖ)) − log(ε + λ r + Σₖ exp F(s, aₖ)) )²
//! ```
//!
//! with `K` actions drawn uniformly per state. Retrieval outputs are treated
//! as constants, so only the flow parameters receive gradient. For terminal
//! states the outflow sum is masked and the outflow reduces to `ε + λ r`.

use rand::Rng;
use rayon::prelude::*;

use crate::envs::{Action, EnvState, ACTION_DIM, ACTION_SPACE_MEASURE};
use crate::error::{invalid, Error, Result};
use crate::nn::{Mlp, Trace};
use crate::retrieval::RetrievalNet;
use crate::rng::seed_stream;
use crate::scalar::{log_sum_exp, Scalar};

/// Lower bound applied to the outflow log argument.
pub const OUTFLOW_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct FlowNet<T> {
    pub net: Mlp<T>,
}

impl<T: Scalar> FlowNet<T> {
    /// Wraps a `(state_dim + 2) → 1` network whose output is the log-flow.
    pub fn new(net: Mlp<T>) -> Result<Self> {
        if net.output_dim() != 1 || net.input_dim() <= ACTION_DIM {
            return Err(invalid!(
                "flow net must map state_dim + {ACTION_DIM} -> 1, got {} -> {}",
                net.input_dim(),
                net.output_dim()
            ));
        }
        Ok(Self { net })
    }

    pub fn state_dim(&self) -> usize {
        self.net.input_dim() - ACTION_DIM
    }

    pub fn log_flow(&self, s: &[T], a: &Action<T>) -> Result<T> {
        if s.len() != self.state_dim() {
            return Err(invalid!("state has {} entries, flow net expects {}", s.len(), self.state_dim()));
        }
        let mut ev = Evaluator::new(self);
        Ok(ev.eval(self, s, a))
    }
}

/// Reusable input buffer and trace for repeated single-sample evaluations.
struct Evaluator<T> {
    input: Vec<T>,
    trace: Trace<T>,
}

impl<T: Scalar> Evaluator<T> {
    fn new(net: &FlowNet<T>) -> Self {
        Self {
            input: Vec::with_capacity(net.net.input_dim()),
            trace: Trace::new(net.net.spec()),
        }
    }

    fn eval(&mut self, net: &FlowNet<T>, s: &[T], a: &Action<T>) -> T {
        self.input.clear();
        self.input.extend_from_slice(s);
        self.input.extend_from_slice(a.as_slice());
        net.net.forward_traced(&self.input, &mut self.trace)[0]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowLossConfig<T> {
    /// Actions sampled per state for the inflow/outflow sums.
    pub k: usize,
    /// Reward scaling factor.
    pub lambda: T,
    /// Log stabilizer.
    pub epsilon: T,
    pub action_measure: T,
    /// Softmax temperature of the sampling policy.
    pub tau_soft: T,
    /// Added to every reward before scaling; 0 disables.
    pub reward_shift: T,
}

impl<T: Scalar> Default for FlowLossConfig<T> {
    fn default() -> Self {
        Self {
            k: 20,
            lambda: T::of(ACTION_SPACE_MEASURE),
            epsilon: T::one(),
            action_measure: T::of(ACTION_SPACE_MEASURE),
            tau_soft: T::one(),
            reward_shift: T::zero(),
        }
    }
}

impl<T: Scalar> FlowLossConfig<T> {
    pub fn validate(&self) -> Result<()> {
        if self.k < 1 {
            return Err(invalid!("K must be >= 1"));
        }
        if !(self.lambda > T::zero()) || !(self.epsilon > T::zero()) || !(self.tau_soft > T::zero()) {
            return Err(invalid!("lambda, epsilon and tau_soft must be > 0"));
        }
        if !self.reward_shift.is_finite() {
            return Err(invalid!("reward_shift must be finite"));
        }
        Ok(())
    }
}

/// Candidate actions with softmax probabilities over their log-flows.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionProbabilityBuffer<T> {
    pub actions: Vec<Action<T>>,
    pub log_flows: Vec<T>,
    pub probs: Vec<T>,
}

impl<T: Scalar> ActionProbabilityBuffer<T> {
    /// Softmax of `log_flows / tau`, max-subtracted before exponentiation.
    pub fn from_log_flows(actions: Vec<Action<T>>, log_flows: Vec<T>, tau: T) -> Result<Self> {
        if actions.is_empty() || actions.len() != log_flows.len() {
            return Err(invalid!(
                "need matching non-empty actions/log-flows, got {}/{}",
                actions.len(),
                log_flows.len()
            ));
        }
        if log_flows.iter().any(|f| !f.is_finite()) {
            return Err(Error::Numeric("non-finite log-flow in action buffer".into()));
        }
        let m = log_flows.iter().copied().fold(T::neg_infinity(), T::max);
        let mut probs: Vec<T> = log_flows.iter().map(|&f| ((f - m) / tau).exp()).collect();
        let z: T = probs.iter().copied().sum();
        probs.iter_mut().for_each(|p| *p /= z);
        Ok(Self {
            actions,
            log_flows,
            probs,
        })
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

/// Draws `m` uniform candidate actions and weights them by the flow network.
pub fn action_probability_buffer<T: Scalar, R: Rng + ?Sized>(
    net: &FlowNet<T>,
    s: &EnvState<T>,
    m: usize,
    tau: T,
    rng: &mut R,
) -> Result<ActionProbabilityBuffer<T>> {
    if m < 1 {
        return Err(invalid!("M must be >= 1"));
    }
    if s.dim() != net.state_dim() {
        return Err(invalid!("state has {} entries, flow net expects {}", s.dim(), net.state_dim()));
    }
    let actions: Vec<Action<T>> = (0..m).map(|_| Action::sample_uniform(rng)).collect();
    let mut ev = Evaluator::new(net);
    let log_flows = actions.iter().map(|a| ev.eval(net, &s.values, a)).collect();
    ActionProbabilityBuffer::from_log_flows(actions, log_flows, tau)
}

/// Categorical draw from the buffer's probabilities.
pub fn sample_action<T: Scalar, R: Rng + ?Sized>(buffer: &ActionProbabilityBuffer<T>, rng: &mut R) -> Action<T> {
    let u = T::of(rng.gen::<f64>());
    let mut acc = T::zero();
    for (a, &p) in buffer.actions.iter().zip(&buffer.probs) {
        acc += p;
        if u < acc {
            return *a;
        }
    }
    // rounding left u above the cumulative sum: take the last candidate with mass
    let last = buffer.probs.iter().rposition(|&p| p > T::zero()).unwrap_or(buffer.len() - 1);
    buffer.actions[last]
}

/// `log(c + Σ exp xᵢ)` together with `∂/∂xᵢ`, clamping the argument at
/// [`OUTFLOW_FLOOR`]. `c` may be non-positive.
#[derive(Debug, Clone)]
pub(crate) struct LogFlowSum<T> {
    pub value: T,
    pub weights: Vec<T>,
    pub clamped: bool,
}

pub(crate) fn log_offset_sum_exp<T: Scalar>(c: T, xs: &[T]) -> LogFlowSum<T> {
    let floor = T::of(OUTFLOW_FLOOR);
    let clamped = || LogFlowSum {
        value: floor.ln(),
        weights: vec![T::zero(); xs.len()],
        clamped: true,
    };
    let value = if c > T::zero() {
        let head = c.ln();
        let m = xs.iter().copied().fold(head, T::max);
        m + ((head - m).exp() + xs.iter().map(|&x| (x - m).exp()).sum::<T>()).ln()
    } else {
        let s = log_sum_exp(xs);
        if s == T::neg_infinity() {
            return clamped();
        }
        let t = c * (-s).exp();
        if t <= -T::one() {
            return clamped();
        }
        s + t.ln_1p()
    };
    if !(value >= floor.ln()) {
        return clamped();
    }
    LogFlowSum {
        value,
        weights: xs.iter().map(|&x| (x - value).exp()).collect(),
        clamped: false,
    }
}

/// `log(ε + Σₖ exp F(G(s, aₖ), aₖ))`.
pub fn inflow_estimate<T: Scalar>(
    net: &FlowNet<T>,
    retrieval: &RetrievalNet<T>,
    s: &EnvState<T>,
    actions: &[Action<T>],
    cfg: &FlowLossConfig<T>,
) -> Result<T> {
    check_layouts(net, retrieval, s)?;
    let mut ev = Evaluator::new(net);
    let mut rtrace = Trace::new(retrieval.net.spec());
    let mut rin = Vec::with_capacity(s.dim() + ACTION_DIM);
    let flows: Vec<T> = actions
        .iter()
        .map(|a| {
            rin.clear();
            rin.extend_from_slice(&s.values);
            rin.extend_from_slice(a.as_slice());
            let parent = retrieval.predict_traced(&rin, &mut rtrace);
            ev.eval(net, parent, a)
        })
        .collect();
    Ok(log_offset_sum_exp(cfg.epsilon, &flows).value)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OutflowEstimate<T> {
    pub value: T,
    /// The log argument fell below [`OUTFLOW_FLOOR`] and was clamped.
    pub clamped: bool,
}

/// `log(ε + λ r + Σₖ exp F(s, aₖ))`, clamped at [`OUTFLOW_FLOOR`].
pub fn outflow_estimate<T: Scalar>(
    net: &FlowNet<T>,
    s: &EnvState<T>,
    r: T,
    actions: &[Action<T>],
    cfg: &FlowLossConfig<T>,
) -> Result<OutflowEstimate<T>> {
    if s.dim() != net.state_dim() {
        return Err(invalid!("state has {} entries, flow net expects {}", s.dim(), net.state_dim()));
    }
    let mut ev = Evaluator::new(net);
    let flows: Vec<T> = actions.iter().map(|a| ev.eval(net, &s.values, a)).collect();
    let c = cfg.epsilon + cfg.lambda * (r + cfg.reward_shift);
    let out = log_offset_sum_exp(c, &flows);
    Ok(OutflowEstimate {
        value: out.value,
        clamped: out.clamped,
    })
}

fn check_layouts<T: Scalar>(net: &FlowNet<T>, retrieval: &RetrievalNet<T>, s: &EnvState<T>) -> Result<()> {
    if retrieval.state_dim() != s.dim() || net.state_dim() != s.dim() {
        return Err(invalid!(
            "layout mismatch: state {} / flow {} / retrieval {}",
            s.dim(),
            net.state_dim(),
            retrieval.state_dim()
        ));
    }
    Ok(())
}

/// One state of a flow-matching batch.
#[derive(Debug, Clone, Copy)]
pub struct FlowSample<'a, T> {
    pub state: &'a EnvState<T>,
    pub reward: T,
    pub terminal: bool,
}

#[derive(Debug, Clone)]
pub struct FlowLoss<T> {
    pub loss: T,
    pub grad: Vec<T>,
    /// Number of states whose outflow argument was clamped.
    pub clamped_outflows: usize,
    pub per_state: Vec<T>,
}

struct StateTerm<T> {
    loss: T,
    clamped: bool,
}

struct Workspace<T> {
    flow_in: Vec<T>,
    ret_in: Vec<T>,
    ret_trace: Trace<T>,
    in_traces: Vec<Trace<T>>,
    out_traces: Vec<Trace<T>>,
    grad: Vec<T>,
}

impl<T: Scalar> Workspace<T> {
    fn new(net: &FlowNet<T>, retrieval: &RetrievalNet<T>, k: usize) -> Self {
        Self {
            flow_in: Vec::with_capacity(net.net.input_dim()),
            ret_in: Vec::with_capacity(net.net.input_dim()),
            ret_trace: Trace::new(retrieval.net.spec()),
            in_traces: (0..k).map(|_| Trace::new(net.net.spec())).collect(),
            out_traces: (0..k).map(|_| Trace::new(net.net.spec())).collect(),
            grad: vec![T::zero(); net.net.params().len()],
        }
    }
}

/// Loss of one state; its gradient is left in `ws.grad` (overwritten).
fn state_term<T: Scalar>(
    net: &FlowNet<T>,
    retrieval: &RetrievalNet<T>,
    sample: &FlowSample<'_, T>,
    cfg: &FlowLossConfig<T>,
    seed: u64,
    index: usize,
    ws: &mut Workspace<T>,
) -> StateTerm<T> {
    let mut rng = seed_stream(seed, index as u64);
    let actions: Vec<Action<T>> = (0..cfg.k).map(|_| Action::sample_uniform(&mut rng)).collect();
    let s = &sample.state.values;

    let mut in_flows = Vec::with_capacity(cfg.k);
    for (a, trace) in actions.iter().zip(ws.in_traces.iter_mut()) {
        ws.ret_in.clear();
        ws.ret_in.extend_from_slice(s);
        ws.ret_in.extend_from_slice(a.as_slice());
        let parent = retrieval.predict_traced(&ws.ret_in, &mut ws.ret_trace);
        ws.flow_in.clear();
        ws.flow_in.extend_from_slice(parent);
        ws.flow_in.extend_from_slice(a.as_slice());
        in_flows.push(net.net.forward_traced(&ws.flow_in, trace)[0]);
    }
    let inflow = log_offset_sum_exp(cfg.epsilon, &in_flows);

    let c = cfg.epsilon + cfg.lambda * (sample.reward + cfg.reward_shift);
    let mut out_flows = Vec::with_capacity(cfg.k);
    if !sample.terminal {
        for (a, trace) in actions.iter().zip(ws.out_traces.iter_mut()) {
            ws.flow_in.clear();
            ws.flow_in.extend_from_slice(s);
            ws.flow_in.extend_from_slice(a.as_slice());
            out_flows.push(net.net.forward_traced(&ws.flow_in, trace)[0]);
        }
    }
    let outflow = log_offset_sum_exp(c, &out_flows);

    let diff = inflow.value - outflow.value;
    ws.grad.iter_mut().for_each(|g| *g = T::zero());
    let two_diff = diff + diff;
    if diff != T::zero() {
        for (trace, &w) in ws.in_traces.iter_mut().zip(&inflow.weights) {
            net.net.backward_accumulate(trace, &[w], two_diff, &mut ws.grad);
        }
        for (trace, &w) in ws.out_traces.iter_mut().zip(&outflow.weights) {
            net.net.backward_accumulate(trace, &[w], -two_diff, &mut ws.grad);
        }
    }
    StateTerm {
        loss: diff * diff,
        clamped: outflow.clamped,
    }
}

/// Sum over the batch of squared inflow/outflow log differences, with the
/// gradient with respect to the flow parameters.
///
/// State `i` draws its `K` actions from stream `(seed, i)`, so
/// [`flow_matching_loss_parallel`] returns bit-identical results.
pub fn flow_matching_loss<T: Scalar>(
    net: &FlowNet<T>,
    retrieval: &RetrievalNet<T>,
    batch: &[FlowSample<'_, T>],
    cfg: &FlowLossConfig<T>,
    seed: u64,
) -> Result<FlowLoss<T>> {
    check_batch(net, retrieval, batch, cfg)?;
    let mut ws = Workspace::new(net, retrieval, cfg.k);
    let mut total = FlowLoss {
        loss: T::zero(),
        grad: vec![T::zero(); net.net.params().len()],
        clamped_outflows: 0,
        per_state: Vec::with_capacity(batch.len()),
    };
    for (i, sample) in batch.iter().enumerate() {
        let term = state_term(net, retrieval, sample, cfg, seed, i, &mut ws);
        accumulate(&mut total, term, &ws.grad);
    }
    finish(total, batch)
}

/// Parallel evaluation over states; per-state gradients are summed in batch
/// order, matching [`flow_matching_loss`] exactly.
pub fn flow_matching_loss_parallel<T: Scalar>(
    net: &FlowNet<T>,
    retrieval: &RetrievalNet<T>,
    batch: &[FlowSample<'_, T>],
    cfg: &FlowLossConfig<T>,
    seed: u64,
) -> Result<FlowLoss<T>> {
    check_batch(net, retrieval, batch, cfg)?;
    let terms: Vec<(StateTerm<T>, Vec<T>)> = batch
        .par_iter()
        .enumerate()
        .map_init(
            || Workspace::new(net, retrieval, cfg.k),
            |ws, (i, sample)| {
                let term = state_term(net, retrieval, sample, cfg, seed, i, ws);
                (term, ws.grad.clone())
            },
        )
        .collect();
    let mut total = FlowLoss {
        loss: T::zero(),
        grad: vec![T::zero(); net.net.params().len()],
        clamped_outflows: 0,
        per_state: Vec::with_capacity(batch.len()),
    };
    for (term, grad) in terms {
        accumulate(&mut total, term, &grad);
    }
    finish(total, batch)
}

fn check_batch<T: Scalar>(
    net: &FlowNet<T>,
    retrieval: &RetrievalNet<T>,
    batch: &[FlowSample<'_, T>],
    cfg: &FlowLossConfig<T>,
) -> Result<()> {
    cfg.validate()?;
    if batch.is_empty() {
        return Err(Error::Precondition("flow-matching loss needs a non-empty batch".into()));
    }
    for sample in batch {
        check_layouts(net, retrieval, sample.state)?;
    }
    Ok(())
}

fn accumulate<T: Scalar>(total: &mut FlowLoss<T>, term: StateTerm<T>, grad: &[T]) {
    total.loss += term.loss;
    total.per_state.push(term.loss);
    total.clamped_outflows += usize::from(term.clamped);
    for (g, &d) in total.grad.iter_mut().zip(grad) {
        *g += d;
    }
}

fn finish<T: Scalar>(total: FlowLoss<T>, batch: &[FlowSample<'_, T>]) -> Result<FlowLoss<T>> {
    if let Some(i) = total.per_state.iter().position(|l| !l.is_finite()) {
        let s = batch[i].state;
        return Err(Error::Numeric(format!(
            "non-finite flow-matching loss at batch index {i}: state {:?}, reward {}",
            s.values, batch[i].reward
        )));
    }
    if total.grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::Numeric("non-finite flow-matching gradient".into()));
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::EnvKind;
    use crate::nn::{Activation, MlpSpec};
    use crate::rng::seed_stream;

    fn flow_net(seed: u64, dim: usize, hidden: usize) -> FlowNet<f64> {
        let spec = MlpSpec::new(dim + 2, vec![hidden], 1, Activation::Tanh).unwrap();
        FlowNet::new(Mlp::init_uniform(spec, &mut seed_stream(seed, 0))).unwrap()
    }

    /// Flow net whose output is the constant `c` (zero weights, output bias `c`).
    fn const_flow(dim: usize, c: f64) -> FlowNet<f64> {
        let spec = MlpSpec::new(dim + 2, vec![2], 1, Activation::Relu).unwrap();
        let mut p = vec![0.0; spec.param_count()];
        *p.last_mut().unwrap() = c;
        FlowNet::new(Mlp::from_params(spec, p).unwrap()).unwrap()
    }

    fn ret_net(seed: u64, dim: usize) -> RetrievalNet<f64> {
        let spec = MlpSpec::new(dim + 2, vec![4], dim, Activation::Tanh).unwrap();
        RetrievalNet::new(Mlp::init_uniform(spec, &mut seed_stream(seed, 1))).unwrap()
    }

    /// Retrieval net that returns its state input unchanged (2-dim states).
    fn identity_retrieval() -> RetrievalNet<f64> {
        let spec = MlpSpec::new(4, vec![4], 2, Activation::Relu).unwrap();
        // hidden: [x0, -x0, x1, -x1]; output: h0 - h1, h2 - h3
        #[rustfmt::skip]
        let p = vec![
            1.0, 0.0, 0.0, 0.0,
            -1.0, 0.0, 0.0, 0.0,
            0.0, 1.0, 0.0, 0.0,
            0.0, -1.0, 0.0, 0.0,
            0.0, 0.0, 0.0, 0.0,
            1.0, -1.0, 0.0, 0.0,
            0.0, 0.0, 1.0, -1.0,
            0.0, 0.0,
        ];
        RetrievalNet::new(Mlp::from_params(spec, p).unwrap()).unwrap()
    }

    fn st(values: Vec<f64>) -> EnvState<f64> {
        EnvState {
            kind: EnvKind::PointSparse,
            values,
        }
    }

    #[test]
    fn equal_log_flows_uniform_probs() {
        let acts = vec![Action::zero(); 5];
        let b = ActionProbabilityBuffer::from_log_flows(acts, vec![0.7f64; 5], 1.0).unwrap();
        assert!(b.probs.iter().all(|&p| (p - 0.2).abs() < 1e-15));
    }

    #[test]
    fn two_candidate_softmax() {
        let acts = vec![Action::zero(); 2];
        let b = ActionProbabilityBuffer::from_log_flows(acts, vec![2f64.ln(), 0.0], 1.0).unwrap();
        assert!((b.probs[0] - 2.0 / 3.0).abs() < 1e-9);
        assert!((b.probs[1] - 1.0 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn softmax_survives_huge_log_flows() {
        let acts = vec![Action::zero(); 2];
        let b = ActionProbabilityBuffer::from_log_flows(acts, vec![1000.0f64, 999.0], 1.0).unwrap();
        assert!(b.probs.iter().all(|p| p.is_finite()));
        assert!((b.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn argmax_preserved_m100() {
        let net = flow_net(4, 4, 16);
        let s = st(vec![1.0, -2.0, 3.0, 0.5]);
        let b = action_probability_buffer(&net, &s, 100, 1.0, &mut seed_stream(2, 2)).unwrap();
        assert_eq!(b.len(), 100);
        assert!((b.probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        let argmax = |v: &[f64]| v.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        assert_eq!(argmax(&b.probs), argmax(&b.log_flows));
        for i in 0..100 {
            for j in 0..100 {
                if b.log_flows[i] > b.log_flows[j] {
                    assert!(b.probs[i] > b.probs[j]);
                }
            }
        }
    }

    #[test]
    fn sampling_cases() {
        let a = Action::new(0.1, 0.2);
        let b = Action::new(-0.3, 0.4);
        let single = ActionProbabilityBuffer::from_log_flows(vec![a], vec![0.0], 1.0).unwrap();
        assert_eq!(sample_action(&single, &mut seed_stream(0, 0)), a);

        let sure = ActionProbabilityBuffer {
            actions: vec![a, b],
            log_flows: vec![0.0, 0.0],
            probs: vec![1.0, 0.0],
        };
        let mut rng = seed_stream(1, 0);
        assert!((0..1000).all(|_| sample_action(&sure, &mut rng) == a));

        let skew = ActionProbabilityBuffer {
            actions: vec![a, b],
            log_flows: vec![0.0, 0.0],
            probs: vec![0.75, 0.25],
        };
        let mut rng = seed_stream(2, 0);
        let hits = (0..100_000).filter(|_| sample_action(&skew, &mut rng) == a).count();
        let freq = hits as f64 / 100_000.0;
        assert!((freq - 0.75).abs() <= 0.01, "{freq}");
    }

    #[test]
    fn inflow_hand_cases() {
        let cfg = FlowLossConfig::<f64> {
            epsilon: 1.0,
            ..Default::default()
        };
        let s = st(vec![0.3, -0.4]);
        let a = [Action::new(0.5, 0.5)];
        let v = inflow_estimate(&const_flow(2, 0.0), &identity_retrieval(), &s, &a, &cfg).unwrap();
        assert!((v - 2f64.ln()).abs() < 1e-15);

        let v = inflow_estimate(&const_flow(2, -800.0), &identity_retrieval(), &s, &a, &cfg).unwrap();
        assert!((0.0..1e-300).contains(&v));

        let c = 0.37;
        let a2 = [Action::new(0.5, 0.5), Action::new(-0.2, 0.1)];
        let v = inflow_estimate(&const_flow(2, c), &identity_retrieval(), &s, &a2, &cfg).unwrap();
        let naive = (1.0 + 2.0 * c.exp()).ln();
        assert!((v - naive).abs() < 1e-10);
    }

    #[test]
    fn outflow_hand_cases() {
        let s = st(vec![0.3, -0.4]);
        let a = [Action::new(0.5, 0.5)];
        let mut cfg = FlowLossConfig::<f64> {
            epsilon: 1.0,
            ..Default::default()
        };
        let o = outflow_estimate(&const_flow(2, 0.0), &s, 0.0, &a, &cfg).unwrap();
        assert!((o.value - 2f64.ln()).abs() < 1e-15 && !o.clamped);
        cfg.lambda = 1.0;
        let o = outflow_estimate(&const_flow(2, 0.0), &s, 1.0, &a, &cfg).unwrap();
        assert!((o.value - 3f64.ln()).abs() < 1e-15);
        let o = outflow_estimate(&const_flow(2, -50.0), &s, -10.0, &a, &cfg).unwrap();
        assert!(o.clamped);
        assert_eq!(o.value, OUTFLOW_FLOOR.ln());
    }

    #[test]
    fn negative_offset_without_clamp() {
        // c = -0.5, Σ exp = 2 → log(1.5)
        let r = log_offset_sum_exp(-0.5f64, &[0.0, 0.0]);
        assert!(!r.clamped);
        assert!((r.value - 1.5f64.ln()).abs() < 1e-15);
        assert!((r.weights[0] - 1.0 / 1.5).abs() < 1e-15);
    }

    #[test]
    fn hand_loss_log2_vs_log3() {
        // inflow log 2 (ε = 1, F = 0), outflow log 3 (λ r = 1)
        let cfg = FlowLossConfig::<f64> {
            k: 1,
            lambda: 1.0,
            epsilon: 1.0,
            ..Default::default()
        };
        let s = st(vec![0.1, 0.2]);
        let batch = [FlowSample {
            state: &s,
            reward: 1.0,
            terminal: false,
        }];
        let l = flow_matching_loss(&const_flow(2, 0.0), &identity_retrieval(), &batch, &cfg, 0).unwrap();
        let want = (2f64.ln() - 3f64.ln()).powi(2);
        assert!((l.loss - want).abs() < 1e-12);
        assert!((want - 0.16440).abs() < 5e-6);
    }

    #[test]
    fn fixed_point_has_zero_loss_and_gradient() {
        // F depends only on the action, and G(s, a) = s, so inflow = outflow when λR = 0
        let spec = MlpSpec::new(4, vec![3], 1, Activation::Tanh).unwrap();
        let mut p = Mlp::<f64>::init_uniform(spec.clone(), &mut seed_stream(5, 0)).params().to_vec();
        for o in 0..3 {
            p[o * 4] = 0.0;
            p[o * 4 + 1] = 0.0;
        }
        let net = FlowNet::new(Mlp::from_params(spec, p).unwrap()).unwrap();
        let s1 = st(vec![0.3, -0.7]);
        let s2 = st(vec![-1.0, 2.0]);
        let batch = [
            FlowSample { state: &s1, reward: 0.0, terminal: false },
            FlowSample { state: &s2, reward: 0.0, terminal: false },
        ];
        let cfg = FlowLossConfig::default();
        let l = flow_matching_loss(&net, &identity_retrieval(), &batch, &cfg, 3).unwrap();
        assert!(l.loss.abs() <= 1e-12);
        assert!(l.grad.iter().all(|g| g.abs() <= 1e-12));
    }

    fn loss_at(net: &FlowNet<f64>, p: Vec<f64>, ret: &RetrievalNet<f64>, batch: &[FlowSample<'_, f64>], cfg: &FlowLossConfig<f64>, seed: u64) -> f64 {
        let n = FlowNet::new(Mlp::from_params(net.net.spec().clone(), p).unwrap()).unwrap();
        flow_matching_loss(&n, ret, batch, cfg, seed).unwrap().loss
    }

    #[test]
    fn gradient_matches_finite_differences() {
        // 2-dim state + 2-dim action into an 8-unit hidden layer
        let cfg = FlowLossConfig::<f64> {
            k: 3,
            ..Default::default()
        };
        for trial in 0..5u64 {
            let net = flow_net(trial, 2, 8);
            let ret = ret_net(trial + 100, 2);
            let s1 = st(vec![0.4, -0.2]);
            let s2 = st(vec![-0.6, 0.9]);
            let batch = [
                FlowSample { state: &s1, reward: -0.3, terminal: false },
                FlowSample { state: &s2, reward: 0.5, terminal: true },
            ];
            let l = flow_matching_loss(&net, &ret, &batch, &cfg, trial).unwrap();
            let h = 1e-5;
            let p0 = net.net.params().to_vec();
            for i in 0..p0.len() {
                let mut pp = p0.clone();
                pp[i] += h;
                let mut pm = p0.clone();
                pm[i] -= h;
                let fd = (loss_at(&net, pp, &ret, &batch, &cfg, trial) - loss_at(&net, pm, &ret, &batch, &cfg, trial)) / (2.0 * h);
                let g = l.grad[i];
                assert!((g - fd).abs() <= 1e-4 * g.abs().max(fd.abs()).max(1e-6), "param {i}: {g} vs {fd}");
            }
        }
    }

    #[test]
    fn parallel_matches_sequential_bitwise() {
        let net = flow_net(1, 4, 16);
        let ret = ret_net(2, 4);
        let states: Vec<EnvState<f64>> = (0..17).map(|i| st(vec![i as f64 * 0.1, -0.5, 1.0, 2.0])).collect();
        let batch: Vec<FlowSample<'_, f64>> = states
            .iter()
            .enumerate()
            .map(|(i, s)| FlowSample { state: s, reward: -(i as f64) * 0.01, terminal: i % 5 == 0 })
            .collect();
        let cfg = FlowLossConfig::default();
        let a = flow_matching_loss(&net, &ret, &batch, &cfg, 42).unwrap();
        let b = flow_matching_loss_parallel(&net, &ret, &batch, &cfg, 42).unwrap();
        assert_eq!(a.loss.to_bits(), b.loss.to_bits());
        assert!(a.grad.iter().zip(&b.grad).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert_eq!(a.clamped_outflows, b.clamped_outflows);
    }

    #[test]
    fn terminal_outflow_is_reward_only() {
        let cfg = FlowLossConfig::<f64> {
            k: 2,
            lambda: 1.0,
            epsilon: 1.0,
            ..Default::default()
        };
        let s = st(vec![0.0, 0.0]);
        // F ≡ 0: inflow = log 3, terminal outflow = log(1 + 2) → zero loss
        let batch = [FlowSample { state: &s, reward: 2.0, terminal: true }];
        let l = flow_matching_loss(&const_flow(2, 0.0), &identity_retrieval(), &batch, &cfg, 0).unwrap();
        assert!(l.loss.abs() < 1e-24);
    }

    #[test]
    fn clamped_outflow_is_counted() {
        let cfg = FlowLossConfig::<f64> { k: 1, lambda: 1.0, epsilon: 1.0, ..Default::default() };
        let s = st(vec![0.0, 0.0]);
        let batch = [FlowSample { state: &s, reward: -10.0, terminal: true }];
        let l = flow_matching_loss(&const_flow(2, 0.0), &identity_retrieval(), &batch, &cfg, 0).unwrap();
        assert_eq!(l.clamped_outflows, 1);
    }

    #[test]
    fn empty_batch_and_layout_errors() {
        let cfg = FlowLossConfig::default();
        let net = flow_net(0, 2, 4);
        assert!(matches!(
            flow_matching_loss(&net, &identity_retrieval(), &[], &cfg, 0),
            Err(Error::Precondition(_))
        ));
        let s = st(vec![0.0; 4]);
        let batch = [FlowSample { state: &s, reward: 0.0, terminal: false }];
        assert!(flow_matching_loss(&net, &identity_retrieval(), &batch, &cfg, 0).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn softmax_shift_invariant(
                flows in proptest::collection::vec(-20.0f64..20.0, 1..40),
                c in -100.0f64..100.0,
            ) {
                let acts = vec![Action::zero(); flows.len()];
                let a = ActionProbabilityBuffer::from_log_flows(acts.clone(), flows.clone(), 1.0).unwrap();
                let shifted: Vec<f64> = flows.iter().map(|f| f + c).collect();
                let b = ActionProbabilityBuffer::from_log_flows(acts, shifted, 1.0).unwrap();
                for (p, q) in a.probs.iter().zip(&b.probs) {
                    prop_assert!((p - q).abs() <= 1e-12);
                }
                prop_assert!((a.probs.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            }

            #[test]
            fn reward_rescaling_leaves_outflow(r in -0.5f64..2.0, c in 0.1f64..10.0, seed in 0u64..100) {
                let net = flow_net(seed, 2, 6);
                let s = st(vec![0.2, 0.1]);
                let acts: Vec<Action<f64>> = (0..5).map(|_| Action::sample_uniform(&mut seed_stream(seed, 7))).collect();
                let cfg = FlowLossConfig { lambda: 2.0, ..Default::default() };
                let scaled = FlowLossConfig { lambda: 2.0 / c, ..Default::default() };
                let a = outflow_estimate(&net, &s, r, &acts, &cfg).unwrap();
                let b = outflow_estimate(&net, &s, r * c, &acts, &scaled).unwrap();
                prop_assert!((a.value - b.value).abs() <= 1e-12);
            }

            #[test]
            fn lse_path_matches_naive(
                xs in proptest::collection::vec(-30.0f64..30.0, 1..20),
                eps in 0.01f64..5.0,
            ) {
                let stable = log_offset_sum_exp(eps, &xs).value;
                let naive = (eps + xs.iter().map(|x| x.exp()).sum::<f64>()).ln();
                prop_assert!((stable - naive).abs() <= 1e-10);
            }
        }
    }
}
