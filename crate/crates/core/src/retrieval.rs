//! Retrieval network: predicts the parent state `s_{t-1}` from `(s_t, a_{t-1})`
//! and is trained by mean squared error against stored parents.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::envs::{self, Action, EnvConfig, EnvState, FaultSpec, ACTION_DIM};
use crate::error::{invalid, Error, Result};
use crate::nn::{adam_step, AdamState, Mlp, Trace};
use crate::replay::{Phase, Transition};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalNet<T> {
    pub net: Mlp<T>,
}

impl<T: Scalar> RetrievalNet<T> {
    /// Wraps a `(state_dim + 2) → state_dim` network.
    pub fn new(net: Mlp<T>) -> Result<Self> {
        let out = net.output_dim();
        if net.input_dim() != out + ACTION_DIM {
            return Err(invalid!(
                "retrieval net must map state_dim + {ACTION_DIM} -> state_dim, got {} -> {out}",
                net.input_dim()
            ));
        }
        Ok(Self { net })
    }

    pub fn state_dim(&self) -> usize {
        self.net.output_dim()
    }

    /// Raw regression output; no projection back onto valid states.
    pub fn predict_parent(&self, s: &EnvState<T>, a_prev: &Action<T>) -> Result<EnvState<T>> {
        if s.dim() != self.state_dim() {
            return Err(invalid!(
                "state has {} entries, retrieval net expects {}",
                s.dim(),
                self.state_dim()
            ));
        }
        let mut input = Vec::with_capacity(s.dim() + ACTION_DIM);
        input.extend_from_slice(&s.values);
        input.extend_from_slice(a_prev.as_slice());
        Ok(EnvState {
            kind: s.kind,
            values: self.net.forward(&input)?,
        })
    }

    /// Prediction written into `trace`; `input` must hold `[s.., a..]`.
    pub(crate) fn predict_traced<'t>(&self, input: &[T], trace: &'t mut Trace<T>) -> &'t [T] {
        self.net.forward_traced(input, trace)
    }
}

/// Mean over batch and state dimensions of the squared parent-prediction
/// error, with its gradient.
pub fn retrieval_loss<T: Scalar>(net: &RetrievalNet<T>, batch: &[&Transition<T>]) -> Result<(T, Vec<T>)> {
    if batch.is_empty() {
        return Err(Error::Precondition("retrieval loss needs a non-empty batch".into()));
    }
    let dim = net.state_dim();
    let denom = T::of((batch.len() * dim) as f64);
    let mut trace = Trace::new(net.net.spec());
    let mut grad = vec![T::zero(); net.net.params().len()];
    let mut input = Vec::with_capacity(dim + ACTION_DIM);
    let mut upstream = vec![T::zero(); dim];
    let mut loss = T::zero();
    for tr in batch {
        if tr.s.dim() != dim || tr.s_prev.dim() != dim {
            return Err(invalid!("transition layout does not match retrieval net"));
        }
        input.clear();
        input.extend_from_slice(&tr.s.values);
        input.extend_from_slice(tr.a_prev.as_slice());
        let pred = net.predict_traced(&input, &mut trace);
        for ((u, &p), &target) in upstream.iter_mut().zip(pred).zip(&tr.s_prev.values) {
            let e = p - target;
            loss += e * e;
            *u = (e + e) / denom;
        }
        net.net.backward_accumulate(&mut trace, &upstream, T::one(), &mut grad);
    }
    Ok((loss / denom, grad))
}

/// One Adam step on the retrieval loss of `batch`; returns the pre-step loss.
pub fn retrieval_update<T: Scalar>(
    net: &mut RetrievalNet<T>,
    adam: &mut AdamState<T>,
    batch: &[&Transition<T>],
    lr: T,
) -> Result<T> {
    let (loss, grad) = retrieval_loss(net, batch)?;
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("non-finite retrieval loss {loss}")));
    }
    adam_step(&mut net.net, adam, &grad, lr)?;
    Ok(loss)
}

/// Per-epoch mean training loss of [`pretrain_retrieval`].
#[derive(Debug, Clone, Default)]
pub struct TrainingCurve<T> {
    pub epoch_loss: Vec<T>,
}

/// Fits `net` to a fixed dataset with shuffled minibatch epochs.
pub fn pretrain_retrieval<T: Scalar, R: Rng + ?Sized>(
    net: &mut RetrievalNet<T>,
    adam: &mut AdamState<T>,
    dataset: &[Transition<T>],
    epochs: usize,
    lr: T,
    batch_size: usize,
    rng: &mut R,
) -> Result<TrainingCurve<T>> {
    if dataset.is_empty() {
        return Err(Error::Precondition("retrieval pre-training needs a non-empty dataset".into()));
    }
    if batch_size == 0 {
        return Err(invalid!("batch size must be >= 1"));
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut curve = TrainingCurve::default();
    for _ in 0..epochs {
        order.shuffle(rng);
        let mut total = T::zero();
        let mut batches = 0usize;
        for chunk in order.chunks(batch_size) {
            let batch: Vec<&Transition<T>> = chunk.iter().map(|&i| &dataset[i]).collect();
            total += retrieval_update(net, adam, &batch, lr)?;
            batches += 1;
        }
        curve.epoch_loss.push(total / T::of(batches as f64));
    }
    Ok(curve)
}

/// Mean squared parent-prediction error over `data` (no gradient).
pub fn evaluate_mse<T: Scalar>(net: &RetrievalNet<T>, data: &[Transition<T>]) -> Result<T> {
    let refs: Vec<&Transition<T>> = data.iter().collect();
    Ok(retrieval_loss(net, &refs)?.0)
}

/// Transitions gathered by a uniform-random policy, `n` env steps in total.
pub fn gather_random_dataset<T: Scalar, R: Rng + ?Sized>(
    config: &EnvConfig<T>,
    fault: &FaultSpec<T>,
    n: usize,
    rng: &mut R,
) -> Result<Vec<Transition<T>>> {
    let mut env = envs::Env::new(config.clone(), *fault, rng)?;
    let mut out = Vec::with_capacity(n);
    let mut episode = 0u64;
    while out.len() < n {
        let s_prev = env.state().clone();
        let a = Action::sample_uniform(rng);
        let res = env.step(a)?;
        out.push(Transition {
            s_prev,
            a_prev: a.clamped(),
            r: res.reward,
            s: res.next_state,
            terminal: res.terminal,
            episode_id: episode,
            phase: Phase::Warmup,
        });
        if res.terminal {
            env.reset(rng);
            episode += 1;
        }
    }
    Ok(out)
}
