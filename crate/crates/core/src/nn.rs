//! Dense feed-forward networks: forward pass, parameter gradients and Adam.
//!
//! Parameters live in one flat vector. Each layer contributes its weights in
//! row-major `[fan_out][fan_in]` order followed by `fan_out` biases.

use rand::Rng;

use crate::error::{invalid, Error, Result};
use crate::rng::uniform;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Relu => x.max(T::zero()),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the activation's output.
    #[inline]
    fn derivative_from_output<T: Scalar>(self, y: T) -> T {
        match self {
            Activation::Relu => {
                if y > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Tanh => T::one() - y * y,
        }
    }

    pub fn code(self) -> u8 {
        match self {
            Activation::Relu => 0,
            Activation::Tanh => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Activation::Relu),
            1 => Some(Activation::Tanh),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputActivation {
    Identity,
}

/// Shape of a multi-layer perceptron.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub output_dim: usize,
    pub activation: Activation,
    pub output_activation: OutputActivation,
}

impl MlpSpec {
    pub fn new(
        input_dim: usize,
        hidden_dims: Vec<usize>,
        output_dim: usize,
        activation: Activation,
    ) -> Result<Self> {
        if input_dim == 0 || output_dim == 0 {
            return Err(invalid!("network dims must be >= 1"));
        }
        if hidden_dims.is_empty() {
            return Err(invalid!("at least one hidden layer is required"));
        }
        if hidden_dims.contains(&0) {
            return Err(invalid!("hidden dims must be >= 1, got {hidden_dims:?}"));
        }
        Ok(Self {
            input_dim,
            hidden_dims,
            output_dim,
            activation,
            output_activation: OutputActivation::Identity,
        })
    }

    /// `(fan_in, fan_out)` per layer, input to output.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 1);
        let mut fan_in = self.input_dim;
        for &h in self.hidden_dims.iter().chain(std::iter::once(&self.output_dim)) {
            dims.push((fan_in, h));
            fan_in = h;
        }
        dims
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims()
            .iter()
            .map(|&(fan_in, fan_out)| (fan_in + 1) * fan_out)
            .sum()
    }

    fn widest(&self) -> usize {
        self.hidden_dims
            .iter()
            .copied()
            .chain([self.input_dim, self.output_dim])
            .max()
            .unwrap_or(1)
    }
}

/// Network parameters bound to their shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<T> {
    spec: MlpSpec,
    params: Vec<T>,
}

impl<T: Scalar> Mlp<T> {
    pub fn zeros(spec: MlpSpec) -> Self {
        let params = vec![T::zero(); spec.param_count()];
        Self { spec, params }
    }

    /// Weights uniform in `±1/√fan_in`, biases zero.
    pub fn init_uniform<R: Rng + ?Sized>(spec: MlpSpec, rng: &mut R) -> Self {
        let mut params = Vec::with_capacity(spec.param_count());
        for (fan_in, fan_out) in spec.layer_dims() {
            let bound = T::one() / T::of(fan_in as f64).sqrt();
            params.extend((0..fan_in * fan_out).map(|_| uniform(rng, -bound, bound)));
            params.extend(std::iter::repeat_n(T::zero(), fan_out));
        }
        Self { spec, params }
    }

    pub fn from_params(spec: MlpSpec, params: Vec<T>) -> Result<Self> {
        if params.len() != spec.param_count() {
            return Err(invalid!(
                "parameter vector has length {}, shape needs {}",
                params.len(),
                spec.param_count()
            ));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Numeric("non-finite network parameter".into()));
        }
        Ok(Self { spec, params })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn input_dim(&self) -> usize {
        self.spec.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.spec.output_dim
    }

    pub fn forward(&self, input: &[T]) -> Result<Vec<T>> {
        self.check_input(input)?;
        let mut trace = Trace::new(&self.spec);
        Ok(self.forward_traced(input, &mut trace).to_vec())
    }

    /// Gradient of `upstream · output` with respect to the flat parameters.
    pub fn backward(&self, input: &[T], upstream: &[T]) -> Result<Vec<T>> {
        self.check_input(input)?;
        if upstream.len() != self.spec.output_dim {
            return Err(invalid!(
                "upstream gradient has length {}, network output is {}",
                upstream.len(),
                self.spec.output_dim
            ));
        }
        let mut trace = Trace::new(&self.spec);
        self.forward_traced(input, &mut trace);
        let mut grad = vec![T::zero(); self.params.len()];
        self.backward_accumulate(&mut trace, upstream, T::one(), &mut grad);
        Ok(grad)
    }

    fn check_input(&self, input: &[T]) -> Result<()> {
        if input.len() != self.spec.input_dim {
            return Err(invalid!(
                "input has length {}, network expects {}",
                input.len(),
                self.spec.input_dim
            ));
        }
        Ok(())
    }

    /// Forward pass that keeps every layer output in `trace` for a later
    /// [`Mlp::backward_accumulate`]. Input length is checked only in debug builds.
    pub fn forward_traced<'t>(&self, input: &[T], trace: &'t mut Trace<T>) -> &'t [T] {
        debug_assert_eq!(input.len(), self.spec.input_dim);
        let dims = self.spec.layer_dims();
        let last = dims.len() - 1;
        trace.acts[0].copy_from_slice(input);
        let mut offset = 0;
        for (l, &(fan_in, fan_out)) in dims.iter().enumerate() {
            let (w, rest) = self.params[offset..].split_at(fan_in * fan_out);
            let b = &rest[..fan_out];
            let (before, after) = trace.acts.split_at_mut(l + 1);
            let x = &before[l];
            let y = &mut after[0];
            for (o, y_o) in y.iter_mut().enumerate() {
                let row = &w[o * fan_in..(o + 1) * fan_in];
                let z = row.iter().zip(x.iter()).fold(b[o], |acc, (&wi, &xi)| acc + wi * xi);
                *y_o = if l == last {
                    z
                } else {
                    self.spec.activation.apply(z)
                };
            }
            offset += (fan_in + 1) * fan_out;
        }
        &trace.acts[last + 1]
    }

    /// Adds `scale · ∂(upstream · output)/∂params` into `grad`, using the
    /// activations left in `trace` by the preceding forward pass.
    pub fn backward_accumulate(&self, trace: &mut Trace<T>, upstream: &[T], scale: T, grad: &mut [T]) {
        debug_assert_eq!(grad.len(), self.params.len());
        let dims = self.spec.layer_dims();
        let last = dims.len() - 1;

        let Trace { acts, delta, delta_prev } = trace;
        delta.clear();
        delta.extend(upstream.iter().map(|&u| u * scale));

        let mut end = self.params.len();
        for l in (0..dims.len()).rev() {
            let (fan_in, fan_out) = dims[l];
            let start = end - (fan_in + 1) * fan_out;
            let (w, b) = self.params[start..end].split_at(fan_in * fan_out);
            debug_assert_eq!(b.len(), fan_out);
            let (gw, gb) = grad[start..end].split_at_mut(fan_in * fan_out);

            if l != last {
                for (d, &y) in delta.iter_mut().zip(acts[l + 1].iter()) {
                    *d *= self.spec.activation.derivative_from_output(y);
                }
            }
            let x = &acts[l];
            for (o, &d) in delta.iter().enumerate() {
                gb[o] += d;
                if d != T::zero() {
                    for (g, &xi) in gw[o * fan_in..(o + 1) * fan_in].iter_mut().zip(x.iter()) {
                        *g += d * xi;
                    }
                }
            }
            if l > 0 {
                delta_prev.clear();
                delta_prev.resize(fan_in, T::zero());
                for (o, &d) in delta.iter().enumerate() {
                    if d == T::zero() {
                        continue;
                    }
                    for (dp, &wi) in delta_prev.iter_mut().zip(w[o * fan_in..(o + 1) * fan_in].iter()) {
                        *dp += d * wi;
                    }
                }
                std::mem::swap(delta, delta_prev);
            }
            end = start;
        }
    }

    #[cfg(test)]
    pub(crate) fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }
}

/// Per-layer activations and backprop work buffers, reusable across calls.
#[derive(Debug, Clone)]
pub struct Trace<T> {
    acts: Vec<Vec<T>>,
    delta: Vec<T>,
    delta_prev: Vec<T>,
}

impl<T: Scalar> Trace<T> {
    pub fn new(spec: &MlpSpec) -> Self {
        let mut acts = vec![vec![T::zero(); spec.input_dim]];
        acts.extend(spec.layer_dims().iter().map(|&(_, out)| vec![T::zero(); out]));
        let w = spec.widest();
        Self {
            acts,
            delta: Vec::with_capacity(w),
            delta_prev: Vec::with_capacity(w),
        }
    }

    pub fn output(&self) -> &[T] {
        self.acts.last().expect("trace has an output layer")
    }
}

/// Adam moments and hyperparameters for one parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub t: u64,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
}

impl<T: Scalar> AdamState<T> {
    /// Zero moments with β1 = 0.9, β2 = 0.999, eps = 1e-8.
    pub fn new(len: usize) -> Self {
        Self::with_hyper(len, T::of(0.9), T::of(0.999), T::of(1e-8))
    }

    pub fn with_hyper(len: usize, beta1: T, beta2: T, eps: T) -> Self {
        Self {
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
            t: 0,
            beta1,
            beta2,
            eps,
        }
    }
}

/// One bias-corrected Adam update. Rejects non-finite gradients without
/// touching `net` or `state`.
pub fn adam_step<T: Scalar>(net: &mut Mlp<T>, state: &mut AdamState<T>, grad: &[T], lr: T) -> Result<()> {
    let n = net.params.len();
    if grad.len() != n || state.m.len() != n || state.v.len() != n {
        return Err(invalid!(
            "adam: grad {} / m {} / v {} vs params {}",
            grad.len(),
            state.m.len(),
            state.v.len(),
            n
        ));
    }
    if !(lr > T::zero()) {
        return Err(invalid!("learning rate must be > 0, got {lr}"));
    }
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::Numeric(format!("non-finite gradient entry {} at index {i}", grad[i])));
    }

    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let bc1 = T::one() - b1.powi(t);
    let bc2 = T::one() - b2.powi(t);
    for (((p, m), v), &g) in net
        .params
        .iter_mut()
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
        .zip(grad)
    {
        *m = b1 * *m + (T::one() - b1) * g;
        *v = b2 * *v + (T::one() - b2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= lr * m_hat / (v_hat.sqrt() + state.eps);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seed_stream;
    use proptest::prelude::*;

    /// Straightforward reference forward pass built from explicit weight matrices.
    fn reference_forward(spec: &MlpSpec, params: &[f64], input: &[f64]) -> Vec<f64> {
        let mut x = input.to_vec();
        let mut off = 0;
        let dims = spec.layer_dims();
        for (l, &(fi, fo)) in dims.iter().enumerate() {
            let w: Vec<Vec<f64>> = (0..fo).map(|o| params[off + o * fi..off + (o + 1) * fi].to_vec()).collect();
            let b = &params[off + fi * fo..off + fi * fo + fo];
            let mut y = vec![0.0; fo];
            for o in 0..fo {
                let mut z = b[o];
                for i in 0..fi {
                    z += w[o][i] * x[i];
                }
                y[o] = if l + 1 == dims.len() {
                    z
                } else {
                    match spec.activation {
                        Activation::Relu => z.max(0.0),
                        Activation::Tanh => z.tanh(),
                    }
                };
            }
            x = y;
            off += (fi + 1) * fo;
        }
        x
    }

    fn fd_grad(net: &Mlp<f64>, input: &[f64], upstream: &[f64], h: f64) -> Vec<f64> {
        (0..net.params().len())
            .map(|i| {
                let mut plus = net.clone();
                plus.params_mut()[i] += h;
                let mut minus = net.clone();
                minus.params_mut()[i] -= h;
                let fp = plus.forward(input).unwrap();
                let fm = minus.forward(input).unwrap();
                fp.iter()
                    .zip(&fm)
                    .zip(upstream)
                    .map(|((a, b), u)| u * (a - b) / (2.0 * h))
                    .sum()
            })
            .collect()
    }

    fn rel_close(a: f64, b: f64, rel: f64) -> bool {
        (a - b).abs() <= rel * a.abs().max(b.abs()).max(1e-6)
    }

    #[test]
    fn param_count_matches_formula() {
        let spec = MlpSpec::new(6, vec![256, 256], 1, Activation::Relu).unwrap();
        assert_eq!(spec.param_count(), 7 * 256 + 257 * 256 + 257);
    }

    #[test]
    fn rejects_bad_specs() {
        assert!(MlpSpec::new(0, vec![4], 1, Activation::Relu).is_err());
        assert!(MlpSpec::new(2, vec![], 1, Activation::Relu).is_err());
        assert!(MlpSpec::new(2, vec![4, 0], 1, Activation::Relu).is_err());
    }

    #[test]
    fn zero_params_give_zero_output() {
        let net = Mlp::<f64>::zeros(MlpSpec::new(3, vec![5, 4], 2, Activation::Tanh).unwrap());
        assert_eq!(net.forward(&[1.0, -2.0, 3.5]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn relu_passthrough() {
        let spec = MlpSpec::new(1, vec![1], 1, Activation::Relu).unwrap();
        let net = Mlp::from_params(spec, vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        assert_eq!(net.forward(&[2.0]).unwrap(), vec![2.0]);
    }

    #[test]
    fn forward_matches_reference_2_4_1() {
        let spec = MlpSpec::new(2, vec![4], 1, Activation::Relu).unwrap();
        let net = Mlp::<f64>::init_uniform(spec.clone(), &mut seed_stream(7, 0));
        let mut p = net.params().to_vec();
        // non-zero biases so they are exercised too
        p[8..12].copy_from_slice(&[0.1, -0.2, 0.3, 0.05]);
        p[16] = -0.4;
        let net = Mlp::from_params(spec.clone(), p.clone()).unwrap();
        let got = net.forward(&[0.3, -0.7]).unwrap();
        let want = reference_forward(&spec, &p, &[0.3, -0.7]);
        assert_eq!(got.len(), 1);
        assert!((got[0] - want[0]).abs() < 1e-15);
    }

    #[test]
    fn dimension_mismatch_is_invalid_argument() {
        let net = Mlp::<f64>::zeros(MlpSpec::new(2, vec![3], 1, Activation::Relu).unwrap());
        assert!(matches!(net.forward(&[1.0]), Err(Error::InvalidArgument(_))));
        assert!(matches!(net.backward(&[1.0, 2.0], &[1.0, 1.0]), Err(Error::InvalidArgument(_))));
        assert!(Mlp::<f64>::from_params(net.spec().clone(), vec![0.0; 3]).is_err());
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let spec = MlpSpec::new(3, vec![4, 4], 2, Activation::Tanh).unwrap();
        let net = Mlp::<f64>::init_uniform(spec, &mut seed_stream(1, 0));
        let g = net.backward(&[0.1, 0.2, 0.3], &[0.0, 0.0]).unwrap();
        assert!(g.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn scalar_net_chain_rule() {
        // y = w2 * relu(w1 * x + b1) + b2, with w1 x + b1 > 0
        let (w1, b1, w2, b2, x) = (0.5f64, 0.25, -1.5, 0.1, 2.0);
        let spec = MlpSpec::new(1, vec![1], 1, Activation::Relu).unwrap();
        let net = Mlp::from_params(spec, vec![w1, b1, w2, b2]).unwrap();
        let h = w1 * x + b1;
        let g = net.backward(&[x], &[1.0]).unwrap();
        let want = [w2 * x, w2, h, 1.0];
        for (a, b) in g.iter().zip(want) {
            assert!((a - b).abs() < 1e-15, "{g:?} vs {want:?}");
        }
    }

    #[test]
    fn backward_matches_finite_differences_on_grid() {
        let shapes = [
            (2, vec![4], 1, Activation::Relu),
            (3, vec![5, 4], 2, Activation::Tanh),
            (6, vec![8, 8], 1, Activation::Relu),
            (4, vec![8], 2, Activation::Tanh),
        ];
        let mut rng = seed_stream(42, 3);
        let mut points = 0;
        for (i, (inp, hid, out, act)) in shapes.into_iter().enumerate() {
            let spec = MlpSpec::new(inp, hid, out, act).unwrap();
            for j in 0..6 {
                let net = Mlp::<f64>::init_uniform(spec.clone(), &mut seed_stream(i as u64, j));
                let x: Vec<f64> = (0..inp).map(|_| uniform(&mut rng, -1.0, 1.0)).collect();
                let up: Vec<f64> = (0..out).map(|_| uniform(&mut rng, -1.0, 1.0)).collect();
                let g = net.backward(&x, &up).unwrap();
                let fd = fd_grad(&net, &x, &up, 1e-5);
                for (a, b) in g.iter().zip(&fd) {
                    assert!(rel_close(*a, *b, 1e-4), "analytic {a} vs fd {b}");
                }
                points += 1;
            }
        }
        assert!(points >= 20);
    }

    #[test]
    fn adam_first_step_closed_form() {
        let spec = MlpSpec::new(1, vec![1], 1, Activation::Relu).unwrap();
        let mut net = Mlp::<f64>::zeros(spec);
        let mut st = AdamState::new(4);
        adam_step(&mut net, &mut st, &[1.0, 0.0, 0.0, 0.0], 0.001).unwrap();
        // m̂ = 1, v̂ = 1 → Δ = lr / (1 + eps)
        assert!((net.params()[0] + 0.001).abs() <= 1e-6);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn adam_zero_grad_only_advances_t() {
        let spec = MlpSpec::new(2, vec![3], 1, Activation::Relu).unwrap();
        let mut net = Mlp::<f64>::init_uniform(spec, &mut seed_stream(3, 0));
        let before = net.clone();
        let n = net.params().len();
        let mut st = AdamState::new(n);
        adam_step(&mut net, &mut st, &vec![0.0; n], 0.01).unwrap();
        assert_eq!(net, before);
        assert!(st.m.iter().chain(&st.v).all(|&x| x == 0.0));
        assert_eq!(st.t, 1);
    }

    #[test]
    fn adam_constant_grad_steps_do_not_grow() {
        let spec = MlpSpec::new(1, vec![1], 1, Activation::Relu).unwrap();
        let mut net = Mlp::<f64>::zeros(spec);
        let mut st = AdamState::new(4);
        let g = [0.3, -2.0, 1e-3, 5.0];
        let p0 = net.params().to_vec();
        adam_step(&mut net, &mut st, &g, 0.01).unwrap();
        let p1 = net.params().to_vec();
        adam_step(&mut net, &mut st, &g, 0.01).unwrap();
        let p2 = net.params().to_vec();
        for i in 0..4 {
            assert!((p2[i] - p1[i]).abs() <= (p1[i] - p0[i]).abs() + 1e-9);
        }
    }

    #[test]
    fn adam_rejects_non_finite() {
        let spec = MlpSpec::new(1, vec![1], 1, Activation::Relu).unwrap();
        let mut net = Mlp::<f64>::zeros(spec);
        let mut st = AdamState::new(4);
        let err = adam_step(&mut net, &mut st, &[f64::NAN, 0.0, 0.0, 0.0], 0.01);
        assert!(matches!(err, Err(Error::Numeric(_))));
        assert_eq!(st.t, 0);
    }

    #[test]
    fn f32_network_runs() {
        let spec = MlpSpec::new(2, vec![4], 1, Activation::Relu).unwrap();
        let net = Mlp::<f32>::init_uniform(spec, &mut seed_stream(5, 0));
        let g = net.backward(&[0.2, -0.1], &[1.0]).unwrap();
        assert_eq!(g.len(), net.params().len());
    }

    proptest! {
        #[test]
        fn forward_finite_and_adam_deterministic(
            seed in 0u64..1000,
            x in proptest::collection::vec(-10.0f64..10.0, 3),
            lr in 1e-4f64..1e-1,
        ) {
            let spec = MlpSpec::new(3, vec![6, 5], 2, Activation::Relu).unwrap();
            let net = Mlp::<f64>::init_uniform(spec, &mut seed_stream(seed, 0));
            let y = net.forward(&x).unwrap();
            prop_assert!(y.iter().all(|v| v.is_finite()));

            let g = net.backward(&x, &[1.0, -0.5]).unwrap();
            let (mut a, mut b) = (net.clone(), net.clone());
            let (mut sa, mut sb) = (AdamState::new(g.len()), AdamState::new(g.len()));
            adam_step(&mut a, &mut sa, &g, lr).unwrap();
            adam_step(&mut b, &mut sb, &g, lr).unwrap();
            prop_assert_eq!(a, b);
            prop_assert_eq!(sa, sb);
        }

        #[test]
        fn backward_is_linear_in_upstream(seed in 0u64..500, c in -3.0f64..3.0) {
            let spec = MlpSpec::new(2, vec![4], 2, Activation::Tanh).unwrap();
            let net = Mlp::<f64>::init_uniform(spec, &mut seed_stream(seed, 1));
            let x = [0.4, -0.3];
            let g1 = net.backward(&x, &[1.0, 0.5]).unwrap();
            let gc = net.backward(&x, &[c, 0.5 * c]).unwrap();
            for (a, b) in g1.iter().zip(&gc) {
                prop_assert!((a * c - b).abs() < 1e-12);
            }
        }
    }
}
