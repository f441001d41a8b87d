//! One-hidden-layer feed-forward network with analytic gradients and RMSProp.
//!
//! `y = W2 · tanh(W1 · x + b1) + b2`
//!
//! The same network type backs both the action-value function and the human
//! feedback model. Loss is plain squared error `(y[k] - target)^2`, so every
//! gradient carries the factor 2.
//!
//! Weight layout: `w1[j * hidden + i]` connects input `j` to hidden unit `i`
//! (input-major, so sparse one-hot inputs touch one contiguous row), and
//! `w2[k * hidden + i]` connects hidden unit `i` to output `k`.

use rand::distributions::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::rng::rng_from_seed;
use crate::{Error, Result};

pub const DEFAULT_HIDDEN: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "NetworkRepr", into = "NetworkRepr")]
pub struct Network {
    input_dim: usize,
    hidden_dim: usize,
    output_dim: usize,
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    b2: Vec<f64>,
}

/// Flat checkpoint form: `{"dims": [in, hidden, out], "W1": [...], "b1": [...], "W2": [...], "b2": [...]}`.
#[derive(Serialize, Deserialize)]
struct NetworkRepr {
    dims: [usize; 3],
    #[serde(rename = "W1")]
    w1: Vec<f64>,
    b1: Vec<f64>,
    #[serde(rename = "W2")]
    w2: Vec<f64>,
    b2: Vec<f64>,
}

impl TryFrom<NetworkRepr> for Network {
    type Error = Error;

    fn try_from(r: NetworkRepr) -> Result<Self> {
        let [i, h, o] = r.dims;
        Network::from_parts(i, h, o, r.w1, r.b1, r.w2, r.b2)
    }
}

impl From<Network> for NetworkRepr {
    fn from(n: Network) -> Self {
        NetworkRepr {
            dims: [n.input_dim, n.hidden_dim, n.output_dim],
            w1: n.w1,
            b1: n.b1,
            w2: n.w2,
            b2: n.b2,
        }
    }
}

/// Gradient (or any other per-parameter quantity) shaped like a [`Network`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl Gradients {
    pub fn zeros_like(net: &Network) -> Self {
        Gradients {
            w1: vec![0.0; net.w1.len()],
            b1: vec![0.0; net.b1.len()],
            w2: vec![0.0; net.w2.len()],
            b2: vec![0.0; net.b2.len()],
        }
    }

    pub fn fill_zero(&mut self) {
        for t in self.tensors_mut() {
            t.fill(0.0);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }

    pub fn tensors(&self) -> [&[f64]; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    pub fn tensors_mut(&mut self) -> [&mut [f64]; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    pub fn is_zero(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|&v| v == 0.0))
    }

    fn same_shape(&self, net: &Network) -> bool {
        self.w1.len() == net.w1.len()
            && self.b1.len() == net.b1.len()
            && self.w2.len() == net.w2.len()
            && self.b2.len() == net.b2.len()
    }
}

/// Reusable buffers for a forward/backward pass.
#[derive(Debug, Clone, Default)]
pub struct Scratch {
    hidden: Vec<f64>,
    output: Vec<f64>,
}

impl Scratch {
    pub fn output(&self) -> &[f64] {
        &self.output
    }
}

impl Network {
    /// Weights uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, biases zero.
    pub fn new(input_dim: usize, hidden_dim: usize, output_dim: usize, seed: u64) -> Result<Self> {
        check_dims(input_dim, hidden_dim, output_dim)?;
        let mut rng = rng_from_seed(seed);
        let l1 = 1.0 / (input_dim as f64).sqrt();
        let l2 = 1.0 / (hidden_dim as f64).sqrt();
        let d1 = Uniform::new_inclusive(-l1, l1);
        let d2 = Uniform::new_inclusive(-l2, l2);
        let w1 = (0..input_dim * hidden_dim).map(|_| d1.sample(&mut rng)).collect();
        let w2 = (0..hidden_dim * output_dim).map(|_| d2.sample(&mut rng)).collect();
        Ok(Network {
            input_dim,
            hidden_dim,
            output_dim,
            w1,
            b1: vec![0.0; hidden_dim],
            w2,
            b2: vec![0.0; output_dim],
        })
    }

    pub fn zeros(input_dim: usize, hidden_dim: usize, output_dim: usize) -> Result<Self> {
        check_dims(input_dim, hidden_dim, output_dim)?;
        Ok(Network {
            input_dim,
            hidden_dim,
            output_dim,
            w1: vec![0.0; input_dim * hidden_dim],
            b1: vec![0.0; hidden_dim],
            w2: vec![0.0; hidden_dim * output_dim],
            b2: vec![0.0; output_dim],
        })
    }

    pub fn from_parts(
        input_dim: usize,
        hidden_dim: usize,
        output_dim: usize,
        w1: Vec<f64>,
        b1: Vec<f64>,
        w2: Vec<f64>,
        b2: Vec<f64>,
    ) -> Result<Self> {
        check_dims(input_dim, hidden_dim, output_dim)?;
        let expect = [
            ("W1", w1.len(), input_dim * hidden_dim),
            ("b1", b1.len(), hidden_dim),
            ("W2", w2.len(), hidden_dim * output_dim),
            ("b2", b2.len(), output_dim),
        ];
        for (name, got, want) in expect {
            if got != want {
                return Err(Error::Config(format!("{name} has {got} entries, expected {want}")));
            }
        }
        Ok(Network {
            input_dim,
            hidden_dim,
            output_dim,
            w1,
            b1,
            w2,
            b2,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn param_count(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    pub fn tensors(&self) -> [&[f64]; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    pub fn tensors_mut(&mut self) -> [&mut [f64]; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim {
            return Err(Error::Contract(format!(
                "network input has length {}, expected {}",
                x.len(),
                self.input_dim
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut scratch = Scratch::default();
        self.forward_into(x, &mut scratch)?;
        Ok(scratch.output)
    }

    /// Forward pass writing activations into `scratch`; the outputs are then
    /// available through [`Scratch::output`].
    pub fn forward_into(&self, x: &[f64], scratch: &mut Scratch) -> Result<()> {
        self.check_input(x)?;
        let h = self.hidden_dim;
        scratch.hidden.clear();
        scratch.hidden.extend_from_slice(&self.b1);
        for (j, &xj) in x.iter().enumerate() {
            if xj == 0.0 {
                continue;
            }
            let row = &self.w1[j * h..(j + 1) * h];
            for (z, w) in scratch.hidden.iter_mut().zip(row) {
                *z += w * xj;
            }
        }
        scratch.hidden.iter_mut().for_each(|z| *z = z.tanh());
        scratch.output.clear();
        for k in 0..self.output_dim {
            let row = &self.w2[k * h..(k + 1) * h];
            let dot: f64 = row.iter().zip(&scratch.hidden).map(|(w, a)| w * a).sum();
            scratch.output.push(self.b2[k] + dot);
        }
        Ok(())
    }

    /// Gradient of `(forward(x)[target_index] - target_value)^2` w.r.t. every parameter.
    pub fn grad_squared_error(&self, x: &[f64], target_index: usize, target_value: f64) -> Result<Gradients> {
        let mut grads = Gradients::zeros_like(self);
        let mut scratch = Scratch::default();
        self.accumulate_squared_error(x, target_index, target_value, 1.0, &mut grads, &mut scratch)?;
        Ok(grads)
    }

    /// Adds `weight * d/dθ (y[k] - target)^2` into `grads` and returns the
    /// prediction `y[k]`.
    pub fn accumulate_squared_error(
        &self,
        x: &[f64],
        target_index: usize,
        target_value: f64,
        weight: f64,
        grads: &mut Gradients,
        scratch: &mut Scratch,
    ) -> Result<f64> {
        if target_index >= self.output_dim {
            return Err(Error::Contract(format!(
                "target index {target_index} out of range for {} outputs",
                self.output_dim
            )));
        }
        if !grads.same_shape(self) {
            return Err(Error::Contract("gradient buffer shape does not match network".into()));
        }
        self.forward_into(x, scratch)?;
        let h = self.hidden_dim;
        let prediction = scratch.output[target_index];
        let g = 2.0 * (prediction - target_value) * weight;
        if g == 0.0 {
            return Ok(prediction);
        }
        grads.b2[target_index] += g;
        let w2_row = &self.w2[target_index * h..(target_index + 1) * h];
        let gw2_row = &mut grads.w2[target_index * h..(target_index + 1) * h];
        // Reuse the hidden buffer for dL/dz once it has been consumed.
        for ((a, gw), (w, gb)) in scratch
            .hidden
            .iter_mut()
            .zip(gw2_row.iter_mut())
            .zip(w2_row.iter().zip(grads.b1.iter_mut()))
        {
            *gw += g * *a;
            let dz = g * w * (1.0 - *a * *a);
            *gb += dz;
            *a = dz;
        }
        for (j, &xj) in x.iter().enumerate() {
            if xj == 0.0 {
                continue;
            }
            let row = &mut grads.w1[j * h..(j + 1) * h];
            for (gw, dz) in row.iter_mut().zip(&scratch.hidden) {
                *gw += xj * dz;
            }
        }
        Ok(prediction)
    }
}

fn check_dims(input_dim: usize, hidden_dim: usize, output_dim: usize) -> Result<()> {
    if input_dim == 0 || hidden_dim == 0 || output_dim == 0 {
        return Err(Error::Config(format!(
            "network dims must be positive, got ({input_dim}, {hidden_dim}, {output_dim})"
        )));
    }
    Ok(())
}

pub const DEFAULT_LEARNING_RATE: f64 = 1e-3;
pub const DEFAULT_RMS_DECAY: f64 = 0.9;
pub const DEFAULT_RMS_EPSILON: f64 = 1e-8;

/// RMSProp: `acc <- rho*acc + (1-rho)*g^2; theta <- theta - lr*g/(sqrt(acc)+eps)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RmsProp {
    learning_rate: f64,
    decay: f64,
    epsilon: f64,
    acc: Gradients,
}

impl RmsProp {
    pub fn new(net: &Network, learning_rate: f64) -> Result<Self> {
        Self::with_params(net, learning_rate, DEFAULT_RMS_DECAY, DEFAULT_RMS_EPSILON)
    }

    pub fn with_params(net: &Network, learning_rate: f64, decay: f64, epsilon: f64) -> Result<Self> {
        if !(learning_rate > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {learning_rate}")));
        }
        if !(decay > 0.0 && decay < 1.0) {
            return Err(Error::Config(format!("rmsprop decay must be in (0,1), got {decay}")));
        }
        if !(epsilon > 0.0) {
            return Err(Error::Config(format!("rmsprop epsilon must be positive, got {epsilon}")));
        }
        Ok(RmsProp {
            learning_rate,
            decay,
            epsilon,
            acc: Gradients::zeros_like(net),
        })
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    pub fn accumulators(&self) -> &Gradients {
        &self.acc
    }

    pub fn step(&mut self, net: &mut Network, grad: &Gradients) -> Result<()> {
        if !grad.same_shape(net) || !self.acc.same_shape(net) {
            return Err(Error::Contract("rmsprop: gradient shape does not match network".into()));
        }
        let (rho, lr, eps) = (self.decay, self.learning_rate, self.epsilon);
        for ((theta, acc), g) in net
            .tensors_mut()
            .into_iter()
            .zip(self.acc.tensors_mut())
            .zip(grad.tensors())
        {
            for ((p, a), &gi) in theta.iter_mut().zip(acc.iter_mut()).zip(g) {
                *a = rho * *a + (1.0 - rho) * gi * gi;
                if gi != 0.0 {
                    *p -= lr * gi / (a.sqrt() + eps);
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn scalar_net(w1: f64, b1: f64, w2: f64, b2: f64) -> Network {
        Network::from_parts(1, 1, 1, vec![w1], vec![b1], vec![w2], vec![b2]).unwrap()
    }

    /// Central finite differences of the squared error, computed through `forward` only.
    fn numeric_grad(net: &Network, x: &[f64], k: usize, target: f64, h: f64) -> Gradients {
        let loss = |n: &Network| {
            let y = n.forward(x).unwrap()[k];
            (y - target) * (y - target)
        };
        let mut out = Gradients::zeros_like(net);
        let mut probe = net.clone();
        for t in 0..4 {
            for i in 0..net.tensors()[t].len() {
                let orig = net.tensors()[t][i];
                probe.tensors_mut()[t][i] = orig + h;
                let up = loss(&probe);
                probe.tensors_mut()[t][i] = orig - h;
                let down = loss(&probe);
                probe.tensors_mut()[t][i] = orig;
                out.tensors_mut()[t][i] = (up - down) / (2.0 * h);
            }
        }
        out
    }

    fn max_rel_error(a: &Gradients, b: &Gradients) -> f64 {
        let mut worst: f64 = 0.0;
        for (ta, tb) in a.tensors().iter().zip(b.tensors()) {
            for (x, y) in ta.iter().zip(tb) {
                let denom = x.abs().max(y.abs()).max(1e-6);
                worst = worst.max((x - y).abs() / denom);
            }
        }
        worst
    }

    #[test]
    fn parameter_count_matches_formula() {
        let net = Network::new(64, 100, 4, 1).unwrap();
        assert_eq!(net.param_count(), 64 * 100 + 100 + 100 * 4 + 4);
        assert_eq!(net.param_count(), 6904);
    }

    #[test]
    fn init_is_deterministic_with_zero_biases_and_bounded_weights() {
        let a = Network::new(64, 100, 4, 42).unwrap();
        let b = Network::new(64, 100, 4, 42).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, Network::new(64, 100, 4, 43).unwrap());
        assert!(a.b1.iter().chain(&a.b2).all(|&v| v == 0.0));
        assert!(a.w1.iter().all(|w| w.abs() <= 1.0 / 8.0));
        assert!(a.w2.iter().all(|w| w.abs() <= 0.1));
    }

    #[test]
    fn zero_dims_rejected() {
        assert!(matches!(Network::new(0, 100, 4, 0), Err(Error::Config(_))));
        assert!(matches!(Network::new(3, 0, 4, 0), Err(Error::Config(_))));
        assert!(matches!(Network::new(3, 5, 0, 0), Err(Error::Config(_))));
    }

    #[test]
    fn forward_examples() {
        let zero = Network::zeros(5, 7, 3).unwrap();
        assert_eq!(zero.forward(&[0.3, -1.0, 2.0, 0.0, 9.0]).unwrap(), vec![0.0; 3]);
        assert_eq!(scalar_net(1.0, 0.0, 1.0, 0.0).forward(&[0.0]).unwrap(), vec![0.0]);
        let y = scalar_net(1.0, 0.0, 2.0, 0.5).forward(&[1.0]).unwrap()[0];
        let oracle = 2.0 * 1f64.tanh() + 0.5;
        assert_eq!(y, oracle);
        assert!((y - 2.0232).abs() < 1e-4);
    }

    #[test]
    fn forward_rejects_wrong_length() {
        let net = Network::new(4, 3, 2, 0).unwrap();
        assert!(matches!(net.forward(&[1.0; 3]), Err(Error::Contract(_))));
    }

    #[test]
    fn gradient_vanishes_at_target() {
        let net = Network::new(3, 6, 2, 9).unwrap();
        let x = [0.2, -0.5, 1.0];
        let y = net.forward(&x).unwrap();
        let g = net.grad_squared_error(&x, 1, y[1]).unwrap();
        assert!(g.is_zero());
    }

    #[test]
    fn gradient_is_linear_in_residual() {
        let net = Network::new(3, 6, 2, 11).unwrap();
        let x = [0.7, 0.0, -0.3];
        let y = net.forward(&x).unwrap()[0];
        let g1 = net.grad_squared_error(&x, 0, y - 0.4).unwrap();
        let g2 = net.grad_squared_error(&x, 0, y - 0.8).unwrap();
        for (a, b) in g1.tensors().iter().zip(g2.tensors()) {
            for (u, v) in a.iter().zip(b) {
                assert!((2.0 * u - v).abs() <= 1e-12 * v.abs().max(1.0), "{u} vs {v}");
            }
        }
    }

    #[test]
    fn gradient_touches_only_target_output_row() {
        let net = Network::new(2, 4, 3, 5).unwrap();
        let g = net.grad_squared_error(&[1.0, 0.5], 2, 10.0).unwrap();
        assert!(g.b2[0] == 0.0 && g.b2[1] == 0.0 && g.b2[2] != 0.0);
        assert!(g.w2[..8].iter().all(|&v| v == 0.0));
        assert!(g.w2[8..].iter().all(|&v| v != 0.0));
    }

    #[test]
    fn target_index_out_of_range() {
        let net = Network::new(2, 4, 3, 5).unwrap();
        assert!(net.grad_squared_error(&[1.0, 0.5], 3, 0.0).is_err());
    }

    #[test]
    fn finite_difference_agreement_on_random_nets() {
        let mut rng = rng_from_seed(2024);
        for trial in 0..20 {
            let (i, h, o) = (rng.gen_range(1..6), rng.gen_range(1..9), rng.gen_range(1..5));
            let net = Network::new(i, h, o, trial).unwrap();
            let x: Vec<f64> = (0..i).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let k = rng.gen_range(0..o);
            let target = rng.gen_range(-2.0..2.0);
            let analytic = net.grad_squared_error(&x, k, target).unwrap();
            let numeric = numeric_grad(&net, &x, k, target, 1e-5);
            assert!(max_rel_error(&analytic, &numeric) < 1e-4);
        }
    }

    #[test]
    fn rmsprop_zero_gradient_only_decays_accumulators() {
        let mut net = Network::new(2, 3, 2, 1).unwrap();
        let before = net.clone();
        let mut opt = RmsProp::new(&net, 1e-3).unwrap();
        opt.acc.w1.fill(1.0);
        opt.step(&mut net, &Gradients::zeros_like(&before)).unwrap();
        assert_eq!(net, before);
        assert!(opt.acc.w1.iter().all(|&a| (a - 0.9).abs() < 1e-15));
    }

    #[test]
    fn rmsprop_scalar_step() {
        let mut net = scalar_net(0.0, 0.0, 0.0, 0.0);
        let mut opt = RmsProp::new(&net, 1e-3).unwrap();
        let mut g = Gradients::zeros_like(&net);
        g.b2[0] = 1.0;
        opt.step(&mut net, &g).unwrap();
        let acc = 0.1f64;
        assert!((opt.acc.b2[0] - acc).abs() < 1e-15);
        let expected = -1e-3 / (acc.sqrt() + 1e-8);
        assert!((net.b2[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn rmsprop_repeated_gradient_shrinks_step() {
        let mut net = scalar_net(0.0, 0.0, 0.0, 0.0);
        let mut opt = RmsProp::new(&net, 1e-3).unwrap();
        let mut g = Gradients::zeros_like(&net);
        g.b2[0] = 1.0;
        opt.step(&mut net, &g).unwrap();
        let first = net.b2[0];
        opt.step(&mut net, &g).unwrap();
        let second = net.b2[0] - first;
        assert!(second.abs() < first.abs());
    }

    #[test]
    fn checkpoint_json_shape() {
        let net = Network::new(2, 3, 1, 4).unwrap();
        let v: serde_json::Value = serde_json::to_value(&net).unwrap();
        assert_eq!(v["dims"], serde_json::json!([2, 3, 1]));
        assert_eq!(v["W1"].as_array().unwrap().len(), 6);
        let back: Network = serde_json::from_value(v.clone()).unwrap();
        assert_eq!(back, net);
        let mut bad = v;
        bad["b2"] = serde_json::json!([0.0, 0.0]);
        assert!(serde_json::from_value::<Network>(bad).is_err());
    }

    proptest! {
        #[test]
        fn forward_is_pure_and_sized(seed in 0u64..1000, xs in proptest::collection::vec(-3.0f64..3.0, 5)) {
            let net = Network::new(5, 8, 3, seed).unwrap();
            let a = net.forward(&xs).unwrap();
            prop_assert_eq!(a.len(), 3);
            prop_assert_eq!(a, net.forward(&xs).unwrap());
        }

        #[test]
        fn accumulators_stay_nonnegative(gs in proptest::collection::vec(-10.0f64..10.0, 1..20)) {
            let mut net = scalar_net(0.1, 0.0, 0.2, 0.0);
            let mut opt = RmsProp::new(&net, 1e-3).unwrap();
            for g in gs {
                let mut grad = Gradients::zeros_like(&net);
                grad.w1[0] = g;
                grad.b2[0] = -g;
                opt.step(&mut net, &grad).unwrap();
                for t in opt.accumulators().tensors() {
                    prop_assert!(t.iter().all(|&a| a >= 0.0));
                }
            }
        }
    }
}
