//! Multilayer perceptrons for actors and the critic, with hand-written
//! backpropagation and the Adam optimizer.
//!
//! Hidden layers use `tanh`, the output layer is linear. Weights are stored
//! row-major (`out × in`) per layer.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum PolicyError {
    #[error("invalid architecture: {0}")]
    Architecture(String),
    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: usize, got: usize },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("no legal action")]
    EmptyMask,
    #[error("action {0} is outside the mask")]
    IllegalAction(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetParams {
    pub sizes: Vec<usize>,
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

/// Glorot-uniform weights, zero biases.
pub fn init_params(sizes: &[usize], seed: u64) -> Result<NetParams, PolicyError> {
    if sizes.len() < 2 || sizes.contains(&0) {
        return Err(PolicyError::Architecture(format!("{sizes:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut weights = Vec::with_capacity(sizes.len() - 1);
    let mut biases = Vec::with_capacity(sizes.len() - 1);
    for w in sizes.windows(2) {
        let (fan_in, fan_out) = (w[0], w[1]);
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        weights.push((0..fan_in * fan_out).map(|_| rng.random_range(-limit..limit)).collect());
        biases.push(vec![0.0; fan_out]);
    }
    Ok(NetParams {
        sizes: sizes.to_vec(),
        weights,
        biases,
    })
}

impl NetParams {
    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().expect("non-empty")
    }

    pub fn n_params(&self) -> usize {
        self.weights.iter().map(Vec::len).sum::<usize>() + self.biases.iter().map(Vec::len).sum::<usize>()
    }

    /// Parameters as one vector: layer by layer, weights then biases.
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w);
            out.extend_from_slice(b);
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<(), PolicyError> {
        if flat.len() != self.n_params() {
            return Err(PolicyError::Shape {
                expected: self.n_params(),
                got: flat.len(),
            });
        }
        let mut i = 0;
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            let (nw, nb) = (w.len(), b.len());
            w.copy_from_slice(&flat[i..i + nw]);
            i += nw;
            b.copy_from_slice(&flat[i..i + nb]);
            i += nb;
        }
        Ok(())
    }

    /// Multiplies every parameter by `k`.
    pub fn scale(&mut self, k: f64) {
        for v in self.weights.iter_mut().chain(self.biases.iter_mut()) {
            v.iter_mut().for_each(|x| *x *= k);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.weights
            .iter()
            .chain(&self.biases)
            .all(|v| v.iter().all(|x| x.is_finite()))
    }

    /// Layer activations, input first, output last.
    fn activations(&self, input: &[f64]) -> Result<Vec<Vec<f64>>, PolicyError> {
        if input.len() != self.input_dim() {
            return Err(PolicyError::Shape {
                expected: self.input_dim(),
                got: input.len(),
            });
        }
        let n_layers = self.weights.len();
        let mut acts = Vec::with_capacity(n_layers + 1);
        acts.push(input.to_vec());
        for l in 0..n_layers {
            let (fan_in, fan_out) = (self.sizes[l], self.sizes[l + 1]);
            let x = &acts[l];
            let w = &self.weights[l];
            let mut y = self.biases[l].clone();
            for (o, yo) in y.iter_mut().enumerate().take(fan_out) {
                let row = &w[o * fan_in..(o + 1) * fan_in];
                *yo += row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
            }
            if l + 1 < n_layers {
                y.iter_mut().for_each(|v| *v = v.tanh());
            }
            acts.push(y);
        }
        Ok(acts)
    }

    /// Gradient of `grad_out · f(input)` with respect to the flat parameters.
    fn backward(&self, acts: &[Vec<f64>], grad_out: &[f64]) -> Vec<f64> {
        let n_layers = self.weights.len();
        let mut layer_grads: Vec<(Vec<f64>, Vec<f64>)> = Vec::with_capacity(n_layers);
        let mut delta = grad_out.to_vec();
        for l in (0..n_layers).rev() {
            let (fan_in, fan_out) = (self.sizes[l], self.sizes[l + 1]);
            let x = &acts[l];
            let mut gw = vec![0.0; fan_in * fan_out];
            for o in 0..fan_out {
                let d = delta[o];
                if d != 0.0 {
                    for i in 0..fan_in {
                        gw[o * fan_in + i] = d * x[i];
                    }
                }
            }
            let gb = delta.clone();
            if l > 0 {
                let w = &self.weights[l];
                let mut prev = vec![0.0; fan_in];
                for o in 0..fan_out {
                    let d = delta[o];
                    if d != 0.0 {
                        for (i, p) in prev.iter_mut().enumerate() {
                            *p += d * w[o * fan_in + i];
                        }
                    }
                }
                // tanh' = 1 - a²
                for (p, a) in prev.iter_mut().zip(x) {
                    *p *= 1.0 - a * a;
                }
                delta = prev;
            }
            layer_grads.push((gw, gb));
        }
        let mut flat = Vec::with_capacity(self.n_params());
        for (gw, gb) in layer_grads.into_iter().rev() {
            flat.extend(gw);
            flat.extend(gb);
        }
        flat
    }
}

/// Raw action logits.
pub fn forward_actor(params: &NetParams, input: &[f64]) -> Result<Vec<f64>, PolicyError> {
    Ok(params.activations(input)?.pop().expect("output layer"))
}

/// Scalar state value.
pub fn forward_critic(params: &NetParams, input: &[f64]) -> Result<f64, PolicyError> {
    if params.output_dim() != 1 {
        return Err(PolicyError::Shape {
            expected: 1,
            got: params.output_dim(),
        });
    }
    Ok(forward_actor(params, input)?[0])
}

/// Softmax over legal logits; illegal entries get probability 0.
pub fn masked_softmax(logits: &[f64], mask: &[bool]) -> Result<Vec<f64>, PolicyError> {
    if logits.len() != mask.len() {
        return Err(PolicyError::Shape {
            expected: logits.len(),
            got: mask.len(),
        });
    }
    let max = logits
        .iter()
        .zip(mask)
        .filter(|(_, &ok)| ok)
        .map(|(l, _)| *l)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(PolicyError::EmptyMask);
    }
    let mut p: Vec<f64> = logits
        .iter()
        .zip(mask)
        .map(|(l, &ok)| if ok { (l - max).exp() } else { 0.0 })
        .collect();
    let z: f64 = p.iter().sum();
    p.iter_mut().for_each(|x| *x /= z);
    Ok(p)
}

/// ∇θ log π(action | input) under the masked softmax, plus the
/// log-probability itself.
pub fn grad_log_prob(
    params: &NetParams,
    input: &[f64],
    mask: &[bool],
    action: usize,
) -> Result<(Vec<f64>, f64), PolicyError> {
    let acts = params.activations(input)?;
    let logits = acts.last().expect("output");
    let probs = masked_softmax(logits, mask)?;
    if action >= probs.len() || !mask[action] {
        return Err(PolicyError::IllegalAction(action));
    }
    let mut g: Vec<f64> = probs.iter().map(|p| -p).collect();
    g[action] += 1.0;
    Ok((params.backward(&acts, &g), probs[action].ln()))
}

/// ∇θ V(input) and V(input).
pub fn grad_value(params: &NetParams, input: &[f64]) -> Result<(Vec<f64>, f64), PolicyError> {
    let acts = params.activations(input)?;
    let v = acts.last().expect("output")[0];
    if params.output_dim() != 1 {
        return Err(PolicyError::Shape {
            expected: 1,
            got: params.output_dim(),
        });
    }
    Ok((params.backward(&acts, &[1.0]), v))
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n_params: usize) -> Self {
        Self {
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        }
    }
}

/// One bias-corrected Adam descent step on `grad`. Callers maximising an
/// objective pass the negated gradient.
pub fn adam_step(params: &mut NetParams, state: &mut AdamState, grad: &[f64], lr: f64) -> Result<(), PolicyError> {
    let n = params.n_params();
    if grad.len() != n || state.m.len() != n {
        return Err(PolicyError::Shape {
            expected: n,
            got: if grad.len() != n { grad.len() } else { state.m.len() },
        });
    }
    if !grad.iter().all(|g| g.is_finite()) {
        return Err(PolicyError::NonFinite("gradient"));
    }
    state.t += 1;
    let b1 = 1.0 - ADAM_BETA1.powi(state.t as i32);
    let b2 = 1.0 - ADAM_BETA2.powi(state.t as i32);
    let mut theta = params.flat();
    for i in 0..n {
        state.m[i] = ADAM_BETA1 * state.m[i] + (1.0 - ADAM_BETA1) * grad[i];
        state.v[i] = ADAM_BETA2 * state.v[i] + (1.0 - ADAM_BETA2) * grad[i] * grad[i];
        let m_hat = state.m[i] / b1;
        let v_hat = state.v[i] / b2;
        theta[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
    }
    if !theta.iter().all(|x| x.is_finite()) {
        return Err(PolicyError::NonFinite("parameters"));
    }
    params.set_flat(&theta)
}

/// Linearly annealed learning rate, clamped at `floor` after `total_epochs`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub initial: f64,
    pub floor: f64,
    pub total_epochs: usize,
}

impl LrSchedule {
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if self.total_epochs == 0 {
            return self.floor;
        }
        let frac = (epoch as f64 / self.total_epochs as f64).min(1.0);
        self.initial + (self.floor - self.initial) * frac
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::{collection, prop_assert, proptest};

    fn input(n: usize, k: f64) -> Vec<f64> {
        (0..n).map(|i| ((i as f64 + 1.0) * k).sin()).collect()
    }

    fn numeric_grad(params: &NetParams, f: impl Fn(&NetParams) -> f64) -> Vec<f64> {
        let h = 1e-6;
        let base = params.flat();
        (0..base.len())
            .map(|i| {
                let mut p = params.clone();
                let mut up = base.clone();
                up[i] += h;
                p.set_flat(&up).unwrap();
                let fu = f(&p);
                let mut dn = base.clone();
                dn[i] -= h;
                p.set_flat(&dn).unwrap();
                let fd = f(&p);
                (fu - fd) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let a = init_params(&[5, 8, 3], 42).unwrap();
        assert_eq!(a, init_params(&[5, 8, 3], 42).unwrap());
        assert_ne!(a, init_params(&[5, 8, 3], 43).unwrap());
        assert_eq!(a.n_params(), 5 * 8 + 8 + 8 * 3 + 3);
        let lim = (6.0f64 / 13.0).sqrt();
        assert!(a.weights[0].iter().all(|w| w.abs() <= lim));
        assert!(a.biases.iter().flatten().all(|&b| b == 0.0));
    }

    #[test]
    fn bad_architecture_and_shapes() {
        assert!(init_params(&[3], 0).is_err());
        assert!(init_params(&[3, 0, 2], 0).is_err());
        let p = init_params(&[3, 4, 2], 0).unwrap();
        assert_eq!(
            forward_actor(&p, &[1.0, 2.0]),
            Err(PolicyError::Shape { expected: 3, got: 2 })
        );
        assert!(forward_critic(&p, &[0.0; 3]).is_err());
    }

    #[test]
    fn hand_computed_forward() {
        // 2 -> 1 hidden (tanh) -> 1 linear
        let p = NetParams {
            sizes: vec![2, 1, 1],
            weights: vec![vec![0.5, -1.0], vec![2.0]],
            biases: vec![vec![0.1], vec![0.3]],
        };
        let v = forward_critic(&p, &[2.0, 0.5]).unwrap();
        let expected = 2.0 * (0.5f64 * 2.0 - 0.5 + 0.1).tanh() + 0.3;
        assert!((v - expected).abs() < 1e-15);
    }

    #[test]
    fn log_prob_gradient_matches_finite_differences() {
        let p = init_params(&[6, 7, 5, 4], 9).unwrap();
        let x = input(6, 0.7);
        let mask = [true, false, true, true];
        let (g, lp) = grad_log_prob(&p, &x, &mask, 2).unwrap();
        let f = |q: &NetParams| {
            let probs = masked_softmax(&forward_actor(q, &x).unwrap(), &mask).unwrap();
            probs[2].ln()
        };
        assert!((lp - f(&p)).abs() < 1e-12);
        let num = numeric_grad(&p, f);
        for (a, b) in g.iter().zip(&num) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn value_gradient_matches_finite_differences() {
        let p = init_params(&[4, 6, 1], 3).unwrap();
        let x = input(4, 1.3);
        let (g, v) = grad_value(&p, &x).unwrap();
        assert_eq!(v, forward_critic(&p, &x).unwrap());
        let num = numeric_grad(&p, |q| forward_critic(q, &x).unwrap());
        for (a, b) in g.iter().zip(&num) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn illegal_action_gradient_is_an_error() {
        let p = init_params(&[2, 3], 0).unwrap();
        assert_eq!(
            grad_log_prob(&p, &[0.0, 1.0], &[true, false, true], 1).unwrap_err(),
            PolicyError::IllegalAction(1)
        );
        assert_eq!(
            grad_log_prob(&p, &[0.0, 1.0], &[false; 3], 0).unwrap_err(),
            PolicyError::EmptyMask
        );
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        // after one step m̂ = g and v̂ = g², so every coordinate with g ≠ 0
        // moves by lr · g / (|g| + ε) against the gradient
        let mut p = init_params(&[2, 2], 1).unwrap();
        let before = p.flat();
        let grad = vec![0.5, -2.0, 0.0, 1e-3, 3.0, -0.25];
        let mut st = AdamState::new(p.n_params());
        adam_step(&mut p, &mut st, &grad, 1e-4).unwrap();
        for ((a, b), g) in p.flat().iter().zip(&before).zip(&grad) {
            let expected = -1e-4 * g / (g.abs() + ADAM_EPS);
            assert!((a - b - expected).abs() < 1e-15);
        }
        assert_eq!(st.t, 1);
    }

    #[test]
    fn adam_rejects_nan_gradient() {
        let mut p = init_params(&[2, 2], 1).unwrap();
        let before = p.clone();
        let mut st = AdamState::new(p.n_params());
        let mut g = vec![0.0; p.n_params()];
        g[3] = f64::NAN;
        assert_eq!(adam_step(&mut p, &mut st, &g, 1e-3), Err(PolicyError::NonFinite("gradient")));
        assert_eq!(p, before);
        assert_eq!(st.t, 0);
    }

    #[test]
    fn adam_minimises_quadratic() {
        // f(θ) = Σ (θ_i - 1)²
        let mut p = init_params(&[2, 2], 5).unwrap();
        let mut st = AdamState::new(p.n_params());
        for _ in 0..3000 {
            let g: Vec<f64> = p.flat().iter().map(|t| 2.0 * (t - 1.0)).collect();
            adam_step(&mut p, &mut st, &g, 1e-2).unwrap();
        }
        assert!(p.flat().iter().all(|t| (t - 1.0).abs() < 1e-3));
    }

    #[test]
    fn lr_schedule_anneals_then_clamps() {
        let s = LrSchedule {
            initial: 1e-4,
            floor: 1e-5,
            total_epochs: 100,
        };
        assert_eq!(s.lr_at(0), 1e-4);
        assert!((s.lr_at(50) - 5.5e-5).abs() < 1e-18);
        assert!((s.lr_at(100) - 1e-5).abs() < 1e-18);
        assert_eq!(s.lr_at(500), s.lr_at(100));
    }

    #[test]
    fn flat_round_trip() {
        let p = init_params(&[3, 4, 2], 8).unwrap();
        let mut q = init_params(&[3, 4, 2], 9).unwrap();
        q.set_flat(&p.flat()).unwrap();
        assert_eq!(p, q);
        assert!(q.set_flat(&[0.0]).is_err());
    }

    fn rel_close(a: f64, b: f64) -> bool {
        (a - b).abs() <= 1e-7_f64.max(1e-4 * a.abs().max(b.abs()))
    }

    fn central_diff(params: &NetParams, f: impl Fn(&NetParams) -> f64) -> Vec<f64> {
        let h = 1e-5;
        let base = params.flat();
        let mut p = params.clone();
        (0..base.len())
            .map(|i| {
                let mut x = base.clone();
                x[i] = base[i] + h;
                p.set_flat(&x).unwrap();
                let up = f(&p);
                x[i] = base[i] - h;
                p.set_flat(&x).unwrap();
                (up - f(&p)) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn ten_random_nets_match_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for k in 0..10u64 {
            let sizes = [
                rng.random_range(2..7),
                rng.random_range(2..9),
                rng.random_range(2..9),
                rng.random_range(2..6),
            ];
            let p = init_params(&sizes, k).unwrap();
            let x: Vec<f64> = (0..sizes[0]).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut mask: Vec<bool> = (0..sizes[3]).map(|_| rng.random_bool(0.7)).collect();
            let a = rng.random_range(0..sizes[3]);
            mask[a] = true;
            let (g, _) = grad_log_prob(&p, &x, &mask, a).unwrap();
            let num = central_diff(&p, |q| masked_softmax(&forward_actor(q, &x).unwrap(), &mask).unwrap()[a].ln());
            assert!(g.iter().zip(&num).all(|(a, b)| rel_close(*a, *b)), "actor net {k}");

            let mut c = init_params(&[sizes[0], sizes[1], sizes[2], 1], k + 100).unwrap();
            c.biases[2][0] = 0.3;
            let (g, _) = grad_value(&c, &x).unwrap();
            let num = central_diff(&c, |q| forward_critic(q, &x).unwrap());
            assert!(g.iter().zip(&num).all(|(a, b)| rel_close(*a, *b)), "critic net {k}");
        }
    }

    #[test]
    fn score_function_has_zero_expectation() {
        let p = init_params(&[5, 6, 6, 4], 77).unwrap();
        let x = input(5, 0.37);
        let mask = [true, true, false, true];
        let probs = masked_softmax(&forward_actor(&p, &x).unwrap(), &mask).unwrap();
        let mut acc = vec![0.0; p.n_params()];
        for a in (0..4).filter(|&a| mask[a]) {
            let (g, _) = grad_log_prob(&p, &x, &mask, a).unwrap();
            acc.iter_mut().zip(&g).for_each(|(s, gi)| *s += probs[a] * gi);
        }
        assert!(acc.iter().all(|v| v.abs() < 1e-6));
    }

    #[test]
    fn single_legal_action_has_zero_gradient() {
        let p = init_params(&[3, 4, 3], 1).unwrap();
        let (g, lp) = grad_log_prob(&p, &[0.2, -0.4, 0.9], &[false, true, false], 1).unwrap();
        assert_eq!(lp, 0.0);
        assert!(g.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn zero_params_give_zero_outputs() {
        let mut p = init_params(&[3, 4, 4, 3], 1).unwrap();
        p.scale(0.0);
        assert_eq!(forward_actor(&p, &[1.0, 2.0, 3.0]).unwrap(), vec![0.0; 3]);
        let mut c = init_params(&[7, 4, 4, 1], 1).unwrap();
        c.scale(0.0);
        assert_eq!(forward_critic(&c, &[0.5; 7]).unwrap(), 0.0);
        // only the output bias carries gradient at zero input and zero params
        let (g, _) = grad_value(&c, &[0.0; 7]).unwrap();
        let n = g.len();
        assert_eq!(g[n - 1], 1.0);
        assert!(g[..n - 1].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn hand_computed_2_2_2_actor() {
        let p = NetParams {
            sizes: vec![2, 2, 2],
            weights: vec![vec![0.3, -0.7, 1.1, 0.4], vec![0.5, -0.2, -1.3, 0.8]],
            biases: vec![vec![0.05, -0.1], vec![0.2, 0.0]],
        };
        let h0 = (0.3f64 + 0.05).tanh();
        let h1 = (1.1f64 - 0.1).tanh();
        let out = forward_actor(&p, &[1.0, 0.0]).unwrap();
        assert!((out[0] - (0.5 * h0 - 0.2 * h1 + 0.2)).abs() < 1e-12);
        assert!((out[1] - (-1.3 * h0 + 0.8 * h1)).abs() < 1e-12);
        let shifted: Vec<f64> = out.iter().map(|l| l + 5.0).collect();
        let m = [true, true];
        let (a, b) = (masked_softmax(&out, &m).unwrap(), masked_softmax(&shifted, &m).unwrap());
        assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-15));
    }

    #[test]
    fn zero_gradient_adam_step() {
        let mut p = init_params(&[3, 2], 4).unwrap();
        let before = p.clone();
        let mut st = AdamState::new(p.n_params());
        let zeros = vec![0.0; p.n_params()];
        adam_step(&mut p, &mut st, &zeros, 1e-4).unwrap();
        assert_eq!(p, before);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn params_stay_finite_over_many_steps() {
        let mut p = init_params(&[3, 4, 2], 4).unwrap();
        let mut st = AdamState::new(p.n_params());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..10_000 {
            let g: Vec<f64> = (0..p.n_params()).map(|_| rng.random_range(-1.0..1.0)).collect();
            adam_step(&mut p, &mut st, &g, 1e-3).unwrap();
        }
        assert!(p.is_finite());
    }

    proptest! {
        #[test]
        fn lr_is_monotone_and_bounded(e1 in 0usize..400, e2 in 0usize..400, total in 1usize..300) {
            let s = LrSchedule { initial: 1e-4, floor: 1e-5, total_epochs: total };
            let (lo, hi) = (e1.min(e2), e1.max(e2));
            prop_assert!(s.lr_at(hi) <= s.lr_at(lo));
            prop_assert!(s.lr_at(hi) >= 1e-5 - 1e-18 && s.lr_at(lo) <= 1e-4);
        }

        #[test]
        fn masked_probabilities_sum_to_one(logits in collection::vec(-50.0f64..50.0, 1..12), seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut mask: Vec<bool> = logits.iter().map(|_| rng.random_bool(0.6)).collect();
            mask[0] = true;
            let p = masked_softmax(&logits, &mask).unwrap();
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for (pi, ok) in p.iter().zip(&mask) {
                prop_assert!(*ok || *pi == 0.0);
            }
        }
    }
}
