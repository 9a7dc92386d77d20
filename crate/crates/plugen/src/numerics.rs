//! Minimal dense-network numerics: MLP forward/backward passes, an Adam
//! optimizer over flat parameter vectors, and a central finite-difference
//! oracle used by the gradient-check suites.
//!
//! Everything computes in `f64`; single precision appears only at file
//! boundaries (see the checkpoint module).

use rand::Rng;

use crate::error::{contract, Error, Result};

/// Negative slope of the leaky rectifier applied between MLP layers.
pub const LEAKY_SLOPE: f64 = 0.01;

#[inline]
fn leaky(x: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        LEAKY_SLOPE * x
    }
}

#[inline]
fn leaky_grad(pre: f64) -> f64 {
    if pre >= 0.0 {
        1.0
    } else {
        LEAKY_SLOPE
    }
}

pub(crate) fn all_finite(values: &[f64]) -> bool {
    values.iter().all(|v| v.is_finite())
}

/// A dense affine layer. Weights are row-major with shape `(out_dim, in_dim)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    in_dim: usize,
    out_dim: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl DenseLayer {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Result<Self> {
        if in_dim == 0 || out_dim == 0 {
            return Err(contract("layer dimensions must be positive"));
        }
        Ok(Self {
            in_dim,
            out_dim,
            weights: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
        })
    }

    /// Uniform init in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, bias zero.
    pub fn uniform_init<R: Rng + ?Sized>(
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut layer = Self::zeros(in_dim, out_dim)?;
        let limit = 1.0 / (in_dim as f64).sqrt();
        for w in &mut layer.weights {
            *w = rng.gen_range(-limit..=limit);
        }
        Ok(layer)
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    /// `out = W x + b`.
    fn affine(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.in_dim);
        debug_assert_eq!(out.len(), self.out_dim);
        for (o, slot) in out.iter_mut().enumerate() {
            let row = &self.weights[o * self.in_dim..(o + 1) * self.in_dim];
            let mut sum = self.bias[o];
            for (w, xi) in row.iter().zip(x) {
                sum += w * xi;
            }
            *slot = sum;
        }
    }
}

/// A stack of dense layers with a leaky rectifier between them (none after
/// the last). Adjacent layer dimensions must chain.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<DenseLayer>,
}

/// Activation record produced by [`Mlp::forward`]: the input plus the
/// pre-activation of every layer, which is all the backward pass needs.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    input: Vec<f64>,
    pre_acts: Vec<Vec<f64>>,
}

/// Parameter gradients of one MLP, layer by layer, in the same layout as the
/// parameters themselves.
#[derive(Debug, Clone)]
pub struct MlpGrads {
    pub d_weights: Vec<Vec<f64>>,
    pub d_bias: Vec<Vec<f64>>,
}

impl MlpGrads {
    pub fn zeros_like(mlp: &Mlp) -> Self {
        Self {
            d_weights: mlp
                .layers
                .iter()
                .map(|l| vec![0.0; l.weights.len()])
                .collect(),
            d_bias: mlp.layers.iter().map(|l| vec![0.0; l.bias.len()]).collect(),
        }
    }

    pub fn accumulate(&mut self, other: &MlpGrads) {
        for (a, b) in self.d_weights.iter_mut().zip(&other.d_weights) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        for (a, b) in self.d_bias.iter_mut().zip(&other.d_bias) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }
}

impl Mlp {
    pub fn new(layers: Vec<DenseLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(contract("an MLP needs at least one layer"));
        }
        for pair in layers.windows(2) {
            if pair[0].out_dim != pair[1].in_dim {
                return Err(contract(format!(
                    "layer dimensions do not chain: {} -> {}",
                    pair[0].out_dim, pair[1].in_dim
                )));
            }
        }
        Ok(Self { layers })
    }

    /// Builds `depth` dense layers mapping `in_dim -> width -> ... -> out_dim`
    /// with uniform init. With `zero_output` the last layer starts at zero,
    /// which makes the whole network the constant-zero map.
    pub fn with_shape<R: Rng + ?Sized>(
        in_dim: usize,
        out_dim: usize,
        width: usize,
        depth: usize,
        zero_output: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if depth == 0 {
            return Err(contract("depth must be at least 1"));
        }
        let mut layers = Vec::with_capacity(depth);
        if depth == 1 {
            layers.push(if zero_output {
                DenseLayer::zeros(in_dim, out_dim)?
            } else {
                DenseLayer::uniform_init(in_dim, out_dim, rng)?
            });
        } else {
            layers.push(DenseLayer::uniform_init(in_dim, width, rng)?);
            for _ in 1..depth - 1 {
                layers.push(DenseLayer::uniform_init(width, width, rng)?);
            }
            layers.push(if zero_output {
                DenseLayer::zeros(width, out_dim)?
            } else {
                DenseLayer::uniform_init(width, out_dim, rng)?
            });
        }
        Self::new(layers)
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    /// Forward pass returning the output together with the activation record
    /// needed by [`Mlp::backward`].
    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, ForwardCache)> {
        if x.len() != self.in_dim() {
            return Err(contract(format!(
                "input length {} does not match first layer input size {}",
                x.len(),
                self.in_dim()
            )));
        }
        let mut pre_acts = Vec::with_capacity(self.layers.len());
        let mut current = x.to_vec();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut pre = vec![0.0; layer.out_dim];
            layer.affine(&current, &mut pre);
            current = if i < last {
                pre.iter().map(|&v| leaky(v)).collect()
            } else {
                pre.clone()
            };
            pre_acts.push(pre);
        }
        Ok((
            current,
            ForwardCache {
                input: x.to_vec(),
                pre_acts,
            },
        ))
    }

    /// Forward pass without building a cache.
    pub fn output(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward(x)?.0)
    }

    /// Exact reverse-mode pass: given the cotangent `dy` on the output,
    /// returns the cotangent on the input and the parameter gradients.
    pub fn backward(&self, cache: &ForwardCache, dy: &[f64]) -> Result<(Vec<f64>, MlpGrads)> {
        if cache.pre_acts.len() != self.layers.len()
            || cache.input.len() != self.in_dim()
            || cache
                .pre_acts
                .iter()
                .zip(&self.layers)
                .any(|(pre, layer)| pre.len() != layer.out_dim)
        {
            return Err(contract("stale activation record: shapes do not match"));
        }
        if dy.len() != self.out_dim() {
            return Err(contract(format!(
                "cotangent length {} does not match output size {}",
                dy.len(),
                self.out_dim()
            )));
        }

        let mut grads = MlpGrads::zeros_like(self);
        let last = self.layers.len() - 1;
        let mut d_out = dy.to_vec();
        for i in (0..self.layers.len()).rev() {
            let layer = &self.layers[i];
            let pre = &cache.pre_acts[i];
            // d_pre = d_out ⊙ activation'(pre); the last layer has no activation.
            let d_pre: Vec<f64> = if i == last {
                d_out
            } else {
                d_out
                    .iter()
                    .zip(pre)
                    .map(|(&d, &p)| d * leaky_grad(p))
                    .collect()
            };
            let layer_input: Vec<f64> = if i == 0 {
                cache.input.clone()
            } else {
                cache.pre_acts[i - 1].iter().map(|&v| leaky(v)).collect()
            };

            let dw = &mut grads.d_weights[i];
            for (o, &dp) in d_pre.iter().enumerate() {
                grads.d_bias[i][o] = dp;
                let row = &mut dw[o * layer.in_dim..(o + 1) * layer.in_dim];
                for (slot, &xi) in row.iter_mut().zip(&layer_input) {
                    *slot = dp * xi;
                }
            }

            let mut d_in = vec![0.0; layer.in_dim];
            for (o, &dp) in d_pre.iter().enumerate() {
                let row = &layer.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
                for (slot, &w) in d_in.iter_mut().zip(row) {
                    *slot += w * dp;
                }
            }
            d_out = d_in;
        }
        Ok((d_out, grads))
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    /// Flattens parameters in deterministic order: per layer, row-major
    /// weights then bias.
    pub fn write_params(&self, out: &mut Vec<f64>) {
        for layer in &self.layers {
            out.extend_from_slice(&layer.weights);
            out.extend_from_slice(&layer.bias);
        }
    }

    /// Reads parameters back in the [`Mlp::write_params`] order. Returns the
    /// number of values consumed.
    pub fn read_params(&mut self, params: &[f64]) -> Result<usize> {
        let needed = self.param_count();
        if params.len() < needed {
            return Err(contract(format!(
                "parameter slice too short: {} < {}",
                params.len(),
                needed
            )));
        }
        let mut offset = 0;
        for layer in &mut self.layers {
            let w_len = layer.weights.len();
            layer
                .weights
                .copy_from_slice(&params[offset..offset + w_len]);
            offset += w_len;
            let b_len = layer.bias.len();
            layer.bias.copy_from_slice(&params[offset..offset + b_len]);
            offset += b_len;
        }
        Ok(needed)
    }

    /// Flattens gradients in the same order as [`Mlp::write_params`].
    pub fn write_grads(grads: &MlpGrads, out: &mut Vec<f64>) {
        for (dw, db) in grads.d_weights.iter().zip(&grads.d_bias) {
            out.extend_from_slice(dw);
            out.extend_from_slice(db);
        }
    }
}

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamParams {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamParams {
    pub fn with_lr(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adam accumulator state. Shapes match the flat parameter vector they track;
/// the step counter increments by exactly one per [`adam_step`].
#[derive(Debug, Clone)]
pub struct AdamState {
    pub params: AdamParams,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl AdamState {
    pub fn new(len: usize, params: AdamParams) -> Self {
        Self {
            params,
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One Adam update with bias correction, in place.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(contract(format!(
            "adam shapes do not match: params {}, grads {}, state {}",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    if let Some(idx) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::Training(format!(
            "non-finite gradient at index {idx}"
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let h = state.params;
    let bias1 = 1.0 - h.beta1.powi(t);
    let bias2 = 1.0 - h.beta2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = h.beta1 * state.m[i] + (1.0 - h.beta1) * g;
        state.v[i] = h.beta2 * state.v[i] + (1.0 - h.beta2) * g * g;
        let m_hat = state.m[i] / bias1;
        let v_hat = state.v[i] / bias2;
        params[i] -= h.learning_rate * m_hat / (v_hat.sqrt() + h.epsilon);
    }
    Ok(())
}

/// Central-difference gradient estimate of a scalar function, component-wise.
pub fn finite_diff_grad<F: Fn(&[f64]) -> f64>(f: F, x: &[f64], h: f64) -> Vec<f64> {
    assert!(h > 0.0, "finite-difference step must be positive");
    let mut probe = x.to_vec();
    let mut grad = vec![0.0; x.len()];
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let plus = f(&probe);
        probe[i] = orig - h;
        let minus = f(&probe);
        probe[i] = orig;
        grad[i] = (plus - minus) / (2.0 * h);
    }
    grad
}

/// Relative error with a guarded denominator: `|a-b| / max(|a|, |b|, 1e-8)`.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn identity_layer(dim: usize) -> DenseLayer {
        let mut layer = DenseLayer::zeros(dim, dim).unwrap();
        for i in 0..dim {
            layer.weights[i * dim + i] = 1.0;
        }
        layer
    }

    #[test]
    fn forward_identity_layer() {
        let mlp = Mlp::new(vec![identity_layer(2)]).unwrap();
        let (y, _) = mlp.forward(&[1.0, 2.0]).unwrap();
        assert_eq!(y, vec![1.0, 2.0]);
    }

    #[test]
    fn forward_constant_map() {
        let mut layer = DenseLayer::zeros(2, 1).unwrap();
        layer.bias[0] = 0.5;
        let mlp = Mlp::new(vec![layer]).unwrap();
        for input in [[0.0, 0.0], [3.0, -7.0], [1e6, 2.0]] {
            let (y, _) = mlp.forward(&input).unwrap();
            assert_eq!(y, vec![0.5]);
        }
    }

    #[test]
    fn forward_two_layer_hand_evaluation() {
        // Straight-line evaluation of the same weights, written out by hand.
        let mut l0 = DenseLayer::zeros(2, 2).unwrap();
        l0.weights.copy_from_slice(&[0.5, -1.0, 2.0, 0.25]);
        l0.bias.copy_from_slice(&[0.1, -0.2]);
        let mut l1 = DenseLayer::zeros(2, 1).unwrap();
        l1.weights.copy_from_slice(&[1.5, -0.5]);
        l1.bias.copy_from_slice(&[0.3]);
        let mlp = Mlp::new(vec![l0, l1]).unwrap();

        let x = [0.4, -0.6];
        let pre0 = [
            0.5 * x[0] - 1.0 * x[1] + 0.1,
            2.0 * x[0] + 0.25 * x[1] - 0.2,
        ];
        let act0 = [
            if pre0[0] >= 0.0 {
                pre0[0]
            } else {
                0.01 * pre0[0]
            },
            if pre0[1] >= 0.0 {
                pre0[1]
            } else {
                0.01 * pre0[1]
            },
        ];
        let expected = 1.5 * act0[0] - 0.5 * act0[1] + 0.3;

        let (y, _) = mlp.forward(&x).unwrap();
        assert!((y[0] - expected).abs() < 1e-15, "{} vs {}", y[0], expected);
    }

    #[test]
    fn forward_rejects_wrong_input_length() {
        let mlp = Mlp::new(vec![identity_layer(3)]).unwrap();
        assert!(matches!(mlp.forward(&[1.0]), Err(Error::Contract(_))));
    }

    #[test]
    fn forward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mlp = Mlp::with_shape(3, 2, 8, 3, false, &mut rng).unwrap();
        let x = [0.3, -1.2, 0.7];
        let (a, _) = mlp.forward(&x).unwrap();
        let (b, _) = mlp.forward(&x).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn backward_identity_layer() {
        let mlp = Mlp::new(vec![identity_layer(2)]).unwrap();
        let x = [0.7, -0.3];
        let (_, cache) = mlp.forward(&x).unwrap();
        let (dx, grads) = mlp.backward(&cache, &[1.0, 0.0]).unwrap();
        assert_eq!(dx, vec![1.0, 0.0]);
        // weight grad = outer(dy, x)
        assert_eq!(grads.d_weights[0], vec![0.7, -0.3, 0.0, 0.0]);
        assert_eq!(grads.d_bias[0], vec![1.0, 0.0]);
    }

    #[test]
    fn backward_zero_cotangent() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mlp = Mlp::with_shape(3, 2, 6, 2, false, &mut rng).unwrap();
        let (_, cache) = mlp.forward(&[0.1, 0.2, 0.3]).unwrap();
        let (dx, grads) = mlp.backward(&cache, &[0.0, 0.0]).unwrap();
        assert!(dx.iter().all(|&v| v == 0.0));
        assert!(grads.d_weights.iter().flatten().all(|&v| v == 0.0));
        assert!(grads.d_bias.iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_rejects_stale_cache() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = Mlp::with_shape(3, 2, 6, 2, false, &mut rng).unwrap();
        let b = Mlp::with_shape(4, 2, 6, 2, false, &mut rng).unwrap();
        let (_, cache) = a.forward(&[0.1, 0.2, 0.3]).unwrap();
        assert!(matches!(
            b.backward(&cache, &[1.0, 1.0]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn backward_matches_finite_differences() {
        // Random nets, several seeds, every parameter gradient.
        for seed in [1u64, 2, 3] {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mlp = Mlp::with_shape(4, 3, 8, 3, false, &mut rng).unwrap();
            let x: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let dy: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();

            let (_, cache) = mlp.forward(&x).unwrap();
            let (dx, grads) = mlp.backward(&cache, &dy).unwrap();
            let mut analytic = Vec::new();
            Mlp::write_grads(&grads, &mut analytic);

            let mut params = Vec::new();
            mlp.write_params(&mut params);
            let shape = mlp.clone();
            let loss = |p: &[f64]| {
                let mut net = shape.clone();
                net.read_params(p).unwrap();
                let (y, _) = net.forward(&x).unwrap();
                y.iter().zip(&dy).map(|(a, b)| a * b).sum::<f64>()
            };
            let numeric = finite_diff_grad(loss, &params, 1e-5);
            for (a, n) in analytic.iter().zip(&numeric) {
                assert!(rel_err(*a, *n) <= 1e-4, "param grad {a} vs {n}");
            }

            let input_loss = |xi: &[f64]| {
                let (y, _) = mlp.forward(xi).unwrap();
                y.iter().zip(&dy).map(|(a, b)| a * b).sum::<f64>()
            };
            let numeric_dx = finite_diff_grad(input_loss, &x, 1e-5);
            for (a, n) in dx.iter().zip(&numeric_dx) {
                assert!(rel_err(*a, *n) <= 1e-4, "input grad {a} vs {n}");
            }
        }
    }

    #[test]
    fn adam_zero_gradient_is_fixed_point() {
        let mut params = vec![0.25, -1.5, 3.0];
        let before = params.clone();
        let mut state = AdamState::new(3, AdamParams::with_lr(0.1));
        adam_step(&mut params, &[0.0, 0.0, 0.0], &mut state).unwrap();
        assert_eq!(params, before);
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn adam_single_step_algebra() {
        // Fresh state, scalar grad 1: bias-corrected m̂ = v̂ = 1, so the
        // update is lr / (1 + eps).
        let mut params = vec![2.0];
        let hyper = AdamParams::with_lr(0.1);
        let mut state = AdamState::new(1, hyper);
        adam_step(&mut params, &[1.0], &mut state).unwrap();
        let expected = 2.0 - 0.1 / (1.0_f64.sqrt() + hyper.epsilon);
        assert!((params[0] - expected).abs() < 1e-15);
        assert!((params[0] - 1.9).abs() < 1e-8);
    }

    #[test]
    fn adam_identical_params_stay_identical() {
        let mut params = vec![0.8, 0.8];
        let mut state = AdamState::new(2, AdamParams::with_lr(0.05));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..25 {
            let g = rng.gen_range(-2.0..2.0);
            adam_step(&mut params, &[g, g], &mut state).unwrap();
            assert_eq!(params[0], params[1]);
        }
    }

    #[test]
    fn adam_rejects_non_finite_gradient() {
        let mut params = vec![1.0, 1.0];
        let mut state = AdamState::new(2, AdamParams::with_lr(0.1));
        let err = adam_step(&mut params, &[0.0, f64::NAN], &mut state).unwrap_err();
        match err {
            Error::Training(msg) => assert!(msg.contains("index 1"), "{msg}"),
            other => panic!("unexpected error: {other}"),
        }
    }

    #[test]
    fn finite_diff_quadratic() {
        let g = finite_diff_grad(|x| x[0] * x[0], &[3.0], 1e-5);
        assert!((g[0] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn finite_diff_constant() {
        let g = finite_diff_grad(|_| 4.25, &[1.0, -2.0, 0.5], 1e-5);
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn params_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mlp = Mlp::with_shape(4, 2, 8, 3, false, &mut rng).unwrap();
        let mut flat = Vec::new();
        mlp.write_params(&mut flat);
        assert_eq!(flat.len(), mlp.param_count());
        let mut copy = mlp.clone();
        copy.read_params(&flat).unwrap();
        assert_eq!(copy, mlp);
    }
}
