//! Frozen generative backbones at desk scale: a synthetic entangled
//! generator with an exact ground-truth oracle, a small deterministic
//! autoencoder, and gradient-descent latent recovery for decoder-only use.
//!
//! The synthetic generative process draws ground-truth factors
//! `t ~ N(0, I)`, entangles them with a seeded orthogonal rotation
//! `z = M t`, and observes `x = A z + 0.1 tanh(A z)` through a taller
//! matrix `A` with orthonormal columns. The elementwise nonlinearity is a
//! contraction away from the identity, so the observation map has an exact
//! inverse on its range and the oracle can recover `t` from any generated
//! `x` to machine precision.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{contract, Error, Result};
use crate::numerics::{adam_step, all_finite, AdamParams, AdamState, Mlp};
use crate::priors::LabelKind;
use crate::training::LatentDataset;

/// Weight of the tanh bend in the observation map.
const OBSERVE_BEND: f64 = 0.1;

/// Fixed-point iteration budget and tolerance for inverting the observation
/// nonlinearity.
const INVERT_MAX_ITERS: usize = 50;
const INVERT_TOL: f64 = 1e-12;

/// Anything that can decode latent codes into observations; encoders are
/// optional and error for decoder-only models.
pub trait Backbone {
    fn latent_dim(&self) -> usize;
    fn observed_dim(&self) -> usize;
    fn decode(&self, z: &[f64]) -> Result<Vec<f64>>;
    fn encode(&self, x: &[f64]) -> Result<Vec<f64>>;
    /// Vector-Jacobian product of the decoder: the latent-space cotangent of
    /// `d_x`. This is what gradient-descent latent recovery needs.
    fn decode_vjp(&self, z: &[f64], d_x: &[f64]) -> Result<Vec<f64>>;
}

/// Decoder-only wrapper around a bare MLP; encoding always fails, so latent
/// recovery is the only way back.
#[derive(Debug, Clone)]
pub struct MlpDecoder(pub Mlp);

impl Backbone for MlpDecoder {
    fn latent_dim(&self) -> usize {
        self.0.in_dim()
    }

    fn observed_dim(&self) -> usize {
        self.0.out_dim()
    }

    fn decode(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.0.output(z)
    }

    fn encode(&self, _x: &[f64]) -> Result<Vec<f64>> {
        Err(contract("decoder-only backbone has no encoder"))
    }

    fn decode_vjp(&self, z: &[f64], d_x: &[f64]) -> Result<Vec<f64>> {
        let (_, cache) = self.0.forward(z)?;
        let (d_z, _) = self.0.backward(&cache, d_x)?;
        Ok(d_z)
    }
}

/// Row-major dense matrix, just enough linear algebra for the backbones.
#[derive(Debug, Clone, PartialEq)]
struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    fn matvec(&self, v: &[f64]) -> Vec<f64> {
        debug_assert_eq!(v.len(), self.cols);
        (0..self.rows)
            .map(|r| {
                let row = &self.data[r * self.cols..(r + 1) * self.cols];
                row.iter().zip(v).map(|(a, b)| a * b).sum()
            })
            .collect()
    }

    fn tmatvec(&self, v: &[f64]) -> Vec<f64> {
        debug_assert_eq!(v.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for (r, &vr) in v.iter().enumerate() {
            let row = &self.data[r * self.cols..(r + 1) * self.cols];
            for (slot, &a) in out.iter_mut().zip(row) {
                *slot += a * vr;
            }
        }
        out
    }
}

/// Orthonormal columns from a seeded Gaussian matrix via modified
/// Gram-Schmidt with a second orthogonalization pass.
fn seeded_orthonormal(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Mat {
    assert!(rows >= cols);
    let mut columns: Vec<Vec<f64>> = (0..cols)
        .map(|_| (0..rows).map(|_| rng.sample(StandardNormal)).collect())
        .collect();
    for j in 0..cols {
        for _pass in 0..2 {
            for i in 0..j {
                let dot: f64 = columns[i].iter().zip(&columns[j]).map(|(a, b)| a * b).sum();
                let prev = columns[i].clone();
                for (vj, pi) in columns[j].iter_mut().zip(&prev) {
                    *vj -= dot * pi;
                }
            }
        }
        let norm: f64 = columns[j].iter().map(|v| v * v).sum::<f64>().sqrt();
        for v in &mut columns[j] {
            *v /= norm;
        }
    }
    let mut data = vec![0.0; rows * cols];
    for (c, column) in columns.iter().enumerate() {
        for (r, &v) in column.iter().enumerate() {
            data[r * cols + c] = v;
        }
    }
    Mat { rows, cols, data }
}

/// Inverse standard-normal CDF (Acklam's rational approximation, relative
/// error below 1.2e-9, plenty for threshold calibration).
pub fn standard_normal_quantile(p: f64) -> f64 {
    assert!(p > 0.0 && p < 1.0, "quantile needs p in (0, 1)");
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.38357751867269e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    const P_LOW: f64 = 0.02425;

    if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    }
}

/// One draw from the synthetic generative process.
#[derive(Debug, Clone)]
pub struct SynthSample {
    pub x: Vec<f64>,
    pub z: Vec<f64>,
    pub factors: Vec<f64>,
    pub labels: Vec<Option<f64>>,
}

/// Synthetic entangled backbone with an exact factor oracle.
#[derive(Debug, Clone)]
pub struct SyntheticBackbone {
    latent_dim: usize,
    obs_dim: usize,
    kinds: Vec<LabelKind>,
    positive_rates: Vec<f64>,
    /// Binary decision thresholds on the ground-truth factors; continuous
    /// attributes keep a placeholder zero.
    thresholds: Vec<f64>,
    mixing: Mat,
    observe: Mat,
    /// Largest tolerated off-range residual in the exact inverse.
    pub residual_tol: f64,
}

impl SyntheticBackbone {
    /// `positive_rates[i]` sets the marginal positive rate of binary
    /// attribute `i`; continuous attributes ignore their entry.
    pub fn new(
        latent_dim: usize,
        obs_dim: usize,
        kinds: Vec<LabelKind>,
        positive_rates: &[f64],
        seed: u64,
    ) -> Result<Self> {
        let k = kinds.len();
        if k == 0 || k >= latent_dim {
            return Err(contract("need 1 <= k_labels < latent_dim"));
        }
        if obs_dim < latent_dim {
            return Err(contract(
                "observed dimension must be at least the latent dimension",
            ));
        }
        if positive_rates.len() != k {
            return Err(Error::Dimension(format!(
                "got {} positive rates for {k} attributes",
                positive_rates.len()
            )));
        }
        let mut thresholds = Vec::with_capacity(k);
        for (i, (&rate, kind)) in positive_rates.iter().zip(&kinds).enumerate() {
            match kind {
                LabelKind::Binary => {
                    if !(rate > 0.0 && rate < 1.0) {
                        return Err(contract(format!(
                            "positive rate for attribute {i} must lie in (0, 1)"
                        )));
                    }
                    thresholds.push(standard_normal_quantile(1.0 - rate));
                }
                LabelKind::Continuous => thresholds.push(0.0),
            }
        }

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(u64::MAX - 1);
        let mixing = seeded_orthonormal(latent_dim, latent_dim, &mut rng);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(u64::MAX - 2);
        let observe = seeded_orthonormal(obs_dim, latent_dim, &mut rng);

        let backbone = Self {
            latent_dim,
            obs_dim,
            kinds,
            positive_rates: positive_rates.to_vec(),
            thresholds,
            mixing,
            observe,
            residual_tol: 1e-6,
        };
        debug_assert!(backbone.orthogonality_error() <= 1e-10);
        Ok(backbone)
    }

    /// `max |M^T M - I|` of the mixing matrix.
    pub fn orthogonality_error(&self) -> f64 {
        let n = self.latent_dim;
        let mut worst: f64 = 0.0;
        for i in 0..n {
            for j in 0..n {
                let mut dot = 0.0;
                for r in 0..n {
                    dot += self.mixing.data[r * n + i] * self.mixing.data[r * n + j];
                }
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((dot - target).abs());
            }
        }
        worst
    }

    pub fn k_labels(&self) -> usize {
        self.kinds.len()
    }

    pub fn kinds(&self) -> &[LabelKind] {
        &self.kinds
    }

    pub fn positive_rates(&self) -> &[f64] {
        &self.positive_rates
    }

    pub fn thresholds(&self) -> &[f64] {
        &self.thresholds
    }

    pub fn factors_to_latent(&self, factors: &[f64]) -> Vec<f64> {
        self.mixing.matvec(factors)
    }

    pub fn latent_to_factors(&self, z: &[f64]) -> Vec<f64> {
        self.mixing.tmatvec(z)
    }

    /// Labels implied by ground-truth factors: thresholded sign for binary
    /// attributes, value clamped into [-1, 1] for continuous ones.
    pub fn labels_from_factors(&self, factors: &[f64]) -> Vec<Option<f64>> {
        self.kinds
            .iter()
            .zip(&self.thresholds)
            .zip(factors)
            .map(|((kind, &tau), &t)| match kind {
                LabelKind::Binary => Some(if t > tau { 1.0 } else { 0.0 }),
                LabelKind::Continuous => Some(t.clamp(-1.0, 1.0)),
            })
            .collect()
    }

    /// Inverts the elementwise bend `w + 0.1 tanh(w) = x`. The iteration is a
    /// contraction with rate 0.1, so it reaches 1e-12 well inside the budget.
    fn invert_bend(x: f64) -> f64 {
        let mut w = x;
        for _ in 0..INVERT_MAX_ITERS {
            let next = x - OBSERVE_BEND * w.tanh();
            if (next - w).abs() <= INVERT_TOL {
                return next;
            }
            w = next;
        }
        w
    }

    /// Exact inverse of the observation map on its range.
    pub fn exact_encode(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.obs_dim {
            return Err(Error::Dimension(format!(
                "observation has dimension {}, expected {}",
                x.len(),
                self.obs_dim
            )));
        }
        let w: Vec<f64> = x.iter().map(|&v| Self::invert_bend(v)).collect();
        let z = self.observe.tmatvec(&w);
        // On-range inputs satisfy A z = w; anything else is off the manifold.
        let projected = self.observe.matvec(&z);
        let residual = projected
            .iter()
            .zip(&w)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        if residual > self.residual_tol {
            return Err(Error::Oracle(format!(
                "observation is off the backbone range (residual {residual:.3e})"
            )));
        }
        Ok(z)
    }

    /// Exact ground-truth factors of an on-range observation.
    pub fn oracle_factors(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.latent_to_factors(&self.exact_encode(x)?))
    }

    /// Draws `n` samples from the generative process, deterministic per seed
    /// (each example has its own derived stream).
    pub fn generate(&self, n: usize, seed: u64) -> Vec<SynthSample> {
        (0..n)
            .map(|j| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(j as u64);
                let factors: Vec<f64> = (0..self.latent_dim)
                    .map(|_| rng.sample(StandardNormal))
                    .collect();
                let z = self.factors_to_latent(&factors);
                let x = self.decode(&z).expect("observation map is total");
                let labels = self.labels_from_factors(&factors);
                SynthSample {
                    x,
                    z,
                    factors,
                    labels,
                }
            })
            .collect()
    }
}

impl Backbone for SyntheticBackbone {
    fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    fn observed_dim(&self) -> usize {
        self.obs_dim
    }

    fn decode(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.latent_dim {
            return Err(Error::Dimension(format!(
                "latent has dimension {}, expected {}",
                z.len(),
                self.latent_dim
            )));
        }
        let w = self.observe.matvec(z);
        Ok(w.iter().map(|&v| v + OBSERVE_BEND * v.tanh()).collect())
    }

    fn encode(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.exact_encode(x)
    }

    fn decode_vjp(&self, z: &[f64], d_x: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.latent_dim || d_x.len() != self.obs_dim {
            return Err(Error::Dimension("vjp shapes do not match".into()));
        }
        // x = w + 0.1 tanh(w) with w = A z, so d_w = d_x * (1 + 0.1 sech^2).
        let w = self.observe.matvec(z);
        let d_w: Vec<f64> = d_x
            .iter()
            .zip(&w)
            .map(|(&d, &wi)| {
                let th = wi.tanh();
                d * (1.0 + OBSERVE_BEND * (1.0 - th * th))
            })
            .collect();
        Ok(self.observe.tmatvec(&d_w))
    }
}

/// Per-(example, attribute) keep mask implementing partial label coverage.
/// Drawn from a dedicated stream of the dataset seed, so the same seed
/// masks the same entries wherever the dataset is materialized.
pub fn make_label_mask(n: usize, k: usize, seed: u64, label_coverage: f64) -> Vec<Vec<bool>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX);
    (0..n)
        .map(|_| {
            (0..k)
                .map(|_| label_coverage >= 1.0 || rng.gen_range(0.0..1.0) < label_coverage)
                .collect()
        })
        .collect()
}

/// Builds a labeled latent dataset straight from the synthetic process.
/// A `1 - label_coverage` fraction of label entries, chosen uniformly per
/// (example, attribute) from a dedicated stream, is blanked out.
pub fn make_latent_dataset(
    backbone: &SyntheticBackbone,
    n: usize,
    seed: u64,
    label_coverage: f64,
) -> Result<LatentDataset> {
    if n == 0 {
        return Err(contract("dataset size must be positive"));
    }
    if !(label_coverage > 0.0 && label_coverage <= 1.0) {
        return Err(contract("label_coverage must lie in (0, 1]"));
    }
    let samples = backbone.generate(n, seed);
    let mask = make_label_mask(n, backbone.k_labels(), seed, label_coverage);
    let mut latents = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for (sample, keep) in samples.into_iter().zip(&mask) {
        latents.push(sample.z);
        let row: Vec<Option<f64>> = sample
            .labels
            .into_iter()
            .zip(keep)
            .map(|(value, &k)| if k { value } else { None })
            .collect();
        labels.push(row);
    }
    LatentDataset::new(latents, labels, backbone.kinds().to_vec())
}

#[derive(Debug, Clone, PartialEq)]
pub struct AeTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Weight of the isotropic latent regularizer.
    pub latent_reg: f64,
}

impl Default for AeTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 64,
            learning_rate: 1e-3,
            seed: 0,
            latent_reg: 1e-3,
        }
    }
}

/// Deterministic regularized autoencoder; stands in for a VAE backbone where
/// the method only needs a frozen encode/decode pair.
#[derive(Debug, Clone)]
pub struct ToyAutoencoder {
    encoder: Mlp,
    decoder: Mlp,
    trained: bool,
}

impl ToyAutoencoder {
    pub fn new(
        obs_dim: usize,
        latent_dim: usize,
        hidden_width: usize,
        hidden_depth: usize,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = Mlp::with_shape(
            obs_dim,
            latent_dim,
            hidden_width,
            hidden_depth,
            false,
            &mut rng,
        )?;
        let decoder = Mlp::with_shape(
            latent_dim,
            obs_dim,
            hidden_width,
            hidden_depth,
            false,
            &mut rng,
        )?;
        Self::from_parts(encoder, decoder, false)
    }

    pub fn from_parts(encoder: Mlp, decoder: Mlp, trained: bool) -> Result<Self> {
        if encoder.out_dim() != decoder.in_dim() || encoder.in_dim() != decoder.out_dim() {
            return Err(Error::Dimension(
                "encoder and decoder dimensions must chain through the latent space".into(),
            ));
        }
        Ok(Self {
            encoder,
            decoder,
            trained,
        })
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    pub fn encoder(&self) -> &Mlp {
        &self.encoder
    }

    pub fn decoder(&self) -> &Mlp {
        &self.decoder
    }

    /// All parameters (encoder, then decoder) flattened; also serves as the
    /// freeze checksum in tests.
    pub fn params(&self) -> Vec<f64> {
        let mut flat = Vec::new();
        self.encoder.write_params(&mut flat);
        self.decoder.write_params(&mut flat);
        flat
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        let used = self.encoder.read_params(params)?;
        self.decoder.read_params(&params[used..])?;
        Ok(())
    }

    /// Mean squared reconstruction error over a set of observations.
    pub fn reconstruction_mse(&self, xs: &[Vec<f64>]) -> Result<f64> {
        let mut total = 0.0;
        for x in xs {
            let x_hat = self.decoder.output(&self.encoder.output(x)?)?;
            total += x
                .iter()
                .zip(&x_hat)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>();
        }
        Ok(total / xs.len() as f64)
    }

    /// Minimizes reconstruction error plus a small latent norm penalty with
    /// mini-batch Adam. Returns the per-epoch loss history.
    pub fn train(&mut self, xs: &[Vec<f64>], config: &AeTrainConfig) -> Result<Vec<f64>> {
        if xs.is_empty() {
            return Err(contract("autoencoder training needs at least one example"));
        }
        if config.epochs == 0 || config.batch_size == 0 {
            return Err(contract("epochs and batch_size must be positive"));
        }
        let n = xs.len();
        let enc_count = self.encoder.param_count();
        let mut params = self.params();
        let mut state = AdamState::new(params.len(), AdamParams::with_lr(config.learning_rate));
        let mut history = Vec::with_capacity(config.epochs);
        let mut indices: Vec<usize> = (0..n).collect();

        for epoch in 0..config.epochs {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(epoch as u64 + 1);
            use rand::seq::SliceRandom;
            indices.shuffle(&mut rng);

            let mut epoch_loss = 0.0;
            for batch in indices.chunks(config.batch_size) {
                let mut grad = vec![0.0; params.len()];
                let mut batch_loss = 0.0;
                for &i in batch {
                    let x = &xs[i];
                    let (z, enc_cache) = self.encoder.forward(x)?;
                    let (x_hat, dec_cache) = self.decoder.forward(&z)?;
                    let err: Vec<f64> = x_hat.iter().zip(x).map(|(a, b)| a - b).collect();
                    let loss: f64 = err.iter().map(|e| e * e).sum::<f64>()
                        + config.latent_reg * z.iter().map(|v| v * v).sum::<f64>();
                    if !loss.is_finite() {
                        return Err(Error::Training(format!(
                            "autoencoder loss diverged at epoch {epoch}"
                        )));
                    }
                    batch_loss += loss;
                    let d_xhat: Vec<f64> = err.iter().map(|e| 2.0 * e).collect();
                    let (mut d_z, dec_grads) = self.decoder.backward(&dec_cache, &d_xhat)?;
                    for (dzi, zi) in d_z.iter_mut().zip(&z) {
                        *dzi += 2.0 * config.latent_reg * zi;
                    }
                    let (_, enc_grads) = self.encoder.backward(&enc_cache, &d_z)?;
                    let mut flat = Vec::with_capacity(params.len());
                    Mlp::write_grads(&enc_grads, &mut flat);
                    Mlp::write_grads(&dec_grads, &mut flat);
                    for (g, d) in grad.iter_mut().zip(&flat) {
                        *g += d;
                    }
                }
                let scale = 1.0 / batch.len() as f64;
                for g in &mut grad {
                    *g *= scale;
                }
                adam_step(&mut params, &grad, &mut state)?;
                self.encoder.read_params(&params[..enc_count])?;
                self.decoder.read_params(&params[enc_count..])?;
                epoch_loss += batch_loss;
            }
            history.push(epoch_loss / n as f64);
        }
        self.trained = true;
        Ok(history)
    }
}

impl Backbone for ToyAutoencoder {
    fn latent_dim(&self) -> usize {
        self.encoder.out_dim()
    }

    fn observed_dim(&self) -> usize {
        self.encoder.in_dim()
    }

    fn decode(&self, z: &[f64]) -> Result<Vec<f64>> {
        if !self.trained {
            return Err(contract("autoencoder is not trained"));
        }
        self.decoder.output(z)
    }

    fn encode(&self, x: &[f64]) -> Result<Vec<f64>> {
        if !self.trained {
            return Err(contract("autoencoder is not trained"));
        }
        self.encoder.output(x)
    }

    fn decode_vjp(&self, z: &[f64], d_x: &[f64]) -> Result<Vec<f64>> {
        if !self.trained {
            return Err(contract("autoencoder is not trained"));
        }
        let (_, cache) = self.decoder.forward(z)?;
        let (d_z, _) = self.decoder.backward(&cache, d_x)?;
        Ok(d_z)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RecoverConfig {
    pub steps: usize,
    pub learning_rate: f64,
}

impl Default for RecoverConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            learning_rate: 1e-2,
        }
    }
}

/// Finds a latent whose decoding approximates `x` by running Adam on the
/// squared reconstruction error from a zero initialization. Returns the
/// best-loss iterate, which is never worse than the initialization. The
/// backbone parameters are read-only throughout.
pub fn latent_recover<B: Backbone>(
    backbone: &B,
    x: &[f64],
    config: &RecoverConfig,
) -> Result<Vec<f64>> {
    if config.steps == 0 {
        return Err(contract("latent recovery needs at least one step"));
    }
    if x.len() != backbone.observed_dim() {
        return Err(Error::Dimension(format!(
            "target has dimension {}, decoder produces {}",
            x.len(),
            backbone.observed_dim()
        )));
    }
    let dim = backbone.latent_dim();
    let mut z = vec![0.0; dim];
    let mut state = AdamState::new(dim, AdamParams::with_lr(config.learning_rate));

    let loss_of = |z: &[f64]| -> Result<(f64, Vec<f64>)> {
        let x_hat = backbone.decode(z)?;
        let err: Vec<f64> = x_hat.iter().zip(x).map(|(a, b)| a - b).collect();
        let loss = err.iter().map(|e| e * e).sum::<f64>();
        Ok((loss, err))
    };

    let (mut best_loss, _) = loss_of(&z)?;
    let mut best_z = z.clone();
    for step in 0..config.steps {
        let (loss, err) = loss_of(&z)?;
        if !loss.is_finite() {
            return Err(Error::Training(format!(
                "latent recovery diverged at step {step}"
            )));
        }
        if loss < best_loss {
            best_loss = loss;
            best_z.copy_from_slice(&z);
        }
        let d_xhat: Vec<f64> = err.iter().map(|e| 2.0 * e).collect();
        let d_z = backbone.decode_vjp(&z, &d_xhat)?;
        adam_step(&mut z, &d_z, &mut state)?;
    }
    let (final_loss, _) = loss_of(&z)?;
    if final_loss < best_loss && all_finite(&z) {
        best_z = z;
    }
    Ok(best_z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::DenseLayer;

    fn default_backbone() -> SyntheticBackbone {
        SyntheticBackbone::new(
            8,
            16,
            vec![LabelKind::Binary, LabelKind::Binary, LabelKind::Binary],
            &[0.5, 0.5, 0.5],
            7,
        )
        .unwrap()
    }

    #[test]
    fn mixing_is_orthogonal() {
        let bk = default_backbone();
        assert!(bk.orthogonality_error() <= 1e-10);
    }

    #[test]
    fn quantile_reference_values() {
        assert!(standard_normal_quantile(0.5).abs() < 1e-9);
        assert!((standard_normal_quantile(0.975) - 1.959964).abs() < 1e-5);
        assert!((standard_normal_quantile(0.1) + 1.281552).abs() < 1e-5);
    }

    #[test]
    fn unmixed_identity_process_exposes_factors() {
        // mixing = I, observation restricted to the identity embedding.
        let mut bk = default_backbone();
        let n = bk.latent_dim;
        bk.mixing = Mat {
            rows: n,
            cols: n,
            data: {
                let mut d = vec![0.0; n * n];
                for i in 0..n {
                    d[i * n + i] = 1.0;
                }
                d
            },
        };
        let samples = bk.generate(50, 3);
        for s in &samples {
            for (a, b) in s.z.iter().zip(&s.factors) {
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn factor_moments_match_standard_normal() {
        let bk = default_backbone();
        let n = 10_000;
        let samples = bk.generate(n, 11);
        for dim in 0..bk.latent_dim {
            let mean: f64 = samples.iter().map(|s| s.factors[dim]).sum::<f64>() / n as f64;
            let var: f64 = samples
                .iter()
                .map(|s| (s.factors[dim] - mean).powi(2))
                .sum::<f64>()
                / n as f64;
            assert!(
                mean.abs() <= 4.0 / (n as f64).sqrt(),
                "mean {mean} at dim {dim}"
            );
            assert!((var - 1.0).abs() <= 0.1, "variance {var} at dim {dim}");
        }
    }

    #[test]
    fn imbalance_threshold_calibration() {
        let bk = SyntheticBackbone::new(
            6,
            8,
            vec![LabelKind::Binary, LabelKind::Binary],
            &[0.1, 0.5],
            13,
        )
        .unwrap();
        let n = 10_000;
        let samples = bk.generate(n, 5);
        let rate = samples.iter().filter(|s| s.labels[0] == Some(1.0)).count() as f64 / n as f64;
        assert!((rate - 0.1).abs() <= 0.01, "positive rate {rate}");
    }

    #[test]
    fn oracle_round_trip_is_exact() {
        let bk = default_backbone();
        let samples = bk.generate(100, 17);
        for s in &samples {
            let recovered = bk.oracle_factors(&s.x).unwrap();
            let err = recovered
                .iter()
                .zip(&s.factors)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(err <= 1e-9, "oracle error {err}");
            let labels = bk.labels_from_factors(&recovered);
            assert_eq!(labels, s.labels);
        }
    }

    #[test]
    fn oracle_rejects_off_range_points() {
        let bk = default_backbone();
        let sample = &bk.generate(1, 19)[0];
        let mut x = sample.x.clone();
        x[0] += 1e-3;
        assert!(matches!(bk.oracle_factors(&x), Err(Error::Oracle(_))));
    }

    #[test]
    fn oracle_perturbation_is_well_conditioned() {
        // With the residual gate widened, a small off-manifold perturbation
        // changes the recovered factors by no more than its own size: every
        // stage of the inverse (elementwise bend, A^T, M^T) is 1-Lipschitz.
        let mut bk = default_backbone();
        bk.residual_tol = 1e-2;
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let sample = &bk.generate(1, 23)[0];
        let t0 = bk.oracle_factors(&sample.x).unwrap();
        let noise: Vec<f64> = (0..sample.x.len())
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        let noise_norm: f64 = noise.iter().map(|v| v * v).sum::<f64>().sqrt();
        let x: Vec<f64> = sample
            .x
            .iter()
            .zip(&noise)
            .map(|(a, n)| a + 1e-3 * n / noise_norm)
            .collect();
        let t1 = bk.oracle_factors(&x).unwrap();
        let dt: f64 = t0
            .iter()
            .zip(&t1)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        assert!(dt <= 1.0001 * 1e-3 + 1e-10, "factor shift {dt}");
    }

    #[test]
    fn entanglement_hides_labels_from_single_coordinates() {
        let bk = default_backbone();
        let n = 10_000;
        let samples = bk.generate(n, 29);
        for attr in 0..bk.k_labels() {
            let truths: Vec<bool> = samples
                .iter()
                .map(|s| s.labels[attr] == Some(1.0))
                .collect();
            let mut best = 0.0f64;
            for dim in 0..bk.latent_dim {
                let mut pairs: Vec<(f64, bool)> = samples
                    .iter()
                    .zip(&truths)
                    .map(|(s, &t)| (s.z[dim], t))
                    .collect();
                pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
                // Scan all thresholds; count positives right of the split.
                let total_pos = truths.iter().filter(|&&t| t).count() as f64;
                let mut pos_left = 0.0;
                for (idx, &(_, t)) in pairs.iter().enumerate() {
                    let left = idx as f64;
                    let acc_up = (total_pos - pos_left + left - pos_left) / n as f64;
                    best = best.max(acc_up).max(1.0 - acc_up);
                    if t {
                        pos_left += 1.0;
                    }
                }
            }
            assert!(best < 0.95, "attribute {attr} predictable at {best}");
        }
    }

    #[test]
    fn autoencoder_training_makes_progress_and_is_deterministic() {
        let bk = SyntheticBackbone::new(4, 6, vec![LabelKind::Binary], &[0.5], 31).unwrap();
        let xs: Vec<Vec<f64>> = bk.generate(120, 3).into_iter().map(|s| s.x).collect();
        let config = AeTrainConfig {
            epochs: 15,
            batch_size: 32,
            learning_rate: 1e-3,
            seed: 1,
            latent_reg: 1e-3,
        };
        let run = || {
            let mut ae = ToyAutoencoder::new(6, 4, 16, 2, 2).unwrap();
            let before = ae.reconstruction_mse(&xs).unwrap();
            let history = ae.train(&xs, &config).unwrap();
            let after = ae.reconstruction_mse(&xs).unwrap();
            assert!(after < before, "no progress: {before} -> {after}");
            history
        };
        let h1 = run();
        let h2 = run();
        assert_eq!(h1, h2);
    }

    #[test]
    fn linear_autoencoder_recovers_linear_subspace() {
        // Data on a 3-dimensional linear subspace of R^8, single linear
        // layers: training should approach the subspace projection.
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let basis = seeded_orthonormal(8, 3, &mut rng);
        let xs: Vec<Vec<f64>> = (0..300)
            .map(|_| {
                let t: Vec<f64> = (0..3).map(|_| rng.sample(StandardNormal)).collect();
                basis.matvec(&t)
            })
            .collect();
        let mut enc_rng = ChaCha8Rng::seed_from_u64(41);
        let encoder = Mlp::with_shape(8, 3, 0, 1, false, &mut enc_rng).unwrap();
        let decoder = Mlp::with_shape(3, 8, 0, 1, false, &mut enc_rng).unwrap();
        let mut ae = ToyAutoencoder::from_parts(encoder, decoder, false).unwrap();
        ae.train(
            &xs,
            &AeTrainConfig {
                epochs: 200,
                batch_size: 50,
                learning_rate: 1e-2,
                seed: 4,
                latent_reg: 1e-4,
            },
        )
        .unwrap();
        let mut num = 0.0;
        let mut den = 0.0;
        for x in &xs {
            let x_hat = ae
                .decoder()
                .output(&ae.encoder().output(x).unwrap())
                .unwrap();
            num += x
                .iter()
                .zip(&x_hat)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>();
            den += x.iter().map(|v| v * v).sum::<f64>();
        }
        let rel = (num / den).sqrt();
        assert!(rel < 0.05, "relative reconstruction error {rel}");
    }

    #[test]
    fn untrained_autoencoder_refuses_to_encode() {
        let ae = ToyAutoencoder::new(6, 3, 8, 2, 0).unwrap();
        assert!(matches!(ae.encode(&[0.0; 6]), Err(Error::Contract(_))));
        assert!(matches!(ae.decode(&[0.0; 3]), Err(Error::Contract(_))));
    }

    #[test]
    fn reconstruction_stays_within_the_trained_bound() {
        // The recorded final loss upper-bounds the reconstruction error
        // (the loss adds a nonnegative latent penalty on top of it).
        let bk = SyntheticBackbone::new(4, 6, vec![LabelKind::Binary], &[0.5], 61).unwrap();
        let xs: Vec<Vec<f64>> = bk.generate(150, 4).into_iter().map(|s| s.x).collect();
        let mut ae = ToyAutoencoder::new(6, 4, 16, 2, 3).unwrap();
        let history = ae
            .train(
                &xs,
                &AeTrainConfig {
                    epochs: 25,
                    ..Default::default()
                },
            )
            .unwrap();
        let mse = ae.reconstruction_mse(&xs).unwrap();
        let final_loss = *history.last().unwrap();
        // The final epoch's loss was measured on slightly older parameters
        // than the post-training reconstruction, hence the small headroom.
        assert!(
            mse <= final_loss * 1.5 + 1e-9,
            "reconstruction mse {mse} vs trained bound {final_loss}"
        );
    }

    #[test]
    fn latent_recovery_on_identity_decoder() {
        let mut layer = DenseLayer::zeros(3, 3).unwrap();
        for i in 0..3 {
            layer.weights[i * 3 + i] = 1.0;
        }
        let decoder = MlpDecoder(Mlp::new(vec![layer]).unwrap());
        let target = [0.8, -0.4, 0.3];
        let z = latent_recover(&decoder, &target, &RecoverConfig::default()).unwrap();
        for (a, b) in z.iter().zip(&target) {
            assert!((a - b).abs() <= 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn latent_recovery_on_conditioned_linear_map() {
        // Diagonal singular values 1..10 rotated: condition number 10. The
        // square map is invertible, so the least-squares optimum has zero
        // residual.
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let q = seeded_orthonormal(4, 4, &mut rng);
        let mut layer = DenseLayer::zeros(4, 4).unwrap();
        let singular = [1.0, 4.0, 7.0, 10.0];
        for r in 0..4 {
            for c in 0..4 {
                layer.weights[r * 4 + c] = q.data[r * 4 + c] * singular[c];
            }
        }
        let decoder = MlpDecoder(Mlp::new(vec![layer]).unwrap());
        let z_true = [0.5, -0.2, 0.9, -0.7];
        let x = decoder.decode(&z_true).unwrap();
        let z = latent_recover(
            &decoder,
            &x,
            &RecoverConfig {
                steps: 2000,
                learning_rate: 5e-2,
            },
        )
        .unwrap();
        let x_hat = decoder.decode(&z).unwrap();
        let residual: f64 = x_hat
            .iter()
            .zip(&x)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let scale: f64 = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(
            residual / scale < 1e-3,
            "relative residual {}",
            residual / scale
        );
    }

    #[test]
    fn latent_recovery_never_beats_the_init_backwards() {
        let bk = SyntheticBackbone::new(4, 6, vec![LabelKind::Binary], &[0.5], 47).unwrap();
        let xs: Vec<Vec<f64>> = bk.generate(80, 9).into_iter().map(|s| s.x).collect();
        let mut ae = ToyAutoencoder::new(6, 4, 16, 2, 5).unwrap();
        ae.train(&xs, &AeTrainConfig::default()).unwrap();
        let target = &xs[0];
        let decoder_only = MlpDecoder(ae.decoder().clone());
        let z = latent_recover(
            &decoder_only,
            target,
            &RecoverConfig {
                steps: 40,
                learning_rate: 1e-2,
            },
        )
        .unwrap();
        let loss = |z: &[f64]| {
            ae.decoder()
                .output(z)
                .unwrap()
                .iter()
                .zip(target)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
        };
        assert!(loss(&z) <= loss(&[0.0; 4]));
    }

    #[test]
    fn latent_recovery_leaves_backbone_parameters_untouched() {
        let bk = SyntheticBackbone::new(4, 6, vec![LabelKind::Binary], &[0.5], 51).unwrap();
        let xs: Vec<Vec<f64>> = bk.generate(60, 2).into_iter().map(|s| s.x).collect();
        let mut ae = ToyAutoencoder::new(6, 4, 16, 2, 5).unwrap();
        ae.train(&xs, &AeTrainConfig::default()).unwrap();
        let checksum = ae.params();
        latent_recover(&ae, &xs[0], &RecoverConfig::default()).unwrap();
        assert_eq!(ae.params(), checksum);
    }

    #[test]
    fn dataset_coverage_controls_missingness() {
        let bk = default_backbone();
        let full = make_latent_dataset(&bk, 200, 3, 1.0).unwrap();
        assert!(full
            .labels()
            .iter()
            .all(|row| row.iter().all(|v| v.is_some())));
        assert_eq!(full.n_dims(), 8);
        assert_eq!(full.k_labels(), 3);

        let half = make_latent_dataset(&bk, 10_000, 3, 0.5).unwrap();
        let missing = half
            .labels()
            .iter()
            .flatten()
            .filter(|v| v.is_none())
            .count() as f64;
        let fraction = missing / (10_000.0 * 3.0);
        assert!(
            (fraction - 0.5).abs() <= 0.02,
            "missing fraction {fraction}"
        );
    }

    #[test]
    fn generation_is_deterministic_per_seed() {
        let bk = default_backbone();
        let a = bk.generate(5, 101);
        let b = bk.generate(5, 101);
        for (s, t) in a.iter().zip(&b) {
            assert_eq!(s.x, t.x);
            assert_eq!(s.factors, t.factors);
        }
    }
}
