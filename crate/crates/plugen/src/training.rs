//! Training of the flow against the factorized prior: mean negative
//! log-likelihood of latent codes, mini-batch Adam with a per-epoch sigma
//! schedule, and semi-supervised handling of missing labels.
//!
//! The backbone never enters this module; training sees only latent codes,
//! which is what keeps the base model frozen by construction.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::flow::{NiceFlow, LOG_SCALE_LIMIT};
use crate::numerics::{adam_step, all_finite, AdamParams, AdamState};
use crate::priors::{label_logpdf_grad, style_logpdf, LabelKind, LabelSpec, SigmaSchedule};

/// Latent codes with (possibly partial) per-attribute labels.
#[derive(Debug, Clone)]
pub struct LatentDataset {
    latents: Vec<Vec<f64>>,
    labels: Vec<Vec<Option<f64>>>,
    n_dims: usize,
    k_labels: usize,
    kinds: Vec<LabelKind>,
}

impl LatentDataset {
    pub fn new(
        latents: Vec<Vec<f64>>,
        labels: Vec<Vec<Option<f64>>>,
        kinds: Vec<LabelKind>,
    ) -> Result<Self> {
        if latents.is_empty() || latents.len() != labels.len() {
            return Err(contract(
                "dataset needs equal, nonzero numbers of latents and label vectors",
            ));
        }
        let n_dims = latents[0].len();
        let k_labels = kinds.len();
        if k_labels == 0 || k_labels >= n_dims {
            return Err(contract("need 1 <= k_labels < n_dims"));
        }
        for (i, z) in latents.iter().enumerate() {
            if z.len() != n_dims {
                return Err(Error::Dimension(format!(
                    "latent {i} has dimension {}, expected {n_dims}",
                    z.len()
                )));
            }
            if !all_finite(z) {
                return Err(Error::Numeric(format!("latent {i} has non-finite entries")));
            }
        }
        for (i, y) in labels.iter().enumerate() {
            if y.len() != k_labels {
                return Err(Error::Dimension(format!(
                    "label vector {i} has length {}, expected {k_labels}",
                    y.len()
                )));
            }
            for (attr, value) in y.iter().enumerate() {
                if let Some(v) = value {
                    match kinds[attr] {
                        LabelKind::Binary if *v != 0.0 && *v != 1.0 => {
                            return Err(contract(format!(
                                "example {i}, attribute {attr}: binary label must be 0 or 1, got {v}"
                            )));
                        }
                        LabelKind::Continuous if !(-1.0..=1.0).contains(v) => {
                            return Err(contract(format!(
                                "example {i}, attribute {attr}: continuous label {v} outside [-1, 1]"
                            )));
                        }
                        _ => {}
                    }
                }
            }
        }
        for attr in 0..k_labels {
            if labels.iter().all(|y| y[attr].is_none()) {
                return Err(contract(format!(
                    "attribute {attr} has no observed labels; proportions are undefined"
                )));
            }
        }
        Ok(Self {
            latents,
            labels,
            n_dims,
            k_labels,
            kinds,
        })
    }

    pub fn len(&self) -> usize {
        self.latents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.latents.is_empty()
    }

    pub fn n_dims(&self) -> usize {
        self.n_dims
    }

    pub fn k_labels(&self) -> usize {
        self.k_labels
    }

    pub fn kinds(&self) -> &[LabelKind] {
        &self.kinds
    }

    pub fn latent(&self, i: usize) -> &[f64] {
        &self.latents[i]
    }

    pub fn label(&self, i: usize) -> &[Option<f64>] {
        &self.labels[i]
    }

    pub fn latents(&self) -> &[Vec<f64>] {
        &self.latents
    }

    pub fn labels(&self) -> &[Vec<Option<f64>>] {
        &self.labels
    }
}

/// Estimates per-attribute specs from the observed labels: class proportions
/// for binary attributes (missing entries excluded), the given kernel width
/// for continuous ones. Frozen before training starts.
pub fn fit_label_specs(
    dataset: &LatentDataset,
    scale_by_proportion: bool,
    continuous_sigma_base: f64,
) -> Result<Vec<LabelSpec>> {
    let mut specs = Vec::with_capacity(dataset.k_labels());
    for attr in 0..dataset.k_labels() {
        match dataset.kinds()[attr] {
            LabelKind::Binary => {
                let mut observed = 0usize;
                let mut positives = 0usize;
                for y in dataset.labels() {
                    if let Some(v) = y[attr] {
                        observed += 1;
                        if v == 1.0 {
                            positives += 1;
                        }
                    }
                }
                let p1 = positives as f64 / observed as f64;
                let spec = LabelSpec::Binary {
                    m0: -1.0,
                    m1: 1.0,
                    p0: 1.0 - p1,
                    p1,
                    scale_by_proportion,
                };
                spec.validate()?;
                specs.push(spec);
            }
            LabelKind::Continuous => specs.push(LabelSpec::continuous(continuous_sigma_base)?),
        }
    }
    Ok(specs)
}

/// Per-coordinate affine normalization of latent codes, available behind a
/// flag. Inference must apply the inverse map when the flow was trained on
/// whitened latents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Whitening {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Whitening {
    /// Fits per-coordinate mean and standard deviation over the dataset.
    pub fn fit(dataset: &LatentDataset) -> Self {
        let n = dataset.len() as f64;
        let dims = dataset.n_dims();
        let mut mean = vec![0.0; dims];
        for z in dataset.latents() {
            for (m, v) in mean.iter_mut().zip(z) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= n;
        }
        let mut var = vec![0.0; dims];
        for z in dataset.latents() {
            for ((s, v), m) in var.iter_mut().zip(z).zip(&mean) {
                let d = v - m;
                *s += d * d;
            }
        }
        let std = var.iter().map(|&s| (s / n).sqrt().max(1e-12)).collect();
        Self { mean, std }
    }

    pub fn apply(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    }

    pub fn invert(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((v, m), s)| v * s + m)
            .collect()
    }

    /// Returns a whitened copy of the dataset.
    pub fn whiten(&self, dataset: &LatentDataset) -> Result<LatentDataset> {
        LatentDataset::new(
            dataset.latents().iter().map(|z| self.apply(z)).collect(),
            dataset.labels().to_vec(),
            dataset.kinds().to_vec(),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub schedule: SigmaSchedule,
    pub seed: u64,
    pub shuffle: bool,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(contract("epochs must be at least 1"));
        }
        if self.batch_size < 1 {
            return Err(contract("batch_size must be at least 1"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(contract("learning_rate must be positive"));
        }
        self.schedule.validate()
    }
}

/// One line of the training history.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub sigma: f64,
    pub mean_nll: f64,
}

/// Negative log-likelihood of a single latent code: the per-attribute prior
/// terms (marginal when the label is missing), the style prior, and the
/// inverse log-determinant.
pub fn example_nll(
    flow: &NiceFlow,
    specs: &[LabelSpec],
    z: &[f64],
    y: &[Option<f64>],
    sigma_t: f64,
) -> Result<f64> {
    let (nll, _, _) = example_nll_parts(flow, specs, z, y, sigma_t)?;
    Ok(nll)
}

/// Loss plus the cotangents needed by the flow backward pass.
fn example_nll_parts(
    flow: &NiceFlow,
    specs: &[LabelSpec],
    z: &[f64],
    y: &[Option<f64>],
    sigma_t: f64,
) -> Result<(f64, Vec<f64>, crate::flow::InverseTrace)> {
    let k = specs.len();
    if y.len() != k {
        return Err(contract(format!(
            "label vector has length {}, expected {k}",
            y.len()
        )));
    }
    let trace = flow.inverse_traced_slice(z)?;
    let v = trace.output();
    let mut nll = -trace.log_det();
    let mut d_v = vec![0.0; v.len()];
    for i in 0..k {
        let (logp, dlogp) = label_logpdf_grad(&specs[i], y[i], v[i], sigma_t)?;
        nll -= logp;
        d_v[i] = -dlogp;
    }
    let style = &v[k..];
    nll -= style_logpdf(style);
    for (slot, &s) in d_v[k..].iter_mut().zip(style) {
        *slot = s;
    }
    Ok((nll, d_v, trace))
}

/// Fixed chunk width for the deterministic parallel reduction; partial sums
/// are combined in chunk order so results do not depend on the thread count.
const REDUCE_CHUNK: usize = 32;

/// Mean NLL over a batch together with the mean gradient for every flow
/// parameter, exact reverse-mode.
pub fn nll_loss(
    flow: &NiceFlow,
    specs: &[LabelSpec],
    batch: &[(&[f64], &[Option<f64>])],
    sigma_t: f64,
) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(contract("batch must be non-empty"));
    }
    let n_params = flow.param_count();
    let partials: Vec<Result<(f64, Vec<f64>)>> = batch
        .par_chunks(REDUCE_CHUNK)
        .enumerate()
        .map(|(chunk_idx, chunk)| {
            let mut loss_sum = 0.0;
            let mut grad_sum = vec![0.0; n_params];
            for (offset, (z, y)) in chunk.iter().enumerate() {
                let index = chunk_idx * REDUCE_CHUNK + offset;
                let (nll, d_v, trace) = example_nll_parts(flow, specs, z, y, sigma_t)?;
                if !nll.is_finite() {
                    return Err(Error::Training(format!(
                        "non-finite loss at example {index}"
                    )));
                }
                let grads = flow.backprop(z, &trace, &d_v, -1.0)?;
                loss_sum += nll;
                for (g, d) in grad_sum.iter_mut().zip(&grads) {
                    *g += d;
                }
            }
            Ok((loss_sum, grad_sum))
        })
        .collect();

    let scale = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    let mut grads = vec![0.0; n_params];
    for partial in partials {
        let (l, g) = partial?;
        loss += l;
        for (slot, value) in grads.iter_mut().zip(&g) {
            *slot += value;
        }
    }
    loss *= scale;
    for g in &mut grads {
        *g *= scale;
    }
    Ok((loss, grads))
}

/// Mean NLL over a dataset at a fixed sigma, no gradients.
pub fn evaluate_nll(
    flow: &NiceFlow,
    specs: &[LabelSpec],
    dataset: &LatentDataset,
    sigma: f64,
) -> Result<f64> {
    check_dims(flow, specs, dataset)?;
    #[allow(clippy::type_complexity)]
    let items: Vec<(usize, &[f64], &[Option<f64>])> = (0..dataset.len())
        .map(|i| (i, dataset.latent(i), dataset.label(i)))
        .collect();
    let partials: Vec<Result<f64>> = items
        .par_chunks(REDUCE_CHUNK)
        .map(|chunk| {
            let mut sum = 0.0;
            for (index, z, y) in chunk {
                let nll = example_nll(flow, specs, z, y, sigma)?;
                if !nll.is_finite() {
                    return Err(Error::Training(format!(
                        "non-finite loss at example {index}"
                    )));
                }
                sum += nll;
            }
            Ok(sum)
        })
        .collect();
    let mut total = 0.0;
    for p in partials {
        total += p?;
    }
    Ok(total / dataset.len() as f64)
}

fn check_dims(flow: &NiceFlow, specs: &[LabelSpec], dataset: &LatentDataset) -> Result<()> {
    if dataset.n_dims() != flow.dims() {
        return Err(Error::Dimension(format!(
            "dataset dimension {} does not match flow dimension {}",
            dataset.n_dims(),
            flow.dims()
        )));
    }
    if specs.len() != flow.k_labels() || dataset.k_labels() != flow.k_labels() {
        return Err(Error::Dimension(format!(
            "label counts disagree: specs {}, dataset {}, flow {}",
            specs.len(),
            dataset.k_labels(),
            flow.k_labels()
        )));
    }
    Ok(())
}

/// Minimizes the NLL with shuffled mini-batch Adam. The sigma schedule is
/// advanced once per epoch; the scaling parameters are clamped after every
/// step. Deterministic given the seed.
pub fn train(
    flow: &mut NiceFlow,
    specs: &[LabelSpec],
    dataset: &LatentDataset,
    config: &TrainConfig,
) -> Result<Vec<EpochStats>> {
    config.validate()?;
    check_dims(flow, specs, dataset)?;

    let n = dataset.len();
    let dims = flow.dims();
    let mut params = flow.params();
    let mut state = AdamState::new(params.len(), AdamParams::with_lr(config.learning_rate));
    let mut history = Vec::with_capacity(config.epochs);
    let mut indices: Vec<usize> = (0..n).collect();

    for epoch in 0..config.epochs {
        let sigma_t = config.schedule.sigma_at(epoch);
        if config.shuffle {
            // Dedicated stream per (seed, epoch) so the order never depends
            // on thread count or prior epochs.
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(epoch as u64 + 1);
            indices.shuffle(&mut rng);
        }
        let mut epoch_loss = 0.0;
        for batch_indices in indices.chunks(config.batch_size) {
            let batch: Vec<(&[f64], &[Option<f64>])> = batch_indices
                .iter()
                .map(|&i| (dataset.latent(i), dataset.label(i)))
                .collect();
            let (loss, grads) = nll_loss(flow, specs, &batch, sigma_t)
                .map_err(|e| Error::Training(format!("epoch {epoch}: {e}")))?;
            epoch_loss += loss * batch.len() as f64;
            adam_step(&mut params, &grads, &mut state)
                .map_err(|e| Error::Training(format!("epoch {epoch}: {e}")))?;
            let tail = params.len() - dims;
            for s in &mut params[tail..] {
                *s = s.clamp(-LOG_SCALE_LIMIT, LOG_SCALE_LIMIT);
            }
            flow.set_params(&params)?;
        }
        let mean_nll = epoch_loss / n as f64;
        if !mean_nll.is_finite() {
            return Err(Error::Training(format!(
                "training diverged at epoch {epoch}"
            )));
        }
        history.push(EpochStats {
            epoch,
            sigma: sigma_t,
            mean_nll,
        });
    }
    Ok(history)
}
