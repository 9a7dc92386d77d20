//! Oracle-based evaluation protocols. The synthetic backbone's exact factor
//! oracle stands in for the external classifiers that usually score
//! attribute edits, so every number here is a deterministic function of
//! (parameters, seed).
//!
//! Protocols: flip accuracy (edit one attribute, check the oracle label),
//! independent-attribute sampling scored by F1/AUC, continuous-attribute
//! distribution shift, and a leakage matrix measuring how much editing one
//! attribute disturbs the ground-truth factors of the others.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, SyntheticBackbone};
use crate::error::{contract, Result};
use crate::flow::{edit_code, FactorizedCode, LatentCode, NiceFlow};
use crate::inference::{generate, Condition, ConditionEntry};
use crate::priors::{sample_label, LabelKind, LabelSpec};
use crate::training::Whitening;

/// Histogram bounds and bin count are fixed so reports are comparable.
pub const HIST_LO: f64 = -2.5;
pub const HIST_HI: f64 = 2.5;
pub const HIST_BINS: usize = 41;

/// F1 score of predictions against truth: `2 TP / (2 TP + FP + FN)`.
/// Returns 0 when no example is positive on either side.
pub fn f1_score(predicted: &[bool], truth: &[bool]) -> f64 {
    assert_eq!(predicted.len(), truth.len());
    let mut tp = 0.0;
    let mut fp = 0.0;
    let mut fne = 0.0;
    for (&p, &t) in predicted.iter().zip(truth) {
        match (p, t) {
            (true, true) => tp += 1.0,
            (true, false) => fp += 1.0,
            (false, true) => fne += 1.0,
            (false, false) => {}
        }
    }
    let denom = 2.0 * tp + fp + fne;
    if denom == 0.0 {
        0.0
    } else {
        2.0 * tp / denom
    }
}

/// Rank-based AUC (Mann-Whitney) with ties broken by averaging ranks, which
/// is the trapezoidal area under the ROC curve.
pub fn auc_score(scores: &[f64], truth: &[bool]) -> Result<f64> {
    assert_eq!(scores.len(), truth.len());
    let n_pos = truth.iter().filter(|&&t| t).count();
    let n_neg = truth.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(contract("AUC needs both classes present"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks, averaged across the tie group.
        let avg = (i + j + 2) as f64 / 2.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    let pos_rank_sum: f64 = ranks
        .iter()
        .zip(truth)
        .filter(|(_, &t)| t)
        .map(|(&r, _)| r)
        .sum();
    let u = pos_rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Fixed-bin histogram over `[HIST_LO, HIST_HI]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<u64>,
    pub n_out_of_range: u64,
}

impl Histogram {
    pub fn collect(values: &[f64]) -> Self {
        let mut counts = vec![0u64; HIST_BINS];
        let mut out = 0u64;
        let width = (HIST_HI - HIST_LO) / HIST_BINS as f64;
        for &v in values {
            if !(HIST_LO..=HIST_HI).contains(&v) {
                out += 1;
                continue;
            }
            let bin = (((v - HIST_LO) / width) as usize).min(HIST_BINS - 1);
            counts[bin] += 1;
        }
        Self {
            lo: HIST_LO,
            hi: HIST_HI,
            counts,
            n_out_of_range: out,
        }
    }
}

/// Evaluation settings shared by the protocols.
#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub n: usize,
    pub seed: u64,
    pub sigma_gen: f64,
    pub temperature: f64,
    pub continuous_targets: Vec<f64>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            n: 1000,
            seed: 9999,
            sigma_gen: 0.1,
            temperature: 1.0,
            continuous_targets: vec![-0.5, 0.0, 0.5],
        }
    }
}

fn binary_mean(spec: &LabelSpec, target: u8) -> Result<f64> {
    match spec {
        LabelSpec::Binary { m0, m1, .. } => Ok(if target == 1 { *m1 } else { *m0 }),
        LabelSpec::Continuous { .. } => Err(contract(
            "flip targets are only defined for binary attributes",
        )),
    }
}

fn oracle_label(backbone: &SyntheticBackbone, factors: &[f64], attr: usize) -> u8 {
    if factors[attr] > backbone.thresholds()[attr] {
        1
    } else {
        0
    }
}

fn edit_latent_to(
    flow: &NiceFlow,
    backbone: &SyntheticBackbone,
    z: &[f64],
    edits: &[(usize, f64)],
    whitening: Option<&Whitening>,
) -> Result<Vec<f64>> {
    let z_flow = match whitening {
        Some(w) => w.apply(z),
        None => z.to_vec(),
    };
    let (code, _) = flow.inverse(&LatentCode::new(z_flow)?)?;
    let edited = edit_code(&code, edits)?;
    let z_new = flow.forward(&edited)?.into_vec();
    let z_new = match whitening {
        Some(w) => w.invert(&z_new),
        None => z_new,
    };
    let x = backbone.decode(&z_new)?;
    backbone.oracle_factors(&x)
}

/// Flips one attribute to `target` on each held-out latent and returns the
/// fraction whose oracle label afterwards equals the target.
#[allow(clippy::too_many_arguments)]
pub fn flip_accuracy(
    flow: &NiceFlow,
    specs: &[LabelSpec],
    backbone: &SyntheticBackbone,
    eval_latents: &[Vec<f64>],
    attr: usize,
    target: u8,
    n: usize,
    whitening: Option<&Whitening>,
) -> Result<f64> {
    if attr >= specs.len() {
        return Err(contract(format!("attribute {attr} out of range")));
    }
    let n = n.min(eval_latents.len());
    if n == 0 {
        return Err(contract("flip accuracy needs at least one example"));
    }
    let mean = binary_mean(&specs[attr], target)?;
    let hits: Vec<Result<bool>> = eval_latents[..n]
        .par_iter()
        .map(|z| {
            let factors = edit_latent_to(flow, backbone, z, &[(attr, mean)], whitening)?;
            Ok(oracle_label(backbone, &factors, attr) == target)
        })
        .collect();
    let mut count = 0usize;
    for hit in hits {
        if hit? {
            count += 1;
        }
    }
    Ok(count as f64 / n as f64)
}

/// Control measurement: re-encode and decode with the attribute set to its
/// current value; counts how often the label survives.
pub fn keep_accuracy(
    flow: &NiceFlow,
    specs: &[LabelSpec],
    backbone: &SyntheticBackbone,
    eval_latents: &[Vec<f64>],
    attr: usize,
    n: usize,
    whitening: Option<&Whitening>,
) -> Result<f64> {
    let n = n.min(eval_latents.len());
    if n == 0 {
        return Err(contract("control needs at least one example"));
    }
    let hits: Vec<Result<bool>> = eval_latents[..n]
        .par_iter()
        .map(|z| {
            let current = oracle_label(backbone, &backbone.latent_to_factors(z), attr);
            let mean = binary_mean(&specs[attr], current)?;
            let factors = edit_latent_to(flow, backbone, z, &[(attr, mean)], whitening)?;
            Ok(oracle_label(backbone, &factors, attr) == current)
        })
        .collect();
    let mut count = 0usize;
    for hit in hits {
        if hit? {
            count += 1;
        }
    }
    Ok(count as f64 / n as f64)
}

/// Success rate of conditional generation: samples conditioned on
/// `attr = target` whose oracle label comes back as the target. This is the
/// generation-side counterpart of [`flip_accuracy`]; the per-class sigma
/// scaling acts on it directly through the sampling kernel width.
pub fn conditional_generation_rate(
    flow: &NiceFlow,
    specs: &[LabelSpec],
    backbone: &SyntheticBackbone,
    attr: usize,
    target: u8,
    options: &EvalOptions,
    whitening: Option<&Whitening>,
) -> Result<f64> {
    if attr >= specs.len() || specs[attr].kind() != LabelKind::Binary {
        return Err(contract(format!(
            "conditional generation rate needs a binary attribute, got {attr}"
        )));
    }
    let mut entries = vec![ConditionEntry::Free; specs.len()];
    entries[attr] = ConditionEntry::Fixed(target as f64);
    let samples = generate(
        flow,
        specs,
        backbone,
        &Condition::new(entries),
        options.n,
        options.sigma_gen,
        options.temperature,
        options.seed,
        whitening,
    )?;
    let mut hits = 0usize;
    for sample in &samples {
        let factors = backbone.oracle_factors(&sample.x)?;
        if oracle_label(backbone, &factors, attr) == target {
            hits += 1;
        }
    }
    Ok(hits as f64 / samples.len() as f64)
}

/// Per-attribute F1 and AUC of requested-vs-oracle labels when every binary
/// attribute is sampled independently of the others.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndependentScores {
    pub f1: Vec<f64>,
    pub auc: Vec<f64>,
    pub mean_f1: f64,
    pub mean_auc: f64,
}

/// Scores requested labels against oracle readings of the generated
/// factors. Shared by the real protocol and its null baselines.
pub fn score_requested_vs_oracle(
    backbone: &SyntheticBackbone,
    requested: &[Vec<u8>],
    factors: &[Vec<f64>],
    attrs: &[usize],
) -> Result<IndependentScores> {
    let mut f1 = Vec::with_capacity(attrs.len());
    let mut auc = Vec::with_capacity(attrs.len());
    for &attr in attrs {
        let truth: Vec<bool> = requested.iter().map(|y| y[attr] == 1).collect();
        let predicted: Vec<bool> = factors
            .iter()
            .map(|t| oracle_label(backbone, t, attr) == 1)
            .collect();
        let scores: Vec<f64> = factors.iter().map(|t| t[attr]).collect();
        f1.push(f1_score(&predicted, &truth));
        auc.push(auc_score(&scores, &truth)?);
    }
    let mean_f1 = f1.iter().sum::<f64>() / f1.len() as f64;
    let mean_auc = auc.iter().sum::<f64>() / auc.len() as f64;
    Ok(IndependentScores {
        f1,
        auc,
        mean_f1,
        mean_auc,
    })
}

/// Draws label vectors with every binary attribute independently Bernoulli
/// at its class proportion, generates conditioned samples, and scores the
/// requested labels against the oracle.
pub fn independent_sampling_scores(
    flow: &NiceFlow,
    specs: &[LabelSpec],
    backbone: &SyntheticBackbone,
    options: &EvalOptions,
    whitening: Option<&Whitening>,
) -> Result<IndependentScores> {
    let binary_attrs: Vec<usize> = specs
        .iter()
        .enumerate()
        .filter(|(_, s)| s.kind() == LabelKind::Binary)
        .map(|(i, _)| i)
        .collect();
    if binary_attrs.is_empty() {
        return Err(contract("independent sampling needs binary attributes"));
    }
    let style_dim = flow.dims() - flow.k_labels();

    let results: Vec<Result<(Vec<u8>, Vec<f64>)>> = (0..options.n)
        .into_par_iter()
        .map(|j| {
            let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
            rng.set_stream(j as u64);
            let mut requested = vec![0u8; specs.len()];
            let mut labels = Vec::with_capacity(specs.len());
            for (i, spec) in specs.iter().enumerate() {
                match spec {
                    LabelSpec::Binary { p1, .. } => {
                        let y = if rng.gen_range(0.0..1.0) < *p1 {
                            1u8
                        } else {
                            0u8
                        };
                        requested[i] = y;
                        labels.push(sample_label(
                            Some(y as f64),
                            spec,
                            options.sigma_gen,
                            &mut rng,
                        )?);
                    }
                    LabelSpec::Continuous { .. } => {
                        labels.push(sample_label(None, spec, options.sigma_gen, &mut rng)?);
                    }
                }
            }
            let style: Vec<f64> = (0..style_dim)
                .map(|_| options.temperature * rng.sample::<f64, _>(StandardNormal))
                .collect();
            let code = FactorizedCode::new(labels, style)?;
            let z = flow.forward(&code)?.into_vec();
            let z = match whitening {
                Some(w) => w.invert(&z),
                None => z,
            };
            let x = backbone.decode(&z)?;
            let factors = backbone.oracle_factors(&x)?;
            Ok((requested, factors))
        })
        .collect();

    let mut requested = Vec::with_capacity(options.n);
    let mut factors = Vec::with_capacity(options.n);
    for r in results {
        let (y, t) = r?;
        requested.push(y);
        factors.push(t);
    }
    score_requested_vs_oracle(backbone, &requested, &factors, &binary_attrs)
}

/// Summary of one conditioning target for a continuous attribute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftSummary {
    pub target: f64,
    pub mean: f64,
    pub std: f64,
    pub histogram: Histogram,
}

/// Conditions a continuous attribute on each target value and summarizes the
/// oracle-factor distribution of the generated samples.
pub fn distribution_shift(
    flow: &NiceFlow,
    specs: &[LabelSpec],
    backbone: &SyntheticBackbone,
    attr: usize,
    options: &EvalOptions,
    whitening: Option<&Whitening>,
) -> Result<Vec<ShiftSummary>> {
    if attr >= specs.len() || specs[attr].kind() != LabelKind::Continuous {
        return Err(contract(format!(
            "distribution shift needs a continuous attribute, got {attr}"
        )));
    }
    let mut summaries = Vec::with_capacity(options.continuous_targets.len());
    for (idx, &target) in options.continuous_targets.iter().enumerate() {
        let mut entries = vec![ConditionEntry::Free; specs.len()];
        entries[attr] = ConditionEntry::Fixed(target);
        let seed = options.seed.wrapping_add(idx as u64 + 1);
        let samples = generate(
            flow,
            specs,
            backbone,
            &Condition::new(entries),
            options.n,
            options.sigma_gen,
            options.temperature,
            seed,
            whitening,
        )?;
        let values: Vec<f64> = samples
            .iter()
            .map(|s| backbone.oracle_factors(&s.x).map(|t| t[attr]))
            .collect::<Result<Vec<f64>>>()?;
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / values.len() as f64;
        summaries.push(ShiftSummary {
            target,
            mean,
            std: var.sqrt(),
            histogram: Histogram::collect(&values),
        });
    }
    Ok(summaries)
}

/// Entry `(i, j)`: mean absolute change of ground-truth factor `j` when
/// attribute `i` is flipped to its opposite oracle label. A disentangled
/// flow shows a strong diagonal and a quiet off-diagonal.
pub fn leakage_matrix(
    flow: &NiceFlow,
    specs: &[LabelSpec],
    backbone: &SyntheticBackbone,
    eval_latents: &[Vec<f64>],
    n: usize,
    whitening: Option<&Whitening>,
) -> Result<Vec<Vec<f64>>> {
    let k = specs.len();
    let n = n.min(eval_latents.len());
    if n == 0 {
        return Err(contract("leakage needs at least one example"));
    }
    let mut matrix = vec![vec![0.0; k]; k];
    for (i, row) in matrix.iter_mut().enumerate() {
        if specs[i].kind() != LabelKind::Binary {
            continue;
        }
        let deltas: Vec<Result<Vec<f64>>> = eval_latents[..n]
            .par_iter()
            .map(|z| {
                let before = backbone.latent_to_factors(z);
                let current = oracle_label(backbone, &before, i);
                let mean = binary_mean(&specs[i], 1 - current)?;
                let after = edit_latent_to(flow, backbone, z, &[(i, mean)], whitening)?;
                Ok(before
                    .iter()
                    .zip(&after)
                    .take(k)
                    .map(|(a, b)| (a - b).abs())
                    .collect())
            })
            .collect();
        for delta in deltas {
            let delta = delta?;
            for (slot, d) in row.iter_mut().zip(&delta) {
                *slot += d;
            }
        }
        for slot in row.iter_mut() {
            *slot /= n as f64;
        }
    }
    Ok(matrix)
}

/// Aggregate report of all protocols, serialized as a stable JSON document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub seed: u64,
    pub n: usize,
    pub sigma_gen: f64,
    /// `flip_accuracy[a] = [rate to label 0, rate to label 1]` per binary
    /// attribute; continuous attributes carry `null`.
    pub flip_accuracy: Vec<Option<[f64; 2]>>,
    pub keep_accuracy: Vec<Option<f64>>,
    /// Conditional-generation success rates, same layout as flip_accuracy.
    pub conditional_generation: Vec<Option<[f64; 2]>>,
    pub independent_sampling: Option<IndependentScores>,
    pub leakage: Vec<Vec<f64>>,
    /// Absent when the task has no binary attributes to flip.
    pub leakage_diag_min: Option<f64>,
    pub leakage_offdiag_max: Option<f64>,
    pub continuous_shift: Vec<(usize, Vec<ShiftSummary>)>,
}

/// Runs every applicable protocol and bundles the results.
pub fn run_full_evaluation(
    flow: &NiceFlow,
    specs: &[LabelSpec],
    backbone: &SyntheticBackbone,
    options: &EvalOptions,
    whitening: Option<&Whitening>,
) -> Result<EvalReport> {
    let eval_latents: Vec<Vec<f64>> = backbone
        .generate(options.n, options.seed.wrapping_add(0x5eed))
        .into_iter()
        .map(|s| s.z)
        .collect();

    let k = specs.len();
    let mut flip = Vec::with_capacity(k);
    let mut keep = Vec::with_capacity(k);
    let mut cond_gen = Vec::with_capacity(k);
    let mut shifts = Vec::new();
    let mut has_binary = false;
    for attr in 0..k {
        match specs[attr].kind() {
            LabelKind::Binary => {
                has_binary = true;
                let to0 = flip_accuracy(
                    flow,
                    specs,
                    backbone,
                    &eval_latents,
                    attr,
                    0,
                    options.n,
                    whitening,
                )?;
                let to1 = flip_accuracy(
                    flow,
                    specs,
                    backbone,
                    &eval_latents,
                    attr,
                    1,
                    options.n,
                    whitening,
                )?;
                flip.push(Some([to0, to1]));
                keep.push(Some(keep_accuracy(
                    flow,
                    specs,
                    backbone,
                    &eval_latents,
                    attr,
                    options.n,
                    whitening,
                )?));
                let gen0 = conditional_generation_rate(
                    flow, specs, backbone, attr, 0, options, whitening,
                )?;
                let gen1 = conditional_generation_rate(
                    flow, specs, backbone, attr, 1, options, whitening,
                )?;
                cond_gen.push(Some([gen0, gen1]));
            }
            LabelKind::Continuous => {
                flip.push(None);
                keep.push(None);
                cond_gen.push(None);
                shifts.push((
                    attr,
                    distribution_shift(flow, specs, backbone, attr, options, whitening)?,
                ));
            }
        }
    }

    let independent = if has_binary {
        Some(independent_sampling_scores(
            flow, specs, backbone, options, whitening,
        )?)
    } else {
        None
    };

    let leakage = leakage_matrix(flow, specs, backbone, &eval_latents, options.n, whitening)?;
    let mut diag_min: Option<f64> = None;
    let mut off_max: Option<f64> = None;
    for (i, row) in leakage.iter().enumerate() {
        if specs[i].kind() != LabelKind::Binary {
            continue;
        }
        for (j, &v) in row.iter().enumerate() {
            if i == j {
                diag_min = Some(diag_min.map_or(v, |m| m.min(v)));
            } else {
                off_max = Some(off_max.map_or(v, |m| m.max(v)));
            }
        }
    }

    Ok(EvalReport {
        schema_version: 1,
        seed: options.seed,
        n: options.n,
        sigma_gen: options.sigma_gen,
        flip_accuracy: flip,
        keep_accuracy: keep,
        conditional_generation: cond_gen,
        independent_sampling: independent,
        leakage,
        leakage_diag_min: diag_min,
        leakage_offdiag_max: off_max,
        continuous_shift: shifts,
    })
}
