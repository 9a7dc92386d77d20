//! One-dimensional conditional densities over label variables, the
//! standard-normal style prior, and the annealing schedule for the component
//! standard deviation.
//!
//! Binary attributes are modeled by a two-component Gaussian mixture with
//! means at -1 and +1. Class imbalance is handled by scaling each component
//! as `sigma_y = sigma * sqrt(2 * p_y)`, which weights the per-class squared
//! error by `1 / (2 * p_y)` and keeps the expected weighting factor at one.
//! Continuous attributes use a Gaussian kernel centered on the label value.
//! All densities keep their normalization constants so they integrate to one.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};

pub(crate) const LN_2PI: f64 = 1.8378770664093453;

/// Full Gaussian log-density, normalization constant included.
pub fn gaussian_logpdf(x: f64, mean: f64, sigma: f64) -> f64 {
    let d = (x - mean) / sigma;
    -0.5 * LN_2PI - sigma.ln() - 0.5 * d * d
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelKind {
    Binary,
    Continuous,
}

fn default_m0() -> f64 {
    -1.0
}

fn default_m1() -> f64 {
    1.0
}

fn default_true() -> bool {
    true
}

/// Per-attribute conditional density description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LabelSpec {
    Binary {
        #[serde(default = "default_m0")]
        m0: f64,
        #[serde(default = "default_m1")]
        m1: f64,
        p0: f64,
        p1: f64,
        /// When false, both components use the raw scheduled sigma. Exposed
        /// as an ablation switch for the imbalance handling.
        #[serde(default = "default_true")]
        scale_by_proportion: bool,
    },
    Continuous {
        /// Kernel width used when no schedule value is in force.
        sigma_base: f64,
    },
}

impl LabelSpec {
    pub fn balanced_binary() -> Self {
        LabelSpec::Binary {
            m0: -1.0,
            m1: 1.0,
            p0: 0.5,
            p1: 0.5,
            scale_by_proportion: true,
        }
    }

    pub fn binary_with_rate(p1: f64) -> Result<Self> {
        let spec = LabelSpec::Binary {
            m0: -1.0,
            m1: 1.0,
            p0: 1.0 - p1,
            p1,
            scale_by_proportion: true,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn continuous(sigma_base: f64) -> Result<Self> {
        let spec = LabelSpec::Continuous { sigma_base };
        spec.validate()?;
        Ok(spec)
    }

    pub fn kind(&self) -> LabelKind {
        match self {
            LabelSpec::Binary { .. } => LabelKind::Binary,
            LabelSpec::Continuous { .. } => LabelKind::Continuous,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            LabelSpec::Binary { m0, m1, p0, p1, .. } => {
                if !(m0 < m1) {
                    return Err(contract("binary spec needs m0 < m1"));
                }
                if !(0.0..=1.0).contains(&p0) || !(0.0..=1.0).contains(&p1) {
                    return Err(contract("class proportions must lie in [0, 1]"));
                }
                if (p0 + p1 - 1.0).abs() > 1e-12 {
                    return Err(contract("class proportions must sum to 1"));
                }
            }
            LabelSpec::Continuous { sigma_base } => {
                if !(sigma_base > 0.0) {
                    return Err(contract("continuous spec needs sigma_base > 0"));
                }
            }
        }
        Ok(())
    }
}

/// Per-class component standard deviation: `sigma_t * sqrt(2 * p_y)`, or the
/// raw `sigma_t` when proportion scaling is disabled.
pub fn class_sigma(spec: &LabelSpec, y: u8, sigma_t: f64) -> Result<f64> {
    if !(sigma_t > 0.0) {
        return Err(contract("sigma_t must be positive"));
    }
    match *spec {
        LabelSpec::Binary {
            p0,
            p1,
            scale_by_proportion,
            ..
        } => {
            let p = match y {
                0 => p0,
                1 => p1,
                _ => return Err(contract("binary label must be 0 or 1")),
            };
            Ok(if scale_by_proportion {
                sigma_t * (2.0 * p).sqrt()
            } else {
                sigma_t
            })
        }
        LabelSpec::Continuous { .. } => Err(contract(
            "class_sigma is only defined for binary attributes",
        )),
    }
}

/// The per-class weighting factor `1 / (2 p)` implied by the sigma scaling.
pub fn class_weight(p: f64) -> f64 {
    1.0 / (2.0 * p)
}

/// Expectation of the weighting factor over the label distribution. Written
/// as `p / (2p)` per class, which IEEE evaluates to exactly 0.5, so the sum
/// is exactly 1 for every p in (0, 1).
pub fn expected_weighting_factor(p1: f64) -> f64 {
    let p0 = 1.0 - p1;
    p1 / (2.0 * p1) + p0 / (2.0 * p0)
}

/// Log-density of a label coordinate under the class-`y` component.
pub fn binary_cond_logpdf(c: f64, y: u8, spec: &LabelSpec, sigma_t: f64) -> Result<f64> {
    let (m0, m1) = match *spec {
        LabelSpec::Binary { m0, m1, .. } => (m0, m1),
        LabelSpec::Continuous { .. } => {
            return Err(contract("binary_cond_logpdf needs a binary spec"))
        }
    };
    let sigma = class_sigma(spec, y, sigma_t)?;
    if !(sigma > 0.0) {
        return Err(contract("class sigma degenerated to zero"));
    }
    let mean = if y == 1 { m1 } else { m0 };
    Ok(gaussian_logpdf(c, mean, sigma))
}

/// Log-density of a continuous label coordinate: a Gaussian kernel centered
/// on the label value.
pub fn continuous_cond_logpdf(c: f64, y: f64, sigma: f64) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(contract("sigma must be positive"));
    }
    Ok(gaussian_logpdf(c, y, sigma))
}

/// Log of the proportion-weighted two-component mixture, used when a binary
/// label is missing. Components with zero proportion are skipped.
pub fn marginal_logpdf(c: f64, spec: &LabelSpec, sigma_t: f64) -> Result<f64> {
    Ok(marginal_logpdf_grad(c, spec, sigma_t)?.0)
}

/// Marginal log-density together with its derivative in `c`.
pub(crate) fn marginal_logpdf_grad(c: f64, spec: &LabelSpec, sigma_t: f64) -> Result<(f64, f64)> {
    let (m0, m1, p0, p1) = match *spec {
        LabelSpec::Binary { m0, m1, p0, p1, .. } => (m0, m1, p0, p1),
        LabelSpec::Continuous { .. } => {
            return Err(contract("marginal_logpdf needs a binary spec"))
        }
    };
    // log-sum-exp over the active components.
    let mut terms: Vec<(f64, f64)> = Vec::with_capacity(2);
    for (p, y) in [(p0, 0u8), (p1, 1u8)] {
        if p > 0.0 {
            let sigma = class_sigma(spec, y, sigma_t)?;
            let mean = if y == 1 { m1 } else { m0 };
            let log_term = p.ln() + gaussian_logpdf(c, mean, sigma);
            let dlog_dc = -(c - mean) / (sigma * sigma);
            terms.push((log_term, dlog_dc));
        }
    }
    let max = terms.iter().map(|t| t.0).fold(f64::NEG_INFINITY, f64::max);
    let total: f64 = terms.iter().map(|t| (t.0 - max).exp()).sum();
    let logpdf = max + total.ln();
    let grad = terms
        .iter()
        .map(|&(log_term, d)| (log_term - max).exp() / total * d)
        .sum();
    Ok((logpdf, grad))
}

/// Standard-normal log-density of the style vector.
pub fn style_logpdf(s: &[f64]) -> f64 {
    s.iter().map(|&v| gaussian_logpdf(v, 0.0, 1.0)).sum()
}

/// Geometric decay of the component standard deviation across epochs,
/// bounded below by a floor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SigmaSchedule {
    pub sigma0: f64,
    pub gamma: f64,
    pub sigma_min: f64,
}

impl SigmaSchedule {
    pub fn new(sigma0: f64, gamma: f64, sigma_min: f64) -> Result<Self> {
        let schedule = Self {
            sigma0,
            gamma,
            sigma_min,
        };
        schedule.validate()?;
        Ok(schedule)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma0 > 0.0) || !(self.sigma_min > 0.0) {
            return Err(contract("schedule sigmas must be positive"));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(contract("gamma must lie in (0, 1]"));
        }
        Ok(())
    }

    /// `max(sigma0 * gamma^epoch, sigma_min)`.
    pub fn sigma_at(&self, epoch: usize) -> f64 {
        (self.sigma0 * self.gamma.powi(epoch as i32)).max(self.sigma_min)
    }
}

/// Draws a label coordinate from the conditional matching `label`, or from
/// the marginal mixture when the label is missing.
pub fn sample_label<R: Rng + ?Sized>(
    label: Option<f64>,
    spec: &LabelSpec,
    sigma_t: f64,
    rng: &mut R,
) -> Result<f64> {
    match (spec, label) {
        (LabelSpec::Binary { m0, m1, .. }, Some(y)) => {
            let y = binary_label_bit(y)?;
            let sigma = class_sigma(spec, y, sigma_t)?;
            let mean = if y == 1 { *m1 } else { *m0 };
            let n: f64 = rng.sample(StandardNormal);
            Ok(mean + sigma * n)
        }
        (LabelSpec::Binary { m0, m1, p0, p1, .. }, None) => {
            // Degenerate mixtures skip the component draw so they behave
            // exactly like the corresponding fixed label.
            let y = if *p0 == 0.0 {
                1u8
            } else if *p1 == 0.0 || rng.gen_range(0.0..1.0) < *p0 {
                0u8
            } else {
                1u8
            };
            let sigma = class_sigma(spec, y, sigma_t)?;
            let mean = if y == 1 { *m1 } else { *m0 };
            let n: f64 = rng.sample(StandardNormal);
            Ok(mean + sigma * n)
        }
        (LabelSpec::Continuous { .. }, Some(y)) => {
            if !(sigma_t > 0.0) {
                return Err(contract("sigma_t must be positive"));
            }
            let n: f64 = rng.sample(StandardNormal);
            Ok(y + sigma_t * n)
        }
        // No label information for a continuous attribute: fall back to the
        // standard-normal prior, the same treatment style variables get.
        (LabelSpec::Continuous { .. }, None) => Ok(rng.sample(StandardNormal)),
    }
}

/// Reads a binary label off a factorized coordinate by nearest component
/// mean. Exact ties go to class 0.
pub fn classify_label(c: f64, spec: &LabelSpec) -> Result<u8> {
    match *spec {
        LabelSpec::Binary { m0, m1, .. } => Ok(if (c - m1).abs() < (c - m0).abs() {
            1
        } else {
            0
        }),
        LabelSpec::Continuous { .. } => Err(contract(
            "classify_label is only defined for binary attributes",
        )),
    }
}

pub(crate) fn binary_label_bit(y: f64) -> Result<u8> {
    if y == 0.0 {
        Ok(0)
    } else if y == 1.0 {
        Ok(1)
    } else {
        Err(contract(format!("binary label must be 0 or 1, got {y}")))
    }
}

/// Log-density of one label coordinate and its derivative in `c`, dispatching
/// on kind and missingness. This is the per-attribute term of the training
/// loss.
pub fn label_logpdf_grad(
    spec: &LabelSpec,
    label: Option<f64>,
    c: f64,
    sigma_t: f64,
) -> Result<(f64, f64)> {
    match (spec, label) {
        (LabelSpec::Binary { m0, m1, .. }, Some(y)) => {
            let bit = binary_label_bit(y)?;
            let sigma = class_sigma(spec, bit, sigma_t)?;
            let mean = if bit == 1 { *m1 } else { *m0 };
            Ok((
                gaussian_logpdf(c, mean, sigma),
                -(c - mean) / (sigma * sigma),
            ))
        }
        (LabelSpec::Binary { .. }, None) => marginal_logpdf_grad(c, spec, sigma_t),
        (LabelSpec::Continuous { .. }, Some(y)) => {
            if !(sigma_t > 0.0) {
                return Err(contract("sigma_t must be positive"));
            }
            Ok((
                gaussian_logpdf(c, y, sigma_t),
                -(c - y) / (sigma_t * sigma_t),
            ))
        }
        (LabelSpec::Continuous { .. }, None) => Ok((gaussian_logpdf(c, 0.0, 1.0), -c)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn trapezoid_mass(logpdf: impl Fn(f64) -> f64) -> f64 {
        let (lo, hi, step): (f64, f64, f64) = (-12.0, 12.0, 1e-3);
        let n = ((hi - lo) / step).round() as usize;
        let mut mass = 0.0;
        let mut prev = logpdf(lo).exp();
        for i in 1..=n {
            let x = lo + step * i as f64;
            let cur = logpdf(x).exp();
            mass += 0.5 * (prev + cur) * step;
            prev = cur;
        }
        mass
    }

    #[test]
    fn class_sigma_balanced_reduces_to_sigma() {
        let spec = LabelSpec::balanced_binary();
        assert_eq!(class_sigma(&spec, 0, 0.4).unwrap(), 0.4);
        assert_eq!(class_sigma(&spec, 1, 0.4).unwrap(), 0.4);
    }

    #[test]
    fn class_sigma_imbalanced() {
        let spec = LabelSpec::binary_with_rate(0.065).unwrap();
        let sigma1 = class_sigma(&spec, 1, 0.7).unwrap();
        assert!((sigma1 - 0.7 * 0.13_f64.sqrt()).abs() < 1e-15);
        assert!((sigma1 - 0.2524).abs() < 1e-4);
    }

    #[test]
    fn class_sigma_rejects_continuous_spec() {
        let spec = LabelSpec::continuous(0.5).unwrap();
        assert!(class_sigma(&spec, 0, 0.4).is_err());
    }

    #[test]
    fn balanced_weight_is_unity() {
        assert_eq!(class_weight(0.5), 1.0);
    }

    #[test]
    fn weighting_factor_expectation_is_exactly_one() {
        for p1 in [0.05, 0.1, 0.3, 0.5, 0.065, 0.9] {
            assert_eq!(expected_weighting_factor(p1), 1.0, "p1 = {p1}");
        }
    }

    #[test]
    fn binary_logpdf_at_mode_of_unit_gaussian() {
        let spec = LabelSpec::balanced_binary();
        let v = binary_cond_logpdf(1.0, 1, &spec, 1.0).unwrap();
        assert!((v - (-0.9189385332046727)).abs() < 1e-12);
    }

    #[test]
    fn binary_logpdf_closed_form() {
        let spec = LabelSpec::balanced_binary();
        let v = binary_cond_logpdf(0.0, 0, &spec, 0.5).unwrap();
        let expected = -0.5 * (2.0 * std::f64::consts::PI * 0.25).ln() - 1.0 / (2.0 * 0.25);
        assert!((v - expected).abs() < 1e-12);
        assert!((v - (-2.2258)).abs() < 1e-4);
    }

    #[test]
    fn binary_logpdf_prefers_nearest_mean() {
        let spec = LabelSpec::balanced_binary();
        let near = binary_cond_logpdf(1.0, 1, &spec, 0.7).unwrap();
        let far = binary_cond_logpdf(1.0, 0, &spec, 0.7).unwrap();
        assert!(near > far);
    }

    #[test]
    fn continuous_logpdf_mode_and_offset() {
        let sigma = 0.4;
        let mode = continuous_cond_logpdf(0.2, 0.2, sigma).unwrap();
        assert!((mode - (-0.5 * (2.0 * std::f64::consts::PI * sigma * sigma).ln())).abs() < 1e-12);
        let off = continuous_cond_logpdf(0.2 + sigma, 0.2, sigma).unwrap();
        assert!((off - (mode - 0.5)).abs() < 1e-12);
    }

    #[test]
    fn continuous_logpdf_independent_evaluation() {
        let v = continuous_cond_logpdf(0.2, -0.3, 0.25).unwrap();
        // Independent straight-line Gaussian evaluation.
        let expected =
            -0.5 * (2.0 * std::f64::consts::PI * 0.0625).ln() - (0.5_f64 * 0.5) / (2.0 * 0.0625);
        assert!((v - expected).abs() < 1e-12);
    }

    #[test]
    fn continuous_logpdf_rejects_bad_sigma() {
        assert!(continuous_cond_logpdf(0.0, 0.0, 0.0).is_err());
        assert!(continuous_cond_logpdf(0.0, 0.0, -1.0).is_err());
    }

    #[test]
    fn marginal_degenerate_collapses_to_conditional() {
        let spec = LabelSpec::Binary {
            m0: -1.0,
            m1: 1.0,
            p0: 1.0,
            p1: 0.0,
            scale_by_proportion: true,
        };
        for c in [-1.5, 0.0, 0.7] {
            let marginal = marginal_logpdf(c, &spec, 0.6).unwrap();
            let cond = binary_cond_logpdf(c, 0, &spec, 0.6).unwrap();
            assert!((marginal - cond).abs() < 1e-12);
        }
    }

    #[test]
    fn marginal_is_symmetric_for_balanced_spec() {
        let spec = LabelSpec::balanced_binary();
        for c in [0.1, 0.9, 2.3] {
            let plus = marginal_logpdf(c, &spec, 0.5).unwrap();
            let minus = marginal_logpdf(-c, &spec, 0.5).unwrap();
            assert!((plus - minus).abs() < 1e-12);
        }
    }

    #[test]
    fn marginal_matches_direct_summation() {
        let spec = LabelSpec::binary_with_rate(0.3).unwrap();
        let sigma_t = 0.5;
        let c = 0.0;
        // Direct two-term mixture evaluation, no log-sum-exp.
        let s0 = sigma_t * (2.0 * 0.7_f64).sqrt();
        let s1 = sigma_t * (2.0 * 0.3_f64).sqrt();
        let direct = (0.7 * gaussian_logpdf(c, -1.0, s0).exp()
            + 0.3 * gaussian_logpdf(c, 1.0, s1).exp())
        .ln();
        let v = marginal_logpdf(c, &spec, sigma_t).unwrap();
        assert!((v - direct).abs() < 1e-12);
    }

    #[test]
    fn style_logpdf_values() {
        assert!((style_logpdf(&[0.0]) - (-0.9189385332046727)).abs() < 1e-12);
        let d = 7;
        let zeros = vec![0.0; d];
        assert!((style_logpdf(&zeros) - (-0.9189385332046727 * d as f64)).abs() < 1e-10);

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s: Vec<f64> = (0..5).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let per_coord: f64 = s.iter().map(|&v| gaussian_logpdf(v, 0.0, 1.0)).sum();
        assert!((style_logpdf(&s) - per_coord).abs() < 1e-12);
    }

    #[test]
    fn schedule_start_and_decay() {
        let s = SigmaSchedule::new(0.4, 0.999, 0.05).unwrap();
        assert_eq!(s.sigma_at(0), 0.4);
        let chem = SigmaSchedule::new(1.0, 0.9, 0.05).unwrap();
        assert!((chem.sigma_at(10) - 0.34867844).abs() < 1e-7);
        let flat = SigmaSchedule::new(0.7, 1.0, 0.05).unwrap();
        assert_eq!(flat.sigma_at(123), 0.7);
    }

    #[test]
    fn schedule_is_monotone_and_floored() {
        let s = SigmaSchedule::new(0.7, 0.9, 0.05).unwrap();
        let mut prev = f64::INFINITY;
        for epoch in 0..200 {
            let v = s.sigma_at(epoch);
            assert!(v <= prev && v >= s.sigma_min);
            prev = v;
        }
        assert_eq!(s.sigma_at(1000), 0.05);
    }

    #[test]
    fn densities_are_normalized() {
        let balanced = LabelSpec::balanced_binary();
        let skewed = LabelSpec::binary_with_rate(0.1).unwrap();
        let skewed2 = skewed.clone();
        let cases: Vec<Box<dyn Fn(f64) -> f64>> = vec![
            Box::new(move |c| binary_cond_logpdf(c, 0, &balanced, 0.7).unwrap()),
            Box::new(move |c| binary_cond_logpdf(c, 1, &skewed, 0.4).unwrap()),
            Box::new(move |c| continuous_cond_logpdf(c, 0.3, 0.25).unwrap()),
            Box::new(move |c| marginal_logpdf(c, &skewed2, 0.5).unwrap()),
            Box::new(|c| style_logpdf(&[c])),
        ];
        for (i, logpdf) in cases.iter().enumerate() {
            let mass = trapezoid_mass(logpdf);
            assert!(
                (mass - 1.0).abs() <= 1e-3,
                "density {i} integrates to {mass}"
            );
        }
    }

    #[test]
    fn sampling_concentrates_at_component_mean() {
        let spec = LabelSpec::balanced_binary();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let n = 10_000;
        let sigma_t = 1e-3;
        let mean: f64 = (0..n)
            .map(|_| sample_label(Some(1.0), &spec, sigma_t, &mut rng).unwrap())
            .sum::<f64>()
            / n as f64;
        assert!((mean - 1.0).abs() < 3.0 * sigma_t / (n as f64).sqrt() + 1e-6);
    }

    #[test]
    fn sampling_classes_are_symmetric_about_zero() {
        let spec = LabelSpec::balanced_binary();
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let n = 20_000;
        let mean = |y: f64, rng: &mut ChaCha8Rng| -> f64 {
            (0..n)
                .map(|_| sample_label(Some(y), &spec, 0.3, rng).unwrap())
                .sum::<f64>()
                / n as f64
        };
        let m1 = mean(1.0, &mut rng);
        let m0 = mean(0.0, &mut rng);
        assert!((m1 + m0).abs() < 0.02, "means {m1} and {m0}");
    }

    #[test]
    fn missing_with_degenerate_mixture_matches_fixed_label() {
        let spec = LabelSpec::Binary {
            m0: -1.0,
            m1: 1.0,
            p0: 0.0,
            p1: 1.0,
            scale_by_proportion: false,
        };
        let mut a = ChaCha8Rng::seed_from_u64(33);
        let mut b = ChaCha8Rng::seed_from_u64(33);
        for _ in 0..100 {
            let missing = sample_label(None, &spec, 0.5, &mut a).unwrap();
            let fixed = sample_label(Some(1.0), &spec, 0.5, &mut b).unwrap();
            assert_eq!(missing, fixed);
        }
    }

    #[test]
    fn classify_by_nearest_mean_with_tie_to_zero() {
        let spec = LabelSpec::balanced_binary();
        assert_eq!(classify_label(0.9, &spec).unwrap(), 1);
        assert_eq!(classify_label(-0.9, &spec).unwrap(), 0);
        assert_eq!(classify_label(0.0, &spec).unwrap(), 0);
    }

    #[test]
    fn classify_recovers_sampled_labels_once_sigma_is_small() {
        let spec = LabelSpec::balanced_binary();
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let n = 10_000;
        let mut hits = 0;
        for i in 0..n {
            let y = (i % 2) as f64;
            let c = sample_label(Some(y), &spec, 0.3, &mut rng).unwrap();
            if classify_label(c, &spec).unwrap() as f64 == y {
                hits += 1;
            }
        }
        assert!(
            hits as f64 / n as f64 >= 0.95,
            "hit rate {}",
            hits as f64 / n as f64
        );
    }

    #[test]
    fn label_logpdf_grad_matches_finite_differences() {
        let skewed = LabelSpec::binary_with_rate(0.2).unwrap();
        let continuous = LabelSpec::continuous(0.5).unwrap();
        let cases: Vec<(&LabelSpec, Option<f64>)> = vec![
            (&skewed, Some(0.0)),
            (&skewed, Some(1.0)),
            (&skewed, None),
            (&continuous, Some(-0.3)),
            (&continuous, None),
        ];
        for (spec, label) in cases {
            for c in [-1.3, 0.0, 0.8] {
                let (_, grad) = label_logpdf_grad(spec, label, c, 0.6).unwrap();
                let h = 1e-6;
                let plus = label_logpdf_grad(spec, label, c + h, 0.6).unwrap().0;
                let minus = label_logpdf_grad(spec, label, c - h, 0.6).unwrap().0;
                let numeric = (plus - minus) / (2.0 * h);
                assert!(
                    (grad - numeric).abs() < 1e-6,
                    "grad {grad} vs {numeric} for {spec:?} label {label:?} at c={c}"
                );
            }
        }
    }
}
