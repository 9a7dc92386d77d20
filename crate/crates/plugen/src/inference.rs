//! User-facing capabilities of the trained artifact: conditional generation
//! of new samples, attribute manipulation of existing examples, and
//! attribute-intensity interpolation.
//!
//! No labels are ever required on the input side of a manipulation: the
//! attribute values of an example are read straight off its factorized code.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::backbone::{latent_recover, Backbone, RecoverConfig};
use crate::error::{contract, Result};
use crate::flow::{edit_code, FactorizedCode, NiceFlow};
use crate::priors::{sample_label, LabelKind, LabelSpec};
use crate::training::Whitening;

/// Per-attribute conditioning entry: fix a label value, or sample the
/// coordinate from its marginal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ConditionEntry {
    Fixed(f64),
    Free,
}

/// A full conditioning vector, one entry per labeled attribute.
#[derive(Debug, Clone, PartialEq)]
pub struct Condition {
    entries: Vec<ConditionEntry>,
}

impl Condition {
    pub fn new(entries: Vec<ConditionEntry>) -> Self {
        Self { entries }
    }

    pub fn all_free(k: usize) -> Self {
        Self {
            entries: vec![ConditionEntry::Free; k],
        }
    }

    pub fn entries(&self) -> &[ConditionEntry] {
        &self.entries
    }

    /// Checks length and kind consistency against the label specs. Fixed binary
    /// entries must be 0 or 1; fixed continuous entries outside [-1, 1] are
    /// legal extrapolations and reported as warnings.
    pub fn validate(&self, specs: &[LabelSpec]) -> Result<Vec<String>> {
        if self.entries.len() != specs.len() {
            return Err(contract(format!(
                "condition has {} entries for {} attributes",
                self.entries.len(),
                specs.len()
            )));
        }
        let mut warnings = Vec::new();
        for (i, (entry, spec)) in self.entries.iter().zip(specs).enumerate() {
            if let ConditionEntry::Fixed(value) = entry {
                if !value.is_finite() {
                    return Err(contract(format!("condition {i} is not finite")));
                }
                match spec.kind() {
                    LabelKind::Binary => {
                        if *value != 0.0 && *value != 1.0 {
                            return Err(contract(format!(
                                "condition {i} must be 0 or 1 for a binary attribute, got {value}"
                            )));
                        }
                    }
                    LabelKind::Continuous => {
                        if !(-1.0..=1.0).contains(value) {
                            warnings.push(format!(
                                "condition {i} extrapolates outside [-1, 1]: {value}"
                            ));
                        }
                    }
                }
            }
        }
        Ok(warnings)
    }
}

/// One conditionally generated sample.
#[derive(Debug, Clone)]
pub struct GeneratedSample {
    pub x: Vec<f64>,
    pub z: Vec<f64>,
    pub code: FactorizedCode,
}

/// Draws `n` samples under the condition: each fixed label coordinate comes
/// from its conditional component at `sigma_gen`, free ones from the
/// marginal, and the style block from `N(0, temperature^2 I)`. Every sample
/// uses its own derived stream, so results are deterministic per seed and
/// independent of evaluation order.
#[allow(clippy::too_many_arguments)]
pub fn generate<B: Backbone + Sync>(
    flow: &NiceFlow,
    specs: &[LabelSpec],
    backbone: &B,
    condition: &Condition,
    n: usize,
    sigma_gen: f64,
    temperature: f64,
    seed: u64,
    whitening: Option<&Whitening>,
) -> Result<Vec<GeneratedSample>> {
    condition.validate(specs)?;
    check_flow_backbone(flow, backbone)?;
    if specs.len() != flow.k_labels() {
        return Err(contract(format!(
            "{} specs for a flow with {} label coordinates",
            specs.len(),
            flow.k_labels()
        )));
    }
    if !(sigma_gen > 0.0) {
        return Err(contract("sigma_gen must be positive"));
    }
    if !(temperature >= 0.0) {
        return Err(contract("temperature must be non-negative"));
    }

    let style_dim = flow.dims() - flow.k_labels();
    (0..n)
        .into_par_iter()
        .map(|j| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(j as u64);
            let mut labels = Vec::with_capacity(specs.len());
            for (entry, spec) in condition.entries().iter().zip(specs) {
                let value = match entry {
                    ConditionEntry::Fixed(y) => sample_label(Some(*y), spec, sigma_gen, &mut rng)?,
                    ConditionEntry::Free => sample_label(None, spec, sigma_gen, &mut rng)?,
                };
                labels.push(value);
            }
            let style: Vec<f64> = (0..style_dim)
                .map(|_| temperature * rng.sample::<f64, _>(StandardNormal))
                .collect();
            let code = FactorizedCode::new(labels, style)?;
            let z = flow.forward(&code)?.into_vec();
            let z_backbone = match whitening {
                Some(w) => w.invert(&z),
                None => z,
            };
            let x = backbone.decode(&z_backbone)?;
            Ok(GeneratedSample {
                x,
                z: z_backbone,
                code,
            })
        })
        .collect()
}

/// How the example enters a manipulation: as a latent code, or as an
/// observation that still needs one.
#[derive(Debug, Clone, Copy)]
pub enum ManipulateInput<'a> {
    Latent(&'a [f64]),
    Observation(&'a [f64]),
}

/// Result of an attribute manipulation.
#[derive(Debug, Clone)]
pub struct Manipulation {
    pub x: Vec<f64>,
    pub z: Vec<f64>,
    pub before: FactorizedCode,
    pub after: FactorizedCode,
    pub warnings: Vec<String>,
}

/// Options for obtaining and re-decoding latent codes during manipulation.
#[derive(Debug, Clone)]
pub struct ManipulateOptions {
    /// Use the backbone encoder for observations; otherwise run
    /// gradient-descent latent recovery against the decoder.
    pub use_encoder: bool,
    pub recover: RecoverConfig,
}

impl Default for ManipulateOptions {
    fn default() -> Self {
        Self {
            use_encoder: true,
            recover: RecoverConfig::default(),
        }
    }
}

/// Edits label coordinates of an existing example and decodes the result.
/// Edits are absolute factorized-space values applied on top of whatever the
/// example already encodes; no label input is required.
pub fn manipulate<B: Backbone>(
    flow: &NiceFlow,
    backbone: &B,
    input: ManipulateInput<'_>,
    edits: &[(usize, f64)],
    options: &ManipulateOptions,
    whitening: Option<&Whitening>,
) -> Result<Manipulation> {
    check_flow_backbone(flow, backbone)?;
    let z_backbone: Vec<f64> = match input {
        ManipulateInput::Latent(z) => z.to_vec(),
        ManipulateInput::Observation(x) => {
            if options.use_encoder {
                backbone.encode(x)?
            } else {
                latent_recover(backbone, x, &options.recover)?
            }
        }
    };
    let z_flow = match whitening {
        Some(w) => w.apply(&z_backbone),
        None => z_backbone,
    };
    let (before, _) = flow.inverse(&crate::flow::LatentCode::new(z_flow)?)?;

    let mut warnings = Vec::new();
    for &(idx, value) in edits {
        if (-1.0..=1.0).contains(&value) {
            continue;
        }
        warnings.push(format!(
            "edit on attribute {idx} targets {value}, outside [-1, 1]"
        ));
    }

    let after = edit_code(&before, edits)?;
    let z_new = flow.forward(&after)?.into_vec();
    let z_new_backbone = match whitening {
        Some(w) => w.invert(&z_new),
        None => z_new,
    };
    let x = backbone.decode(&z_new_backbone)?;
    Ok(Manipulation {
        x,
        z: z_new_backbone,
        before,
        after,
        warnings,
    })
}

/// One step of an attribute interpolation.
#[derive(Debug, Clone)]
pub struct InterpolationPoint {
    pub target: f64,
    pub x: Vec<f64>,
    pub z: Vec<f64>,
}

/// Sets one label coordinate to `steps` evenly spaced values between `from`
/// and `to`, holding every other coordinate fixed, and decodes each point.
#[allow(clippy::too_many_arguments)]
pub fn interpolate<B: Backbone>(
    flow: &NiceFlow,
    backbone: &B,
    z: &[f64],
    attr: usize,
    from: f64,
    to: f64,
    steps: usize,
    whitening: Option<&Whitening>,
) -> Result<Vec<InterpolationPoint>> {
    if steps < 2 {
        return Err(contract("interpolation needs at least 2 steps"));
    }
    check_flow_backbone(flow, backbone)?;
    let z_flow = match whitening {
        Some(w) => w.apply(z),
        None => z.to_vec(),
    };
    let (base, _) = flow.inverse(&crate::flow::LatentCode::new(z_flow)?)?;
    let mut points = Vec::with_capacity(steps);
    for i in 0..steps {
        let fraction = i as f64 / (steps - 1) as f64;
        let target = from + (to - from) * fraction;
        let code = edit_code(&base, &[(attr, target)])?;
        let z_new = flow.forward(&code)?.into_vec();
        let z_new_backbone = match whitening {
            Some(w) => w.invert(&z_new),
            None => z_new,
        };
        let x = backbone.decode(&z_new_backbone)?;
        points.push(InterpolationPoint {
            target,
            x,
            z: z_new_backbone,
        });
    }
    Ok(points)
}

fn check_flow_backbone<B: Backbone>(flow: &NiceFlow, backbone: &B) -> Result<()> {
    if flow.dims() != backbone.latent_dim() {
        return Err(crate::error::Error::Dimension(format!(
            "flow dimension {} does not match backbone latent dimension {}",
            flow.dims(),
            backbone.latent_dim()
        )));
    }
    Ok(())
}
