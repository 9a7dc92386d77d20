//! Binary checkpoint container, bit-exact by construction:
//!
//! ```text
//! magic "PLGN" | format version (u32 LE) | header length (u32 LE)
//! | UTF-8 JSON architecture header | parameter blob (f32 LE)
//! ```
//!
//! Parameters are stored in deterministic order (couplings in order, per
//! conditioner layer row-major weights then bias, then the log scale) and in
//! single precision, so loading quantizes exactly once and a save/load cycle
//! is idempotent afterwards.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, SyntheticBackbone, ToyAutoencoder};
use crate::error::{Error, Result};
use crate::flow::{CouplingLayer, NiceFlow, ScalingLayer};
use crate::numerics::{DenseLayer, Mlp};
use crate::priors::{LabelKind, LabelSpec};
use crate::training::Whitening;

const MAGIC: &[u8; 4] = b"PLGN";
const FORMAT_VERSION: u32 = 1;

/// JSON architecture header; the `model` tag selects the payload layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", deny_unknown_fields)]
pub enum ArchitectureHeader {
    #[serde(rename = "nice-flow")]
    NiceFlow {
        dims: usize,
        k_labels: usize,
        masks: Vec<Vec<bool>>,
        /// Per coupling, per conditioner layer: `[in_dim, out_dim]`.
        conditioner_layers: Vec<Vec<[usize; 2]>>,
        priors: Vec<LabelSpec>,
        /// Sigma in force at the end of training; generation defaults to it.
        sigma_final: f64,
        whitening: Option<Whitening>,
    },
    #[serde(rename = "autoencoder")]
    Autoencoder {
        observed_dim: usize,
        latent_dim: usize,
        encoder_layers: Vec<[usize; 2]>,
        decoder_layers: Vec<[usize; 2]>,
        trained: bool,
    },
    /// The synthetic backbone is fully derived from its seed, so its
    /// checkpoint is header-only.
    #[serde(rename = "synthetic")]
    Synthetic {
        latent_dim: usize,
        observed_dim: usize,
        kinds: Vec<LabelKind>,
        positive_rates: Vec<f64>,
        seed: u64,
    },
}

fn write_container(path: &Path, header: &ArchitectureHeader, params: &[f64]) -> Result<()> {
    let header_json = serde_json::to_vec(header)?;
    let mut bytes =
        Vec::with_capacity(12 + header_json.len() + params.len() * std::mem::size_of::<f32>());
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&header_json);
    for &p in params {
        bytes.extend_from_slice(&(p as f32).to_le_bytes());
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, bytes)?;
    Ok(())
}

fn read_container(path: &Path) -> Result<(ArchitectureHeader, Vec<f64>)> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let bytes = fs::read(path)?;
    if bytes.len() < 12 || &bytes[0..4] != MAGIC {
        return Err(Error::Schema(format!(
            "{} is not a checkpoint (bad magic)",
            path.display()
        )));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::Schema(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if bytes.len() < 12 + header_len {
        return Err(Error::Schema("truncated checkpoint header".into()));
    }
    let header: ArchitectureHeader = serde_json::from_slice(&bytes[12..12 + header_len])
        .map_err(|e| Error::Schema(format!("checkpoint header: {e}")))?;
    let blob = &bytes[12 + header_len..];
    if blob.len() % 4 != 0 {
        return Err(Error::Schema(
            "parameter blob is not a whole number of f32".into(),
        ));
    }
    let params: Vec<f64> = blob
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Ok((header, params))
}

/// Everything needed to run inference with a trained flow.
#[derive(Debug, Clone)]
pub struct FlowArtifact {
    pub flow: NiceFlow,
    pub specs: Vec<LabelSpec>,
    pub sigma_final: f64,
    pub whitening: Option<Whitening>,
}

pub fn save_flow(
    path: &Path,
    flow: &NiceFlow,
    specs: &[LabelSpec],
    sigma_final: f64,
    whitening: Option<&Whitening>,
) -> Result<()> {
    let header = ArchitectureHeader::NiceFlow {
        dims: flow.dims(),
        k_labels: flow.k_labels(),
        masks: flow.couplings().iter().map(|c| c.mask().to_vec()).collect(),
        conditioner_layers: flow
            .couplings()
            .iter()
            .map(|c| {
                c.conditioner()
                    .layers()
                    .iter()
                    .map(|l| [l.in_dim(), l.out_dim()])
                    .collect()
            })
            .collect(),
        priors: specs.to_vec(),
        sigma_final,
        whitening: whitening.cloned(),
    };
    write_container(path, &header, &flow.params())
}

pub fn load_flow(path: &Path) -> Result<FlowArtifact> {
    let (header, params) = read_container(path)?;
    let ArchitectureHeader::NiceFlow {
        dims,
        k_labels,
        masks,
        conditioner_layers,
        priors,
        sigma_final,
        whitening,
    } = header
    else {
        return Err(Error::Schema(format!(
            "{} does not hold a flow checkpoint",
            path.display()
        )));
    };
    if masks.len() != conditioner_layers.len() {
        return Err(Error::Schema("mask and conditioner counts disagree".into()));
    }
    let mut couplings = Vec::with_capacity(masks.len());
    for (mask, layer_dims) in masks.into_iter().zip(conditioner_layers) {
        let layers = layer_dims
            .iter()
            .map(|&[i, o]| DenseLayer::zeros(i, o))
            .collect::<Result<Vec<_>>>()?;
        couplings.push(CouplingLayer::new(mask, Mlp::new(layers)?)?);
    }
    let mut flow = NiceFlow::from_parts(dims, k_labels, couplings, ScalingLayer::zeros(dims))?;
    if params.len() != flow.param_count() {
        return Err(Error::Schema(format!(
            "parameter blob holds {} values, architecture needs {}",
            params.len(),
            flow.param_count()
        )));
    }
    flow.set_params(&params)?;
    if flow
        .scaling()
        .log_scale()
        .iter()
        .any(|s| !s.is_finite() || s.abs() > crate::flow::LOG_SCALE_LIMIT)
    {
        return Err(Error::Schema(
            "checkpoint scaling parameters exceed the invertibility clamp".into(),
        ));
    }
    for spec in &priors {
        spec.validate()
            .map_err(|e| Error::Schema(format!("checkpoint prior: {e}")))?;
    }
    Ok(FlowArtifact {
        flow,
        specs: priors,
        sigma_final,
        whitening,
    })
}

pub fn save_autoencoder(path: &Path, ae: &ToyAutoencoder) -> Result<()> {
    let header = ArchitectureHeader::Autoencoder {
        observed_dim: ae.encoder().in_dim(),
        latent_dim: ae.encoder().out_dim(),
        encoder_layers: ae
            .encoder()
            .layers()
            .iter()
            .map(|l| [l.in_dim(), l.out_dim()])
            .collect(),
        decoder_layers: ae
            .decoder()
            .layers()
            .iter()
            .map(|l| [l.in_dim(), l.out_dim()])
            .collect(),
        trained: ae.is_trained(),
    };
    write_container(path, &header, &ae.params())
}

pub fn load_autoencoder(path: &Path) -> Result<ToyAutoencoder> {
    let (header, params) = read_container(path)?;
    let ArchitectureHeader::Autoencoder {
        encoder_layers,
        decoder_layers,
        trained,
        ..
    } = header
    else {
        return Err(Error::Schema(format!(
            "{} does not hold an autoencoder checkpoint",
            path.display()
        )));
    };
    let build = |dims: &[[usize; 2]]| -> Result<Mlp> {
        let layers = dims
            .iter()
            .map(|&[i, o]| DenseLayer::zeros(i, o))
            .collect::<Result<Vec<_>>>()?;
        Mlp::new(layers)
    };
    let mut ae =
        ToyAutoencoder::from_parts(build(&encoder_layers)?, build(&decoder_layers)?, trained)?;
    if params.len() != ae.params().len() {
        return Err(Error::Schema(format!(
            "parameter blob holds {} values, architecture needs {}",
            params.len(),
            ae.params().len()
        )));
    }
    ae.set_params(&params)?;
    Ok(ae)
}

pub fn save_synthetic(path: &Path, backbone: &SyntheticBackbone, seed: u64) -> Result<()> {
    let header = ArchitectureHeader::Synthetic {
        latent_dim: backbone.latent_dim(),
        observed_dim: backbone.observed_dim(),
        kinds: backbone.kinds().to_vec(),
        positive_rates: backbone.positive_rates().to_vec(),
        seed,
    };
    write_container(path, &header, &[])
}

pub fn load_synthetic(path: &Path) -> Result<SyntheticBackbone> {
    let (header, _) = read_container(path)?;
    let ArchitectureHeader::Synthetic {
        latent_dim,
        observed_dim,
        kinds,
        positive_rates,
        seed,
    } = header
    else {
        return Err(Error::Schema(format!(
            "{} does not hold a synthetic backbone checkpoint",
            path.display()
        )));
    };
    SyntheticBackbone::new(latent_dim, observed_dim, kinds, &positive_rates, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{FactorizedCode, LatentCode};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use tempfile::tempdir;

    fn trained_like_flow(seed: u64) -> NiceFlow {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut flow = NiceFlow::new(6, 2, 4, 2, 8, &mut rng).unwrap();
        let params: Vec<f64> = flow
            .params()
            .iter()
            .map(|_| rng.gen_range(-0.5..0.5))
            .collect();
        flow.set_params(&params).unwrap();
        flow
    }

    #[test]
    fn flow_checkpoint_round_trip_is_bit_exact() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("flow.plgn");
        let flow = trained_like_flow(3);
        let specs = vec![
            LabelSpec::binary_with_rate(0.3).unwrap(),
            LabelSpec::balanced_binary(),
        ];
        save_flow(&path, &flow, &specs, 0.123, None).unwrap();
        let loaded = load_flow(&path).unwrap();
        assert_eq!(loaded.specs, specs);
        assert_eq!(loaded.sigma_final, 0.123);

        // Loaded parameters are exactly the f32-quantized originals.
        for (orig, got) in flow.params().iter().zip(loaded.flow.params()) {
            assert_eq!(got, *orig as f32 as f64);
        }

        // A second save/load cycle reproduces outputs bit for bit.
        let path2 = dir.path().join("flow2.plgn");
        save_flow(&path2, &loaded.flow, &specs, 0.123, None).unwrap();
        let again = load_flow(&path2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let values: Vec<f64> = (0..6).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let v = FactorizedCode::from_vec(values, 2).unwrap();
            let a = loaded.flow.forward(&v).unwrap();
            let b = again.flow.forward(&v).unwrap();
            assert_eq!(a.as_slice(), b.as_slice());
            let (va, la) = loaded.flow.inverse(&a).unwrap();
            let (vb, lb) = again
                .flow
                .inverse(&LatentCode::new(a.as_slice().to_vec()).unwrap())
                .unwrap();
            assert_eq!(va.as_slice(), vb.as_slice());
            assert_eq!(la.to_bits(), lb.to_bits());
        }

        // And the files themselves are identical.
        assert_eq!(std::fs::read(&path2).unwrap(), {
            let path3 = dir.path().join("flow3.plgn");
            save_flow(&path3, &again.flow, &specs, 0.123, None).unwrap();
            std::fs::read(&path3).unwrap()
        });
    }

    #[test]
    fn flow_checkpoint_keeps_whitening() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("flow.plgn");
        let flow = trained_like_flow(5);
        let whitening = Whitening {
            mean: vec![0.5; 6],
            std: vec![2.0; 6],
        };
        save_flow(
            &path,
            &flow,
            &[LabelSpec::balanced_binary(), LabelSpec::balanced_binary()],
            0.1,
            Some(&whitening),
        )
        .unwrap();
        let loaded = load_flow(&path).unwrap();
        assert_eq!(loaded.whitening, Some(whitening));
    }

    #[test]
    fn corrupt_magic_is_a_schema_error() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.plgn");
        std::fs::write(&path, b"NOPE1234567890").unwrap();
        let err = load_flow(&path).unwrap_err();
        assert!(matches!(err, Error::Schema(_)));
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn over_clamped_scaling_is_rejected_on_load() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("wild.plgn");
        let mut flow = trained_like_flow(9);
        let mut params = flow.params();
        let last = params.len() - 1;
        params[last] = 50.0;
        flow.set_params(&params).unwrap();
        save_flow(
            &path,
            &flow,
            &[LabelSpec::balanced_binary(), LabelSpec::balanced_binary()],
            0.2,
            None,
        )
        .unwrap();
        assert!(matches!(load_flow(&path), Err(Error::Schema(_))));
    }

    #[test]
    fn missing_checkpoint_is_distinct_from_schema_error() {
        let err = load_flow(Path::new("/nonexistent/flow.plgn")).unwrap_err();
        assert!(matches!(err, Error::MissingFile(_)));
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn wrong_model_tag_is_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("ae.plgn");
        let ae = ToyAutoencoder::new(6, 3, 8, 2, 1).unwrap();
        save_autoencoder(&path, &ae).unwrap();
        assert!(matches!(load_flow(&path), Err(Error::Schema(_))));
    }

    #[test]
    fn autoencoder_round_trip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("ae.plgn");
        let mut ae = ToyAutoencoder::new(6, 3, 8, 2, 1).unwrap();
        let xs: Vec<Vec<f64>> = (0..50)
            .map(|i| (0..6).map(|j| ((i * 7 + j) as f64 * 0.37).sin()).collect())
            .collect();
        ae.train(
            &xs,
            &crate::backbone::AeTrainConfig {
                epochs: 5,
                ..Default::default()
            },
        )
        .unwrap();
        save_autoencoder(&path, &ae).unwrap();
        let loaded = load_autoencoder(&path).unwrap();
        assert!(loaded.is_trained());
        for (orig, got) in ae.params().iter().zip(loaded.params()) {
            assert_eq!(got, *orig as f32 as f64);
        }
    }

    #[test]
    fn synthetic_round_trip_reconstructs_the_same_process() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("synth.plgn");
        let bk = SyntheticBackbone::new(
            6,
            9,
            vec![LabelKind::Binary, LabelKind::Continuous],
            &[0.2, 0.5],
            77,
        )
        .unwrap();
        save_synthetic(&path, &bk, 77).unwrap();
        let loaded = load_synthetic(&path).unwrap();
        let a = bk.generate(5, 3);
        let b = loaded.generate(5, 3);
        for (s, t) in a.iter().zip(&b) {
            for (xa, xb) in s.x.iter().zip(&t.x) {
                assert!((xa - xb).abs() < 1e-7, "{xa} vs {xb}");
            }
            assert_eq!(s.labels, t.labels);
        }
    }
}
