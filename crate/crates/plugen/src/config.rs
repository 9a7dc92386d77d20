//! Run configuration: a single JSON document with backbone, flow, prior,
//! training, data, and path sections. Unknown keys are rejected, and every
//! cross-section dimension is checked before any work starts.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::priors::{LabelKind, SigmaSchedule};
use crate::training::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    Synthetic,
    Autoencoder,
}

fn default_ae_width() -> usize {
    32
}

fn default_ae_depth() -> usize {
    2
}

fn default_ae_epochs() -> usize {
    50
}

fn default_ae_batch() -> usize {
    64
}

fn default_ae_lr() -> f64 {
    1e-3
}

fn default_latent_reg() -> f64 {
    1e-3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub kind: BackboneKind,
    pub latent_dim: usize,
    pub label_dim: usize,
    pub observed_dim: usize,
    pub seed: u64,
    /// Marginal positive rate per binary attribute; defaults to balanced.
    #[serde(default)]
    pub positive_rates: Option<Vec<f64>>,
    #[serde(default = "default_ae_width")]
    pub ae_hidden_width: usize,
    #[serde(default = "default_ae_depth")]
    pub ae_hidden_depth: usize,
    #[serde(default = "default_ae_epochs")]
    pub ae_epochs: usize,
    #[serde(default = "default_ae_batch")]
    pub ae_batch_size: usize,
    #[serde(default = "default_ae_lr")]
    pub ae_learning_rate: f64,
    #[serde(default = "default_latent_reg")]
    pub ae_latent_reg: f64,
}

impl BackboneConfig {
    pub fn resolved_positive_rates(&self) -> Vec<f64> {
        self.positive_rates
            .clone()
            .unwrap_or_else(|| vec![0.5; self.label_dim])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowConfig {
    /// Optional explicit flow dimension; must equal the backbone latent
    /// dimension when present.
    #[serde(default)]
    pub dims: Option<usize>,
    pub couplings: usize,
    pub conditioner_depth: usize,
    pub conditioner_width: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttributeConfig {
    pub kind: LabelKind,
    /// Kernel width for continuous attributes when no schedule value is in
    /// force; ignored for binary attributes.
    #[serde(default)]
    pub sigma_base: Option<f64>,
}

fn default_sigma_min() -> f64 {
    0.05
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorConfig {
    pub attributes: Vec<AttributeConfig>,
    pub sigma0: f64,
    pub gamma: f64,
    #[serde(default = "default_sigma_min")]
    pub sigma_min: f64,
    /// Scale component sigmas by sqrt(2 p); disable to ablate the imbalance
    /// handling.
    #[serde(default = "default_true")]
    pub imbalance_scaling: bool,
}

impl PriorConfig {
    pub fn schedule(&self) -> Result<SigmaSchedule> {
        SigmaSchedule::new(self.sigma0, self.gamma, self.sigma_min)
    }

    pub fn kinds(&self) -> Vec<LabelKind> {
        self.attributes.iter().map(|a| a.kind).collect()
    }

    /// Kernel width used for continuous attributes, shared across them.
    pub fn continuous_sigma_base(&self) -> f64 {
        self.attributes
            .iter()
            .find_map(|a| a.sigma_base)
            .unwrap_or(1.0)
    }
}

fn default_batch_size() -> usize {
    256
}

fn default_learning_rate() -> f64 {
    1e-4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    pub seed: u64,
    #[serde(default = "default_true")]
    pub shuffle: bool,
    #[serde(default)]
    pub whiten: bool,
}

fn default_label_coverage() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub n_train: usize,
    #[serde(default = "default_n_eval")]
    pub n_eval: usize,
    pub seed: u64,
    #[serde(default = "default_label_coverage")]
    pub label_coverage: f64,
}

fn default_n_eval() -> usize {
    1000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    /// Base directory for every artifact below.
    pub out_dir: PathBuf,
    #[serde(default)]
    pub observations: Option<PathBuf>,
    #[serde(default)]
    pub latents: Option<PathBuf>,
    #[serde(default)]
    pub backbone_checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub flow_checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub history: Option<PathBuf>,
    #[serde(default)]
    pub report: Option<PathBuf>,
}

impl PathsConfig {
    fn resolve(&self, field: &Option<PathBuf>, name: &str) -> PathBuf {
        match field {
            Some(p) if p.is_absolute() => p.clone(),
            Some(p) => self.out_dir.join(p),
            None => self.out_dir.join(name),
        }
    }

    pub fn observations(&self) -> PathBuf {
        self.resolve(&self.observations, "observations.csv")
    }

    pub fn latents(&self) -> PathBuf {
        self.resolve(&self.latents, "latents.csv")
    }

    pub fn backbone_checkpoint(&self) -> PathBuf {
        self.resolve(&self.backbone_checkpoint, "backbone.plgn")
    }

    pub fn flow_checkpoint(&self) -> PathBuf {
        self.resolve(&self.flow_checkpoint, "flow.plgn")
    }

    pub fn history(&self) -> PathBuf {
        self.resolve(&self.history, "history.jsonl")
    }

    pub fn report(&self) -> PathBuf {
        self.resolve(&self.report, "report.json")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub backbone: BackboneConfig,
    pub flow: FlowConfig,
    pub prior: PriorConfig,
    pub training: TrainingConfig,
    pub data: DataConfig,
    pub paths: PathsConfig,
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path)?;
        let config: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Schema(format!("config {}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        let b = &self.backbone;
        if b.label_dim == 0 || b.label_dim >= b.latent_dim {
            return Err(contract("need 1 <= label_dim < latent_dim"));
        }
        if b.observed_dim < b.latent_dim {
            return Err(contract("observed_dim must be at least latent_dim"));
        }
        if let Some(dims) = self.flow.dims {
            if dims != b.latent_dim {
                return Err(Error::Dimension(format!(
                    "flow dims {dims} does not match backbone latent_dim {}",
                    b.latent_dim
                )));
            }
        }
        if self.flow.couplings == 0
            || self.flow.conditioner_depth == 0
            || self.flow.conditioner_width == 0
        {
            return Err(contract("flow layer counts must be positive"));
        }
        if self.prior.attributes.len() != b.label_dim {
            return Err(Error::Dimension(format!(
                "prior lists {} attributes, backbone labels {}",
                self.prior.attributes.len(),
                b.label_dim
            )));
        }
        let rates = b.resolved_positive_rates();
        if rates.len() != b.label_dim {
            return Err(Error::Dimension(format!(
                "got {} positive rates for {} attributes",
                rates.len(),
                b.label_dim
            )));
        }
        for (i, (rate, attr)) in rates.iter().zip(&self.prior.attributes).enumerate() {
            if attr.kind == LabelKind::Binary && !(rate > &0.0 && rate < &1.0) {
                return Err(contract(format!(
                    "positive rate for attribute {i} must lie in (0, 1)"
                )));
            }
            if let Some(sb) = attr.sigma_base {
                if !(sb > 0.0) {
                    return Err(contract(format!(
                        "sigma_base for attribute {i} must be positive"
                    )));
                }
            }
        }
        self.prior.schedule()?;
        self.train_config().validate()?;
        if self.data.n_train == 0 {
            return Err(contract("n_train must be positive"));
        }
        if !(self.data.label_coverage > 0.0 && self.data.label_coverage <= 1.0) {
            return Err(contract("label_coverage must lie in (0, 1]"));
        }
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.training.epochs,
            batch_size: self.training.batch_size,
            learning_rate: self.training.learning_rate,
            schedule: SigmaSchedule {
                sigma0: self.prior.sigma0,
                gamma: self.prior.gamma,
                sigma_min: self.prior.sigma_min,
            },
            seed: self.training.seed,
            shuffle: self.training.shuffle,
        }
    }

    /// Sigma in force during the final training epoch; the default
    /// generation-time sigma.
    pub fn final_sigma(&self) -> f64 {
        let schedule = SigmaSchedule {
            sigma0: self.prior.sigma0,
            gamma: self.prior.gamma,
            sigma_min: self.prior.sigma_min,
        };
        schedule.sigma_at(self.training.epochs.saturating_sub(1))
    }

    /// Named hyperparameter presets. `default` is the desk-scale synthetic
    /// task; the other three mirror the published training recipes.
    pub fn preset(name: &str) -> Option<RunConfig> {
        let base = RunConfig {
            backbone: BackboneConfig {
                kind: BackboneKind::Synthetic,
                latent_dim: 8,
                label_dim: 3,
                observed_dim: 16,
                seed: 7,
                positive_rates: None,
                ae_hidden_width: default_ae_width(),
                ae_hidden_depth: default_ae_depth(),
                ae_epochs: default_ae_epochs(),
                ae_batch_size: default_ae_batch(),
                ae_learning_rate: default_ae_lr(),
                ae_latent_reg: default_latent_reg(),
            },
            flow: FlowConfig {
                dims: None,
                couplings: 4,
                conditioner_depth: 3,
                conditioner_width: 32,
            },
            prior: PriorConfig {
                attributes: vec![
                    AttributeConfig {
                        kind: LabelKind::Binary,
                        sigma_base: None,
                    };
                    3
                ],
                sigma0: 0.7,
                gamma: 0.99,
                sigma_min: default_sigma_min(),
                imbalance_scaling: true,
            },
            training: TrainingConfig {
                epochs: 150,
                batch_size: 256,
                learning_rate: 3e-3,
                seed: 1,
                shuffle: true,
                whiten: false,
            },
            data: DataConfig {
                n_train: 10_000,
                n_eval: 1000,
                seed: 11,
                label_coverage: 1.0,
            },
            paths: PathsConfig {
                out_dir: PathBuf::from("runs/default"),
                observations: None,
                latents: None,
                backbone_checkpoint: None,
                flow_checkpoint: None,
                history: None,
                report: None,
            },
        };
        match name {
            "default" => Some(base),
            "stylegan-recipe" => {
                let mut c = base;
                c.flow.couplings = 4;
                c.flow.conditioner_depth = 4;
                c.flow.conditioner_width = 256;
                c.prior.sigma0 = 0.4;
                c.prior.gamma = 0.999;
                c.training.epochs = 1000;
                c.training.learning_rate = 1e-4;
                c.paths.out_dir = PathBuf::from("runs/stylegan-recipe");
                Some(c)
            }
            "vae-recipe" => {
                let mut c = base;
                c.flow.couplings = 4;
                c.flow.conditioner_depth = 4;
                c.flow.conditioner_width = 256;
                c.prior.sigma0 = 0.7;
                c.prior.gamma = 0.99;
                c.training.epochs = 50;
                c.training.learning_rate = 1e-4;
                c.paths.out_dir = PathBuf::from("runs/vae-recipe");
                Some(c)
            }
            "chem-recipe" => {
                let mut c = base;
                c.backbone.kind = BackboneKind::Autoencoder;
                c.flow.couplings = 6;
                c.flow.conditioner_depth = 6;
                c.flow.conditioner_width = 256;
                c.prior.attributes = vec![
                    AttributeConfig {
                        kind: LabelKind::Continuous,
                        sigma_base: Some(1.0),
                    };
                    3
                ];
                c.prior.sigma0 = 1.0;
                c.prior.gamma = 0.9;
                c.training.epochs = 50;
                c.training.learning_rate = 1e-4;
                c.training.batch_size = 256;
                c.paths.out_dir = PathBuf::from("runs/chem-recipe");
                Some(c)
            }
            _ => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for name in ["default", "stylegan-recipe", "vae-recipe", "chem-recipe"] {
            let config = RunConfig::preset(name).unwrap();
            config.validate().unwrap_or_else(|e| panic!("{name}: {e}"));
        }
        assert!(RunConfig::preset("nope").is_none());
    }

    #[test]
    fn recipe_hyperparameters() {
        let stylegan = RunConfig::preset("stylegan-recipe").unwrap();
        assert_eq!(stylegan.flow.couplings, 4);
        assert_eq!(stylegan.flow.conditioner_width, 256);
        assert_eq!(stylegan.prior.sigma0, 0.4);
        assert_eq!(stylegan.prior.gamma, 0.999);
        assert_eq!(stylegan.training.epochs, 1000);
        assert_eq!(stylegan.training.learning_rate, 1e-4);

        let vae = RunConfig::preset("vae-recipe").unwrap();
        assert_eq!(vae.prior.sigma0, 0.7);
        assert_eq!(vae.prior.gamma, 0.99);
        assert_eq!(vae.training.epochs, 50);

        let chem = RunConfig::preset("chem-recipe").unwrap();
        assert_eq!(chem.flow.couplings, 6);
        assert_eq!(chem.prior.sigma0, 1.0);
        assert_eq!(chem.prior.gamma, 0.9);
        assert!(chem
            .prior
            .attributes
            .iter()
            .all(|a| a.kind == LabelKind::Continuous));
    }

    #[test]
    fn unknown_keys_fail_closed() {
        let mut value = serde_json::to_value(RunConfig::preset("default").unwrap()).unwrap();
        value
            .as_object_mut()
            .unwrap()
            .insert("surprise".into(), serde_json::json!(1));
        let text = serde_json::to_string(&value).unwrap();
        assert!(serde_json::from_str::<RunConfig>(&text).is_err());
    }

    #[test]
    fn flow_dims_must_match_backbone() {
        let mut config = RunConfig::preset("default").unwrap();
        config.flow.dims = Some(12);
        assert!(matches!(config.validate(), Err(Error::Dimension(_))));
        config.flow.dims = Some(config.backbone.latent_dim);
        config.validate().unwrap();
    }

    #[test]
    fn attribute_count_must_match_label_dim() {
        let mut config = RunConfig::preset("default").unwrap();
        config.prior.attributes.pop();
        assert!(matches!(config.validate(), Err(Error::Dimension(_))));
    }

    #[test]
    fn json_round_trip() {
        let config = RunConfig::preset("chem-recipe").unwrap();
        let text = serde_json::to_string_pretty(&config).unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, config);
    }

    #[test]
    fn missing_config_file_is_distinct() {
        let err = RunConfig::from_file(Path::new("/nonexistent/config.json")).unwrap_err();
        assert!(matches!(err, Error::MissingFile(_)));
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn final_sigma_tracks_the_schedule() {
        let config = RunConfig::preset("vae-recipe").unwrap();
        let expected = 0.7 * 0.99_f64.powi(49);
        assert!((config.final_sigma() - expected).abs() < 1e-12);
    }
}
