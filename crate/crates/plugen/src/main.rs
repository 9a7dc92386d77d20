//! Command-line pipeline: make-data -> train-backbone -> encode ->
//! train-plugen -> generate / manipulate / interpolate / evaluate, plus a
//! gradient-check suite and config-preset printing.
//!
//! Every command is idempotent given identical inputs and seeds. On failure
//! the process prints a single machine-parsable line to stderr and exits
//! with a code that identifies the failure class (see `Error::exit_code`).

// Pivoted elimination and Jacobian assembly read clearer with indices.
#![allow(clippy::needless_range_loop)]

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use plugen::backbone::{
    latent_recover, make_label_mask, Backbone, RecoverConfig, SyntheticBackbone, ToyAutoencoder,
};
use plugen::checkpoint;
use plugen::config::{BackboneKind, RunConfig};
use plugen::dataset_io::{self, SampleRecord};
use plugen::error::{Error, Result};
use plugen::evaluation::{run_full_evaluation, EvalOptions};
use plugen::flow::NiceFlow;
use plugen::inference::{
    generate, interpolate, manipulate, Condition, ConditionEntry, ManipulateInput,
    ManipulateOptions,
};
use plugen::numerics::{finite_diff_grad, rel_err, Mlp};
use plugen::priors::LabelSpec;
use plugen::training::{
    evaluate_nll, example_nll, fit_label_specs, train, LatentDataset, Whitening,
};

#[derive(Parser)]
#[command(
    name = "plugen",
    version,
    about = "Attribute-factorized latent flows for frozen generative backbones"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// Path to the JSON run configuration.
    #[arg(long)]
    config: PathBuf,
}

#[derive(Args)]
struct InputArgs {
    /// Latent dataset CSV to take the input row from.
    #[arg(long, conflicts_with = "observations")]
    latents: Option<PathBuf>,
    /// Observations CSV to take the input row from.
    #[arg(long)]
    observations: Option<PathBuf>,
    /// Row index within the input file.
    #[arg(long, default_value_t = 0)]
    row: usize,
    /// Recover the latent by gradient descent instead of using the encoder
    /// (only meaningful with --observations).
    #[arg(long)]
    recover: bool,
    /// Steps for gradient-descent latent recovery.
    #[arg(long, default_value_t = 500)]
    recover_steps: usize,
    /// Learning rate for gradient-descent latent recovery.
    #[arg(long, default_value_t = 1e-2)]
    recover_lr: f64,
}

#[derive(Subcommand)]
enum Command {
    /// Sample the synthetic data source and write the observations CSV.
    MakeData(ConfigArg),
    /// Produce the backbone checkpoint (trains the autoencoder kind).
    TrainBackbone(ConfigArg),
    /// Encode observations into the latent dataset CSV.
    Encode(ConfigArg),
    /// Train the flow on the latent dataset and write its checkpoint.
    TrainPlugen(ConfigArg),
    /// Generate conditioned samples.
    Generate {
        #[command(flatten)]
        config: ConfigArg,
        /// Number of samples.
        #[arg(long, default_value_t = 100)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Fix attribute i to label value v (binary: 0 or 1; continuous:
        /// real). Unset attributes sample from their marginals.
        #[arg(long = "set", value_parser = parse_edit)]
        set: Vec<(usize, f64)>,
        /// Label-component sigma at sampling time; defaults to the final
        /// training sigma stored in the checkpoint.
        #[arg(long)]
        sigma_gen: Option<f64>,
        /// Multiplier on the style prior standard deviation.
        #[arg(long, default_value_t = 1.0)]
        temperature: f64,
        /// Output CSV; defaults to samples.csv under the run directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Edit label coordinates of one example and decode before/after.
    Manipulate {
        #[command(flatten)]
        config: ConfigArg,
        #[command(flatten)]
        input: InputArgs,
        /// Set label coordinate i to the absolute value v.
        #[arg(long = "set", value_parser = parse_edit)]
        set: Vec<(usize, f64)>,
        /// Shift label coordinate i by delta.
        #[arg(long = "add", value_parser = parse_edit)]
        add: Vec<(usize, f64)>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sweep one label coordinate over an interval and decode each step.
    Interpolate {
        #[command(flatten)]
        config: ConfigArg,
        #[command(flatten)]
        input: InputArgs,
        #[arg(long)]
        attr: usize,
        #[arg(long, allow_negative_numbers = true)]
        from: f64,
        #[arg(long, allow_negative_numbers = true)]
        to: f64,
        #[arg(long, default_value_t = 9)]
        steps: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the oracle evaluation protocols and write the report JSON.
    Evaluate {
        #[command(flatten)]
        config: ConfigArg,
        /// Evaluation set size; defaults to the config's n_eval.
        #[arg(long)]
        n: Option<usize>,
        #[arg(long, default_value_t = 4242)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check every analytic gradient against central finite differences.
    Gradcheck {
        /// Optional config whose architecture shapes the checked flow
        /// (dimensions are capped to keep the sweep fast).
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Print a named preset configuration as JSON.
    PrintConfig {
        #[arg(long)]
        preset: String,
    },
}

fn parse_edit(text: &str) -> std::result::Result<(usize, f64), String> {
    let (idx, value) = text
        .split_once('=')
        .ok_or_else(|| format!("expected `attr=value`, got `{text}`"))?;
    let idx = idx
        .trim()
        .parse::<usize>()
        .map_err(|_| format!("`{idx}` is not an attribute index"))?;
    let value = value
        .trim()
        .parse::<f64>()
        .map_err(|_| format!("`{value}` is not a number"))?;
    Ok((idx, value))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let kind = match &err {
                Error::MissingFile(_) => "missing-file",
                Error::Schema(_) | Error::Json(_) => "schema",
                Error::Dimension(_) => "dimension",
                Error::Contract(_) => "contract",
                Error::Numeric(_) => "numeric",
                Error::Training(_) => "training",
                Error::Oracle(_) => "oracle",
                Error::Io(_) => "io",
            };
            eprintln!(
                "plugen: error kind={kind} code={} msg={err}",
                err.exit_code()
            );
            ExitCode::from(err.exit_code() as u8)
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::MakeData(arg) => cmd_make_data(&arg.config),
        Command::TrainBackbone(arg) => cmd_train_backbone(&arg.config),
        Command::Encode(arg) => cmd_encode(&arg.config),
        Command::TrainPlugen(arg) => cmd_train_plugen(&arg.config),
        Command::Generate {
            config,
            n,
            seed,
            set,
            sigma_gen,
            temperature,
            out,
        } => cmd_generate(&config.config, n, seed, &set, sigma_gen, temperature, out),
        Command::Manipulate {
            config,
            input,
            set,
            add,
            out,
        } => cmd_manipulate(&config.config, &input, &set, &add, out),
        Command::Interpolate {
            config,
            input,
            attr,
            from,
            to,
            steps,
            out,
        } => cmd_interpolate(&config.config, &input, attr, from, to, steps, out),
        Command::Evaluate {
            config,
            n,
            seed,
            out,
        } => cmd_evaluate(&config.config, n, seed, out),
        Command::Gradcheck { config } => cmd_gradcheck(config.as_deref()),
        Command::PrintConfig { preset } => {
            let config = RunConfig::preset(&preset).ok_or_else(|| {
                Error::Contract(format!(
                    "unknown preset `{preset}` (try default, stylegan-recipe, vae-recipe, chem-recipe)"
                ))
            })?;
            println!("{}", serde_json::to_string_pretty(&config)?);
            Ok(())
        }
    }
}

/// The data source is always the synthetic process; the backbone kind only
/// decides what encodes and decodes during inference.
fn data_source(config: &RunConfig) -> Result<SyntheticBackbone> {
    SyntheticBackbone::new(
        config.backbone.latent_dim,
        config.backbone.observed_dim,
        config.prior.kinds(),
        &config.backbone.resolved_positive_rates(),
        config.backbone.seed,
    )
}

enum AnyBackbone {
    Synthetic(SyntheticBackbone),
    Autoencoder(ToyAutoencoder),
}

impl AnyBackbone {
    fn load(config: &RunConfig) -> Result<Self> {
        let path = config.paths.backbone_checkpoint();
        Ok(match config.backbone.kind {
            BackboneKind::Synthetic => AnyBackbone::Synthetic(checkpoint::load_synthetic(&path)?),
            BackboneKind::Autoencoder => {
                AnyBackbone::Autoencoder(checkpoint::load_autoencoder(&path)?)
            }
        })
    }
}

impl Backbone for AnyBackbone {
    fn latent_dim(&self) -> usize {
        match self {
            AnyBackbone::Synthetic(b) => b.latent_dim(),
            AnyBackbone::Autoencoder(b) => b.latent_dim(),
        }
    }

    fn observed_dim(&self) -> usize {
        match self {
            AnyBackbone::Synthetic(b) => b.observed_dim(),
            AnyBackbone::Autoencoder(b) => b.observed_dim(),
        }
    }

    fn decode(&self, z: &[f64]) -> Result<Vec<f64>> {
        match self {
            AnyBackbone::Synthetic(b) => b.decode(z),
            AnyBackbone::Autoencoder(b) => b.decode(z),
        }
    }

    fn encode(&self, x: &[f64]) -> Result<Vec<f64>> {
        match self {
            AnyBackbone::Synthetic(b) => b.encode(x),
            AnyBackbone::Autoencoder(b) => b.encode(x),
        }
    }

    fn decode_vjp(&self, z: &[f64], d_x: &[f64]) -> Result<Vec<f64>> {
        match self {
            AnyBackbone::Synthetic(b) => b.decode_vjp(z, d_x),
            AnyBackbone::Autoencoder(b) => b.decode_vjp(z, d_x),
        }
    }
}

fn cmd_make_data(config_path: &Path) -> Result<()> {
    let config = RunConfig::from_file(config_path)?;
    let source = data_source(&config)?;
    let samples = source.generate(config.data.n_train, config.data.seed);
    let mask = make_label_mask(
        config.data.n_train,
        config.backbone.label_dim,
        config.data.seed,
        config.data.label_coverage,
    );
    let xs: Vec<Vec<f64>> = samples.iter().map(|s| s.x.clone()).collect();
    let labels: Vec<Vec<Option<f64>>> = samples
        .iter()
        .zip(&mask)
        .map(|(s, keep)| {
            s.labels
                .iter()
                .zip(keep)
                .map(|(v, &k)| if k { *v } else { None })
                .collect()
        })
        .collect();
    let path = config.paths.observations();
    dataset_io::write_observations(&path, &xs, &labels)?;
    eprintln!(
        "wrote {} observations ({} labels masked) to {}",
        xs.len(),
        labels.iter().flatten().filter(|v| v.is_none()).count(),
        path.display()
    );
    Ok(())
}

fn cmd_train_backbone(config_path: &Path) -> Result<()> {
    let config = RunConfig::from_file(config_path)?;
    let path = config.paths.backbone_checkpoint();
    match config.backbone.kind {
        BackboneKind::Synthetic => {
            // Nothing to train: the synthetic backbone is derived from its
            // seed, so the checkpoint is header-only.
            let backbone = data_source(&config)?;
            checkpoint::save_synthetic(&path, &backbone, config.backbone.seed)?;
            eprintln!("wrote synthetic backbone checkpoint to {}", path.display());
        }
        BackboneKind::Autoencoder => {
            let (xs, _) = dataset_io::read_observations(&config.paths.observations())?;
            let mut ae = ToyAutoencoder::new(
                config.backbone.observed_dim,
                config.backbone.latent_dim,
                config.backbone.ae_hidden_width,
                config.backbone.ae_hidden_depth,
                config.backbone.seed,
            )?;
            let history = ae.train(
                &xs,
                &plugen::backbone::AeTrainConfig {
                    epochs: config.backbone.ae_epochs,
                    batch_size: config.backbone.ae_batch_size,
                    learning_rate: config.backbone.ae_learning_rate,
                    seed: config.backbone.seed,
                    latent_reg: config.backbone.ae_latent_reg,
                },
            )?;
            checkpoint::save_autoencoder(&path, &ae)?;
            eprintln!(
                "trained autoencoder for {} epochs (final loss {:.6}), checkpoint at {}",
                history.len(),
                history.last().unwrap(),
                path.display()
            );
        }
    }
    Ok(())
}

fn cmd_encode(config_path: &Path) -> Result<()> {
    let config = RunConfig::from_file(config_path)?;
    let (xs, labels) = dataset_io::read_observations(&config.paths.observations())?;
    let backbone = AnyBackbone::load(&config)?;
    if backbone.latent_dim() != config.backbone.latent_dim {
        return Err(Error::Dimension(format!(
            "backbone checkpoint latent dim {} does not match config {}",
            backbone.latent_dim(),
            config.backbone.latent_dim
        )));
    }
    let backbone = match backbone {
        // Observations were stored in single precision; widen the off-range
        // gate so quantization noise is not mistaken for off-range input.
        AnyBackbone::Synthetic(mut b) => {
            b.residual_tol = 1e-4;
            AnyBackbone::Synthetic(b)
        }
        other => other,
    };
    let latents: Vec<Vec<f64>> = xs
        .iter()
        .map(|x| backbone.encode(x))
        .collect::<Result<_>>()?;
    let dataset = LatentDataset::new(latents, labels, config.prior.kinds())?;
    let path = config.paths.latents();
    dataset_io::write_latent_dataset(&path, &dataset)?;
    eprintln!("encoded {} examples to {}", dataset.len(), path.display());
    Ok(())
}

fn cmd_train_plugen(config_path: &Path) -> Result<()> {
    let config = RunConfig::from_file(config_path)?;
    let dataset = dataset_io::read_latent_dataset(&config.paths.latents(), &config.prior.kinds())?;
    if dataset.n_dims() != config.backbone.latent_dim {
        return Err(Error::Dimension(format!(
            "latent dataset dimension {} does not match config {}",
            dataset.n_dims(),
            config.backbone.latent_dim
        )));
    }
    let specs = fit_label_specs(
        &dataset,
        config.prior.imbalance_scaling,
        config.prior.continuous_sigma_base(),
    )?;
    let (dataset, whitening) = if config.training.whiten {
        let w = Whitening::fit(&dataset);
        (w.whiten(&dataset)?, Some(w))
    } else {
        (dataset, None)
    };

    let mut rng = ChaCha8Rng::seed_from_u64(config.training.seed);
    let mut flow = NiceFlow::new(
        config.backbone.latent_dim,
        config.backbone.label_dim,
        config.flow.couplings,
        config.flow.conditioner_depth,
        config.flow.conditioner_width,
        &mut rng,
    )?;
    let train_config = config.train_config();
    let history = train(&mut flow, &specs, &dataset, &train_config)?;
    for stats in &history {
        eprintln!(
            "epoch={} sigma={:.4} nll={:.6}",
            stats.epoch, stats.sigma, stats.mean_nll
        );
    }

    let history_path = config.paths.history();
    if let Some(parent) = history_path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut out = std::io::BufWriter::new(std::fs::File::create(&history_path)?);
    for stats in &history {
        writeln!(out, "{}", serde_json::to_string(stats)?)?;
    }
    out.flush()?;

    checkpoint::save_flow(
        &config.paths.flow_checkpoint(),
        &flow,
        &specs,
        config.final_sigma(),
        whitening.as_ref(),
    )?;
    eprintln!(
        "trained flow for {} epochs (final nll {:.6}), checkpoint at {}",
        history.len(),
        history.last().map(|s| s.mean_nll).unwrap_or(f64::NAN),
        config.paths.flow_checkpoint().display()
    );
    Ok(())
}

fn parse_condition(sets: &[(usize, f64)], k: usize) -> Result<Condition> {
    let mut entries = vec![ConditionEntry::Free; k];
    for &(idx, value) in sets {
        if idx >= k {
            return Err(Error::Contract(format!(
                "condition index {idx} out of range (k = {k})"
            )));
        }
        entries[idx] = ConditionEntry::Fixed(value);
    }
    Ok(Condition::new(entries))
}

#[allow(clippy::too_many_arguments)]
fn cmd_generate(
    config_path: &Path,
    n: usize,
    seed: u64,
    sets: &[(usize, f64)],
    sigma_gen: Option<f64>,
    temperature: f64,
    out: Option<PathBuf>,
) -> Result<()> {
    let config = RunConfig::from_file(config_path)?;
    let artifact = checkpoint::load_flow(&config.paths.flow_checkpoint())?;
    let backbone = AnyBackbone::load(&config)?;
    let condition = parse_condition(sets, artifact.flow.k_labels())?;
    for warning in condition.validate(&artifact.specs)? {
        eprintln!("warning: {warning}");
    }
    let sigma = sigma_gen.unwrap_or(artifact.sigma_final);
    let samples = generate(
        &artifact.flow,
        &artifact.specs,
        &backbone,
        &condition,
        n,
        sigma,
        temperature,
        seed,
        artifact.whitening.as_ref(),
    )?;
    let records: Vec<SampleRecord> = samples
        .into_iter()
        .map(|s| SampleRecord {
            tag: None,
            x: s.x,
            z: s.z,
            code: s.code,
        })
        .collect();
    let path = out.unwrap_or_else(|| config.paths.out_dir.join("samples.csv"));
    dataset_io::write_samples(
        &path,
        backbone.observed_dim(),
        artifact.flow.dims(),
        artifact.flow.k_labels(),
        None,
        &records,
    )?;
    eprintln!("wrote {} samples to {}", records.len(), path.display());
    Ok(())
}

/// Resolves the input row to a backbone latent code.
fn obtain_latent(
    config: &RunConfig,
    backbone: &AnyBackbone,
    input: &InputArgs,
) -> Result<Vec<f64>> {
    if let Some(latents_path) = &input.latents {
        let dataset = dataset_io::read_latent_dataset(latents_path, &config.prior.kinds())?;
        if input.row >= dataset.len() {
            return Err(Error::Contract(format!(
                "row {} out of range ({} rows)",
                input.row,
                dataset.len()
            )));
        }
        return Ok(dataset.latent(input.row).to_vec());
    }
    let observations_path = input
        .observations
        .clone()
        .unwrap_or_else(|| config.paths.observations());
    let (xs, _) = dataset_io::read_observations(&observations_path)?;
    if input.row >= xs.len() {
        return Err(Error::Contract(format!(
            "row {} out of range ({} rows)",
            input.row,
            xs.len()
        )));
    }
    let x = &xs[input.row];
    if input.recover {
        latent_recover(
            backbone,
            x,
            &RecoverConfig {
                steps: input.recover_steps,
                learning_rate: input.recover_lr,
            },
        )
    } else {
        match backbone {
            // File observations are single precision; relax the range gate.
            AnyBackbone::Synthetic(b) => {
                let mut relaxed = b.clone();
                relaxed.residual_tol = 1e-4;
                relaxed.encode(x)
            }
            other => other.encode(x),
        }
    }
}

fn cmd_manipulate(
    config_path: &Path,
    input: &InputArgs,
    sets: &[(usize, f64)],
    adds: &[(usize, f64)],
    out: Option<PathBuf>,
) -> Result<()> {
    let config = RunConfig::from_file(config_path)?;
    let artifact = checkpoint::load_flow(&config.paths.flow_checkpoint())?;
    let backbone = AnyBackbone::load(&config)?;
    let z = obtain_latent(&config, &backbone, input)?;
    let options = ManipulateOptions::default();

    // Read the current code first so relative edits can resolve.
    let baseline = manipulate(
        &artifact.flow,
        &backbone,
        ManipulateInput::Latent(&z),
        &[],
        &options,
        artifact.whitening.as_ref(),
    )?;
    let mut edits: Vec<(usize, f64)> = sets.to_vec();
    for &(idx, delta) in adds {
        if idx >= baseline.before.k_labels() {
            return Err(Error::Contract(format!("edit index {idx} out of range")));
        }
        edits.push((idx, baseline.before.label_vars()[idx] + delta));
    }

    let result = manipulate(
        &artifact.flow,
        &backbone,
        ManipulateInput::Latent(&z),
        &edits,
        &options,
        artifact.whitening.as_ref(),
    )?;
    for warning in &result.warnings {
        eprintln!("warning: {warning}");
    }

    let before_x = backbone.decode(&z)?;
    let records = vec![
        SampleRecord {
            tag: Some("before".into()),
            x: before_x,
            z: z.clone(),
            code: result.before.clone(),
        },
        SampleRecord {
            tag: Some("after".into()),
            x: result.x.clone(),
            z: result.z.clone(),
            code: result.after.clone(),
        },
    ];
    let path = out.unwrap_or_else(|| config.paths.out_dir.join("manipulated.csv"));
    dataset_io::write_samples(
        &path,
        backbone.observed_dim(),
        artifact.flow.dims(),
        artifact.flow.k_labels(),
        Some("phase"),
        &records,
    )?;
    eprintln!("wrote before/after rows to {}", path.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_interpolate(
    config_path: &Path,
    input: &InputArgs,
    attr: usize,
    from: f64,
    to: f64,
    steps: usize,
    out: Option<PathBuf>,
) -> Result<()> {
    let config = RunConfig::from_file(config_path)?;
    let artifact = checkpoint::load_flow(&config.paths.flow_checkpoint())?;
    let backbone = AnyBackbone::load(&config)?;
    let z = obtain_latent(&config, &backbone, input)?;
    let points = interpolate(
        &artifact.flow,
        &backbone,
        &z,
        attr,
        from,
        to,
        steps,
        artifact.whitening.as_ref(),
    )?;
    let records: Vec<SampleRecord> = points
        .into_iter()
        .map(|p| {
            let (code, _) = artifact.flow.inverse(&plugen::flow::LatentCode::new(
                match &artifact.whitening {
                    Some(w) => w.apply(&p.z),
                    None => p.z.clone(),
                },
            )?)?;
            Ok(SampleRecord {
                tag: Some(format!("{}", p.target)),
                x: p.x,
                z: p.z,
                code,
            })
        })
        .collect::<Result<_>>()?;
    let path = out.unwrap_or_else(|| config.paths.out_dir.join("interpolation.csv"));
    dataset_io::write_samples(
        &path,
        backbone.observed_dim(),
        artifact.flow.dims(),
        artifact.flow.k_labels(),
        Some("target"),
        &records,
    )?;
    eprintln!("wrote {steps} interpolation steps to {}", path.display());
    Ok(())
}

fn cmd_evaluate(
    config_path: &Path,
    n: Option<usize>,
    seed: u64,
    out: Option<PathBuf>,
) -> Result<()> {
    let config = RunConfig::from_file(config_path)?;
    let artifact = checkpoint::load_flow(&config.paths.flow_checkpoint())?;
    let backbone = match AnyBackbone::load(&config)? {
        AnyBackbone::Synthetic(b) => b,
        AnyBackbone::Autoencoder(_) => {
            return Err(Error::Contract(
                "oracle evaluation needs the synthetic backbone".into(),
            ))
        }
    };
    let options = EvalOptions {
        n: n.unwrap_or(config.data.n_eval),
        seed,
        sigma_gen: artifact.sigma_final,
        temperature: 1.0,
        continuous_targets: vec![-0.5, 0.0, 0.5],
    };
    let report = run_full_evaluation(
        &artifact.flow,
        &artifact.specs,
        &backbone,
        &options,
        artifact.whitening.as_ref(),
    )?;
    let path = out.unwrap_or_else(|| config.paths.report());
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(&path, serde_json::to_string_pretty(&report)?)?;

    for (attr, rates) in report.flip_accuracy.iter().enumerate() {
        if let Some([to0, to1]) = rates {
            println!("attribute {attr}: flip->0 {to0:.3}, flip->1 {to1:.3}");
        }
    }
    for (attr, rates) in report.conditional_generation.iter().enumerate() {
        if let Some([to0, to1]) = rates {
            println!("attribute {attr}: generate|0 {to0:.3}, generate|1 {to1:.3}");
        }
    }
    if let Some(scores) = &report.independent_sampling {
        println!(
            "independent sampling: mean F1 {:.3}, mean AUC {:.3}",
            scores.mean_f1, scores.mean_auc
        );
    }
    if let (Some(diag), Some(off)) = (report.leakage_diag_min, report.leakage_offdiag_max) {
        println!("leakage: diagonal min {diag:.3}, off-diagonal max {off:.3}");
    }
    for (attr, shifts) in &report.continuous_shift {
        for s in shifts {
            println!(
                "attribute {attr}: target {:+.2} -> mean {:+.3} (std {:.3})",
                s.target, s.mean, s.std
            );
        }
    }
    println!("report written to {}", path.display());
    Ok(())
}

struct SuiteOutcome {
    name: &'static str,
    max_rel_err: f64,
    tolerance: f64,
}

impl SuiteOutcome {
    fn passed(&self) -> bool {
        self.max_rel_err <= self.tolerance
    }
}

fn cmd_gradcheck(config_path: Option<&Path>) -> Result<()> {
    // Shape the checked flow after the config, capped so the sweep stays
    // inside seconds. Conditioner depth is capped at 2: deeper stacks of
    // leaky rectifiers produce doubly-attenuated paths whose true gradients
    // sink below the round-off noise floor of the finite-difference oracle.
    let (dims, k, couplings, depth, width) = match config_path {
        Some(path) => {
            let c = RunConfig::from_file(path)?;
            (
                c.backbone.latent_dim.min(8),
                c.backbone.label_dim.min(3),
                c.flow.couplings.min(4),
                c.flow.conditioner_depth.min(2),
                c.flow.conditioner_width.min(16),
            )
        }
        None => (6, 3, 4, 2, 16),
    };

    let mut outcomes = Vec::new();

    // MLP backward pass against finite differences, several seeds.
    let mut worst: f64 = 0.0;
    for seed in [1u64, 2, 3] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mlp = Mlp::with_shape(4, 3, 8, 3, false, &mut rng)?;
        let x: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let dy: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (_, cache) = mlp.forward(&x)?;
        let (_, grads) = mlp.backward(&cache, &dy)?;
        let mut analytic = Vec::new();
        Mlp::write_grads(&grads, &mut analytic);
        let mut params = Vec::new();
        mlp.write_params(&mut params);
        let shape = mlp.clone();
        let numeric = finite_diff_grad(
            |p| {
                let mut net = shape.clone();
                net.read_params(p).unwrap();
                let (y, _) = net.forward(&x).unwrap();
                y.iter().zip(&dy).map(|(a, b)| a * b).sum()
            },
            &params,
            1e-5,
        );
        for (a, n) in analytic.iter().zip(&numeric) {
            worst = worst.max(rel_err(*a, *n));
        }
    }
    outcomes.push(SuiteOutcome {
        name: "mlp-backward",
        max_rel_err: worst,
        tolerance: 1e-4,
    });

    // Flow gradients through the full loss, all three label paths in one
    // small batch.
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut flow = NiceFlow::new(dims, k, couplings, depth, width, &mut rng)?;
    let perturbed: Vec<f64> = flow
        .params()
        .iter()
        .map(|_| rng.gen_range(-0.3..0.3))
        .collect();
    flow.set_params(&perturbed)?;
    let mut specs: Vec<LabelSpec> = Vec::new();
    for i in 0..k {
        specs.push(if i == 1 {
            LabelSpec::continuous(0.5)?
        } else {
            LabelSpec::binary_with_rate(0.3)?
        });
    }
    let label_rows: Vec<Vec<Option<f64>>> = (0..4usize)
        .map(|row| {
            specs
                .iter()
                .enumerate()
                .map(|(i, spec)| match ((row + i) % 3, spec) {
                    (2, _) => None,
                    (_, LabelSpec::Continuous { .. }) => Some(0.4),
                    (_, LabelSpec::Binary { .. }) => Some((row % 2) as f64),
                })
                .collect()
        })
        .collect();
    let zs: Vec<Vec<f64>> = (0..4)
        .map(|_| (0..dims).map(|_| rng.gen_range(-1.5..1.5)).collect())
        .collect();
    let sigma_t = 0.6;
    let batch: Vec<(&[f64], &[Option<f64>])> = zs
        .iter()
        .zip(&label_rows)
        .map(|(z, y)| (z.as_slice(), y.as_slice()))
        .collect();
    let (_, analytic) = plugen::training::nll_loss(&flow, &specs, &batch, sigma_t)?;
    let params = flow.params();
    let shape = flow.clone();
    let numeric = finite_diff_grad(
        |p| {
            let mut probe = shape.clone();
            probe.set_params(p).unwrap();
            let total: f64 = batch
                .iter()
                .map(|(z, y)| example_nll(&probe, &specs, z, y, sigma_t).unwrap())
                .sum();
            total / batch.len() as f64
        },
        &params,
        1e-5,
    );
    let mut worst: f64 = 0.0;
    for (a, n) in analytic.iter().zip(&numeric) {
        worst = worst.max(rel_err(*a, *n));
    }
    outcomes.push(SuiteOutcome {
        name: "loss-gradients",
        max_rel_err: worst,
        tolerance: 1e-4,
    });

    // Analytic log-determinant against a finite-difference Jacobian.
    let mut worst: f64 = 0.0;
    for probe_dims in [4usize, 6] {
        let mut rng = ChaCha8Rng::seed_from_u64(23 + probe_dims as u64);
        let mut probe_flow = NiceFlow::new(probe_dims, 1, 3, 2, 8, &mut rng)?;
        let p: Vec<f64> = probe_flow
            .params()
            .iter()
            .map(|_| rng.gen_range(-0.4..0.4))
            .collect();
        probe_flow.set_params(&p)?;
        let z: Vec<f64> = (0..probe_dims).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let numeric = numeric_inverse_log_det(&probe_flow, &z, 1e-5)?;
        worst = worst.max(rel_err(probe_flow.inverse_log_det(), numeric));
    }
    outcomes.push(SuiteOutcome {
        name: "log-determinant",
        max_rel_err: worst,
        tolerance: 1e-4,
    });

    // Whole-dataset loss consistency: evaluation equals the batch loss.
    let latents: Vec<Vec<f64>> = (0..8)
        .map(|_| (0..dims).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    let label_rows: Vec<Vec<Option<f64>>> = (0..8usize)
        .map(|row| {
            specs
                .iter()
                .enumerate()
                .map(|(i, spec)| match ((row + i) % 3, spec) {
                    (2, _) => None,
                    (_, LabelSpec::Continuous { .. }) => Some(0.4),
                    (_, LabelSpec::Binary { .. }) => Some((row % 2) as f64),
                })
                .collect()
        })
        .collect();
    let dataset = LatentDataset::new(
        latents,
        label_rows,
        specs.iter().map(|s| s.kind()).collect(),
    )?;
    let eval = evaluate_nll(&flow, &specs, &dataset, sigma_t)?;
    let batch: Vec<(&[f64], &[Option<f64>])> = (0..dataset.len())
        .map(|i| (dataset.latent(i), dataset.label(i)))
        .collect();
    let (batch_loss, _) = plugen::training::nll_loss(&flow, &specs, &batch, sigma_t)?;
    outcomes.push(SuiteOutcome {
        name: "loss-consistency",
        max_rel_err: rel_err(eval, batch_loss),
        tolerance: 1e-12,
    });

    let mut all_passed = true;
    for outcome in &outcomes {
        let status = if outcome.passed() { "PASS" } else { "FAIL" };
        all_passed &= outcome.passed();
        println!(
            "{status} {} max_rel_err={:.3e} tolerance={:.0e}",
            outcome.name, outcome.max_rel_err, outcome.tolerance
        );
    }
    if all_passed {
        Ok(())
    } else {
        Err(Error::Numeric("gradient check failed".into()))
    }
}

fn numeric_inverse_log_det(flow: &NiceFlow, z: &[f64], h: f64) -> Result<f64> {
    let n = z.len();
    let mut jac = vec![vec![0.0; n]; n];
    let mut probe = z.to_vec();
    for col in 0..n {
        let orig = probe[col];
        probe[col] = orig + h;
        let plus = flow
            .inverse(&plugen::flow::LatentCode::new(probe.clone())?)?
            .0;
        probe[col] = orig - h;
        let minus = flow
            .inverse(&plugen::flow::LatentCode::new(probe.clone())?)?
            .0;
        probe[col] = orig;
        for row in 0..n {
            jac[row][col] = (plus.as_slice()[row] - minus.as_slice()[row]) / (2.0 * h);
        }
    }
    Ok(lu_log_abs_det(jac))
}

fn lu_log_abs_det(mut a: Vec<Vec<f64>>) -> f64 {
    let n = a.len();
    let mut log_det = 0.0;
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap();
        a.swap(col, pivot);
        let p = a[col][col];
        log_det += p.abs().ln();
        for row in col + 1..n {
            let factor = a[row][col] / p;
            for k in col..n {
                a[row][k] -= factor * a[col][k];
            }
        }
    }
    log_det
}
