//! Implementations of the six subcommands.

use crate::config::{self, ReportFormat};
use crate::CliError;
use clap::Args;
use gtd_core::data::{generate_dataset, read_dataset, write_dataset};
use gtd_core::gradcheck::run_gradient_suite;
use gtd_core::gtan::{gtan_forward, ForwardInput};
use gtd_core::pipeline::{
    evaluate_predictions, predict_dataset, predict_dataset_deterministic, read_predictions,
    render_report_jsonl, render_report_text, write_predictions,
};
use gtd_core::trainer::{prepare_train_item, training_gradient_check, TrainItem};
use gtd_core::{ArrayContainer, DataError, GatingMode, SamplePlan, Tensor, TrainMode, Trainer};
use std::path::PathBuf;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

#[derive(Args)]
pub struct GenDataArgs {
    /// TOML run configuration; built-in defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Directory to write the dataset into.
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the `[data]` seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Configuration override as section.key=value; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

pub fn gen_data(args: &GenDataArgs) -> Result<(), CliError> {
    let mut cfg = config::load(args.config.as_deref(), &args.set)?;
    if let Some(seed) = args.seed {
        cfg.data.seed = seed;
    }
    config::log_config(&cfg);
    config::log_kv(&[("out", args.out.display().to_string())]);

    // Everything the generator sees comes from configuration, so schema
    // complaints here are usage errors, not data errors.
    let (dataset, grammar) = generate_dataset(&cfg.data.to_config()).map_err(|e| match e {
        DataError::Schema { .. } => usage(e.to_string()),
        other => other.into(),
    })?;
    write_dataset(&args.out, &dataset)?;

    let lengths = dataset.records.iter().map(|r| r.labels.len());
    let min_len = lengths.clone().min().unwrap_or(0);
    let max_len = lengths.max().unwrap_or(0);
    println!(
        "wrote {} sequences ({} classes, feature dim {}, lengths {min_len}..={max_len}) to {}",
        dataset.records.len(),
        grammar.num_classes,
        dataset.feature_dim,
        args.out.display()
    );
    Ok(())
}

#[derive(Args)]
pub struct TrainArgs {
    /// TOML run configuration; built-in defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset directory to train on.
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint file to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Base seed for parameter init, batch order, and noise draws.
    #[arg(long)]
    pub seed: u64,
    /// Optimizer steps to run; defaults to `[train]` epochs over the data.
    #[arg(long)]
    pub steps: Option<u64>,
    /// Continue from this checkpoint instead of fresh parameters.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Configuration override as section.key=value; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

pub fn train(args: &TrainArgs) -> Result<(), CliError> {
    let cfg = config::load(args.config.as_deref(), &args.set)?;
    config::log_config(&cfg);
    config::log_kv(&[
        ("seed", args.seed.to_string()),
        ("data", args.data.display().to_string()),
        ("out", args.out.display().to_string()),
    ]);
    let model = cfg.model.to_config();
    let diffusion = cfg.diffusion.to_config();
    let train = cfg.train.to_config(args.seed);

    let dataset = read_dataset(&args.data)?;
    if model.cond_dim != dataset.feature_dim {
        return Err(usage(format!(
            "model.cond_dim is {} but the dataset's feature dimension is {}",
            model.cond_dim, dataset.feature_dim
        )));
    }

    let mut trainer = match &args.resume {
        Some(path) => {
            let trainer = Trainer::load(path)?;
            // A resumed run only reproduces the uninterrupted one if it
            // continues under the exact configuration it started with.
            if trainer.gtan != model || trainer.diffusion != diffusion || trainer.train != train {
                return Err(usage(format!(
                    "checkpoint {} was written under a different configuration; \
                     resume with the original config and seed",
                    path.display()
                )));
            }
            eprintln!("resuming after {} steps", trainer.steps_done);
            trainer
        }
        None => Trainer::new(model, diffusion, train)?,
    };

    let items: Vec<TrainItem> = dataset
        .records
        .iter()
        .map(|r| prepare_train_item(r, trainer.train.alpha, trainer.train.beta))
        .collect::<Result<_, _>>()?;
    let steps = args
        .steps
        .unwrap_or_else(|| trainer.train.epochs as u64 * trainer.steps_per_epoch(items.len()));
    if steps == 0 {
        return Err(usage("nothing to do: the requested step count is zero"));
    }

    let log_every = (steps / 20).max(1);
    let losses = trainer.run_steps(&items, steps, |step, loss| {
        if step % log_every == 0 {
            eprintln!("step {step}: loss {loss:.6}");
        }
    })?;
    trainer.save(&args.out)?;
    println!(
        "trained {steps} steps ({} total), final loss {:.6}, wrote {}",
        trainer.steps_done,
        losses.last().expect("at least one step ran"),
        args.out.display()
    );
    Ok(())
}

#[derive(Args)]
pub struct SampleArgs {
    /// Trained checkpoint; its stored model and diffusion settings apply.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset directory to draw conditioning windows from.
    #[arg(long)]
    pub data: PathBuf,
    /// Prediction file to write (one JSON record per line).
    #[arg(long)]
    pub out: PathBuf,
    /// Observed fraction of each sequence.
    #[arg(long)]
    pub alpha: f64,
    /// Anticipated fraction of each sequence.
    #[arg(long)]
    pub beta: f64,
    /// Futures per sequence.
    #[arg(long, default_value_t = 25)]
    pub samples: usize,
    /// Base seed for the sampling noise streams.
    #[arg(long)]
    pub seed: u64,
}

pub fn sample(args: &SampleArgs) -> Result<(), CliError> {
    let trainer = Trainer::load(&args.checkpoint)?;
    eprintln!("resolved config (from checkpoint):");
    config::log_section("model", &trainer.gtan);
    config::log_section("diffusion", &trainer.diffusion);
    config::log_section("train", &trainer.train);
    config::log_kv(&[
        ("checkpoint", args.checkpoint.display().to_string()),
        ("data", args.data.display().to_string()),
        ("out", args.out.display().to_string()),
        ("alpha", args.alpha.to_string()),
        ("beta", args.beta.to_string()),
        ("samples", args.samples.to_string()),
        ("seed", args.seed.to_string()),
    ]);
    if args.samples == 0 {
        return Err(usage("--samples must be at least 1"));
    }
    let dataset = read_dataset(&args.data)?;

    let records = match trainer.train.mode {
        TrainMode::Deterministic => {
            if args.samples != 1 {
                return Err(usage(
                    "this checkpoint was trained in deterministic mode, which yields a \
                     single prediction per sequence; pass --samples 1",
                ));
            }
            predict_dataset_deterministic(
                &trainer.params,
                &trainer.gtan,
                &dataset,
                args.alpha,
                args.beta,
            )?
        }
        TrainMode::Stochastic => {
            let plan = SamplePlan {
                alpha: args.alpha,
                beta: args.beta,
                num_samples: args.samples,
                seed: args.seed,
            };
            predict_dataset(
                &trainer.params,
                &trainer.gtan,
                &trainer.diffusion,
                trainer.train.loss.reconstruction_map(),
                &dataset,
                &plan,
            )?
        }
    };
    write_predictions(&args.out, &records)?;
    println!(
        "wrote {} prediction records ({} per sequence, {} sequences) to {}",
        records.len(),
        args.samples,
        dataset.records.len(),
        args.out.display()
    );
    Ok(())
}

#[derive(Args)]
pub struct EvalArgs {
    /// TOML run configuration; only the `[eval]` section is consulted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset directory holding the ground truth.
    #[arg(long)]
    pub data: PathBuf,
    /// Prediction file to score.
    #[arg(long)]
    pub predictions: PathBuf,
    /// Report file; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Report format, overriding the `[eval]` section.
    #[arg(long, value_enum)]
    pub format: Option<ReportFormat>,
    /// Configuration override as section.key=value; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

pub fn eval(args: &EvalArgs) -> Result<(), CliError> {
    let cfg = config::load(args.config.as_deref(), &args.set)?;
    let format = args.format.unwrap_or(cfg.eval.format);
    config::log_config(&cfg);
    config::log_kv(&[
        ("data", args.data.display().to_string()),
        ("predictions", args.predictions.display().to_string()),
        ("format", format!("{format:?}").to_lowercase()),
    ]);

    let dataset = read_dataset(&args.data)?;
    let predictions = read_predictions(&args.predictions)?;
    let report = evaluate_predictions(&predictions, &dataset)?;
    let rendered = match format {
        ReportFormat::Text => render_report_text(&report),
        ReportFormat::Jsonl => render_report_jsonl(&report)?,
    };
    match &args.out {
        Some(path) => {
            std::fs::write(path, &rendered)
                .map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))?;
            println!("wrote report to {}", path.display());
        }
        None => print!("{rendered}"),
    }
    Ok(())
}

#[derive(Args)]
pub struct GradcheckArgs {
    /// Seed for the check points the suite evaluates gradients at.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

pub fn gradcheck(args: &GradcheckArgs) -> Result<(), CliError> {
    const TOLERANCE: f64 = 1e-4;
    config::log_kv(&[("seed", args.seed.to_string())]);

    let suite = run_gradient_suite(args.seed)?;
    for entry in &suite.entries {
        println!("{:<28} max rel err {:.3e}", entry.name, entry.max_rel_err);
    }
    let network = training_gradient_check(args.seed)?;
    println!("{:<28} max rel err {network:.3e}", "full_network_losses");

    let worst = suite.max_err().max(network);
    println!("overall max rel err {worst:.3e} (tolerance {TOLERANCE:.0e})");
    if worst < TOLERANCE {
        Ok(())
    } else {
        Err(CliError::Gradcheck(format!(
            "max relative error {worst:.3e} exceeds {TOLERANCE:.0e}"
        )))
    }
}

#[derive(Args)]
pub struct InspectGatesArgs {
    /// Trained checkpoint to inspect.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset directory providing the conditioning sequence.
    #[arg(long)]
    pub data: PathBuf,
    /// Array container file to write the gate activations into.
    #[arg(long)]
    pub out: PathBuf,
    /// Sequence to inspect; the dataset's first sequence when omitted.
    #[arg(long)]
    pub id: Option<String>,
    /// Observed fraction; the checkpoint's training value when omitted.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Anticipated fraction; the checkpoint's training value when omitted.
    #[arg(long)]
    pub beta: Option<f64>,
}

/// Runs one feature-driven forward pass (zero label inputs, no step
/// embedding) and dumps every sigmoid gate activation, so the dump depends
/// only on the checkpoint and the chosen sequence window.
pub fn inspect_gates(args: &InspectGatesArgs) -> Result<(), CliError> {
    let trainer = Trainer::load(&args.checkpoint)?;
    if trainer.gtan.gating_mode != GatingMode::Gated {
        return Err(usage(
            "checkpoint was trained with gating disabled; there are no gate activations to dump",
        ));
    }
    let dataset = read_dataset(&args.data)?;
    let record = match &args.id {
        Some(id) => dataset
            .records
            .iter()
            .find(|r| &r.id == id)
            .ok_or_else(|| usage(format!("sequence `{id}` is not in the dataset")))?,
        None => dataset
            .records
            .first()
            .ok_or_else(|| CliError::Data("dataset is empty".into()))?,
    };
    let alpha = args.alpha.unwrap_or(trainer.train.alpha);
    let beta = args.beta.unwrap_or(trainer.train.beta);
    eprintln!("resolved config (from checkpoint):");
    config::log_section("model", &trainer.gtan);
    config::log_kv(&[
        ("checkpoint", args.checkpoint.display().to_string()),
        ("data", args.data.display().to_string()),
        ("out", args.out.display().to_string()),
        ("id", record.id.clone()),
        ("alpha", alpha.to_string()),
        ("beta", beta.to_string()),
    ]);

    let item = prepare_train_item(record, alpha, beta)?;
    let frames = item.split.total();
    let zero_labels = Tensor::zeros(&[frames, trainer.gtan.num_classes]);
    let input = ForwardInput {
        noisy: &zero_labels,
        self_cond: &zero_labels,
        cond: &item.cond,
        step: None,
    };
    let (_, gates) = gtan_forward(&trainer.params, &trainer.gtan, &input, true)?;
    let gates = gates.expect("gate capture was requested");

    let mut container = ArrayContainer::new();
    for (name, tensor) in gates.named_arrays() {
        let data = tensor.data();
        let mean = data.iter().sum::<f64>() / data.len() as f64;
        let min = data.iter().copied().fold(f64::INFINITY, f64::min);
        let max = data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        println!(
            "{name}  [{} channels x {} frames]  mean {mean:.3}  min {min:.3}  max {max:.3}",
            tensor.dims()[0],
            tensor.dims()[1]
        );
        container.push(&name, tensor.clone())?;
    }
    container.set_text(Some(format!(
        "gate activations for {} over a {frames}-frame window (alpha={alpha}, beta={beta})",
        record.id
    )));
    container.write_file(&args.out)?;
    println!("wrote {} gate arrays to {}", container.len(), args.out.display());
    Ok(())
}
