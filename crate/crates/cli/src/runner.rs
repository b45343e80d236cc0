//! Subcommand orchestration and artifact writing.
//!
//! Every artifact embeds the resolved config, is built fully in memory, and
//! only then lands on disk, so a failed run leaves no partial outputs and a
//! repeated run writes byte-identical files.

use std::fs;
use std::path::{Path, PathBuf};

use anadp_core::accountant::{calibrate_sigma, default_order_grid, PrivacySpec};
use anadp_core::exposure::{
    exposure_bits, insert_canaries, rank_of, score_candidates, CanaryKind, CanarySpec,
    ExposureReport,
};
use anadp_core::model::{Example, ModelKind, ModelSpec};
use anadp_core::stats::paired_one_tailed_t;
use anadp_core::trainer::{train, TrainMode, TrainOutcome};
use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use crate::config::ExperimentConfig;
use crate::data::{load_dataset, split_train_val, LoadedDataset};

// ============================================================================

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Train,
    Calibrate,
    Exposure,
    Compare,
    Heatmap,
}

pub struct RunOutput {
    /// One-line result for stdout.
    pub summary: String,
    pub files: Vec<PathBuf>,
}

pub fn run(command: Command, cfg: &ExperimentConfig, out_dir: &Path) -> Result<RunOutput> {
    let (summary, artifacts) = match command {
        Command::Train => run_train(cfg)?,
        Command::Calibrate => run_calibrate(cfg)?,
        Command::Exposure => run_exposure(cfg)?,
        Command::Compare => run_compare(cfg)?,
        Command::Heatmap => run_heatmap(cfg)?,
    };
    let files = write_all(out_dir, artifacts)?;
    Ok(RunOutput { summary, files })
}

// ============================================================================

/// The model plus the exact example sets a run will see; shared by every
/// subcommand so calibration, training, and scoring agree on the data.
struct Materialized {
    model: ModelSpec,
    train_set: Vec<Example>,
    eval_set: Option<Vec<Example>>,
    /// Present when a canary was planted: the spec and the drawn secret.
    canary: Option<(CanarySpec, Vec<u32>)>,
}

fn materialize(cfg: &ExperimentConfig) -> Result<Materialized> {
    let model = cfg.model.clone().resolved()?;
    match load_dataset(&cfg.dataset)? {
        LoadedDataset::Labeled(examples) => {
            if cfg.canary.is_some() {
                bail!("canary blocks apply only to canary_text datasets");
            }
            let (train_set, eval_set) = split_train_val(
                examples,
                cfg.dataset.val_fraction(),
                cfg.dataset.split_seed(),
            )?;
            Ok(Materialized { model, train_set, eval_set, canary: None })
        }
        LoadedDataset::Text(text) => {
            if model.kind != ModelKind::CharLm {
                bail!("canary_text datasets train the char_lm model");
            }
            let (text, canary) = match &cfg.canary {
                Some(block) => {
                    let spec = block.to_spec()?;
                    let (poisoned, secret) = insert_canaries(&text, &spec, block.seed)?;
                    (poisoned, Some((spec, secret)))
                }
                None => (text, None),
            };
            let train_set = text.windows(model.context_len)?;
            Ok(Materialized { model, train_set, eval_set: None, canary })
        }
    }
}

fn train_cell(
    cfg: &ExperimentConfig,
    materialized: &Materialized,
    seed: u64,
    mode: TrainMode,
) -> Result<TrainOutcome> {
    let mut train_cfg = cfg.train.clone();
    train_cfg.seed = seed;
    train_cfg.mode = mode;
    Ok(train(
        &materialized.model,
        &train_cfg,
        &materialized.train_set,
        materialized.eval_set.as_deref(),
    )?)
}

/// Sampling rate and step count exactly as the trainer derives them.
fn sampling_geometry(cfg: &ExperimentConfig, train_size: usize) -> Result<(f64, u64)> {
    if cfg.train.batch_size > train_size {
        bail!("batch_size {} exceeds training set size {train_size}", cfg.train.batch_size);
    }
    let steps = cfg.train.epochs * (train_size / cfg.train.batch_size);
    Ok((cfg.train.batch_size as f64 / train_size as f64, steps as u64))
}

// ============================================================================

type Artifacts = Vec<(String, Vec<u8>)>;

fn run_train(cfg: &ExperimentConfig) -> Result<(String, Artifacts)> {
    let materialized = materialize(cfg)?;
    let outcome = train_cell(cfg, &materialized, cfg.train.seed, cfg.train.mode)?;
    let summary = describe_record(&outcome);
    let doc = json!({ "config": cfg, "record": outcome.record });
    Ok((summary, vec![("train.json".into(), to_json_bytes(&doc)?)]))
}

fn describe_record(outcome: &TrainOutcome) -> String {
    let record = &outcome.record;
    let accuracy = match record.final_accuracy {
        Some(acc) => format!("final accuracy {acc:.4}"),
        None => "no held-out evaluation".to_string(),
    };
    let epsilon = match record.epsilon_spent {
        Some(eps) => format!("epsilon {eps:.4}"),
        None => "no privacy accounting".to_string(),
    };
    format!(
        "{} run: {} steps, {accuracy}, {epsilon}",
        record.mode.name(),
        record.steps_total
    )
}

fn run_calibrate(cfg: &ExperimentConfig) -> Result<(String, Artifacts)> {
    let budget = cfg
        .train
        .privacy
        .ok_or_else(|| anyhow::anyhow!("calibrate needs a [train.privacy] block"))?;
    let materialized = materialize(cfg)?;
    let (sampling_rate, steps) = sampling_geometry(cfg, materialized.train_set.len())?;
    if steps == 0 {
        bail!("calibration needs at least one training step");
    }
    let spec = PrivacySpec {
        epsilon: budget.epsilon,
        delta: budget.delta,
        sampling_rate,
        steps,
    };
    let sigma0 = calibrate_sigma(&spec, &default_order_grid())?;
    let summary = format!(
        "sigma0 = {sigma0:.6} for epsilon {} (delta {}, sampling rate {sampling_rate:.6}, {steps} steps)",
        budget.epsilon, budget.delta
    );
    let doc = json!({
        "config": cfg,
        "sampling_rate": sampling_rate,
        "steps": steps,
        "sigma0": sigma0,
    });
    Ok((summary, vec![("calibrate.json".into(), to_json_bytes(&doc)?)]))
}

fn run_exposure(cfg: &ExperimentConfig) -> Result<(String, Artifacts)> {
    if cfg.canary.is_none() {
        bail!("exposure needs a [canary] block");
    }
    let materialized = materialize(cfg)?;
    let (spec, secret) = materialized.canary.clone().expect("canary checked above");
    let outcome = train_cell(cfg, &materialized, cfg.train.seed, cfg.train.mode)?;
    let ranked = score_candidates(&materialized.model, &outcome.params, &spec)?;
    let rank = rank_of(&ranked, &secret)?;
    let bits = exposure_bits(rank, spec.space_size())?;
    let mrr = match spec.kind {
        CanaryKind::NameToken { .. } => Some(1.0 / rank as f64),
        CanaryKind::DigitSequence { .. } => None,
    };
    let report = ExposureReport {
        mode: cfg.train.mode,
        canary_rank: rank,
        space_size: spec.space_size(),
        exposure_bits: bits,
        secret,
        mrr,
    };
    let summary = format!(
        "{} exposure: rank {rank} of {} candidates, {bits:.3} bits",
        cfg.train.mode.name(),
        report.space_size
    );
    let doc = json!({ "config": cfg, "record": outcome.record, "report": report });
    Ok((summary, vec![("exposure.json".into(), to_json_bytes(&doc)?)]))
}

// ============================================================================

#[derive(Debug, Serialize)]
struct CompareRow {
    seed: u64,
    accuracies: Vec<f64>,
}

fn run_compare(cfg: &ExperimentConfig) -> Result<(String, Artifacts)> {
    let comparison = cfg
        .comparison
        .clone()
        .ok_or_else(|| anyhow::anyhow!("compare needs a [comparison] block"))?;
    comparison.validate()?;
    if cfg.dataset.val_fraction() == 0.0 {
        bail!("compare needs val_fraction > 0 to measure accuracy");
    }
    let materialized = materialize(cfg)?;

    let cells: Vec<(TrainMode, u64)> = comparison
        .seeds
        .iter()
        .flat_map(|&seed| comparison.modes.iter().map(move |&mode| (mode, seed)))
        .collect();
    let outcomes: Vec<TrainOutcome> = cells
        .par_iter()
        .map(|&(mode, seed)| train_cell(cfg, &materialized, seed, mode))
        .collect::<Result<_>>()?;

    let accuracy_of = |outcome: &TrainOutcome| -> Result<f64> {
        outcome
            .record
            .final_accuracy
            .ok_or_else(|| anyhow::anyhow!("comparison cell produced no accuracy"))
    };
    let mut rows = Vec::with_capacity(comparison.seeds.len());
    let mut diffs = Vec::with_capacity(comparison.seeds.len());
    for (i, &seed) in comparison.seeds.iter().enumerate() {
        let first = accuracy_of(&outcomes[2 * i])?;
        let second = accuracy_of(&outcomes[2 * i + 1])?;
        diffs.push(second - first);
        rows.push(CompareRow { seed, accuracies: vec![first, second] });
    }
    let test = paired_one_tailed_t(&diffs)?;

    let names: Vec<&str> = comparison.modes.iter().map(|m| m.name()).collect();
    let mean = |k: usize| rows.iter().map(|r| r.accuracies[k]).sum::<f64>() / rows.len() as f64;
    let summary = format!(
        "{} mean {:.4} vs {} mean {:.4}; {} - {}: mean diff {:+.4}, t {:.3}, one-tailed p {:.4}",
        names[0],
        mean(0),
        names[1],
        mean(1),
        names[1],
        names[0],
        test.mean_diff,
        test.t,
        test.p
    );

    let epsilon_spent = outcomes.first().and_then(|o| o.record.epsilon_spent);
    let doc = json!({
        "config": cfg,
        "modes": names,
        "rows": rows,
        "mean_accuracies": [mean(0), mean(1)],
        "direction": format!("{} - {}", names[1], names[0]),
        "t_test": test,
        "epsilon_spent": epsilon_spent,
    });

    let mut csv = String::new();
    csv.push_str(&config_comment(cfg)?);
    csv.push_str(&format!("seed,{},{}\n", names[0], names[1]));
    for row in &rows {
        csv.push_str(&format!("{},{},{}\n", row.seed, row.accuracies[0], row.accuracies[1]));
    }

    Ok((
        summary,
        vec![
            ("compare.json".into(), to_json_bytes(&doc)?),
            ("compare.csv".into(), csv.into_bytes()),
        ],
    ))
}

// ============================================================================

fn run_heatmap(cfg: &ExperimentConfig) -> Result<(String, Artifacts)> {
    let mut cfg = cfg.clone();
    if cfg.train.noise_log_every == 0 {
        cfg.train.noise_log_every = 1;
    }
    if !cfg.train.mode.is_private() {
        bail!("heatmap needs a private mode; non_private adds no noise");
    }
    let materialized = materialize(&cfg)?;
    let outcome = train_cell(&cfg, &materialized, cfg.train.seed, cfg.train.mode)?;
    let record = &outcome.record;
    let sigma0 = record
        .sigma0
        .filter(|&s| s > 0.0)
        .ok_or_else(|| anyhow::anyhow!("heatmap needs a positive noise multiplier"))?;
    let base = sigma0 * record.clip_norm;

    let mut csv = String::new();
    csv.push_str(&config_comment(&cfg)?);
    csv.push_str("step,group,stddev\n");
    for log in &record.noise {
        for group in &log.groups {
            csv.push_str(&format!(
                "{},{},{:.8e}\n",
                log.step,
                group.label,
                base * group.stddev_multiplier
            ));
        }
    }
    let summary = format!(
        "{} heatmap: {} steps logged, base noise stddev {base:.6}",
        record.mode.name(),
        record.noise.len()
    );
    Ok((summary, vec![("heatmap.csv".into(), csv.into_bytes())]))
}

// ============================================================================

fn to_json_bytes<T: Serialize>(doc: &T) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(doc)?;
    bytes.push(b'\n');
    Ok(bytes)
}

/// First line of every CSV artifact: the resolved config as one JSON object.
fn config_comment(cfg: &ExperimentConfig) -> Result<String> {
    Ok(format!("# config: {}\n", serde_json::to_string(cfg)?))
}

/// Writes artifacts through temp files and rolls everything back if any of
/// them fails, so output directories never hold partial results.
fn write_all(dir: &Path, artifacts: Artifacts) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)
        .with_context(|| format!("creating output directory {}", dir.display()))?;
    let mut written = Vec::new();
    for (name, bytes) in artifacts {
        let path = dir.join(&name);
        let tmp = dir.join(format!("{name}.tmp"));
        let attempt = fs::write(&tmp, &bytes).and_then(|()| fs::rename(&tmp, &path));
        if let Err(error) = attempt {
            let _ = fs::remove_file(&tmp);
            for earlier in &written {
                let _ = fs::remove_file(earlier);
            }
            return Err(error).with_context(|| format!("writing {}", path.display()));
        }
        written.push(path);
    }
    Ok(written)
}
