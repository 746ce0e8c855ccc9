//! The four commands. Every emitted CSV carries a header row and the
//! resolved seed; reruns with identical inputs reproduce checkpoints and
//! metrics byte for byte (the history CSV's wall-clock column is the one
//! deliberately non-reproducible field).

use crate::checkpoint;
use crate::config::RunConfigFile;
use anyhow::{bail, Context, Result};
use mvae_core::evaluation::{
    cross_modality_accuracy, estimate_log_conditional, estimate_log_joint, estimate_log_marginal,
};
use mvae_core::model::{MultimodalBatch, SubsetMask};
use mvae_core::numerics::RngStream;
use mvae_core::selfcheck;
use mvae_core::training::{fully_paired, make_weak_split, train, TrainHistory};
use std::fmt::Write as _;
use std::path::Path;

/// Generator offset so evaluation draws a set disjoint from training.
const EVAL_SEED_OFFSET: u64 = 1;
/// Stream ids for the estimator and accuracy RNGs.
const EVAL_STREAM: u64 = 100;

fn write_artifact(out_dir: &Path, name: &str, bytes: &[u8]) -> Result<()> {
    std::fs::create_dir_all(out_dir)
        .with_context(|| format!("creating {}", out_dir.display()))?;
    let path = out_dir.join(name);
    std::fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn history_csv(history: &TrainHistory, seed: u64) -> String {
    let mut csv = String::from("epoch,objective,beta,seconds,seed\n");
    for e in &history.epochs {
        writeln!(csv, "{},{},{},{},{}", e.epoch, e.objective, e.beta, e.seconds, seed).unwrap();
    }
    csv
}

pub fn cmd_train(config_path: &Path, out_dir: &Path) -> Result<()> {
    let cfg = RunConfigFile::load(config_path)?;
    let dataset = cfg.build_dataset(0)?;
    let mut model = cfg.build_model()?;
    let pool = fully_paired(&dataset);
    let history = train(&mut model, &pool, &cfg.train_config()?)?;

    write_artifact(out_dir, "checkpoint.ckpt", &checkpoint::encode(&model))?;
    write_artifact(out_dir, "history.csv", history_csv(&history, cfg.seed).as_bytes())?;
    write_artifact(out_dir, "config.toml", cfg.to_toml()?.as_bytes())?;
    println!(
        "trained {} epochs; final objective {}",
        history.epochs.len(),
        history.epochs.last().map(|e| e.objective).unwrap_or(f64::NAN)
    );
    Ok(())
}

fn eval_batch(cfg: &RunConfigFile) -> Result<MultimodalBatch> {
    let ds = cfg.build_dataset(EVAL_SEED_OFFSET)?;
    let n = cfg.eval.n_examples.min(ds.n);
    Ok(fully_paired(&ds.subrange(0, n)))
}

pub fn cmd_eval(ckpt_path: &Path, config_path: &Path, out_dir: &Path) -> Result<()> {
    let cfg = RunConfigFile::load(config_path)?;
    let mut model = cfg.build_model()?;
    checkpoint::load_into(ckpt_path, &mut model)?;
    let batch = eval_batch(&cfg)?;
    let n_mod = model.n_modalities();
    let stream = RngStream::new(cfg.seed, EVAL_STREAM);

    let mut csv = String::from("estimator,targets,proposal,estimate,n_samples,log_weight_variance,seed\n");
    let mut row = |estimator: &str,
                   targets: &[usize],
                   report: mvae_core::evaluation::EstimatorReport|
     -> Result<()> {
        let targets = targets
            .iter()
            .map(ToString::to_string)
            .collect::<Vec<_>>()
            .join("+");
        let variance = report
            .log_weight_variance
            .map(|v| v.to_string())
            .unwrap_or_default();
        writeln!(
            csv,
            "{estimator},{targets},{},{},{},{variance},{}",
            report.proposal.replace(',', ";"),
            report.estimate,
            report.n_samples,
            cfg.seed
        )?;
        Ok(())
    };

    for proposal in &cfg.eval.proposals {
        let mask = SubsetMask::from_indices(n_mod, proposal);
        for target in 0..n_mod {
            let report =
                estimate_log_marginal(&model, &batch, target, &mask, cfg.eval.n_samples, &stream)?;
            row("marginal", &[target], report)?;
        }
        let all: Vec<usize> = (0..n_mod).collect();
        let report =
            estimate_log_joint(&model, &batch, &all, &mask, cfg.eval.n_samples, &stream)?;
        row("joint", &all, report)?;
    }
    for target in 0..n_mod {
        for given in 0..n_mod {
            if target == given {
                continue;
            }
            let report = estimate_log_conditional(
                &model,
                &batch,
                target,
                given,
                cfg.eval.n_samples,
                cfg.eval.n_prior_samples,
                &stream,
            )?;
            row("conditional", &[target, given], report)?;
        }
    }

    write_artifact(out_dir, "metrics.csv", csv.as_bytes())?;
    println!("wrote metrics for {} examples", batch.len());
    Ok(())
}

pub fn cmd_weaksweep(config_path: &Path, fractions: &[f64], out_dir: &Path) -> Result<()> {
    let cfg = RunConfigFile::load(config_path)?;
    if cfg.model.modalities.len() != 2 {
        bail!("weaksweep requires a bimodal configuration");
    }
    if fractions.is_empty() {
        bail!("no fractions given");
    }
    let dataset = cfg.build_dataset(0)?;
    let batch = eval_batch(&cfg)?;
    let mut csv = String::from("fraction,paired_count,accuracy,seed\n");
    for &fraction in fractions {
        let split = make_weak_split(&dataset, fraction, cfg.seed)?;
        let mut model = cfg.build_model()?;
        train(&mut model, &split.pool, &cfg.train_config()?)?;
        let accuracy = cross_modality_accuracy(
            &model,
            &batch,
            0,
            1,
            &RngStream::new(cfg.seed, EVAL_STREAM),
        )?;
        writeln!(csv, "{fraction},{},{accuracy},{}", split.n_paired, cfg.seed)?;
        println!("fraction {fraction}: paired {}, accuracy {accuracy}", split.n_paired);
    }
    write_artifact(out_dir, "weaksweep.csv", csv.as_bytes())?;
    Ok(())
}

pub fn cmd_check() -> Result<()> {
    let results = selfcheck::run_checks();
    let mut failed = 0;
    for r in &results {
        let tag = if r.passed { "PASS" } else { "FAIL" };
        println!("[{tag}] {}: {}", r.name, r.detail);
        if !r.passed {
            failed += 1;
        }
    }
    if failed > 0 {
        bail!("{failed} of {} checks failed", results.len());
    }
    println!("all {} checks passed", results.len());
    Ok(())
}
