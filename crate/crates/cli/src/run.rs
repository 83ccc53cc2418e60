use std::path::Path;

use anyhow::{Context, Result};
use pmk_core::config::RunConfig;
use pmk_core::joints::NAMES;
use pmk_core::manifest::Split;
use pmk_core::metrics::mean_class_accuracy;
use pmk_core::models::{load_checkpoint, save_checkpoint, Network};
use pmk_core::training::{evaluate, gate_stats, score, train_classifier, Dataset, EpochRecord, Predictions};
use pmk_core::CoreError;
use serde::Serialize;
use serde_json::json;

use crate::data::Source;

#[derive(Debug, Serialize)]
pub struct Summary {
    pub best_epoch: usize,
    pub best_metric: f64,
    pub final_metric: f64,
    pub steps: u64,
    pub per_class: Vec<Option<f64>>,
    pub gate_mean: Vec<f64>,
    pub gate_std: Vec<f64>,
}

#[derive(Debug, Serialize)]
struct Report<'a> {
    config_hash: String,
    metric: &'static str,
    num_classes: usize,
    num_train: usize,
    num_val: usize,
    epochs: &'a [EpochRecord],
    summary: &'a Summary,
}

fn metric_name(cfg: &RunConfig) -> &'static str {
    if cfg.multi_label {
        "mAP"
    } else {
        "mean_class_accuracy"
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

pub fn write_gate_report(path: &Path, gates: &[Vec<f64>]) -> Result<()> {
    let (m, s) = gate_stats(gates);
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    w.write_record(["joint", "name", "mean", "std"])?;
    for (j, (m, s)) in m.iter().zip(&s).enumerate() {
        let name = NAMES.get(j).copied().unwrap_or("?");
        w.write_record([j.to_string(), name.to_string(), format!("{m:.6}"), format!("{s:.6}")])?;
    }
    w.flush()?;
    Ok(())
}

fn per_class(preds: &Predictions, ds: &[pmk_core::training::Sample], k: usize, multi_label: bool) -> Result<Vec<Option<f64>>> {
    if multi_label {
        return Ok(Vec::new());
    }
    let labels: Vec<usize> = ds.iter().map(|s| s.label).collect();
    Ok(mean_class_accuracy(&preds.classes(), &labels, k)?.per_class)
}

/// Trains on `ds` and writes the run directory. Timings go to a separate
/// file so that `metrics.json` depends only on config and data.
pub fn train_run(cfg: &RunConfig, ds: &Dataset, out: &Path) -> Result<Summary> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    crate::write_config(out, cfg)?;
    let csv_path = out.join("metrics.csv");
    let mut w = csv::Writer::from_path(&csv_path).with_context(|| format!("writing {}", csv_path.display()))?;
    w.write_record(["epoch", "loss", "reg_loss", "train_accuracy", "val_metric", "lr", "gate_mean", "gate_std"])?;
    let mut csv_err = None;
    let outcome = train_classifier(ds, cfg, |r| {
        let row = [
            r.epoch.to_string(),
            format!("{:.6}", r.loss),
            format!("{:.6}", r.reg_loss),
            format!("{:.6}", r.train_accuracy),
            format!("{:.6}", r.val_metric),
            format!("{:e}", r.lr),
            format!("{:.6}", mean(&r.gate_mean)),
            format!("{:.6}", mean(&r.gate_std)),
        ];
        if let Err(e) = w.write_record(&row).and_then(|_| Ok(w.flush()?)) {
            csv_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = csv_err {
        return Err(e.into());
    }
    let mut net = outcome.net;
    let ckpt = out.join("checkpoints").join("best");
    save_checkpoint(&ckpt, &net, &cfg.hash(), outcome.steps)?;
    crate::write_config(&ckpt, cfg)?;

    let (metric, preds) = evaluate(&mut net, &ds.val, ds.num_classes, cfg.multi_label)?;
    let (gate_mean, gate_std) = preds.gates.as_deref().map(gate_stats).unwrap_or_default();
    if let Some(g) = preds.gates.as_deref() {
        write_gate_report(&out.join("gate_report.csv"), g)?;
    }
    let summary = Summary {
        best_epoch: outcome.best_epoch,
        best_metric: metric,
        final_metric: outcome.history.last().map_or(0.0, |r| r.val_metric),
        steps: outcome.steps,
        per_class: per_class(&preds, &ds.val, ds.num_classes, cfg.multi_label)?,
        gate_mean,
        gate_std,
    };
    let report = Report {
        config_hash: cfg.hash(),
        metric: metric_name(cfg),
        num_classes: ds.num_classes,
        num_train: ds.train.len(),
        num_val: ds.val.len(),
        epochs: &outcome.history,
        summary: &summary,
    };
    pmk_core::io::write_json(&out.join("metrics.json"), &report)?;
    pmk_core::io::write_json(
        &out.join("timings.json"),
        &json!({
            "seconds": outcome.seconds,
            "seconds_per_epoch": outcome.seconds / cfg.epochs.max(1) as f64,
        }),
    )?;
    Ok(summary)
}

pub fn train(cfg: &RunConfig, data: &Path, out: &Path) -> Result<()> {
    let ds = Source::open(data, cfg.seed)?.dataset(cfg)?;
    let s = train_run(cfg, &ds, out)?;
    println!(
        "{}",
        json!({ "run": out, "best_epoch": s.best_epoch, "best_metric": s.best_metric, "final_metric": s.final_metric })
    );
    Ok(())
}

fn parse_split(s: &str) -> Result<Split> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        other => Err(CoreError::Config(format!("unknown split {other:?}, expected train or val")).into()),
    }
}

/// Loads a checkpoint written by `train` together with its run config.
pub fn open_checkpoint(dir: &Path) -> Result<(Network<f32>, RunConfig)> {
    let (net, index) = load_checkpoint(dir)?;
    let cfg = RunConfig::load(&dir.join("config.json"))?;
    if cfg.hash() != index.config_hash {
        return Err(CoreError::Config(format!(
            "{}: config hash {} does not match checkpoint hash {}",
            dir.display(),
            cfg.hash(),
            index.config_hash
        ))
        .into());
    }
    Ok((net, cfg))
}

fn load_split(cfg: &RunConfig, data: &Path, split: &str) -> Result<(Dataset, Split)> {
    let split = parse_split(split)?;
    let ds = Source::open(data, cfg.seed)?.dataset(cfg)?;
    if ds.split(split).is_empty() {
        return Err(CoreError::invalid_input(format!("split {split} is empty")).into());
    }
    Ok((ds, split))
}

pub fn eval(checkpoint: &Path, data: &Path, split: &str, out: Option<&Path>) -> Result<()> {
    let (mut net, cfg) = open_checkpoint(checkpoint)?;
    let (ds, split) = load_split(&cfg, data, split)?;
    let samples = ds.split(split);
    if net.spec.outputs != ds.num_classes || net.spec.joints != ds.joints() {
        return Err(CoreError::Config(format!(
            "checkpoint expects {} classes and {} joints, data has {} and {}",
            net.spec.outputs,
            net.spec.joints,
            ds.num_classes,
            ds.joints()
        ))
        .into());
    }
    let (metric, preds) = evaluate(&mut net, samples, ds.num_classes, cfg.multi_label)?;
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    debug_assert_eq!(metric, score(&preds, &labels, ds.num_classes, cfg.multi_label)?);
    let report = json!({
        "config_hash": cfg.hash(),
        "split": split,
        "samples": samples.len(),
        "metric": metric_name(&cfg),
        "value": metric,
        "per_class": per_class(&preds, samples, ds.num_classes, cfg.multi_label)?,
    });
    if let Some(p) = out {
        pmk_core::io::write_json(p, &report)?;
    }
    println!("{report}");
    Ok(())
}

pub fn gate_report(checkpoint: &Path, data: &Path, split: &str, out: &Path) -> Result<()> {
    let (mut net, cfg) = open_checkpoint(checkpoint)?;
    let (ds, split) = load_split(&cfg, data, split)?;
    let (_, preds) = evaluate(&mut net, ds.split(split), ds.num_classes, cfg.multi_label)?;
    let gates = preds
        .gates
        .ok_or_else(|| CoreError::invalid_input("the checkpoint has no joint gates (baseline model)"))?;
    write_gate_report(out, &gates)?;
    println!("{}", json!({ "out": out, "samples": gates.len() }));
    Ok(())
}

pub fn sweep(cfg: &RunConfig, data: &Path, betas: &[usize], gammas: &[usize], out: &Path) -> Result<()> {
    let base = Source::open(data, cfg.seed)?;
    let mut grid = vec![vec![0.0; gammas.len()]; betas.len()];
    let mut cells = Vec::new();
    let mut cache: Option<Dataset> = None;
    for (bi, &beta) in betas.iter().enumerate() {
        for (gi, &gamma) in gammas.iter().enumerate() {
            let c = RunConfig {
                beta,
                gamma,
                ..cfg.clone()
            };
            c.validate()?;
            let ds = match &cache {
                Some(d) => d,
                None => cache.insert(base.dataset(&c)?),
            };
            let s = train_run(&c, ds, &out.join(format!("b{beta}_g{gamma}")))?;
            grid[bi][gi] = s.best_metric;
            cells.push(json!({ "beta": beta, "gamma": gamma, "best_metric": s.best_metric, "final_metric": s.final_metric }));
        }
    }
    let path = out.join("sweep.csv");
    let mut w = csv::Writer::from_path(&path).with_context(|| format!("writing {}", path.display()))?;
    let mut header = vec!["beta\\gamma".to_string()];
    header.extend(gammas.iter().map(|g| g.to_string()));
    w.write_record(&header)?;
    for (b, row) in betas.iter().zip(&grid) {
        let mut r = vec![b.to_string()];
        r.extend(row.iter().map(|v| format!("{v:.4}")));
        w.write_record(&r)?;
    }
    w.flush()?;
    pmk_core::io::write_json(&out.join("sweep.json"), &cells)?;
    println!("{}", json!({ "out": path, "cells": cells.len() }));
    Ok(())
}
