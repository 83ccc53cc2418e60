use std::collections::HashMap;
use std::path::Path;

use anyhow::{Context, Result};
use pmk_core::clipselect::*;
use pmk_core::config::RunConfig;
use pmk_core::manifest::Split;
use pmk_core::metrics::{argmax, mean_class_accuracy};
use pmk_core::models::save_checkpoint;
use pmk_core::CoreError;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::data::Source;
use crate::run::{open_checkpoint, train_run};

const CLASSIFIER_DIR: &str = "classifier";
const RANKER_DIR: &str = "ranker";
const ORACLE_FILE: &str = "oracle.json";

#[derive(Debug, Serialize, Deserialize)]
struct OracleFile {
    k: usize,
    /// Video id → sorted oracle clip indices.
    sets: Vec<(String, Vec<usize>)>,
}

fn split_videos(all: Vec<(ClipVideo, Split)>, want: Split) -> Vec<ClipVideo> {
    all.into_iter().filter(|(_, s)| *s == want).map(|(v, _)| v).collect()
}

pub fn oracle(cfg: &RunConfig, data: &Path, out: &Path, window_fraction: f64) -> Result<()> {
    let src = Source::open(data, cfg.seed)?;
    let videos = src.videos(cfg, window_fraction)?;
    let ds = clip_dataset(&videos, src.num_classes());
    crate::write_config(out, cfg)?;
    let fcfg = clip_classifier_config(cfg);
    let summary = train_run(&fcfg, &ds, &out.join(CLASSIFIER_DIR))?;
    drop(ds);
    let (mut f, _) = open_checkpoint(&out.join(CLASSIFIER_DIR).join("checkpoints").join("best"))?;
    let train = split_videos(videos, Split::Train);
    let probs = clip_probabilities(&mut f, &train)?;
    let labels: Vec<usize> = train.iter().map(|v| v.label).collect();
    let o = build_oracle(&probs, &labels, cfg.oracle_k)?;
    let file = OracleFile {
        k: o.k,
        sets: train.iter().map(|v| v.id.clone()).zip(o.sets).collect(),
    };
    pmk_core::io::write_json(&out.join(ORACLE_FILE), &file)?;
    println!(
        "{}",
        json!({ "run": out, "clip_accuracy": summary.best_metric, "videos": train.len(), "k": o.k })
    );
    Ok(())
}

fn read_oracle(run: &Path, videos: &[ClipVideo]) -> Result<Oracle> {
    let path = run.join(ORACLE_FILE);
    let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let file: OracleFile =
        serde_json::from_str(&text).map_err(|e| CoreError::Config(format!("{}: {e}", path.display())))?;
    let sets: HashMap<&str, &Vec<usize>> = file.sets.iter().map(|(id, s)| (id.as_str(), s)).collect();
    let mut o = Oracle {
        k: file.k,
        sets: Vec::new(),
        hard: Vec::new(),
    };
    for v in videos {
        let set = sets
            .get(v.id.as_str())
            .ok_or_else(|| CoreError::Config(format!("{}: no oracle for video {}", path.display(), v.id)))?;
        let mut hard = vec![false; v.clips.len()];
        for &c in set.iter() {
            *hard
                .get_mut(c)
                .ok_or_else(|| CoreError::Config(format!("{}: clip {c} out of range for {}", path.display(), v.id)))? =
                true;
        }
        o.sets.push(set.to_vec());
        o.hard.push(hard);
    }
    Ok(o)
}

pub fn train(cfg: &RunConfig, data: &Path, run: &Path, window_fraction: f64) -> Result<()> {
    let src = Source::open(data, cfg.seed)?;
    let train = split_videos(src.videos(cfg, window_fraction)?, Split::Train);
    let oracle = read_oracle(run, &train)?;
    let outcome = train_ranker(&train, &oracle, cfg)?;
    let dir = run.join(RANKER_DIR);
    let steps = (cfg.ranker_epochs * cfg.ranker_pairs.div_ceil((cfg.batch_size / 2).max(1))) as u64;
    save_checkpoint(&dir, &outcome.net, &cfg.hash(), steps)?;
    crate::write_config(&dir, cfg)?;
    pmk_core::io::write_json(
        &dir.join("metrics.json"),
        &json!({ "config_hash": cfg.hash(), "epochs": outcome.history, "skipped": outcome.skipped }),
    )?;
    let last = outcome.history.last();
    println!(
        "{}",
        json!({ "run": run, "pair_accuracy": last.map(|r| r.pair_accuracy), "loss": last.map(|r| r.loss) })
    );
    Ok(())
}

#[derive(Debug, Serialize)]
pub struct SelectReport {
    pub k_select: usize,
    pub videos: usize,
    pub selected_accuracy: f64,
    pub dense_accuracy: f64,
    pub random_accuracy: f64,
    /// Fraction of videos whose selected prediction equals the dense one.
    pub dense_agreement: f64,
    pub action_auc: Option<f64>,
}

pub fn select(cfg: &RunConfig, data: &Path, run: &Path, k: Option<usize>, window_fraction: f64) -> Result<()> {
    let k = k.unwrap_or(cfg.k_select);
    if k == 0 {
        return Err(CoreError::Config("k must be at least 1".into()).into());
    }
    let src = Source::open(data, cfg.seed)?;
    let nc = src.num_classes();
    let val = split_videos(src.videos(cfg, window_fraction)?, Split::Val);
    if val.is_empty() {
        return Err(CoreError::invalid_input("no held-out videos").into());
    }
    let (mut f, _) = open_checkpoint(&run.join(CLASSIFIER_DIR).join("checkpoints").join("best"))?;
    let (mut ranker, _) = open_checkpoint(&run.join(RANKER_DIR))?;
    let saliency = score_clips(&mut ranker, &val)?;
    let probs = clip_probabilities(&mut f, &val)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let path = run.join(format!("selection_k{k}.csv"));
    let mut w = csv::Writer::from_path(&path).with_context(|| format!("writing {}", path.display()))?;
    let mut header = vec!["video".to_string(), "label".into(), "clip".into(), "saliency".into(), "selected".into(), "action".into()];
    header.extend((0..nc).map(|c| format!("p{c}")));
    w.write_record(&header)?;

    let labels: Vec<usize> = val.iter().map(|v| v.label).collect();
    let (mut sel, mut dense, mut rand_pred) = (Vec::new(), Vec::new(), Vec::new());
    for ((v, s), p) in val.iter().zip(&saliency).zip(&probs) {
        let chosen = select_from_scores(s, p, k, cfg.consensus)?;
        sel.push(chosen.prediction);
        dense.push(dense_prediction(p, cfg.consensus)?);
        let r = random_selection(p.len(), k, &mut rng);
        let rows: Vec<&[f64]> = r.iter().map(|&i| p[i].as_slice()).collect();
        rand_pred.push(argmax(&consensus(&rows, cfg.consensus)?));
        for c in 0..p.len() {
            let mut row = vec![
                v.id.clone(),
                v.label.to_string(),
                c.to_string(),
                format!("{:.6}", s[c]),
                u8::from(chosen.selected.contains(&c)).to_string(),
                v.action.as_ref().map_or(String::new(), |a| u8::from(a[c]).to_string()),
            ];
            row.extend(p[c].iter().map(|x| format!("{x:.6}")));
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    let acc = |pred: &[usize]| -> Result<f64> { Ok(mean_class_accuracy(pred, &labels, nc)?.mean) };
    let report = SelectReport {
        k_select: k,
        videos: val.len(),
        selected_accuracy: acc(&sel)?,
        dense_accuracy: acc(&dense)?,
        random_accuracy: acc(&rand_pred)?,
        dense_agreement: sel.iter().zip(&dense).filter(|(a, b)| a == b).count() as f64 / val.len() as f64,
        action_auc: action_auc(&saliency, &val),
    };
    pmk_core::io::write_json(&run.join(format!("selection_k{k}.json")), &report)?;
    println!("{}", serde_json::to_string(&report)?);
    Ok(())
}
