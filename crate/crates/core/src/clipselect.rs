//! Clip selection for untrimmed videos: oracle clips from a clip classifier,
//! a pairwise saliency ranker, and top-K selection with a consensus over the
//! kept clips.

use pmk_tensor::optim::{Adam, AdamConfig, Plateau};
use pmk_tensor::parallel;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{augment, AugmentParams};
use crate::config::{Consensus, ModelKind, RankLoss, RunConfig};
use crate::encoding::{encode, HeatmapSequence, PoseRepresentation};
use crate::error::{CoreError, Result};
use crate::joints::JointGroups;
use crate::metrics::{argmax, auc};
use crate::models::{batch_input, GateMode, Network};
use crate::io::read_tensor;
use crate::manifest::{Manifest, Split};
use crate::synth::{generate_untrimmed_sample, SynthSpec, CLIP_LEN};
use crate::training::{net_spec, predict, recalibrate_batch_norm, stream, Dataset, Sample};

pub const MAX_CLIPS: usize = 24;

/// Frame indices of each clip: contiguous 16-frame windows, the last one
/// completed by looping from the start, at most 24 (uniformly subsampled).
pub fn clip_frames(frames: usize) -> Result<Vec<Vec<usize>>> {
    if frames < CLIP_LEN {
        return Err(CoreError::invalid(
            "split_clips",
            format!("need at least {CLIP_LEN} frames, got {frames}"),
        ));
    }
    let n = frames.div_ceil(CLIP_LEN);
    let all: Vec<Vec<usize>> = (0..n)
        .map(|k| (k * CLIP_LEN..(k + 1) * CLIP_LEN).map(|t| t % frames).collect())
        .collect();
    if n <= MAX_CLIPS {
        return Ok(all);
    }
    Ok((0..MAX_CLIPS).map(|i| all[i * n / MAX_CLIPS].clone()).collect())
}

pub fn split_clips<T: pmk_tensor::Scalar>(seq: &HeatmapSequence<T>) -> Result<Vec<HeatmapSequence<T>>> {
    clip_frames(seq.frames)?
        .iter()
        .map(|f| seq.select_frames(f))
        .collect()
}

#[derive(Debug, Clone)]
pub struct ClipVideo {
    pub id: String,
    pub label: usize,
    /// One encoded representation per clip, in clip order.
    pub clips: Vec<PoseRepresentation<f32>>,
    /// Ground-truth action-bearing flag per clip, when known.
    pub action: Option<Vec<bool>>,
}

impl ClipVideo {
    pub fn from_sequence(
        id: impl Into<String>,
        label: usize,
        seq: &HeatmapSequence<f32>,
        cfg: &RunConfig,
        action: Option<Vec<bool>>,
    ) -> Result<Self> {
        let clips = split_clips(seq)?
            .iter()
            .map(|c| encode(c, cfg.channels, cfg.norm))
            .collect::<Result<Vec<_>>>()?;
        Ok(ClipVideo {
            id: id.into(),
            label,
            clips,
            action,
        })
    }
}

/// Softmax-normalized classifier outputs for every clip of every video.
pub fn clip_probabilities(f: &mut Network<f32>, videos: &[ClipVideo]) -> Result<Vec<Vec<Vec<f64>>>> {
    videos
        .iter()
        .map(|v| Ok(predict(f, &v.clips.iter().collect::<Vec<_>>())?.probabilities()))
        .collect()
}

/// Indices of the `k` largest values, ties broken by lower index.
pub fn top_k(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx.sort_unstable();
    idx
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Oracle {
    pub k: usize,
    /// Per video, the sorted oracle clip indices.
    pub sets: Vec<Vec<usize>>,
    /// Per video, a 0/1 label for every clip.
    pub hard: Vec<Vec<bool>>,
}

/// Per video, the `k` clips with the highest true-class probability.
pub fn build_oracle(probs: &[Vec<Vec<f64>>], labels: &[usize], k: usize) -> Result<Oracle> {
    if probs.len() != labels.len() {
        return Err(CoreError::invalid(
            "build_oracle",
            format!("{} videos with logits, {} labels", probs.len(), labels.len()),
        ));
    }
    if k == 0 {
        return Err(CoreError::invalid("build_oracle", "K must be at least 1"));
    }
    let mut sets = Vec::with_capacity(probs.len());
    let mut hard = Vec::with_capacity(probs.len());
    for (i, (p, &y)) in probs.iter().zip(labels).enumerate() {
        if p.is_empty() {
            return Err(CoreError::invalid("build_oracle", format!("video {i} has no clip logits")));
        }
        let conf: Vec<f64> = p
            .iter()
            .map(|z| {
                z.get(y).copied().ok_or_else(|| {
                    CoreError::invalid("build_oracle", format!("video {i}: no logit for class {y}"))
                })
            })
            .collect::<Result<_>>()?;
        let set = top_k(&conf, k.min(conf.len()));
        let mut h = vec![false; conf.len()];
        for &c in &set {
            h[c] = true;
        }
        sets.push(set);
        hard.push(h);
    }
    Ok(Oracle { k, sets, hard })
}

/// Pairwise loss of one (oracle, non-oracle) score difference `d = s(o) − s(n)`.
pub fn pair_loss(d: f64, loss: RankLoss, margin: f64) -> f64 {
    match loss {
        RankLoss::Logistic => pmk_tensor::softplus(-d),
        RankLoss::Margin => (margin - d).max(0.0),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RankerEpoch {
    pub epoch: usize,
    pub loss: f64,
    pub pair_accuracy: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct RankerOutcome {
    pub net: Network<f32>,
    pub history: Vec<RankerEpoch>,
    /// Videos without both an oracle and a non-oracle clip.
    pub skipped: usize,
}

/// Trains a one-output model so oracle clips outscore non-oracle clips of the
/// same video. Each batch holds `batch_size / 2` pairs.
pub fn train_ranker(videos: &[ClipVideo], oracle: &Oracle, cfg: &RunConfig) -> Result<RankerOutcome> {
    cfg.validate()?;
    if videos.len() != oracle.hard.len() {
        return Err(CoreError::invalid("train_ranker", "oracle does not match the videos"));
    }
    let mut pools = Vec::new();
    let mut skipped = 0;
    for (v, hard) in videos.iter().zip(&oracle.hard) {
        let pos: Vec<usize> = (0..hard.len()).filter(|&c| hard[c]).collect();
        let neg: Vec<usize> = (0..hard.len()).filter(|&c| !hard[c]).collect();
        if pos.is_empty() || neg.is_empty() {
            skipped += 1;
            continue;
        }
        pools.push((v, pos, neg));
    }
    if skipped > 0 {
        log::warn!("ranker: skipped {skipped} videos lacking oracle or non-oracle clips");
    }
    if pools.is_empty() {
        return Err(CoreError::invalid("train_ranker", "empty pair pool"));
    }
    let joints = videos[0].clips[0].joints;
    let mut spec = net_spec(cfg, joints, 1);
    spec.seed = cfg.seed ^ 0x5a11;
    let mut net = Network::<f32>::new(spec)?;
    let mut adam = Adam::new(AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    });
    let mut plateau = Plateau::new(cfg.patience, cfg.decay);
    let mut lr = cfg.lr;
    let groups = JointGroups::coco();
    let params = AugmentParams {
        beta: cfg.beta,
        gamma: cfg.gamma,
        flip_prob: cfg.flip_prob,
    };
    let mut rng = stream(cfg.seed, 11);
    let mut gate_rng = stream(cfg.seed, 12);
    let pairs_per_batch = (cfg.batch_size / 2).max(1);
    let mut history = Vec::new();
    for epoch in 0..cfg.ranker_epochs {
        // Equal numbers of oracle and non-oracle clips: one of each per pair.
        let pairs: Vec<(&PoseRepresentation<f32>, &PoseRepresentation<f32>)> = (0..cfg.ranker_pairs)
            .map(|_| {
                let (v, pos, neg) = &pools[rng.gen_range(0..pools.len())];
                let o = pos.choose(&mut rng).expect("nonempty");
                let n = neg.choose(&mut rng).expect("nonempty");
                (&v.clips[*o], &v.clips[*n])
            })
            .collect();
        let (mut loss_sum, mut correct, mut batches) = (0.0, 0usize, 0usize);
        for chunk in pairs.chunks(pairs_per_batch) {
            let mut reps = Vec::with_capacity(chunk.len() * 2);
            for (o, n) in chunk {
                reps.push(augment(o, &groups, &params, &mut rng)?);
                reps.push(augment(n, &groups, &params, &mut rng)?);
            }
            let m = chunk.len();
            let x = batch_input::<f32, f32>(&reps.iter().collect::<Vec<_>>())?;
            let (arch, mut s) = net.session(true, true);
            let xv = s.input(x);
            let out = arch.forward(&mut s, xv, GateMode::Sampled, &mut gate_rng)?;
            let scores: Vec<f64> = s.graph.value(out.logits).data().iter().map(|&v| v as f64).collect();
            let mut total = 0.0;
            let mut grad = vec![0f32; 2 * m];
            for p in 0..m {
                let d = scores[2 * p] - scores[2 * p + 1];
                correct += usize::from(d > 0.0);
                total += pair_loss(d, cfg.ranker_loss, cfg.ranker_margin);
                let g = match cfg.ranker_loss {
                    RankLoss::Logistic => -pmk_tensor::sigmoid(-d),
                    RankLoss::Margin => {
                        if d < cfg.ranker_margin {
                            -1.0
                        } else {
                            0.0
                        }
                    }
                } / m as f64;
                grad[2 * p] = g as f32;
                grad[2 * p + 1] = -g as f32;
            }
            let value = total / m as f64;
            if !value.is_finite() {
                return Err(CoreError::Diverged {
                    epoch,
                    step: batches,
                    detail: format!("ranker loss {value}, lr {lr}"),
                });
            }
            let grad = pmk_tensor::Tensor::from_vec(&[2 * m, 1], grad)?;
            let loss = s.graph.custom(
                &[out.logits],
                pmk_tensor::Tensor::scalar(value as f32),
                Box::new(move |up| vec![grad.scale(up.data()[0])]),
            )?;
            s.backward(loss)?;
            let grads = s.param_grads();
            drop(s);
            adam.set_lr(lr);
            adam.step_store(&mut net.store, &grads)?;
            loss_sum += value;
            batches += 1;
        }
        let rec = RankerEpoch {
            epoch,
            loss: loss_sum / batches.max(1) as f64,
            pair_accuracy: correct as f64 / pairs.len().max(1) as f64,
            lr,
        };
        log::info!(
            "ranker epoch {epoch}: loss {:.4} pair acc {:.3} lr {:.2e}",
            rec.loss,
            rec.pair_accuracy,
            lr
        );
        plateau.step(rec.pair_accuracy, &mut lr);
        history.push(rec);
    }
    if !history.is_empty() {
        let clips: Vec<&PoseRepresentation<f32>> = pools.iter().flat_map(|(v, _, _)| v.clips.iter()).collect();
        recalibrate_batch_norm(&mut net, &clips)?;
    }
    Ok(RankerOutcome { net, history, skipped })
}

/// Saliency of every clip of every video (eval mode).
pub fn score_clips(ranker: &mut Network<f32>, videos: &[ClipVideo]) -> Result<Vec<Vec<f64>>> {
    videos
        .iter()
        .map(|v| {
            let p = predict(ranker, &v.clips.iter().collect::<Vec<_>>())?;
            Ok(p.logits.iter().map(|l| l[0]).collect())
        })
        .collect()
}

/// Reduces per-clip probability vectors with `g`.
pub fn consensus(probs: &[&[f64]], g: Consensus) -> Result<Vec<f64>> {
    let first = probs
        .first()
        .ok_or_else(|| CoreError::invalid("consensus", "no clips selected"))?;
    let mut out = first.to_vec();
    for p in &probs[1..] {
        for (o, &v) in out.iter_mut().zip(p.iter()) {
            match g {
                Consensus::Max => *o = o.max(v),
                Consensus::Avg => *o += v,
            }
        }
    }
    if g == Consensus::Avg {
        let n = probs.len() as f64;
        out.iter_mut().for_each(|o| *o /= n);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub selected: Vec<usize>,
    pub scores: Vec<f64>,
    pub prediction: usize,
}

/// Keeps the `k` highest-saliency clips (stable by index), applies `g` over
/// their classifier probabilities and predicts the argmax. `probs` holds the
/// classifier output for every clip; only the selected rows are read.
pub fn select_from_scores(saliency: &[f64], probs: &[Vec<f64>], k: usize, g: Consensus) -> Result<Selection> {
    if k < 1 {
        return Err(CoreError::invalid("select_and_classify", "K_select must be at least 1"));
    }
    if saliency.len() != probs.len() {
        return Err(CoreError::invalid("select_and_classify", "one saliency per clip required"));
    }
    let selected = top_k(saliency, k.min(saliency.len()));
    let rows: Vec<&[f64]> = selected.iter().map(|&i| probs[i].as_slice()).collect();
    let scores = consensus(&rows, g)?;
    Ok(Selection {
        prediction: argmax(&scores),
        selected,
        scores,
    })
}

/// Full selection pipeline for one video: score with `ranker`, run `f` on the
/// kept clips only, reduce with `g`.
pub fn select_and_classify(
    video: &ClipVideo,
    ranker: &mut Network<f32>,
    f: &mut Network<f32>,
    k: usize,
    g: Consensus,
) -> Result<Selection> {
    if k < 1 {
        return Err(CoreError::invalid("select_and_classify", "K_select must be at least 1"));
    }
    let saliency = score_clips(ranker, std::slice::from_ref(video))?.remove(0);
    let selected = top_k(&saliency, k.min(saliency.len()));
    let kept: Vec<&PoseRepresentation<f32>> = selected.iter().map(|&i| &video.clips[i]).collect();
    let probs = predict(f, &kept)?.probabilities();
    let rows: Vec<&[f64]> = probs.iter().map(|p| p.as_slice()).collect();
    let scores = consensus(&rows, g)?;
    Ok(Selection {
        prediction: argmax(&scores),
        selected,
        scores,
    })
}

/// Dense prediction: consensus over every clip.
pub fn dense_prediction(probs: &[Vec<f64>], g: Consensus) -> Result<usize> {
    let rows: Vec<&[f64]> = probs.iter().map(|p| p.as_slice()).collect();
    Ok(argmax(&consensus(&rows, g)?))
}

/// `k` clips drawn uniformly without replacement.
pub fn random_selection<R: Rng + ?Sized>(n: usize, k: usize, rng: &mut R) -> Vec<usize> {
    let mut idx = rand::seq::index::sample(rng, n, k.min(n)).into_vec();
    idx.sort_unstable();
    idx
}

/// AUC of saliency for action-bearing vs idle clips, pooled over videos.
pub fn action_auc(saliency: &[Vec<f64>], videos: &[ClipVideo]) -> Option<f64> {
    let mut s = Vec::new();
    let mut p = Vec::new();
    for (sv, v) in saliency.iter().zip(videos) {
        let a = v.action.as_ref()?;
        s.extend_from_slice(sv);
        p.extend_from_slice(a);
    }
    auc(&s, &p)
}

/// Trains the clip classifier: a stacked-joint model over single clips.
pub fn clip_classifier_config(cfg: &RunConfig) -> RunConfig {
    RunConfig {
        model: ModelKind::Baseline,
        ..cfg.clone()
    }
}

/// Generates every untrimmed video of `spec` and encodes its clips, keeping
/// only the representations. Returns `(video, split)` pairs in index order.
pub fn synthetic_videos(spec: &SynthSpec, window_fraction: f64, cfg: &RunConfig) -> Result<Vec<(ClipVideo, Split)>> {
    spec.validate()?;
    parallel::map_range(spec.num_samples(), |i| {
        let (seq, info, ann) = generate_untrimmed_sample(spec, window_fraction, i)?;
        let v = ClipVideo::from_sequence(format!("u{i:05}"), info.class, &seq, cfg, Some(ann.action_clips))?;
        Ok((v, spec.split_of(i)))
    })
    .into_iter()
    .collect()
}

/// Loads every video of an untrimmed manifest and encodes its clips.
pub fn load_videos(m: &Manifest, cfg: &RunConfig) -> Result<Vec<(ClipVideo, Split)>> {
    let records: Vec<_> = m.records.iter().collect();
    parallel::map_range(records.len(), |i| {
        let r = records[i];
        let path = m.resolve(r);
        let (seq, clamped) = HeatmapSequence::from_tensor(read_tensor::<f32>(&path)?)?;
        if clamped > 0 {
            log::warn!("{}: clamped {clamped} heatmap values into [0, 1]", path.display());
        }
        if seq.frames < CLIP_LEN {
            log::warn!("{}: {} frames, shorter than one clip; skipped", r.id, seq.frames);
            return Ok(None);
        }
        let action = r.annotations.as_ref().map(|a| a.action_clips.clone());
        let v = ClipVideo::from_sequence(r.id.clone(), r.class, &seq, cfg, action)?;
        Ok(Some((v, r.split)))
    })
    .into_iter()
    .filter_map(|r| r.transpose())
    .collect()
}

/// Every clip as a training sample labelled with its video's class.
pub fn clip_dataset(videos: &[(ClipVideo, Split)], num_classes: usize) -> Dataset {
    let mut d = Dataset {
        num_classes,
        train: Vec::new(),
        val: Vec::new(),
    };
    for (v, split) in videos {
        let dst = match split {
            Split::Train => &mut d.train,
            Split::Val => &mut d.val,
        };
        dst.extend(v.clips.iter().enumerate().map(|(k, c)| Sample {
            id: format!("{}#{k}", v.id),
            label: v.label,
            rep: c.clone(),
        }));
    }
    d
}
