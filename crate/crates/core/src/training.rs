//! Datasets of encoded samples, the classifier training loop and evaluation.

use std::time::Instant;

use pmk_tensor::optim::{Adam, AdamConfig, Plateau};
use pmk_tensor::{parallel, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{augment, AugmentParams};
use crate::config::{ModelKind, NormMode, RegTarget, RunConfig};
use crate::encoding::{encode, load_representation, HeatmapSequence, PoseRepresentation, KIND_KEY};
use crate::error::{CoreError, Result};
use crate::io::read_tensor_meta;
use crate::joints::JointGroups;
use crate::manifest::{Manifest, Split};
use crate::metrics::{argmax, mean_average_precision, mean_class_accuracy, softmax};
use crate::models::shaping::batch_shaping_loss;
use crate::models::{batch_input, GateMode, NetSpec, Network};
use crate::synth::{generate_sample, SynthSpec};

/// Random streams derived from one seed.
pub(crate) fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

const STREAM_ORDER: u64 = 1;
const STREAM_AUGMENT: u64 = 2;
const STREAM_GATE: u64 = 3;

#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    pub label: usize,
    pub rep: PoseRepresentation<f32>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub num_classes: usize,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
}

impl Dataset {
    /// Generates and encodes a synthetic corpus in memory.
    pub fn synthetic(spec: &SynthSpec, channels: usize, norm: NormMode) -> Result<Self> {
        spec.validate()?;
        let samples = parallel::map_range(spec.num_samples(), |i| -> Result<(Sample, Split)> {
            let (seq, info) = generate_sample(spec, i)?;
            let rep = encode(&seq, channels, norm)?;
            Ok((
                Sample {
                    id: format!("s{i:05}"),
                    label: info.class,
                    rep,
                },
                spec.split_of(i),
            ))
        });
        let mut d = Dataset {
            num_classes: spec.num_classes,
            train: Vec::new(),
            val: Vec::new(),
        };
        for s in samples {
            let (s, split) = s?;
            match split {
                Split::Train => d.train.push(s),
                Split::Val => d.val.push(s),
            }
        }
        Ok(d)
    }

    /// Loads a manifest whose records are heatmap sequences (encoded here) or
    /// representations written by `encode`.
    pub fn from_manifest(m: &Manifest, channels: usize, norm: NormMode) -> Result<Self> {
        let records: Vec<_> = m.records.iter().collect();
        let samples = parallel::map_range(records.len(), |i| -> Result<(Sample, Split)> {
            let r = records[i];
            let path = m.resolve(r);
            let rep = load_encoded(&path, channels, norm)?;
            Ok((
                Sample {
                    id: r.id.clone(),
                    label: r.class,
                    rep,
                },
                r.split,
            ))
        });
        let mut d = Dataset {
            num_classes: m.num_classes(),
            train: Vec::new(),
            val: Vec::new(),
        };
        for s in samples {
            let (s, split) = s?;
            match split {
                Split::Train => d.train.push(s),
                Split::Val => d.val.push(s),
            }
        }
        Ok(d)
    }

    pub fn split(&self, split: Split) -> &[Sample] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
        }
    }

    pub fn joints(&self) -> usize {
        self.train.first().or(self.val.first()).map_or(0, |s| s.rep.joints)
    }
}

/// Reads one file as a representation with the requested encoding.
pub fn load_encoded(path: &std::path::Path, channels: usize, norm: NormMode) -> Result<PoseRepresentation<f32>> {
    let (t, meta) = read_tensor_meta::<f32>(path)?;
    if meta.contains_key(KIND_KEY) {
        let (rep, _) = load_representation::<f32>(path)?;
        let want = match norm {
            NormMode::Raw => crate::encoding::NormTag::Raw,
            NormMode::Tan => crate::encoding::NormTag::Tan,
            NormMode::Max => crate::encoding::NormTag::MaxOverChannel,
        };
        if rep.norm != want || rep.channels != channels {
            return Err(CoreError::Header {
                path: path.to_path_buf(),
                detail: format!(
                    "encoded with C={} norm={}, run wants C={} norm={}",
                    rep.channels,
                    rep.norm.name(),
                    channels,
                    want.name()
                ),
            });
        }
        return Ok(rep);
    }
    let (seq, clamped) = HeatmapSequence::from_tensor(t)?;
    if clamped > 0 {
        log::warn!("{}: clamped {clamped} heatmap values into [0, 1]", path.display());
    }
    encode(&seq, channels, norm)
}

pub fn net_spec(cfg: &RunConfig, joints: usize, outputs: usize) -> NetSpec {
    NetSpec {
        kind: cfg.model,
        joints,
        channels: cfg.channels,
        outputs,
        c_dim: cfg.c_dim,
        tau: cfg.tau,
        seed: cfg.seed,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub reg_loss: f64,
    pub train_accuracy: f64,
    /// Mean per-class accuracy, or mAP in multi-label mode.
    pub val_metric: f64,
    pub lr: f64,
    /// Eval-time gate weight per joint over the validation split.
    pub gate_mean: Vec<f64>,
    pub gate_std: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the best validation metric.
    pub net: Network<f32>,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_metric: f64,
    pub steps: u64,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct Predictions {
    /// Raw logits per sample.
    pub logits: Vec<Vec<f64>>,
    /// Eval gate weights per sample, for gated models.
    pub gates: Option<Vec<Vec<f64>>>,
}

impl Predictions {
    pub fn classes(&self) -> Vec<usize> {
        self.logits.iter().map(|l| argmax(l)).collect()
    }

    pub fn probabilities(&self) -> Vec<Vec<f64>> {
        self.logits.iter().map(|l| softmax(l)).collect()
    }
}

pub const EVAL_BATCH: usize = 32;

/// Eval-mode forward pass over `reps` with deterministic gates.
pub fn predict(net: &mut Network<f32>, reps: &[&PoseRepresentation<f32>]) -> Result<Predictions> {
    let mut logits = Vec::with_capacity(reps.len());
    let mut gates = Vec::new();
    let mut rng = stream(0, 0);
    for chunk in reps.chunks(EVAL_BATCH) {
        let x = batch_input::<f32, f32>(chunk)?;
        let (arch, mut s) = net.session(false, false);
        let xv = s.input(x);
        let out = arch.forward(&mut s, xv, GateMode::Deterministic, &mut rng)?;
        let l = s.graph.value(out.logits);
        let k = l.shape()[1];
        for row in l.data().chunks(k) {
            logits.push(row.iter().map(|&v| v as f64).collect());
        }
        if let Some((w, _)) = out.gate {
            let w = s.graph.value(w);
            let j = w.shape()[1];
            for row in w.data().chunks(j) {
                gates.push(row.iter().map(|&v| v as f64).collect());
            }
        }
    }
    let gated = !gates.is_empty();
    Ok(Predictions {
        logits,
        gates: gated.then_some(gates),
    })
}

/// Validation metric: mean per-class accuracy, or mAP over sigmoid scores.
pub fn score(preds: &Predictions, labels: &[usize], num_classes: usize, multi_label: bool) -> Result<f64> {
    if multi_label {
        let n = labels.len();
        let scores: Vec<f64> = preds
            .logits
            .iter()
            .flat_map(|l| l.iter().map(|&z| pmk_tensor::sigmoid(z)))
            .collect();
        let mut targets = vec![false; n * num_classes];
        for (i, &y) in labels.iter().enumerate() {
            targets[i * num_classes + y] = true;
        }
        mean_average_precision(&scores, &targets, n, num_classes)
    } else {
        Ok(mean_class_accuracy(&preds.classes(), labels, num_classes)?.mean)
    }
}

/// Per-joint mean and standard deviation of gate weights.
pub fn gate_stats(gates: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let Some(first) = gates.first() else {
        return (Vec::new(), Vec::new());
    };
    let n = gates.len() as f64;
    let j = first.len();
    let mean: Vec<f64> = (0..j).map(|k| gates.iter().map(|g| g[k]).sum::<f64>() / n).collect();
    let std = (0..j)
        .map(|k| (gates.iter().map(|g| (g[k] - mean[k]).powi(2)).sum::<f64>() / n).sqrt())
        .collect();
    (mean, std)
}

/// Replaces every batch-norm running estimate with its population value over
/// `samples` under the current weights. Batches are normalized with their own
/// statistics, as in training; gates are deterministic.
pub fn recalibrate_batch_norm(net: &mut Network<f32>, samples: &[&PoseRepresentation<f32>]) -> Result<()> {
    if samples.is_empty() {
        return Ok(());
    }
    let m = pmk_tensor::nn::BN_MOMENTUM;
    let nb = net.store.buffers().len();
    let mut acc: Vec<Vec<f64>> = net.store.buffers().iter().map(|b| vec![0.0; b.value.data().len()]).collect();
    let pair = |name: &str| name.strip_suffix(".running_var").map(|p| format!("{p}.running_mean"));
    let mut total = 0.0;
    let mut rng = stream(0, 0);
    for chunk in samples.chunks(EVAL_BATCH) {
        if chunk.len() < 2 {
            continue;
        }
        for b in net.store.buffers_mut() {
            b.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let x = batch_input::<f32, f32>(chunk)?;
        let (arch, mut s) = net.session(true, false);
        let xv = s.input(x);
        arch.forward(&mut s, xv, GateMode::Deterministic, &mut rng)?;
        drop(s);
        let w = chunk.len() as f64;
        total += w;
        let bufs = net.store.buffers();
        for i in 0..nb {
            let cur: Vec<f64> = bufs[i].value.data().iter().map(|&v| v as f64 / m).collect();
            match pair(&bufs[i].name).and_then(|p| bufs.iter().find(|b| b.name == p)) {
                // second moment, so that between-batch spread is kept
                Some(mb) => {
                    for ((a, v), &mu) in acc[i].iter_mut().zip(&cur).zip(mb.value.data()) {
                        let mu = mu as f64 / m;
                        *a += w * (v + mu * mu);
                    }
                }
                None => acc[i].iter_mut().zip(&cur).for_each(|(a, v)| *a += w * v),
            }
        }
    }
    if total == 0.0 {
        return Ok(());
    }
    let means: Vec<(String, Vec<f64>)> = net
        .store
        .buffers()
        .iter()
        .zip(&acc)
        .filter(|(b, _)| b.name.ends_with(".running_mean"))
        .map(|(b, a)| (b.name.clone(), a.iter().map(|v| v / total).collect()))
        .collect();
    for (b, a) in net.store.buffers_mut().iter_mut().zip(&acc) {
        let mean = pair(&b.name).and_then(|p| means.iter().find(|(n, _)| *n == p));
        for (i, (dst, v)) in b.value.data_mut().iter_mut().zip(a).enumerate() {
            let v = v / total;
            *dst = match mean {
                Some((_, mu)) => (v - mu[i] * mu[i]).max(0.0) as f32,
                None => v as f32,
            };
        }
    }
    Ok(())
}

pub fn evaluate(net: &mut Network<f32>, samples: &[Sample], num_classes: usize, multi_label: bool) -> Result<(f64, Predictions)> {
    let reps: Vec<_> = samples.iter().map(|s| &s.rep).collect();
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    let preds = predict(net, &reps)?;
    let m = score(&preds, &labels, num_classes, multi_label)?;
    Ok((m, preds))
}

/// Trains a classifier on `data.train`, selecting the epoch with the best
/// validation metric. `on_epoch` sees every record as it is produced.
pub fn train_classifier(
    data: &Dataset,
    cfg: &RunConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.train.is_empty() || data.val.is_empty() {
        return Err(CoreError::invalid("train_classifier", "train and val splits must both be nonempty"));
    }
    let start = Instant::now();
    let joints = data.joints();
    let groups = JointGroups::coco();
    let mut net = Network::<f32>::new(net_spec(cfg, joints, data.num_classes))?;
    let mut adam = Adam::new(AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    });
    let mut plateau = Plateau::new(cfg.patience, cfg.decay);
    let mut lr = cfg.lr;
    let params = AugmentParams {
        beta: cfg.beta,
        gamma: cfg.gamma,
        flip_prob: cfg.flip_prob,
    };
    let mut order_rng = stream(cfg.seed, STREAM_ORDER);
    let mut aug_rng = stream(cfg.seed, STREAM_AUGMENT);
    let mut gate_rng = stream(cfg.seed, STREAM_GATE);
    let use_reg = cfg.lambda_reg > 0.0 && cfg.model == ModelKind::Jmrn;

    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, pmk_tensor::nn::ParamStore<f32>)> = None;
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let train_reps: Vec<&PoseRepresentation<f32>> = data.train.iter().map(|s| &s.rep).collect();
    let mut steps = 0u64;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut order_rng);
        let (mut loss_sum, mut reg_sum, mut hits, mut seen, mut batches) = (0.0, 0.0, 0usize, 0usize, 0usize);
        for (step, idx) in order.chunks(cfg.batch_size).enumerate() {
            if idx.len() < 2 {
                continue;
            }
            let reps = idx
                .iter()
                .map(|&i| augment(&data.train[i].rep, &groups, &params, &mut aug_rng))
                .collect::<Result<Vec<_>>>()?;
            let labels: Vec<usize> = idx.iter().map(|&i| data.train[i].label).collect();
            let x = batch_input::<f32, f32>(&reps.iter().collect::<Vec<_>>())?;
            let (arch, mut s) = net.session(true, true);
            let xv = s.input(x);
            let out = arch.forward(&mut s, xv, GateMode::Sampled, &mut gate_rng)?;
            let task = if cfg.multi_label {
                let k = data.num_classes;
                let mut t = vec![0f32; labels.len() * k];
                for (i, &y) in labels.iter().enumerate() {
                    t[i * k + y] = 1.0;
                }
                s.graph.binary_cross_entropy(out.logits, &Tensor::from_vec(&[labels.len(), k], t)?)?
            } else {
                s.graph.softmax_cross_entropy(out.logits, &labels)?
            };
            let mut total = task;
            let mut reg_value = 0.0;
            if use_reg {
                if let Some((w, pi)) = out.gate {
                    let target = match cfg.reg_target {
                        RegTarget::Sampled => w,
                        RegTarget::Deterministic => {
                            let z = s.graph.scale(pi, (1.0 / cfg.tau) as f32)?;
                            s.graph.sigmoid(z)?
                        }
                    };
                    let reg = batch_shaping_loss(&mut s.graph, target, cfg.prior_a, cfg.prior_b)?;
                    reg_value = s.graph.value(reg).data()[0] as f64;
                    let weighted = s.graph.scale(reg, cfg.lambda_reg as f32)?;
                    total = s.graph.add(task, weighted)?;
                }
            }
            let task_value = s.graph.value(task).data()[0] as f64;
            let total_value = s.graph.value(total).data()[0] as f64;
            if !total_value.is_finite() {
                return Err(CoreError::Diverged {
                    epoch,
                    step,
                    detail: format!(
                        "task loss {task_value}, shaping loss {reg_value}, lr {lr}, batch {:?}",
                        idx.iter().map(|&i| data.train[i].id.as_str()).collect::<Vec<_>>()
                    ),
                });
            }
            let l = s.graph.value(out.logits);
            let k = l.shape()[1];
            for (row, &y) in l.data().chunks(k).zip(&labels) {
                let row: Vec<f64> = row.iter().map(|&v| v as f64).collect();
                hits += usize::from(argmax(&row) == y);
            }
            s.backward(total)?;
            let grads = s.param_grads();
            drop(s);
            adam.set_lr(lr);
            adam.step_store(&mut net.store, &grads)?;
            steps += 1;
            loss_sum += task_value;
            reg_sum += reg_value;
            seen += labels.len();
            batches += 1;
        }
        recalibrate_batch_norm(&mut net, &train_reps)?;
        let (val_metric, preds) = evaluate(&mut net, &data.val, data.num_classes, cfg.multi_label)?;
        let (gate_mean, gate_std) = preds.gates.as_deref().map(gate_stats).unwrap_or_default();
        let record = EpochRecord {
            epoch,
            loss: loss_sum / batches.max(1) as f64,
            reg_loss: reg_sum / batches.max(1) as f64,
            train_accuracy: hits as f64 / seen.max(1) as f64,
            val_metric,
            lr,
            gate_mean,
            gate_std,
        };
        log::info!(
            "epoch {epoch}: loss {:.4} reg {:.4} train {:.3} val {:.3} lr {:.2e}",
            record.loss,
            record.reg_loss,
            record.train_accuracy,
            record.val_metric,
            lr
        );
        on_epoch(&record);
        if best.as_ref().map_or(true, |b| val_metric > b.0) {
            best = Some((val_metric, epoch, net.store.clone()));
        }
        plateau.step(val_metric, &mut lr);
        history.push(record);
    }
    let (best_metric, best_epoch, store) =
        best.ok_or_else(|| CoreError::invalid("train_classifier", "epochs must be at least 1"))?;
    net.store = store;
    Ok(TrainOutcome {
        net,
        history,
        best_epoch,
        best_metric,
        steps,
        seconds: start.elapsed().as_secs_f64(),
    })
}
