//! Classification metrics.

use crate::error::{CoreError, Result};

pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassAccuracy {
    /// Macro average over classes present in the labels.
    pub mean: f64,
    /// `None` for classes with no samples.
    pub per_class: Vec<Option<f64>>,
    pub excluded: Vec<usize>,
}

/// Mean per-class accuracy. Classes absent from `labels` are left out of the
/// average (with a warning).
pub fn mean_class_accuracy(preds: &[usize], labels: &[usize], num_classes: usize) -> Result<ClassAccuracy> {
    if preds.len() != labels.len() {
        return Err(CoreError::invalid(
            "mean_class_accuracy",
            format!("{} predictions for {} labels", preds.len(), labels.len()),
        ));
    }
    if labels.is_empty() {
        return Err(CoreError::invalid("mean_class_accuracy", "no samples"));
    }
    let mut hits = vec![0usize; num_classes];
    let mut totals = vec![0usize; num_classes];
    for (&p, &y) in preds.iter().zip(labels) {
        if y >= num_classes {
            return Err(CoreError::invalid(
                "mean_class_accuracy",
                format!("label {y} outside {num_classes} classes"),
            ));
        }
        totals[y] += 1;
        if p == y {
            hits[y] += 1;
        }
    }
    let per_class: Vec<Option<f64>> = hits
        .iter()
        .zip(&totals)
        .map(|(&h, &t)| (t > 0).then(|| h as f64 / t as f64))
        .collect();
    let excluded: Vec<usize> = (0..num_classes).filter(|&c| totals[c] == 0).collect();
    if !excluded.is_empty() {
        log::warn!("classes {excluded:?} have no samples and are excluded from the mean");
    }
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    let mean = present.iter().sum::<f64>() / present.len() as f64;
    Ok(ClassAccuracy {
        mean,
        per_class,
        excluded,
    })
}

/// Average precision of `scores` against binary `relevant`, all-point
/// interpolation: the mean of precision at the rank of every positive.
/// Ties in score are ordered by index.
pub fn average_precision(scores: &[f64], relevant: &[bool]) -> Option<f64> {
    let positives = relevant.iter().filter(|&&r| r).count();
    if positives == 0 || scores.len() != relevant.len() {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    // Interpolated precision at each positive: max precision at any later recall.
    let mut precisions = Vec::with_capacity(positives);
    let mut hits = 0;
    for (rank, &i) in order.iter().enumerate() {
        if relevant[i] {
            hits += 1;
            precisions.push(hits as f64 / (rank + 1) as f64);
        }
    }
    for k in (0..precisions.len().saturating_sub(1)).rev() {
        precisions[k] = precisions[k].max(precisions[k + 1]);
    }
    Some(precisions.iter().sum::<f64>() / positives as f64)
}

/// Mean AP over classes; `scores` and `targets` are row-major `[N, K]`.
/// Classes without positives are skipped.
pub fn mean_average_precision(scores: &[f64], targets: &[bool], n: usize, k: usize) -> Result<f64> {
    if scores.len() != n * k || targets.len() != n * k {
        return Err(CoreError::invalid("mean_average_precision", "shape mismatch"));
    }
    let mut aps = Vec::new();
    for c in 0..k {
        let s: Vec<f64> = (0..n).map(|i| scores[i * k + c]).collect();
        let t: Vec<bool> = (0..n).map(|i| targets[i * k + c]).collect();
        match average_precision(&s, &t) {
            Some(ap) => aps.push(ap),
            None => log::warn!("class {c} has no positives and is excluded from mAP"),
        }
    }
    if aps.is_empty() {
        return Err(CoreError::invalid("mean_average_precision", "no class has a positive"));
    }
    Ok(aps.iter().sum::<f64>() / aps.len() as f64)
}

/// Area under the ROC curve (Mann–Whitney, ties count one half).
pub fn auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    // Average ranks over tie groups.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            if positive[k] {
                rank_sum += avg;
            }
        }
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos * n_neg) as f64)
}

/// Softmax of one row of logits.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&z| (z - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}
