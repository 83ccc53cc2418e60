//! Batch-shaping regularizer: Cramér–von Mises distance between the
//! per-joint empirical distribution of gate values in a batch and a Beta prior.

use std::sync::atomic::{AtomicBool, Ordering};

use pmk_tensor::{Graph, Scalar, Tensor, Var};

use crate::error::{CoreError, Result};

pub const CLAMP_LO: f64 = 1e-6;
pub const CLAMP_HI: f64 = 1.0 - 1e-6;

/// `ln Γ(x)` for `x > 0` (Lanczos, g = 7, nine terms).
pub fn ln_gamma(x: f64) -> f64 {
    const G: f64 = 7.0;
    const C: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        // Reflection keeps the series in its accurate range.
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = C[0];
    let t = x + G + 0.5;
    for (i, &c) in C.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

pub fn ln_beta(a: f64, b: f64) -> f64 {
    ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b)
}

/// Continued fraction for the incomplete beta function (modified Lentz).
fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    const EPS: f64 = 1e-15;
    let (qab, qap, qam) = (a + b, a + 1.0, a - 1.0);
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=500 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// Regularized incomplete beta `I_x(a, b)`, the Beta(a, b) CDF.
pub fn beta_cdf(x: f64, a: f64, b: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let front = (a * x.ln() + b * (1.0 - x).ln() - ln_beta(a, b)).exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_cf(a, b, x) / a
    } else {
        1.0 - front * beta_cf(b, a, 1.0 - x) / b
    }
}

pub fn beta_pdf(x: f64, a: f64, b: f64) -> f64 {
    if x <= 0.0 || x >= 1.0 {
        return 0.0;
    }
    ((a - 1.0) * x.ln() + (b - 1.0) * (1.0 - x).ln() - ln_beta(a, b)).exp()
}

/// Inverse CDF by bisection (the CDF is monotone, so this always converges).
pub fn beta_quantile(p: f64, a: f64, b: f64) -> f64 {
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if beta_cdf(mid, a, b) < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Midpoint plotting positions `(2i − 1) / (2N)`, `i = 1..N`.
pub fn plotting_positions(n: usize) -> Vec<f64> {
    (1..=n).map(|i| (2 * i - 1) as f64 / (2 * n) as f64).collect()
}

static WARNED: AtomicBool = AtomicBool::new(false);

/// Loss value and `dL/dw` for row-major `w: [N, J]`.
///
/// `L = mean_j (1/N) Σ_i (F(x_(i)) − (2i−1)/(2N))²` over each column sorted
/// ascending. Values are clamped into `[1e-6, 1 − 1e-6]`; the gradient is
/// passed through the clamp unchanged.
pub fn batch_shaping(w: &[f64], n: usize, j: usize, a: f64, b: f64) -> Result<(f64, Vec<f64>)> {
    if n < 2 {
        return Err(CoreError::invalid("batch_shaping_loss", format!("need N >= 2, got {n}")));
    }
    if w.len() != n * j || j == 0 {
        return Err(CoreError::invalid(
            "batch_shaping_loss",
            format!("{} values for a {}x{} batch", w.len(), n, j),
        ));
    }
    let q = plotting_positions(n);
    let mut clamped = 0usize;
    let mut grad = vec![0.0; n * j];
    let mut total = 0.0;
    let mut col: Vec<(f64, usize)> = Vec::with_capacity(n);
    for jj in 0..j {
        col.clear();
        for i in 0..n {
            let v = w[i * j + jj];
            let c = v.clamp(CLAMP_LO, CLAMP_HI);
            if c != v {
                clamped += 1;
            }
            col.push((c, i));
        }
        // Stable order keeps ties deterministic.
        col.sort_by(|x, y| x.0.total_cmp(&y.0));
        let mut lj = 0.0;
        for (rank, &(x, row)) in col.iter().enumerate() {
            let diff = beta_cdf(x, a, b) - q[rank];
            lj += diff * diff;
            grad[row * j + jj] = 2.0 * diff * beta_pdf(x, a, b) / (n * j) as f64;
        }
        total += lj / n as f64;
    }
    if clamped > 0 && !WARNED.swap(true, Ordering::Relaxed) {
        log::warn!("batch shaping: clamped {clamped} gate values into [1e-6, 1-1e-6]");
    }
    Ok((total / j as f64, grad))
}

/// Records the batch-shaping loss of `w: [N, J]` on the graph.
pub fn batch_shaping_loss<T: Scalar>(g: &mut Graph<T>, w: Var, a: f64, b: f64) -> Result<Var> {
    let shape = g.shape(w).to_vec();
    if shape.len() != 2 {
        return Err(CoreError::invalid(
            "batch_shaping_loss",
            format!("expected [N, J] gate values, got {shape:?}"),
        ));
    }
    let vals: Vec<f64> = g.value(w).data().iter().map(|v| Scalar::to_f64(*v)).collect();
    let (loss, grad) = batch_shaping(&vals, shape[0], shape[1], a, b)?;
    let grad = Tensor::from_vec(&shape, grad.into_iter().map(T::from_f64).collect())?;
    Ok(g.custom(
        &[w],
        Tensor::scalar(T::from_f64(loss)),
        Box::new(move |up| vec![grad.scale(up.data()[0])]),
    )?)
}
