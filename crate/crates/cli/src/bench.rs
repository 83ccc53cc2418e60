use std::path::Path;
use std::time::Instant;

use anyhow::Result;
use pmk_core::encoding::{aggregate, build_kernel, HeatmapSequence};
use pmk_core::tensor::{kernels, parallel};
use pmk_core::CoreError;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

#[derive(Debug, Serialize)]
pub struct BenchReport {
    pub op: String,
    pub shape: Vec<usize>,
    pub frames: usize,
    pub threads: usize,
    pub reps: usize,
    pub seconds: Vec<f64>,
    pub median_seconds: f64,
    /// Input elements streamed per repetition.
    pub elements: u64,
    pub elements_per_second: f64,
    /// Multiply-accumulates per repetition.
    pub accumulates: u64,
    pub accumulates_per_second: f64,
}

fn parse_shape(s: &str, dims: usize) -> Result<Vec<usize>> {
    let v: Vec<usize> = s
        .split('x')
        .map(|p| p.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| CoreError::Config(format!("shape {s:?} is not of the form AxBx..")))?;
    if v.len() != dims || v.contains(&0) {
        return Err(CoreError::Config(format!("shape {s:?} needs {dims} positive dimensions")).into());
    }
    Ok(v)
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

fn time_reps(reps: usize, mut f: impl FnMut()) -> Vec<f64> {
    f();
    (0..reps)
        .map(|_| {
            let t = Instant::now();
            f();
            t.elapsed().as_secs_f64()
        })
        .collect()
}

pub fn run(op: &str, shape: &str, frames: usize, reps: usize, out: Option<&Path>) -> Result<()> {
    if reps < 3 {
        return Err(CoreError::Config("bench needs at least 3 repetitions".into()).into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (shape_v, seconds, elements, accumulates) = match op {
        "aggregate" => {
            // N sequences of T frames, J joints, H x W; one sequence buffer is
            // reused for all N so memory stays at one sequence.
            let s = parse_shape(shape, 4)?;
            let (n, j, h, w) = (s[0], s[1], s[2], s[3]);
            let data = (0..frames * j * h * w).map(|_| rng.gen::<f32>()).collect();
            let seq = HeatmapSequence::new(frames, j, h, w, data)?;
            let k = build_kernel(frames, 3)?;
            let nnz = k.weights.iter().filter(|&&x| x != 0.0).count() as u64;
            let secs = time_reps(reps, || {
                for _ in 0..n {
                    std::hint::black_box(aggregate(&seq, &k).expect("valid shapes"));
                }
            });
            let plane = (j * h * w) as u64;
            (s, secs, n as u64 * frames as u64 * plane, n as u64 * nnz * plane)
        }
        "gemm" => {
            let s = parse_shape(shape, 3)?;
            let (m, kk, n) = (s[0], s[1], s[2]);
            let a: Vec<f32> = (0..m * kk).map(|_| rng.gen()).collect();
            let b: Vec<f32> = (0..kk * n).map(|_| rng.gen()).collect();
            let mut c = vec![0f32; m * n];
            let secs = time_reps(reps, || kernels::gemm(&a, &b, &mut c, m, kk, n, false));
            (s, secs, (m * kk + kk * n) as u64, (m * kk * n) as u64)
        }
        other => return Err(CoreError::Config(format!("unknown bench op {other:?}, expected aggregate or gemm")).into()),
    };
    let med = median(&seconds);
    let report = BenchReport {
        op: op.to_string(),
        shape: shape_v,
        frames,
        threads: parallel::current_threads(),
        reps,
        seconds,
        median_seconds: med,
        elements,
        elements_per_second: elements as f64 / med,
        accumulates,
        accumulates_per_second: accumulates as f64 / med,
    };
    if let Some(p) = out {
        pmk_core::io::write_json(p, &report)?;
    }
    println!("{}", serde_json::to_string(&report)?);
    Ok(())
}
