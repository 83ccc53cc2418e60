//! Acceptance report: one PASS/FAIL line per criterion.
//!
//! Criteria 1-4, 7a and 8 are exact properties and fail the target when they
//! fail. The trained comparisons (5, 6, 7b, 7c) and the throughput floor (9)
//! depend on scale and hardware; they are reported but never abort the run.
//!
//! `PMK_ACCEPTANCE=quick|desk|full` picks the experiment scale (default desk).

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use pmk_core::augment::*;
use pmk_core::config::{ModelKind, NormMode};
use pmk_core::encoding::*;
use pmk_core::io::{read_tensor_meta, sha256_hex, write_tensor, Meta};
use pmk_core::joints::*;
use pmk_core::models::gate::bin_concrete;
use pmk_core::models::shaping::{batch_shaping, batch_shaping_loss, beta_quantile, plotting_positions};
use pmk_core::models::*;
use pmk_core::synth::SynthSpec;
use pmk_core::tensor::gradcheck::{self, relative_error, DEFAULT_STEP};
use pmk_core::tensor::{sigmoid, Graph, Scalar, Tensor, TensorError, Var};
use pmk_core::CoreError;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

const CASES: usize = 120;

struct Scale {
    name: &'static str,
    seeds: Vec<u64>,
    hw: usize,
    per_class: usize,
    epochs: usize,
    distract_per_class: usize,
    distract_epochs: usize,
    clip_hw: usize,
    videos_per_class: usize,
    clip_epochs: usize,
}

impl Scale {
    fn from_env() -> Self {
        match std::env::var("PMK_ACCEPTANCE").as_deref() {
            Ok("quick") => Scale {
                name: "quick",
                seeds: vec![0],
                hw: 16,
                per_class: 5,
                epochs: 2,
                distract_per_class: 5,
                distract_epochs: 2,
                clip_hw: 16,
                videos_per_class: 3,
                clip_epochs: 2,
            },
            Ok("full") => Scale {
                name: "full",
                seeds: vec![0, 1, 2],
                hw: 64,
                per_class: 40,
                epochs: 20,
                distract_per_class: 40,
                distract_epochs: 20,
                clip_hw: 32,
                videos_per_class: 10,
                clip_epochs: 10,
            },
            _ => Scale {
                name: "desk",
                seeds: vec![0, 1, 2],
                hw: 32,
                per_class: 30,
                epochs: 15,
                distract_per_class: 24,
                distract_epochs: 15,
                clip_hw: 16,
                videos_per_class: 6,
                clip_epochs: 6,
            },
        }
    }
}

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

type Outcome = Result<Verdict, String>;

// ---------------------------------------------------------------- CLI driver

fn pmk(args: &[&str]) -> Result<Value, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_pmk"))
        .args(args)
        .output()
        .map_err(|e| format!("spawning pmk: {e}"))?;
    if !out.status.success() {
        return Err(format!(
            "pmk {} exited with {}: {}",
            args.join(" "),
            out.status,
            String::from_utf8_lossy(&out.stderr).trim()
        ));
    }
    let stdout = String::from_utf8_lossy(&out.stdout);
    let last = stdout.lines().last().unwrap_or("null");
    serde_json::from_str(last).map_err(|e| format!("pmk {}: bad output {last:?}: {e}", args.join(" ")))
}

fn num(v: &Value, key: &str) -> Result<f64, String> {
    v.get(key).and_then(Value::as_f64).ok_or_else(|| format!("missing {key} in {v}"))
}

fn write_spec(path: &Path, v: &Value) -> String {
    std::fs::write(path, v.to_string()).expect("writing spec");
    path.to_string_lossy().into_owned()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

fn fmt(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join("/")
}

// ---------------------------------------------------------------- criterion 1

fn tensor_err(e: CoreError) -> TensorError {
    match e {
        CoreError::Tensor(t) => t,
        other => TensorError::InvalidArgument {
            op: "acceptance",
            detail: other.to_string(),
        },
    }
}

fn rnd(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::rand_uniform(shape, -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn project(g: &mut Graph<f64>, y: Var, seed: u64) -> pmk_core::tensor::Result<Var> {
    let p = g.constant(rnd(g.shape(y), seed));
    let m = g.mul(y, p)?;
    g.sum(m)
}

type LayerFn = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> pmk_core::tensor::Result<Var>>;

fn layer_cases() -> Vec<(&'static str, Vec<Tensor<f64>>, LayerFn)> {
    let away = |t: Tensor<f64>| t.map(|v| if v.abs() < 0.05 { v + 0.2 } else { v });
    let mut cases: Vec<(&'static str, Vec<Tensor<f64>>, LayerFn)> = Vec::new();
    for &(stride, pad, k) in &[(1usize, 1usize, 3usize), (2, 1, 3), (1, 0, 1)] {
        cases.push((
            "conv2d",
            vec![rnd(&[2, 2, 5, 5], 10), rnd(&[3, 2, k, k], 11), rnd(&[3], 12)],
            Box::new(move |g, v| {
                let y = g.conv2d(v[0], v[1], Some(v[2]), stride, pad)?;
                project(g, y, 99)
            }),
        ));
    }
    let bn = vec![rnd(&[3, 2, 2, 3], 20), rnd(&[2], 21), rnd(&[2], 22)];
    cases.push((
        "batchnorm_train",
        bn.clone(),
        Box::new(|g, v| {
            let (y, _) = g.batch_norm_train(v[0], v[1], v[2], 1e-5)?;
            project(g, y, 98)
        }),
    ));
    cases.push((
        "batchnorm_eval",
        bn,
        Box::new(|g, v| {
            let y = g.batch_norm_eval(v[0], v[1], v[2], &[0.1, -0.2], &[0.7, 1.3], 1e-5)?;
            project(g, y, 97)
        }),
    ));
    let x = away(rnd(&[4, 5], 30));
    cases.push((
        "relu",
        vec![x.clone()],
        Box::new(|g, v| {
            let y = g.relu(v[0])?;
            project(g, y, 1)
        }),
    ));
    cases.push((
        "sigmoid",
        vec![x.clone()],
        Box::new(|g, v| {
            let y = g.sigmoid(v[0])?;
            project(g, y, 2)
        }),
    ));
    cases.push((
        "softplus",
        vec![x.clone()],
        Box::new(|g, v| {
            let y = g.softplus(v[0])?;
            project(g, y, 3)
        }),
    ));
    cases.push((
        "arithmetic",
        vec![x, rnd(&[4, 5], 31)],
        Box::new(|g, v| {
            let a = g.mul(v[0], v[1])?;
            let b = g.sub(a, v[1])?;
            let c = g.add(b, v[0])?;
            let d = g.scale(c, 0.7)?;
            project(g, d, 4)
        }),
    ));
    cases.push((
        "gap",
        vec![rnd(&[2, 3, 2, 3], 40)],
        Box::new(|g, v| {
            let y = g.gap(v[0])?;
            project(g, y, 5)
        }),
    ));
    cases.push((
        "linear",
        vec![rnd(&[3, 4], 41), rnd(&[5, 4], 42), rnd(&[5], 43)],
        Box::new(|g, v| {
            let y = g.linear(v[0], v[1], Some(v[2]))?;
            project(g, y, 6)
        }),
    ));
    cases.push((
        "concat",
        vec![rnd(&[2, 1, 2, 2], 44), rnd(&[2, 3, 2, 2], 45)],
        Box::new(|g, v| {
            let y = g.concat(&[v[0], v[1]], 1)?;
            project(g, y, 7)
        }),
    ));
    cases.push((
        "scale_rows",
        vec![rnd(&[4, 2, 3], 46), rnd(&[2, 2], 47)],
        Box::new(|g, v| {
            let y = g.scale_rows(v[0], v[1])?;
            project(g, y, 8)
        }),
    ));
    cases.push((
        "softmax_ce",
        vec![rnd(&[3, 4], 50)],
        Box::new(|g, v| g.softmax_cross_entropy(v[0], &[0, 3, 2])),
    ));
    let t = Tensor::from_vec(&[2, 3], vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0]).expect("shape");
    cases.push((
        "bce",
        vec![rnd(&[2, 3], 51).scale(3.0)],
        Box::new(move |g, v| g.binary_cross_entropy(v[0], &t)),
    ));
    cases
}

fn spec(kind: ModelKind, outputs: usize, seed: u64) -> NetSpec {
    NetSpec {
        kind,
        joints: NUM_JOINTS,
        channels: 3,
        outputs,
        c_dim: 8,
        tau: 2.0 / 3.0,
        seed,
    }
}

fn random_reps(n: usize, hw: usize, seed: u64) -> Vec<PoseRepresentation<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| PoseRepresentation {
            channels: 3,
            joints: NUM_JOINTS,
            height: hw,
            width: hw,
            data: (0..3 * NUM_JOINTS * hw * hw).map(|_| rng.gen::<f32>()).collect(),
            norm: NormTag::Tan,
            source_frames: 20,
        })
        .collect()
}

fn batch<T: Scalar>(r: &[PoseRepresentation<f32>]) -> Tensor<T> {
    batch_input::<T, f32>(&r.iter().collect::<Vec<_>>()).expect("batch")
}

fn jmrn_loss_error() -> Result<f64, String> {
    let mut net = Network::<f64>::new(spec(ModelKind::Jmrn, 3, 19)).map_err(|e| e.to_string())?;
    let x = batch::<f64>(&random_reps(2, 16, 20));
    let labels = [1usize, 2];
    let loss = |net: &mut Network<f64>| -> (f64, Vec<Tensor<f64>>) {
        let (arch, mut s) = net.session(true, true);
        let xv = s.input(x.clone());
        let out = arch
            .forward(&mut s, xv, GateMode::Sampled, &mut ChaCha8Rng::seed_from_u64(21))
            .expect("forward");
        let ce = s.graph.softmax_cross_entropy(out.logits, &labels).expect("ce");
        let reg = batch_shaping_loss(&mut s.graph, out.gate.expect("gated").0, 0.6, 0.4).expect("reg");
        let reg = s.graph.scale(reg, 0.1).expect("scale");
        let l = s.graph.add(ce, reg).expect("add");
        let v = s.graph.value(l).data()[0];
        s.backward(l).expect("backward");
        (v, s.param_grads())
    };
    let (_, grads) = loss(&mut net);
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let (mut an, mut nu) = (Vec::new(), Vec::new());
    let count = net.store.params().len();
    for _ in 0..40 {
        let pi = rng.gen_range(0..count);
        let e = rng.gen_range(0..grads[pi].numel());
        let orig = net.store.params()[pi].value.data()[e];
        net.store.params_mut()[pi].value.data_mut()[e] = orig + 1e-5;
        let (p, _) = loss(&mut net);
        net.store.params_mut()[pi].value.data_mut()[e] = orig - 1e-5;
        let (m, _) = loss(&mut net);
        net.store.params_mut()[pi].value.data_mut()[e] = orig;
        an.push(grads[pi].data()[e]);
        nu.push((p - m) / 2e-5);
    }
    Ok(relative_error(&an, &nu))
}

fn criterion1() -> Outcome {
    let mut worst: (f64, &str) = (0.0, "");
    for (name, inputs, f) in layer_cases() {
        let r = gradcheck::check(&inputs, f, DEFAULT_STEP, 64).map_err(|e| format!("{name}: {e}"))?;
        if r.max_relative_error() >= worst.0 {
            worst = (r.max_relative_error(), name);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut shaping: f64 = 0.0;
    for _ in 0..20 {
        let (n, j) = (rng.gen_range(2..12), rng.gen_range(1..4));
        let w: Vec<f64> = (0..n * j).map(|_| rng.gen_range(0.05..0.95)).collect();
        let t = Tensor::from_vec(&[n, j], w).map_err(|e| e.to_string())?;
        let r = gradcheck::check(&[t], |g, v| batch_shaping_loss(g, v[0], 0.6, 0.4).map_err(tensor_err), 1e-7, 64)
            .map_err(|e| e.to_string())?;
        shaping = shaping.max(r.max_relative_error());
    }
    let e2e = jmrn_loss_error()?;
    Ok(verdict(
        worst.0 < 1e-4 && shaping < 1e-4 && e2e < 1e-3,
        format!(
            "worst layer {} {:.1e}; batch shaping {:.1e}; full JMRN loss {:.1e}",
            worst.1, worst.0, shaping, e2e
        ),
    ))
}

// ---------------------------------------------------------------- criterion 2

fn random_seq(rng: &mut ChaCha8Rng) -> HeatmapSequence<f64> {
    let t = rng.gen_range(3..30);
    let j = rng.gen_range(1..5);
    let (h, w) = (rng.gen_range(1..7), rng.gen_range(1..7));
    let data = (0..t * j * h * w).map(|_| rng.gen::<f64>()).collect();
    HeatmapSequence::new(t, j, h, w, data).expect("sequence")
}

fn criterion2() -> Outcome {
    let e = |x: CoreError| x.to_string();
    let mut unity: f64 = 0.0;
    for t in 2..80 {
        for c in 2..=t.min(6) {
            let k = build_kernel(t, c).map_err(e)?;
            for f in 0..t {
                let s: f64 = (0..c).map(|ch| k.weight(f, ch)).sum();
                unity = unity.max((s - 1.0).abs());
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (mut range_ok, mut rep_ratio, mut linear): (bool, f64, f64) = (true, 0.0, 0.0);
    for _ in 0..CASES {
        let seq = random_seq(&mut rng);
        let c = rng.gen_range(2..=seq.frames.min(4));
        let p = encode(&seq, c, NormMode::Tan).map_err(e)?;
        range_ok &= p.data.iter().all(|&v| (0.0..=1.0).contains(&v));

        let r = rng.gen_range(2..4);
        let frames: Vec<usize> = (0..seq.frames * r).map(|t| t / r).collect();
        let long = encode(&seq.select_frames(&frames).map_err(e)?, c, NormMode::Tan).map_err(e)?;
        let diff = p.data.iter().zip(&long.data).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        rep_ratio = rep_ratio.max(diff / (2.0 * c as f64 / seq.frames as f64));

        let bdata = (0..seq.data.len()).map(|_| rng.gen::<f64>()).collect();
        let b = HeatmapSequence::new(seq.frames, seq.joints, seq.height, seq.width, bdata).map_err(e)?;
        let alpha: f64 = rng.gen();
        let mix = seq.data.iter().zip(&b.data).map(|(x, y)| alpha * x + (1.0 - alpha) * y).collect();
        let m = HeatmapSequence::new(seq.frames, seq.joints, seq.height, seq.width, mix).map_err(e)?;
        let k = build_kernel(seq.frames, c).map_err(e)?;
        let (pa, pb, pm) = (aggregate(&seq, &k).map_err(e)?, aggregate(&b, &k).map_err(e)?, aggregate(&m, &k).map_err(e)?);
        for i in 0..pm.data.len() {
            linear = linear.max((pm.data[i] - (alpha * pa.data[i] + (1.0 - alpha) * pb.data[i])).abs());
        }
    }
    let mut stationary: f64 = 0.0;
    for _ in 0..CASES {
        let t = rng.gen_range(2..100);
        let c = rng.gen_range(2..=t.min(5));
        let mut seq = HeatmapSequence::<f32>::zeros(t, 1, 3, 3).map_err(e)?;
        let px = rng.gen_range(0..9);
        for f in 0..t {
            seq.plane_mut(f, 0)[px] = 1.0;
        }
        let p = encode(&seq, c, NormMode::Tan).map_err(e)?;
        for ch in 0..c {
            stationary = stationary.max((p.slice(ch, 0)[px] as f64 - 1.0).abs());
        }
    }
    Ok(verdict(
        unity <= 1e-6 && range_ok && stationary <= 1e-6 && rep_ratio < 1.0 && linear <= 1e-6,
        format!(
            "unity {unity:.1e}; TAN in [0,1] {range_ok}; stationary {stationary:.1e}; \
             repetition diff/bound {rep_ratio:.3}; linearity {linear:.1e}"
        ),
    ))
}

// ---------------------------------------------------------------- criterion 3

fn random_rep(rng: &mut ChaCha8Rng, h: usize, w: usize) -> PoseRepresentation<f64> {
    PoseRepresentation {
        channels: 3,
        joints: NUM_JOINTS,
        height: h,
        width: w,
        data: (0..3 * NUM_JOINTS * h * w).map(|_| rng.gen::<f64>()).collect(),
        norm: NormTag::Tan,
        source_frames: 10,
    }
}

fn peak(v: &[f64]) -> usize {
    (0..v.len()).fold(0, |b, i| if v[i] > v[b] { i } else { b })
}

fn criterion3() -> Outcome {
    let e = |x: CoreError| x.to_string();
    let g = JointGroups::coco();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let jitter = AugmentParams {
        beta: 3,
        gamma: 2,
        flip_prob: 0.0,
    };
    let mut commute: f64 = 0.0;
    for _ in 0..CASES {
        let t = rng.gen_range(3..12);
        let (h, w) = (rng.gen_range(12..16), rng.gen_range(12..16));
        let data = (0..t * NUM_JOINTS * h * w).map(|_| rng.gen::<f64>()).collect();
        let seq = HeatmapSequence::new(t, NUM_JOINTS, h, w, data).map_err(e)?;
        let o = sample_offsets(&jitter, &mut rng);
        let a = encode(&shift_sequence(&seq, &g, &o).map_err(e)?, 3, NormMode::Tan).map_err(e)?;
        let b = paa_with_offsets(&encode(&seq, 3, NormMode::Tan).map_err(e)?, &g, &jitter, &o).map_err(e)?;
        commute = commute.max(a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max));
    }

    let mut geometry = true;
    let (h, w) = (24, 24);
    let wide = AugmentParams {
        beta: 3,
        gamma: 3,
        flip_prob: 0.0,
    };
    for _ in 0..CASES {
        let mut p = random_rep(&mut rng, h, w);
        p.data.iter_mut().for_each(|v| *v *= 0.1);
        let mut pos = Vec::new();
        for j in 0..NUM_JOINTS {
            let (x, y) = (rng.gen_range(6..18), rng.gen_range(6..18));
            for c in 0..3 {
                p.slice_mut(c, j)[y * w + x] = 1.0;
            }
            pos.push((x as isize, y as isize));
        }
        let out = paa(&p, &g, &wide, &mut rng).map_err(e)?;
        let at = |j: usize| {
            let i = peak(out.slice(0, j));
            ((i % w) as isize, (i / w) as isize)
        };
        for grp in Group::ALL {
            for pair in g.members(grp).windows(2) {
                let (a, b) = (pair[0], pair[1]);
                let (pa, pb) = (at(a), at(b));
                geometry &= (pa.0 - pb.0, pa.1 - pb.1) == (pos[a].0 - pos[b].0, pos[a].1 - pos[b].1);
            }
        }
    }

    let (mut involution, mut identity) = (true, true);
    let none = AugmentParams {
        beta: 0,
        gamma: 0,
        flip_prob: 0.0,
    };
    for _ in 0..CASES {
        let (h, w) = (rng.gen_range(1..9), rng.gen_range(1..9));
        let p = random_rep(&mut rng, h, w);
        involution &= hflip(&hflip(&p, &g).map_err(e)?, &g).map_err(e)? == p;
        identity &= augment(&p, &g, &none, &mut rng).map_err(e)? == p;
    }
    Ok(verdict(
        commute <= 1e-6 && geometry && involution && identity,
        format!("commutation {commute:.1e}; geometry {geometry}; hflip involution {involution}; zero-jitter identity {identity}"),
    ))
}

// ---------------------------------------------------------------- criterion 4

fn randomize_bn<T: Scalar>(net: &mut Network<T>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in net.store.params_mut() {
        if p.name.ends_with(".gamma") {
            p.value.data_mut().iter_mut().for_each(|v| *v = T::from_f64(rng.gen_range(0.5..1.5)));
        } else if p.name.ends_with(".beta") {
            p.value.data_mut().iter_mut().for_each(|v| *v = T::from_f64(rng.gen_range(-0.5..0.5)));
        }
    }
    for b in net.store.buffers_mut() {
        let r = if b.name.ends_with("running_mean") { -0.2..0.2 } else { 0.5..2.0 };
        b.value.data_mut().iter_mut().for_each(|v| *v = T::from_f64(rng.gen_range(r.clone())));
    }
}

fn swap_blocks<T: Scalar>(t: &mut Tensor<T>, outer: usize, k: usize, block: usize, inner: usize, a: usize, b: usize) {
    let d = t.data_mut();
    for o in 0..outer {
        for i in 0..block * inner {
            d.swap((o * k + a) * block * inner + i, (o * k + b) * block * inner + i);
        }
    }
}

fn eval_forward(net: &mut Network<f32>, x: &Tensor<f32>) -> (Tensor<f32>, Tensor<f32>) {
    let (arch, mut s) = net.session(false, false);
    let xv = s.input(x.clone());
    let out = arch
        .forward(&mut s, xv, GateMode::Deterministic, &mut ChaCha8Rng::seed_from_u64(0))
        .expect("forward");
    let w = s.graph.value(out.gate.expect("gated").0).clone();
    (s.graph.value(out.logits).clone(), w)
}

fn equivariance_drift() -> f64 {
    let (a, b, n, hw) = (2, 15, 4, 16);
    let mut net = Network::<f32>::new(spec(ModelKind::Jmrn, 6, 12)).expect("net");
    randomize_bn(&mut net, 13);
    let x = batch::<f32>(&random_reps(n, hw, 14));
    let (logits, w) = eval_forward(&mut net, &x);
    let m = net.arch.as_jmrn().expect("jmrn").clone();
    let mut px = x.clone();
    swap_blocks(&mut px, n, NUM_JOINTS, 3, hw * hw, a, b);
    let st = &mut net.store;
    for id in [m.input_bn.gamma, m.input_bn.beta] {
        swap_blocks(st.param_mut(id), 1, NUM_JOINTS, 3, 1, a, b);
    }
    for id in [m.input_bn.running_mean, m.input_bn.running_var] {
        swap_blocks(st.buffer_mut(id), 1, NUM_JOINTS, 3, 1, a, b);
    }
    swap_blocks(st.param_mut(m.gate_conv.weight), 256, NUM_JOINTS, 256, 1, a, b);
    swap_blocks(st.param_mut(m.gate_fc.weight), 1, NUM_JOINTS, 256, 1, a, b);
    swap_blocks(st.param_mut(m.gate_fc.bias), 1, NUM_JOINTS, 1, 1, a, b);
    swap_blocks(st.param_mut(m.reduce.weight), 256, NUM_JOINTS, 8, 1, a, b);
    let (pl, pw) = eval_forward(&mut net, &px);
    let mut ew = w;
    swap_blocks(&mut ew, n, NUM_JOINTS, 1, 1, a, b);
    (pw.max_abs_diff(&ew) as f64).max(pl.max_abs_diff(&logits) as f64)
}

fn criterion4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 10_000;
    let (mut saturation, mut worst_sigma): (f64, f64) = (1.0, 0.0);
    for pi in [-1.5, -0.3, 0.0, 0.7, 2.0] {
        let draws: Vec<f64> = (0..n).map(|_| bin_concrete(pi, 0.01, &mut rng)).collect();
        saturation = saturation.min(mean(&draws.iter().map(|&w| w.max(1.0 - w)).collect::<Vec<_>>()));
        let p = sigmoid(pi);
        let sd = (p * (1.0 - p) / n as f64).sqrt();
        worst_sigma = worst_sigma.max((mean(&draws) - p).abs() / sd);
    }
    let mut shaping: f64 = 0.0;
    for &(n, j) in &[(2usize, 1usize), (8, 3), (32, 19)] {
        let q: Vec<f64> = plotting_positions(n).iter().map(|&p| beta_quantile(p, 0.6, 0.4)).collect();
        let w: Vec<f64> = (0..n * j).map(|k| q[k / j]).collect();
        shaping = shaping.max(batch_shaping(&w, n, j, 0.6, 0.4).map_err(|e| e.to_string())?.0);
    }
    let drift = equivariance_drift();
    Ok(verdict(
        saturation > 0.99 && worst_sigma < 3.0 && shaping <= 1e-8 && drift <= 1e-5,
        format!(
            "tau=0.01 saturation {saturation:.4}; mean within {worst_sigma:.2} sigma; \
             shaping at quantiles {shaping:.1e}; permutation drift {drift:.1e}"
        ),
    ))
}

// ---------------------------------------------------------------- criterion 5

struct Arm {
    name: &'static str,
    model: &'static str,
    norm: &'static str,
    beta: usize,
    gamma: usize,
}

const ARMS: [Arm; 4] = [
    Arm {
        name: "jmrn+paa+tan",
        model: "jmrn",
        norm: "tan",
        beta: 2,
        gamma: 2,
    },
    Arm {
        name: "baseline+max",
        model: "baseline",
        norm: "max",
        beta: 0,
        gamma: 0,
    },
    Arm {
        name: "jmrn+paa+max",
        model: "jmrn",
        norm: "max",
        beta: 2,
        gamma: 2,
    },
    Arm {
        name: "jmrn+noaug+tan",
        model: "jmrn",
        norm: "tan",
        beta: 0,
        gamma: 0,
    },
];

fn train_args<'a>(seed: &'a str, epochs: &'a str, model: &'a str, norm: &'a str) -> Vec<&'a str> {
    vec!["--seed", seed, "--epochs", epochs, "--lr", "1e-3", "--model", model, "--norm", norm]
}

fn criterion5(s: &Scale, root: &Path) -> Outcome {
    let start = Instant::now();
    let mut acc = vec![Vec::new(); ARMS.len()];
    let mut slowest: f64 = 0.0;
    for &seed in &s.seeds {
        let data = write_spec(
            &root.join(format!("c5_spec{seed}.json")),
            &json!({ "samples_per_class": s.per_class, "height": s.hw, "width": s.hw, "seed": seed }),
        );
        for (i, arm) in ARMS.iter().enumerate() {
            let out = root.join(format!("c5_{}_{seed}", arm.name));
            let (seed_s, ep, b, g) = (seed.to_string(), s.epochs.to_string(), arm.beta.to_string(), arm.gamma.to_string());
            let mut args = train_args(&seed_s, &ep, arm.model, arm.norm);
            let out_s = out.to_string_lossy();
            args.extend(["train", "--data", &data, "--out", &out_s, "--beta", &b, "--gamma", &g]);
            let t = Instant::now();
            let v = pmk(&args)?;
            slowest = slowest.max(t.elapsed().as_secs_f64());
            acc[i].push(num(&v, "best_metric")?);
        }
    }
    let m: Vec<f64> = acc.iter().map(|a| mean(a)).collect();
    let (a, b, c) = (m[0] >= m[1] + 0.02, m[0] >= m[2], m[0] >= m[3]);
    let total = start.elapsed().as_secs_f64();
    let timing = slowest <= 600.0 && total <= 7200.0;
    let arms = ARMS
        .iter()
        .zip(&acc)
        .map(|(arm, v)| format!("{} {:.3} [{}]", arm.name, mean(v), fmt(v)))
        .collect::<Vec<_>>()
        .join("; ");
    Ok(verdict(
        a && b && c && timing,
        format!(
            "(a) {} (b) {} (c) {}; {arms}; slowest run {slowest:.0}s, total {total:.0}s",
            pf(a),
            pf(b),
            pf(c)
        ),
    ))
}

fn pf(b: bool) -> &'static str {
    if b {
        "PASS"
    } else {
        "FAIL"
    }
}

// ---------------------------------------------------------------- criterion 6

fn criterion6(s: &Scale, root: &Path) -> Outcome {
    let mut gaps = Vec::new();
    let (mut dis_m, mut inf_m) = (Vec::new(), Vec::new());
    let mut ordered = true;
    for &seed in &s.seeds {
        let spec = SynthSpec {
            samples_per_class: s.distract_per_class,
            height: s.hw,
            width: s.hw,
            seed,
            ..SynthSpec::default()
        }
        .with_distractors();
        let distractors: Vec<usize> = spec.distractors.iter().filter_map(|n| index_of(n)).collect();
        let data = write_spec(&root.join(format!("c6_spec{seed}.json")), &serde_json::to_value(&spec).map_err(|e| e.to_string())?);
        let out = root.join(format!("c6_{seed}"));
        let (seed_s, ep) = (seed.to_string(), s.distract_epochs.to_string());
        let mut args = train_args(&seed_s, &ep, "jmrn", "tan");
        let out_s = out.to_string_lossy();
        args.extend(["train", "--data", &data, "--out", &out_s]);
        pmk(&args)?;
        let text = std::fs::read_to_string(out.join("metrics.json")).map_err(|e| e.to_string())?;
        let metrics: Value = serde_json::from_str(&text).map_err(|e| e.to_string())?;
        let gate: Vec<f64> = metrics["summary"]["gate_mean"]
            .as_array()
            .ok_or("metrics.json has no gate means")?
            .iter()
            .filter_map(Value::as_f64)
            .collect();
        let body = NUM_JOINTS - 1;
        let dis = mean(&distractors.iter().map(|&j| gate[j]).collect::<Vec<_>>());
        let inf = mean(&(0..body).filter(|j| !distractors.contains(j)).map(|j| gate[j]).collect::<Vec<_>>());
        ordered &= dis < inf;
        gaps.push(inf - dis);
        dis_m.push(dis);
        inf_m.push(inf);
    }
    let gap = mean(&gaps);
    Ok(verdict(
        ordered && gap >= 0.1,
        format!(
            "distractor mean {:.3} [{}], informative mean {:.3} [{}], gap {gap:.3}",
            mean(&dis_m),
            fmt(&dis_m),
            mean(&inf_m),
            fmt(&inf_m)
        ),
    ))
}

// ---------------------------------------------------------------- criterion 7

struct ClipResult {
    agreement_full: f64,
    selected: f64,
    dense: f64,
    random: f64,
    auc: f64,
}

fn clip_run(s: &Scale, root: &Path, seed: u64) -> Result<ClipResult, String> {
    let data = write_spec(
        &root.join(format!("c7_spec{seed}.json")),
        &json!({ "samples_per_class": s.videos_per_class, "height": s.clip_hw, "width": s.clip_hw, "seed": seed }),
    );
    let run = root.join(format!("c7_{seed}"));
    let run_s = run.to_string_lossy().into_owned();
    let (seed_s, ep) = (seed.to_string(), s.clip_epochs.to_string());
    let base = [
        "--seed", &seed_s, "--epochs", &ep, "--lr", "1e-3", "--ranker-epochs", "20", "--ranker-pairs", "512",
    ];
    let with = |tail: &[&str]| -> Result<Value, String> {
        let mut a: Vec<&str> = base.to_vec();
        a.extend_from_slice(tail);
        pmk(&a)
    };
    with(&["clips-oracle", "--data", &data, "--out", &run_s])?;
    with(&["clips-train", "--data", &data, "--run", &run_s])?;
    let sel = with(&["clips-select", "--data", &data, "--run", &run_s])?;
    let full = with(&["clips-select", "--data", &data, "--run", &run_s, "--k", &MAX_CLIPS_S.to_string()])?;
    Ok(ClipResult {
        agreement_full: num(&full, "dense_agreement")?,
        selected: num(&sel, "selected_accuracy")?,
        dense: num(&sel, "dense_accuracy")?,
        random: num(&sel, "random_accuracy")?,
        auc: num(&sel, "action_auc")?,
    })
}

const MAX_CLIPS_S: usize = pmk_core::clipselect::MAX_CLIPS;

/// Returns (7a, 7b and 7c together).
fn criterion7(s: &Scale, root: &Path) -> (Outcome, Outcome) {
    let start = Instant::now();
    let mut results = Vec::new();
    for &seed in &s.seeds {
        match clip_run(s, root, seed) {
            Ok(r) => results.push(r),
            Err(e) => return (Err(e.clone()), Err(e)),
        }
    }
    let agree: Vec<f64> = results.iter().map(|r| r.agreement_full).collect();
    let a = verdict(
        agree.iter().all(|&x| x == 1.0),
        format!("K=N agreement with dense per seed [{}]", fmt(&agree)),
    );
    let pick = |f: fn(&ClipResult) -> f64| results.iter().map(f).collect::<Vec<f64>>();
    let (sel, dense, rand, auc) = (pick(|r| r.selected), pick(|r| r.dense), pick(|r| r.random), pick(|r| r.auc));
    let b = mean(&sel) >= mean(&dense) - 0.005 && mean(&sel) >= mean(&rand) + 0.02;
    let c = mean(&auc) >= 0.9;
    let secs = start.elapsed().as_secs_f64();
    let bc = verdict(
        b && c && secs <= 3600.0,
        format!(
            "(b) {} selected {:.3} [{}] dense {:.3} [{}] random {:.3} [{}]; (c) {} AUC {:.3} [{}]; {secs:.0}s",
            pf(b),
            mean(&sel),
            fmt(&sel),
            mean(&dense),
            fmt(&dense),
            mean(&rand),
            fmt(&rand),
            pf(c),
            mean(&auc),
            fmt(&auc)
        ),
    );
    (Ok(a), Ok(bc))
}

// ---------------------------------------------------------------- criterion 8

fn criterion8(root: &Path) -> Outcome {
    let e = |x: CoreError| x.to_string();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let t = Tensor::<f32>::rand_uniform(&[3, 19, 8, 8], 0.0, 1.0, &mut rng);
    let mut meta = Meta::new();
    meta.insert("note".into(), "round trip".into());
    let (a, b) = (root.join("c8_a.pmkt"), root.join("c8_b.pmkt"));
    write_tensor(&a, &t, &meta).map_err(e)?;
    let (back, meta_back) = read_tensor_meta::<f32>(&a).map_err(e)?;
    write_tensor(&b, &back, &meta_back).map_err(e)?;
    let sha = |p: &PathBuf| std::fs::read(p).map(|bytes| sha256_hex(&bytes)).map_err(|x| x.to_string());
    let container = sha(&a)? == sha(&b)? && back == t;

    let data = write_spec(
        &root.join("c8_spec.json"),
        &json!({ "samples_per_class": 3, "height": 16, "width": 16, "seed": 4 }),
    );
    let mut runs = Vec::new();
    for k in 0..2 {
        let out = root.join(format!("c8_run{k}"));
        let out_s = out.to_string_lossy();
        pmk(&["--deterministic", "--seed", "4", "--epochs", "2", "--lr", "1e-3", "train", "--data", &data, "--out", &out_s])?;
        runs.push(sha(&out.join("metrics.json"))?);
    }
    let same = runs[0] == runs[1];
    Ok(verdict(
        container && same,
        format!("container SHA-256 identical {container}; deterministic metrics.json identical {same}"),
    ))
}

// ---------------------------------------------------------------- criterion 9

fn criterion9() -> Outcome {
    let shape = ["bench", "--op", "aggregate", "--shape", "64x19x64x64", "--frames", "64", "--reps", "3"];
    let mut one = vec!["--deterministic"];
    one.extend(shape);
    let single = num(&pmk(&one)?, "accumulates_per_second")?;
    let mut four = vec!["--workers", "4"];
    four.extend(shape);
    let multi = num(&pmk(&four)?, "accumulates_per_second")?;
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    let speedup = multi / single;
    Ok(verdict(
        single >= 5e7 && speedup >= 3.0,
        format!(
            "single thread {single:.2e} acc/s ({}); 4 workers {multi:.2e} acc/s, speedup {speedup:.2} ({}); {cores} core(s) available",
            pf(single >= 5e7),
            pf(speedup >= 3.0)
        ),
    ))
}

// ---------------------------------------------------------------- report

fn main() {
    let scale = Scale::from_env();
    let dir = tempfile::tempdir().expect("temp dir");
    let root = dir.path();
    println!("acceptance scale: {}", scale.name);

    let mut lines: Vec<Line> = Vec::new();
    timed(&mut lines, "1 numerical core", true, criterion1);
    timed(&mut lines, "2 encoding invariants", true, criterion2);
    timed(&mut lines, "3 PAA correctness", true, criterion3);
    timed(&mut lines, "4 gate mechanics", true, criterion4);
    timed(&mut lines, "5 directional comparison", false, || criterion5(&scale, root));
    timed(&mut lines, "6 gating of distractors", false, || criterion6(&scale, root));
    let t7 = Instant::now();
    let (a, bc) = criterion7(&scale, root);
    let s7 = t7.elapsed().as_secs_f64();
    for (id, asserted, o) in [("7a K=N equals dense", true, a), ("7bc clip selection", false, bc)] {
        report(id, asserted, &o, s7);
        lines.push((id, asserted, o, s7));
    }
    timed(&mut lines, "8 formats and determinism", true, || criterion8(root));
    timed(&mut lines, "9 performance floor", false, criterion9);

    println!("\nsummary:");
    let mut failed = Vec::new();
    for (id, asserted, o, secs) in &lines {
        let pass = matches!(o, Ok(v) if v.pass);
        println!("{} {id} ({secs:.0}s){}", pf(pass), if *asserted { "" } else { " [reported]" });
        if *asserted && !pass {
            failed.push(*id);
        }
    }
    if !failed.is_empty() {
        eprintln!("asserted criteria failed: {}", failed.join(", "));
        std::process::exit(1);
    }
}

type Line = (&'static str, bool, Outcome, f64);

fn timed(lines: &mut Vec<Line>, id: &'static str, asserted: bool, f: impl FnOnce() -> Outcome) {
    let t = Instant::now();
    let o = f();
    let secs = t.elapsed().as_secs_f64();
    report(id, asserted, &o, secs);
    lines.push((id, asserted, o, secs));
}

fn report(id: &str, asserted: bool, o: &Outcome, secs: f64) {
    let (pass, detail) = match o {
        Ok(v) => (v.pass, v.detail.clone()),
        Err(e) => (false, format!("error: {e}")),
    };
    println!(
        "{} criterion {id}{}: {detail} ({secs:.1}s)",
        pf(pass),
        if asserted { "" } else { " [reported]" }
    );
}
