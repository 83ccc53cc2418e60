use pmk_core::config::{ModelKind, RunConfig};
use pmk_core::encoding::{NormTag, PoseRepresentation};
use pmk_core::joints::NUM_JOINTS;
use pmk_core::training::{train_classifier, Dataset, Sample};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: usize = 16;

/// Class 0 puts a wrist blob in the top-left quadrant, class 1 bottom-right.
fn separable(n: usize, seed: u64) -> Vec<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let label = i % 2;
            let mut data: Vec<f32> = (0..3 * NUM_JOINTS * H * H).map(|_| rng.gen::<f32>() * 0.05).collect();
            let (x, y) = if label == 0 {
                (rng.gen_range(1..6), rng.gen_range(1..6))
            } else {
                (rng.gen_range(10..15), rng.gen_range(10..15))
            };
            for c in 0..3 {
                data[(c * NUM_JOINTS + 4) * H * H + y * H + x] = 1.0;
            }
            Sample {
                id: format!("s{i}"),
                label,
                rep: PoseRepresentation {
                    channels: 3,
                    joints: NUM_JOINTS,
                    height: H,
                    width: H,
                    data,
                    norm: NormTag::Tan,
                    source_frames: 30,
                },
            }
        })
        .collect()
}

fn data() -> Dataset {
    Dataset {
        num_classes: 2,
        train: separable(16, 1),
        val: separable(8, 2),
    }
}

fn cfg(model: ModelKind) -> RunConfig {
    RunConfig {
        model,
        beta: 0,
        gamma: 0,
        flip_prob: 0.0,
        lr: 1e-3,
        epochs: 20,
        batch_size: 8,
        c_dim: 8,
        ..RunConfig::default()
    }
}

#[test]
fn separable_two_class_set_is_fit() {
    for model in [ModelKind::Jmrn, ModelKind::Baseline] {
        let out = train_classifier(&data(), &cfg(model), |_| {}).unwrap();
        let best = out.history.iter().map(|r| r.train_accuracy).fold(0.0, f64::max);
        assert!(best >= 0.99, "{model:?}: {best}");
        assert_eq!(out.history.len(), 20);
        assert_eq!(out.steps, 40);
    }
}

#[test]
fn zero_lambda_reports_no_shaping_loss() {
    let c = RunConfig {
        lambda_reg: 0.0,
        epochs: 2,
        ..cfg(ModelKind::Jmrn)
    };
    let out = train_classifier(&data(), &c, |_| {}).unwrap();
    assert!(out.history.iter().all(|r| r.reg_loss == 0.0));
    let c = RunConfig { epochs: 2, ..cfg(ModelKind::Jmrn) };
    let out = train_classifier(&data(), &c, |_| {}).unwrap();
    assert!(out.history.iter().all(|r| r.reg_loss > 0.0));
    assert_eq!(out.history[0].gate_mean.len(), NUM_JOINTS);
}

#[test]
fn fixed_seed_is_deterministic() {
    let c = RunConfig {
        epochs: 3,
        beta: 2,
        gamma: 2,
        flip_prob: 0.5,
        ..cfg(ModelKind::Jmrn)
    };
    let a = train_classifier(&data(), &c, |_| {}).unwrap();
    let b = train_classifier(&data(), &c, |_| {}).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(a.net.store, b.net.store);
    let other = train_classifier(&data(), &RunConfig { seed: 1, ..c }, |_| {}).unwrap();
    assert_ne!(a.history, other.history);
}

#[test]
fn empty_splits_are_rejected() {
    let d = Dataset {
        num_classes: 2,
        train: separable(4, 1),
        val: Vec::new(),
    };
    assert!(train_classifier(&d, &cfg(ModelKind::Baseline), |_| {}).is_err());
}
