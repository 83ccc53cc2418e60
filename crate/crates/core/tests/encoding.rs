use pmk_core::config::NormMode;
use pmk_core::encoding::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const CASES: u64 = 120;

fn random_seq(rng: &mut ChaCha8Rng) -> HeatmapSequence<f64> {
    let t = rng.gen_range(3..30);
    let j = rng.gen_range(1..5);
    let h = rng.gen_range(1..7);
    let w = rng.gen_range(1..7);
    let data = (0..t * j * h * w).map(|_| rng.gen::<f64>()).collect();
    HeatmapSequence::new(t, j, h, w, data).unwrap()
}

#[test]
fn kernel_partition_of_unity() {
    for t in 2..80 {
        for c in 2..=t.min(6) {
            let k = build_kernel(t, c).unwrap();
            for f in 0..t {
                let s: f64 = (0..c).map(|ch| k.weight(f, ch)).sum();
                assert!((s - 1.0).abs() <= 1e-6, "T={t} C={c} t={f}: {s}");
                for ch in 0..c {
                    assert!((0.0..=1.0).contains(&k.weight(f, ch)));
                }
            }
        }
    }
}

#[test]
fn kernel_examples() {
    let k = build_kernel(3, 3).unwrap();
    for t in 0..3 {
        for c in 0..3 {
            assert_eq!(k.weight(t, c), if t == c { 1.0 } else { 0.0 });
        }
    }
    let k = build_kernel(5, 2).unwrap();
    for t in 0..5 {
        let expect = t as f64 / 4.0;
        assert!((k.weight(t, 1) - expect).abs() < 1e-12);
        assert!((k.weight(t, 0) - (1.0 - expect)).abs() < 1e-12);
    }
    assert!(build_kernel(2, 3).is_err());
    assert!(build_kernel(1, 1).is_err());
}

#[test]
fn aggregate_matches_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..CASES {
        let seq = random_seq(&mut rng);
        let c = rng.gen_range(2..=seq.frames.min(4));
        let k = build_kernel(seq.frames, c).unwrap();
        let p = aggregate(&seq, &k).unwrap();
        assert_eq!(p.norm, NormTag::Raw);
        let n = seq.height * seq.width;
        for ch in 0..c {
            for j in 0..seq.joints {
                for i in 0..n {
                    let mut s = 0.0;
                    for t in 0..seq.frames {
                        s += seq.plane(t, j)[i] * k.weight(t, ch);
                    }
                    assert!((p.slice(ch, j)[i] - s).abs() <= 1e-6);
                }
            }
        }
    }
}

#[test]
fn aggregate_small_explicit_case() {
    // 4 frames, 2 joints, 3x3.
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let data: Vec<f64> = (0..4 * 2 * 9).map(|_| rng.gen()).collect();
    let seq = HeatmapSequence::new(4, 2, 3, 3, data.clone()).unwrap();
    let k = build_kernel(4, 2).unwrap();
    let p = aggregate(&seq, &k).unwrap();
    for c in 0..2 {
        for j in 0..2 {
            for y in 0..3 {
                for x in 0..3 {
                    let mut s = 0.0;
                    for t in 0..4 {
                        s += data[((t * 2 + j) * 3 + y) * 3 + x] * k.weight(t, c);
                    }
                    assert!((p.slice(c, j)[y * 3 + x] - s).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn zeros_aggregate_to_zeros_and_delta_gives_kernel_sums() {
    let seq = HeatmapSequence::<f64>::zeros(10, 2, 4, 4).unwrap();
    let k = build_kernel(10, 3).unwrap();
    assert!(aggregate(&seq, &k).unwrap().data.iter().all(|&v| v == 0.0));

    let mut seq = HeatmapSequence::<f64>::zeros(10, 2, 4, 4).unwrap();
    for t in 0..10 {
        seq.plane_mut(t, 1)[6] = 1.0;
    }
    let p = aggregate(&seq, &k).unwrap();
    let sums = k.channel_sums();
    for c in 0..3 {
        for (i, &v) in p.slice(c, 1).iter().enumerate() {
            let expect = if i == 6 { sums[c] } else { 0.0 };
            assert!((v - expect).abs() < 1e-12);
        }
        assert!(p.slice(c, 0).iter().all(|&v| v == 0.0));
    }
}

#[test]
fn aggregate_rejects_frame_mismatch() {
    let seq = HeatmapSequence::<f64>::zeros(10, 1, 2, 2).unwrap();
    assert!(aggregate(&seq, &build_kernel(11, 3).unwrap()).is_err());
}

#[test]
fn tan_range_over_random_sequences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..CASES {
        let seq = random_seq(&mut rng);
        let c = rng.gen_range(2..=seq.frames.min(4));
        let p = encode(&seq, c, NormMode::Tan).unwrap();
        assert_eq!(p.norm, NormTag::Tan);
        assert!(p.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}

#[test]
fn stationary_joint_is_exactly_one() {
    for &(t, c) in &[(2usize, 2usize), (7, 3), (60, 3), (97, 5)] {
        let mut seq = HeatmapSequence::<f32>::zeros(t, 1, 3, 3).unwrap();
        for f in 0..t {
            seq.plane_mut(f, 0)[4] = 1.0;
        }
        let p = encode(&seq, c, NormMode::Tan).unwrap();
        for ch in 0..c {
            assert!((p.slice(ch, 0)[4] as f64 - 1.0).abs() <= 1e-6);
        }
    }
}

#[test]
fn first_half_presence_with_sixty_frames() {
    let mut seq = HeatmapSequence::<f64>::zeros(60, 1, 1, 1).unwrap();
    for f in 0..30 {
        seq.plane_mut(f, 0)[0] = 1.0;
    }
    let k = build_kernel(60, 3).unwrap();
    let p = encode(&seq, 3, NormMode::Tan).unwrap();
    let sums = k.channel_sums();
    for c in 0..3 {
        let part: f64 = (0..30).map(|t| k.weight(t, c)).sum();
        assert!((p.slice(c, 0)[0] - part / sums[c]).abs() < 1e-12);
    }
    assert!(p.slice(0, 0)[0] > 0.99);
    assert!(p.slice(2, 0)[0] < 0.01);
}

#[test]
fn moving_joint_tan_maxima_below_one_but_max_norm_hits_one() {
    let mut seq = HeatmapSequence::<f64>::zeros(20, 1, 1, 20).unwrap();
    for f in 0..20 {
        seq.plane_mut(f, 0)[f] = 1.0;
    }
    let tan = encode(&seq, 3, NormMode::Tan).unwrap();
    let max = encode(&seq, 3, NormMode::Max).unwrap();
    for c in 0..3 {
        assert!(tan.slice(c, 0).iter().cloned().fold(0.0, f64::max) < 1.0);
        assert_eq!(max.slice(c, 0).iter().cloned().fold(0.0, f64::max), 1.0);
    }
}

#[test]
fn frame_repetition_changes_tan_by_less_than_2c_over_t() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..CASES {
        let seq = random_seq(&mut rng);
        let c = rng.gen_range(2..=seq.frames.min(4));
        let rep = rng.gen_range(2..4);
        let frames: Vec<usize> = (0..seq.frames * rep).map(|t| t / rep).collect();
        let long = seq.select_frames(&frames).unwrap();
        let a = encode(&seq, c, NormMode::Tan).unwrap();
        let b = encode(&long, c, NormMode::Tan).unwrap();
        let bound = 2.0 * c as f64 / seq.frames as f64;
        let diff = a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(diff < bound, "T={} C={c} k={rep}: {diff} >= {bound}", seq.frames);
    }
}

#[test]
fn aggregation_is_linear() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..CASES {
        let a = random_seq(&mut rng);
        let bdata = (0..a.data.len()).map(|_| rng.gen::<f64>()).collect();
        let b = HeatmapSequence::new(a.frames, a.joints, a.height, a.width, bdata).unwrap();
        let alpha: f64 = rng.gen();
        let mix = a.data.iter().zip(&b.data).map(|(x, y)| alpha * x + (1.0 - alpha) * y).collect();
        let m = HeatmapSequence::new(a.frames, a.joints, a.height, a.width, mix).unwrap();
        let k = build_kernel(a.frames, 2).unwrap();
        let (pa, pb, pm) = (aggregate(&a, &k).unwrap(), aggregate(&b, &k).unwrap(), aggregate(&m, &k).unwrap());
        for i in 0..pm.data.len() {
            assert!((pm.data[i] - (alpha * pa.data[i] + (1.0 - alpha) * pb.data[i])).abs() <= 1e-6);
        }
    }
}

#[test]
fn max_norm_is_scale_invariant_and_tan_is_not() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..CASES {
        let seq = random_seq(&mut rng);
        let alpha = rng.gen_range(0.1..0.9);
        let scaled_data = seq.data.iter().map(|v| v * alpha).collect();
        let scaled = HeatmapSequence::new(seq.frames, seq.joints, seq.height, seq.width, scaled_data).unwrap();
        let (m1, m2) = (encode(&seq, 2, NormMode::Max).unwrap(), encode(&scaled, 2, NormMode::Max).unwrap());
        for (x, y) in m1.data.iter().zip(&m2.data) {
            assert!((x - y).abs() < 1e-9);
        }
        let (t1, t2) = (encode(&seq, 2, NormMode::Tan).unwrap(), encode(&scaled, 2, NormMode::Tan).unwrap());
        let diff = t1.data.iter().zip(&t2.data).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(diff > 1e-3);
    }
}

#[test]
fn max_norm_slices_peak_at_one_or_stay_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut seq = random_seq(&mut rng);
    let n = seq.height * seq.width;
    for t in 0..seq.frames {
        seq.plane_mut(t, 0).iter_mut().for_each(|v| *v = 0.0);
    }
    let p = encode(&seq, 2, NormMode::Max).unwrap();
    for c in 0..2 {
        assert!(p.slice(c, 0).iter().all(|&v| v == 0.0));
        for j in 1..seq.joints {
            let m = p.slice(c, j).iter().cloned().fold(0.0, f64::max);
            assert!((m - 1.0).abs() < 1e-12, "slice ({c},{j}) of {n} values peaks at {m}");
        }
    }
}

#[test]
fn raw_mode_keeps_tag() {
    let seq = HeatmapSequence::<f32>::zeros(5, 2, 2, 2).unwrap();
    assert_eq!(encode(&seq, 3, NormMode::Raw).unwrap().norm, NormTag::Raw);
}

#[test]
fn sequence_validation() {
    assert!(HeatmapSequence::<f32>::zeros(1, 1, 2, 2).is_err());
    assert!(HeatmapSequence::<f32>::zeros(2, 0, 2, 2).is_err());
    assert!(HeatmapSequence::<f32>::new(2, 1, 2, 2, vec![0.0; 7]).is_err());
}

#[test]
fn representation_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let seq = random_seq(&mut rng);
    let p = encode(&seq.clone(), 2, NormMode::Tan).unwrap().cast::<f32>();
    let path = dir.path().join("p.pmkt");
    save_representation(&path, &p, &Default::default()).unwrap();
    let (q, meta) = load_representation::<f32>(&path).unwrap();
    assert_eq!(p, q);
    assert_eq!(meta["norm"], "tan");
}
