//! Synthetic pose corpus: class-conditioned 2-D skeleton motion rendered as
//! Gaussian heatmaps, with detection dropout, observation noise, optional
//! leg occlusion and optional distractor joints.
//!
//! Every sample is generated from its own RNG stream (`seed`, sample index),
//! so any subset can be regenerated independently and in parallel.

use std::f64::consts::PI;
use std::path::Path;

use pmk_tensor::parallel;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::encoding::HeatmapSequence;
use crate::error::{CoreError, Result};
use crate::io::{write_tensor, Meta};
use crate::joints::*;
use crate::manifest::{Annotations, Manifest, Record, Split};

/// Version of the class definitions below. Bump when a motion changes.
pub const CLASS_VERSION: u32 = 1;
pub const CLIP_LEN: usize = 16;
pub const UNTRIMMED_FRAMES: usize = 384;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Action {
    Wave,
    Punch,
    Clap,
    Walk,
    Jump,
    Squat,
    Kick,
    IdleSway,
}

impl Action {
    pub const ALL: [Action; 8] = [
        Action::Wave,
        Action::Punch,
        Action::Clap,
        Action::Walk,
        Action::Jump,
        Action::Squat,
        Action::Kick,
        Action::IdleSway,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Action::Wave => "wave",
            Action::Punch => "punch",
            Action::Clap => "clap",
            Action::Walk => "walk",
            Action::Jump => "jump",
            Action::Squat => "squat",
            Action::Kick => "kick",
            Action::IdleSway => "idle-sway",
        }
    }

    /// Period range in frames.
    fn periods(self) -> (f64, f64) {
        match self {
            Action::Wave => (10.0, 16.0),
            Action::Punch => (16.0, 24.0),
            Action::Clap => (10.0, 16.0),
            Action::Walk => (12.0, 18.0),
            Action::Jump => (18.0, 26.0),
            Action::Squat => (30.0, 44.0),
            Action::Kick => (16.0, 24.0),
            Action::IdleSway => (40.0, 60.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub min_frames: usize,
    pub max_frames: usize,
    pub height: usize,
    pub width: usize,
    pub sigma: f64,
    pub dropout: f64,
    pub noise_std: f64,
    /// Joint names whose trajectories ignore the class.
    pub distractors: Vec<String>,
    /// Probability that knees and ankles are out of frame for a whole video.
    pub occlusion_prob: f64,
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            num_classes: 8,
            samples_per_class: 40,
            min_frames: 40,
            max_frames: 80,
            height: 64,
            width: 64,
            sigma: 1.5,
            dropout: 0.05,
            noise_std: 0.01,
            distractors: Vec::new(),
            occlusion_prob: 0.0,
            val_fraction: 0.2,
            seed: 0,
        }
    }
}

impl SynthSpec {
    /// The distractor variant: both ears wander independently of the class.
    pub fn with_distractors(mut self) -> Self {
        self.distractors = vec!["LEar".into(), "REar".into()];
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CoreError::invalid("synth_spec", m));
        if self.num_classes == 0 || self.num_classes > Action::ALL.len() {
            return bad(format!("num_classes must be in 1..={}", Action::ALL.len()));
        }
        if self.samples_per_class == 0 {
            return bad("samples_per_class must be positive".into());
        }
        if self.min_frames < 2 || self.max_frames < self.min_frames {
            return bad(format!(
                "frame range {}..={} is invalid (need 2 <= min <= max)",
                self.min_frames, self.max_frames
            ));
        }
        if self.height < 8 || self.width < 8 {
            return bad("spatial extent must be at least 8x8".into());
        }
        if !(self.sigma > 0.0) {
            return bad("sigma must be positive".into());
        }
        for (name, p) in [
            ("dropout", self.dropout),
            ("occlusion_prob", self.occlusion_prob),
            ("val_fraction", self.val_fraction),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} must lie in [0, 1]"));
            }
        }
        if !(self.noise_std >= 0.0) {
            return bad("noise_std must be non-negative".into());
        }
        self.distractor_joints()?;
        Ok(())
    }

    pub fn distractor_joints(&self) -> Result<Vec<usize>> {
        self.distractors
            .iter()
            .map(|n| match index_of(n) {
                Some(j) if j != BACKGROUND => Ok(j),
                _ => Err(CoreError::invalid("synth_spec", format!("unknown distractor joint {n:?}"))),
            })
            .collect()
    }

    pub fn num_samples(&self) -> usize {
        self.num_classes * self.samples_per_class
    }

    /// Class of sample `i`; samples cycle through the classes.
    pub fn class_of(&self, i: usize) -> usize {
        i % self.num_classes
    }

    /// Stratified split: the last `round(val_fraction · n)` samples of each class are validation.
    pub fn split_of(&self, i: usize) -> Split {
        let k = i / self.num_classes;
        let nval = (self.val_fraction * self.samples_per_class as f64).round() as usize;
        if k + nval >= self.samples_per_class {
            Split::Val
        } else {
            Split::Train
        }
    }
}

/// SplitMix64 finalizer, used to derive independent per-sample streams.
pub fn substream_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x632B_E59B_D9B4_E019);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn substream(seed: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(substream_seed(seed, index))
}

/// Smooth class-independent trajectory of one distractor joint (fractions of the frame).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Wander {
    pub center: (f64, f64),
    pub amplitude: (f64, f64),
    pub period: (f64, f64),
    pub phase: (f64, f64),
}

impl Wander {
    fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Wander {
            center: (rng.gen_range(0.3..0.7), rng.gen_range(0.3..0.7)),
            amplitude: (rng.gen_range(0.05..0.25), rng.gen_range(0.05..0.25)),
            period: (rng.gen_range(15.0..60.0), rng.gen_range(15.0..60.0)),
            phase: (rng.gen_range(0.0..2.0 * PI), rng.gen_range(0.0..2.0 * PI)),
        }
    }

    fn at(&self, t: f64, w: f64, h: f64) -> (f64, f64) {
        let x = self.center.0 + self.amplitude.0 * (2.0 * PI * t / self.period.0 + self.phase.0).sin();
        let y = self.center.1 + self.amplitude.1 * (2.0 * PI * t / self.period.1 + self.phase.1).sin();
        (x * w, y * h)
    }
}

/// Everything sampled for one video.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleInfo {
    pub class: usize,
    pub action: Action,
    pub frames: usize,
    /// Pelvis position in pixels.
    pub center: (f64, f64),
    /// Body height in pixels.
    pub scale: f64,
    /// −1 for the right side, +1 for the left; used by one-sided actions.
    pub side: f64,
    pub period: f64,
    pub phase: f64,
    pub amplitude: f64,
    /// Walking: pacing period and phase.
    pub pace: (f64, f64),
    /// Upper arm, forearm, thigh, shin, shoulder width, hip width multipliers.
    pub proportions: [f64; 6],
    pub legs_hidden: bool,
    pub distractors: Vec<(usize, Wander)>,
    /// Untrimmed videos: action frames `[start, end)`.
    pub window: Option<(usize, usize)>,
}

pub type Pt = (f64, f64);

struct Pose {
    pts: [Option<Pt>; 18],
}

/// Two-link solve from `hip` to `ankle`, bending the knee outward (`side`).
fn leg_ik(hip: Pt, ankle: Pt, l1: f64, l2: f64, side: f64) -> Pt {
    let (dx, dy) = (ankle.0 - hip.0, ankle.1 - hip.1);
    let d = (dx * dx + dy * dy).sqrt().max(1e-9);
    if d >= l1 + l2 {
        return (hip.0 + dx * l1 / d, hip.1 + dy * l1 / d);
    }
    let a = (l1 * l1 - l2 * l2 + d * d) / (2.0 * d);
    let h = (l1 * l1 - a * a).max(0.0).sqrt();
    let m = (hip.0 + a * dx / d, hip.1 + a * dy / d);
    let mut n = (-dy / d, dx / d);
    if n.0 * side < 0.0 {
        n = (-n.0, -n.1);
    }
    (m.0 + h * n.0, m.1 + h * n.1)
}

/// Arm from the shoulder with angles measured from straight down, positive outward.
fn arm(shoulder: Pt, side: f64, th1: f64, th2: f64, lu: f64, lf: f64) -> (Pt, Pt) {
    let e = (shoulder.0 + side * lu * th1.sin(), shoulder.1 + lu * th1.cos());
    let a = th1 + th2;
    let w = (e.0 + side * lf * a.sin(), e.1 + lf * a.cos());
    (e, w)
}

const REST_ARM: (f64, f64) = (0.15, 0.05);

impl SampleInfo {
    fn sample<R: Rng + ?Sized>(
        spec: &SynthSpec,
        class: usize,
        frames: usize,
        distractors: &[usize],
        rng: &mut R,
    ) -> Self {
        let (h, w) = (spec.height as f64, spec.width as f64);
        let action = Action::ALL[class];
        let (p0, p1) = action.periods();
        let scale = h * rng.gen_range(0.50..0.62);
        let center = (w * rng.gen_range(0.38..0.62), h * rng.gen_range(0.47..0.55));
        let proportions = std::array::from_fn(|_| rng.gen_range(0.9..1.1));
        SampleInfo {
            class,
            action,
            frames,
            center,
            scale,
            side: if rng.gen_bool(0.5) { -1.0 } else { 1.0 },
            period: rng.gen_range(p0..p1),
            phase: rng.gen_range(0.0..2.0 * PI),
            amplitude: rng.gen_range(0.8..1.2),
            pace: (rng.gen_range(40.0..70.0), rng.gen_range(0.0..2.0 * PI)),
            proportions,
            legs_hidden: rng.gen_bool(spec.occlusion_prob),
            distractors: distractors.iter().map(|&j| (j, Wander::sample(rng))).collect(),
            window: None,
        }
    }

    /// Ground-truth pixel position of every non-background joint at frame
    /// `t`; `None` for hidden joints.
    pub fn positions(&self, t: usize, w: f64, h: f64) -> [Option<Pt>; 18] {
        let idle = match self.window {
            Some((s, e)) => t < s || t >= e,
            None => false,
        };
        let local = match self.window {
            Some((s, _)) if !idle => (t - s) as f64,
            _ => t as f64,
        };
        self.pose(local, idle, w, h).pts
    }

    /// Joint positions (pixels) at frame `t`. `idle` renders the filler
    /// micro-sway used outside the action window of untrimmed videos.
    fn pose(&self, t: f64, idle: bool, w: f64, h: f64) -> Pose {
        let [pu, pf, pt, ps, pw, ph] = self.proportions;
        let (lu, lf, lt, ls) = (0.15 * pu, 0.14 * pf, 0.24 * pt, 0.23 * ps);
        let (sw, hw) = (0.10 * pw, 0.06 * ph);
        let phi = 2.0 * PI * t / self.period + self.phase;
        let amp = self.amplitude;
        let side = self.side;

        // Offsets of the whole body (body units); `pelvis_drop` moves everything above the feet.
        let (mut gx, mut gy, mut pelvis_drop) = (0.0, 0.0, 0.0);
        let mut arm_r = REST_ARM;
        let mut arm_l = REST_ARM;
        let mut lift = (0.0, 0.0); // ankle lift for (right, left)
        let mut kick = 0.0;
        let action = if idle { Action::IdleSway } else { self.action };
        match action {
            Action::Wave => {
                let a = (2.5, 0.5 + 0.6 * amp * phi.sin());
                if side < 0.0 {
                    arm_r = a
                } else {
                    arm_l = a
                }
            }
            Action::Punch => {
                let a = (PI / 2.0, -1.4 * amp * 0.5 * (1.0 + phi.cos()));
                if side < 0.0 {
                    arm_r = a
                } else {
                    arm_l = a
                }
            }
            Action::Clap => {
                let a = (0.5, -0.6 - 1.5 * amp * 0.5 * (1.0 + phi.sin()));
                arm_r = a;
                arm_l = a;
            }
            Action::Walk => {
                let tri = |u: f64| 2.0 / PI * u.sin().asin();
                gx = 0.45 * amp * tri(2.0 * PI * t / self.pace.0 + self.pace.1);
                lift = (0.08 * phi.sin().max(0.0), 0.08 * (-phi.sin()).max(0.0));
                arm_r = (0.15 + 0.3 * phi.sin(), 0.1);
                arm_l = (0.15 - 0.3 * phi.sin(), 0.1);
            }
            Action::Jump => {
                let air = phi.sin().max(0.0);
                gy = -0.14 * amp * air;
                pelvis_drop = 0.05 * (-phi.sin()).max(0.0);
                let a = (0.3 + 1.3 * air, 0.2);
                arm_r = a;
                arm_l = a;
            }
            Action::Squat => {
                pelvis_drop = 0.17 * amp * 0.5 * (1.0 - phi.cos());
                let a = (0.3 + 1.1 * 0.5 * (1.0 - phi.cos()), 0.0);
                arm_r = a;
                arm_l = a;
            }
            Action::Kick => {
                kick = 1.3 * amp * phi.sin().max(0.0);
                arm_r = (1.2, 0.0);
                arm_l = (1.2, 0.0);
            }
            Action::IdleSway => {
                let a = if idle { 0.02 } else { 0.05 * amp };
                gx = a * phi.sin();
            }
        }

        let up = |p: Pt| (p.0, p.1 + pelvis_drop);
        let mut b: [Pt; 18] = [(0.0, 0.0); 18];
        b[NOSE] = up((0.0, -0.40));
        b[R_EYE] = up((-0.025, -0.42));
        b[L_EYE] = up((0.025, -0.42));
        b[R_EAR] = up((-0.055, -0.40));
        b[L_EAR] = up((0.055, -0.40));
        b[NECK] = up((0.0, -0.30));
        b[R_SHOULDER] = up((-sw, -0.29));
        b[L_SHOULDER] = up((sw, -0.29));
        b[R_HIP] = up((-hw, 0.0));
        b[L_HIP] = up((hw, 0.0));
        let (e, wr) = arm(b[R_SHOULDER], -1.0, arm_r.0, arm_r.1, lu, lf);
        b[R_ELBOW] = e;
        b[R_WRIST] = wr;
        let (e, wr) = arm(b[L_SHOULDER], 1.0, arm_l.0, arm_l.1, lu, lf);
        b[L_ELBOW] = e;
        b[L_WRIST] = wr;
        let foot_y = lt + ls - 0.01;
        for (s, hip, knee, ankle, l) in [(-1.0, R_HIP, R_KNEE, R_ANKLE, lift.0), (1.0, L_HIP, L_KNEE, L_ANKLE, lift.1)] {
            let kicking = kick > 0.0 && s == side;
            if kicking {
                let k = (b[hip].0 + s * lt * kick.sin(), b[hip].1 + lt * kick.cos());
                let a = 1.25 * kick;
                b[knee] = k;
                b[ankle] = (k.0 + s * ls * a.sin(), k.1 + ls * a.cos());
            } else {
                let a = (s * (hw + 0.02), foot_y - l);
                b[knee] = leg_ik(b[hip], a, lt, ls, s);
                b[ankle] = a;
            }
        }

        let mut pts = [None; 18];
        for (j, p) in b.iter().enumerate() {
            let hidden = self.legs_hidden && matches!(j, R_KNEE | R_ANKLE | L_KNEE | L_ANKLE);
            if !hidden {
                pts[j] = Some((
                    self.center.0 + self.scale * (p.0 + gx),
                    self.center.1 + self.scale * (p.1 + gy),
                ));
            }
        }
        for (j, wander) in &self.distractors {
            pts[*j] = Some(wander.at(t, w, h));
        }
        Pose { pts }
    }
}

/// Peak-1 isotropic Gaussian centred on the grid point nearest `p`, added
/// with `max` into `plane`. Points off the grid render nothing.
pub fn render_gaussian(plane: &mut [f32], h: usize, w: usize, p: Pt, sigma: f64) {
    let (cx, cy) = (p.0.round(), p.1.round());
    if cx < 0.0 || cy < 0.0 || cx >= w as f64 || cy >= h as f64 {
        return;
    }
    let (cx, cy) = (cx as isize, cy as isize);
    let r = (4.0 * sigma).ceil() as isize;
    let inv = 1.0 / (2.0 * sigma * sigma);
    for y in (cy - r).max(0)..(cy + r + 1).min(h as isize) {
        let dy = (y - cy) as f64;
        for x in (cx - r).max(0)..(cx + r + 1).min(w as isize) {
            let dx = (x - cx) as f64;
            let v = (-(dx * dx + dy * dy) * inv).exp() as f32;
            let o = &mut plane[y as usize * w + x as usize];
            *o = o.max(v);
        }
    }
}

fn render<R: Rng + ?Sized>(
    spec: &SynthSpec,
    info: &SampleInfo,
    rng: &mut R,
) -> HeatmapSequence<f32> {
    let (h, w) = (spec.height, spec.width);
    let n = h * w;
    let mut seq = HeatmapSequence::zeros(info.frames, NUM_JOINTS, h, w).expect("valid extents");
    for t in 0..info.frames {
        let pts = info.positions(t, w as f64, h as f64);
        let mut bg = vec![0.0f32; n];
        for j in 0..NUM_JOINTS - 1 {
            let dropped = spec.dropout > 0.0 && rng.gen_bool(spec.dropout);
            let plane = seq.plane_mut(t, j);
            if !dropped {
                if let Some(p) = pts[j] {
                    render_gaussian(plane, h, w, p, spec.sigma);
                }
            }
            if spec.noise_std > 0.0 {
                let std = spec.noise_std as f32;
                for v in plane.iter_mut() {
                    let z: f32 = rng.sample(StandardNormal);
                    *v = (*v + std * z).clamp(0.0, 1.0);
                }
            }
            if dropped {
                // A missed detection is an empty map, noise included.
                plane.iter_mut().for_each(|v| *v = 0.0);
            }
            for (b, &v) in bg.iter_mut().zip(plane.iter()) {
                *b = b.max(v);
            }
        }
        for (o, b) in seq.plane_mut(t, BACKGROUND).iter_mut().zip(&bg) {
            *o = (1.0 - b).clamp(0.0, 1.0);
        }
    }
    seq
}

/// Generates trimmed sample `index` in memory.
pub fn generate_sample(spec: &SynthSpec, index: usize) -> Result<(HeatmapSequence<f32>, SampleInfo)> {
    let distractors = spec.distractor_joints()?;
    let mut rng = substream(spec.seed, index as u64);
    let frames = rng.gen_range(spec.min_frames..=spec.max_frames);
    let info = SampleInfo::sample(spec, spec.class_of(index), frames, &distractors, &mut rng);
    let seq = render(spec, &info, &mut rng);
    Ok((seq, info))
}

/// Untrimmed video `index`: `T = 384`, the action fills a contiguous window of
/// `round(window_fraction · T)` frames and idle micro-sway fills the rest.
pub fn generate_untrimmed_sample(
    spec: &SynthSpec,
    window_fraction: f64,
    index: usize,
) -> Result<(HeatmapSequence<f32>, SampleInfo, Annotations)> {
    if !(window_fraction > 0.0 && window_fraction <= 1.0) {
        return Err(CoreError::invalid(
            "generate_untrimmed",
            format!("window fraction must lie in (0, 1], got {window_fraction}"),
        ));
    }
    let distractors = spec.distractor_joints()?;
    // Offset the stream index so untrimmed and trimmed corpora never share draws.
    let mut rng = substream(spec.seed, (1u64 << 40) + index as u64);
    let frames = UNTRIMMED_FRAMES;
    let mut info = SampleInfo::sample(spec, spec.class_of(index), frames, &distractors, &mut rng);
    let len = ((window_fraction * frames as f64).round() as usize).clamp(1, frames);
    let start = rng.gen_range(0..=frames - len);
    info.window = Some((start, start + len));
    let seq = render(spec, &info, &mut rng);
    let ann = Annotations {
        window: [start, start + len],
        action_clips: action_clips(start, start + len, frames),
    };
    Ok((seq, info, ann))
}

/// Clip `k` covers frames `[16k, 16k+16)`; it is action-bearing when it meets the window.
pub fn action_clips(start: usize, end: usize, frames: usize) -> Vec<bool> {
    (0..frames / CLIP_LEN)
        .map(|k| {
            let (a, b) = (k * CLIP_LEN, (k + 1) * CLIP_LEN);
            a < end && start < b
        })
        .collect()
}

fn sample_meta(info: &SampleInfo, spec: &SynthSpec) -> Meta {
    let mut m = Meta::new();
    m.insert("class".into(), Value::from(info.class));
    m.insert("action".into(), Value::from(info.action.name()));
    m.insert("class_version".into(), Value::from(CLASS_VERSION));
    m.insert("seed".into(), Value::from(spec.seed));
    m
}

/// Writes every trimmed sample to `out/seq/<id>.pmkt` and `out/manifest.json`.
pub fn generate(spec: &SynthSpec, out: &Path) -> Result<Manifest> {
    spec.validate()?;
    let records = parallel::map_range(spec.num_samples(), |i| -> Result<Record> {
        let (seq, info) = generate_sample(spec, i)?;
        let id = format!("s{i:05}");
        let rel = format!("seq/{id}.pmkt");
        write_tensor(&out.join(&rel), &seq.to_tensor(), &sample_meta(&info, spec))?;
        Ok(Record {
            id,
            path: rel,
            class: info.class,
            split: spec.split_of(i),
            frames: info.frames,
            annotations: None,
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let m = Manifest::new(out, records);
    m.save(&out.join("manifest.json"))?;
    Ok(m)
}

/// Untrimmed counterpart of [`generate`], `videos_per_class` per class.
pub fn generate_untrimmed(
    spec: &SynthSpec,
    window_fraction: f64,
    videos_per_class: usize,
    out: &Path,
) -> Result<Manifest> {
    spec.validate()?;
    let mut s = spec.clone();
    s.samples_per_class = videos_per_class;
    let records = parallel::map_range(s.num_samples(), |i| -> Result<Record> {
        let (seq, info, ann) = generate_untrimmed_sample(&s, window_fraction, i)?;
        let id = format!("u{i:05}");
        let rel = format!("seq/{id}.pmkt");
        write_tensor(&out.join(&rel), &seq.to_tensor(), &sample_meta(&info, &s))?;
        Ok(Record {
            id,
            path: rel,
            class: info.class,
            split: s.split_of(i),
            frames: info.frames,
            annotations: Some(ann),
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let m = Manifest::new(out, records);
    m.save(&out.join("manifest.json"))?;
    Ok(m)
}
