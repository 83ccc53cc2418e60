//! Pose-aware augmentation on the aggregated representation: a global
//! translation, per-group translations that keep each group rigid, and a
//! horizontal flip that also swaps left/right joints.

use pmk_tensor::Scalar;
use rand::Rng;

use crate::encoding::{HeatmapSequence, NormTag, PoseRepresentation};
use crate::error::{CoreError, Result};
use crate::joints::{Group, JointGroups};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    /// Largest global shift in pixels.
    pub beta: usize,
    /// Largest per-group shift in pixels.
    pub gamma: usize,
    pub flip_prob: f64,
}

impl AugmentParams {
    pub fn none() -> Self {
        AugmentParams {
            beta: 0,
            gamma: 0,
            flip_prob: 0.0,
        }
    }
}

/// Integer `(dx, dy)` shifts: `dx > 0` moves content right, `dy > 0` down.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Offsets {
    pub global: (isize, isize),
    /// Indexed like [`Group::ALL`]; entries for unjittered groups are ignored.
    pub groups: [(isize, isize); 7],
}

impl Offsets {
    pub fn global_only(dx: isize, dy: isize) -> Self {
        Offsets {
            global: (dx, dy),
            groups: [(0, 0); 7],
        }
    }

    /// Total shift applied to a joint.
    pub fn for_joint(&self, groups: &JointGroups, joint: usize) -> (isize, isize) {
        let g = groups.group_of(joint);
        if !g.jittered() {
            return self.global;
        }
        let (gx, gy) = self.groups[group_index(g)];
        (self.global.0 + gx, self.global.1 + gy)
    }
}

fn group_index(g: Group) -> usize {
    Group::ALL.iter().position(|&x| x == g).expect("known group")
}

/// Uniform integer offsets in `[-beta, beta]²` and `[-gamma, gamma]²`.
pub fn sample_offsets<R: Rng + ?Sized>(params: &AugmentParams, rng: &mut R) -> Offsets {
    let (b, g) = (params.beta as isize, params.gamma as isize);
    let mut o = Offsets {
        global: (rng.gen_range(-b..=b), rng.gen_range(-b..=b)),
        groups: [(0, 0); 7],
    };
    for (i, grp) in Group::ALL.iter().enumerate() {
        if grp.jittered() {
            o.groups[i] = (rng.gen_range(-g..=g), rng.gen_range(-g..=g));
        }
    }
    o
}

fn check_bounds(height: usize, width: usize, params: &AugmentParams) -> Result<()> {
    let lim = height.min(width) / 4;
    if params.beta > lim || params.gamma > lim {
        return Err(CoreError::invalid(
            "paa",
            format!(
                "beta={} and gamma={} must not exceed min(H, W)/4 = {}",
                params.beta, params.gamma, lim
            ),
        ));
    }
    Ok(())
}

fn check_offsets(o: &Offsets, params: &AugmentParams) -> Result<()> {
    let (b, g) = (params.beta as isize, params.gamma as isize);
    if o.global.0.abs() > b || o.global.1.abs() > b {
        return Err(CoreError::invalid(
            "paa",
            format!("global offset {:?} exceeds beta={}", o.global, b),
        ));
    }
    for (i, grp) in Group::ALL.iter().enumerate() {
        let (x, y) = o.groups[i];
        if grp.jittered() && (x.abs() > g || y.abs() > g) {
            return Err(CoreError::invalid(
                "paa",
                format!("{:?} offset {:?} exceeds gamma={}", grp, (x, y), g),
            ));
        }
    }
    Ok(())
}

/// Translates an `h×w` plane with zero fill.
pub fn shift_plane<T: Scalar>(src: &[T], dst: &mut [T], h: usize, w: usize, dx: isize, dy: isize) {
    dst.iter_mut().for_each(|v| *v = T::zero());
    let (hi, wi) = (h as isize, w as isize);
    if dx.abs() >= wi || dy.abs() >= hi {
        return;
    }
    let x0 = dx.max(0) as usize;
    let x1 = (wi + dx.min(0)) as usize;
    let sx0 = (x0 as isize - dx) as usize;
    for y in 0..h {
        let sy = y as isize - dy;
        if sy < 0 || sy >= hi {
            continue;
        }
        let sy = sy as usize;
        dst[y * w + x0..y * w + x1].copy_from_slice(&src[sy * w + sx0..sy * w + sx0 + (x1 - x0)]);
    }
}

/// Applies fixed offsets; `params` supplies the bounds they are checked against.
pub fn paa_with_offsets<T: Scalar>(
    p: &PoseRepresentation<T>,
    groups: &JointGroups,
    params: &AugmentParams,
    offsets: &Offsets,
) -> Result<PoseRepresentation<T>> {
    if p.norm == NormTag::Raw {
        return Err(CoreError::invalid("paa", "representation must be normalized first"));
    }
    if p.joints != groups.num_joints() {
        return Err(CoreError::invalid(
            "paa",
            format!("representation has {} joints, groups cover {}", p.joints, groups.num_joints()),
        ));
    }
    check_bounds(p.height, p.width, params)?;
    check_offsets(offsets, params)?;
    let mut out = p.clone();
    for c in 0..p.channels {
        for j in 0..p.joints {
            let (dx, dy) = offsets.for_joint(groups, j);
            shift_plane(p.slice(c, j), out.slice_mut(c, j), p.height, p.width, dx, dy);
        }
    }
    Ok(out)
}

/// Samples offsets and applies them to every channel of every joint.
pub fn paa<T: Scalar, R: Rng + ?Sized>(
    p: &PoseRepresentation<T>,
    groups: &JointGroups,
    params: &AugmentParams,
    rng: &mut R,
) -> Result<PoseRepresentation<T>> {
    let o = sample_offsets(params, rng);
    paa_with_offsets(p, groups, params, &o)
}

/// Mirrors every slice along the width axis and swaps left/right joints.
pub fn hflip<T: Scalar>(p: &PoseRepresentation<T>, groups: &JointGroups) -> Result<PoseRepresentation<T>> {
    if p.joints != groups.num_joints() {
        return Err(CoreError::invalid(
            "hflip",
            format!("representation has {} joints, groups cover {}", p.joints, groups.num_joints()),
        ));
    }
    let mut out = p.clone();
    let w = p.width;
    for c in 0..p.channels {
        for j in 0..p.joints {
            let src = p.slice(c, groups.swap(j));
            let dst = out.slice_mut(c, j);
            for (drow, srow) in dst.chunks_exact_mut(w).zip(src.chunks_exact(w)) {
                for (d, s) in drow.iter_mut().zip(srow.iter().rev()) {
                    *d = *s;
                }
            }
        }
    }
    Ok(out)
}

/// Training-time augmentation: PAA followed by a random flip.
pub fn augment<T: Scalar, R: Rng + ?Sized>(
    p: &PoseRepresentation<T>,
    groups: &JointGroups,
    params: &AugmentParams,
    rng: &mut R,
) -> Result<PoseRepresentation<T>> {
    let out = paa(p, groups, params, rng)?;
    if params.flip_prob > 0.0 && rng.gen_bool(params.flip_prob) {
        hflip(&out, groups)
    } else {
        Ok(out)
    }
}

/// Frame-level counterpart of [`paa_with_offsets`]: shifts every frame of a
/// heatmap sequence with the same offsets.
pub fn shift_sequence<T: Scalar>(
    seq: &HeatmapSequence<T>,
    groups: &JointGroups,
    offsets: &Offsets,
) -> Result<HeatmapSequence<T>> {
    if seq.joints != groups.num_joints() {
        return Err(CoreError::invalid(
            "shift_sequence",
            format!("sequence has {} joints, groups cover {}", seq.joints, groups.num_joints()),
        ));
    }
    let mut out = seq.clone();
    for t in 0..seq.frames {
        for j in 0..seq.joints {
            let (dx, dy) = offsets.for_joint(groups, j);
            shift_plane(seq.plane(t, j), out.plane_mut(t, j), seq.height, seq.width, dx, dy);
        }
    }
    Ok(out)
}
