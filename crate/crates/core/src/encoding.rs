//! Temporal aggregation of joint heatmaps into a `C×J×H×W` representation,
//! and the two normalizations (time-aware and max-over-channel).

use pmk_tensor::{parallel, Scalar, Tensor};
use serde::{Deserialize, Serialize};

use std::path::Path;

use crate::config::NormMode;
use crate::error::{CoreError, Result};
use crate::io::{read_tensor_meta, write_tensor, Meta};

/// Divisor floor for time-aware normalization.
pub const TAN_EPS: f64 = 1e-8;

/// Per-frame, per-joint heatmaps, `T×J×H×W`, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapSequence<T = f32> {
    pub frames: usize,
    pub joints: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> HeatmapSequence<T> {
    pub fn new(frames: usize, joints: usize, height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if frames < 2 {
            return Err(CoreError::invalid(
                "heatmap_sequence",
                format!("need at least 2 frames, got {frames}"),
            ));
        }
        if joints == 0 || height == 0 || width == 0 {
            return Err(CoreError::invalid("heatmap_sequence", "empty joint or spatial extent"));
        }
        if data.len() != frames * joints * height * width {
            return Err(CoreError::invalid(
                "heatmap_sequence",
                format!(
                    "{}x{}x{}x{} needs {} values, got {}",
                    frames,
                    joints,
                    height,
                    width,
                    frames * joints * height * width,
                    data.len()
                ),
            ));
        }
        Ok(HeatmapSequence {
            frames,
            joints,
            height,
            width,
            data,
        })
    }

    pub fn zeros(frames: usize, joints: usize, height: usize, width: usize) -> Result<Self> {
        Self::new(frames, joints, height, width, vec![T::zero(); frames * joints * height * width])
    }

    /// Ingests a `[T, J, H, W]` tensor, clamping values into `[0, 1]`.
    /// Returns the sequence and how many values were clamped.
    pub fn from_tensor(t: Tensor<T>) -> Result<(Self, usize)> {
        let s = t.shape().to_vec();
        if s.len() != 4 {
            return Err(CoreError::invalid(
                "heatmap_sequence",
                format!("expected a [T, J, H, W] tensor, got shape {s:?}"),
            ));
        }
        let mut data = t.into_data();
        let mut clamped = 0;
        for v in data.iter_mut() {
            if !(*v >= T::zero() && *v <= T::one()) {
                clamped += 1;
                *v = if *v > T::one() { T::one() } else { T::zero() };
            }
        }
        if clamped > 0 {
            log::warn!("clamped {clamped} heatmap values into [0, 1]");
        }
        Ok((Self::new(s[0], s[1], s[2], s[3], data)?, clamped))
    }

    pub fn to_tensor(&self) -> Tensor<T> {
        Tensor::from_vec(&[self.frames, self.joints, self.height, self.width], self.data.clone())
            .expect("consistent sequence")
    }

    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    pub fn plane(&self, t: usize, j: usize) -> &[T] {
        let n = self.plane_len();
        let o = (t * self.joints + j) * n;
        &self.data[o..o + n]
    }

    pub fn plane_mut(&mut self, t: usize, j: usize) -> &mut [T] {
        let n = self.plane_len();
        let o = (t * self.joints + j) * n;
        &mut self.data[o..o + n]
    }

    /// Frames `frames[i]` in order, e.g. one clip of a longer video.
    pub fn select_frames(&self, frames: &[usize]) -> Result<Self> {
        let per = self.joints * self.plane_len();
        let mut data = Vec::with_capacity(frames.len() * per);
        for &t in frames {
            if t >= self.frames {
                return Err(CoreError::invalid(
                    "select_frames",
                    format!("frame {t} out of {}", self.frames),
                ));
            }
            data.extend_from_slice(&self.data[t * per..(t + 1) * per]);
        }
        Self::new(frames.len(), self.joints, self.height, self.width, data)
    }
}

/// Channel-time weights `o[t, c]`: triangular bumps over normalized time.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregationKernel {
    pub frames: usize,
    pub channels: usize,
    /// Row-major `T×C`.
    pub weights: Vec<f64>,
}

impl AggregationKernel {
    pub fn weight(&self, t: usize, c: usize) -> f64 {
        self.weights[t * self.channels + c]
    }

    /// `Σ_t o[t, c]` for every channel: what a joint that never moves accumulates.
    pub fn channel_sums(&self) -> Vec<f64> {
        (0..self.channels)
            .map(|c| (0..self.frames).map(|t| self.weight(t, c)).sum())
            .collect()
    }
}

/// `o[t, c] = max(0, 1 − (C−1)·|t̃ − c/(C−1)|)` with `t̃ = t/(T−1)` (0-based `t`, `c`).
pub fn build_kernel(frames: usize, channels: usize) -> Result<AggregationKernel> {
    if frames < 2 {
        return Err(CoreError::invalid("build_kernel", format!("T must be at least 2, got {frames}")));
    }
    if channels < 2 || channels > frames {
        return Err(CoreError::invalid(
            "build_kernel",
            format!("C must satisfy 2 <= C <= T, got C={channels}, T={frames}"),
        ));
    }
    let cm1 = (channels - 1) as f64;
    let mut weights = Vec::with_capacity(frames * channels);
    for t in 0..frames {
        let tt = t as f64 / (frames - 1) as f64;
        for c in 0..channels {
            weights.push((1.0 - cm1 * (tt - c as f64 / cm1).abs()).max(0.0));
        }
    }
    Ok(AggregationKernel {
        frames,
        channels,
        weights,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormTag {
    Raw,
    Tan,
    MaxOverChannel,
}

impl NormTag {
    pub fn name(self) -> &'static str {
        match self {
            NormTag::Raw => "raw",
            NormTag::Tan => "tan",
            NormTag::MaxOverChannel => "max_over_channel",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "raw" => Some(NormTag::Raw),
            "tan" => Some(NormTag::Tan),
            "max_over_channel" => Some(NormTag::MaxOverChannel),
            _ => None,
        }
    }
}

/// Aggregated representation `P`, row-major `C×J×H×W`.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseRepresentation<T = f32> {
    pub channels: usize,
    pub joints: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
    pub norm: NormTag,
    pub source_frames: usize,
}

impl<T: Scalar> PoseRepresentation<T> {
    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    pub fn slice(&self, c: usize, j: usize) -> &[T] {
        let n = self.plane_len();
        let o = (c * self.joints + j) * n;
        &self.data[o..o + n]
    }

    pub fn slice_mut(&mut self, c: usize, j: usize) -> &mut [T] {
        let n = self.plane_len();
        let o = (c * self.joints + j) * n;
        &mut self.data[o..o + n]
    }

    pub fn to_tensor(&self) -> Tensor<T> {
        Tensor::from_vec(&[self.channels, self.joints, self.height, self.width], self.data.clone())
            .expect("consistent representation")
    }

    pub fn from_tensor(t: Tensor<T>, norm: NormTag, source_frames: usize) -> Result<Self> {
        let s = t.shape().to_vec();
        if s.len() != 4 {
            return Err(CoreError::invalid(
                "pose_representation",
                format!("expected a [C, J, H, W] tensor, got shape {s:?}"),
            ));
        }
        Ok(PoseRepresentation {
            channels: s[0],
            joints: s[1],
            height: s[2],
            width: s[3],
            data: t.into_data(),
            norm,
            source_frames,
        })
    }

    /// Joint-major copy `J×C×H×W`, the layout the models consume.
    pub fn joint_major(&self) -> Vec<T> {
        let n = self.plane_len();
        let mut out = Vec::with_capacity(self.data.len());
        for j in 0..self.joints {
            for c in 0..self.channels {
                out.extend_from_slice(&self.data[(c * self.joints + j) * n..(c * self.joints + j + 1) * n]);
            }
        }
        out
    }

    pub fn cast<U: Scalar>(&self) -> PoseRepresentation<U> {
        PoseRepresentation {
            channels: self.channels,
            joints: self.joints,
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| U::from_f64(Scalar::to_f64(v))).collect(),
            norm: self.norm,
            source_frames: self.source_frames,
        }
    }
}

/// `P[c, j, y, x] = Σ_t seq[t, j, y, x] · o[t, c]`. Each output plane is an
/// independent task.
pub fn aggregate<T: Scalar>(
    seq: &HeatmapSequence<T>,
    kernel: &AggregationKernel,
) -> Result<PoseRepresentation<T>> {
    if kernel.frames != seq.frames {
        return Err(CoreError::invalid(
            "aggregate",
            format!("kernel built for T={}, sequence has T={}", kernel.frames, seq.frames),
        ));
    }
    let (cn, jn, n) = (kernel.channels, seq.joints, seq.plane_len());
    let weights: Vec<T> = kernel.weights.iter().map(|&w| T::from_f64(w)).collect();
    let mut data = vec![T::zero(); cn * jn * n];
    parallel::for_each_chunk_mut(&mut data, n, |plane, out| {
        let (c, j) = (plane / jn, plane % jn);
        for t in 0..seq.frames {
            let w = weights[t * cn + c];
            if w == T::zero() {
                continue;
            }
            for (o, &h) in out.iter_mut().zip(seq.plane(t, j)) {
                *o = *o + h * w;
            }
        }
    });
    Ok(PoseRepresentation {
        channels: cn,
        joints: jn,
        height: seq.height,
        width: seq.width,
        data,
        norm: NormTag::Raw,
        source_frames: seq.frames,
    })
}

/// Divides every channel by the value a joint that never moves would
/// accumulate, so entries become relative dwell times in `[0, 1]`.
pub fn normalize_tan<T: Scalar>(
    p: &PoseRepresentation<T>,
    kernel: &AggregationKernel,
) -> Result<PoseRepresentation<T>> {
    if p.norm != NormTag::Raw {
        return Err(CoreError::invalid(
            "normalize_tan",
            format!("input is already {}", p.norm.name()),
        ));
    }
    if kernel.frames != p.source_frames || kernel.channels != p.channels {
        return Err(CoreError::invalid(
            "normalize_tan",
            format!(
                "kernel is T={}, C={} but representation is T={}, C={}",
                kernel.frames, kernel.channels, p.source_frames, p.channels
            ),
        ));
    }
    let inv: Vec<T> = kernel
        .channel_sums()
        .iter()
        .map(|&s| T::from_f64(1.0 / s.max(TAN_EPS)))
        .collect();
    let per_channel = p.joints * p.plane_len();
    let mut out = p.clone();
    parallel::for_each_chunk_mut(&mut out.data, per_channel, |c, chunk| {
        for v in chunk.iter_mut() {
            // Rounding can push a full-dwell pixel a hair above one.
            *v = (*v * inv[c]).min(T::one());
        }
    });
    out.norm = NormTag::Tan;
    Ok(out)
}

/// Divides each `(c, j)` slice by its own maximum; all-zero slices stay zero.
pub fn normalize_max<T: Scalar>(p: &PoseRepresentation<T>) -> Result<PoseRepresentation<T>> {
    if p.norm != NormTag::Raw {
        return Err(CoreError::invalid(
            "normalize_max",
            format!("input is already {}", p.norm.name()),
        ));
    }
    let mut out = p.clone();
    let n = p.plane_len();
    parallel::for_each_chunk_mut(&mut out.data, n, |_, slice| {
        let m = slice.iter().copied().fold(T::zero(), T::max);
        if m > T::zero() {
            for v in slice.iter_mut() {
                *v = *v / m;
            }
        }
    });
    out.norm = NormTag::MaxOverChannel;
    Ok(out)
}

/// Aggregates with a freshly built kernel and applies `mode`.
pub fn encode<T: Scalar>(
    seq: &HeatmapSequence<T>,
    channels: usize,
    mode: NormMode,
) -> Result<PoseRepresentation<T>> {
    let k = build_kernel(seq.frames, channels)?;
    let raw = aggregate(seq, &k)?;
    match mode {
        NormMode::Raw => Ok(raw),
        NormMode::Tan => normalize_tan(&raw, &k),
        NormMode::Max => normalize_max(&raw),
    }
}

/// Meta key marking a container as an encoded representation.
pub const KIND_KEY: &str = "kind";
pub const KIND_REPRESENTATION: &str = "representation";

/// Writes `p` as a tensor container; `extra` entries are kept in the header.
pub fn save_representation<T: Scalar>(path: &Path, p: &PoseRepresentation<T>, extra: &Meta) -> Result<()> {
    let mut meta = extra.clone();
    meta.insert(KIND_KEY.into(), KIND_REPRESENTATION.into());
    meta.insert("norm".into(), p.norm.name().into());
    meta.insert("source_frames".into(), p.source_frames.into());
    write_tensor(path, &p.to_tensor(), &meta)
}

/// Reads a container written by [`save_representation`].
pub fn load_representation<T: Scalar>(path: &Path) -> Result<(PoseRepresentation<T>, Meta)> {
    let (t, meta) = read_tensor_meta::<T>(path)?;
    let header = |detail: String| CoreError::Header {
        path: path.to_path_buf(),
        detail,
    };
    if meta.get(KIND_KEY).and_then(|v| v.as_str()) != Some(KIND_REPRESENTATION) {
        return Err(header("not an encoded representation".into()));
    }
    let norm = meta
        .get("norm")
        .and_then(|v| v.as_str())
        .and_then(NormTag::parse)
        .ok_or_else(|| header("missing or unknown \"norm\"".into()))?;
    let frames = meta
        .get("source_frames")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| header("missing \"source_frames\"".into()))? as usize;
    Ok((PoseRepresentation::from_tensor(t, norm, frames)?, meta))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_endpoints() {
        let k = build_kernel(60, 3).unwrap();
        assert_eq!((k.weight(0, 0), k.weight(0, 1), k.weight(0, 2)), (1.0, 0.0, 0.0));
        assert_eq!((k.weight(59, 0), k.weight(59, 1), k.weight(59, 2)), (0.0, 0.0, 1.0));
    }

    #[test]
    fn kernel_rejects_bad_sizes() {
        assert!(build_kernel(1, 2).is_err());
        assert!(build_kernel(2, 3).is_err());
        assert!(build_kernel(5, 1).is_err());
    }

    #[test]
    fn normalizing_twice_is_an_error() {
        let seq = HeatmapSequence::<f64>::zeros(4, 1, 2, 2).unwrap();
        let p = encode(&seq, 2, NormMode::Tan).unwrap();
        let k = build_kernel(4, 2).unwrap();
        assert!(normalize_tan(&p, &k).is_err());
        assert!(normalize_max(&p).is_err());
    }

    #[test]
    fn clamps_on_ingestion() {
        let t = Tensor::from_vec(&[2, 1, 1, 2], vec![1.2f32, -0.1, 0.5, 0.25]).unwrap();
        let (s, n) = HeatmapSequence::from_tensor(t).unwrap();
        assert_eq!(n, 2);
        assert_eq!(s.data, vec![1.0, 0.0, 0.5, 0.25]);
    }

    #[test]
    fn joint_major_transposes() {
        let p = PoseRepresentation {
            channels: 2,
            joints: 3,
            height: 1,
            width: 1,
            data: vec![0.0f32, 1.0, 2.0, 10.0, 11.0, 12.0],
            norm: NormTag::Tan,
            source_frames: 2,
        };
        assert_eq!(p.joint_major(), vec![0.0, 10.0, 1.0, 11.0, 2.0, 12.0]);
    }
}
