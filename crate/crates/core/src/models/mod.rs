//! Networks over pose representations and their checkpoints.

pub mod baseline;
pub mod gate;
pub mod jmrn;
pub mod shaping;

use std::path::Path;

use pmk_tensor::nn::{ParamStore, Session};
use pmk_tensor::{Scalar, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use baseline::Baseline;
pub use gate::GateMode;
pub use jmrn::{Jmrn, JmrnOutput};

use crate::config::ModelKind;
use crate::encoding::PoseRepresentation;
use crate::error::{CoreError, Result};
use crate::io::{decode_tensor, encode_tensor, write_atomic, Meta};

/// Everything needed to rebuild a network's parameter layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetSpec {
    pub kind: ModelKind,
    pub joints: usize,
    pub channels: usize,
    pub outputs: usize,
    pub c_dim: usize,
    pub tau: f64,
    /// Initialization seed.
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub enum Arch {
    Jmrn(Jmrn),
    Baseline(Baseline),
}

#[derive(Debug, Clone, Copy)]
pub struct ForwardOutput {
    pub logits: Var,
    /// `(w, π)` for gated models.
    pub gate: Option<(Var, Var)>,
}

impl Arch {
    pub fn forward<T: Scalar, R: Rng + ?Sized>(
        &self,
        s: &mut Session<T>,
        x: Var,
        mode: GateMode,
        rng: &mut R,
    ) -> Result<ForwardOutput> {
        match self {
            Arch::Jmrn(m) => {
                let o = m.forward(s, x, mode, rng)?;
                Ok(ForwardOutput {
                    logits: o.logits,
                    gate: Some((o.w, o.pi)),
                })
            }
            Arch::Baseline(m) => Ok(ForwardOutput {
                logits: m.forward(s, x)?,
                gate: None,
            }),
        }
    }

    pub fn as_jmrn(&self) -> Option<&Jmrn> {
        match self {
            Arch::Jmrn(m) => Some(m),
            Arch::Baseline(_) => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Network<T: Scalar> {
    pub spec: NetSpec,
    pub arch: Arch,
    pub store: ParamStore<T>,
}

impl<T: Scalar> Network<T> {
    pub fn new(spec: NetSpec) -> Result<Self> {
        if spec.joints == 0 || spec.channels == 0 || spec.outputs == 0 || spec.c_dim == 0 {
            return Err(CoreError::invalid("network", format!("degenerate spec {spec:?}")));
        }
        if !(spec.tau > 0.0) {
            return Err(CoreError::invalid("network", "tau must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut store = ParamStore::new();
        let arch = match spec.kind {
            ModelKind::Jmrn => Arch::Jmrn(Jmrn::new(
                &mut store,
                spec.joints,
                spec.channels,
                spec.c_dim,
                spec.outputs,
                spec.tau,
                &mut rng,
            )),
            ModelKind::Baseline => Arch::Baseline(Baseline::new(
                &mut store,
                spec.joints * spec.channels,
                spec.outputs,
                &mut rng,
            )),
        };
        Ok(Network { spec, arch, store })
    }

    /// A session over this network's parameters plus its architecture.
    pub fn session(&mut self, training: bool, track_grad: bool) -> (&Arch, Session<'_, T>) {
        (&self.arch, Session::with_grad(&mut self.store, training, track_grad))
    }

    pub fn cast<U: Scalar>(&self) -> Network<U> {
        Network {
            spec: self.spec.clone(),
            arch: self.arch.clone(),
            store: self.store.cast(),
        }
    }
}

/// Stacks representations into a joint-major batch `[N, J·C, H, W]`.
pub fn batch_input<T: Scalar, S: Scalar>(reps: &[&PoseRepresentation<S>]) -> Result<Tensor<T>> {
    let first = reps
        .first()
        .ok_or_else(|| CoreError::invalid("batch_input", "empty batch"))?;
    let (c, j, h, w) = (first.channels, first.joints, first.height, first.width);
    let mut data = Vec::with_capacity(reps.len() * c * j * h * w);
    for r in reps {
        if (r.channels, r.joints, r.height, r.width) != (c, j, h, w) {
            return Err(CoreError::invalid(
                "batch_input",
                format!(
                    "mixed shapes in batch: {:?} vs {:?}",
                    (c, j, h, w),
                    (r.channels, r.joints, r.height, r.width)
                ),
            ));
        }
        data.extend(r.joint_major().into_iter().map(|v| T::from_f64(Scalar::to_f64(v))));
    }
    Ok(Tensor::from_vec(&[reps.len(), j * c, h, w], data)?)
}

// ------------------------------------------------------------ checkpoints

pub const WEIGHTS_FILE: &str = "weights.pmkt";
pub const INDEX_FILE: &str = "index.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointEntry {
    pub name: String,
    /// `"param"` or `"buffer"`.
    pub kind: String,
    /// Byte offset of this tensor's container inside the weights file.
    pub offset: usize,
    pub length: usize,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointIndex {
    pub config_hash: String,
    pub step: u64,
    pub spec: NetSpec,
    pub entries: Vec<CheckpointEntry>,
}

/// Writes `dir/weights.pmkt` (one tensor container per parameter and buffer,
/// back to back) and `dir/index.json`.
pub fn save_checkpoint(dir: &Path, net: &Network<f32>, config_hash: &str, step: u64) -> Result<()> {
    let mut blob = Vec::new();
    let mut entries = Vec::new();
    let groups = [("param", net.store.params()), ("buffer", net.store.buffers())];
    for (kind, list) in groups {
        for p in list {
            let mut meta = Meta::new();
            meta.insert("name".into(), p.name.clone().into());
            let bytes = encode_tensor(&p.value, &meta);
            entries.push(CheckpointEntry {
                name: p.name.clone(),
                kind: kind.into(),
                offset: blob.len(),
                length: bytes.len(),
                shape: p.value.shape().to_vec(),
            });
            blob.extend_from_slice(&bytes);
        }
    }
    let index = CheckpointIndex {
        config_hash: config_hash.into(),
        step,
        spec: net.spec.clone(),
        entries,
    };
    write_atomic(&dir.join(WEIGHTS_FILE), &blob)?;
    let text = serde_json::to_string_pretty(&index).map_err(|e| CoreError::invalid("checkpoint", e.to_string()))?;
    write_atomic(&dir.join(INDEX_FILE), text.as_bytes())
}

pub fn load_checkpoint(dir: &Path) -> Result<(Network<f32>, CheckpointIndex)> {
    let ipath = dir.join(INDEX_FILE);
    let text = std::fs::read_to_string(&ipath).map_err(|e| CoreError::io(&ipath, e))?;
    let index: CheckpointIndex = serde_json::from_str(&text).map_err(|e| CoreError::Header {
        path: ipath.clone(),
        detail: e.to_string(),
    })?;
    let wpath = dir.join(WEIGHTS_FILE);
    let blob = std::fs::read(&wpath).map_err(|e| CoreError::io(&wpath, e))?;
    let mut net = Network::<f32>::new(index.spec.clone())?;
    let mut loaded = 0;
    for e in &index.entries {
        let bytes = blob.get(e.offset..e.offset + e.length).ok_or_else(|| CoreError::Truncated {
            path: wpath.clone(),
            expected: e.offset + e.length,
            found: blob.len(),
        })?;
        let (t, _) = decode_tensor::<f32>(bytes, &wpath)?;
        let list = match e.kind.as_str() {
            "param" => net.store.params_mut(),
            "buffer" => net.store.buffers_mut(),
            other => {
                return Err(CoreError::Header {
                    path: ipath,
                    detail: format!("unknown entry kind {other:?}"),
                })
            }
        };
        let slot = list.iter_mut().find(|p| p.name == e.name).ok_or_else(|| CoreError::Header {
            path: ipath.clone(),
            detail: format!("checkpoint holds {:?}, which the network does not have", e.name),
        })?;
        if slot.value.shape() != t.shape() {
            return Err(CoreError::Header {
                path: ipath.clone(),
                detail: format!(
                    "{}: checkpoint shape {:?}, network shape {:?}",
                    e.name,
                    t.shape(),
                    slot.value.shape()
                ),
            });
        }
        slot.value = t;
        loaded += 1;
    }
    let expected = net.store.params().len() + net.store.buffers().len();
    if loaded != expected {
        return Err(CoreError::Header {
            path: ipath,
            detail: format!("checkpoint has {loaded} tensors, network needs {expected}"),
        });
    }
    Ok((net, index))
}
