use pmk_tensor::nn::{BatchNorm2d, Conv2d, ConvBnRelu, Linear, ParamStore, Session};
use pmk_tensor::{Scalar, Var};
use rand::Rng;

use super::gate::{gate_weights, GateMode};
use crate::error::{CoreError, Result};

/// Widths of the shared per-joint tower; every block halves the resolution.
pub const TOWER_WIDTHS: [usize; 4] = [32, 64, 128, 256];
pub const FEATURES: usize = 256;

/// Joint-motion re-weighting network.
///
/// Input `[N, J·C, H, W]` in joint-major channel order. Each joint's `C`
/// channels get their own batch norm, then a tower shared by all joints
/// yields `r_j` and the compressed `c_j`. A gate head maps all `r_j` to one
/// logit per joint, and the gated `c_j` are stacked and classified.
#[derive(Debug, Clone)]
pub struct Jmrn {
    pub joints: usize,
    pub channels: usize,
    pub c_dim: usize,
    pub tau: f64,
    pub input_bn: BatchNorm2d,
    pub tower: Vec<ConvBnRelu>,
    pub compress: Conv2d,
    pub gate_conv: Conv2d,
    pub gate_fc: Linear,
    pub reduce: Conv2d,
    pub reduce_bn: BatchNorm2d,
    pub head: Vec<ConvBnRelu>,
    pub fc: Linear,
}

#[derive(Debug, Clone, Copy)]
pub struct JmrnOutput {
    pub logits: Var,
    /// Gate weights `[N, J]` actually applied.
    pub w: Var,
    /// Gate logits `[N, J]`.
    pub pi: Var,
}

impl Jmrn {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        joints: usize,
        channels: usize,
        c_dim: usize,
        outputs: usize,
        tau: f64,
        rng: &mut R,
    ) -> Self {
        let input_bn = BatchNorm2d::new(store, "input_bn", joints * channels);
        let mut tower = Vec::new();
        let mut cin = channels;
        for (i, &w) in TOWER_WIDTHS.iter().enumerate() {
            tower.push(ConvBnRelu::new(store, &format!("tower{i}"), cin, w, 3, 2, rng));
            cin = w;
        }
        let compress = Conv2d::new(store, "compress", FEATURES, c_dim, 1, 1, 0, true, rng);
        let gate_conv = Conv2d::new(store, "gate_conv", joints * FEATURES, FEATURES, 1, 1, 0, true, rng);
        let gate_fc = Linear::new(store, "gate_fc", FEATURES, joints, rng);
        let reduce = Conv2d::new(store, "reduce", joints * c_dim, FEATURES, 1, 1, 0, false, rng);
        let reduce_bn = BatchNorm2d::new(store, "reduce_bn", FEATURES);
        let head = (0..2)
            .map(|i| ConvBnRelu::new(store, &format!("head{i}"), FEATURES, FEATURES, 3, 2, rng))
            .collect();
        let fc = Linear::new(store, "fc", FEATURES, outputs, rng);
        Jmrn {
            joints,
            channels,
            c_dim,
            tau,
            input_bn,
            tower,
            compress,
            gate_conv,
            gate_fc,
            reduce,
            reduce_bn,
            head,
            fc,
        }
    }

    fn check_input<T: Scalar>(&self, s: &Session<T>, x: Var) -> Result<[usize; 4]> {
        let xs = s.graph.shape(x);
        if xs.len() != 4 || xs[1] != self.joints * self.channels {
            return Err(CoreError::invalid(
                "jmrn_forward",
                format!(
                    "expected [N, {}·{}, H, W] input, got {:?}",
                    self.joints, self.channels, xs
                ),
            ));
        }
        Ok([xs[0], xs[1], xs[2], xs[3]])
    }

    /// Per-joint motion features: `r: [N·J, 256, h, w]` and `c: [N·J, c_dim, h, w]`.
    pub fn extract<T: Scalar>(&self, s: &mut Session<T>, x: Var) -> Result<(Var, Var)> {
        let [n, _, h, w] = self.check_input(s, x)?;
        let y = self.input_bn.forward(s, x)?;
        let mut y = s.graph.reshape(y, &[n * self.joints, self.channels, h, w])?;
        for b in &self.tower {
            y = b.forward(s, y)?;
        }
        let c = self.compress.forward(s, y)?;
        Ok((y, c))
    }

    /// Gate logits `[N, J]` from all joints' `r`.
    pub fn gate_logits<T: Scalar>(&self, s: &mut Session<T>, r: Var, n: usize) -> Result<Var> {
        let rs = s.graph.shape(r).to_vec();
        let stacked = s.graph.reshape(r, &[n, self.joints * rs[1], rs[2], rs[3]])?;
        let g = self.gate_conv.forward(s, stacked)?;
        let g = s.graph.gap(g)?;
        Ok(self.gate_fc.forward(s, g)?)
    }

    /// Everything after the 1×1 reduction: batch norm, ReLU, two strided
    /// blocks, pooling and the classifier.
    pub fn head_after_reduction<T: Scalar>(&self, s: &mut Session<T>, z: Var) -> Result<Var> {
        let z = self.reduce_bn.forward(s, z)?;
        let mut z = s.graph.relu(z)?;
        for b in &self.head {
            z = b.forward(s, z)?;
        }
        let z = s.graph.gap(z)?;
        Ok(self.fc.forward(s, z)?)
    }

    pub fn forward<T: Scalar, R: Rng + ?Sized>(
        &self,
        s: &mut Session<T>,
        x: Var,
        mode: GateMode,
        rng: &mut R,
    ) -> Result<JmrnOutput> {
        let [n, _, _, _] = self.check_input(s, x)?;
        let (r, c) = self.extract(s, x)?;
        let pi = self.gate_logits(s, r, n)?;
        let w = gate_weights(&mut s.graph, pi, self.tau, mode, rng)?;
        let cw = s.graph.scale_rows(c, w)?;
        let cs = s.graph.shape(cw).to_vec();
        let stacked = s.graph.reshape(cw, &[n, self.joints * self.c_dim, cs[2], cs[3]])?;
        let z = self.reduce.forward(s, stacked)?;
        let logits = self.head_after_reduction(s, z)?;
        Ok(JmrnOutput { logits, w, pi })
    }
}
