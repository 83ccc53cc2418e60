use pmk_tensor::nn::{ConvBnRelu, Linear, ParamStore, Session};
use pmk_tensor::{Scalar, Var};
use rand::Rng;

use crate::error::{CoreError, Result};

pub const WIDTHS: [usize; 6] = [64, 64, 128, 128, 256, 256];
pub const STRIDES: [usize; 6] = [1, 2, 1, 2, 1, 2];

/// Stacked-joint CNN: all `J·C` channels enter one conv stack.
#[derive(Debug, Clone)]
pub struct Baseline {
    pub in_channels: usize,
    pub blocks: Vec<ConvBnRelu>,
    pub fc: Linear,
}

impl Baseline {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        in_channels: usize,
        outputs: usize,
        rng: &mut R,
    ) -> Self {
        let mut blocks = Vec::new();
        let mut cin = in_channels;
        for (i, (&w, &st)) in WIDTHS.iter().zip(&STRIDES).enumerate() {
            blocks.push(ConvBnRelu::new(store, &format!("block{i}"), cin, w, 3, st, rng));
            cin = w;
        }
        let fc = Linear::new(store, "fc", cin, outputs, rng);
        Baseline {
            in_channels,
            blocks,
            fc,
        }
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        let xs = s.graph.shape(x);
        if xs.len() != 4 || xs[1] != self.in_channels {
            return Err(CoreError::invalid(
                "baseline_forward",
                format!("expected [N, {}, H, W] input, got {:?}", self.in_channels, xs),
            ));
        }
        let mut y = x;
        for b in &self.blocks {
            y = b.forward(s, y)?;
        }
        let y = s.graph.gap(y)?;
        Ok(self.fc.forward(s, y)?)
    }
}
