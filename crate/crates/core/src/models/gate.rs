//! Binary Concrete joint gates.

use pmk_tensor::{sigmoid, Graph, Scalar, Tensor, Var};
use rand::Rng;

use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GateMode {
    /// `w = σ((π + log u − log(1−u)) / τ)`, fresh `u` per sample and joint.
    Sampled,
    /// `w = σ(π / τ)`.
    Deterministic,
    /// Every gate forced to a constant; the gate head is still evaluated.
    Fixed(f64),
}

/// One draw of logistic noise `log u − log(1 − u)`, `u ~ U(0, 1)`.
pub fn logistic_noise<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let u: f64 = rng.gen_range(f64::EPSILON..1.0 - f64::EPSILON);
    u.ln() - (1.0 - u).ln()
}

pub fn bin_concrete<R: Rng + ?Sized>(pi: f64, tau: f64, rng: &mut R) -> f64 {
    sigmoid((pi + logistic_noise(rng)) / tau)
}

pub fn eval_gate(pi: f64, tau: f64) -> f64 {
    sigmoid(pi / tau)
}

/// Gate weights for logits `pi: [N, J]` on the graph.
pub fn gate_weights<T: Scalar, R: Rng + ?Sized>(
    g: &mut Graph<T>,
    pi: Var,
    tau: f64,
    mode: GateMode,
    rng: &mut R,
) -> Result<Var> {
    let shape = g.shape(pi).to_vec();
    let inv_tau = T::from_f64(1.0 / tau);
    Ok(match mode {
        GateMode::Sampled => {
            let n: usize = shape.iter().product();
            let noise: Vec<T> = (0..n).map(|_| T::from_f64(logistic_noise(rng))).collect();
            let noisy = g.add_const(pi, &Tensor::from_vec(&shape, noise)?)?;
            let z = g.scale(noisy, inv_tau)?;
            g.sigmoid(z)?
        }
        GateMode::Deterministic => {
            let z = g.scale(pi, inv_tau)?;
            g.sigmoid(z)?
        }
        GateMode::Fixed(v) => g.constant(Tensor::full(&shape, T::from_f64(v))),
    })
}
