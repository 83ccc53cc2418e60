//! Parameter storage and the layers the pose models are built from.

use rand::Rng;

use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Batch-norm defaults; the momentum follows the `running = (1-m)·running + m·batch` convention.
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BufferId(usize);

/// A named tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Named<T: Scalar> {
    pub name: String,
    pub value: Tensor<T>,
}

/// Owns every trainable parameter and non-trainable buffer of a model.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T: Scalar> {
    params: Vec<Named<T>>,
    buffers: Vec<Named<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            buffers: Vec::new(),
        }
    }

    pub fn add_param(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.params.push(Named {
            name: name.into(),
            value,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor<T>) -> BufferId {
        self.buffers.push(Named {
            name: name.into(),
            value,
        });
        BufferId(self.buffers.len() - 1)
    }

    pub fn param(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn buffer(&self, id: BufferId) -> &Tensor<T> {
        &self.buffers[id.0].value
    }

    pub fn buffer_mut(&mut self, id: BufferId) -> &mut Tensor<T> {
        &mut self.buffers[id.0].value
    }

    pub fn params(&self) -> &[Named<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Named<T>] {
        &mut self.params
    }

    pub fn buffers(&self) -> &[Named<T>] {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut [Named<T>] {
        &mut self.buffers
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Replaces all values from another store with the same layout.
    pub fn load_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        let same = |a: &[Named<T>], b: &[Named<T>]| {
            a.len() == b.len()
                && a
                    .iter()
                    .zip(b)
                    .all(|(x, y)| x.name == y.name && x.value.shape() == y.value.shape())
        };
        if !same(&self.params, &other.params) || !same(&self.buffers, &other.buffers) {
            return Err(TensorError::invalid("load_from", "parameter layout differs"));
        }
        self.params.clone_from(&other.params);
        self.buffers.clone_from(&other.buffers);
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        let conv = |v: &[Named<T>]| {
            v.iter()
                .map(|n| Named {
                    name: n.name.clone(),
                    value: n.value.cast(),
                })
                .collect()
        };
        ParamStore {
            params: conv(&self.params),
            buffers: conv(&self.buffers),
        }
    }
}

/// One forward (and optionally backward) pass: a fresh graph with every
/// parameter bound as a leaf.
pub struct Session<'s, T: Scalar> {
    pub graph: Graph<T>,
    store: &'s mut ParamStore<T>,
    vars: Vec<Var>,
    training: bool,
}

impl<'s, T: Scalar> Session<'s, T> {
    /// `training` selects batch statistics in batch norm and makes the
    /// parameters differentiable.
    pub fn new(store: &'s mut ParamStore<T>, training: bool) -> Self {
        Self::with_grad(store, training, training)
    }

    /// Like [`Session::new`] but decouples gradient tracking from the batch-norm mode.
    pub fn with_grad(store: &'s mut ParamStore<T>, training: bool, track_grad: bool) -> Self {
        let mut graph = Graph::new();
        let vars = store
            .params
            .iter()
            .map(|p| graph.leaf(p.value.clone(), track_grad))
            .collect();
        Session {
            graph,
            store,
            vars,
            training,
        }
    }

    pub fn training(&self) -> bool {
        self.training
    }

    pub fn param(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        self.store
    }

    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.graph.constant(t)
    }

    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.graph.backward(loss)
    }

    /// Per-parameter gradients after [`Session::backward`], zeros where no gradient reached.
    pub fn param_grads(&self) -> Vec<Tensor<T>> {
        self.vars
            .iter()
            .zip(&self.store.params)
            .map(|(&v, p)| {
                self.graph
                    .grad(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(p.value.shape()))
            })
            .collect()
    }
}

/// Kaiming-uniform bound for ReLU stacks: `sqrt(6 / fan_in)`.
fn kaiming<T: Scalar, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::rand_uniform(shape, -bound, bound, rng)
}

fn bias_init<T: Scalar, R: Rng + ?Sized>(n: usize, fan_in: usize, rng: &mut R) -> Tensor<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::rand_uniform(&[n], -bound, bound, rng)
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let weight = store.add_param(
            format!("{name}.weight"),
            kaiming(&[out_channels, in_channels, kernel, kernel], fan_in, rng),
        );
        let bias = bias.then(|| store.add_param(format!("{name}.bias"), bias_init(out_channels, fan_in, rng)));
        Conv2d {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        }
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        let w = s.param(self.weight);
        let b = self.bias.map(|b| s.param(b));
        s.graph.conv2d(x, w, b, self.stride, self.padding)
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: BufferId,
    pub running_var: BufferId,
    pub channels: usize,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm2d {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        BatchNorm2d {
            gamma: store.add_param(format!("{name}.gamma"), Tensor::ones(&[channels])),
            beta: store.add_param(format!("{name}.beta"), Tensor::zeros(&[channels])),
            running_mean: store.add_buffer(format!("{name}.running_mean"), Tensor::zeros(&[channels])),
            running_var: store.add_buffer(format!("{name}.running_var"), Tensor::ones(&[channels])),
            channels,
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
        }
    }

    /// Training sessions normalize with batch statistics and update the
    /// running estimates; evaluation sessions use the running estimates.
    pub fn forward<T: Scalar>(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        let (g, b) = (s.param(self.gamma), s.param(self.beta));
        if s.training() {
            let (y, stats) = s.graph.batch_norm_train(x, g, b, self.eps)?;
            let m = T::from_f64(self.momentum);
            let one = T::one();
            let unbias = if stats.count > 1 {
                T::from_usize(stats.count) / T::from_usize(stats.count - 1)
            } else {
                one
            };
            let store = s.store_mut();
            for (r, &v) in store.buffer_mut(self.running_mean).data_mut().iter_mut().zip(&stats.mean) {
                *r = (one - m) * *r + m * v;
            }
            for (r, &v) in store.buffer_mut(self.running_var).data_mut().iter_mut().zip(&stats.var) {
                *r = (one - m) * *r + m * v * unbias;
            }
            Ok(y)
        } else {
            let rm = s.store().buffer(self.running_mean).data().to_vec();
            let rv = s.store().buffer(self.running_var).data().to_vec();
            s.graph.batch_norm_eval(x, g, b, &rm, &rv, self.eps)
        }
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_features: usize,
        out_features: usize,
        rng: &mut R,
    ) -> Self {
        Linear {
            weight: store.add_param(
                format!("{name}.weight"),
                kaiming(&[out_features, in_features], in_features, rng),
            ),
            bias: store.add_param(format!("{name}.bias"), bias_init(out_features, in_features, rng)),
            in_features,
            out_features,
        }
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        let (w, b) = (s.param(self.weight), s.param(self.bias));
        s.graph.linear(x, w, Some(b))
    }
}

/// conv → batch norm → ReLU.
#[derive(Debug, Clone)]
pub struct ConvBnRelu {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
}

impl ConvBnRelu {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        // The batch norm's shift makes a conv bias redundant.
        let conv = Conv2d::new(
            store,
            &format!("{name}.conv"),
            in_channels,
            out_channels,
            kernel,
            stride,
            kernel / 2,
            false,
            rng,
        );
        let bn = BatchNorm2d::new(store, &format!("{name}.bn"), out_channels);
        ConvBnRelu { conv, bn }
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        let y = self.conv.forward(s, x)?;
        let y = self.bn.forward(s, y)?;
        s.graph.relu(y)
    }
}
