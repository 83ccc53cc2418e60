use crate::error::{Result, TensorError};
use crate::kernels::{self, ConvGeometry};
use crate::parallel;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule of a user-defined op: maps the upstream gradient to one
/// gradient per input, in input order.
pub type CustomBackward<T> = Box<dyn Fn(&Tensor<T>) -> Vec<Tensor<T>>>;

enum Op<T: Scalar> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeometry,
        out_channels: usize,
        cols: Vec<T>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    Relu(Var),
    Sigmoid(Var),
    Softplus(Var),
    Gap(Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddConst(Var),
    ScaleRows {
        x: Var,
        s: Var,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Reshape(Var),
    SliceRows {
        x: Var,
        start: usize,
    },
    SoftmaxCe {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    BceLogits {
        logits: Var,
        targets: Vec<T>,
    },
    Mean(Var),
    Sum(Var),
    Custom {
        inputs: Vec<Var>,
        backward: CustomBackward<T>,
    },
}

impl<T: Scalar> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::BatchNorm { .. } => "batchnorm2d",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Softplus(_) => "softplus",
            Op::Gap(_) => "gap",
            Op::Linear { .. } => "linear",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddConst(_) => "add_const",
            Op::ScaleRows { .. } => "scale_rows",
            Op::Concat { .. } => "concat",
            Op::Reshape(_) => "reshape",
            Op::SliceRows { .. } => "slice_rows",
            Op::SoftmaxCe { .. } => "softmax_cross_entropy",
            Op::BceLogits { .. } => "binary_cross_entropy",
            Op::Mean(_) => "mean",
            Op::Sum(_) => "sum",
            Op::Custom { .. } => "custom",
        }
    }
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Statistics computed by a training-mode batch norm, returned so the layer
/// can update its running estimates.
#[derive(Debug, Clone)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased (1/M) variance.
    pub var: Vec<T>,
    pub count: usize,
}

/// A tape of operations. Nodes are appended in execution order, so every
/// node's parents precede it and `backward` is a single reverse sweep.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: op.name() });
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Adds an input. Only leaves created with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` loss w.r.t. a leaf.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    // ---------------------------------------------------------------- ops

    /// Cross-correlation of `x: [N, Cin, H, W]` with `w: [Cout, Cin, k, k]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        const OP: &str = "conv2d";
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 {
            return Err(TensorError::shape(OP, format!("input must be [N,Cin,H,W], got {:?}", xs)));
        }
        if ws.len() != 4 {
            return Err(TensorError::shape(OP, format!("weight must be [Cout,Cin,k,k], got {:?}", ws)));
        }
        if ws[1] != xs[1] {
            return Err(TensorError::shape(
                OP,
                format!("input channels: input has {}, weight expects {}", xs[1], ws[1]),
            ));
        }
        if ws[2] != ws[3] {
            return Err(TensorError::shape(OP, format!("kernel must be square, got {}x{}", ws[2], ws[3])));
        }
        let k = ws[2];
        if stride == 0 {
            return Err(TensorError::invalid(OP, "stride must be >= 1"));
        }
        if xs[2] + 2 * padding < k {
            return Err(TensorError::shape(
                OP,
                format!("height {} with padding {} is smaller than kernel {}", xs[2], padding, k),
            ));
        }
        if xs[3] + 2 * padding < k {
            return Err(TensorError::shape(
                OP,
                format!("width {} with padding {} is smaller than kernel {}", xs[3], padding, k),
            ));
        }
        if let Some(b) = b {
            if self.shape(b) != [ws[0]] {
                return Err(TensorError::shape(
                    OP,
                    format!("bias must be [{}], got {:?}", ws[0], self.shape(b)),
                ));
            }
        }
        let geom = ConvGeometry {
            batch: xs[0],
            in_channels: xs[1],
            height: xs[2],
            width: xs[3],
            kernel: k,
            stride,
            padding,
        };
        let cout = ws[0];
        let (p, ncol, klen) = (geom.out_pixels(), geom.columns(), geom.patch_len());
        let cols = kernels::im2col(self.value(x).data(), &geom);
        let mut y = vec![T::zero(); cout * ncol];
        kernels::gemm(self.value(w).data(), &cols, &mut y, cout, klen, ncol, false);
        let bias = b.map(|b| self.value(b).data().to_vec());
        let mut out = vec![T::zero(); geom.batch * cout * p];
        parallel::for_each_chunk_mut(&mut out, p, |plane, dst| {
            let n = plane / cout;
            let co = plane % cout;
            let src = &y[co * ncol + n * p..co * ncol + (n + 1) * p];
            let bv = bias.as_ref().map_or(T::zero(), |b| b[co]);
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = s + bv;
            }
        });
        let shape = [geom.batch, cout, geom.out_height(), geom.out_width()];
        let value = Tensor::from_vec(&shape, out)?;
        let mut parents = vec![x, w];
        parents.extend(b);
        // The lowered input is only needed for the weight gradient.
        let keep_cols = self.nodes[w.0].requires_grad;
        self.push(
            value,
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                out_channels: cout,
                cols: if keep_cols { cols } else { Vec::new() },
            },
            &parents,
        )
    }

    /// Batch normalization over `[N, C, H, W]` with batch statistics.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchStats<T>)> {
        const OP: &str = "batchnorm2d";
        let xs = self.check_bn_shapes(OP, x, gamma, beta)?;
        let (n, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
        let m = n * hw;
        if m < 2 {
            return Err(TensorError::invalid(
                OP,
                format!("training mode needs N*H*W >= 2, got {}", m),
            ));
        }
        let xd = self.value(x).data();
        let stats: Vec<(T, T)> = parallel::map_range(c, |ch| {
            let mut sum = T::zero();
            for s in 0..n {
                for &v in &xd[(s * c + ch) * hw..(s * c + ch + 1) * hw] {
                    sum = sum + v;
                }
            }
            let mean = sum / T::from_usize(m);
            let mut sq = T::zero();
            for s in 0..n {
                for &v in &xd[(s * c + ch) * hw..(s * c + ch + 1) * hw] {
                    let d = v - mean;
                    sq = sq + d * d;
                }
            }
            (mean, sq / T::from_usize(m))
        });
        let mean: Vec<T> = stats.iter().map(|s| s.0).collect();
        let var: Vec<T> = stats.iter().map(|s| s.1).collect();
        let inv_std: Vec<T> = var
            .iter()
            .map(|&v| T::one() / (v + T::from_f64(eps)).sqrt())
            .collect();
        let (xhat, y) = self.bn_apply(x, gamma, beta, &mean, &inv_std, c, hw);
        let value = Tensor::from_vec(&xs, y)?;
        let out = self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: true,
            },
            &[x, gamma, beta],
        )?;
        Ok((out, BatchStats { mean, var, count: m }))
    }

    /// Batch normalization with fixed (running) statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
        eps: f64,
    ) -> Result<Var> {
        const OP: &str = "batchnorm2d";
        let xs = self.check_bn_shapes(OP, x, gamma, beta)?;
        let (c, hw) = (xs[1], xs[2] * xs[3]);
        if running_mean.len() != c || running_var.len() != c {
            return Err(TensorError::shape(OP, "running statistics do not match channel count"));
        }
        let inv_std: Vec<T> = running_var
            .iter()
            .map(|&v| T::one() / (v + T::from_f64(eps)).sqrt())
            .collect();
        let (xhat, y) = self.bn_apply(x, gamma, beta, running_mean, &inv_std, c, hw);
        let value = Tensor::from_vec(&xs, y)?;
        self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: false,
            },
            &[x, gamma, beta],
        )
    }

    fn check_bn_shapes(&self, op: &'static str, x: Var, gamma: Var, beta: Var) -> Result<Vec<usize>> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(TensorError::shape(op, format!("input must be [N,C,H,W], got {:?}", xs)));
        }
        if self.shape(gamma) != [xs[1]] || self.shape(beta) != [xs[1]] {
            return Err(TensorError::shape(
                op,
                format!(
                    "affine parameters must be [{}], got {:?} / {:?}",
                    xs[1],
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        Ok(xs)
    }

    #[allow(clippy::too_many_arguments)]
    fn bn_apply(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        inv_std: &[T],
        c: usize,
        hw: usize,
    ) -> (Vec<T>, Vec<T>) {
        let xd = self.value(x).data();
        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();
        let mut xhat = vec![T::zero(); xd.len()];
        parallel::for_each_chunk_mut(&mut xhat, hw, |plane, dst| {
            let ch = plane % c;
            let src = &xd[plane * hw..(plane + 1) * hw];
            for (d, &v) in dst.iter_mut().zip(src) {
                *d = (v - mean[ch]) * inv_std[ch];
            }
        });
        let mut y = vec![T::zero(); xd.len()];
        parallel::for_each_chunk_mut(&mut y, hw, |plane, dst| {
            let ch = plane % c;
            let src = &xhat[plane * hw..(plane + 1) * hw];
            for (d, &v) in dst.iter_mut().zip(src) {
                *d = v * gd[ch] + bd[ch];
            }
        });
        (xhat, y)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(|a| if a > T::zero() { a } else { T::zero() });
        self.push(v, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(sigmoid);
        self.push(v, Op::Sigmoid(x), &[x])
    }

    /// `ln(1 + e^x)`, computed without overflow.
    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(softplus);
        self.push(v, Op::Softplus(x), &[x])
    }

    /// Global average pooling `[N, C, H, W] -> [N, C]`.
    pub fn gap(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || xs[2] == 0 || xs[3] == 0 {
            return Err(TensorError::shape("gap", format!("input must be [N,C,H>=1,W>=1], got {:?}", xs)));
        }
        let hw = xs[2] * xs[3];
        let inv = T::one() / T::from_usize(hw);
        let out: Vec<T> = self
            .value(x)
            .data()
            .chunks(hw)
            .map(|pl| pl.iter().copied().sum::<T>() * inv)
            .collect();
        let value = Tensor::from_vec(&[xs[0], xs[1]], out)?;
        self.push(value, Op::Gap(x), &[x])
    }

    /// `x: [N, in]`, `w: [out, in]`, `b: [out]` → `x wᵀ + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        const OP: &str = "linear";
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 2 || ws.len() != 2 {
            return Err(TensorError::shape(OP, format!("expected 2-D input and weight, got {:?} and {:?}", xs, ws)));
        }
        if xs[1] != ws[1] {
            return Err(TensorError::shape(
                OP,
                format!("input features: input has {}, weight expects {}", xs[1], ws[1]),
            ));
        }
        if let Some(b) = b {
            if self.shape(b) != [ws[0]] {
                return Err(TensorError::shape(OP, format!("bias must be [{}]", ws[0])));
            }
        }
        let (n, fin, fout) = (xs[0], xs[1], ws[0]);
        let wt = kernels::transpose(self.value(w).data(), fout, fin);
        let mut out = vec![T::zero(); n * fout];
        kernels::gemm(self.value(x).data(), &wt, &mut out, n, fin, fout, false);
        if let Some(b) = b {
            let bd = self.value(b).data();
            for row in out.chunks_mut(fout) {
                for (o, &bv) in row.iter_mut().zip(bd) {
                    *o = *o + bv;
                }
            }
        }
        let value = Tensor::from_vec(&[n, fout], out)?;
        let mut parents = vec![x, w];
        parents.extend(b);
        self.push(value, Op::Linear { x, w, b }, &parents)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip_values(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let av = self.value(a);
        let data = av
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::from_vec(av.shape(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.zip_values(a, b, |x, y| x + y);
        self.push(v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.zip_values(a, b, |x, y| x - y);
        self.push(v, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.zip_values(a, b, |x, y| x * y);
        self.push(v, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, x: Var, s: T) -> Result<Var> {
        let v = self.value(x).scale(s);
        self.push(v, Op::Scale(x, s), &[x])
    }

    /// Adds a constant tensor of the same shape (no gradient flows into it).
    pub fn add_const(&mut self, x: Var, c: &Tensor<T>) -> Result<Var> {
        if self.shape(x) != c.shape() {
            return Err(TensorError::shape(
                "add_const",
                format!("{:?} vs {:?}", self.shape(x), c.shape()),
            ));
        }
        let mut v = self.value(x).clone();
        v.add_assign(c);
        self.push(v, Op::AddConst(x), &[x])
    }

    /// Multiplies row `i` of `x` (axis 0) by `s[i]`; `s` may have any shape with `N` elements.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let rows = xs.first().copied().unwrap_or(0);
        if self.value(s).numel() != rows {
            return Err(TensorError::shape(
                "scale_rows",
                format!("{} row factors for {} rows", self.value(s).numel(), rows),
            ));
        }
        let per = if rows == 0 { 0 } else { self.value(x).numel() / rows };
        let sd = self.value(s).data().to_vec();
        let mut out = self.value(x).data().to_vec();
        parallel::for_each_chunk_mut(&mut out, per.max(1), |r, row| {
            for v in row.iter_mut() {
                *v = *v * sd[r];
            }
        });
        let value = Tensor::from_vec(&xs, out)?;
        self.push(value, Op::ScaleRows { x, s }, &[x, s])
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        const OP: &str = "concat";
        let first = parts
            .first()
            .ok_or_else(|| TensorError::invalid(OP, "nothing to concatenate"))?;
        let s0 = self.shape(*first).to_vec();
        if axis >= s0.len() {
            return Err(TensorError::invalid(OP, format!("axis {} out of range for {:?}", axis, s0)));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != s0.len()
                || s[..axis] != s0[..axis]
                || s[axis + 1..] != s0[axis + 1..]
            {
                return Err(TensorError::shape(
                    OP,
                    format!("dimension mismatch outside axis {}: {:?} vs {:?}", axis, s0, s),
                ));
            }
            total += s[axis];
        }
        let outer: usize = s0[..axis].iter().product();
        let inner: usize = s0[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis] * inner;
                out.extend_from_slice(&self.value(p).data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = s0;
        shape[axis] = total;
        let value = Tensor::from_vec(&shape, out)?;
        self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape)?;
        self.push(v, Op::Reshape(x), &[x])
    }

    /// Rows `start..start+len` along axis 0.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.is_empty() || start + len > xs[0] {
            return Err(TensorError::shape(
                "slice_rows",
                format!("rows {}..{} out of {:?}", start, start + len, xs),
            ));
        }
        let per: usize = xs[1..].iter().product();
        let data = self.value(x).data()[start * per..(start + len) * per].to_vec();
        let mut shape = xs;
        shape[0] = len;
        let value = Tensor::from_vec(&shape, data)?;
        self.push(value, Op::SliceRows { x, start }, &[x])
    }

    /// Mean over the batch of `logsumexp(z) - z[label]` for `logits: [N, K]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        const OP: &str = "softmax_cross_entropy";
        let ls = self.shape(logits).to_vec();
        if ls.len() != 2 || ls[0] != labels.len() || ls[0] == 0 {
            return Err(TensorError::shape(
                OP,
                format!("logits {:?} for {} labels", ls, labels.len()),
            ));
        }
        let k = ls[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(TensorError::LabelOutOfRange {
                op: OP,
                label: bad,
                classes: k,
            });
        }
        let z = self.value(logits).data();
        let mut probs = vec![T::zero(); z.len()];
        let mut loss = T::zero();
        for (i, (row, prow)) in z.chunks(k).zip(probs.chunks_mut(k)).enumerate() {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for (p, &v) in prow.iter_mut().zip(row) {
                *p = (v - m).exp();
                s = s + *p;
            }
            for p in prow.iter_mut() {
                *p = *p / s;
            }
            loss = loss + (m + s.ln() - row[labels[i]]);
        }
        let value = Tensor::scalar(loss / T::from_usize(labels.len()));
        self.push(
            value,
            Op::SoftmaxCe {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        )
    }

    /// Mean over all elements of the logistic loss with 0/1 (or soft) targets.
    pub fn binary_cross_entropy(&mut self, logits: Var, targets: &Tensor<T>) -> Result<Var> {
        if self.shape(logits) != targets.shape() {
            return Err(TensorError::shape(
                "binary_cross_entropy",
                format!("logits {:?} vs targets {:?}", self.shape(logits), targets.shape()),
            ));
        }
        let z = self.value(logits).data();
        let loss: T = z
            .iter()
            .zip(targets.data())
            .map(|(&v, &t)| softplus(v) - t * v)
            .sum::<T>()
            / T::from_usize(z.len().max(1));
        self.push(
            Tensor::scalar(loss),
            Op::BceLogits {
                logits,
                targets: targets.data().to_vec(),
            },
            &[logits],
        )
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let m = v.sum() / T::from_usize(v.numel().max(1));
        self.push(Tensor::scalar(m), Op::Mean(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// Records an op whose forward value was computed by the caller.
    pub fn custom(
        &mut self,
        inputs: &[Var],
        value: Tensor<T>,
        backward: CustomBackward<T>,
    ) -> Result<Var> {
        self.push(
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                backward,
            },
            inputs,
        )
    }

    // ----------------------------------------------------------- backward

    /// Reverse sweep from a scalar `loss`. Afterwards [`Graph::grad`] returns
    /// the gradient of every leaf created with `requires_grad`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::Backward(format!(
                "loss must be a scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(self.shape(loss)));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            let Some(up) = grads[i].take() else { continue };
            if let Op::Leaf = node.op {
                grads[i] = Some(up);
                continue;
            }
            for (parent, g) in self.node_backward(i, &up)? {
                if !self.nodes[parent.0].requires_grad {
                    continue;
                }
                match &mut grads[parent.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if !g.is_finite() {
                    return Err(TensorError::NonFinite { op: "backward" });
                }
                debug_assert_eq!(g.shape(), self.nodes[i].value.shape());
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn node_backward(&self, i: usize, up: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let node = &self.nodes[i];
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                out_channels,
                cols,
            } => {
                let (p, ncol, klen, cout) =
                    (geom.out_pixels(), geom.columns(), geom.patch_len(), *out_channels);
                let upd = up.data();
                // [N, Cout, P] -> [Cout, N·P]
                let mut dy = vec![T::zero(); cout * ncol];
                parallel::for_each_chunk_mut(&mut dy, ncol, |co, row| {
                    for n in 0..geom.batch {
                        row[n * p..(n + 1) * p]
                            .copy_from_slice(&upd[(n * cout + co) * p..(n * cout + co + 1) * p]);
                    }
                });
                if let Some(b) = b {
                    if self.wants(*b) {
                        let db: Vec<T> = dy.chunks(ncol).map(|r| r.iter().copied().sum()).collect();
                        out.push((*b, Tensor::from_vec(&[cout], db)?));
                    }
                }
                if self.wants(*w) {
                    let cols_t = kernels::transpose(cols, klen, ncol);
                    let mut dw = vec![T::zero(); cout * klen];
                    kernels::gemm(&dy, &cols_t, &mut dw, cout, ncol, klen, false);
                    out.push((*w, Tensor::from_vec(self.shape(*w), dw)?));
                }
                if self.wants(*x) {
                    let wt = kernels::transpose(self.value(*w).data(), cout, klen);
                    let mut dcols = vec![T::zero(); klen * ncol];
                    kernels::gemm(&wt, &dy, &mut dcols, klen, cout, ncol, false);
                    let dx = kernels::col2im(&dcols, geom);
                    out.push((*x, Tensor::from_vec(self.shape(*x), dx)?));
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let xs = self.shape(*x);
                let (n, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
                let upd = up.data();
                let sums: Vec<(T, T)> = parallel::map_range(c, |ch| {
                    let (mut sdy, mut sdyx) = (T::zero(), T::zero());
                    for s in 0..n {
                        let o = (s * c + ch) * hw;
                        for q in o..o + hw {
                            sdy = sdy + upd[q];
                            sdyx = sdyx + upd[q] * xhat[q];
                        }
                    }
                    (sdy, sdyx)
                });
                if self.wants(*gamma) {
                    let dg = sums.iter().map(|s| s.1).collect();
                    out.push((*gamma, Tensor::from_vec(&[c], dg)?));
                }
                if self.wants(*beta) {
                    let db = sums.iter().map(|s| s.0).collect();
                    out.push((*beta, Tensor::from_vec(&[c], db)?));
                }
                if self.wants(*x) {
                    let gd = self.value(*gamma).data();
                    let m = T::from_usize(n * hw);
                    let mut dx = vec![T::zero(); upd.len()];
                    parallel::for_each_chunk_mut(&mut dx, hw, |plane, dst| {
                        let ch = plane % c;
                        let o = plane * hw;
                        let scale = gd[ch] * inv_std[ch];
                        if *batch_stats {
                            let (sdy, sdyx) = sums[ch];
                            for (q, d) in dst.iter_mut().enumerate() {
                                *d = scale * (upd[o + q] - sdy / m - xhat[o + q] * sdyx / m);
                            }
                        } else {
                            for (q, d) in dst.iter_mut().enumerate() {
                                *d = scale * upd[o + q];
                            }
                        }
                    });
                    out.push((*x, Tensor::from_vec(xs, dx)?));
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                let g = zip_map(up, xv, |u, v| if v > T::zero() { u } else { T::zero() });
                out.push((*x, g));
            }
            Op::Sigmoid(x) => {
                let g = zip_map(up, &node.value, |u, s| u * s * (T::one() - s));
                out.push((*x, g));
            }
            Op::Softplus(x) => {
                let g = zip_map(up, self.value(*x), |u, v| u * sigmoid(v));
                out.push((*x, g));
            }
            Op::Gap(x) => {
                let xs = self.shape(*x);
                let hw = xs[2] * xs[3];
                let inv = T::one() / T::from_usize(hw);
                let mut g = Vec::with_capacity(hw * up.numel());
                for &u in up.data() {
                    g.extend(std::iter::repeat(u * inv).take(hw));
                }
                out.push((*x, Tensor::from_vec(xs, g)?));
            }
            Op::Linear { x, w, b } => {
                let xs = self.shape(*x);
                let (n, fin) = (xs[0], xs[1]);
                let fout = self.shape(*w)[0];
                if self.wants(*x) {
                    let mut dx = vec![T::zero(); n * fin];
                    kernels::gemm(up.data(), self.value(*w).data(), &mut dx, n, fout, fin, false);
                    out.push((*x, Tensor::from_vec(xs, dx)?));
                }
                if self.wants(*w) {
                    let upt = kernels::transpose(up.data(), n, fout);
                    let mut dw = vec![T::zero(); fout * fin];
                    kernels::gemm(&upt, self.value(*x).data(), &mut dw, fout, n, fin, false);
                    out.push((*w, Tensor::from_vec(&[fout, fin], dw)?));
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        let mut db = vec![T::zero(); fout];
                        for row in up.data().chunks(fout) {
                            for (d, &u) in db.iter_mut().zip(row) {
                                *d = *d + u;
                            }
                        }
                        out.push((*b, Tensor::from_vec(&[fout], db)?));
                    }
                }
            }
            Op::Add(a, b) => {
                out.push((*a, up.clone()));
                out.push((*b, up.clone()));
            }
            Op::Sub(a, b) => {
                out.push((*a, up.clone()));
                out.push((*b, up.scale(-T::one())));
            }
            Op::Mul(a, b) => {
                out.push((*a, zip_map(up, self.value(*b), |u, v| u * v)));
                out.push((*b, zip_map(up, self.value(*a), |u, v| u * v)));
            }
            Op::Scale(x, s) => out.push((*x, up.scale(*s))),
            Op::AddConst(x) | Op::Reshape(x) => {
                out.push((*x, up.clone().reshape(self.shape(*x))?));
            }
            Op::ScaleRows { x, s } => {
                let xs = self.shape(*x);
                let rows = xs[0];
                let per = if rows == 0 { 0 } else { up.numel() / rows };
                let sd = self.value(*s).data();
                if self.wants(*x) {
                    let mut dx = up.data().to_vec();
                    for (r, row) in dx.chunks_mut(per.max(1)).enumerate() {
                        for v in row.iter_mut() {
                            *v = *v * sd[r];
                        }
                    }
                    out.push((*x, Tensor::from_vec(xs, dx)?));
                }
                if self.wants(*s) {
                    let xd = self.value(*x).data();
                    let ds: Vec<T> = (0..rows)
                        .map(|r| {
                            let o = r * per;
                            (o..o + per).map(|q| up.data()[q] * xd[q]).sum()
                        })
                        .collect();
                    out.push((*s, Tensor::from_vec(self.shape(*s), ds)?));
                }
            }
            Op::Concat { parts, axis } => {
                let s0 = self.shape(parts[0]);
                let outer: usize = s0[..*axis].iter().product();
                let inner: usize = s0[axis + 1..].iter().product();
                let total: usize = parts.iter().map(|p| self.shape(*p)[*axis]).sum();
                let mut offset = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis] * inner;
                    let mut g = Vec::with_capacity(outer * len);
                    for o in 0..outer {
                        let base = o * total * inner + offset;
                        g.extend_from_slice(&up.data()[base..base + len]);
                    }
                    offset += len;
                    out.push((p, Tensor::from_vec(self.shape(p), g)?));
                }
            }
            Op::SliceRows { x, start } => {
                let xs = self.shape(*x);
                let per: usize = xs[1..].iter().product();
                let mut g = vec![T::zero(); self.value(*x).numel()];
                g[start * per..start * per + up.numel()].copy_from_slice(up.data());
                out.push((*x, Tensor::from_vec(xs, g)?));
            }
            Op::SoftmaxCe {
                logits,
                labels,
                probs,
            } => {
                let k = self.shape(*logits)[1];
                let u = up.data()[0] / T::from_usize(labels.len());
                let mut g = probs.clone();
                for (i, row) in g.chunks_mut(k).enumerate() {
                    row[labels[i]] = row[labels[i]] - T::one();
                    for v in row.iter_mut() {
                        *v = *v * u;
                    }
                }
                out.push((*logits, Tensor::from_vec(self.shape(*logits), g)?));
            }
            Op::BceLogits { logits, targets } => {
                let z = self.value(*logits).data();
                let u = up.data()[0] / T::from_usize(z.len().max(1));
                let g = z
                    .iter()
                    .zip(targets)
                    .map(|(&v, &t)| (sigmoid(v) - t) * u)
                    .collect();
                out.push((*logits, Tensor::from_vec(self.shape(*logits), g)?));
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                let u = up.data()[0] / T::from_usize(n.max(1));
                out.push((*x, Tensor::full(self.shape(*x), u)));
            }
            Op::Sum(x) => out.push((*x, Tensor::full(self.shape(*x), up.data()[0]))),
            Op::Custom { inputs, backward } => {
                let gs = backward(up);
                if gs.len() != inputs.len() {
                    return Err(TensorError::Backward(format!(
                        "custom op returned {} gradients for {} inputs",
                        gs.len(),
                        inputs.len()
                    )));
                }
                for (&v, g) in inputs.iter().zip(gs) {
                    if g.shape() != self.shape(v) {
                        return Err(TensorError::Backward(format!(
                            "custom op gradient shape {:?} != input shape {:?}",
                            g.shape(),
                            self.shape(v)
                        )));
                    }
                    out.push((v, g));
                }
            }
        }
        Ok(out)
    }
}

fn zip_map<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_vec(b.shape(), data).expect("zip_map: same element count")
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}
