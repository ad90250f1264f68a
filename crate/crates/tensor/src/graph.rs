use std::collections::BTreeMap;

use crate::error::{Result, TensorError};
use crate::kernels::{self, ConvGeom};
use crate::params::{ParamId, ParamKind, ParamStore};
use crate::tensor::{ensure_same_shape, Tensor};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Normalization statistics used by [`Graph::batch_norm`].
#[derive(Clone, Copy, Debug)]
pub enum NormStats<'a> {
    /// Normalize with the statistics of the current batch (training).
    Batch,
    /// Normalize with stored running statistics (inference).
    Running { mean: &'a [f64], var: &'a [f64] },
}

/// Per-channel statistics of a batch, reported back so callers can update
/// running buffers. `var` is the biased (population) variance.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: usize,
}

/// One recorded operation: its kind and output shape.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TraceEntry {
    pub op: &'static str,
    pub shape: Vec<usize>,
}

enum Op {
    Input,
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddN(Vec<Var>),
    SumAll(Var),
    Relu(Var),
    Sigmoid(Var),
    Gate {
        x: Var,
        gate: Var,
    },
    Concat(Vec<Var>),
    SliceChannels {
        x: Var,
        start: usize,
    },
    ResizeNearest(Var),
    AdaptiveAvgPool(Var),
    Reshape(Var),
    Conv2d {
        x: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        batch_stats: bool,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Linear {
        x: Var,
        weight: Var,
        bias: Option<Var>,
    },
    Mse(Var, Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    SoftKl {
        student: Var,
        teacher: Var,
        temperature: f64,
        ps: Vec<f64>,
        pt: Vec<f64>,
        row_kl: Vec<f64>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Leaf => "leaf",
            Op::Param(_) => "param",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddN(_) => "add_n",
            Op::SumAll(_) => "sum_all",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Gate { .. } => "gate",
            Op::Concat(_) => "concat",
            Op::SliceChannels { .. } => "slice_channels",
            Op::ResizeNearest(_) => "resize_nearest",
            Op::AdaptiveAvgPool(_) => "adaptive_avg_pool",
            Op::Reshape(_) => "reshape",
            Op::Conv2d { .. } => "conv2d",
            Op::BatchNorm { .. } => "batch_norm",
            Op::Linear { .. } => "linear",
            Op::Mse(..) => "mse",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::SoftKl { .. } => "soft_kl",
        }
    }

    fn is_source(&self) -> bool {
        matches!(self, Op::Input | Op::Leaf | Op::Param(_))
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A tape of operations supporting reverse-mode differentiation.
///
/// Build one graph per forward pass. Values are computed eagerly; calling
/// [`Graph::backward`] on a scalar walks the tape in reverse.
pub struct Graph {
    nodes: Vec<Node>,
    grad_enabled: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A graph that records values only. No node requires a gradient and
    /// no backward caches are kept.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    /// Every non-source operation, in recording order.
    pub fn trace(&self) -> Vec<TraceEntry> {
        self.nodes
            .iter()
            .filter(|n| !n.op.is_source())
            .map(|n| TraceEntry {
                op: n.op.name(),
                shape: n.value.shape().to_vec(),
            })
            .collect()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad: requires_grad && self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        self.grad_enabled && vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A constant: never receives a gradient.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Input, false)
    }

    /// A differentiable input whose gradient is reported by [`Gradients::wrt`].
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Brings a stored parameter onto the tape. Buffers are treated as constants.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let trainable = store.kind(id) == ParamKind::Trainable;
        self.push(store.value(id).clone(), Op::Param(id), trainable)
    }

    fn binary(&mut self, a: Var, b: Var, op_name: &'static str) -> Result<(Vec<usize>, bool)> {
        ensure_same_shape(op_name, self.shape(a), self.shape(b))?;
        Ok((self.shape(a).to_vec(), self.any_grad(&[a, b])))
    }

    fn zip_values(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        self.value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, rg) = self.binary(a, b, "add")?;
        let data = self.zip_values(a, b, |x, y| x + y);
        Ok(self.push(Tensor::new(&shape, data)?, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, rg) = self.binary(a, b, "sub")?;
        let data = self.zip_values(a, b, |x, y| x - y);
        Ok(self.push(Tensor::new(&shape, data)?, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, rg) = self.binary(a, b, "mul")?;
        let data = self.zip_values(a, b, |x, y| x * y);
        Ok(self.push(Tensor::new(&shape, data)?, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a).map(|x| x * factor);
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Scale(a, factor), rg)
    }

    /// Elementwise sum of same-shaped nodes, accumulated left to right.
    pub fn add_n(&mut self, vars: &[Var]) -> Result<Var> {
        let first = *vars
            .first()
            .ok_or_else(|| TensorError::invalid("add_n", "no operands"))?;
        let mut acc = self.value(first).clone();
        for v in &vars[1..] {
            ensure_same_shape("add_n", acc.shape(), self.shape(*v))?;
            acc.axpy(1.0, self.value(*v))?;
        }
        let rg = self.any_grad(vars);
        Ok(self.push(acc, Op::AddN(vars.to_vec()), rg))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let rg = self.any_grad(&[a]);
        self.push(Tensor::scalar(s), Op::SumAll(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(0.0));
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Relu(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| 1.0 / (1.0 + (-x).exp()));
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Sigmoid(a), rg)
    }

    /// Multiplies `x` of shape `(N,C,H,W)` by a per-pixel `gate` of shape
    /// `(N,1,H,W)`, broadcasting over channels.
    pub fn gate(&mut self, x: Var, gate: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let gshape = self.value(gate).dims4()?;
        if gshape != (n, 1, h, w) {
            return Err(TensorError::ShapeMismatch {
                op: "gate",
                left: self.shape(x).to_vec(),
                right: self.shape(gate).to_vec(),
            });
        }
        let xs = self.value(x).data();
        let gs = self.value(gate).data();
        let plane = h * w;
        let mut out = vec![0.0; xs.len()];
        for ni in 0..n {
            let g = &gs[ni * plane..(ni + 1) * plane];
            for ci in 0..c {
                let base = (ni * c + ci) * plane;
                for p in 0..plane {
                    out[base + p] = xs[base + p] * g[p];
                }
            }
        }
        let rg = self.any_grad(&[x, gate]);
        Ok(self.push(Tensor::new(&[n, c, h, w], out)?, Op::Gate { x, gate }, rg))
    }

    /// Concatenates 4-D nodes along the channel axis.
    pub fn concat_channels(&mut self, vars: &[Var]) -> Result<Var> {
        let first = *vars
            .first()
            .ok_or_else(|| TensorError::invalid("concat_channels", "no operands"))?;
        let (n, _, h, w) = self.value(first).dims4()?;
        let mut total_c = 0;
        for v in vars {
            let (vn, vc, vh, vw) = self.value(*v).dims4()?;
            if (vn, vh, vw) != (n, h, w) {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_channels",
                    left: self.shape(first).to_vec(),
                    right: self.shape(*v).to_vec(),
                });
            }
            total_c += vc;
        }
        let plane = h * w;
        let mut out = Vec::with_capacity(n * total_c * plane);
        for ni in 0..n {
            for v in vars {
                let t = self.value(*v);
                let c = t.shape()[1];
                out.extend_from_slice(&t.data()[ni * c * plane..(ni + 1) * c * plane]);
            }
        }
        let rg = self.any_grad(vars);
        Ok(self.push(
            Tensor::new(&[n, total_c, h, w], out)?,
            Op::Concat(vars.to_vec()),
            rg,
        ))
    }

    /// Channels `start..start + len` of a 4-D node.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if len == 0 || start + len > c {
            return Err(TensorError::invalid(
                "slice_channels",
                format!("range {start}..{} outside {c} channels", start + len),
            ));
        }
        let plane = h * w;
        let xs = self.value(x).data();
        let mut out = Vec::with_capacity(n * len * plane);
        for ni in 0..n {
            let base = (ni * c + start) * plane;
            out.extend_from_slice(&xs[base..base + len * plane]);
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            Tensor::new(&[n, len, h, w], out)?,
            Op::SliceChannels { x, start },
            rg,
        ))
    }

    /// Nearest-neighbour resampling to `(out_h, out_w)`.
    pub fn resize_nearest(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if out_h == 0 || out_w == 0 {
            return Err(TensorError::invalid(
                "resize_nearest",
                format!("target size {out_h}x{out_w} is empty"),
            ));
        }
        let xs = self.value(x).data();
        let mut out = vec![0.0; n * c * out_h * out_w];
        for nc in 0..n * c {
            let src = &xs[nc * h * w..(nc + 1) * h * w];
            let dst = &mut out[nc * out_h * out_w..(nc + 1) * out_h * out_w];
            for oy in 0..out_h {
                let sy = kernels::nearest_source(oy, h, out_h);
                for ox in 0..out_w {
                    let sx = kernels::nearest_source(ox, w, out_w);
                    dst[oy * out_w + ox] = src[sy * w + sx];
                }
            }
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            Tensor::new(&[n, c, out_h, out_w], out)?,
            Op::ResizeNearest(x),
            rg,
        ))
    }

    /// Adaptive average pooling to `(out_h, out_w)` bins.
    pub fn adaptive_avg_pool(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if out_h == 0 || out_w == 0 || out_h > h || out_w > w {
            return Err(TensorError::invalid(
                "adaptive_avg_pool",
                format!("output {out_h}x{out_w} invalid for input {h}x{w}"),
            ));
        }
        let xs = self.value(x).data();
        let mut out = vec![0.0; n * c * out_h * out_w];
        for nc in 0..n * c {
            let src = &xs[nc * h * w..(nc + 1) * h * w];
            for oy in 0..out_h {
                let (y0, y1) = kernels::adaptive_bin(oy, h, out_h);
                for ox in 0..out_w {
                    let (x0, x1) = kernels::adaptive_bin(ox, w, out_w);
                    let mut acc = 0.0;
                    for yy in y0..y1 {
                        for xx in x0..x1 {
                            acc += src[yy * w + xx];
                        }
                    }
                    out[(nc * out_h + oy) * out_w + ox] = acc / ((y1 - y0) * (x1 - x0)) as f64;
                }
            }
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            Tensor::new(&[n, c, out_h, out_w], out)?,
            Op::AdaptiveAvgPool(x),
            rg,
        ))
    }

    /// Collapses all trailing dimensions: `(N, ...) -> (N, prod(...))`.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x);
        let lead = *shape
            .first()
            .ok_or_else(|| TensorError::invalid("flatten", "rank-0 input"))?;
        let rest: usize = shape[1..].iter().product();
        let value = self.value(x).clone().reshape(&[lead, rest])?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// 2-D convolution with square kernels, symmetric zero padding and
    /// equal strides. `weight` has shape `(O, C, KH, KW)`.
    pub fn conv2d(
        &mut self,
        x: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let (o, wc, kh, kw) = self.value(weight).dims4()?;
        if wc != c {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                left: self.shape(x).to_vec(),
                right: self.shape(weight).to_vec(),
            });
        }
        if let Some(b) = bias {
            ensure_same_shape("conv2d bias", self.shape(b), &[o])?;
        }
        if stride == 0 || h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(TensorError::invalid(
                "conv2d",
                format!("kernel {kh}x{kw} stride {stride} pad {pad} on {h}x{w}"),
            ));
        }
        let geom = ConvGeom {
            n,
            c,
            h,
            w,
            o,
            kh,
            kw,
            stride,
            pad,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (w + 2 * pad - kw) / stride + 1,
        };
        let (out, cols) = kernels::conv_forward(
            self.value(x).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
            &geom,
        );
        let mut parents = vec![x, weight];
        parents.extend(bias);
        let rg = self.any_grad(&parents);
        let cols = if rg { cols } else { Vec::new() };
        Ok(self.push(
            Tensor::new(&[n, o, geom.ho, geom.wo], out)?,
            Op::Conv2d {
                x,
                weight,
                bias,
                geom,
                cols,
            },
            rg,
        ))
    }

    /// Per-channel batch normalization followed by the affine `gamma`, `beta`.
    ///
    /// With [`NormStats::Batch`] the batch statistics are returned so the
    /// caller can maintain running estimates.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: NormStats<'_>,
        eps: f64,
    ) -> Result<(Var, Option<BatchStats>)> {
        let (n, c, h, w) = self.value(x).dims4()?;
        ensure_same_shape("batch_norm gamma", self.shape(gamma), &[c])?;
        ensure_same_shape("batch_norm beta", self.shape(beta), &[c])?;
        let plane = h * w;
        let count = n * plane;
        let xs = self.value(x).data();
        let (mean, var, batch) = match stats {
            NormStats::Batch => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ci in 0..c {
                    let mut s = 0.0;
                    for ni in 0..n {
                        let base = (ni * c + ci) * plane;
                        s += xs[base..base + plane].iter().sum::<f64>();
                    }
                    let m = s / count as f64;
                    let mut ss = 0.0;
                    for ni in 0..n {
                        let base = (ni * c + ci) * plane;
                        ss += xs[base..base + plane]
                            .iter()
                            .map(|v| (v - m) * (v - m))
                            .sum::<f64>();
                    }
                    mean[ci] = m;
                    var[ci] = ss / count as f64;
                }
                (mean, var, true)
            }
            NormStats::Running { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(TensorError::invalid(
                        "batch_norm",
                        format!("running stats of length {} for {c} channels", mean.len()),
                    ));
                }
                (mean.to_vec(), var.to_vec(), false)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let gs = self.value(gamma).data();
        let bs = self.value(beta).data();
        let mut xhat = vec![0.0; xs.len()];
        let mut out = vec![0.0; xs.len()];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * plane;
                for p in base..base + plane {
                    let z = (xs[p] - mean[ci]) * inv_std[ci];
                    xhat[p] = z;
                    out[p] = gs[ci] * z + bs[ci];
                }
            }
        }
        let rg = self.any_grad(&[x, gamma, beta]);
        let (xhat, inv_cache) = if rg { (xhat, inv_std) } else { (Vec::new(), Vec::new()) };
        let var_out = self.push(
            Tensor::new(&[n, c, h, w], out)?,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                batch_stats: batch,
                xhat,
                inv_std: inv_cache,
            },
            rg,
        );
        let report = batch.then_some(BatchStats { mean, var, count });
        Ok((var_out, report))
    }

    /// `x · weightᵀ + bias` with `x: (N, in)` and `weight: (out, in)`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let (n, fin) = self.value(x).dims2()?;
        let (fout, win) = self.value(weight).dims2()?;
        if win != fin {
            return Err(TensorError::ShapeMismatch {
                op: "linear",
                left: self.shape(x).to_vec(),
                right: self.shape(weight).to_vec(),
            });
        }
        if let Some(b) = bias {
            ensure_same_shape("linear bias", self.shape(b), &[fout])?;
        }
        let mut out = vec![0.0; n * fout];
        kernels::gemm(
            n,
            fin,
            fout,
            self.value(x).data(),
            false,
            self.value(weight).data(),
            true,
            &mut out,
            false,
        );
        if let Some(b) = bias {
            let bs = self.value(b).data();
            for row in out.chunks_mut(fout) {
                for (o, bv) in row.iter_mut().zip(bs) {
                    *o += bv;
                }
            }
        }
        let mut parents = vec![x, weight];
        parents.extend(bias);
        let rg = self.any_grad(&parents);
        Ok(self.push(
            Tensor::new(&[n, fout], out)?,
            Op::Linear { x, weight, bias },
            rg,
        ))
    }

    /// Mean squared difference over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        ensure_same_shape("mse", self.shape(a), self.shape(b))?;
        let len = self.value(a).len();
        if len == 0 {
            return Err(TensorError::invalid("mse", "empty operands"));
        }
        let sum: f64 = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::scalar(sum / len as f64), Op::Mse(a, b), rg))
    }

    /// Mean softmax cross-entropy of `logits: (N, K)` against class indices.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (n, k) = self.value(logits).dims2()?;
        if labels.len() != n || n == 0 {
            return Err(TensorError::invalid(
                "cross_entropy",
                format!("{} labels for {n} rows", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(TensorError::Index { index: bad, len: k });
        }
        let zs = self.value(logits).data();
        let mut probs = vec![0.0; n * k];
        let mut loss = 0.0;
        for (ni, &label) in labels.iter().enumerate() {
            let row = &zs[ni * k..(ni + 1) * k];
            let lse = log_sum_exp(row);
            loss += lse - row[label];
            for (p, z) in probs[ni * k..(ni + 1) * k].iter_mut().zip(row) {
                *p = (z - lse).exp();
            }
        }
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss / n as f64),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// `T² · mean_n KL(softmax(teacher/T) ‖ softmax(student/T))`.
    pub fn soft_kl(&mut self, student: Var, teacher: Var, temperature: f64) -> Result<Var> {
        if !(temperature > 0.0) {
            return Err(TensorError::invalid(
                "soft_kl",
                format!("temperature must be positive, got {temperature}"),
            ));
        }
        ensure_same_shape("soft_kl", self.shape(student), self.shape(teacher))?;
        let (n, k) = self.value(student).dims2()?;
        if n == 0 {
            return Err(TensorError::invalid("soft_kl", "empty batch"));
        }
        let zs = self.value(student).data();
        let zt = self.value(teacher).data();
        let mut ps = vec![0.0; n * k];
        let mut pt = vec![0.0; n * k];
        let mut row_kl = vec![0.0; n];
        for ni in 0..n {
            let s: Vec<f64> = zs[ni * k..(ni + 1) * k].iter().map(|z| z / temperature).collect();
            let t: Vec<f64> = zt[ni * k..(ni + 1) * k].iter().map(|z| z / temperature).collect();
            let (ls, lt) = (log_sum_exp(&s), log_sum_exp(&t));
            let mut kl = 0.0;
            for j in 0..k {
                let log_ps = s[j] - ls;
                let log_pt = t[j] - lt;
                ps[ni * k + j] = log_ps.exp();
                pt[ni * k + j] = log_pt.exp();
                kl += pt[ni * k + j] * (log_pt - log_ps);
            }
            row_kl[ni] = kl;
        }
        let loss = temperature * temperature * row_kl.iter().sum::<f64>() / n as f64;
        let rg = self.any_grad(&[student, teacher]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftKl {
                student,
                teacher,
                temperature,
                ps,
                pt,
                row_kl,
            },
            rg,
        ))
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(TensorError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        let mut leaves: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.op.is_source() {
                leaves[idx] = Some(Tensor::new(node.value.shape(), g)?);
                continue;
            }
            self.backprop(node, &g, &mut grads);
        }
        let mut params: BTreeMap<ParamId, Tensor> = BTreeMap::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            if let (Op::Param(id), Some(g)) = (&node.op, &leaves[idx]) {
                match params.get_mut(id) {
                    Some(acc) => acc.axpy(1.0, g)?,
                    None => {
                        params.insert(*id, g.clone());
                    }
                }
            }
        }
        Ok(Gradients { leaves, params })
    }

    fn backprop(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        let mut acc = |v: Var, delta: Vec<f64>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => {
                    for (e, d) in existing.iter_mut().zip(&delta) {
                        *e += d;
                    }
                }
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Input | Op::Leaf | Op::Param(_) => unreachable!("sources handled by caller"),
            Op::Add(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.iter().map(|x| -x).collect());
            }
            Op::Mul(a, b) => {
                acc(*a, g.iter().zip(val(*b)).map(|(x, y)| x * y).collect());
                acc(*b, g.iter().zip(val(*a)).map(|(x, y)| x * y).collect());
            }
            Op::Scale(a, s) => acc(*a, g.iter().map(|x| x * s).collect()),
            Op::AddN(vars) => {
                for v in vars {
                    acc(*v, g.to_vec());
                }
            }
            Op::SumAll(a) => acc(*a, vec![g[0]; val(*a).len()]),
            Op::Relu(a) => {
                let out = node.value.data();
                acc(
                    *a,
                    g.iter()
                        .zip(out)
                        .map(|(x, &y)| if y > 0.0 { *x } else { 0.0 })
                        .collect(),
                );
            }
            Op::Sigmoid(a) => {
                let out = node.value.data();
                acc(*a, g.iter().zip(out).map(|(x, y)| x * y * (1.0 - y)).collect());
            }
            Op::Gate { x, gate } => {
                let shape = node.value.shape();
                let (n, c, plane) = (shape[0], shape[1], shape[2] * shape[3]);
                let xs = val(*x);
                let gs = val(*gate);
                let mut gx = vec![0.0; xs.len()];
                let mut gg = vec![0.0; gs.len()];
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * plane;
                        for p in 0..plane {
                            gx[base + p] = g[base + p] * gs[ni * plane + p];
                            gg[ni * plane + p] += g[base + p] * xs[base + p];
                        }
                    }
                }
                acc(*x, gx);
                acc(*gate, gg);
            }
            Op::Concat(vars) => {
                let shape = node.value.shape();
                let (n, total_c, plane) = (shape[0], shape[1], shape[2] * shape[3]);
                let mut offset = 0;
                for v in vars {
                    let c = self.nodes[v.0].value.shape()[1];
                    let mut part = Vec::with_capacity(n * c * plane);
                    for ni in 0..n {
                        let base = (ni * total_c + offset) * plane;
                        part.extend_from_slice(&g[base..base + c * plane]);
                    }
                    acc(*v, part);
                    offset += c;
                }
            }
            Op::SliceChannels { x, start } => {
                let in_shape = self.nodes[x.0].value.shape();
                let (n, c, plane) = (in_shape[0], in_shape[1], in_shape[2] * in_shape[3]);
                let len = node.value.shape()[1];
                let mut gx = vec![0.0; n * c * plane];
                for ni in 0..n {
                    let dst = (ni * c + start) * plane;
                    let src = ni * len * plane;
                    gx[dst..dst + len * plane].copy_from_slice(&g[src..src + len * plane]);
                }
                acc(*x, gx);
            }
            Op::ResizeNearest(x) => {
                let s = self.nodes[x.0].value.shape();
                let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
                let (oh, ow) = (node.value.shape()[2], node.value.shape()[3]);
                let mut gx = vec![0.0; nc * h * w];
                for i in 0..nc {
                    for oy in 0..oh {
                        let sy = kernels::nearest_source(oy, h, oh);
                        for ox in 0..ow {
                            let sx = kernels::nearest_source(ox, w, ow);
                            gx[i * h * w + sy * w + sx] += g[(i * oh + oy) * ow + ox];
                        }
                    }
                }
                acc(*x, gx);
            }
            Op::AdaptiveAvgPool(x) => {
                let s = self.nodes[x.0].value.shape();
                let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
                let (oh, ow) = (node.value.shape()[2], node.value.shape()[3]);
                let mut gx = vec![0.0; nc * h * w];
                for i in 0..nc {
                    for oy in 0..oh {
                        let (y0, y1) = kernels::adaptive_bin(oy, h, oh);
                        for ox in 0..ow {
                            let (x0, x1) = kernels::adaptive_bin(ox, w, ow);
                            let share = g[(i * oh + oy) * ow + ox] / ((y1 - y0) * (x1 - x0)) as f64;
                            for yy in y0..y1 {
                                for xx in x0..x1 {
                                    gx[i * h * w + yy * w + xx] += share;
                                }
                            }
                        }
                    }
                }
                acc(*x, gx);
            }
            Op::Reshape(x) => acc(*x, g.to_vec()),
            Op::Conv2d {
                x,
                weight,
                bias,
                geom,
                cols,
            } => {
                let (dx, dw, db) = kernels::conv_backward(g, val(*weight), cols, geom);
                acc(*x, dx);
                acc(*weight, dw);
                if let Some(b) = bias {
                    acc(*b, db);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                batch_stats,
                xhat,
                inv_std,
            } => {
                let shape = node.value.shape();
                let (n, c, plane) = (shape[0], shape[1], shape[2] * shape[3]);
                let count = (n * plane) as f64;
                let gam = val(*gamma);
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * plane;
                        for p in base..base + plane {
                            dgamma[ci] += g[p] * xhat[p];
                            dbeta[ci] += g[p];
                        }
                    }
                }
                let mut dx = vec![0.0; g.len()];
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * plane;
                        let k = gam[ci] * inv_std[ci];
                        for p in base..base + plane {
                            dx[p] = if *batch_stats {
                                k * (g[p] - dbeta[ci] / count - xhat[p] * dgamma[ci] / count)
                            } else {
                                k * g[p]
                            };
                        }
                    }
                }
                acc(*x, dx);
                acc(*gamma, dgamma);
                acc(*beta, dbeta);
            }
            Op::Linear { x, weight, bias } => {
                let (n, fout) = (node.value.shape()[0], node.value.shape()[1]);
                let fin = self.nodes[x.0].value.shape()[1];
                if self.nodes[x.0].requires_grad {
                    let mut gx = vec![0.0; n * fin];
                    kernels::gemm(n, fout, fin, g, false, val(*weight), false, &mut gx, false);
                    acc(*x, gx);
                }
                if self.nodes[weight.0].requires_grad {
                    let mut gw = vec![0.0; fout * fin];
                    kernels::gemm(fout, n, fin, g, true, val(*x), false, &mut gw, false);
                    acc(*weight, gw);
                }
                if let Some(b) = bias {
                    let mut gb = vec![0.0; fout];
                    for row in g.chunks(fout) {
                        for (o, v) in gb.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    acc(*b, gb);
                }
            }
            Op::Mse(a, b) => {
                let len = val(*a).len() as f64;
                let k = 2.0 * g[0] / len;
                let ga: Vec<f64> = val(*a)
                    .iter()
                    .zip(val(*b))
                    .map(|(x, y)| k * (x - y))
                    .collect();
                acc(*b, ga.iter().map(|v| -v).collect());
                acc(*a, ga);
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let n = labels.len();
                let k = probs.len() / n;
                let scale = g[0] / n as f64;
                let mut gl: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (ni, &label) in labels.iter().enumerate() {
                    gl[ni * k + label] -= scale;
                }
                acc(*logits, gl);
            }
            Op::SoftKl {
                student,
                teacher,
                temperature,
                ps,
                pt,
                row_kl,
            } => {
                let n = row_kl.len();
                let k = ps.len() / n;
                let scale = g[0] * temperature / n as f64;
                acc(
                    *student,
                    ps.iter().zip(pt).map(|(s, t)| scale * (s - t)).collect(),
                );
                if self.nodes[teacher.0].requires_grad {
                    let mut gt = vec![0.0; n * k];
                    for (ni, kl) in row_kl.iter().enumerate() {
                        for i in ni * k..(ni + 1) * k {
                            gt[i] = scale * pt[i] * (pt[i].ln() - ps[i].ln() - kl);
                        }
                    }
                    acc(*teacher, gt);
                }
            }
        }
    }
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|z| (z - m).exp()).sum::<f64>().ln()
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    leaves: Vec<Option<Tensor>>,
    params: BTreeMap<ParamId, Tensor>,
}

impl Gradients {
    /// Gradient of a leaf or parameter node. `None` when no gradient flowed.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.leaves.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of a stored parameter, summed over all its uses.
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id)
    }

    /// Parameters that received a gradient, in id order.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params.iter().map(|(k, v)| (*k, v))
    }
}
