//! Define-by-run reverse-mode autodiff.
//!
//! A [`Tape`] records every operation of one forward pass as a node holding
//! its output value and enough saved state to run its backward rule. Nodes are
//! appended after their inputs, so reverse insertion order is a valid
//! topological order and each node is visited exactly once by [`Tape::backward`].

use std::collections::BTreeMap;

use super::kernels::{self, ConvGeom};
use super::param::{ParamId, ParamStore};
use super::Tensor;
use crate::error::{Error, Result};

/// Additive guard applied to each norm in cosine similarity.
pub const COSINE_EPS: f64 = 1e-8;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlipAxis {
    /// Reverse the last (width) axis.
    Horizontal,
    /// Reverse the second-to-last (height) axis.
    Vertical,
}

#[derive(Clone, Debug, PartialEq)]
pub enum BatchNormMode {
    /// Normalize with batch statistics.
    Train,
    /// Normalize with the given running statistics.
    Eval { mean: Vec<f32>, var: Vec<f32> },
}

/// Batch statistics measured by a train-mode batch norm, for updating running averages.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f32>,
    pub var_unbiased: Vec<f32>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    ScalarMul(Var, f32),
    AddBias(Var, Var),
    MatMul(Var, Var),
    Conv2d { x: Var, w: Var, geom: ConvGeom, n: usize, cout: usize },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f32>, inv_std: Vec<f64>, train: bool },
    Relu(Var),
    Abs(Var),
    Max(Var, Var),
    MaxPool2d { x: Var, argmax: Vec<u32>, in_plane: usize, out_plane: usize },
    Bilinear { x: Var, factor: usize },
    NearestUpsample { x: Var, factor: usize },
    NearestResize,
    SpatialMean(Var),
    MaskedSpatialMean { x: Var, mask: Vec<f32>, counts: Vec<f64> },
    L2Norm(Var),
    Dot(Var, Var),
    Cosine(Var, Var),
    StopGradient,
    Flip { x: Var, axis: FlipAxis },
    Concat { inputs: Vec<Var>, axis: usize },
    Reshape(Var),
    Select { x: Var, indices: Vec<usize> },
    Sum(Var),
    Mean(Var),
    SoftmaxCrossEntropy { logits: Var, probs: Vec<f32>, labels: Vec<u8>, weights: Vec<f32>, norm: f64 },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    /// Unrounded value of scalar reductions.
    precise: Option<f64>,
}

/// Gradients produced by one backward pass.
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
    shapes: Vec<Vec<usize>>,
    requires: Vec<bool>,
    params: Vec<(ParamId, usize)>,
}

impl Gradients {
    /// Gradient of the loss with respect to a node. Nodes that require grad but
    /// received no signal (for example through a stop-gradient) report zeros.
    pub fn wrt(&self, v: Var) -> Option<Tensor> {
        match &self.grads[v.0] {
            Some(g) => Some(Tensor::new(self.shapes[v.0].clone(), g.clone()).expect("grad shape")),
            None if self.requires[v.0] => Some(Tensor::zeros(self.shapes[v.0].clone())),
            None => None,
        }
    }

    pub fn param(&self, id: ParamId) -> Option<&[f32]> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|&(_, node)| self.grads[node].as_deref())
    }

    /// Adds every parameter gradient into `store`'s `grad` slots.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for &(id, node) in &self.params {
            let shape = self.shapes[node].clone();
            let p = store.param_mut(id);
            let g = match &self.grads[node] {
                Some(g) => g.clone(),
                None => vec![0.0; p.value.numel()],
            };
            match p.grad.as_mut() {
                Some(existing) => existing.data_mut().iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                None => p.grad = Some(Tensor::new(shape, g).expect("grad shape")),
            }
        }
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: BTreeMap<ParamId, Var>,
    consumed: bool,
    validate: bool,
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// Splits `[n, c, rest...]` into `(n, c, prod(rest))`.
fn ncs(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::shape(op, format!("need at least 2 dims, got {shape:?}")));
    }
    Ok((shape[0], shape[1], shape[2..].iter().product()))
}

fn nchw(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(Error::shape(op, format!("expected NCHW, got {shape:?}"))),
    }
}

/// Interprets a tensor as rows of vectors: `[d]` is one row, `[n, d]` is `n` rows.
fn rows(op: &'static str, shape: &[usize]) -> Result<(usize, usize)> {
    match *shape {
        [d] => Ok((1, d)),
        [n, d] => Ok((n, d)),
        _ => Err(Error::shape(op, format!("expected 1-D or 2-D, got {shape:?}"))),
    }
}

fn accumulate(slot: &mut Option<Vec<f32>>, contrib: Vec<f32>) {
    match slot {
        Some(g) => g.iter_mut().zip(&contrib).for_each(|(a, b)| *a += b),
        None => *slot = Some(contrib),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape that rejects any op producing NaN or infinity.
    pub fn with_validation() -> Self {
        Self {
            validate: true,
            ..Self::default()
        }
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

    /// Value of a scalar node in `f64`. Sums, means and dot products keep
    /// their accumulator, as do scalar adds, subtractions and scalings of them.
    pub fn scalar_f64(&self, v: Var) -> Result<f64> {
        let node = &self.nodes[v.0];
        if !node.value.is_scalar() {
            return Err(Error::NotScalar(node.value.shape().to_vec()));
        }
        Ok(node.precise.unwrap_or(node.value.item() as f64))
    }

    /// Fingerprint of every branch taken by the piecewise-linear ops on this
    /// tape (relu/abs signs, max sides, pooling winners). Two forward passes
    /// with equal fingerprints ran in the same linear region.
    pub fn activation_pattern(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(_) => node.value.data().iter().for_each(|&v| (v > 0.0).hash(&mut h)),
                Op::Abs(a) => self.nodes[a.0].value.data().iter().for_each(|&v| (v >= 0.0).hash(&mut h)),
                Op::Max(a, b) => {
                    let (va, vb) = (self.nodes[a.0].value.data(), self.nodes[b.0].value.data());
                    va.iter().zip(vb).for_each(|(x, y)| (x >= y).hash(&mut h))
                }
                Op::MaxPool2d { argmax, .. } => argmax.hash(&mut h),
                _ => {}
            }
        }
        h.finish()
    }

    fn with_precise(&mut self, v: Result<Var>, precise: impl FnOnce(&Self) -> Option<f64>) -> Result<Var> {
        let v = v?;
        if self.nodes[v.0].value.is_scalar() {
            self.nodes[v.0].precise = precise(self);
        }
        Ok(v)
    }

    fn exact(&self, v: Var) -> f64 {
        self.scalar_f64(v).expect("scalar")
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        if self.validate && !value.all_finite() {
            return Err(Error::NonFiniteValue { op: op_name });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            precise: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            precise: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Loads a parameter onto the tape. Repeated loads of the same id return the
    /// same node, so shared weights accumulate one gradient.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.leaf(store.param(id).value.clone(), true);
        self.params.insert(id, v);
        v
    }

    fn zip_map(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(name, ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    fn map(&self, a: Var, f: impl Fn(f32) -> f32) -> Tensor {
        let t = self.value(a);
        Tensor::new(t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect()).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_map("add", a, b, |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        let out = self.push("add", v, Op::Add(a, b), rg);
        self.with_precise(out, |t| Some(t.exact(a) + t.exact(b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_map("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        let out = self.push("sub", v, Op::Sub(a, b), rg);
        self.with_precise(out, |t| Some(t.exact(a) - t.exact(b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_map("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        self.push("mul", v, Op::Mul(a, b), rg)
    }

    /// Elementwise maximum; ties route the gradient to `a`.
    pub fn max(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_map("max", a, b, f32::max)?;
        let rg = self.rg(&[a, b]);
        self.push("max", v, Op::Max(a, b), rg)
    }

    pub fn scalar_mul(&mut self, a: Var, s: f32) -> Result<Var> {
        let v = self.map(a, |x| x * s);
        let rg = self.rg(&[a]);
        let out = self.push("scalar_mul", v, Op::ScalarMul(a, s), rg);
        self.with_precise(out, |t| Some(t.exact(a) * s as f64))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let v = self.map(a, |x| x.max(0.0));
        let rg = self.rg(&[a]);
        self.push("relu", v, Op::Relu(a), rg)
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        let v = self.map(a, f32::abs);
        let rg = self.rg(&[a]);
        self.push("abs", v, Op::Abs(a), rg)
    }

    /// Adds `bias[c]` along axis 1 of an `[n, c, ...]` tensor.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (n, c, s) = ncs("add_bias", self.value(x).shape())?;
        if self.value(bias).shape() != [c] {
            return Err(Error::shape("add_bias", format!("bias {:?} for {c} channels", self.value(bias).shape())));
        }
        let b = self.value(bias).data();
        let mut data = self.value(x).data().to_vec();
        for i in 0..n {
            for (ch, &bv) in b.iter().enumerate() {
                data[(i * c + ch) * s..(i * c + ch + 1) * s].iter_mut().for_each(|v| *v += bv);
            }
        }
        let v = Tensor::new(self.value(x).shape().to_vec(), data)?;
        let rg = self.rg(&[x, bias]);
        self.push("add_bias", v, Op::AddBias(x, bias), rg)
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        let (m, k, n) = match (sa, sb) {
            ([m, k], [k2, n]) if k == k2 => (*m, *k, *n),
            _ => return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}"))),
        };
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, 0.0);
        let rg = self.rg(&[a, b]);
        self.push("matmul", Tensor::new([m, n], out)?, Op::MatMul(a, b), rg)
    }

    /// Cross-correlation of `[n, cin, h, w]` with `[cout, cin, kh, kw]`, no bias.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (n, cin, h, wd) = nchw("conv2d", self.value(x).shape())?;
        let (cout, wcin, kh, kw) = nchw("conv2d", self.value(w).shape())?;
        if wcin != cin {
            return Err(Error::shape("conv2d", format!("input has {cin} channels, kernel expects {wcin}")));
        }
        let geom = ConvGeom::new(cin, h, wd, kh, kw, stride, pad)
            .ok_or_else(|| Error::shape("conv2d", format!("kernel {kh}x{kw} stride {stride} pad {pad} on {h}x{wd}")))?;
        let out = kernels::conv2d_forward(&geom, n, cout, self.value(x).data(), self.value(w).data());
        let v = Tensor::new([n, cout, geom.ho, geom.wo], out)?;
        let rg = self.rg(&[x, w]);
        self.push("conv2d", v, Op::Conv2d { x, w, geom, n, cout }, rg)
    }

    /// Per-channel normalization over every axis except axis 1.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: &BatchNormMode,
        eps: f64,
    ) -> Result<(Var, Option<BatchStats>)> {
        let (n, c, s) = ncs("batch_norm", self.value(x).shape())?;
        for p in [gamma, beta] {
            if self.value(p).shape() != [c] {
                return Err(Error::shape("batch_norm", format!("affine {:?} for {c} channels", self.value(p).shape())));
            }
        }
        let xd = self.value(x).data();
        let count = (n * s) as f64;
        let (mean, var, stats) = match mode {
            BatchNormMode::Train => {
                let mut mean = vec![0.0f64; c];
                let mut var = vec![0.0f64; c];
                for ch in 0..c {
                    let mut sum = 0.0f64;
                    for i in 0..n {
                        sum += xd[(i * c + ch) * s..(i * c + ch + 1) * s].iter().map(|&v| v as f64).sum::<f64>();
                    }
                    let m = sum / count;
                    let mut sq = 0.0f64;
                    for i in 0..n {
                        sq += xd[(i * c + ch) * s..(i * c + ch + 1) * s]
                            .iter()
                            .map(|&v| (v as f64 - m) * (v as f64 - m))
                            .sum::<f64>();
                    }
                    mean[ch] = m;
                    var[ch] = sq / count;
                }
                let unbiased = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
                let stats = BatchStats {
                    mean: mean.iter().map(|&m| m as f32).collect(),
                    var_unbiased: var.iter().map(|&v| (v * unbiased) as f32).collect(),
                };
                (mean, var, Some(stats))
            }
            BatchNormMode::Eval { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::shape("batch_norm", "running stats length"));
                }
                (
                    mean.iter().map(|&m| m as f64).collect(),
                    var.iter().map(|&v| v as f64).collect(),
                    None,
                )
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0f32; xd.len()];
        let mut out = vec![0.0f32; xd.len()];
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * s;
                for j in base..base + s {
                    let h = ((xd[j] as f64 - mean[ch]) * inv_std[ch]) as f32;
                    xhat[j] = h;
                    out[j] = g[ch] * h + b[ch];
                }
            }
        }
        let v = Tensor::new(self.value(x).shape().to_vec(), out)?;
        let rg = self.rg(&[x, gamma, beta]);
        let train = matches!(mode, BatchNormMode::Train);
        let var_out = self.push(
            "batch_norm",
            v,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
            rg,
        )?;
        Ok((var_out, stats))
    }

    pub fn max_pool2d(&mut self, x: Var, kernel: usize, stride: usize, pad: usize) -> Result<Var> {
        let (n, c, h, w) = nchw("max_pool2d", self.value(x).shape())?;
        if kernel == 0 || stride == 0 || h + 2 * pad < kernel || w + 2 * pad < kernel || pad >= kernel {
            return Err(Error::shape("max_pool2d", format!("kernel {kernel} stride {stride} pad {pad} on {h}x{w}")));
        }
        let (out, argmax, ho, wo) = kernels::max_pool2d(self.value(x).data(), n * c, h, w, kernel, stride, pad);
        let v = Tensor::new([n, c, ho, wo], out)?;
        let rg = self.rg(&[x]);
        self.push(
            "max_pool2d",
            v,
            Op::MaxPool2d {
                x,
                argmax,
                in_plane: h * w,
                out_plane: ho * wo,
            },
            rg,
        )
    }

    /// Bilinear upsampling by an integer factor with half-pixel centres.
    pub fn bilinear_upsample(&mut self, x: Var, factor: usize) -> Result<Var> {
        let (n, c, h, w) = nchw("bilinear_upsample", self.value(x).shape())?;
        if factor == 0 {
            return Err(Error::shape("bilinear_upsample", "factor must be positive"));
        }
        let out = kernels::bilinear_upsample(self.value(x).data(), n * c, h, w, factor);
        let v = Tensor::new([n, c, h * factor, w * factor], out)?;
        let rg = self.rg(&[x]);
        self.push("bilinear_upsample", v, Op::Bilinear { x, factor }, rg)
    }

    /// Differentiable nearest-neighbour upsampling by an integer factor.
    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        let (n, c, h, w) = nchw("upsample_nearest", self.value(x).shape())?;
        if factor == 0 {
            return Err(Error::shape("upsample_nearest", "factor must be positive"));
        }
        let out = kernels::nearest_resize(self.value(x).data(), n * c, h, w, h * factor, w * factor);
        let v = Tensor::new([n, c, h * factor, w * factor], out)?;
        let rg = self.rg(&[x]);
        self.push("upsample_nearest", v, Op::NearestUpsample { x, factor }, rg)
    }

    /// Nearest-neighbour resize of the last two axes to `ho x wo`. Not differentiable.
    pub fn nearest_resize(&mut self, x: Var, ho: usize, wo: usize) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        if shape.len() < 2 || ho == 0 || wo == 0 {
            return Err(Error::shape("nearest_resize", format!("{shape:?} -> {ho}x{wo}")));
        }
        let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        let planes = shape[..shape.len() - 2].iter().product();
        let out = kernels::nearest_resize(self.value(x).data(), planes, h, w, ho, wo);
        let mut new_shape = shape[..shape.len() - 2].to_vec();
        new_shape.extend([ho, wo]);
        self.push("nearest_resize", Tensor::new(new_shape, out)?, Op::NearestResize, false)
    }

    /// Mean over the spatial axes of `[n, c, h, w]`, giving `[n, c]`.
    pub fn spatial_mean(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = nchw("spatial_mean", self.value(x).shape())?;
        let s = h * w;
        let xd = self.value(x).data();
        let out = (0..n * c)
            .map(|p| {
                let sum: f64 = xd[p * s..(p + 1) * s].iter().map(|&v| v as f64).sum();
                (sum / s as f64) as f32
            })
            .collect();
        let v = Tensor::new([n, c], out)?;
        let rg = self.rg(&[x]);
        self.push("spatial_mean", v, Op::SpatialMean(x), rg)
    }

    /// Mean over the pixels where `mask` (`[n, h, w]`, values in {0,1}) is 1.
    /// Rows whose mask is empty yield zeros.
    pub fn masked_spatial_mean(&mut self, x: Var, mask: &Tensor) -> Result<Var> {
        let (n, c, h, w) = nchw("masked_spatial_mean", self.value(x).shape())?;
        if mask.shape() != [n, h, w] {
            return Err(Error::shape(
                "masked_spatial_mean",
                format!("mask {:?} for features {:?}", mask.shape(), self.value(x).shape()),
            ));
        }
        if mask.data().iter().any(|&m| m != 0.0 && m != 1.0) {
            return Err(Error::NonBinaryMask);
        }
        let s = h * w;
        let md = mask.data();
        let counts: Vec<f64> = (0..n)
            .map(|i| md[i * s..(i + 1) * s].iter().filter(|&&m| m == 1.0).count() as f64)
            .collect();
        let xd = self.value(x).data();
        let mut out = vec![0.0f32; n * c];
        for i in 0..n {
            if counts[i] == 0.0 {
                continue;
            }
            let m = &md[i * s..(i + 1) * s];
            for ch in 0..c {
                let plane = &xd[(i * c + ch) * s..(i * c + ch + 1) * s];
                let sum: f64 = plane
                    .iter()
                    .zip(m)
                    .filter(|(_, &mv)| mv == 1.0)
                    .map(|(&v, _)| v as f64)
                    .sum();
                out[i * c + ch] = (sum / counts[i]) as f32;
            }
        }
        let v = Tensor::new([n, c], out)?;
        let rg = self.rg(&[x]);
        self.push(
            "masked_spatial_mean",
            v,
            Op::MaskedSpatialMean {
                x,
                mask: md.to_vec(),
                counts,
            },
            rg,
        )
    }

    /// Row-wise Euclidean norm: `[n, d] -> [n]`, `[d] -> [1]`.
    pub fn l2_norm(&mut self, x: Var) -> Result<Var> {
        let (n, d) = rows("l2_norm", self.value(x).shape())?;
        let xd = self.value(x).data();
        let out = (0..n)
            .map(|i| xd[i * d..(i + 1) * d].iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt() as f32)
            .collect();
        let rg = self.rg(&[x]);
        self.push("l2_norm", Tensor::new([n], out)?, Op::L2Norm(x), rg)
    }

    /// Full contraction of two same-shape tensors to a scalar.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("dot", self.value(a), self.value(b))?;
        let s: f64 = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x as f64 * y as f64)
            .sum();
        let rg = self.rg(&[a, b]);
        let out = self.push("dot", Tensor::scalar(s as f32), Op::Dot(a, b), rg);
        self.with_precise(out, |_| Some(s))
    }

    /// Row-wise cosine similarity `a.b / ((|a|+eps)(|b|+eps))`.
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("cosine_similarity", self.value(a), self.value(b))?;
        let (n, d) = rows("cosine_similarity", self.value(a).shape())?;
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let out = (0..n)
            .map(|i| cosine_row(&ad[i * d..(i + 1) * d], &bd[i * d..(i + 1) * d]).0 as f32)
            .collect();
        let rg = self.rg(&[a, b]);
        self.push("cosine_similarity", Tensor::new([n], out)?, Op::Cosine(a, b), rg)
    }

    /// Identity forward, zero gradient backward.
    pub fn stop_gradient(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).clone();
        self.push("stop_gradient", v, Op::StopGradient, false)
    }

    pub fn flip(&mut self, x: Var, axis: FlipAxis) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        if shape.len() < 2 {
            return Err(Error::shape("flip", format!("need at least 2 dims, got {shape:?}")));
        }
        let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        let planes = shape[..shape.len() - 2].iter().product();
        let out = kernels::flip_planes(self.value(x).data(), planes, h, w, axis == FlipAxis::Horizontal);
        let rg = self.rg(&[x]);
        self.push("flip", Tensor::new(shape, out)?, Op::Flip { x, axis }, rg)
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let base = self.value(*first).shape().to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", format!("axis {axis} for {base:?}")));
        }
        let mut total = 0;
        for v in inputs {
            let s = self.value(*v).shape();
            if s.len() != base.len() || s.iter().enumerate().any(|(i, &d)| i != axis && d != base[i]) {
                return Err(Error::shape("concat", format!("{base:?} vs {s:?} along {axis}")));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in inputs {
                let t = self.value(*v);
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = self.rg(inputs);
        self.push(
            "concat",
            Tensor::new(shape, data)?,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshaped(shape.to_vec())?;
        let rg = self.rg(&[x]);
        self.push("reshape", v, Op::Reshape(x), rg)
    }

    /// Gathers slices along axis 0; indices may repeat.
    pub fn select(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        let inner: usize = shape[1..].iter().product();
        if indices.is_empty() || indices.iter().any(|&i| i >= shape[0]) {
            return Err(Error::shape("select", format!("indices {indices:?} for {shape:?}")));
        }
        let xd = self.value(x).data();
        let mut data = Vec::with_capacity(indices.len() * inner);
        for &i in indices {
            data.extend_from_slice(&xd[i * inner..(i + 1) * inner]);
        }
        let mut out_shape = shape;
        out_shape[0] = indices.len();
        let rg = self.rg(&[x]);
        self.push(
            "select",
            Tensor::new(out_shape, data)?,
            Op::Select {
                x,
                indices: indices.to_vec(),
            },
            rg,
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: f64 = self.value(x).data().iter().map(|&v| v as f64).sum();
        let rg = self.rg(&[x]);
        let out = self.push("sum", Tensor::scalar(s as f32), Op::Sum(x), rg);
        self.with_precise(out, |_| Some(s))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s: f64 = t.data().iter().map(|&v| v as f64).sum::<f64>() / t.numel() as f64;
        let rg = self.rg(&[x]);
        let out = self.push("mean", Tensor::scalar(s as f32), Op::Mean(x), rg);
        self.with_precise(out, |_| Some(s))
    }

    /// Mean per-pixel cross-entropy of `[n, classes, h, w]` logits against
    /// integer labels `[n, h, w]`, optionally class-weighted (weighted mean).
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[u8], class_weights: Option<&[f32]>) -> Result<Var> {
        let (n, k, s) = ncs("softmax_cross_entropy", self.value(logits).shape())?;
        if labels.len() != n * s {
            return Err(Error::shape("softmax_cross_entropy", format!("{} labels for {n}x{s} pixels", labels.len())));
        }
        if labels.iter().any(|&l| l as usize >= k) {
            return Err(Error::shape("softmax_cross_entropy", "label out of range"));
        }
        let weights: Vec<f32> = match class_weights {
            Some(w) if w.len() == k => w.to_vec(),
            Some(w) => return Err(Error::shape("softmax_cross_entropy", format!("{} weights for {k} classes", w.len()))),
            None => vec![1.0; k],
        };
        let ld = self.value(logits).data();
        let mut probs = vec![0.0f32; ld.len()];
        let mut loss = 0.0f64;
        let mut norm = 0.0f64;
        for i in 0..n {
            for p in 0..s {
                let at = |c: usize| (i * k + c) * s + p;
                let mx = (0..k).map(|c| ld[at(c)]).fold(f32::NEG_INFINITY, f32::max) as f64;
                let z: f64 = (0..k).map(|c| (ld[at(c)] as f64 - mx).exp()).sum();
                for c in 0..k {
                    probs[at(c)] = ((ld[at(c)] as f64 - mx).exp() / z) as f32;
                }
                let y = labels[i * s + p] as usize;
                let wy = weights[y] as f64;
                loss += wy * (z.ln() - (ld[at(y)] as f64 - mx));
                norm += wy;
            }
        }
        let norm = if norm > 0.0 { norm } else { 1.0 };
        let rg = self.rg(&[logits]);
        self.push(
            "softmax_cross_entropy",
            Tensor::scalar((loss / norm) as f32),
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                labels: labels.to_vec(),
                weights,
                norm,
            },
            rg,
        )
    }

    /// Propagates d(loss)/d(node) to every node that requires grad. The tape can
    /// be differentiated once; a second call fails with [`Error::GraphConsumed`].
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::GraphConsumed);
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::NotScalar(self.value(loss).shape().to_vec()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f32>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backward_node(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients {
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            requires: self.nodes.iter().map(|n| n.requires_grad).collect(),
            params: self.params.iter().map(|(&p, &v)| (p, v.0)).collect(),
            grads,
        })
    }

    fn backward_node(&self, id: usize, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let node = &self.nodes[id];
        let val = |v: Var| self.nodes[v.0].value.data();
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let mut send = |v: Var, contrib: Vec<f32>| {
            if self.nodes[v.0].requires_grad {
                accumulate(&mut grads[v.0], contrib);
            }
        };
        match &node.op {
            Op::Leaf | Op::NearestResize | Op::StopGradient => {}
            Op::Add(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                if wants(*a) {
                    send(*a, g.iter().zip(bv).map(|(x, y)| x * y).collect());
                }
                if wants(*b) {
                    send(*b, g.iter().zip(av).map(|(x, y)| x * y).collect());
                }
            }
            Op::ScalarMul(a, s) => send(*a, g.iter().map(|v| v * s).collect()),
            Op::AddBias(x, bias) => {
                send(*x, g.to_vec());
                if wants(*bias) {
                    let (n, c, s) = ncs("add_bias", node.value.shape()).expect("checked");
                    let mut gb = vec![0.0f64; c];
                    for i in 0..n {
                        for (ch, acc) in gb.iter_mut().enumerate() {
                            *acc += g[(i * c + ch) * s..(i * c + ch + 1) * s].iter().map(|&v| v as f64).sum::<f64>();
                        }
                    }
                    send(*bias, gb.into_iter().map(|v| v as f32).collect());
                }
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.nodes[a.0].value.shape(), self.nodes[b.0].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if wants(*a) {
                    let mut ga = vec![0.0; m * k];
                    kernels::gemm(m, n, k, g, false, val(*b), true, &mut ga, 0.0);
                    send(*a, ga);
                }
                if wants(*b) {
                    let mut gb = vec![0.0; k * n];
                    kernels::gemm(k, m, n, val(*a), true, g, false, &mut gb, 0.0);
                    send(*b, gb);
                }
            }
            Op::Conv2d { x, w, geom, n, cout } => {
                let (dx, dw) =
                    kernels::conv2d_backward(geom, *n, *cout, val(*x), val(*w), g, wants(*x), wants(*w));
                if let Some(dx) = dx {
                    send(*x, dx);
                }
                if let Some(dw) = dw {
                    send(*w, dw);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let (n, c, s) = ncs("batch_norm", node.value.shape()).expect("checked");
                let gam = val(*gamma);
                let mut sum_g = vec![0.0f64; c];
                let mut sum_gx = vec![0.0f64; c];
                for i in 0..n {
                    for ch in 0..c {
                        let base = (i * c + ch) * s;
                        for j in base..base + s {
                            sum_g[ch] += g[j] as f64;
                            sum_gx[ch] += g[j] as f64 * xhat[j] as f64;
                        }
                    }
                }
                if wants(*x) {
                    let m = (n * s) as f64;
                    let mut dx = vec![0.0f32; g.len()];
                    for i in 0..n {
                        for ch in 0..c {
                            let base = (i * c + ch) * s;
                            let gk = gam[ch] as f64;
                            for j in base..base + s {
                                dx[j] = if *train {
                                    (gk * inv_std[ch] / m
                                        * (m * g[j] as f64 - sum_g[ch] - xhat[j] as f64 * sum_gx[ch]))
                                        as f32
                                } else {
                                    (g[j] as f64 * gk * inv_std[ch]) as f32
                                };
                            }
                        }
                    }
                    send(*x, dx);
                }
                send(*gamma, sum_gx.iter().map(|&v| v as f32).collect());
                send(*beta, sum_g.iter().map(|&v| v as f32).collect());
            }
            Op::Relu(a) => send(
                *a,
                g.iter()
                    .zip(node.value.data())
                    .map(|(&gv, &o)| if o > 0.0 { gv } else { 0.0 })
                    .collect(),
            ),
            Op::Abs(a) => send(
                *a,
                g.iter()
                    .zip(val(*a))
                    .map(|(&gv, &x)| {
                        if x > 0.0 {
                            gv
                        } else if x < 0.0 {
                            -gv
                        } else {
                            0.0
                        }
                    })
                    .collect(),
            ),
            Op::Max(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                send(*a, (0..g.len()).map(|i| if av[i] >= bv[i] { g[i] } else { 0.0 }).collect());
                send(*b, (0..g.len()).map(|i| if av[i] >= bv[i] { 0.0 } else { g[i] }).collect());
            }
            Op::MaxPool2d {
                x,
                argmax,
                in_plane,
                out_plane,
            } => {
                let mut dx = vec![0.0f32; self.nodes[x.0].value.numel()];
                for (o, (&gv, &a)) in g.iter().zip(argmax).enumerate() {
                    dx[(o / out_plane) * in_plane + a as usize] += gv;
                }
                send(*x, dx);
            }
            Op::Bilinear { x, factor } => {
                let (n, c, h, w) = nchw("bilinear_upsample", self.nodes[x.0].value.shape()).expect("checked");
                send(*x, kernels::bilinear_upsample_backward(g, n * c, h, w, *factor));
            }
            Op::NearestUpsample { x, factor } => {
                let (n, c, h, w) = nchw("upsample_nearest", self.nodes[x.0].value.shape()).expect("checked");
                let wo = w * factor;
                let mut dx = vec![0.0f32; n * c * h * w];
                for p in 0..n * c {
                    for oy in 0..h * factor {
                        for ox in 0..wo {
                            dx[p * h * w + (oy / factor) * w + ox / factor] += g[p * h * factor * wo + oy * wo + ox];
                        }
                    }
                }
                send(*x, dx);
            }
            Op::SpatialMean(x) => {
                let (_, _, h, w) = nchw("spatial_mean", self.nodes[x.0].value.shape()).expect("checked");
                let s = h * w;
                let mut dx = Vec::with_capacity(g.len() * s);
                for &gv in g {
                    let v = (gv as f64 / s as f64) as f32;
                    dx.extend(std::iter::repeat(v).take(s));
                }
                send(*x, dx);
            }
            Op::MaskedSpatialMean { x, mask, counts } => {
                let (n, c, h, w) = nchw("masked_spatial_mean", self.nodes[x.0].value.shape()).expect("checked");
                let s = h * w;
                let mut dx = vec![0.0f32; n * c * s];
                for i in 0..n {
                    if counts[i] == 0.0 {
                        continue;
                    }
                    let m = &mask[i * s..(i + 1) * s];
                    for ch in 0..c {
                        let v = (g[i * c + ch] as f64 / counts[i]) as f32;
                        let dst = &mut dx[(i * c + ch) * s..(i * c + ch + 1) * s];
                        for (d, &mv) in dst.iter_mut().zip(m) {
                            *d = v * mv;
                        }
                    }
                }
                send(*x, dx);
            }
            Op::L2Norm(x) => {
                let (n, d) = rows("l2_norm", self.nodes[x.0].value.shape()).expect("checked");
                let xv = val(*x);
                let norms = node.value.data();
                let mut dx = vec![0.0f32; n * d];
                for i in 0..n {
                    if norms[i] > 0.0 {
                        for j in 0..d {
                            dx[i * d + j] = (g[i] as f64 * xv[i * d + j] as f64 / norms[i] as f64) as f32;
                        }
                    }
                }
                send(*x, dx);
            }
            Op::Dot(a, b) => {
                let gv = g[0];
                if wants(*a) {
                    send(*a, val(*b).iter().map(|v| v * gv).collect());
                }
                if wants(*b) {
                    send(*b, val(*a).iter().map(|v| v * gv).collect());
                }
            }
            Op::Cosine(a, b) => {
                let (n, d) = rows("cosine_similarity", self.nodes[a.0].value.shape()).expect("checked");
                let (av, bv) = (val(*a), val(*b));
                let mut da = vec![0.0f32; n * d];
                let mut db = vec![0.0f32; n * d];
                for i in 0..n {
                    let (ar, br) = (&av[i * d..(i + 1) * d], &bv[i * d..(i + 1) * d]);
                    let (_, s, na0, nb0) = cosine_row(ar, br);
                    let (na, nb) = (na0 + COSINE_EPS, nb0 + COSINE_EPS);
                    let gi = g[i] as f64;
                    let inv = 1.0 / (na * nb);
                    let ca = if na0 > 0.0 { s / (na * na * nb * na0) } else { 0.0 };
                    let cb = if nb0 > 0.0 { s / (na * nb * nb * nb0) } else { 0.0 };
                    for j in 0..d {
                        let (x, y) = (ar[j] as f64, br[j] as f64);
                        da[i * d + j] = (gi * (y * inv - ca * x)) as f32;
                        db[i * d + j] = (gi * (x * inv - cb * y)) as f32;
                    }
                }
                send(*a, da);
                send(*b, db);
            }
            Op::Flip { x, axis } => {
                let shape = node.value.shape();
                let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
                let planes = shape[..shape.len() - 2].iter().product();
                send(*x, kernels::flip_planes(g, planes, h, w, *axis == FlipAxis::Horizontal));
            }
            Op::Concat { inputs, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let row = shape[*axis] * inner;
                let mut offset = 0;
                for v in inputs {
                    let chunk = self.nodes[v.0].value.shape()[*axis] * inner;
                    if wants(*v) {
                        let mut gi = Vec::with_capacity(outer * chunk);
                        for o in 0..outer {
                            gi.extend_from_slice(&g[o * row + offset..o * row + offset + chunk]);
                        }
                        send(*v, gi);
                    }
                    offset += chunk;
                }
            }
            Op::Reshape(x) => send(*x, g.to_vec()),
            Op::Select { x, indices } => {
                let xs = self.nodes[x.0].value.shape();
                let inner: usize = xs[1..].iter().product();
                let mut dx = vec![0.0f32; xs[0] * inner];
                for (r, &i) in indices.iter().enumerate() {
                    dx[i * inner..(i + 1) * inner]
                        .iter_mut()
                        .zip(&g[r * inner..(r + 1) * inner])
                        .for_each(|(d, s)| *d += s);
                }
                send(*x, dx);
            }
            Op::Sum(x) => send(*x, vec![g[0]; self.nodes[x.0].value.numel()]),
            Op::Mean(x) => {
                let n = self.nodes[x.0].value.numel();
                send(*x, vec![(g[0] as f64 / n as f64) as f32; n]);
            }
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                labels,
                weights,
                norm,
            } => {
                let (n, k, s) = ncs("softmax_cross_entropy", self.nodes[logits.0].value.shape()).expect("checked");
                let scale = g[0] as f64 / norm;
                let mut dl = vec![0.0f32; probs.len()];
                for i in 0..n {
                    for p in 0..s {
                        let y = labels[i * s + p] as usize;
                        let wy = weights[y] as f64 * scale;
                        for c in 0..k {
                            let at = (i * k + c) * s + p;
                            let onehot = if c == y { 1.0 } else { 0.0 };
                            dl[at] = ((probs[at] as f64 - onehot) * wy) as f32;
                        }
                    }
                }
                send(*logits, dl);
            }
        }
    }
}

/// Returns `(cosine, dot, |a|, |b|)` accumulated in 64-bit.
fn cosine_row(a: &[f32], b: &[f32]) -> (f64, f64, f64, f64) {
    let mut dot = 0.0f64;
    let mut na = 0.0f64;
    let mut nb = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    let (na, nb) = (na.sqrt(), nb.sqrt());
    (dot / ((na + COSINE_EPS) * (nb + COSINE_EPS)), dot, na, nb)
}
