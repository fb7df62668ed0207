//! Name-addressed access to every tape operation.

use std::fmt;
use std::str::FromStr;

use super::tape::{BatchNormMode, FlipAxis, Tape, Var};
use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Add,
    Sub,
    Mul,
    ScalarMul,
    MatMul,
    Conv2d,
    BatchNorm,
    Relu,
    BilinearUpsample,
    NearestResize,
    SpatialMean,
    MaskedSpatialMean,
    L2Norm,
    Dot,
    CosineSimilarity,
    StopGradient,
    Flip,
    Concat,
    Max,
    Abs,
    AddBias,
    MaxPool2d,
    UpsampleNearest,
    Select,
    Reshape,
    Sum,
    Mean,
    SoftmaxCrossEntropy,
}

impl OpKind {
    pub const ALL: [OpKind; 28] = [
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::ScalarMul,
        OpKind::MatMul,
        OpKind::Conv2d,
        OpKind::BatchNorm,
        OpKind::Relu,
        OpKind::BilinearUpsample,
        OpKind::NearestResize,
        OpKind::SpatialMean,
        OpKind::MaskedSpatialMean,
        OpKind::L2Norm,
        OpKind::Dot,
        OpKind::CosineSimilarity,
        OpKind::StopGradient,
        OpKind::Flip,
        OpKind::Concat,
        OpKind::Max,
        OpKind::Abs,
        OpKind::AddBias,
        OpKind::MaxPool2d,
        OpKind::UpsampleNearest,
        OpKind::Select,
        OpKind::Reshape,
        OpKind::Sum,
        OpKind::Mean,
        OpKind::SoftmaxCrossEntropy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::ScalarMul => "scalar_mul",
            OpKind::MatMul => "matmul",
            OpKind::Conv2d => "conv2d",
            OpKind::BatchNorm => "batch_norm",
            OpKind::Relu => "relu",
            OpKind::BilinearUpsample => "bilinear_upsample",
            OpKind::NearestResize => "nearest_resize",
            OpKind::SpatialMean => "spatial_mean",
            OpKind::MaskedSpatialMean => "masked_spatial_mean",
            OpKind::L2Norm => "l2_norm",
            OpKind::Dot => "dot",
            OpKind::CosineSimilarity => "cosine_similarity",
            OpKind::StopGradient => "stop_gradient",
            OpKind::Flip => "flip",
            OpKind::Concat => "concat",
            OpKind::Max => "max",
            OpKind::Abs => "abs",
            OpKind::AddBias => "add_bias",
            OpKind::MaxPool2d => "max_pool2d",
            OpKind::UpsampleNearest => "upsample_nearest",
            OpKind::Select => "select",
            OpKind::Reshape => "reshape",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::SoftmaxCrossEntropy => "softmax_cross_entropy",
        }
    }

    /// Ops whose backward rule passes gradient to their inputs.
    pub fn is_differentiable(self) -> bool {
        !matches!(self, OpKind::NearestResize | OpKind::StopGradient)
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        OpKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::UnknownOpKind(s.to_string()))
    }
}

/// Attributes consumed by [`Tape::forward_op`]; each kind reads only its own fields.
#[derive(Clone, Debug)]
pub struct OpAttrs {
    pub stride: usize,
    pub padding: usize,
    pub kernel: usize,
    pub factor: usize,
    pub scalar: f32,
    pub axis: usize,
    pub flip: FlipAxis,
    pub bn_mode: BatchNormMode,
    pub bn_eps: f64,
    pub mask: Option<Tensor>,
    pub size: (usize, usize),
    pub indices: Vec<usize>,
    pub shape: Vec<usize>,
    pub labels: Vec<u8>,
    pub class_weights: Option<Vec<f32>>,
}

impl Default for OpAttrs {
    fn default() -> Self {
        Self {
            stride: 1,
            padding: 0,
            kernel: 2,
            factor: 2,
            scalar: 1.0,
            axis: 0,
            flip: FlipAxis::Horizontal,
            bn_mode: BatchNormMode::Train,
            bn_eps: 1e-5,
            mask: None,
            size: (1, 1),
            indices: Vec::new(),
            shape: Vec::new(),
            labels: Vec::new(),
            class_weights: None,
        }
    }
}

impl Tape {
    /// Applies `kind` to `inputs`. Variadic kinds (concat) take any number of
    /// inputs; every other kind checks its arity.
    pub fn forward_op(&mut self, kind: OpKind, inputs: &[Var], attrs: &OpAttrs) -> Result<Var> {
        let arity = match kind {
            OpKind::Concat => inputs.len().max(1),
            OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::MatMul | OpKind::Conv2d => 2,
            OpKind::Dot | OpKind::CosineSimilarity | OpKind::Max | OpKind::AddBias => 2,
            OpKind::BatchNorm => 3,
            _ => 1,
        };
        if inputs.len() != arity {
            return Err(Error::shape(
                "forward_op",
                format!("{kind} takes {arity} inputs, got {}", inputs.len()),
            ));
        }
        let i = inputs;
        match kind {
            OpKind::Add => self.add(i[0], i[1]),
            OpKind::Sub => self.sub(i[0], i[1]),
            OpKind::Mul => self.mul(i[0], i[1]),
            OpKind::ScalarMul => self.scalar_mul(i[0], attrs.scalar),
            OpKind::MatMul => self.matmul(i[0], i[1]),
            OpKind::Conv2d => self.conv2d(i[0], i[1], attrs.stride, attrs.padding),
            OpKind::BatchNorm => Ok(self.batch_norm(i[0], i[1], i[2], &attrs.bn_mode, attrs.bn_eps)?.0),
            OpKind::Relu => self.relu(i[0]),
            OpKind::BilinearUpsample => self.bilinear_upsample(i[0], attrs.factor),
            OpKind::NearestResize => self.nearest_resize(i[0], attrs.size.0, attrs.size.1),
            OpKind::SpatialMean => self.spatial_mean(i[0]),
            OpKind::MaskedSpatialMean => {
                let mask = attrs
                    .mask
                    .as_ref()
                    .ok_or_else(|| Error::shape("masked_spatial_mean", "mask attribute missing"))?;
                self.masked_spatial_mean(i[0], mask)
            }
            OpKind::L2Norm => self.l2_norm(i[0]),
            OpKind::Dot => self.dot(i[0], i[1]),
            OpKind::CosineSimilarity => self.cosine_similarity(i[0], i[1]),
            OpKind::StopGradient => self.stop_gradient(i[0]),
            OpKind::Flip => self.flip(i[0], attrs.flip),
            OpKind::Concat => self.concat(i, attrs.axis),
            OpKind::Max => self.max(i[0], i[1]),
            OpKind::Abs => self.abs(i[0]),
            OpKind::AddBias => self.add_bias(i[0], i[1]),
            OpKind::MaxPool2d => self.max_pool2d(i[0], attrs.kernel, attrs.stride, attrs.padding),
            OpKind::UpsampleNearest => self.upsample_nearest(i[0], attrs.factor),
            OpKind::Select => self.select(i[0], &attrs.indices),
            OpKind::Reshape => self.reshape(i[0], &attrs.shape),
            OpKind::Sum => self.sum(i[0]),
            OpKind::Mean => self.mean(i[0]),
            OpKind::SoftmaxCrossEntropy => {
                self.softmax_cross_entropy(i[0], &attrs.labels, attrs.class_weights.as_deref())
            }
        }
    }
}
