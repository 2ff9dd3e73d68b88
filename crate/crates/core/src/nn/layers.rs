//! Convolution, batch-norm and residual building blocks.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::params::{Bound, ParamId, ParamKind, ParamStore};
use super::NnError;
use crate::error::TensorError;
use crate::kernels::{self, ConvGeom};
use crate::tape::{BatchStats, BnStats, Tape, Var};
use crate::tensor::{lit, Element, Tensor};

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Whether batch-norm layers use batch statistics (and learn running ones)
/// or the frozen running statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvLayerSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: usize,
    pub padding: usize,
}

impl ConvLayerSpec {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        ConvLayerSpec { in_channels, out_channels, kernel: (kernel, kernel), stride, padding }
    }

    /// `floor((in + 2 pad - k) / stride) + 1` per axis, or an error when that
    /// would be empty.
    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize), NnError> {
        Ok(self.geom(h, w)?.out_hw())
    }

    pub fn geom(&self, h: usize, w: usize) -> Result<ConvGeom, NnError> {
        ConvGeom::new(self.in_channels, self.out_channels, self.kernel, self.stride, self.padding, (h, w))
            .map_err(|_| NnError::IncompatibleInput(format!("{h}x{w} input too small for {self:?}")))
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels, self.kernel.0, self.kernel.1]
    }
}

impl ConvGeom {
    fn out_hw(&self) -> (usize, usize) {
        (self.out_h(), self.out_w())
    }
}

fn check_conv_operands<T: Element>(
    input: &Tensor<T>,
    spec: &ConvLayerSpec,
    weights: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<ConvGeom, NnError> {
    let mismatch = || {
        NnError::from(TensorError::ShapeMismatch {
            op: "conv2d",
            shapes: vec![input.shape().to_vec(), weights.shape().to_vec(), spec.weight_shape().to_vec()],
        })
    };
    if input.rank() != 4 || input.shape()[1] != spec.in_channels || weights.shape() != spec.weight_shape() {
        return Err(mismatch());
    }
    if bias.is_some_and(|b| b.shape() != [spec.out_channels]) {
        return Err(mismatch());
    }
    spec.geom(input.shape()[2], input.shape()[3])
}

/// Differentiable convolution that validates operands against `spec`.
pub fn conv2d<T: Element>(
    tape: &mut Tape<T>,
    input: Var,
    spec: &ConvLayerSpec,
    weights: Var,
    bias: Option<Var>,
) -> Result<Var, NnError> {
    let b = bias.map(|b| tape.value(b).clone());
    check_conv_operands(tape.value(input), spec, tape.value(weights), b.as_ref())?;
    Ok(tape.conv2d(input, weights, bias, spec.stride, spec.padding)?)
}

/// Value-level direct-loop convolution, the oracle for [`conv2d`].
pub fn conv2d_naive<T: Element>(
    input: &Tensor<T>,
    spec: &ConvLayerSpec,
    weights: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<Tensor<T>, NnError> {
    let g = check_conv_operands(input, spec, weights, bias)?;
    let n = input.shape()[0];
    let data = kernels::conv2d_naive(n, &g, input.data(), weights.data(), bias.map(|b| b.data()))?;
    Ok(Tensor::new(&[n, g.out_c, g.out_h(), g.out_w()], data)?)
}

/// Running-statistics update produced by a training-mode forward pass.
#[derive(Clone, Debug)]
pub struct BnUpdate<T> {
    mean: ParamId,
    var: ParamId,
    stats: BatchStats<T>,
}

/// Folds batch statistics into running estimates:
/// `running = (1 - momentum) running + momentum batch`, using the unbiased
/// batch variance.
pub fn apply_bn_updates<T: Element>(store: &mut ParamStore<T>, updates: &[BnUpdate<T>]) {
    let m = lit::<T>(BN_MOMENTUM);
    let keep = T::one() - m;
    for u in updates {
        let count = u.stats.count;
        let unbias = if count > 1 { lit::<T>(count as f64 / (count - 1) as f64) } else { T::one() };
        for (r, &b) in store.get_mut(u.mean).data_mut().iter_mut().zip(&u.stats.mean) {
            *r = keep * *r + m * b;
        }
        for (r, &b) in store.get_mut(u.var).data_mut().iter_mut().zip(&u.stats.var) {
            *r = keep * *r + m * b * unbias;
        }
    }
}

/// Per-channel affine batch normalization with running statistics.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn new<T: Element>(store: &mut ParamStore<T>, prefix: &str, channels: usize) -> Self {
        BatchNorm {
            gamma: store.add(format!("{prefix}.gamma"), ParamKind::Trainable, Tensor::ones(&[channels])),
            beta: store.add(format!("{prefix}.beta"), ParamKind::Trainable, Tensor::zeros(&[channels])),
            running_mean: store.add(format!("{prefix}.running_mean"), ParamKind::Buffer, Tensor::zeros(&[channels])),
            running_var: store.add(format!("{prefix}.running_var"), ParamKind::Buffer, Tensor::ones(&[channels])),
        }
    }

    pub fn forward<T: Element>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        bound: &Bound,
        x: Var,
        mode: Mode,
        updates: &mut Vec<BnUpdate<T>>,
    ) -> Result<Var, NnError> {
        let eps = lit::<T>(BN_EPSILON);
        let (gamma, beta) = (bound.var(self.gamma), bound.var(self.beta));
        match mode {
            Mode::Train => {
                let (y, stats) = tape.batch_norm(x, gamma, beta, BnStats::Batch { eps })?;
                let stats = stats.expect("batch statistics in train mode");
                updates.push(BnUpdate { mean: self.running_mean, var: self.running_var, stats });
                Ok(y)
            }
            Mode::Eval => {
                let stats = BnStats::Fixed {
                    mean: store.get(self.running_mean).data(),
                    var: store.get(self.running_var).data(),
                    eps,
                };
                Ok(tape.batch_norm(x, gamma, beta, stats)?.0)
            }
        }
    }
}

/// Kaiming-style fan-in scaled Gaussian.
fn kaiming<T: Element>(shape: &[usize], rng: &mut impl Rng) -> Tensor<T> {
    let fan_in: usize = shape[1..].iter().product();
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
    let n = shape.iter().product();
    Tensor::from_parts(shape.to_vec(), (0..n).map(|_| T::from_f64_lossy(normal.sample(rng))).collect())
}

/// A bare convolution with bias.
#[derive(Clone, Debug)]
pub struct Conv {
    pub spec: ConvLayerSpec,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Conv {
    pub fn new<T: Element>(store: &mut ParamStore<T>, prefix: &str, spec: ConvLayerSpec, rng: &mut impl Rng) -> Self {
        Conv {
            spec,
            weight: store.add(format!("{prefix}.weight"), ParamKind::Trainable, kaiming(&spec.weight_shape(), rng)),
            bias: store.add(format!("{prefix}.bias"), ParamKind::Trainable, Tensor::zeros(&[spec.out_channels])),
        }
    }

    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, bound: &Bound, x: Var) -> Result<Var, NnError> {
        conv2d(tape, x, &self.spec, bound.var(self.weight), Some(bound.var(self.bias)))
    }
}

/// Convolution, batch normalization, ReLU.
#[derive(Clone, Debug)]
pub struct ConvBnRelu {
    pub conv: Conv,
    pub bn: BatchNorm,
}

impl ConvBnRelu {
    pub fn new<T: Element>(store: &mut ParamStore<T>, prefix: &str, spec: ConvLayerSpec, rng: &mut impl Rng) -> Self {
        ConvBnRelu {
            conv: Conv::new(store, &format!("{prefix}.conv"), spec, rng),
            bn: BatchNorm::new(store, &format!("{prefix}.bn"), spec.out_channels),
        }
    }

    pub fn forward<T: Element>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        bound: &Bound,
        x: Var,
        mode: Mode,
        updates: &mut Vec<BnUpdate<T>>,
    ) -> Result<Var, NnError> {
        let c = self.conv.forward(tape, bound, x)?;
        let n = self.bn.forward(tape, store, bound, c, mode, updates)?;
        Ok(tape.relu(n)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ResidualBlockSpec {
    pub first: ConvLayerSpec,
    pub second: ConvLayerSpec,
    pub projection: Option<ConvLayerSpec>,
}

impl ResidualBlockSpec {
    /// Two 3x3 convolutions; the first carries the stride. A 1x1 projection
    /// is added exactly when the stride or channel count changes.
    pub fn basic(in_channels: usize, out_channels: usize, stride: usize) -> Self {
        let projection = (stride != 1 || in_channels != out_channels)
            .then(|| ConvLayerSpec::new(in_channels, out_channels, 1, stride, 0));
        ResidualBlockSpec {
            first: ConvLayerSpec::new(in_channels, out_channels, 3, stride, 1),
            second: ConvLayerSpec::new(out_channels, out_channels, 3, 1, 1),
            projection,
        }
    }

    pub fn validate(&self) -> Result<(), NnError> {
        let needs = self.first.stride != 1 || self.first.in_channels != self.second.out_channels;
        let chained = self.first.out_channels == self.second.in_channels;
        let proj_ok = match self.projection {
            Some(p) => {
                needs
                    && p.kernel == (1, 1)
                    && p.in_channels == self.first.in_channels
                    && p.out_channels == self.second.out_channels
                    && p.stride == self.first.stride
            }
            None => !needs,
        };
        if chained && proj_ok {
            Ok(())
        } else {
            Err(NnError::InvalidSpec(format!("inconsistent residual block {self:?}")))
        }
    }
}

/// `convlayer2(convlayer1(x)) + skip(x)`, optionally followed by ReLU.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    pub spec: ResidualBlockSpec,
    pub first: ConvBnRelu,
    pub second: ConvBnRelu,
    pub projection: Option<Conv>,
    pub post_add_relu: bool,
}

impl ResidualBlock {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        prefix: &str,
        spec: ResidualBlockSpec,
        post_add_relu: bool,
        rng: &mut impl Rng,
    ) -> Result<Self, NnError> {
        spec.validate()?;
        Ok(ResidualBlock {
            spec,
            first: ConvBnRelu::new(store, &format!("{prefix}.conv1"), spec.first, rng),
            second: ConvBnRelu::new(store, &format!("{prefix}.conv2"), spec.second, rng),
            projection: spec.projection.map(|p| Conv::new(store, &format!("{prefix}.proj"), p, rng)),
            post_add_relu,
        })
    }

    pub fn forward<T: Element>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        bound: &Bound,
        x: Var,
        mode: Mode,
        updates: &mut Vec<BnUpdate<T>>,
    ) -> Result<Var, NnError> {
        let h = self.first.forward(tape, store, bound, x, mode, updates)?;
        let h = self.second.forward(tape, store, bound, h, mode, updates)?;
        let skip = match &self.projection {
            Some(p) => p.forward(tape, bound, x)?,
            None => x,
        };
        let out = tape.add(h, skip)?;
        Ok(if self.post_add_relu { tape.relu(out)? } else { out })
    }

    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize), NnError> {
        let (h, w) = self.spec.first.output_size(h, w)?;
        self.spec.second.output_size(h, w)
    }
}
