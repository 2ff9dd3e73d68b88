//! The four-block residual feature extractor and its classifier heads.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::layers::{apply_bn_updates, BnUpdate, ConvBnRelu, ConvLayerSpec, Mode, ResidualBlock, ResidualBlockSpec};
use super::params::{Bound, ParamKind, ParamStore};
use super::NnError;
use crate::tape::{Tape, Var};
use crate::tensor::{Element, Tensor};

/// Channel widths and topology of the feature extractor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ArchConfig {
    pub in_channels: usize,
    /// Output channels of the 3x3 stem convolution; `None` feeds the input
    /// straight into the first block.
    pub stem_channels: Option<usize>,
    /// Output channels of the four residual blocks.
    pub block_channels: [usize; 4],
    /// Stride of the first convolution in each block.
    pub block_strides: [usize; 4],
    pub pool: usize,
    pub post_add_relu: bool,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            in_channels: 1,
            stem_channels: Some(16),
            block_channels: [16, 32, 64, 128],
            block_strides: [1, 2, 2, 2],
            pool: 4,
            post_add_relu: false,
        }
    }
}

impl ArchConfig {
    /// Same topology with every width scaled from a base of `base` channels
    /// (`base, base, 2 base, 4 base, 8 base`).
    pub fn with_base_width(base: usize) -> Self {
        ArchConfig {
            stem_channels: Some(base),
            block_channels: [base, 2 * base, 4 * base, 8 * base],
            ..ArchConfig::default()
        }
    }

    pub fn block_specs(&self) -> [ResidualBlockSpec; 4] {
        let mut c_in = self.stem_channels.unwrap_or(self.in_channels);
        let mut specs = [ResidualBlockSpec::basic(1, 1, 1); 4];
        for (i, spec) in specs.iter_mut().enumerate() {
            *spec = ResidualBlockSpec::basic(c_in, self.block_channels[i], self.block_strides[i]);
            c_in = self.block_channels[i];
        }
        specs
    }

    pub fn stem_spec(&self) -> Option<ConvLayerSpec> {
        self.stem_channels.map(|c| ConvLayerSpec::new(self.in_channels, c, 3, 1, 1))
    }

    /// Spatial size entering the final pooling for an `h x w` input.
    pub fn pre_pool_size(&self, h: usize, w: usize) -> Result<(usize, usize), NnError> {
        let (mut h, mut w) = match self.stem_spec() {
            Some(s) => s.output_size(h, w)?,
            None => (h, w),
        };
        for spec in self.block_specs() {
            let (h1, w1) = spec.first.output_size(h, w)?;
            (h, w) = spec.second.output_size(h1, w1)?;
        }
        Ok((h, w))
    }

    /// Length of the flattened feature vector for an `h x w` input.
    pub fn feature_dim(&self, h: usize, w: usize) -> Result<usize, NnError> {
        let (ph, pw) = self.pre_pool_size(h, w)?;
        if ph < self.pool || pw < self.pool || self.pool == 0 {
            return Err(NnError::IncompatibleInput(format!(
                "{h}x{w} input reduces to {ph}x{pw}, smaller than the {0}x{0} pooling window",
                self.pool
            )));
        }
        Ok(self.block_channels[3] * (ph / self.pool) * (pw / self.pool))
    }
}

/// The shared feature extractor `F(.; theta)`.
#[derive(Clone, Debug)]
pub struct FeatureExtractor<T> {
    pub arch: ArchConfig,
    pub input_hw: (usize, usize),
    pub params: ParamStore<T>,
    stem: Option<ConvBnRelu>,
    blocks: Vec<ResidualBlock>,
    feature_dim: usize,
}

impl<T: Element> FeatureExtractor<T> {
    pub fn new(arch: ArchConfig, input_hw: (usize, usize), seed: u64) -> Result<Self, NnError> {
        let feature_dim = arch.feature_dim(input_hw.0, input_hw.1)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let stem = arch.stem_spec().map(|s| ConvBnRelu::new(&mut params, "stem", s, &mut rng));
        let blocks = arch
            .block_specs()
            .iter()
            .enumerate()
            .map(|(i, &spec)| ResidualBlock::new(&mut params, &format!("block{}", i + 1), spec, arch.post_add_relu, &mut rng))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(FeatureExtractor { arch, input_hw, params, stem, blocks, feature_dim })
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn blocks(&self) -> &[ResidualBlock] {
        &self.blocks
    }

    pub fn bind(&self, tape: &mut Tape<T>, track: bool) -> Bound {
        self.params.bind(tape, track)
    }

    /// Features `[n, d]` for an `[n, c, h, w]` batch.
    ///
    /// In [`Mode::Train`] the returned updates must be handed to
    /// [`FeatureExtractor::apply_updates`] to advance the running statistics.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        x: Var,
        mode: Mode,
    ) -> Result<(Var, Vec<BnUpdate<T>>), NnError> {
        let shape = tape.value(x).shape().to_vec();
        if shape.len() != 4 || shape[1] != self.arch.in_channels || (shape[2], shape[3]) != self.input_hw {
            return Err(NnError::IncompatibleInput(format!(
                "expected [n, {}, {}, {}], got {shape:?}",
                self.arch.in_channels, self.input_hw.0, self.input_hw.1
            )));
        }
        let mut updates = Vec::new();
        let mut h = x;
        if let Some(stem) = &self.stem {
            h = stem.forward(tape, &self.params, bound, h, mode, &mut updates)?;
        }
        for block in &self.blocks {
            h = block.forward(tape, &self.params, bound, h, mode, &mut updates)?;
        }
        let pooled = tape.avg_pool(h, self.arch.pool)?;
        let flat = tape.reshape(pooled, &[shape[0], self.feature_dim])?;
        Ok((flat, updates))
    }

    pub fn apply_updates(&mut self, updates: &[BnUpdate<T>]) {
        apply_bn_updates(&mut self.params, updates);
    }

    /// Eval-mode features of a batch, without gradient tracking.
    pub fn extract(&self, batch: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let x = tape.constant(batch.clone());
        let (f, _) = self.forward(&mut tape, &bound, x, Mode::Eval)?;
        Ok(tape.value(f).clone())
    }
}

/// Single fully-connected classification layer `o = W f + b`.
#[derive(Clone, Debug)]
pub struct ClassifierHead<T> {
    pub params: ParamStore<T>,
    in_dim: usize,
    out_dim: usize,
}

impl<T: Element> ClassifierHead<T> {
    /// Uniform `+-1/sqrt(d)` weights, zero bias.
    pub fn new(in_dim: usize, out_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (in_dim as f64).sqrt();
        let w = (0..in_dim * out_dim).map(|_| T::from_f64_lossy(rng.gen_range(-bound..bound))).collect();
        let mut params = ParamStore::new();
        params.add("weight", ParamKind::Trainable, Tensor::from_parts(vec![out_dim, in_dim], w));
        params.add("bias", ParamKind::Trainable, Tensor::zeros(&[out_dim]));
        ClassifierHead { params, in_dim, out_dim }
    }

    pub fn from_weights(weight: Tensor<T>, bias: Tensor<T>) -> Result<Self, NnError> {
        if weight.rank() != 2 || bias.shape() != [weight.shape()[0]] {
            return Err(NnError::InvalidSpec(format!(
                "head weight {:?} and bias {:?} disagree",
                weight.shape(),
                bias.shape()
            )));
        }
        let (out_dim, in_dim) = (weight.shape()[0], weight.shape()[1]);
        let mut params = ParamStore::new();
        params.add("weight", ParamKind::Trainable, weight);
        params.add("bias", ParamKind::Trainable, bias);
        Ok(ClassifierHead { params, in_dim, out_dim })
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn weight(&self) -> &Tensor<T> {
        self.params.get(super::params::ParamId(0))
    }

    pub fn bias(&self) -> &Tensor<T> {
        self.params.get(super::params::ParamId(1))
    }

    pub fn bind(&self, tape: &mut Tape<T>, track: bool) -> Bound {
        self.params.bind(tape, track)
    }

    /// Logits `[n, out_dim]` for features `[n, in_dim]`.
    pub fn forward(&self, tape: &mut Tape<T>, bound: &Bound, features: Var) -> Result<Var, NnError> {
        let shape = tape.value(features).shape();
        if shape.len() != 2 || shape[1] != self.in_dim {
            return Err(NnError::IncompatibleInput(format!(
                "head expects [n, {}] features, got {shape:?}",
                self.in_dim
            )));
        }
        let (w, b) = (bound.var(super::params::ParamId(0)), bound.var(super::params::ParamId(1)));
        Ok(tape.linear(features, w, b)?)
    }

    /// Logits without gradient tracking.
    pub fn classify(&self, features: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let f = tape.constant(features.clone());
        let o = self.forward(&mut tape, &bound, f)?;
        Ok(tape.value(o).clone())
    }
}

/// `G(F(.; theta); beta)`: an extractor with one attached head.
#[derive(Clone, Debug)]
pub struct Network<T> {
    pub extractor: FeatureExtractor<T>,
    pub head: ClassifierHead<T>,
}

impl<T: Element> Network<T> {
    pub fn new(extractor: FeatureExtractor<T>, head: ClassifierHead<T>) -> Result<Self, NnError> {
        if head.in_dim() != extractor.feature_dim() {
            return Err(NnError::InvalidSpec(format!(
                "head consumes {} features but the extractor emits {}",
                head.in_dim(),
                extractor.feature_dim()
            )));
        }
        Ok(Network { extractor, head })
    }

    /// Replaces the head, keeping the extractor parameters untouched.
    pub fn swap_head(self, head: ClassifierHead<T>) -> Result<(Self, ClassifierHead<T>), NnError> {
        let old = self.head;
        Ok((Network::new(self.extractor, head)?, old))
    }

    /// Eval-mode logits `[n, classes]`.
    pub fn logits(&self, batch: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        let f = self.extractor.extract(batch)?;
        self.head.classify(&f)
    }
}
