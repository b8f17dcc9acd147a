use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layer::{BatchNorm, BinaryLayer, LayerParams};
use super::model::{ForwardMode, Model};
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Kind of a network layer together with its structural hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerKind {
    /// Fully connected, bias-free. Flattens its input.
    Dense {
        units: usize,
    },
    /// Valid 2-D convolution with stride 1 on `(channels, height, width)` input.
    Conv2d {
        filters: usize,
        kernel: usize,
    },
    /// Per-feature (or per-channel for 3-D inputs) batch normalization.
    BatchNorm,
    Tanh,
    /// Final softmax; paired with cross-entropy loss.
    Softmax,
    /// 2x2 max pooling with stride 2.
    PoolDown2,
}

impl LayerKind {
    pub fn has_weights(&self) -> bool {
        matches!(self, LayerKind::Dense { .. } | LayerKind::Conv2d { .. })
    }

    pub(crate) fn tag(&self) -> u8 {
        match self {
            LayerKind::Dense { .. } => 0,
            LayerKind::Conv2d { .. } => 1,
            LayerKind::BatchNorm => 2,
            LayerKind::Tanh => 3,
            LayerKind::Softmax => 4,
            LayerKind::PoolDown2 => 5,
        }
    }
}

/// A layer kind with resolved input/output dimensions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub input_dims: Vec<usize>,
    pub output_dims: Vec<usize>,
    pub binarized: bool,
}

impl LayerSpec {
    pub fn input_len(&self) -> usize {
        self.input_dims.iter().product()
    }

    pub fn output_len(&self) -> usize {
        self.output_dims.iter().product()
    }

    /// Shape `(fan_in, fan_out)` of the weight matrix, if the layer has one.
    pub fn weight_shape(&self) -> Option<(usize, usize)> {
        match self.kind {
            LayerKind::Dense { units } => Some((self.input_len(), units)),
            LayerKind::Conv2d { filters, kernel } => {
                Some((self.input_dims[0] * kernel * kernel, filters))
            }
            _ => None,
        }
    }

    /// Number of normalized features for a batch-norm layer.
    pub(crate) fn bn_features(&self) -> usize {
        if self.input_dims.len() == 3 {
            self.input_dims[0]
        } else {
            self.input_len()
        }
    }

    /// Checks that `output_dims` follow from `kind` and `input_dims`.
    pub fn validate(&self) -> Result<()> {
        let expected = infer_output(&self.kind, &self.input_dims)?;
        if expected != self.output_dims {
            return Err(Error::Shape(format!(
                "{:?}: output dims {:?} do not follow from input dims {:?} (expected {:?})",
                self.kind, self.output_dims, self.input_dims, expected
            )));
        }
        if self.binarized && !self.kind.has_weights() {
            return Err(Error::Config(format!(
                "{:?} layers cannot be binarized",
                self.kind
            )));
        }
        Ok(())
    }
}

pub(crate) fn infer_output(kind: &LayerKind, input: &[usize]) -> Result<Vec<usize>> {
    if input.is_empty() || input.contains(&0) {
        return Err(Error::Shape(format!("invalid input dims {input:?}")));
    }
    match *kind {
        LayerKind::Dense { units } => {
            if units == 0 {
                return Err(Error::Config("dense layer needs units >= 1".into()));
            }
            Ok(vec![units])
        }
        LayerKind::Conv2d { filters, kernel } => {
            if input.len() != 3 {
                return Err(Error::Shape(format!(
                    "conv2d expects (channels, height, width) input, got {input:?}"
                )));
            }
            if filters == 0 || kernel == 0 {
                return Err(Error::Config(
                    "conv2d needs filters >= 1 and kernel >= 1".into(),
                ));
            }
            if kernel > input[1] || kernel > input[2] {
                return Err(Error::Shape(format!(
                    "kernel {kernel} larger than spatial dims {input:?}"
                )));
            }
            Ok(vec![filters, input[1] - kernel + 1, input[2] - kernel + 1])
        }
        LayerKind::PoolDown2 => {
            if input.len() != 3 || input[1] < 2 || input[2] < 2 {
                return Err(Error::Shape(format!(
                    "pool_down2 expects (channels, height>=2, width>=2) input, got {input:?}"
                )));
            }
            Ok(vec![input[0], input[1] / 2, input[2] / 2])
        }
        LayerKind::Softmax => {
            if input.len() != 1 {
                return Err(Error::Shape(format!(
                    "softmax expects flat input, got {input:?}"
                )));
            }
            Ok(input.to_vec())
        }
        LayerKind::BatchNorm | LayerKind::Tanh => Ok(input.to_vec()),
    }
}

/// Fluent constructor for [`Model`]s with dimension inference.
#[derive(Clone, Debug)]
pub struct ModelBuilder {
    input_dims: Vec<usize>,
    layers: Vec<(LayerKind, bool)>,
}

impl ModelBuilder {
    pub fn new(input_dims: &[usize]) -> Self {
        Self {
            input_dims: input_dims.to_vec(),
            layers: Vec::new(),
        }
    }

    /// The default desk-scale network: binary dense 784->64, batch norm,
    /// tanh, binary dense 64->10, softmax.
    pub fn desk_default() -> Self {
        Self::new(&[784])
            .dense(64, true)
            .batch_norm()
            .tanh()
            .dense(10, true)
            .softmax()
    }

    pub fn layer(mut self, kind: LayerKind, binarized: bool) -> Self {
        self.layers.push((kind, binarized));
        self
    }

    pub fn dense(self, units: usize, binarized: bool) -> Self {
        self.layer(LayerKind::Dense { units }, binarized)
    }

    pub fn conv2d(self, filters: usize, kernel: usize, binarized: bool) -> Self {
        self.layer(LayerKind::Conv2d { filters, kernel }, binarized)
    }

    pub fn batch_norm(self) -> Self {
        self.layer(LayerKind::BatchNorm, false)
    }

    pub fn tanh(self) -> Self {
        self.layer(LayerKind::Tanh, false)
    }

    pub fn softmax(self) -> Self {
        self.layer(LayerKind::Softmax, false)
    }

    pub fn pool_down2(self) -> Self {
        self.layer(LayerKind::PoolDown2, false)
    }

    /// Resolves dimensions for every layer.
    pub fn specs(&self) -> Result<Vec<LayerSpec>> {
        if self.layers.is_empty() {
            return Err(Error::Config("model has no layers".into()));
        }
        let mut dims = self.input_dims.clone();
        let mut specs = Vec::with_capacity(self.layers.len());
        for (i, &(kind, binarized)) in self.layers.iter().enumerate() {
            if kind == LayerKind::Softmax && i + 1 != self.layers.len() {
                return Err(Error::Config("softmax must be the final layer".into()));
            }
            let output_dims = infer_output(&kind, &dims)?;
            let spec = LayerSpec {
                kind,
                input_dims: dims,
                output_dims: output_dims.clone(),
                binarized,
            };
            spec.validate()?;
            specs.push(spec);
            dims = output_dims;
        }
        if specs.last().map(|s| s.kind) != Some(LayerKind::Softmax) {
            return Err(Error::Config(
                "the final layer must be softmax (cross-entropy loss)".into(),
            ));
        }
        Ok(specs)
    }

    /// Builds a model with `W̄ ~ U[-0.1, 0.1]` and `ϑ = 1`, seeded by `seed`.
    pub fn build<F: Real>(&self, seed: u64) -> Result<Model<F>> {
        let specs = self.specs()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = specs
            .iter()
            .map(|spec| match spec.kind {
                LayerKind::Dense { .. } | LayerKind::Conv2d { .. } => {
                    let (rows, cols) = spec.weight_shape().expect("weighted layer");
                    LayerParams::Weight(BinaryLayer::init(rows, cols, &mut rng))
                }
                LayerKind::BatchNorm => LayerParams::BatchNorm(BatchNorm::new(spec.bn_features())),
                _ => LayerParams::None,
            })
            .collect();
        Model::from_parts(specs, params, ForwardMode::Binary, rng)
    }
}
