use ndarray::{Array1, Array2};
use rand::Rng;

use super::{clip_value, sign_value};
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Numerical floor for the layer amplitude, keeping `ϑ > 0` after any step.
pub const AMPLITUDE_FLOOR: f64 = 1e-6;

/// Trainable state of one dense or convolutional layer.
///
/// Weights are stored as `(fan_in, fan_out)` so a dense forward pass is
/// `x · W`. Adam moment accumulators live next to the parameters they track.
#[derive(Clone, Debug, PartialEq)]
pub struct BinaryLayer<F> {
    pub(crate) aux: Array2<F>,
    pub(crate) bin: Array2<F>,
    pub(crate) amplitude: F,
    pub(crate) m_aux: Array2<F>,
    pub(crate) v_aux: Array2<F>,
    pub(crate) m_amp: F,
    pub(crate) v_amp: F,
}

impl<F: Real> BinaryLayer<F> {
    pub(crate) fn init<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Self {
        let aux =
            Array2::from_shape_simple_fn((rows, cols), || F::lit(rng.random_range(-0.1..=0.1)));
        Self::from_aux(aux, F::one())
    }

    /// Builds a layer from clipped auxiliary weights and an amplitude.
    pub fn from_aux(aux: Array2<F>, amplitude: F) -> Self {
        let aux = aux.mapv(clip_value);
        let bin = aux.mapv(sign_value);
        let shape = aux.raw_dim();
        Self {
            aux,
            bin,
            amplitude,
            m_aux: Array2::zeros(shape),
            v_aux: Array2::zeros(shape),
            m_amp: F::zero(),
            v_amp: F::zero(),
        }
    }

    /// Auxiliary real weights `W̄`.
    pub fn aux(&self) -> &Array2<F> {
        &self.aux
    }

    /// Binary weights `W^b = Sign(W̄)`.
    pub fn bin(&self) -> &Array2<F> {
        &self.bin
    }

    /// Layer amplitude `ϑ`.
    pub fn amplitude(&self) -> F {
        self.amplitude
    }

    pub fn shape(&self) -> (usize, usize) {
        self.aux.dim()
    }

    pub fn len(&self) -> usize {
        self.aux.len()
    }

    pub fn is_empty(&self) -> bool {
        self.aux.is_empty()
    }

    /// Replaces `W̄` (clipped to `[-1, 1]`) and re-binarizes.
    pub fn set_aux(&mut self, aux: Array2<F>) -> Result<()> {
        if aux.dim() != self.aux.dim() {
            return Err(Error::Shape(format!(
                "auxiliary weights {:?} do not match layer {:?}",
                aux.dim(),
                self.aux.dim()
            )));
        }
        if let Some(i) = aux.iter().position(|x| !x.is_finite()) {
            return Err(Error::InvalidValue(format!(
                "non-finite auxiliary weight at flat index {i}"
            )));
        }
        self.aux = aux.mapv(clip_value);
        self.rebinarize();
        Ok(())
    }

    pub fn set_amplitude(&mut self, amplitude: F) -> Result<()> {
        if !(amplitude.is_finite() && amplitude > F::zero()) {
            return Err(Error::InvalidValue(format!(
                "layer amplitude must be finite and positive, got {amplitude}"
            )));
        }
        self.amplitude = amplitude;
        Ok(())
    }

    pub(crate) fn rebinarize(&mut self) {
        self.aux.mapv_inplace(clip_value);
        ndarray::Zip::from(&mut self.bin)
            .and(&self.aux)
            .for_each(|b, &a| *b = sign_value(a));
    }

    /// Checks `W̄ ∈ [-1, 1]`, `W^b = Sign(W̄)` and `ϑ > 0`.
    pub fn check_invariants(&self) -> Result<()> {
        for (i, (&a, &b)) in self.aux.iter().zip(self.bin.iter()).enumerate() {
            if !(a >= -F::one() && a <= F::one()) {
                return Err(Error::Assertion(format!(
                    "aux weight {i} = {a} outside [-1, 1]"
                )));
            }
            if b != sign_value(a) {
                return Err(Error::Assertion(format!(
                    "binary weight {i} = {b} is not Sign({a})"
                )));
            }
        }
        if !(self.amplitude > F::zero() && self.amplitude.is_finite()) {
            return Err(Error::Assertion(format!(
                "amplitude {} is not positive",
                self.amplitude
            )));
        }
        Ok(())
    }
}

/// Real-valued batch normalization with affine parameters and running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm<F> {
    pub(crate) gamma: Array1<F>,
    pub(crate) beta: Array1<F>,
    pub(crate) running_mean: Array1<F>,
    pub(crate) running_var: Array1<F>,
    pub(crate) m_gamma: Array1<F>,
    pub(crate) v_gamma: Array1<F>,
    pub(crate) m_beta: Array1<F>,
    pub(crate) v_beta: Array1<F>,
}

impl<F: Real> BatchNorm<F> {
    pub const EPS: f64 = 1e-5;
    pub const MOMENTUM: f64 = 0.1;

    pub fn new(features: usize) -> Self {
        Self {
            gamma: Array1::ones(features),
            beta: Array1::zeros(features),
            running_mean: Array1::zeros(features),
            running_var: Array1::ones(features),
            m_gamma: Array1::zeros(features),
            v_gamma: Array1::zeros(features),
            m_beta: Array1::zeros(features),
            v_beta: Array1::zeros(features),
        }
    }

    pub fn features(&self) -> usize {
        self.gamma.len()
    }

    pub fn gamma(&self) -> &Array1<F> {
        &self.gamma
    }

    pub fn beta(&self) -> &Array1<F> {
        &self.beta
    }

    pub fn running_mean(&self) -> &Array1<F> {
        &self.running_mean
    }

    pub fn running_var(&self) -> &Array1<F> {
        &self.running_var
    }

    pub(crate) fn update_running(&mut self, mean: &Array1<F>, var: &Array1<F>) {
        let mom = F::lit(Self::MOMENTUM);
        let keep = F::one() - mom;
        ndarray::Zip::from(&mut self.running_mean)
            .and(mean)
            .for_each(|r, &m| *r = keep * *r + mom * m);
        ndarray::Zip::from(&mut self.running_var)
            .and(var)
            .for_each(|r, &v| *r = keep * *r + mom * v);
    }
}

/// Parameters attached to one layer of a model.
#[derive(Clone, Debug, PartialEq)]
pub enum LayerParams<F> {
    Weight(BinaryLayer<F>),
    BatchNorm(BatchNorm<F>),
    None,
}

impl<F> LayerParams<F> {
    pub fn as_weight(&self) -> Option<&BinaryLayer<F>> {
        match self {
            LayerParams::Weight(w) => Some(w),
            _ => None,
        }
    }

    pub fn as_weight_mut(&mut self) -> Option<&mut BinaryLayer<F>> {
        match self {
            LayerParams::Weight(w) => Some(w),
            _ => None,
        }
    }
}

/// Gradient of the loss with respect to one layer's parameters.
#[derive(Clone, Debug, PartialEq)]
pub enum LayerGrad<F> {
    /// Gradient on the weights used in the forward pass (`W^b` in binary
    /// mode, `W̄` in real mode) and on `ϑ`.
    Weight {
        weights: Array2<F>,
        amplitude: F,
    },
    BatchNorm {
        gamma: Array1<F>,
        beta: Array1<F>,
    },
    None,
}
