//! Binary-weight networks with manual forward/backward passes.
//!
//! Every weighted layer keeps real-valued auxiliary weights `W̄` in `[-1, 1]`
//! alongside their sign `W^b`, plus a trainable per-layer amplitude `ϑ` that
//! scales the layer output. In [`ForwardMode::Binary`] the forward pass reads
//! only `W^b` and `ϑ`; gradients with respect to `W^b` are applied to `W̄`
//! unchanged (straight-through), after which `W̄` is clipped and re-binarized.

mod checkpoint;
mod layer;
mod model;
mod spec;
mod train;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use layer::{BatchNorm, BinaryLayer, LayerGrad, LayerParams, AMPLITUDE_FLOOR};
pub use model::{Batch, ForwardCache, ForwardMode, Gradients, InferenceModel, Model};
pub use spec::{LayerKind, LayerSpec, ModelBuilder};
pub use train::{
    finite_difference_check, GradCheckSample, GradParam, LrSchedule, OptimizerKind, TrainConfig,
};

use ndarray::Array;
use ndarray::{ArrayBase, Data, Dimension};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Sign of a single auxiliary weight: `+1` if strictly positive, `-1` otherwise.
#[inline]
pub fn sign_value<F: Real>(w: F) -> F {
    if w > F::zero() {
        F::one()
    } else {
        -F::one()
    }
}

/// Elementwise `Sign`: `+1` for positive entries, `-1` for everything else
/// (zero included).
pub fn sign_binarize<F, S, D>(w: &ArrayBase<S, D>) -> Result<Array<F, D>>
where
    F: Real,
    S: Data<Elem = F>,
    D: Dimension,
{
    ensure_finite(w, "sign_binarize")?;
    Ok(w.mapv(sign_value))
}

/// Elementwise clamp to `[-1, 1]`.
pub fn clip_unit<F, S, D>(w: &ArrayBase<S, D>) -> Result<Array<F, D>>
where
    F: Real,
    S: Data<Elem = F>,
    D: Dimension,
{
    ensure_finite(w, "clip_unit")?;
    Ok(w.mapv(clip_value))
}

#[inline]
pub(crate) fn clip_value<F: Real>(w: F) -> F {
    w.max(-F::one()).min(F::one())
}

fn ensure_finite<F, S, D>(w: &ArrayBase<S, D>, op: &str) -> Result<()>
where
    F: Real,
    S: Data<Elem = F>,
    D: Dimension,
{
    match w.iter().position(|x| !x.is_finite()) {
        None => Ok(()),
        Some(i) => Err(Error::InvalidValue(format!(
            "{op}: non-finite element at flat index {i}"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn sign_examples() {
        assert_eq!(
            sign_binarize(&array![0.3f64, -0.2]).unwrap(),
            array![1.0, -1.0]
        );
        assert_eq!(sign_binarize(&array![0.0f64]).unwrap(), array![-1.0]);
        assert_eq!(
            sign_binarize(&array![-1.0f64, 1.0, 1e-9]).unwrap(),
            array![-1.0, 1.0, 1.0]
        );
    }

    #[test]
    fn sign_rejects_nan() {
        let err = sign_binarize(&array![0.1f32, f32::NAN]).unwrap_err();
        assert!(matches!(err, Error::InvalidValue(_)));
    }

    #[test]
    fn clip_examples() {
        assert_eq!(
            clip_unit(&array![1.5f64, -2.0, 0.4]).unwrap(),
            array![1.0, -1.0, 0.4]
        );
        assert_eq!(clip_unit(&array![1.0f64, -1.0]).unwrap(), array![1.0, -1.0]);
        assert_eq!(clip_unit(&array![0.0f64]).unwrap(), array![0.0]);
        assert!(clip_unit(&array![f64::INFINITY]).is_err());
    }
}
