//! Checks of the binarization geometry bounds.
//!
//! For an auxiliary point `W̄ ∈ [-1, 1]^N`, its binarization `W^b` and any
//! other binary point `V^b` differing from `W^b` in `K` coordinates, the
//! claimed bounds are
//! 1. `‖W^b − V^b‖ ≤ 2‖W̄ − V^b‖`;
//! 2. `∠(W^b − V^b, W̄ − V^b) ≤ arccos√(K/N)`.

use nalgebra::DVector;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Margins of both bounds; negative means violated.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeometryReport {
    pub k: usize,
    pub n: usize,
    /// `2‖W̄ − V^b‖ − ‖W^b − V^b‖`.
    pub margin_norm: f64,
    /// `arccos√(K/N) − ∠(W^b − V^b, W̄ − V^b)` in radians.
    pub margin_angle: f64,
    pub angle: f64,
}

impl GeometryReport {
    pub fn holds(&self) -> bool {
        self.margin_norm >= 0.0 && self.margin_angle >= 0.0
    }
}

/// Angle between two nonzero vectors, accurate near zero and `π`.
fn angle_between(u: &DVector<f64>, v: &DVector<f64>) -> f64 {
    let (a, b) = (u / u.norm(), v / v.norm());
    2.0 * (&a - &b).norm().atan2((&a + &b).norm())
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        -1.0
    }
}

/// Evaluates both bounds. `w_b` must be the binarization of `w_bar` and
/// `v_b` a different binary point.
pub fn check_geometry_lemma(
    w_bar: &DVector<f64>,
    w_b: &DVector<f64>,
    v_b: &DVector<f64>,
) -> Result<GeometryReport> {
    let n = w_bar.len();
    if w_b.len() != n || v_b.len() != n || n == 0 {
        return Err(Error::Shape(format!(
            "lengths {}, {}, {}",
            n,
            w_b.len(),
            v_b.len()
        )));
    }
    if w_bar.iter().any(|x| !(-1.0..=1.0).contains(x)) {
        return Err(Error::Range("W̄ must lie in [-1, 1]^N".into()));
    }
    if w_bar.iter().zip(w_b.iter()).any(|(&a, &b)| sign(a) != b) {
        return Err(Error::InvalidValue(
            "W^b is not the binarization of W̄".into(),
        ));
    }
    if v_b.iter().any(|&v| v != 1.0 && v != -1.0) {
        return Err(Error::InvalidValue("V^b must be binary".into()));
    }
    let k = w_b.iter().zip(v_b.iter()).filter(|(a, b)| a != b).count();
    if k == 0 {
        return Err(Error::InvalidValue("V^b must differ from W^b".into()));
    }
    let db = w_b - v_b;
    let da = w_bar - v_b;
    let angle = angle_between(&db, &da);
    Ok(GeometryReport {
        k,
        n,
        margin_norm: 2.0 * da.norm() - db.norm(),
        margin_angle: (k as f64 / n as f64).sqrt().acos() - angle,
        angle,
    })
}

/// Outcome of a random audit of both bounds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeometryAudit {
    pub samples: usize,
    pub n: usize,
    pub norm_violations: usize,
    pub angle_violations: usize,
    pub min_margin_norm: f64,
    pub min_margin_angle: f64,
    /// The sample with the most negative angle margin, if any was violated.
    pub worst_angle: Option<(Vec<f64>, Vec<f64>, GeometryReport)>,
}

/// Draws `W̄ ~ U[-1, 1]^N` and `V^b` uniform over binary points other than
/// `W^b`, `samples` times.
pub fn geometry_audit(n: usize, samples: usize, seed: u64) -> Result<GeometryAudit> {
    if n == 0 || samples == 0 {
        return Err(Error::Config(
            "geometry audit needs N >= 1 and samples >= 1".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut audit = GeometryAudit {
        samples,
        n,
        norm_violations: 0,
        angle_violations: 0,
        min_margin_norm: f64::INFINITY,
        min_margin_angle: f64::INFINITY,
        worst_angle: None,
    };
    for _ in 0..samples {
        let w_bar = DVector::from_fn(n, |_, _| rng.random_range(-1.0..=1.0));
        let w_b = w_bar.map(sign);
        let v_b = loop {
            let v = DVector::from_fn(n, |_, _| if rng.random_bool(0.5) { 1.0 } else { -1.0 });
            if v != w_b {
                break v;
            }
        };
        let r = check_geometry_lemma(&w_bar, &w_b, &v_b)?;
        audit.norm_violations += (r.margin_norm < 0.0) as usize;
        audit.angle_violations += (r.margin_angle < 0.0) as usize;
        audit.min_margin_norm = audit.min_margin_norm.min(r.margin_norm);
        if r.margin_angle < audit.min_margin_angle {
            audit.min_margin_angle = r.margin_angle;
            if r.margin_angle < 0.0 {
                audit.worst_angle = Some((w_bar.as_slice().to_vec(), v_b.as_slice().to_vec(), r));
            }
        }
    }
    Ok(audit)
}
