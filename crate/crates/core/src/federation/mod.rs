//! Round engine for federated training of binary networks.
//!
//! Each round runs local training on every client, uploads from a random
//! subset of participants, aggregates on the server in client-id order, and
//! applies the strategy's download rule on every client. Layer amplitudes
//! `ϑ` are averaged and broadcast at full precision in every strategy;
//! batch-normalization parameters stay local.

mod engine;
mod ledger;

pub use engine::{ClientState, Federation, FederationConfig, RoundResult, ServerState};
pub use ledger::{ceil_log2, ledger_charge, Charge, CommLedger, LedgerRow, FLOAT_BITS};

use std::collections::HashMap;
use std::fmt;

use ndarray::{Array2, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::binary_net::{sign_value, Model};
use crate::error::{Error, Result};
use crate::mlpu::{count_positive, Estimator, Tally, VoteSign};

/// The exchange strategies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    /// Conventional federated averaging of a real-valued network.
    FaReal,
    /// Auxiliary weights up and down.
    Full,
    /// Binary weights up, real aggregate down, `β`-mixing of its sign.
    UpOnly,
    /// Binary weights up, sign of the aggregate down, `β`-mixing.
    UpDown,
    /// Binary weights up, real aggregate down, maximum-likelihood update.
    #[serde(rename = "biml")]
    BiMl,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 5] = [
        Self::FaReal,
        Self::Full,
        Self::UpOnly,
        Self::UpDown,
        Self::BiMl,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Self::FaReal => "FA-real",
            Self::Full => "BiFL-Full",
            Self::UpOnly => "BiFL-Bi-UpOnly",
            Self::UpDown => "BiFL-Bi-UpDown",
            Self::BiMl => "BiFL-BiML",
        }
    }

    /// The config and CSV name, e.g. `biml`.
    pub fn key(self) -> &'static str {
        match self {
            Self::FaReal => "fa_real",
            Self::Full => "full",
            Self::UpOnly => "up_only",
            Self::UpDown => "up_down",
            Self::BiMl => "biml",
        }
    }

    pub fn from_label(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.label() == s)
    }

    /// Whether clients upload `W^b` rather than `W̄`.
    pub fn uploads_binary(self) -> bool {
        matches!(self, Self::UpOnly | Self::UpDown | Self::BiMl)
    }

    /// Whether the forward pass uses binary weights.
    pub fn binary_forward(self) -> bool {
        self != Self::FaReal
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// A strategy and the hyperparameters it uses.
///
/// `beta` belongs to the mixing strategies only, `alpha` to BiML only, and
/// `hybrid_switch_round` (BiML for rounds `1..=T`, FA-real afterwards) to
/// BiML only.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrategyConfig {
    pub kind: StrategyKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hybrid_switch_round: Option<usize>,
}

impl StrategyConfig {
    pub fn fa_real() -> Self {
        Self::plain(StrategyKind::FaReal)
    }

    pub fn full() -> Self {
        Self::plain(StrategyKind::Full)
    }

    pub fn up_only(beta: f64) -> Self {
        Self {
            beta: Some(beta),
            ..Self::plain(StrategyKind::UpOnly)
        }
    }

    pub fn up_down(beta: f64) -> Self {
        Self {
            beta: Some(beta),
            ..Self::plain(StrategyKind::UpDown)
        }
    }

    pub fn biml(alpha: f64) -> Self {
        Self {
            alpha: Some(alpha),
            ..Self::plain(StrategyKind::BiMl)
        }
    }

    pub fn hybrid(alpha: f64, switch_round: usize) -> Self {
        Self {
            hybrid_switch_round: Some(switch_round),
            ..Self::biml(alpha)
        }
    }

    fn plain(kind: StrategyKind) -> Self {
        Self {
            kind,
            beta: None,
            alpha: None,
            hybrid_switch_round: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mixing = matches!(self.kind, StrategyKind::UpOnly | StrategyKind::UpDown);
        match (mixing, self.beta) {
            (true, None) => {
                return Err(Error::Config(format!(
                    "strategy.beta is required for {}",
                    self.kind
                )))
            }
            (false, Some(_)) => {
                return Err(Error::Config(format!(
                    "strategy.beta is not a parameter of {}",
                    self.kind
                )))
            }
            (true, Some(b)) if !(0.0..=1.0).contains(&b) => {
                return Err(Error::Config(format!(
                    "strategy.beta = {b} must lie in [0, 1]"
                )))
            }
            _ => {}
        }
        let biml = self.kind == StrategyKind::BiMl;
        match (biml, self.alpha) {
            (true, None) => {
                return Err(Error::Config(
                    "strategy.alpha is required for BiFL-BiML".into(),
                ))
            }
            (false, Some(_)) => {
                return Err(Error::Config(format!(
                    "strategy.alpha is not a parameter of {}",
                    self.kind
                )))
            }
            (true, Some(a)) if !(a.is_finite() && a > 1.0) => {
                return Err(Error::Config(format!(
                    "strategy.alpha = {a} must be finite and > 1"
                )))
            }
            _ => {}
        }
        match (biml, self.hybrid_switch_round) {
            (false, Some(_)) => Err(Error::Config(format!(
                "strategy.hybrid_switch_round applies to BiFL-BiML only, not {}",
                self.kind
            ))),
            (true, Some(0)) => Err(Error::Config(
                "strategy.hybrid_switch_round must be >= 1".into(),
            )),
            _ => Ok(()),
        }
    }

    /// The strategy in force during 1-based round `t`.
    pub fn kind_at(&self, t: usize) -> StrategyKind {
        hybrid_controller(t, self.hybrid_switch_round, self.kind)
    }
}

/// BiML for rounds `t <= T`, FA-real after; `base` when there is no switch.
pub fn hybrid_controller(t: usize, switch: Option<usize>, base: StrategyKind) -> StrategyKind {
    match switch {
        Some(big_t) if t > big_t => StrategyKind::FaReal,
        Some(_) => StrategyKind::BiMl,
        None => base,
    }
}

/// A uniformly random `⌊λM⌋`-subset of `0..m` without replacement, in
/// ascending order. `λ = 1` selects everyone without consuming randomness.
pub fn select_participants<R: Rng>(m: usize, lambda: f64, rng: &mut R) -> Result<Vec<usize>> {
    if !(lambda > 0.0 && lambda <= 1.0) {
        return Err(Error::Config(format!(
            "participation rate λ = {lambda} must lie in (0, 1]"
        )));
    }
    let k = (lambda * m as f64 + 1e-9).floor() as usize;
    if k == 0 {
        return Err(Error::Config(format!(
            "λ = {lambda} selects no client out of {m}"
        )));
    }
    if k >= m {
        return Ok((0..m).collect());
    }
    let mut v = rand::seq::index::sample(rng, m, k).into_vec();
    v.sort_unstable();
    Ok(v)
}

/// `Σ |D_i| x_i / Σ |D_i|`, accumulated in `f64` in the given order.
pub fn aggregate_weighted_mean(uploads: &[&Array2<f32>], sizes: &[usize]) -> Result<Array2<f64>> {
    if uploads.is_empty() || uploads.len() != sizes.len() {
        return Err(Error::Shape(format!(
            "{} uploads with {} sizes",
            uploads.len(),
            sizes.len()
        )));
    }
    if sizes.contains(&0) {
        return Err(Error::InvalidValue("every shard size must be >= 1".into()));
    }
    let shape = uploads[0].dim();
    let mut acc = Array2::<f64>::zeros(shape);
    for (u, &s) in uploads.iter().zip(sizes) {
        if u.dim() != shape {
            return Err(Error::Shape(format!(
                "upload {:?} does not match {:?}",
                u.dim(),
                shape
            )));
        }
        let s = s as f64;
        Zip::from(&mut acc)
            .and(*u)
            .for_each(|a, &x| *a += s * x as f64);
    }
    let total: f64 = sizes.iter().map(|&s| s as f64).sum();
    acc.mapv_inplace(|a| a / total);
    Ok(acc)
}

/// What the server broadcasts for the weights of each weighted layer.
#[derive(Clone, Debug, PartialEq)]
pub enum Aggregate {
    /// Real aggregate at 32-bit precision.
    Real(Vec<Array2<f32>>),
    /// Binary uploads from `voters` equal shards: the number of `+1` votes
    /// per parameter, i.e. its index on the `(voters + 1)`-point lattice.
    Lattice {
        voters: u32,
        counts: Vec<Array2<u32>>,
    },
    /// Only `Sign(W̃)`.
    Sign(Vec<Array2<f32>>),
}

impl Aggregate {
    pub fn num_layers(&self) -> usize {
        match self {
            Self::Real(v) | Self::Sign(v) => v.len(),
            Self::Lattice { counts, .. } => counts.len(),
        }
    }

    /// The real-valued aggregate of layer `l`.
    pub fn mean(&self, l: usize) -> Array2<f64> {
        match self {
            Self::Real(v) | Self::Sign(v) => v[l].mapv(f64::from),
            Self::Lattice { voters, counts } => {
                let m = *voters as f64;
                counts[l].mapv(|k| (2.0 * k as f64 - m) / m)
            }
        }
    }

    /// `Sign(W̃)` of layer `l`, with `Sign(0) = −1`.
    pub fn sign(&self, l: usize) -> Array2<f32> {
        match self {
            Self::Real(v) | Self::Sign(v) => v[l].mapv(sign_value),
            Self::Lattice { voters, counts } => {
                counts[l].mapv(|k| if 2 * k > *voters { 1.0 } else { -1.0 })
            }
        }
    }
}

fn check_layers<T>(model: &Model<f32>, layers: &[T]) -> Result<()> {
    if layers.len() != model.num_weight_layers() {
        return Err(Error::Shape(format!(
            "{} aggregated layers for a model with {} weighted layers",
            layers.len(),
            model.num_weight_layers()
        )));
    }
    Ok(())
}

/// Replaces every layer amplitude with the aggregated `ϑ̃`.
pub fn apply_amplitudes(model: &mut Model<f32>, amplitudes: &[f32]) -> Result<()> {
    check_layers(model, amplitudes)?;
    for (w, &a) in model.weight_layers_mut().zip(amplitudes) {
        w.set_amplitude(a)?;
    }
    model.touch();
    Ok(())
}

/// `W̄ ← W` and `ϑ ← ϑ̃`, then re-binarization.
pub fn update_full(
    model: &mut Model<f32>,
    weights: &[Array2<f32>],
    amplitudes: &[f32],
) -> Result<()> {
    check_layers(model, weights)?;
    for (w, agg) in model.weight_layers_mut().zip(weights) {
        w.set_aux(agg.clone())?;
    }
    apply_amplitudes(model, amplitudes)
}

/// `W̄ ← β·Sign(W̃) + (1 − β)·W̄`, then re-binarization.
pub fn update_mix(model: &mut Model<f32>, aggregate: &Aggregate, beta: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::Config(format!("β = {beta} must lie in [0, 1]")));
    }
    check_layers(model, &vec![(); aggregate.num_layers()])?;
    let b = beta as f32;
    for (l, w) in model.weight_layers_mut().enumerate() {
        let s = aggregate.sign(l);
        if s.dim() != w.shape() {
            return Err(Error::Shape(format!(
                "aggregate layer {l} shape {:?}",
                s.dim()
            )));
        }
        let mixed = if beta == 0.0 {
            w.aux().clone()
        } else if beta == 1.0 {
            s
        } else {
            let mut m = w.aux().clone();
            Zip::from(&mut m)
                .and(&s)
                .for_each(|a, &g| *a = b * g + (1.0 - b) * *a);
            m
        };
        w.set_aux(mixed)?;
    }
    model.touch();
    Ok(())
}

/// Moves `m_p` onto the feasible interval for the local vote when it lies
/// outside only by the rounding of a 32-bit broadcast.
fn snap_feasible(m: f64, m_p: f64, sign: VoteSign, own_vote: bool) -> f64 {
    let (lo, hi) = match (own_vote, sign) {
        (false, _) => (0.0, m),
        (true, VoteSign::Positive) => (1.0, m),
        (true, VoteSign::Negative) => (0.0, m - 1.0),
    };
    let slack = 4.0 * f32::EPSILON as f64 * m.max(1.0);
    if m_p < lo && m_p > lo - slack {
        lo
    } else if m_p > hi && m_p < hi + slack {
        hi
    } else {
        m_p
    }
}

/// `m_p` keys of a BiML table.
type RatioKey = (u64, VoteSign);

/// Shrink ratios `μ̂/w̄` for every tally one client can see in a round.
#[derive(Clone, Debug)]
pub struct RatioTable {
    m: f64,
    own_vote: bool,
    ratios: HashMap<RatioKey, f64>,
}

impl RatioTable {
    /// Solves every feasible tally implied by `aggregate` for a client
    /// with virtual count `m` whose own vote is (or is not) in the tally.
    pub fn build(
        estimator: &mut Estimator,
        aggregate: &Aggregate,
        m: f64,
        own_vote: bool,
    ) -> Result<Self> {
        let mut mps: Vec<f64> = Vec::new();
        match aggregate {
            Aggregate::Lattice { voters, .. } => {
                if (m - *voters as f64).abs() > 1e-9 {
                    return Err(Error::InvalidState(format!(
                        "lattice broadcast from {voters} equal shards but virtual M = {m}"
                    )));
                }
                mps.extend((0..=*voters).map(f64::from));
            }
            Aggregate::Real(layers) => {
                let mut seen = std::collections::HashSet::new();
                for layer in layers {
                    for &w in layer {
                        if seen.insert(w.to_bits()) {
                            mps.push(count_positive(w as f64, m)?);
                        }
                    }
                }
            }
            Aggregate::Sign(_) => {
                return Err(Error::Config(
                    "BiML needs the real-valued aggregate, not its sign".into(),
                ))
            }
        }
        let mut ratios = HashMap::with_capacity(2 * mps.len());
        for m_p in mps {
            for sign in [VoteSign::Positive, VoteSign::Negative] {
                // Tallies that cannot contain the local vote never occur for
                // an uploader and are left out.
                if let Ok(t) = Tally::new(m, snap_feasible(m, m_p, sign, own_vote), sign, own_vote)
                {
                    ratios.insert((m_p.to_bits(), sign), estimator.ratio(&t)?);
                }
            }
        }
        Ok(Self {
            m,
            own_vote,
            ratios,
        })
    }

    pub fn len(&self) -> usize {
        self.ratios.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ratios.is_empty()
    }

    fn ratio(&self, m_p: f64, sign: VoteSign) -> Result<f64> {
        self.ratios
            .get(&(m_p.to_bits(), sign))
            .copied()
            .ok_or_else(|| {
                Error::InvalidState(format!(
                    "tally (M = {}, M_P = {m_p}, {sign:?}, own vote {}) is infeasible",
                    self.m, self.own_vote
                ))
            })
    }

    /// `W̄ ← clip(α·μ̂)` for every parameter, then re-binarization.
    pub fn apply(&self, model: &mut Model<f32>, aggregate: &Aggregate, alpha: f64) -> Result<()> {
        check_layers(model, &vec![(); aggregate.num_layers()])?;
        for (l, w) in model.weight_layers_mut().enumerate() {
            let mut aux = w.aux().clone();
            match aggregate {
                Aggregate::Lattice { counts, .. } => {
                    for (a, &k) in aux.iter_mut().zip(&counts[l]) {
                        *a = self.scaled(*a, k as f64, alpha)?;
                    }
                }
                Aggregate::Real(layers) => {
                    for (a, &wt) in aux.iter_mut().zip(&layers[l]) {
                        *a = self.scaled(*a, count_positive(wt as f64, self.m)?, alpha)?;
                    }
                }
                Aggregate::Sign(_) => {
                    return Err(Error::Config("BiML needs the real-valued aggregate".into()))
                }
            }
            w.set_aux(aux)?;
        }
        model.touch();
        Ok(())
    }

    fn scaled(&self, w_bar: f32, m_p: f64, alpha: f64) -> Result<f32> {
        let w = w_bar as f64;
        let r = self.ratio(m_p, VoteSign::of(w))?;
        Ok((alpha * r * w).clamp(-1.0, 1.0) as f32)
    }
}

/// Maximum-likelihood update of one client's weights from the aggregate.
pub fn update_biml(
    model: &mut Model<f32>,
    aggregate: &Aggregate,
    m: f64,
    own_vote: bool,
    alpha: f64,
    estimator: &mut Estimator,
) -> Result<()> {
    RatioTable::build(estimator, aggregate, m, own_vote)?.apply(model, aggregate, alpha)
}
