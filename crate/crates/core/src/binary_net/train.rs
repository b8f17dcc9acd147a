use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layer::{LayerGrad, LayerParams, AMPLITUDE_FLOOR};
use super::model::{Batch, Gradients, Model};
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Piecewise-constant learning rate keyed by 0-based epoch thresholds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<(usize, f64)>", into = "Vec<(usize, f64)>")]
pub struct LrSchedule {
    steps: Vec<(usize, f64)>,
}

impl LrSchedule {
    pub fn new(steps: Vec<(usize, f64)>) -> Result<Self> {
        if steps.is_empty() {
            return Err(Error::Config("learning-rate schedule is empty".into()));
        }
        if steps[0].0 != 0 {
            return Err(Error::Config(
                "learning-rate schedule must start at epoch 0".into(),
            ));
        }
        for w in steps.windows(2) {
            if w[1].0 <= w[0].0 {
                return Err(Error::Config(
                    "learning-rate schedule thresholds must be strictly increasing".into(),
                ));
            }
        }
        if let Some(&(e, lr)) = steps.iter().find(|(_, lr)| !(lr.is_finite() && *lr > 0.0)) {
            return Err(Error::Config(format!(
                "learning rate at epoch {e} must be positive, got {lr}"
            )));
        }
        Ok(Self { steps })
    }

    pub fn constant(lr: f64) -> Result<Self> {
        Self::new(vec![(0, lr)])
    }

    /// 0.005, decayed to 0.002 after 30 epochs and 0.001 after 60.
    pub fn mnist_default() -> Self {
        Self {
            steps: vec![(0, 0.005), (30, 0.002), (60, 0.001)],
        }
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.steps
            .iter()
            .rev()
            .find(|(e, _)| *e <= epoch)
            .map(|&(_, lr)| lr)
            .unwrap_or(self.steps[0].1)
    }

    pub fn steps(&self) -> &[(usize, f64)] {
        &self.steps
    }
}

impl TryFrom<Vec<(usize, f64)>> for LrSchedule {
    type Error = Error;
    fn try_from(steps: Vec<(usize, f64)>) -> Result<Self> {
        Self::new(steps)
    }
}

impl From<LrSchedule> for Vec<(usize, f64)> {
    fn from(s: LrSchedule) -> Self {
        s.steps
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam { beta1: f64, beta2: f64, eps: f64 },
    Sgd,
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Local training hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub schedule: LrSchedule,
    pub batch_size: usize,
    #[serde(default)]
    pub optimizer: OptimizerKind,
    pub rng_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            schedule: LrSchedule::mnist_default(),
            batch_size: 64,
            optimizer: OptimizerKind::default(),
            rng_seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be >= 1".into()));
        }
        if let OptimizerKind::Adam { beta1, beta2, eps } = self.optimizer {
            let unit = |b: f64| (0.0..1.0).contains(&b);
            if !unit(beta1) || !unit(beta2) || !(eps > 0.0) {
                return Err(Error::Config(format!(
                    "invalid Adam constants ({beta1}, {beta2}, {eps})"
                )));
            }
        }
        LrSchedule::new(self.schedule.steps.clone()).map(|_| ())
    }
}

struct AdamStep<F> {
    lr: F,
    b1: F,
    b2: F,
    eps: F,
    c1: F,
    c2: F,
}

impl<F: Real> AdamStep<F> {
    #[inline]
    fn apply(&self, p: &mut F, m: &mut F, v: &mut F, g: F) {
        *m = self.b1 * *m + (F::one() - self.b1) * g;
        *v = self.b2 * *v + (F::one() - self.b2) * g * g;
        let mhat = *m / self.c1;
        let vhat = *v / self.c2;
        *p = *p - self.lr * mhat / (vhat.sqrt() + self.eps);
    }
}

enum Stepper<F> {
    Adam(AdamStep<F>),
    Sgd(F),
}

impl<F: Real> Stepper<F> {
    #[inline]
    fn apply(&self, p: &mut F, m: &mut F, v: &mut F, g: F) {
        match self {
            Stepper::Adam(a) => a.apply(p, m, v, g),
            Stepper::Sgd(lr) => *p = *p - *lr * g,
        }
    }

    fn apply_array<D: ndarray::Dimension>(
        &self,
        p: &mut ndarray::Array<F, D>,
        m: &mut ndarray::Array<F, D>,
        v: &mut ndarray::Array<F, D>,
        g: &ndarray::Array<F, D>,
    ) {
        ndarray::Zip::from(p)
            .and(m)
            .and(v)
            .and(g)
            .for_each(|p, m, v, &g| self.apply(p, m, v, g));
    }
}

impl<F: Real> Model<F> {
    /// One descent step on the given gradients, followed by the clip of
    /// `W̄` into `[-1, 1]` and re-binarization.
    pub fn apply_gradients(
        &mut self,
        grads: &Gradients<F>,
        lr: f64,
        optimizer: &OptimizerKind,
    ) -> Result<()> {
        if !(lr.is_finite() && lr >= 0.0) {
            return Err(Error::InvalidValue(format!("learning rate {lr}")));
        }
        if grads.layers.len() != self.params.len() {
            return Err(Error::Shape("gradient list does not match model".into()));
        }
        self.step += 1;
        let stepper = match *optimizer {
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let t = self.step as i32;
                Stepper::Adam(AdamStep {
                    lr: F::lit(lr),
                    b1: F::lit(beta1),
                    b2: F::lit(beta2),
                    eps: F::lit(eps),
                    c1: F::lit(1.0 - beta1.powi(t)),
                    c2: F::lit(1.0 - beta2.powi(t)),
                })
            }
            OptimizerKind::Sgd => Stepper::Sgd(F::lit(lr)),
        };
        let floor = F::lit(AMPLITUDE_FLOOR);
        for (i, (p, g)) in self.params.iter_mut().zip(&grads.layers).enumerate() {
            match (p, g) {
                (LayerParams::Weight(w), LayerGrad::Weight { weights, amplitude }) => {
                    if weights.dim() != w.aux.dim() {
                        return Err(Error::Shape(format!("gradient shape of layer {i}")));
                    }
                    stepper.apply_array(&mut w.aux, &mut w.m_aux, &mut w.v_aux, weights);
                    stepper.apply(&mut w.amplitude, &mut w.m_amp, &mut w.v_amp, *amplitude);
                    if w.amplitude < floor {
                        w.amplitude = floor;
                    }
                    w.rebinarize();
                }
                (LayerParams::BatchNorm(bn), LayerGrad::BatchNorm { gamma, beta }) => {
                    stepper.apply_array(&mut bn.gamma, &mut bn.m_gamma, &mut bn.v_gamma, gamma);
                    stepper.apply_array(&mut bn.beta, &mut bn.m_beta, &mut bn.v_beta, beta);
                }
                (LayerParams::Weight(_), LayerGrad::None) => {
                    // Layers before the first one reached by backprop keep their state.
                }
                (LayerParams::None, LayerGrad::None)
                | (LayerParams::BatchNorm(_), LayerGrad::None) => {}
                _ => return Err(Error::Shape(format!("gradient kind of layer {i}"))),
            }
        }
        self.touch();
        Ok(())
    }

    /// Forward, backward, running-statistics update and one optimizer step.
    pub fn train_step(
        &mut self,
        batch: &Batch<F>,
        lr: f64,
        optimizer: &OptimizerKind,
    ) -> Result<F> {
        let (loss, cache) = self.forward(batch)?;
        let grads = self.backward(&cache, batch)?;
        self.absorb_batch_stats(&cache);
        self.apply_gradients(&grads, lr, optimizer)?;
        Ok(loss)
    }

    /// One pass over `(inputs, labels)` in a shuffled order drawn from the
    /// model's RNG, with mini-batches of `cfg.batch_size` (the last one may
    /// be smaller). Returns the mean training loss over batches.
    pub fn train_epoch(
        &mut self,
        inputs: ArrayView2<'_, F>,
        labels: &[usize],
        epoch: usize,
        cfg: &TrainConfig,
    ) -> Result<f64> {
        if inputs.nrows() != labels.len() {
            return Err(Error::Shape(format!(
                "{} input rows but {} labels",
                inputs.nrows(),
                labels.len()
            )));
        }
        if labels.is_empty() {
            return Err(Error::Shape("empty training shard".into()));
        }
        if cfg.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        let lr = cfg.schedule.lr_at(epoch);
        let mut order: Vec<usize> = (0..labels.len()).collect();
        order.shuffle(&mut self.rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let x = inputs.select(Axis(0), chunk);
            let y = chunk.iter().map(|&i| labels[i]).collect();
            let batch = Batch::new(x, y)?;
            total += self.train_step(&batch, lr, &cfg.optimizer)?.as_f64();
            batches += 1;
        }
        Ok(total / batches as f64)
    }
}

/// Which scalar a finite-difference sample perturbed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradParam {
    /// Flat index into the forward-pass weights of a weighted layer.
    Weight(usize),
    Amplitude,
    Gamma(usize),
    Beta(usize),
}

/// One finite-difference comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckSample {
    pub layer: usize,
    pub param: GradParam,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradCheckSample {
    /// `|numeric − analytic| / max(1, |analytic|)`.
    pub fn relative_error(&self) -> f64 {
        (self.numeric - self.analytic).abs() / self.analytic.abs().max(1.0)
    }
}

/// Compares backward-pass gradients against central differences with step
/// `h` on `samples` randomly chosen scalars. Weights are perturbed as real
/// values in the tensor the forward pass reads, so in binary mode the check
/// runs on the real relaxation of `W^b`.
pub fn finite_difference_check(
    model: &Model<f64>,
    batch: &Batch<f64>,
    samples: usize,
    h: f64,
    seed: u64,
) -> Result<Vec<GradCheckSample>> {
    let (_, cache) = model.forward(batch)?;
    let grads = model.backward(&cache, batch)?;
    let mut candidates: Vec<(usize, GradParam)> = Vec::new();
    for (i, p) in model.params.iter().enumerate() {
        match p {
            LayerParams::Weight(w) => {
                candidates.extend((0..w.len()).map(|j| (i, GradParam::Weight(j))));
                candidates.push((i, GradParam::Amplitude));
            }
            LayerParams::BatchNorm(bn) => {
                candidates.extend((0..bn.features()).map(|j| (i, GradParam::Gamma(j))));
                candidates.extend((0..bn.features()).map(|j| (i, GradParam::Beta(j))));
            }
            LayerParams::None => {}
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(samples);
    let binary = model.mode() == super::ForwardMode::Binary;
    for _ in 0..samples {
        let (layer, param) = candidates[rng.random_range(0..candidates.len())];
        let analytic = match (&grads.layers[layer], param) {
            (LayerGrad::Weight { weights, .. }, GradParam::Weight(j)) => {
                weights.as_slice().expect("standard layout")[j]
            }
            (LayerGrad::Weight { amplitude, .. }, GradParam::Amplitude) => *amplitude,
            (LayerGrad::BatchNorm { gamma, .. }, GradParam::Gamma(j)) => gamma[j],
            (LayerGrad::BatchNorm { beta, .. }, GradParam::Beta(j)) => beta[j],
            _ => 0.0,
        };
        let eval = |delta: f64| -> Result<f64> {
            let mut m = model.clone();
            let binarized = m.specs[layer].binarized;
            match (&mut m.params[layer], param) {
                (LayerParams::Weight(w), GradParam::Weight(j)) => {
                    let t: &mut Array2<f64> = if binary && binarized {
                        &mut w.bin
                    } else {
                        &mut w.aux
                    };
                    t.as_slice_mut().expect("standard layout")[j] += delta;
                }
                (LayerParams::Weight(w), GradParam::Amplitude) => w.amplitude += delta,
                (LayerParams::BatchNorm(bn), GradParam::Gamma(j)) => nudge(&mut bn.gamma, j, delta),
                (LayerParams::BatchNorm(bn), GradParam::Beta(j)) => nudge(&mut bn.beta, j, delta),
                _ => unreachable!(),
            }
            Ok(m.forward(batch)?.0)
        };
        let numeric = (eval(h)? - eval(-h)?) / (2.0 * h);
        out.push(GradCheckSample {
            layer,
            param,
            analytic,
            numeric,
        });
    }
    Ok(out)
}

fn nudge(a: &mut Array1<f64>, j: usize, delta: f64) {
    a[j] += delta;
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::binary_net::{ForwardMode, ModelBuilder};
    use ndarray::array;

    fn toy_batch(n: usize, dim: usize, classes: usize, seed: u64) -> Batch<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Array2::from_shape_simple_fn((n, dim), || rng.random_range(-1.0..1.0));
        let y = (0..n).map(|_| rng.random_range(0..classes)).collect();
        Batch::new(x, y).unwrap()
    }

    #[test]
    fn schedule_lookup() {
        let s = LrSchedule::mnist_default();
        assert_eq!(s.lr_at(0), 0.005);
        assert_eq!(s.lr_at(29), 0.005);
        assert_eq!(s.lr_at(30), 0.002);
        assert_eq!(s.lr_at(60), 0.001);
        assert_eq!(s.lr_at(500), 0.001);
        assert!(LrSchedule::new(vec![(1, 0.1)]).is_err());
        assert!(LrSchedule::new(vec![(0, 0.1), (0, 0.2)]).is_err());
        assert!(LrSchedule::constant(0.0).is_err());
    }

    #[test]
    fn schedule_toml_roundtrip() {
        let cfg = TrainConfig::default();
        let text = toml::to_string(&cfg).unwrap();
        let back: TrainConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn config_validation() {
        let mut cfg = TrainConfig::default();
        cfg.validate().unwrap();
        cfg.batch_size = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn sgd_step_arithmetic() {
        let mut model = ModelBuilder::new(&[1])
            .dense(1, true)
            .softmax()
            .build::<f64>(0)
            .unwrap();
        model.params_mut()[0]
            .as_weight_mut()
            .unwrap()
            .set_aux(array![[0.5]])
            .unwrap();
        let grads = Gradients {
            loss: 0.0,
            layers: vec![
                LayerGrad::Weight {
                    weights: array![[1.0]],
                    amplitude: 0.0,
                },
                LayerGrad::None,
            ],
        };
        model
            .apply_gradients(&grads, 0.1, &OptimizerKind::Sgd)
            .unwrap();
        let w = model.weight_layers().next().unwrap();
        assert!((w.aux()[[0, 0]] - 0.4).abs() < 1e-15);
        assert_eq!(w.bin()[[0, 0]], 1.0);
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        for opt in [OptimizerKind::Sgd, OptimizerKind::default()] {
            let mut model = ModelBuilder::new(&[6])
                .dense(5, true)
                .tanh()
                .dense(3, true)
                .softmax()
                .build::<f32>(4)
                .unwrap();
            let before: Vec<_> = model.weight_layers().cloned().collect();
            let batch = Batch::new(
                Array2::from_shape_fn((4, 6), |(i, j)| (i as f32 - j as f32) * 0.1),
                vec![0, 1, 2, 0],
            )
            .unwrap();
            model.train_step(&batch, 0.0, &opt).unwrap();
            for (a, b) in before.iter().zip(model.weight_layers()) {
                assert_eq!(a.aux(), b.aux());
                assert_eq!(a.bin(), b.bin());
                assert_eq!(a.amplitude().to_bits(), b.amplitude().to_bits());
            }
        }
    }

    #[test]
    fn invariants_hold_after_training_steps() {
        let mut model = ModelBuilder::desk_default().build::<f32>(8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Array2::from_shape_simple_fn((100, 784), || rng.random_range(0.0f32..1.0));
        let y: Vec<usize> = (0..100).map(|i| i % 10).collect();
        let cfg = TrainConfig {
            schedule: LrSchedule::constant(100.0).unwrap(),
            batch_size: 16,
            optimizer: OptimizerKind::Sgd,
            rng_seed: 0,
        };
        for epoch in 0..3 {
            model.train_epoch(x.view(), &y, epoch, &cfg).unwrap();
            model.check_invariants().unwrap();
        }
        assert!(model
            .weight_layers()
            .any(|w| w.aux().iter().any(|&a| a.abs() == 1.0)));
    }

    #[test]
    fn training_reduces_loss_on_separable_data() {
        let mut model = ModelBuilder::new(&[4])
            .dense(8, true)
            .batch_norm()
            .tanh()
            .dense(2, true)
            .softmax()
            .build::<f64>(2)
            .unwrap();
        let x = Array2::from_shape_fn((64, 4), |(i, j)| {
            let s = if i % 2 == 0 { 1.0 } else { -1.0 };
            s * (0.5 + 0.1 * j as f64)
        });
        let y: Vec<usize> = (0..64).map(|i| i % 2).collect();
        let cfg = TrainConfig {
            schedule: LrSchedule::constant(0.01).unwrap(),
            batch_size: 16,
            ..TrainConfig::default()
        };
        let (before, _) = model.evaluate(x.view(), &y).unwrap();
        for epoch in 0..30 {
            model.train_epoch(x.view(), &y, epoch, &cfg).unwrap();
        }
        let (after, acc) = model.evaluate(x.view(), &y).unwrap();
        assert!(after < before);
        assert!(acc > 0.9);
    }

    #[test]
    fn identical_seeds_give_identical_trajectories() {
        let run = || {
            let mut model = ModelBuilder::desk_default().build::<f32>(5).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let x = Array2::from_shape_simple_fn((40, 784), || rng.random_range(0.0f32..1.0));
            let y: Vec<usize> = (0..40).map(|i| i % 10).collect();
            let cfg = TrainConfig::default();
            model.train_epoch(x.view(), &y, 0, &cfg).unwrap();
            model.weight_layers().cloned().collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn gradients_match_finite_differences() {
        for mode in [ForwardMode::Binary, ForwardMode::Real] {
            let mut model = ModelBuilder::new(&[7])
                .dense(6, true)
                .batch_norm()
                .tanh()
                .dense(4, true)
                .softmax()
                .build::<f64>(21)
                .unwrap();
            model.set_mode(mode);
            let batch = toy_batch(9, 7, 4, 22);
            let samples = finite_difference_check(&model, &batch, 120, 1e-3, 23).unwrap();
            for s in &samples {
                assert!(s.relative_error() <= 1e-4, "{mode:?} {s:?}");
            }
        }
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let model = ModelBuilder::new(&[2, 6, 6])
            .conv2d(3, 3, true)
            .batch_norm()
            .tanh()
            .pool_down2()
            .dense(3, true)
            .softmax()
            .build::<f64>(31)
            .unwrap();
        let batch = toy_batch(5, 72, 3, 32);
        for s in finite_difference_check(&model, &batch, 150, 1e-3, 33).unwrap() {
            assert!(s.relative_error() <= 1e-4, "{s:?}");
        }
    }
}
