use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layer::{BatchNorm, BinaryLayer, LayerGrad, LayerParams};
use super::spec::{LayerKind, LayerSpec};
use crate::error::{Error, Result};
use crate::scalar::Real;

static NEXT_MODEL_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_MODEL_ID.fetch_add(1, Ordering::Relaxed)
}

/// Which weights the forward pass reads for binarized layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForwardMode {
    /// Binarized layers compute with `W^b`.
    Binary,
    /// Every layer computes with its real weights `W̄`.
    Real,
}

/// A batch of flattened inputs with integer labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch<F> {
    pub inputs: Array2<F>,
    pub labels: Vec<usize>,
}

impl<F: Real> Batch<F> {
    pub fn new(inputs: Array2<F>, labels: Vec<usize>) -> Result<Self> {
        if inputs.nrows() != labels.len() {
            return Err(Error::Shape(format!(
                "{} input rows but {} labels",
                inputs.nrows(),
                labels.len()
            )));
        }
        Ok(Self { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Clone, Debug)]
enum LayerCache<F> {
    Dense {
        input: Array2<F>,
        pre: Array2<F>,
    },
    Conv {
        patches: Array2<F>,
        pre: Array2<F>,
    },
    BatchNorm {
        xhat: Array2<F>,
        inv_std: Array1<F>,
        mean: Array1<F>,
        var: Array1<F>,
    },
    Tanh {
        output: Array2<F>,
    },
    Pool {
        argmax: Vec<usize>,
    },
    Softmax {
        probs: Array2<F>,
    },
}

/// Activations recorded by [`Model::forward`] for a subsequent [`Model::backward`].
#[derive(Clone, Debug)]
pub struct ForwardCache<F> {
    model_id: u64,
    version: u64,
    batch_len: usize,
    layers: Vec<LayerCache<F>>,
}

impl<F: Real> ForwardCache<F> {
    /// Softmax output of the cached pass.
    pub fn probabilities(&self) -> &Array2<F> {
        match self.layers.last() {
            Some(LayerCache::Softmax { probs }) => probs,
            _ => unreachable!("models always end in softmax"),
        }
    }
}

/// Per-layer gradients of the mean batch loss.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<F> {
    pub loss: F,
    pub layers: Vec<LayerGrad<F>>,
}

/// Borrowed parameters consumed by the forward kernels.
enum LayerView<'a, F> {
    Weight {
        weights: ArrayView2<'a, F>,
        amplitude: F,
    },
    BatchNorm {
        gamma: ArrayView1<'a, F>,
        beta: ArrayView1<'a, F>,
        running_mean: ArrayView1<'a, F>,
        running_var: ArrayView1<'a, F>,
    },
    None,
}

/// A trainable network of [`LayerSpec`]s, ending in softmax with
/// cross-entropy loss.
#[derive(Debug)]
pub struct Model<F> {
    pub(crate) specs: Vec<LayerSpec>,
    pub(crate) params: Vec<LayerParams<F>>,
    pub(crate) mode: ForwardMode,
    pub(crate) step: u64,
    pub(crate) rng: ChaCha8Rng,
    id: u64,
    version: u64,
}

impl<F: Clone> Clone for Model<F> {
    fn clone(&self) -> Self {
        Self {
            specs: self.specs.clone(),
            params: self.params.clone(),
            mode: self.mode,
            step: self.step,
            rng: self.rng.clone(),
            id: fresh_id(),
            version: 0,
        }
    }
}

impl<F: Real> Model<F> {
    pub(crate) fn from_parts(
        specs: Vec<LayerSpec>,
        params: Vec<LayerParams<F>>,
        mode: ForwardMode,
        rng: ChaCha8Rng,
    ) -> Result<Self> {
        if specs.len() != params.len() {
            return Err(Error::Shape(format!(
                "{} layer specs but {} parameter sets",
                specs.len(),
                params.len()
            )));
        }
        for (i, (spec, p)) in specs.iter().zip(&params).enumerate() {
            spec.validate()?;
            if i > 0 && specs[i - 1].output_dims != spec.input_dims {
                return Err(Error::Shape(format!(
                    "layer {i} input {:?} does not match previous output {:?}",
                    spec.input_dims,
                    specs[i - 1].output_dims
                )));
            }
            let ok = match (spec.weight_shape(), p) {
                (Some(shape), LayerParams::Weight(w)) => w.shape() == shape,
                (None, LayerParams::BatchNorm(bn)) => {
                    spec.kind == LayerKind::BatchNorm && bn.features() == spec.bn_features()
                }
                (None, LayerParams::None) => spec.kind != LayerKind::BatchNorm,
                _ => false,
            };
            if !ok {
                return Err(Error::Shape(format!(
                    "parameters of layer {i} do not match {:?}",
                    spec.kind
                )));
            }
        }
        match specs.last() {
            Some(s) if s.kind == LayerKind::Softmax => {}
            _ => return Err(Error::Config("the final layer must be softmax".into())),
        }
        Ok(Self {
            specs,
            params,
            mode,
            step: 0,
            rng,
            id: fresh_id(),
            version: 0,
        })
    }

    pub fn specs(&self) -> &[LayerSpec] {
        &self.specs
    }

    pub fn params(&self) -> &[LayerParams<F>] {
        &self.params
    }

    /// Mutable parameter access; invalidates outstanding forward caches.
    pub fn params_mut(&mut self) -> &mut [LayerParams<F>] {
        self.touch();
        &mut self.params
    }

    pub fn mode(&self) -> ForwardMode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: ForwardMode) {
        self.touch();
        self.mode = mode;
    }

    /// Number of optimizer steps taken.
    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn rng(&self) -> &ChaCha8Rng {
        &self.rng
    }

    pub fn rng_mut(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn set_rng(&mut self, rng: ChaCha8Rng) {
        self.rng = rng;
    }

    pub fn input_len(&self) -> usize {
        self.specs[0].input_len()
    }

    pub fn num_classes(&self) -> usize {
        self.specs.last().map(|s| s.output_len()).unwrap_or(0)
    }

    /// Indices of layers carrying weights.
    pub fn weight_layer_indices(&self) -> Vec<usize> {
        self.specs
            .iter()
            .enumerate()
            .filter(|(_, s)| s.kind.has_weights())
            .map(|(i, _)| i)
            .collect()
    }

    /// Weighted layers in order.
    pub fn weight_layers(&self) -> impl Iterator<Item = &BinaryLayer<F>> {
        self.params.iter().filter_map(LayerParams::as_weight)
    }

    /// Weighted layers in order, mutably; invalidates outstanding caches.
    pub fn weight_layers_mut(&mut self) -> impl Iterator<Item = &mut BinaryLayer<F>> {
        self.touch();
        self.params
            .iter_mut()
            .filter_map(LayerParams::as_weight_mut)
    }

    /// Whether every weighted layer is binarized.
    pub fn all_weights_binarized(&self) -> bool {
        self.specs
            .iter()
            .filter(|s| s.kind.has_weights())
            .all(|s| s.binarized)
    }

    /// Total number of weights `N` over weighted layers.
    pub fn num_weights(&self) -> usize {
        self.weight_layers().map(BinaryLayer::len).sum()
    }

    /// Number of weighted layers `L` (one amplitude each).
    pub fn num_weight_layers(&self) -> usize {
        self.weight_layers().count()
    }

    /// Checks every weighted layer's invariants.
    pub fn check_invariants(&self) -> Result<()> {
        for (i, w) in self.weight_layers().enumerate() {
            w.check_invariants()
                .map_err(|e| Error::Assertion(format!("weight layer {i}: {e}")))?;
        }
        Ok(())
    }

    pub(crate) fn touch(&mut self) {
        self.version = self.version.wrapping_add(1);
    }

    fn views(&self) -> Vec<LayerView<'_, F>> {
        self.specs
            .iter()
            .zip(&self.params)
            .map(|(spec, p)| match p {
                LayerParams::Weight(w) => LayerView::Weight {
                    weights: if self.mode == ForwardMode::Binary && spec.binarized {
                        w.bin.view()
                    } else {
                        w.aux.view()
                    },
                    amplitude: w.amplitude,
                },
                LayerParams::BatchNorm(bn) => LayerView::BatchNorm {
                    gamma: bn.gamma.view(),
                    beta: bn.beta.view(),
                    running_mean: bn.running_mean.view(),
                    running_var: bn.running_var.view(),
                },
                LayerParams::None => LayerView::None,
            })
            .collect()
    }

    fn check_batch(&self, batch: &Batch<F>) -> Result<()> {
        if batch.is_empty() {
            return Err(Error::Shape("empty batch".into()));
        }
        if batch.inputs.nrows() != batch.labels.len() {
            return Err(Error::Shape(format!(
                "{} input rows but {} labels",
                batch.inputs.nrows(),
                batch.labels.len()
            )));
        }
        if batch.inputs.ncols() != self.input_len() {
            return Err(Error::Shape(format!(
                "batch has {} features, model expects {:?}",
                batch.inputs.ncols(),
                self.specs[0].input_dims
            )));
        }
        let classes = self.num_classes();
        if let Some(&y) = batch.labels.iter().find(|&&y| y >= classes) {
            return Err(Error::InvalidValue(format!(
                "label {y} out of range for {classes} classes"
            )));
        }
        Ok(())
    }

    /// Training-mode forward pass (batch-norm uses batch statistics).
    /// Returns the mean cross-entropy loss and the activation cache.
    pub fn forward(&self, batch: &Batch<F>) -> Result<(F, ForwardCache<F>)> {
        self.check_batch(batch)?;
        let views = self.views();
        let (logits, mut caches) = run_forward(&self.specs, &views, batch.inputs.clone(), true)?;
        let (loss, probs) = softmax_cross_entropy(&logits, &batch.labels);
        caches.push(LayerCache::Softmax { probs });
        Ok((
            loss,
            ForwardCache {
                model_id: self.id,
                version: self.version,
                batch_len: batch.len(),
                layers: caches,
            },
        ))
    }

    /// Gradients of the mean loss for the batch that produced `cache`.
    /// Weight gradients are taken with respect to the weights the forward
    /// pass read (straight-through for binarized layers).
    pub fn backward(&self, cache: &ForwardCache<F>, batch: &Batch<F>) -> Result<Gradients<F>> {
        if cache.model_id != self.id || cache.version != self.version {
            return Err(Error::InvalidState(
                "forward cache is stale: model changed since it was recorded".into(),
            ));
        }
        if cache.batch_len != batch.len() || cache.layers.len() != self.specs.len() {
            return Err(Error::InvalidState(
                "forward cache does not belong to this batch".into(),
            ));
        }
        self.check_batch(batch)?;
        let views = self.views();
        let n = batch.len();
        let inv_n = F::one() / F::lit(n as f64);
        let mut grad = cache.probabilities().clone();
        for (row, &y) in batch.labels.iter().enumerate() {
            grad[[row, y]] = grad[[row, y]] - F::one();
        }
        grad.mapv_inplace(|g| g * inv_n);

        let last = self.specs.len() - 1;
        let mut grads: Vec<LayerGrad<F>> = vec![LayerGrad::None; self.specs.len()];
        for i in (0..last).rev() {
            let spec = &self.specs[i];
            let need_dx = i > 0;
            let (dx, g) = match (&cache.layers[i], &views[i]) {
                (LayerCache::Dense { input, pre }, LayerView::Weight { weights, amplitude }) => {
                    let d_amp = (&grad * pre).sum();
                    let dw = input.t().dot(&grad) * *amplitude;
                    let dx = need_dx.then(|| grad.dot(&weights.t()) * *amplitude);
                    (
                        dx,
                        LayerGrad::Weight {
                            weights: dw,
                            amplitude: d_amp,
                        },
                    )
                }
                (LayerCache::Conv { patches, pre }, LayerView::Weight { weights, amplitude }) => {
                    let d_amp = (&grad * pre).sum();
                    let d_pre = conv_output_to_rows(&grad, spec);
                    let dw = patches.t().dot(&d_pre) * *amplitude;
                    let dx = need_dx.then(|| {
                        let d_patches = d_pre.dot(&weights.t()) * *amplitude;
                        col2im(&d_patches, spec, n)
                    });
                    (
                        dx,
                        LayerGrad::Weight {
                            weights: dw,
                            amplitude: d_amp,
                        },
                    )
                }
                (
                    LayerCache::BatchNorm { xhat, inv_std, .. },
                    LayerView::BatchNorm { gamma, .. },
                ) => {
                    let (dx, dg, db) = bn_backward(&grad, xhat, inv_std, gamma, spec);
                    (
                        Some(dx),
                        LayerGrad::BatchNorm {
                            gamma: dg,
                            beta: db,
                        },
                    )
                }
                (LayerCache::Tanh { output }, _) => {
                    let mut dx = grad.clone();
                    ndarray::Zip::from(&mut dx)
                        .and(output)
                        .for_each(|d, &y| *d = *d * (F::one() - y * y));
                    (Some(dx), LayerGrad::None)
                }
                (LayerCache::Pool { argmax }, _) => {
                    let mut dx = Array2::zeros((n, spec.input_len()));
                    let out_len = spec.output_len();
                    for b in 0..n {
                        for o in 0..out_len {
                            let src = argmax[b * out_len + o];
                            dx[[b, src]] = dx[[b, src]] + grad[[b, o]];
                        }
                    }
                    (Some(dx), LayerGrad::None)
                }
                _ => {
                    return Err(Error::InvalidState(format!(
                        "cache entry {i} does not match layer {:?}",
                        spec.kind
                    )))
                }
            };
            grads[i] = g;
            match dx {
                Some(dx) => grad = dx,
                None => break,
            }
        }
        let loss = {
            let probs = cache.probabilities();
            let mut total = F::zero();
            for (row, &y) in batch.labels.iter().enumerate() {
                total = total - probs[[row, y]].max(F::min_positive_value()).ln();
            }
            total * inv_n
        };
        Ok(Gradients {
            loss,
            layers: grads,
        })
    }

    /// Folds the batch statistics of a training forward pass into the
    /// running batch-norm statistics.
    pub(crate) fn absorb_batch_stats(&mut self, cache: &ForwardCache<F>) {
        for (p, c) in self.params.iter_mut().zip(&cache.layers) {
            if let (LayerParams::BatchNorm(bn), LayerCache::BatchNorm { mean, var, .. }) = (p, c) {
                bn.update_running(mean, var);
            }
        }
        self.touch();
    }

    /// Evaluation-mode class probabilities (batch-norm uses running statistics).
    pub fn predict_proba(&self, inputs: ArrayView2<'_, F>) -> Result<Array2<F>> {
        if inputs.ncols() != self.input_len() {
            return Err(Error::Shape(format!(
                "inputs have {} features, model expects {}",
                inputs.ncols(),
                self.input_len()
            )));
        }
        predict_chunks(&self.specs, &self.views(), inputs)
    }

    /// Mean cross-entropy loss and accuracy in evaluation mode.
    pub fn evaluate(&self, inputs: ArrayView2<'_, F>, labels: &[usize]) -> Result<(f64, f64)> {
        let probs = self.predict_proba(inputs)?;
        score(&probs, labels)
    }

    /// Logits-level check used in tests: evaluation-mode pre-softmax outputs.
    pub fn predict_logits(&self, inputs: ArrayView2<'_, F>) -> Result<Array2<F>> {
        let (logits, _) = run_forward(&self.specs, &self.views(), inputs.to_owned(), false)?;
        Ok(logits)
    }
}

/// Read-only evaluation model holding only the weights the forward pass
/// reads. In binary mode the auxiliary weights are not retained.
#[derive(Clone, Debug)]
pub struct InferenceModel<F> {
    specs: Vec<LayerSpec>,
    layers: Vec<InferenceLayer<F>>,
}

#[derive(Clone, Debug)]
enum InferenceLayer<F> {
    Weight { weights: Array2<F>, amplitude: F },
    BatchNorm(BatchNorm<F>),
    None,
}

impl<F: Real> InferenceModel<F> {
    pub fn from_model(model: &Model<F>) -> Self {
        let layers = model
            .views()
            .into_iter()
            .zip(&model.params)
            .map(|(v, p)| match (v, p) {
                (LayerView::Weight { weights, amplitude }, _) => InferenceLayer::Weight {
                    weights: weights.to_owned(),
                    amplitude,
                },
                (_, LayerParams::BatchNorm(bn)) => InferenceLayer::BatchNorm(bn.clone()),
                _ => InferenceLayer::None,
            })
            .collect();
        Self {
            specs: model.specs.clone(),
            layers,
        }
    }

    fn views(&self) -> Vec<LayerView<'_, F>> {
        self.layers
            .iter()
            .map(|l| match l {
                InferenceLayer::Weight { weights, amplitude } => LayerView::Weight {
                    weights: weights.view(),
                    amplitude: *amplitude,
                },
                InferenceLayer::BatchNorm(bn) => LayerView::BatchNorm {
                    gamma: bn.gamma.view(),
                    beta: bn.beta.view(),
                    running_mean: bn.running_mean.view(),
                    running_var: bn.running_var.view(),
                },
                InferenceLayer::None => LayerView::None,
            })
            .collect()
    }

    pub fn predict_proba(&self, inputs: ArrayView2<'_, F>) -> Result<Array2<F>> {
        if inputs.ncols() != self.specs[0].input_len() {
            return Err(Error::Shape(format!(
                "inputs have {} features, model expects {}",
                inputs.ncols(),
                self.specs[0].input_len()
            )));
        }
        predict_chunks(&self.specs, &self.views(), inputs)
    }

    pub fn evaluate(&self, inputs: ArrayView2<'_, F>, labels: &[usize]) -> Result<(f64, f64)> {
        let probs = self.predict_proba(inputs)?;
        score(&probs, labels)
    }
}

const EVAL_CHUNK: usize = 1024;

fn predict_chunks<F: Real>(
    specs: &[LayerSpec],
    views: &[LayerView<'_, F>],
    inputs: ArrayView2<'_, F>,
) -> Result<Array2<F>> {
    let classes = specs.last().map(|s| s.output_len()).unwrap_or(0);
    let mut out = Array2::zeros((inputs.nrows(), classes));
    let mut start = 0;
    while start < inputs.nrows() {
        let end = (start + EVAL_CHUNK).min(inputs.nrows());
        let chunk = inputs.slice(s![start..end, ..]).to_owned();
        let (logits, _) = run_forward(specs, views, chunk, false)?;
        out.slice_mut(s![start..end, ..])
            .assign(&softmax_rows(&logits));
        start = end;
    }
    Ok(out)
}

fn score<F: Real>(probs: &Array2<F>, labels: &[usize]) -> Result<(f64, f64)> {
    if probs.nrows() != labels.len() {
        return Err(Error::Shape(format!(
            "{} predictions but {} labels",
            probs.nrows(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::Shape("empty evaluation set".into()));
    }
    let mut loss = 0.0;
    let mut correct = 0usize;
    for (row, &y) in probs.axis_iter(Axis(0)).zip(labels) {
        if y >= row.len() {
            return Err(Error::InvalidValue(format!("label {y} out of range")));
        }
        loss -= row[y].as_f64().max(f64::MIN_POSITIVE).ln();
        if argmax(row) == y {
            correct += 1;
        }
    }
    let n = labels.len() as f64;
    Ok((loss / n, correct as f64 / n))
}

/// Index of the largest entry; ties resolve to the lowest index.
pub(crate) fn argmax<F: Real>(row: ArrayView1<'_, F>) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn softmax_rows<F: Real>(logits: &Array2<F>) -> Array2<F> {
    let mut probs = logits.clone();
    for mut row in probs.axis_iter_mut(Axis(0)) {
        let max = row.fold(F::neg_infinity(), |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    probs
}

fn softmax_cross_entropy<F: Real>(logits: &Array2<F>, labels: &[usize]) -> (F, Array2<F>) {
    let mut total = F::zero();
    for (row, &y) in logits.axis_iter(Axis(0)).zip(labels) {
        let max = row.fold(F::neg_infinity(), |m, &v| m.max(v));
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<F>().ln();
        total = total + (lse - row[y]);
    }
    let loss = total / F::lit(labels.len() as f64);
    (loss, softmax_rows(logits))
}

fn run_forward<F: Real>(
    specs: &[LayerSpec],
    views: &[LayerView<'_, F>],
    mut x: Array2<F>,
    train: bool,
) -> Result<(Array2<F>, Vec<LayerCache<F>>)> {
    let n = x.nrows();
    let mut caches = Vec::with_capacity(if train { specs.len() } else { 0 });
    for (spec, view) in specs.iter().zip(views) {
        match (spec.kind, view) {
            (LayerKind::Dense { .. }, LayerView::Weight { weights, amplitude }) => {
                let pre = x.dot(weights);
                let y = &pre * *amplitude;
                if train {
                    caches.push(LayerCache::Dense { input: x, pre });
                }
                x = y;
            }
            (LayerKind::Conv2d { .. }, LayerView::Weight { weights, amplitude }) => {
                let patches = im2col(&x, spec);
                let rows = patches.dot(weights);
                let pre = conv_rows_to_output(&rows, spec, n);
                let y = &pre * *amplitude;
                if train {
                    caches.push(LayerCache::Conv { patches, pre });
                }
                x = y;
            }
            (
                LayerKind::BatchNorm,
                LayerView::BatchNorm {
                    gamma,
                    beta,
                    running_mean,
                    running_var,
                },
            ) => {
                if train {
                    let (y, xhat, inv_std, mean, var) = bn_forward_train(&x, gamma, beta, spec);
                    caches.push(LayerCache::BatchNorm {
                        xhat,
                        inv_std,
                        mean,
                        var,
                    });
                    x = y;
                } else {
                    x = bn_forward_eval(&x, gamma, beta, running_mean, running_var, spec);
                }
            }
            (LayerKind::Tanh, _) => {
                x.mapv_inplace(|v| v.tanh());
                if train {
                    caches.push(LayerCache::Tanh { output: x.clone() });
                }
            }
            (LayerKind::PoolDown2, _) => {
                let (y, argmax) = pool_forward(&x, spec);
                if train {
                    caches.push(LayerCache::Pool { argmax });
                }
                x = y;
            }
            (LayerKind::Softmax, _) => {}
            (kind, _) => {
                return Err(Error::InvalidState(format!(
                    "parameters missing for layer {kind:?}"
                )))
            }
        }
    }
    Ok((x, caches))
}

fn im2col<F: Real>(x: &Array2<F>, spec: &LayerSpec) -> Array2<F> {
    let LayerKind::Conv2d { kernel: k, .. } = spec.kind else {
        unreachable!()
    };
    let (c, h, w) = (spec.input_dims[0], spec.input_dims[1], spec.input_dims[2]);
    let (oh, ow) = (spec.output_dims[1], spec.output_dims[2]);
    let n = x.nrows();
    let cols = c * k * k;
    let mut patches = Array2::zeros((n * oh * ow, cols));
    for b in 0..n {
        let img = x.row(b);
        for i in 0..oh {
            for j in 0..ow {
                let mut row = patches.row_mut(b * oh * ow + i * ow + j);
                for ch in 0..c {
                    for ki in 0..k {
                        for kj in 0..k {
                            row[ch * k * k + ki * k + kj] =
                                img[ch * h * w + (i + ki) * w + (j + kj)];
                        }
                    }
                }
            }
        }
    }
    patches
}

fn col2im<F: Real>(d_patches: &Array2<F>, spec: &LayerSpec, n: usize) -> Array2<F> {
    let LayerKind::Conv2d { kernel: k, .. } = spec.kind else {
        unreachable!()
    };
    let (c, h, w) = (spec.input_dims[0], spec.input_dims[1], spec.input_dims[2]);
    let (oh, ow) = (spec.output_dims[1], spec.output_dims[2]);
    let mut dx = Array2::zeros((n, c * h * w));
    for b in 0..n {
        let mut img = dx.row_mut(b);
        for i in 0..oh {
            for j in 0..ow {
                let row = d_patches.row(b * oh * ow + i * ow + j);
                for ch in 0..c {
                    for ki in 0..k {
                        for kj in 0..k {
                            let idx = ch * h * w + (i + ki) * w + (j + kj);
                            img[idx] = img[idx] + row[ch * k * k + ki * k + kj];
                        }
                    }
                }
            }
        }
    }
    dx
}

/// `(n * positions, filters)` rows to `(n, filters * positions)` channel-major output.
fn conv_rows_to_output<F: Real>(rows: &Array2<F>, spec: &LayerSpec, n: usize) -> Array2<F> {
    let filters = spec.output_dims[0];
    let positions = spec.output_dims[1] * spec.output_dims[2];
    let mut out = Array2::zeros((n, filters * positions));
    for b in 0..n {
        for p in 0..positions {
            let r = rows.row(b * positions + p);
            for f in 0..filters {
                out[[b, f * positions + p]] = r[f];
            }
        }
    }
    out
}

fn conv_output_to_rows<F: Real>(out: &Array2<F>, spec: &LayerSpec) -> Array2<F> {
    let n = out.nrows();
    let filters = spec.output_dims[0];
    let positions = spec.output_dims[1] * spec.output_dims[2];
    let mut rows = Array2::zeros((n * positions, filters));
    for b in 0..n {
        for f in 0..filters {
            for p in 0..positions {
                rows[[b * positions + p, f]] = out[[b, f * positions + p]];
            }
        }
    }
    rows
}

/// Channel count and per-channel spatial size of a batch-norm input.
fn bn_layout(spec: &LayerSpec) -> (usize, usize) {
    let c = spec.bn_features();
    (c, spec.input_len() / c)
}

#[allow(clippy::type_complexity)]
fn bn_forward_train<F: Real>(
    x: &Array2<F>,
    gamma: &ArrayView1<'_, F>,
    beta: &ArrayView1<'_, F>,
    spec: &LayerSpec,
) -> (Array2<F>, Array2<F>, Array1<F>, Array1<F>, Array1<F>) {
    let (c, sp) = bn_layout(spec);
    let n = x.nrows();
    let count = F::lit((n * sp) as f64);
    let eps = F::lit(BatchNorm::<F>::EPS);
    let mut mean: Array1<F> = Array1::zeros(c);
    let mut var: Array1<F> = Array1::zeros(c);
    for b in 0..n {
        for ch in 0..c {
            for s in 0..sp {
                mean[ch] = mean[ch] + x[[b, ch * sp + s]];
            }
        }
    }
    mean.mapv_inplace(|m| m / count);
    for b in 0..n {
        for ch in 0..c {
            for s in 0..sp {
                let d = x[[b, ch * sp + s]] - mean[ch];
                var[ch] = var[ch] + d * d;
            }
        }
    }
    var.mapv_inplace(|v| v / count);
    let inv_std = var.mapv(|v| F::one() / (v + eps).sqrt());
    let mut xhat = Array2::zeros(x.raw_dim());
    let mut y = Array2::zeros(x.raw_dim());
    for b in 0..n {
        for ch in 0..c {
            for s in 0..sp {
                let j = ch * sp + s;
                let h = (x[[b, j]] - mean[ch]) * inv_std[ch];
                xhat[[b, j]] = h;
                y[[b, j]] = gamma[ch] * h + beta[ch];
            }
        }
    }
    (y, xhat, inv_std, mean, var)
}

fn bn_forward_eval<F: Real>(
    x: &Array2<F>,
    gamma: &ArrayView1<'_, F>,
    beta: &ArrayView1<'_, F>,
    mean: &ArrayView1<'_, F>,
    var: &ArrayView1<'_, F>,
    spec: &LayerSpec,
) -> Array2<F> {
    let (c, sp) = bn_layout(spec);
    let eps = F::lit(BatchNorm::<F>::EPS);
    let scale: Vec<F> = (0..c)
        .map(|ch| gamma[ch] / (var[ch] + eps).sqrt())
        .collect();
    let mut y = x.clone();
    for mut row in y.axis_iter_mut(Axis(0)) {
        for ch in 0..c {
            for s in 0..sp {
                let j = ch * sp + s;
                row[j] = (row[j] - mean[ch]) * scale[ch] + beta[ch];
            }
        }
    }
    y
}

fn bn_backward<F: Real>(
    dy: &Array2<F>,
    xhat: &Array2<F>,
    inv_std: &Array1<F>,
    gamma: &ArrayView1<'_, F>,
    spec: &LayerSpec,
) -> (Array2<F>, Array1<F>, Array1<F>) {
    let (c, sp) = bn_layout(spec);
    let n = dy.nrows();
    let count = F::lit((n * sp) as f64);
    let mut dgamma = Array1::zeros(c);
    let mut dbeta = Array1::zeros(c);
    for b in 0..n {
        for ch in 0..c {
            for s in 0..sp {
                let j = ch * sp + s;
                dgamma[ch] = dgamma[ch] + dy[[b, j]] * xhat[[b, j]];
                dbeta[ch] = dbeta[ch] + dy[[b, j]];
            }
        }
    }
    let mut dx = Array2::zeros(dy.raw_dim());
    for b in 0..n {
        for ch in 0..c {
            let k = gamma[ch] * inv_std[ch] / count;
            for s in 0..sp {
                let j = ch * sp + s;
                dx[[b, j]] = k * (count * dy[[b, j]] - dbeta[ch] - xhat[[b, j]] * dgamma[ch]);
            }
        }
    }
    (dx, dgamma, dbeta)
}

fn pool_forward<F: Real>(x: &Array2<F>, spec: &LayerSpec) -> (Array2<F>, Vec<usize>) {
    let (c, h, w) = (spec.input_dims[0], spec.input_dims[1], spec.input_dims[2]);
    let (oh, ow) = (spec.output_dims[1], spec.output_dims[2]);
    let n = x.nrows();
    let out_len = c * oh * ow;
    let mut y = Array2::zeros((n, out_len));
    let mut argmax = vec![0usize; n * out_len];
    for b in 0..n {
        let img = x.row(b);
        for ch in 0..c {
            for p in 0..oh {
                for q in 0..ow {
                    let mut best = ch * h * w + 2 * p * w + 2 * q;
                    for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = ch * h * w + (2 * p + di) * w + (2 * q + dj);
                        if img[idx] > img[best] {
                            best = idx;
                        }
                    }
                    let o = ch * oh * ow + p * ow + q;
                    y[[b, o]] = img[best];
                    argmax[b * out_len + o] = best;
                }
            }
        }
    }
    (y, argmax)
}
