//! Datasets and client partitions.
//!
//! A [`Dataset`] stores one flattened sample per row. MNIST comes from IDX
//! files ([`load_idx`], [`load_mnist_dir`]); [`synth_gaussian`] generates
//! separable blobs for fast experiments. [`Partition`] assigns sample indices
//! to clients under the IID, non-IID and unbalanced schemes.

mod idx;
mod partition;

pub use idx::{
    load_idx, load_mnist_dir, read_idx_images, read_idx_labels, write_idx_images, write_idx_labels,
};
pub use partition::{
    partition_iid, partition_noniid, partition_unbalanced, read_manifest, Partition,
    PartitionScheme,
};

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Labelled samples, one flattened sample per row of `images`.
///
/// `dims` is the per-sample shape (`[28, 28]` for MNIST, `[d]` for
/// synthetic blobs). IDX pixels are scaled to `[0, 1]`; synthetic features
/// are unbounded.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Array2<f32>,
    pub dims: Vec<usize>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(
        images: Array2<f32>,
        dims: Vec<usize>,
        labels: Vec<usize>,
        num_classes: usize,
    ) -> Result<Self> {
        if dims.iter().product::<usize>() != images.ncols() || dims.is_empty() {
            return Err(Error::Shape(format!(
                "sample dims {dims:?} do not match {} features",
                images.ncols()
            )));
        }
        if labels.len() != images.nrows() {
            return Err(Error::Shape(format!(
                "{} labels for {} samples",
                labels.len(),
                images.nrows()
            )));
        }
        if num_classes == 0 {
            return Err(Error::InvalidValue("num_classes must be positive".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Range(format!(
                "label {bad} outside [0, {num_classes})"
            )));
        }
        if images.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidValue("non-finite feature value".into()));
        }
        Ok(Self {
            images,
            dims,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_len(&self) -> usize {
        self.images.ncols()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.num_classes];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }

    /// Sample indices of each class, in dataset order.
    pub fn class_indices(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_classes];
        for (i, &l) in self.labels.iter().enumerate() {
            out[l].push(i);
        }
        out
    }

    /// The samples at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Result<Dataset> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(Error::Range(format!(
                "sample index {bad} >= {}",
                self.len()
            )));
        }
        Ok(Dataset {
            images: self.images.select(Axis(0), indices),
            dims: self.dims.clone(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        })
    }

    /// The first `per_class` samples of every class, in dataset order.
    pub fn stratified_head(&self, per_class: usize) -> Result<Dataset> {
        let mut idx = Vec::with_capacity(per_class * self.num_classes);
        for (c, members) in self.class_indices().iter().enumerate() {
            if members.len() < per_class {
                return Err(Error::Config(format!(
                    "class {c} has {} samples, fewer than the requested {per_class}",
                    members.len()
                )));
            }
            idx.extend_from_slice(&members[..per_class]);
        }
        idx.sort_unstable();
        self.select(&idx)
    }
}

/// Distance between any two class means used by [`synth_gaussian`].
pub const DEFAULT_SEPARATION: f64 = 6.0;

/// Gaussian blobs with unit isotropic noise whose class means are pairwise
/// [`DEFAULT_SEPARATION`] apart when `classes <= dims`.
pub fn synth_gaussian(classes: usize, per_class: usize, dims: usize, seed: u64) -> Result<Dataset> {
    synth_gaussian_with(classes, per_class, dims, DEFAULT_SEPARATION, seed)
}

/// Class means of [`synth_gaussian_with`]. For `classes <= dims` they sit on
/// scaled coordinate axes, so every pair is exactly `separation` apart;
/// otherwise they are random directions of norm `separation / √2` and
/// pairwise separation is not guaranteed.
pub fn synth_means(classes: usize, dims: usize, separation: f64, seed: u64) -> Array2<f64> {
    let radius = separation / std::f64::consts::SQRT_2;
    let mut means = Array2::zeros((classes, dims));
    if classes <= dims {
        for c in 0..classes {
            means[[c, c]] = radius;
        }
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6d65_616e);
        for mut row in means.rows_mut() {
            row.mapv_inplace(|_| StandardNormal.sample(&mut rng));
            let n = row.dot(&row).sqrt().max(f64::MIN_POSITIVE);
            row.mapv_inplace(|v| v * radius / n);
        }
    }
    means
}

/// Class-conditional blobs `x ~ N(mean_c, I)`, shuffled into a fixed order
/// determined by `seed`.
pub fn synth_gaussian_with(
    classes: usize,
    per_class: usize,
    dims: usize,
    separation: f64,
    seed: u64,
) -> Result<Dataset> {
    if classes < 2 || per_class == 0 || dims == 0 {
        return Err(Error::Config(format!(
            "synthetic data needs classes >= 2, per_class >= 1, dims >= 1 (got {classes}, {per_class}, {dims})"
        )));
    }
    if !(separation.is_finite() && separation > 0.0) {
        return Err(Error::Config(format!(
            "separation {separation} must be positive"
        )));
    }
    let means = synth_means(classes, dims, separation, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels: Vec<usize> = (0..classes)
        .flat_map(|c| std::iter::repeat(c).take(per_class))
        .collect();
    labels.shuffle(&mut rng);
    let mut images = Array2::zeros((labels.len(), dims));
    for (mut row, &c) in images.rows_mut().into_iter().zip(&labels) {
        for (j, v) in row.iter_mut().enumerate() {
            let noise: f64 = StandardNormal.sample(&mut rng);
            *v = (means[[c, j]] + noise) as f32;
        }
    }
    Dataset::new(images, vec![dims], labels, classes)
}
