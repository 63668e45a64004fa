//! Post-hoc detectors that need only features, the head, and (for some) the
//! training features. Higher score = more in-distribution throughout.

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::dataset::{class_means, compute_logits, ClassifierHead, FeatureSet, TrainStats};
use crate::error::{Error, Result};

pub const DEFAULT_REACT_PERCENTILE: f64 = 90.0;
pub const DICE_SPARSITY_CIFAR: f64 = 90.0;
pub const DICE_SPARSITY_IMAGENET: f64 = 70.0;
pub const DEFAULT_KNN_K: usize = 50;

fn check_logits(logits: &DMatrix<f64>) -> Result<()> {
    if logits.ncols() < 2 {
        return Err(Error::Contract(format!(
            "need at least 2 classes, got {}",
            logits.ncols()
        )));
    }
    if let Some(pos) = logits.iter().position(|v| !v.is_finite()) {
        // nalgebra storage is column-major
        let (r, c) = (pos % logits.nrows(), pos / logits.nrows());
        return Err(Error::Contract(format!(
            "non-finite logit at row {r}, class {c}"
        )));
    }
    Ok(())
}

fn logsumexp<'a>(row: impl Iterator<Item = &'a f64> + Clone) -> f64 {
    let m = row.clone().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    m + row.map(|&v| (v - m).exp()).sum::<f64>().ln()
}

/// Maximum softmax probability.
pub fn msp_score(logits: &DMatrix<f64>) -> Result<Vec<f64>> {
    check_logits(logits)?;
    Ok(logits
        .row_iter()
        .map(|r| {
            let m = r.max();
            // max_c softmax = exp(m - m) / sum_c exp(l_c - m)
            1.0 / r.iter().map(|&v| (v - m).exp()).sum::<f64>()
        })
        .collect())
}

/// logsumexp over classes, the negated free energy.
pub fn energy_score(logits: &DMatrix<f64>) -> Result<Vec<f64>> {
    check_logits(logits)?;
    Ok(logits.row_iter().map(|r| logsumexp(r.iter())).collect())
}

/// Order statistic at `percentile` with linear interpolation between
/// neighbouring ranks (position p/100 * (n-1) in the sorted values).
pub fn percentile(values: &[f64], percentile: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Fit("percentile of an empty set".into()));
    }
    if !(0.0..=100.0).contains(&percentile) {
        return Err(Error::Contract(format!(
            "percentile {percentile} outside [0, 100]"
        )));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let pos = percentile / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    Ok(sorted[lo] + (sorted[hi] - sorted[lo]) * frac)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReactClip {
    pub threshold: f64,
    pub percentile: f64,
}

impl ReactClip {
    pub fn no_clip() -> Self {
        ReactClip {
            threshold: f64::INFINITY,
            percentile: 100.0,
        }
    }
}

/// Global clip threshold over all N*D training activations.
pub fn fit_react(train: &FeatureSet, pct: f64) -> Result<ReactClip> {
    if train.is_empty() {
        return Err(Error::Fit(format!(
            "training set {:?} is empty",
            train.name
        )));
    }
    if !(pct > 0.0 && pct <= 100.0) {
        return Err(Error::Contract(format!(
            "react percentile {pct} outside (0, 100]"
        )));
    }
    let threshold = percentile(train.features.as_slice(), pct)?;
    Ok(ReactClip {
        threshold,
        percentile: pct,
    })
}

pub fn react_clip_features(features: &DMatrix<f64>, clip: &ReactClip) -> DMatrix<f64> {
    features.map(|v| v.min(clip.threshold))
}

pub fn react_score(
    features: &DMatrix<f64>,
    head: &ClassifierHead,
    clip: &ReactClip,
) -> Result<Vec<f64>> {
    let clipped = react_clip_features(features, clip);
    energy_score(&compute_logits(head, &clipped)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiceMask {
    /// C x D, true where the weight is kept.
    pub mask: Vec<Vec<bool>>,
    pub sparsity_percentile: f64,
}

impl DiceMask {
    pub fn full(c: usize, d: usize) -> Self {
        DiceMask {
            mask: vec![vec![true; d]; c],
            sparsity_percentile: 0.0,
        }
    }

    pub fn empty(c: usize, d: usize) -> Self {
        DiceMask {
            mask: vec![vec![false; d]; c],
            sparsity_percentile: 100.0,
        }
    }
}

/// Number of entries kept out of `d` at the given sparsity.
fn dice_keep_count(d: usize, sparsity: f64) -> usize {
    let keep = (100.0 - sparsity) / 100.0 * d as f64;
    // absorb rounding noise such as 100/3 percent of 3 evaluating just above 2
    ((keep - 1e-9).ceil().max(0.0) as usize).min(d)
}

/// Per class row, keep the top (100 - sparsity)% of entries ranked by
/// importance w_{c,j} * mean_feature_j. Equal importances keep the lower index.
pub fn fit_dice(
    stats: &TrainStats,
    head: &ClassifierHead,
    sparsity_percentile: f64,
) -> Result<DiceMask> {
    if !(0.0..100.0).contains(&sparsity_percentile) {
        return Err(Error::Contract(format!(
            "dice sparsity {sparsity_percentile} outside [0, 100)"
        )));
    }
    if stats.mean_feature.len() != head.dim() {
        return Err(Error::Contract(format!(
            "mean feature width {} does not match head width {}",
            stats.mean_feature.len(),
            head.dim()
        )));
    }
    let d = head.dim();
    let keep = dice_keep_count(d, sparsity_percentile);
    let w = head.weights();
    let mask = (0..head.num_classes())
        .map(|c| {
            let importance: Vec<f64> = (0..d).map(|j| w[(c, j)] * stats.mean_feature[j]).collect();
            let mut order: Vec<usize> = (0..d).collect();
            // stable sort keeps lower indices first among equal importances;
            // IEEE comparison so that -0.0 ties with 0.0
            order.sort_by(|&a, &b| {
                importance[b]
                    .partial_cmp(&importance[a])
                    .unwrap_or(std::cmp::Ordering::Equal)
            });
            let mut row = vec![false; d];
            for &j in &order[..keep] {
                row[j] = true;
            }
            row
        })
        .collect();
    Ok(DiceMask {
        mask,
        sparsity_percentile,
    })
}

pub fn masked_head(head: &ClassifierHead, mask: &DiceMask) -> Result<ClassifierHead> {
    let (c, d) = head.weights().shape();
    if mask.mask.len() != c || mask.mask.iter().any(|r| r.len() != d) {
        return Err(Error::Contract(format!(
            "dice mask shape does not match head {c} x {d}"
        )));
    }
    let masked = DMatrix::from_fn(c, d, |i, j| {
        if mask.mask[i][j] {
            head.weights()[(i, j)]
        } else {
            0.0
        }
    });
    // bypasses the nonzero-row check: a fully masked row is legitimate here
    Ok(ClassifierHead::from_parts_unchecked(
        masked,
        head.bias().clone(),
    ))
}

pub fn dice_score(
    features: &DMatrix<f64>,
    head: &ClassifierHead,
    mask: &DiceMask,
) -> Result<Vec<f64>> {
    let masked = masked_head(head, mask)?;
    energy_score(&compute_logits(&masked, features)?)
}

#[derive(Debug, Clone)]
pub struct MahalanobisFit {
    /// C x D
    pub class_means: DMatrix<f64>,
    pub shared_precision: DMatrix<f64>,
    pub ridge: f64,
}

/// Shared covariance of training features around their class means (1/N).
pub fn tied_covariance(
    train: &FeatureSet,
    num_classes: usize,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let labels = train.require_labels()?;
    let (means, _) = class_means(&train.features, labels, num_classes)?;
    let cov = crate::dataset::within_class_covariance(&train.features, labels, &means);
    Ok((means, cov))
}

/// 1e-6 * trace(cov) / D.
pub fn default_ridge(cov: &DMatrix<f64>) -> f64 {
    1e-6 * cov.trace() / cov.nrows() as f64
}

/// Gaussian class-conditional fit with a tied covariance. `ridge` is added to
/// the covariance diagonal before inversion.
pub fn mahalanobis_fit(
    train: &FeatureSet,
    num_classes: usize,
    ridge: f64,
) -> Result<MahalanobisFit> {
    if !(ridge >= 0.0 && ridge.is_finite()) {
        return Err(Error::Contract(format!(
            "ridge must be finite and >= 0, got {ridge}"
        )));
    }
    let (means, cov) = tied_covariance(train, num_classes)?;
    let d = cov.nrows();
    let regularized = &cov + DMatrix::<f64>::identity(d, d) * ridge;
    let singular = || {
        Error::Fit(format!(
            "covariance + {ridge} * I is singular; pass a positive ridge (e.g. {:.3e})",
            default_ridge(&cov).max(1e-6)
        ))
    };
    let chol = nalgebra::Cholesky::new(regularized.clone()).ok_or_else(singular)?;
    let l = chol.l_dirty();
    let scale = regularized.diagonal().max().max(f64::MIN_POSITIVE);
    // rank deficiency shows up as a vanishing pivot even when the
    // factorization itself succeeds on rounding noise
    if (0..d).any(|i| l[(i, i)] * l[(i, i)] <= 1e-12 * scale) {
        return Err(singular());
    }
    let precision = chol.inverse();
    let precision = (&precision + precision.transpose()) * 0.5;
    Ok(MahalanobisFit {
        class_means: means,
        shared_precision: precision,
        ridge,
    })
}

/// max_c -(h - mu_c)^T P (h - mu_c).
pub fn mahalanobis_score(features: &DMatrix<f64>, fit: &MahalanobisFit) -> Result<Vec<f64>> {
    let d = fit.class_means.ncols();
    if features.ncols() != d {
        return Err(Error::Contract(format!(
            "feature width {} does not match fit width {d}",
            features.ncols()
        )));
    }
    let mut best = vec![f64::NEG_INFINITY; features.nrows()];
    for c in 0..fit.class_means.nrows() {
        let mut diff = features.clone();
        let mu = fit.class_means.row(c);
        for mut row in diff.row_iter_mut() {
            row -= &mu;
        }
        let projected = &diff * &fit.shared_precision;
        for (i, b) in best.iter_mut().enumerate() {
            let q = projected.row(i).dot(&diff.row(i));
            *b = b.max(-q);
        }
    }
    Ok(best)
}

#[derive(Debug, Clone)]
pub struct KnnIndex {
    /// M x D, rows of unit L2 norm (zero rows stay zero).
    pub normalized_train: DMatrix<f64>,
    pub k: usize,
}

pub fn l2_normalize_rows(features: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = features.clone();
    for mut row in out.row_iter_mut() {
        let n = row.norm();
        if n > 0.0 {
            row /= n;
        }
    }
    out
}

impl KnnIndex {
    pub fn new(train: &DMatrix<f64>, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::Contract("k must be at least 1".into()));
        }
        if k > train.nrows() {
            return Err(Error::Contract(format!(
                "k = {k} exceeds the {} stored training features",
                train.nrows()
            )));
        }
        Ok(KnnIndex {
            normalized_train: l2_normalize_rows(train),
            k,
        })
    }
}

/// Negative distance from each normalized query to its k-th nearest
/// normalized training feature. Exact search.
pub fn knn_score(features: &DMatrix<f64>, index: &KnnIndex) -> Result<Vec<f64>> {
    let bank = &index.normalized_train;
    if features.ncols() != bank.ncols() {
        return Err(Error::Contract(format!(
            "feature width {} does not match index width {}",
            features.ncols(),
            bank.ncols()
        )));
    }
    if index.k == 0 || index.k > bank.nrows() {
        return Err(Error::Contract(format!(
            "k = {} is not in 1..={}",
            index.k,
            bank.nrows()
        )));
    }
    let queries = l2_normalize_rows(features);
    let bank_rows: Vec<Vec<f64>> = bank
        .row_iter()
        .map(|r| r.iter().copied().collect())
        .collect();
    let query_rows: Vec<Vec<f64>> = queries
        .row_iter()
        .map(|r| r.iter().copied().collect())
        .collect();
    Ok(query_rows
        .par_iter()
        .map(|q| {
            let mut d2: Vec<f64> = bank_rows
                .iter()
                .map(|b| b.iter().zip(q).map(|(x, y)| (x - y) * (x - y)).sum())
                .collect();
            let (_, kth, _) = d2.select_nth_unstable_by(index.k - 1, f64::total_cmp);
            -kth.sqrt()
        })
        .collect())
}

/// Convenience for callers that only need the per-class count.
pub fn num_classes_of(labels: &[usize]) -> usize {
    labels.iter().max().map_or(0, |&m| m + 1)
}
