//! Feature sets, the linear classification head and statistics fit on
//! training features.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::tensor_store::{self, BundleManifest, Tensor};

/// N x D penultimate-layer features with optional class labels.
#[derive(Debug, Clone)]
pub struct FeatureSet {
    pub features: DMatrix<f64>,
    pub labels: Option<Vec<usize>>,
    pub name: String,
}

impl FeatureSet {
    pub fn new(
        features: DMatrix<f64>,
        labels: Option<Vec<usize>>,
        name: impl Into<String>,
    ) -> Result<Self> {
        if features.ncols() == 0 {
            return Err(Error::Contract("feature width D must be at least 1".into()));
        }
        if let Some(l) = &labels {
            if l.len() != features.nrows() {
                return Err(Error::Consistency(format!(
                    "{} labels for {} feature rows",
                    l.len(),
                    features.nrows()
                )));
            }
        }
        Ok(FeatureSet {
            features,
            labels,
            name: name.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn require_labels(&self) -> Result<&[usize]> {
        self.labels
            .as_deref()
            .ok_or_else(|| Error::Contract(format!("feature set {:?} has no labels", self.name)))
    }

    /// Reads the `features` role (and `labels` when present) of a bundle.
    pub fn from_bundle(path: &Path) -> Result<Self> {
        let (manifest, tensors) = tensor_store::read_bundle(path)?;
        let features = tensors
            .get("features")
            .ok_or_else(|| Error::Contract(format!("bundle {} has no features", path.display())))?
            .to_matrix()?;
        let labels = tensors.get("labels").map(Tensor::to_labels).transpose()?;
        FeatureSet::new(features, labels, manifest.dataset_name)
    }

    pub fn to_tensors(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        out.insert("features".to_owned(), Tensor::from_matrix(&self.features));
        if let Some(l) = &self.labels {
            out.insert("labels".to_owned(), Tensor::from_labels(l));
        }
        out
    }
}

/// Final linear layer: rows of `weights` are the class vectors w_c.
#[derive(Debug, Clone)]
pub struct ClassifierHead {
    weights: DMatrix<f64>,
    bias: DVector<f64>,
}

impl ClassifierHead {
    pub fn new(weights: DMatrix<f64>, bias: DVector<f64>) -> Result<Self> {
        let (c, d) = weights.shape();
        if c < 2 {
            return Err(Error::Contract(format!(
                "head needs at least 2 classes, got {c}"
            )));
        }
        if d == 0 {
            return Err(Error::Contract("head width D must be at least 1".into()));
        }
        if bias.len() != c {
            return Err(Error::Contract(format!(
                "bias length {} does not match {c} weight rows",
                bias.len()
            )));
        }
        if let Some(zero) = (0..c).find(|&r| weights.row(r).iter().all(|&x| x == 0.0)) {
            return Err(Error::Contract(format!("weight row {zero} is all zeros")));
        }
        Ok(ClassifierHead { weights, bias })
    }

    pub(crate) fn from_parts_unchecked(weights: DMatrix<f64>, bias: DVector<f64>) -> Self {
        ClassifierHead { weights, bias }
    }

    pub fn without_bias(weights: DMatrix<f64>) -> Result<Self> {
        let c = weights.nrows();
        Self::new(weights, DVector::zeros(c))
    }

    pub fn weights(&self) -> &DMatrix<f64> {
        &self.weights
    }

    pub fn bias(&self) -> &DVector<f64> {
        &self.bias
    }

    pub fn num_classes(&self) -> usize {
        self.weights.nrows()
    }

    pub fn dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn row_norm(&self, class: usize) -> f64 {
        self.weights.row(class).norm()
    }

    pub fn check_width(&self, features: &DMatrix<f64>) -> Result<()> {
        if features.ncols() != self.dim() {
            return Err(Error::Contract(format!(
                "feature width {} does not match head width {}",
                features.ncols(),
                self.dim()
            )));
        }
        Ok(())
    }

    /// Reads the `weights` and `bias` roles of a bundle.
    pub fn from_bundle(path: &Path) -> Result<Self> {
        let (_, tensors) = tensor_store::read_bundle(path)?;
        let get = |role: &str| {
            tensors.get(role).ok_or_else(|| {
                Error::Contract(format!("bundle {} has no {role:?} tensor", path.display()))
            })
        };
        ClassifierHead::new(get("weights")?.to_matrix()?, get("bias")?.to_vector()?)
    }

    pub fn to_tensors(&self) -> BTreeMap<String, Tensor> {
        BTreeMap::from([
            ("weights".to_owned(), Tensor::from_matrix(&self.weights)),
            ("bias".to_owned(), Tensor::from_vector(&self.bias)),
        ])
    }
}

/// Entry (i, c) = w_c . h_i + b_c.
pub fn compute_logits(head: &ClassifierHead, features: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    head.check_width(features)?;
    let mut logits = features * head.weights.transpose();
    for mut row in logits.row_iter_mut() {
        row += head.bias.transpose();
    }
    Ok(logits)
}

/// Row-wise argmax; ties go to the lowest class index.
pub fn argmax_rows(logits: &DMatrix<f64>) -> Vec<usize> {
    logits
        .row_iter()
        .map(|row| {
            let mut best = 0;
            for c in 1..row.len() {
                if row[c] > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

pub fn predict_classes(head: &ClassifierHead, features: &DMatrix<f64>) -> Result<Vec<usize>> {
    Ok(argmax_rows(&compute_logits(head, features)?))
}

/// Everything fit on labelled training features.
#[derive(Debug, Clone)]
pub struct TrainStats {
    pub mu_g: DVector<f64>,
    /// C x D, row c is the mean of class c.
    pub class_means: DMatrix<f64>,
    pub class_counts: Vec<usize>,
    /// Within-class covariance with 1/N normalization.
    pub sigma_w: DMatrix<f64>,
    /// ||mu_c - mu_G|| / ||w_c||, the per-class feature-to-weight scale.
    pub lambda_c: DVector<f64>,
    /// Coordinate-wise training mean. Equal to `mu_g`; kept as its own field
    /// for the Dice importance estimate.
    pub mean_feature: DVector<f64>,
}

pub const STATS_ROLES: [&str; 6] = [
    "mu_g",
    "class_means",
    "class_counts",
    "sigma_w",
    "lambda_c",
    "mean_feature",
];

/// Class means and counts from labelled rows. Every class in `0..num_classes`
/// must be populated.
pub fn class_means(
    features: &DMatrix<f64>,
    labels: &[usize],
    num_classes: usize,
) -> Result<(DMatrix<f64>, Vec<usize>)> {
    let d = features.ncols();
    let mut sums = DMatrix::<f64>::zeros(num_classes, d);
    let mut counts = vec![0usize; num_classes];
    for (i, &label) in labels.iter().enumerate() {
        if label >= num_classes {
            return Err(Error::Contract(format!(
                "label {label} at row {i} is outside [0, {num_classes})"
            )));
        }
        counts[label] += 1;
        let mut row = sums.row_mut(label);
        row += features.row(i);
    }
    if let Some(empty) = counts.iter().position(|&n| n == 0) {
        return Err(Error::Fit(format!("class {empty} has no training samples")));
    }
    for (c, &n) in counts.iter().enumerate() {
        let mut row = sums.row_mut(c);
        row /= n as f64;
    }
    Ok((sums, counts))
}

/// Ave over samples of (h - mu_label)(h - mu_label)^T.
pub fn within_class_covariance(
    features: &DMatrix<f64>,
    labels: &[usize],
    means: &DMatrix<f64>,
) -> DMatrix<f64> {
    let n = features.nrows();
    let d = features.ncols();
    if n == 0 {
        return DMatrix::zeros(d, d);
    }
    let mut centered = features.clone();
    for (i, &label) in labels.iter().enumerate() {
        let mut row = centered.row_mut(i);
        row -= means.row(label);
    }
    let mut cov = centered.transpose() * &centered;
    cov /= n as f64;
    // enforce exact symmetry
    (&cov + cov.transpose()) * 0.5
}

pub fn column_mean(features: &DMatrix<f64>) -> DVector<f64> {
    let n = features.nrows();
    if n == 0 {
        return DVector::zeros(features.ncols());
    }
    features.row_sum().transpose() / n as f64
}

pub fn compute_train_stats(train: &FeatureSet, head: &ClassifierHead) -> Result<TrainStats> {
    let labels = train.labels.as_deref().ok_or_else(|| {
        Error::Contract(format!(
            "training set {:?} has no labels; statistics need class labels",
            train.name
        ))
    })?;
    head.check_width(&train.features)?;
    let c = head.num_classes();
    let (means, counts) = class_means(&train.features, labels, c)?;
    let mu_g = column_mean(&train.features);
    let sigma_w = within_class_covariance(&train.features, labels, &means);
    let mut lambda = DVector::zeros(c);
    for k in 0..c {
        let w_norm = head.row_norm(k);
        if w_norm == 0.0 {
            return Err(Error::Fit(format!("weight row {k} has zero norm")));
        }
        lambda[k] = (means.row(k).transpose() - &mu_g).norm() / w_norm;
    }
    Ok(TrainStats {
        mean_feature: mu_g.clone(),
        mu_g,
        class_means: means,
        class_counts: counts,
        sigma_w,
        lambda_c: lambda,
    })
}

impl TrainStats {
    pub fn num_classes(&self) -> usize {
        self.class_means.nrows()
    }

    pub fn dim(&self) -> usize {
        self.mu_g.len()
    }

    pub fn to_tensors(&self) -> BTreeMap<String, Tensor> {
        let counts: Vec<usize> = self.class_counts.clone();
        BTreeMap::from([
            ("mu_g".to_owned(), Tensor::from_vector(&self.mu_g)),
            (
                "class_means".to_owned(),
                Tensor::from_matrix(&self.class_means),
            ),
            ("class_counts".to_owned(), Tensor::from_labels(&counts)),
            ("sigma_w".to_owned(), Tensor::from_matrix(&self.sigma_w)),
            ("lambda_c".to_owned(), Tensor::from_vector(&self.lambda_c)),
            (
                "mean_feature".to_owned(),
                Tensor::from_vector(&self.mean_feature),
            ),
        ])
    }

    pub fn write_bundle(&self, dir: &Path, dataset_name: &str) -> Result<PathBuf> {
        let manifest =
            BundleManifest::for_roles(dataset_name, STATS_ROLES).with_meta("kind", "train_stats");
        tensor_store::write_bundle(&manifest, &self.to_tensors(), dir)
    }

    pub fn from_bundle(path: &Path) -> Result<Self> {
        let (_, tensors) = tensor_store::read_bundle(path)?;
        let get = |role: &str| {
            tensors.get(role).ok_or_else(|| {
                Error::Contract(format!(
                    "stats bundle {} has no {role:?} tensor",
                    path.display()
                ))
            })
        };
        let stats = TrainStats {
            mu_g: get("mu_g")?.to_vector()?,
            class_means: get("class_means")?.to_matrix()?,
            class_counts: get("class_counts")?.to_labels()?,
            sigma_w: get("sigma_w")?.to_matrix()?,
            lambda_c: get("lambda_c")?.to_vector()?,
            mean_feature: get("mean_feature")?.to_vector()?,
        };
        let (c, d) = stats.class_means.shape();
        if stats.mu_g.len() != d
            || stats.mean_feature.len() != d
            || stats.sigma_w.shape() != (d, d)
            || stats.lambda_c.len() != c
            || stats.class_counts.len() != c
        {
            return Err(Error::Consistency(format!(
                "stats bundle {} has mismatched shapes",
                path.display()
            )));
        }
        Ok(stats)
    }

    pub fn check_head(&self, head: &ClassifierHead) -> Result<()> {
        if head.dim() != self.dim() || head.num_classes() != self.num_classes() {
            return Err(Error::Contract(format!(
                "stats ({} classes, width {}) do not match head ({} classes, width {})",
                self.num_classes(),
                self.dim(),
                head.num_classes(),
                head.dim()
            )));
        }
        Ok(())
    }
}
