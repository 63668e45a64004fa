//! A small fully-connected classifier trained from scratch on Gaussian blobs,
//! with per-epoch neural-collapse diagnostics on its penultimate features.
//!
//! Everything here is f64 and deterministic given the seed: weights start
//! uniform in +-sqrt(6 / (fan_in + fan_out)), biases at zero, and mini-batch
//! order (when used) comes from a seeded shuffle.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;

use crate::dataset::{argmax_rows, class_means, column_mean, ClassifierHead};
use crate::error::{Error, Result};
use crate::synth::{gaussian_matrix, stream_rng, SynthRng};
use crate::tensor_store::{self, BundleManifest, Tensor};

const CENTER_RETRIES: usize = 1000;

#[derive(Debug, Clone)]
pub struct BlobsDataset {
    /// N x D_in
    pub inputs: DMatrix<f64>,
    pub labels: Vec<usize>,
    /// C x D_in
    pub class_centers: DMatrix<f64>,
}

impl BlobsDataset {
    pub fn num_classes(&self) -> usize {
        self.class_centers.nrows()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlobsSpec {
    pub classes: usize,
    pub input_dim: usize,
    pub n_per_class: usize,
    pub center_spread: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for BlobsSpec {
    fn default() -> Self {
        BlobsSpec {
            classes: 4,
            input_dim: 16,
            n_per_class: 50,
            center_spread: 10.0,
            noise_sigma: 1.0,
            seed: 7,
        }
    }
}

impl BlobsSpec {
    pub fn generate(&self) -> Result<BlobsDataset> {
        make_blobs(
            self.classes,
            self.input_dim,
            self.n_per_class,
            self.center_spread,
            self.noise_sigma,
            self.seed,
        )
    }
}

/// Class centers at pairwise distance >= `center_spread`, each sample its
/// center plus `noise_sigma` isotropic noise. Rows are class-major.
pub fn make_blobs(
    classes: usize,
    input_dim: usize,
    n_per_class: usize,
    center_spread: f64,
    noise_sigma: f64,
    seed: u64,
) -> Result<BlobsDataset> {
    if classes < 2 {
        return Err(Error::Contract(format!(
            "need at least 2 classes, got {classes}"
        )));
    }
    if input_dim == 0 {
        return Err(Error::Contract("input dimension must be at least 1".into()));
    }
    if !(center_spread >= 0.0 && noise_sigma >= 0.0) {
        return Err(Error::Contract(
            "spread and noise must be non-negative".into(),
        ));
    }
    let mut rng = stream_rng(seed, 10);
    let mut centers: Vec<DVector<f64>> = Vec::with_capacity(classes);
    for c in 0..classes {
        let mut placed = false;
        for _ in 0..CENTER_RETRIES {
            let candidate = DVector::from_iterator(
                input_dim,
                (0..input_dim)
                    .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal) * center_spread),
            );
            if centers
                .iter()
                .all(|other| (other - &candidate).norm() >= center_spread)
            {
                centers.push(candidate);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Generation(format!(
                "could not place center {c} at distance >= {center_spread} after {CENTER_RETRIES} draws; \
                 use a larger input dimension or a smaller spread"
            )));
        }
    }
    let class_centers = DMatrix::from_fn(classes, input_dim, |r, c| centers[r][c]);
    let n = classes * n_per_class;
    let noise = gaussian_matrix(&mut rng, n, input_dim);
    let mut inputs = DMatrix::zeros(n, input_dim);
    let mut labels = Vec::with_capacity(n);
    for c in 0..classes {
        for k in 0..n_per_class {
            let i = c * n_per_class + k;
            inputs
                .row_mut(i)
                .copy_from(&(class_centers.row(c) + noise.row(i) * noise_sigma));
            labels.push(c);
        }
    }
    Ok(BlobsDataset {
        inputs,
        labels,
        class_centers,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, z: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            Activation::Relu => z.map(|v| v.max(0.0)),
            Activation::Tanh => z.map(f64::tanh),
        }
    }

    /// Derivative given pre-activation `z` and activation `a`.
    fn derivative(self, z: &DMatrix<f64>, a: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            Activation::Relu => z.map(|v| if v > 0.0 { 1.0 } else { 0.0 }),
            Activation::Tanh => a.map(|v| 1.0 - v * v),
        }
    }
}

impl FromStr for Activation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            other => Err(Error::Contract(format!("unknown activation {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpConfig {
    /// Input width, hidden widths, with the last entry the penultimate width D.
    pub layer_widths: Vec<usize>,
    pub activation: Activation,
    pub epochs: usize,
    /// (first epoch, rate) pairs; the first must start at epoch 0.
    pub lr_schedule: Vec<(usize, f64)>,
    pub weight_decay: f64,
    /// `None` trains full-batch.
    pub batch_size: Option<usize>,
    pub seed: u64,
}

impl Default for MlpConfig {
    fn default() -> Self {
        MlpConfig {
            layer_widths: vec![16, 64, 32],
            activation: Activation::Relu,
            epochs: 600,
            // short low-rate warmup keeps full-batch loss monotone while
            // activations are still large
            lr_schedule: vec![(0, 0.01), (50, 0.1)],
            weight_decay: 0.05,
            batch_size: None,
            seed: 7,
        }
    }
}

impl MlpConfig {
    pub fn validate(&self, data: &BlobsDataset) -> Result<()> {
        if self.layer_widths.len() < 2 {
            return Err(Error::Contract(
                "layer widths need an input width and at least one hidden width".into(),
            ));
        }
        if self.layer_widths.contains(&0) {
            return Err(Error::Contract("layer widths must be >= 1".into()));
        }
        if self.layer_widths[0] != data.inputs.ncols() {
            return Err(Error::Contract(format!(
                "input width {} does not match data width {}",
                self.layer_widths[0],
                data.inputs.ncols()
            )));
        }
        match self.lr_schedule.first() {
            Some((0, _)) => {}
            _ => {
                return Err(Error::Contract(
                    "learning-rate schedule must start at epoch 0".into(),
                ))
            }
        }
        if self.lr_schedule.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err(Error::Contract(
                "learning-rate schedule epochs must increase".into(),
            ));
        }
        if self
            .lr_schedule
            .iter()
            .any(|&(_, r)| !(r >= 0.0 && r.is_finite()))
        {
            return Err(Error::Contract(
                "learning rates must be finite and >= 0".into(),
            ));
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return Err(Error::Contract("weight decay must be >= 0".into()));
        }
        if self.batch_size == Some(0) {
            return Err(Error::Contract("batch size must be >= 1".into()));
        }
        Ok(())
    }

    pub fn learning_rate(&self, epoch: usize) -> f64 {
        self.lr_schedule
            .iter()
            .rev()
            .find(|&&(start, _)| start <= epoch)
            .map_or(0.0, |&(_, r)| r)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// out x in
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
}

impl Dense {
    fn glorot(rng: &mut SynthRng, fan_in: usize, fan_out: usize) -> Self {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let weight = DMatrix::from_fn(fan_out, fan_in, |_, _| rng.random_range(-limit..=limit));
        Dense {
            weight,
            bias: DVector::zeros(fan_out),
        }
    }

    fn forward(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut z = x * self.weight.transpose();
        for mut row in z.row_iter_mut() {
            row += self.bias.transpose();
        }
        z
    }

    fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    fn param_mut(&mut self, idx: usize) -> &mut f64 {
        let nw = self.weight.len();
        if idx < nw {
            &mut self.weight.as_mut_slice()[idx]
        } else {
            &mut self.bias[idx - nw]
        }
    }

    fn param(&self, idx: usize) -> f64 {
        let nw = self.weight.len();
        if idx < nw {
            self.weight.as_slice()[idx]
        } else {
            self.bias[idx - nw]
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub hidden: Vec<Dense>,
    pub head: Dense,
    pub activation: Activation,
}

struct ForwardPass {
    /// inputs of each hidden layer followed by the penultimate activation
    activations: Vec<DMatrix<f64>>,
    pre_activations: Vec<DMatrix<f64>>,
    logits: DMatrix<f64>,
}

impl ForwardPass {
    fn features(&self) -> &DMatrix<f64> {
        self.activations.last().expect("at least the input")
    }
}

/// Mean cross-entropy of `logits` against `labels` and its gradient.
fn cross_entropy(logits: &DMatrix<f64>, labels: &[usize]) -> (f64, DMatrix<f64>) {
    let n = logits.nrows();
    let mut grad = DMatrix::zeros(n, logits.ncols());
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let row = logits.row(i);
        let m = row.max();
        let z: f64 = row.iter().map(|&v| (v - m).exp()).sum();
        loss += m + z.ln() - row[y];
        for c in 0..row.len() {
            grad[(i, c)] = (row[c] - m).exp() / z / n as f64;
        }
        grad[(i, y)] -= 1.0 / n as f64;
    }
    (loss / n as f64, grad)
}

impl Mlp {
    pub fn init(cfg: &MlpConfig, classes: usize) -> Self {
        let mut rng = stream_rng(cfg.seed, 20);
        let hidden = cfg
            .layer_widths
            .windows(2)
            .map(|w| Dense::glorot(&mut rng, w[0], w[1]))
            .collect();
        let d = *cfg.layer_widths.last().expect("validated widths");
        let head = Dense::glorot(&mut rng, d, classes);
        Mlp {
            hidden,
            head,
            activation: cfg.activation,
        }
    }

    fn forward(&self, x: &DMatrix<f64>) -> ForwardPass {
        let mut activations = vec![x.clone()];
        let mut pre_activations = Vec::with_capacity(self.hidden.len());
        for layer in &self.hidden {
            let z = layer.forward(activations.last().expect("nonempty"));
            activations.push(self.activation.apply(&z));
            pre_activations.push(z);
        }
        let logits = self.head.forward(activations.last().expect("nonempty"));
        ForwardPass {
            activations,
            pre_activations,
            logits,
        }
    }

    pub fn penultimate(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut pass = self.forward(x);
        pass.activations.pop().expect("nonempty")
    }

    pub fn logits(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        self.forward(x).logits
    }

    pub fn classifier_head(&self) -> Result<ClassifierHead> {
        ClassifierHead::new(self.head.weight.clone(), self.head.bias.clone())
    }

    fn layers(&self) -> impl Iterator<Item = &Dense> {
        self.hidden.iter().chain(std::iter::once(&self.head))
    }

    pub fn param_count(&self) -> usize {
        self.layers().map(Dense::param_count).sum()
    }

    fn locate(&self, mut idx: usize) -> (usize, usize) {
        for (l, layer) in self.layers().enumerate() {
            if idx < layer.param_count() {
                return (l, idx);
            }
            idx -= layer.param_count();
        }
        panic!("parameter index out of range");
    }

    fn layer_mut(&mut self, l: usize) -> &mut Dense {
        if l < self.hidden.len() {
            &mut self.hidden[l]
        } else {
            &mut self.head
        }
    }

    pub fn param(&self, idx: usize) -> f64 {
        let (l, i) = self.locate(idx);
        self.layers().nth(l).expect("located").param(i)
    }

    pub fn set_param(&mut self, idx: usize, value: f64) {
        let (l, i) = self.locate(idx);
        *self.layer_mut(l).param_mut(i) = value;
    }

    /// Mean cross-entropy plus (weight_decay / 2) * sum of squared weights
    /// (biases are not decayed).
    pub fn loss(&self, x: &DMatrix<f64>, labels: &[usize], weight_decay: f64) -> f64 {
        let (ce, _) = cross_entropy(&self.forward(x).logits, labels);
        ce + 0.5 * weight_decay * self.layers().map(|l| l.weight.norm_squared()).sum::<f64>()
    }

    /// Analytic gradient of [`Mlp::loss`], laid out like the parameter index.
    pub fn gradient(&self, x: &DMatrix<f64>, labels: &[usize], weight_decay: f64) -> Vec<Dense> {
        let pass = self.forward(x);
        self.backward(&pass, labels, weight_decay).1
    }

    fn backward(
        &self,
        pass: &ForwardPass,
        labels: &[usize],
        weight_decay: f64,
    ) -> (f64, Vec<Dense>) {
        let (ce, dlogits) = cross_entropy(&pass.logits, labels);
        let mut grads = Vec::with_capacity(self.hidden.len() + 1);
        let features = pass.features();
        grads.push(Dense {
            weight: dlogits.transpose() * features + &self.head.weight * weight_decay,
            bias: dlogits.row_sum().transpose(),
        });
        let mut upstream = &dlogits * &self.head.weight;
        for l in (0..self.hidden.len()).rev() {
            let z = &pass.pre_activations[l];
            let a = &pass.activations[l + 1];
            let dz = upstream.component_mul(&self.activation.derivative(z, a));
            let input = &pass.activations[l];
            grads.push(Dense {
                weight: dz.transpose() * input + &self.hidden[l].weight * weight_decay,
                bias: dz.row_sum().transpose(),
            });
            if l > 0 {
                upstream = &dz * &self.hidden[l].weight;
            }
        }
        grads.reverse();
        let l2: f64 = self.layers().map(|l| l.weight.norm_squared()).sum();
        (ce + 0.5 * weight_decay * l2, grads)
    }

    fn apply(&mut self, grads: &[Dense], lr: f64) {
        for (layer, g) in self
            .hidden
            .iter_mut()
            .chain(std::iter::once(&mut self.head))
            .zip(grads)
        {
            layer.weight -= &g.weight * lr;
            layer.bias -= &g.bias * lr;
        }
    }

    /// One gradient step on the given batch.
    pub fn step(&mut self, x: &DMatrix<f64>, labels: &[usize], lr: f64, weight_decay: f64) -> f64 {
        let pass = self.forward(x);
        let (loss, grads) = self.backward(&pass, labels, weight_decay);
        self.apply(&grads, lr);
        loss
    }

    pub fn to_tensors(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (i, layer) in self.hidden.iter().enumerate() {
            out.insert(
                format!("hidden{i}_weights"),
                Tensor::from_matrix(&layer.weight),
            );
            out.insert(format!("hidden{i}_bias"), Tensor::from_vector(&layer.bias));
        }
        out.insert("weights".to_owned(), Tensor::from_matrix(&self.head.weight));
        out.insert("bias".to_owned(), Tensor::from_vector(&self.head.bias));
        out
    }

    /// Per-layer tensors plus the head under the `weights`/`bias` roles, so the
    /// bundle also reads as a classifier head.
    pub fn write_bundle(&self, dir: &Path, name: &str) -> Result<PathBuf> {
        let tensors = self.to_tensors();
        let manifest = BundleManifest::for_roles(name, tensors.keys().map(String::as_str))
            .with_meta("kind", "mlp")
            .with_meta("hidden_layers", self.hidden.len().to_string())
            .with_meta(
                "activation",
                match self.activation {
                    Activation::Relu => "relu",
                    Activation::Tanh => "tanh",
                },
            );
        tensor_store::write_bundle(&manifest, &tensors, dir)
    }
}

/// Neural-collapse diagnostics for one set of features and a head.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NcReport {
    /// trace(Sigma_W) / trace(Sigma_B)
    pub nc1: f64,
    /// Coefficient of variation of ||mu_c - mu_G||.
    pub nc2_norm_spread: f64,
    /// Largest deviation of a centered-mean cosine from the simplex value.
    pub nc2_angle_gap: f64,
    /// Mean distance between unit w_c and unit (mu_c - mu_G).
    pub nc3_duality_gap: f64,
    /// Fraction of samples where the head agrees with the nearest class mean.
    pub nc4_agreement: f64,
    /// Mean cosine between h - mu_G and the weight of the sample's label.
    pub theorem1_alignment: f64,
}

fn cosine(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    let d = a.norm() * b.norm();
    if d == 0.0 {
        0.0
    } else {
        a.dot(b) / d
    }
}

fn unit(v: DVector<f64>) -> DVector<f64> {
    let n = v.norm();
    if n == 0.0 {
        v
    } else {
        v / n
    }
}

pub fn nc_metrics(
    features: &DMatrix<f64>,
    labels: &[usize],
    head: &ClassifierHead,
) -> Result<NcReport> {
    head.check_width(features)?;
    if labels.len() != features.nrows() {
        return Err(Error::Contract(format!(
            "{} labels for {} feature rows",
            labels.len(),
            features.nrows()
        )));
    }
    let c = head.num_classes();
    let (means, _) = class_means(features, labels, c).map_err(|e| match e {
        Error::Fit(msg) => Error::Contract(msg),
        other => other,
    })?;
    let mu_g = column_mean(features);
    let centered_means: Vec<DVector<f64>> =
        (0..c).map(|k| means.row(k).transpose() - &mu_g).collect();

    let n = features.nrows() as f64;
    let trace_w: f64 = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| (features.row(i) - means.row(y)).norm_squared())
        .sum::<f64>()
        / n;
    let trace_b: f64 = centered_means.iter().map(|m| m.norm_squared()).sum::<f64>() / c as f64;
    let nc1 = if trace_w == 0.0 {
        0.0
    } else if trace_b == 0.0 {
        f64::INFINITY
    } else {
        trace_w / trace_b
    };

    let norms: Vec<f64> = centered_means.iter().map(|m| m.norm()).collect();
    let mean_norm = norms.iter().sum::<f64>() / c as f64;
    let var = norms.iter().map(|v| (v - mean_norm).powi(2)).sum::<f64>() / c as f64;
    let nc2_norm_spread = if mean_norm == 0.0 {
        0.0
    } else {
        var.sqrt() / mean_norm
    };

    let off_target = -1.0 / (c as f64 - 1.0);
    let mut nc2_angle_gap: f64 = 0.0;
    for a in 0..c {
        for b in (a + 1)..c {
            let cos = cosine(&centered_means[a], &centered_means[b]);
            nc2_angle_gap = nc2_angle_gap.max((cos - off_target).abs());
        }
    }

    let nc3_duality_gap = (0..c)
        .map(|k| {
            let w = unit(head.weights().row(k).transpose());
            (w - unit(centered_means[k].clone())).norm()
        })
        .sum::<f64>()
        / c as f64;

    let logits_pred = argmax_rows(&crate::dataset::compute_logits(head, features)?);
    let agree = (0..features.nrows())
        .filter(|&i| {
            let h = features.row(i);
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for k in 0..c {
                let d = (h - means.row(k)).norm_squared();
                if d < best_d {
                    best_d = d;
                    best = k;
                }
            }
            best == logits_pred[i]
        })
        .count();
    let nc4_agreement = if features.nrows() == 0 {
        1.0
    } else {
        agree as f64 / n
    };

    let theorem1_alignment = if features.nrows() == 0 {
        0.0
    } else {
        labels
            .iter()
            .enumerate()
            .map(|(i, &y)| {
                let g = features.row(i).transpose() - &mu_g;
                cosine(&g, &head.weights().row(y).transpose())
            })
            .sum::<f64>()
            / n
    };

    Ok(NcReport {
        nc1,
        nc2_norm_spread,
        nc2_angle_gap,
        nc3_duality_gap,
        nc4_agreement,
        theorem1_alignment,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub nc: NcReport,
}

/// One record per epoch, each taken on the full training set before that
/// epoch's parameter updates.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainTrace {
    pub records: Vec<EpochRecord>,
}

pub const TRACE_HEADER: &str = "epoch,train_loss,train_accuracy,nc1,nc2_norm_spread,nc2_angle_gap,nc3_duality_gap,nc4_agreement,theorem1_alignment";

impl TrainTrace {
    pub fn first(&self) -> Option<&EpochRecord> {
        self.records.first()
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }

    /// CSV with 17 significant digits per value.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(TRACE_HEADER);
        out.push('\n');
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}",
                r.epoch,
                r.train_loss,
                r.train_accuracy,
                r.nc.nc1,
                r.nc.nc2_norm_spread,
                r.nc.nc2_angle_gap,
                r.nc.nc3_duality_gap,
                r.nc.nc4_agreement,
                r.nc.theorem1_alignment
            );
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h.trim() == TRACE_HEADER => {}
            _ => return Err(Error::Format("trace CSV header mismatch".into())),
        }
        let mut records = Vec::new();
        for (i, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            let bad = || Error::Format(format!("trace CSV line {}: malformed row", i + 2));
            if fields.len() != 9 {
                return Err(bad());
            }
            let v = |k: usize| fields[k].trim().parse::<f64>().map_err(|_| bad());
            records.push(EpochRecord {
                epoch: fields[0].trim().parse().map_err(|_| bad())?,
                train_loss: v(1)?,
                train_accuracy: v(2)?,
                nc: NcReport {
                    nc1: v(3)?,
                    nc2_norm_spread: v(4)?,
                    nc2_angle_gap: v(5)?,
                    nc3_duality_gap: v(6)?,
                    nc4_agreement: v(7)?,
                    theorem1_alignment: v(8)?,
                },
            });
        }
        Ok(TrainTrace { records })
    }
}

fn accuracy(logits: &DMatrix<f64>, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let pred = argmax_rows(logits);
    pred.iter().zip(labels).filter(|(p, y)| p == y).count() as f64 / labels.len() as f64
}

fn record_for(
    model: &Mlp,
    pass: &ForwardPass,
    data: &BlobsDataset,
    epoch: usize,
    wd: f64,
) -> Result<EpochRecord> {
    let (ce, _) = cross_entropy(&pass.logits, &data.labels);
    let l2: f64 = model.layers().map(|l| l.weight.norm_squared()).sum();
    let train_loss = ce + 0.5 * wd * l2;
    if !train_loss.is_finite() {
        return Err(Error::Training {
            epoch,
            reason: format!("loss became {train_loss}"),
        });
    }
    // head rows can only be all-zero through a degenerate run; report as divergence
    let head = model.classifier_head().map_err(|e| Error::Training {
        epoch,
        reason: e.to_string(),
    })?;
    Ok(EpochRecord {
        epoch,
        train_loss,
        train_accuracy: accuracy(&pass.logits, &data.labels),
        nc: nc_metrics(pass.features(), &data.labels, &head)?,
    })
}

pub fn train_mlp(cfg: &MlpConfig, data: &BlobsDataset) -> Result<(Mlp, TrainTrace)> {
    cfg.validate(data)?;
    let mut model = Mlp::init(cfg, data.num_classes());
    let mut trace = TrainTrace::default();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut shuffle_rng = stream_rng(cfg.seed, 21);
    for epoch in 0..cfg.epochs {
        let lr = cfg.learning_rate(epoch);
        let pass = model.forward(&data.inputs);
        trace
            .records
            .push(record_for(&model, &pass, data, epoch, cfg.weight_decay)?);
        match cfg.batch_size {
            None => {
                let (_, grads) = model.backward(&pass, &data.labels, cfg.weight_decay);
                model.apply(&grads, lr);
            }
            Some(b) => {
                order.shuffle(&mut shuffle_rng);
                for chunk in order.chunks(b) {
                    let x = DMatrix::from_fn(chunk.len(), data.inputs.ncols(), |r, c| {
                        data.inputs[(chunk[r], c)]
                    });
                    let y: Vec<usize> = chunk.iter().map(|&i| data.labels[i]).collect();
                    let loss = model.step(&x, &y, lr, cfg.weight_decay);
                    if !loss.is_finite() {
                        return Err(Error::Training {
                            epoch,
                            reason: format!("batch loss became {loss}"),
                        });
                    }
                }
            }
        }
    }
    Ok((model, trace))
}

/// (f(x + h) - f(x - h)) / 2h
pub fn central_difference(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

/// |a - b| / max(|a|, |b|), with the denominator floored at 1e-6 so that
/// vanishing gradients are compared in absolute terms.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-6);
    (analytic - numeric).abs() / denom
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// Probes actually compared.
    pub probes: usize,
    /// Probes discarded because +-fd_step moved some ReLU pre-activation
    /// across zero, where the loss is not differentiable.
    pub kink_skips: usize,
}

fn relu_pattern(model: &Mlp, x: &DMatrix<f64>) -> Vec<bool> {
    model
        .forward(x)
        .pre_activations
        .iter()
        .flat_map(|z| z.iter().map(|&v| v > 0.0).collect::<Vec<_>>())
        .collect()
}

/// Train per `cfg`, then compare the analytic full-batch gradient with
/// central differences at `probe_count` seeded random parameters.
pub fn grad_check(
    cfg: &MlpConfig,
    data: &BlobsDataset,
    probe_count: usize,
    fd_step: f64,
) -> Result<GradCheckReport> {
    let (mut model, _) = train_mlp(cfg, data)?;
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        probes: 0,
        kink_skips: 0,
    };
    if probe_count == 0 {
        return Ok(report);
    }
    let grads = model.gradient(&data.inputs, &data.labels, cfg.weight_decay);
    let flat: Vec<f64> = grads
        .iter()
        .flat_map(|g| g.weight.as_slice().iter().chain(g.bias.iter()).copied())
        .collect();
    let total = model.param_count();
    let check_kinks = model.activation == Activation::Relu;
    let base_pattern = if check_kinks {
        relu_pattern(&model, &data.inputs)
    } else {
        Vec::new()
    };
    let mut rng = stream_rng(cfg.seed, 22);
    let max_draws = probe_count.saturating_mul(20);
    let mut draws = 0;
    while report.probes < probe_count && draws < max_draws {
        draws += 1;
        let idx = rng.random_range(0..total);
        let original = model.param(idx);
        model.set_param(idx, original + fd_step);
        let up = model.loss(&data.inputs, &data.labels, cfg.weight_decay);
        let kink_up = check_kinks && relu_pattern(&model, &data.inputs) != base_pattern;
        model.set_param(idx, original - fd_step);
        let down = model.loss(&data.inputs, &data.labels, cfg.weight_decay);
        let kink_down = check_kinks && relu_pattern(&model, &data.inputs) != base_pattern;
        model.set_param(idx, original);
        if kink_up || kink_down {
            report.kink_skips += 1;
            continue;
        }
        let numeric = (up - down) / (2.0 * fd_step);
        report.probes += 1;
        report.max_relative_error = report
            .max_relative_error
            .max(relative_error(flat[idx], numeric));
    }
    Ok(report)
}
