//! Brute-force reference implementations and random problem builders shared
//! by the integration suites. The oracles use plain loops and a different
//! factorization path from the library so agreement is meaningful.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use ncood::synth::{gaussian_matrix, stream_rng, SynthRng};
use ncood::{ClassifierHead, FeatureSet};
use rand::Rng;

pub fn rng(seed: u64) -> SynthRng {
    stream_rng(seed, 0)
}

/// Labelled Gaussian clusters around random class centers plus a random head.
pub fn random_problem(
    rng: &mut SynthRng,
    classes: usize,
    dim: usize,
    n_per_class: usize,
) -> (FeatureSet, ClassifierHead) {
    let centers = gaussian_matrix(rng, classes, dim) * 3.0;
    let noise = gaussian_matrix(rng, classes * n_per_class, dim);
    let labels: Vec<usize> = (0..classes * n_per_class).map(|i| i % classes).collect();
    let features = DMatrix::from_fn(labels.len(), dim, |i, j| {
        centers[(labels[i], j)] + noise[(i, j)]
    });
    let weights = gaussian_matrix(rng, classes, dim);
    let bias = DVector::from_fn(classes, |_, _| rng.random_range(-0.5..0.5));
    let head = ClassifierHead::new(weights, bias).unwrap();
    (
        FeatureSet::new(features, Some(labels), "random").unwrap(),
        head,
    )
}

pub fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn mean_row(rows: &[Vec<f64>]) -> Vec<f64> {
    let d = rows[0].len();
    let mut m = vec![0.0; d];
    for r in rows {
        for j in 0..d {
            m[j] += r[j];
        }
    }
    m.iter().map(|v| v / rows.len() as f64).collect()
}

pub fn logits(head: &ClassifierHead, h: &[f64]) -> Vec<f64> {
    let w = rows(head.weights());
    w.iter()
        .enumerate()
        .map(|(c, wc)| dot(wc, h) + head.bias()[c])
        .collect()
}

/// First index of the maximum.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i] > v[best] {
            best = i;
        }
    }
    best
}

pub fn oracle_p_score(
    features: &DMatrix<f64>,
    train: &DMatrix<f64>,
    head: &ClassifierHead,
) -> Vec<f64> {
    let mu = mean_row(&rows(train));
    let w = rows(head.weights());
    rows(features)
        .iter()
        .map(|h| {
            let c = argmax(&logits(head, h));
            let g: Vec<f64> = h.iter().zip(&mu).map(|(a, b)| a - b).collect();
            let gn = norm(&g);
            if gn < 1e-12 {
                0.0
            } else {
                dot(&g, &w[c]) / gn
            }
        })
        .collect()
}

/// Pairwise count of ID > OOD with ties as one half.
pub fn oracle_auroc(id: &[f64], ood: &[f64]) -> f64 {
    let mut wins = 0.0;
    for &a in id {
        for &b in ood {
            if a > b {
                wins += 1.0;
            } else if a == b {
                wins += 0.5;
            }
        }
    }
    wins / (id.len() * ood.len()) as f64
}

/// Scan every candidate threshold from the top; keep the largest one whose
/// ID acceptance rate reaches the target.
pub fn oracle_fpr(id: &[f64], ood: &[f64], target: f64) -> f64 {
    let mut candidates = id.to_vec();
    candidates.sort_by(|a, b| b.partial_cmp(a).unwrap());
    for &t in &candidates {
        let tpr = id.iter().filter(|&&s| s >= t).count() as f64 / id.len() as f64;
        if tpr >= target {
            return ood.iter().filter(|&&s| s >= t).count() as f64 / ood.len() as f64;
        }
    }
    unreachable!("the smallest ID score always reaches any target <= 1")
}

pub fn oracle_class_means(
    features: &DMatrix<f64>,
    labels: &[usize],
    classes: usize,
) -> Vec<Vec<f64>> {
    let r = rows(features);
    (0..classes)
        .map(|c| {
            let members: Vec<Vec<f64>> = r
                .iter()
                .zip(labels)
                .filter(|(_, &l)| l == c)
                .map(|(x, _)| x.clone())
                .collect();
            mean_row(&members)
        })
        .collect()
}

pub fn oracle_sigma_w(features: &DMatrix<f64>, labels: &[usize], classes: usize) -> DMatrix<f64> {
    let means = oracle_class_means(features, labels, classes);
    let d = features.ncols();
    let n = features.nrows();
    let mut s = DMatrix::zeros(d, d);
    for i in 0..n {
        for a in 0..d {
            for b in 0..d {
                s[(a, b)] += (features[(i, a)] - means[labels[i]][a])
                    * (features[(i, b)] - means[labels[i]][b]);
            }
        }
    }
    s / n as f64
}

pub fn oracle_mahalanobis(
    features: &DMatrix<f64>,
    train: &FeatureSet,
    classes: usize,
    ridge: f64,
) -> Vec<f64> {
    let labels = train.labels.as_ref().unwrap();
    let means = oracle_class_means(&train.features, labels, classes);
    let d = train.dim();
    let cov = oracle_sigma_w(&train.features, labels, classes) + DMatrix::identity(d, d) * ridge;
    let precision = cov.lu().try_inverse().unwrap();
    rows(features)
        .iter()
        .map(|h| {
            means
                .iter()
                .map(|mu| {
                    let diff = DVector::from_iterator(d, h.iter().zip(mu).map(|(a, b)| a - b));
                    -(diff.transpose() * &precision * &diff)[(0, 0)]
                })
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect()
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = norm(v);
    if n > 0.0 {
        v.iter().map(|x| x / n).collect()
    } else {
        v.to_vec()
    }
}

pub fn oracle_knn(features: &DMatrix<f64>, train: &DMatrix<f64>, k: usize) -> Vec<f64> {
    let bank: Vec<Vec<f64>> = rows(train).iter().map(|r| unit(r)).collect();
    rows(features)
        .iter()
        .map(|q| {
            let q = unit(q);
            let mut d: Vec<f64> = bank
                .iter()
                .map(|b| norm(&b.iter().zip(&q).map(|(x, y)| x - y).collect::<Vec<_>>()))
                .collect();
            d.sort_by(|a, b| a.partial_cmp(b).unwrap());
            -d[k - 1]
        })
        .collect()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}
