//! Proximity of centered features to the predicted class's weight vector,
//! optionally combined with a norm filter on the raw feature.
//!
//! All scores are "higher = more in-distribution". The predicted class of each
//! row comes from the full head (weights and bias), while the proximity terms
//! use only the weight row w_c of that class.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVectorView, RowDVector};

use crate::dataset::{predict_classes, ClassifierHead, TrainStats};
use crate::error::{Error, Result};

pub const DEFAULT_EPSILON: f64 = 1e-12;

/// Candidate filter strengths for the noise-validation sweep.
pub const ALPHA_GRID: [f64; 4] = [0.001, 0.01, 0.1, 1.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FilterNorm {
    #[default]
    L1,
    L2,
    Linf,
}

impl FilterNorm {
    pub fn apply<'a>(self, values: impl IntoIterator<Item = &'a f64>) -> f64 {
        let it = values.into_iter();
        match self {
            FilterNorm::L1 => it.map(|v| v.abs()).sum(),
            FilterNorm::L2 => it.map(|v| v * v).sum::<f64>().sqrt(),
            FilterNorm::Linf => it.fold(0.0, |m, v| m.max(v.abs())),
        }
    }
}

impl fmt::Display for FilterNorm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FilterNorm::L1 => "l1",
            FilterNorm::L2 => "l2",
            FilterNorm::Linf => "linf",
        })
    }
}

impl FromStr for FilterNorm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "l1" => Ok(FilterNorm::L1),
            "l2" => Ok(FilterNorm::L2),
            "linf" | "inf" => Ok(FilterNorm::Linf),
            other => Err(Error::Contract(format!(
                "unknown filter norm {other:?} (expected l1, l2 or linf)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NcScoreConfig {
    pub alpha: f64,
    pub filter_norm: FilterNorm,
    pub epsilon: f64,
}

impl Default for NcScoreConfig {
    fn default() -> Self {
        NcScoreConfig {
            alpha: 0.01,
            filter_norm: FilterNorm::L1,
            epsilon: DEFAULT_EPSILON,
        }
    }
}

impl NcScoreConfig {
    pub fn new(alpha: f64, filter_norm: FilterNorm) -> Result<Self> {
        let cfg = NcScoreConfig {
            alpha,
            filter_norm,
            epsilon: DEFAULT_EPSILON,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Contract(format!(
                "alpha must be finite and >= 0, got {}",
                self.alpha
            )));
        }
        if self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return Err(Error::Contract(format!(
                "epsilon must be > 0, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }
}

/// Per-row centered feature g = h - mu_G paired with the predicted class.
struct Centered {
    g: DMatrix<f64>,
    classes: Vec<usize>,
}

fn center(features: &DMatrix<f64>, stats: &TrainStats, head: &ClassifierHead) -> Result<Centered> {
    head.check_width(features)?;
    stats.check_head(head)?;
    let classes = predict_classes(head, features)?;
    let mut g = features.clone();
    let mu: RowDVector<f64> = stats.mu_g.transpose();
    for mut row in g.row_iter_mut() {
        row -= &mu;
    }
    Ok(Centered { g, classes })
}

fn proximity(
    features: &DMatrix<f64>,
    stats: &TrainStats,
    head: &ClassifierHead,
    epsilon: f64,
    normalize_weight: bool,
) -> Result<Vec<f64>> {
    let Centered { g, classes } = center(features, stats, head)?;
    let w = head.weights();
    Ok(classes
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            let gi = g.row(i);
            let g_norm = gi.norm();
            if g_norm < epsilon {
                return 0.0;
            }
            let wc = w.row(c);
            let s = gi.dot(&wc) / g_norm;
            if normalize_weight {
                s / wc.norm()
            } else {
                s
            }
        })
        .collect())
}

/// (g . w_c) / ||g||, the length of w_c's projection onto the centered feature.
pub fn p_score(
    features: &DMatrix<f64>,
    stats: &TrainStats,
    head: &ClassifierHead,
) -> Result<Vec<f64>> {
    proximity(features, stats, head, DEFAULT_EPSILON, false)
}

/// alpha * ||h||_p + p_score, with the norm taken on the raw (uncentered) feature.
pub fn nc_score(
    features: &DMatrix<f64>,
    stats: &TrainStats,
    head: &ClassifierHead,
    cfg: &NcScoreConfig,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    let p = proximity(features, stats, head, cfg.epsilon, false)?;
    Ok(p.into_iter()
        .enumerate()
        .map(|(i, p)| cfg.alpha * cfg.filter_norm.apply(features.row(i).iter()) + p)
        .collect())
}

/// The filter term alone, ||h||_p per row.
pub fn norm_score(features: &DMatrix<f64>, norm: FilterNorm) -> Vec<f64> {
    features.row_iter().map(|r| norm.apply(r.iter())).collect()
}

/// Cosine between g and w_c.
pub fn cos_score(
    features: &DMatrix<f64>,
    stats: &TrainStats,
    head: &ClassifierHead,
) -> Result<Vec<f64>> {
    proximity(features, stats, head, DEFAULT_EPSILON, true)
}

/// -||g - lambda_c w_c||.
pub fn dist_score(
    features: &DMatrix<f64>,
    stats: &TrainStats,
    head: &ClassifierHead,
) -> Result<Vec<f64>> {
    let Centered { g, classes } = center(features, stats, head)?;
    let w = head.weights();
    Ok(classes
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            let target = w.row(c) * stats.lambda_c[c];
            -(g.row(i) - target).norm()
        })
        .collect())
}

/// Whether `g` lies in the cone {cos(g, w) >= tau / ||w||} that a p_score
/// threshold tau selects for a class with weight `w`.
pub fn in_score_cone(g: DVectorView<f64>, w: DVectorView<f64>, tau: f64) -> bool {
    let (gn, wn) = (g.norm(), w.norm());
    if gn < DEFAULT_EPSILON {
        return tau <= 0.0;
    }
    g.dot(&w) / (gn * wn) >= tau / wn
}
