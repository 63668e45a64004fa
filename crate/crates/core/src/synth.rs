//! Synthetic feature worlds with collapsed geometry: class weights form a
//! simplex ETF, in-distribution features sit at lambda * w_c plus isotropic
//! noise, and OOD features are placed near the origin, in random directions,
//! or inside the class cones close to the origin.
//!
//! Randomness comes from SplitMix64 (64-bit state) seeded per stream, with
//! normals drawn by `rand_distr::StandardNormal`, so a seed pins every value.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use rand_xoshiro::SplitMix64;

use crate::dataset::{ClassifierHead, FeatureSet};
use crate::error::{Error, Result};

pub type SynthRng = SplitMix64;

const STREAM_STRIDE: u64 = 0x9E37_79B9_7F4A_7C15;

/// Independent generator for `stream` under a user seed.
pub fn stream_rng(seed: u64, stream: u64) -> SynthRng {
    SplitMix64::seed_from_u64(seed.wrapping_add(stream.wrapping_mul(STREAM_STRIDE)))
}

pub fn gaussian_matrix(rng: &mut SynthRng, rows: usize, cols: usize) -> DMatrix<f64> {
    // fill row by row so the draw order matches the row-major layout
    let mut m = DMatrix::zeros(rows, cols);
    for r in 0..rows {
        for c in 0..cols {
            m[(r, c)] = rng.sample(StandardNormal);
        }
    }
    m
}

#[derive(Debug, Clone)]
pub struct EtfFrame {
    /// C x D
    pub vectors: DMatrix<f64>,
    pub norm: f64,
}

impl EtfFrame {
    pub fn num_classes(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn cosine(&self, a: usize, b: usize) -> f64 {
        let (ra, rb) = (self.vectors.row(a), self.vectors.row(b));
        ra.dot(&rb) / (ra.norm() * rb.norm())
    }
}

/// C equal-norm vectors in R^D with pairwise cosine -1/(C-1), embedded through
/// a seeded random orthonormal D x C basis.
pub fn simplex_etf(classes: usize, dim: usize, norm: f64, seed: u64) -> Result<EtfFrame> {
    if classes < 2 {
        return Err(Error::Construction(format!(
            "simplex needs at least 2 classes, got {classes}"
        )));
    }
    if dim < classes {
        return Err(Error::Construction(format!(
            "dimension {dim} is smaller than the class count {classes}"
        )));
    }
    if !(norm > 0.0 && norm.is_finite()) {
        return Err(Error::Construction(format!(
            "row norm must be positive, got {norm}"
        )));
    }
    let mut rng = stream_rng(seed, 0);
    let basis = gaussian_matrix(&mut rng, dim, classes).qr().q();
    let c = classes as f64;
    let centering = DMatrix::<f64>::identity(classes, classes)
        - DMatrix::from_element(classes, classes, 1.0 / c);
    let scale = norm * (c / (c - 1.0)).sqrt();
    let mut vectors = (basis * centering).transpose() * scale;
    // remove residual rounding in the row norms
    for mut row in vectors.row_iter_mut() {
        let n = row.norm();
        row *= norm / n;
    }
    Ok(EtfFrame { vectors, norm })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OodMode {
    NearOrigin,
    RandomDirection,
    InConeNearOrigin,
}

impl fmt::Display for OodMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OodMode::NearOrigin => "near-origin",
            OodMode::RandomDirection => "random-direction",
            OodMode::InConeNearOrigin => "in-cone-near-origin",
        })
    }
}

impl FromStr for OodMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.replace('_', "-").as_str() {
            "near-origin" => Ok(OodMode::NearOrigin),
            "random-direction" => Ok(OodMode::RandomDirection),
            "in-cone-near-origin" => Ok(OodMode::InConeNearOrigin),
            other => Err(Error::Contract(format!("unknown OOD mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub classes: usize,
    pub dim: usize,
    pub n_per_class: usize,
    /// lambda: ID cluster centers sit at lambda * w_c.
    pub scale: f64,
    pub noise_sigma: f64,
    pub ood_mode: OodMode,
    pub n_ood: usize,
    /// Radius of the near-origin modes as a fraction of lambda * ||w||.
    pub ood_radius_fraction: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            classes: 10,
            dim: 32,
            n_per_class: 100,
            scale: 5.0,
            noise_sigma: 0.5,
            ood_mode: OodMode::NearOrigin,
            n_ood: 1000,
            ood_radius_fraction: 0.3,
            seed: 7,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Contract(format!(
                "need at least 2 classes, got {}",
                self.classes
            )));
        }
        if self.dim < self.classes {
            return Err(Error::Contract(format!(
                "dim {} must be at least the class count {}",
                self.dim, self.classes
            )));
        }
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::Contract(format!(
                "scale must be positive, got {}",
                self.scale
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Contract(format!(
                "noise sigma must be >= 0, got {}",
                self.noise_sigma
            )));
        }
        if !(self.ood_radius_fraction > 0.0 && self.ood_radius_fraction.is_finite()) {
            return Err(Error::Contract(format!(
                "OOD radius fraction must be positive, got {}",
                self.ood_radius_fraction
            )));
        }
        Ok(())
    }

    pub fn frame(&self) -> Result<EtfFrame> {
        self.validate()?;
        simplex_etf(self.classes, self.dim, 1.0, self.seed)
    }
}

// stream ids; one generator per generated artifact
const STREAM_ID: u64 = 1;
const STREAM_OOD: u64 = 2;

fn id_features_from(frame: &EtfFrame, spec: &SynthSpec, rng: &mut SynthRng) -> FeatureSet {
    let (c, d) = (frame.num_classes(), frame.dim());
    let n = c * spec.n_per_class;
    let noise = gaussian_matrix(rng, n, d);
    let mut features = DMatrix::zeros(n, d);
    let mut labels = Vec::with_capacity(n);
    for class in 0..c {
        for k in 0..spec.n_per_class {
            let i = class * spec.n_per_class + k;
            let mut row = features.row_mut(i);
            row.copy_from(
                &(frame.vectors.row(class) * spec.scale + noise.row(i) * spec.noise_sigma),
            );
            labels.push(class);
        }
    }
    FeatureSet {
        features,
        labels: Some(labels),
        name: "synth-id".to_owned(),
    }
}

/// Labelled ID features at lambda * w_c + sigma * z, and the head whose rows
/// are the frame vectors (zero bias).
pub fn gen_id_features(frame: &EtfFrame, spec: &SynthSpec) -> Result<(FeatureSet, ClassifierHead)> {
    spec.validate()?;
    let head = ClassifierHead::without_bias(frame.vectors.clone())?;
    let mut rng = stream_rng(spec.seed, STREAM_ID);
    Ok((id_features_from(frame, spec, &mut rng), head))
}

fn ood_features_from(
    frame: &EtfFrame,
    spec: &SynthSpec,
    mode: OodMode,
    rng: &mut SynthRng,
) -> FeatureSet {
    let (c, d) = (frame.num_classes(), frame.dim());
    let n = spec.n_ood;
    let id_radius = spec.scale * frame.norm;
    let radius = spec.ood_radius_fraction * id_radius;
    let mut features = DMatrix::zeros(n, d);
    for i in 0..n {
        let z = DVector::from_iterator(d, (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)));
        let row = match mode {
            OodMode::NearOrigin => z * (radius / (d as f64).sqrt()),
            OodMode::RandomDirection => {
                let n = z.norm();
                z * (id_radius / n)
            }
            OodMode::InConeNearOrigin => {
                // an ID sample of a random class, shrunk toward the origin:
                // same angles to w_c as ID, a fraction of the ID radius
                let class = rng.random_range(0..c);
                let id_like =
                    frame.vectors.row(class).transpose() * spec.scale + z * spec.noise_sigma;
                id_like * spec.ood_radius_fraction
            }
        };
        features.row_mut(i).copy_from(&row.transpose());
    }
    FeatureSet {
        features,
        labels: None,
        name: format!("synth-ood-{mode}"),
    }
}

pub fn gen_ood_features(frame: &EtfFrame, spec: &SynthSpec) -> Result<FeatureSet> {
    spec.validate()?;
    let mut rng = stream_rng(spec.seed, STREAM_OOD);
    Ok(ood_features_from(frame, spec, spec.ood_mode, &mut rng))
}

/// Everything a detection experiment needs, each part on its own stream.
#[derive(Debug, Clone)]
pub struct SynthWorld {
    pub frame: EtfFrame,
    pub head: ClassifierHead,
    pub train: FeatureSet,
    pub id_test: FeatureSet,
    pub ood_test: FeatureSet,
    pub id_val: FeatureSet,
    /// Stand-in for features of Gaussian-noise images: low-norm points that
    /// land inside the class cones.
    pub noise_val: FeatureSet,
}

impl SynthWorld {
    pub fn generate(spec: &SynthSpec) -> Result<Self> {
        let frame = spec.frame()?;
        let (train, head) = gen_id_features(&frame, spec)?;
        let ood_test = gen_ood_features(&frame, spec)?;

        let mut rng = stream_rng(spec.seed, 3);
        let mut id_test = id_features_from(&frame, spec, &mut rng);
        id_test.name = "synth-id-test".into();
        let mut rng = stream_rng(spec.seed, 4);
        let mut id_val = id_features_from(&frame, spec, &mut rng);
        id_val.name = "synth-id-val".into();
        let mut rng = stream_rng(spec.seed, 5);
        let mut noise_val = ood_features_from(&frame, spec, OodMode::InConeNearOrigin, &mut rng);
        noise_val.name = "synth-noise-val".into();

        Ok(SynthWorld {
            frame,
            head,
            train,
            id_test,
            ood_test,
            id_val,
            noise_val,
        })
    }
}
