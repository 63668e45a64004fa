//! Command-line front end. Every subcommand is a plain function over parsed
//! arguments so the binary and the tests share one code path.
//!
//! Exit codes: 0 success, 2 usage or contract error, 3 i/o error, 4 numerical
//! failure.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use sha2::{Digest, Sha256};

use crate::baselines::{
    self, default_ridge, dice_score, energy_score, fit_dice, fit_react, knn_score, mahalanobis_fit,
    mahalanobis_score, msp_score, react_score, tied_covariance, KnnIndex, ReactClip,
};
use crate::collapse::{self, Activation, BlobsSpec, MlpConfig};
use crate::dataset::{
    compute_logits, compute_train_stats, predict_classes, ClassifierHead, FeatureSet, TrainStats,
};
use crate::error::{Error, Result};
use crate::metrics::{self, auroc};
use crate::nc_scores::{self, FilterNorm, NcScoreConfig, ALPHA_GRID};
use crate::synth::{OodMode, SynthSpec, SynthWorld};
use crate::tensor_store::{self, BundleManifest};

pub const SCORE_HEADER: [&str; 3] = ["index", "predicted_class", "score"];
pub const HISTOGRAM_BINS: usize = 50;

#[derive(Debug, Parser)]
#[command(
    name = "ncood",
    version,
    about = "Post-hoc OOD detection from penultimate features"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit training statistics (means, within-class covariance, scales).
    Stats(StatsArgs),
    /// Score a feature bundle with one detector.
    Score(ScoreArgs),
    /// AUROC / FPR95 of ID scores against one or more OOD score files.
    Eval(EvalArgs),
    /// Pick the filter strength alpha on ID vs noise validation features.
    SweepAlpha(SweepArgs),
    /// Write a synthetic collapsed-geometry world as bundles.
    Synth(SynthArgs),
    /// Train the small MLP on blobs and trace collapse diagnostics.
    Collapse(CollapseArgs),
    /// Histogram score files over shared uniform bins.
    Histogram(HistogramArgs),
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    /// Training bundle with features and labels.
    #[arg(long)]
    pub train: PathBuf,
    /// Bundle with head weights and bias; defaults to the training bundle.
    #[arg(long)]
    pub head: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Detector {
    Ncood,
    Pscore,
    Cosscore,
    Distscore,
    Msp,
    Energy,
    React,
    Dice,
    Mahalanobis,
    Knn,
}

impl Detector {
    pub fn name(self) -> &'static str {
        match self {
            Detector::Ncood => "ncood",
            Detector::Pscore => "pscore",
            Detector::Cosscore => "cosscore",
            Detector::Distscore => "distscore",
            Detector::Msp => "msp",
            Detector::Energy => "energy",
            Detector::React => "react",
            Detector::Dice => "dice",
            Detector::Mahalanobis => "mahalanobis",
            Detector::Knn => "knn",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum NormArg {
    L1,
    L2,
    Linf,
}

impl From<NormArg> for FilterNorm {
    fn from(n: NormArg) -> Self {
        match n {
            NormArg::L1 => FilterNorm::L1,
            NormArg::L2 => FilterNorm::L2,
            NormArg::Linf => FilterNorm::Linf,
        }
    }
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[arg(long, value_enum)]
    pub detector: Detector,
    /// Bundle with the features to score.
    #[arg(long)]
    pub features: PathBuf,
    /// Bundle with head weights and bias.
    #[arg(long)]
    pub head: PathBuf,
    /// Stats bundle from `ncood stats` (ncood, pscore, cosscore, distscore, dice).
    #[arg(long)]
    pub stats: Option<PathBuf>,
    /// Training features (react, mahalanobis, knn).
    #[arg(long)]
    pub train: Option<PathBuf>,
    #[arg(long, default_value_t = 0.01)]
    pub alpha: f64,
    #[arg(long, value_enum, default_value_t = NormArg::L1)]
    pub filter_norm: NormArg,
    #[arg(long, default_value_t = baselines::DEFAULT_KNN_K)]
    pub k: usize,
    #[arg(long, default_value_t = baselines::DEFAULT_REACT_PERCENTILE)]
    pub react_percentile: f64,
    /// Fixed clip value instead of fitting a percentile on --train.
    #[arg(long)]
    pub react_threshold: Option<f64>,
    #[arg(long, default_value_t = baselines::DICE_SPARSITY_CIFAR)]
    pub dice_sparsity: f64,
    /// Covariance ridge; defaults to 1e-6 * trace(cov) / D.
    #[arg(long)]
    pub ridge: Option<f64>,
    /// Output CSV (index,predicted_class,score).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// ID score CSV.
    #[arg(long)]
    pub id: PathBuf,
    /// OOD score CSV as NAME=PATH or PATH (name = file stem). Repeatable.
    #[arg(long, required = true)]
    pub ood: Vec<String>,
    #[arg(long, default_value = "detector")]
    pub detector: String,
    /// Report CSV; the aligned table always goes to stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub stats: PathBuf,
    #[arg(long)]
    pub head: PathBuf,
    #[arg(long)]
    pub id_val: PathBuf,
    #[arg(long)]
    pub noise_val: PathBuf,
    /// Comma-separated candidate alphas.
    #[arg(long, value_delimiter = ',', default_values_t = ALPHA_GRID.to_vec())]
    pub grid: Vec<f64>,
    #[arg(long, value_enum, default_value_t = NormArg::L1)]
    pub filter_norm: NormArg,
    /// Optional CSV of the full alpha/AUROC table.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OodModeArg {
    NearOrigin,
    RandomDirection,
    InConeNearOrigin,
}

impl From<OodModeArg> for OodMode {
    fn from(m: OodModeArg) -> Self {
        match m {
            OodModeArg::NearOrigin => OodMode::NearOrigin,
            OodModeArg::RandomDirection => OodMode::RandomDirection,
            OodModeArg::InConeNearOrigin => OodMode::InConeNearOrigin,
        }
    }
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 10)]
    pub classes: usize,
    #[arg(long, default_value_t = 32)]
    pub dim: usize,
    #[arg(long, default_value_t = 100)]
    pub n_per_class: usize,
    #[arg(long, default_value_t = 5.0)]
    pub scale: f64,
    #[arg(long, default_value_t = 0.5)]
    pub noise_sigma: f64,
    #[arg(long, value_enum, default_value_t = OodModeArg::NearOrigin)]
    pub ood_mode: OodModeArg,
    #[arg(long, default_value_t = 1000)]
    pub n_ood: usize,
    /// Near-origin radius as a fraction of the ID radius.
    #[arg(long, default_value_t = 0.3)]
    pub ood_radius: f64,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ActivationArg {
    Relu,
    Tanh,
}

#[derive(Debug, Args)]
pub struct CollapseArgs {
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    #[arg(long, default_value_t = 16)]
    pub input_dim: usize,
    #[arg(long, default_value_t = 50)]
    pub n_per_class: usize,
    #[arg(long, default_value_t = 10.0)]
    pub spread: f64,
    #[arg(long, default_value_t = 1.0)]
    pub blob_noise: f64,
    /// Hidden widths; the last is the penultimate feature width.
    #[arg(long, value_delimiter = ',', default_values_t = vec![64usize, 32])]
    pub hidden: Vec<usize>,
    #[arg(long, value_enum, default_value_t = ActivationArg::Relu)]
    pub activation: ActivationArg,
    #[arg(long, default_value_t = 600)]
    pub epochs: usize,
    /// Learning-rate schedule as EPOCH:RATE pairs.
    #[arg(long, value_delimiter = ',', default_values_t = vec!["0:0.01".to_owned(), "50:0.1".to_owned()])]
    pub lr: Vec<String>,
    #[arg(long, default_value_t = 0.05)]
    pub weight_decay: f64,
    /// Mini-batch size; full batch when absent.
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct HistogramArgs {
    /// Score CSV as NAME=PATH or PATH. Repeatable.
    #[arg(long, required = true)]
    pub input: Vec<String>,
    #[arg(long, default_value_t = HISTOGRAM_BINS)]
    pub bins: usize,
    #[arg(long)]
    pub out: PathBuf,
}

/// Parse `args` (program name first), run, and map the outcome to an exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Stats(a) => cmd_stats(&a).map(|p| println!("wrote {}", p.display())),
        Command::Score(a) => cmd_score(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::SweepAlpha(a) => cmd_sweep_alpha(&a).map(|_| ()),
        Command::Synth(a) => cmd_synth(&a),
        Command::Collapse(a) => cmd_collapse(&a),
        Command::Histogram(a) => cmd_histogram(&a),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, None, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, None, e))
}

pub fn cmd_stats(a: &StatsArgs) -> Result<PathBuf> {
    let train = FeatureSet::from_bundle(&a.train)?;
    let head = ClassifierHead::from_bundle(a.head.as_deref().unwrap_or(&a.train))?;
    let stats = compute_train_stats(&train, &head)?;
    stats.write_bundle(&a.out, &format!("{}-stats", train.name))
}

fn need<'a>(opt: &'a Option<PathBuf>, flag: &str, detector: Detector) -> Result<&'a Path> {
    opt.as_deref()
        .ok_or_else(|| Error::Contract(format!("detector {} requires {flag}", detector.name())))
}

fn load_stats(a: &ScoreArgs, head: &ClassifierHead) -> Result<TrainStats> {
    let stats = TrainStats::from_bundle(need(&a.stats, "--stats", a.detector)?)?;
    stats.check_head(head)?;
    Ok(stats)
}

fn load_train(a: &ScoreArgs) -> Result<FeatureSet> {
    FeatureSet::from_bundle(need(&a.train, "--train", a.detector)?)
}

/// Scores for one detector, in input order.
pub fn score_features(
    a: &ScoreArgs,
    head: &ClassifierHead,
    features: &FeatureSet,
) -> Result<Vec<f64>> {
    let x = &features.features;
    match a.detector {
        Detector::Ncood => {
            let cfg = NcScoreConfig::new(a.alpha, a.filter_norm.into())?;
            nc_scores::nc_score(x, &load_stats(a, head)?, head, &cfg)
        }
        Detector::Pscore => nc_scores::p_score(x, &load_stats(a, head)?, head),
        Detector::Cosscore => nc_scores::cos_score(x, &load_stats(a, head)?, head),
        Detector::Distscore => nc_scores::dist_score(x, &load_stats(a, head)?, head),
        Detector::Msp => msp_score(&compute_logits(head, x)?),
        Detector::Energy => energy_score(&compute_logits(head, x)?),
        Detector::React => {
            let clip = match a.react_threshold {
                Some(threshold) => ReactClip {
                    threshold,
                    percentile: f64::NAN,
                },
                None => fit_react(&load_train(a)?, a.react_percentile)?,
            };
            react_score(x, head, &clip)
        }
        Detector::Dice => {
            let mask = fit_dice(&load_stats(a, head)?, head, a.dice_sparsity)?;
            dice_score(x, head, &mask)
        }
        Detector::Mahalanobis => {
            let train = load_train(a)?;
            let c = head.num_classes();
            let ridge = match a.ridge {
                Some(r) => r,
                None => default_ridge(&tied_covariance(&train, c)?.1),
            };
            mahalanobis_score(x, &mahalanobis_fit(&train, c, ridge)?)
        }
        Detector::Knn => {
            let train = load_train(a)?;
            knn_score(x, &KnnIndex::new(&train.features, a.k)?)
        }
    }
}

pub fn scores_to_csv(predicted: &[usize], scores: &[f64]) -> String {
    let mut out = SCORE_HEADER.join(",");
    out.push('\n');
    for (i, (p, s)) in predicted.iter().zip(scores).enumerate() {
        let _ = writeln!(out, "{i},{p},{s}");
    }
    out
}

pub fn cmd_score(a: &ScoreArgs) -> Result<()> {
    let head = ClassifierHead::from_bundle(&a.head)?;
    let features = FeatureSet::from_bundle(&a.features)?;
    let scores = score_features(a, &head, &features)?;
    let predicted = predict_classes(&head, &features.features)?;
    write_text(&a.out, &scores_to_csv(&predicted, &scores))
}

/// Score column of an `index,predicted_class,score` file.
pub fn read_score_csv(path: &Path) -> Result<Vec<f64>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, None, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(text.as_bytes());
    let malformed = |line: u64, what: String| {
        Error::Contract(format!("{}: line {line}: {what}", path.display()))
    };
    let headers = reader
        .headers()
        .map_err(|e| malformed(1, e.to_string()))?
        .clone();
    if headers.iter().map(str::trim).ne(SCORE_HEADER) {
        return Err(malformed(
            1,
            format!("expected header {}", SCORE_HEADER.join(",")),
        ));
    }
    let mut scores = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            malformed(line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let value = record
            .get(2)
            .ok_or_else(|| malformed(line, "missing score column".into()))?
            .trim();
        let score: f64 = value
            .parse()
            .map_err(|_| malformed(line, format!("score {value:?} is not a number")))?;
        if !score.is_finite() {
            return Err(malformed(line, format!("score {value} is not finite")));
        }
        scores.push(score);
    }
    if scores.is_empty() {
        return Err(Error::Contract(format!(
            "{}: no score rows",
            path.display()
        )));
    }
    Ok(scores)
}

fn named_path(spec: &str) -> (String, PathBuf) {
    match spec.split_once('=') {
        Some((name, path)) if !name.is_empty() => (name.to_owned(), PathBuf::from(path)),
        _ => {
            let p = PathBuf::from(spec);
            let name = p
                .file_stem()
                .map_or_else(|| spec.to_owned(), |s| s.to_string_lossy().into_owned());
            (name, p)
        }
    }
}

fn digest_hex(parts: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    h.finalize()
        .iter()
        .take(8)
        .map(|b| format!("{b:02x}"))
        .collect()
}

pub fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let id = read_score_csv(&a.id)?;
    let mut sets = Vec::with_capacity(a.ood.len());
    let mut provenance = vec![
        a.detector.clone().into_bytes(),
        fs::read(&a.id).unwrap_or_default(),
    ];
    for spec in &a.ood {
        let (name, path) = named_path(spec);
        sets.push((name.clone(), read_score_csv(&path)?));
        provenance.push(name.into_bytes());
        provenance.push(fs::read(&path).unwrap_or_default());
    }
    let parts: Vec<&[u8]> = provenance.iter().map(Vec::as_slice).collect();
    let reports = metrics::evaluate(&a.detector, &id, &sets, &digest_hex(&parts))?;
    print!("{}", metrics::reports_to_table(&reports));
    println!("config digest: {}", reports[0].config_digest);
    if let Some(out) = &a.out {
        write_text(out, &metrics::reports_to_csv(&reports))?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlphaSweep {
    /// (alpha, AUROC) in ascending alpha order.
    pub table: Vec<(f64, f64)>,
    pub best_alpha: f64,
    pub best_auroc: f64,
}

/// AUROC of ID validation vs noise validation under nc_score for each alpha.
/// The highest AUROC wins; ties go to the smaller alpha.
pub fn sweep_alpha(
    stats: &TrainStats,
    head: &ClassifierHead,
    id_val: &FeatureSet,
    noise_val: &FeatureSet,
    grid: &[f64],
    norm: FilterNorm,
) -> Result<AlphaSweep> {
    if grid.is_empty() {
        return Err(Error::Contract("alpha grid is empty".into()));
    }
    let mut alphas = grid.to_vec();
    alphas.sort_by(f64::total_cmp);
    alphas.dedup();
    // the two score components are computed once and combined per alpha
    let p_id = nc_scores::p_score(&id_val.features, stats, head)?;
    let p_noise = nc_scores::p_score(&noise_val.features, stats, head)?;
    let n_id = nc_scores::norm_score(&id_val.features, norm);
    let n_noise = nc_scores::norm_score(&noise_val.features, norm);
    let mut table = Vec::with_capacity(alphas.len());
    let mut best: Option<(f64, f64)> = None;
    for alpha in alphas {
        NcScoreConfig::new(alpha, norm)?;
        let combine = |p: &[f64], n: &[f64]| -> Vec<f64> {
            p.iter().zip(n).map(|(p, n)| alpha * n + p).collect()
        };
        let auc = auroc(&combine(&p_id, &n_id), &combine(&p_noise, &n_noise))?;
        table.push((alpha, auc));
        if best.is_none_or(|(_, b)| auc > b) {
            best = Some((alpha, auc));
        }
    }
    let (best_alpha, best_auroc) = best.expect("nonempty grid");
    Ok(AlphaSweep {
        table,
        best_alpha,
        best_auroc,
    })
}

pub fn cmd_sweep_alpha(a: &SweepArgs) -> Result<AlphaSweep> {
    let head = ClassifierHead::from_bundle(&a.head)?;
    let stats = TrainStats::from_bundle(&a.stats)?;
    stats.check_head(&head)?;
    let id_val = FeatureSet::from_bundle(&a.id_val)?;
    let noise_val = FeatureSet::from_bundle(&a.noise_val)?;
    let sweep = sweep_alpha(
        &stats,
        &head,
        &id_val,
        &noise_val,
        &a.grid,
        a.filter_norm.into(),
    )?;
    let mut csv = String::from("alpha,auroc\n");
    println!("{:>10}  {:>8}", "alpha", "AUROC%");
    for (alpha, auc) in &sweep.table {
        println!("{alpha:>10}  {:>8.2}", 100.0 * auc);
        let _ = writeln!(csv, "{alpha},{auc}");
    }
    println!("selected alpha = {}", sweep.best_alpha);
    if let Some(out) = &a.out {
        write_text(out, &csv)?;
    }
    Ok(sweep)
}

fn synth_spec(a: &SynthArgs) -> Result<SynthSpec> {
    let flag = |name: &str, msg: String| Error::Contract(format!("{name}: {msg}"));
    if a.classes < 2 {
        return Err(flag(
            "--classes",
            format!("need at least 2, got {}", a.classes),
        ));
    }
    if a.dim < a.classes {
        return Err(flag(
            "--dim",
            format!("must be >= --classes ({}), got {}", a.classes, a.dim),
        ));
    }
    if !(a.scale > 0.0 && a.scale.is_finite()) {
        return Err(flag(
            "--scale",
            format!("must be positive, got {}", a.scale),
        ));
    }
    if !(a.noise_sigma >= 0.0 && a.noise_sigma.is_finite()) {
        return Err(flag(
            "--noise-sigma",
            format!("must be >= 0, got {}", a.noise_sigma),
        ));
    }
    if !(a.ood_radius > 0.0 && a.ood_radius.is_finite()) {
        return Err(flag(
            "--ood-radius",
            format!("must be positive, got {}", a.ood_radius),
        ));
    }
    Ok(SynthSpec {
        classes: a.classes,
        dim: a.dim,
        n_per_class: a.n_per_class,
        scale: a.scale,
        noise_sigma: a.noise_sigma,
        ood_mode: a.ood_mode.into(),
        n_ood: a.n_ood,
        ood_radius_fraction: a.ood_radius,
        seed: a.seed,
    })
}

fn spec_metadata(m: BundleManifest, spec: &SynthSpec) -> BundleManifest {
    m.with_meta("generator", "synth")
        .with_meta("classes", spec.classes.to_string())
        .with_meta("dim", spec.dim.to_string())
        .with_meta("scale", spec.scale.to_string())
        .with_meta("noise_sigma", spec.noise_sigma.to_string())
        .with_meta("ood_mode", spec.ood_mode.to_string())
        .with_meta("ood_radius_fraction", spec.ood_radius_fraction.to_string())
        .with_meta("seed", spec.seed.to_string())
}

fn write_feature_bundle(
    set: &FeatureSet,
    head: Option<&ClassifierHead>,
    dir: &Path,
    meta: impl Fn(BundleManifest) -> BundleManifest,
) -> Result<PathBuf> {
    let mut tensors = set.to_tensors();
    if let Some(h) = head {
        tensors.extend(h.to_tensors());
    }
    let manifest = meta(BundleManifest::for_roles(
        &set.name,
        tensors.keys().map(String::as_str),
    ));
    tensor_store::write_bundle(&manifest, &tensors, dir)
}

/// Bundles: train (features, labels, weights, bias), id_test, ood, id_val, noise_val.
pub fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let spec = synth_spec(a)?;
    let world = SynthWorld::generate(&spec)?;
    let meta = |m| spec_metadata(m, &spec);
    write_feature_bundle(&world.train, Some(&world.head), &a.out.join("train"), meta)?;
    write_feature_bundle(&world.id_test, None, &a.out.join("id_test"), meta)?;
    write_feature_bundle(&world.ood_test, None, &a.out.join("ood"), meta)?;
    write_feature_bundle(&world.id_val, None, &a.out.join("id_val"), meta)?;
    write_feature_bundle(&world.noise_val, None, &a.out.join("noise_val"), meta)?;
    println!("wrote synthetic world to {}", a.out.display());
    Ok(())
}

fn parse_schedule(entries: &[String]) -> Result<Vec<(usize, f64)>> {
    entries
        .iter()
        .map(|e| {
            let bad = || Error::Contract(format!("--lr: expected EPOCH:RATE, got {e:?}"));
            let (epoch, rate) = e.split_once(':').ok_or_else(bad)?;
            Ok((
                epoch.trim().parse().map_err(|_| bad())?,
                rate.trim().parse().map_err(|_| bad())?,
            ))
        })
        .collect()
}

pub fn collapse_config(a: &CollapseArgs) -> Result<(BlobsSpec, MlpConfig)> {
    if a.classes < 2 {
        return Err(Error::Contract(format!(
            "--classes: need at least 2, got {}",
            a.classes
        )));
    }
    if a.hidden.is_empty() || a.hidden.contains(&0) {
        return Err(Error::Contract(
            "--hidden: need at least one positive width".into(),
        ));
    }
    if a.batch_size == Some(0) {
        return Err(Error::Contract("--batch-size: must be >= 1".into()));
    }
    if a.weight_decay.is_nan() || a.weight_decay < 0.0 {
        return Err(Error::Contract(format!(
            "--weight-decay: must be >= 0, got {}",
            a.weight_decay
        )));
    }
    let schedule = parse_schedule(&a.lr)?;
    if schedule.first().map(|s| s.0) != Some(0) {
        return Err(Error::Contract(
            "--lr: the schedule must start at epoch 0".into(),
        ));
    }
    let blobs = BlobsSpec {
        classes: a.classes,
        input_dim: a.input_dim,
        n_per_class: a.n_per_class,
        center_spread: a.spread,
        noise_sigma: a.blob_noise,
        seed: a.seed,
    };
    let mut widths = vec![a.input_dim];
    widths.extend(&a.hidden);
    let cfg = MlpConfig {
        layer_widths: widths,
        activation: match a.activation {
            ActivationArg::Relu => Activation::Relu,
            ActivationArg::Tanh => Activation::Tanh,
        },
        epochs: a.epochs,
        lr_schedule: schedule,
        weight_decay: a.weight_decay,
        batch_size: a.batch_size,
        seed: a.seed,
    };
    Ok((blobs, cfg))
}

/// Writes trace.csv, the model bundle, and the penultimate training features.
pub fn cmd_collapse(a: &CollapseArgs) -> Result<()> {
    let (blobs, cfg) = collapse_config(a)?;
    let data = blobs.generate()?;
    let (model, trace) = collapse::train_mlp(&cfg, &data)?;
    write_text(&a.out.join("trace.csv"), &trace.to_csv())?;
    model.write_bundle(&a.out.join("model"), "collapse-mlp")?;
    let head = model.classifier_head()?;
    let features = FeatureSet::new(
        model.penultimate(&data.inputs),
        Some(data.labels.clone()),
        "collapse-train",
    )?;
    write_feature_bundle(&features, Some(&head), &a.out.join("features"), |m| {
        m.with_meta("generator", "collapse")
    })?;
    let report = collapse::nc_metrics(&features.features, &data.labels, &head)?;
    let last = trace.last().map_or(0.0, |r| r.train_accuracy);
    println!(
        "final: epochs={} train_accuracy={} nc1={:.6} nc2_norm_spread={:.6} nc2_angle_gap={:.6} \
         nc3_duality_gap={:.6} nc4_agreement={:.6} theorem1_alignment={:.6}",
        cfg.epochs,
        last,
        report.nc1,
        report.nc2_norm_spread,
        report.nc2_angle_gap,
        report.nc3_duality_gap,
        report.nc4_agreement,
        report.theorem1_alignment
    );
    Ok(())
}

/// Counts of each series over `bins` uniform bins spanning the pooled range.
pub fn histogram(
    series: &[(String, Vec<f64>)],
    bins: usize,
) -> Result<(Vec<f64>, Vec<Vec<usize>>)> {
    if bins == 0 {
        return Err(Error::Contract("--bins: must be >= 1".into()));
    }
    let pooled = series.iter().flat_map(|(_, v)| v.iter().copied());
    let (lo, hi) = pooled.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
        (lo.min(v), hi.max(v))
    });
    if !lo.is_finite() {
        return Err(Error::Contract("no values to histogram".into()));
    }
    let width = if hi > lo {
        (hi - lo) / bins as f64
    } else {
        1.0
    };
    let edges = (0..=bins).map(|i| lo + width * i as f64).collect();
    let counts = series
        .iter()
        .map(|(_, values)| {
            let mut c = vec![0usize; bins];
            for &v in values {
                let b = (((v - lo) / width) as usize).min(bins - 1);
                c[b] += 1;
            }
            c
        })
        .collect();
    Ok((edges, counts))
}

pub fn cmd_histogram(a: &HistogramArgs) -> Result<()> {
    let mut series = Vec::with_capacity(a.input.len());
    for spec in &a.input {
        let (name, path) = named_path(spec);
        series.push((name, read_score_csv(&path)?));
    }
    let (edges, counts) = histogram(&series, a.bins)?;
    let mut out = String::from("bin_lo,bin_hi");
    for (name, _) in &series {
        out.push(',');
        out.push_str(name);
    }
    out.push('\n');
    for b in 0..a.bins {
        let _ = write!(out, "{},{}", edges[b], edges[b + 1]);
        for c in &counts {
            let _ = write!(out, ",{}", c[b]);
        }
        out.push('\n');
    }
    write_text(&a.out, &out)
}
