//! Acceptance checks P1-P10. Prints one PASS/FAIL line per criterion with the
//! measured value and its budget, and exits nonzero if any criterion fails.

mod common;

use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::{
    max_abs_diff, oracle_auroc, oracle_fpr, oracle_knn, oracle_mahalanobis, random_problem, rng,
};
use ncood::baselines::{
    default_ridge, dice_score, energy_score, fit_dice, knn_score, mahalanobis_fit,
    mahalanobis_score, react_score, tied_covariance, KnnIndex, ReactClip,
};
use ncood::cli::sweep_alpha;
use ncood::collapse::{grad_check, train_mlp, BlobsSpec, MlpConfig};
use ncood::dataset::{compute_logits, compute_train_stats, predict_classes};
use ncood::metrics::{auroc, fpr_at_tpr};
use ncood::nc_scores::{cos_score, nc_score, p_score, FilterNorm, NcScoreConfig, ALPHA_GRID};
use ncood::synth::{gaussian_matrix, simplex_etf, OodMode, SynthSpec, SynthWorld};
use ncood::tensor_store::{read_tensor, write_tensor, Tensor, TensorData};
use rand::Rng;

type Criterion = (&'static str, fn() -> Outcome, Duration);

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn p1_proximity_cosine_identity() -> Outcome {
    let mut r = rng(101);
    let (train, head) = random_problem(&mut r, 10, 32, 20);
    let stats = compute_train_stats(&train, &head).unwrap();
    let q = gaussian_matrix(&mut r, 1000, 32) * 3.0;
    let p = p_score(&q, &stats, &head).unwrap();
    let cos = cos_score(&q, &stats, &head).unwrap();
    let pred = predict_classes(&head, &q).unwrap();
    let rescaled: Vec<f64> = cos
        .iter()
        .zip(&pred)
        .map(|(c, &k)| c * head.row_norm(k))
        .collect();
    let err = max_abs_diff(&p, &rescaled);
    outcome(
        err <= 1e-9,
        format!("1000 samples, max |p - cos*||w_c|||| = {err:.2e} (tol 1e-9)"),
    )
}

/// Scores on a coarse grid so that ties are frequent, or continuous.
fn random_instance(r: &mut ncood::synth::SynthRng, tied: bool) -> (Vec<f64>, Vec<f64>) {
    let n_id = r.random_range(1..=200);
    let n_ood = r.random_range(1..=200);
    let mut draw = |n: usize| -> Vec<f64> {
        (0..n)
            .map(|_| {
                if tied {
                    r.random_range(0..12) as f64 * 0.25
                } else {
                    r.random_range(-5.0..5.0)
                }
            })
            .collect()
    };
    (draw(n_id), draw(n_ood))
}

fn p2_auroc_oracle() -> Outcome {
    let mut r = rng(202);
    let mut worst = 0.0f64;
    for i in 0..100 {
        let (id, ood) = random_instance(&mut r, i % 2 == 0);
        worst = worst.max((auroc(&id, &ood).unwrap() - oracle_auroc(&id, &ood)).abs());
    }
    outcome(
        worst <= 1e-12,
        format!("100 instances (50 tied), max error {worst:.2e} (tol 1e-12)"),
    )
}

fn p3_fpr_oracle() -> Outcome {
    let mut r = rng(202);
    let mut mismatches = 0;
    for i in 0..100 {
        let (id, ood) = random_instance(&mut r, i % 2 == 0);
        if fpr_at_tpr(&id, &ood, 0.95).unwrap() != oracle_fpr(&id, &ood, 0.95) {
            mismatches += 1;
        }
    }
    outcome(
        mismatches == 0,
        format!("100 instances, {mismatches} inexact matches against the threshold scan"),
    )
}

fn p4_etf_invariants() -> Outcome {
    let (mut norm_err, mut cos_err) = (0.0f64, 0.0f64);
    let mut frames = 0;
    for c in 2..=10 {
        for d in c..=32 {
            let f = simplex_etf(c, d, 1.0, (c * 100 + d) as u64).unwrap();
            frames += 1;
            for a in 0..c {
                norm_err = norm_err.max((f.vectors.row(a).norm() - 1.0).abs());
                for b in (a + 1)..c {
                    cos_err = cos_err.max((f.cosine(a, b) + 1.0 / (c as f64 - 1.0)).abs());
                }
            }
        }
    }
    outcome(
        norm_err <= 1e-9 && cos_err <= 1e-9,
        format!(
            "{frames} frames, norm error {norm_err:.2e}, cosine error {cos_err:.2e} (tol 1e-9)"
        ),
    )
}

fn world(mode: OodMode) -> SynthWorld {
    let spec = SynthSpec {
        classes: 10,
        dim: 32,
        scale: 5.0,
        noise_sigma: 0.5,
        ood_mode: mode,
        seed: 7,
        ..Default::default()
    };
    SynthWorld::generate(&spec).unwrap()
}

fn test_auroc(w: &SynthWorld, alpha: f64) -> f64 {
    let stats = compute_train_stats(&w.train, &w.head).unwrap();
    let cfg = NcScoreConfig::new(alpha, FilterNorm::L1).unwrap();
    auroc(
        &nc_score(&w.id_test.features, &stats, &w.head, &cfg).unwrap(),
        &nc_score(&w.ood_test.features, &stats, &w.head, &cfg).unwrap(),
    )
    .unwrap()
}

fn swept_alpha(w: &SynthWorld) -> f64 {
    let stats = compute_train_stats(&w.train, &w.head).unwrap();
    sweep_alpha(
        &stats,
        &w.head,
        &w.id_val,
        &w.noise_val,
        &ALPHA_GRID,
        FilterNorm::L1,
    )
    .unwrap()
    .best_alpha
}

fn p5_geometry() -> Outcome {
    let near = world(OodMode::NearOrigin);
    let near_alpha = swept_alpha(&near);
    let near_auc = test_auroc(&near, near_alpha);

    let cone = world(OodMode::InConeNearOrigin);
    let stats = compute_train_stats(&cone.train, &cone.head).unwrap();
    let p_auc = auroc(
        &p_score(&cone.id_test.features, &stats, &cone.head).unwrap(),
        &p_score(&cone.ood_test.features, &stats, &cone.head).unwrap(),
    )
    .unwrap();
    let alpha = swept_alpha(&cone);
    let nc_auc = test_auroc(&cone, alpha);
    outcome(
        near_auc >= 0.99 && p_auc <= 0.7 && nc_auc - p_auc >= 0.15,
        format!(
            "near-origin AUROC {near_auc:.4} (>= 0.99); in-cone p_score {p_auc:.4} (<= 0.7), \
             nc_score at alpha {alpha} {nc_auc:.4} (gain {:.4} >= 0.15)",
            nc_auc - p_auc
        ),
    )
}

fn p6_collapse() -> Outcome {
    let cfg = MlpConfig::default();
    let data = BlobsSpec::default().generate().unwrap();
    let (_, trace) = train_mlp(&cfg, &data).unwrap();
    let (first, last) = (trace.first().unwrap(), trace.last().unwrap());
    let gain = last.nc.theorem1_alignment - first.nc.theorem1_alignment;
    let nc3_ratio = last.nc.nc3_duality_gap / first.nc.nc3_duality_gap;
    let pass = cfg.epochs >= 300
        && cfg.seed == 7
        && last.train_accuracy == 1.0
        && last.nc.theorem1_alignment >= 0.9
        && gain >= 0.3
        && nc3_ratio < 0.5;
    outcome(
        pass,
        format!(
            "{} epochs: accuracy {}, alignment {:.4} -> {:.4} (>= 0.9, gain {gain:.4} >= 0.3), nc3 ratio {nc3_ratio:.4} (< 0.5)",
            cfg.epochs, last.train_accuracy, first.nc.theorem1_alignment, last.nc.theorem1_alignment
        ),
    )
}

fn p7_grad_check() -> Outcome {
    let data = BlobsSpec::default().generate().unwrap();
    let report = grad_check(&MlpConfig::default(), &data, 200, 1e-5).unwrap();
    outcome(
        report.probes >= 200 && report.max_relative_error < 1e-4,
        format!(
            "{} probes ({} skipped at ReLU kinks), max relative error {:.2e} (< 1e-4)",
            report.probes, report.kink_skips, report.max_relative_error
        ),
    )
}

fn p8_baseline_oracles() -> Outcome {
    let mut r = rng(808);
    let (mut maha_err, mut knn_err) = (0.0f64, 0.0f64);
    let mut exact = true;
    for trial in 0..10 {
        let c = 2 + trial % 5;
        let d = (c + trial).min(16);
        let (train, head) = random_problem(&mut r, c, d, 200 / c);
        assert!(train.len() <= 200);
        let q = gaussian_matrix(&mut r, 50, d) * 3.0;

        let ridge = default_ridge(&tied_covariance(&train, c).unwrap().1);
        let got = mahalanobis_score(&q, &mahalanobis_fit(&train, c, ridge).unwrap()).unwrap();
        let want = oracle_mahalanobis(&q, &train, c, ridge);
        maha_err = maha_err.max(max_abs_diff(&got, &want));

        let k = 1 + trial * 5;
        let got = knn_score(&q, &KnnIndex::new(&train.features, k).unwrap()).unwrap();
        knn_err = knn_err.max(max_abs_diff(&got, &oracle_knn(&q, &train.features, k)));

        let stats = compute_train_stats(&train, &head).unwrap();
        let energy = energy_score(&compute_logits(&head, &q).unwrap()).unwrap();
        exact &= dice_score(&q, &head, &fit_dice(&stats, &head, 0.0).unwrap()).unwrap() == energy;
        let clip = ReactClip {
            threshold: q.max(),
            percentile: 100.0,
        };
        exact &= react_score(&q, &head, &clip).unwrap() == energy;
    }
    outcome(
        maha_err <= 1e-9 && knn_err <= 1e-9 && exact,
        format!(
            "mahalanobis error {maha_err:.2e}, knn error {knn_err:.2e} (tol 1e-9); dice@0 and react@max equal energy: {exact}"
        ),
    )
}

fn p9_tensor_round_trip() -> Outcome {
    let mut r = rng(909);
    let (mut ok, mut zero_extent) = (0, 0);
    let total = 600;
    for i in 0..total {
        let ndim = r.random_range(1..=4);
        let shape: Vec<usize> = (0..ndim).map(|_| r.random_range(0..6)).collect();
        let n: usize = shape.iter().product();
        zero_extent += usize::from(n == 0);
        let data = match i % 3 {
            0 => TensorData::F32((0..n).map(|_| f32::from_bits(r.random())).collect()),
            1 => TensorData::F64((0..n).map(|_| f64::from_bits(r.random())).collect()),
            _ => TensorData::I64((0..n).map(|_| r.random()).collect()),
        };
        let t = Tensor::new(shape, data).unwrap();
        let mut buf = Vec::new();
        write_tensor(&t, &mut buf).unwrap();
        if read_tensor(buf.as_slice()).is_ok_and(|back| back.bit_eq(&t)) {
            ok += 1;
        }
    }
    outcome(
        ok == total && zero_extent > 0,
        format!("{ok}/{total} bit-exact over f32/f64/i64, {zero_extent} with a zero extent"),
    )
}

fn p10_alpha_sweep() -> Outcome {
    let cone = world(OodMode::InConeNearOrigin);
    let chosen = swept_alpha(&cone);
    let per_alpha: Vec<(f64, f64)> = ALPHA_GRID
        .iter()
        .map(|&a| (a, test_auroc(&cone, a)))
        .collect();
    let best = per_alpha
        .iter()
        .map(|p| p.1)
        .fold(f64::NEG_INFINITY, f64::max);
    let chosen_auc = per_alpha.iter().find(|p| p.0 == chosen).unwrap().1;
    outcome(
        best - chosen_auc <= 0.02,
        format!("selected alpha {chosen}: test AUROC {chosen_auc:.4}, best grid AUROC {best:.4} (within 0.02)"),
    )
}

fn main() -> ExitCode {
    let criteria: [Criterion; 10] = [
        ("P1", p1_proximity_cosine_identity, Duration::from_secs(1)),
        ("P2", p2_auroc_oracle, Duration::from_secs(5)),
        ("P3", p3_fpr_oracle, Duration::from_secs(5)),
        ("P4", p4_etf_invariants, Duration::from_secs(1)),
        ("P5", p5_geometry, Duration::from_secs(10)),
        ("P6", p6_collapse, Duration::from_secs(120)),
        ("P7", p7_grad_check, Duration::from_secs(30)),
        ("P8", p8_baseline_oracles, Duration::from_secs(10)),
        ("P9", p9_tensor_round_trip, Duration::from_secs(5)),
        ("P10", p10_alpha_sweep, Duration::from_secs(10)),
    ];
    let mut failures = 0;
    for (id, check, budget) in criteria {
        let start = Instant::now();
        let o = check();
        let elapsed = start.elapsed();
        let pass = o.pass && elapsed < budget;
        failures += usize::from(!pass);
        println!(
            "{id:<3} {} {} [{:.3}s / {}s]",
            if pass { "PASS" } else { "FAIL" },
            o.detail,
            elapsed.as_secs_f64(),
            budget.as_secs()
        );
    }
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failures} acceptance criteria failed");
        ExitCode::FAILURE
    }
}
