use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ncood::cli::{sweep_alpha, SCORE_HEADER};
use ncood::collapse::TrainTrace;
use ncood::dataset::{compute_train_stats, TrainStats};
use ncood::metrics::CSV_HEADER;
use ncood::nc_scores::FilterNorm;
use ncood::synth::{OodMode, SynthSpec, SynthWorld};
use ncood::{ClassifierHead, FeatureSet};

fn ncood(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ncood"))
        .args(args)
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = ncood(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn fails_with(args: &[&str], code: i32) -> String {
    let out = ncood(args);
    assert_eq!(
        out.status.code(),
        Some(code),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stderr).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Small synthetic world plus its stats bundle.
struct World {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl World {
    fn new(extra: &[&str]) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let w = root.join("w");
        let mut args = vec![
            "synth",
            "--classes",
            "4",
            "--dim",
            "8",
            "--n-per-class",
            "30",
            "--n-ood",
            "60",
            "--out",
            p(&w),
        ];
        args.extend_from_slice(extra);
        ok(&args);
        ok(&[
            "stats",
            "--train",
            p(&w.join("train")),
            "--out",
            p(&root.join("stats")),
        ]);
        World { _dir: dir, root }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    fn score(&self, detector: &str, features: &str, out: &str, extra: &[&str]) -> PathBuf {
        let out = self.path(out);
        let (features, stats, train) = (
            self.path(features),
            self.path("stats"),
            self.path("w/train"),
        );
        let mut args = vec![
            "score",
            "--detector",
            detector,
            "--features",
            p(&features),
            "--head",
            p(&train),
        ];
        args.extend_from_slice(&[
            "--stats",
            p(&stats),
            "--train",
            p(&train),
            "--k",
            "5",
            "--out",
            p(&out),
        ]);
        args.extend_from_slice(extra);
        ok(&args);
        out
    }
}

#[test]
fn synth_writes_every_bundle() {
    let w = World::new(&[]);
    for b in ["train", "id_test", "ood", "id_val", "noise_val"] {
        assert!(w.path(&format!("w/{b}/manifest.txt")).exists(), "{b}");
    }
    let train = FeatureSet::from_bundle(&w.path("w/train")).unwrap();
    assert_eq!((train.len(), train.dim()), (120, 8));
    ClassifierHead::from_bundle(&w.path("w/train")).unwrap();
    assert!(FeatureSet::from_bundle(&w.path("w/ood"))
        .unwrap()
        .labels
        .is_none());
    let manifest = std::fs::read_to_string(w.path("w/train/manifest.txt")).unwrap();
    assert!(manifest.contains("ood_mode = near-origin"));
    TrainStats::from_bundle(&w.path("stats")).unwrap();
}

#[test]
fn every_detector_scores_and_is_deterministic() {
    let w = World::new(&[]);
    for det in [
        "ncood",
        "pscore",
        "cosscore",
        "distscore",
        "msp",
        "energy",
        "react",
        "dice",
        "mahalanobis",
        "knn",
    ] {
        let a = std::fs::read_to_string(w.score(det, "w/id_test", "a.csv", &[])).unwrap();
        let b = std::fs::read_to_string(w.score(det, "w/id_test", "b.csv", &[])).unwrap();
        assert_eq!(a, b, "{det}");
        let mut lines = a.lines();
        assert_eq!(lines.next(), Some(SCORE_HEADER.join(",").as_str()));
        assert_eq!(lines.count(), 120, "{det}");
    }
}

#[test]
fn score_eval_pipeline_separates_near_origin_ood() {
    let w = World::new(&[]);
    let id = w.score("ncood", "w/id_test", "id.csv", &["--alpha", "0.01"]);
    let ood = w.score("ncood", "w/ood", "ood.csv", &["--alpha", "0.01"]);
    let report = w.path("report.csv");
    let table = ok(&[
        "eval",
        "--id",
        p(&id),
        "--ood",
        &format!("near={}", p(&ood)),
        "--detector",
        "ncood",
        "--out",
        p(&report),
    ]);
    assert!(table.contains("Average"));
    assert!(table.contains("config digest:"));
    let csv = std::fs::read_to_string(&report).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], CSV_HEADER);
    assert_eq!(lines.len(), 3);
    let fields: Vec<&str> = lines[1].split(',').collect();
    assert_eq!(fields[..2], ["ncood", "near"]);
    assert!(fields[2].parse::<f64>().unwrap() >= 0.99);
    assert_eq!(fields[4..], ["120", "60"]);
}

#[test]
fn sweep_matches_the_library_and_prefers_small_alpha_on_ties() {
    let w = World::new(&["--ood-mode", "in-cone-near-origin"]);
    let table = w.path("sweep.csv");
    let stdout = ok(&[
        "sweep-alpha",
        "--stats",
        p(&w.path("stats")),
        "--head",
        p(&w.path("w/train")),
        "--id-val",
        p(&w.path("w/id_val")),
        "--noise-val",
        p(&w.path("w/noise_val")),
        "--out",
        p(&table),
    ]);
    let head = ClassifierHead::from_bundle(&w.path("w/train")).unwrap();
    let stats = TrainStats::from_bundle(&w.path("stats")).unwrap();
    let id_val = FeatureSet::from_bundle(&w.path("w/id_val")).unwrap();
    let noise = FeatureSet::from_bundle(&w.path("w/noise_val")).unwrap();
    let sweep = sweep_alpha(
        &stats,
        &head,
        &id_val,
        &noise,
        &[1.0, 0.1, 0.01, 0.001],
        FilterNorm::L1,
    )
    .unwrap();
    assert!(stdout.contains(&format!("selected alpha = {}", sweep.best_alpha)));
    let rows = std::fs::read_to_string(&table).unwrap();
    assert_eq!(rows.lines().count(), 5);
    let best = sweep
        .table
        .iter()
        .map(|r| r.1)
        .fold(f64::NEG_INFINITY, f64::max);
    let first_best = sweep.table.iter().find(|r| r.1 == best).unwrap().0;
    assert_eq!(sweep.best_alpha, first_best);
}

#[test]
fn sweep_tie_break_on_identical_scores() {
    let spec = SynthSpec {
        classes: 3,
        dim: 4,
        n_per_class: 10,
        n_ood: 10,
        ..Default::default()
    };
    let world = SynthWorld::generate(&spec).unwrap();
    let stats = compute_train_stats(&world.train, &world.head).unwrap();
    // ID against itself gives AUROC 1/2 for every alpha
    let s = sweep_alpha(
        &stats,
        &world.head,
        &world.id_val,
        &world.id_val,
        &[0.5, 0.2, 0.9],
        FilterNorm::L2,
    )
    .unwrap();
    assert_eq!(s.best_alpha, 0.2);
    assert!(s.table.iter().all(|r| r.1 == 0.5));
    assert!(sweep_alpha(
        &stats,
        &world.head,
        &world.id_val,
        &world.id_val,
        &[],
        FilterNorm::L1
    )
    .is_err());
}

#[test]
fn contract_violations_exit_2() {
    let w = World::new(&[]);
    let err = fails_with(
        &[
            "score",
            "--detector",
            "odin",
            "--features",
            "x",
            "--head",
            "x",
            "--out",
            "x",
        ],
        2,
    );
    assert!(err.contains("knn") && err.contains("mahalanobis"), "{err}");
    let err = fails_with(&["synth", "--ood-mode", "far-away", "--out", "x"], 2);
    assert!(err.contains("--ood-mode"), "{err}");
    let err = fails_with(
        &[
            "synth",
            "--classes",
            "9",
            "--dim",
            "4",
            "--out",
            p(&w.path("bad")),
        ],
        2,
    );
    assert!(err.contains("--dim"), "{err}");
    let err = fails_with(
        &[
            "stats",
            "--train",
            p(&w.path("w/ood")),
            "--head",
            p(&w.path("w/train")),
            "--out",
            p(&w.path("s2")),
        ],
        2,
    );
    assert!(err.contains("labels"), "{err}");
    let err = fails_with(
        &[
            "score",
            "--detector",
            "knn",
            "--features",
            p(&w.path("w/ood")),
            "--head",
            p(&w.path("w/train")),
            "--out",
            p(&w.path("k.csv")),
        ],
        2,
    );
    assert!(err.contains("--train"), "{err}");
}

#[test]
fn malformed_score_files_name_the_line() {
    let w = World::new(&[]);
    let good = w.score("energy", "w/ood", "ood.csv", &[]);
    let bad = w.path("bad.csv");
    std::fs::write(&bad, "index,predicted_class,score\n0,1,0.5\n1,0,oops\n").unwrap();
    let err = fails_with(&["eval", "--id", p(&bad), "--ood", p(&good)], 2);
    assert!(err.contains("line 3"), "{err}");
    std::fs::write(&bad, "index,predicted_class,score\n").unwrap();
    fails_with(&["eval", "--id", p(&bad), "--ood", p(&good)], 2);
    std::fs::write(&bad, "a,b\n1,2\n").unwrap();
    let err = fails_with(&["eval", "--id", p(&bad), "--ood", p(&good)], 2);
    assert!(err.contains("line 1"), "{err}");
}

#[test]
fn io_failures_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let err = fails_with(
        &[
            "stats",
            "--train",
            p(&dir.path().join("missing")),
            "--out",
            p(&dir.path().join("o")),
        ],
        3,
    );
    assert!(err.contains("missing"), "{err}");
    std::fs::create_dir(dir.path().join("b")).unwrap();
    std::fs::write(
        dir.path().join("b/manifest.txt"),
        "dataset_name = b\ntensor.features = f.nct\n",
    )
    .unwrap();
    std::fs::write(dir.path().join("b/f.nct"), b"NCT1\x01\x02\x02").unwrap();
    fails_with(
        &[
            "stats",
            "--train",
            p(&dir.path().join("b")),
            "--out",
            p(&dir.path().join("o")),
        ],
        3,
    );
}

#[test]
fn collapse_writes_trace_and_bundles() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("c");
    let stdout = ok(&[
        "collapse",
        "--epochs",
        "30",
        "--hidden",
        "12,8",
        "--out",
        p(&out),
    ]);
    assert!(stdout.starts_with("final: epochs=30"));
    let trace =
        TrainTrace::from_csv(&std::fs::read_to_string(out.join("trace.csv")).unwrap()).unwrap();
    assert_eq!(trace.records.len(), 30);
    let head = ClassifierHead::from_bundle(&out.join("model")).unwrap();
    assert_eq!((head.num_classes(), head.dim()), (4, 8));
    let feats = FeatureSet::from_bundle(&out.join("features")).unwrap();
    assert_eq!((feats.len(), feats.dim()), (200, 8));
    fails_with(&["collapse", "--lr", "5:0.1", "--out", p(&out)], 2);
    fails_with(
        &[
            "collapse",
            "--lr",
            "0:0.1",
            "--hidden",
            "8",
            "--activation",
            "sigmoid",
            "--out",
            p(&out),
        ],
        2,
    );
}

#[test]
fn histogram_uses_shared_bins() {
    let w = World::new(&[]);
    let id = w.score("pscore", "w/id_test", "id.csv", &[]);
    let ood = w.score("pscore", "w/ood", "ood.csv", &[]);
    let out = w.path("hist.csv");
    ok(&[
        "histogram",
        "--input",
        &format!("id={}", p(&id)),
        "--input",
        &format!("ood={}", p(&ood)),
        "--out",
        p(&out),
    ]);
    let text = std::fs::read_to_string(&out).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("bin_lo,bin_hi,id,ood"));
    let rows: Vec<Vec<f64>> = lines
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 50);
    assert_eq!(rows.iter().map(|r| r[2]).sum::<f64>(), 120.0);
    assert_eq!(rows.iter().map(|r| r[3]).sum::<f64>(), 60.0);
}

#[test]
fn help_and_version_exit_0() {
    assert!(ok(&["--help"]).contains("sweep-alpha"));
    ok(&["--version"]);
    fails_with(&[], 2);
}

#[test]
fn mode_flag_names_match_library_names() {
    for m in [
        OodMode::NearOrigin,
        OodMode::RandomDirection,
        OodMode::InConeNearOrigin,
    ] {
        let dir = tempfile::tempdir().unwrap();
        ok(&[
            "synth",
            "--classes",
            "2",
            "--dim",
            "2",
            "--n-per-class",
            "2",
            "--n-ood",
            "2",
            "--ood-mode",
            &m.to_string(),
            "--out",
            p(dir.path()),
        ]);
    }
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().display().to_string();
                files.push((rel, std::fs::read(&path).unwrap()));
            }
        }
    }
    files.sort();
    files
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        ok(&[
            "synth",
            "--classes",
            "3",
            "--dim",
            "5",
            "--n-per-class",
            "7",
            "--n-ood",
            "9",
            "--seed",
            "11",
            "--out",
            p(out),
        ]);
        ok(&[
            "stats",
            "--train",
            p(&out.join("train")),
            "--out",
            p(&out.join("stats")),
        ]);
        ok(&[
            "collapse",
            "--epochs",
            "5",
            "--hidden",
            "6",
            "--out",
            p(&out.join("c")),
        ]);
    }
    let (fa, fb) = (dir_bytes(&a), dir_bytes(&b));
    assert!(fa.len() > 10);
    assert_eq!(fa, fb);
}

#[test]
fn zero_alpha_ncood_equals_pscore() {
    let w = World::new(&[]);
    let a = std::fs::read_to_string(w.score("ncood", "w/ood", "a.csv", &["--alpha", "0"])).unwrap();
    let b = std::fs::read_to_string(w.score("pscore", "w/ood", "b.csv", &[])).unwrap();
    assert_eq!(a, b);
}

#[test]
fn energy_of_zero_logits_is_log_two() {
    let dir = tempfile::tempdir().unwrap();
    let set = FeatureSet::new(nalgebra::DMatrix::zeros(2, 3), None, "zeros").unwrap();
    let head = ClassifierHead::new(
        nalgebra::DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]),
        nalgebra::DVector::zeros(2),
    )
    .unwrap();
    let mut tensors = set.to_tensors();
    tensors.extend(head.to_tensors());
    let manifest =
        ncood::tensor_store::BundleManifest::for_roles("zeros", tensors.keys().map(String::as_str));
    ncood::tensor_store::write_bundle(&manifest, &tensors, dir.path()).unwrap();
    let out = dir.path().join("e.csv");
    ok(&[
        "score",
        "--detector",
        "energy",
        "--features",
        p(dir.path()),
        "--head",
        p(dir.path()),
        "--out",
        p(&out),
    ]);
    let scores = ncood::cli::read_score_csv(&out).unwrap();
    assert_eq!(scores, vec![std::f64::consts::LN_2; 2]);
}

#[test]
fn single_candidate_grid_returns_it() {
    let spec = SynthSpec {
        classes: 3,
        dim: 4,
        n_per_class: 10,
        n_ood: 10,
        ..Default::default()
    };
    let world = SynthWorld::generate(&spec).unwrap();
    let stats = compute_train_stats(&world.train, &world.head).unwrap();
    let s = sweep_alpha(
        &stats,
        &world.head,
        &world.id_val,
        &world.noise_val,
        &[0.0],
        FilterNorm::L1,
    )
    .unwrap();
    assert_eq!(s.best_alpha, 0.0);
    assert_eq!(s.table.len(), 1);
}
