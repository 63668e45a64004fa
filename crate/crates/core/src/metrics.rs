//! AUROC and FPR at a target TPR, with in-distribution as the positive class
//! and higher scores meaning more in-distribution.

use std::fmt::Write as _;

use crate::error::{Error, Result};

pub const AVERAGE_ROW: &str = "Average";
pub const CSV_HEADER: &str = "detector,ood_set,auroc,fpr95,n_id,n_ood";

fn check_scores(what: &str, scores: &[f64]) -> Result<()> {
    if scores.is_empty() {
        return Err(Error::Contract(format!("{what} scores are empty")));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::Contract(format!(
            "{what} score at index {i} is {}",
            scores[i]
        )));
    }
    Ok(())
}

/// Probability that a random ID score beats a random OOD score, ties counted
/// as one half. Computed from midranks of the pooled sample.
pub fn auroc(id_scores: &[f64], ood_scores: &[f64]) -> Result<f64> {
    check_scores("ID", id_scores)?;
    check_scores("OOD", ood_scores)?;
    let mut pooled: Vec<(f64, bool)> = id_scores
        .iter()
        .map(|&s| (s, true))
        .chain(ood_scores.iter().map(|&s| (s, false)))
        .collect();
    pooled.sort_by(|a, b| a.0.total_cmp(&b.0));

    // twice the rank sum keeps midranks integral
    let mut id_rank_sum_x2: u128 = 0;
    let mut i = 0;
    while i < pooled.len() {
        let mut j = i;
        while j < pooled.len() && pooled[j].0 == pooled[i].0 {
            j += 1;
        }
        // ranks i+1..=j share the midrank (i+1+j)/2
        let midrank_x2 = (i + 1 + j) as u128;
        let n_id_here = pooled[i..j].iter().filter(|p| p.1).count() as u128;
        id_rank_sum_x2 += midrank_x2 * n_id_here;
        i = j;
    }
    let n_id = id_scores.len() as u128;
    let n_ood = ood_scores.len() as u128;
    // Mann-Whitney U for the ID sample, doubled
    let u_x2 = id_rank_sum_x2 - n_id * (n_id + 1);
    Ok(u_x2 as f64 / (2 * n_id * n_ood) as f64)
}

/// Smallest count k with k / n >= target, evaluated in the same floating-point
/// form a direct threshold scan would use.
fn required_count(n: usize, target: f64) -> usize {
    let mut k = ((target * n as f64).ceil() as usize).min(n);
    while k > 0 && (k - 1) as f64 / n as f64 >= target {
        k -= 1;
    }
    while k < n && (k as f64 / n as f64) < target {
        k += 1;
    }
    k.max(1)
}

/// Threshold keeping at least `tpr_target` of ID scores: the largest tau with
/// |{id >= tau}| / n_id >= tpr_target.
pub fn threshold_at_tpr(id_scores: &[f64], tpr_target: f64) -> Result<f64> {
    check_scores("ID", id_scores)?;
    if !(tpr_target > 0.0 && tpr_target <= 1.0) {
        return Err(Error::Contract(format!(
            "TPR target {tpr_target} outside (0, 1]"
        )));
    }
    let mut sorted = id_scores.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let k = required_count(sorted.len(), tpr_target);
    Ok(sorted[k - 1])
}

/// Fraction of OOD scores at or above the threshold that keeps `tpr_target`
/// of ID scores.
pub fn fpr_at_tpr(id_scores: &[f64], ood_scores: &[f64], tpr_target: f64) -> Result<f64> {
    check_scores("OOD", ood_scores)?;
    let tau = threshold_at_tpr(id_scores, tpr_target)?;
    let accepted = ood_scores.iter().filter(|&&s| s >= tau).count();
    Ok(accepted as f64 / ood_scores.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub detector_name: String,
    pub ood_set_name: String,
    pub auroc: f64,
    pub fpr_at_95tpr: f64,
    pub n_id: usize,
    pub n_ood: usize,
    pub config_digest: String,
}

/// One report per OOD set followed by an unweighted `Average` row.
pub fn evaluate(
    detector_name: &str,
    id_scores: &[f64],
    ood_sets: &[(String, Vec<f64>)],
    config_digest: &str,
) -> Result<Vec<EvalReport>> {
    if ood_sets.is_empty() {
        return Err(Error::Contract("no OOD sets to evaluate".into()));
    }
    let mut reports = Vec::with_capacity(ood_sets.len() + 1);
    for (name, scores) in ood_sets {
        reports.push(EvalReport {
            detector_name: detector_name.to_owned(),
            ood_set_name: name.clone(),
            auroc: auroc(id_scores, scores)?,
            fpr_at_95tpr: fpr_at_tpr(id_scores, scores, 0.95)?,
            n_id: id_scores.len(),
            n_ood: scores.len(),
            config_digest: config_digest.to_owned(),
        });
    }
    let k = reports.len() as f64;
    reports.push(EvalReport {
        detector_name: detector_name.to_owned(),
        ood_set_name: AVERAGE_ROW.to_owned(),
        auroc: reports.iter().map(|r| r.auroc).sum::<f64>() / k,
        fpr_at_95tpr: reports.iter().map(|r| r.fpr_at_95tpr).sum::<f64>() / k,
        n_id: id_scores.len(),
        n_ood: reports.iter().map(|r| r.n_ood).sum(),
        config_digest: config_digest.to_owned(),
    });
    Ok(reports)
}

pub fn reports_to_csv(reports: &[EvalReport]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in reports {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.detector_name, r.ood_set_name, r.auroc, r.fpr_at_95tpr, r.n_id, r.n_ood
        );
    }
    out
}

/// Aligned plain-text table with metrics in percent, as usually reported.
pub fn reports_to_table(reports: &[EvalReport]) -> String {
    let det_w = reports
        .iter()
        .map(|r| r.detector_name.len())
        .chain([8])
        .max()
        .unwrap_or(8);
    let set_w = reports
        .iter()
        .map(|r| r.ood_set_name.len())
        .chain([7])
        .max()
        .unwrap_or(7);
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<det_w$}  {:<set_w$}  {:>8}  {:>8}  {:>7}  {:>7}",
        "detector", "ood_set", "AUROC%", "FPR95%", "n_id", "n_ood"
    );
    for r in reports {
        let _ = writeln!(
            out,
            "{:<det_w$}  {:<set_w$}  {:>8.2}  {:>8.2}  {:>7}  {:>7}",
            r.detector_name,
            r.ood_set_name,
            100.0 * r.auroc,
            100.0 * r.fpr_at_95tpr,
            r.n_id,
            r.n_ood
        );
    }
    out
}
