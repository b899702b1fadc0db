//! Evaluation protocol: ROC/AUC, equal error rate, Dice-based detection
//! matching, patient-wise FROC curves, and curve emission (CSV + SVG).

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One scored case (a breast or a patient).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ScoredCase {
    pub id: String,
    pub score: f64,
    pub label: bool,
}

impl ScoredCase {
    pub fn new(id: impl Into<String>, score: f64, label: bool) -> Self {
        ScoredCase { id: id.into(), score, label }
    }
}

fn check_cases(cases: &[ScoredCase]) -> Result<(usize, usize)> {
    if cases.iter().any(|c| !c.score.is_finite()) {
        return Err(Error::MetricUndefined("non-finite score".into()));
    }
    let pos = cases.iter().filter(|c| c.label).count();
    let neg = cases.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::MetricUndefined(format!(
            "AUC needs both classes; got {pos} positives and {neg} negatives"
        )));
    }
    Ok((pos, neg))
}

/// Area under the ROC curve: the probability that a uniformly drawn
/// positive outscores a uniformly drawn negative, ties counting half.
/// Computed from average ranks (equivalent to trapezoidal integration).
pub fn roc_auc(cases: &[ScoredCase]) -> Result<f64> {
    let (pos, neg) = check_cases(cases)?;
    let mut order: Vec<usize> = (0..cases.len()).collect();
    order.sort_by(|&a, &b| cases[a].score.partial_cmp(&cases[b].score).expect("finite"));
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && cases[order[j + 1]].score == cases[order[i]].score {
            j += 1;
        }
        // Ranks are 1-based; tied scores share the average rank.
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            if cases[k].label {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos as f64 * neg as f64))
}

/// One ROC operating point under the predicate `score >= threshold`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub tpr: f64,
    pub fpr: f64,
}

/// ROC curve over all distinct thresholds, from (0,0) to (1,1).
pub fn roc_points(cases: &[ScoredCase]) -> Result<Vec<RocPoint>> {
    let (pos, neg) = check_cases(cases)?;
    let mut thresholds: Vec<f64> = cases.iter().map(|c| c.score).collect();
    thresholds.sort_by(|a, b| b.partial_cmp(a).expect("finite"));
    thresholds.dedup();
    let mut out = vec![RocPoint { threshold: f64::INFINITY, tpr: 0.0, fpr: 0.0 }];
    for t in thresholds {
        let tp = cases.iter().filter(|c| c.label && c.score >= t).count();
        let fp = cases.iter().filter(|c| !c.label && c.score >= t).count();
        out.push(RocPoint {
            threshold: t,
            tpr: tp as f64 / pos as f64,
            fpr: fp as f64 / neg as f64,
        });
    }
    Ok(out)
}

/// Equal-error-rate threshold: the candidate minimizing |FPR − FNR|
/// under the predicate `score >= threshold`, candidates being the
/// midpoints between adjacent distinct scores plus one threshold below
/// and one above all scores. Ties resolve to the smallest threshold.
/// Returns `(threshold, eer)` with `eer = (FPR + FNR) / 2` there.
pub fn eer_threshold(cases: &[ScoredCase]) -> Result<(f64, f64)> {
    let (pos, neg) = check_cases(cases)?;
    let mut scores: Vec<f64> = cases.iter().map(|c| c.score).collect();
    scores.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    scores.dedup();
    let mut candidates = Vec::with_capacity(scores.len() + 1);
    candidates.push(scores[0] - 1.0);
    for w in scores.windows(2) {
        candidates.push((w[0] + w[1]) / 2.0);
    }
    candidates.push(scores[scores.len() - 1] + 1.0);

    let mut best: Option<(f64, f64, f64)> = None; // (gap, threshold, eer)
    for t in candidates {
        let fp = cases.iter().filter(|c| !c.label && c.score >= t).count();
        let fnr = cases.iter().filter(|c| c.label && c.score < t).count() as f64 / pos as f64;
        let fpr = fp as f64 / neg as f64;
        let gap = (fpr - fnr).abs();
        let eer = (fpr + fnr) / 2.0;
        if best.map_or(true, |(g, _, _)| gap < g) {
            best = Some((gap, t, eer));
        }
    }
    let (_, threshold, eer) = best.expect("candidate list is non-empty");
    Ok((threshold, eer))
}

/// Greedy matching over a detections × lesions Dice matrix: pairs are
/// taken in descending Dice order among those at or above `dice_min`;
/// every detection and every lesion matches at most once. Returns
/// `(detection, lesion)` index pairs.
pub fn match_by_dice(dice: &[Vec<f64>], dice_min: f64) -> Vec<(usize, usize)> {
    let mut pairs: Vec<(usize, usize, f64)> = Vec::new();
    for (d, row) in dice.iter().enumerate() {
        for (l, &v) in row.iter().enumerate() {
            if v >= dice_min {
                pairs.push((d, l, v));
            }
        }
    }
    pairs.sort_by(|a, b| b.2.partial_cmp(&a.2).expect("finite Dice").then((a.0, a.1).cmp(&(b.0, b.1))));
    let n_det = dice.len();
    let n_les = dice.first().map_or(0, |r| r.len());
    let mut det_used = vec![false; n_det];
    let mut les_used = vec![false; n_les];
    let mut out = Vec::new();
    for (d, l, _) in pairs {
        if !det_used[d] && !les_used[l] {
            det_used[d] = true;
            les_used[l] = true;
            out.push((d, l));
        }
    }
    out
}

/// One patient's candidate detections against its target lesions:
/// per detection a score and its Dice to every target.
#[derive(Clone, Debug, Default)]
pub struct FrocPatient {
    pub id: String,
    /// `(score, dice-to-each-target)` per detection.
    pub detections: Vec<(f64, Vec<f64>)>,
    /// Number of target (malignant) lesions.
    pub lesions: usize,
}

/// One FROC operating point.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrocPoint {
    pub threshold: f64,
    pub tpr: f64,
    pub fpp: f64,
}

/// Patient-wise FROC: at each threshold, detections scoring at or above
/// it are matched per patient (Dice ≥ `dice_min`); TPR is matched
/// lesions over all lesions in the given patient set, FPP is unmatched
/// detections per patient. Scenario restrictions ("all" vs "positively
/// diagnosed only") are expressed by the patient set passed in.
pub fn froc(patients: &[FrocPatient], thresholds: &[f64], dice_min: f64) -> Result<Vec<FrocPoint>> {
    if patients.is_empty() {
        return Err(Error::MetricUndefined("FROC over an empty patient set".into()));
    }
    let total_lesions: usize = patients.iter().map(|p| p.lesions).sum();
    if total_lesions == 0 {
        return Err(Error::MetricUndefined("FROC needs at least one target lesion".into()));
    }
    let mut out = Vec::with_capacity(thresholds.len());
    for &t in thresholds {
        let mut tp = 0usize;
        let mut fp = 0usize;
        for p in patients {
            let rows: Vec<Vec<f64>> = p
                .detections
                .iter()
                .filter(|(s, _)| *s >= t)
                .map(|(_, d)| {
                    debug_assert_eq!(d.len(), p.lesions);
                    d.clone()
                })
                .collect();
            let kept = rows.len();
            let matched = match_by_dice(&rows, dice_min).len();
            tp += matched;
            fp += kept - matched;
        }
        out.push(FrocPoint {
            threshold: t,
            tpr: tp as f64 / total_lesions as f64,
            fpp: fp as f64 / patients.len() as f64,
        });
    }
    Ok(out)
}

/// Default FROC thresholds: one above every score, then each distinct
/// score in descending order.
pub fn froc_thresholds(patients: &[FrocPatient]) -> Vec<f64> {
    let mut scores: Vec<f64> = patients
        .iter()
        .flat_map(|p| p.detections.iter().map(|(s, _)| *s))
        .collect();
    scores.sort_by(|a, b| b.partial_cmp(a).expect("finite scores"));
    scores.dedup();
    let mut out = vec![f64::INFINITY];
    out.extend(scores);
    out
}

/// Best TPR achievable at or below the given false-positives-per-patient
/// budget.
pub fn tpr_at_fpp(points: &[FrocPoint], max_fpp: f64) -> f64 {
    points
        .iter()
        .filter(|p| p.fpp <= max_fpp)
        .map(|p| p.tpr)
        .fold(0.0, f64::max)
}

/// Patient-level score: the maximum over the patient's breast scores.
pub fn patient_score(breast_scores: &[f64]) -> Result<f64> {
    if breast_scores.is_empty() {
        return Err(Error::MetricUndefined("patient with no breast scores".into()));
    }
    Ok(breast_scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
}

/// Writes a curve as CSV with the given header.
pub fn write_curve_csv(path: &Path, header: &[&str], rows: &[Vec<f64>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    w.write_record(header).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    for row in rows {
        let cells: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        w.write_record(&cells).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    }
    w.flush()?;
    Ok(())
}

const SVG_COLORS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

/// Writes a minimal SVG line plot: axes, labels and one polyline per
/// series over the given data ranges.
pub fn write_curve_svg(
    path: &Path,
    title: &str,
    xlabel: &str,
    ylabel: &str,
    series: &[(&str, Vec<(f64, f64)>)],
) -> Result<()> {
    let (w, h, ml, mb, mt, mr) = (480.0, 360.0, 56.0, 44.0, 32.0, 16.0);
    let (x0, y0) = (ml, h - mb);
    let (pw, ph) = (w - ml - mr, h - mt - mb);
    let mut xmax = 1e-9f64;
    let mut ymax = 1e-9f64;
    for (_, pts) in series {
        for &(x, y) in pts {
            xmax = xmax.max(x);
            ymax = ymax.max(y);
        }
    }
    let sx = |x: f64| x0 + pw * (x / xmax);
    let sy = |y: f64| y0 - ph * (y / ymax);

    let mut f = BufWriter::new(File::create(path)?);
    writeln!(
        f,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">"
    )?;
    writeln!(f, "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>")?;
    writeln!(
        f,
        "<text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">{title}</text>",
        w / 2.0
    )?;
    writeln!(
        f,
        "<line x1=\"{x0}\" y1=\"{y0}\" x2=\"{}\" y2=\"{y0}\" stroke=\"black\"/>",
        x0 + pw
    )?;
    writeln!(
        f,
        "<line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x0}\" y2=\"{}\" stroke=\"black\"/>",
        y0 - ph
    )?;
    writeln!(
        f,
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-size=\"12\">{xlabel}</text>",
        x0 + pw / 2.0,
        h - 10.0
    )?;
    writeln!(
        f,
        "<text x=\"14\" y=\"{}\" text-anchor=\"middle\" font-size=\"12\" transform=\"rotate(-90 14 {})\">{ylabel}</text>",
        y0 - ph / 2.0,
        y0 - ph / 2.0
    )?;
    for (tick, label) in [(0.0, "0"), (0.5, "0.5"), (1.0, "1")] {
        let y = y0 - ph * tick;
        writeln!(
            f,
            "<text x=\"{}\" y=\"{}\" text-anchor=\"end\" font-size=\"10\">{label}·{ymax:.2}</text>",
            x0 - 4.0,
            y + 3.0
        )?;
        let x = x0 + pw * tick;
        writeln!(
            f,
            "<text x=\"{x}\" y=\"{}\" text-anchor=\"middle\" font-size=\"10\">{label}·{xmax:.2}</text>",
            y0 + 14.0
        )?;
    }
    for (i, (name, pts)) in series.iter().enumerate() {
        let color = SVG_COLORS[i % SVG_COLORS.len()];
        let path_pts: Vec<String> =
            pts.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
        writeln!(
            f,
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"/>",
            path_pts.join(" ")
        )?;
        writeln!(
            f,
            "<text x=\"{}\" y=\"{}\" font-size=\"11\" fill=\"{color}\">{name}</text>",
            x0 + pw - 110.0,
            y0 - ph + 16.0 + 14.0 * i as f64
        )?;
    }
    writeln!(f, "</svg>")?;
    Ok(())
}
