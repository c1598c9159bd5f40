//! Virtual-rater inference and the evaluation protocol.
//!
//! Scores are compared at full 64-bit precision; rank ties get the
//! standard half credit. The ordinal evaluation runs binary ROC analysis
//! per cutoff (`label > k`), reports the full AUC and the partial AUC
//! within FPR ≤ `fpr_max` normalized by `fpr_max`, and summarises
//! all-cutoff ordering quality with the rank index: the fraction of
//! correctly ordered cross-class score pairs (a multipartite AUC).
//!
//! Virtual raters are combined by averaging severity scores. Averages are
//! always accumulated in ascending rater order, so a greedy set that
//! happens to contain all raters reproduces the mean rater bit for bit.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::model::FittedModel;
use crate::tensor::Tensor;
use crate::{Error, Result};

// ── rank metrics ─────────────────────────────────────────────────────

/// ROC vertices from sweeping all distinct score thresholds, ties
/// grouped; starts at (0,0) and ends at (1,1).
pub fn roc_points(scores: &[f64], labels: &[bool]) -> Result<Vec<(f64, f64)>> {
    if scores.len() != labels.len() {
        return Err(Error::Metric(format!(
            "roc: {} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Metric("roc: non-finite score".into()));
    }
    let npos = labels.iter().filter(|&&l| l).count();
    let nneg = labels.len() - npos;
    if npos == 0 || nneg == 0 {
        return Err(Error::Metric(format!(
            "roc needs both classes, got {} positives / {} negatives",
            npos, nneg
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let mut points = Vec::with_capacity(scores.len() + 1);
    points.push((0.0, 0.0));
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        while i < order.len() && scores[order[i]] == threshold {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((fp as f64 / nneg as f64, tp as f64 / npos as f64));
    }
    Ok(points)
}

fn trapezoid(points: &[(f64, f64)]) -> f64 {
    let mut area = 0.0;
    for w in points.windows(2) {
        let (x0, y0) = w[0];
        let (x1, y1) = w[1];
        area += (x1 - x0) * (y0 + y1) / 2.0;
    }
    area
}

/// Full area under the ROC curve.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    Ok(trapezoid(&roc_points(scores, labels)?))
}

/// Area of the ROC restricted to FPR ∈ [0, fpr_max] (linear
/// interpolation at the boundary), divided by fpr_max so a perfect
/// classifier scores 1 at any cutoff.
pub fn partial_auc(scores: &[f64], labels: &[bool], fpr_max: f64) -> Result<f64> {
    if !(fpr_max > 0.0 && fpr_max <= 1.0) {
        return Err(Error::Metric(format!(
            "partial_auc: fpr_max must be in (0, 1], got {}",
            fpr_max
        )));
    }
    let points = roc_points(scores, labels)?;
    let mut area = 0.0;
    for w in points.windows(2) {
        let (x0, y0) = w[0];
        let (x1, y1) = w[1];
        if x1 <= fpr_max {
            area += (x1 - x0) * (y0 + y1) / 2.0;
        } else {
            if x0 < fpr_max {
                // segment crosses the boundary (x1 > fpr_max ≥ x0 ⇒ x1 > x0)
                let t = (fpr_max - x0) / (x1 - x0);
                let y_cut = y0 + t * (y1 - y0);
                area += (fpr_max - x0) * (y0 + y_cut) / 2.0;
            }
            break;
        }
    }
    Ok(area / fpr_max)
}

/// Rank index over ordered groups: across all pairs with a lower and a
/// higher label, the fraction where the scores are ordered the same way,
/// ties counting one half. Equals the AUC when exactly two labels occur.
pub fn jt_index(scores: &[f64], labels: &[usize]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Metric(format!(
            "jt_index: {} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Metric("jt_index: non-finite score".into()));
    }
    let mut classes: Vec<usize> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 {
        return Err(Error::Metric(
            "jt_index needs at least two distinct label groups".into(),
        ));
    }
    let mut per_class: Vec<Vec<f64>> = vec![Vec::new(); classes.len()];
    for (&s, &y) in scores.iter().zip(labels) {
        let c = classes.binary_search(&y).unwrap();
        per_class[c].push(s);
    }
    let mut favourable = 0.0;
    let mut total = 0.0;
    for lo in 0..classes.len() {
        for hi in lo + 1..classes.len() {
            favourable += mann_whitney_u(&per_class[lo], &per_class[hi]);
            total += (per_class[lo].len() * per_class[hi].len()) as f64;
        }
    }
    Ok(favourable / total)
}

/// U statistic of `hi` over `lo` via midranks: the number of (lo, hi)
/// pairs with the hi score strictly larger, plus half the ties.
fn mann_whitney_u(lo: &[f64], hi: &[f64]) -> f64 {
    let mut merged: Vec<(f64, bool)> = lo
        .iter()
        .map(|&s| (s, false))
        .chain(hi.iter().map(|&s| (s, true)))
        .collect();
    merged.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum_hi = 0.0;
    let mut i = 0;
    while i < merged.len() {
        let mut j = i;
        while j < merged.len() && merged[j].0 == merged[i].0 {
            j += 1;
        }
        // midrank of the tie run [i, j), 1-based ranks
        let midrank = (i + 1 + j) as f64 / 2.0;
        for item in &merged[i..j] {
            if item.1 {
                rank_sum_hi += midrank;
            }
        }
        i = j;
    }
    let n_hi = hi.len() as f64;
    rank_sum_hi - n_hi * (n_hi + 1.0) / 2.0
}

/// Mean score per group, groups in first-appearance order.
pub fn group_aggregate(pairs: &[(u64, f64)]) -> Vec<(u64, f64)> {
    let mut order = Vec::new();
    let mut acc: std::collections::HashMap<u64, (f64, usize)> = std::collections::HashMap::new();
    for &(g, s) in pairs {
        let entry = acc.entry(g).or_insert_with(|| {
            order.push(g);
            (0.0, 0)
        });
        entry.0 += s;
        entry.1 += 1;
    }
    order
        .into_iter()
        .map(|g| {
            let (sum, n) = acc[&g];
            (g, sum / n as f64)
        })
        .collect()
}

// ── virtual raters ───────────────────────────────────────────────────

/// Metric used to drive greedy rater selection.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectionMetric {
    JtIndex,
    /// Normalized partial AUC of one binary cutoff.
    PartialAuc { cutoff: usize },
}

impl SelectionMetric {
    pub fn name(&self) -> String {
        match self {
            SelectionMetric::JtIndex => "jt-index".into(),
            SelectionMetric::PartialAuc { cutoff } => format!("partial-auc-{}", cutoff),
        }
    }

    fn value(&self, scores: &[f64], labels: &[usize], fpr_max: f64) -> Result<f64> {
        match self {
            SelectionMetric::JtIndex => jt_index(scores, labels),
            SelectionMetric::PartialAuc { cutoff } => {
                let binary: Vec<bool> = labels.iter().map(|&y| y > *cutoff).collect();
                partial_auc(scores, &binary, fpr_max)
            }
        }
    }
}

/// Outcome of greedy rater selection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VirtualRaterSet {
    /// Selected rater indices, in the order they were chosen.
    pub raters: Vec<usize>,
    pub metric: String,
    /// Validation metric after each accepted step.
    pub step_scores: Vec<f64>,
}

/// Severity score of virtual rater `r` for one sample.
pub fn predict_rater(model: &FittedModel, x: &[f64], r: usize) -> Result<f64> {
    let xt = Tensor::new(vec![1, x.len()], x.to_vec())?;
    Ok(model.rater_scores(&xt, r)?[0])
}

/// Mean over all virtual raters for one sample.
pub fn mean_rater(model: &FittedModel, x: &[f64]) -> Result<f64> {
    let xt = Tensor::new(vec![1, x.len()], x.to_vec())?;
    Ok(model.mean_scores(&xt)?[0])
}

/// Average of the selected raters' scores for one sample. The divisor is
/// the size of the selected set; summation runs in ascending rater order.
pub fn greedy_predict(model: &FittedModel, set: &VirtualRaterSet, x: &[f64]) -> Result<f64> {
    if set.raters.is_empty() {
        return Err(Error::InvalidArgument("greedy_predict: empty rater set".into()));
    }
    let xt = Tensor::new(vec![1, x.len()], x.to_vec())?;
    let mut raters = set.raters.clone();
    raters.sort_unstable();
    let mut acc = 0.0;
    for &r in &raters {
        acc += model.rater_scores(&xt, r)?[0];
    }
    Ok(acc / raters.len() as f64)
}

/// Combined per-sample scores of a rater subset (ascending order), then
/// aggregated to group means.
fn combined_unit_scores(
    rater_sample_scores: &[Vec<f64>],
    raters: &[usize],
    groups: &[u64],
) -> Vec<f64> {
    let mut sorted = raters.to_vec();
    sorted.sort_unstable();
    let n = groups.len();
    let mut combined = vec![0.0; n];
    for &r in &sorted {
        for (c, s) in combined.iter_mut().zip(&rater_sample_scores[r]) {
            *c += s;
        }
    }
    for c in &mut combined {
        *c /= sorted.len() as f64;
    }
    let pairs: Vec<(u64, f64)> = groups.iter().copied().zip(combined).collect();
    group_aggregate(&pairs).into_iter().map(|(_, s)| s).collect()
}

/// Greedy selection core over precomputed per-rater sample scores.
fn greedy_select_from_scores(
    rater_sample_scores: &[Vec<f64>],
    groups: &[u64],
    unit_labels: &[usize],
    metric: SelectionMetric,
    fpr_max: f64,
) -> Result<VirtualRaterSet> {
    let num_raters = rater_sample_scores.len();
    let mut selected: Vec<usize> = Vec::new();
    let mut step_scores = Vec::new();
    let mut best = f64::NEG_INFINITY;
    loop {
        let mut candidate: Option<(usize, f64)> = None;
        for r in 0..num_raters {
            if selected.contains(&r) {
                continue;
            }
            let mut trial = selected.clone();
            trial.push(r);
            let units = combined_unit_scores(rater_sample_scores, &trial, groups);
            let value = metric.value(&units, unit_labels, fpr_max)?;
            // strict improvement over the current best candidate; ties keep
            // the lowest rater index because of the ascending scan
            if value > candidate.map(|(_, v)| v).unwrap_or(f64::NEG_INFINITY) {
                candidate = Some((r, value));
            }
        }
        match candidate {
            Some((r, value)) if value > best => {
                selected.push(r);
                step_scores.push(value);
                best = value;
            }
            _ => break,
        }
        if selected.len() == num_raters {
            break;
        }
    }
    Ok(VirtualRaterSet {
        raters: selected,
        metric: metric.name(),
        step_scores,
    })
}

/// Greedily grows a rater set on a gold-labelled validation set until the
/// metric stops improving. Deterministic: ties go to the lowest index.
pub fn greedy_select(
    model: &FittedModel,
    val: &Dataset,
    metric: SelectionMetric,
    fpr_max: f64,
) -> Result<VirtualRaterSet> {
    if val.is_empty() {
        return Err(Error::Metric("greedy_select: empty validation set".into()));
    }
    let gold = val.group_gold_labels()?;
    let unit_labels: Vec<usize> = gold.iter().map(|&(_, y)| y).collect();
    let groups: Vec<u64> = val.samples.iter().map(|s| s.group_id).collect();
    let x = val.all_features();
    let rater_sample_scores: Vec<Vec<f64>> = (0..model.num_raters())
        .map(|r| model.rater_scores(&x, r))
        .collect::<Result<_>>()?;
    greedy_select_from_scores(&rater_sample_scores, &groups, &unit_labels, metric, fpr_max)
}

// ── reports ──────────────────────────────────────────────────────────

/// How to turn a fitted model into one score per sample.
#[derive(Clone, Copy, Debug)]
pub enum Predictor<'a> {
    /// Average of all virtual raters.
    Mean,
    /// Average of a selected subset.
    Greedy(&'a VirtualRaterSet),
    /// A single virtual rater.
    Rater(usize),
}

/// Per-cutoff ROC summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CutoffReport {
    pub cutoff: usize,
    pub auc: f64,
    pub partial_auc: f64,
    pub roc: Vec<(f64, f64)>,
}

/// Full evaluation of one predictor on one gold-labelled dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub model: String,
    pub jt_index: f64,
    pub fpr_max: f64,
    pub num_units: usize,
    pub cutoffs: Vec<CutoffReport>,
}

/// Scores `ds` sample-wise with the predictor, averages scores within
/// each group, and evaluates the group-level scores against gold labels.
pub fn evaluate_model(
    model: &FittedModel,
    predictor: Predictor,
    ds: &Dataset,
    fpr_max: f64,
    name: &str,
) -> Result<EvaluationReport> {
    if ds.is_empty() {
        return Err(Error::Metric("evaluate_model: empty dataset".into()));
    }
    let x = ds.all_features();
    let sample_scores = match predictor {
        Predictor::Mean => model.mean_scores(&x)?,
        Predictor::Rater(r) => model.rater_scores(&x, r)?,
        Predictor::Greedy(set) => {
            if set.raters.is_empty() {
                return Err(Error::InvalidArgument("evaluate_model: empty rater set".into()));
            }
            let mut raters = set.raters.clone();
            raters.sort_unstable();
            let mut acc = model.rater_scores(&x, raters[0])?;
            for &r in &raters[1..] {
                for (a, s) in acc.iter_mut().zip(model.rater_scores(&x, r)?) {
                    *a += s;
                }
            }
            for a in &mut acc {
                *a /= raters.len() as f64;
            }
            acc
        }
    };
    let pairs: Vec<(u64, f64)> = ds
        .samples
        .iter()
        .map(|s| s.group_id)
        .zip(sample_scores)
        .collect();
    let units = group_aggregate(&pairs);
    let gold = ds.group_gold_labels()?;
    debug_assert!(units.iter().map(|&(g, _)| g).eq(gold.iter().map(|&(g, _)| g)));
    let scores: Vec<f64> = units.into_iter().map(|(_, s)| s).collect();
    let labels: Vec<usize> = gold.into_iter().map(|(_, y)| y).collect();
    evaluate_scores(&scores, &labels, ds.num_classes, fpr_max, name)
}

/// Evaluation of precomputed unit scores against gold unit labels.
pub fn evaluate_scores(
    scores: &[f64],
    labels: &[usize],
    num_classes: usize,
    fpr_max: f64,
    name: &str,
) -> Result<EvaluationReport> {
    let mut cutoffs = Vec::with_capacity(num_classes - 1);
    for cutoff in 0..num_classes - 1 {
        let binary: Vec<bool> = labels.iter().map(|&y| y > cutoff).collect();
        cutoffs.push(CutoffReport {
            cutoff,
            auc: auc(scores, &binary)?,
            partial_auc: partial_auc(scores, &binary, fpr_max)?,
            roc: roc_points(scores, &binary)?,
        });
    }
    Ok(EvaluationReport {
        model: name.to_string(),
        jt_index: jt_index(scores, labels)?,
        fpr_max,
        num_units: scores.len(),
        cutoffs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    // ── brute-force oracles ──────────────────────────────────────────

    /// AUC as the pairwise ordering probability with half credit for ties.
    fn auc_pair_oracle(scores: &[f64], labels: &[bool]) -> f64 {
        let mut favourable = 0.0;
        let mut total = 0.0;
        for (i, (&si, &li)) in scores.iter().zip(labels).enumerate() {
            for (&sj, &lj) in scores.iter().zip(labels).skip(i + 1) {
                let (pos, neg) = match (li, lj) {
                    (true, false) => (si, sj),
                    (false, true) => (sj, si),
                    _ => continue,
                };
                total += 1.0;
                if pos > neg {
                    favourable += 1.0;
                } else if pos == neg {
                    favourable += 0.5;
                }
            }
        }
        favourable / total
    }

    /// ROC points by explicitly counting at every candidate threshold.
    fn roc_threshold_oracle(scores: &[f64], labels: &[bool]) -> Vec<(f64, f64)> {
        let npos = labels.iter().filter(|&&l| l).count() as f64;
        let nneg = labels.len() as f64 - npos;
        let mut thresholds: Vec<f64> = scores.to_vec();
        thresholds.sort_by(|a, b| b.total_cmp(a));
        thresholds.dedup();
        let mut points = vec![(0.0, 0.0)];
        for t in thresholds {
            let tp = scores
                .iter()
                .zip(labels)
                .filter(|(s, l)| **s >= t && **l)
                .count() as f64;
            let fp = scores
                .iter()
                .zip(labels)
                .filter(|(s, l)| **s >= t && !**l)
                .count() as f64;
            points.push((fp / nneg, tp / npos));
        }
        points
    }

    /// Partial AUC by dense-threshold counting plus boundary interpolation.
    fn pauc_dense_oracle(scores: &[f64], labels: &[bool], fpr_max: f64) -> f64 {
        let lo = scores.iter().cloned().fold(f64::MAX, f64::min) - 1.0;
        let hi = scores.iter().cloned().fold(f64::MIN, f64::max) + 1.0;
        let npos = labels.iter().filter(|&&l| l).count() as f64;
        let nneg = labels.len() as f64 - npos;
        let grid = 20_000;
        let mut points: Vec<(f64, f64)> = (0..=grid)
            .map(|i| {
                let t = hi - (hi - lo) * i as f64 / grid as f64;
                let tp = scores
                    .iter()
                    .zip(labels)
                    .filter(|(s, l)| **s >= t && **l)
                    .count() as f64;
                let fp = scores
                    .iter()
                    .zip(labels)
                    .filter(|(s, l)| **s >= t && !**l)
                    .count() as f64;
                (fp / nneg, tp / npos)
            })
            .collect();
        points.dedup();
        let mut area = 0.0;
        for w in points.windows(2) {
            let (x0, y0) = w[0];
            let (x1, y1) = w[1];
            if x1 <= fpr_max {
                area += (x1 - x0) * (y0 + y1) / 2.0;
            } else if x0 < fpr_max {
                let t = (fpr_max - x0) / (x1 - x0);
                let y_cut = y0 + t * (y1 - y0);
                area += (fpr_max - x0) * (y0 + y_cut) / 2.0;
            }
        }
        area / fpr_max
    }

    /// Rank index by explicit pair counting.
    fn jt_pair_oracle(scores: &[f64], labels: &[usize]) -> f64 {
        let mut favourable = 0.0;
        let mut total = 0.0;
        for (i, (&si, &yi)) in scores.iter().zip(labels).enumerate() {
            for (&sj, &yj) in scores.iter().zip(labels).skip(i + 1) {
                let (lo, hi) = match yi.cmp(&yj) {
                    std::cmp::Ordering::Less => (si, sj),
                    std::cmp::Ordering::Greater => (sj, si),
                    std::cmp::Ordering::Equal => continue,
                };
                total += 1.0;
                if hi > lo {
                    favourable += 1.0;
                } else if hi == lo {
                    favourable += 0.5;
                }
            }
        }
        favourable / total
    }

    fn random_case(rng: &mut ChaCha8Rng, n: usize, ties: bool) -> (Vec<f64>, Vec<usize>) {
        let scores: Vec<f64> = (0..n)
            .map(|_| {
                if ties {
                    (rng.random_range(0..8) as f64) / 4.0
                } else {
                    rng.random_range(-3.0..3.0)
                }
            })
            .collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..4)).collect();
        (scores, labels)
    }

    // ── roc ──────────────────────────────────────────────────────────

    #[test]
    fn perfectly_separated_curve_passes_through_corner() {
        let scores = [0.9, 0.8, 0.2, 0.1];
        let labels = [true, true, false, false];
        let points = roc_points(&scores, &labels).unwrap();
        assert!(points.contains(&(0.0, 1.0)));
        assert_eq!(points.first(), Some(&(0.0, 0.0)));
        assert_eq!(points.last(), Some(&(1.0, 1.0)));
        assert_eq!(auc(&scores, &labels).unwrap(), 1.0);
    }

    #[test]
    fn all_tied_scores_give_the_diagonal() {
        let scores = [0.5; 6];
        let labels = [true, false, true, false, true, false];
        let points = roc_points(&scores, &labels).unwrap();
        assert_eq!(points, vec![(0.0, 0.0), (1.0, 1.0)]);
        assert!((auc(&scores, &labels).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn roc_rejects_single_class() {
        assert!(roc_points(&[0.1, 0.2], &[true, true]).is_err());
        assert!(roc_points(&[0.1, 0.2], &[false, false]).is_err());
    }

    #[test]
    fn roc_matches_threshold_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for case in 0..30 {
            let n = rng.random_range(4..60);
            let (scores, labels4) = random_case(&mut rng, n, case % 3 == 0);
            let labels: Vec<bool> = labels4.iter().map(|&y| y > 1).collect();
            if labels.iter().all(|&l| l) || labels.iter().all(|&l| !l) {
                continue;
            }
            let got = roc_points(&scores, &labels).unwrap();
            let expect = roc_threshold_oracle(&scores, &labels);
            assert_eq!(got.len(), expect.len(), "case {}", case);
            for (g, e) in got.iter().zip(&expect) {
                assert!((g.0 - e.0).abs() < 1e-12 && (g.1 - e.1).abs() < 1e-12);
            }
            // monotone in both coordinates
            for w in got.windows(2) {
                assert!(w[1].0 >= w[0].0 && w[1].1 >= w[0].1);
            }
        }
    }

    // ── auc / partial auc ────────────────────────────────────────────

    #[test]
    fn auc_matches_pair_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        for case in 0..30 {
            let n = rng.random_range(4..80);
            let (scores, labels4) = random_case(&mut rng, n, case % 2 == 0);
            let labels: Vec<bool> = labels4.iter().map(|&y| y > 1).collect();
            if labels.iter().all(|&l| l) || labels.iter().all(|&l| !l) {
                continue;
            }
            let got = auc(&scores, &labels).unwrap();
            let expect = auc_pair_oracle(&scores, &labels);
            assert!((got - expect).abs() < 1e-12, "case {}: {} vs {}", case, got, expect);
        }
    }

    #[test]
    fn perfect_classifier_has_unit_partial_auc() {
        let scores = [5.0, 4.0, 1.0, 0.0];
        let labels = [true, true, false, false];
        for fpr_max in [0.05, 0.3, 0.7, 1.0] {
            assert_eq!(partial_auc(&scores, &labels, fpr_max).unwrap(), 1.0);
        }
    }

    #[test]
    fn partial_auc_at_full_range_equals_auc() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..10 {
            let (scores, labels4) = random_case(&mut rng, 40, false);
            let labels: Vec<bool> = labels4.iter().map(|&y| y > 0).collect();
            let full = auc(&scores, &labels).unwrap();
            let partial = partial_auc(&scores, &labels, 1.0).unwrap();
            assert!((full - partial).abs() < 1e-15);
        }
    }

    #[test]
    fn partial_auc_matches_dense_threshold_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        for case in 0..15 {
            let (scores, labels4) = random_case(&mut rng, 20, case % 3 == 0);
            let labels: Vec<bool> = labels4.iter().map(|&y| y > 1).collect();
            if labels.iter().all(|&l| l) || labels.iter().all(|&l| !l) {
                continue;
            }
            for fpr_max in [0.1, 0.3, 0.65] {
                let got = partial_auc(&scores, &labels, fpr_max).unwrap();
                let expect = pauc_dense_oracle(&scores, &labels, fpr_max);
                assert!(
                    (got - expect).abs() < 1e-9,
                    "case {} fpr {}: {} vs {}",
                    case,
                    fpr_max,
                    got,
                    expect
                );
            }
        }
    }

    #[test]
    fn partial_auc_rejects_bad_fpr_max() {
        let scores = [1.0, 0.0];
        let labels = [true, false];
        assert!(partial_auc(&scores, &labels, 0.0).is_err());
        assert!(partial_auc(&scores, &labels, 1.5).is_err());
    }

    // ── rank index ───────────────────────────────────────────────────

    #[test]
    fn jt_extremes() {
        let labels = [0usize, 0, 1, 2, 2, 3];
        let increasing = [0.0, 0.1, 1.0, 2.0, 2.1, 3.0];
        assert_eq!(jt_index(&increasing, &labels).unwrap(), 1.0);
        let decreasing: Vec<f64> = increasing.iter().map(|s| -s).collect();
        assert_eq!(jt_index(&decreasing, &labels).unwrap(), 0.0);
        let flat = [1.0; 6];
        assert_eq!(jt_index(&flat, &labels).unwrap(), 0.5);
        assert!(jt_index(&[1.0, 2.0], &[1, 1]).is_err());
    }

    #[test]
    fn jt_matches_pair_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        for case in 0..30 {
            let n = rng.random_range(5..100);
            let (scores, labels) = random_case(&mut rng, n, case % 2 == 1);
            let distinct: std::collections::HashSet<usize> = labels.iter().copied().collect();
            if distinct.len() < 2 {
                continue;
            }
            let got = jt_index(&scores, &labels).unwrap();
            let expect = jt_pair_oracle(&scores, &labels);
            assert!((got - expect).abs() < 1e-12, "case {}: {} vs {}", case, got, expect);
        }
    }

    #[test]
    fn jt_on_two_groups_equals_auc() {
        let mut rng = ChaCha8Rng::seed_from_u64(26);
        for _ in 0..20 {
            let n = rng.random_range(6..60);
            let scores: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..2)).collect();
            let binary: Vec<bool> = labels.iter().map(|&y| y == 1).collect();
            if binary.iter().all(|&b| b) || binary.iter().all(|&b| !b) {
                continue;
            }
            let jt = jt_index(&scores, &labels).unwrap();
            let auc = auc(&scores, &binary).unwrap();
            assert!((jt - auc).abs() < 1e-12);
        }
    }

    // ── grouping ─────────────────────────────────────────────────────

    #[test]
    fn group_aggregate_examples() {
        // singleton groups: identity
        let pairs = [(7u64, 1.5), (3, 0.25), (9, -2.0)];
        assert_eq!(group_aggregate(&pairs), pairs.to_vec());
        // pair mean
        let pairs = [(1u64, 1.0), (1, 2.0)];
        assert_eq!(group_aggregate(&pairs), vec![(1, 1.5)]);
    }

    #[test]
    fn group_aggregate_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(27);
        let pairs: Vec<(u64, f64)> = (0..200)
            .map(|_| (rng.random_range(0..20u64), rng.random_range(-2.0..2.0)))
            .collect();
        let got = group_aggregate(&pairs);
        // first-appearance order
        let mut seen = Vec::new();
        for &(g, _) in &pairs {
            if !seen.contains(&g) {
                seen.push(g);
            }
        }
        assert_eq!(got.iter().map(|&(g, _)| g).collect::<Vec<_>>(), seen);
        for (g, mean) in got {
            let members: Vec<f64> = pairs.iter().filter(|p| p.0 == g).map(|p| p.1).collect();
            let expect = members.iter().sum::<f64>() / members.len() as f64;
            assert!((mean - expect).abs() < 1e-12);
        }
    }

    // ── greedy selection ─────────────────────────────────────────────

    fn singleton_groups(n: usize) -> Vec<u64> {
        (0..n as u64).collect()
    }

    #[test]
    fn dominant_rater_is_selected_alone() {
        let labels = vec![0usize, 0, 1, 1, 2, 2, 3, 3];
        let perfect: Vec<f64> = labels.iter().map(|&y| y as f64).collect();
        let inverted: Vec<f64> = labels.iter().map(|&y| -(y as f64)).collect();
        let scores = vec![inverted.clone(), perfect, inverted];
        let set = greedy_select_from_scores(
            &scores,
            &singleton_groups(labels.len()),
            &labels,
            SelectionMetric::JtIndex,
            0.3,
        )
        .unwrap();
        assert_eq!(set.raters, vec![1]);
        assert_eq!(set.step_scores, vec![1.0]);
    }

    #[test]
    fn greedy_breaks_ties_toward_lowest_index() {
        let labels = vec![0usize, 1, 2, 3];
        let good: Vec<f64> = labels.iter().map(|&y| y as f64).collect();
        let scores = vec![good.clone(), good.clone(), good];
        let set = greedy_select_from_scores(
            &scores,
            &singleton_groups(4),
            &labels,
            SelectionMetric::JtIndex,
            0.3,
        )
        .unwrap();
        assert_eq!(set.raters, vec![0]);
    }

    #[test]
    fn greedy_steps_are_strictly_improving() {
        // rater 0 separates {0,1} from {2,3}; rater 1 fixes the rest when
        // averaged with 0; rater 2 is noise
        let labels = vec![0usize, 1, 2, 3, 0, 1, 2, 3];
        let r0: Vec<f64> = labels.iter().map(|&y| if y >= 2 { 1.0 } else { 0.0 }).collect();
        let r1: Vec<f64> = labels.iter().map(|&y| (y % 2) as f64).collect();
        let r2: Vec<f64> = vec![0.9, 0.1, 0.5, 0.2, 0.3, 0.8, 0.1, 0.4];
        let set = greedy_select_from_scores(
            &[r0, r1, r2],
            &singleton_groups(8),
            &labels,
            SelectionMetric::JtIndex,
            0.3,
        )
        .unwrap();
        assert!(!set.raters.is_empty());
        for w in set.step_scores.windows(2) {
            assert!(w[1] > w[0]);
        }
        // the final set beats (or ties) every single rater by construction
        let best_single = set.step_scores[0];
        assert!(set.step_scores.last().unwrap() >= &best_single);
    }

    #[test]
    fn selection_of_size_two_is_representable() {
        // two complementary raters, each weak alone, strong averaged
        let labels = vec![0usize, 1, 2, 3, 0, 1, 2, 3];
        let r0: Vec<f64> = vec![0.0, 1.0, 2.0, 2.0, 0.0, 1.0, 2.0, 2.0];
        let r1: Vec<f64> = vec![0.0, 0.0, 1.0, 2.0, 0.0, 0.0, 1.0, 2.0];
        let set = greedy_select_from_scores(
            &[r0, r1],
            &singleton_groups(8),
            &labels,
            SelectionMetric::JtIndex,
            0.3,
        )
        .unwrap();
        assert_eq!(set.raters.len(), 2);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn metrics_are_permutation_invariant(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = rng.random_range(6..40);
            let (scores, labels) = random_case(&mut rng, n, seed % 2 == 0);
            let distinct: std::collections::HashSet<usize> = labels.iter().copied().collect();
            prop_assume!(distinct.len() >= 2);
            let mut idx: Vec<usize> = (0..n).collect();
            use rand::seq::SliceRandom;
            idx.shuffle(&mut rng);
            let ps: Vec<f64> = idx.iter().map(|&i| scores[i]).collect();
            let pl: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let a = jt_index(&scores, &labels).unwrap();
            let b = jt_index(&ps, &pl).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }

        #[test]
        fn partial_auc_is_rank_invariant(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = rng.random_range(6..40);
            let (scores, labels4) = random_case(&mut rng, n, false);
            let labels: Vec<bool> = labels4.iter().map(|&y| y > 1).collect();
            prop_assume!(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l));
            // strictly increasing transform preserves ranks
            let transformed: Vec<f64> = scores.iter().map(|&s| (s * 0.4).exp() + 3.0 * s).collect();
            let a = partial_auc(&scores, &labels, 0.3).unwrap();
            let b = partial_auc(&transformed, &labels, 0.3).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&a));
        }
    }
}
