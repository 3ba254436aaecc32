//! Scoring an inferred network against the true adjacency.
//!
//! Self-links are excluded by default: stable systems always carry them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::results::PosteriorSummary;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
}

/// TPR and precision; `None` where the ratio is 0/0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinaryMetrics {
    pub counts: Counts,
    pub tpr: Option<f64>,
    pub prec: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankedMetrics {
    pub auroc: f64,
    pub auprec: f64,
}

fn check_shape<T, U>(a: &[Vec<T>], b: &[Vec<U>]) -> Result<()> {
    let same = a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.len() == y.len());
    if same {
        Ok(())
    } else {
        Err(Error::Dimension("prediction and truth differ in shape".into()))
    }
}

fn entries<'a, T: Copy>(m: &'a [Vec<T>], exclude_diagonal: bool) -> impl Iterator<Item = T> + 'a {
    m.iter().enumerate().flat_map(move |(r, row)| {
        row.iter()
            .enumerate()
            .filter(move |(j, _)| !(exclude_diagonal && *j == r))
            .map(|(_, v)| *v)
    })
}

pub fn binary_metrics(predicted: &[Vec<bool>], truth: &[Vec<bool>], exclude_diagonal: bool) -> Result<BinaryMetrics> {
    check_shape(predicted, truth)?;
    let mut c = Counts::default();
    for (p, t) in entries(predicted, exclude_diagonal).zip(entries(truth, exclude_diagonal)) {
        match (p, t) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    let ratio = |a: usize, b: usize| (a + b > 0).then(|| a as f64 / (a + b) as f64);
    Ok(BinaryMetrics {
        counts: c,
        tpr: ratio(c.tp, c.fn_),
        prec: ratio(c.tp, c.fp),
    })
}

/// AUROC from the rank statistic (ties averaged) and AUPREC from the
/// precision-recall step function over every distinct threshold.
pub fn ranked_metrics(scores: &[Vec<f64>], truth: &[Vec<bool>], exclude_diagonal: bool) -> Result<RankedMetrics> {
    check_shape(scores, truth)?;
    let s: Vec<f64> = entries(scores, exclude_diagonal).collect();
    let t: Vec<bool> = entries(truth, exclude_diagonal).collect();
    ranked_from_pairs(&s, &t)
}

/// Same as [`ranked_metrics`] on flat score/label lists.
pub fn ranked_from_pairs(scores: &[f64], labels: &[bool]) -> Result<RankedMetrics> {
    if scores.len() != labels.len() {
        return Err(Error::Dimension("scores and labels differ in length".into()));
    }
    if scores.iter().any(|v| !v.is_finite()) {
        return Err(Error::Argument("scores must be finite".into()));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Argument(format!(
            "AUROC is undefined with {pos} positive and {neg} negative links"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    // Walk tie groups from the highest score down.
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut auprec = 0.0;
    let mut prev_recall = 0.0;
    let mut rank_sum = 0.0;
    let n = scores.len();
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j < n && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let group_pos = order[i..j].iter().filter(|&&k| labels[k]).count();
        // Ascending ranks of this group are n−j+1 … n−i; average them.
        let avg_rank = ((n - j + 1) + (n - i)) as f64 / 2.0;
        rank_sum += avg_rank * group_pos as f64;
        tp += group_pos;
        fp += (j - i) - group_pos;
        let recall = tp as f64 / pos as f64;
        auprec += (recall - prev_recall) * tp as f64 / (tp + fp) as f64;
        prev_recall = recall;
        i = j;
    }
    let auroc = (rank_sum - (pos * (pos + 1)) as f64 / 2.0) / (pos * neg) as f64;
    Ok(RankedMetrics { auroc, auprec })
}

/// Link confidence `‖w_rj‖ / ‖w_r‖` from posterior-mean impulse responses.
pub fn kernel_confidence(w_mean: &[Vec<f64>], lags: usize) -> Vec<Vec<f64>> {
    w_mean
        .iter()
        .map(|w| {
            let total = w.iter().map(|v| v * v).sum::<f64>().sqrt();
            w.chunks(lags)
                .map(|blk| {
                    let n = blk.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if total > 0.0 {
                        n / total
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect()
}

/// Which posterior quantity ranks the links.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Scorer {
    #[default]
    LinkProbability,
    ImpulseNorm,
}

/// Metrics of one inferred network. Undefined quantities are `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub tpr: Option<f64>,
    pub prec: Option<f64>,
    pub auroc: Option<f64>,
    pub auprec: Option<f64>,
    pub counts: Counts,
    pub diagonal_excluded: bool,
    pub scorer: Scorer,
    /// TPR/PREC of the per-link 0.5-threshold topology.
    pub threshold_tpr: Option<f64>,
    pub threshold_prec: Option<f64>,
}

/// Scores a posterior summary: `s_map` for TPR/PREC, link probabilities (or
/// impulse-response norms) for AUROC/AUPREC.
pub fn evaluate(
    summary: &PosteriorSummary,
    truth: &[Vec<bool>],
    exclude_diagonal: bool,
    scorer: Scorer,
) -> Result<MetricsReport> {
    let bin = binary_metrics(&summary.s_map, truth, exclude_diagonal)?;
    let thr = binary_metrics(&summary.s_threshold, truth, exclude_diagonal)?;
    let scores = match scorer {
        Scorer::LinkProbability => summary.link_prob.clone(),
        Scorer::ImpulseNorm => kernel_confidence(&summary.w_mean, summary.lags)
            .into_iter()
            .map(|mut row| {
                row.truncate(summary.p);
                row
            })
            .collect(),
    };
    let ranked = match ranked_metrics(&scores, truth, exclude_diagonal) {
        Ok(r) => Some(r),
        Err(Error::Argument(msg)) => {
            log::warn!("{msg}");
            None
        }
        Err(e) => return Err(e),
    };
    Ok(MetricsReport {
        tpr: bin.tpr,
        prec: bin.prec,
        auroc: ranked.map(|r| r.auroc),
        auprec: ranked.map(|r| r.auprec),
        counts: bin.counts,
        diagonal_excluded: exclude_diagonal,
        scorer,
        threshold_tpr: thr.tpr,
        threshold_prec: thr.prec,
    })
}
