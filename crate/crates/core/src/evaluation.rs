//! Detection metrics, multiclass episodes, attention monotonicity and a
//! latency micro-benchmark.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Enrollment, EvalPair, Episode, Split};
use crate::discriminator::ScoreRecord;
use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::model::KwsModel;
use crate::pattern::AttentionMap;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn class_counts(s: &[(f64, u8)]) -> Result<(usize, usize)> {
    if s.is_empty() {
        return Err(Error::EmptyInput);
    }
    if let Some(&(_, l)) = s.iter().find(|(_, l)| *l > 1) {
        return Err(Error::Label(f64::from(l)));
    }
    if s.iter().any(|(v, _)| !v.is_finite()) {
        return Err(Error::Invalid("scores must be finite".into()));
    }
    let pos = s.iter().filter(|(_, l)| *l == 1).count();
    let neg = s.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::SingleClass);
    }
    Ok((pos, neg))
}

/// 1-based midranks of `values` (ties share their average rank).
pub fn midranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// `P(score_pos > score_neg) + 0.5·P(tie)` via midranks.
pub fn compute_auc(s: &[(f64, u8)]) -> Result<f64> {
    let (pos, neg) = class_counts(s)?;
    let scores: Vec<f64> = s.iter().map(|p| p.0).collect();
    let ranks = midranks(&scores);
    let rank_sum: f64 = ranks.iter().zip(s).filter(|(_, p)| p.1 == 1).map(|(r, _)| r).sum();
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Area under the ROC polyline, sweeping thresholds from high to low with
/// tied scores entering together.
pub fn roc_auc_trapezoid(s: &[(f64, u8)]) -> Result<f64> {
    let (pos, neg) = class_counts(s)?;
    let mut sorted = s.to_vec();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (mut tp, mut fp, mut area) = (0usize, 0usize, 0.0);
    let mut i = 0;
    while i < sorted.len() {
        let (tp0, fp0) = (tp, fp);
        let score = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == score {
            if sorted[i].1 == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let dx = (fp - fp0) as f64 / neg as f64;
        area += dx * (tp + tp0) as f64 / 2.0 / pos as f64;
    }
    Ok(area)
}

/// Equal error rate. A score at or above the threshold is accepted; the
/// thresholds are the distinct scores plus `+∞` (accept nothing). The EER
/// is read where `FAR - FRR` changes sign, interpolating linearly between
/// the two bracketing thresholds.
pub fn compute_eer(s: &[(f64, u8)]) -> Result<f64> {
    let (pos, neg) = class_counts(s)?;
    let mut sorted = s.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    // at the lowest threshold everything is accepted
    let (mut rejected_pos, mut rejected_neg) = (0usize, 0usize);
    let mut prev = (1.0, 0.0);
    let mut i = 0;
    loop {
        let far = (neg - rejected_neg) as f64 / neg as f64;
        let frr = rejected_pos as f64 / pos as f64;
        if far <= frr {
            if far == frr || i == 0 {
                return Ok(far);
            }
            let (pf, pr) = prev;
            let t = (pf - pr) / ((pf - pr) - (far - frr));
            return Ok(pf + t * (far - pf));
        }
        prev = (far, frr);
        if i == sorted.len() {
            unreachable!("FAR reaches 0 at the +inf threshold");
        }
        let score = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == score {
            if sorted[i].1 == 1 {
                rejected_pos += 1;
            } else {
                rejected_neg += 1;
            }
            i += 1;
        }
    }
}

/// Argmax over `scores` (first index wins ties); with a threshold, a maximum
/// below it yields `None`.
pub fn classify(scores: &[f64], threshold: Option<f64>) -> Option<usize> {
    let (best, &max) = scores.iter().enumerate().fold(None, |acc: Option<(usize, &f64)>, (i, v)| match acc {
        Some((_, m)) if *m >= *v => acc,
        _ => Some((i, v)),
    })?;
    match threshold {
        Some(t) if max < t => None,
        _ => Some(best),
    }
}

/// `p_utt` of every episode query against every target.
pub fn episode_scores<S: Scalar>(
    model: &KwsModel<S>,
    corpus: &Corpus<S>,
    episode: &Episode<S>,
    n_templates: usize,
) -> Result<Vec<Vec<f64>>> {
    let enrollments: Vec<Enrollment<S>> =
        episode.targets.iter().map(|&t| corpus.enrollments[t].with_templates(n_templates)).collect();
    episode
        .queries
        .iter()
        .map(|q| enrollments.iter().map(|e| model.p_utt(&q.query, e).map(|v| v.as_f64())).collect())
        .collect()
}

/// Closed-set accuracy over target queries only.
pub fn accuracy_closed(scores: &[Vec<f64>], labels: &[Option<usize>]) -> f64 {
    let mut hits = 0;
    let mut n = 0;
    for (s, l) in scores.iter().zip(labels) {
        if let Some(l) = l {
            n += 1;
            hits += usize::from(classify(s, None) == Some(*l));
        }
    }
    if n == 0 {
        0.0
    } else {
        hits as f64 / n as f64
    }
}

/// Open-set accuracy over all queries at `threshold`.
pub fn accuracy_open(scores: &[Vec<f64>], labels: &[Option<usize>], threshold: f64) -> f64 {
    if scores.is_empty() {
        return 0.0;
    }
    let hits = scores.iter().zip(labels).filter(|(s, l)| classify(s, Some(threshold)) == **l).count();
    hits as f64 / scores.len() as f64
}

/// Threshold maximizing open-set accuracy; candidates are midpoints between
/// consecutive distinct per-query maxima plus the two ends. Ties go to the
/// lowest threshold.
pub fn select_threshold(scores: &[Vec<f64>], labels: &[Option<usize>]) -> f64 {
    let mut maxima: Vec<f64> =
        scores.iter().filter_map(|s| s.iter().copied().max_by(f64::total_cmp)).collect();
    maxima.sort_by(f64::total_cmp);
    maxima.dedup();
    let mut candidates = vec![0.0];
    candidates.extend(maxima.windows(2).map(|w| (w[0] + w[1]) / 2.0));
    candidates.push(maxima.last().map_or(1.0, |m| m.next_up()));
    let mut best = (f64::NEG_INFINITY, 0.0);
    for t in candidates {
        let acc = accuracy_open(scores, labels, t);
        if acc > best.0 {
            best = (acc, t);
        }
    }
    best.1
}

/// Spearman correlation with midranks; zero variance in either input gives 0.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    if x.len() != y.len() || x.len() < 2 {
        return 0.0;
    }
    let (rx, ry) = (midranks(x), midranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        0.0
    } else {
        cov / (vx * vy).sqrt()
    }
}

/// Rank correlation between support-row index and the query column each
/// row attends to most. `map` is `L × L`; rows come from
/// `boundaries[segment]`, columns from `boundaries[0]`.
pub fn monotonicity_score<S: Scalar>(map: &Tensor<S>, boundaries: &[usize], segment: usize) -> Result<f64> {
    let total: usize = boundaries.iter().sum();
    if map.rows() != total || map.cols() != total || segment == 0 || segment >= boundaries.len() {
        return Err(Error::Shape(format!("map {:?} does not match boundaries {boundaries:?}", map.shape())));
    }
    let start: usize = boundaries[..segment].iter().sum();
    let tq = boundaries[0];
    let mut rows = Vec::new();
    let mut cols = Vec::new();
    for r in 0..boundaries[segment] {
        let row = &map.row(start + r)[..tq];
        let arg = row
            .iter()
            .enumerate()
            .fold(0, |best, (c, v)| if *v > row[best] { c } else { best });
        rows.push(r as f64);
        cols.push(arg as f64);
    }
    Ok(spearman(&rows, &cols))
}

/// Final layer, heads averaged, phoneme rows against query columns.
pub fn text_monotonicity<S: Scalar>(map: &AttentionMap<S>, boundaries: &[usize]) -> Result<f64> {
    let mean = map.final_layer_mean().ok_or(Error::EmptyInput)?;
    monotonicity_score(&mean, boundaries, 1)
}

/// Scores every pair with up to `n_templates` templates per enrollment.
pub fn score_pairs<S: Scalar>(model: &KwsModel<S>, corpus: &Corpus<S>, pairs: &[EvalPair<S>], n_templates: usize) -> Result<Vec<ScoreRecord>> {
    pairs
        .iter()
        .map(|p| {
            let e = corpus.enrollments[p.enrollment].with_templates(n_templates);
            let split = serde_json::to_value(p.split)?.as_str().map(str::to_string);
            Ok(model.score(&p.query, &e)?.to_record(p.label, split, Some(p.pair_id)))
        })
        .collect()
}

/// AUC and EER on one split of a score file.
pub fn split_metrics(records: &[ScoreRecord], split: Split) -> Result<(f64, f64)> {
    let name = serde_json::to_value(split)?.as_str().unwrap_or_default().to_string();
    let mut set: Vec<(f64, u8, usize)> = records
        .iter()
        .filter(|r| r.split.as_deref() == Some(name.as_str()))
        .map(|r| (r.p_utt, r.label, r.pair_id.unwrap_or(0)))
        .collect();
    set.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.2.cmp(&b.2)));
    let set: Vec<(f64, u8)> = set.into_iter().map(|(s, l, _)| (s, l)).collect();
    Ok((compute_auc(&set)?, compute_eer(&set)?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub auc_easy: f64,
    pub auc_hard: f64,
    pub eer_easy: f64,
    pub eer_hard: f64,
    pub acc_close: Option<f64>,
    pub acc_open: Option<f64>,
    pub n_pairs: usize,
    pub config_hash: String,
}

impl EvalReport {
    pub fn from_records(records: &[ScoreRecord], config_hash: &str) -> Result<Self> {
        let (auc_easy, eer_easy) = split_metrics(records, Split::Easy)?;
        let (auc_hard, eer_hard) = split_metrics(records, Split::Hard)?;
        Ok(Self {
            auc_easy,
            auc_hard,
            eer_easy,
            eer_hard,
            acc_close: None,
            acc_open: None,
            n_pairs: records.len(),
            config_hash: config_hash.to_string(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub query_frames: usize,
    pub samples_ms: Vec<f64>,
    pub median_ms: f64,
    pub p95_ms: f64,
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let idx = ((sorted.len() as f64 - 1.0) * q).round() as usize;
    sorted[idx]
}

/// Wall time of single-pair scoring: `warmup` untimed runs, then `reps`
/// timed ones.
pub fn bench_latency<S: Scalar>(
    model: &KwsModel<S>,
    query: &FeatureMatrix<S>,
    enrollment: &Enrollment<S>,
    warmup: usize,
    reps: usize,
) -> Result<LatencyReport> {
    if reps == 0 {
        return Err(Error::Invalid("need at least one repetition".into()));
    }
    for _ in 0..warmup {
        model.p_utt(query, enrollment)?;
    }
    let mut samples = Vec::with_capacity(reps);
    for _ in 0..reps {
        let t = Instant::now();
        std::hint::black_box(model.p_utt(query, enrollment)?);
        samples.push(t.elapsed().as_secs_f64() * 1e3);
    }
    let mut sorted = samples.clone();
    sorted.sort_by(f64::total_cmp);
    Ok(LatencyReport {
        query_frames: query.num_frames(),
        median_ms: percentile(&sorted, 0.5),
        p95_ms: percentile(&sorted, 0.95),
        samples_ms: samples,
    })
}
