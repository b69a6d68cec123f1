//! Detection metrics over (scores, labels): threshold-free proximity-weighted
//! area (`pate`), classical AUC-ROC / AUC-PR, and an exhaustive best-F1 sweep.
//!
//! All metrics are rank-determined: any strictly increasing transform of the
//! scores leaves them unchanged.

use crate::error::{Error, Result};

/// Buffer grid for the proximity-weighted metric: every (pre, post) pair is
/// evaluated and the resulting weighted PR areas averaged.
#[derive(Clone, Debug)]
pub struct PateConfig {
    pub pre_buffers: Vec<usize>,
    pub post_buffers: Vec<usize>,
}

impl Default for PateConfig {
    fn default() -> Self {
        // 0, 2, 4, ..., 20 on both axes (11x11 grid).
        let buffers: Vec<usize> = (0..=10).map(|i| i * 2).collect();
        Self { pre_buffers: buffers.clone(), post_buffers: buffers }
    }
}

impl PateConfig {
    fn validate(&self) -> Result<()> {
        if self.pre_buffers.is_empty() || self.post_buffers.is_empty() {
            return Err(Error::Config("buffer lists must be non-empty".into()));
        }
        Ok(())
    }
}

/// Bundled metric report.
#[derive(Clone, Debug)]
pub struct EvalReport {
    pub pate: f64,
    pub auc_roc: f64,
    pub auc_pr: f64,
    pub best_f1: f64,
    pub best_f1_threshold: f64,
}

/// AUC sweep mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AucMode {
    Roc,
    Pr,
}

fn check_lengths(scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::Schema(format!(
            "scores length {} != labels length {}",
            scores.len(),
            labels.len()
        )));
    }
    if scores.is_empty() {
        return Err(Error::Data("empty score series".into()));
    }
    if let Some(bad) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::Numerics(format!("non-finite score {bad}")));
    }
    Ok(())
}

fn check_two_classes(labels: &[u8]) -> Result<()> {
    let pos = labels.iter().filter(|&&v| v == 1).count();
    if pos == 0 || pos == labels.len() {
        return Err(Error::DegenerateLabels(
            "labels must contain at least one 0 and one 1".into(),
        ));
    }
    Ok(())
}

/// Indices sorted by score descending; equal scores form one threshold group.
fn descending_groups(scores: &[f64]) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for idx in order {
        match groups.last_mut() {
            Some(g) if scores[g[0]] == scores[idx] => g.push(idx),
            _ => groups.push(vec![idx]),
        }
    }
    groups
}

/// Area under the ROC curve (trapezoid) or the PR curve (step interpolation:
/// precision held constant between recall points in descending threshold
/// order).
pub fn auc(scores: &[f64], labels: &[u8], mode: AucMode) -> Result<f64> {
    check_lengths(scores, labels)?;
    check_two_classes(labels)?;
    let pos = labels.iter().filter(|&&v| v == 1).count() as f64;
    let neg = labels.len() as f64 - pos;

    let mut tp = 0.0;
    let mut fp = 0.0;
    let mut area = 0.0;
    match mode {
        AucMode::Roc => {
            let (mut prev_fpr, mut prev_tpr) = (0.0, 0.0);
            for group in descending_groups(scores) {
                for i in group {
                    if labels[i] == 1 {
                        tp += 1.0;
                    } else {
                        fp += 1.0;
                    }
                }
                let fpr = fp / neg;
                let tpr = tp / pos;
                area += (fpr - prev_fpr) * (tpr + prev_tpr) / 2.0;
                prev_fpr = fpr;
                prev_tpr = tpr;
            }
        }
        AucMode::Pr => {
            let mut prev_recall = 0.0;
            for group in descending_groups(scores) {
                for i in group {
                    if labels[i] == 1 {
                        tp += 1.0;
                    } else {
                        fp += 1.0;
                    }
                }
                let recall = tp / pos;
                let precision = tp / (tp + fp);
                area += (recall - prev_recall) * precision;
                prev_recall = recall;
            }
        }
    }
    Ok(area)
}

/// Exhaustive point-wise F1 sweep over every unique score as a threshold
/// (prediction = score >= threshold), plus the empty prediction set
/// (threshold +inf). Ties break toward the higher threshold.
pub fn best_f1(scores: &[f64], labels: &[u8]) -> Result<(f64, f64)> {
    check_lengths(scores, labels)?;
    check_two_classes(labels)?;
    let pos = labels.iter().filter(|&&v| v == 1).count() as f64;

    // Empty prediction set: TP = 0 -> F1 = 0.
    let mut best = (0.0f64, f64::INFINITY);
    let mut tp = 0.0;
    let mut fp = 0.0;
    for group in descending_groups(scores) {
        let threshold = scores[group[0]];
        for i in group {
            if labels[i] == 1 {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
        }
        let f1 = if tp == 0.0 { 0.0 } else { 2.0 * tp / (2.0 * tp + fp + (pos - tp)) };
        if f1 > best.0 {
            best = (f1, threshold);
        }
    }
    Ok(best)
}

/// Maximal runs of 1s as [start, end) spans.
pub fn label_events(labels: &[u8]) -> Vec<(usize, usize)> {
    let mut events = Vec::new();
    let mut start: Option<usize> = None;
    for (t, &v) in labels.iter().enumerate() {
        match (v, start) {
            (1, None) => start = Some(t),
            (0, Some(s)) => {
                events.push((s, t));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        events.push((s, labels.len()));
    }
    events
}

/// Per-timestep positive weight for one (pre, post) buffer pair: 1 inside
/// events, a linear ramp of (buf - gap + 1)/(buf + 1) at distance `gap` in
/// the buffers, 0 elsewhere; overlaps take the max.
pub fn proximity_weights(labels: &[u8], pre: usize, post: usize) -> Vec<f64> {
    let l = labels.len();
    let mut w = vec![0.0f64; l];
    for (s, e) in label_events(labels) {
        for t in s..e {
            w[t] = 1.0;
        }
        for gap in 1..=pre {
            if gap > s {
                break;
            }
            let t = s - gap;
            let cand = (pre - gap + 1) as f64 / (pre + 1) as f64;
            if cand > w[t] {
                w[t] = cand;
            }
        }
        for gap in 1..=post {
            let t = e - 1 + gap;
            if t >= l {
                break;
            }
            let cand = (post - gap + 1) as f64 / (post + 1) as f64;
            if cand > w[t] {
                w[t] = cand;
            }
        }
    }
    w
}

/// Step-interpolated area of the weighted PR curve for one weight vector.
fn weighted_pr_area(scores: &[f64], weights: &[f64]) -> f64 {
    let total_pos: f64 = weights.iter().sum();
    debug_assert!(total_pos > 0.0);
    let mut tp_w = 0.0;
    let mut fp_w = 0.0;
    let mut prev_recall = 0.0;
    let mut area = 0.0;
    for group in descending_groups(scores) {
        for i in group {
            tp_w += weights[i];
            fp_w += 1.0 - weights[i];
        }
        let recall = tp_w / total_pos;
        let precision = if tp_w + fp_w > 0.0 { tp_w / (tp_w + fp_w) } else { 1.0 };
        area += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    area
}

/// Proximity-weighted, threshold-free score: mean over the buffer grid of
/// the weighted PR areas. With the single pair (0,0) the weights reduce to
/// the labels and the result equals AUC-PR.
pub fn pate(scores: &[f64], labels: &[u8], cfg: &PateConfig) -> Result<f64> {
    check_lengths(scores, labels)?;
    cfg.validate()?;
    if label_events(labels).is_empty() {
        return Err(Error::DegenerateLabels("no labeled anomaly event".into()));
    }
    let mut total = 0.0;
    let mut cells = 0usize;
    for &pre in &cfg.pre_buffers {
        for &post in &cfg.post_buffers {
            let w = proximity_weights(labels, pre, post);
            total += weighted_pr_area(scores, &w);
            cells += 1;
        }
    }
    Ok(total / cells as f64)
}

/// Run every metric and bundle the results.
pub fn evaluate(scores: &[f64], labels: &[u8], cfg: &PateConfig) -> Result<EvalReport> {
    let auc_roc = auc(scores, labels, AucMode::Roc)?;
    let auc_pr = auc(scores, labels, AucMode::Pr)?;
    let (best, threshold) = best_f1(scores, labels)?;
    let pate_score = pate(scores, labels, cfg)?;
    Ok(EvalReport { pate: pate_score, auc_roc, auc_pr, best_f1: best, best_f1_threshold: threshold })
}

/// Write the score series in the wire format `index,score[,label]`.
pub fn write_scores_csv(
    path: &std::path::Path,
    scores: &[f64],
    labels: Option<&[u8]>,
) -> Result<()> {
    let mut out = String::new();
    match labels {
        Some(_) => out.push_str("index,score,label\n"),
        None => out.push_str("index,score\n"),
    }
    for (i, &s) in scores.iter().enumerate() {
        match labels {
            Some(l) => out.push_str(&format!("{i},{s},{}\n", l[i])),
            None => out.push_str(&format!("{i},{s}\n")),
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Read a score CSV produced by [`write_scores_csv`].
pub fn read_scores_csv(path: &std::path::Path) -> Result<(Vec<f64>, Option<Vec<u8>>)> {
    let raw = std::fs::read_to_string(path)?;
    let mut lines = raw.lines();
    let header = lines.next().ok_or_else(|| Error::Parse("empty score file".into()))?;
    let with_labels = match header.trim() {
        "index,score" => false,
        "index,score,label" => true,
        other => return Err(Error::Parse(format!("unexpected score header '{other}'"))),
    };
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for (ln, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        let want = if with_labels { 3 } else { 2 };
        if parts.len() != want {
            return Err(Error::Parse(format!("score row {}: expected {want} fields", ln + 2)));
        }
        let idx: usize = parts[0]
            .trim()
            .parse()
            .map_err(|_| Error::Parse(format!("score row {}: bad index", ln + 2)))?;
        if idx != scores.len() {
            return Err(Error::Parse(format!(
                "score row {}: index {idx} out of order",
                ln + 2
            )));
        }
        scores.push(
            parts[1]
                .trim()
                .parse::<f64>()
                .map_err(|_| Error::Parse(format!("score row {}: bad score", ln + 2)))?,
        );
        if with_labels {
            match parts[2].trim() {
                "0" => labels.push(0u8),
                "1" => labels.push(1u8),
                other => {
                    return Err(Error::Parse(format!(
                        "score row {}: label must be 0/1, got '{other}'",
                        ln + 2
                    )))
                }
            }
        }
    }
    Ok((scores, with_labels.then_some(labels)))
}
