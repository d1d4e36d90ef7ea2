//! Biometric evaluation metrics over real-class scores.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FIXED_THRESHOLD: f64 = 0.5;
pub const REPORT_FPR: f64 = 0.01;

/// Scores are real-class probabilities; labels are 1 for real, 0 for spoof.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSet {
    scores: Vec<f64>,
    labels: Vec<u8>,
}

impl ScoreSet {
    pub fn new(scores: Vec<f64>, labels: Vec<i64>) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::UndefinedMetric("empty score set".into()));
        }
        if scores.len() != labels.len() {
            return Err(Error::Shape(format!("{} scores but {} labels", scores.len(), labels.len())));
        }
        if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
            return Err(Error::Numeric(format!("non-finite score {s}")));
        }
        let labels = labels
            .into_iter()
            .map(|l| match l {
                0 | 1 => Ok(l as u8),
                other => Err(Error::InvalidLabel(other)),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { scores, labels })
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn counts(&self) -> (usize, usize) {
        let real = self.labels.iter().filter(|&&l| l == 1).count();
        (real, self.labels.len() - real)
    }

    pub fn has_both_classes(&self) -> bool {
        let (r, s) = self.counts();
        r > 0 && s > 0
    }

    fn require_both(&self) -> Result<(usize, usize)> {
        let (r, s) = self.counts();
        if r == 0 || s == 0 {
            return Err(Error::UndefinedMetric(format!("needs both classes, got {r} real and {s} spoof")));
        }
        Ok((r, s))
    }

    fn sorted_desc(&self) -> Vec<(f64, u8)> {
        let mut v: Vec<(f64, u8)> = self.scores.iter().copied().zip(self.labels.iter().copied()).collect();
        v.sort_by(|a, b| b.0.total_cmp(&a.0));
        v
    }
}

/// Mann-Whitney AUC with ties counted as one half.
pub fn auc(set: &ScoreSet) -> Result<f64> {
    let (n_real, n_spoof) = set.require_both()?;
    let v = set.sorted_desc();
    // Walk tie groups from the top, counting spoofs strictly above each real.
    let mut spoof_above = 0usize;
    let mut twice_concordant = 0usize;
    let mut i = 0;
    while i < v.len() {
        let mut j = i;
        let (mut r, mut s) = (0usize, 0usize);
        while j < v.len() && v[j].0 == v[i].0 {
            if v[j].1 == 1 {
                r += 1;
            } else {
                s += 1;
            }
            j += 1;
        }
        twice_concordant += r * (2 * (n_spoof - spoof_above - s) + s);
        spoof_above += s;
        i = j;
    }
    Ok(twice_concordant as f64 / (2 * n_real * n_spoof) as f64)
}

/// False acceptance (spoof scored `>= t`) and false rejection (real scored `< t`).
pub fn far_frr(set: &ScoreSet, threshold: f64) -> Result<(f64, f64)> {
    let (n_real, n_spoof) = set.require_both()?;
    let mut fa = 0usize;
    let mut fr = 0usize;
    for (&s, &l) in set.scores.iter().zip(&set.labels) {
        if l == 0 && s >= threshold {
            fa += 1;
        }
        if l == 1 && s < threshold {
            fr += 1;
        }
    }
    Ok((fa as f64 / n_spoof as f64, fr as f64 / n_real as f64))
}

pub fn hter(set: &ScoreSet, threshold: f64) -> Result<f64> {
    let (far, frr) = far_frr(set, threshold)?;
    Ok((far + frr) / 2.0)
}

/// Threshold minimising `|FAR - FRR|` over midpoints between consecutive
/// distinct scores and the two infinite sentinels, lowest threshold on ties.
/// Returns `(threshold, (FAR + FRR) / 2)`.
pub fn eer_threshold(set: &ScoreSet) -> Result<(f64, f64)> {
    let (n_real, n_spoof) = set.require_both()?;
    let mut v = set.sorted_desc();
    v.reverse();
    // Ascending sweep: at threshold t every sample below t is rejected.
    let mut fr = 0usize;
    let mut fa = n_spoof;
    let rates = |fa: usize, fr: usize| (fa as f64 / n_spoof as f64, fr as f64 / n_real as f64);
    let (far, frr) = rates(fa, fr);
    let mut best = (f64::NEG_INFINITY, (far - frr).abs(), (far + frr) / 2.0);
    let mut i = 0;
    while i < v.len() {
        let mut j = i;
        while j < v.len() && v[j].0 == v[i].0 {
            if v[j].1 == 1 {
                fr += 1;
            } else {
                fa -= 1;
            }
            j += 1;
        }
        let t = if j < v.len() {
            (v[i].0 + v[j].0) / 2.0
        } else {
            f64::INFINITY
        };
        let (far, frr) = rates(fa, fr);
        let gap = (far - frr).abs();
        if gap < best.1 {
            best = (t, gap, (far + frr) / 2.0);
        }
        i = j;
    }
    Ok((best.0, best.2))
}

/// ROC vertices `(FPR, TPR)` from the strictest threshold down, tied scores merged.
pub fn roc(set: &ScoreSet) -> Result<Vec<(f64, f64)>> {
    let (n_real, n_spoof) = set.require_both()?;
    let v = set.sorted_desc();
    let mut out = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < v.len() {
        let mut j = i;
        while j < v.len() && v[j].0 == v[i].0 {
            if v[j].1 == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            j += 1;
        }
        out.push((fp as f64 / n_spoof as f64, tp as f64 / n_real as f64));
        i = j;
    }
    Ok(out)
}

/// Interpolated TPR at `fpr_target` on a ROC polyline sorted by FPR.
pub fn interpolate_roc(vertices: &[(f64, f64)], fpr_target: f64) -> f64 {
    let i = vertices.iter().rposition(|&(f, _)| f <= fpr_target).unwrap_or(0);
    let (f0, t0) = vertices[i];
    if f0 == fpr_target || i + 1 == vertices.len() {
        return t0;
    }
    let (f1, t1) = vertices[i + 1];
    t0 + (t1 - t0) * (fpr_target - f0) / (f1 - f0)
}

pub fn tpr_at_fpr(set: &ScoreSet, fpr_target: f64) -> Result<f64> {
    if !(fpr_target > 0.0 && fpr_target < 1.0) {
        return Err(Error::Config(format!("fpr target {fpr_target} outside (0, 1)")));
    }
    Ok(interpolate_roc(&roc(set)?, fpr_target))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdMode {
    /// EER threshold of the evaluated scores.
    #[default]
    Eer,
    /// Fixed probability threshold of 0.5.
    Fixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub hter: f64,
    pub auc: f64,
    pub tpr_at_fpr1: f64,
    pub threshold: f64,
    pub eer: f64,
}

pub fn summarize(set: &ScoreSet, mode: ThresholdMode) -> Result<MetricSummary> {
    let (t_eer, eer) = eer_threshold(set)?;
    let threshold = match mode {
        ThresholdMode::Eer => t_eer,
        ThresholdMode::Fixed => FIXED_THRESHOLD,
    };
    Ok(MetricSummary {
        hter: hter(set, threshold)?,
        auc: auc(set)?,
        tpr_at_fpr1: tpr_at_fpr(set, REPORT_FPR)?,
        threshold,
        eer,
    })
}
