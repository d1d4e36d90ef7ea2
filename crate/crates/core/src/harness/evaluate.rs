//! Scoring, score CSV files and metrics reports.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{summarize, MetricSummary, ScoreSet, ThresholdMode};
use crate::model::MvpFas;

use super::data::{make_batch, Sample};

pub const EVAL_BATCH: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub sample_id: String,
    pub score: f64,
    pub label: Option<u32>,
    pub domain: String,
}

/// Real-class probability for every sample.
pub fn score_samples(model: &MvpFas, samples: &[Sample]) -> Result<Vec<ScoreRow>> {
    let size = model.config.backbone.image_size;
    let idx: Vec<usize> = (0..samples.len()).collect();
    let mut out = Vec::with_capacity(samples.len());
    for chunk in idx.chunks(EVAL_BATCH) {
        let batch = make_batch(samples, chunk, size, model.dtype(), model.device())?;
        for (&i, s) in chunk.iter().zip(model.scores(&batch)?) {
            out.push(ScoreRow {
                sample_id: samples[i].id.clone(),
                score: s,
                label: samples[i].label,
                domain: samples[i].domain.clone(),
            });
        }
    }
    Ok(out)
}

pub fn write_scores(path: &Path, rows: &[ScoreRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["sample_id", "score", "label", "domain"])?;
    for r in rows {
        let label = r.label.map(|l| l.to_string()).unwrap_or_default();
        w.write_record([r.sample_id.as_str(), &r.score.to_string(), &label, &r.domain])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_scores(path: &Path) -> Result<Vec<ScoreRow>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        if rec.len() != 4 {
            return Err(Error::Config(format!("{}: expected 4 columns", path.display())));
        }
        let score: f64 = rec[1]
            .parse()
            .map_err(|_| Error::Config(format!("{}: bad score {:?}", path.display(), &rec[1])))?;
        let label = match rec[2].trim() {
            "" => None,
            l => match l.parse::<i64>() {
                Ok(v @ (0 | 1)) => Some(v as u32),
                Ok(v) => return Err(Error::InvalidLabel(v)),
                Err(_) => return Err(Error::Config(format!("{}: bad label {l:?}", path.display()))),
            },
        };
        out.push(ScoreRow {
            sample_id: rec[0].to_string(),
            score,
            label,
            domain: rec[3].to_string(),
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub scenario: String,
    pub samples: usize,
    pub metrics: Option<MetricSummary>,
    /// Why metrics are missing.
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub threshold_mode: ThresholdMode,
    pub scenarios: Vec<ScenarioReport>,
    /// Mean over scenarios that have metrics.
    pub average: Option<MetricSummary>,
}

pub fn scenario_report(scenario: &str, rows: &[ScoreRow], mode: ThresholdMode) -> Result<ScenarioReport> {
    let mut report = ScenarioReport {
        scenario: scenario.to_string(),
        samples: rows.len(),
        metrics: None,
        note: None,
    };
    if rows.iter().any(|r| r.label.is_none()) {
        report.note = Some("unlabelled samples; metrics skipped".into());
        return Ok(report);
    }
    let set = ScoreSet::new(
        rows.iter().map(|r| r.score).collect(),
        rows.iter().map(|r| r.label.unwrap_or(0) as i64).collect(),
    )?;
    if !set.has_both_classes() {
        report.note = Some("single-class scores; metrics undefined".into());
        return Ok(report);
    }
    report.metrics = Some(summarize(&set, mode)?);
    Ok(report)
}

impl MetricsReport {
    pub fn new(threshold_mode: ThresholdMode, scenarios: Vec<ScenarioReport>) -> Self {
        let with: Vec<&MetricSummary> = scenarios.iter().filter_map(|s| s.metrics.as_ref()).collect();
        let average = (!with.is_empty()).then(|| {
            let n = with.len() as f64;
            let mean = |f: fn(&MetricSummary) -> f64| with.iter().map(|m| f(m)).sum::<f64>() / n;
            MetricSummary {
                hter: mean(|m| m.hter),
                auc: mean(|m| m.auc),
                tpr_at_fpr1: mean(|m| m.tpr_at_fpr1),
                threshold: mean(|m| m.threshold),
                eer: mean(|m| m.eer),
            }
        });
        Self {
            threshold_mode,
            scenarios,
            average,
        }
    }

    /// One row per scenario with HTER, AUC and TPR@FPR=1% in percent.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<28} {:>8} {:>8} {:>14}", "scenario", "HTER(%)", "AUC(%)", "TPR@FPR=1%(%)");
        let row = |s: &mut String, name: &str, m: Option<&MetricSummary>, note: Option<&str>| {
            match m {
                Some(m) => {
                    let _ = writeln!(s, "{:<28} {:>8.2} {:>8.2} {:>14.2}", name, 100.0 * m.hter, 100.0 * m.auc, 100.0 * m.tpr_at_fpr1);
                }
                None => {
                    let _ = writeln!(s, "{:<28} {}", name, note.unwrap_or("n/a"));
                }
            }
        };
        for sc in &self.scenarios {
            row(&mut s, &sc.scenario, sc.metrics.as_ref(), sc.note.as_deref());
        }
        if self.scenarios.len() > 1 {
            row(&mut s, "average", self.average.as_ref(), None);
        }
        s
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(id: &str, score: f64, label: Option<u32>) -> ScoreRow {
        ScoreRow { sample_id: id.into(), score, label, domain: "d".into() }
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.csv");
        let rows = vec![row("a", 0.1 + 0.2, Some(1)), row("b", 1.0 / 3.0, Some(0)), row("c", 0.5, None)];
        write_scores(&p, &rows).unwrap();
        assert_eq!(read_scores(&p).unwrap(), rows);
    }

    #[test]
    fn reports_and_notes() {
        let good = vec![row("a", 0.9, Some(1)), row("b", 0.1, Some(0))];
        let r = scenario_report("x", &good, ThresholdMode::Eer).unwrap();
        assert_eq!(r.metrics.unwrap().auc, 1.0);
        let single = vec![row("a", 0.9, Some(1))];
        let r2 = scenario_report("y", &single, ThresholdMode::Eer).unwrap();
        assert!(r2.metrics.is_none() && r2.note.is_some());
        let unl = vec![row("a", 0.9, None), row("b", 0.2, Some(0))];
        assert!(scenario_report("z", &unl, ThresholdMode::Eer).unwrap().metrics.is_none());
        let rep = MetricsReport::new(ThresholdMode::Eer, vec![r, r2]);
        assert_eq!(rep.average.unwrap().auc, 1.0);
        let table = rep.to_table();
        assert!(table.contains("HTER(%)") && table.contains("average") && table.contains("single-class"));
        let json = rep.to_json().unwrap();
        let back: MetricsReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, rep);
    }
}
