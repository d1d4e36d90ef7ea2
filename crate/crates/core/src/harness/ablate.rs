//! Cartesian ablation grids over model switches.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::head::Variant;
use crate::metrics::MetricSummary;
use crate::mtpa::AnchorKind;

use super::config::RunConfig;
use super::evaluate::MetricsReport;
use super::train::TrainOptions;

/// Axes left out are held at the base configuration.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    pub mvs: Option<Vec<bool>>,
    pub mtpa: Option<Vec<bool>>,
    pub views: Option<Vec<usize>>,
    pub anchor: Option<Vec<AnchorKind>>,
    pub variant: Option<Vec<Variant>>,
    pub gape: Option<Vec<bool>>,
    pub i_max: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Setting {
    Mvs(bool),
    Mtpa(bool),
    Views(usize),
    Anchor(AnchorKind),
    Variant(Variant),
    Gape(bool),
    IMax(usize),
}

fn on_off(b: bool) -> &'static str {
    if b {
        "on"
    } else {
        "off"
    }
}

impl Setting {
    pub fn key(&self) -> &'static str {
        match self {
            Setting::Mvs(_) => "MVS",
            Setting::Mtpa(_) => "MTPA",
            Setting::Views(_) => "M",
            Setting::Anchor(_) => "anchor",
            Setting::Variant(_) => "variant",
            Setting::Gape(_) => "GAPE",
            Setting::IMax(_) => "i_max",
        }
    }

    pub fn value(&self) -> String {
        match self {
            Setting::Mvs(b) | Setting::Mtpa(b) | Setting::Gape(b) => on_off(*b).into(),
            Setting::Views(m) | Setting::IMax(m) => m.to_string(),
            Setting::Anchor(a) => format!("{a:?}").to_lowercase(),
            Setting::Variant(v) => match v {
                Variant::Mvs => "mvs".into(),
                Variant::Similarity => "similarity".into(),
                Variant::CrossAttention => "cross_attention".into(),
            },
        }
    }

    pub fn apply(&self, cfg: &mut RunConfig) {
        let m = &mut cfg.model;
        match *self {
            Setting::Mvs(b) => m.ablation.use_mvs = b,
            Setting::Mtpa(b) => m.ablation.use_mtpa = b,
            Setting::Views(v) => m.views = Some(v),
            Setting::Anchor(a) => m.mtpa.anchor = a,
            Setting::Variant(v) => m.ablation.variant = v,
            Setting::Gape(b) => m.ablation.gape = b,
            Setting::IMax(i) => m.mvs.i_max = i,
        }
    }
}

impl GridSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("grid spec: {e}")))
    }

    fn axes(&self) -> Vec<Vec<Setting>> {
        let mut axes = Vec::new();
        let mut add = |v: &Option<Vec<Setting>>| {
            if let Some(v) = v {
                axes.push(v.clone());
            }
        };
        add(&self.mvs.as_ref().map(|v| v.iter().map(|&b| Setting::Mvs(b)).collect()));
        add(&self.mtpa.as_ref().map(|v| v.iter().map(|&b| Setting::Mtpa(b)).collect()));
        add(&self.views.as_ref().map(|v| v.iter().map(|&b| Setting::Views(b)).collect()));
        add(&self.anchor.as_ref().map(|v| v.iter().map(|&b| Setting::Anchor(b)).collect()));
        add(&self.variant.as_ref().map(|v| v.iter().map(|&b| Setting::Variant(b)).collect()));
        add(&self.gape.as_ref().map(|v| v.iter().map(|&b| Setting::Gape(b)).collect()));
        add(&self.i_max.as_ref().map(|v| v.iter().map(|&b| Setting::IMax(b)).collect()));
        axes
    }

    /// Every combination, first axis varying slowest.
    pub fn combinations(&self) -> Result<Vec<Vec<Setting>>> {
        let axes = self.axes();
        if axes.is_empty() || axes.iter().any(|a| a.is_empty()) {
            return Err(Error::Config("ablation grid is empty".into()));
        }
        let mut out: Vec<Vec<Setting>> = vec![Vec::new()];
        for axis in axes {
            out = out
                .into_iter()
                .flat_map(|prefix| {
                    axis.iter().map(move |s| {
                        let mut p = prefix.clone();
                        p.push(s.clone());
                        p
                    })
                })
                .collect();
        }
        Ok(out)
    }

    /// Configs for every combination, each validated.
    pub fn configs(&self, base: &RunConfig) -> Result<Vec<(Vec<Setting>, RunConfig)>> {
        self.combinations()?
            .into_iter()
            .map(|combo| {
                let mut cfg = base.clone();
                for s in &combo {
                    s.apply(&mut cfg);
                }
                cfg.validate().map_err(|e| {
                    let label: Vec<String> = combo.iter().map(|s| format!("{}={}", s.key(), s.value())).collect();
                    Error::Config(format!("invalid combination {}: {e}", label.join(",")))
                })?;
                Ok((combo, cfg))
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub settings: Vec<Setting>,
    pub report: MetricsReport,
    pub final_losses: Vec<f64>,
}

impl AblationRow {
    pub fn average(&self) -> Option<&MetricSummary> {
        self.report.average.as_ref()
    }
}

/// Trains and evaluates every combination on every target.
pub fn run_grid(base: &RunConfig, grid: &GridSpec, targets: &[String], opts: &TrainOptions) -> Result<Vec<AblationRow>> {
    if targets.is_empty() {
        return Err(Error::Config("no ablation targets".into()));
    }
    let mut rows = Vec::new();
    for (settings, cfg) in grid.configs(base)? {
        let mut scenarios = Vec::new();
        let mut final_losses = Vec::new();
        for t in targets {
            let run = super::run_scenario(&cfg, t, opts)?;
            final_losses.push(run.outcome.history.last().copied().unwrap_or(f64::NAN));
            scenarios.push(run.report);
        }
        rows.push(AblationRow {
            settings,
            report: MetricsReport::new(cfg.threshold, scenarios),
            final_losses,
        });
    }
    Ok(rows)
}

/// One row per combination: switch columns then HTER, AUC and TPR@FPR=1% in percent.
pub fn table(rows: &[AblationRow]) -> String {
    let mut s = String::new();
    let Some(first) = rows.first() else {
        return s;
    };
    for setting in &first.settings {
        let _ = write!(s, "{:<16}", setting.key());
    }
    let _ = writeln!(s, "{:>8} {:>8} {:>14}", "HTER(%)", "AUC(%)", "TPR@FPR=1%(%)");
    for r in rows {
        for setting in &r.settings {
            let _ = write!(s, "{:<16}", setting.value());
        }
        match r.average() {
            Some(m) => {
                let _ = writeln!(s, "{:>8.2} {:>8.2} {:>14.2}", 100.0 * m.hter, 100.0 * m.auc, 100.0 * m.tpr_at_fpr1);
            }
            None => {
                let _ = writeln!(s, "{:>8} {:>8} {:>14}", "n/a", "n/a", "n/a");
            }
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn combinations_are_cartesian() {
        let g = GridSpec::from_toml("mvs = [true, false]\nmtpa = [true, false]").unwrap();
        let c = g.combinations().unwrap();
        assert_eq!(c.len(), 4);
        assert_eq!(c[3], vec![Setting::Mvs(false), Setting::Mtpa(false)]);
        let g = GridSpec::from_toml("views = [1, 2, 3]").unwrap();
        assert_eq!(g.configs(&RunConfig::smoke()).unwrap().len(), 3);
    }

    #[test]
    fn baseline_row_config() {
        let g = GridSpec::from_toml("mvs = [false]\nmtpa = [false]").unwrap();
        let (_, cfg) = g.configs(&RunConfig::smoke()).unwrap().remove(0);
        assert!(!cfg.model.ablation.use_mvs && !cfg.model.ablation.use_mtpa);
    }

    #[test]
    fn invalid_grids() {
        assert!(GridSpec::default().combinations().is_err());
        assert!(GridSpec::from_toml("views = []").unwrap().combinations().is_err());
        assert!(GridSpec::from_toml("bogus = [1]").is_err());
        assert!(GridSpec::from_toml("variant = [\"nope\"]").is_err());
        assert!(GridSpec::from_toml("views = [9]").unwrap().configs(&RunConfig::smoke()).is_err());
    }

    #[test]
    fn table_layout() {
        let row = AblationRow {
            settings: vec![Setting::Mvs(true), Setting::Mtpa(false)],
            report: MetricsReport::new(crate::metrics::ThresholdMode::Eer, vec![]),
            final_losses: vec![],
        };
        let t = table(&[row]);
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines.len(), 2);
        assert!(lines[0].starts_with("MVS") && lines[1].starts_with("on"));
    }
}
