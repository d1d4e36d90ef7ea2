//! Datasets, leave-one-out protocols, training, evaluation and artifacts.

pub mod ablate;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod evaluate;
pub mod protocol;
pub mod synth;
pub mod train;
pub mod visualize;

use crate::error::Result;

use config::RunConfig;
use evaluate::{scenario_report, score_samples, ScenarioReport, ScoreRow};
use train::{TrainOptions, TrainOutcome};

/// Training and held-out evaluation of one leave-one-out scenario.
pub struct ScenarioRun {
    pub outcome: TrainOutcome,
    pub scores: Vec<ScoreRow>,
    pub report: ScenarioReport,
}

pub fn run_scenario(cfg: &RunConfig, target: &str, opts: &TrainOptions) -> Result<ScenarioRun> {
    let mut cfg = cfg.clone();
    cfg.target = target.to_string();
    cfg.validate()?;
    let (train_specs, test_spec) = protocol::leave_one_out(&cfg.domains, target)?;
    let size = cfg.model.backbone.image_size;
    let train_set = data::load_domains(&train_specs, size)?;
    let test_set = data::load_domain(&test_spec, size)?;
    let outcome = train::train(&cfg, &train_set, opts)?;
    let scores = score_samples(&outcome.model, &test_set)?;
    let report = scenario_report(&protocol::scenario_name(&train_specs, &test_spec), &scores, cfg.threshold)?;
    Ok(ScenarioRun {
        outcome,
        scores,
        report,
    })
}
