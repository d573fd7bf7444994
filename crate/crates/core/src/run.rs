//! End-to-end runs driven by a [`RunConfig`]: train, evaluate, write
//! artifacts, and span/hop sweeps.

use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::checkpoint;
use crate::config::RunConfig;
use crate::data::DEFAULT_RATE;
use crate::error::Result;
use crate::model::ForecastModel;
use crate::train::{evaluate, evaluate_baseline, train_with, EpochRecord, EvalReport, TrainLog};

pub const CHECKPOINT_FILE: &str = "checkpoint.mgck";
pub const LOG_FILE: &str = "train_log.jsonl";
pub const REPORT_TEXT: &str = "report.txt";
pub const REPORT_JSON: &str = "report.json";
pub const CONFIG_FILE: &str = "config.toml";

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub model: ForecastModel,
    pub log: TrainLog,
    pub report: EvalReport,
    pub baseline: Option<EvalReport>,
}

#[derive(Serialize)]
struct ReportJson<'a> {
    parameters: usize,
    model: &'a EvalReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    zero_velocity: Option<&'a EvalReport>,
}

impl RunOutcome {
    pub fn report_table(&self) -> String {
        let extra: Vec<(&str, &EvalReport)> = self.baseline.iter().map(|b| ("zero_velocity", b)).collect();
        self.report.to_table(DEFAULT_RATE, &extra)
    }

    pub fn report_json(&self) -> String {
        serde_json::to_string_pretty(&ReportJson {
            parameters: self.model.count_parameters(),
            model: &self.report,
            zero_velocity: self.baseline.as_ref(),
        })
        .expect("report serializes")
            + "\n"
    }

    /// Checkpoint, log, reports and the resolved config under `dir`.
    pub fn write_artifacts(&self, dir: &Path, config: &RunConfig) -> Result<()> {
        fs::create_dir_all(dir)?;
        checkpoint::save(dir.join(CHECKPOINT_FILE), &self.model)?;
        fs::write(dir.join(LOG_FILE), self.log.to_jsonl())?;
        fs::write(dir.join(REPORT_TEXT), self.report_table())?;
        fs::write(dir.join(REPORT_JSON), self.report_json())?;
        fs::write(dir.join(CONFIG_FILE), config.to_toml())?;
        Ok(())
    }
}

pub fn execute(config: &RunConfig, on_epoch: impl FnMut(&EpochRecord)) -> Result<RunOutcome> {
    config.validate()?;
    let (train_set, test_set) = config.datasets()?;
    let mut model = config.build_model()?;
    let log = train_with(&mut model, &train_set, &config.train_config(), on_epoch)?;
    let report = evaluate(&model, &test_set, &config.eval.horizons)?;
    let baseline = if config.eval.baseline {
        Some(evaluate_baseline(&test_set, &config.eval.horizons)?)
    } else {
        None
    };
    Ok(RunOutcome {
        model,
        log,
        report,
        baseline,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepCell {
    pub span: usize,
    pub max_hop: usize,
    pub parameters: usize,
    pub final_loss: f64,
    /// Overall error per configured horizon, in horizon order.
    pub errors: Vec<f64>,
}

/// Trains one model per `(span, max_hop)` pair; each cell writes its
/// artifacts to `<output_dir>/L{span}_D{hop}`.
pub fn sweep(
    config: &RunConfig,
    spans: &[usize],
    hops: &[usize],
    mut on_cell: impl FnMut(&SweepCell),
) -> Result<Vec<SweepCell>> {
    let mut cells = Vec::new();
    for &span in spans {
        for &max_hop in hops {
            let mut cfg = config.clone();
            cfg.model.span = span;
            cfg.model.max_hop = max_hop;
            cfg.output_dir = config.output_dir.join(format!("L{span}_D{max_hop}"));
            let outcome = execute(&cfg, |_| {})?;
            outcome.write_artifacts(&cfg.output_dir, &cfg)?;
            let cell = SweepCell {
                span,
                max_hop,
                parameters: outcome.model.count_parameters(),
                final_loss: outcome.log.last_loss().unwrap_or(f64::NAN),
                errors: cfg.eval.horizons.iter().map(|h| outcome.report.overall[h]).collect(),
            };
            on_cell(&cell);
            cells.push(cell);
        }
    }
    Ok(cells)
}

pub fn sweep_table(horizons: &[usize], cells: &[SweepCell]) -> String {
    let mut out = format!("{:>4} {:>4} {:>10} {:>12}", "L", "D", "params", "train_loss");
    for h in horizons {
        out += &format!(" {:>10}", format!("h{h}"));
    }
    out.push('\n');
    for c in cells {
        out += &format!("{:>4} {:>4} {:>10} {:>12.6}", c.span, c.max_hop, c.parameters, c.final_loss);
        for e in &c.errors {
            out += &format!(" {e:>10.4}");
        }
        out.push('\n');
    }
    out
}
