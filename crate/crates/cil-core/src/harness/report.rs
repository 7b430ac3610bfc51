//! Run reports: per-stage accuracy curves, their averages, and the files
//! an experiment leaves behind.
//!
//! A finished run writes `report.json` (the full structured report) and
//! `stages.tsv` (a flat per-stage table for plotting). Wall-clock time goes
//! to a separate `timing.txt` so the report itself is byte-identical across
//! reruns of the same config and seed.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::config::ExperimentConfig;
use crate::inference::StrategyKind;

/// Accuracy trajectory of one inference strategy across stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyOutcome {
    /// Top-1 accuracy over all classes seen so far, one entry per stage.
    pub per_stage: Vec<f64>,
    /// Mean of the per-stage accuracies.
    pub average: f64,
    /// Accuracy after the last stage.
    pub final_accuracy: f64,
}

impl StrategyOutcome {
    pub fn from_stages(per_stage: Vec<f64>) -> StrategyOutcome {
        assert!(!per_stage.is_empty(), "an outcome needs at least one stage");
        let average = per_stage.iter().sum::<f64>() / per_stage.len() as f64;
        let final_accuracy = *per_stage.last().expect("nonempty");
        StrategyOutcome { per_stage, average, final_accuracy }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub num_tasks: usize,
    /// Outcomes keyed by strategy name, in name order.
    pub strategies: BTreeMap<String, StrategyOutcome>,
    /// Fraction of test instances routed to their own task's adapter,
    /// one entry per stage.
    pub selection_accuracy: Vec<f64>,
    /// The configuration the run was started with.
    pub config: ExperimentConfig,
}

fn check_unit_interval(name: &str, values: &[f64]) -> Result<()> {
    for (i, v) in values.iter().enumerate() {
        if !(0.0..=1.0).contains(v) {
            return Err(Error::Data(format!("{name} stage {} is {v}, outside [0, 1]", i + 1)));
        }
    }
    Ok(())
}

impl RunReport {
    pub fn new(
        num_tasks: usize,
        per_strategy: BTreeMap<StrategyKind, Vec<f64>>,
        selection_accuracy: Vec<f64>,
        config: ExperimentConfig,
    ) -> RunReport {
        let strategies = per_strategy
            .into_iter()
            .map(|(k, stages)| (k.name().to_string(), StrategyOutcome::from_stages(stages)))
            .collect();
        RunReport { num_tasks, strategies, selection_accuracy, config }
    }

    /// Check the internal identities every report must satisfy.
    pub fn validate(&self) -> Result<()> {
        if self.strategies.is_empty() {
            return Err(Error::Data("report lists no strategies".into()));
        }
        if self.selection_accuracy.len() != self.num_tasks {
            return Err(Error::Data(format!(
                "report has {} selection entries for {} tasks",
                self.selection_accuracy.len(),
                self.num_tasks
            )));
        }
        check_unit_interval("selection accuracy", &self.selection_accuracy)?;
        for (name, outcome) in &self.strategies {
            if outcome.per_stage.len() != self.num_tasks {
                return Err(Error::Data(format!(
                    "strategy {name} has {} stages, report covers {}",
                    outcome.per_stage.len(),
                    self.num_tasks
                )));
            }
            check_unit_interval(name, &outcome.per_stage)?;
            let mean = outcome.per_stage.iter().sum::<f64>() / outcome.per_stage.len() as f64;
            if outcome.average != mean {
                return Err(Error::Data(format!(
                    "strategy {name} reports average {}, its stages give {mean}",
                    outcome.average
                )));
            }
            if outcome.final_accuracy != *outcome.per_stage.last().expect("nonempty") {
                return Err(Error::Data(format!(
                    "strategy {name} reports a final accuracy that is not its last stage"
                )));
            }
        }
        Ok(())
    }

    /// Render the flat per-stage table: one row per stage, one column per
    /// strategy plus the selection accuracy.
    pub fn stages_table(&self) -> String {
        let mut out = String::from("stage");
        for name in self.strategies.keys() {
            out.push('\t');
            out.push_str(name);
        }
        out.push_str("\tselection_accuracy\n");
        for stage in 0..self.num_tasks {
            out.push_str(&format!("{}", stage + 1));
            for outcome in self.strategies.values() {
                out.push_str(&format!("\t{:.16e}", outcome.per_stage[stage]));
            }
            out.push_str(&format!("\t{:.16e}\n", self.selection_accuracy[stage]));
        }
        out
    }
}

/// Write `report.json` and `stages.tsv` into `dir`, creating it if needed.
pub fn write_report(report: &RunReport, dir: &Path) -> Result<()> {
    report.validate()?;
    fs::create_dir_all(dir)?;
    let json = serde_json::to_string_pretty(report)
        .map_err(|e| Error::Data(format!("cannot serialize report: {e}")))?;
    fs::write(dir.join("report.json"), json + "\n")?;
    fs::write(dir.join("stages.tsv"), report.stages_table())?;
    Ok(())
}

/// Write the wall-clock file, kept apart from the deterministic report.
pub fn write_timing(dir: &Path, seconds: f64) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("timing.txt"), format!("wall_clock_seconds\t{seconds:.3}\n"))?;
    Ok(())
}

pub fn load_report(path: &Path) -> Result<RunReport> {
    let json = fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("cannot read report {}: {e}", path.display())))?;
    let report: RunReport = serde_json::from_str(&json)
        .map_err(|e| Error::Data(format!("malformed report {}: {e}", path.display())))?;
    report.validate()?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_report() -> RunReport {
        let mut per_strategy = BTreeMap::new();
        per_strategy.insert(StrategyKind::Ensemble, vec![1.0, 0.9, 0.8]);
        per_strategy.insert(StrategyKind::MaxLogit, vec![0.95, 0.85, 0.7]);
        RunReport::new(3, per_strategy, vec![1.0, 0.9, 0.85], ExperimentConfig::default())
    }

    #[test]
    fn average_and_final_follow_the_stages() {
        let outcome = StrategyOutcome::from_stages(vec![0.5, 0.7, 0.6]);
        assert_eq!(outcome.average, (0.5 + 0.7 + 0.6) / 3.0);
        assert_eq!(outcome.final_accuracy, 0.6);
    }

    #[test]
    fn sample_report_validates() {
        sample_report().validate().unwrap();
    }

    #[test]
    fn validation_catches_broken_identities() {
        let mut report = sample_report();
        report.strategies.get_mut("ensemble").unwrap().average = 0.5;
        assert!(report.validate().is_err());

        let mut report = sample_report();
        report.strategies.get_mut("ensemble").unwrap().final_accuracy = 0.123;
        assert!(report.validate().is_err());

        let mut report = sample_report();
        report.strategies.get_mut("max_logit").unwrap().per_stage.pop();
        assert!(report.validate().is_err());

        let mut report = sample_report();
        report.selection_accuracy[1] = 1.5;
        assert!(report.validate().is_err());

        let mut report = sample_report();
        report.selection_accuracy.pop();
        assert!(report.validate().is_err());
    }

    #[test]
    fn report_round_trips_through_files() {
        let dir = tempfile::tempdir().unwrap();
        let report = sample_report();
        write_report(&report, dir.path()).unwrap();
        let loaded = load_report(&dir.path().join("report.json")).unwrap();
        assert_eq!(report, loaded);
    }

    #[test]
    fn stages_table_round_trips_floats_exactly() {
        let report = sample_report();
        let table = report.stages_table();
        let mut lines = table.lines();
        let header: Vec<&str> = lines.next().unwrap().split('\t').collect();
        assert_eq!(header, ["stage", "ensemble", "max_logit", "selection_accuracy"]);
        let rows: Vec<Vec<&str>> = lines.map(|l| l.split('\t').collect()).collect();
        assert_eq!(rows.len(), 3);
        for (i, row) in rows.iter().enumerate() {
            assert_eq!(row[0].parse::<usize>().unwrap(), i + 1);
            let ensemble: f64 = row[1].parse().unwrap();
            assert_eq!(
                ensemble.to_bits(),
                report.strategies["ensemble"].per_stage[i].to_bits()
            );
            let selection: f64 = row[3].parse().unwrap();
            assert_eq!(selection.to_bits(), report.selection_accuracy[i].to_bits());
        }
    }

    #[test]
    fn rewriting_the_same_report_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let report = sample_report();
        write_report(&report, dir.path()).unwrap();
        let first = fs::read(dir.path().join("report.json")).unwrap();
        write_timing(dir.path(), 12.345).unwrap();
        write_report(&report, dir.path()).unwrap();
        let second = fs::read(dir.path().join("report.json")).unwrap();
        assert_eq!(first, second);
        let timing = fs::read_to_string(dir.path().join("timing.txt")).unwrap();
        assert_eq!(timing, "wall_clock_seconds\t12.345\n");
    }
}
