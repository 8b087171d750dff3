//! Several objectives trained from one initial model, as long-format curves.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::objectives::ObjectiveRegistry;
use crate::policy::PolicyModel;
use crate::synthdata::Dataset;
use crate::trainer::{format_sig9, train, TelemetryRow, TrainConfig};

pub const COMPARE_HEADER: &str = "objective,step,delta_r_w,margin,mean_logp_w";

#[derive(Debug, Clone)]
pub struct ObjectiveRun {
    pub objective: String,
    pub telemetry: Vec<TelemetryRow>,
    pub model: PolicyModel,
}

impl ObjectiveRun {
    /// `mean_r_w(step) - mean_r_w(0)` for every step.
    pub fn delta_r_w(&self) -> Vec<f64> {
        let base = self.telemetry.first().map(|r| r.mean_r_w).unwrap_or(0.0);
        self.telemetry.iter().map(|r| r.mean_r_w - base).collect()
    }
}

/// Trains every objective in `names` from `init` with the shared `base`
/// settings. Runs are independent and execute on scoped threads; results
/// come back in the order of `names`.
pub fn compare_objectives(
    init: &PolicyModel,
    reference: &PolicyModel,
    dataset: &Dataset,
    base: &TrainConfig,
    names: &[String],
    registry: &ObjectiveRegistry,
) -> Result<Vec<ObjectiveRun>> {
    if names.is_empty() {
        return Err(Error::Config("no objectives to compare".into()));
    }
    for name in names {
        registry.build(name, &base.objective_cfg)?;
    }
    let results: Vec<Result<ObjectiveRun>> = std::thread::scope(|s| {
        let handles: Vec<_> = names
            .iter()
            .map(|name| {
                let cfg = TrainConfig {
                    objective: name.clone(),
                    ..base.clone()
                };
                s.spawn(move || {
                    let out = train(init.clone(), reference, dataset, &cfg, registry, |_| Ok(()))?;
                    Ok(ObjectiveRun {
                        objective: cfg.objective,
                        telemetry: out.telemetry,
                        model: out.model,
                    })
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("training thread panicked")).collect()
    });
    results.into_iter().collect()
}

pub fn write_compare_csv<W: Write>(runs: &[ObjectiveRun], mut w: W) -> Result<()> {
    writeln!(w, "{COMPARE_HEADER}")?;
    for run in runs {
        for (row, d) in run.telemetry.iter().zip(run.delta_r_w()) {
            writeln!(
                w,
                "{},{},{},{},{}",
                run.objective,
                row.step,
                format_sig9(d),
                format_sig9(row.mean_margin),
                format_sig9(row.mean_logp_w)
            )?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn export_compare_csv(runs: &[ObjectiveRun], path: &Path) -> Result<()> {
    let f = std::fs::File::create(path)?;
    write_compare_csv(runs, std::io::BufWriter::new(f))
}
