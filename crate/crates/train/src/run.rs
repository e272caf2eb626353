//! A complete training run and its report.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use rise_core::data::Dataset;
use rise_core::eval::ApMetrics;
use rise_core::filter::FilterDiagnostics;
use rise_model::SegModel;

use crate::config::TrainConfig;
use crate::density::{density_windows, DensityTrace, DensityWindow, DENSITY_BINS};
use crate::error::{Result, TrainError};
use crate::trainer::{evaluate, Split, StepLosses, StepRecord, Trainer};

/// Mean losses over one logging interval ending at `step` (exclusive).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub learning_rate: f64,
    pub losses: StepLosses,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: u64,
    pub metrics: ApMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    pub total_steps: u64,
    /// Objective value of every step.
    pub step_losses: Vec<f64>,
    pub log: Vec<LogRecord>,
    /// One entry per weak-branch filter call.
    pub diagnostics: Vec<FilterDiagnostics>,
    pub evals: Vec<EvalRecord>,
    /// Retained-score histograms per ramp interval.
    pub density: Vec<DensityWindow>,
    pub final_metrics: Option<ApMetrics>,
}

impl RunReport {
    pub fn log_csv(&self) -> String {
        let mut s = String::from("step,learning_rate,total,supervised,cls,bbox,mask,embed,unsupervised,pseudo_labels\n");
        for r in &self.log {
            let l = &r.losses;
            let _ = writeln!(
                s,
                "{},{:e},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.3}",
                r.step, r.learning_rate, l.total, l.supervised, l.cls, l.bbox, l.mask, l.embed, l.unsupervised, l.pseudo_labels
            );
        }
        s
    }

    pub fn diagnostics_csv(&self) -> String {
        let mut s = format!("{}\n", FilterDiagnostics::CSV_HEADER);
        for d in &self.diagnostics {
            s.push_str(&d.csv_row());
            s.push('\n');
        }
        s
    }

    pub fn evals_csv(&self) -> String {
        let mut s = String::from("step,ap,ap50,ap75\n");
        for e in &self.evals {
            let _ = writeln!(s, "{},{:.6},{:.6},{:.6}", e.step, e.metrics.ap, e.metrics.ap50, e.metrics.ap75);
        }
        s
    }

    pub fn density_csv(&self) -> String {
        let mut s = String::from("window_start,window_end,bin,count\n");
        for w in &self.density {
            for (b, n) in w.counts.iter().enumerate() {
                let _ = writeln!(s, "{},{},{b},{n}", w.start, w.end);
            }
        }
        s
    }
}

/// Output of [`train`].
pub struct TrainOutcome {
    pub model: SegModel,
    pub report: RunReport,
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| TrainError::io(path, e))
}

#[derive(Default)]
struct IntervalMean {
    n: u64,
    sum: StepLosses,
}

impl IntervalMean {
    fn add(&mut self, l: &StepLosses) {
        let s = &mut self.sum;
        for (a, b) in [
            (&mut s.total, l.total),
            (&mut s.supervised, l.supervised),
            (&mut s.cls, l.cls),
            (&mut s.bbox, l.bbox),
            (&mut s.mask, l.mask),
            (&mut s.embed, l.embed),
            (&mut s.unsupervised, l.unsupervised),
            (&mut s.pseudo_labels, l.pseudo_labels),
        ] {
            *a += b;
        }
        self.n += 1;
    }

    fn take(&mut self) -> StepLosses {
        let n = self.n.max(1) as f64;
        let s = std::mem::take(&mut self.sum);
        self.n = 0;
        StepLosses {
            total: s.total / n,
            supervised: s.supervised / n,
            cls: s.cls / n,
            bbox: s.bbox / n,
            mask: s.mask / n,
            embed: s.embed / n,
            unsupervised: s.unsupervised / n,
            pseudo_labels: s.pseudo_labels / n,
        }
    }
}

/// Trains for `cfg.total_steps`, evaluating on `test` when given, and writes
/// checkpoints and reports under `out` when given. `on_step` sees every step.
pub fn train_with(
    cfg: &TrainConfig,
    train_set: &Dataset,
    split: &Split,
    seed: u64,
    test: Option<&Dataset>,
    out: Option<&Path>,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<TrainOutcome> {
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| TrainError::io(dir, e))?;
        cfg.save(&dir.join("config.toml"))?;
    }
    let mut trainer = Trainer::new(cfg.clone(), train_set, split, seed)?;
    let mut report = RunReport {
        seed,
        total_steps: cfg.total_steps,
        step_losses: Vec::with_capacity(cfg.total_steps as usize),
        log: Vec::new(),
        diagnostics: Vec::new(),
        evals: Vec::new(),
        density: Vec::new(),
        final_metrics: None,
    };
    let mut interval = IntervalMean::default();
    while !trainer.is_finished() {
        let rec = trainer.step()?;
        on_step(&rec);
        report.step_losses.push(rec.losses.total);
        interval.add(&rec.losses);
        let done = trainer.steps_done();
        if done % cfg.log_interval == 0 || done == cfg.total_steps {
            report.log.push(LogRecord {
                step: done,
                learning_rate: rec.learning_rate,
                losses: interval.take(),
            });
        }
        report.diagnostics.extend(rec.diagnostics);
        if let (Some(test), true) = (test, cfg.eval_interval > 0 && done % cfg.eval_interval == 0 && done < cfg.total_steps) {
            let metrics = evaluate(trainer.model(), test, &cfg.detect)?;
            report.evals.push(EvalRecord { step: done, metrics });
        }
        if let (Some(dir), true) = (out, cfg.checkpoint_interval > 0 && done % cfg.checkpoint_interval == 0) {
            trainer.model().save(&dir.join(format!("checkpoint_{done:06}.ckpt")))?;
        }
    }
    if let Some(test) = test {
        let metrics = evaluate(trainer.model(), test, &cfg.detect)?;
        report.evals.push(EvalRecord {
            step: cfg.total_steps,
            metrics,
        });
        report.final_metrics = Some(metrics);
    }
    report.density = density_windows(&report.diagnostics, &cfg.filter, cfg.filter.step_interval, DENSITY_BINS)?;
    let model = trainer.into_model();
    if let Some(dir) = out {
        model.save(&dir.join("model.ckpt"))?;
        write_file(&dir.join("losses.csv"), &report.log_csv())?;
        write_file(&dir.join("diagnostics.csv"), &report.diagnostics_csv())?;
        write_file(&dir.join("eval.csv"), &report.evals_csv())?;
        write_file(&dir.join("density.csv"), &report.density_csv())?;
        DensityTrace {
            schedule: cfg.filter,
            records: report.diagnostics.clone(),
        }
        .save(&dir.join("trace.json"))?;
        let json = serde_json::to_string_pretty(&report).map_err(|e| TrainError::parse(dir, e))?;
        write_file(&dir.join("report.json"), &json)?;
    }
    Ok(TrainOutcome { model, report })
}

pub fn train(
    cfg: &TrainConfig,
    train_set: &Dataset,
    split: &Split,
    seed: u64,
    test: Option<&Dataset>,
    out: Option<&Path>,
) -> Result<TrainOutcome> {
    train_with(cfg, train_set, split, seed, test, out, |_| {})
}
