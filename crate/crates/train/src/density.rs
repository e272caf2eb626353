//! Confidence-density reports: histograms of retained pseudo-label scores
//! per time window, replayed offline for several quantile bases.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use rise_core::filter::{filter_scores, FilterDiagnostics, FilterSchedule};

use crate::error::{Result, TrainError};

pub const DENSITY_BINS: usize = 20;
/// Quantile bases compared by `report_density`.
pub const DENSITY_A0: [f64; 5] = [0.7, 0.9, 0.95, 0.99, 0.995];

/// Retained-score histogram over `[start, end)` with equal bins covering `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DensityWindow {
    pub start: u64,
    pub end: u64,
    pub counts: Vec<u64>,
}

impl DensityWindow {
    pub fn mass(&self) -> u64 {
        self.counts.iter().sum()
    }
}

/// Candidate scores of every weak-branch filter call plus the schedule they
/// were filtered with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityTrace {
    pub schedule: FilterSchedule,
    pub records: Vec<FilterDiagnostics>,
}

impl DensityTrace {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| TrainError::parse(path, e))?;
        fs::write(path, text).map_err(|e| TrainError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| TrainError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| TrainError::parse(path, e))
    }
}

/// Scores that `schedule` retains for one recorded filter call.
pub fn retained_scores(record: &FilterDiagnostics, schedule: &FilterSchedule) -> Result<Vec<f64>> {
    let gamma = schedule.gamma_at(record.step)?;
    let p = schedule.quantile_prob_at(record.step)?;
    let keep = filter_scores(&record.scores, gamma, p, schedule.mode)?;
    Ok(keep.into_iter().map(|i| record.scores[i]).collect())
}

pub fn bin_of(score: f64, bins: usize) -> usize {
    ((score.clamp(0.0, 1.0) * bins as f64) as usize).min(bins - 1)
}

/// Histograms of retained scores in consecutive windows of `window` steps.
pub fn density_windows(
    records: &[FilterDiagnostics],
    schedule: &FilterSchedule,
    window: u64,
    bins: usize,
) -> Result<Vec<DensityWindow>> {
    if window == 0 || bins == 0 {
        return Err(TrainError::config("density window and bin count must be positive"));
    }
    let n = schedule.total_steps.div_ceil(window);
    let mut out: Vec<DensityWindow> = (0..n)
        .map(|k| DensityWindow {
            start: k * window,
            end: ((k + 1) * window).min(schedule.total_steps),
            counts: vec![0; bins],
        })
        .collect();
    for r in records {
        let k = (r.step / window) as usize;
        let Some(w) = out.get_mut(k) else {
            return Err(TrainError::config(format!("trace step {} beyond {} steps", r.step, schedule.total_steps)));
        };
        for s in retained_scores(r, schedule)? {
            w.counts[bin_of(s, bins)] += 1;
        }
    }
    Ok(out)
}

/// Density of one quantile base.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityReport {
    pub a0: f64,
    pub windows: Vec<DensityWindow>,
    /// Retained count summed over the replayed filter calls.
    pub retained: u64,
}

/// Column-normalized heat map: one column per window, low scores at the bottom.
pub fn render_heatmap(windows: &[DensityWindow], path: &Path) -> Result<()> {
    const CELL: u32 = 12;
    let cols = windows.len().max(1) as u32;
    let rows = windows.first().map_or(DENSITY_BINS, |w| w.counts.len()) as u32;
    let mut img = image::RgbImage::new(cols * CELL, rows * CELL);
    for (c, w) in windows.iter().enumerate() {
        let peak = w.counts.iter().copied().max().unwrap_or(0).max(1) as f64;
        for (b, &n) in w.counts.iter().enumerate() {
            let v = n as f64 / peak;
            let px = image::Rgb([(255.0 * v) as u8, (255.0 * v * v) as u8, (80.0 + 120.0 * (1.0 - v)) as u8]);
            let y0 = (rows - 1 - b as u32) * CELL;
            for dy in 0..CELL {
                for dx in 0..CELL {
                    img.put_pixel(c as u32 * CELL + dx, y0 + dy, px);
                }
            }
        }
    }
    img.save(path).map_err(|e| TrainError::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Replays the trace under every base in [`DENSITY_A0`] and writes one heat
/// map per base plus `density.csv` (per-bin counts) and `retained.csv`.
pub fn report_density(trace: &DensityTrace, out: &Path) -> Result<Vec<DensityReport>> {
    fs::create_dir_all(out).map_err(|e| TrainError::io(out, e))?;
    let window = trace.schedule.step_interval;
    let mut reports = Vec::new();
    let mut csv = String::from("a0,window_start,window_end,bin_low,bin_high,count\n");
    let mut summary = String::from("a0,retained\n");
    for a0 in DENSITY_A0 {
        let schedule = FilterSchedule { a0, ..trace.schedule };
        let windows = density_windows(&trace.records, &schedule, window, DENSITY_BINS)?;
        let retained = windows.iter().map(DensityWindow::mass).sum();
        for w in &windows {
            for (b, n) in w.counts.iter().enumerate() {
                let lo = b as f64 / DENSITY_BINS as f64;
                let hi = (b + 1) as f64 / DENSITY_BINS as f64;
                let _ = writeln!(csv, "{a0},{},{},{lo:.2},{hi:.2},{n}", w.start, w.end);
            }
        }
        let _ = writeln!(summary, "{a0},{retained}");
        render_heatmap(&windows, &out.join(format!("density_a0_{a0}.png")))?;
        reports.push(DensityReport { a0, windows, retained });
    }
    let path = out.join("density.csv");
    fs::write(&path, csv).map_err(|e| TrainError::io(&path, e))?;
    let path = out.join("retained.csv");
    fs::write(&path, summary).map_err(|e| TrainError::io(&path, e))?;
    Ok(reports)
}
