//! Comparison drivers: identical runs that differ along one axis, reported
//! as medians over seeds.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use rise_core::eval::ApMetrics;
use rise_core::filter::{FilterMode, PseudoBoxOptions};

use crate::config::TrainConfig;
use crate::data::Experiment;
use crate::error::{Result, TrainError};
use crate::run::train;
use crate::trainer::Split;

/// Mask thresholds of the pseudo-box grid.
pub const MASK_GAMMAS: [f64; 3] = [0.5, 0.6, 0.7];

/// How pseudo-boxes are formed in the pseudo-box grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PseudoBoxVariant {
    /// The predicted box, duplicates suppressed by NMS.
    Standard,
    /// Box bounding the binarized mask, duplicates suppressed by NMS.
    M2b,
    /// Box bounding the binarized mask, overlapping same-class labels kept.
    M2bMlm,
}

impl PseudoBoxVariant {
    pub const ALL: [PseudoBoxVariant; 3] = [Self::Standard, Self::M2b, Self::M2bMlm];

    pub fn name(self) -> &'static str {
        match self {
            Self::Standard => "standard",
            Self::M2b => "m2b",
            Self::M2bMlm => "m2b_mlm",
        }
    }

    pub fn options(self, mask_gamma: f64) -> PseudoBoxOptions {
        PseudoBoxOptions {
            use_m2b: self != Self::Standard,
            use_mlm: self == Self::M2bMlm,
            mask_gamma: Some(mask_gamma),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub seeds: Vec<u64>,
    pub per_seed: Vec<ApMetrics>,
    /// Per-metric median over seeds.
    pub median: ApMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, name: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("name,ap,ap50,ap75,seeds\n");
        for r in &self.rows {
            let seeds: Vec<String> = r.seeds.iter().map(u64::to_string).collect();
            let _ = writeln!(
                s,
                "{},{:.6},{:.6},{:.6},{}",
                r.name,
                r.median.ap,
                r.median.ap50,
                r.median.ap75,
                seeds.join(" ")
            );
        }
        s
    }
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn median_metrics(runs: &[ApMetrics]) -> ApMetrics {
    let pick = |f: fn(&ApMetrics) -> f64| median(&runs.iter().map(f).collect::<Vec<_>>());
    ApMetrics {
        ap: pick(|m| m.ap),
        ap50: pick(|m| m.ap50),
        ap75: pick(|m| m.ap75),
    }
}

/// Final test metrics keyed by (config, seed), so drivers that share a
/// configuration train it once.
#[derive(Debug, Default)]
pub struct RunCache {
    runs: HashMap<(String, u64), ApMetrics>,
}

impl RunCache {
    pub fn len(&self) -> usize {
        self.runs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.runs.is_empty()
    }

    /// Test metrics of `cfg` at `seed`, training only on a cache miss.
    pub fn metrics(&mut self, cfg: &TrainConfig, exp: &Experiment, seed: u64, mut progress: impl FnMut(&str)) -> Result<ApMetrics> {
        let key = (cfg.to_toml()?, seed);
        if let Some(m) = self.runs.get(&key) {
            return Ok(*m);
        }
        let split = Split::new(&exp.train, cfg.labeled_fraction, seed)?;
        let outcome = train(cfg, &exp.train, &split, seed, Some(&exp.test), None)?;
        let m = outcome
            .report
            .final_metrics
            .ok_or_else(|| TrainError::config("run finished without test metrics"))?;
        progress(&format!("seed {seed}: AP {:.4} AP50 {:.4} AP75 {:.4}", m.ap, m.ap50, m.ap75));
        self.runs.insert(key, m);
        Ok(m)
    }

    /// One row: `cfg` trained at every seed of `cfg.seeds`.
    pub fn row(&mut self, name: &str, cfg: &TrainConfig, exp: &Experiment, progress: &mut impl FnMut(&str)) -> Result<AblationRow> {
        if cfg.seeds.is_empty() {
            return Err(TrainError::config("no seeds configured"));
        }
        let mut per_seed = Vec::with_capacity(cfg.seeds.len());
        for &seed in &cfg.seeds {
            per_seed.push(self.metrics(cfg, exp, seed, |m| progress(&format!("{name} {m}")))?);
        }
        Ok(AblationRow {
            name: name.to_string(),
            seeds: cfg.seeds.clone(),
            median: median_metrics(&per_seed),
            per_seed,
        })
    }
}

/// `cfg` with the filter switched to `mode`; `threshold_only` uses the
/// stricter `threshold_only_gamma` ramp.
pub fn filter_variant(cfg: &TrainConfig, mode: FilterMode) -> TrainConfig {
    let mut c = cfg.clone();
    c.filter.mode = mode;
    if mode == FilterMode::ThresholdOnly {
        (c.filter.gamma_start, c.filter.gamma_peak) = cfg.threshold_only_gamma;
    }
    c
}

/// One row per filter mode, runs otherwise identical.
pub fn ablate_filters(
    cfg: &TrainConfig,
    exp: &Experiment,
    modes: &[FilterMode],
    cache: &mut RunCache,
    mut progress: impl FnMut(&str),
) -> Result<AblationTable> {
    let mut rows = Vec::new();
    for &mode in modes {
        rows.push(cache.row(mode.name(), &filter_variant(cfg, mode), exp, &mut progress)?);
    }
    Ok(AblationTable { rows })
}

pub fn pseudo_box_variant(cfg: &TrainConfig, variant: PseudoBoxVariant, mask_gamma: f64) -> TrainConfig {
    let mut c = cfg.clone();
    c.pseudo_box = variant.options(mask_gamma);
    c
}

/// Grid over mask thresholds and pseudo-box variants; rows are named
/// `<variant>@<gamma>`.
pub fn ablate_pseudo_box(
    cfg: &TrainConfig,
    exp: &Experiment,
    mask_gammas: &[f64],
    variants: &[PseudoBoxVariant],
    cache: &mut RunCache,
    mut progress: impl FnMut(&str),
) -> Result<AblationTable> {
    let mut rows = Vec::new();
    for &g in mask_gammas {
        for &v in variants {
            let name = format!("{}@{g}", v.name());
            rows.push(cache.row(&name, &pseudo_box_variant(cfg, v, g), exp, &mut progress)?);
        }
    }
    Ok(AblationTable { rows })
}
