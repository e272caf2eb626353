//! Train/test datasets of one experiment.

use std::path::Path;

use rise_core::data::{generate_shapes, Dataset};

use crate::config::DataConfig;
use crate::error::Result;

/// Disjoint training and held-out test images.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub train: Dataset,
    pub test: Dataset,
}

impl Experiment {
    /// Generates both splits in memory; test ids follow the training ids.
    pub fn generate(cfg: &DataConfig) -> Result<Self> {
        let train = generate_shapes(cfg.train_images, 0, cfg.seed, &cfg.shapes)?;
        let test = generate_shapes(cfg.test_images, cfg.train_images as u64, cfg.seed ^ 0x5eed_7e57, &cfg.shapes)?;
        Ok(Self { train, test })
    }

    /// Writes `train/` and `test/` dataset directories under `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        self.train.save(&dir.join("train"))?;
        self.test.save(&dir.join("test"))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        Ok(Self {
            train: Dataset::load(&dir.join("train"))?,
            test: Dataset::load(&dir.join("test"))?,
        })
    }
}
