use rise_core::eval::MaskPrediction;
use rise_core::frame::RgbImage;

use crate::error::Result;
use crate::model::SegModel;
use crate::output::{postprocess, DetectConfig};

impl SegModel {
    /// Inference over `images` (paired with `image_ids`) in batches.
    pub fn detect(&self, images: &[&RgbImage], image_ids: &[u64], cfg: &DetectConfig, batch: usize) -> Result<Vec<MaskPrediction>> {
        let mut out = Vec::new();
        for (chunk, ids) in images.chunks(batch.max(1)).zip(image_ids.chunks(batch.max(1))) {
            let x = self.images_to_tensor(chunk)?;
            let decoded = self.forward_no_grad(&x)?.decode()?;
            for (preds, &id) in decoded.iter().zip(ids) {
                out.extend(postprocess(preds, id, cfg)?);
            }
        }
        Ok(out)
    }
}
