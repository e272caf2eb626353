//! Pseudo-sequence synthesis.
//!
//! Object cutouts from labeled images are pasted into a frame to form the
//! "before" view `x1`; some are then removed and new ones added to form the
//! "after" view `x2`, and `x3` is a photometric-only strong view of `x1`.
//! Scenes are kept as layers (a base frame plus an ordered object list) so
//! that removal re-renders the frame rather than leaving holes.

use std::fs;
use std::path::Path;

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::data::{Annotation, AnnotationSet, Category, ImageRecord, Instance, Sample};
use crate::error::{Error, Result};
use crate::frame::{warp_image, warp_mask, Affine, RgbImage};
use crate::geometry::{mask_to_box, rle_encode, BinaryMask, PixelBox};

/// Identifies where a bank entry was cut from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SourceId {
    pub image_id: u64,
    pub instance: usize,
}

/// A cutout: pixels outside the mask are zero.
#[derive(Debug, Clone, PartialEq)]
pub struct BankEntry {
    pub rgb: RgbImage,
    pub mask: BinaryMask,
    pub source_id: SourceId,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct InstanceBank {
    entries: Vec<BankEntry>,
}

impl InstanceBank {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[BankEntry] {
        &self.entries
    }

    /// Adds the cutout of `mask` from `image`; empty masks are ignored.
    pub fn add_cutout(&mut self, image: &RgbImage, mask: &BinaryMask, source_id: SourceId) -> bool {
        match mask_to_box(mask) {
            Ok(b) => {
                self.entries.push(cut_out(image, mask, b, source_id));
                true
            }
            Err(_) => false,
        }
    }
}

/// Cuts every annotated instance of the labeled samples out of its image.
pub fn build_bank(labeled: &[&Sample]) -> Result<InstanceBank> {
    let mut entries = Vec::new();
    for s in labeled {
        for (k, inst) in s.instances.iter().enumerate() {
            let Ok(b) = mask_to_box(&inst.mask) else {
                continue;
            };
            entries.push(cut_out(&s.image, &inst.mask, b, SourceId { image_id: s.image_id, instance: k }));
        }
    }
    if entries.is_empty() {
        return Err(Error::config("the labeled split has no annotated instances"));
    }
    Ok(InstanceBank { entries })
}

fn cut_out(image: &RgbImage, mask: &BinaryMask, b: PixelBox, source_id: SourceId) -> BankEntry {
    let (w, h) = (b.width(), b.height());
    let local = BinaryMask::from_fn(h, w, |u, v| mask.get(b.x_min + u, b.y_min + v)).expect("box is non-empty");
    let mut rgb = image.crop(b.x_min, b.y_min, w, h);
    for v in 0..h {
        for u in 0..w {
            if !local.get(u, v) {
                rgb.set_pixel(u, v, [0.0; 3]);
            }
        }
    }
    BankEntry { rgb, mask: local, source_id }
}

/// Beta-distributed top-left corner placement.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlacementSampler {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for PlacementSampler {
    fn default() -> Self {
        Self { alpha: 0.5, beta: 0.5 }
    }
}

impl PlacementSampler {
    fn distribution(&self) -> Result<Beta<f64>> {
        Beta::new(self.alpha, self.beta)
            .map_err(|e| Error::config(format!("invalid Beta({}, {}): {e}", self.alpha, self.beta)))
    }

    /// Draws `(u, v)` so that an `obj_w`×`obj_h` object lies fully inside
    /// the frame.
    pub fn sample_placement(
        &self,
        frame_w: usize,
        frame_h: usize,
        obj_w: usize,
        obj_h: usize,
        rng: &mut impl Rng,
    ) -> Result<(usize, usize)> {
        if obj_w > frame_w || obj_h > frame_h {
            return Err(Error::DoesNotFit { obj_w, obj_h, frame_w, frame_h });
        }
        let dist = self.distribution()?;
        let u = (dist.sample(rng) * (frame_w - obj_w) as f64).round() as usize;
        let v = (dist.sample(rng) * (frame_h - obj_h) as f64).round() as usize;
        Ok((u.min(frame_w - obj_w), v.min(frame_h - obj_h)))
    }
}

/// Shared geometric and brightness jitter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WeakSpec {
    pub rotation_deg: f64,
    /// Maximum shift as a fraction of each side.
    pub translation: f64,
    pub brightness: f64,
    pub scale: (f64, f64),
    /// Maximum fraction of each side removed by a random crop.
    pub crop: f64,
}

impl Default for WeakSpec {
    fn default() -> Self {
        Self {
            rotation_deg: 5.0,
            translation: 0.05,
            brightness: 0.1,
            scale: (0.9, 1.1),
            crop: 0.1,
        }
    }
}

impl WeakSpec {
    pub fn identity() -> Self {
        Self {
            rotation_deg: 0.0,
            translation: 0.0,
            brightness: 0.0,
            scale: (1.0, 1.0),
            crop: 0.0,
        }
    }
}

/// Photometric augmentation, sampled RandAugment-style.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StrongSpec {
    /// Number of operations drawn from {color jitter, temperature, blur}.
    pub num_ops: usize,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    /// Maximum red/blue gain for the colour-temperature shift.
    pub temperature: f64,
    pub blur_sigma: (f64, f64),
    pub grayscale_prob: f64,
}

impl Default for StrongSpec {
    fn default() -> Self {
        Self {
            num_ops: 2,
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.4,
            temperature: 0.2,
            blur_sigma: (0.1, 1.2),
            grayscale_prob: 0.2,
        }
    }
}

impl StrongSpec {
    pub fn identity() -> Self {
        Self {
            num_ops: 0,
            brightness: 0.0,
            contrast: 0.0,
            saturation: 0.0,
            temperature: 0.0,
            blur_sigma: (0.0, 0.0),
            grayscale_prob: 0.0,
        }
    }
}

/// Per-cutout transform applied before pasting.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ObjectSpec {
    pub scale: (f64, f64),
    pub rotation_deg: f64,
    pub flip_prob: f64,
    pub brightness: f64,
}

impl Default for ObjectSpec {
    fn default() -> Self {
        Self {
            scale: (0.7, 1.3),
            rotation_deg: 30.0,
            flip_prob: 0.5,
            brightness: 0.1,
        }
    }
}

impl ObjectSpec {
    pub fn identity() -> Self {
        Self {
            scale: (1.0, 1.0),
            rotation_deg: 0.0,
            flip_prob: 0.0,
            brightness: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentationSpec {
    pub weak: WeakSpec,
    pub strong: StrongSpec,
    pub per_object: ObjectSpec,
}

impl AugmentationSpec {
    pub fn identity() -> Self {
        Self {
            weak: WeakSpec::identity(),
            strong: StrongSpec::identity(),
            per_object: ObjectSpec::identity(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let w = &self.weak;
        let s = &self.strong;
        let o = &self.per_object;
        let vals = [
            w.rotation_deg, w.translation, w.brightness, w.scale.0, w.scale.1, w.crop,
            s.brightness, s.contrast, s.saturation, s.temperature, s.blur_sigma.0, s.blur_sigma.1, s.grayscale_prob,
            o.scale.0, o.scale.1, o.rotation_deg, o.flip_prob, o.brightness,
        ];
        if vals.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::config("augmentation magnitudes must be finite and non-negative"));
        }
        if w.scale.0 <= 0.0 || w.scale.0 > w.scale.1 || o.scale.0 <= 0.0 || o.scale.0 > o.scale.1 {
            return Err(Error::config("scale ranges must be positive and ordered"));
        }
        if s.blur_sigma.0 > s.blur_sigma.1 || w.crop >= 1.0 || s.grayscale_prob > 1.0 || o.flip_prob > 1.0 {
            return Err(Error::config("augmentation ranges out of bounds"));
        }
        Ok(())
    }
}

fn symmetric(rng: &mut impl Rng, m: f64) -> f64 {
    if m > 0.0 {
        rng.random_range(-m..=m)
    } else {
        0.0
    }
}

fn in_range(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

fn mean_colour(img: &RgbImage) -> [f32; 3] {
    let mut acc = [0.0f64; 3];
    for px in img.data().chunks_exact(3) {
        for c in 0..3 {
            acc[c] += px[c] as f64;
        }
    }
    let n = (img.height() * img.width()) as f64;
    acc.map(|a| (a / n) as f32)
}

/// Applies one shared random similarity transform (with crop-zoom) to the
/// frame and all masks, then a global brightness factor to the frame.
pub fn weak_augment(
    frame: &RgbImage,
    masks: &[BinaryMask],
    spec: &WeakSpec,
    rng: &mut impl Rng,
) -> (RgbImage, Vec<BinaryMask>) {
    let (h, w) = (frame.height(), frame.width());
    let angle = symmetric(rng, spec.rotation_deg);
    let crop = if spec.crop > 0.0 { rng.random_range(0.0..=spec.crop) } else { 0.0 };
    let scale = in_range(rng, spec.scale) / (1.0 - crop);
    let tx = symmetric(rng, spec.translation) * w as f64;
    let ty = symmetric(rng, spec.translation) * h as f64;
    let gain = 1.0 + symmetric(rng, spec.brightness) as f32;

    let centre = (w as f64 / 2.0, h as f64 / 2.0);
    let inv = Affine::inverse_similarity(scale, angle, false, centre, (centre.0 + tx, centre.1 + ty));
    let geometric = !(angle == 0.0 && scale == 1.0 && tx == 0.0 && ty == 0.0);
    let mut out = if geometric {
        warp_image(frame, &inv, h, w, mean_colour(frame))
    } else {
        frame.clone()
    };
    if gain != 1.0 {
        out.map_pixels(|p| p.map(|c| c * gain));
    }
    let masks = masks
        .iter()
        .map(|m| if geometric { warp_mask(m, &inv, h, w) } else { m.clone() })
        .collect();
    (out, masks)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum PhotoOp {
    Jitter,
    Temperature,
    Blur,
}

/// Applies a random subset of photometric operations; geometry is untouched.
pub fn strong_augment(frame: &RgbImage, spec: &StrongSpec, rng: &mut impl Rng) -> RgbImage {
    const OPS: [PhotoOp; 3] = [PhotoOp::Jitter, PhotoOp::Temperature, PhotoOp::Blur];
    let mut out = frame.clone();
    let n = spec.num_ops.min(OPS.len());
    let mut chosen: Vec<usize> = sample_indices(rng, OPS.len(), n).into_vec();
    chosen.sort_unstable();
    for i in chosen {
        match OPS[i] {
            PhotoOp::Jitter => {
                let b = 1.0 + symmetric(rng, spec.brightness) as f32;
                let c = 1.0 + symmetric(rng, spec.contrast) as f32;
                let s = 1.0 + symmetric(rng, spec.saturation) as f32;
                color_jitter(&mut out, b, c, s);
            }
            PhotoOp::Temperature => {
                let g = symmetric(rng, spec.temperature) as f32;
                temperature_shift(&mut out, g);
            }
            PhotoOp::Blur => {
                let sigma = in_range(rng, spec.blur_sigma);
                out = gaussian_blur(&out, sigma);
            }
        }
    }
    if spec.grayscale_prob > 0.0 && rng.random_bool(spec.grayscale_prob) {
        grayscale(&mut out);
    }
    out
}

fn luma(p: [f32; 3]) -> f32 {
    0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]
}

/// Brightness, contrast (about the mean luma) and saturation factors.
pub fn color_jitter(img: &mut RgbImage, brightness: f32, contrast: f32, saturation: f32) {
    if brightness == 1.0 && contrast == 1.0 && saturation == 1.0 {
        return;
    }
    let n = (img.height() * img.width()) as f32;
    let mean = img.data().chunks_exact(3).map(|p| luma([p[0], p[1], p[2]])).sum::<f32>() / n;
    img.map_pixels(|p| {
        let p = p.map(|c| c * brightness);
        let p = p.map(|c| mean + (c - mean) * contrast);
        let y = luma(p);
        p.map(|c| y + (c - y) * saturation)
    });
}

/// Warmer for positive `gain` (red up, blue down), cooler for negative.
pub fn temperature_shift(img: &mut RgbImage, gain: f32) {
    if gain == 0.0 {
        return;
    }
    img.map_pixels(|[r, g, b]| [r * (1.0 + gain), g, b * (1.0 - gain)]);
}

pub fn grayscale(img: &mut RgbImage) {
    img.map_pixels(|p| {
        let y = luma(p);
        [y, y, y]
    });
}

/// Separable Gaussian blur with edge clamping.
pub fn gaussian_blur(img: &RgbImage, sigma: f64) -> RgbImage {
    if sigma <= 0.0 {
        return img.clone();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f32> = (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp() as f32).collect();
    let norm: f32 = kernel.iter().sum();
    let kernel: Vec<f32> = kernel.iter().map(|k| k / norm).collect();
    let (h, w) = (img.height() as isize, img.width() as isize);
    let pass = |src: &RgbImage, horizontal: bool| {
        let mut dst = src.clone();
        for v in 0..h {
            for u in 0..w {
                let mut acc = [0.0f32; 3];
                for (k, weight) in kernel.iter().enumerate() {
                    let d = k as isize - radius;
                    let (x, y) = if horizontal {
                        ((u + d).clamp(0, w - 1), v)
                    } else {
                        (u, (v + d).clamp(0, h - 1))
                    };
                    let p = src.pixel(x as usize, y as usize);
                    for c in 0..3 {
                        acc[c] += weight * p[c];
                    }
                }
                dst.set_pixel(u as usize, v as usize, acc);
            }
        }
        dst
    };
    pass(&pass(img, true), false)
}

/// A cutout after its per-object transform, cropped to its mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Cutout {
    pub rgb: RgbImage,
    pub mask: BinaryMask,
}

/// Scales, rotates, flips and re-tints a bank entry.
pub fn transform_entry(entry: &BankEntry, spec: &ObjectSpec, rng: &mut impl Rng) -> Option<Cutout> {
    let scale = in_range(rng, spec.scale);
    let angle = symmetric(rng, spec.rotation_deg);
    let flip = spec.flip_prob > 0.0 && rng.random_bool(spec.flip_prob);
    let gain = 1.0 + symmetric(rng, spec.brightness) as f32;

    let (w, h) = (entry.mask.width() as f64, entry.mask.height() as f64);
    let (s, c) = angle.to_radians().sin_cos();
    let ow = ((c.abs() * w + s.abs() * h) * scale).ceil().max(1.0) as usize;
    let oh = ((s.abs() * w + c.abs() * h) * scale).ceil().max(1.0) as usize;
    let inv = Affine::inverse_similarity(scale, angle, flip, (w / 2.0, h / 2.0), (ow as f64 / 2.0, oh as f64 / 2.0));
    let mask = warp_mask(&entry.mask, &inv, oh, ow);
    let rgb = warp_image(&entry.rgb, &inv, oh, ow, [0.0; 3]);
    let b = mask_to_box(&mask).ok()?;
    let local = BinaryMask::from_fn(b.height(), b.width(), |u, v| mask.get(b.x_min + u, b.y_min + v)).ok()?;
    let mut rgb = rgb.crop(b.x_min, b.y_min, b.width(), b.height());
    rgb.map_pixels(|p| p.map(|c| c * gain));
    for v in 0..local.height() {
        for u in 0..local.width() {
            if !local.get(u, v) {
                rgb.set_pixel(u, v, [0.0; 3]);
            }
        }
    }
    Some(Cutout { rgb, mask: local })
}

/// `|new ∩ old| / |new|`.
pub fn overlap_ratio(new: &BinaryMask, old: &BinaryMask) -> Result<f64> {
    let area = new.area();
    if area == 0 {
        return Ok(0.0);
    }
    Ok(new.intersection_area(old)? as f64 / area as f64)
}

/// The cutout's mask placed in frame coordinates.
pub fn place_mask(cutout: &Cutout, (u0, v0): (usize, usize), frame_h: usize, frame_w: usize) -> BinaryMask {
    let (cw, ch) = (cutout.mask.width(), cutout.mask.height());
    BinaryMask::from_fn(frame_h, frame_w, |u, v| {
        u >= u0 && v >= v0 && u < u0 + cw && v < v0 + ch && cutout.mask.get(u - u0, v - v0)
    })
    .expect("frame dimensions are positive")
}

/// Pastes the cutout's masked pixels at `(u0, v0)`.
pub fn composite(frame: &mut RgbImage, cutout: &Cutout, (u0, v0): (usize, usize)) {
    for v in 0..cutout.mask.height() {
        for u in 0..cutout.mask.width() {
            if cutout.mask.get(u, v) {
                frame.set_pixel(u0 + u, v0 + v, cutout.rgb.pixel(u, v));
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SequenceConfig {
    pub k_min: usize,
    pub k_max: usize,
    pub removal_prob: f64,
    pub add_min: usize,
    pub add_max: usize,
    pub overlap_cap: f64,
    pub max_attempts: usize,
    pub placement: PlacementSampler,
}

impl Default for SequenceConfig {
    fn default() -> Self {
        Self {
            k_min: 1,
            k_max: 4,
            removal_prob: 0.3,
            add_min: 0,
            add_max: 2,
            overlap_cap: 0.85,
            max_attempts: 10,
            placement: PlacementSampler::default(),
        }
    }
}

impl SequenceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_min > self.k_max || self.add_min > self.add_max {
            return Err(Error::config("empty insertion count range"));
        }
        if !(0.0..=1.0).contains(&self.removal_prob) || !(0.0..=1.0).contains(&self.overlap_cap) {
            return Err(Error::config("probabilities must lie in [0, 1]"));
        }
        if self.max_attempts == 0 {
            return Err(Error::config("max_attempts must be positive"));
        }
        self.placement.distribution().map(|_| ())
    }
}

/// Tries up to `cfg.max_attempts` placements of `cutout` and returns the
/// first whose overlap ratio against every mask in `existing` is within the
/// cap, together with the composited frame. `None` means skip.
pub fn insert_instance(
    frame: &RgbImage,
    cutout: &Cutout,
    existing: &[&BinaryMask],
    cfg: &SequenceConfig,
    rng: &mut impl Rng,
) -> Result<Option<(RgbImage, BinaryMask, (usize, usize))>> {
    let (h, w) = (frame.height(), frame.width());
    for _ in 0..cfg.max_attempts {
        let at = match cfg.placement.sample_placement(w, h, cutout.mask.width(), cutout.mask.height(), rng) {
            Ok(at) => at,
            Err(Error::DoesNotFit { .. }) => return Ok(None),
            Err(e) => return Err(e),
        };
        let placed = place_mask(cutout, at, h, w);
        let mut ok = true;
        for old in existing {
            if overlap_ratio(&placed, old)? > cfg.overlap_cap {
                ok = false;
                break;
            }
        }
        if ok {
            let mut out = frame.clone();
            composite(&mut out, cutout, at);
            return Ok(Some((out, placed, at)));
        }
    }
    Ok(None)
}

/// A ground-truth instance in one frame of a sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct SeqInstance {
    pub id: u32,
    pub label: usize,
    pub mask: BinaryMask,
    /// False for objects that were already annotated in the source image.
    pub inserted: bool,
}

impl SeqInstance {
    pub fn pixel_box(&self) -> PixelBox {
        mask_to_box(&self.mask).expect("sequence instances are non-empty")
    }
}

#[derive(Debug, Clone)]
struct Layer {
    id: u32,
    cutout: Cutout,
    at: (usize, usize),
    full: BinaryMask,
}

/// Base frame, its own annotated objects, and pasted layers in paint order.
#[derive(Debug, Clone)]
struct Scene {
    base: RgbImage,
    base_objects: Vec<(u32, BinaryMask)>,
    layers: Vec<Layer>,
}

impl Scene {
    fn render(&self) -> RgbImage {
        let mut out = self.base.clone();
        for l in &self.layers {
            composite(&mut out, &l.cutout, l.at);
        }
        out
    }

    /// Visible masks in paint order: base objects, then layers; empty ones
    /// are dropped.
    fn visible(&self) -> Vec<SeqInstance> {
        let mut out = Vec::new();
        for (id, m) in &self.base_objects {
            let mut vis = m.clone();
            for l in &self.layers {
                vis.subtract(&l.full).expect("same frame");
            }
            out.push(SeqInstance { id: *id, label: 0, mask: vis, inserted: false });
        }
        for (i, l) in self.layers.iter().enumerate() {
            let mut vis = l.full.clone();
            for later in &self.layers[i + 1..] {
                vis.subtract(&later.full).expect("same frame");
            }
            out.push(SeqInstance { id: l.id, label: 0, mask: vis, inserted: true });
        }
        out.retain(|s| !s.mask.is_empty());
        out
    }

    fn insert(&mut self, id: u32, bank: &InstanceBank, spec: &ObjectSpec, cfg: &SequenceConfig, rng: &mut impl Rng) -> Result<bool> {
        let entry = &bank.entries[rng.random_range(0..bank.len())];
        let Some(cutout) = transform_entry(entry, spec, rng) else {
            return Ok(false);
        };
        let existing: Vec<&BinaryMask> = self
            .base_objects
            .iter()
            .map(|(_, m)| m)
            .chain(self.layers.iter().map(|l| &l.full))
            .collect();
        // the frame is only composited at render time
        match insert_instance(&self.base, &cutout, &existing, cfg, rng)? {
            Some((_, full, at)) => {
                self.layers.push(Layer { id, cutout, at, full });
                Ok(true)
            }
            None => Ok(false),
        }
    }
}

/// Before/after/strong frames with inserted-instance ground truth.
#[derive(Debug, Clone)]
pub struct PseudoSequence {
    pub x1: RgbImage,
    pub x2: RgbImage,
    pub x3: RgbImage,
    pub gt1: Vec<SeqInstance>,
    pub gt2: Vec<SeqInstance>,
    /// `(id, index in gt1, index in gt2)` for ids visible in both frames.
    pub correspondence: Vec<(u32, usize, usize)>,
    /// Number of instances pasted into `x1`.
    pub k: usize,
    pub removed: Vec<u32>,
    pub added: Vec<u32>,
    /// Full (unoccluded) masks of pasted objects in each frame's scene, in
    /// paint order, before the `x2` geometric jitter.
    pub inserted_full1: Vec<BinaryMask>,
    pub inserted_full2: Vec<BinaryMask>,
}

impl PseudoSequence {
    pub fn inserted_gt1(&self) -> impl Iterator<Item = &SeqInstance> {
        self.gt1.iter().filter(|s| s.inserted)
    }
}

/// Synthesizes `(x1, x2, x3)` from image `x`. When `annotated` is given the
/// source objects are tracked as well and pasted objects respect the overlap
/// cap against them.
pub fn make_sequence(
    x: &RgbImage,
    annotated: Option<&[Instance]>,
    bank: &InstanceBank,
    spec: &AugmentationSpec,
    cfg: &SequenceConfig,
    rng: &mut impl Rng,
) -> Result<PseudoSequence> {
    if bank.is_empty() {
        return Err(Error::config("instance bank is empty"));
    }
    let base_masks: Vec<BinaryMask> = annotated.unwrap_or(&[]).iter().map(|i| i.mask.clone()).collect();
    let (base, base_masks) = weak_augment(x, &base_masks, &spec.weak, rng);
    let base_objects: Vec<(u32, BinaryMask)> = base_masks
        .into_iter()
        .enumerate()
        .filter(|(_, m)| !m.is_empty())
        .map(|(i, m)| (i as u32, m))
        .collect();
    let mut next_id = annotated.map_or(0, |a| a.len() as u32);

    let mut scene = Scene { base, base_objects, layers: Vec::new() };
    let k_target = rng.random_range(cfg.k_min..=cfg.k_max);
    for _ in 0..k_target {
        if scene.insert(next_id, bank, &spec.per_object, cfg, rng)? {
            next_id += 1;
        }
    }
    let k = scene.layers.len();
    let x1 = scene.render();
    let gt1 = scene.visible();
    let inserted_full1 = scene.layers.iter().map(|l| l.full.clone()).collect();

    let mut scene2 = scene.clone();
    let mut removed = Vec::new();
    scene2.layers.retain(|l| {
        let drop = cfg.removal_prob > 0.0 && rng.random_bool(cfg.removal_prob);
        if drop {
            removed.push(l.id);
        }
        !drop
    });
    let n_add = rng.random_range(cfg.add_min..=cfg.add_max);
    let mut added = Vec::new();
    for _ in 0..n_add {
        if scene2.insert(next_id, bank, &spec.per_object, cfg, rng)? {
            added.push(next_id);
            next_id += 1;
        }
    }
    let inserted_full2 = scene2.layers.iter().map(|l| l.full.clone()).collect();
    let vis2 = scene2.visible();
    let masks2: Vec<BinaryMask> = vis2.iter().map(|s| s.mask.clone()).collect();
    let (x2, masks2) = weak_augment(&scene2.render(), &masks2, &spec.weak, rng);
    let gt2: Vec<SeqInstance> = vis2
        .into_iter()
        .zip(masks2)
        .map(|(s, mask)| SeqInstance { mask, ..s })
        .filter(|s| !s.mask.is_empty())
        .collect();

    let x3 = strong_augment(&x1, &spec.strong, rng);
    let correspondence = gt1
        .iter()
        .enumerate()
        .filter_map(|(i, a)| gt2.iter().position(|b| b.id == a.id).map(|j| (a.id, i, j)))
        .collect();

    Ok(PseudoSequence {
        x1,
        x2,
        x3,
        gt1,
        gt2,
        correspondence,
        k,
        removed,
        added,
        inserted_full1,
        inserted_full2,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct SequenceDump {
    #[serde(flatten)]
    set: AnnotationSet,
    /// Track id of every annotation, aligned with `annotations`.
    track_ids: Vec<u32>,
    /// `[annotation id in x1, annotation id in x2]`.
    pairs: Vec<[u64; 2]>,
}

/// Writes `x1.png`, `x2.png`, `x3.png` and `annotations.json` to `dir`.
pub fn dump_sequence(seq: &PseudoSequence, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let frames = [(&seq.x1, &seq.gt1), (&seq.x2, &seq.gt2), (&seq.x3, &seq.gt1)];
    let mut images = Vec::new();
    let mut annotations = Vec::new();
    let mut track_ids = Vec::new();
    for (f, (img, gt)) in frames.iter().enumerate() {
        let file = format!("x{}.png", f + 1);
        img.save_png(&dir.join(&file))?;
        images.push(ImageRecord {
            id: f as u64 + 1,
            file,
            height: img.height(),
            width: img.width(),
        });
        for (i, s) in gt.iter().enumerate() {
            annotations.push(Annotation {
                id: (f as u64 + 1) * 1000 + i as u64,
                image_id: f as u64 + 1,
                category_id: s.label as u32 + 1,
                rle: rle_encode(&s.mask),
                bbox: s.pixel_box().to_array(),
            });
            track_ids.push(s.id);
        }
    }
    let pairs = seq
        .correspondence
        .iter()
        .map(|&(_, i, j)| [1000 + i as u64, 2000 + j as u64])
        .collect();
    let dump = SequenceDump {
        set: AnnotationSet {
            images,
            annotations,
            categories: vec![Category::object()],
        },
        track_ids,
        pairs,
    };
    let path = dir.join("annotations.json");
    fs::write(&path, serde_json::to_string_pretty(&dump)?).map_err(|e| Error::io(&path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_shapes, ShapesConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    fn toy() -> Vec<Sample> {
        generate_shapes(3, 1, 7, &ShapesConfig::with_resolution(64, 80)).unwrap().samples
    }

    #[test]
    fn bank_has_one_entry_per_instance() {
        let samples = toy();
        let refs: Vec<&Sample> = samples.iter().collect();
        let bank = build_bank(&refs).unwrap();
        let n: usize = samples.iter().map(|s| s.instances.len()).sum();
        assert_eq!(bank.len(), n);
        for e in bank.entries() {
            assert!(!e.mask.is_empty());
            for v in 0..e.mask.height() {
                for u in 0..e.mask.width() {
                    if !e.mask.get(u, v) {
                        assert_eq!(e.rgb.pixel(u, v), [0.0; 3]);
                    }
                }
            }
        }
        assert!(build_bank(&[]).is_err());
    }

    #[test]
    fn placement_edges() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = PlacementSampler::default();
        assert_eq!(s.sample_placement(10, 8, 10, 8, &mut rng).unwrap(), (0, 0));
        assert!(matches!(s.sample_placement(10, 8, 11, 8, &mut rng), Err(Error::DoesNotFit { .. })));
        for _ in 0..1000 {
            let (u, v) = s.sample_placement(50, 40, 13, 7, &mut rng).unwrap();
            assert!(u + 13 <= 50 && v + 7 <= 40);
        }
    }

    #[test]
    fn uniform_placement_passes_chi_square() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = PlacementSampler { alpha: 1.0, beta: 1.0 };
        // 10 interior bins of width 10 over positions 5..=104 avoid the
        // half-width end bins created by rounding.
        let span = 110;
        let mut counts = [0f64; 10];
        let mut n = 0.0;
        for _ in 0..10_000 {
            let (u, _) = s.sample_placement(span, 1, 0, 1, &mut rng).unwrap();
            if (5..105).contains(&u) {
                counts[(u - 5) / 10] += 1.0;
                n += 1.0;
            }
        }
        let expected = n / 10.0;
        let stat: f64 = counts.iter().map(|c| (c - expected).powi(2) / expected).sum();
        let p = 1.0 - ChiSquared::new(9.0).unwrap().cdf(stat);
        assert!(p > 0.01, "chi-square p = {p}");
    }

    #[test]
    fn first_insertion_reproduces_cutout() {
        let samples = toy();
        let bank = build_bank(&[&samples[0]]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let entry = &bank.entries()[0];
        let cut = transform_entry(entry, &ObjectSpec::identity(), &mut rng).unwrap();
        assert_eq!(cut.mask, entry.mask);
        let frame = RgbImage::filled(64, 80, [0.5; 3]);
        let (out, placed, at) = insert_instance(&frame, &cut, &[], &SequenceConfig::default(), &mut rng)
            .unwrap()
            .unwrap();
        assert_eq!(placed, place_mask(&cut, at, 64, 80));
        assert_eq!(placed.area(), cut.mask.area());
        assert_eq!(out.pixel(at.0 + 1, at.1 + 1) == frame.pixel(0, 0), !cut.mask.get(1, 1));
    }

    #[test]
    fn covering_insertion_is_rejected() {
        let cut = Cutout {
            rgb: RgbImage::filled(8, 8, [1.0; 3]),
            mask: BinaryMask::ones(8, 8).unwrap(),
        };
        let frame = RgbImage::filled(8, 8, [0.0; 3]);
        let old = BinaryMask::ones(8, 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let r = insert_instance(&frame, &cut, &[&old], &SequenceConfig::default(), &mut rng).unwrap();
        assert!(r.is_none());
    }

    #[test]
    fn overlap_ratio_matches_pixel_count() {
        let a = BinaryMask::from_fn(6, 6, |u, v| u < 4 && v < 4).unwrap();
        let b = BinaryMask::from_fn(6, 6, |u, _| u >= 2).unwrap();
        let mut inter = 0;
        for v in 0..6 {
            for u in 0..6 {
                inter += (a.get(u, v) && b.get(u, v)) as usize;
            }
        }
        assert_eq!(overlap_ratio(&a, &b).unwrap(), inter as f64 / 16.0);
    }

    fn bank() -> InstanceBank {
        let samples = toy();
        let refs: Vec<&Sample> = samples.iter().collect();
        build_bank(&refs).unwrap()
    }

    #[test]
    fn no_removal_keeps_all_ids() {
        let bank = bank();
        let cfg = SequenceConfig {
            removal_prob: 0.0,
            add_max: 0,
            ..SequenceConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = RgbImage::filled(64, 80, [0.3; 3]);
        let spec = AugmentationSpec {
            weak: WeakSpec::identity(),
            ..AugmentationSpec::default()
        };
        for _ in 0..20 {
            let seq = make_sequence(&x, None, &bank, &spec, &cfg, &mut rng).unwrap();
            assert_eq!(seq.correspondence.len(), seq.gt1.len());
            assert!(seq.removed.is_empty() && seq.added.is_empty());
        }
    }

    #[test]
    fn full_removal_leaves_only_new_ids() {
        let bank = bank();
        let cfg = SequenceConfig {
            removal_prob: 1.0,
            add_min: 1,
            ..SequenceConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = RgbImage::filled(64, 80, [0.3; 3]);
        for _ in 0..20 {
            let seq = make_sequence(&x, None, &bank, &AugmentationSpec::default(), &cfg, &mut rng).unwrap();
            assert!(seq.correspondence.is_empty());
            assert!(seq.gt2.iter().all(|s| seq.added.contains(&s.id)));
        }
    }

    #[test]
    fn identity_strong_view_equals_x1() {
        let bank = bank();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = RgbImage::filled(64, 80, [0.3; 3]);
        let spec = AugmentationSpec {
            strong: StrongSpec::identity(),
            ..AugmentationSpec::default()
        };
        let seq = make_sequence(&x, None, &bank, &spec, &SequenceConfig::default(), &mut rng).unwrap();
        assert_eq!(seq.x3, seq.x1);
    }

    #[test]
    fn sequence_invariants() {
        let samples = toy();
        let bank = bank();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cfg = SequenceConfig::default();
        for i in 0..30 {
            let s = &samples[i % samples.len()];
            let seq = make_sequence(&s.image, Some(&s.instances), &bank, &AugmentationSpec::default(), &cfg, &mut rng).unwrap();
            for full in [&seq.inserted_full1, &seq.inserted_full2] {
                for (j, new) in full.iter().enumerate() {
                    for old in &full[..j] {
                        assert!(overlap_ratio(new, old).unwrap() <= cfg.overlap_cap);
                    }
                }
            }
            for &(id, a, b) in &seq.correspondence {
                assert_eq!(seq.gt1[a].id, id);
                assert_eq!(seq.gt2[b].id, id);
                assert!(!seq.removed.contains(&id) && !seq.added.contains(&id));
            }
            assert!(seq.removed.iter().all(|id| !seq.added.contains(id)));
            for f in [&seq.x1, &seq.x2, &seq.x3] {
                assert!(f.data().iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
    }

    #[test]
    fn weak_identity_and_alignment() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let s = &toy()[0];
        let masks: Vec<BinaryMask> = s.instances.iter().map(|i| i.mask.clone()).collect();
        let (img, out) = weak_augment(&s.image, &masks, &WeakSpec::identity(), &mut rng);
        assert_eq!(img, s.image);
        assert_eq!(out, masks);

        // warping a cutout's pixels and its mask with the same map agrees
        let bank = bank();
        let e = &bank.entries()[0];
        let inv = Affine::inverse_similarity(1.2, 17.0, true, (3.0, 2.0), (5.0, 4.0));
        let (h, w) = (e.mask.height() + 8, e.mask.width() + 8);
        let marker = RgbImage::from_vec(
            e.mask.height(),
            e.mask.width(),
            e.mask.values().iter().flat_map(|&m| [m as f32; 3]).collect(),
        )
        .unwrap();
        let warped_img = warp_image(&marker, &inv, h, w, [0.0; 3]);
        let from_img = BinaryMask::from_fn(h, w, |u, v| warped_img.pixel(u, v)[0] > 0.5).unwrap();
        assert_eq!(from_img, warp_mask(&e.mask, &inv, h, w));
    }

    #[test]
    fn strong_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let s = &toy()[0];
        assert_eq!(strong_augment(&s.image, &StrongSpec::identity(), &mut rng), s.image);
        let mut g = s.image.clone();
        grayscale(&mut g);
        assert!(g.data().chunks_exact(3).all(|p| p[0] == p[1] && p[1] == p[2]));
        let spec = StrongSpec {
            grayscale_prob: 1.0,
            ..StrongSpec::default()
        };
        let out = strong_augment(&s.image, &spec, &mut rng);
        assert!(out.data().chunks_exact(3).all(|p| p[0] == p[1] && p[1] == p[2]));
        let flat = RgbImage::filled(5, 5, [0.4, 0.5, 0.6]);
        assert_eq!(gaussian_blur(&flat, 1.0).pixel(2, 2).map(|c| (c * 1e4).round()), [4000.0, 5000.0, 6000.0]);
    }

    #[test]
    fn dump_writes_pairs() {
        let bank = bank();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = RgbImage::filled(64, 80, [0.3; 3]);
        let seq = make_sequence(&x, None, &bank, &AugmentationSpec::default(), &SequenceConfig::default(), &mut rng).unwrap();
        let dir = tempfile::tempdir().unwrap();
        dump_sequence(&seq, dir.path()).unwrap();
        let text = std::fs::read_to_string(dir.path().join("annotations.json")).unwrap();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["pairs"].as_array().unwrap().len(), seq.correspondence.len());
        assert!(dir.path().join("x3.png").exists());
    }
}
