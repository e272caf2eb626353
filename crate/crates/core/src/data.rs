//! Datasets: the in-memory sample representation, the on-disk annotation
//! schema, the synthetic shapes generator and labeled/unlabeled splitting.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::RgbImage;
use crate::geometry::{mask_to_box, rle_decode, rle_encode, BinaryMask, RleMask};

/// One annotated object instance.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub category_id: u32,
    pub mask: BinaryMask,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image_id: u64,
    pub image: RgbImage,
    pub instances: Vec<Instance>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Category {
    pub id: u32,
    pub name: String,
}

impl Category {
    pub fn object() -> Self {
        Self {
            id: 1,
            name: "object".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub categories: Vec<Category>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn image_ids(&self) -> Vec<u64> {
        self.samples.iter().map(|s| s.image_id).collect()
    }

    /// Samples whose ids are listed, in the order given.
    pub fn subset(&self, ids: &[u64]) -> Vec<&Sample> {
        let index: HashMap<u64, &Sample> = self.samples.iter().map(|s| (s.image_id, s)).collect();
        ids.iter().filter_map(|id| index.get(id).copied()).collect()
    }

    pub fn to_annotations(&self) -> AnnotationSet {
        let mut images = Vec::with_capacity(self.samples.len());
        let mut annotations = Vec::new();
        let mut next_id = 1;
        for s in &self.samples {
            images.push(ImageRecord {
                id: s.image_id,
                file: format!("images/{:06}.png", s.image_id),
                height: s.image.height(),
                width: s.image.width(),
            });
            for inst in &s.instances {
                let bbox = mask_to_box(&inst.mask)
                    .expect("dataset instances have non-empty masks")
                    .to_array();
                annotations.push(Annotation {
                    id: next_id,
                    image_id: s.image_id,
                    category_id: inst.category_id,
                    rle: rle_encode(&inst.mask),
                    bbox,
                });
                next_id += 1;
            }
        }
        AnnotationSet {
            images,
            annotations,
            categories: self.categories.clone(),
        }
    }

    /// Writes `images/*.png` and `annotations.json` under `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let images_dir = dir.join("images");
        fs::create_dir_all(&images_dir).map_err(|e| Error::io(&images_dir, e))?;
        let set = self.to_annotations();
        for (rec, s) in set.images.iter().zip(&self.samples) {
            s.image.save_png(&dir.join(&rec.file))?;
        }
        set.save(&dir.join("annotations.json"))
    }

    pub fn load(dir: &Path) -> Result<Dataset> {
        let set = load_annotations(&dir.join("annotations.json"))?;
        let mut by_image: HashMap<u64, Vec<Instance>> = HashMap::new();
        for a in &set.annotations {
            by_image.entry(a.image_id).or_default().push(Instance {
                category_id: a.category_id,
                mask: rle_decode(&a.rle)?,
            });
        }
        let mut samples = Vec::with_capacity(set.images.len());
        for rec in &set.images {
            let image = RgbImage::load_png(&dir.join(&rec.file))?;
            if image.height() != rec.height || image.width() != rec.width {
                return Err(Error::corrupt(format!(
                    "image {} is {}x{}, annotations say {}x{}",
                    rec.id,
                    image.height(),
                    image.width(),
                    rec.height,
                    rec.width
                )));
            }
            samples.push(Sample {
                image_id: rec.id,
                image,
                instances: by_image.remove(&rec.id).unwrap_or_default(),
            });
        }
        Ok(Dataset {
            samples,
            categories: set.categories,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: u64,
    pub file: String,
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Annotation {
    pub id: u64,
    pub image_id: u64,
    pub category_id: u32,
    pub rle: RleMask,
    /// Inclusive pixel box `[x_min, y_min, x_max, y_max]` of the mask.
    pub bbox: [usize; 4],
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationSet {
    pub images: Vec<ImageRecord>,
    pub annotations: Vec<Annotation>,
    pub categories: Vec<Category>,
}

impl AnnotationSet {
    /// Checks referential integrity, RLE validity and bbox consistency.
    pub fn validate(&self) -> Result<()> {
        let mut images = HashMap::new();
        for img in &self.images {
            if images.insert(img.id, img).is_some() {
                return Err(Error::corrupt(format!("duplicate image id {}", img.id)));
            }
        }
        let categories: HashSet<u32> = self.categories.iter().map(|c| c.id).collect();
        let mut seen = HashSet::new();
        for a in &self.annotations {
            if !seen.insert(a.id) {
                return Err(Error::corrupt(format!("duplicate annotation id {}", a.id)));
            }
            let Some(img) = images.get(&a.image_id) else {
                return Err(Error::corrupt(format!(
                    "annotation {} references unknown image {}",
                    a.id, a.image_id
                )));
            };
            if !categories.contains(&a.category_id) {
                return Err(Error::corrupt(format!(
                    "annotation {} references unknown category {}",
                    a.id, a.category_id
                )));
            }
            if a.rle.height != img.height || a.rle.width != img.width {
                return Err(Error::corrupt(format!(
                    "annotation {}: mask size does not match image {}",
                    a.id, img.id
                )));
            }
            let mask = rle_decode(&a.rle)
                .map_err(|e| Error::corrupt(format!("annotation {}: {e}", a.id)))?;
            let bbox = mask_to_box(&mask)
                .map_err(|_| Error::corrupt(format!("annotation {}: empty mask", a.id)))?;
            if bbox.to_array() != a.bbox {
                return Err(Error::corrupt(format!(
                    "annotation {}: bbox {:?} does not bound its mask {:?}",
                    a.id,
                    a.bbox,
                    bbox.to_array()
                )));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

pub fn load_annotations(path: &Path) -> Result<AnnotationSet> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let set: AnnotationSet =
        serde_json::from_str(&text).map_err(|e| Error::corrupt(format!("{}: {e}", path.display())))?;
    set.validate()?;
    Ok(set)
}

/// Fraction of the images that keep their labels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub labeled_fraction: f64,
    pub seed: u64,
}

/// Deterministically partitions `ids` into (labeled, unlabeled), with
/// `floor(fraction * n)` labeled images and at least one.
pub fn split_labeled(ids: &[u64], spec: &SplitSpec) -> Result<(Vec<u64>, Vec<u64>)> {
    if !(spec.labeled_fraction > 0.0 && spec.labeled_fraction <= 1.0) {
        return Err(Error::config(format!(
            "labeled fraction must be in (0, 1], got {}",
            spec.labeled_fraction
        )));
    }
    if ids.is_empty() {
        return Err(Error::config("cannot split an empty dataset"));
    }
    let n_labeled = ((spec.labeled_fraction * ids.len() as f64 + 1e-9).floor() as usize).clamp(1, ids.len());
    let mut order: Vec<u64> = ids.to_vec();
    order.sort_unstable();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    order.shuffle(&mut rng);
    let mut labeled = order[..n_labeled].to_vec();
    let mut unlabeled = order[n_labeled..].to_vec();
    labeled.sort_unstable();
    unlabeled.sort_unstable();
    Ok((labeled, unlabeled))
}

/// Parameters of the synthetic tote-with-shapes generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ShapesConfig {
    pub height: usize,
    pub width: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Object extent range as a fraction of the shorter image side.
    pub min_size: f64,
    pub max_size: f64,
    /// Each object keeps at least this fraction of its own area visible.
    pub min_visible_fraction: f64,
    pub min_visible_pixels: usize,
}

impl Default for ShapesConfig {
    fn default() -> Self {
        Self {
            height: 480,
            width: 600,
            min_objects: 3,
            max_objects: 8,
            min_size: 0.18,
            max_size: 0.38,
            min_visible_fraction: 0.5,
            min_visible_pixels: 12,
        }
    }
}

impl ShapesConfig {
    pub fn with_resolution(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Shape {
    Ellipse { cx: f64, cy: f64, rx: f64, ry: f64, angle: f64 },
    Rect { cx: f64, cy: f64, hw: f64, hh: f64, angle: f64 },
    Polygon { cx: f64, cy: f64, radii: [f64; 7], n: usize, phase: f64 },
}

impl Shape {
    fn random(rng: &mut impl Rng, cfg: &ShapesConfig) -> Shape {
        let side = cfg.height.min(cfg.width) as f64;
        let size = rng.random_range(cfg.min_size..=cfg.max_size) * side;
        let aspect: f64 = rng.random_range(0.6..=1.6);
        let (sx, sy) = (size * aspect.sqrt() / 2.0, size / aspect.sqrt() / 2.0);
        let cx = rng.random_range(sx.min(cfg.width as f64 / 2.0)..=(cfg.width as f64 - sx).max(cfg.width as f64 / 2.0));
        let cy = rng.random_range(sy.min(cfg.height as f64 / 2.0)..=(cfg.height as f64 - sy).max(cfg.height as f64 / 2.0));
        let angle = rng.random_range(0.0..std::f64::consts::PI);
        match rng.random_range(0..3) {
            0 => Shape::Ellipse { cx, cy, rx: sx, ry: sy, angle },
            1 => Shape::Rect { cx, cy, hw: sx, hh: sy, angle },
            _ => {
                let n = rng.random_range(3..=7);
                let mut radii = [0.0; 7];
                let r = (sx + sy) / 2.0;
                for ri in radii.iter_mut().take(n) {
                    *ri = r * rng.random_range(0.75..=1.15);
                }
                Shape::Polygon { cx, cy, radii, n, phase: angle }
            }
        }
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Shape::Ellipse { cx, cy, rx, ry, angle } => {
                let (s, c) = angle.sin_cos();
                let (dx, dy) = (x - cx, y - cy);
                let (u, v) = (c * dx + s * dy, -s * dx + c * dy);
                (u / rx).powi(2) + (v / ry).powi(2) <= 1.0
            }
            Shape::Rect { cx, cy, hw, hh, angle } => {
                let (s, c) = angle.sin_cos();
                let (dx, dy) = (x - cx, y - cy);
                let (u, v) = (c * dx + s * dy, -s * dx + c * dy);
                u.abs() <= hw && v.abs() <= hh
            }
            Shape::Polygon { cx, cy, radii, n, phase } => {
                let verts: Vec<(f64, f64)> = (0..n)
                    .map(|k| {
                        let t = phase + k as f64 * std::f64::consts::TAU / n as f64;
                        (cx + radii[k] * t.cos(), cy + radii[k] * t.sin())
                    })
                    .collect();
                // even-odd rule
                let mut inside = false;
                let mut j = n - 1;
                for i in 0..n {
                    let (xi, yi) = verts[i];
                    let (xj, yj) = verts[j];
                    if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
                        inside = !inside;
                    }
                    j = i;
                }
                inside
            }
        }
    }

    fn rasterize(&self, h: usize, w: usize) -> BinaryMask {
        BinaryMask::from_fn(h, w, |u, v| self.contains(u as f64 + 0.5, v as f64 + 0.5))
            .expect("positive dimensions")
    }
}

fn tote_background(rng: &mut impl Rng, h: usize, w: usize) -> RgbImage {
    let base = [
        rng.random_range(0.30..0.45),
        rng.random_range(0.28..0.40),
        rng.random_range(0.22..0.34),
    ];
    let border = (h.min(w) / 16).max(1);
    let mut img = RgbImage::filled(h, w, base);
    for v in 0..h {
        for u in 0..w {
            let wall = u < border || v < border || u >= w - border || v >= h - border;
            let shade: f32 = if wall { -0.12 } else { 0.0 };
            let grain: f32 = rng.random_range(-0.04..0.04);
            let weave = if (u / 2 + v / 2) % 2 == 0 { 0.015 } else { -0.015 };
            img.set_pixel(u, v, [
                base[0] + shade + grain + weave,
                base[1] + shade + grain + weave,
                base[2] + shade + grain + weave,
            ]);
        }
    }
    img
}

fn paint_object(rng: &mut impl Rng, img: &mut RgbImage, mask: &BinaryMask) {
    let hue = rng.random_range(0.0..6.0f32);
    let sat = rng.random_range(0.55..0.95f32);
    let val = rng.random_range(0.6..0.98f32);
    let rgb = hsv_to_rgb(hue, sat, val);
    let (gx, gy) = (rng.random_range(-0.004..0.004f32), rng.random_range(-0.004..0.004f32));
    let stripes = rng.random_bool(0.4);
    let period = rng.random_range(3..7);
    for v in 0..img.height() {
        for u in 0..img.width() {
            if !mask.get(u, v) {
                continue;
            }
            let mut k = 1.0 + gx * u as f32 + gy * v as f32 + rng.random_range(-0.03..0.03f32);
            if stripes && (u + v) / period % 2 == 0 {
                k -= 0.12;
            }
            img.set_pixel(u, v, [rgb[0] * k, rgb[1] * k, rgb[2] * k]);
        }
    }
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> [f32; 3] {
    let c = v * s;
    let x = c * (1.0 - ((h % 2.0) - 1.0).abs());
    let m = v - c;
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    [r + m, g + m, b + m]
}

/// Renders one synthetic image with occlusion-consistent instance masks.
pub fn generate_shapes_image(image_id: u64, seed: u64, cfg: &ShapesConfig) -> Result<Sample> {
    if cfg.min_objects == 0 || cfg.min_objects > cfg.max_objects {
        return Err(Error::config("object count range is empty"));
    }
    let (h, w) = (cfg.height, cfg.width);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(image_id);
    let mut image = tote_background(&mut rng, h, w);
    let target = rng.random_range(cfg.min_objects..=cfg.max_objects);

    let mut amodal: Vec<BinaryMask> = Vec::new();
    let mut visible: Vec<BinaryMask> = Vec::new();
    let mut attempts = 0;
    while visible.len() < target {
        attempts += 1;
        if attempts > 400 {
            return Err(Error::config(format!(
                "could not place {target} shapes in a {h}x{w} image"
            )));
        }
        let shape = Shape::random(&mut rng, cfg);
        let mask = shape.rasterize(h, w);
        let area = mask.area();
        if area < cfg.min_visible_pixels.max(1) {
            continue;
        }
        let ok = visible.iter().zip(&amodal).all(|(vis, full)| {
            let lost = vis.intersection_area(&mask).unwrap_or(0);
            let left = vis.area() - lost;
            left >= cfg.min_visible_pixels
                && left as f64 >= cfg.min_visible_fraction * full.area() as f64
        });
        if !ok {
            continue;
        }
        for vis in &mut visible {
            vis.subtract(&mask)?;
        }
        paint_object(&mut rng, &mut image, &mask);
        amodal.push(mask.clone());
        visible.push(mask);
    }

    Ok(Sample {
        image_id,
        image,
        instances: visible
            .into_iter()
            .map(|mask| Instance {
                category_id: 1,
                mask,
            })
            .collect(),
    })
}

/// Generates `n` images with ids `first_id..first_id + n`.
pub fn generate_shapes(n: usize, first_id: u64, seed: u64, cfg: &ShapesConfig) -> Result<Dataset> {
    let samples = (0..n as u64)
        .map(|i| generate_shapes_image(first_id + i, seed, cfg))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        samples,
        categories: vec![Category::object()],
    })
}

/// Generates a dataset and writes it to `out` (`images/` + `annotations.json`).
pub fn gen_shapes_dataset(n_images: usize, seed: u64, cfg: &ShapesConfig, out: &Path) -> Result<Dataset> {
    let ds = generate_shapes(n_images, 1, seed, cfg)?;
    ds.save(out)?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ShapesConfig {
        ShapesConfig::with_resolution(48, 60)
    }

    #[test]
    fn generator_is_deterministic_and_bounded() {
        let a = generate_shapes(6, 1, 7, &small()).unwrap();
        let b = generate_shapes(6, 1, 7, &small()).unwrap();
        assert_eq!(a, b);
        assert_eq!(
            serde_json::to_string(&a.to_annotations()).unwrap(),
            serde_json::to_string(&b.to_annotations()).unwrap()
        );
        for s in &a.samples {
            assert!((3..=8).contains(&s.instances.len()));
            for inst in &s.instances {
                assert!(!inst.mask.is_empty());
            }
        }
        a.to_annotations().validate().unwrap();
    }

    #[test]
    fn visible_masks_are_disjoint() {
        let ds = generate_shapes(5, 1, 3, &small()).unwrap();
        for s in &ds.samples {
            for (i, a) in s.instances.iter().enumerate() {
                for b in &s.instances[i + 1..] {
                    assert_eq!(a.mask.intersection_area(&b.mask).unwrap(), 0);
                }
            }
        }
    }

    #[test]
    fn split_counts() {
        let ids: Vec<u64> = (0..30_992).collect();
        let (l, u) = split_labeled(&ids, &SplitSpec { labeled_fraction: 0.01, seed: 1 }).unwrap();
        assert_eq!(l.len(), 309);
        assert_eq!(l.len() + u.len(), ids.len());

        let ids: Vec<u64> = (0..10).collect();
        let (l, u) = split_labeled(&ids, &SplitSpec { labeled_fraction: 1.0, seed: 1 }).unwrap();
        assert_eq!(l, ids);
        assert!(u.is_empty());

        let (l, _) = split_labeled(&ids, &SplitSpec { labeled_fraction: 0.01, seed: 1 }).unwrap();
        assert_eq!(l.len(), 1);
        assert!(split_labeled(&ids, &SplitSpec { labeled_fraction: 0.0, seed: 1 }).is_err());
    }

    #[test]
    fn split_is_deterministic_disjoint_covering() {
        let ids: Vec<u64> = (100..200).collect();
        let spec = SplitSpec { labeled_fraction: 0.1, seed: 9 };
        let (l1, u1) = split_labeled(&ids, &spec).unwrap();
        let (l2, _) = split_labeled(&ids, &spec).unwrap();
        assert_eq!(l1, l2);
        let all: HashSet<u64> = l1.iter().chain(&u1).copied().collect();
        assert_eq!(all.len(), ids.len());
        assert_eq!(l1.len() + u1.len(), ids.len());
    }

    #[test]
    fn validation_errors() {
        let ds = generate_shapes(2, 1, 1, &small()).unwrap();
        let good = ds.to_annotations();

        let mut dangling = good.clone();
        dangling.annotations[0].image_id = 999;
        assert!(matches!(dangling.validate(), Err(Error::CorruptAnnotation(m)) if m.contains("unknown image")));

        let mut dup = good.clone();
        dup.annotations[1].id = dup.annotations[0].id;
        assert!(matches!(dup.validate(), Err(Error::CorruptAnnotation(m)) if m.contains("duplicate")));

        let mut bad_rle = good.clone();
        bad_rle.annotations[0].rle.runs.push(5);
        assert!(matches!(bad_rle.validate(), Err(Error::CorruptAnnotation(_))));

        let empty = AnnotationSet {
            images: good.images.clone(),
            annotations: vec![],
            categories: good.categories.clone(),
        };
        empty.validate().unwrap();
    }
}
