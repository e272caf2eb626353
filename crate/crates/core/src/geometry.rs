//! Masks, boxes and the overlap metrics shared by every other module.
//!
//! Two box conventions coexist:
//!
//! * [`PixelBox`] holds inclusive pixel indices, `[min, max]` over the set
//!   pixels of a mask. This is what Mask-to-Box produces.
//! * [`BBox`] holds continuous corner coordinates. Area is
//!   `(x_max - x_min) * (y_max - y_min)`. A pixel box converts to a continuous
//!   box by extending its max corner by one pixel, so overlap between
//!   mask-derived boxes counts `max - min + 1` pixels per axis.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A strictly binary H×W mask stored row-major.
#[derive(Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    values: Vec<u8>,
}

impl std::fmt::Debug for BinaryMask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BinaryMask")
            .field("height", &self.height)
            .field("width", &self.width)
            .field("area", &self.area())
            .finish()
    }
}

impl BinaryMask {
    pub fn zeros(height: usize, width: usize) -> Result<Self> {
        check_dims(height, width)?;
        Ok(Self {
            height,
            width,
            values: vec![0; height * width],
        })
    }

    pub fn ones(height: usize, width: usize) -> Result<Self> {
        check_dims(height, width)?;
        Ok(Self {
            height,
            width,
            values: vec![1; height * width],
        })
    }

    /// Builds a mask from row-major values that must be exactly 0 or 1.
    pub fn from_vec(height: usize, width: usize, values: Vec<u8>) -> Result<Self> {
        check_dims(height, width)?;
        if values.len() != height * width {
            return Err(Error::invalid(format!(
                "mask buffer has {} values, expected {}x{}",
                values.len(),
                height,
                width
            )));
        }
        if values.iter().any(|&v| v > 1) {
            return Err(Error::invalid("mask values must be 0 or 1"));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Result<Self> {
        check_dims(height, width)?;
        let mut values = Vec::with_capacity(height * width);
        for v in 0..height {
            for u in 0..width {
                values.push(f(u, v) as u8);
            }
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    /// Value at column `u`, row `v`.
    pub fn get(&self, u: usize, v: usize) -> bool {
        self.values[v * self.width + u] != 0
    }

    pub fn set(&mut self, u: usize, v: usize, on: bool) {
        self.values[v * self.width + u] = on as u8;
    }

    pub fn area(&self) -> usize {
        self.values.iter().map(|&v| v as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.values.iter().all(|&v| v == 0)
    }

    pub fn same_dims(&self, other: &BinaryMask) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn intersection_area(&self, other: &BinaryMask) -> Result<usize> {
        self.check_same(other)?;
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .filter(|(a, b)| **a & **b != 0)
            .count())
    }

    /// Clears every pixel that is set in `other` (occlusion by `other`).
    pub fn subtract(&mut self, other: &BinaryMask) -> Result<()> {
        self.check_same(other)?;
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a &= 1 - *b;
        }
        Ok(())
    }

    /// True when every set pixel of `self` is also set in `other`.
    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.same_dims(other)
            && self
                .values
                .iter()
                .zip(&other.values)
                .all(|(a, b)| *a <= *b)
    }

    fn check_same(&self, other: &BinaryMask) -> Result<()> {
        if self.same_dims(other) {
            Ok(())
        } else {
            Err(Error::invalid(format!(
                "mask dimensions differ: {}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            )))
        }
    }
}

/// Per-pixel foreground probabilities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftMask {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl SoftMask {
    pub fn from_vec(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        check_dims(height, width)?;
        if values.len() != height * width {
            return Err(Error::invalid(format!(
                "soft mask buffer has {} values, expected {}x{}",
                values.len(),
                height,
                width
            )));
        }
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("soft mask values must lie in [0, 1]"));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::from_vec(height, width, vec![value; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Inclusive pixel-index box, as produced by [`mask_to_box`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelBox {
    pub x_min: usize,
    pub y_min: usize,
    pub x_max: usize,
    pub y_max: usize,
}

impl PixelBox {
    pub fn to_array(self) -> [usize; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }

    pub fn width(&self) -> usize {
        self.x_max - self.x_min + 1
    }

    pub fn height(&self) -> usize {
        self.y_max - self.y_min + 1
    }

    /// Continuous box covering the same pixels.
    pub fn extent(&self) -> BBox {
        BBox {
            x_min: self.x_min as f64,
            y_min: self.y_min as f64,
            x_max: (self.x_max + 1) as f64,
            y_max: (self.y_max + 1) as f64,
        }
    }

    /// Continuous box scaled into `[0, 1]^4` for an image of the given size.
    pub fn normalized(&self, height: usize, width: usize) -> BBox {
        let e = self.extent();
        BBox {
            x_min: e.x_min / width as f64,
            y_min: e.y_min / height as f64,
            x_max: e.x_max / width as f64,
            y_max: e.y_max / height as f64,
        }
    }
}

/// Continuous corner box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        let b = Self {
            x_min,
            y_min,
            x_max,
            y_max,
        };
        if !b.to_array().iter().all(|v| v.is_finite()) || x_min > x_max || y_min > y_max {
            return Err(Error::invalid(format!("invalid box {:?}", b.to_array())));
        }
        Ok(b)
    }

    pub fn from_array(a: [f64; 4]) -> Result<Self> {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }

    pub fn area(&self) -> f64 {
        (self.x_max - self.x_min).max(0.0) * (self.y_max - self.y_min).max(0.0)
    }

    fn intersection(&self, other: &BBox) -> f64 {
        let w = (self.x_max.min(other.x_max) - self.x_min.max(other.x_min)).max(0.0);
        let h = (self.y_max.min(other.y_max) - self.y_min.max(other.y_min)).max(0.0);
        w * h
    }

    fn hull(&self, other: &BBox) -> BBox {
        BBox {
            x_min: self.x_min.min(other.x_min),
            y_min: self.y_min.min(other.y_min),
            x_max: self.x_max.max(other.x_max),
            y_max: self.y_max.max(other.y_max),
        }
    }
}

fn check_dims(height: usize, width: usize) -> Result<()> {
    if height == 0 || width == 0 {
        Err(Error::invalid(format!(
            "mask dimensions must be positive, got {height}x{width}"
        )))
    } else {
        Ok(())
    }
}

/// Intersection over union of two masks. Two empty masks give 0.
pub fn mask_iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    a.check_same(b)?;
    let mut inter = 0usize;
    let mut union = 0usize;
    for (x, y) in a.values.iter().zip(&b.values) {
        inter += (x & y) as usize;
        union += (x | y) as usize;
    }
    if union == 0 {
        Ok(0.0)
    } else {
        Ok(inter as f64 / union as f64)
    }
}

/// Box IoU on continuous extents. Two zero-area boxes give 0.
pub fn box_iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Generalized IoU: `IoU - |hull \ union| / |hull|`.
///
/// A zero-area hull (both boxes degenerate at one point or along one line)
/// yields 0.
pub fn box_giou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection(b);
    let union = a.area() + b.area() - inter;
    let hull = a.hull(b).area();
    if hull <= 0.0 {
        return 0.0;
    }
    let iou = if union > 0.0 { inter / union } else { 0.0 };
    iou - (hull - union) / hull
}

/// Tight inclusive bound of the set pixels.
pub fn mask_to_box(m: &BinaryMask) -> Result<PixelBox> {
    let mut x_min = usize::MAX;
    let mut y_min = usize::MAX;
    let mut x_max = 0;
    let mut y_max = 0;
    for (v, row) in m.values.chunks_exact(m.width).enumerate() {
        let Some(first) = row.iter().position(|&p| p != 0) else {
            continue;
        };
        let last = row.iter().rposition(|&p| p != 0).unwrap_or(first);
        x_min = x_min.min(first);
        x_max = x_max.max(last);
        y_min = y_min.min(v);
        y_max = v;
    }
    if x_min == usize::MAX {
        return Err(Error::EmptyMask);
    }
    Ok(PixelBox {
        x_min,
        y_min,
        x_max,
        y_max,
    })
}

/// Thresholds a soft mask: a pixel is set iff its value is strictly above `gamma`.
pub fn binarize(s: &SoftMask, gamma: f64) -> BinaryMask {
    BinaryMask {
        height: s.height,
        width: s.width,
        values: s.values.iter().map(|&p| (p > gamma) as u8).collect(),
    }
}

/// Row-major run-length encoding. The first run counts zeros (and may be 0).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RleMask {
    pub height: usize,
    pub width: usize,
    pub runs: Vec<u64>,
}

pub fn rle_encode(m: &BinaryMask) -> RleMask {
    let mut runs = Vec::new();
    let mut current = 0u8;
    let mut count = 0u64;
    for &p in &m.values {
        if p != current {
            runs.push(count);
            current = p;
            count = 0;
        }
        count += 1;
    }
    runs.push(count);
    RleMask {
        height: m.height,
        width: m.width,
        runs,
    }
}

pub fn rle_decode(r: &RleMask) -> Result<BinaryMask> {
    if r.height == 0 || r.width == 0 {
        return Err(Error::corrupt(format!(
            "RLE dimensions must be positive, got {}x{}",
            r.height, r.width
        )));
    }
    let total = (r.height * r.width) as u64;
    let sum = r
        .runs
        .iter()
        .try_fold(0u64, |acc, &n| acc.checked_add(n))
        .ok_or_else(|| Error::corrupt("RLE run lengths overflow"))?;
    if sum != total {
        return Err(Error::corrupt(format!(
            "RLE runs sum to {sum}, expected {total}"
        )));
    }
    let mut values = Vec::with_capacity(total as usize);
    for (i, &n) in r.runs.iter().enumerate() {
        let bit = (i % 2) as u8;
        values.extend(std::iter::repeat_n(bit, n as usize));
    }
    Ok(BinaryMask {
        height: r.height,
        width: r.width,
        values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mask_1x3(bits: [u8; 3]) -> BinaryMask {
        BinaryMask::from_vec(1, 3, bits.to_vec()).unwrap()
    }

    #[test]
    fn iou_identity_disjoint_and_partial() {
        let a = mask_1x3([1, 1, 0]);
        let b = mask_1x3([0, 1, 1]);
        let c = mask_1x3([0, 0, 1]);
        assert_eq!(mask_iou(&a, &a).unwrap(), 1.0);
        assert_eq!(mask_iou(&a, &c).unwrap(), 0.0);
        // one shared pixel, three in the union
        assert!((mask_iou(&a, &b).unwrap() - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn iou_both_empty_is_zero() {
        let z = BinaryMask::zeros(4, 4).unwrap();
        assert_eq!(mask_iou(&z, &z).unwrap(), 0.0);
    }

    #[test]
    fn iou_rejects_dimension_mismatch() {
        let a = BinaryMask::zeros(2, 3).unwrap();
        let b = BinaryMask::zeros(3, 2).unwrap();
        assert!(matches!(mask_iou(&a, &b), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn mask_construction_validates() {
        assert!(BinaryMask::zeros(0, 3).is_err());
        assert!(BinaryMask::from_vec(1, 2, vec![0, 2]).is_err());
        assert!(BinaryMask::from_vec(1, 2, vec![0]).is_err());
        assert!(SoftMask::from_vec(1, 1, vec![1.5]).is_err());
    }

    #[test]
    fn giou_cases() {
        let a = BBox::new(0.0, 0.0, 1.0, 1.0).unwrap();
        let b = BBox::new(2.0, 0.0, 3.0, 1.0).unwrap();
        assert_eq!(box_giou(&a, &a), 1.0);
        // hull 3, union 2
        assert!((box_giou(&a, &b) + 1.0 / 3.0).abs() < 1e-15);
        let outer = BBox::new(0.0, 0.0, 4.0, 4.0).unwrap();
        let inner = BBox::new(1.0, 1.0, 3.0, 2.0).unwrap();
        assert_eq!(box_giou(&outer, &inner), box_iou(&outer, &inner));
        let p = BBox::new(1.0, 1.0, 1.0, 1.0).unwrap();
        assert_eq!(box_giou(&p, &p), 0.0);
    }

    #[test]
    fn box_rejects_inverted_corners() {
        assert!(BBox::new(2.0, 0.0, 1.0, 1.0).is_err());
        assert!(BBox::new(0.0, 0.0, f64::NAN, 1.0).is_err());
    }

    #[test]
    fn mask_to_box_cases() {
        let full = BinaryMask::ones(7, 5).unwrap();
        assert_eq!(mask_to_box(&full).unwrap().to_array(), [0, 0, 4, 6]);

        let mut point = BinaryMask::zeros(8, 8).unwrap();
        point.set(3, 5, true);
        assert_eq!(mask_to_box(&point).unwrap().to_array(), [3, 5, 3, 5]);

        let mut two = BinaryMask::zeros(4, 6).unwrap();
        two.set(1, 1, true);
        two.set(4, 2, true);
        assert_eq!(mask_to_box(&two).unwrap().to_array(), [1, 1, 4, 2]);

        let empty = BinaryMask::zeros(3, 3).unwrap();
        assert!(matches!(mask_to_box(&empty), Err(Error::EmptyMask)));
    }

    #[test]
    fn pixel_box_extent_counts_pixels() {
        let b = PixelBox {
            x_min: 2,
            y_min: 1,
            x_max: 2,
            y_max: 3,
        };
        assert_eq!(b.extent().area(), 3.0);
        assert_eq!(b.normalized(4, 4).to_array(), [0.5, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn binarize_is_strict() {
        let s = SoftMask::filled(2, 2, 0.9).unwrap();
        assert_eq!(binarize(&s, 0.5).area(), 4);
        let s = SoftMask::filled(2, 2, 0.5).unwrap();
        assert_eq!(binarize(&s, 0.5).area(), 0);
    }

    #[test]
    fn rle_edge_cases() {
        let z = BinaryMask::zeros(3, 4).unwrap();
        assert_eq!(rle_encode(&z).runs, vec![12]);
        let o = BinaryMask::ones(3, 4).unwrap();
        assert_eq!(rle_encode(&o).runs, vec![0, 12]);
        let bad = RleMask {
            height: 2,
            width: 2,
            runs: vec![1, 2],
        };
        assert!(matches!(rle_decode(&bad), Err(Error::CorruptAnnotation(_))));
    }

    fn arb_mask() -> impl Strategy<Value = BinaryMask> {
        (1usize..12, 1usize..12).prop_flat_map(|(h, w)| {
            proptest::collection::vec(0u8..2, h * w)
                .prop_map(move |v| BinaryMask::from_vec(h, w, v).unwrap())
        })
    }

    fn arb_soft() -> impl Strategy<Value = SoftMask> {
        (1usize..10, 1usize..10).prop_flat_map(|(h, w)| {
            proptest::collection::vec(0.0f64..=1.0, h * w)
                .prop_map(move |v| SoftMask::from_vec(h, w, v).unwrap())
        })
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (0.0f64..10.0, 0.0f64..10.0, 0.0f64..10.0, 0.0f64..10.0)
            .prop_map(|(x, y, w, h)| BBox::new(x, y, x + w, y + h).unwrap())
    }

    proptest! {
        #[test]
        fn rle_round_trip(m in arb_mask()) {
            let r = rle_encode(&m);
            prop_assert_eq!(r.runs.iter().sum::<u64>(), (m.height() * m.width()) as u64);
            prop_assert_eq!(rle_decode(&r).unwrap(), m);
        }

        #[test]
        fn binarize_matches_elementwise_and_is_antitone(s in arb_soft(), g1 in 0.0f64..=1.0, g2 in 0.0f64..=1.0) {
            let (lo, hi) = if g1 <= g2 { (g1, g2) } else { (g2, g1) };
            let b = binarize(&s, lo);
            for (p, q) in s.values().iter().zip(b.values()) {
                prop_assert_eq!(*q == 1, *p > lo);
            }
            prop_assert!(binarize(&s, hi).is_subset_of(&b));
        }

        #[test]
        fn giou_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
            let g = box_giou(&a, &b);
            prop_assert_eq!(g, box_giou(&b, &a));
            prop_assert!(g > -1.0 - 1e-12 && g <= 1.0 + 1e-12);
        }

        #[test]
        fn iou_unit_interval(a in arb_mask()) {
            let b = BinaryMask::from_fn(a.height(), a.width(), |u, v| (u + v) % 2 == 0).unwrap();
            let iou = mask_iou(&a, &b).unwrap();
            prop_assert!((0.0..=1.0).contains(&iou));
            let self_iou = mask_iou(&a, &a).unwrap();
            prop_assert_eq!(self_iou == 1.0, !a.is_empty());
            if iou == 1.0 { prop_assert_eq!(&a, &b); }
        }
    }
}
