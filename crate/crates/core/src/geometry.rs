//! Pixel-space and grid-space rectangles.
//!
//! Pixel boxes use continuous coordinates with the origin at the top-left
//! corner: a pixel at column `c` covers `[c, c + 1)`, so a tight box around
//! ink columns `3..=7` is `x1 = 3, x2 = 8` and its area equals the number of
//! covered pixels.
//!
//! Quantization maps a box onto an absolute grid of `step_px` sized cells.
//! The near corner goes to the cell containing it (`floor`), the far corner
//! to the cell containing the last covered point (`ceil - 1`). Dequantization
//! returns the smallest pixel box covering the cell range, so
//! `dequantize(quantize(b)) ⊇ b` and `quantize(dequantize(q)) == q`.

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::Error;

/// Axis-aligned pixel-space rectangle `(x1, y1, x2, y2)`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    /// Builds a box, rejecting inverted or negative coordinates.
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self, Error> {
        let b = BBox { x1, y1, x2, y2 };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<(), Error> {
        let finite = [self.x1, self.y1, self.x2, self.y2]
            .iter()
            .all(|v| v.is_finite());
        if !finite || self.x1 < 0.0 || self.y1 < 0.0 || self.x1 > self.x2 || self.y1 > self.y2 {
            return Err(Error::InvalidBox(*self));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        (self.x2 - self.x1).max(0.0)
    }

    pub fn height(&self) -> f64 {
        (self.y2 - self.y1).max(0.0)
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) * 0.5, (self.y1 + self.y2) * 0.5)
    }

    /// Closed-interval point test.
    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        x >= self.x1 && x <= self.x2 && y >= self.y1 && y <= self.y2
    }

    pub fn contains(&self, other: &BBox) -> bool {
        other.x1 >= self.x1 && other.y1 >= self.y1 && other.x2 <= self.x2 && other.y2 <= self.y2
    }

    pub fn intersection(&self, other: &BBox) -> Option<BBox> {
        let x1 = self.x1.max(other.x1);
        let y1 = self.y1.max(other.y1);
        let x2 = self.x2.min(other.x2);
        let y2 = self.y2.min(other.y2);
        (x1 <= x2 && y1 <= y2).then_some(BBox { x1, y1, x2, y2 })
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        self.intersection(other).map_or(0.0, |b| b.area())
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    /// Rounds every coordinate to the nearest integer.
    pub fn to_int_array(&self) -> [i64; 4] {
        [self.x1, self.y1, self.x2, self.y2].map(|v| v.round() as i64)
    }
}

impl From<[f64; 4]> for BBox {
    fn from(a: [f64; 4]) -> Self {
        BBox { x1: a[0], y1: a[1], x2: a[2], y2: a[3] }
    }
}

impl From<[u32; 4]> for BBox {
    fn from(a: [u32; 4]) -> Self {
        BBox::from(a.map(f64::from))
    }
}

// Boxes travel as `[x1, y1, x2, y2]`; integral coordinates are written as
// integers so manifests stay readable.
impl Serialize for BBox {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let integral = self.to_array().iter().all(|v| v.fract() == 0.0 && v.abs() < 1e15);
        if integral {
            self.to_int_array().serialize(s)
        } else {
            self.to_array().serialize(s)
        }
    }
}

impl<'de> Deserialize<'de> for BBox {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let a = <[f64; 4]>::deserialize(d)?;
        let b = BBox::from(a);
        b.validate().map_err(D::Error::custom)?;
        Ok(b)
    }
}

/// Absolute quantization lattice with a fixed pixel step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct QuantGrid {
    pub step_px: u32,
    pub n_x: u32,
    pub n_y: u32,
}

impl QuantGrid {
    /// Smallest grid with `step_px` cells that covers a `max_width x max_height` image.
    pub fn new(step_px: u32, max_width: u32, max_height: u32) -> Result<Self, Error> {
        if step_px == 0 || max_width == 0 || max_height == 0 {
            return Err(Error::InvalidGrid { step_px, max_width, max_height });
        }
        Ok(QuantGrid {
            step_px,
            n_x: max_width.div_ceil(step_px),
            n_y: max_height.div_ceil(step_px),
        })
    }

    /// Pixel extent covered by the grid.
    pub fn extent(&self) -> (u32, u32) {
        (self.n_x * self.step_px, self.n_y * self.step_px)
    }

    pub fn fits(&self, b: &BBox) -> bool {
        let (w, h) = self.extent();
        b.x2 <= f64::from(w) && b.y2 <= f64::from(h)
    }

    /// Larger of the two per-axis cell counts.
    pub fn max_cells(&self) -> u32 {
        self.n_x.max(self.n_y)
    }
}

/// Grid-space rectangle; indices are inclusive cell coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(into = "[u32; 4]", from = "[u32; 4]")]
pub struct QuantBox {
    pub ix1: u32,
    pub iy1: u32,
    pub ix2: u32,
    pub iy2: u32,
}

impl QuantBox {
    pub fn is_valid_for(&self, grid: &QuantGrid) -> bool {
        self.ix1 <= self.ix2 && self.iy1 <= self.iy2 && self.ix2 < grid.n_x && self.iy2 < grid.n_y
    }

    pub fn to_array(&self) -> [u32; 4] {
        [self.ix1, self.iy1, self.ix2, self.iy2]
    }
}

impl From<QuantBox> for [u32; 4] {
    fn from(q: QuantBox) -> Self {
        q.to_array()
    }
}

impl From<[u32; 4]> for QuantBox {
    fn from(a: [u32; 4]) -> Self {
        QuantBox { ix1: a[0], iy1: a[1], ix2: a[2], iy2: a[3] }
    }
}

fn near_cell(v: f64, step: f64, n: u32) -> u32 {
    let c = (v / step).floor();
    c.clamp(0.0, f64::from(n - 1)) as u32
}

fn far_cell(v: f64, step: f64, n: u32, near: u32) -> u32 {
    let c = (v / step).ceil() - 1.0;
    (c.clamp(0.0, f64::from(n - 1)) as u32).max(near)
}

/// Maps a pixel box to grid cells, clamping into the grid.
pub fn quantize(b: &BBox, grid: &QuantGrid) -> QuantBox {
    let s = f64::from(grid.step_px);
    let ix1 = near_cell(b.x1, s, grid.n_x);
    let iy1 = near_cell(b.y1, s, grid.n_y);
    QuantBox {
        ix1,
        iy1,
        ix2: far_cell(b.x2, s, grid.n_x, ix1),
        iy2: far_cell(b.y2, s, grid.n_y, iy1),
    }
}

/// Smallest pixel box covering every cell of `q`.
pub fn dequantize(q: &QuantBox, grid: &QuantGrid) -> BBox {
    let s = f64::from(grid.step_px);
    BBox {
        x1: f64::from(q.ix1) * s,
        y1: f64::from(q.iy1) * s,
        x2: f64::from(q.ix2 + 1) * s,
        y2: f64::from(q.iy2 + 1) * s,
    }
}

/// Intersection over union; 0 when disjoint or when the union is empty.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Moves every side outward by `pad_px`, clamped to `[0, width] x [0, height]`.
pub fn expand(b: &BBox, pad_px: f64, width: f64, height: f64) -> BBox {
    let pad = pad_px.max(0.0);
    BBox {
        x1: (b.x1 - pad).max(0.0),
        y1: (b.y1 - pad).max(0.0),
        x2: (b.x2 + pad).min(width),
        y2: (b.y2 + pad).min(height),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid10() -> QuantGrid {
        QuantGrid::new(10, 640, 640).unwrap()
    }

    fn b(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn quantize_examples() {
        let g = grid10();
        // Far corner strictly inside cell 5/3.
        assert_eq!(quantize(&b(10., 20., 55., 35.), &g).to_array(), [1, 2, 5, 3]);
        // A far edge on a cell boundary belongs to the cell before it.
        assert_eq!(quantize(&b(10., 20., 50., 30.), &g).to_array(), [1, 2, 4, 2]);
        assert_eq!(quantize(&b(0., 0., 0., 0.), &g).to_array(), [0, 0, 0, 0]);
        assert_eq!(quantize(&b(123., 7., 126., 9.), &g).to_array(), [12, 0, 12, 0]);
    }

    #[test]
    fn quantize_clamps_outside_grid() {
        let g = QuantGrid::new(10, 100, 50).unwrap();
        let q = quantize(&b(95., 45., 400., 400.), &g);
        assert_eq!(q.to_array(), [9, 4, 9, 4]);
        assert!(q.is_valid_for(&g));
    }

    #[test]
    fn dequantize_examples() {
        let g = grid10();
        let q = QuantBox::from([1, 2, 5, 3]);
        assert_eq!(dequantize(&q, &g), b(10., 20., 60., 40.));
        assert_eq!(dequantize(&QuantBox::default(), &g), b(0., 0., 10., 10.));
    }

    #[test]
    fn iou_examples() {
        let a = b(0., 0., 10., 10.);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &b(20., 20., 30., 30.)), 0.0);
        assert!((iou(&a, &b(5., 0., 15., 10.)) - 1.0 / 3.0).abs() < 1e-12);
        let z = b(3., 3., 3., 3.);
        assert_eq!(iou(&z, &z), 0.0);
    }

    #[test]
    fn iou_matches_rasterized_mask() {
        // Pixel-count oracle for the (0,0,10,10) vs (5,0,15,10) case.
        let mut inter = 0;
        let mut union = 0;
        for y in 0..20 {
            for x in 0..20 {
                let in_a = x < 10 && y < 10;
                let in_b = (5..15).contains(&x) && y < 10;
                inter += (in_a && in_b) as i32;
                union += (in_a || in_b) as i32;
            }
        }
        let oracle = f64::from(inter) / f64::from(union);
        assert!((iou(&b(0., 0., 10., 10.), &b(5., 0., 15., 10.)) - oracle).abs() < 1e-12);
    }

    #[test]
    fn expand_examples() {
        assert_eq!(expand(&b(10., 10., 20., 20.), 1.0, 100., 100.), b(9., 9., 21., 21.));
        assert_eq!(expand(&b(0., 0., 20., 20.), 2.0, 100., 100.), b(0., 0., 22., 22.));
        let x = b(3., 4., 50., 60.);
        assert_eq!(expand(&x, 0.0, 100., 100.), x);
        assert_eq!(expand(&b(90., 90., 99., 100.), 2.0, 100., 100.), b(88., 88., 100., 100.));
    }

    #[test]
    fn invalid_boxes_rejected() {
        assert!(BBox::new(5., 0., 4., 1.).is_err());
        assert!(BBox::new(-1., 0., 4., 1.).is_err());
        assert!(BBox::new(0., 0., f64::NAN, 1.).is_err());
        assert!(QuantGrid::new(0, 10, 10).is_err());
    }

    #[test]
    fn serde_as_arrays() {
        let j = serde_json::to_string(&b(1., 2., 3., 4.)).unwrap();
        assert_eq!(j, "[1,2,3,4]");
        let back: BBox = serde_json::from_str("[1.5,2,3,4]").unwrap();
        assert_eq!(back, b(1.5, 2., 3., 4.));
        assert!(serde_json::from_str::<BBox>("[4,2,3,4]").is_err());
        let q: QuantBox = serde_json::from_str("[1,2,5,3]").unwrap();
        assert_eq!(serde_json::to_string(&q).unwrap(), "[1,2,5,3]");
    }

    fn arb_box(extent: f64) -> impl Strategy<Value = BBox> {
        (0.0..extent, 0.0..extent, 0.0..extent, 0.0..extent).prop_map(|(a, b2, c, d)| BBox {
            x1: a.min(c),
            y1: b2.min(d),
            x2: a.max(c),
            y2: b2.max(d),
        })
    }

    proptest! {
        #[test]
        fn cover_contains_and_is_tight(bx in arb_box(640.0), step in 1u32..=12) {
            let g = QuantGrid::new(step, 640, 640).unwrap();
            let q = quantize(&bx, &g);
            prop_assert!(q.is_valid_for(&g));
            let d = dequantize(&q, &g);
            prop_assert!(d.contains(&bx));
            let s = f64::from(step);
            prop_assert!(bx.x1 - d.x1 < s && bx.y1 - d.y1 < s);
            prop_assert!(d.x2 - bx.x2 <= s && d.y2 - bx.y2 <= s);
            prop_assert_eq!(quantize(&d, &g), q);
        }

        #[test]
        fn iou_symmetric_and_bounded(a in arb_box(100.0), c in arb_box(100.0)) {
            let v = iou(&a, &c);
            prop_assert!((0.0..=1.0).contains(&v));
            prop_assert_eq!(v, iou(&c, &a));
        }

        #[test]
        fn padding_never_shrinks_intersection(a in arb_box(100.0), c in arb_box(100.0), pad in 0.0f64..5.0) {
            let before = a.intersection_area(&c);
            let after = expand(&a, pad, 100.0, 100.0).intersection_area(&expand(&c, pad, 100.0, 100.0));
            prop_assert!(after + 1e-9 >= before);
        }
    }
}
