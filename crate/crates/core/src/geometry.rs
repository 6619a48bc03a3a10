//! Axis-aligned boxes in normalized `[0, 1]` image coordinates.
//!
//! Boxes are parameterized for regression as four nonnegative edge offsets
//! `(l, r, t, b)` from a reference point, with `y` growing downward.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Tape, TensorError, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("invalid box ({0}, {1}, {2}, {3})")]
    InvalidBox(f64, f64, f64, f64),
    #[error("negative offset in {0:?}")]
    NegativeOffset([f64; 4]),
    #[error("non-positive variance in {0:?}")]
    NonPositiveVariance([f64; 4]),
    #[error("reference point ({0}, {1}) lies outside the box")]
    ReferenceOutside(f64, f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self, GeometryError> {
        let finite = [x1, y1, x2, y2].iter().all(|v| v.is_finite());
        if !finite || x1 > x2 || y1 > y2 {
            return Err(GeometryError::InvalidBox(x1, y1, x2, y2));
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    /// Builds a box from possibly unordered corners, sorting each axis.
    pub fn from_corners(a: Point, b: Point) -> Self {
        Self {
            x1: a.x.min(b.x),
            y1: a.y.min(b.y),
            x2: a.x.max(b.x),
            y2: a.y.max(b.y),
        }
    }

    pub fn from_center(center: Point, w: f64, h: f64) -> Self {
        Self {
            x1: center.x - w / 2.0,
            y1: center.y - h / 2.0,
            x2: center.x + w / 2.0,
            y2: center.y + h / 2.0,
        }
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> Point {
        Point::new((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn contains(&self, p: Point) -> bool {
        p.x >= self.x1 && p.x <= self.x2 && p.y >= self.y1 && p.y <= self.y2
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let h = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        w * h
    }

    /// True when the closed boxes share at least one point.
    pub fn touches(&self, other: &BBox) -> bool {
        self.x1 <= other.x2 && other.x1 <= self.x2 && self.y1 <= other.y2 && other.y1 <= self.y2
    }

    pub fn hull(&self, other: &BBox) -> BBox {
        BBox {
            x1: self.x1.min(other.x1),
            y1: self.y1.min(other.y1),
            x2: self.x2.max(other.x2),
            y2: self.y2.max(other.y2),
        }
    }

    pub fn clamp_unit(self) -> BBox {
        let c = |v: f64| v.clamp(0.0, 1.0);
        BBox {
            x1: c(self.x1),
            y1: c(self.y1),
            x2: c(self.x2),
            y2: c(self.y2),
        }
    }

    pub fn l1_distance(&self, other: &BBox) -> f64 {
        self.to_array()
            .iter()
            .zip(other.to_array())
            .map(|(a, b)| (a - b).abs())
            .sum()
    }
}

/// Distances from a reference point to the left, right, top and bottom edges.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxOffsets {
    pub l: f64,
    pub r: f64,
    pub t: f64,
    pub b: f64,
}

impl BoxOffsets {
    pub fn new(l: f64, r: f64, t: f64, b: f64) -> Result<Self, GeometryError> {
        let v = [l, r, t, b];
        if v.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
            return Err(GeometryError::NegativeOffset(v));
        }
        Ok(Self { l, r, t, b })
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.l, self.r, self.t, self.b]
    }
}

/// Independent Gaussians over the four offsets.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianBox {
    pub mu: [f64; 4],
    pub var: [f64; 4],
}

impl GaussianBox {
    pub fn new(mu: [f64; 4], var: [f64; 4]) -> Result<Self, GeometryError> {
        if var.iter().any(|v| !(*v > 0.0)) {
            return Err(GeometryError::NonPositiveVariance(var));
        }
        Ok(Self { mu, var })
    }
}

/// Corner box from a reference point and edge offsets, clamped to the unit square.
pub fn offsets_to_box(reference: Point, o: BoxOffsets) -> BBox {
    BBox {
        x1: reference.x - o.l,
        y1: reference.y - o.t,
        x2: reference.x + o.r,
        y2: reference.y + o.b,
    }
    .clamp_unit()
}

pub fn box_to_offsets(reference: Point, b: &BBox) -> Result<BoxOffsets, GeometryError> {
    if !b.contains(reference) {
        return Err(GeometryError::ReferenceOutside(reference.x, reference.y));
    }
    BoxOffsets::new(
        reference.x - b.x1,
        b.x2 - reference.x,
        reference.y - b.y1,
        b.y2 - reference.y,
    )
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Generalized IoU: `IoU − |hull ∖ union| / |hull|`.
pub fn giou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    let hull = a.hull(b).area();
    let iou = if union <= 0.0 { 0.0 } else { inter / union };
    if hull <= 0.0 {
        iou
    } else {
        iou - (hull - union) / hull
    }
}

/// Row-wise differentiable IoU and GIoU of two `[n, 4]` corner-box arrays.
///
/// Returns `(iou, giou)`, both of shape `[n]`. Boxes are assumed well ordered
/// (`x1 ≤ x2`, `y1 ≤ y2`).
pub fn iou_giou_rows(t: &mut Tape, a: Var, b: Var) -> Result<(Var, Var), TensorError> {
    let n = t.shape(a)[0];
    let col = |t: &mut Tape, v: Var, k: usize| -> Result<Var, TensorError> {
        let c = t.slice(v, 1, k, k + 1)?;
        t.reshape(c, &[n])
    };
    let [ax1, ay1, ax2, ay2] = [0, 1, 2, 3].map(|k| col(t, a, k));
    let [bx1, by1, bx2, by2] = [0, 1, 2, 3].map(|k| col(t, b, k));
    let (ax1, ay1, ax2, ay2) = (ax1?, ay1?, ax2?, ay2?);
    let (bx1, by1, bx2, by2) = (bx1?, by1?, bx2?, by2?);

    let area = |t: &mut Tape, x1, y1, x2, y2| -> Result<Var, TensorError> {
        let w = t.sub(x2, x1)?;
        let h = t.sub(y2, y1)?;
        t.mul(w, h)
    };
    let area_a = area(t, ax1, ay1, ax2, ay2)?;
    let area_b = area(t, bx1, by1, bx2, by2)?;

    let ix1 = t.maximum(ax1, bx1)?;
    let iy1 = t.maximum(ay1, by1)?;
    let ix2 = t.minimum(ax2, bx2)?;
    let iy2 = t.minimum(ay2, by2)?;
    let iw = t.sub(ix2, ix1)?;
    let iw = t.relu(iw);
    let ih = t.sub(iy2, iy1)?;
    let ih = t.relu(ih);
    let inter = t.mul(iw, ih)?;

    let sum = t.add(area_a, area_b)?;
    let union = t.sub(sum, inter)?;
    let iou = t.div(inter, union)?;

    let hx1 = t.minimum(ax1, bx1)?;
    let hy1 = t.minimum(ay1, by1)?;
    let hx2 = t.maximum(ax2, bx2)?;
    let hy2 = t.maximum(ay2, by2)?;
    let hull = area(t, hx1, hy1, hx2, hy2)?;
    let gap = t.sub(hull, union)?;
    let frac = t.div(gap, hull)?;
    let giou = t.sub(iou, frac)?;
    Ok((iou, giou))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{gradcheck, DiffArray};
    use proptest::prelude::*;

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn offsets_examples() {
        let c = Point::new(0.5, 0.5);
        let zero = offsets_to_box(c, BoxOffsets::new(0.0, 0.0, 0.0, 0.0).unwrap());
        assert_eq!(zero, bx(0.5, 0.5, 0.5, 0.5));

        let b = offsets_to_box(c, BoxOffsets::new(0.1, 0.1, 0.2, 0.2).unwrap());
        assert_eq!(b, bx(0.4, 0.3, 0.6, 0.7));

        let clamped = offsets_to_box(Point::new(0.05, 0.5), BoxOffsets::new(0.2, 0.1, 0.1, 0.1).unwrap());
        assert_eq!(clamped.x1, 0.0);
        assert!((clamped.x2 - 0.15).abs() < 1e-15);
    }

    #[test]
    fn invalid_inputs_rejected() {
        assert!(BBox::new(0.5, 0.0, 0.4, 1.0).is_err());
        assert!(BBox::new(f64::NAN, 0.0, 0.4, 1.0).is_err());
        assert!(BoxOffsets::new(-0.1, 0.0, 0.0, 0.0).is_err());
        assert!(GaussianBox::new([0.0; 4], [1.0, 0.0, 1.0, 1.0]).is_err());
        assert!(box_to_offsets(Point::new(0.9, 0.9), &bx(0.0, 0.0, 0.5, 0.5)).is_err());
    }

    #[test]
    fn iou_examples() {
        let a = bx(0.1, 0.2, 0.4, 0.6);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &bx(0.5, 0.7, 0.9, 0.9)), 0.0);
        // Intersection 0.5, union 1.5.
        let r = iou(&bx(0.0, 0.0, 1.0, 1.0), &bx(0.5, 0.0, 1.5, 1.0));
        assert!((r - 1.0 / 3.0).abs() < 1e-15);
        let point = bx(0.3, 0.3, 0.3, 0.3);
        assert_eq!(iou(&point, &point), 0.0);
    }

    #[test]
    fn giou_examples() {
        let a = bx(0.1, 0.2, 0.4, 0.6);
        assert_eq!(giou(&a, &a), 1.0);
        // Touching unit squares: hull equals union, no overlap.
        assert_eq!(giou(&bx(0.0, 0.0, 1.0, 1.0), &bx(1.0, 0.0, 2.0, 1.0)), 0.0);
        let far = giou(&bx(0.0, 0.0, 1.0, 1.0), &bx(1000.0, 1000.0, 1001.0, 1001.0));
        assert!(far < -0.999_99);
    }

    #[test]
    fn differentiable_rows_agree_with_scalar() {
        let pairs = [
            (bx(0.1, 0.1, 0.5, 0.6), bx(0.3, 0.2, 0.7, 0.9)),
            (bx(0.0, 0.0, 0.2, 0.2), bx(0.5, 0.5, 0.9, 0.8)),
        ];
        let mut t = Tape::new(0);
        let a = t.constant(DiffArray::new(vec![2, 4], pairs.iter().flat_map(|p| p.0.to_array()).collect()).unwrap());
        let b = t.constant(DiffArray::new(vec![2, 4], pairs.iter().flat_map(|p| p.1.to_array()).collect()).unwrap());
        let (i, g) = iou_giou_rows(&mut t, a, b).unwrap();
        for (k, (p, q)) in pairs.iter().enumerate() {
            assert!((t.data(i)[k] - iou(p, q)).abs() < 1e-14);
            assert!((t.data(g)[k] - giou(p, q)).abs() < 1e-14);
        }
    }

    #[test]
    fn differentiable_giou_gradient() {
        let a = DiffArray::new(vec![2, 4], vec![0.1, 0.1, 0.5, 0.6, 0.0, 0.0, 0.2, 0.25]).unwrap();
        let b = DiffArray::new(vec![2, 4], vec![0.3, 0.2, 0.7, 0.9, 0.5, 0.55, 0.9, 0.8]).unwrap();
        let r = gradcheck::check(&[a, b], 0, 1e-6, |t, v| {
            let (i, g) = iou_giou_rows(t, v[0], v[1])?;
            let s = t.add(i, g)?;
            Ok(t.sum(s))
        })
        .unwrap();
        assert!(r.max_error() < 1e-6, "{:?}", r.per_input);
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (0.0..1.0f64, 0.0..1.0f64, 0.0..0.5f64, 0.0..0.5f64)
            .prop_map(|(x, y, w, h)| BBox::from_center(Point::new(x, y), w, h))
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
            let ab = iou(&a, &b);
            prop_assert_eq!(ab, iou(&b, &a));
            prop_assert!((0.0..=1.0).contains(&ab));
        }

        #[test]
        fn giou_never_exceeds_iou(a in arb_box(), b in arb_box()) {
            prop_assert!(giou(&a, &b) <= iou(&a, &b) + 1e-15);
            prop_assert!(giou(&a, &b) >= -1.0 - 1e-15);
        }

        #[test]
        fn giou_equals_iou_when_hull_is_union(x in 0.1..0.4f64, y in 0.1..0.4f64, w in 0.05..0.3f64) {
            // Nested boxes: the hull is the outer box, which is also the union.
            let outer = BBox::from_center(Point::new(x, y), 2.0 * w, 2.0 * w);
            let inner = BBox::from_center(Point::new(x, y), w, w);
            prop_assert!((giou(&outer, &inner) - iou(&outer, &inner)).abs() < 1e-15);
        }

        #[test]
        fn iou_one_only_for_identical(a in arb_box(), b in arb_box()) {
            prop_assume!(a.area() > 1e-6 && b.area() > 1e-6);
            if iou(&a, &b) == 1.0 {
                prop_assert!(a.l1_distance(&b) < 1e-12);
            }
            prop_assert_eq!(iou(&a, &a), 1.0);
        }

        #[test]
        fn offsets_roundtrip(b in arb_box(), fx in 0.0..=1.0f64, fy in 0.0..=1.0f64) {
            let b = b.clamp_unit();
            let reference = Point::new(b.x1 + fx * b.width(), b.y1 + fy * b.height());
            let o = box_to_offsets(reference, &b).unwrap();
            let back = offsets_to_box(reference, o);
            prop_assert!(back.l1_distance(&b) < 1e-12);
        }
    }
}
