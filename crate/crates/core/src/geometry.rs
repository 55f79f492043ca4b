//! Box arithmetic on normalized image coordinates.

use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Width of [`spatial_relation`] output.
pub const SPATIAL_DIM: usize = 36;
const SELF_DIM: usize = 12;
const PAIR_DIM: usize = 16;
const SWAPPED_DIM: usize = 8;
const LOG_FLOOR: f64 = 1e-6;

/// Axis-aligned box `(x1, y1, x2, y2)` in `[0, 1]`, with `x1 < x2` and `y1 < y2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let c = [x1, y1, x2, y2];
        let in_range = c.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v));
        if !in_range || x1 >= x2 || y1 >= y2 {
            return Err(Error::InvalidBox(c));
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    /// Builds a box from its center and size, clipping to the unit square.
    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        Self::new(
            (cx - w / 2.0).max(0.0),
            (cy - h / 2.0).max(0.0),
            (cx + w / 2.0).min(1.0),
            (cy + h / 2.0).min(1.0),
        )
    }

    #[inline]
    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    #[inline]
    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    #[inline]
    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn intersection(&self, other: &BBox) -> f64 {
        let w = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let h = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        w * h
    }

    /// Smallest box enclosing both.
    pub fn union_box(&self, other: &BBox) -> BBox {
        BBox {
            x1: self.x1.min(other.x1),
            y1: self.y1.min(other.y1),
            x2: self.x2.max(other.x2),
            y2: self.y2.max(other.y2),
        }
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = Error;

    fn try_from(c: [f64; 4]) -> Result<Self> {
        BBox::new(c[0], c[1], c[2], c[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        b.to_array()
    }
}

pub fn center(b: &BBox) -> (f64, f64) {
    b.center()
}

pub fn center_distance(a: &BBox, b: &BBox) -> f64 {
    let (ax, ay) = a.center();
    let (bx, by) = b.center();
    libm::hypot(bx - ax, by - ay)
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Symmetric matrix of L2 center distances, zero on the diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix(Matrix);

impl DistanceMatrix {
    /// Wraps a raw matrix, checking square shape, symmetry, zero diagonal and finiteness.
    pub fn from_matrix(m: Matrix) -> Result<Self> {
        let n = m.rows();
        if m.cols() != n {
            return Err(Error::Shape {
                op: "distance_matrix",
                left: m.shape(),
                right: (n, n),
            });
        }
        if n == 0 {
            return Err(Error::Empty("distance_matrix"));
        }
        if !m.is_finite() || m.data().iter().any(|&v| v < 0.0) {
            return Err(Error::NonFinite("distance_matrix"));
        }
        for i in 0..n {
            if m[(i, i)] != 0.0 {
                return Err(Error::Config("distance matrix diagonal must be zero".into()));
            }
            for j in 0..i {
                if m[(i, j)] != m[(j, i)] {
                    return Err(Error::Config("distance matrix must be symmetric".into()));
                }
            }
        }
        Ok(Self(m))
    }

    pub fn n(&self) -> usize {
        self.0.rows()
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0[(i, j)]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.0.row(i)
    }

    pub fn as_matrix(&self) -> &Matrix {
        &self.0
    }
}

pub fn pairwise_distances(boxes: &[BBox]) -> Result<DistanceMatrix> {
    let n = boxes.len();
    if n == 0 {
        return Err(Error::Empty("pairwise_distances"));
    }
    let mut m = Matrix::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let d = center_distance(&boxes[i], &boxes[j]);
            m[(i, j)] = d;
            m[(j, i)] = d;
        }
    }
    Ok(DistanceMatrix(m))
}

#[inline]
fn ln_floor(v: f64) -> f64 {
    libm::log(v.max(LOG_FLOOR))
}

#[inline]
fn log_ratio(a: f64, b: f64) -> f64 {
    ln_floor(a) - ln_floor(b)
}

fn self_features(b: &BBox, out: &mut [f64]) {
    let (cx, cy) = b.center();
    let (w, h) = (b.width(), b.height());
    out.copy_from_slice(&[
        cx,
        cy,
        w,
        h,
        w * h,
        w / h.max(LOG_FLOOR),
        ln_floor(w),
        ln_floor(h),
        b.x1,
        b.y1,
        b.x2,
        b.y2,
    ]);
}

/// Relation of `a` to `b`: 16 features.
fn pair_features(a: &BBox, b: &BBox) -> [f64; PAIR_DIM] {
    let (ax, ay) = a.center();
    let (bx, by) = b.center();
    let (dx, dy) = (bx - ax, by - ay);
    let dist = libm::hypot(dx, dy);
    let inter = a.intersection(b);
    let angle = libm::atan2(dy, dx);
    let u = a.union_box(b);
    [
        dx,
        dy,
        dist,
        iou(a, b),
        inter / a.area().max(LOG_FLOOR),
        inter / b.area().max(LOG_FLOOR),
        log_ratio(a.width(), b.width()),
        log_ratio(a.height(), b.height()),
        log_ratio(a.area(), b.area()),
        libm::sin(angle),
        libm::cos(angle),
        u.width(),
        u.height(),
        u.area(),
        dx / a.width().max(LOG_FLOOR),
        dy / a.height().max(LOG_FLOOR),
    ]
}

/// Per-token spatial embedding: 12 self features of box `i`, then the mean
/// over all other boxes `j` of a 24-wide relation block (16 features of `i`
/// relative to `j` plus the first 8 with the roles swapped). With a single
/// box the pooled block is zero.
pub fn spatial_relation(i: usize, boxes: &[BBox]) -> Result<[f64; SPATIAL_DIM]> {
    if boxes.is_empty() {
        return Err(Error::Empty("spatial_relation"));
    }
    if i >= boxes.len() {
        return Err(Error::Shape {
            op: "spatial_relation",
            left: (i, 0),
            right: (boxes.len(), 0),
        });
    }
    let mut out = [0.0; SPATIAL_DIM];
    self_features(&boxes[i], &mut out[..SELF_DIM]);
    let others = boxes.len() - 1;
    if others == 0 {
        return Ok(out);
    }
    let pooled = &mut out[SELF_DIM..];
    for (j, bj) in boxes.iter().enumerate() {
        if j == i {
            continue;
        }
        let fwd = pair_features(&boxes[i], bj);
        let back = pair_features(bj, &boxes[i]);
        for (p, v) in pooled.iter_mut().zip(fwd.iter().chain(&back[..SWAPPED_DIM])) {
            *p += v;
        }
    }
    let inv = 1.0 / others as f64;
    pooled.iter_mut().for_each(|p| *p *= inv);
    Ok(out)
}

/// [`spatial_relation`] for every box, stacked as an `n x 36` matrix.
pub fn spatial_relations(boxes: &[BBox]) -> Result<Matrix> {
    let rows: Vec<[f64; SPATIAL_DIM]> = (0..boxes.len())
        .map(|i| spatial_relation(i, boxes))
        .collect::<Result<_>>()?;
    Matrix::from_rows(&rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use proptest::prelude::*;

    fn b(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-12
    }

    #[test]
    fn centers() {
        assert_eq!(center(&b(0., 0., 1., 1.)), (0.5, 0.5));
        let (x, y) = center(&b(0.1, 0.3, 0.5, 0.7));
        assert!(close(x, 0.3) && close(y, 0.5));
        let eps = 1e-9;
        let (x, y) = center(&b(0.2, 0.2, 0.2 + eps, 0.2 + eps));
        assert!((x - 0.2).abs() < 1e-8 && (y - 0.2).abs() < 1e-8);
    }

    #[test]
    fn box_validation() {
        assert!(BBox::new(0.5, 0.0, 0.5, 1.0).is_err());
        assert!(BBox::new(0.0, 0.0, 1.1, 1.0).is_err());
        assert!(BBox::new(f64::NAN, 0.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn distances() {
        let one = pairwise_distances(&[b(0., 0., 1., 1.)]).unwrap();
        assert_eq!(one.as_matrix().data(), &[0.0]);
        // centers (0.1, 0.1) and (0.4, 0.5)
        let d = pairwise_distances(&[b(0.0, 0.0, 0.2, 0.2), b(0.3, 0.4, 0.5, 0.6)]).unwrap();
        assert!(close(d.get(0, 1), 0.5) && close(d.get(1, 0), 0.5));
        assert!(pairwise_distances(&[]).is_err());
    }

    #[test]
    fn iou_cases() {
        let a = b(0., 0., 1., 1.);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&b(0., 0., 0.2, 0.2), &b(0.5, 0.5, 0.9, 0.9)), 0.0);
        assert!(close(iou(&a, &b(0.5, 0., 1., 1.)), 0.5));
    }

    #[test]
    fn single_box_has_zero_pair_block() {
        let r = spatial_relation(0, &[b(0.1, 0.2, 0.3, 0.6)]).unwrap();
        assert!(r[SELF_DIM..].iter().all(|&v| v == 0.0));
        assert!(close(r[0], 0.2) && close(r[1], 0.4));
    }

    #[test]
    fn disjoint_pair_hand_evaluated() {
        let boxes = [b(0.0, 0.0, 0.2, 0.2), b(0.6, 0.0, 0.8, 0.2)];
        let r = spatial_relation(0, &boxes).unwrap();
        let ln02 = libm::log(0.2);
        let expected = [
            0.1, 0.1, 0.2, 0.2, 0.04, 1.0, ln02, ln02, 0.0, 0.0, 0.2, 0.2, // self
            0.6, 0.0, 0.6, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.8, 0.2, 0.16, 3.0,
            0.0, // forward
            -0.6, 0.0, 0.6, 0.0, 0.0, 0.0, 0.0, 0.0, // swapped
        ];
        for (k, (got, want)) in r.iter().zip(expected.iter()).enumerate() {
            assert!((got - want).abs() < 1e-12, "entry {k}: {got} vs {want}");
        }
    }

    #[test]
    fn overlapping_pair_hand_evaluated() {
        // A: w .4 h .2 area .08; B: w .4 h .4 area .16; intersection .04; IoU .2
        let boxes = [b(0.0, 0.0, 0.4, 0.2), b(0.2, 0.0, 0.6, 0.4)];
        let r = spatial_relation(0, &boxes).unwrap();
        let s5 = libm::sqrt(0.05);
        let ln_half = libm::log(0.5);
        let expected_pair = [
            0.2,
            0.1,
            s5,
            0.2,
            0.5,
            0.25,
            0.0,
            ln_half,
            ln_half,
            0.1 / s5,
            0.2 / s5,
            0.6,
            0.4,
            0.24,
            0.5,
            0.5,
            -0.2,
            -0.1,
            s5,
            0.2,
            0.25,
            0.5,
            0.0,
            -ln_half,
        ];
        for (k, (got, want)) in r[SELF_DIM..].iter().zip(expected_pair.iter()).enumerate() {
            assert!((got - want).abs() < 1e-12, "entry {k}: {got} vs {want}");
        }
        assert!(close(r[5], 2.0));
    }

    #[test]
    fn mirrored_boxes_negate_dx() {
        let boxes = [b(0.1, 0.3, 0.3, 0.5), b(0.7, 0.3, 0.9, 0.5)];
        let r0 = spatial_relation(0, &boxes).unwrap();
        let r1 = spatial_relation(1, &boxes).unwrap();
        let o = SELF_DIM;
        assert!(close(r0[o], -r1[o]));
        assert!(close(r0[o + 2], r1[o + 2]));
        assert!(close(r0[o + 3], r1[o + 3]));
    }

    #[test]
    fn identical_boxes_are_finite() {
        let a = b(0.3, 0.3, 0.5, 0.6);
        let r = spatial_relation(1, &[a, a, a]).unwrap();
        assert!(r.iter().all(|v| v.is_finite()));
        assert_eq!(r[SELF_DIM + 6], 0.0);
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (0.0..0.8f64, 0.0..0.8f64, 0.01..0.2f64, 0.01..0.2f64)
            .prop_map(|(x, y, w, h)| b(x, y, x + w, y + h))
    }

    proptest! {
        #[test]
        fn distance_matrix_invariants(boxes in prop::collection::vec(arb_box(), 1..10)) {
            let d = pairwise_distances(&boxes).unwrap();
            for i in 0..boxes.len() {
                prop_assert_eq!(d.get(i, i), 0.0);
                for j in 0..boxes.len() {
                    prop_assert_eq!(d.get(i, j), d.get(j, i));
                    prop_assert!(d.get(i, j) <= core::f64::consts::SQRT_2);
                }
            }
        }

        #[test]
        fn iou_symmetric_bounded(a in arb_box(), c in arb_box()) {
            let v = iou(&a, &c);
            prop_assert!((0.0..=1.0).contains(&v));
            prop_assert_eq!(v, iou(&c, &a));
        }

        #[test]
        fn spatial_relation_permutation_equivariant(
            boxes in prop::collection::vec(arb_box(), 2..7),
            rot in 0usize..6,
        ) {
            let n = boxes.len();
            let perm: vec::Vec<usize> = (0..n).map(|k| (k + rot) % n).collect();
            let permuted: vec::Vec<BBox> = perm.iter().map(|&k| boxes[k]).collect();
            for (new_i, &old_i) in perm.iter().enumerate() {
                let a = spatial_relation(old_i, &boxes).unwrap();
                let c = spatial_relation(new_i, &permuted).unwrap();
                for (x, y) in a.iter().zip(c.iter()) {
                    // pooled means may differ in summation order only
                    prop_assert!((x - y).abs() < 1e-12);
                }
                prop_assert!(a.iter().all(|v| v.is_finite()));
            }
        }
    }
}
