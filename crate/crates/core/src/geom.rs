//! Box arithmetic, non-maximum suppression and the multi-scale grid over the
//! 224-pixel canvas used by the whole-image model.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

/// Axis-aligned box in continuous pixel coordinates, origin top-left.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BoundingBox {
    pub const fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self { x, y, w, h }
    }

    /// True when all coordinates are finite and both sides are positive.
    pub fn is_valid(&self) -> bool {
        self.x.is_finite()
            && self.y.is_finite()
            && self.w.is_finite()
            && self.h.is_finite()
            && self.w > 0.0
            && self.h > 0.0
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn right(&self) -> f64 {
        self.x + self.w
    }

    pub fn bottom(&self) -> f64 {
        self.y + self.h
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    /// Mean side length `(w + h) / 2`.
    pub fn size(&self) -> f64 {
        (self.w + self.h) / 2.0
    }

    pub fn intersection(&self, other: &BoundingBox) -> f64 {
        let iw = self.right().min(other.right()) - self.x.max(other.x);
        let ih = self.bottom().min(other.bottom()) - self.y.max(other.y);
        if iw <= 0.0 || ih <= 0.0 {
            0.0
        } else {
            iw * ih
        }
    }

    /// Lexicographic order on `(x, y, w, h)`, used to break score ties.
    pub fn lex_cmp(&self, other: &BoundingBox) -> Ordering {
        self.x
            .total_cmp(&other.x)
            .then(self.y.total_cmp(&other.y))
            .then(self.w.total_cmp(&other.w))
            .then(self.h.total_cmp(&other.h))
    }
}

/// Intersection over union of two valid boxes.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let inter = a.intersection(b);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

pub const ASPECT_MIN: f64 = 2.0 / 3.0;
pub const ASPECT_MAX: f64 = 3.0 / 2.0;

/// Square-like boxes only: `w / h` in the closed interval `[2/3, 3/2]`.
pub fn aspect_filter(b: &BoundingBox) -> bool {
    // Compare via cross-multiplication so the boundary ratios are exact.
    2.0 * b.h <= 3.0 * b.w && 2.0 * b.w <= 3.0 * b.h
}

/// Default suppression threshold for candidate selection and final detections.
pub const NMS_THRESHOLD: f64 = 0.3;

/// Indices sorted by descending score; equal scores keep input order.
pub fn rank_by_score(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// Greedy non-maximum suppression.
///
/// Boxes are visited by descending score (ties: earlier input first); a box is
/// dropped when its IoU with an already kept box is strictly greater than
/// `threshold`. Returns kept indices in visiting order.
pub fn nms(boxes: &[(BoundingBox, f64)], threshold: f64) -> Vec<usize> {
    let scores: Vec<f64> = boxes.iter().map(|(_, s)| *s).collect();
    let mut kept: Vec<usize> = Vec::new();
    for idx in rank_by_score(&scores) {
        let b = &boxes[idx].0;
        if kept.iter().all(|&k| iou(&boxes[k].0, b) <= threshold) {
            kept.push(idx);
        }
    }
    kept
}

/// NMS over a precomputed "overlaps" relation, for callers that rerun
/// suppression many times on the same boxes with different scores.
pub fn nms_with_overlaps(scores: &[f64], overlaps: &[Vec<bool>]) -> Vec<usize> {
    let mut kept: Vec<usize> = Vec::new();
    for idx in rank_by_score(scores) {
        if kept.iter().all(|&k| !overlaps[k][idx]) {
            kept.push(idx);
        }
    }
    kept
}

/// `overlaps[i][j]` is true when `iou(i, j) > threshold`.
pub fn overlap_matrix(boxes: &[BoundingBox], threshold: f64) -> Vec<Vec<bool>> {
    let n = boxes.len();
    let mut m = vec![vec![false; n]; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let o = iou(&boxes[i], &boxes[j]) > threshold;
            m[i][j] = o;
            m[j][i] = o;
        }
    }
    m
}

pub const CANVAS: f64 = 224.0;
/// Cell sides, coarse to fine.
pub const CELL_SIDES: [f64; 4] = [224.0, 112.0, 56.0, 28.0];
pub const NUM_CELLS: usize = 284;

/// The multi-scale grid of square cells on the 224 canvas.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    pub canvas: f64,
    pub cells: Vec<BoundingBox>,
    pub scale_index: Vec<usize>,
}

impl GridSpec {
    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    /// Number of cells per side at `side` with stride `side / 2`.
    pub fn per_axis(side: f64) -> usize {
        ((CANVAS - side) / (side / 2.0)) as usize + 1
    }
}

/// Builds the 284-cell grid: scales 224, 112, 56, 28 in that order,
/// row-major within each scale.
pub fn build_grid() -> GridSpec {
    let mut cells = Vec::with_capacity(NUM_CELLS);
    let mut scale_index = Vec::with_capacity(NUM_CELLS);
    for (s, &side) in CELL_SIDES.iter().enumerate() {
        let n = GridSpec::per_axis(side);
        let stride = side / 2.0;
        for row in 0..n {
            for col in 0..n {
                cells.push(BoundingBox::new(
                    col as f64 * stride,
                    row as f64 * stride,
                    side,
                    side,
                ));
                scale_index.push(s);
            }
        }
    }
    GridSpec {
        canvas: CANVAS,
        cells,
        scale_index,
    }
}

/// Isotropic rescale of an image so its long side is 224, then centered zero padding.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CanvasTransform {
    pub scale: f64,
    pub offset_x: f64,
    pub offset_y: f64,
}

impl CanvasTransform {
    pub fn for_image(width: f64, height: f64) -> Self {
        let scale = CANVAS / width.max(height);
        Self {
            scale,
            offset_x: (CANVAS - width * scale) / 2.0,
            offset_y: (CANVAS - height * scale) / 2.0,
        }
    }

    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            offset_x: 0.0,
            offset_y: 0.0,
        }
    }

    pub fn apply(&self, b: &BoundingBox) -> BoundingBox {
        BoundingBox::new(
            b.x * self.scale + self.offset_x,
            b.y * self.scale + self.offset_y,
            b.w * self.scale,
            b.h * self.scale,
        )
    }
}

/// Index of the grid cell with maximum IoU to `b` (image coordinates);
/// ties go to the smaller cell index.
pub fn match_to_cell(b: &BoundingBox, grid: &GridSpec, transform: &CanvasTransform) -> usize {
    let mapped = transform.apply(b);
    let mut best = 0;
    let mut best_iou = f64::NEG_INFINITY;
    for (c, cell) in grid.cells.iter().enumerate() {
        let o = iou(cell, &mapped);
        if o > best_iou {
            best = c;
            best_iou = o;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bb(x: f64, y: f64, w: f64, h: f64) -> BoundingBox {
        BoundingBox::new(x, y, w, h)
    }

    #[test]
    fn iou_examples() {
        let a = bb(0.0, 0.0, 2.0, 2.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &bb(5.0, 5.0, 1.0, 1.0)), 0.0);
        assert!((iou(&a, &bb(1.0, 0.0, 2.0, 2.0)) - 1.0 / 3.0).abs() < 1e-15);
        // touching edges share no area
        assert_eq!(iou(&a, &bb(2.0, 0.0, 2.0, 2.0)), 0.0);
    }

    #[test]
    fn aspect_examples() {
        assert!(aspect_filter(&bb(0.0, 0.0, 100.0, 100.0)));
        assert!(!aspect_filter(&bb(0.0, 0.0, 100.0, 40.0)));
        assert!(aspect_filter(&bb(0.0, 0.0, 100.0, 150.0)));
        assert!(aspect_filter(&bb(0.0, 0.0, 150.0, 100.0)));
        assert!(!aspect_filter(&bb(0.0, 0.0, 100.0, 151.0)));
    }

    #[test]
    fn nms_examples() {
        let a = bb(0.0, 0.0, 10.0, 10.0);
        assert_eq!(nms(&[(a, 3.0), (a, 2.0), (a, 1.0)], 0.3), vec![0]);
        let disjoint = [
            (bb(0.0, 0.0, 1.0, 1.0), 0.5),
            (bb(5.0, 0.0, 1.0, 1.0), 0.9),
            (bb(10.0, 0.0, 1.0, 1.0), 0.1),
        ];
        assert_eq!(nms(&disjoint, 0.3), vec![1, 0, 2]);
        // equal scores: earlier input wins
        assert_eq!(nms(&[(a, 1.0), (a, 1.0)], 0.3), vec![0]);
    }

    #[test]
    fn nms_boundary_is_strict() {
        let a = bb(0.0, 0.0, 13.0, 10.0);
        let b = bb(7.0, 0.0, 13.0, 10.0);
        // intersection 6*10 = 60, union 260 - 60 = 200, IoU = 0.3 exactly
        assert_eq!(iou(&a, &b), 0.3);
        assert_eq!(nms(&[(a, 2.0), (b, 1.0)], 0.3), vec![0, 1]);
        assert_eq!(nms(&[(a, 2.0), (b, 1.0)], 0.29), vec![0]);
    }

    #[test]
    fn grid_counts_and_order() {
        let g = build_grid();
        assert_eq!(g.len(), 284);
        let counts: Vec<usize> = (0..4)
            .map(|s| g.scale_index.iter().filter(|&&i| i == s).count())
            .collect();
        assert_eq!(counts, vec![1, 9, 49, 225]);
        assert_eq!(g.cells[0], bb(0.0, 0.0, 224.0, 224.0));
        assert_eq!(g.cells[1], bb(0.0, 0.0, 112.0, 112.0));
        assert_eq!(g.cells[2], bb(56.0, 0.0, 112.0, 112.0));
        assert_eq!(g.cells[4], bb(0.0, 56.0, 112.0, 112.0));
        for c in &g.cells {
            assert!(c.x >= 0.0 && c.y >= 0.0 && c.right() <= 224.0 && c.bottom() <= 224.0);
        }
    }

    #[test]
    fn grid_neighbours_step_by_half_side() {
        let g = build_grid();
        for w in 0..g.len() - 1 {
            if g.scale_index[w] != g.scale_index[w + 1] {
                continue;
            }
            let (a, b) = (g.cells[w], g.cells[w + 1]);
            let half = a.w / 2.0;
            let same_row = a.y == b.y && b.x - a.x == half;
            let next_row = b.x == 0.0 && b.y - a.y == half;
            assert!(same_row || next_row, "cells {w} and {}", w + 1);
        }
    }

    #[test]
    fn match_to_cell_examples() {
        let g = build_grid();
        let id = CanvasTransform::identity();
        assert_eq!(match_to_cell(&bb(0.0, 0.0, 224.0, 224.0), &g, &id), 0);
        for c in 1..10 {
            assert_eq!(match_to_cell(&g.cells[c], &g, &id), c);
        }
        let centered = bb(87.0, 87.0, 50.0, 50.0);
        let expected = (0..g.len())
            .fold((0usize, -1.0f64), |(bi, bo), c| {
                let o = iou(&g.cells[c], &centered);
                if o > bo {
                    (c, o)
                } else {
                    (bi, bo)
                }
            })
            .0;
        assert_eq!(match_to_cell(&centered, &g, &id), expected);
    }

    #[test]
    fn canvas_transform_centers_padding() {
        let t = CanvasTransform::for_image(448.0, 224.0);
        assert_eq!(t.scale, 0.5);
        assert_eq!(t.offset_x, 0.0);
        assert_eq!(t.offset_y, 56.0);
        let full = t.apply(&bb(0.0, 0.0, 448.0, 224.0));
        assert_eq!(full, bb(0.0, 56.0, 224.0, 112.0));
    }
}
