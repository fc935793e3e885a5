use serde::Serialize;

use crate::error::Result;
use crate::layout::{BBox, Layout};

pub const DEFAULT_GRID: usize = 256;

/// Intersection over union of two centroid-form boxes; 0 for an empty union.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let [ax0, ay0, ax1, ay1] = a.corners();
    let [bx0, by0, bx1, by1] = b.corners();
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LayoutStats {
    pub coverage_pct: f64,
    pub overlap_pct: f64,
    pub element_count: usize,
}

/// Half-open range of grid cells whose centers fall inside `[lo, hi)`.
fn cell_span(lo: f64, hi: f64, grid: usize) -> std::ops::Range<usize> {
    let g = grid as f64;
    let first = (lo * g - 0.5).ceil().max(0.0) as usize;
    let end = ((hi * g - 0.5).ceil().max(0.0) as usize).min(grid);
    first..end.max(first)
}

/// Percentage of a `grid x grid` raster covered by at least one box.
pub fn coverage(boxes: &[BBox], grid: usize) -> f64 {
    let mut covered = vec![false; grid * grid];
    for b in boxes {
        let [x0, y0, x1, y1] = b.corners();
        let cols = cell_span(x0, x1, grid);
        for r in cell_span(y0, y1, grid) {
            covered[r * grid + cols.start..r * grid + cols.end].fill(true);
        }
    }
    100.0 * covered.iter().filter(|&&c| c).count() as f64 / (grid * grid) as f64
}

/// Mean IoU over unordered pairs, times 100 (0 for fewer than two boxes).
pub fn overlap(boxes: &[BBox]) -> f64 {
    let n = boxes.len();
    if n < 2 {
        return 0.0;
    }
    let mut sum = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            sum += iou(&boxes[i], &boxes[j]);
        }
    }
    100.0 * sum / (n * (n - 1) / 2) as f64
}

pub fn layout_stats(layout: &Layout, grid: usize) -> Result<LayoutStats> {
    let boxes = layout.boxes()?;
    Ok(LayoutStats {
        coverage_pct: coverage(&boxes, grid),
        overlap_pct: overlap(&boxes),
        element_count: boxes.len(),
    })
}

/// Mean coverage and overlap over a corpus.
pub fn mean_stats(layouts: &[Layout], grid: usize) -> Result<(f64, f64)> {
    let mut cov = 0.0;
    let mut ov = 0.0;
    for l in layouts {
        let s = layout_stats(l, grid)?;
        cov += s.coverage_pct;
        ov += s.overlap_pct;
    }
    let n = layouts.len().max(1) as f64;
    Ok((cov / n, ov / n))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn iou_examples() {
        let a = BBox::new(0.5, 0.5, 1.0, 1.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &BBox::new(3.0, 3.0, 1.0, 1.0)), 0.0);
        let b = BBox::new(1.0, 0.5, 1.0, 1.0);
        assert!((iou(&a, &b) - 1.0 / 3.0).abs() < 1e-15);
        let point = BBox::new(0.2, 0.2, 0.0, 0.0);
        assert_eq!(iou(&point, &point), 0.0);
    }

    #[test]
    fn full_canvas_box() {
        let s = coverage(&[BBox::new(0.5, 0.5, 1.0, 1.0)], 256);
        assert_eq!(s, 100.0);
        assert_eq!(overlap(&[BBox::new(0.5, 0.5, 1.0, 1.0)]), 0.0);
    }

    #[test]
    fn two_disjoint_quarters() {
        let boxes = [BBox::new(0.25, 0.25, 0.5, 0.5), BBox::new(0.75, 0.75, 0.5, 0.5)];
        let reference = coverage(&boxes, 4096);
        assert!((coverage(&boxes, 256) - 50.0).abs() <= 0.5);
        assert!((reference - 50.0).abs() <= 0.5);
        assert_eq!(overlap(&boxes), 0.0);
    }

    #[test]
    fn duplicated_box_overlaps_fully() {
        let b = BBox::new(0.3, 0.4, 0.2, 0.1);
        assert!((overlap(&[b, b]) - 100.0).abs() < 1e-12);
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (0.0f64..1.0, 0.0f64..1.0, 0.0f64..0.6, 0.0f64..0.6).prop_map(|(cx, cy, h, w)| BBox::new(cx, cy, h, w))
    }

    proptest! {
        #[test]
        fn iou_is_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
            let x = iou(&a, &b);
            prop_assert_eq!(x, iou(&b, &a));
            prop_assert!((0.0..=1.0).contains(&x));
        }

        #[test]
        fn coverage_converges_with_grid(boxes in proptest::collection::vec(arb_box(), 1..8)) {
            let coarse = coverage(&boxes, 256);
            let fine = coverage(&boxes, 4096);
            prop_assert!((coarse - fine).abs() < 1.0, "{} vs {}", coarse, fine);
        }
    }
}
