//! Box geometry: IoU, exact union-of-rectangles regions, and greedy
//! non-maximum suppression.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Axis-aligned box in image coordinates, corners ordered.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl Rect {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Rect> {
        let r = Rect { x1, y1, x2, y2 };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.x1.is_finite() && self.y1.is_finite() && self.x2.is_finite() && self.y2.is_finite())
        {
            return Err(Error::Input(format!("non-finite box {self:?}")));
        }
        if self.x1 >= self.x2 || self.y1 >= self.y2 {
            return Err(Error::Input(format!("degenerate box {self:?}")));
        }
        Ok(())
    }

    pub fn area(&self) -> f64 {
        (self.x2 - self.x1) * (self.y2 - self.y1)
    }

    pub fn center_x(&self) -> f64 {
        0.5 * (self.x1 + self.x2)
    }

    pub fn center_y(&self) -> f64 {
        0.5 * (self.y1 + self.y2)
    }

    pub fn clamp_to(&self, width: f64, height: f64) -> Rect {
        Rect {
            x1: self.x1.clamp(0.0, width),
            y1: self.y1.clamp(0.0, height),
            x2: self.x2.clamp(0.0, width),
            y2: self.y2.clamp(0.0, height),
        }
    }

    pub fn intersection(&self, other: &Rect) -> Option<Rect> {
        let x1 = self.x1.max(other.x1);
        let y1 = self.y1.max(other.y1);
        let x2 = self.x2.min(other.x2);
        let y2 = self.y2.min(other.y2);
        if x1 < x2 && y1 < y2 {
            Some(Rect { x1, y1, x2, y2 })
        } else {
            None
        }
    }

    pub fn corners(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }
}

/// Intersection over union of two boxes; 0 for disjoint boxes.
pub fn iou(a: &Rect, b: &Rect) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    let inter = a.intersection(b).map(|r| r.area()).unwrap_or(0.0);
    let union = a.area() + b.area() - inter;
    Ok(inter / union)
}

/// Exact area of a union of rectangles via coordinate-compressed strips:
/// for each x-strip, merge the y-intervals of the rectangles spanning it.
pub fn union_area(rects: &[Rect]) -> f64 {
    if rects.is_empty() {
        return 0.0;
    }
    let mut xs: Vec<f64> = rects.iter().flat_map(|r| [r.x1, r.x2]).collect();
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    xs.dedup();
    let mut total = 0.0;
    for w in xs.windows(2) {
        let (x_lo, x_hi) = (w[0], w[1]);
        if x_hi <= x_lo {
            continue;
        }
        let mid = 0.5 * (x_lo + x_hi);
        let mut intervals: Vec<(f64, f64)> = rects
            .iter()
            .filter(|r| r.x1 <= mid && mid < r.x2)
            .map(|r| (r.y1, r.y2))
            .collect();
        if intervals.is_empty() {
            continue;
        }
        intervals.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut covered = 0.0;
        let (mut lo, mut hi) = intervals[0];
        for &(a, b) in &intervals[1..] {
            if a > hi {
                covered += hi - lo;
                lo = a;
                hi = b;
            } else {
                hi = hi.max(b);
            }
        }
        covered += hi - lo;
        total += covered * (x_hi - x_lo);
    }
    total
}

/// IoU between two union-of-rectangles regions. The intersection of two
/// unions is the union of the pairwise rectangle intersections, so both
/// terms reduce to [`union_area`]. Either region empty scores 0.
pub fn region_iou(pred: &[Rect], gt: &[Rect]) -> f64 {
    if pred.is_empty() || gt.is_empty() {
        return 0.0;
    }
    let mut pairwise = Vec::new();
    for p in pred {
        for g in gt {
            if let Some(r) = p.intersection(g) {
                pairwise.push(r);
            }
        }
    }
    let inter = union_area(&pairwise);
    let mut all: Vec<Rect> = pred.to_vec();
    all.extend_from_slice(gt);
    let uni = union_area(&all);
    if uni == 0.0 {
        0.0
    } else {
        inter / uni
    }
}

/// Greedy non-maximum suppression. Keeps the highest-scoring box, suppresses
/// boxes whose IoU with any kept box exceeds `iou_threshold`, repeats. Score
/// ties break toward the lower index. Returns kept indices in ascending
/// order.
pub fn nms(rects: &[Rect], scores: &[f64], iou_threshold: f64) -> Result<Vec<usize>> {
    if rects.len() != scores.len() {
        return Err(Error::Input(format!(
            "{} boxes with {} scores",
            rects.len(),
            scores.len()
        )));
    }
    let mut order: Vec<usize> = (0..rects.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b))
    });
    let mut kept: Vec<usize> = Vec::new();
    let mut suppressed = vec![false; rects.len()];
    for &i in &order {
        if suppressed[i] {
            continue;
        }
        kept.push(i);
        for &j in &order {
            if !suppressed[j] && j != i && iou(&rects[i], &rects[j])? > iou_threshold {
                suppressed[j] = true;
            }
        }
    }
    kept.sort_unstable();
    Ok(kept)
}

/// Rasterization reference for union areas, used as a test oracle.
/// Counts covered cells of a `resolution`-squared grid over the bounding
/// extent of both regions.
pub fn raster_region_iou(pred: &[Rect], gt: &[Rect], resolution: usize) -> f64 {
    if pred.is_empty() || gt.is_empty() {
        return 0.0;
    }
    let all: Vec<&Rect> = pred.iter().chain(gt.iter()).collect();
    let x_lo = all.iter().map(|r| r.x1).fold(f64::INFINITY, f64::min);
    let x_hi = all.iter().map(|r| r.x2).fold(f64::NEG_INFINITY, f64::max);
    let y_lo = all.iter().map(|r| r.y1).fold(f64::INFINITY, f64::min);
    let y_hi = all.iter().map(|r| r.y2).fold(f64::NEG_INFINITY, f64::max);
    let dx = (x_hi - x_lo) / resolution as f64;
    let dy = (y_hi - y_lo) / resolution as f64;
    let covers = |rects: &[Rect], x: f64, y: f64| rects.iter().any(|r| x >= r.x1 && x < r.x2 && y >= r.y1 && y < r.y2);
    let (mut inter, mut union) = (0u64, 0u64);
    for i in 0..resolution {
        let x = x_lo + (i as f64 + 0.5) * dx;
        for j in 0..resolution {
            let y = y_lo + (j as f64 + 0.5) * dy;
            let in_p = covers(pred, x, y);
            let in_g = covers(gt, x, y);
            if in_p && in_g {
                inter += 1;
            }
            if in_p || in_g {
                union += 1;
            }
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Reference NMS used by tests: repeatedly scan the full list for the best
/// unsuppressed box instead of pre-sorting.
pub fn nms_reference(rects: &[Rect], scores: &[f64], iou_threshold: f64) -> Vec<usize> {
    let n = rects.len();
    let mut taken = vec![false; n];
    let mut gone = vec![false; n];
    let mut kept = Vec::new();
    loop {
        let mut best: Option<usize> = None;
        for i in 0..n {
            if taken[i] || gone[i] {
                continue;
            }
            best = match best {
                None => Some(i),
                Some(b) if scores[i] > scores[b] => Some(i),
                other => other,
            };
        }
        let Some(b) = best else { break };
        taken[b] = true;
        kept.push(b);
        for i in 0..n {
            if !taken[i] && !gone[i] && iou(&rects[b], &rects[i]).unwrap() > iou_threshold {
                gone[i] = true;
            }
        }
    }
    kept.sort_unstable();
    kept
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn r(x1: f64, y1: f64, x2: f64, y2: f64) -> Rect {
        Rect::new(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn iou_examples() {
        let a = r(0.0, 0.0, 2.0, 2.0);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        let far = r(10.0, 10.0, 11.0, 11.0);
        assert_eq!(iou(&a, &far).unwrap(), 0.0);
        let b = r(1.0, 1.0, 3.0, 3.0);
        assert!((iou(&a, &b).unwrap() - 1.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_box_is_input_error() {
        assert!(Rect::new(2.0, 0.0, 1.0, 1.0).is_err());
        assert!(Rect::new(0.0, 0.0, 0.0, 1.0).is_err());
    }

    #[test]
    fn iou_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let a = random_rect(&mut rng);
            let b = random_rect(&mut rng);
            assert_eq!(iou(&a, &b).unwrap(), iou(&b, &a).unwrap());
        }
    }

    #[test]
    fn region_iou_single_boxes_reduce_to_iou() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let a = random_rect(&mut rng);
            let b = random_rect(&mut rng);
            let exact = iou(&a, &b).unwrap();
            let region = region_iou(&[a], &[b]);
            assert!((exact - region).abs() < 1e-12);
        }
    }

    #[test]
    fn region_iou_tiling_is_exact() {
        let pred = vec![r(0.0, 0.0, 1.0, 1.0), r(1.0, 0.0, 2.0, 1.0)];
        let gt = vec![r(0.0, 0.0, 2.0, 1.0)];
        assert_eq!(region_iou(&pred, &gt), 1.0);
        assert_eq!(region_iou(&gt, &gt), 1.0);
    }

    #[test]
    fn covered_box_adds_no_area() {
        let outer = r(0.0, 0.0, 4.0, 4.0);
        let inner = r(1.0, 1.0, 2.0, 2.0);
        assert_eq!(union_area(&[outer]), union_area(&[outer, inner]));
    }

    #[test]
    fn empty_region_scores_zero() {
        assert_eq!(region_iou(&[], &[r(0.0, 0.0, 1.0, 1.0)]), 0.0);
        assert_eq!(region_iou(&[r(0.0, 0.0, 1.0, 1.0)], &[]), 0.0);
    }

    fn random_rect(rng: &mut ChaCha8Rng) -> Rect {
        let x1 = rng.gen_range(0.0..8.0);
        let y1 = rng.gen_range(0.0..8.0);
        let w = rng.gen_range(0.2..4.0);
        let h = rng.gen_range(0.2..4.0);
        r(x1, y1, x1 + w, y1 + h)
    }

    #[test]
    fn union_matches_raster_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..60 {
            let pred: Vec<Rect> = (0..rng.gen_range(1..5)).map(|_| random_rect(&mut rng)).collect();
            let gt: Vec<Rect> = (0..rng.gen_range(1..5)).map(|_| random_rect(&mut rng)).collect();
            let exact = region_iou(&pred, &gt);
            let raster = raster_region_iou(&pred, &gt, 1000);
            assert!(
                (exact - raster).abs() < 1e-2,
                "exact {exact} vs raster {raster} for {pred:?} / {gt:?}"
            );
        }
    }

    #[test]
    fn nms_suppresses_heavy_overlap() {
        let a = r(0.0, 0.0, 2.0, 2.0);
        let b = r(0.1, 0.0, 2.1, 2.0);
        // IoU(A,B) = 3.8/4.2, well above 0.3
        assert!((iou(&a, &b).unwrap() - 3.8 / 4.2).abs() < 1e-12);
        let kept = nms(&[a, b], &[0.9, 0.8], 0.3).unwrap();
        assert_eq!(kept, vec![0]);
    }

    #[test]
    fn nms_keeps_disjoint_boxes() {
        let a = r(0.0, 0.0, 1.0, 1.0);
        let b = r(5.0, 5.0, 6.0, 6.0);
        let kept = nms(&[a, b], &[0.9, 0.8], 0.3).unwrap();
        assert_eq!(kept, vec![0, 1]);
    }

    #[test]
    fn nms_ties_break_to_lower_index() {
        let a = r(0.0, 0.0, 2.0, 2.0);
        let b = r(0.1, 0.0, 2.1, 2.0);
        let kept = nms(&[a, b], &[0.7, 0.7], 0.3).unwrap();
        assert_eq!(kept, vec![0]);
        let kept_rev = nms(&[b, a], &[0.7, 0.7], 0.3).unwrap();
        assert_eq!(kept_rev, vec![0]);
    }

    #[test]
    fn nms_matches_reference_on_random_sets() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..100 {
            let n = rng.gen_range(1..30);
            let rects: Vec<Rect> = (0..n).map(|_| random_rect(&mut rng)).collect();
            let scores: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
            assert_eq!(
                nms(&rects, &scores, 0.3).unwrap(),
                nms_reference(&rects, &scores, 0.3)
            );
        }
    }

    #[test]
    fn nms_invariant_to_input_order_with_distinct_scores() {
        let rects = vec![
            r(0.0, 0.0, 2.0, 2.0),
            r(0.2, 0.0, 2.2, 2.0),
            r(5.0, 5.0, 6.0, 6.0),
            r(5.1, 5.0, 6.1, 6.0),
        ];
        let scores = vec![0.9, 0.8, 0.7, 0.95];
        let kept: Vec<Rect> = nms(&rects, &scores, 0.3).unwrap().iter().map(|&i| rects[i]).collect();
        let perm = [2usize, 0, 3, 1];
        let rects_p: Vec<Rect> = perm.iter().map(|&i| rects[i]).collect();
        let scores_p: Vec<f64> = perm.iter().map(|&i| scores[i]).collect();
        let mut kept_p: Vec<Rect> =
            nms(&rects_p, &scores_p, 0.3).unwrap().iter().map(|&i| rects_p[i]).collect();
        // same set of boxes survives regardless of presentation order
        for k in &kept {
            let pos = kept_p.iter().position(|r| r == k).expect("box missing after permutation");
            kept_p.remove(pos);
        }
        assert!(kept_p.is_empty());
    }
}
