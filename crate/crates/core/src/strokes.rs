//! Stroke matching: split a skeleton into strokes, describe each stroke with
//! a 10-dimensional vector, and score two glyphs by best-match cosine
//! similarity of their stroke descriptors.

use std::collections::HashSet;
use std::f64::consts::PI;

use crate::mask::Mask;
use crate::skeleton::{skeletonize, Pixel, SkeletonGraph};
use crate::store::{binarize, GlyphImage};

/// Number of orientation histogram bins.
pub const ORIENTATION_BINS: usize = 8;
/// Flattened descriptor length: length, curvature, orientation histogram.
pub const DESCRIPTOR_DIM: usize = 2 + ORIENTATION_BINS;

/// An ordered run of skeleton pixels between salient points (or a closed
/// loop, whose first and last points coincide).
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct Stroke {
    pub points: Vec<Pixel>,
}

impl Stroke {
    pub fn new(points: Vec<Pixel>) -> Self {
        Stroke { points }
    }

    pub fn is_closed(&self) -> bool {
        self.points.len() > 2 && self.points.first() == self.points.last()
    }

    pub fn reversed(&self) -> Self {
        Stroke::new(self.points.iter().rev().copied().collect())
    }

    /// Traversal in canonical direction: open strokes start at the
    /// lexicographically smaller end; closed strokes keep their start and
    /// head toward its smaller neighbor along the loop.
    pub fn canonical(&self) -> Self {
        let pts = &self.points;
        if pts.len() < 2 {
            return self.clone();
        }
        if !self.is_closed() {
            return if pts.last() < pts.first() { self.reversed() } else { self.clone() };
        }
        // Closed strokes keep their anchor (a junction, or the smallest pixel
        // of a pure cycle) and run toward the smaller of its two neighbors.
        if pts[pts.len() - 2] < pts[1] {
            self.reversed()
        } else {
            self.clone()
        }
    }
}

/// Splits a skeleton graph into strokes, ordered by their point sequences.
pub fn decompose_strokes(g: &SkeletonGraph) -> Vec<Stroke> {
    let mut used: HashSet<(usize, usize)> = HashSet::new();
    let key = |a: usize, b: usize| if a < b { (a, b) } else { (b, a) };
    let mut strokes = Vec::new();

    for s in 0..g.len() {
        if !g.is_salient(s) {
            continue;
        }
        if g.degree(s) == 0 {
            strokes.push(Stroke::new(vec![g.node(s)]));
            continue;
        }
        for &n in g.neighbors(s) {
            if used.contains(&key(s, n)) {
                continue;
            }
            used.insert(key(s, n));
            let mut path = vec![s, n];
            let (mut prev, mut cur) = (s, n);
            while !g.is_salient(cur) {
                let Some(next) = g
                    .neighbors(cur)
                    .iter()
                    .copied()
                    .find(|&x| x != prev && !used.contains(&key(cur, x)))
                else {
                    break;
                };
                used.insert(key(cur, next));
                path.push(next);
                prev = cur;
                cur = next;
            }
            strokes.push(orient(g, &path));
        }
    }

    // Whatever is left consists of pure cycles without salient points.
    for start in 0..g.len() {
        let Some(&first) = g.neighbors(start).iter().find(|&&n| !used.contains(&key(start, n))) else {
            continue;
        };
        // `start` is the smallest pixel of its cycle because nodes are
        // row-major and every earlier pixel of this cycle would have claimed it.
        let fwd = g
            .neighbors(start)
            .iter()
            .copied()
            .filter(|&n| !used.contains(&key(start, n)))
            .min_by_key(|&n| g.node(n))
            .unwrap_or(first);
        let mut path = vec![start, fwd];
        used.insert(key(start, fwd));
        let (mut prev, mut cur) = (start, fwd);
        while cur != start {
            let Some(next) = g
                .neighbors(cur)
                .iter()
                .copied()
                .find(|&x| x != prev && !used.contains(&key(cur, x)))
            else {
                break;
            };
            used.insert(key(cur, next));
            path.push(next);
            prev = cur;
            cur = next;
        }
        strokes.push(Stroke::new(path.into_iter().map(|i| g.node(i)).collect()));
    }

    strokes.sort();
    strokes
}

fn orient(g: &SkeletonGraph, path: &[usize]) -> Stroke {
    Stroke::new(path.iter().map(|&i| g.node(i)).collect()).canonical()
}

/// Length, curvature and orientation histogram of one stroke.
#[derive(Clone, Debug, PartialEq)]
pub struct StrokeDescriptor {
    pub norm_length: f64,
    pub avg_curvature: f64,
    pub orient_hist: [f64; ORIENTATION_BINS],
}

impl StrokeDescriptor {
    pub fn to_vec(&self) -> [f64; DESCRIPTOR_DIM] {
        let mut v = [0.0; DESCRIPTOR_DIM];
        v[0] = self.norm_length;
        v[1] = self.avg_curvature;
        v[2..].copy_from_slice(&self.orient_hist);
        v
    }
}

/// Wraps an angle into (−π, π].
pub fn wrap_angle(a: f64) -> f64 {
    let mut w = a.rem_euclid(2.0 * PI);
    if w > PI {
        w -= 2.0 * PI;
    }
    w
}

/// Bin index over [−π, π] with eight half-open bins; π lands in the last.
pub fn orientation_bin(theta: f64) -> usize {
    let width = 2.0 * PI / ORIENTATION_BINS as f64;
    (((theta + PI) / width).floor() as usize).min(ORIENTATION_BINS - 1)
}

/// Segment orientation with x to the right and y up.
fn segment_angle(a: Pixel, b: Pixel) -> f64 {
    let dy = a.0 as f64 - b.0 as f64;
    let dx = b.1 as f64 - a.1 as f64;
    dy.atan2(dx)
}

/// Describes a stroke. Length is normalized by `image_diag`.
pub fn describe_stroke(stroke: &Stroke, image_diag: f64) -> StrokeDescriptor {
    let s = stroke.canonical();
    let pts = &s.points;
    let mut hist = [0.0; ORIENTATION_BINS];
    if pts.len() < 2 {
        return StrokeDescriptor {
            norm_length: 0.0,
            avg_curvature: 0.0,
            orient_hist: hist,
        };
    }
    let mut length = 0.0;
    let mut angles = Vec::with_capacity(pts.len() - 1);
    for w in pts.windows(2) {
        let dr = w[1].0 as f64 - w[0].0 as f64;
        let dc = w[1].1 as f64 - w[0].1 as f64;
        length += (dr * dr + dc * dc).sqrt();
        angles.push(segment_angle(w[0], w[1]));
    }
    for &t in &angles {
        hist[orientation_bin(t)] += 1.0;
    }
    let n = angles.len() as f64;
    for h in &mut hist {
        *h /= n;
    }
    let avg_curvature = if angles.len() < 2 {
        0.0
    } else {
        angles.windows(2).map(|w| wrap_angle(w[1] - w[0]).abs()).sum::<f64>() / (angles.len() - 1) as f64
    };
    StrokeDescriptor {
        norm_length: length / image_diag,
        avg_curvature,
        orient_hist: hist,
    }
}

/// Cosine similarity. Two zero vectors (single-pixel strokes) count as a
/// perfect match; a zero vector against anything else scores zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 && nb == 0.0 {
        1.0
    } else if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Pairwise cosine similarities between two descriptor sets.
pub fn similarity_matrix(a: &[StrokeDescriptor], b: &[StrokeDescriptor]) -> Vec<Vec<f64>> {
    let bv: Vec<_> = b.iter().map(StrokeDescriptor::to_vec).collect();
    a.iter()
        .map(|d| {
            let dv = d.to_vec();
            bv.iter().map(|e| cosine(&dv, e)).collect()
        })
        .collect()
}

/// Symmetric best-match similarity of two descriptor sets, in [0, 1] for
/// non-negative descriptors. Zero if either set is empty.
pub fn similarity(a: &[StrokeDescriptor], b: &[StrokeDescriptor]) -> f64 {
    if a.is_empty() || b.is_empty() {
        return 0.0;
    }
    let s = similarity_matrix(a, b);
    let row = s.iter().map(|r| r.iter().copied().fold(f64::NEG_INFINITY, f64::max)).sum::<f64>() / a.len() as f64;
    let col = (0..b.len())
        .map(|v| s.iter().map(|r| r[v]).fold(f64::NEG_INFINITY, f64::max))
        .sum::<f64>()
        / b.len() as f64;
    0.5 * (row + col)
}

/// Stroke descriptors of a skeleton mask.
pub fn describe_skeleton(skeleton: &Mask) -> Vec<StrokeDescriptor> {
    let diag = ((skeleton.rows().pow(2) + skeleton.cols().pow(2)) as f64).sqrt();
    let g = SkeletonGraph::build(skeleton);
    decompose_strokes(&g).iter().map(|s| describe_stroke(s, diag)).collect()
}

/// Binarize, thin and describe a glyph.
pub fn describe_glyph(img: &GlyphImage, threshold: f32) -> Vec<StrokeDescriptor> {
    describe_skeleton(&skeletonize(&binarize(img, threshold)))
}

/// Structural similarity of two glyph images.
pub fn smc_score(a: &GlyphImage, b: &GlyphImage, threshold: f32) -> f64 {
    similarity(&describe_glyph(a, threshold), &describe_glyph(b, threshold))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bar(m: &mut Mask, rows: std::ops::Range<usize>, cols: std::ops::Range<usize>) {
        for r in rows {
            for c in cols.clone() {
                m.set(r, c, true);
            }
        }
    }

    fn graph(m: &Mask) -> SkeletonGraph {
        SkeletonGraph::build(m)
    }

    #[test]
    fn straight_path_is_one_stroke() {
        let mut m = Mask::new(16, 16);
        bar(&mut m, 4..5, 2..12);
        let strokes = decompose_strokes(&graph(&m));
        assert_eq!(strokes.len(), 1);
        assert_eq!(strokes[0].points.len(), 10);
        assert_eq!(strokes[0].points[0], (4, 2));
    }

    #[test]
    fn plus_graph_has_four_arms() {
        let mut m = Mask::new(11, 11);
        bar(&mut m, 5..6, 1..10);
        bar(&mut m, 1..10, 5..6);
        let strokes = decompose_strokes(&graph(&m));
        assert_eq!(strokes.len(), 4);
        for s in &strokes {
            assert!(s.points.contains(&(5, 5)));
            assert_eq!(s.points.len(), 5);
        }
    }

    #[test]
    fn ring_is_one_closed_stroke() {
        let m = Mask::from_ascii(
            "
            .......
            ..###..
            .#...#.
            .#...#.
            .#...#.
            ..###..
            .......
            ",
        );
        let g = graph(&m);
        assert!(g.salient_points().is_empty());
        let strokes = decompose_strokes(&g);
        assert_eq!(strokes.len(), 1);
        let s = &strokes[0];
        assert!(s.is_closed());
        assert_eq!(s.points.len(), m.count() + 1);
        assert_eq!(s.points[0], (1, 2));
        assert_eq!(s.points[1], (1, 3));
    }

    #[test]
    fn horizontal_stroke_descriptor() {
        let s = Stroke::new((0..11).map(|c| (10, c)).collect());
        let diag = 64.0 * 2f64.sqrt();
        let d = describe_stroke(&s, diag);
        assert!((d.norm_length - 10.0 / diag).abs() < 1e-12);
        assert!((d.norm_length - 0.1105).abs() < 1e-4);
        assert_eq!(d.avg_curvature, 0.0);
        let bin = orientation_bin(0.0);
        assert_eq!(bin, 4);
        assert_eq!(d.orient_hist[bin], 1.0);
        assert_eq!(d.orient_hist.iter().sum::<f64>(), 1.0);
    }

    #[test]
    fn single_point_descriptor_is_zero() {
        let d = describe_stroke(&Stroke::new(vec![(3, 3)]), 10.0);
        assert_eq!(d.to_vec(), [0.0; DESCRIPTOR_DIM]);
        assert_eq!(similarity(&[d.clone()], &[d.clone()]), 1.0);
        let line = describe_stroke(&Stroke::new((0..5).map(|c| (0, c)).collect()), 10.0);
        assert_eq!(similarity(&[d], &[line]), 0.0);
    }

    #[test]
    fn l_stroke_curvature() {
        // Two 5-pixel legs sharing the corner: 8 segments, one turn of π/2
        // among 7 successive pairs.
        let mut pts: Vec<Pixel> = (0..5).map(|r| (r, 0)).collect();
        pts.extend((1..5).map(|c| (4, c)));
        let d = describe_stroke(&Stroke::new(pts), 64.0);
        assert!((d.avg_curvature - (PI / 2.0) / 7.0).abs() < 1e-12);
    }

    #[test]
    fn pi_folds_into_last_bin() {
        assert_eq!(orientation_bin(PI), 7);
        assert_eq!(orientation_bin(-PI), 0);
        assert_eq!(orientation_bin(-PI + PI / 4.0), 1);
    }

    #[test]
    fn wrap_range() {
        assert_eq!(wrap_angle(PI), PI);
        assert_eq!(wrap_angle(-PI), PI);
        assert!((wrap_angle(1.5 * PI) + 0.5 * PI).abs() < 1e-12);
    }

    #[test]
    fn orthogonal_sets_score_zero() {
        let mut a = StrokeDescriptor {
            norm_length: 1.0,
            avg_curvature: 0.0,
            orient_hist: [0.0; 8],
        };
        let mut b = a.clone();
        b.norm_length = 0.0;
        b.avg_curvature = 1.0;
        assert_eq!(similarity(&[a.clone()], &[b]), 0.0);
        a.orient_hist[0] = 1.0;
        assert!((similarity(&[a.clone()], &[a]) - 1.0).abs() < 1e-15);
        assert_eq!(similarity(&[], &[]), 0.0);
    }

    #[test]
    fn reversal_invariant_descriptor() {
        let pts: Vec<Pixel> = vec![(2, 2), (2, 3), (3, 4), (4, 4), (5, 5), (5, 6)];
        let s = Stroke::new(pts);
        assert_eq!(describe_stroke(&s, 9.0), describe_stroke(&s.reversed(), 9.0));
    }
}
