//! Thinning of binary glyph masks and the pixel graph of the resulting skeleton.
//!
//! Thinning follows the two sub-iteration Zhang–Suen scheme. Candidates are
//! selected on a snapshot as usual, but each is only removed if it is still
//! a simple point (Yokoi 8-connectivity number of 1) when its turn comes, so
//! mask components never split or vanish. A final pass strips the remaining
//! simple non-endpoint pixels, i.e. redundant staircase corners, which would
//! otherwise show up as spurious junctions in the graph.

use crate::mask::{Mask, NEIGHBORS_8};

/// Neighbors in Zhang–Suen order P2..P9: N, NE, E, SE, S, SW, W, NW.
fn ring(m: &Mask, r: usize, c: usize) -> [bool; 8] {
    let (r, c) = (r as isize, c as isize);
    let mut out = [false; 8];
    for (k, (dr, dc)) in NEIGHBORS_8.iter().enumerate() {
        out[k] = m.get_signed(r + dr, c + dc);
    }
    out
}

fn ink_count(p: &[bool; 8]) -> usize {
    p.iter().filter(|&&b| b).count()
}

/// Number of 0→1 transitions in the cyclic sequence P2, P3, ..., P9, P2.
fn transitions(p: &[bool; 8]) -> usize {
    (0..8).filter(|&k| !p[k] && p[(k + 1) % 8]).count()
}

/// Yokoi connectivity number for 8-connected foreground. A pixel is simple
/// (removable without changing topology) iff this equals 1.
fn connectivity_number(p: &[bool; 8]) -> usize {
    // Yokoi indexes x1=E, x2=NE, x3=N, x4=NW, x5=W, x6=SW, x7=S, x8=SE.
    let [n, ne, e, se, s, sw, w, nw] = *p;
    let x = [e, ne, n, nw, w, sw, s, se];
    let not = |k: usize| usize::from(!x[k % 8]);
    [0usize, 2, 4, 6]
        .iter()
        .map(|&k| not(k) - not(k) * not(k + 1) * not(k + 2))
        .sum()
}

fn removable(m: &Mask, r: usize, c: usize) -> bool {
    let p = ring(m, r, c);
    ink_count(&p) >= 2 && connectivity_number(&p) == 1
}

fn zhang_suen_candidate(p: &[bool; 8], first: bool) -> bool {
    let b = ink_count(p);
    if !(2..=6).contains(&b) || transitions(p) != 1 {
        return false;
    }
    let [n, _, e, _, s, _, w, _] = *p;
    if first {
        !(n && e && s) && !(e && s && w)
    } else {
        !(n && e && w) && !(n && s && w)
    }
}

fn sub_iteration(m: &mut Mask, first: bool) -> bool {
    let candidates: Vec<(usize, usize)> = m
        .ink()
        .filter(|&(r, c)| zhang_suen_candidate(&ring(m, r, c), first))
        .collect();
    let mut changed = false;
    for (r, c) in candidates {
        if connectivity_number(&ring(m, r, c)) == 1 {
            m.set(r, c, false);
            changed = true;
        }
    }
    changed
}

/// Thins a binary mask to a one-pixel-wide skeleton. The result is a subset
/// of the input with the same number of 8-connected components.
pub fn skeletonize(mask: &Mask) -> Mask {
    let mut m = mask.clone();
    loop {
        let a = sub_iteration(&mut m, true);
        let b = sub_iteration(&mut m, false);
        if !a && !b {
            break;
        }
    }
    loop {
        let redundant: Vec<(usize, usize)> = m.ink().collect();
        let mut changed = false;
        for (r, c) in redundant {
            if removable(&m, r, c) {
                m.set(r, c, false);
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    m
}

/// Pixel coordinate `(row, col)`.
pub type Pixel = (usize, usize);

/// A skeleton as a pixel graph over 8-neighborhoods.
///
/// Diagonal neighbors are linked only when neither shared 4-neighbor is ink
/// (m-adjacency). Components are the same as under plain 8-connectivity,
/// but pixels beside a junction do not pick up spurious extra degree.
#[derive(Clone, Debug)]
pub struct SkeletonGraph {
    nodes: Vec<Pixel>,
    adjacency: Vec<Vec<usize>>,
    salient: Vec<bool>,
    rows: usize,
    cols: usize,
    index: Vec<Option<usize>>,
}

impl SkeletonGraph {
    /// Builds the graph. Nodes are ordered row-major; salient points are
    /// pixels of degree 0, 1 or greater than 2.
    pub fn build(skeleton: &Mask) -> Self {
        let (rows, cols) = (skeleton.rows(), skeleton.cols());
        let nodes: Vec<Pixel> = skeleton.ink().collect();
        let mut index = vec![None; rows * cols];
        for (i, &(r, c)) in nodes.iter().enumerate() {
            index[r * cols + c] = Some(i);
        }
        let adjacency: Vec<Vec<usize>> = nodes
            .iter()
            .map(|&(r, c)| {
                NEIGHBORS_8
                    .iter()
                    .filter_map(|&(dr, dc)| {
                        let (r, c) = (r as isize, c as isize);
                        let (nr, nc) = (r + dr, c + dc);
                        // A diagonal link is redundant when a shared 4-neighbor
                        // already joins the two pixels.
                        let diagonal = dr != 0 && dc != 0;
                        let bridged = diagonal && (skeleton.get_signed(r + dr, c) || skeleton.get_signed(r, c + dc));
                        (skeleton.get_signed(nr, nc) && !bridged)
                            .then(|| index[nr as usize * cols + nc as usize].expect("ink pixel indexed"))
                    })
                    .collect()
            })
            .collect();
        let salient = adjacency.iter().map(|a| a.len() != 2).collect();
        SkeletonGraph {
            nodes,
            adjacency,
            salient,
            rows,
            cols,
            index,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[Pixel] {
        &self.nodes
    }

    pub fn node(&self, i: usize) -> Pixel {
        self.nodes[i]
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.adjacency[i]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.adjacency[i].len()
    }

    pub fn is_salient(&self, i: usize) -> bool {
        self.salient[i]
    }

    pub fn salient_points(&self) -> Vec<Pixel> {
        (0..self.len()).filter(|&i| self.salient[i]).map(|i| self.nodes[i]).collect()
    }

    pub fn index_of(&self, p: Pixel) -> Option<usize> {
        if p.0 >= self.rows || p.1 >= self.cols {
            return None;
        }
        self.index[p.0 * self.cols + p.1]
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }
}

/// Skeleton as a grayscale image (ink 1.0) with salient points at 0.5, for
/// debugging dumps.
pub fn debug_image(graph: &SkeletonGraph) -> crate::store::GlyphImage {
    let (rows, cols) = graph.dims();
    let mut px = vec![0.0f32; rows * cols];
    for (i, &(r, c)) in graph.nodes().iter().enumerate() {
        px[r * cols + c] = if graph.is_salient(i) { 0.5 } else { 1.0 };
    }
    crate::store::GlyphImage::new(rows, cols, px, 0, 0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bar(rows: std::ops::Range<usize>, cols: std::ops::Range<usize>, m: &mut Mask) {
        for r in rows {
            for c in cols.clone() {
                m.set(r, c, true);
            }
        }
    }

    #[test]
    fn empty_mask_gives_empty_skeleton() {
        let m = Mask::new(64, 64);
        assert!(skeletonize(&m).is_empty());
    }

    #[test]
    fn connectivity_number_cases() {
        // Straight line interior: not simple.
        let line = [false, false, true, false, false, false, true, false];
        assert_eq!(connectivity_number(&line), 2);
        // L corner with N and W set: simple.
        let corner = [true, false, false, false, false, false, true, false];
        assert_eq!(connectivity_number(&corner), 1);
        // Plus center: removing it would open a hole.
        let plus = [true, false, true, false, true, false, true, false];
        assert_eq!(connectivity_number(&plus), 0);
    }

    #[test]
    fn plus_sign_has_single_crossing() {
        let mut m = Mask::new(64, 64);
        bar(30..35, 8..56, &mut m);
        bar(8..56, 30..35, &mut m);
        let sk = skeletonize(&m);
        let g = SkeletonGraph::build(&sk);
        let deg4 = (0..g.len()).filter(|&i| g.degree(i) == 4).count();
        assert_eq!(deg4, 1, "{sk:?}");
        assert_eq!(g.salient_points().len(), 5, "{sk:?}");
    }

    #[test]
    fn path_has_two_endpoints() {
        let mut m = Mask::new(16, 16);
        bar(5..6, 3..13, &mut m);
        let g = SkeletonGraph::build(&m);
        assert_eq!(g.len(), 10);
        let sal = g.salient_points();
        assert_eq!(sal, vec![(5, 3), (5, 12)]);
    }

    #[test]
    fn isolated_pixel_is_salient() {
        let mut m = Mask::new(5, 5);
        m.set(2, 2, true);
        let g = SkeletonGraph::build(&m);
        assert_eq!(g.len(), 1);
        assert_eq!(g.degree(0), 0);
        assert!(g.is_salient(0));
        assert_eq!(skeletonize(&m), m);
    }

    #[test]
    fn square_block_keeps_one_component() {
        let mut m = Mask::new(6, 6);
        bar(2..4, 2..4, &mut m);
        let sk = skeletonize(&m);
        assert_eq!(sk.components(), 1);
        assert!(sk.count() >= 1 && sk.count() <= 2);
    }

    #[test]
    fn bar_matches_reference_thinning() {
        // scikit-image `skeletonize(method="zhang")` on this bar gives row 32,
        // cols 2..=60, plus a two-pixel hook (31, 61), (31, 62) left by its
        // parallel deletion order. The main path must agree exactly.
        let mut m = Mask::new(64, 64);
        bar(30..35, 0..64, &mut m);
        let sk = skeletonize(&m);
        let reference: Vec<Pixel> = (2..=60).map(|c| (32, c)).collect();
        let ours: Vec<Pixel> = sk.ink().collect();
        assert_eq!(ours, reference, "{sk:?}");
        let g = SkeletonGraph::build(&sk);
        assert_eq!(g.salient_points(), vec![(32, 2), (32, 60)]);
    }

    #[test]
    fn fixture_glyph_skeletons_are_thin() {
        use crate::store::{binarize, DEFAULT_THRESHOLD};
        for style in crate::synth::style_family(3, 11) {
            for ch in crate::synth::latin_alphabet() {
                let img = style.render(ch, 64).expect("letter defined");
                let m = binarize(&img, DEFAULT_THRESHOLD);
                let sk = skeletonize(&m);
                assert!(sk.is_subset_of(&m));
                assert_eq!(sk.components(), m.components(), "{} {ch}", style.name);
                assert!(solid_2x2(&sk).iter().all(|&(r, c)| is_crossing(&sk, r, c)), "{} {ch}\n{sk:?}", style.name);
            }
        }
    }

    /// Top-left corners of fully inked 2x2 blocks.
    fn solid_2x2(m: &Mask) -> Vec<Pixel> {
        let mut out = Vec::new();
        for r in 1..m.rows() {
            for c in 1..m.cols() {
                if m.get(r, c) && m.get(r - 1, c) && m.get(r, c - 1) && m.get(r - 1, c - 1) {
                    out.push((r - 1, c - 1));
                }
            }
        }
        out
    }

    /// A block where two diagonal strokes cross: no pixel can go without
    /// cutting off an arm.
    fn is_crossing(m: &Mask, r: usize, c: usize) -> bool {
        [(r, c), (r, c + 1), (r + 1, c), (r + 1, c + 1)]
            .iter()
            .all(|&(y, x)| connectivity_number(&ring(m, y, x)) != 1)
    }

    #[test]
    fn diagonal_crossing_keeps_its_nucleus() {
        let m = Mask::from_ascii(
            "
            #....#
            .#..#.
            ..##..
            ..##..
            .#..#.
            #....#
            ",
        );
        let sk = skeletonize(&m);
        assert_eq!(sk, m);
        assert_eq!(solid_2x2(&sk), vec![(2, 2)]);
        assert!(is_crossing(&sk, 2, 2));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn blob_mask() -> impl Strategy<Value = Mask> {
            prop::collection::vec((0usize..24, 0usize..24, 1usize..9, 1usize..9), 1..6).prop_map(|rects| {
                let mut m = Mask::new(24, 24);
                for (r, c, h, w) in rects {
                    bar(r..(r + h).min(24), c..(c + w).min(24), &mut m);
                }
                m
            })
        }

        fn noise_mask() -> impl Strategy<Value = Mask> {
            prop::collection::vec(prop::bool::weighted(0.55), 16 * 16).prop_map(|d| Mask::from_vec(16, 16, d))
        }

        proptest! {
            #[test]
            fn subset_idempotent_topology(m in prop_oneof![blob_mask(), noise_mask()]) {
                let sk = skeletonize(&m);
                prop_assert!(sk.is_subset_of(&m));
                prop_assert_eq!(skeletonize(&sk), sk.clone());
                prop_assert_eq!(sk.components(), m.components());
                let g = SkeletonGraph::build(&sk);
                for i in 0..g.len() {
                    prop_assert_eq!(g.is_salient(i), g.degree(i) != 2);
                }
            }
        }
    }
}
