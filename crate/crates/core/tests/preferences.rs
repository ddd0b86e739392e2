mod common;

use fontgen::selector::{rank_candidates, sample_pools, select_from_references, PreferenceTable};
use fontgen::strokes::{similarity, StrokeDescriptor};
use fontgen::Error;
use proptest::prelude::*;

#[test]
fn same_seed_builds_identical_bytes() {
    let ds = common::fixture(6, 32, 1, 2);
    let a = common::table(&ds, 42).to_bytes();
    let b = common::table(&ds, 42).to_bytes();
    assert_eq!(a, b);
    assert_ne!(a, common::table(&ds, 43).to_bytes());
    assert_eq!(&a[..8], b"DRGPREF1");
    let field = |o: usize| u32::from_le_bytes(a[o..o + 4].try_into().unwrap());
    assert_eq!((field(8), field(12), field(16)), (6, 26, 10));
}

#[test]
fn file_round_trip_keeps_choices() {
    let ds = common::fixture(5, 32, 1, 2);
    let t = common::table(&ds, 1);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("prefs.drgpref");
    t.write(&path).unwrap();
    let back = PreferenceTable::read(&path).unwrap();
    assert_eq!(back.to_bytes(), t.to_bytes());
    assert_eq!(back.pools(), t.pools());
    for f in 0..5 {
        for c in 0..26 {
            assert_eq!(back.best(f, c).unwrap(), t.best(f, c).unwrap());
        }
    }
}

#[test]
fn truncated_file_is_a_format_error() {
    let ds = common::fixture(3, 32, 0, 2);
    let bytes = common::table(&ds, 1).to_bytes();
    assert!(matches!(PreferenceTable::from_bytes(&bytes[..bytes.len() - 1]), Err(Error::PrefFormat(_))));
}

#[test]
fn rankings_cover_pool_minus_target_best_first() {
    let ds = common::fixture(4, 32, 1, 2);
    let t = common::table(&ds, 3);
    for f in 0..4 {
        let pool = &t.pool(f).members;
        for c in 0..26 {
            let r = t.ranking(f, c);
            let expect = pool.iter().filter(|&&m| m != c).count();
            assert_eq!(r.len(), expect);
            assert!(r.iter().all(|x| x.char_id != c && pool.contains(&x.char_id)));
            assert!(r.windows(2).all(|w| w[0].score > w[1].score || (w[0].score == w[1].score && w[0].char_id < w[1].char_id)));
        }
    }
}

#[test]
fn pools_depend_only_on_seed_and_font() {
    let a = common::fixture(4, 32, 0, 2);
    let b = common::fixture(6, 32, 0, 2);
    let pa = sample_pools(&a, 10, 5).unwrap();
    let pb = sample_pools(&b, 10, 5).unwrap();
    assert_eq!(pa[..], pb[..4]);
    assert!(pa.iter().all(|p| p.members.len() == 10 && p.members.windows(2).all(|w| w[0] < w[1])));
}

#[test]
fn explicit_references_pick_the_closest_other_char() {
    let ds = common::fixture(3, 64, 0, 2);
    let refs: Vec<_> = (0..10).map(|c| ds.glyph(2, c).unwrap().clone()).collect();
    for target in 0..26 {
        let content = ds.content_glyph(target).unwrap();
        let chosen = select_from_references(content, &refs, 0.5).unwrap();
        assert_ne!(chosen.char_id, target);
        let best = refs
            .iter()
            .filter(|r| r.char_id != target)
            .map(|r| fontgen::strokes::smc_score(content, r, 0.5))
            .fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(fontgen::strokes::smc_score(content, chosen, 0.5), best);
    }
    // A lone reference is used even for its own character.
    let one = &refs[..1];
    let c = ds.content_glyph(0).unwrap();
    assert_eq!(select_from_references(c, one, 0.5).unwrap().char_id, 0);
}

fn descriptor() -> impl Strategy<Value = StrokeDescriptor> {
    (0.0f64..1.0, 0.0f64..3.2, prop::array::uniform8(0.0f64..1.0)).prop_map(|(l, k, h)| StrokeDescriptor {
        norm_length: l,
        avg_curvature: k,
        orient_hist: h,
    })
}

proptest! {
    #[test]
    fn similarity_is_symmetric_and_bounded(
        a in prop::collection::vec(descriptor(), 1..6),
        b in prop::collection::vec(descriptor(), 1..6),
    ) {
        let s = similarity(&a, &b);
        prop_assert!((0.0..=1.0 + 1e-12).contains(&s));
        prop_assert!((s - similarity(&b, &a)).abs() <= 1e-12);
        prop_assert!(similarity(&a, &a) >= 1.0 - 1e-12);
    }

    #[test]
    fn ranking_is_sorted_with_id_tie_break(
        target in prop::collection::vec(descriptor(), 1..4),
        cands in prop::collection::vec(prop::collection::vec(descriptor(), 1..4), 2..8),
        exclude in 0usize..8,
    ) {
        // Duplicate the first candidate under a later id to force a tie.
        let mut list: Vec<(usize, Vec<StrokeDescriptor>)> = cands.into_iter().enumerate().collect();
        let dup = (list.len(), list[0].1.clone());
        list.push(dup);
        let r = rank_candidates(&target, &list, exclude);
        prop_assert_eq!(r.len(), list.iter().filter(|(c, _)| *c != exclude).count());
        for w in r.windows(2) {
            prop_assert!(w[0].score > w[1].score || (w[0].score == w[1].score && w[0].char_id < w[1].char_id));
        }
        let best = list.iter().filter(|(c, _)| *c != exclude).map(|(_, d)| similarity(&target, d)).fold(f64::NEG_INFINITY, f64::max);
        prop_assert_eq!(r[0].score, best);
    }
}
