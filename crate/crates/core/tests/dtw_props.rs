mod common;

use common::oracles::{dtw_exhaustive, path_cost, subsequence_exhaustive};
use proptest::prelude::*;
use vidseq::dtw::{
    bidtw, bidtw_alignment, dtw, rank_candidates, rank_candidates_serial, subsequence_dtw, BidtwMode, Direction,
    DtwConfig, EmbeddingSequence, Scope,
};

const MODES: [BidtwMode; 3] = [BidtwMode::Forward, BidtwMode::BothReversed, BidtwMode::OneReversed];
const SCOPES: [Scope; 2] = [Scope::Full, Scope::Subsequence];

fn seq(dim: usize, max_len: usize) -> impl Strategy<Value = EmbeddingSequence> {
    (1..=max_len).prop_flat_map(move |len| {
        prop::collection::vec(-2.0f64..2.0, len * dim)
            .prop_map(move |data| EmbeddingSequence::from_flat("s", dim, data).unwrap())
    })
}

fn pair(max_len: usize) -> impl Strategy<Value = (EmbeddingSequence, EmbeddingSequence)> {
    (1usize..4).prop_flat_map(move |dim| (seq(dim, max_len), seq(dim, max_len)))
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * (1.0 + a.abs().max(b.abs()))
}

fn sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn full_dtw_is_symmetric((a, b) in pair(7)) {
        prop_assert!(close(dtw(&a, &b).unwrap().cost, dtw(&b, &a).unwrap().cost));
    }

    #[test]
    fn self_alignment_costs_nothing(a in seq(3, 9)) {
        for mode in MODES {
            for scope in SCOPES {
                prop_assert_eq!(bidtw(&a, &a, mode, scope).unwrap(), 0.0);
            }
        }
    }

    #[test]
    fn contained_query_costs_nothing(c in seq(2, 10), start in 0usize..10, len in 1usize..10) {
        let start = start % c.len();
        let len = 1 + (len - 1) % (c.len() - start);
        let q = c.window(start, len);
        prop_assert_eq!(subsequence_dtw(&q, &c).unwrap().cost, 0.0);
        prop_assert_eq!(bidtw(&q.reversed(), &c, BidtwMode::OneReversed, Scope::Subsequence).unwrap(), 0.0);
    }

    #[test]
    fn reversal_modes_never_exceed_forward((a, b) in pair(7)) {
        for scope in SCOPES {
            let fwd = bidtw(&a, &b, BidtwMode::Forward, scope).unwrap();
            for mode in MODES {
                prop_assert!(bidtw(&a, &b, mode, scope).unwrap() <= fwd);
            }
        }
    }

    #[test]
    fn subsequence_never_exceeds_full((a, b) in pair(7)) {
        prop_assert!(subsequence_dtw(&a, &b).unwrap().cost <= dtw(&a, &b).unwrap().cost + 1e-12);
    }

    #[test]
    fn returned_paths_are_valid_and_sum_to_the_cost((a, b) in pair(7), mode_i in 0usize..3, scope_i in 0usize..2) {
        let (mode, scope) = (MODES[mode_i], SCOPES[scope_i]);
        let r = bidtw_alignment(&a, &b, mode, scope).unwrap();
        let (qa, qb) = match (r.direction, mode) {
            (Direction::Forward, _) => (a.clone(), b.clone()),
            (Direction::Reversed, BidtwMode::BothReversed) => (a.reversed(), b.reversed()),
            (Direction::Reversed, _) => (a.reversed(), b.clone()),
        };
        let along = path_cost(&qa, &qb, &r.path, scope == Scope::Subsequence);
        prop_assert!(along.is_some(), "invalid path {:?}", r.path);
        prop_assert!(close(along.unwrap(), r.cost));
    }

    #[test]
    fn both_reversed_full_equals_forward_full((a, b) in pair(7)) {
        // Reversing both sides maps warping paths one to one.
        let f = bidtw(&a, &b, BidtwMode::Forward, Scope::Full).unwrap();
        prop_assert!(close(dtw(&a.reversed(), &b.reversed()).unwrap().cost, f));
    }

    #[test]
    fn singleton_query_is_forced((q, b) in (1usize..4).prop_flat_map(|d| (seq(d, 1), seq(d, 8)))) {
        let full: f64 = (0..b.len()).map(|j| sq(q.get(0), b.get(j))).sum();
        prop_assert!(close(dtw(&q, &b).unwrap().cost, full));
        let best = (0..b.len()).map(|j| sq(q.get(0), b.get(j))).fold(f64::INFINITY, f64::min);
        prop_assert!(close(subsequence_dtw(&q, &b).unwrap().cost, best));
    }

    #[test]
    fn small_cases_match_enumeration((a, b) in pair(5)) {
        prop_assert!(close(dtw(&a, &b).unwrap().cost, dtw_exhaustive(&a, &b)));
        prop_assert!(close(subsequence_dtw(&a, &b).unwrap().cost, subsequence_exhaustive(&a, &b)));
    }

    #[test]
    fn ranking_is_a_stable_full_sort(
        q in seq(2, 5),
        cands in prop::collection::vec(seq(2, 6), 1..12),
        k in 1usize..16,
        mode_i in 0usize..3,
        scope_i in 0usize..2,
    ) {
        let cfg = DtwConfig { mode: MODES[mode_i], scope: SCOPES[scope_i] };
        let cands: Vec<_> = cands.into_iter().enumerate().map(|(i, c)| c.with_id(format!("v{:02}", i % 7))).collect();
        let par = rank_candidates(&q, &cands, k, cfg).unwrap();
        let ser = rank_candidates_serial(&q, &cands, k, cfg).unwrap();
        prop_assert_eq!(&par, &ser);
        prop_assert_eq!(par.len(), k.min(cands.len()));

        let mut all: Vec<(f64, String)> = cands
            .iter()
            .map(|c| (bidtw(&q, c, cfg.mode, cfg.scope).unwrap(), c.video_id().to_string()))
            .collect();
        all.sort_by(|x, y| x.0.partial_cmp(&y.0).unwrap().then(x.1.cmp(&y.1)));
        for (r, (cost, id)) in par.iter().zip(&all) {
            prop_assert_eq!(r.cost, *cost);
            prop_assert_eq!(&r.video_id, id);
        }
    }
}

#[test]
fn one_reversed_matches_a_backwards_copy() {
    let a = EmbeddingSequence::from_scalars("a", &[1.0, 2.0, 3.0, 4.0]).unwrap();
    let b = EmbeddingSequence::from_scalars("b", &[0.0, 4.0, 3.0, 2.0, 1.0, 0.0]).unwrap();
    assert!(bidtw(&a, &b, BidtwMode::Forward, Scope::Subsequence).unwrap() > 0.0);
    assert_eq!(bidtw(&a, &b, BidtwMode::BothReversed, Scope::Subsequence).unwrap(), bidtw(&a, &b, BidtwMode::Forward, Scope::Subsequence).unwrap());
    let r = bidtw_alignment(&a, &b, BidtwMode::OneReversed, Scope::Subsequence).unwrap();
    assert_eq!(r.cost, 0.0);
    assert_eq!(r.direction, Direction::Reversed);
    assert_eq!(r.path, vec![(0, 1), (1, 2), (2, 3), (3, 4)]);
}

#[test]
fn mismatched_dimensions_and_empty_candidates_are_errors() {
    let a = EmbeddingSequence::from_flat("a", 2, vec![0.0; 4]).unwrap();
    let b = EmbeddingSequence::from_flat("b", 3, vec![0.0; 6]).unwrap();
    assert_eq!(dtw(&a, &b).unwrap_err().kind(), "dimension-mismatch");
    let none: Vec<EmbeddingSequence> = Vec::new();
    assert!(rank_candidates(&a, &none, 3, DtwConfig::default()).is_err());
}
