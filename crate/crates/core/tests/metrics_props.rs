use hiertool::hierarchy::{Hierarchy, NodeId, NodeSet};
use hiertool::metrics::{hierarchical_precision, hierarchical_recall, sdl};
use proptest::prelude::*;

fn set(ids: &[u32]) -> NodeSet {
    ids.iter().map(|&i| NodeId(i)).collect()
}

fn nonempty() -> impl Strategy<Value = Vec<u32>> {
    prop::collection::vec(0u32..16, 1..10)
}

proptest! {
    #[test]
    fn sdl_is_symmetric(a in nonempty(), b in nonempty()) {
        prop_assert_eq!(sdl(&set(&a), &set(&b)), sdl(&set(&b), &set(&a)));
    }

    #[test]
    fn sdl_bounded_by_sizes(a in nonempty(), b in nonempty()) {
        let (s, t) = (set(&a), set(&b));
        let d = sdl(&s, &t);
        prop_assert!(d <= s.len() + t.len());
        prop_assert_eq!(d == s.len() + t.len(), s.intersection_len(&t) == 0);
    }

    #[test]
    fn perfect_scores_iff_zero_sdl(a in nonempty(), b in nonempty()) {
        let (s, t) = (set(&a), set(&b));
        let perfect = hierarchical_precision(&s, &t).unwrap() == 1.0 && hierarchical_recall(&s, &t).unwrap() == 1.0;
        prop_assert_eq!(perfect, sdl(&s, &t) == 0);
    }

    #[test]
    fn relabeling_preserves_metrics(a in nonempty(), b in nonempty(), perm in Just((0u32..16).collect::<Vec<_>>()).prop_shuffle()) {
        let (s, t) = (set(&a), set(&b));
        let relabel = |ids: &[u32]| set(&ids.iter().map(|&i| perm[i as usize]).collect::<Vec<_>>());
        let (s2, t2) = (relabel(&a), relabel(&b));
        prop_assert_eq!(sdl(&s, &t), sdl(&s2, &t2));
        prop_assert_eq!(hierarchical_precision(&s, &t).unwrap(), hierarchical_precision(&s2, &t2).unwrap());
        prop_assert_eq!(hierarchical_recall(&s, &t).unwrap(), hierarchical_recall(&s2, &t2).unwrap());
    }

    #[test]
    fn prefix_paths_penalize_the_right_side(leaf in 0usize..12, cut in 0usize..2) {
        let h = Hierarchy::parse(&std::fs::read_to_string(
            concat!(env!("CARGO_MANIFEST_DIR"), "/fixtures/toy21.tsv")).unwrap()).unwrap();
        let full = &h.leaf_paths()[leaf];
        let short = full.truncate(cut).unwrap();
        let (f, s) = (h.ancestor_closure(full).unwrap(), h.ancestor_closure(&short).unwrap());
        // under-specific prediction
        prop_assert_eq!(hierarchical_precision(&f, &s).unwrap(), 1.0);
        prop_assert!(hierarchical_recall(&f, &s).unwrap() < 1.0);
        // over-specific prediction
        prop_assert_eq!(hierarchical_recall(&s, &f).unwrap(), 1.0);
        prop_assert!(hierarchical_precision(&s, &f).unwrap() < 1.0);
    }
}
