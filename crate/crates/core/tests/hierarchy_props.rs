use hiertool::hierarchy::{is_legal, legal_set, CorrectnessVector, Hierarchy};
use proptest::prelude::*;

/// Random full tree: `fanout[k][i]` children for the i-th node at level k.
fn tree_doc() -> impl Strategy<Value = String> {
    (1usize..=4, prop::collection::vec(1usize..=3, 64)).prop_map(|(depth, fan)| {
        let mut lines = vec!["#!levels".to_string(), "root\t-".to_string()];
        let mut frontier = vec!["root".to_string()];
        let mut next_id = 0;
        let mut draw = fan.iter().cycle();
        for level in 0..depth {
            lines[0].push_str(&format!(" l{level}"));
            let mut next = Vec::new();
            for parent in &frontier {
                for _ in 0..*draw.next().unwrap() {
                    let name = format!("n{next_id}");
                    next_id += 1;
                    lines.push(format!("{name}\t{parent}"));
                    next.push(name);
                }
            }
            frontier = next;
        }
        lines.join("\n")
    })
}

fn parent_names(h: &Hierarchy) -> Vec<(String, String)> {
    let mut v: Vec<(String, String)> = h
        .node_ids()
        .map(|id| {
            let parent = h.parent(id).map_or(h.root_name().to_string(), |p| h.name(p).to_string());
            (h.name(id).to_string(), parent)
        })
        .collect();
    v.sort();
    v
}

proptest! {
    #[test]
    fn serialize_round_trip_preserves_tree(doc in tree_doc()) {
        let h = Hierarchy::parse(&doc).unwrap();
        let back = Hierarchy::parse(&h.to_document()).unwrap();
        prop_assert_eq!(parent_names(&h), parent_names(&back));
        prop_assert_eq!(h.level_names(), back.level_names());
        prop_assert_eq!(h.level_sizes(), back.level_sizes());
    }

    #[test]
    fn reordered_lines_give_the_same_tree(doc in tree_doc(), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let h = Hierarchy::parse(&doc).unwrap();
        let mut lines: Vec<&str> = doc.lines().collect();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        lines[1..].shuffle(&mut rng);
        let shuffled = Hierarchy::parse(&lines.join("\n")).unwrap();
        prop_assert_eq!(parent_names(&h), parent_names(&shuffled));
    }

    #[test]
    fn correct_prefix_vectors_are_legal(doc in tree_doc(), pick in any::<prop::sample::Index>()) {
        let h = Hierarchy::parse(&doc).unwrap();
        let ids: Vec<_> = h.node_ids().collect();
        let p = h.path_to(ids[pick.index(ids.len())]);
        let mut bits = vec![1u8; p.len()];
        bits.resize(h.depth(), 0);
        prop_assert!(is_legal(&CorrectnessVector::from_bits(&bits)));
    }

    #[test]
    fn closure_is_monotone_under_truncation(doc in tree_doc(), pick in any::<prop::sample::Index>()) {
        let h = Hierarchy::parse(&doc).unwrap();
        let leaves = h.leaf_paths();
        let p = &leaves[pick.index(leaves.len())];
        let full = h.ancestor_closure(p).unwrap();
        for k in 0..p.len() {
            let part = h.ancestor_closure(&p.truncate(k).unwrap()).unwrap();
            prop_assert!(part.is_subset(&full));
            prop_assert_eq!(part.len(), k + 1);
        }
    }

    #[test]
    fn legal_set_has_one_vector_per_level(d in 1usize..=12) {
        let set = legal_set(d);
        prop_assert_eq!(set.len(), d);
        prop_assert!(set.iter().all(is_legal));
    }
}
