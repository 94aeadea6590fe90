use hiertool::embeddings::{build_query_matrix, WordVectorTable};
use hiertool::hierarchy::Hierarchy;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const TOY9: &str = include_str!("../fixtures/toy9.tsv");
const VECTORS: &str = include_str!("../fixtures/vectors50.txt");

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn line_order_does_not_matter(seed in any::<u64>()) {
        let h = Hierarchy::parse(TOY9).unwrap();
        let mut lines: Vec<&str> = VECTORS.lines().collect();
        lines.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let a = WordVectorTable::parse(VECTORS, 50).unwrap();
        let b = WordVectorTable::parse(&lines.join("\n"), 50).unwrap();
        prop_assert_eq!(a.len(), b.len());
        prop_assert_eq!(build_query_matrix(&a, &h).unwrap(), build_query_matrix(&b, &h).unwrap());
    }

    #[test]
    fn labels_embed_case_insensitively(flips in prop::collection::vec(any::<bool>(), 32)) {
        let table = WordVectorTable::parse(VECTORS, 50).unwrap();
        let h = Hierarchy::parse(TOY9).unwrap();
        for id in h.node_ids() {
            let name = h.name(id);
            let mixed: String = name
                .chars()
                .zip(flips.iter().cycle())
                .map(|(c, &up)| if up { c.to_ascii_uppercase() } else { c.to_ascii_lowercase() })
                .collect();
            prop_assert_eq!(table.embed_label(name).unwrap(), table.embed_label(&mixed).unwrap());
        }
    }

    #[test]
    fn row_order_follows_the_hierarchy(scale in 0.1f64..10.0) {
        // a different table over the same vocabulary gives rows in the same
        // category order
        let h = Hierarchy::parse(TOY9).unwrap();
        let a = WordVectorTable::parse(VECTORS, 50).unwrap();
        let scaled: String = VECTORS
            .lines()
            .map(|l| {
                let mut f = l.split_whitespace();
                let tok = f.next().unwrap().to_string();
                let rest: Vec<String> = f.map(|x| format!("{}", x.parse::<f64>().unwrap() * scale)).collect();
                format!("{tok} {}", rest.join(" "))
            })
            .collect::<Vec<_>>()
            .join("\n");
        let b = WordVectorTable::parse(&scaled, 50).unwrap();
        let (qa, qb) = (build_query_matrix(&a, &h).unwrap(), build_query_matrix(&b, &h).unwrap());
        for (ra, rb) in qa.rows().iter().zip(qb.rows()) {
            for (x, y) in ra.iter().zip(rb) {
                prop_assert!((x * scale - y).abs() <= 1e-9 * (1.0 + y.abs()));
            }
        }
    }
}
