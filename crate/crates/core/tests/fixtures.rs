use std::path::PathBuf;

use hiertool::embeddings::{build_query_matrix, label_tokens, WordVectorTable};
use hiertool::hierarchy::Hierarchy;

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

fn load(name: &str) -> Hierarchy {
    Hierarchy::parse(&std::fs::read_to_string(fixture(name)).unwrap()).unwrap()
}

fn vectors() -> WordVectorTable {
    WordVectorTable::load(&fixture("vectors50.txt"), 50).unwrap()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

#[test]
fn cub_style_tree_shape() {
    let h = load("cub_style.tsv");
    assert_eq!(h.depth(), 3);
    assert_eq!(h.len(), 251);
    assert_eq!(h.level_sizes(), vec![13, 38, 200]);
    assert_eq!(h.level_names(), ["order", "family", "species"]);
    assert_eq!(h.leaf_paths().len(), 200);
}

#[test]
fn toy_trees_shape() {
    assert_eq!(load("toy21.tsv").level_sizes(), vec![3, 6, 12]);
    assert_eq!(load("toy9.tsv").level_sizes(), vec![2, 3, 4]);
}

#[test]
fn vectors_cover_every_fixture_label() {
    let table = vectors();
    assert!(std::fs::metadata(fixture("vectors50.txt")).unwrap().len() <= 1 << 20);
    for name in ["cub_style.tsv", "toy21.tsv", "toy9.tsv"] {
        let h = load(name);
        for id in h.node_ids() {
            for t in label_tokens(h.name(id)) {
                assert!(table.get(&t).is_some(), "{name}: {t}");
            }
        }
        let q = build_query_matrix(&table, &h).unwrap();
        assert_eq!(q.len(), h.len());
        assert_eq!(q.dim(), 50);
    }
    assert_eq!(build_query_matrix(&table, &load("toy21.tsv")).unwrap().len(), 21);
}

#[test]
fn shared_tokens_raise_cosine() {
    let h = load("cub_style.tsv");
    let table = vectors();
    let q = build_query_matrix(&table, &h).unwrap();
    let order = h.canonical_order();
    let tokens: Vec<Vec<String>> = order.iter().map(|&id| label_tokens(h.name(id))).collect();
    let (mut shared, mut other) = (Vec::new(), Vec::new());
    for i in 0..order.len() {
        for j in i + 1..order.len() {
            let c = cosine(&q.rows()[i], &q.rows()[j]);
            if tokens[i].iter().any(|t| tokens[j].contains(t)) {
                shared.push(c);
            } else {
                other.push(c);
            }
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    assert!(shared.len() > 100);
    assert!(mean(&shared) > mean(&other) + 0.2, "{} vs {}", mean(&shared), mean(&other));
}
