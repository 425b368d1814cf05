use std::collections::BTreeSet;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use medtok::corpus::{CodingSystem, KnowledgeGraph, MedicalCode};
use medtok::fusion::FusedEmbeddings;
use medtok::graphenc::{extract_subgraph, GraphEncoderParams};
use medtok::numcore::Matrix;
use medtok::quantizer::{aggregate_quantize, quantize_all, select_topk, Codebook, RegionLayout, SharedScope};
use medtok::textenc::TextEmbeddingSet;
use medtok::tokenizer::{token_jaccard, TokenSequence};

fn codebook(n: usize, d: usize, values: &[f64]) -> Codebook {
    let rows = Matrix::new(n, d, values[..n * d].to_vec()).unwrap();
    Codebook::new(rows, RegionLayout::quarters(n).unwrap()).unwrap()
}

fn graph(n: usize, edges: &[(usize, usize)]) -> KnowledgeGraph {
    KnowledgeGraph::from_parts(
        (0..n).map(|i| (format!("n{i:02}"), ["x", "y", "z"][i % 3].to_string())),
        edges
            .iter()
            .map(|&(a, b)| (format!("n{:02}", a % n), "r".to_string(), format!("n{:02}", b % n))),
    )
    .unwrap()
}

fn code(nodes: &[usize]) -> MedicalCode {
    MedicalCode {
        code_id: "ICD9:1".into(),
        system: CodingSystem::ALL[0],
        description: "d".into(),
        kg_nodes: nodes.iter().map(|i| format!("n{i:02}")).collect::<BTreeSet<_>>().into_iter().collect(),
    }
}

proptest! {
    #[test]
    fn topk_is_sorted_and_in_range(
        values in prop::collection::vec(-3.0f64..3.0, 64 * 4),
        e in prop::collection::vec(-3.0f64..3.0, 4),
        k in 1usize..8,
    ) {
        let cb = codebook(64, 4, &values);
        let r = cb.layout().ranges()[1].clone();
        let (ids, dists) = select_topk(&e, &cb, r.clone(), k).unwrap();
        prop_assert_eq!(ids.len(), k);
        prop_assert!(ids.iter().all(|i| r.contains(i)));
        prop_assert!(dists.windows(2).all(|w| w[0] <= w[1]));
        prop_assert_eq!(ids.iter().collect::<BTreeSet<_>>().len(), k);
    }

    #[test]
    fn aggregate_is_a_convex_combination(
        values in prop::collection::vec(-3.0f64..3.0, 32 * 3),
        e in prop::collection::vec(-3.0f64..3.0, 3),
        k in 1usize..6,
    ) {
        let cb = codebook(32, 3, &values);
        let (ids, dists) = select_topk(&e, &cb, 0..32, k).unwrap();
        let g = aggregate_quantize(&ids, &dists, &cb).unwrap();
        prop_assert!((g.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(g.weights.iter().all(|&w| w > 0.0));
        // closer codewords never weigh less
        prop_assert!(g.weights.windows(2).all(|w| w[0] >= w[1]));
        for c in 0..3 {
            let col: Vec<f64> = ids.iter().map(|&i| cb.row(i)[c]).collect();
            let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(g.e_hat[c] >= lo - 1e-12 && g.e_hat[c] <= hi + 1e-12);
        }
    }

    #[test]
    fn tokens_stay_in_their_regions(
        values in prop::collection::vec(-2.0f64..2.0, 48 * 4),
        f in prop::collection::vec(-2.0f64..2.0, 16),
        scope in prop_oneof![Just(SharedScope::Full), Just(SharedScope::OwnSubregion)],
    ) {
        let cb = codebook(48, 4, &values);
        let fused = FusedEmbeddings {
            e_t_s: f[0..4].to_vec(),
            e_g_s: f[4..8].to_vec(),
            e_t_c: f[8..12].to_vec(),
            e_g_c: f[12..16].to_vec(),
        };
        let b = quantize_all(&fused, &cb, 3, scope).unwrap();
        let s = TokenSequence::from_bundle("c", &b);
        prop_assert_eq!(s.len(), 12);
        let o = cb.layout().offsets();
        prop_assert!(s.group(0).0.iter().all(|&t| t < o[1]));
        prop_assert!(s.group(1).0.iter().all(|&t| (o[1]..o[2]).contains(&t)));
        for g in 2..4 {
            prop_assert!(s.group(g).0.iter().all(|&t| t >= o[2]));
        }
        if scope == SharedScope::OwnSubregion {
            prop_assert!(s.group(2).0.iter().all(|&t| (o[2]..o[3]).contains(&t)));
            prop_assert!(s.group(3).0.iter().all(|&t| t >= o[3]));
        }
    }

    #[test]
    fn layout_from_fractions_partitions(n in 4usize..4096, f in prop::array::uniform4(0.05f64..1.0)) {
        let l = match RegionLayout::from_fractions(n, f) {
            Ok(l) => l,
            // only a region rounding down to nothing may be rejected
            Err(_) => {
                let total: f64 = f.iter().sum();
                prop_assert!(f.iter().any(|x| x / total * n as f64 <= 1.0));
                return Ok(());
            }
        };
        let r = l.ranges();
        prop_assert_eq!(r[0].start, 0);
        prop_assert_eq!(r[3].end, n);
        for w in r.windows(2) {
            prop_assert_eq!(w[0].end, w[1].start);
        }
        prop_assert!(r.iter().all(|x| !x.is_empty()));
        for id in [0, n / 2, n - 1] {
            prop_assert!(r[l.region_of(id).unwrap()].contains(&id));
        }
        prop_assert_eq!(l.region_of(n), None);
    }

    #[test]
    fn raising_cap_never_drops_nodes(
        n in 2usize..30,
        edges in prop::collection::vec((0usize..30, 0usize..30), 0..60),
        centers in prop::collection::vec(0usize..30, 1..3),
        hops in 0usize..4,
        cap in 1usize..20,
    ) {
        let kg = graph(n, &edges);
        let c = code(&centers.iter().map(|i| i % n).collect::<Vec<_>>());
        let small = extract_subgraph(&c, &kg, hops, cap);
        let big = extract_subgraph(&c, &kg, hops, cap + 5);
        let ids = |g: &medtok::graphenc::CodeSubgraph| g.nodes.iter().map(|v| v.id.clone()).collect::<BTreeSet<_>>();
        prop_assert!(ids(&small).is_subset(&ids(&big)));
        prop_assert_eq!(&small, &extract_subgraph(&c, &kg, hops, cap));
        for &ci in &small.centers {
            prop_assert!(c.kg_nodes.contains(&small.nodes[ci].id));
        }
        prop_assert_eq!(small.centers.len(), c.kg_nodes.len());
    }

    #[test]
    fn encoder_ignores_node_order(
        n in 2usize..12,
        edges in prop::collection::vec((0usize..12, 0usize..12), 1..24),
        seed in any::<u64>(),
    ) {
        let kg = graph(n, &edges);
        let g = extract_subgraph(&code(&[0]), &kg, 3, 64);
        let types: Vec<String> = ["<null>", "x", "y", "z"].map(String::from).to_vec();
        let p = GraphEncoderParams::init(&types, 5, 2, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let mut order: Vec<usize> = (0..g.len()).collect();
        order.reverse();
        let (a, _) = p.encode_graph(&g).unwrap();
        let (b, _) = p.encode_graph(&g.permuted(&order)).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn embedding_files_roundtrip(
        rows in prop::collection::vec(prop::collection::vec(-1e3f32..1e3, 3), 0..8),
        states in prop::collection::vec(1usize..4, 0..8),
    ) {
        let mut set = TextEmbeddingSet::new(3);
        for (i, r) in rows.iter().enumerate() {
            set.insert_pooled(&format!("ICD9:{i}"), r).unwrap();
            if let Some(&len) = states.get(i) {
                set.insert_states(&format!("ICD9:{i}"), len, r.repeat(len)).unwrap();
            }
        }
        let dir = tempfile::tempdir().unwrap();
        let (p, s) = (dir.path().join("p.bin"), dir.path().join("s.bin"));
        set.save(&p, Some(&s)).unwrap();
        let back = medtok::textenc::load_text_embeddings(&p, Some(&s)).unwrap();
        prop_assert_eq!(&back, &set);
        prop_assert_eq!(back.pooled_bytes(), set.pooled_bytes());
    }

    #[test]
    fn jaccard_is_a_similarity(
        a in prop::collection::vec(0usize..40, 8),
        b in prop::collection::vec(0usize..40, 8),
    ) {
        let seq = |ids: Vec<usize>| TokenSequence { code_id: "c".into(), ids, weights: vec![0.5; 8], k: 2 };
        let (x, y) = (seq(a), seq(b));
        let j = token_jaccard(&x, &y);
        prop_assert!((0.0..=1.0).contains(&j));
        prop_assert_eq!(j, token_jaccard(&y, &x));
        prop_assert_eq!(token_jaccard(&x, &x), 1.0);
    }

    #[test]
    fn softmax_rows_are_distributions(v in prop::collection::vec(-700.0f64..700.0, 12)) {
        let m = Matrix::new(3, 4, v).unwrap().softmax_rows().unwrap();
        for r in 0..3 {
            prop_assert!((m.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(m.row(r).iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }
}
