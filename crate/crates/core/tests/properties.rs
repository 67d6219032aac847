use std::collections::BTreeMap;

use proptest::prelude::*;
use tabqa_core::dataset::{Cell, Passage, Table};
use tabqa_core::encoder::{HashEncoder, TextEncoder};
use tabqa_core::filter::{expand_cell, FilterConfig, Similarity};
use tabqa_core::metrics::{exact_match, hits_at_k, token_f1};
use tabqa_core::pipeline::PipelineConfig;
use tabqa_core::selector::{combine_scores, serialize_row, topk_cells};

fn probs(max: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(prop_oneof![0.0..1.0f64, (0..4u8).prop_map(|q| q as f64 / 4.0)], 1..=max)
}

proptest! {
    #[test]
    fn topk_is_a_prefix_of_larger_topk(rows in probs(8), cols in probs(8), a in 0usize..64, b in 0usize..64) {
        let sheet = combine_scores(&rows, &cols).unwrap();
        let total = rows.len() * cols.len();
        let k1 = 1 + a % total;
        let k2 = k1 + b % (total - k1 + 1);
        let small = topk_cells(&sheet, k1).unwrap();
        let large = topk_cells(&sheet, k2).unwrap();
        prop_assert_eq!(&large[..k1], &small[..]);
    }

    #[test]
    fn ranking_is_a_sorted_permutation(rows in probs(8), cols in probs(8)) {
        let sheet = combine_scores(&rows, &cols).unwrap();
        let mut seen: Vec<(usize, usize)> = sheet.ranking.iter().map(|c| (c.row, c.col)).collect();
        prop_assert!(sheet.ranking.windows(2).all(|w| w[0].score >= w[1].score));
        seen.sort();
        seen.dedup();
        prop_assert_eq!(seen.len(), rows.len() * cols.len());
        for c in &sheet.ranking {
            prop_assert_eq!(c.score, rows[c.row] + cols[c.col]);
        }
    }

    #[test]
    fn answer_metrics_ignore_case(s in "[A-Za-z]{1,8}( [A-Za-z]{1,8}){0,4}") {
        prop_assert_eq!(exact_match(&s.to_uppercase(), &s.to_lowercase()), 1.0);
        prop_assert_eq!(token_f1(&s.to_uppercase(), &s), token_f1(&s, &s));
    }

    #[test]
    fn f1_is_symmetric_and_bounded(a in "[a-d ]{0,12}", b in "[a-d ]{0,12}") {
        let f = token_f1(&a, &b);
        prop_assert!((0.0..=1.0).contains(&f));
        prop_assert!((f - token_f1(&b, &a)).abs() < 1e-12);
    }

    #[test]
    fn hits_monotone_in_k(rank in prop::option::of(1usize..50), k in 1usize..50) {
        prop_assert!(hits_at_k(rank, k) <= hits_at_k(rank, k + 1));
    }

    #[test]
    fn row_serialization_is_injective(a in "[a-z]{1,6}", b in "[a-z]{1,6}") {
        prop_assume!(a != b);
        let t = Table::from_texts("t", vec!["H".into(), "G".into()], vec![vec![a.clone(), "x".into()], vec![b, "x".into()]], None).unwrap();
        prop_assert_ne!(serialize_row(&t, 0, None), serialize_row(&t, 1, None));
    }

    #[test]
    fn expansion_respects_the_budget(
        sentences in prop::collection::vec("[a-z]{1,5}( [a-z]{1,5}){0,8}", 1..10),
        k in 1usize..12,
        budget in 3usize..60,
    ) {
        let enc = HashEncoder::default();
        let cell = Cell { row: 0, col: 0, text: "cell".into(), passage_ids: vec!["p".into()] };
        let mut passages = BTreeMap::new();
        passages.insert("p".to_string(), Passage { passage_id: "p".into(), title: "p".into(), sentences });
        let cfg = FilterConfig { k, token_budget: budget, similarity: Similarity::Cosine };
        let out = expand_cell(&cell, &passages, "which cell is it", &cfg, &enc).unwrap();
        prop_assert!(out.token_count <= budget);
        prop_assert!(out.appended_sentences.len() <= k);
        prop_assert!(out.appended_sentences.windows(2).all(|w| w[0].similarity >= w[1].similarity));
        let total = enc.token_count("cell") + out.appended_sentences.iter().map(|s| enc.token_count(&s.sentence)).sum::<usize>();
        prop_assert_eq!(total, out.token_count);
    }

    #[test]
    fn config_text_round_trips(sigma in 0.0..=1.0f64, k in 1usize..100, mu in 0.0..10.0f64, seed in any::<u64>()) {
        let mut c = PipelineConfig::default();
        c.set("sigma", &sigma.to_string(), None).unwrap();
        c.set("k", &k.to_string(), None).unwrap();
        c.set("mu", &mu.to_string(), None).unwrap();
        c.set("seed", &seed.to_string(), None).unwrap();
        c.validate().unwrap();
        let mut d = PipelineConfig::default();
        d.apply_text(&c.to_text(), None, "cfg").unwrap();
        prop_assert_eq!(c, d);
    }
}
