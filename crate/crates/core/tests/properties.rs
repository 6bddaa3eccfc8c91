use faet_core::attention::fine_attention;
use faet_core::corpus::{split_corpus, SplitSpec, TokenizedDoc};
use faet_core::graph::{Axis, Graph};
use faet_core::objective::alignment_loss_value;
use faet_core::tensor::Tensor;
use faet_core::vocab::build_vocab;
use faet_oracle::{fine_weights_direct, interaction_direct, OracleReport};
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-3.0..3.0f64, cols), rows)
}

/// Rows of non-negative entries that sum to one.
fn distributions(rows: usize, cols: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(0.01..1.0f64, cols), rows).prop_map(|rows| {
        rows.into_iter()
            .map(|r| {
                let s: f64 = r.iter().sum();
                r.into_iter().map(|x| x / s).collect()
            })
            .collect()
    })
}

fn tensor(rows: &[Vec<f64>]) -> Tensor<f64> {
    Tensor::from_rows(rows).unwrap()
}

/// Text rows, emoji rows and interaction weights for hidden size `k / 2`.
fn attention_case() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<f64>)> {
    (1usize..4, 1usize..6, 1usize..5).prop_flat_map(|(half, n, m)| {
        let k = 2 * half;
        (matrix(n, k), matrix(m, k), prop::collection::vec(-1.0..1.0f64, 3 * k))
    })
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(rows in (1usize..5, 1usize..12).prop_flat_map(|(r, c)| {
        prop::collection::vec(prop::collection::vec(-60.0..60.0f64, c), r)
    })) {
        let mut g = Graph::new();
        let x = g.constant(tensor(&rows));
        let p = g.softmax(x, Axis::Cols).unwrap();
        for row in g.value(p).to_f64_rows() {
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_ignores_constant_shift(row in prop::collection::vec(-20.0..20.0f64, 1..10), shift in -50.0..50.0f64) {
        let mut g = Graph::new();
        let a = g.constant(Tensor::row(row.clone()));
        let b = g.constant(Tensor::row(row.iter().map(|x| x + shift).collect()));
        let pa = g.softmax(a, Axis::Cols).unwrap();
        let pb = g.softmax(b, Axis::Cols).unwrap();
        let r = OracleReport::compare("shift", &g.value(pa).to_f64_vec(), &g.value(pb).to_f64_vec(), 1e-12);
        prop_assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn split_is_a_partition(n in 10usize..300, a in 1u32..10, b in 1u32..10, c in 1u32..10, seed in any::<u64>()) {
        let docs: Vec<TokenizedDoc> = (0..n)
            .map(|i| TokenizedDoc::new(&[&format!("w{i}")], &["e"], Some((i % 2) as u8)))
            .collect();
        let spec = SplitSpec { train: a as f64, test: b as f64, val: c as f64, seed };
        let s = split_corpus(&docs, &spec).unwrap();
        let total = (a + b + c) as usize;
        prop_assert_eq!(s.test.len(), n * b as usize / total);
        prop_assert_eq!(s.val.len(), n * c as usize / total);
        prop_assert_eq!(s.train.len() + s.test.len() + s.val.len(), n);
        let mut seen: Vec<&TokenizedDoc> = s.train.iter().chain(&s.test).chain(&s.val).collect();
        seen.sort_by(|x, y| x.text_tokens.cmp(&y.text_tokens));
        let mut expected: Vec<&TokenizedDoc> = docs.iter().collect();
        expected.sort_by(|x, y| x.text_tokens.cmp(&y.text_tokens));
        prop_assert_eq!(seen, expected);
        prop_assert_eq!(split_corpus(&docs, &spec).unwrap(), s);
    }

    #[test]
    fn vocab_round_trips_training_tokens(docs in prop::collection::vec(
        (prop::collection::vec("[a-e]{1,3}", 1..6), prop::collection::vec("E[0-3]", 0..3)), 1..20,
    )) {
        let docs: Vec<TokenizedDoc> = docs
            .into_iter()
            .map(|(t, e)| TokenizedDoc { text_tokens: t, emoji_tokens: e, label: Some(1) })
            .collect();
        let vocab = build_vocab(&docs, 1);
        for d in &docs {
            prop_assert_eq!(&vocab.decode_text(&vocab.encode_text(&d.text_tokens)), &d.text_tokens);
            let (ids, dropped) = vocab.encode_emojis(&d.emoji_tokens);
            prop_assert_eq!(dropped, 0);
            let back: Vec<&str> = ids.iter().map(|&i| vocab.emoji_token(i).unwrap()).collect();
            prop_assert_eq!(back, d.emoji_tokens.iter().map(String::as_str).collect::<Vec<_>>());
        }
        let json = serde_json::to_string(&vocab).unwrap();
        let mut again: faet_core::vocab::Vocab = serde_json::from_str(&json).unwrap();
        again.reindex();
        prop_assert_eq!(again, vocab);
    }

    #[test]
    fn attended_vectors_are_convex_combinations((t, e, w) in attention_case()) {
        let mut g = Graph::new();
        let (tn, en, wn) = (g.constant(tensor(&t)), g.constant(tensor(&e)), g.constant(Tensor::row(w.clone())));
        let fa = fine_attention(&mut g, tn, en, wn).unwrap();
        let inside = |v: &[f64], rows: &[Vec<f64>]| {
            v.iter().enumerate().all(|(c, &x)| {
                let lo = rows.iter().map(|r| r[c]).fold(f64::INFINITY, f64::min);
                let hi = rows.iter().map(|r| r[c]).fold(f64::NEG_INFINITY, f64::max);
                x >= lo - 1e-12 && x <= hi + 1e-12
            })
        };
        prop_assert!(inside(&g.value(fa.m_fe).to_f64_vec(), &e));
        prop_assert!(inside(&g.value(fa.m_ft).to_f64_vec(), &t));
        for row in g.value(fa.beta.unwrap()).to_f64_rows() {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_matches_direct_summation((t, e, w) in attention_case()) {
        let mut g = Graph::new();
        let (tn, en, wn) = (g.constant(tensor(&t)), g.constant(tensor(&e)), g.constant(Tensor::row(w.clone())));
        let fa = fine_attention(&mut g, tn, en, wn).unwrap();
        let u = interaction_direct(&t, &e, &w);
        let flat: Vec<f64> = u.iter().flatten().copied().collect();
        let r = OracleReport::compare("interaction", &g.value(fa.interaction).to_f64_vec(), &flat, 1e-12);
        prop_assert!(r.passed(), "{r:?}");
        let (emoji_w, text_w) = fine_weights_direct(&u);
        let r = OracleReport::compare("emoji weights", &g.value(fa.emoji_weights).to_f64_vec(), &emoji_w, 1e-12);
        prop_assert!(r.passed(), "{r:?}");
        let r = OracleReport::compare("text weights", &g.value(fa.text_weights).to_f64_vec(), &text_w, 1e-12);
        prop_assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn alignment_loss_is_bounded_and_non_positive((beta, t, w) in (1usize..8, 1usize..5, 1usize..4).prop_flat_map(|(n, m, k)| {
        (distributions(n, m), matrix(n, k), prop::collection::vec(-2.0..2.0f64, 2 * k))
    })) {
        let n = beta.len() as f64;
        let loss = alignment_loss_value(&beta, &t, &w);
        prop_assert!(loss <= 0.0);
        prop_assert!(loss.abs() <= 2.0 * n * (n - 1.0) / 2.0);
    }

    #[test]
    fn alignment_loss_ignores_emoji_order((beta, t, w, perm_seed) in (2usize..7, 2usize..5, 1usize..4).prop_flat_map(|(n, m, k)| {
        (distributions(n, m), matrix(n, k), prop::collection::vec(-2.0..2.0f64, 2 * k), any::<u64>())
    })) {
        let m = beta[0].len();
        let mut order: Vec<usize> = (0..m).collect();
        order.rotate_left((perm_seed as usize) % m);
        let permuted: Vec<Vec<f64>> = beta.iter().map(|r| order.iter().map(|&j| r[j]).collect()).collect();
        let a = alignment_loss_value(&beta, &t, &w);
        let b = alignment_loss_value(&permuted, &t, &w);
        prop_assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn identical_distributions_cost_nothing() {
    let beta = vec![vec![0.3, 0.7]; 4];
    let t: Vec<Vec<f64>> = (0..4).map(|i| vec![i as f64, -1.0]).collect();
    assert_eq!(alignment_loss_value(&beta, &t, &[0.5, 0.1, -0.2, 0.3]), 0.0);
}
