use faet_core::classifier::{textcnn_forward, TextCnnParams};
use faet_core::config::TrainConfig;
use faet_core::corpus::TokenizedDoc;
use faet_core::encoder::{lstm_step, LstmParams};
use faet_core::graph::Graph;
use faet_core::metrics::MetricsReport;
use faet_core::objective::{alignment_loss_value, cross_entropy};
use faet_core::params::ParamStore;
use faet_core::tensor::Tensor;
use faet_core::trainer::evaluate;
use faet_core::vocab::build_vocab;
use faet_core::Model;
use faet_oracle::{alignment_direct, metrics_from_counts, recount_confusion, softmax_direct, OracleReport};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EMOJIS: [&str; 5] = ["E_SMILE", "E_CRY", "E_HEART", "E_FIRE", "E_OK"];

fn random_doc(rng: &mut ChaCha8Rng) -> TokenizedDoc {
    let text: Vec<String> = (0..rng.gen_range(1..7)).map(|_| format!("w{}", rng.gen_range(0..12))).collect();
    let emojis: Vec<String> = (0..rng.gen_range(1..5))
        .map(|_| EMOJIS[rng.gen_range(0..EMOJIS.len())].to_string())
        .collect();
    TokenizedDoc {
        text_tokens: text,
        emoji_tokens: emojis,
        label: Some(rng.gen_range(0..2)),
    }
}

/// A small model over every token `random_doc` can produce, weights scaled by `gain`.
fn fuzz_model(seed: u64, gain: f64) -> Model {
    let vocab_docs: Vec<TokenizedDoc> = (0..12)
        .map(|i| TokenizedDoc {
            text_tokens: vec![format!("w{i}")],
            emoji_tokens: EMOJIS.iter().map(|e| e.to_string()).collect(),
            label: Some(0),
        })
        .collect();
    let config = TrainConfig {
        d: 3,
        d_w: 4,
        n_filters: 3,
        seed,
        ..TrainConfig::default()
    };
    let mut model = Model::new(config, build_vocab(&vocab_docs, 1)).unwrap();
    for p in model.params.iter_mut() {
        p.value.data_mut().iter_mut().for_each(|x| *x *= gain);
    }
    model
}

fn check_distribution(name: &str, v: &[f64], failures: &mut Vec<String>) {
    let sum: f64 = v.iter().sum();
    if (sum - 1.0).abs() > 1e-6 || v.iter().any(|&x| !(x >= 0.0)) {
        failures.push(format!("{name}: {v:?} sums to {sum}"));
    }
}

#[test]
fn every_softmax_output_is_a_distribution() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut failures = Vec::new();
    for i in 0..1000u64 {
        let model = fuzz_model(i / 50, [0.5, 1.0, 4.0, 12.0][(i % 4) as usize]);
        let doc = random_doc(&mut rng);
        let x = model.explain(&model.encode(&doc), &doc.emoji_tokens).unwrap();
        for (j, a) in x.sense_weights.iter().enumerate() {
            check_distribution(&format!("input {i} sense {j}"), a, &mut failures);
        }
        check_distribution(&format!("input {i} emoji"), x.emoji_attention.as_deref().unwrap(), &mut failures);
        check_distribution(&format!("input {i} text"), x.text_attention.as_deref().unwrap(), &mut failures);
        for (j, row) in x.beta.as_ref().unwrap().iter().enumerate() {
            check_distribution(&format!("input {i} beta {j}"), row, &mut failures);
        }
        check_distribution(&format!("input {i} class"), &x.prediction.probs, &mut failures);
    }
    assert!(failures.is_empty(), "{} failures, first: {:?}", failures.len(), failures.first());
}

#[test]
fn class_probabilities_match_direct_softmax() {
    let model = fuzz_model(3, 2.0);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..50 {
        let doc = random_doc(&mut rng);
        let p = model.explain(&model.encode(&doc), &doc.emoji_tokens).unwrap().prediction;
        let r = OracleReport::compare("class probs", &p.probs, &softmax_direct(&p.logits), 1e-12);
        assert!(r.passed(), "{r:?}");
    }
}

#[test]
fn metrics_equal_independent_recount() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let pairs: Vec<(u8, u8)> = (0..1000).map(|_| (rng.gen_range(0..2), rng.gen_range(0..2))).collect();
    let ours = MetricsReport::from_pairs(pairs.iter().copied()).unwrap();
    let counts = recount_confusion(&pairs);
    let theirs = metrics_from_counts(counts);
    assert_eq!((ours.counts.tp, ours.counts.fp, ours.counts.fn_, ours.counts.tn), (counts.tp, counts.fp, counts.fn_, counts.tn));
    assert_eq!(ours.positive.precision, theirs.precision);
    assert_eq!(ours.positive.recall, theirs.recall);
    assert_eq!(ours.positive.f1, theirs.f1);
    assert_eq!(ours.accuracy, theirs.accuracy);
}

#[test]
fn evaluate_matches_recount_of_its_predictions() {
    let model = fuzz_model(9, 3.0);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let docs: Vec<TokenizedDoc> = (0..1000).map(|_| random_doc(&mut rng)).collect();
    let before = model.params.clone();
    let eval = evaluate(&model, &docs).unwrap();
    assert_eq!(model.params, before);
    let pairs: Vec<(u8, u8)> = eval.predictions.iter().zip(&docs).map(|(p, d)| (p.label, d.label.unwrap())).collect();
    let oracle = metrics_from_counts(recount_confusion(&pairs));
    let r = &eval.report;
    assert_eq!(
        (r.positive.precision, r.positive.recall, r.accuracy, r.positive.f1),
        (oracle.precision, oracle.recall, oracle.accuracy, oracle.f1)
    );
    let ce: f64 = eval.predictions.iter().zip(&docs).map(|(p, d)| cross_entropy(p.probs, d.label.unwrap())).sum();
    assert!(eval.loss.is_finite() && ce.is_finite());
}

#[test]
fn hand_counted_metrics() {
    let mut pairs = vec![(1, 1); 3];
    pairs.push((1, 0));
    pairs.push((0, 1));
    pairs.extend(vec![(0, 0); 5]);
    let r = MetricsReport::from_pairs(pairs).unwrap();
    assert_eq!((r.positive.precision, r.positive.recall, r.accuracy, r.positive.f1), (0.75, 0.75, 0.8, 0.75));
}

#[test]
fn alignment_loss_matches_direct_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for _ in 0..200 {
        let (n, m, k) = (rng.gen_range(1..7), rng.gen_range(1..4), rng.gen_range(1..4));
        let beta: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let raw: Vec<f64> = (0..m).map(|_| rng.gen_range(-4.0..4.0)).collect();
                softmax_direct(&raw)
            })
            .collect();
        let t: Vec<Vec<f64>> = (0..n).map(|_| (0..k).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let w: Vec<f64> = (0..2 * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let ours = alignment_loss_value(&beta, &t, &w);
        let r = OracleReport::compare("alignment", &[ours], &[alignment_direct(&beta, &t, &w)], 1e-12);
        assert!(r.passed(), "{r:?}");
        assert!(ours.abs() <= (n * (n - 1)) as f64);
    }
}

#[test]
fn alignment_loss_reference_values() {
    assert_eq!(alignment_loss_value(&[vec![0.2, 0.8]], &[vec![1.0]], &[0.3, 0.3]), 0.0);
    let same = vec![vec![0.25, 0.75]; 3];
    let t = vec![vec![0.1], vec![0.2], vec![0.3]];
    assert_eq!(alignment_loss_value(&same, &t, &[1.0, -1.0]), 0.0);
    let hand = alignment_loss_value(&[vec![1.0, 0.0], vec![0.0, 1.0]], &[vec![0.3], vec![0.2]], &[0.0, 0.0]);
    assert!((hand + 1.0).abs() <= 1e-9);
}

fn zeroed<S: faet_core::scalar::Scalar>(store: &mut ParamStore<S>) {
    for p in store.iter_mut() {
        p.value.data_mut().iter_mut().for_each(|x| *x = S::zero());
    }
}

#[test]
fn zero_parameter_lstm_step() {
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let p = LstmParams::new(&mut store, "cell", 1, 1, &mut rng);
    zeroed(&mut store);
    let (h, c) = lstm_step(&p, &store, &[0.7], &[0.0], &[0.0]).unwrap();
    assert!(h[0].abs() <= 1e-12 && c[0].abs() <= 1e-12);
    let (h, c) = lstm_step(&p, &store, &[0.7], &[0.0], &[2.0]).unwrap();
    assert!((h[0] - 0.5 * 1f64.tanh()).abs() <= 1e-12);
    assert!((c[0] - 1.0).abs() <= 1e-12);
}

#[test]
fn zero_parameter_classifier_is_undecided() {
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let head = TextCnnParams::new(&mut store, 5, &[1, 2, 3], 4, &mut rng).unwrap();
    zeroed(&mut store);
    let mut g = Graph::new();
    let bound = store.bind(&mut g);
    let h = g.constant(Tensor::from_rows(&[vec![1.0, -2.0, 0.5], vec![3.0, 0.1, -0.4]]).unwrap());
    let extra = g.constant(Tensor::row(vec![0.9, -0.3]));
    let out = textcnn_forward(&mut g, &bound, &head, h, extra, &mut None).unwrap();
    for p in g.value(out.probs).to_f64_vec() {
        assert!((p - 0.5).abs() <= 1e-12);
    }
}
