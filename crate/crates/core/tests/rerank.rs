use murke::corpus::tokenize;
use murke::neural::sgd_step;
use murke::rerank::{
    build_cross_input, filter_relevant, filter_scored, mean_loss, pair_gradient, relevance_score,
    train_reranker, FilterMode, RelevancePair, RerankerDims, RerankerModel,
};
use murke::vocab::{Vocab, CLS_ID, SEP_ID, UNK_ID};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SMALL: RerankerDims = RerankerDims {
    embed_dim: 6,
    hidden_dim: 4,
};

fn words(prefix: &str, n: usize) -> Vec<String> {
    (0..n).map(|i| format!("{prefix}{i}")).collect()
}

fn vocab() -> Vocab {
    let mut all = words("q", 6);
    all.extend(words("rel", 6));
    all.extend(words("irr", 6));
    Vocab::build(&all)
}

/// Relevant documents use `rel*` tokens, irrelevant ones `irr*`.
fn separable_pairs(n: usize, seed: u64) -> Vec<RelevancePair> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let relevant = i % 2 == 0;
            let pick = |r: &mut ChaCha8Rng, p: &str, k: usize| -> Vec<String> {
                (0..k)
                    .map(|_| format!("{p}{}", r.gen_range(0..6)))
                    .collect()
            };
            RelevancePair {
                question: pick(&mut r, "q", 3),
                doc: pick(&mut r, if relevant { "rel" } else { "irr" }, 4),
                relevant,
            }
        })
        .collect()
}

#[test]
fn cross_input_layout() {
    let v = vocab();
    let q = tokenize("q0 q1");
    let d = tokenize("rel0 rel1 irr3");
    let ci = build_cross_input(&q, &d, &v);
    assert_eq!(ci.ids.len(), 1 + 2 + 1 + 3 + 1);
    assert_eq!(ci.ids[0], CLS_ID);
    assert_eq!(ci.ids[3], SEP_ID);
    assert_eq!(*ci.ids.last().unwrap(), SEP_ID);
    let (qs, ds) = ci.segments().unwrap();
    assert_eq!((qs.len(), ds.len()), (2, 3));
    let oov = build_cross_input(&tokenize("zz yy xx"), &d, &v);
    assert_eq!(&oov.ids[1..4], &[UNK_ID; 3]);
}

#[test]
fn separable_pairs_are_learned() {
    let pairs = separable_pairs(20, 60);
    let mut m = RerankerModel::new(vocab(), SMALL, 61);
    let curve = train_reranker(&mut m, &pairs, 50, 0.1, 62).unwrap();
    assert!(curve.last().unwrap() <= &curve[0]);
    let correct = pairs
        .iter()
        .filter(|p| {
            let s = relevance_score(&m, &p.question, &p.doc).unwrap();
            (s > 0.5) == p.relevant
        })
        .count();
    assert!(correct as f64 / 20.0 >= 0.9, "{correct}/20");
}

#[test]
fn repeated_positive_loss_is_non_increasing_at_small_lr() {
    let mut m = RerankerModel::new(vocab(), SMALL, 63);
    let pos = RelevancePair {
        question: tokenize("q1 q2"),
        doc: tokenize("rel1 rel4"),
        relevant: true,
    };
    let mut prev = f64::INFINITY;
    for _ in 0..200 {
        let (loss, grads) = pair_gradient(&m, &pos).unwrap();
        assert!(loss <= prev + 1e-12, "{loss} > {prev}");
        prev = loss;
        sgd_step(&mut m.store, &grads, 1e-3).unwrap();
    }
}

#[test]
fn zero_lr_leaves_model_unchanged() {
    let pairs = separable_pairs(6, 64);
    let mut m = RerankerModel::new(vocab(), SMALL, 65);
    let before = m.store.clone();
    let curve = train_reranker(&mut m, &pairs, 3, 0.0, 66).unwrap();
    assert!(curve.windows(2).all(|w| w[0] == w[1]));
    for id in before.ids() {
        assert_eq!(before.get(id), m.store.get(id));
    }
    assert_eq!(mean_loss(&m, &pairs).unwrap(), curve[0]);
}

#[test]
fn scoring_is_deterministic_and_checkpoint_stable() {
    let a = RerankerModel::new(vocab(), SMALL, 67);
    let b = RerankerModel::new(vocab(), SMALL, 67);
    let q = tokenize("q3 q0");
    let d = tokenize("rel2 irr1");
    let s = relevance_score(&a, &q, &d).unwrap();
    assert_eq!(s, relevance_score(&a, &q, &d).unwrap());
    assert_eq!(s, relevance_score(&b, &q, &d).unwrap());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("rr.ckpt");
    a.save(&path).unwrap();
    let back = RerankerModel::load(&path).unwrap();
    // parameters are stored at single precision
    assert!((relevance_score(&back, &q, &d).unwrap() - s).abs() < 1e-5);
}

#[test]
fn threshold_filter_over_model_scores() {
    let m = RerankerModel::new(vocab(), SMALL, 68);
    let q = tokenize("q1");
    let docs: Vec<(String, Vec<String>)> = (0..6)
        .map(|i| (format!("d{i}"), tokenize(&format!("rel{i} irr{i}"))))
        .collect();
    let cands = || docs.iter().map(|(id, t)| (id.as_str(), t.as_slice()));
    let all = filter_relevant(
        &m,
        &q,
        cands(),
        FilterMode::Threshold {
            threshold: 0.0,
            min_keep: 2,
        },
    )
    .unwrap();
    assert_eq!(all.len(), 6);
    assert!(all.windows(2).all(|w| w[0].1 >= w[1].1));
    let fallback = filter_relevant(
        &m,
        &q,
        cands(),
        FilterMode::Threshold {
            threshold: 1.0,
            min_keep: 2,
        },
    )
    .unwrap();
    assert_eq!(fallback, all[..2].to_vec());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn scores_lie_strictly_inside_unit_interval(
        q in prop::collection::vec("[a-z]{1,4}", 0..6),
        d in prop::collection::vec("[a-z]{1,4}", 0..10),
        seed in 0u64..50,
    ) {
        let m = RerankerModel::new(vocab(), SMALL, seed);
        let s = relevance_score(&m, &q, &d).unwrap();
        prop_assert!(s > 0.0 && s < 1.0);
    }

    #[test]
    fn dropping_the_lowest_keeps_higher_survivors(
        scores in prop::collection::vec(0.0f64..1.0, 2..15),
        th in 0.0f64..1.0,
    ) {
        let scored: Vec<(String, f64)> = scores.iter().enumerate().map(|(i, s)| (format!("d{i:02}"), *s)).collect();
        let mode = FilterMode::Threshold { threshold: th, min_keep: 1 };
        let full = filter_scored(scored.clone(), mode).unwrap();
        let mut sorted = scored.clone();
        sorted.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let lowest = sorted.last().unwrap().0.clone();
        let reduced: Vec<_> = scored.into_iter().filter(|p| p.0 != lowest).collect();
        let part = filter_scored(reduced, mode).unwrap();
        let above: Vec<_> = full.iter().filter(|p| p.1 > th && p.0 != lowest).cloned().collect();
        let part_above: Vec<_> = part.iter().filter(|p| p.1 > th).cloned().collect();
        prop_assert_eq!(above, part_above);
    }
}
