mod common;

use std::collections::HashSet;

use murke::neural::{BiGru, Graph, ParamStore, Tensor};
use murke::selection::{
    encode_sequence, init_question_state, score_document, select_top1, self_attend, FusionMode,
    FusionParams, SequenceEncoder,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[test]
fn encode_sequence_matches_oracle() {
    let mut r = rng(20);
    let mut store = ParamStore::new();
    let table = store.add_uniform("emb", 10, 5, 1, &mut r);
    let b = BiGru::new(&mut store, "enc", 5, 3, &mut r);
    let ids = [3, 7, 0, 3];
    let mut g = Graph::new(&store);
    let ctx = encode_sequence(&mut g, &ids, table, &b).unwrap();
    let x = common::embed(&store, table, &ids);
    let want = common::bigru(&store, &b, &x, None, None);
    assert_eq!(g.shape(ctx), [4, 6]);
    assert!(common::max_abs_diff(g.value(ctx), &common::flat(&want)) < 1e-12);
    assert!(encode_sequence(&mut g, &[], table, &b).is_err());
}

#[test]
fn self_attention_matches_oracle() {
    let mut r = rng(21);
    let ctx = common::random_mat(&mut r, 3, 4, 1.0);
    let w = common::random_mat(&mut r, 4, 1, 1.0);
    let ws = common::random_mat(&mut r, 4, 4, 1.0);
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let c = g.constant_raw(3, 4, common::flat(&ctx));
    let wv = g.constant_raw(4, 1, common::flat(&w));
    let wsv = g.constant_raw(4, 4, common::flat(&ws));
    let att = self_attend(&mut g, c, wv, wsv).unwrap();
    let (alpha, out) = common::self_attend(&ctx, &w, &ws);
    assert!(common::max_abs_diff(g.value(att.alpha), &alpha) < 1e-12);
    assert!(common::max_abs_diff(g.value(att.out), &common::flat(&out)) < 1e-12);
}

#[test]
fn encoder_composition_matches_oracle() {
    let mut r = rng(22);
    let mut store = ParamStore::new();
    let table = store.add_uniform("emb", 8, 4, 1, &mut r);
    let enc = SequenceEncoder::new(&mut store, "q", 4, 2, &mut r);
    let ids = [1, 5, 2];
    let mut g = Graph::new(&store);
    let att = enc.encode(&mut g, &ids, table).unwrap();
    let ctx = common::bigru(
        &store,
        &enc.bigru,
        &common::embed(&store, table, &ids),
        None,
        None,
    );
    let (alpha, out) = common::self_attend(
        &ctx,
        &common::param(&store, enc.attn),
        &common::param(&store, enc.proj),
    );
    assert!(common::max_abs_diff(g.value(att.alpha), &alpha) < 1e-12);
    assert!(common::max_abs_diff(g.value(att.out), &common::flat(&out)) < 1e-12);
}

#[test]
fn document_score_is_mean_inner_product() {
    let mut r = rng(23);
    let u = common::random_mat(&mut r, 3, 4, 1.0);
    let d = common::random_mat(&mut r, 5, 4, 1.0);
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let uv = g.constant_raw(3, 4, common::flat(&u));
    let dv = g.constant_raw(5, 4, common::flat(&d));
    let s = score_document(&mut g, uv, dv).unwrap();
    let want = common::dot(&common::mean_rows(&u), &common::mean_rows(&d));
    assert!((g.scalar(s) - want).abs() < 1e-12);
    let bad = g.constant_raw(2, 3, vec![0.0; 6]);
    assert!(score_document(&mut g, uv, bad).is_err());
}

#[test]
fn fusion_modes() {
    let mut r = rng(24);
    let mut store = ParamStore::new();
    let fp = FusionParams::new(&mut store, 3, 2, &mut r);
    let e_q = common::random_mat(&mut r, 2, 4, 1.0);
    let img = common::random_mat(&mut r, 1, 3, 1.0);
    let mut g = Graph::new(&store);
    let eq = g.constant_raw(2, 4, common::flat(&e_q));
    let iv = g.constant_raw(1, 3, img[0].clone());
    let none = init_question_state(&mut g, eq, None, FusionMode::None, None).unwrap();
    assert_eq!(g.value(none.u), common::flat(&e_q).as_slice());
    assert!(init_question_state(&mut g, eq, None, FusionMode::Avg, Some(&fp)).is_err());
    assert!(init_question_state(&mut g, eq, Some(iv), FusionMode::Con, None).is_err());

    // p = image · W_img + b_img
    let p: Vec<f64> = {
        let w = common::param(&store, fp.img_proj);
        let b = common::param(&store, fp.img_bias);
        (0..4)
            .map(|j| (0..3).map(|k| img[0][k] * w[k][j]).sum::<f64>() + b[0][j])
            .collect()
    };
    let avg = init_question_state(&mut g, eq, Some(iv), FusionMode::Avg, Some(&fp)).unwrap();
    let want: Vec<f64> = e_q
        .iter()
        .flat_map(|row| row.iter().zip(&p).map(|(a, b)| (a + b) / 2.0))
        .collect();
    assert!(common::max_abs_diff(g.value(avg.u), &want) < 1e-12);

    let bil = init_question_state(&mut g, eq, Some(iv), FusionMode::Bil, Some(&fp)).unwrap();
    let eqw = common::matmul(&e_q, &common::param(&store, fp.bilinear));
    let want: Vec<f64> = e_q
        .iter()
        .zip(&eqw)
        .flat_map(|(row, rw)| (0..4).map(|j| row[j] + rw[j] * p[j]).collect::<Vec<_>>())
        .collect();
    assert!(common::max_abs_diff(g.value(bil.u), &want) < 1e-12);

    let con = init_question_state(&mut g, eq, Some(iv), FusionMode::Con, Some(&fp)).unwrap();
    let cat: common::Mat = e_q
        .iter()
        .map(|row| row.iter().chain(&p).copied().collect())
        .collect();
    let y = common::matmul(&cat, &common::param(&store, fp.con_proj));
    let b = common::param(&store, fp.con_bias);
    let want: Vec<f64> = y
        .iter()
        .flat_map(|row| {
            row.iter()
                .zip(&b[0])
                .map(|(a, c)| a + c)
                .collect::<Vec<_>>()
        })
        .collect();
    assert!(common::max_abs_diff(g.value(con.u), &want) < 1e-12);
}

#[test]
fn fusion_names_round_trip() {
    for m in [
        FusionMode::None,
        FusionMode::Avg,
        FusionMode::Con,
        FusionMode::Bil,
    ] {
        assert_eq!(m.to_string().parse::<FusionMode>().unwrap(), m);
    }
    assert!("sum".parse::<FusionMode>().is_err());
}

fn excluded(v: &[usize]) -> HashSet<String> {
    v.iter().map(|i| format!("d{i}")).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn alpha_is_a_distribution(
        len in 1usize..12,
        seed in 0u64..10_000,
    ) {
        let mut r = rng(seed);
        let ctx = common::random_mat(&mut r, len, 4, 3.0);
        let w = common::random_mat(&mut r, 4, 1, 3.0);
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let c = g.constant_raw(len, 4, common::flat(&ctx));
        let wv = g.constant_raw(4, 1, common::flat(&w));
        let ws = g.constant(&Tensor::eye(4));
        let att = self_attend(&mut g, c, wv, ws).unwrap();
        let a = g.value(att.alpha);
        prop_assert!(a.iter().all(|&x| x >= 0.0));
        prop_assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn argmax_is_invariant_under_positive_scaling(
        scores in prop::collection::vec(-5.0f64..5.0, 1..20),
        c in 0.01f64..100.0,
    ) {
        let ids: Vec<String> = (0..scores.len()).map(|i| format!("d{i}")).collect();
        let a: Vec<(&str, f64)> = ids.iter().map(String::as_str).zip(scores.iter().copied()).collect();
        let b: Vec<(&str, f64)> = ids.iter().map(String::as_str).zip(scores.iter().map(|s| s * c)).collect();
        let none = HashSet::new();
        prop_assert_eq!(select_top1(&a, &none).unwrap(), select_top1(&b, &none).unwrap());
    }

    #[test]
    fn top1_never_returns_an_excluded_document(
        scores in prop::collection::vec(-5.0f64..5.0, 1..20),
        mask in prop::collection::vec(any::<bool>(), 20),
    ) {
        let ids: Vec<String> = (0..scores.len()).map(|i| format!("d{i}")).collect();
        let pairs: Vec<(&str, f64)> = ids.iter().map(String::as_str).zip(scores.iter().copied()).collect();
        let ex: Vec<usize> = (0..scores.len()).filter(|&i| mask[i]).collect();
        let set = excluded(&ex);
        match select_top1(&pairs, &set) {
            Ok(i) => {
                prop_assert!(!set.contains(&ids[i]));
                let best = (0..scores.len()).filter(|i| !mask[*i]).map(|i| scores[i]).fold(f64::NEG_INFINITY, f64::max);
                prop_assert_eq!(scores[i], best);
            }
            Err(_) => prop_assert_eq!(ex.len(), scores.len()),
        }
    }
}
