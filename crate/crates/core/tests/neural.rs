mod common;

use murke::neural::gradcheck::{analytic_grads, compare_with_numeric};
use murke::neural::{
    bigru, grad_check, gru_cell, max_pool_window, sgd_step, BiGru, Graph, GruParams, ParamStore,
    Sgd, Tensor,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn with_random_biases(store: &mut ParamStore, p: &GruParams, r: &mut ChaCha8Rng) {
    for id in [p.b_z, p.b_r, p.b_h] {
        *store.get_mut(id) = Tensor::uniform(1, p.hidden_dim, 0.5, r);
    }
}

#[test]
fn gru_cell_matches_scalar_oracle() {
    let mut r = rng(1);
    let mut store = ParamStore::new();
    let p = GruParams::new(&mut store, "g", 3, 3, &mut r);
    with_random_biases(&mut store, &p, &mut r);
    let x = common::random_mat(&mut r, 1, 3, 1.0);
    let h = common::random_mat(&mut r, 1, 3, 1.0);
    let mut g = Graph::new(&store);
    let xv = g.constant_raw(1, 3, x[0].clone());
    let hv = g.constant_raw(1, 3, h[0].clone());
    let out = gru_cell(&mut g, xv, hv, &p).unwrap();
    let want = common::gru_cell(&store, &p, &x[0], &h[0]);
    assert!(common::max_abs_diff(g.value(out), &want) < 1e-12);
}

#[test]
fn gru_cell_zero_params() {
    let mut r = rng(2);
    let mut store = ParamStore::new();
    let p = GruParams::new(&mut store, "g", 2, 3, &mut r);
    for id in p.ids() {
        let [a, b] = store.get(id).shape();
        *store.get_mut(id) = Tensor::zeros(a, b);
    }
    let mut g = Graph::new(&store);
    let x = g.constant_raw(1, 2, vec![0.7, -0.2]);
    let h = g.constant_raw(1, 3, vec![1.0, -2.0, 0.4]);
    let out = gru_cell(&mut g, x, h, &p).unwrap();
    assert_eq!(g.value(out), &[0.5, -1.0, 0.2]);
    let zero = g.zeros(1, 3);
    let out = gru_cell(&mut g, x, zero, &p).unwrap();
    assert_eq!(g.value(out), &[0.0, 0.0, 0.0]);
}

#[test]
fn bigru_matches_unrolled_oracle() {
    let mut r = rng(3);
    let mut store = ParamStore::new();
    let b = BiGru::new(&mut store, "b", 4, 3, &mut r);
    with_random_biases(&mut store, &b.fwd, &mut r);
    with_random_biases(&mut store, &b.bwd, &mut r);
    let xs = common::random_mat(&mut r, 3, 4, 1.0);
    let mut g = Graph::new(&store);
    let seq = g.constant_raw(3, 4, common::flat(&xs));
    let out = bigru(&mut g, seq, &b.fwd, &b.bwd).unwrap();
    let want = common::bigru(&store, &b, &xs, None, None);
    assert_eq!(g.shape(out), [3, 6]);
    assert!(common::max_abs_diff(g.value(out), &common::flat(&want)) < 1e-12);
}

#[test]
fn bigru_equals_cell_by_cell_unrolling_on_the_tape() {
    let mut r = rng(4);
    let mut store = ParamStore::new();
    let b = BiGru::new(&mut store, "b", 2, 2, &mut r);
    let xs = common::random_mat(&mut r, 5, 2, 1.0);
    let mut g = Graph::new(&store);
    let seq = g.constant_raw(5, 2, common::flat(&xs));
    let out = bigru(&mut g, seq, &b.fwd, &b.bwd).unwrap();
    let out = g.tensor(out);
    let mut fwd = Vec::new();
    let mut h = g.zeros(1, 2);
    for x in &xs {
        let xv = g.constant_raw(1, 2, x.clone());
        h = gru_cell(&mut g, xv, h, &b.fwd).unwrap();
        fwd.push(g.value(h).to_vec());
    }
    let mut bwd = vec![Vec::new(); 5];
    let mut h = g.zeros(1, 2);
    for t in (0..5).rev() {
        let xv = g.constant_raw(1, 2, xs[t].clone());
        h = gru_cell(&mut g, xv, h, &b.bwd).unwrap();
        bwd[t] = g.value(h).to_vec();
    }
    for t in 0..5 {
        let mut row = fwd[t].clone();
        row.extend(&bwd[t]);
        assert_eq!(out.row(t), row.as_slice(), "row {t}");
    }
}

#[test]
fn bigru_reversal_swaps_halves_with_swapped_params() {
    let mut r = rng(5);
    let mut store = ParamStore::new();
    let b = BiGru::new(&mut store, "b", 3, 2, &mut r);
    let xs = common::random_mat(&mut r, 4, 3, 1.0);
    let rev: common::Mat = xs.iter().rev().cloned().collect();
    let mut g = Graph::new(&store);
    let a = g.constant_raw(4, 3, common::flat(&xs));
    let ar = g.constant_raw(4, 3, common::flat(&rev));
    let out = bigru(&mut g, a, &b.fwd, &b.bwd).unwrap();
    let swapped = bigru(&mut g, ar, &b.bwd, &b.fwd).unwrap();
    let (out, swapped) = (g.tensor(out), g.tensor(swapped));
    for t in 0..4 {
        let o = out.row(t);
        let s = swapped.row(3 - t);
        assert_eq!(&o[..2], &s[2..]);
        assert_eq!(&o[2..], &s[..2]);
    }
}

#[test]
fn empty_sequence_is_an_error() {
    let mut r = rng(6);
    let mut store = ParamStore::new();
    let b = BiGru::new(&mut store, "b", 3, 2, &mut r);
    let mut g = Graph::new(&store);
    let empty = g.constant_raw(0, 3, vec![]);
    assert!(bigru(&mut g, empty, &b.fwd, &b.bwd).is_err());
}

#[test]
fn max_pool_window_matches_loop_oracle() {
    let mut r = rng(7);
    let v = common::random_mat(&mut r, 6, 3, 2.0);
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let x = g.constant_raw(6, 3, common::flat(&v));
    for lo in 0..6 {
        for hi in lo + 1..=6 {
            let got = max_pool_window(&mut g, x, lo, hi).unwrap();
            let want: Vec<f64> = (0..3)
                .map(|c| {
                    v[lo..hi]
                        .iter()
                        .map(|row| row[c])
                        .fold(f64::NEG_INFINITY, f64::max)
                })
                .collect();
            assert_eq!(g.value(got), want.as_slice());
        }
    }
    assert!(max_pool_window(&mut g, x, 2, 2).is_err());
    let small = g.constant_raw(2, 2, vec![1.0, 5.0, 3.0, 2.0]);
    let p = max_pool_window(&mut g, small, 0, 2).unwrap();
    assert_eq!(g.value(p), &[3.0, 5.0]);
}

#[test]
fn softmax_closed_forms() {
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let x = g.constant_raw(1, 2, vec![0.0, 3f64.ln()]);
    let s = g.softmax_rows(x).unwrap();
    assert!(common::max_abs_diff(g.value(s), &[0.25, 0.75]) < 1e-15);
    let c = g.constant_raw(1, 4, vec![1.3; 4]);
    let s = g.softmax_rows(c).unwrap();
    assert_eq!(g.value(s), &[0.25; 4]);
    let nan = g.constant_raw(1, 2, vec![f64::NAN, 0.0]);
    assert!(g.softmax_rows(nan).is_err());
}

#[test]
fn backward_accumulates_and_zeroes_unused() {
    let mut store = ParamStore::new();
    let x = store.add("x", Tensor::row_vector(vec![1.0, -2.0, 0.5]));
    let unused = store.add("unused", Tensor::row_vector(vec![3.0]));
    let mut grads = store.zero_grads();
    for _ in 0..2 {
        let mut g = Graph::new(&store);
        let xv = g.param(x);
        let sq = g.mul(xv, xv).unwrap();
        let loss = g.sum(sq);
        g.backward(loss, &mut grads).unwrap();
    }
    assert_eq!(grads.dense(x, 3), vec![4.0, -8.0, 2.0]);
    assert_eq!(grads.dense(unused, 1), vec![0.0]);

    let mut g = Graph::new(&store);
    let xv = g.param(x);
    assert!(g.backward(xv, &mut store.zero_grads()).is_err());
}

#[test]
fn sgd_schedule() {
    let sgd = Sgd::new(0.015, 0.05);
    assert_eq!(sgd.lr_at(0), 0.015);
    assert!((sgd.lr_at(20) - 0.0075).abs() < 1e-15);
    let mut store = ParamStore::new();
    let w = store.add("w", Tensor::row_vector(vec![1.0, 2.0]));
    let before = store.clone();
    let zero = store.zero_grads();
    sgd_step(&mut store, &zero, 0.1).unwrap();
    assert_eq!(store.get(w), before.get(w));
}

/// Softmax cross-entropy on a small linear classifier.
#[test]
fn softmax_cross_entropy_grad_check() {
    let mut r = rng(8);
    let mut store = ParamStore::new();
    let w = store.add_uniform("w", 4, 3, 4, &mut r);
    let x = common::random_mat(&mut r, 5, 4, 1.0);
    let labels = [0usize, 2, 1, 1, 0];
    let f = |g: &mut Graph| {
        let xv = g.constant_raw(5, 4, common::flat(&x));
        let wv = g.param(w);
        let logits = g.matmul(xv, wv)?;
        let lsm = g.log_softmax_rows(logits)?;
        let mut picked = Vec::new();
        for (i, &y) in labels.iter().enumerate() {
            let row = g.slice_rows(lsm, i, i + 1)?;
            picked.push(g.pick(row, y)?);
        }
        let all = g.concat_rows(&picked)?;
        let s = g.sum(all);
        Ok(g.scale(s, -1.0))
    };
    let report = grad_check(&store, f, 1e-5).unwrap();
    assert!(report.max_rel_error < 1e-6, "{report:?}");
}

#[test]
fn corrupted_gradient_is_detected() {
    let mut r = rng(9);
    let mut store = ParamStore::new();
    store.add_uniform("w", 3, 2, 3, &mut r);
    let w = store.find("w").unwrap();
    let f = |g: &mut Graph| {
        let wv = g.param(w);
        let t = g.tanh(wv);
        let sq = g.mul(t, t)?;
        Ok(g.sum(sq))
    };
    let mut grads = analytic_grads(&store, &f).unwrap();
    assert!(
        compare_with_numeric(&store, &f, &grads, 1e-5)
            .unwrap()
            .max_rel_error
            < 1e-6
    );
    grads.scale(1.5);
    let report = compare_with_numeric(&store, &f, &grads, 1e-5).unwrap();
    assert!(report.max_rel_error > 1e-2, "{report:?}");
}

/// Each differentiable tape op on its own, through a random projection to a scalar.
#[test]
fn every_op_passes_grad_check() {
    let mut r = rng(10);
    let mut store = ParamStore::new();
    let a = store.add_uniform("a", 3, 4, 2, &mut r);
    let b = store.add_uniform("b", 4, 3, 2, &mut r);
    let row = store.add_uniform("row", 1, 4, 2, &mut r);
    let table = store.add_uniform("table", 6, 4, 2, &mut r);
    let probe = common::random_mat(&mut r, 3, 4, 1.0);
    type Op = fn(
        &mut Graph,
        murke::neural::Var,
        murke::neural::Var,
        murke::neural::Var,
    ) -> murke::Result<murke::neural::Var>;
    let ops: Vec<(&str, Op)> = vec![
        ("matmul", |g, a, b, _| {
            let m = g.matmul(a, b)?;
            g.matmul(m, a)
        }),
        ("add_broadcast", |g, a, _, r| g.add(a, r)),
        ("sub", |g, a, _, _| {
            let t = g.tanh(a);
            g.sub(a, t)
        }),
        ("mul", |g, a, _, _| {
            let s = g.sigmoid(a);
            g.mul(a, s)
        }),
        ("log", |g, a, _, _| {
            let s = g.sigmoid(a);
            Ok(g.log(s))
        }),
        ("one_minus", |g, a, _, _| {
            let t = g.tanh(a);
            Ok(g.one_minus(t))
        }),
        ("softmax_rows", |g, a, _, _| g.softmax_rows(a)),
        ("log_softmax_rows", |g, a, _, _| g.log_softmax_rows(a)),
        ("transpose", |g, a, b, _| {
            let t = g.transpose(b);
            g.mul(a, t)
        }),
        ("concat_slice", |g, a, _, r| {
            let c = g.concat_rows(&[a, r])?;
            let s = g.slice_rows(c, 1, 4)?;
            let l = g.slice_cols(s, 0, 2)?;
            let rr = g.slice_cols(s, 2, 4)?;
            g.concat_cols(rr, l)
        }),
        ("max_rows", |g, a, _, _| {
            let m = g.max_rows(a, 0, 3)?;
            let e = g.max_rows(a, 1, 2)?;
            let p = g.mul(m, e)?;
            g.concat_rows(&[p, p, p])
        }),
        ("mean_rows", |g, a, _, _| {
            let m = g.mean_rows(a);
            let sq = g.mul(m, m)?;
            g.concat_rows(&[sq, m, sq])
        }),
        ("scale_rows", |g, a, b, _| {
            let col = g.slice_cols(b, 0, 1)?;
            let s = g.transpose(col);
            let s3 = g.slice_cols(s, 0, 3)?;
            g.scale_rows(a, s3)
        }),
        ("cumsum", |g, a, _, _| {
            let f = g.cumsum(a, false);
            let bk = g.cumsum(a, true);
            g.mul(f, bk)
        }),
    ];
    for (name, op) in ops {
        let f = |g: &mut Graph| {
            let (av, bv, rv) = (g.param(a), g.param(b), g.param(row));
            let out = op(g, av, bv, rv)?;
            let pr = g.constant_raw(3, 4, common::flat(&probe));
            let m = g.mul(out, pr)?;
            Ok(g.sum(m))
        };
        let report = grad_check(&store, f, 1e-5).unwrap();
        assert!(report.max_rel_error < 1e-4, "{name}: {report:?}");
    }
    let f = |g: &mut Graph| {
        let e = g.embed(table, &[1, 4, 1])?;
        let t = g.tanh(e);
        let pr = g.constant_raw(3, 4, common::flat(&probe));
        let m = g.mul(t, pr)?;
        let pick = g.pick(m, 5)?;
        let s = g.sum(m);
        g.add(s, pick)
    };
    let report = grad_check(&store, f, 1e-5).unwrap();
    assert!(report.max_rel_error < 1e-4, "embed/pick: {report:?}");
}

#[test]
fn bigru_grad_check() {
    let mut r = rng(11);
    let mut store = ParamStore::new();
    let b = BiGru::new(&mut store, "b", 3, 2, &mut r);
    let x = store.add_uniform("x", 4, 3, 1, &mut r);
    let f = |g: &mut Graph| {
        let xv = g.param(x);
        let h0 = g.constant_raw(1, 2, vec![0.3, -0.1]);
        let out = b.forward_with_init(g, xv, Some(h0), None)?;
        let sq = g.mul(out, out)?;
        let s = g.sum(sq);
        let m = g.max_rows(out, 0, 4)?;
        let ms = g.sum(m);
        g.add(s, ms)
    };
    let report = grad_check(&store, f, 1e-5).unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn softmax_rows_normalised_and_shift_invariant(
        xs in prop::collection::vec(-30.0f64..30.0, 1..12),
        shift in -1000.0f64..1000.0,
    ) {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let n = xs.len();
        let a = g.constant_raw(1, n, xs.clone());
        let b = g.constant_raw(1, n, xs.iter().map(|x| x + shift).collect());
        let sa = g.softmax_rows(a).unwrap();
        let sb = g.softmax_rows(b).unwrap();
        let total: f64 = g.value(sa).iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-6);
        prop_assert!(g.value(sa).iter().all(|&p| p >= 0.0));
        prop_assert!(common::max_abs_diff(g.value(sa), g.value(sb)) < 1e-9);
    }

    #[test]
    fn ops_are_deterministic(seed in 0u64..1000) {
        let mut r = rng(seed);
        let mut store = ParamStore::new();
        let b = BiGru::new(&mut store, "b", 3, 2, &mut r);
        let xs = common::random_mat(&mut r, 3, 3, 1.0);
        let run = || {
            let mut g = Graph::new(&store);
            let s = g.constant_raw(3, 3, common::flat(&xs));
            let o = b.forward(&mut g, s).unwrap();
            g.value(o).to_vec()
        };
        prop_assert_eq!(run(), run());
    }
}
