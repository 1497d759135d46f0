//! Scalar reference implementations used as test oracles. Everything here is
//! written with plain loops over `Vec<Vec<f64>>`, independent of the tape.

#![allow(dead_code)]

use murke::entailment::EntailmentParams;
use murke::neural::{BiGru, GruParams, ParamId, ParamStore, Tensor};
use rand::Rng;

pub type Mat = Vec<Vec<f64>>;

pub fn rows(t: &Tensor) -> Mat {
    t.to_rows()
}

pub fn param(store: &ParamStore, id: ParamId) -> Mat {
    store.get(id).to_rows()
}

pub fn random_mat<R: Rng>(rng: &mut R, r: usize, c: usize, scale: f64) -> Mat {
    (0..r)
        .map(|_| (0..c).map(|_| rng.gen_range(-scale..scale)).collect())
        .collect()
}

pub fn flat(m: &Mat) -> Vec<f64> {
    m.iter().flatten().copied().collect()
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let n = b.first().map_or(0, Vec::len);
    a.iter()
        .map(|row| {
            (0..n)
                .map(|j| row.iter().zip(b).map(|(x, brow)| x * brow[j]).sum())
                .collect()
        })
        .collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn mean_rows(m: &Mat) -> Vec<f64> {
    let c = m[0].len();
    (0..c)
        .map(|j| m.iter().map(|r| r[j]).sum::<f64>() / m.len() as f64)
        .collect()
}

/// `Σ_k x_k W_kj` for a single input vector.
fn vec_mat(x: &[f64], w: &Mat) -> Vec<f64> {
    let n = w[0].len();
    (0..n)
        .map(|j| (0..x.len()).map(|k| x[k] * w[k][j]).sum())
        .collect()
}

pub fn gru_cell(store: &ParamStore, p: &GruParams, x: &[f64], h: &[f64]) -> Vec<f64> {
    let get = |id| param(store, id);
    let (wz, uz, bz) = (get(p.w_z), get(p.u_z), get(p.b_z));
    let (wr, ur, br) = (get(p.w_r), get(p.u_r), get(p.b_r));
    let (wh, uh, bh) = (get(p.w_h), get(p.u_h), get(p.b_h));
    let d = h.len();
    let xz = vec_mat(x, &wz);
    let hz = vec_mat(h, &uz);
    let xr = vec_mat(x, &wr);
    let hr = vec_mat(h, &ur);
    let z: Vec<f64> = (0..d).map(|i| sigmoid(xz[i] + hz[i] + bz[0][i])).collect();
    let r: Vec<f64> = (0..d).map(|i| sigmoid(xr[i] + hr[i] + br[0][i])).collect();
    let rh: Vec<f64> = (0..d).map(|i| r[i] * h[i]).collect();
    let xh = vec_mat(x, &wh);
    let hh = vec_mat(&rh, &uh);
    (0..d)
        .map(|i| {
            let cand = (xh[i] + hh[i] + bh[0][i]).tanh();
            (1.0 - z[i]) * h[i] + z[i] * cand
        })
        .collect()
}

pub fn gru_seq(
    store: &ParamStore,
    p: &GruParams,
    xs: &Mat,
    h0: Option<&[f64]>,
    reverse: bool,
) -> Mat {
    let d = p.hidden_dim;
    let mut h = h0.map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; d]);
    let mut out = vec![Vec::new(); xs.len()];
    let order: Vec<usize> = if reverse {
        (0..xs.len()).rev().collect()
    } else {
        (0..xs.len()).collect()
    };
    for t in order {
        h = gru_cell(store, p, &xs[t], &h);
        out[t] = h.clone();
    }
    out
}

pub fn bigru(
    store: &ParamStore,
    b: &BiGru,
    xs: &Mat,
    h0f: Option<&[f64]>,
    h0b: Option<&[f64]>,
) -> Mat {
    let f = gru_seq(store, &b.fwd, xs, h0f, false);
    let bw = gru_seq(store, &b.bwd, xs, h0b, true);
    f.into_iter()
        .zip(bw)
        .map(|(mut a, b)| {
            a.extend(b);
            a
        })
        .collect()
}

pub fn embed(store: &ParamStore, table: ParamId, ids: &[usize]) -> Mat {
    let t = param(store, table);
    ids.iter().map(|&i| t[i].clone()).collect()
}

/// Token self-attention: `α_j ∝ exp(w·d_j)`, row `j` = `α_j d_j W_s`.
pub fn self_attend(ctx: &Mat, w: &Mat, w_s: &Mat) -> (Vec<f64>, Mat) {
    let logits: Vec<f64> = ctx
        .iter()
        .map(|d| (0..d.len()).map(|k| d[k] * w[k][0]).sum())
        .collect();
    let alpha = softmax(&logits);
    let out = ctx
        .iter()
        .zip(&alpha)
        .map(|(d, a)| {
            let scaled: Vec<f64> = d.iter().map(|x| a * x).collect();
            vec_mat(&scaled, w_s)
        })
        .collect();
    (alpha, out)
}

/// `β_j = softmax_j Σ_i U_i W_c V_jᵀ`, `S_j = β_j V_j`.
pub fn question_aware(u: &Mat, v: &Mat, w_c: &Mat) -> (Vec<f64>, Mat) {
    let logits: Vec<f64> = v
        .iter()
        .map(|vj| {
            let mut s = 0.0;
            for ui in u {
                for a in 0..ui.len() {
                    for b in 0..vj.len() {
                        s += ui[a] * w_c[a][b] * vj[b];
                    }
                }
            }
            s
        })
        .collect();
    let beta = softmax(&logits);
    let s = v
        .iter()
        .zip(&beta)
        .map(|(vj, b)| vj.iter().map(|x| b * x).collect())
        .collect();
    (beta, s)
}

pub fn span_heads(
    store: &ParamStore,
    start: &BiGru,
    end: &BiGru,
    w_s: &Mat,
    w_e: &Mat,
    s: &Mat,
) -> (Vec<f64>, Vec<f64>) {
    let ys = bigru(store, start, s, None, None);
    let ye = bigru(store, end, &ys, None, None);
    let head = |y: &Mat, w: &Mat| -> Vec<f64> {
        let l: Vec<f64> = y
            .iter()
            .map(|r| (0..r.len()).map(|k| r[k] * w[k][0]).sum())
            .collect();
        softmax(&l)
    };
    (head(&ys, w_s), head(&ye, w_e))
}

/// `γ_i = Σ_{s ≤ i} Σ_{e ≥ i} p_s(s) p_e(e)`.
pub fn gamma_double_sum(ps: &[f64], pe: &[f64]) -> Vec<f64> {
    let n = ps.len();
    (0..n)
        .map(|i| {
            let mut g = 0.0;
            for s in 0..=i {
                for e in i..n {
                    g += ps[s] * pe[e];
                }
            }
            g
        })
        .collect()
}

pub fn reweight(v: &Mat, gamma: &[f64]) -> Mat {
    v.iter()
        .zip(gamma)
        .map(|(r, g)| r.iter().map(|x| g * x).collect())
        .collect()
}

/// Window `i` spans rows `i·w .. min((i+1)·w, N)` with `w = ⌈N/M⌉`; a window
/// starting past the end repeats the previous window's result.
pub fn pool(v: &Mat, m: usize) -> Mat {
    let n = v.len();
    let c = v[0].len();
    let mut w = n / m;
    if w * m < n {
        w += 1;
    }
    let mut out: Mat = Vec::new();
    for i in 0..m {
        let lo = i * w;
        if lo >= n {
            let prev = out.last().cloned().expect("first window is never empty");
            out.push(prev);
            continue;
        }
        let hi = ((i + 1) * w).min(n);
        let mut row = vec![f64::NEG_INFINITY; c];
        for r in &v[lo..hi] {
            for j in 0..c {
                if r[j] > row[j] {
                    row[j] = r[j];
                }
            }
        }
        out.push(row);
    }
    out
}

pub fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect())
        .collect()
}

/// `(δ, A)` with `δ[i][j] = exp(P_i·H_j) / Σ_r exp(P_r·H_j)` (K × J) and
/// `A_j = Σ_i δ_ij P_i`.
pub fn premise_attention(p: &Mat, h: &Mat) -> (Mat, Mat) {
    let k = p.len();
    let j_len = h.len();
    let mut delta = vec![vec![0.0; j_len]; k];
    for j in 0..j_len {
        let col: Vec<f64> = (0..k).map(|i| dot(&p[i], &h[j])).collect();
        let sm = softmax(&col);
        for i in 0..k {
            delta[i][j] = sm[i];
        }
    }
    let c = p[0].len();
    let a = (0..j_len)
        .map(|j| {
            (0..c)
                .map(|col| (0..k).map(|i| delta[i][j] * p[i][col]).sum())
                .collect()
        })
        .collect();
    (delta, a)
}

pub fn hypothesis(
    store: &ParamStore,
    u: &Mat,
    option: &[usize],
    table: ParamId,
    hyp: &BiGru,
) -> Mat {
    let d = hyp.hidden_dim();
    let pooled = mean_rows(u);
    let x = embed(store, table, option);
    let states = bigru(store, hyp, &x, Some(&pooled[..d]), Some(&pooled[d..]));
    let mut h = u.clone();
    h.extend(states);
    h
}

pub fn option_logit(
    store: &ParamStore,
    v: &Mat,
    u: &Mat,
    option: &[usize],
    table: ParamId,
    p: &EntailmentParams,
) -> f64 {
    let h = hypothesis(store, u, option, table, &p.hyp);
    let (_, a) = premise_attention(v, &h);
    let m: Mat = a
        .iter()
        .zip(&h)
        .map(|(x, y)| x.iter().chain(y).copied().collect())
        .collect();
    let states = bigru(store, &p.matcher, &m, None, None);
    let c = states[0].len();
    let pooled: Vec<f64> = (0..c)
        .map(|j| {
            states
                .iter()
                .map(|r| r[j])
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect();
    let w = param(store, p.cls_w);
    let b = param(store, p.cls_b);
    (0..c).map(|k| pooled[k] * w[k][0]).sum::<f64>() + b[0][0]
}

pub fn entail_all(
    store: &ParamStore,
    v: &Mat,
    u: &Mat,
    options: &[Vec<usize>],
    table: ParamId,
    p: &EntailmentParams,
) -> Vec<f64> {
    let logits: Vec<f64> = options
        .iter()
        .map(|o| option_logit(store, v, u, o, table, p))
        .collect();
    softmax(&logits)
}

/// Largest `|a − b|` over two equally long slices.
pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// `|a − b| / max(1, |b|)` maximised over coordinates.
pub fn max_rel_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / y.abs().max(1.0))
        .fold(0.0, f64::max)
}

/// Random probability vector of length `n`.
pub fn random_dist<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n)
        .map(|_| rng.gen_range(0.0..1.0f64).powi(3) + 1e-9)
        .collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|x| x / s).collect()
}
