//! Latent question reformulation.
//!
//! Given the current question matrix `U` (`M × 2d`) and the selected document
//! `V` (`N × 2d`):
//!
//! ```text
//! β      = softmax_j( Σ_i U_i W_c V_jᵀ )         S_j = β_j V_j
//! Y_s    = BiGRU_s(S)   Y_e = BiGRU_e(Y_s)       p_s = softmax(Y_s w_s), p_e = softmax(Y_e w_e)
//! γ_i    = (Σ_{k≤i} p_s,k) · (Σ_{k≥i} p_e,k)      Ṽ_i = γ_i V_i
//! G_i    = max over window i of Ṽ, width ⌈N/M⌉    U' = U + G
//! ```

use rand::Rng;

use crate::error::{Error, Result};
use crate::neural::{BiGru, Graph, ParamId, ParamStore, Var};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReformulationParams {
    pub w_c: ParamId,
    pub start: BiGru,
    pub end: BiGru,
    pub w_s: ParamId,
    pub w_e: ParamId,
}

impl ReformulationParams {
    pub fn new<R: Rng>(store: &mut ParamStore, hidden: usize, rng: &mut R) -> Self {
        let two_d = 2 * hidden;
        Self {
            w_c: store.add_uniform("reform.w_c", two_d, two_d, two_d, rng),
            start: BiGru::new(store, "reform.start", two_d, hidden, rng),
            end: BiGru::new(store, "reform.end", two_d, hidden, rng),
            w_s: store.add_uniform("reform.w_s", two_d, 1, two_d, rng),
            w_e: store.add_uniform("reform.w_e", two_d, 1, two_d, rng),
        }
    }
}

/// Returns `(S, β)` with `β` as a `1 × N` row.
pub fn question_aware_doc(g: &mut Graph, u: Var, v: Var, w_c: Var) -> Result<(Var, Var)> {
    let two_d = g.cols(u);
    if g.cols(v) != two_d || g.shape(w_c) != [two_d, two_d] {
        return Err(Error::Shape {
            op: "question_aware_doc",
            left: g.shape(u),
            right: g.shape(v),
        });
    }
    let m = g.rows(u) as f64;
    let uw = g.matmul(u, w_c)?;
    let mean = g.mean_rows(uw);
    let summed = g.scale(mean, m);
    let vt = g.transpose(v);
    let logits = g.matmul(summed, vt)?;
    let beta = g.softmax_rows(logits)?;
    let s = g.scale_rows(v, beta)?;
    Ok((s, beta))
}

#[derive(Debug, Clone, Copy)]
pub struct SpanDistributions {
    pub p_s: Var,
    pub p_e: Var,
}

pub fn span_distributions(
    g: &mut Graph,
    s: Var,
    start: &BiGru,
    end: &BiGru,
    w_s: Var,
    w_e: Var,
) -> Result<SpanDistributions> {
    let y_s = start.forward(g, s)?;
    let y_e = end.forward(g, y_s)?;
    let ls = g.matmul(y_s, w_s)?;
    let ls = g.transpose(ls);
    let le = g.matmul(y_e, w_e)?;
    let le = g.transpose(le);
    Ok(SpanDistributions {
        p_s: g.softmax_rows(ls)?,
        p_e: g.softmax_rows(le)?,
    })
}

/// Probability that the span has started at or before token `i` and ends at or after it.
pub fn reading_attention(g: &mut Graph, p: SpanDistributions) -> Result<Var> {
    if g.shape(p.p_s) != g.shape(p.p_e) {
        return Err(Error::Shape {
            op: "reading_attention",
            left: g.shape(p.p_s),
            right: g.shape(p.p_e),
        });
    }
    let started = g.cumsum(p.p_s, false);
    let not_ended = g.cumsum(p.p_e, true);
    g.mul(started, not_ended)
}

/// `Ṽ_i = γ_i V_i`.
pub fn reweight_doc(g: &mut Graph, v: Var, gamma: Var) -> Result<Var> {
    g.scale_rows(v, gamma)
}

/// Half-open windows `[i·w, min((i+1)·w, N))` with `w = ⌈N/M⌉`; windows past the end
/// reuse the last non-empty one.
pub fn pool_windows(n: usize, m: usize) -> Vec<(usize, usize)> {
    let w = n.div_ceil(m);
    let mut out = Vec::with_capacity(m);
    let mut last = (0, n.min(w));
    for i in 0..m {
        let lo = i * w;
        if lo < n {
            last = (lo, ((i + 1) * w).min(n));
        }
        out.push(last);
    }
    out
}

/// Length-adaptive max-pooling from `N × c` to exactly `M × c`.
pub fn dynamic_max_pool(g: &mut Graph, v_tilde: Var, m: usize) -> Result<Var> {
    let n = g.rows(v_tilde);
    if n == 0 || m == 0 {
        return Err(Error::invalid(format!(
            "dynamic_max_pool with N={n}, M={m}"
        )));
    }
    let mut rows = Vec::with_capacity(m);
    let mut cache: Option<((usize, usize), Var)> = None;
    for win in pool_windows(n, m) {
        let pooled = match cache {
            Some((w, v)) if w == win => v,
            _ => g.max_rows(v_tilde, win.0, win.1)?,
        };
        cache = Some((win, pooled));
        rows.push(pooled);
    }
    g.concat_rows(&rows)
}

pub fn update_question(g: &mut Graph, u: Var, pooled: Var) -> Result<Var> {
    if g.shape(u) != g.shape(pooled) {
        return Err(Error::Shape {
            op: "update_question",
            left: g.shape(u),
            right: g.shape(pooled),
        });
    }
    g.add(u, pooled)
}

/// `(s, e)` maximising `p_s(s)·p_e(e)` with `s ≤ e`; the first maximum in scan order wins.
pub fn extract_span(p_s: &[f64], p_e: &[f64]) -> (usize, usize) {
    let mut best = (0, 0);
    let mut best_val = f64::NEG_INFINITY;
    for (s, &a) in p_s.iter().enumerate() {
        for (e, &b) in p_e.iter().enumerate().skip(s) {
            let v = a * b;
            if v > best_val {
                best_val = v;
                best = (s, e);
            }
        }
    }
    best
}

/// Every intermediate of one reformulation step.
#[derive(Debug, Clone, Copy)]
pub struct Reformulated {
    pub beta: Var,
    pub spans: SpanDistributions,
    pub gamma: Var,
    pub pooled: Var,
    pub u_next: Var,
}

pub fn reformulate(
    g: &mut Graph,
    params: &ReformulationParams,
    u: Var,
    v: Var,
) -> Result<Reformulated> {
    let w_c = g.param(params.w_c);
    let (s, beta) = question_aware_doc(g, u, v, w_c)?;
    let w_s = g.param(params.w_s);
    let w_e = g.param(params.w_e);
    let spans = span_distributions(g, s, &params.start, &params.end, w_s, w_e)?;
    let gamma = reading_attention(g, spans)?;
    let v_tilde = reweight_doc(g, v, gamma)?;
    let pooled = dynamic_max_pool(g, v_tilde, g.rows(u))?;
    let u_next = update_question(g, u, pooled)?;
    Ok(Reformulated {
        beta,
        spans,
        gamma,
        pooled,
        u_next,
    })
}
