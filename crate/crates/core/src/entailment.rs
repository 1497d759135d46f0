//! Option scoring by entailment: the selected document is the premise and the
//! latent question together with one option is the hypothesis.
//!
//! ```text
//! H   = [U ; BiGRU_hyp(option, h0 = split(mean_rows(U)))]
//! δᵀ  = softmax_rows(H Pᵀ)          A = δᵀ P
//! m   = max_rows(BiGRU_match([A ; H]))
//! z   = m w + b                      scores = softmax over options
//! ```

use rand::Rng;

use crate::error::{Error, Result};
use crate::neural::{BiGru, Graph, ParamId, ParamStore, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EntailmentParams {
    pub hyp: BiGru,
    pub matcher: BiGru,
    pub cls_w: ParamId,
    pub cls_b: ParamId,
}

impl EntailmentParams {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        embed_dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let two_d = 2 * hidden;
        Self {
            hyp: BiGru::new(store, "entail.hyp", embed_dim, hidden, rng),
            matcher: BiGru::new(store, "entail.match", 2 * two_d, hidden, rng),
            cls_w: store.add_uniform("entail.cls_w", two_d, 1, two_d, rng),
            cls_b: store.add("entail.cls_b", Tensor::zeros(1, 1)),
        }
    }
}

/// `H = [U ; option states]`, the option BiGRU seeded from the mean row of `U`.
pub fn encode_hypothesis(
    g: &mut Graph,
    u: Var,
    option_ids: &[usize],
    embed: ParamId,
    hyp: &BiGru,
) -> Result<Var> {
    if option_ids.is_empty() {
        return Err(Error::invalid("empty option"));
    }
    let d = hyp.hidden_dim();
    if g.cols(u) != 2 * d {
        return Err(Error::Shape {
            op: "encode_hypothesis",
            left: g.shape(u),
            right: [2 * d, d],
        });
    }
    let pooled = g.mean_rows(u);
    let h_fwd = g.slice_cols(pooled, 0, d)?;
    let h_bwd = g.slice_cols(pooled, d, 2 * d)?;
    let x = g.embed(embed, option_ids)?;
    let states = hyp.forward_with_init(g, x, Some(h_fwd), Some(h_bwd))?;
    g.concat_rows(&[u, states])
}

/// Cross-attention weights `δᵀ` (`J × K`, rows sum to one) and `A = δᵀ P`.
pub fn premise_attention(g: &mut Graph, p: Var, h: Var) -> Result<(Var, Var)> {
    if g.cols(p) != g.cols(h) {
        return Err(Error::Shape {
            op: "premise_attention",
            left: g.shape(p),
            right: g.shape(h),
        });
    }
    let pt = g.transpose(p);
    let e = g.matmul(h, pt)?;
    let delta_t = g.softmax_rows(e)?;
    let a = g.matmul(delta_t, p)?;
    Ok((delta_t, a))
}

/// Scalar logit for one hypothesis.
pub fn match_and_score(g: &mut Graph, a: Var, h: Var, params: &EntailmentParams) -> Result<Var> {
    if g.rows(a) != g.rows(h) {
        return Err(Error::Shape {
            op: "match_and_score",
            left: g.shape(a),
            right: g.shape(h),
        });
    }
    let m = g.concat_cols(a, h)?;
    let states = params.matcher.forward(g, m)?;
    let pooled = g.max_rows(states, 0, g.rows(states))?;
    let w = g.param(params.cls_w);
    let b = g.param(params.cls_b);
    let z = g.matmul(pooled, w)?;
    g.add(z, b)
}

pub fn option_logit(
    g: &mut Graph,
    v: Var,
    u: Var,
    option_ids: &[usize],
    embed: ParamId,
    params: &EntailmentParams,
) -> Result<Var> {
    let h = encode_hypothesis(g, u, option_ids, embed, &params.hyp)?;
    let (_, a) = premise_attention(g, v, h)?;
    match_and_score(g, a, h, params)
}

/// Softmax over per-option logits, as a `1 × h` row.
pub fn entail_all(
    g: &mut Graph,
    v: Var,
    u: Var,
    options: &[Vec<usize>],
    embed: ParamId,
    params: &EntailmentParams,
) -> Result<Var> {
    if options.len() < 2 {
        return Err(Error::invalid(format!(
            "entailment needs at least two options, got {}",
            options.len()
        )));
    }
    let logits = options
        .iter()
        .map(|o| option_logit(g, v, u, o, embed, params))
        .collect::<Result<Vec<_>>>()?;
    let col = g.concat_rows(&logits)?;
    let row = g.transpose(col);
    g.softmax_rows(row)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (ParamStore, ParamId, EntailmentParams) {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let embed = store.add_uniform("embed", 10, 3, 1, &mut rng);
        let params = EntailmentParams::new(&mut store, 3, 2, &mut rng);
        (store, embed, params)
    }

    #[test]
    fn hypothesis_shape_and_empty_option() {
        let (store, embed, params) = setup();
        let mut g = Graph::new(&store);
        let u = g.constant_raw(2, 4, vec![0.1; 8]);
        let h = encode_hypothesis(&mut g, u, &[5], embed, &params.hyp).unwrap();
        assert_eq!(g.shape(h), [3, 4]);
        assert!(encode_hypothesis(&mut g, u, &[], embed, &params.hyp).is_err());
    }

    #[test]
    fn single_premise_row_gets_all_mass() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let p = g.constant_raw(1, 2, vec![0.3, -0.7]);
        let h = g.constant_raw(3, 2, vec![1.0, 2.0, -1.0, 0.0, 4.0, 4.0]);
        let (delta, a) = premise_attention(&mut g, p, h).unwrap();
        assert_eq!(g.value(delta), &[1.0, 1.0, 1.0]);
        assert_eq!(g.value(a), &[0.3, -0.7, 0.3, -0.7, 0.3, -0.7]);
    }

    #[test]
    fn identical_options_are_uniform() {
        let (store, embed, params) = setup();
        let mut g = Graph::new(&store);
        let v = g.constant_raw(3, 4, (0..12).map(|i| i as f64 * 0.1).collect());
        let u = g.constant_raw(2, 4, vec![0.2; 8]);
        let opts = vec![vec![4, 5]; 4];
        let s = entail_all(&mut g, v, u, &opts, embed, &params).unwrap();
        for &x in g.value(s) {
            assert!((x - 0.25).abs() < 1e-15);
        }
        assert!(entail_all(&mut g, v, u, &opts[..1], embed, &params).is_err());
    }
}
