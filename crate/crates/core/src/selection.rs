//! Document selection: contextual encoding with token self-attention, the
//! initial latent question (optionally fused with an image vector), inner
//! product scoring and top-1 choice.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neural::{BiGru, Graph, ParamId, ParamStore, Tensor, Var};

/// Contextual embeddings `[L × 2d]` of a token sequence.
pub fn encode_sequence(g: &mut Graph, ids: &[usize], embed: ParamId, bigru: &BiGru) -> Result<Var> {
    if ids.is_empty() {
        return Err(Error::invalid("cannot encode an empty token sequence"));
    }
    let x = g.embed(embed, ids)?;
    bigru.forward(g, x)
}

#[derive(Debug, Clone, Copy)]
pub struct Attended {
    /// Row `j` is `α_j · d_j · W_s`.
    pub out: Var,
    /// `1 × L` attention weights.
    pub alpha: Var,
}

/// `α = softmax_j(w · d_j)`, output row `j = α_j d_j W_s`.
pub fn self_attend(g: &mut Graph, ctx: Var, w: Var, w_s: Var) -> Result<Attended> {
    let two_d = g.cols(ctx);
    if g.shape(w) != [two_d, 1] || g.shape(w_s) != [two_d, two_d] {
        return Err(Error::Shape {
            op: "self_attend",
            left: g.shape(ctx),
            right: g.shape(w_s),
        });
    }
    let logits = g.matmul(ctx, w)?;
    let row = g.transpose(logits);
    let alpha = g.softmax_rows(row)?;
    let weighted = g.scale_rows(ctx, alpha)?;
    let out = g.matmul(weighted, w_s)?;
    Ok(Attended { out, alpha })
}

/// BiGRU encoder followed by token self-attention.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SequenceEncoder {
    pub bigru: BiGru,
    pub attn: ParamId,
    pub proj: ParamId,
}

impl SequenceEncoder {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        embed_dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let two_d = 2 * hidden;
        Self {
            bigru: BiGru::new(store, &format!("{prefix}.bigru"), embed_dim, hidden, rng),
            attn: store.add_uniform(format!("{prefix}.attn_w"), two_d, 1, two_d, rng),
            proj: store.add_uniform(format!("{prefix}.w_s"), two_d, two_d, two_d, rng),
        }
    }

    pub fn encode(&self, g: &mut Graph, ids: &[usize], embed: ParamId) -> Result<Attended> {
        let ctx = encode_sequence(g, ids, embed, &self.bigru)?;
        let w = g.param(self.attn);
        let ws = g.param(self.proj);
        self_attend(g, ctx, w, ws)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    #[default]
    None,
    Con,
    Avg,
    Bil,
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FusionMode::None => "none",
            FusionMode::Con => "con",
            FusionMode::Avg => "avg",
            FusionMode::Bil => "bil",
        })
    }
}

impl FromStr for FusionMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(FusionMode::None),
            "con" => Ok(FusionMode::Con),
            "avg" => Ok(FusionMode::Avg),
            "bil" => Ok(FusionMode::Bil),
            other => Err(Error::Config(format!("unknown fusion mode {other}"))),
        }
    }
}

/// Weights mapping an image vector into the question space.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusionParams {
    pub image_dim: usize,
    pub img_proj: ParamId,
    pub img_bias: ParamId,
    pub con_proj: ParamId,
    pub con_bias: ParamId,
    pub bilinear: ParamId,
}

impl FusionParams {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        image_dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let two_d = 2 * hidden;
        Self {
            image_dim,
            img_proj: store.add_uniform("fusion.img_proj", image_dim, two_d, image_dim, rng),
            img_bias: store.add("fusion.img_bias", Tensor::zeros(1, two_d)),
            con_proj: store.add_uniform("fusion.con_proj", 2 * two_d, two_d, 2 * two_d, rng),
            con_bias: store.add("fusion.con_bias", Tensor::zeros(1, two_d)),
            bilinear: store.add_uniform("fusion.bilinear", two_d, two_d, two_d, rng),
        }
    }

    /// Image vector projected to `1 × 2d`.
    pub fn project(&self, g: &mut Graph, image: Var) -> Result<Var> {
        let w = g.param(self.img_proj);
        let b = g.param(self.img_bias);
        let p = g.matmul(image, w)?;
        g.add(p, b)
    }
}

/// Latent question matrix `U` and the step that produced it.
#[derive(Debug, Clone, Copy)]
pub struct QuestionState {
    pub u: Var,
    pub step: usize,
}

/// Builds `U⁽⁰⁾` from the question encoding and an optional image vector.
///
/// * `none`: `U = E_Q`
/// * `avg`:  `U = (E_Q + 1·pᵀ) / 2`
/// * `con`:  `U_i = [E_Q,i ; p] W_con + b`
/// * `bil`:  `U_i = E_Q,i + (E_Q,i W_b) ⊙ p`
pub fn init_question_state(
    g: &mut Graph,
    e_q: Var,
    image: Option<Var>,
    mode: FusionMode,
    fusion: Option<&FusionParams>,
) -> Result<QuestionState> {
    let u = match (mode, image, fusion) {
        (FusionMode::None, _, _) => e_q,
        (_, None, _) => {
            return Err(Error::invalid(format!(
                "fusion mode {mode} needs an image vector"
            )));
        }
        (_, Some(_), None) => {
            return Err(Error::invalid(format!(
                "fusion mode {mode} needs fusion weights"
            )));
        }
        (mode, Some(img), Some(fp)) => {
            let p = fp.project(g, img)?;
            let m = g.rows(e_q);
            match mode {
                FusionMode::Avg => {
                    let s = g.add(e_q, p)?;
                    g.scale(s, 0.5)
                }
                FusionMode::Con => {
                    let rows = vec![p; m];
                    let tiled = g.concat_rows(&rows)?;
                    let cat = g.concat_cols(e_q, tiled)?;
                    let w = g.param(fp.con_proj);
                    let b = g.param(fp.con_bias);
                    let y = g.matmul(cat, w)?;
                    g.add(y, b)?
                }
                FusionMode::Bil => {
                    let w = g.param(fp.bilinear);
                    let eq_w = g.matmul(e_q, w)?;
                    let rows = vec![p; m];
                    let tiled = g.concat_rows(&rows)?;
                    let inter = g.mul(eq_w, tiled)?;
                    g.add(e_q, inter)?
                }
                FusionMode::None => unreachable!(),
            }
        }
    };
    Ok(QuestionState { u, step: 0 })
}

/// Document encoding `E_D` as used for ranking.
#[derive(Debug, Clone)]
pub struct EncodedDoc {
    pub doc_id: String,
    pub e_d: Var,
}

/// `mean_rows(U) · mean_rows(E_D)` as a `1 × 1` node.
pub fn score_document(g: &mut Graph, u: Var, e_d: Var) -> Result<Var> {
    if g.cols(u) != g.cols(e_d) {
        return Err(Error::Shape {
            op: "score_document",
            left: g.shape(u),
            right: g.shape(e_d),
        });
    }
    let mu = g.mean_rows(u);
    let md = g.mean_rows(e_d);
    let mdt = g.transpose(md);
    g.matmul(mu, mdt)
}

/// Index of the best-scoring document not in `exclude`; ties go to the smaller id.
pub fn select_top1(scores: &[(&str, f64)], exclude: &HashSet<String>) -> Result<usize> {
    scores
        .iter()
        .enumerate()
        .filter(|(_, (id, _))| !exclude.contains(*id))
        .max_by(|(_, a), (_, b)| a.1.total_cmp(&b.1).then_with(|| b.0.cmp(a.0)))
        .map(|(i, _)| i)
        .ok_or_else(|| Error::invalid("every supporting document is excluded"))
}
