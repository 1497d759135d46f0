//! Layers built from graph primitives: affine maps, GRU cells, bidirectional
//! GRUs and window max-pooling.

use rand::Rng;

use crate::error::{Error, Result};
use crate::neural::graph::{Graph, Var};
use crate::neural::tensor::{ParamId, ParamStore, Tensor};

/// `x · W (+ bias)`.
pub fn linear(g: &mut Graph, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
    let y = g.matmul(x, w)?;
    match bias {
        Some(b) => g.add(y, b),
        None => Ok(y),
    }
}

pub fn softmax_rows(g: &mut Graph, x: Var) -> Result<Var> {
    g.softmax_rows(x)
}

/// Column-wise max over rows `[lo, hi)`.
pub fn max_pool_window(g: &mut Graph, x: Var, lo: usize, hi: usize) -> Result<Var> {
    g.max_rows(x, lo, hi)
}

/// Weights of one GRU direction.
///
/// `z = σ(x·W_z + b_z + h·U_z)`, `r = σ(x·W_r + b_r + h·U_r)`,
/// `h̃ = tanh(x·W_h + b_h + (r⊙h)·U_h)`, `h' = (1−z)⊙h + z⊙h̃`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GruParams {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub w_z: ParamId,
    pub u_z: ParamId,
    pub b_z: ParamId,
    pub w_r: ParamId,
    pub u_r: ParamId,
    pub b_r: ParamId,
    pub w_h: ParamId,
    pub u_h: ParamId,
    pub b_h: ParamId,
}

impl GruParams {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        input_dim: usize,
        hidden_dim: usize,
        rng: &mut R,
    ) -> Self {
        let mut w = |s: &str, rows, fan, rng: &mut R| {
            store.add_uniform(format!("{prefix}.{s}"), rows, hidden_dim, fan, rng)
        };
        let w_z = w("w_z", input_dim, input_dim, rng);
        let u_z = w("u_z", hidden_dim, hidden_dim, rng);
        let w_r = w("w_r", input_dim, input_dim, rng);
        let u_r = w("u_r", hidden_dim, hidden_dim, rng);
        let w_h = w("w_h", input_dim, input_dim, rng);
        let u_h = w("u_h", hidden_dim, hidden_dim, rng);
        let mut b = |s: &str| store.add(format!("{prefix}.{s}"), Tensor::zeros(1, hidden_dim));
        let b_z = b("b_z");
        let b_r = b("b_r");
        let b_h = b("b_h");
        Self {
            input_dim,
            hidden_dim,
            w_z,
            u_z,
            b_z,
            w_r,
            u_r,
            b_r,
            w_h,
            u_h,
            b_h,
        }
    }

    pub fn ids(&self) -> [ParamId; 9] {
        [
            self.w_z, self.u_z, self.b_z, self.w_r, self.u_r, self.b_r, self.w_h, self.u_h,
            self.b_h,
        ]
    }

    /// Input projections `X·W + b` for the three gates, one row per time step.
    fn project(&self, g: &mut Graph, x: Var) -> Result<[Var; 3]> {
        let mut out = [x; 3];
        for (slot, (w, b)) in out.iter_mut().zip([
            (self.w_z, self.b_z),
            (self.w_r, self.b_r),
            (self.w_h, self.b_h),
        ]) {
            let wv = g.param(w);
            let bv = g.param(b);
            *slot = linear(g, x, wv, Some(bv))?;
        }
        Ok(out)
    }

    fn step(&self, g: &mut Graph, proj: [Var; 3], h: Var) -> Result<Var> {
        let [xz, xr, xh] = proj;
        let u_z = g.param(self.u_z);
        let u_r = g.param(self.u_r);
        let u_h = g.param(self.u_h);
        let hz = g.matmul(h, u_z)?;
        let az = g.add(xz, hz)?;
        let z = g.sigmoid(az);
        let hr = g.matmul(h, u_r)?;
        let ar = g.add(xr, hr)?;
        let r = g.sigmoid(ar);
        let rh = g.mul(r, h)?;
        let hh = g.matmul(rh, u_h)?;
        let ah = g.add(xh, hh)?;
        let cand = g.tanh(ah);
        let keep = g.one_minus(z);
        let old = g.mul(keep, h)?;
        let new = g.mul(z, cand)?;
        g.add(old, new)
    }

    fn check_input(&self, g: &Graph, x: Var) -> Result<()> {
        if g.cols(x) != self.input_dim {
            return Err(Error::Shape {
                op: "gru input",
                left: g.shape(x),
                right: [self.input_dim, self.hidden_dim],
            });
        }
        Ok(())
    }

    fn check_hidden(&self, g: &Graph, h: Var) -> Result<()> {
        if g.shape(h) != [1, self.hidden_dim] {
            return Err(Error::Shape {
                op: "gru hidden",
                left: g.shape(h),
                right: [1, self.hidden_dim],
            });
        }
        Ok(())
    }
}

/// One GRU step on a single `1 × e` input.
pub fn gru_cell(g: &mut Graph, x: Var, h_prev: Var, p: &GruParams) -> Result<Var> {
    p.check_input(g, x)?;
    if g.rows(x) != 1 {
        return Err(Error::invalid("gru_cell expects a single input row"));
    }
    p.check_hidden(g, h_prev)?;
    let proj = p.project(g, x)?;
    p.step(g, proj, h_prev)
}

/// Runs a GRU over the rows of `seq` (reversed when `reverse`), returning the
/// hidden states in time order as an `L × d` matrix.
pub fn gru_sequence(
    g: &mut Graph,
    seq: Var,
    p: &GruParams,
    h0: Option<Var>,
    reverse: bool,
) -> Result<Var> {
    let len = g.rows(seq);
    if len == 0 {
        return Err(Error::invalid("GRU over an empty sequence"));
    }
    p.check_input(g, seq)?;
    let mut h = match h0 {
        Some(h) => {
            p.check_hidden(g, h)?;
            h
        }
        None => g.zeros(1, p.hidden_dim),
    };
    let [pz, pr, ph] = p.project(g, seq)?;
    let mut states = vec![h; len];
    let order: Vec<usize> = if reverse {
        (0..len).rev().collect()
    } else {
        (0..len).collect()
    };
    for t in order {
        let proj = [
            g.slice_rows(pz, t, t + 1)?,
            g.slice_rows(pr, t, t + 1)?,
            g.slice_rows(ph, t, t + 1)?,
        ];
        h = p.step(g, proj, h)?;
        states[t] = h;
    }
    g.concat_rows(&states)
}

/// Bidirectional GRU with zero initial states. Row `t` is `[forward_t ; backward_t]`.
pub fn bigru(g: &mut Graph, seq: Var, fwd: &GruParams, bwd: &GruParams) -> Result<Var> {
    bigru_with_init(g, seq, fwd, bwd, None, None)
}

pub fn bigru_with_init(
    g: &mut Graph,
    seq: Var,
    fwd: &GruParams,
    bwd: &GruParams,
    h0_fwd: Option<Var>,
    h0_bwd: Option<Var>,
) -> Result<Var> {
    let f = gru_sequence(g, seq, fwd, h0_fwd, false)?;
    let b = gru_sequence(g, seq, bwd, h0_bwd, true)?;
    g.concat_cols(f, b)
}

/// Forward and backward GRU weights sharing input and hidden sizes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BiGru {
    pub fwd: GruParams,
    pub bwd: GruParams,
}

impl BiGru {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        input_dim: usize,
        hidden_dim: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            fwd: GruParams::new(store, &format!("{prefix}.fwd"), input_dim, hidden_dim, rng),
            bwd: GruParams::new(store, &format!("{prefix}.bwd"), input_dim, hidden_dim, rng),
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.fwd.hidden_dim
    }

    pub fn forward(&self, g: &mut Graph, seq: Var) -> Result<Var> {
        bigru(g, seq, &self.fwd, &self.bwd)
    }

    pub fn forward_with_init(
        &self,
        g: &mut Graph,
        seq: Var,
        h0_fwd: Option<Var>,
        h0_bwd: Option<Var>,
    ) -> Result<Var> {
        bigru_with_init(g, seq, &self.fwd, &self.bwd, h0_fwd, h0_bwd)
    }
}
