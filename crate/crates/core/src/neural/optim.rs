use crate::error::{Error, Result};
use crate::neural::tensor::{Grads, ParamStore};

/// Plain SGD with inverse-time decay `lr / (1 + decay · epoch)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sgd {
    pub lr: f64,
    pub decay: f64,
}

impl Default for Sgd {
    fn default() -> Self {
        Self {
            lr: 0.015,
            decay: 0.05,
        }
    }
}

impl Sgd {
    pub fn new(lr: f64, decay: f64) -> Self {
        Self { lr, decay }
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr / (1.0 + self.decay * epoch as f64)
    }

    /// `θ ← θ − lr_t · g` over every unfrozen parameter holding a gradient.
    pub fn step(&self, store: &mut ParamStore, grads: &Grads, epoch: usize) -> Result<()> {
        sgd_step(store, grads, self.lr_at(epoch))
    }
}

pub fn sgd_step(store: &mut ParamStore, grads: &Grads, lr: f64) -> Result<()> {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        if store.is_frozen(id) {
            continue;
        }
        let Some(g) = grads.get(id) else { continue };
        let p = store.get_mut(id);
        if g.len() != p.len() {
            return Err(Error::Shape {
                op: "sgd_step",
                left: p.shape(),
                right: [1, g.len()],
            });
        }
        for (v, d) in p.data_mut().iter_mut().zip(g) {
            *v -= lr * d;
        }
    }
    Ok(())
}

/// Rescales `grads` so its global L2 norm is at most `max_norm`. Returns the pre-clip norm.
pub fn clip_grad_norm(grads: &mut Grads, max_norm: f64) -> f64 {
    let norm = grads.norm();
    if max_norm > 0.0 && norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::graph::Graph;
    use crate::neural::tensor::Tensor;

    #[test]
    fn decay_schedule() {
        let sgd = Sgd::default();
        assert_eq!(sgd.lr_at(0), 0.015);
        assert!((sgd.lr_at(20) - 0.0075).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut ps = ParamStore::new();
        let x = ps.add("x", Tensor::row_vector(vec![1.0, 2.0]));
        let before = ps.clone();
        let mut grads = ps.zero_grads();
        grads.slot_mut(x, 2);
        Sgd::default().step(&mut ps, &grads, 0).unwrap();
        assert_eq!(ps, before);
    }

    #[test]
    fn step_moves_against_gradient() {
        let mut ps = ParamStore::new();
        let x = ps.add("x", Tensor::row_vector(vec![1.0]));
        let grads = {
            let mut g = Graph::new(&ps);
            let xv = g.param(x);
            let sq = g.mul(xv, xv).unwrap();
            let loss = g.sum(sq);
            let mut grads = ps.zero_grads();
            g.backward(loss, &mut grads).unwrap();
            grads
        };
        sgd_step(&mut ps, &grads, 0.1).unwrap();
        assert!((ps.get(x).data()[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn mismatched_gradient_is_an_error() {
        let mut ps = ParamStore::new();
        let x = ps.add("x", Tensor::row_vector(vec![1.0, 2.0]));
        let mut other = ParamStore::new();
        let y = other.add("y", Tensor::row_vector(vec![1.0]));
        let mut grads = other.zero_grads();
        grads.slot_mut(y, 1)[0] = 1.0;
        assert_eq!(x.index(), y.index());
        assert!(sgd_step(&mut ps, &grads, 0.1).is_err());
    }
}
