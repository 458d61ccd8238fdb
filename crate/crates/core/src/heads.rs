//! Per-head linear projections and the residual multi-head aggregation
//! shared by the image and text relation modules.

use rand::Rng;

use crate::error::Result;
use crate::numerics::{Graph, NodeId, ParamId, ParamStore, Tensor};

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    /// Xavier-uniform weight, zero bias.
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let w = (0..fan_in * fan_out)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        let weight = store.insert(format!("{prefix}.weight"), Tensor::matrix(fan_in, fan_out, w))?;
        let bias = store.insert(format!("{prefix}.bias"), Tensor::zeros(&[1, fan_out]))?;
        Ok(Linear { weight, bias })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct MultiHead {
    pub projections: Vec<Linear>,
}

impl MultiHead {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        heads: usize,
        d_in: usize,
        d_head: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let projections = (0..heads)
            .map(|k| Linear::init(store, &format!("{prefix}.head{k}.proj"), d_in, d_head, rng))
            .collect::<Result<_>>()?;
        Ok(MultiHead { projections })
    }

    pub fn heads(&self) -> usize {
        self.projections.len()
    }

    pub fn project(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<Vec<NodeId>> {
        self.projections
            .iter()
            .map(|p| p.forward(g, store, x))
            .collect()
    }
}

/// `X_h X_h^T / sqrt(d_scale)`.
pub(crate) fn scaled_dot(g: &mut Graph, x: NodeId, d_scale: usize) -> Result<NodeId> {
    let s = g.matmul_t(x, x)?;
    Ok(g.scale(s, 1.0 / (d_scale as f64).sqrt()))
}

/// `Concat_k(P_k) + Concat_k(W_k P_k)`.
pub(crate) fn aggregate(g: &mut Graph, projected: &[NodeId], weights: &[NodeId]) -> Result<NodeId> {
    let attended = projected
        .iter()
        .zip(weights)
        .map(|(&p, &w)| g.matmul(w, p))
        .collect::<Result<Vec<_>>>()?;
    let residual = g.concat_cols(projected)?;
    let mixed = g.concat_cols(&attended)?;
    g.add(residual, mixed)
}
