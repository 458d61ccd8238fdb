//! Relative polar geometry between object boxes and the learnable Gaussian
//! kernel bank that turns it into per-head spatial attention priors.

use std::f64::consts::PI;

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{Graph, NodeId, ParamId, ParamStore, Tensor};

/// Lower bound applied to every kernel spread.
pub const SIGMA_MIN: f64 = 1e-3;
/// Added to every raw pair weight before row normalization.
pub const EPS_P: f64 = 1e-6;

const INIT_RHO_SIGMA: f64 = 0.5;
const INIT_THETA_SIGMA: f64 = PI / 4.0;

/// Object boxes as `(x, y, w, h)` rows: normalized center plus size.
#[derive(Clone, Debug, PartialEq)]
pub struct BoxMatrix {
    rows: Vec<[f64; 4]>,
}

impl BoxMatrix {
    pub fn new(rows: Vec<[f64; 4]>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::invalid("a box matrix needs at least one box"));
        }
        for (i, &[x, y, w, h]) in rows.iter().enumerate() {
            if !(0.0..=1.0).contains(&x) || !(0.0..=1.0).contains(&y) {
                return Err(Error::invalid(format!(
                    "box {i} center ({x}, {y}) outside [0, 1]"
                )));
            }
            if !(w > 0.0 && h > 0.0) {
                return Err(Error::invalid(format!("box {i} has size {w}x{h}")));
            }
        }
        Ok(BoxMatrix { rows })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn rows(&self) -> &[[f64; 4]] {
        &self.rows
    }

    pub fn center(&self, i: usize) -> (f64, f64) {
        (self.rows[i][0], self.rows[i][1])
    }

    /// Reorders boxes so that row `k` of the result is row `order[k]` here.
    pub fn permuted(&self, order: &[usize]) -> BoxMatrix {
        BoxMatrix {
            rows: order.iter().map(|&i| self.rows[i]).collect(),
        }
    }
}

/// Pairwise distance and bearing of object `j` seen from object `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct PolarField {
    pub rho: Tensor,
    pub theta: Tensor,
}

impl PolarField {
    pub fn len(&self) -> usize {
        self.rho.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.rho.is_empty()
    }
}

pub fn relative_polar(boxes: &BoxMatrix) -> PolarField {
    let n = boxes.len();
    let mut rho = Tensor::zeros(&[n, n]);
    let mut theta = Tensor::zeros(&[n, n]);
    for i in 0..n {
        let (xi, yi) = boxes.center(i);
        for j in 0..n {
            if i == j {
                continue;
            }
            let (xj, yj) = boxes.center(j);
            let (dx, dy) = (xj - xi, yj - yi);
            rho.set(i, j, dx.hypot(dy));
            theta.set(i, j, dy.atan2(dx));
        }
    }
    PolarField { rho, theta }
}

/// Plain-value snapshot of the kernel bank: `d_p` joint distance/angle
/// Gaussians shared by all heads, plus one non-negative reduction vector per head.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelBank {
    pub rho_mean: Vec<f64>,
    pub rho_sigma: Vec<f64>,
    pub theta_mean: Vec<f64>,
    pub theta_sigma: Vec<f64>,
    pub reduce: Vec<Vec<f64>>,
}

impl KernelBank {
    pub fn dim(&self) -> usize {
        self.rho_mean.len()
    }

    pub fn heads(&self) -> usize {
        self.reduce.len()
    }
}

/// Parameter handles of a kernel bank stored in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct SpatialParams {
    pub rho_mean: ParamId,
    pub rho_sigma: ParamId,
    pub theta_mean: ParamId,
    pub theta_sigma: ParamId,
    pub reduce: Vec<ParamId>,
}

impl SpatialParams {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        d_p: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let rho_mean: Vec<f64> = (0..d_p).map(|_| rng.gen_range(0.0..=1.0)).collect();
        // (-pi, pi]
        let theta_mean: Vec<f64> = (0..d_p).map(|_| PI - rng.gen_range(0.0..2.0 * PI)).collect();
        let row = |v: Vec<f64>| Tensor::matrix(1, d_p, v);
        let rho_mean = store.insert(format!("{prefix}.rho_mean"), row(rho_mean))?;
        let rho_sigma = store.insert(
            format!("{prefix}.rho_sigma"),
            Tensor::filled(&[1, d_p], INIT_RHO_SIGMA),
        )?;
        let theta_mean = store.insert(format!("{prefix}.theta_mean"), row(theta_mean))?;
        let theta_sigma = store.insert(
            format!("{prefix}.theta_sigma"),
            Tensor::filled(&[1, d_p], INIT_THETA_SIGMA),
        )?;
        let reduce = (0..heads)
            .map(|k| {
                let r = (0..d_p).map(|_| rng.gen_range(0.0..1.0)).collect();
                store.insert(format!("{prefix}.head{k}.reduce"), Tensor::matrix(d_p, 1, r))
            })
            .collect::<Result<_>>()?;
        Ok(SpatialParams {
            rho_mean,
            rho_sigma,
            theta_mean,
            theta_sigma,
            reduce,
        })
    }

    pub fn snapshot(&self, store: &ParamStore) -> KernelBank {
        let v = |id| store.value(id).data().to_vec();
        KernelBank {
            rho_mean: v(self.rho_mean),
            rho_sigma: v(self.rho_sigma),
            theta_mean: v(self.theta_mean),
            theta_sigma: v(self.theta_sigma),
            reduce: self.reduce.iter().map(|&r| v(r)).collect(),
        }
    }

    /// Projects spreads back above [`SIGMA_MIN`] and reduction weights onto `>= 0`.
    pub fn project(&self, store: &mut ParamStore) {
        for id in [self.rho_sigma, self.theta_sigma] {
            for s in store.value_mut(id).data_mut() {
                *s = s.max(SIGMA_MIN);
            }
        }
        for &id in &self.reduce {
            for r in store.value_mut(id).data_mut() {
                *r = r.max(0.0);
            }
        }
    }

    /// Per-head spatial weight nodes for one image.
    pub fn weights(&self, g: &mut Graph, store: &ParamStore, polar: &PolarField) -> Result<Vec<NodeId>> {
        let bank = BankNodes {
            rho_mean: g.param(store, self.rho_mean),
            rho_sigma: g.param(store, self.rho_sigma),
            theta_mean: g.param(store, self.theta_mean),
            theta_sigma: g.param(store, self.theta_sigma),
        };
        let responses = bank.responses(g, polar)?;
        self.reduce
            .iter()
            .map(|&r| {
                let r = g.param(store, r);
                spatial_weight_node(g, responses, r, polar.len())
            })
            .collect()
    }
}

pub(crate) struct BankNodes {
    pub rho_mean: NodeId,
    pub rho_sigma: NodeId,
    pub theta_mean: NodeId,
    pub theta_sigma: NodeId,
}

impl BankNodes {
    fn constants(g: &mut Graph, bank: &KernelBank) -> Self {
        let d = bank.dim();
        let mut row = |v: &[f64]| g.constant(Tensor::matrix(1, d, v.to_vec()));
        BankNodes {
            rho_mean: row(&bank.rho_mean),
            rho_sigma: row(&bank.rho_sigma),
            theta_mean: row(&bank.theta_mean),
            theta_sigma: row(&bank.theta_sigma),
        }
    }

    /// `N^2 x d_p` kernel responses, pair `(i, j)` in row `i * N + j`.
    pub fn responses(&self, g: &mut Graph, polar: &PolarField) -> Result<NodeId> {
        let rho_sigma = g.clamp_min(self.rho_sigma, SIGMA_MIN);
        let theta_sigma = g.clamp_min(self.theta_sigma, SIGMA_MIN);
        g.gaussian_kernel(
            self.rho_mean,
            rho_sigma,
            self.theta_mean,
            theta_sigma,
            polar.rho.data(),
            polar.theta.data(),
        )
    }
}

/// `raw = responses * reduce + EPS_P`, reshaped to `N x N` and row-normalized.
pub(crate) fn spatial_weight_node(
    g: &mut Graph,
    responses: NodeId,
    reduce: NodeId,
    n: usize,
) -> Result<NodeId> {
    let raw = g.matmul(responses, reduce)?;
    let raw = g.add_scalar(raw, EPS_P);
    let raw = g.reshape(raw, &[n, n])?;
    Ok(g.normalize_rows(raw))
}

/// Kernel responses as an `N x N x d_p` tensor.
pub fn kernel_response(polar: &PolarField, bank: &KernelBank) -> Result<Tensor> {
    let mut g = Graph::new();
    let nodes = BankNodes::constants(&mut g, bank);
    let out = nodes.responses(&mut g, polar)?;
    let n = polar.len();
    g.value(out).clone().reshape(&[n, n, bank.dim()])
}

/// Row-stochastic spatial prior of one head from `N x N x d_p` responses.
pub fn spatial_weight(responses: &Tensor, head: usize, bank: &KernelBank) -> Result<Tensor> {
    if head >= bank.heads() {
        return Err(Error::invalid(format!(
            "head {head} out of range for {} heads",
            bank.heads()
        )));
    }
    let n = responses.rows();
    let d = bank.dim();
    if responses.len() != n * n * d {
        return Err(Error::shape("spatial_weight", responses.shape(), &[n, n, d]));
    }
    if bank.reduce[head].iter().any(|&r| r < 0.0) {
        return Err(Error::invalid("reduction weights must be non-negative"));
    }
    let mut g = Graph::new();
    let resp = g.constant(responses.clone().reshape(&[n * n, d])?);
    let r = g.constant(Tensor::matrix(d, 1, bank.reduce[head].clone()));
    let out = spatial_weight_node(&mut g, resp, r, n)?;
    Ok(g.value(out).clone())
}
