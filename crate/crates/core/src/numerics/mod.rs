//! Dense tensors, a whole-matrix reverse-mode tape and the finite-difference
//! gradient checker used to validate it.

mod graph;
mod params;
mod tensor;

pub use graph::{wrap_angle, Graph, NodeId};
pub use params::{Param, ParamId, ParamStore};
pub use tensor::Tensor;

use serde::Serialize;

use crate::error::{Error, Result};

/// Norm below which a vector counts as zero for cosine purposes.
pub const EPS_NORM: f64 = 1e-12;

/// Denominator floor of the relative error in [`grad_check`].
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

/// `x W (+ bias)`, with `bias` a `1 x b` row or rank-1 vector of length `b`.
pub fn linear(x: &Tensor, w: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let mut y = x.matmul(w)?;
    if let Some(b) = bias {
        if b.len() != y.cols() {
            return Err(Error::shape("linear bias", y.shape(), b.shape()));
        }
        let c = y.cols();
        for (i, e) in y.data_mut().iter_mut().enumerate() {
            *e += b.data()[i % c];
        }
    }
    Ok(y)
}

pub fn softmax_rows(m: &Tensor) -> Result<Tensor> {
    if m.cols() == 0 {
        return Err(Error::invalid("softmax over an empty row"));
    }
    Ok(m.softmax_rows())
}

/// Cosine similarity; 0 when either vector has norm below [`EPS_NORM`].
pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::shape("cosine", &[u.len()], &[v.len()]));
    }
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nu < EPS_NORM || nv < EPS_NORM {
        return Ok(0.0);
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

#[derive(Clone, Debug, Serialize)]
pub struct TensorCheck {
    pub name: String,
    pub entries: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Flat index of the entry with the largest relative error.
    pub worst_index: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub step: f64,
    pub tolerance: f64,
    pub loss: f64,
    pub tensors: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.tensors.iter().all(|t| t.max_rel_error <= self.tolerance)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.tensors.iter().fold(0.0, |m, t| m.max(t.max_rel_error))
    }
}

/// Compares tape gradients against central differences for every parameter entry.
///
/// `loss_fn` builds a scalar loss node on a fresh graph from the current
/// parameter values. Parameter values are restored before returning.
pub fn grad_check<F>(params: &mut ParamStore, loss_fn: F, h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore, &mut Graph) -> Result<NodeId>,
{
    let eval = |params: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let out = loss_fn(params, &mut g)?;
        Ok(g.scalar(out))
    };

    params.zero_grad();
    let mut graph = Graph::new();
    let out = loss_fn(params, &mut graph)?;
    let loss = graph.scalar(out);
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("loss is {loss} at the unperturbed point")));
    }
    graph.backward(out, params);
    drop(graph);

    let ids: Vec<ParamId> = params.ids().collect();
    let mut tensors = Vec::with_capacity(ids.len());
    for id in ids {
        let name = params.name(id).to_string();
        let analytic = params.grad(id).clone();
        let mut check = TensorCheck {
            name: name.clone(),
            entries: analytic.len(),
            max_rel_error: 0.0,
            max_abs_error: 0.0,
            worst_index: 0,
        };
        for k in 0..analytic.len() {
            let orig = params.value(id).data()[k];
            params.value_mut(id).data_mut()[k] = orig + h;
            let plus = eval(params);
            params.value_mut(id).data_mut()[k] = orig - h;
            let minus = eval(params);
            params.value_mut(id).data_mut()[k] = orig;
            let (plus, minus) = (plus?, minus?);
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss is non-finite when perturbing {name}[{k}] by +/-{h}"
                )));
            }
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.data()[k];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
            check.max_abs_error = check.max_abs_error.max(abs);
            if rel > check.max_rel_error {
                check.max_rel_error = rel;
                check.worst_index = k;
            }
        }
        tensors.push(check);
    }
    params.zero_grad();
    Ok(GradCheckReport {
        step: h,
        tolerance: tol,
        loss,
        tensors,
    })
}
