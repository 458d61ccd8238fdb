//! Reverse-mode differentiation over whole-matrix operations.
//!
//! A [`Graph`] records every operation applied during a forward pass. Nodes
//! are appended in evaluation order, so inputs always precede outputs and the
//! backward sweep is a single reverse scan. Parameter leaves are linked to a
//! [`ParamStore`] entry, and [`Graph::backward`] adds their gradients into
//! the store.

use std::collections::HashMap;
use std::f64::consts::PI;

use super::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    MatMulT(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    MulCol(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Exp(NodeId),
    Ln(NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Relu(NodeId),
    SoftmaxRows(NodeId),
    NormalizeRows(NodeId),
    L2NormalizeRows(NodeId, f64),
    SumRows(NodeId),
    SumAll(NodeId),
    ConcatCols(Vec<NodeId>),
    SliceCols(NodeId, usize),
    ConcatRows(Vec<NodeId>),
    SliceRows(NodeId, usize),
    Gather(NodeId, Vec<usize>),
    Reshape(NodeId),
    ClampMin(NodeId, f64),
    Element(NodeId, usize),
    Stack(Vec<NodeId>),
    GaussianKernel(Box<KernelInputs>),
}

#[derive(Debug)]
struct KernelInputs {
    rho_mean: NodeId,
    rho_sigma: NodeId,
    theta_mean: NodeId,
    theta_sigma: NodeId,
    rho: Vec<f64>,
    theta: Vec<f64>,
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Wraps an angle difference into `(-pi, pi]`.
pub fn wrap_angle(d: f64) -> f64 {
    let mut w = d.rem_euclid(2.0 * PI);
    if w > PI {
        w -= 2.0 * PI;
    }
    w
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_leaves: HashMap<ParamId, NodeId>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value.data()[0]
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[NodeId]) -> NodeId {
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
            param: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Leaf bound to a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        if let Some(&n) = self.param_leaves.get(&id) {
            return n;
        }
        self.nodes.push(Node {
            value: store.value(id).clone(),
            op: Op::Leaf,
            requires_grad: true,
            param: Some(id),
        });
        let n = NodeId(self.nodes.len() - 1);
        self.param_leaves.insert(id, n);
        n
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        let (x, y) = (self.value(a), self.value(b));
        if x.rows() != y.rows() || x.cols() != y.cols() {
            return Err(Error::shape(op, x.shape(), y.shape()));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b), &[a, b]))
    }

    /// `a * b^T`.
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul_t(self.value(b))?;
        Ok(self.push(v, Op::MatMulT(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).transpose();
        self.push(v, Op::Transpose(a), &[a])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("sub", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("mul", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    /// Adds a `1 x c` row to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let (x, r) = (self.value(a), self.value(row));
        if r.rows() != 1 || r.cols() != x.cols() {
            return Err(Error::shape("add_row", x.shape(), r.shape()));
        }
        let c = x.cols();
        let mut v = x.clone();
        for (i, e) in v.data_mut().iter_mut().enumerate() {
            *e += r.data()[i % c];
        }
        Ok(self.push(v, Op::AddRow(a, row), &[a, row]))
    }

    /// Multiplies row `i` of `a` by entry `i` of the `r x 1` column.
    pub fn mul_col(&mut self, a: NodeId, col: NodeId) -> Result<NodeId> {
        let (x, s) = (self.value(a), self.value(col));
        if s.cols() != 1 || s.rows() != x.rows() {
            return Err(Error::shape("mul_col", x.shape(), s.shape()));
        }
        let c = x.cols();
        let mut v = x.clone();
        for (i, e) in v.data_mut().iter_mut().enumerate() {
            *e *= s.data()[i / c];
        }
        Ok(self.push(v, Op::MulCol(a, col), &[a, col]))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let v = self.value(a).scale(s);
        self.push(v, Op::Scale(a, s), &[a])
    }

    pub fn add_scalar(&mut self, a: NodeId, s: f64) -> NodeId {
        let v = self.value(a).map(|x| x + s);
        self.push(v, Op::AddScalar(a), &[a])
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::exp);
        self.push(v, Op::Exp(a), &[a])
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::ln);
        self.push(v, Op::Ln(a), &[a])
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::tanh);
        self.push(v, Op::Tanh(a), &[a])
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| 1.0 / (1.0 + (-x).exp()));
        self.push(v, Op::Sigmoid(a), &[a])
    }

    /// `max(0, x)`; the subgradient at 0 is 0.
    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(v, Op::Relu(a), &[a])
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).softmax_rows();
        self.push(v, Op::SoftmaxRows(a), &[a])
    }

    /// Divides each row by its sum. Entries must be positive.
    pub fn normalize_rows(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).normalize_rows();
        self.push(v, Op::NormalizeRows(a), &[a])
    }

    pub fn l2_normalize_rows(&mut self, a: NodeId, eps: f64) -> NodeId {
        let v = self.value(a).l2_normalize_rows(eps);
        self.push(v, Op::L2NormalizeRows(a, eps), &[a])
    }

    /// Row sums as an `r x 1` column.
    pub fn sum_rows(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        let c = x.cols().max(1);
        let sums: Vec<f64> = x.data().chunks(c).map(|r| r.iter().sum()).collect();
        let v = Tensor::matrix(x.rows(), 1, sums);
        self.push(v, Op::SumRows(a), &[a])
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::SumAll(a), &[a])
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor::concat_cols(&tensors)?;
        Ok(self.push(v, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let v = self.value(a).slice_cols(start, len);
        self.push(v, Op::SliceCols(a, start), &[a])
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor::concat_rows(&tensors)?;
        Ok(self.push(v, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let v = self.value(a).slice_rows(start, len);
        self.push(v, Op::SliceRows(a, start), &[a])
    }

    /// Stacks rows `ids[j]` of `table`.
    pub fn gather_rows(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let t = self.value(table);
        if let Some(&bad) = ids.iter().find(|&&i| i >= t.rows()) {
            return Err(Error::invalid(format!(
                "row index {bad} out of range for table with {} rows",
                t.rows()
            )));
        }
        let c = t.cols();
        let mut data = Vec::with_capacity(ids.len() * c);
        for &i in ids {
            data.extend_from_slice(t.row(i));
        }
        let v = Tensor::matrix(ids.len(), c, data);
        Ok(self.push(v, Op::Gather(table, ids.to_vec()), &[table]))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let v = self.value(a).clone().reshape(shape)?;
        Ok(self.push(v, Op::Reshape(a), &[a]))
    }

    /// `max(x, floor)`. Gradient passes where `x >= floor`, so a value projected
    /// onto the floor can still move off it.
    pub fn clamp_min(&mut self, a: NodeId, floor: f64) -> NodeId {
        let v = self.value(a).map(|x| x.max(floor));
        self.push(v, Op::ClampMin(a, floor), &[a])
    }

    /// Entry `(r, c)` as a `1 x 1` node.
    pub fn element(&mut self, a: NodeId, r: usize, c: usize) -> NodeId {
        let x = self.value(a);
        let flat = r * x.cols() + c;
        let v = Tensor::scalar(x.data()[flat]);
        self.push(v, Op::Element(a, flat), &[a])
    }

    /// Lays out `1 x 1` nodes row-major into a `rows x cols` matrix.
    pub fn stack(&mut self, scalars: &[NodeId], rows: usize, cols: usize) -> Result<NodeId> {
        if scalars.len() != rows * cols {
            return Err(Error::shape("stack", &[scalars.len()], &[rows, cols]));
        }
        let data = scalars.iter().map(|&s| self.scalar(s)).collect();
        let v = Tensor::matrix(rows, cols, data);
        Ok(self.push(v, Op::Stack(scalars.to_vec()), scalars))
    }

    /// Joint distance/angle Gaussian responses for a list of polar points.
    ///
    /// Output row `p`, column `m` is
    /// `exp(-(rho_p - rho_mean_m)^2 / 2 rho_sigma_m^2) * exp(-d_m^2 / 2 theta_sigma_m^2)`
    /// with `d_m` the wrapped angular difference. The four parameter nodes are
    /// `1 x d` rows; sigmas are used as given (clamp them beforehand).
    pub fn gaussian_kernel(
        &mut self,
        rho_mean: NodeId,
        rho_sigma: NodeId,
        theta_mean: NodeId,
        theta_sigma: NodeId,
        rho: &[f64],
        theta: &[f64],
    ) -> Result<NodeId> {
        let d = self.value(rho_mean).len();
        for n in [rho_sigma, theta_mean, theta_sigma] {
            if self.value(n).len() != d {
                return Err(Error::shape(
                    "gaussian_kernel",
                    self.value(rho_mean).shape(),
                    self.value(n).shape(),
                ));
            }
        }
        if rho.len() != theta.len() {
            return Err(Error::shape("gaussian_kernel", &[rho.len()], &[theta.len()]));
        }
        let (mr, sr, mt, st) = (
            self.value(rho_mean).data(),
            self.value(rho_sigma).data(),
            self.value(theta_mean).data(),
            self.value(theta_sigma).data(),
        );
        let mut out = Vec::with_capacity(rho.len() * d);
        for (&r, &t) in rho.iter().zip(theta) {
            for m in 0..d {
                let dr = r - mr[m];
                let dt = wrap_angle(t - mt[m]);
                let e = -dr * dr / (2.0 * sr[m] * sr[m]) - dt * dt / (2.0 * st[m] * st[m]);
                out.push(e.exp());
            }
        }
        let v = Tensor::matrix(rho.len(), d, out);
        let inputs = KernelInputs {
            rho_mean,
            rho_sigma,
            theta_mean,
            theta_sigma,
            rho: rho.to_vec(),
            theta: theta.to_vec(),
        };
        Ok(self.push(
            v,
            Op::GaussianKernel(Box::new(inputs)),
            &[rho_mean, rho_sigma, theta_mean, theta_sigma],
        ))
    }

    /// Gradients of the scalar node `output` with respect to every node.
    pub fn gradients(&self, output: NodeId) -> Vec<Option<Tensor>> {
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Tensor::filled(self.value(output).shape(), 1.0));
        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.propagate(&node.op, &node.value, &g, &mut grads);
            grads[i] = Some(g);
        }
        grads
    }

    /// Backpropagates from a scalar node and adds parameter gradients into `store`.
    pub fn backward(&self, output: NodeId, store: &mut ParamStore) {
        let grads = self.gradients(output);
        for (node, g) in self.nodes.iter().zip(grads) {
            if let (Some(pid), Some(g)) = (node.param, g) {
                store.accumulate(pid, &g);
            }
        }
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let mut send = |id: NodeId, t: Tensor| {
            if !self.nodes[id.0].requires_grad {
                return;
            }
            match &mut grads[id.0] {
                Some(acc) => acc.add_assign(&t),
                slot => *slot = Some(t),
            }
        };
        let val = |id: NodeId| &self.nodes[id.0].value;
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                send(*a, g.matmul_t(val(*b)).unwrap());
                send(*b, val(*a).t_matmul(g).unwrap());
            }
            Op::MatMulT(a, b) => {
                send(*a, g.matmul(val(*b)).unwrap());
                send(*b, g.t_matmul(val(*a)).unwrap());
            }
            Op::Transpose(a) => send(*a, g.transpose()),
            Op::Add(a, b) => {
                send(*a, g.clone());
                send(*b, g.clone());
            }
            Op::Sub(a, b) => {
                send(*a, g.clone());
                send(*b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                send(*a, g.zip_map(val(*b), |x, y| x * y));
                send(*b, g.zip_map(val(*a), |x, y| x * y));
            }
            Op::AddRow(a, r) => {
                send(*a, g.clone());
                let c = g.cols();
                let mut col_sums = vec![0.0; c];
                for (i, v) in g.data().iter().enumerate() {
                    col_sums[i % c] += v;
                }
                send(*r, Tensor::matrix(1, c, col_sums));
            }
            Op::MulCol(a, s) => {
                let (x, sv) = (val(*a), val(*s));
                let c = x.cols();
                let mut ga = g.clone();
                let mut gs = vec![0.0; x.rows()];
                for (i, e) in ga.data_mut().iter_mut().enumerate() {
                    gs[i / c] += *e * x.data()[i];
                    *e *= sv.data()[i / c];
                }
                send(*a, ga);
                send(*s, Tensor::matrix(x.rows(), 1, gs));
            }
            Op::Scale(a, s) => send(*a, g.scale(*s)),
            Op::AddScalar(a) => send(*a, g.clone()),
            Op::Exp(a) => send(*a, g.zip_map(out, |x, y| x * y)),
            Op::Ln(a) => send(*a, g.zip_map(val(*a), |x, y| x / y)),
            Op::Tanh(a) => send(*a, g.zip_map(out, |x, y| x * (1.0 - y * y))),
            Op::Sigmoid(a) => send(*a, g.zip_map(out, |x, y| x * y * (1.0 - y))),
            Op::Relu(a) => send(*a, g.zip_map(val(*a), |x, y| if y > 0.0 { x } else { 0.0 })),
            Op::SoftmaxRows(a) => {
                let c = out.cols().max(1);
                let mut ga = g.clone();
                for (grow, yrow) in ga.data_mut().chunks_mut(c).zip(out.data().chunks(c)) {
                    let dot: f64 = grow.iter().zip(yrow).map(|(x, y)| x * y).sum();
                    for (e, y) in grow.iter_mut().zip(yrow) {
                        *e = y * (*e - dot);
                    }
                }
                send(*a, ga);
            }
            Op::NormalizeRows(a) => {
                let c = out.cols().max(1);
                let x = val(*a);
                let mut ga = g.clone();
                for ((grow, yrow), xrow) in ga
                    .data_mut()
                    .chunks_mut(c)
                    .zip(out.data().chunks(c))
                    .zip(x.data().chunks(c))
                {
                    let total: f64 = xrow.iter().sum();
                    let dot: f64 = grow.iter().zip(yrow).map(|(x, y)| x * y).sum();
                    for e in grow.iter_mut() {
                        *e = (*e - dot) / total;
                    }
                }
                send(*a, ga);
            }
            Op::L2NormalizeRows(a, eps) => {
                let c = out.cols().max(1);
                let x = val(*a);
                let mut ga = g.clone();
                for ((grow, yrow), xrow) in ga
                    .data_mut()
                    .chunks_mut(c)
                    .zip(out.data().chunks(c))
                    .zip(x.data().chunks(c))
                {
                    let n = xrow.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if n < *eps {
                        grow.iter_mut().for_each(|e| *e = 0.0);
                        continue;
                    }
                    let dot: f64 = grow.iter().zip(yrow).map(|(x, y)| x * y).sum();
                    for (e, y) in grow.iter_mut().zip(yrow) {
                        *e = (*e - y * dot) / n;
                    }
                }
                send(*a, ga);
            }
            Op::SumRows(a) => {
                let x = val(*a);
                let c = x.cols();
                let data = (0..x.len()).map(|i| g.data()[i / c]).collect();
                send(*a, Tensor::new(x.shape().to_vec(), data).unwrap());
            }
            Op::SumAll(a) => send(*a, Tensor::filled(val(*a).shape(), g.data()[0])),
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for &p in parts {
                    let w = val(p).cols();
                    send(p, g.slice_cols(start, w));
                    start += w;
                }
            }
            Op::SliceCols(a, start) => {
                let x = val(*a);
                let (c, w) = (x.cols(), g.cols());
                let mut ga = Tensor::zeros(&[x.rows(), c]);
                for i in 0..x.rows() {
                    ga.row_mut(i)[*start..start + w].copy_from_slice(g.row(i));
                }
                send(*a, ga);
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let h = val(p).rows();
                    send(p, g.slice_rows(start, h));
                    start += h;
                }
            }
            Op::SliceRows(a, start) => {
                let x = val(*a);
                let c = x.cols();
                let mut ga = Tensor::zeros(&[x.rows(), c]);
                ga.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                send(*a, ga);
            }
            Op::Gather(t, ids) => {
                let x = val(*t);
                let mut gt = Tensor::zeros(x.shape());
                for (j, &i) in ids.iter().enumerate() {
                    for (e, v) in gt.row_mut(i).iter_mut().zip(g.row(j)) {
                        *e += v;
                    }
                }
                send(*t, gt);
            }
            Op::Reshape(a) => send(*a, g.clone().reshape(val(*a).shape()).unwrap()),
            Op::ClampMin(a, floor) => {
                send(*a, g.zip_map(val(*a), |x, y| if y >= *floor { x } else { 0.0 }))
            }
            Op::Element(a, flat) => {
                let mut ga = Tensor::zeros(val(*a).shape());
                ga.data_mut()[*flat] = g.data()[0];
                send(*a, ga);
            }
            Op::Stack(parts) => {
                for (k, &p) in parts.iter().enumerate() {
                    send(p, Tensor::scalar(g.data()[k]));
                }
            }
            Op::GaussianKernel(k) => {
                let (mr, sr, mt, st) = (
                    val(k.rho_mean),
                    val(k.rho_sigma),
                    val(k.theta_mean),
                    val(k.theta_sigma),
                );
                let d = mr.len();
                let mut g_mr = vec![0.0; d];
                let mut g_sr = vec![0.0; d];
                let mut g_mt = vec![0.0; d];
                let mut g_st = vec![0.0; d];
                for (p, (&r, &t)) in k.rho.iter().zip(&k.theta).enumerate() {
                    for m in 0..d {
                        let gy = g.data()[p * d + m] * out.data()[p * d + m];
                        if gy == 0.0 {
                            continue;
                        }
                        let dr = r - mr.data()[m];
                        let dt = wrap_angle(t - mt.data()[m]);
                        let (s_r, s_t) = (sr.data()[m], st.data()[m]);
                        g_mr[m] += gy * dr / (s_r * s_r);
                        g_sr[m] += gy * dr * dr / (s_r * s_r * s_r);
                        g_mt[m] += gy * dt / (s_t * s_t);
                        g_st[m] += gy * dt * dt / (s_t * s_t * s_t);
                    }
                }
                let shape = |t: &Tensor, v| Tensor::new(t.shape().to_vec(), v).unwrap();
                send(k.rho_mean, shape(mr, g_mr));
                send(k.rho_sigma, shape(sr, g_sr));
                send(k.theta_mean, shape(mt, g_mt));
                send(k.theta_sigma, shape(st, g_st));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wrap_angle_range() {
        assert!((wrap_angle(6.0) - (6.0 - 2.0 * PI)).abs() < 1e-15);
        assert!((wrap_angle(-6.0) - (2.0 * PI - 6.0)).abs() < 1e-15);
        assert_eq!(wrap_angle(PI), PI);
        assert_eq!(wrap_angle(-PI), PI);
        assert_eq!(wrap_angle(0.0), 0.0);
    }

    #[test]
    fn shared_param_leaf_accumulates() {
        let mut store = ParamStore::new();
        let w = store.insert("w", Tensor::row_vector(&[1.0, 2.0])).unwrap();
        let mut g = Graph::new();
        let a = g.param(&store, w);
        let b = g.param(&store, w);
        assert_eq!(a, b);
        let prod = g.mul(a, b).unwrap();
        let loss = g.sum_all(prod);
        g.backward(loss, &mut store);
        assert_eq!(store.grad(w).data(), &[2.0, 4.0]);
    }

    #[test]
    fn constants_get_no_gradient_work() {
        let mut store = ParamStore::new();
        let w = store.insert("w", Tensor::scalar(3.0)).unwrap();
        let mut g = Graph::new();
        let c = g.constant(Tensor::scalar(5.0));
        let p = g.param(&store, w);
        let y = g.mul(c, p).unwrap();
        let grads = g.gradients(y);
        assert!(grads[c.0].is_none());
        assert_eq!(grads[p.0].as_ref().unwrap().data(), &[5.0]);
    }

    #[test]
    fn binary_shape_mismatch_is_error() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[3, 2]));
        assert!(g.add(a, b).is_err());
        assert!(g.matmul(a, a).is_err());
        assert!(g.matmul(a, b).is_ok());
    }
}
