use std::cell::RefCell;
use std::fmt;

use super::kernels;
use super::Tensor;
use crate::error::{Error, Result};

/// Rows with an L2 norm below this are treated as zero by `norm_rows` and
/// `normalize_rows` (zero output, zero gradient).
pub const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Const,
    MatMul(usize, usize),
    /// `a · bᵀ`
    MatMulNt(usize, usize),
    Add(usize, usize),
    /// `a[r,c] + b[c]` broadcast over rows
    AddRow(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Relu(usize),
    Tanh(usize),
    Softmax(usize),
    LogSoftmax(usize),
    Log(usize),
    Sum(usize),
    Mean(usize),
    SumRows(usize),
    NormRows(usize),
    NormalizeRows(usize),
    SelectRows(usize, Vec<usize>),
    SelectCols(usize, Vec<usize>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Const => "const",
            Op::MatMul(..) => "matmul",
            Op::MatMulNt(..) => "matmul_nt",
            Op::Add(..) => "add",
            Op::AddRow(..) => "add_row",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Relu(_) => "relu",
            Op::Tanh(_) => "tanh",
            Op::Softmax(_) => "softmax",
            Op::LogSoftmax(_) => "log_softmax",
            Op::Log(_) => "log",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::SumRows(_) => "sum_rows",
            Op::NormRows(_) => "norm_rows",
            Op::NormalizeRows(_) => "normalize_rows",
            Op::SelectRows(..) => "select_rows",
            Op::SelectCols(..) => "select_cols",
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Records operations for one forward pass.
///
/// Node ids are assigned in creation order, so the order itself is a valid
/// topological order and the backward sweep is a simple reverse scan.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("nodes", &self.nodes.borrow().len())
            .finish()
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}", self.id)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Differentiable input.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(Op::Leaf, value, true)
    }

    /// Non-differentiable input; gradients never flow into it.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(Op::Const, value, false)
    }

    fn push(&self, op: Op, value: Tensor, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn requires_grad(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    /// Reverse sweep from a scalar `output`; returns its value and the
    /// gradient for each of `wanted` (zeros for leaves the output does not
    /// depend on). The tape is left untouched, so repeated calls agree.
    pub fn value_and_grad(&self, output: Var<'_>, wanted: &[Var<'_>]) -> Result<(f64, Vec<Tensor>)> {
        self.check_owner(output)?;
        let nodes = self.nodes.borrow();
        let out = &nodes[output.id];
        if out.value.len() != 1 {
            return Err(Error::contract(format!(
                "value_and_grad needs a scalar output, got shape {:?}",
                out.value.shape()
            )));
        }
        for w in wanted {
            self.check_owner(*w)?;
            if !matches!(nodes[w.id].op, Op::Leaf) {
                return Err(Error::contract(format!("{w:?} is not a tape leaf")));
            }
        }

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; output.id + 1];
        grads[output.id] = Some(vec![1.0]);

        for id in (0..=output.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
                continue;
            }
            backward_node(&nodes, node, &g, &mut grads)?;
        }

        let value = out.value.data()[0];
        let result = wanted
            .iter()
            .map(|w| {
                let shape = nodes[w.id].value.shape().to_vec();
                match grads.get(w.id).and_then(Option::as_ref) {
                    Some(g) => Tensor::from_parts(shape, g.clone()),
                    None => Tensor::zeros(&shape),
                }
            })
            .collect();
        Ok((value, result))
    }

    fn check_owner(&self, v: Var<'_>) -> Result<()> {
        if !std::ptr::eq(self, v.tape) {
            return Err(Error::contract("variable belongs to a different tape"));
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], nodes: &[Node], id: usize, g: Vec<f64>) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(existing) => {
            for (e, v) in existing.iter_mut().zip(g) {
                *e += v;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn backward_node(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
    let val = |i: usize| &nodes[i].value;
    let y = node.value.data();
    match &node.op {
        Op::Leaf | Op::Const => {}
        Op::MatMul(a, b) => {
            let (m, k) = val(*a).as_matrix("matmul")?;
            let n = val(*b).cols();
            if nodes[*a].requires_grad {
                accumulate(grads, nodes, *a, kernels::matmul_nt(g, val(*b).data(), m, n, k));
            }
            if nodes[*b].requires_grad {
                accumulate(grads, nodes, *b, kernels::matmul_tn(val(*a).data(), g, m, k, n));
            }
        }
        Op::MatMulNt(a, b) => {
            let (m, k) = val(*a).as_matrix("matmul_nt")?;
            let n = val(*b).rows();
            if nodes[*a].requires_grad {
                accumulate(grads, nodes, *a, kernels::matmul(g, val(*b).data(), m, n, k));
            }
            if nodes[*b].requires_grad {
                accumulate(grads, nodes, *b, kernels::matmul_tn(g, val(*a).data(), m, n, k));
            }
        }
        Op::Add(a, b) => {
            accumulate(grads, nodes, *a, g.to_vec());
            accumulate(grads, nodes, *b, g.to_vec());
        }
        Op::AddRow(a, b) => {
            accumulate(grads, nodes, *a, g.to_vec());
            if nodes[*b].requires_grad {
                let c = val(*b).len();
                let mut gb = vec![0.0; c];
                for row in g.chunks(c) {
                    for (o, v) in gb.iter_mut().zip(row) {
                        *o += v;
                    }
                }
                accumulate(grads, nodes, *b, gb);
            }
        }
        Op::Sub(a, b) => {
            accumulate(grads, nodes, *a, g.to_vec());
            accumulate(grads, nodes, *b, g.iter().map(|v| -v).collect());
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a).data(), val(*b).data());
            if nodes[*a].requires_grad {
                accumulate(grads, nodes, *a, g.iter().zip(bv).map(|(g, b)| g * b).collect());
            }
            if nodes[*b].requires_grad {
                accumulate(grads, nodes, *b, g.iter().zip(av).map(|(g, a)| g * a).collect());
            }
        }
        Op::Scale(a, s) => accumulate(grads, nodes, *a, g.iter().map(|v| v * s).collect()),
        Op::Relu(a) => {
            let x = val(*a).data();
            accumulate(
                grads,
                nodes,
                *a,
                g.iter().zip(x).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect(),
            );
        }
        Op::Tanh(a) => accumulate(
            grads,
            nodes,
            *a,
            g.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect(),
        ),
        Op::Softmax(a) => {
            let c = node.value.cols();
            let mut out = vec![0.0; g.len()];
            for ((gr, yr), or) in g.chunks(c).zip(y.chunks(c)).zip(out.chunks_mut(c)) {
                let s = kernels::dot(gr, yr);
                for ((o, gv), yv) in or.iter_mut().zip(gr).zip(yr) {
                    *o = yv * (gv - s);
                }
            }
            accumulate(grads, nodes, *a, out);
        }
        Op::LogSoftmax(a) => {
            let c = node.value.cols();
            let mut out = vec![0.0; g.len()];
            for ((gr, yr), or) in g.chunks(c).zip(y.chunks(c)).zip(out.chunks_mut(c)) {
                let s: f64 = gr.iter().sum();
                for ((o, gv), yv) in or.iter_mut().zip(gr).zip(yr) {
                    *o = gv - yv.exp() * s;
                }
            }
            accumulate(grads, nodes, *a, out);
        }
        Op::Log(a) => {
            let x = val(*a).data();
            accumulate(grads, nodes, *a, g.iter().zip(x).map(|(g, x)| g / x).collect());
        }
        Op::Sum(a) => {
            let n = val(*a).len();
            accumulate(grads, nodes, *a, vec![g[0]; n]);
        }
        Op::Mean(a) => {
            let n = val(*a).len();
            accumulate(grads, nodes, *a, vec![g[0] / n as f64; n]);
        }
        Op::SumRows(a) => {
            let c = val(*a).cols();
            let out = g.iter().flat_map(|&gv| std::iter::repeat_n(gv, c)).collect();
            accumulate(grads, nodes, *a, out);
        }
        Op::NormRows(a) => {
            let x = val(*a);
            let c = x.cols();
            let mut out = vec![0.0; x.len()];
            for (i, (xr, or)) in x.data().chunks(c).zip(out.chunks_mut(c)).enumerate() {
                let norm = y[i];
                if norm < NORM_EPS {
                    continue;
                }
                for (o, xv) in or.iter_mut().zip(xr) {
                    *o = g[i] * xv / norm;
                }
            }
            accumulate(grads, nodes, *a, out);
        }
        Op::NormalizeRows(a) => {
            let x = val(*a);
            let c = x.cols();
            let mut out = vec![0.0; x.len()];
            for (((xr, yr), gr), or) in x
                .data()
                .chunks(c)
                .zip(y.chunks(c))
                .zip(g.chunks(c))
                .zip(out.chunks_mut(c))
            {
                let norm = kernels::dot(xr, xr).sqrt();
                if norm < NORM_EPS {
                    continue;
                }
                let proj = kernels::dot(yr, gr);
                for ((o, gv), yv) in or.iter_mut().zip(gr).zip(yr) {
                    *o = (gv - yv * proj) / norm;
                }
            }
            accumulate(grads, nodes, *a, out);
        }
        Op::SelectRows(a, idx) => {
            let x = val(*a);
            let c = x.cols();
            let mut out = vec![0.0; x.len()];
            for (k, &r) in idx.iter().enumerate() {
                for j in 0..c {
                    out[r * c + j] += g[k * c + j];
                }
            }
            accumulate(grads, nodes, *a, out);
        }
        Op::SelectCols(a, idx) => {
            let x = val(*a);
            let c = x.cols();
            let w = idx.len();
            let mut out = vec![0.0; x.len()];
            for i in 0..x.rows() {
                for (k, &j) in idx.iter().enumerate() {
                    out[i * c + j] += g[i * w + k];
                }
            }
            accumulate(grads, nodes, *a, out);
        }
    }
    Ok(())
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    /// Copy of the forward value.
    pub fn value(&self) -> Tensor {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    fn same_tape(&self, other: &Var<'t>) -> Result<()> {
        if !std::ptr::eq(self.tape, other.tape) {
            return Err(Error::contract("operands live on different tapes"));
        }
        Ok(())
    }

    fn unary(&self, op: Op, f: impl FnOnce(&Tensor) -> Result<Tensor>) -> Result<Var<'t>> {
        let out = {
            let nodes = self.tape.nodes.borrow();
            f(&nodes[self.id].value)?
        };
        let name = op.name();
        if out.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: name });
        }
        let rg = self.tape.requires_grad(&[self.id]);
        Ok(self.tape.push(op, out, rg))
    }

    fn binary(
        &self,
        other: &Var<'t>,
        op: Op,
        f: impl FnOnce(&Tensor, &Tensor) -> Result<Tensor>,
    ) -> Result<Var<'t>> {
        self.same_tape(other)?;
        let out = {
            let nodes = self.tape.nodes.borrow();
            f(&nodes[self.id].value, &nodes[other.id].value)?
        };
        let name = op.name();
        if out.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: name });
        }
        let rg = self.tape.requires_grad(&[self.id, other.id]);
        Ok(self.tape.push(op, out, rg))
    }

    pub fn matmul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Op::MatMul(self.id, other.id), |a, b| a.matmul(b))
    }

    /// `self · otherᵀ` without materializing the transpose.
    pub fn matmul_nt(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Op::MatMulNt(self.id, other.id), |a, b| {
            let (m, k) = a.as_matrix("matmul_nt")?;
            let (n, k2) = b.as_matrix("matmul_nt")?;
            if k != k2 {
                return Err(Error::dim(format!(
                    "matmul_nt inner dims {:?} x {:?}ᵀ",
                    a.shape(),
                    b.shape()
                )));
            }
            Ok(Tensor::from_parts(
                vec![m, n],
                kernels::matmul_nt(a.data(), b.data(), m, k, n),
            ))
        })
    }

    /// Elementwise sum. A rank-1 right operand whose length matches the
    /// trailing axis is broadcast over rows.
    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let (ls, rs) = (self.shape(), other.shape());
        if ls == rs {
            return self.binary(other, Op::Add(self.id, other.id), |a, b| {
                Ok(zip_map(a, b, |x, y| x + y))
            });
        }
        if rs.len() == 1 && ls.len() == 2 && ls[1] == rs[0] {
            return self.binary(other, Op::AddRow(self.id, other.id), |a, b| {
                let c = b.len();
                let data = a
                    .data()
                    .chunks(c)
                    .flat_map(|row| row.iter().zip(b.data()).map(|(x, y)| x + y))
                    .collect();
                Ok(Tensor::from_parts(a.shape().to_vec(), data))
            });
        }
        Err(Error::dim(format!("add {ls:?} + {rs:?}")))
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.elementwise(other, Op::Sub(self.id, other.id), |x, y| x - y)
    }

    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.elementwise(other, Op::Mul(self.id, other.id), |x, y| x * y)
    }

    fn elementwise(&self, other: &Var<'t>, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var<'t>> {
        let (ls, rs) = (self.shape(), other.shape());
        if ls != rs {
            return Err(Error::dim(format!("{} {ls:?} vs {rs:?}", op.name())));
        }
        self.binary(other, op, |a, b| Ok(zip_map(a, b, f)))
    }

    pub fn scale(&self, s: f64) -> Result<Var<'t>> {
        self.unary(Op::Scale(self.id, s), |a| Ok(a.map(|v| v * s)))
    }

    pub fn relu(&self) -> Result<Var<'t>> {
        self.unary(Op::Relu(self.id), |a| Ok(a.map(|v| v.max(0.0))))
    }

    pub fn tanh(&self) -> Result<Var<'t>> {
        self.unary(Op::Tanh(self.id), |a| Ok(a.map(f64::tanh)))
    }

    /// Row-wise softmax over the trailing axis.
    pub fn softmax(&self) -> Result<Var<'t>> {
        self.unary(Op::Softmax(self.id), |a| Ok(rowwise(a, kernels::softmax_row)))
    }

    /// Row-wise log-softmax over the trailing axis.
    pub fn log_softmax(&self) -> Result<Var<'t>> {
        self.unary(Op::LogSoftmax(self.id), |a| {
            Ok(rowwise(a, kernels::log_softmax_row))
        })
    }

    pub fn ln(&self) -> Result<Var<'t>> {
        self.unary(Op::Log(self.id), |a| Ok(a.map(f64::ln)))
    }

    pub fn sum(&self) -> Result<Var<'t>> {
        self.unary(Op::Sum(self.id), |a| Ok(Tensor::scalar(a.data().iter().sum())))
    }

    pub fn mean(&self) -> Result<Var<'t>> {
        self.unary(Op::Mean(self.id), |a| {
            Ok(Tensor::scalar(a.data().iter().sum::<f64>() / a.len() as f64))
        })
    }

    /// Sum along the trailing axis: `[r, c] -> [r]`.
    pub fn sum_rows(&self) -> Result<Var<'t>> {
        self.unary(Op::SumRows(self.id), |a| {
            let data = a.data().chunks(a.cols()).map(|r| r.iter().sum()).collect();
            Ok(Tensor::from_parts(vec![a.rows()], data))
        })
    }

    /// L2 norm along the trailing axis: `[r, c] -> [r]`.
    pub fn norm_rows(&self) -> Result<Var<'t>> {
        self.unary(Op::NormRows(self.id), |a| {
            let data = a
                .data()
                .chunks(a.cols())
                .map(|r| {
                    let n = kernels::dot(r, r).sqrt();
                    if n < NORM_EPS {
                        0.0
                    } else {
                        n
                    }
                })
                .collect();
            Ok(Tensor::from_parts(vec![a.rows()], data))
        })
    }

    /// `x / ‖x‖₂` per row; rows with norm below [`NORM_EPS`] map to zero.
    pub fn normalize_rows(&self) -> Result<Var<'t>> {
        self.unary(Op::NormalizeRows(self.id), |a| {
            let c = a.cols();
            let mut data = a.data().to_vec();
            for row in data.chunks_mut(c) {
                let n = kernels::dot(row, row).sqrt();
                if n < NORM_EPS {
                    row.iter_mut().for_each(|v| *v = 0.0);
                } else {
                    row.iter_mut().for_each(|v| *v /= n);
                }
            }
            Ok(Tensor::from_parts(a.shape().to_vec(), data))
        })
    }

    pub fn select_rows(&self, indices: &[usize]) -> Result<Var<'t>> {
        self.unary(Op::SelectRows(self.id, indices.to_vec()), |a| {
            a.select_rows(indices)
        })
    }

    pub fn select_cols(&self, indices: &[usize]) -> Result<Var<'t>> {
        self.unary(Op::SelectCols(self.id, indices.to_vec()), |a| {
            let c = a.cols();
            if indices.is_empty() {
                return Err(Error::dim("select_cols with no indices"));
            }
            if let Some(&bad) = indices.iter().find(|&&j| j >= c) {
                return Err(Error::dim(format!("column {bad} out of range for {c}")));
            }
            let data = a
                .data()
                .chunks(c)
                .flat_map(|row| indices.iter().map(move |&j| row[j]))
                .collect();
            Ok(Tensor::from_parts(vec![a.rows(), indices.len()], data))
        })
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_parts(a.shape().to_vec(), data)
}

fn rowwise(a: &Tensor, f: impl Fn(&[f64], &mut [f64])) -> Tensor {
    let c = a.cols();
    let mut out = vec![0.0; a.len()];
    for (r, o) in a.data().chunks(c).zip(out.chunks_mut(c)) {
        f(r, o);
    }
    Tensor::from_parts(a.shape().to_vec(), out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    type Build = dyn for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>;

    fn eval(build: &Build, inputs: &[Tensor]) -> f64 {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        build(&tape, &vars).unwrap().value().item().unwrap()
    }

    /// Central differences against the tape, relative to the gradient scale.
    fn check(build: &Build, inputs: &[Tensor], tol: f64) {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = build(&tape, &vars).unwrap();
        let (_, grads) = tape.value_and_grad(out, &vars).unwrap();
        let h = 1e-6;
        for (k, input) in inputs.iter().enumerate() {
            for j in 0..input.len() {
                let mut plus = inputs.to_vec();
                let mut minus = inputs.to_vec();
                plus[k] = bump(input, j, h);
                minus[k] = bump(input, j, -h);
                let fd = (eval(build, &plus) - eval(build, &minus)) / (2.0 * h);
                let an = grads[k].data()[j];
                assert!(
                    (fd - an).abs() <= tol * (1.0 + fd.abs().max(an.abs())),
                    "input {k} elem {j}: fd {fd} vs tape {an}"
                );
            }
        }
    }

    fn bump(t: &Tensor, j: usize, h: f64) -> Tensor {
        let mut data = t.data().to_vec();
        data[j] += h;
        Tensor::new(t.shape().to_vec(), data).unwrap()
    }

    fn rand_tensor(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        // Keep values off zero so ReLU kinks are not straddled.
        let data = (0..n)
            .map(|_| {
                let v: f64 = rng.random_range(0.05..1.5);
                if rng.random_bool(0.5) { v } else { -v }
            })
            .collect();
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    fn mlp_like<'t>(_: &'t Tape, v: &[Var<'t>]) -> Result<Var<'t>> {
        let h = v[0].matmul(&v[1])?.add(&v[2])?.tanh()?;
        let logits = h.normalize_rows()?.matmul_nt(&v[3].normalize_rows()?)?.scale(4.0)?;
        let lp = logits.log_softmax()?.select_cols(&[0, 2])?;
        let p = logits.softmax()?.ln()?.select_rows(&[1, 0, 1])?;
        lp.mean()?.sub(&p.sum()?.scale(0.1)?)?.add(&h.norm_rows()?.sum()?)
    }

    #[test]
    fn gradients_match_finite_differences_over_seeds() {
        for seed in 0..100 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let inputs = vec![
                rand_tensor(&mut rng, &[3, 4]),
                rand_tensor(&mut rng, &[4, 5]),
                rand_tensor(&mut rng, &[5]),
                rand_tensor(&mut rng, &[3, 5]),
            ];
            check(&mlp_like, &inputs, 1e-5);
        }
    }

    #[test]
    fn relu_mul_sum_rows_gradients() {
        fn build<'t>(_: &'t Tape, v: &[Var<'t>]) -> Result<Var<'t>> {
            let a = v[0].relu()?.mul(&v[1])?;
            let r = a.sum_rows()?;
            r.mul(&r)?.mean()
        }
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
            let inputs = vec![rand_tensor(&mut rng, &[4, 3]), rand_tensor(&mut rng, &[4, 3])];
            check(&build, &inputs, 1e-6);
        }
    }

    #[test]
    fn backward_is_linear_in_the_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = rand_tensor(&mut rng, &[2, 3]);
        let w = rand_tensor(&mut rng, &[3, 2]);
        let grad = |coef: f64| {
            let tape = Tape::new();
            let xv = tape.leaf(x.clone());
            let wv = tape.constant(w.clone());
            let y = xv.matmul(&wv).unwrap().tanh().unwrap().sum().unwrap();
            let z = xv.mul(&xv).unwrap().sum().unwrap();
            let out = y.scale(coef).unwrap().add(&z.scale(2.0).unwrap()).unwrap();
            tape.value_and_grad(out, &[xv]).unwrap().1.remove(0)
        };
        let (g0, g1, g2) = (grad(0.0), grad(1.0), grad(2.0));
        for j in 0..g0.len() {
            let lin = 2.0 * g1.data()[j] - g0.data()[j];
            assert!((g2.data()[j] - lin).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_is_deterministic_and_shares_duplicates() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let inputs = vec![
            rand_tensor(&mut rng, &[3, 4]),
            rand_tensor(&mut rng, &[4, 5]),
            rand_tensor(&mut rng, &[5]),
            rand_tensor(&mut rng, &[3, 5]),
        ];
        let run = || {
            let tape = Tape::new();
            let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
            let out = mlp_like(&tape, &vars).unwrap();
            let wanted = [vars[0], vars[1], vars[0]];
            tape.value_and_grad(out, &wanted).unwrap()
        };
        let (v1, g1) = run();
        let (v2, g2) = run();
        assert_eq!(v1.to_bits(), v2.to_bits());
        assert_eq!(g1, g2);
        assert_eq!(g1[0], g1[2]);
    }

    #[test]
    fn zero_row_normalize_has_zero_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::from_rows(&[vec![0.0, 0.0], vec![3.0, 4.0]]).unwrap());
        let y = x.normalize_rows().unwrap();
        assert_eq!(y.value().row(0), &[0.0, 0.0]);
        let out = y.sum().unwrap().add(&x.norm_rows().unwrap().sum().unwrap()).unwrap();
        let (_, g) = tape.value_and_grad(out, &[x]).unwrap();
        assert_eq!(g[0].row(0), &[0.0, 0.0]);
        assert!(g[0].row(1).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn constants_and_unreached_leaves() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::scalar(2.0));
        let b = tape.leaf(Tensor::vector(vec![1.0, 1.0]).unwrap());
        let c = tape.constant(Tensor::scalar(3.0));
        let out = a.mul(&c).unwrap();
        let (v, g) = tape.value_and_grad(out, &[a, b]).unwrap();
        assert_eq!(v, 6.0);
        assert_eq!(g[0].data(), &[3.0]);
        assert_eq!(g[1].data(), &[0.0, 0.0]);
        assert!(tape.value_and_grad(out, &[c]).is_err());
        assert!(tape.value_and_grad(b, &[a]).is_err());
    }

    #[test]
    fn non_finite_values_name_the_op() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![0.0, 1.0]).unwrap());
        match x.ln() {
            Err(Error::NonFinite { op }) => assert!(op.contains("ln") || op.contains("log"), "{op}"),
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }
}
