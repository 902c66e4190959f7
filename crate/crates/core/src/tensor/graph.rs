//! Append-only tape for reverse-mode differentiation.
//!
//! Every operation evaluates eagerly and pushes a node holding its result.
//! Nodes only reference earlier nodes, so the tape is topologically ordered
//! by construction and the backward pass is a single reverse sweep.

use indexmap::IndexMap;

use super::array::{matmul_nn, matmul_nt, matmul_tn};
use super::params::ParamStore;
use super::tracer::{Tracer, Unary};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Unary(Var, Unary),
    Clamp(Var, f64, f64),
    Concat(Vec<Var>),
    Slice(Var, usize, usize),
    Sum(Var),
    SumCols(Var),
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: IndexMap<String, Var>,
}

/// Result of a backward sweep: one optional gradient buffer per node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

/// Shape relation between the two operands of an elementwise binary op.
#[derive(Clone, Copy, PartialEq)]
enum Pairing {
    Same,
    /// `rhs` is a single row repeated over the batch axis of `lhs`.
    RowBroadcast,
}

fn pairing(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Pairing> {
    if a.shape() == b.shape() {
        return Ok(Pairing::Same);
    }
    if a.shape().len() == 2 && b.rows() == 1 && b.cols() == a.cols() && !b.is_scalar() {
        return Ok(Pairing::RowBroadcast);
    }
    Err(Error::shape(op, a.shape(), b.shape()))
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Unary {
    pub(crate) fn name(self) -> &'static str {
        match self {
            Unary::Exp => "exp",
            Unary::Log => "log",
            Unary::Tanh => "tanh",
            Unary::Silu => "silu",
            Unary::SiluGrad => "silu_grad",
            Unary::Sin => "sin",
            Unary::Cos => "cos",
            Unary::Square => "square",
            Unary::Recip => "recip",
        }
    }

    pub(crate) fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Exp => x.exp(),
            Unary::Log => x.ln(),
            Unary::Tanh => x.tanh(),
            Unary::Silu => x * sigmoid(x),
            Unary::SiluGrad => {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
            Unary::Sin => x.sin(),
            Unary::Cos => x.cos(),
            Unary::Square => x * x,
            Unary::Recip => 1.0 / x,
        }
    }

    /// Derivative at `x`, given the already computed output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Exp => y,
            Unary::Log => 1.0 / x,
            Unary::Tanh => 1.0 - y * y,
            Unary::Silu => Unary::SiluGrad.apply(x),
            Unary::SiluGrad => {
                let s = sigmoid(x);
                s * (1.0 - s) * (2.0 + x * (1.0 - 2.0 * s))
            }
            Unary::Sin => x.cos(),
            Unary::Cos => -x.sin(),
            Unary::Square => 2.0 * x,
            Unary::Recip => -y * y,
        }
    }
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op: &'static str, kind: Op, value: Tensor, needs_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op });
        }
        self.nodes.push(Node {
            op: kind,
            value,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Leaf that does not receive gradients.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push("constant", Op::Leaf, value, false)
    }

    /// Leaf bound to a named parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let value = store.value(name)?.clone();
        let v = self.push("param", Op::Leaf, value, true)?;
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    /// Parameter leaves created so far, in creation order.
    pub fn param_vars(&self) -> impl Iterator<Item = (&str, Var)> {
        self.params.iter().map(|(k, &v)| (k.as_str(), v))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape().len() != 2 || bv.shape().len() != 2 || av.cols() != bv.rows() {
            return Err(Error::shape("matmul", av.shape(), bv.shape()));
        }
        let (n, k) = av.as_matrix();
        let m = bv.cols();
        let out = Tensor::matrix(n, m, matmul_nn(av.data(), bv.data(), n, k, m))?;
        let ng = self.needs(a) || self.needs(b);
        self.push("matmul", Op::MatMul(a, b), out, ng)
    }

    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<(Tensor, bool)> {
        let (av, bv) = (self.value(a), self.value(b));
        let pairing = pairing(op, av, bv)?;
        let mut out = av.clone();
        match pairing {
            Pairing::Same => {
                for (o, &y) in out.data_mut().iter_mut().zip(bv.data()) {
                    *o = f(*o, y);
                }
            }
            Pairing::RowBroadcast => {
                let c = av.cols();
                for row in out.data_mut().chunks_mut(c) {
                    for (o, &y) in row.iter_mut().zip(bv.data()) {
                        *o = f(*o, y);
                    }
                }
            }
        }
        Ok((out, self.needs(a) || self.needs(b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, ng) = self.binary("add", a, b, |x, y| x + y)?;
        self.push("add", Op::Add(a, b), out, ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, ng) = self.binary("sub", a, b, |x, y| x - y)?;
        self.push("sub", Op::Sub(a, b), out, ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, ng) = self.binary("mul", a, b, |x, y| x * y)?;
        self.push("mul", Op::Mul(a, b), out, ng)
    }

    /// `a (n×m)` scaled row-wise by the column `c (n×1)`.
    pub fn mul_col(&mut self, a: Var, c: Var) -> Result<Var> {
        let (av, cv) = (self.value(a), self.value(c));
        if av.shape().len() != 2 || cv.shape() != [av.rows(), 1] {
            return Err(Error::shape("mul_col", av.shape(), cv.shape()));
        }
        let m = av.cols();
        let mut out = av.clone();
        for (row, &s) in out.data_mut().chunks_mut(m.max(1)).zip(cv.data()) {
            row.iter_mut().for_each(|o| *o *= s);
        }
        let ng = self.needs(a) || self.needs(c);
        self.push("mul_col", Op::MulCol(a, c), out, ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x * s);
        let ng = self.needs(a);
        self.push("scale", Op::Scale(a, s), out, ng)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x + s);
        let ng = self.needs(a);
        self.push("add_scalar", Op::AddScalar(a), out, ng)
    }

    pub fn unary(&mut self, a: Var, kind: Unary) -> Result<Var> {
        let out = self.value(a).map(|x| kind.apply(x));
        let ng = self.needs(a);
        self.push(kind.name(), Op::Unary(a, kind), out, ng)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        if lo > hi {
            return Err(Error::invalid(format!("clamp bounds {lo} > {hi}")));
        }
        let out = self.value(a).map(|x| x.clamp(lo, hi));
        let ng = self.needs(a);
        self.push("clamp", Op::Clamp(a, lo, hi), out, ng)
    }

    /// Concatenates matrices with equal row counts along the feature axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let n = self.value(*first).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let pv = self.value(p);
            if pv.shape().len() != 2 || pv.rows() != n {
                return Err(Error::shape("concat", self.value(*first).shape(), pv.shape()));
            }
            widths.push(pv.cols());
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(n * total);
        for i in 0..n {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        let out = Tensor::matrix(n, total, data)?;
        self.push("concat", Op::Concat(parts.to_vec()), out, ng)
    }

    /// Feature columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let av = self.value(a);
        if av.shape().len() != 2 || start >= end || end > av.cols() {
            return Err(Error::invalid(format!(
                "slice {start}..{end} out of range for shape {:?}",
                av.shape()
            )));
        }
        let n = av.rows();
        let mut data = Vec::with_capacity(n * (end - start));
        for row in av.rows_iter() {
            data.extend_from_slice(&row[start..end]);
        }
        let out = Tensor::matrix(n, end - start, data)?;
        let ng = self.needs(a);
        self.push("slice", Op::Slice(a, start, end), out, ng)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).data().iter().sum());
        let ng = self.needs(a);
        self.push("sum", Op::Sum(a), out, ng)
    }

    /// Row sums: `n×m → n×1`.
    pub fn sum_cols(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if av.shape().len() != 2 {
            return Err(Error::shape("sum_cols", av.shape(), &[]));
        }
        let sums: Vec<f64> = av.rows_iter().map(|r| r.iter().sum()).collect();
        let out = Tensor::column(&sums);
        let ng = self.needs(a);
        self.push("sum_cols", Op::SumCols(a), out, ng)
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rv = self.value(root);
        if rv.numel() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar root, got shape {:?}",
                rv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                grads[idx] = Some(g);
                continue;
            }
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut acc = |v: Var, contrib: Vec<f64>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing
                    .iter_mut()
                    .zip(&contrib)
                    .for_each(|(e, c)| *e += c),
                slot @ None => *slot = Some(contrib),
            }
        };

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (n, k) = av.as_matrix();
                let m = bv.cols();
                if self.needs(*a) {
                    acc(*a, matmul_nt(g, bv.data(), n, m, k));
                }
                if self.needs(*b) {
                    acc(*b, matmul_tn(av.data(), g, n, k, m));
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                acc(*a, g.to_vec());
                if self.needs(*b) {
                    let bv = self.value(*b);
                    let gb = reduce_to(g, bv, self.value(*a).cols());
                    acc(*b, gb.into_iter().map(|x| sign * x).collect());
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let m = av.cols().max(1);
                if self.needs(*a) {
                    let ga = if av.shape() == bv.shape() {
                        g.iter().zip(bv.data()).map(|(x, y)| x * y).collect()
                    } else {
                        g.chunks(m)
                            .flat_map(|row| row.iter().zip(bv.data()).map(|(x, y)| x * y))
                            .collect()
                    };
                    acc(*a, ga);
                }
                if self.needs(*b) {
                    let prod: Vec<f64> = g.iter().zip(av.data()).map(|(x, y)| x * y).collect();
                    acc(*b, reduce_to(&prod, bv, m));
                }
            }
            Op::MulCol(a, c) => {
                let (av, cv) = (self.value(*a), self.value(*c));
                let m = av.cols().max(1);
                if self.needs(*a) {
                    let ga = g
                        .chunks(m)
                        .zip(cv.data())
                        .flat_map(|(row, &s)| row.iter().map(move |x| x * s))
                        .collect();
                    acc(*a, ga);
                }
                if self.needs(*c) {
                    let gc = g
                        .chunks(m)
                        .zip(av.data().chunks(m))
                        .map(|(gr, ar)| gr.iter().zip(ar).map(|(x, y)| x * y).sum())
                        .collect();
                    acc(*c, gc);
                }
            }
            Op::Scale(a, s) => acc(*a, g.iter().map(|x| x * s).collect()),
            Op::AddScalar(a) => acc(*a, g.to_vec()),
            Op::Unary(a, kind) => {
                let xv = self.value(*a).data();
                let yv = node.value.data();
                let ga = g
                    .iter()
                    .zip(xv.iter().zip(yv))
                    .map(|(gi, (&x, &y))| gi * kind.derivative(x, y))
                    .collect();
                acc(*a, ga);
            }
            Op::Clamp(a, lo, hi) => {
                let xv = self.value(*a).data();
                let ga = g
                    .iter()
                    .zip(xv)
                    .map(|(gi, &x)| if x >= *lo && x <= *hi { *gi } else { 0.0 })
                    .collect();
                acc(*a, ga);
            }
            Op::Concat(parts) => {
                let total = node.value.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.needs(p) {
                        let gp = g
                            .chunks(total)
                            .flat_map(|row| row[offset..offset + w].iter().copied())
                            .collect();
                        acc(p, gp);
                    }
                    offset += w;
                }
            }
            Op::Slice(a, start, end) => {
                let m = self.value(*a).cols();
                let w = end - start;
                let mut ga = vec![0.0; self.value(*a).numel()];
                for (dst, src) in ga.chunks_mut(m).zip(g.chunks(w)) {
                    dst[*start..*end].copy_from_slice(src);
                }
                acc(*a, ga);
            }
            Op::Sum(a) => acc(*a, vec![g[0]; self.value(*a).numel()]),
            Op::SumCols(a) => {
                let m = self.value(*a).cols();
                acc(
                    *a,
                    g.iter().flat_map(|&x| std::iter::repeat_n(x, m)).collect(),
                );
            }
        }
    }

    /// Adds each parameter leaf's gradient into the matching entry of `store`.
    /// Leaves whose names the store does not hold are skipped.
    pub fn accumulate(&self, grads: &Gradients, store: &mut ParamStore) {
        for (name, v) in self.params.iter() {
            let (Some(entry), Some(g)) = (store.get_mut(name), grads.get(*v)) else {
                continue;
            };
            entry
                .grad
                .data_mut()
                .iter_mut()
                .zip(g)
                .for_each(|(a, b)| *a += b);
        }
    }
}

/// Sums a full-shape gradient down to the shape of a possibly row-broadcast operand.
fn reduce_to(g: &[f64], target: &Tensor, cols: usize) -> Vec<f64> {
    if g.len() == target.numel() {
        return g.to_vec();
    }
    let mut out = vec![0.0; target.numel()];
    for row in g.chunks(cols.max(1)) {
        out.iter_mut().zip(row).for_each(|(o, x)| *o += x);
    }
    out
}

/// Reverse pass from `root`, accumulating into every parameter of `store`
/// that appears on the tape. Parameters off the path receive nothing.
pub fn backward(graph: &Graph, root: Var, store: &mut ParamStore) -> Result<()> {
    let grads = graph.backward(root)?;
    graph.accumulate(&grads, store);
    Ok(())
}

impl Tracer for Graph {
    type Value = Var;

    fn constant(&mut self, value: Tensor) -> Result<Var> {
        Graph::constant(self, value)
    }
    fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        Graph::param(self, store, name)
    }
    fn value(&self, v: Var) -> &Tensor {
        Graph::value(self, v)
    }
    fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        Graph::matmul(self, a, b)
    }
    fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        Graph::add(self, a, b)
    }
    fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        Graph::sub(self, a, b)
    }
    fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        Graph::mul(self, a, b)
    }
    fn mul_col(&mut self, a: Var, c: Var) -> Result<Var> {
        Graph::mul_col(self, a, c)
    }
    fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        Graph::scale(self, a, s)
    }
    fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        Graph::add_scalar(self, a, s)
    }
    fn unary(&mut self, a: Var, kind: Unary) -> Result<Var> {
        Graph::unary(self, a, kind)
    }
    fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        Graph::clamp(self, a, lo, hi)
    }
    fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        Graph::concat_cols(self, parts)
    }
    fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        Graph::slice_cols(self, a, start, end)
    }
    fn sum(&mut self, a: Var) -> Result<Var> {
        Graph::sum(self, a)
    }
    fn sum_cols(&mut self, a: Var) -> Result<Var> {
        Graph::sum_cols(self, a)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_by_hand() {
        let mut g = Graph::new();
        let a = g.constant(mat(&[&[1.0, 2.0], &[3.0, 4.0]])).unwrap();
        let x = g.constant(mat(&[&[1.0], &[0.0]])).unwrap();
        let y = g.matmul(a, x).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 3.0]);
    }

    #[test]
    fn adding_zero_is_identity() {
        let mut g = Graph::new();
        let x = g.constant(mat(&[&[1.5, -2.0], &[0.25, 7.0]])).unwrap();
        let z = g.constant(Tensor::zeros(2, 2)).unwrap();
        let y = g.add(x, z).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn silu_at_zero() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(1, 1)).unwrap();
        let y = g.silu(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0]);
    }

    #[test]
    fn shape_errors_name_op_and_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(2, 3)).unwrap();
        let b = g.constant(Tensor::zeros(2, 2)).unwrap();
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 3]") && err.contains("[2, 2]"));
        let err = g.add(a, b).unwrap_err().to_string();
        assert!(err.contains("add"));
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let mut g = Graph::new();
        let x = g.constant(mat(&[&[-1.0]])).unwrap();
        assert!(matches!(g.log(x), Err(Error::NonFinite { op: "log" })));
    }

    #[test]
    fn row_broadcast_add_and_its_gradient() {
        let mut store = ParamStore::new();
        store.insert("b", mat(&[&[1.0, 2.0]])).unwrap();
        let mut g = Graph::new();
        let x = g.constant(mat(&[&[0.0, 0.0], &[1.0, 1.0], &[2.0, 2.0]])).unwrap();
        let b = g.param(&store, "b").unwrap();
        let y = g.add(x, b).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0, 2.0, 3.0, 3.0, 4.0]);
        let s = g.sum(y).unwrap();
        backward(&g, s, &mut store).unwrap();
        assert_eq!(store.grad("b").unwrap().data(), &[3.0, 3.0]);
    }

    #[test]
    fn gradient_of_sum_of_squares() {
        let mut store = ParamStore::new();
        store.insert("x", mat(&[&[1.0, 2.0]])).unwrap();
        let mut g = Graph::new();
        let x = g.param(&store, "x").unwrap();
        let r = g.sq_norm(x).unwrap();
        backward(&g, r, &mut store).unwrap();
        assert_eq!(store.grad("x").unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn constant_root_gives_zero_gradients() {
        let mut store = ParamStore::new();
        store.insert("w", mat(&[&[0.3, -0.1]])).unwrap();
        let mut g = Graph::new();
        let _w = g.param(&store, "w").unwrap();
        let c = g.constant(Tensor::scalar(4.0)).unwrap();
        backward(&g, c, &mut store).unwrap();
        assert_eq!(store.grad("w").unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(2, 2)).unwrap();
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn param_leaf_is_shared() {
        let mut store = ParamStore::new();
        store.insert("w", mat(&[&[2.0]])).unwrap();
        let mut g = Graph::new();
        let a = g.param(&store, "w").unwrap();
        let b = g.param(&store, "w").unwrap();
        assert_eq!(a, b);
        let y = g.mul(a, b).unwrap();
        let s = g.sum(y).unwrap();
        backward(&g, s, &mut store).unwrap();
        assert_eq!(store.grad("w").unwrap().data(), &[4.0]);
    }
}
