//! Forward-mode tangents recorded on the reverse-mode tape.
//!
//! A [`Dual`] pairs a primal node with an optional tangent node. Tangent
//! rules are expressed with ordinary tape operations, so a tangent is itself
//! a differentiable value: a backward pass from any function of it reaches
//! the parameters (forward-over-reverse).

use super::graph::{Graph, Var};
use super::params::ParamStore;
use super::tracer::{Tracer, Unary};
use super::Tensor;
use crate::error::{Error, Result};

/// Primal with tangent; `None` is an exact zero tangent.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dual {
    pub primal: Var,
    pub tangent: Option<Var>,
}

impl Dual {
    pub fn constant(primal: Var) -> Self {
        Self {
            primal,
            tangent: None,
        }
    }
}

pub struct DualTracer<'g> {
    graph: &'g mut Graph,
}

impl<'g> DualTracer<'g> {
    pub fn new(graph: &'g mut Graph) -> Self {
        Self { graph }
    }

    pub fn graph(&mut self) -> &mut Graph {
        self.graph
    }

    /// Lifts a graph value with the given tangent.
    pub fn lift(&mut self, primal: Var, tangent: Option<Var>) -> Result<Dual> {
        if let Some(t) = tangent {
            let (p, tv) = (self.graph.value(primal), self.graph.value(t));
            if p.shape() != tv.shape() {
                return Err(Error::shape("jvp tangent", p.shape(), tv.shape()));
            }
        }
        Ok(Dual { primal, tangent })
    }

    /// Materializes a tangent, substituting zeros of the primal's shape.
    pub fn tangent_or_zeros(&mut self, d: Dual) -> Result<Var> {
        match d.tangent {
            Some(t) => Ok(t),
            None => {
                let shape = self.graph.value(d.primal).shape().to_vec();
                let numel = self.graph.value(d.primal).numel();
                self.graph.constant(Tensor::new(shape, vec![0.0; numel])?)
            }
        }
    }

    fn add_opt(&mut self, a: Option<Var>, b: Option<Var>) -> Result<Option<Var>> {
        Ok(match (a, b) {
            (Some(a), Some(b)) => Some(self.graph.add(a, b)?),
            (x, None) | (None, x) => x,
        })
    }

    /// Tangent of a unary nonlinearity, as tape operations on the primal.
    fn unary_derivative(&mut self, x: Var, y: Var, kind: Unary) -> Result<Var> {
        let g = &mut *self.graph;
        match kind {
            Unary::Exp => Ok(y),
            Unary::Log => g.recip(x),
            Unary::Tanh => {
                let y2 = g.square(y)?;
                let neg = g.scale(y2, -1.0)?;
                g.add_scalar(neg, 1.0)
            }
            Unary::Silu => g.unary(x, Unary::SiluGrad),
            Unary::SiluGrad => Err(Error::invalid(
                "forward mode through silu_grad (nested JVP) is not supported",
            )),
            Unary::Sin => g.cos(x),
            Unary::Cos => {
                let s = g.sin(x)?;
                g.scale(s, -1.0)
            }
            Unary::Square => g.scale(x, 2.0),
            Unary::Recip => {
                let y2 = g.square(y)?;
                g.scale(y2, -1.0)
            }
        }
    }
}

impl Tracer for DualTracer<'_> {
    type Value = Dual;

    fn constant(&mut self, value: Tensor) -> Result<Dual> {
        Ok(Dual::constant(self.graph.constant(value)?))
    }

    fn param(&mut self, store: &ParamStore, name: &str) -> Result<Dual> {
        Ok(Dual::constant(self.graph.param(store, name)?))
    }

    fn value(&self, v: Dual) -> &Tensor {
        self.graph.value(v.primal)
    }

    fn matmul(&mut self, a: Dual, b: Dual) -> Result<Dual> {
        let primal = self.graph.matmul(a.primal, b.primal)?;
        let left = a.tangent.map(|ta| self.graph.matmul(ta, b.primal)).transpose()?;
        let right = b.tangent.map(|tb| self.graph.matmul(a.primal, tb)).transpose()?;
        let tangent = self.add_opt(left, right)?;
        Ok(Dual { primal, tangent })
    }

    fn add(&mut self, a: Dual, b: Dual) -> Result<Dual> {
        let primal = self.graph.add(a.primal, b.primal)?;
        let tangent = match (a.tangent, b.tangent) {
            (None, Some(tb)) if self.graph.value(tb).shape() != self.graph.value(primal).shape() => {
                let za = self.tangent_or_zeros(a)?;
                Some(self.graph.add(za, tb)?)
            }
            (ta, tb) => self.add_opt(ta, tb)?,
        };
        Ok(Dual { primal, tangent })
    }

    fn sub(&mut self, a: Dual, b: Dual) -> Result<Dual> {
        let primal = self.graph.sub(a.primal, b.primal)?;
        let tangent = match (a.tangent, b.tangent) {
            (Some(ta), Some(tb)) => Some(self.graph.sub(ta, tb)?),
            (Some(ta), None) => Some(ta),
            (None, Some(tb)) => {
                let za = self.tangent_or_zeros(a)?;
                Some(self.graph.sub(za, tb)?)
            }
            (None, None) => None,
        };
        Ok(Dual { primal, tangent })
    }

    fn mul(&mut self, a: Dual, b: Dual) -> Result<Dual> {
        let primal = self.graph.mul(a.primal, b.primal)?;
        let left = a.tangent.map(|ta| self.graph.mul(ta, b.primal)).transpose()?;
        let right = b.tangent.map(|tb| self.graph.mul(a.primal, tb)).transpose()?;
        let tangent = self.add_opt(left, right)?;
        Ok(Dual { primal, tangent })
    }

    fn mul_col(&mut self, a: Dual, c: Dual) -> Result<Dual> {
        let primal = self.graph.mul_col(a.primal, c.primal)?;
        let left = a.tangent.map(|ta| self.graph.mul_col(ta, c.primal)).transpose()?;
        let right = c.tangent.map(|tc| self.graph.mul_col(a.primal, tc)).transpose()?;
        let tangent = self.add_opt(left, right)?;
        Ok(Dual { primal, tangent })
    }

    fn scale(&mut self, a: Dual, s: f64) -> Result<Dual> {
        let primal = self.graph.scale(a.primal, s)?;
        let tangent = a.tangent.map(|t| self.graph.scale(t, s)).transpose()?;
        Ok(Dual { primal, tangent })
    }

    fn add_scalar(&mut self, a: Dual, s: f64) -> Result<Dual> {
        let primal = self.graph.add_scalar(a.primal, s)?;
        Ok(Dual {
            primal,
            tangent: a.tangent,
        })
    }

    fn unary(&mut self, a: Dual, kind: Unary) -> Result<Dual> {
        let primal = self.graph.unary(a.primal, kind)?;
        let tangent = match a.tangent {
            Some(ta) => {
                let d = self.unary_derivative(a.primal, primal, kind)?;
                Some(self.graph.mul(d, ta)?)
            }
            None => None,
        };
        Ok(Dual { primal, tangent })
    }

    fn clamp(&mut self, a: Dual, lo: f64, hi: f64) -> Result<Dual> {
        let primal = self.graph.clamp(a.primal, lo, hi)?;
        let tangent = match a.tangent {
            Some(ta) => {
                let mask = self
                    .graph
                    .value(a.primal)
                    .map(|x| if x >= lo && x <= hi { 1.0 } else { 0.0 });
                let m = self.graph.constant(mask)?;
                Some(self.graph.mul(m, ta)?)
            }
            None => None,
        };
        Ok(Dual { primal, tangent })
    }

    fn concat_cols(&mut self, parts: &[Dual]) -> Result<Dual> {
        let primals: Vec<Var> = parts.iter().map(|d| d.primal).collect();
        let primal = self.graph.concat_cols(&primals)?;
        let tangent = if parts.iter().all(|d| d.tangent.is_none()) {
            None
        } else {
            let ts = parts
                .iter()
                .map(|&d| self.tangent_or_zeros(d))
                .collect::<Result<Vec<_>>>()?;
            Some(self.graph.concat_cols(&ts)?)
        };
        Ok(Dual { primal, tangent })
    }

    fn slice_cols(&mut self, a: Dual, start: usize, end: usize) -> Result<Dual> {
        let primal = self.graph.slice_cols(a.primal, start, end)?;
        let tangent = a
            .tangent
            .map(|t| self.graph.slice_cols(t, start, end))
            .transpose()?;
        Ok(Dual { primal, tangent })
    }

    fn sum(&mut self, a: Dual) -> Result<Dual> {
        let primal = self.graph.sum(a.primal)?;
        let tangent = a.tangent.map(|t| self.graph.sum(t)).transpose()?;
        Ok(Dual { primal, tangent })
    }

    fn sum_cols(&mut self, a: Dual) -> Result<Dual> {
        let primal = self.graph.sum_cols(a.primal)?;
        let tangent = a.tangent.map(|t| self.graph.sum_cols(t)).transpose()?;
        Ok(Dual { primal, tangent })
    }
}

/// Jacobian-vector product of `f` at `primals` along `tangents`.
///
/// Returns `(f(x), J·u)`. Both outputs live on `graph`, so a later backward
/// pass through any function of the tangent output reaches every parameter
/// that `f` touched.
pub fn jvp<F>(graph: &mut Graph, primals: &[Var], tangents: &[Var], f: F) -> Result<(Var, Var)>
where
    F: FnOnce(&mut DualTracer<'_>, &[Dual]) -> Result<Dual>,
{
    if primals.len() != tangents.len() {
        return Err(Error::invalid(format!(
            "jvp: {} primals but {} tangents",
            primals.len(),
            tangents.len()
        )));
    }
    let mut tracer = DualTracer::new(graph);
    let inputs = primals
        .iter()
        .zip(tangents)
        .map(|(&p, &t)| tracer.lift(p, Some(t)))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut tracer, &inputs)?;
    let tangent = tracer.tangent_or_zeros(out)?;
    Ok((out.primal, tangent))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_map_tangent_is_the_matrix_column() {
        let mut g = Graph::new();
        let a = g
            .constant(Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap())
            .unwrap();
        let x = g.constant(Tensor::matrix(2, 1, vec![0.5, -1.0]).unwrap()).unwrap();
        let u = g.constant(Tensor::matrix(2, 1, vec![1.0, 0.0]).unwrap()).unwrap();
        let (_, t) = jvp(&mut g, &[x], &[u], |tr, xs| {
            let a = Dual::constant(a);
            tr.matmul(a, xs[0])
        })
        .unwrap();
        assert_eq!(g.value(t).data(), &[1.0, 3.0]);
    }

    #[test]
    fn identity_passes_tangent_through() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[[1.0, 2.0]]).unwrap()).unwrap();
        let u = g.constant(Tensor::from_rows(&[[-3.0, 0.25]]).unwrap()).unwrap();
        let (v, t) = jvp(&mut g, &[x], &[u], |_, xs| Ok(xs[0])).unwrap();
        assert_eq!(g.value(v).data(), &[1.0, 2.0]);
        assert_eq!(g.value(t).data(), &[-3.0, 0.25]);
    }

    #[test]
    fn mismatched_tangent_shape_is_rejected() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(2, 2)).unwrap();
        let u = g.constant(Tensor::zeros(2, 1)).unwrap();
        assert!(jvp(&mut g, &[x], &[u], |_, xs| Ok(xs[0])).is_err());
    }

    #[test]
    fn constant_function_has_zero_tangent() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(1, 3)).unwrap();
        let u = g.constant(Tensor::full(1, 3, 1.0)).unwrap();
        let (_, t) = jvp(&mut g, &[x], &[u], |tr, _| {
            tr.constant(Tensor::full(1, 3, 2.0))
        })
        .unwrap();
        assert_eq!(g.value(t).data(), &[0.0; 3]);
    }
}
