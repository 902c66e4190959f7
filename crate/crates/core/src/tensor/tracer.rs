use super::params::ParamStore;
use super::Tensor;
use crate::error::Result;

/// Elementwise nonlinearities known to the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Exp,
    Log,
    Tanh,
    Silu,
    /// First derivative of `silu`; appears on tangent paths.
    SiluGrad,
    Sin,
    Cos,
    Square,
    Recip,
}

/// The operation set that model code is written against.
///
/// [`Graph`](super::Graph) evaluates it on the reverse-mode tape;
/// [`DualTracer`](super::DualTracer) additionally carries a tangent for every
/// value, so one model definition serves forward passes, gradients and
/// Jacobian-vector products.
pub trait Tracer {
    type Value: Copy;

    fn constant(&mut self, value: Tensor) -> Result<Self::Value>;
    fn param(&mut self, store: &ParamStore, name: &str) -> Result<Self::Value>;
    /// Primal value.
    fn value(&self, v: Self::Value) -> &Tensor;

    fn matmul(&mut self, a: Self::Value, b: Self::Value) -> Result<Self::Value>;
    fn add(&mut self, a: Self::Value, b: Self::Value) -> Result<Self::Value>;
    fn sub(&mut self, a: Self::Value, b: Self::Value) -> Result<Self::Value>;
    fn mul(&mut self, a: Self::Value, b: Self::Value) -> Result<Self::Value>;
    fn mul_col(&mut self, a: Self::Value, c: Self::Value) -> Result<Self::Value>;
    fn scale(&mut self, a: Self::Value, s: f64) -> Result<Self::Value>;
    fn add_scalar(&mut self, a: Self::Value, s: f64) -> Result<Self::Value>;
    fn unary(&mut self, a: Self::Value, kind: Unary) -> Result<Self::Value>;
    fn clamp(&mut self, a: Self::Value, lo: f64, hi: f64) -> Result<Self::Value>;
    fn concat_cols(&mut self, parts: &[Self::Value]) -> Result<Self::Value>;
    fn slice_cols(&mut self, a: Self::Value, start: usize, end: usize) -> Result<Self::Value>;
    fn sum(&mut self, a: Self::Value) -> Result<Self::Value>;
    fn sum_cols(&mut self, a: Self::Value) -> Result<Self::Value>;

    fn exp(&mut self, a: Self::Value) -> Result<Self::Value> {
        self.unary(a, Unary::Exp)
    }
    fn log(&mut self, a: Self::Value) -> Result<Self::Value> {
        self.unary(a, Unary::Log)
    }
    fn tanh(&mut self, a: Self::Value) -> Result<Self::Value> {
        self.unary(a, Unary::Tanh)
    }
    fn silu(&mut self, a: Self::Value) -> Result<Self::Value> {
        self.unary(a, Unary::Silu)
    }
    fn sin(&mut self, a: Self::Value) -> Result<Self::Value> {
        self.unary(a, Unary::Sin)
    }
    fn cos(&mut self, a: Self::Value) -> Result<Self::Value> {
        self.unary(a, Unary::Cos)
    }
    fn square(&mut self, a: Self::Value) -> Result<Self::Value> {
        self.unary(a, Unary::Square)
    }
    fn recip(&mut self, a: Self::Value) -> Result<Self::Value> {
        self.unary(a, Unary::Recip)
    }
    fn neg(&mut self, a: Self::Value) -> Result<Self::Value> {
        self.scale(a, -1.0)
    }
    fn mean(&mut self, a: Self::Value) -> Result<Self::Value> {
        let n = self.value(a).numel() as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }
    /// Squared L2 norm over all elements.
    fn sq_norm(&mut self, a: Self::Value) -> Result<Self::Value> {
        let sq = self.square(a)?;
        self.sum(sq)
    }
    /// Mean over the batch axis of per-row squared norms.
    fn batch_mean_sq_norm(&mut self, a: Self::Value) -> Result<Self::Value> {
        let rows = self.value(a).rows() as f64;
        let s = self.sq_norm(a)?;
        self.scale(s, 1.0 / rows)
    }
}
