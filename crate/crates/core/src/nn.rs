//! Velocity field and variational posterior networks.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::data::Rng;
use crate::dynamics::{TracedField, VelocitySource};
use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamStore, Tensor, Tracer};

/// Bounds applied to the posterior's log standard deviation.
pub const LOG_SIGMA_MIN: f64 = -7.0;
pub const LOG_SIGMA_MAX: f64 = 2.0;

/// Rows evaluated per graph when a field is queried numerically.
const EVAL_CHUNK: usize = 2048;

fn default_hidden() -> Vec<usize> {
    vec![256; 4]
}
fn default_posterior_hidden() -> Vec<usize> {
    vec![256; 3]
}
fn default_latent_dim() -> usize {
    8
}
fn default_latent_embed() -> usize {
    64
}
fn default_time_embed_dim() -> usize {
    16
}
fn default_time_max_scale() -> f64 {
    1e4
}
fn default_true() -> bool {
    true
}

/// Architecture of both networks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default = "default_posterior_hidden")]
    pub posterior_hidden: Vec<usize>,
    #[serde(default = "default_latent_dim")]
    pub latent_dim: usize,
    /// Width of the two-layer latent projection.
    #[serde(default = "default_latent_embed")]
    pub latent_embed: usize,
    #[serde(default = "default_time_embed_dim")]
    pub time_embed_dim: usize,
    /// Highest time frequency is `2π · time_max_scale`.
    #[serde(default = "default_time_max_scale")]
    pub time_max_scale: f64,
    /// Zero the last layer of the velocity net and both posterior heads.
    #[serde(default = "default_true")]
    pub zero_init_output: bool,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            hidden: default_hidden(),
            posterior_hidden: default_posterior_hidden(),
            latent_dim: default_latent_dim(),
            latent_embed: default_latent_embed(),
            time_embed_dim: default_time_embed_dim(),
            time_max_scale: default_time_max_scale(),
            zero_init_output: true,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::Config("net.hidden needs positive widths".into()));
        }
        if self.posterior_hidden.is_empty() || self.posterior_hidden.contains(&0) {
            return Err(Error::Config("net.posterior_hidden needs positive widths".into()));
        }
        if self.latent_dim == 0 || self.latent_embed == 0 {
            return Err(Error::Config("net.latent_dim and net.latent_embed must be ≥ 1".into()));
        }
        TimeEmbedding::new(self.time_embed_dim, self.time_max_scale)
            .map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }
}

/// Sinusoidal features of a scalar time with geometric frequencies
/// `2π · scale^(j / (dim/2 − 1))`, `j = 0 .. dim/2`.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeEmbedding {
    dim: usize,
    frequencies: Vec<f64>,
}

impl TimeEmbedding {
    pub fn new(dim: usize, max_scale: f64) -> Result<Self> {
        if dim == 0 || dim % 2 != 0 {
            return Err(Error::invalid(format!("time embedding dim must be even and positive, got {dim}")));
        }
        if !(max_scale >= 1.0 && max_scale.is_finite()) {
            return Err(Error::invalid(format!("time embedding scale must be ≥ 1, got {max_scale}")));
        }
        let half = dim / 2;
        let frequencies = (0..half)
            .map(|j| {
                let e = if half == 1 { 0.0 } else { j as f64 / (half - 1) as f64 };
                2.0 * PI * max_scale.powf(e)
            })
            .collect();
        Ok(Self { dim, frequencies })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn frequencies(&self) -> &[f64] {
        &self.frequencies
    }

    /// `[sin(ω t) …, cos(ω t) …]`.
    pub fn embed(&self, t: f64) -> Vec<f64> {
        let sin = self.frequencies.iter().map(|w| (w * t).sin());
        let cos = self.frequencies.iter().map(|w| (w * t).cos());
        sin.chain(cos).collect()
    }

    /// Traced embedding of an `n × 1` time column.
    pub fn trace<T: Tracer>(&self, tr: &mut T, t: T::Value) -> Result<T::Value> {
        let freq = tr.constant(Tensor::matrix(1, self.frequencies.len(), self.frequencies.clone())?)?;
        let phase = tr.matmul(t, freq)?;
        let s = tr.sin(phase)?;
        let c = tr.cos(phase)?;
        tr.concat_cols(&[s, c])
    }
}

/// Embedding with the default `10⁴` frequency span.
pub fn time_embed(t: f64, dim: usize) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::invalid(format!("time {t} outside [0, 1]")));
    }
    Ok(TimeEmbedding::new(dim, default_time_max_scale())?.embed(t))
}

/// Fully connected stack with `silu` between layers and none after the last.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    prefix: String,
    widths: Vec<usize>,
}

impl Mlp {
    pub fn new(prefix: impl Into<String>, widths: Vec<usize>) -> Self {
        Self {
            prefix: prefix.into(),
            widths,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn out_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    fn weight(&self, i: usize) -> String {
        format!("{}.{i}.weight", self.prefix)
    }

    fn bias(&self, i: usize) -> String {
        format!("{}.{i}.bias", self.prefix)
    }

    /// Uniform `±1/√fan_in` for weights and biases; optionally zeros for the
    /// final layer.
    pub fn init(&self, store: &mut ParamStore, rng: &mut Rng, zero_last: bool) -> Result<()> {
        let layers = self.widths.len() - 1;
        for i in 0..layers {
            let (fan_in, fan_out) = (self.widths[i], self.widths[i + 1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            let zero = zero_last && i + 1 == layers;
            let mut draw = |n: usize| -> Vec<f64> {
                (0..n)
                    .map(|_| if zero { 0.0 } else { bound * (2.0 * rng.uniform() - 1.0) })
                    .collect()
            };
            let w = Tensor::matrix(fan_in, fan_out, draw(fan_in * fan_out))?;
            let b = Tensor::matrix(1, fan_out, draw(fan_out))?;
            store.insert(self.weight(i), w)?;
            store.insert(self.bias(i), b)?;
        }
        Ok(())
    }

    pub fn trace<T: Tracer>(&self, tr: &mut T, store: &ParamStore, x: T::Value) -> Result<T::Value> {
        let layers = self.widths.len() - 1;
        let mut h = x;
        for i in 0..layers {
            let w = tr.param(store, &self.weight(i))?;
            let b = tr.param(store, &self.bias(i))?;
            let lin = tr.matmul(h, w)?;
            h = tr.add(lin, b)?;
            if i + 1 < layers {
                h = tr.silu(h)?;
            }
        }
        Ok(h)
    }
}

/// Latent prior `N(0, I)` of fixed width.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LatentSpec {
    latent_dim: usize,
}

impl LatentSpec {
    pub fn new(latent_dim: usize) -> Result<Self> {
        if latent_dim == 0 {
            return Err(Error::invalid("latent_dim must be ≥ 1"));
        }
        Ok(Self { latent_dim })
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn sample_prior(&self, n: usize, rng: &mut Rng) -> Result<Tensor> {
        Ok(rng.normal_tensor(n, self.latent_dim))
    }
}

/// `v_θ(x, t, z)`: MLP over `[x, time features, projected z]`.
#[derive(Clone, Debug, PartialEq)]
pub struct VelocityField {
    dim: usize,
    latent_dim: usize,
    time: TimeEmbedding,
    latent_proj: Option<Mlp>,
    trunk: Mlp,
    pub params: ParamStore,
}

impl VelocityField {
    /// `latent_dim = 0` builds an unconditioned field.
    pub fn new(dim: usize, latent_dim: usize, cfg: &NetConfig, rng: &mut Rng) -> Result<Self> {
        let time = TimeEmbedding::new(cfg.time_embed_dim, cfg.time_max_scale)?;
        let latent_proj = (latent_dim > 0).then(|| {
            Mlp::new(
                "velocity.latent",
                vec![latent_dim, cfg.latent_embed, cfg.latent_embed],
            )
        });
        let in_width = dim + time.dim() + latent_proj.as_ref().map_or(0, Mlp::out_dim);
        let mut widths = vec![in_width];
        widths.extend(&cfg.hidden);
        widths.push(dim);
        let trunk = Mlp::new("velocity.trunk", widths);

        let mut params = ParamStore::new();
        if let Some(p) = &latent_proj {
            p.init(&mut params, rng, false)?;
        }
        trunk.init(&mut params, rng, cfg.zero_init_output)?;
        Ok(Self {
            dim,
            latent_dim,
            time,
            latent_proj,
            trunk,
            params,
        })
    }

    pub fn forward<T: Tracer>(
        &self,
        tr: &mut T,
        x: T::Value,
        t: T::Value,
        z: Option<T::Value>,
    ) -> Result<T::Value> {
        let (xs, ts) = (tr.value(x).shape().to_vec(), tr.value(t).shape().to_vec());
        if xs.len() != 2 || xs[1] != self.dim || ts != [xs[0], 1] {
            return Err(Error::shape("velocity_forward", &xs, &ts));
        }
        let temb = self.time.trace(tr, t)?;
        let input = match (&self.latent_proj, z) {
            (Some(proj), Some(z)) => {
                let zs = tr.value(z).shape().to_vec();
                if zs != [xs[0], self.latent_dim] {
                    return Err(Error::shape("velocity_forward latent", &xs, &zs));
                }
                let ze = proj.trace(tr, &self.params, z)?;
                tr.concat_cols(&[x, temb, ze])?
            }
            (None, None) => tr.concat_cols(&[x, temb])?,
            (Some(_), None) => return Err(Error::invalid("velocity field needs a latent z")),
            (None, Some(_)) => return Err(Error::invalid("velocity field takes no latent")),
        };
        self.trunk.trace(tr, &self.params, input)
    }
}

impl VelocitySource for VelocityField {
    fn dim(&self) -> usize {
        self.dim
    }

    fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    fn velocity(&self, x: &Tensor, t: f64, z: Option<&Tensor>) -> Result<Tensor> {
        let n = x.rows();
        let mut parts = Vec::with_capacity(n.div_ceil(EVAL_CHUNK));
        for start in (0..n).step_by(EVAL_CHUNK) {
            let end = (start + EVAL_CHUNK).min(n);
            let mut g = Graph::new();
            let xv = g.constant(x.slice_rows(start, end))?;
            let tv = g.constant(Tensor::full(end - start, 1, t))?;
            let zv = z.map(|z| g.constant(z.slice_rows(start, end))).transpose()?;
            let v = self.forward(&mut g, xv, tv, zv)?;
            parts.push(g.value(v).clone());
        }
        Tensor::vstack(&parts)
    }
}

impl TracedField for VelocityField {
    fn trace<T: Tracer>(&self, tr: &mut T, x: T::Value, t: T::Value, z: Option<T::Value>) -> Result<T::Value> {
        self.forward(tr, x, t, z)
    }
}

/// `q_φ(z | x0, x1, xt, t)` as a diagonal Gaussian.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorEncoder {
    dim: usize,
    latent_dim: usize,
    time: TimeEmbedding,
    trunk: Mlp,
    mu_head: Mlp,
    log_sigma_head: Mlp,
    pub params: ParamStore,
}

impl PosteriorEncoder {
    pub fn new(dim: usize, cfg: &NetConfig, rng: &mut Rng) -> Result<Self> {
        let time = TimeEmbedding::new(cfg.time_embed_dim, cfg.time_max_scale)?;
        let mut widths = vec![3 * dim + time.dim()];
        widths.extend(&cfg.posterior_hidden);
        let width = *widths.last().unwrap();
        // heads read the trunk output after a silu
        let trunk = Mlp::new("posterior.trunk", widths);
        let mu_head = Mlp::new("posterior.mu", vec![width, cfg.latent_dim]);
        let log_sigma_head = Mlp::new("posterior.log_sigma", vec![width, cfg.latent_dim]);

        let mut params = ParamStore::new();
        trunk.init(&mut params, rng, false)?;
        mu_head.init(&mut params, rng, cfg.zero_init_output)?;
        log_sigma_head.init(&mut params, rng, cfg.zero_init_output)?;
        Ok(Self {
            dim,
            latent_dim: cfg.latent_dim,
            time,
            trunk,
            mu_head,
            log_sigma_head,
            params,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    /// Returns `(mu, log_sigma)`, the latter clamped to `[-7, 2]`.
    pub fn forward<T: Tracer>(
        &self,
        tr: &mut T,
        x0: T::Value,
        x1: T::Value,
        xt: T::Value,
        t: T::Value,
    ) -> Result<(T::Value, T::Value)> {
        let xs = tr.value(x0).shape().to_vec();
        for v in [x1, xt] {
            if tr.value(v).shape() != xs.as_slice() {
                return Err(Error::shape("posterior_forward", &xs, tr.value(v).shape()));
            }
        }
        if xs.len() != 2 || xs[1] != self.dim || tr.value(t).shape() != [xs[0], 1] {
            return Err(Error::shape("posterior_forward", &xs, tr.value(t).shape()));
        }
        let temb = self.time.trace(tr, t)?;
        let input = tr.concat_cols(&[x0, x1, xt, temb])?;
        let h = self.trunk.trace(tr, &self.params, input)?;
        let h = tr.silu(h)?;
        let mu = self.mu_head.trace(tr, &self.params, h)?;
        let raw = self.log_sigma_head.trace(tr, &self.params, h)?;
        let log_sigma = tr.clamp(raw, LOG_SIGMA_MIN, LOG_SIGMA_MAX)?;
        Ok((mu, log_sigma))
    }
}

/// `z = mu + exp(log_sigma) ⊙ eps`.
pub fn reparameterize<T: Tracer>(
    tr: &mut T,
    mu: T::Value,
    log_sigma: T::Value,
    eps: T::Value,
) -> Result<T::Value> {
    let (ms, ls, es) = (
        tr.value(mu).shape().to_vec(),
        tr.value(log_sigma).shape().to_vec(),
        tr.value(eps).shape().to_vec(),
    );
    if ms != ls || ms != es {
        return Err(Error::shape("reparameterize", &ms, if ms != ls { &ls } else { &es }));
    }
    let sigma = tr.exp(log_sigma)?;
    let noise = tr.mul(sigma, eps)?;
    tr.add(mu, noise)
}

/// A velocity field with, for the variational modes, its posterior.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowModel {
    pub field: VelocityField,
    pub encoder: Option<PosteriorEncoder>,
}

impl FlowModel {
    /// Velocity parameters are drawn before posterior parameters.
    pub fn new(dim: usize, cfg: &NetConfig, variational: bool, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let latent_dim = if variational { cfg.latent_dim } else { 0 };
        let field = VelocityField::new(dim, latent_dim, cfg, rng)?;
        let encoder = variational
            .then(|| PosteriorEncoder::new(dim, cfg, rng))
            .transpose()?;
        Ok(Self { field, encoder })
    }

    pub fn dim(&self) -> usize {
        self.field.dim
    }

    /// Prior over the conditioning latent, when there is one.
    pub fn latent(&self) -> Option<LatentSpec> {
        (self.field.latent_dim > 0).then_some(LatentSpec {
            latent_dim: self.field.latent_dim,
        })
    }

    pub fn stores(&self) -> impl Iterator<Item = &ParamStore> {
        std::iter::once(&self.field.params).chain(self.encoder.as_ref().map(|e| &e.params))
    }

    pub fn stores_mut(&mut self) -> impl Iterator<Item = &mut ParamStore> {
        std::iter::once(&mut self.field.params).chain(self.encoder.as_mut().map(|e| &mut e.params))
    }

    pub fn numel(&self) -> usize {
        self.stores().map(ParamStore::numel).sum()
    }

    pub fn zero_grads(&mut self) {
        self.stores_mut().for_each(ParamStore::zero_grads);
    }

    /// Squared norm of all gradient slots.
    pub fn grad_sq_norm(&self) -> f64 {
        self.stores().map(ParamStore::grad_sq_norm).sum()
    }
}

/// Posterior statistics and the latent drawn from them.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorOutput {
    pub mu: Tensor,
    pub log_sigma: Tensor,
    pub z: Tensor,
    pub eps: Tensor,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{backward, jvp};

    fn small_cfg(zero: bool) -> NetConfig {
        NetConfig {
            hidden: vec![16, 16],
            posterior_hidden: vec![12],
            latent_dim: 3,
            latent_embed: 5,
            time_embed_dim: 4,
            time_max_scale: 10.0,
            zero_init_output: zero,
        }
    }

    #[test]
    fn time_embed_at_zero() {
        let e = time_embed(0.0, 8).unwrap();
        assert_eq!(&e[..4], &[0.0; 4]);
        assert_eq!(&e[4..], &[1.0; 4]);
    }

    #[test]
    fn time_embed_lowest_frequency() {
        let e = time_embed(0.25, 2).unwrap();
        assert!((e[0] - 1.0).abs() < 1e-15);
        assert!(e[1].abs() < 1e-15);
    }

    #[test]
    fn time_embed_norm_is_half_dim() {
        for t in [0.0, 0.13, 0.5, 0.97, 1.0] {
            let e = time_embed(t, 16).unwrap();
            let sq: f64 = e.iter().map(|v| v * v).sum();
            assert!((sq - 8.0).abs() < 1e-12);
        }
        assert!(time_embed(0.5, 7).is_err());
    }

    #[test]
    fn frequencies_span_two_pi_to_scale() {
        let te = TimeEmbedding::new(16, 1e4).unwrap();
        let f = te.frequencies();
        assert!((f[0] - 2.0 * PI).abs() < 1e-12);
        assert!((f[7] - 2.0 * PI * 1e4).abs() < 1e-8);
    }

    #[test]
    fn zero_init_velocity_outputs_zero() {
        let field = VelocityField::new(2, 3, &small_cfg(true), &mut Rng::new(0, 0)).unwrap();
        let x = Tensor::from_rows(&[[1.0, 2.0], [-3.0, 0.5], [0.0, 0.0]]).unwrap();
        let z = Rng::new(1, 0).normal_tensor(3, 3);
        let v = field.velocity(&x, 0.3, Some(&z)).unwrap();
        assert_eq!(v.shape(), &[3, 2]);
        assert!(v.data().iter().all(|&a| a == 0.0));
    }

    #[test]
    fn batch_rows_are_independent() {
        let field = VelocityField::new(2, 3, &small_cfg(false), &mut Rng::new(0, 0)).unwrap();
        let mut rng = Rng::new(5, 0);
        let x = rng.normal_tensor(4, 2);
        let z = rng.normal_tensor(4, 3);
        let perm = [2, 0, 3, 1];
        let v = field.velocity(&x, 0.6, Some(&z)).unwrap();
        let vp = field
            .velocity(&x.gather_rows(&perm), 0.6, Some(&z.gather_rows(&perm)))
            .unwrap();
        assert_eq!(vp, v.gather_rows(&perm));
        let again = field.velocity(&x, 0.6, Some(&z)).unwrap();
        assert_eq!(v, again);
    }

    #[test]
    fn velocity_rejects_bad_shapes() {
        let field = VelocityField::new(2, 3, &small_cfg(false), &mut Rng::new(0, 0)).unwrap();
        let x = Tensor::zeros(2, 3);
        assert!(field.velocity(&x, 0.5, Some(&Tensor::zeros(2, 3))).is_err());
        let x = Tensor::zeros(2, 2);
        assert!(field.velocity(&x, 0.5, None).is_err());
        assert!(field.velocity(&x, 0.5, Some(&Tensor::zeros(2, 2))).is_err());
    }

    #[test]
    fn zero_init_posterior_is_the_prior() {
        let enc = PosteriorEncoder::new(2, &small_cfg(true), &mut Rng::new(0, 0)).unwrap();
        let mut rng = Rng::new(3, 0);
        let mut g = Graph::new();
        let x0 = g.constant(rng.normal_tensor(5, 2)).unwrap();
        let x1 = g.constant(rng.normal_tensor(5, 2)).unwrap();
        let xt = g.constant(rng.normal_tensor(5, 2)).unwrap();
        let t = g.constant(Tensor::column(&[0.1, 0.2, 0.3, 0.4, 0.5])).unwrap();
        let (mu, ls) = enc.forward(&mut g, x0, x1, xt, t).unwrap();
        assert_eq!(g.value(mu).shape(), &[5, 3]);
        assert_eq!(g.value(ls).shape(), &[5, 3]);
        assert!(g.value(mu).data().iter().all(|&v| v == 0.0));
        assert!(g.value(ls).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn log_sigma_is_clamped_for_extreme_weights() {
        let mut enc = PosteriorEncoder::new(2, &small_cfg(false), &mut Rng::new(0, 0)).unwrap();
        for scale in [1e4, -1e4] {
            let names: Vec<String> = enc.params.names().map(str::to_string).collect();
            for name in names.iter().filter(|n| n.starts_with("posterior.log_sigma")) {
                let v = enc.params.value(name).unwrap().map(|_| scale);
                enc.params.set_value(name, v).unwrap();
            }
            let mut g = Graph::new();
            let mut rng = Rng::new(4, 0);
            let x0 = g.constant(rng.normal_tensor(6, 2)).unwrap();
            let x1 = g.constant(rng.normal_tensor(6, 2)).unwrap();
            let xt = g.constant(rng.normal_tensor(6, 2)).unwrap();
            let t = g.constant(Tensor::full(6, 1, 0.4)).unwrap();
            let (_, ls) = enc.forward(&mut g, x0, x1, xt, t).unwrap();
            assert!(g
                .value(ls)
                .data()
                .iter()
                .all(|&v| (LOG_SIGMA_MIN..=LOG_SIGMA_MAX).contains(&v)));
        }
    }

    #[test]
    fn reparameterize_cases() {
        let mut g = Graph::new();
        let mu = g.constant(Tensor::from_rows(&[[0.5, -1.0]]).unwrap()).unwrap();
        let zero = g.constant(Tensor::zeros(1, 2)).unwrap();
        let z = reparameterize(&mut g, mu, zero, zero).unwrap();
        assert_eq!(g.value(z).data(), &[0.5, -1.0]);
        let e = g.constant(Tensor::from_rows(&[[2.0, 3.0]]).unwrap()).unwrap();
        let z = reparameterize(&mut g, mu, zero, e).unwrap();
        assert_eq!(g.value(z).data(), &[2.5, 2.0]);
        let bad = g.constant(Tensor::zeros(1, 3)).unwrap();
        assert!(reparameterize(&mut g, mu, zero, bad).is_err());
    }

    #[test]
    fn reparameterize_has_identity_jacobian_in_mu() {
        // Central differences of z with respect to each mu coordinate.
        let ls = Tensor::from_rows(&[[0.3, -0.2, 1.1]]).unwrap();
        let eps = Tensor::from_rows(&[[0.7, -1.4, 0.2]]).unwrap();
        let mu0 = [0.1, 0.4, -0.9];
        let h = 1e-5;
        let z_at = |mu: &[f64]| {
            let mut g = Graph::new();
            let m = g.constant(Tensor::from_rows(&[mu]).unwrap()).unwrap();
            let l = g.constant(ls.clone()).unwrap();
            let e = g.constant(eps.clone()).unwrap();
            let z = reparameterize(&mut g, m, l, e).unwrap();
            g.value(z).data().to_vec()
        };
        for j in 0..3 {
            let mut up = mu0;
            let mut dn = mu0;
            up[j] += h;
            dn[j] -= h;
            let (zu, zd) = (z_at(&up), z_at(&dn));
            for i in 0..3 {
                let d = (zu[i] - zd[i]) / (2.0 * h);
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((d - expect).abs() < 1e-8, "∂z{i}/∂mu{j} = {d}");
            }
        }
    }

    /// Central-difference gradient of a scalar function of a flat vector.
    fn fd_grad(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
        (0..x.len())
            .map(|i| {
                let mut up = x.to_vec();
                let mut dn = x.to_vec();
                up[i] += h;
                dn[i] -= h;
                (f(&up) - f(&dn)) / (2.0 * h)
            })
            .collect()
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt().max(1e-12);
        num / den
    }

    #[test]
    fn velocity_gradients_match_finite_differences() {
        let field = VelocityField::new(2, 3, &small_cfg(false), &mut Rng::new(8, 0)).unwrap();
        let mut rng = Rng::new(9, 0);
        let x = rng.normal_tensor(3, 2);
        let z = rng.normal_tensor(3, 3);
        let tcol = Tensor::column(&[0.2, 0.55, 0.9]);
        let w = rng.normal_tensor(3, 2);

        // scalar = Σ w ⊙ v(x, t, z)
        let eval = |x: &Tensor, t: &Tensor, z: &Tensor, field: &VelocityField| -> f64 {
            let mut g = Graph::new();
            let xv = g.constant(x.clone()).unwrap();
            let tv = g.constant(t.clone()).unwrap();
            let zv = g.constant(z.clone()).unwrap();
            let v = field.forward(&mut g, xv, tv, Some(zv)).unwrap();
            g.value(v).data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
        };

        let mut g = Graph::new();
        let mut inputs = ParamStore::new();
        inputs.insert("x", x.clone()).unwrap();
        inputs.insert("t", tcol.clone()).unwrap();
        inputs.insert("z", z.clone()).unwrap();
        let xv = g.param(&inputs, "x").unwrap();
        let tv = g.param(&inputs, "t").unwrap();
        let zv = g.param(&inputs, "z").unwrap();
        let v = field.forward(&mut g, xv, tv, Some(zv)).unwrap();
        let wv = g.constant(w.clone()).unwrap();
        let prod = g.mul(v, wv).unwrap();
        let s = g.sum(prod).unwrap();
        let mut params = field.params.clone();
        backward(&g, s, &mut inputs).unwrap();
        backward(&g, s, &mut params).unwrap();

        let h = 1e-5;
        let gx = fd_grad(
            |d| eval(&Tensor::matrix(3, 2, d.to_vec()).unwrap(), &tcol, &z, &field),
            x.data(),
            h,
        );
        assert!(rel_err(inputs.grad("x").unwrap().data(), &gx) < 1e-5);
        let gt = fd_grad(|d| eval(&x, &Tensor::column(d), &z, &field), tcol.data(), h);
        assert!(rel_err(inputs.grad("t").unwrap().data(), &gt) < 1e-5);
        let gz = fd_grad(
            |d| eval(&x, &tcol, &Tensor::matrix(3, 3, d.to_vec()).unwrap(), &field),
            z.data(),
            h,
        );
        assert!(rel_err(inputs.grad("z").unwrap().data(), &gz) < 1e-5);

        for name in ["velocity.trunk.0.weight", "velocity.latent.1.bias", "velocity.trunk.2.weight"] {
            let base = field.params.value(name).unwrap().clone();
            let fd = fd_grad(
                |d| {
                    let mut f2 = field.clone();
                    f2.params
                        .set_value(name, Tensor::new(base.shape().to_vec(), d.to_vec()).unwrap())
                        .unwrap();
                    eval(&x, &tcol, &z, &f2)
                },
                base.data(),
                h,
            );
            let err = rel_err(params.grad(name).unwrap().data(), &fd);
            assert!(err < 1e-5, "{name}: {err}");
        }
    }

    #[test]
    fn two_layer_tanh_jvp_matches_central_differences() {
        let mut rng = Rng::new(21, 0);
        let mut store = ParamStore::new();
        store.insert("w1", rng.normal_tensor(3, 5)).unwrap();
        store.insert("b1", rng.normal_tensor(1, 5)).unwrap();
        store.insert("w2", rng.normal_tensor(5, 2)).unwrap();
        let f_plain = |x: &[f64]| -> Vec<f64> {
            let mut g = Graph::new();
            let xv = g.constant(Tensor::matrix(1, 3, x.to_vec()).unwrap()).unwrap();
            let y = mlp(&mut g, &store, xv);
            g.value(y).data().to_vec()
        };
        fn mlp<T: Tracer>(tr: &mut T, store: &ParamStore, x: T::Value) -> T::Value {
            let w1 = tr.param(store, "w1").unwrap();
            let b1 = tr.param(store, "b1").unwrap();
            let w2 = tr.param(store, "w2").unwrap();
            let h = tr.matmul(x, w1).unwrap();
            let h = tr.add(h, b1).unwrap();
            let h = tr.tanh(h).unwrap();
            tr.matmul(h, w2).unwrap()
        }
        for _ in 0..10 {
            let x: Vec<f64> = (0..3).map(|_| rng.normal()).collect();
            let u: Vec<f64> = (0..3).map(|_| rng.normal()).collect();
            let mut g = Graph::new();
            let xv = g.constant(Tensor::matrix(1, 3, x.clone()).unwrap()).unwrap();
            let uv = g.constant(Tensor::matrix(1, 3, u.clone()).unwrap()).unwrap();
            let (_, t) = jvp(&mut g, &[xv], &[uv], |tr, xs| Ok(mlp(tr, &store, xs[0]))).unwrap();
            let h = 1e-5;
            let xp: Vec<f64> = x.iter().zip(&u).map(|(a, b)| a + h * b).collect();
            let xm: Vec<f64> = x.iter().zip(&u).map(|(a, b)| a - h * b).collect();
            let fd: Vec<f64> = f_plain(&xp)
                .iter()
                .zip(f_plain(&xm))
                .map(|(a, b)| (a - b) / (2.0 * h))
                .collect();
            assert!(rel_err(g.value(t).data(), &fd) < 1e-6);
        }
    }
}
