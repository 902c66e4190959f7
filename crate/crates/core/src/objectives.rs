//! Training losses: conditional flow matching, its variational form with a
//! KL penalty, and the straightness penalty on the material derivative of
//! the velocity along the interpolant.
//!
//! Reductions are uniform: mean over the batch, sum over coordinates.

use serde::{Deserialize, Serialize};

use crate::data::CouplingBatch;
use crate::error::{Error, Result};
use crate::nn::{reparameterize, FlowModel, PosteriorOutput};
use crate::tensor::{jvp, Dual, Graph, Tensor, Tracer, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl LossWeights {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        let w = Self { alpha, beta };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite() && self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!(
                "loss weights must be finite and nonnegative, got alpha={} beta={}",
                self.alpha, self.beta
            )));
        }
        Ok(())
    }
}

/// Pieces of `D_t v = ∂_x v·Δ + ∂_t v + ∂_z v·dz/dt`, per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct StraightnessTerms {
    pub dv_dx_dot_delta: Tensor,
    pub dv_dt: Tensor,
    pub dv_dz_dot_dzdt: Tensor,
    /// Joint tangent of the composed map; equals the sum of the three terms.
    pub residual: Tensor,
    pub value: f64,
}

/// Scalar loss values of one evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    /// `fm + β·kl`.
    pub vfm: f64,
    pub fm: f64,
    pub kl: f64,
    pub straightness: f64,
}

/// Mean over rows of `‖v_pred − delta‖²`.
pub fn fm_loss<T: Tracer>(tr: &mut T, v_pred: T::Value, delta: T::Value) -> Result<T::Value> {
    let (a, b) = (tr.value(v_pred).shape().to_vec(), tr.value(delta).shape().to_vec());
    if a != b {
        return Err(Error::shape("fm_loss", &a, &b));
    }
    let diff = tr.sub(v_pred, delta)?;
    tr.batch_mean_sq_norm(diff)
}

/// `KL(N(μ, σ²) ‖ N(0, I))`, summed over latent coordinates and averaged
/// over rows.
pub fn kl_loss<T: Tracer>(tr: &mut T, mu: T::Value, log_sigma: T::Value) -> Result<T::Value> {
    let (a, b) = (tr.value(mu).shape().to_vec(), tr.value(log_sigma).shape().to_vec());
    if a != b {
        return Err(Error::shape("kl_loss", &a, &b));
    }
    let rows = a[0] as f64;
    let mu2 = tr.square(mu)?;
    let two_ls = tr.scale(log_sigma, 2.0)?;
    let var = tr.exp(two_ls)?;
    let s = tr.add(mu2, var)?;
    let s = tr.sub(s, two_ls)?;
    let s = tr.add_scalar(s, -1.0)?;
    let total = tr.sum(s)?;
    tr.scale(total, 0.5 / rows)
}

fn check_eps(model: &FlowModel, batch: &CouplingBatch, eps: Option<&Tensor>) -> Result<()> {
    match (&model.encoder, eps) {
        (Some(enc), Some(e)) if e.shape() == [batch.len(), enc.latent_dim()] => Ok(()),
        (Some(enc), Some(e)) => Err(Error::shape("posterior noise", e.shape(), &[batch.len(), enc.latent_dim()])),
        (Some(_), None) => Err(Error::invalid("variational model needs posterior noise")),
        (None, _) => Ok(()),
    }
}

/// Graph handles of the batch tensors.
struct Inputs {
    x0: Var,
    x1: Var,
    xt: Var,
    t: Var,
    delta: Var,
    eps: Option<Var>,
}

fn load(g: &mut Graph, batch: &CouplingBatch, eps: Option<&Tensor>) -> Result<Inputs> {
    Ok(Inputs {
        x0: g.constant(batch.x0.clone())?,
        x1: g.constant(batch.x1.clone())?,
        xt: g.constant(batch.xt.clone())?,
        t: g.constant(batch.t.clone())?,
        delta: g.constant(batch.delta.clone())?,
        eps: eps.map(|e| g.constant(e.clone())).transpose()?,
    })
}

/// Tape handles of one loss evaluation.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub vfm: Var,
    pub fm: Var,
    pub kl: Option<Var>,
    pub straightness: Option<Var>,
    pub mu: Option<Var>,
    pub log_sigma: Option<Var>,
    pub z: Option<Var>,
}

impl LossVars {
    pub fn breakdown(&self, g: &Graph) -> LossBreakdown {
        let item = |v: Option<Var>| v.map_or(0.0, |v| g.value(v).data()[0]);
        LossBreakdown {
            total: item(Some(self.total)),
            vfm: item(Some(self.vfm)),
            fm: item(Some(self.fm)),
            kl: item(self.kl),
            straightness: item(self.straightness),
        }
    }

    pub fn posterior(&self, g: &Graph, eps: Option<&Tensor>) -> Option<PosteriorOutput> {
        Some(PosteriorOutput {
            mu: g.value(self.mu?).clone(),
            log_sigma: g.value(self.log_sigma?).clone(),
            z: g.value(self.z?).clone(),
            eps: eps?.clone(),
        })
    }
}

fn vfm_terms(g: &mut Graph, v: Var, delta: Var, post: Option<(Var, Var)>, beta: f64) -> Result<(Var, Var, Option<Var>)> {
    let fm = fm_loss(g, v, delta)?;
    match post {
        Some((mu, ls)) => {
            let kl = kl_loss(g, mu, ls)?;
            let weighted = g.scale(kl, beta)?;
            Ok((g.add(fm, weighted)?, fm, Some(kl)))
        }
        None => Ok((fm, fm, None)),
    }
}

/// `‖v(X_t, t, z) − Δ‖² + β·KL(q ‖ p)` with one reparameterized `z` per row.
/// For a model without posterior this is the plain conditional loss.
pub fn vfm_loss(
    g: &mut Graph,
    model: &FlowModel,
    batch: &CouplingBatch,
    eps: Option<&Tensor>,
    beta: f64,
) -> Result<LossVars> {
    check_eps(model, batch, eps)?;
    let inp = load(g, batch, eps)?;
    let (post, z) = match (&model.encoder, inp.eps) {
        (Some(enc), Some(eps)) => {
            let (mu, ls) = enc.forward(g, inp.x0, inp.x1, inp.xt, inp.t)?;
            let z = reparameterize(g, mu, ls, eps)?;
            (Some((mu, ls)), Some(z))
        }
        _ => (None, None),
    };
    let v = model.field.forward(g, inp.xt, inp.t, z)?;
    let (vfm, fm, kl) = vfm_terms(g, v, inp.delta, post, beta)?;
    Ok(LossVars {
        total: vfm,
        vfm,
        fm,
        kl,
        straightness: None,
        mu: post.map(|p| p.0),
        log_sigma: post.map(|p| p.1),
        z,
    })
}

/// One pass of the composed map `(X_t, t) ↦ v(X_t, t, z(X0, X1, X_t, t))`
/// along the tangent `(Δ, 1)`. `X0`, `X1` and the noise carry no tangent.
/// Returns primal velocity, its tangent, and the posterior primals.
#[allow(clippy::type_complexity)]
fn joint_jvp(g: &mut Graph, model: &FlowModel, inp: &Inputs) -> Result<(Var, Var, Option<(Var, Var, Var)>)> {
    let n = g.value(inp.t).rows();
    let ones = g.constant(Tensor::full(n, 1, 1.0))?;
    let mut post = None;
    let (v, dv) = jvp(g, &[inp.xt, inp.t], &[inp.delta, ones], |tr, ins| {
        let z = match (&model.encoder, inp.eps) {
            (Some(enc), Some(eps)) => {
                let (mu, ls) = enc.forward(tr, Dual::constant(inp.x0), Dual::constant(inp.x1), ins[0], ins[1])?;
                let z = reparameterize(tr, mu, ls, Dual::constant(eps))?;
                post = Some((mu.primal, ls.primal, z.primal));
                Some(z)
            }
            _ => None,
        };
        model.field.forward(tr, ins[0], ins[1], z)
    })?;
    Ok((v, dv, post))
}

/// `vfm + α·mean ‖D_t v‖²`, both terms sharing one posterior sample. With
/// `α = 0` the straightness term is not traced at all.
pub fn total_loss(
    g: &mut Graph,
    model: &FlowModel,
    batch: &CouplingBatch,
    eps: Option<&Tensor>,
    weights: LossWeights,
) -> Result<LossVars> {
    weights.validate()?;
    if weights.alpha == 0.0 {
        return vfm_loss(g, model, batch, eps, weights.beta);
    }
    check_eps(model, batch, eps)?;
    let inp = load(g, batch, eps)?;
    let (v, dv, post) = joint_jvp(g, model, &inp)?;
    let (vfm, fm, kl) = vfm_terms(g, v, inp.delta, post.map(|p| (p.0, p.1)), weights.beta)?;
    let s = g.batch_mean_sq_norm(dv)?;
    let weighted = g.scale(s, weights.alpha)?;
    let total = g.add(vfm, weighted)?;
    Ok(LossVars {
        total,
        vfm,
        fm,
        kl,
        straightness: Some(s),
        mu: post.map(|p| p.0),
        log_sigma: post.map(|p| p.1),
        z: post.map(|p| p.2),
    })
}

/// Straightness penalty on `g`, plus its three-way decomposition evaluated
/// on a scratch tape with one JVP per term.
pub fn straightness_loss(
    g: &mut Graph,
    model: &FlowModel,
    batch: &CouplingBatch,
    eps: Option<&Tensor>,
) -> Result<(Var, StraightnessTerms)> {
    check_eps(model, batch, eps)?;
    let inp = load(g, batch, eps)?;
    let (_, dv, _) = joint_jvp(g, model, &inp)?;
    let value = g.batch_mean_sq_norm(dv)?;
    let residual = g.value(dv).clone();
    let terms = decompose(model, batch, eps, residual, g.value(value).data()[0])?;
    Ok((value, terms))
}

fn decompose(
    model: &FlowModel,
    batch: &CouplingBatch,
    eps: Option<&Tensor>,
    residual: Tensor,
    value: f64,
) -> Result<StraightnessTerms> {
    let n = batch.len();
    let mut g = Graph::new();
    let inp = load(&mut g, batch, eps)?;
    let zeros_x = g.constant(Tensor::zeros(n, batch.dim()))?;
    let zeros_t = g.constant(Tensor::zeros(n, 1))?;
    let ones = g.constant(Tensor::full(n, 1, 1.0))?;

    // z and dz/dt along (Δ, 1)
    let (z, dz) = match (&model.encoder, inp.eps) {
        (Some(enc), Some(eps)) => {
            let (z, dz) = jvp(&mut g, &[inp.xt, inp.t], &[inp.delta, ones], |tr, ins| {
                let (mu, ls) = enc.forward(tr, Dual::constant(inp.x0), Dual::constant(inp.x1), ins[0], ins[1])?;
                reparameterize(tr, mu, ls, Dual::constant(eps))
            })?;
            (Some(z), Some(dz))
        }
        _ => (None, None),
    };

    let mut partial = |tx: Var, tt: Var| -> Result<Tensor> {
        let (_, d) = jvp(&mut g, &[inp.xt, inp.t], &[tx, tt], |tr, ins| {
            model.field.forward(tr, ins[0], ins[1], z.map(Dual::constant))
        })?;
        Ok(g.value(d).clone())
    };
    let dv_dx_dot_delta = partial(inp.delta, zeros_t)?;
    let dv_dt = partial(zeros_x, ones)?;
    let dv_dz_dot_dzdt = match (z, dz) {
        (Some(z), Some(dz)) => {
            let (_, d) = jvp(&mut g, &[z], &[dz], |tr, ins| {
                model.field.forward(tr, Dual::constant(inp.xt), Dual::constant(inp.t), Some(ins[0]))
            })?;
            g.value(d).clone()
        }
        _ => Tensor::zeros(n, batch.dim()),
    };
    Ok(StraightnessTerms {
        dv_dx_dot_delta,
        dv_dt,
        dv_dz_dot_dzdt,
        residual,
        value,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_batch, DatasetSpec, Rng};
    use crate::nn::NetConfig;
    use crate::tensor::backward;

    fn cfg(zero: bool) -> NetConfig {
        NetConfig {
            hidden: vec![12, 12],
            posterior_hidden: vec![10],
            latent_dim: 3,
            latent_embed: 6,
            time_embed_dim: 4,
            time_max_scale: 10.0,
            zero_init_output: zero,
        }
    }

    fn setup(zero: bool, seed: u64) -> (FlowModel, CouplingBatch, Tensor) {
        let mut rng = Rng::new(seed, 0);
        let model = FlowModel::new(2, &cfg(zero), true, &mut rng).unwrap();
        let batch = make_batch(&DatasetSpec::hexagonal(), 6, &mut rng).unwrap();
        let eps = rng.normal_tensor(6, 3);
        (model, batch, eps)
    }

    fn scalar(g: &Graph, v: Var) -> f64 {
        g.value(v).data()[0]
    }

    #[test]
    fn fm_loss_cases() {
        let mut g = Graph::new();
        let d = g.constant(Tensor::from_rows(&[[3.0, 4.0]]).unwrap()).unwrap();
        let z = g.constant(Tensor::zeros(1, 2)).unwrap();
        let l = fm_loss(&mut g, z, d).unwrap();
        assert_eq!(scalar(&g, l), 25.0);
        let l = fm_loss(&mut g, d, d).unwrap();
        assert_eq!(scalar(&g, l), 0.0);
        let p = g.constant(Tensor::column(&[1.0, 3.0_f64.sqrt()])).unwrap();
        let q = g.constant(Tensor::zeros(2, 1)).unwrap();
        let l = fm_loss(&mut g, p, q).unwrap();
        assert!((scalar(&g, l) - 2.0).abs() < 1e-15);
        assert!(fm_loss(&mut g, p, d).is_err());
    }

    #[test]
    fn kl_loss_cases() {
        let mut g = Graph::new();
        let zero = g.constant(Tensor::zeros(2, 3)).unwrap();
        let l = kl_loss(&mut g, zero, zero).unwrap();
        assert_eq!(scalar(&g, l), 0.0);
        let mu = g.constant(Tensor::matrix(1, 1, vec![1.0]).unwrap()).unwrap();
        let ls0 = g.constant(Tensor::zeros(1, 1)).unwrap();
        let l = kl_loss(&mut g, mu, ls0).unwrap();
        assert_eq!(scalar(&g, l), 0.5);
        let mu0 = g.constant(Tensor::zeros(1, 1)).unwrap();
        let ls = g.constant(Tensor::matrix(1, 1, vec![2f64.ln()]).unwrap()).unwrap();
        let l = kl_loss(&mut g, mu0, ls).unwrap();
        assert!((scalar(&g, l) - (1.5 - 2f64.ln())).abs() < 1e-15);
    }

    #[test]
    fn zero_init_vfm_is_mean_delta_norm() {
        let (model, batch, eps) = setup(true, 1);
        let want = batch.delta.rows_iter().map(|r| r.iter().map(|v| v * v).sum::<f64>()).sum::<f64>()
            / batch.len() as f64;
        for beta in [0.0, 1.0] {
            let mut g = Graph::new();
            let l = vfm_loss(&mut g, &model, &batch, Some(&eps), beta).unwrap();
            let b = l.breakdown(&g);
            assert!((b.total - want).abs() < 1e-12 * want);
            assert_eq!(b.kl, 0.0);
        }
    }

    #[test]
    fn vfm_is_additive_in_beta() {
        let (model, batch, eps) = setup(false, 2);
        let mut g = Graph::new();
        let l = vfm_loss(&mut g, &model, &batch, Some(&eps), 1.0).unwrap();
        let b = l.breakdown(&g);
        assert!(b.kl > 0.0);
        assert!((b.total - (b.fm + b.kl)).abs() < 1e-12);
        let post = l.posterior(&g, Some(&eps)).unwrap();
        let z: Vec<f64> = post
            .mu
            .data()
            .iter()
            .zip(post.log_sigma.data())
            .zip(eps.data())
            .map(|((m, s), e)| m + s.exp() * e)
            .collect();
        assert_eq!(post.z.data(), z.as_slice());
    }

    #[test]
    fn alpha_zero_is_vfm_and_alpha_scales_linearly() {
        let (model, batch, eps) = setup(false, 3);
        let eval = |alpha: f64| {
            let mut g = Graph::new();
            let l = total_loss(&mut g, &model, &batch, Some(&eps), LossWeights::new(alpha, 0.3).unwrap()).unwrap();
            l.breakdown(&g)
        };
        let mut g = Graph::new();
        let vfm = vfm_loss(&mut g, &model, &batch, Some(&eps), 0.3).unwrap().breakdown(&g);
        let b0 = eval(0.0);
        assert_eq!(b0.total, vfm.total);
        let (b1, b4) = (eval(1.0), eval(4.0));
        assert_eq!(b1.vfm, vfm.vfm);
        assert_eq!(b1.straightness, b4.straightness);
        assert!((b4.total - b4.vfm - 4.0 * (b1.total - b1.vfm)).abs() < 1e-10);
        assert!((b1.total - (b1.vfm + b1.straightness)).abs() < 1e-12);
    }

    #[test]
    fn zero_nets_give_mean_delta_with_no_straightness() {
        let (model, batch, eps) = setup(true, 4);
        let mut g = Graph::new();
        let b = total_loss(&mut g, &model, &batch, Some(&eps), LossWeights::new(1.0, 0.0).unwrap())
            .unwrap()
            .breakdown(&g);
        let want = batch.delta.rows_iter().map(|r| r.iter().map(|v| v * v).sum::<f64>()).sum::<f64>()
            / batch.len() as f64;
        assert!((b.total - want).abs() < 1e-12 * want);
        assert_eq!(b.straightness, 0.0);
    }

    #[test]
    fn decomposition_sums_to_joint_tangent() {
        let (model, batch, eps) = setup(false, 5);
        let mut g = Graph::new();
        let (s, terms) = straightness_loss(&mut g, &model, &batch, Some(&eps)).unwrap();
        assert!(scalar(&g, s) >= 0.0);
        for i in 0..terms.residual.numel() {
            let sum = terms.dv_dx_dot_delta.data()[i] + terms.dv_dt.data()[i] + terms.dv_dz_dot_dzdt.data()[i];
            assert!((sum - terms.residual.data()[i]).abs() < 1e-10, "{i}");
        }
        assert!(terms.dv_dz_dot_dzdt.data().iter().any(|v| v.abs() > 0.0));
    }

    #[test]
    fn latent_path_carries_gradient_to_the_posterior() {
        let (model, batch, eps) = setup(false, 6);
        let mut g = Graph::new();
        let l = total_loss(&mut g, &model, &batch, Some(&eps), LossWeights::new(10.0, 0.0).unwrap()).unwrap();
        let mut m = model.clone();
        backward(&g, l.total, m.encoder.as_mut().map(|e| &mut e.params).unwrap()).unwrap();
        assert!(m.encoder.unwrap().params.grad_sq_norm() > 0.0);
    }

    #[test]
    fn missing_noise_is_rejected() {
        let (model, batch, _) = setup(false, 7);
        let mut g = Graph::new();
        assert!(vfm_loss(&mut g, &model, &batch, None, 0.0).is_err());
        let bad = Tensor::zeros(batch.len(), 2);
        assert!(vfm_loss(&mut g, &model, &batch, Some(&bad), 0.0).is_err());
        assert!(LossWeights::new(-1.0, 0.0).is_err());
    }

    #[test]
    fn same_noise_same_loss_bits() {
        let (model, batch, eps) = setup(false, 8);
        let run = || {
            let mut g = Graph::new();
            total_loss(&mut g, &model, &batch, Some(&eps), LossWeights::new(10.0, 0.01).unwrap())
                .unwrap()
                .breakdown(&g)
        };
        assert_eq!(run().total.to_bits(), run().total.to_bits());
    }
}
