//! Closed-form references: the marginal velocity of Gaussian-mixture
//! targets under a standard-normal source, the binned non-intersection
//! functional, and Monte-Carlo checkers built on them.

pub mod suite;

use std::collections::HashMap;

use serde::Serialize;

use crate::data::Rng;
use crate::dynamics::{integrate, StepSchedule, TracedField, Trajectory, VelocitySource};
use crate::error::{Error, Result};
use crate::metrics::energy_distance;
use crate::tensor::{jvp, Dual, Graph, Tensor, Tracer};

/// Isotropic Gaussian mixture target; the source is always `N(0, I)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GmmSpec {
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    stds: Vec<f64>,
}

impl GmmSpec {
    pub fn new(weights: Vec<f64>, means: Vec<Vec<f64>>, stds: Vec<f64>) -> Result<Self> {
        let spec = Self {
            weights,
            means,
            stds,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.weights.len();
        if k == 0 || self.means.len() != k || self.stds.len() != k {
            return Err(Error::invalid("mixture needs matching weights, means and stds"));
        }
        let d = self.means[0].len();
        if d == 0 || self.means.iter().any(|m| m.len() != d) {
            return Err(Error::invalid("mixture means must share a positive dimension"));
        }
        if self.weights.iter().any(|&w| !(w >= 0.0)) {
            return Err(Error::invalid("mixture weights must be nonnegative"));
        }
        if (self.weights.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
            return Err(Error::invalid("mixture weights must sum to 1"));
        }
        if self.stds.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::invalid("mixture stds must be positive"));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn components(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    pub fn stds(&self) -> &[f64] {
        &self.stds
    }

    pub fn sample(&self, n: usize, rng: &mut Rng) -> Tensor {
        let d = self.dim();
        let mut data = Vec::with_capacity(n * d);
        for _ in 0..n {
            let k = rng.categorical(&self.weights);
            for j in 0..d {
                data.push(self.means[k][j] + self.stds[k] * rng.normal());
            }
        }
        Tensor::matrix(n, d, data).expect("shape matches length")
    }
}

/// `E[X1 − X0 | X_t = x]` for the independent coupling of `N(0, I)` with `spec`.
///
/// Component `k` contributes posterior mean
/// `(m_k (1−t)² + t s_k² x) / ((1−t)² + t² s_k²)` with responsibility
/// `∝ w_k N(x; t m_k, ((1−t)² + t² s_k²) I)`; the velocity is
/// `(E[X1 | X_t = x] − x) / (1 − t)`.
pub fn analytic_velocity_gmm(spec: &GmmSpec, x: &[f64], t: f64) -> Result<Vec<f64>> {
    if !(0.0..1.0).contains(&t) {
        return Err(Error::invalid(format!("analytic velocity needs 0 ≤ t < 1, got {t}")));
    }
    let d = spec.dim();
    if x.len() != d {
        return Err(Error::shape("analytic_velocity_gmm", &[x.len()], &[d]));
    }
    let a2 = (1.0 - t) * (1.0 - t);
    let mut logits = Vec::with_capacity(spec.components());
    for k in 0..spec.components() {
        let s2 = spec.stds[k] * spec.stds[k];
        let var = a2 + t * t * s2;
        let sq: f64 = x
            .iter()
            .zip(&spec.means[k])
            .map(|(xi, mi)| (xi - t * mi).powi(2))
            .sum();
        logits.push(spec.weights[k].ln() - 0.5 * sq / var - 0.5 * d as f64 * var.ln());
    }
    let shift = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let resp: Vec<f64> = logits.iter().map(|l| (l - shift).exp()).collect();
    let total: f64 = resp.iter().sum();

    let mut cond_mean = vec![0.0; d];
    for k in 0..spec.components() {
        let r = resp[k] / total;
        if r == 0.0 {
            continue;
        }
        let s2 = spec.stds[k] * spec.stds[k];
        let var = a2 + t * t * s2;
        for j in 0..d {
            cond_mean[j] += r * (spec.means[k][j] * a2 + t * s2 * x[j]) / var;
        }
    }
    Ok(cond_mean
        .iter()
        .zip(x)
        .map(|(m, xi)| (m - xi) / (1.0 - t))
        .collect())
}

impl VelocitySource for GmmSpec {
    fn dim(&self) -> usize {
        GmmSpec::dim(self)
    }

    fn velocity(&self, x: &Tensor, t: f64, _z: Option<&Tensor>) -> Result<Tensor> {
        let mut data = Vec::with_capacity(x.numel());
        for row in x.rows_iter() {
            data.extend(analytic_velocity_gmm(self, row, t)?);
        }
        Tensor::matrix(x.rows(), self.dim(), data)
    }
}

impl TracedField for GmmSpec {
    /// Same formula as [`analytic_velocity_gmm`], recorded op by op so its
    /// Jacobian is available. The log-sum-exp shift is held constant.
    fn trace<T: Tracer>(&self, tr: &mut T, x: T::Value, t: T::Value, _z: Option<T::Value>) -> Result<T::Value> {
        let n = tr.value(x).rows();
        let d = self.dim();
        if tr.value(t).data().iter().any(|&s| !(0.0..1.0).contains(&s)) {
            return Err(Error::invalid("analytic velocity needs 0 ≤ t < 1"));
        }
        let one_minus_t = {
            let neg = tr.neg(t)?;
            tr.add_scalar(neg, 1.0)?
        };
        let a2 = tr.square(one_minus_t)?;
        let t2 = tr.square(t)?;
        let xt = tr.mul_col(x, t)?;

        let mut logits = Vec::with_capacity(self.components());
        let mut means = Vec::with_capacity(self.components());
        for k in 0..self.components() {
            let s2 = self.stds[k] * self.stds[k];
            let m_row = tr.constant(Tensor::matrix(1, d, self.means[k].clone())?)?;
            let t2s2 = tr.scale(t2, s2)?;
            let var = tr.add(a2, t2s2)?;
            let inv_var = tr.recip(var)?;

            let shifted = tr.matmul(t, m_row)?;
            let diff = tr.sub(x, shifted)?;
            let diff2 = tr.square(diff)?;
            let sq = tr.sum_cols(diff2)?;
            let quad = tr.mul(sq, inv_var)?;
            let quad = tr.scale(quad, -0.5)?;
            let logvar = tr.log(var)?;
            let norm = tr.scale(logvar, -0.5 * d as f64)?;
            let logit = tr.add(quad, norm)?;
            logits.push(tr.add_scalar(logit, self.weights[k].ln())?);

            let pull = tr.matmul(a2, m_row)?;
            let spread = tr.scale(xt, s2)?;
            let num = tr.add(pull, spread)?;
            means.push(tr.mul_col(num, inv_var)?);
        }
        let logits = tr.concat_cols(&logits)?;
        let k = self.components();
        let shift: Vec<f64> = tr
            .value(logits)
            .rows_iter()
            .flat_map(|r| {
                let m = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                std::iter::repeat_n(m, k)
            })
            .collect();
        let shift = tr.constant(Tensor::matrix(n, k, shift)?)?;
        let centered = tr.sub(logits, shift)?;
        let e = tr.exp(centered)?;
        let total = tr.sum_cols(e)?;
        let inv_total = tr.recip(total)?;
        let resp = tr.mul_col(e, inv_total)?;

        let mut cond = None;
        for (j, mean) in means.into_iter().enumerate() {
            let r = tr.slice_cols(resp, j, j + 1)?;
            let term = tr.mul_col(mean, r)?;
            cond = Some(match cond {
                None => term,
                Some(acc) => tr.add(acc, term)?,
            });
        }
        let cond = cond.expect("at least one component");
        let gap = tr.sub(cond, x)?;
        let inv = tr.recip(one_minus_t)?;
        tr.mul_col(gap, inv)
    }
}

/// Points labelled with the law they were drawn from.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleSet {
    pub points: Tensor,
    pub label: String,
}

impl SampleSet {
    pub fn new(points: Tensor, label: impl Into<String>) -> Result<Self> {
        if !points.is_finite() {
            return Err(Error::invalid("sample set contains non-finite points"));
        }
        Ok(Self {
            points,
            label: label.into(),
        })
    }
}

/// Binned estimate of `∫ E‖Δ − E[Δ | X_t]‖² dt` from endpoint pairs.
///
/// `pairs` is `n × 2d` with `x0` in the first `d` columns. At each grid time
/// the interpolants are bucketed into cubes of side `h` anchored at the
/// per-coordinate minimum; the squared deviation of each Δ from its cube
/// mean is averaged over all points, then over the grid.
pub fn estimate_v_functional(pairs: &Tensor, t_grid: &[f64], h: f64) -> Result<f64> {
    if pairs.rows() < 1 || pairs.cols() < 2 || pairs.cols() % 2 != 0 {
        return Err(Error::invalid(format!(
            "endpoint pairs must be a nonempty n×2d matrix, got {:?}",
            pairs.shape()
        )));
    }
    let d = pairs.cols() / 2;
    let x0 = Tensor::matrix(
        pairs.rows(),
        d,
        pairs.rows_iter().flat_map(|r| r[..d].to_vec()).collect(),
    )?;
    let x1 = Tensor::matrix(
        pairs.rows(),
        d,
        pairs.rows_iter().flat_map(|r| r[d..].to_vec()).collect(),
    )?;
    v_functional(&x0, &x1, t_grid, h)
}

/// [`estimate_v_functional`] on separate endpoint matrices.
pub fn v_functional(x0: &Tensor, x1: &Tensor, t_grid: &[f64], h: f64) -> Result<f64> {
    if x0.shape() != x1.shape() {
        return Err(Error::shape("v_functional", x0.shape(), x1.shape()));
    }
    if x0.rows() == 0 {
        return Err(Error::invalid("v_functional needs at least one pair"));
    }
    if !(h > 0.0) {
        return Err(Error::invalid(format!("bin width must be positive, got {h}")));
    }
    if t_grid.is_empty() {
        return Err(Error::invalid("empty time grid"));
    }
    let (n, d) = x0.as_matrix();
    let delta: Vec<f64> = x1.data().iter().zip(x0.data()).map(|(b, a)| b - a).collect();

    let mut total = 0.0;
    let mut pos = vec![0.0; n * d];
    for &t in t_grid {
        for ((p, a), b) in pos.iter_mut().zip(x0.data()).zip(x1.data()) {
            *p = (1.0 - t) * a + t * b;
        }
        let mut lo = vec![f64::INFINITY; d];
        for row in pos.chunks(d) {
            lo.iter_mut().zip(row).for_each(|(l, &p)| *l = l.min(p));
        }
        let mut cells: HashMap<Vec<i64>, usize> = HashMap::new();
        let mut cell_of = Vec::with_capacity(n);
        let mut sums: Vec<Vec<f64>> = Vec::new();
        let mut counts: Vec<usize> = Vec::new();
        for (i, row) in pos.chunks(d).enumerate() {
            let key: Vec<i64> = row
                .iter()
                .zip(&lo)
                .map(|(p, l)| ((p - l) / h).floor() as i64)
                .collect();
            let next = sums.len();
            let c = *cells.entry(key).or_insert(next);
            if c == next {
                sums.push(vec![0.0; d]);
                counts.push(0);
            }
            sums[c]
                .iter_mut()
                .zip(&delta[i * d..(i + 1) * d])
                .for_each(|(s, v)| *s += v);
            counts[c] += 1;
            cell_of.push(c);
        }
        let mut dev = 0.0;
        for (i, &c) in cell_of.iter().enumerate() {
            if counts[c] < 2 {
                continue;
            }
            let inv = 1.0 / counts[c] as f64;
            dev += delta[i * d..(i + 1) * d]
                .iter()
                .zip(&sums[c])
                .map(|(v, s)| (v - s * inv).powi(2))
                .sum::<f64>();
        }
        total += dev / n as f64;
    }
    Ok(total / t_grid.len() as f64)
}

/// Interior grid `1/(k+1), …, k/(k+1)`.
pub fn interior_grid(k: usize) -> Vec<f64> {
    (1..=k).map(|i| i as f64 / (k + 1) as f64).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TransportCost {
    /// `E‖X1 − X0‖²` under the independent coupling.
    pub cost_x: f64,
    /// `E‖Z1 − Z0‖²` along the integrated marginal flow.
    pub cost_z: f64,
    pub se_x: f64,
    pub se_z: f64,
}

impl TransportCost {
    /// Standard error of `cost_z − cost_x`, treating the two as independent.
    pub fn se_diff(&self) -> f64 {
        (self.se_x * self.se_x + self.se_z * self.se_z).sqrt()
    }
}

fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

fn row_sq_dists(a: &Tensor, b: &Tensor) -> Vec<f64> {
    a.rows_iter()
        .zip(b.rows_iter())
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| (q - p).powi(2)).sum())
        .collect()
}

/// Squared-distance transport cost of the data coupling versus the flow
/// started at the same `X0`. Draw order: `X0`, then `X1`.
pub fn check_transport_cost(
    spec: &GmmSpec,
    n: usize,
    schedule: &StepSchedule,
    rng: &mut Rng,
) -> Result<TransportCost> {
    if n == 0 {
        return Err(Error::invalid("transport cost needs n ≥ 1"));
    }
    let x0 = rng.normal_tensor(n, spec.dim());
    let x1 = spec.sample(n, rng);
    let (cost_x, se_x) = mean_and_se(&row_sq_dists(&x0, &x1));
    let traj = integrate(spec, &x0, None, schedule)?;
    let (cost_z, se_z) = mean_and_se(&row_sq_dists(&x0, traj.endpoint()));
    Ok(TransportCost {
        cost_x,
        cost_z,
        se_x,
        se_z,
    })
}

/// Energy distance between `Law(X_t)` (fresh interpolated pairs) and
/// `Law(Z_t)` (the flow started from an independent source draw), per probe.
///
/// Probe times must be knots of `schedule`. At most `max_points` points
/// per side enter each energy distance.
pub fn check_marginal_preservation(
    spec: &GmmSpec,
    n: usize,
    probes: &[f64],
    schedule: &StepSchedule,
    rng: &mut Rng,
    max_points: usize,
) -> Result<Vec<(f64, f64)>> {
    if n == 0 {
        return Err(Error::invalid("marginal check needs n ≥ 1"));
    }
    let knots = schedule.knots();
    let idx = probes
        .iter()
        .map(|&p| {
            knots
                .iter()
                .position(|&k| (k - p).abs() < 1e-12)
                .ok_or_else(|| Error::invalid(format!("probe time {p} is not a schedule knot")))
        })
        .collect::<Result<Vec<_>>>()?;

    let d = spec.dim();
    let x0 = rng.normal_tensor(n, d);
    let x1 = spec.sample(n, rng);
    let z0 = rng.normal_tensor(n, d);
    let traj = integrate(spec, &z0, None, schedule)?;
    let m = n.min(max_points.max(1));

    let mut out = Vec::with_capacity(probes.len());
    for (&t, &i) in probes.iter().zip(&idx) {
        let xt: Vec<f64> = x0
            .data()
            .iter()
            .zip(x1.data())
            .map(|(a, b)| (1.0 - t) * a + t * b)
            .collect();
        let xt = Tensor::matrix(n, d, xt)?.slice_rows(0, m);
        let zt = traj.states[i].slice_rows(0, m);
        let a = SampleSet::new(xt, format!("Law(X_{t})"))?;
        let b = SampleSet::new(zt, format!("Law(Z_{t})"))?;
        out.push((t, energy_distance(&a, &b)?));
    }
    Ok(out)
}

/// `‖∂_t v + (∇_x v)·v‖` at every state of `traj` with `t < 1`, computed as
/// one JVP per state along the tangent `(v, 1)` with the latent held fixed.
/// Returns `norms[state][row]`.
pub fn material_derivative_norm<F: TracedField>(source: &F, traj: &Trajectory) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::new();
    for (state, &t) in traj.states.iter().zip(&traj.times) {
        if t >= 1.0 {
            continue;
        }
        let n = state.rows();
        let z = traj.latent.as_ref();
        let v = source.velocity(state, t, z)?;

        let mut g = Graph::new();
        let x = g.constant(state.clone())?;
        let tc = g.constant(Tensor::full(n, 1, t))?;
        let zc = z.map(|z| g.constant(z.clone())).transpose()?;
        let vx = g.constant(v)?;
        let one = g.constant(Tensor::full(n, 1, 1.0))?;
        let (_, dt) = jvp(&mut g, &[x, tc], &[vx, one], |tr, ins| {
            source.trace(tr, ins[0], ins[1], zc.map(Dual::constant))
        })?;
        out.push(g.value(dt).rows_iter().map(|r| r.iter().map(|a| a * a).sum::<f64>().sqrt()).collect());
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct NormSummary {
    pub mean: f64,
    pub max: f64,
}

impl NormSummary {
    pub fn from_norms(norms: &[Vec<f64>]) -> Self {
        let all: Vec<f64> = norms.iter().flatten().copied().collect();
        if all.is_empty() {
            return Self::default();
        }
        Self {
            mean: all.iter().sum::<f64>() / all.len() as f64,
            max: all.iter().copied().fold(0.0, f64::max),
        }
    }
}

/// Everything the analytic checkers measure for one specification.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DiagnosticsReport {
    pub v_estimate: f64,
    pub cost_x: f64,
    pub cost_z: f64,
    pub marginal_distances: Vec<(f64, f64)>,
    pub material_derivative: NormSummary,
}
