//! Model-facing evaluation: path straightness, few-step endpoint
//! consistency, sample quality, and the non-intersection estimate on learned
//! pairs.

use serde::Serialize;

use crate::data::{DatasetSpec, Rng};
use crate::dynamics::{integrate, StepSchedule, Trajectory, VelocitySource};
use crate::error::{Error, Result};
use crate::nn::LatentSpec;
use crate::oracle::{v_functional, SampleSet};
use crate::tensor::Tensor;

/// Chords shorter than this are treated as degenerate.
pub const MIN_CHORD: f64 = 1e-9;

/// Energy distance `2E‖a−b‖ − E‖a−a′‖ − E‖b−b′‖` as a V-statistic (all
/// ordered pairs, self-pairs included), which is nonnegative and exactly 0
/// for identical multisets.
pub fn energy_distance(a: &SampleSet, b: &SampleSet) -> Result<f64> {
    energy_distance_points(&a.points, &b.points)
}

pub fn energy_distance_points(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.rows() == 0 || b.rows() == 0 || a.numel() == 0 || b.numel() == 0 {
        return Err(Error::invalid("energy distance needs two nonempty sample sets"));
    }
    if a.cols() != b.cols() {
        return Err(Error::shape("energy_distance", a.shape(), b.shape()));
    }
    let ed = if a.cols() == 1 {
        energy_1d(a.data(), b.data())
    } else {
        // Self terms are summed exactly like the cross term, so identical
        // sets cancel to 0 without rounding residue.
        2.0 * mean_dist(a, b) - mean_dist(a, a) - mean_dist(b, b)
    };
    // rounding can leave a tiny negative residue when the laws are close
    Ok(ed.max(0.0))
}

fn dist(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt()
}

/// Mean of `‖x − y‖` over all ordered pairs, self-pairs included.
fn mean_dist(a: &Tensor, b: &Tensor) -> f64 {
    let mut s = 0.0;
    for x in a.rows_iter() {
        s += b.rows_iter().map(|y| dist(x, y)).sum::<f64>();
    }
    s / (a.rows() as f64 * b.rows() as f64)
}

/// `Σ_{i<j} |x_i − x_j|` after sorting.
fn sorted_pair_sum(mut x: Vec<f64>) -> f64 {
    x.sort_by(f64::total_cmp);
    let mut prefix = 0.0;
    let mut s = 0.0;
    for (j, &v) in x.iter().enumerate() {
        s += j as f64 * v - prefix;
        prefix += v;
    }
    s
}

fn energy_1d(a: &[f64], b: &[f64]) -> f64 {
    let (n, m) = (a.len() as f64, b.len() as f64);
    let wa = sorted_pair_sum(a.to_vec());
    let wb = sorted_pair_sum(b.to_vec());
    let wab = sorted_pair_sum(a.iter().chain(b).copied().collect());
    let cross = wab - wa - wb;
    2.0 * cross / (n * m) - 2.0 * wa / (n * n) - 2.0 * wb / (m * m)
}

/// Largest perpendicular distance of an interior state from the chord
/// (first to last state), over the chord length. Returns `(ratio,
/// degenerate)`; degenerate chords give ratio 0.
pub fn straightness_ratio(path: &[Vec<f64>]) -> (f64, bool) {
    if path.len() < 2 {
        return (0.0, false);
    }
    let (start, end) = (&path[0], &path[path.len() - 1]);
    let chord: Vec<f64> = end.iter().zip(start).map(|(e, s)| e - s).collect();
    let len = chord.iter().map(|c| c * c).sum::<f64>().sqrt();
    if len < MIN_CHORD {
        return (0.0, true);
    }
    let unit: Vec<f64> = chord.iter().map(|c| c / len).collect();
    let mut worst: f64 = 0.0;
    for p in &path[1..path.len() - 1] {
        let rel: Vec<f64> = p.iter().zip(start).map(|(a, s)| a - s).collect();
        let along: f64 = rel.iter().zip(&unit).map(|(r, u)| r * u).sum();
        let perp2: f64 = rel
            .iter()
            .zip(&unit)
            .map(|(r, u)| (r - along * u).powi(2))
            .sum();
        worst = worst.max(perp2.max(0.0).sqrt());
    }
    (worst / len, false)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct StraightnessSummary {
    pub ratios: Vec<f64>,
    pub median: f64,
    pub p90: f64,
    pub degenerate: usize,
}

impl StraightnessSummary {
    pub fn from_trajectory(traj: &Trajectory) -> Self {
        let mut ratios = Vec::with_capacity(traj.batch_size());
        let mut degenerate = 0;
        for i in 0..traj.batch_size() {
            let (r, deg) = straightness_ratio(&traj.path(i));
            degenerate += deg as usize;
            ratios.push(r);
        }
        Self::from_ratios(ratios, degenerate)
    }

    pub fn from_ratios(ratios: Vec<f64>, degenerate: usize) -> Self {
        let mut sorted = ratios.clone();
        sorted.sort_by(f64::total_cmp);
        Self {
            median: quantile(&sorted, 0.5),
            p90: quantile(&sorted, 0.9),
            ratios,
            degenerate,
        }
    }
}

/// Linear-interpolated quantile of sorted data; 0 for empty input.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    match sorted.len() {
        0 => 0.0,
        1 => sorted[0],
        n => {
            let pos = q.clamp(0.0, 1.0) * (n - 1) as f64;
            let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
            sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
        }
    }
}

/// Endpoints of one batch under several step counts.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConsistencyReport {
    pub nfe_list: Vec<usize>,
    #[serde(skip)]
    pub endpoints: Vec<Tensor>,
    /// `discrepancy[a][b]`: mean endpoint distance between runs `a` and `b`
    /// divided by the target scale.
    pub discrepancy: Vec<Vec<f64>>,
}

impl ConsistencyReport {
    pub fn between(&self, a: usize, b: usize) -> Option<f64> {
        let i = self.nfe_list.iter().position(|&k| k == a)?;
        let j = self.nfe_list.iter().position(|&k| k == b)?;
        Some(self.discrepancy[i][j])
    }
}

/// Integrates the same `x0` and `z` with uniform schedules of each step
/// count and compares the endpoints pairwise.
pub fn endpoint_consistency<S: VelocitySource + ?Sized>(
    field: &S,
    x0: &Tensor,
    z: Option<&Tensor>,
    nfe_list: &[usize],
    target_scale: f64,
) -> Result<ConsistencyReport> {
    if nfe_list.is_empty() {
        return Err(Error::invalid("nfe list is empty"));
    }
    if !(target_scale > 0.0) {
        return Err(Error::invalid(format!("target scale must be positive, got {target_scale}")));
    }
    let endpoints = nfe_list
        .iter()
        .map(|&k| Ok(integrate(field, x0, z, &StepSchedule::uniform(k)?)?.endpoint().clone()))
        .collect::<Result<Vec<_>>>()?;
    let k = endpoints.len();
    let mut discrepancy = vec![vec![0.0; k]; k];
    for i in 0..k {
        for j in i + 1..k {
            let (a, b) = (&endpoints[i], &endpoints[j]);
            let mean = a.rows_iter().zip(b.rows_iter()).map(|(p, q)| dist(p, q)).sum::<f64>()
                / a.rows() as f64;
            discrepancy[i][j] = mean / target_scale;
            discrepancy[j][i] = mean / target_scale;
        }
    }
    Ok(ConsistencyReport {
        nfe_list: nfe_list.to_vec(),
        endpoints,
        discrepancy,
    })
}

/// Non-intersection estimate of the learned transport: `(Z0, Z1)` pairs come
/// from integrating the model with prior latents. Each of the `groups` runs
/// holds one latent code for all `n` sources, so every estimate sees a single
/// ODE transport; the result is the mean over groups.
#[allow(clippy::too_many_arguments)]
pub fn model_v_estimate<S: VelocitySource + ?Sized>(
    field: &S,
    latent: Option<&LatentSpec>,
    dataset: &DatasetSpec,
    n: usize,
    groups: usize,
    t_grid: &[f64],
    h: f64,
    nfe: usize,
    rng: &mut Rng,
) -> Result<f64> {
    if groups == 0 {
        return Err(Error::invalid("model_v_estimate needs at least one latent group"));
    }
    let schedule = StepSchedule::uniform(nfe)?;
    let mut total = 0.0;
    for _ in 0..groups {
        let x0 = dataset.sample_source(n, rng)?;
        let z = match latent {
            Some(spec) => {
                let code = spec.sample_prior(1, rng)?;
                Some(Tensor::from_rows(&vec![code.row(0); n])?)
            }
            None if field.latent_dim() > 0 => {
                return Err(Error::invalid("latent-conditioned field needs a latent spec"))
            }
            None => None,
        };
        let traj = integrate(field, &x0, z.as_ref(), &schedule)?;
        total += v_functional(&traj.states[0], traj.endpoint(), t_grid, h)?;
    }
    Ok(total / groups as f64)
}

/// Default bin width for the non-intersection estimate: a tenth of the
/// target scale.
pub fn default_bin_width(dataset: &DatasetSpec) -> f64 {
    0.1 * dataset.target_scale()
}
