//! Synthetic source/target laws, the independent coupling, and interpolant
//! batches.

use std::f64::consts::PI;

use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::oracle::GmmSpec;
use crate::tensor::Tensor;

/// Seeded random stream. `(seed, stream)` determines the whole sequence.
#[derive(Clone, Debug)]
pub struct Rng {
    inner: ChaCha8Rng,
    seed: u64,
    stream: u64,
}

impl Rng {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self {
            inner,
            seed,
            stream,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// Position in the keystream, for checkpointing.
    pub fn word_pos(&self) -> u128 {
        self.inner.get_word_pos()
    }

    pub fn set_word_pos(&mut self, pos: u128) {
        self.inner.set_word_pos(pos);
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Uniform index in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn normal_tensor(&mut self, rows: usize, cols: usize) -> Tensor {
        let data = (0..rows * cols).map(|_| self.normal()).collect();
        Tensor::matrix(rows, cols, data).expect("shape matches length")
    }

    /// Index drawn with probability proportional to `weights`.
    pub fn categorical(&mut self, weights: &[f64]) -> usize {
        let u = self.uniform() * weights.iter().sum::<f64>();
        let mut acc = 0.0;
        for (k, w) in weights.iter().enumerate() {
            acc += w;
            if u < acc {
                return k;
            }
        }
        weights.len() - 1
    }
}

fn default_hex_radius() -> f64 {
    6.0
}
fn default_hex_std() -> f64 {
    0.35
}
fn default_hex_clusters() -> usize {
    6
}
fn default_ring_radius() -> f64 {
    8.0
}
fn default_ring_std() -> f64 {
    0.4
}
fn default_ring_clusters() -> usize {
    8
}
fn default_moon_radius() -> f64 {
    2.0
}
fn default_moon_noise() -> f64 {
    0.1
}
fn default_one() -> usize {
    1
}
fn default_unit() -> f64 {
    1.0
}
fn default_gmm_weights() -> Vec<f64> {
    vec![0.5, 0.5]
}
fn default_gmm_means() -> Vec<f64> {
    vec![-2.0, 2.0]
}
fn default_gmm_stds() -> Vec<f64> {
    vec![0.5, 0.5]
}

/// Source and target laws of an experiment. Geometry is configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// `N(0, I)` to an equal mixture of clusters on a circle at angles `360°/k · j`.
    Hexagonal {
        #[serde(default = "default_hex_radius")]
        radius: f64,
        #[serde(default = "default_hex_std")]
        std: f64,
        #[serde(default = "default_hex_clusters")]
        clusters: usize,
    },
    /// Ring of Gaussians to two interleaved half-circles.
    EightToMoons {
        #[serde(default = "default_ring_radius")]
        source_radius: f64,
        #[serde(default = "default_ring_std")]
        source_std: f64,
        #[serde(default = "default_ring_clusters")]
        source_clusters: usize,
        #[serde(default = "default_moon_radius")]
        moon_radius: f64,
        #[serde(default = "default_moon_noise")]
        moon_noise: f64,
    },
    /// `N(0, I)` to `N(mean·1, std² I)` in `dim` dimensions.
    GaussToGauss {
        #[serde(default = "default_one")]
        dim: usize,
        #[serde(default)]
        target_mean: f64,
        #[serde(default = "default_unit")]
        target_std: f64,
    },
    /// `N(0, 1)` to a 1D Gaussian mixture.
    #[serde(rename = "gmm_1d")]
    Gmm1d {
        #[serde(default = "default_gmm_weights")]
        weights: Vec<f64>,
        #[serde(default = "default_gmm_means")]
        means: Vec<f64>,
        #[serde(default = "default_gmm_stds")]
        stds: Vec<f64>,
    },
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::hexagonal()
    }
}

impl DatasetSpec {
    pub fn hexagonal() -> Self {
        DatasetSpec::Hexagonal {
            radius: default_hex_radius(),
            std: default_hex_std(),
            clusters: default_hex_clusters(),
        }
    }

    pub fn eight_to_moons() -> Self {
        DatasetSpec::EightToMoons {
            source_radius: default_ring_radius(),
            source_std: default_ring_std(),
            source_clusters: default_ring_clusters(),
            moon_radius: default_moon_radius(),
            moon_noise: default_moon_noise(),
        }
    }

    pub fn gauss_to_gauss(dim: usize) -> Self {
        DatasetSpec::GaussToGauss {
            dim,
            target_mean: 0.0,
            target_std: 1.0,
        }
    }

    pub fn gmm_1d() -> Self {
        DatasetSpec::Gmm1d {
            weights: default_gmm_weights(),
            means: default_gmm_means(),
            stds: default_gmm_stds(),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            DatasetSpec::Hexagonal { .. } => "hexagonal",
            DatasetSpec::EightToMoons { .. } => "eight_to_moons",
            DatasetSpec::GaussToGauss { .. } => "gauss_to_gauss",
            DatasetSpec::Gmm1d { .. } => "gmm_1d",
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            DatasetSpec::Hexagonal { .. } | DatasetSpec::EightToMoons { .. } => 2,
            DatasetSpec::GaussToGauss { dim, .. } => *dim,
            DatasetSpec::Gmm1d { .. } => 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!("{}: {name} must be positive, got {v}", self.name())))
            }
        };
        match self {
            DatasetSpec::Hexagonal {
                radius,
                std,
                clusters,
            } => {
                positive("radius", *radius)?;
                positive("std", *std)?;
                if *clusters == 0 {
                    return Err(Error::Config("hexagonal: clusters must be ≥ 1".into()));
                }
            }
            DatasetSpec::EightToMoons {
                source_radius,
                source_std,
                source_clusters,
                moon_radius,
                moon_noise,
            } => {
                positive("source_radius", *source_radius)?;
                positive("source_std", *source_std)?;
                positive("moon_radius", *moon_radius)?;
                positive("moon_noise", *moon_noise)?;
                if *source_clusters == 0 {
                    return Err(Error::Config("eight_to_moons: source_clusters must be ≥ 1".into()));
                }
            }
            DatasetSpec::GaussToGauss {
                dim, target_std, ..
            } => {
                positive("target_std", *target_std)?;
                if *dim == 0 {
                    return Err(Error::Config("gauss_to_gauss: dim must be ≥ 1".into()));
                }
            }
            DatasetSpec::Gmm1d { .. } => {
                self.gmm()
                    .expect("gmm_1d always has a mixture target")
                    .validate()
                    .map_err(|e| Error::Config(format!("gmm_1d: {e}")))?;
            }
        }
        Ok(())
    }

    /// Target as an isotropic Gaussian mixture, for specs whose source is
    /// `N(0, I)`. These are the specs with a closed-form marginal velocity.
    pub fn gmm(&self) -> Option<GmmSpec> {
        match self {
            DatasetSpec::Hexagonal {
                radius,
                std,
                clusters,
            } => {
                let k = *clusters;
                let means = (0..k)
                    .map(|j| {
                        let a = 2.0 * PI * j as f64 / k as f64;
                        vec![radius * a.cos(), radius * a.sin()]
                    })
                    .collect();
                Some(GmmSpec::new(vec![1.0 / k as f64; k], means, vec![*std; k]).ok()?)
            }
            DatasetSpec::GaussToGauss {
                dim,
                target_mean,
                target_std,
            } => GmmSpec::new(vec![1.0], vec![vec![*target_mean; *dim]], vec![*target_std]).ok(),
            DatasetSpec::Gmm1d {
                weights,
                means,
                stds,
            } => GmmSpec::new(
                weights.clone(),
                means.iter().map(|&m| vec![m]).collect(),
                stds.clone(),
            )
            .ok(),
            DatasetSpec::EightToMoons { .. } => None,
        }
    }

    pub fn sample_source(&self, n: usize, rng: &mut Rng) -> Result<Tensor> {
        check_count(n)?;
        match self {
            DatasetSpec::EightToMoons {
                source_radius,
                source_std,
                source_clusters,
                ..
            } => Ok(ring_mixture(n, *source_clusters, *source_radius, *source_std, rng)),
            _ => Ok(rng.normal_tensor(n, self.dim())),
        }
    }

    pub fn sample_target(&self, n: usize, rng: &mut Rng) -> Result<Tensor> {
        check_count(n)?;
        match self {
            DatasetSpec::Hexagonal {
                radius,
                std,
                clusters,
            } => Ok(ring_mixture(n, *clusters, *radius, *std, rng)),
            DatasetSpec::EightToMoons {
                moon_radius,
                moon_noise,
                ..
            } => Ok(two_moons(n, *moon_radius, *moon_noise, rng)),
            _ => {
                let gmm = self.gmm().ok_or_else(|| Error::invalid("dataset has no target"))?;
                Ok(gmm.sample(n, rng))
            }
        }
    }

    /// Root-mean per-coordinate standard deviation of the target, estimated
    /// on a fixed stream so it is the same number everywhere.
    pub fn target_scale(&self) -> f64 {
        let mut rng = Rng::new(0x5ca1e, 0);
        let x = self
            .sample_target(20_000, &mut rng)
            .expect("positive sample count");
        let (n, d) = (x.rows(), x.cols());
        let mut var = 0.0;
        for j in 0..d {
            let mean = x.rows_iter().map(|r| r[j]).sum::<f64>() / n as f64;
            var += x.rows_iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / n as f64;
        }
        (var / d as f64).sqrt()
    }
}

fn check_count(n: usize) -> Result<()> {
    if n == 0 {
        Err(Error::invalid("sample count must be ≥ 1"))
    } else {
        Ok(())
    }
}

/// Equal mixture of `k` isotropic Gaussians centered on a circle, first
/// center on the positive x axis.
fn ring_mixture(n: usize, k: usize, radius: f64, std: f64, rng: &mut Rng) -> Tensor {
    let mut data = Vec::with_capacity(2 * n);
    for _ in 0..n {
        let j = rng.below(k);
        let a = 2.0 * PI * j as f64 / k as f64;
        data.push(radius * a.cos() + std * rng.normal());
        data.push(radius * a.sin() + std * rng.normal());
    }
    Tensor::matrix(n, 2, data).expect("shape matches length")
}

/// Two interleaved half-circles of the given radius. The upper arc is
/// centered at `(-r/2, -r/4)`, the lower one at `(r/2, r/4)`; for `r = 2`
/// that is horizontal offsets ±1 and vertical offsets ∓0.5.
fn two_moons(n: usize, radius: f64, noise: f64, rng: &mut Rng) -> Tensor {
    let (dx, dy) = (radius / 2.0, radius / 4.0);
    let mut data = Vec::with_capacity(2 * n);
    for _ in 0..n {
        let theta = PI * rng.uniform();
        let upper = rng.uniform() < 0.5;
        let (x, y) = if upper {
            (radius * theta.cos() - dx, radius * theta.sin() - dy)
        } else {
            (dx - radius * theta.cos(), dy - radius * theta.sin())
        };
        data.push(x + noise * rng.normal());
        data.push(y + noise * rng.normal());
    }
    Tensor::matrix(n, 2, data).expect("shape matches length")
}

/// Training tuples along straight interpolants.
#[derive(Clone, Debug, PartialEq)]
pub struct CouplingBatch {
    pub x0: Tensor,
    pub x1: Tensor,
    /// `n × 1`.
    pub t: Tensor,
    pub xt: Tensor,
    pub delta: Tensor,
}

impl CouplingBatch {
    /// Fills `xt = (1 − t)·x0 + t·x1` and `delta = x1 − x0`.
    pub fn from_pairs(x0: Tensor, x1: Tensor, t: &[f64]) -> Result<Self> {
        if x0.shape() != x1.shape() || x0.rows() != t.len() {
            return Err(Error::shape("coupling batch", x0.shape(), x1.shape()));
        }
        if let Some(bad) = t.iter().find(|&&s| !(0.0..=1.0).contains(&s)) {
            return Err(Error::invalid(format!("interpolation time {bad} outside [0, 1]")));
        }
        let d = x0.cols();
        let mut xt = Vec::with_capacity(x0.numel());
        let mut delta = Vec::with_capacity(x0.numel());
        for (i, &s) in t.iter().enumerate() {
            for (a, b) in x0.row(i).iter().zip(x1.row(i)) {
                xt.push((1.0 - s) * a + s * b);
                delta.push(b - a);
            }
        }
        let n = t.len();
        Ok(Self {
            xt: Tensor::matrix(n, d, xt)?,
            delta: Tensor::matrix(n, d, delta)?,
            t: Tensor::column(t),
            x0,
            x1,
        })
    }

    pub fn len(&self) -> usize {
        self.x0.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.x0.cols()
    }
}

/// Independent-coupling batch: `x0 ~ ρ0`, `x1 ~ ρ1`, `t ~ U[0, 1]`.
pub fn make_batch(spec: &DatasetSpec, n: usize, rng: &mut Rng) -> Result<CouplingBatch> {
    let x0 = spec.sample_source(n, rng)?;
    let x1 = spec.sample_target(n, rng)?;
    let t: Vec<f64> = (0..n).map(|_| rng.uniform()).collect();
    CouplingBatch::from_pairs(x0, x1, &t)
}

/// A fixed, deterministic coupling (e.g. reflow pairs) sampled with replacement.
#[derive(Clone, Debug)]
pub struct PairPool {
    pub x0: Tensor,
    pub x1: Tensor,
}

impl PairPool {
    pub fn new(x0: Tensor, x1: Tensor) -> Result<Self> {
        if x0.shape() != x1.shape() || x0.rows() == 0 {
            return Err(Error::shape("pair pool", x0.shape(), x1.shape()));
        }
        Ok(Self { x0, x1 })
    }

    pub fn len(&self) -> usize {
        self.x0.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn batch(&self, n: usize, rng: &mut Rng) -> Result<CouplingBatch> {
        let idx: Vec<usize> = (0..n).map(|_| rng.below(self.len())).collect();
        let t: Vec<f64> = (0..n).map(|_| rng.uniform()).collect();
        CouplingBatch::from_pairs(self.x0.gather_rows(&idx), self.x1.gather_rows(&idx), &t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mean_of(x: &Tensor, j: usize) -> f64 {
        x.rows_iter().map(|r| r[j]).sum::<f64>() / x.rows() as f64
    }

    #[test]
    fn hexagonal_source_mean_within_clt_bound() {
        let n = 100_000;
        let x = DatasetSpec::hexagonal()
            .sample_source(n, &mut Rng::new(1, 0))
            .unwrap();
        let bound = 4.0 / (n as f64).sqrt();
        for j in 0..2 {
            assert!(mean_of(&x, j).abs() < bound, "coord {j}: {}", mean_of(&x, j));
        }
    }

    #[test]
    fn hexagonal_target_mean_is_centered() {
        let n = 100_000;
        let x = DatasetSpec::hexagonal()
            .sample_target(n, &mut Rng::new(2, 0))
            .unwrap();
        // per-coordinate std of the mixture is sqrt(r²/2 + s²)
        let sd = (36.0f64 / 2.0 + 0.35 * 0.35).sqrt();
        for j in 0..2 {
            assert!(mean_of(&x, j).abs() < 4.0 * sd / (n as f64).sqrt());
        }
    }

    #[test]
    fn eight_cluster_counts_are_balanced() {
        let n = 100_000;
        let x = DatasetSpec::eight_to_moons()
            .sample_source(n, &mut Rng::new(3, 0))
            .unwrap();
        let mut counts = [0usize; 8];
        for r in x.rows_iter() {
            let best = (0..8)
                .map(|k| {
                    let a = PI / 4.0 * k as f64;
                    let (cx, cy) = (8.0 * a.cos(), 8.0 * a.sin());
                    ((r[0] - cx).powi(2) + (r[1] - cy).powi(2), k)
                })
                .min_by(|a, b| a.0.total_cmp(&b.0))
                .unwrap()
                .1;
            counts[best] += 1;
        }
        let expect = n as f64 / 8.0;
        for c in counts {
            assert!((c as f64) > 0.9 * expect && (c as f64) < 1.1 * expect, "{counts:?}");
        }
    }

    #[test]
    fn two_moons_stay_near_their_arcs() {
        // Noise-free points reach at most sqrt(9.25) ≈ 3.04 from the origin;
        // 5σ of noise on top of that bounds all but a vanishing fraction.
        let n = 10_000;
        let x = DatasetSpec::eight_to_moons()
            .sample_target(n, &mut Rng::new(4, 0))
            .unwrap();
        let limit = 9.25f64.sqrt() + 0.5;
        let outliers = x
            .rows_iter()
            .filter(|r| (r[0] * r[0] + r[1] * r[1]).sqrt() > limit)
            .count();
        assert!(outliers as f64 <= 0.001 * n as f64, "{outliers} outliers");
    }

    #[test]
    fn same_seed_same_samples() {
        for spec in [DatasetSpec::hexagonal(), DatasetSpec::eight_to_moons()] {
            let a = spec.sample_target(64, &mut Rng::new(9, 2)).unwrap();
            let b = spec.sample_target(64, &mut Rng::new(9, 2)).unwrap();
            assert_eq!(a, b);
            let a = spec.sample_source(64, &mut Rng::new(9, 2)).unwrap();
            let b = spec.sample_source(64, &mut Rng::new(9, 2)).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn zero_count_is_rejected() {
        assert!(DatasetSpec::hexagonal()
            .sample_source(0, &mut Rng::new(0, 0))
            .is_err());
    }

    #[test]
    fn batch_interpolates_and_hits_endpoints() {
        let x0 = Tensor::from_rows(&[[0.0, 1.0], [2.0, -2.0], [1.0, 1.0]]).unwrap();
        let x1 = Tensor::from_rows(&[[4.0, -1.0], [0.0, 0.0], [3.0, 5.0]]).unwrap();
        let b = CouplingBatch::from_pairs(x0.clone(), x1.clone(), &[0.0, 1.0, 0.25]).unwrap();
        assert_eq!(b.xt.row(0), x0.row(0));
        assert_eq!(b.xt.row(1), x1.row(1));
        assert_eq!(b.xt.row(2), &[1.5, 2.0]);
        assert_eq!(b.delta.row(2), &[2.0, 4.0]);
    }

    #[test]
    fn independent_coupling_is_uncorrelated() {
        let n = 100_000;
        let b = make_batch(&DatasetSpec::hexagonal(), n, &mut Rng::new(5, 0)).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let a: Vec<f64> = b.x0.rows_iter().map(|r| r[i]).collect();
                let c: Vec<f64> = b.x1.rows_iter().map(|r| r[j]).collect();
                let (ma, mc) = (
                    a.iter().sum::<f64>() / n as f64,
                    c.iter().sum::<f64>() / n as f64,
                );
                let cov: f64 = a.iter().zip(&c).map(|(x, y)| (x - ma) * (y - mc)).sum();
                let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
                let vc: f64 = c.iter().map(|y| (y - mc).powi(2)).sum();
                assert!((cov / (va * vc).sqrt()).abs() < 0.01);
            }
        }
    }

    #[test]
    fn distinct_streams_diverge_immediately() {
        let mut a = Rng::new(42, 0);
        let mut b = Rng::new(42, 1);
        let pa: Vec<u64> = (0..16).map(|_| a.next_u64()).collect();
        let pb: Vec<u64> = (0..16).map(|_| b.next_u64()).collect();
        assert_ne!(pa, pb);
        assert_ne!(pa[0], pb[0]);
    }

    #[test]
    fn word_position_restores_the_stream() {
        let mut a = Rng::new(7, 3);
        for _ in 0..37 {
            a.normal();
        }
        let pos = a.word_pos();
        let expected: Vec<f64> = (0..5).map(|_| a.normal()).collect();
        let mut b = Rng::new(7, 3);
        b.set_word_pos(pos);
        let got: Vec<f64> = (0..5).map(|_| b.normal()).collect();
        assert_eq!(expected, got);
    }
}
