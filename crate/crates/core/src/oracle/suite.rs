//! Named batteries of analytic checks with pass/fail verdicts.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::Serialize;

use super::{
    check_marginal_preservation, check_transport_cost, material_derivative_norm, v_functional, GmmSpec,
};
use crate::data::{DatasetSpec, Rng};
use crate::dynamics::{integrate, StepSchedule, TracedField, VelocitySource};
use crate::error::{Error, Result};
use crate::tensor::{Tensor, Tracer};

/// Sample size at which the base tolerances apply.
pub const REFERENCE_N: usize = 100_000;
/// Euler steps used to push the analytic fields.
pub const ORACLE_STEPS: usize = 200;
/// Points per side entering a multivariate energy distance.
pub const MAX_ENERGY_POINTS: usize = 5_000;
pub const PROBES: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];
pub const MARGINAL_TOL: f64 = 0.02;
pub const GAUSS_COST_Z_TOL: f64 = 0.01;
pub const GAUSS_COST_X_TOL: f64 = 0.05;
pub const SE_MULTIPLIER: f64 = 3.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    Marginal,
    Cost,
    Material,
    VFunctional,
    All,
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "marginal" => Ok(Suite::Marginal),
            "cost" => Ok(Suite::Cost),
            "material" => Ok(Suite::Material),
            "v-functional" => Ok(Suite::VFunctional),
            "all" => Ok(Suite::All),
            other => Err(Error::Config(format!(
                "unknown suite {other:?} (expected marginal, cost, material, v-functional or all)"
            ))),
        }
    }
}

impl Suite {
    pub fn name(self) -> &'static str {
        match self {
            Suite::Marginal => "marginal",
            Suite::Cost => "cost",
            Suite::Material => "material",
            Suite::VFunctional => "v-functional",
            Suite::All => "all",
        }
    }
}

/// One assertion: passes iff `statistic <= threshold`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckResult {
    pub suite: &'static str,
    pub name: String,
    pub statistic: f64,
    pub threshold: f64,
    pub passed: bool,
}

impl CheckResult {
    fn new(suite: &'static str, name: impl Into<String>, statistic: f64, threshold: f64) -> Self {
        Self {
            suite,
            name: name.into(),
            statistic,
            threshold,
            passed: statistic.is_finite() && statistic <= threshold,
        }
    }
}

/// Multiplier on every base tolerance: the user's scale, widened as `1/√n`
/// below the reference sample size.
pub fn tolerance_factor(n: usize, tolerance_scale: f64) -> f64 {
    tolerance_scale * (REFERENCE_N as f64 / n.max(1) as f64).sqrt().max(1.0)
}

pub fn run_suite(suite: Suite, n: usize, seed: u64, tolerance_scale: f64) -> Result<Vec<CheckResult>> {
    if n < 2 {
        return Err(Error::Config(format!("oracle checks need n ≥ 2, got {n}")));
    }
    if !(tolerance_scale > 0.0 && tolerance_scale.is_finite()) {
        return Err(Error::Config(format!("tolerance scale must be positive, got {tolerance_scale}")));
    }
    let f = tolerance_factor(n, tolerance_scale);
    match suite {
        Suite::Marginal => marginal(n, seed, f),
        Suite::Cost => cost(n, seed, f),
        Suite::Material => material(seed, f),
        Suite::VFunctional => v_checks(seed),
        Suite::All => {
            let mut out = marginal(n, seed, f)?;
            out.extend(cost(n, seed, f)?);
            out.extend(material(seed, f)?);
            out.extend(v_checks(seed)?);
            Ok(out)
        }
    }
}

fn gmm_of(spec: DatasetSpec) -> GmmSpec {
    spec.gmm().expect("dataset has a mixture target")
}

fn marginal(n: usize, seed: u64, f: f64) -> Result<Vec<CheckResult>> {
    let schedule = StepSchedule::uniform(ORACLE_STEPS)?;
    let cases = [
        ("gauss_to_gauss", gmm_of(DatasetSpec::gauss_to_gauss(1))),
        ("gmm_1d", gmm_of(DatasetSpec::gmm_1d())),
        ("hexagonal", gmm_of(DatasetSpec::hexagonal())),
    ];
    let mut out = Vec::new();
    for (stream, (label, spec)) in cases.iter().enumerate() {
        let mut rng = Rng::new(seed, 100 + stream as u64);
        let dists = check_marginal_preservation(spec, n, &PROBES, &schedule, &mut rng, MAX_ENERGY_POINTS)?;
        for (t, d) in dists {
            out.push(CheckResult::new(
                "marginal",
                format!("{label} energy(X_t, Z_t) t={t}"),
                d,
                MARGINAL_TOL * f,
            ));
        }
    }
    Ok(out)
}

fn cost(n: usize, seed: u64, f: f64) -> Result<Vec<CheckResult>> {
    let schedule = StepSchedule::uniform(ORACLE_STEPS)?;
    let mut out = Vec::new();

    let gauss = gmm_of(DatasetSpec::gauss_to_gauss(1));
    let c = check_transport_cost(&gauss, n, &schedule, &mut Rng::new(seed, 200))?;
    out.push(CheckResult::new("cost", "gauss_to_gauss cost_z", c.cost_z, GAUSS_COST_Z_TOL * f));
    out.push(CheckResult::new(
        "cost",
        "gauss_to_gauss |cost_x − 2|",
        (c.cost_x - 2.0).abs(),
        GAUSS_COST_X_TOL * f,
    ));
    out.push(CheckResult::new(
        "cost",
        "gauss_to_gauss cost_z − cost_x",
        c.cost_z - c.cost_x,
        SE_MULTIPLIER * c.se_diff() * f,
    ));

    // a single destination leaves nothing to uncross
    let dirac = GmmSpec::new(vec![1.0], vec![vec![2.0, -1.0]], vec![1e-9])?;
    let c = check_transport_cost(&dirac, n, &schedule, &mut Rng::new(seed, 201))?;
    out.push(CheckResult::new(
        "cost",
        "dirac |cost_z − cost_x| / cost_x",
        (c.cost_z - c.cost_x).abs() / c.cost_x,
        1e-6,
    ));
    out.push(CheckResult::new(
        "cost",
        "dirac |cost_x − (‖m‖² + d)|",
        (c.cost_x - 7.0).abs(),
        SE_MULTIPLIER * c.se_x * f,
    ));

    for (stream, (label, spec)) in [
        ("gmm_1d", gmm_of(DatasetSpec::gmm_1d())),
        ("hexagonal", gmm_of(DatasetSpec::hexagonal())),
    ]
    .into_iter()
    .enumerate()
    {
        let c = check_transport_cost(&spec, n, &schedule, &mut Rng::new(seed, 202 + stream as u64))?;
        out.push(CheckResult::new(
            "cost",
            format!("{label} cost_z − cost_x"),
            c.cost_z - c.cost_x,
            SE_MULTIPLIER * c.se_diff() * f,
        ));
    }
    Ok(out)
}

/// `v ≡ c`, traced as a constant so every partial is structurally zero.
struct ConstantField(Vec<f64>);

impl VelocitySource for ConstantField {
    fn dim(&self) -> usize {
        self.0.len()
    }

    fn velocity(&self, x: &Tensor, _: f64, _: Option<&Tensor>) -> Result<Tensor> {
        Tensor::matrix(x.rows(), self.0.len(), self.0.repeat(x.rows()))
    }
}

impl TracedField for ConstantField {
    fn trace<T: Tracer>(&self, tr: &mut T, x: T::Value, _: T::Value, _: Option<T::Value>) -> Result<T::Value> {
        let n = tr.value(x).rows();
        tr.constant(Tensor::matrix(n, self.0.len(), self.0.repeat(n))?)
    }
}

/// `v(x, t) = x`, whose material derivative is `x` itself.
struct LinearField(usize);

impl VelocitySource for LinearField {
    fn dim(&self) -> usize {
        self.0
    }

    fn velocity(&self, x: &Tensor, _: f64, _: Option<&Tensor>) -> Result<Tensor> {
        Ok(x.clone())
    }
}

impl TracedField for LinearField {
    fn trace<T: Tracer>(&self, _: &mut T, x: T::Value, _: T::Value, _: Option<T::Value>) -> Result<T::Value> {
        Ok(x)
    }
}

fn material(seed: u64, f: f64) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    let mut rng = Rng::new(seed, 300);
    let x0 = rng.normal_tensor(256, 2);
    let schedule = StepSchedule::uniform(20)?;

    let constant = ConstantField(vec![1.5, -0.75]);
    let traj = integrate(&constant, &x0, None, &schedule)?;
    let worst = material_derivative_norm(&constant, &traj)?
        .into_iter()
        .flatten()
        .fold(0.0, f64::max);
    out.push(CheckResult::new("material", "constant field max ‖D_t v‖", worst, 0.0));

    let dirac = GmmSpec::new(vec![1.0], vec![vec![3.0, -1.0]], vec![1e-9])?;
    let traj = integrate(&dirac, &x0, None, &schedule)?;
    let worst = material_derivative_norm(&dirac, &traj)?
        .into_iter()
        .flatten()
        .fold(0.0, f64::max);
    out.push(CheckResult::new("material", "dirac target max ‖D_t v‖", worst, 1e-9 * f));

    let linear = LinearField(2);
    let traj = integrate(&linear, &x0, None, &StepSchedule::uniform(5)?)?;
    let norms = material_derivative_norm(&linear, &traj)?;
    let mut err: f64 = 0.0;
    for (state, row_norms) in traj.states.iter().zip(&norms) {
        for (x, &got) in state.rows_iter().zip(row_norms) {
            let want = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            err = err.max((got - want).abs() / want.max(1e-300));
        }
    }
    out.push(CheckResult::new("material", "linear field rel. err of ‖D_t v‖ vs ‖x‖", err, 1e-12));
    Ok(out)
}

/// Direct evaluation from the definition: for every point, the cell mates
/// are found by pairwise comparison of cell indices and the deviation from
/// their mean Δ is accumulated.
pub fn enumerate_v_functional(x0: &[Vec<f64>], x1: &[Vec<f64>], t_grid: &[f64], h: f64) -> f64 {
    let n = x0.len();
    let d = x0[0].len();
    let mut total = 0.0;
    for &t in t_grid {
        let pos: Vec<Vec<f64>> = x0
            .iter()
            .zip(x1)
            .map(|(a, b)| a.iter().zip(b).map(|(p, q)| (1.0 - t) * p + t * q).collect())
            .collect();
        let lo: Vec<f64> = (0..d)
            .map(|j| pos.iter().map(|p| p[j]).fold(f64::INFINITY, f64::min))
            .collect();
        let cell: Vec<Vec<i64>> = pos
            .iter()
            .map(|p| p.iter().zip(&lo).map(|(v, l)| ((v - l) / h).floor() as i64).collect())
            .collect();
        let mut sum = 0.0;
        for i in 0..n {
            let mates: Vec<usize> = (0..n).filter(|&j| cell[j] == cell[i]).collect();
            if mates.len() < 2 {
                continue;
            }
            for k in 0..d {
                let mean = mates.iter().map(|&j| x1[j][k] - x0[j][k]).sum::<f64>() / mates.len() as f64;
                sum += (x1[i][k] - x0[i][k] - mean).powi(2);
            }
        }
        total += sum / n as f64;
    }
    total / t_grid.len() as f64
}

fn to_tensor(rows: &[Vec<f64>]) -> Result<Tensor> {
    Tensor::from_rows(rows)
}

fn v_checks(seed: u64) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    let grid = [0.25, 0.5, 0.75];

    let a0 = vec![vec![-1.0], vec![1.0]];
    let a1 = vec![vec![1.0], vec![-1.0]];
    let got = v_functional(&to_tensor(&a0)?, &to_tensor(&a1)?, &grid, 0.1)?;
    out.push(CheckResult::new("v-functional", "crossing pair |V − 4/3|", (got - 4.0 / 3.0).abs(), 1e-12));

    let f0 = vec![vec![0.0], vec![0.0]];
    let f1 = vec![vec![-1.0], vec![1.0]];
    let got = v_functional(&to_tensor(&f0)?, &to_tensor(&f1)?, &grid, 0.1)?;
    out.push(CheckResult::new("v-functional", "fan from an atom V", got, 1e-12));

    let c0 = vec![vec![-2.0], vec![0.5], vec![1.0], vec![4.0]];
    let c1: Vec<Vec<f64>> = c0.iter().map(|r| vec![r[0] + 3.0]).collect();
    let got = v_functional(&to_tensor(&c0)?, &to_tensor(&c1)?, &grid, 0.1)?;
    out.push(CheckResult::new("v-functional", "translation coupling V", got, 1e-12));

    // random atomic couplings on a coarse lattice, so co-binning happens
    let mut rng = Rng::new(seed, 400);
    let mut worst: f64 = 0.0;
    for case in 0..200 {
        let n = 2 + case % 7;
        let d = 1 + case % 2;
        let atom = |rng: &mut Rng| (rng.below(5) as f64 - 2.0) * 0.5;
        let x0: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| atom(&mut rng)).collect()).collect();
        let x1: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| atom(&mut rng)).collect()).collect();
        let h = [0.1, 0.3, 0.7][case % 3];
        let grid = [0.2, 0.4, 0.5, 0.6, 0.8];
        let got = v_functional(&to_tensor(&x0)?, &to_tensor(&x1)?, &grid, h)?;
        let want = enumerate_v_functional(&x0, &x1, &grid, h);
        worst = worst.max((got - want).abs());
    }
    out.push(CheckResult::new("v-functional", "≤8 random atomic pairs |V − enumeration|", worst, 1e-12));
    Ok(out)
}

/// Fixed-width report, one line per check.
pub fn format_table(results: &[CheckResult]) -> String {
    let width = results.iter().map(|r| r.name.len()).max().unwrap_or(4).max(4);
    let mut s = String::new();
    let _ = writeln!(s, "{:<13} {:<width$} {:>14} {:>14}  result", "suite", "check", "statistic", "threshold");
    for r in results {
        let _ = writeln!(
            s,
            "{:<13} {:<width$} {:>14.6e} {:>14.6e}  {}",
            r.suite,
            r.name,
            r.statistic,
            r.threshold,
            if r.passed { "PASS" } else { "FAIL" }
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_names_round_trip() {
        for s in ["marginal", "cost", "material", "v-functional", "all"] {
            assert_eq!(s.parse::<Suite>().unwrap().name(), s);
        }
        assert!(matches!("nope".parse::<Suite>(), Err(Error::Config(_))));
    }

    #[test]
    fn tolerance_widens_below_reference_size() {
        assert_eq!(tolerance_factor(REFERENCE_N, 1.0), 1.0);
        assert_eq!(tolerance_factor(1_000_000, 1.0), 1.0);
        assert!((tolerance_factor(1_000, 2.0) - 20.0).abs() < 1e-12);
    }

    #[test]
    fn enumeration_reproduces_crossing_value() {
        let v = enumerate_v_functional(
            &[vec![-1.0], vec![1.0]],
            &[vec![1.0], vec![-1.0]],
            &[0.25, 0.5, 0.75],
            0.1,
        );
        assert!((v - 4.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn cheap_suites_pass() {
        for r in run_suite(Suite::VFunctional, 100, 1, 1.0).unwrap() {
            assert!(r.passed, "{r:?}");
        }
        for r in run_suite(Suite::Material, 100, 1, 1.0).unwrap() {
            assert!(r.passed, "{r:?}");
        }
    }

    #[test]
    fn table_has_one_line_per_check() {
        let rows = run_suite(Suite::VFunctional, 100, 1, 1.0).unwrap();
        assert_eq!(format_table(&rows).lines().count(), rows.len() + 1);
    }
}
