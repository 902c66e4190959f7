//! Fixed-step ODE simulation of velocity fields.

use serde::{Deserialize, Serialize};

use crate::data::{DatasetSpec, Rng};
use crate::error::{Error, Result};
use crate::nn::LatentSpec;
use crate::tensor::{Tensor, Tracer};

/// Anything that maps `(x, t, z)` to a velocity, evaluated numerically.
pub trait VelocitySource {
    fn dim(&self) -> usize;

    /// Width of the conditioning latent; 0 when the field takes none.
    fn latent_dim(&self) -> usize {
        0
    }

    /// Velocity for a batch `x (n×d)` at a shared time `t`.
    fn velocity(&self, x: &Tensor, t: f64, z: Option<&Tensor>) -> Result<Tensor>;
}

/// A field that can also be recorded with any [`Tracer`], which is what
/// Jacobian-vector products need. `t` is an `n × 1` column.
pub trait TracedField: VelocitySource {
    fn trace<T: Tracer>(
        &self,
        tr: &mut T,
        x: T::Value,
        t: T::Value,
        z: Option<T::Value>,
    ) -> Result<T::Value>;
}

/// Wraps a closure `(x_row, t) -> v_row` as a latent-free field.
pub struct FnField<F> {
    dim: usize,
    f: F,
}

impl<F: Fn(&[f64], f64) -> Vec<f64>> FnField<F> {
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f }
    }
}

impl<F: Fn(&[f64], f64) -> Vec<f64>> VelocitySource for FnField<F> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn velocity(&self, x: &Tensor, t: f64, _z: Option<&Tensor>) -> Result<Tensor> {
        let mut data = Vec::with_capacity(x.numel());
        for row in x.rows_iter() {
            let v = (self.f)(row, t);
            if v.len() != self.dim {
                return Err(Error::invalid(format!(
                    "field returned {} components, expected {}",
                    v.len(),
                    self.dim
                )));
            }
            data.extend(v);
        }
        Tensor::matrix(x.rows(), self.dim, data)
    }
}

/// Time knots `0 = t_0 < … < t_N = 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct StepSchedule {
    knots: Vec<f64>,
}

impl StepSchedule {
    pub fn new(knots: Vec<f64>) -> Result<Self> {
        if knots.len() < 2 || knots[0] != 0.0 || *knots.last().unwrap() != 1.0 {
            return Err(Error::invalid("schedule must start at 0 and end at 1"));
        }
        if knots.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::invalid("schedule knots must be strictly increasing"));
        }
        Ok(Self { knots })
    }

    /// `steps` equal intervals.
    pub fn uniform(steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::invalid("schedule needs at least one step"));
        }
        let mut knots: Vec<f64> = (0..=steps).map(|i| i as f64 / steps as f64).collect();
        knots[steps] = 1.0;
        Self::new(knots)
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    /// Number of steps, i.e. function evaluations for Euler.
    pub fn steps(&self) -> usize {
        self.knots.len() - 1
    }
}

/// Single-stage explicit Euler or two-stage explicit midpoint.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stepper {
    #[default]
    Euler,
    Midpoint,
}

/// `x + (t_next − t_i)·v`.
pub fn euler_step(x: &Tensor, v: &Tensor, t_i: f64, t_next: f64) -> Result<Tensor> {
    if t_next <= t_i {
        return Err(Error::invalid(format!("step from {t_i} to {t_next} is not forward")));
    }
    if x.shape() != v.shape() {
        return Err(Error::shape("euler_step", x.shape(), v.shape()));
    }
    let h = t_next - t_i;
    let mut out = x.clone();
    out.data_mut()
        .iter_mut()
        .zip(v.data())
        .for_each(|(a, b)| *a += h * b);
    Ok(out)
}

/// Simulated paths for a batch of initial states under one fixed latent per row.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub latent: Option<Tensor>,
    pub times: Vec<f64>,
    /// `states[i]` is the batch at `times[i]`.
    pub states: Vec<Tensor>,
}

impl Trajectory {
    pub fn nfe(&self) -> usize {
        self.times.len() - 1
    }

    pub fn batch_size(&self) -> usize {
        self.states[0].rows()
    }

    pub fn endpoint(&self) -> &Tensor {
        self.states.last().expect("trajectory has at least two states")
    }

    /// Path of row `i` through all states.
    pub fn path(&self, i: usize) -> Vec<Vec<f64>> {
        self.states.iter().map(|s| s.row(i).to_vec()).collect()
    }
}

/// Integrates `x0` over the schedule with explicit Euler. `z` stays fixed.
pub fn integrate<S: VelocitySource + ?Sized>(
    source: &S,
    x0: &Tensor,
    z: Option<&Tensor>,
    schedule: &StepSchedule,
) -> Result<Trajectory> {
    integrate_with(source, x0, z, schedule, Stepper::Euler)
}

pub fn integrate_with<S: VelocitySource + ?Sized>(
    source: &S,
    x0: &Tensor,
    z: Option<&Tensor>,
    schedule: &StepSchedule,
    stepper: Stepper,
) -> Result<Trajectory> {
    if x0.cols() != source.dim() {
        return Err(Error::shape("integrate", x0.shape(), &[x0.rows(), source.dim()]));
    }
    let knots = schedule.knots();
    let mut states = Vec::with_capacity(knots.len());
    states.push(x0.clone());
    for (i, w) in knots.windows(2).enumerate() {
        let (t0, t1) = (w[0], w[1]);
        let x = &states[i];
        let v = match stepper {
            Stepper::Euler => source.velocity(x, t0, z)?,
            Stepper::Midpoint => {
                let v0 = source.velocity(x, t0, z)?;
                let mid = euler_step(x, &v0, t0, 0.5 * (t0 + t1))?;
                source.velocity(&mid, 0.5 * (t0 + t1), z)?
            }
        };
        let next = euler_step(x, &v, t0, t1)?;
        if !next.is_finite() {
            return Err(Error::NonFiniteState { step: i + 1 });
        }
        states.push(next);
    }
    Ok(Trajectory {
        latent: z.cloned(),
        times: knots.to_vec(),
        states,
    })
}

/// Draws `x0` from the dataset source and, when the field is latent-
/// conditioned, `z ~ N(0, I)`; then integrates. Draw order: sources, latents.
pub fn sample<S: VelocitySource + ?Sized>(
    field: &S,
    n: usize,
    latent: Option<&LatentSpec>,
    dataset: &DatasetSpec,
    schedule: &StepSchedule,
    rng: &mut Rng,
) -> Result<Trajectory> {
    let x0 = dataset.sample_source(n, rng)?;
    let z = match latent {
        Some(spec) => Some(spec.sample_prior(n, rng)?),
        None if field.latent_dim() > 0 => {
            return Err(Error::invalid("latent-conditioned field needs a latent spec"))
        }
        None => None,
    };
    integrate(field, &x0, z.as_ref(), schedule)
}
