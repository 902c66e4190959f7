//! Optimization loop for the four training modes.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::data::{make_batch, CouplingBatch, DatasetSpec, PairPool, Rng};
use crate::dynamics::{integrate, sample, StepSchedule, Trajectory};
use crate::error::{Error, Result};
use crate::metrics::{endpoint_consistency, energy_distance_points, model_v_estimate, StraightnessSummary};
use crate::nn::{FlowModel, NetConfig};
use crate::objectives::{total_loss, LossBreakdown, LossWeights};
use crate::oracle::interior_grid;
use crate::tensor::{Graph, Tensor};

/// RNG streams derived from the run seed.
pub const STREAM_BATCHES: u64 = 0;
pub const STREAM_INIT: u64 = 1;
pub const STREAM_EVAL: u64 = 2;
pub const STREAM_REFLOW: u64 = 3;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Fm,
    Vfm,
    #[default]
    Svfm,
    Reflow,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Fm => "fm",
            Mode::Vfm => "vfm",
            Mode::Svfm => "svfm",
            Mode::Reflow => "reflow",
        }
    }

    pub fn is_variational(self) -> bool {
        matches!(self, Mode::Vfm | Mode::Svfm)
    }
}

fn d_alpha() -> f64 {
    10.0
}
fn d_beta() -> f64 {
    1e-2
}
fn d_batch() -> usize {
    512
}
fn d_steps() -> u64 {
    50_000
}
fn d_lr() -> f64 {
    1e-3
}
fn d_betas() -> [f64; 2] {
    [0.9, 0.999]
}
fn d_adam_eps() -> f64 {
    1e-8
}
fn d_eval_every() -> u64 {
    1000
}
fn d_grad_limit() -> f64 {
    1e6
}

/// Optimization settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainParams {
    #[serde(default)]
    pub mode: Mode,
    #[serde(default = "d_alpha")]
    pub alpha: f64,
    #[serde(default = "d_beta")]
    pub beta: f64,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_steps")]
    pub steps: u64,
    #[serde(default = "d_lr")]
    pub learning_rate: f64,
    #[serde(default = "d_betas")]
    pub adam_betas: [f64; 2],
    #[serde(default = "d_adam_eps")]
    pub adam_eps: f64,
    #[serde(default)]
    pub seed: u64,
    /// 0 records only at the last step.
    #[serde(default = "d_eval_every")]
    pub eval_every: u64,
    /// Linear ramp of α over this many steps; 0 keeps α constant.
    #[serde(default)]
    pub alpha_warmup_steps: u64,
    /// Gradient norm above which a step counts as divergent.
    #[serde(default = "d_grad_limit")]
    pub grad_norm_limit: f64,
}

impl Default for TrainParams {
    fn default() -> Self {
        toml::from_str("").expect("all fields have defaults")
    }
}

fn d_probe_n() -> usize {
    256
}
fn d_energy_n() -> usize {
    1000
}
fn d_v_n() -> usize {
    2000
}
fn d_v_groups() -> usize {
    4
}
fn d_v_grid() -> usize {
    9
}
fn d_nfe_hi() -> usize {
    100
}

/// What gets measured at each record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Trajectories for straightness and endpoint consistency.
    #[serde(default = "d_probe_n")]
    pub probe_n: usize,
    #[serde(default = "d_energy_n")]
    pub energy_n: usize,
    /// Pairs per latent group in the non-intersection estimate.
    #[serde(default = "d_v_n")]
    pub v_n: usize,
    #[serde(default = "d_v_groups")]
    pub v_groups: usize,
    /// Interior grid size for the non-intersection estimate.
    #[serde(default = "d_v_grid")]
    pub v_grid: usize,
    /// Bin width; default is a tenth of the target scale.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bin_width: Option<f64>,
    /// The many-step reference count.
    #[serde(default = "d_nfe_hi")]
    pub nfe_hi: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        toml::from_str("").expect("all fields have defaults")
    }
}

fn d_reflow_pairs() -> usize {
    20_000
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReflowConfig {
    /// Steps used to push sources through the base model.
    #[serde(default = "d_nfe_hi")]
    pub nfe: usize,
    #[serde(default = "d_reflow_pairs")]
    pub pairs: usize,
}

impl Default for ReflowConfig {
    fn default() -> Self {
        toml::from_str("").expect("all fields have defaults")
    }
}

/// Everything one training run needs.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default)]
    pub train: TrainParams,
    #[serde(default)]
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub net: NetConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub reflow: ReflowConfig,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let t = &self.train;
        if t.steps == 0 {
            return Err(Error::Config("train.steps must be ≥ 1".into()));
        }
        if t.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be ≥ 1".into()));
        }
        if !(t.learning_rate >= 0.0 && t.learning_rate.is_finite()) {
            return Err(Error::Config(format!("train.learning_rate must be ≥ 0, got {}", t.learning_rate)));
        }
        if t.adam_betas.iter().any(|b| !(0.0..1.0).contains(b)) || !(t.adam_eps > 0.0) {
            return Err(Error::Config("adam betas must lie in [0, 1) and adam_eps be positive".into()));
        }
        if !(t.grad_norm_limit > 0.0) {
            return Err(Error::Config("train.grad_norm_limit must be positive".into()));
        }
        LossWeights::new(t.alpha, t.beta)?;
        self.dataset.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.net.validate()?;
        let e = &self.eval;
        if e.probe_n == 0 || e.energy_n == 0 || e.v_n < 2 || e.v_groups == 0 || e.v_grid == 0 || e.nfe_hi == 0 {
            return Err(Error::Config("eval sizes must be positive (v_n ≥ 2)".into()));
        }
        if matches!(e.bin_width, Some(h) if !(h > 0.0)) {
            return Err(Error::Config("eval.bin_width must be positive".into()));
        }
        if self.reflow.nfe == 0 || self.reflow.pairs == 0 {
            return Err(Error::Config("reflow.nfe and reflow.pairs must be ≥ 1".into()));
        }
        Ok(())
    }

    /// Weights after the mode's forcing: α = 0 outside svfm, β = 0 for fm
    /// and reflow.
    pub fn weights(&self) -> LossWeights {
        let mode = self.train.mode;
        LossWeights {
            alpha: if mode == Mode::Svfm { self.train.alpha } else { 0.0 },
            beta: if mode.is_variational() { self.train.beta } else { 0.0 },
        }
    }

    /// α in effect at `step` (0-based), after warmup.
    pub fn alpha_at(&self, step: u64) -> f64 {
        let alpha = self.weights().alpha;
        match self.train.alpha_warmup_steps {
            0 => alpha,
            w => alpha * ((step + 1) as f64 / w as f64).min(1.0),
        }
    }

    /// Same run in another mode.
    pub fn with_mode(&self, mode: Mode) -> Self {
        let mut c = self.clone();
        c.train.mode = mode;
        c
    }
}

/// Adam moments keyed by parameter name.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Number of updates applied.
    pub t: u64,
    pub m: IndexMap<String, Vec<f64>>,
    pub v: IndexMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(model: &FlowModel, betas: [f64; 2], eps: f64) -> Self {
        let mut m = IndexMap::new();
        for store in model.stores() {
            for (name, e) in store.iter() {
                m.insert(name.to_string(), vec![0.0; e.value.numel()]);
            }
        }
        Self {
            beta1: betas[0],
            beta2: betas[1],
            eps,
            t: 0,
            v: m.clone(),
            m,
        }
    }

    /// One update from the gradients held in the model's stores.
    pub fn step(&mut self, model: &mut FlowModel, lr: f64) -> Result<()> {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powf(self.t as f64);
        let c2 = 1.0 - self.beta2.powf(self.t as f64);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        for store in model.stores_mut() {
            for (name, e) in store.iter_mut() {
                let (Some(m), Some(v)) = (self.m.get_mut(name), self.v.get_mut(name)) else {
                    return Err(Error::invalid(format!("optimizer has no state for {name}")));
                };
                let grad = e.grad.data().to_vec();
                for (((p, g), m), v) in e.value.data_mut().iter_mut().zip(&grad).zip(m).zip(v) {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                }
            }
        }
        Ok(())
    }
}

/// Mutable state of a run.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub step: u64,
    pub model: FlowModel,
    pub adam: Adam,
    pub rng: Rng,
    window: LossBreakdown,
    window_len: u64,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut init = Rng::new(cfg.train.seed, STREAM_INIT);
        let model = FlowModel::new(cfg.dataset.dim(), &cfg.net, cfg.train.mode.is_variational(), &mut init)?;
        Ok(Self::from_parts(cfg, model, 0, Rng::new(cfg.train.seed, STREAM_BATCHES), None))
    }

    pub fn from_parts(cfg: &TrainConfig, model: FlowModel, step: u64, rng: Rng, adam: Option<Adam>) -> Self {
        let adam = adam.unwrap_or_else(|| Adam::new(&model, cfg.train.adam_betas, cfg.train.adam_eps));
        Self {
            step,
            model,
            adam,
            rng,
            window: LossBreakdown::default(),
            window_len: 0,
        }
    }

    /// Mean of each loss component since the last record.
    fn take_window(&mut self) -> LossBreakdown {
        let n = self.window_len.max(1) as f64;
        let w = std::mem::take(&mut self.window);
        self.window_len = 0;
        LossBreakdown {
            total: w.total / n,
            vfm: w.vfm / n,
            fm: w.fm / n,
            kl: w.kl / n,
            straightness: w.straightness / n,
        }
    }
}

/// Where training pairs come from.
#[derive(Clone, Debug)]
pub enum BatchSource {
    Independent(DatasetSpec),
    Pool(PairPool),
}

impl BatchSource {
    pub fn draw(&self, n: usize, rng: &mut Rng) -> Result<CouplingBatch> {
        match self {
            BatchSource::Independent(spec) => make_batch(spec, n, rng),
            BatchSource::Pool(pool) => pool.batch(n, rng),
        }
    }
}

/// Draws a batch and, for a variational model, its posterior noise.
pub fn next_batch(state: &mut TrainState, cfg: &TrainConfig, source: &BatchSource) -> Result<(CouplingBatch, Option<Tensor>)> {
    let batch = source.draw(cfg.train.batch_size, &mut state.rng)?;
    let eps = state
        .model
        .encoder
        .as_ref()
        .map(|e| state.rng.normal_tensor(batch.len(), e.latent_dim()));
    Ok((batch, eps))
}

fn diverged(step: u64, e: Error) -> Error {
    match e {
        Error::NonFinite { op } => Error::Divergence {
            step,
            reason: format!("non-finite value in {op}"),
        },
        other => other,
    }
}

/// Loss, backward pass and one Adam update.
pub fn train_step(
    state: &mut TrainState,
    cfg: &TrainConfig,
    batch: &CouplingBatch,
    eps: Option<&Tensor>,
) -> Result<LossBreakdown> {
    let step = state.step + 1;
    let weights = LossWeights {
        alpha: cfg.alpha_at(state.step),
        beta: cfg.weights().beta,
    };
    let mut g = Graph::new();
    let vars = total_loss(&mut g, &state.model, batch, eps, weights).map_err(|e| diverged(step, e))?;
    let losses = vars.breakdown(&g);
    if !losses.total.is_finite() {
        return Err(Error::Divergence {
            step,
            reason: "non-finite loss".into(),
        });
    }
    state.model.zero_grads();
    let grads = g.backward(vars.total).map_err(|e| diverged(step, e))?;
    for store in state.model.stores_mut() {
        g.accumulate(&grads, store);
    }
    let norm = state.model.grad_sq_norm().sqrt();
    if !(norm <= cfg.train.grad_norm_limit) {
        return Err(Error::Divergence {
            step,
            reason: format!("gradient norm {norm:e} exceeds {:e}", cfg.train.grad_norm_limit),
        });
    }
    state.adam.step(&mut state.model, cfg.train.learning_rate)?;
    state.step = step;
    let w = &mut state.window;
    w.total += losses.total;
    w.vfm += losses.vfm;
    w.fm += losses.fm;
    w.kl += losses.kl;
    w.straightness += losses.straightness;
    state.window_len += 1;
    Ok(losses)
}

/// Model quality at one point of training.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalMetrics {
    pub straightness_median: f64,
    pub straightness_p90: f64,
    /// Mean `‖x(NFE=1) − x(NFE=hi)‖` over the target scale.
    pub consistency: f64,
    pub model_v: f64,
    pub energy_nfe1: f64,
    pub energy_nfe_hi: f64,
}

/// One JSONL line.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub mode: &'static str,
    pub phase: &'static str,
    pub loss: LossBreakdown,
    #[serde(flatten)]
    pub eval: EvalMetrics,
}

/// Integrates `n` fresh sources (and prior latents) with `nfe` uniform steps.
pub fn sample_model(model: &FlowModel, dataset: &DatasetSpec, n: usize, nfe: usize, rng: &mut Rng) -> Result<Trajectory> {
    sample(
        &model.field,
        n,
        model.latent().as_ref(),
        dataset,
        &StepSchedule::uniform(nfe)?,
        rng,
    )
}

/// Energy distance between `n` model samples at `nfe` and `n` target draws.
pub fn energy_to_target(model: &FlowModel, dataset: &DatasetSpec, n: usize, nfe: usize, rng: &mut Rng) -> Result<f64> {
    let samples = sample_model(model, dataset, n, nfe, rng)?;
    let target = dataset.sample_target(n, rng)?;
    energy_distance_points(samples.endpoint(), &target)
}

/// Energy distance to the target at one step count, over paired replicates.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EnergyPoint {
    pub nfe: usize,
    pub mean: f64,
    pub se: f64,
    pub values: Vec<f64>,
}

/// Energy distance at each of `nfes`. Every replicate draws one set of
/// sources, latents and targets and reuses it for all step counts, so
/// differences between step counts are paired.
pub fn energy_profile(
    model: &FlowModel,
    dataset: &DatasetSpec,
    nfes: &[usize],
    n: usize,
    replicates: usize,
    rng: &mut Rng,
) -> Result<Vec<EnergyPoint>> {
    if replicates < 2 {
        return Err(Error::invalid("energy_profile needs at least two replicates"));
    }
    let latent = model.latent();
    let mut values = vec![Vec::with_capacity(replicates); nfes.len()];
    for _ in 0..replicates {
        let x0 = dataset.sample_source(n, rng)?;
        let z = latent.map(|l| l.sample_prior(n, rng)).transpose()?;
        let target = dataset.sample_target(n, rng)?;
        for (k, &nfe) in nfes.iter().enumerate() {
            let traj = integrate(&model.field, &x0, z.as_ref(), &StepSchedule::uniform(nfe)?)?;
            values[k].push(energy_distance_points(traj.endpoint(), &target)?);
        }
    }
    Ok(nfes
        .iter()
        .zip(values)
        .map(|(&nfe, v)| {
            let (mean, se) = mean_se(&v);
            EnergyPoint { nfe, mean, se, values: v }
        })
        .collect())
}

/// Mean and standard error of the mean.
pub fn mean_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, (var / n).sqrt())
}

/// Standard error of the mean paired difference `b − a`.
pub fn paired_se(a: &EnergyPoint, b: &EnergyPoint) -> f64 {
    let d: Vec<f64> = a.values.iter().zip(&b.values).map(|(x, y)| y - x).collect();
    mean_se(&d).1
}

/// Bin width used by the non-intersection estimate.
pub fn bin_width(cfg: &TrainConfig) -> f64 {
    cfg.eval.bin_width.unwrap_or_else(|| 0.1 * cfg.dataset.target_scale())
}

/// All model metrics, drawn from a fresh evaluation stream so records are
/// comparable across steps and runs.
pub fn evaluate(model: &FlowModel, cfg: &TrainConfig, h: f64) -> Result<EvalMetrics> {
    let e = &cfg.eval;
    let mut rng = Rng::new(cfg.train.seed, STREAM_EVAL);
    let data = &cfg.dataset;
    let latent = model.latent();

    let x0 = data.sample_source(e.probe_n, &mut rng)?;
    let z = latent.map(|l| l.sample_prior(e.probe_n, &mut rng)).transpose()?;
    let traj = integrate(&model.field, &x0, z.as_ref(), &StepSchedule::uniform(e.nfe_hi)?)?;
    let straight = StraightnessSummary::from_trajectory(&traj);
    let consistency = endpoint_consistency(&model.field, &x0, z.as_ref(), &[1, e.nfe_hi], data.target_scale())?
        .discrepancy[0][1];

    let grid = interior_grid(e.v_grid);
    let model_v = model_v_estimate(&model.field, latent.as_ref(), data, e.v_n, e.v_groups, &grid, h, e.nfe_hi, &mut rng)?;

    let energy_nfe1 = energy_to_target(model, data, e.energy_n, 1, &mut rng)?;
    let energy_nfe_hi = energy_to_target(model, data, e.energy_n, e.nfe_hi, &mut rng)?;
    Ok(EvalMetrics {
        straightness_median: straight.median,
        straightness_p90: straight.p90,
        consistency,
        model_v,
        energy_nfe1,
        energy_nfe_hi,
    })
}

/// Steps `state` up to `cfg.train.steps`, recording metrics every
/// `eval_every` steps and at the end. Each record reaches `observer` as soon
/// as it is made, so a failing run keeps its partial history.
pub fn train_loop(
    state: &mut TrainState,
    cfg: &TrainConfig,
    source: &BatchSource,
    phase: &'static str,
    observer: &mut dyn FnMut(&MetricsRecord) -> Result<()>,
) -> Result<Vec<MetricsRecord>> {
    let h = bin_width(cfg);
    let mut history = Vec::new();
    while state.step < cfg.train.steps {
        let (batch, eps) = next_batch(state, cfg, source)?;
        train_step(state, cfg, &batch, eps.as_ref())?;
        let every = cfg.train.eval_every;
        if (every > 0 && state.step % every == 0) || state.step == cfg.train.steps {
            let record = MetricsRecord {
                step: state.step,
                mode: cfg.train.mode.name(),
                phase,
                loss: state.take_window(),
                eval: evaluate(&state.model, cfg, h)?,
            };
            observer(&record)?;
            history.push(record);
        }
    }
    Ok(history)
}

/// Result of a full run; for reflow, `base` is the first-round model.
#[derive(Debug)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub base: Option<FlowModel>,
    pub history: Vec<MetricsRecord>,
}

/// Runs the configured mode from scratch. Reflow first trains an fm base
/// with the same settings.
pub fn run_training(cfg: &TrainConfig, observer: &mut dyn FnMut(&MetricsRecord) -> Result<()>) -> Result<TrainOutcome> {
    cfg.validate()?;
    match cfg.train.mode {
        Mode::Reflow => {
            let base_cfg = cfg.with_mode(Mode::Fm);
            let mut base = TrainState::new(&base_cfg)?;
            let mut history = train_loop(
                &mut base,
                &base_cfg,
                &BatchSource::Independent(cfg.dataset.clone()),
                "base",
                observer,
            )?;
            let mut out = reflow_round(cfg, &base.model, observer)?;
            history.append(&mut out.history);
            out.history = history;
            Ok(out)
        }
        _ => {
            let mut state = TrainState::new(cfg)?;
            let history = train_loop(
                &mut state,
                cfg,
                &BatchSource::Independent(cfg.dataset.clone()),
                "train",
                observer,
            )?;
            Ok(TrainOutcome {
                state,
                base: None,
                history,
            })
        }
    }
}

/// `(X0, X̂1)` with `X̂1` the base model's endpoint after `reflow.nfe` steps.
pub fn reflow_pairs(cfg: &TrainConfig, base: &FlowModel) -> Result<PairPool> {
    if base.encoder.is_some() {
        return Err(Error::invalid("reflow needs a base model trained in fm mode"));
    }
    let mut rng = Rng::new(cfg.train.seed, STREAM_REFLOW);
    let x0 = cfg.dataset.sample_source(cfg.reflow.pairs, &mut rng)?;
    let traj = integrate(&base.field, &x0, None, &StepSchedule::uniform(cfg.reflow.nfe)?)?;
    PairPool::new(x0, traj.endpoint().clone())
}

/// Trains a fresh fm model on the base model's deterministic coupling.
pub fn reflow_round(
    cfg: &TrainConfig,
    base: &FlowModel,
    observer: &mut dyn FnMut(&MetricsRecord) -> Result<()>,
) -> Result<TrainOutcome> {
    let pool = reflow_pairs(cfg, base)?;
    let mut state = TrainState::new(&cfg.with_mode(Mode::Fm))?;
    let history = train_loop(&mut state, cfg, &BatchSource::Pool(pool), "reflow", observer)?;
    Ok(TrainOutcome {
        state,
        base: Some(base.clone()),
        history,
    })
}
