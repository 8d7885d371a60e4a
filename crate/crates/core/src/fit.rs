//! End-to-end fitting: initialization, epoch 1 with `τ` tuning, then the
//! remaining epochs with `τ` frozen.

use std::collections::BTreeMap;
use std::str::FromStr;

use crate::basis::SplineSpace;
use crate::error::{FpcaError, Result};
use crate::model::{batch_init, grads_batch, ModelParams, Problem, Subject};
use crate::optim::{AdamConfig, AdamState, AvgState, ChainOptimizer, OptimizerState, StepSchedule};
use crate::scalar::Scalar;
use crate::stream::{center_subjects, epoch_batches, BatchPlan, CenterMode};
use crate::tuning::{Beam, BeamConfig, Candidate, StepRecord, TuningRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Rsgd,
    Radam,
}

impl OptimizerKind {
    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::Rsgd => "rsgd",
            OptimizerKind::Radam => "radam",
        }
    }
}

impl FromStr for OptimizerKind {
    type Err = FpcaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rsgd" => Ok(OptimizerKind::Rsgd),
            "radam" => Ok(OptimizerKind::Radam),
            other => Err(FpcaError::Config(format!(
                "optimizer: unknown value {other:?}, use rsgd or radam"
            ))),
        }
    }
}

/// Every knob of a fit. Reals are stored as `f64` and converted on use.
#[derive(Debug, Clone, PartialEq)]
pub struct FitConfig {
    pub rank: usize,
    pub degree: usize,
    pub inner_knots: Vec<usize>,
    pub domain: Vec<(f64, f64)>,
    pub batch_size: usize,
    pub epochs: usize,
    pub optimizer: OptimizerKind,
    pub averaging: bool,
    /// First averaged step; half of epoch 1 when `None`.
    pub averaging_start: Option<usize>,
    pub step_a: f64,
    pub step_gamma: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub delta: f64,
    pub ridge: f64,
    pub n_init: usize,
    pub block_size: usize,
    pub omega: f64,
    pub beam_width: usize,
    pub branching: usize,
    pub expansion_ratio: f64,
    pub initial_taus: Vec<f64>,
    pub seed: u64,
    pub shuffle_first: bool,
    pub shuffle_later: bool,
    pub reorth_every: usize,
    pub center: CenterMode,
}

fn decades(largest: f64, count: usize) -> Vec<f64> {
    (0..count).map(|j| largest / 10f64.powi(j as i32)).collect()
}

impl Default for FitConfig {
    fn default() -> Self {
        Self::preset_1d()
    }
}

impl FitConfig {
    /// Cubic splines with 5 inner knots on `[0, 1]`, RAdam with averaging.
    pub fn preset_1d() -> Self {
        Self {
            rank: 3,
            degree: 3,
            inner_knots: vec![5],
            domain: vec![(0.0, 1.0)],
            batch_size: 5,
            epochs: 3,
            optimizer: OptimizerKind::Radam,
            averaging: true,
            averaging_start: None,
            step_a: 0.2,
            step_gamma: 0.6,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            delta: crate::model::DEFAULT_DELTA,
            ridge: crate::model::DEFAULT_RIDGE,
            n_init: 500,
            block_size: 20,
            omega: 0.5,
            beam_width: 2,
            branching: 3,
            expansion_ratio: 10f64.sqrt(),
            initial_taus: decades(0.1, 6),
            seed: 0,
            shuffle_first: false,
            shuffle_later: true,
            reorth_every: 500,
            center: CenterMode::None,
        }
    }

    /// Tensor-product cubic splines with 5×5 inner knots on `[0, 1]²`, RSGD.
    pub fn preset_2d() -> Self {
        Self {
            inner_knots: vec![5, 5],
            domain: vec![(0.0, 1.0), (0.0, 1.0)],
            epochs: 5,
            optimizer: OptimizerKind::Rsgd,
            averaging: false,
            initial_taus: decades(1e-3, 6),
            ..Self::preset_1d()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "1d" => Ok(Self::preset_1d()),
            "2d" => Ok(Self::preset_2d()),
            other => Err(FpcaError::Config(format!(
                "preset: unknown value {other:?}, use 1d or 2d"
            ))),
        }
    }

    pub fn dims(&self) -> usize {
        self.domain.len()
    }

    pub fn basis_len(&self) -> usize {
        self.inner_knots
            .iter()
            .map(|k| k + self.degree + 1)
            .product()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |field: &str, why: &str| Err(FpcaError::Config(format!("{field}: {why}")));
        if self.domain.is_empty() {
            return fail("domain", "at least one interval is required");
        }
        if self
            .domain
            .iter()
            .any(|(lo, hi)| !(lo.is_finite() && hi.is_finite() && lo < hi))
        {
            return fail("domain", "every interval needs finite lower < upper");
        }
        if self.inner_knots.len() != self.domain.len() {
            return fail("inner_knots", "one count per domain dimension is required");
        }
        if self.rank == 0 || self.rank > self.basis_len() {
            return fail("rank", &format!("must lie in 1..={}", self.basis_len()));
        }
        if self.batch_size == 0 {
            return fail("batch_size", "must be at least 1");
        }
        if self.epochs == 0 {
            return fail("epochs", "must be at least 1");
        }
        if !(self.step_a > 0.0) {
            return fail("step_a", "must be positive");
        }
        if !(self.step_gamma > 0.5 && self.step_gamma <= 1.0) {
            return fail("step_gamma", "must lie in (0.5, 1]");
        }
        if !(0.0..1.0).contains(&self.beta1) {
            return fail("beta1", "must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.beta2) {
            return fail("beta2", "must lie in [0, 1)");
        }
        if !(self.adam_eps > 0.0) {
            return fail("adam_eps", "must be positive");
        }
        if !(self.delta > 0.0) {
            return fail("delta", "must be positive");
        }
        if !(self.ridge > 0.0) {
            return fail("ridge", "must be positive");
        }
        if self.n_init == 0 {
            return fail("n_init", "must be at least 1");
        }
        if self.block_size == 0 {
            return fail("block_size", "must be at least 1");
        }
        if !(self.omega > 0.0 && self.omega < 1.0) {
            return fail("omega", "must lie in (0, 1)");
        }
        if self.beam_width == 0 {
            return fail("beam_width", "must be at least 1");
        }
        if self.branching == 0 {
            return fail("branching", "must be at least 1");
        }
        if !(self.expansion_ratio > 0.0) {
            return fail("expansion_ratio", "must be positive");
        }
        if self.initial_taus.len() != self.beam_width * self.branching {
            return fail(
                "initial_taus",
                &format!(
                    "{} values given, beam_width × branching = {}",
                    self.initial_taus.len(),
                    self.beam_width * self.branching
                ),
            );
        }
        if self
            .initial_taus
            .iter()
            .any(|t| !(*t > 0.0 && t.is_finite()))
        {
            return fail("initial_taus", "every value must be positive");
        }
        if let CenterMode::BinnedMean { bins: 0 } = self.center {
            return fail("center", "needs at least one bin");
        }
        Ok(())
    }

    /// Names accepted by [`set`](Self::set), in file order.
    pub const KEYS: &'static [&'static str] = &[
        "rank",
        "degree",
        "inner_knots",
        "domain",
        "batch_size",
        "epochs",
        "optimizer",
        "averaging",
        "averaging_start",
        "step_a",
        "step_gamma",
        "beta1",
        "beta2",
        "adam_eps",
        "delta",
        "ridge",
        "n_init",
        "block_size",
        "omega",
        "beam_width",
        "branching",
        "expansion_ratio",
        "initial_taus",
        "seed",
        "shuffle_first",
        "shuffle_later",
        "reorth_every",
        "center",
    ];

    /// Sets one field from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<V: FromStr>(key: &str, v: &str) -> Result<V> {
            v.trim()
                .parse()
                .map_err(|_| FpcaError::Config(format!("{key}: cannot parse {v:?}")))
        }
        fn list<V: FromStr>(key: &str, v: &str) -> Result<Vec<V>> {
            v.split(',').map(|x| num(key, x)).collect()
        }
        fn flag(key: &str, v: &str) -> Result<bool> {
            match v.trim() {
                "true" | "yes" | "1" => Ok(true),
                "false" | "no" | "0" => Ok(false),
                _ => Err(FpcaError::Config(format!(
                    "{key}: expected true or false, got {v:?}"
                ))),
            }
        }
        let v = value.trim();
        match key {
            "rank" => self.rank = num(key, v)?,
            "degree" => self.degree = num(key, v)?,
            "inner_knots" => self.inner_knots = list(key, v)?,
            "domain" => {
                self.domain = v
                    .split(',')
                    .map(|iv| {
                        let (lo, hi) = iv.split_once(':').ok_or_else(|| {
                            FpcaError::Config(format!("domain: {iv:?} is not lower:upper"))
                        })?;
                        Ok((num(key, lo)?, num(key, hi)?))
                    })
                    .collect::<Result<_>>()?
            }
            "batch_size" => self.batch_size = num(key, v)?,
            "epochs" => self.epochs = num(key, v)?,
            "optimizer" => self.optimizer = v.parse()?,
            "averaging" => self.averaging = flag(key, v)?,
            "averaging_start" => {
                self.averaging_start = if v == "auto" {
                    None
                } else {
                    Some(num(key, v)?)
                }
            }
            "step_a" => self.step_a = num(key, v)?,
            "step_gamma" => self.step_gamma = num(key, v)?,
            "beta1" => self.beta1 = num(key, v)?,
            "beta2" => self.beta2 = num(key, v)?,
            "adam_eps" => self.adam_eps = num(key, v)?,
            "delta" => self.delta = num(key, v)?,
            "ridge" => self.ridge = num(key, v)?,
            "n_init" => self.n_init = num(key, v)?,
            "block_size" => self.block_size = num(key, v)?,
            "omega" => self.omega = num(key, v)?,
            "beam_width" => self.beam_width = num(key, v)?,
            "branching" => self.branching = num(key, v)?,
            "expansion_ratio" => self.expansion_ratio = num(key, v)?,
            "initial_taus" => self.initial_taus = list(key, v)?,
            "seed" => self.seed = num(key, v)?,
            "shuffle_first" => self.shuffle_first = flag(key, v)?,
            "shuffle_later" => self.shuffle_later = flag(key, v)?,
            "reorth_every" => self.reorth_every = num(key, v)?,
            "center" => {
                self.center = match v {
                    "none" => CenterMode::None,
                    _ => match v.strip_prefix("binned:") {
                        Some(b) => CenterMode::BinnedMean { bins: num(key, b)? },
                        None => {
                            return Err(FpcaError::Config(format!(
                                "center: expected none or binned:<cells>, got {v:?}"
                            )))
                        }
                    },
                }
            }
            other => return Err(FpcaError::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Parses `key = value` lines; `#` starts a comment. A `preset` key, if
    /// present, picks the starting defaults before the other keys apply.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        let mut order = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                FpcaError::Config(format!("line {}: expected key = value, got {raw:?}", i + 1))
            })?;
            let k = k.trim().to_string();
            if entries.insert(k.clone(), v.trim().to_string()).is_some() {
                return Err(FpcaError::Config(format!(
                    "line {}: {k} given twice",
                    i + 1
                )));
            }
            order.push(k);
        }
        let mut cfg = match entries.get("preset") {
            Some(p) => Self::preset(p)?,
            None => Self::default(),
        };
        for k in order.iter().filter(|k| *k != "preset") {
            cfg.set(k, &entries[k])?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// The configuration as `key = value` lines accepted by [`parse`](Self::parse).
    pub fn render(&self) -> String {
        let join = |v: &[String]| v.join(",");
        let mut out = String::new();
        for key in Self::KEYS {
            let value = match *key {
                "rank" => self.rank.to_string(),
                "degree" => self.degree.to_string(),
                "inner_knots" => join(
                    &self
                        .inner_knots
                        .iter()
                        .map(|k| k.to_string())
                        .collect::<Vec<_>>(),
                ),
                "domain" => join(
                    &self
                        .domain
                        .iter()
                        .map(|(a, b)| format!("{a:e}:{b:e}"))
                        .collect::<Vec<_>>(),
                ),
                "batch_size" => self.batch_size.to_string(),
                "epochs" => self.epochs.to_string(),
                "optimizer" => self.optimizer.name().to_string(),
                "averaging" => self.averaging.to_string(),
                "averaging_start" => self
                    .averaging_start
                    .map_or("auto".into(), |k| k.to_string()),
                "step_a" => format!("{:e}", self.step_a),
                "step_gamma" => format!("{:e}", self.step_gamma),
                "beta1" => format!("{:e}", self.beta1),
                "beta2" => format!("{:e}", self.beta2),
                "adam_eps" => format!("{:e}", self.adam_eps),
                "delta" => format!("{:e}", self.delta),
                "ridge" => format!("{:e}", self.ridge),
                "n_init" => self.n_init.to_string(),
                "block_size" => self.block_size.to_string(),
                "omega" => format!("{:e}", self.omega),
                "beam_width" => self.beam_width.to_string(),
                "branching" => self.branching.to_string(),
                "expansion_ratio" => format!("{:e}", self.expansion_ratio),
                "initial_taus" => join(
                    &self
                        .initial_taus
                        .iter()
                        .map(|t| format!("{t:e}"))
                        .collect::<Vec<_>>(),
                ),
                "seed" => self.seed.to_string(),
                "shuffle_first" => self.shuffle_first.to_string(),
                "shuffle_later" => self.shuffle_later.to_string(),
                "reorth_every" => self.reorth_every.to_string(),
                "center" => match self.center {
                    CenterMode::None => "none".into(),
                    CenterMode::BinnedMean { bins } => format!("binned:{bins}"),
                },
                _ => unreachable!(),
            };
            out.push_str(&format!("{key} = {value}\n"));
        }
        out
    }

    pub fn space<T: Scalar>(&self) -> Result<SplineSpace<T>> {
        let domain: Vec<(T, T)> = self
            .domain
            .iter()
            .map(|&(a, b)| (T::lit(a), T::lit(b)))
            .collect();
        SplineSpace::new(&domain, &self.inner_knots, self.degree)
    }
}

/// Everything a fit produces.
#[derive(Debug, Clone)]
pub struct FitOutput<T: Scalar> {
    pub problem: Problem<T>,
    pub initial: ModelParams<T>,
    /// Reported estimate: the running average when enabled.
    pub estimate: ModelParams<T>,
    /// Last iterate of the selected chain.
    pub iterate: ModelParams<T>,
    pub tau: T,
    /// `τ` of the best candidate after each tuning block.
    pub selected_path: Vec<(usize, T)>,
    pub tuning_log: Vec<TuningRecord<T>>,
    /// Step trace of the selected chain from step 1.
    pub history: Vec<StepRecord<T>>,
    /// Global step index at the end of each epoch.
    pub epoch_ends: Vec<usize>,
    pub steps: usize,
    pub norm_scale: T,
    pub max_residual: T,
    pub n_subjects: usize,
    pub bin_means: Vec<T>,
}

/// `1 / mean ‖∇‖` over mini-batches of the initialization subjects, where
/// `‖∇‖² = ‖S^Θ‖²_G + ‖s^η‖² + (s^ζ)²` at `Ψ₀` without penalty.
pub fn rsgd_norm_scale<T: Scalar>(
    problem: &Problem<T>,
    init: &[Subject<T>],
    params: &ModelParams<T>,
    batch_size: usize,
) -> Result<T> {
    let mut total = T::zero();
    let mut count = 0usize;
    for chunk in init.chunks(batch_size.max(1)) {
        let g = grads_batch(chunk, &problem.space, params, T::zero())?;
        let s = problem
            .manifold
            .riemannian_grad(&params.theta, &g.d_theta)?;
        let sq = problem.manifold.norm(s.matrix()).powi(2)
            + g.d_eta.norm_squared()
            + g.d_zeta * g.d_zeta;
        total += sq.sqrt();
        count += 1;
    }
    let mean = total / T::from_usize_lossy(count.max(1));
    if !(mean > T::zero()) || !mean.is_finite_value() {
        return Err(FpcaError::Numerical(format!(
            "mean initial gradient norm is {mean}; cannot scale RSGD steps"
        )));
    }
    Ok(T::one() / mean)
}

/// Runs the full pipeline on `subjects` in arrival order.
pub fn fit<T: Scalar>(subjects: &[Subject<T>], config: &FitConfig) -> Result<FitOutput<T>> {
    config.validate()?;
    if subjects.is_empty() {
        return Err(FpcaError::Data {
            id: String::new(),
            reason: "no subjects to fit".into(),
        });
    }
    let problem = Problem::new(config.space::<T>()?)?;
    let mut data = subjects.to_vec();
    let bounds = problem.space.bounds();
    let bin_means = center_subjects(&mut data, config.center, &bounds)?;
    let designs = problem.design(&data.iter().collect::<Vec<_>>())?;

    let delta = T::lit(config.delta);
    let n_init = config.n_init.min(data.len());
    let initial = batch_init(
        &data[..n_init],
        &problem.space,
        &problem.manifold,
        config.rank,
        T::lit(config.ridge),
        delta,
    )?;
    log::info!(
        "initialized from {n_init} subjects, λ₀ = {:?}",
        initial.lambda().as_slice()
    );

    let mut schedule = StepSchedule::new(T::lit(config.step_a), T::lit(config.step_gamma))?;
    let norm_scale = match config.optimizer {
        OptimizerKind::Rsgd => {
            rsgd_norm_scale(&problem, &data[..n_init], &initial, config.batch_size)?
        }
        OptimizerKind::Radam => T::one(),
    };
    schedule = schedule.with_norm_scale(norm_scale);

    let plan = BatchPlan {
        shuffle_first: config.shuffle_first,
        shuffle_later: config.shuffle_later,
        ..BatchPlan::new(config.batch_size, config.epochs, config.seed)?
    };
    let n = data.len();
    let per_epoch = plan.batches_per_epoch(n);
    let rule = match config.optimizer {
        OptimizerKind::Rsgd => OptimizerState::Rsgd,
        OptimizerKind::Radam => {
            let adam = AdamConfig {
                beta1: T::lit(config.beta1),
                beta2: T::lit(config.beta2),
                eps: T::lit(config.adam_eps),
            };
            adam.validate()?;
            OptimizerState::Radam(AdamState::new(adam, problem.space.len(), config.rank))
        }
    };
    let averaging = config.averaging.then(|| {
        let k_a = config.averaging_start.unwrap_or((per_epoch / 2).max(1));
        AvgState::new(&initial, k_a)
    });
    let optimizer = ChainOptimizer::new(rule, averaging);
    let taus: Vec<T> = config.initial_taus.iter().map(|&t| T::lit(t)).collect();
    let beam_config = BeamConfig {
        width: config.beam_width,
        branching: config.branching,
        ratio: T::lit(config.expansion_ratio),
        omega: T::lit(config.omega),
        q: config.block_size,
    };
    let mut beam = Beam::new(&initial, &optimizer, &taus, beam_config)?;
    beam.set_reorth_every(config.reorth_every);

    let batch_of = |idx: &[usize]| idx.iter().map(|&i| designs[i].clone()).collect::<Vec<_>>();
    let first = epoch_batches(n, &plan, 1, 1);
    for block in first.chunks(config.block_size) {
        let batches: Vec<_> = block.iter().map(|b| batch_of(&b.indices)).collect();
        if batches.len() == config.block_size {
            beam.round(&problem, &batches, &schedule)?;
        } else {
            beam.update(&problem, &batches, &schedule)?;
        }
    }
    let mut chain: Candidate<T> = beam.finish()?;
    let Beam {
        selected_path,
        log: tuning_log,
        max_residual,
        ..
    } = beam;
    let mut max_residual = max_residual;
    let tau = chain.tau;
    log::info!("epoch 1 done, τ = {tau:e}");

    let mut epoch_ends = vec![per_epoch];
    let mut k = per_epoch;
    for epoch in 2..=config.epochs {
        let batches: Vec<_> = epoch_batches(n, &plan, epoch, k + 1)
            .iter()
            .map(|b| batch_of(&b.indices))
            .collect();
        let before = chain.history.len();
        chain.run(&problem, &batches, &schedule, false)?;
        for h in &chain.history[before..] {
            max_residual = max_residual.max(h.residual);
        }
        k += batches.len();
        epoch_ends.push(k);
        log::info!("epoch {epoch} done");
    }

    Ok(FitOutput {
        estimate: chain.estimate(),
        iterate: chain.params.clone(),
        tau,
        selected_path,
        tuning_log,
        history: chain.history,
        epoch_ends,
        steps: k,
        norm_scale,
        max_residual,
        n_subjects: n,
        bin_means,
        initial,
        problem,
    })
}
