//! Streaming updates on `(Θ, η, ζ)`: Riemannian SGD, Riemannian Adam and
//! Riemannian iterate averaging.

use nalgebra::{DMatrix, DVector};

use crate::error::{FpcaError, Result};
use crate::manifold::{GeneralizedStiefel, StiefelPoint};
use crate::model::{evaluate, DesignedSubject, EuclideanGrads, ModelParams, Problem};
use crate::scalar::Scalar;

/// `α_k = a · k^(−γ) · norm_scale`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepSchedule<T: Scalar> {
    pub a: T,
    pub gamma: T,
    /// `1 / mean gradient norm` for RSGD, 1 for Adam.
    pub norm_scale: T,
}

impl<T: Scalar> StepSchedule<T> {
    pub fn new(a: T, gamma: T) -> Result<Self> {
        if !(a > T::zero()) {
            return Err(FpcaError::Config(
                "step coefficient must be positive".into(),
            ));
        }
        if !(gamma > T::lit(0.5) && gamma <= T::one()) {
            return Err(FpcaError::Config(format!(
                "step decay {gamma} must lie in (0.5, 1]"
            )));
        }
        Ok(Self {
            a,
            gamma,
            norm_scale: T::one(),
        })
    }

    pub fn with_norm_scale(mut self, scale: T) -> Self {
        self.norm_scale = scale;
        self
    }

    pub fn step_size(&self, k: usize) -> Result<T> {
        if k == 0 {
            return Err(FpcaError::Argument("step index starts at 1".into()));
        }
        Ok(self.a * T::from_usize_lossy(k).powf(-self.gamma) * self.norm_scale)
    }
}

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig<T: Scalar> {
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
}

impl<T: Scalar> Default for AdamConfig<T> {
    fn default() -> Self {
        Self {
            beta1: T::lit(0.9),
            beta2: T::lit(0.999),
            eps: T::lit(1e-8),
        }
    }
}

impl<T: Scalar> AdamConfig<T> {
    pub fn validate(&self) -> Result<()> {
        let unit = |b: T| b >= T::zero() && b < T::one();
        if !unit(self.beta1) || !unit(self.beta2) {
            return Err(FpcaError::Config("Adam betas must lie in [0, 1)".into()));
        }
        if !(self.eps > T::zero()) {
            return Err(FpcaError::Config("Adam eps must be positive".into()));
        }
        Ok(())
    }

    /// `√(1 − β₂ᵏ) / (1 − β₁ᵏ)`.
    pub fn bias_factor(&self, k: usize) -> T {
        let k = k as i32;
        (T::one() - self.beta2.powi(k)).sqrt() / (T::one() - self.beta1.powi(k))
    }
}

/// Moment estimates of Riemannian Adam.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T: Scalar> {
    pub config: AdamConfig<T>,
    pub m_theta: DMatrix<T>,
    pub v_theta: DMatrix<T>,
    pub m_eta: DVector<T>,
    pub v_eta: DVector<T>,
    pub m_zeta: T,
    pub v_zeta: T,
    /// Number of completed steps.
    pub k: usize,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(config: AdamConfig<T>, p: usize, rank: usize) -> Self {
        Self {
            config,
            m_theta: DMatrix::zeros(p, rank),
            v_theta: DMatrix::zeros(p, rank),
            m_eta: DVector::zeros(rank),
            v_eta: DVector::zeros(rank),
            m_zeta: T::zero(),
            v_zeta: T::zero(),
            k: 0,
        }
    }
}

/// `bias · M ⊘ (√V + eps)`, entrywise.
pub fn adam_direction<T: Scalar>(m: &DMatrix<T>, v: &DMatrix<T>, bias: T, eps: T) -> DMatrix<T> {
    m.zip_map(v, |mi, vi| bias * mi / (vi.sqrt() + eps))
}

/// Result of one optimizer step.
#[derive(Debug, Clone)]
pub struct StepOutcome<T: Scalar> {
    pub params: ModelParams<T>,
    /// Riemannian gradient `S_k^Θ`.
    pub riemannian_grad: DMatrix<T>,
    /// Retraction halvings needed.
    pub halvings: usize,
}

fn ensure_finite<T: Scalar>(grads: &EuclideanGrads<T>) -> Result<()> {
    if grads.is_finite() {
        Ok(())
    } else {
        Err(FpcaError::Numerical("non-finite gradient".into()))
    }
}

/// One RSGD update from precomputed Euclidean gradients.
pub fn rsgd_update<T: Scalar>(
    manifold: &GeneralizedStiefel<T>,
    params: &ModelParams<T>,
    grads: &EuclideanGrads<T>,
    alpha: T,
) -> Result<StepOutcome<T>> {
    ensure_finite(grads)?;
    let s = manifold
        .riemannian_grad(&params.theta, &grads.d_theta)?
        .into_matrix();
    let (theta, halvings) = manifold.retract_with_backoff(&params.theta, &s, -alpha)?;
    let next = ModelParams {
        theta,
        eta: &params.eta - &grads.d_eta * alpha,
        zeta: params.zeta - alpha * grads.d_zeta,
        delta: params.delta,
    };
    Ok(StepOutcome {
        params: next,
        riemannian_grad: s,
        halvings,
    })
}

/// One Riemannian Adam update; advances `state.k` by one.
pub fn radam_update<T: Scalar>(
    manifold: &GeneralizedStiefel<T>,
    params: &ModelParams<T>,
    state: &mut AdamState<T>,
    grads: &EuclideanGrads<T>,
    alpha: T,
) -> Result<StepOutcome<T>> {
    ensure_finite(grads)?;
    let cfg = state.config;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
    let k = state.k + 1;
    let bias = cfg.bias_factor(k);

    let s = manifold
        .riemannian_grad(&params.theta, &grads.d_theta)?
        .into_matrix();
    let carried = manifold
        .project_tangent(&params.theta, &state.m_theta)?
        .into_matrix();
    let m_theta = &s * one_b1 + carried * b1;
    let v_theta = s.component_mul(&s) * one_b2 + &state.v_theta * b2;
    let direction = adam_direction(&m_theta, &v_theta, bias, cfg.eps);
    let (theta, halvings) = manifold.retract_with_backoff(&params.theta, &direction, -alpha)?;

    let m_eta = &grads.d_eta * one_b1 + &state.m_eta * b1;
    let v_eta = grads.d_eta.component_mul(&grads.d_eta) * one_b2 + &state.v_eta * b2;
    let eta_step = m_eta.zip_map(&v_eta, |m, v| bias * m / (v.sqrt() + cfg.eps));
    let m_zeta = one_b1 * grads.d_zeta + b1 * state.m_zeta;
    let v_zeta = one_b2 * grads.d_zeta * grads.d_zeta + b2 * state.v_zeta;
    let zeta_step = bias * m_zeta / (v_zeta.sqrt() + cfg.eps);

    state.m_theta = m_theta;
    state.v_theta = v_theta;
    state.m_eta = m_eta;
    state.v_eta = v_eta;
    state.m_zeta = m_zeta;
    state.v_zeta = v_zeta;
    state.k = k;

    let next = ModelParams {
        theta,
        eta: &params.eta - eta_step * alpha,
        zeta: params.zeta - alpha * zeta_step,
        delta: params.delta,
    };
    Ok(StepOutcome {
        params: next,
        riemannian_grad: s,
        halvings,
    })
}

/// RSGD step on a mini-batch: `Ψ_k` from `Ψ_{k−1}`.
pub fn rsgd_step<T: Scalar>(
    problem: &Problem<T>,
    params: &ModelParams<T>,
    batch: &[DesignedSubject<T>],
    tau: T,
    schedule: &StepSchedule<T>,
    k: usize,
) -> Result<StepOutcome<T>> {
    let alpha = schedule.step_size(k)?;
    let eval = evaluate(batch, params, problem.penalty(tau)?, tau)?;
    rsgd_update(&problem.manifold, params, &eval.grads, alpha)
}

/// Riemannian Adam step on a mini-batch; `state.k` must equal `k − 1`.
pub fn radam_step<T: Scalar>(
    problem: &Problem<T>,
    params: &ModelParams<T>,
    state: &mut AdamState<T>,
    batch: &[DesignedSubject<T>],
    tau: T,
    schedule: &StepSchedule<T>,
    k: usize,
) -> Result<StepOutcome<T>> {
    if state.k + 1 != k {
        return Err(FpcaError::State(format!(
            "Adam state has {} steps, cannot take step {k}",
            state.k
        )));
    }
    let alpha = schedule.step_size(k)?;
    let eval = evaluate(batch, params, problem.penalty(tau)?, tau)?;
    radam_update(&problem.manifold, params, state, &eval.grads, alpha)
}

/// Running Riemannian average of the iterates.
#[derive(Debug, Clone, PartialEq)]
pub struct AvgState<T: Scalar> {
    pub theta_bar: StiefelPoint<T>,
    pub eta_bar: DVector<T>,
    pub zeta_bar: T,
    /// First step included in the average.
    pub k_a: usize,
    /// Iterates averaged so far.
    pub count: usize,
}

impl<T: Scalar> AvgState<T> {
    pub fn new(initial: &ModelParams<T>, k_a: usize) -> Self {
        Self {
            theta_bar: initial.theta.clone(),
            eta_bar: initial.eta.clone(),
            zeta_bar: initial.zeta,
            k_a,
            count: 0,
        }
    }

    /// The averaged parameters.
    pub fn params(&self, delta: T) -> ModelParams<T> {
        ModelParams {
            theta: self.theta_bar.clone(),
            eta: self.eta_bar.clone(),
            zeta: self.zeta_bar,
            delta,
        }
    }
}

/// Folds the iterate after step `k` into the average.
///
/// Before `k_a` the average tracks the iterate. From `k_a` on, with `n`
/// averaged iterates, `Θ̄ ← R_Θ̄((1/n) R⁻¹_Θ̄(Θ_k))` and the Euclidean parts
/// follow the running mean.
pub fn asgd_update<T: Scalar>(
    manifold: &GeneralizedStiefel<T>,
    avg: &AvgState<T>,
    params: &ModelParams<T>,
    k: usize,
) -> Result<AvgState<T>> {
    if k < avg.k_a {
        return Ok(AvgState {
            theta_bar: params.theta.clone(),
            eta_bar: params.eta.clone(),
            zeta_bar: params.zeta,
            k_a: avg.k_a,
            count: 0,
        });
    }
    let n = avg.count + 1;
    if n == 1 {
        return Ok(AvgState {
            theta_bar: params.theta.clone(),
            eta_bar: params.eta.clone(),
            zeta_bar: params.zeta,
            k_a: avg.k_a,
            count: 1,
        });
    }
    let w = T::one() / T::from_usize_lossy(n);
    let toward = manifold.inverse_retract_approx(&avg.theta_bar, &params.theta)?;
    let (theta_bar, _) = manifold.retract_with_backoff(&avg.theta_bar, toward.matrix(), w)?;
    Ok(AvgState {
        theta_bar,
        eta_bar: &avg.eta_bar + (&params.eta - &avg.eta_bar) * w,
        zeta_bar: avg.zeta_bar + (params.zeta - avg.zeta_bar) * w,
        k_a: avg.k_a,
        count: n,
    })
}

/// Which update rule drives a chain.
#[derive(Debug, Clone, PartialEq)]
pub enum OptimizerState<T: Scalar> {
    Rsgd,
    Radam(AdamState<T>),
}

/// Everything a chain carries between steps besides `Ψ`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainOptimizer<T: Scalar> {
    pub rule: OptimizerState<T>,
    pub averaging: Option<AvgState<T>>,
    /// Index of the last completed step.
    pub k: usize,
}

/// Outcome of [`ChainOptimizer::step`].
#[derive(Debug, Clone)]
pub struct ChainStep<T: Scalar> {
    pub params: ModelParams<T>,
    /// Validation score of the pre-update parameters on this batch.
    pub score: T,
    /// `‖S_k^Θ‖` in the `G` metric.
    pub grad_norm: T,
}

impl<T: Scalar> ChainOptimizer<T> {
    pub fn new(rule: OptimizerState<T>, averaging: Option<AvgState<T>>) -> Self {
        Self {
            rule,
            averaging,
            k: 0,
        }
    }

    /// Scores `params` on `batch`, then applies one update with smoothing `tau`.
    pub fn step(
        &mut self,
        problem: &Problem<T>,
        params: &ModelParams<T>,
        batch: &[DesignedSubject<T>],
        tau: T,
        schedule: &StepSchedule<T>,
    ) -> Result<ChainStep<T>> {
        let k = self.k + 1;
        let alpha = schedule.step_size(k)?;
        let eval = evaluate(batch, params, problem.penalty(tau)?, tau)?;
        let out = match &mut self.rule {
            OptimizerState::Rsgd => rsgd_update(&problem.manifold, params, &eval.grads, alpha)?,
            OptimizerState::Radam(state) => {
                radam_update(&problem.manifold, params, state, &eval.grads, alpha)?
            }
        };
        if let Some(avg) = &self.averaging {
            self.averaging = Some(asgd_update(&problem.manifold, avg, &out.params, k)?);
        }
        self.k = k;
        Ok(ChainStep {
            grad_norm: problem.manifold.norm(&out.riemannian_grad),
            params: out.params,
            score: eval.data_loss,
        })
    }

    /// Averaged parameters when averaging is on, else `current`.
    pub fn estimate(&self, current: &ModelParams<T>) -> ModelParams<T> {
        match &self.averaging {
            Some(avg) if avg.count > 0 => avg.params(current.delta),
            _ => current.clone(),
        }
    }

    /// Re-orthonormalizes `Θ` (and `Θ̄`) to stop drift.
    pub fn reorthonormalize(
        &mut self,
        manifold: &GeneralizedStiefel<T>,
        params: &mut ModelParams<T>,
    ) -> Result<()> {
        params.theta = manifold.g_orthonormalize(params.theta.matrix())?;
        if let Some(avg) = &mut self.averaging {
            avg.theta_bar = manifold.g_orthonormalize(avg.theta_bar.matrix())?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::SplineSpace;
    use crate::manifold::tests::random_matrix;
    use crate::model::{assemble_sigma, data_loss, Subject, DEFAULT_DELTA};
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn problem() -> Problem<f64> {
        Problem::new(SplineSpace::new(&[(0.0, 1.0)], &[2], 3).unwrap()).unwrap()
    }

    fn random_params(rng: &mut impl Rng, pr: &Problem<f64>, rank: usize) -> ModelParams<f64> {
        let theta = pr
            .manifold
            .g_orthonormalize(&random_matrix(rng, pr.space.len(), rank))
            .unwrap();
        let lambda = DVector::from_fn(rank, |_, _| rng.random_range(0.2..2.0));
        ModelParams::from_variances(theta, &lambda, rng.random_range(0.1..1.0), DEFAULT_DELTA)
            .unwrap()
    }

    fn random_batch(rng: &mut impl Rng, pr: &Problem<f64>, n: usize) -> Vec<DesignedSubject<f64>> {
        (0..n)
            .map(|i| {
                let m = rng.random_range(2..7);
                let locs = (0..m).map(|_| rng.random_range(0.0..1.0)).collect();
                let vals = (0..m).map(|_| rng.random_range(-2.0..2.0)).collect();
                let s = Subject::new(format!("{i}"), 1, locs, vals).unwrap();
                DesignedSubject::new(&s, &pr.space).unwrap()
            })
            .collect()
    }

    #[test]
    fn step_sizes() {
        let s = StepSchedule::new(0.2, 0.6).unwrap();
        assert_eq!(s.step_size(1).unwrap(), 0.2);
        assert_abs_diff_eq!(
            s.step_size(1000).unwrap(),
            0.2 * 1000f64.powf(-0.6),
            epsilon = 1e-15
        );
        assert_abs_diff_eq!(s.step_size(1000).unwrap(), 0.003170, epsilon = 5e-7);
        assert!(s.step_size(0).is_err());
        let mut prev = f64::INFINITY;
        for k in 1..200 {
            let a = s.step_size(k).unwrap();
            assert!(a < prev);
            prev = a;
        }
        assert!(StepSchedule::new(0.2, 0.5).is_err());
        assert!(StepSchedule::new(0.0, 0.6).is_err());
    }

    #[test]
    fn bias_factor_first_step() {
        let cfg = AdamConfig::<f64>::default();
        assert_abs_diff_eq!(cfg.bias_factor(1), 0.001f64.sqrt() / 0.1, epsilon = 1e-12);
        assert_abs_diff_eq!(cfg.bias_factor(1), 0.316227766, epsilon = 1e-9);
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let pr = problem();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = random_params(&mut rng, &pr, 2);
        // m = 1 subjects with y² = Σ make the discrepancy stationary.
        let batch: Vec<_> = [0.2, 0.7]
            .iter()
            .map(|&t| {
                let b = pr.space.basis_matrix(&[t]).unwrap();
                let s = assemble_sigma(&b, &params)[(0, 0)];
                DesignedSubject {
                    basis: b,
                    y: DVector::from_element(1, s.sqrt()),
                }
            })
            .collect();
        let sched = StepSchedule::new(0.2, 0.6).unwrap();
        let out = rsgd_step(&pr, &params, &batch, 0.0, &sched, 1).unwrap();
        assert!((out.params.theta.matrix() - params.theta.matrix()).amax() < 1e-12);
        assert!((&out.params.eta - &params.eta).amax() < 1e-12);
        assert!((out.params.zeta - params.zeta).abs() < 1e-12);
    }

    #[test]
    fn rsgd_descends_on_frozen_batch() {
        let pr = problem();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut params = random_params(&mut rng, &pr, 2);
        let batch = random_batch(&mut rng, &pr, 5);
        let start = data_loss(&batch, &params).unwrap();
        // Constant step 0.01 after normalizing by the initial gradient norm.
        let g0 = evaluate(&batch, &params, None, 0.0).unwrap();
        let s0 = pr
            .manifold
            .riemannian_grad(&params.theta, &g0.grads.d_theta)
            .unwrap();
        let norm = pr.manifold.norm(s0.matrix()).max(g0.grads.d_eta.norm());
        for _ in 0..200 {
            let eval = evaluate(&batch, &params, None, 0.0).unwrap();
            let out = rsgd_update(&pr.manifold, &params, &eval.grads, 0.01 / norm).unwrap();
            assert!(pr.manifold.residual(out.params.theta.matrix()) < 1e-8);
            params = out.params;
        }
        let end = data_loss(&batch, &params).unwrap();
        assert!(end < start, "{end} !< {start}");
    }

    #[test]
    fn radam_momentum_is_tangent_and_signs_match() {
        let pr = problem();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = random_params(&mut rng, &pr, 2);
        let batch = random_batch(&mut rng, &pr, 4);
        let sched = StepSchedule::new(0.2, 0.6).unwrap();
        let mut state = AdamState::new(AdamConfig::default(), pr.space.len(), 2);
        let out = radam_step(&pr, &params, &mut state, &batch, 0.01, &sched, 1).unwrap();
        assert!(pr.manifold.tangency_residual(&params.theta, &state.m_theta) < 1e-10);
        assert_eq!(state.k, 1);
        let out2 = radam_step(&pr, &out.params, &mut state, &batch, 0.01, &sched, 2).unwrap();
        assert!(pr.manifold.residual(out2.params.theta.matrix()) < 1e-8);
        assert!(radam_step(&pr, &out2.params, &mut state, &batch, 0.01, &sched, 5).is_err());

        let cfg = AdamConfig {
            beta1: 0.0,
            beta2: 0.0,
            eps: 1e-12,
        };
        let m: DMatrix<f64> = DMatrix::from_row_slice(2, 2, &[0.5, -0.5, -0.5, 0.5]);
        let v = m.component_mul(&m);
        let d = adam_direction(&m, &v, cfg.bias_factor(1), cfg.eps);
        for (di, mi) in d.iter().zip(m.iter()) {
            assert_abs_diff_eq!(*di, mi.signum(), epsilon = 1e-10);
        }
    }

    #[test]
    fn averaging_examples() {
        let pr = problem();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p0 = random_params(&mut rng, &pr, 2);
        let p1 = random_params(&mut rng, &pr, 2);

        let avg = AvgState::new(&p0, 5);
        let a = asgd_update(&pr.manifold, &avg, &p1, 3).unwrap();
        assert_eq!(a.theta_bar, p1.theta);
        assert_eq!(a.count, 0);

        let mut constant = AvgState::new(&p0, 1);
        for k in 1..20 {
            constant = asgd_update(&pr.manifold, &constant, &p1, k).unwrap();
            assert_eq!(constant.theta_bar, p1.theta);
        }

        let mut eta_avg = AvgState::new(&p0, 0);
        for (k, e) in [2.0, 4.0].iter().enumerate() {
            let mut it = p1.clone();
            it.eta = DVector::from_element(2, *e);
            it.zeta = *e;
            eta_avg = asgd_update(&pr.manifold, &eta_avg, &it, k + 1).unwrap();
        }
        assert_abs_diff_eq!(eta_avg.eta_bar[0], 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(eta_avg.zeta_bar, 3.0, epsilon = 1e-15);
    }

    #[test]
    fn averaged_theta_stays_feasible_and_between_iterates() {
        let pr = problem();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let base = random_params(&mut rng, &pr, 2);
        let mut avg = AvgState::new(&base, 1);
        let mut iterate = base.clone();
        for k in 1..50 {
            let xi = random_matrix(&mut rng, pr.space.len(), 2) * 0.01;
            iterate.theta = pr.manifold.retract(&base.theta, &xi, 1.0).unwrap();
            avg = asgd_update(&pr.manifold, &avg, &iterate, k).unwrap();
            assert!(pr.manifold.residual(avg.theta_bar.matrix()) < 1e-8);
        }
        // Zero-mean perturbations average back toward the base point.
        let dist = (avg.theta_bar.matrix() - base.theta.matrix()).norm();
        let spread = (iterate.theta.matrix() - base.theta.matrix()).norm();
        assert!(dist < spread, "{dist} vs {spread}");
    }

    #[test]
    fn rsgd_is_bitwise_reproducible() {
        let pr = problem();
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(6);
            let mut params = random_params(&mut rng, &pr, 2);
            let sched = StepSchedule::new(0.2, 0.6).unwrap().with_norm_scale(0.05);
            let mut chain = ChainOptimizer::new(OptimizerState::Rsgd, None);
            for _ in 0..30 {
                let batch = random_batch(&mut rng, &pr, 3);
                params = chain
                    .step(&pr, &params, &batch, 1e-3, &sched)
                    .unwrap()
                    .params;
            }
            params
        };
        assert_eq!(run(), run());
    }
}
