//! Model parameters, the covariance discrepancy and its gradients.
//!
//! For subject `i` with basis matrix `B_i` and centered observations `y_i`:
//!
//! ```text
//! Σ_i = B_i Θ diag(λ) Θᵀ B_iᵀ + σ² I
//! ℓ_i = tr(Σ_i⁻¹ y_i y_iᵀ) + log|Σ_i|
//! f   = mean_i ℓ_i + τ tr(Θᵀ P Θ)
//! ```
//!
//! The variances are stored through `λ = exp(η) + δ` and `σ² = exp(ζ) + δ`.
//! With `W_i = Σ_i⁻¹ (Σ_i − y_i y_iᵀ) Σ_i⁻¹` the Euclidean gradients are
//! `∂Θ = mean 2 B_iᵀ W_i B_i Θ diag(λ) + 2τPΘ`,
//! `∂η_r = (λ_r − δ) mean u_irᵀ W_i u_ir` and `∂ζ = (σ² − δ) mean tr(W_i)`.

use nalgebra::{DMatrix, DVector};

use crate::basis::SplineSpace;
use crate::error::{FpcaError, Result};
use crate::manifold::{GeneralizedStiefel, StiefelPoint};
use crate::scalar::Scalar;

/// Default floor for eigenvalues and noise variance.
pub const DEFAULT_DELTA: f64 = 1e-4;
/// Default ridge of the batch initializer.
pub const DEFAULT_RIDGE: f64 = 1e-4;

/// One functional observation: `m` points in the domain and centered values.
#[derive(Debug, Clone, PartialEq)]
pub struct Subject<T: Scalar> {
    pub id: String,
    dims: usize,
    locations: Vec<T>,
    values: Vec<T>,
}

impl<T: Scalar> Subject<T> {
    /// `locations` holds `values.len()` points of `dims` coordinates each, contiguously.
    pub fn new(
        id: impl Into<String>,
        dims: usize,
        locations: Vec<T>,
        values: Vec<T>,
    ) -> Result<Self> {
        let id = id.into();
        if dims == 0 {
            return Err(FpcaError::Data {
                id,
                reason: "zero-dimensional locations".into(),
            });
        }
        if values.is_empty() {
            return Err(FpcaError::Data {
                id,
                reason: "subject has no observations".into(),
            });
        }
        if locations.len() != dims * values.len() {
            return Err(FpcaError::Data {
                id,
                reason: format!(
                    "{} coordinates for {} observations in {dims} dimensions",
                    locations.len(),
                    values.len()
                ),
            });
        }
        if locations
            .iter()
            .chain(&values)
            .any(|v| !v.is_finite_value())
        {
            return Err(FpcaError::Data {
                id,
                reason: "non-finite location or value".into(),
            });
        }
        Ok(Self {
            id,
            dims,
            locations,
            values,
        })
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    /// Number of observations `m_i`.
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn locations(&self) -> &[T] {
        &self.locations
    }

    pub fn point(&self, j: usize) -> &[T] {
        &self.locations[j * self.dims..(j + 1) * self.dims]
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }
}

/// A subject with its basis matrix evaluated.
#[derive(Debug, Clone)]
pub struct DesignedSubject<T: Scalar> {
    pub basis: DMatrix<T>,
    pub y: DVector<T>,
}

impl<T: Scalar> DesignedSubject<T> {
    pub fn new(subject: &Subject<T>, space: &SplineSpace<T>) -> Result<Self> {
        if subject.dims() != space.dims() {
            return Err(FpcaError::Data {
                id: subject.id.clone(),
                reason: format!(
                    "subject is {}-dimensional, space is {}-dimensional",
                    subject.dims(),
                    space.dims()
                ),
            });
        }
        let basis = space
            .basis_matrix(subject.locations())
            .map_err(|e| match e {
                FpcaError::Domain { row: Some(r), .. } => FpcaError::Data {
                    id: subject.id.clone(),
                    reason: format!("location {r} lies outside the domain"),
                },
                other => other,
            })?;
        Ok(Self {
            basis,
            y: DVector::from_column_slice(subject.values()),
        })
    }
}

pub fn design_batch<'a, T: Scalar>(
    subjects: impl IntoIterator<Item = &'a Subject<T>>,
    space: &SplineSpace<T>,
) -> Result<Vec<DesignedSubject<T>>> {
    subjects
        .into_iter()
        .map(|s| DesignedSubject::new(s, space))
        .collect()
}

/// A spline space together with the manifold its Gram matrix defines.
#[derive(Debug, Clone)]
pub struct Problem<T: Scalar> {
    pub space: SplineSpace<T>,
    pub manifold: GeneralizedStiefel<T>,
}

impl<T: Scalar> Problem<T> {
    pub fn new(space: SplineSpace<T>) -> Result<Self> {
        let manifold = GeneralizedStiefel::new(space.gram().clone())?;
        Ok(Self { space, manifold })
    }

    pub fn design(&self, subjects: &[&Subject<T>]) -> Result<Vec<DesignedSubject<T>>> {
        design_batch(subjects.iter().copied(), &self.space)
    }

    /// The penalty matrix when `tau > 0`, `None` otherwise.
    pub fn penalty(&self, tau: T) -> Result<Option<&DMatrix<T>>> {
        penalty_for(&self.space, tau)
    }
}

/// `Ψ = (Θ, λ, σ²)` stored as `(Θ, η, ζ)` with floor `δ`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T: Scalar> {
    pub theta: StiefelPoint<T>,
    pub eta: DVector<T>,
    pub zeta: T,
    pub delta: T,
}

impl<T: Scalar> ModelParams<T> {
    /// Builds parameters from variances; each must exceed `δ` up to rounding.
    pub fn from_variances(
        theta: StiefelPoint<T>,
        lambda: &DVector<T>,
        sigma2: T,
        delta: T,
    ) -> Result<Self> {
        if !(delta > T::zero()) {
            return Err(FpcaError::Argument("floor δ must be positive".into()));
        }
        if lambda.len() != theta.rank() {
            return Err(FpcaError::Argument(format!(
                "{} eigenvalues for rank {}",
                lambda.len(),
                theta.rank()
            )));
        }
        let lower = delta * (T::one() - T::lit(1e-12));
        if lambda
            .iter()
            .chain(std::iter::once(&sigma2))
            .any(|v| !(*v > lower))
        {
            return Err(FpcaError::Argument(
                "eigenvalues and noise variance must exceed the floor δ".into(),
            ));
        }
        let log_excess = |v: T| (v - delta).max(T::zero()).ln();
        Ok(Self {
            eta: lambda.map(log_excess),
            zeta: log_excess(sigma2),
            theta,
            delta,
        })
    }

    pub fn rank(&self) -> usize {
        self.theta.rank()
    }

    pub fn lambda(&self) -> DVector<T> {
        let d = self.delta;
        self.eta.map(|e| e.exp() + d)
    }

    pub fn sigma2(&self) -> T {
        self.zeta.exp() + self.delta
    }
}

/// Euclidean gradients with respect to `(Θ, η, ζ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct EuclideanGrads<T: Scalar> {
    pub d_theta: DMatrix<T>,
    pub d_eta: DVector<T>,
    pub d_zeta: T,
}

impl<T: Scalar> EuclideanGrads<T> {
    pub fn is_finite(&self) -> bool {
        self.d_theta
            .iter()
            .chain(self.d_eta.iter())
            .all(|v| v.is_finite_value())
            && self.d_zeta.is_finite_value()
    }
}

/// Penalized objective value split into its parts, plus gradients.
#[derive(Debug, Clone)]
pub struct Evaluation<T: Scalar> {
    /// Unpenalized average discrepancy (the validation score).
    pub data_loss: T,
    /// `τ tr(ΘᵀPΘ)`.
    pub penalty: T,
    pub grads: EuclideanGrads<T>,
}

impl<T: Scalar> Evaluation<T> {
    pub fn total(&self) -> T {
        self.data_loss + self.penalty
    }
}

/// `Σ = BΘ diag(λ) ΘᵀBᵀ + σ²I`.
pub fn assemble_sigma<T: Scalar>(basis: &DMatrix<T>, params: &ModelParams<T>) -> DMatrix<T> {
    sigma_from(
        &(basis * params.theta.matrix()),
        &params.lambda(),
        params.sigma2(),
    )
}

fn sigma_from<T: Scalar>(u: &DMatrix<T>, lambda: &DVector<T>, sigma2: T) -> DMatrix<T> {
    let m = u.nrows();
    let mut scaled = u.clone();
    for (r, mut col) in scaled.column_iter_mut().enumerate() {
        col *= lambda[r];
    }
    let mut sigma = &scaled * u.transpose();
    for j in 0..m {
        sigma[(j, j)] += sigma2;
    }
    sigma
}

struct SubjectTerms<T: Scalar> {
    loss: T,
    d_theta: Option<DMatrix<T>>,
    d_lambda: DVector<T>,
    d_sigma2: T,
}

fn subject_terms<T: Scalar>(
    design: &DesignedSubject<T>,
    theta: &DMatrix<T>,
    lambda: &DVector<T>,
    sigma2: T,
    with_grads: bool,
) -> Result<SubjectTerms<T>> {
    let u = &design.basis * theta;
    let sigma = sigma_from(&u, lambda, sigma2);
    let chol = sigma.cholesky().ok_or_else(|| {
        FpcaError::Numerical("subject covariance is not positive definite".into())
    })?;
    let a = chol.solve(&design.y);
    let two = T::lit(2.0);
    let log_det = chol
        .l_dirty()
        .diagonal()
        .iter()
        .fold(T::zero(), |acc, v| acc + v.ln())
        * two;
    let loss = design.y.dot(&a) + log_det;
    if !with_grads {
        return Ok(SubjectTerms {
            loss,
            d_theta: None,
            d_lambda: DVector::zeros(0),
            d_sigma2: T::zero(),
        });
    }
    // W = Σ⁻¹ − a aᵀ
    let mut w = chol.inverse();
    w.ger(-T::one(), &a, &a, T::one());
    let wu = &w * &u;
    let r = theta.ncols();
    let d_lambda = DVector::from_fn(r, |k, _| u.column(k).dot(&wu.column(k)));
    let mut wu_lambda = wu;
    for (k, mut col) in wu_lambda.column_iter_mut().enumerate() {
        col *= two * lambda[k];
    }
    let d_theta = design.basis.transpose() * wu_lambda;
    Ok(SubjectTerms {
        loss,
        d_theta: Some(d_theta),
        d_lambda,
        d_sigma2: w.trace(),
    })
}

/// Objective and gradients at raw `(Θ, η, ζ)`; `Θ` need not be feasible.
///
/// Subject terms are reduced in batch order. `penalty` may be `None` only
/// when `tau == 0`.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_raw<T: Scalar>(
    batch: &[DesignedSubject<T>],
    theta: &DMatrix<T>,
    eta: &DVector<T>,
    zeta: T,
    delta: T,
    penalty: Option<&DMatrix<T>>,
    tau: T,
    with_grads: bool,
) -> Result<Evaluation<T>> {
    if batch.is_empty() {
        return Err(FpcaError::Argument("empty mini-batch".into()));
    }
    if tau < T::zero() {
        return Err(FpcaError::Argument(
            "smoothing parameter must be nonnegative".into(),
        ));
    }
    let (p, r) = theta.shape();
    let lambda = eta.map(|e| e.exp() + delta);
    let sigma2 = zeta.exp() + delta;
    if !sigma2.is_finite_value() || lambda.iter().any(|l| !l.is_finite_value()) {
        return Err(FpcaError::Numerical(
            "variance parameters overflowed; the step size is too large".into(),
        ));
    }
    let mut loss = T::zero();
    let mut d_theta = DMatrix::zeros(p, r);
    let mut d_lambda = DVector::zeros(r);
    let mut d_sigma2 = T::zero();
    for design in batch {
        if design.basis.ncols() != p {
            return Err(FpcaError::Argument(format!(
                "basis has {} columns, Θ has {p} rows",
                design.basis.ncols()
            )));
        }
        let terms = subject_terms(design, theta, &lambda, sigma2, with_grads)?;
        loss += terms.loss;
        if let Some(dt) = terms.d_theta {
            d_theta += dt;
            d_lambda += terms.d_lambda;
            d_sigma2 += terms.d_sigma2;
        }
    }
    let inv_n = T::one() / T::from_usize_lossy(batch.len());
    loss *= inv_n;
    d_theta *= inv_n;

    let mut pen = T::zero();
    if tau > T::zero() {
        let pmat = penalty.ok_or_else(|| {
            FpcaError::Config("a positive smoothing parameter needs a penalty matrix".into())
        })?;
        let ptheta = pmat * theta;
        pen = tau * theta.dot(&ptheta);
        if with_grads {
            d_theta += ptheta * (T::lit(2.0) * tau);
        }
    }
    let d_eta = DVector::from_fn(r, |k, _| (lambda[k] - delta) * d_lambda[k] * inv_n);
    let d_zeta = (sigma2 - delta) * d_sigma2 * inv_n;
    Ok(Evaluation {
        data_loss: loss,
        penalty: pen,
        grads: EuclideanGrads {
            d_theta,
            d_eta,
            d_zeta,
        },
    })
}

/// Objective and gradients for designed subjects.
pub fn evaluate<T: Scalar>(
    batch: &[DesignedSubject<T>],
    params: &ModelParams<T>,
    penalty: Option<&DMatrix<T>>,
    tau: T,
) -> Result<Evaluation<T>> {
    evaluate_raw(
        batch,
        params.theta.matrix(),
        &params.eta,
        params.zeta,
        params.delta,
        penalty,
        tau,
        true,
    )
}

/// Average unpenalized discrepancy of designed subjects.
pub fn data_loss<T: Scalar>(batch: &[DesignedSubject<T>], params: &ModelParams<T>) -> Result<T> {
    evaluate_raw(
        batch,
        params.theta.matrix(),
        &params.eta,
        params.zeta,
        params.delta,
        None,
        T::zero(),
        false,
    )
    .map(|e| e.data_loss)
}

fn penalty_for<T: Scalar>(space: &SplineSpace<T>, tau: T) -> Result<Option<&DMatrix<T>>> {
    if tau > T::zero() {
        space.penalty().map(Some)
    } else {
        Ok(None)
    }
}

/// `ℓ_i = tr(Σ_i⁻¹ y yᵀ) + log|Σ_i|`.
pub fn loss_subject<T: Scalar>(
    subject: &Subject<T>,
    space: &SplineSpace<T>,
    params: &ModelParams<T>,
) -> Result<T> {
    data_loss(&[DesignedSubject::new(subject, space)?], params)
}

/// Mean discrepancy over the batch plus `τ tr(ΘᵀPΘ)`.
pub fn loss_batch<T: Scalar>(
    batch: &[Subject<T>],
    space: &SplineSpace<T>,
    params: &ModelParams<T>,
    tau: T,
) -> Result<T> {
    let designs = design_batch(batch, space)?;
    let pen = penalty_for(space, tau)?;
    let e = evaluate_raw(
        &designs,
        params.theta.matrix(),
        &params.eta,
        params.zeta,
        params.delta,
        pen,
        tau,
        false,
    )?;
    Ok(e.total())
}

/// Euclidean gradients of [`loss_batch`].
pub fn grads_batch<T: Scalar>(
    batch: &[Subject<T>],
    space: &SplineSpace<T>,
    params: &ModelParams<T>,
    tau: T,
) -> Result<EuclideanGrads<T>> {
    let designs = design_batch(batch, space)?;
    let pen = penalty_for(space, tau)?;
    evaluate(&designs, params, pen, tau).map(|e| e.grads)
}

/// Batch initializer from the first subjects of the stream.
///
/// Each subject is projected with a ridge `ĉ_i = (B_iᵀB_i + ridge·G)⁻¹B_iᵀy_i`;
/// the leading eigenvectors of the covariance operator `M G` built from the
/// pooled second moment `M = mean ĉ_iĉ_iᵀ` give `Θ₀`, the eigenvalues (floored at `2δ`) give `λ₀`, and the mean
/// squared residual of `y_i` after least-squares projection on `B_iΘ₀`
/// (per residual degree of freedom, floored at `2δ`) gives `σ²₀`.
pub fn batch_init<T: Scalar>(
    subjects: &[Subject<T>],
    space: &SplineSpace<T>,
    manifold: &GeneralizedStiefel<T>,
    rank: usize,
    ridge: T,
    delta: T,
) -> Result<ModelParams<T>> {
    let p = space.len();
    if rank == 0 || rank > p {
        return Err(FpcaError::Init(format!("rank {rank} must lie in 1..={p}")));
    }
    let total: usize = subjects.iter().map(|s| s.len()).sum();
    if subjects.len() < rank || total < p {
        return Err(FpcaError::Init(format!(
            "{} subjects with {total} observations cannot identify {p} coefficients at rank {rank}",
            subjects.len()
        )));
    }
    let designs = design_batch(subjects, space)?;
    let gram = space.gram();
    let mut moment = DMatrix::<T>::zeros(p, p);
    for d in &designs {
        let a = d.basis.transpose() * &d.basis + gram * ridge;
        let chol = a
            .cholesky()
            .ok_or_else(|| FpcaError::Init("ridge system is not positive definite".into()))?;
        let c = chol.solve(&(d.basis.transpose() * &d.y));
        moment.ger(T::one(), &c, &c, T::one());
    }
    moment /= T::from_usize_lossy(designs.len());

    // Covariance operator eigenproblem M G v = μ v with vᵀGv = 1, symmetrized
    // through G = LLᵀ: (LᵀML) w = μ w, v = L⁻ᵀ w.
    let l = gram
        .clone()
        .cholesky()
        .ok_or_else(|| FpcaError::Init("Gram matrix is not positive definite".into()))?
        .l();
    let k = l.transpose() * &moment * &l;
    let k = (&k + k.transpose()) * T::lit(0.5);
    let eig = k.symmetric_eigen();
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut w = DMatrix::zeros(p, rank);
    for (j, &idx) in order.iter().take(rank).enumerate() {
        w.set_column(j, &eig.eigenvectors.column(idx));
    }
    let v = l
        .transpose()
        .solve_upper_triangular(&w)
        .ok_or_else(|| FpcaError::Init("singular Gram factor".into()))?;
    let theta = manifold.g_orthonormalize(&v)?;
    let floor = delta * T::lit(2.0);
    let lambda = DVector::from_fn(rank, |j, _| eig.eigenvalues[order[j]].max(floor));

    let mut rss = T::zero();
    let mut dof = 0usize;
    for d in &designs {
        let m = d.y.len();
        if m <= rank {
            continue;
        }
        let u = &d.basis * theta.matrix();
        let ridge_eye = DMatrix::<T>::identity(rank, rank) * T::lit(1e-10);
        let Some(chol) = (u.transpose() * &u + ridge_eye).cholesky() else {
            continue;
        };
        let s = chol.solve(&(u.transpose() * &d.y));
        rss += (&d.y - &u * s).norm_squared();
        dof += m - rank;
    }
    let sigma2 = if dof > 0 {
        (rss / T::from_usize_lossy(dof)).max(floor)
    } else {
        floor
    };
    let start = ModelParams::from_variances(theta, &lambda, sigma2, delta)?;
    let refined = refine_batch(
        &designs,
        manifold,
        start,
        None,
        T::zero(),
        INIT_REFINE_ITERS,
    )?;
    sort_components(manifold, refined)
}

/// Full-batch descent iterations run by [`batch_init`].
pub const INIT_REFINE_ITERS: usize = 300;

/// Full-batch Riemannian gradient descent on the mean discrepancy of
/// `designs` plus `τ tr(ΘᵀPΘ)` when a penalty is given.
///
/// Steps follow alternating Barzilai–Borwein lengths under a nonmonotone
/// (Zhang–Hager) Armijo condition; the within-span rotation modes are badly
/// conditioned and plain backtracking crawls along them.
pub fn refine_batch<T: Scalar>(
    designs: &[DesignedSubject<T>],
    manifold: &GeneralizedStiefel<T>,
    start: ModelParams<T>,
    penalty: Option<&DMatrix<T>>,
    tau: T,
    max_iter: usize,
) -> Result<ModelParams<T>> {
    let armijo = T::lit(1e-4);
    let memory = T::lit(0.85);
    let (t_min, t_max) = (T::lit(1e-10), T::lit(1e10));
    let mut params = start;
    let mut eval = evaluate(designs, &params, penalty, tau)?;
    let mut s = manifold
        .riemannian_grad(&params.theta, &eval.grads.d_theta)?
        .into_matrix();
    let mut reference = eval.total();
    let mut weight = T::one();
    let mut t = T::one();
    for iter in 0..max_iter {
        let gsq = manifold.norm(&s).powi(2)
            + eval.grads.d_eta.norm_squared()
            + eval.grads.d_zeta * eval.grads.d_zeta;
        if !(gsq > T::lit(1e-24) * (T::one() + eval.total().abs())) {
            break;
        }
        let mut next = None;
        for _ in 0..60 {
            let theta = match manifold.retract(&params.theta, &s, -t) {
                Ok(th) => th,
                Err(FpcaError::Step(_)) => {
                    t *= T::lit(0.5);
                    continue;
                }
                Err(e) => return Err(e),
            };
            let cand = ModelParams {
                theta,
                eta: &params.eta - &eval.grads.d_eta * t,
                zeta: params.zeta - eval.grads.d_zeta * t,
                delta: params.delta,
            };
            match evaluate(designs, &cand, penalty, tau) {
                Ok(e) if e.total() <= reference - armijo * t * gsq => {
                    next = Some((cand, e));
                    break;
                }
                _ => t *= T::lit(0.5),
            }
        }
        let Some((cand, e)) = next else { break };
        let s_new = manifold
            .riemannian_grad(&cand.theta, &e.grads.d_theta)?
            .into_matrix();

        let dx_theta = cand.theta.matrix() - params.theta.matrix();
        let dg_theta = &s_new - &s;
        let dx_eta = &cand.eta - &params.eta;
        let dg_eta = &e.grads.d_eta - &eval.grads.d_eta;
        let (dx_zeta, dg_zeta) = (cand.zeta - params.zeta, e.grads.d_zeta - eval.grads.d_zeta);
        let sy = manifold.inner(&dx_theta, &dg_theta) + dx_eta.dot(&dg_eta) + dx_zeta * dg_zeta;
        let ss = manifold.norm(&dx_theta).powi(2) + dx_eta.norm_squared() + dx_zeta * dx_zeta;
        let yy = manifold.norm(&dg_theta).powi(2) + dg_eta.norm_squared() + dg_zeta * dg_zeta;
        let bb = if iter % 2 == 0 {
            ss / sy.abs()
        } else {
            sy.abs() / yy
        };
        t = if bb.is_finite_value() && bb > T::zero() {
            bb.max(t_min).min(t_max)
        } else {
            t * T::lit(2.0)
        };

        let next_weight = memory * weight + T::one();
        reference = (memory * weight * reference + e.total()) / next_weight;
        weight = next_weight;
        params = cand;
        eval = e;
        s = s_new;
    }
    Ok(params)
}

/// Reorders components by decreasing `λ`.
pub fn sort_components<T: Scalar>(
    manifold: &GeneralizedStiefel<T>,
    params: ModelParams<T>,
) -> Result<ModelParams<T>> {
    let r = params.rank();
    let mut order: Vec<usize> = (0..r).collect();
    order.sort_by(|&a, &b| {
        params.eta[b]
            .partial_cmp(&params.eta[a])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    if order.iter().enumerate().all(|(i, &j)| i == j) {
        return Ok(params);
    }
    let th = params.theta.matrix();
    let theta = DMatrix::from_fn(th.nrows(), r, |i, j| th[(i, order[j])]);
    Ok(ModelParams {
        theta: manifold.point(theta)?,
        eta: DVector::from_fn(r, |j, _| params.eta[order[j]]),
        zeta: params.zeta,
        delta: params.delta,
    })
}
