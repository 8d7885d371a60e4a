//! Generalized Stiefel manifold `St_G(R, p) = {Θ : ΘᵀGΘ = I_R}`.
//!
//! The metric is `⟨ξ, η⟩ = tr(ξᵀGη)`. Under it the tangent space at `Θ` is
//! `{ξ : sym(ΘᵀGξ) = 0}` and the orthogonal projection is
//! `P_Θ(ξ) = ξ - Θ sym(ΘᵀGξ)`. Retraction is Cholesky-QR in the `G` inner
//! product: `Y = Θ + sξ`, `YᵀGY = LLᵀ`, `R_Θ(sξ) = Y L⁻ᵀ`.

use nalgebra::{Cholesky, DMatrix, Dyn};

use crate::error::{FpcaError, Result};
use crate::scalar::Scalar;

/// Halvings attempted by [`GeneralizedStiefel::retract_with_backoff`].
pub const MAX_STEP_HALVINGS: usize = 10;

/// Residual above which a base point is rejected as infeasible.
pub fn infeasible_tolerance<T: Scalar>() -> T {
    T::lit(1e-6f64.max(T::EPS.sqrt() * 10.0))
}

/// Hard feasibility bound kept by every produced point.
pub fn feasibility_tolerance<T: Scalar>() -> T {
    T::lit(1e-8f64.max(T::EPS * 1e3))
}

/// A `p×R` coefficient matrix on the manifold.
#[derive(Debug, Clone, PartialEq)]
pub struct StiefelPoint<T: Scalar> {
    theta: DMatrix<T>,
}

impl<T: Scalar> StiefelPoint<T> {
    pub fn matrix(&self) -> &DMatrix<T> {
        &self.theta
    }

    pub fn into_matrix(self) -> DMatrix<T> {
        self.theta
    }

    pub fn rank(&self) -> usize {
        self.theta.ncols()
    }

    pub fn basis_len(&self) -> usize {
        self.theta.nrows()
    }
}

/// A tangent direction at some base point.
#[derive(Debug, Clone, PartialEq)]
pub struct TangentVector<T: Scalar> {
    xi: DMatrix<T>,
}

impl<T: Scalar> TangentVector<T> {
    pub fn matrix(&self) -> &DMatrix<T> {
        &self.xi
    }

    pub fn into_matrix(self) -> DMatrix<T> {
        self.xi
    }

    pub fn zeros_like(point: &StiefelPoint<T>) -> Self {
        Self {
            xi: DMatrix::zeros(point.basis_len(), point.rank()),
        }
    }
}

fn sym<T: Scalar>(a: &DMatrix<T>) -> DMatrix<T> {
    (a + a.transpose()) * T::lit(0.5)
}

/// The manifold together with its Gram matrix and cached Cholesky factor.
#[derive(Debug, Clone)]
pub struct GeneralizedStiefel<T: Scalar> {
    gram: DMatrix<T>,
    gram_chol: Cholesky<T, Dyn>,
}

impl<T: Scalar> GeneralizedStiefel<T> {
    pub fn new(gram: DMatrix<T>) -> Result<Self> {
        if !gram.is_square() {
            return Err(FpcaError::Argument("Gram matrix must be square".into()));
        }
        let gram_chol = gram
            .clone()
            .cholesky()
            .ok_or_else(|| FpcaError::Numerical("Gram matrix is not positive definite".into()))?;
        Ok(Self { gram, gram_chol })
    }

    pub fn gram(&self) -> &DMatrix<T> {
        &self.gram
    }

    pub fn dim(&self) -> usize {
        self.gram.nrows()
    }

    /// `‖ΘᵀGΘ − I‖_F`.
    pub fn residual(&self, theta: &DMatrix<T>) -> T {
        let r = theta.ncols();
        (theta.transpose() * &self.gram * theta - DMatrix::identity(r, r)).norm()
    }

    /// `‖sym(ΘᵀGξ)‖_F`, zero for tangent vectors.
    pub fn tangency_residual(&self, point: &StiefelPoint<T>, xi: &DMatrix<T>) -> T {
        sym(&(point.theta.transpose() * &self.gram * xi)).norm()
    }

    pub fn inner(&self, a: &DMatrix<T>, b: &DMatrix<T>) -> T {
        (a.transpose() * &self.gram * b).trace()
    }

    pub fn norm(&self, a: &DMatrix<T>) -> T {
        self.inner(a, a).max(T::zero()).sqrt()
    }

    /// Wraps a matrix as a point after checking feasibility.
    pub fn point(&self, theta: DMatrix<T>) -> Result<StiefelPoint<T>> {
        self.check_shape(&theta)?;
        let res = self.residual(&theta);
        if !(res < feasibility_tolerance::<T>()) {
            return Err(FpcaError::State(format!(
                "matrix is not on the manifold (residual {res:e})"
            )));
        }
        Ok(StiefelPoint { theta })
    }

    fn check_shape(&self, m: &DMatrix<T>) -> Result<()> {
        if m.nrows() != self.dim() {
            return Err(FpcaError::Argument(format!(
                "matrix has {} rows, manifold dimension is {}",
                m.nrows(),
                self.dim()
            )));
        }
        Ok(())
    }

    fn check_base(&self, point: &StiefelPoint<T>) -> Result<()> {
        let res = self.residual(&point.theta);
        if !(res < infeasible_tolerance::<T>()) {
            return Err(FpcaError::State(format!(
                "base point is infeasible (residual {res:e})"
            )));
        }
        Ok(())
    }

    fn project_unchecked(&self, theta: &DMatrix<T>, xi: &DMatrix<T>) -> DMatrix<T> {
        let s = sym(&(theta.transpose() * &self.gram * xi));
        xi - theta * s
    }

    /// Orthogonal projection onto the tangent space at `point`.
    pub fn project_tangent(
        &self,
        point: &StiefelPoint<T>,
        xi: &DMatrix<T>,
    ) -> Result<TangentVector<T>> {
        self.check_base(point)?;
        if xi.shape() != point.theta.shape() {
            return Err(FpcaError::Argument(
                "direction shape differs from base point".into(),
            ));
        }
        Ok(TangentVector {
            xi: self.project_unchecked(&point.theta, xi),
        })
    }

    /// Riemannian gradient `P_Θ(G⁻¹ ∂f)` from a Euclidean gradient.
    pub fn riemannian_grad(
        &self,
        point: &StiefelPoint<T>,
        euclid_grad: &DMatrix<T>,
    ) -> Result<TangentVector<T>> {
        if euclid_grad.shape() != point.theta.shape() {
            return Err(FpcaError::Argument(
                "gradient shape differs from base point".into(),
            ));
        }
        let scaled = self.gram_chol.solve(euclid_grad);
        self.project_tangent(point, &scaled)
    }

    /// Cholesky-QR retraction of `scale · direction` at `point`.
    ///
    /// `direction` need not be tangent; the result is feasible either way.
    pub fn retract(
        &self,
        point: &StiefelPoint<T>,
        direction: &DMatrix<T>,
        scale: T,
    ) -> Result<StiefelPoint<T>> {
        self.check_base(point)?;
        if direction.shape() != point.theta.shape() {
            return Err(FpcaError::Argument(
                "direction shape differs from base point".into(),
            ));
        }
        if scale == T::zero() || direction.iter().all(|v| *v == T::zero()) {
            return Ok(point.clone());
        }
        let y = &point.theta + direction * scale;
        self.orthonormalize(y).map_err(|e| match e {
            FpcaError::Rank(msg) => FpcaError::Step(msg),
            other => other,
        })
    }

    /// [`retract`](Self::retract), halving `scale` on failure.
    ///
    /// Returns the new point and the number of halvings used.
    pub fn retract_with_backoff(
        &self,
        point: &StiefelPoint<T>,
        direction: &DMatrix<T>,
        scale: T,
    ) -> Result<(StiefelPoint<T>, usize)> {
        let mut s = scale;
        let mut last = None;
        for halvings in 0..=MAX_STEP_HALVINGS {
            match self.retract(point, direction, s) {
                Ok(p) => return Ok((p, halvings)),
                Err(FpcaError::Step(msg)) => last = Some(msg),
                Err(e) => return Err(e),
            }
            s *= T::lit(0.5);
        }
        Err(FpcaError::Step(format!(
            "retraction failed after {MAX_STEP_HALVINGS} halvings: {}",
            last.unwrap_or_default()
        )))
    }

    /// First-order inverse retraction `P_base(target − base)`.
    pub fn inverse_retract_approx(
        &self,
        base: &StiefelPoint<T>,
        target: &StiefelPoint<T>,
    ) -> Result<TangentVector<T>> {
        self.check_base(target)?;
        self.project_tangent(base, &(&target.theta - &base.theta))
    }

    /// `M L⁻ᵀ` with `LLᵀ = MᵀGM`; same column space as `M`.
    pub fn g_orthonormalize(&self, m: &DMatrix<T>) -> Result<StiefelPoint<T>> {
        self.check_shape(m)?;
        self.orthonormalize(m.clone())
    }

    /// Cholesky-QR, repeated once when the first pass leaves a visible residual.
    fn orthonormalize(&self, mut y: DMatrix<T>) -> Result<StiefelPoint<T>> {
        for _ in 0..3 {
            y = self.cholesky_qr_pass(&y)?;
            if self.residual(&y) < feasibility_tolerance::<T>() * T::lit(1e-2) {
                return Ok(StiefelPoint { theta: y });
            }
        }
        let res = self.residual(&y);
        if res < feasibility_tolerance::<T>() {
            Ok(StiefelPoint { theta: y })
        } else {
            Err(FpcaError::Rank(format!(
                "orthonormalization left residual {res:e}"
            )))
        }
    }

    fn cholesky_qr_pass(&self, y: &DMatrix<T>) -> Result<DMatrix<T>> {
        let a = y.transpose() * &self.gram * y;
        let a = sym(&a);
        if a.iter().any(|v| !v.is_finite_value()) {
            return Err(FpcaError::Rank("non-finite entries".into()));
        }
        let chol = a
            .clone()
            .cholesky()
            .ok_or_else(|| FpcaError::Rank("YᵀGY is not positive definite".into()))?;
        let l = chol.l();
        let diag_max = l.diagonal().amax();
        let diag_min = l
            .diagonal()
            .iter()
            .fold(diag_max, |acc, v| acc.min(v.abs()));
        if !(diag_min > diag_max * T::lit(T::EPS.sqrt())) {
            return Err(FpcaError::Rank(
                "columns are numerically linearly dependent".into(),
            ));
        }
        let x = l
            .solve_lower_triangular(&y.transpose())
            .ok_or_else(|| FpcaError::Rank("singular Cholesky factor".into()))?;
        Ok(x.transpose())
    }
}
