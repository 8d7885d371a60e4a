//! Accuracy against known eigenfunctions, covariance reconstruction and
//! convergence traces.

use std::io::Write;

use nalgebra::{DMatrix, DVector};

use crate::basis::SplineSpace;
use crate::error::{FpcaError, Result};
use crate::manifold::StiefelPoint;
use crate::scalar::Scalar;
use crate::tuning::StepRecord;

/// Smoothing factor of the gradient-norm trace.
pub const DIAGNOSTIC_SMOOTHING: f64 = 0.99;

/// Grid points per axis used by [`fpc_rmse`] when none is given.
pub fn default_resolution(dims: usize) -> usize {
    if dims == 1 {
        201
    } else {
        101
    }
}

/// Eigen-decomposition of a known covariance.
pub trait FpcTruth {
    fn domain(&self) -> Vec<(f64, f64)>;
    fn components(&self) -> usize;
    /// `λ_r`, zero-based.
    fn eigenvalue(&self, r: usize) -> f64;
    /// `φ_r(x)`, zero-based.
    fn eigenfunction(&self, r: usize, x: &[f64]) -> f64;
}

/// Estimated components `φ̂_r = θ_rᵀ b` with their variances.
#[derive(Debug, Clone)]
pub struct FpcEstimate<T: Scalar> {
    pub space: SplineSpace<T>,
    pub theta: StiefelPoint<T>,
    pub lambda: DVector<T>,
    pub sigma2: T,
}

impl<T: Scalar> FpcEstimate<T> {
    pub fn new(
        space: SplineSpace<T>,
        theta: StiefelPoint<T>,
        lambda: DVector<T>,
        sigma2: T,
    ) -> Result<Self> {
        if theta.basis_len() != space.len() {
            return Err(FpcaError::Argument(format!(
                "{} coefficient rows for a basis of {}",
                theta.basis_len(),
                space.len()
            )));
        }
        if lambda.len() != theta.rank() {
            return Err(FpcaError::Argument(format!(
                "{} eigenvalues for rank {}",
                lambda.len(),
                theta.rank()
            )));
        }
        Ok(Self {
            space,
            theta,
            lambda,
            sigma2,
        })
    }

    pub fn rank(&self) -> usize {
        self.theta.rank()
    }

    /// `(φ̂_1(x), …, φ̂_R(x))`.
    pub fn components_at(&self, x: &[T]) -> Result<DVector<T>> {
        Ok(self.components_on(x)?.row(0).transpose())
    }

    /// Components on `points` (flat, `d` coordinates each); one row per point.
    pub fn components_on(&self, points: &[T]) -> Result<DMatrix<T>> {
        Ok(self.space.basis_matrix(points)? * self.theta.matrix())
    }
}

/// Regular grid with `resolution` points per axis including the bounds,
/// flattened with the first coordinate varying slowest.
pub fn grid(domain: &[(f64, f64)], resolution: usize) -> Vec<f64> {
    let d = domain.len();
    let total = resolution.pow(d as u32);
    let step = |(lo, hi): (f64, f64), i: usize| {
        if resolution == 1 {
            lo
        } else if i + 1 == resolution {
            hi
        } else {
            lo + (hi - lo) * i as f64 / (resolution - 1) as f64
        }
    };
    let mut out = Vec::with_capacity(total * d);
    for flat in 0..total {
        let mut rem = flat;
        let mut point = vec![0.0; d];
        for j in (0..d).rev() {
            point[j] = step(domain[j], rem % resolution);
            rem /= resolution;
        }
        out.extend(point);
    }
    out
}

/// Root mean square of `s·φ̂_r − φ_r` over the grid, minimized over the sign `s`.
pub fn fpc_rmse<T: Scalar>(
    estimate: &FpcEstimate<T>,
    truth: &dyn FpcTruth,
    resolution: Option<usize>,
) -> Result<Vec<f64>> {
    let r = estimate.rank();
    if r > truth.components() {
        return Err(FpcaError::Argument(format!(
            "estimate has {r} components, truth only {}",
            truth.components()
        )));
    }
    let domain = truth.domain();
    let bounds = estimate.space.bounds();
    if domain.len() != bounds.len()
        || domain.iter().zip(&bounds).any(|(a, b)| {
            (a.0 - b.0.to_f64_lossy()).abs() > 1e-12 || (a.1 - b.1.to_f64_lossy()).abs() > 1e-12
        })
    {
        return Err(FpcaError::Argument(
            "estimate and truth live on different domains".into(),
        ));
    }
    let res = resolution.unwrap_or_else(|| default_resolution(domain.len()));
    let pts = grid(&domain, res);
    let d = domain.len();
    let tpts: Vec<T> = pts.iter().map(|&x| T::lit(x)).collect();
    let est = estimate.components_on(&tpts)?;
    let n = pts.len() / d;
    Ok((0..r)
        .map(|c| {
            let (mut plus, mut minus) = (0.0, 0.0);
            for (i, x) in pts.chunks(d).enumerate() {
                let f = truth.eigenfunction(c, x);
                let g = est[(i, c)].to_f64_lossy();
                plus += (g - f) * (g - f);
                minus += (g + f) * (g + f);
            }
            (plus.min(minus) / n as f64).sqrt()
        })
        .collect())
}

/// `Σ_r λ_r φ̂_r(s) φ̂_r(t)`.
pub fn reconstruct_covariance<T: Scalar>(estimate: &FpcEstimate<T>, s: &[T], t: &[T]) -> Result<T> {
    let a = estimate.components_at(s)?;
    let b = estimate.components_at(t)?;
    Ok(a.iter()
        .zip(b.iter())
        .zip(estimate.lambda.iter())
        .fold(T::zero(), |acc, ((x, y), l)| acc + *l * *x * *y))
}

/// One row of the metrics trace.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagnosticRow<T: Scalar> {
    pub step: usize,
    /// Exponentially smoothed `‖S_k^Θ‖`.
    pub grad_norm: T,
    pub v_score: T,
    pub tau: T,
    pub lambda: DVector<T>,
    pub sigma2: T,
}

/// Smooths the gradient norms of `history`; the first row starts the average.
pub fn diagnostics<T: Scalar>(history: &[StepRecord<T>]) -> Result<Vec<DiagnosticRow<T>>> {
    if history.is_empty() {
        return Err(FpcaError::Argument("empty step history".into()));
    }
    let w = T::lit(DIAGNOSTIC_SMOOTHING);
    let mut smooth = history[0].grad_norm;
    Ok(history
        .iter()
        .map(|h| {
            smooth = w * smooth + (T::one() - w) * h.grad_norm;
            DiagnosticRow {
                step: h.step,
                grad_norm: smooth,
                v_score: h.score,
                tau: h.tau,
                lambda: h.lambda.clone(),
                sigma2: h.sigma2,
            }
        })
        .collect())
}

/// Writes `step,grad_norm,v_score,tau,lambda_1..R,sigma2`.
pub fn write_metrics_csv<T: Scalar, W: Write>(rows: &[DiagnosticRow<T>], mut out: W) -> Result<()> {
    let r = rows.first().map_or(0, |row| row.lambda.len());
    let mut header = String::from("step,grad_norm,v_score,tau");
    for i in 1..=r {
        header.push_str(&format!(",lambda_{i}"));
    }
    header.push_str(",sigma2\n");
    out.write_all(header.as_bytes())?;
    for row in rows {
        let mut line = format!(
            "{},{:e},{:e},{:e}",
            row.step, row.grad_norm, row.v_score, row.tau
        );
        for l in row.lambda.iter() {
            line.push_str(&format!(",{l:e}"));
        }
        line.push_str(&format!(",{:e}\n", row.sigma2));
        out.write_all(line.as_bytes())?;
    }
    out.flush()?;
    Ok(())
}
