//! Marginal and tensor-product B-spline bases.
//!
//! Tensor products are flattened with dimension 1 varying slowest: for a 2D
//! space with marginal counts `(p1, p2)` the basis function `(i1, i2)` lives at
//! flat index `i1 * p2 + i2`. The Gram matrix, the penalty and every basis row
//! use this ordering.
//!
//! Gram and penalty entries are integrated exactly with per-interval
//! Gauss-Legendre rules. The roughness penalty is the tensor-product sandwich
//!
//! ```text
//! P = sum_j  G_1 ⊗ ... ⊗ G_{j-1} ⊗ P_j ⊗ G_{j+1} ⊗ ... ⊗ G_d,   P_j = ∫ b_j'' b_j''ᵀ
//! ```

use nalgebra::{DMatrix, DVector};

use crate::error::{FpcaError, Result};
use crate::scalar::Scalar;

/// Gauss-Legendre nodes and weights on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1, "need at least one node");
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let nf = n as f64;
    for i in 0..n.div_ceil(2) {
        // Chebyshev-style initial guess, refined by Newton on P_n.
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (nf + 0.5)).cos();
        let mut dp = 1.0;
        for _ in 0..100 {
            let (p, d) = legendre_with_derivative(n, x);
            dp = d;
            let dx = p / d;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let (_, d) = legendre_with_derivative(n, x);
        if d != 0.0 {
            dp = d;
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

fn legendre_with_derivative(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

/// One-dimensional clamped B-spline basis on `[lower, upper]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginalSpline<T: Scalar> {
    degree: usize,
    lower: T,
    upper: T,
    inner_knots: usize,
    knots: Vec<T>,
}

impl<T: Scalar> MarginalSpline<T> {
    /// Clamped basis with `inner_knots` equally spaced interior knots.
    pub fn uniform(lower: T, upper: T, inner_knots: usize, degree: usize) -> Result<Self> {
        if !(lower.is_finite_value() && upper.is_finite_value()) {
            return Err(FpcaError::Config("interval bounds must be finite".into()));
        }
        if lower >= upper {
            return Err(FpcaError::Config(format!(
                "interval [{lower}, {upper}] is empty or inverted"
            )));
        }
        let mut knots = Vec::with_capacity(inner_knots + 2 * (degree + 1));
        knots.extend(std::iter::repeat_n(lower, degree + 1));
        let width = upper - lower;
        let pieces = T::from_usize_lossy(inner_knots + 1);
        for j in 1..=inner_knots {
            knots.push(lower + width * T::from_usize_lossy(j) / pieces);
        }
        knots.extend(std::iter::repeat_n(upper, degree + 1));
        Ok(Self {
            degree,
            lower,
            upper,
            inner_knots,
            knots,
        })
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn inner_knots(&self) -> usize {
        self.inner_knots
    }

    pub fn knots(&self) -> &[T] {
        &self.knots
    }

    pub fn bounds(&self) -> (T, T) {
        (self.lower, self.upper)
    }

    /// Number of basis functions, `inner_knots + degree + 1`.
    pub fn len(&self) -> usize {
        self.inner_knots + self.degree + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, t: T) -> bool {
        t >= self.lower && t <= self.upper
    }

    /// Index `i` of the knot span `[knots[i], knots[i+1])` holding `t`;
    /// the right endpoint belongs to the last nonempty span.
    fn span(&self, t: T) -> usize {
        let n = self.len();
        if t >= self.knots[n] {
            return n - 1;
        }
        let (mut lo, mut hi) = (self.degree, n);
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if t < self.knots[mid] {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        lo
    }

    /// Nonzero basis functions and their derivatives up to `order` at `t`.
    ///
    /// Returns the index of the first nonzero function and a table
    /// `ders[k][j]` holding the `k`-th derivative of basis `first + j`.
    /// Derivatives above the degree are zero.
    pub fn local_derivatives(&self, t: T, order: usize) -> (usize, Vec<Vec<T>>) {
        let p = self.degree;
        let i = self.span(t);
        let u = &self.knots;
        let zero = T::zero();
        let one = T::one();

        let mut ndu = vec![vec![zero; p + 1]; p + 1];
        let mut left = vec![zero; p + 1];
        let mut right = vec![zero; p + 1];
        ndu[0][0] = one;
        for j in 1..=p {
            left[j] = t - u[i + 1 - j];
            right[j] = u[i + j] - t;
            let mut saved = zero;
            for r in 0..j {
                ndu[j][r] = right[r + 1] + left[j - r];
                let temp = ndu[r][j - 1] / ndu[j][r];
                ndu[r][j] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            ndu[j][j] = saved;
        }

        let mut ders = vec![vec![zero; p + 1]; order + 1];
        for j in 0..=p {
            ders[0][j] = ndu[j][p];
        }
        let n = order.min(p);
        let pi = p as isize;
        let mut a = vec![vec![zero; p + 1]; 2];
        for r in 0..=pi {
            let (mut s1, mut s2) = (0usize, 1usize);
            a[0][0] = one;
            for k in 1..=n as isize {
                let mut d = zero;
                let rk = r - k;
                let pk = pi - k;
                if r >= k {
                    a[s2][0] = a[s1][0] / ndu[(pk + 1) as usize][rk as usize];
                    d = a[s2][0] * ndu[rk as usize][pk as usize];
                }
                let j1 = if rk >= -1 { 1 } else { -rk };
                let j2 = if r - 1 <= pk { k - 1 } else { pi - r };
                for j in j1..=j2 {
                    let (ju, rkj) = (j as usize, (rk + j) as usize);
                    a[s2][ju] = (a[s1][ju] - a[s1][ju - 1]) / ndu[(pk + 1) as usize][rkj];
                    d += a[s2][ju] * ndu[rkj][pk as usize];
                }
                if r <= pk {
                    let ku = k as usize;
                    a[s2][ku] = -a[s1][ku - 1] / ndu[(pk + 1) as usize][r as usize];
                    d += a[s2][ku] * ndu[r as usize][pk as usize];
                }
                ders[k as usize][r as usize] = d;
                std::mem::swap(&mut s1, &mut s2);
            }
        }
        let mut factor = T::from_usize_lossy(p);
        for (k, row) in ders.iter_mut().enumerate().take(n + 1).skip(1) {
            for v in row.iter_mut() {
                *v *= factor;
            }
            factor *= T::from_usize_lossy(p - k);
        }
        (i - p, ders)
    }

    /// All basis values at `t` (length [`len`](Self::len)).
    pub fn eval(&self, t: T) -> Result<DVector<T>> {
        self.eval_derivative(t, 0)
    }

    /// `order`-th derivative of every basis function at `t`.
    pub fn eval_derivative(&self, t: T, order: usize) -> Result<DVector<T>> {
        if !self.contains(t) {
            return Err(FpcaError::Domain {
                point: vec![t.to_f64_lossy()],
                row: None,
            });
        }
        let (first, ders) = self.local_derivatives(t, order);
        let mut out = DVector::zeros(self.len());
        for (j, v) in ders[order].iter().enumerate() {
            out[first + j] = *v;
        }
        Ok(out)
    }

    /// Exact `∫ b^(order) b^(order)ᵀ` over the interval.
    pub fn integrated_products(&self, order: usize) -> DMatrix<T> {
        let p = self.degree;
        let n = self.len();
        let (nodes, weights) = gauss_legendre((2 * p + 3).div_ceil(2));
        let half = T::lit(0.5);
        let mut out = DMatrix::zeros(n, n);
        for span in p..n {
            let (a, b) = (self.knots[span], self.knots[span + 1]);
            if b <= a {
                continue;
            }
            let mid = (a + b) * half;
            let rad = (b - a) * half;
            for (x, w) in nodes.iter().zip(&weights) {
                let t = mid + rad * T::lit(*x);
                let wt = rad * T::lit(*w);
                let (first, ders) = self.local_derivatives(t, order);
                let row = &ders[order];
                for (ja, va) in row.iter().enumerate() {
                    for (jb, vb) in row.iter().enumerate() {
                        out[(first + ja, first + jb)] += wt * *va * *vb;
                    }
                }
            }
        }
        out
    }
}

/// Tensor-product spline space with precomputed Gram and penalty matrices.
#[derive(Debug, Clone)]
pub struct SplineSpace<T: Scalar> {
    marginals: Vec<MarginalSpline<T>>,
    gram: DMatrix<T>,
    penalty: Option<DMatrix<T>>,
}

impl<T: Scalar> SplineSpace<T> {
    /// Builds the space over a product of intervals with equally spaced
    /// interior knots. The penalty is only available for `degree >= 2`.
    pub fn new(domain: &[(T, T)], inner_knots: &[usize], degree: usize) -> Result<Self> {
        if domain.is_empty() {
            return Err(FpcaError::Config(
                "domain must have at least one dimension".into(),
            ));
        }
        if domain.len() != inner_knots.len() {
            return Err(FpcaError::Config(format!(
                "domain has {} dimensions but {} inner-knot counts were given",
                domain.len(),
                inner_knots.len()
            )));
        }
        let marginals = domain
            .iter()
            .zip(inner_knots)
            .map(|(&(a, b), &k)| MarginalSpline::uniform(a, b, k, degree))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::from_marginals(marginals))
    }

    pub fn from_marginals(marginals: Vec<MarginalSpline<T>>) -> Self {
        let grams: Vec<DMatrix<T>> = marginals.iter().map(|m| m.integrated_products(0)).collect();
        let gram = kron_all(&grams);
        let degree = marginals.iter().map(|m| m.degree()).min().unwrap_or(0);
        let penalty = (degree >= 2).then(|| {
            let rough: Vec<DMatrix<T>> =
                marginals.iter().map(|m| m.integrated_products(2)).collect();
            let mut total: Option<DMatrix<T>> = None;
            for j in 0..marginals.len() {
                let factors: Vec<DMatrix<T>> = (0..marginals.len())
                    .map(|l| {
                        if l == j {
                            rough[l].clone()
                        } else {
                            grams[l].clone()
                        }
                    })
                    .collect();
                let term = kron_all(&factors);
                total = Some(match total {
                    Some(acc) => acc + term,
                    None => term,
                });
            }
            let p = total.expect("at least one dimension");
            (&p + p.transpose()) * T::lit(0.5)
        });
        let gram = (&gram + gram.transpose()) * T::lit(0.5);
        Self {
            marginals,
            gram,
            penalty,
        }
    }

    pub fn dims(&self) -> usize {
        self.marginals.len()
    }

    pub fn marginals(&self) -> &[MarginalSpline<T>] {
        &self.marginals
    }

    pub fn degree(&self) -> usize {
        self.marginals[0].degree()
    }

    /// Total number of tensor-product basis functions.
    pub fn len(&self) -> usize {
        self.marginals.iter().map(|m| m.len()).product()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn bounds(&self) -> Vec<(T, T)> {
        self.marginals.iter().map(|m| m.bounds()).collect()
    }

    pub fn contains(&self, t: &[T]) -> bool {
        t.len() == self.dims() && self.marginals.iter().zip(t).all(|(m, &x)| m.contains(x))
    }

    pub fn gram(&self) -> &DMatrix<T> {
        &self.gram
    }

    /// Roughness penalty; a configuration error when the degree is below 2.
    pub fn penalty(&self) -> Result<&DMatrix<T>> {
        self.penalty.as_ref().ok_or_else(|| {
            FpcaError::Config(format!(
                "second-derivative penalty needs degree >= 2, space has degree {}",
                self.degree()
            ))
        })
    }

    fn check_point(&self, t: &[T], row: Option<usize>) -> Result<()> {
        if self.contains(t) {
            Ok(())
        } else {
            Err(FpcaError::Domain {
                point: t.iter().map(|x| x.to_f64_lossy()).collect(),
                row,
            })
        }
    }

    /// Calls `f(flat_index, value)` for every basis function that is nonzero at `t`.
    fn for_each_nonzero(&self, t: &[T], mut f: impl FnMut(usize, T)) {
        let local: Vec<(usize, Vec<T>)> = self
            .marginals
            .iter()
            .zip(t)
            .map(|(m, &x)| {
                let (first, mut d) = m.local_derivatives(x, 0);
                (first, d.swap_remove(0))
            })
            .collect();
        let sizes: Vec<usize> = self.marginals.iter().map(|m| m.len()).collect();
        let mut counter = vec![0usize; local.len()];
        loop {
            let mut idx = 0usize;
            let mut val = T::one();
            for (j, (first, vals)) in local.iter().enumerate() {
                idx = idx * sizes[j] + first + counter[j];
                val *= vals[counter[j]];
            }
            f(idx, val);
            let mut j = local.len();
            loop {
                if j == 0 {
                    return;
                }
                j -= 1;
                counter[j] += 1;
                if counter[j] < local[j].1.len() {
                    break;
                }
                counter[j] = 0;
            }
        }
    }

    /// Basis vector `b(t)`.
    pub fn eval(&self, t: &[T]) -> Result<DVector<T>> {
        if t.len() != self.dims() {
            return Err(FpcaError::Argument(format!(
                "point has {} coordinates, space has {} dimensions",
                t.len(),
                self.dims()
            )));
        }
        self.check_point(t, None)?;
        let mut out = DVector::zeros(self.len());
        self.for_each_nonzero(t, |i, v| out[i] = v);
        Ok(out)
    }

    /// Basis matrix with one row per location (`locations.len() / dims` rows,
    /// coordinates stored contiguously per point).
    pub fn basis_matrix(&self, locations: &[T]) -> Result<DMatrix<T>> {
        let d = self.dims();
        if !locations.len().is_multiple_of(d) {
            return Err(FpcaError::Argument(format!(
                "{} coordinates cannot be split into {d}-dimensional points",
                locations.len()
            )));
        }
        let m = locations.len() / d;
        let mut out = DMatrix::zeros(m, self.len());
        for (row, t) in locations.chunks_exact(d).enumerate() {
            self.check_point(t, Some(row))?;
            self.for_each_nonzero(t, |i, v| out[(row, i)] = v);
        }
        Ok(out)
    }
}

/// Kronecker product of the factors, first factor varying slowest.
pub fn kron_all<T: Scalar>(factors: &[DMatrix<T>]) -> DMatrix<T> {
    let mut iter = factors.iter();
    let first = iter.next().expect("at least one factor").clone();
    iter.fold(first, |acc, f| acc.kronecker(f))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn unit(inner: usize, degree: usize) -> SplineSpace<f64> {
        SplineSpace::new(&[(0.0, 1.0)], &[inner], degree).unwrap()
    }

    #[test]
    fn gauss_legendre_integrates_polynomials() {
        for n in 1..8 {
            let (x, w) = gauss_legendre(n);
            for deg in 0..(2 * n) {
                let approx: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(deg as i32)).sum();
                let exact = if deg % 2 == 1 {
                    0.0
                } else {
                    2.0 / (deg as f64 + 1.0)
                };
                assert_abs_diff_eq!(approx, exact, epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn basis_counts() {
        assert_eq!(unit(5, 3).len(), 9);
        assert_eq!(unit(1, 1).len(), 3);
        let s2 = SplineSpace::new(&[(0.0, 1.0), (0.0, 1.0)], &[5, 5], 3).unwrap();
        assert_eq!(s2.len(), 81);
        assert_eq!(s2.gram().nrows(), 81);
    }

    #[test]
    fn rejects_bad_domains() {
        assert!(matches!(
            SplineSpace::<f64>::new(&[], &[], 3),
            Err(FpcaError::Config(_))
        ));
        assert!(SplineSpace::new(&[(1.0, 0.0)], &[5], 3).is_err());
        assert!(SplineSpace::new(&[(0.5, 0.5)], &[5], 3).is_err());
        assert!(SplineSpace::new(&[(0.0, 1.0)], &[5, 5], 3).is_err());
    }

    #[test]
    fn knot_vector_layout() {
        let m = MarginalSpline::uniform(0.0, 1.0, 1, 2).unwrap();
        assert_eq!(m.knots(), &[0.0, 0.0, 0.0, 0.5, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn linear_hat_values() {
        let s = unit(1, 1);
        assert_eq!(s.eval(&[0.0]).unwrap().as_slice(), &[1.0, 0.0, 0.0]);
        assert_eq!(s.eval(&[0.25]).unwrap().as_slice(), &[0.5, 0.5, 0.0]);
        assert_eq!(s.eval(&[1.0]).unwrap().as_slice(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn out_of_domain_is_rejected() {
        let s = unit(5, 3);
        assert!(matches!(
            s.eval(&[1.0 + 1e-9]),
            Err(FpcaError::Domain { .. })
        ));
        assert!(s.eval(&[f64::NAN]).is_err());
        match s.basis_matrix(&[0.1, 0.2, -0.3]) {
            Err(FpcaError::Domain { row, .. }) => assert_eq!(row, Some(2)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn basis_matrix_rows() {
        let s = unit(5, 3);
        let b = s.basis_matrix(&[0.3, 0.3, 0.71]).unwrap();
        assert_eq!(b.row(0), b.row(1));
        assert_eq!(b.row(0).transpose(), s.eval(&[0.3]).unwrap());
        for r in 0..3 {
            assert_abs_diff_eq!(b.row(r).sum(), 1.0, epsilon = 1e-14);
        }
    }

    #[test]
    fn gram_degree_zero_and_one() {
        let g0 = unit(1, 0).gram().clone();
        assert_abs_diff_eq!(
            g0,
            DMatrix::from_row_slice(2, 2, &[0.5, 0.0, 0.0, 0.5]),
            epsilon = 1e-15
        );
        // Hand-integrated hat functions on [0, 1/2, 1].
        let g1 = unit(1, 1).gram().clone();
        let expected = DMatrix::from_row_slice(
            3,
            3,
            &[
                1.0 / 6.0,
                1.0 / 12.0,
                0.0,
                1.0 / 12.0,
                1.0 / 3.0,
                1.0 / 12.0,
                0.0,
                1.0 / 12.0,
                1.0 / 6.0,
            ],
        );
        assert_abs_diff_eq!(g1, expected, epsilon = 1e-15);
    }

    #[test]
    fn gram_matches_trapezoid() {
        let s = unit(5, 3);
        let n = 200_000;
        let h = 1.0 / n as f64;
        let mut trap = DMatrix::<f64>::zeros(9, 9);
        for i in 0..=n {
            let b = s.eval(&[i as f64 * h]).unwrap();
            let w = if i == 0 || i == n { 0.5 * h } else { h };
            trap += &b * b.transpose() * w;
        }
        let rel = (&trap - s.gram()).norm() / s.gram().norm();
        assert!(rel < 1e-8, "relative error {rel}");
        assert!(s.gram().clone().cholesky().is_some());
    }

    #[test]
    fn two_dimensional_kronecker_structure() {
        let s = SplineSpace::new(&[(0.0, 1.0), (0.0, 2.0)], &[2, 3], 3).unwrap();
        let m1 = &s.marginals()[0];
        let m2 = &s.marginals()[1];
        let g = m1
            .integrated_products(0)
            .kronecker(&m2.integrated_products(0));
        assert_abs_diff_eq!(s.gram().clone(), g, epsilon = 1e-15);
        let b = s.eval(&[0.37, 1.21]).unwrap();
        let kb = m1.eval(0.37).unwrap().kronecker(&m2.eval(1.21).unwrap());
        assert_eq!(b, kb);
    }

    #[test]
    fn penalty_requires_degree_two() {
        assert!(matches!(unit(3, 1).penalty(), Err(FpcaError::Config(_))));
        assert!(unit(3, 2).penalty().is_ok());
    }

    /// Least-squares coefficients of `f` in the space, from a dense grid.
    fn fit_coefficients(
        s: &SplineSpace<f64>,
        f: impl Fn(&[f64]) -> f64,
        grid: usize,
    ) -> DVector<f64> {
        let d = s.dims();
        let mut locs = Vec::new();
        let mut vals = Vec::new();
        let total = (grid + 1).pow(d as u32);
        for flat in 0..total {
            let mut rem = flat;
            let mut pt = vec![0.0; d];
            for j in (0..d).rev() {
                let (a, b) = s.marginals()[j].bounds();
                pt[j] = a + (b - a) * (rem % (grid + 1)) as f64 / grid as f64;
                rem /= grid + 1;
            }
            vals.push(f(&pt));
            locs.extend(pt);
        }
        let b = s.basis_matrix(&locs).unwrap();
        let y = DVector::from_vec(vals);
        (b.transpose() * &b)
            .cholesky()
            .unwrap()
            .solve(&(b.transpose() * y))
    }

    #[test]
    fn penalty_of_square_is_four() {
        let s = unit(5, 3);
        let theta = fit_coefficients(&s, |t| t[0] * t[0], 40);
        let quad = (theta.transpose() * s.penalty().unwrap() * &theta)[(0, 0)];
        assert_abs_diff_eq!(quad, 4.0, epsilon = 1e-9);

        // Independent route: trapezoid of the fitted spline's squared second derivative.
        let m = &s.marginals()[0];
        let n = 100_000;
        let h = 1.0 / n as f64;
        let mut acc = 0.0;
        for i in 0..=n {
            let d2 = m.eval_derivative(i as f64 * h, 2).unwrap().dot(&theta);
            let w = if i == 0 || i == n { 0.5 * h } else { h };
            acc += w * d2 * d2;
        }
        assert_abs_diff_eq!(acc, 4.0, epsilon = 1e-6);
    }

    #[test]
    fn penalty_annihilates_affine_functions() {
        let s1 = unit(5, 3);
        let th = fit_coefficients(&s1, |t| 2.0 - 3.0 * t[0], 20);
        assert!((th.transpose() * s1.penalty().unwrap() * &th)[(0, 0)].abs() < 1e-10);

        let s2 = SplineSpace::new(&[(0.0, 1.0), (0.0, 1.0)], &[3, 4], 3).unwrap();
        let th2 = fit_coefficients(&s2, |t| (1.0 + 2.0 * t[0]) * (0.5 - t[1]), 12);
        let v = s2.penalty().unwrap() * &th2;
        assert!(v.amax() < 1e-10, "{}", v.amax());
    }

    #[test]
    fn second_derivative_matches_finite_difference() {
        let m = MarginalSpline::uniform(0.0, 1.0, 4, 3).unwrap();
        let h = 1e-4;
        for &t in &[0.13, 0.47, 0.81] {
            let fd = (m.eval(t + h).unwrap() - m.eval(t).unwrap() * 2.0 + m.eval(t - h).unwrap())
                / (h * h);
            let an = m.eval_derivative(t, 2).unwrap();
            assert!((fd - an).amax() < 1e-4);
        }
    }

    #[test]
    fn single_precision_space_builds() {
        let s = SplineSpace::<f32>::new(&[(0.0, 1.0)], &[5], 3).unwrap();
        let b = s.eval(&[0.3]).unwrap();
        assert!((b.sum() - 1.0).abs() < 1e-6);
    }

    proptest! {
        #[test]
        fn partition_of_unity(t in 0.0f64..=1.0, s in 0.0f64..=1.0) {
            let one = unit(5, 3);
            prop_assert!((one.eval(&[t]).unwrap().sum() - 1.0).abs() < 1e-12);
            let two = SplineSpace::new(&[(0.0, 1.0), (0.0, 1.0)], &[5, 5], 3).unwrap();
            let b = two.eval(&[t, s]).unwrap();
            prop_assert!((b.sum() - 1.0).abs() < 1e-12);
            prop_assert!(b.iter().all(|v| *v >= 0.0 && *v <= 1.0));
        }

        #[test]
        fn penalty_is_psd(v in proptest::collection::vec(-10.0f64..10.0, 9)) {
            let s = unit(5, 3);
            let th = DVector::from_vec(v);
            prop_assert!((th.transpose() * s.penalty().unwrap() * &th)[(0, 0)] >= -1e-9);
        }
    }
}
