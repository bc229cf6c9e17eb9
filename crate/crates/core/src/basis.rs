//! Clamped B-spline bases, integrated curvature penalties and the Kronecker-sum
//! penalty used for tensor-product coefficient surfaces.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative slack allowed when checking that an evaluation point lies in the
/// basis domain. Grid points computed as `lo + k * step` can overshoot `hi`
/// by a rounding error.
const DOMAIN_SLACK: f64 = 1e-12;

/// A clamped B-spline basis on a closed interval with equally spaced
/// interior knots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisSpec {
    degree: usize,
    dim: usize,
    lo: f64,
    hi: f64,
    knots: Vec<f64>,
}

/// Builds a clamped basis with `dim` functions of the given degree on `[lo, hi]`.
///
/// The end knots are repeated `degree + 1` times and the `dim - degree - 1`
/// interior knots split the domain into equal pieces.
pub fn make_basis(lo: f64, hi: f64, dim: usize, degree: usize) -> Result<BasisSpec> {
    if !(lo.is_finite() && hi.is_finite()) || hi <= lo {
        return Err(Error::InvalidBasis(format!(
            "degenerate domain [{lo}, {hi}]"
        )));
    }
    if dim < degree + 1 {
        return Err(Error::InvalidBasis(format!(
            "dimension {dim} is smaller than degree + 1 = {}",
            degree + 1
        )));
    }
    let interior = dim - degree - 1;
    let mut knots = Vec::with_capacity(dim + degree + 1);
    knots.extend(std::iter::repeat_n(lo, degree + 1));
    let pieces = (interior + 1) as f64;
    for k in 1..=interior {
        knots.push(lo + (hi - lo) * k as f64 / pieces);
    }
    knots.extend(std::iter::repeat_n(hi, degree + 1));
    Ok(BasisSpec {
        degree,
        dim,
        lo,
        hi,
        knots,
    })
}

impl BasisSpec {
    pub fn degree(&self) -> usize {
        self.degree
    }

    /// Number of basis functions.
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn domain(&self) -> (f64, f64) {
        (self.lo, self.hi)
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    /// Distinct knot values, i.e. the breakpoints of the piecewise polynomials.
    pub fn breakpoints(&self) -> Vec<f64> {
        let mut out: Vec<f64> = Vec::with_capacity(self.dim);
        for &k in &self.knots {
            if out.last().is_none_or(|&last| k > last) {
                out.push(k);
            }
        }
        out
    }

    pub fn contains(&self, x: f64) -> bool {
        let slack = DOMAIN_SLACK * (self.hi - self.lo);
        x.is_finite() && x >= self.lo - slack && x <= self.hi + slack
    }

    fn check(&self, x: f64) -> Result<f64> {
        if !self.contains(x) {
            return Err(Error::OutOfDomain {
                point: x,
                lo: self.lo,
                hi: self.hi,
            });
        }
        Ok(x.clamp(self.lo, self.hi))
    }

    /// Index `s` of the knot span `[u_s, u_{s+1})` holding `x`; the right end of
    /// the domain belongs to the last non-empty span.
    fn span(&self, x: f64) -> usize {
        let p = self.degree;
        let last = self.dim - 1;
        if x >= self.knots[last + 1] {
            return last;
        }
        // knots[p..=dim] are the breakpoints of the usable spans
        let window = &self.knots[p..=self.dim];
        let pos = window.partition_point(|&k| k <= x);
        (p + pos - 1).clamp(p, last)
    }

    /// Values of the `degree + 1` basis functions (or their `deriv`-th
    /// derivatives) that are nonzero at `x`, together with the index of the first.
    pub fn eval_nonzero(&self, x: f64, deriv: usize) -> Result<(usize, Vec<f64>)> {
        let x = self.check(x)?;
        let s = self.span(x);
        Ok((s - self.degree, self.nonzero_at_span(s, x, deriv)))
    }

    fn nonzero_at_span(&self, s: usize, x: f64, deriv: usize) -> Vec<f64> {
        let p = self.degree;
        if deriv > p {
            return vec![0.0; p + 1];
        }
        let base = p - deriv;
        let u = &self.knots;
        // Cox-de Boor triangle for the degree `base` functions N_{s-base..=s}.
        let mut n = vec![0.0; base + 1];
        n[0] = 1.0;
        let mut left = vec![0.0; base + 1];
        let mut right = vec![0.0; base + 1];
        for j in 1..=base {
            left[j] = x - u[s + 1 - j];
            right[j] = u[s + j] - x;
            let mut saved = 0.0;
            for r in 0..j {
                let denom = right[r + 1] + left[j - r];
                let temp = if denom > 0.0 { n[r] / denom } else { 0.0 };
                n[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            n[j] = saved;
        }
        // Raise degree and derivative order together:
        // d^r B_{i,q} = q * (d^{r-1}B_{i,q-1} / (u_{i+q}-u_i) - d^{r-1}B_{i+1,q-1} / (u_{i+q+1}-u_{i+1}))
        let mut vals = n;
        for q in (base + 1)..=p {
            let first_prev = s - (q - 1);
            let first = s - q;
            let mut next = vec![0.0; q + 1];
            for (k, slot) in next.iter_mut().enumerate() {
                let i = first + k;
                let a = if i >= first_prev && i - first_prev < vals.len() {
                    let d = u[i + q] - u[i];
                    if d > 0.0 {
                        vals[i - first_prev] / d
                    } else {
                        0.0
                    }
                } else {
                    0.0
                };
                let b = if i + 1 >= first_prev && i + 1 - first_prev < vals.len() {
                    let d = u[i + q + 1] - u[i + 1];
                    if d > 0.0 {
                        vals[i + 1 - first_prev] / d
                    } else {
                        0.0
                    }
                } else {
                    0.0
                };
                *slot = q as f64 * (a - b);
            }
            vals = next;
        }
        vals
    }

    /// Dense `points.len() x dim` matrix of `deriv`-th derivatives.
    pub fn eval_deriv(&self, points: &[f64], deriv: usize) -> Result<DMatrix<f64>> {
        let mut out = DMatrix::zeros(points.len(), self.dim);
        for (row, &x) in points.iter().enumerate() {
            let (first, vals) = self.eval_nonzero(x, deriv)?;
            for (k, v) in vals.into_iter().enumerate() {
                out[(row, first + k)] = v;
            }
        }
        Ok(out)
    }
}

/// Evaluates every basis function at every point; rows sum to one.
pub fn eval_basis(spec: &BasisSpec, points: &[f64]) -> Result<DMatrix<f64>> {
    spec.eval_deriv(points, 0)
}

/// Symmetric positive semidefinite quadratic penalty together with the
/// dimension of its null space.
#[derive(Debug, Clone, PartialEq)]
pub struct PenaltyMatrix {
    matrix: DMatrix<f64>,
    null_dim: usize,
}

impl PenaltyMatrix {
    /// Wraps a symmetric matrix, computing its numerical null-space dimension.
    pub fn new(matrix: DMatrix<f64>) -> Result<Self> {
        if !matrix.is_square() {
            return Err(Error::DimensionMismatch(format!(
                "penalty must be square, got {}x{}",
                matrix.nrows(),
                matrix.ncols()
            )));
        }
        let null_dim = null_dimension(&matrix);
        Ok(Self { matrix, null_dim })
    }

    /// The all-zero penalty of size `k` (unpenalized coefficients).
    pub fn zero(k: usize) -> Self {
        Self {
            matrix: DMatrix::zeros(k, k),
            null_dim: k,
        }
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn size(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn rank(&self) -> usize {
        self.size() - self.null_dim
    }

    pub fn rank_deficiency(&self) -> usize {
        self.null_dim
    }

    pub fn is_zero(&self) -> bool {
        self.null_dim == self.size()
    }

    /// `theta' D theta`.
    pub fn quadratic_form(&self, theta: &[f64]) -> f64 {
        let k = self.size();
        assert_eq!(theta.len(), k, "coefficient length must match penalty");
        let mut acc = 0.0;
        for i in 0..k {
            let mut row = 0.0;
            for j in 0..k {
                row += self.matrix[(i, j)] * theta[j];
            }
            acc += theta[i] * row;
        }
        acc
    }
}

fn null_dimension(m: &DMatrix<f64>) -> usize {
    let k = m.nrows();
    if k == 0 {
        return 0;
    }
    let eig = SymmetricEigen::new(m.clone());
    let max = eig.eigenvalues.iter().fold(0.0_f64, |a, &v| a.max(v.abs()));
    if max == 0.0 {
        return k;
    }
    eig.eigenvalues.iter().filter(|&&v| v <= 1e-9 * max).count()
}

/// Nodes and weights of the `m`-point Gauss-Legendre rule on `[-1, 1]`.
pub fn gauss_legendre(m: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; m];
    let mut weights = vec![0.0; m];
    for i in 0..m.div_ceil(2) {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (m as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (p, d) = legendre(m, x);
            dp = d;
            let dx = p / d;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        let (_, d) = legendre(m, x);
        if d != 0.0 {
            dp = d;
        }
        nodes[i] = -x;
        nodes[m - 1 - i] = x;
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        weights[i] = w;
        weights[m - 1 - i] = w;
    }
    (nodes, weights)
}

fn legendre(m: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    if m == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=m {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let d = m as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

/// Penalty with entries `\int B''_s B''_t` over the domain.
///
/// Integrated exactly with a Gauss-Legendre rule on every knot span; the
/// integrand is a polynomial of degree `2 * (degree - 2)` there.
pub fn curvature_penalty(spec: &BasisSpec) -> Result<PenaltyMatrix> {
    if spec.degree < 2 {
        return Err(Error::InvalidBasis(format!(
            "curvature penalty needs degree >= 2, got {}",
            spec.degree
        )));
    }
    let k = spec.dim;
    let (nodes, weights) = gauss_legendre(spec.degree);
    let mut d = DMatrix::zeros(k, k);
    for w in spec.breakpoints().windows(2) {
        let (a, b) = (w[0], w[1]);
        let half = 0.5 * (b - a);
        let mid = 0.5 * (a + b);
        let s = spec.span(mid);
        let first = s - spec.degree;
        for (&z, &wt) in nodes.iter().zip(&weights) {
            let x = mid + half * z;
            let vals = spec.nonzero_at_span(s, x, 2);
            for (i, vi) in vals.iter().enumerate() {
                for (j, vj) in vals.iter().enumerate() {
                    d[(first + i, first + j)] += half * wt * vi * vj;
                }
            }
        }
    }
    // exact symmetry regardless of accumulation order
    let d = (&d + d.transpose()) * 0.5;
    PenaltyMatrix::new(d)
}

/// Kronecker product `a (x) b`.
pub fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let (ar, ac) = a.shape();
    let (br, bc) = b.shape();
    let mut out = DMatrix::zeros(ar * br, ac * bc);
    for i in 0..ar {
        for j in 0..ac {
            let aij = a[(i, j)];
            if aij == 0.0 {
                continue;
            }
            for k in 0..br {
                for l in 0..bc {
                    out[(i * br + k, j * bc + l)] = aij * b[(k, l)];
                }
            }
        }
    }
    out
}

/// Kronecker-sum penalty `P_t (x) I + I (x) P_y` for a tensor-product surface.
///
/// Coefficients are ordered t-major: the coefficient of `B^t_a(t) B^y_b(y)` sits
/// at index `a * dim_y + b`.
pub fn tensor_penalty(p_t: &PenaltyMatrix, p_y: &PenaltyMatrix) -> Result<PenaltyMatrix> {
    let kt = p_t.size();
    let ky = p_y.size();
    let m = kron(p_t.matrix(), &DMatrix::identity(ky, ky))
        + kron(&DMatrix::identity(kt, kt), p_y.matrix());
    Ok(PenaltyMatrix {
        matrix: m,
        null_dim: p_t.null_dim * p_y.null_dim,
    })
}
