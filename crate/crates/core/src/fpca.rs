//! Functional principal component analysis for densely or sparsely observed
//! curves: pooled spline smoothing of the mean, bivariate spline smoothing of
//! the off-diagonal raw covariances, eigendecomposition on a dense grid and
//! per-subject scores.

use std::collections::HashMap;

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::basis::{curvature_penalty, eval_basis, make_basis, tensor_penalty};
use crate::error::{Error, Result};
use crate::model::Grid;

/// Noisy observations of one subject's curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunctionalSample {
    pub id: String,
    pub times: Vec<f64>,
    pub values: Vec<f64>,
}

impl FunctionalSample {
    /// Validates and sorts the observations by time.
    pub fn new(id: impl Into<String>, times: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        let id = id.into();
        if times.len() != values.len() {
            return Err(Error::DimensionMismatch(format!(
                "subject `{id}`: {} times but {} values",
                times.len(),
                values.len()
            )));
        }
        if times.iter().chain(&values).any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "subject `{id}`: non-finite observation"
            )));
        }
        let mut pairs: Vec<(f64, f64)> = times.into_iter().zip(values).collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        if pairs.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(Error::InvalidInput(format!(
                "subject `{id}`: duplicate observation time"
            )));
        }
        let (times, values) = pairs.into_iter().unzip();
        Ok(Self { id, times, values })
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreMethod {
    /// Integration when a subject has at least half as many observations as
    /// grid points, best linear prediction otherwise.
    #[default]
    Auto,
    Integration,
    Blup,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FpcaConfig {
    pub pve: f64,
    pub mean_basis_dim: usize,
    pub cov_basis_dim: usize,
    pub score_method: ScoreMethod,
}

impl Default for FpcaConfig {
    fn default() -> Self {
        Self {
            pve: 0.99,
            mean_basis_dim: 20,
            cov_basis_dim: 12,
            score_method: ScoreMethod::Auto,
        }
    }
}

/// Fitted principal component decomposition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FpcaModel {
    pub grid: Vec<f64>,
    pub mean: Vec<f64>,
    /// `K` eigenfunctions, each on the grid.
    pub eigenfunctions: Vec<Vec<f64>>,
    pub eigenvalues: Vec<f64>,
    pub noise_variance: f64,
    pub pve: f64,
    pub score_method: ScoreMethod,
    pub subjects: Vec<String>,
    pub scores: Vec<Vec<f64>>,
}

/// Penalized least squares from sufficient statistics, with the smoothing
/// parameter chosen by GCV over a transformed (diagonalized) problem.
struct PenalizedLs {
    /// Cholesky factor of `X'WX` (with a small ridge).
    chol: Cholesky<f64, nalgebra::Dyn>,
    /// Eigen pairs of `L^-1 P L^-T`.
    eigvals: DVector<f64>,
    eigvecs: DMatrix<f64>,
    /// `U' L^-1 X'Wy`.
    proj: DVector<f64>,
    yy: f64,
    nobs: f64,
}

impl PenalizedLs {
    fn new(
        xtx: &DMatrix<f64>,
        xty: &DVector<f64>,
        yy: f64,
        nobs: f64,
        penalty: &DMatrix<f64>,
    ) -> Result<Self> {
        let p = xtx.nrows();
        let scale = (xtx.trace() / p as f64).max(f64::MIN_POSITIVE);
        let mut m = xtx.clone();
        for d in 0..p {
            m[(d, d)] += 1e-9 * scale;
        }
        let chol = Cholesky::new(m)
            .ok_or_else(|| Error::Numerical("smoother cross-products are singular".into()))?;
        let l = chol.l();
        let linv = l
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::Numerical("singular smoother factor".into()))?;
        let t = &linv * penalty * linv.transpose();
        let t = (&t + t.transpose()) * 0.5;
        let eig = SymmetricEigen::new(t);
        let proj = eig.eigenvectors.transpose() * (&linv * xty);
        Ok(Self {
            chol,
            eigvals: eig.eigenvalues.map(|e| e.max(0.0)),
            eigvecs: eig.eigenvectors,
            proj,
            yy,
            nobs,
        })
    }

    fn gcv(&self, lambda: f64) -> f64 {
        let mut rss = self.yy;
        let mut edf = 0.0;
        for (e, y) in self.eigvals.iter().zip(self.proj.iter()) {
            let s = 1.0 / (1.0 + lambda * e);
            rss += y * y * (s * s - 2.0 * s);
            edf += s;
        }
        let df = (self.nobs - edf).max(1e-8);
        self.nobs * rss.max(0.0) / (df * df)
    }

    fn coefficients(&self, lambda: f64) -> DVector<f64> {
        let shrunk = DVector::from_iterator(
            self.proj.len(),
            self.proj
                .iter()
                .zip(self.eigvals.iter())
                .map(|(y, e)| y / (1.0 + lambda * e)),
        );
        let v = &self.eigvecs * shrunk;
        self.chol
            .l()
            .transpose()
            .solve_upper_triangular(&v)
            .expect("triangular factor is nonsingular")
    }

    /// GCV-optimal coefficients: coarse search over `log(lambda)` then
    /// golden-section refinement.
    fn fit(&self) -> DVector<f64> {
        let maxe = self.eigvals.max().max(1e-300);
        let lo = -(maxe.ln()) - 12.0;
        let hi = -(maxe.ln()) + 30.0;
        let steps = 84;
        let (mut best_x, mut best_f) = (lo, f64::INFINITY);
        for s in 0..=steps {
            let x = lo + (hi - lo) * s as f64 / steps as f64;
            let f = self.gcv(x.exp());
            if f < best_f {
                best_f = f;
                best_x = x;
            }
        }
        let h = (hi - lo) / steps as f64;
        let (mut a, mut b) = (best_x - h, best_x + h);
        const G: f64 = 0.618_033_988_749_894_9;
        let mut x1 = b - G * (b - a);
        let mut x2 = a + G * (b - a);
        let (mut f1, mut f2) = (self.gcv(x1.exp()), self.gcv(x2.exp()));
        while b - a > 1e-6 {
            if f1 <= f2 {
                b = x2;
                x2 = x1;
                f2 = f1;
                x1 = b - G * (b - a);
                f1 = self.gcv(x1.exp());
            } else {
                a = x1;
                x1 = x2;
                f1 = f2;
                x2 = a + G * (b - a);
                f2 = self.gcv(x2.exp());
            }
        }
        let x = if f1.min(f2) < best_f {
            if f1 <= f2 {
                x1
            } else {
                x2
            }
        } else {
            best_x
        };
        self.coefficients(x.exp())
    }
}

fn uniform_spacing(grid: &[f64]) -> Result<f64> {
    if grid.len() < 3 {
        return Err(Error::InvalidInput(
            "FPCA grid needs at least 3 points".into(),
        ));
    }
    let delta = (grid[grid.len() - 1] - grid[0]) / (grid.len() - 1) as f64;
    let uniform = grid
        .windows(2)
        .all(|w| ((w[1] - w[0]) - delta).abs() <= 1e-8 * delta);
    if !uniform {
        return Err(Error::InvalidInput(
            "FPCA grid must be equally spaced".into(),
        ));
    }
    Ok(delta)
}

/// Linear interpolation of `(xs, ys)` at `x`, constant beyond the ends.
fn interpolate(xs: &[f64], ys: &[f64], x: f64) -> f64 {
    if x <= xs[0] {
        return ys[0];
    }
    let last = xs.len() - 1;
    if x >= xs[last] {
        return ys[last];
    }
    let k = xs.partition_point(|&v| v <= x);
    let (x0, x1) = (xs[k - 1], xs[k]);
    let w = (x - x0) / (x1 - x0);
    ys[k - 1] * (1.0 - w) + ys[k] * w
}

/// Fits the decomposition on `grid` (equally spaced, covering every
/// observation time) and scores every subject.
pub fn fit_fpca(samples: &[FunctionalSample], grid: &Grid, cfg: &FpcaConfig) -> Result<FpcaModel> {
    if !(cfg.pve > 0.0 && cfg.pve <= 1.0) {
        return Err(Error::InvalidInput(format!(
            "PVE {} outside (0, 1]",
            cfg.pve
        )));
    }
    if samples.len() < 2 {
        return Err(Error::InvalidInput(
            "FPCA needs at least two subjects".into(),
        ));
    }
    if samples.iter().all(|s| s.is_empty()) {
        return Err(Error::InvalidInput(
            "every functional sample is empty".into(),
        ));
    }
    let pts = grid.points();
    let delta = uniform_spacing(pts)?;
    let (lo, hi) = (grid.first(), grid.last());
    for s in samples {
        if let Some(&t) = s.times.iter().find(|&&t| t < lo || t > hi) {
            return Err(Error::OutOfDomain { point: t, lo, hi });
        }
    }

    // pooled mean
    let mb = make_basis(lo, hi, cfg.mean_basis_dim, 3)?;
    let mp = curvature_penalty(&mb)?;
    let q = mb.dim();
    let mut xtx = DMatrix::zeros(q, q);
    let mut xty = DVector::zeros(q);
    let (mut yy, mut nobs) = (0.0, 0.0);
    for s in samples {
        for (&t, &w) in s.times.iter().zip(&s.values) {
            let (first, vals) = mb.eval_nonzero(t, 0)?;
            for (a, va) in vals.iter().enumerate() {
                xty[first + a] += va * w;
                for (b, vb) in vals.iter().enumerate() {
                    xtx[(first + a, first + b)] += va * vb;
                }
            }
            yy += w * w;
            nobs += 1.0;
        }
    }
    let mean_coef = PenalizedLs::new(&xtx, &xty, yy, nobs, mp.matrix())?.fit();
    let mean_at = |t: f64| -> Result<f64> {
        let (first, vals) = mb.eval_nonzero(t, 0)?;
        Ok(vals
            .iter()
            .enumerate()
            .map(|(a, v)| v * mean_coef[first + a])
            .sum())
    };
    let residuals: Vec<Vec<f64>> = samples
        .iter()
        .map(|s| {
            s.times
                .iter()
                .zip(&s.values)
                .map(|(&t, &w)| Ok(w - mean_at(t)?))
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<_>>()?;

    // raw off-diagonal covariances, binned on identical time pairs
    let mut bins: HashMap<(u64, u64), (f64, f64, f64)> = HashMap::new();
    for (s, r) in samples.iter().zip(&residuals) {
        for j in 0..s.len() {
            for k in 0..s.len() {
                if j == k {
                    continue;
                }
                let c = r[j] * r[k];
                let e = bins
                    .entry((s.times[j].to_bits(), s.times[k].to_bits()))
                    .or_insert((0.0, 0.0, 0.0));
                e.0 += c;
                e.1 += c * c;
                e.2 += 1.0;
            }
        }
    }
    if bins.is_empty() {
        return Err(Error::InvalidInput(
            "no subject has two observations; covariance is not estimable".into(),
        ));
    }
    let mut bins: Vec<((u64, u64), (f64, f64, f64))> = bins.into_iter().collect();
    bins.sort_by(|a, b| a.0.cmp(&b.0));

    let cb = make_basis(lo, hi, cfg.cov_basis_dim, 3)?;
    let cp = curvature_penalty(&cb)?;
    let tp = tensor_penalty(&cp, &cp)?;
    let k = cb.dim();
    let p = k * k;
    let mut xtx = DMatrix::zeros(p, p);
    let mut xty = DVector::zeros(p);
    let (mut yy, mut nobs) = (0.0, 0.0);
    for &((sb, tb), (sum, sumsq, count)) in &bins {
        let (fs, vs) = cb.eval_nonzero(f64::from_bits(sb), 0)?;
        let (ft, vt) = cb.eval_nonzero(f64::from_bits(tb), 0)?;
        let mut idx = Vec::with_capacity(vs.len() * vt.len());
        for (a, va) in vs.iter().enumerate() {
            for (b, vb) in vt.iter().enumerate() {
                idx.push(((fs + a) * k + ft + b, va * vb));
            }
        }
        for &(r, vr) in &idx {
            xty[r] += vr * sum;
            for &(c, vc) in &idx {
                xtx[(r, c)] += count * vr * vc;
            }
        }
        yy += sumsq;
        nobs += count;
    }
    let cov_coef = PenalizedLs::new(&xtx, &xty, yy, nobs, tp.matrix())?.fit();
    let cov_coef = DMatrix::from_row_slice(k, k, cov_coef.as_slice());

    let bg = eval_basis(&cb, pts)?;
    let surface = &bg * &cov_coef * bg.transpose();
    let surface = (&surface + surface.transpose()) * 0.5;

    // noise variance from the diagonal
    let cov_diag = |t: f64| -> Result<f64> {
        let (f, v) = cb.eval_nonzero(t, 0)?;
        let mut s = 0.0;
        for (a, va) in v.iter().enumerate() {
            for (b, vb) in v.iter().enumerate() {
                s += va * vb * cov_coef[(f + a, f + b)];
            }
        }
        Ok(s)
    };
    let (mut excess, mut count) = (0.0, 0.0);
    for (s, r) in samples.iter().zip(&residuals) {
        for (&t, &e) in s.times.iter().zip(r) {
            excess += e * e - cov_diag(t)?;
            count += 1.0;
        }
    }
    let noise_variance = (excess / count).max(0.0);

    let eig = SymmetricEigen::new(surface * delta);
    let mut order: Vec<usize> = (0..pts.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let positive: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
    let total: f64 = positive.iter().sum();
    if total <= 0.0 {
        return Err(Error::Numerical(
            "smoothed covariance has no positive eigenvalue".into(),
        ));
    }
    let mut ncomp = 0;
    let mut acc = 0.0;
    while ncomp < positive.len() && positive[ncomp] > 0.0 {
        acc += positive[ncomp];
        ncomp += 1;
        if acc / total >= cfg.pve * (1.0 - 1e-12) {
            break;
        }
    }
    let scale = 1.0 / delta.sqrt();
    let eigenfunctions: Vec<Vec<f64>> = order[..ncomp]
        .iter()
        .map(|&i| {
            let mut v: Vec<f64> = eig
                .eigenvectors
                .column(i)
                .iter()
                .map(|x| x * scale)
                .collect();
            let peak = v
                .iter()
                .copied()
                .fold(0.0_f64, |m, x| if x.abs() > m.abs() { x } else { m });
            if peak < 0.0 {
                v.iter_mut().for_each(|x| *x = -*x);
            }
            v
        })
        .collect();

    let mut model = FpcaModel {
        grid: pts.to_vec(),
        mean: pts.iter().map(|&t| mean_at(t)).collect::<Result<_>>()?,
        eigenfunctions,
        eigenvalues: positive[..ncomp].to_vec(),
        noise_variance,
        pve: cfg.pve,
        score_method: cfg.score_method,
        subjects: Vec::new(),
        scores: Vec::new(),
    };
    for s in samples {
        let sc = model.score(s)?;
        model.subjects.push(s.id.clone());
        model.scores.push(sc);
    }
    Ok(model)
}

impl FpcaModel {
    pub fn components(&self) -> usize {
        self.eigenvalues.len()
    }

    fn mean_at(&self, t: f64) -> f64 {
        interpolate(&self.grid, &self.mean, t)
    }

    /// Scores of a (possibly new) sample with the configured method.
    pub fn score(&self, sample: &FunctionalSample) -> Result<Vec<f64>> {
        self.score_with(sample, self.score_method)
    }

    pub fn score_with(&self, sample: &FunctionalSample, method: ScoreMethod) -> Result<Vec<f64>> {
        if sample.is_empty() {
            return Err(Error::InvalidInput(format!(
                "subject `{}` has no observations",
                sample.id
            )));
        }
        let (lo, hi) = (self.grid[0], self.grid[self.grid.len() - 1]);
        if let Some(&t) = sample.times.iter().find(|&&t| t < lo || t > hi) {
            return Err(Error::OutOfDomain { point: t, lo, hi });
        }
        let method = match method {
            ScoreMethod::Auto if 2 * sample.len() >= self.grid.len() => ScoreMethod::Integration,
            ScoreMethod::Auto => ScoreMethod::Blup,
            m => m,
        };
        let centered: Vec<f64> = sample
            .times
            .iter()
            .zip(&sample.values)
            .map(|(&t, &w)| w - self.mean_at(t))
            .collect();
        let kc = self.components();
        match method {
            ScoreMethod::Integration => {
                let delta = (hi - lo) / (self.grid.len() - 1) as f64;
                let curve: Vec<f64> = self
                    .grid
                    .iter()
                    .map(|&s| interpolate(&sample.times, &centered, s))
                    .collect();
                Ok(self
                    .eigenfunctions
                    .iter()
                    .map(|phi| phi.iter().zip(&curve).map(|(a, b)| a * b).sum::<f64>() * delta)
                    .collect())
            }
            _ => {
                let m = sample.len();
                let phi = DMatrix::from_fn(m, kc, |i, c| {
                    interpolate(&self.grid, &self.eigenfunctions[c], sample.times[i])
                });
                let mut a = phi.transpose() * &phi;
                for c in 0..kc {
                    a[(c, c)] += self.noise_variance / self.eigenvalues[c];
                }
                let scale = (a.trace() / kc.max(1) as f64).max(1.0);
                for c in 0..kc {
                    a[(c, c)] += 1e-10 * scale;
                }
                let rhs = phi.transpose() * DVector::from_column_slice(&centered);
                let chol = Cholesky::new(a).ok_or_else(|| {
                    Error::Numerical("score system is not positive definite".into())
                })?;
                Ok(chol.solve(&rhs).iter().copied().collect())
            }
        }
    }

    /// `mean + sum_k xi_k phi_k` on the grid.
    pub fn curve_from_scores(&self, scores: &[f64]) -> Vec<f64> {
        let mut out = self.mean.clone();
        for (phi, &s) in self.eigenfunctions.iter().zip(scores) {
            for (o, p) in out.iter_mut().zip(phi) {
                *o += s * p;
            }
        }
        out
    }

    /// Smoothed curve of a subject used in the fit.
    pub fn reconstruct(&self, id: &str) -> Result<Vec<f64>> {
        let i = self
            .subjects
            .iter()
            .position(|s| s == id)
            .ok_or_else(|| Error::UnknownSubject(id.to_string()))?;
        Ok(self.curve_from_scores(&self.scores[i]))
    }

    /// Smoothed curves of arbitrary samples, rows in input order.
    pub fn smooth(&self, samples: &[FunctionalSample]) -> Result<DMatrix<f64>> {
        let mut out = DMatrix::zeros(samples.len(), self.grid.len());
        for (i, s) in samples.iter().enumerate() {
            let c = self.curve_from_scores(&self.score(s)?);
            for (l, v) in c.into_iter().enumerate() {
                out[(i, l)] = v;
            }
        }
        Ok(out)
    }
}
