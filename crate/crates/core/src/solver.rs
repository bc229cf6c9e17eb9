//! Penalized binomial regression of the artificial responses.
//!
//! The joint fit maximizes `2 log L - sum_m lambda_m theta_m' D_m theta_m`
//! over all grid points at once with a logit link. The inner loop is Newton's
//! method (penalized IRLS) with step halving; the outer loop re-estimates the
//! smoothing parameters on the Gaussian working model of the current
//! iteration (PQL), either by REML or GCV, until the penalized deviance and
//! the smoothing parameters settle.
//!
//! The pointwise fit solves an independent small problem at every grid point.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Covariates, Design, DesignBlock, Grid, IndicatorMatrix, RealizedTerm};

/// Smallest working weight; keeps the working response finite when fitted
/// probabilities saturate.
const MIN_WEIGHT: f64 = 1e-10;
const MAX_HALVINGS: usize = 30;
/// Range of `log(lambda)` around the data-scaled starting value.
const LOG_LAMBDA_SPAN: f64 = 25.0;
const REML_NEWTON_STEPS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum SmoothingMode {
    #[default]
    Reml,
    Gcv,
    Fixed,
}

impl std::str::FromStr for SmoothingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reml" => Ok(Self::Reml),
            "gcv" => Ok(Self::Gcv),
            "fixed" => Ok(Self::Fixed),
            other => Err(Error::InvalidInput(format!(
                "unknown smoothing mode `{other}` (expected reml, gcv or fixed)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Link {
    #[default]
    Logit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FitMode {
    Joint,
    Pointwise,
}

/// Tuning for the penalized IRLS / PQL iterations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub smoothing: SmoothingMode,
    /// Smoothing parameters for [`SmoothingMode::Fixed`], one per penalized
    /// term in term order; a single value is used for every term.
    pub fixed_lambda: Vec<f64>,
    pub max_inner: usize,
    pub max_outer: usize,
    /// Relative change in penalized deviance that ends the iterations.
    pub tolerance: f64,
    /// Outer iterations stop once the largest change in `log(lambda)`, or in
    /// the linear predictor, falls below this.
    pub lambda_tolerance: f64,
    /// Ridge added (relative to the mean diagonal) inside linear solves only.
    pub ridge: f64,
    /// Worker threads for the pointwise fit; 0 uses the global pool.
    pub threads: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            smoothing: SmoothingMode::Reml,
            fixed_lambda: vec![1.0],
            max_inner: 200,
            max_outer: 50,
            tolerance: 1e-6,
            lambda_tolerance: 1e-3,
            ridge: 1e-10,
            threads: 0,
        }
    }
}

impl SolverConfig {
    pub fn fixed(lambda: f64) -> Self {
        Self {
            smoothing: SmoothingMode::Fixed,
            fixed_lambda: vec![lambda],
            ..Self::default()
        }
    }
}

/// Iteration record of a fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Convergence {
    pub converged: bool,
    pub inner_iterations: usize,
    pub outer_iterations: usize,
    pub penalized_deviance: f64,
    pub relative_change: f64,
}

/// Coefficients of one grid point of a pointwise fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointFit {
    /// Per-term coefficients over the subject factor.
    pub coefficients: Vec<Vec<f64>>,
    /// Per-term smoothing parameters (`None` for unpenalized terms).
    pub lambdas: Vec<Option<f64>>,
    /// The indicator column was constant; coefficients copied from the
    /// nearest non-degenerate grid point.
    pub degenerate: bool,
    pub convergence: Convergence,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum FittedCoefficients {
    Joint {
        /// Per-term coefficients, factor-major (`a * response_width + d`).
        coefficients: Vec<Vec<f64>>,
        lambdas: Vec<Option<f64>>,
    },
    Pointwise {
        points: Vec<PointFit>,
    },
}

pub const MODEL_FORMAT_VERSION: u32 = 1;

/// A fitted conditional-distribution model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedCdfModel {
    pub version: u32,
    pub link: Link,
    pub grid: Grid,
    pub terms: Vec<RealizedTerm>,
    pub fit: FittedCoefficients,
    pub convergence: Convergence,
}

/// Estimated conditional CDF of one subject on a grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionalCdf {
    pub subject: String,
    pub grid: Vec<f64>,
    pub values: Vec<f64>,
    /// Set only by monotonization.
    pub monotone: bool,
}

pub(crate) fn logistic(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(eta))`.
fn softplus(eta: f64) -> f64 {
    if eta > 0.0 {
        eta + (-eta).exp().ln_1p()
    } else {
        eta.exp().ln_1p()
    }
}

/// Bernoulli deviance `-2 log L` of indicators `z` at linear predictor `eta`.
pub fn bernoulli_deviance(z: &[f64], eta: &[f64]) -> f64 {
    2.0 * z
        .iter()
        .zip(eta)
        .map(|(&z, &e)| softplus(e) - z * e)
        .sum::<f64>()
}

struct BlockLayout {
    q_off: usize,
    q: usize,
    p_off: usize,
    k: usize,
    /// Per grid point: first nonzero column of the response basis and the
    /// nonzero values.
    rows: Vec<(usize, Vec<f64>)>,
    penalty: DMatrix<f64>,
    rank: usize,
}

/// Factored design: subject factors side by side plus per-block response bases.
struct System {
    n: usize,
    j: usize,
    q_tot: usize,
    p: usize,
    /// Row-major `n x q_tot` subject factors.
    a: Vec<f64>,
    /// Subject factors as an `n x q_tot` matrix.
    a_mat: DMatrix<f64>,
    /// `n x q_tot(q_tot+1)/2` products `a_ix a_iy` for `x <= y`.
    pairs: DMatrix<f64>,
    blocks: Vec<BlockLayout>,
}

/// Column of `System::pairs` holding the product of factors `x <= y`.
fn pair_index(q: usize, x: usize, y: usize) -> usize {
    x * q - x * (x + 1) / 2 + y
}

impl System {
    fn new(blocks: &[DesignBlock]) -> Result<Self> {
        let first = blocks
            .first()
            .ok_or_else(|| Error::InvalidInput("no design blocks".into()))?;
        let n = first.subjects();
        let j = first.grid_len();
        let mut layouts = Vec::with_capacity(blocks.len());
        let (mut q_off, mut p_off) = (0, 0);
        for b in blocks {
            if b.subjects() != n || b.grid_len() != j {
                return Err(Error::DimensionMismatch(format!(
                    "block `{}` is {}x{} but the first block is {n}x{j}",
                    b.label,
                    b.subjects(),
                    b.grid_len()
                )));
            }
            if b.penalty.size() != b.ncols() {
                return Err(Error::DimensionMismatch(format!(
                    "block `{}` has {} columns but a {}x{} penalty",
                    b.label,
                    b.ncols(),
                    b.penalty.size(),
                    b.penalty.size()
                )));
            }
            let k = b.response_basis.ncols();
            let rows = (0..j)
                .map(|r| {
                    let row = b.response_basis.row(r);
                    let lo = (0..k).find(|&d| row[d] != 0.0).unwrap_or(0);
                    let hi = (0..k).rev().find(|&d| row[d] != 0.0).unwrap_or(0);
                    let vals = if hi >= lo {
                        (lo..=hi).map(|d| row[d]).collect()
                    } else {
                        Vec::new()
                    };
                    (lo, vals)
                })
                .collect();
            layouts.push(BlockLayout {
                q_off,
                q: b.subject_factor.ncols(),
                p_off,
                k,
                rows,
                penalty: b.penalty.matrix().clone(),
                rank: b.penalty.rank(),
            });
            q_off += b.subject_factor.ncols();
            p_off += b.ncols();
        }
        let q_tot = q_off;
        let mut a = vec![0.0; n * q_tot];
        for (b, lay) in blocks.iter().zip(&layouts) {
            for i in 0..n {
                for c in 0..lay.q {
                    a[i * q_tot + lay.q_off + c] = b.subject_factor[(i, c)];
                }
            }
        }
        let a_mat = DMatrix::from_row_slice(n, q_tot, &a);
        let mut pairs = DMatrix::zeros(n, q_tot * (q_tot + 1) / 2);
        for i in 0..n {
            let row = &a[i * q_tot..(i + 1) * q_tot];
            for x in 0..q_tot {
                for y in x..q_tot {
                    pairs[(i, pair_index(q_tot, x, y))] = row[x] * row[y];
                }
            }
        }
        Ok(Self {
            n,
            j,
            q_tot,
            p: p_off,
            a,
            a_mat,
            pairs,
            blocks: layouts,
        })
    }

    /// Linear predictor, row-major `n x J`.
    fn eta(&self, theta: &[f64]) -> Vec<f64> {
        let (n, jn) = (self.n, self.j);
        let mut eta = vec![0.0; n * jn];
        let mut u = Vec::new();
        for b in &self.blocks {
            // u = A_m Theta_m, n x k
            u.clear();
            u.resize(n * b.k, 0.0);
            for i in 0..n {
                let arow = &self.a[i * self.q_tot + b.q_off..i * self.q_tot + b.q_off + b.q];
                let urow = &mut u[i * b.k..(i + 1) * b.k];
                for (a_idx, &av) in arow.iter().enumerate() {
                    if av == 0.0 {
                        continue;
                    }
                    let th = &theta[b.p_off + a_idx * b.k..b.p_off + (a_idx + 1) * b.k];
                    for (ud, &t) in urow.iter_mut().zip(th) {
                        *ud += av * t;
                    }
                }
            }
            for i in 0..n {
                let urow = &u[i * b.k..(i + 1) * b.k];
                for (j, (first, vals)) in b.rows.iter().enumerate() {
                    let mut s = 0.0;
                    for (d, v) in vals.iter().enumerate() {
                        s += urow[first + d] * v;
                    }
                    eta[i * jn + j] += s;
                }
            }
        }
        eta
    }

    /// `X' diag(w) X` and `X' r` for row-major `w`, `r`.
    fn cross_products(&self, w: &[f64], r: &[f64]) -> (DMatrix<f64>, DVector<f64>) {
        let (n, jn, q, p) = (self.n, self.j, self.q_tot, self.p);
        // M_j and A'r_j for every grid point at once: J x pairs and J x q.
        let all_m = DMatrix::from_row_slice(n, jn, w).tr_mul(&self.pairs);
        let all_v = DMatrix::from_row_slice(n, jn, r).tr_mul(&self.a_mat);
        let mut h = DMatrix::<f64>::zeros(p, p);
        let mut g = DVector::<f64>::zeros(p);
        let hs = h.as_mut_slice();
        let mut m = vec![0.0; q * q];
        for j in 0..jn {
            for x in 0..q {
                for y in x..q {
                    let v = all_m[(j, pair_index(q, x, y))];
                    m[x * q + y] = v;
                    m[y * q + x] = v;
                }
            }
            for b1 in &self.blocks {
                let (f1, v1) = &b1.rows[j];
                for a1 in 0..b1.q {
                    let va = all_v[(j, b1.q_off + a1)];
                    let base1 = b1.p_off + a1 * b1.k + f1;
                    for (d1, bv1) in v1.iter().enumerate() {
                        g[base1 + d1] += va * bv1;
                    }
                    let mrow = &m[(b1.q_off + a1) * q..(b1.q_off + a1 + 1) * q];
                    for b2 in &self.blocks {
                        let (f2, v2) = &b2.rows[j];
                        for a2 in 0..b2.q {
                            let mv = mrow[b2.q_off + a2];
                            if mv == 0.0 {
                                continue;
                            }
                            let base2 = b2.p_off + a2 * b2.k + f2;
                            for (d2, bv2) in v2.iter().enumerate() {
                                let col = &mut hs
                                    [(base2 + d2) * p + base1..(base2 + d2) * p + base1 + v1.len()];
                                let mb = mv * bv2;
                                for (hv, bv1) in col.iter_mut().zip(v1) {
                                    *hv += mb * bv1;
                                }
                            }
                        }
                    }
                }
            }
        }
        (h, g)
    }

    /// Block-diagonal `sum_m lambda_m D_m`.
    fn penalty(&self, lambdas: &[f64]) -> DMatrix<f64> {
        let mut s = DMatrix::zeros(self.p, self.p);
        for (b, &l) in self.blocks.iter().zip(lambdas) {
            if b.rank == 0 || l == 0.0 {
                continue;
            }
            let mut view = s.view_mut((b.p_off, b.p_off), (b.penalty.nrows(), b.penalty.ncols()));
            view += &b.penalty * l;
        }
        s
    }

    fn penalty_quadratic(&self, lambdas: &[f64], theta: &[f64]) -> f64 {
        self.blocks
            .iter()
            .zip(lambdas)
            .filter(|(b, _)| b.rank > 0)
            .map(|(b, &l)| {
                l * block_quadratic(&b.penalty, &theta[b.p_off..b.p_off + b.penalty.nrows()])
            })
            .sum()
    }
}

fn block_quadratic(d: &DMatrix<f64>, theta: &[f64]) -> f64 {
    let t = DVector::from_column_slice(theta);
    t.dot(&(d * &t))
}

/// Cholesky of `m + eps I`, raising `eps` until the factorization succeeds.
fn robust_cholesky(m: &DMatrix<f64>, ridge: f64) -> Result<Cholesky<f64, Dyn>> {
    let p = m.nrows();
    let scale = (m.trace() / p.max(1) as f64).abs().max(1.0);
    let mut eps = ridge * scale;
    for _ in 0..12 {
        let mut k = m.clone();
        for d in 0..p {
            k[(d, d)] += eps;
        }
        if let Some(ch) = Cholesky::new(k) {
            return Ok(ch);
        }
        eps = if eps == 0.0 {
            1e-12 * scale
        } else {
            eps * 100.0
        };
    }
    Err(Error::Numerical(
        "penalized normal equations are not positive definite".into(),
    ))
}

struct InnerResult {
    theta: Vec<f64>,
    eta: Vec<f64>,
    pen_dev: f64,
    iterations: usize,
    converged: bool,
    relative_change: f64,
    /// Penalized deviance after each accepted step, starting value first.
    #[cfg_attr(not(test), allow(dead_code))]
    trace: Vec<f64>,
}

/// Gaussian working model at the current iterate: `H = X'WX`, `g = X'Wz`,
/// `c = z'Wz`.
struct WorkingModel {
    h: DMatrix<f64>,
    g: DVector<f64>,
    c: f64,
    nobs: f64,
}

struct Solver<'a> {
    sys: &'a System,
    z: Vec<f64>,
    cfg: &'a SolverConfig,
}

impl Solver<'_> {
    fn weights(&self, eta: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut w = Vec::with_capacity(eta.len());
        let mut r = Vec::with_capacity(eta.len());
        for (&e, &z) in eta.iter().zip(&self.z) {
            let mu = logistic(e);
            let wi = (mu * (1.0 - mu)).max(MIN_WEIGHT);
            w.push(wi);
            r.push(wi * e + (z - mu));
        }
        (w, r)
    }

    fn working_model(&self, eta: &[f64]) -> WorkingModel {
        let (w, r) = self.weights(eta);
        let (h, g) = self.sys.cross_products(&w, &r);
        let c = r.iter().zip(&w).map(|(r, w)| r * r / w).sum();
        WorkingModel {
            h,
            g,
            c,
            nobs: eta.len() as f64,
        }
    }

    fn pen_dev(&self, eta: &[f64], theta: &[f64], lambdas: &[f64]) -> f64 {
        bernoulli_deviance(&self.z, eta) + self.sys.penalty_quadratic(lambdas, theta)
    }

    fn irls(&self, lambdas: &[f64], theta0: Vec<f64>) -> Result<InnerResult> {
        let s = self.sys.penalty(lambdas);
        let mut theta = theta0;
        let mut eta = self.sys.eta(&theta);
        let mut pd = self.pen_dev(&eta, &theta, lambdas);
        let mut rel = f64::INFINITY;
        let mut trace = vec![pd];
        for it in 1..=self.cfg.max_inner {
            let (w, r) = self.weights(&eta);
            let (h, g) = self.sys.cross_products(&w, &r);
            let ch = robust_cholesky(&(h + &s), self.cfg.ridge)?;
            let proposal = ch.solve(&g);
            let mut step: Vec<f64> = proposal.iter().zip(&theta).map(|(n, o)| n - o).collect();
            let mut accepted = None;
            for _ in 0..=MAX_HALVINGS {
                let cand: Vec<f64> = theta.iter().zip(&step).map(|(t, d)| t + d).collect();
                let cand_eta = self.sys.eta(&cand);
                let cand_pd = self.pen_dev(&cand_eta, &cand, lambdas);
                if cand_pd.is_finite() && cand_pd <= pd + 1e-12 * pd.abs() {
                    accepted = Some((cand, cand_eta, cand_pd));
                    break;
                }
                step.iter_mut().for_each(|d| *d *= 0.5);
            }
            let Some((cand, cand_eta, cand_pd)) = accepted else {
                // no descent along the Newton direction: stationary to rounding
                return Ok(InnerResult {
                    theta,
                    eta,
                    pen_dev: pd,
                    iterations: it,
                    converged: true,
                    relative_change: 0.0,
                    trace,
                });
            };
            rel = (pd - cand_pd).abs() / (cand_pd.abs() + 0.1);
            let max_step = step.iter().fold(0.0_f64, |m, d| m.max(d.abs()));
            let max_theta = cand.iter().fold(0.0_f64, |m, t| m.max(t.abs()));
            theta = cand;
            eta = cand_eta;
            pd = cand_pd;
            trace.push(pd);
            if rel < self.cfg.tolerance && max_step <= self.cfg.tolerance * (1.0 + max_theta) {
                return Ok(InnerResult {
                    theta,
                    eta,
                    pen_dev: pd,
                    iterations: it,
                    converged: true,
                    relative_change: rel,
                    trace,
                });
            }
        }
        Ok(InnerResult {
            theta,
            eta,
            pen_dev: pd,
            iterations: self.cfg.max_inner,
            converged: false,
            relative_change: rel,
            trace,
        })
    }
}

/// Evaluation of the working-model criterion at one set of log smoothing
/// parameters.
struct CriterionEval {
    value: f64,
    theta: DVector<f64>,
    inverse: DMatrix<f64>,
}

fn penalized_indices(sys: &System) -> Vec<usize> {
    (0..sys.blocks.len())
        .filter(|&m| sys.blocks[m].rank > 0)
        .collect()
}

fn expand_lambdas(sys: &System, pen: &[usize], rho: &[f64]) -> Vec<f64> {
    let mut l = vec![0.0; sys.blocks.len()];
    for (&m, r) in pen.iter().zip(rho) {
        l[m] = r.exp();
    }
    l
}

/// REML for a Gaussian working model with unit scale:
/// `z'Wz - theta'g + log|H + S| - sum_m rank_m log(lambda_m)`.
fn reml_eval(
    sys: &System,
    wm: &WorkingModel,
    pen: &[usize],
    rho: &[f64],
    ridge: f64,
) -> Result<CriterionEval> {
    let lambdas = expand_lambdas(sys, pen, rho);
    let k = &wm.h + sys.penalty(&lambdas);
    let ch = robust_cholesky(&k, ridge)?;
    let theta = ch.solve(&wm.g);
    let logdet = 2.0 * ch.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let log_s: f64 = pen
        .iter()
        .zip(rho)
        .map(|(&m, r)| sys.blocks[m].rank as f64 * r)
        .sum();
    let value = wm.c - theta.dot(&wm.g) + logdet - log_s;
    Ok(CriterionEval {
        value,
        theta,
        inverse: ch.inverse(),
    })
}

/// GCV for the working model: `N * rss / (N - tr(A))^2`.
fn gcv_eval(
    sys: &System,
    wm: &WorkingModel,
    pen: &[usize],
    rho: &[f64],
    ridge: f64,
) -> Result<CriterionEval> {
    let lambdas = expand_lambdas(sys, pen, rho);
    let k = &wm.h + sys.penalty(&lambdas);
    let ch = robust_cholesky(&k, ridge)?;
    let theta = ch.solve(&wm.g);
    let inverse = ch.inverse();
    let rss = (wm.c - 2.0 * theta.dot(&wm.g) + theta.dot(&(&wm.h * &theta))).max(0.0);
    let edf = (&inverse * &wm.h).trace();
    let resid_df = (wm.nobs - edf).max(1e-8);
    Ok(CriterionEval {
        value: wm.nobs * rss / (resid_df * resid_df),
        theta,
        inverse,
    })
}

/// Gradient and Hessian of the REML criterion in `log(lambda)`.
///
/// With `A_m = lambda_m S_m`, `K = H + sum A_m` and `u_m = A_m theta`:
/// `g_m = theta'A_m theta + tr(K^-1 A_m) - rank_m` and
/// `H_mk = [m = k] (g_m + rank_m) - 2 u_m'K^-1 u_k - tr(K^-1 A_k K^-1 A_m)`.
fn reml_derivatives(
    sys: &System,
    pen: &[usize],
    rho: &[f64],
    eval: &CriterionEval,
) -> (DVector<f64>, DMatrix<f64>) {
    let np = pen.len();
    let mut u = Vec::with_capacity(np);
    let mut grad = DVector::zeros(np);
    for (idx, &m) in pen.iter().enumerate() {
        let b = &sys.blocks[m];
        let r = b.penalty.nrows();
        let a = &b.penalty * rho[idx].exp();
        let th = eval.theta.rows(b.p_off, r).clone_owned();
        let um = &a * &th;
        let tr = eval
            .inverse
            .view((b.p_off, b.p_off), (r, r))
            .component_mul(&a)
            .sum();
        grad[idx] = th.dot(&um) + tr - b.rank as f64;
        u.push((b.p_off, a, um));
    }
    let mut hess = DMatrix::zeros(np, np);
    for x in 0..np {
        let (ox, ax, ux) = &u[x];
        for y in x..np {
            let (oy, ay, uy) = &u[y];
            let kxy = eval.inverse.view((*ox, *oy), (ax.nrows(), ay.nrows()));
            let kyx = kxy.transpose();
            let quad = ux.dot(&(kxy * uy));
            let tr = ((&kxy * ay) * (&kyx * ax)).trace();
            let mut v = -2.0 * quad - tr;
            if x == y {
                v += grad[x] + sys.blocks[pen[x]].rank as f64;
            }
            hess[(x, y)] = v;
            hess[(y, x)] = v;
        }
    }
    (grad, hess)
}

/// Newton iterations for the REML smoothing parameters on `log(lambda)`,
/// with the Hessian made positive definite and step halving on the criterion.
fn optimize_reml(
    sys: &System,
    wm: &WorkingModel,
    pen: &[usize],
    rho0: &[f64],
    bounds: &[(f64, f64)],
    ridge: f64,
    step_tol: f64,
) -> Result<Vec<f64>> {
    const MAX_STEP: f64 = 5.0;
    // parameters whose gradient and curvature are both below this are left
    // alone: the criterion is flat in them and only numerical noise remains
    const FLAT: f64 = 1e-2;
    let mut rho = rho0.to_vec();
    let mut cur = reml_eval(sys, wm, pen, &rho, ridge)?;
    for _ in 0..REML_NEWTON_STEPS {
        let (grad, hess) = reml_derivatives(sys, pen, &rho, &cur);
        let active: Vec<usize> = (0..rho.len())
            .filter(|&k| grad[k].abs() >= FLAT || hess[(k, k)].abs() >= FLAT)
            .collect();
        if active.is_empty() {
            break;
        }
        let g = DVector::from_iterator(active.len(), active.iter().map(|&k| grad[k]));
        let h = DMatrix::from_fn(active.len(), active.len(), |a, b| {
            hess[(active[a], active[b])]
        });
        let eig = h.symmetric_eigen();
        let top = eig.eigenvalues.amax();
        let floor = (top * 1e-7).max(1e-12);
        let mut sub = DVector::zeros(active.len());
        for (k, &ev) in eig.eigenvalues.iter().enumerate() {
            let v = eig.eigenvectors.column(k);
            sub -= v * (v.dot(&g) / ev.abs().max(floor));
        }
        let longest = sub.amax();
        if longest > MAX_STEP {
            sub *= MAX_STEP / longest;
        }
        let mut step = vec![0.0; rho.len()];
        for (a, &k) in active.iter().enumerate() {
            step[k] = sub[a];
        }
        let mut moved = 0.0_f64;
        for _ in 0..20 {
            let cand: Vec<f64> = rho
                .iter()
                .zip(&step)
                .zip(bounds)
                .map(|((r, s), (lo, hi))| (r + s).clamp(*lo, *hi))
                .collect();
            let eval = reml_eval(sys, wm, pen, &cand, ridge)?;
            if eval.value < cur.value {
                moved = cand
                    .iter()
                    .zip(&rho)
                    .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()));
                rho = cand;
                cur = eval;
                break;
            }
            step.iter_mut().for_each(|s| *s *= 0.5);
        }
        if moved < step_tol {
            break;
        }
    }
    Ok(rho)
}

/// Cyclic golden-section search of GCV over each `log(lambda)`.
fn optimize_gcv(
    sys: &System,
    wm: &WorkingModel,
    pen: &[usize],
    rho0: &[f64],
    bounds: &[(f64, f64)],
    ridge: f64,
) -> Result<Vec<f64>> {
    const GOLD: f64 = 0.618_033_988_749_894_9;
    let mut rho = rho0.to_vec();
    let mut best = gcv_eval(sys, wm, pen, &rho, ridge)?.value;
    for _sweep in 0..4 {
        let before = rho.clone();
        for idx in 0..rho.len() {
            let (lo_b, hi_b) = bounds[idx];
            let mut lo = (rho[idx] - 8.0).max(lo_b);
            let mut hi = (rho[idx] + 8.0).min(hi_b);
            let f = |x: f64, rho: &mut Vec<f64>| -> Result<f64> {
                let keep = rho[idx];
                rho[idx] = x;
                let v = gcv_eval(sys, wm, pen, rho, ridge)?.value;
                rho[idx] = keep;
                Ok(v)
            };
            let mut x1 = hi - GOLD * (hi - lo);
            let mut x2 = lo + GOLD * (hi - lo);
            let mut f1 = f(x1, &mut rho)?;
            let mut f2 = f(x2, &mut rho)?;
            while hi - lo > 1e-4 {
                if f1 <= f2 {
                    hi = x2;
                    x2 = x1;
                    f2 = f1;
                    x1 = hi - GOLD * (hi - lo);
                    f1 = f(x1, &mut rho)?;
                } else {
                    lo = x1;
                    x1 = x2;
                    f1 = f2;
                    x2 = lo + GOLD * (hi - lo);
                    f2 = f(x2, &mut rho)?;
                }
            }
            let (x, fx) = if f1 <= f2 { (x1, f1) } else { (x2, f2) };
            if fx < best {
                best = fx;
                rho[idx] = x;
            }
        }
        let moved = rho
            .iter()
            .zip(&before)
            .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()));
        if moved < 1e-3 {
            break;
        }
    }
    Ok(rho)
}

struct SystemFit {
    theta: Vec<f64>,
    lambdas: Vec<f64>,
    convergence: Convergence,
}

fn fit_system(sys: &System, z: Vec<f64>, cfg: &SolverConfig) -> Result<SystemFit> {
    let solver = Solver { sys, z, cfg };
    let pen = penalized_indices(sys);

    // data-scaled reference lambda for every penalized block
    let w0 = vec![0.25; sys.n * sys.j];
    let (h0, _) = sys.cross_products(&w0, &vec![0.0; sys.n * sys.j]);
    let scale: Vec<f64> = pen
        .iter()
        .map(|&m| {
            let b = &sys.blocks[m];
            let r = b.penalty.nrows();
            let ht = h0.view((b.p_off, b.p_off), (r, r)).trace();
            let dt = b.penalty.trace();
            if ht > 0.0 && dt > 0.0 {
                ht / dt
            } else {
                1.0
            }
        })
        .collect();
    let bounds: Vec<(f64, f64)> = scale
        .iter()
        .map(|s| (s.ln() - LOG_LAMBDA_SPAN, s.ln() + LOG_LAMBDA_SPAN))
        .collect();

    let mut rho: Vec<f64> = match cfg.smoothing {
        SmoothingMode::Fixed => {
            let fixed = &cfg.fixed_lambda;
            if fixed.is_empty() || (fixed.len() != 1 && fixed.len() != pen.len()) {
                return Err(Error::InvalidInput(format!(
                    "fixed smoothing needs 1 or {} lambdas, got {}",
                    pen.len(),
                    fixed.len()
                )));
            }
            if fixed.iter().any(|&l| !(l > 0.0 && l.is_finite())) {
                return Err(Error::InvalidInput(
                    "smoothing parameters must be positive".into(),
                ));
            }
            (0..pen.len())
                .map(|k| fixed[if fixed.len() == 1 { 0 } else { k }].ln())
                .collect()
        }
        _ => scale.iter().map(|s| s.ln()).collect(),
    };

    let mut inner = solver.irls(&expand_lambdas(sys, &pen, &rho), vec![0.0; sys.p])?;
    let mut total_inner = inner.iterations;
    let mut outer = 0;
    let mut converged = inner.converged;
    let mut rel = inner.relative_change;

    if cfg.smoothing != SmoothingMode::Fixed && !pen.is_empty() && inner.converged {
        converged = false;
        while outer < cfg.max_outer {
            outer += 1;
            let wm = solver.working_model(&inner.eta);
            let new_rho = match cfg.smoothing {
                SmoothingMode::Reml => optimize_reml(
                    sys,
                    &wm,
                    &pen,
                    &rho,
                    &bounds,
                    cfg.ridge,
                    0.1 * cfg.lambda_tolerance,
                )?,
                SmoothingMode::Gcv => optimize_gcv(sys, &wm, &pen, &rho, &bounds, cfg.ridge)?,
                SmoothingMode::Fixed => unreachable!(),
            };
            let next = solver.irls(&expand_lambdas(sys, &pen, &new_rho), inner.theta.clone())?;
            total_inner += next.iterations;
            let d_rho = new_rho
                .iter()
                .zip(&rho)
                .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()));
            rel = (next.pen_dev - inner.pen_dev).abs() / (next.pen_dev.abs() + 0.1);
            // lambdas on a flat criterion may keep drifting without moving the fit
            let d_eta = next
                .eta
                .iter()
                .zip(&inner.eta)
                .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()));
            rho = new_rho;
            let inner_ok = next.converged;
            inner = next;
            if !inner_ok {
                break;
            }
            if rel < cfg.tolerance && (d_rho < cfg.lambda_tolerance || d_eta < cfg.lambda_tolerance)
            {
                converged = true;
                break;
            }
        }
    }

    Ok(SystemFit {
        theta: inner.theta,
        lambdas: expand_lambdas(sys, &pen, &rho),
        convergence: Convergence {
            converged,
            inner_iterations: total_inner,
            outer_iterations: outer,
            penalized_deviance: inner.pen_dev,
            relative_change: rel,
        },
    })
}

fn check_response(design_subjects: usize, z: &IndicatorMatrix) -> Result<()> {
    if z.rows() != design_subjects {
        return Err(Error::DimensionMismatch(format!(
            "indicator matrix has {} rows for {design_subjects} subjects",
            z.rows()
        )));
    }
    let ones: usize = (0..z.cols()).map(|j| z.column_count(j)).sum();
    if ones == 0 || ones == z.rows() * z.cols() {
        return Err(Error::DegenerateResponse(
            "indicators are all 0 or all 1".into(),
        ));
    }
    Ok(())
}

fn split_terms(theta: &[f64], widths: &[usize]) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(widths.len());
    let mut off = 0;
    for &w in widths {
        out.push(theta[off..off + w].to_vec());
        off += w;
    }
    out
}

fn term_lambdas(blocks: &[DesignBlock], lambdas: &[f64]) -> Vec<Option<f64>> {
    blocks
        .iter()
        .zip(lambdas)
        .map(|(b, &l)| b.is_penalized().then_some(l))
        .collect()
}

/// Fits all grid points jointly.
pub fn fit_joint(
    design: &Design,
    z: &IndicatorMatrix,
    cfg: &SolverConfig,
) -> Result<FittedCdfModel> {
    check_response(design.subjects(), z)?;
    if z.cols() != design.grid.len() {
        return Err(Error::DimensionMismatch(format!(
            "indicator matrix has {} columns for a grid of {}",
            z.cols(),
            design.grid.len()
        )));
    }
    let sys = System::new(&design.blocks)?;
    let zv: Vec<f64> = (0..z.rows())
        .flat_map(|i| (0..z.cols()).map(move |j| (i, j)))
        .map(|(i, j)| z.value(i, j))
        .collect();
    let fit = fit_system(&sys, zv, cfg)?;
    let widths: Vec<usize> = design.blocks.iter().map(DesignBlock::ncols).collect();
    Ok(FittedCdfModel {
        version: MODEL_FORMAT_VERSION,
        link: Link::Logit,
        grid: design.grid.clone(),
        terms: design.terms.clone(),
        fit: FittedCoefficients::Joint {
            coefficients: split_terms(&fit.theta, &widths),
            lambdas: term_lambdas(&design.blocks, &fit.lambdas),
        },
        convergence: fit.convergence,
    })
}

/// Fits every grid point separately with the pointwise blocks of `design`.
pub fn fit_pointwise(
    design: &Design,
    z: &IndicatorMatrix,
    cfg: &SolverConfig,
) -> Result<FittedCdfModel> {
    check_response(design.subjects(), z)?;
    let jn = design.grid.len();
    if z.cols() != jn {
        return Err(Error::DimensionMismatch(format!(
            "indicator matrix has {} columns for a grid of {jn}",
            z.cols()
        )));
    }
    let blocks = design.pointwise_blocks()?;
    let sys = System::new(&blocks)?;
    let widths: Vec<usize> = blocks.iter().map(DesignBlock::ncols).collect();
    let n = z.rows();

    let fit_point = |j: usize| -> Result<Option<PointFit>> {
        let count = z.column_count(j);
        if count == 0 || count == n {
            return Ok(None);
        }
        let zv: Vec<f64> = (0..n).map(|i| z.value(i, j)).collect();
        let fit = fit_system(&sys, zv, cfg)?;
        Ok(Some(PointFit {
            coefficients: split_terms(&fit.theta, &widths),
            lambdas: term_lambdas(&blocks, &fit.lambdas),
            degenerate: false,
            convergence: fit.convergence,
        }))
    };

    let fits: Vec<Result<Option<PointFit>>> = if cfg.threads == 1 {
        (0..jn).map(fit_point).collect()
    } else if cfg.threads == 0 {
        (0..jn).into_par_iter().map(fit_point).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads)
            .build()
            .map_err(|e| Error::InvalidInput(format!("thread pool: {e}")))?;
        pool.install(|| (0..jn).into_par_iter().map(fit_point).collect())
    };
    let fits: Vec<Option<PointFit>> = fits.into_iter().collect::<Result<_>>()?;

    let good: Vec<usize> = (0..jn).filter(|&j| fits[j].is_some()).collect();
    if good.is_empty() {
        return Err(Error::DegenerateResponse(
            "every grid point has a constant indicator column".into(),
        ));
    }
    let mut points = Vec::with_capacity(jn);
    for j in 0..jn {
        match &fits[j] {
            Some(f) => points.push(f.clone()),
            None => {
                // nearest non-degenerate neighbour, preferring the lower one on ties
                let src = *good
                    .iter()
                    .min_by_key(|&&g| (g.abs_diff(j), g))
                    .expect("non-empty");
                let mut f = fits[src].clone().expect("non-degenerate");
                f.degenerate = true;
                points.push(f);
            }
        }
    }
    let real: Vec<&PointFit> = points.iter().filter(|p| !p.degenerate).collect();
    let convergence = Convergence {
        converged: real.iter().all(|p| p.convergence.converged),
        inner_iterations: real.iter().map(|p| p.convergence.inner_iterations).sum(),
        outer_iterations: real.iter().map(|p| p.convergence.outer_iterations).sum(),
        penalized_deviance: real.iter().map(|p| p.convergence.penalized_deviance).sum(),
        relative_change: real
            .iter()
            .map(|p| p.convergence.relative_change)
            .fold(0.0, f64::max),
    };
    Ok(FittedCdfModel {
        version: MODEL_FORMAT_VERSION,
        link: Link::Logit,
        grid: design.grid.clone(),
        terms: design.terms.clone(),
        fit: FittedCoefficients::Pointwise { points },
        convergence,
    })
}

impl FittedCdfModel {
    pub fn mode(&self) -> FitMode {
        match self.fit {
            FittedCoefficients::Joint { .. } => FitMode::Joint,
            FittedCoefficients::Pointwise { .. } => FitMode::Pointwise,
        }
    }

    fn subject_factors(&self, covariates: &Covariates) -> Result<Vec<DMatrix<f64>>> {
        self.terms
            .iter()
            .map(|t| t.subject_factor(covariates))
            .collect()
    }

    /// Linear predictor `n x points.len()` (joint fits) at arbitrary response
    /// values inside the grid range.
    pub fn linear_predictor_at(
        &self,
        covariates: &Covariates,
        points: &[f64],
    ) -> Result<DMatrix<f64>> {
        let FittedCoefficients::Joint { coefficients, .. } = &self.fit else {
            return Err(Error::InvalidInput(
                "pointwise fits are only defined on their grid".into(),
            ));
        };
        let factors = self.subject_factors(covariates)?;
        let blocks = self
            .terms
            .iter()
            .zip(factors)
            .map(|(t, f)| {
                Ok(DesignBlock {
                    label: t.label(),
                    penalty: crate::basis::PenaltyMatrix::zero(f.ncols() * t.response_width()),
                    subject_factor: f,
                    response_basis: t.response_basis(points)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let sys = System::new(&blocks)?;
        let theta: Vec<f64> = coefficients.iter().flatten().copied().collect();
        if theta.len() != sys.p {
            return Err(Error::DimensionMismatch(format!(
                "model has {} coefficients but the design has {} columns",
                theta.len(),
                sys.p
            )));
        }
        let eta = sys.eta(&theta);
        Ok(DMatrix::from_row_slice(sys.n, points.len(), &eta))
    }

    /// Linear predictor `n x J` on the model's grid.
    pub fn linear_predictor(&self, covariates: &Covariates) -> Result<DMatrix<f64>> {
        match &self.fit {
            FittedCoefficients::Joint { .. } => {
                self.linear_predictor_at(covariates, self.grid.points())
            }
            FittedCoefficients::Pointwise { points } => {
                let factors = self.subject_factors(covariates)?;
                let n = covariates.len();
                let mut eta = DMatrix::zeros(n, points.len());
                for (j, pf) in points.iter().enumerate() {
                    for (f, th) in factors.iter().zip(&pf.coefficients) {
                        if f.ncols() != th.len() {
                            return Err(Error::DimensionMismatch(
                                "covariates do not conform to the model terms".into(),
                            ));
                        }
                        for i in 0..n {
                            let mut s = 0.0;
                            for (c, t) in th.iter().enumerate() {
                                s += f[(i, c)] * t;
                            }
                            eta[(i, j)] += s;
                        }
                    }
                }
                Ok(eta)
            }
        }
    }

    /// Conditional CDF `g^{-1}(eta)` of every subject at `points` (joint fits).
    pub fn cdf_at(&self, covariates: &Covariates, points: &[f64]) -> Result<DMatrix<f64>> {
        Ok(self.linear_predictor_at(covariates, points)?.map(logistic))
    }

    /// Pooled smoothing parameters and coefficients of a joint fit, if any.
    pub fn joint_coefficients(&self) -> Option<(&[Vec<f64>], &[Option<f64>])> {
        match &self.fit {
            FittedCoefficients::Joint {
                coefficients,
                lambdas,
            } => Some((coefficients, lambdas)),
            FittedCoefficients::Pointwise { .. } => None,
        }
    }

    /// Evaluates coefficient function `term` on `t_points x y_points`.
    ///
    /// Returns rows `(t, y, value)`; `t` is `None` for response-only terms and
    /// `y` is `None` for response-invariant ones. For pointwise fits the
    /// response values are the grid points.
    pub fn coefficient_function(
        &self,
        term: usize,
        t_points: &[f64],
        y_points: &[f64],
    ) -> Result<Vec<(Option<f64>, Option<f64>, Option<usize>, f64)>> {
        let spec = self
            .terms
            .get(term)
            .ok_or_else(|| Error::InvalidInput(format!("no term {term}")))?;
        let mut out = Vec::new();
        let t_vals = match spec.t_basis() {
            Some(b) => Some(crate::basis::eval_basis(b, t_points)?),
            None => None,
        };
        let eval_joint = |theta: &[f64], ys: &[f64], out: &mut Vec<_>| -> Result<()> {
            let k = spec.response_width();
            let q = spec.factor_width();
            let yb = spec.response_basis(ys)?;
            match &t_vals {
                Some(tb) => {
                    for (ti, &t) in t_points.iter().enumerate() {
                        for (yi, &y) in ys.iter().enumerate() {
                            let mut s = 0.0;
                            for a in 0..q {
                                for d in 0..k {
                                    s += theta[a * k + d] * tb[(ti, a)] * yb[(yi, d)];
                                }
                            }
                            out.push((Some(t), Some(y), None, s));
                        }
                    }
                }
                None => {
                    for a in 0..q {
                        for (yi, &y) in ys.iter().enumerate() {
                            let mut s = 0.0;
                            for d in 0..k {
                                s += theta[a * k + d] * yb[(yi, d)];
                            }
                            let y = spec.y_basis().map(|_| y);
                            out.push((None, y, (q > 1).then_some(a), s));
                        }
                    }
                }
            }
            Ok(())
        };
        match &self.fit {
            FittedCoefficients::Joint { coefficients, .. } => {
                let ys: Vec<f64> = if spec.y_basis().is_some() {
                    y_points.to_vec()
                } else {
                    vec![0.0]
                };
                eval_joint(&coefficients[term], &ys, &mut out)?;
            }
            FittedCoefficients::Pointwise { points } => {
                for (j, pf) in points.iter().enumerate() {
                    let y = self.grid.points()[j];
                    let theta = &pf.coefficients[term];
                    match &t_vals {
                        Some(tb) => {
                            for (ti, &t) in t_points.iter().enumerate() {
                                let s: f64 =
                                    theta.iter().enumerate().map(|(a, c)| c * tb[(ti, a)]).sum();
                                out.push((Some(t), Some(y), None, s));
                            }
                        }
                        None => {
                            for (a, &c) in theta.iter().enumerate() {
                                out.push((None, Some(y), (theta.len() > 1).then_some(a), c));
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Estimated CDF of each subject on the model grid (before monotonization).
pub fn predict_cdf(model: &FittedCdfModel, covariates: &Covariates) -> Result<Vec<ConditionalCdf>> {
    let eta = model.linear_predictor(covariates)?;
    Ok(covariates
        .ids()
        .iter()
        .enumerate()
        .map(|(i, id)| ConditionalCdf {
            subject: id.clone(),
            grid: model.grid.points().to_vec(),
            values: eta.row(i).iter().map(|&e| logistic(e)).collect(),
            monotone: false,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{assemble_design, make_artificial_response, DesignOptions, TermSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scalar_problem(n: usize, j: usize, seed: u64) -> (Covariates, Vec<f64>, Grid) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y: Vec<f64> = x
            .iter()
            .map(|&x| 1.5 * x + rng.random_range(-1.0..1.0) + rng.random_range(-1.0..1.0))
            .collect();
        let grid =
            crate::model::build_response_grid(&y, j, crate::model::GridRule::FullRange).unwrap();
        let ids = (0..n).map(|i| format!("s{i}")).collect();
        let cov = Covariates::new(ids).with_scalar("x", x).unwrap();
        (cov, y, grid)
    }

    #[test]
    fn structured_cross_products_match_dense() {
        let (cov, _, grid) = scalar_problem(13, 7, 1);
        let terms = [
            TermSpec::intercept(5),
            TermSpec::varying("x", 4),
            TermSpec::constant(&["x"]),
        ];
        let d = assemble_design(&terms, &cov, &grid, &DesignOptions::default()).unwrap();
        let sys = System::new(&d.blocks).unwrap();
        let x = d.to_dense();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w: Vec<f64> = (0..x.nrows()).map(|_| rng.random_range(0.1..1.0)).collect();
        let r: Vec<f64> = (0..x.nrows())
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let (h, g) = sys.cross_products(&w, &r);
        let wd = DMatrix::from_diagonal(&DVector::from_column_slice(&w));
        let hd = x.transpose() * wd * &x;
        let gd = x.transpose() * DVector::from_column_slice(&r);
        assert!((h - hd).amax() < 1e-10);
        assert!((g - gd).amax() < 1e-10);
        let theta: Vec<f64> = (0..sys.p).map(|_| rng.random_range(-1.0..1.0)).collect();
        let eta = sys.eta(&theta);
        let ed = &x * DVector::from_column_slice(&theta);
        for (a, b) in eta.iter().zip(ed.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_predictor_gives_one_half() {
        assert_eq!(logistic(0.0), 0.5);
        assert!(logistic(-800.0) >= 0.0 && logistic(800.0) <= 1.0);
        assert!((softplus(-800.0)).abs() < 1e-300 + 1e-320);
    }

    #[test]
    fn all_zero_response_rejected() {
        let (cov, _, grid) = scalar_problem(10, 5, 2);
        let d = assemble_design(
            &[TermSpec::intercept(4)],
            &cov,
            &grid,
            &DesignOptions::default(),
        )
        .unwrap();
        let z = IndicatorMatrix::from_fn(10, 5, |_, _| false);
        assert!(matches!(
            fit_joint(&d, &z, &SolverConfig::fixed(1.0)),
            Err(Error::DegenerateResponse(_))
        ));
        let z = IndicatorMatrix::from_fn(10, 5, |_, _| true);
        assert!(fit_pointwise(&d, &z, &SolverConfig::fixed(1.0)).is_err());
    }

    #[test]
    fn intercept_only_tracks_empirical_cdf() {
        let (cov, y, grid) = scalar_problem(400, 15, 4);
        let d = assemble_design(
            &[TermSpec::intercept(12)],
            &cov,
            &grid,
            &DesignOptions::default(),
        )
        .unwrap();
        let z = make_artificial_response(&y, &grid).unwrap();
        let m = fit_joint(&d, &z, &SolverConfig::fixed(1e-6)).unwrap();
        assert!(m.convergence.converged);
        let cdf = predict_cdf(&m, &cov).unwrap();
        for j in 1..grid.len() - 1 {
            let ecdf = z.column_mean(j);
            assert!((cdf[0].values[j] - ecdf).abs() < 0.05, "j={j}");
        }
    }

    #[test]
    fn gradient_vanishes_at_fixed_lambda_optimum() {
        let (cov, y, grid) = scalar_problem(60, 12, 5);
        let terms = [TermSpec::intercept(6), TermSpec::varying("x", 5)];
        let d = assemble_design(&terms, &cov, &grid, &DesignOptions::default()).unwrap();
        let z = make_artificial_response(&y, &grid).unwrap();
        let m = fit_joint(&d, &z, &SolverConfig::fixed(0.5)).unwrap();
        let (coef, _) = m.joint_coefficients().unwrap();
        let theta = DVector::from_iterator(11, coef.iter().flatten().copied());
        let x = d.to_dense();
        let mu = (&x * &theta).map(logistic);
        let zv = DVector::from_iterator(
            x.nrows(),
            (0..60)
                .flat_map(|i| (0..12).map(move |j| (i, j)))
                .map(|(i, j)| z.value(i, j)),
        );
        let sys = System::new(&d.blocks).unwrap();
        let s = sys.penalty(&[0.5, 0.5]);
        let grad = (x.transpose() * (zv - mu)) * 2.0 - (&s * &theta) * 2.0;
        assert!(grad.norm() < 1e-5, "gradient norm {}", grad.norm());
    }

    #[test]
    fn predictions_reproduce_fitted_values() {
        let (cov, y, grid) = scalar_problem(40, 8, 6);
        let terms = [TermSpec::intercept(6), TermSpec::varying("x", 4)];
        let d = assemble_design(&terms, &cov, &grid, &DesignOptions::default()).unwrap();
        let z = make_artificial_response(&y, &grid).unwrap();
        let m = fit_joint(&d, &z, &SolverConfig::default()).unwrap();
        let (coef, lambdas) = m.joint_coefficients().unwrap();
        assert!(lambdas.iter().all(|l| l.unwrap() > 0.0));
        let theta = DVector::from_iterator(10, coef.iter().flatten().copied());
        let fitted = (d.to_dense() * theta).map(logistic);
        let cdf = predict_cdf(&m, &cov).unwrap();
        for i in 0..40 {
            for j in 0..8 {
                assert!((cdf[i].values[j] - fitted[i * 8 + j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pointwise_point_equals_single_column_fit() {
        let (cov, y, grid) = scalar_problem(80, 9, 7);
        let terms = [TermSpec::intercept(6), TermSpec::varying("x", 4)];
        let d = assemble_design(&terms, &cov, &grid, &DesignOptions::default()).unwrap();
        let z = make_artificial_response(&y, &grid).unwrap();
        let cfg = SolverConfig {
            threads: 1,
            ..SolverConfig::default()
        };
        let m = fit_pointwise(&d, &z, &cfg).unwrap();
        let FittedCoefficients::Pointwise { points } = &m.fit else {
            panic!("pointwise")
        };
        // first column is all zero (no Y below the minimum)
        assert!(points[0].degenerate);
        assert_eq!(points[0].coefficients, points[1].coefficients);
        let j = 4;
        let single_grid = Grid::new(
            vec![grid.points()[j], grid.points()[j] + 1.0],
            crate::model::GridRule::Custom,
        )
        .unwrap();
        let d1 = assemble_design(&terms, &cov, &single_grid, &DesignOptions::default()).unwrap();
        let z1 = z.select_columns(&[j, j]);
        let m1 = fit_pointwise(&d1, &z1, &cfg).unwrap();
        let FittedCoefficients::Pointwise { points: p1 } = &m1.fit else {
            panic!("pointwise")
        };
        assert_eq!(points[j].coefficients, p1[0].coefficients);
        let eta = m.linear_predictor(&cov).unwrap();
        let eta1 = m1.linear_predictor(&cov).unwrap();
        for i in 0..80 {
            assert_eq!(eta[(i, j)], eta1[(i, 0)]);
        }
    }

    #[test]
    fn large_lambda_flattens_varying_effect() {
        let (cov, y, grid) = scalar_problem(120, 12, 8);
        let terms = [TermSpec::intercept(6), TermSpec::varying("x", 6)];
        let d = assemble_design(&terms, &cov, &grid, &DesignOptions::default()).unwrap();
        let z = make_artificial_response(&y, &grid).unwrap();
        let curvature = |lambda: f64| {
            let m = fit_joint(&d, &z, &SolverConfig::fixed(lambda)).unwrap();
            let (coef, _) = m.joint_coefficients().unwrap();
            d.blocks[1].penalty.quadratic_form(&coef[1])
        };
        let small = curvature(1e-4);
        let large = curvature(1e6);
        assert!(
            large < 1e-6 * small.max(1e-12) || large < 1e-10,
            "{small} {large}"
        );
    }

    #[test]
    fn gcv_mode_runs() {
        let (cov, y, grid) = scalar_problem(60, 10, 9);
        let terms = [TermSpec::intercept(6), TermSpec::varying("x", 4)];
        let d = assemble_design(&terms, &cov, &grid, &DesignOptions::default()).unwrap();
        let z = make_artificial_response(&y, &grid).unwrap();
        let cfg = SolverConfig {
            smoothing: SmoothingMode::Gcv,
            ..SolverConfig::default()
        };
        let m = fit_joint(&d, &z, &cfg).unwrap();
        assert!(m.convergence.converged);
    }

    #[test]
    fn penalized_deviance_never_increases() {
        let (cov, y, grid) = scalar_problem(80, 15, 11);
        let terms = [TermSpec::intercept(8), TermSpec::varying("x", 5)];
        let d = assemble_design(&terms, &cov, &grid, &DesignOptions::default()).unwrap();
        let z = make_artificial_response(&y, &grid).unwrap();
        let sys = System::new(&d.blocks).unwrap();
        let zv = (0..80)
            .flat_map(|i| (0..15).map(move |j| (i, j)))
            .map(|(i, j)| z.value(i, j))
            .collect();
        let cfg = SolverConfig::default();
        let solver = Solver {
            sys: &sys,
            z: zv,
            cfg: &cfg,
        };
        for lambda in [1e-4, 1.0, 1e4] {
            let r = solver.irls(&[lambda, lambda], vec![0.0; sys.p]).unwrap();
            assert!(r.converged);
            assert!(r.trace.len() > 2);
            assert!(
                r.trace.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-12)),
                "{:?}",
                r.trace
            );
        }
    }

    #[test]
    fn null_effect_is_shrunk() {
        let mut ratio = 0.0;
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
            let n = 150;
            let x: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let y: Vec<f64> = (0..n)
                .map(|_| rng.random_range(-1.0..1.0) + rng.random_range(-1.0..1.0))
                .collect();
            let grid = crate::model::build_response_grid(&y, 20, crate::model::GridRule::FullRange)
                .unwrap();
            let cov = Covariates::new((0..n).map(|i| format!("s{i}")).collect())
                .with_scalar("x", x)
                .unwrap();
            let terms = [TermSpec::intercept(8), TermSpec::varying("x", 6)];
            let d = assemble_design(&terms, &cov, &grid, &DesignOptions::default()).unwrap();
            let z = make_artificial_response(&y, &grid).unwrap();
            let m = fit_joint(&d, &z, &SolverConfig::default()).unwrap();
            let ys: Vec<f64> = (0..=200)
                .map(|k| grid.first() + (grid.last() - grid.first()) * k as f64 / 200.0)
                .collect();
            let h = (grid.last() - grid.first()) / 200.0;
            let sq = |term: usize| {
                m.coefficient_function(term, &[], &ys)
                    .unwrap()
                    .iter()
                    .enumerate()
                    .map(|(k, r)| if k == 0 || k == 200 { 0.5 } else { 1.0 } * r.3 * r.3 * h)
                    .sum::<f64>()
            };
            ratio += sq(1) / sq(0);
        }
        ratio /= 20.0;
        assert!(ratio < 0.1, "mean ratio {ratio}");
    }

    #[test]
    fn determinism() {
        let (cov, y, grid) = scalar_problem(50, 10, 10);
        let terms = [TermSpec::intercept(6), TermSpec::varying("x", 4)];
        let d = assemble_design(&terms, &cov, &grid, &DesignOptions::default()).unwrap();
        let z = make_artificial_response(&y, &grid).unwrap();
        let a = fit_joint(&d, &z, &SolverConfig::default()).unwrap();
        let b = fit_joint(&d, &z, &SolverConfig::default()).unwrap();
        assert_eq!(a, b);
    }
}
