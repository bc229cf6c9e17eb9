//! Response grids, artificial binary responses and design assembly for the
//! conditional-distribution regression.
//!
//! Every covariate term contributes a design block whose row for subject `i`
//! at grid point `y_j` is the Kronecker product `a_i (x) b(y_j)` of a
//! per-subject factor `a_i` and a response-basis row `b(y_j)`. Keeping the two
//! factors separate lets the solver form cross-products in
//! `O(n J q^2)` instead of materializing the `nJ x p` matrix.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::basis::{
    curvature_penalty, eval_basis, make_basis, tensor_penalty, BasisSpec, PenaltyMatrix,
};
use crate::error::{Error, Result};

/// How a response grid was built.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum GridRule {
    /// Equally spaced between the smallest and largest response.
    #[default]
    FullRange,
    /// Equally spaced between the fifth smallest and fifth largest response.
    TrimmedOrderStatistics,
    /// Arbitrary strictly increasing points.
    Custom,
}

/// Strictly increasing evaluation points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    points: Vec<f64>,
    rule: GridRule,
}

impl Grid {
    pub fn new(points: Vec<f64>, rule: GridRule) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::InvalidInput(format!(
                "a grid needs at least 2 points, got {}",
                points.len()
            )));
        }
        if points.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("grid points must be finite".into()));
        }
        if points.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidInput(
                "grid points must be strictly increasing".into(),
            ));
        }
        Ok(Self { points, rule })
    }

    /// `len` equally spaced points from `lo` to `hi` inclusive.
    pub fn uniform(lo: f64, hi: f64, len: usize) -> Result<Self> {
        Self::new(equispaced(lo, hi, len), GridRule::Custom)
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn rule(&self) -> GridRule {
        self.rule
    }

    pub fn first(&self) -> f64 {
        self.points[0]
    }

    pub fn last(&self) -> f64 {
        self.points[self.points.len() - 1]
    }
}

fn equispaced(lo: f64, hi: f64, len: usize) -> Vec<f64> {
    if len < 2 {
        return vec![lo; len];
    }
    let step = (hi - lo) / (len - 1) as f64;
    (0..len)
        .map(|k| {
            if k == len - 1 {
                hi
            } else {
                lo + step * k as f64
            }
        })
        .collect()
}

/// Number of order statistics dropped at each end by [`GridRule::TrimmedOrderStatistics`].
const TRIM_ORDER: usize = 5;

/// Builds `j` equally spaced response grid points according to `rule`.
pub fn build_response_grid(y: &[f64], j: usize, rule: GridRule) -> Result<Grid> {
    if j < 2 {
        return Err(Error::InvalidInput(format!(
            "response grid needs at least 2 points, got {j}"
        )));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("responses must be finite".into()));
    }
    let mut sorted = y.to_vec();
    sorted.sort_by(f64::total_cmp);
    let (lo, hi) = match rule {
        GridRule::FullRange | GridRule::Custom => {
            if sorted.len() < 2 {
                return Err(Error::InvalidInput(
                    "full-range grid needs at least 2 responses".into(),
                ));
            }
            (sorted[0], sorted[sorted.len() - 1])
        }
        GridRule::TrimmedOrderStatistics => {
            if sorted.len() < 2 * TRIM_ORDER {
                return Err(Error::InvalidInput(format!(
                    "trimmed grid needs at least {} responses, got {}",
                    2 * TRIM_ORDER,
                    sorted.len()
                )));
            }
            (sorted[TRIM_ORDER - 1], sorted[sorted.len() - TRIM_ORDER])
        }
    };
    if hi <= lo {
        return Err(Error::InvalidInput(format!(
            "responses span no range for the grid ([{lo}, {hi}])"
        )));
    }
    let rule = if rule == GridRule::Custom {
        GridRule::FullRange
    } else {
        rule
    };
    Grid::new(equispaced(lo, hi, j), rule)
}

/// Binary `n x J` matrix of indicators `1(Y_i < y_j)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndicatorMatrix {
    rows: usize,
    cols: usize,
    data: Vec<bool>,
}

impl IndicatorMatrix {
    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.data[i * self.cols + j]
    }

    pub fn value(&self, i: usize, j: usize) -> f64 {
        if self.get(i, j) {
            1.0
        } else {
            0.0
        }
    }

    pub fn column_count(&self, j: usize) -> usize {
        (0..self.rows).filter(|&i| self.get(i, j)).count()
    }

    pub fn column_mean(&self, j: usize) -> f64 {
        self.column_count(j) as f64 / self.rows as f64
    }

    /// Copy restricted to the given columns.
    pub fn select_columns(&self, cols: &[usize]) -> Self {
        Self::from_fn(self.rows, cols.len(), |i, k| self.get(i, cols[k]))
    }
}

/// `Z_ij = 1(Y_i < y_j)`.
pub fn make_artificial_response(y: &[f64], grid: &Grid) -> Result<IndicatorMatrix> {
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("responses must be finite".into()));
    }
    let pts = grid.points();
    Ok(IndicatorMatrix::from_fn(y.len(), pts.len(), |i, j| {
        y[i] < pts[j]
    }))
}

/// A functional covariate observed (or reconstructed) on a common grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FunctionalCovariate {
    grid: Grid,
    /// `n x L` values.
    values: DMatrix<f64>,
}

impl FunctionalCovariate {
    pub fn new(grid: Grid, values: DMatrix<f64>) -> Result<Self> {
        if values.ncols() != grid.len() {
            return Err(Error::DimensionMismatch(format!(
                "functional values have {} columns but the grid has {} points",
                values.ncols(),
                grid.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(
                "functional covariate values must be finite".into(),
            ));
        }
        Ok(Self { grid, values })
    }

    /// Builds from one row of grid values per subject.
    pub fn from_rows(grid: Grid, rows: &[Vec<f64>]) -> Result<Self> {
        let l = grid.len();
        if let Some(r) = rows.iter().find(|r| r.len() != l) {
            return Err(Error::DimensionMismatch(format!(
                "a subject has {} values on a grid of {l} points",
                r.len()
            )));
        }
        Self::new(grid, DMatrix::from_fn(rows.len(), l, |i, j| rows[i][j]))
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn subjects(&self) -> usize {
        self.values.nrows()
    }
}

/// Per-subject covariates keyed by name.
#[derive(Debug, Clone, Default)]
pub struct Covariates {
    ids: Vec<String>,
    scalars: BTreeMap<String, Vec<f64>>,
    functionals: BTreeMap<String, FunctionalCovariate>,
}

impl Covariates {
    pub fn new(ids: Vec<String>) -> Self {
        Self {
            ids,
            ..Self::default()
        }
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn with_scalar(mut self, name: &str, values: Vec<f64>) -> Result<Self> {
        if values.len() != self.ids.len() {
            return Err(Error::DimensionMismatch(format!(
                "scalar covariate `{name}` has {} values for {} subjects",
                values.len(),
                self.ids.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "scalar covariate `{name}` has non-finite values"
            )));
        }
        self.scalars.insert(name.to_string(), values);
        Ok(self)
    }

    pub fn with_functional(mut self, name: &str, covariate: FunctionalCovariate) -> Result<Self> {
        if covariate.subjects() != self.ids.len() {
            return Err(Error::DimensionMismatch(format!(
                "functional covariate `{name}` has {} curves for {} subjects",
                covariate.subjects(),
                self.ids.len()
            )));
        }
        self.functionals.insert(name.to_string(), covariate);
        Ok(self)
    }

    pub fn scalar(&self, name: &str) -> Result<&[f64]> {
        self.scalars
            .get(name)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::UnknownCovariate(name.to_string()))
    }

    pub fn functional(&self, name: &str) -> Result<&FunctionalCovariate> {
        self.functionals
            .get(name)
            .ok_or_else(|| Error::UnknownCovariate(name.to_string()))
    }

    /// Reorders subjects: the `k`-th subject of the result is `order[k]` of `self`.
    pub fn permuted(&self, order: &[usize]) -> Self {
        let ids = order.iter().map(|&i| self.ids[i].clone()).collect();
        let scalars = self
            .scalars
            .iter()
            .map(|(k, v)| (k.clone(), order.iter().map(|&i| v[i]).collect()))
            .collect();
        let functionals = self
            .functionals
            .iter()
            .map(|(k, f)| {
                let vals = DMatrix::from_fn(order.len(), f.values.ncols(), |r, c| {
                    f.values[(order[r], c)]
                });
                (
                    k.clone(),
                    FunctionalCovariate {
                        grid: f.grid.clone(),
                        values: vals,
                    },
                )
            })
            .collect();
        Self {
            ids,
            scalars,
            functionals,
        }
    }
}

/// Dimension and degree of a univariate spline basis; the domain is taken
/// from the data when the term is realized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BasisDim {
    pub dim: usize,
    #[serde(default = "default_degree")]
    pub degree: usize,
}

fn default_degree() -> usize {
    3
}

impl BasisDim {
    pub fn cubic(dim: usize) -> Self {
        Self { dim, degree: 3 }
    }
}

/// Declarative description of one covariate effect.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TermSpec {
    /// Smooth intercept `beta_0(y)`.
    Intercept { y_basis: BasisDim },
    /// Response-invariant linear effect `X' beta` of a covariate vector.
    Constant { columns: Vec<String> },
    /// Response-varying effect `X beta(y)` of a scalar covariate.
    Varying { column: String, y_basis: BasisDim },
    /// `\int X(t) beta(t, y) dt` for a functional covariate.
    Functional {
        column: String,
        t_basis: BasisDim,
        y_basis: BasisDim,
    },
    /// `\int X(t) S beta(t, y) dt` for a functional covariate and scalar modifier.
    FunctionalInteraction {
        column: String,
        modifier: String,
        t_basis: BasisDim,
        y_basis: BasisDim,
    },
}

impl TermSpec {
    pub fn intercept(dim: usize) -> Self {
        Self::Intercept {
            y_basis: BasisDim::cubic(dim),
        }
    }

    pub fn constant(columns: &[&str]) -> Self {
        Self::Constant {
            columns: columns.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn varying(column: &str, dim: usize) -> Self {
        Self::Varying {
            column: column.to_string(),
            y_basis: BasisDim::cubic(dim),
        }
    }

    pub fn functional(column: &str, t_dim: usize, y_dim: usize) -> Self {
        Self::Functional {
            column: column.to_string(),
            t_basis: BasisDim::cubic(t_dim),
            y_basis: BasisDim::cubic(y_dim),
        }
    }

    pub fn interaction(column: &str, modifier: &str, t_dim: usize, y_dim: usize) -> Self {
        Self::FunctionalInteraction {
            column: column.to_string(),
            modifier: modifier.to_string(),
            t_basis: BasisDim::cubic(t_dim),
            y_basis: BasisDim::cubic(y_dim),
        }
    }

    pub fn label(&self) -> String {
        match self {
            Self::Intercept { .. } => "intercept".into(),
            Self::Constant { columns } => format!("constant({})", columns.join(",")),
            Self::Varying { column, .. } => format!("varying({column})"),
            Self::Functional { column, .. } => format!("functional({column})"),
            Self::FunctionalInteraction {
                column, modifier, ..
            } => format!("interaction({column}*{modifier})"),
        }
    }

    /// Names of the covariates the term reads.
    pub fn columns(&self) -> Vec<&str> {
        match self {
            Self::Intercept { .. } => vec![],
            Self::Constant { columns } => columns.iter().map(String::as_str).collect(),
            Self::Varying { column, .. } | Self::Functional { column, .. } => vec![column],
            Self::FunctionalInteraction {
                column, modifier, ..
            } => vec![column, modifier],
        }
    }
}

/// Quadrature used for `\int X(t) beta(t, y) dt` on the functional grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum IntegrationRule {
    /// `sum_l X(t_l) beta(t_l, y) (t_{l+1} - t_l)`; the last point gets no weight.
    #[default]
    LeftRiemann,
    Trapezoid,
}

impl IntegrationRule {
    pub fn weights(&self, t: &[f64]) -> Vec<f64> {
        let l = t.len();
        let mut w = vec![0.0; l];
        match self {
            Self::LeftRiemann => {
                for k in 0..l.saturating_sub(1) {
                    w[k] = t[k + 1] - t[k];
                }
            }
            Self::Trapezoid => {
                for k in 0..l.saturating_sub(1) {
                    let h = 0.5 * (t[k + 1] - t[k]);
                    w[k] += h;
                    w[k + 1] += h;
                }
            }
        }
        w
    }
}

/// Options shared by every term of a design.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DesignOptions {
    #[serde(default)]
    pub integration: IntegrationRule,
    /// Subtract training means from covariates (mean curve for functional ones).
    #[serde(default = "default_center")]
    pub center: bool,
}

fn default_center() -> bool {
    true
}

impl Default for DesignOptions {
    fn default() -> Self {
        Self {
            integration: IntegrationRule::LeftRiemann,
            center: true,
        }
    }
}

/// A term whose bases, quadrature weights and centering constants have been
/// fixed from training data. Serializable so fitted models can rebuild
/// design rows for new subjects.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RealizedTerm {
    pub spec: TermSpec,
    y_basis: Option<BasisSpec>,
    t_basis: Option<BasisSpec>,
    /// Functional grid the term integrates over.
    t_grid: Option<Vec<f64>>,
    integration: IntegrationRule,
    /// Column means, or the mean curve for functional terms.
    centers: Vec<f64>,
    /// Mean of the interaction modifier.
    modifier_center: f64,
}

impl RealizedTerm {
    fn realize(
        spec: &TermSpec,
        covariates: &Covariates,
        grid: &Grid,
        options: &DesignOptions,
    ) -> Result<Self> {
        let y_basis_for = |d: &BasisDim| make_basis(grid.first(), grid.last(), d.dim, d.degree);
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let mut term = Self {
            spec: spec.clone(),
            y_basis: None,
            t_basis: None,
            t_grid: None,
            integration: options.integration,
            centers: Vec::new(),
            modifier_center: 0.0,
        };
        match spec {
            TermSpec::Intercept { y_basis } => {
                term.y_basis = Some(y_basis_for(y_basis)?);
            }
            TermSpec::Constant { columns } => {
                if columns.is_empty() {
                    return Err(Error::InvalidInput(
                        "constant term needs at least one column".into(),
                    ));
                }
                for c in columns {
                    let v = covariates.scalar(c)?;
                    term.centers
                        .push(if options.center { mean(v) } else { 0.0 });
                }
            }
            TermSpec::Varying { column, y_basis } => {
                let v = covariates.scalar(column)?;
                term.centers
                    .push(if options.center { mean(v) } else { 0.0 });
                term.y_basis = Some(y_basis_for(y_basis)?);
            }
            TermSpec::Functional {
                column,
                t_basis,
                y_basis,
            }
            | TermSpec::FunctionalInteraction {
                column,
                t_basis,
                y_basis,
                ..
            } => {
                let f = covariates.functional(column)?;
                let tg = f.grid();
                term.t_basis = Some(make_basis(
                    tg.first(),
                    tg.last(),
                    t_basis.dim,
                    t_basis.degree,
                )?);
                term.y_basis = Some(y_basis_for(y_basis)?);
                term.t_grid = Some(tg.points().to_vec());
                let vals = f.values();
                term.centers = (0..vals.ncols())
                    .map(|c| {
                        if options.center {
                            vals.column(c).iter().sum::<f64>() / vals.nrows() as f64
                        } else {
                            0.0
                        }
                    })
                    .collect();
                if let TermSpec::FunctionalInteraction { modifier, .. } = spec {
                    let s = covariates.scalar(modifier)?;
                    term.modifier_center = if options.center { mean(s) } else { 0.0 };
                }
            }
        }
        Ok(term)
    }

    pub fn label(&self) -> String {
        self.spec.label()
    }

    pub fn y_basis(&self) -> Option<&BasisSpec> {
        self.y_basis.as_ref()
    }

    pub fn t_basis(&self) -> Option<&BasisSpec> {
        self.t_basis.as_ref()
    }

    pub fn t_grid(&self) -> Option<&[f64]> {
        self.t_grid.as_deref()
    }

    /// Width of the per-subject factor.
    pub fn factor_width(&self) -> usize {
        match &self.spec {
            TermSpec::Intercept { .. } => 1,
            TermSpec::Constant { columns } => columns.len(),
            TermSpec::Varying { .. } => 1,
            TermSpec::Functional { .. } | TermSpec::FunctionalInteraction { .. } => {
                self.t_basis.as_ref().map_or(0, BasisSpec::dim)
            }
        }
    }

    /// Width of the response basis (1 for response-invariant terms).
    pub fn response_width(&self) -> usize {
        self.y_basis.as_ref().map_or(1, BasisSpec::dim)
    }

    /// Number of coefficients in the joint model.
    pub fn joint_width(&self) -> usize {
        self.factor_width() * self.response_width()
    }

    /// Integration weights times the t-basis, `L x kappa_t`.
    fn integration_matrix(&self) -> Result<DMatrix<f64>> {
        let t = self.t_grid.as_ref().expect("functional term has a t grid");
        let basis = self
            .t_basis
            .as_ref()
            .expect("functional term has a t basis");
        let w = self.integration.weights(t);
        let mut m = eval_basis(basis, t)?;
        for (r, wr) in w.iter().enumerate() {
            m.row_mut(r).scale_mut(*wr);
        }
        Ok(m)
    }

    /// Per-subject factor `a_i`, an `n x factor_width` matrix.
    pub fn subject_factor(&self, covariates: &Covariates) -> Result<DMatrix<f64>> {
        let n = covariates.len();
        match &self.spec {
            TermSpec::Intercept { .. } => Ok(DMatrix::from_element(n, 1, 1.0)),
            TermSpec::Constant { columns } => {
                let mut m = DMatrix::zeros(n, columns.len());
                for (c, name) in columns.iter().enumerate() {
                    let v = covariates.scalar(name)?;
                    for i in 0..n {
                        m[(i, c)] = v[i] - self.centers[c];
                    }
                }
                Ok(m)
            }
            TermSpec::Varying { column, .. } => {
                let v = covariates.scalar(column)?;
                Ok(DMatrix::from_fn(n, 1, |i, _| v[i] - self.centers[0]))
            }
            TermSpec::Functional { column, .. }
            | TermSpec::FunctionalInteraction { column, .. } => {
                let f = covariates.functional(column)?;
                let t = self.t_grid.as_ref().expect("functional term has a t grid");
                if f.grid().points() != t.as_slice() {
                    let basis = self
                        .t_basis
                        .as_ref()
                        .expect("functional term has a t basis");
                    if let Some(&bad) = f.grid().points().iter().find(|&&x| !basis.contains(x)) {
                        let (lo, hi) = basis.domain();
                        return Err(Error::OutOfDomain { point: bad, lo, hi });
                    }
                    return Err(Error::DimensionMismatch(format!(
                        "functional covariate `{column}` is not on the model's t grid"
                    )));
                }
                let mut centered = f.values().clone();
                for (c, mean) in self.centers.iter().enumerate() {
                    centered.column_mut(c).add_scalar_mut(-mean);
                }
                let mut factor = centered * self.integration_matrix()?;
                if let TermSpec::FunctionalInteraction { modifier, .. } = &self.spec {
                    let s = covariates.scalar(modifier)?;
                    for i in 0..n {
                        factor.row_mut(i).scale_mut(s[i] - self.modifier_center);
                    }
                }
                Ok(factor)
            }
        }
    }

    /// Response-basis rows at `points`, `points.len() x response_width`.
    pub fn response_basis(&self, points: &[f64]) -> Result<DMatrix<f64>> {
        match &self.y_basis {
            Some(b) => eval_basis(b, points),
            None => Ok(DMatrix::from_element(points.len(), 1, 1.0)),
        }
    }

    /// Penalty on the joint coefficients.
    pub fn joint_penalty(&self) -> Result<PenaltyMatrix> {
        match &self.spec {
            TermSpec::Constant { columns } => Ok(PenaltyMatrix::zero(columns.len())),
            TermSpec::Intercept { .. } | TermSpec::Varying { .. } => {
                curvature_penalty(self.y_basis.as_ref().expect("y basis"))
            }
            TermSpec::Functional { .. } | TermSpec::FunctionalInteraction { .. } => {
                let pt = curvature_penalty(self.t_basis.as_ref().expect("t basis"))?;
                let py = curvature_penalty(self.y_basis.as_ref().expect("y basis"))?;
                tensor_penalty(&pt, &py)
            }
        }
    }

    /// Penalty on the coefficients of a single-grid-point fit: scalar effects
    /// are free, functional effects are smoothed in `t` only.
    pub fn pointwise_penalty(&self) -> Result<PenaltyMatrix> {
        match &self.spec {
            TermSpec::Intercept { .. } | TermSpec::Varying { .. } => Ok(PenaltyMatrix::zero(1)),
            TermSpec::Constant { columns } => Ok(PenaltyMatrix::zero(columns.len())),
            TermSpec::Functional { .. } | TermSpec::FunctionalInteraction { .. } => {
                curvature_penalty(self.t_basis.as_ref().expect("t basis"))
            }
        }
    }
}

/// Realized design matrix of one term in factored form, with its penalty.
///
/// Row `(i, j)` of the dense block is `subject_factor[i, :] (x) response_basis[j, :]`;
/// column `a * response_width + d` multiplies coefficient `theta[a, d]`.
#[derive(Debug, Clone)]
pub struct DesignBlock {
    pub label: String,
    pub subject_factor: DMatrix<f64>,
    pub response_basis: DMatrix<f64>,
    pub penalty: PenaltyMatrix,
}

impl DesignBlock {
    pub fn ncols(&self) -> usize {
        self.subject_factor.ncols() * self.response_basis.ncols()
    }

    pub fn subjects(&self) -> usize {
        self.subject_factor.nrows()
    }

    pub fn grid_len(&self) -> usize {
        self.response_basis.nrows()
    }

    pub fn is_penalized(&self) -> bool {
        !self.penalty.is_zero()
    }

    /// Dense `nJ x ncols` matrix with subject-major rows (`i * J + j`).
    pub fn to_dense(&self) -> DMatrix<f64> {
        let (n, q) = self.subject_factor.shape();
        let (jn, k) = self.response_basis.shape();
        let mut out = DMatrix::zeros(n * jn, q * k);
        for i in 0..n {
            for j in 0..jn {
                for a in 0..q {
                    let av = self.subject_factor[(i, a)];
                    for d in 0..k {
                        out[(i * jn + j, a * k + d)] = av * self.response_basis[(j, d)];
                    }
                }
            }
        }
        out
    }
}

/// Realized terms plus their design blocks on a response grid.
#[derive(Debug, Clone)]
pub struct Design {
    pub grid: Grid,
    pub options: DesignOptions,
    pub terms: Vec<RealizedTerm>,
    pub blocks: Vec<DesignBlock>,
}

impl Design {
    pub fn subjects(&self) -> usize {
        self.blocks.first().map_or(0, DesignBlock::subjects)
    }

    /// Total number of joint coefficients.
    pub fn ncols(&self) -> usize {
        self.blocks.iter().map(DesignBlock::ncols).sum()
    }

    /// Full dense design, `nJ x p`, rows `i * J + j`.
    pub fn to_dense(&self) -> DMatrix<f64> {
        let mats: Vec<DMatrix<f64>> = self.blocks.iter().map(DesignBlock::to_dense).collect();
        let rows = mats.first().map_or(0, DMatrix::nrows);
        let mut out = DMatrix::zeros(rows, self.ncols());
        let mut off = 0;
        for m in &mats {
            out.columns_mut(off, m.ncols()).copy_from(m);
            off += m.ncols();
        }
        out
    }

    /// Blocks for one grid point at a time: per-subject factors with a unit
    /// response basis and the pointwise penalties.
    pub fn pointwise_blocks(&self) -> Result<Vec<DesignBlock>> {
        self.terms
            .iter()
            .zip(&self.blocks)
            .map(|(t, b)| {
                Ok(DesignBlock {
                    label: b.label.clone(),
                    subject_factor: b.subject_factor.clone(),
                    response_basis: DMatrix::from_element(1, 1, 1.0),
                    penalty: t.pointwise_penalty()?,
                })
            })
            .collect()
    }
}

/// Realizes every term on the training covariates and builds its design block.
pub fn assemble_design(
    terms: &[TermSpec],
    covariates: &Covariates,
    grid: &Grid,
    options: &DesignOptions,
) -> Result<Design> {
    if terms.is_empty() {
        return Err(Error::InvalidInput(
            "a model needs at least one term".into(),
        ));
    }
    if covariates.is_empty() {
        return Err(Error::InvalidInput("no subjects".into()));
    }
    let mut realized = Vec::with_capacity(terms.len());
    let mut blocks = Vec::with_capacity(terms.len());
    for spec in terms {
        let term = RealizedTerm::realize(spec, covariates, grid, options)?;
        let block = DesignBlock {
            label: term.label(),
            subject_factor: term.subject_factor(covariates)?,
            response_basis: term.response_basis(grid.points())?,
            penalty: term.joint_penalty()?,
        };
        debug_assert_eq!(block.ncols(), block.penalty.size());
        realized.push(term);
        blocks.push(block);
    }
    Ok(Design {
        grid: grid.clone(),
        options: *options,
        terms: realized,
        blocks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_range_grid() {
        let y = [3.0, 0.0, 10.0, 7.0];
        let g = build_response_grid(&y, 5, GridRule::FullRange).unwrap();
        assert_eq!(g.points(), &[0.0, 2.5, 5.0, 7.5, 10.0]);
        assert_eq!(g.rule(), GridRule::FullRange);
    }

    #[test]
    fn trimmed_grid_uses_fifth_order_statistics() {
        let y: Vec<f64> = (1..=20).map(f64::from).collect();
        let g = build_response_grid(&y, 3, GridRule::TrimmedOrderStatistics).unwrap();
        assert_eq!(g.points(), &[5.0, 10.5, 16.0]);
        assert!(build_response_grid(&y[..9], 3, GridRule::TrimmedOrderStatistics).is_err());
    }

    #[test]
    fn degenerate_grids_are_rejected() {
        assert!(build_response_grid(&[0.0, 1.0], 1, GridRule::FullRange).is_err());
        assert!(build_response_grid(&[1.0], 5, GridRule::FullRange).is_err());
        assert!(build_response_grid(&[2.0, 2.0], 5, GridRule::FullRange).is_err());
        assert!(Grid::new(vec![0.0, 0.0, 1.0], GridRule::Custom).is_err());
    }

    #[test]
    fn default_grid_size_is_hundred() {
        let y: Vec<f64> = (0..50).map(|k| (k as f64).sin()).collect();
        let g = build_response_grid(&y, 100, GridRule::FullRange).unwrap();
        assert_eq!(g.len(), 100);
        assert_eq!(g.last(), y.iter().cloned().fold(f64::MIN, f64::max));
    }

    #[test]
    fn indicator_is_strict() {
        let g = Grid::new(vec![3.0, 5.0, 7.0], GridRule::Custom).unwrap();
        let z = make_artificial_response(&[5.0, 1.0, 9.0], &g).unwrap();
        assert_eq!(
            (0..3).map(|j| z.get(0, j)).collect::<Vec<_>>(),
            [false, false, true]
        );
        assert!((0..3).all(|j| z.get(1, j)));
        assert!((0..3).all(|j| !z.get(2, j)));
    }

    #[test]
    fn indicator_column_means_are_ecdf_below_grid() {
        let y = [0.5, 1.5, 1.5, 2.5, 3.0];
        let g = Grid::new(vec![1.0, 1.5, 2.0, 3.0], GridRule::Custom).unwrap();
        let z = make_artificial_response(&y, &g).unwrap();
        for (j, &p) in g.points().iter().enumerate() {
            let below = y.iter().filter(|&&v| v < p).count() as f64 / y.len() as f64;
            assert_eq!(z.column_mean(j), below);
        }
    }

    fn functional_fixture(n: usize, constant: bool) -> (Covariates, Grid) {
        let tg = Grid::uniform(0.0, 10.0, 101).unwrap();
        let vals = DMatrix::from_fn(n, 101, |i, l| {
            if constant {
                1.0
            } else {
                let t = tg.points()[l];
                2.0 + (i as f64 + 1.0) * (2.0 * std::f64::consts::PI * t / 10.0).sin()
                    + 0.5 * (4.0 * std::f64::consts::PI * t / 10.0).cos()
            }
        });
        let ids = (0..n).map(|i| format!("s{i}")).collect();
        let cov = Covariates::new(ids)
            .with_functional("x", FunctionalCovariate::new(tg.clone(), vals).unwrap())
            .unwrap()
            .with_scalar("s", (0..n).map(|i| i as f64 - 1.0).collect())
            .unwrap();
        (cov, tg)
    }

    #[test]
    fn riemann_weights_of_constant_curve_sum_to_domain_length() {
        let (cov, tg) = functional_fixture(3, true);
        let grid = Grid::uniform(-1.0, 1.0, 7).unwrap();
        let opts = DesignOptions {
            center: false,
            ..DesignOptions::default()
        };
        let d = assemble_design(&[TermSpec::functional("x", 5, 5)], &cov, &grid, &opts).unwrap();
        // sum of the t-basis is one, so the factor row sums to \int 1 dt
        let row_sum: f64 = d.blocks[0].subject_factor.row(0).sum();
        let cell = tg.points()[1] - tg.points()[0];
        assert!((row_sum - 10.0).abs() <= cell);
        assert_eq!(d.blocks[0].ncols(), 25);
        assert_eq!(d.blocks[0].penalty.size(), 25);
    }

    #[test]
    fn riemann_matches_trapezoid_on_smooth_centered_curves() {
        let (cov, _) = functional_fixture(4, false);
        let grid = Grid::uniform(0.0, 1.0, 5).unwrap();
        let left = DesignOptions {
            center: false,
            integration: IntegrationRule::LeftRiemann,
        };
        let trap = DesignOptions {
            center: false,
            integration: IntegrationRule::Trapezoid,
        };
        // beta(t, y) = 1: integral weights against a unit t-basis sum
        let spec = [TermSpec::functional("x", 5, 4)];
        let a = assemble_design(&spec, &cov, &grid, &left).unwrap();
        let b = assemble_design(&spec, &cov, &grid, &trap).unwrap();
        for i in 0..4 {
            let ra: f64 = a.blocks[0].subject_factor.row(i).sum();
            let rb: f64 = b.blocks[0].subject_factor.row(i).sum();
            // oracle: trapezoid on the integrand directly
            let f = cov.functional("x").unwrap();
            let t = f.grid().points();
            let vals = f.values().row(i);
            let oracle: f64 = (0..t.len() - 1)
                .map(|l| 0.5 * (vals[l] + vals[l + 1]) * (t[l + 1] - t[l]))
                .sum();
            assert!((rb - oracle).abs() < 1e-12);
            assert!((ra - oracle).abs() / oracle.abs() < 1e-3, "{ra} {oracle}");
        }
    }

    #[test]
    fn block_shapes_and_penalties() {
        let (cov, _) = functional_fixture(6, false);
        let grid = Grid::uniform(-2.0, 2.0, 9).unwrap();
        let terms = [
            TermSpec::intercept(8),
            TermSpec::varying("s", 5),
            TermSpec::constant(&["s"]),
            TermSpec::functional("x", 5, 5),
            TermSpec::interaction("x", "s", 4, 5),
        ];
        let d = assemble_design(&terms, &cov, &grid, &DesignOptions::default()).unwrap();
        let widths: Vec<usize> = d.blocks.iter().map(DesignBlock::ncols).collect();
        assert_eq!(widths, vec![8, 5, 1, 25, 20]);
        for b in &d.blocks {
            assert_eq!(b.ncols(), b.penalty.size());
        }
        assert!(!d.blocks[2].is_penalized());
        assert_eq!(d.to_dense().shape(), (6 * 9, 59));
        let pw = d.pointwise_blocks().unwrap();
        let pw_widths: Vec<usize> = pw.iter().map(DesignBlock::ncols).collect();
        assert_eq!(pw_widths, vec![1, 1, 1, 5, 4]);
        assert!(!pw[0].is_penalized() && pw[3].is_penalized());
    }

    #[test]
    fn unknown_columns_and_mismatched_counts() {
        let (cov, _) = functional_fixture(3, false);
        let grid = Grid::uniform(0.0, 1.0, 4).unwrap();
        let err = assemble_design(
            &[TermSpec::varying("missing", 5)],
            &cov,
            &grid,
            &DesignOptions::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::UnknownCovariate(ref c) if c == "missing"));
        assert!(Covariates::new(vec!["a".into()])
            .with_scalar("x", vec![1.0, 2.0])
            .is_err());
    }

    #[test]
    fn permuting_subjects_permutes_rows() {
        let (cov, _) = functional_fixture(5, false);
        let grid = Grid::uniform(-1.0, 1.0, 6).unwrap();
        let terms = [
            TermSpec::intercept(6),
            TermSpec::varying("s", 4),
            TermSpec::functional("x", 5, 4),
        ];
        let opts = DesignOptions::default();
        let d = assemble_design(&terms, &cov, &grid, &opts).unwrap();
        let order = [3, 0, 4, 1, 2];
        let p = assemble_design(&terms, &cov.permuted(&order), &grid, &opts).unwrap();
        let (dd, pd) = (d.to_dense(), p.to_dense());
        for (k, &i) in order.iter().enumerate() {
            for j in 0..6 {
                let a = dd.row(i * 6 + j);
                let b = pd.row(k * 6 + j);
                assert!((a - b).amax() < 1e-12);
            }
        }
    }
}
