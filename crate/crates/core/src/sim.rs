//! Simulation scenarios with a functional covariate and known conditional
//! quantiles, and the replicated experiment comparing joint and pointwise
//! fits.

use std::f64::consts::PI;
use std::io::Write;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal as StdNormal};

use crate::basis::gauss_legendre;
use crate::error::{Error, Result};
use crate::fpca::{fit_fpca, FpcaConfig, FpcaModel, FunctionalSample};
use crate::model::{
    assemble_design, build_response_grid, make_artificial_response, Covariates, DesignOptions,
    FunctionalCovariate, Grid, GridRule, TermSpec,
};
use crate::quantile::{predict_quantiles, QuantilePrediction};
use crate::solver::{fit_joint, fit_pointwise, predict_cdf, FittedCdfModel, SolverConfig};

pub const DOMAIN: (f64, f64) = (0.0, 10.0);
pub const EIGENVALUES: [f64; 4] = [16.0, 9.0, 7.56, 5.06];
/// Points of the dense sampling grid of the functional covariate.
pub const DENSE_POINTS: usize = 30;
pub const SPARSE_POINTS: usize = 15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ResponseDistribution {
    /// `Y ~ N(2m, 5^2)`.
    Normal,
    /// `Y ~ 0.5 N(m, 1) + 0.5 N(3m, 4^2)`.
    Mixture,
}

impl ResponseDistribution {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Normal => "normal",
            Self::Mixture => "mixture",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum SamplingDesign {
    /// All 30 equally spaced points.
    #[default]
    Dense,
    /// 15 of the 30 points per subject, drawn without replacement.
    Sparse,
}

/// True quantile convention for the mixture setting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum MixtureTruth {
    /// Normal approximation with the mixture's mean and variance.
    #[default]
    NormalApprox,
    /// Numerical root of the mixture CDF.
    Exact,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Joint,
    Pointwise,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Joint => "joint",
            Self::Pointwise => "pointwise",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub distribution: ResponseDistribution,
    pub n: usize,
    pub design: SamplingDesign,
    pub sigma: f64,
    /// Weights of the true coefficient function on the four eigenfunctions.
    pub b: [f64; 4],
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "noise sd {} must be positive",
                self.sigma
            )));
        }
        if self.n < 2 {
            return Err(Error::InvalidInput(
                "a scenario needs at least 2 subjects".into(),
            ));
        }
        Ok(())
    }

    /// `sum(lambda_k) / sigma^2`.
    pub fn snr(&self) -> f64 {
        EIGENVALUES.iter().sum::<f64>() / (self.sigma * self.sigma)
    }
}

/// Eigenfunction `k` (0-based) of the generating process.
pub fn eigenfunction(k: usize, t: f64) -> f64 {
    let w = 2.0 * PI * t / 10.0;
    let v = match k {
        0 => w.cos(),
        1 => w.sin(),
        2 => (2.0 * w).cos(),
        3 => (2.0 * w).sin(),
        _ => panic!("eigenfunction index {k} out of range"),
    };
    v / 5f64.sqrt()
}

pub fn mean_function(t: f64) -> f64 {
    t + t.sin()
}

/// `\int_0^10 mu(t) phi_k(t) dt` by composite Gauss-Legendre quadrature.
pub fn mean_projection(k: usize) -> f64 {
    let (nodes, weights) = gauss_legendre(12);
    let panels = 40;
    let h = (DOMAIN.1 - DOMAIN.0) / panels as f64;
    let mut s = 0.0;
    for p in 0..panels {
        let a = DOMAIN.0 + p as f64 * h;
        for (x, w) in nodes.iter().zip(&weights) {
            let t = a + 0.5 * h * (x + 1.0);
            s += 0.5 * h * w * mean_function(t) * eigenfunction(k, t);
        }
    }
    s
}

/// Simulated subjects with their latent truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedDataset {
    pub ids: Vec<String>,
    pub y: Vec<f64>,
    pub x1: Vec<f64>,
    pub samples: Vec<FunctionalSample>,
    pub scores: Vec<[f64; 4]>,
    /// `\int X_2(t) beta(t) dt`.
    pub integral: Vec<f64>,
    /// Location `m = \int X_2 beta + X_1`.
    pub location: Vec<f64>,
}

impl GeneratedDataset {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    /// Noiseless `X_2` of subject `i` at `t`.
    pub fn curve(&self, i: usize, t: f64) -> f64 {
        mean_function(t)
            + self.scores[i]
                .iter()
                .enumerate()
                .map(|(k, x)| x * eigenfunction(k, t))
                .sum::<f64>()
    }
}

fn dense_times() -> Vec<f64> {
    (0..DENSE_POINTS)
        .map(|j| DOMAIN.0 + (DOMAIN.1 - DOMAIN.0) * j as f64 / (DENSE_POINTS - 1) as f64)
        .collect()
}

/// Draws `scenario.n` subjects. Random draws do not depend on the noise level
/// or the response distribution, so scenarios sharing an RNG state share
/// their latent structure.
pub fn generate_dataset<R: Rng>(
    scenario: &Scenario,
    id_prefix: &str,
    rng: &mut R,
) -> Result<GeneratedDataset> {
    scenario.validate()?;
    let times = dense_times();
    let proj: Vec<f64> = (0..4).map(mean_projection).collect();
    let x1_dist = rand_distr::Uniform::new(-16.0, 16.0).expect("valid range");
    let n = scenario.n;
    let mut out = GeneratedDataset {
        ids: Vec::with_capacity(n),
        y: Vec::with_capacity(n),
        x1: Vec::with_capacity(n),
        samples: Vec::with_capacity(n),
        scores: Vec::with_capacity(n),
        integral: Vec::with_capacity(n),
        location: Vec::with_capacity(n),
    };
    for i in 0..n {
        let mut xi = [0.0; 4];
        for (k, x) in xi.iter_mut().enumerate() {
            let z: f64 = rng.sample(StandardNormal);
            *x = EIGENVALUES[k].sqrt() * z;
        }
        let noise: Vec<f64> = (0..DENSE_POINTS)
            .map(|_| rng.sample(StandardNormal))
            .collect();
        let keep = rand::seq::index::sample(rng, DENSE_POINTS, SPARSE_POINTS).into_vec();
        let x1 = x1_dist.sample(rng);
        let e: f64 = rng.sample(StandardNormal);
        let component: bool = rng.random_bool(0.5);

        let integral: f64 = (0..4).map(|k| scenario.b[k] * (proj[k] + xi[k])).sum();
        let m = integral + x1;
        let y = match scenario.distribution {
            ResponseDistribution::Normal => 2.0 * m + 5.0 * e,
            ResponseDistribution::Mixture if component => 3.0 * m + 4.0 * e,
            ResponseDistribution::Mixture => m + e,
        };
        let mut idx: Vec<usize> = match scenario.design {
            SamplingDesign::Dense => (0..DENSE_POINTS).collect(),
            SamplingDesign::Sparse => keep,
        };
        idx.sort_unstable();
        let obs_t: Vec<f64> = idx.iter().map(|&j| times[j]).collect();
        let obs_w: Vec<f64> = idx
            .iter()
            .map(|&j| {
                let t = times[j];
                mean_function(t)
                    + (0..4).map(|k| xi[k] * eigenfunction(k, t)).sum::<f64>()
                    + scenario.sigma * noise[j]
            })
            .collect();
        let id = format!("{id_prefix}{i}");
        out.samples
            .push(FunctionalSample::new(id.clone(), obs_t, obs_w)?);
        out.ids.push(id);
        out.y.push(y);
        out.x1.push(x1);
        out.scores.push(xi);
        out.integral.push(integral);
        out.location.push(m);
    }
    Ok(out)
}

fn std_normal() -> StdNormal {
    StdNormal::new(0.0, 1.0).expect("standard normal")
}

/// True `tau` quantile of a subject with location `m`.
pub fn true_quantile(
    distribution: ResponseDistribution,
    m: f64,
    tau: f64,
    mixture: MixtureTruth,
) -> Result<f64> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::InvalidInput(format!(
            "quantile level {tau} outside (0, 1)"
        )));
    }
    let z = std_normal();
    Ok(match (distribution, mixture) {
        (ResponseDistribution::Normal, _) => 2.0 * m + 5.0 * z.inverse_cdf(tau),
        (ResponseDistribution::Mixture, MixtureTruth::NormalApprox) => {
            2.0 * m + (m * m + 8.5).sqrt() * z.inverse_cdf(tau)
        }
        (ResponseDistribution::Mixture, MixtureTruth::Exact) => {
            let f = |y: f64| 0.5 * z.cdf(y - m) + 0.5 * z.cdf((y - 3.0 * m) / 4.0) - tau;
            let mut lo = m.min(3.0 * m) - 60.0;
            let mut hi = m.max(3.0 * m) + 60.0;
            while hi - lo > 1e-10 * (1.0 + lo.abs().max(hi.abs())) {
                let mid = 0.5 * (lo + hi);
                if f(mid) < 0.0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            0.5 * (lo + hi)
        }
    })
}

/// Conditional CDF of the response at `y` for location `m`.
pub fn true_cdf(distribution: ResponseDistribution, m: f64, y: f64) -> f64 {
    let z = std_normal();
    match distribution {
        ResponseDistribution::Normal => z.cdf((y - 2.0 * m) / 5.0),
        ResponseDistribution::Mixture => 0.5 * z.cdf(y - m) + 0.5 * z.cdf((y - 3.0 * m) / 4.0),
    }
}

/// Mean absolute error per level; `truths[i][k]` matches `predictions[i].values[k]`.
pub fn evaluate_mae(predictions: &[QuantilePrediction], truths: &[Vec<f64>]) -> Result<Vec<f64>> {
    if predictions.len() != truths.len() || predictions.is_empty() {
        return Err(Error::DimensionMismatch(format!(
            "{} predictions for {} truths",
            predictions.len(),
            truths.len()
        )));
    }
    let levels = predictions[0].values.len();
    let mut mae = vec![0.0; levels];
    for (p, t) in predictions.iter().zip(truths) {
        if p.values.len() != levels || t.len() != levels {
            return Err(Error::DimensionMismatch(
                "quantile level counts differ".into(),
            ));
        }
        for k in 0..levels {
            mae[k] += (p.values[k] - t[k]).abs();
        }
    }
    let n = predictions.len() as f64;
    Ok(mae.into_iter().map(|s| s / n).collect())
}

/// Model and fitting choices used by every replication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitSettings {
    pub grid_points: usize,
    pub grid_rule: GridRule,
    pub trim: usize,
    pub intercept_dim: usize,
    pub varying_dim: usize,
    pub functional_t_dim: usize,
    pub functional_y_dim: usize,
    pub fpca_grid_points: usize,
    pub fpca: FpcaConfig,
    pub design: DesignOptions,
    pub solver: SolverConfig,
}

impl Default for FitSettings {
    fn default() -> Self {
        Self {
            grid_points: 100,
            grid_rule: GridRule::FullRange,
            trim: 0,
            intercept_dim: 20,
            varying_dim: 5,
            functional_t_dim: 5,
            functional_y_dim: 5,
            fpca_grid_points: 101,
            fpca: FpcaConfig::default(),
            design: DesignOptions::default(),
            solver: SolverConfig::default(),
        }
    }
}

impl FitSettings {
    pub fn terms(&self) -> Vec<TermSpec> {
        vec![
            TermSpec::intercept(self.intercept_dim),
            TermSpec::varying("x1", self.varying_dim),
            TermSpec::functional("x2", self.functional_t_dim, self.functional_y_dim),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub distributions: Vec<ResponseDistribution>,
    pub sigmas: Vec<f64>,
    pub n_train: Vec<usize>,
    pub n_test: usize,
    pub design: SamplingDesign,
    pub methods: Vec<Method>,
    pub taus: Vec<f64>,
    pub replications: usize,
    pub seed: u64,
    pub b: [f64; 4],
    pub mixture_truth: MixtureTruth,
    pub fit: FitSettings,
    /// Worker threads for replications; 0 uses the global pool, 1 runs serially.
    pub threads: usize,
    /// Record wall-clock times; when false the summary holds `NA`.
    pub timing: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            distributions: vec![ResponseDistribution::Normal, ResponseDistribution::Mixture],
            sigmas: vec![0.5, 4.33, 6.13],
            n_train: vec![100],
            n_test: 100,
            design: SamplingDesign::Dense,
            methods: vec![Method::Joint, Method::Pointwise],
            taus: vec![0.05, 0.1, 0.25, 0.5],
            replications: 50,
            seed: 1,
            b: [1.0; 4],
            mixture_truth: MixtureTruth::NormalApprox,
            fit: FitSettings::default(),
            threads: 1,
            timing: true,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.replications == 0 {
            return Err(Error::InvalidInput("replications must be positive".into()));
        }
        if self.taus.is_empty() || self.taus.iter().any(|t| !(*t > 0.0 && *t < 1.0)) {
            return Err(Error::InvalidInput(
                "quantile levels must lie in (0, 1)".into(),
            ));
        }
        if self.methods.is_empty()
            || self.distributions.is_empty()
            || self.sigmas.is_empty()
            || self.n_train.is_empty()
        {
            return Err(Error::InvalidInput("experiment has an empty factor".into()));
        }
        if self.n_test < 1 {
            return Err(Error::InvalidInput("n_test must be positive".into()));
        }
        for &n in &self.n_train {
            Scenario {
                distribution: ResponseDistribution::Normal,
                n,
                design: self.design,
                sigma: 1.0,
                b: self.b,
            }
            .validate()?;
        }
        for &s in &self.sigmas {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::InvalidInput(format!(
                    "noise sd {s} must be positive"
                )));
            }
        }
        Ok(())
    }
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// RNG of one replication stage; the same `(seed, n, rep)` gives the same
/// stream for every noise level and distribution.
pub fn replication_rng(seed: u64, n: usize, rep: usize, stage: u64) -> ChaCha8Rng {
    let key = splitmix(splitmix(splitmix(seed) ^ n as u64) ^ rep as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    rng.set_stream(stage);
    rng
}

const STAGE_TRAIN: u64 = 1;
const STAGE_TEST: u64 = 2;

/// Train and test sets of one replication.
pub fn replication_data(
    scenario: &Scenario,
    n_test: usize,
    seed: u64,
    rep: usize,
) -> Result<(GeneratedDataset, GeneratedDataset)> {
    let train = generate_dataset(
        scenario,
        "train",
        &mut replication_rng(seed, scenario.n, rep, STAGE_TRAIN),
    )?;
    let test_scenario = Scenario {
        n: n_test.max(2),
        ..scenario.clone()
    };
    let mut test = generate_dataset(
        &test_scenario,
        "test",
        &mut replication_rng(seed, scenario.n, rep, STAGE_TEST),
    )?;
    if n_test < test.len() {
        truncate(&mut test, n_test);
    }
    Ok((train, test))
}

fn truncate(d: &mut GeneratedDataset, n: usize) {
    d.ids.truncate(n);
    d.y.truncate(n);
    d.x1.truncate(n);
    d.samples.truncate(n);
    d.scores.truncate(n);
    d.integral.truncate(n);
    d.location.truncate(n);
}

/// Covariates of the simulation model from presmoothed curves.
pub fn simulation_covariates(data: &GeneratedDataset, fpca: &FpcaModel) -> Result<Covariates> {
    let grid = Grid::new(fpca.grid.clone(), GridRule::Custom)?;
    let curves = fpca.smooth(&data.samples)?;
    Covariates::new(data.ids.clone())
        .with_scalar("x1", data.x1.clone())?
        .with_functional("x2", FunctionalCovariate::new(grid, curves)?)
}

/// A fitted model for one replication, with everything needed to predict.
pub struct ReplicationFit {
    pub model: FittedCdfModel,
    pub seconds: f64,
}

/// Presmooths, fits `method` on `train` and returns the model and the fit time.
pub fn fit_replication(
    train: &GeneratedDataset,
    method: Method,
    settings: &FitSettings,
) -> Result<(FpcaModel, ReplicationFit)> {
    let fgrid = Grid::uniform(DOMAIN.0, DOMAIN.1, settings.fpca_grid_points)?;
    let fpca = fit_fpca(&train.samples, &fgrid, &settings.fpca)?;
    let cov = simulation_covariates(train, &fpca)?;
    let fit = fit_on_covariates(&cov, &train.y, method, settings)?;
    Ok((fpca, fit))
}

fn fit_on_covariates(
    cov: &Covariates,
    y: &[f64],
    method: Method,
    settings: &FitSettings,
) -> Result<ReplicationFit> {
    let start = Instant::now();
    let grid = build_response_grid(y, settings.grid_points, settings.grid_rule)?;
    let z = make_artificial_response(y, &grid)?;
    let design = assemble_design(&settings.terms(), cov, &grid, &settings.design)?;
    let model = match method {
        Method::Joint => fit_joint(&design, &z, &settings.solver)?,
        Method::Pointwise => fit_pointwise(&design, &z, &settings.solver)?,
    };
    Ok(ReplicationFit {
        model,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Outcome of one method in one replication.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodOutcome {
    pub mae: Vec<f64>,
    pub seconds: f64,
    pub converged: bool,
    pub crossings: usize,
}

/// Runs every method on one replication of `scenario`.
pub fn run_replication(
    scenario: &Scenario,
    cfg: &ExperimentConfig,
    rep: usize,
) -> Result<Vec<Result<MethodOutcome>>> {
    let (train, test) = replication_data(scenario, cfg.n_test, cfg.seed, rep)?;
    let fgrid = Grid::uniform(DOMAIN.0, DOMAIN.1, cfg.fit.fpca_grid_points)?;
    let fpca = fit_fpca(&train.samples, &fgrid, &cfg.fit.fpca)?;
    let train_cov = simulation_covariates(&train, &fpca)?;
    let test_cov = simulation_covariates(&test, &fpca)?;
    let truths: Vec<Vec<f64>> = test
        .location
        .iter()
        .map(|&m| {
            cfg.taus
                .iter()
                .map(|&t| true_quantile(scenario.distribution, m, t, cfg.mixture_truth))
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<_>>()?;
    Ok(cfg
        .methods
        .iter()
        .map(|&method| {
            let fit = fit_on_covariates(&train_cov, &train.y, method, &cfg.fit)?;
            let cdfs = predict_cdf(&fit.model, &test_cov)?;
            let q = predict_quantiles(&cdfs, &cfg.taus, cfg.fit.trim)?;
            Ok(MethodOutcome {
                mae: evaluate_mae(&q, &truths)?,
                seconds: fit.seconds,
                converged: fit.model.convergence.converged,
                crossings: q.iter().map(QuantilePrediction::crossings).sum(),
            })
        })
        .collect())
}

/// One line of the experiment summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub distribution: ResponseDistribution,
    pub sigma: f64,
    pub n: usize,
    pub method: Method,
    pub tau: f64,
    pub mae: f64,
    /// Monte Carlo standard error of `mae` over replications.
    pub se: f64,
    /// Mean fit time per replication; `None` when timing is off.
    pub seconds: Option<f64>,
    pub reps: usize,
    pub nonconverged: usize,
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSummary {
    pub rows: Vec<SummaryRow>,
    /// Total `Q(tau_a) > Q(tau_b)` events with `tau_a < tau_b` over all
    /// predictions.
    pub crossings: usize,
    /// Messages of replications that failed.
    pub errors: Vec<String>,
}

fn mean_se(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, f64::NAN);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

/// Runs the full factorial experiment.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentSummary> {
    cfg.validate()?;
    let pool = match cfg.threads {
        0 => None,
        t => Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(t)
                .build()
                .map_err(|e| Error::InvalidInput(format!("thread pool: {e}")))?,
        ),
    };
    let mut rows = Vec::new();
    let mut crossings = 0;
    let mut errors = Vec::new();
    for &distribution in &cfg.distributions {
        for &sigma in &cfg.sigmas {
            for &n in &cfg.n_train {
                let scenario = Scenario {
                    distribution,
                    n,
                    design: cfg.design,
                    sigma,
                    b: cfg.b,
                };
                let run = || -> Vec<Result<Vec<Result<MethodOutcome>>>> {
                    (0..cfg.replications)
                        .into_par_iter()
                        .map(|rep| run_replication(&scenario, cfg, rep))
                        .collect()
                };
                let reps = match &pool {
                    Some(p) => p.install(run),
                    None => run(),
                };
                let mut per_method: Vec<Vec<MethodOutcome>> = vec![Vec::new(); cfg.methods.len()];
                let mut failures = vec![0usize; cfg.methods.len()];
                for (rep, r) in reps.into_iter().enumerate() {
                    match r {
                        Ok(outcomes) => {
                            for (k, o) in outcomes.into_iter().enumerate() {
                                match o {
                                    Ok(o) => per_method[k].push(o),
                                    Err(e) => {
                                        failures[k] += 1;
                                        errors.push(format!(
                                            "{} sigma={sigma} n={n} rep={rep} {}: {e}",
                                            distribution.name(),
                                            cfg.methods[k].name()
                                        ));
                                    }
                                }
                            }
                        }
                        Err(e) => {
                            failures.iter_mut().for_each(|f| *f += 1);
                            errors.push(format!(
                                "{} sigma={sigma} n={n} rep={rep}: {e}",
                                distribution.name()
                            ));
                        }
                    }
                }
                for (k, &method) in cfg.methods.iter().enumerate() {
                    let outcomes = &per_method[k];
                    crossings += outcomes.iter().map(|o| o.crossings).sum::<usize>();
                    let secs: Vec<f64> = outcomes.iter().map(|o| o.seconds).collect();
                    let nonconverged = outcomes.iter().filter(|o| !o.converged).count();
                    for (ti, &tau) in cfg.taus.iter().enumerate() {
                        let maes: Vec<f64> = outcomes.iter().map(|o| o.mae[ti]).collect();
                        let (mae, se) = mean_se(&maes);
                        rows.push(SummaryRow {
                            distribution,
                            sigma,
                            n,
                            method,
                            tau,
                            mae,
                            se,
                            seconds: cfg.timing.then(|| mean_se(&secs).0),
                            reps: outcomes.len(),
                            nonconverged,
                            failures: failures[k],
                        });
                    }
                }
            }
        }
    }
    Ok(ExperimentSummary {
        rows,
        crossings,
        errors,
    })
}

fn fmt_float(v: f64) -> String {
    if v.is_nan() {
        "NA".into()
    } else {
        format!("{v}")
    }
}

/// Writes the summary as CSV.
pub fn write_summary<W: Write>(rows: &[SummaryRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| Error::InvalidInput(format!("writing summary: {e}"));
    w.write_record([
        "distribution",
        "sigma",
        "n",
        "method",
        "tau",
        "mae",
        "se",
        "seconds",
        "reps",
        "nonconverged",
        "failures",
    ])
    .map_err(io)?;
    for r in rows {
        w.write_record([
            r.distribution.name().to_string(),
            fmt_float(r.sigma),
            r.n.to_string(),
            r.method.name().to_string(),
            fmt_float(r.tau),
            fmt_float(r.mae),
            fmt_float(r.se),
            r.seconds.map_or_else(|| "NA".to_string(), fmt_float),
            r.reps.to_string(),
            r.nonconverged.to_string(),
            r.failures.to_string(),
        ])
        .map_err(io)?;
    }
    w.flush()
        .map_err(|e| Error::InvalidInput(format!("writing summary: {e}")))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Standard normal CDF by composite Simpson integration of the density.
    fn phi_simpson(x: f64) -> f64 {
        let panels = 20_000;
        let h = x / panels as f64;
        let dens = |t: f64| (-0.5 * t * t).exp() / (2.0 * PI).sqrt();
        let mut s = dens(0.0) + dens(x);
        for k in 1..panels {
            s += if k % 2 == 1 { 4.0 } else { 2.0 } * dens(k as f64 * h);
        }
        0.5 + s * h / 3.0
    }

    fn phi_inverse(p: f64) -> f64 {
        let (mut lo, mut hi) = (-8.0, 8.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if phi_simpson(mid) < p {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    fn scenario(distribution: ResponseDistribution, n: usize, sigma: f64) -> Scenario {
        Scenario {
            distribution,
            n,
            design: SamplingDesign::Dense,
            sigma,
            b: [1.0; 4],
        }
    }

    #[test]
    fn snr_is_variance_ratio() {
        let s = |sigma| scenario(ResponseDistribution::Normal, 10, sigma).snr();
        assert!((s(0.5) - 150.48).abs() < 0.01);
        assert!((s(4.33) - 2.0).abs() < 0.01);
        assert!((s(6.13) - 1.0).abs() < 0.01);
    }

    #[test]
    fn normal_quantiles() {
        let q = |tau| {
            true_quantile(
                ResponseDistribution::Normal,
                0.0,
                tau,
                MixtureTruth::NormalApprox,
            )
            .unwrap()
        };
        assert_eq!(q(0.5), 0.0);
        let oracle = 5.0 * phi_inverse(0.975);
        assert!((q(0.975) - oracle).abs() < 1e-8);
        assert!((q(0.975) - 9.7998).abs() < 1e-4);
        assert!(true_quantile(
            ResponseDistribution::Normal,
            0.0,
            1.0,
            MixtureTruth::NormalApprox
        )
        .is_err());
    }

    #[test]
    fn mixture_quantiles() {
        let approx = |tau| {
            true_quantile(
                ResponseDistribution::Mixture,
                0.0,
                tau,
                MixtureTruth::NormalApprox,
            )
            .unwrap()
        };
        let exact = |tau| {
            true_quantile(ResponseDistribution::Mixture, 0.0, tau, MixtureTruth::Exact).unwrap()
        };
        assert!(approx(0.5).abs() < 1e-12);
        assert!(exact(0.5).abs() < 1e-8);
        assert!((approx(0.9) - 8.5f64.sqrt() * phi_inverse(0.9)).abs() < 1e-8);
        for &m in &[-3.0, 0.0, 2.5] {
            for &tau in &[0.05, 0.3, 0.8] {
                let y = true_quantile(ResponseDistribution::Mixture, m, tau, MixtureTruth::Exact)
                    .unwrap();
                let f = 0.5 * phi_simpson(y - m) + 0.5 * phi_simpson((y - 3.0 * m) / 4.0);
                assert!((f - tau).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn mean_projection_matches_closed_form() {
        // \int (t + sin t) cos(2 pi t / 10) / sqrt5 dt = \int sin t cos(w t) / sqrt5 dt
        let w = 2.0 * PI / 10.0;
        let f = |t: f64| {
            // antiderivative of sin t cos(wt) and t cos(wt)
            let a =
                -0.5 * ((1.0 + w) * t).cos() / (1.0 + w) - 0.5 * ((1.0 - w) * t).cos() / (1.0 - w);
            let b = t * (w * t).sin() / w + (w * t).cos() / (w * w);
            (a + b) / 5f64.sqrt()
        };
        assert!((mean_projection(0) - (f(10.0) - f(0.0))).abs() < 1e-12);
    }

    #[test]
    fn pure_noise_response() {
        let s = Scenario {
            b: [0.0; 4],
            ..scenario(ResponseDistribution::Normal, 2000, 0.5)
        };
        let d = generate_dataset(&s, "s", &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        // remove the X1 contribution: Y - 2 X1 ~ N(0, 25)
        let mean = d.y.iter().zip(&d.x1).map(|(y, x)| y - 2.0 * x).sum::<f64>() / 2000.0;
        assert!(mean.abs() < 3.0 * 5.0 / 2000f64.sqrt());
    }

    #[test]
    fn score_variances() {
        let d = generate_dataset(
            &scenario(ResponseDistribution::Normal, 1000, 0.5),
            "s",
            &mut ChaCha8Rng::seed_from_u64(2),
        )
        .unwrap();
        for (k, &lambda) in EIGENVALUES.iter().enumerate() {
            let v = d.scores.iter().map(|s| s[k] * s[k]).sum::<f64>() / 1000.0;
            assert!((v / lambda - 1.0).abs() < 0.15, "k={k} var={v}");
        }
    }

    #[test]
    fn sparse_design_keeps_fifteen_grid_points() {
        let s = Scenario {
            design: SamplingDesign::Sparse,
            ..scenario(ResponseDistribution::Normal, 50, 0.5)
        };
        let d = generate_dataset(&s, "s", &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let grid = dense_times();
        for smp in &d.samples {
            assert_eq!(smp.len(), SPARSE_POINTS);
            assert!(smp.times.iter().all(|t| grid.contains(t)));
        }
        assert_ne!(d.samples[0].times, d.samples[1].times);
    }

    #[test]
    fn common_random_numbers_across_noise_and_distribution() {
        let a =
            replication_data(&scenario(ResponseDistribution::Normal, 20, 0.5), 10, 7, 3).unwrap();
        let b =
            replication_data(&scenario(ResponseDistribution::Mixture, 20, 6.13), 10, 7, 3).unwrap();
        assert_eq!(a.0.scores, b.0.scores);
        assert_eq!(a.0.x1, b.0.x1);
        assert_eq!(a.1.location, b.1.location);
        let c =
            replication_data(&scenario(ResponseDistribution::Normal, 20, 0.5), 10, 7, 4).unwrap();
        assert_ne!(a.0.scores, c.0.scores);
    }

    #[test]
    fn mae_examples() {
        let p = |v: Vec<f64>| QuantilePrediction {
            subject: "a".into(),
            taus: vec![0.1, 0.5],
            boundary: vec![false; v.len()],
            values: v,
        };
        let preds = vec![p(vec![1.0, 2.0]), p(vec![3.0, 4.0])];
        let truth = vec![vec![1.0, 2.0], vec![3.0, 4.0]];
        assert_eq!(evaluate_mae(&preds, &truth).unwrap(), vec![0.0, 0.0]);
        let shifted = vec![vec![1.5, 2.5], vec![3.5, 4.5]];
        assert_eq!(evaluate_mae(&preds, &shifted).unwrap(), vec![0.5, 0.5]);
        assert!(evaluate_mae(&preds, &truth[..1]).is_err());
    }

    #[test]
    fn small_experiment_runs() {
        let cfg = ExperimentConfig {
            distributions: vec![ResponseDistribution::Normal],
            sigmas: vec![0.5],
            n_train: vec![60],
            n_test: 20,
            replications: 2,
            timing: false,
            ..ExperimentConfig::default()
        };
        let s = run_experiment(&cfg).unwrap();
        assert_eq!(s.rows.len(), 8);
        assert_eq!(s.crossings, 0);
        assert!(s.errors.is_empty(), "{:?}", s.errors);
        assert!(s
            .rows
            .iter()
            .all(|r| r.mae.is_finite() && r.seconds.is_none()));
        let mut buf = Vec::new();
        write_summary(&s.rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 9);
    }
}
