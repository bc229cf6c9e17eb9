use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use condquant::fpca::{fit_fpca, FpcaModel, FunctionalSample};
use condquant::model::{
    assemble_design, build_response_grid, make_artificial_response, Covariates,
    FunctionalCovariate, Grid, GridRule, TermSpec,
};
use condquant::quantile::{predict_quantiles, QuantilePrediction};
use condquant::sim::{self, replication_data, GeneratedDataset, Scenario};
use condquant::solver::{fit_joint, fit_pointwise, predict_cdf, ConditionalCdf, FittedCdfModel};

use crate::config::{self, ExperimentFile, FitConfig, FitMethod, PredictConfig, SimulateConfig};
use crate::error::{CliError, CliResult};
use crate::table::{self, num, LongTable, WideTable, ID_COLUMN};
use crate::Overrides;

pub const SAVED_MODEL_FORMAT: &str = "condquant-model";
pub const SAVED_MODEL_VERSION: u32 = 1;

/// How a functional covariate was turned into curves on a common grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum FunctionalInput {
    /// Curves are FPCA reconstructions.
    Presmoothed { fpca: FpcaModel },
    /// Curves are the raw values on a shared observation grid.
    Raw { times: Vec<f64> },
}

/// Everything `predict` needs, written by `fit`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SavedModel {
    pub format: String,
    pub version: u32,
    pub response_column: String,
    pub scalar_columns: Vec<String>,
    pub functional: BTreeMap<String, FunctionalInput>,
    pub model: FittedCdfModel,
}

impl SavedModel {
    pub fn load(path: &Path) -> CliResult<Self> {
        let saved: Self = config::load(path)?;
        if saved.format != SAVED_MODEL_FORMAT || saved.version != SAVED_MODEL_VERSION {
            return Err(CliError::Validation(format!(
                "{}: unsupported model format `{}` version {}",
                path.display(),
                saved.format,
                saved.version
            )));
        }
        Ok(saved)
    }

    pub fn save(&self, path: &Path) -> CliResult<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| CliError::Validation(format!("cannot serialize model: {e}")))?;
        std::fs::write(path, text).map_err(|e| CliError::io(path, e))
    }
}

fn base_dir(config_path: &Path) -> PathBuf {
    config_path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_default()
}

fn prepare_output(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn validate_taus(taus: &[f64]) -> CliResult<()> {
    if taus.is_empty() {
        return Err(CliError::Validation("no quantile levels given".into()));
    }
    if let Some(t) = taus.iter().find(|t| !(**t > 0.0 && **t < 1.0)) {
        return Err(CliError::Validation(format!(
            "quantile level {t} is not in (0, 1)"
        )));
    }
    Ok(())
}

fn warn_unused(what: &str, cmd: &str) {
    eprintln!("warning: --{what} has no effect on `{cmd}`");
}

/// Samples of `name` in the order of `ids`.
fn samples_for(
    name: &str,
    path: &Path,
    long: &LongTable,
    ids: &[String],
) -> CliResult<Vec<FunctionalSample>> {
    ids.iter()
        .map(|id| {
            let (t, v) = long.get(id).ok_or_else(|| {
                CliError::Validation(format!(
                    "{}: functional covariate `{name}` has no observations for subject `{id}`",
                    path.display()
                ))
            })?;
            Ok(FunctionalSample::new(id.clone(), t.clone(), v.clone())?)
        })
        .collect()
}

fn presmoothed_rows(fpca: &FpcaModel, samples: &[FunctionalSample]) -> CliResult<Vec<Vec<f64>>> {
    samples
        .iter()
        .map(|s| Ok(fpca.curve_from_scores(&fpca.score(s)?)))
        .collect()
}

fn raw_rows(name: &str, times: &[f64], samples: &[FunctionalSample]) -> CliResult<Vec<Vec<f64>>> {
    samples
        .iter()
        .map(|s| {
            if s.times != times {
                return Err(CliError::Validation(format!(
                    "functional covariate `{name}`: subject `{}` is observed at different times; \
                     enable presmoothing for irregular designs",
                    s.id
                )));
            }
            Ok(s.values.clone())
        })
        .collect()
}

fn functional_covariate(
    input: &FunctionalInput,
    name: &str,
    samples: &[FunctionalSample],
) -> CliResult<FunctionalCovariate> {
    let (grid, rows) = match input {
        FunctionalInput::Presmoothed { fpca } => {
            (fpca.grid.clone(), presmoothed_rows(fpca, samples)?)
        }
        FunctionalInput::Raw { times } => (times.clone(), raw_rows(name, times, samples)?),
    };
    Ok(FunctionalCovariate::from_rows(
        Grid::new(grid, GridRule::Custom)?,
        &rows,
    )?)
}

fn build_covariates(
    table: &WideTable,
    scalars: &[String],
    functional: &BTreeMap<String, (PathBuf, Vec<FunctionalSample>)>,
    inputs: &BTreeMap<String, FunctionalInput>,
) -> CliResult<Covariates> {
    let mut cov = Covariates::new(table.ids.clone());
    for name in scalars {
        let col = table.column(name).ok_or_else(|| {
            CliError::Validation(format!(
                "unknown column `{name}`: not found in the data file"
            ))
        })?;
        cov = cov.with_scalar(name, col.to_vec())?;
    }
    for (name, input) in inputs {
        let (_, samples) = functional.get(name).ok_or_else(|| {
            CliError::Validation(format!(
                "no input file given for functional covariate `{name}`"
            ))
        })?;
        cov = cov.with_functional(name, functional_covariate(input, name, samples)?)?;
    }
    Ok(cov)
}

fn read_functional(
    base: &Path,
    files: &BTreeMap<String, PathBuf>,
    ids: &[String],
) -> CliResult<BTreeMap<String, (PathBuf, Vec<FunctionalSample>)>> {
    files
        .iter()
        .map(|(name, p)| {
            let path = config::resolve(base, p);
            let long = table::read_long(&path)?;
            let samples = samples_for(name, &path, &long, ids)?;
            Ok((name.clone(), (path, samples)))
        })
        .collect()
}

/// Checks that every column named by a term exists in some input.
fn check_term_columns(
    terms: &[TermSpec],
    table: &WideTable,
    functional: &BTreeMap<String, PathBuf>,
) -> CliResult<()> {
    for term in terms {
        for col in term.columns() {
            if table.column(col).is_none() && !functional.contains_key(col) {
                return Err(CliError::Validation(format!(
                    "unknown column `{col}` referenced by term `{}`",
                    term.label()
                )));
            }
        }
    }
    Ok(())
}

fn cdf_rows(cdfs: &[ConditionalCdf]) -> Vec<Vec<String>> {
    cdfs.iter()
        .flat_map(|c| {
            c.grid
                .iter()
                .zip(&c.values)
                .map(|(y, p)| vec![c.subject.clone(), num(*y), num(*p)])
        })
        .collect()
}

fn quantile_rows(preds: &[QuantilePrediction]) -> Vec<Vec<String>> {
    preds
        .iter()
        .flat_map(|q| {
            q.taus
                .iter()
                .zip(&q.values)
                .zip(&q.boundary)
                .map(|((t, v), b)| vec![q.subject.clone(), num(*t), num(*v), b.to_string()])
        })
        .collect()
}

const CDF_HEADER: [&str; 3] = [ID_COLUMN, "y", "cdf"];
const QUANTILE_HEADER: [&str; 4] = [ID_COLUMN, "tau", "quantile", "boundary"];

fn write_coefficients(path: &Path, model: &FittedCdfModel, points: usize) -> CliResult<()> {
    let y = Grid::uniform(model.grid.first(), model.grid.last(), points)?;
    let mut rows = Vec::new();
    for (k, term) in model.terms.iter().enumerate() {
        let t: Vec<f64> = match term.t_basis() {
            Some(b) => {
                let (lo, hi) = b.domain();
                Grid::uniform(lo, hi, points)?.points().to_vec()
            }
            None => Vec::new(),
        };
        let label = term.label();
        for (tv, yv, comp, value) in model.coefficient_function(k, &t, y.points())? {
            let opt = |v: Option<f64>| v.map(num).unwrap_or_default();
            rows.push(vec![
                label.clone(),
                comp.map(|c| c.to_string()).unwrap_or_default(),
                opt(tv),
                opt(yv),
                num(value),
            ]);
        }
    }
    table::write_csv(path, &["term", "component", "t", "y", "value"], rows)
}

pub fn fit(ov: &Overrides) -> CliResult<()> {
    let mut cfg: FitConfig = config::load(&ov.config)?;
    let base = base_dir(&ov.config);
    if let Some(g) = ov.grid_points {
        cfg.grid_points = g;
    }
    if let Some(s) = ov.smoothing {
        cfg.solver.smoothing = s;
    }
    if let Some(p) = ov.pve {
        cfg.presmooth.get_or_insert_with(Default::default).fpca.pve = p;
    }
    if let Some(t) = &ov.tau {
        cfg.taus = t.clone();
    }
    if let Some(t) = ov.trim {
        cfg.trim = t;
    }
    if ov.seed.is_some() {
        warn_unused("seed", "fit");
    }
    validate_taus(&cfg.taus)?;
    if cfg.terms.is_empty() {
        return Err(CliError::Validation("no terms given".into()));
    }

    let data_path = config::resolve(&base, &cfg.data);
    let data = table::read_wide(&data_path)?;
    let y = data
        .column(&cfg.response_column)
        .ok_or_else(|| {
            CliError::Validation(format!(
                "{}: response column `{}` not found",
                data_path.display(),
                cfg.response_column
            ))
        })?
        .to_vec();
    check_term_columns(&cfg.terms, &data, &cfg.functional)?;

    let functional = read_functional(&base, &cfg.functional, &data.ids)?;
    let mut inputs = BTreeMap::new();
    for (name, (_, samples)) in &functional {
        let input = match &cfg.presmooth {
            Some(ps) => {
                let (lo, hi) = samples
                    .iter()
                    .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), s| {
                        (lo.min(s.times[0]), hi.max(s.times[s.times.len() - 1]))
                    });
                let grid = Grid::uniform(lo, hi, ps.grid_points)?;
                FunctionalInput::Presmoothed {
                    fpca: fit_fpca(samples, &grid, &ps.fpca)?,
                }
            }
            None => FunctionalInput::Raw {
                times: samples[0].times.clone(),
            },
        };
        inputs.insert(name.clone(), input);
    }
    let scalars: Vec<String> = data
        .columns
        .iter()
        .map(|(n, _)| n.clone())
        .filter(|n| *n != cfg.response_column && !cfg.functional.contains_key(n))
        .collect();
    let cov = build_covariates(&data, &scalars, &functional, &inputs)?;

    let grid = build_response_grid(&y, cfg.grid_points, cfg.grid_rule)?;
    let z = make_artificial_response(&y, &grid)?;
    let design = assemble_design(&cfg.terms, &cov, &grid, &cfg.design)?;
    let model = match cfg.method {
        FitMethod::Joint => fit_joint(&design, &z, &cfg.solver)?,
        FitMethod::Pointwise => fit_pointwise(&design, &z, &cfg.solver)?,
    };
    if !model.convergence.converged {
        eprintln!("warning: iterations stopped before convergence");
    }

    let out = config::resolve(&base, &cfg.output_dir);
    prepare_output(&out)?;
    let cdfs = predict_cdf(&model, &cov)?;
    let quantiles = predict_quantiles(&cdfs, &cfg.taus, cfg.trim)?;
    write_coefficients(
        &out.join("coefficients.csv"),
        &model,
        cfg.coefficient_points,
    )?;
    table::write_csv(&out.join("fitted_cdf.csv"), &CDF_HEADER, cdf_rows(&cdfs))?;
    table::write_csv(
        &out.join("fitted_quantiles.csv"),
        &QUANTILE_HEADER,
        quantile_rows(&quantiles),
    )?;
    SavedModel {
        format: SAVED_MODEL_FORMAT.into(),
        version: SAVED_MODEL_VERSION,
        response_column: cfg.response_column,
        scalar_columns: scalars,
        functional: inputs,
        model,
    }
    .save(&out.join("model.json"))
}

pub fn predict(ov: &Overrides) -> CliResult<()> {
    let mut cfg: PredictConfig = config::load(&ov.config)?;
    let base = base_dir(&ov.config);
    if let Some(t) = &ov.tau {
        cfg.taus = t.clone();
    }
    if let Some(t) = ov.trim {
        cfg.trim = t;
    }
    for (set, name) in [
        (ov.seed.is_some(), "seed"),
        (ov.grid_points.is_some(), "grid-points"),
        (ov.smoothing.is_some(), "smoothing"),
        (ov.pve.is_some(), "pve"),
    ] {
        if set {
            warn_unused(name, "predict");
        }
    }
    validate_taus(&cfg.taus)?;

    let saved = SavedModel::load(&config::resolve(&base, &cfg.model))?;
    let data_path = config::resolve(&base, &cfg.data);
    let data = table::read_wide(&data_path)?;
    if let Some(missing) = saved
        .scalar_columns
        .iter()
        .find(|c| data.column(c).is_none())
    {
        return Err(CliError::Validation(format!(
            "{}: column `{missing}` not found",
            data_path.display()
        )));
    }
    let functional = read_functional(&base, &cfg.functional, &data.ids)?;
    let cov = build_covariates(&data, &saved.scalar_columns, &functional, &saved.functional)?;

    let out = config::resolve(&base, &cfg.output_dir);
    prepare_output(&out)?;
    let cdfs = predict_cdf(&saved.model, &cov)?;
    let quantiles = predict_quantiles(&cdfs, &cfg.taus, cfg.trim)?;
    table::write_csv(&out.join("cdf.csv"), &CDF_HEADER, cdf_rows(&cdfs))?;
    table::write_csv(
        &out.join("quantiles.csv"),
        &QUANTILE_HEADER,
        quantile_rows(&quantiles),
    )
}

fn write_dataset(out: &Path, stem: &str, d: &GeneratedDataset) -> CliResult<()> {
    let rows = (0..d.len()).map(|i| vec![d.ids[i].clone(), num(d.y[i]), num(d.x1[i])]);
    table::write_csv(
        &out.join(format!("{stem}.csv")),
        &[ID_COLUMN, "y", "x1"],
        rows,
    )?;
    let long = d.samples.iter().flat_map(|s| {
        s.times
            .iter()
            .zip(&s.values)
            .map(|(t, v)| vec![s.id.clone(), num(*t), num(*v)])
    });
    table::write_csv(
        &out.join(format!("{stem}_x2.csv")),
        &[ID_COLUMN, "time", "value"],
        long,
    )?;
    let truth = (0..d.len()).map(|i| {
        let mut r = vec![d.ids[i].clone(), num(d.location[i]), num(d.integral[i])];
        r.extend(d.scores[i].iter().map(|s| num(*s)));
        r
    });
    table::write_csv(
        &out.join(format!("{stem}_truth.csv")),
        &[
            ID_COLUMN, "location", "integral", "score1", "score2", "score3", "score4",
        ],
        truth,
    )
}

pub fn simulate(ov: &Overrides) -> CliResult<()> {
    let mut cfg: SimulateConfig = config::load(&ov.config)?;
    let base = base_dir(&ov.config);
    if let Some(s) = ov.seed {
        cfg.seed = s;
    }
    for (set, name) in [
        (ov.tau.is_some(), "tau"),
        (ov.grid_points.is_some(), "grid-points"),
        (ov.trim.is_some(), "trim"),
        (ov.smoothing.is_some(), "smoothing"),
        (ov.pve.is_some(), "pve"),
    ] {
        if set {
            warn_unused(name, "simulate");
        }
    }
    let scenario = Scenario {
        distribution: cfg.distribution,
        n: cfg.n,
        design: cfg.design,
        sigma: cfg.sigma,
        b: cfg.b,
    };
    let (train, test) = replication_data(&scenario, cfg.n_test, cfg.seed, cfg.replication)?;
    let out = config::resolve(&base, &cfg.output_dir);
    prepare_output(&out)?;
    write_dataset(&out, "train", &train)?;
    write_dataset(&out, "test", &test)
}

pub fn experiment(ov: &Overrides) -> CliResult<()> {
    let mut file: ExperimentFile = config::load(&ov.config)?;
    let base = base_dir(&ov.config);
    let cfg = &mut file.experiment;
    if let Some(s) = ov.seed {
        cfg.seed = s;
    }
    if let Some(t) = &ov.tau {
        cfg.taus = t.clone();
    }
    if let Some(g) = ov.grid_points {
        cfg.fit.grid_points = g;
    }
    if let Some(t) = ov.trim {
        cfg.fit.trim = t;
    }
    if let Some(s) = ov.smoothing {
        cfg.fit.solver.smoothing = s;
    }
    if let Some(p) = ov.pve {
        cfg.fit.fpca.pve = p;
    }
    validate_taus(&cfg.taus)?;
    let summary = sim::run_experiment(cfg)?;
    let path = config::resolve(&base, &file.output);
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        prepare_output(dir)?;
    }
    let f = std::fs::File::create(&path).map_err(|e| CliError::io(&path, e))?;
    sim::write_summary(&summary.rows, std::io::BufWriter::new(f))?;
    eprintln!("quantile crossings: {}", summary.crossings);
    for e in &summary.errors {
        eprintln!("replication failed: {e}");
    }
    Ok(())
}
