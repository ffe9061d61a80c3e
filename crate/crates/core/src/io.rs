//! CSV ingestion, run configuration and the file-producing commands.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use crate::error::{Error, Result};
use crate::inference::{
    bootstrap_se, confidence_intervals, delta_bic_with, param_labels, Component, DeltaComponent, RefitSupport,
    NU_NAME,
};
use crate::model::{Criterion, Dataset, ThetaVector};
use crate::optimizer::{telescope_fit, Family, FitConfig, FitResult, Mode, TelescopeConfig};
use crate::sgnd::{norm_const, log_density_with, SgndSampler, SgndShape};
use crate::simulation::{params_csv, run_study, selection_json, SimScenario};

fn parse_cell(raw: &str, row: usize, column: &str) -> Result<f64> {
    let t = raw.trim();
    if t.is_empty() || t.eq_ignore_ascii_case("na") || t.eq_ignore_ascii_case("nan") {
        return Err(Error::MissingValue {
            row,
            column: column.to_string(),
        });
    }
    match t.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(Error::NonNumericCell {
            row,
            column: column.to_string(),
            value: t.to_string(),
        }),
    }
}

/// Reads `response` and the listed covariates (all other columns when
/// `covariates` is `None`). Rows are numbered from 1, excluding the header.
pub fn read_csv(path: &Path, response: &str, covariates: Option<&[String]>) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let headers: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let y_col = find(response)?;
    let names: Vec<String> = match covariates {
        Some(c) => c.to_vec(),
        None => headers.iter().filter(|h| *h != response).cloned().collect(),
    };
    let cols = names.iter().map(|n| find(n)).collect::<Result<Vec<_>>>()?;

    let mut y = Vec::new();
    let mut x = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = i + 1;
        let get = |c: usize| rec.get(c).unwrap_or("");
        y.push(parse_cell(get(y_col), row, response)?);
        for (&c, n) in cols.iter().zip(&names) {
            x.push(parse_cell(get(c), row, n)?);
        }
    }
    let n = y.len();
    let cov = DMatrix::from_row_slice(n, names.len(), &x);
    Dataset::new(DVector::from_vec(y), cov, names)
}

/// `--telescope start:end:steps`.
pub fn parse_telescope(s: &str) -> Result<TelescopeConfig> {
    let parts: Vec<&str> = s.split(':').collect();
    let bad = || Error::InvalidConfig(format!("telescope must be start:end:steps, got `{s}`"));
    if parts.len() != 3 {
        return Err(bad());
    }
    let start: f64 = parts[0].trim().parse().map_err(|_| bad())?;
    let end: f64 = parts[1].trim().parse().map_err(|_| bad())?;
    let steps: usize = parts[2].trim().parse().map_err(|_| bad())?;
    TelescopeConfig::new(start, end, steps)
}

/// `bic`, `aic` or a numeric penalty weight.
pub fn parse_criterion(s: &str) -> Result<Criterion> {
    match s.to_ascii_lowercase().as_str() {
        "bic" => Ok(Criterion::Bic),
        "aic" => Ok(Criterion::Aic),
        other => match other.parse::<f64>() {
            Ok(l) if l >= 0.0 && l.is_finite() => Ok(Criterion::Lambda(l)),
            _ => Err(Error::InvalidConfig(format!("criterion must be bic, aic or a number >= 0, got `{s}`"))),
        },
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub data_path: Option<PathBuf>,
    pub response: Option<String>,
    /// `None` means every column except the response.
    pub covariates: Option<Vec<String>>,
    pub model: Mode,
    pub family: Family,
    pub tau: f64,
    pub kappa_min: f64,
    pub criterion: Criterion,
    pub telescope: TelescopeConfig,
    pub seed: u64,
    /// Prepended verbatim to every output file name.
    pub out_prefix: String,
    pub threads: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data_path: None,
            response: None,
            covariates: None,
            model: Mode::Mpr,
            family: Family::Sgnd,
            tau: 0.15,
            kappa_min: 0.2,
            criterion: Criterion::Bic,
            telescope: TelescopeConfig::default(),
            seed: 1,
            out_prefix: String::new(),
            threads: 1,
        }
    }
}

impl RunConfig {
    pub fn fit_config(&self) -> FitConfig {
        FitConfig {
            tau: self.tau,
            kappa_min: self.kappa_min,
            criterion: self.criterion,
            telescope: self.telescope,
            mode: self.model,
            fixed_nu: self.family.fixed_nu(self.kappa_min),
        }
    }

    pub fn out_path(&self, name: &str) -> PathBuf {
        PathBuf::from(format!("{}{}", self.out_prefix, name))
    }

    pub fn load_data(&self) -> Result<Dataset> {
        let path = self
            .data_path
            .as_ref()
            .ok_or_else(|| Error::InvalidConfig("--data is required".into()))?;
        let response = self
            .response
            .as_ref()
            .ok_or_else(|| Error::InvalidConfig("--response is required".into()))?;
        read_csv(path, response, self.covariates.as_deref())
    }

    fn pool(&self) -> Result<rayon::ThreadPool> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.threads.max(1))
            .build()
            .map_err(|e| Error::InvalidConfig(e.to_string()))
    }
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    fs::write(path, contents)?;
    Ok(())
}

fn csv_string(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn json_f64(v: f64) -> serde_json::Value {
    if v.is_finite() {
        json!(v)
    } else {
        serde_json::Value::Null
    }
}

/// Machine-readable description of a failure.
pub fn error_json(err: &Error) -> serde_json::Value {
    json!({ "error": err.kind(), "message": err.to_string() })
}

pub fn write_error(config: &RunConfig, err: &Error) -> Result<PathBuf> {
    let path = config.out_path("error.json");
    write_file(&path, serde_json::to_string_pretty(&error_json(err))?.as_bytes())?;
    Ok(path)
}

fn path_label(component: Component, name: &str) -> String {
    format!("{}:{}", component.as_str(), name)
}

pub fn estimates_csv(fit: &FitResult) -> Result<String> {
    let labels = param_labels(&fit.names);
    let orig = fit.theta_original.to_vec();
    let scaled = fit.theta_scaled.to_vec();
    let se = fit.se_original();
    let ci = confidence_intervals(&orig, &se, 0.95);
    let free = fit.mask.flat();
    let active = fit.active_flat();
    let rows = labels.iter().enumerate().map(|(j, l)| {
        vec![
            l.component.as_str().to_string(),
            l.name.clone(),
            orig[j].to_string(),
            scaled[j].to_string(),
            opt(se[j]),
            ci[j].0.to_string(),
            ci[j].1.to_string(),
            (free[j] && active[j]).to_string(),
        ]
    });
    csv_string(
        &[
            "component",
            "variable",
            "estimate_original_scale",
            "estimate_standardized",
            "se",
            "ci_lo",
            "ci_hi",
            "selected",
        ],
        rows,
    )
}

pub fn path_csv(fit: &FitResult) -> Result<String> {
    let labels = param_labels(&fit.names);
    let mut header = vec!["step".to_string(), "epsilon".to_string(), "sic".to_string()];
    header.extend(labels.iter().map(|l| path_label(l.component, &l.name)));
    let rows = fit.path.iter().enumerate().map(|(t, row)| {
        let mut r = vec![(t + 1).to_string(), fit.epsilons[t].to_string(), fit.sic_trace[t].to_string()];
        r.extend(row.iter().map(|v| v.to_string()));
        r
    });
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    csv_string(&header, rows)
}

pub fn summary_json(fit: &FitResult, config: &RunConfig) -> serde_json::Value {
    let d = &fit.diagnostics;
    json!({
        "bic": json_f64(fit.bic),
        "df": fit.df,
        "kappa_hat": json_f64(fit.kappa_hat),
        "nu0_hat": json_f64(fit.theta_scaled.nu0),
        "nu0_se": fit.nu0_se().map(json_f64),
        "loglik": json_f64(fit.loglik),
        "iterations": d.total_iterations(),
        "breakdown_flag": fit.breakdown_flag,
        "n": fit.n,
        "p": fit.names.len(),
        "model": config.model,
        "family": config.family,
        "lambda": fit.config.criterion.lambda(fit.n),
        "tau": fit.config.tau,
        "kappa_min": fit.config.kappa_min,
        "active_beta": selected_names(&fit.names, &fit.active_beta),
        "active_alpha": selected_names(&fit.names, &fit.active_alpha),
        "diagnostics": {
            "nonconverged_steps": d.nonconverged_steps(),
            "step_halvings": d.halvings,
            "zero_steps": d.zero_steps,
            "ridge_retries": d.ridge_retries,
            "nu_clamped": d.nu_clamped,
            "scale_predictor_clipped": d.eta_clipped,
        },
        "timing": { "wall_time_secs": d.wall_time_secs },
    })
}

fn selected_names(names: &[String], flags: &[bool]) -> Vec<String> {
    names.iter().zip(flags).filter(|(_, &f)| f).map(|(n, _)| n.clone()).collect()
}

pub fn residuals_csv(data: &Dataset, fit: &FitResult) -> Result<String> {
    let th = &fit.theta_original;
    let mu = &data.x * &th.beta;
    let eta = &data.x * &th.alpha;
    let rows = (0..data.n()).map(|i| {
        let r = (data.y[i] - mu[i]) / (0.5 * eta[i]).exp();
        vec![(i + 1).to_string(), r.to_string()]
    });
    csv_string(&["row", "standardized_residual"], rows)
}

#[derive(Debug, Clone)]
pub struct FitOutput {
    pub data: Dataset,
    pub fit: FitResult,
    pub files: Vec<PathBuf>,
}

/// Fits and writes `estimates.csv`, `path.csv`, `summary.json` and
/// `residuals.csv`.
pub fn cmd_fit(config: &RunConfig) -> Result<FitOutput> {
    let data = config.load_data()?;
    let fit = telescope_fit(&data, &config.fit_config())?;
    let mut files = Vec::new();
    for (name, body) in [
        ("estimates.csv", estimates_csv(&fit)?),
        ("path.csv", path_csv(&fit)?),
        ("summary.json", serde_json::to_string_pretty(&summary_json(&fit, config))?),
        ("residuals.csv", residuals_csv(&data, &fit)?),
    ] {
        let p = config.out_path(name);
        write_file(&p, body.as_bytes())?;
        files.push(p);
    }
    Ok(FitOutput { data, fit, files })
}

/// Runs a study and writes `metrics_params.csv` and `metrics_selection.json`.
pub fn cmd_simulate(config: &RunConfig, scenario: &SimScenario, replicates: usize) -> Result<Vec<PathBuf>> {
    let fit_config = FitConfig {
        tau: scenario.tau,
        kappa_min: scenario.kappa_min,
        ..config.fit_config()
    };
    let study = run_study(scenario, replicates, &fit_config, config.threads)?;
    let params = config.out_path("metrics_params.csv");
    write_file(&params, params_csv(&study.summary)?.as_bytes())?;
    let sel = config.out_path("metrics_selection.json");
    let body = serde_json::to_string_pretty(&selection_json(&study.summary, scenario, replicates))?;
    write_file(&sel, body.as_bytes())?;
    Ok(vec![params, sel])
}

/// Scenario from a preset name or a JSON file path. Presets take `tau`
/// and `kappa_min` from `config`; a JSON scenario keeps its own.
pub fn resolve_scenario(spec: &str, n: Option<usize>, config: &RunConfig) -> Result<SimScenario> {
    let path = Path::new(spec);
    let mut sc = if spec.ends_with(".json") || path.is_file() {
        let mut s: SimScenario = serde_json::from_str(&fs::read_to_string(path)?)?;
        if let Some(n) = n {
            s.n = n;
        }
        s
    } else {
        let mut s = SimScenario::preset(spec, n.unwrap_or(1000), config.seed)?;
        s.tau = config.tau;
        s.kappa_min = config.kappa_min;
        s
    };
    sc.seed = config.seed;
    sc.validate()?;
    Ok(sc)
}

#[derive(Debug, Clone, PartialEq)]
pub enum CurveLevels {
    Quartiles,
    Values(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Profile {
    Median,
    /// Explicit values; unnamed covariates stay at their medians.
    Values(Vec<(String, f64)>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DensityCurveRequest {
    pub vary: String,
    pub levels: CurveLevels,
    pub others_at: Profile,
    pub y_grid: Option<(f64, f64)>,
    pub points: usize,
}

impl DensityCurveRequest {
    pub fn quartiles(vary: &str) -> Self {
        Self {
            vary: vary.to_string(),
            levels: CurveLevels::Quartiles,
            others_at: Profile::Median,
            y_grid: None,
            points: 200,
        }
    }
}

/// Sample quantile with linear interpolation between order statistics.
pub fn quantile(values: &[f64], prob: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let h = (v.len() - 1) as f64 * prob;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    v[lo] + (h - lo as f64) * (v[hi] - v[lo])
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DensityCurve {
    pub level: String,
    pub covariate_value: f64,
    pub mu: f64,
    pub s: f64,
    pub y: Vec<f64>,
    pub density: Vec<f64>,
}

/// Conditional densities at a covariate profile, one per level of `vary`.
pub fn density_curves(
    data: &Dataset,
    theta: &ThetaVector,
    tau: f64,
    kappa_min: f64,
    req: &DensityCurveRequest,
) -> Result<Vec<DensityCurve>> {
    let j = data
        .index_of(&req.vary)
        .ok_or_else(|| Error::UnknownCovariate(req.vary.clone()))?;
    if req.points < 2 {
        return Err(Error::InvalidConfig("density grid needs at least 2 points".into()));
    }
    let column = |k: usize| data.x.column(k + 1).iter().copied().collect::<Vec<f64>>();
    let mut base: Vec<f64> = (0..data.p()).map(|k| quantile(&column(k), 0.5)).collect();
    if let Profile::Values(vals) = &req.others_at {
        for (name, v) in vals {
            let k = data.index_of(name).ok_or_else(|| Error::UnknownCovariate(name.clone()))?;
            base[k] = *v;
        }
    }
    let levels: Vec<(String, f64)> = match &req.levels {
        CurveLevels::Quartiles => {
            let c = column(j);
            vec![("Q1".into(), quantile(&c, 0.25)), ("Q3".into(), quantile(&c, 0.75))]
        }
        CurveLevels::Values(v) => v.iter().map(|x| (x.to_string(), *x)).collect(),
    };
    let shape = SgndShape::from_nu(theta.nu0, tau, kappa_min)?;
    let nc = norm_const(&shape)?;
    let params: Vec<(String, f64, f64, f64)> = levels
        .into_iter()
        .map(|(label, v)| {
            let mut x = base.clone();
            x[j] = v;
            let lin = |c: &DVector<f64>| c[0] + x.iter().zip(c.iter().skip(1)).map(|(a, b)| a * b).sum::<f64>();
            (label, v, lin(&theta.beta), (0.5 * lin(&theta.alpha)).exp())
        })
        .collect();
    let (lo, hi) = match req.y_grid {
        Some(g) => g,
        None => {
            let sampler = SgndSampler::new(shape)?;
            let (q_lo, q_hi) = (sampler.quantile_std(0.001), sampler.quantile_std(0.999));
            params.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), (_, _, mu, s)| {
                (a.min(mu + s * q_lo), b.max(mu + s * q_hi))
            })
        }
    };
    let step = (hi - lo) / (req.points - 1) as f64;
    let y: Vec<f64> = (0..req.points).map(|i| lo + step * i as f64).collect();
    Ok(params
        .into_iter()
        .map(|(level, v, mu, s)| DensityCurve {
            density: y.iter().map(|&yy| log_density_with(yy, mu, s, &shape, &nc).exp()).collect(),
            y: y.clone(),
            level,
            covariate_value: v,
            mu,
            s,
        })
        .collect())
}

/// Reads original-scale estimates back from an `estimates.csv`.
pub fn load_estimates(path: &Path, names: &[String]) -> Result<ThetaVector> {
    let mut rdr = csv::Reader::from_path(path)?;
    let p = names.len();
    let mut theta = ThetaVector::zeros(p, 0.0);
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let comp = rec.get(0).unwrap_or("");
        let var = rec.get(1).unwrap_or("");
        let v = parse_cell(rec.get(2).unwrap_or(""), i + 1, "estimate_original_scale")?;
        let idx = if var == crate::inference::INTERCEPT {
            0
        } else if comp == "nu" && var == NU_NAME {
            theta.nu0 = v;
            continue;
        } else {
            names
                .iter()
                .position(|n| n == var)
                .ok_or_else(|| Error::UnknownCovariate(var.to_string()))?
                + 1
        };
        match comp {
            "beta" => theta.beta[idx] = v,
            "alpha" => theta.alpha[idx] = v,
            _ => return Err(Error::InvalidConfig(format!("unknown component `{comp}`"))),
        }
    }
    Ok(theta)
}

/// Writes `curves.csv`. Estimates come from `from_fit` (a previous output
/// prefix) when given, otherwise from a fresh fit.
pub fn cmd_density_curve(config: &RunConfig, req: &DensityCurveRequest, from_fit: Option<&str>) -> Result<PathBuf> {
    let data = config.load_data()?;
    if data.index_of(&req.vary).is_none() {
        return Err(Error::UnknownCovariate(req.vary.clone()));
    }
    let theta = match from_fit {
        Some(prefix) => load_estimates(Path::new(&format!("{prefix}estimates.csv")), &data.names)?,
        None => telescope_fit(&data, &config.fit_config())?.theta_original,
    };
    let curves = density_curves(&data, &theta, config.tau, config.kappa_min, req)?;
    let rows = curves.iter().flat_map(|c| {
        c.y.iter()
            .zip(&c.density)
            .map(|(y, d)| vec![c.level.clone(), y.to_string(), d.to_string()])
            .collect::<Vec<_>>()
    });
    let path = config.out_path("curves.csv");
    write_file(&path, csv_string(&["level", "y", "density"], rows)?.as_bytes())?;
    Ok(path)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeltaBicRow {
    pub variable: String,
    pub d_beta: Option<f64>,
    pub d_alpha: Option<f64>,
    pub d_both: Option<f64>,
}

/// ΔBIC for every covariate (or the listed ones) in each applicable
/// component; non-applicable cells are `None`.
pub fn delta_bic_table(
    data: &Dataset,
    fit: &FitResult,
    config: &FitConfig,
    variables: &[String],
    support: RefitSupport,
) -> Result<Vec<DeltaBicRow>> {
    let tasks: Vec<(usize, DeltaComponent)> = (0..variables.len())
        .flat_map(|v| [DeltaComponent::Beta, DeltaComponent::Alpha, DeltaComponent::Both].map(|c| (v, c)))
        .collect();
    let results: Vec<Option<f64>> = tasks
        .par_iter()
        .map(|&(v, c)| match delta_bic_with(data, fit, &variables[v], c, config, support) {
            Ok(d) => Ok(Some(d)),
            Err(Error::VariableNotActive { .. }) => Ok(None),
            Err(e) => Err(e),
        })
        .collect::<Result<_>>()?;
    Ok(variables
        .iter()
        .enumerate()
        .map(|(v, name)| DeltaBicRow {
            variable: name.clone(),
            d_beta: results[3 * v],
            d_alpha: results[3 * v + 1],
            d_both: results[3 * v + 2],
        })
        .collect())
}

/// Fits, then writes `delta_bic.csv`.
pub fn cmd_delta_bic(
    config: &RunConfig,
    variables: Option<&[String]>,
    support: RefitSupport,
) -> Result<(PathBuf, Vec<DeltaBicRow>)> {
    let data = config.load_data()?;
    let fc = config.fit_config();
    let fit = telescope_fit(&data, &fc)?;
    let vars: Vec<String> = match variables {
        Some(v) => {
            for name in v {
                if data.index_of(name).is_none() {
                    return Err(Error::UnknownCovariate(name.clone()));
                }
            }
            v.to_vec()
        }
        None => data.names.clone(),
    };
    let table = config.pool()?.install(|| delta_bic_table(&data, &fit, &fc, &vars, support))?;
    let rows = table.iter().map(|r| {
        vec![
            r.variable.clone(),
            opt(r.d_beta),
            opt(r.d_alpha),
            opt(r.d_both),
            r.d_beta.is_some().to_string(),
            r.d_alpha.is_some().to_string(),
            r.d_both.is_some().to_string(),
        ]
    });
    let path = config.out_path("delta_bic.csv");
    let header = [
        "variable",
        "d_beta",
        "d_alpha",
        "d_both",
        "beta_applicable",
        "alpha_applicable",
        "both_applicable",
    ];
    write_file(&path, csv_string(&header, rows)?.as_bytes())?;
    Ok((path, table))
}

/// Fits, bootstraps, then writes `bootstrap_se.csv`.
pub fn cmd_bootstrap(config: &RunConfig, resamples: usize) -> Result<PathBuf> {
    let data = config.load_data()?;
    let fc = config.fit_config();
    let fit = telescope_fit(&data, &fc)?;
    let boot = config
        .pool()?
        .install(|| bootstrap_se(&data, &fit, &fc, resamples, config.seed))?;
    let sandwich = fit.se_original();
    let rows = boot.labels.iter().enumerate().map(|(k, l)| {
        vec![
            l.component.as_str().to_string(),
            l.name.clone(),
            boot.se[k].to_string(),
            opt(sandwich[boot.flat_index[k]]),
            boot.n_failed.to_string(),
        ]
    });
    let path = config.out_path("bootstrap_se.csv");
    write_file(
        &path,
        csv_string(&["component", "variable", "se_boot", "se_sandwich", "n_failed"], rows)?.as_bytes(),
    )?;
    Ok(path)
}
