//! Monte Carlo harness: scenario design, data generation, replicate runs and
//! selection/coverage metrics.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Bernoulli, Distribution, Exp1, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::{param_labels, Component};
use crate::model::Dataset;
use crate::optimizer::{telescope_fit, FitConfig};
use crate::sgnd::{SgndSampler, SgndShape};

/// SplitMix64 finalizer.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for replicate (or resample) `index` of a run seeded with `seed`.
pub fn mix_seed(seed: u64, index: u64) -> u64 {
    splitmix64(splitmix64(seed) ^ index)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CovariateKind {
    Exponential { rate: f64 },
    Bernoulli { p: f64 },
    Normal,
    /// Member of the jointly normal block with correlation `ρ^{|j−k|}`
    /// between its `j`-th and `k`-th members (in column order).
    Correlated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimScenario {
    pub name: String,
    pub beta_true: Vec<f64>,
    pub alpha_true: Vec<f64>,
    pub kappa: f64,
    pub n: usize,
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default = "default_kappa_min")]
    pub kappa_min: f64,
    pub covariates: Vec<CovariateKind>,
    #[serde(default = "default_rho")]
    pub corr_rho: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_tau() -> f64 {
    0.15
}
fn default_kappa_min() -> f64 {
    0.2
}
fn default_rho() -> f64 {
    0.5
}

pub const TABLE1_BETA: [f64; 13] = [0.0, 1.0, 0.5, 0.5, 1.0, 0.5, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
pub const TABLE1_ALPHA: [f64; 13] = [0.0, 0.5, 1.0, 0.5, 1.0, 0.0, 0.0, 0.5, 1.0, 0.0, 0.0, 0.0, 0.0];

fn table1_covariates() -> Vec<CovariateKind> {
    use CovariateKind::*;
    let exp = Exponential { rate: 1.0 };
    let bern = Bernoulli { p: 0.75 };
    vec![
        exp, Correlated, bern, Normal, Normal, Correlated, Normal, Normal, Correlated, bern, exp, Correlated,
    ]
}

impl SimScenario {
    /// The canonical twelve-covariate design at shape `kappa`.
    pub fn table1(kappa: f64, n: usize, seed: u64) -> Self {
        Self {
            name: format!("table1-kappa{}", kappa_tag(kappa)),
            beta_true: TABLE1_BETA.to_vec(),
            alpha_true: TABLE1_ALPHA.to_vec(),
            kappa,
            n,
            tau: 0.15,
            kappa_min: 0.2,
            covariates: table1_covariates(),
            corr_rho: 0.5,
            seed,
        }
    }

    /// Same covariates, no effects, normal-like errors.
    pub fn null(n: usize, seed: u64) -> Self {
        Self {
            name: "null".into(),
            beta_true: vec![0.0; 13],
            alpha_true: vec![0.0; 13],
            ..Self::table1(2.0, n, seed)
        }
    }

    /// Named presets: `table1-kappa{1,1.33,1.67,2}` and `null`.
    pub fn preset(name: &str, n: usize, seed: u64) -> Result<Self> {
        let kappa = match name {
            "table1-kappa1" => 1.0,
            "table1-kappa1.33" => 4.0 / 3.0,
            "table1-kappa1.67" => 5.0 / 3.0,
            "table1-kappa2" => 2.0,
            "null" => return Ok(Self::null(n, seed)),
            _ => return Err(Error::InvalidConfig(format!("unknown scenario `{name}`"))),
        };
        Ok(Self::table1(kappa, n, seed))
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.covariates.len();
        if self.beta_true.len() != p + 1 || self.alpha_true.len() != p + 1 {
            return Err(Error::InvalidConfig(format!(
                "scenario `{}` needs {} coefficients per component",
                self.name,
                p + 1
            )));
        }
        if self.n <= p + 1 {
            return Err(Error::InvalidConfig("scenario n too small".into()));
        }
        SgndShape::new(self.kappa, self.tau, self.kappa_min)?;
        Ok(())
    }

    pub fn p(&self) -> usize {
        self.covariates.len()
    }

    pub fn nu0_true(&self) -> f64 {
        (self.kappa - self.kappa_min).ln()
    }

    pub fn names(&self) -> Vec<String> {
        (1..=self.p()).map(|j| format!("X{j}")).collect()
    }

    pub fn theta_true(&self) -> Vec<f64> {
        let mut v = self.beta_true.clone();
        v.extend(&self.alpha_true);
        v.push(self.nu0_true());
        v
    }
}

fn kappa_tag(kappa: f64) -> String {
    if (kappa - 4.0 / 3.0).abs() < 1e-9 {
        "1.33".into()
    } else if (kappa - 5.0 / 3.0).abs() < 1e-9 {
        "1.67".into()
    } else {
        format!("{kappa}")
    }
}

fn ar1_cholesky(m: usize, rho: f64) -> DMatrix<f64> {
    let r = DMatrix::from_fn(m, m, |j, k| rho.powi((j as i32 - k as i32).abs()));
    r.cholesky().expect("AR(1) correlation is positive definite").l()
}

/// `n × p` covariates, drawn row by row in column order.
pub fn gen_covariates<R: Rng + ?Sized>(scenario: &SimScenario, rng: &mut R) -> DMatrix<f64> {
    let p = scenario.p();
    let n = scenario.n;
    let m = scenario
        .covariates
        .iter()
        .filter(|c| matches!(c, CovariateKind::Correlated))
        .count();
    let chol = ar1_cholesky(m.max(1), scenario.corr_rho);
    let mut x = DMatrix::zeros(n, p);
    let mut e = DVector::zeros(m.max(1));
    for i in 0..n {
        for v in e.iter_mut().take(m) {
            *v = rng.sample(StandardNormal);
        }
        let z = &chol * &e;
        let mut next = 0;
        for (j, kind) in scenario.covariates.iter().enumerate() {
            x[(i, j)] = match *kind {
                CovariateKind::Exponential { rate } => {
                    let v: f64 = rng.sample(Exp1);
                    v / rate
                }
                CovariateKind::Bernoulli { p } => {
                    let d = Bernoulli::new(p).expect("probability in [0, 1]");
                    if d.sample(rng) {
                        1.0
                    } else {
                        0.0
                    }
                }
                CovariateKind::Normal => rng.sample(StandardNormal),
                CovariateKind::Correlated => {
                    next += 1;
                    z[next - 1]
                }
            };
        }
    }
    x
}

/// Responses `yᵢ = μᵢ + sᵢ εᵢ`, `ε` standard SGND, `μ = xᵀβ`, `s = exp(xᵀα/2)`.
pub fn gen_response<R: Rng + ?Sized>(scenario: &SimScenario, x: &DMatrix<f64>, rng: &mut R) -> Result<DVector<f64>> {
    let sampler = SgndSampler::new(SgndShape::new(scenario.kappa, scenario.tau, scenario.kappa_min)?)?;
    let b = &scenario.beta_true;
    let a = &scenario.alpha_true;
    let mut y = DVector::zeros(x.nrows());
    for i in 0..x.nrows() {
        let row = x.row(i);
        let mu = b[0] + row.iter().zip(&b[1..]).map(|(v, c)| v * c).sum::<f64>();
        let eta = a[0] + row.iter().zip(&a[1..]).map(|(v, c)| v * c).sum::<f64>();
        y[i] = mu + (0.5 * eta).exp() * sampler.draw_std(rng);
    }
    Ok(y)
}

/// Dataset for replicate `index`; identical however replicates are batched.
pub fn replicate_data(scenario: &SimScenario, index: usize) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(scenario.seed, index as u64));
    let x = gen_covariates(scenario, &mut rng);
    let y = gen_response(scenario, &x, &mut rng)?;
    Dataset::new(y, x, scenario.names())
}

/// Outcome of one replicate.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicateRecord {
    pub index: usize,
    /// Original-scale estimates; `None` if the fit failed.
    pub theta: Option<Vec<f64>>,
    pub se: Vec<Option<f64>>,
    pub breakdown: bool,
    /// `XᵀX / n` of the raw design with intercept.
    pub gram: DMatrix<f64>,
    pub error: Option<String>,
}

pub fn run_replicate(scenario: &SimScenario, index: usize, config: &FitConfig) -> Result<ReplicateRecord> {
    let data = replicate_data(scenario, index)?;
    let gram = data.x.tr_mul(&data.x) / data.n() as f64;
    let config = FitConfig {
        tau: scenario.tau,
        kappa_min: scenario.kappa_min,
        ..*config
    };
    Ok(match telescope_fit(&data, &config) {
        Ok(fit) => ReplicateRecord {
            index,
            theta: Some(fit.theta_original.to_vec()),
            se: fit.se_original(),
            breakdown: fit.breakdown_flag,
            gram,
            error: None,
        },
        Err(e) => ReplicateRecord {
            index,
            theta: None,
            se: vec![None; 2 * scenario.p() + 3],
            breakdown: false,
            gram,
            error: Some(e.to_string()),
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SelectionMetrics {
    /// Mean correct zeros among the true-zero slopes.
    #[serde(rename = "C")]
    pub correct_zeros: f64,
    /// Mean zeros among the true non-zero slopes.
    #[serde(rename = "IC")]
    pub incorrect_zeros: f64,
    /// Fraction of replicates with the exact zero pattern.
    #[serde(rename = "PT")]
    pub pt: f64,
    #[serde(rename = "MSE")]
    pub mse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParamMetrics {
    pub component: Component,
    pub index: usize,
    pub name: String,
    pub truth: f64,
    pub mean: Option<f64>,
    /// SD of the estimates over converged replicates.
    pub se: Option<f64>,
    /// Mean sandwich SE over replicates where the parameter was active.
    pub see: Option<f64>,
    pub cp: Option<f64>,
    pub active_rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsSummary {
    pub beta: SelectionMetrics,
    pub alpha: SelectionMetrics,
    /// Exact support recovery in both components at once.
    pub pt_joint: f64,
    /// Replicates with no incorrect zero in either component.
    pub ic_zero_replicates: usize,
    pub params: Vec<ParamMetrics>,
    pub replicate_count: usize,
    pub failure_count: usize,
    pub breakdown_count: usize,
    /// False when fewer than two replicates converged.
    pub se_defined: bool,
}

impl MetricsSummary {
    pub fn param(&self, component: Component, index: usize) -> &ParamMetrics {
        self.params
            .iter()
            .find(|p| p.component == component && p.index == index)
            .expect("parameter exists")
    }

    pub fn breakdown_rate(&self) -> f64 {
        let ok = self.replicate_count - self.failure_count;
        if ok == 0 {
            0.0
        } else {
            self.breakdown_count as f64 / ok as f64
        }
    }
}

struct ComponentTally {
    c: f64,
    ic: f64,
    pt: f64,
    mse: f64,
}

fn tally(est: &[f64], truth: &[f64], gram: &DMatrix<f64>) -> (ComponentTally, usize) {
    let mut c = 0;
    let mut ic = 0;
    let mut exact = true;
    for j in 1..truth.len() {
        let zero = est[j] == 0.0;
        if truth[j] == 0.0 && zero {
            c += 1;
        }
        if truth[j] != 0.0 && zero {
            ic += 1;
        }
        exact &= zero == (truth[j] == 0.0);
    }
    let d = DVector::from_iterator(truth.len(), est.iter().zip(truth).map(|(e, t)| e - t));
    let mse = d.dot(&(gram * &d));
    (
        ComponentTally {
            c: c as f64,
            ic: ic as f64,
            pt: if exact { 1.0 } else { 0.0 },
            mse,
        },
        ic,
    )
}

/// Aggregates replicate records (in index order) against the truth.
pub fn compute_metrics(records: &[ReplicateRecord], scenario: &SimScenario) -> MetricsSummary {
    let q = scenario.p() + 1;
    let truth = scenario.theta_true();
    let ok: Vec<&ReplicateRecord> = records.iter().filter(|r| r.theta.is_some()).collect();
    let m = ok.len() as f64;
    let mut sums = [[0.0; 4]; 2];
    let mut joint = 0.0;
    let mut ic_zero = 0;
    for r in &ok {
        let th = r.theta.as_ref().unwrap();
        let (b, icb) = tally(&th[..q], &scenario.beta_true, &r.gram);
        let (a, ica) = tally(&th[q..2 * q], &scenario.alpha_true, &r.gram);
        for (k, t) in [b, a].iter().enumerate() {
            sums[k][0] += t.c;
            sums[k][1] += t.ic;
            sums[k][2] += t.pt;
            sums[k][3] += t.mse;
        }
        if icb + ica == 0 {
            ic_zero += 1;
        }
        // Support recovery in both components.
        let exact = (1..q).all(|j| {
            (th[j] == 0.0) == (scenario.beta_true[j] == 0.0) && (th[q + j] == 0.0) == (scenario.alpha_true[j] == 0.0)
        });
        if exact {
            joint += 1.0;
        }
    }
    let avg = |v: f64| if m > 0.0 { v / m } else { f64::NAN };
    let sel = |s: [f64; 4]| SelectionMetrics {
        correct_zeros: avg(s[0]),
        incorrect_zeros: avg(s[1]),
        pt: avg(s[2]),
        mse: avg(s[3]),
    };

    let z = crate::inference::normal_quantile(0.975);
    let labels = param_labels(&scenario.names());
    let params = labels
        .into_iter()
        .enumerate()
        .map(|(j, label)| {
            let vals: Vec<f64> = ok.iter().map(|r| r.theta.as_ref().unwrap()[j]).collect();
            let mean = (m > 0.0).then(|| vals.iter().sum::<f64>() / m);
            let se = (m > 1.0).then(|| {
                let mu = mean.unwrap();
                (vals.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / (m - 1.0)).sqrt()
            });
            let ses: Vec<f64> = ok.iter().filter_map(|r| r.se[j]).filter(|s| s.is_finite()).collect();
            let see = (!ses.is_empty()).then(|| ses.iter().sum::<f64>() / ses.len() as f64);
            let covered = ok
                .iter()
                .filter(|r| {
                    let est = r.theta.as_ref().unwrap()[j];
                    let (lo, hi) = match r.se[j] {
                        Some(s) => (est - z * s, est + z * s),
                        None => (est, est),
                    };
                    lo <= truth[j] && truth[j] <= hi
                })
                .count();
            let active = ok.iter().filter(|r| r.se[j].is_some()).count();
            ParamMetrics {
                component: label.component,
                index: label.index,
                name: label.name,
                truth: truth[j],
                mean,
                se,
                see,
                cp: (m > 0.0).then(|| covered as f64 / m),
                active_rate: (m > 0.0).then(|| active as f64 / m),
            }
        })
        .collect();

    MetricsSummary {
        beta: sel(sums[0]),
        alpha: sel(sums[1]),
        pt_joint: avg(joint),
        ic_zero_replicates: ic_zero,
        params,
        replicate_count: records.len(),
        failure_count: records.len() - ok.len(),
        breakdown_count: ok.iter().filter(|r| r.breakdown).count(),
        se_defined: ok.len() >= 2,
    }
}

#[derive(Debug, Clone)]
pub struct StudyResult {
    pub records: Vec<ReplicateRecord>,
    pub summary: MetricsSummary,
}

/// Runs `replicates` fits on `threads` workers and aggregates in replicate
/// order, so the result does not depend on the worker count.
pub fn run_study(scenario: &SimScenario, replicates: usize, config: &FitConfig, threads: usize) -> Result<StudyResult> {
    scenario.validate()?;
    config.validate()?;
    if replicates == 0 {
        return Err(Error::InvalidConfig("replicates must be at least 1".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let records: Vec<ReplicateRecord> = pool.install(|| {
        (0..replicates)
            .into_par_iter()
            .map(|i| run_replicate(scenario, i, config))
            .collect::<Result<Vec<_>>>()
    })?;
    let summary = compute_metrics(&records, scenario);
    Ok(StudyResult { records, summary })
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// One row per parameter: truth, mean, SE, SEE, CP.
pub fn params_csv(summary: &MetricsSummary) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["component", "variable", "truth", "mean", "se", "see", "cp", "active_rate"])?;
    for p in &summary.params {
        w.write_record([
            p.component.as_str().to_string(),
            p.name.clone(),
            p.truth.to_string(),
            opt(p.mean),
            opt(p.se),
            opt(p.see),
            opt(p.cp),
            opt(p.active_rate),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

/// Selection metrics per component plus the scenario truth.
pub fn selection_json(summary: &MetricsSummary, scenario: &SimScenario, replicates: usize) -> serde_json::Value {
    serde_json::json!({
        "scenario": scenario,
        "replicates": replicates,
        "replicate_count": summary.replicate_count,
        "failure_count": summary.failure_count,
        "breakdown_count": summary.breakdown_count,
        "se_defined": summary.se_defined,
        "beta": summary.beta,
        "alpha": summary.alpha,
        "pt_joint": summary.pt_joint,
        "ic_zero_replicates": summary.ic_zero_replicates,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optimizer::TelescopeConfig;

    fn record(theta: Vec<f64>, se: f64, gram: DMatrix<f64>) -> ReplicateRecord {
        let se = theta.iter().map(|&t| if t != 0.0 { Some(se) } else { None }).collect();
        ReplicateRecord {
            index: 0,
            theta: Some(theta),
            se,
            breakdown: false,
            gram,
            error: None,
        }
    }

    #[test]
    fn splitmix_reference_values() {
        // Published first outputs of SplitMix64 seeded with 0.
        let mut s: u64 = 0;
        let mut next = || {
            let out = splitmix64(s);
            s = s.wrapping_add(0x9E37_79B9_7F4A_7C15);
            out
        };
        assert_eq!(next(), 0xE220_A839_7B1D_CDAF);
        assert_eq!(next(), 0x6E78_9E6A_A1B9_65F4);
        assert_ne!(mix_seed(1, 0), mix_seed(1, 1));
    }

    #[test]
    fn covariate_moments_and_correlation() {
        let sc = SimScenario::table1(2.0, 100_000, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = gen_covariates(&sc, &mut rng);
        let col = |j: usize| x.column(j).iter().copied().collect::<Vec<f64>>();
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let corr = |a: &[f64], b: &[f64]| {
            let (ma, mb) = (mean(a), mean(b));
            let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
            let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
            let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
            cov / (va * vb).sqrt()
        };
        assert!((mean(&col(2)) - 0.75).abs() < 0.01);
        assert!((mean(&col(9)) - 0.75).abs() < 0.01);
        assert!((mean(&col(0)) - 1.0).abs() < 0.02);
        assert!((corr(&col(1), &col(5)) - 0.5).abs() < 0.02);
        assert!((corr(&col(1), &col(8)) - 0.25).abs() < 0.02);
        assert!((corr(&col(1), &col(11)) - 0.125).abs() < 0.02);
        assert!(corr(&col(3), &col(4)).abs() < 0.02);
    }

    #[test]
    fn generation_is_deterministic() {
        let sc = SimScenario::table1(1.0, 50, 9);
        let a = replicate_data(&sc, 4).unwrap();
        let b = replicate_data(&sc, 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.y, replicate_data(&sc, 5).unwrap().y);
    }

    #[test]
    fn response_location_and_scale_links() {
        let mut sc = SimScenario::table1(1.0, 100_000, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = gen_covariates(&sc, &mut rng);
        let y = gen_response(&sc, &x, &mut rng).unwrap();
        let xi = DMatrix::from_fn(sc.n, 13, |i, j| if j == 0 { 1.0 } else { x[(i, j - 1)] });
        let mu = &xi * DVector::from_vec(sc.beta_true.clone());
        let s = (&xi * DVector::from_vec(sc.alpha_true.clone())).map(|e| (0.5 * e).exp());
        let mut z: Vec<(f64, f64)> = (0..sc.n).map(|i| (s[i], (y[i] - mu[i]) / s[i])).collect();
        let mut resid: Vec<f64> = (0..sc.n).map(|i| y[i] - mu[i]).collect();
        resid.sort_by(f64::total_cmp);
        assert!(resid[sc.n / 2].abs() < 0.05);
        z.sort_by(|a, b| a.0.total_cmp(&b.0));
        let sd = |v: &[(f64, f64)]| (v.iter().map(|p| p.1 * p.1).sum::<f64>() / v.len() as f64).sqrt();
        let bins: Vec<f64> = z.chunks(sc.n / 5).map(sd).collect();
        for b in &bins {
            assert!((b / bins[0] - 1.0).abs() < 0.1, "{bins:?}");
        }
        sc.alpha_true = vec![0.0; 13];
        assert!(sc.validate().is_ok());
    }

    #[test]
    fn metrics_on_exact_estimates() {
        let sc = SimScenario::table1(2.0, 100, 0);
        let gram = DMatrix::identity(13, 13);
        let recs = vec![record(sc.theta_true(), 0.1, gram.clone()), record(sc.theta_true(), 0.1, gram)];
        let m = compute_metrics(&recs, &sc);
        assert_eq!(m.beta.correct_zeros, 6.0);
        assert_eq!(m.alpha.correct_zeros, 6.0);
        assert_eq!(m.beta.pt, 1.0);
        assert_eq!(m.beta.mse, 0.0);
        assert_eq!(m.pt_joint, 1.0);
        assert_eq!(m.param(Component::Beta, 1).cp, Some(1.0));
        assert_eq!(m.param(Component::Beta, 1).se, Some(0.0));
    }

    #[test]
    fn metrics_hand_worked_fixture() {
        let sc = SimScenario::table1(2.0, 100, 0);
        let t = sc.theta_true();
        let gram = DMatrix::identity(13, 13) * 2.0;
        // Replicate 1: β₁ zeroed (incorrect zero). Replicate 2: β₇ falsely
        // selected at 0.3. Replicate 3: exact but α₁ = 0.8 with SE 0.1.
        let mut r1 = t.clone();
        r1[1] = 0.0;
        let mut r2 = t.clone();
        r2[7] = 0.3;
        let mut r3 = t.clone();
        r3[14] = 0.8;
        let recs = vec![
            record(r1, 0.1, gram.clone()),
            record(r2, 0.1, gram.clone()),
            record(r3, 0.1, gram),
        ];
        let m = compute_metrics(&recs, &sc);
        assert!((m.beta.correct_zeros - 17.0 / 3.0).abs() < 1e-12);
        assert!((m.beta.incorrect_zeros - 1.0 / 3.0).abs() < 1e-12);
        assert!((m.beta.pt - 1.0 / 3.0).abs() < 1e-12);
        // MSE: (1² · 2 + 0.3² · 2 + 0) / 3.
        assert!((m.beta.mse - (2.0 + 0.18) / 3.0).abs() < 1e-12);
        assert!((m.alpha.mse - 0.09 * 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(m.alpha.pt, 1.0);
        assert!((m.pt_joint - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(m.ic_zero_replicates, 2);
        let a1 = m.param(Component::Alpha, 1);
        assert!((a1.cp.unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert!((a1.mean.unwrap() - 0.6).abs() < 1e-12);
        let b1 = m.param(Component::Beta, 1);
        assert!((b1.see.unwrap() - 0.1).abs() < 1e-12);
        assert!((b1.active_rate.unwrap() - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn single_replicate_flags_se() {
        let sc = SimScenario::table1(2.0, 100, 0);
        let m = compute_metrics(&[record(sc.theta_true(), 0.1, DMatrix::identity(13, 13))], &sc);
        assert!(!m.se_defined);
        assert_eq!(m.param(Component::Beta, 1).se, None);
        assert_eq!(m.beta.pt, 1.0);
    }

    #[test]
    fn failed_replicates_are_counted_not_aggregated() {
        let sc = SimScenario::table1(2.0, 100, 0);
        let mut bad = record(sc.theta_true(), 0.1, DMatrix::identity(13, 13));
        bad.theta = None;
        let recs = vec![record(sc.theta_true(), 0.1, DMatrix::identity(13, 13)), bad];
        let m = compute_metrics(&recs, &sc);
        assert_eq!(m.failure_count, 1);
        assert_eq!(m.replicate_count, 2);
        assert_eq!(m.beta.pt, 1.0);
    }

    #[test]
    fn study_is_independent_of_worker_count() {
        let sc = SimScenario::table1(2.0, 120, 5);
        let config = FitConfig {
            telescope: TelescopeConfig {
                steps: 15,
                ..TelescopeConfig::default()
            },
            ..FitConfig::default()
        };
        let a = run_study(&sc, 4, &config, 1).unwrap();
        let b = run_study(&sc, 4, &config, 3).unwrap();
        assert_eq!(a.summary, b.summary);
        assert_eq!(params_csv(&a.summary).unwrap(), params_csv(&b.summary).unwrap());
        let alone = run_replicate(&sc, 2, &config).unwrap();
        assert_eq!(alone, a.records[2]);
    }

    #[test]
    fn presets_and_custom_round_trip() {
        assert!(SimScenario::preset("table1-kappa1.33", 10, 0).unwrap().kappa - 4.0 / 3.0 == 0.0);
        assert!(SimScenario::preset("bogus", 10, 0).is_err());
        let sc = SimScenario::table1(5.0 / 3.0, 200, 1);
        assert_eq!(sc.name, "table1-kappa1.67");
        let js = serde_json::to_string(&sc).unwrap();
        let back: SimScenario = serde_json::from_str(&js).unwrap();
        assert_eq!(back, sc);
        assert!((SimScenario::table1(2.0, 10, 0).nu0_true() - 0.5878).abs() < 1e-4);
    }
}
