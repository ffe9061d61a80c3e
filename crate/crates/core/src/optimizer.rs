//! Block Newton ("RS") solver and the ε-telescope driver.
//!
//! Each Newton step solves the β, α and ν systems separately with the
//! cross-parameter blocks of the information set to zero, then halves the
//! step until the penalized objective does not decrease.

use std::time::Instant;

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::{sandwich_cov, CovarianceResult};
use crate::model::{standardize, unscale_theta, Criterion, Dataset, PenaltySpec, Problem, ThetaVector};
use crate::sgnd::KAPPA_MAX;

/// Lower clamp on `ν₀`; `κ` then stays at least `κ_min + e^{-10}`.
pub const NU_MIN: f64 = -10.0;
pub const MAX_HALVINGS: usize = 20;
const MAX_RIDGE_TRIES: usize = 16;

/// Decreasing smoothing schedule and solver tolerances.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TelescopeConfig {
    pub eps_start: f64,
    pub eps_end: f64,
    pub steps: usize,
    pub omega: f64,
    pub zero_tol: f64,
    pub max_inner_iter: usize,
    /// Start each step from the previous step's estimate. When false every
    /// step restarts from the initial values.
    pub warm_start: bool,
}

impl Default for TelescopeConfig {
    fn default() -> Self {
        Self {
            eps_start: 10.0,
            eps_end: 1e-4,
            steps: 100,
            omega: 1e-8,
            zero_tol: 1e-5,
            max_inner_iter: 1000,
            warm_start: true,
        }
    }
}

impl TelescopeConfig {
    pub fn new(eps_start: f64, eps_end: f64, steps: usize) -> Result<Self> {
        let c = Self {
            eps_start,
            eps_end,
            steps,
            ..Self::default()
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eps_start > self.eps_end && self.eps_end > 0.0 && self.eps_start.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "telescope needs eps_start > eps_end > 0, got {} and {}",
                self.eps_start, self.eps_end
            )));
        }
        if self.steps < 2 {
            return Err(Error::InvalidConfig("telescope needs at least 2 steps".into()));
        }
        if !(self.omega > 0.0) || !(self.zero_tol >= 0.0) || self.max_inner_iter == 0 {
            return Err(Error::InvalidConfig("invalid solver tolerances".into()));
        }
        Ok(())
    }

    pub fn decay(&self) -> f64 {
        (self.eps_end / self.eps_start).powf(1.0 / (self.steps - 1) as f64)
    }

    /// `ε_t = eps_start · r^{t−1}` for `t = 1..T`, with the last entry exact.
    pub fn epsilons(&self) -> Vec<f64> {
        let log_r = self.decay().ln();
        (0..self.steps)
            .map(|t| {
                if t + 1 == self.steps {
                    self.eps_end
                } else {
                    self.eps_start * (t as f64 * log_r).exp()
                }
            })
            .collect()
    }
}

/// Multi-parameter (location and scale on covariates) or single-parameter
/// (location only) regression.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Mpr,
    Spr,
}

/// Error family: free shape, or shape frozen at the normal or Laplace value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    Sgnd,
    NormalFixed,
    LaplaceFixed,
}

impl Family {
    pub fn fixed_nu(&self, kappa_min: f64) -> Option<f64> {
        match self {
            Family::Sgnd => None,
            Family::NormalFixed => Some((2.0 - kappa_min).ln()),
            Family::LaplaceFixed => Some((1.0 - kappa_min).ln()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitConfig {
    pub tau: f64,
    pub kappa_min: f64,
    pub criterion: Criterion,
    pub telescope: TelescopeConfig,
    pub mode: Mode,
    /// Frozen `ν₀`; removes the shape from the Newton system.
    pub fixed_nu: Option<f64>,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            tau: 0.15,
            kappa_min: 0.2,
            criterion: Criterion::Bic,
            telescope: TelescopeConfig::default(),
            mode: Mode::Mpr,
            fixed_nu: None,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        self.telescope.validate()?;
        if !(self.tau > 0.0) || !(self.kappa_min > 0.0) || self.kappa_min >= KAPPA_MAX {
            return Err(Error::InvalidConfig("tau and kappa_min must be positive".into()));
        }
        if let Some(nu) = self.fixed_nu {
            if !nu.is_finite() || nu > nu_max(self.kappa_min) {
                return Err(Error::InvalidConfig(format!("fixed nu0 {nu} out of range")));
            }
        }
        Ok(())
    }
}

fn nu_max(kappa_min: f64) -> f64 {
    (KAPPA_MAX - kappa_min).ln()
}

/// Which parameters the solver may move. Fixed entries keep their value
/// (zero for excluded coefficients).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FreeMask {
    pub beta: Vec<bool>,
    pub alpha: Vec<bool>,
    pub nu: bool,
}

impl FreeMask {
    pub fn all(p: usize) -> Self {
        Self {
            beta: vec![true; p + 1],
            alpha: vec![true; p + 1],
            nu: true,
        }
    }

    pub fn for_config(p: usize, config: &FitConfig) -> Self {
        let mut m = Self::all(p);
        if config.mode == Mode::Spr {
            m.alpha.iter_mut().skip(1).for_each(|f| *f = false);
        }
        m.nu = config.fixed_nu.is_none();
        m
    }

    pub fn flat(&self) -> Vec<bool> {
        let mut v = self.beta.clone();
        v.extend(&self.alpha);
        v.push(self.nu);
        v
    }

    fn apply(&self, theta: &mut ThetaVector) {
        for (j, &f) in self.beta.iter().enumerate() {
            if !f {
                theta.beta[j] = 0.0;
            }
        }
        for (j, &f) in self.alpha.iter().enumerate() {
            if !f {
                theta.alpha[j] = 0.0;
            }
        }
    }
}

fn solve_spd(h: &DMatrix<f64>, g: &DVector<f64>, block: &'static str) -> Result<(DVector<f64>, usize)> {
    if let Some(ch) = Cholesky::new(h.clone()) {
        return Ok((ch.solve(g), 0));
    }
    let n = h.nrows();
    let scale = (h.diagonal().iter().map(|d| d.abs()).sum::<f64>() / n as f64).max(f64::MIN_POSITIVE);
    let mut ridge = 1e-8 * scale;
    for tries in 1..=MAX_RIDGE_TRIES {
        let mut hr = h.clone();
        for i in 0..n {
            hr[(i, i)] += ridge;
        }
        if let Some(ch) = Cholesky::new(hr) {
            let d = ch.solve(g);
            if d.iter().all(|v| v.is_finite()) {
                return Ok((d, tries));
            }
        }
        ridge *= 10.0;
    }
    Err(Error::BlockSolveFailure(block))
}

/// Solves one block restricted to the free coordinates; fixed ones get 0.
fn solve_block(
    h: &DMatrix<f64>,
    g: &DVector<f64>,
    free: &[bool],
    block: &'static str,
) -> Result<(DVector<f64>, usize)> {
    let idx: Vec<usize> = (0..free.len()).filter(|&j| free[j]).collect();
    let mut full = DVector::zeros(free.len());
    if idx.is_empty() {
        return Ok((full, 0));
    }
    let hf = h.select_rows(idx.iter()).select_columns(idx.iter());
    let gf = DVector::from_iterator(idx.len(), idx.iter().map(|&j| g[j]));
    let (d, retries) = solve_spd(&hf, &gf, block)?;
    for (k, &j) in idx.iter().enumerate() {
        full[j] = d[k];
    }
    Ok((full, retries))
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StepReport {
    pub halvings: usize,
    /// Step-halving exhausted: the iterate did not move.
    pub zero_step: bool,
    pub ridge_retries: usize,
    pub nu_clamped: bool,
    pub objective: f64,
    pub max_change: f64,
}

/// One safeguarded block Newton step. `objective` is the penalized
/// objective at `theta` if already known. Steps no larger than `tol` that
/// fail to ascend are treated as converged rather than halved.
pub fn newton_step(
    problem: &Problem,
    theta: &ThetaVector,
    mask: &FreeMask,
    objective: Option<f64>,
    tol: f64,
) -> Result<(ThetaVector, StepReport)> {
    let f0 = match objective {
        Some(f) => f,
        None => problem.sic(theta)?,
    };
    let sys = problem.newton_system(theta)?;
    let (d_beta, rb) = solve_block(&sys.h_beta, &sys.score.grad_beta, &mask.beta, "beta")?;
    let (d_alpha, ra) = solve_block(&sys.h_alpha, &sys.score.grad_alpha, &mask.alpha, "alpha")?;
    let (d_nu, rn) = if mask.nu {
        let (d, r) = solve_spd(
            &DMatrix::from_element(1, 1, sys.h_nu),
            &DVector::from_element(1, sys.score.grad_nu),
            "nu",
        )?;
        (d[0], r)
    } else {
        (0.0, 0)
    };
    let mut report = StepReport {
        ridge_retries: rb + ra + rn,
        objective: f0,
        ..StepReport::default()
    };

    let hi = nu_max(problem.kappa_min);
    let mut t = 1.0;
    for halvings in 0..=MAX_HALVINGS {
        let mut cand = theta.clone();
        cand.beta.axpy(t, &d_beta, 1.0);
        cand.alpha.axpy(t, &d_alpha, 1.0);
        let nu = theta.nu0 + t * d_nu;
        cand.nu0 = nu.clamp(NU_MIN, hi);
        let clamped = cand.nu0 != nu;
        let change = cand.max_abs_diff(theta);
        if let Ok(f) = problem.sic(&cand) {
            if f >= f0 {
                report.halvings = halvings;
                report.nu_clamped = clamped;
                report.objective = f;
                report.max_change = change;
                return Ok((cand, report));
            }
        }
        if change <= tol {
            report.halvings = halvings;
            return Ok((theta.clone(), report));
        }
        t *= 0.5;
    }
    report.halvings = MAX_HALVINGS;
    report.zero_step = true;
    Ok((theta.clone(), report))
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct InnerReport {
    pub iterations: usize,
    pub converged: bool,
    pub halvings: usize,
    pub zero_steps: usize,
    pub ridge_retries: usize,
    pub nu_clamped: bool,
    /// Objective at the start and after every iteration.
    pub trace: Vec<f64>,
}

/// Newton iterations at a fixed ε until `max|Δθ| ≤ ω`. Hitting the
/// iteration cap is reported, not raised.
pub fn fit_at_eps(
    problem: &Problem,
    theta0: &ThetaVector,
    mask: &FreeMask,
    config: &TelescopeConfig,
) -> Result<(ThetaVector, InnerReport)> {
    let mut theta = theta0.clone();
    let mut f = problem.sic(&theta)?;
    let mut rep = InnerReport {
        trace: vec![f],
        ..InnerReport::default()
    };
    while rep.iterations < config.max_inner_iter {
        let (next, step) = newton_step(problem, &theta, mask, Some(f), config.omega)?;
        rep.iterations += 1;
        rep.halvings += step.halvings;
        rep.ridge_retries += step.ridge_retries;
        rep.nu_clamped |= step.nu_clamped;
        f = step.objective;
        rep.trace.push(f);
        theta = next;
        if step.zero_step {
            rep.zero_steps += 1;
            break;
        }
        if step.max_change <= config.omega {
            rep.converged = true;
            break;
        }
    }
    Ok((theta, rep))
}

/// Zeroes penalized entries with `|θ_j| < zero_tol`; intercepts and `ν₀`
/// are left alone.
pub fn threshold_zero(theta: &ThetaVector, zero_tol: f64) -> ThetaVector {
    let mut out = theta.clone();
    for c in [&mut out.beta, &mut out.alpha] {
        for v in c.iter_mut().skip(1) {
            if v.abs() < zero_tol {
                *v = 0.0;
            }
        }
    }
    out
}

/// OLS location, log residual variance for the scale intercept and a
/// normal-like shape. Only the free location columns enter the OLS solve.
pub fn initialize(data: &Dataset, mask: &FreeMask, kappa_min: f64) -> Result<ThetaVector> {
    let idx: Vec<usize> = (0..mask.beta.len()).filter(|&j| mask.beta[j]).collect();
    let x = data.x.select_columns(idx.iter());
    let xtx = x.tr_mul(&x);
    let xty = x.tr_mul(&data.y);
    let coef = match Cholesky::new(xtx.clone()) {
        Some(ch) => ch.solve(&xty),
        None => {
            let k = xtx.nrows();
            let mut r = xtx.clone();
            let ridge = 1e-8 * xtx.trace() / k as f64;
            for i in 0..k {
                r[(i, i)] += ridge;
            }
            Cholesky::new(r).ok_or(Error::SingularDesign)?.solve(&xty)
        }
    };
    if coef.iter().any(|c| !c.is_finite()) {
        return Err(Error::SingularDesign);
    }
    let p = data.p();
    let mut theta = ThetaVector::zeros(p, (2.0 - kappa_min).ln());
    for (k, &j) in idx.iter().enumerate() {
        theta.beta[j] = coef[k];
    }
    let resid = &data.y - &data.x * &theta.beta;
    let dof = (data.n() as f64 - idx.len() as f64).max(1.0);
    let q2 = (resid.norm_squared() / dof).max(1e-12);
    theta.alpha[0] = q2.ln();
    Ok(theta)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FitDiagnostics {
    pub iterations: Vec<usize>,
    pub converged: Vec<bool>,
    pub halvings: usize,
    pub zero_steps: usize,
    pub ridge_retries: usize,
    pub nu_clamped: bool,
    pub eta_clipped: bool,
    pub wall_time_secs: f64,
}

impl FitDiagnostics {
    pub fn total_iterations(&self) -> usize {
        self.iterations.iter().sum()
    }

    pub fn nonconverged_steps(&self) -> usize {
        self.converged.iter().filter(|c| !**c).count()
    }
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub names: Vec<String>,
    pub n: usize,
    pub config: FitConfig,
    pub mask: FreeMask,
    pub col_sd: DVector<f64>,
    /// Thresholded estimates on standardized covariates.
    pub theta_scaled: ThetaVector,
    pub theta_original: ThetaVector,
    /// Non-zero penalized coefficients, one flag per covariate.
    pub active_beta: Vec<bool>,
    pub active_alpha: Vec<bool>,
    pub kappa_hat: f64,
    pub loglik: f64,
    pub bic: f64,
    pub df: usize,
    pub covariance: Option<CovarianceResult>,
    pub breakdown_flag: bool,
    pub epsilons: Vec<f64>,
    /// Penalized objective at the end of each telescope step.
    pub sic_trace: Vec<f64>,
    /// Standardized estimates after each telescope step; the last row is
    /// the thresholded final estimate.
    pub path: Vec<Vec<f64>>,
    pub diagnostics: FitDiagnostics,
}

impl FitResult {
    /// Flat mask over θ of parameters entering inference.
    pub fn active_flat(&self) -> Vec<bool> {
        active_flat(&self.theta_scaled, &self.mask)
    }

    pub fn se_original(&self) -> Vec<Option<f64>> {
        let len = self.theta_scaled.len();
        match &self.covariance {
            Some(c) => c.expand(len, false),
            None => vec![None; len],
        }
    }

    pub fn se_scaled(&self) -> Vec<Option<f64>> {
        let len = self.theta_scaled.len();
        match &self.covariance {
            Some(c) => c.expand(len, true),
            None => vec![None; len],
        }
    }

    pub fn nu0_se(&self) -> Option<f64> {
        self.se_original()[self.theta_scaled.len() - 1]
    }
}

pub(crate) fn active_flat(theta: &ThetaVector, mask: &FreeMask) -> Vec<bool> {
    let mut v: Vec<bool> = theta
        .beta
        .iter()
        .zip(&mask.beta)
        .enumerate()
        .map(|(j, (&b, &f))| f && (j == 0 || b != 0.0))
        .collect();
    v.extend(
        theta
            .alpha
            .iter()
            .zip(&mask.alpha)
            .enumerate()
            .map(|(j, (&a, &f))| f && (j == 0 || a != 0.0)),
    );
    v.push(mask.nu);
    v
}

/// Fits with the SIC telescope: standardize, initialize, run warm-started
/// Newton fits down the ε schedule, threshold, then compute sandwich
/// standard errors and unscale.
pub fn telescope_fit(data: &Dataset, config: &FitConfig) -> Result<FitResult> {
    let mask = FreeMask::for_config(data.p(), config);
    fit_with(data, config, &mask, None, true)
}

/// General entry point: explicit free mask and optional warm start given on
/// the standardized scale.
pub fn fit_with(
    data: &Dataset,
    config: &FitConfig,
    mask: &FreeMask,
    warm: Option<&ThetaVector>,
    with_covariance: bool,
) -> Result<FitResult> {
    config.validate()?;
    let started = Instant::now();
    let scaled = standardize(data)?;
    let p = scaled.p();
    if mask.beta.len() != p + 1 || mask.alpha.len() != p + 1 {
        return Err(Error::InvalidConfig("mask length does not match design".into()));
    }
    let lambda = config.criterion.lambda(scaled.n());
    let epsilons = config.telescope.epsilons();
    let mut problem = Problem::new(&scaled, PenaltySpec::new(lambda, epsilons[0])?, config.tau, config.kappa_min);

    let mut theta0 = match warm {
        Some(w) => w.clone(),
        None => initialize(&scaled, mask, config.kappa_min)?,
    };
    mask.apply(&mut theta0);
    if let Some(nu) = config.fixed_nu {
        theta0.nu0 = nu;
    } else {
        theta0.nu0 = theta0.nu0.clamp(NU_MIN, nu_max(config.kappa_min));
    }

    let mut diag = FitDiagnostics::default();
    let mut path = Vec::with_capacity(epsilons.len());
    let mut sic_trace = Vec::with_capacity(epsilons.len());
    let mut theta = theta0.clone();
    for (t, &eps) in epsilons.iter().enumerate() {
        problem.set_epsilon(eps);
        let start = if config.telescope.warm_start { &theta } else { &theta0 };
        let (next, rep) = fit_at_eps(&problem, start, mask, &config.telescope).map_err(|e| Error::Telescope {
            step: t + 1,
            source: Box::new(e),
        })?;
        theta = next;
        diag.iterations.push(rep.iterations);
        diag.converged.push(rep.converged);
        diag.halvings += rep.halvings;
        diag.zero_steps += rep.zero_steps;
        diag.ridge_retries += rep.ridge_retries;
        diag.nu_clamped |= rep.nu_clamped;
        sic_trace.push(*rep.trace.last().unwrap());
        path.push(theta.to_vec());
    }

    let theta_hat = threshold_zero(&theta, config.telescope.zero_tol);
    *path.last_mut().unwrap() = theta_hat.to_vec();
    let loglik = problem.loglik(&theta_hat)?;
    let active = active_flat(&theta_hat, mask);
    let df = (1..=p).filter(|&j| theta_hat.beta[j] != 0.0).count()
        + (1..=p).filter(|&j| theta_hat.alpha[j] != 0.0).count()
        + 3;
    let bic = -2.0 * loglik + (scaled.n() as f64).ln() * df as f64;

    let (covariance, breakdown_flag) = if with_covariance {
        let final_pen = PenaltySpec::new(lambda, *epsilons.last().unwrap())?;
        match sandwich_cov(&scaled, &theta_hat, final_pen, config.tau, config.kappa_min, &active) {
            Ok(c) => {
                let flag = c.breakdown_flag;
                (Some(c), flag)
            }
            Err(Error::SingularInformation) => (None, true),
            Err(e) => return Err(e),
        }
    } else {
        (None, false)
    };
    diag.eta_clipped = problem.clip_hit();
    diag.wall_time_secs = started.elapsed().as_secs_f64();

    Ok(FitResult {
        names: scaled.names.clone(),
        n: scaled.n(),
        config: *config,
        mask: mask.clone(),
        col_sd: scaled.col_sd.clone(),
        theta_original: unscale_theta(&theta_hat, &scaled.col_sd),
        active_beta: (1..=p).map(|j| theta_hat.beta[j] != 0.0).collect(),
        active_alpha: (1..=p).map(|j| theta_hat.alpha[j] != 0.0).collect(),
        kappa_hat: theta_hat.kappa(config.kappa_min),
        theta_scaled: theta_hat,
        loglik,
        bic,
        df,
        covariance,
        breakdown_flag,
        epsilons,
        sic_trace,
        path,
        diagnostics: diag,
    })
}
