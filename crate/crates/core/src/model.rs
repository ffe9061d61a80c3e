//! Location–scale–shape regression model under the SGND.
//!
//! Links: `μᵢ = xᵢᵀβ`, `log sᵢ² = xᵢᵀα`, `log(κ − κ_min) = ν₀`. The penalized
//! objective subtracts `λ/2 · (‖β̃‖₀,ε + ‖α̃‖₀,ε + 3)` from the log-likelihood,
//! where `‖·‖₀,ε` sums `θ²/(θ² + ε²)` over the non-intercept coefficients.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::sgnd::{smooth_abs, NormConstCache, NormConstEval, SgndShape, A_FLOOR, KAPPA_MAX};

/// Linear predictors of the scale are clipped to this range before `exp`.
pub const ETA_CLIP: f64 = 700.0;

/// Response plus design matrix with a leading intercept column.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub y: DVector<f64>,
    /// `n × (p + 1)`; column 0 is all ones.
    pub x: DMatrix<f64>,
    pub names: Vec<String>,
    /// Sample standard deviations (divisor `n − 1`) of the raw covariates.
    pub col_sd: DVector<f64>,
    pub scaled: bool,
}

fn sample_sd(col: impl Iterator<Item = f64> + Clone) -> f64 {
    let n = col.clone().count() as f64;
    let mean = col.clone().sum::<f64>() / n;
    (col.map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
}

impl Dataset {
    /// Builds a dataset from the response and an `n × p` covariate matrix.
    pub fn new(y: DVector<f64>, covariates: DMatrix<f64>, names: Vec<String>) -> Result<Self> {
        let n = y.len();
        let p = covariates.ncols();
        if covariates.nrows() != n {
            return Err(Error::InvalidConfig(format!(
                "response has {n} rows but covariates have {}",
                covariates.nrows()
            )));
        }
        if names.len() != p {
            return Err(Error::InvalidConfig("one name per covariate required".into()));
        }
        if n <= p + 1 {
            return Err(Error::InvalidConfig(format!(
                "need more than {} rows for {p} covariates, got {n}",
                p + 1
            )));
        }
        let mut x = DMatrix::from_element(n, p + 1, 1.0);
        x.columns_mut(1, p).copy_from(&covariates);
        let col_sd = DVector::from_iterator(p, (0..p).map(|j| sample_sd(covariates.column(j).iter().copied())));
        Ok(Self {
            y,
            x,
            names,
            col_sd,
            scaled: false,
        })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    /// Number of covariates, excluding the intercept.
    pub fn p(&self) -> usize {
        self.x.ncols() - 1
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Rows selected by index (with repetition), keeping the column metadata.
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        let x = self.x.select_rows(rows.iter());
        let y = DVector::from_iterator(rows.len(), rows.iter().map(|&i| self.y[i]));
        let p = self.p();
        let col_sd = DVector::from_iterator(p, (0..p).map(|j| sample_sd(x.column(j + 1).iter().copied())));
        Self {
            y,
            x,
            names: self.names.clone(),
            col_sd: if self.scaled { self.col_sd.clone() } else { col_sd },
            scaled: self.scaled,
        }
    }
}

/// Divides every covariate column by its sample standard deviation.
pub fn standardize(data: &Dataset) -> Result<Dataset> {
    if data.scaled {
        return Ok(data.clone());
    }
    let mut out = data.clone();
    for j in 0..data.p() {
        let sd = data.col_sd[j];
        if !(sd > 0.0 && sd.is_finite()) {
            return Err(Error::DegenerateColumn(data.names[j].clone()));
        }
        out.x.column_mut(j + 1).scale_mut(1.0 / sd);
    }
    out.scaled = true;
    Ok(out)
}

/// Parameter vector `θ = (βᵀ, αᵀ, ν₀)ᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct ThetaVector {
    pub beta: DVector<f64>,
    pub alpha: DVector<f64>,
    pub nu0: f64,
}

impl ThetaVector {
    pub fn zeros(p: usize, nu0: f64) -> Self {
        Self {
            beta: DVector::zeros(p + 1),
            alpha: DVector::zeros(p + 1),
            nu0,
        }
    }

    /// Number of covariates `p`.
    pub fn p(&self) -> usize {
        self.beta.len() - 1
    }

    pub fn len(&self) -> usize {
        2 * self.beta.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn kappa(&self, kappa_min: f64) -> f64 {
        kappa_min + self.nu0.exp()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.len());
        v.extend(self.beta.iter());
        v.extend(self.alpha.iter());
        v.push(self.nu0);
        v
    }

    pub fn from_slice(v: &[f64]) -> Self {
        assert!(v.len() % 2 == 1 && v.len() >= 3, "theta length must be 2(p+1)+1");
        let q = (v.len() - 1) / 2;
        Self {
            beta: DVector::from_column_slice(&v[..q]),
            alpha: DVector::from_column_slice(&v[q..2 * q]),
            nu0: v[2 * q],
        }
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        let b = (&self.beta - &other.beta).amax();
        let a = (&self.alpha - &other.alpha).amax();
        b.max(a).max((self.nu0 - other.nu0).abs())
    }
}

/// Divides non-intercept coefficients by the covariate standard deviations,
/// mapping estimates on standardized covariates back to the raw scale.
pub fn unscale_theta(theta: &ThetaVector, col_sd: &DVector<f64>) -> ThetaVector {
    let mut out = theta.clone();
    for j in 0..col_sd.len() {
        out.beta[j + 1] /= col_sd[j];
        out.alpha[j + 1] /= col_sd[j];
    }
    out
}

/// Inverse of [`unscale_theta`].
pub fn scale_theta(theta: &ThetaVector, col_sd: &DVector<f64>) -> ThetaVector {
    let mut out = theta.clone();
    for j in 0..col_sd.len() {
        out.beta[j + 1] *= col_sd[j];
        out.alpha[j + 1] *= col_sd[j];
    }
    out
}

/// Information criterion choice for the penalty weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Criterion {
    Bic,
    Aic,
    Lambda(f64),
}

impl Criterion {
    pub fn lambda(&self, n: usize) -> f64 {
        match *self {
            Criterion::Bic => (n as f64).ln(),
            Criterion::Aic => 2.0,
            Criterion::Lambda(l) => l,
        }
    }
}

/// Penalty weight and L0 smoothing. Intercepts are never penalized.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PenaltySpec {
    pub lambda: f64,
    pub epsilon: f64,
}

impl PenaltySpec {
    pub fn new(lambda: f64, epsilon: f64) -> Result<Self> {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::InvalidConfig(format!("lambda must be >= 0, got {lambda}")));
        }
        if !(epsilon > 0.0) {
            return Err(Error::InvalidConfig(format!("epsilon must be > 0, got {epsilon}")));
        }
        Ok(Self { lambda, epsilon })
    }

    pub fn with_epsilon(self, epsilon: f64) -> Self {
        Self { epsilon, ..self }
    }

    /// Penalization mask over `p + 1` coefficients: false at the intercept.
    pub fn penalize_mask(p: usize) -> Vec<bool> {
        let mut m = vec![true; p + 1];
        m[0] = false;
        m
    }
}

/// Smooth L0 term `θ²/(θ² + ε²)` with its first and second derivatives.
#[inline]
pub fn phi_eps(theta: f64, epsilon: f64) -> (f64, f64, f64) {
    let t2 = theta * theta;
    let e2 = epsilon * epsilon;
    let d = t2 + e2;
    (t2 / d, 2.0 * theta * e2 / (d * d), 2.0 * e2 * (e2 - 3.0 * t2) / (d * d * d))
}

/// `Σ_{j≥1} φ_ε(θ_j)`.
pub fn smooth_l0(coef: &DVector<f64>, epsilon: f64) -> f64 {
    coef.iter().skip(1).map(|&c| phi_eps(c, epsilon).0).sum()
}

/// Gradient pieces of the penalized objective.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreBlocks {
    pub grad_beta: DVector<f64>,
    pub grad_alpha: DVector<f64>,
    pub grad_nu: f64,
    pub z_beta: DVector<f64>,
    pub z_alpha: DVector<f64>,
    pub z_nu: DVector<f64>,
    pub xi_beta: DVector<f64>,
    pub xi_alpha: DVector<f64>,
}

impl ScoreBlocks {
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.grad_beta.iter().copied().collect();
        v.extend(self.grad_alpha.iter());
        v.push(self.grad_nu);
        v
    }
}

/// Weights and assembled information matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct InfoBlocks {
    pub w_beta: DVector<f64>,
    pub w_alpha: DVector<f64>,
    pub w_nu: DVector<f64>,
    pub w_beta_alpha: DVector<f64>,
    pub w_beta_nu: DVector<f64>,
    pub w_alpha_nu: DVector<f64>,
    pub sigma_beta: DVector<f64>,
    pub sigma_alpha: DVector<f64>,
    /// Unpenalized observed information `I₀`.
    pub unpenalized: DMatrix<f64>,
    /// `I = I₀ + λ/2 · diag(Σ_β, Σ_α, 0)`.
    pub assembled_full: DMatrix<f64>,
    /// `assembled_full` with the β/α/ν cross blocks zeroed.
    pub assembled_block_diag: DMatrix<f64>,
}

/// Per-observation derivative terms shared by the score and the information.
#[derive(Debug, Clone)]
pub(crate) struct RowTerms {
    pub z_beta: DVector<f64>,
    pub z_alpha: DVector<f64>,
    pub z_nu: DVector<f64>,
    pub w_beta: DVector<f64>,
    pub w_alpha: DVector<f64>,
    pub w_nu: DVector<f64>,
    pub w_beta_alpha: Option<DVector<f64>>,
    pub w_beta_nu: Option<DVector<f64>>,
    pub w_alpha_nu: Option<DVector<f64>>,
}

/// Block system for one Newton step: gradients and the block-diagonal
/// information pieces.
#[derive(Debug, Clone)]
pub struct NewtonSystem {
    pub score: ScoreBlocks,
    pub h_beta: DMatrix<f64>,
    pub h_alpha: DMatrix<f64>,
    pub h_nu: f64,
}

/// Data, penalty and smoothing bundled with a per-instance normalizing
/// constant cache.
#[derive(Debug)]
pub struct Problem<'a> {
    pub data: &'a Dataset,
    pub penalty: PenaltySpec,
    pub tau: f64,
    pub kappa_min: f64,
    cache: NormConstCache,
    clip_hit: std::cell::Cell<bool>,
}

impl<'a> Problem<'a> {
    pub fn new(data: &'a Dataset, penalty: PenaltySpec, tau: f64, kappa_min: f64) -> Self {
        Self {
            data,
            penalty,
            tau,
            kappa_min,
            cache: NormConstCache::new(),
            clip_hit: std::cell::Cell::new(false),
        }
    }

    pub fn set_epsilon(&mut self, epsilon: f64) {
        self.penalty.epsilon = epsilon;
    }

    /// Whether any scale predictor has been clipped so far.
    pub fn clip_hit(&self) -> bool {
        self.clip_hit.get()
    }

    pub fn shape(&self, theta: &ThetaVector) -> Result<SgndShape> {
        let kappa = theta.kappa(self.kappa_min);
        if !(kappa > self.kappa_min && kappa <= KAPPA_MAX * (1.0 + 1e-12)) {
            return Err(Error::InvalidConfig(format!(
                "kappa {kappa} outside ({}, {KAPPA_MAX}]",
                self.kappa_min
            )));
        }
        SgndShape::new(kappa.min(KAPPA_MAX), self.tau, self.kappa_min)
    }

    fn norm_const(&self, theta: &ThetaVector) -> Result<(SgndShape, NormConstEval)> {
        let shape = self.shape(theta)?;
        Ok((shape, self.cache.get(&shape)?))
    }

    fn predictors(&self, theta: &ThetaVector) -> (DVector<f64>, DVector<f64>) {
        let mu = &self.data.x * &theta.beta;
        let mut eta = &self.data.x * &theta.alpha;
        for e in eta.iter_mut() {
            if e.abs() > ETA_CLIP {
                self.clip_hit.set(true);
                *e = e.clamp(-ETA_CLIP, ETA_CLIP);
            }
        }
        (mu, eta)
    }

    pub fn loglik(&self, theta: &ThetaVector) -> Result<f64> {
        let (shape, nc) = self.norm_const(theta)?;
        let (mu, eta) = self.predictors(theta);
        let kappa = shape.kappa();
        let tau = self.tau;
        let mut sum = 0.0;
        for i in 0..self.data.n() {
            let s = (0.5 * eta[i]).exp();
            let z = (self.data.y[i] - mu[i]) / s;
            let a = smooth_abs(z, tau);
            sum += 0.5 * eta[i] + if kappa == 1.0 { a } else { a.powf(kappa) };
        }
        let ll = self.data.n() as f64 * nc.log_c - sum;
        if !ll.is_finite() {
            return Err(Error::NonFiniteLikelihood);
        }
        Ok(ll)
    }

    pub fn penalty_value(&self, theta: &ThetaVector) -> f64 {
        let eps = self.penalty.epsilon;
        0.5 * self.penalty.lambda * (smooth_l0(&theta.beta, eps) + smooth_l0(&theta.alpha, eps) + 3.0)
    }

    pub fn sic(&self, theta: &ThetaVector) -> Result<f64> {
        Ok(self.loglik(theta)? - self.penalty_value(theta))
    }

    pub(crate) fn row_terms(&self, theta: &ThetaVector, with_cross: bool) -> Result<RowTerms> {
        let (shape, nc) = self.norm_const(theta)?;
        let (mu, eta) = self.predictors(theta);
        let n = self.data.n();
        let kappa = shape.kappa();
        let k = kappa - self.kappa_min;
        let tau = self.tau;

        let mut t = RowTerms {
            z_beta: DVector::zeros(n),
            z_alpha: DVector::zeros(n),
            z_nu: DVector::zeros(n),
            w_beta: DVector::zeros(n),
            w_alpha: DVector::zeros(n),
            w_nu: DVector::zeros(n),
            w_beta_alpha: with_cross.then(|| DVector::zeros(n)),
            w_beta_nu: with_cross.then(|| DVector::zeros(n)),
            w_alpha_nu: with_cross.then(|| DVector::zeros(n)),
        };
        for i in 0..n {
            let s = (0.5 * eta[i]).exp();
            let z = (self.data.y[i] - mu[i]) / s;
            let a = smooth_abs(z, tau).max(A_FLOOR);
            let ap = a + tau; // √(z² + τ²)
            let log_a = a.ln();
            let a_km1 = a.powf(kappa - 1.0);
            let a_k = a_km1 * a;
            // g'(z) = d·z, with d = κ a^{κ-1} / (a + τ)
            let d = kappa * a_km1 / ap;
            let z2 = z * z;
            let g2 = d + z2 * kappa * a_km1 * ((kappa - 1.0) / (a * ap * ap) - 1.0 / (ap * ap * ap));
            let inv_s = 1.0 / s;

            t.z_beta[i] = d * z * inv_s;
            t.z_alpha[i] = 0.5 * d * z2 - 0.5;
            t.z_nu[i] = nc.dlogc_dnu - k * a_k * log_a;

            t.w_beta[i] = g2 * inv_s * inv_s;
            t.w_alpha[i] = 0.25 * (g2 + d) * z2;
            t.w_nu[i] = -nc.d2logc_dnu2 + k * a_k * log_a * (1.0 + k * log_a);

            if with_cross {
                let cross_nu = k * a_km1 * (1.0 + kappa * log_a) / ap;
                t.w_beta_alpha.as_mut().unwrap()[i] = 0.5 * (g2 + d) * z * inv_s;
                t.w_beta_nu.as_mut().unwrap()[i] = -cross_nu * z * inv_s;
                t.w_alpha_nu.as_mut().unwrap()[i] = -0.5 * cross_nu * z2;
            }
        }
        Ok(t)
    }

    fn score_from_terms(&self, theta: &ThetaVector, t: &RowTerms) -> ScoreBlocks {
        let eps = self.penalty.epsilon;
        let half_lambda = 0.5 * self.penalty.lambda;
        let xi = |c: &DVector<f64>| {
            DVector::from_iterator(
                c.len(),
                c.iter().enumerate().map(|(j, &v)| if j == 0 { 0.0 } else { phi_eps(v, eps).1 }),
            )
        };
        let xi_beta = xi(&theta.beta);
        let xi_alpha = xi(&theta.alpha);
        let x = &self.data.x;
        ScoreBlocks {
            grad_beta: x.tr_mul(&t.z_beta) - &xi_beta * half_lambda,
            grad_alpha: x.tr_mul(&t.z_alpha) - &xi_alpha * half_lambda,
            grad_nu: t.z_nu.sum(),
            z_beta: t.z_beta.clone(),
            z_alpha: t.z_alpha.clone(),
            z_nu: t.z_nu.clone(),
            xi_beta,
            xi_alpha,
        }
    }

    pub fn score(&self, theta: &ThetaVector) -> Result<ScoreBlocks> {
        let t = self.row_terms(theta, false)?;
        Ok(self.score_from_terms(theta, &t))
    }

    fn sigma(&self, coef: &DVector<f64>) -> DVector<f64> {
        let eps = self.penalty.epsilon;
        DVector::from_iterator(
            coef.len(),
            coef.iter().enumerate().map(|(j, &v)| if j == 0 { 0.0 } else { phi_eps(v, eps).2 }),
        )
    }

    /// Gradient plus the diagonal blocks of the penalized information.
    pub fn newton_system(&self, theta: &ThetaVector) -> Result<NewtonSystem> {
        let t = self.row_terms(theta, false)?;
        let score = self.score_from_terms(theta, &t);
        let x = &self.data.x;
        let half_lambda = 0.5 * self.penalty.lambda;
        let mut h_beta = weighted_gram(x, &t.w_beta);
        let mut h_alpha = weighted_gram(x, &t.w_alpha);
        let sb = self.sigma(&theta.beta);
        let sa = self.sigma(&theta.alpha);
        for j in 0..sb.len() {
            h_beta[(j, j)] += half_lambda * sb[j];
            h_alpha[(j, j)] += half_lambda * sa[j];
        }
        Ok(NewtonSystem {
            score,
            h_beta,
            h_alpha,
            h_nu: t.w_nu.sum(),
        })
    }

    pub fn info_blocks(&self, theta: &ThetaVector) -> Result<InfoBlocks> {
        let t = self.row_terms(theta, true)?;
        let x = &self.data.x;
        let q = x.ncols();
        let dim = 2 * q + 1;
        let w_ba = t.w_beta_alpha.clone().unwrap();
        let w_bn = t.w_beta_nu.clone().unwrap();
        let w_an = t.w_alpha_nu.clone().unwrap();

        let mut i0 = DMatrix::zeros(dim, dim);
        i0.view_mut((0, 0), (q, q)).copy_from(&weighted_gram(x, &t.w_beta));
        i0.view_mut((q, q), (q, q)).copy_from(&weighted_gram(x, &t.w_alpha));
        let ba = weighted_gram(x, &w_ba);
        i0.view_mut((0, q), (q, q)).copy_from(&ba);
        i0.view_mut((q, 0), (q, q)).copy_from(&ba.transpose());
        let bn = x.tr_mul(&w_bn);
        let an = x.tr_mul(&w_an);
        for j in 0..q {
            i0[(j, 2 * q)] = bn[j];
            i0[(2 * q, j)] = bn[j];
            i0[(q + j, 2 * q)] = an[j];
            i0[(2 * q, q + j)] = an[j];
        }
        i0[(2 * q, 2 * q)] = t.w_nu.sum();

        let sigma_beta = self.sigma(&theta.beta);
        let sigma_alpha = self.sigma(&theta.alpha);
        let half_lambda = 0.5 * self.penalty.lambda;
        let mut full = i0.clone();
        for j in 0..q {
            full[(j, j)] += half_lambda * sigma_beta[j];
            full[(q + j, q + j)] += half_lambda * sigma_alpha[j];
        }
        let mut block = full.clone();
        for r in 0..dim {
            for c in 0..dim {
                if block_of(r, q) != block_of(c, q) {
                    block[(r, c)] = 0.0;
                }
            }
        }
        Ok(InfoBlocks {
            w_beta: t.w_beta,
            w_alpha: t.w_alpha,
            w_nu: t.w_nu,
            w_beta_alpha: w_ba,
            w_beta_nu: w_bn,
            w_alpha_nu: w_an,
            sigma_beta,
            sigma_alpha,
            unpenalized: i0,
            assembled_full: full,
            assembled_block_diag: block,
        })
    }

    /// Standardized residuals `(yᵢ − μ̂ᵢ)/ŝᵢ`.
    pub fn standardized_residuals(&self, theta: &ThetaVector) -> DVector<f64> {
        let (mu, eta) = self.predictors(theta);
        DVector::from_iterator(
            self.data.n(),
            (0..self.data.n()).map(|i| (self.data.y[i] - mu[i]) / (0.5 * eta[i]).exp()),
        )
    }
}

fn block_of(index: usize, q: usize) -> usize {
    if index < q {
        0
    } else if index < 2 * q {
        1
    } else {
        2
    }
}

/// `Xᵀ diag(w) X`.
pub fn weighted_gram(x: &DMatrix<f64>, w: &DVector<f64>) -> DMatrix<f64> {
    let mut wx = x.clone();
    for mut col in wx.column_iter_mut() {
        col.component_mul_assign(w);
    }
    x.tr_mul(&wx)
}

pub fn loglik(data: &Dataset, theta: &ThetaVector, tau: f64, kappa_min: f64) -> Result<f64> {
    Problem::new(data, PenaltySpec { lambda: 0.0, epsilon: 1.0 }, tau, kappa_min).loglik(theta)
}

pub fn sic_objective(
    data: &Dataset,
    theta: &ThetaVector,
    penalty: PenaltySpec,
    tau: f64,
    kappa_min: f64,
) -> Result<f64> {
    Problem::new(data, penalty, tau, kappa_min).sic(theta)
}

pub fn score(
    data: &Dataset,
    theta: &ThetaVector,
    penalty: PenaltySpec,
    tau: f64,
    kappa_min: f64,
) -> Result<ScoreBlocks> {
    Problem::new(data, penalty, tau, kappa_min).score(theta)
}

pub fn info_blocks(
    data: &Dataset,
    theta: &ThetaVector,
    penalty: PenaltySpec,
    tau: f64,
    kappa_min: f64,
) -> Result<InfoBlocks> {
    Problem::new(data, penalty, tau, kappa_min).info_blocks(theta)
}
