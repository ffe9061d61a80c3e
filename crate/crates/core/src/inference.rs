//! Sandwich covariance, confidence intervals, BIC, ΔBIC and bootstrap
//! standard errors.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{Dataset, PenaltySpec, Problem, ThetaVector};
use crate::optimizer::{fit_with, FitConfig, FitResult};
use crate::simulation::mix_seed;

/// SEs below this (or non-finite) count as a breakdown.
pub const BREAKDOWN_SE: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Component {
    Beta,
    Alpha,
    Nu,
}

impl Component {
    pub fn as_str(&self) -> &'static str {
        match self {
            Component::Beta => "beta",
            Component::Alpha => "alpha",
            Component::Nu => "nu",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ParamLabel {
    pub component: Component,
    /// Position within the component; 0 is the intercept.
    pub index: usize,
    pub name: String,
}

pub const INTERCEPT: &str = "(Intercept)";
pub const NU_NAME: &str = "nu0";

/// Labels for every entry of a flat θ.
pub fn param_labels(names: &[String]) -> Vec<ParamLabel> {
    let mut out = Vec::with_capacity(2 * names.len() + 3);
    for component in [Component::Beta, Component::Alpha] {
        out.push(ParamLabel {
            component,
            index: 0,
            name: INTERCEPT.into(),
        });
        for (j, n) in names.iter().enumerate() {
            out.push(ParamLabel {
                component,
                index: j + 1,
                name: n.clone(),
            });
        }
    }
    out.push(ParamLabel {
        component: Component::Nu,
        index: 0,
        name: NU_NAME.into(),
    });
    out
}

/// Covariance over the active parameters (non-zero coefficients, both
/// intercepts and a free `ν₀`).
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceResult {
    pub labels: Vec<ParamLabel>,
    /// Position of each row in the flat θ.
    pub flat_index: Vec<usize>,
    /// On the original covariate scale.
    pub cov: DMatrix<f64>,
    pub se: DVector<f64>,
    pub cov_scaled: DMatrix<f64>,
    pub se_scaled: DVector<f64>,
    pub breakdown_flag: bool,
    /// Whether the restricted penalized information was positive definite.
    pub info_pd: bool,
}

impl CovarianceResult {
    /// SEs spread back over a flat θ of length `len`; inactive entries are
    /// `None`.
    pub fn expand(&self, len: usize, scaled: bool) -> Vec<Option<f64>> {
        let mut out = vec![None; len];
        let se = if scaled { &self.se_scaled } else { &self.se };
        for (k, &j) in self.flat_index.iter().enumerate() {
            out[j] = Some(se[k]);
        }
        out
    }
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let t = m.transpose();
    *m += t;
    *m *= 0.5;
}

/// `I⁻¹ I₀ I⁻¹` on the active set, using the full information including
/// the β/α/ν cross blocks. Rows of inactive parameters are dropped before
/// inversion.
pub fn sandwich_cov(
    data: &Dataset,
    theta_hat: &ThetaVector,
    penalty: PenaltySpec,
    tau: f64,
    kappa_min: f64,
    active: &[bool],
) -> Result<CovarianceResult> {
    let info = Problem::new(data, penalty, tau, kappa_min).info_blocks(theta_hat)?;
    let idx: Vec<usize> = (0..active.len()).filter(|&j| active[j]).collect();
    let full = info.assembled_full.select_rows(idx.iter()).select_columns(idx.iter());
    let unpen = info.unpenalized.select_rows(idx.iter()).select_columns(idx.iter());

    let (inv, info_pd) = match Cholesky::new(full.clone()) {
        Some(ch) => (ch.inverse(), true),
        None => (full.clone().try_inverse().ok_or(Error::SingularInformation)?, false),
    };
    let mut cov_scaled = &inv * unpen * &inv;
    symmetrize(&mut cov_scaled);

    let q = theta_hat.beta.len();
    let all_labels = param_labels(&data.names);
    let to_original = DVector::from_iterator(
        idx.len(),
        idx.iter().map(|&j| {
            let within = if j < q { j } else if j < 2 * q { j - q } else { 0 };
            if data.scaled && within > 0 {
                1.0 / data.col_sd[within - 1]
            } else {
                1.0
            }
        }),
    );
    let cov = DMatrix::from_fn(idx.len(), idx.len(), |r, c| {
        cov_scaled[(r, c)] * to_original[r] * to_original[c]
    });
    let se_of = |m: &DMatrix<f64>| DVector::from_iterator(idx.len(), (0..idx.len()).map(|k| m[(k, k)].sqrt()));
    let se_scaled = se_of(&cov_scaled);
    let se = se_of(&cov);
    let breakdown_flag = !info_pd || se_scaled.iter().any(|&s| !s.is_finite() || s < BREAKDOWN_SE);
    Ok(CovarianceResult {
        labels: idx.iter().map(|&j| all_labels[j].clone()).collect(),
        flat_index: idx,
        cov,
        se,
        cov_scaled,
        se_scaled,
        breakdown_flag,
        info_pd,
    })
}

/// Inverse standard normal CDF (Wichura's AS 241, about 1e-16 relative).
pub fn normal_quantile(p: f64) -> f64 {
    if !(0.0..=1.0).contains(&p) || p.is_nan() {
        return f64::NAN;
    }
    if p == 0.0 {
        return f64::NEG_INFINITY;
    }
    if p == 1.0 {
        return f64::INFINITY;
    }
    let q = p - 0.5;
    if q.abs() <= 0.425 {
        let r = 0.180625 - q * q;
        let num = (((((((2.509_080_928_730_122_672_7e3 * r + 3.343_057_558_358_812_810_5e4) * r
            + 6.726_577_092_700_870_085_3e4)
            * r
            + 4.592_195_393_154_987_145_7e4)
            * r
            + 1.373_169_376_550_946_112_5e4)
            * r
            + 1.971_590_950_306_551_442_7e3)
            * r
            + 1.331_416_678_917_843_774_5e2)
            * r
            + 3.387_132_872_796_366_608_0)
            * q;
        let den = ((((((5.226_495_278_852_854_561_0e3 * r + 2.872_908_573_572_194_267_4e4) * r
            + 3.930_789_580_009_271_061_0e4)
            * r
            + 2.121_379_430_158_659_586_7e4)
            * r
            + 5.394_196_021_424_751_107_7e3)
            * r
            + 6.871_870_074_920_579_083_0e2)
            * r
            + 4.231_333_070_160_091_125_2e1)
            * r
            + 1.0;
        return num / den;
    }
    let mut r = if q < 0.0 { p } else { 1.0 - p };
    r = (-r.ln()).sqrt();
    let val = if r <= 5.0 {
        r -= 1.6;
        let num = ((((((7.745_450_142_783_414_076_4e-4 * r + 2.272_384_498_926_918_458_3e-2) * r
            + 2.417_807_251_774_506_117_7e-1)
            * r
            + 1.270_458_252_452_368_382_58)
            * r
            + 3.647_848_324_763_204_605_04)
            * r
            + 5.769_497_221_460_691_405_5)
            * r
            + 4.630_337_846_156_545_295_9)
            * r
            + 1.423_437_110_749_683_577_34;
        let den = ((((((1.050_750_071_644_416_843_24e-9 * r + 5.475_938_084_995_344_946e-4) * r
            + 1.519_866_656_361_645_719_66e-2)
            * r
            + 1.481_039_764_274_800_745_9e-1)
            * r
            + 6.897_673_349_851_000_045_5e-1)
            * r
            + 1.676_384_830_183_803_849_4)
            * r
            + 2.053_191_626_637_758_821_87)
            * r
            + 1.0;
        num / den
    } else {
        r -= 5.0;
        let num = ((((((2.010_334_399_292_288_132_65e-7 * r + 2.711_555_568_743_487_578_15e-5) * r
            + 1.242_660_947_388_078_438_6e-3)
            * r
            + 2.653_218_952_657_612_309_3e-2)
            * r
            + 2.965_605_718_285_048_912_3e-1)
            * r
            + 1.784_826_539_917_291_335_8)
            * r
            + 5.463_784_911_164_114_369_9)
            * r
            + 6.657_904_643_501_103_777_2;
        let den = ((((((2.044_263_103_389_939_785_64e-15 * r + 1.421_511_758_316_445_888_7e-7) * r
            + 1.846_318_317_510_054_681_8e-5)
            * r
            + 7.868_691_311_456_132_591e-4)
            * r
            + 1.487_536_129_085_061_485_25e-2)
            * r
            + 1.369_298_809_227_358_053_1e-1)
            * r
            + 5.998_322_065_558_879_376_9e-1)
            * r
            + 1.0;
        num / den
    };
    if q < 0.0 {
        -val
    } else {
        val
    }
}

/// `θ̂ ± z · se` per entry. A missing SE (inactive parameter) gives the
/// degenerate interval at the estimate.
pub fn confidence_intervals(estimates: &[f64], se: &[Option<f64>], level: f64) -> Vec<(f64, f64)> {
    let z = normal_quantile(1.0 - (1.0 - level) / 2.0);
    estimates
        .iter()
        .zip(se)
        .map(|(&e, s)| match s {
            Some(s) => (e - z * s, e + z * s),
            None => (e, e),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BicReport {
    pub bic: f64,
    pub df: usize,
    pub loglik_at_hat: f64,
}

/// `−2ℓ̂ + log(n)·df` with `df` = non-zero penalized coefficients + 3.
pub fn bic(fit: &FitResult) -> BicReport {
    BicReport {
        bic: fit.bic,
        df: fit.df,
        loglik_at_hat: fit.loglik,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum DeltaComponent {
    Beta,
    Alpha,
    Both,
}

impl DeltaComponent {
    pub fn as_str(&self) -> &'static str {
        match self {
            DeltaComponent::Beta => "beta",
            DeltaComponent::Alpha => "alpha",
            DeltaComponent::Both => "both",
        }
    }
}

/// How the reduced model of a ΔBIC comparison is refit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum RefitSupport {
    /// Only the variables active in the full fit (minus the removed one)
    /// may be non-zero.
    #[default]
    Fixed,
    /// Every other variable may re-enter or leave during the refit.
    Reselect,
}

/// Increase in BIC when `variable` is removed from the named component(s),
/// refitting the reduced model on the remaining support.
pub fn delta_bic(
    data: &Dataset,
    fit: &FitResult,
    variable: &str,
    component: DeltaComponent,
    config: &FitConfig,
) -> Result<f64> {
    delta_bic_with(data, fit, variable, component, config, RefitSupport::Fixed)
}

/// [`delta_bic`] with an explicit refit policy. The reduced model always
/// runs the whole telescope, starting from the full estimate with the entry
/// deleted.
pub fn delta_bic_with(
    data: &Dataset,
    fit: &FitResult,
    variable: &str,
    component: DeltaComponent,
    config: &FitConfig,
    support: RefitSupport,
) -> Result<f64> {
    let j = data
        .index_of(variable)
        .ok_or_else(|| Error::UnknownCovariate(variable.to_string()))?;
    let in_beta = fit.mask.beta[j + 1] && fit.active_beta[j];
    let in_alpha = fit.mask.alpha[j + 1] && fit.active_alpha[j];
    let applicable = match component {
        DeltaComponent::Beta => in_beta,
        DeltaComponent::Alpha => in_alpha,
        DeltaComponent::Both => in_beta || in_alpha,
    };
    if !applicable {
        return Err(Error::VariableNotActive {
            variable: variable.to_string(),
            component: component.as_str().to_string(),
        });
    }
    let mut mask = fit.mask.clone();
    if support == RefitSupport::Fixed {
        for k in 0..fit.active_beta.len() {
            mask.beta[k + 1] &= fit.active_beta[k];
            mask.alpha[k + 1] &= fit.active_alpha[k];
        }
    }
    let mut warm = fit.theta_scaled.clone();
    if matches!(component, DeltaComponent::Beta | DeltaComponent::Both) {
        mask.beta[j + 1] = false;
        warm.beta[j + 1] = 0.0;
    }
    if matches!(component, DeltaComponent::Alpha | DeltaComponent::Both) {
        mask.alpha[j + 1] = false;
        warm.alpha[j + 1] = 0.0;
    }
    let reduced = fit_with(data, config, &mask, Some(&warm), false)?;
    Ok(reduced.bic - fit.bic)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BootstrapResult {
    pub labels: Vec<ParamLabel>,
    pub flat_index: Vec<usize>,
    /// SD of the resampled original-scale estimates.
    pub se: Vec<f64>,
    pub n_failed: usize,
    pub resamples: usize,
}

/// Row resampling with replacement; per-resample seeds are mixed from
/// `seed` and the resample index, so the result is fixed given `seed`.
pub fn bootstrap_se(
    data: &Dataset,
    fit: &FitResult,
    config: &FitConfig,
    resamples: usize,
    seed: u64,
) -> Result<BootstrapResult> {
    let n = data.n();
    bootstrap_se_with(data, fit, config, resamples, |b| {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, b as u64));
        (0..n).map(|_| rng.random_range(0..n)).collect()
    })
}

/// Bootstrap with a caller-supplied resampler returning row indices.
pub fn bootstrap_se_with<R>(
    data: &Dataset,
    fit: &FitResult,
    config: &FitConfig,
    resamples: usize,
    resampler: R,
) -> Result<BootstrapResult>
where
    R: Fn(usize) -> Vec<usize> + Sync,
{
    if resamples < 2 {
        return Err(Error::InvalidConfig("bootstrap needs at least 2 resamples".into()));
    }
    let active = fit.active_flat();
    let flat_index: Vec<usize> = (0..active.len()).filter(|&j| active[j]).collect();
    let estimates: Vec<Option<Vec<f64>>> = (0..resamples)
        .into_par_iter()
        .map(|b| {
            let rows = resampler(b);
            let boot = data.select_rows(&rows);
            fit_with(&boot, config, &fit.mask, None, false)
                .ok()
                .map(|f| f.theta_original.to_vec())
        })
        .collect();
    let ok: Vec<&Vec<f64>> = estimates.iter().flatten().collect();
    let n_failed = resamples - ok.len();
    if n_failed * 5 > resamples || ok.len() < 2 {
        return Err(Error::BootstrapFailed {
            failed: n_failed,
            total: resamples,
        });
    }
    let m = ok.len() as f64;
    let se = flat_index
        .iter()
        .map(|&j| {
            let mean = ok.iter().map(|e| e[j]).sum::<f64>() / m;
            (ok.iter().map(|e| (e[j] - mean).powi(2)).sum::<f64>() / (m - 1.0)).sqrt()
        })
        .collect();
    let labels = param_labels(&fit.names);
    Ok(BootstrapResult {
        labels: flat_index.iter().map(|&j| labels[j].clone()).collect(),
        flat_index,
        se,
        n_failed,
        resamples,
    })
}
