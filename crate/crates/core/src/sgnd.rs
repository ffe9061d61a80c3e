//! The smooth generalized normal distribution.
//!
//! The density is `c(κ) / s · exp(-ã((y - μ)/s)^κ)` where
//! `ã(z) = √(z² + τ²) − τ` is a smooth stand-in for `|z|` and `c(κ)` is the
//! reciprocal of the integral of the kernel, evaluated by quadrature. The
//! shape is parameterized on the optimizer side through
//! `ν₀ = log(κ − κ_min)`.

use std::cell::RefCell;
use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::quadrature::{gauss_kronrod, integrate, integrate_half_line, QuadOptions};

/// Upper cap on the shape parameter. The kernel becomes a near box function
/// for large κ and the quadrature stiffens.
pub const KAPPA_MAX: f64 = 20.0;

/// Floor applied to `ã` wherever its logarithm or a negative power is taken.
pub const A_FLOOR: f64 = 1e-12;

/// Smooth absolute value `√(z² + τ²) − τ`.
///
/// Written as `z² / (√(z² + τ²) + τ)` to avoid cancellation near zero.
#[inline]
pub fn smooth_abs(z: f64, tau: f64) -> f64 {
    let z2 = z * z;
    z2 / ((z2 + tau * tau).sqrt() + tau)
}

/// Shape parameters of the SGND.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgndShape {
    kappa: f64,
    tau: f64,
    kappa_min: f64,
}

impl SgndShape {
    pub fn new(kappa: f64, tau: f64, kappa_min: f64) -> Result<Self> {
        if !(kappa_min > 0.0 && kappa_min.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "kappa_min must be positive, got {kappa_min}"
            )));
        }
        if !(kappa > kappa_min && kappa <= KAPPA_MAX) {
            return Err(Error::InvalidConfig(format!(
                "kappa must lie in ({kappa_min}, {KAPPA_MAX}], got {kappa}"
            )));
        }
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::InvalidConfig(format!("tau must be positive, got {tau}")));
        }
        Ok(Self {
            kappa,
            tau,
            kappa_min,
        })
    }

    /// Shape implied by the link value `ν₀ = log(κ − κ_min)`.
    pub fn from_nu(nu0: f64, tau: f64, kappa_min: f64) -> Result<Self> {
        Self::new(kappa_min + nu0.exp(), tau, kappa_min)
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }
    pub fn tau(&self) -> f64 {
        self.tau
    }
    pub fn kappa_min(&self) -> f64 {
        self.kappa_min
    }
    pub fn nu0(&self) -> f64 {
        (self.kappa - self.kappa_min).ln()
    }

    /// Kernel exponent `ã(z)^κ`.
    #[inline]
    pub fn g_tilde(&self, z: f64) -> f64 {
        g_tilde(z, self)
    }
}

/// `{ã(z)}^κ`.
#[inline]
pub fn g_tilde(z: f64, shape: &SgndShape) -> f64 {
    let a = smooth_abs(z, shape.tau);
    if shape.kappa == 1.0 {
        a
    } else {
        a.powf(shape.kappa)
    }
}

/// `log c̃_τ(κ)` and its first two derivatives with respect to `ν₀`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormConstEval {
    pub log_c: f64,
    pub dlogc_dnu: f64,
    pub d2logc_dnu2: f64,
    pub abs_tol: f64,
}

/// Kernel integrand and its first two ν-derivatives at `z`.
#[inline]
fn kernel_and_nu_derivatives(z: f64, shape: &SgndShape) -> [f64; 3] {
    let a = smooth_abs(z, shape.tau);
    let e = (-a.powf(shape.kappa)).exp();
    if e == 0.0 {
        return [0.0; 3];
    }
    let k = shape.kappa - shape.kappa_min;
    let ac = a.max(A_FLOOR);
    let log_a = ac.ln();
    let ak = ac.powf(shape.kappa);
    let t = k * ak * log_a;
    // ∂/∂ν e^{-g} = -k a^κ log(a) e^{-g}
    // ∂²/∂ν² e^{-g} = -k a^κ log(a) e^{-g} (1 + k log(a) - k a^κ log(a))
    let d1 = -t * e;
    let d2 = -t * e * (1.0 + k * log_a - t);
    [e, d1, d2]
}

/// Normalizing constant and its ν-derivatives by adaptive quadrature.
pub fn norm_const(shape: &SgndShape) -> Result<NormConstEval> {
    // Half tolerance on the half line: the symmetric doubling keeps the
    // full-line error within the default.
    let opts = QuadOptions {
        abs_tol: 0.5 * QuadOptions::default().abs_tol,
        ..QuadOptions::default()
    };
    let r = integrate_half_line(|z| kernel_and_nu_derivatives(z, shape), opts)?;
    let i0 = 2.0 * r.value[0];
    let i1 = 2.0 * r.value[1];
    let i2 = 2.0 * r.value[2];
    let log_c = -i0.ln();
    let ratio = i1 / i0;
    let eval = NormConstEval {
        log_c,
        dlogc_dnu: -ratio,
        d2logc_dnu2: -i2 / i0 + ratio * ratio,
        abs_tol: 2.0 * r.abs_err,
    };
    if !(eval.log_c.is_finite() && eval.dlogc_dnu.is_finite() && eval.d2logc_dnu2.is_finite()) {
        return Err(Error::QuadratureFailure {
            estimated: f64::INFINITY,
            tol: 2.0 * opts.abs_tol,
        });
    }
    Ok(eval)
}

/// Memo of [`norm_const`] for one fit. Not shared between threads.
#[derive(Debug, Default)]
pub struct NormConstCache {
    entries: RefCell<HashMap<(i64, u64, u64), NormConstEval>>,
}

impl NormConstCache {
    const CAPACITY: usize = 256;

    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, shape: &SgndShape) -> Result<NormConstEval> {
        let key = (
            (shape.kappa * 1e12).round() as i64,
            shape.tau.to_bits(),
            shape.kappa_min.to_bits(),
        );
        if let Some(v) = self.entries.borrow().get(&key) {
            return Ok(*v);
        }
        let v = norm_const(shape)?;
        let mut map = self.entries.borrow_mut();
        if map.len() >= Self::CAPACITY {
            map.clear();
        }
        map.insert(key, v);
        Ok(v)
    }

    pub fn len(&self) -> usize {
        self.entries.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Log-density given a precomputed normalizing constant.
#[inline]
pub fn log_density_with(y: f64, mu: f64, s: f64, shape: &SgndShape, nc: &NormConstEval) -> f64 {
    nc.log_c - s.ln() - g_tilde((y - mu) / s, shape)
}

pub fn log_density(y: f64, mu: f64, s: f64, shape: &SgndShape) -> Result<f64> {
    let nc = norm_const(shape)?;
    Ok(log_density_with(y, mu, s, shape, &nc))
}

/// Standardized CDF given the normalizing constant.
pub fn cdf_std_with(z: f64, shape: &SgndShape, nc: &NormConstEval) -> Result<f64> {
    if z == 0.0 {
        return Ok(0.5);
    }
    if z.is_infinite() {
        return Ok(if z > 0.0 { 1.0 } else { 0.0 });
    }
    let c = nc.log_c.exp();
    let az = z.abs();
    // Integrate on the mapped half-line so very large |z| stay cheap.
    let upper = az / (1.0 + az);
    let r = integrate(
        |u: f64| {
            let om = 1.0 - u;
            let x = u / om;
            let v = (-g_tilde(x, shape)).exp();
            [if v == 0.0 { 0.0 } else { v / (om * om) }]
        },
        0.0,
        upper,
        QuadOptions::default(),
    )?;
    let half = (c * r.value[0]).min(0.5);
    Ok(if z > 0.0 { 0.5 + half } else { 0.5 - half })
}

pub fn cdf(y: f64, mu: f64, s: f64, shape: &SgndShape) -> Result<f64> {
    let nc = norm_const(shape)?;
    cdf_std_with((y - mu) / s, shape, &nc)
}

/// Inverse-CDF sampler built on a piecewise cubic Hermite table of the
/// standardized CDF over `[0, z_hi]`; the left half follows by symmetry.
#[derive(Debug, Clone)]
pub struct SgndSampler {
    shape: SgndShape,
    nodes: Vec<f64>,
    cdf: Vec<f64>,
    pdf: Vec<f64>,
}

const TABLE_TOL: f64 = 1e-11;
const TAIL_MASS: f64 = 1e-9;

impl SgndSampler {
    pub fn new(shape: SgndShape) -> Result<Self> {
        let nc = norm_const(&shape)?;
        let c = nc.log_c.exp();
        let pdf = |z: f64| c * (-g_tilde(z, &shape)).exp();

        // Upper end: smallest power of two with tail mass below TAIL_MASS.
        let mut z_hi = 1.0_f64;
        loop {
            let tail = integrate_half_line(
                |t| [pdf(z_hi + t)],
                QuadOptions {
                    abs_tol: 1e-13,
                    ..QuadOptions::default()
                },
            )?
            .value[0];
            if tail <= TAIL_MASS || z_hi > 1e12 {
                break;
            }
            z_hi *= 2.0;
        }

        let mut sampler = Self {
            shape,
            nodes: vec![0.0],
            cdf: vec![0.5],
            pdf: vec![pdf(0.0)],
        };
        let pieces = 32;
        let h = z_hi / pieces as f64;
        for k in 0..pieces {
            let a = k as f64 * h;
            let b = if k + 1 == pieces { z_hi } else { (k + 1) as f64 * h };
            let fa = *sampler.cdf.last().unwrap();
            let fb = fa + increment(&pdf, a, b)?;
            sampler.refine(&pdf, a, fa, b, fb, 0)?;
        }
        Ok(sampler)
    }

    fn refine<F: Fn(f64) -> f64>(
        &mut self,
        pdf: &F,
        a: f64,
        fa: f64,
        b: f64,
        fb: f64,
        depth: u32,
    ) -> Result<()> {
        let m = 0.5 * (a + b);
        let fm = fa + increment(pdf, a, m)?;
        let da = pdf(a);
        let db = pdf(b);
        let predicted = hermite(fa, da, fb, db, b - a, 0.5);
        if (predicted - fm).abs() > TABLE_TOL && depth < 48 {
            self.refine(pdf, a, fa, m, fm, depth + 1)?;
            self.refine(pdf, m, fm, b, fb, depth + 1)?;
        } else {
            self.nodes.push(b);
            self.cdf.push(fb);
            self.pdf.push(db);
        }
        Ok(())
    }

    pub fn shape(&self) -> &SgndShape {
        &self.shape
    }

    pub fn table_len(&self) -> usize {
        self.nodes.len()
    }

    /// Standardized quantile for `u ∈ (0, 1)`.
    pub fn quantile_std(&self, u: f64) -> f64 {
        if u < 0.5 {
            return -self.quantile_std(1.0 - u);
        }
        let last = self.nodes.len() - 1;
        if u >= self.cdf[last] {
            return self.nodes[last];
        }
        // First index with cdf > u.
        let k = self.cdf.partition_point(|&v| v <= u).max(1);
        let (z0, z1) = (self.nodes[k - 1], self.nodes[k]);
        let (f0, f1) = (self.cdf[k - 1], self.cdf[k]);
        let (d0, d1) = (self.pdf[k - 1], self.pdf[k]);
        let h = z1 - z0;
        let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
        let mut t = if f1 > f0 { (u - f0) / (f1 - f0) } else { 0.5 };
        for _ in 0..60 {
            let val = hermite(f0, d0, f1, d1, h, t) - u;
            if val.abs() <= 1e-15 {
                break;
            }
            if val > 0.0 {
                hi = t;
            } else {
                lo = t;
            }
            let deriv = hermite_deriv(f0, d0, f1, d1, h, t);
            let newton = t - val / deriv;
            t = if deriv > 0.0 && newton > lo && newton < hi {
                newton
            } else {
                0.5 * (lo + hi)
            };
            if hi - lo < 1e-16 {
                break;
            }
        }
        z0 + t * h
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, n: usize, mu: f64, s: f64) -> Vec<f64> {
        (0..n).map(|_| mu + s * self.draw_std(rng)).collect()
    }

    /// One standardized draw.
    #[inline]
    pub fn draw_std<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let u: f64 = rng.sample(rand::distr::Open01);
        self.quantile_std(u)
    }
}

fn increment<F: Fn(f64) -> f64>(pdf: &F, a: f64, b: f64) -> Result<f64> {
    let (v, err) = gauss_kronrod(&|x| [pdf(x)], a, b);
    if err <= 1e-13 {
        return Ok(v[0]);
    }
    Ok(integrate(
        |x| [pdf(x)],
        a,
        b,
        QuadOptions {
            abs_tol: 1e-13,
            ..QuadOptions::default()
        },
    )?
    .value[0])
}

#[inline]
fn hermite(f0: f64, d0: f64, f1: f64, d1: f64, h: f64, t: f64) -> f64 {
    let t2 = t * t;
    let t3 = t2 * t;
    (2.0 * t3 - 3.0 * t2 + 1.0) * f0
        + (t3 - 2.0 * t2 + t) * h * d0
        + (-2.0 * t3 + 3.0 * t2) * f1
        + (t3 - t2) * h * d1
}

/// Derivative of [`hermite`] with respect to `t`.
#[inline]
fn hermite_deriv(f0: f64, d0: f64, f1: f64, d1: f64, h: f64, t: f64) -> f64 {
    let t2 = t * t;
    (6.0 * t2 - 6.0 * t) * f0
        + (3.0 * t2 - 4.0 * t + 1.0) * h * d0
        + (-6.0 * t2 + 6.0 * t) * f1
        + (3.0 * t2 - 2.0 * t) * h * d1
}

/// `n` i.i.d. SGND draws.
pub fn sample<R: Rng + ?Sized>(
    rng: &mut R,
    n: usize,
    mu: f64,
    s: f64,
    shape: &SgndShape,
) -> Result<Vec<f64>> {
    Ok(SgndSampler::new(*shape)?.sample(rng, n, mu, s))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn shape(kappa: f64, tau: f64) -> SgndShape {
        SgndShape::new(kappa, tau, 0.2).unwrap()
    }

    fn gamma(x: f64) -> f64 {
        statrs::function::gamma::gamma(x)
    }

    /// Trapezoid rule on a uniform grid; the oracle for quadrature checks.
    fn trapezoid(f: impl Fn(f64) -> f64, a: f64, b: f64, points: usize) -> f64 {
        let h = (b - a) / (points - 1) as f64;
        let mut sum = 0.5 * (f(a) + f(b));
        for i in 1..points - 1 {
            sum += f(a + i as f64 * h);
        }
        sum * h
    }

    #[test]
    fn smooth_abs_values() {
        assert_eq!(smooth_abs(0.0, 0.15), 0.0);
        let expected = 1.0225_f64.sqrt() - 0.15;
        assert!((smooth_abs(1.0, 0.15) - expected).abs() < 1e-15);
        assert!((smooth_abs(1.0, 0.15) - 0.861_187_4).abs() < 1e-7);
        assert!((smooth_abs(1000.0, 0.15) - 999.85).abs() < 1e-4);
        assert_eq!(smooth_abs(-2.5, 0.1), smooth_abs(2.5, 0.1));
    }

    #[test]
    fn g_tilde_values() {
        let s = shape(1.7, 0.15);
        assert_eq!(g_tilde(0.0, &s), 0.0);
        let s1 = shape(1.0, 0.15);
        assert_eq!(g_tilde(0.7, &s1), smooth_abs(0.7, 0.15));
        let s2 = shape(2.0, 1e-8);
        assert!((g_tilde(2.0, &s2) - 4.0).abs() < 1e-6);
        assert!(g_tilde(0.5, &s) < g_tilde(0.6, &s));
    }

    #[test]
    fn shape_validation() {
        assert!(SgndShape::new(0.2, 0.1, 0.2).is_err());
        assert!(SgndShape::new(1.0, 0.0, 0.2).is_err());
        assert!(SgndShape::new(25.0, 0.1, 0.2).is_err());
        let s = SgndShape::from_nu(1.8_f64.ln(), 0.15, 0.2).unwrap();
        assert!((s.kappa() - 2.0).abs() < 1e-14);
    }

    #[test]
    fn norm_const_matches_gnd_limit() {
        let nc = norm_const(&shape(2.0, 1e-8)).unwrap();
        assert!((nc.log_c.exp() - 0.564_189_6).abs() < 1e-5);
        let nc = norm_const(&shape(1.0, 1e-8)).unwrap();
        assert!((nc.log_c.exp() - 0.5).abs() < 1e-5);
        for &k in &[0.5, 1.33, 1.52, 3.0] {
            let nc = norm_const(&shape(k, 1e-8)).unwrap();
            let exact = k / (2.0 * gamma(1.0 / k));
            assert!((nc.log_c.exp() - exact).abs() < 1e-5, "kappa={k}");
        }
    }

    #[test]
    fn norm_const_matches_trapezoid_oracle() {
        let s = shape(1.52, 0.15);
        let nc = norm_const(&s).unwrap();
        let brute = trapezoid(|z| (-g_tilde(z, &s)).exp(), -50.0, 50.0, 1_000_001);
        assert!((nc.log_c.exp() - 1.0 / brute).abs() < 1e-8);
        assert!(nc.abs_tol <= 1e-10);
    }

    #[test]
    fn norm_const_derivatives_match_finite_differences() {
        let h = 1e-5;
        for &tau in &[0.05, 0.15] {
            for &k in &[0.5, 1.0, 1.33, 1.52, 2.0, 3.0] {
                let base = shape(k, tau);
                let nu = base.nu0();
                let at = |nu: f64| norm_const(&SgndShape::from_nu(nu, tau, 0.2).unwrap()).unwrap();
                let (p, m, c) = (at(nu + h), at(nu - h), at(nu));
                let fd1 = (p.log_c - m.log_c) / (2.0 * h);
                let fd2 = (p.dlogc_dnu - m.dlogc_dnu) / (2.0 * h);
                assert!(
                    (fd1 - c.dlogc_dnu).abs() <= 1e-5 * c.dlogc_dnu.abs().max(1e-3),
                    "d1 kappa={k} tau={tau}: {fd1} vs {}",
                    c.dlogc_dnu
                );
                assert!(
                    (fd2 - c.d2logc_dnu2).abs() <= 1e-5 * c.d2logc_dnu2.abs().max(1e-3),
                    "d2 kappa={k} tau={tau}: {fd2} vs {}",
                    c.d2logc_dnu2
                );
            }
        }
    }

    #[test]
    fn log_density_basics() {
        let s = shape(1.33, 0.15);
        let nc = norm_const(&s).unwrap();
        let at_mu = log_density(0.3, 0.3, 2.0, &s).unwrap();
        assert!((at_mu - (nc.log_c - 2.0_f64.ln())).abs() < 1e-14);
        let l = log_density(0.3 + 0.8, 0.3, 2.0, &s).unwrap();
        let r = log_density(0.3 - 0.8, 0.3, 2.0, &s).unwrap();
        assert_eq!(l, r);
    }

    #[test]
    fn density_normalizes() {
        for &(k, tau) in &[(1.33, 0.15), (1.0, 0.05), (2.0, 0.15), (0.7, 0.1), (3.0, 0.05)] {
            let s = shape(k, tau);
            let nc = norm_const(&s).unwrap();
            let total = integrate(
                |y| [log_density_with(y, 0.0, 1.0, &s, &nc).exp()],
                -400.0,
                400.0,
                QuadOptions::default(),
            )
            .unwrap()
            .value[0];
            assert!((total - 1.0).abs() < 1e-6, "kappa={k} tau={tau}: {total}");
        }
    }

    #[test]
    fn gnd_limit_pointwise() {
        for &k in &[1.0, 1.5, 2.0] {
            let s = shape(k, 1e-8);
            let nc = norm_const(&s).unwrap();
            let (mu, sc) = (0.4, 1.7);
            for i in -40..=40 {
                let y = mu + i as f64 * 0.1;
                let got = log_density_with(y, mu, sc, &s, &nc).exp();
                let gnd = k / (2.0 * gamma(1.0 / k) * sc) * (-((y - mu).abs() / sc).powf(k)).exp();
                assert!((got - gnd).abs() <= 1e-5, "kappa={k} y={y}");
            }
        }
    }

    #[test]
    fn cdf_properties() {
        let s = shape(1.4, 0.15);
        assert_eq!(cdf(1.0, 1.0, 2.0, &s).unwrap(), 0.5);
        assert!(cdf(-1e6, 0.0, 1.0, &s).unwrap() < 1e-12);
        assert!(cdf(1e6, 0.0, 1.0, &s).unwrap() > 1.0 - 1e-12);
        let mut prev = 0.0;
        for i in -30..=30 {
            let v = cdf(i as f64 * 0.2, 0.0, 1.0, &s).unwrap();
            assert!(v >= prev);
            prev = v;
        }
    }

    #[test]
    fn cdf_matches_brute_force_at_one_scale() {
        let s = shape(2.0, 1e-8);
        let nc = norm_const(&s).unwrap();
        let c = nc.log_c.exp();
        let brute = 0.5 + c * trapezoid(|z| (-g_tilde(z, &s)).exp(), 0.0, 1.0, 200_001);
        let got = cdf(3.0, 2.0, 1.0, &s).unwrap();
        assert!((got - brute).abs() < 1e-8);
    }

    #[test]
    fn sampler_is_deterministic() {
        let s = shape(1.5, 0.15);
        let a = sample(&mut ChaCha8Rng::seed_from_u64(7), 100, 0.0, 1.0, &s).unwrap();
        let b = sample(&mut ChaCha8Rng::seed_from_u64(7), 100, 0.0, 1.0, &s).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn sampler_quantiles_invert_cdf() {
        let s = shape(1.0, 0.05);
        let sampler = SgndSampler::new(s).unwrap();
        let nc = norm_const(&s).unwrap();
        for &u in &[1e-6, 0.01, 0.2, 0.5, 0.77, 0.999, 1.0 - 1e-7] {
            let z = sampler.quantile_std(u);
            let back = cdf_std_with(z, &s, &nc).unwrap();
            assert!((back - u).abs() <= 1e-8, "u={u}: {back}");
        }
    }

    #[test]
    fn normal_sample_mean() {
        let s = shape(2.0, 1e-8);
        let n = 100_000;
        let x = sample(&mut ChaCha8Rng::seed_from_u64(11), n, 3.0, 2.0, &s).unwrap();
        let mean = x.iter().sum::<f64>() / n as f64;
        assert!((mean - 3.0).abs() < 3.0 * 2.0 / (n as f64).sqrt());
    }

    #[test]
    fn laplace_sample_kurtosis() {
        let s = shape(1.0, 1e-8);
        let n = 100_000;
        let x = sample(&mut ChaCha8Rng::seed_from_u64(5), n, 0.0, 1.0, &s).unwrap();
        let mean = x.iter().sum::<f64>() / n as f64;
        let m2 = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        let m4 = x.iter().map(|v| (v - mean).powi(4)).sum::<f64>() / n as f64;
        let excess = m4 / (m2 * m2) - 3.0;
        // Laplace excess kurtosis is 3; its sampling SD at n = 1e5 is about 0.1.
        assert!((excess - 3.0).abs() < 0.4, "excess kurtosis {excess}");
    }

    #[test]
    fn cache_reuses_entries() {
        let cache = NormConstCache::new();
        let s = shape(1.3, 0.15);
        let a = cache.get(&s).unwrap();
        let b = cache.get(&s).unwrap();
        assert_eq!(a, b);
        assert_eq!(cache.len(), 1);
    }
}
