//! Probability kernel: central/noncentral t, normal, Gamma, and Gamma-mixture
//! utilities used by every other module.
//!
//! All Gamma-function work happens in log space so that shape parameters of
//! the order a + nu/2 ~ 1e4 do not overflow.

use rand::Rng;
use rand_distr::Distribution;
use serde::{Deserialize, Serialize};
use statrs::function::beta::{beta_reg, ln_beta};
use statrs::function::erf::erfc;
use statrs::function::gamma::{gamma_lr, gamma_ur, ln_gamma};

use crate::error::{Error, Result};

const SQRT_2: f64 = std::f64::consts::SQRT_2;
const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / SQRT_2)
}

/// Standard normal quantile.
pub fn normal_quantile(p: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&p) || p == 0.0 {
        return Err(Error::invalid(format!("quantile level must be in (0,1), got {p}")));
    }
    use statrs::distribution::ContinuousCDF;
    let n = statrs::distribution::Normal::new(0.0, 1.0).expect("standard normal");
    Ok(n.inverse_cdf(p))
}

fn check_df(df: f64) -> Result<()> {
    if !(df > 0.0) || !df.is_finite() {
        return Err(Error::invalid(format!("degrees of freedom must be positive, got {df}")));
    }
    Ok(())
}

/// Central Student t CDF.
pub fn student_t_cdf(x: f64, df: f64) -> Result<f64> {
    check_df(df)?;
    if !x.is_finite() {
        return Err(Error::invalid("t argument must be finite"));
    }
    let z = df / (df + x * x);
    let tail = 0.5 * beta_reg(0.5 * df, 0.5, z);
    Ok(if x >= 0.0 { 1.0 - tail } else { tail })
}

fn student_t_log_pdf(x: f64, df: f64) -> f64 {
    ln_gamma(0.5 * (df + 1.0))
        - ln_gamma(0.5 * df)
        - 0.5 * (df * std::f64::consts::PI).ln()
        - 0.5 * (df + 1.0) * (x * x / df).ln_1p()
}

/// Central t quantile: the value q with `student_t_cdf(q, df) = p`.
///
/// Newton iteration from Hill's asymptotic start, safeguarded by bisection.
pub fn t_quantile(p: f64, df: f64) -> Result<f64> {
    check_df(df)?;
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::invalid(format!("quantile level must be in (0,1), got {p}")));
    }
    if p == 0.5 {
        return Ok(0.0);
    }
    if p < 0.5 {
        return Ok(-t_quantile(1.0 - p, df)?);
    }
    // Cornish-Fisher style start from the normal quantile.
    let z = normal_quantile(p)?;
    let g1 = (z * z * z + z) / (4.0 * df);
    let g2 = (5.0 * z.powi(5) + 16.0 * z.powi(3) + 3.0 * z) / (96.0 * df * df);
    let mut x = z + g1 + g2;

    // Bisection bracket around the start.
    let mut lo = 0.0;
    let mut hi = x.max(1.0);
    while student_t_cdf(hi, df)? < p {
        lo = hi;
        hi *= 2.0;
        if hi > 1e300 {
            return Err(Error::invalid("t quantile bracket overflow"));
        }
    }
    if x <= lo || x >= hi {
        x = 0.5 * (lo + hi);
    }
    for _ in 0..100 {
        let f = student_t_cdf(x, df)? - p;
        if f > 0.0 {
            hi = x;
        } else {
            lo = x;
        }
        if f.abs() < 1e-15 {
            break;
        }
        let pdf = student_t_log_pdf(x, df).exp();
        let mut next = x - f / pdf;
        if !(next > lo && next < hi) || !next.is_finite() {
            next = 0.5 * (lo + hi);
        }
        if (next - x).abs() <= 1e-12 * x.abs().max(1.0) {
            x = next;
            break;
        }
        x = next;
    }
    Ok(x)
}

/// Noncentral t CDF `F(x; ncp, df)`.
///
/// Series over half-integer-stepped incomplete-beta terms (the AS 243
/// recursion) with term budget 1e5; falls back to the Abramowitz-Stegun
/// normal approximation for df > 1e5 or extreme noncentrality.
pub fn noncentral_t_cdf(x: f64, df: f64, ncp: f64) -> Result<f64> {
    check_df(df)?;
    if !x.is_finite() || !ncp.is_finite() {
        return Err(Error::invalid("noncentral t arguments must be finite"));
    }
    if ncp == 0.0 {
        return student_t_cdf(x, df);
    }
    if df > 1e5 || ncp.abs() > 37.0 {
        return Ok(nct_cdf_normal_approx(x, df, ncp));
    }
    let (t, del, negated) = if x < 0.0 { (-x, -ncp, true) } else { (x, ncp, false) };
    let tnc = nct_series(t, df, del) + normal_cdf(-del);
    let value = if negated { 1.0 - tnc } else { tnc };
    Ok(value.clamp(0.0, 1.0))
}

fn nct_cdf_normal_approx(x: f64, df: f64, ncp: f64) -> f64 {
    let num = x * (1.0 - 1.0 / (4.0 * df)) - ncp;
    let den = (1.0 + x * x / (2.0 * df)).sqrt();
    normal_cdf(num / den)
}

// Series part of the AS 243 algorithm for t >= 0.
fn nct_series(t: f64, df: f64, del: f64) -> f64 {
    let x = t * t / (t * t + df);
    if x <= 0.0 {
        return 0.0;
    }
    const ERRMAX: f64 = 1e-13;
    const ITRMAX: usize = 100_000;

    let lambda = del * del;
    let mut p = 0.5 * (-0.5 * lambda).exp();
    let mut q = SQRT_2_OVER_PI * p * del;
    let mut s = -0.5 * (-0.5 * lambda).exp_m1(); // 0.5 * (1 - exp(-lambda/2))
    let mut a = 0.5;
    let b = 0.5 * df;
    let rxb = (b * (-x).ln_1p()).exp();
    let albeta = ln_beta(a, b);
    let mut xodd = beta_reg(a, b, x);
    let mut godd = 2.0 * rxb * (a * x.ln() - albeta).exp();
    let mut xeven = 1.0 - rxb;
    let mut geven = b * x * rxb;
    let mut tnc = p * xodd + q * xeven;

    let mut en = 1.0;
    for _ in 0..ITRMAX {
        a += 1.0;
        xodd -= godd;
        xeven -= geven;
        godd *= x * (a + b - 1.0) / a;
        geven *= x * (a + b - 0.5) / (a + 0.5);
        p *= lambda / (2.0 * en);
        q *= lambda / (2.0 * en + 1.0);
        s -= p;
        en += 1.0;
        tnc += p * xodd + q * xeven;
        let errbd = 2.0 * s * (xodd - godd);
        if errbd.abs() <= ERRMAX {
            break;
        }
    }
    tnc
}

/// Gamma(shape, rate) CDF.
pub fn gamma_cdf(x: f64, shape: f64, rate: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    gamma_lr(shape, rate * x)
}

/// Gamma(shape, rate) quantile by bracketed bisection.
pub fn gamma_quantile(p: f64, shape: f64, rate: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::invalid(format!("quantile level must be in (0,1), got {p}")));
    }
    if !(shape > 0.0 && rate > 0.0) {
        return Err(Error::invalid("gamma parameters must be positive"));
    }
    let mean = shape / rate;
    let mut lo = mean;
    let mut hi = mean;
    while gamma_cdf(lo, shape, rate) > p {
        lo /= 4.0;
        if lo < 1e-300 {
            lo = 0.0;
            break;
        }
    }
    while gamma_cdf(hi, shape, rate) < p {
        hi *= 4.0;
        if hi > 1e300 {
            return Err(Error::invalid("gamma quantile bracket overflow"));
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if gamma_cdf(mid, shape, rate) < p {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-13 * hi.max(1e-300) {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Scale on which a mixture over the precision omega = 1/sigma^2 is queried.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    Variance,
    Sd,
    Precision,
}

/// One Gamma component of a precision mixture.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GammaComponent {
    pub weight: f64,
    pub shape: f64,
    pub rate: f64,
}

impl GammaComponent {
    pub fn new(weight: f64, shape: f64, rate: f64) -> Self {
        GammaComponent { weight, shape, rate }
    }
}

/// Weighted mixture of Gamma distributions on the precision omega = 1/sigma^2.
///
/// The induced law of the variance sigma^2 is the inverse-Gamma mixture with
/// the same weights, shapes, and rates.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GammaMixture {
    components: Vec<GammaComponent>,
}

impl<'de> Deserialize<'de> for GammaMixture {
    fn deserialize<D>(deserializer: D) -> std::result::Result<Self, D::Error>
    where
        D: serde::Deserializer<'de>,
    {
        #[derive(Deserialize)]
        struct Raw {
            components: Vec<GammaComponent>,
        }
        let raw = Raw::deserialize(deserializer)?;
        GammaMixture::new(raw.components).map_err(serde::de::Error::custom)
    }
}

impl GammaMixture {
    pub fn new(components: Vec<GammaComponent>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::invalid("mixture needs at least one component"));
        }
        let mut total = 0.0;
        for c in &components {
            if !(c.weight > 0.0) {
                return Err(Error::invalid(format!("component weight must be positive, got {}", c.weight)));
            }
            if !(c.shape > 0.0 && c.rate > 0.0) {
                return Err(Error::invalid(format!(
                    "component shape/rate must be positive, got ({}, {})",
                    c.shape, c.rate
                )));
            }
            total += c.weight;
        }
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::invalid(format!("component weights must sum to 1, got {total}")));
        }
        Ok(GammaMixture { components })
    }

    pub fn single(shape: f64, rate: f64) -> Result<Self> {
        GammaMixture::new(vec![GammaComponent::new(1.0, shape, rate)])
    }

    pub fn components(&self) -> &[GammaComponent] {
        &self.components
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    /// Mixture CDF on the requested scale.
    pub fn cdf(&self, x: f64, scale: Scale) -> f64 {
        match scale {
            Scale::Precision => {
                if x <= 0.0 {
                    return 0.0;
                }
                self.components.iter().map(|c| c.weight * gamma_cdf(x, c.shape, c.rate)).sum()
            }
            Scale::Variance => {
                if x <= 0.0 {
                    return 0.0;
                }
                // P(sigma^2 <= x) = P(omega >= 1/x)
                self.components.iter().map(|c| c.weight * gamma_ur(c.shape, c.rate / x)).sum()
            }
            Scale::Sd => self.cdf(x * x, Scale::Variance),
        }
    }

    /// Mixture density on the requested scale.
    pub fn pdf(&self, x: f64, scale: Scale) -> f64 {
        if x <= 0.0 {
            return 0.0;
        }
        match scale {
            Scale::Precision => self
                .components
                .iter()
                .map(|c| {
                    c.weight
                        * (c.shape * c.rate.ln() - ln_gamma(c.shape) + (c.shape - 1.0) * x.ln() - c.rate * x).exp()
                })
                .sum(),
            Scale::Variance => self
                .components
                .iter()
                .map(|c| {
                    c.weight
                        * (c.shape * c.rate.ln() - ln_gamma(c.shape) - (c.shape + 1.0) * x.ln() - c.rate / x).exp()
                })
                .sum(),
            Scale::Sd => 2.0 * x * self.pdf(x * x, Scale::Variance),
        }
    }

    /// Mixture mean on the requested scale.
    pub fn mean(&self, scale: Scale) -> Result<f64> {
        match scale {
            Scale::Precision => Ok(self.components.iter().map(|c| c.weight * c.shape / c.rate).sum()),
            Scale::Variance => {
                let mut m = 0.0;
                for c in &self.components {
                    if c.shape <= 1.0 {
                        return Err(Error::UndefinedMoment(format!(
                            "variance-scale mean needs shape > 1, got {}",
                            c.shape
                        )));
                    }
                    m += c.weight * c.rate / (c.shape - 1.0);
                }
                Ok(m)
            }
            Scale::Sd => {
                let mut m = 0.0;
                for c in &self.components {
                    if c.shape <= 0.5 {
                        return Err(Error::UndefinedMoment(format!(
                            "sd-scale mean needs shape > 1/2, got {}",
                            c.shape
                        )));
                    }
                    m += c.weight * (0.5 * c.rate.ln() + ln_gamma(c.shape - 0.5) - ln_gamma(c.shape)).exp();
                }
                Ok(m)
            }
        }
    }

    /// Mixture standard deviation on the requested scale, from the mixture
    /// second moment.
    pub fn sd(&self, scale: Scale) -> Result<f64> {
        let mean = self.mean(scale)?;
        let second = match scale {
            Scale::Precision => self
                .components
                .iter()
                .map(|c| c.weight * c.shape * (c.shape + 1.0) / (c.rate * c.rate))
                .sum::<f64>(),
            Scale::Variance => {
                let mut m2 = 0.0;
                for c in &self.components {
                    if c.shape <= 2.0 {
                        return Err(Error::UndefinedMoment(format!(
                            "variance-scale sd needs shape > 2, got {}",
                            c.shape
                        )));
                    }
                    m2 += c.weight * c.rate * c.rate / ((c.shape - 1.0) * (c.shape - 2.0));
                }
                m2
            }
            Scale::Sd => self.mean(Scale::Variance)?,
        };
        Ok((second - mean * mean).max(0.0).sqrt())
    }

    /// Mean and sd on the sigma^2 scale.
    pub fn mean_sd_variance(&self) -> Result<(f64, f64)> {
        Ok((self.mean(Scale::Variance)?, self.sd(Scale::Variance)?))
    }

    /// Mixture quantile on the requested scale, by bisection to relative
    /// tolerance 1e-10.
    ///
    /// The bracket starts from the component-wise quantile extremes at
    /// p*1e-3 and 1-(1-p)*1e-3 and is expanded geometrically until the CDF
    /// straddles p.
    pub fn quantile(&self, p: f64, scale: Scale) -> Result<f64> {
        if !(p > 0.0 && p < 1.0) {
            return Err(Error::invalid(format!("quantile level must be in (0,1), got {p}")));
        }
        let p_lo = (p * 1e-3).max(1e-300);
        let p_hi = 1.0 - ((1.0 - p) * 1e-3).max(1e-300);
        let mut lo = f64::INFINITY;
        let mut hi = 0.0_f64;
        for c in &self.components {
            let (q_lo, q_hi) = match scale {
                Scale::Precision => (
                    gamma_quantile(p_lo, c.shape, c.rate)?,
                    gamma_quantile(p_hi, c.shape, c.rate)?,
                ),
                Scale::Variance => (
                    1.0 / gamma_quantile(p_hi, c.shape, c.rate)?,
                    1.0 / gamma_quantile(p_lo, c.shape, c.rate)?,
                ),
                Scale::Sd => (
                    (1.0 / gamma_quantile(p_hi, c.shape, c.rate)?).sqrt(),
                    (1.0 / gamma_quantile(p_lo, c.shape, c.rate)?).sqrt(),
                ),
            };
            lo = lo.min(q_lo);
            hi = hi.max(q_hi);
        }
        while self.cdf(lo, scale) > p && lo > 1e-300 {
            lo /= 4.0;
        }
        while self.cdf(hi, scale) < p {
            hi *= 4.0;
            if hi > 1e300 {
                return Err(Error::invalid("mixture quantile bracket overflow"));
            }
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if self.cdf(mid, scale) < p {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo <= 1e-10 * hi.max(1e-300) {
                break;
            }
        }
        Ok(0.5 * (lo + hi))
    }

    /// Draw one value: pick component l with probability w_l, then a
    /// Gamma(a_l, b_l) precision variate, transformed to the requested scale.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, scale: Scale) -> f64 {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut chosen = &self.components[self.components.len() - 1];
        for c in &self.components {
            acc += c.weight;
            if u < acc {
                chosen = c;
                break;
            }
        }
        let g = rand_distr::Gamma::new(chosen.shape, 1.0 / chosen.rate).expect("valid gamma parameters");
        let omega = g.sample(rng);
        match scale {
            Scale::Precision => omega,
            Scale::Variance => 1.0 / omega,
            Scale::Sd => (1.0 / omega).sqrt(),
        }
    }
}
