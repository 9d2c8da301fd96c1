//! Frequentist power and sample-size computations for the one-sided two-arm
//! t-test: the power function, the minimal-n rule, expected-power sizing, and
//! quantile plug-in sizing.

use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::distmath::{
    gamma_quantile, noncentral_t_cdf, normal_quantile, t_quantile, GammaMixture, Scale,
};
use crate::error::{Error, Result};

fn gcd(mut a: u32, mut b: u32) -> u32 {
    while b != 0 {
        let t = b;
        b = a % b;
        a = t;
    }
    a
}

/// Randomization ratio k = n_C/n_T as a reduced rational control:treatment.
///
/// Allocatable totals are multiples of the block (control + treatment), so
/// group sizes are always integers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Allocation {
    control: u32,
    treatment: u32,
}

impl Allocation {
    pub fn new(control: u32, treatment: u32) -> Result<Self> {
        if control == 0 || treatment == 0 {
            return Err(Error::invalid("allocation parts must be positive"));
        }
        let g = gcd(control, treatment);
        Ok(Allocation { control: control / g, treatment: treatment / g })
    }

    pub fn balanced() -> Self {
        Allocation { control: 1, treatment: 1 }
    }

    /// k = n_C/n_T.
    pub fn ratio(&self) -> f64 {
        self.control as f64 / self.treatment as f64
    }

    /// Smallest step between allocatable totals.
    pub fn block(&self) -> u64 {
        (self.control + self.treatment) as u64
    }

    pub fn is_allocatable(&self, n: u64) -> bool {
        n % self.block() == 0
    }

    /// Smallest valid total: one or more blocks with n - 2 >= 1.
    pub fn min_total(&self) -> u64 {
        let block = self.block();
        let mut n = block;
        while n < 3 {
            n += block;
        }
        n
    }

    /// (n_T, n_C) for an allocatable total.
    pub fn group_sizes(&self, n: u64) -> Result<(u64, u64)> {
        if !self.is_allocatable(n) {
            return Err(Error::invalid(format!(
                "total {n} is not allocatable for ratio {}:{}",
                self.control, self.treatment
            )));
        }
        let blocks = n / self.block();
        Ok((blocks * self.treatment as u64, blocks * self.control as u64))
    }

    /// Smallest allocatable total >= x.
    pub fn round_up(&self, x: f64) -> u64 {
        let block = self.block() as f64;
        let n = (x / block).ceil().max(1.0) * block;
        n as u64
    }

    /// Largest allocatable total <= n, or the minimum total if none.
    pub fn round_down(&self, n: u64) -> u64 {
        let block = self.block();
        let floored = (n / block) * block;
        floored.max(self.min_total())
    }
}

/// Design parameters of the trial: one-sided level, target power, assumed
/// effect, allocation, internal pilot size, and an optional final-size cap.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignParams {
    pub alpha: f64,
    pub target_power: f64,
    pub delta_star: f64,
    pub allocation: Allocation,
    pub n1: u32,
    pub n_max: Option<u64>,
}

impl DesignParams {
    pub fn new(
        alpha: f64,
        target_power: f64,
        delta_star: f64,
        allocation: Allocation,
        n1: u32,
        n_max: Option<u64>,
    ) -> Result<Self> {
        if !(alpha > 0.0 && alpha < 0.5) {
            return Err(Error::invalid(format!("alpha must be in (0, 0.5), got {alpha}")));
        }
        if !(target_power > alpha && target_power < 1.0) {
            return Err(Error::invalid(format!(
                "target power must be in (alpha, 1), got {target_power}"
            )));
        }
        if !(delta_star > 0.0) {
            return Err(Error::invalid(format!("delta_star must be positive, got {delta_star}")));
        }
        if (n1 as u64) < 4 || !allocation.is_allocatable(n1 as u64) {
            return Err(Error::invalid(format!(
                "pilot size {n1} must be >= 4 and allocatable under the randomization ratio"
            )));
        }
        if let Some(cap) = n_max {
            if cap < n1 as u64 {
                return Err(Error::invalid(format!("n_max {cap} is below the pilot size {n1}")));
            }
        }
        Ok(DesignParams { alpha, target_power, delta_star, allocation, n1, n_max })
    }

    /// Balanced design with the simulation-study defaults for level and power.
    pub fn standard(delta_star: f64, n1: u32) -> Result<Self> {
        DesignParams::new(0.025, 0.8, delta_star, Allocation::balanced(), n1, None)
    }
}

/// Power of the one-sided two-sample t-test with total size `n`, outcome
/// variance `sigma2`, and true mean difference `delta`.
pub fn power(n: u64, sigma2: f64, delta: f64, d: &DesignParams) -> Result<f64> {
    if !(sigma2 > 0.0) {
        return Err(Error::invalid(format!("sigma2 must be positive, got {sigma2}")));
    }
    if n < d.allocation.min_total() {
        return Err(Error::invalid(format!("total size {n} is below the minimum")));
    }
    let (n_t, n_c) = d.allocation.group_sizes(n)?;
    let df = (n - 2) as f64;
    let ncp = delta / (sigma2 * (1.0 / n_t as f64 + 1.0 / n_c as f64)).sqrt();
    let crit = t_quantile(1.0 - d.alpha, df)?;
    Ok(1.0 - noncentral_t_cdf(crit, df, ncp)?)
}

/// Smallest allocatable total with power at least the target, ignoring any cap.
pub(crate) fn required_n_unbounded(sigma2: f64, d: &DesignParams) -> Result<u64> {
    if !(sigma2 > 0.0) {
        return Err(Error::invalid(format!("sigma2 must be positive, got {sigma2}")));
    }
    let k = d.allocation.ratio();
    let z_a = normal_quantile(1.0 - d.alpha)?;
    let z_b = normal_quantile(d.target_power)?;
    let approx =
        (z_a + z_b).powi(2) * sigma2 * (k + 1.0).powi(2) / (k * d.delta_star * d.delta_star);
    let block = d.allocation.block();
    let min_n = d.allocation.min_total();
    let mut n = d.allocation.round_up(approx).max(min_n);
    if power(n, sigma2, d.delta_star, d)? >= d.target_power {
        while n > min_n && power(n - block, sigma2, d.delta_star, d)? >= d.target_power {
            n -= block;
        }
    } else {
        loop {
            n += block;
            if power(n, sigma2, d.delta_star, d)? >= d.target_power {
                break;
            }
        }
    }
    Ok(n)
}

/// Smallest allocatable total size satisfying the target power for the
/// assumed effect `delta_star` at variance `sigma2`.
pub fn required_n(sigma2: f64, d: &DesignParams) -> Result<u64> {
    let n = required_n_unbounded(sigma2, d)?;
    if let Some(cap) = d.n_max {
        if n > cap {
            return Err(Error::CapExceeded { required: n, cap });
        }
    }
    Ok(n)
}

// Adaptive Simpson with interval splitting capped at depth 15 (2^15
// subintervals).
fn adaptive_simpson<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, tol: f64) -> f64 {
    fn simpson<F: Fn(f64) -> f64>(f: &F, a: f64, fa: f64, b: f64, fb: f64) -> (f64, f64, f64) {
        let m = 0.5 * (a + b);
        let fm = f(m);
        ((b - a) / 6.0 * (fa + 4.0 * fm + fb), m, fm)
    }
    #[allow(clippy::too_many_arguments)]
    fn recurse<F: Fn(f64) -> f64>(
        f: &F,
        a: f64,
        fa: f64,
        b: f64,
        fb: f64,
        whole: f64,
        m: f64,
        fm: f64,
        tol: f64,
        depth: u32,
    ) -> f64 {
        let (left, lm, flm) = simpson(f, a, fa, m, fm);
        let (right, rm, frm) = simpson(f, m, fm, b, fb);
        let delta = left + right - whole;
        if depth >= 15 || delta.abs() <= 15.0 * tol {
            left + right + delta / 15.0
        } else {
            recurse(f, a, fa, m, fm, left, lm, flm, 0.5 * tol, depth + 1)
                + recurse(f, m, fm, b, fb, right, rm, frm, 0.5 * tol, depth + 1)
        }
    }
    let fa = f(a);
    let fb = f(b);
    let (whole, m, fm) = simpson(f, a, fa, b, fb);
    recurse(f, a, fa, b, fb, whole, m, fm, tol, 0)
}

fn inv_gamma_log_pdf(x: f64, shape: f64, rate: f64) -> f64 {
    shape * rate.ln() - ln_gamma(shape) - (shape + 1.0) * x.ln() - rate / x
}

/// Power averaged over the prior of sigma^2: the integral of
/// `power(n, x, delta_star)` against the inverse-Gamma mixture density,
/// computed by per-component adaptive quadrature on the variance scale.
pub fn expected_power(n: u64, d: &DesignParams, prior: &GammaMixture) -> Result<f64> {
    let (n_t, n_c) = d.allocation.group_sizes(n)?;
    let df = (n - 2) as f64;
    let crit = t_quantile(1.0 - d.alpha, df)?;
    let inv_se2 = 1.0 / (1.0 / n_t as f64 + 1.0 / n_c as f64);
    let mut total = 0.0;
    let l = prior.len() as f64;
    // Panel boundaries at component quantiles so the adaptive rule cannot
    // skip over the density peak of a wide-tailed component.
    const PANEL_PROBS: [f64; 13] = [
        1e-8, 1e-4, 0.01, 0.05, 0.1, 0.25, 0.5, 0.75, 0.9, 0.95, 0.99, 0.9999, 1.0 - 1e-8,
    ];
    for c in prior.components() {
        let integrand = |x: f64| {
            let ncp = d.delta_star * (inv_se2 / x).sqrt();
            let b = 1.0 - noncentral_t_cdf(crit, df, ncp).unwrap_or(f64::NAN);
            b * inv_gamma_log_pdf(x, c.shape, c.rate).exp()
        };
        // Variance-scale quantile at p is the reciprocal precision quantile.
        let knots: Vec<f64> = PANEL_PROBS
            .iter()
            .rev()
            .map(|&p| Ok(1.0 / gamma_quantile(p, c.shape, c.rate)?))
            .collect::<Result<_>>()?;
        let tol = 1e-6 / (l * (knots.len() - 1) as f64);
        let mut integral = 0.0;
        for pair in knots.windows(2) {
            integral += adaptive_simpson(&integrand, pair[0], pair[1], tol);
        }
        total += c.weight * integral;
    }
    Ok(total.clamp(0.0, 1.0))
}

pub(crate) fn required_n_expected_power_unbounded(
    d: &DesignParams,
    prior: &GammaMixture,
) -> Result<u64> {
    let block = d.allocation.block();
    let min_n = d.allocation.min_total();
    // Expected power is increasing in n; bracket by doubling then bisect on
    // block indices.
    let mut hi = min_n;
    let mut lo = min_n;
    while expected_power(hi, d, prior)? < d.target_power {
        lo = hi;
        hi = d.allocation.round_up((hi * 2) as f64);
        if hi > 1 << 40 {
            return Err(Error::invalid(
                "expected-power sample size search exceeded 2^40; prior too diffuse",
            ));
        }
    }
    while hi - lo > block {
        let mid_blocks = (lo / block + hi / block) / 2;
        let mid = mid_blocks * block;
        if expected_power(mid, d, prior)? < d.target_power {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(hi)
}

/// Smallest allocatable total whose expected power reaches the target.
///
/// Note this is in general different from plugging a point estimate of
/// sigma^2 into `required_n`.
pub fn required_n_expected_power(d: &DesignParams, prior: &GammaMixture) -> Result<u64> {
    let n = required_n_expected_power_unbounded(d, prior)?;
    if let Some(cap) = d.n_max {
        if n > cap {
            return Err(Error::CapExceeded { required: n, cap });
        }
    }
    Ok(n)
}

/// How a prior is turned into a planned sample size.
///
/// Point estimates are always taken on the sigma^2 scale; planning on the
/// sigma or precision scale would differ because these estimators are not
/// transformation invariant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanningRule {
    Mean,
    Median,
    Quantile(f64),
    ExpectedPower,
}

/// Plan the total sample size from a variance prior.
pub fn plan_from_prior(d: &DesignParams, prior: &GammaMixture, rule: PlanningRule) -> Result<u64> {
    match rule {
        PlanningRule::Mean => required_n(prior.mean(Scale::Variance)?, d),
        PlanningRule::Median => required_n(prior.quantile(0.5, Scale::Variance)?, d),
        PlanningRule::Quantile(p) => required_n(prior.quantile(p, Scale::Variance)?, d),
        PlanningRule::ExpectedPower => required_n_expected_power(d, prior),
    }
}
