//! Meta-analytic-predictive priors for the outcome variance: a Bayesian
//! random-effects meta-analysis of historical log-variances, a Gamma-mixture
//! approximation of the predictive precision, effective sample size, and
//! robustification.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::digamma;

use crate::distmath::{GammaComponent, GammaMixture};
use crate::error::{Error, Result};

/// One historical trial: pooled sample variance and its degrees of freedom.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistoricalTrialSummary {
    pub sample_variance: f64,
    pub df: u32,
}

impl HistoricalTrialSummary {
    pub fn new(sample_variance: f64, df: u32) -> Result<Self> {
        if !(sample_variance > 0.0) {
            return Err(Error::invalid(format!("sample variance must be positive, got {sample_variance}")));
        }
        if df < 1 {
            return Err(Error::invalid("degrees of freedom must be >= 1"));
        }
        Ok(HistoricalTrialSummary { sample_variance, df })
    }
}

/// Read historical trials from CSV with columns trial_id, sample_variance, df.
pub fn read_trials_csv<R: std::io::Read>(reader: R) -> Result<Vec<HistoricalTrialSummary>> {
    #[derive(Deserialize)]
    struct Row {
        #[allow(dead_code)]
        trial_id: String,
        sample_variance: f64,
        df: u32,
    }
    let mut out = Vec::new();
    let mut rdr = csv::Reader::from_reader(reader);
    for row in rdr.deserialize::<Row>() {
        let row = row?;
        out.push(HistoricalTrialSummary::new(row.sample_variance, row.df)?);
    }
    Ok(out)
}

/// Hyperpriors and sampler settings for the hierarchical model on
/// log-variances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HierarchicalModelConfig {
    /// Scale of the normal prior on the log-variance mean mu.
    pub mu_prior_sd: f64,
    /// Scale of the half-normal prior on the between-trial sd tau.
    pub tau_prior_scale: f64,
    pub chains: usize,
    pub iterations: usize,
    pub burn_in: usize,
    pub thinning: usize,
    pub seed: u64,
    pub rhat_threshold: f64,
}

impl Default for HierarchicalModelConfig {
    fn default() -> Self {
        HierarchicalModelConfig {
            mu_prior_sd: 10.0,
            tau_prior_scale: 1.0,
            chains: 4,
            iterations: 25_000,
            burn_in: 5_000,
            thinning: 4,
            seed: 1,
            rhat_threshold: 1.05,
        }
    }
}

impl HierarchicalModelConfig {
    fn validate(&self) -> Result<()> {
        if !(self.mu_prior_sd > 0.0 && self.tau_prior_scale > 0.0) {
            return Err(Error::invalid("hyperprior scales must be positive"));
        }
        if self.chains < 2 {
            return Err(Error::invalid("need at least 2 chains"));
        }
        if self.iterations <= self.burn_in {
            return Err(Error::invalid("iterations must exceed burn-in"));
        }
        if self.thinning == 0 {
            return Err(Error::invalid("thinning must be >= 1"));
        }
        Ok(())
    }
}

/// Convergence and mixing diagnostics of one sampler run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    /// Split R-hat per sampled parameter.
    pub rhat: Vec<(String, f64)>,
    /// Mean post-burn-in acceptance rate per Metropolis parameter.
    pub acceptance: Vec<(String, f64)>,
    pub converged: bool,
}

/// Result of fitting the MAP prior.
#[derive(Debug, Clone, Serialize)]
pub struct MapFitResult {
    /// Predictive draws of the log-variance theta_new.
    #[serde(skip)]
    pub theta_new: Vec<f64>,
    /// Predictive draws of the precision omega_new = exp(-theta_new).
    #[serde(skip)]
    pub precision_samples: Vec<f64>,
    /// Companion draws of theta_new from the fixed-effect (tau = 0) run.
    #[serde(skip)]
    pub fixed_effect_theta: Vec<f64>,
    pub mixture: GammaMixture,
    pub ess: f64,
    pub diagnostics: Diagnostics,
}

fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

fn chain_rng(seed: u64, chain: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix64(mix64(seed) ^ chain))
}

fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(rand_distr::StandardNormal)
}

// Log-likelihood of theta_j = log sigma_j^2 given the trial's variance
// estimate: sigma_hat^2 | sigma^2 ~ Gamma(nu/2, nu/(2 sigma^2)).
fn trial_log_lik(theta: f64, trial: &HistoricalTrialSummary) -> f64 {
    let half_nu = 0.5 * trial.df as f64;
    -half_nu * theta - half_nu * trial.sample_variance * (-theta).exp()
}

struct AdaptiveStep {
    scale: f64,
    accepted: u32,
    proposed: u32,
}

impl AdaptiveStep {
    fn new(scale: f64) -> Self {
        AdaptiveStep { scale, accepted: 0, proposed: 0 }
    }
    // Robbins-Monro style batch adaptation toward 0.44 acceptance.
    fn adapt(&mut self) {
        if self.proposed == 0 {
            return;
        }
        let rate = self.accepted as f64 / self.proposed as f64;
        self.scale = (self.scale * ((rate - 0.44) * 0.5).exp()).clamp(1e-4, 50.0);
        self.accepted = 0;
        self.proposed = 0;
    }
}

fn metropolis<R: Rng + ?Sized, F: Fn(f64) -> f64>(
    rng: &mut R,
    current: f64,
    step: &mut AdaptiveStep,
    log_target: F,
) -> (f64, bool) {
    step.proposed += 1;
    let proposal = current + step.scale * standard_normal(rng);
    let log_ratio = log_target(proposal) - log_target(current);
    if log_ratio >= 0.0 || rng.random::<f64>().ln() < log_ratio {
        step.accepted += 1;
        (proposal, true)
    } else {
        (current, false)
    }
}

struct ChainOutput {
    mu: Vec<f64>,
    tau: Vec<f64>,
    theta: Vec<Vec<f64>>,
    theta_new: Vec<f64>,
    acceptance: Vec<f64>,
}

fn run_chain(
    trials: &[HistoricalTrialSummary],
    cfg: &HierarchicalModelConfig,
    chain: u64,
) -> ChainOutput {
    let j = trials.len();
    let mut rng = chain_rng(cfg.seed, chain);
    let mut theta: Vec<f64> = trials.iter().map(|t| t.sample_variance.ln()).collect();
    let mut mu = theta.iter().sum::<f64>() / j as f64;
    let mut tau = {
        let var = theta.iter().map(|t| (t - mu).powi(2)).sum::<f64>() / j as f64;
        (var.sqrt()).max(0.05)
    };
    let mut tau_step = AdaptiveStep::new(0.5);
    let mut theta_steps: Vec<AdaptiveStep> =
        trials.iter().map(|t| AdaptiveStep::new(2.0 / (t.df as f64).sqrt().max(1.0))).collect();
    let mu_prec0 = 1.0 / (cfg.mu_prior_sd * cfg.mu_prior_sd);
    let tau_scale2 = cfg.tau_prior_scale * cfg.tau_prior_scale;

    let retained = (cfg.iterations - cfg.burn_in).div_ceil(cfg.thinning);
    let mut out = ChainOutput {
        mu: Vec::with_capacity(retained),
        tau: Vec::with_capacity(retained),
        theta: vec![Vec::with_capacity(retained); j],
        theta_new: Vec::with_capacity(retained),
        acceptance: vec![0.0; j + 1],
    };
    let mut accept_counts = vec![0u64; j + 1];
    let mut post_burn_iters = 0u64;

    for iter in 0..cfg.iterations {
        let in_burn_in = iter < cfg.burn_in;

        // mu: conjugate normal full conditional.
        let tau2 = tau * tau;
        let prec = j as f64 / tau2 + mu_prec0;
        let mean = theta.iter().sum::<f64>() / tau2 / prec;
        mu = mean + standard_normal(&mut rng) / prec.sqrt();

        // tau: random-walk Metropolis with half-normal prior.
        let theta_snapshot = theta.clone();
        let mu_snapshot = mu;
        let (new_tau, tau_acc) = metropolis(&mut rng, tau, &mut tau_step, |t| {
            if t <= 0.0 {
                return f64::NEG_INFINITY;
            }
            let ss: f64 = theta_snapshot.iter().map(|th| (th - mu_snapshot).powi(2)).sum();
            -(j as f64) * t.ln() - 0.5 * ss / (t * t) - 0.5 * t * t / tau_scale2
        });
        tau = new_tau;
        if !in_burn_in && tau_acc {
            accept_counts[0] += 1;
        }

        // theta_j: random-walk Metropolis against likelihood x N(mu, tau^2).
        let tau2 = tau * tau;
        for (idx, trial) in trials.iter().enumerate() {
            let (new_theta, acc) = metropolis(&mut rng, theta[idx], &mut theta_steps[idx], |th| {
                trial_log_lik(th, trial) - 0.5 * (th - mu).powi(2) / tau2
            });
            theta[idx] = new_theta;
            if !in_burn_in && acc {
                accept_counts[idx + 1] += 1;
            }
        }

        if in_burn_in {
            if (iter + 1) % 50 == 0 {
                tau_step.adapt();
                for s in &mut theta_steps {
                    s.adapt();
                }
            }
        } else {
            post_burn_iters += 1;
            if (iter - cfg.burn_in) % cfg.thinning == 0 {
                out.mu.push(mu);
                out.tau.push(tau);
                for (idx, t) in theta.iter().enumerate() {
                    out.theta[idx].push(*t);
                }
                out.theta_new.push(mu + tau * standard_normal(&mut rng));
            }
        }
    }
    for (idx, count) in accept_counts.iter().enumerate() {
        out.acceptance[idx] = *count as f64 / post_burn_iters as f64;
    }
    out
}

// Fixed-effect companion: tau pinned to 0, all theta_j = mu; single
// random-walk Metropolis parameter.
fn run_fixed_effect_chain(
    trials: &[HistoricalTrialSummary],
    cfg: &HierarchicalModelConfig,
    chain: u64,
) -> Vec<f64> {
    let mut rng = chain_rng(cfg.seed ^ 0x5a5a_5a5a, chain);
    let pooled: f64 = {
        let total_df: f64 = trials.iter().map(|t| t.df as f64).sum();
        trials.iter().map(|t| t.df as f64 * t.sample_variance).sum::<f64>() / total_df
    };
    let mut mu = pooled.ln();
    let mut step = AdaptiveStep::new(0.2);
    let mu_prec0 = 1.0 / (cfg.mu_prior_sd * cfg.mu_prior_sd);
    let mut out = Vec::new();
    for iter in 0..cfg.iterations {
        let (new_mu, _) = metropolis(&mut rng, mu, &mut step, |m| {
            trials.iter().map(|t| trial_log_lik(m, t)).sum::<f64>() - 0.5 * m * m * mu_prec0
        });
        mu = new_mu;
        if iter < cfg.burn_in {
            if (iter + 1) % 50 == 0 {
                step.adapt();
            }
        } else if (iter - cfg.burn_in) % cfg.thinning == 0 {
            out.push(mu);
        }
    }
    out
}

fn split_rhat(chains: &[&[f64]]) -> f64 {
    // Split each chain in half; compute the usual potential scale reduction.
    let mut halves: Vec<&[f64]> = Vec::with_capacity(chains.len() * 2);
    for c in chains {
        let mid = c.len() / 2;
        halves.push(&c[..mid]);
        halves.push(&c[mid..]);
    }
    let n = halves.iter().map(|h| h.len()).min().unwrap_or(0);
    if n < 4 {
        return f64::NAN;
    }
    let m = halves.len() as f64;
    let means: Vec<f64> = halves.iter().map(|h| h[..n].iter().sum::<f64>() / n as f64).collect();
    let grand = means.iter().sum::<f64>() / m;
    let b = n as f64 / (m - 1.0) * means.iter().map(|x| (x - grand).powi(2)).sum::<f64>();
    let w = halves
        .iter()
        .zip(&means)
        .map(|(h, mean)| h[..n].iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0))
        .sum::<f64>()
        / m;
    if w <= 0.0 {
        return 1.0;
    }
    let var_plus = (n as f64 - 1.0) / n as f64 * w + b / n as f64;
    (var_plus / w).sqrt()
}

fn variance(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
}

/// Fit the MAP prior from historical trials: MCMC over (mu, tau, theta_j),
/// predictive draws of theta_new, a Gamma-mixture approximation of the
/// predictive precision, and the ratio-method effective sample size.
pub fn fit_map(trials: &[HistoricalTrialSummary], cfg: &HierarchicalModelConfig) -> Result<MapFitResult> {
    if trials.len() < 2 {
        return Err(Error::invalid("meta-analysis needs at least 2 historical trials"));
    }
    cfg.validate()?;

    let chains: Vec<ChainOutput> =
        (0..cfg.chains).map(|c| run_chain(trials, cfg, c as u64)).collect();

    // Merge deterministically by chain index.
    let mut theta_new = Vec::new();
    let mut acceptance_acc = vec![0.0; trials.len() + 1];
    for c in &chains {
        theta_new.extend_from_slice(&c.theta_new);
        for (a, v) in acceptance_acc.iter_mut().zip(&c.acceptance) {
            *a += v / cfg.chains as f64;
        }
    }
    let precision_samples: Vec<f64> = theta_new.iter().map(|t| (-t).exp()).collect();

    let mut rhat = Vec::new();
    let mu_chains: Vec<&[f64]> = chains.iter().map(|c| c.mu.as_slice()).collect();
    rhat.push(("mu".to_string(), split_rhat(&mu_chains)));
    let tau_chains: Vec<&[f64]> = chains.iter().map(|c| c.tau.as_slice()).collect();
    rhat.push(("tau".to_string(), split_rhat(&tau_chains)));
    for idx in 0..trials.len() {
        let t_chains: Vec<&[f64]> = chains.iter().map(|c| c.theta[idx].as_slice()).collect();
        rhat.push((format!("theta_{idx}"), split_rhat(&t_chains)));
    }
    let converged = rhat.iter().all(|(_, r)| r.is_finite() && *r <= cfg.rhat_threshold);

    let mut acceptance = Vec::new();
    acceptance.push(("tau".to_string(), acceptance_acc[0]));
    for idx in 0..trials.len() {
        acceptance.push((format!("theta_{idx}"), acceptance_acc[idx + 1]));
    }

    let fixed_effect_theta: Vec<f64> =
        (0..cfg.chains).flat_map(|c| run_fixed_effect_chain(trials, cfg, c as u64)).collect();

    let mixture = fit_gamma_mixture(&precision_samples, 3)?;
    let total_df: f64 = trials.iter().map(|t| t.df as f64).sum();
    let het_var = variance(&theta_new);
    if het_var <= 0.0 {
        return Err(Error::invalid("degenerate predictive distribution (zero variance)"));
    }
    let ess = total_df * variance(&fixed_effect_theta) / het_var;

    Ok(MapFitResult {
        theta_new,
        precision_samples,
        fixed_effect_theta,
        mixture,
        ess,
        diagnostics: Diagnostics { rhat, acceptance, converged },
    })
}

/// Ratio-method effective sample size: total historical degrees of freedom
/// scaled by the ratio of the tau = 0 predictive variance to the
/// heterogeneity-aware predictive variance, both on the log-variance scale.
pub fn effective_sample_size(fit: &MapFitResult, trials: &[HistoricalTrialSummary]) -> Result<f64> {
    if fit.theta_new.len() < 2 || fit.fixed_effect_theta.len() < 2 {
        return Err(Error::invalid("fit does not carry predictive samples"));
    }
    let het = variance(&fit.theta_new);
    if het <= 0.0 {
        return Err(Error::invalid("heterogeneity predictive variance is zero"));
    }
    let total_df: f64 = trials.iter().map(|t| t.df as f64).sum();
    Ok(total_df * variance(&fit.fixed_effect_theta) / het)
}

/// Effective sample size of a Gamma precision prior: 2a for one component,
/// extended to the weighted sum over components for mixtures.
pub fn ess_gamma(m: &GammaMixture) -> f64 {
    m.components().iter().map(|c| c.weight * 2.0 * c.shape).sum()
}

/// Robustified prior: mix a vague conjugate prior into the informative one
/// with prior data-conflict probability `w_r`.
pub fn robustify(informative: &GammaMixture, w_r: f64, vague: &GammaMixture) -> Result<GammaMixture> {
    if !(0.0..=1.0).contains(&w_r) {
        return Err(Error::invalid(format!("robust weight must be in [0,1], got {w_r}")));
    }
    if w_r == 0.0 {
        return Ok(informative.clone());
    }
    if w_r == 1.0 {
        return Ok(vague.clone());
    }
    let mut components = Vec::new();
    for c in vague.components() {
        components.push(GammaComponent::new(w_r * c.weight, c.shape, c.rate));
    }
    for c in informative.components() {
        components.push(GammaComponent::new((1.0 - w_r) * c.weight, c.shape, c.rate));
    }
    GammaMixture::new(components)
}

/// Single-Gamma prior with a given sigma^2-scale mean and effective sample
/// size: shape ESS/2, rate sigma2_mean * (ESS/2 - 1).
pub fn scenario_prior(sigma2_mean: f64, ess: f64) -> Result<GammaMixture> {
    if !(ess > 2.0) {
        return Err(Error::invalid(format!("ess must exceed 2 for the mean to exist, got {ess}")));
    }
    if !(sigma2_mean > 0.0) {
        return Err(Error::invalid(format!("sigma2 mean must be positive, got {sigma2_mean}")));
    }
    let shape = 0.5 * ess;
    GammaMixture::single(shape, sigma2_mean * (shape - 1.0))
}

// ---------------------------------------------------------------------------
// Gamma-mixture EM

fn gamma_log_pdf(x: f64, shape: f64, rate: f64) -> f64 {
    shape * rate.ln() - statrs::function::gamma::ln_gamma(shape) + (shape - 1.0) * x.ln() - rate * x
}

// Solve ln(a) - digamma(a) = target for the shape of a Gamma MLE.
fn solve_shape(target: f64) -> f64 {
    debug_assert!(target > 0.0);
    // Standard closed-form start.
    let mut a = (3.0 - target + ((target - 3.0).powi(2) + 24.0 * target).sqrt()) / (12.0 * target);
    a = a.clamp(1e-6, 1e8);
    let f = |a: f64| a.ln() - digamma(a) - target;
    let (mut lo, mut hi) = (a, a);
    while f(lo) < 0.0 {
        lo /= 2.0;
        if lo < 1e-8 {
            break;
        }
    }
    while f(hi) > 0.0 {
        hi *= 2.0;
        if hi > 1e9 {
            break;
        }
    }
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if f(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-12 * hi {
            break;
        }
    }
    0.5 * (lo + hi)
}

struct EmFit {
    components: Vec<GammaComponent>,
    log_lik: f64,
}

fn em_fit(samples: &[f64], init: &[GammaComponent]) -> Option<EmFit> {
    let n = samples.len();
    let l = init.len();
    let mut comps = init.to_vec();
    let mut prev_ll = f64::NEG_INFINITY;
    let mut resp = vec![0.0; n * l];
    for _iter in 0..2000 {
        // E-step.
        let mut ll = 0.0;
        for (i, &x) in samples.iter().enumerate() {
            let mut logs = [0.0f64; 8];
            let mut max = f64::NEG_INFINITY;
            for (k, c) in comps.iter().enumerate() {
                let v = c.weight.ln() + gamma_log_pdf(x, c.shape, c.rate);
                logs[k] = v;
                max = max.max(v);
            }
            let mut total = 0.0;
            for k in 0..l {
                let e = (logs[k] - max).exp();
                resp[i * l + k] = e;
                total += e;
            }
            for k in 0..l {
                resp[i * l + k] /= total;
            }
            ll += max + total.ln();
        }
        // M-step: weighted Gamma MLE per component.
        for k in 0..l {
            let mut rw = 0.0;
            let mut rx = 0.0;
            let mut rlx = 0.0;
            for (i, &x) in samples.iter().enumerate() {
                let r = resp[i * l + k];
                rw += r;
                rx += r * x;
                rlx += r * x.ln();
            }
            if rw < 1e-12 {
                return None;
            }
            let mean = rx / rw;
            let target = mean.ln() - rlx / rw;
            if !(target > 0.0) || !target.is_finite() {
                return None;
            }
            let shape = solve_shape(target);
            comps[k] = GammaComponent::new(rw / n as f64, shape, shape / mean);
        }
        if (ll - prev_ll).abs() < 1e-8 * ll.abs().max(1.0) {
            prev_ll = ll;
            break;
        }
        prev_ll = ll;
    }
    if !prev_ll.is_finite() {
        return None;
    }
    Some(EmFit { components: comps, log_lik: prev_ll })
}

fn quantile_partition_init(sorted: &[f64], l: usize, jitter: f64, rng: &mut ChaCha8Rng) -> Vec<GammaComponent> {
    let n = sorted.len();
    let mut comps = Vec::with_capacity(l);
    for k in 0..l {
        let mut lo = k as f64 / l as f64;
        let mut hi = (k + 1) as f64 / l as f64;
        if jitter > 0.0 {
            lo = (lo + jitter * (rng.random::<f64>() - 0.5) / l as f64).clamp(0.0, 1.0);
            hi = (hi + jitter * (rng.random::<f64>() - 0.5) / l as f64).clamp(lo + 1e-3, 1.0);
        }
        let a = ((lo * n as f64) as usize).min(n - 1);
        let b = ((hi * n as f64) as usize).clamp(a + 1, n);
        let block = &sorted[a..b];
        let mean = block.iter().sum::<f64>() / block.len() as f64;
        let var = block.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / block.len() as f64;
        let var = var.max(1e-12 * mean * mean + 1e-300);
        let shape = (mean * mean / var).clamp(0.05, 1e6);
        comps.push(GammaComponent::new(1.0 / l as f64, shape, shape / mean));
    }
    comps
}

/// Fit a Gamma mixture to precision draws by EM, selecting the component
/// count among 1..=l_max by BIC. Weights are returned sorted descending.
pub fn fit_gamma_mixture(samples: &[f64], l_max: usize) -> Result<GammaMixture> {
    if samples.len() < 1000 {
        return Err(Error::invalid(format!("need at least 1000 samples, got {}", samples.len())));
    }
    if !(1..=5).contains(&l_max) {
        return Err(Error::invalid(format!("l_max must be in 1..=5, got {l_max}")));
    }
    if samples.iter().any(|&x| !(x > 0.0) || !x.is_finite()) {
        return Err(Error::invalid("precision samples must be positive and finite"));
    }
    let mean = samples.iter().sum::<f64>() / samples.len() as f64;
    let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / samples.len() as f64;
    if var < 1e-14 * mean * mean {
        return Err(Error::DegenerateFit("samples are (numerically) constant".into()));
    }

    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite samples"));

    let n = samples.len() as f64;
    let mut best: Option<(f64, Vec<GammaComponent>)> = None; // (bic, components)
    for l in 1..=l_max {
        let mut best_l: Option<EmFit> = None;
        for restart in 0..10 {
            let mut rng =
                ChaCha8Rng::seed_from_u64(mix64(0xe11 ^ ((l as u64) << 8) ^ restart as u64));
            let jitter = if restart == 0 { 0.0 } else { 0.8 };
            let init = quantile_partition_init(&sorted, l, jitter, &mut rng);
            if let Some(fit) = em_fit(samples, &init) {
                if best_l.as_ref().map_or(true, |b| fit.log_lik > b.log_lik) {
                    best_l = Some(fit);
                }
            }
        }
        let Some(fit) = best_l else { continue };
        // Degenerate component: fall back to fewer components.
        if fit.components.iter().any(|c| c.weight < 1e-4) {
            continue;
        }
        let params = (3 * l - 1) as f64;
        let bic = -2.0 * fit.log_lik + params * n.ln();
        if best.as_ref().map_or(true, |(b, _)| bic < *b) {
            best = Some((bic, fit.components));
        }
    }
    let (_, mut components) =
        best.ok_or_else(|| Error::DegenerateFit("no stable mixture fit at any component count".into()))?;
    components.sort_by(|a, b| b.weight.partial_cmp(&a.weight).expect("finite weights"));
    let total: f64 = components.iter().map(|c| c.weight).sum();
    for c in &mut components {
        c.weight /= total;
    }
    GammaMixture::new(components)
}
