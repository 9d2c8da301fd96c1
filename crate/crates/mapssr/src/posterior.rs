//! Conjugate updating of Gamma-mixture precision priors with internal-pilot
//! data, plus the blinded variance estimators and Bayes point estimators of
//! sigma^2.

use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::distmath::{GammaComponent, GammaMixture, Scale};
use crate::error::{Error, Result};

/// Sufficient statistics of the internal pilot study.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PilotSummary {
    pub n_treatment: u64,
    pub n_control: u64,
    pub mean_treatment: f64,
    pub mean_control: f64,
    pub pooled_variance: f64,
}

impl PilotSummary {
    pub fn new(
        n_treatment: u64,
        n_control: u64,
        mean_treatment: f64,
        mean_control: f64,
        pooled_variance: f64,
    ) -> Result<Self> {
        if n_treatment < 2 || n_control < 2 {
            return Err(Error::invalid("each pilot group needs at least 2 observations"));
        }
        if !(pooled_variance >= 0.0) {
            return Err(Error::invalid(format!("pooled variance must be >= 0, got {pooled_variance}")));
        }
        Ok(PilotSummary { n_treatment, n_control, mean_treatment, mean_control, pooled_variance })
    }

    pub fn from_samples(treatment: &[f64], control: &[f64]) -> Result<Self> {
        if treatment.len() < 2 || control.len() < 2 {
            return Err(Error::invalid("each pilot group needs at least 2 observations"));
        }
        let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
        let m_t = mean(treatment);
        let m_c = mean(control);
        let ss: f64 = treatment.iter().map(|x| (x - m_t).powi(2)).sum::<f64>()
            + control.iter().map(|x| (x - m_c).powi(2)).sum::<f64>();
        let n = (treatment.len() + control.len()) as f64;
        PilotSummary::new(
            treatment.len() as u64,
            control.len() as u64,
            m_t,
            m_c,
            ss / (n - 2.0),
        )
    }

    pub fn total(&self) -> u64 {
        self.n_treatment + self.n_control
    }
}

/// Block sums of a randomized block design with `block_size` observations
/// per block, equally allocated between arms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockSummary {
    pub block_sums: Vec<f64>,
    pub block_size: u32,
}

impl BlockSummary {
    pub fn new(block_sums: Vec<f64>, block_size: u32) -> Result<Self> {
        if block_sums.len() < 2 {
            return Err(Error::invalid("need at least 2 blocks"));
        }
        if block_size < 2 || block_size % 2 != 0 {
            return Err(Error::invalid(format!("block size must be even and >= 2, got {block_size}")));
        }
        Ok(BlockSummary { block_sums, block_size })
    }

    pub fn blocks(&self) -> u64 {
        self.block_sums.len() as u64
    }
}

/// Conjugate update of a Gamma-mixture precision prior with a scaled
/// variance estimate carrying `df` degrees of freedom.
///
/// Component l becomes Gamma(a_l + df/2, b_l + (df/2) * var) and the weights
/// are reweighted by the marginal likelihood of each component, computed in
/// log space and normalized by log-sum-exp.
pub fn update_with_variance(prior: &GammaMixture, var_estimate: f64, df: f64) -> Result<GammaMixture> {
    if !(var_estimate >= 0.0) {
        return Err(Error::invalid(format!("variance estimate must be >= 0, got {var_estimate}")));
    }
    if !(df > 0.0) {
        return Err(Error::invalid(format!("degrees of freedom must be positive, got {df}")));
    }
    let half_df = 0.5 * df;
    let mut log_r = Vec::with_capacity(prior.len());
    let mut updated = Vec::with_capacity(prior.len());
    for c in prior.components() {
        let shape = c.shape + half_df;
        let rate = c.rate + half_df * var_estimate;
        let lr = c.weight.ln() + ln_gamma(shape) - shape * rate.ln() + c.shape * c.rate.ln()
            - ln_gamma(c.shape);
        log_r.push(lr);
        updated.push((shape, rate));
    }
    let max = log_r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut weights: Vec<f64> = log_r.iter().map(|lr| (lr - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= total;
        if *w < 1e-300 {
            *w = 0.0;
        }
    }
    let total: f64 = weights.iter().sum();
    let components: Vec<GammaComponent> = weights
        .iter()
        .zip(&updated)
        .filter(|(w, _)| **w > 0.0)
        .map(|(w, (a, b))| GammaComponent::new(w / total, *a, *b))
        .collect();
    GammaMixture::new(components)
}

/// Posterior mean of sigma^2: the weighted mean of the inverse-Gamma
/// component means.
pub fn posterior_mean_sigma2(post: &GammaMixture) -> Result<f64> {
    post.mean(Scale::Variance)
}

/// Posterior median of sigma^2, computed iteratively.
pub fn posterior_median_sigma2(post: &GammaMixture) -> Result<f64> {
    post.quantile(0.5, Scale::Variance)
}

/// Blinded one-sample variance estimator, expressed through the pilot
/// summary statistics. Equals the plain sample variance of the pooled
/// blinded observations.
pub fn one_sample_variance(p: &PilotSummary) -> Result<f64> {
    let n1 = p.total();
    if n1 < 3 {
        return Err(Error::invalid("one-sample estimator needs a pilot of at least 3"));
    }
    let n1f = n1 as f64;
    let diff = p.mean_treatment - p.mean_control;
    Ok((n1f - 2.0) / (n1f - 1.0) * p.pooled_variance
        + (p.n_treatment * p.n_control) as f64 / (n1f * (n1f - 1.0)) * diff * diff)
}

/// Xing-Ganju blinded variance estimator: the sample variance of the scaled
/// block sums S_i = T_i / sqrt(m). The associated degrees of freedom are
/// b - 1 rather than n1 - 2.
pub fn xing_ganju_variance(blk: &BlockSummary) -> Result<f64> {
    let b = blk.blocks();
    if b < 2 {
        return Err(Error::invalid("Xing-Ganju estimator needs at least 2 blocks"));
    }
    let m = blk.block_size as f64;
    let scaled: Vec<f64> = blk.block_sums.iter().map(|t| t / m.sqrt()).collect();
    let mean = scaled.iter().sum::<f64>() / b as f64;
    let ss: f64 = scaled.iter().map(|s| (s - mean).powi(2)).sum();
    Ok(ss / (b as f64 - 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn st_johns() -> GammaMixture {
        GammaMixture::new(vec![
            GammaComponent::new(0.16, 4.6, 140.4),
            GammaComponent::new(0.84, 18.2, 689.3),
        ])
        .unwrap()
    }

    // Brute-force numerical posterior: normalized product of the prior
    // density and the Gamma likelihood of the variance estimate on a dense
    // omega grid; returns the CDF evaluated at the grid points.
    fn grid_posterior_cdf(prior: &GammaMixture, var: f64, df: f64, grid: &[f64]) -> Vec<f64> {
        let log_lik = |omega: f64| 0.5 * df * omega.ln() - 0.5 * df * var * omega;
        let log_dens: Vec<f64> = grid
            .iter()
            .map(|&w| prior.pdf(w, Scale::Precision).ln() + log_lik(w))
            .collect();
        let max = log_dens.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let dens: Vec<f64> = log_dens.iter().map(|l| (l - max).exp()).collect();
        // Cumulative trapezoid.
        let mut cum = vec![0.0; grid.len()];
        for i in 1..grid.len() {
            cum[i] = cum[i - 1] + 0.5 * (dens[i] + dens[i - 1]) * (grid[i] - grid[i - 1]);
        }
        let total = cum[grid.len() - 1];
        cum.iter().map(|c| c / total).collect()
    }

    fn sup_distance_to_grid(post: &GammaMixture, prior: &GammaMixture, var: f64, df: f64) -> f64 {
        let lo = post.quantile(1e-9, Scale::Precision).unwrap().min(prior.quantile(1e-9, Scale::Precision).unwrap());
        let hi = post.quantile(1.0 - 1e-9, Scale::Precision).unwrap().max(prior.quantile(1.0 - 1e-9, Scale::Precision).unwrap());
        let n = 100_000;
        let grid: Vec<f64> = (0..=n).map(|i| lo + (hi - lo) * i as f64 / n as f64).collect();
        let numeric = grid_posterior_cdf(prior, var, df, &grid);
        grid.iter()
            .zip(&numeric)
            .map(|(&w, &f)| (post.cdf(w, Scale::Precision) - f).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn vanishing_df_leaves_prior_unchanged() {
        let prior = st_johns();
        let post = update_with_variance(&prior, 40.0, 1e-12).unwrap();
        for (p, q) in prior.components().iter().zip(post.components()) {
            assert!((p.weight - q.weight).abs() < 1e-9);
            assert!((p.shape - q.shape).abs() < 1e-9);
            assert!((p.rate - q.rate).abs() < 1e-6);
        }
    }

    #[test]
    fn single_component_conjugacy() {
        let prior = GammaMixture::single(3.0, 2.0).unwrap();
        let post = update_with_variance(&prior, 1.0, 58.0).unwrap();
        let c = post.components()[0];
        assert_abs_diff_eq!(c.weight, 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(c.shape, 32.0, epsilon = 1e-12);
        assert_abs_diff_eq!(c.rate, 31.0, epsilon = 1e-12);
    }

    #[test]
    fn st_johns_update_matches_grid_oracle() {
        let prior = st_johns();
        let post = update_with_variance(&prior, 39.56, 73.0).unwrap();
        let d = sup_distance_to_grid(&post, &prior, 39.56, 73.0);
        assert!(d < 1e-6, "sup distance {d}");
    }

    #[test]
    fn random_mixtures_match_grid_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for case in 0..25 {
            let l = rng.random_range(1..=3);
            let mut raw: Vec<f64> = (0..l).map(|_| rng.random_range(0.2..1.0)).collect();
            let total: f64 = raw.iter().sum();
            raw.iter_mut().for_each(|w| *w /= total);
            let comps: Vec<GammaComponent> = raw
                .iter()
                .map(|&w| {
                    GammaComponent::new(w, rng.random_range(1.5..20.0), rng.random_range(0.5..30.0))
                })
                .collect();
            let prior = GammaMixture::new(comps).unwrap();
            let var = rng.random_range(0.2..5.0);
            let df = rng.random_range(4.0..120.0_f64).round();
            let post = update_with_variance(&prior, var, df).unwrap();
            let d = sup_distance_to_grid(&post, &prior, var, df);
            assert!(d < 1e-6, "case {case}: sup distance {d}");
        }
    }

    #[test]
    fn sequential_updates_pool() {
        let prior = st_johns();
        let (v1, d1) = (1.3, 28.0);
        let (v2, d2) = (0.7, 30.0);
        let step = update_with_variance(&update_with_variance(&prior, v1, d1).unwrap(), v2, d2).unwrap();
        let pooled_var = (d1 * v1 + d2 * v2) / (d1 + d2);
        let once = update_with_variance(&prior, pooled_var, d1 + d2).unwrap();
        for (a, b) in step.components().iter().zip(once.components()) {
            assert!((a.weight - b.weight).abs() < 1e-10);
            assert!((a.shape - b.shape).abs() < 1e-10);
            assert!((a.rate - b.rate).abs() < 1e-8);
        }
    }

    #[test]
    fn posterior_mean_examples() {
        let g = GammaMixture::single(32.0, 31.0).unwrap();
        assert_abs_diff_eq!(posterior_mean_sigma2(&g).unwrap(), 1.0, epsilon = 1e-14);

        let prior = GammaMixture::single(12.5, 5.635).unwrap();
        let post = update_with_variance(&prior, 1.0, 58.0).unwrap();
        let expect = (5.635 + 29.0) / (12.5 + 29.0 - 1.0);
        assert_abs_diff_eq!(posterior_mean_sigma2(&post).unwrap(), expect, epsilon = 1e-12);

        let mean = posterior_mean_sigma2(&st_johns()).unwrap();
        assert!((mean / 39.56 - 1.0).abs() < 0.05);
    }

    #[test]
    fn posterior_mean_shrinks_to_data() {
        let prior = st_johns();
        let post = update_with_variance(&prior, 2.5, 1e6).unwrap();
        assert!((posterior_mean_sigma2(&post).unwrap() / 2.5 - 1.0).abs() < 1e-3);
    }

    #[test]
    fn posterior_median_examples() {
        let g = GammaMixture::single(12.0, 7.0).unwrap();
        let med_var = posterior_median_sigma2(&g).unwrap();
        let med_prec = g.quantile(0.5, Scale::Precision).unwrap();
        assert!((med_var * med_prec - 1.0).abs() < 1e-8);

        let med = posterior_median_sigma2(&st_johns()).unwrap();
        assert!((med / 37.93 - 1.0).abs() < 0.05);
        // Right-skewed: median below mean for a grid of updates.
        for &(v, df) in &[(20.0, 10.0), (40.0, 40.0), (60.0, 80.0)] {
            let post = update_with_variance(&st_johns(), v, df).unwrap();
            assert!(posterior_median_sigma2(&post).unwrap() < posterior_mean_sigma2(&post).unwrap());
        }
    }

    #[test]
    fn vague_weight_grows_under_conflict() {
        // Robust mixture, data far from the informative mean: the vague
        // component gains weight.
        let robust = GammaMixture::new(vec![
            GammaComponent::new(0.5, 2.0, 1.0),
            GammaComponent::new(0.5, 25.0, 0.49 * 24.0),
        ])
        .unwrap();
        let post = update_with_variance(&robust, 1.0, 58.0).unwrap();
        // Vague component is the one whose shape grew from 2.0.
        let vague_weight = post
            .components()
            .iter()
            .find(|c| (c.shape - (2.0 + 29.0)).abs() < 1e-9)
            .unwrap()
            .weight;
        assert!(vague_weight > 0.5, "posterior vague weight {vague_weight}");
    }

    #[test]
    fn zero_variance_update_is_legal() {
        let prior = st_johns();
        let post = update_with_variance(&prior, 0.0, 10.0).unwrap();
        for (p, q) in prior.components().iter().zip(post.components()) {
            assert_abs_diff_eq!(q.shape, p.shape + 5.0, epsilon = 1e-12);
            assert_abs_diff_eq!(q.rate, p.rate, epsilon = 1e-12);
        }
        assert!(update_with_variance(&prior, -1.0, 10.0).is_err());
        assert!(update_with_variance(&prior, 1.0, 0.0).is_err());
    }

    #[test]
    fn one_sample_hand_values() {
        let p = PilotSummary::new(30, 30, 0.5, 0.0, 1.0).unwrap();
        let expect = 58.0 / 59.0 + 900.0 / (60.0 * 59.0) * 0.25;
        assert_abs_diff_eq!(one_sample_variance(&p).unwrap(), expect, epsilon = 1e-12);

        let equal_means = PilotSummary::new(10, 10, 2.0, 2.0, 3.0).unwrap();
        assert_abs_diff_eq!(
            one_sample_variance(&equal_means).unwrap(),
            18.0 / 19.0 * 3.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn one_sample_equals_blinded_sample_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let n_t = rng.random_range(2..40);
            let n_c = rng.random_range(2..40);
            let t: Vec<f64> = (0..n_t).map(|_| rng.random_range(-3.0..5.0)).collect();
            let c: Vec<f64> = (0..n_c).map(|_| rng.random_range(-3.0..5.0)).collect();
            let summary = PilotSummary::from_samples(&t, &c).unwrap();
            let os = one_sample_variance(&summary).unwrap();
            let all: Vec<f64> = t.iter().chain(c.iter()).cloned().collect();
            let mean = all.iter().sum::<f64>() / all.len() as f64;
            let sv = all.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (all.len() as f64 - 1.0);
            assert!((os - sv).abs() < 1e-12 * sv.max(1.0), "{os} vs {sv}");
        }
    }

    #[test]
    fn xing_ganju_basics() {
        let blk = BlockSummary::new(vec![4.0, 4.0, 4.0], 4).unwrap();
        assert_eq!(xing_ganju_variance(&blk).unwrap(), 0.0);
        assert!(BlockSummary::new(vec![1.0], 4).is_err());
        assert!(BlockSummary::new(vec![1.0, 2.0], 3).is_err());
    }

    #[test]
    fn xing_ganju_consistency() {
        // Blocks drawn from N(0, m*sigma2) with sigma2 = 1.
        let m = 4u32;
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let normal = Normal::new(0.0, (m as f64).sqrt()).unwrap();
        let sums: Vec<f64> = (0..10_000).map(|_| normal.sample(&mut rng)).collect();
        let est = xing_ganju_variance(&BlockSummary::new(sums, m).unwrap()).unwrap();
        assert!((est - 1.0).abs() < 0.05, "{est}");
    }

    #[test]
    fn xing_ganju_unbiased() {
        // E[sigma2_XG] = sigma2 over many replicates, each with few blocks.
        let m = 4u32;
        let b = 10usize;
        let reps = 100_000usize;
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let normal = Normal::new(1.0, (m as f64).sqrt()).unwrap();
        let mut sum = 0.0;
        let mut sum2 = 0.0;
        for _ in 0..reps {
            let sums: Vec<f64> = (0..b).map(|_| normal.sample(&mut rng)).collect();
            let est = xing_ganju_variance(&BlockSummary::new(sums, m).unwrap()).unwrap();
            sum += est;
            sum2 += est * est;
        }
        let mean = sum / reps as f64;
        let sd = (sum2 / reps as f64 - mean * mean).sqrt();
        let se = sd / (reps as f64).sqrt();
        assert!((mean - 1.0).abs() < 3.0 * se, "mean {mean}, se {se}");
    }
}
