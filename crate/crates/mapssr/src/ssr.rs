//! Sample size re-estimation rules applied at the interim of an internal
//! pilot study: plug-in rules using a blinded or unblinded variance estimate,
//! and Bayesian rules that update a Gamma-mixture prior on the precision.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::distmath::GammaMixture;
use crate::error::{Error, Result};
use crate::posterior::{
    one_sample_variance, posterior_mean_sigma2, posterior_median_sigma2, update_with_variance,
    xing_ganju_variance, BlockSummary, PilotSummary,
};
use crate::samplesize::{
    required_n_expected_power_unbounded, required_n_unbounded, DesignParams,
};
use crate::distmath::Scale;

/// Which interim variance estimate feeds the Bayesian update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    /// Pooled two-sample variance from unblinded data, n1 - 2 df.
    UnblindedPooled,
    /// One-sample variance of the blinded pooled stream, n1 - 1 df.
    BlindedOneSample,
    /// Scaled differences of randomization block sums, b - 1 df.
    BlindedBlockSums,
}

impl DataSource {
    pub fn label(&self) -> &'static str {
        match self {
            DataSource::UnblindedPooled => "pooled",
            DataSource::BlindedOneSample => "one_sample",
            DataSource::BlindedBlockSums => "block_sums",
        }
    }
}

impl fmt::Display for DataSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for DataSource {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pooled" => Ok(DataSource::UnblindedPooled),
            "one_sample" => Ok(DataSource::BlindedOneSample),
            "block_sums" => Ok(DataSource::BlindedBlockSums),
            other => Err(Error::invalid(format!(
                "unknown data source `{other}` (expected pooled, one_sample, or block_sums)"
            ))),
        }
    }
}

/// Interim decision rule mapping pilot data to a re-estimated total sample
/// size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", content = "params", rename_all = "snake_case")]
pub enum ReestimationRule {
    /// Plug the unblinded pooled variance into the fixed-design formula.
    PooledPlugin,
    /// Plug the blinded one-sample variance into the fixed-design formula.
    OneSamplePlugin,
    /// Size for the posterior mean of sigma^2.
    BayesMean(DataSource),
    /// Size for the posterior median of sigma^2.
    BayesMedian(DataSource),
    /// Size for a posterior quantile of sigma^2.
    BayesQuantile(f64, DataSource),
    /// Size so that the posterior-averaged power reaches the target.
    BayesExpectedPower(DataSource),
}

impl ReestimationRule {
    pub fn label(&self) -> &'static str {
        match self {
            ReestimationRule::PooledPlugin => "pooled_plugin",
            ReestimationRule::OneSamplePlugin => "one_sample_plugin",
            ReestimationRule::BayesMean(_) => "bayes_mean",
            ReestimationRule::BayesMedian(_) => "bayes_median",
            ReestimationRule::BayesQuantile(..) => "bayes_quantile",
            ReestimationRule::BayesExpectedPower(_) => "bayes_expected_power",
        }
    }

    pub fn data_source(&self) -> Option<DataSource> {
        match self {
            ReestimationRule::PooledPlugin | ReestimationRule::OneSamplePlugin => None,
            ReestimationRule::BayesMean(s)
            | ReestimationRule::BayesMedian(s)
            | ReestimationRule::BayesQuantile(_, s)
            | ReestimationRule::BayesExpectedPower(s) => Some(*s),
        }
    }

    pub fn needs_prior(&self) -> bool {
        self.data_source().is_some()
    }

    /// Build a rule from its label, an optional data source label, and an
    /// optional quantile level.
    pub fn from_parts(label: &str, source: Option<&str>, quantile: Option<f64>) -> Result<Self> {
        let src = || -> Result<DataSource> {
            source
                .ok_or_else(|| Error::invalid(format!("rule `{label}` requires a data source")))?
                .parse()
        };
        match label {
            "pooled_plugin" => Ok(ReestimationRule::PooledPlugin),
            "one_sample_plugin" => Ok(ReestimationRule::OneSamplePlugin),
            "bayes_mean" => Ok(ReestimationRule::BayesMean(src()?)),
            "bayes_median" => Ok(ReestimationRule::BayesMedian(src()?)),
            "bayes_quantile" => {
                let p = quantile
                    .ok_or_else(|| Error::invalid("bayes_quantile requires a quantile level"))?;
                if !(p > 0.0 && p < 1.0) {
                    return Err(Error::invalid(format!("quantile must be in (0,1), got {p}")));
                }
                Ok(ReestimationRule::BayesQuantile(p, src()?))
            }
            "bayes_expected_power" => Ok(ReestimationRule::BayesExpectedPower(src()?)),
            other => Err(Error::invalid(format!("unknown rule `{other}`"))),
        }
    }
}

impl fmt::Display for ReestimationRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ReestimationRule::BayesQuantile(p, _) => write!(f, "bayes_quantile_{p}"),
            other => f.write_str(other.label()),
        }
    }
}

/// Interim data available at the pilot analysis.
#[derive(Debug, Clone, PartialEq)]
pub enum PilotData {
    /// Group summaries only.
    Summary(PilotSummary),
    /// Group summaries plus randomization block sums of the blinded stream.
    WithBlocks { summary: PilotSummary, blocks: BlockSummary },
}

impl PilotData {
    pub fn summary(&self) -> &PilotSummary {
        match self {
            PilotData::Summary(s) => s,
            PilotData::WithBlocks { summary, .. } => summary,
        }
    }

    pub fn blocks(&self) -> Option<&BlockSummary> {
        match self {
            PilotData::Summary(_) => None,
            PilotData::WithBlocks { blocks, .. } => Some(blocks),
        }
    }
}

/// Result of one interim re-estimation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReestimationOutcome {
    /// Unconstrained re-estimated total sample size.
    pub n_reest: u64,
    /// Final total after the pilot floor and the cap.
    pub n_final: u64,
    /// The sigma^2 value the sizing rule acted on.
    pub variance_used: f64,
    /// Posterior mixture, for Bayesian rules.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub posterior: Option<GammaMixture>,
}

fn interim_estimate(source: DataSource, pilot: &PilotData) -> Result<(f64, f64)> {
    let s = pilot.summary();
    match source {
        DataSource::UnblindedPooled => {
            let df = s.total().saturating_sub(2);
            if df == 0 {
                return Err(Error::invalid("pooled estimate needs a pilot of at least 3"));
            }
            Ok((s.pooled_variance, df as f64))
        }
        DataSource::BlindedOneSample => {
            Ok((one_sample_variance(s)?, (s.total() - 1) as f64))
        }
        DataSource::BlindedBlockSums => {
            let blocks = pilot
                .blocks()
                .ok_or_else(|| Error::invalid("block sums are not available in this pilot"))?;
            Ok((xing_ganju_variance(blocks)?, (blocks.blocks() - 1) as f64))
        }
    }
}

/// Apply a re-estimation rule to pilot data. `prior` is required for the
/// Bayesian rules and ignored otherwise. The final size never drops below
/// the pilot size and never exceeds the design cap.
pub fn reestimate(
    d: &DesignParams,
    rule: &ReestimationRule,
    pilot: &PilotData,
    prior: Option<&GammaMixture>,
) -> Result<ReestimationOutcome> {
    let (n_reest, variance_used, posterior) = match rule {
        ReestimationRule::PooledPlugin => {
            let (v, _) = interim_estimate(DataSource::UnblindedPooled, pilot)?;
            (required_n_unbounded(v, d)?, v, None)
        }
        ReestimationRule::OneSamplePlugin => {
            let (v, _) = interim_estimate(DataSource::BlindedOneSample, pilot)?;
            (required_n_unbounded(v, d)?, v, None)
        }
        _ => {
            let prior = prior.ok_or(Error::MissingPrior)?;
            let source = rule.data_source().expect("Bayesian rules carry a source");
            let (v, df) = interim_estimate(source, pilot)?;
            let post = update_with_variance(prior, v, df)?;
            let (n, used) = match rule {
                ReestimationRule::BayesMean(_) => {
                    let m = posterior_mean_sigma2(&post)?;
                    (required_n_unbounded(m, d)?, m)
                }
                ReestimationRule::BayesMedian(_) => {
                    let m = posterior_median_sigma2(&post)?;
                    (required_n_unbounded(m, d)?, m)
                }
                ReestimationRule::BayesQuantile(p, _) => {
                    let q = post.quantile(*p, Scale::Variance)?;
                    (required_n_unbounded(q, d)?, q)
                }
                ReestimationRule::BayesExpectedPower(_) => {
                    let n = required_n_expected_power_unbounded(d, &post)?;
                    (n, posterior_mean_sigma2(&post)?)
                }
                _ => unreachable!(),
            };
            (n, used, Some(post))
        }
    };

    let floor = d.allocation.round_up(d.n1 as f64);
    let mut n_final = n_reest.max(floor);
    if let Some(cap) = d.n_max {
        n_final = n_final.min(d.allocation.round_down(cap));
    }
    Ok(ReestimationOutcome { n_reest, n_final, variance_used, posterior })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distmath::{GammaComponent, GammaMixture};
    use crate::samplesize::{expected_power, required_n, Allocation};
    use approx::assert_abs_diff_eq;

    fn pilot_with_pooled(n1: u64, v: f64) -> PilotData {
        PilotData::Summary(
            PilotSummary::new(n1 / 2, n1 - n1 / 2, 0.3, 0.0, v).unwrap(),
        )
    }

    fn design(n1: u32) -> DesignParams {
        DesignParams::standard(0.5, n1).unwrap()
    }

    #[test]
    fn pooled_plugin_matches_fixed_design_formula() {
        let d = design(50);
        let out = reestimate(&d, &ReestimationRule::PooledPlugin, &pilot_with_pooled(50, 1.0), None)
            .unwrap();
        assert_eq!(out.n_reest, 128);
        assert_eq!(out.n_final, 128);
        assert_abs_diff_eq!(out.variance_used, 1.0);
        assert!(out.posterior.is_none());
    }

    #[test]
    fn pilot_floor_binds_for_tiny_variance() {
        let d = design(50);
        let out = reestimate(
            &d,
            &ReestimationRule::PooledPlugin,
            &pilot_with_pooled(50, 1e-6),
            None,
        )
        .unwrap();
        assert!(out.n_reest < 50);
        assert_eq!(out.n_final, 50);
    }

    #[test]
    fn cap_binds_for_huge_variance() {
        let mut d = design(50);
        d.n_max = Some(200);
        let out = reestimate(
            &d,
            &ReestimationRule::PooledPlugin,
            &pilot_with_pooled(50, 10.0),
            None,
        )
        .unwrap();
        assert!(out.n_reest > 200);
        assert_eq!(out.n_final, 200);
    }

    #[test]
    fn bayes_rules_require_prior() {
        let d = design(50);
        let rule = ReestimationRule::BayesMean(DataSource::UnblindedPooled);
        assert!(matches!(
            reestimate(&d, &rule, &pilot_with_pooled(50, 1.0), None),
            Err(Error::MissingPrior)
        ));
    }

    #[test]
    fn bayes_mean_shrinks_toward_conflicting_prior() {
        // Prior mean 0.49, ESS 25; interim pooled variance 1 on 58 df:
        // posterior mean (5.635 + 29) / (12.5 + 29 - 1) = 0.8552.
        let d = design(60);
        let prior = GammaMixture::single(12.5, 5.635).unwrap();
        let rule = ReestimationRule::BayesMean(DataSource::UnblindedPooled);
        let out = reestimate(&d, &rule, &pilot_with_pooled(60, 1.0), Some(&prior)).unwrap();
        assert_abs_diff_eq!(out.variance_used, 0.8552, epsilon = 2e-4);
        assert!(out.n_reest < 128, "n_reest {}", out.n_reest);
        assert_eq!(out.n_reest, required_n(out.variance_used, &d).unwrap());
    }

    #[test]
    fn prior_washes_out_with_pilot_size() {
        let prior = GammaMixture::single(12.5, 5.635).unwrap();
        let rule = ReestimationRule::BayesMean(DataSource::UnblindedPooled);
        let mut last = 0.0;
        for n1 in [26u64, 76, 126] {
            let d = design(n1 as u32);
            let out = reestimate(&d, &rule, &pilot_with_pooled(n1, 1.0), Some(&prior)).unwrap();
            assert!(out.variance_used > last, "washout not monotone at n1={n1}");
            last = out.variance_used;
        }
        assert!(last > 0.85, "posterior mean {last} should be close to 1 for n1=125");
    }

    #[test]
    fn bayes_curve_is_flatter_than_plugin() {
        let d = design(50);
        let prior = GammaMixture::single(25.0, 24.0).unwrap();
        let rule = ReestimationRule::BayesMean(DataSource::UnblindedPooled);
        let spread = |f: &dyn Fn(f64) -> u64| f(1.3) as i64 - f(0.7) as i64;
        let plugin = spread(&|v| {
            reestimate(&d, &ReestimationRule::PooledPlugin, &pilot_with_pooled(50, v), None)
                .unwrap()
                .n_reest
        });
        let bayes = spread(&|v| {
            reestimate(&d, &rule, &pilot_with_pooled(50, v), Some(&prior)).unwrap().n_reest
        });
        assert!(bayes < plugin, "bayes spread {bayes} vs plugin {plugin}");
        assert!(bayes > 0);
    }

    #[test]
    fn median_rule_sizes_below_mean_rule() {
        let d = design(50);
        let prior = GammaMixture::new(vec![
            GammaComponent::new(0.5, 2.0, 1.0),
            GammaComponent::new(0.5, 25.0, 24.0),
        ])
        .unwrap();
        let pilot = pilot_with_pooled(50, 1.0);
        let mean = reestimate(
            &d,
            &ReestimationRule::BayesMean(DataSource::UnblindedPooled),
            &pilot,
            Some(&prior),
        )
        .unwrap();
        let median = reestimate(
            &d,
            &ReestimationRule::BayesMedian(DataSource::UnblindedPooled),
            &pilot,
            Some(&prior),
        )
        .unwrap();
        assert!(median.variance_used < mean.variance_used);
        assert!(median.n_reest <= mean.n_reest);
        let q75 = reestimate(
            &d,
            &ReestimationRule::BayesQuantile(0.75, DataSource::UnblindedPooled),
            &pilot,
            Some(&prior),
        )
        .unwrap();
        assert!(q75.n_reest >= median.n_reest);
    }

    #[test]
    fn expected_power_rule_brackets_the_target() {
        let d = design(20);
        let prior = GammaMixture::single(2.0, 1.0).unwrap();
        let pilot = pilot_with_pooled(20, 1.0);
        let ep = reestimate(
            &d,
            &ReestimationRule::BayesExpectedPower(DataSource::UnblindedPooled),
            &pilot,
            Some(&prior),
        )
        .unwrap();
        let posterior = ep.posterior.as_ref().unwrap();
        let at_n = expected_power(ep.n_reest, &d, posterior).unwrap();
        let below = expected_power(ep.n_reest - d.allocation.block(), &d, posterior).unwrap();
        assert!(at_n >= 0.8, "expected power {at_n} at n={}", ep.n_reest);
        assert!(below < 0.8, "expected power {below} below n={}", ep.n_reest);
    }

    #[test]
    fn blinded_sources_use_matching_estimators() {
        let treatment = [1.2, 0.8, 1.9, 0.4, 1.1, 0.9, 1.6, 0.2, 1.3, 0.7];
        let control = [0.1, -0.4, 0.6, -0.2, 0.3, -0.6, 0.2, 0.5, -0.1, 0.0];
        let summary = PilotSummary::from_samples(&treatment, &control).unwrap();
        // 2x2 blocks paired in accrual order.
        let sums: Vec<f64> = (0..5)
            .map(|i| {
                treatment[2 * i] + treatment[2 * i + 1] + control[2 * i] + control[2 * i + 1]
            })
            .collect();
        let blocks = BlockSummary::new(sums, 4).unwrap();
        let pilot = PilotData::WithBlocks { summary, blocks: blocks.clone() };
        let d = design(20);
        let prior = GammaMixture::single(2.0, 1.0).unwrap();

        let (v_os, df_os) = interim_estimate(DataSource::BlindedOneSample, &pilot).unwrap();
        assert_abs_diff_eq!(v_os, one_sample_variance(&summary).unwrap());
        assert_abs_diff_eq!(df_os, 19.0);

        let (v_bs, df_bs) = interim_estimate(DataSource::BlindedBlockSums, &pilot).unwrap();
        assert_abs_diff_eq!(v_bs, xing_ganju_variance(&blocks).unwrap());
        assert_abs_diff_eq!(df_bs, 4.0);

        let rule = ReestimationRule::BayesMean(DataSource::BlindedBlockSums);
        assert!(reestimate(&d, &rule, &pilot, Some(&prior)).is_ok());
        let only_summary = PilotData::Summary(summary);
        assert!(reestimate(&d, &rule, &only_summary, Some(&prior)).is_err());
    }

    #[test]
    fn n_reest_is_monotone_in_variance() {
        let d = design(30);
        let mut last = 0;
        for i in 1..=20 {
            let v = 0.2 * i as f64;
            let out = reestimate(&d, &ReestimationRule::PooledPlugin, &pilot_with_pooled(30, v), None)
                .unwrap();
            assert!(out.n_reest >= last);
            last = out.n_reest;
        }
    }

    #[test]
    fn unbalanced_allocation_rounds_to_blocks() {
        let d = DesignParams::new(
            0.025,
            0.8,
            0.5,
            Allocation::new(1, 2).unwrap(),
            51,
            None,
        )
        .unwrap();
        let out = reestimate(&d, &ReestimationRule::PooledPlugin, &pilot_with_pooled(51, 1.0), None)
            .unwrap();
        assert_eq!(out.n_final % 3, 0);
    }

    #[test]
    fn rule_labels_round_trip() {
        let rule = ReestimationRule::from_parts("bayes_mean", Some("block_sums"), None).unwrap();
        assert_eq!(rule, ReestimationRule::BayesMean(DataSource::BlindedBlockSums));
        assert_eq!(rule.label(), "bayes_mean");
        assert_eq!(rule.data_source().unwrap().label(), "block_sums");

        let q = ReestimationRule::from_parts("bayes_quantile", Some("pooled"), Some(0.75)).unwrap();
        assert_eq!(q.to_string(), "bayes_quantile_0.75");

        assert!(ReestimationRule::from_parts("bayes_mean", None, None).is_err());
        assert!(ReestimationRule::from_parts("bayes_quantile", Some("pooled"), None).is_err());
        assert!(ReestimationRule::from_parts("nope", None, None).is_err());
        assert!("pooled".parse::<DataSource>().is_ok());
        assert!("x".parse::<DataSource>().is_err());

        let plain = ReestimationRule::from_parts("pooled_plugin", None, None).unwrap();
        assert_eq!(plain.to_string(), "pooled_plugin");
        assert!(!plain.needs_prior());
    }
}
