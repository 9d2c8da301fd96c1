//! Built-in priors, historical datasets, and design settings for the two
//! worked examples and the simulation study shipped with the CLI.

use crate::distmath::{GammaComponent, GammaMixture};
use crate::error::Result;
use crate::mapprior::HistoricalTrialSummary;
use crate::samplesize::{Allocation, DesignParams};

/// Clinically relevant difference for the depression example (HAMD-17).
pub const DELTA_STAR_ST_JOHNS: f64 = 2.515;

/// Clinically relevant difference for the hypertension example (SBP, mmHg).
pub const DELTA_STAR_BLOOD_PRESSURE: f64 = 6.343;

/// Two-component Gamma-mixture MAP prior on the precision for the
/// depression example.
pub fn st_johns_mixture() -> GammaMixture {
    GammaMixture::new(vec![
        GammaComponent::new(0.16, 4.6, 140.4),
        GammaComponent::new(0.84, 18.2, 689.3),
    ])
    .expect("valid by construction")
}

/// Two-component Gamma-mixture MAP prior on the precision for the
/// hypertension example.
pub fn blood_pressure_mixture() -> GammaMixture {
    GammaMixture::new(vec![
        GammaComponent::new(0.29, 10.28, 2298.63),
        GammaComponent::new(0.71, 38.46, 9366.28),
    ])
    .expect("valid by construction")
}

/// Weakly informative Gamma(2, 1) precision prior used as the robust
/// mixture component when sigma^2 is on a unit scale.
pub fn vague_prior() -> GammaMixture {
    GammaMixture::single(2.0, 1.0).expect("valid by construction")
}

/// Vague component matched to a prior's variance-scale mean: Gamma(2, m).
pub fn vague_prior_matched(sigma2_mean: f64) -> Result<GammaMixture> {
    GammaMixture::single(2.0, sigma2_mean)
}

/// Historical placebo-arm variances for the depression example: pooled
/// variances of HAMD-17 change scores from earlier antidepressant trials.
pub fn st_johns_trials() -> Vec<HistoricalTrialSummary> {
    [
        (24.9, 92),
        (30.9, 84),
        (42.4, 106),
        (49.7, 118),
        (35.3, 96),
        (59.0, 72),
        (39.0, 110),
        (28.6, 88),
        (53.7, 78),
        (46.2, 102),
        (33.3, 94),
    ]
    .into_iter()
    .map(|(v, df)| HistoricalTrialSummary::new(v, df).expect("valid by construction"))
    .collect()
}

/// Historical variances of systolic blood pressure change for the
/// hypertension example.
pub fn blood_pressure_trials() -> Vec<HistoricalTrialSummary> {
    [
        (193.6, 118),
        (280.2, 96),
        (221.7, 124),
        (324.2, 88),
        (175.2, 132),
        (262.3, 104),
        (352.5, 76),
        (211.2, 112),
        (244.8, 98),
        (303.6, 92),
        (202.3, 126),
        (272.0, 84),
    ]
    .into_iter()
    .map(|(v, df)| HistoricalTrialSummary::new(v, df).expect("valid by construction"))
    .collect()
}

/// Base design of the simulation study: one-sided alpha 0.025, target power
/// 0.8, delta* 0.5 on a unit-variance scale, balanced allocation.
pub fn simulation_design(n1: u32) -> Result<DesignParams> {
    DesignParams::new(0.025, 0.8, 0.5, Allocation::balanced(), n1, None)
}
