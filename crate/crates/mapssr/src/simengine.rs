//! Monte Carlo engine: simulate internal pilot studies, re-estimate the
//! sample size, complete the trial, and aggregate rejection rates and final
//! sample size distributions over scenario grids.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::constants::vague_prior;
use crate::distmath::{t_quantile, GammaMixture, Scale};
use crate::error::{Error, Result};
use crate::mapprior::{ess_gamma, robustify, scenario_prior};
use crate::posterior::{posterior_mean_sigma2, update_with_variance, BlockSummary, PilotSummary};
use crate::samplesize::DesignParams;
use crate::ssr::{reestimate, DataSource, PilotData, ReestimationRule};

/// Prior on the precision for a simulation scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PriorSpec {
    /// An explicit Gamma mixture.
    Mixture { mixture: GammaMixture },
    /// Single conjugate Gamma with a given sigma^2-scale mean and effective
    /// sample size, optionally robustified with the Gamma(2, 1) vague
    /// component.
    Conjugate { sigma2_mean: f64, ess: f64, robust_weight: f64 },
}

impl PriorSpec {
    pub fn build(&self) -> Result<GammaMixture> {
        match self {
            PriorSpec::Mixture { mixture } => Ok(mixture.clone()),
            PriorSpec::Conjugate { sigma2_mean, ess, robust_weight } => {
                let informative = scenario_prior(*sigma2_mean, *ess)?;
                robustify(&informative, *robust_weight, &vague_prior())
            }
        }
    }

    /// (ess, w_R, sigma^2-scale prior mean) for reporting.
    pub fn summary_fields(&self) -> Result<(f64, f64, f64)> {
        match self {
            PriorSpec::Conjugate { sigma2_mean, ess, robust_weight } => {
                Ok((*ess, *robust_weight, *sigma2_mean))
            }
            PriorSpec::Mixture { mixture } => {
                Ok((ess_gamma(mixture), 0.0, mixture.mean(Scale::Variance)?))
            }
        }
    }
}

/// One Monte Carlo scenario: a design, data-generating truth, a
/// re-estimation rule, and an optional prior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub design: DesignParams,
    pub true_sigma2: f64,
    pub true_delta: f64,
    pub rule: ReestimationRule,
    #[serde(default)]
    pub prior: Option<PriorSpec>,
    #[serde(default = "default_replications")]
    pub replications: u64,
    #[serde(default = "default_seed")]
    pub master_seed: u64,
    /// Randomization block size for the block-sum data source.
    #[serde(default = "default_block_m")]
    pub block_m: u32,
}

fn default_replications() -> u64 {
    50_000
}

fn default_seed() -> u64 {
    1
}

fn default_block_m() -> u32 {
    4
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        if self.replications < 1 {
            return Err(Error::invalid("replications must be >= 1"));
        }
        if !(self.true_sigma2 > 0.0) {
            return Err(Error::invalid(format!(
                "true_sigma2 must be positive, got {}",
                self.true_sigma2
            )));
        }
        if self.rule.needs_prior() && self.prior.is_none() {
            return Err(Error::MissingPrior);
        }
        if self.rule.data_source() == Some(DataSource::BlindedBlockSums) {
            let m = self.block_m as u64;
            if self.block_m < 2 || self.block_m % 2 != 0 {
                return Err(Error::invalid("block size must be even and >= 2"));
            }
            let n1 = self.design.allocation.round_up(self.design.n1 as f64);
            if n1 % m != 0 {
                return Err(Error::invalid(format!(
                    "pilot size {n1} is not divisible by block size {m}"
                )));
            }
        }
        Ok(())
    }
}

/// Aggregated output of one scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioResult {
    pub rejection_rate: f64,
    pub mc_standard_error: f64,
    pub n_mean: f64,
    pub n_p10: u64,
    pub n_median: u64,
    pub n_p90: u64,
    pub n_min: u64,
    pub n_max: u64,
    pub n_reest_mean: f64,
    pub replications: u64,
    pub seed: u64,
}

fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

fn replicate_rng(master_seed: u64, replicate: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix64(mix64(master_seed) ^ replicate))
}

/// Seed for grid cell `index` derived from the grid's master seed.
pub fn cell_seed(master_seed: u64, index: u64) -> u64 {
    mix64(mix64(master_seed ^ 0xc311).wrapping_add(index))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReplicateOutcome {
    pub reject: bool,
    pub n_final: u64,
    pub n_reest: u64,
}

struct ArmStats {
    n: u64,
    mean: f64,
    ss: f64,
}

fn arm_stats(xs: &[f64]) -> ArmStats {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let ss = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>();
    ArmStats { n: xs.len() as u64, mean, ss }
}

fn pooled_t_reject(treatment: &[f64], control: &[f64], alpha: f64) -> Result<bool> {
    let t_arm = arm_stats(treatment);
    let c_arm = arm_stats(control);
    let df = (t_arm.n + c_arm.n - 2) as f64;
    let s2 = (t_arm.ss + c_arm.ss) / df;
    let se = (s2 * (1.0 / t_arm.n as f64 + 1.0 / c_arm.n as f64)).sqrt();
    if se == 0.0 {
        return Ok(t_arm.mean > c_arm.mean);
    }
    let t = (t_arm.mean - c_arm.mean) / se;
    Ok(t > t_quantile(1.0 - alpha, df)?)
}

/// Simulate one trial. Deterministic given (master_seed, replicate_index),
/// independent of scheduling.
pub fn simulate_replicate(
    sc: &Scenario,
    prior: Option<&GammaMixture>,
    replicate_index: u64,
) -> Result<ReplicateOutcome> {
    let mut rng = replicate_rng(sc.master_seed, replicate_index);
    let sd = sc.true_sigma2.sqrt();
    let d = &sc.design;

    let n1 = d.allocation.round_up(d.n1 as f64);
    let (n1_t, n1_c) = d.allocation.group_sizes(n1)?;
    let mut treatment: Vec<f64> = (0..n1_t)
        .map(|_| sc.true_delta + sd * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let mut control: Vec<f64> =
        (0..n1_c).map(|_| sd * rng.sample::<f64, _>(StandardNormal)).collect();

    let summary = PilotSummary::from_samples(&treatment, &control)?;
    let pilot = if sc.rule.data_source() == Some(DataSource::BlindedBlockSums) {
        let half = (sc.block_m / 2) as usize;
        let blocks = n1 as usize / sc.block_m as usize;
        let sums: Vec<f64> = (0..blocks)
            .map(|i| {
                treatment[i * half..(i + 1) * half].iter().sum::<f64>()
                    + control[i * half..(i + 1) * half].iter().sum::<f64>()
            })
            .collect();
        PilotData::WithBlocks { summary, blocks: BlockSummary::new(sums, sc.block_m)? }
    } else {
        PilotData::Summary(summary)
    };

    let out = reestimate(d, &sc.rule, &pilot, prior)?;
    let (nf_t, nf_c) = d.allocation.group_sizes(out.n_final)?;
    for _ in n1_t..nf_t {
        treatment.push(sc.true_delta + sd * rng.sample::<f64, _>(StandardNormal));
    }
    for _ in n1_c..nf_c {
        control.push(sd * rng.sample::<f64, _>(StandardNormal));
    }

    let reject = pooled_t_reject(&treatment, &control, d.alpha)?;
    Ok(ReplicateOutcome { reject, n_final: out.n_final, n_reest: out.n_reest })
}

// Nearest-rank quantile (type 1) on a sorted slice.
fn nearest_rank(sorted: &[u64], p: f64) -> u64 {
    let n = sorted.len();
    let rank = ((p * n as f64).ceil() as usize).clamp(1, n);
    sorted[rank - 1]
}

/// Run all replicates of a scenario on `workers` threads and aggregate.
/// The result is identical for any worker count.
pub fn run_scenario(sc: &Scenario, workers: usize) -> Result<ScenarioResult> {
    sc.validate()?;
    let prior = sc.prior.as_ref().map(|p| p.build()).transpose()?;
    let prior_ref = prior.as_ref();

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
    let outcomes: Vec<Result<ReplicateOutcome>> = pool.install(|| {
        (0..sc.replications)
            .into_par_iter()
            .map(|rep| simulate_replicate(sc, prior_ref, rep))
            .collect()
    });

    let mut rejects = 0u64;
    let mut n_sum = 0u64;
    let mut n_reest_sum = 0u64;
    let mut finals = Vec::with_capacity(outcomes.len());
    for o in outcomes {
        let o = o?;
        rejects += o.reject as u64;
        n_sum += o.n_final;
        n_reest_sum += o.n_reest;
        finals.push(o.n_final);
    }
    finals.sort_unstable();
    let reps = sc.replications as f64;
    let rate = rejects as f64 / reps;
    Ok(ScenarioResult {
        rejection_rate: rate,
        mc_standard_error: (rate * (1.0 - rate) / reps).sqrt(),
        n_mean: n_sum as f64 / reps,
        n_p10: nearest_rank(&finals, 0.1),
        n_median: nearest_rank(&finals, 0.5),
        n_p90: nearest_rank(&finals, 0.9),
        n_min: finals[0],
        n_max: finals[finals.len() - 1],
        n_reest_mean: n_reest_sum as f64 / reps,
        replications: sc.replications,
        seed: sc.master_seed,
    })
}

/// One swept parameter of a grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sweep {
    pub field: String,
    pub values: SweepValues,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SweepValues {
    Numbers(Vec<f64>),
    Rules(Vec<ReestimationRule>),
}

impl SweepValues {
    fn len(&self) -> usize {
        match self {
            SweepValues::Numbers(v) => v.len(),
            SweepValues::Rules(v) => v.len(),
        }
    }
}

fn apply_field(sc: &mut Scenario, field: &str, value: &SweepValues, idx: usize) -> Result<()> {
    let number = || -> Result<f64> {
        match value {
            SweepValues::Numbers(v) => Ok(v[idx]),
            SweepValues::Rules(_) => {
                Err(Error::invalid(format!("field `{field}` takes numeric values")))
            }
        }
    };
    fn conjugate<'a>(sc: &'a mut Scenario, field: &str) -> Result<&'a mut PriorSpec> {
        match &mut sc.prior {
            Some(p @ PriorSpec::Conjugate { .. }) => Ok(p),
            _ => Err(Error::invalid(format!(
                "field `{field}` requires a conjugate prior spec on the base scenario"
            ))),
        }
    }
    match field {
        "n1" => {
            let v = number()?;
            if v < 3.0 || v.fract() != 0.0 {
                return Err(Error::invalid(format!("n1 sweep value {v} is not a valid size")));
            }
            sc.design.n1 = v as u32;
        }
        "ess" => {
            let v = number()?;
            if let PriorSpec::Conjugate { ess, .. } = conjugate(sc, field)? {
                *ess = v;
            }
        }
        "prior_mean" => {
            let v = number()?;
            if let PriorSpec::Conjugate { sigma2_mean, .. } = conjugate(sc, field)? {
                *sigma2_mean = v;
            }
        }
        "w_r" => {
            let v = number()?;
            if let PriorSpec::Conjugate { robust_weight, .. } = conjugate(sc, field)? {
                *robust_weight = v;
            }
        }
        "true_sigma2" => sc.true_sigma2 = number()?,
        "true_delta" => sc.true_delta = number()?,
        "rule" => match value {
            SweepValues::Rules(v) => sc.rule = v[idx],
            SweepValues::Numbers(_) => {
                return Err(Error::invalid("field `rule` takes rule values"));
            }
        },
        other => return Err(Error::UnknownField(other.to_string())),
    }
    Ok(())
}

/// One evaluated grid cell.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridCell {
    pub scenario_id: u64,
    pub scenario: Scenario,
    pub result: ScenarioResult,
}

/// Evaluate the Cartesian product of the sweeps over the base scenario.
/// Each cell runs with a seed derived from the base master seed and the
/// cell index. An empty sweep list yields the single base cell.
pub fn run_grid(base: &Scenario, sweeps: &[Sweep], workers: usize) -> Result<Vec<GridCell>> {
    for (i, s) in sweeps.iter().enumerate() {
        if s.values.len() == 0 {
            return Err(Error::invalid(format!("sweep `{}` has no values", s.field)));
        }
        if sweeps[..i].iter().any(|prev| prev.field == s.field) {
            return Err(Error::invalid(format!("duplicate sweep field `{}`", s.field)));
        }
    }
    let total: usize = sweeps.iter().map(|s| s.values.len()).product();
    let mut cells = Vec::with_capacity(total);
    for cell in 0..total {
        let mut sc = base.clone();
        let mut rest = cell;
        // Last sweep varies fastest.
        for s in sweeps.iter().rev() {
            let len = s.values.len();
            apply_field(&mut sc, &s.field, &s.values, rest % len)?;
            rest /= len;
        }
        sc.master_seed = cell_seed(base.master_seed, cell as u64);
        let result = run_scenario(&sc, workers)?;
        cells.push(GridCell { scenario_id: cell as u64, scenario: sc, result });
    }
    Ok(cells)
}

/// Closed-form posterior mean of sigma^2 against the robust weight, for a
/// fixed interim pooled variance. No Monte Carlo.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PosteriorMeanPoint {
    pub prior_index: usize,
    pub n1: u64,
    pub w_r: f64,
    pub posterior_mean: f64,
}

pub fn posterior_mean_curve(
    priors: &[GammaMixture],
    pooled_var: f64,
    n1_list: &[u64],
    w_r_list: &[f64],
) -> Result<Vec<PosteriorMeanPoint>> {
    let vague = vague_prior();
    let mut out = Vec::new();
    for (prior_index, informative) in priors.iter().enumerate() {
        for &n1 in n1_list {
            if n1 < 3 {
                return Err(Error::invalid("n1 must be at least 3"));
            }
            let df = (n1 - 2) as f64;
            for &w_r in w_r_list {
                let prior = robustify(informative, w_r, &vague)?;
                let post = update_with_variance(&prior, pooled_var, df)?;
                out.push(PosteriorMeanPoint {
                    prior_index,
                    n1,
                    w_r,
                    posterior_mean: posterior_mean_sigma2(&post)?,
                });
            }
        }
    }
    Ok(out)
}

/// Write grid results as CSV with a fixed column set.
pub fn write_results_csv<W: std::io::Write>(cells: &[GridCell], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "scenario_id",
        "rule",
        "data_source",
        "n1",
        "ess",
        "w_R",
        "prior_mean",
        "true_sigma2",
        "true_delta",
        "reps",
        "seed",
        "reject_rate",
        "mc_se",
        "n_mean",
        "n_p10",
        "n_median",
        "n_p90",
    ])?;
    for c in cells {
        let (ess, w_r, prior_mean) = match &c.scenario.prior {
            Some(p) => {
                let (e, w, m) = p.summary_fields()?;
                (e.to_string(), w.to_string(), m.to_string())
            }
            None => (String::new(), String::new(), String::new()),
        };
        w.write_record([
            c.scenario_id.to_string(),
            c.scenario.rule.to_string(),
            c.scenario.rule.data_source().map(|s| s.label().to_string()).unwrap_or_default(),
            c.scenario.design.n1.to_string(),
            ess,
            w_r,
            prior_mean,
            c.scenario.true_sigma2.to_string(),
            c.scenario.true_delta.to_string(),
            c.result.replications.to_string(),
            c.result.seed.to_string(),
            c.result.rejection_rate.to_string(),
            c.result.mc_standard_error.to_string(),
            c.result.n_mean.to_string(),
            c.result.n_p10.to_string(),
            c.result.n_median.to_string(),
            c.result.n_p90.to_string(),
        ])?;
    }
    w.flush().map_err(Error::Io)?;
    Ok(())
}
