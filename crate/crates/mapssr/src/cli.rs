//! Command-line front end: sizing, MAP fitting, posterior updates, scenario
//! simulation, and flag-free reproduction of the built-in study grids.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::constants::{
    blood_pressure_mixture, blood_pressure_trials, simulation_design, st_johns_mixture,
    st_johns_trials, DELTA_STAR_BLOOD_PRESSURE, DELTA_STAR_ST_JOHNS,
};
use crate::distmath::{GammaMixture, Scale};
use crate::error::{Error, Result};
use crate::mapprior::{fit_map, HierarchicalModelConfig, MapFitResult};
use crate::posterior::{
    posterior_mean_sigma2, posterior_median_sigma2, update_with_variance, PilotSummary,
};
use crate::samplesize::{
    expected_power, plan_from_prior, power, required_n, Allocation, DesignParams, PlanningRule,
};
use crate::simengine::{
    posterior_mean_curve, run_grid, write_results_csv, GridCell, PriorSpec, Scenario, Sweep,
    SweepValues,
};
use crate::ssr::{reestimate, DataSource, PilotData, ReestimationRule};

#[derive(Debug, Parser)]
#[command(name = "mapssr", version, about = "Sample size re-estimation with MAP variance priors")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Compute the required total sample size from a known variance or a
    /// prior plus planning rule.
    Samplesize(SamplesizeArgs),
    /// Fit a MAP prior from a CSV of historical variance estimates.
    MapFit(MapFitArgs),
    /// Update a Gamma-mixture prior with an interim variance estimate.
    Update(UpdateArgs),
    /// Run a Monte Carlo scenario or scenario grid from a JSON config.
    Simulate(SimulateArgs),
    /// Regenerate a built-in study grid by id.
    Reproduce(ReproduceArgs),
}

#[derive(Debug, Args)]
pub struct SamplesizeArgs {
    /// Known outcome variance; mutually exclusive with --prior-json.
    #[arg(long)]
    pub sigma2: Option<f64>,
    /// Path to a Gamma-mixture prior JSON.
    #[arg(long)]
    pub prior_json: Option<PathBuf>,
    /// Planning rule for prior-based sizing.
    #[arg(long, default_value = "mean", value_parser = ["mean", "median", "expected_power"])]
    pub rule: String,
    #[arg(long)]
    pub delta_star: f64,
    #[arg(long, default_value_t = 0.025)]
    pub alpha: f64,
    #[arg(long, default_value_t = 0.8)]
    pub power: f64,
    /// Allocation ratio control:treatment.
    #[arg(long, default_value = "1:1")]
    pub ratio: String,
    #[arg(long)]
    pub n_max: Option<u64>,
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct MapFitArgs {
    /// CSV with columns trial_id, sample_variance, df.
    #[arg(long)]
    pub trials: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub chains: usize,
    #[arg(long, default_value_t = 25_000)]
    pub iterations: usize,
    #[arg(long, default_value_t = 5_000)]
    pub burn_in: usize,
    #[arg(long, default_value_t = 4)]
    pub thinning: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Accept the fit even if R-hat diagnostics fail.
    #[arg(long)]
    pub force: bool,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct UpdateArgs {
    /// Path to a Gamma-mixture prior JSON.
    #[arg(long)]
    pub prior_json: PathBuf,
    /// Interim variance estimate.
    #[arg(long)]
    pub variance: f64,
    /// Degrees of freedom of the estimate.
    #[arg(long)]
    pub df: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Scenario config JSON: {"base": Scenario, "sweeps": [...]}.
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub reps: Option<u64>,
    #[arg(long, env = "MAPSSR_WORKERS")]
    pub workers: Option<usize>,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReproduceArgs {
    /// One of fig1, fig2, fig3, fig4, fig5, fig6, table1, table2.
    #[arg(long)]
    pub id: String,
    #[arg(long, default_value_t = 20_240_523)]
    pub seed: u64,
    #[arg(long)]
    pub reps: Option<u64>,
    #[arg(long, env = "MAPSSR_WORKERS")]
    pub workers: Option<usize>,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

/// Process exit code for an error: 2 validation, 3 convergence, 4 runtime.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Convergence(_) => 3,
        Error::Io(_) => 4,
        _ => 2,
    }
}

#[derive(Serialize)]
struct RunManifest {
    tool_version: &'static str,
    subcommand: String,
    config: serde_json::Value,
    master_seed: Option<u64>,
    outputs: Vec<String>,
    duration_secs: f64,
}

fn write_manifest(
    out_dir: &Path,
    stem: &str,
    subcommand: &str,
    config: serde_json::Value,
    master_seed: Option<u64>,
    outputs: &[PathBuf],
    started: Instant,
) -> Result<()> {
    let manifest = RunManifest {
        tool_version: env!("CARGO_PKG_VERSION"),
        subcommand: subcommand.to_string(),
        config,
        master_seed,
        outputs: outputs.iter().map(|p| p.display().to_string()).collect(),
        duration_secs: started.elapsed().as_secs_f64(),
    };
    let path = out_dir.join(format!("{stem}.manifest.json"));
    fs::write(path, serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

fn parse_ratio(s: &str) -> Result<Allocation> {
    let (c, t) = s
        .split_once(':')
        .ok_or_else(|| Error::invalid(format!("ratio must look like `1:1`, got `{s}`")))?;
    let c: u32 = c.trim().parse().map_err(|_| Error::invalid(format!("bad ratio part `{c}`")))?;
    let t: u32 = t.trim().parse().map_err(|_| Error::invalid(format!("bad ratio part `{t}`")))?;
    Allocation::new(c, t)
}

fn read_mixture(path: &Path) -> Result<GammaMixture> {
    let text = fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

fn default_workers() -> usize {
    std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
}

#[derive(Serialize)]
struct SamplesizeReport {
    n: u64,
    achieved_power: f64,
    rule: String,
    sigma2: Option<f64>,
}

fn cmd_samplesize(a: &SamplesizeArgs) -> Result<()> {
    let allocation = parse_ratio(&a.ratio)?;
    let n1 = allocation.min_total() as u32;
    let d = DesignParams::new(a.alpha, a.power, a.delta_star, allocation, n1, a.n_max)?;
    let report = match (&a.sigma2, &a.prior_json) {
        (Some(_), Some(_)) => {
            return Err(Error::invalid("--sigma2 and --prior-json are mutually exclusive"));
        }
        (None, None) => {
            return Err(Error::invalid("one of --sigma2 or --prior-json is required"));
        }
        (Some(s2), None) => {
            let n = required_n(*s2, &d)?;
            SamplesizeReport {
                n,
                achieved_power: power(n, *s2, a.delta_star, &d)?,
                rule: "fixed_variance".to_string(),
                sigma2: Some(*s2),
            }
        }
        (None, Some(path)) => {
            let prior = read_mixture(path)?;
            let rule = match a.rule.as_str() {
                "mean" => PlanningRule::Mean,
                "median" => PlanningRule::Median,
                "expected_power" => PlanningRule::ExpectedPower,
                other => return Err(Error::invalid(format!("unknown planning rule `{other}`"))),
            };
            let n = plan_from_prior(&d, &prior, rule)?;
            let achieved = match rule {
                PlanningRule::ExpectedPower => expected_power(n, &d, &prior)?,
                PlanningRule::Mean => power(n, prior.mean(Scale::Variance)?, a.delta_star, &d)?,
                PlanningRule::Median => {
                    power(n, prior.quantile(0.5, Scale::Variance)?, a.delta_star, &d)?
                }
                PlanningRule::Quantile(p) => {
                    power(n, prior.quantile(p, Scale::Variance)?, a.delta_star, &d)?
                }
            };
            SamplesizeReport { n, achieved_power: achieved, rule: a.rule.clone(), sigma2: None }
        }
    };
    if a.json {
        println!("{}", serde_json::to_string_pretty(&report)?);
    } else {
        println!("rule: {}", report.rule);
        if let Some(s2) = report.sigma2 {
            println!("sigma2: {s2}");
        }
        println!("n: {}", report.n);
        println!("achieved_power: {:.5}", report.achieved_power);
    }
    Ok(())
}

#[derive(Serialize)]
struct MixtureSummaryRow {
    scale: &'static str,
    mean: f64,
    sd: f64,
    median: f64,
    q025: f64,
    q975: f64,
}

fn mixture_summary(m: &GammaMixture) -> Result<Vec<MixtureSummaryRow>> {
    let mut rows = Vec::new();
    for (name, scale) in
        [("sigma2", Scale::Variance), ("sigma", Scale::Sd), ("omega", Scale::Precision)]
    {
        rows.push(MixtureSummaryRow {
            scale: name,
            mean: m.mean(scale)?,
            sd: m.sd(scale)?,
            median: m.quantile(0.5, scale)?,
            q025: m.quantile(0.025, scale)?,
            q975: m.quantile(0.975, scale)?,
        });
    }
    Ok(rows)
}

fn print_summary(rows: &[MixtureSummaryRow]) {
    println!("{:<8}{:>12}{:>12}{:>12}{:>12}{:>12}", "scale", "mean", "sd", "median", "2.5%", "97.5%");
    for r in rows {
        println!(
            "{:<8}{:>12.5}{:>12.5}{:>12.5}{:>12.5}{:>12.5}",
            r.scale, r.mean, r.sd, r.median, r.q025, r.q975
        );
    }
}

#[derive(Serialize)]
struct MapFitReport<'a> {
    mixture: &'a GammaMixture,
    ess: f64,
    diagnostics: &'a crate::mapprior::Diagnostics,
    summary: Vec<MixtureSummaryRow>,
}

fn cmd_map_fit(a: &MapFitArgs) -> Result<()> {
    let started = Instant::now();
    let trials = crate::mapprior::read_trials_csv(fs::File::open(&a.trials)?)?;
    let cfg = HierarchicalModelConfig {
        chains: a.chains,
        iterations: a.iterations,
        burn_in: a.burn_in,
        thinning: a.thinning,
        seed: a.seed,
        ..Default::default()
    };
    let fit: MapFitResult = fit_map(&trials, &cfg)?;
    if !fit.diagnostics.converged && !a.force {
        let worst = fit
            .diagnostics
            .rhat
            .iter()
            .map(|(n, r)| format!("{n}={r:.4}"))
            .collect::<Vec<_>>()
            .join(", ");
        return Err(Error::Convergence(format!(
            "R-hat above {:.3} ({worst}); rerun longer or pass --force",
            cfg.rhat_threshold
        )));
    }
    let report =
        MapFitReport { mixture: &fit.mixture, ess: fit.ess, diagnostics: &fit.diagnostics, summary: mixture_summary(&fit.mixture)? };
    fs::create_dir_all(&a.out)?;
    let out_path = a.out.join("map_fit.json");
    fs::write(&out_path, serde_json::to_vec_pretty(&report)?)?;
    if a.json {
        println!("{}", serde_json::to_string_pretty(&report)?);
    } else {
        print_summary(&report.summary);
        println!("ess: {:.2}", report.ess);
        println!("converged: {}", fit.diagnostics.converged);
    }
    write_manifest(
        &a.out,
        "map_fit",
        "map-fit",
        serde_json::to_value(&cfg)?,
        Some(a.seed),
        &[out_path],
        started,
    )
}

#[derive(Serialize)]
struct UpdateReport {
    posterior: GammaMixture,
    posterior_mean_sigma2: f64,
    posterior_median_sigma2: f64,
}

fn cmd_update(a: &UpdateArgs) -> Result<()> {
    let prior = read_mixture(&a.prior_json)?;
    let post = update_with_variance(&prior, a.variance, a.df)?;
    let report = UpdateReport {
        posterior_mean_sigma2: posterior_mean_sigma2(&post)?,
        posterior_median_sigma2: posterior_median_sigma2(&post)?,
        posterior: post,
    };
    let text = serde_json::to_string_pretty(&report)?;
    if let Some(out) = &a.out {
        if let Some(dir) = out.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir)?;
            }
        }
        fs::write(out, &text)?;
    }
    if a.json || a.out.is_none() {
        println!("{text}");
    } else {
        println!("posterior_mean_sigma2: {:.6}", report.posterior_mean_sigma2);
        println!("posterior_median_sigma2: {:.6}", report.posterior_median_sigma2);
    }
    Ok(())
}

#[derive(Debug, serde::Deserialize, Serialize)]
pub struct SimulationConfig {
    pub base: Scenario,
    #[serde(default)]
    pub sweeps: Vec<Sweep>,
}

fn cmd_simulate(a: &SimulateArgs) -> Result<()> {
    let started = Instant::now();
    let text = fs::read_to_string(&a.config)?;
    let mut cfg: SimulationConfig = serde_json::from_str(&text)?;
    if let Some(seed) = a.seed {
        cfg.base.master_seed = seed;
    }
    if let Some(reps) = a.reps {
        cfg.base.replications = reps;
    }
    let workers = a.workers.unwrap_or_else(default_workers);
    let cells = run_grid(&cfg.base, &cfg.sweeps, workers)?;
    fs::create_dir_all(&a.out)?;
    let out_path = a.out.join("results.csv");
    let file = fs::File::create(&out_path)?;
    write_results_csv(&cells, file)?;
    println!("wrote {} rows to {}", cells.len(), out_path.display());
    write_manifest(
        &a.out,
        "results",
        "simulate",
        serde_json::to_value(&cfg)?,
        Some(cfg.base.master_seed),
        &[out_path],
        started,
    )
}

// ---------------------------------------------------------------------------
// reproduce

fn interim_sweep_rows(
    delta_star: f64,
    prior: &GammaMixture,
    n1_list: &[u32],
    var_grid: &[f64],
) -> Result<Vec<(u32, f64, String, u64, u64)>> {
    let rules = [
        ReestimationRule::PooledPlugin,
        ReestimationRule::BayesMean(DataSource::UnblindedPooled),
        ReestimationRule::BayesMedian(DataSource::UnblindedPooled),
    ];
    let mut rows = Vec::new();
    for &n1 in n1_list {
        let d = DesignParams::standard(delta_star, n1)?;
        for &v in var_grid {
            let n1_total = n1 as u64;
            let pilot = PilotData::Summary(PilotSummary::new(
                n1_total / 2,
                n1_total - n1_total / 2,
                0.0,
                0.0,
                v,
            )?);
            for rule in &rules {
                let out = reestimate(&d, rule, &pilot, Some(prior))?;
                rows.push((n1, v, rule.to_string(), out.n_reest, out.n_final));
            }
        }
    }
    Ok(rows)
}

fn write_interim_csv(path: &Path, rows: &[(u32, f64, String, u64, u64)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(fs::File::create(path)?);
    w.write_record(["n1", "sigma2_hat", "rule", "n_reest", "n_final"])?;
    for (n1, v, rule, n_reest, n_final) in rows {
        w.write_record([
            n1.to_string(),
            v.to_string(),
            rule.clone(),
            n_reest.to_string(),
            n_final.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn write_summary_csv(path: &Path, m: &GammaMixture) -> Result<()> {
    let mut w = csv::Writer::from_writer(fs::File::create(path)?);
    w.write_record(["scale", "mean", "sd", "median", "q025", "q975"])?;
    for r in mixture_summary(m)? {
        w.write_record([
            r.scale.to_string(),
            r.mean.to_string(),
            r.sd.to_string(),
            r.median.to_string(),
            r.q025.to_string(),
            r.q975.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn float_steps(lo: f64, hi: f64, step: f64) -> Vec<f64> {
    let mut out = Vec::new();
    let mut i = 0u32;
    loop {
        let v = lo + step * i as f64;
        if v > hi + 1e-9 {
            break;
        }
        out.push((v * 1e9).round() / 1e9);
        i += 1;
    }
    out
}

fn base_mc_scenario(seed: u64, reps: u64) -> Result<Scenario> {
    Ok(Scenario {
        design: simulation_design(60)?,
        true_sigma2: 1.0,
        true_delta: 0.5,
        rule: ReestimationRule::BayesMean(DataSource::UnblindedPooled),
        prior: Some(PriorSpec::Conjugate { sigma2_mean: 1.0, ess: 25.0, robust_weight: 0.0 }),
        replications: reps,
        master_seed: seed,
        block_m: 4,
    })
}

fn mc_grid_cells(
    a: &ReproduceArgs,
    prior_mean: f64,
    ess_list: Vec<f64>,
    sweeps_extra: Vec<Sweep>,
    rules: Vec<ReestimationRule>,
) -> Result<Vec<GridCell>> {
    let reps = a.reps.unwrap_or(50_000);
    let mut base = base_mc_scenario(a.seed, reps)?;
    base.prior = Some(PriorSpec::Conjugate { sigma2_mean: prior_mean, ess: 25.0, robust_weight: 0.0 });
    let mut sweeps = vec![
        Sweep { field: "ess".into(), values: SweepValues::Numbers(ess_list) },
        Sweep { field: "rule".into(), values: SweepValues::Rules(rules) },
    ];
    sweeps.extend(sweeps_extra);
    run_grid(&base, &sweeps, a.workers.unwrap_or_else(default_workers))
}

fn cmd_reproduce(a: &ReproduceArgs) -> Result<()> {
    let started = Instant::now();
    fs::create_dir_all(&a.out)?;
    let out_path = a.out.join(format!("{}.csv", a.id));
    let n1_sweep = Sweep {
        field: "n1".into(),
        values: SweepValues::Numbers((1..=10).map(|i| (10 * i) as f64).collect()),
    };
    let bayes_rules = vec![
        ReestimationRule::PooledPlugin,
        ReestimationRule::BayesMean(DataSource::UnblindedPooled),
        ReestimationRule::BayesMedian(DataSource::UnblindedPooled),
    ];
    match a.id.as_str() {
        "fig1" => {
            let rows = interim_sweep_rows(
                DELTA_STAR_ST_JOHNS,
                &st_johns_mixture(),
                &[25, 75, 125],
                &float_steps(20.0, 70.0, 1.0),
            )?;
            write_interim_csv(&out_path, &rows)?;
        }
        "fig2" => {
            let rows = interim_sweep_rows(
                DELTA_STAR_BLOOD_PRESSURE,
                &blood_pressure_mixture(),
                &[25, 75, 125],
                &float_steps(150.0, 400.0, 5.0),
            )?;
            write_interim_csv(&out_path, &rows)?;
        }
        "table1" => write_summary_csv(&out_path, &st_johns_mixture())?,
        "table2" => write_summary_csv(&out_path, &blood_pressure_mixture())?,
        "fig3" => {
            let cells =
                mc_grid_cells(a, 1.0, vec![6.0, 25.0, 50.0], vec![n1_sweep], bayes_rules)?;
            write_results_csv(&cells, fs::File::create(&out_path)?)?;
        }
        "fig4" => {
            let cells = mc_grid_cells(
                a,
                0.49,
                vec![6.0, 15.0, 25.0, 50.0],
                vec![n1_sweep],
                vec![
                    ReestimationRule::PooledPlugin,
                    ReestimationRule::BayesMean(DataSource::UnblindedPooled),
                ],
            )?;
            write_results_csv(&cells, fs::File::create(&out_path)?)?;
        }
        "fig5" => {
            let w_r_sweep = Sweep {
                field: "w_r".into(),
                values: SweepValues::Numbers(float_steps(0.05, 0.95, 0.05)),
            };
            let cells = mc_grid_cells(
                a,
                0.49,
                vec![25.0, 50.0],
                vec![w_r_sweep],
                vec![ReestimationRule::BayesMean(DataSource::UnblindedPooled)],
            )?;
            write_results_csv(&cells, fs::File::create(&out_path)?)?;
        }
        "fig6" => {
            let priors = vec![
                crate::mapprior::scenario_prior(0.49, 25.0)?,
                crate::mapprior::scenario_prior(0.49, 50.0)?,
            ];
            let ess_labels = [25.0, 50.0];
            let points = posterior_mean_curve(
                &priors,
                1.0,
                &[25, 50, 75],
                &float_steps(0.0, 1.0, 0.05),
            )?;
            let mut w = csv::Writer::from_writer(fs::File::create(&out_path)?);
            w.write_record(["ess", "n1", "w_R", "posterior_mean"])?;
            for p in points {
                w.write_record([
                    ess_labels[p.prior_index].to_string(),
                    p.n1.to_string(),
                    p.w_r.to_string(),
                    p.posterior_mean.to_string(),
                ])?;
            }
            w.flush()?;
        }
        other => {
            return Err(Error::invalid(format!(
                "unknown id `{other}`; valid ids: fig1, fig2, fig3, fig4, fig5, fig6, table1, table2"
            )));
        }
    }
    println!("wrote {}", out_path.display());
    write_manifest(
        &a.out,
        &a.id,
        "reproduce",
        serde_json::json!({ "id": a.id, "reps": a.reps }),
        Some(a.seed),
        &[out_path],
        started,
    )
}

/// Built-in example datasets are exposed through `reproduce`; this writes
/// them as CSVs so `map-fit` demos are self-contained.
pub fn write_builtin_trials(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (name, trials) in
        [("st_johns_trials.csv", st_johns_trials()), ("blood_pressure_trials.csv", blood_pressure_trials())]
    {
        let mut w = csv::Writer::from_writer(fs::File::create(dir.join(name))?);
        w.write_record(["trial_id", "sample_variance", "df"])?;
        for (i, t) in trials.iter().enumerate() {
            w.write_record([
                format!("trial_{:02}", i + 1),
                t.sample_variance.to_string(),
                t.df.to_string(),
            ])?;
        }
        w.flush()?;
    }
    Ok(())
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Samplesize(a) => cmd_samplesize(a),
        Command::MapFit(a) => cmd_map_fit(a),
        Command::Update(a) => cmd_update(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Reproduce(a) => cmd_reproduce(a),
    }
}
