//! Command-line front end: simulate, fit, select, se, decode and
//! sensitivity over long-format panel files.

mod config;
mod report;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use hmmdrop::em::{e_step, fit_with, FitOptions, ProgressEvent};
use hmmdrop::io::{read_panel_path, write_panel_path, write_truth};
use hmmdrop::selection::{fit_grid, read_grid_csv, select, sensitivity_compare, GridReport};
use hmmdrop::simulate::{simulate_panel, StandardCovariates};
use hmmdrop::{sandwich_covariance, CovarianceReport, Error, FitResult, ModelSpec, PanelData, ParameterSet};

use config::{parse_range, GridSection, RunConfig};
use report::JsonLines;

#[derive(Parser)]
#[command(name = "hmmdrop", version, about = "Hidden Markov models for longitudinal responses with informative dropout")]
struct Cli {
    /// Worker threads (0 = all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a synthetic panel from a parameter file.
    Simulate(SimulateArgs),
    /// Fit one (G, K, H) model.
    Fit(FitArgs),
    /// Fit a grid of models and select by BIC, or replay a stored grid.
    Select(SelectArgs),
    /// Sandwich standard errors at given parameters.
    Se(ParamsArgs),
    /// Posterior class and state probabilities at given parameters.
    Decode(ParamsArgs),
    /// Compare a non-ignorable fit with its ignorable (H = 1) counterpart.
    Sensitivity(FitArgs),
}

#[derive(Args, Clone)]
struct Common {
    /// Long-format panel CSV.
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long, default_value = "out")]
    output_dir: PathBuf,
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Clone)]
struct EmArgs {
    #[arg(long)]
    starts: Option<usize>,
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    max_iter: Option<usize>,
}

#[derive(Args, Clone)]
struct FitArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    em: EmArgs,
    #[arg(long = "G")]
    g: Option<usize>,
    #[arg(long = "K")]
    k: Option<usize>,
    #[arg(long = "H")]
    h: Option<usize>,
    /// Also compute sandwich standard errors.
    #[arg(long)]
    se: bool,
    /// Force H = 1 (missing at random).
    #[arg(long)]
    mar: bool,
}

#[derive(Args)]
struct SelectArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    em: EmArgs,
    /// Range such as 2-5.
    #[arg(long = "G")]
    g: Option<String>,
    #[arg(long = "K")]
    k: Option<String>,
    #[arg(long = "H")]
    h: Option<String>,
    /// Select from precomputed cells (long or wide grid CSV) instead of fitting.
    #[arg(long)]
    replay: Option<PathBuf>,
    /// Subjects, for replay files that carry log-likelihoods but no BIC.
    #[arg(long)]
    n_subjects: Option<usize>,
}

#[derive(Args)]
struct ParamsArgs {
    #[command(flatten)]
    common: Common,
    /// Parameter file written by `fit`.
    #[arg(long)]
    params: PathBuf,
}

#[derive(Args)]
struct SimulateArgs {
    /// Parameter file with the generating values.
    #[arg(long)]
    params: PathBuf,
    #[arg(long, default_value_t = 500)]
    n: usize,
    #[arg(long, default_value_t = 6)]
    waves: usize,
    /// Success probability of a binary covariate; repeat for more columns.
    #[arg(long = "binary")]
    binary: Vec<f64>,
    /// Leave out the wave-offset covariate.
    #[arg(long)]
    no_time: bool,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value = "out")]
    output_dir: PathBuf,
}

/// Exit status for a failure: 1 input, 2 non-convergence, 3 numerical.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<Error>()) {
        Some(Error::NoConvergedCell) => 2,
        Some(
            Error::Underflow { .. }
            | Error::NonFinite { .. }
            | Error::DegeneratePosterior { .. }
            | Error::AllStartsDegenerate { .. }
            | Error::Boundary(_)
            | Error::NonFiniteDerivative { .. }
            | Error::TooLarge { .. },
        ) => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cli: Cli) -> Result<u8> {
    if let Some(n) = cli.workers {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("configuring worker threads")?;
    }
    match cli.command {
        Command::Simulate(a) => cmd_simulate(a),
        Command::Fit(a) => cmd_fit(a, cli.workers),
        Command::Select(a) => cmd_select(a, cli.workers),
        Command::Se(a) => cmd_se(a, cli.workers),
        Command::Decode(a) => cmd_decode(a, cli.workers),
        Command::Sensitivity(a) => cmd_sensitivity(a, cli.workers),
    }
}

fn load_config(common: &Common, em: Option<&EmArgs>, workers: Option<usize>) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(common.config.as_deref())?;
    if let Some(s) = common.seed {
        cfg.em.seed = s;
    }
    if let Some(em) = em {
        if let Some(v) = em.starts {
            cfg.em.starts = v;
        }
        if let Some(v) = em.tol {
            cfg.em.tol = v;
        }
        if let Some(v) = em.max_iter {
            cfg.em.max_iter = v;
        }
    }
    if let Some(w) = workers {
        cfg.workers = w;
    }
    Ok(cfg)
}

fn prepare_output(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating output directory {}", dir.display()))
}

fn load_data(common: &Common, cfg: &RunConfig) -> Result<PanelData> {
    let input = common.input.as_deref().context("--input is required")?;
    let ingested = read_panel_path(input, &cfg.data).with_context(|| format!("reading {}", input.display()))?;
    if !ingested.dropped.is_empty() {
        log::warn!("{} subject(s) dropped for incomplete covariates", ingested.dropped.len());
    }
    Ok(ingested.data)
}

fn cmd_simulate(a: SimulateArgs) -> Result<u8> {
    let params = report::read_params_json(&a.params)?;
    let cov = StandardCovariates { time: !a.no_time, binary: a.binary.clone() };
    let width = cov.width();
    let spec = ModelSpec::new(params.zeta.len(), params.xi.len(), params.tau.len(), width, width);
    let (data, truth) = simulate_panel(&params, &spec, a.n, a.waves, &cov, a.seed)?;
    prepare_output(&a.output_dir)?;
    write_panel_path(&a.output_dir.join("panel.csv"), &data)?;
    write_truth(std::fs::File::create(a.output_dir.join("truth.csv"))?, &truth)?;
    report::write_params_json(&a.output_dir.join("params.json"), &params)?;
    let names = cov.names();
    let cfg = RunConfig {
        data: hmmdrop::io::IngestConfig { x: names.clone(), w: names, n_waves: Some(a.waves), ..Default::default() },
        model: config::ModelSection { g: spec.n_states, k: spec.n_classes, h: spec.n_upper },
        em: hmmdrop::EmControls { seed: a.seed, ..Default::default() },
        ..Default::default()
    };
    cfg.save(&a.output_dir.join("config_used.toml"))?;
    println!("simulated {} subjects over {} waves into {}", a.n, a.waves, a.output_dir.display());
    Ok(0)
}

fn fit_spec(a: &FitArgs, cfg: &mut RunConfig, data: &PanelData) -> Result<ModelSpec> {
    if let Some(g) = a.g {
        cfg.model.g = g;
    }
    if let Some(k) = a.k {
        cfg.model.k = k;
    }
    if let Some(h) = a.h {
        cfg.model.h = h;
    }
    if a.mar {
        cfg.model.h = 1;
    }
    cfg.validate()?;
    Ok(ModelSpec::for_data(data, cfg.model.g, cfg.model.k, cfg.model.h).with_em(cfg.em.clone()))
}

fn run_fit(data: &PanelData, spec: &ModelSpec, progress: Option<&JsonLines>) -> Result<FitResult> {
    let cb = |e: &ProgressEvent| {
        if let Some(p) = progress {
            p.push(&e.to_json_line());
        }
    };
    Ok(fit_with(data, spec, FitOptions { progress: Some(&cb), ..FitOptions::default() })?)
}

/// Writes every artefact of a fit into `dir`.
fn write_fit(dir: &Path, data: &PanelData, fit: &FitResult, cov: Option<&CovarianceReport>) -> Result<()> {
    report::write_params_json(&dir.join("params.json"), &fit.theta_hat)?;
    report::write_parameter_table(&dir.join("parameters.csv"), &fit.theta_hat, data, cov)?;
    report::write_trace(&dir.join("trace.csv"), fit)?;
    std::fs::write(dir.join("fit.json"), serde_json::to_string_pretty(fit)?)?;
    let post = e_step(data, &fit.theta_hat, &fit.spec)?;
    report::write_assignments(&dir.join("assignments.csv"), data, &post)?;
    report::write_posteriors(dir, data, &post)?;
    if let Some(c) = cov {
        c.write_covariance_csv(&dir.join("covariance.csv"))?;
    }
    Ok(())
}

fn standard_errors(data: &PanelData, fit: &FitResult) -> Option<CovarianceReport> {
    match sandwich_covariance(data, &fit.theta_hat, &fit.spec) {
        Ok(c) => {
            if c.pseudo_inverse_used {
                log::warn!("information matrix singular (condition {:.3e}); pseudo-inverse used", c.condition);
            }
            if !c.negative_variance.is_empty() {
                log::warn!("negative variance for {}", c.negative_variance.join(", "));
            }
            Some(c)
        }
        Err(e) => {
            log::warn!("standard errors unavailable: {e}");
            None
        }
    }
}

fn cmd_fit(a: FitArgs, workers: Option<usize>) -> Result<u8> {
    let mut cfg = load_config(&a.common, Some(&a.em), workers)?;
    let data = load_data(&a.common, &cfg)?;
    let spec = fit_spec(&a, &mut cfg, &data)?;
    prepare_output(&a.common.output_dir)?;
    let dir = &a.common.output_dir;
    cfg.save(&dir.join("config_used.toml"))?;
    let progress = JsonLines::create(&dir.join("progress.jsonl"))?;
    let fit = run_fit(&data, &spec, Some(&progress))?;
    progress.finish()?;
    let cov = if a.se { standard_errors(&data, &fit) } else { None };
    write_fit(dir, &data, &fit, cov.as_ref())?;
    println!(
        "G={} K={} H={}: loglik {:.4}, BIC {:.4}, {} iterations, {}",
        spec.n_states,
        spec.n_classes,
        spec.n_upper,
        fit.loglik,
        fit.bic,
        fit.n_iter,
        if fit.converged { "converged" } else { "not converged" }
    );
    for w in &fit.warnings {
        log::warn!("{w}");
    }
    Ok(if fit.converged { 0 } else { 2 })
}

fn print_selection(report: &GridReport) {
    let c = report.selected_cell();
    println!("selected G={} K={} H={} with BIC {}", c.g, c.k, c.h, c.bic);
}

fn write_selection(dir: &Path, report: &GridReport) -> Result<()> {
    report.write_table_csv(&dir.join("grid_table.csv"))?;
    report.write_long_csv(&dir.join("grid_cells.csv"))?;
    let c = report.selected_cell();
    std::fs::write(
        dir.join("selected.json"),
        serde_json::to_string_pretty(&serde_json::json!({ "G": c.g, "K": c.k, "H": c.h, "bic": c.bic }))?,
    )?;
    Ok(())
}

fn cmd_select(a: SelectArgs, workers: Option<usize>) -> Result<u8> {
    let mut cfg = load_config(&a.common, Some(&a.em), workers)?;
    prepare_output(&a.common.output_dir)?;
    let dir = &a.common.output_dir;
    if let Some(path) = &a.replay {
        let cells = read_grid_csv(path, a.n_subjects).with_context(|| format!("reading {}", path.display()))?;
        let report = select(cells)?;
        write_selection(dir, &report)?;
        print_selection(&report);
        return Ok(0);
    }
    let grid = GridSection {
        g: a.g.clone().unwrap_or(cfg.grid.g.clone()),
        k: a.k.clone().unwrap_or(cfg.grid.k.clone()),
        h: a.h.clone().unwrap_or(cfg.grid.h.clone()),
    };
    for r in [&grid.g, &grid.k, &grid.h] {
        parse_range(r)?;
    }
    cfg.grid = grid;
    let data = load_data(&a.common, &cfg)?;
    cfg.save(&dir.join("config_used.toml"))?;
    let (report, fits) = fit_grid(&data, &cfg.grid.ranges()?, &cfg.em)?;
    write_selection(dir, &report)?;
    if let Some(best) = &fits[report.selected] {
        let sub = dir.join("selected");
        prepare_output(&sub)?;
        write_fit(&sub, &data, best, None)?;
    }
    print_selection(&report);
    Ok(0)
}

fn params_spec(params: &ParameterSet, data: &PanelData, cfg: &RunConfig) -> Result<ModelSpec> {
    let spec = ModelSpec::for_data(data, params.zeta.len(), params.xi.len(), params.tau.len()).with_em(cfg.em.clone());
    params.check_dims(&spec).context("parameter file does not match the data")?;
    params.validate(&spec)?;
    Ok(spec)
}

fn cmd_se(a: ParamsArgs, workers: Option<usize>) -> Result<u8> {
    let cfg = load_config(&a.common, None, workers)?;
    let data = load_data(&a.common, &cfg)?;
    let params = report::read_params_json(&a.params)?;
    let spec = params_spec(&params, &data, &cfg)?;
    prepare_output(&a.common.output_dir)?;
    let dir = &a.common.output_dir;
    let cov = sandwich_covariance(&data, &params, &spec)?;
    report::write_parameter_table(&dir.join("parameters.csv"), &params, &data, Some(&cov))?;
    cov.write_covariance_csv(&dir.join("covariance.csv"))?;
    let (score, scale) = cov.score_check();
    println!("score norm {score:.3e} (information norm {scale:.3e}); condition {:.3e}", cov.condition);
    Ok(0)
}

fn cmd_decode(a: ParamsArgs, workers: Option<usize>) -> Result<u8> {
    let cfg = load_config(&a.common, None, workers)?;
    let data = load_data(&a.common, &cfg)?;
    let params = report::read_params_json(&a.params)?;
    let spec = params_spec(&params, &data, &cfg)?;
    prepare_output(&a.common.output_dir)?;
    let post = e_step(&data, &params, &spec)?;
    report::write_posteriors(&a.common.output_dir, &data, &post)?;
    report::write_assignments(&a.common.output_dir.join("assignments.csv"), &data, &post)?;
    println!("decoded {} subjects", data.n_subjects());
    Ok(0)
}

fn cmd_sensitivity(a: FitArgs, workers: Option<usize>) -> Result<u8> {
    let mut cfg = load_config(&a.common, Some(&a.em), workers)?;
    let data = load_data(&a.common, &cfg)?;
    let spec = fit_spec(&FitArgs { mar: false, ..a.clone() }, &mut cfg, &data)?;
    if spec.n_upper < 2 {
        bail!("the sensitivity comparison needs H >= 2 for the non-ignorable fit");
    }
    let mut mar_spec = spec.clone();
    mar_spec.n_upper = 1;
    prepare_output(&a.common.output_dir)?;
    let dir = &a.common.output_dir;
    cfg.save(&dir.join("config_used.toml"))?;
    let mnar = run_fit(&data, &spec, None)?;
    let mar = run_fit(&data, &mar_spec, None)?;
    let covs = if a.se { standard_errors(&data, &mnar).zip(standard_errors(&data, &mar)) } else { None };
    let rep = sensitivity_compare(&mnar, &mar, covs.as_ref().map(|(x, y)| (x, y)), &data.x_names, &data.w_names)?;
    rep.write_csv(&dir.join("sensitivity.csv"))?;
    for (name, fit, cov) in [("mnar", &mnar, covs.as_ref().map(|c| &c.0)), ("mar", &mar, covs.as_ref().map(|c| &c.1))] {
        let sub = dir.join(name);
        prepare_output(&sub)?;
        write_fit(&sub, &data, fit, cov)?;
    }
    println!("BIC difference (H={} minus H=1): {:.4}", spec.n_upper, rep.bic_diff);
    Ok(if mnar.converged && mar.converged { 0 } else { 2 })
}
