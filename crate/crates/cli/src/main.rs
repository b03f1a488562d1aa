//! Command-line interface: simulate, fit, evaluate, assign, diagnose, summary.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use metroflow::assign::{assignment_from_draws, prior_assignment, AssignmentTable};
use metroflow::data::{ensure_path_sets, ingest_trips, write_trips, Dataset, TripObservation};
use metroflow::eval::{coefficient_error_heatmap, convergence_report, evaluate_predictions, recovery_score, stratified_split};
use metroflow::gibbs::{self, posterior_summary, PosteriorDraws};
use metroflow::network::{CostKind, NetworkSpec};
use metroflow::simulate::{simulate, GroundTruth, Scale, SimConfig};
use metroflow::store::{read_store, write_store};
use metroflow::{build_network, ErrorCategory, NetworkModel, RunConfig};

#[derive(Parser)]
#[command(name = "metroflow", version, about = "Joint estimation of metro link costs and path choices from tap-in/tap-out trips")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScaleArg {
    Desk,
    Paper,
}

#[derive(clap::Args)]
struct Inputs {
    /// Network document (JSON).
    #[arg(long)]
    network: PathBuf,
    /// Trip file (CSV).
    #[arg(long)]
    trips: PathBuf,
    /// Run configuration (TOML). Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the configured burn-in.
    #[arg(long)]
    burn_in: Option<usize>,
    /// Override the configured number of post-burn-in iterations.
    #[arg(long)]
    samples: Option<usize>,
    /// Override the configured number of chains.
    #[arg(long)]
    chains: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic network, trip file, ground truth and run configuration.
    Simulate {
        #[arg(long, value_enum, default_value = "desk")]
        scale: ScaleArg,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the Gibbs sampler and write a posterior store.
    Fit {
        #[command(flatten)]
        inputs: Inputs,
        /// Store directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Predictive RMSE, MAE and CRPS on held-out trips, and recovery against a ground truth.
    Evaluate {
        #[command(flatten)]
        inputs: Inputs,
        /// Score every trip of the file against this store instead of splitting and fitting.
        #[arg(long)]
        store: Option<PathBuf>,
        /// Held-out fraction of each multi-path O-D pair.
        #[arg(long, default_value_t = 0.1)]
        fraction: f64,
        /// Predictive replicates per posterior draw.
        #[arg(long, default_value_t = 20)]
        replicates: usize,
        /// Posterior draws used per trip (evenly spaced).
        #[arg(long, default_value_t = 200)]
        max_draws: usize,
        /// Ground-truth file for recovery scoring.
        #[arg(long)]
        truth: Option<PathBuf>,
        #[arg(long, default_value_t = 0.95)]
        level: f64,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Path and link flow tables from a posterior store.
    Assign {
        #[arg(long)]
        network: PathBuf,
        #[arg(long)]
        store: PathBuf,
        /// Also write the assignment that ignores travel times.
        #[arg(long)]
        prior: bool,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Effective sample sizes, chain agreement and trace exports.
    Diagnose {
        #[arg(long)]
        network: PathBuf,
        #[arg(long)]
        store: PathBuf,
        /// Flag parameters with pooled ESS at or below this value.
        #[arg(long, default_value_t = 200.0)]
        threshold: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Posterior means and credible intervals of Θ, Φ, σ, q and x.
    Summary {
        #[arg(long)]
        network: PathBuf,
        #[arg(long)]
        store: PathBuf,
        #[arg(long, default_value_t = 0.95)]
        level: f64,
        /// Output CSV file.
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

/// 3 for input problems, 4 for numerical failures, 1 otherwise. Usage errors
/// exit with 2 from the argument parser.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<metroflow::Error>().map(|e| e.category()) {
        Some(ErrorCategory::Input) => 3,
        Some(ErrorCategory::Numerical) => 4,
        _ => 1,
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Simulate { scale, seed, out } => cmd_simulate(scale, seed, &out),
        Command::Fit { inputs, out } => cmd_fit(&inputs, &out),
        Command::Evaluate {
            inputs,
            store,
            fraction,
            replicates,
            max_draws,
            truth,
            level,
            out,
        } => cmd_evaluate(&inputs, store.as_deref(), fraction, replicates, max_draws, truth.as_deref(), level, &out),
        Command::Assign {
            network,
            store,
            prior,
            seed,
            out,
        } => cmd_assign(&network, &store, prior, seed, &out),
        Command::Diagnose {
            network,
            store,
            threshold,
            out,
        } => cmd_diagnose(&network, &store, threshold, &out),
        Command::Summary {
            network,
            store,
            level,
            out,
        } => cmd_summary(&network, &store, level, &out),
    }
}

fn load_network(path: &Path) -> Result<NetworkModel> {
    let spec = NetworkSpec::load(path).with_context(|| format!("reading network {}", path.display()))?;
    Ok(build_network(&spec)?)
}

fn load_config(inputs: &Inputs) -> Result<RunConfig> {
    let mut cfg = match &inputs.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("reading config {}", p.display()))?,
        None => RunConfig::default(),
    };
    if let Some(s) = inputs.seed {
        cfg.seed = s;
    }
    if let Some(b) = inputs.burn_in {
        cfg.burn_in = b;
    }
    if let Some(s) = inputs.samples {
        cfg.samples = s;
    }
    if let Some(c) = inputs.chains {
        cfg.chains = c;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Network with path sets for every O-D pair in the trips, the validated
/// trips and the configuration.
fn load_inputs(inputs: &Inputs) -> Result<(NetworkModel, Vec<TripObservation>, RunConfig)> {
    let cfg = load_config(inputs)?;
    let mut net = load_network(&inputs.network)?;
    let report = ingest_trips(&inputs.trips, &net, cfg.t_len(), cfg.max_bad_fraction)?;
    for err in report.rejected.iter().take(20) {
        log::warn!("{err}");
    }
    if !report.rejected.is_empty() {
        log::warn!("{} of {} rows rejected", report.rejected.len(), report.total_rows);
    }
    let added = ensure_path_sets(&mut net, &report.trips, cfg.paths.k_max, cfg.paths.detour_cap)?;
    if added > 0 {
        log::info!("enumerated path sets for {added} O-D pairs missing from the network");
    }
    Ok((net, report.trips, cfg))
}

fn fit(net: &NetworkModel, trips: Vec<TripObservation>, cfg: &RunConfig, out: &Path) -> Result<PosteriorDraws> {
    let data = Dataset::new(trips, net, cfg.t_len())?;
    log::info!(
        "fitting {} trips in {} cells: {} chains, {} + {} iterations",
        data.len(),
        data.cells.len(),
        cfg.chains,
        cfg.burn_in,
        cfg.samples
    );
    let draws = gibbs::run(&data, net, cfg)?;
    write_store(out, &draws, net, cfg, &data.content_hash())?;
    // the store is self-describing only with the network it was fitted on
    net.to_spec().save(out.join("network.json"))?;
    Ok(draws)
}

fn cmd_simulate(scale: ScaleArg, seed: u64, out: &Path) -> Result<()> {
    let scale = match scale {
        ScaleArg::Desk => Scale::Desk,
        ScaleArg::Paper => Scale::Paper,
    };
    let sim_cfg = SimConfig::for_scale(scale, seed);
    let sim = simulate(&sim_cfg)?;
    fs::create_dir_all(out)?;
    sim.network.to_spec().save(out.join("network.json"))?;
    write_trips(out.join("trips.csv"), &sim.trips, &sim.network)?;
    sim.truth.save(out.join("truth.json"))?;
    let mut cfg = sim_cfg.run_config(&sim.truth.m0);
    cfg.chains = 2;
    if scale == Scale::Desk {
        cfg.burn_in = 2000;
        cfg.samples = 1000;
    }
    fs::write(out.join("fit.toml"), cfg.to_toml_string())?;
    println!(
        "wrote {} trips on {} stations, {} intervals to {}",
        sim.trips.len(),
        sim.network.n(),
        sim_cfg.t_len,
        out.display()
    );
    Ok(())
}

fn cmd_fit(inputs: &Inputs, out: &Path) -> Result<()> {
    let (net, trips, cfg) = load_inputs(inputs)?;
    let draws = fit(&net, trips, &cfg, out)?;
    println!("wrote {} draws to {}", draws.n_records(), out.display());
    Ok(())
}

fn write_csv<T: serde::Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_evaluate(
    inputs: &Inputs,
    store: Option<&Path>,
    fraction: f64,
    replicates: usize,
    max_draws: usize,
    truth: Option<&Path>,
    level: f64,
    out: &Path,
) -> Result<()> {
    let (net, trips, cfg) = load_inputs(inputs)?;
    fs::create_dir_all(out)?;
    let (draws, validation) = match store {
        Some(dir) => {
            let (_, draws) = read_store(dir, &net)?;
            (draws, trips)
        }
        None => {
            let mut rng = metroflow::rng::stream(cfg.seed, &[0x5350_4c54]);
            let (train, valid) = stratified_split(&trips, &net, fraction, &mut rng)?;
            log::info!("{} training and {} validation trips", train.len(), valid.len());
            write_trips(out.join("validation.csv"), &valid, &net)?;
            (fit(&net, train, &cfg, &out.join("store"))?, valid)
        }
    };
    if replicates == 0 {
        bail!(metroflow::Error::Parameter("replicates must be at least 1".into()));
    }
    let metrics = evaluate_predictions(&validation, &draws, &net, replicates, Some(max_draws), cfg.seed)?;
    fs::write(out.join("metrics.json"), serde_json::to_string_pretty(&metrics)?)?;
    write_csv(&out.join("per_od.csv"), &metrics.per_od)?;
    println!(
        "{} trips: RMSE {:.2} s, MAE {:.2} s, CRPS {:.2} s",
        metrics.trips, metrics.rmse, metrics.mae, metrics.crps
    );
    if let Some(path) = truth {
        let truth = GroundTruth::load(path).with_context(|| format!("reading truth {}", path.display()))?;
        let report = recovery_score(&draws, &truth, &net, level)?;
        write_csv(&out.join("recovery.csv"), &report.rows)?;
        fs::write(out.join("recovery.json"), serde_json::to_string_pretty(&report.blocks)?)?;
        fs::write(out.join("theta_error.csv"), coefficient_error_heatmap(&report, "theta"))?;
        fs::write(out.join("phi_error.csv"), coefficient_error_heatmap(&report, "phi"))?;
        for (block, cov) in &report.blocks {
            println!(
                "{block}: {} values, coverage {:.3}, mean abs error {:.4}",
                cov.count, cov.coverage, cov.mean_abs_error
            );
        }
    }
    Ok(())
}

fn write_assignment(out: &Path, prefix: &str, table: &AssignmentTable) -> Result<()> {
    write_csv(&out.join(format!("{prefix}paths.csv")), &table.paths)?;
    write_csv(&out.join(format!("{prefix}links.csv")), &table.links)?;
    Ok(())
}

fn cmd_assign(network: &Path, store: &Path, prior: bool, seed: u64, out: &Path) -> Result<()> {
    let net = load_network(network)?;
    let (_, draws) = read_store(store, &net)?;
    fs::create_dir_all(out)?;
    write_assignment(out, "", &assignment_from_draws(&draws, &net)?)?;
    if prior {
        let mut rng = metroflow::rng::stream(seed, &[0x5052_494f]);
        write_assignment(out, "prior_", &prior_assignment(&draws, &net, &mut rng)?)?;
    }
    println!("wrote assignment tables to {}", out.display());
    Ok(())
}

fn cmd_diagnose(network: &Path, store: &Path, threshold: f64, out: &Path) -> Result<()> {
    let net = load_network(network)?;
    let (manifest, draws) = read_store(store, &net)?;
    fs::create_dir_all(out)?;
    let report = convergence_report(&draws, &net, threshold)?;

    let mut ess = String::from("parameter,pooled_ess");
    for c in 0..draws.chains.len() {
        ess.push_str(&format!(",chain{c}_ess"));
    }
    ess.push_str(",flagged\n");
    for row in &report.ess {
        ess.push_str(&format!("{},{}", row.name, row.pooled));
        for e in &row.per_chain {
            ess.push_str(&format!(",{e}"));
        }
        ess.push_str(&format!(",{}\n", row.flagged));
    }
    fs::write(out.join("ess.csv"), ess)?;

    if !report.agreement.is_empty() {
        let mut agree = String::from("parameter,chain0_mean,chain1_mean,mc_error,agrees\n");
        for a in &report.agreement {
            agree.push_str(&format!("{},{},{},{},{}\n", a.name, a.means[0], a.means[1], a.mc_error, a.agrees));
        }
        fs::write(out.join("agreement.csv"), agree)?;
    }

    let mut trace = std::io::BufWriter::new(fs::File::create(out.join("trace.csv"))?);
    writeln!(trace, "chain,iteration,parameter,value")?;
    for ch in &draws.chains {
        for rec in &ch.records {
            writeln!(trace, "{},{},q1,{}", ch.chain, rec.iteration, rec.tensor.q1)?;
            writeln!(trace, "{},{},q2,{}", ch.chain, rec.iteration, rec.tensor.q2)?;
            for kind in CostKind::ALL {
                writeln!(trace, "{},{},sigma_{},{}", ch.chain, rec.iteration, kind.label(), rec.sigma.get(kind))?;
            }
        }
    }
    trace.flush()?;

    let flagged: Vec<&str> = report.ess.iter().filter(|r| r.flagged).map(|r| r.name.as_str()).collect();
    println!(
        "seed {}: {} of {} monitored parameters have ESS > {threshold}",
        manifest.seed,
        report.ess.len() - flagged.len(),
        report.ess.len()
    );
    for name in &flagged {
        println!("flagged: {name}");
    }
    if !report.agreement.is_empty() {
        println!("chain agreement on theta: {:.3}", report.agreement_rate);
    }
    Ok(())
}

fn cmd_summary(network: &Path, store: &Path, level: f64, out: &Path) -> Result<()> {
    let net = load_network(network)?;
    let (_, draws) = read_store(store, &net)?;
    let rows = posterior_summary(&draws, &net, level)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let mut text = String::from("block,name,mean,sd,lower,upper\n");
    for r in &rows {
        let i = &r.interval;
        text.push_str(&format!("{},{},{},{},{},{}\n", r.block, r.name, i.mean, i.sd, i.lower, i.upper));
    }
    fs::write(out, text)?;
    println!("wrote {} rows to {}", rows.len(), out.display());
    Ok(())
}
