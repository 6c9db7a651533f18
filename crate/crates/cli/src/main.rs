//! `secprot`: calibrate, train and audit DP-SGD runs with per-secret
//! reconstruction targets.
//!
//! Exit codes: 0 on success, 1 when a protection target is violated, 2 on bad
//! input or any other error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use secprot::divergence::DEFAULT_INVERT_TOL;
use secprot::domain::{write_manifest, write_secrets};
use secprot::pipeline::{calibrate_with_tol, DEFAULT_SIGMA_REL_TOL};
use secprot::*;

#[derive(Parser)]
#[command(
    name = "secprot",
    version,
    about = "Secret-protection calibration for DP-SGD"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the weighting LP, calibrate the noise multiplier and write plan.json and report.json.
    Calibrate {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        run: RunArgs,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Solve only the weighting LP and write the weights as JSON.
    SolveLp {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// KL accounting for one group of sampling probabilities.
    Account(AccountArgs),
    /// Run DP-SGD on the dataset payloads.
    Train {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        model: ModelArgs,
        /// Use an existing plan instead of calibrating.
        #[arg(long)]
        plan: Option<PathBuf>,
        /// Output directory for trace.json and losses.csv.
        #[arg(long)]
        out: PathBuf,
    },
    /// Play the reconstruction game against a calibrated mechanism.
    Attack(AttackArgs),
    /// Calibrate (and optionally train) for a list of LP constants; writes CSV.
    Sweep {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        model: ModelArgs,
        /// Comma-separated LP constants; defaults to 2^-6, ..., 2^4.
        #[arg(long = "c-values", value_delimiter = ',')]
        c_values: Vec<f64>,
        /// Also train with and without noise and record final losses.
        #[arg(long)]
        train: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print a per-secret table for a calibration report.
    Report {
        #[arg(long)]
        plan: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Also write the table rows as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a synthetic dataset (manifest.jsonl and secrets.json).
    Synth {
        #[arg(long, default_value_t = 2000)]
        n: usize,
        #[arg(long, default_value_t = 60)]
        m: usize,
        #[arg(long, default_value_t = 1.5)]
        skew: f64,
        #[arg(long, default_value_t = 8)]
        dim: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct DataArgs {
    /// JSON-lines manifest of examples.
    #[arg(long)]
    dataset: PathBuf,
    /// JSON array of secrets with their prior and target posterior.
    #[arg(long)]
    secrets: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    /// JSON run configuration; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    batch_target: Option<f64>,
    #[arg(long)]
    rounds: Option<u32>,
    #[arg(long)]
    clip_norm: Option<f64>,
    /// LP constant scaling every capacity.
    #[arg(long = "c")]
    lp_constant: Option<f64>,
    #[arg(long)]
    drop_secretless: bool,
    /// Relative tolerance of the noise-multiplier search.
    #[arg(long, default_value_t = DEFAULT_SIGMA_REL_TOL)]
    sigma_tol: f64,
}

impl RunArgs {
    fn config(&self) -> Result<RunConfig> {
        let mut config = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(v) = self.seed {
            config.seed = v;
        }
        if let Some(v) = self.batch_target {
            config.batch_target = v;
        }
        if let Some(v) = self.rounds {
            config.rounds = v;
        }
        if let Some(v) = self.clip_norm {
            config.clip_norm = v;
        }
        if let Some(v) = self.lp_constant {
            config.lp_constant = v;
        }
        config.drop_secretless |= self.drop_secretless;
        config.validate()?;
        Ok(config)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelKind {
    Linear,
    Logistic,
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long, value_enum, default_value = "linear")]
    model: ModelKind,
    #[arg(long, default_value_t = 0.1)]
    lr: f64,
}

impl ModelArgs {
    fn build(&self, map: &SecretMap) -> Result<Box<dyn ModelAdapter>> {
        let len = map
            .examples()
            .iter()
            .find_map(|e| e.payload.as_ref().map(Vec::len))
            .context("no example carries a payload to train on")?;
        if len < 2 {
            bail!("payloads need at least one feature and a target");
        }
        let features = len - 1;
        Ok(match self.model {
            ModelKind::Linear => Box::new(LinearRegression { features }),
            ModelKind::Logistic => Box::new(LogisticRegression { features }),
        })
    }
}

#[derive(Args)]
struct AccountArgs {
    /// Comma-separated sampling probabilities of the group's examples.
    #[arg(long, value_delimiter = ',', required = true)]
    group: Vec<f64>,
    #[arg(long)]
    sigma: f64,
    #[arg(long, default_value_t = 1)]
    rounds: u32,
    /// Prior; when given, also report the certified posterior bound.
    #[arg(long)]
    p: Option<f64>,
    /// Grid step of the privacy-loss blow-up diagnostic.
    #[arg(long)]
    pld_grid: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AttackArgs {
    /// Largest prior mass; the prior is uniform over k candidates.
    #[arg(long)]
    p: f64,
    /// Target posterior; the noise multiplier is calibrated from it.
    #[arg(long, required_unless_present = "sigma")]
    r: Option<f64>,
    /// Explicit noise multiplier instead of calibrating from `r`.
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long, value_delimiter = ',', default_value = "1.0")]
    group: Vec<f64>,
    #[arg(long, default_value_t = 1)]
    rounds: u32,
    /// Number of candidates; defaults to ceil(1/p).
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, default_value_t = 100_000)]
    trials: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

enum Status {
    Ok,
    Violation,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn emit<T: Serialize>(out: Option<&Path>, value: &T) -> Result<()> {
    match out {
        Some(path) => write_json(path, value),
        None => {
            println!("{}", serde_json::to_string_pretty(value)?);
            Ok(())
        }
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn load(data: &DataArgs) -> Result<SecretMap> {
    Ok(load_dataset(&data.dataset, &data.secrets)?)
}

fn status_of(report: &CalibrationReport) -> Status {
    let bad: Vec<&str> = report.violations().map(|s| s.secret_id.as_str()).collect();
    if bad.is_empty() {
        Status::Ok
    } else {
        eprintln!("targets violated for: {}", bad.join(", "));
        Status::Violation
    }
}

fn cmd_calibrate(data: &DataArgs, run: &RunArgs, out: &Path) -> Result<Status> {
    let map = load(data)?;
    let config = run.config()?;
    let (plan, report) = calibrate_with_tol(&map, &config, run.sigma_tol)?;
    ensure_dir(out)?;
    write_json(&out.join("plan.json"), &plan)?;
    write_json(&out.join("report.json"), &report)?;
    log::info!(
        "sigma {:.6}, fraction retained {:.4}",
        report.sigma,
        report.fraction_retained
    );
    Ok(status_of(&report))
}

#[derive(Serialize)]
struct LpOutput<'a> {
    example_ids: Vec<&'a str>,
    weights: &'a [f64],
    objective: f64,
}

fn cmd_solve_lp(data: &DataArgs, run: &RunArgs, out: &Path) -> Result<Status> {
    let map = load(data)?;
    let config = run.config()?;
    let map = if config.drop_secretless {
        map.filter_secretless()
    } else {
        map
    };
    let budgets: Vec<KLBudget> = map
        .secrets()
        .iter()
        .map(budget_from_targets)
        .collect::<secprot::Result<_>>()?;
    let lp = build_lp(&map, &budgets, config.lp_constant)?;
    let w = solve(&lp);
    write_json(
        out,
        &LpOutput {
            example_ids: map.examples().iter().map(|e| e.id.as_str()).collect(),
            weights: &w.w,
            objective: w.objective,
        },
    )?;
    Ok(Status::Ok)
}

#[derive(Serialize)]
struct AccountOutput {
    group: Vec<f64>,
    sigma: f64,
    rounds: u32,
    round_kl: f64,
    composed_kl: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    posterior_bound: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pld: Option<PldSummary>,
}

#[derive(Serialize)]
struct PldSummary {
    grid_step: f64,
    total_blowup_mass: f64,
    log_total_blowup_mass: f64,
    support_size: usize,
}

fn cmd_account(args: &AccountArgs) -> Result<Status> {
    let mech = RoundMechanism::for_group(&args.group, args.sigma)?;
    let round = round_kl(&mech)?;
    let composed = composed_kl(&mech, args.rounds)?;
    let posterior_bound = match args.p {
        Some(p) => Some(invert_posterior(p, composed, DEFAULT_INVERT_TOL)?),
        None => None,
    };
    let pld = match args.pld_grid {
        Some(step) => {
            let d = pld_blowup_diagnostic(&mech, step)?;
            Some(PldSummary {
                grid_step: d.grid_step,
                total_blowup_mass: d.total_blowup_mass,
                log_total_blowup_mass: d.log_total_blowup_mass,
                support_size: d.support.len(),
            })
        }
        None => None,
    };
    emit(
        args.out.as_deref(),
        &AccountOutput {
            group: args.group.clone(),
            sigma: args.sigma,
            rounds: args.rounds,
            round_kl: round,
            composed_kl: composed,
            posterior_bound,
            pld,
        },
    )?;
    Ok(Status::Ok)
}

fn write_losses(path: &Path, trace: &TrainTrace) -> Result<()> {
    let mut w =
        csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    w.write_record(["round", "batch_size", "grad_norm", "loss"])?;
    for (t, ((b, g), l)) in trace
        .batch_sizes
        .iter()
        .zip(&trace.grad_norms)
        .zip(&trace.losses)
        .enumerate()
    {
        w.write_record([
            (t + 1).to_string(),
            b.to_string(),
            g.to_string(),
            l.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn cmd_train(
    data: &DataArgs,
    run: &RunArgs,
    model: &ModelArgs,
    plan_path: Option<&Path>,
    out: &Path,
) -> Result<Status> {
    let map = load(data)?;
    let config = run.config()?;
    let (map, plan) = match plan_path {
        Some(path) => {
            let map = if config.drop_secretless {
                map.filter_secretless()
            } else {
                map
            };
            (map, read_json::<SamplingPlan>(path)?)
        }
        None => {
            let (plan, report) = calibrate_with_tol(&map, &config, run.sigma_tol)?;
            if let Status::Violation = status_of(&report) {
                return Ok(Status::Violation);
            }
            let map = if config.drop_secretless {
                map.filter_secretless()
            } else {
                map
            };
            (map, plan)
        }
    };
    let mut adapter = model.build(&map)?;
    let settings = TrainSettings {
        learning_rate: model.lr,
        seed: config.seed,
    };
    let trace = train(&map, &plan, adapter.as_mut(), &config, settings)?;
    ensure_dir(out)?;
    write_json(&out.join("trace.json"), &trace)?;
    write_losses(&out.join("losses.csv"), &trace)?;
    log::info!("final loss {:.6}", trace.eval_loss);
    Ok(Status::Ok)
}

fn cmd_attack(args: &AttackArgs) -> Result<Status> {
    let sigma = match (args.sigma, args.r) {
        (Some(s), _) => s,
        (None, Some(r)) => {
            let mu = bern_kl(r, args.p)?;
            match calibrate_secret_sigma(&args.group, args.rounds, mu, DEFAULT_SIGMA_REL_TOL)? {
                SecretSigma::Noise(s) => s,
                SecretSigma::Vacuous => bail!("the group is never sampled; nothing to attack"),
            }
        }
        (None, None) => bail!("pass either --r or --sigma"),
    };
    if !(args.p > 0.0 && args.p <= 1.0) {
        bail!("--p must lie in (0, 1]");
    }
    let k = args.k.unwrap_or_else(|| (1.0 / args.p).ceil() as usize);
    if (1.0 / k as f64) > args.p * (1.0 + 1e-12) {
        bail!("k = {k} candidates put more than p = {} on each", args.p);
    }
    let game = ReconstructionGame::uniform(k, args.group.clone(), sigma, args.rounds, args.trials)?;
    let result = simulate_game(&game, args.seed)?;
    emit(args.out.as_deref(), &result)?;
    Ok(if result.within_bound() {
        Status::Ok
    } else {
        Status::Violation
    })
}

#[derive(Serialize)]
struct SweepRow {
    c: f64,
    fraction_retained: f64,
    sigma: f64,
    noiseless_loss: Option<f64>,
    noisy_loss: Option<f64>,
}

fn default_c_values() -> Vec<f64> {
    (-6..=4).map(|e| 2f64.powi(e)).collect()
}

fn cmd_sweep(
    data: &DataArgs,
    run: &RunArgs,
    model: &ModelArgs,
    c_values: &[f64],
    with_training: bool,
    out: &Path,
) -> Result<Status> {
    let map = load(data)?;
    let base = run.config()?;
    let c_values = if c_values.is_empty() {
        default_c_values()
    } else {
        c_values.to_vec()
    };
    let train_map = if base.drop_secretless {
        map.filter_secretless()
    } else {
        map.clone()
    };
    let mut rows = Vec::with_capacity(c_values.len());
    let mut status = Status::Ok;
    for &c in &c_values {
        let config = RunConfig {
            lp_constant: c,
            ..base.clone()
        };
        let (plan, report) = calibrate_with_tol(&map, &config, run.sigma_tol)?;
        if let Status::Violation = status_of(&report) {
            status = Status::Violation;
        }
        let (noiseless_loss, noisy_loss) = if with_training {
            let settings = TrainSettings {
                learning_rate: model.lr,
                seed: config.seed,
            };
            let quiet = SamplingPlan {
                sigma: 0.0,
                ..plan.clone()
            };
            let clean = train(
                &train_map,
                &quiet,
                model.build(&train_map)?.as_mut(),
                &config,
                settings,
            )?;
            let noisy = train(
                &train_map,
                &plan,
                model.build(&train_map)?.as_mut(),
                &config,
                settings,
            )?;
            (Some(clean.eval_loss), Some(noisy.eval_loss))
        } else {
            (None, None)
        };
        log::info!(
            "c = {c}: sigma {:.6}, fraction {:.4}",
            report.sigma,
            report.fraction_retained
        );
        rows.push(SweepRow {
            c,
            fraction_retained: report.fraction_retained,
            sigma: report.sigma,
            noiseless_loss,
            noisy_loss,
        });
    }
    let mut w =
        csv::Writer::from_path(out).with_context(|| format!("writing {}", out.display()))?;
    for row in &rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(status)
}

#[derive(Serialize)]
struct ReportRow<'a> {
    secret_id: &'a str,
    mu: f64,
    sigma_j: f64,
    achieved_r: f64,
    target_r: f64,
    slack: f64,
    protected: bool,
}

fn cmd_report(plan_path: &Path, report_path: &Path, out: Option<&Path>) -> Result<Status> {
    let plan: SamplingPlan = read_json(plan_path)?;
    let report: CalibrationReport = read_json(report_path)?;
    let rows: Vec<ReportRow> = report
        .secrets
        .iter()
        .map(|s| ReportRow {
            secret_id: &s.secret_id,
            mu: s.mu,
            sigma_j: s.sigma_j,
            achieved_r: s.achieved_r,
            target_r: s.target_r,
            slack: s.target_r - s.achieved_r,
            protected: s.is_protected(),
        })
        .collect();

    println!(
        "sigma {:.6}  fraction_retained {:.4}  c {}  B {}  T {}  expected batch {:.3}",
        report.sigma,
        report.fraction_retained,
        report.lp_constant,
        plan.batch_target,
        plan.rounds,
        plan.expected_batch_size()
    );
    println!(
        "{:<20} {:>12} {:>12} {:>12} {:>12} {:>12}  status",
        "secret", "mu", "sigma_j", "achieved_r", "target_r", "slack"
    );
    for r in &rows {
        println!(
            "{:<20} {:>12.4e} {:>12.6} {:>12.4e} {:>12.4e} {:>12.4e}  {}",
            r.secret_id,
            r.mu,
            r.sigma_j,
            r.achieved_r,
            r.target_r,
            r.slack,
            if r.protected { "ok" } else { "VIOLATED" }
        );
    }
    if let Some(path) = out {
        write_json(path, &rows)?;
    }
    Ok(status_of(&report))
}

fn cmd_synth(n: usize, m: usize, skew: f64, dim: usize, seed: u64, out: &Path) -> Result<Status> {
    let map = make_synthetic(n, m, skew, dim, seed)?;
    ensure_dir(out)?;
    let manifest = out.join("manifest.jsonl");
    fs::write(&manifest, write_manifest(&map))
        .with_context(|| format!("writing {}", manifest.display()))?;
    let secrets = out.join("secrets.json");
    fs::write(&secrets, write_secrets(&map) + "\n")
        .with_context(|| format!("writing {}", secrets.display()))?;
    Ok(Status::Ok)
}

fn run(cli: Cli) -> Result<Status> {
    match cli.command {
        Command::Calibrate { data, run, out } => cmd_calibrate(&data, &run, &out),
        Command::SolveLp { data, run, out } => cmd_solve_lp(&data, &run, &out),
        Command::Account(args) => cmd_account(&args),
        Command::Train {
            data,
            run,
            model,
            plan,
            out,
        } => cmd_train(&data, &run, &model, plan.as_deref(), &out),
        Command::Attack(args) => cmd_attack(&args),
        Command::Sweep {
            data,
            run,
            model,
            c_values,
            train,
            out,
        } => cmd_sweep(&data, &run, &model, &c_values, train, &out),
        Command::Report { plan, report, out } => cmd_report(&plan, &report, out.as_deref()),
        Command::Synth {
            n,
            m,
            skew,
            dim,
            seed,
            out,
        } => cmd_synth(n, m, skew, dim, seed, &out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(Status::Ok) => ExitCode::SUCCESS,
        Ok(Status::Violation) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
