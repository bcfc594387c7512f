//! Command-line front end.
//!
//! Exit codes: 0 success, 1 a check failed, 2 configuration or input
//! error, 3 the run aborted.

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::{ScenarioConfig, BUNDLED_NAMES};
use crate::coordinator::{run_receding_horizon, RunLog, RunOutcome};
use crate::error::{Error, Result};
use crate::moments::{moments_from_state, MomentBasis, MomentModel};
use crate::noise::{build_moment_table, Channel};
use crate::planner::straight_to_goal;
use crate::state::Control;
use crate::validate::{clearance_histogram, mc_validate, moments_check, RunSummary, TableCorruption};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_ABORTED: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "ngmpc", version, about = "Chance-constrained multi-UAV planning with exact moment propagation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the receding-horizon scenario and write the run log.
    Plan(PlanArgs),
    /// Replay a run log's plans under fresh noise and check pairwise distances.
    McValidate(ValidateArgs),
    /// Compare propagated moments against Monte Carlo estimates.
    MomentsCheck(MomentsArgs),
    /// Summarise a run log.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
struct ConfigArg {
    /// Scenario file, or the name of a bundled scenario.
    #[arg(long)]
    config: String,
}

#[derive(Debug, Args)]
struct PlanArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Master seed; overrides the scenario's.
    #[arg(long)]
    seed: Option<u64>,
    /// Multi-start count per plan.
    #[arg(long)]
    starts: Option<usize>,
    /// Solver feasibility tolerance.
    #[arg(long)]
    tol_feas: Option<f64>,
    /// Global steps; overrides the scenario's.
    #[arg(long)]
    steps: Option<usize>,
}

#[derive(Debug, Args)]
struct ValidateArgs {
    /// Run log written by `plan`.
    #[arg(long)]
    log: PathBuf,
    /// Particles per plan; defaults to the scenario's count.
    #[arg(long)]
    particles: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Also write a clearance histogram with this many bins for the worst
    /// pair and step.
    #[arg(long)]
    histogram: Option<usize>,
}

#[derive(Debug, Args)]
struct MomentsArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long, default_value_t = 10)]
    steps: usize,
    /// Monte Carlo samples per agent.
    #[arg(long, default_value_t = 1_000_000)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Directory for the noise tables and moment trajectories.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overwrite one noise-table entry, e.g. `speed_v:1,0,0=0.05`.
    #[arg(long, hide = true, value_parser = parse_corruption)]
    corrupt_table: Option<TableCorruption>,
}

#[derive(Debug, Args)]
struct ReportArgs {
    #[arg(long)]
    log: PathBuf,
    /// Directory for `report.csv`.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_corruption(s: &str) -> std::result::Result<TableCorruption, String> {
    let err = || format!("expected <channel>:<p>,<q>,<r>=<value>, got '{s}'");
    let (channel, rest) = s.split_once(':').ok_or_else(err)?;
    let (key, value) = rest.split_once('=').ok_or_else(err)?;
    let channel = match channel {
        "speed_v" => Channel::Speed,
        "altitude_z" => Channel::Altitude,
        "heading_psi" => Channel::Heading,
        _ => return Err(err()),
    };
    let k: Vec<u32> = key.split(',').map(|p| p.trim().parse().map_err(|_| err())).collect::<std::result::Result<_, _>>()?;
    if k.len() != 3 {
        return Err(err());
    }
    let value: f64 = value.trim().parse().map_err(|_| err())?;
    Ok(TableCorruption {
        channel,
        key: (k[0], k[1], k[2]),
        value,
    })
}

fn load_config(spec: &str) -> Result<ScenarioConfig> {
    let path = Path::new(spec);
    if !path.exists() && BUNDLED_NAMES.contains(&spec) {
        return ScenarioConfig::bundled(spec);
    }
    ScenarioConfig::load(path)
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    std::fs::create_dir_all(dir)?;
    Ok(BufWriter::new(File::create(dir.join(name))?))
}

fn input_error(out: &mut dyn Write, what: &str, e: &Error) -> i32 {
    let _ = writeln!(out, "error: {what}: {e}");
    EXIT_CONFIG
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = if e.use_stderr() {
                write!(stderr, "{}", e.render())
            } else {
                write!(stdout, "{}", e.render())
            };
            return code;
        }
    };
    let result = match cli.command {
        Command::Plan(a) => cmd_plan(a, stdout, stderr),
        Command::McValidate(a) => cmd_validate(a, stdout, stderr),
        Command::MomentsCheck(a) => cmd_moments(a, stdout, stderr),
        Command::Report(a) => cmd_report(a, stdout, stderr),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            match e {
                Error::Protocol(_) | Error::Solver(_) | Error::Numerical { .. } => EXIT_ABORTED,
                _ => EXIT_CONFIG,
            }
        }
    }
}

fn cmd_plan(a: PlanArgs, stdout: &mut dyn Write, stderr: &mut dyn Write) -> Result<i32> {
    let mut config = match load_config(&a.config.config) {
        Ok(c) => c,
        Err(e) => return Ok(input_error(stderr, "cannot load scenario", &e)),
    };
    if let Some(s) = a.starts {
        config.solver.starts = s;
    }
    if let Some(t) = a.tol_feas {
        config.solver.options.feasibility_tol = t;
    }
    if let Some(k) = a.steps {
        config.run.steps = k;
    }
    if let Some(s) = a.seed {
        config.run.seed = s;
    }
    if let Err(e) = config.validate() {
        return Ok(input_error(stderr, "invalid scenario", &e));
    }
    let log = run_receding_horizon(&config, config.run.seed)?;
    std::fs::create_dir_all(&a.out)?;
    log.save(&a.out.join("run.jsonl"))?;
    log.write_trajectories_csv(create(&a.out, "trajectories.csv")?)?;
    if let RunOutcome::Aborted { step, reason } = &log.outcome {
        writeln!(stderr, "run aborted at step {step}: {reason}")?;
        return Ok(EXIT_ABORTED);
    }
    let summary = RunSummary::from_log(&log)?;
    summary.write_csv(create(&a.out, "report.csv")?)?;
    writeln!(stdout, "scenario {} seed {} steps {}", config.name, log.seed, summary.steps)?;
    for agent in &summary.agents {
        writeln!(stdout, "uav {} arrival error {:.3} m", agent.id, agent.arrival_error)?;
    }
    writeln!(stdout, "min pairwise mean distance {:.3} m", summary.min_mean_distance())?;
    writeln!(stdout, "fallback plans {}", summary.fallbacks)?;
    writeln!(stdout, "wrote {}", a.out.display())?;
    Ok(EXIT_OK)
}

fn load_log(path: &Path, stderr: &mut dyn Write) -> std::result::Result<RunLog, i32> {
    let log = RunLog::load(path).map_err(|e| input_error(stderr, &format!("cannot read {}", path.display()), &e))?;
    if log.steps.is_empty() {
        let _ = writeln!(stderr, "error: {} holds no steps", path.display());
        return Err(EXIT_CONFIG);
    }
    Ok(log)
}

fn cmd_validate(a: ValidateArgs, stdout: &mut dyn Write, stderr: &mut dyn Write) -> Result<i32> {
    let log = match load_log(&a.log, stderr) {
        Ok(l) => l,
        Err(code) => return Ok(code),
    };
    if !log.completed() {
        writeln!(stderr, "error: {} is not a completed run", a.log.display())?;
        return Ok(EXIT_CONFIG);
    }
    let particles = a.particles.unwrap_or(log.config.run.mc_particles);
    if particles == 0 {
        writeln!(stderr, "error: --particles must be at least 1")?;
        return Ok(EXIT_CONFIG);
    }
    let report = mc_validate(&log, particles, a.seed)?;
    report.write_csv(create(&a.out, "distances.csv")?)?;
    let ids = log.agent_ids();
    for rec in &log.steps {
        for (i, &ia) in ids.iter().enumerate() {
            for &ib in &ids[i + 1..] {
                let rows = report.rows.iter().filter(|r| r.step == rec.step && (r.a, r.b) == (ia, ib));
                let (worst, min, pass) = rows.fold((0.0f64, f64::INFINITY, true), |(w, m, p), r| {
                    (w.max(r.stats.violation_fraction), m.min(r.stats.min), p && r.pass)
                });
                writeln!(
                    stdout,
                    "step {:>3} pair {}-{} worst_violation {:.4} min_distance {:.3} {}",
                    rec.step,
                    ia,
                    ib,
                    worst,
                    min,
                    if pass { "PASS" } else { "FAIL" }
                )?;
            }
        }
    }
    if let Some(w) = report.worst_violation() {
        writeln!(
            stdout,
            "worst violation {:.4} at step {} pair {}-{} horizon step {}; min particle distance {:.3} m (d_min {})",
            w.stats.violation_fraction,
            w.step,
            w.a,
            w.b,
            w.horizon_step,
            report.min_distance(),
            report.d_min
        )?;
        if let Some(bins) = a.histogram {
            let h = clearance_histogram(&log, w, particles, a.seed, bins)?;
            let mut out = csv::Writer::from_writer(create(&a.out, "histogram.csv")?);
            for b in &h {
                out.serialize(b)?;
            }
            out.flush()?;
        }
    }
    Ok(if report.all_pass() { EXIT_OK } else { EXIT_CHECK_FAILED })
}

fn cmd_moments(a: MomentsArgs, stdout: &mut dyn Write, stderr: &mut dyn Write) -> Result<i32> {
    let config = match load_config(&a.config.config) {
        Ok(c) => c,
        Err(e) => return Ok(input_error(stderr, "cannot load scenario", &e)),
    };
    if a.samples < 2 || a.steps == 0 {
        writeln!(stderr, "error: --samples must be at least 2 and --steps at least 1")?;
        return Ok(EXIT_CONFIG);
    }
    if let Some(dir) = &a.out {
        write_moment_tables(&config, a.steps, dir)?;
    }
    let devs = moments_check(&config, a.steps, a.samples, a.seed, a.corrupt_table)?;
    let mut ok = true;
    for d in &devs {
        ok &= d.pass;
        writeln!(
            stdout,
            "uav {} max normalized deviation {:.3} at {} {}",
            d.agent,
            d.max_normalized,
            d.worst_entry,
            if d.pass { "PASS" } else { "FAIL" }
        )?;
    }
    Ok(if ok { EXIT_OK } else { EXIT_CHECK_FAILED })
}

/// `noise_tables.csv` (one row per table entry) and `moments.csv`
/// (uav, step, monomial, value) for the check's control sequences.
fn write_moment_tables(config: &ScenarioConfig, steps: usize, dir: &Path) -> Result<()> {
    let noise = config.noise_set()?;
    let ds = config.planner.delta_s;
    let mut out = create(dir, "noise_tables.csv")?;
    for (i, ch) in [Channel::Speed, Channel::Altitude, Channel::Heading].into_iter().enumerate() {
        let table = build_moment_table(noise.get(ch), ds, crate::moments::MAX_DEGREE)?;
        let mut body = Vec::new();
        table.write_csv(&mut body)?;
        let text = String::from_utf8(body).map_err(|e| Error::Usage(e.to_string()))?;
        // Keep one header row.
        for line in text.lines().skip(usize::from(i > 0)) {
            writeln!(out, "{line}")?;
        }
    }
    out.flush()?;

    let model = MomentModel::new(&noise, ds)?;
    let basis = MomentBasis::global();
    let mut params = config.planner;
    params.horizon = steps;
    params.previous_control = Control::ZERO;
    let mut w = csv::Writer::from_writer(create(dir, "moments.csv")?);
    w.write_record(["uav", "step", "monomial", "value"])?;
    for a in &config.agents {
        let start = a.initial_state();
        let controls = straight_to_goal(&start, a.destination, &params);
        for (k, m) in model.rollout(&moments_from_state(&start), &controls).iter().enumerate() {
            for (j, v) in m.values().iter().enumerate() {
                w.write_record([a.id.to_string(), k.to_string(), basis.monomial(j).label(), v.to_string()])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

fn cmd_report(a: ReportArgs, stdout: &mut dyn Write, stderr: &mut dyn Write) -> Result<i32> {
    let log = match load_log(&a.log, stderr) {
        Ok(l) => l,
        Err(code) => return Ok(code),
    };
    let summary = RunSummary::from_log(&log)?;
    write!(stdout, "{}", summary.render_table())?;
    writeln!(stdout)?;
    writeln!(
        stdout,
        "plans {} fallbacks {} uncertified {} outcome {}",
        summary.steps * summary.agents.len(),
        summary.fallbacks,
        summary.unsafe_plans,
        if summary.completed { "completed" } else { "aborted" }
    )?;
    if let Some(spread) = summary.arrival_spread() {
        writeln!(stdout, "arrival spread {spread:.1} s")?;
    }
    if let Some(dir) = &a.out {
        summary.write_csv(create(dir, "report.csv")?)?;
    }
    Ok(EXIT_OK)
}
