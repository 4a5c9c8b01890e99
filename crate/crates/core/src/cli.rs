//! Batch driver behind the `zrp` binary.
//!
//! A run is described by a [`RunConfig`]. It is resolved from defaults, an
//! optional TOML or JSON config file and command-line flags, in increasing
//! order of precedence, and echoed into every report. Exit status is 0 when
//! every criterion passes, [`EXIT_CRITERIA_FAILED`] when some statistical or
//! identity check fails, [`EXIT_USAGE`] on bad arguments and
//! [`Error::code`] on library errors.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::configuration::Configuration;
use crate::dynamics::{simulate, Trajectory, TransitionKernel};
use crate::error::{domain, Error, Result};
use crate::experiments::{self as ex, FiberScope, IdentityOptions, Tolerances};
use crate::io;
use crate::model::{critical_constants, ModelParams, WeightTable};
use crate::report::Report;
use crate::sampling::{
    draw_batch, CondensateSampler, ConfigSampler, ExactMethod, ExactSampler, IidSampler, RejectionSampler,
    SampleBatch, SequentialSampler,
};

pub const EXIT_CRITERIA_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 64;

/// Attempts per configuration before the rejection sampler gives up.
const REJECTION_CAP: u64 = 10_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    PowerLaw,
    Stretched,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum SamplerId {
    Exact,
    Condensate,
    Rejection,
    Iid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Auto,
    Sequential,
    Bisection,
}

impl From<Method> for ExactMethod {
    fn from(m: Method) -> Self {
        match m {
            Method::Auto => ExactMethod::Auto,
            Method::Sequential => ExactMethod::Sequential,
            Method::Bisection => ExactMethod::Bisection,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Format {
    Csv,
    Binary,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum KernelId {
    Uniform,
    Ring,
    /// Row-major matrix read from `kernel_file` (JSON array of rows).
    Custom,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    MaxClt,
    MaxStable,
    SecondLargest,
    BulkMarginal,
    Theorem1,
    LltRatio,
    ThresholdScan,
    CondensateFidelity,
    Stretched,
    Performance,
}

/// Everything a run depends on. Size fields left unset are filled with
/// experiment defaults before the run, so the echoed config is complete.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub command: String,
    pub experiment: Option<Experiment>,
    pub family: Family,
    pub b: f64,
    pub beta: f64,
    pub lambda: f64,
    pub sites: Option<usize>,
    pub particles: Option<usize>,
    pub rho: Option<f64>,
    /// Grid of `L` for trend experiments.
    pub sizes: Option<Vec<usize>>,
    pub samples: Option<usize>,
    pub seed: u64,
    pub sampler: SamplerId,
    pub method: Method,
    pub perturb: f64,
    pub kernel: KernelId,
    pub kernel_file: Option<PathBuf>,
    pub initial: Option<Vec<u64>>,
    pub t_end: f64,
    pub snapshot_every: Option<f64>,
    /// Also compare the time-averaged occupation law with the exact marginal.
    pub ergodic: bool,
    pub zeta: Option<f64>,
    /// Offset coefficient of `N = ρ_c L + γ L^{1/(2λ)}` for the stretched LLT.
    pub gamma: f64,
    pub points: usize,
    pub output: Option<PathBuf>,
    pub snapshots: Option<PathBuf>,
    pub report: Option<PathBuf>,
    pub format: Format,
    pub table_cache: Option<PathBuf>,
    pub threads: Option<usize>,
    pub tolerances: Tolerances,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            command: String::new(),
            experiment: None,
            family: Family::PowerLaw,
            b: 4.0,
            beta: 1.0,
            lambda: 0.75,
            sites: None,
            particles: None,
            rho: None,
            sizes: None,
            samples: None,
            seed: 1,
            sampler: SamplerId::Exact,
            method: Method::Auto,
            perturb: 0.0,
            kernel: KernelId::Uniform,
            kernel_file: None,
            initial: None,
            t_end: 1000.0,
            snapshot_every: None,
            ergodic: false,
            zeta: None,
            gamma: 10.0,
            points: 20,
            output: None,
            snapshots: None,
            report: None,
            format: Format::Csv,
            table_cache: None,
            threads: None,
            tolerances: Tolerances::default(),
        }
    }
}

impl RunConfig {
    pub fn params(&self) -> Result<ModelParams> {
        match self.family {
            Family::PowerLaw => ModelParams::power_law(self.b),
            Family::Stretched => ModelParams::stretched(self.beta, self.lambda),
        }
    }

    /// Default density: `max(2, 2ρ_c)`, i.e. `ρ = 2` for `b ≥ 3` and
    /// `2ρ_c` below.
    fn default_rho(&self, params: &ModelParams) -> Result<f64> {
        Ok((2.0 * critical_constants(params)?.rho_c).max(2.0))
    }

    fn resolve_particles(&mut self, l: usize, rho_default: f64) -> usize {
        let n = self
            .particles
            .unwrap_or_else(|| ex::particles_at(l, self.rho.unwrap_or(rho_default)));
        self.particles = Some(n);
        n
    }

    fn resolve_sites(&mut self, default: usize) -> usize {
        *self.sites.get_or_insert(default)
    }

    fn resolve_samples(&mut self, default: usize) -> usize {
        *self.samples.get_or_insert(default)
    }
}

#[derive(Parser, Debug)]
#[command(name = "zrp", version, about = "Invariant measures of condensing zero-range processes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Closed forms, tail formula, hypergeometric identity, smoothness and
    /// generator stationarity.
    VerifyIdentities(Flags),
    /// Draw configurations with one of the samplers.
    Sample(Flags),
    /// Run the continuous-time dynamics.
    Simulate(Flags),
    /// Run a limit-law experiment.
    LimitTest {
        #[arg(value_enum)]
        experiment: Experiment,
        #[command(flatten)]
        flags: Flags,
    },
    /// Local limit ratio trend over a grid of L at fixed density.
    LltRatio(Flags),
    /// Local limit ratio across the moderate-deviation threshold.
    ThresholdScan(Flags),
}

fn is_false(b: &bool) -> bool {
    !*b
}

/// Command-line overrides. Unset flags leave the config file or default
/// value in place.
#[derive(Args, Debug, Default, Serialize)]
pub struct Flags {
    /// TOML (or JSON) file with `RunConfig` fields and a `[tolerances]` table.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Override one tolerance, e.g. `--tol ks_normal=0.06`. Repeatable.
    #[arg(long = "tol", value_name = "NAME=VALUE")]
    #[serde(skip)]
    pub tol: Vec<String>,
    #[arg(long, value_enum)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub family: Option<Family>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub b: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[arg(short = 'L', long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sites: Option<usize>,
    #[arg(short = 'N', long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub particles: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rho: Option<f64>,
    /// Comma-separated L grid.
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sizes: Option<Vec<usize>>,
    #[arg(short = 'n', long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub samples: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sampler: Option<SamplerId>,
    #[arg(long, value_enum)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub method: Option<Method>,
    /// Scale closed forms and the modal weight by `1 + perturb` (fault injection).
    #[arg(long, allow_hyphen_values = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub perturb: Option<f64>,
    #[arg(long, value_enum)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kernel: Option<KernelId>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kernel_file: Option<PathBuf>,
    /// Comma-separated initial occupation numbers.
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub initial: Option<Vec<u64>>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub t_end: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub snapshot_every: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "is_false")]
    pub ergodic: bool,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub zeta: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub points: Option<usize>,
    /// Sample file or event log.
    #[arg(short, long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub snapshots: Option<PathBuf>,
    /// Write the JSON report here instead of stdout.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub report: Option<PathBuf>,
    #[arg(long, value_enum)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub format: Option<Format>,
    /// Directory for cached canonical tables.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub table_cache: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub threads: Option<usize>,
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

fn read_config_file(path: &Path) -> Result<Value> {
    let text = fs::read_to_string(path)?;
    if path.extension().is_some_and(|e| e == "json") {
        return Ok(serde_json::from_str(&text)?);
    }
    let t: toml::Value = toml::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    Ok(serde_json::to_value(t)?)
}

fn tolerance_overrides(items: &[String]) -> Result<Value> {
    let mut m = Map::new();
    for item in items {
        let (k, v) = item
            .split_once('=')
            .ok_or_else(|| domain!("--tol expects NAME=VALUE, got {item}"))?;
        let x: f64 = v.trim().parse().map_err(|_| domain!("--tol {k}: not a number: {v}"))?;
        m.insert(k.trim().to_string(), Value::from(x));
    }
    Ok(Value::Object(m))
}

/// Resolves flags over an optional config file over the defaults.
pub fn resolve(command: &str, experiment: Option<Experiment>, flags: &Flags) -> Result<RunConfig> {
    let mut v = serde_json::to_value(RunConfig::default())?;
    if let Some(path) = &flags.config {
        merge(&mut v, read_config_file(path)?);
    }
    let mut over = serde_json::to_value(flags)?;
    over["command"] = Value::from(command);
    if let Some(e) = experiment {
        over["experiment"] = serde_json::to_value(e)?;
    }
    if !flags.tol.is_empty() {
        over["tolerances"] = tolerance_overrides(&flags.tol)?;
    }
    merge(&mut v, over);
    serde_json::from_value(v).map_err(|e| Error::Format(format!("config: {e}")))
}

/// What a command produced: a report plus a few lines for the terminal.
pub struct Outcome {
    pub report: Report,
    pub notes: Vec<String>,
    /// Whether sample data went to stdout.
    pub stdout_used: bool,
}

impl Outcome {
    fn new(report: Report) -> Self {
        Outcome {
            report,
            notes: Vec::new(),
            stdout_used: false,
        }
    }
}

pub fn run_config(cfg: &mut RunConfig) -> Result<Outcome> {
    let t0 = Instant::now();
    let mut out = match cfg.command.as_str() {
        "verify-identities" => Outcome::new(verify_identities(cfg)?),
        "sample" => sample(cfg)?,
        "simulate" => simulate_cmd(cfg)?,
        "limit-test" => {
            let e = cfg.experiment.ok_or_else(|| domain!("limit-test needs an experiment"))?;
            Outcome::new(limit_test(cfg, e)?)
        }
        "llt-ratio" => Outcome::new(limit_test(cfg, Experiment::LltRatio)?),
        "threshold-scan" => Outcome::new(limit_test(cfg, Experiment::ThresholdScan)?),
        other => return Err(domain!("unknown command {other}")),
    };
    out.report.config = serde_json::to_value(&*cfg)?;
    out.report.runtime_seconds = t0.elapsed().as_secs_f64();
    Ok(out)
}

fn verify_identities(cfg: &mut RunConfig) -> Result<Report> {
    if cfg.family != Family::PowerLaw {
        return Err(domain!("verify-identities covers the power-law family"));
    }
    let d = IdentityOptions::default();
    let max_l = cfg.resolve_sites(d.stationarity.max_l);
    let max_n = cfg.particles.get_or_insert(d.stationarity.max_n as usize);
    let opts = IdentityOptions {
        b: cfg.b,
        perturb: cfg.perturb,
        seed: cfg.seed,
        stationarity: FiberScope {
            max_l,
            max_n: *max_n as u64,
            ..d.stationarity
        },
        ..d
    };
    let mut r = ex::verify_identities(&opts, &cfg.tolerances)?;
    r.seeds.push(cfg.seed);
    Ok(r)
}

fn sites_and_particles(cfg: &mut RunConfig, params: &ModelParams, default_l: usize) -> Result<(usize, usize)> {
    let l = cfg.resolve_sites(default_l);
    let rho = cfg.default_rho(params)?;
    let n = cfg.resolve_particles(l, rho);
    if l == 0 {
        return Err(domain!("need at least one site"));
    }
    Ok((l, n))
}

fn build_sampler(cfg: &RunConfig, params: ModelParams, l: usize, n: usize) -> Result<(Box<dyn ConfigSampler>, Option<bool>)> {
    Ok(match cfg.sampler {
        SamplerId::Exact => match &cfg.table_cache {
            Some(dir) => {
                let (table, hit) = io::load_or_build_table(dir, params, l, n)?;
                (Box::new(SequentialSampler::new(table)), Some(hit))
            }
            None => (Box::new(ExactSampler::build(params, l, n, cfg.method.into())?), None),
        },
        SamplerId::Condensate => (
            Box::new(CondensateSampler::new(WeightTable::build_covering(params, n)?, l, n)?),
            None,
        ),
        SamplerId::Rejection => (
            Box::new(RejectionSampler::new(WeightTable::build_covering(params, n)?, l, n, REJECTION_CAP)?),
            None,
        ),
        SamplerId::Iid => (Box::new(IidSampler::new(WeightTable::build_default(params)?, l)?), None),
    })
}

fn write_batch(cfg: &RunConfig, batch: &SampleBatch) -> Result<bool> {
    match &cfg.output {
        Some(p) if p.as_os_str() != "-" => {
            let f = io::create(p)?;
            match cfg.format {
                Format::Csv => io::write_samples_csv(f, batch)?,
                Format::Binary => io::write_samples_binary(f, batch)?,
            }
            Ok(false)
        }
        _ => {
            let lock = std::io::stdout().lock();
            match cfg.format {
                Format::Csv => io::write_samples_csv(lock, batch)?,
                Format::Binary => io::write_samples_binary(lock, batch)?,
            }
            Ok(true)
        }
    }
}

fn timed(r: &mut Report, batch: SampleBatch, t: Instant) -> SampleBatch {
    r.stat("configs_per_sec", batch.configs.len() as f64 / t.elapsed().as_secs_f64().max(1e-12));
    batch
}

fn sample(cfg: &mut RunConfig) -> Result<Outcome> {
    let params = cfg.params()?;
    let (l, n) = sites_and_particles(cfg, &params, 3)?;
    let count = cfg.resolve_samples(10);
    let mut r = Report::new("sample").with_model(params, Some(l), Some(n));
    r.seeds.push(cfg.seed);
    let t = Instant::now();
    let (batch, cond) = if cfg.sampler == SamplerId::Condensate {
        let cond = CondensateSampler::new(WeightTable::build_covering(params, n)?, l, n)?;
        r.stat("build_seconds", t.elapsed().as_secs_f64());
        let t = Instant::now();
        let batch = draw_batch(&cond, count, cfg.seed)?;
        (timed(&mut r, batch, t), Some(cond))
    } else {
        let (sampler, cache_hit) = build_sampler(cfg, params, l, n)?;
        r.stat("build_seconds", t.elapsed().as_secs_f64());
        if let Some(hit) = cache_hit {
            r.stat("table_cache_hit", hit);
        }
        let t = Instant::now();
        let batch = draw_batch(sampler.as_ref(), count, cfg.seed)?;
        (timed(&mut r, batch, t), None)
    };
    let rate = r.statistics["configs_per_sec"].as_f64().unwrap_or(f64::NAN);
    let mut notes = vec![format!("{count} configurations from '{}' ({rate:.1} configs/sec)", batch.sampler)];
    if let Some(cond) = cond {
        if let Some(w) = cond.regime_warning() {
            r.warn(w);
        }
        let rate = cond.rejection_rate();
        notes.push(format!("condensate rejection rate {rate:.5}"));
        r.below("condensate rejection rate", rate, cfg.tolerances.condensate_rejection);
    }
    if let Some(n) = batch.particles {
        r.holds(
            format!("every configuration holds {n} particles on {l} sites"),
            batch.configs.iter().all(|c| c.total() == n as u64 && c.len() == l),
            "",
        );
    }
    let stdout_used = write_batch(cfg, &batch)?;
    Ok(Outcome { report: r, notes, stdout_used })
}

fn load_kernel(cfg: &RunConfig, l: usize) -> Result<TransitionKernel> {
    match cfg.kernel {
        KernelId::Uniform => TransitionKernel::uniform(l),
        KernelId::Ring => TransitionKernel::ring(l),
        KernelId::Custom => {
            let path = cfg
                .kernel_file
                .as_ref()
                .ok_or_else(|| domain!("the custom kernel needs --kernel-file"))?;
            let rows: Vec<Vec<f64>> = serde_json::from_str(&fs::read_to_string(path)?)?;
            if rows.len() != l || rows.iter().any(|r| r.len() != l) {
                return Err(domain!("kernel file must hold a {l}x{l} matrix"));
            }
            TransitionKernel::custom(l, rows.concat())
        }
    }
}

/// Particles spread as evenly as possible, remainder on the first sites.
fn even_configuration(l: usize, n: u64) -> Result<Configuration> {
    let (q, r) = (n / l as u64, n % l as u64);
    Configuration::new((0..l as u64).map(|x| q + u64::from(x < r)).collect())
}

/// States at `times` recovered from the event log.
fn states_at(traj: &Trajectory, times: &[f64]) -> Vec<Configuration> {
    let mut s = traj.initial.clone().into_vec();
    let mut events = traj.events.iter().peekable();
    let mut out = Vec::with_capacity(times.len());
    for &t in times {
        while let Some(e) = events.next_if(|e| e.time <= t) {
            s[e.from] -= 1;
            s[e.to] += 1;
        }
        out.push(Configuration::new(s.clone()).expect("nonempty"));
    }
    out
}

fn simulate_cmd(cfg: &mut RunConfig) -> Result<Outcome> {
    let params = cfg.params()?;
    if !(cfg.t_end > 0.0 && cfg.t_end.is_finite()) {
        return Err(domain!("t_end must be positive and finite, got {}", cfg.t_end));
    }
    let eta0 = match &cfg.initial {
        Some(v) => Configuration::new(v.clone())?,
        None => {
            let (l, n) = sites_and_particles(cfg, &params, 3)?;
            even_configuration(l, n as u64)?
        }
    };
    let (l, n) = (eta0.len(), eta0.total());
    cfg.sites = Some(l);
    cfg.particles = Some(n as usize);
    if n == 0 {
        return Err(domain!("initial configuration has no particles"));
    }
    let kernel = load_kernel(cfg, l)?;
    let mut r = Report::new("simulate").with_model(params, Some(l), Some(n as usize));
    r.seeds.push(cfg.seed);
    let traj = simulate(&params, &eta0, &kernel, cfg.t_end, crate::rng::RngStream::new(cfg.seed, 0))?;
    r.stat("events", traj.events.len());
    r.stat("kernel", kernel.name());
    let mut notes = vec![format!("{} jumps on [0, {}]", traj.events.len(), cfg.t_end)];
    r.holds("final state matches the replayed event log", traj.replay()? == traj.final_state, "");
    if let Some(p) = &cfg.output {
        io::write_trajectory_csv(io::create(p)?, &traj, &params, kernel.name(), cfg.seed)?;
        notes.push(format!("event log written to {}", p.display()));
    }
    let dt = cfg.snapshot_every.unwrap_or(cfg.t_end / 100.0);
    if !(dt > 0.0) {
        return Err(domain!("snapshot interval must be positive"));
    }
    let steps = (cfg.t_end / dt).floor() as usize;
    let times: Vec<f64> = (0..=steps).map(|i| i as f64 * dt).collect();
    let snaps = states_at(&traj, &times);
    r.holds(
        format!("{n} particles in every snapshot"),
        snaps.iter().all(|s| s.total() == n),
        format!("{} snapshots", snaps.len()),
    );
    if let Some(p) = &cfg.snapshots {
        io::write_snapshots_csv(io::create(p)?, &times, &snaps)?;
        notes.push(format!("{} snapshots written to {}", snaps.len(), p.display()));
    }
    if cfg.ergodic {
        r.absorb("ergodic", ex::ergodic_check(&params, &eta0, &kernel, cfg.t_end, cfg.seed, &cfg.tolerances)?);
    }
    Ok(Outcome { report: r, notes, stdout_used: false })
}

fn power_law_b(params: &ModelParams, what: &str) -> Result<f64> {
    params.b().ok_or_else(|| domain!("{what} needs the power-law family"))
}

/// Default `L` per experiment and exponent.
fn default_sites(e: Experiment, params: &ModelParams) -> usize {
    match (e, params.b()) {
        (Experiment::SecondLargest, _) => 2000,
        (Experiment::MaxClt | Experiment::BulkMarginal, Some(b)) if b == 3.0 => 4000,
        (Experiment::MaxStable | Experiment::BulkMarginal, Some(b)) if b < 3.0 => 2000,
        _ => 1000,
    }
}

fn limit_test(cfg: &mut RunConfig, e: Experiment) -> Result<Report> {
    let params = cfg.params()?;
    let tol = cfg.tolerances.clone();
    let seed = cfg.seed;
    match e {
        Experiment::MaxClt | Experiment::MaxStable => {
            let stable = matches!(params.b(), Some(b) if b < 3.0);
            if stable != (e == Experiment::MaxStable) {
                return Err(Error::Regime(format!(
                    "{params}: use {} for this exponent",
                    if stable { "max-stable" } else { "max-clt" }
                )));
            }
            let (l, n) = sites_and_particles(cfg, &params, default_sites(e, &params))?;
            let samples = cfg.resolve_samples(10_000);
            let ks_tol = match params.b() {
                Some(b) if b < 3.0 => tol.ks_stable,
                Some(b) if b == 3.0 => tol.ks_marginal_b3,
                _ => tol.ks_normal,
            };
            ex::max_fluctuations(&params, l, n, samples, seed, ks_tol)
        }
        Experiment::SecondLargest => {
            power_law_b(&params, "second-largest")?;
            let (l, n) = sites_and_particles(cfg, &params, default_sites(e, &params))?;
            let samples = cfg.resolve_samples(10_000);
            ex::second_largest(&params, l, n, samples, seed, &tol)
        }
        Experiment::BulkMarginal => {
            let b = power_law_b(&params, "bulk-marginal")?;
            let (l, n) = sites_and_particles(cfg, &params, default_sites(e, &params))?;
            let samples = cfg.resolve_samples(10_000);
            let ks_tol = if b == 3.0 { tol.ks_marginal_b3 } else { tol.ks_bulk };
            ex::bulk_marginal(&params, l, n, samples, seed, cfg.zeta, ks_tol, &tol)
        }
        Experiment::Theorem1 => {
            let rho = *cfg.rho.get_or_insert(cfg.default_rho(&params)?);
            let ls = cfg.sizes.get_or_insert_with(|| vec![100, 400, 1600]).clone();
            let samples = cfg.resolve_samples(100_000);
            ex::theorem1_decay(&params, &ls, rho, samples, seed, &tol)
        }
        Experiment::LltRatio => {
            let rho = match cfg.rho {
                Some(r) => r,
                None => 2.0 * critical_constants(&params)?.rho_c,
            };
            cfg.rho = Some(rho);
            let ls = cfg.sizes.get_or_insert_with(|| vec![50, 100, 200, 400]).clone();
            let points: Vec<(usize, usize)> = ls.iter().map(|&l| (l, ex::particles_at(l, rho))).collect();
            ex::llt_trend(&params, &points, &tol)
        }
        Experiment::ThresholdScan => {
            let l = cfg.resolve_sites(1000);
            ex::threshold_scan(&params, l, cfg.points)
        }
        Experiment::CondensateFidelity => {
            let (l, n) = sites_and_particles(cfg, &params, 1000)?;
            let samples = cfg.resolve_samples(10_000);
            ex::condensate_fidelity(&params, l, n, samples, seed, &tol)
        }
        Experiment::Stretched => {
            let ls = cfg.sizes.get_or_insert_with(|| vec![50, 100, 200, 400]).clone();
            let ks = [50, 100, 200, 400, 800, 1600, 3200];
            ex::stretched_checks(&params, &ks, &ls, cfg.gamma, &tol)
        }
        Experiment::Performance => {
            let l = cfg.resolve_sites(1000);
            let n = *cfg.particles.get_or_insert(1000);
            let samples = cfg.resolve_samples(2000);
            ex::performance(&params, (l, n), samples, 10_000, 5_000_000, seed, &tol)
        }
    }
}

/// Exit status for a finished report.
pub fn exit_code(report: &Report) -> i32 {
    if report.pass {
        0
    } else {
        EXIT_CRITERIA_FAILED
    }
}

fn summary_lines(r: &Report) -> Vec<String> {
    let mut out = Vec::new();
    for c in &r.criteria {
        let tag = match (c.pass, c.comparison) {
            (_, crate::report::Comparison::Info) => "info",
            (true, _) => "pass",
            (false, _) => "FAIL",
        };
        out.push(format!("[{tag}] {}: {:.4e} (tolerance {:.1e})", c.name, c.value.0, c.tolerance.0));
    }
    for w in &r.warnings {
        out.push(format!("warning: {w}"));
    }
    out
}

/// Parses arguments, runs the command, writes the report and returns the
/// process exit status.
pub fn main_with<I, T>(args: I, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { 0 };
        }
    };
    let (name, experiment, flags) = match &cli.command {
        Command::VerifyIdentities(f) => ("verify-identities", None, f),
        Command::Sample(f) => ("sample", None, f),
        Command::Simulate(f) => ("simulate", None, f),
        Command::LimitTest { experiment, flags } => ("limit-test", Some(*experiment), flags),
        Command::LltRatio(f) => ("llt-ratio", None, f),
        Command::ThresholdScan(f) => ("threshold-scan", None, f),
    };
    match run_cli(name, experiment, flags, stderr) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            e.code()
        }
    }
}

fn run_cli(name: &str, experiment: Option<Experiment>, flags: &Flags, stderr: &mut dyn Write) -> Result<i32> {
    let mut cfg = resolve(name, experiment, flags)?;
    if let Some(t) = cfg.threads {
        // fails only if a pool already exists, in which case it is kept
        let _ = rayon::ThreadPoolBuilder::new().num_threads(t).build_global();
    }
    let out = run_config(&mut cfg)?;
    for line in out.notes.iter().chain(&summary_lines(&out.report)) {
        writeln!(stderr, "{line}")?;
    }
    let json = out.report.to_json()?;
    match &cfg.report {
        Some(p) => {
            let mut f = io::create(p)?;
            f.write_all(json.as_bytes())?;
            f.flush()?;
        }
        None if !out.stdout_used => println!("{json}"),
        None => {}
    }
    Ok(exit_code(&out.report))
}
