//! Command-line front-end: loads a study configuration, runs it and writes
//! `report.csv`, `summary.json` and a gnuplot script.

use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};
use thiserror::Error;

use crate::analysis::{increment_study, spatial_study, temporal_study, AnalysisError, ConvergenceReport};
use crate::config::{ConfigError, KolmogorovSection, StudyConfig, StudyKind};
use crate::drift::{verify_bound, verify_global_holder, verify_mode_holder, verify_time_holder, DriftError};
use crate::kolmogorov::{gradient_decay_check, picard_u_lambda, KolmogorovError, PicardConfig, TestFunction};
use crate::noise::NoiseLattice;
use crate::scheme::SchemeError;

/// Process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exit {
    Success = 0,
    ConfigInvalid = 3,
    HypothesisViolated = 4,
    Runtime = 5,
    AcceptanceFailure = 6,
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("runtime failure: {0}")]
    Runtime(String),
    #[error("cannot write {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

impl RunError {
    pub fn exit(&self) -> Exit {
        match self {
            RunError::Config(ConfigError::Hypothesis(_)) => Exit::HypothesisViolated,
            RunError::Config(_) => Exit::ConfigInvalid,
            RunError::Runtime(_) | RunError::Io { .. } => Exit::Runtime,
        }
    }
}

impl From<AnalysisError> for RunError {
    fn from(e: AnalysisError) -> Self {
        RunError::Runtime(e.to_string())
    }
}

impl From<KolmogorovError> for RunError {
    fn from(e: KolmogorovError) -> Self {
        RunError::Runtime(e.to_string())
    }
}

impl From<SchemeError> for RunError {
    fn from(e: SchemeError) -> Self {
        RunError::Runtime(e.to_string())
    }
}

impl From<DriftError> for RunError {
    fn from(e: DriftError) -> Self {
        RunError::Runtime(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(name = "spde-lab", version, about = "Exponential-integrator SPDE convergence studies")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct RunOptions {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides `noise.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides `study.M`.
    #[arg(long)]
    pub paths: Option<usize>,
    /// Overrides `output.directory`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Fold per-path results in path order (always the case; recorded in the summary).
    #[arg(long)]
    pub deterministic: bool,
    /// Worker threads; defaults to the available parallelism.
    #[arg(long)]
    pub workers: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Writes one trajectory CSV per path.
    Simulate(RunOptions),
    TemporalStudy(RunOptions),
    SpatialStudy(RunOptions),
    IncrementStudy(RunOptions),
    KolmogorovCheck(RunOptions),
    ValidateDrift(RunOptions),
    /// Runs the study kind named in the config.
    Run(RunOptions),
    /// Prints the hypothesis table.
    Hypotheses {
        #[arg(long)]
        config: PathBuf,
    },
}

/// Parses arguments, runs and returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let mut stdout = io::stdout().lock();
    match execute(&cli.command, &mut stdout) {
        Ok(exit) => exit as i32,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit() as i32
        }
    }
}

pub fn execute<W: Write>(command: &Command, out: &mut W) -> Result<Exit, RunError> {
    let (opts, kind) = match command {
        Command::Hypotheses { config } => {
            let cfg = StudyConfig::read(config)?;
            print_hypotheses(&cfg, out).map_err(|source| RunError::Io { path: "<stdout>".into(), source })?;
            return Ok(Exit::Success);
        }
        Command::Simulate(o) => return simulate(&load(o)?, o, out),
        Command::TemporalStudy(o) => (o, Some(StudyKind::Temporal)),
        Command::SpatialStudy(o) => (o, Some(StudyKind::Spatial)),
        Command::IncrementStudy(o) => (o, Some(StudyKind::Increment)),
        Command::KolmogorovCheck(o) => (o, Some(StudyKind::Kolmogorov)),
        Command::ValidateDrift(o) => (o, Some(StudyKind::Validate)),
        Command::Run(o) => (o, None),
    };
    let mut cfg = StudyConfig::read(&opts.config)?;
    if let Some(kind) = kind {
        cfg.study.kind = kind;
    }
    apply_overrides(&mut cfg, opts);
    cfg.validate()?;
    let pass = run_study(&cfg, opts, out)?;
    Ok(if pass { Exit::Success } else { Exit::AcceptanceFailure })
}

fn apply_overrides(cfg: &mut StudyConfig, opts: &RunOptions) {
    if let Some(seed) = opts.seed {
        cfg.noise.seed = seed;
    }
    if let Some(paths) = opts.paths {
        cfg.study.m_paths = paths;
    }
    if let Some(dir) = &opts.out {
        cfg.output.directory = dir.clone();
    }
}

fn load(opts: &RunOptions) -> Result<StudyConfig, RunError> {
    let mut cfg = StudyConfig::read(&opts.config)?;
    apply_overrides(&mut cfg, opts);
    cfg.validate()?;
    Ok(cfg)
}

pub fn print_hypotheses<W: Write>(cfg: &StudyConfig, out: &mut W) -> io::Result<()> {
    let rows = cfg.hypotheses().map_err(|e| io::Error::new(io::ErrorKind::InvalidInput, e.to_string()))?;
    let w0 = rows.iter().map(|r| r.name.chars().count()).max().unwrap_or(0).max(10);
    let w1 = rows.iter().map(|r| r.value.chars().count()).max().unwrap_or(0).max(5);
    let pad = |s: &str, w: usize| format!("{s}{}", " ".repeat(w.saturating_sub(s.chars().count())));
    writeln!(out, "{} | {} | verdict", pad("hypothesis", w0), pad("value", w1))?;
    writeln!(out, "{}-+-{}-+-{}", "-".repeat(w0), "-".repeat(w1), "-".repeat(8))?;
    for r in rows {
        writeln!(out, "{} | {} | {}", pad(r.name, w0), pad(&r.value, w1), r.verdict)?;
    }
    Ok(())
}

fn create(path: &Path) -> Result<BufWriter<fs::File>, RunError> {
    fs::File::create(path).map(BufWriter::new).map_err(|source| RunError::Io { path: path.into(), source })
}

fn write_with(path: &Path, f: impl FnOnce(&mut BufWriter<fs::File>) -> io::Result<()>) -> Result<(), RunError> {
    let mut w = create(path)?;
    f(&mut w).and_then(|_| w.flush()).map_err(|source| RunError::Io { path: path.into(), source })
}

fn prepare_dir(dir: &Path) -> Result<(), RunError> {
    fs::create_dir_all(dir).map_err(|source| RunError::Io { path: dir.into(), source })
}

fn plot_script(title: &str, x_col: usize, y_col: usize, err_col: Option<usize>, log_x: bool) -> String {
    let mut s = String::new();
    s.push_str("set datafile separator ','\n");
    s.push_str("set terminal pngcairo size 800,600\n");
    s.push_str("set output 'report.png'\n");
    s.push_str(&format!("set title '{title}'\n"));
    s.push_str(if log_x { "set logscale xy\n" } else { "set logscale y\n" });
    s.push_str("set key autotitle columnhead\n");
    match err_col {
        Some(e) => s.push_str(&format!(
            "plot 'report.csv' using {x_col}:{y_col}:{e} with yerrorbars, '' using {x_col}:{y_col} with lines notitle\n"
        )),
        None => s.push_str(&format!("plot 'report.csv' using {x_col}:{y_col} with linespoints\n")),
    }
    s
}

/// Runs the configured study, writes its artifacts and returns the overall pass flag.
pub fn run_study<W: Write>(cfg: &StudyConfig, opts: &RunOptions, out: &mut W) -> Result<bool, RunError> {
    let dir = &cfg.output.directory;
    prepare_dir(dir)?;
    let provenance = json!({
        "seed": cfg.noise.seed,
        "paths": cfg.study.m_paths,
        "deterministic_merge": true,
        "workers": opts.workers,
    });
    let (pass, summary, plot) = match cfg.study.kind {
        StudyKind::Temporal | StudyKind::Spatial | StudyKind::Increment => {
            let report = convergence(cfg, opts.workers)?;
            write_with(&dir.join("report.csv"), |w| report.write_csv(w))?;
            let mut summary = serde_json::to_value(report.summary()).expect("summary serializes");
            merge(&mut summary, provenance);
            let plot = match cfg.study.kind {
                StudyKind::Spatial => plot_script("spatial self-convergence", 3, 5, Some(6), true),
                StudyKind::Increment => plot_script("mean-square increments", 2, 5, Some(6), true),
                _ => plot_script("temporal self-convergence", 2, 5, Some(6), true),
            };
            (report.pass(), summary, plot)
        }
        StudyKind::Kolmogorov => {
            let (pass, mut summary) = kolmogorov(cfg, dir)?;
            merge(&mut summary, provenance);
            (pass, summary, plot_script("gradient bound ratios", 1, 4, None, false))
        }
        StudyKind::Validate => {
            let (pass, mut summary) = validate_drift(cfg, dir)?;
            merge(&mut summary, provenance);
            (pass, summary, plot_script("drift validator ratios", 0, 3, None, false))
        }
    };
    write_with(&dir.join("summary.json"), |w| {
        serde_json::to_writer_pretty(&mut *w, &summary)?;
        writeln!(w)
    })?;
    write_with(&dir.join("plot.gp"), |w| w.write_all(plot.as_bytes()))?;
    let _ = writeln!(out, "{}: {}", if pass { "PASS" } else { "FAIL" }, dir.join("summary.json").display());
    Ok(pass)
}

fn merge(target: &mut Value, extra: Value) {
    if let (Value::Object(t), Value::Object(e)) = (target, extra) {
        t.extend(e);
    }
}

fn convergence(cfg: &StudyConfig, workers: Option<usize>) -> Result<ConvergenceReport, RunError> {
    let setup = cfg.setup(workers)?;
    let s = &cfg.study;
    Ok(match s.kind {
        StudyKind::Temporal => temporal_study(&setup, &s.levels, cfg.reference_level())?,
        StudyKind::Spatial => {
            let mut setup = setup;
            setup.base.n_modes = cfg.reference_modes();
            spatial_study(&setup, &s.modes, cfg.reference_modes(), cfg.step_level())?
        }
        _ => increment_study(&setup, &s.levels, &s.increment.clone().unwrap_or_default())?,
    })
}

fn kolmogorov(cfg: &StudyConfig, dir: &Path) -> Result<(bool, Value), RunError> {
    let k: KolmogorovSection = cfg.study.kolmogorov.clone().unwrap_or_default();
    let op = cfg.operator.build()?;
    let d = k.modes.iter().copied().max().unwrap_or(1);
    let x = cfg.initial.coefficients(d);
    let f = TestFunction::DriftFunction { drift: cfg.drift.clone(), at: k.t };
    let decay = gradient_decay_check(&op, &f, k.t, &x, &k.modes, cfg.study.m_paths, cfg.noise.seed)?;
    write_with(&dir.join("report.csv"), |w| decay.write_csv(w))?;

    let x = cfg.initial.coefficients(k.dims);
    let mut picard = Vec::new();
    let mut pass = decay.pass();
    let mut prev = f64::INFINITY;
    for &lambda in &k.lambdas {
        let pc = PicardConfig {
            lambda,
            depth: k.depth,
            dims: k.dims,
            outer_samples: cfg.study.m_paths,
            time_nodes: k.time_nodes,
            horizon: cfg.study.horizon,
            seed: cfg.noise.seed,
            ..PicardConfig::default()
        };
        let r = picard_u_lambda(&op, &cfg.drift, &pc, 0.0, &x)?;
        let se = r.estimate.norm_stderr();
        let within = k.depth > 1 || r.norm() <= r.diagnostics.first_iterate_bound + 3.0 * se;
        pass &= within && r.norm() < prev;
        prev = r.norm();
        picard.push(json!({
            "lambda": lambda,
            "norm": r.norm(),
            "stderr": se,
            "first_iterate_bound": r.diagnostics.first_iterate_bound,
            "within_bound": within,
            "evaluations": r.diagnostics.evaluations,
        }));
    }
    Ok((pass, json!({ "pass": pass, "gradient_decay": decay, "picard": picard })))
}

fn validate_drift(cfg: &StudyConfig, dir: &Path) -> Result<(bool, Value), RunError> {
    let op = cfg.operator.build()?;
    let (spec, t, trials, seed) = (&cfg.drift, cfg.study.horizon, cfg.study.m_paths, cfg.noise.seed);
    let reports = vec![
        verify_mode_holder(spec, &op, t, trials, seed)?,
        verify_time_holder(spec, &op, t, trials, seed)?,
        verify_global_holder(spec, &op, t, trials, seed)?,
        verify_bound(spec, &op, t, trials, seed)?,
    ];
    write_with(&dir.join("report.csv"), |w| {
        writeln!(w, "check,trials,max_ratio,passed")?;
        for r in &reports {
            writeln!(w, "{},{},{:e},{}", r.check, r.trials, r.max_ratio, r.passed)?;
        }
        Ok(())
    })?;
    let pass = reports.iter().all(|r| r.passed);
    Ok((pass, json!({ "pass": pass, "validators": reports })))
}

fn simulate<W: Write>(cfg: &StudyConfig, opts: &RunOptions, out: &mut W) -> Result<Exit, RunError> {
    let dir = &cfg.output.directory;
    prepare_dir(dir)?;
    let scheme = cfg.scheme(cfg.step_level(), cfg.noise.n_modes)?;
    let lattice = NoiseLattice::new(cfg.noise.seed, cfg.study.horizon, cfg.noise.level, cfg.noise.n_modes)
        .map_err(|e| RunError::Runtime(e.to_string()))?;
    let paths = opts.paths.unwrap_or(1);
    for path in 0..paths as u64 {
        let traj = scheme.simulate_path(&lattice, path)?;
        let file = dir.join(format!("path_{path}.csv"));
        write_with(&file, |w| traj.write_csv(w))?;
        let _ = writeln!(out, "wrote {}", file.display());
    }
    Ok(Exit::Success)
}

#[cfg(test)]
mod tests {
    use super::*;

    const CONFIG: &str = r#"{
        "operator": {"kind": "heat", "n_max": 64},
        "drift": {"kind": "diagonal", "beta": 0.5, "epsilon": 0.9, "amplitude": 1.0,
                  "time_mod": {"type": "cosine", "period": 6.283185307179586}, "cap": 1.0},
        "rate_params": {"alpha": 0.45, "beta": 0.5, "epsilon": 0.9},
        "initial": {"profile": "power_decay", "q": 3.0},
        "noise": {"seed": 3, "L": 7, "n_modes": 8},
        "study": {"kind": "temporal", "levels": [2, 3, 4], "M": 6},
        "output": {"directory": "unused"}
    }"#;

    fn opts(config: PathBuf, out: PathBuf) -> RunOptions {
        RunOptions { config, seed: None, paths: None, out: Some(out), deterministic: true, workers: Some(2) }
    }

    #[test]
    fn exit_codes_map_errors() {
        assert_eq!(RunError::Config(ConfigError::Hypothesis("x".into())).exit(), Exit::HypothesisViolated);
        assert_eq!(RunError::Config(ConfigError::Invalid("x".into())).exit(), Exit::ConfigInvalid);
        assert_eq!(RunError::Runtime("x".into()).exit(), Exit::Runtime);
        assert_eq!(Exit::AcceptanceFailure as i32, 6);
    }

    #[test]
    fn temporal_run_writes_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let cfg_path = dir.path().join("c.json");
        fs::write(&cfg_path, CONFIG).unwrap();
        let out = dir.path().join("o");
        let mut sink = Vec::new();
        let exit = execute(&Command::TemporalStudy(opts(cfg_path, out.clone())), &mut sink).unwrap();
        assert!(matches!(exit, Exit::Success | Exit::AcceptanceFailure));
        let csv = fs::read_to_string(out.join("report.csv")).unwrap();
        assert_eq!(csv.lines().count(), 4);
        let summary: Value = serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
        assert!((summary["nu_theory"].as_f64().unwrap() - 0.08225).abs() < 1e-12);
        assert_eq!(summary["off_grid_evaluation"], "partial_exponential_step");
        assert!(fs::read_to_string(out.join("plot.gp")).unwrap().contains("report.csv"));
    }

    #[test]
    fn hypotheses_table_prints_nu() {
        let cfg = StudyConfig::from_json(CONFIG).unwrap();
        let mut buf = Vec::new();
        print_hypotheses(&cfg, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.contains("ν = 0.082250"), "{text}");
        assert_eq!(text.lines().count(), 6);
    }
}
