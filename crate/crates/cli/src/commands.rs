use std::fmt;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use seu::asymptotics::{IntegralOptions, SigmaOptions};
use seu::format::sig;
use seu::montecarlo::{
    clt_check, compare_designs, limit_centers, lln_diagnostic, write_comparison_csv, CltTable,
    CompareEntry, CompareSimulation,
};
use seu::urn::write_trajectory_csv;
use seu::{
    full_report, run_batch, run_trial, validate_design, AsymptoticReport, BatchConfig, Design,
    EnsembleStats, ReportOptions, ResponseModel, RngStream, SeuError, UrnState,
};

use crate::config::{parse_config, Format, RunConfig};

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => EXIT_CONFIG,
            Self::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Config(m) => write!(f, "configuration error:\n{m}"),
            Self::Runtime(m) => write!(f, "error: {m}"),
        }
    }
}

impl From<SeuError> for CliError {
    fn from(e: SeuError) -> Self {
        match e {
            SeuError::InvalidConfig(_) => Self::Config(e.to_string()),
            _ => Self::Runtime(e.to_string()),
        }
    }
}

fn io_err(path: &Path) -> impl Fn(io::Error) -> CliError + '_ {
    move |e| CliError::Runtime(format!("{}: {e}", path.display()))
}

/// Command-line values that take precedence over the configuration file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub format: Option<Format>,
    pub replications: Option<u64>,
    pub horizon: Option<u64>,
}

/// Reads `SEU_THREADS`; unset or empty means the default pool.
pub fn threads_from_env() -> Result<Option<usize>, CliError> {
    match std::env::var("SEU_THREADS") {
        Ok(s) if s.trim().is_empty() => Ok(None),
        Ok(s) => match s.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(CliError::Config(format!(
                "SEU_THREADS must be a positive integer, got \"{s}\""
            ))),
        },
        Err(_) => Ok(None),
    }
}

pub fn load(path: &Path, ov: &Overrides) -> Result<RunConfig, CliError> {
    let src = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let mut cfg =
        parse_config(&src).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    if let Some(s) = ov.seed {
        cfg.seed = s;
    }
    if let Some(d) = &ov.out {
        cfg.output_dir = Some(d.clone());
    }
    if let Some(f) = ov.format {
        cfg.format = f;
    }
    if let Some(r) = ov.replications {
        if r == 0 {
            return Err(CliError::Config("--replications must be at least 1".into()));
        }
        cfg.replications = r;
    }
    if let Some(h) = ov.horizon {
        if h == 0 {
            return Err(CliError::Config("--horizon must be at least 1".into()));
        }
        cfg.horizon = h;
    }
    Ok(cfg)
}

fn design_and_model(cfg: &RunConfig) -> Result<(&Design, &ResponseModel), CliError> {
    match (&cfg.design, &cfg.model) {
        (Some(d), Some(m)) => Ok((d, m)),
        _ => Err(CliError::Config(
            "this command needs both [design] and [model]".into(),
        )),
    }
}

/// Output directory, which must already exist.
fn out_dir(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    let dir = cfg.output_dir.clone().unwrap_or_else(|| PathBuf::from("."));
    if !dir.is_dir() {
        return Err(CliError::Runtime(format!(
            "output directory {} does not exist",
            dir.display()
        )));
    }
    Ok(dir)
}

fn write_file(
    path: &Path,
    f: impl FnOnce(&mut BufWriter<File>) -> io::Result<()>,
) -> Result<(), CliError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    f(&mut w).and_then(|_| w.flush()).map_err(io_err(path))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Runtime(e.to_string()))?;
    write_file(path, |w| writeln!(w, "{text}"))
}

fn report_options(cfg: &RunConfig) -> ReportOptions {
    ReportOptions {
        sigma: SigmaOptions {
            mc_samples: Some(cfg.mc_samples),
            master_seed: cfg.seed,
        },
        integrals: IntegralOptions {
            literal_sharp23: cfg.literal_mixed_term,
            ..IntegralOptions::default()
        },
    }
}

fn fmt_vec(v: &[f64]) -> String {
    v.iter()
        .map(|x| format!("{x:.6}"))
        .collect::<Vec<_>>()
        .join("  ")
}

pub fn simulate(
    cfg: &RunConfig,
    threads: Option<usize>,
    out: &mut dyn Write,
) -> Result<(), CliError> {
    let (design, model) = design_and_model(cfg)?;
    let dir = out_dir(cfg)?;
    if cfg.replications == 1 {
        single_trial(cfg, design, model, &dir, out)
    } else {
        ensemble(cfg, design, model, threads, &dir, out)
    }
}

fn single_trial(
    cfg: &RunConfig,
    design: &Design,
    model: &ResponseModel,
    dir: &Path,
    out: &mut dyn Write,
) -> Result<(), CliError> {
    let k = design.k();
    let start = UrnState::with_composition(cfg.initial_composition(k))?;
    let mut rng = RngStream::new(cfg.seed, 0);
    let checkpoints: Vec<u64> = if cfg.checkpoints.is_empty() {
        (0..=cfg.horizon).collect()
    } else {
        std::iter::once(0)
            .chain(cfg.checkpoints.iter().copied())
            .collect()
    };
    let traj = run_trial(start, design, model, cfg.horizon, &mut rng, &checkpoints)?;
    let path = dir.join(format!("trajectory.{}", cfg.format.extension()));
    match cfg.format {
        Format::Csv => write_file(&path, |w| write_trajectory_csv(&traj, w))?,
        Format::Json => write_json(&path, &traj)?,
    }

    let last = traj.last().expect("terminal snapshot is always recorded");
    let n = last.stage.max(1) as f64;
    let limits = limit_centers(design, model).ok();
    let w = |e: io::Error| CliError::Runtime(e.to_string());
    writeln!(
        out,
        "design {}  K={}  n={}  seed={}",
        design.id(),
        k,
        last.stage,
        cfg.seed
    )
    .map_err(w)?;
    writeln!(
        out,
        "{:>4} {:>12} {:>12} {:>12} {:>12}",
        "arm", "N/n", "v", "theta_hat", "theta"
    )
    .map_err(w)?;
    let theta = model.theta();
    for (i, t) in theta.iter().enumerate() {
        let v = limits
            .as_ref()
            .map_or("-".to_string(), |l| format!("{:.6}", l.0[i]));
        writeln!(
            out,
            "{:>4} {:>12.6} {:>12} {:>12.6} {:>12.6}",
            i + 1,
            last.n[i] as f64 / n,
            v,
            last.theta_hat[i],
            t
        )
        .map_err(w)?;
    }
    if let Some((v, _, _)) = &limits {
        let lln = lln_diagnostic(&traj, v);
        if let Some(slope) = lln.slope {
            let tag = if lln.reliable { "" } else { " (short series)" };
            writeln!(out, "log-log slope of |N/n - v|: {slope:.3}{tag}").map_err(w)?;
        }
    }
    writeln!(out, "wrote {}", path.display()).map_err(w)?;
    Ok(())
}

#[derive(Serialize)]
struct EnsembleOutput<'a> {
    ensemble: &'a EnsembleStats,
    #[serde(skip_serializing_if = "Option::is_none")]
    clt: Option<&'a CltTable>,
}

fn ensemble(
    cfg: &RunConfig,
    design: &Design,
    model: &ResponseModel,
    threads: Option<usize>,
    dir: &Path,
    out: &mut dyn Write,
) -> Result<(), CliError> {
    let mut batch = BatchConfig::new(
        design.clone(),
        model.clone(),
        cfg.horizon,
        cfg.replications,
        cfg.seed,
    );
    batch.checkpoints = cfg.checkpoints.clone();
    batch.initial_composition = cfg.initial_composition(design.k());
    batch.threads = threads;
    let stats = run_batch(&batch)?;

    let report: Option<AsymptoticReport> = full_report(design, model, &report_options(cfg)).ok();
    let table = report
        .as_ref()
        .filter(|r| r.clt_valid)
        .and_then(|r| clt_check(&stats, r, &cfg.tolerances).ok());

    let path = dir.join(format!("ensemble.{}", cfg.format.extension()));
    match cfg.format {
        Format::Csv => {
            let rows = stats.rows(report.as_ref());
            write_file(&path, |w| write_comparison_csv(&rows, w))?
        }
        Format::Json => write_json(
            &path,
            &EnsembleOutput {
                ensemble: &stats,
                clt: table.as_ref(),
            },
        )?,
    }

    let w = |e: io::Error| CliError::Runtime(e.to_string());
    let term = stats.terminal();
    writeln!(
        out,
        "design {}  K={}  n={}  R={}  seed={}",
        design.id(),
        design.k(),
        stats.horizon,
        stats.replications,
        stats.master_seed
    )
    .map_err(w)?;
    writeln!(out, "v            {}", fmt_vec(&stats.v)).map_err(w)?;
    writeln!(out, "mean N/n     {}", fmt_vec(&term.n.mean)).map_err(w)?;
    writeln!(out, "mean theta^  {}", fmt_vec(&term.theta_hat.mean)).map_err(w)?;
    match (&report, &table) {
        (_, Some(t)) => write!(out, "{}", t.render()).map_err(w)?,
        (Some(r), None) if !r.clt_valid => writeln!(
            out,
            "lambda = {:.4} >= 1/2: no normal limit, covariances not compared",
            r.lambda
        )
        .map_err(w)?,
        _ => {}
    }
    writeln!(out, "wrote {}", path.display()).map_err(w)?;
    Ok(())
}

/// Computes the asymptotic report; prints it as JSON and, with an output
/// directory configured, writes `asymptotics.json` there as well.
pub fn asymptotics(cfg: &RunConfig, out: &mut dyn Write) -> Result<(), CliError> {
    let (design, model) = design_and_model(cfg)?;
    let dir = match &cfg.output_dir {
        Some(_) => Some(out_dir(cfg)?),
        None => None,
    };
    let report = full_report(design, model, &report_options(cfg))?;
    let text = report.to_json();
    if let Some(dir) = dir {
        let path = dir.join("asymptotics.json");
        write_file(&path, |w| writeln!(w, "{text}"))?;
    }
    writeln!(out, "{text}").map_err(|e| CliError::Runtime(e.to_string()))
}

pub fn compare(
    cfg: &RunConfig,
    threads: Option<usize>,
    out: &mut dyn Write,
) -> Result<(), CliError> {
    if cfg.compare.len() < 2 {
        return Err(CliError::Config(format!(
            "compare needs at least two [[compare]] entries, found {}",
            cfg.compare.len()
        )));
    }
    let first = &cfg.compare[0];
    if let Some(bad) = cfg.compare.iter().find(|c| c.model != first.model) {
        return Err(CliError::Config(format!(
            "entry \"{}\" uses a different response model from \"{}\"",
            bad.label, first.label
        )));
    }
    let dir = out_dir(cfg)?;
    let entries: Vec<CompareEntry> = cfg
        .compare
        .iter()
        .map(|c| CompareEntry {
            label: c.label.clone(),
            design: c.design.clone(),
            model: c.model.clone(),
        })
        .collect();
    let sim = (cfg.replications > 1).then_some(CompareSimulation {
        horizon: cfg.horizon,
        replications: cfg.replications,
        master_seed: cfg.seed,
        threads,
    });
    let table = compare_designs(&entries, &report_options(cfg), sim.as_ref())?;
    let path = dir.join(format!("compare.{}", cfg.format.extension()));
    match cfg.format {
        Format::Csv => write_file(&path, |w| table.write_csv(w))?,
        Format::Json => write_file(&path, |w| writeln!(w, "{}", table.to_json()))?,
    }
    let w = |e: io::Error| CliError::Runtime(e.to_string());
    writeln!(
        out,
        "theta = ({})",
        table
            .theta
            .iter()
            .map(|t| sig(*t, 6))
            .collect::<Vec<_>>()
            .join(", ")
    )
    .map_err(w)?;
    write!(out, "{}", table.render()).map_err(w)?;
    writeln!(out, "wrote {}", path.display()).map_err(w)?;
    Ok(())
}

/// Prints the regularity checks; writes `validation.json` when JSON output is
/// requested with an output directory.
pub fn validate(cfg: &RunConfig, out: &mut dyn Write) -> Result<(), CliError> {
    let (design, model) = design_and_model(cfg)?;
    let report = validate_design(design, model);
    if cfg.format == Format::Json && cfg.output_dir.is_some() {
        let dir = out_dir(cfg)?;
        write_json(&dir.join("validation.json"), &report)?;
    }
    let w = |e: io::Error| CliError::Runtime(e.to_string());
    writeln!(out, "design {}  K={}", design.id(), design.k()).map_err(w)?;
    write!(out, "{}", report.render()).map_err(w)?;
    let verdict = if report.all_pass() {
        "all checks pass"
    } else {
        "some checks fail"
    };
    writeln!(out, "{verdict}").map_err(w)?;
    Ok(())
}
