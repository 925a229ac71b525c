//! Seeded replication harness and empirical checks against the asymptotic report.
//!
//! Replication `i` draws from stream `(master_seed, i)`. Replications are
//! grouped into fixed chunks; each chunk is accumulated sequentially and the
//! chunk accumulators are merged in index order, so statistics do not depend
//! on the number of worker threads.

use std::io::{self, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::asymptotics::{stationary_proportion, AsymptoticReport, ReportOptions, RpwReference};
use crate::design::Design;
use crate::error::{Result, SeuError};
use crate::format::sig;
use crate::linalg::{self, rows, Mat};
use crate::model::ResponseModel;
use crate::rng::RngStream;
use crate::stats::{CovAccumulator, MomentAccumulator};
use crate::urn::{run_trial, Snapshot, Trajectory, UrnState};

const CHUNK: u64 = 256;

#[derive(Debug, Clone)]
pub struct BatchConfig {
    pub design: Design,
    pub model: ResponseModel,
    pub horizon: u64,
    pub replications: u64,
    pub master_seed: u64,
    /// Extra stages at which statistics are collected; the horizon is always included.
    pub checkpoints: Vec<u64>,
    pub initial_composition: Vec<f64>,
    /// Worker cap; `None` uses the global pool. Never affects results.
    pub threads: Option<usize>,
}

impl BatchConfig {
    pub fn new(
        design: Design,
        model: ResponseModel,
        horizon: u64,
        replications: u64,
        master_seed: u64,
    ) -> Self {
        let k = design.k();
        Self {
            design,
            model,
            horizon,
            replications,
            master_seed,
            checkpoints: Vec::new(),
            initial_composition: vec![1.0; k],
            threads: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.replications < 1 {
            return Err(SeuError::InvalidConfig(
                "replications must be at least 1".into(),
            ));
        }
        if self.horizon < 1 {
            return Err(SeuError::InvalidConfig("horizon must be at least 1".into()));
        }
        if self.design.k() != self.model.k() || self.initial_composition.len() != self.design.k() {
            return Err(SeuError::InvalidConfig(
                "design, model and initial composition disagree on K".into(),
            ));
        }
        if self.checkpoints.windows(2).any(|w| w[0] >= w[1]) {
            return Err(SeuError::InvalidConfig(
                "checkpoints must be strictly increasing".into(),
            ));
        }
        if self.checkpoints.iter().any(|&c| c > self.horizon) {
            return Err(SeuError::InvalidConfig(
                "checkpoints must not exceed the horizon".into(),
            ));
        }
        if self.threads == Some(0) {
            return Err(SeuError::InvalidConfig(
                "thread count must be positive".into(),
            ));
        }
        Ok(())
    }

    fn stages(&self) -> Vec<u64> {
        let mut s: Vec<u64> = self
            .checkpoints
            .iter()
            .copied()
            .filter(|&c| c >= 1)
            .collect();
        s.push(self.horizon);
        s.sort_unstable();
        s.dedup();
        s
    }
}

/// Empirical summary of one scaled statistic `sqrt(m) (Z_m - center)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockStats {
    /// Mean of the raw statistic `Z_m`.
    pub mean: Vec<f64>,
    pub center: Vec<f64>,
    /// Covariance of the scaled deviation; absent with one replication.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub covariance: Option<Vec<Vec<f64>>>,
    /// Standard error of each diagonal variance estimate.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variance_se: Option<Vec<f64>>,
    /// Standard error of each mean of `Z_m`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_se: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub skewness: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub excess_kurtosis: Option<Vec<f64>>,
}

impl BlockStats {
    pub fn covariance_matrix(&self) -> Option<Mat> {
        self.covariance.as_deref().map(linalg::from_rows)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointStats {
    pub stage: u64,
    /// `N_m / m`, centred at `v`.
    #[serde(rename = "N")]
    pub n: BlockStats,
    /// `Y_m / m`, centred at `gamma v`.
    #[serde(rename = "Y")]
    pub y: BlockStats,
    /// `theta_hat_m`, centred at `theta`.
    pub theta_hat: BlockStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleStats {
    pub design: String,
    pub k: usize,
    pub horizon: u64,
    pub replications: u64,
    pub master_seed: u64,
    pub v: Vec<f64>,
    pub y_limit: Vec<f64>,
    pub theta: Vec<f64>,
    /// False with a single replication: covariances are undefined.
    pub covariance_defined: bool,
    pub checkpoints: Vec<CheckpointStats>,
}

impl EnsembleStats {
    pub fn terminal(&self) -> &CheckpointStats {
        self.checkpoints.last().expect("horizon checkpoint")
    }

    pub fn at(&self, stage: u64) -> Option<&CheckpointStats> {
        self.checkpoints.iter().find(|c| c.stage == stage)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("stats are serializable")
    }

    /// Long-format rows: `statistic, coordinate, predicted, empirical, rel_error`.
    /// `predicted` holds the centre for means; covariances get predictions
    /// only when a report is supplied.
    pub fn rows(&self, report: Option<&AsymptoticReport>) -> Vec<ComparisonRow> {
        let mut out = Vec::new();
        let preds = report.filter(|r| r.clt_valid).map(|r| {
            (
                r.lambda_sharp_matrix(),
                r.lambda_dagger_natural_matrix(),
                Some(r.theta_clt_matrix()),
            )
        });
        for cp in &self.checkpoints {
            let blocks = [("N", &cp.n), ("Y", &cp.y), ("theta_hat", &cp.theta_hat)];
            for (bi, (name, b)) in blocks.iter().enumerate() {
                for k in 0..self.k {
                    out.push(ComparisonRow::compare(
                        format!("mean_{name}@{}", cp.stage),
                        format!("{}", k + 1),
                        b.center[k],
                        b.mean[k],
                        ErrorKind::Absolute,
                    ));
                }
                let Some(cov) = &b.covariance else { continue };
                let pred = preds.as_ref().and_then(|p| match bi {
                    0 => p.0.clone(),
                    1 => p.1.clone(),
                    _ => p.2.clone(),
                });
                for i in 0..self.k {
                    for j in 0..self.k {
                        let p = pred.as_ref().map_or(f64::NAN, |m| m[(i, j)]);
                        let kind = entry_kind(pred.as_ref(), i, j);
                        out.push(ComparisonRow::compare(
                            format!("cov_{name}@{}", cp.stage),
                            format!("{},{}", i + 1, j + 1),
                            p,
                            cov[i][j],
                            kind,
                        ));
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Default)]
struct StageAcc {
    n_sum: Vec<u128>,
    cov: Option<CovAccumulator>,
    moments: Vec<MomentAccumulator>,
    raw: Vec<MomentAccumulator>,
}

impl StageAcc {
    fn new(k: usize) -> Self {
        Self {
            n_sum: vec![0; k],
            cov: Some(CovAccumulator::new(3 * k)),
            moments: vec![MomentAccumulator::new(); 3 * k],
            raw: vec![MomentAccumulator::new(); 3 * k],
        }
    }

    fn push(&mut self, snap: &Snapshot, centers: &[f64]) {
        let k = snap.n.len();
        let m = snap.stage as f64;
        let root = m.sqrt();
        let mut raw = Vec::with_capacity(3 * k);
        raw.extend(snap.n.iter().map(|&c| c as f64 / m));
        raw.extend(snap.y.iter().map(|&y| y / m));
        raw.extend(snap.theta_hat.iter().copied());
        let scaled: Vec<f64> = raw
            .iter()
            .zip(centers)
            .map(|(z, c)| root * (z - c))
            .collect();
        for (s, c) in self.n_sum.iter_mut().zip(&snap.n) {
            *s += *c as u128;
        }
        self.cov.as_mut().unwrap().push(&scaled);
        for (acc, x) in self.moments.iter_mut().zip(&scaled) {
            acc.push(*x);
        }
        for (acc, x) in self.raw.iter_mut().zip(&raw) {
            acc.push(*x);
        }
    }

    fn merge(&mut self, o: &Self) {
        for (a, b) in self.n_sum.iter_mut().zip(&o.n_sum) {
            *a += b;
        }
        self.cov.as_mut().unwrap().merge(o.cov.as_ref().unwrap());
        for (a, b) in self.moments.iter_mut().zip(&o.moments) {
            a.merge(b);
        }
        for (a, b) in self.raw.iter_mut().zip(&o.raw) {
            a.merge(b);
        }
    }

    fn finish(&self, stage: u64, centers: &[f64], reps: u64) -> CheckpointStats {
        let k = self.n_sum.len();
        let cov = self.cov.as_ref().unwrap().covariance();
        let denom = reps as f64 * stage as f64;
        let block = |b: usize| {
            let range = b * k..(b + 1) * k;
            let mean: Vec<f64> = if b == 0 {
                self.n_sum.iter().map(|&s| s as f64 / denom).collect()
            } else {
                self.raw[range.clone()].iter().map(|a| a.mean()).collect()
            };
            let covariance = cov.as_ref().map(|c| {
                let sub = c.view((b * k, b * k), (k, k)).into_owned();
                rows(&sub)
            });
            let collect = |f: &dyn Fn(&MomentAccumulator) -> Option<f64>| -> Option<Vec<f64>> {
                self.moments[range.clone()].iter().map(f).collect()
            };
            let mean_se: Option<Vec<f64>> = self.raw[range.clone()]
                .iter()
                .map(|a| a.variance().map(|v| (v / reps as f64).sqrt()))
                .collect();
            BlockStats {
                mean,
                center: centers[range.clone()].to_vec(),
                covariance,
                variance_se: collect(&|a| a.variance_standard_error()),
                mean_se,
                skewness: collect(&|a| a.skewness()),
                excess_kurtosis: collect(&|a| a.excess_kurtosis()),
            }
        };
        CheckpointStats {
            stage,
            n: block(0),
            y: block(1),
            theta_hat: block(2),
        }
    }
}

fn run_chunk(
    cfg: &BatchConfig,
    stages: &[u64],
    centers: &[f64],
    range: std::ops::Range<u64>,
) -> Result<Vec<StageAcc>> {
    let k = cfg.design.k();
    let mut accs: Vec<StageAcc> = stages.iter().map(|_| StageAcc::new(k)).collect();
    for i in range {
        let trial = || -> Result<Trajectory> {
            let mut rng = RngStream::new(cfg.master_seed, i);
            let start = UrnState::with_composition(cfg.initial_composition.clone())?;
            run_trial(
                start,
                &cfg.design,
                &cfg.model,
                cfg.horizon,
                &mut rng,
                stages,
            )
        };
        let traj = trial().map_err(|e| SeuError::Replication {
            stream_index: i,
            source: Box::new(e),
        })?;
        let mut it = traj.iter().filter(|s| s.stage >= 1);
        for (acc, &stage) in accs.iter_mut().zip(stages) {
            let snap = it.next().filter(|s| s.stage == stage).ok_or_else(|| {
                SeuError::NumericalFailure(format!("missing snapshot at stage {stage}"))
            })?;
            acc.push(snap, centers);
        }
    }
    Ok(accs)
}

/// Limit centres `(v, gamma v, theta)` for the scaled deviations.
pub fn limit_centers(
    design: &Design,
    model: &ResponseModel,
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let theta = model.theta();
    let h = design.generating_matrix(&theta, &theta)?;
    let (v, gamma) = stationary_proportion(&h)?;
    let y = v.iter().map(|x| x * gamma).collect();
    Ok((v, y, theta))
}

/// Runs `R` independent trials on streams `0..R` and aggregates per checkpoint.
pub fn run_batch(cfg: &BatchConfig) -> Result<EnsembleStats> {
    cfg.validate()?;
    let k = cfg.design.k();
    let (v, y_limit, theta) = limit_centers(&cfg.design, &cfg.model)?;
    let centers: Vec<f64> = v.iter().chain(&y_limit).chain(&theta).copied().collect();
    let stages = cfg.stages();
    let chunks: Vec<std::ops::Range<u64>> = (0..cfg.replications.div_ceil(CHUNK))
        .map(|c| c * CHUNK..((c + 1) * CHUNK).min(cfg.replications))
        .collect();

    let work = || -> Vec<Result<Vec<StageAcc>>> {
        chunks
            .par_iter()
            .map(|r| run_chunk(cfg, &stages, &centers, r.clone()))
            .collect()
    };
    let results = match cfg.threads {
        Some(t) => rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build()
            .map_err(|e| SeuError::NumericalFailure(format!("thread pool: {e}")))?
            .install(work),
        None => work(),
    };

    let mut total: Vec<StageAcc> = stages.iter().map(|_| StageAcc::new(k)).collect();
    for r in results {
        let part = r?;
        for (a, b) in total.iter_mut().zip(&part) {
            a.merge(b);
        }
    }
    Ok(EnsembleStats {
        design: cfg.design.id().to_string(),
        k,
        horizon: cfg.horizon,
        replications: cfg.replications,
        master_seed: cfg.master_seed,
        covariance_defined: cfg.replications >= 2,
        checkpoints: total
            .iter()
            .zip(&stages)
            .map(|(a, &s)| a.finish(s, &centers, cfg.replications))
            .collect(),
        v,
        y_limit,
        theta,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlnDiagnostic {
    pub stages: Vec<u64>,
    /// `max_k |N_{m,k}/m - v_k|` per stage (root-mean-square over trajectories
    /// for ensembles).
    pub deviations: Vec<f64>,
    /// Least-squares slope of `log deviation` against `log m`, fitted from
    /// `m >= 100` when the series reaches `m >= 10^4`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slope: Option<f64>,
    pub reliable: bool,
    pub note: String,
}

const LLN_BURN_IN: u64 = 100;
const LLN_NOTE: &str = "rate diagnostic only; iterated-logarithm constants are not verified";

/// Deviation series and log-log slope for one trajectory.
pub fn lln_diagnostic(trajectory: &[Snapshot], v: &[f64]) -> LlnDiagnostic {
    lln_diagnostic_ensemble(std::slice::from_ref(&trajectory.to_vec()), v)
}

/// As [`lln_diagnostic`], averaging squared deviations over trajectories that
/// share their checkpoint stages.
pub fn lln_diagnostic_ensemble(trajectories: &[Trajectory], v: &[f64]) -> LlnDiagnostic {
    let Some(first) = trajectories.first() else {
        return LlnDiagnostic {
            stages: vec![],
            deviations: vec![],
            slope: None,
            reliable: false,
            note: LLN_NOTE.into(),
        };
    };
    let mut stages = Vec::new();
    let mut deviations = Vec::new();
    for (idx, snap) in first.iter().enumerate() {
        if snap.stage == 0 {
            continue;
        }
        let mut sq = 0.0;
        for t in trajectories {
            let s = &t[idx];
            let m = s.stage as f64;
            let dev =
                s.n.iter()
                    .zip(v)
                    .map(|(&c, vk)| (c as f64 / m - vk).abs())
                    .fold(0.0f64, f64::max);
            sq += dev * dev;
        }
        stages.push(snap.stage);
        deviations.push(if trajectories.len() == 1 {
            sq.sqrt()
        } else {
            (sq / trajectories.len() as f64).sqrt()
        });
    }
    // Skip the first-decade transient when at least two decades remain after it.
    let fit_from = match stages.last() {
        Some(&last) if last >= LLN_BURN_IN * 100 => LLN_BURN_IN,
        _ => 0,
    };
    let pts: Vec<(f64, f64)> = stages
        .iter()
        .zip(&deviations)
        .filter(|(&m, d)| m >= fit_from && **d > 0.0)
        .map(|(&m, &d)| ((m as f64).ln(), d.ln()))
        .collect();
    let slope = least_squares_slope(&pts);
    let span = pts.last().map_or(0.0, |l| (l.0 - pts[0].0).exp());
    let reliable = slope.is_some() && pts.len() >= 5 && span >= 100.0 && stages[0] >= 10;
    LlnDiagnostic {
        stages,
        deviations,
        slope,
        reliable,
        note: LLN_NOTE.into(),
    }
}

fn least_squares_slope(pts: &[(f64, f64)]) -> Option<f64> {
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

/// Roughly log-spaced stages from 10 up to `n`, `per_decade` per factor of ten.
pub fn log_spaced_stages(n: u64, per_decade: usize) -> Vec<u64> {
    let mut out = Vec::new();
    if n < 10 {
        out.extend(1..=n);
        return out;
    }
    let top = (n as f64).log10();
    let steps = ((top - 1.0) * per_decade as f64).ceil() as usize;
    for i in 0..=steps {
        let e = 1.0 + i as f64 / per_decade as f64;
        let m = (10f64.powf(e.min(top))).round() as u64;
        out.push(m.min(n));
    }
    out.sort_unstable();
    out.dedup();
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ErrorKind {
    Relative,
    Absolute,
    /// Absolute error divided by the largest predicted diagonal entry.
    Scaled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub statistic: String,
    pub coordinate: String,
    pub predicted: f64,
    pub empirical: f64,
    /// Error per `error_kind`; `NaN` when nothing is predicted.
    pub rel_error: f64,
    pub error_kind: ErrorKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tolerance: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pass: Option<bool>,
}

impl ComparisonRow {
    fn compare(
        statistic: String,
        coordinate: String,
        predicted: f64,
        empirical: f64,
        kind: ErrorKind,
    ) -> Self {
        let diff = (empirical - predicted).abs();
        let rel_error = match kind {
            ErrorKind::Relative => diff / predicted.abs(),
            _ => diff,
        };
        Self {
            statistic,
            coordinate,
            predicted,
            empirical,
            rel_error,
            error_kind: kind,
            tolerance: None,
            pass: None,
        }
    }

    fn gate(mut self, tol: f64) -> Self {
        self.tolerance = Some(tol);
        self.pass = Some(self.rel_error.is_finite() && self.rel_error <= tol);
        self
    }
}

fn entry_kind(pred: Option<&Mat>, i: usize, j: usize) -> ErrorKind {
    match pred {
        Some(m) if i == j && m[(i, i)] > 1e-6 => ErrorKind::Relative,
        _ => ErrorKind::Absolute,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CltTolerances {
    /// Relative error on diagonal variances.
    pub diagonal: f64,
    /// Off-diagonal error as a fraction of the largest predicted diagonal.
    pub off_diagonal: f64,
    pub skewness: f64,
    pub excess_kurtosis: f64,
}

impl Default for CltTolerances {
    fn default() -> Self {
        Self {
            diagonal: 0.15,
            off_diagonal: 0.20,
            skewness: 0.15,
            excess_kurtosis: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CltTable {
    pub design: String,
    pub stage: u64,
    pub replications: u64,
    pub rows: Vec<ComparisonRow>,
}

impl CltTable {
    pub fn all_pass(&self) -> bool {
        self.rows.iter().all(|r| r.pass != Some(false))
    }

    pub fn find(&self, statistic: &str, coordinate: &str) -> Option<&ComparisonRow> {
        self.rows
            .iter()
            .find(|r| r.statistic == statistic && r.coordinate == coordinate)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("table is serializable")
    }

    pub fn render(&self) -> String {
        let mut out = format!(
            "{:<18} {:>6} {:>14} {:>14} {:>10}  {}\n",
            "statistic", "coord", "predicted", "empirical", "error", "gate"
        );
        for r in &self.rows {
            let gate = match (r.pass, r.tolerance) {
                (Some(true), Some(t)) => format!("ok (<= {t})"),
                (Some(false), Some(t)) => format!("FAIL (> {t})"),
                _ => String::new(),
            };
            out.push_str(&format!(
                "{:<18} {:>6} {:>14.6} {:>14.6} {:>10.4}  {}\n",
                r.statistic, r.coordinate, r.predicted, r.empirical, r.rel_error, gate
            ));
        }
        out
    }
}

/// Writes `statistic,coordinate,predicted,empirical,rel_error` rows.
pub fn write_comparison_csv<W: Write>(rows: &[ComparisonRow], mut w: W) -> io::Result<()> {
    w.write_all(b"statistic,coordinate,predicted,empirical,rel_error\n")?;
    for r in rows {
        writeln!(
            w,
            "{},\"{}\",{},{},{}",
            r.statistic,
            r.coordinate,
            csv_num(r.predicted),
            csv_num(r.empirical),
            csv_num(r.rel_error)
        )?;
    }
    Ok(())
}

fn csv_num(x: f64) -> String {
    if x.is_finite() {
        sig(x, 12)
    } else {
        String::new()
    }
}

/// Compares terminal-stage empirical covariances with `Lambda_sharp` (N),
/// natural-unit `Lambda_dagger` (Y) and `diag(sigma^2 / v)` (theta_hat), and
/// gates the first coordinate's skewness and excess kurtosis.
pub fn clt_check(
    stats: &EnsembleStats,
    report: &AsymptoticReport,
    tol: &CltTolerances,
) -> Result<CltTable> {
    if !report.clt_valid {
        return Err(SeuError::CltInvalid {
            lambda: report.lambda,
        });
    }
    if !stats.covariance_defined {
        return Err(SeuError::InvalidArgument(
            "at least two replications are needed for a covariance comparison".into(),
        ));
    }
    let cp = stats.terminal();
    let k = stats.k;
    let mut out = Vec::new();
    let blocks: [(&str, &BlockStats, Option<Mat>); 3] = [
        ("Lambda_sharp", &cp.n, report.lambda_sharp_matrix()),
        (
            "Lambda_dagger",
            &cp.y,
            report.lambda_dagger_natural_matrix(),
        ),
        ("theta_clt", &cp.theta_hat, Some(report.theta_clt_matrix())),
    ];
    for (name, block, pred) in blocks {
        let (Some(pred), Some(emp)) = (pred, block.covariance_matrix()) else {
            continue;
        };
        let scale = (0..k).map(|i| pred[(i, i)]).fold(0.0f64, f64::max);
        for i in 0..k {
            for j in 0..k {
                let coord = format!("{},{}", i + 1, j + 1);
                let row = if i == j && pred[(i, i)] > 1e-6 {
                    ComparisonRow::compare(
                        name.into(),
                        coord,
                        pred[(i, j)],
                        emp[(i, j)],
                        ErrorKind::Relative,
                    )
                    .gate(tol.diagonal)
                } else if scale > 1e-6 {
                    let mut r = ComparisonRow::compare(
                        name.into(),
                        coord,
                        pred[(i, j)],
                        emp[(i, j)],
                        ErrorKind::Scaled,
                    );
                    r.rel_error /= scale;
                    r.gate(tol.off_diagonal)
                } else {
                    ComparisonRow::compare(
                        name.into(),
                        coord,
                        pred[(i, j)],
                        emp[(i, j)],
                        ErrorKind::Absolute,
                    )
                };
                out.push(row);
            }
        }
    }
    for (name, block) in [("N", &cp.n), ("theta_hat", &cp.theta_hat)] {
        if let Some(s) = block.skewness.as_ref() {
            out.push(
                ComparisonRow::compare(
                    format!("skewness_{name}"),
                    "1".into(),
                    0.0,
                    s[0],
                    ErrorKind::Absolute,
                )
                .gate(tol.skewness),
            );
        }
        if let Some(s) = block.excess_kurtosis.as_ref() {
            out.push(
                ComparisonRow::compare(
                    format!("excess_kurtosis_{name}"),
                    "1".into(),
                    0.0,
                    s[0],
                    ErrorKind::Absolute,
                )
                .gate(tol.excess_kurtosis),
            );
        }
    }
    Ok(CltTable {
        design: stats.design.clone(),
        stage: cp.stage,
        replications: stats.replications,
        rows: out,
    })
}

#[derive(Debug, Clone)]
pub struct CompareEntry {
    pub label: String,
    pub design: Design,
    pub model: ResponseModel,
}

/// Simulation settings for the empirical column of a comparison.
#[derive(Debug, Clone, Copy)]
pub struct CompareSimulation {
    pub horizon: u64,
    pub replications: u64,
    pub master_seed: u64,
    pub threads: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub label: String,
    pub design: String,
    pub v: Vec<f64>,
    pub lambda: f64,
    pub clt_valid: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda_sharp_diag: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda_dagger_natural_diag: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub empirical_var_n: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareTable {
    pub theta: Vec<f64>,
    pub rows: Vec<CompareRow>,
    /// Classic play-the-winner reference variances of `(Y_1/n, N_1/n)`;
    /// present for two Bernoulli arms.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rpw_reference: Option<RpwReference>,
}

impl CompareTable {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("table is serializable")
    }

    fn rpw_cells(&self) -> (String, String) {
        match self.rpw_reference {
            Some(RpwReference::Values { var_y, var_n }) => (sig(var_y, 12), sig(var_n, 12)),
            Some(RpwReference::NotApplicable) => ("not-applicable".into(), "not-applicable".into()),
            None => (String::new(), String::new()),
        }
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        w.write_all(
            b"label,design,v,lambda,clt_valid,lambda_sharp_diag,lambda_dagger_natural_diag,empirical_var_n,rpw_reference_var_y,rpw_reference_var_n\n",
        )?;
        let (ry, rn) = self.rpw_cells();
        for r in &self.rows {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{},{}",
                r.label,
                r.design,
                join(&r.v),
                sig(r.lambda, 12),
                r.clt_valid,
                opt_join(&r.lambda_sharp_diag, "not-applicable"),
                opt_join(&r.lambda_dagger_natural_diag, "not-applicable"),
                opt_join(&r.empirical_var_n, ""),
                ry,
                rn
            )?;
        }
        Ok(())
    }

    pub fn render(&self) -> String {
        let mut out = format!(
            "{:<16} {:<12} {:<22} {:>9} {:<26} {:<22}\n",
            "label", "design", "v", "lambda", "Lambda_sharp diag", "empirical Var N"
        );
        let fmt = |v: &[f64]| {
            v.iter()
                .map(|x| format!("{x:.6}"))
                .collect::<Vec<_>>()
                .join(" ")
        };
        for r in &self.rows {
            out.push_str(&format!(
                "{:<16} {:<12} {:<22} {:>9.6} {:<26} {:<22}\n",
                r.label,
                r.design,
                fmt(&r.v),
                r.lambda,
                r.lambda_sharp_diag
                    .as_deref()
                    .map_or("not-applicable".into(), fmt),
                r.empirical_var_n.as_deref().map_or(String::new(), fmt),
            ));
        }
        let (ry, rn) = self.rpw_cells();
        if self.rpw_reference.is_some() {
            out.push_str(&format!(
                "classic RPW reference: Var Y1 = {ry}, Var N1 = {rn}\n"
            ));
        }
        out
    }
}

fn join(v: &[f64]) -> String {
    v.iter().map(|x| sig(*x, 12)).collect::<Vec<_>>().join(";")
}

fn opt_join(v: &Option<Vec<f64>>, missing: &str) -> String {
    v.as_deref().map_or(missing.to_string(), join)
}

/// Side-by-side limits and variances for designs sharing one response model.
pub fn compare_designs(
    entries: &[CompareEntry],
    opts: &ReportOptions,
    sim: Option<&CompareSimulation>,
) -> Result<CompareTable> {
    let first = entries
        .first()
        .ok_or_else(|| SeuError::InvalidArgument("nothing to compare".into()))?;
    if entries.iter().any(|e| e.model != first.model) {
        return Err(SeuError::InvalidConfig(
            "compared designs must share the response model".into(),
        ));
    }
    let mut rows_out = Vec::with_capacity(entries.len());
    for e in entries {
        let report = crate::asymptotics::full_report(&e.design, &e.model, opts)?;
        let diag = |m: Option<Mat>| m.map(|m| (0..m.nrows()).map(|i| m[(i, i)]).collect());
        let empirical_var_n = match sim {
            Some(s) => {
                let mut cfg = BatchConfig::new(
                    e.design.clone(),
                    e.model.clone(),
                    s.horizon,
                    s.replications,
                    s.master_seed,
                );
                cfg.threads = s.threads;
                let stats = run_batch(&cfg)?;
                diag(stats.terminal().n.covariance_matrix())
            }
            None => None,
        };
        rows_out.push(CompareRow {
            label: e.label.clone(),
            design: e.design.id().to_string(),
            v: report.v.clone(),
            lambda: report.lambda,
            clt_valid: report.clt_valid,
            lambda_sharp_diag: diag(report.lambda_sharp_matrix()),
            lambda_dagger_natural_diag: diag(report.lambda_dagger_natural_matrix()),
            empirical_var_n,
        });
    }
    let theta = first.model.theta();
    let rpw_reference = (first.model.is_bernoulli() && theta.len() == 2)
        .then(|| crate::asymptotics::rpw_reference_variances(theta[0], theta[1]));
    Ok(CompareTable {
        theta,
        rows: rows_out,
        rpw_reference,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::{rpw_target_design, target_design_from_expr};

    fn ex3(reps: u64, n: u64) -> BatchConfig {
        BatchConfig::new(
            rpw_target_design(),
            ResponseModel::bernoulli(&[0.7, 0.5]).unwrap(),
            n,
            reps,
            7,
        )
    }

    #[test]
    fn single_replication_flags_covariance() {
        let s = run_batch(&ex3(1, 50)).unwrap();
        assert!(!s.covariance_defined);
        assert!(s.terminal().n.covariance.is_none());
        let sum: f64 = s.terminal().n.mean.iter().sum();
        assert!((sum - 1.0).abs() < 1e-15);
    }

    #[test]
    fn thread_count_does_not_change_results() {
        let mut a = ex3(600, 100);
        a.checkpoints = vec![10, 50];
        let mut b = a.clone();
        a.threads = Some(1);
        b.threads = Some(4);
        assert_eq!(
            run_batch(&a).unwrap().to_json(),
            run_batch(&b).unwrap().to_json()
        );
    }

    #[test]
    fn config_validation() {
        let mut c = ex3(10, 100);
        c.checkpoints = vec![50, 20];
        assert!(run_batch(&c).is_err());
        c.checkpoints = vec![200];
        assert!(run_batch(&c).is_err());
        let c = ex3(0, 100);
        assert!(run_batch(&c).is_err());
    }

    #[test]
    fn short_series_is_unreliable() {
        let d = target_design_from_expr("1, 1").unwrap();
        let m = ResponseModel::bernoulli(&[0.5, 0.5]).unwrap();
        let mut rng = RngStream::new(1, 0);
        let t = run_trial(
            UrnState::with_composition(vec![1.0, 1.0]).unwrap(),
            &d,
            &m,
            10,
            &mut rng,
            &[1, 2, 5, 10],
        )
        .unwrap();
        let diag = lln_diagnostic(&t, &[0.5, 0.5]);
        assert_eq!(diag.stages, vec![1, 2, 5, 10]);
        assert!(!diag.reliable);
    }

    #[test]
    fn log_spacing() {
        let s = log_spaced_stages(100_000, 4);
        assert_eq!(s.first(), Some(&10));
        assert_eq!(s.last(), Some(&100_000));
        assert!(s.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(log_spaced_stages(5, 4), vec![1, 2, 3, 4, 5]);
    }

    #[test]
    fn csv_has_long_format_header() {
        let s = run_batch(&ex3(20, 50)).unwrap();
        let mut buf = Vec::new();
        write_comparison_csv(&s.rows(None), &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("statistic,coordinate,predicted,empirical,rel_error\n"));
        assert!(text.contains("mean_N@50,\"1\",0.625000000000,"));
    }
}
