//! The sequential estimation-adjusted urn process.
//!
//! Within a stage the order is fixed: draw an arm, sample that arm's response,
//! compute the addition from the estimates *before* this response, fold the
//! response into the estimates, add the particles, advance the stage. Every
//! stage consumes exactly two uniforms.

use std::io::{self, Write};

use serde::{Deserialize, Serialize};

use crate::design::Design;
use crate::error::{invalid, Result, SeuError};
use crate::format::sig;
use crate::model::ResponseModel;
use crate::rng::RngStream;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UrnState {
    /// Particle mass per type.
    pub y: Vec<f64>,
    /// Patients assigned per arm.
    pub n: Vec<u64>,
    /// Per-arm response sums.
    pub s: Vec<f64>,
    pub stage: u64,
    /// `(1 + S_k) / (1 + N_k)`.
    pub theta_hat: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub stage: u64,
    /// Zero-based arm index.
    pub drawn_arm: usize,
    pub response: f64,
    pub addition: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub stage: u64,
    pub y: Vec<f64>,
    pub n: Vec<u64>,
    pub theta_hat: Vec<f64>,
}

pub type Trajectory = Vec<Snapshot>;

/// Fresh urn with `initial_mass` particles of each of `k` types.
pub fn init_state(k: usize, initial_mass: f64) -> Result<UrnState> {
    if k < 2 {
        return Err(invalid(format!("need at least two arms, got {k}")));
    }
    UrnState::with_composition(vec![initial_mass; k])
}

impl UrnState {
    /// Fresh urn with an arbitrary strictly positive initial composition.
    pub fn with_composition(y0: Vec<f64>) -> Result<Self> {
        if y0.len() < 2 {
            return Err(invalid("need at least two arms"));
        }
        if let Some(bad) = y0.iter().find(|v| !(**v > 0.0) || !v.is_finite()) {
            return Err(invalid(format!("initial mass {bad} must be positive")));
        }
        let k = y0.len();
        Ok(Self {
            y: y0,
            n: vec![0; k],
            s: vec![0.0; k],
            stage: 0,
            theta_hat: vec![1.0; k],
        })
    }

    pub fn k(&self) -> usize {
        self.y.len()
    }

    /// Draws a particle type with probability `Y_k / sum(Y)` from one uniform.
    pub fn draw_arm(&self, rng: &mut RngStream) -> Result<usize> {
        if let Some((k, v)) = self.y.iter().enumerate().find(|(_, v)| !(**v > 0.0)) {
            return Err(SeuError::CorruptedState(format!(
                "mass of type {} is {v}",
                k + 1
            )));
        }
        let total: f64 = self.y.iter().sum();
        let target = rng.uniform() * total;
        let mut acc = 0.0;
        for (k, v) in self.y.iter().enumerate() {
            acc += v;
            if target < acc {
                return Ok(k);
            }
        }
        Ok(self.k() - 1)
    }

    /// Folds response `xi` on arm `k` into the counts and estimates.
    pub fn update_estimates(&mut self, k: usize, xi: f64) -> Result<()> {
        if k >= self.k() {
            return Err(invalid(format!("arm index {k} out of range")));
        }
        self.n[k] += 1;
        self.s[k] += xi;
        self.theta_hat[k] = (1.0 + self.s[k]) / (1.0 + self.n[k] as f64);
        Ok(())
    }

    /// Adds particles and advances the stage counter.
    pub fn apply_addition(&mut self, addition: &[f64]) -> Result<()> {
        if addition.len() != self.k() {
            return Err(invalid("addition length does not match arm count"));
        }
        if let Some(bad) = addition.iter().find(|a| !(**a >= 0.0) || !a.is_finite()) {
            return Err(invalid(format!("negative or non-finite addition {bad}")));
        }
        for (y, a) in self.y.iter_mut().zip(addition) {
            *y += a;
        }
        self.stage += 1;
        Ok(())
    }

    /// One patient: draw, respond, adapt.
    pub fn step(
        &mut self,
        design: &Design,
        model: &ResponseModel,
        rng: &mut RngStream,
    ) -> Result<StepRecord> {
        if design.k() != self.k() || model.k() != self.k() {
            return Err(invalid(format!(
                "arm counts disagree: state {}, design {}, model {}",
                self.k(),
                design.k(),
                model.k()
            )));
        }
        let arm = self.draw_arm(rng)?;
        let xi = model.sample(arm, rng.uniform());
        let addition = design.addition(&self.theta_hat, arm, xi)?;
        self.update_estimates(arm, xi)?;
        self.apply_addition(&addition)?;
        Ok(StepRecord {
            stage: self.stage,
            drawn_arm: arm,
            response: xi,
            addition,
        })
    }

    pub fn snapshot(&self) -> Snapshot {
        Snapshot {
            stage: self.stage,
            y: self.y.clone(),
            n: self.n.clone(),
            theta_hat: self.theta_hat.clone(),
        }
    }
}

/// Runs `horizon` stages from `start`, recording snapshots at the requested
/// checkpoints and at the terminal stage.
pub fn run_trial(
    start: UrnState,
    design: &Design,
    model: &ResponseModel,
    horizon: u64,
    rng: &mut RngStream,
    checkpoints: &[u64],
) -> Result<Trajectory> {
    let mut marks: Vec<u64> = checkpoints
        .iter()
        .map(|&c| c + start.stage)
        .filter(|&c| c <= start.stage + horizon)
        .collect();
    marks.push(start.stage + horizon);
    marks.sort_unstable();
    marks.dedup();

    let mut state = start;
    let mut out = Vec::with_capacity(marks.len());
    let mut next = marks.iter().peekable();
    while next.peek() == Some(&&state.stage) {
        out.push(state.snapshot());
        next.next();
    }
    while let Some(&&mark) = next.peek() {
        while state.stage < mark {
            state.step(design, model, rng)?;
        }
        out.push(state.snapshot());
        next.next();
    }
    Ok(out)
}

/// Writes `stage,arm,Y,N,theta_hat`, one row per arm per snapshot, arms 1-based.
pub fn write_trajectory_csv<W: Write>(trajectory: &[Snapshot], mut w: W) -> io::Result<()> {
    w.write_all(b"stage,arm,Y,N,theta_hat\n")?;
    for snap in trajectory {
        for k in 0..snap.y.len() {
            writeln!(
                w,
                "{},{},{},{},{}",
                snap.stage,
                k + 1,
                sig(snap.y[k], 12),
                snap.n[k],
                sig(snap.theta_hat[k], 12)
            )?;
        }
    }
    Ok(())
}
