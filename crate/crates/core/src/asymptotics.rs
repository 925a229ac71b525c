//! Limiting proportions, spectral gap, and the asymptotic covariance matrices
//! of `Y_n` and `N_n` (plus the estimator CLT) for an urn design.
//!
//! The covariance integrals are evaluated after the substitution `x = e^{-t}`:
//! `(1/x)^Hbar` becomes `e^{t Hbar}` and the nested inner integrals become the
//! first and second running integrals of `e^{s Hbar}`. All three, already
//! multiplied by the weight `e^{-t/2}`, are read off a single exponential of the
//! block matrix
//!
//! ```text
//! [ Hbar - I/2   I      0   ]
//! [    0       -I/2     I   ] * t
//! [    0         0    -I/2  ]
//! ```
//!
//! so the integrand stays bounded by `e^{(2 lambda - 1) t} poly(t)` and never
//! overflows even as `lambda` approaches 1/2.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::design::{Design, DesignId};
use crate::error::{Result, SeuError};
use crate::linalg::{self, centering, diag, multinomial_cov, ones_v, rows, Mat};
use crate::model::ResponseModel;
use crate::quadrature::{integrate, QuadOptions};
use crate::rng::{RngStream, SIGMA_EXPECTATION_STREAM};
use crate::validate::{validate_design, ValidationReport};

const ROW_SUM_TOL: f64 = 1e-8;
const POWER_TOL: f64 = 1e-12;
const EIGEN_RESIDUAL_TOL: f64 = 1e-10;
const CLUSTER_RADIUS: f64 = 1e-8;

/// Left eigenvector `v` (summing to 1) of `H` for its row-sum eigenvalue `gamma`.
pub fn stationary_proportion(h: &Mat) -> Result<(Vec<f64>, f64)> {
    let k = h.nrows();
    if k < 2 || h.ncols() != k {
        return Err(SeuError::InvalidArgument(
            "H must be square with K >= 2".into(),
        ));
    }
    if h.iter().any(|x| !(*x >= 0.0) || !x.is_finite()) {
        return Err(SeuError::AssumptionViolation(
            "generating matrix has negative or non-finite entries".into(),
        ));
    }
    let sums: Vec<f64> = (0..k).map(|i| h.row(i).sum()).collect();
    let gamma = sums.iter().sum::<f64>() / k as f64;
    if !(gamma > 0.0) {
        return Err(SeuError::AssumptionViolation(format!(
            "row sum gamma = {gamma} must be positive"
        )));
    }
    let spread = sums.iter().fold(0.0f64, |m, s| m.max((s - gamma).abs()));
    if spread > ROW_SUM_TOL * gamma.max(1.0) {
        return Err(SeuError::AssumptionViolation(format!(
            "row sums of H differ by up to {spread:.3e}"
        )));
    }
    let p = h / gamma;

    let near_one = linalg::eigenvalues(&p)
        .iter()
        .filter(|z| (*z - nalgebra::Complex::new(1.0, 0.0)).norm() < CLUSTER_RADIUS)
        .count();
    if near_one > 1 {
        return Err(SeuError::AssumptionViolation(format!(
            "principal eigenvalue is not simple ({near_one} eigenvalues at gamma); defective or reducible H"
        )));
    }

    // Lazy power iteration v <- v (I + P) / 2 avoids periodic oscillation.
    let lazy = (DMatrix::identity(k, k) + &p) * 0.5;
    let mut v = DMatrix::from_element(1, k, 1.0 / k as f64);
    let mut converged = false;
    for _ in 0..200_000 {
        let mut next = &v * &lazy;
        let total = next.sum();
        next /= total;
        let change = (&next - &v).abs().sum();
        v = next;
        if change < POWER_TOL {
            converged = true;
            break;
        }
    }
    let mut v: Vec<f64> = v.iter().copied().collect();
    if !converged || eigen_residual(&p, &v) > EIGEN_RESIDUAL_TOL / gamma.max(1.0) {
        v = solve_stationary(&p)?;
    }
    for x in v.iter_mut() {
        if *x < 0.0 && *x > -1e-14 {
            *x = 0.0;
        }
    }
    let res = eigen_residual(h, &v) / gamma.max(1.0);
    if res > EIGEN_RESIDUAL_TOL || v.iter().any(|x| *x < 0.0) {
        return Err(SeuError::NumericalFailure(format!(
            "left eigenvector residual {res:.3e} or negative component"
        )));
    }
    Ok((v, gamma))
}

fn eigen_residual(h: &Mat, v: &[f64]) -> f64 {
    let row = DMatrix::from_row_slice(1, v.len(), v);
    let gamma = h.row(0).sum();
    linalg::max_abs(&(&row * h - &row * gamma))
}

// v (P - I) = 0 with sum(v) = 1 replacing the last equation.
fn solve_stationary(p: &Mat) -> Result<Vec<f64>> {
    let k = p.nrows();
    let mut a = p.transpose() - DMatrix::identity(k, k);
    let mut b = nalgebra::DVector::zeros(k);
    for j in 0..k {
        a[(k - 1, j)] = 1.0;
    }
    b[k - 1] = 1.0;
    let sol = a.lu().solve(&b).ok_or_else(|| {
        SeuError::NumericalFailure("singular system for the stationary proportion".into())
    })?;
    Ok(sol.iter().copied().collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spectrum {
    /// Largest real part among the non-principal eigenvalues of `H / gamma`.
    pub lambda: f64,
    /// A repeated eigenvalue sits at `lambda`; the Jordan block may be non-trivial.
    pub defective_warning: bool,
}

pub fn spectral_gap(h: &Mat, gamma: f64) -> Spectrum {
    let mut eig = linalg::eigenvalues(&(h / gamma));
    let one = nalgebra::Complex::new(1.0, 0.0);
    let principal = eig
        .iter()
        .enumerate()
        .min_by(|a, b| (*a.1 - one).norm().total_cmp(&(*b.1 - one).norm()))
        .map(|(i, _)| i)
        .expect("non-empty spectrum");
    eig.remove(principal);
    let lambda = eig.iter().map(|z| z.re).fold(f64::NEG_INFINITY, f64::max);
    let at_gap: Vec<_> = eig
        .iter()
        .filter(|z| (z.re - lambda).abs() < CLUSTER_RADIUS)
        .collect();
    let mut defective_warning = false;
    for i in 0..at_gap.len() {
        for j in i + 1..at_gap.len() {
            if (*at_gap[i] - *at_gap[j]).norm() < CLUSTER_RADIUS {
                defective_warning = true;
            }
        }
    }
    Spectrum {
        lambda,
        defective_warning,
    }
}

/// `H / gamma - 1' v`.
pub fn centered_generator(h: &Mat, gamma: f64, v: &[f64]) -> Mat {
    h / gamma - ones_v(v)
}

#[derive(Debug, Clone, Copy)]
pub struct SigmaOptions {
    /// Sample size for the Monte Carlo expectation over continuous responses.
    pub mc_samples: Option<usize>,
    pub master_seed: u64,
}

impl Default for SigmaOptions {
    fn default() -> Self {
        Self {
            mc_samples: Some(1_000_000),
            master_seed: 0,
        }
    }
}

/// The four covariance ingredients, in the design's natural units.
#[derive(Debug, Clone, PartialEq)]
pub struct SigmaSet {
    /// `diag(v) - v'v`
    pub sigma1: Mat,
    /// `E[(D - H)' diag(v) (D - H)]`
    pub sigma2: Mat,
    /// `diag(v_k sigma_k^2)`
    pub sigma3: Mat,
    /// `E[(D - H)' diag(v) diag(xi - theta)]`
    pub sigma23: Mat,
    /// Largest Monte Carlo standard error over the sampled entries, if any arm
    /// has a continuous response.
    pub mc_standard_error: Option<f64>,
}

/// Builds `Sigma1..Sigma23` at the true parameter. Row `k` of `D` depends only
/// on arm `k`'s response, so the expectation factorizes per arm: finite
/// supports are summed exactly, continuous arms are sampled.
pub fn sigma_matrices(
    design: &Design,
    model: &ResponseModel,
    v: &[f64],
    opts: &SigmaOptions,
) -> Result<SigmaSet> {
    let k = design.k();
    if model.k() != k || v.len() != k {
        return Err(SeuError::InvalidArgument("arm counts disagree".into()));
    }
    let theta = model.theta();
    let sigma2_resp = model.sigma2();
    let h = design.generating_matrix(&theta, &theta)?;
    let mut sigma2 = DMatrix::zeros(k, k);
    let mut sigma23 = DMatrix::zeros(k, k);
    let mut worst_se: Option<f64> = None;

    for arm in 0..k {
        let h_row: Vec<f64> = h.row(arm).iter().copied().collect();
        let dist = &model.arms()[arm];
        match dist.outcomes() {
            Some(outcomes) => {
                for (xi, p) in outcomes {
                    let d = design.addition(&theta, arm, xi)?;
                    accumulate(
                        &mut sigma2,
                        &mut sigma23,
                        arm,
                        v[arm] * p,
                        &d,
                        &h_row,
                        xi - theta[arm],
                    );
                }
            }
            None => {
                let samples = opts.mc_samples.ok_or_else(|| {
                    SeuError::InvalidConfig(
                        "continuous responses need an expectation sample size".into(),
                    )
                })?;
                if samples < 2 {
                    return Err(SeuError::InvalidConfig(
                        "expectation sample size must be at least 2".into(),
                    ));
                }
                let mut rng =
                    RngStream::new(opts.master_seed, SIGMA_EXPECTATION_STREAM - arm as u64);
                let mut s2 = DMatrix::zeros(k, k);
                let mut s23 = DMatrix::zeros(k, k);
                let mut sq2 = DMatrix::<f64>::zeros(k, k);
                let w = 1.0 / samples as f64;
                for _ in 0..samples {
                    let xi = dist.sample(rng.uniform());
                    let d = design.addition(&theta, arm, xi)?;
                    let mut one2 = DMatrix::zeros(k, k);
                    let mut one23 = DMatrix::zeros(k, k);
                    accumulate(
                        &mut one2,
                        &mut one23,
                        arm,
                        v[arm],
                        &d,
                        &h_row,
                        xi - theta[arm],
                    );
                    sq2 += one2.component_mul(&one2);
                    s2 += one2 * w;
                    s23 += one23 * w;
                }
                let n = samples as f64;
                let se = (0..k * k)
                    .map(|i| ((sq2[i] / n - s2[i] * s2[i]).max(0.0) / n).sqrt())
                    .fold(0.0f64, f64::max);
                worst_se = Some(worst_se.map_or(se, |s| s.max(se)));
                sigma2 += s2;
                sigma23 += s23;
            }
        }
    }

    let vs: Vec<f64> = v.iter().zip(&sigma2_resp).map(|(a, b)| a * b).collect();
    Ok(SigmaSet {
        sigma1: multinomial_cov(v),
        sigma2: linalg::symmetrize(&sigma2),
        sigma3: diag(&vs),
        sigma23,
        mc_standard_error: worst_se,
    })
}

fn accumulate(
    sigma2: &mut Mat,
    sigma23: &mut Mat,
    arm: usize,
    weight: f64,
    d: &[f64],
    h_row: &[f64],
    centred_xi: f64,
) {
    let k = d.len();
    for i in 0..k {
        let di = d[i] - h_row[i];
        for j in 0..k {
            sigma2[(i, j)] += weight * di * (d[j] - h_row[j]);
        }
        sigma23[(i, arm)] += weight * di * centred_xi;
    }
}

/// Sensitivity matrix with row `k` equal to `v dH/dx_k / v_k` at `theta`.
pub fn f_matrix(design: &Design, v: &[f64], theta: &[f64]) -> Result<Mat> {
    f_matrix_with_jacobian(design, v, theta).map(|(f, _)| f)
}

fn f_matrix_with_jacobian(
    design: &Design,
    v: &[f64],
    theta: &[f64],
) -> Result<(Mat, crate::design::HJacobian)> {
    let k = design.k();
    if let Some((i, x)) = v.iter().enumerate().find(|(_, x)| !(**x > 0.0)) {
        return Err(SeuError::AssumptionViolation(format!(
            "limiting proportion v_{} = {x} must be positive",
            i + 1
        )));
    }
    let jac = design.h_jacobian(theta, theta)?;
    let row = DMatrix::from_row_slice(1, k, v);
    let mut f = DMatrix::zeros(k, k);
    for (m, dh) in jac.partials.iter().enumerate() {
        let fk = &row * dh;
        for j in 0..k {
            f[(m, j)] = fk[(0, j)] / v[m];
        }
    }
    Ok((f, jac))
}

#[derive(Debug, Clone, Copy)]
pub struct IntegralOptions {
    pub quad: QuadOptions,
    /// Integrand max-norm allowed at the truncation point.
    pub tail_tol: f64,
    /// Use `F' Sigma23 F` in the mixed N-term instead of `Sigma23 F`.
    pub literal_sharp23: bool,
}

impl Default for IntegralOptions {
    fn default() -> Self {
        Self {
            quad: QuadOptions::default(),
            tail_tol: 1e-12,
            literal_sharp23: false,
        }
    }
}

/// The individual matrix integrals, in `gamma`-normalized units.
#[derive(Debug, Clone)]
pub struct LambdaParts {
    pub dagger1: Mat,
    pub dagger2: Mat,
    pub dagger3: Mat,
    pub dagger23: Mat,
    pub sharp2: Mat,
    pub sharp3: Mat,
    pub sharp23: Mat,
    pub horizon: f64,
    pub error_estimate: f64,
    pub intervals: usize,
    pub evaluations: usize,
}

const PARTS: usize = 7;

/// Evaluates every covariance integral in one adaptive pass over `t`.
///
/// `f` and `sigmas` are in natural units; `hbar` is already normalized.
pub fn lambda_parts(
    hbar: &Mat,
    f: &Mat,
    sigmas: &SigmaSet,
    gamma: f64,
    opts: &IntegralOptions,
) -> Result<LambdaParts> {
    let k = hbar.nrows();
    let growth = linalg::eigenvalues(hbar)
        .iter()
        .map(|z| z.re)
        .fold(0.0f64, f64::max);
    if growth >= 0.5 {
        return Err(SeuError::CltInvalid { lambda: growth });
    }
    let fn_ = f / gamma;
    let s1 = &sigmas.sigma1;
    let s2 = &sigmas.sigma2 / (gamma * gamma);
    let s23 = &sigmas.sigma23 / gamma;
    let fs3f = fn_.transpose() * &sigmas.sigma3 * &fn_;
    let s23f = &s23 * &fn_;
    let mixed_sharp = if opts.literal_sharp23 {
        fn_.transpose() * &s23 * &fn_
    } else {
        s23f.clone()
    };

    let mut gen = DMatrix::zeros(3 * k, 3 * k);
    for i in 0..k {
        for j in 0..k {
            gen[(i, j)] = hbar[(i, j)];
        }
        gen[(i, i)] -= 0.5;
        gen[(k + i, k + i)] = -0.5;
        gen[(2 * k + i, 2 * k + i)] = -0.5;
        gen[(i, k + i)] = 1.0;
        gen[(k + i, 2 * k + i)] = 1.0;
    }

    let integrand = |t: f64| -> Vec<f64> {
        let e = (&gen * t).exp();
        let a = e.view((0, 0), (k, k)).into_owned();
        let p1 = e.view((0, k), (k, k)).into_owned();
        let p2 = e.view((0, 2 * k), (k, k)).into_owned();
        let at = a.transpose();
        let p1t = p1.transpose();
        let terms = [
            &at * s1 * &a,
            &at * &s2 * &a,
            &p1t * &fs3f * &p1,
            &at * &s23f * &p1,
            &p1t * &s2 * &p1,
            p2.transpose() * &fs3f * &p2,
            &p1t * &mixed_sharp * &p2,
        ];
        let mut out = Vec::with_capacity(PARTS * k * k);
        for m in &terms {
            out.extend(m.iter().copied());
        }
        out
    };

    let rate = 1.0 - 2.0 * growth;
    let mut horizon = (40.0 + 8.0 * (1.0 + 2.0 * k as f64).ln()) / rate;
    let scale = [s1, &s2, &fs3f, &s23f]
        .iter()
        .map(|m| linalg::max_abs(m))
        .fold(1.0f64, f64::max);
    let mut extended = 0;
    while integrand(horizon)
        .iter()
        .fold(0.0f64, |m, v| m.max(v.abs()))
        > opts.tail_tol * scale
    {
        extended += 1;
        if extended > 12 {
            return Err(SeuError::NumericalFailure(format!(
                "integrand tail does not decay below {:.1e} by t = {horizon:.1}",
                opts.tail_tol
            )));
        }
        horizon *= 1.5;
    }

    let mut quad = opts.quad;
    quad.initial_pieces = quad.initial_pieces.max((horizon / 4.0).ceil() as usize);
    let res = integrate(integrand, 0.0, horizon, quad)?;
    let take =
        |idx: usize| DMatrix::from_column_slice(k, k, &res.value[idx * k * k..(idx + 1) * k * k]);
    Ok(LambdaParts {
        dagger1: linalg::symmetrize(&take(0)),
        dagger2: linalg::symmetrize(&take(1)),
        dagger3: linalg::symmetrize(&take(2)),
        dagger23: take(3),
        sharp2: linalg::symmetrize(&take(4)),
        sharp3: linalg::symmetrize(&take(5)),
        sharp23: take(6),
        horizon,
        error_estimate: res.error,
        intervals: res.intervals,
        evaluations: res.evaluations,
    })
}

impl LambdaParts {
    /// Covariance of `sqrt(n) (Y_n / (n gamma) - v)`.
    pub fn lambda_dagger(&self, hbar: &Mat, v: &[f64]) -> Mat {
        let hn = hbar + ones_v(v);
        let m = hn.transpose() * &self.dagger1 * &hn
            + &self.dagger2
            + &self.dagger3
            + &self.dagger23
            + self.dagger23.transpose();
        linalg::symmetrize(&m)
    }

    /// Covariance of `sqrt(n) (N_n / n - v)`.
    pub fn lambda_sharp(&self, v: &[f64]) -> Mat {
        let c = centering(v);
        let ct = c.transpose();
        let inner = &self.sharp3 + &self.sharp23 + self.sharp23.transpose();
        let m = &self.dagger1 + &c * &self.sharp2 * &ct + &c * inner * &ct;
        linalg::symmetrize(&m)
    }
}

/// Covariance of `sqrt(n) (Y_n / (n gamma) - v)` by quadrature.
pub fn lambda_dagger(
    hbar: &Mat,
    v: &[f64],
    f: &Mat,
    sigmas: &SigmaSet,
    gamma: f64,
    opts: &IntegralOptions,
) -> Result<Mat> {
    Ok(lambda_parts(hbar, f, sigmas, gamma, opts)?.lambda_dagger(hbar, v))
}

/// Covariance of `sqrt(n) (N_n / n - v)` by quadrature.
pub fn lambda_sharp(
    hbar: &Mat,
    v: &[f64],
    f: &Mat,
    sigmas: &SigmaSet,
    gamma: f64,
    opts: &IntegralOptions,
) -> Result<Mat> {
    Ok(lambda_parts(hbar, f, sigmas, gamma, opts)?.lambda_sharp(v))
}

/// Closed-form covariances for designs adding `rho(theta_hat)` at every stage.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetVariances {
    pub gamma: f64,
    pub v: Vec<f64>,
    /// `(d rho)' I^{-1} (d rho)` with `I^{-1} = diag(sigma_k^2 / v_k)`.
    pub sigma_rho: Mat,
    /// Same with `v(x) = rho(x) / sum rho(x)`.
    pub sigma_v: Mat,
    /// `2 Sigma_rho`: covariance of `sqrt(n) (Y_n / n - rho(theta))`.
    pub lambda_dagger_natural: Mat,
    /// `2 Sigma_rho / gamma^2`: covariance of `sqrt(n) (Y_n / (n gamma) - v)`.
    pub lambda_dagger: Mat,
    /// `diag(v) - v'v + 6 Sigma_v`.
    pub lambda_sharp: Mat,
}

/// Closed forms from `rho(theta)`, its Jacobian `[i][j] = d rho_j / d x_i`, and
/// the response variances.
pub fn corollary32_variances(
    rho: &[f64],
    jacobian: &[Vec<f64>],
    sigma2: &[f64],
) -> Result<TargetVariances> {
    let k = rho.len();
    if let Some((j, r)) = rho.iter().enumerate().find(|(_, r)| !(**r > 0.0)) {
        return Err(SeuError::DesignDomain(format!(
            "rho_{}(theta) = {r} must be positive",
            j + 1
        )));
    }
    let gamma: f64 = rho.iter().sum();
    let v: Vec<f64> = rho.iter().map(|r| r / gamma).collect();
    let info_inv = diag(&v.iter().zip(sigma2).map(|(v, s)| s / v).collect::<Vec<_>>());
    let j_rho = DMatrix::from_fn(k, k, |i, j| jacobian[i][j]);
    let j_v = DMatrix::from_fn(k, k, |i, j| {
        let row_sum: f64 = jacobian[i].iter().sum();
        (jacobian[i][j] * gamma - rho[j] * row_sum) / (gamma * gamma)
    });
    let sigma_rho = linalg::symmetrize(&(j_rho.transpose() * &info_inv * &j_rho));
    let sigma_v = linalg::symmetrize(&(j_v.transpose() * &info_inv * &j_v));
    Ok(TargetVariances {
        gamma,
        lambda_dagger_natural: &sigma_rho * 2.0,
        lambda_dagger: &sigma_rho * (2.0 / (gamma * gamma)),
        lambda_sharp: multinomial_cov(&v) + &sigma_v * 6.0,
        v,
        sigma_rho,
        sigma_v,
    })
}

/// Closed forms for a target-form design, or `None` for other rules.
pub fn corollary32_for_design(
    design: &Design,
    model: &ResponseModel,
) -> Option<Result<TargetVariances>> {
    let theta = model.theta();
    let rho = match design.target_value(&theta)? {
        Ok(r) => r,
        Err(e) => return Some(Err(e)),
    };
    let jac = match design.target_jacobian(&theta)? {
        Ok((j, _)) => j,
        Err(e) => return Some(Err(e)),
    };
    Some(corollary32_variances(&rho, &jac, &model.sigma2()))
}

/// `diag(sigma_k^2 / v_k)`: covariance of `sqrt(n) (theta_hat_n - theta)`.
pub fn theta_clt_variance(model: &ResponseModel, v: &[f64]) -> Result<Mat> {
    if let Some((i, x)) = v.iter().enumerate().find(|(_, x)| !(**x > 0.0)) {
        return Err(SeuError::AssumptionViolation(format!(
            "v_{} = {x} must be positive",
            i + 1
        )));
    }
    let d: Vec<f64> = model.sigma2().iter().zip(v).map(|(s, v)| s / v).collect();
    Ok(diag(&d))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "kebab-case")]
pub enum RpwReference {
    Values {
        var_y: f64,
        var_n: f64,
    },
    /// `q1 + q2 <= 1/2`: no normal limit is known for the classic rule.
    NotApplicable,
}

/// Known asymptotic variances of `Y_{n,1}/n` and `N_{n,1}/n` under the classic
/// randomized play-the-winner rule.
pub fn rpw_reference_variances(p1: f64, p2: f64) -> RpwReference {
    let (q1, q2) = (1.0 - p1, 1.0 - p2);
    let s = q1 + q2;
    if s <= 0.5 {
        return RpwReference::NotApplicable;
    }
    let denom = (2.0 * s - 1.0) * s * s;
    RpwReference::Values {
        var_y: q1 * q2 / denom,
        var_n: q1 * q2 * (1.0 + 2.0 * (p1 + p2)) / denom,
    }
}

/// Published closed forms for the design targeting `q2 / (q1 + q2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RpwTargetClosedForm {
    pub v: [f64; 2],
    /// Scalar of `Sigma_rho = Sigma_v = s (1,-1)'(1,-1)`.
    pub sigma_scalar: f64,
    /// Variance of `sqrt(n) (Y_{n,1}/n - v_1)`.
    pub sigma_dagger2: f64,
    /// Variance of `sqrt(n) (N_{n,1}/n - v_1)`.
    pub sigma_sharp2: f64,
}

pub fn example3_closed_form(p1: f64, p2: f64) -> RpwTargetClosedForm {
    let (q1, q2) = (1.0 - p1, 1.0 - p2);
    let s = q1 + q2;
    let cube = s * s * s;
    RpwTargetClosedForm {
        v: [q2 / s, q1 / s],
        sigma_scalar: q1 * q2 * (p1 + p2) / cube,
        sigma_dagger2: 2.0 * q1 * q2 * (p1 + p2) / cube,
        sigma_sharp2: q1 * q2 * (2.0 + 5.0 * (p1 + p2)) / cube,
    }
}

/// Published closed forms for the design targeting `sqrt(p1) : sqrt(p2)`.
///
/// `sigma_rho_printed` and `lambda_dagger_printed` reproduce the printed
/// `diag(q_k sqrt(p_k) / (4 S))` and twice that, which weight the estimator
/// variance by `v_k` instead of dividing by it. They disagree with
/// [`corollary32_variances`] (and with simulation); `sigma_v_scalar` and
/// `sigma_sharp2` are consistent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimalAllocationClosedForm {
    pub v: [f64; 2],
    pub sigma_rho_printed: [f64; 2],
    pub lambda_dagger_printed: [f64; 2],
    pub sigma_v_scalar: f64,
    pub sigma_sharp2: f64,
}

pub fn example2_closed_form(p1: f64, p2: f64) -> OptimalAllocationClosedForm {
    let (q1, q2) = (1.0 - p1, 1.0 - p2);
    let (r1, r2) = (p1.sqrt(), p2.sqrt());
    let s = r1 + r2;
    let bracket = p2 * q1 / r1 + p1 * q2 / r2;
    OptimalAllocationClosedForm {
        v: [r1 / s, r2 / s],
        sigma_rho_printed: [q1 * r1 / (4.0 * s), q2 * r2 / (4.0 * s)],
        lambda_dagger_printed: [q1 * r1 / (2.0 * s), q2 * r2 / (2.0 * s)],
        sigma_v_scalar: bracket / (4.0 * s * s * s),
        sigma_sharp2: (p1 * p2).sqrt() / (s * s) + 3.0 / (2.0 * s * s * s) * bracket,
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ReportOptions {
    pub sigma: SigmaOptions,
    pub integrals: IntegralOptions,
}

pub type Rows = Vec<Vec<f64>>;

/// Published two-arm closed forms, kept verbatim next to the computed values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "design", rename_all = "kebab-case")]
pub enum PrintedClosedForm {
    OptAlloc(OptimalAllocationClosedForm),
    RpwTarget(RpwTargetClosedForm),
}

/// Printed closed form for the bespoke two-arm Bernoulli designs.
pub fn printed_closed_form(design: &Design, model: &ResponseModel) -> Option<PrintedClosedForm> {
    if design.k() != 2 || !model.is_bernoulli() {
        return None;
    }
    let t = model.theta();
    match design.id() {
        DesignId::OptAlloc => Some(PrintedClosedForm::OptAlloc(example2_closed_form(
            t[0], t[1],
        ))),
        DesignId::RpwTarget => Some(PrintedClosedForm::RpwTarget(example3_closed_form(
            t[0], t[1],
        ))),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClosedFormBlock {
    pub lambda_dagger: Rows,
    pub lambda_dagger_natural: Rows,
    pub lambda_sharp: Rows,
    pub sigma_rho: Rows,
    pub sigma_v: Rows,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Discrepancy {
    /// Max-norm relative difference, quadrature vs closed form.
    pub lambda_dagger: f64,
    pub lambda_sharp: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadratureDiagnostics {
    pub horizon: f64,
    pub error_estimate: f64,
    pub intervals: usize,
    pub evaluations: usize,
    /// Max-norm of `(Hbar' - I/2) L1 + L1 (Hbar - I/2) + Sigma1`.
    pub lyapunov_residual: f64,
}

/// Everything the limit theorems predict for one design and response model.
///
/// `lambda_dagger` is the covariance of `sqrt(n)(Y_n/(n gamma) - v)`;
/// `lambda_dagger_natural` is that of `sqrt(n)(Y_n/n - gamma v)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AsymptoticReport {
    pub design: String,
    pub theta: Vec<f64>,
    pub response_variance: Vec<f64>,
    pub v: Vec<f64>,
    pub gamma: f64,
    pub y_limit: Vec<f64>,
    pub lambda: f64,
    pub lln_valid: bool,
    pub clt_valid: bool,
    pub defective_warning: bool,
    #[serde(rename = "F")]
    pub f: Rows,
    pub jacobian: String,
    pub sigma1: Rows,
    pub sigma2: Rows,
    pub sigma3: Rows,
    pub sigma23: Rows,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_mc_standard_error: Option<f64>,
    pub theta_clt: Rows,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda_dagger: Option<Rows>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda_dagger_natural: Option<Rows>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda_sharp: Option<Rows>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub method: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub closed_form: Option<ClosedFormBlock>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub closed_form_printed: Option<PrintedClosedForm>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub discrepancy: Option<Discrepancy>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quadrature: Option<QuadratureDiagnostics>,
    pub validation: ValidationReport,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

impl AsymptoticReport {
    pub fn lambda_sharp_matrix(&self) -> Option<Mat> {
        self.lambda_sharp.as_deref().map(linalg::from_rows)
    }

    pub fn lambda_dagger_matrix(&self) -> Option<Mat> {
        self.lambda_dagger.as_deref().map(linalg::from_rows)
    }

    pub fn lambda_dagger_natural_matrix(&self) -> Option<Mat> {
        self.lambda_dagger_natural.as_deref().map(linalg::from_rows)
    }

    pub fn theta_clt_matrix(&self) -> Mat {
        linalg::from_rows(&self.theta_clt)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report is serializable")
    }
}

/// Runs the full pipeline: validation, `v`, `lambda`, the Sigma matrices, `F`,
/// quadrature covariances, and the closed forms when the design has target form.
pub fn full_report(
    design: &Design,
    model: &ResponseModel,
    opts: &ReportOptions,
) -> Result<AsymptoticReport> {
    if design.k() != model.k() {
        return Err(SeuError::InvalidArgument(format!(
            "design has {} arms, model has {}",
            design.k(),
            model.k()
        )));
    }
    let theta = model.theta();
    let validation = validate_design(design, model);
    let h = design.generating_matrix(&theta, &theta)?;
    let (v, gamma) = stationary_proportion(&h)?;
    let spectrum = spectral_gap(&h, gamma);
    let positive_v = v.iter().all(|x| *x > 0.0);
    let lln_valid = spectrum.lambda < 1.0;
    let clt_valid = spectrum.lambda < 0.5 && positive_v;

    let sigmas = sigma_matrices(design, model, &v, &opts.sigma)?;
    let (f, jac) = if positive_v {
        f_matrix_with_jacobian(design, &v, &theta)?
    } else {
        (
            DMatrix::zeros(design.k(), design.k()),
            design.h_jacobian(&theta, &theta)?,
        )
    };
    let jacobian = match (jac.analytic, jac.one_sided) {
        (true, _) => "analytic",
        (false, false) => "finite-difference",
        (false, true) => "finite-difference-one-sided",
    }
    .to_string();
    let theta_clt = if positive_v {
        theta_clt_variance(model, &v)?
    } else {
        DMatrix::zeros(design.k(), design.k())
    };

    let mut report = AsymptoticReport {
        design: design.id().to_string(),
        theta: theta.clone(),
        response_variance: model.sigma2(),
        y_limit: v.iter().map(|x| x * gamma).collect(),
        v: v.clone(),
        gamma,
        lambda: spectrum.lambda,
        lln_valid,
        clt_valid,
        defective_warning: spectrum.defective_warning,
        f: rows(&f),
        jacobian,
        sigma1: rows(&sigmas.sigma1),
        sigma2: rows(&sigmas.sigma2),
        sigma3: rows(&sigmas.sigma3),
        sigma23: rows(&sigmas.sigma23),
        sigma_mc_standard_error: sigmas.mc_standard_error,
        theta_clt: rows(&theta_clt),
        lambda_dagger: None,
        lambda_dagger_natural: None,
        lambda_sharp: None,
        method: None,
        closed_form: None,
        closed_form_printed: printed_closed_form(design, model),
        discrepancy: None,
        quadrature: None,
        validation,
        notes: Vec::new(),
    };
    if spectrum.defective_warning {
        report
            .notes
            .push("repeated eigenvalue at the spectral gap; Jordan structure not resolved".into());
    }
    if !clt_valid {
        report.notes.push(format!(
            "lambda = {:.6} is not below 1/2; no sqrt(n) normal limit is reported",
            spectrum.lambda
        ));
        return Ok(report);
    }

    let closed = match corollary32_for_design(design, model) {
        Some(r) => Some(r?),
        None => None,
    };
    let hbar = centered_generator(&h, gamma, &v);
    match lambda_parts(&hbar, &f, &sigmas, gamma, &opts.integrals) {
        Ok(parts) => {
            let dagger = parts.lambda_dagger(&hbar, &v);
            let sharp = parts.lambda_sharp(&v);
            let a = &hbar - DMatrix::identity(v.len(), v.len()) * 0.5;
            report.quadrature = Some(QuadratureDiagnostics {
                horizon: parts.horizon,
                error_estimate: parts.error_estimate,
                intervals: parts.intervals,
                evaluations: parts.evaluations,
                lyapunov_residual: linalg::lyapunov_residual(&a, &parts.dagger1, &sigmas.sigma1),
            });
            if let Some(c) = &closed {
                report.discrepancy = Some(Discrepancy {
                    lambda_dagger: linalg::rel_diff(&dagger, &c.lambda_dagger, 1e-12),
                    lambda_sharp: linalg::rel_diff(&sharp, &c.lambda_sharp, 1e-12),
                });
            }
            report.lambda_dagger_natural = Some(rows(&(&dagger * (gamma * gamma))));
            report.lambda_dagger = Some(rows(&dagger));
            report.lambda_sharp = Some(rows(&sharp));
            report.method = Some("quadrature".into());
        }
        Err(e) => match &closed {
            Some(c) => {
                report
                    .notes
                    .push(format!("quadrature failed ({e}); closed form used"));
                report.lambda_dagger = Some(rows(&c.lambda_dagger));
                report.lambda_dagger_natural = Some(rows(&c.lambda_dagger_natural));
                report.lambda_sharp = Some(rows(&c.lambda_sharp));
                report.method = Some("closed-form".into());
            }
            None => return Err(e),
        },
    }
    if let Some(c) = closed {
        report.closed_form = Some(ClosedFormBlock {
            lambda_dagger: rows(&c.lambda_dagger),
            lambda_dagger_natural: rows(&c.lambda_dagger_natural),
            lambda_sharp: rows(&c.lambda_sharp),
            sigma_rho: rows(&c.sigma_rho),
            sigma_v: rows(&c.sigma_v),
        });
    }
    Ok(report)
}
