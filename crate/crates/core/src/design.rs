//! Addition rules, generating matrices and their Jacobians for the urn designs.

use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result, SeuError};
use crate::expr::{parse_list, Expr};
use crate::model::ResponseModel;

/// Default clamp applied to estimates before they enter a rule.
pub const DEFAULT_CLAMP: f64 = 1e-3;

/// Target vector `rho(x)`.
pub type TargetFn = Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;
/// Jacobian of a target, indexed `[i][j] = d rho_j / d x_i`.
pub type TargetJacobian = Arc<dyn Fn(&[f64]) -> Vec<Vec<f64>> + Send + Sync>;

#[derive(Clone)]
pub struct Target {
    pub rho: TargetFn,
    pub jacobian: Option<TargetJacobian>,
    /// Expression source when built from text.
    pub source: Option<String>,
}

impl fmt::Debug for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Target")
            .field("source", &self.source)
            .field("analytic_jacobian", &self.jacobian.is_some())
            .finish()
    }
}

#[derive(Debug, Clone)]
pub enum Rule {
    /// Success adds one particle of the drawn type; failure spreads one particle
    /// over the other types in proportion to their estimated success rates.
    Bhs,
    /// Adds `(sqrt(p1), sqrt(p2))` whatever happens.
    OptimalAllocation,
    /// Adds `(q2, q1) / (q1 + q2)` whatever happens.
    RpwTarget,
    /// Estimate-free play-the-winner: success rewards the drawn arm, failure the other.
    ClassicRpw,
    /// Adds `rho(theta_hat)` whatever happens.
    Target(Target),
}

/// Identifier used in configuration files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DesignId {
    Bhs,
    OptAlloc,
    RpwTarget,
    RpwClassic,
    Generic,
}

impl DesignId {
    pub fn as_str(self) -> &'static str {
        match self {
            DesignId::Bhs => "bhs",
            DesignId::OptAlloc => "opt-alloc",
            DesignId::RpwTarget => "rpw-target",
            DesignId::RpwClassic => "rpw-classic",
            DesignId::Generic => "generic",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "bhs" => DesignId::Bhs,
            "opt-alloc" => DesignId::OptAlloc,
            "rpw-target" => DesignId::RpwTarget,
            "rpw-classic" => DesignId::RpwClassic,
            "generic" => DesignId::Generic,
            _ => return None,
        })
    }
}

impl fmt::Display for DesignId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// An urn design: addition rule `D(theta_hat, k, xi)` and generating matrix
/// `H(x) = E[D(x, xi)]`. Immutable once built.
#[derive(Debug, Clone)]
pub struct Design {
    id: DesignId,
    k: usize,
    rule: Rule,
    clamp: Option<f64>,
}

/// Partial derivatives `dH/dx_m` for every coordinate `m`.
#[derive(Debug, Clone)]
pub struct HJacobian {
    pub partials: Vec<DMatrix<f64>>,
    pub analytic: bool,
    /// Set when a one-sided difference was used near the clamp boundary.
    pub one_sided: bool,
}

pub fn bhs_design(k: usize) -> Result<Design> {
    if k < 2 {
        return Err(invalid("bhs design needs K >= 2"));
    }
    Ok(Design {
        id: DesignId::Bhs,
        k,
        rule: Rule::Bhs,
        clamp: Some(DEFAULT_CLAMP),
    })
}

pub fn optimal_allocation_design() -> Design {
    Design {
        id: DesignId::OptAlloc,
        k: 2,
        rule: Rule::OptimalAllocation,
        clamp: Some(DEFAULT_CLAMP),
    }
}

pub fn rpw_target_design() -> Design {
    Design {
        id: DesignId::RpwTarget,
        k: 2,
        rule: Rule::RpwTarget,
        clamp: Some(DEFAULT_CLAMP),
    }
}

pub fn classic_rpw_design() -> Design {
    Design {
        id: DesignId::RpwClassic,
        k: 2,
        rule: Rule::ClassicRpw,
        clamp: Some(DEFAULT_CLAMP),
    }
}

/// Target design adding `rho(theta_hat)` particles at every stage.
pub fn generic_target_design(
    k: usize,
    rho: TargetFn,
    rho_jacobian: Option<TargetJacobian>,
) -> Result<Design> {
    if k < 2 {
        return Err(invalid("target design needs K >= 2"));
    }
    Ok(Design {
        id: DesignId::Generic,
        k,
        rule: Rule::Target(Target {
            rho,
            jacobian: rho_jacobian,
            source: None,
        }),
        clamp: Some(DEFAULT_CLAMP),
    })
}

/// Target design from a comma-separated expression list such as `"sqrt(x1), sqrt(x2)"`.
pub fn target_design_from_expr(src: &str) -> Result<Design> {
    let items = parse_list(src).map_err(|e| SeuError::InvalidConfig(format!("rho: {e}")))?;
    let k = items.len();
    if k < 2 {
        return Err(SeuError::InvalidConfig(
            "rho must list at least two components".into(),
        ));
    }
    if let Some(max) = items.iter().filter_map(Expr::max_var).max() {
        if max >= k {
            return Err(SeuError::InvalidConfig(format!(
                "rho references x{} but only {k} arms are defined",
                max + 1
            )));
        }
    }
    let exprs = Arc::new(items);
    let rho: TargetFn = Arc::new(move |x: &[f64]| exprs.iter().map(|e| e.eval(x)).collect());
    let mut design = generic_target_design(k, rho, None)?;
    if let Rule::Target(t) = &mut design.rule {
        t.source = Some(src.to_string());
    }
    Ok(design)
}

impl Design {
    pub fn id(&self) -> DesignId {
        self.id
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn rule(&self) -> &Rule {
        &self.rule
    }

    pub fn clamp(&self) -> Option<f64> {
        self.clamp
    }

    /// Replaces the estimate clamp; `None` disables clamping.
    pub fn with_clamp(mut self, clamp: Option<f64>) -> Result<Self> {
        if let Some(eps) = clamp {
            if !(eps > 0.0 && eps < 0.5) {
                return Err(invalid(format!("clamp epsilon {eps} must lie in (0, 1/2)")));
            }
        }
        self.clamp = clamp;
        Ok(self)
    }

    pub fn estimate_dependent(&self) -> bool {
        !matches!(self.rule, Rule::ClassicRpw)
    }

    /// True when the addition rule ignores the drawn arm and the response.
    pub fn is_target_form(&self) -> bool {
        matches!(
            self.rule,
            Rule::OptimalAllocation | Rule::RpwTarget | Rule::Target(_)
        )
    }

    fn clamped(&self, x: &[f64]) -> Vec<f64> {
        match self.clamp {
            Some(eps) => x.iter().map(|v| v.clamp(eps, 1.0 - eps)).collect(),
            None => x.to_vec(),
        }
    }

    fn check_len(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.k {
            return Err(invalid(format!(
                "expected {} coordinates, got {}",
                self.k,
                x.len()
            )));
        }
        Ok(())
    }

    /// `rho(x)` for target-form designs, evaluated on the clamped input.
    pub fn target_value(&self, x: &[f64]) -> Option<Result<Vec<f64>>> {
        let xc = self.clamped(x);
        let rho = match &self.rule {
            Rule::OptimalAllocation => vec![xc[0].sqrt(), xc[1].sqrt()],
            Rule::RpwTarget => {
                let (q1, q2) = (1.0 - xc[0], 1.0 - xc[1]);
                vec![q2 / (q1 + q2), q1 / (q1 + q2)]
            }
            Rule::Target(t) => (t.rho)(&xc),
            _ => return None,
        };
        Some(check_target(&rho, self.k).map(|_| rho))
    }

    /// Jacobian of `rho` at `x`, `[i][j] = d rho_j / d x_i`, analytic when known.
    pub fn target_jacobian(&self, x: &[f64]) -> Option<Result<(Vec<Vec<f64>>, bool)>> {
        match &self.rule {
            Rule::OptimalAllocation => Some(Ok((
                vec![vec![0.5 / x[0].sqrt(), 0.0], vec![0.0, 0.5 / x[1].sqrt()]],
                true,
            ))),
            Rule::RpwTarget => {
                let (q1, q2) = (1.0 - x[0], 1.0 - x[1]);
                let s2 = (q1 + q2) * (q1 + q2);
                Some(Ok((
                    vec![vec![q2 / s2, -q2 / s2], vec![-q1 / s2, q1 / s2]],
                    true,
                )))
            }
            Rule::Target(t) => match &t.jacobian {
                Some(j) => Some(Ok((j(x), true))),
                None => {
                    let partials = match self.fd_partials(x, |xx| {
                        let rho = self.target_value(xx).expect("target form")?;
                        Ok(DMatrix::from_row_slice(1, self.k, &rho))
                    }) {
                        Ok(p) => p,
                        Err(e) => return Some(Err(e)),
                    };
                    let jac = partials
                        .0
                        .iter()
                        .map(|m| m.row(0).iter().copied().collect())
                        .collect();
                    Some(Ok((jac, false)))
                }
            },
            _ => None,
        }
    }

    /// Row `k` of the addition matrix for estimate `theta_hat` and response `xi`
    /// observed on the drawn arm.
    pub fn addition(&self, theta_hat: &[f64], arm: usize, xi: f64) -> Result<Vec<f64>> {
        self.check_len(theta_hat)?;
        if arm >= self.k {
            return Err(invalid(format!("arm index {arm} out of range")));
        }
        let add = match &self.rule {
            Rule::Bhs => {
                unit_response(xi)?;
                let xc = self.clamped(theta_hat);
                let rest = bhs_spread(&xc, arm)?;
                let mut row: Vec<f64> = rest.iter().map(|w| (1.0 - xi) * w).collect();
                row[arm] = xi;
                row
            }
            Rule::ClassicRpw => {
                unit_response(xi)?;
                let mut row = vec![1.0 - xi; 2];
                row[arm] = xi;
                row
            }
            _ => self.target_value(theta_hat).expect("target form")?,
        };
        debug_assert!(add.iter().all(|&a| a >= 0.0));
        Ok(add)
    }

    /// Generating matrix `H(x)` for response means `theta`.
    pub fn generating_matrix(&self, x: &[f64], theta: &[f64]) -> Result<DMatrix<f64>> {
        self.check_len(x)?;
        self.check_len(theta)?;
        let k = self.k;
        match &self.rule {
            Rule::Bhs => {
                let xc = self.clamped(x);
                let mut h = DMatrix::zeros(k, k);
                for row in 0..k {
                    let spread = bhs_spread(&xc, row)?;
                    for col in 0..k {
                        h[(row, col)] = if col == row {
                            theta[row]
                        } else {
                            (1.0 - theta[row]) * spread[col]
                        };
                    }
                }
                Ok(h)
            }
            Rule::ClassicRpw => Ok(DMatrix::from_row_slice(
                2,
                2,
                &[theta[0], 1.0 - theta[0], 1.0 - theta[1], theta[1]],
            )),
            _ => {
                let rho = self.target_value(x).expect("target form")?;
                Ok(DMatrix::from_fn(k, k, |_, j| rho[j]))
            }
        }
    }

    /// `dH/dx_m` at `x`. Analytic where a closed form exists, otherwise central
    /// differences with step `1e-5 * max(1, |x_m|)`, switching to second-order
    /// one-sided differences within one step of the clamp boundary.
    pub fn h_jacobian(&self, x: &[f64], theta: &[f64]) -> Result<HJacobian> {
        self.check_len(x)?;
        self.check_len(theta)?;
        let k = self.k;
        match &self.rule {
            Rule::Bhs => {
                let mut partials = vec![DMatrix::zeros(k, k); k];
                for row in 0..k {
                    let s: f64 = (0..k).filter(|&i| i != row).map(|i| x[i]).sum();
                    let q = 1.0 - theta[row];
                    for (m, dm) in partials.iter_mut().enumerate() {
                        if m == row {
                            continue;
                        }
                        for col in (0..k).filter(|&c| c != row) {
                            let delta = if col == m { s } else { 0.0 };
                            dm[(row, col)] = q * (delta - x[col]) / (s * s);
                        }
                    }
                }
                Ok(HJacobian {
                    partials,
                    analytic: true,
                    one_sided: false,
                })
            }
            Rule::ClassicRpw => Ok(HJacobian {
                partials: vec![DMatrix::zeros(2, 2); 2],
                analytic: true,
                one_sided: false,
            }),
            Rule::Target(t) if t.jacobian.is_none() => {
                let (partials, one_sided) =
                    self.fd_partials(x, |xx| self.generating_matrix(xx, theta))?;
                Ok(HJacobian {
                    partials,
                    analytic: false,
                    one_sided,
                })
            }
            _ => {
                let (jac, analytic) = self.target_jacobian(x).expect("target form")?;
                let partials = (0..k)
                    .map(|m| DMatrix::from_fn(k, k, |_, j| jac[m][j]))
                    .collect();
                Ok(HJacobian {
                    partials,
                    analytic,
                    one_sided: false,
                })
            }
        }
    }

    /// Finite-difference Jacobian regardless of whether an analytic one exists.
    pub fn h_jacobian_fd(&self, x: &[f64], theta: &[f64]) -> Result<HJacobian> {
        self.check_len(x)?;
        let (partials, one_sided) = self.fd_partials(x, |xx| self.generating_matrix(xx, theta))?;
        Ok(HJacobian {
            partials,
            analytic: false,
            one_sided,
        })
    }

    fn fd_partials<F>(&self, x: &[f64], f: F) -> Result<(Vec<DMatrix<f64>>, bool)>
    where
        F: Fn(&[f64]) -> Result<DMatrix<f64>>,
    {
        let (lo, hi) = match self.clamp {
            Some(eps) => (eps, 1.0 - eps),
            None => (f64::NEG_INFINITY, f64::INFINITY),
        };
        let mut one_sided = false;
        let mut partials = Vec::with_capacity(x.len());
        for m in 0..x.len() {
            let h = 1e-5 * x[m].abs().max(1.0);
            let at = |offset: f64| {
                let mut xx = x.to_vec();
                xx[m] += offset;
                f(&xx)
            };
            let d = if x[m] - h >= lo && x[m] + h <= hi {
                (at(h)? - at(-h)?) / (2.0 * h)
            } else if x[m] + 2.0 * h <= hi {
                one_sided = true;
                (at(0.0)? * -3.0 + at(h)? * 4.0 - at(2.0 * h)?) / (2.0 * h)
            } else {
                one_sided = true;
                (at(0.0)? * 3.0 - at(-h)? * 4.0 + at(-2.0 * h)?) / (2.0 * h)
            };
            partials.push(d);
        }
        Ok((partials, one_sided))
    }

    /// Common row sum of `H(theta)`.
    pub fn gamma(&self, theta: &[f64]) -> Result<f64> {
        let h = self.generating_matrix(theta, theta)?;
        Ok(h.row(0).sum())
    }

    /// The same design with arms `i` and `j` relabelled.
    pub fn swapped(&self, i: usize, j: usize) -> Design {
        match &self.rule {
            Rule::Target(t) => {
                let inner = t.rho.clone();
                let rho: TargetFn = Arc::new(move |x: &[f64]| {
                    let mut xs = x.to_vec();
                    xs.swap(i, j);
                    let mut r = inner(&xs);
                    r.swap(i, j);
                    r
                });
                let jacobian = t.jacobian.clone().map(|jac| {
                    let f: TargetJacobian = Arc::new(move |x: &[f64]| {
                        let mut xs = x.to_vec();
                        xs.swap(i, j);
                        let mut m = jac(&xs);
                        m.swap(i, j);
                        for row in &mut m {
                            row.swap(i, j);
                        }
                        m
                    });
                    f
                });
                Design {
                    rule: Rule::Target(Target {
                        rho,
                        jacobian,
                        source: None,
                    }),
                    ..self.clone()
                }
            }
            // The catalog rules are symmetric under relabelling.
            _ => self.clone(),
        }
    }
}

fn check_target(rho: &[f64], k: usize) -> Result<()> {
    if rho.len() != k {
        return Err(SeuError::DesignDomain(format!(
            "rho returned {} components for {k} arms",
            rho.len()
        )));
    }
    if let Some((j, v)) = rho
        .iter()
        .enumerate()
        .find(|(_, v)| !(**v > 0.0) || !v.is_finite())
    {
        return Err(SeuError::DesignDomain(format!(
            "rho component {} is {v}, must be positive",
            j + 1
        )));
    }
    Ok(())
}

fn unit_response(xi: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&xi) {
        return Err(SeuError::DesignDomain(format!(
            "response {xi} outside [0, 1] for a success/failure rule"
        )));
    }
    Ok(())
}

/// Failure spread for the BHS rule: `x_j / (M - x_k)` for `j != k`, 0 at `k`.
fn bhs_spread(x: &[f64], arm: usize) -> Result<Vec<f64>> {
    let denom: f64 = x
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != arm)
        .map(|(_, v)| v)
        .sum();
    if !(denom > 0.0) {
        return Err(SeuError::DesignDomain(format!(
            "bhs spread denominator {denom} not positive"
        )));
    }
    Ok(x.iter()
        .enumerate()
        .map(|(j, v)| if j == arm { 0.0 } else { v / denom })
        .collect())
}

/// Exact `E[D(x, xi)]` by enumerating each arm's outcomes. Rows of `D` depend
/// only on the drawn arm's own response.
pub fn expected_addition(
    design: &Design,
    model: &ResponseModel,
    x: &[f64],
) -> Result<DMatrix<f64>> {
    let k = design.k();
    let mut h = DMatrix::zeros(k, k);
    for arm in 0..k {
        let outcomes = model.arms()[arm].outcomes().ok_or_else(|| {
            SeuError::InvalidConfig("exact expectation needs finite-support responses".into())
        })?;
        for (xi, p) in outcomes {
            let row = design.addition(x, arm, xi)?;
            for (j, v) in row.iter().enumerate() {
                h[(arm, j)] += p * v;
            }
        }
    }
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn bhs_two_arms_is_estimate_free() {
        let d = bhs_design(2).unwrap();
        let theta = [0.7, 0.5];
        for x in [[0.2, 0.9], [0.5, 0.5], [0.99, 0.01]] {
            let h = d.generating_matrix(&x, &theta).unwrap();
            assert!(close(h[(0, 0)], 0.7, 1e-15) && close(h[(0, 1)], 0.3, 1e-15));
            assert!(close(h[(1, 0)], 0.5, 1e-15) && close(h[(1, 1)], 0.5, 1e-15));
        }
    }

    #[test]
    fn bhs_three_arm_failure_spread() {
        let d = bhs_design(3).unwrap();
        assert_eq!(
            d.addition(&[1.0, 1.0, 1.0], 0, 0.0).unwrap(),
            vec![0.0, 0.5, 0.5]
        );
        assert_eq!(
            d.addition(&[1.0, 1.0, 1.0], 1, 1.0).unwrap(),
            vec![0.0, 1.0, 0.0]
        );
        assert!(bhs_design(1).is_err());
    }

    #[test]
    fn optimal_allocation_rule() {
        let d = optimal_allocation_design();
        // the fresh estimate 1 is clamped to 1 - eps before the square root
        let edge = (1.0f64 - DEFAULT_CLAMP).sqrt();
        assert_eq!(d.addition(&[1.0, 1.0], 0, 0.0).unwrap(), vec![edge, edge]);
        assert!(close(edge, 1.0, 1e-3));
        let h = d.generating_matrix(&[0.9, 0.4], &[0.9, 0.4]).unwrap();
        for r in 0..2 {
            assert!(close(h[(r, 0)], 0.948683, 5e-7));
            assert!(close(h[(r, 1)], 0.632456, 5e-7));
        }
        let jac = d.h_jacobian(&[0.9, 0.4], &[0.9, 0.4]).unwrap();
        for r in 0..2 {
            assert!(close(jac.partials[0][(r, 0)], 0.527046, 5e-7));
            assert_eq!(jac.partials[0][(r, 1)], 0.0);
        }
    }

    #[test]
    fn rpw_target_fresh_state_is_even() {
        let d = rpw_target_design();
        assert_eq!(d.addition(&[1.0, 1.0], 1, 1.0).unwrap(), vec![0.5, 0.5]);
        let h = d.generating_matrix(&[0.7, 0.5], &[0.7, 0.5]).unwrap();
        assert!(close(h[(0, 0)], 0.625, 1e-15) && close(h[(1, 1)], 0.375, 1e-15));
    }

    #[test]
    fn classic_rpw_rule() {
        let d = classic_rpw_design();
        assert_eq!(d.addition(&[0.3, 0.3], 0, 1.0).unwrap(), vec![1.0, 0.0]);
        assert_eq!(d.addition(&[0.3, 0.3], 1, 0.0).unwrap(), vec![1.0, 0.0]);
        assert!(!d.estimate_dependent());
        let jac = d.h_jacobian(&[0.4, 0.6], &[0.7, 0.5]).unwrap();
        assert!(jac.partials.iter().all(|m| m.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn success_failure_rules_reject_other_responses() {
        let d = classic_rpw_design();
        assert!(matches!(
            d.addition(&[0.5, 0.5], 0, 1.5),
            Err(SeuError::DesignDomain(_))
        ));
    }

    #[test]
    fn target_rejects_non_positive() {
        let rho: TargetFn = Arc::new(|x: &[f64]| vec![x[0] - 0.5, 1.0]);
        let d = generic_target_design(2, rho, None).unwrap();
        assert!(matches!(
            d.addition(&[0.2, 0.2], 0, 0.0),
            Err(SeuError::DesignDomain(_))
        ));
        assert!(d.addition(&[0.8, 0.2], 0, 0.0).is_ok());
    }

    #[test]
    fn expression_design_matches_opt_alloc() {
        let g = target_design_from_expr("sqrt(x1), sqrt(x2)").unwrap();
        let o = optimal_allocation_design();
        for x in [[1.0, 1.0], [0.3, 0.8], [0.0, 0.5]] {
            assert_eq!(
                g.addition(&x, 0, 1.0).unwrap(),
                o.addition(&x, 1, 0.0).unwrap()
            );
        }
        assert!(target_design_from_expr("sqrt(x1), x3").is_err());
        assert!(target_design_from_expr("sqrt(x1").is_err());
        assert!(target_design_from_expr("x1").is_err());
    }

    #[test]
    fn fd_one_sided_near_boundary() {
        let g = target_design_from_expr("sqrt(x1), sqrt(x2)").unwrap();
        let x = [1.0 - 1e-3 - 1e-6, 0.5];
        let jac = g.h_jacobian(&x, &x).unwrap();
        assert!(jac.one_sided && !jac.analytic);
        assert!(close(jac.partials[0][(0, 0)], 0.5 / x[0].sqrt(), 1e-8));
        let inner = g.h_jacobian(&[0.5, 0.5], &[0.5, 0.5]).unwrap();
        assert!(!inner.one_sided);
    }

    #[test]
    fn gamma_of_opt_alloc() {
        let d = optimal_allocation_design();
        assert!(close(
            d.gamma(&[0.9, 0.4]).unwrap(),
            0.9f64.sqrt() + 0.4f64.sqrt(),
            1e-15
        ));
    }

    #[test]
    fn design_ids_round_trip() {
        for id in [
            DesignId::Bhs,
            DesignId::OptAlloc,
            DesignId::RpwTarget,
            DesignId::RpwClassic,
            DesignId::Generic,
        ] {
            assert_eq!(DesignId::parse(id.as_str()), Some(id));
        }
        assert_eq!(DesignId::parse("drop-the-loser"), None);
    }
}
