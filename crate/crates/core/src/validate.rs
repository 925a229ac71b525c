//! Machine checks of the standing assumptions for a design/model pair.

use serde::{Deserialize, Serialize};

use crate::asymptotics::{spectral_gap, stationary_proportion};
use crate::design::{Design, Rule};
use crate::model::ResponseModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckStatus {
    Pass,
    Fail,
    Info,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub status: CheckStatus,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub checks: Vec<Check>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    pub lln_valid: bool,
    pub clt_valid: bool,
}

impl ValidationReport {
    pub fn get(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn passed(&self, name: &str) -> bool {
        self.get(name)
            .is_some_and(|c| c.status == CheckStatus::Pass)
    }

    /// No check failed.
    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.status != CheckStatus::Fail)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for c in &self.checks {
            let tag = match c.status {
                CheckStatus::Pass => "PASS",
                CheckStatus::Fail => "FAIL",
                CheckStatus::Info => "INFO",
            };
            out.push_str(&format!("{tag:<5} {:<22} {}\n", c.name, c.detail));
        }
        out
    }
}

const ROW_SUM_TOL: f64 = 1e-10;

fn check(name: &str, ok: bool, detail: String) -> Check {
    Check {
        name: name.into(),
        status: if ok {
            CheckStatus::Pass
        } else {
            CheckStatus::Fail
        },
        detail,
    }
}

fn info(name: &str, detail: String) -> Check {
    Check {
        name: name.into(),
        status: CheckStatus::Info,
        detail,
    }
}

/// Runs checks: `row_sums`, `positive_v`, `lln_regime`, `clt_regime`,
/// `nonnegative_additions`, `moments`, plus `parameter_domain`. Never errors.
pub fn validate_design(design: &Design, model: &ResponseModel) -> ValidationReport {
    let mut checks = Vec::new();
    let mut report = ValidationReport {
        checks: Vec::new(),
        gamma: None,
        lambda: None,
        lln_valid: false,
        clt_valid: false,
    };
    if design.k() != model.k() {
        checks.push(check(
            "arm_count",
            false,
            format!("design has {} arms, model has {}", design.k(), model.k()),
        ));
        report.checks = checks;
        return report;
    }
    let theta = model.theta();
    checks.push(parameter_domain(design, model, &theta));

    let h = match design.generating_matrix(&theta, &theta) {
        Ok(h) => h,
        Err(e) => {
            checks.push(check(
                "row_sums",
                false,
                format!("H(theta) unavailable: {e}"),
            ));
            report.checks = checks;
            return report;
        }
    };
    let sums: Vec<f64> = (0..h.nrows()).map(|i| h.row(i).sum()).collect();
    let gamma = sums.iter().sum::<f64>() / sums.len() as f64;
    let spread = sums.iter().fold(0.0f64, |m, s| m.max((s - gamma).abs()));
    checks.push(check(
        "row_sums",
        spread <= ROW_SUM_TOL * gamma.abs().max(1.0),
        format!("gamma = {gamma:.12}, max deviation {spread:.3e}"),
    ));
    report.gamma = Some(gamma);

    match stationary_proportion(&h) {
        Ok((v, gamma)) => {
            let min_v = v.iter().copied().fold(f64::INFINITY, f64::min);
            checks.push(check("positive_v", min_v > 0.0, format!("v = {v:.6?}")));
            let spec = spectral_gap(&h, gamma);
            report.lambda = Some(spec.lambda);
            report.lln_valid = spec.lambda < 1.0;
            report.clt_valid = spec.lambda < 0.5 && min_v > 0.0;
            checks.push(check(
                "lln_regime",
                report.lln_valid,
                format!("lambda = {:.12} (needs < 1)", spec.lambda),
            ));
            checks.push(check(
                "clt_regime",
                report.clt_valid,
                format!("lambda = {:.12} (needs < 1/2)", spec.lambda),
            ));
            if spec.defective_warning {
                checks.push(info(
                    "defective_spectrum",
                    "repeated eigenvalue at the spectral gap".into(),
                ));
            }
        }
        Err(e) => {
            checks.push(check("positive_v", false, format!("{e}")));
        }
    }

    checks.push(nonnegative_additions(design, model, &theta));
    checks.push(if model.is_finite_support() {
        info(
            "moments",
            "finite-support responses: moments of every order are bounded".into(),
        )
    } else {
        info(
            "moments",
            "continuous responses: addition rule bounded in theta_hat, response moments finite"
                .into(),
        )
    });

    report.checks = checks;
    report
}

fn parameter_domain(design: &Design, model: &ResponseModel, theta: &[f64]) -> Check {
    match design.rule() {
        Rule::Target(_) => match design.target_value(theta) {
            Some(Ok(rho)) => {
                let ok = rho.iter().all(|r| r.is_finite() && *r > 0.0);
                check("parameter_domain", ok, format!("rho(theta) = {rho:.6?}"))
            }
            Some(Err(e)) => check("parameter_domain", false, format!("{e}")),
            None => check("parameter_domain", false, "target unavailable".into()),
        },
        _ => {
            let ok = model.is_bernoulli() || theta.iter().all(|t| *t > 0.0 && *t < 1.0);
            check(
                "parameter_domain",
                ok,
                format!("theta = {theta:.6?} (success probabilities in (0,1))"),
            )
        }
    }
}

// Additions must be non-negative at theta and at perturbed estimates, for every
// response value the model can produce (quantiles for continuous arms).
fn nonnegative_additions(design: &Design, model: &ResponseModel, theta: &[f64]) -> Check {
    let eps = design.clamp().unwrap_or(0.0).max(1e-6);
    let mut points = vec![theta.to_vec()];
    for delta in [-0.1, 0.1] {
        points.push(
            theta
                .iter()
                .map(|t| (t + delta).clamp(eps, 1.0 - eps))
                .collect(),
        );
    }
    points.push(vec![eps; theta.len()]);
    points.push(vec![1.0 - eps; theta.len()]);
    points.push(vec![1.0; theta.len()]);

    let mut worst = f64::INFINITY;
    for (arm, dist) in model.arms().iter().enumerate() {
        let responses: Vec<f64> = match dist.outcomes() {
            Some(o) => o.into_iter().map(|(x, _)| x).collect(),
            None => [0.001, 0.01, 0.5, 0.99, 0.999]
                .iter()
                .map(|u| dist.sample(*u))
                .collect(),
        };
        for x in &points {
            for xi in &responses {
                match design.addition(x, arm, *xi) {
                    Ok(d) => worst = d.iter().copied().fold(worst, f64::min),
                    Err(e) => {
                        return check("nonnegative_additions", false, format!("{e}"));
                    }
                }
            }
        }
    }
    let detail = format!("minimum added mass {worst:.6}");
    if model.is_finite_support() {
        check("nonnegative_additions", worst >= 0.0, detail)
    } else {
        check(
            "nonnegative_additions",
            worst >= 0.0,
            format!("{detail} over response quantiles 0.001..0.999"),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::{bhs_design, rpw_target_design};

    #[test]
    fn example3_passes_with_zero_gap() {
        for p in [(0.7, 0.5), (0.2, 0.9), (0.99, 0.01)] {
            let m = ResponseModel::bernoulli(&[p.0, p.1]).unwrap();
            let r = validate_design(&rpw_target_design(), &m);
            assert!(r.all_pass(), "{}", r.render());
            assert!(r.lambda.unwrap().abs() < 1e-10);
        }
    }

    #[test]
    fn bhs_gap_regimes() {
        let d = bhs_design(2).unwrap();
        let r = validate_design(&d, &ResponseModel::bernoulli(&[0.9, 0.8]).unwrap());
        assert!((r.lambda.unwrap() - 0.7).abs() < 1e-10);
        assert!(r.passed("lln_regime"));
        assert!(!r.passed("clt_regime"));

        let r = validate_design(&d, &ResponseModel::bernoulli(&[0.7, 0.5]).unwrap());
        assert!((r.lambda.unwrap() - 0.2).abs() < 1e-10);
        assert!(r.all_pass(), "{}", r.render());
    }

    #[test]
    fn mismatched_arms_reported() {
        let r = validate_design(
            &bhs_design(3).unwrap(),
            &ResponseModel::bernoulli(&[0.5, 0.5]).unwrap(),
        );
        assert!(!r.all_pass());
    }
}
