//! TOML run configuration.
//!
//! ```toml
//! [design]
//! id = "rpw-target"          # bhs | opt-alloc | rpw-target | rpw-classic | generic
//! # rho = "sqrt(x1), sqrt(x2)"   (generic only)
//! # arms = 3                     (bhs only, defaults to the model's K)
//! # clamp = 1e-3                 (0 disables)
//!
//! [model]
//! kind = "bernoulli"         # bernoulli | discrete | normal
//! p = [0.7, 0.5]
//!
//! [run]
//! horizon = 2000
//! replications = 1
//! seed = 42
//! ```

use std::fmt;
use std::ops::Range;
use std::path::PathBuf;

use serde::Deserialize;
use toml::Spanned;

use seu::montecarlo::CltTolerances;
use seu::{
    bhs_design, classic_rpw_design, optimal_allocation_design, rpw_target_design,
    target_design_from_expr, ArmDistribution, Design, DesignId, ResponseModel,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Csv,
    Json,
}

impl Format {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "csv" => Some(Self::Csv),
            "json" => Some(Self::Json),
            _ => None,
        }
    }

    pub fn extension(self) -> &'static str {
        match self {
            Self::Csv => "csv",
            Self::Json => "json",
        }
    }
}

/// One or more problems found in a configuration file, each with its line.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub problems: Vec<String>,
}

impl ConfigError {
    fn single(msg: impl Into<String>) -> Self {
        Self {
            problems: vec![msg.into()],
        }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, p) in self.problems.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "{p}")?;
        }
        Ok(())
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    design: Option<RawDesign>,
    model: Option<RawModel>,
    #[serde(default)]
    compare: Vec<RawCompare>,
    #[serde(default)]
    run: RawRun,
    #[serde(default)]
    output: RawOutput,
    #[serde(default)]
    tolerances: RawTolerances,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDesign {
    id: Spanned<String>,
    rho: Option<Spanned<String>>,
    arms: Option<Spanned<i64>>,
    clamp: Option<Spanned<f64>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawModel {
    kind: Option<Spanned<String>>,
    p: Option<Spanned<Vec<f64>>>,
    mean: Option<Spanned<Vec<f64>>>,
    sd: Option<Spanned<Vec<f64>>>,
    values: Option<Spanned<Vec<Vec<f64>>>>,
    probs: Option<Spanned<Vec<Vec<f64>>>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCompare {
    label: Option<String>,
    design: RawDesign,
    model: Option<RawModel>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRun {
    horizon: Option<Spanned<i64>>,
    replications: Option<Spanned<i64>>,
    seed: Option<Spanned<i64>>,
    checkpoints: Option<Spanned<Vec<i64>>>,
    initial: Option<Spanned<Vec<f64>>>,
    mc_samples: Option<Spanned<i64>>,
    literal_mixed_term: Option<bool>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawOutput {
    dir: Option<String>,
    format: Option<Spanned<String>>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTolerances {
    diagonal: Option<f64>,
    off_diagonal: Option<f64>,
    skewness: Option<f64>,
    excess_kurtosis: Option<f64>,
}

/// A compared design with its own response model.
#[derive(Debug, Clone)]
pub struct CompareSpec {
    pub label: String,
    pub design: Design,
    pub model: ResponseModel,
}

/// Validated configuration with defaults filled in.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub design: Option<Design>,
    pub model: Option<ResponseModel>,
    pub compare: Vec<CompareSpec>,
    pub horizon: u64,
    pub replications: u64,
    pub seed: u64,
    /// Empty means every stage for a single trajectory.
    pub checkpoints: Vec<u64>,
    /// Starting composition; `None` means one particle per arm.
    pub initial: Option<Vec<f64>>,
    pub mc_samples: usize,
    pub literal_mixed_term: bool,
    pub output_dir: Option<PathBuf>,
    pub format: Format,
    pub tolerances: CltTolerances,
}

impl RunConfig {
    pub fn initial_composition(&self, k: usize) -> Vec<f64> {
        self.initial.clone().unwrap_or_else(|| vec![1.0; k])
    }
}

struct Ctx<'a> {
    src: &'a str,
    problems: Vec<String>,
}

impl Ctx<'_> {
    fn line(&self, span: Range<usize>) -> usize {
        let end = span.start.min(self.src.len());
        self.src[..end].bytes().filter(|&b| b == b'\n').count() + 1
    }

    fn err(&mut self, span: Range<usize>, field: &str, msg: impl fmt::Display) {
        let line = self.line(span);
        self.problems.push(format!("line {line}: `{field}`: {msg}"));
    }
}

fn probability(ctx: &mut Ctx, field: &str, v: &Spanned<Vec<f64>>) -> Option<Vec<f64>> {
    let mut ok = true;
    for (i, &p) in v.get_ref().iter().enumerate() {
        if !(p > 0.0 && p < 1.0) {
            ctx.err(
                v.span(),
                &format!("{field}[{i}]"),
                format!("{p} is outside (0, 1)"),
            );
            ok = false;
        }
    }
    ok.then(|| v.get_ref().clone())
}

fn model(ctx: &mut Ctx, raw: &RawModel, prefix: &str) -> Option<ResponseModel> {
    let kind = raw
        .kind
        .as_ref()
        .map(|k| (k.get_ref().as_str(), k.span()))
        .unwrap_or(("bernoulli", 0..0));
    let missing = |ctx: &mut Ctx, name: &str| {
        let line_hint = raw.kind.as_ref().map(|k| k.span()).unwrap_or(0..0);
        ctx.err(
            line_hint,
            &format!("{prefix}.{name}"),
            format!("required for kind \"{}\"", kind.0),
        );
        None
    };
    let arms: Vec<ArmDistribution> = match kind.0 {
        "bernoulli" => {
            let Some(p) = &raw.p else {
                return missing(ctx, "p");
            };
            probability(ctx, &format!("{prefix}.p"), p)?
                .into_iter()
                .map(|p| ArmDistribution::Bernoulli { p })
                .collect()
        }
        "normal" => {
            let Some(mean) = &raw.mean else {
                return missing(ctx, "mean");
            };
            let Some(sd) = &raw.sd else {
                return missing(ctx, "sd");
            };
            if mean.get_ref().len() != sd.get_ref().len() {
                ctx.err(
                    sd.span(),
                    &format!("{prefix}.sd"),
                    "length differs from `mean`",
                );
                return None;
            }
            let mut ok = true;
            for (i, &s) in sd.get_ref().iter().enumerate() {
                if !(s >= 0.0 && s.is_finite()) {
                    ctx.err(
                        sd.span(),
                        &format!("{prefix}.sd[{i}]"),
                        format!("{s} is not a valid standard deviation"),
                    );
                    ok = false;
                }
            }
            if !ok {
                return None;
            }
            mean.get_ref()
                .iter()
                .zip(sd.get_ref())
                .map(|(&mean, &sd)| ArmDistribution::Normal { mean, sd })
                .collect()
        }
        "discrete" => {
            let Some(values) = &raw.values else {
                return missing(ctx, "values");
            };
            let Some(probs) = &raw.probs else {
                return missing(ctx, "probs");
            };
            if values.get_ref().len() != probs.get_ref().len() {
                ctx.err(
                    probs.span(),
                    &format!("{prefix}.probs"),
                    "arm count differs from `values`",
                );
                return None;
            }
            let mut out = Vec::new();
            for (i, (v, p)) in values.get_ref().iter().zip(probs.get_ref()).enumerate() {
                let total: f64 = p.iter().sum();
                if v.len() != p.len() || v.is_empty() {
                    ctx.err(
                        probs.span(),
                        &format!("{prefix}.probs[{i}]"),
                        "must pair one probability with each value",
                    );
                } else if p.iter().any(|&q| !(0.0..=1.0).contains(&q)) || (total - 1.0).abs() > 1e-9
                {
                    ctx.err(
                        probs.span(),
                        &format!("{prefix}.probs[{i}]"),
                        "must be probabilities summing to 1",
                    );
                } else {
                    out.push(ArmDistribution::Discrete {
                        values: v.clone(),
                        probs: p.clone(),
                    });
                }
            }
            if out.len() != values.get_ref().len() {
                return None;
            }
            out
        }
        other => {
            ctx.err(
                kind.1,
                &format!("{prefix}.kind"),
                format!(
                    "unknown response kind \"{other}\" (expected bernoulli, discrete or normal)"
                ),
            );
            return None;
        }
    };
    match ResponseModel::new(arms) {
        Ok(m) => Some(m),
        Err(e) => {
            let span = raw.kind.as_ref().map(|k| k.span()).unwrap_or(0..0);
            ctx.err(span, prefix, e);
            None
        }
    }
}

fn design(ctx: &mut Ctx, raw: &RawDesign, k: Option<usize>, prefix: &str) -> Option<Design> {
    let id_str = raw.id.get_ref().as_str();
    let Some(id) = DesignId::parse(id_str) else {
        ctx.err(
            raw.id.span(),
            &format!("{prefix}.id"),
            format!("unknown design \"{id_str}\" (expected bhs, opt-alloc, rpw-target, rpw-classic or generic)"),
        );
        return None;
    };
    if let Some(rho) = &raw.rho {
        if id != DesignId::Generic {
            ctx.err(
                rho.span(),
                &format!("{prefix}.rho"),
                "only the generic design takes rho",
            );
            return None;
        }
    }
    if let Some(arms) = &raw.arms {
        if id != DesignId::Bhs {
            ctx.err(
                arms.span(),
                &format!("{prefix}.arms"),
                "only the bhs design takes arms",
            );
            return None;
        }
    }
    let built = match id {
        DesignId::Bhs => {
            let arms = match &raw.arms {
                Some(a) if *a.get_ref() < 2 => {
                    ctx.err(a.span(), &format!("{prefix}.arms"), "must be at least 2");
                    return None;
                }
                Some(a) => *a.get_ref() as usize,
                None => k.unwrap_or(2),
            };
            bhs_design(arms)
        }
        DesignId::OptAlloc => Ok(optimal_allocation_design()),
        DesignId::RpwTarget => Ok(rpw_target_design()),
        DesignId::RpwClassic => Ok(classic_rpw_design()),
        DesignId::Generic => {
            let Some(rho) = &raw.rho else {
                ctx.err(
                    raw.id.span(),
                    &format!("{prefix}.rho"),
                    "required for the generic design",
                );
                return None;
            };
            match target_design_from_expr(rho.get_ref()) {
                Ok(d) => Ok(d),
                Err(e) => {
                    ctx.err(rho.span(), &format!("{prefix}.rho"), e);
                    return None;
                }
            }
        }
    };
    let mut d = match built {
        Ok(d) => d,
        Err(e) => {
            ctx.err(raw.id.span(), &format!("{prefix}.id"), e);
            return None;
        }
    };
    if let Some(c) = &raw.clamp {
        let eps = *c.get_ref();
        let clamp = if eps == 0.0 { None } else { Some(eps) };
        d = match d.with_clamp(clamp) {
            Ok(d) => d,
            Err(e) => {
                ctx.err(c.span(), &format!("{prefix}.clamp"), e);
                return None;
            }
        };
    }
    if let Some(k) = k {
        if d.k() != k {
            ctx.err(
                raw.id.span(),
                prefix,
                format!("design has {} arms but the model has {k}", d.k()),
            );
            return None;
        }
    }
    Some(d)
}

fn count(ctx: &mut Ctx, v: &Option<Spanned<i64>>, field: &str, min: i64, default: u64) -> u64 {
    match v {
        Some(s) if *s.get_ref() < min => {
            ctx.err(s.span(), field, format!("must be at least {min}"));
            default
        }
        Some(s) => *s.get_ref() as u64,
        None => default,
    }
}

/// Parses and validates a configuration, reporting every problem with its line.
pub fn parse_config(src: &str) -> Result<RunConfig, ConfigError> {
    let raw: RawConfig = toml::from_str(src).map_err(|e| {
        let line = e.span().map(|s| {
            src[..s.start.min(src.len())]
                .bytes()
                .filter(|&b| b == b'\n')
                .count()
                + 1
        });
        let msg = e.message().trim().to_string();
        ConfigError::single(match line {
            Some(l) => format!("line {l}: {msg}"),
            None => msg,
        })
    })?;
    let mut ctx = Ctx {
        src,
        problems: Vec::new(),
    };

    let model_out = raw.model.as_ref().and_then(|m| model(&mut ctx, m, "model"));
    let k = model_out.as_ref().map(ResponseModel::k);
    let design_out = match &raw.design {
        Some(d) if raw.model.is_none() || model_out.is_some() => design(&mut ctx, d, k, "design"),
        _ => None,
    };

    let mut compare = Vec::new();
    for (i, c) in raw.compare.iter().enumerate() {
        let prefix = format!("compare[{i}]");
        let m = match &c.model {
            Some(m) => model(&mut ctx, m, &format!("{prefix}.model")),
            None => model_out.clone(),
        };
        let Some(m) = m else {
            if c.model.is_none() && raw.model.is_none() {
                ctx.err(
                    c.design.id.span(),
                    &format!("{prefix}.model"),
                    "no model given here or in [model]",
                );
            }
            continue;
        };
        if let Some(d) = design(
            &mut ctx,
            &c.design,
            Some(m.k()),
            &format!("{prefix}.design"),
        ) {
            compare.push(CompareSpec {
                label: c
                    .label
                    .clone()
                    .unwrap_or_else(|| d.id().as_str().to_string()),
                design: d,
                model: m,
            });
        }
    }

    let run = &raw.run;
    let horizon = count(&mut ctx, &run.horizon, "run.horizon", 1, 2000);
    let replications = count(&mut ctx, &run.replications, "run.replications", 1, 1);
    let seed = count(&mut ctx, &run.seed, "run.seed", 0, 0);
    let mc_samples = count(&mut ctx, &run.mc_samples, "run.mc_samples", 1, 1_000_000) as usize;

    let mut checkpoints = Vec::new();
    if let Some(c) = &run.checkpoints {
        let v = c.get_ref();
        if v.iter().any(|&x| x < 1) {
            ctx.err(c.span(), "run.checkpoints", "stages must be at least 1");
        } else if v.windows(2).any(|w| w[0] >= w[1]) {
            ctx.err(c.span(), "run.checkpoints", "must be strictly increasing");
        } else if v.iter().any(|&x| x as u64 > horizon) {
            ctx.err(
                c.span(),
                "run.checkpoints",
                format!("must not exceed the horizon {horizon}"),
            );
        } else {
            checkpoints = v.iter().map(|&x| x as u64).collect();
        }
    }

    let initial = run.initial.as_ref().and_then(|s| {
        let v = s.get_ref();
        if v.iter().any(|&y| !(y > 0.0 && y.is_finite())) {
            ctx.err(
                s.span(),
                "run.initial",
                "composition entries must be positive",
            );
            None
        } else if k.is_some_and(|k| k != v.len()) {
            ctx.err(
                s.span(),
                "run.initial",
                format!(
                    "has {} entries but the model has {} arms",
                    v.len(),
                    k.unwrap_or(0)
                ),
            );
            None
        } else {
            Some(v.clone())
        }
    });

    let format = match &raw.output.format {
        Some(f) => Format::parse(f.get_ref()).unwrap_or_else(|| {
            ctx.err(
                f.span(),
                "output.format",
                format!("\"{}\" is not csv or json", f.get_ref()),
            );
            Format::Csv
        }),
        None => Format::Csv,
    };

    let d = CltTolerances::default();
    let t = &raw.tolerances;
    let tolerances = CltTolerances {
        diagonal: t.diagonal.unwrap_or(d.diagonal),
        off_diagonal: t.off_diagonal.unwrap_or(d.off_diagonal),
        skewness: t.skewness.unwrap_or(d.skewness),
        excess_kurtosis: t.excess_kurtosis.unwrap_or(d.excess_kurtosis),
    };

    if !ctx.problems.is_empty() {
        return Err(ConfigError {
            problems: ctx.problems,
        });
    }
    Ok(RunConfig {
        design: design_out,
        model: model_out,
        compare,
        horizon,
        replications,
        seed,
        checkpoints,
        initial,
        mc_samples,
        literal_mixed_term: run.literal_mixed_term.unwrap_or(false),
        output_dir: raw.output.dir.map(PathBuf::from),
        format,
        tolerances,
    })
}
