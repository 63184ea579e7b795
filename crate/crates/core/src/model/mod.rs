//! Bayesian additive model on ilr coordinates.
//!
//! Every coordinate `d` gets its own linear predictor built from the same
//! term structure; the coordinates share a multivariate normal likelihood
//! with covariance `diag(σ) R diag(σ)`.

mod data;
mod density;
mod design;
#[cfg(test)]
mod fixtures;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::simplex::SimplexError;
use crate::smooth::{SmoothError, SmoothSpec};

pub use data::{detect_kappa, format_number, Column, Dataset, Table};
pub use density::{
    cholesky_corr_constrain, cholesky_corr_free, log_likelihood, log_posterior_and_gradient,
    CorrTransform, Unpacked,
};
pub use design::{
    build_design, BlockKind, DesignBundle, NewDesign, ParamBlock, ParameterLayout, RandomKind,
    RandomTerm, ResolvedPriors,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("unknown column '{0}'")]
    UnknownColumn(String),
    #[error("column '{0}' is not numeric")]
    NotNumeric(String),
    #[error("missing value in column '{column}' at row {row}")]
    MissingValue { column: String, row: usize },
    #[error("factor '{0}' has fewer than two observed levels")]
    SingleLevelFactor(String),
    #[error("reference level '{level}' not observed in factor '{column}'")]
    UnknownReference { column: String, level: String },
    #[error("level '{level}' of factor '{column}' was not seen during fitting")]
    UnknownLevel { column: String, level: String },
    #[error("model specification: {0}")]
    Parse(String),
    #[error("invalid prior: {0}")]
    InvalidPrior(String),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("non-finite parameter at index {0}")]
    NonFiniteParameter(usize),
    #[error(transparent)]
    Smooth(#[from] SmoothError),
    #[error(transparent)]
    Simplex(#[from] SimplexError),
    #[error("I/O error: {0}")]
    Io(String),
    #[error("CSV error: {0}")]
    Csv(String),
}

/// One additive term, shared by all ilr coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Term {
    Intercept,
    Linear(String),
    Factor { covariate: String, reference: String },
    RandomIntercept(String),
    /// Univariate P-spline; an empty `domain` is filled from the data.
    Smooth(SmoothSpec),
    /// Tensor-product P-spline over two covariates.
    Tensor(SmoothSpec),
}

impl Term {
    pub fn covariates(&self) -> Vec<&str> {
        match self {
            Term::Intercept => vec![],
            Term::Linear(c) | Term::RandomIntercept(c) => vec![c.as_str()],
            Term::Factor { covariate, .. } => vec![covariate.as_str()],
            Term::Smooth(s) | Term::Tensor(s) => s.covariates.iter().map(|c| c.as_str()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriorSpec {
    /// Sd of the zero-mean normal prior on unpenalized coefficients.
    pub fixed_sd: f64,
    /// Half-t degrees of freedom for residual and random-intercept sds.
    pub sd_df: f64,
    /// Half-t scale; `None` uses `max(2.5, sd of the ilr coordinate)`.
    pub sd_scale: Option<f64>,
    pub lkj_eta: f64,
    /// Half-t degrees of freedom for smoothing sds.
    pub smooth_sd_df: f64,
    pub smooth_sd_scale: Option<f64>,
}

impl Default for PriorSpec {
    fn default() -> Self {
        Self {
            fixed_sd: 10.0,
            sd_df: 3.0,
            sd_scale: None,
            lkj_eta: 1.0,
            smooth_sd_df: 3.0,
            smooth_sd_scale: None,
        }
    }
}

impl PriorSpec {
    pub fn validate(&self) -> Result<(), ModelError> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(ModelError::InvalidPrior(format!("{name} must be positive, got {v}")))
            }
        };
        positive("fixed_sd", self.fixed_sd)?;
        positive("sd_df", self.sd_df)?;
        positive("lkj_eta", self.lkj_eta)?;
        positive("smooth_sd_df", self.smooth_sd_df)?;
        if let Some(s) = self.sd_scale {
            positive("sd_scale", s)?;
        }
        if let Some(s) = self.smooth_sd_scale {
            positive("smooth_sd_scale", s)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    /// Number of composition parts `D`.
    pub dim: usize,
    pub terms: Vec<Term>,
    pub priors: PriorSpec,
}

impl ModelSpec {
    /// Parse a `+`-separated term list. The intercept is always included.
    ///
    /// Term syntax: `x`, `factor(x, ref=L)`, `re(g)`,
    /// `s(x, k=10, degree=3, order=2)`, `te(x1, x2, k=5)`. A lone `1` or an
    /// empty string gives the intercept-only model.
    pub fn parse(dim: usize, formula: &str, priors: PriorSpec) -> Result<Self, ModelError> {
        let mut terms = vec![Term::Intercept];
        for raw in split_top_level(formula, '+')? {
            let t = raw.trim();
            if t.is_empty() || t == "1" {
                continue;
            }
            terms.push(parse_term(t)?);
        }
        let spec = Self { dim, terms, priors };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.dim < 2 {
            return Err(ModelError::Parse(format!("composition dimension {} < 2", self.dim)));
        }
        let intercepts = self.terms.iter().filter(|t| matches!(t, Term::Intercept)).count();
        if intercepts != 1 {
            return Err(ModelError::Parse(format!("expected one intercept, found {intercepts}")));
        }
        for t in &self.terms {
            match t {
                Term::Factor { reference, covariate } if reference.is_empty() => {
                    return Err(ModelError::Parse(format!(
                        "factor '{covariate}' needs a reference level"
                    )));
                }
                Term::Smooth(s) if s.covariates.len() != 1 => {
                    return Err(ModelError::Parse("s() takes one covariate".into()));
                }
                Term::Tensor(s) if s.covariates.len() != 2 => {
                    return Err(ModelError::Parse("te() takes two covariates".into()));
                }
                _ => {}
            }
        }
        self.priors.validate()
    }

    /// Check every referenced covariate against a column list.
    pub fn check_columns(&self, names: &[String]) -> Result<(), ModelError> {
        for t in &self.terms {
            for c in t.covariates() {
                if !names.iter().any(|n| n == c) {
                    return Err(ModelError::UnknownColumn(c.to_string()));
                }
            }
        }
        Ok(())
    }
}

fn split_top_level(s: &str, sep: char) -> Result<Vec<String>, ModelError> {
    let mut out = Vec::new();
    let mut depth = 0i32;
    let mut current = String::new();
    for ch in s.chars() {
        match ch {
            '(' => depth += 1,
            ')' => {
                depth -= 1;
                if depth < 0 {
                    return Err(ModelError::Parse(format!("unbalanced parentheses in '{s}'")));
                }
            }
            _ => {}
        }
        if ch == sep && depth == 0 {
            out.push(std::mem::take(&mut current));
        } else {
            current.push(ch);
        }
    }
    if depth != 0 {
        return Err(ModelError::Parse(format!("unbalanced parentheses in '{s}'")));
    }
    out.push(current);
    Ok(out)
}

fn is_identifier(s: &str) -> bool {
    !s.is_empty()
        && s.chars().all(|c| c.is_alphanumeric() || c == '_' || c == '.')
        && !s.chars().next().unwrap().is_ascii_digit()
}

fn parse_term(t: &str) -> Result<Term, ModelError> {
    let Some(open) = t.find('(') else {
        if is_identifier(t) {
            return Ok(Term::Linear(t.to_string()));
        }
        return Err(ModelError::Parse(format!("cannot parse term '{t}'")));
    };
    if !t.ends_with(')') {
        return Err(ModelError::Parse(format!("cannot parse term '{t}'")));
    }
    let head = t[..open].trim();
    let args = split_top_level(&t[open + 1..t.len() - 1], ',')?;
    let mut positional = Vec::new();
    let mut named = Vec::new();
    for a in args {
        let a = a.trim().to_string();
        if let Some((k, v)) = a.split_once('=') {
            named.push((k.trim().to_string(), v.trim().to_string()));
        } else if is_identifier(&a) {
            positional.push(a);
        } else {
            return Err(ModelError::Parse(format!("bad argument '{a}' in '{t}'")));
        }
    }
    let allow = |keys: &[&str]| -> Result<(), ModelError> {
        for (k, _) in &named {
            if !keys.contains(&k.as_str()) {
                return Err(ModelError::Parse(format!("unknown option '{k}' in '{t}'")));
            }
        }
        Ok(())
    };
    let int_opt = |key: &str, default: usize| -> Result<usize, ModelError> {
        match named.iter().find(|(k, _)| k == key) {
            Some((_, v)) => v
                .parse()
                .map_err(|_| ModelError::Parse(format!("option {key}={v} is not an integer"))),
            None => Ok(default),
        }
    };
    match head {
        "factor" => {
            allow(&["ref"])?;
            if positional.len() != 1 {
                return Err(ModelError::Parse(format!("factor() takes one column: '{t}'")));
            }
            let reference = named
                .iter()
                .find(|(k, _)| k == "ref")
                .map(|(_, v)| v.trim_matches('"').to_string())
                .ok_or_else(|| ModelError::Parse(format!("factor needs ref=<level>: '{t}'")))?;
            Ok(Term::Factor {
                covariate: positional.remove(0),
                reference,
            })
        }
        "re" => {
            allow(&[])?;
            if positional.len() != 1 {
                return Err(ModelError::Parse(format!("re() takes one column: '{t}'")));
            }
            Ok(Term::RandomIntercept(positional.remove(0)))
        }
        "s" | "te" => {
            allow(&["k", "degree", "order"])?;
            let want = if head == "s" { 1 } else { 2 };
            if positional.len() != want {
                return Err(ModelError::Parse(format!("{head}() takes {want} column(s): '{t}'")));
            }
            let spec = SmoothSpec {
                covariates: positional,
                k: int_opt("k", if head == "s" { 10 } else { 5 })?,
                degree: int_opt("degree", 3)?,
                penalty_order: int_opt("order", 2)?,
                domain: Vec::new(),
            };
            Ok(if head == "s" {
                Term::Smooth(spec)
            } else {
                Term::Tensor(spec)
            })
        }
        other => Err(ModelError::Parse(format!("unknown term function '{other}'"))),
    }
}
