use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::ilr::IlrBasis;
use crate::smooth::{build_smooth, domain_from_data, RandomPenalty, SmoothBlock};
use crate::stats;

use super::{Dataset, ModelError, ModelSpec, Table, Term};

/// Prior hyperparameters after data-dependent defaults are filled in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedPriors {
    pub fixed_sd: f64,
    pub sigma_df: f64,
    /// Per ilr coordinate.
    pub sigma_scale: Vec<f64>,
    pub re_df: f64,
    pub re_scale: Vec<f64>,
    pub smooth_df: f64,
    pub smooth_scale: Vec<f64>,
    pub lkj_eta: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum RandomKind {
    /// Group effects `sd · z[level]`.
    Intercept {
        group: String,
        levels: Vec<String>,
        index: Vec<usize>,
    },
    /// Penalized smooth columns `offset..offset+ncoef` of the design.
    Smooth {
        offset: usize,
        ncoef: usize,
        penalty: RandomPenalty,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RandomTerm {
    pub label: String,
    pub kind: RandomKind,
}

impl RandomTerm {
    pub fn ncoef(&self) -> usize {
        match &self.kind {
            RandomKind::Intercept { levels, .. } => levels.len(),
            RandomKind::Smooth { ncoef, .. } => *ncoef,
        }
    }

    /// Number of standard-deviation parameters per coordinate.
    pub fn nsd(&self) -> usize {
        match &self.kind {
            RandomKind::Smooth {
                penalty: RandomPenalty::Tensor { .. },
                ..
            } => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BlockKind {
    Fixed { coord: usize },
    Raw { term: usize, coord: usize },
    LogSd { term: usize, coord: usize },
    LogSigma,
    Correlation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamBlock {
    pub kind: BlockKind,
    pub offset: usize,
    pub len: usize,
    /// Names of the constrained parameters in this block.
    pub names: Vec<String>,
}

/// Flat parameter vector layout. Unconstrained and constrained vectors have
/// the same length and block structure; sds are stored as logs in the
/// unconstrained vector and correlations as Cholesky CPC parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterLayout {
    pub q: usize,
    pub blocks: Vec<ParamBlock>,
    pub total: usize,
    pub p_fixed: usize,
    pub fixed: Vec<usize>,
    pub raw: Vec<Vec<usize>>,
    pub sd: Vec<Vec<usize>>,
    pub sigma: usize,
    pub corr: usize,
}

impl ParameterLayout {
    pub fn names(&self) -> Vec<String> {
        self.blocks.iter().flat_map(|b| b.names.iter().cloned()).collect()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.blocks.iter().find_map(|b| {
            b.names
                .iter()
                .position(|n| n == name)
                .map(|i| b.offset + i)
        })
    }

    pub fn ncorr(&self) -> usize {
        self.q * (self.q - 1) / 2
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Encoder {
    Intercept,
    Linear(String),
    Factor { covariate: String, reference: String, dummies: Vec<String> },
    RandomIntercept,
    Smooth { covariates: Vec<String>, block: Box<SmoothBlock>, random_offset: usize },
}

/// Immutable model design for one dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignBundle {
    pub n: usize,
    pub q: usize,
    pub dim: usize,
    pub kappa: f64,
    /// `N x p`: unpenalized columns first, then penalized smooth columns.
    pub design: DMatrix<f64>,
    pub p_fixed: usize,
    pub fixed_names: Vec<String>,
    pub random_terms: Vec<RandomTerm>,
    pub layout: ParameterLayout,
    /// Observed ilr coordinates, `N x q`.
    pub ilr: DMatrix<f64>,
    pub priors: ResolvedPriors,
    pub smooth_blocks: Vec<SmoothBlock>,
    encoders: Vec<Encoder>,
}

/// Design rows for new covariate values.
#[derive(Debug, Clone, PartialEq)]
pub struct NewDesign {
    pub design: DMatrix<f64>,
    /// Per random-intercept term (in `random_terms` order), the level index
    /// of each row; `None` means population level.
    pub group_index: Vec<Vec<Option<usize>>>,
    pub extrapolated: Vec<bool>,
}

/// Sort level labels numerically when all parse as numbers.
fn sorted_levels(labels: &[String]) -> Vec<String> {
    let mut levels: Vec<String> = labels.to_vec();
    levels.sort();
    levels.dedup();
    let numeric: Option<Vec<f64>> = levels.iter().map(|l| l.parse::<f64>().ok()).collect();
    if let Some(values) = numeric {
        let mut pairs: Vec<(f64, String)> = values.into_iter().zip(levels).collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        levels = pairs.into_iter().map(|p| p.1).collect();
    }
    levels
}

pub fn build_design(data: &Dataset, spec: &ModelSpec) -> Result<DesignBundle, ModelError> {
    spec.validate()?;
    if data.dim() != spec.dim {
        return Err(ModelError::DimensionMismatch {
            expected: spec.dim,
            found: data.dim(),
        });
    }
    spec.check_columns(data.covariates.names())?;
    let n = data.nrows();
    let q = spec.dim - 1;
    let ilr = IlrBasis::new(spec.dim)?.ilr_sample(&data.composition)?;
    let table = &data.covariates;

    let mut fixed_cols: Vec<Vec<f64>> = Vec::new();
    let mut fixed_names: Vec<String> = Vec::new();
    let mut random_cols: Vec<Vec<f64>> = Vec::new();
    let mut random_terms = Vec::new();
    let mut encoders = Vec::new();
    let mut smooth_blocks = Vec::new();

    for term in &spec.terms {
        match term {
            Term::Intercept => {
                fixed_cols.push(vec![1.0; n]);
                fixed_names.push("Intercept".into());
                encoders.push(Encoder::Intercept);
            }
            Term::Linear(c) => {
                fixed_cols.push(table.numeric(c)?.to_vec());
                fixed_names.push(c.clone());
                encoders.push(Encoder::Linear(c.clone()));
            }
            Term::Factor {
                covariate,
                reference,
            } => {
                let labels = table.labels(covariate)?;
                let levels = sorted_levels(&labels);
                if levels.len() < 2 {
                    return Err(ModelError::SingleLevelFactor(covariate.clone()));
                }
                if !levels.contains(reference) {
                    return Err(ModelError::UnknownReference {
                        column: covariate.clone(),
                        level: reference.clone(),
                    });
                }
                let dummies: Vec<String> =
                    levels.into_iter().filter(|l| l != reference).collect();
                for level in &dummies {
                    fixed_cols.push(
                        labels
                            .iter()
                            .map(|l| if l == level { 1.0 } else { 0.0 })
                            .collect(),
                    );
                    fixed_names.push(format!("{covariate}{level}"));
                }
                encoders.push(Encoder::Factor {
                    covariate: covariate.clone(),
                    reference: reference.clone(),
                    dummies,
                });
            }
            Term::RandomIntercept(group) => {
                let labels = table.labels(group)?;
                let levels = sorted_levels(&labels);
                if levels.len() < 2 {
                    return Err(ModelError::SingleLevelFactor(group.clone()));
                }
                let index = labels
                    .iter()
                    .map(|l| levels.iter().position(|v| v == l).unwrap())
                    .collect();
                random_terms.push(RandomTerm {
                    label: format!("re_{group}"),
                    kind: RandomKind::Intercept {
                        group: group.clone(),
                        levels,
                        index,
                    },
                });
                encoders.push(Encoder::RandomIntercept);
            }
            Term::Smooth(s) | Term::Tensor(s) => {
                let mut s = s.clone();
                let columns: Vec<&[f64]> = s
                    .covariates
                    .iter()
                    .map(|c| table.numeric(c))
                    .collect::<Result<_, _>>()?;
                if s.domain.is_empty() {
                    s.domain = columns
                        .iter()
                        .map(|x| domain_from_data(x))
                        .collect::<Result<_, _>>()?;
                }
                let block = build_smooth(&s, &columns)?;
                for j in 0..block.fixed_columns {
                    fixed_cols.push(block.design.column(j).iter().cloned().collect());
                    fixed_names.push(format!("{}_f{}", block.label, j + 1));
                }
                let random_offset = random_cols.len();
                for j in 0..block.random_columns {
                    random_cols.push(
                        block
                            .design
                            .column(block.fixed_columns + j)
                            .iter()
                            .cloned()
                            .collect(),
                    );
                }
                random_terms.push(RandomTerm {
                    label: block.label.clone(),
                    kind: RandomKind::Smooth {
                        offset: random_offset,
                        ncoef: block.random_columns,
                        penalty: block.penalty.clone(),
                    },
                });
                encoders.push(Encoder::Smooth {
                    covariates: s.covariates.clone(),
                    block: Box::new(block.clone()),
                    random_offset,
                });
                smooth_blocks.push(block);
            }
        }
    }

    let p_fixed = fixed_cols.len();
    // smooth offsets are relative to the random part; shift them past the fixed columns
    for t in &mut random_terms {
        if let RandomKind::Smooth { offset, .. } = &mut t.kind {
            *offset += p_fixed;
        }
    }
    let p = p_fixed + random_cols.len();
    let mut design = DMatrix::zeros(n, p);
    for (j, col) in fixed_cols.iter().chain(random_cols.iter()).enumerate() {
        for (i, v) in col.iter().enumerate() {
            design[(i, j)] = *v;
        }
    }

    let layout = make_layout(q, &fixed_names, &random_terms);
    let coord_sd: Vec<f64> = (0..q)
        .map(|d| stats::sd(&ilr.column(d).iter().cloned().collect::<Vec<_>>()))
        .collect();
    let default_scale = |given: Option<f64>| -> Vec<f64> {
        coord_sd
            .iter()
            .map(|s| given.unwrap_or_else(|| s.max(2.5)))
            .collect()
    };
    let pr = &spec.priors;
    let priors = ResolvedPriors {
        fixed_sd: pr.fixed_sd,
        sigma_df: pr.sd_df,
        sigma_scale: default_scale(pr.sd_scale),
        re_df: pr.sd_df,
        re_scale: default_scale(pr.sd_scale),
        smooth_df: pr.smooth_sd_df,
        smooth_scale: default_scale(pr.smooth_sd_scale),
        lkj_eta: pr.lkj_eta,
    };

    Ok(DesignBundle {
        n,
        q,
        dim: spec.dim,
        kappa: data.composition.kappa(),
        design,
        p_fixed,
        fixed_names,
        random_terms,
        layout,
        ilr,
        priors,
        smooth_blocks,
        encoders,
    })
}

fn make_layout(q: usize, fixed_names: &[String], random_terms: &[RandomTerm]) -> ParameterLayout {
    let mut blocks = Vec::new();
    let mut offset = 0;
    let mut push = |kind: BlockKind, names: Vec<String>, blocks: &mut Vec<ParamBlock>| {
        let start = offset;
        offset += names.len();
        blocks.push(ParamBlock {
            kind,
            offset: start,
            len: names.len(),
            names,
        });
        start
    };
    let mut fixed = Vec::new();
    for d in 0..q {
        let names = fixed_names.iter().map(|f| format!("b{}_{f}", d + 1)).collect();
        fixed.push(push(BlockKind::Fixed { coord: d }, names, &mut blocks));
    }
    let mut raw = vec![Vec::new(); random_terms.len()];
    for (t, term) in random_terms.iter().enumerate() {
        for d in 0..q {
            let names = match &term.kind {
                RandomKind::Intercept { levels, .. } => levels
                    .iter()
                    .map(|l| format!("z{}_{}[{l}]", d + 1, term.label))
                    .collect(),
                RandomKind::Smooth { ncoef, .. } => (0..*ncoef)
                    .map(|j| format!("z{}_{}[{}]", d + 1, term.label, j + 1))
                    .collect(),
            };
            raw[t].push(push(BlockKind::Raw { term: t, coord: d }, names, &mut blocks));
        }
    }
    let mut sd = vec![Vec::new(); random_terms.len()];
    for (t, term) in random_terms.iter().enumerate() {
        for d in 0..q {
            let names = if term.nsd() == 1 {
                vec![format!("sd{}_{}", d + 1, term.label)]
            } else {
                (1..=term.nsd())
                    .map(|i| format!("sd{}_{}_{i}", d + 1, term.label))
                    .collect()
            };
            sd[t].push(push(BlockKind::LogSd { term: t, coord: d }, names, &mut blocks));
        }
    }
    let sigma = push(
        BlockKind::LogSigma,
        (1..=q).map(|d| format!("sigma{d}")).collect(),
        &mut blocks,
    );
    let mut corr_names = Vec::new();
    for i in 1..=q {
        for j in i + 1..=q {
            corr_names.push(format!("rho_{i}_{j}"));
        }
    }
    let corr = push(BlockKind::Correlation, corr_names, &mut blocks);
    ParameterLayout {
        q,
        total: offset,
        blocks,
        p_fixed: fixed_names.len(),
        fixed,
        raw,
        sd,
        sigma,
        corr,
    }
}

impl DesignBundle {
    pub fn p(&self) -> usize {
        self.design.ncols()
    }

    /// Design columns of a smooth term (`s_x` or `te_a_b`): its unpenalized
    /// columns followed by its penalized ones.
    pub fn term_columns(&self, label: &str) -> Option<Vec<usize>> {
        let term = self.random_terms.iter().find(|t| t.label == label)?;
        let RandomKind::Smooth { offset, ncoef, .. } = term.kind else {
            return None;
        };
        let prefix = format!("{label}_f");
        let mut cols: Vec<usize> = self
            .fixed_names
            .iter()
            .enumerate()
            .filter(|(_, n)| {
                n.strip_prefix(&prefix)
                    .is_some_and(|rest| rest.parse::<usize>().is_ok())
            })
            .map(|(j, _)| j)
            .collect();
        cols.extend(offset..offset + ncoef);
        Some(cols)
    }

    /// Design for new covariates. Factor levels unseen in training are an
    /// error; random-intercept groups that are missing or unseen use the
    /// population level.
    pub fn new_design(&self, table: &Table) -> Result<NewDesign, ModelError> {
        let n = table.nrows();
        let mut design = DMatrix::zeros(n, self.p());
        let mut col = 0;
        let mut extrapolated = vec![false; n];
        for enc in &self.encoders {
            match enc {
                Encoder::Intercept => {
                    design.column_mut(col).fill(1.0);
                    col += 1;
                }
                Encoder::Linear(c) => {
                    for (i, v) in table.numeric(c)?.iter().enumerate() {
                        design[(i, col)] = *v;
                    }
                    col += 1;
                }
                Encoder::Factor {
                    covariate,
                    reference,
                    dummies,
                } => {
                    let labels = table.labels(covariate)?;
                    for (i, l) in labels.iter().enumerate() {
                        match dummies.iter().position(|d| d == l) {
                            Some(j) => design[(i, col + j)] = 1.0,
                            None if l == reference => {}
                            None => {
                                return Err(ModelError::UnknownLevel {
                                    column: covariate.clone(),
                                    level: l.clone(),
                                })
                            }
                        }
                    }
                    col += dummies.len();
                }
                Encoder::RandomIntercept => {}
                Encoder::Smooth {
                    covariates,
                    block,
                    random_offset,
                } => {
                    let columns: Vec<&[f64]> = covariates
                        .iter()
                        .map(|c| table.numeric(c))
                        .collect::<Result<_, _>>()?;
                    let (rows, flags) = block.design_for(&columns)?;
                    for i in 0..n {
                        for j in 0..block.fixed_columns {
                            design[(i, col + j)] = rows[(i, j)];
                        }
                        for j in 0..block.random_columns {
                            design[(i, self.p_fixed + random_offset + j)] =
                                rows[(i, block.fixed_columns + j)];
                        }
                        extrapolated[i] |= flags[i];
                    }
                    col += block.fixed_columns;
                }
            }
        }
        debug_assert_eq!(col, self.p_fixed);
        let mut group_index = Vec::new();
        for term in &self.random_terms {
            if let RandomKind::Intercept { group, levels, .. } = &term.kind {
                let idx = match table.get(group) {
                    None => vec![None; n],
                    Some(c) => c
                        .labels()
                        .iter()
                        .map(|l| levels.iter().position(|v| v == l))
                        .collect(),
                };
                group_index.push(idx);
            }
        }
        Ok(NewDesign {
            design,
            group_index,
            extrapolated,
        })
    }

    /// Training-data design in the same form as [`DesignBundle::new_design`].
    pub fn training_design(&self) -> NewDesign {
        let group_index = self
            .random_terms
            .iter()
            .filter_map(|t| match &t.kind {
                RandomKind::Intercept { index, .. } => {
                    Some(index.iter().map(|&i| Some(i)).collect())
                }
                _ => None,
            })
            .collect();
        NewDesign {
            design: self.design.clone(),
            group_index,
            extrapolated: vec![false; self.n],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::fixtures;
    use crate::model::{Column, PriorSpec};

    fn bundle(data: &Dataset, formula: &str) -> Result<DesignBundle, ModelError> {
        let spec = ModelSpec::parse(data.dim(), formula, PriorSpec::default())?;
        build_design(data, &spec)
    }

    fn rank(m: &DMatrix<f64>) -> usize {
        let sv = m.clone().svd(false, false).singular_values;
        let tol = sv.max() * 1e-10 * m.nrows().max(m.ncols()) as f64;
        sv.iter().filter(|s| **s > tol).count()
    }

    fn assert_layout_partition(layout: &ParameterLayout) {
        let mut next = 0;
        for b in &layout.blocks {
            assert_eq!(b.offset, next);
            assert_eq!(b.len, b.names.len());
            next += b.len;
        }
        assert_eq!(next, layout.total);
        let mut names = layout.names();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), layout.total);
    }

    #[test]
    fn intercept_only() {
        let data = fixtures::small(5, 3, 1);
        let b = bundle(&data, "1").unwrap();
        assert_eq!(b.design, DMatrix::from_element(5, 1, 1.0));
        assert_eq!(b.p_fixed, 1);
        assert_eq!(
            b.layout.names(),
            vec!["b1_Intercept", "b2_Intercept", "sigma1", "sigma2", "rho_1_2"]
        );
        assert_layout_partition(&b.layout);
    }

    #[test]
    fn thirteen_level_factor_drops_reference() {
        let data = fixtures::soil(65, 2);
        let b = bundle(&data, "factor(Lit, ref=1)").unwrap();
        assert_eq!(b.p_fixed, 13);
        let expected: Vec<String> = (2..=13).map(|l| format!("Lit{l}")).collect();
        assert_eq!(&b.fixed_names[1..], &expected[..]);
        // reference rows have no dummy set, others exactly one
        let lit = data.covariates.numeric("Lit").unwrap();
        for (i, l) in lit.iter().enumerate() {
            let ones: f64 = (1..13).map(|j| b.design[(i, j)]).sum();
            assert_eq!(ones, if *l == 1.0 { 0.0 } else { 1.0 });
        }
    }

    #[test]
    fn soil_model_blocks() {
        let data = fixtures::soil(200, 3);
        let b = bundle(
            &data,
            "factor(Lit, ref=1) + re(Year) + s(Elev) + s(Slope) + te(Lon, Lat, k=5)",
        )
        .unwrap();
        let labels: Vec<&str> = b.random_terms.iter().map(|t| t.label.as_str()).collect();
        assert_eq!(labels, vec!["re_Year", "s_Elev", "s_Slope", "te_Lon_Lat"]);
        assert_eq!(b.random_terms[0].ncoef(), 5);
        assert_eq!(b.random_terms[1].ncoef(), 8);
        assert_eq!(b.random_terms[3].ncoef(), 21);
        assert_eq!(b.random_terms[3].nsd(), 2);
        // intercept, 12 dummies, one linear column per smooth, three for the tensor
        assert_eq!(b.p_fixed, 1 + 12 + 1 + 1 + 3);
        assert_eq!(b.p(), b.p_fixed + 8 + 8 + 21);
        assert_eq!(rank(&b.design), b.p());
        assert!(b.layout.index_of("sd2_te_Lon_Lat_2").is_some());
        assert!(b.layout.index_of("z1_re_Year[2004]").is_some());
        assert_layout_partition(&b.layout);
    }

    #[test]
    fn centered_smooths_keep_full_rank() {
        for seed in 0..5 {
            let data = fixtures::small(60, 3, seed);
            for formula in ["x1 + s(x2, k=8)", "s(x1) + s(x2, k=6)", "te(x1, x2, k=4)"] {
                let b = bundle(&data, formula).unwrap();
                assert_eq!(rank(&b.design), b.p(), "{formula}, seed {seed}");
            }
        }
    }

    #[test]
    fn resolution_errors() {
        let data = fixtures::small(20, 3, 4);
        assert!(matches!(
            bundle(&data, "nope"),
            Err(ModelError::UnknownColumn(_))
        ));
        assert!(matches!(
            bundle(&data, "factor(f, ref=z)"),
            Err(ModelError::UnknownReference { .. })
        ));
        let one = data.select_rows(&[0, 3, 6]).unwrap();
        assert!(matches!(
            bundle(&one, "factor(f, ref=a)"),
            Err(ModelError::SingleLevelFactor(_))
        ));
    }

    #[test]
    fn new_design_reproduces_training_rows() {
        let data = fixtures::small(40, 3, 5);
        let b = bundle(&data, "x1 + factor(f, ref=a) + re(g) + s(x2, k=6)").unwrap();
        let nd = b.new_design(&data.covariates).unwrap();
        let train = b.training_design();
        assert!((&nd.design - &train.design).abs().max() < 1e-12);
        assert_eq!(nd.group_index, train.group_index);
        assert!(nd.extrapolated.iter().all(|e| !e));
    }

    #[test]
    fn new_levels_and_groups() {
        let data = fixtures::small(40, 3, 6);
        let b = bundle(&data, "factor(f, ref=a) + re(g)").unwrap();
        let rows = Table::new()
            .with("f", Column::Categorical(vec!["b".into(), "a".into()]))
            .unwrap()
            .with("g", Column::Numeric(vec![9.0, 2.0]))
            .unwrap();
        let nd = b.new_design(&rows).unwrap();
        assert_eq!(nd.group_index[0], vec![None, Some(1)]);
        assert_eq!(nd.design.row(1).iter().sum::<f64>(), 1.0);
        let unseen = Table::new()
            .with("f", Column::Categorical(vec!["q".into()]))
            .unwrap();
        assert!(matches!(
            b.new_design(&unseen),
            Err(ModelError::UnknownLevel { .. })
        ));
        let no_group = Table::new()
            .with("f", Column::Categorical(vec!["c".into()]))
            .unwrap();
        assert_eq!(b.new_design(&no_group).unwrap().group_index[0], vec![None]);
    }
}
