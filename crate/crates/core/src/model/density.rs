//! Log-likelihood, log-posterior and its analytic gradient.

use std::f64::consts::PI;

use nalgebra::DMatrix;

use crate::smooth::RandomPenalty;

use super::design::{DesignBundle, NewDesign, RandomKind};
use super::ModelError;

/// Cholesky factor of a correlation matrix built from unconstrained values.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrTransform {
    pub cholesky: DMatrix<f64>,
    pub log_jacobian: f64,
}

/// `ln(1 - tanh(y)^2)` without cancellation for large `|y|`.
fn log_sech2(y: f64) -> f64 {
    let a = y.abs();
    2.0 * (2f64.ln() - a - (-2.0 * a).exp().ln_1p())
}

/// Canonical-partial-correlation map from `q(q-1)/2` reals to the lower
/// Cholesky factor of a `q x q` correlation matrix, with the log-Jacobian.
/// Values are consumed row by row of the factor.
pub fn cholesky_corr_constrain(y: &[f64], q: usize) -> CorrTransform {
    debug_assert_eq!(y.len(), q * (q - 1) / 2);
    let mut l = DMatrix::zeros(q, q);
    l[(0, 0)] = 1.0;
    let mut log_jacobian = 0.0;
    let mut k = 0;
    for i in 1..q {
        let mut s: f64 = 0.0;
        for j in 0..i {
            let z = y[k].tanh();
            log_jacobian += log_sech2(y[k]);
            k += 1;
            let rest = (1.0 - s).max(0.0);
            if j >= 1 {
                log_jacobian += 0.5 * rest.ln();
            }
            l[(i, j)] = z * rest.sqrt();
            s += l[(i, j)] * l[(i, j)];
        }
        l[(i, i)] = (1.0 - s).max(0.0).sqrt();
    }
    CorrTransform {
        cholesky: l,
        log_jacobian,
    }
}

/// Inverse of [`cholesky_corr_constrain`].
pub fn cholesky_corr_free(l: &DMatrix<f64>) -> Vec<f64> {
    let q = l.nrows();
    let mut y = Vec::with_capacity(q * (q - 1) / 2);
    for i in 1..q {
        let mut s: f64 = 0.0;
        for j in 0..i {
            let z = l[(i, j)] / (1.0 - s).sqrt();
            y.push(z.atanh());
            s += l[(i, j)] * l[(i, j)];
        }
    }
    y
}

/// Gradient with respect to `y` of `f(L(y)) + log_jacobian(y)`, given
/// `g_l = df/dL` (lower triangle used).
fn cholesky_corr_backprop(y: &[f64], l: &DMatrix<f64>, g_l: &DMatrix<f64>) -> Vec<f64> {
    let q = l.nrows();
    let mut grad = vec![0.0; y.len()];
    let mut s = vec![0.0; q + 1];
    for i in 1..q {
        let base = i * (i - 1) / 2;
        for j in 0..i {
            s[j + 1] = s[j] + l[(i, j)] * l[(i, j)];
        }
        let mut gs = if l[(i, i)] > 0.0 {
            g_l[(i, i)] * (-0.5 / l[(i, i)])
        } else {
            0.0
        };
        for j in (0..i).rev() {
            let z = y[base + j].tanh();
            let rest = 1.0 - s[j];
            let root = rest.sqrt();
            let gl = g_l[(i, j)] + gs * 2.0 * l[(i, j)];
            let gz = gl * root;
            gs += gl * z * (-0.5 / root);
            if j >= 1 {
                gs += -0.5 / rest;
            }
            grad[base + j] = gz * (1.0 - z * z) - 2.0 * z;
        }
    }
    grad
}

/// Unnormalised half-t log density and its derivative at `x > 0`.
fn half_t(x: f64, df: f64, scale: f64) -> (f64, f64) {
    let v = df * scale * scale;
    (
        -0.5 * (df + 1.0) * (x * x / v).ln_1p(),
        -(df + 1.0) * x / (v + x * x),
    )
}

fn tensor_sd(a: f64, b: f64, tau1: f64, tau2: f64) -> f64 {
    (a / (tau1 * tau1) + b / (tau2 * tau2)).powf(-0.5)
}

/// Parameters in the form used by the linear predictor.
#[derive(Debug, Clone, PartialEq)]
pub struct Unpacked {
    /// Effective coefficients `p x q` (penalized columns already scaled).
    pub coef: DMatrix<f64>,
    /// Per random-intercept term, per coordinate, the group effects.
    pub group_effects: Vec<Vec<Vec<f64>>>,
    pub sigma: Vec<f64>,
    /// Cholesky factor of the residual correlation matrix.
    pub chol_corr: DMatrix<f64>,
}

impl Unpacked {
    pub fn correlation(&self) -> DMatrix<f64> {
        &self.chol_corr * self.chol_corr.transpose()
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        let q = self.sigma.len();
        let r = self.correlation();
        DMatrix::from_fn(q, q, |i, j| self.sigma[i] * r[(i, j)] * self.sigma[j])
    }

    /// Lower Cholesky factor of the covariance, `diag(σ) L_R`.
    pub fn chol_cov(&self) -> DMatrix<f64> {
        let q = self.sigma.len();
        DMatrix::from_fn(q, q, |i, j| self.sigma[i] * self.chol_corr[(i, j)])
    }
}

fn check_finite(values: &[f64]) -> Result<(), ModelError> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(ModelError::NonFiniteParameter(i)),
        None => Ok(()),
    }
}

fn check_ilr(bundle: &DesignBundle, ilr: &DMatrix<f64>) -> Result<(), ModelError> {
    if ilr.nrows() != bundle.n || ilr.ncols() != bundle.q {
        return Err(ModelError::DimensionMismatch {
            expected: bundle.n * bundle.q,
            found: ilr.nrows() * ilr.ncols(),
        });
    }
    Ok(())
}

/// Forward and back substitution with a lower-triangular factor.
fn solve_lower(l: &DMatrix<f64>, r: &[f64], w: &mut [f64]) {
    for i in 0..r.len() {
        let mut v = r[i];
        for j in 0..i {
            v -= l[(i, j)] * w[j];
        }
        w[i] = v / l[(i, i)];
    }
}

fn solve_upper_t(l: &DMatrix<f64>, w: &[f64], g: &mut [f64]) {
    let q = w.len();
    for i in (0..q).rev() {
        let mut v = w[i];
        for j in i + 1..q {
            v -= l[(j, i)] * g[j];
        }
        g[i] = v / l[(i, i)];
    }
}

impl DesignBundle {
    fn check_params(&self, theta: &[f64]) -> Result<(), ModelError> {
        if theta.len() != self.layout.total {
            return Err(ModelError::DimensionMismatch {
                expected: self.layout.total,
                found: theta.len(),
            });
        }
        check_finite(theta)
    }

    fn unpack_with(&self, values: &[f64], sd_of: impl Fn(f64) -> f64) -> Unpacked {
        let lay = &self.layout;
        let q = self.q;
        let mut coef = DMatrix::zeros(self.p(), q);
        for d in 0..q {
            for j in 0..self.p_fixed {
                coef[(j, d)] = values[lay.fixed[d] + j];
            }
        }
        let mut group_effects = Vec::new();
        for (t, term) in self.random_terms.iter().enumerate() {
            let mut per_coord = Vec::new();
            for d in 0..q {
                let z = &values[lay.raw[t][d]..lay.raw[t][d] + term.ncoef()];
                let sds: Vec<f64> = (0..term.nsd())
                    .map(|i| sd_of(values[lay.sd[t][d] + i]))
                    .collect();
                match &term.kind {
                    RandomKind::Intercept { .. } => {
                        per_coord.push(z.iter().map(|v| sds[0] * v).collect());
                    }
                    RandomKind::Smooth {
                        offset, penalty, ..
                    } => {
                        for (j, zj) in z.iter().enumerate() {
                            let scale = match penalty {
                                RandomPenalty::Iid => sds[0],
                                RandomPenalty::Tensor { first, second } => {
                                    tensor_sd(first[j], second[j], sds[0], sds[1])
                                }
                            };
                            coef[(offset + j, d)] = scale * zj;
                        }
                    }
                }
            }
            if matches!(term.kind, RandomKind::Intercept { .. }) {
                group_effects.push(per_coord);
            }
        }
        let sigma = (0..q).map(|d| sd_of(values[lay.sigma + d])).collect();
        Unpacked {
            coef,
            group_effects,
            sigma,
            chol_corr: DMatrix::zeros(q, q),
        }
    }

    /// Unpack an unconstrained parameter vector.
    pub fn unpack(&self, theta: &[f64]) -> Result<Unpacked, ModelError> {
        self.check_params(theta)?;
        let mut u = self.unpack_with(theta, f64::exp);
        let lay = &self.layout;
        u.chol_corr =
            cholesky_corr_constrain(&theta[lay.corr..lay.corr + lay.ncorr()], self.q).cholesky;
        Ok(u)
    }

    /// Unpack a constrained draw (sds and correlations on their natural scale).
    pub fn unpack_constrained(&self, values: &[f64]) -> Result<Unpacked, ModelError> {
        self.check_params(values)?;
        let mut u = self.unpack_with(values, |v| v);
        let r = self.correlation_from_rho(values);
        u.chol_corr = r
            .cholesky()
            .ok_or(ModelError::NonFiniteParameter(self.layout.corr))?
            .l();
        Ok(u)
    }

    fn correlation_from_rho(&self, values: &[f64]) -> DMatrix<f64> {
        let q = self.q;
        let mut r = DMatrix::identity(q, q);
        let mut k = self.layout.corr;
        for i in 0..q {
            for j in i + 1..q {
                r[(i, j)] = values[k];
                r[(j, i)] = values[k];
                k += 1;
            }
        }
        r
    }

    /// Map an unconstrained vector to the reported scale: exp of log-sds and
    /// the upper-triangle correlations `rho_ij`.
    pub fn constrain(&self, theta: &[f64]) -> Vec<f64> {
        let lay = &self.layout;
        let mut out = theta.to_vec();
        for (t, per_term) in lay.sd.iter().enumerate() {
            let len = self.random_terms[t].nsd();
            for &off in per_term {
                for v in &mut out[off..off + len] {
                    *v = v.exp();
                }
            }
        }
        for v in &mut out[lay.sigma..lay.sigma + self.q] {
            *v = v.exp();
        }
        let l = cholesky_corr_constrain(&theta[lay.corr..lay.corr + lay.ncorr()], self.q).cholesky;
        let r = &l * l.transpose();
        let mut k = lay.corr;
        for i in 0..self.q {
            for j in i + 1..self.q {
                out[k] = r[(i, j)];
                k += 1;
            }
        }
        out
    }

    /// Inverse of [`DesignBundle::constrain`].
    pub fn unconstrain(&self, values: &[f64]) -> Result<Vec<f64>, ModelError> {
        self.check_params(values)?;
        let lay = &self.layout;
        let mut out = values.to_vec();
        for (t, per_term) in lay.sd.iter().enumerate() {
            let len = self.random_terms[t].nsd();
            for &off in per_term {
                for v in &mut out[off..off + len] {
                    *v = v.ln();
                }
            }
        }
        for v in &mut out[lay.sigma..lay.sigma + self.q] {
            *v = v.ln();
        }
        let r = self.correlation_from_rho(values);
        let l = r
            .cholesky()
            .ok_or(ModelError::NonFiniteParameter(lay.corr))?
            .l();
        out[lay.corr..lay.corr + lay.ncorr()].copy_from_slice(&cholesky_corr_free(&l));
        check_finite(&out)?;
        Ok(out)
    }

    /// Linear predictor `N x q` for a design.
    pub fn linear_predictor(&self, u: &Unpacked, nd: &NewDesign) -> DMatrix<f64> {
        let mut eta = &nd.design * &u.coef;
        for (t, effects) in u.group_effects.iter().enumerate() {
            for (n, idx) in nd.group_index[t].iter().enumerate() {
                if let Some(l) = idx {
                    for (d, e) in effects.iter().enumerate() {
                        eta[(n, d)] += e[*l];
                    }
                }
            }
        }
        eta
    }

    /// Per-observation multivariate normal log densities.
    pub fn pointwise_log_lik(
        &self,
        u: &Unpacked,
        eta: &DMatrix<f64>,
        ilr: &DMatrix<f64>,
    ) -> Vec<f64> {
        let q = self.q;
        let l = u.chol_cov();
        let log_det: f64 = (0..q).map(|i| l[(i, i)].ln()).sum();
        let constant = -0.5 * q as f64 * (2.0 * PI).ln() - log_det;
        let mut r = vec![0.0; q];
        let mut w = vec![0.0; q];
        (0..ilr.nrows())
            .map(|n| {
                for d in 0..q {
                    r[d] = ilr[(n, d)] - eta[(n, d)];
                }
                solve_lower(&l, &r, &mut w);
                constant - 0.5 * w.iter().map(|v| v * v).sum::<f64>()
            })
            .collect()
    }

    /// Log posterior (up to a constant) and, when `grad` is given, its
    /// gradient with respect to the unconstrained parameters.
    pub fn log_posterior_into(
        &self,
        theta: &[f64],
        ilr: &DMatrix<f64>,
        mut grad: Option<&mut [f64]>,
    ) -> Result<f64, ModelError> {
        self.check_params(theta)?;
        check_ilr(self, ilr)?;
        let lay = &self.layout;
        let pr = &self.priors;
        let (n, q, p) = (self.n, self.q, self.p());
        let mut g = vec![0.0; lay.total];
        let mut lp = 0.0;

        let mut coef = DMatrix::zeros(p, q);
        let inv_var = 1.0 / (pr.fixed_sd * pr.fixed_sd);
        for d in 0..q {
            for j in 0..self.p_fixed {
                let b = theta[lay.fixed[d] + j];
                coef[(j, d)] = b;
                lp -= 0.5 * b * b * inv_var;
                g[lay.fixed[d] + j] = -b * inv_var;
            }
        }

        // sds, raw effects and their priors
        let mut sds: Vec<Vec<Vec<f64>>> = Vec::new();
        for (t, term) in self.random_terms.iter().enumerate() {
            let (df, scales) = match term.kind {
                RandomKind::Intercept { .. } => (pr.re_df, &pr.re_scale),
                RandomKind::Smooth { .. } => (pr.smooth_df, &pr.smooth_scale),
            };
            let mut per_coord = Vec::new();
            for d in 0..q {
                let mut s = Vec::new();
                for i in 0..term.nsd() {
                    let k = lay.sd[t][d] + i;
                    let x = theta[k].exp();
                    let (v, dv) = half_t(x, df, scales[d]);
                    lp += v + theta[k];
                    g[k] = x * dv + 1.0;
                    s.push(x);
                }
                for j in 0..term.ncoef() {
                    let z = theta[lay.raw[t][d] + j];
                    lp -= 0.5 * z * z;
                    g[lay.raw[t][d] + j] = -z;
                }
                if let RandomKind::Smooth {
                    offset, penalty, ..
                } = &term.kind
                {
                    for j in 0..term.ncoef() {
                        let z = theta[lay.raw[t][d] + j];
                        let scale = match penalty {
                            RandomPenalty::Iid => s[0],
                            RandomPenalty::Tensor { first, second } => {
                                tensor_sd(first[j], second[j], s[0], s[1])
                            }
                        };
                        coef[(offset + j, d)] = scale * z;
                    }
                }
                per_coord.push(s);
            }
            sds.push(per_coord);
        }

        let mut eta = &self.design * &coef;
        for (t, term) in self.random_terms.iter().enumerate() {
            if let RandomKind::Intercept { index, .. } = &term.kind {
                for d in 0..q {
                    let sd = sds[t][d][0];
                    let base = lay.raw[t][d];
                    for (row, &l) in index.iter().enumerate() {
                        eta[(row, d)] += sd * theta[base + l];
                    }
                }
            }
        }

        // residual covariance
        let mut sigma = vec![0.0; q];
        for d in 0..q {
            let k = lay.sigma + d;
            sigma[d] = theta[k].exp();
            let (v, dv) = half_t(sigma[d], pr.sigma_df, pr.sigma_scale[d]);
            lp += v + theta[k];
            g[k] = sigma[d] * dv + 1.0;
        }
        let y_corr = &theta[lay.corr..lay.corr + lay.ncorr()];
        let ct = cholesky_corr_constrain(y_corr, q);
        let l_r = &ct.cholesky;
        lp += ct.log_jacobian;
        let mut lkj_coef = vec![0.0; q];
        for i in 1..q {
            lkj_coef[i] = (q - i - 1) as f64 + 2.0 * pr.lkj_eta - 2.0;
            lp += lkj_coef[i] * l_r[(i, i)].ln();
        }
        let l_s = DMatrix::from_fn(q, q, |i, j| sigma[i] * l_r[(i, j)]);
        if (0..q).any(|i| !(l_s[(i, i)] > 0.0)) {
            return Ok(f64::NEG_INFINITY);
        }

        // likelihood
        let mut g_eta = DMatrix::zeros(n, q);
        let mut a = DMatrix::<f64>::zeros(q, q);
        let mut r = vec![0.0; q];
        let mut w = vec![0.0; q];
        let mut gv = vec![0.0; q];
        let mut quad = 0.0;
        for row in 0..n {
            for d in 0..q {
                r[d] = ilr[(row, d)] - eta[(row, d)];
            }
            solve_lower(&l_s, &r, &mut w);
            quad += w.iter().map(|v| v * v).sum::<f64>();
            if grad.is_some() {
                solve_upper_t(&l_s, &w, &mut gv);
                for i in 0..q {
                    g_eta[(row, i)] = gv[i];
                    for j in 0..=i {
                        a[(i, j)] += gv[i] * w[j];
                    }
                }
            }
        }
        let log_det: f64 = (0..q).map(|i| l_s[(i, i)].ln()).sum();
        let ll = -0.5 * quad - n as f64 * log_det - 0.5 * (n * q) as f64 * (2.0 * PI).ln();
        lp += ll;

        let Some(out) = grad.as_deref_mut() else {
            return Ok(lp);
        };

        let g_coef = self.design.tr_mul(&g_eta);
        for d in 0..q {
            for j in 0..self.p_fixed {
                g[lay.fixed[d] + j] += g_coef[(j, d)];
            }
        }
        for (t, term) in self.random_terms.iter().enumerate() {
            for d in 0..q {
                let s = &sds[t][d];
                let zb = lay.raw[t][d];
                let sb = lay.sd[t][d];
                match &term.kind {
                    RandomKind::Intercept { index, .. } => {
                        let mut g_sd = 0.0;
                        for (row, &l) in index.iter().enumerate() {
                            let ge = g_eta[(row, d)];
                            g[zb + l] += s[0] * ge;
                            g_sd += ge * theta[zb + l];
                        }
                        g[sb] += s[0] * g_sd;
                    }
                    RandomKind::Smooth {
                        offset, penalty, ..
                    } => match penalty {
                        RandomPenalty::Iid => {
                            let mut g_tau = 0.0;
                            for j in 0..term.ncoef() {
                                let gc = g_coef[(offset + j, d)];
                                let z = theta[zb + j];
                                g[zb + j] += s[0] * gc;
                                g_tau += z * gc;
                            }
                            g[sb] += s[0] * g_tau;
                        }
                        RandomPenalty::Tensor { first, second } => {
                            let (t1, t2) = (s[0], s[1]);
                            for j in 0..term.ncoef() {
                                let gc = g_coef[(offset + j, d)];
                                let z = theta[zb + j];
                                let sdj = tensor_sd(first[j], second[j], t1, t2);
                                g[zb + j] += sdj * gc;
                                let cube = sdj * sdj * sdj;
                                g[sb] += gc * z * cube * first[j] / (t1 * t1);
                                g[sb + 1] += gc * z * cube * second[j] / (t2 * t2);
                            }
                        }
                    },
                }
            }
        }

        // covariance gradient: dℓ/dL_Σ = lower(Σ_n g wᵀ) - N diag(1/L_ii)
        let mut g_ls = a;
        for i in 0..q {
            g_ls[(i, i)] -= n as f64 / l_s[(i, i)];
        }
        let mut g_lr = DMatrix::zeros(q, q);
        for i in 0..q {
            let mut g_sigma = 0.0;
            for j in 0..=i {
                g_sigma += g_ls[(i, j)] * l_r[(i, j)];
                g_lr[(i, j)] = g_ls[(i, j)] * sigma[i];
            }
            g[lay.sigma + i] += sigma[i] * g_sigma;
        }
        for i in 1..q {
            g_lr[(i, i)] += lkj_coef[i] / l_r[(i, i)];
        }
        let g_y = cholesky_corr_backprop(y_corr, l_r, &g_lr);
        for (k, v) in g_y.into_iter().enumerate() {
            g[lay.corr + k] += v;
        }
        out.copy_from_slice(&g);
        Ok(lp)
    }
}

/// Multivariate normal log-likelihood of `ilr` at unconstrained `params`.
pub fn log_likelihood(
    params: &[f64],
    bundle: &DesignBundle,
    ilr: &DMatrix<f64>,
) -> Result<f64, ModelError> {
    check_ilr(bundle, ilr)?;
    let u = bundle.unpack(params)?;
    let eta = bundle.linear_predictor(&u, &bundle.training_design());
    Ok(crate::stats::pairwise_sum(&bundle.pointwise_log_lik(&u, &eta, ilr)))
}

/// Log posterior (likelihood + priors + log-Jacobians) and its gradient.
pub fn log_posterior_and_gradient(
    params: &[f64],
    bundle: &DesignBundle,
    ilr: &DMatrix<f64>,
) -> Result<(f64, Vec<f64>), ModelError> {
    let mut grad = vec![0.0; params.len()];
    let lp = bundle.log_posterior_into(params, ilr, Some(&mut grad))?;
    Ok((lp, grad))
}

impl crate::hmc::Target for DesignBundle {
    fn dim(&self) -> usize {
        self.layout.total
    }

    fn log_density_gradient(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        match self.log_posterior_into(x, &self.ilr, Some(grad)) {
            Ok(v) if v.is_finite() => v,
            _ => f64::NEG_INFINITY,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ilr::{IlrBasis, IlrCoordinates};
    use crate::model::{build_design, fixtures, Column, Dataset, ModelSpec, PriorSpec, Table};
    use crate::simplex::{Composition, CompositionSample};
    use proptest::prelude::*;

    fn bundle(data: &Dataset, formula: &str) -> DesignBundle {
        let spec = ModelSpec::parse(data.dim(), formula, PriorSpec::default()).unwrap();
        build_design(data, &spec).unwrap()
    }

    fn normal_logpdf(x: f64, mu: f64, sd: f64) -> f64 {
        let r = (x - mu) / sd;
        -0.5 * (2.0 * PI).ln() - sd.ln() - 0.5 * r * r
    }

    /// Fixed-effects mean computed directly from the flat vector.
    fn fixed_mean(b: &DesignBundle, theta: &[f64]) -> DMatrix<f64> {
        DMatrix::from_fn(b.n, b.q, |n, d| {
            (0..b.p_fixed)
                .map(|j| b.design[(n, j)] * theta[b.layout.fixed[d] + j])
                .sum()
        })
    }

    #[test]
    fn standard_normal_per_observation() {
        let comps = vec![Composition::uniform(2, 1.0).unwrap(); 6];
        let data = Dataset::new(
            fixtures::parts(2),
            CompositionSample::new(comps).unwrap(),
            Table::new(),
        )
        .unwrap();
        let b = bundle(&data, "1");
        let theta = vec![0.0; b.layout.total];
        let ll = log_likelihood(&theta, &b, &b.ilr).unwrap();
        assert!((ll - 6.0 * -0.5 * (2.0 * PI).ln()).abs() < 1e-12);
    }

    #[test]
    fn identity_correlation_is_independent_sum() {
        let data = fixtures::small(15, 3, 11);
        let b = bundle(&data, "x1 + factor(f, ref=a)");
        let mut theta = fixtures::random_theta(b.layout.total, 1, 0.7);
        theta[b.layout.corr] = 0.0;
        let mu = fixed_mean(&b, &theta);
        let mut expected = 0.0;
        for n in 0..b.n {
            for d in 0..b.q {
                let sd = theta[b.layout.sigma + d].exp();
                expected += normal_logpdf(b.ilr[(n, d)], mu[(n, d)], sd);
            }
        }
        let ll = log_likelihood(&theta, &b, &b.ilr).unwrap();
        assert!((ll - expected).abs() < 1e-10);
    }

    #[test]
    fn matches_explicit_inverse() {
        let data = fixtures::small(4, 3, 12);
        let b = bundle(&data, "x1 + x2");
        let theta = fixtures::random_theta(b.layout.total, 2, 0.8);
        let values = b.constrain(&theta);
        let sigma: Vec<f64> = (0..2).map(|d| values[b.layout.sigma + d]).collect();
        let rho = values[b.layout.corr];
        let cov = DMatrix::from_row_slice(
            2,
            2,
            &[
                sigma[0] * sigma[0],
                rho * sigma[0] * sigma[1],
                rho * sigma[0] * sigma[1],
                sigma[1] * sigma[1],
            ],
        );
        let inv = cov.clone().try_inverse().unwrap();
        let det = cov.determinant();
        let mu = fixed_mean(&b, &theta);
        let mut expected = 0.0;
        for n in 0..4 {
            let r = (b.ilr.row(n) - mu.row(n)).transpose();
            let quad = (r.transpose() * &inv * &r)[(0, 0)];
            expected += -(2.0 * PI).ln() - 0.5 * det.ln() - 0.5 * quad;
        }
        let ll = log_likelihood(&theta, &b, &b.ilr).unwrap();
        assert!((ll - expected).abs() < 1e-10, "{ll} vs {expected}");
    }

    #[test]
    fn two_parts_reduce_to_univariate_regression() {
        let data = fixtures::small(25, 2, 13);
        let b = bundle(&data, "x1 + x2");
        let theta = fixtures::random_theta(b.layout.total, 3, 1.0);
        let x1 = data.covariates.numeric("x1").unwrap();
        let x2 = data.covariates.numeric("x2").unwrap();
        let sd = theta[b.layout.sigma].exp();
        let expected: f64 = (0..b.n)
            .map(|n| {
                let mu = theta[0] + theta[1] * x1[n] + theta[2] * x2[n];
                normal_logpdf(b.ilr[(n, 0)], mu, sd)
            })
            .sum();
        let ll = log_likelihood(&theta, &b, &b.ilr).unwrap();
        assert!((ll - expected).abs() < 1e-10);
    }

    #[test]
    fn row_permutation_invariance() {
        let data = fixtures::small(30, 4, 14);
        let formula = "x1 + factor(f, ref=b) + re(g) + s(x2, k=6)";
        let b = bundle(&data, formula);
        let mut rows: Vec<usize> = (0..30).collect();
        rows.reverse();
        rows.swap(3, 17);
        let permuted = bundle(&data.select_rows(&rows).unwrap(), formula);
        let theta = fixtures::random_theta(b.layout.total, 4, 0.5);
        let a = log_likelihood(&theta, &b, &b.ilr).unwrap();
        let c = log_likelihood(&theta, &permuted, &permuted.ilr).unwrap();
        assert!((a - c).abs() < 1e-10 * a.abs().max(1.0));
    }

    fn fd_check(b: &DesignBundle, theta: &[f64]) {
        let (_, grad) = log_posterior_and_gradient(theta, b, &b.ilr).unwrap();
        let h = 1e-5;
        let names = b.layout.names();
        for k in 0..theta.len() {
            let mut up = theta.to_vec();
            let mut down = theta.to_vec();
            up[k] += h;
            down[k] -= h;
            let fu = b.log_posterior_into(&up, &b.ilr, None).unwrap();
            let fd = b.log_posterior_into(&down, &b.ilr, None).unwrap();
            let numeric = (fu - fd) / (2.0 * h);
            let rel = (grad[k] - numeric).abs() / numeric.abs().max(1.0);
            assert!(rel < 1e-5, "{}: {} vs {numeric}", names[k], grad[k]);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let data = fixtures::small(40, 4, 15);
        for (i, formula) in [
            "x1 + factor(f, ref=a) + re(g) + s(x2, k=6)",
            "x2 + te(x1, x2, k=4)",
            "1",
        ]
        .iter()
        .enumerate()
        {
            let b = bundle(&data, formula);
            for seed in 0..3 {
                let theta = fixtures::random_theta(b.layout.total, 100 * i as u64 + seed, 0.5);
                fd_check(&b, &theta);
            }
        }
    }

    #[test]
    fn gradient_with_strong_correlation_and_lkj() {
        let data = fixtures::small(20, 3, 16);
        let spec = ModelSpec::parse(
            3,
            "x1",
            PriorSpec {
                lkj_eta: 3.5,
                ..PriorSpec::default()
            },
        )
        .unwrap();
        let b = build_design(&data, &spec).unwrap();
        let mut theta = fixtures::random_theta(b.layout.total, 5, 0.3);
        theta[b.layout.corr] = 1.7;
        fd_check(&b, &theta);
    }

    #[test]
    fn prior_part_has_fixed_block_mode_at_zero() {
        let data = fixtures::small(20, 3, 17);
        let b = bundle(&data, "x1 + re(g)");
        let mut theta = fixtures::random_theta(b.layout.total, 6, 0.5);
        let fixed: Vec<usize> = (0..b.q)
            .flat_map(|d| (0..b.p_fixed).map(move |j| (d, j)))
            .map(|(d, j)| b.layout.fixed[d] + j)
            .collect();
        for &k in &fixed {
            theta[k] = 0.0;
        }
        let prior = |t: &[f64]| {
            b.log_posterior_into(t, &b.ilr, None).unwrap() - log_likelihood(t, &b, &b.ilr).unwrap()
        };
        let at_zero = prior(&theta);
        for &k in &fixed {
            for delta in [-0.5, 1e-3, 2.0] {
                let mut moved = theta.clone();
                moved[k] = delta;
                assert!(prior(&moved) < at_zero);
            }
        }
    }

    #[test]
    fn profile_scan_peaks_at_supported_value() {
        // y = 0.5 + 2 x1 + small noise on one ilr coordinate
        let data = fixtures::small(80, 2, 18);
        let x1 = data.covariates.numeric("x1").unwrap().to_vec();
        let basis = IlrBasis::new(2).unwrap();
        let comps: Vec<Composition> = x1
            .iter()
            .enumerate()
            .map(|(i, x)| {
                let noise = 0.01 * ((i * 37 % 11) as f64 - 5.0);
                let v = IlrCoordinates::new(vec![0.5 + 2.0 * x + noise], 2).unwrap();
                basis.ilr_inverse(&v).unwrap()
            })
            .collect();
        let table = Table::new().with("x1", Column::Numeric(x1)).unwrap();
        let synthetic =
            Dataset::new(fixtures::parts(2), CompositionSample::new(comps).unwrap(), table).unwrap();
        let b = bundle(&synthetic, "x1");
        let mut theta = vec![0.5, 2.0, (0.03f64).ln()];
        let grid: Vec<f64> = (0..81).map(|i| -2.0 + 0.1 * i as f64).collect();
        let values: Vec<f64> = grid
            .iter()
            .map(|v| {
                theta[1] = *v;
                b.log_posterior_into(&theta, &b.ilr, None).unwrap()
            })
            .collect();
        let best = (0..values.len())
            .max_by(|a, c| values[*a].total_cmp(&values[*c]))
            .unwrap();
        assert!((grid[best] - 2.0).abs() < 0.11);
        for i in 0..best {
            assert!(values[i] < values[i + 1]);
        }
        for i in best..values.len() - 1 {
            assert!(values[i] > values[i + 1]);
        }
    }

    #[test]
    fn constrain_round_trip() {
        let data = fixtures::small(30, 4, 19);
        let b = bundle(&data, "x1 + re(g) + te(x1, x2, k=4)");
        let theta = fixtures::random_theta(b.layout.total, 7, 0.8);
        let values = b.constrain(&theta);
        let back = b.unconstrain(&values).unwrap();
        for (a, c) in theta.iter().zip(&back) {
            assert!((a - c).abs() < 1e-9);
        }
        let u = b.unpack(&theta).unwrap();
        let v = b.unpack_constrained(&values).unwrap();
        assert!((&u.coef - &v.coef).abs().max() < 1e-12);
        assert!((u.correlation() - v.correlation()).abs().max() < 1e-12);
    }

    #[test]
    fn non_finite_parameters_are_rejected() {
        let data = fixtures::small(10, 3, 20);
        let b = bundle(&data, "x1");
        let mut theta = vec![0.0; b.layout.total];
        theta[2] = f64::NAN;
        assert!(matches!(
            log_likelihood(&theta, &b, &b.ilr),
            Err(ModelError::NonFiniteParameter(2))
        ));
        assert!(matches!(
            log_likelihood(&theta[1..], &b, &b.ilr),
            Err(ModelError::DimensionMismatch { .. })
        ));
    }

    /// Strictly lower entries of the factor, row by row.
    fn lower_entries(y: &[f64], q: usize) -> Vec<f64> {
        let l = cholesky_corr_constrain(y, q).cholesky;
        (1..q).flat_map(|i| (0..i).map(move |j| (i, j))).map(|(i, j)| l[(i, j)]).collect()
    }

    #[test]
    fn log_jacobian_matches_numeric_determinant() {
        let q = 4;
        let y = fixtures::random_theta(q * (q - 1) / 2, 8, 0.9);
        let m = y.len();
        let h = 1e-6;
        let jac = DMatrix::from_fn(m, m, |r, c| {
            let mut up = y.clone();
            let mut down = y.clone();
            up[c] += h;
            down[c] -= h;
            (lower_entries(&up, q)[r] - lower_entries(&down, q)[r]) / (2.0 * h)
        });
        let numeric = jac.determinant().abs().ln();
        let analytic = cholesky_corr_constrain(&y, q).log_jacobian;
        assert!((numeric - analytic).abs() < 1e-6, "{numeric} vs {analytic}");
    }

    proptest! {
        #[test]
        fn correlation_is_spd_with_unit_diagonal(
            q in 2usize..6,
            raw in prop::collection::vec(-3.0f64..3.0, 15),
        ) {
            let y = &raw[..q * (q - 1) / 2];
            let l = cholesky_corr_constrain(y, q).cholesky;
            let r = &l * l.transpose();
            for i in 0..q {
                prop_assert!((r[(i, i)] - 1.0).abs() < 1e-10);
                for j in 0..q {
                    prop_assert!((r[(i, j)] - r[(j, i)]).abs() < 1e-10);
                }
            }
            prop_assert!(r.symmetric_eigenvalues().min() > 0.0);
            let back = cholesky_corr_free(&l);
            for (a, c) in y.iter().zip(&back) {
                prop_assert!((a - c).abs() < 1e-6 * (1.0 + a.abs()));
            }
        }
    }
}
