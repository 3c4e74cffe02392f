//! Truncated one-step ARX predictor estimation.
//!
//! The one-step predictor of order `ρ` writes `y(t) ≈ Θ ζ(t)` with the
//! lag-ordered regressor `ζ(t) = [z(t−1); z(t−2); …; z(t−ρ)]`,
//! `z(t) = [y(t); u(t)]`, and `Θ = [φ_1 … φ_ρ]` of size `p × (m+p)ρ`.
//! [`fit_arx`] solves the least-squares problem over a [`PartitionedData`]
//! window; [`fit_arx_prior`] computes the Gaussian posterior under a prior
//! `θ ~ N(0, λP)`; [`select_order_aic`] picks `ρ` on a common sample window.
//!
//! The posterior covariance is the Kronecker form `σ̂²(S ⊗ I_p)` where `S` is
//! the inverse of the **unscaled** regressor Gram matrix, so `trace(S)`
//! contracts like `1/N` as data accumulates.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{Error, Result};
use crate::hankel::{partition, Dataset, PartitionedData};

/// Condition-number threshold on the regressor Gram matrix (`1/ε`, ε = 1e−12).
const GRAM_CONDITION_LIMIT: f64 = 1e12;

/// A fitted truncated ARX predictor with its posterior statistics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArxModel {
    /// Truncation order.
    pub rho: usize,
    /// Posterior mean `vec(Θ̄)`, column-major over the `p × (m+p)ρ`
    /// coefficient matrix `Θ̄ = [φ̄_1 … φ̄_ρ]`.
    pub theta_bar: DVector<f64>,
    /// Inverse regressor Gram; the posterior covariance is `σ̂²(S ⊗ I_p)`.
    #[serde(rename = "S")]
    pub s: DMatrix<f64>,
    /// Innovation variance estimate.
    pub sigma2_hat: f64,
    /// Effective sample count behind the fit.
    #[serde(rename = "N")]
    pub n: usize,
    /// Input dimension.
    pub m: usize,
    /// Output dimension.
    pub p: usize,
}

impl ArxModel {
    /// Regressor dimension `(m+p)ρ`.
    pub fn d(&self) -> usize {
        (self.m + self.p) * self.rho
    }

    /// The coefficient matrix `Θ̄` of size `p × (m+p)ρ`.
    pub fn theta_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_column_slice(self.p, self.d(), self.theta_bar.as_slice())
    }

    /// Coefficient block `φ̄_k` (`k` is the 1-based lag), size `p × (m+p)`.
    pub fn phi(&self, k: usize) -> DMatrix<f64> {
        self.theta_matrix().columns((k - 1) * (self.m + self.p), self.m + self.p).into()
    }

    /// Serializes the model to JSON.
    pub fn save_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    /// Loads a model from JSON.
    pub fn load_json(path: &Path) -> Result<ArxModel> {
        let text = std::fs::read_to_string(path)?;
        let model: ArxModel = serde_json::from_str(&text)?;
        if model.theta_bar.len() != model.p * model.d() || model.s.nrows() != model.d() {
            return Err(Error::Dimension("model file has inconsistent dimensions".into()));
        }
        Ok(model)
    }
}

/// Lag-ordered regressor matrix (`d × N`, unscaled) and target matrix
/// (`p × N`, unscaled) of the ARX partition.
///
/// Column `j` of the past block stacks `z(j+1) … z(j+ρ)` oldest-first; the
/// one-step regressor wants newest-first, so the `ρ` blocks are reversed.
fn regressors_and_targets(parts: &PartitionedData) -> (DMatrix<f64>, DMatrix<f64>) {
    let (rho, mp) = (parts.rho, parts.m + parts.p);
    let d = mp * rho;
    let z = parts.z_p_arx.unscaled();
    let mut x = DMatrix::zeros(d, parts.n_arx);
    for k in 0..rho {
        // Lag k+1 block comes from oldest-first block ρ−1−k.
        x.rows_mut(k * mp, mp).copy_from(&z.rows((rho - 1 - k) * mp, mp));
    }
    (x, parts.y_next.unscaled())
}

/// Thin QR of the transposed regressors with a condition check on the Gram
/// matrix; returns `(q, r)` with `x^T = q r`.
fn regressor_qr(x: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let qr = x.transpose().qr();
    let (q, r) = (qr.q(), qr.r());
    let svals = r.clone().svd(false, false).singular_values;
    let (smax, smin) = (svals.max(), svals.min());
    // cond(Gram) = cond(R)^2.
    if smin <= 0.0 || (smax / smin).powi(2) > GRAM_CONDITION_LIMIT {
        return Err(Error::SingularGram(format!(
            "regressor Gram condition number exceeds {GRAM_CONDITION_LIMIT:.0e}"
        )));
    }
    Ok((q, r))
}

/// Least-squares fit of the truncated ARX predictor on the ARX partition.
pub fn fit_arx(parts: &PartitionedData) -> Result<ArxModel> {
    let (x, y) = regressors_and_targets(parts);
    let (d, n) = (x.nrows(), x.ncols());
    if n < d {
        return Err(Error::InsufficientSamples(format!(
            "{n} regression samples cannot identify {d} coefficient columns"
        )));
    }
    let (q, r) = regressor_qr(&x)?;
    // Θ^T solves R Θ^T = Q^T Y^T; S = R^{-1} R^{-T} without forming the Gram.
    let qty = q.transpose() * y.transpose();
    let theta_t = r
        .solve_upper_triangular(&qty)
        .ok_or_else(|| Error::SingularGram("triangular factor is singular".into()))?;
    let r_inv = r
        .solve_upper_triangular(&DMatrix::identity(d, d))
        .ok_or_else(|| Error::SingularGram("triangular factor is singular".into()))?;
    let mut s = &r_inv * r_inv.transpose();
    let s_t = s.transpose();
    s = (&s + s_t) * 0.5;
    let sigma2_hat = residual_variance(&x, &y, &theta_t)?;
    let theta = theta_t.transpose();
    Ok(ArxModel {
        rho: parts.rho,
        theta_bar: DVector::from_column_slice(theta.as_slice()),
        s,
        sigma2_hat,
        n,
        m: parts.m,
        p: parts.p,
    })
}

/// Unscaled residual energy divided by `p(N − d)`.
fn residual_variance(x: &DMatrix<f64>, y: &DMatrix<f64>, theta_t: &DMatrix<f64>) -> Result<f64> {
    let (d, n) = (x.nrows(), x.ncols());
    let p = y.nrows();
    if n <= d {
        return Err(Error::Degenerate(format!(
            "variance estimate needs N > d, got N = {n}, d = {d}"
        )));
    }
    let resid = y - theta_t.transpose() * x;
    Ok(resid.norm_squared() / (p * (n - d)) as f64)
}

/// Innovation-variance estimate from the ARX least-squares residuals,
/// `Σ_t ‖y(t) − Θ̂ζ(t)‖² / (p(N−d))`, computed on unscaled data.
pub fn residual_sigma2(parts: &PartitionedData) -> Result<f64> {
    Ok(fit_arx(parts)?.sigma2_hat)
}

/// Gaussian-posterior fit under the prior `θ ~ N(0, λP)`.
///
/// The innovation variance plugged into the posterior formulas is the
/// least-squares estimate from the same partition. The stored `S` is the
/// partial-trace compression `S_ij = Tr(Σ_ij)/(p σ̂²)` of the exact posterior
/// covariance, which is lossless whenever that covariance has Kronecker form
/// (always for `p = 1`).
pub fn fit_arx_prior(
    parts: &PartitionedData,
    lambda: f64,
    prior: &DMatrix<f64>,
) -> Result<ArxModel> {
    if lambda <= 0.0 || !lambda.is_finite() {
        return Err(Error::InvalidConfig(format!(
            "prior scale λ must be finite and > 0, got {lambda}"
        )));
    }
    let base = fit_arx(parts)?;
    let (d, p) = (base.d(), base.p);
    let pd = p * d;
    if prior.nrows() != pd || prior.ncols() != pd {
        return Err(Error::Dimension(format!(
            "prior covariance must be {pd}×{pd}, got {}×{}",
            prior.nrows(),
            prior.ncols()
        )));
    }
    let asym = (prior - prior.transpose()).amax();
    if asym > 1e-10 * (1.0 + prior.amax()) {
        return Err(Error::NonPsdPrior("prior covariance is not symmetric".into()));
    }
    let prior_chol = (prior * lambda)
        .cholesky()
        .ok_or_else(|| Error::NonPsdPrior("Cholesky factorization failed".into()))?;
    if base.sigma2_hat == 0.0 {
        // Noise-free data: the likelihood term dominates any finite prior and
        // the posterior collapses onto the least-squares solution.
        return Ok(base);
    }

    let (x, y) = regressors_and_targets(parts);
    let gram = &x * x.transpose();
    let inv_sigma2 = 1.0 / base.sigma2_hat;
    // Posterior precision (λP)^{-1} + σ̂^{-2}(G ⊗ I_p).
    let mut precision = prior_chol.solve(&DMatrix::identity(pd, pd));
    for i in 0..d {
        for j in 0..d {
            for r in 0..p {
                precision[(i * p + r, j * p + r)] += inv_sigma2 * gram[(i, j)];
            }
        }
    }
    // vec(Y X^T) is the column-major stack matching vec(Θ).
    let yxt = &y * x.transpose();
    let rhs = DVector::from_column_slice(yxt.as_slice()) * inv_sigma2;
    let prec_chol = precision.clone().cholesky().ok_or_else(|| {
        Error::SingularGram("posterior precision is not positive definite".into())
    })?;
    let theta_bar = prec_chol.solve(&rhs);
    let covariance = prec_chol.solve(&DMatrix::identity(pd, pd));
    let mut s = DMatrix::zeros(d, d);
    for i in 0..d {
        for j in 0..d {
            let mut tr = 0.0;
            for r in 0..p {
                tr += covariance[(i * p + r, j * p + r)];
            }
            s[(i, j)] = tr / (p as f64 * base.sigma2_hat);
        }
    }
    Ok(ArxModel { theta_bar, s, ..base })
}

/// Picks the truncation order by AIC over `ρ ∈ {1, …, ρ_max}`.
///
/// All candidates are scored on the common window of the last
/// `N_data − ρ_max` targets, `AIC(ρ) = N p ln σ̂²(ρ) + 2 p (m+p) ρ`; ties go to
/// the smaller order.
pub fn select_order_aic(dataset: &Dataset, rho_max: usize) -> Result<usize> {
    if rho_max < 1 {
        return Err(Error::InvalidConfig("ρ_max must be ≥ 1".into()));
    }
    if dataset.n_data() <= rho_max + 1 {
        return Err(Error::InsufficientSamples(format!(
            "AIC needs N_data > ρ_max + 1, got N_data = {}, ρ_max = {rho_max}",
            dataset.n_data()
        )));
    }
    let n_common = dataset.n_data() - rho_max;
    let p = dataset.p();
    let mut best: Option<(usize, f64)> = None;
    for rho in 1..=rho_max {
        // Drop ρ_max − ρ leading samples so every candidate predicts the
        // identical target window y(ρ_max+1 .. N_data).
        let trimmed = dataset.slice_from(rho_max - rho)?;
        let parts = partition(&trimmed, rho, 1)?;
        let sigma2 = residual_sigma2(&parts)?;
        let penalty = (2 * p * (dataset.m() + p) * rho) as f64;
        let aic = (n_common * p) as f64 * sigma2.ln() + penalty;
        match best {
            Some((_, best_aic)) if aic >= best_aic => {}
            _ => best = Some((rho, aic)),
        }
    }
    Ok(best.expect("at least one candidate").0)
}
