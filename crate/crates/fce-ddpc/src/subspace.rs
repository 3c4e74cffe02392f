//! Subspace-based competitor controllers built on the block LQ decomposition
//! of the stacked Hankel matrix,
//!
//! ```text
//! [Z_P]   [L11  0   0 ] [Q1]
//! [U_F] = [L21 L22  0 ] [Q2]
//! [Y_F]   [L31 L32 L33] [Q3]
//! ```
//!
//! with lower-triangular `L11/L22/L33` (nonnegative diagonals) and orthonormal
//! `Q` rows. The γ-DDPC family optimizes over the rotated coordinates
//! `(γ2, γ3)` after pinning `γ1 = L11⁻¹ z_ini`, DeePC over the raw combination
//! vector `α` — reduced here to the same coordinates by variable elimination.
//! The VARX-bank utilities provide the independent identities used to
//! cross-check the factors.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::fce::ControlSpec;
use crate::hankel::HankelBlock;

/// Diagonal entries below this are treated as rank deficiencies.
const RANK_TOL: f64 = 1e-12;

/// Block LQ factors of the stacked past/future Hankel matrix.
#[derive(Debug, Clone)]
pub struct LqFactors {
    pub l11: DMatrix<f64>,
    pub l21: DMatrix<f64>,
    pub l22: DMatrix<f64>,
    pub l31: DMatrix<f64>,
    pub l32: DMatrix<f64>,
    pub l33: DMatrix<f64>,
    pub q1: DMatrix<f64>,
    pub q2: DMatrix<f64>,
    pub q3: DMatrix<f64>,
    /// Number of Hankel columns the factors were computed from.
    pub n_lq: usize,
    /// Set when some triangular diagonal entry fell below `1e−12`; downstream
    /// inversions will then fail with a singular-factor error.
    pub rank_warning: bool,
}

impl LqFactors {
    /// Past-block row count `(m+p)ρ`.
    pub fn d(&self) -> usize {
        self.l11.nrows()
    }

    /// Future-input row count `mT`.
    pub fn mt(&self) -> usize {
        self.l22.nrows()
    }

    /// Future-output row count `pT`.
    pub fn pt(&self) -> usize {
        self.l33.nrows()
    }

    /// `σ̂ = Tr(L33)/(pT)`, the scaled-Hankel innovation-scale estimate.
    pub fn sigma_hat(&self) -> f64 {
        self.l33.trace() / self.pt() as f64
    }

    /// `γ1 = L11⁻¹ z_ini` by forward substitution.
    pub fn gamma1(&self, z_ini: &DVector<f64>) -> Result<DVector<f64>> {
        if z_ini.len() != self.d() {
            return Err(Error::Dimension(format!(
                "z_ini has {} entries, expected {}",
                z_ini.len(),
                self.d()
            )));
        }
        if self.l11.diagonal().iter().any(|v| v.abs() < RANK_TOL) {
            return Err(Error::SingularFactor("L11 has a zero diagonal entry".into()));
        }
        self.l11
            .solve_lower_triangular(z_ini)
            .ok_or_else(|| Error::SingularFactor("L11 is singular".into()))
    }
}

/// Regularization weights of the γ-DDPC objective; `+∞` pins a block to zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GammaConfig {
    pub beta2: f64,
    pub beta3: f64,
}

impl GammaConfig {
    fn validate(&self) -> Result<()> {
        for (name, v) in [("beta2", self.beta2), ("beta3", self.beta3)] {
            if v.is_nan() || v < 0.0 {
                return Err(Error::InvalidConfig(format!("{name} must be in [0, +∞], got {v}")));
            }
        }
        Ok(())
    }
}

/// DeePC regularization weights; `λ1 = +∞` encodes the hard consistency
/// constraint, `λ2` must be finite.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeePcConfig {
    pub lambda1: f64,
    pub lambda2: f64,
}

impl DeePcConfig {
    fn validate(&self) -> Result<()> {
        if self.lambda1.is_nan() || self.lambda1 < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "lambda1 must be in [0, +∞], got {}",
                self.lambda1
            )));
        }
        if !self.lambda2.is_finite() || self.lambda2 < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "lambda2 must be finite and ≥ 0, got {}",
                self.lambda2
            )));
        }
        Ok(())
    }
}

/// LQ decomposition of an explicitly stacked matrix with the given block row
/// sizes `(d, mT, pT)`.
///
/// Exposed separately from [`lq_decompose`] so degenerate block sizes (empty
/// futures) remain testable.
pub fn lq_decompose_raw(
    stacked: &DMatrix<f64>,
    d: usize,
    mt: usize,
    pt: usize,
) -> Result<LqFactors> {
    let rows = d + mt + pt;
    let n = stacked.ncols();
    if stacked.nrows() != rows {
        return Err(Error::Dimension(format!(
            "stacked matrix has {} rows, expected {d} + {mt} + {pt}",
            stacked.nrows()
        )));
    }
    if n < rows {
        return Err(Error::InsufficientSamples(format!(
            "LQ needs at least as many columns as rows ({n} < {rows})"
        )));
    }
    let qr = stacked.transpose().qr();
    let mut l = qr.r().transpose();
    let mut q = qr.q().transpose();
    // Fix signs so every diagonal entry of L is nonnegative.
    let mut rank_warning = false;
    for i in 0..rows {
        if l[(i, i)] < 0.0 {
            for r in 0..rows {
                l[(r, i)] = -l[(r, i)];
            }
            q.row_mut(i).neg_mut();
        }
        if l[(i, i)].abs() < RANK_TOL {
            rank_warning = true;
        }
    }
    Ok(LqFactors {
        l11: l.view((0, 0), (d, d)).into_owned(),
        l21: l.view((d, 0), (mt, d)).into_owned(),
        l22: l.view((d, d), (mt, mt)).into_owned(),
        l31: l.view((d + mt, 0), (pt, d)).into_owned(),
        l32: l.view((d + mt, d), (pt, mt)).into_owned(),
        l33: l.view((d + mt, d + mt), (pt, pt)).into_owned(),
        q1: q.rows(0, d).into_owned(),
        q2: q.rows(d, mt).into_owned(),
        q3: q.rows(d + mt, pt).into_owned(),
        n_lq: n,
        rank_warning,
    })
}

/// LQ decomposition of the stacked `[Z_P; U_F; Y_F]` Hankel blocks.
pub fn lq_decompose(z_p: &HankelBlock, u_f: &HankelBlock, y_f: &HankelBlock) -> Result<LqFactors> {
    let n = z_p.n_cols;
    if u_f.n_cols != n || y_f.n_cols != n {
        return Err(Error::Dimension(format!(
            "Hankel blocks disagree on column count: {n}, {}, {}",
            u_f.n_cols, y_f.n_cols
        )));
    }
    let (d, mt, pt) = (z_p.values().nrows(), u_f.values().nrows(), y_f.values().nrows());
    let mut stacked = DMatrix::zeros(d + mt + pt, n);
    stacked.rows_mut(0, d).copy_from(z_p.values());
    stacked.rows_mut(d, mt).copy_from(u_f.values());
    stacked.rows_mut(d + mt, pt).copy_from(y_f.values());
    lq_decompose_raw(&stacked, d, mt, pt)
}

fn validate_spec_dims(f: &LqFactors, spec: &ControlSpec) -> Result<()> {
    let (mt, pt) = (f.mt(), f.pt());
    if spec.q_o.shape() != (pt, pt)
        || spec.r.shape() != (mt, mt)
        || spec.u_r.len() != mt
        || spec.y_r.len() != pt
    {
        return Err(Error::Dimension(format!(
            "spec dimensions do not match factors with mT = {mt}, pT = {pt}"
        )));
    }
    Ok(())
}

/// Columns of `L33` whose diagonal entry is numerically nonzero; the γ3
/// optimization is restricted to this leading set when `L33` is
/// rank-deficient (noise-free data).
fn active_gamma3_columns(l33: &DMatrix<f64>) -> Vec<usize> {
    (0..l33.nrows()).filter(|&i| l33[(i, i)].abs() >= RANK_TOL).collect()
}

/// Shared (γ2, γ3) solver given a precomputed γ1.
fn gamma_core(
    f: &LqFactors,
    gamma1: &DVector<f64>,
    spec: &ControlSpec,
    cfg: &GammaConfig,
) -> Result<DVector<f64>> {
    cfg.validate()?;
    validate_spec_dims(f, spec)?;
    let (mt, pt) = (f.mt(), f.pt());
    let y_tilde = &spec.y_r - &f.l31 * gamma1;
    let u_tilde = &spec.u_r - &f.l21 * gamma1;

    let solve_spd = |mat: DMatrix<f64>, rhs: DVector<f64>| -> Result<DVector<f64>> {
        mat.cholesky().map(|ch| ch.solve(&rhs)).ok_or_else(|| {
            Error::SingularFactor("normal equations are singular; increase β or data".into())
        })
    };

    let gamma2 = if cfg.beta2.is_infinite() {
        DVector::zeros(mt)
    } else if cfg.beta3.is_infinite() {
        // γ3 = 0: standard ridge in γ2 only.
        let mat = f.l32.transpose() * &spec.q_o * &f.l32
            + f.l22.transpose() * &spec.r * &f.l22
            + DMatrix::identity(mt, mt) * cfg.beta2;
        let rhs = f.l32.transpose() * &spec.q_o * &y_tilde + f.l22.transpose() * &spec.r * &u_tilde;
        solve_spd(mat, rhs)?
    } else {
        // Joint solve over (γ2, γ3), with γ3 restricted to the columns of L33
        // that carry rank.
        let cols = active_gamma3_columns(&f.l33);
        let k = cols.len();
        let l33r = DMatrix::from_fn(pt, k, |r, j| f.l33[(r, cols[j])]);
        let n_var = mt + k;
        let mut mat = DMatrix::zeros(n_var, n_var);
        let mut rhs = DVector::zeros(n_var);
        let a22 = f.l32.transpose() * &spec.q_o * &f.l32
            + f.l22.transpose() * &spec.r * &f.l22
            + DMatrix::identity(mt, mt) * cfg.beta2;
        let a23 = f.l32.transpose() * &spec.q_o * &l33r;
        let a33 = l33r.transpose() * &spec.q_o * &l33r + DMatrix::identity(k, k) * cfg.beta3;
        mat.view_mut((0, 0), (mt, mt)).copy_from(&a22);
        mat.view_mut((0, mt), (mt, k)).copy_from(&a23);
        mat.view_mut((mt, 0), (k, mt)).copy_from(&a23.transpose());
        mat.view_mut((mt, mt), (k, k)).copy_from(&a33);
        rhs.rows_mut(0, mt).copy_from(
            &(f.l32.transpose() * &spec.q_o * &y_tilde + f.l22.transpose() * &spec.r * &u_tilde),
        );
        rhs.rows_mut(mt, k).copy_from(&(l33r.transpose() * &spec.q_o * &y_tilde));
        let sol = solve_spd(mat, rhs)?;
        sol.rows(0, mt).into_owned()
    };
    // Only γ1 and γ2 shape the input; γ3 trades off predicted outputs.
    Ok(&f.l21 * gamma1 + &f.l22 * &gamma2)
}

/// γ-DDPC: optimizes the rotated coordinates under ridge weights `(β2, β3)`
/// and returns `u_f = L21 γ1 + L22 γ2`.
pub fn gamma_solve(
    f: &LqFactors,
    z_ini: &DVector<f64>,
    spec: &ControlSpec,
    cfg: &GammaConfig,
) -> Result<DVector<f64>> {
    let gamma1 = f.gamma1(z_ini)?;
    gamma_core(f, &gamma1, spec, cfg)
}

/// The tuning-free ridge weight `σ̂²·Tr[Q_o]/N` with `σ̂ = Tr(L33)/(pT)`,
/// the output-error asymptotic limit of the oracle-tuned β2.
pub fn online_beta(f: &LqFactors, q_o: &DMatrix<f64>) -> f64 {
    let sigma_hat = f.sigma_hat();
    sigma_hat * sigma_hat * q_o.trace() / f.n_lq as f64
}

/// Tuning-free γ-DDPC (`β2` from the closed form, `γ3` pinned to zero).
pub fn thm3_solve(f: &LqFactors, z_ini: &DVector<f64>, spec: &ControlSpec) -> Result<DVector<f64>> {
    let cfg = GammaConfig { beta2: online_beta(f, &spec.q_o), beta3: f64::INFINITY };
    gamma_solve(f, z_ini, spec, &cfg)
}

/// DeePC with consistency regularizer, reduced to the LQ basis.
///
/// Decomposing `α = Q1ᵀγ1 + Q2ᵀγ2 + Q3ᵀγ3 + n`: the constraint pins `γ1`, the
/// null component `n` enters only the regularizers (optimal at zero and
/// invisible to `u_f`), `λ1‖(I−Π)α‖²` reads `λ1(‖γ3‖² + ‖n‖²)`, and
/// `λ2‖α‖²` adds `λ2` to every block. The program is therefore the γ-DDPC
/// problem with `β2 = λ2` and `β3 = λ1 + λ2`.
pub fn deepc_solve(
    z_p: &HankelBlock,
    u_f: &HankelBlock,
    y_f: &HankelBlock,
    z_ini: &DVector<f64>,
    spec: &ControlSpec,
    cfg: &DeePcConfig,
) -> Result<DVector<f64>> {
    cfg.validate()?;
    let f = lq_decompose(z_p, u_f, y_f)?;
    deepc_solve_factors(&f, z_ini, spec, cfg)
}

/// DeePC on precomputed factors (the receding-horizon path, where the
/// decomposition is reused across steps).
pub fn deepc_solve_factors(
    f: &LqFactors,
    z_ini: &DVector<f64>,
    spec: &ControlSpec,
    cfg: &DeePcConfig,
) -> Result<DVector<f64>> {
    cfg.validate()?;
    if z_ini.len() != f.d() {
        return Err(Error::Dimension(format!(
            "z_ini has {} entries, expected {}",
            z_ini.len(),
            f.d()
        )));
    }
    // Least-squares γ1 with an explicit representability check: z_ini must
    // lie in the row space of Z_P.
    let svd = f.l11.clone().svd(true, true);
    let tol = RANK_TOL * svd.singular_values.max().max(1.0);
    let gamma1 = svd
        .solve(z_ini, tol)
        .map_err(|e| Error::SingularFactor(format!("L11 solve failed: {e}")))?;
    let residual = (&f.l11 * &gamma1 - z_ini).norm();
    if residual > 1e-6 * (1.0 + z_ini.norm()) {
        return Err(Error::Infeasible(format!(
            "z_ini is outside the row space of Z_P (residual {residual:.3e})"
        )));
    }
    let gamma_cfg = GammaConfig { beta2: cfg.lambda2, beta3: cfg.lambda1 + cfg.lambda2 };
    gamma_core(f, &gamma1, spec, &gamma_cfg)
}

/// Bank of multi-step VARX least-squares fits and the matrices of the LQ
/// cross-identities.
#[derive(Debug, Clone)]
pub struct VarxBank {
    /// `pT × (m+p)ρ`, past-data coefficients, in `Z_P` block order.
    pub phi_p: DMatrix<f64>,
    /// `pT × mT`, future-input coefficients. Every step regresses on the full
    /// input window, so anticausal entries are finite-sample artifacts that
    /// vanish asymptotically.
    pub phi_u: DMatrix<f64>,
    /// `pT × pT`, future-output coefficients (strictly block lower
    /// triangular).
    pub phi_y: DMatrix<f64>,
    /// `Ŵ = I − Φ̂_y`.
    pub w_hat: DMatrix<f64>,
    /// Block-diagonal residual scale factors; for `p = 1` this is
    /// `diag(L33)` of the matching LQ decomposition.
    pub d33: DMatrix<f64>,
}

/// Fits the bank of step-wise VARX regressions: row block `i` regresses
/// `Y_{ρ+i}` on `[Z_P; U_F; Y_{[ρ+1,ρ+i−1]}]`.
///
/// The residual factors `d33` are computed from the per-step residual Grams,
/// independently of any LQ decomposition.
pub fn varx_bank_fit(z_p: &HankelBlock, u_f: &HankelBlock, y_f: &HankelBlock) -> Result<VarxBank> {
    let n = z_p.n_cols;
    if u_f.n_cols != n || y_f.n_cols != n {
        return Err(Error::Dimension("Hankel blocks disagree on column count".into()));
    }
    let d = z_p.values().nrows();
    let (m, p) = (u_f.v_dim, y_f.v_dim);
    let t = u_f.n_block_rows();
    if y_f.n_block_rows() != t {
        return Err(Error::Dimension("U_F and Y_F disagree on horizon".into()));
    }
    let (mt, pt) = (m * t, p * t);

    let mut phi_p = DMatrix::zeros(pt, d);
    let mut phi_u = DMatrix::zeros(pt, mt);
    let mut phi_y = DMatrix::zeros(pt, pt);
    let mut d33 = DMatrix::zeros(pt, pt);

    for i in 1..=t {
        let n_reg = d + mt + p * (i - 1);
        let mut x = DMatrix::zeros(n_reg, n);
        x.rows_mut(0, d).copy_from(z_p.values());
        x.rows_mut(d, mt).copy_from(u_f.values());
        if i > 1 {
            x.rows_mut(d + mt, p * (i - 1)).copy_from(&y_f.values().rows(0, p * (i - 1)));
        }
        let y_i = y_f.values().rows(p * (i - 1), p).into_owned();

        // Least squares via QR of Xᵀ; guard against singular regressors.
        let qr = x.transpose().qr();
        let r = qr.r();
        let mut min_diag: f64 = f64::INFINITY;
        let mut max_diag: f64 = 0.0;
        for j in 0..n_reg {
            min_diag = min_diag.min(r[(j, j)].abs());
            max_diag = max_diag.max(r[(j, j)].abs());
        }
        if min_diag < 1e-10 * max_diag.max(1.0) {
            return Err(Error::SingularGram(format!(
                "bank regressors at step {i} are rank deficient"
            )));
        }
        // coeffs = Y Xᵀ (X Xᵀ)⁻¹  ⇔  Rᵀ coeffsᵀ stage via the thin QR.
        let qty = qr.q().transpose() * y_i.transpose();
        let coeffs_t = r
            .solve_upper_triangular(&qty)
            .ok_or_else(|| Error::SingularGram(format!("bank solve failed at step {i}")))?;
        let coeffs = coeffs_t.transpose();

        let row0 = p * (i - 1);
        phi_p.view_mut((row0, 0), (p, d)).copy_from(&coeffs.columns(0, d));
        phi_u.view_mut((row0, 0), (p, mt)).copy_from(&coeffs.columns(d, mt));
        if i > 1 {
            phi_y
                .view_mut((row0, 0), (p, p * (i - 1)))
                .copy_from(&coeffs.columns(d + mt, p * (i - 1)));
        }

        let resid = y_i - &coeffs * &x;
        let gram = &resid * resid.transpose();
        let factor = gram.clone().cholesky().map(|ch| ch.l()).unwrap_or_else(|| {
            DMatrix::from_fn(p, p, |a, b| if a == b { gram[(a, b)].max(0.0).sqrt() } else { 0.0 })
        });
        d33.view_mut((row0, row0), (p, p)).copy_from(&factor);
    }
    let w_hat = DMatrix::identity(pt, pt) - &phi_y;
    Ok(VarxBank { phi_p, phi_u, phi_y, w_hat, d33 })
}
