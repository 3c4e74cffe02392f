//! Multi-step predictor assembly from one-step ARX coefficients.
//!
//! For a horizon `T`, the stacked future outputs satisfy
//! `W ȳ_f = Φ_P z_ini + Φ_u u_f` with block-Toeplitz matrices built from the
//! coefficient blocks `φ_k = [φ_k^y, φ_k^u]` and `W = I − Φ_y`. The same
//! relation in regressor form reads `stack(Θ Z) = Φ_y y_r + Φ_P z_ini + Φ_u u_f`
//! where [`build_regressors`] assembles the `(m+p)ρ × T` matrix `Z` whose
//! column `i` is the lag-ordered regressor of prediction step `i`; `Z` is
//! affine in `u_f`, which is what makes the control objective quadratic.
//!
//! [`oracle_predict`] provides the true-model baseline: a steady-state
//! innovation observer followed by noise-free iteration of the state map.

use nalgebra::{DMatrix, DVector};

use crate::arx::ArxModel;
use crate::error::{Error, Result};
use crate::hankel::Dataset;
use crate::sim::PlantModel;

/// Block-Toeplitz multi-step predictor matrices for one (model, horizon) pair.
#[derive(Debug, Clone)]
pub struct PredictorForm {
    /// `pT × pT`, strictly lower block-triangular output-feedback part.
    pub phi_y: DMatrix<f64>,
    /// `pT × mT`, strictly lower block-triangular input part.
    pub phi_u: DMatrix<f64>,
    /// `pT × (m+p)ρ`, initial-condition part (right-aligned rows).
    pub phi_p: DMatrix<f64>,
    /// `W = I − Φ_y`; unit-diagonal lower block-triangular, always invertible.
    pub w: DMatrix<f64>,
    pub rho: usize,
    pub t: usize,
    pub m: usize,
    pub p: usize,
}

impl PredictorForm {
    /// Solves `W x = rhs` by forward substitution.
    pub fn w_solve(&self, rhs: &DVector<f64>) -> DVector<f64> {
        self.w.solve_lower_triangular(rhs).expect("W has a unit diagonal and is always invertible")
    }

    /// `W^{-1}` applied to a matrix, column by column.
    pub fn w_solve_matrix(&self, rhs: &DMatrix<f64>) -> DMatrix<f64> {
        self.w.solve_lower_triangular(rhs).expect("W has a unit diagonal and is always invertible")
    }
}

/// Builds the Toeplitz predictor forms from fitted coefficients.
///
/// Coefficient blocks beyond the truncation order are zero, so for `T > ρ`
/// the patterns acquire zero bands and `Φ_P` zero rows.
pub fn build_forms(model: &ArxModel, t: usize) -> Result<PredictorForm> {
    if t < 1 {
        return Err(Error::Dimension("horizon must be ≥ 1".into()));
    }
    let (m, p, rho) = (model.m, model.p, model.rho);
    let theta = model.theta_matrix();
    let mp = m + p;
    // φ_k split into output and input parts (output block first inside z).
    let phi_y_k = |k: usize| theta.view((0, (k - 1) * mp), (p, p)).into_owned();
    let phi_u_k = |k: usize| theta.view((0, (k - 1) * mp + p), (p, m)).into_owned();

    let mut phi_y = DMatrix::zeros(p * t, p * t);
    let mut phi_u = DMatrix::zeros(p * t, m * t);
    for i in 0..t {
        for j in 0..i {
            let k = i - j;
            if k <= rho {
                phi_y.view_mut((i * p, j * p), (p, p)).copy_from(&phi_y_k(k));
                phi_u.view_mut((i * p, j * m), (p, m)).copy_from(&phi_u_k(k));
            }
        }
    }
    // Row block i of Φ_P multiplies z_ini = [z(t−ρ); …; z(t−1)]; the lag-k
    // coefficient (k > i) lands on block j = ρ + i − k, giving the
    // right-aligned pattern [0 … 0 φ_ρ … φ_{i+1}].
    let mut phi_p = DMatrix::zeros(p * t, mp * rho);
    for i in 0..t {
        for j in i..rho.min(t + rho) {
            let k = rho + i - j;
            if (1..=rho).contains(&k) {
                let block = theta.view((0, (k - 1) * mp), (p, mp));
                phi_p.view_mut((i * p, j * mp), (p, mp)).copy_from(&block);
            }
        }
    }
    let w = DMatrix::identity(p * t, p * t) - &phi_y;
    Ok(PredictorForm { phi_y, phi_u, phi_p, w, rho, t, m, p })
}

/// The regressor matrix `Z` whose column `i` is the lag-ordered regressor of
/// prediction step `i`, mixing `z_ini`, `u_f`, and the reference window `y_r`.
#[derive(Debug, Clone)]
pub struct RegressorMatrix {
    /// `(m+p)ρ × T`; column `i` stacks `[y(t+i−k); u(t+i−k)]` for `k = 1..ρ`.
    pub z: DMatrix<f64>,
    pub rho: usize,
    pub t: usize,
    pub m: usize,
    pub p: usize,
}

/// Assembles the regressor matrix for given initial condition, future inputs,
/// and reference outputs.
///
/// Column `i` reads entries at time `t+i−k`: future times (`i ≥ k`) come from
/// `y_r`/`u_f`, past times from `z_ini` (stored oldest-lag first and reversed
/// into lag order here).
pub fn build_regressors(
    z_ini: &DVector<f64>,
    u_f: &DVector<f64>,
    y_r: &DVector<f64>,
    rho: usize,
    t: usize,
    m: usize,
    p: usize,
) -> Result<RegressorMatrix> {
    let mp = m + p;
    if z_ini.len() != mp * rho || u_f.len() != m * t || y_r.len() != p * t {
        return Err(Error::Dimension(format!(
            "expected |z_ini| = {}, |u_f| = {}, |y_r| = {}; got {}, {}, {}",
            mp * rho,
            m * t,
            p * t,
            z_ini.len(),
            u_f.len(),
            y_r.len()
        )));
    }
    let mut z = DMatrix::zeros(mp * rho, t);
    for i in 0..t {
        for k in 1..=rho {
            let row0 = (k - 1) * mp;
            if i >= k {
                let tau = i - k;
                for a in 0..p {
                    z[(row0 + a, i)] = y_r[tau * p + a];
                }
                for a in 0..m {
                    z[(row0 + p + a, i)] = u_f[tau * m + a];
                }
            } else {
                // z(t−(k−i)) sits at block ρ−(k−i) of the oldest-first z_ini.
                let block = rho + i - k;
                for a in 0..mp {
                    z[(row0 + a, i)] = z_ini[block * mp + a];
                }
            }
        }
    }
    Ok(RegressorMatrix { z, rho, t, m, p })
}

/// The constant linear map `M_u` with `vec(Z(u_f)) = vec(Z(0)) + M_u u_f`
/// (column-major vec of the `(m+p)ρ × T` regressor matrix).
pub fn regressor_input_map(rho: usize, t: usize, m: usize, p: usize) -> DMatrix<f64> {
    let mp = m + p;
    let d = mp * rho;
    let mut map = DMatrix::zeros(d * t, m * t);
    for i in 0..t {
        for k in 1..=rho.min(i) {
            let tau = i - k;
            let row0 = i * d + (k - 1) * mp + p;
            for a in 0..m {
                map[(row0 + a, tau * m + a)] = 1.0;
            }
        }
    }
    map
}

/// Multi-step prediction `W^{-1}(Φ_P z_ini + Φ_u u_f)` by forward substitution.
pub fn predict_multistep(
    form: &PredictorForm,
    z_ini: &DVector<f64>,
    u_f: &DVector<f64>,
) -> Result<DVector<f64>> {
    if z_ini.len() != (form.m + form.p) * form.rho || u_f.len() != form.m * form.t {
        return Err(Error::Dimension(format!(
            "expected |z_ini| = {}, |u_f| = {}; got {}, {}",
            (form.m + form.p) * form.rho,
            form.m * form.t,
            z_ini.len(),
            u_f.len()
        )));
    }
    let rhs = &form.phi_p * z_ini + &form.phi_u * u_f;
    Ok(form.w_solve(&rhs))
}

/// Minimum history length for the steady-state observer burn-in.
pub const OBSERVER_BURN_IN: usize = 50;

/// Runs the steady-state innovation observer over `history`, then iterates
/// noise-free predictions `ŷ(t+h) = C A^h x̂ + Σ_{j<h} C A^{h−1−j} B u_f(j) + D u_f(h)`.
pub fn oracle_predict(
    plant: &PlantModel,
    history: &Dataset,
    u_f: &DVector<f64>,
) -> Result<DVector<f64>> {
    if history.m() != plant.m() || history.p() != plant.p() {
        return Err(Error::Dimension("history channel counts do not match the plant".into()));
    }
    if history.n_data() < OBSERVER_BURN_IN {
        return Err(Error::InsufficientSamples(format!(
            "observer needs ≥ {OBSERVER_BURN_IN} history samples, got {}",
            history.n_data()
        )));
    }
    if u_f.len() % plant.m() != 0 || u_f.is_empty() {
        return Err(Error::Dimension(format!(
            "future input length {} is not a nonzero multiple of m = {}",
            u_f.len(),
            plant.m()
        )));
    }
    let t_hor = u_f.len() / plant.m();
    let mut x = plant.filter_state(history);
    let mut y_hat = DVector::zeros(plant.p() * t_hor);
    for h in 0..t_hor {
        let u = u_f.rows(h * plant.m(), plant.m()).into_owned();
        let y = plant.c() * &x + plant.d() * &u;
        y_hat.rows_mut(h * plant.p(), plant.p()).copy_from(&y);
        x = plant.a() * &x + plant.b() * &u;
    }
    Ok(y_hat)
}
