//! Assembly and solution of the final-control-error program.
//!
//! The control objective is the conditional expectation of the tracking cost
//! given the training data. Under the Gaussian posterior `θ ~ N(θ̄, σ̂²(S⊗I_p))`
//! it splits exactly into a certainty-equivalence part and a variance
//! penalty,
//!
//! ```text
//! FCE(u_f) = ‖y_r − ȳ_f(u_f)‖²_{Q_o} + ‖u_r − u_f‖²_R        (J)
//!          + σ̂² · Tr[Q̄ · ((Z(u_f)ᵀ S Z(u_f)) ⊗ I_p)]          (r)
//! ```
//!
//! with `Q̄ = Ŵ⁻ᵀ Q_o Ŵ⁻¹` frozen at the fitted coefficients and `Z(u_f)` the
//! regressor matrix of [`crate::predictor::build_regressors`]. Both parts are
//! quadratic in `u_f`; [`FceAssembler`] precomputes every input-independent
//! kernel once so that receding-horizon re-assembly costs only matrix-vector
//! work.

use nalgebra::{DMatrix, DVector};

use crate::arx::ArxModel;
use crate::error::{Error, Result};
use crate::predictor::{build_forms, build_regressors, regressor_input_map, PredictorForm};
use crate::qp::{self, BoxBounds};

/// Horizon, weights, references, and optional constraints of one control
/// problem.
#[derive(Debug, Clone)]
pub struct ControlSpec {
    pub t: usize,
    /// `pT × pT` output tracking weight, symmetric positive definite.
    pub q_o: DMatrix<f64>,
    /// `mT × mT` input effort weight, symmetric positive definite.
    pub r: DMatrix<f64>,
    /// `mT` reference input.
    pub u_r: DVector<f64>,
    /// `pT` reference output window.
    pub y_r: DVector<f64>,
    /// Optional elementwise bounds on `u_f`.
    pub u_box: Option<BoxBounds>,
    /// Optional elementwise bounds on the expected output `E[ȳ_f | D]`.
    pub y_box: Option<BoxBounds>,
}

impl ControlSpec {
    /// Unconstrained tracking spec with scaled identity weights and zero
    /// references.
    pub fn tracking(t: usize, m: usize, p: usize, q_o: f64, r: f64) -> Self {
        ControlSpec {
            t,
            q_o: DMatrix::identity(p * t, p * t) * q_o,
            r: DMatrix::identity(m * t, m * t) * r,
            u_r: DVector::zeros(m * t),
            y_r: DVector::zeros(p * t),
            u_box: None,
            y_box: None,
        }
    }

    fn validate(&self, m: usize, p: usize) -> Result<()> {
        let (nu, ny) = (m * self.t, p * self.t);
        if self.q_o.shape() != (ny, ny)
            || self.r.shape() != (nu, nu)
            || self.u_r.len() != nu
            || self.y_r.len() != ny
        {
            return Err(Error::Dimension(format!(
                "spec sized for T = {}, m = {m}, p = {p} expected Q_o {ny}×{ny}, R {nu}×{nu}",
                self.t
            )));
        }
        check_spd(&self.q_o, "Q_o")?;
        check_spd(&self.r, "R")?;
        if let Some(b) = &self.u_box {
            if b.len() != nu {
                return Err(Error::Dimension(format!(
                    "u_box has {} entries, expected {nu}",
                    b.len()
                )));
            }
        }
        if let Some(b) = &self.y_box {
            if b.len() != ny {
                return Err(Error::Dimension(format!(
                    "y_box has {} entries, expected {ny}",
                    b.len()
                )));
            }
        }
        Ok(())
    }
}

fn check_spd(mat: &DMatrix<f64>, name: &str) -> Result<()> {
    let n = mat.nrows();
    for i in 0..n {
        for j in 0..i {
            if (mat[(i, j)] - mat[(j, i)]).abs() > 1e-10 * (1.0 + mat.amax()) {
                return Err(Error::InvalidConfig(format!("{name} is not symmetric")));
            }
        }
    }
    if mat.clone().cholesky().is_none() {
        return Err(Error::InvalidConfig(format!("{name} is not positive definite")));
    }
    Ok(())
}

/// The assembled quadratic `½ uᵀH u + gᵀu + c` with its two parts kept
/// separate for diagnostics.
#[derive(Debug, Clone)]
pub struct QuadraticObjective {
    pub h: DMatrix<f64>,
    pub g: DVector<f64>,
    pub c: f64,
    /// Certainty-equivalence part.
    pub h_j: DMatrix<f64>,
    pub g_j: DVector<f64>,
    pub c_j: f64,
    /// Variance-penalty part; identically zero when `sigma2_hat = 0`.
    pub h_r: DMatrix<f64>,
    pub g_r: DVector<f64>,
    pub c_r: f64,
}

impl QuadraticObjective {
    /// Total objective value at `u_f`.
    pub fn value(&self, u_f: &DVector<f64>) -> f64 {
        0.5 * u_f.dot(&(&self.h * u_f)) + self.g.dot(u_f) + self.c
    }
}

/// The two terms of the objective at a given input.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FceParts {
    pub j: f64,
    pub r: f64,
}

/// Splits the objective value into its tracking and variance terms.
pub fn fce_components(obj: &QuadraticObjective, u_f: &DVector<f64>) -> FceParts {
    let j = 0.5 * u_f.dot(&(&obj.h_j * u_f)) + obj.g_j.dot(u_f) + obj.c_j;
    let r = 0.5 * u_f.dot(&(&obj.h_r * u_f)) + obj.g_r.dot(u_f) + obj.c_r;
    FceParts { j, r }
}

/// An affine map `u ↦ L u + o`, used for the expected-output constraint path.
#[derive(Debug, Clone)]
pub struct AffineMap {
    pub linear: DMatrix<f64>,
    pub offset: DVector<f64>,
}

impl AffineMap {
    pub fn apply(&self, u: &DVector<f64>) -> DVector<f64> {
        &self.linear * u + &self.offset
    }
}

/// Precomputed input-independent kernels for one (model, spec) pair.
///
/// `H` does not depend on `z_ini` or the reference window, so a receding
/// horizon controller assembles it once and refreshes only `(g, c)` per step.
#[derive(Debug, Clone)]
pub struct FceAssembler {
    form: PredictorForm,
    q_bar: DMatrix<f64>,
    /// `Φ_uᵀ Q̄`, reused in every `g_j`.
    phiu_t_qbar: DMatrix<f64>,
    /// `TQ ⊗ S` where `TQ_ij = Tr(Q̄ block (i,j))`.
    kernel: DMatrix<f64>,
    /// `kernel · M_u`, reused in every `g_r`.
    k_m_u: DMatrix<f64>,
    /// Expected-output linear part `Ŵ⁻¹ Φ_u`.
    output_gain: DMatrix<f64>,
    h: DMatrix<f64>,
    h_j: DMatrix<f64>,
    h_r: DMatrix<f64>,
    r_mat: DMatrix<f64>,
    u_r: DVector<f64>,
    sigma2: f64,
    s: DMatrix<f64>,
}

impl FceAssembler {
    pub fn new(model: &ArxModel, spec: &ControlSpec) -> Result<Self> {
        if spec.t < 1 {
            return Err(Error::InvalidConfig("horizon must be ≥ 1".into()));
        }
        spec.validate(model.m, model.p)?;
        let (m, p, rho, t) = (model.m, model.p, model.rho, spec.t);
        let form = build_forms(model, t)?;
        let w_inv = form.w_solve_matrix(&DMatrix::identity(p * t, p * t));
        let q_bar = w_inv.transpose() * &spec.q_o * &w_inv;
        let phiu_t_qbar = form.phi_u.transpose() * &q_bar;
        let h_j = (&phiu_t_qbar * &form.phi_u + &spec.r) * 2.0;

        // Collapse the p×p blocks of Q̄ to their traces, then expand against S.
        let mut tq = DMatrix::zeros(t, t);
        for i in 0..t {
            for j in 0..t {
                tq[(i, j)] = q_bar.view((i * p, j * p), (p, p)).trace();
            }
        }
        let kernel = tq.kronecker(&model.s);
        let m_u = regressor_input_map(rho, t, m, p);
        let k_m_u = &kernel * &m_u;
        let h_r = (m_u.transpose() * &k_m_u) * (2.0 * model.sigma2_hat);
        let h = &h_j + &h_r;
        let output_gain = &w_inv * &form.phi_u;

        Ok(FceAssembler {
            form,
            q_bar,
            phiu_t_qbar,
            kernel,
            k_m_u,
            output_gain,
            h,
            h_j,
            h_r,
            r_mat: spec.r.clone(),
            u_r: spec.u_r.clone(),
            sigma2: model.sigma2_hat,
            s: model.s.clone(),
        })
    }

    pub fn form(&self) -> &PredictorForm {
        &self.form
    }

    pub fn q_bar(&self) -> &DMatrix<f64> {
        &self.q_bar
    }

    pub fn s(&self) -> &DMatrix<f64> {
        &self.s
    }

    pub fn sigma2(&self) -> f64 {
        self.sigma2
    }

    /// Assembles `(g, c)` for the given initial condition and reference
    /// window, reusing the precomputed `H`.
    pub fn objective(
        &self,
        z_ini: &DVector<f64>,
        y_r: &DVector<f64>,
    ) -> Result<QuadraticObjective> {
        let f = &self.form;
        let (m, p, rho, t) = (f.m, f.p, f.rho, f.t);
        if z_ini.len() != (m + p) * rho || y_r.len() != p * t {
            return Err(Error::Dimension(format!(
                "expected |z_ini| = {}, |y_r| = {}; got {}, {}",
                (m + p) * rho,
                p * t,
                z_ini.len(),
                y_r.len()
            )));
        }
        let delta0 = &f.w * y_r - &f.phi_p * z_ini;
        let g_j = -(&self.phiu_t_qbar * &delta0 + &self.r_mat * &self.u_r) * 2.0;
        let c_j = delta0.dot(&(&self.q_bar * &delta0)) + self.u_r.dot(&(&self.r_mat * &self.u_r));

        let z0 = build_regressors(z_ini, &DVector::zeros(m * t), y_r, rho, t, m, p)?.z;
        let vec0 = DVector::from_column_slice(z0.as_slice());
        let g_r = self.k_m_u.tr_mul(&vec0) * (2.0 * self.sigma2);
        let c_r = self.sigma2 * vec0.dot(&(&self.kernel * &vec0));

        Ok(QuadraticObjective {
            h: self.h.clone(),
            g: &g_j + &g_r,
            c: c_j + c_r,
            h_j: self.h_j.clone(),
            g_j,
            c_j,
            h_r: self.h_r.clone(),
            g_r,
            c_r,
        })
    }

    /// The affine map `u_f ↦ E[ȳ_f | D] = Ŵ⁻¹(Φ_P z_ini + Φ_u u_f)`.
    pub fn expected_output_map(&self, z_ini: &DVector<f64>) -> Result<AffineMap> {
        let f = &self.form;
        if z_ini.len() != (f.m + f.p) * f.rho {
            return Err(Error::Dimension(format!(
                "expected |z_ini| = {}, got {}",
                (f.m + f.p) * f.rho,
                z_ini.len()
            )));
        }
        let offset = f.w_solve(&(&f.phi_p * z_ini));
        Ok(AffineMap { linear: self.output_gain.clone(), offset })
    }
}

/// One-shot assembly of the FCE quadratic for a fixed spec and initial
/// condition.
pub fn assemble_fce(
    model: &ArxModel,
    spec: &ControlSpec,
    z_ini: &DVector<f64>,
) -> Result<QuadraticObjective> {
    FceAssembler::new(model, spec)?.objective(z_ini, &spec.y_r)
}

/// Minimizes the assembled objective under the spec's constraints.
///
/// Output boxes act on the expected output and are translated into linear
/// inequalities on `u_f` through `output_map` (required in that case).
pub fn solve_qp(
    obj: &QuadraticObjective,
    u_box: Option<&BoxBounds>,
    y_box: Option<&BoxBounds>,
    output_map: Option<&AffineMap>,
) -> Result<DVector<f64>> {
    let n = obj.g.len();
    let Some(y_box) = y_box else {
        let bounds = u_box.cloned().unwrap_or_else(|| BoxBounds::unbounded(n));
        return Ok(qp::solve_qp(&obj.h, &obj.g, &bounds)?.u);
    };
    let map = output_map
        .ok_or_else(|| Error::InvalidConfig("output bounds need the expected-output map".into()))?;
    if map.linear.ncols() != n
        || map.linear.nrows() != y_box.len()
        || map.offset.len() != y_box.len()
    {
        return Err(Error::Dimension(format!(
            "output map is {}×{} with offset {}, expected {}×{n}",
            map.linear.nrows(),
            map.linear.ncols(),
            map.offset.len(),
            y_box.len()
        )));
    }
    let mut rows: Vec<DVector<f64>> = Vec::new();
    let mut rhs: Vec<f64> = Vec::new();
    for i in 0..y_box.len() {
        if y_box.upper[i].is_finite() {
            rows.push(map.linear.row(i).transpose());
            rhs.push(y_box.upper[i] - map.offset[i]);
        }
        if y_box.lower[i].is_finite() {
            rows.push(-map.linear.row(i).transpose());
            rhs.push(map.offset[i] - y_box.lower[i]);
        }
    }
    if let Some(b) = u_box {
        if b.len() != n {
            return Err(Error::Dimension(format!("u_box has {} entries, expected {n}", b.len())));
        }
        for i in 0..n {
            if b.upper[i].is_finite() {
                let mut e = DVector::zeros(n);
                e[i] = 1.0;
                rows.push(e);
                rhs.push(b.upper[i]);
            }
            if b.lower[i].is_finite() {
                let mut e = DVector::zeros(n);
                e[i] = -1.0;
                rows.push(e);
                rhs.push(-b.lower[i]);
            }
        }
    }
    if rows.is_empty() {
        return Ok(qp::solve_qp(&obj.h, &obj.g, &BoxBounds::unbounded(n))?.u);
    }
    let a = DMatrix::from_rows(&rows.iter().map(|r| r.transpose()).collect::<Vec<_>>());
    let b = DVector::from_vec(rhs);
    Ok(qp::solve_qp_linear(&obj.h, &obj.g, &a, &b)?.u)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn random_vector(len: usize, rng: &mut ChaCha8Rng) -> DVector<f64> {
        DVector::from_fn(len, |_, _| rng.sample::<f64, _>(StandardNormal))
    }

    fn random_spd(n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        let a = DMatrix::from_fn(n, n, |_, _| rng.sample::<f64, _>(StandardNormal));
        &a * a.transpose() + DMatrix::identity(n, n) * 0.5
    }

    /// Handcrafted model with a random stable coefficient bank and a random
    /// SPD regressor covariance.
    fn test_model(rho: usize, m: usize, p: usize, sigma2: f64, seed: u64) -> ArxModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = (m + p) * rho;
        let theta = DMatrix::from_fn(p, d, |_, j| {
            let scale = if j % (m + p) < p { 0.3 / rho as f64 } else { 1.0 };
            scale * rng.sample::<f64, _>(StandardNormal)
        });
        ArxModel {
            rho,
            theta_bar: DVector::from_column_slice(theta.as_slice()),
            s: random_spd(d, &mut rng) * 0.1,
            sigma2_hat: sigma2,
            n: 300,
            m,
            p,
        }
    }

    fn random_spec(t: usize, m: usize, p: usize, rng: &mut ChaCha8Rng) -> ControlSpec {
        let mut spec = ControlSpec::tracking(t, m, p, 1.0, 1e-2);
        spec.q_o = random_spd(p * t, rng);
        spec.r = random_spd(m * t, rng) * 1e-2;
        spec.u_r = random_vector(m * t, rng);
        spec.y_r = random_vector(p * t, rng);
        spec
    }

    /// Direct, assembly-free evaluation of the two objective terms.
    fn direct_fce(
        model: &ArxModel,
        spec: &ControlSpec,
        z_ini: &DVector<f64>,
        u_f: &DVector<f64>,
    ) -> (f64, f64) {
        let form = build_forms(model, spec.t).unwrap();
        let y_bar = form.w_solve(&(&form.phi_p * z_ini + &form.phi_u * u_f));
        let ey = &spec.y_r - &y_bar;
        let eu = &spec.u_r - u_f;
        let j = ey.dot(&(&spec.q_o * &ey)) + eu.dot(&(&spec.r * &eu));
        let w_inv = form.w_solve_matrix(&DMatrix::identity(spec.q_o.nrows(), spec.q_o.nrows()));
        let q_bar = w_inv.transpose() * &spec.q_o * &w_inv;
        let z =
            build_regressors(z_ini, u_f, &spec.y_r, model.rho, spec.t, model.m, model.p).unwrap().z;
        let gram = z.transpose() * &model.s * &z;
        let r_term = model.sigma2_hat
            * (q_bar * gram.kronecker(&DMatrix::identity(model.p, model.p))).trace();
        (j, r_term)
    }

    #[test]
    fn zero_posterior_variance_removes_the_penalty() {
        let model = test_model(2, 1, 1, 0.0, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let spec = random_spec(5, 1, 1, &mut rng);
        let z_ini = random_vector(4, &mut rng);
        let obj = assemble_fce(&model, &spec, &z_ini).unwrap();
        assert_eq!(obj.h_r.amax(), 0.0);
        assert_eq!(obj.g_r.amax(), 0.0);
        assert_eq!(obj.c_r, 0.0);
        for _ in 0..10 {
            let u = random_vector(5, &mut rng);
            let (j, _) = direct_fce(&model, &spec, &z_ini, &u);
            assert!((obj.value(&u) - j).abs() < 1e-10 * (1.0 + j.abs()));
            assert_eq!(fce_components(&obj, &u).r, 0.0);
        }
    }

    #[test]
    fn assembled_quadratic_matches_direct_evaluation() {
        let model = test_model(3, 2, 2, 0.07, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let spec = random_spec(6, 2, 2, &mut rng);
        let z_ini = random_vector(12, &mut rng);
        let obj = assemble_fce(&model, &spec, &z_ini).unwrap();
        for _ in 0..100 {
            let u = random_vector(12, &mut rng);
            let (j, r) = direct_fce(&model, &spec, &z_ini, &u);
            let total = j + r;
            assert!(
                (obj.value(&u) - total).abs() < 1e-10 * (1.0 + total.abs()),
                "assembled {} direct {}",
                obj.value(&u),
                total
            );
            let parts = fce_components(&obj, &u);
            assert!((parts.j - j).abs() < 1e-10 * (1.0 + j.abs()));
            assert!((parts.r - r).abs() < 1e-10 * (1.0 + r.abs()));
        }
    }

    #[test]
    fn objective_equals_posterior_average_of_the_tracking_cost() {
        // FCE(u) should match the Monte-Carlo mean of the frozen-weight cost
        // over coefficient draws θ ~ N(θ̄, σ̂²(S ⊗ I_p)).
        let model = test_model(2, 1, 1, 0.05, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let t = 5;
        let spec = random_spec(t, 1, 1, &mut rng);
        let z_ini = random_vector(4, &mut rng);
        let u_f = random_vector(t, &mut rng);
        let obj = assemble_fce(&model, &spec, &z_ini).unwrap();

        let assembler = FceAssembler::new(&model, &spec).unwrap();
        let q_bar = assembler.q_bar().clone();
        let z = build_regressors(&z_ini, &u_f, &spec.y_r, 2, t, 1, 1).unwrap().z;
        let l_s = model.s.clone().cholesky().unwrap().l();
        let theta = model.theta_matrix();
        let sigma = model.sigma2_hat.sqrt();
        let eu = &spec.u_r - &u_f;
        let input_cost = eu.dot(&(&spec.r * &eu));

        let n_samples = 100_000;
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for _ in 0..n_samples {
            let gauss = DMatrix::from_fn(1, 4, |_, _| rng.sample::<f64, _>(StandardNormal));
            let theta_s = &theta + &gauss * l_s.transpose() * sigma;
            let pred = (&theta_s * &z).transpose();
            let stacked = DVector::from_column_slice(pred.as_slice());
            let e = &spec.y_r - &stacked;
            let cost = e.dot(&(&q_bar * &e)) + input_cost;
            sum += cost;
            sum_sq += cost * cost;
        }
        let mean = sum / n_samples as f64;
        let var = (sum_sq / n_samples as f64 - mean * mean).max(0.0);
        let se = (var / n_samples as f64).sqrt();
        let fce = obj.value(&u_f);
        assert!((mean - fce).abs() < 3.0 * se, "MC mean {mean}, FCE {fce}, SE {se}");
    }

    #[test]
    fn both_hessian_parts_are_positive_semidefinite() {
        let model = test_model(3, 1, 2, 0.2, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let spec = random_spec(6, 1, 2, &mut rng);
        let z_ini = random_vector(9, &mut rng);
        let obj = assemble_fce(&model, &spec, &z_ini).unwrap();
        for (name, mat) in [("H_J", &obj.h_j), ("H_r", &obj.h_r), ("H", &obj.h)] {
            let min_eig =
                mat.clone().symmetric_eigenvalues().iter().cloned().fold(f64::INFINITY, f64::min);
            assert!(min_eig > -1e-9 * (1.0 + mat.amax()), "{name} min eigenvalue {min_eig}");
        }
        let sum_err = (&obj.h_j + &obj.h_r - &obj.h).amax();
        assert!(sum_err < 1e-12);
    }

    #[test]
    fn scaling_the_noise_variance_scales_the_penalty_part() {
        let mut base = test_model(2, 1, 1, 0.03, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let spec = random_spec(5, 1, 1, &mut rng);
        let z_ini = random_vector(4, &mut rng);
        let obj1 = assemble_fce(&base, &spec, &z_ini).unwrap();
        // Power-of-two factor: the scaling must be exact, not just close.
        base.sigma2_hat *= 4.0;
        let obj4 = assemble_fce(&base, &spec, &z_ini).unwrap();
        assert_eq!(obj4.h_r, obj1.h_r.clone() * 4.0);
        assert_eq!(obj4.g_r, obj1.g_r.clone() * 4.0);
        assert_eq!(obj4.c_r, obj1.c_r * 4.0);
        assert_eq!(obj4.h_j, obj1.h_j);
    }

    #[test]
    fn penalty_depends_on_the_reference_window() {
        let model = test_model(2, 1, 1, 0.1, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let spec = random_spec(5, 1, 1, &mut rng);
        let z_ini = random_vector(4, &mut rng);
        let assembler = FceAssembler::new(&model, &spec).unwrap();
        let y_r_a = random_vector(5, &mut rng);
        let y_r_b = random_vector(5, &mut rng);
        let obj_a = assembler.objective(&z_ini, &y_r_a).unwrap();
        let obj_b = assembler.objective(&z_ini, &y_r_b).unwrap();
        assert!((&obj_a.g_r - &obj_b.g_r).amax() > 1e-8);
        assert!((obj_a.c_r - obj_b.c_r).abs() > 1e-10);
    }

    #[test]
    fn objective_is_quadratic_along_any_line() {
        let model = test_model(3, 2, 1, 0.15, 13);
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let spec = random_spec(4, 2, 1, &mut rng);
        let z_ini = random_vector(9, &mut rng);
        let obj = assemble_fce(&model, &spec, &z_ini).unwrap();
        for _ in 0..20 {
            let a = random_vector(8, &mut rng);
            let b = random_vector(8, &mut rng);
            let f = |t: f64| obj.value(&(&a + &b * t));
            // Fit f on {0, 1, 2} and predict t = 3 exactly.
            let (f0, f1, f2) = (f(0.0), f(1.0), f(2.0));
            let predicted = f0 - 3.0 * f1 + 3.0 * f2;
            let f3 = f(3.0);
            assert!(
                (predicted - f3).abs() < 1e-10 * (1.0 + f3.abs()),
                "cubic residual {}",
                predicted - f3
            );
        }
    }

    #[test]
    fn penalty_is_nonnegative_everywhere() {
        let model = test_model(2, 2, 2, 0.08, 15);
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let spec = random_spec(5, 2, 2, &mut rng);
        let z_ini = random_vector(8, &mut rng);
        let obj = assemble_fce(&model, &spec, &z_ini).unwrap();
        for _ in 0..1000 {
            let u = random_vector(10, &mut rng) * 10.0;
            let parts = fce_components(&obj, &u);
            assert!(parts.r >= -1e-10, "negative penalty {}", parts.r);
            let total = obj.value(&u);
            assert!((parts.j + parts.r - total).abs() < 1e-9 * (1.0 + total.abs()));
        }
    }

    #[test]
    fn components_at_the_minimizer_sum_to_the_minimum() {
        let model = test_model(2, 1, 1, 0.05, 17);
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let spec = random_spec(6, 1, 1, &mut rng);
        let z_ini = random_vector(4, &mut rng);
        let obj = assemble_fce(&model, &spec, &z_ini).unwrap();
        let u_star = solve_qp(&obj, None, None, None).unwrap();
        let parts = fce_components(&obj, &u_star);
        let min_val = obj.value(&u_star);
        assert!((parts.j + parts.r - min_val).abs() < 1e-9 * (1.0 + min_val.abs()));
        for _ in 0..20 {
            let u = &u_star + random_vector(6, &mut rng) * 0.1;
            assert!(obj.value(&u) >= min_val - 1e-9);
        }
    }

    #[test]
    fn dimension_mismatches_are_reported() {
        let model = test_model(2, 1, 1, 0.05, 19);
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let spec = random_spec(5, 1, 1, &mut rng);
        let bad_z = random_vector(3, &mut rng);
        assert!(matches!(assemble_fce(&model, &spec, &bad_z), Err(Error::Dimension(_))));
        let mut bad_spec = spec.clone();
        bad_spec.u_r = random_vector(4, &mut rng);
        let z_ini = random_vector(4, &mut rng);
        assert!(matches!(assemble_fce(&model, &bad_spec, &z_ini), Err(Error::Dimension(_))));
        let mut asym = spec.clone();
        asym.q_o[(0, 1)] += 1.0;
        assert!(matches!(assemble_fce(&model, &asym, &z_ini), Err(Error::InvalidConfig(_))));
    }

    fn plain_objective(h: DMatrix<f64>, g: DVector<f64>) -> QuadraticObjective {
        let n = g.len();
        QuadraticObjective {
            h: h.clone(),
            g: g.clone(),
            c: 0.0,
            h_j: h,
            g_j: g,
            c_j: 0.0,
            h_r: DMatrix::zeros(n, n),
            g_r: DVector::zeros(n),
            c_r: 0.0,
        }
    }

    #[test]
    fn unconstrained_vertex_and_clipped_vertex() {
        let n = 4;
        let obj = plain_objective(DMatrix::identity(n, n) * 2.0, DVector::from_element(n, -2.0));
        let u = solve_qp(&obj, None, None, None).unwrap();
        assert!((u - DVector::from_element(n, 1.0)).amax() < 1e-12);
        let bounds = BoxBounds {
            lower: DVector::from_element(n, f64::NEG_INFINITY),
            upper: DVector::from_element(n, 0.5),
        };
        let u = solve_qp(&obj, Some(&bounds), None, None).unwrap();
        assert!((u - DVector::from_element(n, 0.5)).amax() < 1e-12);
    }

    #[test]
    fn boxed_solution_matches_projected_gradient_oracle() {
        let n = 20;
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        for round in 0..5 {
            let h = random_spd(n, &mut rng);
            let g = random_vector(n, &mut rng) * 3.0;
            let bounds = BoxBounds::symmetric(n, 0.4);
            let obj = plain_objective(h.clone(), g.clone());
            let u = solve_qp(&obj, Some(&bounds), None, None).unwrap();

            // Projected gradient descent run to a tight fixed-point residual.
            let lip = h.clone().symmetric_eigenvalues().max();
            let step = 1.0 / lip;
            let clamp = |v: &DVector<f64>| {
                DVector::from_fn(n, |i, _| v[i].clamp(bounds.lower[i], bounds.upper[i]))
            };
            let mut x = DVector::zeros(n);
            let mut residual = f64::INFINITY;
            for _ in 0..200_000 {
                let next = clamp(&(&x - (&h * &x + &g) * step));
                residual = (&next - &x).amax();
                x = next;
                if residual < 1e-13 {
                    break;
                }
            }
            assert!(residual < 1e-10, "oracle did not converge, residual {residual}");
            assert!((&u - &x).amax() < 1e-8, "round {round}: diff {}", (&u - &x).amax());
        }
    }

    #[test]
    fn output_bounds_bind_through_the_affine_map() {
        let model = test_model(2, 1, 1, 0.02, 23);
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let t = 4;
        let mut spec = random_spec(t, 1, 1, &mut rng);
        spec.y_r = DVector::from_element(t, 2.0);
        let z_ini = random_vector(4, &mut rng);
        let assembler = FceAssembler::new(&model, &spec).unwrap();
        let obj = assembler.objective(&z_ini, &spec.y_r).unwrap();
        let map = assembler.expected_output_map(&z_ini).unwrap();

        let free = solve_qp(&obj, None, None, None).unwrap();
        let free_output = map.apply(&free);
        // Cap the expected output strictly below the unconstrained one.
        let cap = free_output.max() - 0.25;
        let y_box = BoxBounds {
            lower: DVector::from_element(t, f64::NEG_INFINITY),
            upper: DVector::from_element(t, cap),
        };
        let u = solve_qp(&obj, None, Some(&y_box), Some(&map)).unwrap();
        let y = map.apply(&u);
        assert!(y.max() <= cap + 1e-6, "violated cap by {}", y.max() - cap);

        // KKT: the gradient must be a nonnegative combination of the active
        // output-row gradients.
        let grad = &obj.h * &u + &obj.g;
        let active: Vec<usize> = (0..t).filter(|&i| (y[i] - cap).abs() < 1e-5).collect();
        assert!(!active.is_empty());
        let a_act = DMatrix::from_rows(
            &active.iter().map(|&i| map.linear.row(i).into_owned()).collect::<Vec<_>>(),
        );
        // Least-squares multipliers for grad + A_actᵀ λ = 0.
        let lambda = a_act.transpose().svd(true, true).solve(&(-&grad), 1e-12).unwrap();
        let residual = (&grad + a_act.transpose() * &lambda).amax();
        assert!(residual < 1e-5 * (1.0 + grad.amax()), "stationarity residual {residual}");
        for l in lambda.iter() {
            assert!(*l > -1e-6, "negative multiplier {l}");
        }

        // No feasible point does better.
        let f_star = obj.value(&u);
        let mut tested = 0;
        while tested < 50 {
            let cand = &u + random_vector(t, &mut rng) * 0.2;
            if map.apply(&cand).max() <= cap {
                assert!(obj.value(&cand) >= f_star - 1e-9);
                tested += 1;
            }
        }
    }

    #[test]
    fn output_bounds_without_a_map_are_rejected() {
        let obj = plain_objective(DMatrix::identity(2, 2), DVector::zeros(2));
        let y_box = BoxBounds::symmetric(2, 1.0);
        assert!(matches!(solve_qp(&obj, None, Some(&y_box), None), Err(Error::InvalidConfig(_))));
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]
            // Three-point quadratic extrapolation reproduces a fourth point on
            // random lines through random objectives.
            #[test]
            fn line_restriction_is_exactly_quadratic(seed in 0u64..300) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let model = test_model(2, 1, 1, 0.02 + 0.1 * (seed as f64 % 7.0), seed + 1000);
                let spec = random_spec(4, 1, 1, &mut rng);
                let z_ini = random_vector(4, &mut rng);
                let obj = assemble_fce(&model, &spec, &z_ini).unwrap();
                let a = random_vector(4, &mut rng);
                let b = random_vector(4, &mut rng);
                let f = |t: f64| obj.value(&(&a + &b * t));
                let predicted = f(0.0) - 3.0 * f(1.0) + 3.0 * f(2.0);
                let f3 = f(3.0);
                prop_assert!((predicted - f3).abs() < 1e-9 * (1.0 + f3.abs()));
            }
        }
    }
}
