//! Receding-horizon control laws sharing one closed-loop interface.
//!
//! Every law plans over a horizon of `T` steps from the current initial
//! condition `z_ini` (the last ρ joint samples, oldest first) and a reference
//! window, and returns only the first input of the plan. Laws that maintain
//! internal state (the model-based oracle) update it through `observe`.

use nalgebra::{DMatrix, DVector};

use crate::arx::ArxModel;
use crate::error::{Error, Result};
use crate::fce::{self, AffineMap, ControlSpec, FceAssembler, QuadraticObjective};
use crate::hankel::Dataset;
use crate::qp;
use crate::sim::PlantModel;
use crate::subspace::{
    deepc_solve_factors, gamma_solve, online_beta, DeePcConfig, GammaConfig, LqFactors,
};

/// A receding-horizon controller usable inside the closed-loop simulator.
pub trait ControlLaw {
    /// Stable label used in logs and reports.
    fn name(&self) -> &str;

    /// Planning horizon `T`.
    fn horizon(&self) -> usize;

    /// Called once with the warmup records before the loop starts.
    fn warm_start(&mut self, _warmup: &Dataset) -> Result<()> {
        Ok(())
    }

    /// Plans from `z_ini` (length `(m+p)ρ`) against the stacked reference
    /// window (length `pT`) and returns the input to apply now (length `m`).
    fn plan(&mut self, z_ini: &DVector<f64>, y_r_window: &DVector<f64>) -> Result<DVector<f64>>;

    /// Receives the realized output/input pair after each step.
    fn observe(&mut self, _y: &DVector<f64>, _u: &DVector<f64>) {}
}

/// Applies zero input at every step; a baseline and test fixture.
#[derive(Debug, Clone)]
pub struct ZeroLaw {
    m: usize,
    t: usize,
}

impl ZeroLaw {
    pub fn new(m: usize, _p: usize, t: usize) -> Self {
        ZeroLaw { m, t }
    }
}

impl ControlLaw for ZeroLaw {
    fn name(&self) -> &str {
        "zero"
    }

    fn horizon(&self) -> usize {
        self.t
    }

    fn plan(&mut self, _z_ini: &DVector<f64>, _y_r: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(DVector::zeros(self.m))
    }
}

/// Final-control-error law: minimizes the assembled quadratic (tracking cost
/// plus estimation-uncertainty penalty) each step, honoring optional input
/// and expected-output boxes.
pub struct FceLaw {
    assembler: FceAssembler,
    spec: ControlSpec,
    m: usize,
}

impl FceLaw {
    pub fn new(model: &ArxModel, spec: ControlSpec) -> Result<Self> {
        let assembler = FceAssembler::new(model, &spec)?;
        let m = model.m;
        Ok(FceLaw { assembler, spec, m })
    }

    /// The assembled objective for an explicit initial condition, exposed so
    /// callers can inspect the cost surface the law optimizes.
    pub fn objective(
        &self,
        z_ini: &DVector<f64>,
        y_r: &DVector<f64>,
    ) -> Result<QuadraticObjective> {
        self.assembler.objective(z_ini, y_r)
    }
}

impl ControlLaw for FceLaw {
    fn name(&self) -> &str {
        "fce"
    }

    fn horizon(&self) -> usize {
        self.spec.t
    }

    fn plan(&mut self, z_ini: &DVector<f64>, y_r_window: &DVector<f64>) -> Result<DVector<f64>> {
        let obj = self.assembler.objective(z_ini, y_r_window)?;
        let map = if self.spec.y_box.is_some() {
            Some(self.assembler.expected_output_map(z_ini)?)
        } else {
            None
        };
        let u_f =
            fce::solve_qp(&obj, self.spec.u_box.as_ref(), self.spec.y_box.as_ref(), map.as_ref())?;
        Ok(u_f.rows(0, self.m).into_owned())
    }
}

/// Model-based receding-horizon oracle: plans with the true state-space
/// matrices and a steady-state innovation observer. Serves as the
/// full-information lower bound the data-driven schemes are compared against.
pub struct OracleMpcLaw {
    plant: PlantModel,
    spec: ControlSpec,
    /// `pT × n` free-response map, block row `h` equal to `CAʰ`.
    gamma: DMatrix<f64>,
    /// `pT × mT` forced-response map, block `(h, j)` equal to `CA^{h−1−j}B`
    /// below the diagonal and `D` on it.
    s_mat: DMatrix<f64>,
    h: DMatrix<f64>,
    x_hat: DVector<f64>,
}

impl OracleMpcLaw {
    pub fn new(plant: PlantModel, spec: ControlSpec) -> Result<Self> {
        let (n, m, p) = (plant.n(), plant.m(), plant.p());
        let t = spec.t;
        if spec.q_o.nrows() != p * t || spec.r.nrows() != m * t {
            return Err(Error::Dimension(format!(
                "spec weights do not match plant dimensions m = {m}, p = {p}, T = {t}"
            )));
        }
        let mut gamma = DMatrix::zeros(p * t, n);
        let mut a_pow = DMatrix::identity(n, n);
        for h in 0..t {
            gamma.view_mut((h * p, 0), (p, n)).copy_from(&(plant.c() * &a_pow));
            a_pow = plant.a() * a_pow;
        }
        let mut s_mat = DMatrix::zeros(p * t, m * t);
        // Markov parameters CA^k B for k = 0..T−2.
        let mut markov = Vec::with_capacity(t);
        let mut a_pow_b = plant.b().clone();
        for _ in 0..t.saturating_sub(1) {
            markov.push(plant.c() * &a_pow_b);
            a_pow_b = plant.a() * a_pow_b;
        }
        for h in 0..t {
            for j in 0..h {
                s_mat.view_mut((h * p, j * m), (p, m)).copy_from(&markov[h - 1 - j]);
            }
            s_mat.view_mut((h * p, h * m), (p, m)).copy_from(plant.d());
        }
        let h = (s_mat.transpose() * &spec.q_o * &s_mat + &spec.r) * 2.0;
        let x_hat = DVector::zeros(n);
        Ok(OracleMpcLaw { plant, spec, gamma, s_mat, h, x_hat })
    }

    pub fn state_estimate(&self) -> &DVector<f64> {
        &self.x_hat
    }

    /// Predicted output window from the current state estimate:
    /// `ŷ_f = Γ x̂ + S u_f`.
    pub fn predicted_outputs(&self, u_f: &DVector<f64>) -> DVector<f64> {
        &self.gamma * &self.x_hat + &self.s_mat * u_f
    }
}

impl ControlLaw for OracleMpcLaw {
    fn name(&self) -> &str {
        "mpc-oracle"
    }

    fn horizon(&self) -> usize {
        self.spec.t
    }

    fn warm_start(&mut self, warmup: &Dataset) -> Result<()> {
        if warmup.m() != self.plant.m() || warmup.p() != self.plant.p() {
            return Err(Error::Dimension("warmup dimensions do not match the plant".into()));
        }
        self.x_hat = self.plant.filter_state(warmup);
        Ok(())
    }

    fn plan(&mut self, _z_ini: &DVector<f64>, y_r_window: &DVector<f64>) -> Result<DVector<f64>> {
        let m = self.plant.m();
        if y_r_window.len() != self.spec.y_r.len() {
            return Err(Error::Dimension(format!(
                "reference window has {} entries, expected {}",
                y_r_window.len(),
                self.spec.y_r.len()
            )));
        }
        let free = y_r_window - &self.gamma * &self.x_hat;
        let g = -(self.s_mat.transpose() * &self.spec.q_o * &free + &self.spec.r * &self.spec.u_r)
            * 2.0;
        let u_f = if self.spec.y_box.is_some() {
            // Bounds on predicted outputs become linear rows via ŷ = Γx̂ + Su.
            let obj = mpc_objective(&self.h, &g);
            let map = AffineMap { linear: self.s_mat.clone(), offset: &self.gamma * &self.x_hat };
            fce::solve_qp(&obj, self.spec.u_box.as_ref(), self.spec.y_box.as_ref(), Some(&map))?
        } else if let Some(bounds) = &self.spec.u_box {
            qp::solve_qp(&self.h, &g, bounds)?.u
        } else {
            qp::solve_qp(&self.h, &g, &qp::BoxBounds::unbounded(g.len()))?.u
        };
        Ok(u_f.rows(0, m).into_owned())
    }

    fn observe(&mut self, y: &DVector<f64>, u: &DVector<f64>) {
        // Steady-state innovation observer, the same recursion the plant's
        // offline filter uses.
        let e = y - self.plant.c() * &self.x_hat - self.plant.d() * u;
        self.x_hat = self.plant.a() * &self.x_hat + self.plant.b() * u + self.plant.k() * &e;
    }
}

/// Wraps a pure quadratic in the objective container so the shared QP entry
/// point (with its output-bound translation) can be reused.
fn mpc_objective(h: &DMatrix<f64>, g: &DVector<f64>) -> QuadraticObjective {
    let n = g.len();
    QuadraticObjective {
        h: h.clone(),
        g: g.clone(),
        c: 0.0,
        h_j: h.clone(),
        g_j: g.clone(),
        c_j: 0.0,
        h_r: DMatrix::zeros(n, n),
        g_r: DVector::zeros(n),
        c_r: 0.0,
    }
}

/// How a γ-DDPC law picks its regularization weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GammaTuning {
    /// Weights fixed ahead of time (offline-tuned grids).
    Fixed(GammaConfig),
    /// `β2 = σ̂²·Tr[Q_o]/N` from the factors, `γ3` pinned to zero.
    Thm3,
    /// `β2 = 0`, `β3 = σ̂²·Tr[Q_o]/N` from the factors.
    OnlineGamma3,
}

/// γ-DDPC law over precomputed LQ factors.
pub struct GammaLaw {
    factors: LqFactors,
    spec: ControlSpec,
    cfg: GammaConfig,
    label: String,
    m: usize,
}

impl GammaLaw {
    pub fn new(factors: LqFactors, spec: ControlSpec, tuning: GammaTuning) -> Result<Self> {
        if spec.u_box.is_some() || spec.y_box.is_some() {
            return Err(Error::InvalidConfig(
                "γ-DDPC laws are unconstrained; drop u_box/y_box".into(),
            ));
        }
        if spec.t == 0 || factors.mt() % spec.t != 0 || factors.pt() % spec.t != 0 {
            return Err(Error::Dimension(format!(
                "factors with mT = {}, pT = {} do not match horizon T = {}",
                factors.mt(),
                factors.pt(),
                spec.t
            )));
        }
        let m = factors.mt() / spec.t;
        let (cfg, label) = match tuning {
            GammaTuning::Fixed(cfg) => (cfg, "gamma-ddpc".to_string()),
            GammaTuning::Thm3 => (
                GammaConfig { beta2: online_beta(&factors, &spec.q_o), beta3: f64::INFINITY },
                "gamma2-online".to_string(),
            ),
            GammaTuning::OnlineGamma3 => (
                GammaConfig { beta2: 0.0, beta3: online_beta(&factors, &spec.q_o) },
                "gamma3-online".to_string(),
            ),
        };
        Ok(GammaLaw { factors, spec, cfg, label, m })
    }

    /// Replaces the report label (the default encodes only the tuning rule).
    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = label.into();
        self
    }

    pub fn config(&self) -> GammaConfig {
        self.cfg
    }
}

impl ControlLaw for GammaLaw {
    fn name(&self) -> &str {
        &self.label
    }

    fn horizon(&self) -> usize {
        self.spec.t
    }

    fn plan(&mut self, z_ini: &DVector<f64>, y_r_window: &DVector<f64>) -> Result<DVector<f64>> {
        self.spec.y_r.copy_from(y_r_window);
        let u_f = gamma_solve(&self.factors, z_ini, &self.spec, &self.cfg)?;
        Ok(u_f.rows(0, self.m).into_owned())
    }
}

/// DeePC law over precomputed LQ factors.
pub struct DeepcLaw {
    factors: LqFactors,
    spec: ControlSpec,
    cfg: DeePcConfig,
    m: usize,
}

impl DeepcLaw {
    pub fn new(factors: LqFactors, spec: ControlSpec, cfg: DeePcConfig) -> Result<Self> {
        if spec.u_box.is_some() || spec.y_box.is_some() {
            return Err(Error::InvalidConfig(
                "the DeePC law is unconstrained; drop u_box/y_box".into(),
            ));
        }
        if spec.t == 0 || factors.mt() % spec.t != 0 {
            return Err(Error::Dimension(format!(
                "factors with mT = {} do not match horizon T = {}",
                factors.mt(),
                spec.t
            )));
        }
        let m = factors.mt() / spec.t;
        Ok(DeepcLaw { factors, spec, cfg, m })
    }
}

impl ControlLaw for DeepcLaw {
    fn name(&self) -> &str {
        "deepc"
    }

    fn horizon(&self) -> usize {
        self.spec.t
    }

    fn plan(&mut self, z_ini: &DVector<f64>, y_r_window: &DVector<f64>) -> Result<DVector<f64>> {
        self.spec.y_r.copy_from(y_r_window);
        let u_f = deepc_solve_factors(&self.factors, z_ini, &self.spec, &self.cfg)?;
        Ok(u_f.rows(0, self.m).into_owned())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arx::fit_arx;
    use crate::hankel::partition;
    use crate::qp::BoxBounds;
    use crate::sim::{
        run_closed_loop, simulate_open_loop, ExcitationSpec, ReferenceKind, ReferenceSpec,
    };
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn random_vector(len: usize, rng: &mut ChaCha8Rng) -> DVector<f64> {
        DVector::from_fn(len, |_, _| rng.sample::<f64, _>(StandardNormal))
    }

    #[test]
    fn zero_law_plans_zeros() {
        let mut law = ZeroLaw::new(2, 1, 7);
        assert_eq!(law.name(), "zero");
        assert_eq!(law.horizon(), 7);
        let u = law.plan(&DVector::zeros(6), &DVector::zeros(7)).unwrap();
        assert_eq!(u, DVector::zeros(2));
    }

    #[test]
    fn laws_are_object_safe() {
        let mut laws: Vec<Box<dyn ControlLaw>> = vec![Box::new(ZeroLaw::new(1, 1, 3))];
        assert_eq!(laws[0].name(), "zero");
        let u = laws[0].plan(&DVector::zeros(2), &DVector::zeros(3)).unwrap();
        assert_eq!(u.len(), 1);
    }

    #[test]
    fn mpc_prediction_maps_match_iterated_simulation() {
        let plant = PlantModel::benchmark().noise_free();
        let t = 8;
        let spec = ControlSpec::tracking(t, 1, 1, 1.0, 1e-4);
        let mut law = OracleMpcLaw::new(plant.clone(), spec).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x0 = random_vector(4, &mut rng);
        law.x_hat = x0.clone();
        let u_f = random_vector(t, &mut rng);
        let predicted = law.predicted_outputs(&u_f);

        let mut x = x0;
        for h in 0..t {
            let u = u_f.rows(h, 1).into_owned();
            let y = plant.c() * &x + plant.d() * &u;
            assert!(
                (predicted[h] - y[0]).abs() < 1e-12,
                "step {h}: map {} vs simulation {}",
                predicted[h],
                y[0]
            );
            x = plant.a() * &x + plant.b() * &u;
        }
    }

    #[test]
    fn mpc_observe_reproduces_the_offline_filter() {
        let plant = PlantModel::benchmark();
        let data = simulate_open_loop(&plant, &ExcitationSpec::default(), 120, 2).unwrap();
        let spec = ControlSpec::tracking(5, 1, 1, 1.0, 1e-4);
        let mut law = OracleMpcLaw::new(plant.clone(), spec).unwrap();
        for t in 0..data.n_data() {
            let y = data.y_log().row(t).transpose();
            let u = data.u_log().row(t).transpose();
            law.observe(&y, &u);
        }
        let offline = plant.filter_state(&data);
        assert!((law.state_estimate() - offline).amax() < 1e-12);
    }

    #[test]
    fn mpc_tracks_a_constant_reference_with_negligible_index() {
        let plant = PlantModel::benchmark().noise_free();
        let spec = ControlSpec::tracking(20, 1, 1, 1.0, 1e-6);
        let mut law = OracleMpcLaw::new(plant.clone(), spec).unwrap();
        let warmup = Dataset::new(DMatrix::zeros(20, 1), DMatrix::zeros(20, 1)).unwrap();
        let reference = ReferenceSpec { kind: ReferenceKind::Constant(0.01), t_v: 500 };
        let result = run_closed_loop(&plant, &mut law, &reference, 4, &warmup, 1e-6, 3).unwrap();
        assert!(!result.unstable);
        assert!(result.j_a < 1e-6, "J_a = {}", result.j_a);
        // Steady state: output settles on the reference up to the tiny bias
        // the input penalty introduces.
        let tail_err = (result.y_log[(499, 0)] - 0.01).abs();
        assert!(tail_err < 1e-6, "tail error {tail_err}");
    }

    #[test]
    fn mpc_honors_input_bounds_in_closed_loop() {
        let plant = PlantModel::benchmark();
        let mut spec = ControlSpec::tracking(20, 1, 1, 1.0, 1e-6);
        let cap = 0.004;
        spec.u_box = Some(BoxBounds::symmetric(20, cap));
        let mut law = OracleMpcLaw::new(plant.clone(), spec).unwrap();
        let warmup = simulate_open_loop(&plant, &ExcitationSpec::default(), 40, 4).unwrap();
        let reference = ReferenceSpec { kind: ReferenceKind::Constant(0.5), t_v: 120 };
        let result = run_closed_loop(&plant, &mut law, &reference, 4, &warmup, 1e-6, 5).unwrap();
        assert!(result.u_log.amax() <= cap + 1e-10);
        // The cap binds: an unconstrained law would exceed it on this setpoint.
        assert!(result.u_log.amax() > cap - 1e-6);
    }

    #[test]
    fn fce_law_tracks_well_when_fitted_on_clean_data() {
        let plant = PlantModel::benchmark().noise_free();
        let data = simulate_open_loop(&plant, &ExcitationSpec::default(), 2500, 6).unwrap();
        let parts = partition(&data, 4, 20).unwrap();
        let model = fit_arx(&parts).unwrap();
        let spec = ControlSpec::tracking(20, 1, 1, 1.0, 1e-6);
        let mut law = FceLaw::new(&model, spec).unwrap();
        assert_eq!(law.name(), "fce");
        let warmup = Dataset::new(DMatrix::zeros(20, 1), DMatrix::zeros(20, 1)).unwrap();
        let reference = ReferenceSpec { kind: ReferenceKind::Constant(0.01), t_v: 500 };
        let result = run_closed_loop(&plant, &mut law, &reference, 4, &warmup, 1e-6, 7).unwrap();
        assert!(!result.unstable);
        assert!(result.j_a < 1e-5, "J_a = {}", result.j_a);
    }

    #[test]
    fn fce_law_honors_input_bounds() {
        let plant = PlantModel::benchmark();
        let data = simulate_open_loop(&plant, &ExcitationSpec::default(), 400, 8).unwrap();
        let parts = partition(&data, 4, 20).unwrap();
        let model = fit_arx(&parts).unwrap();
        let mut spec = ControlSpec::tracking(20, 1, 1, 1.0, 1e-6);
        let cap = 0.002;
        spec.u_box = Some(BoxBounds::symmetric(20, cap));
        let mut law = FceLaw::new(&model, spec).unwrap();
        let warmup = simulate_open_loop(&plant, &ExcitationSpec::default(), 40, 9).unwrap();
        let reference = ReferenceSpec { kind: ReferenceKind::Constant(0.5), t_v: 100 };
        let result = run_closed_loop(&plant, &mut law, &reference, 4, &warmup, 1e-6, 10).unwrap();
        assert!(result.u_log.amax() <= cap + 1e-10);
    }

    #[test]
    fn gamma_law_rejects_constraints() {
        let plant = PlantModel::benchmark();
        let data = simulate_open_loop(&plant, &ExcitationSpec::default(), 250, 11).unwrap();
        let parts = partition(&data, 3, 10).unwrap();
        let f = crate::subspace::lq_decompose(&parts.z_p, &parts.u_f, &parts.y_f).unwrap();
        let mut spec = ControlSpec::tracking(10, 1, 1, 1.0, 1e-4);
        spec.u_box = Some(BoxBounds::symmetric(10, 1.0));
        let r = GammaLaw::new(f, spec, GammaTuning::Thm3);
        assert!(matches!(r, Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn thm3_law_equals_the_fixed_law_with_the_closed_form_weight() {
        let plant = PlantModel::benchmark();
        let data = simulate_open_loop(&plant, &ExcitationSpec::default(), 250, 12).unwrap();
        let parts = partition(&data, 3, 10).unwrap();
        let f = crate::subspace::lq_decompose(&parts.z_p, &parts.u_f, &parts.y_f).unwrap();
        let spec = ControlSpec::tracking(10, 1, 1, 1.0, 1e-4);
        let beta2 = online_beta(&f, &spec.q_o);

        let mut thm3 = GammaLaw::new(f.clone(), spec.clone(), GammaTuning::Thm3).unwrap();
        let fixed_cfg = GammaConfig { beta2, beta3: f64::INFINITY };
        let mut fixed = GammaLaw::new(f, spec, GammaTuning::Fixed(fixed_cfg)).unwrap();
        assert_eq!(thm3.config(), fixed.config());

        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..5 {
            let z_ini = random_vector(6, &mut rng);
            let y_r = random_vector(10, &mut rng);
            let a = thm3.plan(&z_ini, &y_r).unwrap();
            let b = fixed.plan(&z_ini, &y_r).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn gamma3_online_uses_the_closed_form_on_the_slack_weight() {
        let plant = PlantModel::benchmark();
        let data = simulate_open_loop(&plant, &ExcitationSpec::default(), 250, 14).unwrap();
        let parts = partition(&data, 3, 10).unwrap();
        let f = crate::subspace::lq_decompose(&parts.z_p, &parts.u_f, &parts.y_f).unwrap();
        let spec = ControlSpec::tracking(10, 1, 1, 1.0, 1e-4);
        let expected = online_beta(&f, &spec.q_o);
        let law = GammaLaw::new(f, spec, GammaTuning::OnlineGamma3).unwrap();
        assert_eq!(law.config().beta2, 0.0);
        assert_eq!(law.config().beta3, expected);
        assert_eq!(law.name(), "gamma3-online");
    }

    #[test]
    fn deepc_law_plans_the_same_input_as_the_solver() {
        let plant = PlantModel::benchmark();
        let data = simulate_open_loop(&plant, &ExcitationSpec::default(), 250, 15).unwrap();
        let parts = partition(&data, 3, 10).unwrap();
        let f = crate::subspace::lq_decompose(&parts.z_p, &parts.u_f, &parts.y_f).unwrap();
        let spec = ControlSpec::tracking(10, 1, 1, 1.0, 1e-4);
        let cfg = DeePcConfig { lambda1: 0.1, lambda2: 1e-3 };
        let mut law = DeepcLaw::new(f.clone(), spec.clone(), cfg).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let z_ini = random_vector(6, &mut rng);
        let y_r = random_vector(10, &mut rng);
        let first = law.plan(&z_ini, &y_r).unwrap();

        let mut spec_ref = spec;
        spec_ref.y_r = y_r;
        let full = deepc_solve_factors(&f, &z_ini, &spec_ref, &cfg).unwrap();
        assert_eq!(first[0], full[0]);
    }

    #[test]
    fn relabeled_gamma_law_reports_its_label() {
        let plant = PlantModel::benchmark();
        let data = simulate_open_loop(&plant, &ExcitationSpec::default(), 250, 17).unwrap();
        let parts = partition(&data, 3, 10).unwrap();
        let f = crate::subspace::lq_decompose(&parts.z_p, &parts.u_f, &parts.y_f).unwrap();
        let spec = ControlSpec::tracking(10, 1, 1, 1.0, 1e-4);
        let cfg = GammaConfig { beta2: 0.5, beta3: f64::INFINITY };
        let law = GammaLaw::new(f, spec, GammaTuning::Fixed(cfg)).unwrap().with_label("gamma2");
        assert_eq!(law.name(), "gamma2");
    }
}
