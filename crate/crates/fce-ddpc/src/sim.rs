//! Stochastic LTI simulation in innovation form, excitation and reference
//! generation, and receding-horizon closed-loop execution.
//!
//! The plant is
//!
//! ```text
//! x(t+1) = A x(t) + B u(t) + K e(t)
//! y(t)   = C x(t) + D u(t) + e(t),     e(t) ~ N(0, σ² I_p)
//! ```
//!
//! with `A − KC` stable so the steady-state innovation filter is a valid
//! one-step predictor. Open-loop identification data uses low-pass filtered
//! white-noise excitation; the excitation and innovation streams are seeded
//! independently so that a noise-free twin of a dataset shares its input
//! sequence exactly.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::control::ControlLaw;
use crate::error::{Error, Result};
use crate::hankel::Dataset;

/// Samples discarded before the logged window so filter and plant transients
/// do not contaminate identification data.
pub const BURN_IN: usize = 200;

/// Output magnitude beyond which a closed loop is declared unstable.
pub const BLOWUP_LIMIT: f64 = 1e6;

/// splitmix64 mixing for deriving independent named seed streams.
pub(crate) fn mix_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

const EXCITATION_STREAM: u64 = 1;
const INNOVATION_STREAM: u64 = 2;

/// Innovation-form state-space model.
#[derive(Debug, Clone)]
pub struct PlantModel {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    c: DMatrix<f64>,
    d: DMatrix<f64>,
    k: DMatrix<f64>,
    sigma2: f64,
}

impl PlantModel {
    /// Validates dimensions, `σ² ≥ 0`, and stability of `A − KC`.
    pub fn new(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        c: DMatrix<f64>,
        d: DMatrix<f64>,
        k: DMatrix<f64>,
        sigma2: f64,
    ) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n {
            return Err(Error::Dimension("A must be square".into()));
        }
        let m = b.ncols();
        let p = c.nrows();
        if b.nrows() != n || c.ncols() != n || d.shape() != (p, m) || k.shape() != (n, p) {
            return Err(Error::Dimension(format!(
                "inconsistent state-space dimensions: A {n}×{n}, B {}×{}, C {}×{}, D {}×{}, K {}×{}",
                b.nrows(),
                b.ncols(),
                c.nrows(),
                c.ncols(),
                d.nrows(),
                d.ncols(),
                k.nrows(),
                k.ncols()
            )));
        }
        if !sigma2.is_finite() || sigma2 < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "sigma2 must be finite and ≥ 0, got {sigma2}"
            )));
        }
        let plant = PlantModel { a, b, c, d, k, sigma2 };
        let radius = plant.predictor_radius();
        if radius.is_nan() || radius >= 1.0 {
            return Err(Error::UnstableObserver { radius });
        }
        Ok(plant)
    }

    /// The fourth-order single-input single-output study plant.
    pub fn benchmark() -> Self {
        let a = DMatrix::from_row_slice(
            4,
            4,
            &[
                1.4183, -1.5894, 1.3161, -0.8864, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0,
                1.0, 0.0,
            ],
        );
        let b = DMatrix::from_column_slice(4, 1, &[1.0, 0.0, 0.0, 0.0]);
        let c = DMatrix::from_row_slice(1, 4, &[0.0, 0.0, 0.2826, 0.5067]);
        let d = DMatrix::zeros(1, 1);
        let k = DMatrix::from_column_slice(4, 1, &[0.1784, -0.6523, 0.2020, 2.2910]);
        PlantModel::new(a, b, c, d, k, 4.81e-3).expect("benchmark plant is valid")
    }

    /// Same plant with the innovation variance removed.
    pub fn noise_free(&self) -> Self {
        let mut twin = self.clone();
        twin.sigma2 = 0.0;
        twin
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub fn c(&self) -> &DMatrix<f64> {
        &self.c
    }

    pub fn d(&self) -> &DMatrix<f64> {
        &self.d
    }

    pub fn k(&self) -> &DMatrix<f64> {
        &self.k
    }

    pub fn sigma2(&self) -> f64 {
        self.sigma2
    }

    /// State dimension.
    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    /// Input dimension.
    pub fn m(&self) -> usize {
        self.b.ncols()
    }

    /// Output dimension.
    pub fn p(&self) -> usize {
        self.c.nrows()
    }

    /// Spectral radius of the predictor matrix `A − KC`.
    pub fn predictor_radius(&self) -> f64 {
        spectral_radius(&(&self.a - &self.k * &self.c))
    }

    /// Spectral radius of `A`.
    pub fn state_radius(&self) -> f64 {
        spectral_radius(&self.a)
    }

    /// Static gain `C (I − A)⁻¹ B + D`.
    pub fn dc_gain(&self) -> Result<DMatrix<f64>> {
        let n = self.n();
        let inv = (DMatrix::identity(n, n) - &self.a)
            .try_inverse()
            .ok_or_else(|| Error::Degenerate("plant has a pole at z = 1".into()))?;
        Ok(&self.c * inv * &self.b + &self.d)
    }

    /// Runs the steady-state innovation filter
    /// `x̂ ← A x̂ + B u + K (y − C x̂ − D u)` over all samples from `x̂ = 0` and
    /// returns the final state estimate.
    pub fn filter_state(&self, data: &Dataset) -> DVector<f64> {
        let mut x = DVector::zeros(self.n());
        for t in 0..data.n_data() {
            let u = data.u_at(t);
            let y = data.y_at(t);
            let innov = y - &self.c * &x - &self.d * &u;
            x = &self.a * &x + &self.b * &u + &self.k * innov;
        }
        x
    }
}

fn spectral_radius(mat: &DMatrix<f64>) -> f64 {
    mat.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max)
}

/// Low-pass filtered white-noise excitation for identification experiments.
#[derive(Debug, Clone, PartialEq)]
pub struct ExcitationSpec {
    /// Cutoff of the second-order Butterworth low-pass, in rad/sample.
    pub cutoff: f64,
    /// Variance of the white noise driving the filter.
    pub pre_filter_variance: f64,
}

impl Default for ExcitationSpec {
    fn default() -> Self {
        ExcitationSpec { cutoff: 1.8, pre_filter_variance: 1.0 }
    }
}

/// Second-order Butterworth low-pass coefficients `(b, a)` with `a[0] = 1`
/// implied, from the bilinear-transform biquad design.
pub fn butterworth_lowpass(cutoff: f64) -> Result<([f64; 3], [f64; 2])> {
    if !(cutoff > 0.0 && cutoff < std::f64::consts::PI) {
        return Err(Error::InvalidConfig(format!(
            "cutoff must lie in (0, π) rad/sample, got {cutoff}"
        )));
    }
    let (sin_w, cos_w) = cutoff.sin_cos();
    let alpha = sin_w / std::f64::consts::SQRT_2;
    let a0 = 1.0 + alpha;
    let b0 = 0.5 * (1.0 - cos_w) / a0;
    Ok(([b0, 2.0 * b0, b0], [-2.0 * cos_w / a0, (1.0 - alpha) / a0]))
}

/// Applies the biquad to a signal with zero initial filter state.
fn filter_biquad(signal: &[f64], b: &[f64; 3], a: &[f64; 2]) -> Vec<f64> {
    let mut out = Vec::with_capacity(signal.len());
    let (mut x1, mut x2, mut y1, mut y2) = (0.0, 0.0, 0.0, 0.0);
    for &x in signal {
        let y = b[0] * x + b[1] * x1 + b[2] * x2 - a[0] * y1 - a[1] * y2;
        out.push(y);
        x2 = x1;
        x1 = x;
        y2 = y1;
        y1 = y;
    }
    out
}

/// Simulates the plant in open loop under filtered-noise excitation.
///
/// The excitation and innovation sequences come from independent streams
/// derived from `seed`, and a burn-in of [`BURN_IN`] samples is discarded, so
/// the logged window is stationary and a `σ² = 0` twin shares its inputs.
pub fn simulate_open_loop(
    plant: &PlantModel,
    exc: &ExcitationSpec,
    n_data: usize,
    seed: u64,
) -> Result<Dataset> {
    if n_data < 1 {
        return Err(Error::InvalidConfig("n_data must be ≥ 1".into()));
    }
    if exc.pre_filter_variance < 0.0 || !exc.pre_filter_variance.is_finite() {
        return Err(Error::InvalidConfig(format!(
            "pre_filter_variance must be finite and ≥ 0, got {}",
            exc.pre_filter_variance
        )));
    }
    let (b_coef, a_coef) = butterworth_lowpass(exc.cutoff)?;
    let total = BURN_IN + n_data;
    let m = plant.m();
    let p = plant.p();

    let mut rng_u = ChaCha8Rng::seed_from_u64(mix_seed(seed, EXCITATION_STREAM));
    let amp = exc.pre_filter_variance.sqrt();
    let mut u_cols: Vec<Vec<f64>> = Vec::with_capacity(m);
    for _ in 0..m {
        let white: Vec<f64> =
            (0..total).map(|_| amp * rng_u.sample::<f64, _>(StandardNormal)).collect();
        u_cols.push(filter_biquad(&white, &b_coef, &a_coef));
    }

    let mut rng_e = ChaCha8Rng::seed_from_u64(mix_seed(seed, INNOVATION_STREAM));
    let noise = plant.sigma2.sqrt();
    let mut x = DVector::zeros(plant.n());
    let mut u_log = DMatrix::zeros(n_data, m);
    let mut y_log = DMatrix::zeros(n_data, p);
    #[allow(clippy::needless_range_loop)]
    for t in 0..total {
        let u = DVector::from_fn(m, |i, _| u_cols[i][t]);
        let e = DVector::from_fn(p, |_, _| noise * rng_e.sample::<f64, _>(StandardNormal));
        let y = &plant.c * &x + &plant.d * &u + &e;
        x = &plant.a * &x + &plant.b * &u + &plant.k * &e;
        if t >= BURN_IN {
            u_log.row_mut(t - BURN_IN).copy_from(&u.transpose());
            y_log.row_mut(t - BURN_IN).copy_from(&y.transpose());
        }
    }
    Dataset::new(u_log, y_log)
}

/// Sample signal-to-noise ratio in dB, measured against a noise-free twin
/// simulation sharing the same excitation.
pub fn measure_snr(
    plant: &PlantModel,
    exc: &ExcitationSpec,
    n_data: usize,
    seed: u64,
) -> Result<f64> {
    let noisy = simulate_open_loop(plant, exc, n_data, seed)?;
    let clean = simulate_open_loop(&plant.noise_free(), exc, n_data, seed)?;
    let mut signal = 0.0;
    let mut noise = 0.0;
    for t in 0..n_data {
        let yc = clean.y_at(t);
        let yn = noisy.y_at(t);
        signal += yc.norm_squared();
        noise += (yn - yc).norm_squared();
    }
    if noise == 0.0 {
        return Err(Error::Degenerate("noise contribution is exactly zero".into()));
    }
    Ok(10.0 * (signal / noise).log10())
}

/// Reference trajectory family for the closed-loop studies.
#[derive(Debug, Clone, PartialEq)]
pub enum ReferenceKind {
    /// `±1` square wave of period `T_v − 460`, value `+1` at `t = 0`.
    SquareWave,
    /// Piecewise-constant profile over levels `{0, 1, −0.5, 0.8, −1}`,
    /// switching every 100 steps.
    Multilevel,
    /// A held constant value.
    Constant(f64),
}

/// A reference output trajectory specification.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceSpec {
    pub kind: ReferenceKind,
    /// Closed-loop run length.
    pub t_v: usize,
}

const MULTILEVEL_LEVELS: [f64; 5] = [0.0, 1.0, -0.5, 0.8, -1.0];
const MULTILEVEL_DWELL: usize = 100;

/// Builds the reference as a `(T_v + lookahead) × p` matrix; rows beyond
/// `T_v − 1` hold the final value so horizon windows stay defined.
pub fn make_reference(spec: &ReferenceSpec, lookahead: usize, p: usize) -> Result<DMatrix<f64>> {
    if spec.t_v < 1 {
        return Err(Error::InvalidConfig("T_v must be ≥ 1".into()));
    }
    let value_at = |t: usize| -> Result<f64> {
        match spec.kind {
            ReferenceKind::SquareWave => {
                if spec.t_v <= 460 {
                    return Err(Error::InvalidConfig(format!(
                        "square wave of period T_v − 460 needs T_v > 460, got {}",
                        spec.t_v
                    )));
                }
                let period = spec.t_v - 460;
                Ok(if (t % period) * 2 < period { 1.0 } else { -1.0 })
            }
            ReferenceKind::Multilevel => {
                Ok(MULTILEVEL_LEVELS[(t / MULTILEVEL_DWELL) % MULTILEVEL_LEVELS.len()])
            }
            ReferenceKind::Constant(v) => Ok(v),
        }
    };
    let mut traj = DMatrix::zeros(spec.t_v + lookahead, p);
    for t in 0..spec.t_v + lookahead {
        let v = value_at(t.min(spec.t_v - 1))?;
        for j in 0..p {
            traj[(t, j)] = v;
        }
    }
    Ok(traj)
}

/// Logs and summary index of one closed-loop run.
#[derive(Debug, Clone)]
pub struct ClosedLoopResult {
    /// `T_v × p`; after a blowup the remaining rows repeat the last sample.
    pub y_log: DMatrix<f64>,
    /// `T_v × m`.
    pub u_log: DMatrix<f64>,
    /// `(1/T_v) Σ_t ‖y(t) − y_r(t)‖² + r‖u(t)‖²`; `+∞` for unstable runs.
    pub j_a: f64,
    /// Whether `‖y(t)‖_∞` exceeded [`BLOWUP_LIMIT`].
    pub unstable: bool,
}

/// Tracking index `J_a` over paired logs.
pub fn performance_index(
    y_log: &DMatrix<f64>,
    u_log: &DMatrix<f64>,
    r_weight: f64,
    y_ref: &DMatrix<f64>,
) -> Result<f64> {
    let t_v = y_log.nrows();
    if u_log.nrows() != t_v || y_ref.nrows() < t_v || y_ref.ncols() != y_log.ncols() {
        return Err(Error::LengthMismatch(format!(
            "logs of {t_v}/{} rows with reference of {} rows",
            u_log.nrows(),
            y_ref.nrows()
        )));
    }
    if t_v == 0 {
        return Err(Error::LengthMismatch("empty logs".into()));
    }
    let mut total = 0.0;
    for t in 0..t_v {
        let e = y_log.row(t) - y_ref.row(t);
        total += e.norm_squared() + r_weight * u_log.row(t).norm_squared();
    }
    Ok(total / t_v as f64)
}

/// Runs the receding-horizon loop for `reference.t_v` steps.
///
/// The plant state starts from the innovation filter run over the whole
/// warmup log (so plant and controller agree on the recent past), the last
/// `rho` warmup samples seed `z_ini`, and the innovation sequence is drawn
/// from a stream independent of everything else derived from `seed` — two
/// runs with the same seed see identical disturbances regardless of the
/// controller.
pub fn run_closed_loop(
    plant: &PlantModel,
    controller: &mut dyn ControlLaw,
    reference: &ReferenceSpec,
    rho: usize,
    warmup: &Dataset,
    r_weight: f64,
    seed: u64,
) -> Result<ClosedLoopResult> {
    let (m, p) = (plant.m(), plant.p());
    if warmup.m() != m || warmup.p() != p {
        return Err(Error::Dimension("warmup channel counts do not match the plant".into()));
    }
    if rho < 1 || warmup.n_data() < rho {
        return Err(Error::InsufficientSamples(format!(
            "warmup must supply at least ρ = {rho} samples, got {}",
            warmup.n_data()
        )));
    }
    if controller.horizon() < 1 {
        return Err(Error::InvalidConfig("controller horizon must be ≥ 1".into()));
    }
    let t_hor = controller.horizon();
    let t_v = reference.t_v;
    let y_ref = make_reference(reference, t_hor, p)?;

    controller
        .warm_start(warmup)
        .map_err(|e| e.with_context(format!("warm start of {}", controller.name())))?;
    let mut x = plant.filter_state(warmup);

    // Ring of the last ρ joint samples, oldest first.
    let mut past: Vec<DVector<f64>> = (warmup.n_data() - rho..warmup.n_data())
        .map(|t| {
            let mut z = DVector::zeros(p + m);
            z.rows_mut(0, p).copy_from(&warmup.y_at(t));
            z.rows_mut(p, m).copy_from(&warmup.u_at(t));
            z
        })
        .collect();

    let mut rng_e = ChaCha8Rng::seed_from_u64(mix_seed(seed, INNOVATION_STREAM));
    let noise = plant.sigma2().sqrt();
    let mut y_log = DMatrix::zeros(t_v, p);
    let mut u_log = DMatrix::zeros(t_v, m);
    let mut unstable = false;

    for t in 0..t_v {
        let mut z_ini = DVector::zeros((m + p) * rho);
        for (s, z) in past.iter().enumerate() {
            z_ini.rows_mut(s * (m + p), m + p).copy_from(z);
        }
        let mut y_r_window = DVector::zeros(p * t_hor);
        for h in 0..t_hor {
            y_r_window.rows_mut(h * p, p).copy_from(&y_ref.row(t + h).transpose());
        }
        let u = controller
            .plan(&z_ini, &y_r_window)
            .map_err(|e| e.with_context(format!("{} at step {t}", controller.name())))?;
        if u.len() != m {
            return Err(Error::Dimension(format!(
                "{} returned an input of length {}, expected {m}",
                controller.name(),
                u.len()
            )));
        }

        let e = DVector::from_fn(p, |_, _| noise * rng_e.sample::<f64, _>(StandardNormal));
        let y = &plant.c * &x + &plant.d * &u + &e;
        x = &plant.a * &x + &plant.b * &u + &plant.k * &e;

        y_log.row_mut(t).copy_from(&y.transpose());
        u_log.row_mut(t).copy_from(&u.transpose());
        controller.observe(&y, &u);
        let mut z = DVector::zeros(m + p);
        z.rows_mut(0, p).copy_from(&y);
        z.rows_mut(p, m).copy_from(&u);
        past.remove(0);
        past.push(z);

        if y.amax() > BLOWUP_LIMIT {
            unstable = true;
            // Freeze the logs at the blowup sample.
            for rest in t + 1..t_v {
                y_log.row_mut(rest).copy_from(&y.transpose());
                u_log.row_mut(rest).copy_from(&u.transpose());
            }
            break;
        }
    }

    let j_a =
        if unstable { f64::INFINITY } else { performance_index(&y_log, &u_log, r_weight, &y_ref)? };
    Ok(ClosedLoopResult { y_log, u_log, j_a, unstable })
}
