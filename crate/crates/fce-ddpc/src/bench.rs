//! Monte-Carlo benchmark harness: per-run pipeline (data → order selection →
//! fits → closed loop), oracle grid-search tuning for the competitor schemes,
//! and aggregation into a reproducible report.
//!
//! Fairness rules: within a run every scheme trains on the identical dataset
//! and is tested against the identical disturbance stream; tuning experiments
//! use a stream separate from the test stream so oracle tuning never sees the
//! test noise. Runs parallelize across (never within) runs, so the report is
//! a pure function of the configuration.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::arx::{fit_arx, select_order_aic, ArxModel};
use crate::control::{ControlLaw, DeepcLaw, FceLaw, GammaLaw, GammaTuning, OracleMpcLaw};
use crate::error::{Error, Result};
use crate::fce::ControlSpec;
use crate::hankel::{partition, Dataset};
use crate::sim::{
    mix_seed, run_closed_loop, simulate_open_loop, ExcitationSpec, PlantModel, ReferenceKind,
    ReferenceSpec,
};
use crate::subspace::{lq_decompose, online_beta, DeePcConfig, GammaConfig, LqFactors};

/// Seed-stream tag for oracle tuning experiments.
const TUNING_STREAM: u64 = 11;
/// Seed-stream tag for the paired test episode.
const TEST_STREAM: u64 = 12;

/// Controller families in the comparative study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SchemeKind {
    Fce,
    Deepc,
    Gamma2,
    Gamma3,
    Gamma23,
    Thm3,
    MpcOracle,
}

/// Whether parameters come from an oracle grid search or a closed form.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TuningMode {
    OfflineOracle,
    Online,
}

/// A scheme entry of the benchmark.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchemeSpec {
    pub kind: SchemeKind,
    pub tuning: TuningMode,
}

impl SchemeSpec {
    pub fn new(kind: SchemeKind, tuning: TuningMode) -> Self {
        SchemeSpec { kind, tuning }
    }

    /// Stable label used in reports and file names.
    pub fn label(&self) -> &'static str {
        match (self.kind, self.tuning) {
            (SchemeKind::Fce, _) => "fce",
            (SchemeKind::MpcOracle, _) => "mpc-oracle",
            (SchemeKind::Thm3, _) => "thm3",
            (SchemeKind::Deepc, _) => "deepc",
            (SchemeKind::Gamma2, TuningMode::OfflineOracle) => "gamma2",
            (SchemeKind::Gamma2, TuningMode::Online) => "gamma2-online",
            (SchemeKind::Gamma3, TuningMode::OfflineOracle) => "gamma3",
            (SchemeKind::Gamma3, TuningMode::Online) => "gamma3-online",
            (SchemeKind::Gamma23, _) => "gamma23",
        }
    }

    fn validate(&self) -> Result<()> {
        match (self.kind, self.tuning) {
            (
                SchemeKind::Fce | SchemeKind::MpcOracle | SchemeKind::Thm3,
                TuningMode::OfflineOracle,
            ) => Err(Error::InvalidConfig(format!(
                "{} has no tunable parameters; use online mode",
                self.label()
            ))),
            (SchemeKind::Gamma23 | SchemeKind::Deepc, TuningMode::Online) => {
                Err(Error::InvalidConfig(format!(
                    "{} has no online tuning rule; use offline-oracle mode",
                    self.label()
                )))
            }
            _ => Ok(()),
        }
    }

    fn is_grid_tuned(&self) -> bool {
        self.tuning == TuningMode::OfflineOracle
            && matches!(
                self.kind,
                SchemeKind::Gamma2 | SchemeKind::Gamma3 | SchemeKind::Gamma23 | SchemeKind::Deepc
            )
    }
}

/// Resolved parameters of one scheme in one run. `None` encodes `+∞` so the
/// record survives a JSON round trip.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum SchemeParams {
    Untuned,
    Gamma { beta2: Option<f64>, beta3: Option<f64> },
    Deepc { lambda1: Option<f64>, lambda2: f64 },
}

fn enc(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

fn dec(v: Option<f64>) -> f64 {
    v.unwrap_or(f64::INFINITY)
}

impl SchemeParams {
    pub fn gamma(beta2: f64, beta3: f64) -> Self {
        SchemeParams::Gamma { beta2: enc(beta2), beta3: enc(beta3) }
    }

    pub fn deepc(lambda1: f64, lambda2: f64) -> Self {
        SchemeParams::Deepc { lambda1: enc(lambda1), lambda2 }
    }
}

/// Parameter grids for the offline-tuned schemes.
#[derive(Debug, Clone)]
pub struct Grids {
    /// β2 values (β3 pinned to +∞).
    pub gamma2: Vec<f64>,
    /// β3 values (β2 pinned to 0).
    pub gamma3: Vec<f64>,
    /// (β2, β3) pairs.
    pub gamma23: Vec<(f64, f64)>,
    /// (λ1, λ2) pairs.
    pub deepc: Vec<(f64, f64)>,
}

/// `n` logarithmically spaced points from `lo` to `hi` inclusive.
pub fn log_space(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    assert!(lo > 0.0 && hi > lo && n >= 1);
    if n == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..n).map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp()).collect()
}

fn cross(xs: &[f64], ys: &[f64]) -> Vec<(f64, f64)> {
    xs.iter().flat_map(|&x| ys.iter().map(move |&y| (x, y))).collect()
}

impl Grids {
    /// Reduced grids (≤ 25 points per scheme) for desk-scale studies.
    pub fn desk() -> Self {
        let mut gamma2 = vec![0.0];
        gamma2.extend(log_space(1e-3, 1e1, 23));
        gamma2.push(f64::INFINITY);
        let mut gamma3 = vec![0.0];
        gamma3.extend(log_space(1e-7, 1e-3, 23));
        gamma3.push(f64::INFINITY);
        let gamma23 = cross(&log_space(1e-3, 1e1, 5), &log_space(1e-7, 1e-3, 5));
        let lambda1 = vec![0.0, 1e-6, 10f64.powf(-3.5), 1e-1, f64::INFINITY];
        let lambda2 = vec![0.0, 1e-7, 10f64.powf(-5.5), 1e-4, 10f64.powf(-2.5)];
        let deepc = cross(&lambda1, &lambda2);
        Grids { gamma2, gamma3, gamma23, deepc }
    }

    /// Full-scale grids matching the published study's densities.
    pub fn full() -> Self {
        let mut gamma2 = vec![0.0];
        gamma2.extend(log_space(1e-3, 1e1, 200));
        gamma2.push(f64::INFINITY);
        let mut gamma3 = vec![0.0];
        gamma3.extend(log_space(1e-7, 1e-3, 200));
        gamma3.push(f64::INFINITY);
        let gamma23 = cross(&log_space(1e-3, 1e1, 14), &log_space(1e-7, 1e-3, 14));
        let mut lambda1 = vec![0.0];
        lambda1.extend(log_space(1e-6, 1e-1, 9));
        lambda1.push(f64::INFINITY);
        let mut lambda2 = vec![0.0];
        lambda2.extend(log_space(1e-7, 10f64.powf(-2.5), 10));
        let deepc = cross(&lambda1, &lambda2);
        Grids { gamma2, gamma3, gamma23, deepc }
    }

    fn points_for(&self, kind: SchemeKind) -> Result<Vec<SchemeParams>> {
        let points: Vec<SchemeParams> = match kind {
            SchemeKind::Gamma2 => {
                self.gamma2.iter().map(|&b2| SchemeParams::gamma(b2, f64::INFINITY)).collect()
            }
            SchemeKind::Gamma3 => {
                self.gamma3.iter().map(|&b3| SchemeParams::gamma(0.0, b3)).collect()
            }
            SchemeKind::Gamma23 => {
                self.gamma23.iter().map(|&(b2, b3)| SchemeParams::gamma(b2, b3)).collect()
            }
            SchemeKind::Deepc => {
                self.deepc.iter().map(|&(l1, l2)| SchemeParams::deepc(l1, l2)).collect()
            }
            _ => {
                return Err(Error::InvalidConfig(format!("{kind:?} has no tuning grid")));
            }
        };
        if points.is_empty() {
            return Err(Error::InvalidConfig(format!("empty grid for {kind:?}")));
        }
        Ok(points)
    }
}

/// Full description of one comparative study.
#[derive(Debug, Clone)]
pub struct BenchmarkConfig {
    pub plant: PlantModel,
    pub n_data: usize,
    /// Prediction horizon `T`.
    pub t: usize,
    /// Test episode length `T_v`.
    pub t_v: usize,
    pub n_runs: usize,
    /// Scalar output tracking weight (`Q_o = q_o·I`).
    pub q_o: f64,
    /// Scalar input effort weight (`R = r·I`), also the weight inside `J_a`.
    pub r: f64,
    /// 1: tune and test on the square wave; 2: tune and test on the
    /// multilevel profile; 3: tune on the square wave, test on the
    /// multilevel profile.
    pub setup: u8,
    pub schemes: Vec<SchemeSpec>,
    pub grids: Grids,
    pub base_seed: u64,
    /// Upper bound of the AIC order search.
    pub rho_max: usize,
    /// Worker threads across runs; 0 uses all cores, 1 disables parallelism.
    pub jobs: usize,
}

impl BenchmarkConfig {
    /// Desk-scale defaults on the benchmark plant: every scheme of the study,
    /// 20 runs, reduced grids.
    pub fn desk(setup: u8) -> Self {
        BenchmarkConfig {
            plant: PlantModel::benchmark(),
            n_data: 250,
            t: 20,
            t_v: 500,
            n_runs: 20,
            q_o: 1.0,
            r: 5e-6,
            setup,
            schemes: vec![
                SchemeSpec::new(SchemeKind::Fce, TuningMode::Online),
                SchemeSpec::new(SchemeKind::Deepc, TuningMode::OfflineOracle),
                SchemeSpec::new(SchemeKind::Gamma2, TuningMode::OfflineOracle),
                SchemeSpec::new(SchemeKind::Gamma3, TuningMode::Online),
                SchemeSpec::new(SchemeKind::Gamma23, TuningMode::OfflineOracle),
                SchemeSpec::new(SchemeKind::Thm3, TuningMode::Online),
                SchemeSpec::new(SchemeKind::MpcOracle, TuningMode::Online),
            ],
            grids: Grids::desk(),
            base_seed: 1000,
            rho_max: 6,
            jobs: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_runs < 1 {
            return Err(Error::InvalidConfig("n_runs must be ≥ 1".into()));
        }
        if !(1..=3).contains(&self.setup) {
            return Err(Error::InvalidConfig(format!(
                "setup must be 1, 2, or 3, got {}",
                self.setup
            )));
        }
        if self.setup != 2 && self.t_v <= 460 {
            return Err(Error::InvalidConfig(format!(
                "square-wave setups need T_v > 460, got {}",
                self.t_v
            )));
        }
        if self.t < 1 || self.t_v < 1 || self.rho_max < 1 {
            return Err(Error::InvalidConfig("horizons and ρ_max must be ≥ 1".into()));
        }
        let weights_positive = self.q_o > 0.0 && self.r > 0.0;
        if !weights_positive {
            return Err(Error::InvalidConfig("q_o and r must be > 0".into()));
        }
        if self.n_data <= self.rho_max + 1 {
            return Err(Error::InvalidConfig("N_data too small for the order search".into()));
        }
        if self.schemes.is_empty() {
            return Err(Error::InvalidConfig("at least one scheme is required".into()));
        }
        let mut labels: Vec<&str> = Vec::new();
        for s in &self.schemes {
            s.validate()?;
            if labels.contains(&s.label()) {
                return Err(Error::InvalidConfig(format!("duplicate scheme entry {}", s.label())));
            }
            labels.push(s.label());
            if s.is_grid_tuned() {
                self.grids.points_for(s.kind)?;
            }
        }
        Ok(())
    }
}

/// Tuning and test references of a setup.
pub fn references_for_setup(setup: u8, t_v: usize) -> Result<(ReferenceSpec, ReferenceSpec)> {
    let square = ReferenceSpec { kind: ReferenceKind::SquareWave, t_v };
    let multi = ReferenceSpec { kind: ReferenceKind::Multilevel, t_v };
    match setup {
        1 => Ok((square.clone(), square)),
        2 => Ok((multi.clone(), multi)),
        3 => Ok((square, multi)),
        other => Err(Error::InvalidConfig(format!("setup must be 1, 2, or 3, got {other}"))),
    }
}

/// Everything a scheme needs to run one closed-loop episode on a run's data.
#[derive(Debug)]
pub struct RunContext<'a> {
    pub plant: &'a PlantModel,
    pub dataset: &'a Dataset,
    pub model: &'a ArxModel,
    pub factors: &'a LqFactors,
    pub rho: usize,
    pub t: usize,
    pub q_o: f64,
    pub r: f64,
}

fn make_law(
    spec: &SchemeSpec,
    params: SchemeParams,
    ctx: &RunContext,
) -> Result<Box<dyn ControlLaw>> {
    let control = ControlSpec::tracking(ctx.t, ctx.plant.m(), ctx.plant.p(), ctx.q_o, ctx.r);
    let law: Box<dyn ControlLaw> = match spec.kind {
        SchemeKind::Fce => Box::new(FceLaw::new(ctx.model, control)?),
        SchemeKind::MpcOracle => Box::new(OracleMpcLaw::new(ctx.plant.clone(), control)?),
        SchemeKind::Thm3 => Box::new(
            GammaLaw::new(ctx.factors.clone(), control, GammaTuning::Thm3)?.with_label("thm3"),
        ),
        SchemeKind::Gamma2 => match spec.tuning {
            TuningMode::Online => Box::new(
                GammaLaw::new(ctx.factors.clone(), control, GammaTuning::Thm3)?
                    .with_label("gamma2-online"),
            ),
            TuningMode::OfflineOracle => {
                let SchemeParams::Gamma { beta2, beta3 } = params else {
                    return Err(Error::InvalidConfig("gamma2 expects gamma parameters".into()));
                };
                let cfg = GammaConfig { beta2: dec(beta2), beta3: dec(beta3) };
                Box::new(
                    GammaLaw::new(ctx.factors.clone(), control, GammaTuning::Fixed(cfg))?
                        .with_label("gamma2"),
                )
            }
        },
        SchemeKind::Gamma3 => match spec.tuning {
            TuningMode::Online => {
                Box::new(GammaLaw::new(ctx.factors.clone(), control, GammaTuning::OnlineGamma3)?)
            }
            TuningMode::OfflineOracle => {
                let SchemeParams::Gamma { beta2, beta3 } = params else {
                    return Err(Error::InvalidConfig("gamma3 expects gamma parameters".into()));
                };
                let cfg = GammaConfig { beta2: dec(beta2), beta3: dec(beta3) };
                Box::new(
                    GammaLaw::new(ctx.factors.clone(), control, GammaTuning::Fixed(cfg))?
                        .with_label("gamma3"),
                )
            }
        },
        SchemeKind::Gamma23 => {
            let SchemeParams::Gamma { beta2, beta3 } = params else {
                return Err(Error::InvalidConfig("gamma23 expects gamma parameters".into()));
            };
            let cfg = GammaConfig { beta2: dec(beta2), beta3: dec(beta3) };
            Box::new(
                GammaLaw::new(ctx.factors.clone(), control, GammaTuning::Fixed(cfg))?
                    .with_label("gamma23"),
            )
        }
        SchemeKind::Deepc => {
            let SchemeParams::Deepc { lambda1, lambda2 } = params else {
                return Err(Error::InvalidConfig("deepc expects lambda parameters".into()));
            };
            let cfg = DeePcConfig { lambda1: dec(lambda1), lambda2 };
            Box::new(DeepcLaw::new(ctx.factors.clone(), control, cfg)?)
        }
    };
    Ok(law)
}

/// Closed-loop cost of one scheme/parameter choice; failures and blowups both
/// map to the `+∞` sentinel.
pub(crate) fn evaluate_params(
    spec: &SchemeSpec,
    params: SchemeParams,
    ctx: &RunContext,
    reference: &ReferenceSpec,
    seed: u64,
) -> f64 {
    match make_law(spec, params, ctx) {
        Ok(mut law) => {
            run_closed_loop(ctx.plant, law.as_mut(), reference, ctx.rho, ctx.dataset, ctx.r, seed)
                .map(|r| r.j_a)
                .unwrap_or(f64::INFINITY)
        }
        Err(_) => f64::INFINITY,
    }
}

fn regularization_key(params: &SchemeParams) -> (f64, f64) {
    match *params {
        SchemeParams::Untuned => (0.0, 0.0),
        SchemeParams::Gamma { beta2, beta3 } => (dec(beta2) + dec(beta3), dec(beta2)),
        SchemeParams::Deepc { lambda1, lambda2 } => (dec(lambda1) + lambda2, dec(lambda1)),
    }
}

/// Oracle tuning: runs one closed-loop experiment per grid point on the true
/// plant and returns the cost-minimizing parameters. Ties break toward larger
/// regularization (the candidates are visited in descending order and only a
/// strictly smaller cost replaces the incumbent).
pub fn grid_search(
    spec: &SchemeSpec,
    grids: &Grids,
    ctx: &RunContext,
    tuning_reference: &ReferenceSpec,
    seed: u64,
) -> Result<SchemeParams> {
    let mut points = grids.points_for(spec.kind)?;
    points.sort_by(|a, b| {
        regularization_key(b).partial_cmp(&regularization_key(a)).expect("grid keys are never NaN")
    });
    let mut best: Option<(SchemeParams, f64)> = None;
    for params in points {
        let j = evaluate_params(spec, params, ctx, tuning_reference, seed);
        if j.is_finite() && best.map_or(true, |(_, incumbent)| j < incumbent) {
            best = Some((params, j));
        }
    }
    best.map(|(p, _)| p).ok_or_else(|| {
        Error::AllPointsUnstable("every grid point hit the instability sentinel".into())
    })
}

/// Five-number summary plus instability share of one scheme's samples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SummaryStats {
    /// `None` encodes `+∞` (more than half the samples unstable).
    pub median: Option<f64>,
    pub q1: Option<f64>,
    pub q3: Option<f64>,
    pub whisker_low: Option<f64>,
    pub whisker_high: Option<f64>,
    pub instability_fraction: f64,
}

impl SummaryStats {
    pub fn median_value(&self) -> f64 {
        dec(self.median)
    }
}

fn median_of(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Median, Tukey hinges, 1.5·IQR whiskers, and the share of `+∞` sentinels.
pub fn summarize(samples: &[f64]) -> Result<SummaryStats> {
    if samples.is_empty() {
        return Err(Error::InvalidConfig("cannot summarize zero samples".into()));
    }
    let mut s = samples.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).expect("samples are never NaN"));
    let n = s.len();
    let median = median_of(&s);
    let half = n.div_ceil(2);
    let q1 = median_of(&s[..half]);
    let q3 = median_of(&s[n - half..]);
    let iqr = q3 - q1;
    let hi_fence = if (q3 + 1.5 * iqr).is_nan() { f64::INFINITY } else { q3 + 1.5 * iqr };
    let lo_fence = if (q1 - 1.5 * iqr).is_nan() { f64::NEG_INFINITY } else { q1 - 1.5 * iqr };
    let whisker_high = s.iter().copied().filter(|v| *v <= hi_fence).fold(s[0], f64::max);
    let whisker_low = s.iter().copied().filter(|v| *v >= lo_fence).fold(s[n - 1], f64::min);
    let unstable = s.iter().filter(|v| !v.is_finite()).count();
    Ok(SummaryStats {
        median: enc(median),
        q1: enc(q1),
        q3: enc(q3),
        whisker_low: enc(whisker_low),
        whisker_high: enc(whisker_high),
        instability_fraction: unstable as f64 / n as f64,
    })
}

/// Aggregated results of one scheme across all runs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SchemeReport {
    pub name: String,
    /// One entry per run; `None` encodes the `+∞` instability sentinel.
    pub samples: Vec<Option<f64>>,
    pub stats: SummaryStats,
    /// Parameters used in each run.
    pub params: Vec<SchemeParams>,
}

impl SchemeReport {
    /// Samples with the sentinel restored as `+∞`.
    pub fn sample_values(&self) -> Vec<f64> {
        self.samples.iter().map(|s| dec(*s)).collect()
    }
}

/// Mean per-run wall-clock seconds of one scheme, split like the published
/// execution-time table.
#[derive(Debug, Clone)]
pub struct SchemeTiming {
    pub scheme: String,
    pub training_s: f64,
    pub offline_search_s: f64,
    pub optimization_s: f64,
}

/// The full study outcome. Everything serialized is a pure function of the
/// configuration; wall-clock timing stays out of the JSON.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub setup: u8,
    pub n_runs: usize,
    pub n_data: usize,
    pub t: usize,
    pub t_v: usize,
    pub q_o: f64,
    pub r: f64,
    pub base_seed: u64,
    /// AIC-selected order per run (0 marks a failed identification).
    pub rho_selected: Vec<usize>,
    pub schemes: Vec<SchemeReport>,
    #[serde(skip)]
    pub timing: Vec<SchemeTiming>,
}

impl BenchmarkReport {
    pub fn scheme(&self, name: &str) -> Option<&SchemeReport> {
        self.schemes.iter().find(|s| s.name == name)
    }
}

struct SchemeOutcome {
    j_a: f64,
    params: SchemeParams,
    training_s: f64,
    search_s: f64,
    optimization_s: f64,
}

struct RunRecord {
    rho: usize,
    outcomes: Vec<SchemeOutcome>,
}

struct PreparedRun {
    dataset: Dataset,
    rho: usize,
    model: ArxModel,
    factors: LqFactors,
    arx_s: f64,
    lq_s: f64,
}

fn prepare_run(cfg: &BenchmarkConfig, data_seed: u64) -> Result<PreparedRun> {
    let dataset =
        simulate_open_loop(&cfg.plant, &ExcitationSpec::default(), cfg.n_data, data_seed)?;
    let t0 = Instant::now();
    let rho = select_order_aic(&dataset, cfg.rho_max)?;
    let parts = partition(&dataset, rho, cfg.t)?;
    let model = fit_arx(&parts)?;
    let arx_s = t0.elapsed().as_secs_f64();
    let t1 = Instant::now();
    let factors = lq_decompose(&parts.z_p, &parts.u_f, &parts.y_f)?;
    let lq_s = t1.elapsed().as_secs_f64();
    Ok(PreparedRun { dataset, rho, model, factors, arx_s, lq_s })
}

fn run_single(cfg: &BenchmarkConfig, run: usize) -> RunRecord {
    let data_seed = cfg.base_seed + run as u64;
    let prep = match prepare_run(cfg, data_seed) {
        Ok(p) => p,
        Err(_) => {
            // Identification failed: the whole run carries the sentinel.
            let outcomes = cfg
                .schemes
                .iter()
                .map(|_| SchemeOutcome {
                    j_a: f64::INFINITY,
                    params: SchemeParams::Untuned,
                    training_s: 0.0,
                    search_s: 0.0,
                    optimization_s: 0.0,
                })
                .collect();
            return RunRecord { rho: 0, outcomes };
        }
    };
    let ctx = RunContext {
        plant: &cfg.plant,
        dataset: &prep.dataset,
        model: &prep.model,
        factors: &prep.factors,
        rho: prep.rho,
        t: cfg.t,
        q_o: cfg.q_o,
        r: cfg.r,
    };
    let (tune_ref, test_ref) =
        references_for_setup(cfg.setup, cfg.t_v).expect("config validated before dispatch");
    let tune_seed = mix_seed(data_seed, TUNING_STREAM);
    let test_seed = mix_seed(data_seed, TEST_STREAM);

    let outcomes = cfg
        .schemes
        .iter()
        .map(|scheme| {
            let training_s = match scheme.kind {
                SchemeKind::Fce => prep.arx_s,
                SchemeKind::MpcOracle => 0.0,
                _ => prep.arx_s + prep.lq_s,
            };
            let (params, search_s) = if scheme.is_grid_tuned() {
                let t0 = Instant::now();
                let found = grid_search(scheme, &cfg.grids, &ctx, &tune_ref, tune_seed);
                let elapsed = t0.elapsed().as_secs_f64();
                match found {
                    Ok(p) => (Some(p), elapsed),
                    Err(_) => (None, elapsed),
                }
            } else {
                (Some(online_params(scheme, &ctx)), 0.0)
            };
            let (j_a, params, optimization_s) = match params {
                Some(p) => {
                    let t0 = Instant::now();
                    let j = evaluate_params(scheme, p, &ctx, &test_ref, test_seed);
                    (j, p, t0.elapsed().as_secs_f64())
                }
                None => (f64::INFINITY, SchemeParams::Untuned, 0.0),
            };
            SchemeOutcome { j_a, params, training_s, search_s, optimization_s }
        })
        .collect();
    RunRecord { rho: prep.rho, outcomes }
}

/// Parameters actually used by the closed-form schemes, recorded for the
/// report.
fn online_params(scheme: &SchemeSpec, ctx: &RunContext) -> SchemeParams {
    let q_o = ctx.q_o * nalgebra::DMatrix::identity(ctx.plant.p() * ctx.t, ctx.plant.p() * ctx.t);
    match scheme.kind {
        SchemeKind::Thm3 | SchemeKind::Gamma2 => {
            SchemeParams::gamma(online_beta(ctx.factors, &q_o), f64::INFINITY)
        }
        SchemeKind::Gamma3 => SchemeParams::gamma(0.0, online_beta(ctx.factors, &q_o)),
        _ => SchemeParams::Untuned,
    }
}

/// Executes the full Monte-Carlo study.
pub fn run_benchmark(cfg: &BenchmarkConfig) -> Result<BenchmarkReport> {
    cfg.validate()?;
    let records: Vec<RunRecord> = if cfg.jobs == 1 {
        (0..cfg.n_runs).map(|i| run_single(cfg, i)).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.jobs)
            .build()
            .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
        pool.install(|| (0..cfg.n_runs).into_par_iter().map(|i| run_single(cfg, i)).collect())
    };

    let rho_selected = records.iter().map(|r| r.rho).collect();
    let mut schemes = Vec::with_capacity(cfg.schemes.len());
    let mut timing = Vec::with_capacity(cfg.schemes.len());
    for (si, scheme) in cfg.schemes.iter().enumerate() {
        let samples: Vec<f64> = records.iter().map(|r| r.outcomes[si].j_a).collect();
        let stats = summarize(&samples)?;
        let params = records.iter().map(|r| r.outcomes[si].params).collect();
        schemes.push(SchemeReport {
            name: scheme.label().to_string(),
            samples: samples.iter().map(|&v| enc(v)).collect(),
            stats,
            params,
        });
        let n = cfg.n_runs as f64;
        timing.push(SchemeTiming {
            scheme: scheme.label().to_string(),
            training_s: records.iter().map(|r| r.outcomes[si].training_s).sum::<f64>() / n,
            offline_search_s: records.iter().map(|r| r.outcomes[si].search_s).sum::<f64>() / n,
            optimization_s: records.iter().map(|r| r.outcomes[si].optimization_s).sum::<f64>() / n,
        });
    }
    Ok(BenchmarkReport {
        setup: cfg.setup,
        n_runs: cfg.n_runs,
        n_data: cfg.n_data,
        t: cfg.t,
        t_v: cfg.t_v,
        q_o: cfg.q_o,
        r: cfg.r,
        base_seed: cfg.base_seed,
        rho_selected,
        schemes,
        timing,
    })
}

fn fmt_sample(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else {
        "inf".to_string()
    }
}

/// Persists the report as `report.json`, one `samples_<scheme>.csv` per
/// scheme, and `timing.csv`; returns the created paths.
pub fn write_report_files(report: &BenchmarkReport, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();

    let json_path = dir.join("report.json");
    let mut text = serde_json::to_string_pretty(report)?;
    text.push('\n');
    std::fs::write(&json_path, text)?;
    written.push(json_path);

    for scheme in &report.schemes {
        let path = dir.join(format!("samples_{}.csv", scheme.name));
        let mut body = String::from("run,j_a\n");
        for (run, sample) in scheme.sample_values().iter().enumerate() {
            body.push_str(&format!("{run},{}\n", fmt_sample(*sample)));
        }
        std::fs::write(&path, body)?;
        written.push(path);
    }

    let timing_path = dir.join("timing.csv");
    let mut body = String::from("scheme,training_s,offline_search_s,optimization_s\n");
    for row in &report.timing {
        body.push_str(&format!(
            "{},{:.6},{:.6},{:.6}\n",
            row.scheme, row.training_s, row.offline_search_s, row.optimization_s
        ));
    }
    std::fs::write(&timing_path, body)?;
    written.push(timing_path);
    Ok(written)
}

/// Median of a slice (helper for report post-processing).
pub fn median(values: &[f64]) -> f64 {
    let mut s = values.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).expect("values are never NaN"));
    median_of(&s)
}
