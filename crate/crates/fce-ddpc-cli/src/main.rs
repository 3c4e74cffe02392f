//! Command-line front end: dataset generation, predictor fitting, single
//! closed-loop episodes, and the full Monte-Carlo study, all driven by JSON
//! configuration files.
//!
//! Exit codes are a stable scripting contract: 0 on success (including runs
//! that merely flag instability), 1 on runtime failures, 2 on configuration
//! or schema errors.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use fce_ddpc::arx::{fit_arx, select_order_aic};
use fce_ddpc::bench::{
    run_benchmark, summarize, write_report_files, BenchmarkConfig, BenchmarkReport, Grids,
    SchemeKind, SchemeSpec, TuningMode,
};
use fce_ddpc::control::{ControlLaw, DeepcLaw, FceLaw, GammaLaw, GammaTuning, OracleMpcLaw};
use fce_ddpc::fce::{fce_components, solve_qp, ControlSpec};
use fce_ddpc::hankel::{load_dataset, partition, save_dataset, Dataset, PartitionedData};
use fce_ddpc::sim::{
    make_reference, measure_snr, run_closed_loop, simulate_open_loop, ClosedLoopResult,
    ExcitationSpec, PlantModel, ReferenceKind, ReferenceSpec,
};
use fce_ddpc::subspace::{lq_decompose, DeePcConfig, GammaConfig};

#[derive(Parser)]
#[command(name = "fce-ddpc", version, about = "Data-driven predictive control toolbox")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate an open-loop identification dataset CSV.
    Simulate(SimulateArgs),
    /// Fit the one-step predictor on a dataset and save it as JSON.
    Fit(FitArgs),
    /// Run one closed-loop episode; write logs CSV and a JSON summary.
    Control(ControlArgs),
    /// Execute the Monte-Carlo study; write report JSON and CSVs.
    Bench(BenchArgs),
    /// Print and verify the summary table of an existing report.
    Report(ReportArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output CSV path.
    #[arg(long)]
    out: PathBuf,
    /// Seed override.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct FitArgs {
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Training dataset CSV (from `simulate`).
    #[arg(long)]
    data: PathBuf,
    /// Output model JSON path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ControlArgs {
    /// JSON run configuration (must contain a `scheme` entry).
    #[arg(long)]
    config: PathBuf,
    /// Training/warmup dataset CSV (from `simulate`).
    #[arg(long)]
    data: PathBuf,
    /// Output directory; receives summary.json and logs.csv.
    #[arg(long)]
    out: PathBuf,
    /// Episode seed override.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct BenchArgs {
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output directory for the report files.
    #[arg(long)]
    out: PathBuf,
    /// Base seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Monte-Carlo run-count override.
    #[arg(long)]
    runs: Option<usize>,
    /// Use the full-scale parameter grids instead of the desk grids.
    #[arg(long)]
    full_grids: bool,
    /// Worker-thread override (0 = all cores, 1 = sequential).
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Args)]
struct ReportArgs {
    /// A report.json produced by `bench`.
    report: PathBuf,
}

/// Failures carry the exit code contract: configuration problems exit 2,
/// everything that failed while running exits 1.
enum Failure {
    Config(String),
    Runtime(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Runtime(_) => 1,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Config(m) | Failure::Runtime(m) => m,
        }
    }
}

type CliResult<T> = Result<T, Failure>;

fn config_err(context: &str) -> impl Fn(fce_ddpc::Error) -> Failure + '_ {
    move |e| Failure::Config(format!("{context}: {e}"))
}

fn runtime_err(context: &str) -> impl Fn(fce_ddpc::Error) -> Failure + '_ {
    move |e| Failure::Runtime(format!("{context}: {e}"))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Simulate(args) => cmd_simulate(&args),
        Command::Fit(args) => cmd_fit(&args),
        Command::Control(args) => cmd_control(&args),
        Command::Bench(args) => cmd_bench(&args),
        Command::Report(args) => cmd_report(&args),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            eprintln!("error: {}", failure.message());
            ExitCode::from(failure.code())
        }
    }
}

fn default_setup() -> u8 {
    1
}
fn default_n_data() -> usize {
    250
}
fn default_t() -> usize {
    20
}
fn default_t_v() -> usize {
    500
}
fn default_n_runs() -> usize {
    20
}
fn default_q_o() -> f64 {
    1.0
}
fn default_r() -> f64 {
    5e-6
}
fn default_base_seed() -> u64 {
    1000
}
fn default_rho_max() -> usize {
    6
}

/// JSON-backed run configuration; unknown keys are rejected. Every field has
/// a study default, so `{}` is a valid configuration.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunConfig {
    /// 1 = square/square, 2 = multilevel/multilevel, 3 = square/multilevel
    /// (tuning/test reference pairing of the study).
    #[serde(default = "default_setup")]
    setup: u8,
    #[serde(default = "default_n_data")]
    n_data: usize,
    /// Prediction horizon.
    #[serde(default = "default_t")]
    t: usize,
    /// Closed-loop episode length.
    #[serde(default = "default_t_v")]
    t_v: usize,
    #[serde(default = "default_n_runs")]
    n_runs: usize,
    #[serde(default = "default_q_o")]
    q_o: f64,
    #[serde(default = "default_r")]
    r: f64,
    #[serde(default = "default_base_seed")]
    base_seed: u64,
    /// Upper bound of the AIC order search.
    #[serde(default = "default_rho_max")]
    rho_max: usize,
    /// Worker threads across Monte-Carlo runs; 0 = all cores.
    #[serde(default)]
    jobs: usize,
    /// Plant innovation-variance override; 0 gives the noise-free plant.
    #[serde(default)]
    sigma2: Option<f64>,
    /// Fixed truncation order; omitted = AIC selection.
    #[serde(default)]
    rho: Option<usize>,
    /// Scheme of a single `control` episode.
    #[serde(default)]
    scheme: Option<SchemeConfig>,
    /// Scheme roster for `bench`; omitted = the full study roster.
    #[serde(default)]
    schemes: Option<Vec<SchemeConfig>>,
    /// Reference override for `control`; omitted = the setup's test profile.
    #[serde(default)]
    reference: Option<ReferenceConfig>,
    /// 0 = quiet, higher values add progress detail on stderr.
    #[serde(default)]
    verbosity: u8,
}

/// One scheme entry. The regularization fields follow the report convention
/// that JSON `null` encodes +infinity; a field that is absent stays unset.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct SchemeConfig {
    kind: SchemeKind,
    #[serde(default)]
    tuning: Option<TuningMode>,
    #[serde(default)]
    beta2: Option<Option<f64>>,
    #[serde(default)]
    beta3: Option<Option<f64>>,
    #[serde(default)]
    lambda1: Option<Option<f64>>,
    #[serde(default)]
    lambda2: Option<f64>,
}

impl SchemeConfig {
    fn has_fixed_params(&self) -> bool {
        self.beta2.is_some()
            || self.beta3.is_some()
            || self.lambda1.is_some()
            || self.lambda2.is_some()
    }

    /// The study's default tuning mode of this scheme kind.
    fn default_tuning(&self) -> TuningMode {
        match self.kind {
            SchemeKind::Deepc | SchemeKind::Gamma2 | SchemeKind::Gamma23 => {
                TuningMode::OfflineOracle
            }
            _ => TuningMode::Online,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case", tag = "kind")]
enum ReferenceConfig {
    SquareWave,
    Multilevel,
    Constant { value: f64 },
}

fn load_config(path: &Path) -> CliResult<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        Failure::Config(format!("config not found or unreadable at {}: {e}", path.display()))
    })?;
    let cfg: RunConfig = serde_json::from_str(&text).map_err(|e| {
        Failure::Config(format!("config schema violation in {}: {e}", path.display()))
    })?;
    if !(1..=3).contains(&cfg.setup) {
        return Err(Failure::Config(format!("setup must be 1, 2, or 3, got {}", cfg.setup)));
    }
    if let Some(s2) = cfg.sigma2 {
        if s2 < 0.0 || !s2.is_finite() {
            return Err(Failure::Config(format!("sigma2 must be finite and >= 0, got {s2}")));
        }
    }
    Ok(cfg)
}

fn plant_for(cfg: &RunConfig) -> CliResult<PlantModel> {
    let base = PlantModel::benchmark();
    match cfg.sigma2 {
        None => Ok(base),
        Some(s2) => PlantModel::new(
            base.a().clone(),
            base.b().clone(),
            base.c().clone(),
            base.d().clone(),
            base.k().clone(),
            s2,
        )
        .map_err(config_err("plant override")),
    }
}

/// Truncation order from the config override or the AIC search.
fn resolve_order(cfg: &RunConfig, data: &Dataset) -> CliResult<usize> {
    match cfg.rho {
        Some(rho) if rho >= 1 => Ok(rho),
        Some(rho) => Err(Failure::Config(format!("rho must be >= 1, got {rho}"))),
        None => select_order_aic(data, cfg.rho_max).map_err(runtime_err("order selection")),
    }
}

fn cmd_simulate(args: &SimulateArgs) -> CliResult<()> {
    let cfg = load_config(&args.config)?;
    let plant = plant_for(&cfg)?;
    let seed = args.seed.unwrap_or(cfg.base_seed);
    let exc = ExcitationSpec::default();
    let data =
        simulate_open_loop(&plant, &exc, cfg.n_data, seed).map_err(runtime_err("simulation"))?;
    save_dataset(&data, &args.out).map_err(runtime_err("writing the dataset"))?;
    if plant.sigma2() > 0.0 {
        let snr =
            measure_snr(&plant, &exc, cfg.n_data, seed).map_err(runtime_err("SNR measurement"))?;
        println!(
            "seed {seed}, SNR {snr:.2} dB, {} samples -> {}",
            data.n_data(),
            args.out.display()
        );
    } else {
        println!(
            "seed {seed}, noise-free plant, {} samples -> {}",
            data.n_data(),
            args.out.display()
        );
    }
    Ok(())
}

fn cmd_fit(args: &FitArgs) -> CliResult<()> {
    let cfg = load_config(&args.config)?;
    let data = load_dataset(&args.data)
        .map_err(|e| Failure::Config(format!("dataset {}: {e}", args.data.display())))?;
    let rho = resolve_order(&cfg, &data)?;
    let parts = partition(&data, rho, cfg.t).map_err(runtime_err("partitioning"))?;
    let model = fit_arx(&parts).map_err(runtime_err("predictor fit"))?;
    model.save_json(&args.out).map_err(runtime_err("writing the model"))?;
    println!("order {rho}, innovation variance {:.6e} -> {}", model.sigma2_hat, args.out.display());
    Ok(())
}

/// Per-step split of the control objective into its tracking and variance
/// terms (populated for the expectation-based scheme only).
#[derive(Debug, Serialize)]
struct StepSplit {
    t: usize,
    j: f64,
    r: f64,
}

#[derive(Debug, Serialize)]
struct ControlSummary {
    scheme: String,
    seed: u64,
    rho: usize,
    t_v: usize,
    /// `null` encodes +infinity (the episode was flagged unstable).
    j_a: Option<f64>,
    unstable: bool,
    steps: Vec<StepSplit>,
}

fn resolve_reference(cfg: &RunConfig) -> CliResult<ReferenceSpec> {
    let kind = match &cfg.reference {
        Some(ReferenceConfig::SquareWave) => ReferenceKind::SquareWave,
        Some(ReferenceConfig::Multilevel) => ReferenceKind::Multilevel,
        Some(ReferenceConfig::Constant { value }) => ReferenceKind::Constant(*value),
        None => match cfg.setup {
            2 | 3 => ReferenceKind::Multilevel,
            _ => ReferenceKind::SquareWave,
        },
    };
    Ok(ReferenceSpec { kind, t_v: cfg.t_v })
}

fn opt(v: &Option<Option<f64>>) -> Option<f64> {
    v.as_ref().map(|inner| inner.unwrap_or(f64::INFINITY))
}

/// Kebab-case wire name of a scheme kind, matching the report files.
fn kind_name(kind: SchemeKind) -> String {
    match serde_json::to_value(kind) {
        Ok(serde_json::Value::String(s)) => s,
        _ => format!("{kind:?}").to_lowercase(),
    }
}

/// Builds the non-expectation-based laws for a single episode.
fn build_plain_law(
    scheme: &SchemeConfig,
    plant: &PlantModel,
    parts: &PartitionedData,
    spec: &ControlSpec,
) -> CliResult<Box<dyn ControlLaw>> {
    let factors =
        || lq_decompose(&parts.z_p, &parts.u_f, &parts.y_f).map_err(runtime_err("LQ step"));
    let cfg_err = |m: String| Failure::Config(m);
    let law: Box<dyn ControlLaw> = match scheme.kind {
        SchemeKind::Fce => unreachable!("handled by the caller"),
        SchemeKind::MpcOracle => Box::new(
            OracleMpcLaw::new(plant.clone(), spec.clone()).map_err(config_err("mpc-oracle"))?,
        ),
        SchemeKind::Thm3 => Box::new(
            GammaLaw::new(factors()?, spec.clone(), GammaTuning::Thm3)
                .map_err(config_err("thm3"))?
                .with_label("thm3"),
        ),
        SchemeKind::Gamma2 => match opt(&scheme.beta2) {
            Some(beta2) => Box::new(
                GammaLaw::new(
                    factors()?,
                    spec.clone(),
                    GammaTuning::Fixed(GammaConfig { beta2, beta3: f64::INFINITY }),
                )
                .map_err(config_err("gamma2"))?
                .with_label("gamma2"),
            ),
            None => Box::new(
                GammaLaw::new(factors()?, spec.clone(), GammaTuning::Thm3)
                    .map_err(config_err("gamma2"))?
                    .with_label("gamma2-online"),
            ),
        },
        SchemeKind::Gamma3 => match opt(&scheme.beta3) {
            Some(beta3) => Box::new(
                GammaLaw::new(
                    factors()?,
                    spec.clone(),
                    GammaTuning::Fixed(GammaConfig {
                        beta2: opt(&scheme.beta2).unwrap_or(0.0),
                        beta3,
                    }),
                )
                .map_err(config_err("gamma3"))?
                .with_label("gamma3"),
            ),
            None => Box::new(
                GammaLaw::new(factors()?, spec.clone(), GammaTuning::OnlineGamma3)
                    .map_err(config_err("gamma3"))?,
            ),
        },
        SchemeKind::Gamma23 => {
            let (Some(beta2), Some(beta3)) = (opt(&scheme.beta2), opt(&scheme.beta3)) else {
                return Err(cfg_err("gamma23 needs explicit beta2 and beta3".into()));
            };
            Box::new(
                GammaLaw::new(
                    factors()?,
                    spec.clone(),
                    GammaTuning::Fixed(GammaConfig { beta2, beta3 }),
                )
                .map_err(config_err("gamma23"))?
                .with_label("gamma23"),
            )
        }
        SchemeKind::Deepc => {
            let Some(lambda2) = scheme.lambda2 else {
                return Err(cfg_err("deepc needs a finite lambda2".into()));
            };
            let lambda1 = opt(&scheme.lambda1).unwrap_or(f64::INFINITY);
            Box::new(
                DeepcLaw::new(factors()?, spec.clone(), DeePcConfig { lambda1, lambda2 })
                    .map_err(config_err("deepc"))?,
            )
        }
    };
    Ok(law)
}

/// Recomputes the receding-horizon objective split along the logged
/// trajectory. The planner is deterministic, so re-solving at the logged
/// initial conditions reproduces the episode's decisions exactly.
fn fce_step_split(
    law: &FceLaw,
    spec: &ControlSpec,
    reference: &ReferenceSpec,
    rho: usize,
    warmup: &Dataset,
    result: &ClosedLoopResult,
) -> CliResult<Vec<StepSplit>> {
    let (m, p) = (warmup.m(), warmup.p());
    let t_hor = spec.t;
    let y_ref = make_reference(reference, t_hor, p).map_err(runtime_err("reference"))?;
    let mut past: Vec<DVector<f64>> = (warmup.n_data() - rho..warmup.n_data())
        .map(|t| {
            let mut z = DVector::zeros(p + m);
            z.rows_mut(0, p).copy_from(&warmup.y_at(t));
            z.rows_mut(p, m).copy_from(&warmup.u_at(t));
            z
        })
        .collect();
    let mut steps = Vec::with_capacity(reference.t_v);
    for t in 0..reference.t_v {
        let mut z_ini = DVector::zeros((m + p) * rho);
        for (s, z) in past.iter().enumerate() {
            z_ini.rows_mut(s * (m + p), m + p).copy_from(z);
        }
        let mut window = DVector::zeros(p * t_hor);
        for h in 0..t_hor {
            window.rows_mut(h * p, p).copy_from(&y_ref.row(t + h).transpose());
        }
        let obj = law.objective(&z_ini, &window).map_err(runtime_err("objective assembly"))?;
        let u_star = solve_qp(&obj, None, None, None).map_err(runtime_err("per-step solve"))?;
        let parts = fce_components(&obj, &u_star);
        steps.push(StepSplit { t, j: parts.j, r: parts.r });

        let mut z = DVector::zeros(m + p);
        z.rows_mut(0, p).copy_from(&result.y_log.row(t).transpose());
        z.rows_mut(p, m).copy_from(&result.u_log.row(t).transpose());
        past.remove(0);
        past.push(z);
    }
    Ok(steps)
}

fn write_logs_csv(
    result: &ClosedLoopResult,
    reference: &ReferenceSpec,
    p: usize,
    path: &Path,
) -> CliResult<()> {
    let y_ref = make_reference(reference, 0, p).map_err(runtime_err("reference"))?;
    let (t_v, m) = (result.u_log.nrows(), result.u_log.ncols());
    let mut head = vec!["t".to_string()];
    head.extend((0..p).map(|j| format!("y{j}")));
    head.extend((0..m).map(|j| format!("u{j}")));
    head.extend((0..p).map(|j| format!("yref{j}")));
    let mut body = head.join(",");
    body.push('\n');
    for t in 0..t_v {
        let mut fields = vec![t.to_string()];
        fields.extend((0..p).map(|j| format!("{:.16e}", result.y_log[(t, j)])));
        fields.extend((0..m).map(|j| format!("{:.16e}", result.u_log[(t, j)])));
        fields.extend((0..p).map(|j| format!("{:.16e}", y_ref[(t, j)])));
        body.push_str(&fields.join(","));
        body.push('\n');
    }
    std::fs::write(path, body)
        .map_err(|e| Failure::Runtime(format!("writing {}: {e}", path.display())))
}

fn cmd_control(args: &ControlArgs) -> CliResult<()> {
    let cfg = load_config(&args.config)?;
    let scheme = cfg
        .scheme
        .clone()
        .ok_or_else(|| Failure::Config("control needs a `scheme` entry in the config".into()))?;
    let plant = plant_for(&cfg)?;
    let data = load_dataset(&args.data)
        .map_err(|e| Failure::Config(format!("dataset {}: {e}", args.data.display())))?;
    let seed = args.seed.unwrap_or(cfg.base_seed);
    let rho = resolve_order(&cfg, &data)?;
    let parts = partition(&data, rho, cfg.t).map_err(runtime_err("partitioning"))?;
    let spec = ControlSpec::tracking(cfg.t, plant.m(), plant.p(), cfg.q_o, cfg.r);
    let reference = resolve_reference(&cfg)?;
    if cfg.verbosity > 0 {
        eprintln!("running {:?} for {} steps (order {rho}, seed {seed})", scheme.kind, cfg.t_v);
    }

    let mut steps = Vec::new();
    let result = if scheme.kind == SchemeKind::Fce {
        let model = fit_arx(&parts).map_err(runtime_err("predictor fit"))?;
        let mut law = FceLaw::new(&model, spec.clone()).map_err(config_err("fce"))?;
        let result = run_closed_loop(&plant, &mut law, &reference, rho, &data, cfg.r, seed)
            .map_err(runtime_err("episode"))?;
        // The logs of an unstable episode are frozen after the blowup, so
        // the replay would no longer mirror the online decisions.
        if !result.unstable {
            steps = fce_step_split(&law, &spec, &reference, rho, &data, &result)?;
        }
        result
    } else {
        let mut law = build_plain_law(&scheme, &plant, &parts, &spec)?;
        run_closed_loop(&plant, law.as_mut(), &reference, rho, &data, cfg.r, seed)
            .map_err(runtime_err("episode"))?
    };

    std::fs::create_dir_all(&args.out)
        .map_err(|e| Failure::Runtime(format!("creating {}: {e}", args.out.display())))?;
    write_logs_csv(&result, &reference, plant.p(), &args.out.join("logs.csv"))?;
    let summary = ControlSummary {
        scheme: kind_name(scheme.kind),
        seed,
        rho,
        t_v: reference.t_v,
        j_a: result.j_a.is_finite().then_some(result.j_a),
        unstable: result.unstable,
        steps,
    };
    let path = args.out.join("summary.json");
    let mut text = serde_json::to_string_pretty(&summary)
        .map_err(|e| Failure::Runtime(format!("serializing the summary: {e}")))?;
    text.push('\n');
    std::fs::write(&path, text)
        .map_err(|e| Failure::Runtime(format!("writing {}: {e}", path.display())))?;
    if result.unstable {
        println!("episode flagged unstable -> {}", args.out.display());
    } else {
        println!("J_a {:.6e} -> {}", result.j_a, args.out.display());
    }
    Ok(())
}

fn to_benchmark_config(cfg: &RunConfig, args: &BenchArgs) -> CliResult<BenchmarkConfig> {
    let mut bench = BenchmarkConfig::desk(cfg.setup);
    bench.plant = plant_for(cfg)?;
    bench.n_data = cfg.n_data;
    bench.t = cfg.t;
    bench.t_v = cfg.t_v;
    bench.n_runs = args.runs.unwrap_or(cfg.n_runs);
    bench.q_o = cfg.q_o;
    bench.r = cfg.r;
    bench.base_seed = args.seed.unwrap_or(cfg.base_seed);
    bench.rho_max = cfg.rho_max;
    bench.jobs = args.jobs.unwrap_or(cfg.jobs);
    if args.full_grids {
        bench.grids = Grids::full();
    }
    if let Some(schemes) = &cfg.schemes {
        let mut roster = Vec::new();
        for s in schemes {
            if s.has_fixed_params() {
                return Err(Failure::Config(
                    "bench schemes are tuned by grid search or closed form; remove the fixed parameters"
                        .into(),
                ));
            }
            roster.push(SchemeSpec::new(s.kind, s.tuning.unwrap_or_else(|| s.default_tuning())));
        }
        bench.schemes = roster;
    }
    bench.validate().map_err(config_err("benchmark configuration"))?;
    Ok(bench)
}

fn cmd_bench(args: &BenchArgs) -> CliResult<()> {
    let cfg = load_config(&args.config)?;
    let bench = to_benchmark_config(&cfg, args)?;
    if cfg.verbosity > 0 {
        eprintln!(
            "setup {}, {} runs, {} schemes, seed {}",
            bench.setup,
            bench.n_runs,
            bench.schemes.len(),
            bench.base_seed
        );
    }
    let report = run_benchmark(&bench).map_err(runtime_err("study"))?;
    let files =
        write_report_files(&report, &args.out).map_err(runtime_err("writing the report"))?;
    println!("wrote {} files to {}", files.len(), args.out.display());
    print_report(&report);
    Ok(())
}

fn fmt_stat(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x:.4e}"),
        None => "inf".to_string(),
    }
}

fn print_report(report: &BenchmarkReport) {
    println!(
        "setup {} | {} runs | N = {} | T = {} | T_v = {} | seed {}",
        report.setup, report.n_runs, report.n_data, report.t, report.t_v, report.base_seed
    );
    println!("{:<14} {:>12} {:>12} {:>12} {:>10}", "scheme", "median", "q1", "q3", "unstable");
    for scheme in &report.schemes {
        println!(
            "{:<14} {:>12} {:>12} {:>12} {:>9.0}%",
            scheme.name,
            fmt_stat(scheme.stats.median),
            fmt_stat(scheme.stats.q1),
            fmt_stat(scheme.stats.q3),
            scheme.stats.instability_fraction * 100.0
        );
    }
}

fn cmd_report(args: &ReportArgs) -> CliResult<()> {
    let text = std::fs::read_to_string(&args.report).map_err(|e| {
        Failure::Config(format!("report not found or unreadable at {}: {e}", args.report.display()))
    })?;
    let report: BenchmarkReport = serde_json::from_str(&text)
        .map_err(|e| Failure::Config(format!("report schema violation: {e}")))?;
    // The stored statistics must be recomputable from the stored samples.
    for scheme in &report.schemes {
        let recomputed = summarize(&scheme.sample_values())
            .map_err(|e| Failure::Runtime(format!("summarizing {}: {e}", scheme.name)))?;
        if recomputed != scheme.stats {
            return Err(Failure::Runtime(format!(
                "stored statistics of {} do not match its samples",
                scheme.name
            )));
        }
    }
    print_report(&report);
    Ok(())
}
