//! Experiment runner behind the `gsde` binary: parses a TOML config,
//! assembles the uncertainty set, scenario lattice, coefficients, and
//! solver, executes one named experiment, and writes machine-readable
//! results plus a run manifest. Identical config and seed produce
//! byte-identical outputs (the manifest's wall time excepted); result
//! files are written atomically via temp-then-rename.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::Parser;
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::calculus::{check_i_bound, check_q_bound, upper_expectation, BoundReport};
use crate::coefficients::{
    custom_table, d1_distance_with_family, geometric, linear_meanfield,
    lipschitz_test_family, osgood_log, sun_lifted, zero, CoefficientSet, LawView,
    LinearMeanfieldParams,
};
use crate::error::{EngineError, Result};
use crate::oracles::{classical_mkv_solve, default_halfwidth, gheat_expectation, GHeatConfig};
use crate::sampler::{simulate, GBMBundle, ProcessEnsemble, RandomVariable};
use crate::solver::{node_summaries, picard_solve, PicardReport, SolverConfig};
use crate::uncertainty::{
    build_controls, ControlLattice, ControlStrategy, TimeGrid, UncertaintyKind,
    UncertaintySet,
};

/// Default output directory when neither flag nor config supplies one.
pub const OUTPUT_DIR_ENV: &str = "GSDE_OUTPUT_DIR";

/// Seed tag for drawing Gaussian initial values, distinct from driver and
/// oracle streams derived from the same user seed.
const INITIAL_SEED_TAG: u64 = 0x5eed_0123;

#[derive(Debug, Parser)]
#[command(name = "gsde", version, about = "Run one configured experiment")]
struct Cli {
    /// Path to the experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory (overrides config and environment).
    #[arg(long)]
    output: Option<PathBuf>,
    /// Seed override applied to the solver block.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker-thread count for parallel sections.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Serialize)]
#[serde(rename_all = "kebab-case")]
enum ExperimentKind {
    SimulateGbm,
    CheckLemmas,
    Solve,
    CompareClassical,
    CompareGheat,
    D1Check,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum OutputFormat {
    Json,
    Csv,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    experiment: ExperimentKind,
    output: Option<String>,
    formats: Option<Vec<OutputFormat>>,
    uncertainty: Option<UncertaintySpec>,
    lattice: Option<LatticeSpec>,
    grid: Option<GridSpec>,
    coefficients: Option<CoefficientsSpec>,
    initial: Option<InitialSpec>,
    solver: Option<SolverSpec>,
    compare: Option<CompareSpec>,
    gheat: Option<GheatSpec>,
    d1: Option<D1Spec>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct UncertaintySpec {
    kind: String,
    matrix: Option<Vec<Vec<f64>>>,
    low: Option<f64>,
    high: Option<f64>,
    interior_points: Option<usize>,
    lows: Option<Vec<f64>>,
    highs: Option<Vec<f64>>,
    matrices: Option<Vec<Vec<Vec<f64>>>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct LatticeSpec {
    strategy: String,
    budget: usize,
    switch_count: Option<usize>,
    switching_seed: Option<u64>,
    max_scenarios: Option<usize>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct GridSpec {
    t_start: Option<f64>,
    t_end: f64,
    steps: usize,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CoefficientsSpec {
    family: String,
    d: Option<usize>,
    drift_state: Option<f64>,
    drift_mean: Option<f64>,
    covariation_state: Option<f64>,
    diffusion_state: Option<f64>,
    mu: Option<f64>,
    sigma: Option<f64>,
    c: Option<f64>,
    mean_scale: Option<f64>,
    xs: Option<Vec<f64>>,
    ys: Option<Vec<f64>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct InitialSpec {
    kind: String,
    value: Option<f64>,
    mean: Option<f64>,
    stddev: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SolverSpec {
    paths: usize,
    picard_tol: Option<f64>,
    max_iterations: Option<usize>,
    epsilon_tol: Option<f64>,
    seed: u64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CompareSpec {
    tolerance: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct GheatSpec {
    payoff: String,
    space_halfwidth: Option<f64>,
    space_steps: Option<usize>,
    time_steps: Option<usize>,
    tolerance: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct D1Spec {
    scale: Option<f64>,
    family_size: Option<usize>,
    family_seed: Option<u64>,
}

#[derive(Debug, Clone, Copy)]
struct ResolvedSolver {
    paths: usize,
    picard_tol: f64,
    max_iterations: usize,
    epsilon_tol: f64,
    seed: u64,
}

#[derive(Serialize)]
struct Manifest<'a> {
    experiment: ExperimentKind,
    config_sha256: String,
    seed: u64,
    version: &'a str,
    threads: Option<usize>,
    wall_time_seconds: f64,
    outputs: Vec<String>,
}

/// Entry point shared by the binary and tests: parses flags, runs the
/// configured experiment, and returns the process exit code (0 success,
/// 2 when a checked bound or convergence assertion failed; usage and
/// config errors surface as `Err` and map to exit code 1).
pub fn run<I, T>(args: I) -> Result<i32>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let started = Instant::now();
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e)
            if matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            ) =>
        {
            print!("{e}");
            return Ok(0);
        }
        Err(e) => return Err(EngineError::Config(e.to_string())),
    };
    if let Some(k) = cli.threads {
        if k == 0 {
            return Err(EngineError::Config("--threads must be positive".into()));
        }
        if rayon::ThreadPoolBuilder::new().num_threads(k).build_global().is_err() {
            eprintln!("note: thread pool already initialized; --threads ignored");
        }
    }
    let raw = std::fs::read(&cli.config)?;
    let text = std::str::from_utf8(&raw)
        .map_err(|e| EngineError::Config(format!("config is not UTF-8: {e}")))?;
    let config: FileConfig = toml::from_str(text)
        .map_err(|e| EngineError::Config(format!("config parse error: {e}")))?;
    let config_sha256 = hex(&Sha256::digest(&raw));

    let outdir = cli
        .output
        .clone()
        .or_else(|| config.output.as_ref().map(PathBuf::from))
        .or_else(|| std::env::var_os(OUTPUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("."));
    let formats = config
        .formats
        .clone()
        .unwrap_or_else(|| vec![OutputFormat::Json, OutputFormat::Csv]);

    let resolved = resolve_solver(&config, cli.seed)?;
    let set = build_uncertainty(require(&config.uncertainty, "uncertainty")?)?;
    let grid = build_grid(require(&config.grid, "grid")?)?;
    let strategy = build_strategy(require(&config.lattice, "lattice")?)?;
    let budget = require(&config.lattice, "lattice")?.budget;
    let lattice = build_controls(&set, &grid, &strategy, budget)?;
    let bundle = simulate(&lattice, resolved.paths, resolved.seed)?;

    std::fs::create_dir_all(&outdir)?;
    let (code, outputs) = match config.experiment {
        ExperimentKind::SimulateGbm => run_simulate(&bundle, &outdir, &formats)?,
        ExperimentKind::CheckLemmas => {
            run_check_lemmas(&bundle, resolved.epsilon_tol, &outdir, &formats)?
        }
        ExperimentKind::Solve => run_solve(&config, &set, &bundle, &resolved, &outdir, &formats)?,
        ExperimentKind::CompareClassical => {
            run_compare_classical(&config, &set, &lattice, &bundle, &resolved, &outdir, &formats)?
        }
        ExperimentKind::CompareGheat => {
            run_compare_gheat(&config, &set, &bundle, &outdir, &formats)?
        }
        ExperimentKind::D1Check => run_d1_check(&config, &bundle, &outdir, &formats)?,
    };

    let manifest = Manifest {
        experiment: config.experiment,
        config_sha256,
        seed: resolved.seed,
        version: env!("CARGO_PKG_VERSION"),
        threads: cli.threads,
        wall_time_seconds: started.elapsed().as_secs_f64(),
        outputs,
    };
    write_atomic(&outdir, "manifest.json", to_json(&manifest)?.as_bytes())?;
    Ok(code)
}

fn require<'a, T>(field: &'a Option<T>, name: &str) -> Result<&'a T> {
    field
        .as_ref()
        .ok_or_else(|| EngineError::Config(format!("config is missing the [{name}] block")))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn resolve_solver(config: &FileConfig, seed_override: Option<u64>) -> Result<ResolvedSolver> {
    let spec = require(&config.solver, "solver")?;
    if spec.paths == 0 {
        return Err(EngineError::Config("solver.paths must be positive".into()));
    }
    Ok(ResolvedSolver {
        paths: spec.paths,
        picard_tol: spec.picard_tol.unwrap_or(1e-6),
        max_iterations: spec.max_iterations.unwrap_or(50),
        epsilon_tol: spec.epsilon_tol.unwrap_or(0.02),
        seed: seed_override.unwrap_or(spec.seed),
    })
}

fn ensure_absent(kind: &str, fields: &[(&str, bool)]) -> Result<()> {
    for (name, present) in fields {
        if *present {
            return Err(EngineError::Config(format!(
                "field `{name}` is not valid for kind `{kind}`"
            )));
        }
    }
    Ok(())
}

fn to_matrix(rows: &[Vec<f64>]) -> Result<Array2<f64>> {
    let r = rows.len();
    let cols = rows.first().map(|row| row.len()).unwrap_or(0);
    if r == 0 || cols == 0 || rows.iter().any(|row| row.len() != cols) {
        return Err(EngineError::Config("matrix rows must be non-empty and equal-length".into()));
    }
    let mut m = Array2::zeros((r, cols));
    for (i, row) in rows.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            m[(i, j)] = v;
        }
    }
    Ok(m)
}

fn build_uncertainty(spec: &UncertaintySpec) -> Result<UncertaintySet> {
    let need = |name: &str| EngineError::Config(format!("uncertainty kind `{}` needs `{name}`", spec.kind));
    match spec.kind.as_str() {
        "singleton" => {
            ensure_absent(
                "singleton",
                &[
                    ("low", spec.low.is_some()),
                    ("high", spec.high.is_some()),
                    ("interior_points", spec.interior_points.is_some()),
                    ("lows", spec.lows.is_some()),
                    ("highs", spec.highs.is_some()),
                    ("matrices", spec.matrices.is_some()),
                ],
            )?;
            let matrix = spec.matrix.as_ref().ok_or_else(|| need("matrix"))?;
            UncertaintySet::singleton(to_matrix(matrix)?)
        }
        "interval1d" => {
            ensure_absent(
                "interval1d",
                &[
                    ("matrix", spec.matrix.is_some()),
                    ("lows", spec.lows.is_some()),
                    ("highs", spec.highs.is_some()),
                    ("matrices", spec.matrices.is_some()),
                ],
            )?;
            let low = spec.low.ok_or_else(|| need("low"))?;
            let high = spec.high.ok_or_else(|| need("high"))?;
            UncertaintySet::interval_1d_with_points(
                low,
                high,
                spec.interior_points.unwrap_or(0) + 2,
            )
        }
        "diagonal-box" => {
            ensure_absent(
                "diagonal-box",
                &[
                    ("matrix", spec.matrix.is_some()),
                    ("low", spec.low.is_some()),
                    ("high", spec.high.is_some()),
                    ("interior_points", spec.interior_points.is_some()),
                    ("matrices", spec.matrices.is_some()),
                ],
            )?;
            let lows = spec.lows.clone().ok_or_else(|| need("lows"))?;
            let highs = spec.highs.clone().ok_or_else(|| need("highs"))?;
            UncertaintySet::diagonal_box(lows, highs)
        }
        "finite-set" => {
            ensure_absent(
                "finite-set",
                &[
                    ("matrix", spec.matrix.is_some()),
                    ("low", spec.low.is_some()),
                    ("high", spec.high.is_some()),
                    ("interior_points", spec.interior_points.is_some()),
                    ("lows", spec.lows.is_some()),
                    ("highs", spec.highs.is_some()),
                ],
            )?;
            let matrices = spec.matrices.as_ref().ok_or_else(|| need("matrices"))?;
            let parsed: Result<Vec<_>> = matrices.iter().map(|m| to_matrix(m)).collect();
            UncertaintySet::finite_set(parsed?)
        }
        other => Err(EngineError::Config(format!(
            "unknown uncertainty kind `{other}` (expected singleton, interval1d, diagonal-box, finite-set)"
        ))),
    }
}

fn build_grid(spec: &GridSpec) -> Result<TimeGrid> {
    TimeGrid::new(spec.t_start.unwrap_or(0.0), spec.t_end, spec.steps)
}

fn build_strategy(spec: &LatticeSpec) -> Result<ControlStrategy> {
    match spec.strategy.as_str() {
        "constant-vertices" => {
            ensure_absent(
                "constant-vertices",
                &[
                    ("switch_count", spec.switch_count.is_some()),
                    ("switching_seed", spec.switching_seed.is_some()),
                    ("max_scenarios", spec.max_scenarios.is_some()),
                ],
            )?;
            Ok(ControlStrategy::ConstantVertices)
        }
        "random-switching" => {
            ensure_absent("random-switching", &[("max_scenarios", spec.max_scenarios.is_some())])?;
            let seed = spec.switching_seed.ok_or_else(|| {
                EngineError::Config("random-switching needs `switching_seed`".into())
            })?;
            let switch_count = spec.switch_count.ok_or_else(|| {
                EngineError::Config("random-switching needs `switch_count`".into())
            })?;
            Ok(ControlStrategy::RandomSwitching { seed, switch_count })
        }
        "exhaustive" => {
            ensure_absent(
                "exhaustive",
                &[
                    ("switch_count", spec.switch_count.is_some()),
                    ("switching_seed", spec.switching_seed.is_some()),
                ],
            )?;
            let max_scenarios = spec.max_scenarios.ok_or_else(|| {
                EngineError::Config("exhaustive needs `max_scenarios`".into())
            })?;
            Ok(ControlStrategy::Exhaustive { max_scenarios })
        }
        other => Err(EngineError::Config(format!(
            "unknown lattice strategy `{other}` (expected constant-vertices, random-switching, exhaustive)"
        ))),
    }
}

fn build_coefficients(spec: &CoefficientsSpec, n: usize) -> Result<CoefficientSet> {
    let d = spec.d.unwrap_or(1);
    let fields = [
        ("drift_state", spec.drift_state.is_some()),
        ("drift_mean", spec.drift_mean.is_some()),
        ("covariation_state", spec.covariation_state.is_some()),
        ("diffusion_state", spec.diffusion_state.is_some()),
        ("mu", spec.mu.is_some()),
        ("sigma", spec.sigma.is_some()),
        ("c", spec.c.is_some()),
        ("mean_scale", spec.mean_scale.is_some()),
        ("xs", spec.xs.is_some()),
        ("ys", spec.ys.is_some()),
    ];
    let allowed: &[&str] = match spec.family.as_str() {
        "zero" => &[],
        "linear-meanfield" => {
            &["drift_state", "drift_mean", "covariation_state", "diffusion_state"]
        }
        "geometric" => &["mu", "sigma"],
        "osgood-log" => &["c", "mean_scale"],
        "sun-lifted" => &["c"],
        "custom-table" => &["xs", "ys"],
        other => {
            return Err(EngineError::Config(format!("unknown coefficient family `{other}`")))
        }
    };
    for (name, present) in fields {
        if present && !allowed.contains(&name) {
            return Err(EngineError::Config(format!(
                "field `{name}` is not valid for family `{}`",
                spec.family
            )));
        }
    }
    match spec.family.as_str() {
        "zero" => zero(d, n),
        "linear-meanfield" => {
            linear_meanfield(
                d,
                n,
                LinearMeanfieldParams {
                    drift_state: spec.drift_state.unwrap_or(0.0),
                    drift_mean: spec.drift_mean.unwrap_or(0.0),
                    covariation_state: spec.covariation_state.unwrap_or(0.0),
                    diffusion_state: spec.diffusion_state.unwrap_or(0.0),
                },
            )
        }
        "geometric" => {
            let mu = spec.mu.ok_or_else(|| EngineError::Config("geometric needs `mu`".into()))?;
            let sigma = spec
                .sigma
                .ok_or_else(|| EngineError::Config("geometric needs `sigma`".into()))?;
            geometric(d, n, mu, sigma)
        }
        "osgood-log" => {
            let c = spec.c.ok_or_else(|| EngineError::Config("osgood-log needs `c`".into()))?;
            osgood_log(d, n, c, spec.mean_scale.unwrap_or(0.0))
        }
        "sun-lifted" => {
            let c = spec.c.ok_or_else(|| EngineError::Config("sun-lifted needs `c`".into()))?;
            sun_lifted(d, n, c)
        }
        "custom-table" => {
            let xs = spec.xs.clone().ok_or_else(|| EngineError::Config("custom-table needs `xs`".into()))?;
            let ys = spec.ys.clone().ok_or_else(|| EngineError::Config("custom-table needs `ys`".into()))?;
            custom_table(d, n, xs, ys)
        }
        _ => unreachable!("family validated above"),
    }
}

fn build_initial(
    spec: &InitialSpec,
    scenarios: usize,
    paths: usize,
    d: usize,
    seed: u64,
) -> Result<RandomVariable> {
    match spec.kind.as_str() {
        "constant" => {
            ensure_absent(
                "constant",
                &[("mean", spec.mean.is_some()), ("stddev", spec.stddev.is_some())],
            )?;
            let value = spec
                .value
                .ok_or_else(|| EngineError::Config("constant initial needs `value`".into()))?;
            RandomVariable::from_elem(scenarios, paths, d, value)
        }
        "gaussian" => {
            ensure_absent("gaussian", &[("value", spec.value.is_some())])?;
            let mean = spec
                .mean
                .ok_or_else(|| EngineError::Config("gaussian initial needs `mean`".into()))?;
            let stddev = spec
                .stddev
                .ok_or_else(|| EngineError::Config("gaussian initial needs `stddev`".into()))?;
            if !(stddev >= 0.0) || !stddev.is_finite() {
                return Err(EngineError::Config("stddev must be nonnegative".into()));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ INITIAL_SEED_TAG);
            let mut values = Array3::zeros((scenarios, paths, d));
            for v in values.iter_mut() {
                *v = mean + stddev * rng.sample::<f64, _>(StandardNormal);
            }
            RandomVariable::new(values)
        }
        other => Err(EngineError::Config(format!(
            "unknown initial kind `{other}` (expected constant, gaussian)"
        ))),
    }
}

fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| EngineError::Contract(format!("serialization failed: {e}")))?;
    text.push('\n');
    Ok(text)
}

fn write_atomic(dir: &Path, name: &str, bytes: &[u8]) -> Result<()> {
    let tmp = dir.join(format!("{name}.tmp"));
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, dir.join(name))?;
    Ok(())
}

fn wants(formats: &[OutputFormat], f: OutputFormat) -> bool {
    formats.contains(&f)
}

fn first_axis_direction(n: usize) -> Vec<f64> {
    let mut e = vec![0.0; n];
    e[0] = 1.0;
    e
}

#[derive(Serialize)]
struct SimulateSummary {
    scenarios: usize,
    paths: usize,
    steps: usize,
    dimension: usize,
    sigma_bar_first_axis: f64,
    driver_terminal_mean_upper: f64,
    driver_terminal_mean_lower: f64,
    qv_terminal_upper: f64,
    qv_terminal_lower: f64,
}

fn run_simulate(
    bundle: &GBMBundle,
    outdir: &Path,
    formats: &[OutputFormat],
) -> Result<(i32, Vec<String>)> {
    let n = bundle.dimension();
    let e1 = first_axis_direction(n);
    let m = bundle.grid().steps();
    let qv_at = |k: usize| -> (f64, f64) {
        let mut hi = f64::NEG_INFINITY;
        let mut lo = f64::INFINITY;
        for s in 0..bundle.scenarios() {
            let v = bundle.qv_quadratic(s, k, &e1, &e1);
            hi = hi.max(v);
            lo = lo.min(v);
        }
        (hi, lo)
    };
    let terminal_law = LawView::new(bundle.b().terminal())?;
    let (qv_hi, qv_lo) = qv_at(m);
    let summary = SimulateSummary {
        scenarios: bundle.scenarios(),
        paths: bundle.paths(),
        steps: m,
        dimension: n,
        sigma_bar_first_axis: bundle.lattice().sigma_bar(&e1, &e1)?,
        driver_terminal_mean_upper: terminal_law.mean_upper(0),
        driver_terminal_mean_lower: terminal_law.mean_lower(0),
        qv_terminal_upper: qv_hi,
        qv_terminal_lower: qv_lo,
    };
    let mut outputs = Vec::new();
    if wants(formats, OutputFormat::Json) {
        write_atomic(outdir, "summary.json", to_json(&summary)?.as_bytes())?;
        outputs.push("summary.json".into());
    }
    if wants(formats, OutputFormat::Csv) {
        let mut csv = String::from(
            "node_time,driver_mean_upper,driver_mean_lower,qv_upper,qv_lower\n",
        );
        for k in 0..=m {
            let law = LawView::new(bundle.b().at_node(k)?)?;
            let (hi, lo) = qv_at(k);
            csv.push_str(&format!(
                "{},{},{},{},{}\n",
                bundle.grid().node(k),
                law.mean_upper(0),
                law.mean_lower(0),
                hi,
                lo
            ));
        }
        write_atomic(outdir, "driver.csv", csv.as_bytes())?;
        outputs.push("driver.csv".into());
    }
    Ok((0, outputs))
}

#[derive(Serialize)]
struct LemmaSummary {
    q_bound: BoundReport,
    i_bound: BoundReport,
    pass: bool,
}

fn run_check_lemmas(
    bundle: &GBMBundle,
    eps_tol: f64,
    outdir: &Path,
    formats: &[OutputFormat],
) -> Result<(i32, Vec<String>)> {
    let n = bundle.dimension();
    let e1 = first_axis_direction(n);
    // Scalar integrand: the driver's first component.
    let xv = bundle
        .b()
        .values()
        .slice(ndarray::s![.., .., .., 0..1])
        .to_owned();
    let x = ProcessEnsemble::new(xv, bundle.grid().clone())?;
    let window = (bundle.grid().t_start(), bundle.grid().t_end());
    let q = check_q_bound(&x, bundle, 2.0, &e1, &e1, window, eps_tol)?;
    let i = check_i_bound(&x, bundle, 2.0, &e1, window, eps_tol)?;
    let pass = q.pass && i.pass;
    let summary = LemmaSummary { q_bound: q, i_bound: i, pass };
    let mut outputs = Vec::new();
    if wants(formats, OutputFormat::Json) {
        write_atomic(outdir, "lemmas.json", to_json(&summary)?.as_bytes())?;
        outputs.push("lemmas.json".into());
    }
    if wants(formats, OutputFormat::Csv) {
        let mut csv = String::from("bound,lhs,rhs,sigma_bar,p,pass\n");
        for (name, rep) in [("q", &summary.q_bound), ("i", &summary.i_bound)] {
            csv.push_str(&format!(
                "{},{},{},{},{},{}\n",
                name, rep.lhs, rep.rhs, rep.sigma_bar, rep.p, rep.pass
            ));
        }
        write_atomic(outdir, "lemmas.csv", csv.as_bytes())?;
        outputs.push("lemmas.csv".into());
    }
    Ok((if pass { 0 } else { 2 }, outputs))
}

fn solve_pipeline(
    config: &FileConfig,
    set: &UncertaintySet,
    bundle: &GBMBundle,
    resolved: &ResolvedSolver,
) -> Result<(RandomVariable, CoefficientSet, ProcessEnsemble, PicardReport)> {
    let cspec = require(&config.coefficients, "coefficients")?;
    let c = build_coefficients(cspec, set.dimension())?;
    let ispec = require(&config.initial, "initial")?;
    let xi = build_initial(
        ispec,
        bundle.scenarios(),
        bundle.paths(),
        c.state_dim(),
        resolved.seed,
    )?;
    let solver_cfg = SolverConfig {
        grid: bundle.grid().clone(),
        paths: resolved.paths,
        picard_tol: resolved.picard_tol,
        max_iterations: resolved.max_iterations,
        epsilon_tol: resolved.epsilon_tol,
        seed: resolved.seed,
    };
    let (solution, report) = picard_solve(&xi, &c, bundle, &solver_cfg)?;
    Ok((xi, c, solution, report))
}

fn run_solve(
    config: &FileConfig,
    set: &UncertaintySet,
    bundle: &GBMBundle,
    resolved: &ResolvedSolver,
    outdir: &Path,
    formats: &[OutputFormat],
) -> Result<(i32, Vec<String>)> {
    if wants(formats, OutputFormat::Csv) {
        let d = require(&config.coefficients, "coefficients")?.d.unwrap_or(1);
        if d != 1 {
            return Err(EngineError::Config(
                "solution CSV export is defined for scalar state (d = 1); drop csv from formats"
                    .into(),
            ));
        }
    }
    let (_, _, solution, report) = solve_pipeline(config, set, bundle, resolved)?;
    let mut outputs = Vec::new();
    if wants(formats, OutputFormat::Json) {
        write_atomic(outdir, "report.json", to_json(&report)?.as_bytes())?;
        outputs.push("report.json".into());
    }
    if wants(formats, OutputFormat::Csv) {
        let rows = node_summaries(&solution)?;
        let mut csv = String::from(
            "node_time,mean_upper,mean_lower,second_moment_upper,h2_running,picard_iterations\n",
        );
        for r in rows {
            csv.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.node_time,
                r.mean_upper,
                r.mean_lower,
                r.second_moment_upper,
                r.h2_running,
                report.iterations_used
            ));
        }
        write_atomic(outdir, "solution.csv", csv.as_bytes())?;
        outputs.push("solution.csv".into());
    }
    let ok = report.converged && report.q_violations.is_empty();
    Ok((if ok { 0 } else { 2 }, outputs))
}

#[derive(Serialize)]
struct ClassicalComparison {
    engine_terminal_mean: f64,
    oracle_terminal_mean: f64,
    mean_difference: f64,
    engine_second_moment: f64,
    oracle_second_moment: f64,
    second_moment_difference: f64,
    tolerance: f64,
    pass: bool,
}

fn run_compare_classical(
    config: &FileConfig,
    set: &UncertaintySet,
    lattice: &ControlLattice,
    bundle: &GBMBundle,
    resolved: &ResolvedSolver,
    outdir: &Path,
    formats: &[OutputFormat],
) -> Result<(i32, Vec<String>)> {
    if *set.kind() != UncertaintyKind::Singleton {
        return Err(EngineError::Config(
            "compare-classical requires a singleton uncertainty set".into(),
        ));
    }
    if lattice.scenario_count() != 1 {
        return Err(EngineError::Config(
            "compare-classical requires a single-scenario lattice (use constant-vertices)".into(),
        ));
    }
    let tolerance = require(&config.compare, "compare")?.tolerance;
    if !(tolerance > 0.0) {
        return Err(EngineError::Config("compare.tolerance must be positive".into()));
    }
    let (xi, c, engine_sol, _report) = solve_pipeline(config, set, bundle, resolved)?;
    if c.state_dim() != 1 {
        return Err(EngineError::Config(
            "compare-classical is defined for scalar state (d = 1)".into(),
        ));
    }
    let oracle_sol = classical_mkv_solve(
        &xi,
        &c,
        &set.generators()[0],
        bundle.grid(),
        resolved.paths,
        resolved.seed,
    )?;
    let engine_mean = upper_expectation(&engine_sol.terminal())?.value;
    let oracle_mean = upper_expectation(&oracle_sol.terminal())?.value;
    let engine_second = upper_expectation(&engine_sol.terminal().map(|v| v * v)?)?.value;
    let oracle_second = upper_expectation(&oracle_sol.terminal().map(|v| v * v)?)?.value;
    let summary = ClassicalComparison {
        engine_terminal_mean: engine_mean,
        oracle_terminal_mean: oracle_mean,
        mean_difference: engine_mean - oracle_mean,
        engine_second_moment: engine_second,
        oracle_second_moment: oracle_second,
        second_moment_difference: engine_second - oracle_second,
        tolerance,
        pass: (engine_mean - oracle_mean).abs() <= tolerance,
    };
    let mut outputs = Vec::new();
    if wants(formats, OutputFormat::Json) {
        write_atomic(outdir, "comparison.json", to_json(&summary)?.as_bytes())?;
        outputs.push("comparison.json".into());
    }
    if wants(formats, OutputFormat::Csv) {
        let mut csv = String::from("node_time,engine_mean,oracle_mean\n");
        for k in 0..=bundle.grid().steps() {
            let e = upper_expectation(&engine_sol.at_node(k)?)?.value;
            let o = upper_expectation(&oracle_sol.at_node(k)?)?.value;
            csv.push_str(&format!("{},{},{}\n", bundle.grid().node(k), e, o));
        }
        write_atomic(outdir, "curves.csv", csv.as_bytes())?;
        outputs.push("curves.csv".into());
    }
    Ok((if summary.pass { 0 } else { 2 }, outputs))
}

#[derive(Serialize)]
struct GheatComparison {
    engine_estimate: f64,
    adapted_value: f64,
    dominance_gap: f64,
    tolerance: f64,
    pass: bool,
}

fn run_compare_gheat(
    config: &FileConfig,
    set: &UncertaintySet,
    bundle: &GBMBundle,
    outdir: &Path,
    formats: &[OutputFormat],
) -> Result<(i32, Vec<String>)> {
    let (low, high) = match set.kind() {
        UncertaintyKind::Interval1D { low, high } => (*low, *high),
        _ => {
            return Err(EngineError::Config(
                "compare-gheat requires an interval1d uncertainty set".into(),
            ))
        }
    };
    let spec = require(&config.gheat, "gheat")?;
    let payoff: Box<dyn Fn(f64) -> f64 + Send + Sync> = match spec.payoff.as_str() {
        "identity" => Box::new(|x| x),
        "square" => Box::new(|x| x * x),
        "neg-square" => Box::new(|x| -x * x),
        "abs" => Box::new(f64::abs),
        other => {
            return Err(EngineError::Config(format!(
                "unknown payoff `{other}` (expected identity, square, neg-square, abs)"
            )))
        }
    };
    let horizon = bundle.grid().t_end() - bundle.grid().t_start();
    let tolerance = spec.tolerance.unwrap_or(0.05);
    let engine = upper_expectation(&bundle.b().terminal().map(|v| payoff(v))?)?.value;
    let cfg = GHeatConfig {
        sigma_low: low,
        sigma_high: high,
        space_halfwidth: spec.space_halfwidth.unwrap_or_else(|| default_halfwidth(high, horizon)),
        space_steps: spec.space_steps.unwrap_or(400),
        time_steps: spec.time_steps.unwrap_or(1200),
        horizon,
        payoff,
    };
    let adapted = gheat_expectation(&cfg)?;
    let summary = GheatComparison {
        engine_estimate: engine,
        adapted_value: adapted,
        dominance_gap: adapted - engine,
        tolerance,
        pass: engine <= adapted + tolerance,
    };
    let mut outputs = Vec::new();
    if wants(formats, OutputFormat::Json) {
        write_atomic(outdir, "gheat.json", to_json(&summary)?.as_bytes())?;
        outputs.push("gheat.json".into());
    }
    if wants(formats, OutputFormat::Csv) {
        let csv = format!(
            "engine_estimate,adapted_value,dominance_gap,tolerance,pass\n{},{},{},{},{}\n",
            summary.engine_estimate,
            summary.adapted_value,
            summary.dominance_gap,
            summary.tolerance,
            summary.pass
        );
        write_atomic(outdir, "gheat.csv", csv.as_bytes())?;
        outputs.push("gheat.csv".into());
    }
    Ok((if summary.pass { 0 } else { 2 }, outputs))
}

#[derive(Serialize)]
struct D1Summary {
    identity_distance: f64,
    symmetry_gap: f64,
    direct_distance: f64,
    via_third_distance: f64,
    triangle_slack: f64,
    l1_upper_bound: f64,
    pass_identity: bool,
    pass_symmetry: bool,
    pass_triangle: bool,
    pass_l1_dominance: bool,
    pass: bool,
}

fn run_d1_check(
    config: &FileConfig,
    bundle: &GBMBundle,
    outdir: &Path,
    formats: &[OutputFormat],
) -> Result<(i32, Vec<String>)> {
    let defaults = D1Spec { scale: None, family_size: None, family_seed: None };
    let spec = config.d1.as_ref().unwrap_or(&defaults);
    let scale = spec.scale.unwrap_or(0.5);
    let family_size = spec.family_size.unwrap_or(64);
    let family_seed = spec.family_seed.unwrap_or(2024);
    let xi = bundle.b().terminal();
    let eta = xi.map(|v| scale * v)?;
    let mid = bundle.b().at_node(bundle.grid().steps() / 2)?;
    let family = lipschitz_test_family(xi.components(), family_size, family_seed);
    let identity = d1_distance_with_family(&xi, &xi, &family)?;
    let forward = d1_distance_with_family(&xi, &eta, &family)?;
    let backward = d1_distance_with_family(&eta, &xi, &family)?;
    let to_mid = d1_distance_with_family(&xi, &mid, &family)?;
    let from_mid = d1_distance_with_family(&mid, &eta, &family)?;
    // Samplewise L1 dominance of the unit-Lipschitz distance.
    let l1 = {
        let diff = xi.zip_with(&eta, |a, b| (a - b).abs())?;
        let total = diff.values().sum_axis(ndarray::Axis(2)).insert_axis(ndarray::Axis(2));
        upper_expectation(&RandomVariable::new(total)?)?.value
    };
    let summary = D1Summary {
        identity_distance: identity,
        symmetry_gap: (forward - backward).abs(),
        direct_distance: forward,
        via_third_distance: to_mid + from_mid,
        triangle_slack: to_mid + from_mid - forward,
        l1_upper_bound: l1,
        pass_identity: identity == 0.0,
        pass_symmetry: forward == backward,
        pass_triangle: to_mid + from_mid >= forward - 1e-12,
        pass_l1_dominance: forward <= l1 + 1e-12,
        pass: false,
    };
    let pass = summary.pass_identity
        && summary.pass_symmetry
        && summary.pass_triangle
        && summary.pass_l1_dominance;
    let summary = D1Summary { pass, ..summary };
    let mut outputs = Vec::new();
    if wants(formats, OutputFormat::Json) {
        write_atomic(outdir, "d1.json", to_json(&summary)?.as_bytes())?;
        outputs.push("d1.json".into());
    }
    if wants(formats, OutputFormat::Csv) {
        let mut csv = String::from("check,value,pass\n");
        csv.push_str(&format!("identity,{},{}\n", summary.identity_distance, summary.pass_identity));
        csv.push_str(&format!("symmetry,{},{}\n", summary.symmetry_gap, summary.pass_symmetry));
        csv.push_str(&format!("triangle,{},{}\n", summary.triangle_slack, summary.pass_triangle));
        csv.push_str(&format!(
            "l1-dominance,{},{}\n",
            summary.l1_upper_bound - summary.direct_distance,
            summary.pass_l1_dominance
        ));
        write_atomic(outdir, "d1.csv", csv.as_bytes())?;
        outputs.push("d1.csv".into());
    }
    Ok((if pass { 0 } else { 2 }, outputs))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scratch(tag: &str) -> PathBuf {
        let dir = std::env::temp_dir().join(format!("gsde-cli-{tag}-{}", std::process::id()));
        let _ = std::fs::remove_dir_all(&dir);
        std::fs::create_dir_all(&dir).unwrap();
        dir
    }

    fn write_config(dir: &Path, body: &str) -> PathBuf {
        let path = dir.join("config.toml");
        std::fs::write(&path, body).unwrap();
        path
    }

    const SOLVE_ZERO: &str = r#"
experiment = "solve"

[uncertainty]
kind = "interval1d"
low = 0.5
high = 1.0

[lattice]
strategy = "constant-vertices"
budget = 2

[grid]
t_end = 1.0
steps = 16

[coefficients]
family = "zero"

[initial]
kind = "constant"
value = 1.5

[solver]
paths = 64
seed = 11
"#;

    fn run_args(config: &Path, out: &Path) -> Vec<OsString> {
        vec![
            OsString::from("gsde"),
            OsString::from("--config"),
            config.as_os_str().to_owned(),
            OsString::from("--output"),
            out.as_os_str().to_owned(),
        ]
    }

    #[test]
    fn zero_coefficient_solve_writes_constant_solution() {
        let dir = scratch("solve-zero");
        let config = write_config(&dir, SOLVE_ZERO);
        let out = dir.join("out");
        let code = run(run_args(&config, &out)).unwrap();
        assert_eq!(code, 0);
        let csv = std::fs::read_to_string(out.join("solution.csv")).unwrap();
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "node_time,mean_upper,mean_lower,second_moment_upper,h2_running,picard_iterations"
        );
        for line in lines {
            let cols: Vec<&str> = line.split(',').collect();
            assert_eq!(cols[1], "1.5");
            assert_eq!(cols[2], "1.5");
            assert_eq!(cols[3], "2.25");
        }
        let report: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap())
                .unwrap();
        assert_eq!(report["converged"], serde_json::Value::Bool(true));
        assert!(out.join("manifest.json").exists());
    }

    #[test]
    fn identical_runs_are_byte_identical() {
        let dir = scratch("determinism");
        let config = write_config(&dir, SOLVE_ZERO);
        let out1 = dir.join("a");
        let out2 = dir.join("b");
        assert_eq!(run(run_args(&config, &out1)).unwrap(), 0);
        assert_eq!(run(run_args(&config, &out2)).unwrap(), 0);
        for name in ["solution.csv", "report.json"] {
            let a = std::fs::read(out1.join(name)).unwrap();
            let b = std::fs::read(out2.join(name)).unwrap();
            assert_eq!(a, b, "{name} differs between identical runs");
        }
    }

    #[test]
    fn seed_flag_overrides_config_seed() {
        let dir = scratch("seed-override");
        let config = write_config(&dir, SOLVE_ZERO);
        let out = dir.join("out");
        let mut args = run_args(&config, &out);
        args.push("--seed".into());
        args.push("99".into());
        assert_eq!(run(args).unwrap(), 0);
        let manifest: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap())
                .unwrap();
        assert_eq!(manifest["seed"], serde_json::json!(99));
    }

    #[test]
    fn check_lemmas_passes_on_the_interval_set() {
        let dir = scratch("lemmas");
        let body = r#"
experiment = "check-lemmas"

[uncertainty]
kind = "interval1d"
low = 0.5
high = 1.0

[lattice]
strategy = "constant-vertices"
budget = 2

[grid]
t_end = 1.0
steps = 32

[solver]
paths = 2000
seed = 21
"#;
        let config = write_config(&dir, body);
        let out = dir.join("out");
        assert_eq!(run(run_args(&config, &out)).unwrap(), 0);
        let lemmas: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(out.join("lemmas.json")).unwrap())
                .unwrap();
        assert_eq!(lemmas["q_bound"]["pass"], serde_json::Value::Bool(true));
        assert_eq!(lemmas["i_bound"]["pass"], serde_json::Value::Bool(true));
    }

    #[test]
    fn missing_uncertainty_block_fails_closed_without_outputs() {
        let dir = scratch("missing-block");
        let body = r#"
experiment = "solve"

[grid]
t_end = 1.0
steps = 8

[solver]
paths = 8
seed = 1
"#;
        let config = write_config(&dir, body);
        let out = dir.join("out");
        let err = run(run_args(&config, &out)).unwrap_err();
        assert_eq!(err.exit_code(), 1);
        assert!(!out.exists(), "no output directory on config error");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = scratch("unknown-key");
        let body = format!("{SOLVE_ZERO}\n[extra]\nx = 1\n");
        let config = write_config(&dir, &body);
        let out = dir.join("out");
        let err = run(run_args(&config, &out)).unwrap_err();
        assert!(matches!(err, EngineError::Config(_)));
    }

    #[test]
    fn d1_check_validates_metric_axioms() {
        let dir = scratch("d1");
        let body = r#"
experiment = "d1-check"

[uncertainty]
kind = "interval1d"
low = 0.5
high = 1.0

[lattice]
strategy = "constant-vertices"
budget = 2

[grid]
t_end = 1.0
steps = 16

[solver]
paths = 500
seed = 31

[d1]
scale = 0.25
"#;
        let config = write_config(&dir, body);
        let out = dir.join("out");
        assert_eq!(run(run_args(&config, &out)).unwrap(), 0);
        let d1: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(out.join("d1.json")).unwrap()).unwrap();
        assert_eq!(d1["pass"], serde_json::Value::Bool(true));
        assert_eq!(d1["identity_distance"], serde_json::json!(0.0));
    }

    #[test]
    fn compare_gheat_dominance_holds() {
        let dir = scratch("gheat");
        let body = r#"
experiment = "compare-gheat"

[uncertainty]
kind = "interval1d"
low = 0.5
high = 1.0

[lattice]
strategy = "constant-vertices"
budget = 2

[grid]
t_end = 1.0
steps = 32

[solver]
paths = 4000
seed = 41

[gheat]
payoff = "square"
space_steps = 200
time_steps = 800
tolerance = 0.1
"#;
        let config = write_config(&dir, body);
        let out = dir.join("out");
        assert_eq!(run(run_args(&config, &out)).unwrap(), 0);
        let g: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(out.join("gheat.json")).unwrap())
                .unwrap();
        assert_eq!(g["pass"], serde_json::Value::Bool(true));
    }

    #[test]
    fn compare_classical_agrees_on_singleton() {
        let dir = scratch("classical");
        let body = r#"
experiment = "compare-classical"

[uncertainty]
kind = "singleton"
matrix = [[0.8]]

[lattice]
strategy = "constant-vertices"
budget = 1

[grid]
t_end = 1.0
steps = 64

[coefficients]
family = "geometric"
mu = 0.2
sigma = 0.7

[initial]
kind = "constant"
value = 1.0

[solver]
paths = 4000
seed = 51

[compare]
tolerance = 0.1
"#;
        let config = write_config(&dir, body);
        let out = dir.join("out");
        assert_eq!(run(run_args(&config, &out)).unwrap(), 0);
        let j: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(out.join("comparison.json")).unwrap())
                .unwrap();
        assert_eq!(j["pass"], serde_json::Value::Bool(true));
        let csv = std::fs::read_to_string(out.join("curves.csv")).unwrap();
        assert_eq!(csv.lines().count(), 66);
    }

    #[test]
    fn simulate_gbm_writes_driver_table() {
        let dir = scratch("simulate");
        let body = r#"
experiment = "simulate-gbm"

[uncertainty]
kind = "interval1d"
low = 0.5
high = 1.0
interior_points = 1

[lattice]
strategy = "random-switching"
budget = 4
switch_count = 1
switching_seed = 7

[grid]
t_end = 1.0
steps = 16

[solver]
paths = 200
seed = 61
"#;
        let config = write_config(&dir, body);
        let out = dir.join("out");
        assert_eq!(run(run_args(&config, &out)).unwrap(), 0);
        let csv = std::fs::read_to_string(out.join("driver.csv")).unwrap();
        assert_eq!(csv.lines().count(), 18);
        let summary: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap())
                .unwrap();
        assert_eq!(summary["scenarios"], serde_json::json!(4));
        assert_eq!(summary["sigma_bar_first_axis"], serde_json::json!(1.0));
    }

    #[test]
    fn foreign_fields_for_a_kind_are_rejected() {
        let dir = scratch("foreign-field");
        let body = SOLVE_ZERO.replace(
            "kind = \"interval1d\"\nlow = 0.5\nhigh = 1.0",
            "kind = \"interval1d\"\nlow = 0.5\nhigh = 1.0\nmatrices = [[[1.0]]]",
        );
        let config = write_config(&dir, &body);
        let out = dir.join("out");
        let err = run(run_args(&config, &out)).unwrap_err();
        assert!(matches!(err, EngineError::Config(_)));
    }
}
