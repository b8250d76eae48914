//! Coefficient triples (b, h, g) for mean-field equations, the law views
//! they consume, their regularity data, and a test-function metric between
//! empirical laws.
//!
//! A coefficient maps (time, state, law-of-the-candidate, scenario context)
//! to drift, covariation-loading, and noise-loading values. The law
//! argument is a frozen snapshot of the current iterate at the current
//! node: means and norms are cached once per node sweep and shared by all
//! (scenario, path) evaluations.

use ndarray::{Array3, Array4, Array5};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::calculus::{lower_expectation, lp_norm, upper_expectation, DEFAULT_EPS_TOL};
use crate::error::{EngineError, Result};
use crate::sampler::{ProcessEnsemble, RandomVariable};
use crate::uncertainty::TimeGrid;

/// Minimum tail growth of `int_d^1 dr / (rho1 + rho2)` (between d = 1e-12
/// and d = 1e-300) accepted as numerical evidence of divergence.
pub const DIVERGENCE_GROWTH_THRESHOLD: f64 = 1.0;

/// Frozen view of a candidate law at one time node: the samples plus the
/// cached statistics every coefficient evaluation shares.
#[derive(Debug, Clone)]
pub struct LawView {
    samples: RandomVariable,
    mean_upper: Vec<f64>,
    mean_lower: Vec<f64>,
    l1_norm: f64,
    l2_norm: f64,
}

impl LawView {
    pub fn new(samples: RandomVariable) -> Result<Self> {
        let d = samples.components();
        let mut mean_upper = Vec::with_capacity(d);
        let mut mean_lower = Vec::with_capacity(d);
        for j in 0..d {
            let comp = component(&samples, j)?;
            mean_upper.push(upper_expectation(&comp)?.value);
            mean_lower.push(lower_expectation(&comp)?.value);
        }
        let l1_norm = lp_norm(&samples, 1.0)?;
        let l2_norm = lp_norm(&samples, 2.0)?;
        Ok(LawView { samples, mean_upper, mean_lower, l1_norm, l2_norm })
    }

    pub fn samples(&self) -> &RandomVariable {
        &self.samples
    }

    pub fn components(&self) -> usize {
        self.samples.components()
    }

    /// Upper expectation of the j-th component.
    pub fn mean_upper(&self, j: usize) -> f64 {
        self.mean_upper[j]
    }

    /// Lower expectation (`-E[-.]`) of the j-th component.
    pub fn mean_lower(&self, j: usize) -> f64 {
        self.mean_lower[j]
    }

    pub fn l1_norm(&self) -> f64 {
        self.l1_norm
    }

    pub fn l2_norm(&self) -> f64 {
        self.l2_norm
    }

    /// Upper expectation of `phi` applied samplewise: the functional
    /// `F_xi(phi)` the distribution-lifting machinery consumes.
    pub fn apply(&self, phi: impl Fn(&[f64]) -> f64) -> Result<f64> {
        let mapped = apply_rows(&self.samples, phi)?;
        Ok(upper_expectation(&mapped)?.value)
    }
}

/// The law exposed as a distribution functional only (no raw samples):
/// what a distribution-dependent coefficient sees after lifting.
#[derive(Debug, Clone, Copy)]
pub struct DistributionView<'a> {
    law: &'a LawView,
}

impl<'a> DistributionView<'a> {
    pub fn new(law: &'a LawView) -> Self {
        DistributionView { law }
    }

    /// `F_xi(phi)`: upper expectation of a test function of the sample.
    pub fn apply(&self, phi: impl Fn(&[f64]) -> f64) -> Result<f64> {
        self.law.apply(phi)
    }

    pub fn components(&self) -> usize {
        self.law.components()
    }
}

/// Everything a coefficient evaluation may consult.
pub struct CoeffArgs<'a> {
    pub time: f64,
    pub node: usize,
    pub state: &'a [f64],
    pub law: &'a LawView,
    pub scenario: usize,
    pub path: usize,
}

pub type CoeffFn = Box<dyn Fn(&CoeffArgs, &mut [f64]) + Send + Sync>;

/// Deterministic function of time, either constant or tabulated per node.
#[derive(Debug, Clone)]
pub enum TimeFunction {
    Constant(f64),
    Table(Vec<f64>),
}

impl TimeFunction {
    pub fn at_node(&self, node: usize) -> Result<f64> {
        match self {
            TimeFunction::Constant(c) => Ok(*c),
            TimeFunction::Table(v) => v.get(node).copied().ok_or_else(|| {
                EngineError::Contract(format!(
                    "time table has {} entries, node {node} requested",
                    v.len()
                ))
            }),
        }
    }

    fn min_value(&self) -> f64 {
        match self {
            TimeFunction::Constant(c) => *c,
            TimeFunction::Table(v) => v.iter().fold(f64::INFINITY, |a, &b| a.min(b)),
        }
    }
}

/// The mean-field continuity weight K, constant or a full process.
#[derive(Debug, Clone)]
pub enum KProcess {
    Constant(f64),
    Ensemble(ProcessEnsemble),
}

impl KProcess {
    /// Upper expectation of K at a node.
    pub fn expected_upper(&self, node: usize) -> Result<f64> {
        match self {
            KProcess::Constant(c) => Ok(*c),
            KProcess::Ensemble(p) => Ok(upper_expectation(&p.at_node(node)?)?.value),
        }
    }

    /// Sample value at one (scenario, path, node), for pointwise checks.
    pub fn value_at(&self, scenario: usize, path: usize, node: usize) -> f64 {
        match self {
            KProcess::Constant(c) => *c,
            KProcess::Ensemble(p) => {
                let s = scenario.min(p.scenarios() - 1);
                let q = path.min(p.paths() - 1);
                let k = node.min(p.nodes() - 1);
                p.values()[(s, q, k, 0)]
            }
        }
    }

    fn min_value(&self) -> f64 {
        match self {
            KProcess::Constant(c) => *c,
            KProcess::Ensemble(p) => p.values().iter().fold(f64::INFINITY, |a, &b| a.min(b)),
        }
    }
}

/// Continuity modulus: continuous, increasing, concave, zero at zero.
#[derive(Debug, Clone)]
pub enum OsgoodModulus {
    /// `c r`.
    Linear { c: f64 },
    /// `c r ln(1/r)` for r <= 1/e, continued by the constant `c/e` beyond
    /// (the tangent there is flat, so the glue stays concave and C1).
    LogOsgood { c: f64 },
    /// Piecewise-linear interpolation through `(rs, vals)`, constant
    /// beyond the last knot. Must start at (0, 0).
    Table { rs: Vec<f64>, vals: Vec<f64> },
}

impl OsgoodModulus {
    pub fn eval(&self, r: f64) -> f64 {
        let r = r.max(0.0);
        match self {
            OsgoodModulus::Linear { c } => c * r,
            OsgoodModulus::LogOsgood { c } => {
                let cap = 1.0 / std::f64::consts::E;
                if r == 0.0 {
                    0.0
                } else if r <= cap {
                    c * r * (1.0 / r).ln()
                } else {
                    c * cap
                }
            }
            OsgoodModulus::Table { rs, vals } => {
                if r <= rs[0] {
                    return vals[0];
                }
                if r >= *rs.last().unwrap() {
                    return *vals.last().unwrap();
                }
                let i = rs.partition_point(|&x| x <= r) - 1;
                let w = (r - rs[i]) / (rs[i + 1] - rs[i]);
                vals[i] + w * (vals[i + 1] - vals[i])
            }
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            OsgoodModulus::Linear { c } | OsgoodModulus::LogOsgood { c } => {
                if !(*c > 0.0) || !c.is_finite() {
                    return Err(EngineError::Contract(
                        "modulus coefficient must be positive and finite".into(),
                    ));
                }
            }
            OsgoodModulus::Table { rs, vals } => {
                if rs.len() < 2 || rs.len() != vals.len() {
                    return Err(EngineError::Contract(
                        "modulus table needs matching rs/vals with at least two knots".into(),
                    ));
                }
                if rs[0] != 0.0 || vals[0] != 0.0 {
                    return Err(EngineError::Contract(
                        "modulus table must start at (0, 0)".into(),
                    ));
                }
                if rs.windows(2).any(|w| w[1] <= w[0]) {
                    return Err(EngineError::Contract(
                        "modulus table knots must be strictly increasing".into(),
                    ));
                }
                if rs.iter().chain(vals.iter()).any(|v| !v.is_finite()) {
                    return Err(EngineError::Contract("modulus table must be finite".into()));
                }
            }
        }
        // Numerical shape checks on a uniform probe grid: nondecreasing
        // values and nonpositive second differences (concavity), plus a
        // log-spaced sweep to pin the value at zero.
        if self.eval(0.0) != 0.0 {
            return Err(EngineError::Contract("modulus must vanish at zero".into()));
        }
        let probes = 401;
        let h = 1.0 / (probes - 1) as f64;
        let vals: Vec<f64> = (0..probes).map(|i| self.eval(i as f64 * h)).collect();
        let scale = vals.iter().fold(1.0f64, |a, &b| a.max(b.abs()));
        for w in vals.windows(2) {
            if w[1] < w[0] - 1e-9 * scale {
                return Err(EngineError::Contract(
                    "modulus must be nondecreasing on [0, 1]".into(),
                ));
            }
        }
        for w in vals.windows(3) {
            if w[2] - 2.0 * w[1] + w[0] > 1e-9 * scale {
                return Err(EngineError::Contract("modulus must be concave on [0, 1]".into()));
            }
        }
        for i in 1..=14 {
            let r = 10f64.powi(-i);
            if self.eval(r) < -1e-15 {
                return Err(EngineError::Contract("modulus must be nonnegative".into()));
            }
        }
        Ok(())
    }
}

/// Regularity data attached to a coefficient set: the continuity weights
/// and moduli of the engine's standing assumption, plus the numerically
/// checked divergence evidence for `int_0 dr / (rho1 + rho2)`.
#[derive(Debug, Clone)]
pub struct OsgoodData {
    kappa: TimeFunction,
    k_process: KProcess,
    rho1: OsgoodModulus,
    rho2: OsgoodModulus,
    divergence_growth: f64,
    divergence_conclusive: bool,
}

impl OsgoodData {
    pub fn new(
        kappa: TimeFunction,
        k_process: KProcess,
        rho1: OsgoodModulus,
        rho2: OsgoodModulus,
    ) -> Result<Self> {
        if kappa.min_value() < 0.0 {
            return Err(EngineError::Contract("kappa must be nonnegative".into()));
        }
        if k_process.min_value() < 0.0 {
            return Err(EngineError::Contract("K must be nonnegative".into()));
        }
        rho1.validate()?;
        rho2.validate()?;
        let divergence_growth = divergence_tail_growth(&rho1, &rho2);
        Ok(OsgoodData {
            kappa,
            k_process,
            rho1,
            rho2,
            divergence_growth,
            divergence_conclusive: divergence_growth >= DIVERGENCE_GROWTH_THRESHOLD,
        })
    }

    pub fn kappa(&self) -> &TimeFunction {
        &self.kappa
    }

    pub fn k_process(&self) -> &KProcess {
        &self.k_process
    }

    pub fn rho1(&self) -> &OsgoodModulus {
        &self.rho1
    }

    pub fn rho2(&self) -> &OsgoodModulus {
        &self.rho2
    }

    /// Tail growth of the reciprocal-modulus integral between the probe
    /// cutoffs; large growth is evidence the integral diverges at zero.
    pub fn divergence_growth(&self) -> f64 {
        self.divergence_growth
    }

    /// False means the numeric divergence evidence was inconclusive; the
    /// solver proceeds but surfaces a warning.
    pub fn divergence_conclusive(&self) -> bool {
        self.divergence_conclusive
    }
}

/// `int_{1e-300}^{1e-12} dr / (rho1(r) + rho2(r))` by trapezoid rule after
/// substituting r = e^u. Divergent integrals keep growing as the lower
/// cutoff shrinks; convergent ones have already exhausted their mass.
fn divergence_tail_growth(rho1: &OsgoodModulus, rho2: &OsgoodModulus) -> f64 {
    let u_lo = (1e-300f64).ln();
    let u_hi = (1e-12f64).ln();
    let n = 65_536;
    let du = (u_hi - u_lo) / n as f64;
    let integrand = |u: f64| {
        let r = u.exp();
        let denom = (rho1.eval(r) + rho2.eval(r)).max(1e-320);
        r / denom
    };
    let mut total = 0.5 * (integrand(u_lo) + integrand(u_hi));
    for i in 1..n {
        total += integrand(u_lo + i as f64 * du);
    }
    total * du
}

/// Drift, covariation-loading, and noise-loading maps with their
/// regularity data. Output layouts are row-major: h is indexed
/// `[component][noise_i][noise_j]`, g is `[component][noise_i]`.
pub struct CoefficientSet {
    name: String,
    d: usize,
    n: usize,
    b: CoeffFn,
    h: CoeffFn,
    g: CoeffFn,
    osgood: OsgoodData,
}

impl std::fmt::Debug for CoefficientSet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CoefficientSet")
            .field("name", &self.name)
            .field("d", &self.d)
            .field("n", &self.n)
            .finish()
    }
}

impl CoefficientSet {
    pub fn new(
        name: impl Into<String>,
        d: usize,
        n: usize,
        b: CoeffFn,
        h: CoeffFn,
        g: CoeffFn,
        osgood: OsgoodData,
    ) -> Result<Self> {
        if d == 0 || n == 0 {
            return Err(EngineError::Contract(
                "state and noise dimensions must be positive".into(),
            ));
        }
        Ok(CoefficientSet { name: name.into(), d, n, b, h, g, osgood })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn state_dim(&self) -> usize {
        self.d
    }

    pub fn noise_dim(&self) -> usize {
        self.n
    }

    pub fn osgood(&self) -> &OsgoodData {
        &self.osgood
    }

    /// Writes the drift (length d) for one evaluation point.
    pub fn eval_b(&self, args: &CoeffArgs, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.d);
        (self.b)(args, out);
    }

    /// Writes the covariation loading (length d n n).
    pub fn eval_h(&self, args: &CoeffArgs, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.d * self.n * self.n);
        (self.h)(args, out);
    }

    /// Writes the noise loading (length d n).
    pub fn eval_g(&self, args: &CoeffArgs, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.d * self.n);
        (self.g)(args, out);
    }
}

/// Full sweep of one coefficient set over an (S, P, d) state slice with a
/// shared law view. Returns (b, h, g) blocks shaped (S,P,d), (S,P,d,n,n),
/// (S,P,d,n). Non-finite outputs are hard errors naming the coefficient.
pub fn evaluate(
    set: &CoefficientSet,
    time: f64,
    node: usize,
    state: &RandomVariable,
    law: &LawView,
) -> Result<(Array3<f64>, Array5<f64>, Array4<f64>)> {
    let (d, n) = (set.state_dim(), set.noise_dim());
    if state.components() != d {
        return Err(EngineError::Contract(format!(
            "state has {} components, coefficient set expects {d}",
            state.components()
        )));
    }
    let (s_count, p_count) = (state.scenarios(), state.paths());
    let mut b_out = Array3::zeros((s_count, p_count, d));
    let mut h_out = Array5::zeros((s_count, p_count, d, n, n));
    let mut g_out = Array4::zeros((s_count, p_count, d, n));
    let mut x = vec![0.0; d];
    let mut b_buf = vec![0.0; d];
    let mut h_buf = vec![0.0; d * n * n];
    let mut g_buf = vec![0.0; d * n];
    for s in 0..s_count {
        for p in 0..p_count {
            for j in 0..d {
                x[j] = state.values()[(s, p, j)];
            }
            let args = CoeffArgs { time, node, state: &x, law, scenario: s, path: p };
            set.eval_b(&args, &mut b_buf);
            set.eval_h(&args, &mut h_buf);
            set.eval_g(&args, &mut g_buf);
            for (what, buf) in [("drift", &b_buf), ("covariation loading", &h_buf),
                ("noise loading", &g_buf)]
            {
                if buf.iter().any(|v| !v.is_finite()) {
                    return Err(EngineError::NonFinite {
                        context: format!("{} {what} at node {node}", set.name()),
                    });
                }
            }
            for j in 0..d {
                b_out[(s, p, j)] = b_buf[j];
                for i in 0..n {
                    for l in 0..n {
                        h_out[(s, p, j, i, l)] = h_buf[j * n * n + i * n + l];
                    }
                    g_out[(s, p, j, i)] = g_buf[j * n + i];
                }
            }
        }
    }
    Ok((b_out, h_out, g_out))
}

/// Worst-case ratios from random sampling of the two standing regularity
/// inequalities. Ratios above 1 + eps flag the set as out-of-assumption;
/// callers treat that as a warning, not an error.
#[derive(Debug, Clone, Serialize)]
pub struct RegularityReport {
    pub samples: usize,
    pub worst_continuity_ratio: f64,
    pub worst_growth_ratio: f64,
    pub within_assumption: bool,
    pub divergence_growth: f64,
    pub divergence_conclusive: bool,
}

/// Samples (time, x, y, xi, eta) tuples, mixing wide and tiny scales so
/// violations hiding near the origin (the non-Lipschitz regime) surface,
/// and reports the worst observed ratio of each inequality.
pub fn verify_osgood(
    set: &CoefficientSet,
    grid: &TimeGrid,
    sample_count: usize,
    seed: u64,
) -> Result<RegularityReport> {
    let (d, n) = (set.state_dim(), set.noise_dim());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let law_paths = 32;
    let mut worst_continuity: f64 = 0.0;
    let mut worst_growth: f64 = 0.0;
    let mut b1 = vec![0.0; d];
    let mut b2 = vec![0.0; d];
    let mut h1 = vec![0.0; d * n * n];
    let mut h2 = vec![0.0; d * n * n];
    let mut g1 = vec![0.0; d * n];
    let mut g2 = vec![0.0; d * n];
    for _ in 0..sample_count {
        let node = rng.gen_range(0..grid.steps());
        let time = grid.node(node);
        let x = draw_state(&mut rng, d);
        let y = if rng.gen_bool(0.5) {
            // Collision pair: y near x at a random tiny scale.
            let eps = 10f64.powf(-rng.gen_range(0.0..12.0));
            x.iter()
                .map(|&v| {
                    let g: f64 = StandardNormal.sample(&mut rng);
                    v + eps * g
                })
                .collect()
        } else {
            draw_state(&mut rng, d)
        };
        let xi = draw_law(&mut rng, law_paths, d)?;
        let eta = if rng.gen_bool(0.5) {
            let eps = 10f64.powf(-rng.gen_range(0.0..10.0));
            perturb_law(&mut rng, &xi, eps)?
        } else {
            draw_law(&mut rng, law_paths, d)?
        };
        let law_xi = LawView::new(xi.clone())?;
        let law_eta = LawView::new(eta.clone())?;
        let diff_l2 = lp_norm(&xi.zip_with(&eta, |a, b| a - b)?, 2.0)?;
        let state_dist_sq: f64 = x.iter().zip(&y).map(|(a, b)| (a - b) * (a - b)).sum();

        let kappa = set.osgood().kappa().at_node(node)?;
        let k_val = set.osgood().k_process().value_at(0, 0, node);
        let continuity_rhs = kappa * set.osgood().rho1().eval(state_dist_sq)
            + k_val * set.osgood().rho2().eval(diff_l2 * diff_l2);

        let args1 = CoeffArgs { time, node, state: &x, law: &law_xi, scenario: 0, path: 0 };
        let args2 = CoeffArgs { time, node, state: &y, law: &law_eta, scenario: 0, path: 0 };
        set.eval_b(&args1, &mut b1);
        set.eval_b(&args2, &mut b2);
        set.eval_h(&args1, &mut h1);
        set.eval_h(&args2, &mut h2);
        set.eval_g(&args1, &mut g1);
        set.eval_g(&args2, &mut g2);

        let x_norm_sq: f64 = x.iter().map(|v| v * v).sum();
        let growth_rhs = kappa * x_norm_sq + k_val * (1.0 + law_xi.l2_norm() * law_xi.l2_norm());
        for (a, b) in [(&b1, &b2), (&h1, &h2), (&g1, &g2)] {
            let dist_sq: f64 = a.iter().zip(b.iter()).map(|(u, v)| (u - v) * (u - v)).sum();
            worst_continuity = worst_continuity.max(ratio(dist_sq, continuity_rhs));
            let norm_sq: f64 = a.iter().map(|v| v * v).sum();
            worst_growth = worst_growth.max(ratio(norm_sq, growth_rhs));
        }
    }
    Ok(RegularityReport {
        samples: sample_count,
        worst_continuity_ratio: worst_continuity,
        worst_growth_ratio: worst_growth,
        within_assumption: worst_continuity <= 1.0 + DEFAULT_EPS_TOL
            && worst_growth <= 1.0 + DEFAULT_EPS_TOL,
        divergence_growth: set.osgood().divergence_growth(),
        divergence_conclusive: set.osgood().divergence_conclusive(),
    })
}

fn ratio(num: f64, denom: f64) -> f64 {
    if num <= 1e-24 {
        0.0
    } else if denom <= 0.0 {
        f64::INFINITY
    } else {
        num / denom
    }
}

fn draw_state(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    // Half wide Gaussian, half signed tiny magnitudes: the interesting
    // regularity failures live near the origin.
    if rng.gen_bool(0.5) {
        (0..d)
            .map(|_| {
                let g: f64 = StandardNormal.sample(rng);
                2.0 * g
            })
            .collect()
    } else {
        (0..d)
            .map(|_| {
                let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                sign * 10f64.powf(-rng.gen_range(0.0..12.0))
            })
            .collect()
    }
}

fn draw_law(rng: &mut ChaCha8Rng, paths: usize, d: usize) -> Result<RandomVariable> {
    let shift: f64 = StandardNormal.sample(rng);
    let scale: f64 = rng.gen_range(0.1..2.0);
    RandomVariable::new(Array3::from_shape_fn((1, paths, d), |_| {
        let g: f64 = StandardNormal.sample(rng);
        shift + scale * g
    }))
}

fn perturb_law(rng: &mut ChaCha8Rng, xi: &RandomVariable, eps: f64) -> Result<RandomVariable> {
    let v = xi.values();
    let out = Array3::from_shape_fn(v.dim(), |idx| {
        let g: f64 = StandardNormal.sample(rng);
        v[idx] + eps * g
    });
    RandomVariable::new(out)
}

/// Lifts a distribution-level map `f~(time, state, F)` into a coefficient:
/// the returned closure evaluates `f~` against the law's functional view
/// and is deterministic in the scenario context.
pub fn lift_distribution_coefficient(
    f_tilde: impl Fn(f64, &[f64], &DistributionView, &mut [f64]) + Send + Sync + 'static,
) -> CoeffFn {
    Box::new(move |args: &CoeffArgs, out: &mut [f64]| {
        let view = DistributionView::new(args.law);
        f_tilde(args.time, args.state, &view, out);
    })
}

/// A scalar test function with its declared Lipschitz constant.
pub struct TestFunction {
    pub lipschitz: f64,
    pub f: Box<dyn Fn(&[f64]) -> f64 + Send + Sync>,
}

/// Deterministic family of 1-Lipschitz test functions: the coordinate
/// ridges (and their negatives) first, then seeded soft-plus ridges and
/// hinges with unit-norm directions.
pub fn lipschitz_test_family(d: usize, family_size: usize, seed: u64) -> Vec<TestFunction> {
    let mut family: Vec<TestFunction> = Vec::new();
    for j in 0..d {
        family.push(TestFunction {
            lipschitz: 1.0,
            f: Box::new(move |z: &[f64]| z[j]),
        });
        family.push(TestFunction {
            lipschitz: 1.0,
            f: Box::new(move |z: &[f64]| -z[j]),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    while family.len() < family_size.max(2 * d) {
        let mut w: Vec<f64> = (0..d)
            .map(|_| {
                let g: f64 = StandardNormal.sample(&mut rng);
                g
            })
            .collect();
        let norm: f64 = w.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < 1e-12 {
            w = vec![0.0; d];
            w[0] = 1.0;
        } else {
            for v in w.iter_mut() {
                *v /= norm;
            }
        }
        let c: f64 = StandardNormal.sample(&mut rng);
        if rng.gen_bool(0.5) {
            let beta: f64 = rng.gen_range(0.1..1.0);
            family.push(TestFunction {
                lipschitz: 1.0,
                f: Box::new(move |z: &[f64]| {
                    let t: f64 = w.iter().zip(z).map(|(wi, zi)| wi * zi).sum::<f64>() - c;
                    // Soft-plus with overflow-safe form; slope in (0, 1).
                    if t / beta > 30.0 {
                        t
                    } else {
                        beta * (1.0 + (t / beta).exp()).ln()
                    }
                }),
            });
        } else {
            family.push(TestFunction {
                lipschitz: 1.0,
                f: Box::new(move |z: &[f64]| {
                    (w.iter().zip(z).map(|(wi, zi)| wi * zi).sum::<f64>() - c).abs()
                }),
            });
        }
    }
    family
}

/// Max over an explicit test family of `|F_xi(phi) - F_eta(phi)|`.
/// Rejects any member whose declared Lipschitz constant exceeds 1: the
/// metric this estimates is defined over the unit Lipschitz ball only.
pub fn d1_distance_with_family(
    xi: &RandomVariable,
    eta: &RandomVariable,
    family: &[TestFunction],
) -> Result<f64> {
    if xi.components() != eta.components() {
        return Err(EngineError::Contract(
            "ensembles must share the component count".into(),
        ));
    }
    if family.is_empty() {
        return Err(EngineError::Contract("test family must be non-empty".into()));
    }
    let mut best = 0.0f64;
    for tf in family {
        if tf.lipschitz > 1.0 + 1e-12 {
            return Err(EngineError::Contract(format!(
                "test function declares Lipschitz constant {} > 1",
                tf.lipschitz
            )));
        }
        let fx = upper_expectation(&apply_rows(xi, &tf.f)?)?.value;
        let fy = upper_expectation(&apply_rows(eta, &tf.f)?)?.value;
        best = best.max((fx - fy).abs());
    }
    Ok(best)
}

/// Lower-bound estimate of the unit-Lipschitz distribution distance,
/// using the generated family keyed by (components, family_size, seed).
/// Sharing the family across calls keeps symmetry and the triangle
/// inequality exact at the estimator level.
pub fn d1_distance(
    xi: &RandomVariable,
    eta: &RandomVariable,
    family_size: usize,
    seed: u64,
) -> Result<f64> {
    let family = lipschitz_test_family(xi.components(), family_size, seed);
    d1_distance_with_family(xi, eta, &family)
}

/// Linear mean-field family:
/// `b_k = a x_k + m mean_upper_k`, `h_kij = c x_k [i==j]`,
/// `g_ki = s x_k [i == k mod n]`.
pub struct LinearMeanfieldParams {
    pub drift_state: f64,
    pub drift_mean: f64,
    pub covariation_state: f64,
    pub diffusion_state: f64,
}

pub fn linear_meanfield(d: usize, n: usize, params: LinearMeanfieldParams) -> Result<CoefficientSet> {
    let LinearMeanfieldParams { drift_state, drift_mean, covariation_state, diffusion_state } =
        params;
    for v in [drift_state, drift_mean, covariation_state, diffusion_state] {
        if !v.is_finite() {
            return Err(EngineError::Contract("family parameters must be finite".into()));
        }
    }
    let b: CoeffFn = Box::new(move |args, out| {
        for k in 0..out.len() {
            out[k] = drift_state * args.state[k] + drift_mean * args.law.mean_upper(k);
        }
    });
    let h: CoeffFn = Box::new(move |args, out| {
        let dn = args.state.len();
        let nn = out.len() / dn;
        let n_loc = (nn as f64).sqrt() as usize;
        for k in 0..dn {
            for i in 0..n_loc {
                for j in 0..n_loc {
                    out[k * nn + i * n_loc + j] =
                        if i == j { covariation_state * args.state[k] } else { 0.0 };
                }
            }
        }
    });
    let g: CoeffFn = Box::new(move |args, out| {
        let dn = args.state.len();
        let n_loc = out.len() / dn;
        for k in 0..dn {
            for i in 0..n_loc {
                out[k * n_loc + i] =
                    if i == k % n_loc { diffusion_state * args.state[k] } else { 0.0 };
            }
        }
    });
    let kappa = 2.0
        * (drift_state * drift_state
            + covariation_state * covariation_state * n as f64
            + diffusion_state * diffusion_state);
    let k_const = 2.0 * drift_mean * drift_mean * d as f64;
    let osgood = OsgoodData::new(
        TimeFunction::Constant(kappa),
        KProcess::Constant(k_const),
        OsgoodModulus::Linear { c: 1.0 },
        OsgoodModulus::Linear { c: 1.0 },
    )?;
    CoefficientSet::new("linear-meanfield", d, n, b, h, g, osgood)
}

/// Geometric family: `b_k = mu x_k`, `g_ki = sigma x_k [i == k mod n]`,
/// h = 0.
pub fn geometric(d: usize, n: usize, mu: f64, sigma: f64) -> Result<CoefficientSet> {
    linear_meanfield(
        d,
        n,
        LinearMeanfieldParams {
            drift_state: mu,
            drift_mean: 0.0,
            covariation_state: 0.0,
            diffusion_state: sigma,
        },
    )
    .and_then(|set| {
        CoefficientSet::new("geometric", d, n, set.b, set.h, set.g, set.osgood)
    })
}

/// All-zero coefficients.
pub fn zero(d: usize, n: usize) -> Result<CoefficientSet> {
    let b: CoeffFn = Box::new(|_, out| out.fill(0.0));
    let h: CoeffFn = Box::new(|_, out| out.fill(0.0));
    let g: CoeffFn = Box::new(|_, out| out.fill(0.0));
    let osgood = OsgoodData::new(
        TimeFunction::Constant(0.0),
        KProcess::Constant(0.0),
        OsgoodModulus::Linear { c: 1.0 },
        OsgoodModulus::Linear { c: 1.0 },
    )?;
    CoefficientSet::new("zero", d, n, b, h, g, osgood)
}

/// Non-Lipschitz drift: componentwise `b_k = c x sqrt(ln(1/|x|))` near the
/// origin (continued by the constant `c/e` beyond |x| = 1/e, matching the
/// modulus cap), plus an optional linear mean pull. Continuous, and
/// exactly of log-Osgood continuity type: not Lipschitz at zero, yet
/// inside the divergent-modulus assumption.
pub fn osgood_log(d: usize, n: usize, c: f64, mean_scale: f64) -> Result<CoefficientSet> {
    if !(c > 0.0) || !c.is_finite() || !mean_scale.is_finite() {
        return Err(EngineError::Contract(
            "osgood-log needs finite parameters with c > 0".into(),
        ));
    }
    let b: CoeffFn = Box::new(move |args, out| {
        for k in 0..out.len() {
            out[k] = c * log_drift(args.state[k]) + mean_scale * args.law.mean_upper(k);
        }
    });
    let h: CoeffFn = Box::new(|_, out| out.fill(0.0));
    let g: CoeffFn = Box::new(|_, out| out.fill(0.0));
    // Continuity: the worst ratio of |log_drift(x)-log_drift(y)|^2 against
    // rho_log(|x-y|^2) is 4/e (attained at wide separations where both
    // sides saturate); the d-dim componentwise sum costs a factor d and
    // the mean term a factor 2, so 2 c^2 d keeps the ratio below 3/4.
    let kappa = 2.0 * c * c * d as f64;
    let k_const = 2.0 * mean_scale * mean_scale * d as f64 + 0.3 * c * c * d as f64;
    let osgood = OsgoodData::new(
        TimeFunction::Constant(kappa),
        KProcess::Constant(k_const),
        OsgoodModulus::LogOsgood { c: 1.0 },
        OsgoodModulus::Linear { c: 1.0 },
    )?;
    CoefficientSet::new("osgood-log", d, n, b, h, g, osgood)
}

/// `x sqrt(ln(1/|x|))` for |x| <= 1/e, the constant `1/e` beyond (with the
/// sign of x); continuous and odd, with unbounded slope at the origin.
fn log_drift(x: f64) -> f64 {
    let ax = x.abs();
    if ax == 0.0 {
        0.0
    } else if ax <= 1.0 / std::f64::consts::E {
        x * (1.0 / ax).ln().sqrt()
    } else {
        (1.0 / std::f64::consts::E).copysign(x)
    }
}

/// Distribution-lifted family with a Lipschitz base map:
/// `b_k = c (sin x_k + F(cos y_k))`, evaluated through the distribution
/// functional; h = g = 0.
pub fn sun_lifted(d: usize, n: usize, c: f64) -> Result<CoefficientSet> {
    if !c.is_finite() || c == 0.0 {
        return Err(EngineError::Contract("sun-lifted needs a finite nonzero scale".into()));
    }
    let b = lift_distribution_coefficient(move |_time, state, view, out| {
        for (k, slot) in out.iter_mut().enumerate() {
            let cos_mean = view.apply(|z: &[f64]| z[k].cos()).unwrap_or(f64::NAN);
            *slot = c * (state[k].sin() + cos_mean);
        }
    });
    let h: CoeffFn = Box::new(|_, out| out.fill(0.0));
    let g: CoeffFn = Box::new(|_, out| out.fill(0.0));
    // |sin| and |cos| are 1-Lipschitz, so both difference terms square to
    // at most 2 c^2 times the respective squared distances; growth is
    // bounded outright by 4 c^2 d.
    let osgood = OsgoodData::new(
        TimeFunction::Constant(1.0),
        KProcess::Constant((4.0 * c * c * d as f64).max(1.0)),
        OsgoodModulus::Linear { c: 2.0 * c * c * d as f64 },
        OsgoodModulus::Linear { c: 2.0 * c * c * d as f64 },
    )?;
    CoefficientSet::new("sun-lifted", d, n, b, h, g, osgood)
}

/// Componentwise tabulated drift: piecewise-linear through (xs, ys) with
/// constant continuation outside the knot range; h = g = 0.
pub fn custom_table(d: usize, n: usize, xs: Vec<f64>, ys: Vec<f64>) -> Result<CoefficientSet> {
    if xs.len() < 2 || xs.len() != ys.len() {
        return Err(EngineError::Contract(
            "custom table needs matching xs/ys with at least two knots".into(),
        ));
    }
    if xs.windows(2).any(|w| w[1] <= w[0]) {
        return Err(EngineError::Contract("custom table knots must increase".into()));
    }
    if xs.iter().chain(ys.iter()).any(|v| !v.is_finite()) {
        return Err(EngineError::Contract("custom table must be finite".into()));
    }
    let max_slope = xs
        .windows(2)
        .zip(ys.windows(2))
        .map(|(xw, yw)| ((yw[1] - yw[0]) / (xw[1] - xw[0])).abs())
        .fold(0.0f64, f64::max);
    let max_abs = ys.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    let (xs_b, ys_b) = (xs.clone(), ys.clone());
    let b: CoeffFn = Box::new(move |args, out| {
        for k in 0..out.len() {
            out[k] = interp(&xs_b, &ys_b, args.state[k]);
        }
    });
    let h: CoeffFn = Box::new(|_, out| out.fill(0.0));
    let g: CoeffFn = Box::new(|_, out| out.fill(0.0));
    let osgood = OsgoodData::new(
        TimeFunction::Constant(max_slope * max_slope),
        KProcess::Constant((max_abs * max_abs * d as f64).max(1e-12)),
        OsgoodModulus::Linear { c: 1.0 },
        OsgoodModulus::Linear { c: 1.0 },
    )?;
    CoefficientSet::new("custom-table", d, n, b, h, g, osgood)
}

fn interp(xs: &[f64], ys: &[f64], x: f64) -> f64 {
    if x <= xs[0] {
        return ys[0];
    }
    if x >= *xs.last().unwrap() {
        return *ys.last().unwrap();
    }
    let i = xs.partition_point(|&v| v <= x) - 1;
    let w = (x - xs[i]) / (xs[i + 1] - xs[i]);
    ys[i] + w * (ys[i + 1] - ys[i])
}

fn component(x: &RandomVariable, j: usize) -> Result<RandomVariable> {
    RandomVariable::new(x.values().slice(ndarray::s![.., .., j..j + 1]).to_owned())
}

fn apply_rows(x: &RandomVariable, phi: impl Fn(&[f64]) -> f64) -> Result<RandomVariable> {
    let (s_count, p_count, d) = x.values().dim();
    let mut buf = vec![0.0; d];
    let mut out = Array3::zeros((s_count, p_count, 1));
    for s in 0..s_count {
        for p in 0..p_count {
            for j in 0..d {
                buf[j] = x.values()[(s, p, j)];
            }
            out[(s, p, 0)] = phi(&buf);
        }
    }
    RandomVariable::new(out)
}
