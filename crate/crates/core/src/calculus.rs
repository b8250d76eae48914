//! Sublinear expectation estimator, the norms built on it, discrete
//! stochastic integrals against simulated bundles, and moment-bound checks.
//!
//! The upper expectation of the engine is `max` over lattice scenarios of
//! the path-mean under that scenario's measure. With finitely many
//! scenarios this is a downward-biased estimate of the ideal supremum over
//! the full control family; all tolerance policy downstream accounts for
//! Monte-Carlo error on top of that bias. Path means are accumulated
//! serially in path order so results are bit-stable across thread counts.

use ndarray::Array3;
use serde::Serialize;

use crate::error::{EngineError, Result};
use crate::sampler::{GBMBundle, ProcessEnsemble, RandomVariable};
use crate::uncertainty::TimeGrid;

/// Constant in the second-moment maximal inequality for stochastic
/// integrals (Doob's L^2 bound).
pub const BDG_C2: f64 = 4.0;

/// Default multiplicative slack accepted when checking moment bounds that
/// hold exactly in the limit but are evaluated on Monte-Carlo estimates.
pub const DEFAULT_EPS_TOL: f64 = 0.02;

/// Maximal-inequality constants, tabulated for the exponents the engine
/// supports. Only p = 2 is in the table.
pub fn bdg_constant(p: f64) -> Option<f64> {
    (p == 2.0).then_some(BDG_C2)
}

/// Result of the upper-expectation estimator.
#[derive(Debug, Clone, Serialize)]
pub struct SublinearValue {
    /// max over scenarios of the per-scenario path means.
    pub value: f64,
    /// Path mean under each scenario, in scenario order.
    pub per_scenario: Vec<f64>,
    /// Scenario attaining `value` (first index on ties).
    pub argmax_scenario: usize,
}

/// Two-sided envelope: the upper value and its reflected lower companion
/// `-E[-X]`, which for path means is the min over scenarios.
#[derive(Debug, Clone, Serialize)]
pub struct ExpectationInterval {
    pub upper: f64,
    pub lower: f64,
}

fn scalar_means(x: &RandomVariable) -> Result<Vec<f64>> {
    if x.components() != 1 {
        return Err(EngineError::Contract(format!(
            "expectation needs scalar samples, got {} components",
            x.components()
        )));
    }
    let v = x.values();
    let paths = x.paths() as f64;
    Ok((0..x.scenarios())
        .map(|s| (0..x.paths()).map(|p| v[(s, p, 0)]).sum::<f64>() / paths)
        .collect())
}

/// `max` over scenarios of the path-mean of a scalar ensemble.
pub fn upper_expectation(x: &RandomVariable) -> Result<SublinearValue> {
    let per_scenario = scalar_means(x)?;
    let (argmax_scenario, value) = per_scenario
        .iter()
        .enumerate()
        .fold((0usize, f64::NEG_INFINITY), |(ai, av), (i, &v)| {
            if v > av {
                (i, v)
            } else {
                (ai, av)
            }
        });
    Ok(SublinearValue { value, per_scenario, argmax_scenario })
}

/// `-E[-X]`: the min over scenarios of the path means.
pub fn lower_expectation(x: &RandomVariable) -> Result<SublinearValue> {
    let per_scenario = scalar_means(x)?;
    let (argmax_scenario, value) = per_scenario
        .iter()
        .enumerate()
        .fold((0usize, f64::INFINITY), |(ai, av), (i, &v)| {
            if v < av {
                (i, v)
            } else {
                (ai, av)
            }
        });
    Ok(SublinearValue { value, per_scenario, argmax_scenario })
}

/// Both envelope ends of a scalar ensemble in one pass pair.
pub fn expectation_interval(x: &RandomVariable) -> Result<ExpectationInterval> {
    Ok(ExpectationInterval {
        upper: upper_expectation(x)?.value,
        lower: lower_expectation(x)?.value,
    })
}

/// `upper_expectation(|X|^p)^(1/p)` with the Euclidean norm across
/// components inside the absolute value.
pub fn lp_norm(x: &RandomVariable, p: f64) -> Result<f64> {
    check_exponent(p)?;
    let pow = x.norm_sq()?.map(|v| v.powf(p / 2.0))?;
    Ok(upper_expectation(&pow)?.value.max(0.0).powf(1.0 / p))
}

/// Left-endpoint time integral of node-wise p-th moments, to the 1/p:
/// `(sum_k upper_expectation(|X_{u_k}|^p) dt)^(1/p)`. Left endpoints
/// because the engine's integrands are step processes.
pub fn mp_norm(x: &ProcessEnsemble, p: f64) -> Result<f64> {
    check_exponent(p)?;
    let dt = x.grid().dt();
    let mut total = 0.0;
    for k in 0..x.grid().steps() {
        let node = x.at_node(k)?.norm_sq()?.map(|v| v.powf(p / 2.0))?;
        total += upper_expectation(&node)?.value.max(0.0) * dt;
    }
    Ok(total.powf(1.0 / p))
}

/// `upper_expectation(sup_k |X_{u_k}|^2)^(1/2)` over all grid nodes.
pub fn h2_norm(x: &ProcessEnsemble) -> Result<f64> {
    let v = x.values();
    let (s_count, p_count, nodes, d) = v.dim();
    let mut sups = Array3::zeros((s_count, p_count, 1));
    for s in 0..s_count {
        for p in 0..p_count {
            let mut sup = 0.0f64;
            for k in 0..nodes {
                let mut nsq = 0.0;
                for j in 0..d {
                    nsq += v[(s, p, k, j)] * v[(s, p, k, j)];
                }
                sup = sup.max(nsq);
            }
            sups[(s, p, 0)] = sup;
        }
    }
    Ok(upper_expectation(&RandomVariable::new(sups)?)?
        .value
        .max(0.0)
        .sqrt())
}

/// `sum_k X_{u_k} (B^a_{u_{k+1}} - B^a_{u_k})` over window intervals,
/// per scenario/path. The integrand must be scalar and share the bundle's
/// shape and grid.
pub fn ito_integral(
    x: &ProcessEnsemble,
    bundle: &GBMBundle,
    a: &[f64],
    window: (f64, f64),
) -> Result<RandomVariable> {
    check_integrand(x, bundle)?;
    check_direction(a, bundle)?;
    let (k0, k1) = window_bounds(bundle.grid(), window)?;
    let bv = bundle.b().values();
    let xv = x.values();
    let n = bundle.dimension();
    let mut out = Array3::zeros((bundle.scenarios(), bundle.paths(), 1));
    for s in 0..bundle.scenarios() {
        for p in 0..bundle.paths() {
            let mut acc = 0.0;
            for k in k0..k1 {
                let mut db = 0.0;
                for (j, aj) in a.iter().enumerate().take(n) {
                    db += aj * (bv[(s, p, k + 1, j)] - bv[(s, p, k, j)]);
                }
                acc += xv[(s, p, k, 0)] * db;
            }
            out[(s, p, 0)] = acc;
        }
    }
    RandomVariable::new(out)
}

/// `sum_k X_{u_k} a'(QV_{u_{k+1}} - QV_{u_k})b` using the analytic
/// covariation tensor (identical across paths within a scenario).
pub fn qv_integral(
    x: &ProcessEnsemble,
    bundle: &GBMBundle,
    a: &[f64],
    b: &[f64],
    window: (f64, f64),
) -> Result<RandomVariable> {
    check_integrand(x, bundle)?;
    check_direction(a, bundle)?;
    check_direction(b, bundle)?;
    let (k0, k1) = window_bounds(bundle.grid(), window)?;
    let xv = x.values();
    let mut out = Array3::zeros((bundle.scenarios(), bundle.paths(), 1));
    for s in 0..bundle.scenarios() {
        let dqv: Vec<f64> = (k0..k1)
            .map(|k| bundle.qv_quadratic(s, k + 1, a, b) - bundle.qv_quadratic(s, k, a, b))
            .collect();
        for p in 0..bundle.paths() {
            let mut acc = 0.0;
            for (i, k) in (k0..k1).enumerate() {
                acc += xv[(s, p, k, 0)] * dqv[i];
            }
            out[(s, p, 0)] = acc;
        }
    }
    RandomVariable::new(out)
}

/// Left-endpoint Riemann sum of a (possibly vector-valued) process over the
/// window, per scenario/path.
pub fn lebesgue_integral(x: &ProcessEnsemble, window: (f64, f64)) -> Result<RandomVariable> {
    let (k0, k1) = window_bounds(x.grid(), window)?;
    let dt = x.grid().dt();
    let xv = x.values();
    let (s_count, p_count, _, d) = xv.dim();
    let mut out = Array3::zeros((s_count, p_count, d));
    for s in 0..s_count {
        for p in 0..p_count {
            for j in 0..d {
                let mut acc = 0.0;
                for k in k0..k1 {
                    acc += xv[(s, p, k, j)];
                }
                out[(s, p, j)] = acc * dt;
            }
        }
    }
    RandomVariable::new(out)
}

/// One checked moment bound: both sides, the directional volatility used
/// on the right side, and the verdict `lhs <= rhs (1 + eps_tol)`.
#[derive(Debug, Clone, Serialize)]
pub struct BoundReport {
    pub lhs: f64,
    pub rhs: f64,
    pub sigma_bar: f64,
    pub p: f64,
    pub pass: bool,
}

/// Covariation-integral moment bound over `[t, s]`:
/// `E[sup_v |int_t^v X dQV_ab|^p] <= sigma_ab^(2p) (s-t)^(p-1)
///  int_t^s E[|X_u|^p] du`.
pub fn check_q_bound(
    x: &ProcessEnsemble,
    bundle: &GBMBundle,
    p: f64,
    a: &[f64],
    b: &[f64],
    window: (f64, f64),
    eps_tol: f64,
) -> Result<BoundReport> {
    check_exponent(p)?;
    check_integrand(x, bundle)?;
    check_direction(a, bundle)?;
    check_direction(b, bundle)?;
    let (k0, k1) = window_bounds(bundle.grid(), window)?;
    let xv = x.values();
    let mut sups = Array3::zeros((bundle.scenarios(), bundle.paths(), 1));
    for s in 0..bundle.scenarios() {
        let dqv: Vec<f64> = (k0..k1)
            .map(|k| bundle.qv_quadratic(s, k + 1, a, b) - bundle.qv_quadratic(s, k, a, b))
            .collect();
        for path in 0..bundle.paths() {
            let mut acc = 0.0;
            let mut sup = 0.0f64;
            for (i, k) in (k0..k1).enumerate() {
                acc += xv[(s, path, k, 0)] * dqv[i];
                sup = sup.max(acc.abs());
            }
            sups[(s, path, 0)] = sup.powf(p);
        }
    }
    let lhs = upper_expectation(&RandomVariable::new(sups)?)?.value;
    let sigma_bar = bundle.lattice().sigma_bar(a, b)?;
    let span = window.1 - window.0;
    let rhs = sigma_bar.powf(2.0 * p) * span.powf(p - 1.0) * moment_time_integral(x, p, k0, k1)?;
    Ok(BoundReport { lhs, rhs, sigma_bar, p, pass: lhs <= rhs * (1.0 + eps_tol) })
}

/// Stochastic-integral moment bound over `[t, s]` for p >= 2:
/// `E[sup_v |int_t^v X dB^a|^p] <= C_p sigma_aa^p (s-t)^((p-2)/2)
///  int_t^s E[|X_u|^p] du`.
pub fn check_i_bound(
    x: &ProcessEnsemble,
    bundle: &GBMBundle,
    p: f64,
    a: &[f64],
    window: (f64, f64),
    eps_tol: f64,
) -> Result<BoundReport> {
    if p < 2.0 {
        return Err(EngineError::Contract(format!(
            "stochastic-integral bound needs p >= 2, got {p}"
        )));
    }
    let c_p = bdg_constant(p).ok_or_else(|| {
        EngineError::Contract(format!("no maximal-inequality constant tabulated for p = {p}"))
    })?;
    check_integrand(x, bundle)?;
    check_direction(a, bundle)?;
    let (k0, k1) = window_bounds(bundle.grid(), window)?;
    let bv = bundle.b().values();
    let xv = x.values();
    let n = bundle.dimension();
    let mut sups = Array3::zeros((bundle.scenarios(), bundle.paths(), 1));
    for s in 0..bundle.scenarios() {
        for path in 0..bundle.paths() {
            let mut acc = 0.0;
            let mut sup = 0.0f64;
            for k in k0..k1 {
                let mut db = 0.0;
                for (j, aj) in a.iter().enumerate().take(n) {
                    db += aj * (bv[(s, path, k + 1, j)] - bv[(s, path, k, j)]);
                }
                acc += xv[(s, path, k, 0)] * db;
                sup = sup.max(acc.abs());
            }
            sups[(s, path, 0)] = sup.powf(p);
        }
    }
    let lhs = upper_expectation(&RandomVariable::new(sups)?)?.value;
    let sigma_bar = bundle.lattice().sigma_bar(a, a)?;
    let span = window.1 - window.0;
    let rhs =
        c_p * sigma_bar.powf(p) * span.powf((p - 2.0) / 2.0) * moment_time_integral(x, p, k0, k1)?;
    Ok(BoundReport { lhs, rhs, sigma_bar, p, pass: lhs <= rhs * (1.0 + eps_tol) })
}

/// Left-endpoint sum of `upper_expectation(|X_{u_k}|^p) dt` over `[k0, k1)`.
fn moment_time_integral(x: &ProcessEnsemble, p: f64, k0: usize, k1: usize) -> Result<f64> {
    let dt = x.grid().dt();
    let mut total = 0.0;
    for k in k0..k1 {
        let node = x.at_node(k)?.norm_sq()?.map(|v| v.powf(p / 2.0))?;
        total += upper_expectation(&node)?.value.max(0.0) * dt;
    }
    Ok(total)
}

fn check_exponent(p: f64) -> Result<()> {
    if !(p >= 1.0) {
        return Err(EngineError::Contract(format!("exponent must satisfy p >= 1, got {p}")));
    }
    Ok(())
}

fn check_integrand(x: &ProcessEnsemble, bundle: &GBMBundle) -> Result<()> {
    if x.components() != 1 {
        return Err(EngineError::Contract(format!(
            "integrand must be scalar, got {} components",
            x.components()
        )));
    }
    if x.scenarios() != bundle.scenarios() || x.paths() != bundle.paths() {
        return Err(EngineError::Contract(
            "integrand ensemble shape does not match the bundle".into(),
        ));
    }
    if x.grid() != bundle.grid() {
        return Err(EngineError::Contract("integrand grid does not match the bundle".into()));
    }
    Ok(())
}

fn check_direction(a: &[f64], bundle: &GBMBundle) -> Result<()> {
    if a.len() != bundle.dimension() {
        return Err(EngineError::Contract(format!(
            "direction length {} does not match dimension {}",
            a.len(),
            bundle.dimension()
        )));
    }
    Ok(())
}

fn window_bounds(grid: &TimeGrid, window: (f64, f64)) -> Result<(usize, usize)> {
    let k0 = grid.node_index(window.0)?;
    let k1 = grid.node_index(window.1)?;
    if k0 > k1 {
        return Err(EngineError::Contract(format!(
            "window start {} after end {}",
            window.0, window.1
        )));
    }
    Ok((k0, k1))
}
