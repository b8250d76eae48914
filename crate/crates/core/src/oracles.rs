//! Independent reference implementations used to cross-check the engine:
//! a classical particle solver for the singleton-generator limit and a
//! one-dimensional finite-difference solver for sublinear expectations of
//! terminal payoffs. Both are deliberately separate code paths from the
//! engine's integrators and run single-threaded.

use ndarray::{Array2, Array3, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::coefficients::{CoeffArgs, CoefficientSet, LawView};
use crate::error::{EngineError, Result};
use crate::sampler::{ProcessEnsemble, RandomVariable};
use crate::uncertainty::TimeGrid;

/// Seed tag so oracle streams never collide with engine streams built
/// from the same user seed.
const ORACLE_SEED_TAG: u64 = 0x6f72_6163_6c65;

/// Classical particle scheme under a single fixed generator: Euler steps
/// with the law argument fed by the simultaneous empirical distribution
/// of the particle cloud. Shares no integrator code with the engine.
pub fn classical_mkv_solve(
    xi: &RandomVariable,
    c: &CoefficientSet,
    sigma: &Array2<f64>,
    grid: &TimeGrid,
    paths: usize,
    seed: u64,
) -> Result<ProcessEnsemble> {
    let d = c.state_dim();
    let n = c.noise_dim();
    if sigma.dim() != (n, n) {
        return Err(EngineError::Contract(format!(
            "generator must be {n}x{n}, got {:?}",
            sigma.dim()
        )));
    }
    if sigma.iter().any(|v| !v.is_finite()) {
        return Err(EngineError::Contract("generator entries must be finite".into()));
    }
    if paths == 0 {
        return Err(EngineError::Contract("paths must be positive".into()));
    }
    if xi.scenarios() != 1 || xi.paths() != paths || xi.components() != d {
        return Err(EngineError::Contract(
            "initial values must be a single-scenario ensemble matching paths and state dimension"
                .into(),
        ));
    }
    let m = grid.steps();
    let dt = grid.dt();
    let sqrt_dt = dt.sqrt();

    // Pre-drawn Wiener increments, one independent stream per particle.
    let mut dw = Array3::<f64>::zeros((paths, m, n));
    for p in 0..paths {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ORACLE_SEED_TAG);
        rng.set_stream(p as u64);
        for k in 0..m {
            for l in 0..n {
                dw[(p, k, l)] = sqrt_dt * rng.sample::<f64, _>(StandardNormal);
            }
        }
    }
    // Covariation rate of the driver: d<B>_il = (sigma sigma)_il dt for a
    // symmetric generator.
    let qv_rate = sigma.dot(sigma);

    let mut out = Array4::<f64>::zeros((1, paths, m + 1, d));
    let mut state = Array2::<f64>::zeros((paths, d));
    for p in 0..paths {
        for j in 0..d {
            let v = xi.values()[(0, p, j)];
            state[(p, j)] = v;
            out[(0, p, 0, j)] = v;
        }
    }
    let mut b_buf = vec![0.0; d];
    let mut h_buf = vec![0.0; d * n * n];
    let mut g_buf = vec![0.0; d * n];
    let mut noise = vec![0.0; n];
    for k in 0..m {
        let mut snapshot = Array3::<f64>::zeros((1, paths, d));
        for p in 0..paths {
            for j in 0..d {
                snapshot[(0, p, j)] = state[(p, j)];
            }
        }
        let law = LawView::new(RandomVariable::new(snapshot)?)?;
        let time = grid.node(k);
        for p in 0..paths {
            let row: Vec<f64> = (0..d).map(|j| state[(p, j)]).collect();
            let args =
                CoeffArgs { time, node: k, state: &row, law: &law, scenario: 0, path: p };
            c.eval_b(&args, &mut b_buf);
            c.eval_h(&args, &mut h_buf);
            c.eval_g(&args, &mut g_buf);
            for (i, nv) in noise.iter_mut().enumerate() {
                let mut acc = 0.0;
                for l in 0..n {
                    acc += sigma[(i, l)] * dw[(p, k, l)];
                }
                *nv = acc;
            }
            for j in 0..d {
                let mut inc = b_buf[j] * dt;
                for i in 0..n {
                    for l in 0..n {
                        inc += h_buf[j * n * n + i * n + l] * qv_rate[(i, l)] * dt;
                    }
                    inc += g_buf[j * n + i] * noise[i];
                }
                let v = state[(p, j)] + inc;
                if !v.is_finite() {
                    return Err(EngineError::NonFinite {
                        context: format!("classical particle update at node {}", k + 1),
                    });
                }
                state[(p, j)] = v;
                out[(0, p, k + 1, j)] = v;
            }
        }
    }
    ProcessEnsemble::new(out, grid.clone())
}

/// Configuration of the finite-difference solver for
/// `u_t = G(u_xx)`, `G(a) = (sigma_high^2 a^+ - sigma_low^2 a^-) / 2`,
/// backward from a terminal payoff on a truncated symmetric domain.
pub struct GHeatConfig {
    pub sigma_low: f64,
    pub sigma_high: f64,
    pub space_halfwidth: f64,
    pub space_steps: usize,
    pub time_steps: usize,
    pub horizon: f64,
    pub payoff: Box<dyn Fn(f64) -> f64 + Send + Sync>,
}

impl std::fmt::Debug for GHeatConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("GHeatConfig")
            .field("sigma_low", &self.sigma_low)
            .field("sigma_high", &self.sigma_high)
            .field("space_halfwidth", &self.space_halfwidth)
            .field("space_steps", &self.space_steps)
            .field("time_steps", &self.time_steps)
            .field("horizon", &self.horizon)
            .finish_non_exhaustive()
    }
}

/// Truncation radius covering the driver's reachable range with a wide
/// Gaussian-tail margin.
pub fn default_halfwidth(sigma_high: f64, horizon: f64) -> f64 {
    (8.0 * sigma_high * horizon.sqrt()).max(1.0)
}

impl GHeatConfig {
    fn validate(&self) -> Result<(f64, f64)> {
        if !(self.sigma_low >= 0.0) || !(self.sigma_high >= self.sigma_low) {
            return Err(EngineError::Config(
                "need 0 <= sigma_low <= sigma_high".into(),
            ));
        }
        if !self.sigma_high.is_finite() {
            return Err(EngineError::Config("sigma_high must be finite".into()));
        }
        if !(self.space_halfwidth > 0.0) || !self.space_halfwidth.is_finite() {
            return Err(EngineError::Config("space_halfwidth must be positive".into()));
        }
        if self.space_steps < 2 || self.space_steps % 2 != 0 {
            return Err(EngineError::Config(
                "space_steps must be an even number of at least 2 (origin on the grid)".into(),
            ));
        }
        if self.time_steps == 0 {
            return Err(EngineError::Config("time_steps must be positive".into()));
        }
        if !(self.horizon > 0.0) || !self.horizon.is_finite() {
            return Err(EngineError::Config("horizon must be positive".into()));
        }
        let dx = 2.0 * self.space_halfwidth / self.space_steps as f64;
        let dt = self.horizon / self.time_steps as f64;
        let lambda = dt / (dx * dx);
        if self.sigma_high > 0.0 && lambda * self.sigma_high * self.sigma_high > 1.0 + 1e-12 {
            return Err(EngineError::Config(format!(
                "CFL violation: dt/dx^2 = {lambda:.6} exceeds 1/sigma_high^2 = {:.6}",
                1.0 / (self.sigma_high * self.sigma_high)
            )));
        }
        Ok((dx, dt))
    }
}

/// Sublinear expectation of `payoff(B_T)` over all adapted volatility
/// controls in `[sigma_low, sigma_high]`, by explicit finite differences
/// on the truncated domain with payoff-extension boundary values. This
/// dominates any open-loop scenario estimate of the same quantity.
pub fn gheat_expectation(cfg: &GHeatConfig) -> Result<f64> {
    let (dx, dt) = cfg.validate()?;
    let nodes = cfg.space_steps + 1;
    let xs: Vec<f64> =
        (0..nodes).map(|i| -cfg.space_halfwidth + dx * i as f64).collect();
    let mut v: Vec<f64> = xs.iter().map(|&x| (cfg.payoff)(x)).collect();
    if v.iter().any(|x| !x.is_finite()) {
        return Err(EngineError::Config("payoff must be finite on the grid".into()));
    }
    let half_high = 0.5 * cfg.sigma_high * cfg.sigma_high;
    let half_low = 0.5 * cfg.sigma_low * cfg.sigma_low;
    let mut next = v.clone();
    for _ in 0..cfg.time_steps {
        for i in 1..nodes - 1 {
            let second = (v[i + 1] - 2.0 * v[i] + v[i - 1]) / (dx * dx);
            let g = if second >= 0.0 { half_high * second } else { half_low * second };
            next[i] = v[i] + dt * g;
        }
        // Boundary rows stay pinned to the payoff extension.
        next[0] = v[0];
        next[nodes - 1] = v[nodes - 1];
        std::mem::swap(&mut v, &mut next);
    }
    Ok(v[cfg.space_steps / 2])
}
