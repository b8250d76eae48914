//! Volatility uncertainty sets, their finite discretization, and the
//! piecewise-constant control lattices built on top of them.
//!
//! A set of symmetric PSD matrices (the admissible volatilities) is stored
//! through a finite generator list. Every scenario of a [`ControlLattice`]
//! picks one generator per grid interval; each scenario induces one
//! controlled Wiener measure, and the family of scenarios is the measure
//! set over which upper expectations are taken downstream.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{EngineError, Result};

/// Eigenvalues of a generator may undershoot zero by at most this much.
pub const PSD_TOLERANCE: f64 = 1e-12;

/// Uniform partition of a closed interval `[t_start, t_end]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    t_start: f64,
    t_end: f64,
    steps: usize,
}

impl TimeGrid {
    pub fn new(t_start: f64, t_end: f64, steps: usize) -> Result<Self> {
        if !t_start.is_finite() || !t_end.is_finite() {
            return Err(EngineError::Contract("grid endpoints must be finite".into()));
        }
        if steps == 0 {
            return Err(EngineError::Contract("grid needs at least one step".into()));
        }
        if t_end <= t_start {
            return Err(EngineError::Contract(format!(
                "grid end {t_end} must exceed start {t_start}"
            )));
        }
        Ok(TimeGrid { t_start, t_end, steps })
    }

    pub fn t_start(&self) -> f64 {
        self.t_start
    }

    pub fn t_end(&self) -> f64 {
        self.t_end
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Interval length; strictly positive by construction.
    pub fn dt(&self) -> f64 {
        (self.t_end - self.t_start) / self.steps as f64
    }

    /// k-th node; `node(0) == t_start` and `node(steps) == t_end` exactly.
    pub fn node(&self, k: usize) -> f64 {
        debug_assert!(k <= self.steps);
        if k == self.steps {
            self.t_end
        } else {
            self.t_start + (self.t_end - self.t_start) * (k as f64 / self.steps as f64)
        }
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..=self.steps).map(|k| self.node(k)).collect()
    }

    /// Maps a time to its node index; errors when `time` is off the grid.
    pub fn node_index(&self, time: f64) -> Result<usize> {
        let rel = (time - self.t_start) / self.dt();
        let k = rel.round();
        let tol = 1e-9 * (1.0 + self.t_end.abs().max(self.t_start.abs()));
        if k < 0.0 || k > self.steps as f64 || (time - self.node(k as usize)).abs() > tol {
            return Err(EngineError::Contract(format!(
                "time {time} is not a node of the grid [{}, {}] with {} steps",
                self.t_start, self.t_end, self.steps
            )));
        }
        Ok(k as usize)
    }
}

/// How an uncertainty set was specified.
#[derive(Debug, Clone, PartialEq)]
pub enum UncertaintyKind {
    Singleton,
    Interval1D { low: f64, high: f64 },
    DiagonalBox { lows: Vec<f64>, highs: Vec<f64> },
    FiniteSet,
}

/// A convex set of symmetric PSD volatility matrices, represented by the
/// finite generator list the engine works with. Generators are stored
/// symmetrized and PSD-checked on construction.
#[derive(Debug, Clone)]
pub struct UncertaintySet {
    dimension: usize,
    generators: Vec<Array2<f64>>,
    kind: UncertaintyKind,
}

impl UncertaintySet {
    /// Set containing exactly one volatility matrix.
    pub fn singleton(sigma: Array2<f64>) -> Result<Self> {
        let dimension = square_dimension(&sigma)?;
        Ok(UncertaintySet {
            dimension,
            generators: vec![validate_generator(sigma)?],
            kind: UncertaintyKind::Singleton,
        })
    }

    /// Scalar volatility interval `[low, high]`, discretized to its two
    /// endpoint matrices (the extreme points).
    pub fn interval_1d(low: f64, high: f64) -> Result<Self> {
        Self::interval_1d_with_points(low, high, 2)
    }

    /// Like [`UncertaintySet::interval_1d`] but with `points >= 2` equally
    /// spaced generators; interior points are diagnostic refinements.
    pub fn interval_1d_with_points(low: f64, high: f64, points: usize) -> Result<Self> {
        if !(low.is_finite() && high.is_finite()) || low < 0.0 || high < low {
            return Err(EngineError::Contract(format!(
                "interval requires 0 <= low <= high, got [{low}, {high}]"
            )));
        }
        if points < 1 || (points < 2 && high > low) {
            return Err(EngineError::Contract(
                "interval discretization needs at least both endpoints".into(),
            ));
        }
        let values: Vec<f64> = if points == 1 {
            vec![low]
        } else {
            (0..points)
                .map(|i| low + (high - low) * (i as f64 / (points - 1) as f64))
                .collect()
        };
        let generators = values
            .into_iter()
            .map(|v| Array2::from_elem((1, 1), v))
            .collect();
        Ok(UncertaintySet {
            dimension: 1,
            generators,
            kind: UncertaintyKind::Interval1D { low, high },
        })
    }

    /// Diagonal matrices with the i-th entry ranging over `[lows_i, highs_i]`,
    /// discretized to the `2^n` corner matrices (extreme points).
    pub fn diagonal_box(lows: Vec<f64>, highs: Vec<f64>) -> Result<Self> {
        let n = lows.len();
        if n == 0 || highs.len() != n {
            return Err(EngineError::Contract(
                "diagonal box needs equally sized, non-empty bound vectors".into(),
            ));
        }
        for i in 0..n {
            if !(lows[i].is_finite() && highs[i].is_finite()) || lows[i] < 0.0 || highs[i] < lows[i]
            {
                return Err(EngineError::Contract(format!(
                    "diagonal box requires 0 <= low <= high per entry, got [{}, {}] at {i}",
                    lows[i], highs[i]
                )));
            }
        }
        if n > 20 {
            return Err(EngineError::Contract(
                "diagonal box corner enumeration capped at dimension 20".into(),
            ));
        }
        let mut generators = Vec::with_capacity(1 << n);
        for mask in 0u32..(1 << n) {
            let mut m = Array2::zeros((n, n));
            for i in 0..n {
                m[(i, i)] = if mask >> i & 1 == 1 { highs[i] } else { lows[i] };
            }
            generators.push(m);
        }
        Ok(UncertaintySet {
            dimension: n,
            generators,
            kind: UncertaintyKind::DiagonalBox { lows, highs },
        })
    }

    /// Explicit finite generator list.
    pub fn finite_set(matrices: Vec<Array2<f64>>) -> Result<Self> {
        let first = matrices
            .first()
            .ok_or_else(|| EngineError::Contract("generator list must be non-empty".into()))?;
        let dimension = square_dimension(first)?;
        let mut generators = Vec::with_capacity(matrices.len());
        for m in matrices {
            if square_dimension(&m)? != dimension {
                return Err(EngineError::Contract(
                    "all generators must share one dimension".into(),
                ));
            }
            generators.push(validate_generator(m)?);
        }
        Ok(UncertaintySet {
            dimension,
            generators,
            kind: UncertaintyKind::FiniteSet,
        })
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn generators(&self) -> &[Array2<f64>] {
        &self.generators
    }

    pub fn kind(&self) -> &UncertaintyKind {
        &self.kind
    }

    /// `max_sigma sqrt(|a' sigma sigma b|)` over the generators; for `a == b`
    /// this is the largest directional volatility of the set.
    pub fn sigma_bar(&self, a: &[f64], b: &[f64]) -> Result<f64> {
        sigma_bar_over(&self.generators, self.dimension, a, b)
    }

    /// `min_sigma sqrt(a' sigma sigma a)`: the smallest directional
    /// volatility, used for lower quadratic-variation envelopes.
    pub fn sigma_min(&self, a: &[f64]) -> Result<f64> {
        if a.len() != self.dimension {
            return Err(dimension_mismatch(self.dimension, a.len()));
        }
        let mut best = f64::INFINITY;
        for sigma in &self.generators {
            let sa = mat_vec(sigma, a);
            best = best.min(dot(&sa, &sa).abs().sqrt());
        }
        Ok(best)
    }
}

/// `max_sigma sqrt(|a' sigma sigma b|)` over an explicit generator list;
/// with symmetric sigma, `a' sigma sigma b = (sigma a) . (sigma b)`.
pub fn sigma_bar_over(
    generators: &[Array2<f64>],
    dimension: usize,
    a: &[f64],
    b: &[f64],
) -> Result<f64> {
    if a.len() != dimension {
        return Err(dimension_mismatch(dimension, a.len()));
    }
    if b.len() != dimension {
        return Err(dimension_mismatch(dimension, b.len()));
    }
    let mut best = 0.0f64;
    for sigma in generators {
        let sa = mat_vec(sigma, a);
        let sb = mat_vec(sigma, b);
        best = best.max(dot(&sa, &sb).abs().sqrt());
    }
    Ok(best)
}

/// How scenarios of a control lattice are generated.
#[derive(Debug, Clone, PartialEq)]
pub enum ControlStrategy {
    /// One constant control per generator.
    ConstantVertices,
    /// `budget` scenarios, each re-drawing its generator at `switch_count`
    /// uniformly drawn interior grid nodes.
    RandomSwitching { seed: u64, switch_count: usize },
    /// All `generators^steps` sequences; errors beyond `max_scenarios`.
    Exhaustive { max_scenarios: usize },
}

/// Finite family of piecewise-constant generator-valued controls on a grid.
/// Self-contained: it carries copies of the generators it indexes.
#[derive(Debug, Clone)]
pub struct ControlLattice {
    grid: TimeGrid,
    dimension: usize,
    generators: Vec<Array2<f64>>,
    /// `controls[s][k]` = generator index on interval k of scenario s.
    controls: Vec<Vec<usize>>,
}

impl ControlLattice {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn generators(&self) -> &[Array2<f64>] {
        &self.generators
    }

    pub fn scenario_count(&self) -> usize {
        self.controls.len()
    }

    pub fn control(&self, scenario: usize) -> &[usize] {
        &self.controls[scenario]
    }

    /// Generator active on interval `k` of `scenario`.
    pub fn generator_at(&self, scenario: usize, k: usize) -> &Array2<f64> {
        &self.generators[self.controls[scenario][k]]
    }

    /// Largest directional volatility over the embedded generators; equal to
    /// the parent set's value because the full generator list is copied.
    pub fn sigma_bar(&self, a: &[f64], b: &[f64]) -> Result<f64> {
        sigma_bar_over(&self.generators, self.dimension, a, b)
    }

    /// Smallest directional volatility over the embedded generators.
    pub fn sigma_min(&self, a: &[f64]) -> Result<f64> {
        if a.len() != self.dimension {
            return Err(dimension_mismatch(self.dimension, a.len()));
        }
        let mut best = f64::INFINITY;
        for sigma in &self.generators {
            let sa = mat_vec(sigma, a);
            best = best.min(dot(&sa, &sa).abs().sqrt());
        }
        Ok(best)
    }

    /// Reassembles a lattice from raw parts (deserialization path); applies
    /// the same generator and index validation as the builders.
    pub(crate) fn from_parts(
        grid: TimeGrid,
        generators: Vec<Array2<f64>>,
        controls: Vec<Vec<usize>>,
    ) -> Result<Self> {
        let first = generators
            .first()
            .ok_or_else(|| EngineError::Contract("lattice needs generators".into()))?;
        let dimension = square_dimension(first)?;
        let mut checked = Vec::with_capacity(generators.len());
        for g in generators {
            if square_dimension(&g)? != dimension {
                return Err(EngineError::Contract(
                    "all generators must share one dimension".into(),
                ));
            }
            checked.push(validate_generator(g)?);
        }
        if controls.is_empty() {
            return Err(EngineError::Contract("lattice needs at least one scenario".into()));
        }
        for c in &controls {
            if c.len() != grid.steps() {
                return Err(EngineError::Contract(
                    "control length must equal the grid step count".into(),
                ));
            }
            if c.iter().any(|&i| i >= checked.len()) {
                return Err(EngineError::Contract("control indexes missing generator".into()));
            }
        }
        Ok(ControlLattice { grid, dimension, generators: checked, controls })
    }
}

/// Builds the scenario family realizing the chosen strategy. At most
/// `budget` scenarios are ever produced; `Exhaustive` refuses (rather than
/// truncates) when full enumeration does not fit.
pub fn build_controls(
    set: &UncertaintySet,
    grid: &TimeGrid,
    strategy: &ControlStrategy,
    budget: usize,
) -> Result<ControlLattice> {
    if budget == 0 {
        return Err(EngineError::Contract("scenario budget must be positive".into()));
    }
    let g = set.generators.len();
    let steps = grid.steps();
    let controls: Vec<Vec<usize>> = match strategy {
        ControlStrategy::ConstantVertices => {
            if budget < g {
                return Err(EngineError::Contract(format!(
                    "budget {budget} below the {g} constant-vertex scenarios"
                )));
            }
            (0..g).map(|i| vec![i; steps]).collect()
        }
        ControlStrategy::RandomSwitching { seed, switch_count } => {
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            (0..budget)
                .map(|_| {
                    let mut control = vec![rng.gen_range(0..g); steps];
                    for _ in 0..*switch_count {
                        let node = rng.gen_range(1..steps.max(2));
                        let new_gen = rng.gen_range(0..g);
                        for slot in control.iter_mut().skip(node.min(steps)) {
                            *slot = new_gen;
                        }
                    }
                    control
                })
                .collect()
        }
        ControlStrategy::Exhaustive { max_scenarios } => {
            let limit = (*max_scenarios).min(budget);
            let required = g.checked_pow(steps.try_into().map_err(|_| {
                EngineError::Contract("grid too fine for exhaustive enumeration".into())
            })?);
            let required = match required {
                Some(r) if r <= limit => r,
                Some(r) => return Err(EngineError::LatticeTooLarge { required: r, limit }),
                None => return Err(EngineError::LatticeTooLarge { required: usize::MAX, limit }),
            };
            let mut all = Vec::with_capacity(required);
            let mut current = vec![0usize; steps];
            loop {
                all.push(current.clone());
                let mut k = 0;
                loop {
                    if k == steps {
                        return Ok(ControlLattice {
                            grid: grid.clone(),
                            dimension: set.dimension,
                            generators: set.generators.clone(),
                            controls: all,
                        });
                    }
                    current[k] += 1;
                    if current[k] < g {
                        break;
                    }
                    current[k] = 0;
                    k += 1;
                }
            }
        }
    };
    Ok(ControlLattice {
        grid: grid.clone(),
        dimension: set.dimension,
        generators: set.generators.clone(),
        controls,
    })
}

fn square_dimension(m: &Array2<f64>) -> Result<usize> {
    let (r, c) = m.dim();
    if r == 0 || r != c {
        return Err(EngineError::Contract(format!(
            "generator must be square and non-empty, got {r}x{c}"
        )));
    }
    Ok(r)
}

/// Symmetrizes the matrix and verifies finiteness and positive
/// semi-definiteness (smallest eigenvalue above `-PSD_TOLERANCE`).
fn validate_generator(m: Array2<f64>) -> Result<Array2<f64>> {
    let n = m.nrows();
    if m.iter().any(|v| !v.is_finite()) {
        return Err(EngineError::Contract("generator entries must be finite".into()));
    }
    let mut sym = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            sym[(i, j)] = 0.5 * (m[(i, j)] + m[(j, i)]);
        }
    }
    let scale = sym.iter().fold(0.0f64, |acc, v| acc.max(v.abs())).max(1.0);
    let min_eig = min_symmetric_eigenvalue(&sym);
    if min_eig < -PSD_TOLERANCE * scale {
        return Err(EngineError::Contract(format!(
            "generator is not positive semi-definite (min eigenvalue {min_eig:.3e})"
        )));
    }
    Ok(sym)
}

/// Smallest eigenvalue of a symmetric matrix via cyclic Jacobi sweeps.
/// Exact enough for the tiny matrices this engine handles.
pub fn min_symmetric_eigenvalue(m: &Array2<f64>) -> f64 {
    let n = m.nrows();
    if n == 1 {
        return m[(0, 0)];
    }
    let mut a = m.clone();
    for _sweep in 0..64 {
        let mut off = 0.0f64;
        for p in 0..n {
            for q in (p + 1)..n {
                off = off.max(a[(p, q)].abs());
            }
        }
        let scale = (0..n).fold(0.0f64, |acc, i| acc.max(a[(i, i)].abs())).max(1.0);
        if off <= 1e-15 * scale {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
            }
        }
    }
    (0..n).fold(f64::INFINITY, |acc, i| acc.min(a[(i, i)]))
}

fn mat_vec(m: &Array2<f64>, v: &[f64]) -> Vec<f64> {
    let n = m.nrows();
    (0..n).map(|i| (0..n).map(|j| m[(i, j)] * v[j]).sum()).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn dimension_mismatch(expected: usize, got: usize) -> EngineError {
    EngineError::Contract(format!(
        "vector length {got} does not match set dimension {expected}"
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent oracle: |a' s s b| via explicit triple loops.
    fn quad_form_oracle(sigma: &Array2<f64>, a: &[f64], b: &[f64]) -> f64 {
        let n = sigma.nrows();
        let mut total = 0.0;
        for i in 0..n {
            for j in 0..n {
                let mut ssij = 0.0;
                for k in 0..n {
                    ssij += sigma[(i, k)] * sigma[(k, j)];
                }
                total += a[i] * ssij * b[j];
            }
        }
        total.abs()
    }

    fn grid01(steps: usize) -> TimeGrid {
        TimeGrid::new(0.0, 1.0, steps).unwrap()
    }

    #[test]
    fn grid_nodes_hit_endpoints_exactly() {
        let g = TimeGrid::new(0.25, 1.75, 7).unwrap();
        assert_eq!(g.node(0), 0.25);
        assert_eq!(g.node(7), 1.75);
        let nodes = g.nodes();
        assert_eq!(nodes.len(), 8);
        assert!(nodes.windows(2).all(|w| w[1] > w[0]));
        assert_eq!(g.node_index(g.node(3)).unwrap(), 3);
        assert!(g.node_index(0.3).is_err());
    }

    #[test]
    fn grid_rejects_degenerate_spans() {
        assert!(TimeGrid::new(0.0, 0.0, 4).is_err());
        assert!(TimeGrid::new(1.0, 0.0, 4).is_err());
        assert!(TimeGrid::new(0.0, 1.0, 0).is_err());
        assert!(TimeGrid::new(f64::NAN, 1.0, 4).is_err());
    }

    #[test]
    fn sigma_bar_identity_singleton_is_one() {
        let s = UncertaintySet::singleton(Array2::eye(1)).unwrap();
        assert_eq!(s.sigma_bar(&[1.0], &[1.0]).unwrap(), 1.0);
    }

    #[test]
    fn sigma_bar_interval_takes_upper_endpoint() {
        let s = UncertaintySet::interval_1d(0.5, 1.0).unwrap();
        assert_eq!(s.sigma_bar(&[1.0], &[1.0]).unwrap(), 1.0);
        assert_eq!(s.sigma_min(&[1.0]).unwrap(), 0.5);
    }

    #[test]
    fn sigma_bar_orthogonal_directions_of_diagonal_generators() {
        // Oracle: brute-force |a' s s b| over both generators; the
        // off-diagonal of s*s vanishes for diagonal s.
        let g1 = Array2::from_diag(&ndarray::arr1(&[1.0, 2.0]));
        let g2 = Array2::from_diag(&ndarray::arr1(&[2.0, 1.0]));
        let a = [1.0, 0.0];
        let b = [0.0, 1.0];
        for g in [&g1, &g2] {
            assert_eq!(quad_form_oracle(g, &a, &b), 0.0);
        }
        let s = UncertaintySet::finite_set(vec![g1, g2]).unwrap();
        assert_eq!(s.sigma_bar(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn sigma_bar_matches_oracle_on_dense_generators() {
        let m1 = Array2::from_shape_vec((2, 2), vec![1.0, 0.3, 0.3, 0.8]).unwrap();
        let m2 = Array2::from_shape_vec((2, 2), vec![0.5, -0.1, -0.1, 1.2]).unwrap();
        let s = UncertaintySet::finite_set(vec![m1.clone(), m2.clone()]).unwrap();
        let a = [0.7, -1.3];
        let b = [0.4, 2.0];
        let expected = quad_form_oracle(&m1, &a, &b)
            .max(quad_form_oracle(&m2, &a, &b))
            .sqrt();
        let got = s.sigma_bar(&a, &b).unwrap();
        assert!((got - expected).abs() <= 1e-12 * expected.max(1.0));
    }

    #[test]
    fn sigma_bar_rejects_dimension_mismatch() {
        let s = UncertaintySet::interval_1d(0.5, 1.0).unwrap();
        assert!(s.sigma_bar(&[1.0, 2.0], &[1.0]).is_err());
        assert!(s.sigma_bar(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn generators_are_symmetrized_and_psd_checked() {
        let skewed = Array2::from_shape_vec((2, 2), vec![1.0, 0.4, 0.0, 1.0]).unwrap();
        let s = UncertaintySet::finite_set(vec![skewed]).unwrap();
        let g = &s.generators()[0];
        assert_eq!(g[(0, 1)], 0.2);
        assert_eq!(g[(1, 0)], 0.2);

        let indefinite = Array2::from_shape_vec((2, 2), vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        assert!(UncertaintySet::finite_set(vec![indefinite]).is_err());

        let negative = Array2::from_elem((1, 1), -0.5);
        assert!(UncertaintySet::singleton(negative).is_err());
    }

    #[test]
    fn interval_bounds_validated() {
        assert!(UncertaintySet::interval_1d(1.0, 0.5).is_err());
        assert!(UncertaintySet::interval_1d(-0.1, 0.5).is_err());
        assert!(UncertaintySet::diagonal_box(vec![0.0, 0.2], vec![0.1, 0.1]).is_err());
    }

    #[test]
    fn diagonal_box_enumerates_corners() {
        let s = UncertaintySet::diagonal_box(vec![0.1, 0.2], vec![0.3, 0.4]).unwrap();
        assert_eq!(s.generators().len(), 4);
        let mut diags: Vec<(f64, f64)> =
            s.generators().iter().map(|g| (g[(0, 0)], g[(1, 1)])).collect();
        diags.sort_by(|x, y| x.partial_cmp(y).unwrap());
        assert_eq!(diags, vec![(0.1, 0.2), (0.1, 0.4), (0.3, 0.2), (0.3, 0.4)]);
    }

    #[test]
    fn min_eigenvalue_agrees_with_closed_form() {
        // Oracle: eigenvalues of [[2, 1], [1, 2]] are 1 and 3.
        let m = Array2::from_shape_vec((2, 2), vec![2.0, 1.0, 1.0, 2.0]).unwrap();
        assert!((min_symmetric_eigenvalue(&m) - 1.0).abs() < 1e-12);
        // Oracle: [[1, 2], [2, 1]] has eigenvalues -1 and 3.
        let m = Array2::from_shape_vec((2, 2), vec![1.0, 2.0, 2.0, 1.0]).unwrap();
        assert!((min_symmetric_eigenvalue(&m) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_vertices_single_generator() {
        let s = UncertaintySet::singleton(Array2::eye(1)).unwrap();
        let lat =
            build_controls(&s, &grid01(5), &ControlStrategy::ConstantVertices, 8).unwrap();
        assert_eq!(lat.scenario_count(), 1);
        assert_eq!(lat.control(0), &[0, 0, 0, 0, 0]);
    }

    #[test]
    fn constant_vertices_one_scenario_per_generator() {
        let s = UncertaintySet::interval_1d(0.5, 1.0).unwrap();
        let lat =
            build_controls(&s, &grid01(4), &ControlStrategy::ConstantVertices, 2).unwrap();
        assert_eq!(lat.scenario_count(), 2);
        assert_eq!(lat.control(0), &[0usize; 4]);
        assert_eq!(lat.control(1), &[1usize; 4]);
        assert!(
            build_controls(&s, &grid01(4), &ControlStrategy::ConstantVertices, 1).is_err()
        );
    }

    #[test]
    fn exhaustive_enumerates_all_sequences() {
        // Oracle: 2 generators on 3 intervals give 2^3 = 8 sequences.
        let s = UncertaintySet::interval_1d(0.5, 1.0).unwrap();
        let lat = build_controls(
            &s,
            &grid01(3),
            &ControlStrategy::Exhaustive { max_scenarios: 10 },
            64,
        )
        .unwrap();
        assert_eq!(lat.scenario_count(), 8);
        let mut seen: Vec<Vec<usize>> = lat.controls.clone();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 8);
    }

    #[test]
    fn exhaustive_overflow_is_an_error_not_a_truncation() {
        let s = UncertaintySet::interval_1d(0.5, 1.0).unwrap();
        let err = build_controls(
            &s,
            &grid01(6),
            &ControlStrategy::Exhaustive { max_scenarios: 10 },
            1000,
        )
        .unwrap_err();
        match err {
            EngineError::LatticeTooLarge { required, limit } => {
                assert_eq!(required, 64);
                assert_eq!(limit, 10);
            }
            other => panic!("expected LatticeTooLarge, got {other:?}"),
        }
    }

    #[test]
    fn random_switching_is_seeded_and_respects_budget() {
        let s = UncertaintySet::interval_1d(0.5, 1.0).unwrap();
        let strat = ControlStrategy::RandomSwitching { seed: 7, switch_count: 3 };
        let a = build_controls(&s, &grid01(16), &strat, 5).unwrap();
        let b = build_controls(&s, &grid01(16), &strat, 5).unwrap();
        assert_eq!(a.controls, b.controls);
        assert_eq!(a.scenario_count(), 5);
        assert!(a.controls.iter().all(|c| c.len() == 16));
        assert!(a.controls.iter().flatten().all(|&i| i < 2));
        let other = build_controls(
            &s,
            &grid01(16),
            &ControlStrategy::RandomSwitching { seed: 8, switch_count: 3 },
            5,
        )
        .unwrap();
        assert_ne!(a.controls, other.controls);
    }

    #[test]
    fn lattice_sigma_bar_matches_parent_set() {
        let s = UncertaintySet::interval_1d(0.5, 1.0).unwrap();
        let lat =
            build_controls(&s, &grid01(4), &ControlStrategy::ConstantVertices, 2).unwrap();
        assert_eq!(
            lat.sigma_bar(&[2.0], &[1.0]).unwrap(),
            s.sigma_bar(&[2.0], &[1.0]).unwrap()
        );
    }
}
