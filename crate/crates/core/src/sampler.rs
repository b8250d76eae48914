//! Scenario ensembles and controlled Brownian path simulation.
//!
//! The engine realizes volatility uncertainty by driving one Wiener process
//! per (scenario, path) pair through the scenario's piecewise-constant
//! generator: `dB = sigma_k dW` on interval k. Quadratic covariation is
//! carried analytically per scenario (it depends only on the control, not
//! on the path), which removes a layer of Monte-Carlo noise from all
//! covariation integrals downstream.

use ndarray::{Array2, Array3, Array4, Axis};
use ndarray::parallel::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{EngineError, Result};
use crate::uncertainty::{ControlLattice, TimeGrid};

/// Magic prefix of the binary bundle format.
const BUNDLE_MAGIC: &[u8; 8] = b"GSDEBNDL";
const BUNDLE_VERSION: u32 = 1;

/// The two sample-array shapes the engine works with.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnsembleKind {
    RandomVariable,
    Process,
}

/// Samples of a d-component random variable: shape (scenarios, paths, d).
/// Values are finite by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct RandomVariable {
    values: Array3<f64>,
}

impl RandomVariable {
    pub fn new(values: Array3<f64>) -> Result<Self> {
        ensure_finite(values.iter(), "random-variable ensemble")?;
        if values.is_empty() {
            return Err(EngineError::Contract("ensemble must be non-empty".into()));
        }
        Ok(RandomVariable { values })
    }

    pub fn from_elem(scenarios: usize, paths: usize, components: usize, c: f64) -> Result<Self> {
        Self::new(Array3::from_elem((scenarios, paths, components), c))
    }

    pub fn kind(&self) -> EnsembleKind {
        EnsembleKind::RandomVariable
    }

    pub fn scenarios(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn paths(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn components(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn values(&self) -> &Array3<f64> {
        &self.values
    }

    /// Entry-wise map; errors if `f` produces a non-finite value.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::new(self.values.mapv(&f))
    }

    /// Entry-wise combination of two equally shaped ensembles.
    pub fn zip_with(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.values.dim() != other.values.dim() {
            return Err(EngineError::Contract(
                "ensembles must share a shape to be combined".into(),
            ));
        }
        let mut out = self.values.clone();
        out.zip_mut_with(&other.values, |x, &y| *x = f(*x, y));
        Self::new(out)
    }

    /// Squared Euclidean length across components: shape (S, P, 1).
    pub fn norm_sq(&self) -> Result<Self> {
        let (s, p, _) = self.values.dim();
        let mut out = Array3::zeros((s, p, 1));
        for ((i, j, _), v) in out.indexed_iter_mut() {
            *v = self
                .values
                .slice(ndarray::s![i, j, ..])
                .iter()
                .map(|x| x * x)
                .sum();
        }
        Self::new(out)
    }
}

/// Samples of a process at grid nodes: shape (scenarios, paths, nodes, d).
#[derive(Debug, Clone, PartialEq)]
pub struct ProcessEnsemble {
    values: Array4<f64>,
    grid: TimeGrid,
}

impl ProcessEnsemble {
    pub fn new(values: Array4<f64>, grid: TimeGrid) -> Result<Self> {
        ensure_finite(values.iter(), "process ensemble")?;
        if values.is_empty() {
            return Err(EngineError::Contract("ensemble must be non-empty".into()));
        }
        if values.shape()[2] != grid.steps() + 1 {
            return Err(EngineError::Contract(format!(
                "process has {} time nodes but the grid has {}",
                values.shape()[2],
                grid.steps() + 1
            )));
        }
        Ok(ProcessEnsemble { values, grid })
    }

    /// Process constant in time and across samples.
    pub fn constant(
        scenarios: usize,
        paths: usize,
        components: usize,
        grid: &TimeGrid,
        c: f64,
    ) -> Result<Self> {
        Self::new(
            Array4::from_elem((scenarios, paths, grid.steps() + 1, components), c),
            grid.clone(),
        )
    }

    /// Constant-in-time extension of a random variable.
    pub fn from_random_variable(xi: &RandomVariable, grid: &TimeGrid) -> Result<Self> {
        let (s, p, d) = xi.values().dim();
        let mut values = Array4::zeros((s, p, grid.steps() + 1, d));
        for k in 0..=grid.steps() {
            values
                .slice_mut(ndarray::s![.., .., k, ..])
                .assign(xi.values());
        }
        Self::new(values, grid.clone())
    }

    pub fn kind(&self) -> EnsembleKind {
        EnsembleKind::Process
    }

    pub fn scenarios(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn paths(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn nodes(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn components(&self) -> usize {
        self.values.shape()[3]
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn values(&self) -> &Array4<f64> {
        &self.values
    }

    /// Cross-section at node `k` as a random variable.
    pub fn at_node(&self, k: usize) -> Result<RandomVariable> {
        if k >= self.nodes() {
            return Err(EngineError::Contract(format!(
                "node {k} out of range ({} nodes)",
                self.nodes()
            )));
        }
        RandomVariable::new(self.values.slice(ndarray::s![.., .., k, ..]).to_owned())
    }

    /// Value at the last grid node.
    pub fn terminal(&self) -> RandomVariable {
        self.at_node(self.nodes() - 1).expect("last node exists")
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::new(self.values.mapv(&f), self.grid.clone())
    }

    pub fn zip_with(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.values.dim() != other.values.dim() || self.grid != other.grid {
            return Err(EngineError::Contract(
                "process ensembles must share shape and grid to be combined".into(),
            ));
        }
        let mut out = self.values.clone();
        out.zip_mut_with(&other.values, |x, &y| *x = f(*x, y));
        Self::new(out, self.grid.clone())
    }
}

/// Simulated driving noise: Brownian paths per (scenario, path) plus the
/// analytic quadratic covariation tensor per scenario.
#[derive(Debug, Clone)]
pub struct GBMBundle {
    b: ProcessEnsemble,
    /// (scenarios, nodes, n, n); `qv[s, k]` is symmetric PSD, nondecreasing in k.
    qv: Array4<f64>,
    lattice: ControlLattice,
    seed: u64,
}

impl GBMBundle {
    pub fn b(&self) -> &ProcessEnsemble {
        &self.b
    }

    pub fn qv(&self) -> &Array4<f64> {
        &self.qv
    }

    pub fn lattice(&self) -> &ControlLattice {
        &self.lattice
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn scenarios(&self) -> usize {
        self.b.scenarios()
    }

    pub fn paths(&self) -> usize {
        self.b.paths()
    }

    pub fn dimension(&self) -> usize {
        self.b.components()
    }

    pub fn grid(&self) -> &TimeGrid {
        self.b.grid()
    }

    /// `a' QV[s, k] b`: accumulated covariation along directions a, b.
    pub fn qv_quadratic(&self, scenario: usize, k: usize, a: &[f64], b: &[f64]) -> f64 {
        let n = self.dimension();
        let mut total = 0.0;
        for i in 0..n {
            for j in 0..n {
                total += a[i] * self.qv[(scenario, k, i, j)] * b[j];
            }
        }
        total
    }
}

/// Per-(scenario, path) generator keyed by counter-based stream splitting,
/// so draws are independent of thread scheduling.
pub fn rng_for(seed: u64, scenario: usize, path: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((scenario as u64) << 40) | path as u64);
    rng
}

/// Simulates the controlled Brownian bundle on the lattice's grid: for each
/// scenario s and interval k, `B_{k+1} = B_k + sigma_{s,k} dW` with
/// `dW ~ N(0, dt I)`, and `QV_{k+1} = QV_k + sigma_{s,k} sigma_{s,k} dt`.
/// Deterministic in (lattice, paths, seed) regardless of thread count.
pub fn simulate(lattice: &ControlLattice, paths: usize, seed: u64) -> Result<GBMBundle> {
    if paths == 0 {
        return Err(EngineError::Contract("path count must be positive".into()));
    }
    let scenarios = lattice.scenario_count();
    if scenarios >= 1 << 24 || paths >= 1 << 40 {
        return Err(EngineError::Contract(
            "scenario/path counts exceed the RNG stream-splitting range".into(),
        ));
    }
    let m = lattice.grid().steps();
    let n = lattice.dimension();
    let dt = lattice.grid().dt();
    let sqrt_dt = dt.sqrt();

    let mut b = Array4::zeros((scenarios, paths, m + 1, n));
    b.axis_iter_mut(Axis(0))
        .into_par_iter()
        .enumerate()
        .for_each(|(s, mut scenario_block)| {
            let control = lattice.control(s);
            scenario_block
                .axis_iter_mut(Axis(0))
                .into_par_iter()
                .enumerate()
                .for_each(|(p, mut path)| {
                    let mut rng = rng_for(seed, s, p);
                    let mut dw = vec![0.0f64; n];
                    for k in 0..m {
                        for z in dw.iter_mut() {
                            let g: f64 = StandardNormal.sample(&mut rng);
                            *z = sqrt_dt * g;
                        }
                        let sigma = &lattice.generators()[control[k]];
                        for i in 0..n {
                            let mut inc = 0.0;
                            for (j, dwj) in dw.iter().enumerate() {
                                inc += sigma[(i, j)] * dwj;
                            }
                            path[(k + 1, i)] = path[(k, i)] + inc;
                        }
                    }
                });
        });

    let mut qv = Array4::zeros((scenarios, m + 1, n, n));
    for s in 0..scenarios {
        for k in 0..m {
            let sigma = lattice.generator_at(s, k);
            for i in 0..n {
                for j in 0..n {
                    let mut ss = 0.0;
                    for l in 0..n {
                        ss += sigma[(i, l)] * sigma[(l, j)];
                    }
                    qv[(s, k + 1, i, j)] = qv[(s, k, i, j)] + ss * dt;
                }
            }
        }
    }

    ensure_finite(qv.iter(), "analytic covariation tensor")?;
    Ok(GBMBundle {
        b: ProcessEnsemble::new(b, lattice.grid().clone())?,
        qv,
        lattice: lattice.clone(),
        seed,
    })
}

/// Pathwise discrete quadratic variation of the scalar projection `a . B`:
/// `(B^a_k)^2 - 2 sum_{j<k} B^a_j (B^a_{j+1} - B^a_j)` per scenario/path.
/// A validation surface only; production covariation uses the analytic tensor.
pub fn empirical_qv(bundle: &GBMBundle, a: &[f64]) -> Result<ProcessEnsemble> {
    let n = bundle.dimension();
    if a.len() != n {
        return Err(EngineError::Contract(format!(
            "direction length {} does not match dimension {n}",
            a.len()
        )));
    }
    let (scenarios, paths, nodes) = (bundle.scenarios(), bundle.paths(), bundle.grid().steps() + 1);
    let bvals = bundle.b().values();
    let mut out = Array4::zeros((scenarios, paths, nodes, 1));
    for s in 0..scenarios {
        for p in 0..paths {
            let mut ito_sum = 0.0;
            let mut prev = 0.0;
            for k in 0..nodes {
                let mut ba = 0.0;
                for (j, aj) in a.iter().enumerate() {
                    ba += aj * bvals[(s, p, k, j)];
                }
                if k > 0 {
                    ito_sum += prev * (ba - prev);
                }
                out[(s, p, k, 0)] = ba * ba - 2.0 * ito_sum;
                prev = ba;
            }
        }
    }
    ProcessEnsemble::new(out, bundle.grid().clone())
}

/// Serializes a bundle: magic, version, shape header, grid, generators,
/// controls, then B and QV as row-major little-endian 64-bit floats.
pub fn write_bundle(bundle: &GBMBundle, w: &mut impl Write) -> Result<()> {
    let lat = bundle.lattice();
    let (s, p, m, n) = (
        bundle.scenarios() as u64,
        bundle.paths() as u64,
        lat.grid().steps() as u64,
        bundle.dimension() as u64,
    );
    let g = lat.generators().len() as u64;
    w.write_all(BUNDLE_MAGIC)?;
    w.write_all(&BUNDLE_VERSION.to_le_bytes())?;
    for v in [s, p, m, n, g, bundle.seed()] {
        w.write_all(&v.to_le_bytes())?;
    }
    for v in [lat.grid().t_start(), lat.grid().t_end()] {
        w.write_all(&v.to_le_bytes())?;
    }
    for gen in lat.generators() {
        for v in gen.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    for scenario in 0..bundle.scenarios() {
        for &idx in lat.control(scenario) {
            w.write_all(&(idx as u64).to_le_bytes())?;
        }
    }
    for v in bundle.b().values().iter() {
        w.write_all(&v.to_le_bytes())?;
    }
    for v in bundle.qv().iter() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Deserializes a bundle written by [`write_bundle`], re-validating all
/// structural invariants (PSD generators, control indices, finiteness).
pub fn read_bundle(r: &mut impl Read) -> Result<GBMBundle> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != BUNDLE_MAGIC {
        return Err(EngineError::Contract("not a bundle file (bad magic)".into()));
    }
    let version = read_u32(r)?;
    if version != BUNDLE_VERSION {
        return Err(EngineError::Contract(format!(
            "unsupported bundle version {version}"
        )));
    }
    let s = read_u64(r)? as usize;
    let p = read_u64(r)? as usize;
    let m = read_u64(r)? as usize;
    let n = read_u64(r)? as usize;
    let g = read_u64(r)? as usize;
    let seed = read_u64(r)?;
    let t_start = read_f64(r)?;
    let t_end = read_f64(r)?;
    let max_elems = 1usize << 33;
    let path_elems = s
        .checked_mul(p)
        .and_then(|v| v.checked_mul(m + 1))
        .and_then(|v| v.checked_mul(n))
        .filter(|&v| v > 0 && v <= max_elems)
        .ok_or_else(|| EngineError::Contract("bundle header shape out of range".into()))?;
    let grid = TimeGrid::new(t_start, t_end, m)?;

    let mut generators = Vec::with_capacity(g);
    for _ in 0..g {
        let mut gen = Array2::zeros((n, n));
        for v in gen.iter_mut() {
            *v = read_f64(r)?;
        }
        generators.push(gen);
    }
    let mut controls = Vec::with_capacity(s);
    for _ in 0..s {
        let mut row = Vec::with_capacity(m);
        for _ in 0..m {
            row.push(read_u64(r)? as usize);
        }
        controls.push(row);
    }
    let lattice = ControlLattice::from_parts(grid.clone(), generators, controls)?;

    let mut bvals = Vec::with_capacity(path_elems);
    for _ in 0..path_elems {
        bvals.push(read_f64(r)?);
    }
    let b = Array4::from_shape_vec((s, p, m + 1, n), bvals)
        .map_err(|e| EngineError::Contract(format!("bundle path block malformed: {e}")))?;
    let qv_elems = s * (m + 1) * n * n;
    let mut qvals = Vec::with_capacity(qv_elems);
    for _ in 0..qv_elems {
        qvals.push(read_f64(r)?);
    }
    let qv = Array4::from_shape_vec((s, m + 1, n, n), qvals)
        .map_err(|e| EngineError::Contract(format!("bundle covariation block malformed: {e}")))?;
    ensure_finite(qv.iter(), "loaded covariation tensor")?;
    Ok(GBMBundle {
        b: ProcessEnsemble::new(b, grid)?,
        qv,
        lattice,
        seed,
    })
}

pub fn save_bundle(bundle: &GBMBundle, path: &Path) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_bundle(bundle, &mut file)?;
    use std::io::Write as _;
    file.flush()?;
    Ok(())
}

pub fn load_bundle(path: &Path) -> Result<GBMBundle> {
    let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
    read_bundle(&mut file)
}

fn ensure_finite<'a>(values: impl Iterator<Item = &'a f64>, context: &str) -> Result<()> {
    for (i, v) in values.enumerate() {
        if !v.is_finite() {
            return Err(EngineError::NonFinite {
                context: format!("{context} (flat index {i})"),
            });
        }
    }
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

fn read_f64(r: &mut impl Read) -> Result<f64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(f64::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::uncertainty::{build_controls, ControlStrategy, UncertaintySet};
    use ndarray::Array2;

    fn singleton_bundle(c: f64, steps: usize, paths: usize, seed: u64) -> GBMBundle {
        let set = UncertaintySet::singleton(Array2::from_elem((1, 1), c)).unwrap();
        let grid = TimeGrid::new(0.0, 1.0, steps).unwrap();
        let lat = build_controls(&set, &grid, &ControlStrategy::ConstantVertices, 1).unwrap();
        simulate(&lat, paths, seed).unwrap()
    }

    fn interval_bundle(steps: usize, paths: usize, seed: u64) -> GBMBundle {
        let set = UncertaintySet::interval_1d(0.5, 1.0).unwrap();
        let grid = TimeGrid::new(0.0, 1.0, steps).unwrap();
        let lat = build_controls(&set, &grid, &ControlStrategy::ConstantVertices, 2).unwrap();
        simulate(&lat, paths, seed).unwrap()
    }

    /// Independent oracle for the discrete quadratic variation: the sum of
    /// squared increments, which the definition telescopes to algebraically.
    fn squared_increment_oracle(bundle: &GBMBundle, a: &[f64], s: usize, p: usize) -> Vec<f64> {
        let bv = bundle.b().values();
        let nodes = bundle.grid().steps() + 1;
        let proj = |k: usize| -> f64 {
            a.iter()
                .enumerate()
                .map(|(j, aj)| aj * bv[(s, p, k, j)])
                .sum()
        };
        let mut acc = 0.0;
        let mut out = vec![0.0; nodes];
        for k in 1..nodes {
            let d = proj(k) - proj(k - 1);
            acc += d * d;
            out[k] = acc;
        }
        out
    }

    #[test]
    fn zero_volatility_gives_zero_paths_and_qv() {
        let bundle = singleton_bundle(0.0, 8, 16, 1);
        assert!(bundle.b().values().iter().all(|&v| v == 0.0));
        assert!(bundle.qv().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn paths_start_at_zero() {
        let bundle = interval_bundle(8, 32, 2);
        for s in 0..bundle.scenarios() {
            for p in 0..bundle.paths() {
                assert_eq!(bundle.b().values()[(s, p, 0, 0)], 0.0);
            }
        }
    }

    #[test]
    fn terminal_variance_matches_brownian_scaling() {
        // Oracle: classical Brownian scaling Var(B_T) = c^2 T.
        let c = 1.5;
        let paths = 4000;
        let bundle = singleton_bundle(c, 4, paths, 3);
        let term = bundle.b().terminal();
        let mean: f64 = term.values().iter().sum::<f64>() / paths as f64;
        let var: f64 =
            term.values().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / paths as f64;
        let expected = c * c;
        let tol = 5.0 * expected / (paths as f64).sqrt();
        assert!(
            (var - expected).abs() <= tol,
            "var {var} vs {expected} (tol {tol})"
        );
    }

    #[test]
    fn constant_control_qv_hits_both_interval_endpoints_exactly() {
        // steps = 16 keeps every dt product a power of two, so the analytic
        // accumulation is exact in binary floating point.
        let bundle = interval_bundle(16, 1, 4);
        let m = bundle.grid().steps();
        let mut terminal: Vec<f64> = (0..bundle.scenarios())
            .map(|s| bundle.qv_quadratic(s, m, &[1.0], &[1.0]))
            .collect();
        terminal.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(terminal, vec![0.25, 1.0]);
    }

    #[test]
    fn qv_is_constant_across_paths_and_nondecreasing_psd() {
        let m1 = Array2::from_shape_vec((2, 2), vec![1.0, 0.3, 0.3, 0.8]).unwrap();
        let m2 = Array2::from_shape_vec((2, 2), vec![0.5, 0.0, 0.0, 1.2]).unwrap();
        let set = UncertaintySet::finite_set(vec![m1, m2]).unwrap();
        let grid = TimeGrid::new(0.0, 1.0, 8).unwrap();
        let lat = build_controls(
            &set,
            &grid,
            &ControlStrategy::RandomSwitching { seed: 9, switch_count: 2 },
            4,
        )
        .unwrap();
        let bundle = simulate(&lat, 3, 5).unwrap();
        for s in 0..bundle.scenarios() {
            for k in 0..8 {
                let mut inc = Array2::zeros((2, 2));
                for i in 0..2 {
                    for j in 0..2 {
                        inc[(i, j)] =
                            bundle.qv()[(s, k + 1, i, j)] - bundle.qv()[(s, k, i, j)];
                        assert_eq!(
                            bundle.qv()[(s, k, i, j)],
                            bundle.qv()[(s, k, j, i)],
                            "symmetry"
                        );
                    }
                }
                assert!(
                    crate::uncertainty::min_symmetric_eigenvalue(&inc) >= -1e-12,
                    "PSD increment"
                );
            }
        }
    }

    #[test]
    fn empirical_qv_equals_squared_increment_oracle() {
        let bundle = interval_bundle(32, 8, 6);
        let emp = empirical_qv(&bundle, &[1.0]).unwrap();
        for s in 0..bundle.scenarios() {
            for p in 0..bundle.paths() {
                let oracle = squared_increment_oracle(&bundle, &[1.0], s, p);
                for (k, expect) in oracle.iter().enumerate() {
                    let got = emp.values()[(s, p, k, 0)];
                    assert!(
                        (got - expect).abs() <= 1e-10 * (1.0 + expect.abs()),
                        "node {k}: {got} vs {expect}"
                    );
                }
            }
        }
    }

    #[test]
    fn empirical_qv_concentrates_on_analytic_value() {
        let steps = 256;
        let paths = 2000;
        let bundle = singleton_bundle(1.0, steps, paths, 7);
        let emp = empirical_qv(&bundle, &[1.0]).unwrap();
        let analytic = bundle.qv_quadratic(0, steps, &[1.0], &[1.0]);
        let mean_abs_dev: f64 = (0..paths)
            .map(|p| (emp.values()[(0, p, steps, 0)] - analytic).abs())
            .sum::<f64>()
            / paths as f64;
        // sd of the terminal empirical QV is T sqrt(2/m); 1.5x of it bounds
        // the mean absolute deviation with a wide margin.
        let tol = 1.5 * (2.0 / steps as f64).sqrt();
        assert!(mean_abs_dev <= tol, "deviation {mean_abs_dev} vs tol {tol}");
    }

    #[test]
    fn empirical_qv_zero_direction_vanishes() {
        let bundle = interval_bundle(8, 4, 8);
        let emp = empirical_qv(&bundle, &[0.0]).unwrap();
        assert!(emp.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn same_seed_reproduces_and_seeds_differ() {
        let a = interval_bundle(16, 50, 11);
        let b = interval_bundle(16, 50, 11);
        let c = interval_bundle(16, 50, 12);
        assert_eq!(a.b().values(), b.b().values());
        assert_ne!(a.b().values(), c.b().values());
    }

    #[test]
    fn thread_count_does_not_change_results() {
        let run = |threads: usize| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| interval_bundle(16, 64, 13))
        };
        let one = run(1);
        let four = run(4);
        assert_eq!(one.b().values(), four.b().values());
        assert_eq!(one.qv(), four.qv());
    }

    #[test]
    fn binary_roundtrip_preserves_everything() {
        let bundle = interval_bundle(8, 6, 14);
        let mut buf = Vec::new();
        write_bundle(&bundle, &mut buf).unwrap();
        let loaded = read_bundle(&mut buf.as_slice()).unwrap();
        assert_eq!(bundle.b().values(), loaded.b().values());
        assert_eq!(bundle.qv(), loaded.qv());
        assert_eq!(bundle.seed(), loaded.seed());
        assert_eq!(bundle.grid(), loaded.grid());
        for s in 0..bundle.scenarios() {
            assert_eq!(bundle.lattice().control(s), loaded.lattice().control(s));
        }
    }

    #[test]
    fn corrupt_magic_is_rejected() {
        let bundle = interval_bundle(4, 2, 15);
        let mut buf = Vec::new();
        write_bundle(&bundle, &mut buf).unwrap();
        buf[0] ^= 0xff;
        assert!(read_bundle(&mut buf.as_slice()).is_err());
    }

    #[test]
    fn non_finite_values_rejected_at_construction() {
        let mut vals = Array3::zeros((1, 2, 1));
        vals[(0, 1, 0)] = f64::NAN;
        assert!(RandomVariable::new(vals).is_err());
        let mut vals = Array4::zeros((1, 2, 3, 1));
        vals[(0, 0, 2, 0)] = f64::INFINITY;
        let grid = TimeGrid::new(0.0, 1.0, 2).unwrap();
        assert!(ProcessEnsemble::new(vals, grid).is_err());
    }

    #[test]
    fn process_grid_mismatch_rejected() {
        let vals = Array4::zeros((1, 2, 3, 1));
        let grid = TimeGrid::new(0.0, 1.0, 5).unwrap();
        assert!(ProcessEnsemble::new(vals, grid).is_err());
    }

    #[test]
    fn zero_paths_rejected() {
        let set = UncertaintySet::singleton(Array2::eye(1)).unwrap();
        let grid = TimeGrid::new(0.0, 1.0, 4).unwrap();
        let lat = build_controls(&set, &grid, &ControlStrategy::ConstantVertices, 1).unwrap();
        assert!(simulate(&lat, 0, 1).is_err());
    }
}
