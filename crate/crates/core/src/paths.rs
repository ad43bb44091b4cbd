//! Time grids with a prehistory segment, trajectories, finite jump measures
//! and the per-particle noise ensemble.
//!
//! Grid nodes are indexed globally from the start of the prehistory
//! (`-delta`) so that every delayed lookup `t + s`, `s` in `[-delta, 0]`, is
//! an exact node. Node `lag` (with `lag = delta / dt`) is time zero and is
//! shared by the prehistory and the main segment.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};

const RATIO_TOL: f64 = 1e-9;

/// Uniform grid on `[-delta, T]` with node zero at exactly `t = 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    dt: f64,
    lag: usize,
    n_steps: usize,
}

fn integral_ratio(num: f64, den: f64, name: &str) -> Result<usize> {
    let r = num / den;
    let rounded = r.round();
    if !r.is_finite() || (r - rounded).abs() > RATIO_TOL * r.abs().max(1.0) {
        return Err(Error::Grid(format!(
            "{name} = {num}/{den} = {r} is not an integer"
        )));
    }
    Ok(rounded as usize)
}

impl TimeGrid {
    /// Builds the grid for horizon `t_end`, step `dt` and delay `delta`.
    pub fn new(t_end: f64, dt: f64, delta: f64) -> Result<Self> {
        if !(t_end > 0.0) || !t_end.is_finite() {
            return Err(Error::Grid(format!("horizon must be positive, got {t_end}")));
        }
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(Error::Grid(format!("dt must be positive, got {dt}")));
        }
        if !(delta >= 0.0) || !delta.is_finite() {
            return Err(Error::Grid(format!("delta must be non-negative, got {delta}")));
        }
        let lag = integral_ratio(delta, dt, "delta/dt")?;
        let n_steps = integral_ratio(t_end, dt, "T/dt")?;
        if n_steps == 0 {
            return Err(Error::Grid(format!("T/dt = {t_end}/{dt} gives no steps")));
        }
        Ok(Self { dt, lag, n_steps })
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// Delay length in steps.
    pub fn lag(&self) -> usize {
        self.lag
    }

    pub fn delta(&self) -> f64 {
        self.lag as f64 * self.dt
    }

    /// Number of Euler steps on the main segment.
    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    /// Prehistory nodes covering `[-delta, 0]`, node zero included.
    pub fn n_pre(&self) -> usize {
        self.lag + 1
    }

    /// Main nodes covering `[0, T]`, node zero included.
    pub fn n_main(&self) -> usize {
        self.n_steps + 1
    }

    /// Total node count; node zero is shared by both segments.
    pub fn n_nodes(&self) -> usize {
        self.lag + self.n_steps + 1
    }

    pub fn t_start(&self) -> f64 {
        -self.delta()
    }

    pub fn t_end(&self) -> f64 {
        self.n_steps as f64 * self.dt
    }

    /// Time of global node `j`.
    pub fn node_time(&self, j: usize) -> f64 {
        (j as f64 - self.lag as f64) * self.dt
    }

    /// Time of main node `k`.
    pub fn main_time(&self, k: usize) -> f64 {
        k as f64 * self.dt
    }

    /// Global index of main node `k`.
    pub fn global(&self, k: usize) -> usize {
        self.lag + k
    }

    pub fn node_times(&self) -> Vec<f64> {
        (0..self.n_nodes()).map(|j| self.node_time(j)).collect()
    }

    /// Main node index of an on-grid time.
    pub fn main_index(&self, t: f64) -> Result<usize> {
        let r = t / self.dt;
        let k = r.round();
        if k < 0.0 || k > self.n_steps as f64 || (r - k).abs() > 1e-6 {
            return Err(Error::OutOfRange {
                t,
                start: 0.0,
                end: self.t_end(),
            });
        }
        Ok(k as usize)
    }

    /// Same grid with a different horizon.
    pub fn with_horizon(&self, t_end: f64) -> Result<Self> {
        Self::new(t_end, self.dt, self.delta())
    }
}

/// Convenience wrapper matching the grid constructor.
pub fn make_grid(t_end: f64, dt: f64, delta: f64) -> Result<TimeGrid> {
    TimeGrid::new(t_end, dt, delta)
}

/// A scalar path over every node of a grid, prehistory included.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    grid: TimeGrid,
    values: Vec<f64>,
}

impl Trajectory {
    pub fn zeros(grid: TimeGrid) -> Self {
        Self {
            grid,
            values: vec![0.0; grid.n_nodes()],
        }
    }

    pub fn from_values(grid: TimeGrid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.n_nodes() {
            return Err(Error::Shape(format!(
                "trajectory has {} values, grid has {} nodes",
                values.len(),
                grid.n_nodes()
            )));
        }
        Ok(Self { grid, values })
    }

    /// Path that is zero on the prehistory and `main[k]` on main node `k`.
    pub fn from_main(grid: TimeGrid, main: &[f64]) -> Result<Self> {
        if main.len() != grid.n_main() {
            return Err(Error::Shape(format!(
                "main segment has {} values, grid has {} main nodes",
                main.len(),
                grid.n_main()
            )));
        }
        let mut values = vec![0.0; grid.lag()];
        values.extend_from_slice(main);
        Ok(Self { grid, values })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Main segment, node zero first.
    pub fn main(&self) -> &[f64] {
        &self.values[self.grid.lag()..]
    }

    pub fn at_main(&self, k: usize) -> f64 {
        self.values[self.grid.global(k)]
    }

    /// Left-constant (cadlag) evaluation at an arbitrary time in the grid span.
    pub fn eval(&self, t: f64) -> Result<f64> {
        let g = &self.grid;
        let (start, end) = (g.t_start(), g.t_end());
        if t < start - 1e-12 || t > end + 1e-12 {
            return Err(Error::OutOfRange { t, start, end });
        }
        let pos = (t - start) / g.dt();
        let j = (pos + 1e-9).floor().max(0.0) as usize;
        Ok(self.values[j.min(g.n_nodes() - 1)])
    }

    /// Overwrites the prehistory nodes with `x0(t)`; main nodes other than
    /// zero are left untouched.
    pub fn set_prehistory(mut self, x0: impl Fn(f64) -> f64) -> Self {
        for j in 0..self.grid.n_pre() {
            self.values[j] = x0(self.grid.node_time(j));
        }
        self
    }
}

/// Finitely supported Levy measure `nu = sum_j w_j * delta_{e_j}`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct JumpSpec {
    marks: Vec<f64>,
    weights: Vec<f64>,
}

impl JumpSpec {
    pub fn new(marks: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if marks.len() != weights.len() {
            return Err(Error::Model(format!(
                "{} jump marks but {} weights",
                marks.len(),
                weights.len()
            )));
        }
        if let Some(e) = marks.iter().find(|e| **e == 0.0 || !e.is_finite()) {
            return Err(Error::Model(format!("jump mark {e} must be finite and nonzero")));
        }
        if let Some(w) = weights.iter().find(|w| !(**w > 0.0) || !w.is_finite()) {
            return Err(Error::Model(format!("jump weight {w} must be positive and finite")));
        }
        Ok(Self { marks, weights })
    }

    pub fn none() -> Self {
        Self::default()
    }

    pub fn marks(&self) -> &[f64] {
        &self.marks
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.marks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.marks.is_empty()
    }

    pub fn total_intensity(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// `int f d(nu)` as the exact finite sum.
    pub fn integrate(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.marks
            .iter()
            .zip(&self.weights)
            .map(|(e, w)| w * f(*e))
            .sum()
    }
}

/// Per-particle RNG substream keyed by `(seed, particle)`.
pub fn particle_stream(seed: u64, particle: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(particle);
    rng
}

/// Brownian increments and Poisson jump counts for every particle and step.
///
/// Storage is step-major: entry `(k, i)` lives at `k * n_particles + i`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseEnsemble {
    n_particles: usize,
    n_steps: usize,
    n_marks: usize,
    dt: f64,
    seed: u64,
    brownian: Vec<f64>,
    jumps: Vec<u32>,
}

impl NoiseEnsemble {
    pub fn n_particles(&self) -> usize {
        self.n_particles
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn n_marks(&self) -> usize {
        self.n_marks
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Brownian increments of all particles over step `k`.
    pub fn dw(&self, k: usize) -> &[f64] {
        &self.brownian[k * self.n_particles..(k + 1) * self.n_particles]
    }

    pub fn jump_count(&self, k: usize, i: usize, j: usize) -> u32 {
        self.jumps[(k * self.n_particles + i) * self.n_marks + j]
    }

    /// Compensated jump increment `N_j - w_j dt` of particle `i` over step `k`.
    pub fn compensated(&self, k: usize, i: usize, j: usize, weight: f64) -> f64 {
        self.jump_count(k, i, j) as f64 - weight * self.dt
    }

    pub fn is_compatible(&self, grid: &TimeGrid, jumps: &JumpSpec) -> bool {
        self.n_steps == grid.n_steps() && self.dt == grid.dt() && self.n_marks == jumps.len()
    }
}

/// Samples the noise of `n_particles` particles, particle `i` drawing from
/// substream `(seed, i)`.
pub fn sample_noise(
    grid: &TimeGrid,
    jumps: &JumpSpec,
    n_particles: usize,
    seed: u64,
) -> Result<NoiseEnsemble> {
    let keys: Vec<(u64, u64)> = (0..n_particles as u64).map(|i| (seed, i)).collect();
    sample_noise_keyed(grid, jumps, &keys, seed)
}

/// Samples noise where particle `i` uses the substream `keys[i]`.
pub fn sample_noise_keyed(
    grid: &TimeGrid,
    jumps: &JumpSpec,
    keys: &[(u64, u64)],
    seed: u64,
) -> Result<NoiseEnsemble> {
    let n = keys.len();
    if n == 0 {
        return Err(Error::Precondition("n_particles must be at least 1".into()));
    }
    let n_steps = grid.n_steps();
    let n_marks = jumps.len();
    let dt = grid.dt();
    let sqrt_dt = dt.sqrt();
    let poissons = jumps
        .weights()
        .iter()
        .map(|w| {
            Poisson::new(w * dt).map_err(|e| Error::Model(format!("poisson rate {}: {e}", w * dt)))
        })
        .collect::<Result<Vec<_>>>()?;

    let columns: Vec<(Vec<f64>, Vec<u32>)> = keys
        .par_iter()
        .map(|&(s, stream)| {
            let mut rng = particle_stream(s, stream);
            let mut dw = Vec::with_capacity(n_steps);
            let mut counts = Vec::with_capacity(n_steps * n_marks);
            for _ in 0..n_steps {
                let z: f64 = rng.sample(StandardNormal);
                dw.push(z * sqrt_dt);
                for p in &poissons {
                    let c: f64 = p.sample(&mut rng);
                    counts.push(c as u32);
                }
            }
            (dw, counts)
        })
        .collect();

    let mut brownian = vec![0.0; n * n_steps];
    let mut jump_counts = vec![0u32; n * n_steps * n_marks];
    for (i, (dw, counts)) in columns.into_iter().enumerate() {
        for k in 0..n_steps {
            brownian[k * n + i] = dw[k];
            let dst = (k * n + i) * n_marks;
            jump_counts[dst..dst + n_marks]
                .copy_from_slice(&counts[k * n_marks..(k + 1) * n_marks]);
        }
    }
    Ok(NoiseEnsemble {
        n_particles: n,
        n_steps,
        n_marks,
        dt,
        seed,
        brownian,
        jumps: jump_counts,
    })
}

/// Step-major matrix of per-particle values, one column per node or step.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticlePaths {
    n_particles: usize,
    n_cols: usize,
    data: Vec<f64>,
}

impl ParticlePaths {
    pub fn zeros(n_particles: usize, n_cols: usize) -> Self {
        Self {
            n_particles,
            n_cols,
            data: vec![0.0; n_particles * n_cols],
        }
    }

    pub fn n_particles(&self) -> usize {
        self.n_particles
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn col(&self, k: usize) -> &[f64] {
        &self.data[k * self.n_particles..(k + 1) * self.n_particles]
    }

    pub fn col_mut(&mut self, k: usize) -> &mut [f64] {
        &mut self.data[k * self.n_particles..(k + 1) * self.n_particles]
    }

    pub fn get(&self, i: usize, k: usize) -> f64 {
        self.data[k * self.n_particles + i]
    }

    pub fn set(&mut self, i: usize, k: usize, v: f64) {
        self.data[k * self.n_particles + i] = v;
    }

    /// Path of particle `i` across all columns.
    pub fn particle(&self, i: usize) -> Vec<f64> {
        (0..self.n_cols).map(|k| self.get(i, k)).collect()
    }

    pub fn mean(&self, k: usize) -> f64 {
        mean(self.col(k))
    }

    pub fn stderr(&self, k: usize) -> f64 {
        stderr(self.col(k))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Sequential mean; the summation order is fixed for reproducibility.
pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub fn variance(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 2 {
        return 0.0;
    }
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1) as f64
}

/// Standard error of the sample mean.
pub fn stderr(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    (variance(xs) / xs.len() as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_nodes_with_prehistory() {
        let g = make_grid(1.0, 0.25, 0.5).unwrap();
        assert_eq!(g.node_times(), vec![-0.5, -0.25, 0.0, 0.25, 0.5, 0.75, 1.0]);
        assert_eq!(g.n_pre(), 3);
        assert_eq!(g.n_main(), 5);
        assert_eq!(g.node_time(g.global(0)), 0.0);
    }

    #[test]
    fn grid_rejects_non_integral_ratio() {
        let err = make_grid(1.0, 0.3, 0.5).unwrap_err();
        assert!(err.to_string().contains("0.5/0.3"), "{err}");
    }

    #[test]
    fn grid_without_delay() {
        let g = make_grid(1.0, 0.25, 0.0).unwrap();
        assert_eq!(g.n_pre(), 1);
        assert_eq!(g.node_times()[0], 0.0);
        assert_eq!(g.n_nodes(), 5);
    }

    #[test]
    fn grid_spacing_is_uniform() {
        let g = make_grid(3.0, 0.01, 0.37).unwrap();
        let ts = g.node_times();
        for w in ts.windows(2) {
            assert!((w[1] - w[0] - 0.01).abs() < 1e-12);
        }
    }

    #[test]
    fn prehistory_values() {
        let g = make_grid(1.0, 0.25, 0.5).unwrap();
        let tr = Trajectory::zeros(g).set_prehistory(|_| 5.0);
        assert_eq!(&tr.values()[..3], &[5.0, 5.0, 5.0]);
        assert_eq!(tr.at_main(1), 0.0);

        let tr = Trajectory::zeros(g).set_prehistory(|t| t);
        assert_eq!(tr.eval(-0.25).unwrap(), -0.25);

        let g0 = make_grid(1.0, 0.25, 0.0).unwrap();
        let tr = Trajectory::zeros(g0).set_prehistory(|_| 3.0);
        assert_eq!(tr.values(), &[3.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn cadlag_evaluation() {
        let g = make_grid(1.0, 0.25, 0.0).unwrap();
        let tr = Trajectory::from_main(g, &[0.0, 1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(tr.eval(0.3).unwrap(), 1.0);
        assert_eq!(tr.eval(0.5).unwrap(), 2.0);
        assert_eq!(tr.eval(0.4999).unwrap(), 1.0);
        assert!(tr.eval(1.5).is_err());
    }

    #[test]
    fn empty_jump_spec_gives_zero_counts() {
        let g = make_grid(1.0, 0.1, 0.0).unwrap();
        let noise = sample_noise(&g, &JumpSpec::none(), 10, 1).unwrap();
        assert_eq!(noise.n_marks(), 0);
        assert!(noise.jumps.is_empty());
    }

    #[test]
    fn noise_is_reproducible() {
        let g = make_grid(1.0, 0.1, 0.0).unwrap();
        let js = JumpSpec::new(vec![1.0, -0.5], vec![2.0, 1.0]).unwrap();
        let a = sample_noise(&g, &js, 50, 42).unwrap();
        let b = sample_noise(&g, &js, 50, 42).unwrap();
        assert_eq!(a, b);
        let c = sample_noise(&g, &js, 50, 43).unwrap();
        assert_ne!(a.brownian, c.brownian);
    }

    #[test]
    fn extending_particles_keeps_prefix() {
        let g = make_grid(1.0, 0.1, 0.0).unwrap();
        let a = sample_noise(&g, &JumpSpec::none(), 10, 7).unwrap();
        let b = sample_noise(&g, &JumpSpec::none(), 20, 7).unwrap();
        for k in 0..g.n_steps() {
            assert_eq!(a.dw(k), &b.dw(k)[..10]);
        }
    }

    #[test]
    fn poisson_count_mean() {
        // n = 1e5, w = 2, dt = 0.01: mean count 0.02 within 3 * sqrt(0.02 / 1e5).
        let g = make_grid(0.01, 0.01, 0.0).unwrap();
        let js = JumpSpec::new(vec![1.0], vec![2.0]).unwrap();
        let n = 100_000;
        let noise = sample_noise(&g, &js, n, 42).unwrap();
        let m = (0..n).map(|i| noise.jump_count(0, i, 0) as f64).sum::<f64>() / n as f64;
        assert!((m - 0.02).abs() <= 3.0 * (0.02f64 / n as f64).sqrt(), "mean {m}");
    }

    #[test]
    fn brownian_moments() {
        let g = make_grid(0.05, 0.01, 0.0).unwrap();
        let n = 100_000;
        let noise = sample_noise(&g, &JumpSpec::none(), n, 3).unwrap();
        for k in 0..g.n_steps() {
            let dw = noise.dw(k);
            let m = mean(dw);
            let v = variance(dw);
            // se(mean) = sqrt(dt/n), se(var) = dt * sqrt(2/n)
            assert!(m.abs() < 4.0 * (0.01f64 / n as f64).sqrt(), "mean {m}");
            assert!((v - 0.01).abs() < 4.0 * 0.01 * (2.0 / n as f64).sqrt(), "var {v}");
        }
    }

    #[test]
    fn jump_spec_validation() {
        assert!(JumpSpec::new(vec![0.0], vec![1.0]).is_err());
        assert!(JumpSpec::new(vec![1.0], vec![-1.0]).is_err());
        assert!(JumpSpec::new(vec![1.0], vec![]).is_err());
        let js = JumpSpec::new(vec![1.0, 2.0], vec![0.5, 0.25]).unwrap();
        assert_eq!(js.total_intensity(), 0.75);
        assert_eq!(js.integrate(|e| e * e), 0.5 + 1.0);
    }
}
