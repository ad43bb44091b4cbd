//! Interacting-particle Euler scheme for the forward state.

use rayon::prelude::*;

use crate::delay::DelaySpec;
use crate::error::{Error, Result};
use crate::model::{Args, CoefficientModel, ControlProcess, MeanField};
use crate::paths::{NoiseEnsemble, ParticlePaths, TimeGrid, Trajectory};

/// Forward particle system: per-particle states on every node (prehistory
/// included) and the mean-field paths on the main grid.
#[derive(Debug, Clone)]
pub struct ParticleEnsemble {
    grid: TimeGrid,
    delay: DelaySpec,
    x: ParticlePaths,
    mean_field: Vec<f64>,
    mf_dim: usize,
}

impl ParticleEnsemble {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn delay(&self) -> &DelaySpec {
        &self.delay
    }

    pub fn n_particles(&self) -> usize {
        self.x.n_particles()
    }

    pub fn n_lifts(&self) -> usize {
        self.delay.len()
    }

    pub fn mean_field_dim(&self) -> usize {
        self.mf_dim
    }

    /// States on the global node index.
    pub fn paths(&self) -> &ParticlePaths {
        &self.x
    }

    /// `X(t_k)` of all particles at main node `k`.
    pub fn x_main(&self, k: usize) -> &[f64] {
        self.x.col(self.grid.global(k))
    }

    /// Lifted delayed state of particle `i` at main node `k`.
    pub fn lifts(&self, i: usize, k: usize, out: &mut [f64]) {
        let j = self.grid.global(k);
        for (o, mu) in out.iter_mut().zip(self.delay.measures()) {
            *o = mu
                .atoms()
                .iter()
                .map(|a| a.mass * self.x.get(i, j - a.lag))
                .sum();
        }
    }

    /// Lift `l` of every particle at main node `k`.
    pub fn lift_column(&self, l: usize, k: usize) -> Vec<f64> {
        let j = self.grid.global(k);
        let mu = &self.delay.measures()[l];
        let mut out = vec![0.0; self.n_particles()];
        for a in mu.atoms() {
            for (o, x) in out.iter_mut().zip(self.x.col(j - a.lag)) {
                *o += a.mass * x;
            }
        }
        out
    }

    /// Mean-field argument `m` at main node `k`.
    pub fn mean_field_at(&self, k: usize) -> &[f64] {
        &self.mean_field[k * self.mf_dim..(k + 1) * self.mf_dim]
    }

    /// Regression variables at main node `k`: the current state and every
    /// lift that is not the undelayed state itself.
    pub fn features(&self, k: usize) -> Vec<Vec<f64>> {
        let mut vars = vec![self.x_main(k).to_vec()];
        for (l, mu) in self.delay.measures().iter().enumerate() {
            if !mu.is_dirac_zero() {
                vars.push(self.lift_column(l, k));
            }
        }
        vars
    }

    pub fn trajectory(&self, i: usize) -> Trajectory {
        Trajectory::from_values(self.grid, self.x.particle(i)).expect("length matches grid")
    }

    /// Cross-sectional mean of `X` on the main grid.
    pub fn mean_path(&self) -> Vec<f64> {
        (0..self.grid.n_main()).map(|k| self.x.mean(self.grid.global(k))).collect()
    }

    pub fn stderr_path(&self) -> Vec<f64> {
        (0..self.grid.n_main()).map(|k| self.x.stderr(self.grid.global(k))).collect()
    }

    /// Mean-field paths recomputed from the stored states.
    pub fn recompute_mean_field(&self, model: &CoefficientModel) -> Vec<f64> {
        (0..self.grid.n_main())
            .flat_map(|k| mean_field_from_states(self, model, k))
            .collect()
    }

    /// Stored mean-field paths, main node major.
    pub fn mean_field_paths(&self) -> &[f64] {
        &self.mean_field
    }
}

fn mean_field_from_states(ens: &ParticleEnsemble, model: &CoefficientModel, k: usize) -> Vec<f64> {
    let n = ens.n_particles() as f64;
    match &model.mean_field {
        MeanField::Lifted => (0..ens.n_lifts())
            .map(|l| ens.lift_column(l, k).iter().sum::<f64>() / n)
            .collect(),
        MeanField::Phi(phi) => vec![ens.x_main(k).iter().map(|x| phi.eval(*x)).sum::<f64>() / n],
    }
}

/// Runs the Euler scheme
/// `X_{k+1} = X_k + b dt + sigma dB_k + sum_j gamma(e_j) (N_kj - w_j dt)`
/// with all coefficients evaluated at the left endpoint and the mean field
/// taken from the ensemble at step `k`.
pub fn simulate_forward(
    model: &CoefficientModel,
    control: &ControlProcess,
    noise: &NoiseEnsemble,
    grid: &TimeGrid,
) -> Result<ParticleEnsemble> {
    model.check_grid(grid)?;
    if !noise.is_compatible(grid, &model.jumps) {
        return Err(Error::Shape(
            "noise ensemble does not match the grid or jump spec".into(),
        ));
    }
    if control.grid().n_main() != grid.n_main() {
        return Err(Error::Shape("control is defined on a different grid".into()));
    }
    let n = noise.n_particles();
    if let Some(m) = control.n_particles() {
        if m != n {
            return Err(Error::Shape(format!(
                "per-particle control has {m} particles, noise has {n}"
            )));
        }
    }
    let n_lifts = model.n_lifts();
    let mf_dim = model.mean_field_dim();
    let marks = model.jumps.marks().to_vec();
    let weights = model.jumps.weights().to_vec();
    let dt = grid.dt();

    let mut ens = ParticleEnsemble {
        grid: *grid,
        delay: model.delay.clone(),
        x: ParticlePaths::zeros(n, grid.n_nodes()),
        mean_field: vec![0.0; grid.n_main() * mf_dim],
        mf_dim,
    };
    for j in 0..grid.n_pre() {
        let v = (model.prehistory)(grid.node_time(j));
        ens.x.col_mut(j).fill(v);
    }

    for k in 0..=grid.n_steps() {
        // Lifts of every particle, particle-major.
        let lifts: Vec<f64> = (0..n)
            .into_par_iter()
            .flat_map_iter(|i| {
                let mut buf = vec![0.0; n_lifts];
                ens.lifts(i, k, &mut buf);
                buf
            })
            .collect();
        let m: Vec<f64> = match &model.mean_field {
            MeanField::Lifted => (0..n_lifts)
                .map(|l| (0..n).map(|i| lifts[i * n_lifts + l]).sum::<f64>() / n as f64)
                .collect(),
            MeanField::Phi(phi) => {
                vec![ens.x_main(k).iter().map(|x| phi.eval(*x)).sum::<f64>() / n as f64]
            }
        };
        ens.mean_field[k * mf_dim..(k + 1) * mf_dim].copy_from_slice(&m);
        if k == grid.n_steps() {
            break;
        }

        let t = grid.main_time(k);
        let j = grid.global(k);
        let dw = noise.dw(k);
        let x_now = ens.x.col(j);
        let next: Vec<f64> = (0..n)
            .into_par_iter()
            .map(|i| {
                let x_lift = &lifts[i * n_lifts..(i + 1) * n_lifts];
                let args = Args::forward(t, x_lift, &m, control.at(i, k));
                let mut x = x_now[i] + model.drift.eval(&args) * dt
                    + model.diffusion.eval(&args) * dw[i];
                for (jm, (&e, &w)) in marks.iter().zip(&weights).enumerate() {
                    let gamma = model.jump.eval(&args.with_mark(e));
                    x += gamma * noise.compensated(k, i, jm, w);
                }
                x
            })
            .collect();
        if let Some(bad) = next.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "forward state",
                particle: bad,
                step: k,
            });
        }
        ens.x.col_mut(j + 1).copy_from_slice(&next);
    }
    Ok(ens)
}

/// Mean-square diagnostics of a forward ensemble.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanSquareSummary {
    /// `E[int_0^T |X|^2 dt]` (left Riemann sum).
    pub integral: f64,
    /// `E[int_0^T e^{-kappa t} |X|^2 dt]`.
    pub weighted_integral: f64,
    /// `sup_t e^{-kappa t} E[|X(t)|^2]`.
    pub weighted_sup: f64,
    /// Running integral on the main grid.
    pub running: Vec<f64>,
    /// The running integral grows superlinearly over the last quarter.
    pub diverging: bool,
}

/// Mean-square norms of the forward state; see [`running_divergence`] for
/// the divergence flag.
pub fn mean_square_norms(ens: &ParticleEnsemble, kappa: f64) -> MeanSquareSummary {
    let grid = ens.grid();
    let dt = grid.dt();
    let second: Vec<f64> = (0..grid.n_main())
        .map(|k| {
            let c = ens.x_main(k);
            c.iter().map(|x| x * x).sum::<f64>() / c.len() as f64
        })
        .collect();
    summarize_second_moments(&second, dt, kappa)
}

pub(crate) fn summarize_second_moments(second: &[f64], dt: f64, kappa: f64) -> MeanSquareSummary {
    let mut running = Vec::with_capacity(second.len());
    let (mut integral, mut weighted, mut sup) = (0.0, 0.0, 0.0f64);
    running.push(0.0);
    for (k, s) in second.iter().enumerate() {
        let w = (-kappa * k as f64 * dt).exp();
        sup = sup.max(w * s);
        if k + 1 < second.len() {
            integral += s * dt;
            weighted += w * s * dt;
            running.push(integral);
        }
    }
    let diverging = running_divergence(&running);
    MeanSquareSummary {
        integral,
        weighted_integral: weighted,
        weighted_sup: sup,
        running,
        diverging,
    }
}

/// Superlinear growth test on a running integral: over the last quarter of
/// the horizon the increment of the second half exceeds the first half's by
/// more than 5%.
pub fn running_divergence(running: &[f64]) -> bool {
    let len = running.len();
    if len < 9 {
        return false;
    }
    let last = len - 1;
    let q = last - last / 4;
    let mid = (q + last) / 2;
    let (h1, h2) = ((mid - q) as f64, (last - mid) as f64);
    let first = (running[mid] - running[q]) / h1;
    let second = (running[last] - running[mid]) / h2;
    first > 0.0 && second > 1.05 * first
}
