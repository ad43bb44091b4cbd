//! Forward, backward and adjoint solves bundled for one control.

use rayon::prelude::*;

use crate::adjoint::{solve_adjoint, AdjointState};
use crate::backward::{solve_backward, with_driver_args, BackwardTriple};
use crate::error::Result;
use crate::forward::{simulate_forward, ParticleEnsemble};
use crate::model::{CoefficientModel, ControlProcess};
use crate::paths::{mean, stderr, NoiseEnsemble, TimeGrid};
use crate::regression::RegressionBasis;

/// Monte Carlo estimate of the objective
/// `J = E[sum_k f_k dt + h1(Y_0) + h2(X_N, E[psi(X_N)])]`.
///
/// `per_particle` has mean `value`; the `h1` term is linearised around `Y_0`
/// through the residuals `Y_1 + g_0 dt - Y_0` so that its sampling noise is
/// visible even when `Y_0` is a single regression intercept. Differences of
/// `per_particle` across controls on common noise give paired errors.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveEstimate {
    pub value: f64,
    pub se: f64,
    pub per_particle: Vec<f64>,
}

/// State and value processes for one control on one noise ensemble.
#[derive(Debug, Clone)]
pub struct StateSolution {
    pub control: ControlProcess,
    pub ens: ParticleEnsemble,
    pub triple: BackwardTriple,
}

/// A [`StateSolution`] together with its adjoint processes.
#[derive(Debug, Clone)]
pub struct Solution {
    pub control: ControlProcess,
    pub ens: ParticleEnsemble,
    pub triple: BackwardTriple,
    pub adjoint: AdjointState,
}

pub fn solve_state(
    model: &CoefficientModel,
    grid: &TimeGrid,
    control: &ControlProcess,
    noise: &NoiseEnsemble,
    basis: &RegressionBasis,
) -> Result<StateSolution> {
    let ens = simulate_forward(model, control, noise, grid)?;
    let triple = solve_backward(model, &ens, noise, control, basis)?;
    Ok(StateSolution {
        control: control.clone(),
        ens,
        triple,
    })
}

pub fn solve(
    model: &CoefficientModel,
    grid: &TimeGrid,
    control: &ControlProcess,
    noise: &NoiseEnsemble,
    basis: &RegressionBasis,
) -> Result<Solution> {
    let st = solve_state(model, grid, control, noise, basis)?;
    let adjoint = solve_adjoint(model, &st.ens, noise, &st.triple, control, basis)?;
    Ok(Solution {
        control: st.control,
        ens: st.ens,
        triple: st.triple,
        adjoint,
    })
}

/// Objective estimate from forward and backward solutions.
pub fn objective(
    model: &CoefficientModel,
    ens: &ParticleEnsemble,
    triple: &BackwardTriple,
    control: &ControlProcess,
) -> ObjectiveEstimate {
    let grid = ens.grid();
    let dt = grid.dt();
    let n = ens.n_particles();
    let n_marks = model.n_marks();
    let last = grid.n_steps();

    let mut per: Vec<f64> = vec![0.0; n];
    for k in 0..last {
        let f: Vec<f64> = (0..n)
            .into_par_iter()
            .map_init(
                || (vec![0.0; ens.n_lifts()], vec![0.0; n_marks]),
                |bufs, i| with_driver_args(ens, triple, control, k, i, bufs, |a| model.running.eval(a)),
            )
            .collect();
        for (p, v) in per.iter_mut().zip(&f) {
            *p += v * dt;
        }
    }
    let g0: Vec<f64> = (0..n)
        .into_par_iter()
        .map_init(
            || (vec![0.0; ens.n_lifts()], vec![0.0; n_marks]),
            |bufs, i| with_driver_args(ens, triple, control, 0, i, bufs, |a| model.driver.eval(a)),
        )
        .collect();
    let y0 = triple.y.col(0);
    let y1 = triple.y.col(1.min(last));
    for i in 0..n {
        let resid = if last > 0 {
            y1[i] + g0[i] * dt - y0[i]
        } else {
            0.0
        };
        per[i] += model.h1.eval(y0[i]) + model.h1.deriv(y0[i]) * resid;
    }
    if let Some(h2) = &model.h2 {
        let x = ens.x_main(last);
        let nbar = x.iter().map(|v| model.psi.eval(*v)).sum::<f64>() / n as f64;
        for (p, xi) in per.iter_mut().zip(x) {
            *p += h2.eval(*xi, nbar);
        }
    }
    ObjectiveEstimate {
        value: mean(&per),
        se: stderr(&per),
        per_particle: per,
    }
}

impl StateSolution {
    pub fn objective(&self, model: &CoefficientModel) -> ObjectiveEstimate {
        objective(model, &self.ens, &self.triple, &self.control)
    }
}

impl Solution {
    pub fn objective(&self, model: &CoefficientModel) -> ObjectiveEstimate {
        objective(model, &self.ens, &self.triple, &self.control)
    }
}
