//! Least-squares Monte Carlo backward induction for `(Y, Z, K)`.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::forward::ParticleEnsemble;
use crate::model::{Args, CoefficientModel, ControlProcess};
use crate::paths::{NoiseEnsemble, ParticlePaths};
use crate::regression::{Projector, RegressionBasis};

/// Backward solution on the main grid.
///
/// `y` has one column per main node; `y_cont`, `z` and each `k[j]` have one
/// column per step. `y_cont[k]` is the regressed continuation value
/// `E[Y_{k+1} | F_k]` and `n_cont[k]` its cross-sectional mean; both are the
/// Y-side arguments of the driver at step `k`.
#[derive(Debug, Clone)]
pub struct BackwardTriple {
    pub y: ParticlePaths,
    pub y_cont: ParticlePaths,
    pub n_cont: Vec<f64>,
    pub z: ParticlePaths,
    pub k: Vec<ParticlePaths>,
    /// Regression standard error of the continuation value per step.
    pub se: Vec<f64>,
    pub z_se: Vec<f64>,
    /// Per mark, per step.
    pub k_se: Vec<Vec<f64>>,
}

impl BackwardTriple {
    pub fn y0_mean(&self) -> f64 {
        self.y.mean(0)
    }

    /// Cross-sectional mean of `Y` on the main grid.
    pub fn mean_path(&self) -> Vec<f64> {
        (0..self.y.n_cols()).map(|k| self.y.mean(k)).collect()
    }
}

/// Fits the projector on the regression features of main node `k`.
pub fn projector_at(ens: &ParticleEnsemble, basis: &RegressionBasis, k: usize) -> Result<Projector> {
    let vars = ens.features(k);
    let refs: Vec<&[f64]> = vars.iter().map(|v| v.as_slice()).collect();
    Projector::fit(&refs, basis, k)
}

/// Conditional martingale coefficient `E[(a - b) w | F] / E[w^2 | F]`.
///
/// Both expectations are regressed on the same features, so the sampling
/// error of `w^2` around its known mean cancels to first order. The
/// denominator is floored at a quarter of `expected_sq`. Also returns the
/// regression standard error of the coefficient.
pub(crate) fn martingale_coefficient(
    proj: &Projector,
    next: &[f64],
    cont: &[f64],
    increment: impl Fn(usize) -> f64,
    expected_sq: f64,
) -> (Vec<f64>, f64) {
    let (prod, sq): (Vec<f64>, Vec<f64>) = next
        .iter()
        .zip(cont)
        .enumerate()
        .map(|(i, (a, b))| {
            let w = increment(i);
            ((a - b) * w, w * w)
        })
        .unzip();
    let (num, se) = proj.project_with_se(&prod);
    let den = proj.project(&sq);
    let values = num
        .into_iter()
        .zip(den)
        .map(|(a, d)| a / d.max(0.25 * expected_sq))
        .collect();
    (values, se / expected_sq)
}

/// Evaluates `f` on the driver arguments of particle `i` at step `k`.
pub(crate) fn with_driver_args<R>(
    ens: &ParticleEnsemble,
    triple: &BackwardTriple,
    control: &ControlProcess,
    step: usize,
    i: usize,
    bufs: &mut (Vec<f64>, Vec<f64>),
    f: impl FnOnce(&Args) -> R,
) -> R {
    let (lift, kv) = bufs;
    ens.lifts(i, step, lift);
    for (j, kj) in kv.iter_mut().enumerate() {
        *kj = triple.k[j].get(i, step);
    }
    let args = Args {
        t: ens.grid().main_time(step),
        x: lift,
        m: ens.mean_field_at(step),
        y: triple.y_cont.get(i, step),
        n: triple.n_cont[step],
        z: triple.z.get(i, step),
        k: kv,
        u: control.at(i, step),
        e: 0.0,
    };
    f(&args)
}

/// Backward induction from `Y(T) = a X(T)`:
/// `Y_k = E[Y_{k+1}|F_k] + g(..) dt`,
/// `Z_k = E[(Y_{k+1} - E[Y_{k+1}|F_k]) dB_k | F_k] / E[dB_k^2 | F_k]`,
/// `K_kj = E[(Y_{k+1} - E[Y_{k+1}|F_k]) dN~_kj | F_k] / E[dN~_kj^2 | F_k]`,
/// where the denominators equal `dt` and `w_j dt` in exact arithmetic.
pub fn solve_backward(
    model: &CoefficientModel,
    ens: &ParticleEnsemble,
    noise: &NoiseEnsemble,
    control: &ControlProcess,
    basis: &RegressionBasis,
) -> Result<BackwardTriple> {
    let grid = *ens.grid();
    let n = ens.n_particles();
    if noise.n_particles() != n || !noise.is_compatible(&grid, &model.jumps) {
        return Err(Error::Shape("noise does not match the forward ensemble".into()));
    }
    let n_steps = grid.n_steps();
    let dt = grid.dt();
    let n_marks = model.n_marks();
    let weights = model.jumps.weights().to_vec();

    let mut triple = BackwardTriple {
        y: ParticlePaths::zeros(n, grid.n_main()),
        y_cont: ParticlePaths::zeros(n, n_steps),
        n_cont: vec![0.0; n_steps],
        z: ParticlePaths::zeros(n, n_steps),
        k: (0..n_marks).map(|_| ParticlePaths::zeros(n, n_steps)).collect(),
        se: vec![0.0; n_steps],
        z_se: vec![0.0; n_steps],
        k_se: vec![vec![0.0; n_steps]; n_marks],
    };
    let a = model.terminal_coupling;
    for (y, x) in triple
        .y
        .col_mut(n_steps)
        .iter_mut()
        .zip(ens.x_main(n_steps))
    {
        *y = a * x;
    }

    for k in (0..n_steps).rev() {
        let proj = projector_at(ens, basis, k)?;
        let next = triple.y.col(k + 1).to_vec();
        let (cont, se) = proj.project_with_se(&next);
        let dw = noise.dw(k);
        let (z, z_se) = martingale_coefficient(&proj, &next, &cont, |i| dw[i], dt);
        for (j, &w) in weights.iter().enumerate() {
            let (kj, kj_se) =
                martingale_coefficient(&proj, &next, &cont, |i| noise.compensated(k, i, j, w), w * dt);
            triple.k[j].col_mut(k).copy_from_slice(&kj);
            triple.k_se[j][k] = kj_se;
        }
        triple.z_se[k] = z_se;
        triple.n_cont[k] = cont.iter().sum::<f64>() / n as f64;
        triple.y_cont.col_mut(k).copy_from_slice(&cont);
        triple.z.col_mut(k).copy_from_slice(&z);
        triple.se[k] = se;

        let tr = &triple;
        let yk: Vec<f64> = (0..n)
            .into_par_iter()
            .map_init(
                || (vec![0.0; ens.n_lifts()], vec![0.0; n_marks]),
                |bufs, i| {
                    with_driver_args(ens, tr, control, k, i, bufs, |args| {
                        args.y + model.driver.eval(args) * dt
                    })
                },
            )
            .collect();
        if let Some(bad) = yk.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "backward value Y",
                particle: bad,
                step: k,
            });
        }
        triple.y.col_mut(k).copy_from_slice(&yk);
    }
    Ok(triple)
}

/// Root-mean-square residual of `Y(t) - E[Y(T') + sum_{[t, T')} g dt | F_t]`
/// between main nodes `k_t <= k_end`.
pub fn bsde_consistency_check(
    triple: &BackwardTriple,
    model: &CoefficientModel,
    ens: &ParticleEnsemble,
    control: &ControlProcess,
    basis: &RegressionBasis,
    k_t: usize,
    k_end: usize,
) -> Result<f64> {
    if k_t > k_end || k_end >= ens.grid().n_main() {
        return Err(Error::Precondition(format!(
            "consistency window [{k_t}, {k_end}] is invalid"
        )));
    }
    if k_t == k_end {
        return Ok(0.0);
    }
    let n = ens.n_particles();
    let dt = ens.grid().dt();
    let n_marks = model.n_marks();
    let mut target = triple.y.col(k_end).to_vec();
    for k in k_t..k_end {
        let g: Vec<f64> = (0..n)
            .into_par_iter()
            .map_init(
                || (vec![0.0; ens.n_lifts()], vec![0.0; n_marks]),
                |bufs, i| with_driver_args(ens, triple, control, k, i, bufs, |a| model.driver.eval(a)),
            )
            .collect();
        for (t, g) in target.iter_mut().zip(&g) {
            *t += g * dt;
        }
    }
    let fit = projector_at(ens, basis, k_t)?.project(&target);
    let ss: f64 = triple
        .y
        .col(k_t)
        .iter()
        .zip(&fit)
        .map(|(y, f)| (y - f) * (y - f))
        .sum();
    Ok((ss / n as f64).sqrt())
}

/// Weighted norms of the backward solution:
/// `sup_t e^{kappa t} E[Y^2]` and `int e^{kappa t} E[Z^2 + sum_j w_j K_j^2] dt`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BackwardNorms {
    pub weighted_sup_y: f64,
    pub weighted_integral_zk: f64,
}

pub fn backward_norms(triple: &BackwardTriple, model: &CoefficientModel, dt: f64, kappa: f64) -> BackwardNorms {
    let second = |p: &ParticlePaths, k: usize| {
        let c = p.col(k);
        c.iter().map(|v| v * v).sum::<f64>() / c.len() as f64
    };
    let mut sup = 0.0f64;
    for k in 0..triple.y.n_cols() {
        sup = sup.max((kappa * k as f64 * dt).exp() * second(&triple.y, k));
    }
    let mut integral = 0.0;
    for k in 0..triple.z.n_cols() {
        let mut s = second(&triple.z, k);
        for (kj, w) in triple.k.iter().zip(model.jumps.weights()) {
            s += w * second(kj, k);
        }
        integral += (kappa * k as f64 * dt).exp() * s * dt;
    }
    BackwardNorms {
        weighted_sup_y: sup,
        weighted_integral_zk: integral,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::simulate_forward;
    use crate::model::{FnCoef, MeanField};
    use crate::paths::{make_grid, sample_noise, JumpSpec, TimeGrid};

    fn solve(
        model: &CoefficientModel,
        grid: &TimeGrid,
        pi: &ControlProcess,
        n: usize,
        seed: u64,
    ) -> (ParticleEnsemble, NoiseEnsemble, BackwardTriple) {
        let noise = sample_noise(grid, &model.jumps, n, seed).unwrap();
        let ens = simulate_forward(model, pi, &noise, grid).unwrap();
        let triple = solve_backward(model, &ens, &noise, pi, &RegressionBasis::default()).unwrap();
        (ens, noise, triple)
    }

    fn brownian(grid: &TimeGrid) -> CoefficientModel {
        CoefficientModel::new(grid)
            .with_diffusion(FnCoef::new(|_| 1.0))
            .with_terminal_coupling(1.0)
    }

    #[test]
    fn martingale_representation_of_brownian_motion() {
        let grid = make_grid(1.0, 0.02, 0.0).unwrap();
        let pi = ControlProcess::constant(&grid, 0.0);
        let (ens, _, triple) = solve(&brownian(&grid), &grid, &pi, 10_000, 7);
        let max_se = triple.se.iter().cloned().fold(0.0, f64::max);
        let tol = 5.0 * (max_se + grid.dt());
        for k in 0..grid.n_main() {
            let rms_y = (ens
                .x_main(k)
                .iter()
                .zip(triple.y.col(k))
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                / 10_000.0)
                .sqrt();
            assert!(rms_y <= tol, "Y deviates at k={k}: {rms_y} > {tol}");
        }
        for k in 0..grid.n_steps() {
            let rms_z = (triple.z.col(k).iter().map(|z| (z - 1.0) * (z - 1.0)).sum::<f64>() / 10_000.0).sqrt();
            assert!(rms_z <= 0.05, "Z deviates at k={k}: {rms_z}");
        }
    }

    #[test]
    fn terminal_condition_is_exact() {
        let grid = make_grid(0.5, 0.05, 0.0).unwrap();
        let model = brownian(&grid).with_terminal_coupling(-1.7);
        let (ens, _, triple) = solve(&model, &grid, &ControlProcess::constant(&grid, 0.0), 200, 1);
        let last = grid.n_steps();
        for (y, x) in triple.y.col(last).iter().zip(ens.x_main(last)) {
            assert_eq!(*y, -1.7 * x);
        }
    }

    #[test]
    fn linear_driver_discounts_terminal_value() {
        let alpha = 0.7;
        let grid = make_grid(1.0, 1e-3, 0.0).unwrap();
        let model = CoefficientModel::new(&grid)
            .with_driver(FnCoef::new(move |a| alpha * a.y))
            .with_terminal_coupling(1.0)
            .with_prehistory(|_| 2.0);
        let (_, _, triple) = solve(&model, &grid, &ControlProcess::constant(&grid, 0.0), 4, 0);
        for k in (0..grid.n_main()).step_by(100) {
            let exact = 2.0 * (alpha * (1.0 - grid.main_time(k))).exp();
            assert!((triple.y.mean(k) - exact).abs() < 2.0 * grid.dt() * exact);
        }
    }

    #[test]
    fn mean_field_driver_matches_scalar_ode() {
        let (alpha, beta, pi) = (0.4, 0.1, 0.8f64);
        let grid = make_grid(2.0, 0.01, 0.0).unwrap();
        let model = CoefficientModel::new(&grid)
            .with_mean_field(MeanField::Lifted)
            .with_drift(FnCoef::new(|a| 0.05 * a.m[0] - a.u))
            .with_diffusion(FnCoef::new(|_| 0.3))
            .with_driver(FnCoef::new(move |a| -alpha * a.y + beta * a.n - a.u.ln()))
            .with_terminal_coupling(-1.0)
            .with_prehistory(|_| 1.0);
        let control = ControlProcess::constant(&grid, pi);
        let (ens, _, triple) = solve(&model, &grid, &control, 4000, 3);
        // m' = (alpha - beta) m + ln(pi) backward from m(T) = a E[X(T)].
        let mut m = -ens.x_main(grid.n_steps()).iter().sum::<f64>() / 4000.0;
        for k in (0..grid.n_steps()).rev() {
            m = m + (-(alpha - beta) * m - pi.ln()) * grid.dt();
            let got = triple.y.mean(k);
            let se = triple.y.stderr(k);
            assert!((got - m).abs() <= 3.0 * se + 1e-9, "k={k}: {got} vs {m}");
        }
    }

    #[test]
    fn z_and_k_vanish_without_noise_coefficients() {
        let grid = make_grid(1.0, 0.05, 0.0).unwrap();
        let jumps = JumpSpec::new(vec![1.0], vec![2.0]).unwrap();
        let model = CoefficientModel::new(&grid)
            .with_jump(FnCoef::new(|a| a.e), jumps)
            .with_terminal_coupling(1.0);
        let (_, _, triple) = solve(&model, &grid, &ControlProcess::constant(&grid, 0.0), 5000, 2);
        for k in 0..grid.n_steps() {
            let tol = 5.0 * triple.z_se[k];
            let rms = (triple.z.col(k).iter().map(|z| z * z).sum::<f64>() / 5000.0).sqrt();
            assert!(rms <= tol, "k={k}: {rms} > {tol}");
            let kbar = triple.k[0].mean(k);
            assert!((kbar - 1.0).abs() <= 5.0 * triple.k_se[0][k], "K should recover gamma = 1, got {kbar}");
        }
    }

    #[test]
    fn consistency_residual() {
        let grid = make_grid(1.0, 0.05, 0.0).unwrap();
        let pi = ControlProcess::constant(&grid, 0.0);
        let model = brownian(&grid);
        let (ens, _, triple) = solve(&model, &grid, &pi, 5000, 4);
        let basis = RegressionBasis::default();
        assert_eq!(bsde_consistency_check(&triple, &model, &ens, &pi, &basis, 5, 5).unwrap(), 0.0);
        let r = bsde_consistency_check(&triple, &model, &ens, &pi, &basis, 4, 20).unwrap();
        let se = triple.se.iter().cloned().fold(0.0, f64::max);
        assert!(r <= 5.0 * se, "{r} vs {se}");
    }

    #[test]
    fn larger_terminal_coupling_raises_y0() {
        let grid = make_grid(1.0, 0.05, 0.0).unwrap();
        let pi = ControlProcess::constant(&grid, 0.0);
        let mut last = f64::NEG_INFINITY;
        for a in [0.5, 1.0, 1.5] {
            let model = brownian(&grid).with_terminal_coupling(a).with_prehistory(|_| 1.0);
            let (_, _, triple) = solve(&model, &grid, &pi, 1000, 5);
            assert!(triple.y0_mean() > last);
            last = triple.y0_mean();
        }
    }
}
