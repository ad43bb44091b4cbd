//! Numerical checks of the maximum-principle conclusions: the gradient
//! identity, optimality residuals, concavity and conditional maxima,
//! transversality and the delay change-of-variable identity.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::adjoint::{blank_point, fill_point};
use crate::backward::{martingale_coefficient, projector_at, with_driver_args};
use crate::delay::DelayMeasure;
use crate::error::{Error, Result};
use crate::forward::{simulate_forward, ParticleEnsemble};
use crate::hamiltonian::{eval_h, HamiltonianPoint};
use crate::model::{partial, Args, CoefficientModel, ControlProcess, MeanField, Var};
use crate::paths::{mean, sample_noise, stderr, NoiseEnsemble, ParticlePaths, TimeGrid};
use crate::pipeline::{solve, solve_state, Solution, StateSolution};
use crate::regression::RegressionBasis;

/// A bounded control direction.
#[derive(Debug, Clone, PartialEq)]
pub struct Perturbation {
    pub eta: ControlProcess,
    pub bound: f64,
    pub label: String,
}

impl Perturbation {
    pub fn new(eta: ControlProcess, label: impl Into<String>) -> Self {
        Self {
            bound: eta.sup_norm(),
            eta,
            label: label.into(),
        }
    }

    pub fn zero(grid: &TimeGrid) -> Self {
        Self::new(ControlProcess::constant(grid, 0.0), "zero")
    }

    /// `alpha * 1_[t0, t0 + h)`.
    pub fn bump(grid: &TimeGrid, t0: f64, h: f64, alpha: f64) -> Self {
        let eps = 1e-9 * grid.dt();
        let eta = ControlProcess::from_fn(grid, |t| {
            if t + eps >= t0 && t + eps < t0 + h {
                alpha
            } else {
                0.0
            }
        });
        Self::new(eta, format!("bump[{t0:.4},{:.4})x{alpha}", t0 + h))
    }

    /// `count` bumps with grid-aligned random start and width inside the
    /// horizon.
    pub fn random_bumps(grid: &TimeGrid, count: usize, alpha: f64, seed: u64) -> Vec<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = grid.n_steps();
        (0..count)
            .map(|_| {
                let start = rng.random_range(0..n);
                let width = rng.random_range(1..=(n - start).clamp(1, (n / 4).max(1)));
                Self::bump(grid, grid.main_time(start), width as f64 * grid.dt(), alpha)
            })
            .collect()
    }

    /// Fails unless `pi + s eta` stays in `[lo, hi]` for `|s| <= s_max`.
    pub fn check_admissible(&self, pi: &ControlProcess, s_max: f64, lo: f64, hi: f64) -> Result<()> {
        for s in [-s_max, s_max] {
            pi.perturbed(&self.eta, s)?.check_admissible(lo, hi)?;
        }
        Ok(())
    }
}

/// The controller's information: everything (`G = F`) or the state delayed
/// by a whole number of steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InformationFlow {
    FullInfo,
    DelayedInfo { lag_steps: usize },
}

impl InformationFlow {
    pub fn delayed(d: f64, grid: &TimeGrid) -> Result<Self> {
        let r = d / grid.dt();
        if !(d >= 0.0) || (r - r.round()).abs() > 1e-9 * r.abs().max(1.0) {
            return Err(Error::Precondition(format!(
                "information delay {d} is not a non-negative multiple of dt = {}",
                grid.dt()
            )));
        }
        Ok(InformationFlow::DelayedInfo {
            lag_steps: r.round() as usize,
        })
    }
}

/// First-variation processes along a control direction.
#[derive(Debug, Clone)]
pub struct DerivativeProcesses {
    /// Global node index, zero on the prehistory.
    pub x: ParticlePaths,
    pub y: ParticlePaths,
    pub z: ParticlePaths,
    pub k: Vec<ParticlePaths>,
}

fn lift_of(paths: &ParticlePaths, ens: &ParticleEnsemble, i: usize, k: usize, out: &mut [f64]) {
    let j = ens.grid().global(k);
    for (o, mu) in out.iter_mut().zip(ens.delay().measures()) {
        *o = mu.atoms().iter().map(|a| a.mass * paths.get(i, j - a.lag)).sum();
    }
}

/// Euler scheme for the linearised system along `eta` around `sol`.
pub fn simulate_derivative_processes(
    model: &CoefficientModel,
    sol: &StateSolution,
    eta: &ControlProcess,
    noise: &NoiseEnsemble,
    basis: &RegressionBasis,
) -> Result<DerivativeProcesses> {
    let ens = &sol.ens;
    let triple = &sol.triple;
    let control = &sol.control;
    let grid = *ens.grid();
    let n = ens.n_particles();
    let dt = grid.dt();
    let h = model.fd_step;
    let nl = model.n_lifts();
    let md = model.mean_field_dim();
    let marks = model.jumps.marks().to_vec();
    let weights = model.jumps.weights().to_vec();
    let n_steps = grid.n_steps();

    let mut dx = ParticlePaths::zeros(n, grid.n_nodes());
    let mut dm_path = vec![0.0; grid.n_main() * md];
    for k in 0..n_steps {
        let lifts: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                let mut buf = vec![0.0; nl];
                lift_of(&dx, ens, i, k, &mut buf);
                buf
            })
            .collect();
        let dm: Vec<f64> = match &model.mean_field {
            MeanField::Lifted => (0..nl)
                .map(|l| lifts.iter().map(|v| v[l]).sum::<f64>() / n as f64)
                .collect(),
            MeanField::Phi(phi) => {
                let x = ens.x_main(k);
                let cur = dx.col(grid.global(k));
                vec![(0..n).map(|i| phi.deriv(x[i]) * cur[i]).sum::<f64>() / n as f64]
            }
        };
        dm_path[k * md..(k + 1) * md].copy_from_slice(&dm);
        let t = grid.main_time(k);
        let dw = noise.dw(k);
        let cur = dx.col(grid.global(k));
        let next: Vec<f64> = (0..n)
            .into_par_iter()
            .map_init(
                || vec![0.0; nl],
                |xl, i| -> Result<f64> {
                    ens.lifts(i, k, xl);
                    let args = Args::forward(t, xl, ens.mean_field_at(k), control.at(i, k));
                    let lin = |coef: &dyn crate::model::ScalarFn, a: &Args| -> Result<f64> {
                        let mut s = partial(coef, a, Var::U, h)? * eta.at(i, k);
                        for (l, v) in lifts[i].iter().enumerate() {
                            s += partial(coef, a, Var::X(l), h)? * v;
                        }
                        for (l, v) in dm.iter().enumerate() {
                            s += partial(coef, a, Var::M(l), h)? * v;
                        }
                        Ok(s)
                    };
                    let mut v = cur[i] + lin(model.drift.as_ref(), &args)? * dt
                        + lin(model.diffusion.as_ref(), &args)? * dw[i];
                    for (j, (&e, &w)) in marks.iter().zip(&weights).enumerate() {
                        v += lin(model.jump.as_ref(), &args.with_mark(e))? * noise.compensated(k, i, j, w);
                    }
                    Ok(v)
                },
            )
            .collect::<Result<_>>()?;
        dx.col_mut(grid.global(k + 1)).copy_from_slice(&next);
    }

    let mut dy = ParticlePaths::zeros(n, grid.n_main());
    let mut dz = ParticlePaths::zeros(n, n_steps);
    let mut dk: Vec<ParticlePaths> = (0..marks.len()).map(|_| ParticlePaths::zeros(n, n_steps)).collect();
    let a = model.terminal_coupling;
    let end = dx.col(grid.global(n_steps)).to_vec();
    for (y, x) in dy.col_mut(n_steps).iter_mut().zip(&end) {
        *y = a * x;
    }
    for k in (0..n_steps).rev() {
        let proj = projector_at(ens, basis, k)?;
        let next = dy.col(k + 1).to_vec();
        let cont = proj.project(&next);
        let dw = noise.dw(k);
        let (z, _) = martingale_coefficient(&proj, &next, &cont, |i| dw[i], dt);
        let kk: Vec<Vec<f64>> = weights
            .iter()
            .enumerate()
            .map(|(j, &w)| martingale_coefficient(&proj, &next, &cont, |i| noise.compensated(k, i, j, w), w * dt).0)
            .collect();
        let ncont = mean(&cont);
        let dm = &dm_path[k * md..(k + 1) * md];
        let yk: Vec<f64> = (0..n)
            .into_par_iter()
            .map_init(
                || ((vec![0.0; nl], vec![0.0; marks.len()]), vec![0.0; nl]),
                |(bufs, xl), i| -> Result<f64> {
                    lift_of(&dx, ens, i, k, xl);
                    with_driver_args(ens, triple, control, k, i, bufs, |args| {
                        let g = model.driver.as_ref();
                        let mut s = partial(g, args, Var::U, h)? * eta.at(i, k)
                            + partial(g, args, Var::Y, h)? * cont[i]
                            + partial(g, args, Var::N, h)? * ncont
                            + partial(g, args, Var::Z, h)? * z[i];
                        for (l, v) in xl.iter().enumerate() {
                            s += partial(g, args, Var::X(l), h)? * v;
                        }
                        for (l, v) in dm.iter().enumerate() {
                            s += partial(g, args, Var::M(l), h)? * v;
                        }
                        for (j, col) in kk.iter().enumerate() {
                            s += partial(g, args, Var::K(j), h)? * col[i];
                        }
                        Ok(cont[i] + s * dt)
                    })
                },
            )
            .collect::<Result<_>>()?;
        dy.col_mut(k).copy_from_slice(&yk);
        dz.col_mut(k).copy_from_slice(&z);
        for (col, v) in dk.iter_mut().zip(&kk) {
            col.col_mut(k).copy_from_slice(v);
        }
    }
    Ok(DerivativeProcesses {
        x: dx,
        y: dy,
        z: dz,
        k: dk,
    })
}

/// Least-squares slope of `ys` against `xs`.
pub fn fit_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let (mx, my) = (mean(xs), mean(ys));
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

/// `E[sup_t |X^{pi + alpha eta}(t) - X^pi(t)|^2]` for each `alpha` and the
/// log-log slope against `alpha`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalingResult {
    pub alphas: Vec<f64>,
    pub values: Vec<f64>,
    pub slope: f64,
}

pub fn perturbation_scaling(
    model: &CoefficientModel,
    grid: &TimeGrid,
    pi: &ControlProcess,
    eta: &ControlProcess,
    alphas: &[f64],
    noise: &NoiseEnsemble,
) -> Result<ScalingResult> {
    let base = simulate_forward(model, pi, noise, grid)?;
    let mut values = Vec::with_capacity(alphas.len());
    for &alpha in alphas {
        let ens = simulate_forward(model, &pi.perturbed(eta, alpha)?, noise, grid)?;
        let n = ens.n_particles();
        let mut sup = vec![0.0f64; n];
        for k in 0..grid.n_main() {
            for ((s, a), b) in sup.iter_mut().zip(ens.x_main(k)).zip(base.x_main(k)) {
                *s = s.max((a - b) * (a - b));
            }
        }
        values.push(mean(&sup));
    }
    let lx: Vec<f64> = alphas.iter().map(|a| a.ln()).collect();
    let ly: Vec<f64> = values.iter().map(|v| v.ln()).collect();
    Ok(ScalingResult {
        alphas: alphas.to_vec(),
        slope: fit_slope(&lx, &ly),
        values,
    })
}

/// Central common-random-number difference of `J` against the Hamiltonian
/// gradient pairing `E[sum_k dH/du eta dt]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientCheck {
    pub label: String,
    pub lhs: f64,
    pub rhs: f64,
    /// Standard error of `lhs - rhs`.
    pub se: f64,
    /// Three standard errors.
    pub ci: f64,
    pub per_seed: Vec<(f64, f64)>,
}

impl GradientCheck {
    pub fn gap(&self) -> f64 {
        (self.lhs - self.rhs).abs()
    }

    pub fn passes(&self, slack: f64) -> bool {
        self.gap() <= self.ci + slack
    }
}

/// `sum_k dH/du(k) eta(k) dt` per particle along a solution.
pub fn hamiltonian_pairing(sol: &Solution, eta: &ControlProcess) -> Vec<f64> {
    let dt = sol.ens.grid().dt();
    let n = sol.ens.n_particles();
    let mut out = vec![0.0; n];
    for k in 0..sol.adjoint.h_u.n_cols() {
        for (i, (o, hu)) in out.iter_mut().zip(sol.adjoint.h_u.col(k)).enumerate() {
            *o += hu * eta.at(i, k) * dt;
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub fn gradient_identity_check(
    model: &CoefficientModel,
    grid: &TimeGrid,
    pi: &ControlProcess,
    eta: &Perturbation,
    s_fd: f64,
    seeds: &[u64],
    n_particles: usize,
    basis: &RegressionBasis,
) -> Result<GradientCheck> {
    if seeds.is_empty() {
        return Err(Error::Precondition("gradient check needs at least one seed".into()));
    }
    let (lo, hi) = model.control_bounds;
    eta.check_admissible(pi, s_fd, lo, hi)?;
    let up = pi.perturbed(&eta.eta, s_fd)?;
    let down = pi.perturbed(&eta.eta, -s_fd)?;
    let mut per_seed = Vec::with_capacity(seeds.len());
    let mut last_diff = Vec::new();
    for &seed in seeds {
        let noise = sample_noise(grid, &model.jumps, n_particles, seed)?;
        let jp = solve_state(model, grid, &up, &noise, basis)?.objective(model);
        let jm = solve_state(model, grid, &down, &noise, basis)?.objective(model);
        let center = solve(model, grid, pi, &noise, basis)?;
        let pairing = hamiltonian_pairing(&center, &eta.eta);
        let fd: Vec<f64> = jp
            .per_particle
            .iter()
            .zip(&jm.per_particle)
            .map(|(a, b)| (a - b) / (2.0 * s_fd))
            .collect();
        per_seed.push((mean(&fd), mean(&pairing)));
        last_diff = fd.iter().zip(&pairing).map(|(a, b)| a - b).collect();
    }
    let lhs = mean(&per_seed.iter().map(|p| p.0).collect::<Vec<_>>());
    let rhs = mean(&per_seed.iter().map(|p| p.1).collect::<Vec<_>>());
    let se = if per_seed.len() >= 2 {
        stderr(&per_seed.iter().map(|p| p.0 - p.1).collect::<Vec<_>>())
    } else {
        stderr(&last_diff)
    };
    Ok(GradientCheck {
        label: eta.label.clone(),
        lhs,
        rhs,
        se,
        ci: 3.0 * se,
        per_seed,
    })
}

/// Estimated `E[dH/du(t) | G_t]` per step.
///
/// Under full information this is the cross-sectional mean; under delayed
/// information it is the regression on features at the lagged node, reported
/// as the root mean square of the fitted values carrying the sign of their
/// mean.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualPath {
    pub t: Vec<f64>,
    pub residual: Vec<f64>,
    pub se: Vec<f64>,
}

impl ResidualPath {
    pub fn sup(&self) -> f64 {
        self.residual.iter().fold(0.0, |a, v| a.max(v.abs()))
    }

    pub fn sup_se(&self) -> f64 {
        self.se.iter().cloned().fold(0.0, f64::max)
    }
}

pub fn necessary_residual(sol: &Solution, flow: InformationFlow, basis: &RegressionBasis) -> Result<ResidualPath> {
    let grid = sol.ens.grid();
    let steps = sol.adjoint.h_u.n_cols();
    let mut out = ResidualPath {
        t: Vec::with_capacity(steps),
        residual: Vec::with_capacity(steps),
        se: Vec::with_capacity(steps),
    };
    for k in 0..steps {
        let hu = sol.adjoint.h_u.col(k);
        out.t.push(grid.main_time(k));
        match flow {
            InformationFlow::FullInfo => {
                out.residual.push(mean(hu));
                out.se.push(stderr(hu));
            }
            InformationFlow::DelayedInfo { lag_steps } => {
                let proj = projector_at(&sol.ens, basis, k.saturating_sub(lag_steps))?;
                let (fit, se) = proj.project_with_se(hu);
                let rms = (fit.iter().map(|v| v * v).sum::<f64>() / fit.len() as f64).sqrt();
                out.residual.push(rms.copysign(mean(&fit)));
                out.se.push(se);
            }
        }
    }
    Ok(out)
}

/// Which Hamiltonian arguments the concavity probe moves.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConcavityScope {
    /// `(x, m, y, n, z, k, u)`.
    Full,
    ControlOnly,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeOptions {
    pub n_probe: usize,
    pub scope: ConcavityScope,
    pub v_grid: usize,
    pub n_times: usize,
    pub max_particles: usize,
    pub seed: u64,
}

impl Default for ProbeOptions {
    fn default() -> Self {
        Self {
            n_probe: 1000,
            scope: ConcavityScope::Full,
            v_grid: 101,
            n_times: 10,
            max_particles: 2000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalMax {
    pub t: f64,
    pub candidate: f64,
    pub argmax: f64,
    /// The profile is flat: every grid point is a maximiser.
    pub degenerate: bool,
    pub attained: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlternativeComparison {
    pub label: String,
    pub j: f64,
    /// `J(candidate) - J(alternative)` on common noise.
    pub diff: f64,
    pub se: f64,
    pub ok: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SufficientReport {
    pub concavity_probes: usize,
    pub concavity_violations: usize,
    pub max_violation: f64,
    pub conditional_max: Vec<ConditionalMax>,
    pub j_candidate: f64,
    pub j_candidate_se: f64,
    pub alternatives: Vec<AlternativeComparison>,
}

impl SufficientReport {
    pub fn concave(&self) -> bool {
        self.concavity_violations == 0
    }

    pub fn max_attained(&self) -> bool {
        self.conditional_max.iter().all(|c| c.attained)
    }

    pub fn candidate_dominates(&self) -> bool {
        self.alternatives.iter().all(|a| a.ok)
    }
}

fn solution_point(model: &CoefficientModel, sol: &Solution, k: usize, i: usize) -> HamiltonianPoint {
    let mut pt = blank_point(model);
    fill_point(&mut pt, &sol.ens, &sol.triple, &sol.control, k, i);
    pt.p = sol.adjoint.p_cont.get(i, k);
    pt.q = sol.adjoint.q.get(i, k);
    for (j, r) in pt.r.iter_mut().enumerate() {
        *r = sol.adjoint.r[j].get(i, k);
    }
    pt.lambda = sol.adjoint.lambda.get(i, k);
    pt
}

/// Concavity, conditional-maximum and objective-comparison probes around a
/// candidate solution.
pub fn sufficient_conditions_probe(
    model: &CoefficientModel,
    grid: &TimeGrid,
    candidate: &Solution,
    noise: &NoiseEnsemble,
    basis: &RegressionBasis,
    alternatives: &[(String, ControlProcess)],
    opts: &ProbeOptions,
) -> Result<SufficientReport> {
    let (lo, hi) = model.control_bounds;
    if !(lo.is_finite() && hi.is_finite()) || opts.v_grid < 2 {
        return Err(Error::Precondition(
            "the conditional-maximum probe needs a bounded control interval and at least two grid points".into(),
        ));
    }
    let n = candidate.ens.n_particles();
    let steps = grid.n_steps();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);

    let mut violations = 0;
    let mut max_violation = 0.0f64;
    for _ in 0..opts.n_probe {
        let i = rng.random_range(0..n);
        let k = rng.random_range(0..steps);
        let p1 = solution_point(model, candidate, k, i);
        let mut p2 = p1.clone();
        p2.u = rng.random_range(lo..=hi);
        if opts.scope == ConcavityScope::Full {
            let mut jitter = |v: &mut f64| {
                let z: f64 = rng.sample(StandardNormal);
                *v += 0.5 * (1.0 + v.abs()) * z;
            };
            p2.x.iter_mut().for_each(&mut jitter);
            p2.m.iter_mut().for_each(&mut jitter);
            p2.k.iter_mut().for_each(&mut jitter);
            jitter(&mut p2.y);
            jitter(&mut p2.n);
            jitter(&mut p2.z);
        }
        let mid = HamiltonianPoint {
            x: p1.x.iter().zip(&p2.x).map(|(a, b)| 0.5 * (a + b)).collect(),
            m: p1.m.iter().zip(&p2.m).map(|(a, b)| 0.5 * (a + b)).collect(),
            k: p1.k.iter().zip(&p2.k).map(|(a, b)| 0.5 * (a + b)).collect(),
            y: 0.5 * (p1.y + p2.y),
            n: 0.5 * (p1.n + p2.n),
            z: 0.5 * (p1.z + p2.z),
            u: 0.5 * (p1.u + p2.u),
            ..p1.clone()
        };
        let (h1, h2, hm) = (eval_h(model, &p1), eval_h(model, &p2), eval_h(model, &mid));
        let gap = 0.5 * (h1 + h2) - hm;
        if gap > 1e-9 * h1.abs().max(h2.abs()).max(1.0) {
            violations += 1;
            max_violation = max_violation.max(gap);
        }
    }

    let spacing = (hi - lo) / (opts.v_grid - 1) as f64;
    let vs: Vec<f64> = (0..opts.v_grid).map(|m| lo + m as f64 * spacing).collect();
    let n_sub = n.min(opts.max_particles);
    let mut conditional_max = Vec::new();
    let times: Vec<usize> = (0..opts.n_times.max(1))
        .map(|s| s * steps / opts.n_times.max(1))
        .collect();
    for k in times {
        let points: Vec<HamiltonianPoint> = (0..n_sub).map(|i| solution_point(model, candidate, k, i)).collect();
        let profile = |v: Option<f64>, pts: &[HamiltonianPoint]| -> f64 {
            let vals: Vec<f64> = pts
                .par_iter()
                .map(|p| {
                    let mut q = p.clone();
                    if let Some(v) = v {
                        q.u = v;
                    }
                    eval_h(model, &q)
                })
                .collect();
            mean(&vals)
        };
        let check = |pts: &[HamiltonianPoint], cand: f64| -> ConditionalMax {
            let hv: Vec<f64> = vs.iter().map(|v| profile(Some(*v), pts)).collect();
            let (mut best, mut arg) = (f64::NEG_INFINITY, lo);
            let mut worst = f64::INFINITY;
            for (v, h) in vs.iter().zip(&hv) {
                if *h > best {
                    best = *h;
                    arg = *v;
                }
                worst = worst.min(*h);
            }
            let scale = best.abs().max(1.0);
            let degenerate = best - worst <= 1e-12 * scale;
            let at_cand = profile(None, pts);
            let attained = degenerate || at_cand >= best - 1e-9 * scale || (arg - cand).abs() <= spacing;
            ConditionalMax {
                t: grid.main_time(k),
                candidate: cand,
                argmax: arg,
                degenerate,
                attained,
            }
        };
        if candidate.control.is_shared() {
            conditional_max.push(check(&points, candidate.control.at(0, k)));
        } else {
            for (i, p) in points.iter().enumerate().take(opts.max_particles.min(200)) {
                conditional_max.push(check(std::slice::from_ref(p), candidate.control.at(i, k)));
            }
        }
    }

    let j_cand = candidate.objective(model);
    let mut comparisons = Vec::new();
    for (label, alt) in alternatives {
        let j_alt = solve_state(model, grid, alt, noise, basis)?.objective(model);
        let diff: Vec<f64> = j_cand
            .per_particle
            .iter()
            .zip(&j_alt.per_particle)
            .map(|(a, b)| a - b)
            .collect();
        let (d, se) = (mean(&diff), stderr(&diff));
        comparisons.push(AlternativeComparison {
            label: label.clone(),
            j: j_alt.value,
            diff: d,
            se,
            ok: d >= -3.0 * se - 1e-12 * j_cand.value.abs().max(1.0),
        });
    }
    Ok(SufficientReport {
        concavity_probes: opts.n_probe,
        concavity_violations: violations,
        max_violation,
        conditional_max,
        j_candidate: j_cand.value,
        j_candidate_se: j_cand.se,
        alternatives: comparisons,
    })
}

/// The problem at one truncation horizon.
#[derive(Clone)]
pub struct TransversalityScenario {
    pub model: CoefficientModel,
    pub grid: TimeGrid,
    pub candidate: ControlProcess,
    /// Admissible comparison control for the gap pairings.
    pub alternative: ControlProcess,
    /// Control whose terminal state enters `px`; only simulated forward, so
    /// it may leave the admissible set.
    pub reference: ControlProcess,
}

/// Boundary pairings at horizon `t_end`, each with its standard error.
#[derive(Debug, Clone, PartialEq)]
pub struct TransversalityRow {
    pub t_end: f64,
    /// `E[p_hat(T) X_ref(T)]`.
    pub px: f64,
    pub px_se: f64,
    /// `E[p_hat(T) (X_hat - X_alt)(T)]`.
    pub px_gap: f64,
    pub px_gap_se: f64,
    /// `E[lambda_hat(T) (Y_hat - Y_alt)(T)]`.
    pub ly_gap: f64,
    pub ly_gap_se: f64,
    /// `E[p_hat(T) dX(T)]` along `alt - candidate`.
    pub p_dx: f64,
    pub p_dx_se: f64,
    /// `E[lambda_hat(T) dY(T)]`.
    pub l_dy: f64,
    pub l_dy_se: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransversalityTable {
    pub rows: Vec<TransversalityRow>,
    /// Slope of `ln |px|` against `T`.
    pub fitted_slope: f64,
    pub decaying: bool,
}

fn paired(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> (f64, f64) {
    let v: Vec<f64> = a.iter().zip(b).map(|(x, y)| f(*x, *y)).collect();
    (mean(&v), stderr(&v))
}

pub fn transversality_check(
    scenario: &dyn Fn(f64) -> Result<TransversalityScenario>,
    t_list: &[f64],
    n_particles: usize,
    seed: u64,
    basis: &RegressionBasis,
) -> Result<TransversalityTable> {
    if t_list.len() < 2 {
        return Err(Error::Precondition("transversality needs at least two horizons".into()));
    }
    let mut rows = Vec::with_capacity(t_list.len());
    for &t_end in t_list {
        let sc = scenario(t_end)?;
        let grid = sc.grid;
        let last = grid.n_steps();
        let noise = sample_noise(&grid, &sc.model.jumps, n_particles, seed)?;
        let hat = solve(&sc.model, &grid, &sc.candidate, &noise, basis)?;
        let alt = solve_state(&sc.model, &grid, &sc.alternative, &noise, basis)?;
        let eta = sc.candidate.scaled(-1.0).perturbed(&sc.alternative, 1.0)?;
        let state = StateSolution {
            control: hat.control.clone(),
            ens: hat.ens.clone(),
            triple: hat.triple.clone(),
        };
        let der = simulate_derivative_processes(&sc.model, &state, &eta, &noise, basis)?;

        let p_t = hat.adjoint.p.col(last);
        let l_t = hat.adjoint.lambda.col(last);
        let x_hat = hat.ens.x_main(last);
        let x_alt = alt.ens.x_main(last);
        let reference = simulate_forward(&sc.model, &sc.reference, &noise, &grid)?;
        let (px, px_se) = paired(p_t, reference.x_main(last), |p, x| p * x);
        let gap: Vec<f64> = x_hat.iter().zip(x_alt).map(|(a, b)| a - b).collect();
        let (px_gap, px_gap_se) = paired(p_t, &gap, |p, g| p * g);
        let ygap: Vec<f64> = hat.triple.y.col(last).iter().zip(alt.triple.y.col(last)).map(|(a, b)| a - b).collect();
        let (ly_gap, ly_gap_se) = paired(l_t, &ygap, |l, g| l * g);
        let (p_dx, p_dx_se) = paired(p_t, der.x.col(grid.global(last)), |p, d| p * d);
        let (l_dy, l_dy_se) = paired(l_t, der.y.col(last), |l, d| l * d);
        rows.push(TransversalityRow {
            t_end,
            px,
            px_se,
            px_gap,
            px_gap_se,
            ly_gap,
            ly_gap_se,
            p_dx,
            p_dx_se,
            l_dy,
            l_dy_se,
        });
    }
    let ts: Vec<f64> = rows.iter().map(|r| r.t_end).collect();
    let logs: Vec<f64> = rows.iter().map(|r| r.px.abs().ln()).collect();
    let fitted_slope = fit_slope(&ts, &logs);
    Ok(TransversalityTable {
        rows,
        decaying: fitted_slope < 0.0,
        fitted_slope,
    })
}

/// Both sides of the discrete change of variable
/// `sum_t X(t) int phi(t - s) mu(ds) dt = sum_t phi(t) int X(t + s) mu(ds) dt`
/// with `X = 0` before time 0 and `phi = 0` after the horizon.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FubiniGap {
    pub lhs: f64,
    pub rhs: f64,
    pub gap: f64,
}

pub fn fubini_identity_check(phi: &[f64], x: &[f64], mu: &DelayMeasure, grid: &TimeGrid) -> Result<FubiniGap> {
    let n_main = grid.n_main();
    if phi.len() != n_main || x.len() != n_main {
        return Err(Error::Shape(format!(
            "fubini inputs need {n_main} main-grid values, got {} and {}",
            phi.len(),
            x.len()
        )));
    }
    let dt = grid.dt();
    let lhs: f64 = (0..n_main).map(|k| x[k] * mu.apply_advanced(phi, k, true)).sum::<f64>() * dt;
    let rhs: f64 = (0..n_main)
        .map(|k| {
            let seg: f64 = mu
                .atoms()
                .iter()
                .filter(|a| a.lag <= k)
                .map(|a| a.mass * x[k - a.lag])
                .sum();
            phi[k] * seg
        })
        .sum::<f64>()
        * dt;
    Ok(FubiniGap {
        lhs,
        rhs,
        gap: (lhs - rhs).abs(),
    })
}

/// One named pass/fail verdict.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// Collected verification results.
#[derive(Debug, Clone, Default)]
pub struct VerificationReport {
    pub residual: Option<ResidualPath>,
    pub gradient: Vec<GradientCheck>,
    pub transversality: Option<TransversalityTable>,
    pub sufficient: Option<SufficientReport>,
    pub fubini: Vec<(String, FubiniGap)>,
    pub scaling: Option<ScalingResult>,
    pub checks: Vec<CheckOutcome>,
}

impl VerificationReport {
    pub fn push(&mut self, name: impl Into<String>, passed: bool, detail: impl Into<String>) {
        self.checks.push(CheckOutcome {
            name: name.into(),
            passed,
            detail: detail.into(),
        });
    }

    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}
