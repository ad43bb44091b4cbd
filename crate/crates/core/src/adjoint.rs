//! Adjoint processes: the forward equation for `lambda` and the anticipated
//! backward equation for `(p, q, r)`.
//!
//! The discretisation is the exact discrete dual of the forward/backward
//! schemes: at step `k` the Hamiltonian is evaluated with
//! `p_bar_k = E[p_{k+1}|F_k]`, `q_k`, `r_k`, `lambda_k` and the Y-side
//! arguments of the backward step, and
//!
//! ```text
//! lambda_{k+1} = lambda_k + (H_y + E[H_n]) dt + H_z dB_k + sum_j (H_kj / w_j) dN~_kj
//! p_k          = p_bar_k + E[Upsilon_k | F_k] dt
//! ```
//!
//! with `Upsilon_k = sum_i sum_atoms mass * (H_xi + E[H_mi])(k + lag)` for the
//! lifted mean field (terms past the last step are dropped) and
//! `sum_i (advanced H_xi) + E[H_m(k)] Phi'(X_k)` for `m = E[Phi(X)]`.

use rayon::prelude::*;

use crate::backward::{martingale_coefficient, projector_at, BackwardTriple};
use crate::error::{Error, Result};
use crate::forward::ParticleEnsemble;
use crate::hamiltonian::{grad_h, HamiltonianPoint};
use crate::model::{CoefficientModel, ControlProcess, MeanField, Var};
use crate::paths::{NoiseEnsemble, ParticlePaths};
use crate::regression::RegressionBasis;

/// Adjoint solution. `lambda` and `p` live on main nodes, everything else on
/// steps.
#[derive(Debug, Clone)]
pub struct AdjointState {
    pub lambda: ParticlePaths,
    pub p: ParticlePaths,
    /// `E[p_{k+1} | F_k]`, the value of `p` the Hamiltonian sees at step `k`.
    pub p_cont: ParticlePaths,
    pub q: ParticlePaths,
    pub r: Vec<ParticlePaths>,
    /// Driver before conditioning.
    pub upsilon: ParticlePaths,
    /// `dH/du` along the solution.
    pub h_u: ParticlePaths,
    /// Regression standard error of `p_bar` per step.
    pub se: Vec<f64>,
}

impl AdjointState {
    pub fn lambda_mean(&self) -> Vec<f64> {
        (0..self.lambda.n_cols()).map(|k| self.lambda.mean(k)).collect()
    }

    pub fn p_mean(&self) -> Vec<f64> {
        (0..self.p.n_cols()).map(|k| self.p.mean(k)).collect()
    }
}

/// Writes the state, backward and control arguments of particle `i` at step
/// `k` into `pt`; the adjoint slots are left untouched.
pub(crate) fn fill_point(
    pt: &mut HamiltonianPoint,
    ens: &ParticleEnsemble,
    triple: &BackwardTriple,
    control: &ControlProcess,
    k: usize,
    i: usize,
) {
    pt.t = ens.grid().main_time(k);
    ens.lifts(i, k, &mut pt.x);
    pt.m.copy_from_slice(ens.mean_field_at(k));
    pt.y = triple.y_cont.get(i, k);
    pt.n = triple.n_cont[k];
    pt.z = triple.z.get(i, k);
    for (j, kj) in pt.k.iter_mut().enumerate() {
        *kj = triple.k[j].get(i, k);
    }
    pt.u = control.at(i, k);
}

pub(crate) fn blank_point(model: &CoefficientModel) -> HamiltonianPoint {
    HamiltonianPoint {
        x: vec![0.0; model.n_lifts()],
        m: vec![0.0; model.mean_field_dim()],
        k: vec![0.0; model.n_marks()],
        r: vec![0.0; model.n_marks()],
        ..Default::default()
    }
}

fn check_finite(values: &[f64], what: &'static str, step: usize) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(particle) => Err(Error::NonFinite {
            what,
            particle,
            step,
        }),
        None => Ok(()),
    }
}

/// Forward Euler scheme for `lambda` from `lambda(0) = h1'(Y(0))`.
pub fn solve_lambda_forward(
    model: &CoefficientModel,
    ens: &ParticleEnsemble,
    noise: &NoiseEnsemble,
    triple: &BackwardTriple,
    control: &ControlProcess,
) -> Result<ParticlePaths> {
    let grid = *ens.grid();
    let n = ens.n_particles();
    let dt = grid.dt();
    let weights = model.jumps.weights().to_vec();
    let mut lambda = ParticlePaths::zeros(n, grid.n_main());
    for (l, y) in lambda.col_mut(0).iter_mut().zip(triple.y.col(0)) {
        *l = model.h1.deriv(*y);
    }
    check_finite(lambda.col(0), "lambda", 0)?;

    for k in 0..grid.n_steps() {
        let lam = lambda.col(k);
        // (H_y, H_n, H_z, H_k / w) per particle.
        let grads: Vec<(f64, f64, f64, Vec<f64>)> = (0..n)
            .into_par_iter()
            .map_init(
                || blank_point(model),
                |pt, i| -> Result<_> {
                    fill_point(pt, ens, triple, control, k, i);
                    pt.lambda = lam[i];
                    let hk = weights
                        .iter()
                        .enumerate()
                        .map(|(j, w)| Ok(grad_h(model, pt, Var::K(j))? / w))
                        .collect::<Result<Vec<_>>>()?;
                    Ok((
                        grad_h(model, pt, Var::Y)?,
                        grad_h(model, pt, Var::N)?,
                        grad_h(model, pt, Var::Z)?,
                        hk,
                    ))
                },
            )
            .collect::<Result<_>>()?;
        let e_hn = grads.iter().map(|g| g.1).sum::<f64>() / n as f64;
        let dw = noise.dw(k);
        let next: Vec<f64> = grads
            .iter()
            .enumerate()
            .map(|(i, (hy, _, hz, hk))| {
                let mut v = lam[i] + (hy + e_hn) * dt + hz * dw[i];
                for (j, (h, w)) in hk.iter().zip(&weights).enumerate() {
                    v += h * noise.compensated(k, i, j, *w);
                }
                v
            })
            .collect();
        check_finite(&next, "lambda", k + 1)?;
        lambda.col_mut(k + 1).copy_from_slice(&next);
    }
    Ok(lambda)
}

/// Terminal value `p_N = a lambda_N + dh2/dx + E[dh2/dn] psi'(X_N)`.
fn terminal_p(model: &CoefficientModel, ens: &ParticleEnsemble, lambda: &ParticlePaths) -> Vec<f64> {
    let last = ens.grid().n_steps();
    let x = ens.x_main(last);
    let n = x.len() as f64;
    let a = model.terminal_coupling;
    let mut p: Vec<f64> = lambda.col(last).iter().map(|l| a * l).collect();
    if let Some(h2) = &model.h2 {
        let nbar = x.iter().map(|v| model.psi.eval(*v)).sum::<f64>() / n;
        let e_dn = x.iter().map(|v| h2.dn(*v, nbar)).sum::<f64>() / n;
        for (pi, xi) in p.iter_mut().zip(x) {
            *pi += h2.dx(*xi, nbar) + e_dn * model.psi.deriv(*xi);
        }
    }
    p
}

/// Backward induction for `(p, q, r)` given `lambda`.
pub fn solve_adjoint_backward(
    model: &CoefficientModel,
    ens: &ParticleEnsemble,
    noise: &NoiseEnsemble,
    triple: &BackwardTriple,
    lambda: ParticlePaths,
    control: &ControlProcess,
    basis: &RegressionBasis,
) -> Result<AdjointState> {
    let grid = *ens.grid();
    let n = ens.n_particles();
    let n_steps = grid.n_steps();
    let dt = grid.dt();
    let n_lifts = model.n_lifts();
    let mf_dim = model.mean_field_dim();
    let n_marks = model.n_marks();
    let weights = model.jumps.weights().to_vec();
    let measures = model.delay.measures();

    let mut st = AdjointState {
        p: ParticlePaths::zeros(n, grid.n_main()),
        p_cont: ParticlePaths::zeros(n, n_steps),
        q: ParticlePaths::zeros(n, n_steps),
        r: (0..n_marks).map(|_| ParticlePaths::zeros(n, n_steps)).collect(),
        upsilon: ParticlePaths::zeros(n, n_steps),
        h_u: ParticlePaths::zeros(n, n_steps),
        se: vec![0.0; n_steps],
        lambda,
    };
    let p_end = terminal_p(model, ens, &st.lambda);
    check_finite(&p_end, "adjoint p", n_steps)?;
    st.p.col_mut(n_steps).copy_from_slice(&p_end);

    // dH/dx_l per lift and E[dH/dm] per step, kept for the advanced sums.
    let mut h_x: Vec<ParticlePaths> = (0..n_lifts).map(|_| ParticlePaths::zeros(n, n_steps)).collect();
    let mut e_hm = vec![0.0; n_steps * mf_dim];

    for k in (0..n_steps).rev() {
        let proj = projector_at(ens, basis, k)?;
        let next = st.p.col(k + 1).to_vec();
        let (cont, se) = proj.project_with_se(&next);
        let dw = noise.dw(k);
        let (q, _) = martingale_coefficient(&proj, &next, &cont, |i| dw[i], dt);
        let r: Vec<Vec<f64>> = weights
            .iter()
            .enumerate()
            .map(|(j, &w)| martingale_coefficient(&proj, &next, &cont, |i| noise.compensated(k, i, j, w), w * dt).0)
            .collect();

        let lam = st.lambda.col(k);
        let grads: Vec<(Vec<f64>, Vec<f64>, f64)> = (0..n)
            .into_par_iter()
            .map_init(
                || blank_point(model),
                |pt, i| -> Result<_> {
                    fill_point(pt, ens, triple, control, k, i);
                    pt.p = cont[i];
                    pt.q = q[i];
                    for (rj, col) in pt.r.iter_mut().zip(&r) {
                        *rj = col[i];
                    }
                    pt.lambda = lam[i];
                    let hx = (0..n_lifts)
                        .map(|l| grad_h(model, pt, Var::X(l)))
                        .collect::<Result<Vec<_>>>()?;
                    let hm = (0..mf_dim)
                        .map(|l| grad_h(model, pt, Var::M(l)))
                        .collect::<Result<Vec<_>>>()?;
                    Ok((hx, hm, grad_h(model, pt, Var::U)?))
                },
            )
            .collect::<Result<_>>()?;
        for l in 0..mf_dim {
            e_hm[k * mf_dim + l] = grads.iter().map(|g| g.1[l]).sum::<f64>() / n as f64;
        }
        for (i, (hx, _, hu)) in grads.iter().enumerate() {
            for (l, v) in hx.iter().enumerate() {
                h_x[l].set(i, k, *v);
            }
            st.h_u.set(i, k, *hu);
        }

        let x_now = ens.x_main(k);
        let ups: Vec<f64> = (0..n)
            .map(|i| {
                let mut acc = 0.0;
                for (l, mu) in measures.iter().enumerate() {
                    for a in mu.atoms() {
                        let s = k + a.lag;
                        if s >= n_steps {
                            continue;
                        }
                        let mut v = h_x[l].get(i, s);
                        if let MeanField::Lifted = model.mean_field {
                            v += e_hm[s * mf_dim + l];
                        }
                        acc += a.mass * v;
                    }
                }
                if let MeanField::Phi(phi) = &model.mean_field {
                    acc += e_hm[k * mf_dim] * phi.deriv(x_now[i]);
                }
                acc
            })
            .collect();
        let ups_cond = proj.project(&ups);
        let pk: Vec<f64> = cont.iter().zip(&ups_cond).map(|(c, u)| c + u * dt).collect();
        check_finite(&pk, "adjoint p", k)?;

        st.p.col_mut(k).copy_from_slice(&pk);
        st.p_cont.col_mut(k).copy_from_slice(&cont);
        st.q.col_mut(k).copy_from_slice(&q);
        for (col, rj) in st.r.iter_mut().zip(&r) {
            col.col_mut(k).copy_from_slice(rj);
        }
        st.upsilon.col_mut(k).copy_from_slice(&ups);
        st.se[k] = se;
    }
    Ok(st)
}

/// `lambda` forward, then `(p, q, r)` backward.
pub fn solve_adjoint(
    model: &CoefficientModel,
    ens: &ParticleEnsemble,
    noise: &NoiseEnsemble,
    triple: &BackwardTriple,
    control: &ControlProcess,
    basis: &RegressionBasis,
) -> Result<AdjointState> {
    let lambda = solve_lambda_forward(model, ens, noise, triple, control)?;
    solve_adjoint_backward(model, ens, noise, triple, lambda, control, basis)
}

/// Weighted norms of the adjoint solution: `sup_t e^{kappa t} E[p^2]` and
/// `int E[lambda^2] + e^{kappa t} E[q^2 + sum_j w_j r_j^2] dt`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdjointNorms {
    pub weighted_sup_p: f64,
    pub integral: f64,
}

pub fn adjoint_norms(st: &AdjointState, model: &CoefficientModel, dt: f64, kappa: f64) -> AdjointNorms {
    let second = |p: &ParticlePaths, k: usize| {
        let c = p.col(k);
        c.iter().map(|v| v * v).sum::<f64>() / c.len() as f64
    };
    let mut sup = 0.0f64;
    for k in 0..st.p.n_cols() {
        sup = sup.max((kappa * k as f64 * dt).exp() * second(&st.p, k));
    }
    let mut integral = 0.0;
    for k in 0..st.q.n_cols() {
        let mut s = second(&st.q, k);
        for (rj, w) in st.r.iter().zip(model.jumps.weights()) {
            s += w * second(rj, k);
        }
        integral += (second(&st.lambda, k) + (kappa * k as f64 * dt).exp() * s) * dt;
    }
    AdjointNorms {
        weighted_sup_p: sup,
        integral,
    }
}
