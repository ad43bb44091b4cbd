//! The Hamiltonian `H = f + b p + sigma q + sum_j gamma(e_j) r_j w_j + g lambda`
//! and its partial derivatives.

use crate::error::Result;
use crate::model::{partial, Args, CoefficientModel, Var};

/// All arguments of the Hamiltonian at one point.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct HamiltonianPoint {
    pub t: f64,
    pub x: Vec<f64>,
    pub m: Vec<f64>,
    pub y: f64,
    pub n: f64,
    pub z: f64,
    pub k: Vec<f64>,
    pub u: f64,
    pub p: f64,
    pub q: f64,
    pub r: Vec<f64>,
    pub lambda: f64,
}

impl HamiltonianPoint {
    pub fn args(&self) -> Args<'_> {
        Args {
            t: self.t,
            x: &self.x,
            m: &self.m,
            y: self.y,
            n: self.n,
            z: self.z,
            k: &self.k,
            u: self.u,
            e: 0.0,
        }
    }
}

/// The individual terms of `H` at one point.
#[derive(Debug, Clone, PartialEq)]
pub struct HamiltonianParts {
    pub f: f64,
    pub b: f64,
    pub sigma: f64,
    /// `gamma(e_j)` per mark.
    pub gamma: Vec<f64>,
    pub g: f64,
}

pub fn eval_parts(model: &CoefficientModel, pt: &HamiltonianPoint) -> HamiltonianParts {
    let a = pt.args();
    HamiltonianParts {
        f: model.running.eval(&a),
        b: model.drift.eval(&a),
        sigma: model.diffusion.eval(&a),
        gamma: model
            .jumps
            .marks()
            .iter()
            .map(|&e| model.jump.eval(&a.with_mark(e)))
            .collect(),
        g: model.driver.eval(&a),
    }
}

/// `H` evaluated at `pt`. The same expression serves finite and truncated
/// infinite horizons.
pub fn eval_h(model: &CoefficientModel, pt: &HamiltonianPoint) -> f64 {
    let parts = eval_parts(model, pt);
    let jump: f64 = parts
        .gamma
        .iter()
        .zip(&pt.r)
        .zip(model.jumps.weights())
        .map(|((g, r), w)| g * r * w)
        .sum();
    parts.f + parts.b * pt.p + parts.sigma * pt.q + jump + parts.g * pt.lambda
}

/// `dH/dv`. For `Var::K(j)` this is the plain partial in `k_j`; divide by
/// `w_j` for the per-mark Frechet gradient (see [`frechet_k`]).
pub fn grad_h(model: &CoefficientModel, pt: &HamiltonianPoint, v: Var) -> Result<f64> {
    let a = pt.args();
    let h = model.fd_step;
    let mut d = partial(model.running.as_ref(), &a, v, h)? + pt.lambda * partial(model.driver.as_ref(), &a, v, h)?;
    // Forward coefficients only depend on (t, x, m, u).
    if matches!(v, Var::X(_) | Var::M(_) | Var::U) {
        d += pt.p * partial(model.drift.as_ref(), &a, v, h)?;
        d += pt.q * partial(model.diffusion.as_ref(), &a, v, h)?;
        for ((&e, &w), r) in model.jumps.marks().iter().zip(model.jumps.weights()).zip(&pt.r) {
            d += r * w * partial(model.jump.as_ref(), &a.with_mark(e), v, h)?;
        }
    }
    Ok(d)
}

/// Per-mark Frechet gradient in `k`: `(dH/dk_j) / w_j`.
pub fn frechet_k(model: &CoefficientModel, pt: &HamiltonianPoint) -> Result<Vec<f64>> {
    model
        .jumps
        .weights()
        .iter()
        .enumerate()
        .map(|(j, w)| Ok(grad_h(model, pt, Var::K(j))? / w))
        .collect()
}

/// Gradient of `H` in every argument.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct HamiltonianGradient {
    pub x: Vec<f64>,
    pub m: Vec<f64>,
    pub y: f64,
    pub n: f64,
    pub z: f64,
    /// Plain partials `dH/dk_j`.
    pub k: Vec<f64>,
    pub u: f64,
}

pub fn gradient(model: &CoefficientModel, pt: &HamiltonianPoint) -> Result<HamiltonianGradient> {
    Ok(HamiltonianGradient {
        x: (0..pt.x.len())
            .map(|i| grad_h(model, pt, Var::X(i)))
            .collect::<Result<_>>()?,
        m: (0..pt.m.len())
            .map(|i| grad_h(model, pt, Var::M(i)))
            .collect::<Result<_>>()?,
        y: grad_h(model, pt, Var::Y)?,
        n: grad_h(model, pt, Var::N)?,
        z: grad_h(model, pt, Var::Z)?,
        k: (0..pt.k.len())
            .map(|j| grad_h(model, pt, Var::K(j)))
            .collect::<Result<_>>()?,
        u: grad_h(model, pt, Var::U)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{FnCoef, MeanField};
    use crate::paths::{make_grid, JumpSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy() -> CoefficientModel {
        let grid = make_grid(1.0, 0.1, 0.0).unwrap();
        let jumps = JumpSpec::new(vec![-0.5, 1.0], vec![1.0, 0.5]).unwrap();
        CoefficientModel::new(&grid)
            .with_drift(FnCoef::new(|a| a.x[0] * a.m[0] - a.u * a.u))
            .with_diffusion(FnCoef::new(|a| 0.2 + a.x[0].sin()))
            .with_jump(FnCoef::new(|a| a.e * a.x[0] * a.u), jumps)
            .with_driver(FnCoef::new(|a| -a.y + 0.3 * a.n + a.z * a.k[0] - a.u.exp()))
            .with_running(FnCoef::new(|a| -0.5 * a.x[0] * a.x[0] + a.k[1]))
    }

    fn random_point(rng: &mut ChaCha8Rng) -> HamiltonianPoint {
        let mut s = || rng.random_range(-1.5..1.5);
        HamiltonianPoint {
            t: 0.3,
            x: vec![s()],
            m: vec![s()],
            y: s(),
            n: s(),
            z: s(),
            k: vec![s(), s()],
            u: s(),
            p: s(),
            q: s(),
            r: vec![s(), s()],
            lambda: s(),
        }
    }

    #[test]
    fn zero_components_leave_drift_and_diffusion_terms() {
        let grid = make_grid(1.0, 0.1, 0.0).unwrap();
        let model = CoefficientModel::new(&grid)
            .with_drift(FnCoef::new(|a| 2.0 * a.x[0]))
            .with_diffusion(FnCoef::new(|_| 0.5));
        let pt = HamiltonianPoint {
            x: vec![1.5],
            m: vec![0.0],
            p: 2.0,
            q: -4.0,
            ..Default::default()
        };
        assert_eq!(eval_h(&model, &pt), 3.0 * 2.0 + 0.5 * -4.0);
    }

    #[test]
    fn constant_running_objective_at_origin() {
        let grid = make_grid(1.0, 0.1, 0.0).unwrap();
        let model = CoefficientModel::new(&grid).with_running(FnCoef::new(|_| 2.5));
        let pt = HamiltonianPoint {
            x: vec![0.0],
            m: vec![0.0],
            ..Default::default()
        };
        assert_eq!(eval_h(&model, &pt), 2.5);
    }

    #[test]
    fn decomposition_identity_at_random_points() {
        let model = toy();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let pt = random_point(&mut rng);
            let parts = eval_parts(&model, &pt);
            let rest = eval_h(&model, &pt) - parts.f - parts.g * pt.lambda;
            let jump: f64 = parts
                .gamma
                .iter()
                .zip(&pt.r)
                .zip(model.jumps.weights())
                .map(|((g, r), w)| g * r * w)
                .sum();
            let direct = pt.p * parts.b + pt.q * parts.sigma + jump;
            assert!((rest - direct).abs() <= 1e-12 * (1.0 + direct.abs()));
        }
    }

    #[test]
    fn gradient_matches_difference_of_h() {
        let model = toy();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let pt = random_point(&mut rng);
            let grad = gradient(&model, &pt).unwrap();
            let h = 1e-6;
            let fd = |f: &dyn Fn(&mut HamiltonianPoint, f64)| {
                let (mut up, mut dn) = (pt.clone(), pt.clone());
                f(&mut up, h);
                f(&mut dn, -h);
                (eval_h(&model, &up) - eval_h(&model, &dn)) / (2.0 * h)
            };
            let close = |a: f64, b: f64| (a - b).abs() < 1e-6 * (1.0 + a.abs());
            assert!(close(grad.x[0], fd(&|p, s| p.x[0] += s)));
            assert!(close(grad.m[0], fd(&|p, s| p.m[0] += s)));
            assert!(close(grad.y, fd(&|p, s| p.y += s)));
            assert!(close(grad.n, fd(&|p, s| p.n += s)));
            assert!(close(grad.z, fd(&|p, s| p.z += s)));
            assert!(close(grad.k[0], fd(&|p, s| p.k[0] += s)));
            assert!(close(grad.k[1], fd(&|p, s| p.k[1] += s)));
            assert!(close(grad.u, fd(&|p, s| p.u += s)));
        }
    }

    #[test]
    fn linear_in_z_gives_exact_partial() {
        let grid = make_grid(1.0, 0.1, 0.0).unwrap();
        let model = CoefficientModel::new(&grid).with_driver(FnCoef::new(|a| 0.7 * a.z));
        let pt = HamiltonianPoint {
            x: vec![0.0],
            m: vec![0.0],
            z: 3.0,
            lambda: 2.0,
            ..Default::default()
        };
        assert!((grad_h(&model, &pt, Var::Z).unwrap() - 1.4).abs() < 1e-9);
    }

    #[test]
    fn consumption_hamiltonian_u_derivative() {
        let grid = make_grid(1.0, 0.1, 0.0).unwrap();
        let model = CoefficientModel::new(&grid)
            .with_mean_field(MeanField::Lifted)
            .with_drift(FnCoef::new(|a| 0.05 * a.m[0] - a.u))
            .with_driver(FnCoef::new(|a| -0.4 * a.y + 0.1 * a.n - a.u.ln()));
        let pt = HamiltonianPoint {
            x: vec![1.0],
            m: vec![1.0],
            u: 0.8,
            p: -1.2,
            lambda: 0.9,
            ..Default::default()
        };
        let expected = 1.2 - 0.9 / 0.8;
        assert!((grad_h(&model, &pt, Var::U).unwrap() - expected).abs() < 1e-8);
    }

    #[test]
    fn frechet_gradient_divides_by_weight() {
        let model = toy();
        let pt = HamiltonianPoint {
            x: vec![0.4],
            m: vec![0.1],
            z: 2.0,
            k: vec![0.0, 0.0],
            r: vec![0.0, 0.0],
            lambda: 3.0,
            ..Default::default()
        };
        let fr = frechet_k(&model, &pt).unwrap();
        assert!((fr[0] - 3.0 * 2.0 / 1.0).abs() < 1e-7);
        assert!((fr[1] - 1.0 / 0.5).abs() < 1e-7);
    }
}
