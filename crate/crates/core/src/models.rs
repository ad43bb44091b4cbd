//! Built-in models with analytic partial derivatives.

use crate::error::{Error, Result};
use crate::model::{CoefficientModel, FnCoef, Univariate, Var};
use crate::paths::{JumpSpec, TimeGrid};
use crate::recursive_utility::ConsumptionModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Builtin {
    RecursiveUtility,
    LinearToy,
    JumpMartingale,
    BrownianBsde,
    QuadraticDrift,
}

impl Builtin {
    pub const ALL: [Builtin; 5] = [
        Builtin::RecursiveUtility,
        Builtin::LinearToy,
        Builtin::JumpMartingale,
        Builtin::BrownianBsde,
        Builtin::QuadraticDrift,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Builtin::RecursiveUtility => "recursive_utility",
            Builtin::LinearToy => "linear_toy",
            Builtin::JumpMartingale => "jump_martingale",
            Builtin::BrownianBsde => "brownian_bsde",
            Builtin::QuadraticDrift => "quadratic_drift",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|b| b.name() == name).ok_or_else(|| {
            let names: Vec<_> = Self::ALL.iter().map(|b| b.name()).collect();
            Error::Model(format!("unknown model '{name}', expected one of {}", names.join(", ")))
        })
    }
}

/// `dX = (theta x + u) dt + sigma dB`, `g = -rho y + x - u^2 / 2`,
/// `Y(T) = X(T)`, `J = Y(0)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearToy {
    pub x0: f64,
    pub theta: f64,
    pub sigma: f64,
    pub rho: f64,
}

impl Default for LinearToy {
    fn default() -> Self {
        Self {
            x0: 1.0,
            theta: 0.2,
            sigma: 0.3,
            rho: 0.1,
        }
    }
}

pub fn linear_toy(grid: &TimeGrid, p: LinearToy) -> CoefficientModel {
    let LinearToy { x0, theta, sigma, rho } = p;
    CoefficientModel::new(grid)
        .with_drift(FnCoef::new(move |a| theta * a.x[0] + a.u).with_partials(move |_, v| {
            Some(match v {
                Var::X(0) => theta,
                Var::U => 1.0,
                _ => 0.0,
            })
        }))
        .with_diffusion(FnCoef::new(move |_| sigma).with_partials(|_, _| Some(0.0)))
        .with_driver(
            FnCoef::new(move |a| -rho * a.y + a.x[0] - 0.5 * a.u * a.u).with_partials(move |a, v| {
                Some(match v {
                    Var::Y => -rho,
                    Var::X(0) => 1.0,
                    Var::U => -a.u,
                    _ => 0.0,
                })
            }),
        )
        .with_objective(Univariate::identity(), None, Univariate::identity())
        .with_terminal_coupling(1.0)
        .with_prehistory(move |_| x0)
}

/// Pure jump martingale `dX = int e N~(dt, de)`, `Y(T) = X(T)`.
pub fn jump_martingale(grid: &TimeGrid, x0: f64, jumps: JumpSpec) -> CoefficientModel {
    CoefficientModel::new(grid)
        .with_jump(
            FnCoef::new(|a| a.e).with_partials(|_, _| Some(0.0)),
            jumps,
        )
        .with_objective(Univariate::identity(), None, Univariate::identity())
        .with_terminal_coupling(1.0)
        .with_prehistory(move |_| x0)
}

/// Brownian motion started at `x0` with `g = 0` and `Y(T) = X(T)`, so that
/// `Y = X` and `Z = 1`.
pub fn brownian_bsde(grid: &TimeGrid, x0: f64) -> CoefficientModel {
    CoefficientModel::new(grid)
        .with_diffusion(FnCoef::new(|_| 1.0).with_partials(|_, _| Some(0.0)))
        .with_objective(Univariate::identity(), None, Univariate::identity())
        .with_terminal_coupling(1.0)
        .with_prehistory(move |_| x0)
}

/// `dX = (-x + u^2) dt + sigma dB`, running reward `-x^2 / 2`.
pub fn quadratic_drift(grid: &TimeGrid, x0: f64, sigma: f64) -> CoefficientModel {
    CoefficientModel::new(grid)
        .with_drift(FnCoef::new(|a| -a.x[0] + a.u * a.u).with_partials(|a, v| {
            Some(match v {
                Var::X(0) => -1.0,
                Var::U => 2.0 * a.u,
                _ => 0.0,
            })
        }))
        .with_diffusion(FnCoef::new(move |_| sigma).with_partials(|_, _| Some(0.0)))
        .with_running(FnCoef::new(|a| -0.5 * a.x[0] * a.x[0]).with_partials(|a, v| {
            Some(match v {
                Var::X(0) => -a.x[0],
                _ => 0.0,
            })
        }))
        .with_prehistory(move |_| x0)
}

/// Built-in model with default parameters on `grid`. The recursive-utility
/// model takes its grid from its own parameters.
pub fn builtin(b: Builtin, grid: &TimeGrid) -> Result<CoefficientModel> {
    Ok(match b {
        Builtin::RecursiveUtility => {
            let m = ConsumptionModel {
                horizon: grid.t_end(),
                dt: grid.dt(),
                delta: grid.delta(),
                ..Default::default()
            };
            m.coefficient_model()?.0
        }
        Builtin::LinearToy => linear_toy(grid, LinearToy::default()),
        Builtin::JumpMartingale => jump_martingale(grid, 0.0, JumpSpec::new(vec![-1.0, 0.5], vec![0.5, 1.0])?),
        Builtin::BrownianBsde => brownian_bsde(grid, 0.0),
        Builtin::QuadraticDrift => quadratic_drift(grid, 1.0, 0.3),
    })
}
