//! Coefficient functions, controls and the full coefficient model.
//!
//! Every coefficient (`b`, `sigma`, `gamma`, `g`, `f`) is a scalar function
//! of one shared argument list [`Args`]; arguments a coefficient does not use
//! are simply ignored. Partial derivatives are analytic when the coefficient
//! provides them and central finite differences otherwise.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::delay::DelaySpec;
use crate::error::{Error, Result};
use crate::paths::{JumpSpec, ParticlePaths, TimeGrid};

/// Argument list shared by all coefficients.
///
/// `x` is the lifted (delayed) state, `m` the mean-field lift, `n` the mean
/// of `y`, `k` the jump coefficient per mark and `e` the jump mark (only
/// meaningful for `gamma`).
#[derive(Debug, Clone, Copy)]
pub struct Args<'a> {
    pub t: f64,
    pub x: &'a [f64],
    pub m: &'a [f64],
    pub y: f64,
    pub n: f64,
    pub z: f64,
    pub k: &'a [f64],
    pub u: f64,
    pub e: f64,
}

impl<'a> Args<'a> {
    pub fn forward(t: f64, x: &'a [f64], m: &'a [f64], u: f64) -> Self {
        Self {
            t,
            x,
            m,
            y: 0.0,
            n: 0.0,
            z: 0.0,
            k: &[],
            u,
            e: 0.0,
        }
    }

    pub fn with_mark(mut self, e: f64) -> Self {
        self.e = e;
        self
    }
}

/// A differentiation variable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Var {
    X(usize),
    M(usize),
    Y,
    N,
    Z,
    K(usize),
    U,
}

impl fmt::Display for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Var::X(i) => write!(f, "x{}", i + 1),
            Var::M(i) => write!(f, "m{}", i + 1),
            Var::Y => write!(f, "y"),
            Var::N => write!(f, "n"),
            Var::Z => write!(f, "z"),
            Var::K(j) => write!(f, "k{}", j + 1),
            Var::U => write!(f, "u"),
        }
    }
}

/// A scalar coefficient with optional analytic partial derivatives.
pub trait ScalarFn: Send + Sync {
    fn eval(&self, a: &Args) -> f64;

    /// Analytic partial derivative, `None` when not available.
    fn partial(&self, _a: &Args, _v: Var) -> Option<f64> {
        None
    }
}

/// Default relative finite-difference step.
pub const DEFAULT_FD_STEP: f64 = 1e-6;

/// Central finite difference of `f` in `v` with step `rel_step * max(1, |v|)`.
pub fn finite_difference(f: &dyn ScalarFn, a: &Args, v: Var, rel_step: f64) -> Result<f64> {
    let mut x = a.x.to_vec();
    let mut m = a.m.to_vec();
    let mut k = a.k.to_vec();
    let mut scalars = [a.y, a.n, a.z, a.u];
    let base = match v {
        Var::X(i) => x.get(i).copied(),
        Var::M(i) => m.get(i).copied(),
        Var::K(j) => k.get(j).copied(),
        Var::Y => Some(a.y),
        Var::N => Some(a.n),
        Var::Z => Some(a.z),
        Var::U => Some(a.u),
    };
    let Some(base) = base else {
        return Ok(0.0);
    };
    let h = rel_step * base.abs().max(1.0);
    if !(h > 0.0) || base + h == base || base - h == base {
        return Err(Error::StepUnderflow(v.to_string()));
    }
    let mut eval_at = |val: f64| {
        match v {
            Var::X(i) => x[i] = val,
            Var::M(i) => m[i] = val,
            Var::K(j) => k[j] = val,
            Var::Y => scalars[0] = val,
            Var::N => scalars[1] = val,
            Var::Z => scalars[2] = val,
            Var::U => scalars[3] = val,
        }
        let args = Args {
            t: a.t,
            x: &x,
            m: &m,
            y: scalars[0],
            n: scalars[1],
            z: scalars[2],
            k: &k,
            u: scalars[3],
            e: a.e,
        };
        f.eval(&args)
    };
    let up = eval_at(base + h);
    let down = eval_at(base - h);
    Ok((up - down) / (2.0 * h))
}

/// Partial derivative: analytic if registered, finite difference otherwise.
#[inline]
pub fn partial(f: &dyn ScalarFn, a: &Args, v: Var, rel_step: f64) -> Result<f64> {
    match f.partial(a, v) {
        Some(d) => Ok(d),
        None => finite_difference(f, a, v, rel_step),
    }
}

type ValueFn = dyn Fn(&Args) -> f64 + Send + Sync;
type PartialFn = dyn Fn(&Args, Var) -> Option<f64> + Send + Sync;

/// Closure-backed coefficient.
#[derive(Clone)]
pub struct FnCoef {
    value: Arc<ValueFn>,
    partial: Option<Arc<PartialFn>>,
}

impl FnCoef {
    pub fn new(value: impl Fn(&Args) -> f64 + Send + Sync + 'static) -> Self {
        Self {
            value: Arc::new(value),
            partial: None,
        }
    }

    /// Adds analytic partials; return `None` for variables to difference
    /// numerically.
    pub fn with_partials(
        mut self,
        partial: impl Fn(&Args, Var) -> Option<f64> + Send + Sync + 'static,
    ) -> Self {
        self.partial = Some(Arc::new(partial));
        self
    }
}

impl ScalarFn for FnCoef {
    fn eval(&self, a: &Args) -> f64 {
        (self.value)(a)
    }

    fn partial(&self, a: &Args, v: Var) -> Option<f64> {
        self.partial.as_ref().and_then(|p| p(a, v))
    }
}

/// The zero coefficient.
#[derive(Debug, Clone, Copy, Default)]
pub struct Zero;

impl ScalarFn for Zero {
    fn eval(&self, _a: &Args) -> f64 {
        0.0
    }

    fn partial(&self, _a: &Args, _v: Var) -> Option<f64> {
        Some(0.0)
    }
}

type Fn1 = dyn Fn(f64) -> f64 + Send + Sync;

/// Scalar function of one variable with optional derivative.
#[derive(Clone)]
pub struct Univariate {
    f: Arc<Fn1>,
    df: Option<Arc<Fn1>>,
}

impl Univariate {
    pub fn new(
        f: impl Fn(f64) -> f64 + Send + Sync + 'static,
        df: impl Fn(f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self {
            f: Arc::new(f),
            df: Some(Arc::new(df)),
        }
    }

    pub fn numeric(f: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Self {
        Self {
            f: Arc::new(f),
            df: None,
        }
    }

    pub fn identity() -> Self {
        Self::new(|x| x, |_| 1.0)
    }

    pub fn zero() -> Self {
        Self::new(|_| 0.0, |_| 0.0)
    }

    pub fn linear(slope: f64) -> Self {
        Self::new(move |x| slope * x, move |_| slope)
    }

    pub fn eval(&self, x: f64) -> f64 {
        (self.f)(x)
    }

    pub fn has_analytic_derivative(&self) -> bool {
        self.df.is_some()
    }

    pub fn deriv(&self, x: f64) -> f64 {
        match &self.df {
            Some(df) => df(x),
            None => self.numeric_deriv(x),
        }
    }

    fn numeric_deriv(&self, x: f64) -> f64 {
        let h = DEFAULT_FD_STEP * x.abs().max(1.0);
        ((self.f)(x + h) - (self.f)(x - h)) / (2.0 * h)
    }
}

type Fn2 = dyn Fn(f64, f64) -> f64 + Send + Sync;

/// Terminal objective `h2(x, n)` with partials.
#[derive(Clone)]
pub struct Bivariate {
    f: Arc<Fn2>,
    dx: Arc<Fn2>,
    dn: Arc<Fn2>,
}

impl Bivariate {
    pub fn new(
        f: impl Fn(f64, f64) -> f64 + Send + Sync + 'static,
        dx: impl Fn(f64, f64) -> f64 + Send + Sync + 'static,
        dn: impl Fn(f64, f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self {
            f: Arc::new(f),
            dx: Arc::new(dx),
            dn: Arc::new(dn),
        }
    }

    pub fn eval(&self, x: f64, n: f64) -> f64 {
        (self.f)(x, n)
    }

    pub fn dx(&self, x: f64, n: f64) -> f64 {
        (self.dx)(x, n)
    }

    pub fn dn(&self, x: f64, n: f64) -> f64 {
        (self.dn)(x, n)
    }
}

/// How the law of the state enters the coefficients.
#[derive(Clone)]
pub enum MeanField {
    /// `m = E[lifted state]`, one component per delay measure.
    Lifted,
    /// `m = E[Phi(X(t))]`, a single component.
    Phi(Univariate),
}

impl MeanField {
    pub fn dim(&self, n_lifts: usize) -> usize {
        match self {
            MeanField::Lifted => n_lifts,
            MeanField::Phi(_) => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum HorizonMode {
    Finite { t_end: f64 },
    /// Infinite horizon truncated at `t_max`; `kappa` is the decay rate used
    /// in the norm diagnostics.
    InfiniteTruncated { t_max: f64, kappa: f64 },
}

impl HorizonMode {
    pub fn t_end(&self) -> f64 {
        match self {
            HorizonMode::Finite { t_end } => *t_end,
            HorizonMode::InfiniteTruncated { t_max, .. } => *t_max,
        }
    }

    pub fn kappa(&self) -> f64 {
        match self {
            HorizonMode::Finite { .. } => 0.0,
            HorizonMode::InfiniteTruncated { kappa, .. } => *kappa,
        }
    }

    pub fn is_infinite(&self) -> bool {
        matches!(self, HorizonMode::InfiniteTruncated { .. })
    }

    pub fn with_horizon(&self, t: f64) -> Self {
        match self {
            HorizonMode::Finite { .. } => HorizonMode::Finite { t_end: t },
            HorizonMode::InfiniteTruncated { kappa, .. } => HorizonMode::InfiniteTruncated {
                t_max: t,
                kappa: *kappa,
            },
        }
    }
}

/// The coefficient tuple of a controlled mean-field FBSDE with delay and
/// jumps, together with its objective and boundary data.
///
/// The objective is `E[sum f dt + h1(Y(0)) + h2(X(T), E[psi(X(T))])]` and the
/// terminal condition of the backward equation is `Y(T) = a X(T)`.
#[derive(Clone)]
pub struct CoefficientModel {
    pub drift: Arc<dyn ScalarFn>,
    pub diffusion: Arc<dyn ScalarFn>,
    pub jump: Arc<dyn ScalarFn>,
    pub driver: Arc<dyn ScalarFn>,
    pub running: Arc<dyn ScalarFn>,
    pub mean_field: MeanField,
    pub h1: Univariate,
    pub h2: Option<Bivariate>,
    pub psi: Univariate,
    pub terminal_coupling: f64,
    pub control_bounds: (f64, f64),
    pub delay: DelaySpec,
    pub jumps: JumpSpec,
    pub horizon: HorizonMode,
    pub prehistory: Arc<Fn1>,
    pub fd_step: f64,
}

impl fmt::Debug for CoefficientModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CoefficientModel")
            .field("n_lifts", &self.n_lifts())
            .field("n_marks", &self.jumps.len())
            .field("terminal_coupling", &self.terminal_coupling)
            .field("control_bounds", &self.control_bounds)
            .field("horizon", &self.horizon)
            .finish_non_exhaustive()
    }
}

impl CoefficientModel {
    /// All-zero model on `grid` without delay, jumps or mean-field terms,
    /// finite horizon `grid.t_end()`.
    pub fn new(grid: &TimeGrid) -> Self {
        Self {
            drift: Arc::new(Zero),
            diffusion: Arc::new(Zero),
            jump: Arc::new(Zero),
            driver: Arc::new(Zero),
            running: Arc::new(Zero),
            mean_field: MeanField::Lifted,
            h1: Univariate::zero(),
            h2: None,
            psi: Univariate::identity(),
            terminal_coupling: 0.0,
            control_bounds: (f64::NEG_INFINITY, f64::INFINITY),
            delay: DelaySpec::undelayed(grid),
            jumps: JumpSpec::none(),
            horizon: HorizonMode::Finite {
                t_end: grid.t_end(),
            },
            prehistory: Arc::new(|_| 0.0),
            fd_step: DEFAULT_FD_STEP,
        }
    }

    pub fn with_drift(mut self, f: impl ScalarFn + 'static) -> Self {
        self.drift = Arc::new(f);
        self
    }

    pub fn with_diffusion(mut self, f: impl ScalarFn + 'static) -> Self {
        self.diffusion = Arc::new(f);
        self
    }

    pub fn with_jump(mut self, f: impl ScalarFn + 'static, jumps: JumpSpec) -> Self {
        self.jump = Arc::new(f);
        self.jumps = jumps;
        self
    }

    pub fn with_driver(mut self, f: impl ScalarFn + 'static) -> Self {
        self.driver = Arc::new(f);
        self
    }

    pub fn with_running(mut self, f: impl ScalarFn + 'static) -> Self {
        self.running = Arc::new(f);
        self
    }

    pub fn with_mean_field(mut self, mf: MeanField) -> Self {
        self.mean_field = mf;
        self
    }

    pub fn with_delay(mut self, delay: DelaySpec) -> Self {
        self.delay = delay;
        self
    }

    pub fn with_objective(mut self, h1: Univariate, h2: Option<Bivariate>, psi: Univariate) -> Self {
        self.h1 = h1;
        self.h2 = h2;
        self.psi = psi;
        self
    }

    pub fn with_terminal_coupling(mut self, a: f64) -> Self {
        self.terminal_coupling = a;
        self
    }

    pub fn with_control_bounds(mut self, lo: f64, hi: f64) -> Self {
        self.control_bounds = (lo, hi);
        self
    }

    pub fn with_horizon(mut self, horizon: HorizonMode) -> Self {
        self.horizon = horizon;
        self
    }

    pub fn with_prehistory(mut self, x0: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Self {
        self.prehistory = Arc::new(x0);
        self
    }

    pub fn n_lifts(&self) -> usize {
        self.delay.len()
    }

    pub fn mean_field_dim(&self) -> usize {
        self.mean_field.dim(self.n_lifts())
    }

    pub fn n_marks(&self) -> usize {
        self.jumps.len()
    }

    /// Checks the model against `grid`: delay alignment and horizon.
    pub fn check_grid(&self, grid: &TimeGrid) -> Result<()> {
        if !self.delay.matches(grid) {
            return Err(Error::Model(format!(
                "delay spec built for dt={}, delta={} but grid has dt={}, delta={}",
                self.delay.dt(),
                self.delay.delta(),
                grid.dt(),
                grid.delta()
            )));
        }
        let t = self.horizon.t_end();
        if (t - grid.t_end()).abs() > 1e-9 * t.max(1.0) {
            return Err(Error::Model(format!(
                "model horizon {t} differs from grid horizon {}",
                grid.t_end()
            )));
        }
        Ok(())
    }

    /// Validates bounds and probes every registered analytic derivative
    /// against central differences at 100 random points.
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.control_bounds;
        if !(lo <= hi) {
            return Err(Error::Model(format!("empty control interval [{lo}, {hi}]")));
        }
        self.probe_derivatives(100, 1e-5)
    }

    /// Derivative probe; see [`CoefficientModel::validate`].
    pub fn probe_derivatives(&self, n_points: usize, rel_tol: f64) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
        let nx = self.n_lifts();
        let nm = self.mean_field_dim();
        let nk = self.n_marks();
        let (lo, hi) = self.control_bounds;
        let (ulo, uhi) = (lo.max(-2.0), hi.min(2.0));
        let (ulo, uhi) = if ulo <= uhi { (ulo, uhi) } else { (lo, hi) };
        let width = uhi - ulo;
        let (ulo, uhi) = (ulo + 0.05 * width, uhi - 0.05 * width);
        let t_end = self.horizon.t_end();
        let coefs: [(&str, &Arc<dyn ScalarFn>); 5] = [
            ("b", &self.drift),
            ("sigma", &self.diffusion),
            ("gamma", &self.jump),
            ("g", &self.driver),
            ("f", &self.running),
        ];
        let mut vars = Vec::new();
        vars.extend((0..nx).map(Var::X));
        vars.extend((0..nm).map(Var::M));
        vars.extend([Var::Y, Var::N, Var::Z, Var::U]);
        vars.extend((0..nk).map(Var::K));

        let close = |a: f64, b: f64| (a - b).abs() <= rel_tol * a.abs().max(b.abs()).max(1.0);
        for _ in 0..n_points {
            let x: Vec<f64> = (0..nx).map(|_| rng.random_range(-2.0..2.0)).collect();
            let m: Vec<f64> = (0..nm).map(|_| rng.random_range(-2.0..2.0)).collect();
            let k: Vec<f64> = (0..nk).map(|_| rng.random_range(-2.0..2.0)).collect();
            let u = if uhi > ulo { rng.random_range(ulo..uhi) } else { ulo };
            let e = if nk > 0 {
                self.jumps.marks()[rng.random_range(0..nk)]
            } else {
                1.0
            };
            let args = Args {
                t: rng.random_range(0.0..=t_end),
                x: &x,
                m: &m,
                y: rng.random_range(-2.0..2.0),
                n: rng.random_range(-2.0..2.0),
                z: rng.random_range(-2.0..2.0),
                k: &k,
                u,
                e,
            };
            for (name, coef) in &coefs {
                if !coef.eval(&args).is_finite() {
                    continue;
                }
                for &v in &vars {
                    let Some(analytic) = coef.partial(&args, v) else {
                        continue;
                    };
                    let numeric = finite_difference(coef.as_ref(), &args, v, self.fd_step)?;
                    if !numeric.is_finite() {
                        continue;
                    }
                    if !close(analytic, numeric) {
                        return Err(Error::DerivativeMismatch {
                            coefficient: name.to_string(),
                            var: v.to_string(),
                            analytic,
                            numeric,
                        });
                    }
                }
            }
            let s: f64 = rng.random_range(-2.0..2.0);
            let univariates = [
                ("h1", &self.h1),
                ("psi", &self.psi),
            ];
            for (name, uf) in univariates.into_iter().chain(match &self.mean_field {
                MeanField::Phi(phi) => Some(("Phi", phi)),
                MeanField::Lifted => None,
            }) {
                if uf.has_analytic_derivative() && uf.eval(s).is_finite() {
                    let (a, num) = (uf.deriv(s), uf.numeric_deriv(s));
                    if num.is_finite() && !close(a, num) {
                        return Err(Error::DerivativeMismatch {
                            coefficient: name.into(),
                            var: "x".into(),
                            analytic: a,
                            numeric: num,
                        });
                    }
                }
            }
            if let Some(h2) = &self.h2 {
                let n: f64 = rng.random_range(-2.0..2.0);
                let h = self.fd_step * s.abs().max(1.0);
                let nx_fd = (h2.eval(s + h, n) - h2.eval(s - h, n)) / (2.0 * h);
                let hn = self.fd_step * n.abs().max(1.0);
                let nn_fd = (h2.eval(s, n + hn) - h2.eval(s, n - hn)) / (2.0 * hn);
                for (var, a, num) in [("x", h2.dx(s, n), nx_fd), ("n", h2.dn(s, n), nn_fd)] {
                    if num.is_finite() && !close(a, num) {
                        return Err(Error::DerivativeMismatch {
                            coefficient: "h2".into(),
                            var: var.into(),
                            analytic: a,
                            numeric: num,
                        });
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
enum ControlValues {
    Shared(Vec<f64>),
    /// Step-major: main node `k`, particle `i` at `k * n + i`.
    PerParticle { n: usize, data: Vec<f64> },
}

/// A control on the main grid, either deterministic (shared by all
/// particles) or one value per particle and node.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlProcess {
    grid: TimeGrid,
    values: ControlValues,
}

impl ControlProcess {
    pub fn constant(grid: &TimeGrid, v: f64) -> Self {
        Self {
            grid: *grid,
            values: ControlValues::Shared(vec![v; grid.n_main()]),
        }
    }

    pub fn from_main(grid: &TimeGrid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.n_main() {
            return Err(Error::Shape(format!(
                "control has {} values, grid has {} main nodes",
                values.len(),
                grid.n_main()
            )));
        }
        Ok(Self {
            grid: *grid,
            values: ControlValues::Shared(values),
        })
    }

    pub fn from_fn(grid: &TimeGrid, f: impl Fn(f64) -> f64) -> Self {
        let values = (0..grid.n_main()).map(|k| f(grid.main_time(k))).collect();
        Self {
            grid: *grid,
            values: ControlValues::Shared(values),
        }
    }

    /// Per-particle control from a step-major matrix with one column per
    /// main node.
    pub fn per_particle(grid: &TimeGrid, paths: &ParticlePaths) -> Result<Self> {
        if paths.n_cols() != grid.n_main() {
            return Err(Error::Shape(format!(
                "control paths have {} columns, grid has {} main nodes",
                paths.n_cols(),
                grid.n_main()
            )));
        }
        let n = paths.n_particles();
        let mut data = Vec::with_capacity(n * grid.n_main());
        for k in 0..grid.n_main() {
            data.extend_from_slice(paths.col(k));
        }
        Ok(Self {
            grid: *grid,
            values: ControlValues::PerParticle { n, data },
        })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn is_shared(&self) -> bool {
        matches!(self.values, ControlValues::Shared(_))
    }

    /// Number of particles a per-particle control was built for.
    pub fn n_particles(&self) -> Option<usize> {
        match &self.values {
            ControlValues::Shared(_) => None,
            ControlValues::PerParticle { n, .. } => Some(*n),
        }
    }

    #[inline]
    pub fn at(&self, i: usize, k: usize) -> f64 {
        match &self.values {
            ControlValues::Shared(v) => v[k],
            ControlValues::PerParticle { n, data } => data[k * n + i],
        }
    }

    /// Cross-sectional mean at main node `k`.
    pub fn mean_at(&self, k: usize) -> f64 {
        match &self.values {
            ControlValues::Shared(v) => v[k],
            ControlValues::PerParticle { n, data } => {
                data[k * n..(k + 1) * n].iter().sum::<f64>() / *n as f64
            }
        }
    }

    /// Main-grid path of a shared control, or the cross-sectional mean path.
    pub fn mean_path(&self) -> Vec<f64> {
        (0..self.grid.n_main()).map(|k| self.mean_at(k)).collect()
    }

    fn values_iter(&self) -> Box<dyn Iterator<Item = f64> + '_> {
        match &self.values {
            ControlValues::Shared(v) => Box::new(v.iter().copied()),
            ControlValues::PerParticle { data, .. } => Box::new(data.iter().copied()),
        }
    }

    pub fn min(&self) -> f64 {
        self.values_iter().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values_iter().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn sup_norm(&self) -> f64 {
        self.values_iter().fold(0.0, |a, v| a.max(v.abs()))
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        let values = match &self.values {
            ControlValues::Shared(v) => ControlValues::Shared(v.iter().map(|x| f(*x)).collect()),
            ControlValues::PerParticle { n, data } => ControlValues::PerParticle {
                n: *n,
                data: data.iter().map(|x| f(*x)).collect(),
            },
        };
        Self {
            grid: self.grid,
            values,
        }
    }

    pub fn scaled(&self, s: f64) -> Self {
        self.map(|v| s * v)
    }

    pub fn clamped(&self, lo: f64, hi: f64) -> Self {
        self.map(|v| v.clamp(lo, hi))
    }

    /// `self + s * eta`.
    pub fn perturbed(&self, eta: &ControlProcess, s: f64) -> Result<Self> {
        if self.grid.n_main() != eta.grid.n_main() {
            return Err(Error::Shape("control and perturbation grids differ".into()));
        }
        let n_main = self.grid.n_main();
        match (&self.values, &eta.values) {
            (ControlValues::Shared(a), ControlValues::Shared(b)) => Ok(Self {
                grid: self.grid,
                values: ControlValues::Shared(a.iter().zip(b).map(|(x, y)| x + s * y).collect()),
            }),
            _ => {
                let n = self
                    .n_particles()
                    .or(eta.n_particles())
                    .expect("one side is per-particle");
                if let (Some(a), Some(b)) = (self.n_particles(), eta.n_particles()) {
                    if a != b {
                        return Err(Error::Shape("per-particle controls differ in size".into()));
                    }
                }
                let mut data = Vec::with_capacity(n * n_main);
                for k in 0..n_main {
                    for i in 0..n {
                        data.push(self.at(i, k) + s * eta.at(i, k));
                    }
                }
                Ok(Self {
                    grid: self.grid,
                    values: ControlValues::PerParticle { n, data },
                })
            }
        }
    }

    /// Fails when any value leaves `[lo, hi]`.
    pub fn check_admissible(&self, lo: f64, hi: f64) -> Result<()> {
        let (mn, mx) = (self.min(), self.max());
        if mn < lo || mx > hi {
            return Err(Error::Precondition(format!(
                "control range [{mn}, {mx}] leaves the admissible interval [{lo}, {hi}]"
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::paths::make_grid;

    fn quad() -> FnCoef {
        FnCoef::new(|a| a.x[0] * a.x[0] + 3.0 * a.u * a.y).with_partials(|a, v| match v {
            Var::X(0) => Some(2.0 * a.x[0]),
            Var::U => Some(3.0 * a.y),
            Var::Y => Some(3.0 * a.u),
            _ => Some(0.0),
        })
    }

    #[test]
    fn finite_difference_matches_analytic() {
        let f = quad();
        let x = [1.5];
        let a = Args {
            t: 0.0,
            x: &x,
            m: &[],
            y: -0.7,
            n: 0.0,
            z: 0.0,
            k: &[],
            u: 2.0,
            e: 0.0,
        };
        for v in [Var::X(0), Var::U, Var::Y] {
            let fd = finite_difference(&f, &a, v, DEFAULT_FD_STEP).unwrap();
            assert!((fd - f.partial(&a, v).unwrap()).abs() < 1e-7);
        }
    }

    #[test]
    fn linear_in_z_is_exact() {
        let f = FnCoef::new(|a| 0.37 * a.z + a.y);
        let a = Args {
            t: 0.0,
            x: &[],
            m: &[],
            y: 1.0,
            n: 0.0,
            z: 4.0,
            k: &[],
            u: 0.0,
            e: 0.0,
        };
        let d = partial(&f, &a, Var::Z, DEFAULT_FD_STEP).unwrap();
        assert!((d - 0.37).abs() < 1e-9);
    }

    #[test]
    fn step_underflow_is_reported() {
        let f = FnCoef::new(|a| a.u);
        let a = Args::forward(0.0, &[], &[], 1.0);
        assert!(matches!(
            finite_difference(&f, &a, Var::U, 1e-20),
            Err(Error::StepUnderflow(_))
        ));
    }

    #[test]
    fn probe_catches_wrong_derivative() {
        let g = make_grid(1.0, 0.1, 0.0).unwrap();
        let good = CoefficientModel::new(&g).with_drift(quad());
        good.validate().unwrap();
        let bad = FnCoef::new(|a| a.x[0] * a.x[0]).with_partials(|a, v| match v {
            Var::X(0) => Some(3.0 * a.x[0]),
            _ => Some(0.0),
        });
        let err = CoefficientModel::new(&g).with_drift(bad).validate().unwrap_err();
        assert!(matches!(err, Error::DerivativeMismatch { .. }), "{err}");
    }

    #[test]
    fn control_perturbation_and_bounds() {
        let g = make_grid(1.0, 0.25, 0.0).unwrap();
        let pi = ControlProcess::constant(&g, 1.0);
        let eta = ControlProcess::from_fn(&g, |t| if t < 0.5 { 1.0 } else { 0.0 });
        let up = pi.perturbed(&eta, 0.5).unwrap();
        assert_eq!(up.mean_path(), vec![1.5, 1.5, 1.0, 1.0, 1.0]);
        assert!(up.check_admissible(0.0, 1.2).is_err());
        assert!(up.clamped(0.0, 1.2).check_admissible(0.0, 1.2).is_ok());
    }
}
