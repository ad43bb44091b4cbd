//! Optimal consumption with recursive utility.
//!
//! Cash follows `dX = (c E[lift X] - pi) dt + sigma dB + gamma int e N~(dt, de)`
//! and utility solves `dY = -(-alpha Y + beta E[Y] - ln pi) dt + ...` with
//! `J(pi) = Y(0)`. The horizon is truncated at `T` with `Y(T) = -X(T) / pi_T`,
//! which pins the candidate consumption to `pi_T` at the horizon.
//!
//! In the undelayed case `lambda(t) = exp(-(alpha - beta) t)`,
//! `p(t) = p(T) exp(c (T - t))` and the candidate
//! `pi_hat = -lambda / p = pi_T exp((alpha - beta - c)(T - t))`.

use crate::delay::{DelayMeasure, DelaySpec, MeasureKind};
use crate::error::{Error, Result};
use crate::forward::simulate_forward;
use crate::model::{CoefficientModel, ControlProcess, FnCoef, MeanField, Univariate, Var};
use crate::paths::{make_grid, sample_noise, JumpSpec, TimeGrid};
use crate::pipeline::solve;
use crate::regression::RegressionBasis;
use crate::verification::{
    necessary_residual, sufficient_conditions_probe, transversality_check, CheckOutcome, ConcavityScope,
    InformationFlow, ProbeOptions, ResidualPath, SufficientReport, TransversalityScenario, TransversalityTable,
};

pub const DECAY_WARNING: &str = "decay condition violated: c<α−β required";
pub const LAMBDA_WARNING: &str = "lambda does not decay: α>β required";

#[derive(Debug, Clone, PartialEq)]
pub struct ConsumptionModel {
    /// Initial cash, also used on the prehistory.
    pub x: f64,
    pub c: f64,
    pub alpha: f64,
    pub beta: f64,
    pub sigma: f64,
    /// Jump size per unit mark.
    pub gamma: f64,
    pub jumps: JumpSpec,
    /// Delay measure of the mean-field term.
    pub delay: MeasureKind,
    pub delta: f64,
    pub horizon: f64,
    pub dt: f64,
    /// Consumption rate at the truncation horizon.
    pub terminal_consumption: f64,
    pub control_bounds: (f64, f64),
}

impl Default for ConsumptionModel {
    fn default() -> Self {
        Self {
            x: 1.0,
            c: 0.05,
            alpha: 0.4,
            beta: 0.1,
            sigma: 0.0,
            gamma: 0.0,
            jumps: JumpSpec::none(),
            delay: MeasureKind::DiracAtZero,
            delta: 0.0,
            horizon: 10.0,
            dt: 0.01,
            terminal_consumption: 1.0,
            control_bounds: (1e-3, 1e3),
        }
    }
}

pub fn closed_form_lambda(alpha: f64, beta: f64, t: f64) -> f64 {
    (-(alpha - beta) * t).exp()
}

impl ConsumptionModel {
    pub fn with_horizon(&self, t: f64) -> Self {
        Self {
            horizon: t,
            ..self.clone()
        }
    }

    pub fn grid(&self) -> Result<TimeGrid> {
        make_grid(self.horizon, self.dt, self.delta)
    }

    /// Hard preconditions; soft ones are reported by [`Self::warnings`].
    pub fn validate(&self) -> Result<()> {
        let finite = [self.x, self.c, self.alpha, self.beta, self.sigma, self.gamma]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::Model("consumption parameters must be finite".into()));
        }
        if !(self.terminal_consumption > 0.0) {
            return Err(Error::Model(format!(
                "terminal consumption must be positive, got {}",
                self.terminal_consumption
            )));
        }
        let (lo, hi) = self.control_bounds;
        if !(lo > 0.0 && hi > lo) {
            return Err(Error::Model(format!(
                "consumption must be bounded away from zero, got bounds [{lo}, {hi}]"
            )));
        }
        Ok(())
    }

    pub fn warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.alpha <= self.beta {
            out.push(LAMBDA_WARNING.to_string());
        }
        if self.c >= self.alpha - self.beta {
            out.push(DECAY_WARNING.to_string());
        }
        out
    }

    pub fn terminal_coupling(&self) -> f64 {
        -1.0 / self.terminal_consumption
    }

    pub fn closed_form_p(&self, t: f64) -> f64 {
        self.terminal_coupling() * closed_form_lambda(self.alpha, self.beta, self.horizon) * (self.c * (self.horizon - t)).exp()
    }

    pub fn closed_form_pi(&self, t: f64) -> f64 {
        self.terminal_consumption * ((self.alpha - self.beta - self.c) * (self.horizon - t)).exp()
    }

    pub fn coefficient_model(&self) -> Result<(CoefficientModel, TimeGrid)> {
        self.validate()?;
        let grid = self.grid()?;
        let (c, alpha, beta, sigma, gamma) = (self.c, self.alpha, self.beta, self.sigma, self.gamma);
        let drift = FnCoef::new(move |a| c * a.m[0] - a.u).with_partials(move |_, v| {
            Some(match v {
                Var::M(0) => c,
                Var::U => -1.0,
                _ => 0.0,
            })
        });
        let diffusion = FnCoef::new(move |_| sigma).with_partials(|_, _| Some(0.0));
        let jump = FnCoef::new(move |a| gamma * a.e).with_partials(|_, _| Some(0.0));
        let driver = FnCoef::new(move |a| -alpha * a.y + beta * a.n - a.u.ln()).with_partials(move |a, v| {
            Some(match v {
                Var::Y => -alpha,
                Var::N => beta,
                Var::U => -1.0 / a.u,
                _ => 0.0,
            })
        });
        let x0 = self.x;
        let model = CoefficientModel::new(&grid)
            .with_drift(drift)
            .with_diffusion(diffusion)
            .with_jump(jump, self.jumps.clone())
            .with_driver(driver)
            .with_mean_field(MeanField::Lifted)
            .with_delay(DelaySpec::new(vec![self.delay.clone()], &grid)?)
            .with_objective(Univariate::identity(), None, Univariate::identity())
            .with_terminal_coupling(self.terminal_coupling())
            .with_control_bounds(self.control_bounds.0, self.control_bounds.1)
            .with_prehistory(move |_| x0);
        Ok((model, grid))
    }

    /// `lambda_k` of the forward Euler recursion, which is deterministic here.
    pub fn discrete_lambda(&self, grid: &TimeGrid) -> Vec<f64> {
        let f = 1.0 - (self.alpha - self.beta) * grid.dt();
        let mut out = Vec::with_capacity(grid.n_main());
        let mut l = 1.0;
        for _ in 0..grid.n_main() {
            out.push(l);
            l *= f;
        }
        out
    }

    /// Candidate `pi_hat_k = -lambda_k / p_{k+1}` from the deterministic
    /// recursions, `pi_T` at the last node.
    pub fn discrete_candidate(&self, grid: &TimeGrid) -> Result<Vec<f64>> {
        let lambda = self.discrete_lambda(grid);
        let p_t = self.terminal_coupling() * lambda[grid.n_steps()];
        let p = solve_p_deterministic(self, grid, p_t)?;
        let mut p_bar: Vec<f64> = p[1..].to_vec();
        p_bar.push(p[grid.n_steps()]);
        optimal_consumption(&lambda, &p_bar, self.control_bounds)
    }
}

/// Backward recursion `p_k = p_{k+1} + c dt sum_a mass_a p_{k+lag_a+1}` with
/// terms beyond the horizon dropped. Without delay this is
/// `p_k = p_T (1 + c dt)^(N-k)`, the Euler scheme for `p' = -c p`.
pub fn solve_p_deterministic(model: &ConsumptionModel, grid: &TimeGrid, p_t: f64) -> Result<Vec<f64>> {
    let mu = DelayMeasure::new(model.delay.clone(), grid)?;
    let n = grid.n_steps();
    let dt = grid.dt();
    let mut p = vec![0.0; n + 1];
    p[n] = p_t;
    for k in (0..n).rev() {
        let adv: f64 = mu
            .atoms()
            .iter()
            .filter(|a| k + a.lag < n)
            .map(|a| a.mass * p[k + a.lag + 1])
            .sum();
        p[k] = p[k + 1] + model.c * adv * dt;
    }
    Ok(p)
}

/// `pi_hat = -lambda / p`, clamped to `bounds`.
pub fn optimal_consumption(lambda: &[f64], p: &[f64], bounds: (f64, f64)) -> Result<Vec<f64>> {
    if lambda.len() != p.len() {
        return Err(Error::Shape(format!(
            "lambda has {} values, p has {}",
            lambda.len(),
            p.len()
        )));
    }
    lambda
        .iter()
        .zip(p)
        .enumerate()
        .map(|(k, (&l, &p))| {
            if p == 0.0 || !p.is_finite() {
                return Err(Error::Precondition(format!("p = {p} at node {k}: consumption is unbounded")));
            }
            let pi = -l / p;
            if !(pi > 0.0) {
                return Err(Error::Precondition(format!(
                    "-lambda/p = {pi} at node {k}: consumption must be positive"
                )));
            }
            Ok(pi.clamp(bounds.0, bounds.1))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExampleOptions {
    pub n_particles: usize,
    pub seed: u64,
    pub basis: RegressionBasis,
    pub information: InformationFlow,
    /// Additive slack of the residual check.
    pub residual_slack: f64,
    pub transversality: bool,
    pub t_list: Vec<f64>,
    pub transversality_particles: usize,
    /// Concavity, conditional-maximum and objective comparisons.
    pub sufficient: bool,
}

impl Default for ExampleOptions {
    fn default() -> Self {
        Self {
            n_particles: 10_000,
            seed: 0,
            basis: RegressionBasis::default(),
            information: InformationFlow::FullInfo,
            residual_slack: 0.05,
            transversality: true,
            t_list: vec![2.0, 4.0, 6.0, 8.0, 10.0],
            transversality_particles: 1000,
            sufficient: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExampleReport {
    pub t: Vec<f64>,
    pub lambda: Vec<f64>,
    pub lambda_closed: Vec<f64>,
    pub p: Vec<f64>,
    pub p_closed: Vec<f64>,
    pub pi_hat: Vec<f64>,
    /// Particle mean of `X` under zero consumption.
    pub forward_mean: Vec<f64>,
    pub forward_se: Vec<f64>,
    pub forward_bound: Vec<f64>,
    pub residual: ResidualPath,
    pub transversality: Option<TransversalityTable>,
    pub expected_slope: f64,
    pub sufficient: Option<SufficientReport>,
    pub warnings: Vec<String>,
    pub checks: Vec<CheckOutcome>,
}

impl ExampleReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn check(&self, name: &str) -> Option<&CheckOutcome> {
        self.checks.iter().find(|c| c.name == name)
    }
}

fn outcome(name: &str, passed: bool, detail: String) -> CheckOutcome {
    CheckOutcome {
        name: name.to_string(),
        passed,
        detail,
    }
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

pub fn run_example(model: &ConsumptionModel, opts: &ExampleOptions) -> Result<ExampleReport> {
    let (cm, grid) = model.coefficient_model()?;
    let n_steps = grid.n_steps();
    let dt = grid.dt();
    let undelayed = model.delay == MeasureKind::DiracAtZero;
    let noise = sample_noise(&grid, &cm.jumps, opts.n_particles, opts.seed)?;
    let mut checks = Vec::new();

    // lambda and p do not depend on the control.
    let probe = solve(&cm, &grid, &ControlProcess::constant(&grid, model.terminal_consumption), &noise, &opts.basis)?;
    let lambda = probe.adjoint.lambda_mean();
    let p = probe.adjoint.p_mean();
    let mut p_bar: Vec<f64> = (0..n_steps).map(|k| probe.adjoint.p_cont.mean(k)).collect();
    p_bar.push(p[n_steps]);
    let pi_hat = optimal_consumption(&lambda, &p_bar, model.control_bounds)?;

    let t: Vec<f64> = (0..grid.n_main()).map(|k| grid.main_time(k)).collect();
    let lambda_closed: Vec<f64> = t.iter().map(|s| closed_form_lambda(model.alpha, model.beta, *s)).collect();
    let ab = model.alpha - model.beta;
    let lam_err = max_abs_diff(&lambda, &lambda_closed);
    let lam_tol = ab * ab * model.horizon * dt + 1e-12;
    checks.push(outcome(
        "lambda",
        lam_err <= lam_tol,
        format!("max |lambda - exp(-(alpha-beta)t)| = {lam_err:.3e} (tolerance {lam_tol:.3e})"),
    ));

    let p_det = solve_p_deterministic(model, &grid, model.terminal_coupling() * lambda[n_steps])?;
    let p_closed: Vec<f64> = if undelayed {
        t.iter().map(|s| model.closed_form_p(*s)).collect()
    } else {
        p_det.clone()
    };
    let p_scale = p.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let p_err = max_abs_diff(&p, &p_closed);
    let p_tol = (model.c * model.c * model.horizon + ab * ab * model.horizon) * dt * p_scale + 1e-10 * p_scale.max(1.0);
    let rec_err = max_abs_diff(&p, &p_det);
    checks.push(outcome(
        "p",
        p_err <= p_tol && rec_err <= 1e-8 * p_scale.max(1.0),
        format!("max |p - closed form| = {p_err:.3e} (tolerance {p_tol:.3e}); recursion gap {rec_err:.3e}"),
    ));

    let zero = simulate_forward(&cm, &ControlProcess::constant(&grid, 0.0), &noise, &grid)?;
    let forward_mean = zero.mean_path();
    let forward_se = zero.stderr_path();
    let mass = DelayMeasure::new(model.delay.clone(), &grid)?.total_mass();
    let forward_bound: Vec<f64> = t.iter().map(|s| model.x * (model.c.max(0.0) * mass * s).exp()).collect();
    let mut bound_ok = true;
    let mut worst = f64::NEG_INFINITY;
    for k in 0..grid.n_main() {
        let slack = 3.0 * forward_se[k] + 1e-12;
        if undelayed {
            let euler = model.x * (1.0 + model.c * dt).powi(k as i32);
            let tol = slack + (forward_bound[k] - euler).abs();
            let gap = (forward_mean[k] - forward_bound[k]).abs();
            worst = worst.max(gap - tol);
            bound_ok &= gap <= tol;
        } else {
            worst = worst.max(forward_mean[k] - forward_bound[k] - slack);
            bound_ok &= forward_mean[k] <= forward_bound[k] + slack;
        }
    }
    checks.push(outcome(
        "forward_bound",
        bound_ok,
        format!("zero-consumption mean against x exp(c t): worst excess {worst:.3e}"),
    ));

    let hat = solve(&cm, &grid, &ControlProcess::from_main(&grid, pi_hat.clone())?, &noise, &opts.basis)?;
    let residual = necessary_residual(&hat, opts.information, &opts.basis)?;
    if opts.information == InformationFlow::FullInfo {
        let sup = residual.sup();
        let tol = 5.0 * residual.sup_se() + opts.residual_slack;
        checks.push(outcome(
            "residual",
            sup <= tol,
            format!("sup |E[dH/dpi]| = {sup:.3e} (tolerance {tol:.3e})"),
        ));
    }

    let expected_slope = -(ab - model.c);
    let warnings = model.warnings();
    let transversality = if opts.transversality {
        let base = model.clone();
        let scenario = move |t_end: f64| -> Result<TransversalityScenario> {
            let m = base.with_horizon(t_end);
            let (cm, grid) = m.coefficient_model()?;
            let cand = m.discrete_candidate(&grid)?;
            let candidate = ControlProcess::from_main(&grid, cand)?;
            Ok(TransversalityScenario {
                alternative: candidate.scaled(0.5).clamped(m.control_bounds.0, m.control_bounds.1),
                reference: ControlProcess::constant(&grid, 0.0),
                candidate,
                model: cm,
                grid,
            })
        };
        let table = transversality_check(&scenario, &opts.t_list, opts.transversality_particles, opts.seed, &opts.basis)?;
        let within = (table.fitted_slope - expected_slope).abs() <= 0.15 * expected_slope.abs();
        let decays = model.c < ab;
        let mut detail = format!(
            "fitted slope {:.4}, predicted {:.4}",
            table.fitted_slope, expected_slope
        );
        if !decays {
            detail.push_str(&format!("; {DECAY_WARNING}"));
        }
        checks.push(outcome("transversality", decays && within && table.decaying, detail));
        Some(table)
    } else {
        None
    };

    let sufficient = if opts.sufficient {
        let alternatives: Vec<(String, ControlProcess)> = [0.5, 0.8, 1.25, 2.0]
            .iter()
            .map(|s| {
                (
                    format!("{s} x pi_hat"),
                    hat.control.scaled(*s).clamped(model.control_bounds.0, model.control_bounds.1),
                )
            })
            .chain([0.5, 1.0, 2.0].iter().map(|v| (format!("constant {v}"), ControlProcess::constant(&grid, *v))))
            .collect();
        let probe_opts = ProbeOptions {
            scope: ConcavityScope::Full,
            seed: opts.seed,
            ..ProbeOptions::default()
        };
        let rep = sufficient_conditions_probe(&cm, &grid, &hat, &noise, &opts.basis, &alternatives, &probe_opts)?;
        checks.push(outcome(
            "sufficient",
            rep.concave() && rep.max_attained() && rep.candidate_dominates(),
            format!(
                "concavity violations {}/{}; conditional maximum attained: {}; J(pi_hat) = {:.5} dominates alternatives: {}",
                rep.concavity_violations,
                rep.concavity_probes,
                rep.max_attained(),
                rep.j_candidate,
                rep.candidate_dominates()
            ),
        ));
        Some(rep)
    } else {
        None
    };

    Ok(ExampleReport {
        t,
        lambda,
        lambda_closed,
        p,
        p_closed,
        pi_hat,
        forward_mean,
        forward_se,
        forward_bound,
        residual,
        transversality,
        expected_slope,
        sufficient,
        warnings,
        checks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn lambda_closed_form_values() {
        assert_eq!(closed_form_lambda(0.3, 0.3, 7.0), 1.0);
        assert_eq!(closed_form_lambda(0.4, 0.1, 0.0), 1.0);
        assert!((closed_form_lambda(1.0, 0.5, 2.0) - 0.367_879_4).abs() < 1e-7);
    }

    proptest! {
        #[test]
        fn more_impatience_lowers_lambda(a in 0.0f64..2.0, d in 0.01f64..1.0, b in 0.0f64..1.0, t in 0.01f64..10.0) {
            prop_assert!(closed_form_lambda(a + d, b, t) < closed_form_lambda(a, b, t));
        }
    }

    #[test]
    fn p_without_mean_field_is_constant() {
        let m = ConsumptionModel { c: 0.0, horizon: 1.0, ..Default::default() };
        let grid = m.grid().unwrap();
        assert!(solve_p_deterministic(&m, &grid, -1.0).unwrap().iter().all(|v| *v == -1.0));
    }

    #[test]
    fn p_recursion_converges_at_first_order() {
        let err = |dt: f64| {
            let m = ConsumptionModel { c: 0.1, horizon: 1.0, dt, ..Default::default() };
            let grid = m.grid().unwrap();
            let p = solve_p_deterministic(&m, &grid, -1.0).unwrap();
            (p[0] + 0.1f64.exp()).abs()
        };
        let (e1, e2, e3) = (err(0.01), err(0.005), err(0.0025));
        assert!(e1 < 0.01 * 0.01);
        let slope = ((e1 / e2).log2() + (e2 / e3).log2()) / 2.0;
        assert!((slope - 1.0).abs() < 0.05, "{slope}");
    }

    #[test]
    fn consumption_from_lambda_and_p() {
        assert_eq!(optimal_consumption(&[1.0, 1.0], &[-2.0, -2.0], (0.0, 10.0)).unwrap(), vec![0.5, 0.5]);
        let t: Vec<f64> = (0..50).map(|k| k as f64 * 0.1).collect();
        let l: Vec<f64> = t.iter().map(|s| closed_form_lambda(0.4, 0.1, *s)).collect();
        let p: Vec<f64> = l.iter().map(|v| -v / 0.7).collect();
        for pi in optimal_consumption(&l, &p, (0.0, 10.0)).unwrap() {
            assert!((pi - 0.7).abs() < 1e-14);
        }
        for ((pi, l), p) in optimal_consumption(&l, &p, (0.0, 10.0)).unwrap().iter().zip(&l).zip(&p) {
            // dg/dpi = -1/pi equals p/lambda at the candidate.
            assert!((-1.0 / pi - p / l).abs() < 1e-12);
        }
        assert!(optimal_consumption(&[1.0], &[0.0], (0.0, 1.0)).is_err());
        assert!(optimal_consumption(&[1.0], &[2.0], (0.0, 1.0)).is_err());
    }

    #[test]
    fn decay_warning_when_growth_outpaces_discounting() {
        let m = ConsumptionModel { c: 0.5, ..Default::default() };
        assert!(m.warnings().iter().any(|w| w == DECAY_WARNING));
        assert!(ConsumptionModel::default().warnings().is_empty());
    }

    #[test]
    fn discrete_candidate_tracks_closed_form() {
        let m = ConsumptionModel { horizon: 4.0, ..Default::default() };
        let grid = m.grid().unwrap();
        let cand = m.discrete_candidate(&grid).unwrap();
        for (k, pi) in cand.iter().enumerate() {
            let exact = m.closed_form_pi(grid.main_time(k));
            assert!((pi - exact).abs() < 0.01 * exact, "{k}: {pi} vs {exact}");
        }
        assert_eq!(*cand.last().unwrap(), 1.0);
    }

    #[test]
    fn coefficient_partials_are_consistent() {
        let m = ConsumptionModel { sigma: 0.2, horizon: 1.0, ..Default::default() };
        let (cm, _) = m.coefficient_model().unwrap();
        cm.validate().unwrap();
    }

    #[test]
    fn example_passes_its_checks() {
        let m = ConsumptionModel { horizon: 2.0, ..Default::default() };
        let opts = ExampleOptions {
            n_particles: 200,
            t_list: vec![2.0, 4.0, 6.0],
            transversality_particles: 20,
            ..Default::default()
        };
        let rep = run_example(&m, &opts).unwrap();
        assert!(rep.all_passed(), "{:?}", rep.checks);
        assert!(rep.lambda.windows(2).all(|w| w[1] < w[0]));
        assert!(rep.pi_hat.iter().all(|v| *v > 0.0));
        let slope = rep.transversality.unwrap().fitted_slope;
        assert!((slope + 0.25).abs() < 0.15 * 0.25, "{slope}");
    }

    #[test]
    fn equal_rates_keep_lambda_at_one() {
        let m = ConsumptionModel { alpha: 0.2, beta: 0.2, c: 0.0, horizon: 1.0, ..Default::default() };
        let opts = ExampleOptions { n_particles: 50, transversality: false, ..Default::default() };
        let rep = run_example(&m, &opts).unwrap();
        assert!(rep.lambda.iter().all(|v| (*v - 1.0).abs() < 1e-12));
        for (pi, p) in rep.pi_hat.iter().zip(&rep.p) {
            assert!((pi + 1.0 / p).abs() < 1e-9);
        }
    }

    #[test]
    fn candidate_is_a_minimiser_of_the_objective() {
        // H and J are convex in the consumption rate for this driver, so the
        // stationary candidate is beaten by every alternative.
        let m = ConsumptionModel { horizon: 1.0, ..Default::default() };
        let opts = ExampleOptions {
            n_particles: 50,
            transversality: false,
            sufficient: true,
            ..Default::default()
        };
        let rep = run_example(&m, &opts).unwrap();
        let s = rep.sufficient.as_ref().unwrap();
        assert!(s.alternatives.iter().all(|a| a.diff < 0.0));
        assert!(!rep.check("sufficient").unwrap().passed);
    }
}
