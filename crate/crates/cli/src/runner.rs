//! Runs the configured pipeline and writes CSV tables, `report.txt` and
//! `manifest.json`.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::PathBuf;
use std::time::Instant;

use log::{info, warn};
use mfdelay_core::delay::{DelayMeasure, DelaySpec, MeasureKind};
use mfdelay_core::model::{Bivariate, CoefficientModel, ControlProcess, HorizonMode, MeanField};
use mfdelay_core::models::{brownian_bsde, jump_martingale, linear_toy, quadratic_drift};
use mfdelay_core::paths::{sample_noise, JumpSpec, TimeGrid};
use mfdelay_core::pipeline::solve;
use mfdelay_core::recursive_utility::{run_example, ExampleOptions};
use mfdelay_core::verification::{
    fubini_identity_check, gradient_identity_check, necessary_residual, perturbation_scaling,
    sufficient_conditions_probe, CheckOutcome, InformationFlow, Perturbation, ProbeOptions, ResidualPath,
};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{Check, ExperimentConfig, ExpressionModel, InformationMode, ModelSpec};
use crate::expr::{univariate, ExprCoef, Sym};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;
pub const EXIT_CHECK_FAILED: i32 = 4;

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error("{stage}: {source}")]
    Numerical {
        stage: &'static str,
        #[source]
        source: mfdelay_core::Error,
    },
    #[error("cannot write {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("cannot build thread pool: {0}")]
    Threads(String),
}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Numerical { .. } => EXIT_NUMERICAL,
            RunError::Io { .. } | RunError::Threads(_) => EXIT_INVALID,
        }
    }

    fn stage(&self) -> &'static str {
        match self {
            RunError::Numerical { stage, .. } => stage,
            RunError::Io { .. } => "output",
            RunError::Threads(_) => "setup",
        }
    }
}

fn at(stage: &'static str) -> impl FnOnce(mfdelay_core::Error) -> RunError {
    move |source| RunError::Numerical { stage, source }
}

#[derive(Debug, Clone, Serialize)]
struct ManifestCheck {
    name: String,
    passed: bool,
    detail: String,
}

#[derive(Debug, Clone, Serialize)]
struct Manifest {
    config_hash: String,
    code_version: &'static str,
    seed: u64,
    wall_clock_seconds: f64,
    status: &'static str,
    failure_point: Option<String>,
    files: Vec<String>,
    checks: Vec<ManifestCheck>,
}

/// Result of a run: exit code, verdicts and the files written.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub exit_code: i32,
    pub checks: Vec<CheckOutcome>,
    pub files: Vec<String>,
    pub error: Option<String>,
}

pub fn config_hash(cfg: &ExperimentConfig) -> String {
    Sha256::digest(cfg.canonical().as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

struct Output {
    dir: PathBuf,
    files: Vec<String>,
}

impl Output {
    fn write(&mut self, name: &str, body: &str) -> Result<(), RunError> {
        let path = self.dir.join(name);
        fs::write(&path, body).map_err(|source| RunError::Io { path, source })?;
        if !self.files.iter().any(|f| f == name) {
            self.files.push(name.to_string());
        }
        Ok(())
    }

    fn csv(&mut self, name: &str, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<(), RunError> {
        let mut body = header.join(",");
        body.push('\n');
        for row in rows {
            body.push_str(&row.join(","));
            body.push('\n');
        }
        self.write(name, &body)
    }
}

/// Shortest round-trip formatting, scientific outside `[1e-4, 1e15)`.
fn num(v: f64) -> String {
    let a = v.abs();
    if a == 0.0 || (1e-4..1e15).contains(&a) || !a.is_finite() {
        format!("{v}")
    } else {
        format!("{v:e}")
    }
}

fn jump_spec(cfg: &ExperimentConfig) -> JumpSpec {
    cfg.jumps.clone().unwrap_or_else(JumpSpec::none)
}

fn expression_model(e: &ExpressionModel, cfg: &ExperimentConfig, grid: &TimeGrid) -> mfdelay_core::Result<CoefficientModel> {
    // Validated at load time.
    let parse = |s: &str| ExprCoef::parse(s).expect("validated expression");
    let mut m = CoefficientModel::new(grid)
        .with_drift(parse(&e.drift))
        .with_diffusion(parse(&e.diffusion))
        .with_jump(parse(&e.jump), jump_spec(cfg))
        .with_driver(parse(&e.driver))
        .with_running(parse(&e.running))
        .with_terminal_coupling(e.terminal_coupling)
        .with_control_bounds(e.control_min, e.control_max);
    let x0 = e.x0;
    m = m.with_prehistory(move |_| x0);
    if !cfg.delays.is_empty() {
        m = m.with_delay(DelaySpec::new(cfg.delays.clone(), grid)?);
    }
    if let Some(phi) = &e.phi {
        m = m.with_mean_field(MeanField::Phi(univariate(phi, Sym::X(0)).expect("validated expression")));
    }
    let h1 = univariate(&e.h1, Sym::Y).expect("validated expression");
    let psi = univariate(&e.psi, Sym::X(0)).expect("validated expression");
    let h2 = e.h2.as_ref().map(|src| {
        let c = parse(src);
        let (dx, dn) = (c.expr().diff(Sym::X(0)), c.expr().diff(Sym::N));
        let (c1, c2) = (c.clone(), c.clone());
        Bivariate::new(
            move |x, n| c.expr().eval(&h2_args(&[x], n)),
            move |x, n| diff_or_fd(&c1, dx.as_ref(), x, n, 0),
            move |x, n| diff_or_fd(&c2, dn.as_ref(), x, n, 1),
        )
    });
    Ok(m.with_objective(h1, h2, psi))
}

fn h2_args(x: &[f64], n: f64) -> mfdelay_core::model::Args<'_> {
    mfdelay_core::model::Args {
        t: 0.0,
        x,
        m: &[],
        y: 0.0,
        n,
        z: 0.0,
        k: &[],
        u: 0.0,
        e: 0.0,
    }
}

fn diff_or_fd(c: &ExprCoef, d: Option<&crate::expr::Expr>, x: f64, n: f64, which: usize) -> f64 {
    if let Some(d) = d {
        return d.eval(&h2_args(&[x], n));
    }
    let v = if which == 0 { x } else { n };
    let h = mfdelay_core::model::DEFAULT_FD_STEP * v.abs().max(1.0);
    let f = |s: f64| {
        let (xx, nn) = if which == 0 { (x + s, n) } else { (x, n + s) };
        c.expr().eval(&h2_args(&[xx], nn))
    };
    (f(h) - f(-h)) / (2.0 * h)
}

/// The coefficient model and grid described by `cfg`.
pub fn build_model(cfg: &ExperimentConfig) -> mfdelay_core::Result<(CoefficientModel, TimeGrid)> {
    let g = &cfg.grid;
    let grid = TimeGrid::new(g.horizon, g.dt, g.delta)?;
    let mut model = match &cfg.model {
        ModelSpec::RecursiveUtility(m) => m.coefficient_model()?.0,
        ModelSpec::LinearToy(p) => linear_toy(&grid, *p),
        ModelSpec::JumpMartingale { x0 } => {
            let jumps = match &cfg.jumps {
                Some(j) => j.clone(),
                None => JumpSpec::new(vec![-1.0, 0.5], vec![0.5, 1.0])?,
            };
            jump_martingale(&grid, *x0, jumps)
        }
        ModelSpec::BrownianBsde { x0 } => brownian_bsde(&grid, *x0),
        ModelSpec::QuadraticDrift { x0, sigma } => quadratic_drift(&grid, *x0, *sigma),
        ModelSpec::Expression(e) => expression_model(e, cfg, &grid)?,
    };
    if g.infinite {
        model = model.with_horizon(HorizonMode::InfiniteTruncated {
            t_max: g.horizon,
            kappa: g.kappa,
        });
    }
    Ok((model, grid))
}

fn information(cfg: &ExperimentConfig, grid: &TimeGrid) -> mfdelay_core::Result<InformationFlow> {
    match cfg.information {
        InformationMode::Full => Ok(InformationFlow::FullInfo),
        InformationMode::Delayed(d) => InformationFlow::delayed(d, grid),
    }
}

fn residual_rows(r: &ResidualPath) -> Vec<Vec<String>> {
    r.t.iter()
        .zip(&r.residual)
        .zip(&r.se)
        .map(|((t, v), s)| vec![num(*t), num(*v), num(*s)])
        .collect()
}

fn base_control(cfg: &ExperimentConfig, grid: &TimeGrid) -> ControlProcess {
    ControlProcess::constant(grid, cfg.control)
}

fn fubini_measures(cfg: &ExperimentConfig) -> Vec<MeasureKind> {
    let mut out = vec![MeasureKind::DiracAtZero];
    if cfg.grid.delta > 0.0 {
        out.push(MeasureKind::DiracAtMinusDelta);
        out.push(MeasureKind::Exponential { rate: 1.0 });
    }
    for m in &cfg.delays {
        if !out.contains(m) {
            out.push(m.clone());
        }
    }
    out
}

fn run_checks(cfg: &ExperimentConfig, out: &mut Output, checks: &mut Vec<CheckOutcome>) -> Result<(), RunError> {
    let wants = |c: Check| cfg.checks.contains(&c);
    let tol = &cfg.tolerances;
    let (model, grid) = build_model(cfg).map_err(at("model"))?;
    let flow = information(cfg, &grid).map_err(at("information"))?;

    if let ModelSpec::RecursiveUtility(cm) = &cfg.model {
        let example_checks = [
            Check::Lambda,
            Check::P,
            Check::ForwardBound,
            Check::Residual,
            Check::Transversality,
            Check::Sufficient,
        ];
        if example_checks.iter().any(|c| wants(*c)) {
            info!("running the consumption example");
            let opts = ExampleOptions {
                n_particles: cfg.n_particles,
                seed: cfg.seed,
                basis: cfg.basis,
                information: flow,
                residual_slack: tol.residual_slack,
                transversality: wants(Check::Transversality),
                t_list: cfg.t_list.clone(),
                transversality_particles: cfg.transversality_particles,
                sufficient: wants(Check::Sufficient),
            };
            let rep = run_example(cm, &opts).map_err(at("consumption example"))?;
            out.csv(
                "forward_mean.csv",
                &["t", "mean", "stderr"],
                rep.t.iter().zip(&rep.forward_mean).zip(&rep.forward_se).map(|((t, m), s)| vec![num(*t), num(*m), num(*s)]),
            )?;
            out.csv(
                "lambda.csv",
                &["t", "lambda", "closed_form", "abs_err"],
                rep.t
                    .iter()
                    .zip(&rep.lambda)
                    .zip(&rep.lambda_closed)
                    .map(|((t, l), c)| vec![num(*t), num(*l), num(*c), num((l - c).abs())]),
            )?;
            out.csv(
                "p.csv",
                &["t", "p", "closed_form", "abs_err"],
                rep.t
                    .iter()
                    .zip(&rep.p)
                    .zip(&rep.p_closed)
                    .map(|((t, p), c)| vec![num(*t), num(*p), num(*c), num((p - c).abs())]),
            )?;
            out.csv("residual.csv", &["t", "residual", "stderr"], residual_rows(&rep.residual))?;
            if let Some(tab) = &rep.transversality {
                out.csv(
                    "transversality.csv",
                    &["T", "pX", "stderr", "fitted_slope"],
                    tab.rows
                        .iter()
                        .map(|r| vec![num(r.t_end), num(r.px), num(r.px_se), num(tab.fitted_slope)]),
                )?;
            }
            for w in &rep.warnings {
                warn!("{w}");
            }
            for c in example_checks.iter().filter(|c| wants(**c)) {
                match rep.check(c.name()) {
                    Some(o) => checks.push(o.clone()),
                    None => checks.push(CheckOutcome {
                        name: c.name().to_string(),
                        passed: true,
                        detail: "reported without a verdict under delayed information".into(),
                    }),
                }
            }
        }
    } else if wants(Check::Residual) || wants(Check::Sufficient) {
        info!("solving the configured model at the base control");
        let noise = sample_noise(&grid, &model.jumps, cfg.n_particles, cfg.seed).map_err(at("noise"))?;
        let sol = solve(&model, &grid, &base_control(cfg, &grid), &noise, &cfg.basis).map_err(at("solve"))?;
        out.csv(
            "forward_mean.csv",
            &["t", "mean", "stderr"],
            (0..grid.n_main()).map(|k| vec![num(grid.main_time(k)), num(sol.ens.x_main(k).iter().sum::<f64>() / cfg.n_particles as f64), num(mfdelay_core::paths::stderr(sol.ens.x_main(k)))]),
        )?;
        if wants(Check::Residual) {
            let r = necessary_residual(&sol, flow, &cfg.basis).map_err(at("residual"))?;
            out.csv("residual.csv", &["t", "residual", "stderr"], residual_rows(&r))?;
            let (sup, bound) = (r.sup(), 5.0 * r.sup_se() + tol.residual_slack);
            checks.push(CheckOutcome {
                name: "residual".into(),
                passed: sup <= bound,
                detail: format!("sup |E[dH/du]| = {sup:.3e} (tolerance {bound:.3e})"),
            });
        }
        if wants(Check::Sufficient) {
            let probe = ProbeOptions {
                seed: cfg.seed,
                ..ProbeOptions::default()
            };
            let rep = sufficient_conditions_probe(&model, &grid, &sol, &noise, &cfg.basis, &[], &probe)
                .map_err(at("sufficient"))?;
            checks.push(CheckOutcome {
                name: "sufficient".into(),
                passed: rep.concave() && rep.max_attained(),
                detail: format!(
                    "concavity violations {}/{}; conditional maximum attained: {}",
                    rep.concavity_violations,
                    rep.concavity_probes,
                    rep.max_attained()
                ),
            });
        }
    }

    if wants(Check::Gradient) {
        info!("gradient identity over {} bumps", cfg.gradient.bumps);
        let g = &cfg.gradient;
        let base = match (&cfg.model, g.control) {
            (_, Some(v)) => v,
            (ModelSpec::RecursiveUtility(_), None) => 0.5,
            _ => cfg.control,
        };
        let pi = ControlProcess::constant(&grid, base);
        let seeds = if g.seeds.is_empty() { vec![cfg.seed] } else { g.seeds.clone() };
        let mut rows = Vec::new();
        let mut all = true;
        let mut worst = 0.0f64;
        for (id, eta) in Perturbation::random_bumps(&grid, g.bumps, g.alpha, cfg.seed).iter().enumerate() {
            let c = gradient_identity_check(&model, &grid, &pi, eta, g.s_fd, &seeds, cfg.n_particles, &cfg.basis)
                .map_err(at("gradient"))?;
            all &= c.passes(tol.gradient_slack);
            worst = worst.max(c.gap() - c.ci);
            rows.push(vec![id.to_string(), num(c.lhs), num(c.rhs), num(c.ci)]);
        }
        out.csv("gradcheck.csv", &["eta_id", "lhs", "rhs", "ci"], rows)?;
        checks.push(CheckOutcome {
            name: "gradient".into(),
            passed: all,
            detail: format!("largest gap beyond the interval {worst:.3e} (slack {})", tol.gradient_slack),
        });
    }

    if wants(Check::Scaling) {
        let noise = sample_noise(&grid, &model.jumps, cfg.n_particles, cfg.seed).map_err(at("noise"))?;
        let eta = ControlProcess::constant(&grid, 1.0);
        let res = perturbation_scaling(&model, &grid, &base_control(cfg, &grid), &eta, &cfg.scaling_alphas, &noise)
            .map_err(at("scaling"))?;
        out.csv(
            "scaling.csv",
            &["alpha", "mean_sup_sq"],
            res.alphas.iter().zip(&res.values).map(|(a, v)| vec![num(*a), num(*v)]),
        )?;
        checks.push(CheckOutcome {
            name: "scaling".into(),
            passed: res.slope >= tol.scaling_min && res.slope <= tol.scaling_max,
            detail: format!("log-log slope {:.4} (accepted [{}, {}])", res.slope, tol.scaling_min, tol.scaling_max),
        });
    }

    if wants(Check::Fubini) {
        let phi: Vec<f64> = (0..grid.n_main()).map(|k| (3.0 * grid.main_time(k)).cos()).collect();
        let x: Vec<f64> = (0..grid.n_main()).map(|k| 0.5 + (2.0 * grid.main_time(k)).sin()).collect();
        let mut rows = Vec::new();
        let mut worst = 0.0f64;
        for kind in fubini_measures(cfg) {
            let mu = DelayMeasure::new(kind.clone(), &grid).map_err(at("fubini"))?;
            let gap = fubini_identity_check(&phi, &x, &mu, &grid).map_err(at("fubini"))?.gap;
            worst = worst.max(gap);
            rows.push(vec![kind.label().to_string(), num(gap)]);
        }
        out.csv("fubini_gap.csv", &["measure", "gap"], rows)?;
        checks.push(CheckOutcome {
            name: "fubini".into(),
            passed: worst <= tol.fubini,
            detail: format!("largest gap {worst:.3e} (tolerance {:.0e})", tol.fubini),
        });
    }
    Ok(())
}

fn report_text(cfg: &ExperimentConfig, checks: &[CheckOutcome], error: Option<&RunError>, hash: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "mfdelay report");
    let _ = writeln!(s, "model: {}", cfg.model.name());
    let _ = writeln!(
        s,
        "grid: T = {}, dt = {}, delta = {}{}",
        cfg.grid.horizon,
        cfg.grid.dt,
        cfg.grid.delta,
        if cfg.grid.infinite { " (truncated infinite horizon)" } else { "" }
    );
    let _ = writeln!(s, "particles: {}, seed: {}", cfg.n_particles, cfg.seed);
    let _ = writeln!(s, "config hash: {hash}");
    for w in &cfg.warnings {
        let _ = writeln!(s, "warning: {w}");
    }
    let _ = writeln!(s);
    for c in checks {
        let _ = writeln!(s, "{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    if let Some(e) = error {
        let _ = writeln!(s, "ERROR at {}: {e}", e.stage());
    }
    s
}

/// Runs `cfg` on `threads` workers (all cores when `None`).
pub fn run(cfg: &ExperimentConfig, threads: Option<usize>) -> RunOutcome {
    let start = Instant::now();
    let hash = config_hash(cfg);
    let mut out = Output {
        dir: cfg.output_dir.clone(),
        files: Vec::new(),
    };
    let mut checks = Vec::new();

    let result = fs::create_dir_all(&out.dir)
        .map_err(|source| RunError::Io {
            path: out.dir.clone(),
            source,
        })
        .and_then(|_| {
            let mut builder = rayon::ThreadPoolBuilder::new();
            if let Some(n) = threads {
                builder = builder.num_threads(n);
            }
            builder.build().map_err(|e| RunError::Threads(e.to_string()))
        })
        .and_then(|pool| pool.install(|| run_checks(cfg, &mut out, &mut checks)));

    let error = result.err();
    let exit_code = match &error {
        Some(e) => e.exit_code(),
        None if checks.iter().all(|c| c.passed) => EXIT_OK,
        None => EXIT_CHECK_FAILED,
    };
    let report = report_text(cfg, &checks, error.as_ref(), &hash);
    let mut files_ok = out.write("report.txt", &report).is_ok();
    let manifest = Manifest {
        config_hash: hash,
        code_version: env!("CARGO_PKG_VERSION"),
        seed: cfg.seed,
        wall_clock_seconds: start.elapsed().as_secs_f64(),
        status: match exit_code {
            EXIT_OK => "ok",
            EXIT_CHECK_FAILED => "check_failure",
            EXIT_NUMERICAL => "numerical_failure",
            _ => "error",
        },
        failure_point: error.as_ref().map(|e| e.stage().to_string()),
        files: out.files.clone(),
        checks: checks
            .iter()
            .map(|c| ManifestCheck {
                name: c.name.clone(),
                passed: c.passed,
                detail: c.detail.clone(),
            })
            .collect(),
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    files_ok &= out.write("manifest.json", &json).is_ok();
    if !files_ok && error.is_none() {
        warn!("could not write the report to {}", out.dir.display());
    }
    RunOutcome {
        exit_code,
        files: out.files,
        error: error.map(|e| e.to_string()),
        checks,
    }
}
