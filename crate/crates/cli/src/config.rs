//! Experiment configuration: TOML parsing, defaults and validation.
//!
//! Every problem is collected with the dotted path of the offending key, so a
//! single run reports all of them.

use std::cell::RefCell;
use std::fmt;
use std::path::{Path, PathBuf};

use mfdelay_core::delay::MeasureKind;
use mfdelay_core::models::{Builtin, LinearToy};
use mfdelay_core::paths::{JumpSpec, TimeGrid};
use mfdelay_core::recursive_utility::{ConsumptionModel, DECAY_WARNING, LAMBDA_WARNING};
use mfdelay_core::regression::RegressionBasis;
use toml::{Table, Value};

use crate::expr::{univariate, ExprCoef, Sym};

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub path: String,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.path.is_empty() {
            write!(f, "{}", self.message)
        } else {
            write!(f, "{}: {}", self.path, self.message)
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub struct ConfigErrors(pub Vec<ConfigError>);

impl fmt::Display for ConfigErrors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let lines: Vec<String> = self.0.iter().map(|e| e.to_string()).collect();
        write!(f, "{}", lines.join("\n"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Check {
    Lambda,
    P,
    ForwardBound,
    Residual,
    Transversality,
    Sufficient,
    Gradient,
    Scaling,
    Fubini,
}

impl Check {
    pub const ALL: [Check; 9] = [
        Check::Lambda,
        Check::P,
        Check::ForwardBound,
        Check::Residual,
        Check::Transversality,
        Check::Sufficient,
        Check::Gradient,
        Check::Scaling,
        Check::Fubini,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Check::Lambda => "lambda",
            Check::P => "p",
            Check::ForwardBound => "forward_bound",
            Check::Residual => "residual",
            Check::Transversality => "transversality",
            Check::Sufficient => "sufficient",
            Check::Gradient => "gradient",
            Check::Scaling => "scaling",
            Check::Fubini => "fubini",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == s)
    }

    /// Checks that only make sense for the consumption example.
    pub fn needs_consumption_model(self) -> bool {
        matches!(
            self,
            Check::Lambda | Check::P | Check::ForwardBound | Check::Transversality
        )
    }
}

/// Coefficients given as expressions; see [`crate::expr`].
#[derive(Debug, Clone, PartialEq)]
pub struct ExpressionModel {
    pub drift: String,
    pub diffusion: String,
    pub jump: String,
    pub driver: String,
    pub running: String,
    /// Function of `y`.
    pub h1: String,
    /// Function of `x1` and `n`.
    pub h2: Option<String>,
    /// Function of `x1`.
    pub psi: String,
    /// Mean field `E[phi(x1)]` instead of the lifted state.
    pub phi: Option<String>,
    pub terminal_coupling: f64,
    pub x0: f64,
    pub control_min: f64,
    pub control_max: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ModelSpec {
    RecursiveUtility(ConsumptionModel),
    LinearToy(LinearToy),
    JumpMartingale { x0: f64 },
    BrownianBsde { x0: f64 },
    QuadraticDrift { x0: f64, sigma: f64 },
    Expression(Box<ExpressionModel>),
}

impl ModelSpec {
    pub fn name(&self) -> &'static str {
        match self {
            ModelSpec::RecursiveUtility(_) => Builtin::RecursiveUtility.name(),
            ModelSpec::LinearToy(_) => Builtin::LinearToy.name(),
            ModelSpec::JumpMartingale { .. } => Builtin::JumpMartingale.name(),
            ModelSpec::BrownianBsde { .. } => Builtin::BrownianBsde.name(),
            ModelSpec::QuadraticDrift { .. } => Builtin::QuadraticDrift.name(),
            ModelSpec::Expression(_) => "expression",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridConfig {
    pub horizon: f64,
    pub dt: f64,
    pub delta: f64,
    pub infinite: bool,
    pub kappa: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InformationMode {
    Full,
    Delayed(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tolerances {
    pub residual_slack: f64,
    pub gradient_slack: f64,
    pub slope_rel: f64,
    pub scaling_min: f64,
    pub scaling_max: f64,
    pub fubini: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            residual_slack: 0.05,
            gradient_slack: 0.02,
            slope_rel: 0.15,
            scaling_min: 1.8,
            scaling_max: 2.2,
            fubini: 1e-12,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientConfig {
    pub bumps: usize,
    pub alpha: f64,
    pub s_fd: f64,
    /// Empty means the run seed.
    pub seeds: Vec<u64>,
    /// Base control; the consumption model defaults to 0.5.
    pub control: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub model: ModelSpec,
    pub grid: GridConfig,
    pub delays: Vec<MeasureKind>,
    pub jumps: Option<JumpSpec>,
    pub n_particles: usize,
    pub seed: u64,
    pub basis: RegressionBasis,
    pub information: InformationMode,
    pub checks: Vec<Check>,
    pub tolerances: Tolerances,
    pub output_dir: PathBuf,
    /// Constant control for models other than the consumption example.
    pub control: f64,
    pub gradient: GradientConfig,
    pub scaling_alphas: Vec<f64>,
    pub t_list: Vec<f64>,
    pub transversality_particles: usize,
    pub warnings: Vec<String>,
}

/// Command-line values that replace configured ones.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub particles: Option<usize>,
    pub dt: Option<f64>,
    pub out: Option<PathBuf>,
    pub checks: Vec<String>,
}

struct Reader<'a> {
    path: String,
    table: &'a Table,
    used: RefCell<Vec<String>>,
    errors: &'a RefCell<Vec<ConfigError>>,
}

impl<'a> Reader<'a> {
    fn new(path: &str, table: &'a Table, errors: &'a RefCell<Vec<ConfigError>>) -> Self {
        Self {
            path: path.to_string(),
            table,
            used: RefCell::new(Vec::new()),
            errors,
        }
    }

    fn key_path(&self, key: &str) -> String {
        if self.path.is_empty() {
            key.to_string()
        } else {
            format!("{}.{key}", self.path)
        }
    }

    fn error(&self, key: &str, message: impl Into<String>) {
        self.errors.borrow_mut().push(ConfigError {
            path: self.key_path(key),
            message: message.into(),
        });
    }

    fn get(&self, key: &str) -> Option<&'a Value> {
        self.used.borrow_mut().push(key.to_string());
        self.table.get(key)
    }

    fn has(&self, key: &str) -> bool {
        self.table.contains_key(key)
    }

    fn f64(&self, key: &str, default: f64) -> f64 {
        match self.get(key) {
            None => default,
            Some(Value::Float(v)) => *v,
            Some(Value::Integer(v)) => *v as f64,
            Some(v) => {
                self.error(key, format!("expected a number, found {}", v.type_str()));
                default
            }
        }
    }

    fn opt_f64(&self, key: &str) -> Option<f64> {
        self.has(key).then(|| self.f64(key, f64::NAN))
    }

    fn u64(&self, key: &str, default: u64) -> u64 {
        match self.get(key) {
            None => default,
            Some(Value::Integer(v)) if *v >= 0 => *v as u64,
            Some(v) => {
                self.error(key, format!("expected a non-negative integer, found {v}"));
                default
            }
        }
    }

    fn usize(&self, key: &str, default: usize) -> usize {
        self.u64(key, default as u64) as usize
    }

    fn bool(&self, key: &str, default: bool) -> bool {
        match self.get(key) {
            None => default,
            Some(Value::Boolean(b)) => *b,
            Some(v) => {
                self.error(key, format!("expected a boolean, found {}", v.type_str()));
                default
            }
        }
    }

    fn string(&self, key: &str) -> Option<String> {
        match self.get(key) {
            None => None,
            Some(Value::String(s)) => Some(s.clone()),
            Some(v) => {
                self.error(key, format!("expected a string, found {}", v.type_str()));
                None
            }
        }
    }

    fn array(&self, key: &str) -> Option<&'a Vec<Value>> {
        match self.get(key) {
            None => None,
            Some(Value::Array(a)) => Some(a),
            Some(v) => {
                self.error(key, format!("expected an array, found {}", v.type_str()));
                None
            }
        }
    }

    fn f64_list(&self, key: &str, default: &[f64]) -> Vec<f64> {
        let Some(a) = self.array(key) else {
            return default.to_vec();
        };
        a.iter()
            .enumerate()
            .filter_map(|(i, v)| match v {
                Value::Float(f) => Some(*f),
                Value::Integer(n) => Some(*n as f64),
                other => {
                    self.error(&format!("{key}[{i}]"), format!("expected a number, found {}", other.type_str()));
                    None
                }
            })
            .collect()
    }

    fn u64_list(&self, key: &str) -> Vec<u64> {
        let Some(a) = self.array(key) else {
            return Vec::new();
        };
        a.iter()
            .enumerate()
            .filter_map(|(i, v)| match v {
                Value::Integer(n) if *n >= 0 => Some(*n as u64),
                other => {
                    self.error(&format!("{key}[{i}]"), format!("expected a non-negative integer, found {other}"));
                    None
                }
            })
            .collect()
    }

    fn table(&self, key: &str) -> Option<Reader<'a>> {
        match self.get(key) {
            None => None,
            Some(Value::Table(t)) => Some(Reader::new(&self.key_path(key), t, self.errors)),
            Some(v) => {
                self.error(key, format!("expected a table, found {}", v.type_str()));
                None
            }
        }
    }

    /// Reports every key that was never read.
    fn finish(self) {
        let used = self.used.borrow();
        for key in self.table.keys() {
            if !used.iter().any(|u| u == key) {
                self.error(key, "unknown key");
            }
        }
    }
}

fn parse_measure(r: Reader<'_>) -> Option<MeasureKind> {
    let kind = r.string("kind");
    let out = match kind.as_deref() {
        Some("dirac_zero") => Some(MeasureKind::DiracAtZero),
        Some("dirac_minus_delta") => Some(MeasureKind::DiracAtMinusDelta),
        Some("exponential") => Some(MeasureKind::Exponential { rate: r.f64("rate", 1.0) }),
        Some("atoms") => Some(MeasureKind::DiscreteAtoms {
            offsets: r.f64_list("offsets", &[]),
            masses: r.f64_list("masses", &[]),
        }),
        Some(other) => {
            r.error(
                "kind",
                format!("unknown delay measure '{other}', expected dirac_zero, dirac_minus_delta, exponential or atoms"),
            );
            None
        }
        None => {
            r.error("kind", "missing delay measure kind");
            None
        }
    };
    r.finish();
    out
}

fn expression_model(r: &Reader<'_>) -> ExpressionModel {
    let s = |k: &str, d: &str| r.string(k).unwrap_or_else(|| d.to_string());
    ExpressionModel {
        drift: s("drift", "0"),
        diffusion: s("diffusion", "0"),
        jump: s("jump", "0"),
        driver: s("driver", "0"),
        running: s("running", "0"),
        h1: s("h1", "y"),
        h2: r.string("h2"),
        psi: s("psi", "x1"),
        phi: r.string("phi"),
        terminal_coupling: r.f64("terminal_coupling", 1.0),
        x0: r.f64("x0", 0.0),
        control_min: r.f64("control_min", f64::NEG_INFINITY),
        control_max: r.f64("control_max", f64::INFINITY),
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str, ov: &Overrides) -> Result<Self, ConfigErrors> {
        let table: Table = text.parse().map_err(|e: toml::de::Error| {
            ConfigErrors(vec![ConfigError {
                path: String::new(),
                message: format!("malformed configuration: {}", e.message()),
            }])
        })?;
        let errors = RefCell::new(Vec::new());
        let cfg = Self::read(&table, &errors, ov);
        let mut errs = errors.into_inner();
        if let Some(cfg) = &cfg {
            cfg.validate(&mut errs);
        }
        match cfg {
            Some(mut cfg) if errs.is_empty() => {
                cfg.warnings = cfg.collect_warnings();
                Ok(cfg)
            }
            _ => Err(ConfigErrors(errs)),
        }
    }

    fn read(table: &Table, errors: &RefCell<Vec<ConfigError>>, ov: &Overrides) -> Option<Self> {
        let root = Reader::new("", table, errors);
        let model_name = root.string("model");
        let Some(model_name) = model_name else {
            root.error("model", "missing model name");
            return None;
        };
        let is_ru = model_name == "recursive_utility";

        let grid = match root.table("grid") {
            Some(g) => {
                let out = GridConfig {
                    horizon: g.f64("horizon", if is_ru { 10.0 } else { 1.0 }),
                    dt: g.f64("dt", 1e-2),
                    delta: g.f64("delta", 0.0),
                    infinite: g.bool("infinite", false),
                    kappa: g.f64("kappa", 0.0),
                };
                g.finish();
                out
            }
            None => GridConfig {
                horizon: if is_ru { 10.0 } else { 1.0 },
                dt: 1e-2,
                delta: 0.0,
                infinite: false,
                kappa: 0.0,
            },
        };

        let mut delays = Vec::new();
        if let Some(list) = root.array("delay") {
            for (i, v) in list.iter().enumerate() {
                match v {
                    Value::Table(t) => {
                        if let Some(m) = parse_measure(Reader::new(&format!("delay[{i}]"), t, errors)) {
                            delays.push(m);
                        }
                    }
                    other => root.error(&format!("delay[{i}]"), format!("expected a table, found {}", other.type_str())),
                }
            }
        }

        let jumps = root.table("jumps").map(|j| {
            let marks = j.f64_list("marks", &[]);
            let weights = j.f64_list("weights", &[]);
            let spec = match JumpSpec::new(marks, weights) {
                Ok(s) => Some(s),
                Err(e) => {
                    j.error("weights", e.to_string());
                    None
                }
            };
            j.finish();
            spec
        });
        let jumps = jumps.flatten();

        let basis = match root.table("basis") {
            Some(b) => {
                let out = RegressionBasis {
                    degree: b.usize("degree", 2),
                    ridge: b.f64("ridge", 1e-8),
                };
                b.finish();
                out
            }
            None => RegressionBasis::default(),
        };

        let information = match root.table("information") {
            Some(t) => {
                let mode = t.string("mode");
                let out = match mode.as_deref() {
                    None | Some("full") => InformationMode::Full,
                    Some("delayed") => InformationMode::Delayed(t.f64("delay", 0.0)),
                    Some(other) => {
                        t.error("mode", format!("unknown information mode '{other}', expected full or delayed"));
                        InformationMode::Full
                    }
                };
                if matches!(out, InformationMode::Full) && t.has("delay") {
                    t.f64("delay", 0.0);
                    t.error("delay", "only valid with mode = \"delayed\"");
                }
                t.finish();
                out
            }
            None => InformationMode::Full,
        };

        let mut tolerances = Tolerances::default();
        if let Some(t) = root.table("tolerances") {
            let d = Tolerances::default();
            tolerances = Tolerances {
                residual_slack: t.f64("residual_slack", d.residual_slack),
                gradient_slack: t.f64("gradient_slack", d.gradient_slack),
                slope_rel: t.f64("slope_rel", d.slope_rel),
                scaling_min: t.f64("scaling_min", d.scaling_min),
                scaling_max: t.f64("scaling_max", d.scaling_max),
                fubini: t.f64("fubini", d.fubini),
            };
            t.finish();
        }

        let mut gradient = GradientConfig {
            bumps: 5,
            alpha: 0.25,
            s_fd: 0.01,
            seeds: Vec::new(),
            control: None,
        };
        if let Some(t) = root.table("gradient") {
            gradient = GradientConfig {
                bumps: t.usize("bumps", gradient.bumps),
                alpha: t.f64("alpha", gradient.alpha),
                s_fd: t.f64("s_fd", gradient.s_fd),
                seeds: t.u64_list("seeds"),
                control: t.opt_f64("control"),
            };
            t.finish();
        }

        let mut scaling_alphas = vec![0.1, 0.05, 0.025, 0.0125];
        if let Some(t) = root.table("scaling") {
            scaling_alphas = t.f64_list("alphas", &scaling_alphas);
            t.finish();
        }

        let mut t_list = vec![2.0, 4.0, 6.0, 8.0, 10.0];
        let mut transversality_particles = 1000;
        if let Some(t) = root.table("transversality") {
            t_list = t.f64_list("horizons", &t_list);
            transversality_particles = t.usize("particles", transversality_particles);
            t.finish();
        }

        let model_section = root.table(&model_name);
        for b in Builtin::ALL.iter().map(|b| b.name()).chain(["expression"]) {
            if b != model_name && root.has(b) {
                root.get(b);
                root.error(b, format!("section does not apply to model '{model_name}'"));
            }
        }
        let empty = Table::new();
        let sec = model_section.unwrap_or_else(|| Reader::new(&model_name, &empty, errors));
        let model = match model_name.as_str() {
            "recursive_utility" => {
                let d = ConsumptionModel::default();
                ModelSpec::RecursiveUtility(ConsumptionModel {
                    x: sec.f64("x", d.x),
                    c: sec.f64("c", d.c),
                    alpha: sec.f64("alpha", d.alpha),
                    beta: sec.f64("beta", d.beta),
                    sigma: sec.f64("sigma", d.sigma),
                    gamma: sec.f64("gamma", d.gamma),
                    terminal_consumption: sec.f64("terminal_consumption", d.terminal_consumption),
                    control_bounds: (
                        sec.f64("control_min", d.control_bounds.0),
                        sec.f64("control_max", d.control_bounds.1),
                    ),
                    jumps: jumps.clone().unwrap_or_else(JumpSpec::none),
                    delay: delays.first().cloned().unwrap_or(MeasureKind::DiracAtZero),
                    delta: grid.delta,
                    horizon: grid.horizon,
                    dt: grid.dt,
                })
            }
            "linear_toy" => {
                let d = LinearToy::default();
                ModelSpec::LinearToy(LinearToy {
                    x0: sec.f64("x0", d.x0),
                    theta: sec.f64("theta", d.theta),
                    sigma: sec.f64("sigma", d.sigma),
                    rho: sec.f64("rho", d.rho),
                })
            }
            "jump_martingale" => ModelSpec::JumpMartingale { x0: sec.f64("x0", 0.0) },
            "brownian_bsde" => ModelSpec::BrownianBsde { x0: sec.f64("x0", 0.0) },
            "quadratic_drift" => ModelSpec::QuadraticDrift {
                x0: sec.f64("x0", 1.0),
                sigma: sec.f64("sigma", 0.3),
            },
            "expression" => ModelSpec::Expression(Box::new(expression_model(&sec))),
            other => {
                root.error(
                    "model",
                    format!(
                        "unknown model '{other}', expected recursive_utility, linear_toy, jump_martingale, brownian_bsde, quadratic_drift or expression"
                    ),
                );
                sec.finish();
                root.finish();
                return None;
            }
        };
        sec.finish();

        let mut checks = Vec::new();
        let from_file: Option<Vec<String>> = root.array("checks").map(|list| {
            list.iter()
                .enumerate()
                .filter_map(|(i, v)| match v {
                    Value::String(s) => Some(s.clone()),
                    other => {
                        root.error(&format!("checks[{i}]"), format!("expected a string, found {}", other.type_str()));
                        None
                    }
                })
                .collect()
        });
        // Command-line checks replace the configured list.
        let names: Vec<String> = if !ov.checks.is_empty() {
            ov.checks.clone()
        } else if let Some(list) = from_file {
            list
        } else if is_ru {
            ["lambda", "p", "forward_bound", "residual", "transversality"]
                .iter()
                .map(|s| s.to_string())
                .collect()
        } else {
            vec!["residual".to_string()]
        };
        for (i, n) in names.iter().enumerate() {
            match Check::from_name(n) {
                Some(c) if !checks.contains(&c) => checks.push(c),
                Some(_) => {}
                None => {
                    let valid: Vec<_> = Check::ALL.iter().map(|c| c.name()).collect();
                    root.error(&format!("checks[{i}]"), format!("unknown check '{n}', expected one of {}", valid.join(", ")));
                }
            }
        }
        checks.sort();

        let mut cfg = ExperimentConfig {
            model,
            grid,
            delays,
            jumps,
            n_particles: root.usize("n_particles", 10_000),
            seed: root.u64("seed", 0),
            basis,
            information,
            checks,
            tolerances,
            output_dir: root.string("output_dir").map(PathBuf::from).unwrap_or_else(|| PathBuf::from("mfdelay-out")),
            control: root.f64("control", 0.0),
            gradient,
            scaling_alphas,
            t_list,
            transversality_particles,
            warnings: Vec::new(),
        };
        root.finish();

        if let Some(s) = ov.seed {
            cfg.seed = s;
        }
        if let Some(n) = ov.particles {
            cfg.n_particles = n;
        }
        if let Some(dt) = ov.dt {
            cfg.grid.dt = dt;
            if let ModelSpec::RecursiveUtility(m) = &mut cfg.model {
                m.dt = dt;
            }
        }
        if let Some(out) = &ov.out {
            cfg.output_dir = out.clone();
        }
        Some(cfg)
    }

    fn validate(&self, errs: &mut Vec<ConfigError>) {
        let mut err = |path: &str, message: String| {
            errs.push(ConfigError {
                path: path.to_string(),
                message,
            })
        };
        let g = &self.grid;
        if !(g.horizon > 0.0 && g.horizon.is_finite()) {
            err("grid.horizon", format!("must be positive, got {}", g.horizon));
        }
        if !(g.dt > 0.0) {
            err("grid.dt", format!("must be positive, got {}", g.dt));
        }
        if !(g.delta >= 0.0) {
            err("grid.delta", format!("must be non-negative, got {}", g.delta));
        }
        if g.horizon > 0.0 && g.dt > 0.0 && g.delta >= 0.0 {
            if let Err(e) = TimeGrid::new(g.horizon, g.dt, g.delta) {
                err("grid", e.to_string());
            }
        }
        if !(g.kappa >= 0.0) {
            err("grid.kappa", format!("must be non-negative, got {}", g.kappa));
        }
        if self.n_particles < 2 {
            err("n_particles", format!("need at least 2 particles, got {}", self.n_particles));
        }
        if !(self.basis.ridge >= 0.0) {
            err("basis.ridge", format!("must be non-negative, got {}", self.basis.ridge));
        }
        if let InformationMode::Delayed(d) = self.information {
            if !(d >= 0.0) {
                err("information.delay", format!("must be non-negative, got {d}"));
            } else if g.dt > 0.0 {
                let r = d / g.dt;
                if (r - r.round()).abs() > 1e-9 * r.abs().max(1.0) {
                    err("information.delay", format!("{d} is not a multiple of dt = {}", g.dt));
                }
            }
        }
        if g.delta == 0.0 {
            for (i, m) in self.delays.iter().enumerate() {
                if !matches!(m, MeasureKind::DiracAtZero) {
                    err(&format!("delay[{i}]"), "needs grid.delta > 0".to_string());
                }
            }
        }
        let is_ru = matches!(self.model, ModelSpec::RecursiveUtility(_));
        for c in &self.checks {
            if c.needs_consumption_model() && !is_ru {
                err("checks", format!("check '{}' needs model = \"recursive_utility\"", c.name()));
            }
        }
        if self.checks.contains(&Check::Sufficient) {
            if let ModelSpec::Expression(e) = &self.model {
                if !(e.control_min.is_finite() && e.control_max.is_finite()) {
                    err("checks", "check 'sufficient' needs finite expression.control_min and control_max".into());
                }
            }
        }
        if self.checks.contains(&Check::Transversality) {
            if self.t_list.len() < 2 {
                err("transversality.horizons", "need at least two horizons".into());
            }
            if self.t_list.iter().any(|t| !(*t > 0.0)) {
                err("transversality.horizons", "horizons must be positive".into());
            }
            if self.transversality_particles < 2 {
                err("transversality.particles", "need at least 2 particles".into());
            }
        }
        if self.checks.contains(&Check::Gradient) {
            let gr = &self.gradient;
            if gr.bumps == 0 {
                err("gradient.bumps", "need at least one bump".into());
            }
            if !(gr.s_fd > 0.0) {
                err("gradient.s_fd", format!("must be positive, got {}", gr.s_fd));
            }
        }
        if self.checks.contains(&Check::Scaling) && (self.scaling_alphas.len() < 2 || self.scaling_alphas.iter().any(|a| !(*a > 0.0))) {
            err("scaling.alphas", "need at least two positive values".into());
        }
        match &self.model {
            ModelSpec::RecursiveUtility(m) => {
                if let Err(e) = m.validate() {
                    err("recursive_utility", e.to_string());
                }
                if self.delays.len() > 1 {
                    err("delay", "the consumption model takes a single delay measure".into());
                }
                if self.jumps.is_some() && m.gamma == 0.0 {
                    err("jumps", "jump marks have no effect with recursive_utility.gamma = 0".into());
                }
            }
            ModelSpec::Expression(e) => {
                let fields = [
                    ("drift", &e.drift),
                    ("diffusion", &e.diffusion),
                    ("jump", &e.jump),
                    ("driver", &e.driver),
                    ("running", &e.running),
                ];
                for (name, src) in fields {
                    if let Err(x) = ExprCoef::parse(src) {
                        err(&format!("expression.{name}"), x.to_string());
                    }
                }
                if let Err(x) = univariate(&e.h1, Sym::Y) {
                    err("expression.h1", x.to_string());
                }
                if let Err(x) = univariate(&e.psi, Sym::X(0)) {
                    err("expression.psi", x.to_string());
                }
                if let Some(phi) = &e.phi {
                    if let Err(x) = univariate(phi, Sym::X(0)) {
                        err("expression.phi", x.to_string());
                    }
                }
                if let Some(h2) = &e.h2 {
                    match ExprCoef::parse(h2) {
                        Ok(c) => {
                            if let Some(bad) = c.symbols().into_iter().find(|s| !matches!(s, Sym::X(0) | Sym::N)) {
                                err("expression.h2", format!("only x1 and n may appear, found '{bad}'"));
                            }
                        }
                        Err(x) => err("expression.h2", x.to_string()),
                    }
                }
                if !(e.control_min <= e.control_max) {
                    err("expression.control_min", "must not exceed control_max".into());
                }
            }
            _ => {}
        }
    }

    fn collect_warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        if let ModelSpec::RecursiveUtility(m) = &self.model {
            for w in m.warnings() {
                let relevant = (w == DECAY_WARNING && self.checks.contains(&Check::Transversality))
                    || (w == LAMBDA_WARNING && self.checks.contains(&Check::Lambda));
                if relevant {
                    out.push(w);
                }
            }
        }
        out
    }

    /// Digest input: everything that determines the numerical output.
    pub fn canonical(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        c.warnings.clear();
        format!("{c:?}")
    }
}

pub fn parse_config(path: &Path, ov: &Overrides) -> Result<ExperimentConfig, ConfigErrors> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        ConfigErrors(vec![ConfigError {
            path: String::new(),
            message: format!("cannot read {}: {e}", path.display()),
        }])
    })?;
    ExperimentConfig::from_toml_str(&text, ov)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<ExperimentConfig, ConfigErrors> {
        ExperimentConfig::from_toml_str(text, &Overrides::default())
    }

    #[test]
    fn minimal_consumption_config_gets_defaults() {
        let c = parse("model = \"recursive_utility\"").unwrap();
        assert_eq!(c.n_particles, 10_000);
        assert_eq!(c.grid.dt, 1e-2);
        assert_eq!(c.basis.degree, 2);
        assert_eq!(c.basis.ridge, 1e-8);
        assert_eq!(c.grid.horizon, 10.0);
        assert_eq!(
            c.checks,
            vec![Check::Lambda, Check::P, Check::ForwardBound, Check::Residual, Check::Transversality]
        );
        assert!(c.warnings.is_empty());
    }

    #[test]
    fn dt_not_dividing_delta_names_both() {
        let e = parse("model = \"linear_toy\"\n[grid]\ndt = 0.3\ndelta = 0.5\n").unwrap_err();
        let msg = e.to_string();
        assert!(msg.contains("0.5") && msg.contains("0.3"), "{msg}");
    }

    #[test]
    fn unknown_keys_are_reported_with_paths() {
        let e = parse("model = \"recursive_utility\"\nspeed = 3\n[grid]\nhorizn = 2\n[recursive_utility]\nalpah = 1\n").unwrap_err();
        let paths: Vec<_> = e.0.iter().map(|x| x.path.as_str()).collect();
        assert!(paths.contains(&"speed"));
        assert!(paths.contains(&"grid.horizn"));
        assert!(paths.contains(&"recursive_utility.alpah"));
    }

    #[test]
    fn type_mismatch_and_constraints() {
        let e = parse("model = \"linear_toy\"\nn_particles = \"many\"\n[grid]\ndt = -1\n").unwrap_err();
        let paths: Vec<_> = e.0.iter().map(|x| x.path.as_str()).collect();
        assert!(paths.contains(&"n_particles"));
        assert!(paths.contains(&"grid.dt"));
    }

    #[test]
    fn decay_warning_when_transversality_requested() {
        let c = parse("model = \"recursive_utility\"\n[recursive_utility]\nalpha = 0.1\nbeta = 0.4\n").unwrap();
        assert!(c.warnings.iter().any(|w| w == DECAY_WARNING));
        let c = parse("model = \"recursive_utility\"\nchecks = [\"p\"]\n[recursive_utility]\nc = 0.5\n").unwrap();
        assert!(c.warnings.is_empty());
    }

    #[test]
    fn expression_errors_point_at_the_field() {
        let e = parse("model = \"expression\"\n[expression]\ndrift = \"x1 +\"\nh2 = \"u\"\n").unwrap_err();
        let paths: Vec<_> = e.0.iter().map(|x| x.path.as_str()).collect();
        assert!(paths.contains(&"expression.drift"));
        assert!(paths.contains(&"expression.h2"));
    }

    #[test]
    fn consumption_checks_need_the_consumption_model() {
        let e = parse("model = \"linear_toy\"\nchecks = [\"lambda\"]\n").unwrap_err();
        assert!(e.to_string().contains("lambda"));
        assert!(parse("model = \"linear_toy\"\nchecks = [\"nope\"]\n").is_err());
    }

    #[test]
    fn overrides_replace_values() {
        let ov = Overrides {
            seed: Some(9),
            particles: Some(50),
            dt: Some(0.05),
            out: Some("x".into()),
            checks: vec!["fubini".into()],
        };
        let c = ExperimentConfig::from_toml_str("model = \"recursive_utility\"\nseed = 1\n", &ov).unwrap();
        assert_eq!((c.seed, c.n_particles, c.grid.dt), (9, 50, 0.05));
        assert_eq!(c.checks, vec![Check::Fubini]);
        let ModelSpec::RecursiveUtility(m) = &c.model else { panic!() };
        assert_eq!(m.dt, 0.05);
    }

    #[test]
    fn delay_list_and_jumps() {
        let c = parse(
            "model = \"expression\"\n[grid]\ndelta = 0.1\n[[delay]]\nkind = \"exponential\"\nrate = 2\n[[delay]]\nkind = \"dirac_minus_delta\"\n[jumps]\nmarks = [1.0]\nweights = [0.5]\n[expression]\ndrift = \"m1 - x2\"\n",
        )
        .unwrap();
        assert_eq!(c.delays.len(), 2);
        assert_eq!(c.jumps.as_ref().unwrap().len(), 1);
        let e = parse("model = \"expression\"\n[[delay]]\nkind = \"exponential\"\n").unwrap_err();
        assert!(e.0.iter().any(|x| x.path == "delay[0]"));
    }

    #[test]
    fn foreign_model_section_is_rejected() {
        let e = parse("model = \"linear_toy\"\n[recursive_utility]\nc = 1\n").unwrap_err();
        assert!(e.0.iter().any(|x| x.path == "recursive_utility"));
    }
}
