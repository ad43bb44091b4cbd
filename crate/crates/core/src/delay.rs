//! Delay measures on `[-delta, 0]`, the segment functional
//! `int X(t+s) mu(ds)` and its time-advanced dual `int phi(t-s) mu(ds)`.
//!
//! Every measure is stored as grid-aligned atoms. Absolutely continuous
//! (exponential) densities are atomized at construction with one atom per
//! grid cell, placed at the left endpoint of the cell and carrying the exact
//! mass of the cell.

use crate::error::{Error, Result};
use crate::paths::{TimeGrid, Trajectory};

/// Source description of a delay measure, independent of the grid.
#[derive(Debug, Clone, PartialEq)]
pub enum MeasureKind {
    DiracAtZero,
    DiracAtMinusDelta,
    /// Density `exp(rate * s)` on `[-delta, 0]`.
    Exponential { rate: f64 },
    /// Atoms at `offsets` (each in `[-delta, 0]`) with positive `masses`.
    DiscreteAtoms { offsets: Vec<f64>, masses: Vec<f64> },
}

impl MeasureKind {
    pub fn label(&self) -> &'static str {
        match self {
            MeasureKind::DiracAtZero => "dirac_zero",
            MeasureKind::DiracAtMinusDelta => "dirac_minus_delta",
            MeasureKind::Exponential { .. } => "exponential",
            MeasureKind::DiscreteAtoms { .. } => "atoms",
        }
    }
}

/// Point mass at offset `s = -lag * dt`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Atom {
    pub lag: usize,
    pub mass: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DelayMeasure {
    kind: MeasureKind,
    atoms: Vec<Atom>,
    total_mass: f64,
}

impl DelayMeasure {
    pub fn new(kind: MeasureKind, grid: &TimeGrid) -> Result<Self> {
        let dt = grid.dt();
        let lag = grid.lag();
        let atoms = match &kind {
            MeasureKind::DiracAtZero => vec![Atom { lag: 0, mass: 1.0 }],
            MeasureKind::DiracAtMinusDelta => vec![Atom { lag, mass: 1.0 }],
            MeasureKind::Exponential { rate } => {
                if !rate.is_finite() {
                    return Err(Error::Measure(format!("exponential rate {rate} is not finite")));
                }
                if lag == 0 {
                    return Err(Error::Measure(
                        "exponential density needs delta > 0".into(),
                    ));
                }
                let cell = if *rate == 0.0 { dt } else { (rate * dt).exp_m1() / rate };
                (0..lag)
                    .map(|j| {
                        let left = -((lag - j) as f64) * dt;
                        Atom {
                            lag: lag - j,
                            mass: (rate * left).exp() * cell,
                        }
                    })
                    .collect()
            }
            MeasureKind::DiscreteAtoms { offsets, masses } => {
                if offsets.len() != masses.len() || offsets.is_empty() {
                    return Err(Error::Measure(format!(
                        "{} offsets but {} masses",
                        offsets.len(),
                        masses.len()
                    )));
                }
                let delta = grid.delta();
                let mut atoms = Vec::with_capacity(offsets.len());
                for (s, m) in offsets.iter().zip(masses) {
                    if *s > 1e-12 || *s < -delta - 1e-9 * delta.max(1.0) {
                        return Err(Error::Measure(format!(
                            "atom offset {s} outside [-{delta}, 0]"
                        )));
                    }
                    let r = -s / dt;
                    if (r - r.round()).abs() > 1e-9 * r.abs().max(1.0) {
                        return Err(Error::Measure(format!(
                            "atom offset {s} is not a multiple of dt = {dt}"
                        )));
                    }
                    if !(*m > 0.0) || !m.is_finite() {
                        return Err(Error::Measure(format!("atom mass {m} must be positive")));
                    }
                    atoms.push(Atom {
                        lag: r.round() as usize,
                        mass: *m,
                    });
                }
                atoms
            }
        };
        let total_mass = match &kind {
            MeasureKind::Exponential { rate } if *rate != 0.0 => {
                -(-rate * grid.delta()).exp_m1() / rate
            }
            _ => atoms.iter().map(|a| a.mass).sum(),
        };
        if !(total_mass > 0.0) || !total_mass.is_finite() {
            return Err(Error::Measure(format!("total mass {total_mass} must be positive")));
        }
        Ok(Self {
            kind,
            atoms,
            total_mass,
        })
    }

    pub fn dirac_zero() -> Self {
        Self {
            kind: MeasureKind::DiracAtZero,
            atoms: vec![Atom { lag: 0, mass: 1.0 }],
            total_mass: 1.0,
        }
    }

    pub fn kind(&self) -> &MeasureKind {
        &self.kind
    }

    pub fn atoms(&self) -> &[Atom] {
        &self.atoms
    }

    /// `|mu| = mu([-delta, 0])`.
    pub fn total_mass(&self) -> f64 {
        self.total_mass
    }

    pub fn is_dirac_zero(&self) -> bool {
        self.atoms.len() == 1 && self.atoms[0].lag == 0
    }

    /// `sum_a mass_a * values[j - lag_a]` for a globally indexed path.
    #[inline]
    pub fn apply_lagged(&self, values: &[f64], j: usize) -> f64 {
        self.atoms.iter().map(|a| a.mass * values[j - a.lag]).sum()
    }

    /// `sum_a mass_a * phi[k + lag_a]` on a main-grid path; indices past the
    /// end are zero when `clamp` is set, otherwise the last value is held.
    #[inline]
    pub fn apply_advanced(&self, phi: &[f64], k: usize, clamp: bool) -> f64 {
        let last = phi.len() - 1;
        self.atoms
            .iter()
            .map(|a| {
                let idx = k + a.lag;
                if idx <= last {
                    a.mass * phi[idx]
                } else if clamp {
                    0.0
                } else {
                    a.mass * phi[last]
                }
            })
            .sum()
    }
}

/// The delay structure of a model: `N >= 1` measures sharing one `delta`.
#[derive(Debug, Clone, PartialEq)]
pub struct DelaySpec {
    delta: f64,
    dt: f64,
    measures: Vec<DelayMeasure>,
}

impl DelaySpec {
    pub fn new(kinds: Vec<MeasureKind>, grid: &TimeGrid) -> Result<Self> {
        if kinds.is_empty() {
            return Err(Error::Measure("at least one delay measure is required".into()));
        }
        let measures = kinds
            .into_iter()
            .map(|k| DelayMeasure::new(k, grid))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            delta: grid.delta(),
            dt: grid.dt(),
            measures,
        })
    }

    /// A single Dirac measure at zero, i.e. no delay.
    pub fn undelayed(grid: &TimeGrid) -> Self {
        Self {
            delta: grid.delta(),
            dt: grid.dt(),
            measures: vec![DelayMeasure::dirac_zero()],
        }
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn measures(&self) -> &[DelayMeasure] {
        &self.measures
    }

    pub fn len(&self) -> usize {
        self.measures.len()
    }

    pub fn is_empty(&self) -> bool {
        self.measures.is_empty()
    }

    pub fn matches(&self, grid: &TimeGrid) -> bool {
        (self.dt - grid.dt()).abs() <= 1e-15 * grid.dt() && (self.delta - grid.delta()).abs() <= 1e-12
    }

    /// Lifted state at global node `j` written into `out`.
    #[inline]
    pub fn lift_into(&self, values: &[f64], j: usize, out: &mut [f64]) {
        for (o, m) in out.iter_mut().zip(&self.measures) {
            *o = m.apply_lagged(values, j);
        }
    }
}

fn check_main_node(grid: &TimeGrid, t: f64) -> Result<usize> {
    grid.main_index(t)
}

/// `int_{-delta}^0 X(t+s) mu(ds)` at main-grid time `t`.
pub fn segment_functional(traj: &Trajectory, t: f64, mu: &DelayMeasure) -> Result<f64> {
    let grid = traj.grid();
    let k = check_main_node(grid, t)?;
    let j = grid.global(k);
    if mu.atoms.iter().any(|a| a.lag > j) {
        return Err(Error::OutOfRange {
            t: t - grid.delta(),
            start: grid.t_start(),
            end: grid.t_end(),
        });
    }
    Ok(mu.apply_lagged(traj.values(), j))
}

/// `(int X(t+s) mu_i(ds))_i` for every measure of `spec`.
pub fn lifted_state(traj: &Trajectory, t: f64, spec: &DelaySpec) -> Result<Vec<f64>> {
    spec.measures
        .iter()
        .map(|m| segment_functional(traj, t, m))
        .collect()
}

/// `int_{-delta}^0 phi(t-s) mu(ds)`: a weighted average of future values of
/// `phi` on `[t, t + delta]`. `phi` is indexed by main node.
pub fn anticipated_convolution(
    phi: &[f64],
    grid: &TimeGrid,
    t: f64,
    mu: &DelayMeasure,
    horizon_clamp: bool,
) -> Result<f64> {
    let k = check_main_node(grid, t)?;
    if phi.len() != grid.n_main() {
        return Err(Error::Shape(format!(
            "phi has {} values, grid has {} main nodes",
            phi.len(),
            grid.n_main()
        )));
    }
    Ok(mu.apply_advanced(phi, k, horizon_clamp))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::paths::make_grid;

    fn linear_path(grid: TimeGrid) -> Trajectory {
        let vals = grid.node_times();
        Trajectory::from_values(grid, vals).unwrap()
    }

    #[test]
    fn dirac_measures() {
        let g = make_grid(1.0, 0.1, 0.3).unwrap();
        let x = linear_path(g);
        let d0 = DelayMeasure::new(MeasureKind::DiracAtZero, &g).unwrap();
        let dd = DelayMeasure::new(MeasureKind::DiracAtMinusDelta, &g).unwrap();
        assert!((segment_functional(&x, 0.5, &d0).unwrap() - 0.5).abs() < 1e-12);
        assert!((segment_functional(&x, 0.5, &dd).unwrap() - 0.2).abs() < 1e-12);
    }

    #[test]
    fn lifted_state_of_linear_path() {
        let g = make_grid(1.0, 0.1, 0.3).unwrap();
        let x = linear_path(g);
        let spec = DelaySpec::new(
            vec![MeasureKind::DiracAtZero, MeasureKind::DiracAtMinusDelta],
            &g,
        )
        .unwrap();
        let l = lifted_state(&x, 0.7, &spec).unwrap();
        assert!((l[0] - 0.7).abs() < 1e-12 && (l[1] - 0.4).abs() < 1e-12);

        let one = DelaySpec::undelayed(&g);
        assert_eq!(lifted_state(&x, 0.7, &one).unwrap().len(), 1);
    }

    #[test]
    fn constant_path_gives_total_masses() {
        let g = make_grid(1.0, 0.05, 0.5).unwrap();
        let c = 2.5;
        let x = Trajectory::from_values(g, vec![c; g.n_nodes()]).unwrap();
        let spec = DelaySpec::new(
            vec![
                MeasureKind::DiracAtZero,
                MeasureKind::Exponential { rate: 1.3 },
                MeasureKind::DiscreteAtoms {
                    offsets: vec![-0.1, -0.45],
                    masses: vec![0.3, 0.2],
                },
            ],
            &g,
        )
        .unwrap();
        let l = lifted_state(&x, 0.5, &spec).unwrap();
        for (li, m) in l.iter().zip(spec.measures()) {
            assert!((li - c * m.total_mass()).abs() < 1e-12, "{li} vs {}", m.total_mass());
        }
    }

    #[test]
    fn exponential_mass_consistency() {
        for (rate, dt) in [(1.0, 0.5 / 8.0), (2.0, 0.01), (0.0, 0.1), (-0.7, 0.05)] {
            let g = make_grid(1.0, dt, 0.5).unwrap();
            let mu = DelayMeasure::new(MeasureKind::Exponential { rate }, &g).unwrap();
            let expected = if rate == 0.0 { 0.5 } else { (1.0 - (-rate * 0.5f64).exp()) / rate };
            let summed: f64 = mu.atoms().iter().map(|a| a.mass).sum();
            assert!((mu.total_mass() - expected).abs() < 1e-14);
            assert!((summed - expected).abs() < 1e-10 * (0.5 / dt), "{summed} vs {expected}");
            let x = Trajectory::from_values(g, vec![1.0; g.n_nodes()]).unwrap();
            let v = segment_functional(&x, 0.5, &mu).unwrap();
            assert!((v - expected).abs() < 1e-8);
        }
    }

    #[test]
    fn measure_validation() {
        let g = make_grid(1.0, 0.1, 0.3).unwrap();
        let off_grid = MeasureKind::DiscreteAtoms {
            offsets: vec![-0.15],
            masses: vec![1.0],
        };
        assert!(DelayMeasure::new(off_grid, &g).is_err());
        let outside = MeasureKind::DiscreteAtoms {
            offsets: vec![-0.5],
            masses: vec![1.0],
        };
        assert!(DelayMeasure::new(outside, &g).is_err());
        let g0 = make_grid(1.0, 0.1, 0.0).unwrap();
        assert!(DelayMeasure::new(MeasureKind::Exponential { rate: 1.0 }, &g0).is_err());
    }

    #[test]
    fn segment_functional_rejects_off_grid_time() {
        let g = make_grid(1.0, 0.1, 0.3).unwrap();
        let x = linear_path(g);
        let d0 = DelayMeasure::new(MeasureKind::DiracAtZero, &g).unwrap();
        assert!(segment_functional(&x, 1.5, &d0).is_err());
        assert!(segment_functional(&x, -0.1, &d0).is_err());
    }

    #[test]
    fn anticipated_convolution_examples() {
        let g = make_grid(1.0, 0.1, 0.3).unwrap();
        let phi: Vec<f64> = (0..g.n_main()).map(|k| k as f64).collect();
        let d0 = DelayMeasure::new(MeasureKind::DiracAtZero, &g).unwrap();
        let dd = DelayMeasure::new(MeasureKind::DiracAtMinusDelta, &g).unwrap();
        assert_eq!(anticipated_convolution(&phi, &g, 0.4, &d0, true).unwrap(), 4.0);
        assert_eq!(anticipated_convolution(&phi, &g, 0.4, &dd, true).unwrap(), 7.0);
        // At the horizon every interior atom looks past the end.
        let inner = DelayMeasure::new(
            MeasureKind::DiscreteAtoms {
                offsets: vec![-0.1, -0.2],
                masses: vec![1.0, 2.0],
            },
            &g,
        )
        .unwrap();
        assert_eq!(anticipated_convolution(&phi, &g, 1.0, &inner, true).unwrap(), 0.0);
        assert_eq!(anticipated_convolution(&phi, &g, 1.0, &inner, false).unwrap(), 30.0);
    }

    #[test]
    fn linearity() {
        let g = make_grid(1.0, 0.1, 0.3).unwrap();
        let mu = DelayMeasure::new(MeasureKind::Exponential { rate: 0.8 }, &g).unwrap();
        let xs: Vec<f64> = (0..g.n_nodes()).map(|j| (j as f64 * 0.7).sin()).collect();
        let ys: Vec<f64> = (0..g.n_nodes()).map(|j| (j as f64 * 0.3).cos()).collect();
        let (a, b) = (1.7, -0.4);
        let zs: Vec<f64> = xs.iter().zip(&ys).map(|(x, y)| a * x + b * y).collect();
        for k in 0..g.n_main() {
            let j = g.global(k);
            let lhs = mu.apply_lagged(&zs, j);
            let rhs = a * mu.apply_lagged(&xs, j) + b * mu.apply_lagged(&ys, j);
            assert!((lhs - rhs).abs() < 1e-13);
        }
    }
}
