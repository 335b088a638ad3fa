//! The discrete action and its block-descent minimizer.
//!
//! A trajectory is `N + 1` densities on a common grid with `rho_0` pinned.
//! The action charges squared Wasserstein increments at weight `1/(2 tau)`,
//! running potential and entropy at weight `tau` on interior times, and the
//! terminal potential and entropy unweighted. Minimization sweeps the time
//! slices in order, solving each one-slice problem exactly with both
//! neighbors held fixed; every sweep records the freshly recomputed action so
//! descent is checked against nothing stale.

use std::fs::File;
use std::io::BufReader;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{read_csv, Domain, GridError, GridField, Role, CAP_TOL, MASS_TOL};
use crate::scalar::Scalar;
use crate::slice::{
    solve_interior_slice, solve_terminal_slice, SliceConfig, SliceError, SliceScratch,
    SliceSolution,
};
use crate::transport::{EntropicSolver, SinkhornSettings, TransportError};

#[derive(Debug, Error)]
pub enum SchemeError {
    #[error("domain volume {volume} cannot hold unit mass under the capacity bound")]
    CapacityInfeasible { volume: f64 },
    #[error("the scheme needs at least two time steps, got {n_steps}")]
    TooFewSteps { n_steps: usize },
    #[error("{what} must be positive and finite, got {value}")]
    BadParameter { what: &'static str, value: f64 },
    #[error("potential spec {what}: expected {expected} coordinates, got {got}")]
    BadSpecDimension { what: &'static str, expected: usize, got: usize },
    #[error("trajectory needs at least two densities, got {len}")]
    ShortTrajectory { len: usize },
    #[error("trajectory density {index} lives on a different grid")]
    MixedDomains { index: usize },
    #[error("initial density file {path}: {message}")]
    InitialDensityFile { path: String, message: String },
    #[error("initial density domain does not match the configured domain")]
    InitialDensityDomain,
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Slice(#[from] SliceError),
    #[error(transparent)]
    Transport(#[from] TransportError),
}

pub type Result<V, E = SchemeError> = std::result::Result<V, E>;

/// Analytic potential catalog for configs; positions are absolute
/// coordinates in the box `[0, L_1] x ... x [0, L_d]`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum PotentialSpec {
    Zero,
    /// `slope . x + offset`.
    Affine { slope: Vec<f64>, offset: f64 },
    /// `strength |x - center|^2`.
    QuadraticWell { center: Vec<f64>, strength: f64 },
    /// `strength |x - center|`; Lipschitz, kinked at the center.
    Cone { center: Vec<f64>, strength: f64 },
    /// `strength min(x_1, L_1 - x_1)`: a tent along the first axis with
    /// Lipschitz constant exactly `|strength|`.
    LipschitzRamp { strength: f64 },
}

impl PotentialSpec {
    fn check_dimension(&self, what: &'static str, d: usize) -> Result<()> {
        let got = match self {
            PotentialSpec::Affine { slope, .. } => slope.len(),
            PotentialSpec::QuadraticWell { center, .. } | PotentialSpec::Cone { center, .. } => {
                center.len()
            }
            PotentialSpec::Zero | PotentialSpec::LipschitzRamp { .. } => d,
        };
        if got != d {
            return Err(SchemeError::BadSpecDimension { what, expected: d, got });
        }
        Ok(())
    }

    pub fn sample<T: Scalar>(&self, domain: &Arc<Domain<T>>) -> GridField<T> {
        let d = domain.dimension();
        GridField::from_fn(domain, Role::Potential, |x| match self {
            PotentialSpec::Zero => T::zero(),
            PotentialSpec::Affine { slope, offset } => {
                let mut v = T::lit(*offset);
                for a in 0..d {
                    v += T::lit(slope[a]) * x[a];
                }
                v
            }
            PotentialSpec::QuadraticWell { center, strength } => {
                let mut r2 = T::zero();
                for a in 0..d {
                    let dx = x[a] - T::lit(center[a]);
                    r2 += dx * dx;
                }
                T::lit(*strength) * r2
            }
            PotentialSpec::Cone { center, strength } => {
                let mut r2 = T::zero();
                for a in 0..d {
                    let dx = x[a] - T::lit(center[a]);
                    r2 += dx * dx;
                }
                T::lit(*strength) * r2.sqrt()
            }
            PotentialSpec::LipschitzRamp { strength } => {
                let side = domain.side_lengths()[0];
                T::lit(*strength) * x[0].min(side - x[0])
            }
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum InitialDensity {
    /// Unit mass spread evenly: `1 / |Omega|` everywhere.
    Uniform,
    /// A density field in the CSV interchange format on the same domain.
    Csv { path: String },
}

impl Default for InitialDensity {
    fn default() -> Self {
        InitialDensity::Uniform
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DomainSpec {
    pub sides: Vec<f64>,
    pub cells: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SweepSettings {
    /// Upper bound on block-descent sweeps over the slices.
    #[serde(default = "default_max_sweeps")]
    pub max_sweeps: usize,
    /// Largest per-slice L1 change under which a sweep counts as converged.
    /// Only reachable on instances whose optimum the slice map hits exactly;
    /// elsewhere slice iterates keep chattering at the scale the slice gap
    /// tolerance permits and the action criterion takes over.
    #[serde(default = "default_sweep_tol")]
    pub tol: f64,
    /// Relative action-improvement floor: two consecutive sweeps gaining
    /// less than `action_tol * (1 + |action|)` end the loop.
    #[serde(default = "default_action_tol")]
    pub action_tol: f64,
}

fn default_max_sweeps() -> usize {
    80
}

fn default_sweep_tol() -> f64 {
    1e-7
}

fn default_action_tol() -> f64 {
    1e-10
}

impl Default for SweepSettings {
    fn default() -> Self {
        SweepSettings {
            max_sweeps: default_max_sweeps(),
            tol: default_sweep_tol(),
            action_tol: default_action_tol(),
        }
    }
}

/// One solve instance, as read from a JSON config. Scalar type is fixed to
/// `f64` here; [`SolverConfig::instantiate`] converts into the working type.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SolverConfig {
    pub domain: DomainSpec,
    pub n_steps: usize,
    pub lambda: f64,
    pub running_potential: PotentialSpec,
    pub terminal_potential: PotentialSpec,
    #[serde(default)]
    pub initial_density: InitialDensity,
    /// Entropic width for transport on domains where no exact solve exists
    /// (dimension two). On a line this is ignored. `None` picks a default
    /// proportional to the squared diameter.
    #[serde(default)]
    pub epsilon: Option<f64>,
    #[serde(default)]
    pub sweeps: SweepSettings,
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let d = self.domain.sides.len();
        let dom = Domain::<f64>::new(self.domain.sides.clone(), self.domain.cells.clone())?;
        if !dom.admits_capped_unit_mass() {
            return Err(SchemeError::CapacityInfeasible { volume: dom.volume() });
        }
        if self.n_steps < 2 {
            return Err(SchemeError::TooFewSteps { n_steps: self.n_steps });
        }
        if !(self.lambda > 0.0) || !self.lambda.is_finite() {
            return Err(SchemeError::BadParameter { what: "lambda", value: self.lambda });
        }
        if let Some(eps) = self.epsilon {
            if !(eps > 0.0) || !eps.is_finite() {
                return Err(SchemeError::BadParameter { what: "epsilon", value: eps });
            }
        }
        if self.sweeps.max_sweeps == 0 {
            return Err(SchemeError::BadParameter { what: "max_sweeps", value: 0.0 });
        }
        if !(self.sweeps.tol > 0.0) || !self.sweeps.tol.is_finite() {
            return Err(SchemeError::BadParameter { what: "sweep_tol", value: self.sweeps.tol });
        }
        if !(self.sweeps.action_tol > 0.0) || !self.sweeps.action_tol.is_finite() {
            return Err(SchemeError::BadParameter {
                what: "action_tol",
                value: self.sweeps.action_tol,
            });
        }
        self.running_potential.check_dimension("running_potential", d)?;
        self.terminal_potential.check_dimension("terminal_potential", d)?;
        Ok(())
    }

    /// Builds the working instance: samples potentials, loads or builds the
    /// initial density, and fixes slice tolerances.
    pub fn instantiate<T: Scalar>(&self) -> Result<Instance<T>> {
        self.validate()?;
        let domain: Arc<Domain<T>> = Domain::new(
            self.domain.sides.iter().map(|&s| T::lit(s)).collect(),
            self.domain.cells.clone(),
        )?;
        let running = self.running_potential.sample(&domain);
        let terminal = self.terminal_potential.sample(&domain);
        let rho0 = match &self.initial_density {
            InitialDensity::Uniform => {
                GridField::constant(&domain, T::one() / domain.volume(), Role::Density)
            }
            InitialDensity::Csv { path } => {
                let file = File::open(path).map_err(|e| SchemeError::InitialDensityFile {
                    path: path.clone(),
                    message: e.to_string(),
                })?;
                let field: GridField<T> = read_csv(BufReader::new(file))?;
                if field.domain().as_ref() != domain.as_ref() {
                    return Err(SchemeError::InitialDensityDomain);
                }
                field.with_role(Role::Density)
            }
        };
        rho0.validate_density(T::lit(MASS_TOL), T::lit(CAP_TOL), true)?;
        let diameter_squared: f64 = self.domain.sides.iter().map(|s| s * s).sum();
        let epsilon = T::lit(self.epsilon.unwrap_or(1e-3 * diameter_squared));
        Ok(Instance {
            domain,
            n_steps: self.n_steps,
            lambda: T::lit(self.lambda),
            running,
            terminal,
            rho0,
            slice_cfg: SliceConfig::new(epsilon),
            sweeps: self.sweeps.clone(),
        })
    }
}

/// A fully sampled problem ready for [`minimize_discrete_action`].
#[derive(Debug, Clone)]
pub struct Instance<T> {
    pub domain: Arc<Domain<T>>,
    pub n_steps: usize,
    pub lambda: T,
    pub running: GridField<T>,
    pub terminal: GridField<T>,
    pub rho0: GridField<T>,
    pub slice_cfg: SliceConfig<T>,
    pub sweeps: SweepSettings,
}

impl<T: Scalar> Instance<T> {
    pub fn tau(&self) -> T {
        T::one() / T::from_usize(self.n_steps).unwrap()
    }
}

/// Densities `rho_0, ..., rho_N` on one grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory<T> {
    densities: Vec<GridField<T>>,
}

impl<T: Scalar> Trajectory<T> {
    pub fn new(densities: Vec<GridField<T>>) -> Result<Self> {
        if densities.len() < 2 {
            return Err(SchemeError::ShortTrajectory { len: densities.len() });
        }
        for (index, rho) in densities.iter().enumerate().skip(1) {
            if !rho.same_domain(&densities[0]) {
                return Err(SchemeError::MixedDomains { index });
            }
        }
        Ok(Trajectory { densities })
    }

    pub fn n_steps(&self) -> usize {
        self.densities.len() - 1
    }

    pub fn tau(&self) -> T {
        T::one() / T::from_usize(self.n_steps()).unwrap()
    }

    pub fn densities(&self) -> &[GridField<T>] {
        &self.densities
    }

    pub fn density(&self, k: usize) -> &GridField<T> {
        &self.densities[k]
    }
}

/// Discrete action of a trajectory; returns `+inf` when any density violates
/// the capacity bound (the constraint is hard, not penalized).
///
/// `sinkhorn` only matters on two-dimensional domains; a line uses the exact
/// histogram transport.
pub fn discrete_action<T: Scalar>(
    trajectory: &Trajectory<T>,
    running: &GridField<T>,
    terminal: &GridField<T>,
    lambda: T,
    sinkhorn: &SinkhornSettings<T>,
) -> Result<T> {
    let n = trajectory.n_steps();
    let tau = trajectory.tau();
    let cap = T::one() + T::lit(CAP_TOL);
    for rho in trajectory.densities() {
        if rho.max_value() > cap {
            return Ok(T::infinity());
        }
    }
    let solver = EntropicSolver::new(trajectory.density(0).domain());
    let exact_line = trajectory.density(0).domain().dimension() == 1;
    let mut total = T::zero();
    for k in 0..n {
        let (a, b) = (trajectory.density(k), trajectory.density(k + 1));
        let half_w2 = if exact_line {
            solver.quantile_potentials(a, b)?.transport_value
        } else {
            let mut scratch = Default::default();
            solver.potentials(a, b, sinkhorn, &mut scratch)?.transport_value
        };
        total += half_w2 / tau;
    }
    for k in 1..n {
        let rho = trajectory.density(k);
        total += tau * (running.integrate_against(rho)? + lambda * rho.entropy()?);
    }
    let last = trajectory.density(n);
    total += terminal.integrate_against(last)? + lambda * last.entropy()?;
    Ok(total)
}

/// Per-axis triangular mollification with reflecting boundaries.
///
/// `width` is in coordinate units; anything below one cell spacing leaves the
/// field untouched. Nonnegative inputs stay nonnegative (the kernel is a
/// convex combination), and the gradient L2 norm never grows beyond roundoff,
/// so a rough potential can be made Lipschitz-friendly without inflating the
/// regularity budget it is checked against.
pub fn regularize_potential<T: Scalar>(raw: &GridField<T>, width: T) -> GridField<T> {
    let dom = raw.domain().clone();
    let dims = dom.cells_per_axis().to_vec();
    let mut vals = raw.values().to_vec();
    for axis in 0..dom.dimension() {
        let n = dims[axis];
        let radius = (width / dom.spacing(axis)).as_f64().floor() as usize;
        if radius == 0 || n < 2 {
            continue;
        }
        // Triangular weights (r+1-|j|) sum to (r+1)^2 exactly.
        let total = T::from_usize((radius + 1) * (radius + 1)).unwrap();
        let reflect = |mut i: isize| -> usize {
            let n = n as isize;
            loop {
                if i < 0 {
                    i = -1 - i;
                } else if i >= n {
                    i = 2 * n - 1 - i;
                } else {
                    return i as usize;
                }
            }
        };
        let (lines, stride) = match (dom.dimension(), axis) {
            (1, _) => (1, 1),
            (_, 0) => (dims[1], dims[1]),
            _ => (dims[0], 1),
        };
        let mut out = vals.clone();
        for line in 0..lines {
            let base = if dom.dimension() == 1 {
                0
            } else if axis == 0 {
                line
            } else {
                line * dims[1]
            };
            for i in 0..n {
                let mut acc = T::zero();
                for j in -(radius as isize)..=(radius as isize) {
                    let w = T::from_usize(radius + 1 - j.unsigned_abs()).unwrap();
                    acc += w * vals[base + reflect(i as isize + j) * stride];
                }
                out[base + i * stride] = acc / total;
            }
        }
        vals = out;
    }
    GridField::new(&dom, vals, raw.role()).expect("smoothing preserves shape and finiteness")
}

/// Convergence record of one sweep.
#[derive(Debug, Clone, Serialize)]
pub struct SweepRecord<T> {
    /// Action recomputed from scratch after the sweep.
    pub action: T,
    /// Largest L1 slice change during the sweep.
    pub max_change: T,
    /// Largest remaining slice suboptimality certificate.
    pub max_gap: T,
    /// Largest slice fixed-point residual at acceptance.
    pub max_residual: T,
}

#[derive(Debug, Clone)]
pub struct SchemeSolution<T> {
    pub trajectory: Trajectory<T>,
    /// Slice records for times `1..=N`; index `k - 1` holds time `k`. The
    /// last entry is the terminal slice, whose pressure is the terminal jump
    /// density multiplier (not `tau`-scaled).
    pub slices: Vec<SliceSolution<T>>,
    pub action: T,
    pub sweeps: Vec<SweepRecord<T>>,
    /// Whether the sweep loop met its tolerance before `max_sweeps`.
    pub converged: bool,
}

/// Block descent over time slices from the all-`rho0` start.
pub fn minimize_discrete_action<T: Scalar>(inst: &Instance<T>) -> Result<SchemeSolution<T>> {
    if !inst.domain.admits_capped_unit_mass() {
        return Err(SchemeError::CapacityInfeasible { volume: inst.domain.volume().as_f64() });
    }
    let n = inst.n_steps;
    if n < 1 {
        return Err(SchemeError::TooFewSteps { n_steps: n });
    }
    if inst.sweeps.max_sweeps == 0 {
        return Err(SchemeError::BadParameter { what: "max_sweeps", value: 0.0 });
    }
    inst.rho0.validate_density(T::lit(MASS_TOL), T::lit(CAP_TOL), true)?;
    let tau = inst.tau();
    let solver = EntropicSolver::new(&inst.domain);

    let mut densities: Vec<GridField<T>> = vec![inst.rho0.clone(); n + 1];
    let mut slices: Vec<Option<SliceSolution<T>>> = (0..n).map(|_| None).collect();
    let mut scratches: Vec<SliceScratch<T>> = (0..n).map(|_| SliceScratch::default()).collect();
    let mut sweeps: Vec<SweepRecord<T>> = Vec::new();
    let mut converged = false;
    let mut best_action = T::infinity();
    let mut flat_sweeps = 0usize;

    for _sweep in 0..inst.sweeps.max_sweeps {
        let mut max_change = T::zero();
        let mut max_gap = T::zero();
        let mut max_residual = T::zero();
        for k in 1..=n {
            let (head, tail) = densities.split_at_mut(k);
            let prev = &head[k - 1];
            let init = &tail[0];
            let sol = if k < n {
                let next = &tail[1];
                solve_interior_slice(
                    &solver,
                    prev,
                    next,
                    &inst.running,
                    inst.lambda,
                    tau,
                    init,
                    &inst.slice_cfg,
                    &mut scratches[k - 1],
                )?
            } else {
                solve_terminal_slice(
                    &solver,
                    prev,
                    &inst.terminal,
                    inst.lambda,
                    tau,
                    init,
                    &inst.slice_cfg,
                    &mut scratches[k - 1],
                )?
            };
            max_change = max_change.max(sol.rho.l1_distance(&densities[k])?);
            max_gap = max_gap.max(sol.gap);
            max_residual = max_residual.max(sol.fp_residual);
            densities[k] = sol.rho.clone();
            slices[k - 1] = Some(sol);
        }
        let trajectory = Trajectory::new(densities.clone())?;
        let action = discrete_action(
            &trajectory,
            &inst.running,
            &inst.terminal,
            inst.lambda,
            &inst.slice_cfg.sinkhorn,
        )?;
        sweeps.push(SweepRecord { action, max_change, max_gap, max_residual });
        if max_change <= T::lit(inst.sweeps.tol) {
            converged = true;
            break;
        }
        // The slice iterates chatter at the scale their gap tolerance allows,
        // so L1 change can stall above `tol` with the action long settled;
        // three sweeps without improvement over the best action end the loop.
        if action < best_action - T::lit(inst.sweeps.action_tol) * (T::one() + action.abs()) {
            flat_sweeps = 0;
        } else {
            flat_sweeps += 1;
            if flat_sweeps >= 3 {
                converged = true;
                break;
            }
        }
        best_action = best_action.min(action);
    }

    let trajectory = Trajectory::new(densities)?;
    let action = sweeps.last().map(|s| s.action).unwrap_or_else(T::infinity);
    let slices: Vec<SliceSolution<T>> = slices.into_iter().map(|s| s.unwrap()).collect();
    Ok(SchemeSolution { trajectory, slices, action, sweeps, converged })
}
