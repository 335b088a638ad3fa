//! Machine-checkable reports: regularity estimates, complementarity,
//! duality, and refinement studies.
//!
//! Every verdict is a pure function of the numbers and thresholds stored next
//! to it, so a consumer can re-derive the pass/fail column from a report file
//! alone and flag any tampering with either side.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{GridError, GridField};
use crate::scalar::Scalar;
use crate::scheme::{
    minimize_discrete_action, Instance, SchemeError, SchemeSolution, SolverConfig,
};
use crate::value::{
    build_value_function, dual_value, hj_residual, jumps_from_solution, ValueError,
};

#[derive(Debug, Error)]
pub enum DiagnosticsError {
    #[error("pressure dips to {value} at cell {index}, below the -1e-12 floor")]
    InvalidPressure { index: usize, value: f64 },
    #[error("exponent {value} must be finite and at least 1")]
    BadExponent { value: f64 },
    #[error("study needs at least one point")]
    EmptyStudy,
    #[error("study points must be strictly increasing")]
    UnorderedStudy,
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Scheme(#[from] SchemeError),
    #[error(transparent)]
    Value(#[from] ValueError),
}

pub type Result<V, E = DiagnosticsError> = std::result::Result<V, E>;

/// `integrate(grad(p^m) . grad(p + w))` for each exponent `m >= 1`.
///
/// `p^m` is `exp(m ln p)` on `{p > 0}` and zero elsewhere, so fractional
/// exponents and vacuum cells are both well defined. Near-optimal pressures
/// make this quantity nonpositive up to discretization bias; the caller
/// compares it against a small multiple of `|grad w|^2`.
pub fn fundamental_inequality<T: Scalar>(
    p: &GridField<T>,
    w: &GridField<T>,
    exponents: &[T],
) -> Result<Vec<T>> {
    for (index, &v) in p.values().iter().enumerate() {
        if !(v >= T::lit(-1e-12)) || !v.is_finite() {
            return Err(DiagnosticsError::InvalidPressure { index, value: v.as_f64() });
        }
    }
    for &m in exponents {
        if !(m >= T::one()) || !m.is_finite() {
            return Err(DiagnosticsError::BadExponent { value: m.as_f64() });
        }
    }
    let drive = p.add(w)?;
    let g_drive = drive.gradient()?;
    let mut out = Vec::with_capacity(exponents.len());
    for &m in exponents {
        let pm = p.map(|v| if v > T::zero() { (m * v.ln()).exp() } else { T::zero() });
        let g = pm.gradient()?;
        let mut total = T::zero();
        for a in 0..g.len() {
            total += g[a].integrate_against(&g_drive[a])?;
        }
        out.push(total);
    }
    Ok(out)
}

/// `max_i p_i (1 - rho_i)`: zero in exact arithmetic because the level solve
/// only prices cells it caps.
pub fn complementarity_violation<T: Scalar>(
    p: &GridField<T>,
    rho: &GridField<T>,
) -> Result<T, GridError> {
    let prod = p.zip_with(rho, |pi, ri| pi * (T::one() - ri))?;
    Ok(prod.max_value())
}

/// How a check compares its value to its threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CheckOp {
    AtMost,
    Above,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Pass,
    Fail,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CheckRecord {
    pub name: String,
    pub value: f64,
    pub threshold: f64,
    pub op: CheckOp,
    pub verdict: Verdict,
}

impl CheckRecord {
    pub fn evaluate(name: &str, value: f64, threshold: f64, op: CheckOp) -> Self {
        let verdict = if Self::holds(value, threshold, op) { Verdict::Pass } else { Verdict::Fail };
        CheckRecord { name: name.to_string(), value, threshold, op, verdict }
    }

    pub fn holds(value: f64, threshold: f64, op: CheckOp) -> bool {
        match op {
            CheckOp::AtMost => value <= threshold,
            CheckOp::Above => value > threshold,
        }
    }

    /// Recomputes the verdict from the stored numbers.
    pub fn recomputed(&self) -> Verdict {
        if Self::holds(self.value, self.threshold, self.op) {
            Verdict::Pass
        } else {
            Verdict::Fail
        }
    }
}

/// Tolerances for the named checks; every field has a serde default so a
/// config may override just one.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CheckThresholds {
    /// Slack factor for the fundamental inequality, times `|grad w|_2^2`.
    #[serde(default = "d_est_tol")]
    pub est_tol: f64,
    /// Gradient bound factor: `|grad p|_2 <= lip_factor |grad w|_2`.
    #[serde(default = "d_lip_factor")]
    pub lip_factor: f64,
    /// Ceiling for `max p (1 - rho)`.
    #[serde(default = "d_comp_tol")]
    pub comp_tol: f64,
    /// Ceiling for the one-sided Hamilton-Jacobi residual.
    #[serde(default = "d_hj_tol")]
    pub hj_tol: f64,
    /// Duality: `|gap| <= gap_factor (1 + |action|)`.
    #[serde(default = "d_gap_factor")]
    pub gap_factor: f64,
    /// Intermediate times probed per transport leg by the residual check.
    #[serde(default = "d_hj_time_samples")]
    pub hj_time_samples: usize,
    /// Interior cells probed per micro-interval by the residual check.
    #[serde(default = "d_hj_cell_samples")]
    pub hj_cell_samples: usize,
    /// Exponents for the fundamental inequality.
    #[serde(default = "d_exponents")]
    pub exponents: Vec<f64>,
}

fn d_est_tol() -> f64 {
    0.05
}
fn d_lip_factor() -> f64 {
    1.05
}
fn d_comp_tol() -> f64 {
    1e-3
}
fn d_hj_tol() -> f64 {
    0.5
}
fn d_gap_factor() -> f64 {
    0.05
}
fn d_hj_time_samples() -> usize {
    4
}
fn d_hj_cell_samples() -> usize {
    64
}
fn d_exponents() -> Vec<f64> {
    vec![1.0, 2.0, 4.0]
}

impl Default for CheckThresholds {
    fn default() -> Self {
        CheckThresholds {
            est_tol: d_est_tol(),
            lip_factor: d_lip_factor(),
            comp_tol: d_comp_tol(),
            hj_tol: d_hj_tol(),
            gap_factor: d_gap_factor(),
            hj_time_samples: d_hj_time_samples(),
            hj_cell_samples: d_hj_cell_samples(),
            exponents: d_exponents(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct FundamentalRecord {
    pub exponent: f64,
    pub value: f64,
}

/// Numbers backing the verdicts for one solved slice.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SliceRecord {
    pub k: usize,
    pub terminal: bool,
    pub grad_pressure_l2: f64,
    pub grad_potential_l2: f64,
    pub max_pressure: f64,
    pub min_density: f64,
    pub fundamental: Vec<FundamentalRecord>,
    pub complementarity: f64,
    /// `int p (1 - rho)`, the integral twin of the max check.
    pub orthogonality: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct GlobalRecord {
    pub action: f64,
    pub dual_value: f64,
    /// Signed: dual minus action.
    pub gap: f64,
    pub hj_worst: f64,
    pub hj_samples: usize,
    /// Total mass of the tau-scaled interior jump obstacles.
    pub interior_jump_mass: f64,
    pub terminal_pressure_mass: f64,
    pub converged: bool,
    pub sweeps: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DiagnosticsReport {
    pub version: String,
    pub slices: Vec<SliceRecord>,
    pub global: GlobalRecord,
    pub checks: Vec<CheckRecord>,
}

pub const REPORT_VERSION: &str = "1";

impl DiagnosticsReport {
    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.verdict == Verdict::Pass)
    }
}

/// Builds the full report for a solved instance.
pub fn evaluate_solution<T: Scalar>(
    inst: &Instance<T>,
    sol: &SchemeSolution<T>,
    thr: &CheckThresholds,
) -> Result<DiagnosticsReport> {
    let n = sol.trajectory.n_steps();
    let exps: Vec<T> = thr.exponents.iter().map(|&m| T::lit(m)).collect();
    let mut slices = Vec::with_capacity(n);
    for k in 1..=n {
        let s = &sol.slices[k - 1];
        let terminal = k == n;
        let w = if terminal { &inst.terminal } else { &inst.running };
        let rho = sol.trajectory.density(k);
        let fi = fundamental_inequality(&s.pressure, w, &exps)?;
        let fundamental = thr
            .exponents
            .iter()
            .zip(&fi)
            .map(|(&exponent, &value)| FundamentalRecord { exponent, value: value.as_f64() })
            .collect();
        let orthogonality = s.pressure.integrate() - s.pressure.integrate_against(rho)?;
        slices.push(SliceRecord {
            k,
            terminal,
            grad_pressure_l2: s.pressure.l2_norm_of_gradient()?.as_f64(),
            grad_potential_l2: w.l2_norm_of_gradient()?.as_f64(),
            max_pressure: s.pressure.max_value().as_f64(),
            min_density: rho.min_value().as_f64(),
            fundamental,
            complementarity: complementarity_violation(&s.pressure, rho)?.as_f64(),
            orthogonality: orthogonality.as_f64(),
        });
    }

    let jumps = jumps_from_solution(inst, sol)?;
    let vf = build_value_function(sol.trajectory.tau(), &jumps)?;
    let interior: Vec<GridField<T>> =
        sol.slices[..n - 1].iter().map(|s| s.pressure.clone()).collect();
    let dual = dual_value(&vf, &inst.rho0, &interior, &sol.slices[n - 1].pressure)?;
    let hj = hj_residual(&vf, thr.hj_time_samples, thr.hj_cell_samples)?;
    let interior_jump_mass: T =
        jumps.running.iter().map(|j| j.integrate()).fold(T::zero(), |a, b| a + b);

    let action = sol.action.as_f64();
    let gap = dual.as_f64() - action;
    let global = GlobalRecord {
        action,
        dual_value: dual.as_f64(),
        gap,
        hj_worst: hj.worst.as_f64(),
        hj_samples: hj.samples,
        interior_jump_mass: interior_jump_mass.as_f64(),
        terminal_pressure_mass: sol.slices[n - 1].pressure.integrate().as_f64(),
        converged: sol.converged,
        sweeps: sol.sweeps.len(),
    };

    let fi_excess = slices
        .iter()
        .flat_map(|s| {
            let bound = thr.est_tol * s.grad_potential_l2 * s.grad_potential_l2;
            s.fundamental.iter().map(move |f| f.value - bound)
        })
        .fold(f64::NEG_INFINITY, f64::max);
    let grad_excess = slices
        .iter()
        .map(|s| s.grad_pressure_l2 - thr.lip_factor * s.grad_potential_l2)
        .fold(f64::NEG_INFINITY, f64::max);
    let comp = slices.iter().map(|s| s.complementarity).fold(f64::NEG_INFINITY, f64::max);
    let min_rho = slices.iter().map(|s| s.min_density).fold(f64::INFINITY, f64::min);

    let checks = vec![
        CheckRecord::evaluate("fundamental-inequality-excess", fi_excess, 0.0, CheckOp::AtMost),
        CheckRecord::evaluate("gradient-bound-excess", grad_excess, 0.0, CheckOp::AtMost),
        CheckRecord::evaluate("complementarity", comp, thr.comp_tol, CheckOp::AtMost),
        CheckRecord::evaluate("density-positivity", min_rho, 0.0, CheckOp::Above),
        CheckRecord::evaluate(
            "duality-gap",
            gap.abs(),
            thr.gap_factor * (1.0 + action.abs()),
            CheckOp::AtMost,
        ),
        CheckRecord::evaluate("hj-residual", global.hj_worst, thr.hj_tol, CheckOp::AtMost),
    ];

    Ok(DiagnosticsReport { version: REPORT_VERSION.to_string(), slices, global, checks })
}

/// Summary numbers for the duality side alone.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DualityReport {
    pub action_value: f64,
    pub dual_value: f64,
    /// Signed: dual minus action.
    pub gap: f64,
    pub hj_worst: f64,
    pub hj_samples: usize,
}

pub fn duality_report<T: Scalar>(
    inst: &Instance<T>,
    sol: &SchemeSolution<T>,
    hj_time_samples: usize,
    hj_cell_samples: usize,
) -> Result<DualityReport> {
    let n = sol.trajectory.n_steps();
    let jumps = jumps_from_solution(inst, sol)?;
    let vf = build_value_function(sol.trajectory.tau(), &jumps)?;
    let interior: Vec<GridField<T>> =
        sol.slices[..n - 1].iter().map(|s| s.pressure.clone()).collect();
    let dual = dual_value(&vf, &inst.rho0, &interior, &sol.slices[n - 1].pressure)?;
    let hj = hj_residual(&vf, hj_time_samples, hj_cell_samples)?;
    Ok(DualityReport {
        action_value: sol.action.as_f64(),
        dual_value: dual.as_f64(),
        gap: dual.as_f64() - sol.action.as_f64(),
        hj_worst: hj.worst.as_f64(),
        hj_samples: hj.samples,
    })
}

/// Runs `f` over the items on up to `workers` scoped threads, preserving
/// input order in the output.
fn run_over<C: Sync, R: Send>(
    items: &[C],
    workers: usize,
    f: impl Fn(&C) -> R + Sync,
) -> Vec<R> {
    let next = AtomicUsize::new(0);
    let results: Vec<Mutex<Option<R>>> = items.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..workers.clamp(1, items.len().max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                *results[i].lock().unwrap() = Some(f(&items[i]));
            });
        }
    });
    results
        .into_iter()
        .map(|m| m.into_inner().unwrap().expect("worker filled every slot"))
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ResolutionRow {
    pub cells: usize,
    pub action: f64,
    pub max_terminal_pressure: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ResolutionStudy {
    pub rows: Vec<ResolutionRow>,
    /// Relative spread of the terminal pressure maximum across the two
    /// finest grids; zero when both vanish.
    pub spread: f64,
    pub pass: bool,
}

/// Solves the same instance at several grid resolutions and checks that the
/// terminal pressure maximum is stable across the finest two, the discrete
/// stand-in for a capacity multiplier bounded independently of the mesh.
pub fn linfty_bound_study<T: Scalar>(
    config: &SolverConfig,
    resolutions: &[usize],
    workers: usize,
) -> Result<ResolutionStudy> {
    if resolutions.is_empty() {
        return Err(DiagnosticsError::EmptyStudy);
    }
    if resolutions.windows(2).any(|w| w[1] <= w[0]) {
        return Err(DiagnosticsError::UnorderedStudy);
    }
    let configs: Vec<SolverConfig> = resolutions
        .iter()
        .map(|&r| {
            let mut c = config.clone();
            c.domain.cells = vec![r; c.domain.sides.len()];
            c
        })
        .collect();
    let runs = run_over(&configs, workers, |c| -> Result<ResolutionRow> {
        let inst: Instance<T> = c.instantiate()?;
        let sol = minimize_discrete_action(&inst)?;
        let n = sol.trajectory.n_steps();
        Ok(ResolutionRow {
            cells: c.domain.cells[0],
            action: sol.action.as_f64(),
            max_terminal_pressure: sol.slices[n - 1].pressure.max_value().as_f64(),
            converged: sol.converged,
        })
    });
    let mut rows = Vec::with_capacity(runs.len());
    for run in runs {
        rows.push(run?);
    }
    let last = &rows[rows.len() - 1];
    let spread = if rows.len() < 2 {
        0.0
    } else {
        let prev = &rows[rows.len() - 2];
        let denom = last.max_terminal_pressure.abs().max(prev.max_terminal_pressure.abs());
        if denom == 0.0 {
            0.0
        } else {
            (last.max_terminal_pressure - prev.max_terminal_pressure).abs() / denom
        }
    };
    let pass = spread <= 0.15;
    Ok(ResolutionStudy { rows, spread, pass })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum LambdaMode {
    /// Use the configured entropic weight at every N.
    #[default]
    Fixed,
    /// Scale it as `lambda / N`, letting the entropy vanish with the step.
    OverN,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct NRow {
    pub n_steps: usize,
    pub lambda: f64,
    pub action: f64,
    pub gap: f64,
    pub interior_jump_mass: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct NStudy {
    pub rows: Vec<NRow>,
    pub pass: bool,
}

/// Solves at each step count and checks that successive action differences
/// shrink in magnitude, the observable shadow of the discrete values
/// converging as the time grid refines.
pub fn n_convergence_study<T: Scalar>(
    config: &SolverConfig,
    n_values: &[usize],
    mode: LambdaMode,
    workers: usize,
) -> Result<NStudy> {
    if n_values.is_empty() {
        return Err(DiagnosticsError::EmptyStudy);
    }
    if n_values.windows(2).any(|w| w[1] <= w[0]) {
        return Err(DiagnosticsError::UnorderedStudy);
    }
    let configs: Vec<SolverConfig> = n_values
        .iter()
        .map(|&n| {
            let mut c = config.clone();
            c.n_steps = n;
            if mode == LambdaMode::OverN {
                c.lambda = config.lambda / n as f64;
            }
            c
        })
        .collect();
    let runs = run_over(&configs, workers, |c| -> Result<NRow> {
        let inst: Instance<T> = c.instantiate()?;
        let sol = minimize_discrete_action(&inst)?;
        let duality = duality_report(&inst, &sol, 0, 0)?;
        let jumps = jumps_from_solution(&inst, &sol)?;
        let mass: T = jumps.running.iter().map(|j| j.integrate()).fold(T::zero(), |a, b| a + b);
        Ok(NRow {
            n_steps: c.n_steps,
            lambda: c.lambda,
            action: sol.action.as_f64(),
            gap: duality.gap,
            interior_jump_mass: mass.as_f64(),
            converged: sol.converged,
        })
    });
    let mut rows = Vec::with_capacity(runs.len());
    for run in runs {
        rows.push(run?);
    }
    let diffs: Vec<f64> = rows.windows(2).map(|w| (w[1].action - w[0].action).abs()).collect();
    let pass = diffs.windows(2).all(|d| d[1] <= d[0] + 1e-12);
    Ok(NStudy { rows, pass })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{Domain, Role};
    use crate::scheme::{DomainSpec, InitialDensity, PotentialSpec, SweepSettings};
    use std::sync::Arc;

    fn null_config(cells: usize, n_steps: usize) -> SolverConfig {
        SolverConfig {
            domain: DomainSpec { sides: vec![2.0], cells: vec![cells] },
            n_steps,
            lambda: 0.01,
            running_potential: PotentialSpec::Zero,
            terminal_potential: PotentialSpec::Zero,
            initial_density: InitialDensity::Uniform,
            epsilon: None,
            sweeps: SweepSettings::default(),
        }
    }

    fn rush_config(cells: usize, n_steps: usize) -> SolverConfig {
        let mut cfg = null_config(cells, n_steps);
        cfg.terminal_potential = PotentialSpec::Affine { slope: vec![5.0], offset: 0.0 };
        cfg
    }

    #[test]
    fn fundamental_inequality_trivial_cases() {
        let dom: Arc<Domain<f64>> = Domain::line(2.0, 32).unwrap();
        let w = GridField::from_fn(&dom, Role::Potential, |x| (x[0] - 0.3).powi(2));
        let zero = GridField::zeros(&dom, Role::Pressure);
        let exps = [1.0, 2.0, 4.0];
        for v in fundamental_inequality(&zero, &w, &exps).unwrap() {
            assert_eq!(v, 0.0);
        }
        let constant = GridField::constant(&dom, 0.8, Role::Pressure);
        for v in fundamental_inequality(&constant, &w, &exps).unwrap() {
            assert_eq!(v, 0.0);
        }
        let mut bad = zero.values().to_vec();
        bad[5] = -1e-6;
        let bad = GridField::new(&dom, bad, Role::Pressure).unwrap();
        assert!(matches!(
            fundamental_inequality(&bad, &w, &exps),
            Err(DiagnosticsError::InvalidPressure { index: 5, .. })
        ));
        assert!(matches!(
            fundamental_inequality(&zero, &w, &[0.5]),
            Err(DiagnosticsError::BadExponent { .. })
        ));
    }

    #[test]
    fn unit_exponent_matches_direct_bilinear_form() {
        let dom: Arc<Domain<f64>> = Domain::line(2.0, 48).unwrap();
        let p = GridField::from_fn(&dom, Role::Pressure, |x| {
            (0.4 - (x[0] - 1.2).powi(2)).max(0.0)
        });
        let w = GridField::from_fn(&dom, Role::Potential, |x| (2.1 * x[0]).sin() * 0.7);
        let generic = fundamental_inequality(&p, &w, &[1.0]).unwrap()[0];
        let gp = p.gradient().unwrap();
        let gd = p.add(&w).unwrap().gradient().unwrap();
        let direct = gp[0].integrate_against(&gd[0]).unwrap();
        let rel = (generic - direct).abs() / direct.abs().max(1e-30);
        assert!(rel <= 1e-10, "generic {generic} vs direct {direct}");
    }

    #[test]
    fn null_instance_report_passes_everything() {
        let inst: Instance<f64> = null_config(16, 4).instantiate().unwrap();
        let sol = minimize_discrete_action(&inst).unwrap();
        let report = evaluate_solution(&inst, &sol, &CheckThresholds::default()).unwrap();
        assert_eq!(report.version, "1");
        assert!(report.all_pass(), "failed checks: {:?}", report.checks);
        for s in &report.slices {
            assert_eq!(s.max_pressure, 0.0);
            assert_eq!(s.complementarity, 0.0);
            for f in &s.fundamental {
                assert_eq!(f.value, 0.0);
            }
        }
        assert_eq!(report.global.dual_value, 0.0);
        let closed_form = 0.01 * 2.0f64.ln() * 1.75;
        assert!((report.global.gap - closed_form).abs() <= 1e-9);
    }

    #[test]
    fn rush_instance_report_passes_everything() {
        let inst: Instance<f64> = rush_config(64, 8).instantiate().unwrap();
        let sol = minimize_discrete_action(&inst).unwrap();
        assert!(sol.converged);
        let report = evaluate_solution(&inst, &sol, &CheckThresholds::default()).unwrap();
        assert!(report.all_pass(), "failed checks: {:?}", report.checks);
        // Interior slices never price the constraint on this instance; only
        // the terminal one does, over a left block.
        for s in &report.slices {
            if s.terminal {
                assert!(s.max_pressure > 0.1, "terminal pressure too small");
            } else {
                assert_eq!(s.max_pressure, 0.0, "interior slice {} priced", s.k);
            }
        }
        assert!(report.global.terminal_pressure_mass > 0.0);
    }

    #[test]
    fn verdicts_recompute_from_stored_numbers() {
        let inst: Instance<f64> = rush_config(32, 4).instantiate().unwrap();
        let sol = minimize_discrete_action(&inst).unwrap();
        let report = evaluate_solution(&inst, &sol, &CheckThresholds::default()).unwrap();
        let text = serde_json::to_string(&report).unwrap();
        let back: DiagnosticsReport = serde_json::from_str(&text).unwrap();
        assert_eq!(report, back);
        for c in &back.checks {
            assert_eq!(c.verdict, c.recomputed(), "verdict drifted for {}", c.name);
        }
        // A tampered threshold flips the recomputation, not the stored column.
        let mut tampered = back.clone();
        let hj = tampered.checks.iter_mut().find(|c| c.name == "duality-gap").unwrap();
        hj.threshold = -1.0;
        assert_ne!(hj.verdict, hj.recomputed());
    }

    #[test]
    fn resolution_study_is_flat_for_null_and_stable_for_rush() {
        let null = linfty_bound_study::<f64>(&null_config(16, 4), &[16, 32], 2).unwrap();
        assert!(null.pass);
        assert_eq!(null.spread, 0.0);
        for row in &null.rows {
            assert_eq!(row.max_terminal_pressure, 0.0);
        }

        let rush = linfty_bound_study::<f64>(&rush_config(64, 8), &[32, 64], 2).unwrap();
        assert!(rush.pass, "spread {} rows {:?}", rush.spread, rush.rows);
        assert!(rush.rows.iter().all(|r| r.converged));
        assert!(rush.rows[1].max_terminal_pressure > 0.1);

        assert!(matches!(
            linfty_bound_study::<f64>(&null_config(16, 4), &[], 1),
            Err(DiagnosticsError::EmptyStudy)
        ));
        assert!(matches!(
            linfty_bound_study::<f64>(&null_config(16, 4), &[32, 32], 1),
            Err(DiagnosticsError::UnorderedStudy)
        ));
    }

    #[test]
    fn n_study_matches_null_closed_form_and_shrinks_differences() {
        let study = n_convergence_study::<f64>(&null_config(16, 4), &[2, 4, 8], LambdaMode::Fixed, 2)
            .unwrap();
        assert!(study.pass);
        for row in &study.rows {
            let expected = 0.01 * 0.5f64.ln() * (2.0 - 1.0 / row.n_steps as f64);
            assert!(
                (row.action - expected).abs() <= 1e-9,
                "N={} action {} vs {}",
                row.n_steps,
                row.action,
                expected
            );
        }

        // Vanishing entropic weight drives the action to zero monotonically.
        let decay = n_convergence_study::<f64>(&null_config(16, 4), &[2, 4, 8], LambdaMode::OverN, 1)
            .unwrap();
        assert!(decay.pass);
        for pair in decay.rows.windows(2) {
            assert!(pair[1].action > pair[0].action);
            assert!(pair[1].action < 0.0);
        }

        let single =
            n_convergence_study::<f64>(&null_config(16, 4), &[4], LambdaMode::Fixed, 1).unwrap();
        assert!(single.pass);
    }

    #[test]
    fn studies_are_deterministic_across_worker_counts() {
        let a = n_convergence_study::<f64>(&rush_config(32, 4), &[2, 4], LambdaMode::Fixed, 1)
            .unwrap();
        let b = n_convergence_study::<f64>(&rush_config(32, 4), &[2, 4], LambdaMode::Fixed, 3)
            .unwrap();
        assert_eq!(a, b);
    }
}
