//! Dual value function: backward conjugation through the jump obstacles.
//!
//! Given the solved pressures, the dual candidate is built backward from the
//! terminal datum by alternating the grid Hopf-Lax operator
//! `(H_tau w)(x) = min_y (|x - y|^2 / (2 tau) + w(y))` with additive jumps.
//! Interior jumps carry `tau (V + p_k)`, the terminal jump `Psi + P_N`.
//! Entropic terms are deliberately left out: including them could only lower
//! the value function, so their omission keeps the dual side an upper
//! envelope whose defect against the action shrinks linearly in `lambda`.
//!
//! Pairing the value function with the initial density and charging each
//! capacity multiplier its Lebesgue integral yields the dual value; at a
//! solved trajectory it matches the action up to the entropy terms (order
//! `lambda`) and the cell-center quadrature of the conjugation (order of the
//! spacing).

use serde::Serialize;

use crate::grid::{GridError, GridField, Role};
use crate::scalar::Scalar;
use crate::scheme::{Instance, SchemeSolution};
use crate::transport::{c_transform, TransportError};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ValueError {
    #[error("need at least one jump level, got none")]
    NoLevels,
    #[error("jump field {index} lives on a different grid")]
    MixedDomains { index: usize },
    #[error("time step must be positive and finite, got {tau}")]
    BadTimeStep { tau: f64 },
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Transport(#[from] TransportError),
}

pub type Result<V, E = ValueError> = std::result::Result<V, E>;

/// Jump obstacles along a trajectory: `running[k - 1]` is the tau-scaled
/// obstacle at interior time `k = 1..N-1`, `terminal` the full datum at `N`.
#[derive(Debug, Clone)]
pub struct Jumps<T> {
    pub running: Vec<GridField<T>>,
    pub terminal: GridField<T>,
}

/// Values `v_k` and pre-jump conjugates `c_k = H_tau(v_{k+1})` for
/// `k = 0..=N`; `v_k = c_k + j_k` with `j_0 = 0` and `c_N = 0`.
#[derive(Debug, Clone)]
pub struct ValueFunction<T> {
    values: Vec<GridField<T>>,
    conjugates: Vec<GridField<T>>,
    tau: T,
}

impl<T: Scalar> ValueFunction<T> {
    pub fn n_steps(&self) -> usize {
        self.values.len() - 1
    }

    pub fn tau(&self) -> T {
        self.tau
    }

    pub fn value(&self, k: usize) -> &GridField<T> {
        &self.values[k]
    }

    pub fn conjugate(&self, k: usize) -> &GridField<T> {
        &self.conjugates[k]
    }

    pub fn values(&self) -> &[GridField<T>] {
        &self.values
    }

    pub fn conjugates(&self) -> &[GridField<T>] {
        &self.conjugates
    }
}

/// Extracts the jump obstacles of a solved instance.
pub fn jumps_from_solution<T: Scalar>(
    inst: &Instance<T>,
    sol: &SchemeSolution<T>,
) -> Result<Jumps<T>> {
    let n = sol.trajectory.n_steps();
    let tau = sol.trajectory.tau();
    let mut running = Vec::with_capacity(n.saturating_sub(1));
    for k in 1..n {
        let s = &sol.slices[k - 1];
        let field = inst.running.add(&s.pressure)?.scale(tau);
        running.push(field.with_role(Role::Generic));
    }
    let s = &sol.slices[n - 1];
    let terminal = inst.terminal.add(&s.pressure)?.with_role(Role::Generic);
    Ok(Jumps { running, terminal })
}

/// Backward recursion `v_N = j_N`, `v_k = H_tau(v_{k+1}) + j_k`.
pub fn build_value_function<T: Scalar>(tau: T, jumps: &Jumps<T>) -> Result<ValueFunction<T>> {
    if !(tau > T::zero()) || !tau.is_finite() {
        return Err(ValueError::BadTimeStep { tau: tau.as_f64() });
    }
    for (index, j) in jumps.running.iter().enumerate() {
        if !j.same_domain(&jumps.terminal) {
            return Err(ValueError::MixedDomains { index });
        }
    }
    let n = jumps.running.len() + 1;
    let domain = jumps.terminal.domain();
    let zeros = GridField::zeros(domain, Role::Generic);
    let mut values = vec![zeros.clone(); n + 1];
    let mut conjugates = vec![zeros; n + 1];
    values[n] = jumps.terminal.clone().with_role(Role::Generic);
    for k in (0..n).rev() {
        let conj = c_transform(&values[k + 1], tau)?;
        values[k] = if k == 0 {
            conj.clone()
        } else {
            conj.add(&jumps.running[k - 1])?
        };
        conjugates[k] = conj;
    }
    Ok(ValueFunction { values, conjugates, tau })
}

/// Dual pairing: `int v_0 rho_0` minus the capacity charges `tau int p_k` at
/// interior times and `int P_N` at the end.
pub fn dual_value<T: Scalar>(
    vf: &ValueFunction<T>,
    rho0: &GridField<T>,
    interior_pressures: &[GridField<T>],
    terminal_pressure: &GridField<T>,
) -> Result<T> {
    let mut d = vf.values[0].integrate_against(rho0)?;
    for p in interior_pressures {
        d -= vf.tau * p.integrate();
    }
    d -= terminal_pressure.integrate();
    Ok(d)
}

/// One-sided Hamilton-Jacobi defect `-d_t v + |grad v|^2 / 2` over the
/// transport legs; positive residuals are the violation and `worst` is the
/// signed maximum.
#[derive(Debug, Clone, Serialize)]
pub struct HjReport<T> {
    pub worst: T,
    pub samples: usize,
}

/// Samples the defect at `time_samples` intermediate times inside each leg,
/// probing at most `max_cells` interior cells per micro-interval.
///
/// Inside leg `k` the value at time `k tau - s` is the inf-convolution of the
/// datum `v_k`, so every probed field is semiconcave; the jump data
/// themselves (`s = 0`) are never differenced, since kinks introduced by a
/// jump live at the jump time, not between jumps. Time derivatives come from
/// adjacent sample pairs, gradients are central in space and averaged
/// midpoint-in-time.
pub fn hj_residual<T: Scalar>(
    vf: &ValueFunction<T>,
    time_samples: usize,
    max_cells: usize,
) -> Result<HjReport<T>> {
    let n = vf.n_steps();
    let dom = vf.values[0].domain().clone();
    let mut interior = Vec::new();
    'cells: for idx in 0..dom.len() {
        let mi = dom.multi_index(idx);
        for a in 0..dom.dimension() {
            if mi[a] == 0 || mi[a] + 1 == dom.cells_per_axis()[a] {
                continue 'cells;
            }
        }
        interior.push(idx);
    }
    if interior.is_empty() || time_samples == 0 || max_cells == 0 {
        return Ok(HjReport { worst: T::zero(), samples: 0 });
    }
    let stride = (interior.len() / max_cells).max(1);
    let mut worst = T::neg_infinity();
    let mut samples = 0usize;
    for k in 1..=n {
        let datum = vf.value(k);
        // Backward-time offsets s_j = tau (M + 1 - j) / (M + 1), j = 0..=M:
        // from the leg's older endpoint down to tau / (M + 1), excluding 0.
        let mut prev: Option<(T, GridField<T>, Vec<GridField<T>>)> = None;
        for j in 0..=time_samples {
            let s = vf.tau * T::from_usize(time_samples + 1 - j).unwrap()
                / T::from_usize(time_samples + 1).unwrap();
            let phi = c_transform(datum, s)?;
            let grad = phi.gradient()?;
            if let Some((s_prev, phi_prev, grad_prev)) = &prev {
                let dt = *s_prev - s;
                for (pos, &idx) in interior.iter().enumerate() {
                    if pos % stride != 0 {
                        continue;
                    }
                    let fd = (phi_prev.values()[idx] - phi.values()[idx]) / dt;
                    let mut speed2 = T::zero();
                    for a in 0..grad.len() {
                        let g = (grad_prev[a].values()[idx] + grad[a].values()[idx])
                            * T::lit(0.5);
                        speed2 += g * g;
                    }
                    worst = worst.max(fd + speed2 * T::lit(0.5));
                    samples += 1;
                }
            }
            prev = Some((s, phi, grad));
        }
    }
    Ok(HjReport { worst, samples })
}
