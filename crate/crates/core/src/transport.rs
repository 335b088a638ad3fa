//! Optimal transport between grid densities with quadratic cost `|x-y|^2/2`.
//!
//! Four routes into the same object, used to cross-check each other:
//!
//! 1. [`EntropicSolver::line_potentials`]: exact potentials and value on
//!    one-dimensional domains via the monotone coupling. Linear time, no
//!    iteration, no regularization bias; this is the route the slice solver
//!    takes whenever the domain is a line.
//! 2. [`sinkhorn_potentials`]: log-domain Sinkhorn with epsilon scaling, for
//!    domains of any dimension. The returned potentials and value are
//!    *debiased* by the self-transport potentials (`phi = f_{ab} - f_{aa}`),
//!    so the value is the Sinkhorn divergence: it vanishes exactly for
//!    identical marginals and converges to `W_2^2/2` with a much smaller
//!    entropic bias than the raw dual. The pair satisfies the duality
//!    identity `integral(phi rho) + integral(psi nu) = transport_value` by
//!    construction.
//! 3. [`exact_ot_oracle`]: an exact min-cost-flow solve (successive shortest
//!    paths with node potentials) for small instances, returning the optimal
//!    plan and `W_2^2/2`.
//! 4. [`c_transform`]: the exact inf-convolution
//!    `x -> min_y (|x-y|^2/(2 s) + g(y))` over grid nodes, computed per axis
//!    with the lower-envelope-of-parabolas algorithm in linear time.
//!
//! Potentials are normalized so `phi` has Lebesgue mean zero; the additive
//! constant moves into `psi`.

use std::sync::Arc;

use thiserror::Error;

use crate::grid::{Domain, GridField, GridError, Role};
use crate::scalar::Scalar;

pub type Result<T, E = TransportError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum TransportError {
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("density must be strictly positive for the entropic solver; cell {index} is {value}")]
    NonPositiveDensity { index: usize, value: f64 },
    #[error("sinkhorn did not converge in {iterations} iterations (marginal violation {violation:.3e})")]
    NonConvergence { iterations: usize, violation: f64 },
    #[error("epsilon schedule requires start >= end > 0 and steps >= 1 (got start={start}, end={end}, steps={steps})")]
    BadSchedule { start: f64, end: f64, steps: usize },
    #[error("time scale must be positive and finite, got {0}")]
    BadTimeScale(f64),
    #[error("exact oracle limited to 64 cells, instance has {cells}")]
    OracleTooLarge { cells: usize },
    #[error("exact line potentials require a one-dimensional domain, got dimension {dimension}")]
    UnsupportedDimension { dimension: usize },
    #[error("source and target masses differ by {gap:.3e}, beyond tolerance")]
    MassMismatch { gap: f64 },
    #[error("min-cost-flow failed to terminate; instance is numerically degenerate")]
    FlowStalled,
}

// ---------------------------------------------------------------------------
// Epsilon schedule
// ---------------------------------------------------------------------------

/// Geometric schedule from `start` down to `end`, inclusive on both ends.
pub fn epsilon_scaling_schedule<T: Scalar>(start: T, end: T, steps: usize) -> Result<Vec<T>> {
    let bad = || TransportError::BadSchedule { start: start.as_f64(), end: end.as_f64(), steps };
    if !(end > T::zero()) || !(start >= end) || steps == 0 || !start.is_finite() {
        return Err(bad());
    }
    if steps == 1 {
        if start == end {
            return Ok(vec![start]);
        }
        return Err(bad());
    }
    let n = T::from_usize(steps - 1).unwrap();
    let (ls, le) = (start.ln(), end.ln());
    let mut out = Vec::with_capacity(steps);
    for k in 0..steps {
        if k == 0 {
            out.push(start);
        } else if k == steps - 1 {
            out.push(end);
        } else {
            let t = T::from_usize(k).unwrap() / n;
            out.push((ls + (le - ls) * t).exp());
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Exact inf-convolution (c-transform)
// ---------------------------------------------------------------------------

/// Lower envelope of parabolas along one line: `out[q] = min_p (q-p)^2 + f[p]`
/// in integer coordinates. Exact and linear-time.
fn envelope_line<T: Scalar>(f: &[T], out: &mut [T]) {
    let n = f.len();
    debug_assert_eq!(out.len(), n);
    if n == 1 {
        out[0] = f[0];
        return;
    }
    // v: index of the parabola owning each envelope segment; z: segment bounds.
    let mut v = vec![0usize; n];
    let mut z = vec![T::zero(); n + 1];
    let mut k = 0usize;
    z[0] = T::neg_infinity();
    z[1] = T::infinity();
    let sq = |p: usize| {
        let t = T::from_usize(p).unwrap();
        t * t
    };
    for q in 1..n {
        let mut s;
        loop {
            let p = v[k];
            s = ((f[q] + sq(q)) - (f[p] + sq(p)))
                / (T::lit(2.0) * (T::from_usize(q).unwrap() - T::from_usize(p).unwrap()));
            if s <= z[k] {
                if k == 0 {
                    // q's parabola dominates everywhere so far.
                    s = T::neg_infinity();
                    break;
                }
                k -= 1;
            } else {
                break;
            }
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = T::infinity();
    }
    let mut k = 0usize;
    for q in 0..n {
        let qf = T::from_usize(q).unwrap();
        while z[k + 1] < qf {
            k += 1;
        }
        let p = v[k];
        let d = qf - T::from_usize(p).unwrap();
        out[q] = d * d + f[p];
    }
}

/// `x -> min_y (|x-y|^2 / (2 time_scale) + g(y))`, minimized over grid nodes.
///
/// Separable in the axes, so each axis is one envelope pass; the result is
/// exact (not a discretization of the continuum transform).
pub fn c_transform<T: Scalar>(g: &GridField<T>, time_scale: T) -> Result<GridField<T>> {
    if !(time_scale > T::zero()) || !time_scale.is_finite() {
        return Err(TransportError::BadTimeScale(time_scale.as_f64()));
    }
    g.assert_finite().map_err(TransportError::Grid)?;
    let dom = g.domain();
    let d = dom.dimension();
    let mut vals = g.values().to_vec();
    for axis in 0..d {
        let h = dom.spacing(axis);
        // (x_q - x_p)^2/(2s) = w (q-p)^2 with w = h^2/(2s).
        let w = h * h / (time_scale + time_scale);
        let n_axis = dom.cells_per_axis()[axis];
        let lines = vals.len() / n_axis;
        let mut fin = vec![T::zero(); n_axis];
        let mut fout = vec![T::zero(); n_axis];
        for line in 0..lines {
            // Gather the line (contiguous for the innermost axis, strided otherwise).
            let index_of = |j: usize| -> usize {
                match d {
                    1 => j,
                    2 => {
                        if axis == 1 {
                            line * n_axis + j
                        } else {
                            let n1 = dom.cells_per_axis()[1];
                            j * n1 + line
                        }
                    }
                    _ => unreachable!(),
                }
            };
            for j in 0..n_axis {
                fin[j] = vals[index_of(j)] / w;
            }
            envelope_line(&fin, &mut fout);
            for j in 0..n_axis {
                vals[index_of(j)] = fout[j] * w;
            }
        }
    }
    Ok(GridField::new(g.domain(), vals, g.role()).map_err(TransportError::Grid)?)
}

// ---------------------------------------------------------------------------
// Entropic solver
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct SinkhornSettings<T> {
    /// Final (target) regularization strength.
    pub epsilon: T,
    /// Cold-start scaling begins here; `None` means `max(0.1 diam^2, epsilon)`.
    pub epsilon_start: Option<T>,
    /// L1 marginal violation at which an epsilon stage counts as converged.
    pub marginal_tol: T,
    /// Violation below which a stalled final stage is still accepted. Some
    /// epsilon values sit in a ties regime where the violation decays like
    /// 1/iteration; the achieved violation is reported either way.
    pub plateau_tol: T,
    /// Iteration cap per epsilon stage.
    pub max_iter: usize,
}

impl<T: Scalar> SinkhornSettings<T> {
    pub fn new(epsilon: T) -> Self {
        SinkhornSettings {
            epsilon,
            epsilon_start: None,
            marginal_tol: T::lit(1e-8),
            plateau_tol: T::lit(1e-4),
            max_iter: 60_000,
        }
    }
}

/// Kantorovich potential pair from the entropic solver.
///
/// `transport_value` is the debiased dual value, an approximation of
/// `W_2^2/2` that is exactly zero for identical marginals.
#[derive(Debug, Clone)]
pub struct PotentialPair<T> {
    pub phi: GridField<T>,
    pub psi: GridField<T>,
    pub epsilon: T,
    pub transport_value: T,
    pub iterations: usize,
    pub marginal_error: T,
}

/// Warm-start cache: raw dual iterates and the two self-transport potentials.
/// Owned by call sites that solve a slowly-changing sequence of problems.
#[derive(Debug, Clone)]
pub struct SinkhornState<T> {
    f: Vec<T>,
    g: Vec<T>,
    u_source: Vec<T>,
    u_target: Vec<T>,
    warm: bool,
}

impl<T> Default for SinkhornState<T> {
    fn default() -> Self {
        SinkhornState { f: Vec::new(), g: Vec::new(), u_source: Vec::new(), u_target: Vec::new(), warm: false }
    }
}

impl<T: Scalar> SinkhornState<T> {
    pub fn reset(&mut self) {
        self.warm = false;
    }
}

/// Dense quadratic-cost kernel plus the Sinkhorn iteration. Build once per
/// domain, reuse across solves.
pub struct EntropicSolver<T> {
    domain: Arc<Domain<T>>,
    cost: Vec<T>,
    n: usize,
}

fn logsumexp_terms<T: Scalar>(terms: impl Iterator<Item = T> + Clone) -> T {
    let m = terms.clone().fold(T::neg_infinity(), T::max);
    if !m.is_finite() {
        return m;
    }
    let s: T = terms.map(|t| (t - m).exp()).sum();
    m + s.ln()
}

impl<T: Scalar> EntropicSolver<T> {
    pub fn new(domain: &Arc<Domain<T>>) -> Self {
        let n = domain.len();
        let mut cost = vec![T::zero(); n * n];
        let half = T::lit(0.5);
        for i in 0..n {
            let xi = domain.center(i);
            for j in 0..n {
                let xj = domain.center(j);
                let mut c = T::zero();
                for a in 0..domain.dimension() {
                    let d = xi[a] - xj[a];
                    c += d * d;
                }
                cost[i * n + j] = c * half;
            }
        }
        EntropicSolver { domain: Arc::clone(domain), cost, n }
    }

    pub fn domain(&self) -> &Arc<Domain<T>> {
        &self.domain
    }

    /// Log masses normalized to total mass one; errors on nonpositive cells.
    fn log_masses(&self, rho: &GridField<T>) -> Result<Vec<T>> {
        let vol = self.domain.cell_volume();
        let mut mass = T::zero();
        for (index, &v) in rho.values().iter().enumerate() {
            if !(v > T::zero()) || !v.is_finite() {
                return Err(TransportError::NonPositiveDensity { index, value: v.as_f64() });
            }
            mass += v * vol;
        }
        let lm = mass.ln();
        Ok(rho.values().iter().map(|&v| v.ln() + vol.ln() - lm).collect())
    }

    /// One half-update: `out_i = -eps LSE_j (lw_j + (pot_j - C_ij)/eps)`,
    /// rows taken along `transpose` or not.
    fn half_update(&self, lw: &[T], pot: &[T], eps: T, transpose: bool, out: &mut [T]) {
        let n = self.n;
        let inv = T::one() / eps;
        let mut shifted = vec![T::zero(); n];
        for j in 0..n {
            shifted[j] = lw[j] + pot[j] * inv;
        }
        for i in 0..n {
            let row = |j: usize| if transpose { self.cost[j * n + i] } else { self.cost[i * n + j] };
            let mut m = T::neg_infinity();
            for j in 0..n {
                let t = shifted[j] - row(j) * inv;
                if t > m {
                    m = t;
                }
            }
            let mut s = T::zero();
            for j in 0..n {
                let t = shifted[j] - row(j) * inv;
                s += (t - m).exp();
            }
            out[i] = -eps * (m + s.ln());
        }
    }

    /// L1 violation of the target marginal. The source marginal is exact
    /// right after an `f` update, so this is the meaningful residual.
    fn target_marginal_violation(&self, la: &[T], lb: &[T], f: &[T], g: &[T], eps: T) -> T {
        let n = self.n;
        let inv = T::one() / eps;
        let mut shifted = vec![T::zero(); n];
        for i in 0..n {
            shifted[i] = la[i] + f[i] * inv;
        }
        let mut viol = T::zero();
        for j in 0..n {
            let lse = logsumexp_terms((0..n).map(|i| shifted[i] - self.cost[i * n + j] * inv));
            let col = (lse + lb[j] + g[j] * inv).exp();
            viol += (col - lb[j].exp()).abs();
        }
        viol
    }

    /// Alternating iterations at one epsilon; potentials updated in place.
    /// `plateau_tol` is the fallback acceptance level when the violation
    /// stops improving before reaching `tol`.
    fn stage(
        &self,
        la: &[T],
        lb: &[T],
        f: &mut Vec<T>,
        g: &mut Vec<T>,
        eps: T,
        tol: T,
        plateau_tol: T,
        max_iter: usize,
    ) -> Result<(usize, T)> {
        let n = self.n;
        let inv = T::one() / eps;
        let mut g_new = vec![T::zero(); n];
        let mut f_new = vec![T::zero(); n];
        let mut checkpoint = T::infinity();
        for it in 1..=max_iter {
            self.half_update(la, f, eps, true, &mut g_new);
            // The column marginal of the pre-update iterate falls out of the
            // g gap for free: col_j = exp(lb_j + (g_old_j - g_new_j)/eps).
            let mut v = T::zero();
            for j in 0..n {
                let col = (lb[j] + (g[j] - g_new[j]) * inv).exp();
                v += (col - lb[j].exp()).abs();
            }
            std::mem::swap(g, &mut g_new);
            self.half_update(lb, g, eps, false, &mut f_new);
            std::mem::swap(f, &mut f_new);
            let mut viol = v;
            if viol <= tol {
                // The free estimate lags one iteration; confirm on the
                // iterate actually returned.
                let exact = self.target_marginal_violation(la, lb, f, g, eps);
                if exact <= tol {
                    return Ok((it, exact));
                }
                viol = exact;
            }
            if it % 500 == 0 {
                // Less than 1% progress over 500 iterations: the ties
                // regime. Accept if already below the plateau level.
                if viol > checkpoint * T::lit(0.99) && viol <= plateau_tol {
                    let exact = self.target_marginal_violation(la, lb, f, g, eps);
                    if exact <= plateau_tol {
                        return Ok((it, exact));
                    }
                }
                checkpoint = viol;
            }
        }
        // Out of budget: a run that crept below the plateau level without
        // triggering the periodic check is still usable.
        let exact = self.target_marginal_violation(la, lb, f, g, eps);
        if exact <= plateau_tol {
            return Ok((max_iter, exact));
        }
        Err(TransportError::NonConvergence { iterations: max_iter, violation: exact.as_f64() })
    }

    /// Symmetric self-transport potential of one marginal: the fixed point of
    /// `u = T(u)` under the averaged iteration `u <- (u + T(u))/2`.
    fn self_potential(
        &self,
        lw: &[T],
        u: &mut Vec<T>,
        eps: T,
        tol: T,
        max_iter: usize,
    ) -> Result<()> {
        let half = T::lit(0.5);
        let mut tu = vec![T::zero(); self.n];
        let mut resid = T::infinity();
        for _ in 0..max_iter {
            self.half_update(lw, u, eps, false, &mut tu);
            resid = u
                .iter()
                .zip(&tu)
                .map(|(&a, &b)| (a - b).abs())
                .fold(T::zero(), T::max);
            for (ui, &ti) in u.iter_mut().zip(&tu) {
                *ui = (*ui + ti) * half;
            }
            if resid <= tol {
                return Ok(());
            }
        }
        eprintln!("DBG self fail eps={:.3e} tol={:.3e} resid={:.3e}", eps.as_f64(), tol.as_f64(), resid.as_f64());
        Err(TransportError::NonConvergence { iterations: max_iter, violation: resid.as_f64() })
    }

    /// Solves for the debiased potential pair between `source` and `target`,
    /// warm-starting from `state`. On a cold state the solver runs an
    /// epsilon-scaling schedule down to `settings.epsilon`; a warm state goes
    /// straight to the final epsilon.
    pub fn potentials(
        &self,
        source: &GridField<T>,
        target: &GridField<T>,
        settings: &SinkhornSettings<T>,
        state: &mut SinkhornState<T>,
    ) -> Result<PotentialPair<T>> {
        let la = self.log_masses(source)?;
        let lb = self.log_masses(target)?;
        let eps = settings.epsilon;
        if !(eps > T::zero()) || !eps.is_finite() {
            return Err(TransportError::BadSchedule {
                start: eps.as_f64(),
                end: eps.as_f64(),
                steps: 0,
            });
        }
        // The potential tolerance for the self problems mirrors what the
        // marginal tolerance buys on the pair problem: O(eps * tol) in value.
        // Intermediate stages only warm-start the next one, so they run at a
        // loose tolerance with bounded effort and are allowed to time out;
        // some epsilon values sit in a ties regime where Sinkhorn contracts
        // sublinearly, and grinding there buys nothing.
        //
        // A warm state goes straight to the final epsilon; if it turns out to
        // sit too far from the new optimum to contract there, fall back to a
        // cold epsilon-scaled run instead of failing.
        let identical = source.values() == target.values();
        let warmup_tol = settings.marginal_tol.max(T::lit(1e-6));
        let warmup_iters = 2000usize.min(settings.max_iter);
        let mut iterations = 0usize;
        let mut marginal_error = T::zero();
        let mut warm = state.warm && state.f.len() == self.n;
        'attempt: loop {
            if !warm {
                state.f = vec![T::zero(); self.n];
                state.g = vec![T::zero(); self.n];
                state.u_source = vec![T::zero(); self.n];
                state.u_target = vec![T::zero(); self.n];
            }
            let schedule = if warm {
                vec![eps]
            } else {
                let start = settings
                    .epsilon_start
                    .unwrap_or_else(|| T::lit(0.1) * self.domain.diameter_squared())
                    .max(eps);
                // Ratio-4 stages are a good balance: each stage warm-starts the next.
                let ratio = (start / eps).ln() / T::lit(4.0).ln();
                let steps = 1 + ratio.ceil().to_usize().unwrap_or(0).max(0);
                epsilon_scaling_schedule(start, eps, steps.max(1))?
            };
            for (si, &e) in schedule.iter().enumerate() {
                let last = si + 1 == schedule.len();
                let (tol, cap, strict) = if last {
                    (settings.marginal_tol, settings.max_iter, true)
                } else {
                    (warmup_tol, warmup_iters, false)
                };
                let self_tol = (e * tol).max(T::lit(1e-15));
                match self.self_potential(&la, &mut state.u_source, e, self_tol, cap) {
                    Ok(()) => {}
                    Err(TransportError::NonConvergence { .. }) if warm => {
                        warm = false;
                        continue 'attempt;
                    }
                    Err(err) if strict => return Err(err),
                    Err(_) => {}
                }
                if identical {
                    state.u_target.copy_from_slice(&state.u_source);
                    state.f.copy_from_slice(&state.u_source);
                    state.g.copy_from_slice(&state.u_source);
                } else {
                    match self.self_potential(&lb, &mut state.u_target, e, self_tol, cap) {
                        Ok(()) => {}
                        Err(TransportError::NonConvergence { .. }) if warm => {
                            warm = false;
                            continue 'attempt;
                        }
                        Err(err) if strict => return Err(err),
                        Err(_) => {}
                    }
                    let plateau = if last { settings.plateau_tol } else { warmup_tol };
                    match self.stage(&la, &lb, &mut state.f, &mut state.g, e, tol, plateau, cap) {
                        Ok((it, viol)) => {
                            iterations += it;
                            marginal_error = viol;
                        }
                        Err(TransportError::NonConvergence { .. }) if warm => {
                            iterations += cap;
                            warm = false;
                            continue 'attempt;
                        }
                        Err(err) if strict => return Err(err),
                        Err(_) => iterations += cap,
                    }
                }
            }
            break;
        }
        state.warm = true;

        // Debias, then shift phi to Lebesgue mean zero.
        let n = self.n;
        let mut phi = vec![T::zero(); n];
        let mut psi = vec![T::zero(); n];
        for i in 0..n {
            phi[i] = state.f[i] - state.u_source[i];
            psi[i] = state.g[i] - state.u_target[i];
        }
        let phi = GridField::new(&self.domain, phi, Role::Potential).map_err(TransportError::Grid)?;
        let psi = GridField::new(&self.domain, psi, Role::Potential).map_err(TransportError::Grid)?;
        let shift = phi.mean();
        let phi = phi.shift(-shift);
        let psi = psi.shift(shift);
        let transport_value = phi.integrate_against(source).map_err(TransportError::Grid)?
            + psi.integrate_against(target).map_err(TransportError::Grid)?;
        Ok(PotentialPair { phi, psi, epsilon: eps, transport_value, iterations, marginal_error })
    }

    /// Exact quadratic-cost dual pair on a one-dimensional domain.
    ///
    /// The monotone coupling is optimal for this cost, so the plan is the
    /// north-west-corner walk over the two mass vectors, and the dual
    /// equalities `phi_i + psi_j = C_ij` along the walk's support chain
    /// determine the potentials in one pass. Where the chain breaks (both
    /// cells exhaust at once, so the dual has a free constant there) the new
    /// component is pinned to the midpoint of its locally feasible interval,
    /// which keeps the pair balanced instead of drifting into a one-sided
    /// tilt. A final conjugation pass snaps the pair onto the c-concave
    /// envelope, making feasibility exact. Identical inputs short-circuit to
    /// zero potentials and zero value so stationary configurations stay exact
    /// to the bit.
    pub fn line_potentials(
        &self,
        source: &GridField<T>,
        target: &GridField<T>,
    ) -> Result<PotentialPair<T>> {
        if self.domain.dimension() != 1 {
            return Err(TransportError::UnsupportedDimension { dimension: self.domain.dimension() });
        }
        if source.values() == target.values() {
            let zero = GridField::constant(&self.domain, T::zero(), Role::Potential);
            return Ok(PotentialPair {
                phi: zero.clone(),
                psi: zero,
                epsilon: T::zero(),
                transport_value: T::zero(),
                iterations: 0,
                marginal_error: T::zero(),
            });
        }
        let n = self.n;
        let vol = self.domain.cell_volume();
        let masses = |rho: &GridField<T>| -> Result<Vec<T>> {
            let mut total = T::zero();
            for (index, &v) in rho.values().iter().enumerate() {
                if !(v > T::zero()) || !v.is_finite() {
                    return Err(TransportError::NonPositiveDensity { index, value: v.as_f64() });
                }
                total += v * vol;
            }
            Ok(rho.values().iter().map(|&v| v * vol / total).collect())
        };
        let a = masses(source)?;
        let b = masses(target)?;
        let cost = |i: usize, j: usize| self.cost[i * n + j];

        let mut phi = vec![T::zero(); n];
        let mut psi = vec![T::zero(); n];
        let (mut i, mut j) = (0usize, 0usize);
        let mut ra = a[0];
        let mut rb = b[0];
        psi[0] = cost(0, 0) - phi[0];
        loop {
            if i + 1 == n && j + 1 == n {
                break;
            }
            let m = ra.min(rb);
            if ra == rb && i + 1 < n && j + 1 < n {
                // Support chain breaks; psi_{j+1} is free inside
                //   C_{i+1,j+1} - min_{j'<=j}(C_{i+1,j'} - psi_{j'})
                //     <= psi_{j+1} <= min_{i'<=i}(C_{i',j+1} - phi_{i'}).
                let mut hi = T::infinity();
                for ip in 0..=i {
                    hi = hi.min(cost(ip, j + 1) - phi[ip]);
                }
                let mut best = T::infinity();
                for jp in 0..=j {
                    best = best.min(cost(i + 1, jp) - psi[jp]);
                }
                let lo = cost(i + 1, j + 1) - best;
                i += 1;
                j += 1;
                psi[j] = (lo + hi) * T::lit(0.5);
                phi[i] = cost(i, j) - psi[j];
                ra = a[i];
                rb = b[j];
            } else if (ra < rb && i + 1 < n) || j + 1 == n {
                rb = rb - m;
                i += 1;
                ra = a[i];
                phi[i] = cost(i, j) - psi[j];
            } else {
                ra = ra - m;
                j += 1;
                rb = b[j];
                psi[j] = cost(i, j) - phi[i];
            }
        }

        // Conjugation pass: psi <- phi^c, phi <- psi^c. On the generic
        // (unique-dual) instance this is the identity up to rounding; at ties
        // it repairs any residual infeasibility from the midpoint pinning.
        let phi = GridField::new(&self.domain, phi, Role::Potential).map_err(TransportError::Grid)?;
        let psi = c_transform(&phi.scale(-T::one()), T::one())?;
        let phi = c_transform(&psi.scale(-T::one()), T::one())?;
        let shift = phi.mean();
        let phi = phi.shift(-shift);
        let psi = psi.shift(shift);
        let transport_value = phi.integrate_against(source).map_err(TransportError::Grid)?
            + psi.integrate_against(target).map_err(TransportError::Grid)?;
        Ok(PotentialPair {
            phi,
            psi,
            epsilon: T::zero(),
            transport_value,
            iterations: 1,
            marginal_error: T::zero(),
        })
    }

    /// Exact dual pair between piecewise-uniform histogram densities on a
    /// one-dimensional domain.
    ///
    /// Unlike [`EntropicSolver::line_potentials`], which treats each cell as
    /// an atom at its center, this routine takes the densities at face value:
    /// mass spreads uniformly across each cell. Between strictly positive
    /// histograms the monotone map `T = Q_target(F_source)` is the unique
    /// optimal transport, the value `int (x - T x)^2 rho(x) dx / 2` has a
    /// closed form per breakpoint segment, and the potential
    /// `phi(x) = int (y - T y) dy` is piecewise quadratic. The returned
    /// fields hold the *cell averages* of `phi` and `psi`, which are exactly
    /// the derivatives of the value with respect to the cell masses, so the
    /// value is smooth in the densities: no tie degeneracy, no dual jumps.
    /// Identical inputs produce bitwise-zero potentials and value.
    pub fn quantile_potentials(
        &self,
        source: &GridField<T>,
        target: &GridField<T>,
    ) -> Result<PotentialPair<T>> {
        if self.domain.dimension() != 1 {
            return Err(TransportError::UnsupportedDimension { dimension: self.domain.dimension() });
        }
        let n = self.n;
        let vol = self.domain.cell_volume();
        let masses = |rho: &GridField<T>| -> Result<Vec<T>> {
            let mut total = T::zero();
            for (index, &v) in rho.values().iter().enumerate() {
                if !(v > T::zero()) || !v.is_finite() {
                    return Err(TransportError::NonPositiveDensity { index, value: v.as_f64() });
                }
                total += v * vol;
            }
            Ok(rho.values().iter().map(|&v| v * vol / total).collect())
        };
        let a = masses(source)?;
        let b = masses(target)?;
        let mut ca = vec![T::zero(); n + 1];
        let mut cb = vec![T::zero(); n + 1];
        for k in 0..n {
            ca[k + 1] = ca[k] + a[k];
            cb[k + 1] = cb[k] + b[k];
        }
        let h = self.domain.spacing(0);
        let left = self.domain.center(0)[0] - h * T::lit(0.5);
        let edge = |k: usize| left + h * T::from_usize(k).unwrap();
        // Position of mass level s inside cell k of (cum, mass); the fraction
        // is clamped so vanishing cells cannot catapult the position.
        let pos = |cum: &[T], mass: &[T], k: usize, s: T| -> T {
            let f = ((s - cum[k]) / mass[k]).max(T::zero()).min(T::one());
            edge(k) + f * h
        };

        // One directed sweep: walk the cells of `am`, splitting at the mass
        // levels of `bm`, and accumulate the squared-displacement value, the
        // potential (integral of the displacement), and its cell averages.
        let sweep = |am: &[T], bm: &[T], cam: &[T], cbm: &[T]| -> (T, Vec<T>) {
            let half = T::lit(0.5);
            let sixth = T::one() / T::lit(6.0);
            let third = T::one() / T::lit(3.0);
            let mut value = T::zero();
            let mut averages = vec![T::zero(); n];
            let mut j = 0usize;
            let mut phi_run = T::zero();
            for i in 0..n {
                let mut sl = cam[i];
                let send = cam[i + 1];
                let mut xl = edge(i);
                let mut acc = T::zero();
                loop {
                    while j + 1 < n && cbm[j + 1] <= sl {
                        j += 1;
                    }
                    let sr = if j + 1 < n && cbm[j + 1] < send { cbm[j + 1] } else { send };
                    let xr = if sr == send { edge(i + 1) } else { pos(cam, am, i, sr) };
                    let yl = pos(cbm, bm, j, sl);
                    let yr = pos(cbm, bm, j, sr);
                    let (dl, dr) = (xl - yl, xr - yr);
                    value += (sr - sl) * (dl * dl + dl * dr + dr * dr) * third;
                    // phi is quadratic on the piece; Simpson is exact. The
                    // displacement at the x-midpoint is the midpoint of the
                    // endpoint displacements because T is linear here.
                    let dx = xr - xl;
                    let dm = (dl + dr) * half;
                    let phi_m = phi_run + dx * half * (dl + dm) * half;
                    let phi_r = phi_run + dx * dm;
                    acc += dx * sixth * (phi_run + T::lit(4.0) * phi_m + phi_r);
                    phi_run = phi_r;
                    xl = xr;
                    sl = sr;
                    if sr == send {
                        break;
                    }
                }
                averages[i] = acc / h;
            }
            (value, averages)
        };

        let (w2, phi) = sweep(&a, &b, &ca, &cb);
        let (_, psi) = sweep(&b, &a, &cb, &ca);
        let phi = GridField::new(&self.domain, phi, Role::Potential).map_err(TransportError::Grid)?;
        let psi = GridField::new(&self.domain, psi, Role::Potential).map_err(TransportError::Grid)?;
        let shift = phi.mean();
        let phi = phi.shift(-shift);
        let psi = psi.shift(shift);
        Ok(PotentialPair {
            phi,
            psi,
            epsilon: T::zero(),
            transport_value: w2 * T::lit(0.5),
            iterations: 1,
            marginal_error: T::zero(),
        })
    }
}

/// One-shot entropic solve (cold start, full epsilon scaling).
pub fn sinkhorn_potentials<T: Scalar>(
    source: &GridField<T>,
    target: &GridField<T>,
    settings: &SinkhornSettings<T>,
) -> Result<PotentialPair<T>> {
    let solver = EntropicSolver::new(source.domain());
    let mut state = SinkhornState::default();
    solver.potentials(source, target, settings, &mut state)
}

// ---------------------------------------------------------------------------
// Exact oracle
// ---------------------------------------------------------------------------

/// Exact optimal plan for small instances.
#[derive(Debug, Clone)]
pub struct TransportPlan<T> {
    /// Optimal transport cost `W_2^2 / 2`.
    pub value: T,
    /// Row-major `n x n` plan in mass units.
    pub plan: Vec<T>,
}

const ORACLE_MAX_CELLS: usize = 64;

/// Exact `W_2^2/2` minimizer via successive shortest paths with node
/// potentials on the bipartite transport graph. Limited to 64 cells.
pub fn exact_ot_oracle<T: Scalar>(
    source: &GridField<T>,
    target: &GridField<T>,
) -> Result<TransportPlan<T>> {
    if !source.same_domain(target) {
        return Err(TransportError::Grid(GridError::DomainMismatch));
    }
    let dom = source.domain();
    let n = dom.len();
    if n > ORACLE_MAX_CELLS {
        return Err(TransportError::OracleTooLarge { cells: n });
    }
    let vol = dom.cell_volume();
    let mut supply: Vec<T> = source.values().iter().map(|&v| v * vol).collect();
    let mut demand: Vec<T> = target.values().iter().map(|&v| v * vol).collect();
    for (index, &s) in supply.iter().enumerate() {
        if s < T::zero() {
            return Err(TransportError::Grid(GridError::NegativeDensity { index, value: s.as_f64() }));
        }
    }
    for (index, &d) in demand.iter().enumerate() {
        if d < T::zero() {
            return Err(TransportError::Grid(GridError::NegativeDensity { index, value: d.as_f64() }));
        }
    }
    let total_s: T = supply.iter().copied().sum();
    let total_d: T = demand.iter().copied().sum();
    let gap = (total_s - total_d).abs();
    if gap > T::lit(1e-6) * (T::one() + total_s.abs()) {
        return Err(TransportError::MassMismatch { gap: gap.as_f64() });
    }
    // Rescale demand so both sides balance exactly in float arithmetic.
    if total_d > T::zero() {
        let r = total_s / total_d;
        for d in demand.iter_mut() {
            *d = *d * r;
        }
    }

    let cost = {
        let mut c = vec![T::zero(); n * n];
        let half = T::lit(0.5);
        for i in 0..n {
            let xi = dom.center(i);
            for j in 0..n {
                let xj = dom.center(j);
                let mut acc = T::zero();
                for a in 0..dom.dimension() {
                    let d = xi[a] - xj[a];
                    acc += d * d;
                }
                c[i * n + j] = acc * half;
            }
        }
        c
    };

    let mut plan = vec![T::zero(); n * n];
    let mut pot_s = vec![T::zero(); n]; // node potentials, sources
    let mut pot_t = vec![T::zero(); n];
    let remaining = |s: &[T]| s.iter().copied().fold(T::zero(), |a, b| a + b.max(T::zero()));
    // Rescaling the demand leaves both sides balanced only to rounding, so
    // stop once either side is down to dust instead of exactly zero.
    let dust = T::lit(1e-14) * (T::one() + total_s);
    let mut guard = 0usize;
    while remaining(&supply) > dust && remaining(&demand) > dust {
        guard += 1;
        // Degenerate augmentations can zero a plan arc without exhausting a
        // supply or demand, so the bound is quadratic rather than linear.
        if guard > 4 * n * n + 16 {
            return Err(TransportError::FlowStalled);
        }
        // Dijkstra over 2n nodes: 0..n sources, n..2n targets. Reduced costs
        // are nonnegative by the potential invariant; plan arcs have reduced
        // cost zero, so backward arcs cost zero.
        let inf = T::infinity();
        let m = 2 * n;
        let mut dist = vec![inf; m];
        let mut parent = vec![usize::MAX; m];
        let mut done = vec![false; m];
        for i in 0..n {
            if supply[i] > T::zero() {
                dist[i] = T::zero();
            }
        }
        loop {
            let mut best = usize::MAX;
            let mut bd = inf;
            for v in 0..m {
                if !done[v] && dist[v] < bd {
                    bd = dist[v];
                    best = v;
                }
            }
            if best == usize::MAX {
                break;
            }
            done[best] = true;
            if best < n {
                let i = best;
                for j in 0..n {
                    let rc = cost[i * n + j] - pot_s[i] - pot_t[j];
                    let nd = dist[i] + rc.max(T::zero());
                    if nd < dist[n + j] {
                        dist[n + j] = nd;
                        parent[n + j] = i;
                    }
                }
            } else {
                let j = best - n;
                for i in 0..n {
                    if plan[i * n + j] > T::zero() {
                        // Reduced cost of a used arc is zero at optimality.
                        if dist[n + j] < dist[i] {
                            dist[i] = dist[n + j];
                            parent[i] = n + j;
                        }
                    }
                }
            }
        }
        // Cheapest reachable target with unmet demand.
        let mut tgt = usize::MAX;
        let mut td = inf;
        for j in 0..n {
            if demand[j] > T::zero() && dist[n + j] < td {
                td = dist[n + j];
                tgt = j;
            }
        }
        if tgt == usize::MAX {
            return Err(TransportError::FlowStalled);
        }
        // Johnson update with unreachable nodes clamped at the sink distance;
        // keeps every reduced cost nonnegative and zeroes them on the path.
        for v in 0..n {
            let dh = if dist[v].is_finite() { dist[v].min(td) } else { td };
            pot_s[v] -= dh;
        }
        for v in 0..n {
            let dh = if dist[n + v].is_finite() { dist[n + v].min(td) } else { td };
            pot_t[v] += dh;
        }
        // Walk the path to find the bottleneck, then augment.
        let mut delta = demand[tgt];
        let mut v = n + tgt;
        while parent[v] != usize::MAX {
            let p = parent[v];
            if p >= n {
                // backward arc target->source consumed plan mass
                let i = v;
                let j = p - n;
                delta = delta.min(plan[i * n + j]);
            }
            v = p;
        }
        delta = delta.min(supply[v]);
        let src_root = v;
        let mut v = n + tgt;
        while parent[v] != usize::MAX {
            let p = parent[v];
            if p < n {
                plan[p * n + (v - n)] += delta;
            } else {
                plan[v * n + (p - n)] -= delta;
            }
            v = p;
        }
        supply[src_root] -= delta;
        demand[tgt] -= delta;
        if !(delta > T::zero()) {
            return Err(TransportError::FlowStalled);
        }
    }
    let value: T = plan.iter().zip(&cost).map(|(&p, &c)| p * c).sum();
    Ok(TransportPlan { value, plan })
}

// ---------------------------------------------------------------------------
// Pushforward audit
// ---------------------------------------------------------------------------

/// Transports each source cell's mass to the cell containing `x - grad
/// phi(x)` (clipped to the box) and returns the L1 distance between the
/// transported density and `target`. A coarse but assumption-free audit that
/// the potential's gradient encodes the optimal map.
pub fn pushforward_check<T: Scalar>(
    pair: &PotentialPair<T>,
    source: &GridField<T>,
    target: &GridField<T>,
) -> Result<T> {
    let dom = source.domain();
    let grads = pair.phi.gradient().map_err(TransportError::Grid)?;
    let vol = dom.cell_volume();
    let mut mass = vec![T::zero(); dom.len()];
    for i in 0..dom.len() {
        let x = dom.center(i);
        let mut y = [T::zero(); 2];
        for a in 0..dom.dimension() {
            y[a] = x[a] - grads[a].values()[i];
        }
        let j = dom.cell_containing(y);
        mass[j] += source.values()[i] * vol;
    }
    let pushed: Vec<T> = mass.into_iter().map(|m| m / vol).collect();
    let pushed = GridField::new(dom, pushed, Role::Density).map_err(TransportError::Grid)?;
    pushed.l1_distance(target).map_err(TransportError::Grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{Domain, GridField, Role};

    fn close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "expected {a} ~ {b} within {tol}");
    }

    /// Exact 1D `W_2^2/2` between piecewise-constant densities via the
    /// quantile (CDF inversion) formula. Independent of the flow solver.
    fn w2_half_quantile_1d(source: &GridField<f64>, target: &GridField<f64>) -> f64 {
        let dom = source.domain();
        assert_eq!(dom.dimension(), 1);
        let h = dom.spacing(0);
        let masses = |f: &GridField<f64>| -> Vec<f64> { f.values().iter().map(|v| v * h).collect() };
        let (ma, mb) = (masses(source), masses(target));
        // Sweep quantiles: both inverse CDFs are piecewise linear; integrate
        // (Fa^{-1}(q) - Fb^{-1}(q))^2 dq exactly on the common refinement.
        let mut total = 0.0;
        let (mut ia, mut ib) = (0usize, 0usize);
        let (mut qa, mut qb) = (0.0f64, 0.0f64); // mass consumed inside current cells
        let mut q = 0.0f64;
        let total_mass: f64 = ma.iter().sum();
        while q < total_mass - 1e-14 {
            while ia < ma.len() && ma[ia] - qa <= 1e-300 {
                ia += 1;
                qa = 0.0;
            }
            while ib < mb.len() && mb[ib] - qb <= 1e-300 {
                ib += 1;
                qb = 0.0;
            }
            if ia >= ma.len() || ib >= mb.len() {
                break;
            }
            let step = (ma[ia] - qa).min(mb[ib] - qb).min(total_mass - q);
            // Positions move linearly in quantile within a cell.
            let xa0 = ia as f64 * h + qa / ma[ia] * h;
            let xa1 = ia as f64 * h + (qa + step) / ma[ia] * h;
            let xb0 = ib as f64 * h + qb / mb[ib] * h;
            let xb1 = ib as f64 * h + (qb + step) / mb[ib] * h;
            // integral over s in [0,1] of ((1-s) d0 + s d1)^2 * step
            let d0 = xa0 - xb0;
            let d1 = xa1 - xb1;
            total += step * (d0 * d0 + d0 * d1 + d1 * d1) / 3.0;
            qa += step;
            qb += step;
            q += step;
        }
        total / 2.0
    }

    #[test]
    fn schedule_examples() {
        let s = epsilon_scaling_schedule(1.0, 0.01, 3).unwrap();
        assert_eq!(s.len(), 3);
        close(s[0], 1.0, 0.0);
        close(s[1], 0.1, 1e-12);
        close(s[2], 0.01, 0.0);
        let s = epsilon_scaling_schedule(0.5, 0.5, 1).unwrap();
        assert_eq!(s, vec![0.5]);
        let s = epsilon_scaling_schedule(1e-1, 1e-4, 4).unwrap();
        close(s[1], 1e-2, 1e-14);
        close(s[2], 1e-3, 1e-15);
        assert!(epsilon_scaling_schedule(0.01, 1.0, 3).is_err());
        assert!(epsilon_scaling_schedule(1.0, 0.0, 3).is_err());
        assert!(epsilon_scaling_schedule(1.0, 0.1, 0).is_err());
        assert!(epsilon_scaling_schedule(1.0, 0.1, 1).is_err());
    }

    #[test]
    fn c_transform_of_constant() {
        let dom: Arc<Domain<f64>> = Domain::line(2.0, 16).unwrap();
        let g = GridField::constant(&dom, 3.25, Role::Potential);
        let t = c_transform(&g, 0.7).unwrap();
        for &v in t.values() {
            close(v, 3.25, 1e-14);
        }
    }

    #[test]
    fn c_transform_of_quadratic_matches_closed_form() {
        // min_y ((x-y)^2/(2s) + (y-y0)^2/2) = (x-y0)^2 / (2 (1+s));
        // grid minimizer differs from the continuum one by at most a cell.
        let dom: Arc<Domain<f64>> = Domain::line(2.0, 128).unwrap();
        let y0 = 0.8125; // a grid center, so the argmin lands on a node
        let s = 0.5;
        let g = GridField::from_fn(&dom, Role::Potential, |c| (c[0] - y0).powi(2) / 2.0);
        let t = c_transform(&g, s).unwrap();
        let h = dom.spacing(0);
        for (i, &v) in t.values().iter().enumerate() {
            let x = dom.center(i)[0];
            let exact = (x - y0).powi(2) / (2.0 * (1.0 + s));
            assert!((v - exact).abs() <= h * h, "x={x} v={v} exact={exact}");
        }
    }

    #[test]
    fn c_transform_double_transform_is_idempotent() {
        // With the sign convention phi(x) = min_y (c(x,y) - psi(y)), applying
        // the transform twice to an already-transformed function returns it.
        let dom: Arc<Domain<f64>> = Domain::line(1.8, 48).unwrap();
        let raw = GridField::from_fn(&dom, Role::Potential, |c| (3.0 * c[0]).sin() + 0.5 * c[0]);
        let ct = |f: &GridField<f64>| c_transform(&f.scale(-1.0), 1.0).unwrap();
        let once = ct(&raw);
        let twice = ct(&ct(&once));
        for (a, b) in once.values().iter().zip(twice.values()) {
            close(*a, *b, 1e-10);
        }
    }

    #[test]
    fn c_transform_is_monotone_and_semiconcave() {
        let dom: Arc<Domain<f64>> = Domain::line(2.0, 64).unwrap();
        let g1 = GridField::from_fn(&dom, Role::Potential, |c| (2.0 * c[0]).cos());
        let g2 = g1.shift(0.3);
        let s = 0.4;
        let t1 = c_transform(&g1, s).unwrap();
        let t2 = c_transform(&g2, s).unwrap();
        for (a, b) in t1.values().iter().zip(t2.values()) {
            assert!(a <= b, "order preservation failed");
        }
        // out(x) - |x|^2/(2s) is concave along the grid line (exact property).
        let h = dom.spacing(0);
        let conc: Vec<f64> = t1
            .values()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let x = dom.center(i)[0];
                v - x * x / (2.0 * s)
            })
            .collect();
        for w in conc.windows(3) {
            let second = (w[2] - 2.0 * w[1] + w[0]) / (h * h);
            assert!(second <= 1e-10, "second difference {second}");
        }
    }

    #[test]
    fn c_transform_2d_separates() {
        let dom: Arc<Domain<f64>> = Domain::new(vec![1.5, 1.5], vec![12, 12]).unwrap();
        let y0 = [0.6875, 0.9375];
        let g = GridField::from_fn(&dom, Role::Potential, |c| {
            ((c[0] - y0[0]).powi(2) + (c[1] - y0[1]).powi(2)) / 2.0
        });
        let s = 1.0;
        let t = c_transform(&g, s).unwrap();
        let h = dom.spacing(0);
        for (i, &v) in t.values().iter().enumerate() {
            let c = dom.center(i);
            let exact = ((c[0] - y0[0]).powi(2) + (c[1] - y0[1]).powi(2)) / (2.0 * (1.0 + s));
            assert!((v - exact).abs() <= 2.0 * h * h, "v={v} exact={exact}");
        }
    }

    #[test]
    fn oracle_identity_is_free() {
        let dom: Arc<Domain<f64>> = Domain::line(2.0, 8).unwrap();
        let rho = GridField::from_fn(&dom, Role::Density, |c| 0.25 + 0.25 * c[0] / 2.0);
        let plan = exact_ot_oracle(&rho, &rho).unwrap();
        close(plan.value, 0.0, 1e-12);
    }

    #[test]
    fn oracle_two_cell_swap() {
        // Two cells, centers 0.5 apart... use [0,2] with 2 cells: centers 0.5, 1.5.
        // All mass moves one cell: W2^2/2 = (1^2)/2 * mass.
        let dom: Arc<Domain<f64>> = Domain::line(2.0, 2).unwrap();
        let a = GridField::new(&dom, vec![1.0, 0.0], Role::Density).unwrap();
        let b = GridField::new(&dom, vec![0.0, 1.0], Role::Density).unwrap();
        let plan = exact_ot_oracle(&a, &b).unwrap();
        close(plan.value, 0.5, 1e-12);
    }

    #[test]
    fn oracle_three_cell_shift() {
        // Centers at 1/3, 1, 5/3 on [0,2]; masses (1/2, 1/2, 0) -> (0, 1/2, 1/2).
        // Each half-unit moves 2/3: value = 2 * (1/2) * (2/3)^2 / 2 = 2/9.
        let dom: Arc<Domain<f64>> = Domain::line(2.0, 3).unwrap();
        let vol = dom.cell_volume();
        let a = GridField::new(&dom, vec![0.5 / vol, 0.5 / vol, 0.0], Role::Density).unwrap();
        let b = GridField::new(&dom, vec![0.0, 0.5 / vol, 0.5 / vol], Role::Density).unwrap();
        let plan = exact_ot_oracle(&a, &b).unwrap();
        close(plan.value, 2.0 / 9.0, 1e-12);
        close(plan.value, w2_half_quantile_1d(&a, &b), 1e-12);
    }

    #[test]
    fn oracle_matches_quantile_formula_on_random_pairs() {
        let dom: Arc<Domain<f64>> = Domain::line(2.0, 16).unwrap();
        for seed in 0..6u64 {
            let mk = |s: u64| {
                let mut vals = Vec::with_capacity(16);
                for i in 0..16u64 {
                    let x = ((s * 37 + i * 17) % 29) as f64 / 29.0 + 0.05;
                    vals.push(x);
                }
                let f = GridField::new(&dom, vals, Role::Density).unwrap();
                let m = f.integrate();
                f.scale(1.0 / m)
            };
            let a = mk(seed);
            let b = mk(seed + 101);
            let plan = exact_ot_oracle(&a, &b).unwrap();
            let exact = w2_half_quantile_1d(&a, &b);
            // Grid-node transport vs within-cell rearrangement differ at O(h^2).
            let h = dom.spacing(0);
            assert!(
                (plan.value - exact).abs() <= h * h,
                "seed {seed}: flow {} quantile {exact}",
                plan.value
            );
        }
    }

    #[test]
    fn oracle_rejects_large_instances() {
        let dom: Arc<Domain<f64>> = Domain::line(2.0, 65).unwrap();
        let rho = GridField::constant(&dom, 0.5, Role::Density);
        assert!(matches!(
            exact_ot_oracle(&rho, &rho),
            Err(TransportError::OracleTooLarge { cells: 65 })
        ));
    }

    fn uniform_on(dom: &std::sync::Arc<Domain<f64>>, lo: f64, hi: f64) -> GridField<f64> {
        let f = GridField::from_fn(dom, Role::Density, |c| {
            if c[0] >= lo && c[0] < hi {
                1.0
            } else {
                1e-12
            }
        });
        let m = f.integrate();
        f.scale(1.0 / m)
    }

    #[test]
    fn sinkhorn_identity_instance() {
        let dom: Arc<Domain<f64>> = Domain::line(2.0, 32).unwrap();
        let rho = GridField::from_fn(&dom, Role::Density, |c| 0.5 + 0.2 * (c[0] - 1.0));
        let m = rho.integrate();
        let rho = rho.scale(1.0 / m);
        let pair = sinkhorn_potentials(&rho, &rho, &SinkhornSettings::new(1e-3)).unwrap();
        assert_eq!(pair.transport_value, 0.0);
        assert!(pair.phi.values().iter().all(|&v| v.abs() <= 1e-2));
        assert_eq!(pushforward_check(&pair, &rho, &rho).unwrap(), 0.0);
    }

    #[test]
    fn sinkhorn_translation_value_and_pushforward() {
        let dom: Arc<Domain<f64>> = Domain::line(2.0, 64).unwrap();
        let a = uniform_on(&dom, 0.0, 1.0);
        let b = uniform_on(&dom, 0.25, 1.25);
        let pair = sinkhorn_potentials(&a, &b, &SinkhornSettings::new(1e-4)).unwrap();
        let exact = 0.25f64.powi(2) / 2.0;
        assert!(
            (pair.transport_value - exact).abs() <= 0.05 * exact,
            "value {} vs {exact}",
            pair.transport_value
        );
        // Duality identity holds by construction; check it did not decay.
        let dual = pair.phi.integrate_against(&a).unwrap() + pair.psi.integrate_against(&b).unwrap();
        close(dual, pair.transport_value, 1e-12 * (1.0 + pair.transport_value.abs()));
        let push = pushforward_check(&pair, &a, &b).unwrap();
        assert!(push <= 0.1, "pushforward discrepancy {push}");
    }

    #[test]
    fn sinkhorn_mean_zero_normalization() {
        let dom: Arc<Domain<f64>> = Domain::line(2.0, 24).unwrap();
        let a = uniform_on(&dom, 0.0, 1.2);
        let b = uniform_on(&dom, 0.6, 1.9);
        let pair = sinkhorn_potentials(&a, &b, &SinkhornSettings::new(5e-4)).unwrap();
        close(pair.phi.integrate() / dom.volume(), 0.0, 1e-10);
    }

    #[test]
    fn sinkhorn_against_oracle_small() {
        let dom: Arc<Domain<f64>> = Domain::line(2.0, 5).unwrap();
        let a = GridField::new(&dom, vec![0.8, 0.5, 0.4, 0.5, 0.3], Role::Density).unwrap();
        let a = a.scale(1.0 / a.integrate());
        let b = GridField::new(&dom, vec![0.3, 0.5, 0.4, 0.5, 0.8], Role::Density).unwrap();
        let b = b.scale(1.0 / b.integrate());
        let oracle = exact_ot_oracle(&a, &b).unwrap();
        for eps in [1e-2, 1e-3, 1e-4] {
            let pair = sinkhorn_potentials(&a, &b, &SinkhornSettings::new(eps)).unwrap();
            let bound = eps * (5.0f64).ln() + 1e-6;
            assert!(
                (pair.transport_value - oracle.value).abs() <= bound,
                "eps {eps}: |{} - {}| > {bound}",
                pair.transport_value,
                oracle.value
            );
        }
    }

    #[test]
    fn sinkhorn_bias_shrinks_with_epsilon() {
        // The literal value is not monotone in eps in general; the bias
        // against the exact value is what the scaling buys.
        let dom: Arc<Domain<f64>> = Domain::line(2.0, 8).unwrap();
        let a = GridField::new(&dom, vec![0.9, 0.7, 0.5, 0.3, 0.2, 0.4, 0.6, 0.4], Role::Density)
            .unwrap();
        let a = a.scale(1.0 / a.integrate());
        let b = GridField::new(&dom, vec![0.2, 0.4, 0.6, 0.8, 0.8, 0.4, 0.5, 0.3], Role::Density)
            .unwrap();
        let b = b.scale(1.0 / b.integrate());
        let oracle = exact_ot_oracle(&a, &b).unwrap();
        let mut last = f64::INFINITY;
        for eps in [4e-2, 1e-2, 2.5e-3, 6e-4] {
            let pair = sinkhorn_potentials(&a, &b, &SinkhornSettings::new(eps)).unwrap();
            let bias = (pair.transport_value - oracle.value).abs();
            assert!(bias <= last + 1e-9, "bias grew: {bias} after {last}");
            last = bias;
        }
    }

    #[test]
    fn sinkhorn_phi_below_hard_c_transform() {
        let dom: Arc<Domain<f64>> = Domain::line(2.0, 32).unwrap();
        let a = uniform_on(&dom, 0.0, 1.0);
        let b = uniform_on(&dom, 0.9, 1.9);
        let eps = 1e-3;
        let pair = sinkhorn_potentials(&a, &b, &SinkhornSettings::new(eps)).unwrap();
        // phi(x) <= min_y (c(x,y) - psi(y)) + ctrans_tol, soft-min slack.
        let hard = c_transform(&pair.psi.scale(-1.0), 1.0).unwrap();
        let n = dom.len() as f64;
        let ctrans_tol = 20.0 * eps * (1.0 + n.ln());
        for (p, h) in pair.phi.values().iter().zip(hard.values()) {
            assert!(*p <= *h + ctrans_tol, "phi {p} exceeds c-transform {h} + {ctrans_tol}");
        }
    }

    #[test]
    fn sinkhorn_rejects_nonpositive_cells() {
        let dom: Arc<Domain<f64>> = Domain::line(2.0, 4).unwrap();
        let good = GridField::constant(&dom, 0.5, Role::Density);
        let bad = GridField::new(&dom, vec![1.0, 0.0, 0.5, 0.5], Role::Density).unwrap();
        assert!(matches!(
            sinkhorn_potentials(&bad, &good, &SinkhornSettings::new(1e-3)),
            Err(TransportError::NonPositiveDensity { index: 1, .. })
        ));
    }

    #[test]
    fn pushforward_against_oracle_barycenters() {
        // 16-cell pair: the oracle plan's barycentric map and the potential
        // gradient map should transport comparably well.
        let dom: Arc<Domain<f64>> = Domain::line(2.0, 16).unwrap();
        let a = uniform_on(&dom, 0.0, 1.0);
        let b = uniform_on(&dom, 0.5, 1.5);
        let pair = sinkhorn_potentials(&a, &b, &SinkhornSettings::new(1e-4)).unwrap();
        let push_phi = pushforward_check(&pair, &a, &b).unwrap();

        let oracle = exact_ot_oracle(&a, &b).unwrap();
        let vol = dom.cell_volume();
        let n = dom.len();
        let mut mass = vec![0.0f64; n];
        for i in 0..n {
            let row = &oracle.plan[i * n..(i + 1) * n];
            let total: f64 = row.iter().sum();
            if total <= 0.0 {
                continue;
            }
            let bary: f64 = row
                .iter()
                .enumerate()
                .map(|(j, &m)| m * dom.center(j)[0])
                .sum::<f64>()
                / total;
            let j = dom.cell_containing([bary, 0.0]);
            mass[j] += a.values()[i] * vol;
        }
        let pushed =
            GridField::new(&dom, mass.iter().map(|m| m / vol).collect(), Role::Density).unwrap();
        let push_bary = pushed.l1_distance(&b).unwrap();
        assert!(push_phi <= 0.1, "gradient map discrepancy {push_phi}");
        assert!((push_phi - push_bary).abs() <= 0.05, "phi {push_phi} bary {push_bary}");
    }

    #[test]
    fn warm_start_reuses_state() {
        let dom: Arc<Domain<f64>> = Domain::line(2.0, 24).unwrap();
        let solver = EntropicSolver::new(&dom);
        let a = uniform_on(&dom, 0.0, 1.1);
        let b = uniform_on(&dom, 0.4, 1.6);
        let settings = SinkhornSettings::new(1e-3);
        let mut state = SinkhornState::default();
        let cold = solver.potentials(&a, &b, &settings, &mut state).unwrap();
        let warm = solver.potentials(&a, &b, &settings, &mut state).unwrap();
        assert!(warm.iterations <= cold.iterations);
        close(warm.transport_value, cold.transport_value, 1e-9);
    }

    #[test]
    fn sinkhorn_breaks_metastable_plateau() {
        // This pair parks the violation near 5.9e-3 for over a thousand
        // iterations at small epsilon before reorganizing; stingy warmup
        // stages used to push the whole plateau into the final stage and
        // blow its budget.
        let dom: Arc<Domain<f64>> = Domain::line(2.0, 8).unwrap();
        let src = GridField::new(
            &dom,
            vec![
                0.3234835128026966,
                0.34596916083862594,
                0.44907973288683345,
                0.5932836246849671,
                0.7328707507872847,
                0.6421765297679083,
                0.47243700513278286,
                0.4406996831036359,
            ],
            Role::Density,
        )
        .unwrap();
        let tgt = GridField::new(
            &dom,
            vec![0.9, 0.8, 0.6, 0.4, 0.3, 0.4, 0.3, 0.3],
            Role::Density,
        )
        .unwrap();
        let mut settings = SinkhornSettings::new(4e-4);
        settings.max_iter = 8000;
        let pair = sinkhorn_potentials(&src, &tgt, &settings).unwrap();
        assert!(pair.marginal_error <= 1e-4, "violation {}", pair.marginal_error);
        let solver = EntropicSolver::new(&dom);
        let exact = solver.line_potentials(&src, &tgt).unwrap();
        close(pair.transport_value, exact.transport_value, 4e-4 * 8.0_f64.ln() + 1e-9);
    }

    #[test]
    fn line_potentials_match_oracle_value_and_certify_duality() {
        // Deterministic pseudo-random marginals; the oracle solves the same
        // instances by min-cost flow, an entirely different algorithm.
        let dom: Arc<Domain<f64>> = Domain::line(2.0, 48).unwrap();
        let solver = EntropicSolver::new(&dom);
        let mut seed = 0x9e3779b97f4a7c15u64;
        let mut rand = move || {
            seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (seed >> 33) as f64 / (1u64 << 31) as f64
        };
        for _ in 0..6 {
            let av: Vec<f64> = (0..dom.len()).map(|_| 0.05 + rand()).collect();
            let bv: Vec<f64> = (0..dom.len()).map(|_| 0.05 + rand()).collect();
            let a = GridField::new(&dom, av, Role::Density).unwrap();
            let b = GridField::new(&dom, bv, Role::Density).unwrap();
            let a = a.scale(1.0 / (a.integrate()));
            let b = b.scale(1.0 / (b.integrate()));
            let pair = solver.line_potentials(&a, &b).unwrap();
            let oracle = exact_ot_oracle(&a, &b).unwrap();
            close(pair.transport_value, oracle.value, 1e-10 * (1.0 + oracle.value));
            // Strong duality: the dual value of the returned feasible pair
            // equals the primal optimum, certifying both.
            let dual = pair.phi.integrate_against(&a).unwrap()
                + pair.psi.integrate_against(&b).unwrap();
            close(dual, oracle.value, 1e-10 * (1.0 + oracle.value));
            // Feasibility of every pair of cells.
            let n = dom.len();
            for i in 0..n {
                for j in 0..n {
                    let c = {
                        let d = dom.center(i)[0] - dom.center(j)[0];
                        d * d * 0.5
                    };
                    let slack = pair.phi.values()[i] + pair.psi.values()[j] - c;
                    assert!(slack <= 1e-11, "infeasible at ({i},{j}): {slack}");
                }
            }
        }
    }

    #[test]
    fn line_potentials_identical_marginals_are_exactly_zero() {
        let dom: Arc<Domain<f64>> = Domain::line(2.0, 16).unwrap();
        let solver = EntropicSolver::new(&dom);
        let a: GridField<f64> =
            GridField::from_fn(&dom, Role::Density, |x| 0.3 + 0.2 * (3.0 * x[0]).sin());
        let pair = solver.line_potentials(&a, &a).unwrap();
        assert_eq!(pair.transport_value, 0.0);
        assert!(pair.phi.values().iter().all(|&v| v == 0.0));
        assert!(pair.psi.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn line_potentials_translation_matches_quantile_formula() {
        let dom: Arc<Domain<f64>> = Domain::line(2.0, 64).unwrap();
        let solver = EntropicSolver::new(&dom);
        let a = uniform_on(&dom, 0.0, 1.0);
        let b = uniform_on(&dom, 0.25, 1.25);
        let pair = solver.line_potentials(&a, &b).unwrap();
        close(pair.transport_value, 0.25 * 0.25 / 2.0, 1e-12);
    }

    #[test]
    fn line_potentials_agree_with_sinkhorn_on_smooth_pair() {
        let dom: Arc<Domain<f64>> = Domain::line(2.0, 32).unwrap();
        let solver = EntropicSolver::new(&dom);
        let a: GridField<f64> =
            GridField::from_fn(&dom, Role::Density, |x| 0.3 + 0.25 * (2.0 * x[0]).sin());
        let b: GridField<f64> =
            GridField::from_fn(&dom, Role::Density, |x| 0.3 + 0.25 * (2.0 * x[0]).cos());
        let a = a.scale(1.0 / a.integrate());
        let b = b.scale(1.0 / b.integrate());
        let exact = solver.line_potentials(&a, &b).unwrap();
        let entropic = sinkhorn_potentials(&a, &b, &SinkhornSettings::new(1e-4)).unwrap();
        close(exact.transport_value, entropic.transport_value, 2e-3);
        let mut worst = 0.0f64;
        for (e, s) in exact.phi.values().iter().zip(entropic.phi.values()) {
            worst = worst.max((e - s).abs());
        }
        assert!(worst <= 0.05, "potentials diverge by {worst}");
    }

    #[test]
    fn line_potentials_reject_two_dimensional_domains() {
        let dom: Arc<Domain<f64>> = Domain::new(vec![1.0, 1.0], vec![4, 4]).unwrap();
        let solver = EntropicSolver::new(&dom);
        let a = GridField::constant(&dom, 1.0, Role::Density);
        let err = solver.line_potentials(&a, &a).unwrap_err();
        assert!(matches!(err, TransportError::UnsupportedDimension { dimension: 2 }));
    }

    #[test]
    fn line_potentials_handle_saturated_block_ties() {
        // Shared saturated prefix gives bitwise-equal cumulative masses cell
        // by cell: every step of the walk through the block is a tie. The
        // midpoint pinning must keep the potentials flat there instead of
        // tilting them.
        let dom: Arc<Domain<f64>> = Domain::line(2.0, 16).unwrap();
        let solver = EntropicSolver::new(&dom);
        let mut av = vec![1.0; 16];
        let mut bv = vec![1.0; 16];
        // Tails are permutations of exactly representable values, so both
        // totals agree bitwise and the shared prefix ties cell by cell.
        let tail_a = [0.5, 0.25, 0.5, 0.25, 0.5, 0.25, 0.5, 0.75];
        let tail_b = [0.25, 0.5, 0.25, 0.5, 0.25, 0.5, 0.75, 0.5];
        for k in 0..8 {
            av[8 + k] = tail_a[k];
            bv[8 + k] = tail_b[k];
        }
        let a = GridField::new(&dom, av, Role::Density).unwrap();
        let b = GridField::new(&dom, bv, Role::Density).unwrap();
        let pair = solver.line_potentials(&a, &b).unwrap();
        let oracle = exact_ot_oracle(&a, &b).unwrap();
        close(pair.transport_value, oracle.value, 1e-10 * (1.0 + oracle.value));
        let dual = pair.phi.integrate_against(&a).unwrap()
            + pair.psi.integrate_against(&b).unwrap();
        close(dual, oracle.value, 1e-10 * (1.0 + oracle.value));
        // Inside the shared block the transport is the identity, so phi must
        // be flat across it (any tilt is a spurious dual selection).
        let phi = pair.phi.values();
        for k in 1..7 {
            assert!(
                (phi[k] - phi[0]).abs() <= 1e-9,
                "phi tilts across the saturated block: {} vs {}",
                phi[k],
                phi[0]
            );
        }
    }
}
