//! Uniform Cartesian grids on a box domain and per-cell scalar fields.
//!
//! Everything in the solver lives on a fixed grid: densities, potentials and
//! pressures are piecewise-constant cell values, integrals are midpoint sums
//! `sum_i f_i * cell_volume`, and gradients are central differences in the
//! interior with one-sided differences at the boundary (exact on affine
//! fields). The entropy of a density uses the convention `0 * ln 0 = 0`.
//!
//! Fields serialize to a small CSV format with a single header comment
//! carrying the domain geometry, one row per cell in row-major order
//! (axis 0 outermost).

use std::fmt::Write as _;
use std::io::{BufRead, Write};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;

/// Default tolerance on `|mass - 1|` for probability densities.
pub const MASS_TOL: f64 = 1e-8;
/// Default tolerance on capacity violations `rho - 1`.
pub const CAP_TOL: f64 = 1e-8;

pub type Result<T, E = GridError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum GridError {
    #[error("domain dimension must be 1 or 2, got {0}")]
    BadDimension(usize),
    #[error("axis {axis}: side length {side} must be positive and finite")]
    BadSide { axis: usize, side: f64 },
    #[error("axis {axis}: cell count must be positive")]
    BadCellCount { axis: usize },
    #[error("gradient needs at least 2 cells per axis, axis {axis} has {cells}")]
    TooCoarse { axis: usize, cells: usize },
    #[error("fields live on different domains")]
    DomainMismatch,
    #[error("expected {expected} values for this domain, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("density has negative value {value} at cell {index}")]
    NegativeDensity { index: usize, value: f64 },
    #[error("density mass {mass} differs from 1 by more than {tol}")]
    MassViolation { mass: f64, tol: f64 },
    #[error("density exceeds capacity 1 at cell {index} by {excess} (tol {tol})")]
    CapacityViolation { index: usize, excess: f64, tol: f64 },
    #[error("field contains a non-finite value at cell {index}")]
    NonFinite { index: usize },
    #[error("csv line {line}: {msg}")]
    Csv { line: usize, msg: String },
    #[error("csv i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// What a field means; drives validation and file headers, nothing else.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Density,
    Potential,
    Pressure,
    Generic,
}

impl Role {
    fn as_str(self) -> &'static str {
        match self {
            Role::Density => "density",
            Role::Potential => "potential",
            Role::Pressure => "pressure",
            Role::Generic => "generic",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "density" => Some(Role::Density),
            "potential" => Some(Role::Potential),
            "pressure" => Some(Role::Pressure),
            "generic" => Some(Role::Generic),
            _ => None,
        }
    }
}

/// Box domain `[0, L_1] x ... x [0, L_d]` split into uniform cells.
///
/// Note the domain itself carries no lower-bound offsets: instance geometry
/// is always anchored at the origin, which keeps the file format and the
/// preset catalog unambiguous.
#[derive(Debug, Clone, PartialEq)]
pub struct Domain<T> {
    sides: Vec<T>,
    cells: Vec<usize>,
}

impl<T: Scalar> Domain<T> {
    pub fn new(sides: Vec<T>, cells: Vec<usize>) -> Result<Arc<Self>> {
        let d = sides.len();
        if d == 0 || d > 2 || cells.len() != d {
            return Err(GridError::BadDimension(if cells.len() != d { cells.len() } else { d }));
        }
        for (axis, &s) in sides.iter().enumerate() {
            if !(s > T::zero()) || !s.is_finite() {
                return Err(GridError::BadSide { axis, side: s.as_f64() });
            }
        }
        for (axis, &n) in cells.iter().enumerate() {
            if n == 0 {
                return Err(GridError::BadCellCount { axis });
            }
        }
        Ok(Arc::new(Domain { sides, cells }))
    }

    /// Convenience constructor for a 1D interval `[0, length]`.
    pub fn line(length: T, cells: usize) -> Result<Arc<Self>> {
        Domain::new(vec![length], vec![cells])
    }

    pub fn dimension(&self) -> usize {
        self.sides.len()
    }

    pub fn side_lengths(&self) -> &[T] {
        &self.sides
    }

    pub fn cells_per_axis(&self) -> &[usize] {
        &self.cells
    }

    /// Total number of cells.
    pub fn len(&self) -> usize {
        self.cells.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn spacing(&self, axis: usize) -> T {
        self.sides[axis] / T::from_usize(self.cells[axis]).unwrap()
    }

    pub fn cell_volume(&self) -> T {
        (0..self.dimension()).map(|a| self.spacing(a)).fold(T::one(), |p, h| p * h)
    }

    pub fn volume(&self) -> T {
        self.sides.iter().fold(T::one(), |p, &s| p * s)
    }

    /// Squared diameter of the box; sets the scale of transport costs.
    pub fn diameter_squared(&self) -> T {
        self.sides.iter().fold(T::zero(), |acc, &s| acc + s * s)
    }

    /// Decomposes a linear index, axis 0 outermost.
    pub fn multi_index(&self, idx: usize) -> [usize; 2] {
        match self.cells[..] {
            [_] => [idx, 0],
            [_, n1] => [idx / n1, idx % n1],
            _ => unreachable!(),
        }
    }

    pub fn linear_index(&self, mi: [usize; 2]) -> usize {
        match self.cells[..] {
            [_] => mi[0],
            [_, n1] => mi[0] * n1 + mi[1],
            _ => unreachable!(),
        }
    }

    /// Center coordinates of a cell; the second entry is 0 in 1D.
    pub fn center(&self, idx: usize) -> [T; 2] {
        let mi = self.multi_index(idx);
        let mut c = [T::zero(); 2];
        for a in 0..self.dimension() {
            c[a] = (T::from_usize(mi[a]).unwrap() + T::lit(0.5)) * self.spacing(a);
        }
        c
    }

    /// Cell containing a point, with coordinates clipped into the box first.
    pub fn cell_containing(&self, point: [T; 2]) -> usize {
        let mut mi = [0usize; 2];
        for a in 0..self.dimension() {
            let h = self.spacing(a);
            let n = self.cells[a];
            let clipped = point[a].max(T::zero()).min(self.sides[a]);
            let i = (clipped / h).floor().to_usize().unwrap_or(0);
            mi[a] = i.min(n - 1);
        }
        self.linear_index(mi)
    }

    /// Whether a unit-mass density with `rho <= 1` can exist: `|Omega| > 1`.
    pub fn admits_capped_unit_mass(&self) -> bool {
        self.volume() > T::one()
    }
}

/// A scalar field sampled at cell centers.
#[derive(Debug, Clone, PartialEq)]
pub struct GridField<T> {
    domain: Arc<Domain<T>>,
    role: Role,
    values: Vec<T>,
}

impl<T: Scalar> GridField<T> {
    pub fn new(domain: &Arc<Domain<T>>, values: Vec<T>, role: Role) -> Result<Self> {
        if values.len() != domain.len() {
            return Err(GridError::LengthMismatch { expected: domain.len(), got: values.len() });
        }
        Ok(GridField { domain: Arc::clone(domain), role, values })
    }

    pub fn constant(domain: &Arc<Domain<T>>, value: T, role: Role) -> Self {
        GridField { domain: Arc::clone(domain), role, values: vec![value; domain.len()] }
    }

    pub fn zeros(domain: &Arc<Domain<T>>, role: Role) -> Self {
        Self::constant(domain, T::zero(), role)
    }

    /// Evaluates `f` at every cell center.
    pub fn from_fn(domain: &Arc<Domain<T>>, role: Role, mut f: impl FnMut([T; 2]) -> T) -> Self {
        let values = (0..domain.len()).map(|i| f(domain.center(i))).collect();
        GridField { domain: Arc::clone(domain), role, values }
    }

    pub fn domain(&self) -> &Arc<Domain<T>> {
        &self.domain
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn with_role(mut self, role: Role) -> Self {
        self.role = role;
        self
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn same_domain(&self, other: &Self) -> bool {
        Arc::ptr_eq(&self.domain, &other.domain) || *self.domain == *other.domain
    }

    fn check_domain(&self, other: &Self) -> Result<()> {
        if self.same_domain(other) {
            Ok(())
        } else {
            Err(GridError::DomainMismatch)
        }
    }

    pub fn assert_finite(&self) -> Result<()> {
        match self.values.iter().position(|v| !v.is_finite()) {
            Some(index) => Err(GridError::NonFinite { index }),
            None => Ok(()),
        }
    }

    /// Midpoint-rule integral over the domain.
    pub fn integrate(&self) -> T {
        let vol = self.domain.cell_volume();
        self.values.iter().copied().sum::<T>() * vol
    }

    /// `integral(self * other)`.
    pub fn integrate_against(&self, other: &Self) -> Result<T> {
        self.check_domain(other)?;
        let vol = self.domain.cell_volume();
        let s: T = self.values.iter().zip(&other.values).map(|(&a, &b)| a * b).sum();
        Ok(s * vol)
    }

    /// Mean value `integral(f) / |Omega|`.
    pub fn mean(&self) -> T {
        self.integrate() / self.domain.volume()
    }

    pub fn min_value(&self) -> T {
        self.values.iter().copied().fold(T::infinity(), T::min)
    }

    pub fn max_value(&self) -> T {
        self.values.iter().copied().fold(T::neg_infinity(), T::max)
    }

    /// Per-axis finite-difference gradient: central differences in the
    /// interior, one-sided at the boundary (exact for affine data). Errors
    /// when an axis has fewer than 2 cells.
    pub fn gradient(&self) -> Result<Vec<GridField<T>>> {
        let d = self.domain.dimension();
        for axis in 0..d {
            let n = self.domain.cells_per_axis()[axis];
            if n < 2 {
                return Err(GridError::TooCoarse { axis, cells: n });
            }
        }
        let mut out = Vec::with_capacity(d);
        for axis in 0..d {
            let h = self.domain.spacing(axis);
            let two_h = h + h;
            let n = self.domain.cells_per_axis()[axis];
            let mut g = vec![T::zero(); self.values.len()];
            for idx in 0..self.values.len() {
                let mi = self.domain.multi_index(idx);
                let i = mi[axis];
                let at = |j: usize| {
                    let mut m = mi;
                    m[axis] = j;
                    self.values[self.domain.linear_index(m)]
                };
                g[idx] = if i == 0 {
                    (at(1) - at(0)) / h
                } else if i == n - 1 {
                    (at(n - 1) - at(n - 2)) / h
                } else {
                    (at(i + 1) - at(i - 1)) / two_h
                };
            }
            out.push(GridField { domain: Arc::clone(&self.domain), role: Role::Generic, values: g });
        }
        Ok(out)
    }

    /// `||grad f||_{L^2}`: square root of the summed squared-component integrals.
    pub fn l2_norm_of_gradient(&self) -> Result<T> {
        let comps = self.gradient()?;
        let mut total = T::zero();
        for c in &comps {
            total += c.integrate_against(c)?;
        }
        Ok(total.sqrt())
    }

    /// Entropy `integral(rho ln rho)` with `0 ln 0 = 0`; rejects negative cells.
    pub fn entropy(&self) -> Result<T> {
        let mut acc = T::zero();
        for (index, &v) in self.values.iter().enumerate() {
            if v < T::zero() {
                return Err(GridError::NegativeDensity { index, value: v.as_f64() });
            }
            if v > T::zero() {
                acc += v * v.ln();
            }
        }
        Ok(acc * self.domain.cell_volume())
    }

    /// Full probability-density validation: nonnegative everywhere, unit mass
    /// within `mass_tol`, and when `capped` also `rho <= 1 + cap_tol`.
    pub fn validate_density(&self, mass_tol: T, cap_tol: T, capped: bool) -> Result<()> {
        self.assert_finite()?;
        for (index, &v) in self.values.iter().enumerate() {
            if v < T::zero() {
                return Err(GridError::NegativeDensity { index, value: v.as_f64() });
            }
            if capped && v > T::one() + cap_tol {
                return Err(GridError::CapacityViolation {
                    index,
                    excess: (v - T::one()).as_f64(),
                    tol: cap_tol.as_f64(),
                });
            }
        }
        let mass = self.integrate();
        if (mass - T::one()).abs() > mass_tol {
            return Err(GridError::MassViolation { mass: mass.as_f64(), tol: mass_tol.as_f64() });
        }
        Ok(())
    }

    /// `integral |a - b|`, the L1 distance between two fields.
    pub fn l1_distance(&self, other: &Self) -> Result<T> {
        self.check_domain(other)?;
        let vol = self.domain.cell_volume();
        let s: T = self.values.iter().zip(&other.values).map(|(&a, &b)| (a - b).abs()).sum();
        Ok(s * vol)
    }

    pub fn linf_distance(&self, other: &Self) -> Result<T> {
        self.check_domain(other)?;
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max))
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        GridField {
            domain: Arc::clone(&self.domain),
            role: self.role,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_with(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.check_domain(other)?;
        Ok(GridField {
            domain: Arc::clone(&self.domain),
            role: Role::Generic,
            values: self.values.iter().zip(&other.values).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    pub fn shift(&self, s: T) -> Self {
        self.map(|v| v + s)
    }
}

// ---------------------------------------------------------------------------
// CSV interchange
// ---------------------------------------------------------------------------

/// Writes the field as CSV: a `# domain:` header followed by one
/// `index,center...,value` row per cell in row-major order.
pub fn write_csv<T: Scalar, W: Write>(field: &GridField<T>, mut w: W) -> Result<()> {
    let dom = field.domain();
    let mut header = String::from("# domain: d=");
    let _ = write!(header, "{}", dom.dimension());
    header.push_str(" sides=");
    for (i, s) in dom.side_lengths().iter().enumerate() {
        if i > 0 {
            header.push(',');
        }
        let _ = write!(header, "{s}");
    }
    header.push_str(" cells=");
    for (i, n) in dom.cells_per_axis().iter().enumerate() {
        if i > 0 {
            header.push(',');
        }
        let _ = write!(header, "{n}");
    }
    let _ = write!(header, " role={}", field.role().as_str());
    writeln!(w, "{header}")?;
    for (idx, &v) in field.values().iter().enumerate() {
        let c = dom.center(idx);
        write!(w, "{idx}")?;
        for a in 0..dom.dimension() {
            write!(w, ",{}", c[a])?;
        }
        writeln!(w, ",{v}")?;
    }
    Ok(())
}

fn csv_err(line: usize, msg: impl Into<String>) -> GridError {
    GridError::Csv { line, msg: msg.into() }
}

fn parse_scalar<T: Scalar>(s: &str, line: usize) -> Result<T> {
    let x: f64 = s.trim().parse().map_err(|_| csv_err(line, format!("bad number {s:?}")))?;
    Ok(T::lit(x))
}

/// Parses a field written by [`write_csv`]. The header fixes the domain; every
/// cell must appear exactly once and in row-major order.
pub fn read_csv<T: Scalar, R: BufRead>(r: R) -> Result<GridField<T>> {
    let mut lines = r.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| csv_err(1, "empty file"))?;
    let header = header?;
    let rest = header
        .strip_prefix("# domain:")
        .ok_or_else(|| csv_err(1, "missing '# domain:' header"))?
        .trim();
    let mut d = None;
    let mut sides: Option<Vec<T>> = None;
    let mut cells: Option<Vec<usize>> = None;
    let mut role = None;
    for tok in rest.split_whitespace() {
        let (key, val) = tok.split_once('=').ok_or_else(|| csv_err(1, format!("bad token {tok:?}")))?;
        match key {
            "d" => d = Some(val.parse::<usize>().map_err(|_| csv_err(1, "bad dimension"))?),
            "sides" => {
                sides = Some(
                    val.split(',').map(|s| parse_scalar::<T>(s, 1)).collect::<Result<Vec<_>>>()?,
                )
            }
            "cells" => {
                cells = Some(
                    val.split(',')
                        .map(|s| s.parse::<usize>().map_err(|_| csv_err(1, "bad cell count")))
                        .collect::<Result<Vec<_>>>()?,
                )
            }
            "role" => {
                role = Some(Role::parse(val).ok_or_else(|| csv_err(1, format!("unknown role {val:?}")))?)
            }
            _ => return Err(csv_err(1, format!("unknown header key {key:?}"))),
        }
    }
    let d = d.ok_or_else(|| csv_err(1, "header missing d"))?;
    let sides = sides.ok_or_else(|| csv_err(1, "header missing sides"))?;
    let cells = cells.ok_or_else(|| csv_err(1, "header missing cells"))?;
    let role = role.ok_or_else(|| csv_err(1, "header missing role"))?;
    if sides.len() != d || cells.len() != d {
        return Err(csv_err(1, "header dimension disagrees with sides/cells"));
    }
    let domain = Domain::new(sides, cells)?;
    let n = domain.len();
    let mut values = vec![T::zero(); n];
    let mut seen = 0usize;
    for (lineno, line) in lines {
        let line = line?;
        let lineno = lineno + 1;
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split(',');
        let idx: usize = parts
            .next()
            .ok_or_else(|| csv_err(lineno, "missing index"))?
            .trim()
            .parse()
            .map_err(|_| csv_err(lineno, "bad index"))?;
        if idx != seen {
            return Err(csv_err(lineno, format!("expected row-major index {seen}, got {idx}")));
        }
        if idx >= n {
            return Err(csv_err(lineno, format!("index {idx} out of range ({n} cells)")));
        }
        for _ in 0..d {
            parts.next().ok_or_else(|| csv_err(lineno, "missing center coordinate"))?;
        }
        let v = parts.next().ok_or_else(|| csv_err(lineno, "missing value"))?;
        if parts.next().is_some() {
            return Err(csv_err(lineno, "trailing fields"));
        }
        values[idx] = parse_scalar(v, lineno)?;
        seen += 1;
    }
    if seen != n {
        return Err(csv_err(0, format!("expected {n} rows, got {seen}")));
    }
    GridField::new(&domain, values, role)
}
