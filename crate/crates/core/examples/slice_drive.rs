//! Drives one interior and one terminal slice solve on a line and prints the
//! convergence record, then cross-checks the histogram transport value
//! against its own dual pairing. Run with
//! `cargo run -p mfg-core --example slice_drive`.

use mfg_core::slice::{solve_interior_slice, solve_terminal_slice, SliceConfig, SliceScratch};
use mfg_core::transport::EntropicSolver;
use mfg_core::{Domain64, Field64};
use mfg_core::grid::Role;

fn main() {
    let dom: std::sync::Arc<Domain64> = Domain64::line(2.0, 48).unwrap();
    let solver = EntropicSolver::new(&dom);
    let uniform = Field64::constant(&dom, 0.5, Role::Density);
    let ramp = Field64::from_fn(&dom, Role::Density, |x| 0.2 + 0.3 * x[0]);
    let ramp = ramp.scale(1.0 / ramp.integrate());
    let well = Field64::from_fn(&dom, Role::Potential, |x| 18.0 * (x[0] - 1.0).powi(2));
    let psi = Field64::from_fn(&dom, Role::Potential, |x| 2.0 * x[0]);

    let cfg = SliceConfig::new(4e-4);
    let mut scratch = SliceScratch::default();

    let sol = solve_interior_slice(
        &solver, &uniform, &ramp, &well, 0.05, 0.25, &uniform, &cfg, &mut scratch,
    )
    .unwrap();
    let saturated = sol.rho.values().iter().filter(|&&r| r == 1.0).count();
    let bad_pressure = sol
        .rho
        .values()
        .iter()
        .zip(sol.pressure.values())
        .filter(|(&r, &p)| r < 1.0 && p != 0.0)
        .count();
    println!("interior: objective {:.9}", sol.objective);
    println!("interior: gap {:.3e} residual {:.3e} iterations {}", sol.gap, sol.fp_residual, sol.iterations);
    println!("interior: mass {:.12} max_rho {:.6}", sol.rho.integrate(), sol.rho.values().iter().cloned().fold(0.0, f64::max));
    println!("interior: saturated_cells {saturated} pressure_on_unsaturated {bad_pressure}");

    let tsol = solve_terminal_slice(&solver, &ramp, &psi, 0.05, 0.25, &ramp, &cfg, &mut scratch)
        .unwrap();
    println!("terminal: objective {:.9} gap {:.3e} iterations {}", tsol.objective, tsol.gap, tsol.iterations);
    println!("terminal: mass {:.12}", tsol.rho.integrate());

    let pair = solver.quantile_potentials(&uniform, &ramp).unwrap();
    let pairing = pair.phi.integrate_against(&uniform).unwrap()
        + pair.psi.integrate_against(&ramp).unwrap();
    println!("transport: value {:.12e} dual_pairing {:.12e} diff {:.3e}",
        pair.transport_value, pairing, (pair.transport_value - pairing).abs());

    // Translated block: W2^2/2 = shift^2/2 exactly, independent of engine.
    let block_a = Field64::from_fn(&dom, Role::Density, |x| if x[0] < 1.0 { 1.0 } else { 1e-12 });
    let block_a = block_a.scale(1.0 / block_a.integrate());
    let block_b = Field64::from_fn(&dom, Role::Density, |x| if x[0] >= 1.0 { 1.0 } else { 1e-12 });
    let block_b = block_b.scale(1.0 / block_b.integrate());
    let shifted = solver.quantile_potentials(&block_a, &block_b).unwrap();
    println!("transport: translated_block value {:.9} expected 0.500", shifted.transport_value);
}
