use mfg_core::grid::{GridField, Role};
use mfg_core::scheme::*;
use mfg_core::slice::*;
use mfg_core::transport::EntropicSolver;

fn main() {
    let cfg = SolverConfig {
        domain: DomainSpec { sides: vec![2.0], cells: vec![64] },
        n_steps: 8,
        lambda: 0.01,
        running_potential: PotentialSpec::Zero,
        terminal_potential: PotentialSpec::Affine { slope: vec![5.0], offset: 0.0 },
        initial_density: InitialDensity::Uniform,
        epsilon: None,
        sweeps: SweepSettings::default(),
    };
    let inst: Instance<f64> = cfg.instantiate().unwrap();
    let n = inst.n_steps;
    let tau = inst.tau();
    let lambda = inst.lambda;
    let solver = EntropicSolver::new(&inst.domain);
    let mut dens: Vec<GridField<f64>> = vec![inst.rho0.clone(); n + 1];
    let mut scratch = SliceScratch::default();

    for sweep in 0..6 {
        for k in 1..=n {
            let init = dens[k].clone();
            let result = if k < n {
                let (head, tail) = dens.split_at(k);
                solve_interior_slice(
                    &solver, &head[k - 1], &tail[1], &inst.running, tau, lambda, &init,
                    &inst.slice_cfg, &mut scratch,
                )
            } else {
                solve_terminal_slice(
                    &solver, &dens[n - 1], &inst.terminal, tau, lambda, &init,
                    &inst.slice_cfg, &mut scratch,
                )
            };
            match result {
                Ok(s) => {
                    println!(
                        "sweep {sweep} k={k} its={} gap={:+.3e} fp={:.3e} obj={:+.8}",
                        s.iterations, s.gap, s.fp_residual, s.objective
                    );
                    dens[k] = s.rho;
                }
                Err(e) => {
                    println!("sweep {sweep} k={k} FAILED: {e}");
                    // Trace the undamped fixed point on this slice by hand.
                    let prev = &dens[k - 1];
                    let (pot_scale, grad_scale, base) = if k < n {
                        (1.0 / (tau * tau), tau, inst.running.clone())
                    } else {
                        (1.0 / tau, 1.0, inst.terminal.clone())
                    };
                    let next = if k < n { Some(dens[k + 1].clone()) } else { None };
                    let mut rho = init.map(|v| v.max(1e-300));
                    for it in 0..40 {
                        let mut h = solver.quantile_potentials(&rho, prev).unwrap().phi.scale(pot_scale);
                        if let Some(nx) = &next {
                            h = h.add(&solver.quantile_potentials(&rho, nx).unwrap().phi.scale(pot_scale)).unwrap();
                        }
                        let h = h.add(&base).unwrap();
                        let (c, rho_new) = level_constant(&h, lambda).unwrap();
                        let resid = rho_new.l1_distance(&rho).unwrap();
                        let gap = grad_scale
                            * (h.integrate_against(&rho).unwrap() - h.integrate_against(&rho_new).unwrap()
                                + lambda * (rho.entropy().unwrap() - rho_new.entropy().unwrap()));
                        let sat = rho_new.values().iter().filter(|&&v| v >= 1.0 - 1e-9).count();
                        // where is the biggest change?
                        let (mut wi, mut wv) = (0usize, 0.0f64);
                        for (i, (&a, &b)) in rho_new.values().iter().zip(rho.values()).enumerate() {
                            if (a - b).abs() > wv { wv = (a - b).abs(); wi = i; }
                        }
                        println!(
                            "  it={it} resid={resid:.3e} gap={gap:+.3e} c={c:+.5} sat={sat} worst cell {wi} delta {wv:+.3e}"
                        );
                        rho = rho_new.map(|v| v.max(1e-300));
                    }
                    return;
                }
            }
        }
    }
}
