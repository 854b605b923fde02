//! Fixtures and independent oracles shared by the integration tests.

#![allow(dead_code)]

use mfg_switch::grid::{build_grid, DoorSpec, Field, FieldKind, GeometrySpec, GridGeometry, Rect};
use mfg_switch::hamiltonian::{continuous_hamiltonian, godunov_hamiltonian, CongestionCost, HamiltonianMode};
use mfg_switch::newton::{NonlinearSystem, PreconditionerKind, SolverConfig};
use mfg_switch::residual::SegmentParams;
use mfg_switch::scenario::{Dynamics, Meta, Population, Resolution, Scenario};
use mfg_switch::switching::{SegmentedProblem, SwitchingSystem};
use nalgebra::{DMatrix, DVector};

/// A 1-D problem on `[0, 1]` with doors at both ends.
pub struct LineProblem {
    pub problem: SegmentedProblem,
    pub params: SegmentParams,
    pub terminal: Field,
    pub initial: Field,
}

impl LineProblem {
    pub fn new(cells: usize, steps: usize, nu: f64, mode: HamiltonianMode) -> Self {
        let h = 1.0 / cells as f64;
        let grid = GridGeometry::line(cells, h, true, true).unwrap();
        let horizon = 1.0;
        let problem = SegmentedProblem::single(grid, horizon, steps).unwrap();
        let g = problem.first_grid().clone();
        // Zero on the door nodes, a smooth bump inside.
        let initial = Field::from_fn(&g, FieldKind::Density, |p| {
            let x = p[0];
            if x < 0.5 * h || x > 1.0 - 0.5 * h {
                0.0
            } else {
                0.5 + (std::f64::consts::PI * x).sin()
            }
        });
        LineProblem {
            params: SegmentParams {
                nu,
                dt: horizon / steps as f64,
                cost: CongestionCost {
                    c_time: 0.1,
                    ..CongestionCost::evacuation()
                },
                mode,
            },
            terminal: Field::zeros(&g, FieldKind::ValueFunction),
            initial,
            problem,
        }
    }

    pub fn system(&self) -> SwitchingSystem<'_> {
        SwitchingSystem::new(
            &self.problem,
            self.params,
            &self.terminal,
            &self.initial,
            PreconditionerKind::Heat,
        )
        .unwrap()
    }

    /// Waiting-cost `U` and frozen `M`, the same kind of start the solver uses.
    pub fn guess(&self) -> Vec<f64> {
        let g = self.problem.first_grid();
        let a = g.active_count();
        let n = self.problem.total_steps;
        let m0 = g.compress(&self.initial).unwrap();
        let mut z = vec![0.0; 2 * (n + 1) * a];
        for k in 0..=n {
            for s in 0..a {
                if !g.is_door_slot(s) {
                    z[k * a + s] = self.params.cost.c_time * (n - k) as f64 * self.params.dt;
                }
                z[(n + 1 + k) * a + s] = m0[s];
            }
        }
        z
    }
}

/// Dense Jacobian assembled one column at a time with central differences.
pub fn dense_jacobian<S: NonlinearSystem>(sys: &S, z: &[f64], rel_step: f64) -> DMatrix<f64> {
    let n = sys.dim();
    let mut jac = DMatrix::zeros(n, n);
    let mut zp = z.to_vec();
    let mut rp = vec![0.0; n];
    let mut rm = vec![0.0; n];
    for j in 0..n {
        let step = rel_step * z[j].abs().max(1.0);
        zp[j] = z[j] + step;
        sys.residual(&zp, &mut rp).unwrap();
        zp[j] = z[j] - step;
        sys.residual(&zp, &mut rm).unwrap();
        zp[j] = z[j];
        for i in 0..n {
            jac[(i, j)] = (rp[i] - rm[i]) / (2.0 * step);
        }
    }
    jac
}

pub fn sup(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |a, x| a.max(x.abs()))
}

/// Plain Newton with dense LU solves and sup-norm step halving.
pub fn dense_newton<S: NonlinearSystem>(sys: &S, z0: &[f64], tol: f64) -> Vec<f64> {
    let n = sys.dim();
    let mut z = z0.to_vec();
    let mut r = vec![0.0; n];
    sys.residual(&z, &mut r).unwrap();
    for _ in 0..60 {
        let norm = sup(&r);
        if norm <= tol {
            return z;
        }
        let jac = dense_jacobian(sys, &z, 1e-6);
        let step = jac.lu().solve(&DVector::from_column_slice(&r)).expect("singular Jacobian");
        let mut lambda = 1.0;
        loop {
            let trial: Vec<f64> = z.iter().zip(step.iter()).map(|(a, b)| a - lambda * b).collect();
            let mut rt = vec![0.0; n];
            sys.residual(&trial, &mut rt).unwrap();
            if sup(&rt) < norm || lambda < 1e-3 {
                z = trial;
                r = rt;
                break;
            }
            lambda *= 0.5;
        }
    }
    panic!("dense Newton oracle did not converge: {}", sup(&r));
}

/// Closed square `[0, side]²` with `cells` cells per axis.
pub fn closed_square(side: f64, cells: usize) -> GridGeometry {
    let spec = GeometrySpec {
        domain: Rect::new(0.0, 0.0, side, side),
        obstacles: Vec::new(),
        doors: Vec::new(),
    };
    build_grid(&spec, cells, cells).unwrap()
}

/// Mean absolute error of the Godunov Hamiltonian of `u = x + 2y` over every
/// node of a closed 8 m square, against `H(m, (1, 2))`.
pub fn godunov_mean_error(h: f64) -> f64 {
    let cells = (8.0 / h).round() as usize;
    let g = closed_square(8.0, cells);
    let cost = CongestionCost::evacuation();
    let m = 0.5;
    let u = g.compress(&Field::from_fn(&g, FieldKind::ValueFunction, |p| p[0] + 2.0 * p[1])).unwrap();
    let exact = continuous_hamiltonian(m, [1.0, 2.0], &cost).unwrap();
    let a = g.active_count();
    (0..a)
        .map(|s| {
            let q = g.one_sided(&u, s);
            (godunov_hamiltonian(m, q, &cost, HamiltonianMode::Mfg).unwrap() - exact).abs()
        })
        .sum::<f64>()
        / a as f64
}

/// Least-squares slope of `log e` against `log h`.
pub fn observed_order(hs: &[f64], errs: &[f64]) -> f64 {
    let xs: Vec<f64> = hs.iter().map(|h| h.ln()).collect();
    let ys: Vec<f64> = errs.iter().map(|e| e.ln()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let num: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let den: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    num / den
}

/// Relative L² error (over all levels) of the coupled solve with the
/// Hamiltonian switched off, against `1 + A cos(πx/L) cos(πy/L) e^{−2ν(π/L)² t}`
/// on a closed 10 m square.
pub fn heat_limit_error(h: f64) -> f64 {
    use mfg_switch::newton::newton_solve;
    use std::f64::consts::PI;
    let side = 10.0;
    let cells = (side / h).round() as usize;
    let (nu, horizon, amp) = (0.5, 4.0, 0.5);
    let steps = (16.0 / h).round() as usize;
    let g = closed_square(side, cells);
    let problem = SegmentedProblem::single(g, horizon, steps).unwrap();
    let g = problem.first_grid().clone();
    let k = PI / side;
    let exact = |t: f64, p: [f64; 2]| 1.0 + amp * (k * p[0]).cos() * (k * p[1]).cos() * (-2.0 * nu * k * k * t).exp();
    let initial = Field::from_fn(&g, FieldKind::Density, |p| exact(0.0, p));
    let terminal = Field::zeros(&g, FieldKind::ValueFunction);
    let params = SegmentParams {
        nu,
        dt: horizon / steps as f64,
        cost: CongestionCost {
            c_move: f64::INFINITY,
            c_time: 0.0,
            ..CongestionCost::evacuation()
        },
        mode: HamiltonianMode::Mfg,
    };
    let sys = SwitchingSystem::new(&problem, params, &terminal, &initial, PreconditionerKind::Heat).unwrap();
    let a = g.active_count();
    let mut z0 = vec![0.0; 2 * (steps + 1) * a];
    let m0 = g.compress(&initial).unwrap();
    for n in 0..=steps {
        z0[(steps + 1 + n) * a..(steps + 2 + n) * a].copy_from_slice(&m0);
    }
    let cfg = SolverConfig {
        newton_tol: 1e-11,
        krylov_tol: 1e-7,
        ..Default::default()
    };
    let (z, _) = newton_solve(&sys, &z0, &cfg).unwrap();
    let (mut err, mut norm) = (0.0, 0.0);
    for n in 0..=steps {
        let t = n as f64 * params.dt;
        for (s, &node) in g.active_nodes().iter().enumerate() {
            let e = exact(t, g.node_xy(node));
            let d = z[(steps + 1 + n) * a + s] - e;
            err += d * d;
            norm += e * e;
        }
    }
    (err / norm).sqrt()
}

/// A 10 m room with a central obstacle, two bottom doors and 40 people.
/// Left-right symmetric.
pub fn small_room(doors: bool) -> Scenario {
    Scenario {
        meta: Meta::default(),
        geometry: GeometrySpec {
            domain: Rect::new(0.0, 0.0, 10.0, 10.0),
            obstacles: vec![Rect::new(4.0, 6.0, 6.0, 8.0)],
            doors: if doors {
                vec![
                    DoorSpec::new("left", [0.0, 0.0], [2.0, 0.0]),
                    DoorSpec::new("right", [8.0, 0.0], [10.0, 0.0]),
                ]
            } else {
                Vec::new()
            },
        },
        population: Population {
            total: 40.0,
            regions: vec![Rect::new(1.0, 1.0, 9.0, 4.0)],
        },
        cost: CongestionCost {
            c_time: 0.05,
            ..CongestionCost::evacuation()
        },
        dynamics: Dynamics {
            nu: 0.1,
            horizon: 4.0,
            steps: 8,
            mode: HamiltonianMode::Mfg,
            terminal_cost: 0.0,
        },
        resolution: Resolution { nx: 10, ny: 10 },
        events: Vec::new(),
        solver: SolverConfig::default(),
    }
}


/// Sup-norm gap between matrix-free Newton and the dense oracle on the
/// 1-D instance (8 cells, 4 steps, `ν = 0.5`), and how far the solution
/// moved from the initial guess.
pub fn dense_oracle_gap(mode: HamiltonianMode) -> (f64, f64) {
    use mfg_switch::newton::newton_solve;
    let lp = LineProblem::new(8, 4, 0.5, mode);
    let sys = lp.system();
    let z0 = lp.guess();
    let oracle = dense_newton(&sys, &z0, 1e-13);
    let (z, diag) = newton_solve(&sys, &z0, &tight()).unwrap();
    assert!(diag.converged);
    let diff: Vec<f64> = z.iter().zip(&oracle).map(|(a, b)| a - b).collect();
    let moved: Vec<f64> = z.iter().zip(&z0).map(|(a, b)| a - b).collect();
    (sup(&diff), sup(&moved))
}

/// Worst relative error of the directional-difference product against the
/// column-assembled Jacobian over `points` random states of a 5×5 room.
pub fn jvp_worst_error(mode: HamiltonianMode, points: usize, seed: u64) -> f64 {
    use mfg_switch::newton::jacobian_vector_product;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};
    let mut rng = StdRng::seed_from_u64(seed);
    let mut s = small_room(true);
    s.resolution.nx = 5;
    s.resolution.ny = 5;
    s.geometry.obstacles.clear();
    s.dynamics.steps = 3;
    s.dynamics.mode = mode;
    let d = s.discretize().unwrap();
    let sys = SwitchingSystem::new(&d.problem, d.params, &d.terminal_u, &d.initial_m, s.solver.preconditioner).unwrap();
    let n = sys.dim();
    let half = n / 2;
    let mut worst: f64 = 0.0;
    for _ in 0..points {
        let z: Vec<f64> = (0..n)
            .map(|i| if i < half { rng.random_range(0.0..1.0) } else { rng.random_range(0.2..2.0) })
            .collect();
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let jac = dense_jacobian(&sys, &z, 1e-6);
        let expected = &jac * DVector::from_column_slice(&v);
        let got = jacobian_vector_product(&sys, &z, &v, 1e-7).unwrap();
        worst = worst.max((DVector::from_vec(got) - &expected).norm() / expected.norm());
    }
    worst
}

/// Outcome of solving the small room whole and cut at an arbitrary time.
pub struct SegmentationCheck {
    /// Largest difference over all levels of `U` and `M`.
    pub gap: f64,
    /// Shared slices are bitwise equal on both sides of the cut.
    pub shared_identical: bool,
    /// People just before and just after the cut.
    pub mass_before: f64,
    pub mass_after: f64,
}

pub fn segmentation_check() -> SegmentationCheck {
    use mfg_switch::switching::{partition_timeline, solve_switching, SwitchEvent};
    let s = small_room(true);
    let d = s.discretize().unwrap();
    let cfg = SolverConfig {
        newton_tol: 1e-11,
        krylov_tol: 1e-10,
        nu_schedule: vec![0.4, 0.1],
        ..Default::default()
    };
    let (whole, _) = solve_switching(&d.problem, &d.terminal_u, &d.initial_m, &d.params, &cfg).unwrap();
    let g = (**d.problem.first_grid()).clone();
    let h2 = g.h() * g.h();
    let cut = SwitchEvent {
        time: 1.3,
        edits: Vec::new(),
    };
    let split = partition_timeline(s.dynamics.horizon, s.dynamics.steps, g, &[cut]).unwrap();
    assert_eq!(split.segments.len(), 2);
    let (parts, _) = solve_switching(&split, &d.terminal_u, &d.initial_m, &d.params, &cfg).unwrap();
    let mut gap: f64 = 0.0;
    for k in 0..=s.dynamics.steps {
        for (a, b) in [(whole.value(k), parts.value(k)), (whole.density(k), parts.density(k))] {
            gap = a.iter().zip(b).fold(gap, |g, (x, y)| g.max((x - y).abs()));
        }
    }
    let (s0, s1) = (&parts.segments[0], &parts.segments[1]);
    let shared_identical =
        s0.u.slice(s0.steps()) == s1.u.slice(0) && s0.m.slice(s0.steps()) == s1.m.slice(0);
    let e = split.snaps[0].step;
    SegmentationCheck {
        gap,
        shared_identical,
        mass_before: parts.density_before(e).1.iter().sum::<f64>() * h2,
        mass_after: parts.density(e).iter().sum::<f64>() * h2,
    }
}

/// Largest change of the head count over all levels, absolute and relative.
pub fn population_drift(s: &Scenario) -> (f64, f64) {
    let r = mfg_switch::analysis::SolveResult::solve(s).unwrap();
    let curve = r.mass_curve();
    let p0 = curve[0].1;
    let worst = curve.iter().map(|(_, p)| (p - p0).abs()).fold(0.0, f64::max);
    (worst, worst / p0)
}

fn tight() -> SolverConfig {
    SolverConfig {
        newton_tol: 1e-12,
        krylov_tol: 1e-9,
        ..Default::default()
    }
}
