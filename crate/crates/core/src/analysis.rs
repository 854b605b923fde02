//! Post-processing of converged solves: remaining population, cost
//! functionals, the price of anarchy, velocity fields and zero-noise agent
//! trajectories.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::grid::{CellKind, Edge, GridGeometry, Rect};
use crate::hamiltonian::{upwind_partials, CongestionCost};
use crate::newton::{SolveDiagnostics, SolveError};
use crate::residual::SegmentParams;
use crate::scenario::{Discretized, Scenario};
use crate::switching::{solve_switching, GlobalState, SegmentedProblem};

/// A converged (or attempted) solve with everything needed to interpret it.
#[derive(Debug, Clone)]
pub struct SolveResult {
    pub scenario: Scenario,
    pub problem: SegmentedProblem,
    pub params: SegmentParams,
    pub state: GlobalState,
    pub diagnostics: SolveDiagnostics,
}

impl SolveResult {
    /// Discretize and solve a scenario with its own solver settings.
    pub fn solve(scenario: &Scenario) -> std::result::Result<Self, SolveError> {
        let Discretized {
            problem,
            params,
            initial_m,
            terminal_u,
        } = scenario.discretize()?;
        let (state, diagnostics) =
            solve_switching(&problem, &terminal_u, &initial_m, &params, &scenario.solver)?;
        Ok(SolveResult {
            scenario: scenario.clone(),
            problem,
            params,
            state,
            diagnostics,
        })
    }

    pub fn dt(&self) -> f64 {
        self.problem.dt
    }

    pub fn total_steps(&self) -> usize {
        self.problem.total_steps
    }

    /// People inside the domain at global level `k`.
    pub fn population_at_step(&self, k: usize) -> f64 {
        let g = self.state.grid_at(k);
        g.h() * g.h() * self.state.density(k).iter().sum::<f64>()
    }

    /// `(t, persons)` at every time level.
    pub fn mass_curve(&self) -> Vec<(f64, f64)> {
        (0..=self.total_steps())
            .map(|k| (k as f64 * self.dt(), self.population_at_step(k)))
            .collect()
    }

    fn level_of(&self, t: f64) -> Result<f64> {
        let horizon = self.problem.horizon;
        let tol = 1e-9 * horizon.max(1.0);
        if !(t >= -tol && t <= horizon + tol) {
            return Err(Error::Input(format!("time {t} outside [0, {horizon}]")));
        }
        Ok((t / self.dt()).clamp(0.0, self.total_steps() as f64))
    }
}

/// People left in the domain at time `t`, linear between time levels.
pub fn remaining_population(result: &SolveResult, t: f64) -> Result<f64> {
    let s = result.level_of(t)?;
    let k0 = s.floor() as usize;
    let k1 = (k0 + 1).min(result.total_steps());
    let w = s - k0 as f64;
    let p0 = result.population_at_step(k0);
    if w == 0.0 || k1 == k0 {
        return Ok(p0);
    }
    Ok((1.0 - w) * p0 + w * result.population_at_step(k1))
}

/// Per-agent expected cost of a solved state.
///
/// Each step pairs `U^n` with `M^{n+1}`, as the discrete equations do: the
/// control on step `n` is the upwind feedback `α = −∂H̃/∂q`, its kinetic cost
/// is `c_move (1+m)^β Σ_k (∂H̃/∂q_k)²`, and the time penalty accrues for
/// everyone still inside.
pub fn state_cost(state: &GlobalState, cost: &CongestionCost, dt: f64, population: f64) -> Result<f64> {
    if !(population > 0.0) {
        return Err(Error::Domain("initial population must be positive".into()));
    }
    let mut total = 0.0;
    for seg in &state.segments {
        let g = seg.grid();
        let h2 = g.h() * g.h();
        for n in 0..seg.steps() {
            let u = seg.u.slice(n);
            let m = seg.m.slice(n + 1);
            let mut level = 0.0;
            for s in 0..g.active_count() {
                if g.is_door_slot(s) || m[s] == 0.0 {
                    continue;
                }
                let mm = m[s].max(0.0);
                let dp = upwind_partials(cost.coefficient(mm), &g.one_sided(u, s));
                let ax = dp[0].hypot(dp[1]);
                let ay = dp[2].hypot(dp[3]);
                level += m[s] * cost.running_cost(mm, [ax, ay]);
            }
            total += dt * h2 * level;
        }
    }
    Ok(total / population)
}

/// Per-agent expected cost of a converged result.
pub fn total_cost(result: &SolveResult) -> Result<f64> {
    if !result.diagnostics.converged {
        return Err(Error::Input(format!(
            "solve did not converge (final residual {:e})",
            result.diagnostics.final_residual()
        )));
    }
    state_cost(
        &result.state,
        &result.params.cost,
        result.dt(),
        result.scenario.population.total,
    )
}

/// `J_MFG / J_MFC`.
pub fn price_of_anarchy(j_mfg: f64, j_mfc: f64) -> Result<f64> {
    if !(j_mfc > 0.0) || !j_mfg.is_finite() {
        return Err(Error::Domain(format!(
            "price of anarchy needs a positive social cost, got {j_mfc}"
        )));
    }
    let ratio = j_mfg / j_mfc;
    if ratio < 1.0 - 1e-9 {
        return Err(Error::Domain(format!(
            "equilibrium cost {j_mfg} is below the social optimum {j_mfc}"
        )));
    }
    Ok(ratio)
}

/// Optimal velocity at every active node of one time level.
#[derive(Debug, Clone)]
pub struct VelocityField {
    pub grid: Arc<GridGeometry>,
    pub step: usize,
    /// Per active slot.
    pub vx: Vec<f64>,
    pub vy: Vec<f64>,
}

/// `−H_p(m, ∇U)` with the centred gradient at the level nearest to `t`.
pub fn velocity_field(result: &SolveResult, t: f64) -> Result<VelocityField> {
    let k = result.level_of(t)?.round() as usize;
    Ok(velocity_at_step(&result.state, &result.params.cost, k))
}

pub fn velocity_at_step(state: &GlobalState, cost: &CongestionCost, k: usize) -> VelocityField {
    let grid = state.grid_at(k).clone();
    let u = state.value(k);
    let m = state.density(k);
    let n = grid.active_count();
    let mut vx = vec![0.0; n];
    let mut vy = vec![0.0; n];
    for s in 0..n {
        let g = grid.centred_gradient(u, s);
        let c = 2.0 * cost.coefficient(m[s].max(0.0));
        vx[s] = -c * g[0];
        vy[s] = -c * g[1];
    }
    VelocityField {
        grid,
        step: k,
        vx,
        vy,
    }
}

/// Mean density over the active nodes inside `band` at level `k`.
pub fn band_mean_density(state: &GlobalState, k: usize, band: &Rect, side: Side) -> Result<f64> {
    let (g, m) = match side {
        Side::Before => state.density_before(k),
        Side::After => (state.grid_at(k), state.density(k)),
    };
    let mut sum = 0.0;
    let mut count = 0usize;
    for (s, &node) in g.active_nodes().iter().enumerate() {
        if band.contains(g.node_xy(node), 1e-9) {
            sum += m[s];
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Input("band contains no active nodes".into()));
    }
    Ok(sum / count as f64)
}

/// Which limit to take at an event level.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    /// Pre-event geometry and density.
    Before,
    /// Post-event geometry; newly opened nodes start empty.
    After,
}

/// One-sided slopes of the remaining-population curve around an event.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlopeReport {
    pub time: f64,
    pub step: usize,
    /// `(P(t_e) − P(t_e − Δt)) / Δt`.
    pub slope_before: f64,
    /// `(P(t_e + Δt) − P(t_e)) / Δt`.
    pub slope_after: f64,
}

impl SlopeReport {
    /// Change in outflow rate (persons per minute); positive means faster evacuation.
    pub fn rate_increase(&self) -> f64 {
        self.slope_before - self.slope_after
    }
}

/// Slope reports at every event of a run.
pub fn event_slopes(result: &SolveResult) -> Vec<SlopeReport> {
    let dt = result.dt();
    result
        .problem
        .snaps
        .iter()
        .map(|snap| {
            let k = snap.step;
            let p = |k: usize| result.population_at_step(k);
            SlopeReport {
                time: snap.snapped,
                step: k,
                slope_before: (p(k) - p(k - 1)) / dt,
                slope_after: (p(k + 1) - p(k)) / dt,
            }
        })
        .collect()
}

/// Path of one zero-noise agent.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub id: usize,
    /// `(t, x, y)`, one entry per time level until exit, plus the exit point.
    pub points: Vec<(f64, f64, f64)>,
    /// Name of the door used, if the agent left.
    pub exit: Option<String>,
    pub departed: bool,
}

/// Cell-centred `n × n` grid of positions covering a rectangle.
pub fn uniform_starts(domain: &Rect, n: usize) -> Vec<[f64; 2]> {
    let dx = domain.width() / n as f64;
    let dy = domain.height() / n as f64;
    let mut out = Vec::with_capacity(n * n);
    for j in 0..n {
        for i in 0..n {
            out.push([
                domain.x_min + (i as f64 + 0.5) * dx,
                domain.y_min + (j as f64 + 0.5) * dy,
            ]);
        }
    }
    out
}

/// [`uniform_starts`] over the grid extent, dropping points inside obstacles.
pub fn free_starts(grid: &GridGeometry, n: usize) -> Vec<[f64; 2]> {
    uniform_starts(&grid.extent(), n)
        .into_iter()
        .filter(|p| !grid.in_obstacle(*p))
        .collect()
}

/// Node-wise fields driving the agents on one time step.
struct StepField {
    grid: Arc<GridGeometry>,
    m: Vec<f64>,
    gx: Vec<f64>,
    gy: Vec<f64>,
}

impl StepField {
    fn new(state: &GlobalState, n: usize) -> Self {
        let (grid, u, m) = state.step_pair(n);
        let nodes = grid.node_count();
        let mut mf = vec![0.0; nodes];
        let mut gx = vec![0.0; nodes];
        let mut gy = vec![0.0; nodes];
        for (s, &k) in grid.active_nodes().iter().enumerate() {
            mf[k] = m[s].max(0.0);
            let g = grid.centred_gradient(u, s);
            gx[k] = g[0];
            gy[k] = g[1];
        }
        StepField {
            grid: grid.clone(),
            m: mf,
            gx,
            gy,
        }
    }

    fn velocity(&self, p: [f64; 2], cost: &CongestionCost) -> [f64; 2] {
        let g = &self.grid;
        let o = g.origin();
        let (nx, ny) = (g.nx(), g.ny());
        let fx = ((p[0] - o[0]) / g.h()).clamp(0.0, nx as f64);
        let fy = ((p[1] - o[1]) / g.h()).clamp(0.0, ny as f64);
        let i = (fx.floor() as usize).min(nx.saturating_sub(1));
        let j = if ny == 0 { 0 } else { (fy.floor() as usize).min(ny - 1) };
        let tx = fx - i as f64;
        let ty = if ny == 0 { 0.0 } else { fy - j as f64 };
        let corners = [
            (i, j, (1.0 - tx) * (1.0 - ty)),
            (i + 1, j, tx * (1.0 - ty)),
            (i, j + 1, (1.0 - tx) * ty),
            (i + 1, j + 1, tx * ty),
        ];
        let (mut m, mut wm, mut gx, mut gy) = (0.0, 0.0, 0.0, 0.0);
        for (ci, cj, w) in corners {
            if w == 0.0 || ci > nx || cj > ny {
                continue;
            }
            let k = g.node_at(ci, cj);
            gx += w * self.gx[k];
            gy += w * self.gy[k];
            if g.kind(k) != CellKind::Obstacle {
                m += w * self.m[k];
                wm += w;
            }
        }
        let m = if wm > 0.0 { m / wm } else { 0.0 };
        let c = 2.0 * cost.coefficient(m);
        [-c * gx, -c * gy]
    }
}

/// Door a boundary point lies on, if any.
fn door_at(grid: &GridGeometry, p: [f64; 2]) -> Option<&str> {
    let e = grid.extent();
    let h = grid.h();
    let tol = 1e-9 * h.max(1.0);
    grid.doors().iter().find_map(|d| {
        let (along, on_edge) = match d.edge {
            Edge::Bottom => (p[0] - e.x_min, (p[1] - e.y_min).abs() <= tol),
            Edge::Top => (p[0] - e.x_min, (p[1] - e.y_max).abs() <= tol),
            Edge::Left => (p[1] - e.y_min, (p[0] - e.x_min).abs() <= tol),
            Edge::Right => (p[1] - e.y_min, (p[0] - e.x_max).abs() <= tol),
        };
        let inside = along >= d.lo as f64 * h - tol && along <= d.hi as f64 * h + tol;
        (on_edge && inside).then_some(d.name.as_str())
    })
}

/// Where the segment `a → b` leaves the domain: fraction along it and the crossing point.
fn boundary_crossing(e: &Rect, a: [f64; 2], b: [f64; 2]) -> Option<(f64, [f64; 2])> {
    let mut best: Option<f64> = None;
    let mut consider = |s: f64| {
        if (0.0..=1.0).contains(&s) && best.is_none_or(|b| s < b) {
            best = Some(s);
        }
    };
    let d = [b[0] - a[0], b[1] - a[1]];
    if b[0] < e.x_min && d[0] != 0.0 {
        consider((e.x_min - a[0]) / d[0]);
    }
    if b[0] > e.x_max && d[0] != 0.0 {
        consider((e.x_max - a[0]) / d[0]);
    }
    if b[1] < e.y_min && d[1] != 0.0 {
        consider((e.y_min - a[1]) / d[1]);
    }
    if b[1] > e.y_max && d[1] != 0.0 {
        consider((e.y_max - a[1]) / d[1]);
    }
    best.map(|s| {
        let p = [a[0] + s * d[0], a[1] + s * d[1]];
        (s, [p[0].clamp(e.x_min, e.x_max), p[1].clamp(e.y_min, e.y_max)])
    })
}

fn clamp_to(e: &Rect, p: [f64; 2]) -> [f64; 2] {
    [p[0].clamp(e.x_min, e.x_max), p[1].clamp(e.y_min, e.y_max)]
}

/// Integrate `ẋ = −H_p(m, ∇U)` for each start with RK4 at a quarter of the time step.
///
/// The fields of step `n` are `U^n` and `M^{n+1}` on the grid in force during
/// that step. Agents stop when they cross a door; walls clamp the position
/// and a sub-step ending inside an obstacle keeps only the components that
/// stay outside it.
pub fn sample_trajectories(result: &SolveResult, starts: &[[f64; 2]]) -> Result<Vec<Trajectory>> {
    let state = &result.state;
    let cost = result.params.cost;
    let dt = result.dt();
    let first = state.grid_at(0);
    let extent = first.extent();
    let mut trajectories = Vec::with_capacity(starts.len());
    let mut pos = Vec::with_capacity(starts.len());
    for (id, p) in starts.iter().enumerate() {
        let tol = 1e-9 * first.h().max(1.0);
        if !extent.contains(*p, tol) {
            return Err(Error::Input(format!("start {id} at {p:?} lies outside the domain")));
        }
        if first.in_obstacle(*p) {
            return Err(Error::Input(format!("start {id} at {p:?} lies inside an obstacle")));
        }
        let exit = door_at(first, *p).map(str::to_owned);
        trajectories.push(Trajectory {
            id,
            points: vec![(0.0, p[0], p[1])],
            exit,
            departed: false,
        });
        pos.push(*p);
    }
    const SUB: usize = 4;
    let tau = dt / SUB as f64;
    for n in 0..result.total_steps() {
        if trajectories.iter().all(|t| t.exit.is_some()) {
            break;
        }
        let field = StepField::new(state, n);
        let g = &field.grid;
        for (tr, p) in trajectories.iter_mut().zip(pos.iter_mut()) {
            if tr.exit.is_some() {
                continue;
            }
            for sub in 0..SUB {
                let t0 = n as f64 * dt + sub as f64 * tau;
                let v = |q: [f64; 2]| field.velocity(clamp_to(&extent, q), &cost);
                let k1 = v(*p);
                let k2 = v([p[0] + 0.5 * tau * k1[0], p[1] + 0.5 * tau * k1[1]]);
                let k3 = v([p[0] + 0.5 * tau * k2[0], p[1] + 0.5 * tau * k2[1]]);
                let k4 = v([p[0] + tau * k3[0], p[1] + tau * k3[1]]);
                let step = [
                    tau / 6.0 * (k1[0] + 2.0 * k2[0] + 2.0 * k3[0] + k4[0]),
                    tau / 6.0 * (k1[1] + 2.0 * k2[1] + 2.0 * k3[1] + k4[1]),
                ];
                let next = [p[0] + step[0], p[1] + step[1]];
                if let Some((s, q)) = boundary_crossing(&extent, *p, next) {
                    if let Some(name) = door_at(g, q) {
                        tr.points.push((t0 + s * tau, q[0], q[1]));
                        tr.exit = Some(name.to_owned());
                        tr.departed = true;
                        break;
                    }
                }
                let mut cand = clamp_to(&extent, next);
                if g.in_obstacle(cand) {
                    let slide_x = clamp_to(&extent, [next[0], p[1]]);
                    let slide_y = clamp_to(&extent, [p[0], next[1]]);
                    cand = if !g.in_obstacle(slide_x) {
                        slide_x
                    } else if !g.in_obstacle(slide_y) {
                        slide_y
                    } else {
                        *p
                    };
                }
                if cand != *p {
                    tr.departed = true;
                }
                *p = cand;
            }
            if tr.exit.is_none() {
                tr.points.push(((n + 1) as f64 * dt, p[0], p[1]));
            }
        }
    }
    Ok(trajectories)
}
