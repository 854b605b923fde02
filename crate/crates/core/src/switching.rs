//! Switching events, segmented timelines and the global residual that glues
//! segment residuals together.
//!
//! Between two events the geometry is fixed and the segment behaves like an
//! ordinary continuous-flow problem. Matching conditions are structural: the
//! slice at an event time is stored once. Segment `s` reads its terminal value
//! function by restricting the first `U` slice of segment `s + 1` to its own
//! active nodes, and segment `s + 1` reads its initial density by extending
//! the last `M` slice of segment `s` with zeros on newly active nodes.
//!
//! Global vector layout, segment after segment: the owned `U` slices
//! (`0..N_s`, plus `N_s` for the last segment) followed by the owned `M`
//! slices (`1..=N_s`, plus `0` for the first segment). The residual uses the
//! same layout, so a one-segment problem reproduces
//! [`segment_residual`](crate::residual::segment_residual).

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{CellKind, DoorSpan, DoorSpec, Field, FieldKind, GridGeometry, Link, Rect};
use crate::linalg::BandedLu;
use crate::newton::{
    newton_solve, viscosity_continuation, NonlinearSystem, Preconditioner, PreconditionerKind,
    SolveDiagnostics, SolveError, SolverConfig,
};
use crate::residual::{fpk_level, hjb_level, SegmentParams, SegmentState, SpaceTimeField};

/// One change to the geometry applied at an event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum GeometryEdit {
    /// Obstacle nodes inside the rectangle become free space.
    RemoveObstacle { rect: Rect },
    /// Open a new door on the outer boundary.
    SetDoor { door: DoorSpec },
    /// Turn wall nodes of an existing door's edge into door nodes.
    WidenDoor {
        name: String,
        from: [f64; 2],
        to: [f64; 2],
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SwitchEvent {
    /// Minutes since the start of the horizon.
    pub time: f64,
    #[serde(default)]
    pub edits: Vec<GeometryEdit>,
}

/// Where an event landed on the time grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EventSnap {
    pub requested: f64,
    pub step: usize,
    pub snapped: f64,
    pub distance: f64,
}

/// A stretch of the timeline with fixed geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    /// Global index of the first time level.
    pub start_step: usize,
    pub steps: usize,
    pub grid: Arc<GridGeometry>,
}

impl Segment {
    pub fn end_step(&self) -> usize {
        self.start_step + self.steps
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentedProblem {
    pub horizon: f64,
    pub total_steps: usize,
    pub dt: f64,
    pub segments: Vec<Segment>,
    pub events: Vec<SwitchEvent>,
    pub snaps: Vec<EventSnap>,
}

/// Apply every edit of an event to a grid.
pub fn apply_event(grid: &GridGeometry, event: &SwitchEvent) -> Result<GridGeometry> {
    let mut g = grid.clone();
    for (k, edit) in event.edits.iter().enumerate() {
        let path = format!("events[t={}].edits[{k}]", event.time);
        g = apply_edit(g, edit).map_err(|e| match e {
            Error::Config { message, .. } => Error::config(path, message),
            other => other,
        })?;
    }
    Ok(g)
}

fn apply_edit(mut g: GridGeometry, edit: &GeometryEdit) -> Result<GridGeometry> {
    match edit {
        GeometryEdit::RemoveObstacle { rect } => {
            let tol = 1e-9 * g.h().max(1.0);
            let (nx, ny) = (g.nx(), g.ny());
            let mut changed = 0;
            for node in 0..g.node_count() {
                if g.kind(node) == CellKind::Obstacle && rect.contains(g.node_xy(node), tol) {
                    let (i, j) = g.ij(node);
                    let boundary = i == 0 || j == 0 || i == nx || j == ny;
                    g.set_kind(
                        node,
                        if boundary {
                            CellKind::Wall
                        } else {
                            CellKind::Interior
                        },
                    );
                    changed += 1;
                }
            }
            if changed == 0 {
                return Err(Error::config("rect", "no obstacle nodes inside the rectangle"));
            }
            g.rebuild()
        }
        GeometryEdit::SetDoor { door } => {
            if g.doors().iter().any(|d| d.name == door.name) {
                return Err(Error::config("door", format!("door `{}` already exists", door.name)));
            }
            let (span, _) = g.snap_door_spec(door)?;
            let nodes = g.door_nodes(&span);
            if nodes.iter().any(|&n| g.kind(n) == CellKind::Obstacle) {
                return Err(Error::config("door", "new door overlaps an obstacle"));
            }
            let fresh: Vec<usize> = nodes.into_iter().filter(|&n| g.kind(n) == CellKind::Wall).collect();
            if fresh.is_empty() {
                return Err(Error::config("door", "interval contains no wall nodes"));
            }
            for n in fresh {
                g.set_kind(n, CellKind::Door);
            }
            g.doors_mut().push(span);
            g.rebuild()
        }
        GeometryEdit::WidenDoor { name, from, to } => {
            let idx = g
                .doors()
                .iter()
                .position(|d| &d.name == name)
                .ok_or_else(|| Error::config("name", format!("no door named `{name}`")))?;
            let (span, _) = g.snap_door_spec(&DoorSpec::new(name.clone(), *from, *to))?;
            let old = g.doors()[idx].clone();
            if span.edge != old.edge {
                return Err(Error::config("to", "widened door must stay on the same edge"));
            }
            let lo = span.lo.min(old.lo);
            let hi = span.hi.max(old.hi);
            let merged = DoorSpan {
                name: name.clone(),
                edge: old.edge,
                lo,
                hi,
            };
            let nodes = g.door_nodes(&merged);
            if nodes.iter().any(|&n| g.kind(n) == CellKind::Obstacle) {
                return Err(Error::config("to", "widened door overlaps an obstacle"));
            }
            let fresh: Vec<usize> = nodes.into_iter().filter(|&n| g.kind(n) == CellKind::Wall).collect();
            if fresh.is_empty() {
                return Err(Error::config("to", "interval adds no wall nodes to the door"));
            }
            for n in fresh {
                g.set_kind(n, CellKind::Door);
            }
            g.doors_mut()[idx] = merged;
            g.rebuild()
        }
    }
}

/// Split `[0, horizon]` into `total_steps` steps and cut it at the events.
pub fn partition_timeline(
    horizon: f64,
    total_steps: usize,
    base: GridGeometry,
    events: &[SwitchEvent],
) -> Result<SegmentedProblem> {
    if !(horizon > 0.0 && horizon.is_finite()) {
        return Err(Error::config("dynamics.horizon", "horizon must be positive"));
    }
    if total_steps == 0 {
        return Err(Error::config("dynamics.steps", "need at least one time step"));
    }
    let dt = horizon / total_steps as f64;
    let mut snaps = Vec::with_capacity(events.len());
    for (k, ev) in events.iter().enumerate() {
        let path = format!("events[{k}].time");
        if !(ev.time > 0.0 && ev.time < horizon) {
            return Err(Error::config(path, format!("time {} is outside (0, {horizon})", ev.time)));
        }
        if k > 0 && !(ev.time > events[k - 1].time) {
            return Err(Error::config(path, "event times must be strictly increasing"));
        }
        let step = (ev.time / dt).round() as usize;
        if step == 0 || step >= total_steps {
            return Err(Error::config(
                path,
                format!("time {} snaps onto the end of the horizon", ev.time),
            ));
        }
        if snaps.last().is_some_and(|s: &EventSnap| s.step == step) {
            return Err(Error::config(path, "two events snap to the same time step"));
        }
        let snapped = step as f64 * dt;
        snaps.push(EventSnap {
            requested: ev.time,
            step,
            snapped,
            distance: (snapped - ev.time).abs(),
        });
    }
    let mut segments = Vec::with_capacity(events.len() + 1);
    let mut grid = Arc::new(base);
    let mut start = 0;
    for (ev, snap) in events.iter().zip(&snaps) {
        segments.push(Segment {
            start_step: start,
            steps: snap.step - start,
            grid: grid.clone(),
        });
        grid = Arc::new(apply_event(&grid, ev)?);
        start = snap.step;
    }
    segments.push(Segment {
        start_step: start,
        steps: total_steps - start,
        grid,
    });
    Ok(SegmentedProblem {
        horizon,
        total_steps,
        dt,
        segments,
        events: events.to_vec(),
        snaps,
    })
}

impl SegmentedProblem {
    /// A problem with a single segment on a fixed grid.
    pub fn single(grid: GridGeometry, horizon: f64, steps: usize) -> Result<Self> {
        partition_timeline(horizon, steps, grid, &[])
    }

    pub fn layout(&self) -> Result<Layout> {
        Layout::new(self)
    }

    /// Index of the segment whose grid describes global time level `k`.
    pub fn segment_of_step(&self, k: usize) -> usize {
        self.segments
            .iter()
            .position(|s| k < s.end_step())
            .unwrap_or(self.segments.len() - 1)
    }

    pub fn first_grid(&self) -> &Arc<GridGeometry> {
        &self.segments[0].grid
    }

    pub fn last_grid(&self) -> &Arc<GridGeometry> {
        &self.segments.last().expect("at least one segment").grid
    }
}

/// Offsets of each segment's owned slices in the global vector, plus the
/// node correspondence between consecutive grids.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    u_offset: Vec<usize>,
    m_offset: Vec<usize>,
    dim: usize,
    /// `to_next[s][slot]`: slot of the same node in segment `s + 1`.
    to_next: Vec<Vec<usize>>,
    /// `from_prev[s][slot]`: slot of the same node in segment `s - 1`, if active there.
    from_prev: Vec<Vec<Option<usize>>>,
}

impl Layout {
    fn new(p: &SegmentedProblem) -> Result<Self> {
        let ns = p.segments.len();
        let mut u_offset = Vec::with_capacity(ns);
        let mut m_offset = Vec::with_capacity(ns);
        let mut off = 0;
        for (s, seg) in p.segments.iter().enumerate() {
            let a = seg.grid.active_count();
            u_offset.push(off);
            off += a * (seg.steps + usize::from(s + 1 == ns));
            m_offset.push(off);
            off += a * (seg.steps + usize::from(s == 0));
        }
        let mut to_next = Vec::with_capacity(ns);
        let mut from_prev = vec![Vec::new()];
        for w in p.segments.windows(2) {
            let (g0, g1) = (&w[0].grid, &w[1].grid);
            if g0.node_count() != g1.node_count() {
                return Err(Error::Internal("grids of adjacent segments differ in size".into()));
            }
            let fwd = g0
                .active_nodes()
                .iter()
                .map(|&n| {
                    g1.slot(n).ok_or_else(|| {
                        Error::Internal(format!("node {n} became inactive at an event"))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let back = g1.active_nodes().iter().map(|&n| g0.slot(n)).collect();
            to_next.push(fwd);
            from_prev.push(back);
        }
        to_next.push(Vec::new());
        Ok(Layout {
            u_offset,
            m_offset,
            dim: off,
            to_next,
            from_prev,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Range of owned `U` slices of segment `s` in the global vector.
    pub fn u_block(&self, s: usize) -> std::ops::Range<usize> {
        self.u_offset[s]..self.m_offset[s]
    }

    pub fn m_block(&self, s: usize) -> std::ops::Range<usize> {
        let end = self.u_offset.get(s + 1).copied().unwrap_or(self.dim);
        self.m_offset[s]..end
    }

    /// Restrict a slice on segment `s + 1`'s grid to segment `s`'s active nodes.
    pub fn restrict(&self, s: usize, next: &[f64], out: &mut [f64]) {
        for (o, &t) in out.iter_mut().zip(&self.to_next[s]) {
            *o = next[t];
        }
    }

    /// Extend a slice on segment `s - 1`'s grid to segment `s`, zero on new nodes.
    pub fn extend(&self, s: usize, prev: &[f64], out: &mut [f64]) {
        for (o, t) in out.iter_mut().zip(&self.from_prev[s]) {
            *o = t.map_or(0.0, |t| prev[t]);
        }
    }
}

/// Per-segment states with the shared slices materialized on both sides.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalState {
    pub segments: Vec<SegmentState>,
}

impl GlobalState {
    /// Materialize per-segment states from the global vector.
    pub fn unflatten(problem: &SegmentedProblem, z: &[f64]) -> Result<Self> {
        let layout = problem.layout()?;
        if z.len() != layout.dim() {
            return Err(Error::Shape(format!(
                "global vector has {} entries, expected {}",
                z.len(),
                layout.dim()
            )));
        }
        let ns = problem.segments.len();
        let mut out: Vec<SegmentState> = Vec::with_capacity(ns);
        // U first, walking backwards so terminal slices can be restricted.
        let mut us: Vec<Vec<f64>> = vec![Vec::new(); ns];
        for s in (0..ns).rev() {
            let seg = &problem.segments[s];
            let a = seg.grid.active_count();
            let mut u = z[layout.u_block(s)].to_vec();
            if s + 1 < ns {
                let mut term = vec![0.0; a];
                let next_a = problem.segments[s + 1].grid.active_count();
                layout.restrict(s, &us[s + 1][..next_a], &mut term);
                u.extend_from_slice(&term);
            }
            us[s] = u;
        }
        let mut prev_last: Vec<f64> = Vec::new();
        for (s, u) in us.into_iter().enumerate() {
            let seg = &problem.segments[s];
            let a = seg.grid.active_count();
            let mut m = Vec::with_capacity(a * (seg.steps + 1));
            if s > 0 {
                let mut init = vec![0.0; a];
                layout.extend(s, &prev_last, &mut init);
                m.extend_from_slice(&init);
            }
            m.extend_from_slice(&z[layout.m_block(s)]);
            prev_last = m[seg.steps * a..].to_vec();
            let uf = SpaceTimeField::from_data(
                seg.grid.clone(),
                FieldKind::ValueFunction,
                seg.steps,
                problem.dt,
                u,
            )?;
            let mf =
                SpaceTimeField::from_data(seg.grid.clone(), FieldKind::Density, seg.steps, problem.dt, m)?;
            out.push(SegmentState::new(uf, mf)?);
        }
        Ok(GlobalState { segments: out })
    }

    /// Owned slices of every segment in the global layout.
    pub fn flatten(&self) -> Vec<f64> {
        let ns = self.segments.len();
        let mut z = Vec::new();
        for (s, seg) in self.segments.iter().enumerate() {
            let a = seg.grid().active_count();
            let steps = seg.steps();
            let u_end = if s + 1 == ns { steps + 1 } else { steps };
            z.extend_from_slice(&seg.u.data()[..u_end * a]);
            let m_start = if s == 0 { 0 } else { 1 };
            z.extend_from_slice(&seg.m.data()[m_start * a..]);
        }
        z
    }

    /// Segment index and local level for global time level `k`.
    fn locate(&self, k: usize) -> (usize, usize) {
        let mut start = 0;
        for (s, seg) in self.segments.iter().enumerate() {
            if k < start + seg.steps() || s + 1 == self.segments.len() {
                return (s, k - start);
            }
            start += seg.steps();
        }
        unreachable!("a global state has at least one segment")
    }

    pub fn total_steps(&self) -> usize {
        self.segments.iter().map(|s| s.steps()).sum()
    }

    /// Grid in force at global level `k` (the post-event grid at event levels).
    pub fn grid_at(&self, k: usize) -> &Arc<GridGeometry> {
        self.segments[self.locate(k).0].grid()
    }

    /// Compressed density slice at global level `k`.
    pub fn density(&self, k: usize) -> &[f64] {
        let (s, n) = self.locate(k);
        self.segments[s].m.slice(n)
    }

    pub fn value(&self, k: usize) -> &[f64] {
        let (s, n) = self.locate(k);
        self.segments[s].u.slice(n)
    }

    /// Grid and density at level `k` as seen from the left: at an event
    /// level this is the last slice of the earlier segment, before any
    /// geometry change.
    pub fn density_before(&self, k: usize) -> (&Arc<GridGeometry>, &[f64]) {
        let (s, n) = self.locate(k);
        if n == 0 && s > 0 {
            let prev = &self.segments[s - 1];
            (prev.grid(), prev.m.slice(prev.steps()))
        } else {
            (self.segments[s].grid(), self.segments[s].m.slice(n))
        }
    }

    /// Density and value at level `k` on the grid of the segment that owns
    /// step `k → k + 1`; used when pairing `U^n` with `M^{n+1}`.
    pub fn step_pair(&self, n: usize) -> (&Arc<GridGeometry>, &[f64], &[f64]) {
        let (s, l) = self.locate(n);
        let (s, l) = if l == self.segments[s].steps() {
            (s, l - 1)
        } else {
            (s, l)
        };
        let seg = &self.segments[s];
        (seg.grid(), seg.u.slice(l), seg.m.slice(l + 1))
    }
}

/// `Φ(Z)` of the whole switching problem for given boundary data.
pub struct SwitchingSystem<'a> {
    problem: &'a SegmentedProblem,
    layout: Layout,
    params: SegmentParams,
    terminal: Vec<f64>,
    initial: Vec<f64>,
    preconditioner: PreconditionerKind,
}

impl<'a> SwitchingSystem<'a> {
    pub fn new(
        problem: &'a SegmentedProblem,
        params: SegmentParams,
        terminal_u: &Field,
        initial_m: &Field,
        preconditioner: PreconditionerKind,
    ) -> Result<Self> {
        params.validate()?;
        if (params.dt - problem.dt).abs() > 1e-12 * problem.dt {
            return Err(Error::Shape("time step differs from the problem's".into()));
        }
        let terminal = problem.last_grid().compress(terminal_u)?;
        let initial = problem.first_grid().compress(initial_m)?;
        Ok(SwitchingSystem {
            problem,
            layout: problem.layout()?,
            params,
            terminal,
            initial,
            preconditioner,
        })
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn params(&self) -> &SegmentParams {
        &self.params
    }
}

impl NonlinearSystem for SwitchingSystem<'_> {
    fn dim(&self) -> usize {
        self.layout.dim
    }

    fn residual(&self, z: &[f64], out: &mut [f64]) -> Result<()> {
        if z.len() != self.layout.dim || out.len() != self.layout.dim {
            return Err(Error::Shape("global vector length".into()));
        }
        let segs = &self.problem.segments;
        let ns = segs.len();
        let lay = &self.layout;
        let mut flux = Vec::new();
        let mut prev_last: Option<(usize, usize)> = None; // offset of previous segment's last M slice
        for (s, seg) in segs.iter().enumerate() {
            let g = &seg.grid;
            let a = g.active_count();
            let n_s = seg.steps;
            let uo = lay.u_offset[s];
            let mo = lay.m_offset[s];
            // Terminal U and initial M for this segment.
            let mut terminal = vec![0.0; a];
            if s + 1 < ns {
                let next_u0 = &z[lay.u_offset[s + 1]..lay.u_offset[s + 1] + segs[s + 1].grid.active_count()];
                lay.restrict(s, next_u0, &mut terminal);
            }
            let mut initial = vec![0.0; a];
            if let Some((off, pa)) = prev_last {
                lay.extend(s, &z[off..off + pa], &mut initial);
            }
            let first_m = if s == 0 { 1 } else { 0 };
            let u_at = |k: usize| -> &[f64] {
                if k == n_s && s + 1 < ns {
                    &terminal
                } else {
                    &z[uo + k * a..uo + (k + 1) * a]
                }
            };
            let m_at = |k: usize| -> &[f64] {
                if k == 0 && s > 0 {
                    &initial
                } else {
                    let j = k + first_m - 1;
                    &z[mo + j * a..mo + (j + 1) * a]
                }
            };
            let (out_u, out_m) = out[uo..].split_at_mut(mo - uo);
            for n in 0..n_s {
                hjb_level(
                    g,
                    &self.params,
                    u_at(n),
                    u_at(n + 1),
                    m_at(n + 1),
                    &mut out_u[n * a..(n + 1) * a],
                );
                let j = n + first_m;
                fpk_level(
                    g,
                    &self.params,
                    u_at(n),
                    m_at(n),
                    m_at(n + 1),
                    &mut out_m[j * a..(j + 1) * a],
                    &mut flux,
                );
            }
            if s + 1 == ns {
                let last = u_at(n_s);
                for i in 0..a {
                    out_u[n_s * a + i] = last[i] - self.terminal[i];
                }
            }
            if s == 0 {
                let m0 = &z[mo..mo + a];
                for i in 0..a {
                    out_m[i] = m0[i] - self.initial[i];
                }
            }
            let last_j = n_s + first_m - 1;
            prev_last = Some((mo + last_j * a, a));
        }
        Ok(())
    }

    fn preconditioner(&self, _z: &[f64]) -> Result<Option<Box<dyn Preconditioner + '_>>> {
        match self.preconditioner {
            PreconditionerKind::None => Ok(None),
            PreconditionerKind::Heat => Ok(Some(Box::new(HeatPreconditioner::new(self)?))),
        }
    }
}

/// Inverts the linear part `I/Δt − νΔ_h` of every time level and sweeps the
/// value function backwards and the density forwards in time.
struct HeatPreconditioner<'a> {
    system: &'a SwitchingSystem<'a>,
    factors: Vec<BandedLu>,
}

impl<'a> HeatPreconditioner<'a> {
    fn new(system: &'a SwitchingSystem<'a>) -> Result<Self> {
        let p = &system.params;
        let factors = system
            .problem
            .segments
            .iter()
            .map(|seg| heat_matrix(&seg.grid, p.dt, p.nu))
            .collect::<Result<_>>()?;
        Ok(HeatPreconditioner { system, factors })
    }
}

fn heat_matrix(g: &GridGeometry, dt: f64, nu: f64) -> Result<BandedLu> {
    let a = g.active_count();
    let mut bw = 1;
    for s in 0..a {
        for l in g.links(s) {
            if let Link::Node(t) = l {
                bw = bw.max(s.abs_diff(*t));
            }
        }
    }
    let mut lu = BandedLu::zeros(a, bw);
    let c = nu / (g.h() * g.h());
    for s in 0..a {
        if g.is_door_slot(s) {
            lu.add(s, s, 1.0);
            continue;
        }
        lu.add(s, s, 1.0 / dt);
        for l in g.links(s) {
            match l {
                Link::Node(t) => {
                    lu.add(s, s, c);
                    lu.add(s, *t, -c);
                }
                Link::Door => lu.add(s, s, c),
                Link::Blocked => {}
            }
        }
    }
    lu.factor()?;
    Ok(lu)
}

impl Preconditioner for HeatPreconditioner<'_> {
    fn apply(&self, r: &[f64], y: &mut [f64]) {
        let sys = self.system;
        let segs = &sys.problem.segments;
        let lay = &sys.layout;
        let ns = segs.len();
        let inv_dt = 1.0 / sys.params.dt;
        // Value function: backward in time.
        let mut carry: Vec<f64> = Vec::new();
        for s in (0..ns).rev() {
            let g = &segs[s].grid;
            let a = g.active_count();
            let n_s = segs[s].steps;
            let uo = lay.u_offset[s];
            let mut next = vec![0.0; a];
            if s + 1 == ns {
                let t = uo + n_s * a;
                y[t..t + a].copy_from_slice(&r[t..t + a]);
                next.copy_from_slice(&y[t..t + a]);
            } else {
                lay.restrict(s, &carry, &mut next);
            }
            for n in (0..n_s).rev() {
                let o = uo + n * a;
                let block = &mut y[o..o + a];
                for i in 0..a {
                    block[i] = if g.is_door_slot(i) {
                        r[o + i]
                    } else {
                        r[o + i] + next[i] * inv_dt
                    };
                }
                self.factors[s].solve(block);
                next.copy_from_slice(block);
            }
            carry = next;
        }
        // Density: forward in time.
        let mut carry: Vec<f64> = Vec::new();
        for s in 0..ns {
            let g = &segs[s].grid;
            let a = g.active_count();
            let n_s = segs[s].steps;
            let mo = lay.m_offset[s];
            let mut prev = vec![0.0; a];
            let first_m = usize::from(s == 0);
            if s == 0 {
                y[mo..mo + a].copy_from_slice(&r[mo..mo + a]);
                prev.copy_from_slice(&y[mo..mo + a]);
            } else {
                lay.extend(s, &carry, &mut prev);
            }
            for n in 0..n_s {
                let o = mo + (n + first_m) * a;
                let block = &mut y[o..o + a];
                for i in 0..a {
                    block[i] = if g.is_door_slot(i) {
                        r[o + i]
                    } else {
                        r[o + i] + prev[i] * inv_dt
                    };
                }
                self.factors[s].solve(block);
                prev.copy_from_slice(block);
            }
            carry = prev;
        }
    }
}

/// Global residual of a materialized state.
pub fn global_residual(
    z: &GlobalState,
    terminal_u: &Field,
    initial_m: &Field,
    problem: &SegmentedProblem,
    params: &SegmentParams,
) -> Result<Vec<f64>> {
    let sys = SwitchingSystem::new(problem, *params, terminal_u, initial_m, PreconditionerKind::None)?;
    let flat = z.flatten();
    if flat.len() != sys.dim() {
        return Err(Error::Shape("state does not match the problem".into()));
    }
    let mut out = vec![0.0; flat.len()];
    sys.residual(&flat, &mut out)?;
    Ok(out)
}

/// Cheap initial guess with `M` frozen at the initial density.
///
/// `U` carries the pure waiting cost `c_time·(T − t)` on every non-door
/// node, so the faces next to a door already point outward. Starting from
/// `U = 0` puts every face on the upwind kink, where the differenced
/// Jacobian averages two slopes and the first step can fail to descend.
fn naive_guess(problem: &SegmentedProblem, terminal: &Field, initial: &Field, c_time: f64) -> Result<Vec<f64>> {
    let lay = problem.layout()?;
    let mut z = vec![0.0; lay.dim()];
    let ns = problem.segments.len();
    let mut m_prev = problem.first_grid().compress(initial)?;
    for (s, seg) in problem.segments.iter().enumerate() {
        let a = seg.grid.active_count();
        if s > 0 {
            let mut ext = vec![0.0; a];
            lay.extend(s, &m_prev, &mut ext);
            m_prev = ext;
        }
        for chunk in z[lay.m_block(s)].chunks_mut(a) {
            chunk.copy_from_slice(&m_prev);
        }
        for (k, chunk) in z[lay.u_block(s)].chunks_mut(a).enumerate() {
            let to_go = (problem.total_steps - seg.start_step - k) as f64 * problem.dt;
            for (slot, u) in chunk.iter_mut().enumerate() {
                if !seg.grid.is_door_slot(slot) {
                    *u = c_time * to_go;
                }
            }
        }
        if s + 1 == ns {
            let t = problem.last_grid().compress(terminal)?;
            let u = lay.u_block(s);
            z[u.end - a..u.end].copy_from_slice(&t);
        }
    }
    Ok(z)
}

fn segment_problem(problem: &SegmentedProblem, s: usize) -> SegmentedProblem {
    let seg = &problem.segments[s];
    SegmentedProblem {
        horizon: seg.steps as f64 * problem.dt,
        total_steps: seg.steps,
        dt: problem.dt,
        segments: vec![Segment {
            start_step: 0,
            steps: seg.steps,
            grid: seg.grid.clone(),
        }],
        events: Vec::new(),
        snaps: Vec::new(),
    }
}

fn solve_piece(
    sub: &SegmentedProblem,
    params: SegmentParams,
    terminal: &Field,
    initial: &Field,
    guess: Option<Vec<f64>>,
    config: &SolverConfig,
    s: usize,
) -> std::result::Result<Vec<f64>, SolveError> {
    let wrap = |e: SolveError| SolveError::WarmStart {
        segment: s,
        source: Box::new(e),
    };
    let sys = SwitchingSystem::new(sub, params, terminal, initial, config.preconditioner)
        .map_err(|e| wrap(e.into()))?;
    let z0 = match guess {
        Some(g) => g,
        None => naive_guess(sub, terminal, initial, params.cost.c_time).map_err(|e| wrap(e.into()))?,
    };
    newton_solve(&sys, &z0, config).map(|(z, _)| z).map_err(wrap)
}

/// Solve each segment separately and patch the pieces into a global guess.
///
/// A backward pass fixes terminal conditions (the true one for the last
/// segment, the next segment's restricted first slice otherwise) with the
/// initial density carried forward without motion. A forward pass then
/// re-solves every segment from the true incoming density.
pub fn build_warm_start(
    problem: &SegmentedProblem,
    terminal_u: &Field,
    initial_m: &Field,
    params: &SegmentParams,
    config: &SolverConfig,
) -> std::result::Result<Vec<f64>, SolveError> {
    let ns = problem.segments.len();
    let lay = problem.layout()?;
    let subs: Vec<SegmentedProblem> = (0..ns).map(|s| segment_problem(problem, s)).collect();
    let mut provisional: Vec<Field> = Vec::with_capacity(ns);
    let mut m = problem.first_grid().compress(initial_m)?;
    for s in 0..ns {
        let g = &problem.segments[s].grid;
        if s > 0 {
            let mut ext = vec![0.0; g.active_count()];
            lay.extend(s, &m, &mut ext);
            m = ext;
        }
        provisional.push(g.expand(&m, FieldKind::Density));
    }

    // Backward pass.
    let mut terminals: Vec<Field> = vec![terminal_u.clone(); ns];
    let mut pass1: Vec<Vec<f64>> = vec![Vec::new(); ns];
    for s in (0..ns).rev() {
        let g = &problem.segments[s].grid;
        if s + 1 < ns {
            let next_a = problem.segments[s + 1].grid.active_count();
            let mut t = vec![0.0; g.active_count()];
            lay.restrict(s, &pass1[s + 1][..next_a], &mut t);
            terminals[s] = g.expand(&t, FieldKind::ValueFunction);
        }
        pass1[s] = solve_piece(&subs[s], *params, &terminals[s], &provisional[s], None, config, s)?;
    }
    if ns == 1 {
        return Ok(pass1.pop().expect("one segment"));
    }

    // Forward pass with the true incoming density.
    let mut z = vec![0.0; lay.dim()];
    let mut incoming = initial_m.clone();
    for s in 0..ns {
        let g = problem.segments[s].grid.clone();
        let a = g.active_count();
        let steps = problem.segments[s].steps;
        let mut guess = pass1[s].clone();
        let init = g.compress(&incoming)?;
        let m_off = a * (steps + 1);
        guess[m_off..m_off + a].copy_from_slice(&init);
        let piece = solve_piece(&subs[s], *params, &terminals[s], &incoming, Some(guess), config, s)?;
        let u_len = a * (steps + usize::from(s + 1 == ns));
        z[lay.u_block(s)].copy_from_slice(&piece[..u_len]);
        let m_start = if s == 0 { m_off } else { m_off + a };
        z[lay.m_block(s)].copy_from_slice(&piece[m_start..]);
        if s + 1 < ns {
            let last = &piece[piece.len() - a..];
            let next = &problem.segments[s + 1].grid;
            let mut ext = vec![0.0; next.active_count()];
            lay.extend(s + 1, last, &mut ext);
            incoming = next.expand(&ext, FieldKind::Density);
        }
    }
    Ok(z)
}

/// Warm start at the first viscosity, then continuation down to the target.
pub fn solve_switching(
    problem: &SegmentedProblem,
    terminal_u: &Field,
    initial_m: &Field,
    params: &SegmentParams,
    config: &SolverConfig,
) -> std::result::Result<(GlobalState, SolveDiagnostics), SolveError> {
    let schedule = config.schedule_for(params.nu)?;
    let first = SegmentParams {
        nu: schedule[0],
        ..*params
    };
    let z0 = build_warm_start(problem, terminal_u, initial_m, &first, config)?;
    let make = |nu: f64| {
        SwitchingSystem::new(
            problem,
            SegmentParams { nu, ..*params },
            terminal_u,
            initial_m,
            config.preconditioner,
        )
    };
    let (z, diag) = viscosity_continuation(make, &z0, &schedule, config)?;
    Ok((GlobalState::unflatten(problem, &z)?, diag))
}
