//! Discrete HJB and FPK residuals of one continuous-flow segment.
//!
//! For time levels `n = 0..N-1` and every active non-door node `i`:
//!
//! ```text
//! HJB: −(U^{n+1}_i − U^n_i)/Δt − ν (Δ_h U^n)_i + H̃(M^{n+1}_i, ∇_h U^n_i) = 0
//! FPK:  (M^{n+1}_i − M^n_i)/Δt − ν (Δ_h M^{n+1})_i − T_i(U^n, M^{n+1}) = 0
//! ```
//!
//! Door nodes get the Dirichlet rows `U^n_i = 0` and `M^{n+1}_i = 0`.
//!
//! A segment state is flattened as `[U^0 .. U^N, M^0 .. M^N]`, every slice in
//! compressed (active-node) order. The residual uses the same layout: the row
//! block matching `U^n` holds HJB level `n` (and `U^N − u_T` for `n = N`), the
//! block matching `M^{n+1}` holds FPK level `n`, and the block matching `M^0`
//! holds `M^0 − m_0`.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::grid::{Field, FieldKind, GridGeometry, Link, EAST, NORTH, SOUTH, WEST};
use crate::hamiltonian::{upwind_partials, upwind_square, CongestionCost, HamiltonianMode};

/// Coefficients shared by every row of a segment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegmentParams {
    pub nu: f64,
    pub dt: f64,
    pub cost: CongestionCost,
    pub mode: HamiltonianMode,
}

impl SegmentParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.nu >= 0.0 && self.nu.is_finite()) {
            return Err(Error::config("nu", "viscosity must be nonnegative"));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::config("dt", "time step must be positive"));
        }
        self.cost.validate()
    }
}

/// Time-indexed stack of compressed grid functions.
#[derive(Debug, Clone, PartialEq)]
pub struct SpaceTimeField {
    grid: Arc<GridGeometry>,
    kind: FieldKind,
    dt: f64,
    steps: usize,
    data: Vec<f64>,
}

impl SpaceTimeField {
    pub fn zeros(grid: Arc<GridGeometry>, kind: FieldKind, steps: usize, dt: f64) -> Self {
        let n = grid.active_count() * (steps + 1);
        SpaceTimeField {
            grid,
            kind,
            dt,
            steps,
            data: vec![0.0; n],
        }
    }

    /// Build from `steps + 1` compressed slices stored contiguously.
    pub fn from_data(
        grid: Arc<GridGeometry>,
        kind: FieldKind,
        steps: usize,
        dt: f64,
        data: Vec<f64>,
    ) -> Result<Self> {
        if data.len() != grid.active_count() * (steps + 1) {
            return Err(Error::Shape(format!(
                "{} values for {} slices of {} active nodes",
                data.len(),
                steps + 1,
                grid.active_count()
            )));
        }
        Ok(SpaceTimeField {
            grid,
            kind,
            dt,
            steps,
            data,
        })
    }

    /// Repeat one compressed slice at every time level.
    pub fn constant(
        grid: Arc<GridGeometry>,
        kind: FieldKind,
        steps: usize,
        dt: f64,
        slice: &[f64],
    ) -> Result<Self> {
        if slice.len() != grid.active_count() {
            return Err(Error::Shape("slice length differs from active count".into()));
        }
        let data = slice.repeat(steps + 1);
        SpaceTimeField::from_data(grid, kind, steps, dt, data)
    }

    pub fn grid(&self) -> &Arc<GridGeometry> {
        &self.grid
    }

    pub fn kind(&self) -> FieldKind {
        self.kind
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// Number of time steps; there are `steps + 1` slices.
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn slice(&self, n: usize) -> &[f64] {
        let a = self.grid.active_count();
        &self.data[n * a..(n + 1) * a]
    }

    pub fn slice_mut(&mut self, n: usize) -> &mut [f64] {
        let a = self.grid.active_count();
        &mut self.data[n * a..(n + 1) * a]
    }

    /// Slice `n` scattered onto every node.
    pub fn field(&self, n: usize) -> Field {
        self.grid.expand(self.slice(n), self.kind)
    }
}

/// `(U, M)` over one segment.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentState {
    pub u: SpaceTimeField,
    pub m: SpaceTimeField,
}

impl SegmentState {
    pub fn new(u: SpaceTimeField, m: SpaceTimeField) -> Result<Self> {
        if u.grid != m.grid || u.steps != m.steps || u.dt != m.dt {
            return Err(Error::Shape(
                "value function and density use different discretizations".into(),
            ));
        }
        Ok(SegmentState { u, m })
    }

    pub fn grid(&self) -> &Arc<GridGeometry> {
        &self.u.grid
    }

    pub fn steps(&self) -> usize {
        self.u.steps
    }

    /// Flattened `[U, M]`.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.u.data.len() * 2);
        v.extend_from_slice(&self.u.data);
        v.extend_from_slice(&self.m.data);
        v
    }

    pub fn from_flat(grid: Arc<GridGeometry>, steps: usize, dt: f64, flat: &[f64]) -> Result<Self> {
        let half = grid.active_count() * (steps + 1);
        if flat.len() != 2 * half {
            return Err(Error::Shape(format!(
                "flat state has {} entries, expected {}",
                flat.len(),
                2 * half
            )));
        }
        let u = SpaceTimeField::from_data(
            grid.clone(),
            FieldKind::ValueFunction,
            steps,
            dt,
            flat[..half].to_vec(),
        )?;
        let m = SpaceTimeField::from_data(grid, FieldKind::Density, steps, dt, flat[half..].to_vec())?;
        Ok(SegmentState { u, m })
    }
}

/// HJB rows of one time level written into `out` (compressed order).
pub(crate) fn hjb_level(
    grid: &GridGeometry,
    p: &SegmentParams,
    u_n: &[f64],
    u_next: &[f64],
    m_next: &[f64],
    out: &mut [f64],
) {
    let inv_dt = 1.0 / p.dt;
    for s in 0..grid.active_count() {
        if grid.is_door_slot(s) {
            out[s] = u_n[s];
            continue;
        }
        let q = grid.one_sided(u_n, s);
        let m = m_next[s].max(0.0);
        let h_val = p.cost.hjb_coefficient(m, p.mode) * upwind_square(&q) - p.cost.c_time;
        out[s] = -(u_next[s] - u_n[s]) * inv_dt - p.nu * grid.laplacian(u_n, s) + h_val;
    }
}

/// `m · ∂H̃/∂q` at every active node, using the agents' Hamiltonian.
pub(crate) fn transport_fluxes(
    grid: &GridGeometry,
    cost: &CongestionCost,
    u: &[f64],
    m: &[f64],
    flux: &mut Vec<[f64; 4]>,
) {
    flux.clear();
    flux.extend((0..grid.active_count()).map(|s| {
        if grid.is_door_slot(s) {
            return [0.0; 4];
        }
        let q = grid.one_sided(u, s);
        let coeff = cost.coefficient(m[s].max(0.0));
        let dp = upwind_partials(coeff, &q);
        [m[s] * dp[0], m[s] * dp[1], m[s] * dp[2], m[s] * dp[3]]
    }));
}

/// Conservative divergence `T_s` assembled from precomputed fluxes.
#[inline]
pub(crate) fn transport_at(grid: &GridGeometry, flux: &[[f64; 4]], s: usize) -> f64 {
    let links = grid.links(s);
    let from = |dir: usize, k: usize| match links[dir] {
        Link::Node(t) => flux[t][k],
        Link::Door | Link::Blocked => 0.0,
    };
    let f = &flux[s];
    (f[0] - from(WEST, 0) + from(EAST, 1) - f[1] + f[2] - from(SOUTH, 2) + from(NORTH, 3) - f[3])
        / grid.h()
}

/// FPK rows of one time level.
#[allow(clippy::too_many_arguments)]
pub(crate) fn fpk_level(
    grid: &GridGeometry,
    p: &SegmentParams,
    u_n: &[f64],
    m_n: &[f64],
    m_next: &[f64],
    out: &mut [f64],
    flux: &mut Vec<[f64; 4]>,
) {
    transport_fluxes(grid, &p.cost, u_n, m_next, flux);
    let inv_dt = 1.0 / p.dt;
    for s in 0..grid.active_count() {
        if grid.is_door_slot(s) {
            out[s] = m_next[s];
            continue;
        }
        out[s] = (m_next[s] - m_n[s]) * inv_dt
            - p.nu * grid.laplacian(m_next, s)
            - transport_at(grid, flux, s);
    }
}

/// Discrete transport `T` at one node for full-node fields.
pub fn transport_operator(
    grid: &GridGeometry,
    u: &Field,
    m: &Field,
    node: usize,
    cost: &CongestionCost,
) -> Result<f64> {
    if node >= grid.node_count() {
        return Err(Error::IndexOutOfRange {
            index: node,
            limit: grid.node_count(),
        });
    }
    let s = grid
        .slot(node)
        .ok_or_else(|| Error::Input(format!("node {node} is an obstacle node")))?;
    let uc = grid.compress(u)?;
    let mc = grid.compress(m)?;
    if mc.iter().any(|v| *v < 0.0) {
        return Err(Error::Domain("density field has negative entries".into()));
    }
    let mut flux = Vec::new();
    transport_fluxes(grid, cost, &uc, &mc, &mut flux);
    if grid.is_door_slot(s) {
        return Ok(0.0);
    }
    Ok(transport_at(grid, &flux, s))
}

fn check_level(z: &SegmentState, n: usize) -> Result<()> {
    if n >= z.steps() {
        return Err(Error::IndexOutOfRange {
            index: n,
            limit: z.steps(),
        });
    }
    Ok(())
}

/// HJB residual at time level `n` as a full-node field.
pub fn hjb_residual(z: &SegmentState, n: usize, params: &SegmentParams) -> Result<Field> {
    check_level(z, n)?;
    let grid = z.grid();
    let mut out = vec![0.0; grid.active_count()];
    hjb_level(grid, params, z.u.slice(n), z.u.slice(n + 1), z.m.slice(n + 1), &mut out);
    Ok(grid.expand(&out, FieldKind::ValueFunction))
}

/// FPK residual at time level `n` as a full-node field.
pub fn fpk_residual(z: &SegmentState, n: usize, params: &SegmentParams) -> Result<Field> {
    check_level(z, n)?;
    let grid = z.grid();
    let mut out = vec![0.0; grid.active_count()];
    let mut flux = Vec::new();
    fpk_level(
        grid,
        params,
        z.u.slice(n),
        z.m.slice(n),
        z.m.slice(n + 1),
        &mut out,
        &mut flux,
    );
    Ok(grid.expand(&out, FieldKind::Density))
}

/// Full segment residual in the flattened layout described in the module docs.
pub fn segment_residual(
    z: &SegmentState,
    terminal_u: &Field,
    initial_m: &Field,
    params: &SegmentParams,
) -> Result<Vec<f64>> {
    let grid = z.grid();
    let terminal = grid.compress(terminal_u)?;
    let initial = grid.compress(initial_m)?;
    let flat = z.to_flat();
    let mut out = vec![0.0; flat.len()];
    segment_residual_flat(grid, params, z.steps(), &flat, &terminal, &initial, &mut out);
    Ok(out)
}

/// Residual of a flattened segment state; all slices in compressed order.
pub(crate) fn segment_residual_flat(
    grid: &GridGeometry,
    params: &SegmentParams,
    steps: usize,
    z: &[f64],
    terminal_u: &[f64],
    initial_m: &[f64],
    out: &mut [f64],
) {
    let a = grid.active_count();
    let half = a * (steps + 1);
    let (u, m) = z.split_at(half);
    let (out_u, out_m) = out.split_at_mut(half);
    let mut flux = Vec::with_capacity(a);
    let s = |k: usize| k * a..(k + 1) * a;
    for n in 0..steps {
        hjb_level(
            grid,
            params,
            &u[s(n)],
            &u[s(n + 1)],
            &m[s(n + 1)],
            &mut out_u[s(n)],
        );
        fpk_level(
            grid,
            params,
            &u[s(n)],
            &m[s(n)],
            &m[s(n + 1)],
            &mut out_m[s(n + 1)],
            &mut flux,
        );
    }
    for i in 0..a {
        out_u[steps * a + i] = u[steps * a + i] - terminal_u[i];
        out_m[i] = m[i] - initial_m[i];
    }
}
