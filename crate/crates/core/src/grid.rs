//! Node-centred 2-D grids with per-node classification and the discrete
//! difference operators used by the HJB and FPK residuals.
//!
//! Nodes are indexed row-major, `node = j * (nx + 1) + i`. Obstacle nodes are
//! masked out of the unknown vector; every other node is *active* and owns a
//! slot in the compressed vectors the solver works with. Active slots follow
//! node order, so vertical neighbours are at most `nx + 1` slots apart.
//!
//! Boundary conditions are realised through ghost values:
//!
//! * a face leading outside the domain or into an obstacle is *blocked*: the
//!   ghost equals the node's own value, so the one-sided difference across it
//!   is zero and no flux crosses it;
//! * a face leading into a door node reads exactly `0` regardless of what is
//!   stored at that node.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const GEOM_TOL: f64 = 1e-9;

/// Classification of a grid node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CellKind {
    Interior,
    /// Impassable; excluded from the unknowns.
    Obstacle,
    /// Outer-boundary node with zero-flux (Neumann) behaviour.
    Wall,
    /// Outer-boundary node where `u = 0` and `m = 0` (Dirichlet).
    Door,
}

impl CellKind {
    pub fn is_active(self) -> bool {
        self != CellKind::Obstacle
    }
}

/// Axis-aligned rectangle in metres.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct Rect {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl Rect {
    pub const fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Self {
        Rect {
            x_min,
            y_min,
            x_max,
            y_max,
        }
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn contains(&self, p: [f64; 2], tol: f64) -> bool {
        p[0] >= self.x_min - tol
            && p[0] <= self.x_max + tol
            && p[1] >= self.y_min - tol
            && p[1] <= self.y_max + tol
    }

    pub fn contains_rect(&self, other: &Rect, tol: f64) -> bool {
        other.x_min >= self.x_min - tol
            && other.x_max <= self.x_max + tol
            && other.y_min >= self.y_min - tol
            && other.y_max <= self.y_max + tol
    }

    fn is_valid(&self) -> bool {
        [self.x_min, self.y_min, self.x_max, self.y_max]
            .iter()
            .all(|v| v.is_finite())
            && self.x_max >= self.x_min
            && self.y_max >= self.y_min
    }
}

impl From<[f64; 4]> for Rect {
    fn from(v: [f64; 4]) -> Self {
        Rect::new(v[0], v[1], v[2], v[3])
    }
}

impl From<Rect> for [f64; 4] {
    fn from(r: Rect) -> Self {
        [r.x_min, r.y_min, r.x_max, r.y_max]
    }
}

/// One side of the outer rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Edge {
    Bottom,
    Top,
    Left,
    Right,
}

/// A named door given as a segment lying on one edge of the domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DoorSpec {
    pub name: String,
    pub from: [f64; 2],
    pub to: [f64; 2],
}

impl DoorSpec {
    pub fn new(name: impl Into<String>, from: [f64; 2], to: [f64; 2]) -> Self {
        DoorSpec {
            name: name.into(),
            from,
            to,
        }
    }
}

/// Domain, obstacle and door description before discretization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometrySpec {
    pub domain: Rect,
    #[serde(default)]
    pub obstacles: Vec<Rect>,
    #[serde(default)]
    pub doors: Vec<DoorSpec>,
}

/// Door nodes along one edge, inclusive range of the along-edge node index.
#[derive(Debug, Clone, PartialEq)]
pub struct DoorSpan {
    pub name: String,
    pub edge: Edge,
    pub lo: usize,
    pub hi: usize,
}

/// How far a requested door interval moved when snapped to grid nodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DoorSnap {
    pub name: String,
    pub requested: (f64, f64),
    pub snapped: (f64, f64),
    /// Largest endpoint displacement in metres; always below `h`.
    pub error: f64,
}

/// What lies across one face of an active node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Link {
    /// Another non-door active node (its slot).
    Node(usize),
    /// A door node: reads as zero.
    Door,
    /// Outside the domain or an obstacle: ghost equals the node itself.
    Blocked,
}

/// Face directions, in the order the one-sided differences are reported.
pub const EAST: usize = 0;
pub const WEST: usize = 1;
pub const NORTH: usize = 2;
pub const SOUTH: usize = 3;

/// The discretized domain.
#[derive(Debug, Clone, PartialEq)]
pub struct GridGeometry {
    nx: usize,
    ny: usize,
    h: f64,
    origin: [f64; 2],
    kinds: Vec<CellKind>,
    doors: Vec<DoorSpan>,
    snaps: Vec<DoorSnap>,
    active: Vec<usize>,
    slot: Vec<Option<usize>>,
    links: Vec<[Link; 4]>,
}

/// Tag distinguishing the two kinds of grid functions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FieldKind {
    ValueFunction,
    Density,
}

/// A grid function stored on every node (obstacle entries are inert).
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    pub kind: FieldKind,
    pub values: Vec<f64>,
}

impl Field {
    pub fn zeros(grid: &GridGeometry, kind: FieldKind) -> Self {
        Field {
            kind,
            values: vec![0.0; grid.node_count()],
        }
    }

    pub fn from_fn(grid: &GridGeometry, kind: FieldKind, f: impl Fn([f64; 2]) -> f64) -> Self {
        let values = (0..grid.node_count())
            .map(|k| {
                if grid.kind(k).is_active() {
                    f(grid.node_xy(k))
                } else {
                    0.0
                }
            })
            .collect();
        Field { kind, values }
    }
}

fn snap_lower(s: f64) -> i64 {
    (s + 0.5).floor() as i64
}

fn snap_upper(s: f64) -> i64 {
    (s - 0.5).ceil() as i64
}

/// Discretize a geometry description at `nx × ny` cells.
pub fn build_grid(spec: &GeometrySpec, nx: usize, ny: usize) -> Result<GridGeometry> {
    let d = spec.domain;
    if !d.is_valid() || d.width() <= 0.0 || d.height() <= 0.0 {
        return Err(Error::config("geometry.domain", "domain rectangle is empty"));
    }
    if nx < 4 || ny < 4 {
        return Err(Error::config(
            "resolution",
            format!("need at least 4 cells per axis, got {nx}x{ny}"),
        ));
    }
    let h = d.width() / nx as f64;
    let hy = d.height() / ny as f64;
    if (h - hy).abs() > 1e-12 * h {
        return Err(Error::config(
            "resolution",
            format!("cells must be square: dx = {h}, dy = {hy}"),
        ));
    }
    let tol = GEOM_TOL * h.max(1.0);
    let stride = nx + 1;
    let node_count = stride * (ny + 1);
    let mut kinds = vec![CellKind::Interior; node_count];
    for j in 0..=ny {
        for i in 0..=nx {
            if i == 0 || j == 0 || i == nx || j == ny {
                kinds[j * stride + i] = CellKind::Wall;
            }
        }
    }
    for (k, r) in spec.obstacles.iter().enumerate() {
        let path = format!("geometry.obstacles[{k}]");
        if !r.is_valid() {
            return Err(Error::config(path, "malformed rectangle"));
        }
        if !d.contains_rect(r, tol) {
            return Err(Error::config(path, "obstacle extends outside the domain"));
        }
        for j in 0..=ny {
            for i in 0..=nx {
                let p = [d.x_min + i as f64 * h, d.y_min + j as f64 * h];
                if r.contains(p, tol) {
                    kinds[j * stride + i] = CellKind::Obstacle;
                }
            }
        }
    }
    let mut doors = Vec::new();
    let mut snaps = Vec::new();
    for (k, door) in spec.doors.iter().enumerate() {
        let path = format!("geometry.doors[{k}]");
        if doors.iter().any(|s: &DoorSpan| s.name == door.name) {
            return Err(Error::config(path, format!("duplicate door name `{}`", door.name)));
        }
        let (span, snap) = snap_door(d, h, nx, ny, door).map_err(|m| Error::config(&path, m))?;
        for node in span_nodes(&span, nx, ny) {
            if kinds[node] == CellKind::Obstacle {
                return Err(Error::config(
                    path,
                    format!("door `{}` overlaps an obstacle", door.name),
                ));
            }
            kinds[node] = CellKind::Door;
        }
        doors.push(span);
        snaps.push(snap);
    }
    let mut grid = GridGeometry::from_parts(nx, ny, h, [d.x_min, d.y_min], kinds, doors)?;
    grid.snaps = snaps;
    Ok(grid)
}

/// Which edge a segment lies on, and its along-edge coordinates relative to the origin.
fn locate_on_edge(d: Rect, from: [f64; 2], to: [f64; 2], tol: f64) -> Option<(Edge, f64, f64)> {
    let on = |a: f64, b: f64| (a - b).abs() <= tol;
    let inside_x = |x: f64| x >= d.x_min - tol && x <= d.x_max + tol;
    let inside_y = |y: f64| y >= d.y_min - tol && y <= d.y_max + tol;
    let sorted = |a: f64, b: f64| if a <= b { (a, b) } else { (b, a) };
    if on(from[1], d.y_min) && on(to[1], d.y_min) && inside_x(from[0]) && inside_x(to[0]) {
        let (a, b) = sorted(from[0] - d.x_min, to[0] - d.x_min);
        return Some((Edge::Bottom, a, b));
    }
    if on(from[1], d.y_max) && on(to[1], d.y_max) && inside_x(from[0]) && inside_x(to[0]) {
        let (a, b) = sorted(from[0] - d.x_min, to[0] - d.x_min);
        return Some((Edge::Top, a, b));
    }
    if on(from[0], d.x_min) && on(to[0], d.x_min) && inside_y(from[1]) && inside_y(to[1]) {
        let (a, b) = sorted(from[1] - d.y_min, to[1] - d.y_min);
        return Some((Edge::Left, a, b));
    }
    if on(from[0], d.x_max) && on(to[0], d.x_max) && inside_y(from[1]) && inside_y(to[1]) {
        let (a, b) = sorted(from[1] - d.y_min, to[1] - d.y_min);
        return Some((Edge::Right, a, b));
    }
    None
}

fn snap_door(
    d: Rect,
    h: f64,
    nx: usize,
    ny: usize,
    door: &DoorSpec,
) -> std::result::Result<(DoorSpan, DoorSnap), String> {
    let tol = GEOM_TOL * h.max(1.0);
    let (edge, a, b) = locate_on_edge(d, door.from, door.to, tol)
        .ok_or_else(|| format!("door `{}` does not lie on the outer boundary", door.name))?;
    let n_along = match edge {
        Edge::Bottom | Edge::Top => nx,
        Edge::Left | Edge::Right => ny,
    } as i64;
    let mut lo = snap_lower(a / h).clamp(0, n_along);
    let mut hi = snap_upper(b / h).clamp(0, n_along);
    if lo > hi {
        let mid = (((a + b) / (2.0 * h)).round() as i64).clamp(0, n_along);
        lo = mid;
        hi = mid;
    }
    let snapped = (lo as f64 * h, hi as f64 * h);
    let error = (snapped.0 - a).abs().max((snapped.1 - b).abs());
    Ok((
        DoorSpan {
            name: door.name.clone(),
            edge,
            lo: lo as usize,
            hi: hi as usize,
        },
        DoorSnap {
            name: door.name.clone(),
            requested: (a, b),
            snapped,
            error,
        },
    ))
}

fn span_nodes(span: &DoorSpan, nx: usize, ny: usize) -> Vec<usize> {
    let stride = nx + 1;
    (span.lo..=span.hi)
        .map(|t| match span.edge {
            Edge::Bottom => t,
            Edge::Top => ny * stride + t,
            Edge::Left => t * stride,
            Edge::Right => t * stride + nx,
        })
        .collect()
}

impl GridGeometry {
    /// Assemble a grid from explicit node kinds, validating the invariants.
    pub fn from_parts(
        nx: usize,
        ny: usize,
        h: f64,
        origin: [f64; 2],
        kinds: Vec<CellKind>,
        doors: Vec<DoorSpan>,
    ) -> Result<Self> {
        if !(h > 0.0 && h.is_finite()) {
            return Err(Error::config("grid.h", "spacing must be positive"));
        }
        if nx == 0 {
            return Err(Error::config("grid.nx", "need at least one cell along x"));
        }
        let stride = nx + 1;
        if kinds.len() != stride * (ny + 1) {
            return Err(Error::Shape(format!(
                "{} node kinds for a {}x{} node grid",
                kinds.len(),
                stride,
                ny + 1
            )));
        }
        for (k, kind) in kinds.iter().enumerate() {
            let (i, j) = (k % stride, k / stride);
            let on_boundary = i == 0 || j == 0 || i == nx || j == ny;
            if *kind == CellKind::Door && !on_boundary {
                return Err(Error::config(
                    "geometry.doors",
                    format!("door node ({i}, {j}) is not on the outer boundary"),
                ));
            }
        }
        if !kinds.contains(&CellKind::Interior) {
            return Err(Error::config("geometry", "no interior nodes remain"));
        }
        let mut slot = vec![None; kinds.len()];
        let mut active = Vec::new();
        for (k, kind) in kinds.iter().enumerate() {
            if kind.is_active() {
                slot[k] = Some(active.len());
                active.push(k);
            }
        }
        let mut grid = GridGeometry {
            nx,
            ny,
            h,
            origin,
            kinds,
            doors,
            snaps: Vec::new(),
            active,
            slot,
            links: Vec::new(),
        };
        grid.links = grid.active.iter().map(|&k| grid.compute_links(k)).collect();
        Ok(grid)
    }

    /// A single row of `n + 1` nodes (a 1-D problem), optionally with doors at the ends.
    pub fn line(n: usize, h: f64, left_door: bool, right_door: bool) -> Result<Self> {
        let mut kinds = vec![CellKind::Interior; n + 1];
        let mut doors = Vec::new();
        kinds[0] = if left_door { CellKind::Door } else { CellKind::Wall };
        kinds[n] = if right_door { CellKind::Door } else { CellKind::Wall };
        if left_door {
            doors.push(DoorSpan {
                name: "left".into(),
                edge: Edge::Left,
                lo: 0,
                hi: 0,
            });
        }
        if right_door {
            doors.push(DoorSpan {
                name: "right".into(),
                edge: Edge::Right,
                lo: 0,
                hi: 0,
            });
        }
        GridGeometry::from_parts(n, 0, h, [0.0, 0.0], kinds, doors)
    }

    fn compute_links(&self, node: usize) -> [Link; 4] {
        let (i, j) = self.ij(node);
        let stride = self.nx + 1;
        let link_to = |n: Option<usize>| match n {
            None => Link::Blocked,
            Some(k) => match self.kinds[k] {
                CellKind::Obstacle => Link::Blocked,
                CellKind::Door => Link::Door,
                _ => Link::Node(self.slot[k].expect("active node has a slot")),
            },
        };
        [
            link_to((i < self.nx).then(|| node + 1)),
            link_to((i > 0).then(|| node - 1)),
            link_to((j < self.ny).then(|| node + stride)),
            link_to((j > 0).then(|| node - stride)),
        ]
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn ny(&self) -> usize {
        self.ny
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn origin(&self) -> [f64; 2] {
        self.origin
    }

    pub fn extent(&self) -> Rect {
        Rect::new(
            self.origin[0],
            self.origin[1],
            self.origin[0] + self.nx as f64 * self.h,
            self.origin[1] + self.ny as f64 * self.h,
        )
    }

    pub fn node_count(&self) -> usize {
        self.kinds.len()
    }

    pub fn active_count(&self) -> usize {
        self.active.len()
    }

    pub fn kinds(&self) -> &[CellKind] {
        &self.kinds
    }

    pub fn kind(&self, node: usize) -> CellKind {
        self.kinds[node]
    }

    pub fn doors(&self) -> &[DoorSpan] {
        &self.doors
    }

    pub fn door_snaps(&self) -> &[DoorSnap] {
        &self.snaps
    }

    pub fn node_at(&self, i: usize, j: usize) -> usize {
        j * (self.nx + 1) + i
    }

    pub fn ij(&self, node: usize) -> (usize, usize) {
        (node % (self.nx + 1), node / (self.nx + 1))
    }

    pub fn node_xy(&self, node: usize) -> [f64; 2] {
        let (i, j) = self.ij(node);
        [
            self.origin[0] + i as f64 * self.h,
            self.origin[1] + j as f64 * self.h,
        ]
    }

    /// Compressed slot of a node, `None` for obstacles.
    pub fn slot(&self, node: usize) -> Option<usize> {
        self.slot[node]
    }

    /// Node index of an active slot.
    pub fn active_node(&self, slot: usize) -> usize {
        self.active[slot]
    }

    pub fn active_nodes(&self) -> &[usize] {
        &self.active
    }

    pub fn links(&self, slot: usize) -> &[Link; 4] {
        &self.links[slot]
    }

    pub fn is_door_slot(&self, slot: usize) -> bool {
        self.kinds[self.active[slot]] == CellKind::Door
    }

    pub fn count(&self, kind: CellKind) -> usize {
        self.kinds.iter().filter(|k| **k == kind).count()
    }

    /// Nodes along a door span, in along-edge order.
    pub fn door_nodes(&self, span: &DoorSpan) -> Vec<usize> {
        span_nodes(span, self.nx, self.ny)
    }

    /// Keep only active entries of a full-node field.
    pub fn compress(&self, field: &Field) -> Result<Vec<f64>> {
        if field.values.len() != self.node_count() {
            return Err(Error::Shape(format!(
                "field has {} values, grid has {} nodes",
                field.values.len(),
                self.node_count()
            )));
        }
        Ok(self.active.iter().map(|&k| field.values[k]).collect())
    }

    /// Scatter compressed values back onto every node; obstacles get zero.
    pub fn expand(&self, values: &[f64], kind: FieldKind) -> Field {
        debug_assert_eq!(values.len(), self.active_count());
        let mut out = vec![0.0; self.node_count()];
        for (s, &k) in self.active.iter().enumerate() {
            out[k] = values[s];
        }
        Field { kind, values: out }
    }

    #[inline]
    fn neighbour(&self, w: &[f64], slot: usize, dir: usize) -> f64 {
        match self.links[slot][dir] {
            Link::Node(t) => w[t],
            Link::Door => 0.0,
            Link::Blocked => w[slot],
        }
    }

    /// One-sided differences `(right-x, left-x, right-y, left-y)` at an active slot.
    #[inline]
    pub fn one_sided(&self, w: &[f64], slot: usize) -> [f64; 4] {
        let c = w[slot];
        let inv_h = 1.0 / self.h;
        [
            (self.neighbour(w, slot, EAST) - c) * inv_h,
            (c - self.neighbour(w, slot, WEST)) * inv_h,
            (self.neighbour(w, slot, NORTH) - c) * inv_h,
            (c - self.neighbour(w, slot, SOUTH)) * inv_h,
        ]
    }

    /// Five-point Laplacian at an active slot.
    #[inline]
    pub fn laplacian(&self, w: &[f64], slot: usize) -> f64 {
        let c = w[slot];
        let sum: f64 = (0..4).map(|d| self.neighbour(w, slot, d) - c).sum();
        sum / (self.h * self.h)
    }

    fn active_slot_of(&self, node: usize) -> Result<usize> {
        if node >= self.node_count() {
            return Err(Error::IndexOutOfRange {
                index: node,
                limit: self.node_count(),
            });
        }
        self.slot[node]
            .ok_or_else(|| Error::Input(format!("node {node} is an obstacle node")))
    }

    /// One-sided differences of a full-node field at `node`.
    pub fn upwind_gradient(&self, field: &Field, node: usize) -> Result<[f64; 4]> {
        let slot = self.active_slot_of(node)?;
        Ok(self.one_sided(&self.compress(field)?, slot))
    }

    /// Discrete Laplacian of a full-node field at `node`.
    pub fn discrete_laplacian(&self, field: &Field, node: usize) -> Result<f64> {
        let slot = self.active_slot_of(node)?;
        Ok(self.laplacian(&self.compress(field)?, slot))
    }

    /// Centred gradient used for post-processing.
    ///
    /// A blocked side mirrors the opposite neighbour, so the component normal
    /// to a wall or obstacle vanishes. A door node facing out of the domain
    /// uses the odd reflection, which keeps the outward derivative one-sided.
    pub fn centred_gradient(&self, w: &[f64], slot: usize) -> [f64; 2] {
        let door = self.is_door_slot(slot);
        let axis = |plus: usize, minus: usize| -> f64 {
            let c = w[slot];
            let read = |d: usize| match self.links[slot][d] {
                Link::Node(t) => Some(w[t]),
                Link::Door => Some(0.0),
                Link::Blocked => None,
            };
            let (p, m) = match (read(plus), read(minus)) {
                (Some(p), Some(m)) => (p, m),
                (Some(p), None) if door => (p, 2.0 * c - p),
                (None, Some(m)) if door => (2.0 * c - m, m),
                _ => return 0.0,
            };
            (p - m) / (2.0 * self.h)
        };
        [axis(EAST, WEST), axis(NORTH, SOUTH)]
    }

    /// Whether a point lies inside the obstacle region described by the node mask.
    pub fn in_obstacle(&self, p: [f64; 2]) -> bool {
        let fx = (p[0] - self.origin[0]) / self.h;
        let fy = (p[1] - self.origin[1]) / self.h;
        if fx < -GEOM_TOL || fy < -GEOM_TOL {
            return false;
        }
        let i = (fx.floor().max(0.0) as usize).min(self.nx.saturating_sub(1));
        let j = (fy.floor().max(0.0) as usize).min(self.ny.saturating_sub(1));
        let obstacle = |i: usize, j: usize| {
            i <= self.nx && j <= self.ny && self.kinds[self.node_at(i, j)] == CellKind::Obstacle
        };
        if self.ny > 0
            && obstacle(i, j)
            && obstacle(i + 1, j)
            && obstacle(i, j + 1)
            && obstacle(i + 1, j + 1)
        {
            return true;
        }
        let (ri, rj) = (fx.round(), fy.round());
        if (fx - ri).abs() < 1e-9 && (fy - rj).abs() < 1e-9 && ri >= 0.0 && rj >= 0.0 {
            return obstacle(ri as usize, rj as usize);
        }
        false
    }

    pub(crate) fn set_kind(&mut self, node: usize, kind: CellKind) {
        self.kinds[node] = kind;
    }

    pub(crate) fn doors_mut(&mut self) -> &mut Vec<DoorSpan> {
        &mut self.doors
    }

    /// Rebuild the active index and links after node kinds were edited.
    pub(crate) fn rebuild(self) -> Result<Self> {
        let snaps = self.snaps.clone();
        let mut g =
            GridGeometry::from_parts(self.nx, self.ny, self.h, self.origin, self.kinds, self.doors)?;
        g.snaps = snaps;
        Ok(g)
    }

    /// Snap a door description for this grid, without modifying it.
    pub(crate) fn snap_door_spec(&self, door: &DoorSpec) -> Result<(DoorSpan, DoorSnap)> {
        snap_door(self.extent(), self.h, self.nx, self.ny, door)
            .map_err(|m| Error::config(format!("door `{}`", door.name), m))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn evacuation_geometry() -> GeometrySpec {
        GeometrySpec {
            domain: Rect::new(0.0, 0.0, 50.0, 50.0),
            obstacles: vec![],
            doors: vec![
                DoorSpec::new("left", [0.0, 0.0], [7.5, 0.0]),
                DoorSpec::new("right", [42.5, 0.0], [50.0, 0.0]),
            ],
        }
    }

    #[test]
    fn doors_snap_to_bottom_edge_intervals() {
        let g = build_grid(&evacuation_geometry(), 50, 50).unwrap();
        let bottom: Vec<usize> = (0..=50)
            .filter(|&i| g.kind(g.node_at(i, 0)) == CellKind::Door)
            .collect();
        let expected: Vec<usize> = (0..=7).chain(43..=50).collect();
        assert_eq!(bottom, expected);
        assert_eq!(g.count(CellKind::Door), 16);
        for snap in g.door_snaps() {
            assert!(snap.error < g.h());
            assert!((snap.error - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_obstacle_list_leaves_inside_interior() {
        let g = build_grid(&evacuation_geometry(), 10, 10).unwrap();
        for j in 1..10 {
            for i in 1..10 {
                assert_eq!(g.kind(g.node_at(i, j)), CellKind::Interior);
            }
        }
        assert_eq!(g.active_count(), 121);
    }

    #[test]
    fn full_interior_obstacle_is_rejected() {
        let mut spec = evacuation_geometry();
        spec.obstacles.push(Rect::new(1.0, 1.0, 49.0, 49.0));
        let err = build_grid(&spec, 10, 10).unwrap_err();
        assert!(matches!(err, Error::Config { .. }), "{err}");
    }

    #[test]
    fn door_off_boundary_is_rejected() {
        let mut spec = evacuation_geometry();
        spec.doors.push(DoorSpec::new("mid", [10.0, 5.0], [20.0, 5.0]));
        assert!(build_grid(&spec, 10, 10).is_err());
    }

    #[test]
    fn door_overlapping_obstacle_is_rejected() {
        let mut spec = evacuation_geometry();
        spec.obstacles.push(Rect::new(0.0, 0.0, 5.0, 5.0));
        let err = build_grid(&spec, 10, 10).unwrap_err();
        assert!(err.to_string().contains("overlaps"), "{err}");
    }

    #[test]
    fn low_resolution_is_rejected() {
        assert!(build_grid(&evacuation_geometry(), 3, 3).is_err());
    }

    #[test]
    fn constant_field_has_zero_differences() {
        let g = build_grid(&evacuation_geometry(), 8, 8).unwrap();
        let f = Field::from_fn(&g, FieldKind::ValueFunction, |_| 3.0);
        let node = g.node_at(4, 4);
        assert_eq!(g.upwind_gradient(&f, node).unwrap(), [0.0; 4]);
        assert_eq!(g.discrete_laplacian(&f, node).unwrap(), 0.0);
    }

    #[test]
    fn linear_field_gives_unit_differences() {
        let h = 0.25;
        let g = GridGeometry::line(8, h, false, false).unwrap();
        let f = Field::from_fn(&g, FieldKind::ValueFunction, |p| p[0]);
        for i in 1..8 {
            let q = g.upwind_gradient(&f, i).unwrap();
            assert!((q[0] - 1.0).abs() < 1e-14 && (q[1] - 1.0).abs() < 1e-14);
            assert_eq!(q[2], 0.0);
            assert_eq!(q[3], 0.0);
        }
    }

    #[test]
    fn quadratic_field_has_laplacian_two() {
        let h = 0.5;
        let g = GridGeometry::line(10, h, false, false).unwrap();
        let f = Field::from_fn(&g, FieldKind::ValueFunction, |p| p[0] * p[0]);
        for i in 1..10 {
            assert!((g.discrete_laplacian(&f, i).unwrap() - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn blocked_face_has_zero_difference() {
        // Node 0 is a wall: the face to its left sees the node itself.
        let g = GridGeometry::line(4, 1.0, false, false).unwrap();
        let f = Field {
            kind: FieldKind::ValueFunction,
            values: vec![3.0, 1.0, 0.0, 0.0, 0.0],
        };
        let q = g.upwind_gradient(&f, 0).unwrap();
        assert_eq!(q[1], 0.0);
        assert_eq!(q[0], -2.0);
    }

    #[test]
    fn door_faces_read_zero() {
        let g = GridGeometry::line(4, 1.0, true, false).unwrap();
        let mut f = Field {
            kind: FieldKind::ValueFunction,
            values: vec![100.0, 2.0, 2.0, 2.0, 2.0],
        };
        let q = g.upwind_gradient(&f, 1).unwrap();
        assert_eq!(q[1], 2.0);
        f.values[0] = -7.0;
        assert_eq!(g.upwind_gradient(&f, 1).unwrap(), q);
    }

    #[test]
    fn laplacian_matches_dense_second_difference_matrix() {
        // Closed 5-node line: blocked ends give the zero-flux stencil.
        let w = [0.3, -1.2, 2.5, 0.7, -0.4];
        let n = w.len();
        let mut a = vec![vec![0.0; n]; n];
        for i in 0..n {
            if i > 0 {
                a[i][i - 1] += 1.0;
                a[i][i] -= 1.0;
            }
            if i + 1 < n {
                a[i][i + 1] += 1.0;
                a[i][i] -= 1.0;
            }
        }
        let g = GridGeometry::line(n - 1, 1.0, false, false).unwrap();
        for i in 0..n {
            let dense: f64 = (0..n).map(|j| a[i][j] * w[j]).sum();
            assert!((g.laplacian(&w, i) - dense).abs() < 1e-14);
        }
    }

    #[test]
    fn centred_gradient_is_tangential_at_walls() {
        let g = build_grid(&evacuation_geometry(), 10, 10).unwrap();
        let w: Vec<f64> = g
            .active_nodes()
            .iter()
            .map(|&k| {
                let p = g.node_xy(k);
                p[0] * 0.3 + p[1] * p[1] * 0.01
            })
            .collect();
        let top = g.slot(g.node_at(5, 10)).unwrap();
        assert_eq!(g.centred_gradient(&w, top)[1], 0.0);
        let left = g.slot(g.node_at(0, 5)).unwrap();
        assert_eq!(g.centred_gradient(&w, left)[0], 0.0);
    }

    #[test]
    fn obstacle_region_follows_mask() {
        let mut spec = evacuation_geometry();
        spec.obstacles.push(Rect::new(10.0, 10.0, 20.0, 20.0));
        let g = build_grid(&spec, 10, 10).unwrap();
        assert!(g.in_obstacle([15.0, 15.0]));
        assert!(g.in_obstacle([10.0, 10.0]));
        assert!(!g.in_obstacle([9.0, 15.0]));
        assert!(!g.in_obstacle([25.0, 25.0]));
    }
}
