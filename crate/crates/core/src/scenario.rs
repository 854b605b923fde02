//! Problem descriptions: TOML ingestion, validation and the built-in room
//! evacuation preset.
//!
//! Lengths are metres, times minutes, densities persons per square metre.
//! The initial population is spread uniformly over the interior nodes that
//! fall inside any of the listed regions.

use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::grid::{build_grid, CellKind, DoorSpec, Field, FieldKind, GeometrySpec, Rect};
use crate::hamiltonian::{CongestionCost, HamiltonianMode};
use crate::newton::SolverConfig;
use crate::residual::SegmentParams;
use crate::switching::{partition_timeline, GeometryEdit, SegmentedProblem, SwitchEvent};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct Meta {
    #[serde(default)]
    pub name: String,
    /// Free-form note on anything approximated in this description.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub approximation: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Population {
    /// Number of people at `t = 0`.
    pub total: f64,
    /// Rectangles holding the people; overlapping regions count once.
    pub regions: Vec<Rect>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dynamics {
    /// Viscosity `ν = σ²/2`.
    pub nu: f64,
    /// Horizon in minutes.
    pub horizon: f64,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default)]
    pub mode: HamiltonianMode,
    /// Only zero is supported.
    #[serde(default)]
    pub terminal_cost: f64,
}

fn default_steps() -> usize {
    500
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Resolution {
    pub nx: usize,
    pub ny: usize,
}

impl Default for Resolution {
    fn default() -> Self {
        Resolution { nx: 50, ny: 50 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default)]
    pub meta: Meta,
    pub geometry: GeometrySpec,
    pub population: Population,
    #[serde(default)]
    pub cost: CongestionCost,
    pub dynamics: Dynamics,
    #[serde(default)]
    pub resolution: Resolution,
    #[serde(default)]
    pub events: Vec<SwitchEvent>,
    #[serde(default)]
    pub solver: SolverConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Severity {
    Error,
    Warning,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Diagnostic {
    pub severity: Severity,
    pub path: String,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = match self.severity {
            Severity::Error => "error",
            Severity::Warning => "warning",
        };
        write!(f, "{tag} at `{}`: {}", self.path, self.message)
    }
}

/// Everything a solve needs, discretized.
#[derive(Debug, Clone)]
pub struct Discretized {
    pub problem: SegmentedProblem,
    pub params: SegmentParams,
    pub initial_m: Field,
    pub terminal_u: Field,
}

/// Parse a TOML scenario, rejecting unknown keys and invalid values.
pub fn parse_scenario(text: &str) -> Result<Scenario> {
    let s: Scenario = toml::from_str(text).map_err(|e| {
        let path = e
            .span()
            .map(|r| format!("byte {}", r.start))
            .unwrap_or_else(|| "document".into());
        Error::config(path, e.message().to_string())
    })?;
    if let Some(d) = validate(&s)
        .into_iter()
        .find(|d| d.severity == Severity::Error)
    {
        return Err(Error::config(d.path, d.message));
    }
    Ok(s)
}

pub fn serialize_scenario(s: &Scenario) -> Result<String> {
    toml::to_string(s).map_err(|e| Error::Internal(format!("cannot serialize scenario: {e}")))
}

/// Hex SHA-256 of the physical problem, ignoring mode and solver settings.
pub fn scenario_digest(s: &Scenario) -> String {
    let mut canon = s.clone();
    canon.dynamics.mode = HamiltonianMode::Mfg;
    canon.solver = SolverConfig::default();
    canon.meta = Meta::default();
    let text = serialize_scenario(&canon).unwrap_or_default();
    hex::encode(Sha256::digest(text.as_bytes()))
}

fn error(path: impl Into<String>, message: impl Into<String>) -> Diagnostic {
    Diagnostic {
        severity: Severity::Error,
        path: path.into(),
        message: message.into(),
    }
}

fn overlap_area(a: &Rect, b: &Rect) -> f64 {
    let w = a.x_max.min(b.x_max) - a.x_min.max(b.x_min);
    let h = a.y_max.min(b.y_max) - a.y_min.max(b.y_min);
    if w > 0.0 && h > 0.0 {
        w * h
    } else {
        0.0
    }
}

/// All problems with a scenario; an empty list means it can be solved.
pub fn validate(s: &Scenario) -> Vec<Diagnostic> {
    let mut out = Vec::new();
    let d = &s.dynamics;
    if !(d.nu > 0.0 && d.nu.is_finite()) {
        out.push(error("dynamics.nu", "viscosity must be positive"));
    }
    if !(d.horizon > 0.0 && d.horizon.is_finite()) {
        out.push(error("dynamics.horizon", "horizon must be positive"));
    }
    if d.steps == 0 {
        out.push(error("dynamics.steps", "need at least one time step"));
    }
    if d.terminal_cost != 0.0 {
        out.push(error("dynamics.terminal_cost", "only a zero terminal cost is supported"));
    }
    if !(s.population.total > 0.0 && s.population.total.is_finite()) {
        out.push(error("population.total", "population must be positive"));
    }
    if s.population.regions.is_empty() {
        out.push(error("population.regions", "at least one region is required"));
    }
    if let Err(Error::Config { path, message }) = s.cost.validate() {
        out.push(error(path, message));
    }
    if let Err(Error::Config { path, message }) = s.solver.validate() {
        out.push(error(path, message));
    } else if d.nu > 0.0 {
        if let Err(Error::Config { path, message }) = s.solver.schedule_for(d.nu) {
            out.push(error(path, message));
        }
    }
    for (k, ev) in s.events.iter().enumerate() {
        if !(ev.time > 0.0 && ev.time < d.horizon) {
            out.push(error(
                format!("events[{k}].time"),
                format!("event time {} lies outside (0, {})", ev.time, d.horizon),
            ));
        }
    }
    for (k, r) in s.population.regions.iter().enumerate() {
        let path = format!("population.regions[{k}]");
        if !s.geometry.domain.contains_rect(r, 1e-9) {
            out.push(error(&path, "region extends outside the domain"));
        }
        for (j, o) in s.geometry.obstacles.iter().enumerate() {
            if overlap_area(r, o) > 0.0 {
                out.push(error(&path, format!("region overlaps obstacle {j}")));
            }
        }
    }
    if !out.is_empty() {
        return out;
    }
    let grid = match build_grid(&s.geometry, s.resolution.nx, s.resolution.ny) {
        Ok(g) => g,
        Err(e) => {
            out.push(as_diagnostic(e));
            return out;
        }
    };
    match initial_density(s, &grid) {
        Ok(m0) => {
            let h2 = grid.h() * grid.h();
            let mass = h2 * m0.values.iter().sum::<f64>();
            if (mass - s.population.total).abs() > 1e-9 * s.population.total.max(1.0) {
                out.push(error(
                    "population",
                    format!("quadrature gives {mass} people instead of {}", s.population.total),
                ));
            }
        }
        Err(e) => out.push(as_diagnostic(e)),
    }
    if let Err(e) = partition_timeline(d.horizon, d.steps, grid.clone(), &s.events) {
        out.push(as_diagnostic(e));
    }
    // A priori speed bound: u stays within [0, c_time·T], so no one-cell
    // difference exceeds c_time·T/h.
    let dt = d.horizon / d.steps as f64;
    let v_max = 2.0 * s.cost.coefficient(0.0) * s.cost.c_time * d.horizon / grid.h();
    let courant = v_max * dt / grid.h();
    if courant > 2.0 {
        out.push(Diagnostic {
            severity: Severity::Warning,
            path: "dynamics.steps".into(),
            message: format!(
                "speed bound {v_max:.3} m/min gives a Courant number of {courant:.2}; \
                 the implicit scheme is stable but may smear fronts"
            ),
        });
    }
    out
}

fn as_diagnostic(e: Error) -> Diagnostic {
    match e {
        Error::Config { path, message } => error(path, message),
        other => error("scenario", other.to_string()),
    }
}

/// Uniform density over the interior nodes inside the population regions.
pub fn initial_density(s: &Scenario, grid: &crate::grid::GridGeometry) -> Result<Field> {
    let tol = 1e-9 * grid.h().max(1.0);
    let inside = |k: usize| {
        grid.kind(k) == CellKind::Interior
            && s
                .population
                .regions
                .iter()
                .any(|r| r.contains(grid.node_xy(k), tol))
    };
    let count = (0..grid.node_count()).filter(|&k| inside(k)).count();
    if count == 0 {
        return Err(Error::config(
            "population.regions",
            "regions contain no interior grid nodes",
        ));
    }
    let rho = s.population.total / (grid.h() * grid.h() * count as f64);
    let values = (0..grid.node_count())
        .map(|k| if inside(k) { rho } else { 0.0 })
        .collect();
    Ok(Field {
        kind: FieldKind::Density,
        values,
    })
}

impl Scenario {
    /// Build the grids, timeline and boundary data.
    pub fn discretize(&self) -> Result<Discretized> {
        if let Some(d) = validate(self)
            .into_iter()
            .find(|d| d.severity == Severity::Error)
        {
            return Err(Error::config(d.path, d.message));
        }
        let grid = build_grid(&self.geometry, self.resolution.nx, self.resolution.ny)?;
        let initial_m = initial_density(self, &grid)?;
        let d = &self.dynamics;
        let problem = partition_timeline(d.horizon, d.steps, grid, &self.events)?;
        let terminal_u = Field::zeros(problem.last_grid(), FieldKind::ValueFunction);
        let params = SegmentParams {
            nu: d.nu,
            dt: problem.dt,
            cost: self.cost,
            mode: d.mode,
        };
        Ok(Discretized {
            problem,
            params,
            initial_m,
            terminal_u,
        })
    }

    /// Same scenario with every door closed and no events.
    pub fn sealed(&self) -> Scenario {
        let mut s = self.clone();
        s.geometry.doors.clear();
        s.events.clear();
        s
    }

    /// Same scenario without events.
    pub fn eventless(&self) -> Scenario {
        let mut s = self.clone();
        s.events.clear();
        s
    }
}

/// Obstacles of the preset layout: a low barrier in front of the doors and
/// four rows of seating blocks with corridors along both side walls.
fn preset_obstacles() -> Vec<Rect> {
    let mut v = vec![Rect::new(10.0, 3.0, 40.0, 5.0)];
    for k in 0..4 {
        let y = 12.0 + 10.0 * k as f64;
        v.push(Rect::new(10.0, y, 40.0, y + 3.0));
    }
    v
}

fn preset_regions() -> Vec<Rect> {
    let mut v = vec![
        // Front aisle between the barrier and the bottom wall.
        Rect::new(8.0, 0.0, 42.0, 2.0),
        // Row directly behind the barrier.
        Rect::new(10.0, 5.0, 40.0, 8.0),
    ];
    for k in 0..4 {
        let y = 15.0 + 10.0 * k as f64;
        v.push(Rect::new(10.0, y, 40.0, y + 4.0));
    }
    v
}

/// The room evacuation benchmark: a 50 m square theatre with two doors on
/// the bottom wall, 3300 people, two barrier pieces removed at `t = 2` and
/// the right door widened to `[35, 50]` at `t = 5`.
pub fn evacuation_preset() -> Scenario {
    Scenario {
        meta: Meta {
            name: "evacuation".into(),
            approximation: Some(
                "obstacle blocks and seating regions approximate a theatre layout; \
                 door positions, population, costs and events are exact"
                    .into(),
            ),
        },
        geometry: GeometrySpec {
            domain: Rect::new(0.0, 0.0, 50.0, 50.0),
            obstacles: preset_obstacles(),
            doors: vec![
                DoorSpec::new("left", [0.0, 0.0], [7.5, 0.0]),
                DoorSpec::new("right", [42.5, 0.0], [50.0, 0.0]),
            ],
        },
        population: Population {
            total: 3300.0,
            regions: preset_regions(),
        },
        cost: CongestionCost::evacuation(),
        dynamics: Dynamics {
            nu: 0.05,
            horizon: 50.0,
            steps: 500,
            mode: HamiltonianMode::Mfg,
            terminal_cost: 0.0,
        },
        resolution: Resolution::default(),
        events: vec![
            SwitchEvent {
                time: 2.0,
                edits: vec![
                    GeometryEdit::RemoveObstacle {
                        rect: Rect::new(10.0, 3.0, 15.0, 5.0),
                    },
                    GeometryEdit::RemoveObstacle {
                        rect: Rect::new(35.0, 3.0, 40.0, 5.0),
                    },
                ],
            },
            SwitchEvent {
                time: 5.0,
                edits: vec![GeometryEdit::WidenDoor {
                    name: "right".into(),
                    from: [35.0, 0.0],
                    to: [50.0, 0.0],
                }],
            },
        ],
        solver: SolverConfig {
            nu_schedule: vec![0.4, 0.2, 0.1, 0.05],
            ..SolverConfig::default()
        },
    }
}
