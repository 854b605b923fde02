//! Batch command-line interface.
//!
//! A run directory holds everything later commands need: the resolved
//! scenario, the raw solution vector, plain-text tables and a manifest
//! with a checksum per file. `compare` and `trajectories` reload runs from
//! disk instead of solving again.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::{
    event_slopes, price_of_anarchy, sample_trajectories, total_cost, uniform_starts,
    velocity_at_step, SlopeReport, SolveResult,
};
use crate::error::{Error, Result};
use crate::grid::DoorSnap;
use crate::hamiltonian::HamiltonianMode;
use crate::newton::{SolveDiagnostics, SolveError, SolverConfig, StageSummary};
use crate::scenario::{
    evacuation_preset, parse_scenario, scenario_digest, serialize_scenario, validate, Discretized, Scenario,
    Severity,
};
use crate::switching::{solve_switching, EventSnap, GlobalState};

pub const MANIFEST: &str = "manifest";
pub const SCENARIO: &str = "scenario.toml";
pub const SOLUTION: &str = "solution.bin";
pub const MASS_CURVE: &str = "mass_curve";
pub const DIAGNOSTICS: &str = "diagnostics";
pub const METRICS: &str = "metrics";
pub const COMPARE: &str = "compare";
pub const TRAJECTORIES: &str = "trajectories";
pub const TRAJECTORY_EXITS: &str = "trajectory_exits";

/// Exit status for a solve that ran but did not converge.
pub const EXIT_NOT_CONVERGED: i32 = 2;
/// Exit status for bad input or I/O failure.
pub const EXIT_ERROR: i32 = 1;

#[derive(Debug, Parser)]
#[command(name = "mfg-switch", version, about = "Crowd evacuation mean field games with switching geometry")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve a scenario and write a run directory.
    Solve(SolveArgs),
    /// Compare two runs of the same scenario.
    Compare(CompareArgs),
    /// Integrate zero-noise agent paths through a solved run.
    Trajectories(TrajectoryArgs),
}

#[derive(Debug, Args)]
pub struct SolveArgs {
    /// Built-in scenario.
    #[arg(long, value_parser = ["evacuation"], conflicts_with = "scenario", required_unless_present = "scenario")]
    pub preset: Option<String>,
    /// Scenario file (TOML).
    #[arg(long)]
    pub scenario: Option<PathBuf>,
    #[arg(long, value_parser = parse_mode)]
    pub mode: Option<HamiltonianMode>,
    #[arg(long)]
    pub nx: Option<usize>,
    #[arg(long)]
    pub ny: Option<usize>,
    /// Number of time steps.
    #[arg(long)]
    pub nt: Option<usize>,
    /// Comma-separated decreasing viscosities ending at the scenario's.
    #[arg(long, value_delimiter = ',')]
    pub nu_schedule: Option<Vec<f64>>,
    /// Newton tolerance on the residual sup-norm.
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
    /// Snapshot every this many levels (0 keeps only event neighbourhoods).
    #[arg(long, default_value_t = 10)]
    pub snapshots: usize,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    pub run_a: PathBuf,
    pub run_b: PathBuf,
    /// Directory for the `compare` file (defaults to the first run).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrajectoryArgs {
    pub run: PathBuf,
    /// Uniform `n × n` start grid over the domain.
    #[arg(long, default_value_t = 10)]
    pub grid: usize,
    /// Explicit start `x,y`; repeatable. Replaces the grid when given.
    #[arg(long = "start", value_parser = parse_point)]
    pub starts: Vec<[f64; 2]>,
    /// File of `x y` lines. Replaces the grid when given.
    #[arg(long)]
    pub starts_file: Option<PathBuf>,
}

fn parse_mode(s: &str) -> std::result::Result<HamiltonianMode, String> {
    match s {
        "mfg" => Ok(HamiltonianMode::Mfg),
        "mfc" => Ok(HamiltonianMode::Mfc),
        _ => Err(format!("unknown mode {s:?}, expected mfg or mfc")),
    }
}

fn parse_point(s: &str) -> std::result::Result<[f64; 2], String> {
    let (x, y) = s.split_once(',').ok_or_else(|| format!("expected x,y, got {s:?}"))?;
    let p = |v: &str| v.trim().parse::<f64>().map_err(|e| format!("{v:?}: {e}"));
    Ok([p(x)?, p(y)?])
}

/// Checksum of one emitted file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub name: String,
    pub sha256: String,
}

/// Convergence facts that do not depend on the clock.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Convergence {
    pub converged: bool,
    pub newton_iterations: usize,
    pub final_residual: f64,
    pub stages: Vec<StageSummary>,
}

impl Convergence {
    fn from_diagnostics(d: &SolveDiagnostics) -> Self {
        Convergence {
            converged: d.converged,
            newton_iterations: d.stages.iter().map(|s| s.newton_iterations).sum(),
            final_residual: d.final_residual(),
            stages: d.stages.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestResolution {
    pub nx: usize,
    pub ny: usize,
    pub nt: usize,
}

/// Index of a run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub version: String,
    pub digest: String,
    pub mode: HamiltonianMode,
    pub resolution: ManifestResolution,
    pub solver: SolverConfig,
    pub convergence: Convergence,
    /// Door intervals of the initial geometry as placed on the grid.
    #[serde(default)]
    pub door_snaps: Vec<DoorSnap>,
    /// Event times as placed on the time grid.
    #[serde(default)]
    pub event_snaps: Vec<EventSnap>,
    pub files: Vec<FileEntry>,
}

impl RunManifest {
    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = read_text(&path)?;
        toml::from_str(&text).map_err(|e| Error::Input(format!("{}: {e}", path.display())))
    }

    fn checksum(&self, name: &str) -> Option<&str> {
        self.files.iter().find(|f| f.name == name).map(|f| f.sha256.as_str())
    }
}

/// Entry point shared by the binary and the tests; returns the exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_ERROR } else { 0 };
        }
    };
    let outcome = match cli.command {
        Command::Solve(a) => cmd_solve(&a),
        Command::Compare(a) => cmd_compare(&a).map(|_| 0),
        Command::Trajectories(a) => cmd_trajectories(&a).map(|_| 0),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_ERROR
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Input(format!("{}: {e}", path.display()))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| io_err(path, e))
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes files into a run directory and remembers their checksums.
struct RunWriter {
    dir: PathBuf,
    files: Vec<FileEntry>,
}

impl RunWriter {
    fn new(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        Ok(RunWriter {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        })
    }

    fn put(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.dir.join(name);
        fs::write(&path, bytes).map_err(|e| io_err(&path, e))?;
        self.files.retain(|f| f.name != name);
        self.files.push(FileEntry {
            name: name.to_string(),
            sha256: sha256_hex(bytes),
        });
        Ok(())
    }

    fn finish(mut self, mut manifest: RunManifest) -> Result<()> {
        self.files.sort_by(|a, b| a.name.cmp(&b.name));
        manifest.files = self.files;
        let text = toml::to_string(&manifest).map_err(|e| Error::Internal(format!("manifest: {e}")))?;
        let path = self.dir.join(MANIFEST);
        fs::write(&path, text).map_err(|e| io_err(&path, e))
    }
}

/// Number formatting used by every table: 17 significant digits.
fn num(v: f64) -> String {
    format!("{v:.16e}")
}

fn load_scenario(args: &SolveArgs) -> Result<Scenario> {
    let mut s = match (&args.preset, &args.scenario) {
        (Some(_), _) => evacuation_preset(),
        (None, Some(path)) => parse_scenario(&read_text(path)?).map_err(|e| match e {
            Error::Config { path: p, message } => Error::Config {
                path: format!("{}: {p}", path.display()),
                message,
            },
            other => other,
        })?,
        (None, None) => return Err(Error::Input("either --preset or --scenario is required".into())),
    };
    if let Some(m) = args.mode {
        s.dynamics.mode = m;
    }
    if let Some(nx) = args.nx {
        s.resolution.nx = nx;
    }
    if let Some(ny) = args.ny {
        s.resolution.ny = ny;
    }
    if let Some(nt) = args.nt {
        s.dynamics.steps = nt;
    }
    if let Some(sched) = &args.nu_schedule {
        s.solver.nu_schedule = sched.clone();
    }
    if let Some(tol) = args.tol {
        s.solver.newton_tol = tol;
    }
    let diags = validate(&s);
    for d in &diags {
        eprintln!("{d}");
    }
    if let Some(d) = diags.iter().find(|d| d.severity == Severity::Error) {
        return Err(Error::config(d.path.clone(), d.message.clone()));
    }
    Ok(s)
}

fn diagnostics_of(e: &SolveError) -> Option<&SolveDiagnostics> {
    match e {
        SolveError::NotConverged { diagnostics, .. } | SolveError::Stage { diagnostics, .. } => Some(diagnostics),
        SolveError::WarmStart { source, .. } => diagnostics_of(source),
        _ => None,
    }
}

fn diagnostics_text(d: &SolveDiagnostics, error: Option<&str>) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# solver diagnostics");
    let _ = writeln!(out, "converged {}", d.converged);
    let _ = writeln!(out, "wall_time_secs {}", num(d.wall_time_secs));
    let _ = writeln!(out, "residual_evaluations {}", d.residual_evaluations);
    if let Some(e) = error {
        let _ = writeln!(out, "error {}", e.replace('\n', " "));
    }
    let _ = writeln!(out, "# stage nu newton_iterations krylov_iterations final_residual converged");
    for (i, s) in d.stages.iter().enumerate() {
        let _ = writeln!(
            out,
            "stage {i} {} {} {} {} {}",
            num(s.nu),
            s.newton_iterations,
            s.krylov_iterations,
            num(s.final_residual),
            s.converged
        );
    }
    let _ = writeln!(out, "# iterate residual_sup krylov_iterations (last stage)");
    for (i, r) in d.residual_history.iter().enumerate() {
        let k = if i == 0 { 0 } else { d.krylov_iterations[i - 1] };
        let _ = writeln!(out, "iterate {i} {} {k}", num(*r));
    }
    out
}

fn mass_curve_text(result: &SolveResult) -> String {
    let mut out = String::from("# t_min persons\n");
    for (t, p) in result.mass_curve() {
        let _ = writeln!(out, "{} {}", num(t), num(p));
    }
    out
}

/// Levels that get a snapshot: every `stride`-th one, both ends, and the
/// levels on either side of each event.
pub fn snapshot_levels(result: &SolveResult, stride: usize) -> Vec<usize> {
    let n = result.total_steps();
    let mut levels: Vec<usize> = if stride > 0 { (0..=n).step_by(stride).collect() } else { Vec::new() };
    levels.push(0);
    levels.push(n);
    for snap in &result.problem.snaps {
        let e = snap.step;
        levels.extend([e.saturating_sub(1), e, (e + 1).min(n)]);
    }
    levels.sort_unstable();
    levels.dedup();
    levels
}

pub fn snapshot_name(k: usize) -> String {
    format!("snapshot_t{k:05}")
}

fn snapshot_text(result: &SolveResult, k: usize) -> String {
    let vel = velocity_at_step(&result.state, &result.params.cost, k);
    let g = &vel.grid;
    let m = result.state.density(k);
    let u = result.state.value(k);
    let mut out = String::new();
    let _ = writeln!(
        out,
        "# level {k} t_min {} h_m {} persons {}",
        num(k as f64 * result.dt()),
        num(g.h()),
        num(result.population_at_step(k))
    );
    let _ = writeln!(out, "# x_m y_m m_per_m2 u vx_m_per_min vy_m_per_min");
    for (s, &node) in g.active_nodes().iter().enumerate() {
        let [x, y] = g.node_xy(node);
        let _ = writeln!(
            out,
            "{} {} {} {} {} {}",
            num(x),
            num(y),
            num(m[s]),
            num(u[s]),
            num(vel.vx[s]),
            num(vel.vy[s])
        );
    }
    out
}

fn metrics_text(result: &SolveResult) -> Result<String> {
    let j = total_cost(result)?;
    let mut out = String::from("# name value\n");
    let _ = writeln!(out, "total_cost {}", num(j));
    let _ = writeln!(out, "initial_persons {}", num(result.population_at_step(0)));
    let _ = writeln!(out, "final_persons {}", num(result.population_at_step(result.total_steps())));
    for r in event_slopes(result) {
        let _ = writeln!(out, "{}", slope_line(None, &r));
    }
    Ok(out)
}

fn slope_line(run: Option<&str>, r: &SlopeReport) -> String {
    let tag = run.map(|r| format!(" run {r}")).unwrap_or_default();
    format!(
        "slope_event{tag} t {} step {} slope_before {} slope_after {} rate_increase {}",
        num(r.time),
        r.step,
        num(r.slope_before),
        num(r.slope_after),
        num(r.rate_increase())
    )
}

fn solution_bytes(state: &GlobalState) -> Vec<u8> {
    state.flatten().iter().flat_map(|v| v.to_le_bytes()).collect()
}

/// Solve and write a run directory; returns the exit status.
pub fn cmd_solve(args: &SolveArgs) -> Result<i32> {
    let scenario = load_scenario(args)?;
    let Discretized {
        problem,
        params,
        initial_m,
        terminal_u,
    } = scenario.discretize()?;
    let mut writer = RunWriter::new(&args.out)?;
    writer.put(SCENARIO, serialize_scenario(&scenario)?.as_bytes())?;
    let mut manifest = RunManifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        digest: scenario_digest(&scenario),
        mode: scenario.dynamics.mode,
        resolution: ManifestResolution {
            nx: scenario.resolution.nx,
            ny: scenario.resolution.ny,
            nt: scenario.dynamics.steps,
        },
        solver: scenario.solver.clone(),
        convergence: Convergence {
            converged: false,
            newton_iterations: 0,
            final_residual: f64::NAN,
            stages: Vec::new(),
        },
        door_snaps: problem.first_grid().door_snaps().to_vec(),
        event_snaps: problem.snaps.clone(),
        files: Vec::new(),
    };
    for d in manifest.door_snaps.iter().filter(|d| d.error > 0.0) {
        eprintln!(
            "note: door {} placed at [{}, {}] (requested [{}, {}])",
            d.name, d.snapped.0, d.snapped.1, d.requested.0, d.requested.1
        );
    }
    for e in manifest.event_snaps.iter().filter(|e| e.distance > 0.0) {
        eprintln!("note: event at t = {} moved to t = {} (step {})", e.requested, e.snapped, e.step);
    }
    let (state, diagnostics) = match solve_switching(&problem, &terminal_u, &initial_m, &params, &scenario.solver) {
        Ok(v) => v,
        Err(SolveError::Model(e)) => return Err(e),
        Err(e) => {
            let d = diagnostics_of(&e).cloned().unwrap_or_default();
            writer.put(DIAGNOSTICS, diagnostics_text(&d, Some(&e.to_string())).as_bytes())?;
            manifest.convergence = Convergence::from_diagnostics(&d);
            writer.finish(manifest)?;
            eprintln!("error: {e}");
            return Ok(EXIT_NOT_CONVERGED);
        }
    };
    let result = SolveResult {
        scenario,
        problem,
        params,
        state,
        diagnostics,
    };
    writer.put(SOLUTION, &solution_bytes(&result.state))?;
    writer.put(DIAGNOSTICS, diagnostics_text(&result.diagnostics, None).as_bytes())?;
    writer.put(MASS_CURVE, mass_curve_text(&result).as_bytes())?;
    writer.put(METRICS, metrics_text(&result)?.as_bytes())?;
    for k in snapshot_levels(&result, args.snapshots) {
        writer.put(&snapshot_name(k), snapshot_text(&result, k).as_bytes())?;
    }
    manifest.convergence = Convergence::from_diagnostics(&result.diagnostics);
    writer.finish(manifest)?;
    Ok(0)
}

/// Reload a converged run from its directory, checking the solution checksum.
pub fn load_run(dir: &Path) -> Result<(RunManifest, SolveResult)> {
    let manifest = RunManifest::read(dir)?;
    if !manifest.convergence.converged {
        return Err(Error::Input(format!("{} holds an unconverged run", dir.display())));
    }
    let scenario = parse_scenario(&read_text(&dir.join(SCENARIO))?)?;
    if scenario_digest(&scenario) != manifest.digest {
        return Err(Error::Input(format!("{}: scenario does not match manifest digest", dir.display())));
    }
    let path = dir.join(SOLUTION);
    let bytes = fs::read(&path).map_err(|e| io_err(&path, e))?;
    if manifest.checksum(SOLUTION) != Some(sha256_hex(&bytes).as_str()) {
        return Err(Error::Input(format!("{}: checksum mismatch", path.display())));
    }
    if bytes.len() % 8 != 0 {
        return Err(Error::Input(format!("{}: truncated", path.display())));
    }
    let z: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    let Discretized { problem, params, .. } = scenario.discretize()?;
    let state = GlobalState::unflatten(&problem, &z)?;
    let diagnostics = SolveDiagnostics {
        converged: true,
        residual_history: vec![manifest.convergence.final_residual],
        stages: manifest.convergence.stages.clone(),
        ..Default::default()
    };
    Ok((
        manifest,
        SolveResult {
            scenario,
            problem,
            params,
            state,
            diagnostics,
        },
    ))
}

/// Read `name value` lines, skipping comments.
fn read_metrics(dir: &Path) -> Result<BTreeMap<String, f64>> {
    let path = dir.join(METRICS);
    let mut out = BTreeMap::new();
    for line in read_text(&path)?.lines() {
        let mut it = line.split_whitespace();
        if let (Some(k), Some(v), None) = (it.next(), it.next(), it.next()) {
            if k.starts_with('#') {
                continue;
            }
            let v = v
                .parse()
                .map_err(|e| Error::Input(format!("{}: {k}: {e}", path.display())))?;
            out.insert(k.to_string(), v);
        }
    }
    Ok(out)
}

/// Merge two runs of one scenario into a `compare` table; returns its path.
pub fn cmd_compare(args: &CompareArgs) -> Result<PathBuf> {
    let (ma, ra) = load_run(&args.run_a)?;
    let (mb, rb) = load_run(&args.run_b)?;
    if ma.digest != mb.digest {
        return Err(Error::Input(format!(
            "scenario digests differ ({} vs {}); runs are not comparable",
            ma.digest, mb.digest
        )));
    }
    let cost = |dir: &Path| -> Result<f64> {
        read_metrics(dir)?
            .get("total_cost")
            .copied()
            .ok_or_else(|| Error::Input(format!("{}: no total_cost in metrics", dir.display())))
    };
    let (ja, jb) = (cost(&args.run_a)?, cost(&args.run_b)?);
    let poa = match (ma.mode, mb.mode) {
        (HamiltonianMode::Mfc, HamiltonianMode::Mfg) => price_of_anarchy(jb, ja)?,
        (HamiltonianMode::Mfg, HamiltonianMode::Mfc) => price_of_anarchy(ja, jb)?,
        _ if ja == jb => 1.0,
        _ => ja / jb,
    };
    let mut out = String::new();
    let _ = writeln!(out, "# poa {}", num(poa));
    let _ = writeln!(out, "# mode_a {} mode_b {}", ma.mode.as_str(), mb.mode.as_str());
    let _ = writeln!(out, "# total_cost_a {} total_cost_b {}", num(ja), num(jb));
    for (tag, r) in [("a", &ra), ("b", &rb)] {
        for s in event_slopes(r) {
            let _ = writeln!(out, "# {}", slope_line(Some(tag), &s));
        }
    }
    let _ = writeln!(out, "# t_min persons_a persons_b");
    for ((t, pa), (_, pb)) in ra.mass_curve().into_iter().zip(rb.mass_curve()) {
        let _ = writeln!(out, "{} {} {}", num(t), num(pa), num(pb));
    }
    let dir = args.out.clone().unwrap_or_else(|| args.run_a.clone());
    fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    let path = dir.join(COMPARE);
    fs::write(&path, out).map_err(|e| io_err(&path, e))?;
    Ok(path)
}

fn read_starts(path: &Path) -> Result<Vec<[f64; 2]>> {
    let mut out = Vec::new();
    for (i, line) in read_text(path)?.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let v: Vec<f64> = line
            .split(|c: char| c.is_whitespace() || c == ',')
            .filter(|s| !s.is_empty())
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Input(format!("{}:{}: {e}", path.display(), i + 1)))?;
        if v.len() != 2 {
            return Err(Error::Input(format!("{}:{}: expected two numbers", path.display(), i + 1)));
        }
        out.push([v[0], v[1]]);
    }
    Ok(out)
}

/// Integrate agent paths and write `trajectories` and `trajectory_exits`
/// into the run directory; returns the number of paths written.
pub fn cmd_trajectories(args: &TrajectoryArgs) -> Result<usize> {
    let (_, result) = load_run(&args.run)?;
    let grid = result.state.grid_at(0).clone();
    let explicit = !args.starts.is_empty() || args.starts_file.is_some();
    let mut starts = args.starts.clone();
    if let Some(p) = &args.starts_file {
        starts.extend(read_starts(p)?);
    }
    let starts = if explicit { starts } else { uniform_starts(&grid.extent(), args.grid) };
    let extent = grid.extent();
    let mut kept = Vec::new();
    let mut stderr = std::io::stderr().lock();
    for p in starts {
        if !extent.contains(p, 1e-9) || grid.in_obstacle(p) {
            let _ = writeln!(stderr, "warning: start ({}, {}) is outside the free region, skipped", p[0], p[1]);
        } else {
            kept.push(p);
        }
    }
    let paths = sample_trajectories(&result, &kept)?;
    let mut table = String::from("# id t_min x_m y_m\n");
    let mut exits = String::from("# id exit start_x_m start_y_m\n");
    for tr in &paths {
        for &(t, x, y) in &tr.points {
            let _ = writeln!(table, "{} {} {} {}", tr.id, num(t), num(x), num(y));
        }
        let [sx, sy] = kept[tr.id];
        let _ = writeln!(
            exits,
            "{} {} {} {}",
            tr.id,
            tr.exit.as_deref().unwrap_or("none"),
            num(sx),
            num(sy)
        );
    }
    for (name, text) in [(TRAJECTORIES, &table), (TRAJECTORY_EXITS, &exits)] {
        let path = args.run.join(name);
        fs::write(&path, text).map_err(|e| io_err(&path, e))?;
    }
    Ok(paths.len())
}
