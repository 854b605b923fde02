//! Matrix-free Newton–Krylov solver with damping and viscosity continuation.
//!
//! Jacobian-vector products come from central directional differences of the
//! residual, so a system only has to evaluate `Φ(Z)`. Linear steps are solved
//! with restarted GMRES, optionally right-preconditioned.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::{Error, Result};
use crate::linalg::{dot, norm2, norm_inf};

/// A square nonlinear system `Φ(Z) = 0`.
pub trait NonlinearSystem {
    fn dim(&self) -> usize;

    /// Write `Φ(z)` into `out`.
    fn residual(&self, z: &[f64], out: &mut [f64]) -> Result<()>;

    /// Approximate inverse of the Jacobian at `z`, rebuilt once per Newton step.
    fn preconditioner(&self, _z: &[f64]) -> Result<Option<Box<dyn Preconditioner + '_>>> {
        Ok(None)
    }
}

/// Applies an approximation of `J⁻¹`.
pub trait Preconditioner {
    fn apply(&self, r: &[f64], out: &mut [f64]);
}

/// Adapts a closure to [`NonlinearSystem`].
pub struct FnSystem<F> {
    dim: usize,
    f: F,
}

impl<F> FnSystem<F>
where
    F: Fn(&[f64], &mut [f64]) -> Result<()>,
{
    pub fn new(dim: usize, f: F) -> Self {
        FnSystem { dim, f }
    }
}

impl<F> NonlinearSystem for FnSystem<F>
where
    F: Fn(&[f64], &mut [f64]) -> Result<()>,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn residual(&self, z: &[f64], out: &mut [f64]) -> Result<()> {
        (self.f)(z, out)
    }
}

/// Which approximate inverse the switching solver builds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PreconditionerKind {
    None,
    /// Implicit heat step per time level, swept along the time axis.
    #[default]
    Heat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub newton_tol: f64,
    pub max_newton_iters: usize,
    pub krylov_tol: f64,
    pub krylov_max_iters: usize,
    pub krylov_restart: usize,
    pub jvp_step: f64,
    /// Step-shrink factor of the line search.
    pub damping: f64,
    pub max_backtracks: usize,
    /// Decreasing viscosities; empty means "target viscosity only".
    pub nu_schedule: Vec<f64>,
    pub preconditioner: PreconditionerKind,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            newton_tol: 1e-8,
            max_newton_iters: 50,
            krylov_tol: 1e-4,
            krylov_max_iters: 400,
            krylov_restart: 60,
            jvp_step: 1e-7,
            damping: 0.5,
            max_backtracks: 8,
            nu_schedule: Vec::new(),
            preconditioner: PreconditionerKind::Heat,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v > 0.0 && v.is_finite();
        if !positive(self.newton_tol) {
            return Err(Error::config("solver.newton_tol", "must be positive"));
        }
        if !positive(self.krylov_tol) || self.krylov_tol >= 1.0 {
            return Err(Error::config("solver.krylov_tol", "must lie in (0, 1)"));
        }
        if !positive(self.jvp_step) {
            return Err(Error::config("solver.jvp_step", "must be positive"));
        }
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return Err(Error::config("solver.damping", "must lie in (0, 1]"));
        }
        if self.max_newton_iters == 0 || self.krylov_max_iters == 0 || self.krylov_restart == 0 {
            return Err(Error::config("solver", "iteration limits must be at least 1"));
        }
        for w in self.nu_schedule.windows(2) {
            if !(w[1] < w[0]) {
                return Err(Error::config(
                    "solver.nu_schedule",
                    "viscosities must be strictly decreasing",
                ));
            }
        }
        if self.nu_schedule.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(Error::config("solver.nu_schedule", "viscosities must be nonnegative"));
        }
        Ok(())
    }

    /// The continuation schedule ending at `target`.
    pub fn schedule_for(&self, target: f64) -> Result<Vec<f64>> {
        self.validate()?;
        if self.nu_schedule.is_empty() {
            return Ok(vec![target]);
        }
        let last = *self.nu_schedule.last().expect("nonempty");
        if (last - target).abs() > 1e-12 * target.abs().max(1.0) {
            return Err(Error::config(
                "solver.nu_schedule",
                format!("schedule ends at {last}, target viscosity is {target}"),
            ));
        }
        Ok(self.nu_schedule.clone())
    }
}

/// Summary of one continuation stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub nu: f64,
    pub newton_iterations: usize,
    pub krylov_iterations: usize,
    pub final_residual: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SolveDiagnostics {
    /// Sup-norm residual of every accepted iterate, starting with the initial guess.
    pub residual_history: Vec<f64>,
    /// GMRES iterations per Newton step.
    pub krylov_iterations: Vec<usize>,
    pub residual_evaluations: usize,
    pub wall_time_secs: f64,
    pub converged: bool,
    pub stages: Vec<StageSummary>,
}

impl SolveDiagnostics {
    pub fn newton_iterations(&self) -> usize {
        self.krylov_iterations.len()
    }

    pub fn final_residual(&self) -> f64 {
        self.residual_history.last().copied().unwrap_or(f64::INFINITY)
    }
}

/// Result of a GMRES solve.
#[derive(Debug, Clone, PartialEq)]
pub struct KrylovOutcome {
    pub solution: Vec<f64>,
    pub iterations: usize,
    pub relative_residual: f64,
}

#[derive(Error)]
pub enum SolveError {
    #[error(transparent)]
    Model(#[from] Error),

    #[error("linear solve stopped after {iterations} iterations at relative residual {relative_residual:e}")]
    Linear {
        iterations: usize,
        relative_residual: f64,
        best: Vec<f64>,
    },

    #[error("Newton stopped after {iterations} iterations at residual {residual:e}: {reason}")]
    NotConverged {
        iterations: usize,
        residual: f64,
        reason: String,
        best: Vec<f64>,
        diagnostics: Box<SolveDiagnostics>,
    },

    #[error("continuation failed at nu = {nu}: {source}")]
    Stage {
        nu: f64,
        /// Last viscosity that converged, with its solution.
        last_good: Option<(f64, Vec<f64>)>,
        diagnostics: Box<SolveDiagnostics>,
        source: Box<SolveError>,
    },

    #[error("segment {segment} failed during warm start: {source}")]
    WarmStart {
        segment: usize,
        source: Box<SolveError>,
    },
}

impl std::fmt::Debug for SolveError {
    // Iterates can hold millions of entries; show their length only.
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SolveError::Model(e) => f.debug_tuple("Model").field(e).finish(),
            SolveError::Linear {
                iterations,
                relative_residual,
                best,
            } => f
                .debug_struct("Linear")
                .field("iterations", iterations)
                .field("relative_residual", relative_residual)
                .field("best_len", &best.len())
                .finish(),
            SolveError::NotConverged {
                iterations,
                residual,
                reason,
                best,
                diagnostics,
            } => f
                .debug_struct("NotConverged")
                .field("iterations", iterations)
                .field("residual", residual)
                .field("reason", reason)
                .field("best_len", &best.len())
                .field("residual_history", &diagnostics.residual_history)
                .field("krylov_iterations", &diagnostics.krylov_iterations)
                .finish(),
            SolveError::Stage {
                nu,
                last_good,
                source,
                ..
            } => f
                .debug_struct("Stage")
                .field("nu", nu)
                .field("last_good_nu", &last_good.as_ref().map(|(nu, _)| *nu))
                .field("source", source)
                .finish(),
            SolveError::WarmStart { segment, source } => f
                .debug_struct("WarmStart")
                .field("segment", segment)
                .field("source", source)
                .finish(),
        }
    }
}

fn checked_residual<S: NonlinearSystem + ?Sized>(
    system: &S,
    z: &[f64],
    out: &mut [f64],
) -> Result<()> {
    system.residual(z, out)?;
    if let Some((index, value)) = out.iter().enumerate().find(|(_, v)| !v.is_finite()) {
        return Err(Error::NonFinite {
            index,
            value: *value,
        });
    }
    Ok(())
}

/// Central directional difference of the residual at `z` along `v`.
pub fn jacobian_vector_product<S: NonlinearSystem + ?Sized>(
    system: &S,
    z: &[f64],
    v: &[f64],
    jvp_step: f64,
) -> Result<Vec<f64>> {
    let n = system.dim();
    if z.len() != n || v.len() != n {
        return Err(Error::Shape(format!(
            "vectors of length {} and {} for a system of size {n}",
            z.len(),
            v.len()
        )));
    }
    let mut out = vec![0.0; n];
    let mut scratch = Workspace::new(n);
    jvp_into(system, z, v, jvp_step, &mut out, &mut scratch)?;
    Ok(out)
}

struct Workspace {
    zp: Vec<f64>,
    rp: Vec<f64>,
    rm: Vec<f64>,
    evals: usize,
}

impl Workspace {
    fn new(n: usize) -> Self {
        Workspace {
            zp: vec![0.0; n],
            rp: vec![0.0; n],
            rm: vec![0.0; n],
            evals: 0,
        }
    }
}

fn jvp_into<S: NonlinearSystem + ?Sized>(
    system: &S,
    z: &[f64],
    v: &[f64],
    jvp_step: f64,
    out: &mut [f64],
    ws: &mut Workspace,
) -> Result<()> {
    let vn = norm_inf(v);
    if vn == 0.0 {
        out.iter_mut().for_each(|x| *x = 0.0);
        return Ok(());
    }
    let eps = jvp_step * (1.0 + norm_inf(z)) / vn;
    for i in 0..z.len() {
        ws.zp[i] = z[i] + eps * v[i];
    }
    checked_residual(system, &ws.zp, &mut ws.rp)?;
    for i in 0..z.len() {
        ws.zp[i] = z[i] - eps * v[i];
    }
    checked_residual(system, &ws.zp, &mut ws.rm)?;
    ws.evals += 2;
    let inv = 0.5 / eps;
    for i in 0..z.len() {
        out[i] = (ws.rp[i] - ws.rm[i]) * inv;
    }
    Ok(())
}

/// Restarted GMRES for `A y = rhs`, right-preconditioned when `precond` is given.
///
/// Stops when `‖A y − rhs‖₂ ≤ krylov_tol · ‖rhs‖₂`. On failure the error
/// carries the iterate with the smallest residual.
pub fn krylov_solve(
    apply: &mut dyn FnMut(&[f64], &mut [f64]) -> Result<()>,
    rhs: &[f64],
    config: &SolverConfig,
    precond: Option<&dyn Preconditioner>,
) -> std::result::Result<KrylovOutcome, SolveError> {
    let n = rhs.len();
    if let Some((index, value)) = rhs.iter().enumerate().find(|(_, v)| !v.is_finite()) {
        return Err(Error::NonFinite {
            index,
            value: *value,
        }
        .into());
    }
    let bnorm = norm2(rhs);
    let mut y = vec![0.0; n];
    if bnorm == 0.0 {
        return Ok(KrylovOutcome {
            solution: y,
            iterations: 0,
            relative_residual: 0.0,
        });
    }
    let target = config.krylov_tol * bnorm;
    let restart = config.krylov_restart.min(n).max(1);
    let mut total = 0usize;
    let mut r = rhs.to_vec();
    let mut rnorm = bnorm;
    let mut w = vec![0.0; n];
    let mut pz = vec![0.0; n];

    let precondition = |v: &[f64], out: &mut [f64]| match precond {
        Some(p) => p.apply(v, out),
        None => out.copy_from_slice(v),
    };

    while total < config.krylov_max_iters {
        let mut basis: Vec<Vec<f64>> = Vec::with_capacity(restart + 1);
        basis.push(r.iter().map(|x| x / rnorm).collect());
        let mut hess = vec![vec![0.0; restart]; restart + 1];
        let mut cs = vec![0.0; restart];
        let mut sn = vec![0.0; restart];
        let mut g = vec![0.0; restart + 1];
        g[0] = rnorm;
        let mut k_used = 0;
        let mut est = rnorm;
        for k in 0..restart {
            if total >= config.krylov_max_iters {
                break;
            }
            precondition(&basis[k], &mut pz);
            apply(&pz, &mut w)?;
            total += 1;
            // Modified Gram–Schmidt.
            for (i, b) in basis.iter().enumerate() {
                let hik = dot(&w, b);
                hess[i][k] = hik;
                for (wj, bj) in w.iter_mut().zip(b) {
                    *wj -= hik * bj;
                }
            }
            let wnorm = norm2(&w);
            hess[k + 1][k] = wnorm;
            for i in 0..k {
                let t = cs[i] * hess[i][k] + sn[i] * hess[i + 1][k];
                hess[i + 1][k] = -sn[i] * hess[i][k] + cs[i] * hess[i + 1][k];
                hess[i][k] = t;
            }
            let (a, b) = (hess[k][k], hess[k + 1][k]);
            let d = a.hypot(b);
            if d == 0.0 {
                break;
            }
            cs[k] = a / d;
            sn[k] = b / d;
            hess[k][k] = d;
            hess[k + 1][k] = 0.0;
            g[k + 1] = -sn[k] * g[k];
            g[k] *= cs[k];
            est = g[k + 1].abs();
            k_used = k + 1;
            if est <= target || wnorm <= 1e-14 * bnorm {
                break;
            }
            basis.push(w.iter().map(|x| x / wnorm).collect());
        }
        if k_used == 0 {
            break;
        }
        // Back substitution for the small least-squares problem.
        let mut coef = vec![0.0; k_used];
        for i in (0..k_used).rev() {
            let mut s = g[i];
            for j in i + 1..k_used {
                s -= hess[i][j] * coef[j];
            }
            coef[i] = s / hess[i][i];
        }
        let mut update = vec![0.0; n];
        for (c, b) in coef.iter().zip(&basis) {
            for (u, bj) in update.iter_mut().zip(b) {
                *u += c * bj;
            }
        }
        precondition(&update, &mut pz);
        for (yi, zi) in y.iter_mut().zip(&pz) {
            *yi += zi;
        }
        // True residual for the restart.
        apply(&y, &mut w)?;
        for i in 0..n {
            r[i] = rhs[i] - w[i];
        }
        rnorm = norm2(&r);
        if rnorm <= target {
            return Ok(KrylovOutcome {
                solution: y,
                iterations: total,
                relative_residual: rnorm / bnorm,
            });
        }
        if est > target && k_used < restart && total < config.krylov_max_iters {
            // Breakdown without reaching the tolerance.
            break;
        }
    }
    Err(SolveError::Linear {
        iterations: total,
        relative_residual: rnorm / bnorm,
        best: y,
    })
}

/// Damped inexact Newton iteration from `z0`.
///
/// Each step solves `J Y = Φ(Z)` and accepts `Z − λY` for the first
/// `λ = 1, damping, damping², …` that lowers `‖Φ‖∞`.
pub fn newton_solve<S: NonlinearSystem + ?Sized>(
    system: &S,
    z0: &[f64],
    config: &SolverConfig,
) -> std::result::Result<(Vec<f64>, SolveDiagnostics), SolveError> {
    config.validate()?;
    let start = Instant::now();
    let n = system.dim();
    if z0.len() != n {
        return Err(Error::Shape(format!("initial guess has {} entries, system has {n}", z0.len())).into());
    }
    let mut z = z0.to_vec();
    let mut res = vec![0.0; n];
    checked_residual(system, &z, &mut res)?;
    let mut diag = SolveDiagnostics {
        residual_evaluations: 1,
        ..Default::default()
    };
    let mut norm = norm_inf(&res);
    diag.residual_history.push(norm);
    let mut ws = Workspace::new(n);
    let mut trial = vec![0.0; n];
    let mut trial_res = vec![0.0; n];

    let fail = |z: Vec<f64>, norm: f64, reason: String, mut diag: SolveDiagnostics, ws: &Workspace| {
        diag.residual_evaluations += ws.evals;
        diag.wall_time_secs = start.elapsed().as_secs_f64();
        SolveError::NotConverged {
            iterations: diag.krylov_iterations.len(),
            residual: norm,
            reason,
            best: z,
            diagnostics: Box::new(diag),
        }
    };

    loop {
        if norm <= config.newton_tol {
            diag.converged = true;
            break;
        }
        if diag.krylov_iterations.len() >= config.max_newton_iters {
            return Err(fail(z, norm, "iteration limit reached".into(), diag, &ws));
        }
        let pc = system.preconditioner(&z)?;
        let outcome = {
            let zc = &z;
            let ws_ref = &mut ws;
            let mut apply = |v: &[f64], out: &mut [f64]| jvp_into(system, zc, v, config.jvp_step, out, ws_ref);
            krylov_solve(&mut apply, &res, config, pc.as_deref())
        };
        let (step, iters) = match outcome {
            Ok(o) => (o.solution, o.iterations),
            Err(SolveError::Linear {
                iterations, best, ..
            }) if norm_inf(&best) > 0.0 => (best, iterations),
            Err(e) => return Err(e),
        };
        diag.krylov_iterations.push(iters);

        let mut lambda = 1.0;
        let mut accepted = false;
        for _ in 0..=config.max_backtracks {
            for i in 0..n {
                trial[i] = z[i] - lambda * step[i];
            }
            diag.residual_evaluations += 1;
            match checked_residual(system, &trial, &mut trial_res) {
                Ok(()) => {
                    let tn = norm_inf(&trial_res);
                    if tn < norm {
                        std::mem::swap(&mut z, &mut trial);
                        std::mem::swap(&mut res, &mut trial_res);
                        norm = tn;
                        accepted = true;
                        break;
                    }
                }
                Err(Error::NonFinite { .. }) => {}
                Err(e) => return Err(e.into()),
            }
            lambda *= config.damping;
        }
        if !accepted {
            return Err(fail(z, norm, "line search found no decrease".into(), diag, &ws));
        }
        diag.residual_history.push(norm);
    }
    diag.residual_evaluations += ws.evals;
    diag.wall_time_secs = start.elapsed().as_secs_f64();
    Ok((z, diag))
}

/// Solve along a decreasing viscosity schedule, warm-starting each stage.
///
/// `make(nu)` builds the system at viscosity `nu`. The returned diagnostics
/// carry the final stage's history plus one summary per stage.
pub fn viscosity_continuation<S, F>(
    mut make: F,
    z0: &[f64],
    schedule: &[f64],
    config: &SolverConfig,
) -> std::result::Result<(Vec<f64>, SolveDiagnostics), SolveError>
where
    S: NonlinearSystem,
    F: FnMut(f64) -> Result<S>,
{
    if schedule.is_empty() {
        return Err(Error::config("solver.nu_schedule", "empty viscosity schedule").into());
    }
    let start = Instant::now();
    let mut z = z0.to_vec();
    let mut stages = Vec::new();
    let mut last_good: Option<(f64, Vec<f64>)> = None;
    let mut evaluations = 0;
    let mut out = SolveDiagnostics::default();
    for &nu in schedule {
        let system = make(nu)?;
        match newton_solve(&system, &z, config) {
            Ok((sol, diag)) => {
                evaluations += diag.residual_evaluations;
                stages.push(StageSummary {
                    nu,
                    newton_iterations: diag.newton_iterations(),
                    krylov_iterations: diag.krylov_iterations.iter().sum(),
                    final_residual: diag.final_residual(),
                    converged: true,
                });
                z = sol;
                last_good = Some((nu, z.clone()));
                out = diag;
            }
            Err(e) => {
                let mut failed = match &e {
                    SolveError::NotConverged { diagnostics, .. } => (**diagnostics).clone(),
                    _ => SolveDiagnostics::default(),
                };
                stages.push(StageSummary {
                    nu,
                    newton_iterations: failed.newton_iterations(),
                    krylov_iterations: failed.krylov_iterations.iter().sum(),
                    final_residual: failed.final_residual(),
                    converged: false,
                });
                failed.stages = stages;
                failed.residual_evaluations += evaluations;
                failed.wall_time_secs = start.elapsed().as_secs_f64();
                return Err(SolveError::Stage {
                    nu,
                    last_good,
                    diagnostics: Box::new(failed),
                    source: Box::new(e),
                });
            }
        }
    }
    out.stages = stages;
    out.residual_evaluations = evaluations;
    out.wall_time_secs = start.elapsed().as_secs_f64();
    Ok((z, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn linear(a: Vec<Vec<f64>>, b: Vec<f64>) -> FnSystem<impl Fn(&[f64], &mut [f64]) -> Result<()>> {
        let n = b.len();
        FnSystem::new(n, move |z: &[f64], out: &mut [f64]| {
            for i in 0..n {
                out[i] = a[i].iter().zip(z).map(|(x, y)| x * y).sum::<f64>() - b[i];
            }
            Ok(())
        })
    }

    #[test]
    fn jvp_of_componentwise_square() {
        let sys = FnSystem::new(2, |z: &[f64], out: &mut [f64]| {
            out[0] = z[0] * z[0];
            out[1] = z[1] * z[1];
            Ok(())
        });
        let jv = jacobian_vector_product(&sys, &[1.0, 2.0], &[1.0, 1.0], 1e-7).unwrap();
        assert!((jv[0] - 2.0).abs() < 1e-8);
        assert!((jv[1] - 4.0).abs() < 1e-8);
    }

    #[test]
    fn jvp_of_linear_map_is_exact() {
        let sys = linear(vec![vec![2.0, -1.0], vec![0.5, 3.0]], vec![0.0, 0.0]);
        for step in [1e-3, 1e-7] {
            let jv = jacobian_vector_product(&sys, &[4.0, -2.0], &[0.3, 1.1], step).unwrap();
            assert!((jv[0] - (0.6 - 1.1)).abs() < 1e-8);
            assert!((jv[1] - (0.15 + 3.3)).abs() < 1e-8);
        }
    }

    #[test]
    fn jvp_reports_non_finite_index() {
        let sys = FnSystem::new(3, |z: &[f64], out: &mut [f64]| {
            out.copy_from_slice(z);
            out[2] = z[2].ln();
            Ok(())
        });
        let err = jacobian_vector_product(&sys, &[1.0, 1.0, 0.0], &[0.0, 0.0, 1.0], 1e-7).unwrap_err();
        assert!(matches!(err, Error::NonFinite { index: 2, .. }));
    }

    #[test]
    fn gmres_identity_takes_one_iteration() {
        let rhs = vec![1.0, -2.0, 3.5];
        let mut apply = |v: &[f64], out: &mut [f64]| {
            out.copy_from_slice(v);
            Ok(())
        };
        let o = krylov_solve(&mut apply, &rhs, &SolverConfig::default(), None).unwrap();
        assert_eq!(o.iterations, 1);
        for i in 0..3 {
            assert!((o.solution[i] - rhs[i]).abs() < 1e-14);
        }
    }

    #[test]
    fn gmres_nonsymmetric_two_by_two() {
        let mut apply = |v: &[f64], out: &mut [f64]| {
            out[0] = 2.0 * v[0] + v[1];
            out[1] = 3.0 * v[1];
            Ok(())
        };
        let cfg = SolverConfig {
            krylov_tol: 1e-12,
            ..Default::default()
        };
        let o = krylov_solve(&mut apply, &[3.0, 3.0], &cfg, None).unwrap();
        assert!((o.solution[0] - 1.0).abs() < 1e-10);
        assert!((o.solution[1] - 1.0).abs() < 1e-10);
    }

    #[test]
    fn gmres_restarts_and_reports_failure_with_best_iterate() {
        // Cyclic shift: GMRES makes no progress until the full Krylov space is built.
        let n = 8;
        let mut apply = |v: &[f64], out: &mut [f64]| {
            for i in 0..n {
                out[i] = v[(i + 1) % n];
            }
            Ok(())
        };
        let mut rhs = vec![0.0; n];
        rhs[0] = 1.0;
        let cfg = SolverConfig {
            krylov_restart: 3,
            krylov_max_iters: 12,
            ..Default::default()
        };
        match krylov_solve(&mut apply, &rhs, &cfg, None) {
            Err(SolveError::Linear {
                iterations, best, ..
            }) => {
                assert!(iterations <= 12);
                assert_eq!(best.len(), n);
            }
            other => panic!("expected a linear-solve failure, got {other:?}"),
        }
    }

    #[test]
    fn scalar_newton_finds_square_root() {
        let sys = FnSystem::new(1, |z: &[f64], out: &mut [f64]| {
            out[0] = z[0] * z[0] - 4.0;
            Ok(())
        });
        let cfg = SolverConfig {
            newton_tol: 1e-12,
            ..Default::default()
        };
        let (z, d) = newton_solve(&sys, &[3.0], &cfg).unwrap();
        assert!((z[0] - 2.0).abs() < 1e-10);
        assert!(d.newton_iterations() <= 6);
        assert!(d.converged);
    }

    #[test]
    fn linear_system_converges_in_one_step() {
        let sys = linear(
            vec![vec![4.0, 1.0, 0.0], vec![1.0, 3.0, -1.0], vec![0.0, 2.0, 5.0]],
            vec![1.0, 2.0, 3.0],
        );
        let cfg = SolverConfig {
            krylov_tol: 1e-13,
            newton_tol: 1e-9,
            jvp_step: 1e-2,
            ..Default::default()
        };
        let (_, d) = newton_solve(&sys, &[0.0; 3], &cfg).unwrap();
        assert_eq!(d.newton_iterations(), 1);
    }

    #[test]
    fn failure_carries_best_iterate() {
        // No real root: z² + 1.
        let sys = FnSystem::new(1, |z: &[f64], out: &mut [f64]| {
            out[0] = z[0] * z[0] + 1.0;
            Ok(())
        });
        let cfg = SolverConfig {
            max_newton_iters: 5,
            ..Default::default()
        };
        match newton_solve(&sys, &[1.5], &cfg) {
            Err(SolveError::NotConverged {
                best, diagnostics, ..
            }) => {
                assert_eq!(best.len(), 1);
                let h = &diagnostics.residual_history;
                assert!(h.windows(2).all(|w| w[1] <= w[0]));
            }
            other => panic!("expected non-convergence, got {other:?}"),
        }
    }

    #[test]
    fn single_stage_continuation_matches_newton() {
        let build = |nu: f64| {
            Ok(FnSystem::new(2, move |z: &[f64], out: &mut [f64]| {
                out[0] = z[0] * z[0] * z[0] + nu * z[0] - 1.0;
                out[1] = z[1] - z[0] * z[0];
                Ok(())
            }))
        };
        let cfg = SolverConfig::default();
        let (a, _) = newton_solve(&build(0.3).unwrap(), &[1.0, 1.0], &cfg).unwrap();
        let (b, d) = viscosity_continuation(build, &[1.0, 1.0], &[0.3], &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(d.stages.len(), 1);
    }

    #[test]
    fn schedule_must_decrease_and_end_at_target() {
        let mut cfg = SolverConfig {
            nu_schedule: vec![0.4, 0.2, 0.2],
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        cfg.nu_schedule = vec![0.4, 0.1];
        assert!(cfg.schedule_for(0.05).is_err());
        assert_eq!(cfg.schedule_for(0.1).unwrap(), vec![0.4, 0.1]);
        cfg.nu_schedule.clear();
        assert_eq!(cfg.schedule_for(0.05).unwrap(), vec![0.05]);
    }

    proptest! {
        #[test]
        fn gmres_is_homogeneous_in_rhs(
            b in proptest::collection::vec(-5.0f64..5.0, 4),
            c in 0.01f64..100.0,
        ) {
            prop_assume!(norm2(&b) > 1e-3);
            let a = [[3.0, 1.0, 0.0, 0.5], [0.0, 2.0, -1.0, 0.0], [1.0, 0.0, 4.0, 1.0], [0.0, 0.3, 0.0, 1.5]];
            let mut apply = |v: &[f64], out: &mut [f64]| {
                for i in 0..4 {
                    out[i] = (0..4).map(|j| a[i][j] * v[j]).sum();
                }
                Ok(())
            };
            let cfg = SolverConfig::default();
            let y1 = krylov_solve(&mut apply, &b, &cfg, None).unwrap().solution;
            let cb: Vec<f64> = b.iter().map(|x| c * x).collect();
            let y2 = krylov_solve(&mut apply, &cb, &cfg, None).unwrap().solution;
            let scale = norm2(&y1).max(1e-12);
            for i in 0..4 {
                prop_assert!((y2[i] - c * y1[i]).abs() / (c * scale) < 1e-4);
            }
        }

        #[test]
        fn damped_newton_never_increases_residual(z0 in -3.0f64..3.0, w0 in -3.0f64..3.0) {
            let sys = FnSystem::new(2, |z: &[f64], out: &mut [f64]| {
                out[0] = z[0].atan() + 0.1 * z[1];
                out[1] = z[1] * z[1] * z[1] + z[1] - 0.5 * z[0];
                Ok(())
            });
            let cfg = SolverConfig { max_newton_iters: 30, ..Default::default() };
            let h = match newton_solve(&sys, &[z0, w0], &cfg) {
                Ok((_, d)) => d.residual_history,
                Err(SolveError::NotConverged { diagnostics, .. }) => diagnostics.residual_history,
                Err(e) => panic!("{e}"),
            };
            prop_assert!(h.windows(2).all(|w| w[1] <= w[0]));
        }
    }
}
