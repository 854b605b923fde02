//! Quadratic congestion Hamiltonian, its Godunov discretization and the
//! optimal feedback velocity.
//!
//! With running cost `f(m, α) = c_move (1+m)^β |α|² + c_time` and drift
//! `b = α`, maximizing `−f − α·p` gives
//!
//! ```text
//! H(m, p) = a(m) |p|² − c_time,   a(m) = 1 / (4 c_move (1+m)^β),
//! α*     = −H_p = −2 a(m) p.
//! ```
//!
//! For mean field control the HJB carries the extra term `m ∂H/∂m`, which for
//! this local cost folds into the coefficient `â(m) = a(m) + m a'(m)`. The
//! transport in the FPK equation and the feedback velocity keep using `a(m)`
//! in both modes: they are the agents' own `H_p`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Parameters of the congestion running cost.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CongestionCost {
    /// Control-cost weight. `f64::INFINITY` switches the Hamiltonian off.
    pub c_move: f64,
    /// Congestion exponent; `0` means no congestion.
    pub beta: f64,
    /// Time penalty per minute spent in the domain.
    pub c_time: f64,
}

impl Default for CongestionCost {
    fn default() -> Self {
        CongestionCost::evacuation()
    }
}

impl CongestionCost {
    /// `|α|²/32 (1+m)^{3/4} + 1/3200`.
    pub const fn evacuation() -> Self {
        CongestionCost {
            c_move: 1.0 / 32.0,
            beta: 0.75,
            c_time: 1.0 / 3200.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.c_move > 0.0) {
            return Err(Error::config("cost.c_move", "must be positive"));
        }
        if !(self.beta >= 0.0 && self.beta < 2.0) {
            return Err(Error::config("cost.beta", "must lie in [0, 2)"));
        }
        if !(self.c_time >= 0.0 && self.c_time.is_finite()) {
            return Err(Error::config("cost.c_time", "must be nonnegative"));
        }
        Ok(())
    }

    /// `a(m)`; no domain check.
    #[inline]
    pub fn coefficient(&self, m: f64) -> f64 {
        let congestion = if self.beta == 0.0 {
            1.0
        } else {
            (1.0 + m).powf(self.beta)
        };
        1.0 / (4.0 * self.c_move * congestion)
    }

    /// `â(m) = a(m) (1 + (1−β) m) / (1 + m)`; no domain check.
    #[inline]
    pub fn control_coefficient(&self, m: f64) -> f64 {
        self.coefficient(m) * (1.0 + (1.0 - self.beta) * m) / (1.0 + m)
    }

    /// Coefficient multiplying the squared gradient in the HJB equation.
    #[inline]
    pub fn hjb_coefficient(&self, m: f64, mode: HamiltonianMode) -> f64 {
        match mode {
            HamiltonianMode::Mfg => self.coefficient(m),
            HamiltonianMode::Mfc => self.control_coefficient(m),
        }
    }

    /// Running cost `f(m, α)`.
    pub fn running_cost(&self, m: f64, alpha: [f64; 2]) -> f64 {
        let speed_sq = alpha[0] * alpha[0] + alpha[1] * alpha[1];
        let kinetic = if speed_sq == 0.0 {
            0.0
        } else {
            self.c_move * (1.0 + m).powf(self.beta) * speed_sq
        };
        kinetic + self.c_time
    }
}

/// Non-cooperative equilibrium or social optimum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HamiltonianMode {
    #[default]
    Mfg,
    Mfc,
}

impl HamiltonianMode {
    pub fn as_str(self) -> &'static str {
        match self {
            HamiltonianMode::Mfg => "mfg",
            HamiltonianMode::Mfc => "mfc",
        }
    }
}

impl std::str::FromStr for HamiltonianMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mfg" => Ok(HamiltonianMode::Mfg),
            "mfc" => Ok(HamiltonianMode::Mfc),
            other => Err(Error::Input(format!("unknown mode `{other}`"))),
        }
    }
}

impl std::fmt::Display for HamiltonianMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

fn check_density(m: f64) -> Result<()> {
    if m >= 0.0 && m.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!("density must be nonnegative, got {m}")))
    }
}

#[inline]
pub(crate) fn neg(x: f64) -> f64 {
    (-x).max(0.0)
}

#[inline]
pub(crate) fn pos(x: f64) -> f64 {
    x.max(0.0)
}

/// `Σ` of the squared upwind parts `(q1⁻)² + (q2⁺)² + (q3⁻)² + (q4⁺)²`.
#[inline]
pub(crate) fn upwind_square(q: &[f64; 4]) -> f64 {
    let (a, b, c, d) = (neg(q[0]), pos(q[1]), neg(q[2]), pos(q[3]));
    a * a + b * b + c * c + d * d
}

/// Partials of `coeff · upwind_square(q)` with respect to each difference.
#[inline]
pub(crate) fn upwind_partials(coeff: f64, q: &[f64; 4]) -> [f64; 4] {
    let two_c = 2.0 * coeff;
    [
        -two_c * neg(q[0]),
        two_c * pos(q[1]),
        -two_c * neg(q[2]),
        two_c * pos(q[3]),
    ]
}

/// `H(m, p) = a(m)|p|² − c_time`.
pub fn continuous_hamiltonian(m: f64, p: [f64; 2], cost: &CongestionCost) -> Result<f64> {
    check_density(m)?;
    Ok(cost.coefficient(m) * (p[0] * p[0] + p[1] * p[1]) - cost.c_time)
}

/// Godunov numerical Hamiltonian of the one-sided differences
/// `q = (right-x, left-x, right-y, left-y)`.
pub fn godunov_hamiltonian(
    m: f64,
    q: [f64; 4],
    cost: &CongestionCost,
    mode: HamiltonianMode,
) -> Result<f64> {
    let coeff = mode_coefficient(m, cost, mode)?;
    Ok(coeff * upwind_square(&q) - cost.c_time)
}

/// Partial derivatives of [`godunov_hamiltonian`] with respect to `q`.
///
/// At a kink (`q_i = 0`) the derivative from the flat side, zero, is used.
pub fn godunov_dp(
    m: f64,
    q: [f64; 4],
    cost: &CongestionCost,
    mode: HamiltonianMode,
) -> Result<[f64; 4]> {
    let coeff = mode_coefficient(m, cost, mode)?;
    Ok(upwind_partials(coeff, &q))
}

fn mode_coefficient(m: f64, cost: &CongestionCost, mode: HamiltonianMode) -> Result<f64> {
    match mode {
        HamiltonianMode::Mfg => {
            check_density(m)?;
            Ok(cost.coefficient(m))
        }
        HamiltonianMode::Mfc => mfc_coefficient(m, cost),
    }
}

/// `â(m)`, the HJB coefficient for mean field control. With the evacuation
/// constants this is `(8 + 2m)/(1+m)^{7/4}`.
pub fn mfc_coefficient(m: f64, cost: &CongestionCost) -> Result<f64> {
    check_density(m)?;
    let c = cost.control_coefficient(m);
    if c > 0.0 || cost.c_move.is_infinite() {
        Ok(c)
    } else {
        Err(Error::Domain(format!(
            "control coefficient is not positive at m = {m} (beta = {})",
            cost.beta
        )))
    }
}

/// Feedback velocity `−H_p(m, ∇u) = −2 a(m) ∇u`.
pub fn optimal_velocity(m: f64, grad_u: [f64; 2], cost: &CongestionCost) -> Result<[f64; 2]> {
    check_density(m)?;
    let s = -2.0 * cost.coefficient(m);
    Ok([s * grad_u[0], s * grad_u[1]])
}
