//! Scalar preference/habit parameters, the habit Riccati function ζ, the
//! driver offsets g and g̃, and the standalone smallness calculator.

use serde::Serialize;

use crate::curve::Curve;
use crate::error::{EqgError, Result};

/// Preference and habit parameters, common to all agents.
#[derive(Debug, Clone)]
pub struct ModelParams {
    /// Risk aversion on net terminal wealth (γ > 0).
    pub gamma: f64,
    /// Risk aversion on running consumption (β > 0).
    pub beta: f64,
    /// Weight of the running-utility term (a > 0).
    pub a: f64,
    /// Subjective discount rate (δ ≥ 0).
    pub delta: f64,
    /// Habit decay rate (κ > 0).
    pub kappa: f64,
    /// Habit accumulation rate (b > 0).
    pub b: f64,
    /// Horizon T > 0.
    pub horizon: f64,
    /// Habit trend ρ, continuous on [0, T]; piecewise linear between samples.
    pub rho: Curve<f64>,
}

impl ModelParams {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        gamma: f64,
        beta: f64,
        a: f64,
        delta: f64,
        kappa: f64,
        b: f64,
        horizon: f64,
        rho: Curve<f64>,
    ) -> Result<Self> {
        let positive = [
            ("gamma", gamma),
            ("beta", beta),
            ("a", a),
            ("kappa", kappa),
            ("b", b),
            ("horizon", horizon),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(EqgError::param(name, format!("must be finite and > 0, got {v}")));
            }
        }
        if !(delta.is_finite() && delta >= 0.0) {
            return Err(EqgError::param("delta", format!("must be finite and >= 0, got {delta}")));
        }
        if !rho.covers(0.0, horizon) {
            return Err(EqgError::param("rho", "grid must cover [0, horizon]"));
        }
        Ok(ModelParams {
            gamma,
            beta,
            a,
            delta,
            kappa,
            b,
            horizon,
            rho,
        })
    }

    pub fn zeta_constants(&self) -> ZetaConstants {
        ZetaConstants::new(self)
    }

    pub fn check_time(&self, t: f64) -> Result<()> {
        if !t.is_finite() || t < 0.0 || t > self.horizon {
            return Err(EqgError::TimeOutOfRange {
                t,
                horizon: self.horizon,
            });
        }
        Ok(())
    }
}

/// Coefficients of the scalar habit Riccati equation
/// ζ̇ = 2aζ + bζ² − 1 and the roots of its steady-state quadratic.
#[derive(Debug, Clone, Copy)]
pub struct ZetaConstants {
    /// a = (κ − b + γ/β)/2.
    pub a: f64,
    /// b = γb/β (> 0).
    pub b: f64,
    /// δ⁺ = −a + √(a² + b) (> 0).
    pub delta_plus: f64,
    /// δ⁻ = −a − √(a² + b) (< 0).
    pub delta_minus: f64,
}

impl ZetaConstants {
    pub fn new(p: &ModelParams) -> Self {
        let a = 0.5 * (p.kappa - p.b + p.gamma / p.beta);
        let b = p.gamma * p.b / p.beta;
        let root = (a * a + b).sqrt();
        ZetaConstants {
            a,
            b,
            delta_plus: -a + root,
            delta_minus: -a - root,
        }
    }

    /// δ⁺ − δ⁻ = 2√(a² + b) > 0.
    pub fn gap(&self) -> f64 {
        self.delta_plus - self.delta_minus
    }

    /// Upper bound for ζ on [0, T]: min((1/δ⁺)·e^{(δ⁺−δ⁻)T}, 1/|δ⁻|).
    pub fn zeta_upper_bound(&self, horizon: f64) -> f64 {
        let grow = (self.gap() * horizon).exp() / self.delta_plus;
        grow.min(1.0 / self.delta_minus.abs())
    }
}

/// Habit Riccati function ζ_t, in closed form.
///
/// With x = (δ⁺ − δ⁻)(T − t) ≥ 0, the textbook expression
/// (e^x − 1)/(δ⁺ − δ⁻ e^x) is rescaled by e^{−x}:
///
///   ζ_t = −expm1(−x) / (δ⁺ e^{−x} − δ⁻)
///
/// which avoids both the e^x − 1 cancellation near t = T and overflow for
/// large horizons (the denominator stays in [−δ⁻, δ⁺ − δ⁻]).
pub fn zeta(params: &ModelParams, t: f64) -> Result<f64> {
    params.check_time(t)?;
    let zc = params.zeta_constants();
    let x = zc.gap() * (params.horizon - t);
    Ok(-f64::exp_m1(-x) / (zc.delta_plus * (-x).exp() - zc.delta_minus))
}

/// Analytic time derivative of the closed form:
/// ζ̇_t = −(δ⁺ − δ⁻)² e^{−x} / (δ⁺ e^{−x} − δ⁻)², same rescaling as [`zeta`].
fn zeta_time_derivative(params: &ModelParams, t: f64) -> f64 {
    let zc = params.zeta_constants();
    let gap = zc.gap();
    let e = (-(gap * (params.horizon - t))).exp();
    let denom = zc.delta_plus * e - zc.delta_minus;
    -gap * gap * e / (denom * denom)
}

/// Residual of the habit Riccati ODE at `t`:
/// ζ̇_t − [(κ − b + γ/β)ζ_t + (γb/β)ζ_t² − 1], with ζ̇ computed analytically
/// from the closed form. Exactly zero in real arithmetic; used as an oracle.
pub fn zeta_ode_residual(params: &ModelParams, t: f64) -> Result<f64> {
    let z = zeta(params, t)?;
    let zc = params.zeta_constants();
    let rhs = 2.0 * zc.a * z + zc.b * z * z - 1.0;
    Ok(zeta_time_derivative(params, t) - rhs)
}

/// Driver offset g_t given the liability value F_t:
/// g_t = −δ/γ + (κ − b)ζ_t ρ_t + ((1 + bζ_t)/β)(1 + log(aβ/(γ(1 + bζ_t))) + γF_t).
pub fn g_offset(params: &ModelParams, t: f64, liability_value: f64) -> Result<f64> {
    let z = zeta(params, t)?;
    let one_bz = 1.0 + params.b * z;
    Ok(-params.delta / params.gamma
        + (params.kappa - params.b) * z * params.rho.eval(t)
        + one_bz / params.beta
            * (1.0
                + (params.a * params.beta / (params.gamma * one_bz)).ln()
                + params.gamma * liability_value))
}

/// Deterministic part of the driver offset:
/// g̃_t = g_t − γ(1 + bζ_t)/β · F_t, which is F-independent.
pub fn g_tilde(params: &ModelParams, t: f64) -> Result<f64> {
    let z = zeta(params, t)?;
    let one_bz = 1.0 + params.b * z;
    Ok(-params.delta / params.gamma
        + (params.kappa - params.b) * z * params.rho.eval(t)
        + one_bz / params.beta * (1.0 + (params.a * params.beta / (params.gamma * one_bz)).ln()))
}

/// Output of [`smallness_check`]: the data-smallness condition that
/// guarantees a contractive fixed-point map in the general (non-EQG) theory.
#[derive(Debug, Clone, Copy, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct SmallnessReport {
    /// c_γ = max(γ̄/2, γ̂²/γ̲).
    pub c_gamma: f64,
    /// C_γ = γ̂ + max(γ̂²/(2γ̲), γ̄/2).
    pub big_c_gamma: f64,
    /// √(‖F_T‖²∞ + 4‖∫₀ᵀ|g_s|ds‖²∞).
    pub lhs: f64,
    /// min(1/(16 c_γ), 1/(32 C_γ)).
    pub bound: f64,
    /// Ball radius R = 2·lhs.
    pub r: f64,
    /// 256·C_γ²·R²; < 1 whenever `holds`.
    pub contraction_factor: f64,
    /// lhs < bound.
    pub holds: bool,
}

/// Evaluate the data-smallness condition from user-supplied bounds.
///
/// γ̂ is passed as its defining quantity, the mean of 1/γ over agents; the
/// caller owns any sampling-based estimation. The bounds ‖F_T‖∞ and
/// ‖∫|g|ds‖∞ are caller-supplied as well: for quadratic-Gaussian liabilities
/// they do not exist (F is unbounded), so this check is a standalone
/// calculator, not something derived from EQG inputs.
pub fn smallness_check(
    gamma_bounds: (f64, f64),
    gamma_hat_inv_mean: f64,
    ft_bound: f64,
    g_integral_bound: f64,
) -> Result<SmallnessReport> {
    let (gamma_low, gamma_high) = gamma_bounds;
    if !(gamma_low.is_finite() && gamma_low > 0.0) {
        return Err(EqgError::param("gamma_low", "must be finite and > 0"));
    }
    if !(gamma_high.is_finite() && gamma_high >= gamma_low) {
        return Err(EqgError::param("gamma_high", "must be finite and >= gamma_low"));
    }
    if !(gamma_hat_inv_mean.is_finite() && gamma_hat_inv_mean > 0.0) {
        return Err(EqgError::param("gamma_hat_inv_mean", "must be finite and > 0"));
    }
    for (name, v) in [("ft_bound", ft_bound), ("g_integral_bound", g_integral_bound)] {
        if !(v.is_finite() && v >= 0.0) {
            return Err(EqgError::param(name, "must be finite and >= 0"));
        }
    }
    let gamma_hat = 1.0 / gamma_hat_inv_mean;
    // Jensen puts E[1/γ]⁻¹ inside [γ̲, γ̄]; allow formatting round-off.
    let slack = 1e-12 * gamma_high;
    if gamma_hat < gamma_low - slack || gamma_hat > gamma_high + slack {
        return Err(EqgError::param(
            "gamma_hat_inv_mean",
            format!("implies gamma_hat = {gamma_hat} outside [{gamma_low}, {gamma_high}]"),
        ));
    }

    let c_gamma = (gamma_high / 2.0).max(gamma_hat * gamma_hat / gamma_low);
    let big_c_gamma = gamma_hat + (gamma_hat * gamma_hat / (2.0 * gamma_low)).max(gamma_high / 2.0);
    let lhs = (ft_bound * ft_bound + 4.0 * g_integral_bound * g_integral_bound).sqrt();
    let bound = (1.0 / (16.0 * c_gamma)).min(1.0 / (32.0 * big_c_gamma));
    let r = 2.0 * lhs;
    let contraction_factor = 256.0 * big_c_gamma * big_c_gamma * r * r;
    Ok(SmallnessReport {
        c_gamma,
        big_c_gamma,
        lhs,
        bound,
        r,
        contraction_factor,
        holds: lhs < bound,
    })
}
