//! Gaussian factor simulation and pathwise state integration.
//!
//! The common factor x⁰ and each agent's idiosyncratic factor xⁱ are
//! Ornstein–Uhlenbeck processes discretized by Euler–Maruyama on a shared
//! uniform mesh. Euler (rather than the exact OU transition) is deliberate:
//! the BSDE residual check needs the *same* Brownian increments to drive both
//! the factor paths and the stochastic integrals, and mesh refinement
//! controls the discretization bias.
//!
//! This module also evaluates quadratic liabilities, the deterministic
//! conditional mean μ¹, and the pathwise habit / consumption / wealth
//! recursions.

use std::io::Write as IoWrite;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{EqgError, Result};
use crate::mesh::Mesh;
use crate::model::ModelParams;
use crate::riccati::{fmt_f64, FactorParams, LiabilityCoeffs};
use crate::rng::{
    stream, PURPOSE_AGENT_ENDOWMENT, PURPOSE_AGENT_FACTOR_INIT, PURPOSE_AGENT_NOISE,
    PURPOSE_COMMON_NOISE,
};

/// One agent's factor path and driving noise.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentPath {
    /// Factor values at every mesh node (len = nodes, each d).
    pub xi: Vec<DVector<f64>>,
    /// Brownian increments per step (len = steps, each d).
    pub dwi: Vec<DVector<f64>>,
}

/// Common and idiosyncratic factor paths on a shared mesh, with the
/// Brownian increments that generated them.
#[derive(Debug, Clone, PartialEq)]
pub struct PathBundle {
    pub grid: Mesh,
    pub seed: u64,
    pub n_agents: usize,
    /// Common factor at every mesh node (len = nodes, each d0).
    pub x0: Vec<DVector<f64>>,
    /// Common Brownian increments per step (len = steps, each d0).
    pub dw0: Vec<DVector<f64>>,
    /// Per-agent paths, index = agent id.
    pub agents: Vec<AgentPath>,
}

/// Per-agent simulated equilibrium state emitted by the simulation pipeline.
#[derive(Debug, Clone)]
pub struct AgentState {
    /// Initial wealth ξⁱ.
    pub xi0: f64,
    /// Initial habit X₀ⁱ.
    pub x0_habit: f64,
    /// Habit path at every node.
    pub habit: Vec<f64>,
    /// Optimal consumption at every node.
    pub consumption: Vec<f64>,
    /// Wealth path at every node.
    pub wealth: Vec<f64>,
    /// Optimal exposure p* at every node (d0, zeros beyond coordinate n).
    pub p_star: Vec<DVector<f64>>,
    /// Optimal stock position π* at every node (n).
    pub pi_star: Vec<DVector<f64>>,
}

/// Symmetric PSD square root via eigendecomposition, with tiny negative
/// eigenvalues (roundoff) clipped to zero. Degenerate (zero) covariance is
/// fine — the result is the zero matrix.
pub fn psd_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if m.nrows() != m.ncols() {
        return Err(EqgError::dim(
            "psd_sqrt",
            "square matrix",
            format!("{}x{}", m.nrows(), m.ncols()),
        ));
    }
    let eig = nalgebra::SymmetricEigen::new(m.clone());
    let scale = eig.eigenvalues.amax().max(1.0);
    let mut roots = eig.eigenvalues.clone();
    for v in roots.iter_mut() {
        if *v < -1e-10 * scale {
            return Err(EqgError::Numerical(format!(
                "psd_sqrt: eigenvalue {v} is negative beyond roundoff"
            )));
        }
        *v = v.max(0.0).sqrt();
    }
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose())
}

fn standard_normal_vector<R: Rng>(rng: &mut R, len: usize) -> DVector<f64> {
    DVector::from_fn(len, |_, _| rng.sample::<f64, _>(StandardNormal))
}

/// Euler–Maruyama recursion shared by the common and idiosyncratic factors:
/// x_{k+1} = x_k − K(x_k − m)Δ + Σ·dW_k.
///
/// Crate-visible so refinement studies can re-integrate the same recursion
/// on a coarsened mesh from aggregated increments.
pub(crate) fn euler_ou(
    start: DVector<f64>,
    k_speed: f64,
    mean: &DVector<f64>,
    sigma: &DMatrix<f64>,
    increments: &[DVector<f64>],
    dt: f64,
) -> Vec<DVector<f64>> {
    let mut path = Vec::with_capacity(increments.len() + 1);
    path.push(start);
    for dw in increments {
        let x = path.last().unwrap();
        let next = x - (x - mean) * (k_speed * dt) + sigma * dw;
        path.push(next);
    }
    path
}

/// Simulate the common factor and `n_agents` idiosyncratic factors on `grid`.
///
/// Noise layout: the common increments come from the common-noise stream of
/// `seed`; agent i's increments and initial factor draw come from the
/// agent-noise and factor-init streams at index i. Bit-identical output for
/// identical inputs, independent of thread count.
pub fn simulate_factors(
    factors: &FactorParams,
    grid: &Mesh,
    n_agents: usize,
    seed: u64,
) -> Result<PathBundle> {
    if n_agents == 0 {
        return Err(EqgError::param("n_agents", "must be >= 1"));
    }
    let steps = grid.steps();
    let dt = grid.dt();
    let sqrt_dt = dt.sqrt();
    let init_sqrt = psd_sqrt(&factors.var_x0i)?;

    let mut common_rng = stream(seed, PURPOSE_COMMON_NOISE, 0);
    let dw0: Vec<DVector<f64>> = (0..steps)
        .map(|_| standard_normal_vector(&mut common_rng, factors.d0) * sqrt_dt)
        .collect();
    let x0 = euler_ou(
        factors.x0_init.clone(),
        factors.k0,
        &factors.m0,
        &factors.sigma0,
        &dw0,
        dt,
    );

    let agents: Vec<AgentPath> = (0..n_agents)
        .into_par_iter()
        .map(|i| {
            let mut init_rng = stream(seed, PURPOSE_AGENT_FACTOR_INIT, i as u64);
            let z = standard_normal_vector(&mut init_rng, factors.d);
            let xi0 = &factors.mean_x0i + &init_sqrt * z;

            let mut noise_rng = stream(seed, PURPOSE_AGENT_NOISE, i as u64);
            let dwi: Vec<DVector<f64>> = (0..steps)
                .map(|_| standard_normal_vector(&mut noise_rng, factors.d) * sqrt_dt)
                .collect();
            let xi = euler_ou(xi0, factors.k, &factors.m, &factors.sigma, &dwi, dt);
            AgentPath { xi, dwi }
        })
        .collect();

    Ok(PathBundle {
        grid: grid.clone(),
        seed,
        n_agents,
        x0,
        dw0,
        agents,
    })
}

/// Agent-level initial endowment and habit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AgentInitials {
    /// Initial wealth ξⁱ ~ N(mean_xi0, var_xi0).
    pub wealth: f64,
    /// Initial habit X₀ⁱ ~ N(mean_x0_habit, var_x0_habit).
    pub habit: f64,
}

/// Draw (ξⁱ, X₀ⁱ) for one agent from the endowment stream. Independent of
/// the factor noise and across agents by stream separation.
pub fn draw_agent_initials(factors: &FactorParams, seed: u64, agent: u64) -> AgentInitials {
    let mut rng = stream(seed, PURPOSE_AGENT_ENDOWMENT, agent);
    let zw: f64 = rng.sample(StandardNormal);
    let zh: f64 = rng.sample(StandardNormal);
    AgentInitials {
        wealth: factors.mean_xi0 + factors.var_xi0.sqrt() * zw,
        habit: factors.mean_x0_habit + factors.var_x0_habit.sqrt() * zh,
    }
}

/// Deterministic conditional mean μ¹_t = E[x¹₀]e^{−Kt} + m(1 − e^{−Kt}).
pub fn mu1(factors: &FactorParams, t: f64) -> DVector<f64> {
    let decay = (-factors.k * t).exp();
    let complement = -f64::exp_m1(-factors.k * t);
    &factors.mean_x0i * decay + &factors.m * complement
}

/// Quadratic liability F_t(x⁰, xⁱ) evaluated through the shared
/// quadratic-form routine (the same code path used for the value process Y,
/// so the terminal identity Y_T = F_T is exact).
pub fn liability(
    liab: &LiabilityCoeffs,
    t: f64,
    x0: &DVector<f64>,
    xi: &DVector<f64>,
) -> Result<f64> {
    if x0.len() != liab.d0() || xi.len() != liab.d() {
        return Err(EqgError::dim(
            "liability",
            format!("x0 len {}, xi len {}", liab.d0(), liab.d()),
            format!("x0 len {}, xi len {}", x0.len(), xi.len()),
        ));
    }
    Ok(liab.at(t).quadratic_value(x0, xi))
}

/// Optimal consumption as a function of the current habit and value state:
/// c* = X + (1/β)·{log(aβ / (γ(1+bζ))) − γ(Y − F + ζX)}.
pub fn consumption_rule(params: &ModelParams, zeta_t: f64, y: f64, f_val: f64, habit: f64) -> f64 {
    let log_term = (params.a * params.beta / (params.gamma * (1.0 + params.b * zeta_t))).ln();
    habit + (log_term - params.gamma * (y - f_val + zeta_t * habit)) / params.beta
}

/// One Euler step of the habit recursion:
/// X_{k+1} = X_k + {−κ(X_k − ρ_k) + b(c_k − ρ_k)}Δ.
fn habit_step(params: &ModelParams, habit: f64, consumption: f64, rho: f64, dt: f64) -> f64 {
    habit + (-params.kappa * (habit - rho) + params.b * (consumption - rho)) * dt
}

/// Closed-loop integration of habit and optimal consumption along a path:
/// at each node, c* is computed from the current habit by substitution into
/// the consumption rule (not via a hand-derived closed-loop coefficient),
/// then the habit advances one Euler step.
///
/// `zeta`, `y`, `f_liab` are sampled at the mesh nodes. Returns
/// (habit, consumption), both of length nodes.
pub fn integrate_habit_and_consumption(
    params: &ModelParams,
    zeta: &[f64],
    y: &[f64],
    f_liab: &[f64],
    habit0: f64,
    grid: &Mesh,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let nodes = grid.nodes();
    for (name, arr) in [("zeta", zeta), ("y", y), ("f_liab", f_liab)] {
        if arr.len() != nodes {
            return Err(EqgError::dim(name, format!("{nodes}"), format!("{}", arr.len())));
        }
    }
    let dt = grid.dt();
    let mut habit = Vec::with_capacity(nodes);
    let mut consumption = Vec::with_capacity(nodes);
    habit.push(habit0);
    for k in 0..nodes {
        let x = habit[k];
        let c = consumption_rule(params, zeta[k], y[k], f_liab[k], x);
        consumption.push(c);
        if k + 1 < nodes {
            let rho = params.rho.eval(grid.time(k));
            habit.push(habit_step(params, x, c, rho, dt));
        }
    }
    Ok((habit, consumption))
}

/// Open-loop habit integration for a *given* consumption path (same Euler
/// recursion and operation order as the closed-loop integrator, so feeding
/// back its consumption reproduces its habit bitwise).
pub fn integrate_habit_from_consumption(
    params: &ModelParams,
    consumption: &[f64],
    habit0: f64,
    grid: &Mesh,
) -> Result<Vec<f64>> {
    let nodes = grid.nodes();
    if consumption.len() < grid.steps() {
        return Err(EqgError::dim(
            "consumption",
            format!(">= {}", grid.steps()),
            format!("{}", consumption.len()),
        ));
    }
    let dt = grid.dt();
    let mut habit = Vec::with_capacity(nodes);
    habit.push(habit0);
    for k in 0..grid.steps() {
        let rho = params.rho.eval(grid.time(k));
        habit.push(habit_step(params, habit[k], consumption[k], rho, dt));
    }
    Ok(habit)
}

/// Euler integration of self-financing wealth:
/// 𝒲_{k+1} = 𝒲_k + (⟨p_k, θ_k⟩ − c_k)Δ + ⟨p_k, dW⁰_k⟩.
///
/// `p`, `theta`, `c` are used at the left endpoint of each step and may be
/// longer than `steps` (node-sampled inputs are fine).
pub fn integrate_wealth(
    xi0: f64,
    p: &[DVector<f64>],
    theta: &[DVector<f64>],
    c: &[f64],
    dw0: &[DVector<f64>],
    grid: &Mesh,
) -> Result<Vec<f64>> {
    let steps = grid.steps();
    if dw0.len() != steps {
        return Err(EqgError::dim("dw0", format!("{steps}"), format!("{}", dw0.len())));
    }
    for (name, len) in [("p", p.len()), ("theta", theta.len()), ("c", c.len())] {
        if len < steps {
            return Err(EqgError::dim(name, format!(">= {steps}"), format!("{len}")));
        }
    }
    let dt = grid.dt();
    let mut wealth = Vec::with_capacity(steps + 1);
    wealth.push(xi0);
    for k in 0..steps {
        if p[k].len() != dw0[k].len() || theta[k].len() != dw0[k].len() {
            return Err(EqgError::dim(
                "integrate_wealth step vectors",
                format!("{}", dw0[k].len()),
                format!("p {} / theta {}", p[k].len(), theta[k].len()),
            ));
        }
        let next = wealth[k] + (p[k].dot(&theta[k]) - c[k]) * dt + p[k].dot(&dw0[k]);
        wealth.push(next);
    }
    Ok(wealth)
}

impl PathBundle {
    /// Total number of scalar values across all stored arrays.
    pub fn value_count(&self) -> usize {
        let d0 = self.x0.first().map_or(0, |v| v.len());
        let d = self
            .agents
            .first()
            .and_then(|a| a.xi.first())
            .map_or(0, |v| v.len());
        let nodes = self.grid.nodes();
        let steps = self.grid.steps();
        nodes * d0 + steps * d0 + self.n_agents * (nodes * d + steps * d)
    }

    /// Debug dump: writes x0.csv, dw0.csv, xi.csv, dwi.csv into `dir`.
    /// Refuses to write more than `max_values` scalars in total.
    pub fn dump_csv(&self, dir: &Path, max_values: usize) -> Result<()> {
        let total = self.value_count();
        if total > max_values {
            return Err(EqgError::Numerical(format!(
                "path dump of {total} values exceeds the size guard ({max_values}); \
                 raise the guard explicitly to proceed"
            )));
        }
        let write_nodes = |name: &str, rows: &[DVector<f64>], prefix: &str| -> Result<()> {
            let mut out = std::io::BufWriter::new(std::fs::File::create(dir.join(name))?);
            let width = rows.first().map_or(0, |v| v.len());
            let header: Vec<String> = std::iter::once("t".to_string())
                .chain((0..width).map(|j| format!("{prefix}_{j}")))
                .collect();
            writeln!(out, "{}", header.join(","))?;
            for (k, v) in rows.iter().enumerate() {
                let mut row = vec![fmt_f64(self.grid.time(k))];
                row.extend(v.iter().map(|x| fmt_f64(*x)));
                writeln!(out, "{}", row.join(","))?;
            }
            Ok(())
        };
        write_nodes("x0.csv", &self.x0, "x0")?;
        write_nodes("dw0.csv", &self.dw0, "dw0")?;

        let write_agents = |name: &str,
                            select: &dyn Fn(&AgentPath) -> &Vec<DVector<f64>>,
                            prefix: &str|
         -> Result<()> {
            let mut out = std::io::BufWriter::new(std::fs::File::create(dir.join(name))?);
            let width = self
                .agents
                .first()
                .map_or(0, |a| select(a).first().map_or(0, |v| v.len()));
            let header: Vec<String> = ["t".to_string(), "agent".to_string()]
                .into_iter()
                .chain((0..width).map(|j| format!("{prefix}_{j}")))
                .collect();
            writeln!(out, "{}", header.join(","))?;
            for (i, agent) in self.agents.iter().enumerate() {
                for (k, v) in select(agent).iter().enumerate() {
                    let mut row = vec![fmt_f64(self.grid.time(k)), i.to_string()];
                    row.extend(v.iter().map(|x| fmt_f64(*x)));
                    writeln!(out, "{}", row.join(","))?;
                }
            }
            Ok(())
        };
        write_agents("xi.csv", &|a| &a.xi, "xi")?;
        write_agents("dwi.csv", &|a| &a.dwi, "dwi")?;
        Ok(())
    }
}
