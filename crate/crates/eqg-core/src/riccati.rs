//! Backward coefficient system for the quadratic value process.
//!
//! The certainty-equivalent value Y is a quadratic form of the common factor
//! x⁰ and the idiosyncratic factor xⁱ. Matching quadratic, linear, and
//! constant terms of the driver yields six coupled ODEs — three of Riccati
//! type (A₀₀, A₁₁, A₁₀), two linear vector equations (B₀, B₁), and one scalar
//! (C) — integrated backward from their terminal liability values at T.
//!
//! The integrator is fixed-step classical RK4 with symmetrization of the
//! symmetric blocks after every stage and threshold-based blow-up detection;
//! the solution is stored at every mesh node and interpolated linearly in
//! between (downstream Monte Carlo shares the mesh, so interpolation is
//! rarely exercised).

use std::io::{BufRead, Write};

use nalgebra::{DMatrix, DVector};

use crate::curve::Curve;
use crate::error::{EqgError, Result};
use crate::factors;
use crate::mesh::Mesh;
use crate::model::{self, ModelParams};

/// Magnitude above which the backward integration is declared blown up.
/// Far above any economically sensible coefficient scale, far below overflow.
pub const DEFAULT_BLOWUP_THRESHOLD: f64 = 1e8;

// ---------------------------------------------------------------------------
// Liability coefficients
// ---------------------------------------------------------------------------

/// Time-dependent coefficients of the quadratic liability
/// F_t = ½⟨AF₀₀x⁰,x⁰⟩ + ½⟨AF₁₁xⁱ,xⁱ⟩ + ⟨AF₁₀x⁰,xⁱ⟩ + ⟨BF₀,x⁰⟩ + ⟨BF₁,xⁱ⟩ + CF.
///
/// Each coefficient is a constant or a piecewise-linear grid covering [0, T].
/// The symmetric blocks are checked for symmetry at every sample on load.
#[derive(Debug, Clone)]
pub struct LiabilityCoeffs {
    af00: Curve<DMatrix<f64>>,
    af11: Curve<DMatrix<f64>>,
    af10: Curve<DMatrix<f64>>,
    bf0: Curve<DVector<f64>>,
    bf1: Curve<DVector<f64>>,
    cf: Curve<f64>,
    d0: usize,
    d: usize,
}

const SYMMETRY_LOAD_TOL: f64 = 1e-12;

fn check_curve_dims<F>(
    name: &str,
    curve: &Curve<DMatrix<f64>>,
    rows: usize,
    cols: usize,
    horizon: f64,
    mut extra: F,
) -> Result<()>
where
    F: FnMut(usize, &DMatrix<f64>) -> Result<()>,
{
    if !curve.covers(0.0, horizon) {
        return Err(EqgError::param(name, "grid must cover [0, horizon]"));
    }
    let mut bad: Option<EqgError> = None;
    curve.for_each_sample(|i, m| {
        if bad.is_some() {
            return;
        }
        if m.nrows() != rows || m.ncols() != cols {
            bad = Some(EqgError::dim(
                format!("{name} sample {i}"),
                format!("{rows}x{cols}"),
                format!("{}x{}", m.nrows(), m.ncols()),
            ));
            return;
        }
        if m.iter().any(|x| !x.is_finite()) {
            bad = Some(EqgError::param(name, format!("non-finite entry in sample {i}")));
            return;
        }
        if let Err(e) = extra(i, m) {
            bad = Some(e);
        }
    });
    match bad {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

fn max_asymmetry(m: &DMatrix<f64>) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

impl LiabilityCoeffs {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        af00: Curve<DMatrix<f64>>,
        af11: Curve<DMatrix<f64>>,
        af10: Curve<DMatrix<f64>>,
        bf0: Curve<DVector<f64>>,
        bf1: Curve<DVector<f64>>,
        cf: Curve<f64>,
        d0: usize,
        d: usize,
        horizon: f64,
    ) -> Result<Self> {
        if d0 == 0 || d == 0 {
            return Err(EqgError::param("liability dims", "d0 and d must be >= 1"));
        }
        check_curve_dims("af00", &af00, d0, d0, horizon, |i, m| {
            let asym = max_asymmetry(m);
            if asym > SYMMETRY_LOAD_TOL {
                return Err(EqgError::param(
                    "af00",
                    format!("sample {i} asymmetric by {asym:.3e} (tolerance {SYMMETRY_LOAD_TOL:.0e})"),
                ));
            }
            Ok(())
        })?;
        check_curve_dims("af11", &af11, d, d, horizon, |i, m| {
            let asym = max_asymmetry(m);
            if asym > SYMMETRY_LOAD_TOL {
                return Err(EqgError::param(
                    "af11",
                    format!("sample {i} asymmetric by {asym:.3e} (tolerance {SYMMETRY_LOAD_TOL:.0e})"),
                ));
            }
            Ok(())
        })?;
        check_curve_dims("af10", &af10, d, d0, horizon, |_, _| Ok(()))?;

        for (name, curve, len) in [("bf0", &bf0, d0), ("bf1", &bf1, d)] {
            if !curve.covers(0.0, horizon) {
                return Err(EqgError::param(name, "grid must cover [0, horizon]"));
            }
            let mut bad: Option<EqgError> = None;
            curve.for_each_sample(|i, v| {
                if bad.is_none() && (v.len() != len || v.iter().any(|x| !x.is_finite())) {
                    bad = Some(EqgError::dim(
                        format!("{name} sample {i}"),
                        format!("{len}"),
                        format!("{}", v.len()),
                    ));
                }
            });
            if let Some(e) = bad {
                return Err(e);
            }
        }
        if !cf.covers(0.0, horizon) {
            return Err(EqgError::param("cf", "grid must cover [0, horizon]"));
        }

        Ok(LiabilityCoeffs {
            af00,
            af11,
            af10,
            bf0,
            bf1,
            cf,
            d0,
            d,
        })
    }

    /// All-zero liability of the given dimensions.
    pub fn zero(d0: usize, d: usize) -> Self {
        LiabilityCoeffs {
            af00: Curve::constant(DMatrix::zeros(d0, d0)),
            af11: Curve::constant(DMatrix::zeros(d, d)),
            af10: Curve::constant(DMatrix::zeros(d, d0)),
            bf0: Curve::constant(DVector::zeros(d0)),
            bf1: Curve::constant(DVector::zeros(d)),
            cf: Curve::constant(0.0),
            d0,
            d,
        }
    }

    pub fn d0(&self) -> usize {
        self.d0
    }

    pub fn d(&self) -> usize {
        self.d
    }

    /// Coefficient slice at time `t`, as one state value.
    pub fn at(&self, t: f64) -> RiccatiState {
        RiccatiState {
            a00: self.af00.eval(t),
            a11: self.af11.eval(t),
            a10: self.af10.eval(t),
            b0: self.bf0.eval(t),
            b1: self.bf1.eval(t),
            c: self.cf.eval(t),
        }
    }
}

// ---------------------------------------------------------------------------
// Factor parameters
// ---------------------------------------------------------------------------

/// Static description of the Gaussian factor processes and initial laws.
///
/// The common factor follows dx⁰ = −K₀(x⁰ − m₀)dt + Σ₀dW⁰ from the
/// deterministic x⁰₀; each idiosyncratic factor follows
/// dxⁱ = −K(xⁱ − m)dt + ΣdWⁱ from xⁱ₀ ~ N(meanx0i, varx0i). Initial wealth
/// ξⁱ and habit X₀ⁱ are Gaussian and mutually independent of everything else.
#[derive(Debug, Clone)]
pub struct FactorParams {
    /// Number of stocks (coordinates of the tradable subspace), 1 ≤ n ≤ d0.
    pub n: usize,
    /// Common-noise dimension.
    pub d0: usize,
    /// Idiosyncratic-noise dimension.
    pub d: usize,
    /// Mean-reversion speed of x⁰ (> 0).
    pub k0: f64,
    /// Mean-reversion speed of xⁱ (> 0).
    pub k: f64,
    /// Long-run mean of x⁰ (d0).
    pub m0: DVector<f64>,
    /// Long-run mean of xⁱ (d).
    pub m: DVector<f64>,
    /// Diffusion of x⁰ (d0 × d0).
    pub sigma0: DMatrix<f64>,
    /// Diffusion of xⁱ (d × d).
    pub sigma: DMatrix<f64>,
    /// Deterministic initial common factor (d0).
    pub x0_init: DVector<f64>,
    /// Mean and variance of initial wealth ξⁱ.
    pub mean_xi0: f64,
    pub var_xi0: f64,
    /// Mean and variance of initial habit X₀ⁱ.
    pub mean_x0_habit: f64,
    pub var_x0_habit: f64,
    /// Mean of the initial idiosyncratic factor xⁱ₀ (d).
    pub mean_x0i: DVector<f64>,
    /// Covariance of xⁱ₀ (d × d, symmetric PSD; 0 = point mass allowed).
    pub var_x0i: DMatrix<f64>,
}

impl FactorParams {
    /// Validate all invariants, returning the parameters on success.
    pub fn validated(self) -> Result<Self> {
        if self.n == 0 || self.n > self.d0 {
            return Err(EqgError::param(
                "n",
                format!("need 1 <= n <= d0, got n = {}, d0 = {}", self.n, self.d0),
            ));
        }
        if self.d == 0 {
            return Err(EqgError::param("d", "must be >= 1"));
        }
        for (name, v) in [("k0", self.k0), ("k", self.k)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(EqgError::param(name, format!("must be finite and > 0, got {v}")));
            }
        }
        for (name, v) in [("var_xi0", self.var_xi0), ("var_x0_habit", self.var_x0_habit)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(EqgError::param(name, format!("must be finite and >= 0, got {v}")));
            }
        }
        if !(self.mean_xi0.is_finite() && self.mean_x0_habit.is_finite()) {
            return Err(EqgError::param("initial laws", "means must be finite"));
        }
        let vec_dims = [
            ("m0", &self.m0, self.d0),
            ("m", &self.m, self.d),
            ("x0_init", &self.x0_init, self.d0),
            ("mean_x0i", &self.mean_x0i, self.d),
        ];
        for (name, v, len) in vec_dims {
            if v.len() != len {
                return Err(EqgError::dim(name, format!("{len}"), format!("{}", v.len())));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(EqgError::param(name, "non-finite entry"));
            }
        }
        let mat_dims = [
            ("sigma0", &self.sigma0, self.d0, self.d0),
            ("sigma", &self.sigma, self.d, self.d),
            ("var_x0i", &self.var_x0i, self.d, self.d),
        ];
        for (name, m, r, c) in mat_dims {
            if m.nrows() != r || m.ncols() != c {
                return Err(EqgError::dim(
                    name,
                    format!("{r}x{c}"),
                    format!("{}x{}", m.nrows(), m.ncols()),
                ));
            }
            if m.iter().any(|x| !x.is_finite()) {
                return Err(EqgError::param(name, "non-finite entry"));
            }
        }
        let scale = self.var_x0i.amax().max(1.0);
        if max_asymmetry(&self.var_x0i) > 1e-12 * scale {
            return Err(EqgError::param("var_x0i", "must be symmetric"));
        }
        let sym = nalgebra::SymmetricEigen::new(self.var_x0i.clone());
        if sym.eigenvalues.iter().any(|&e| e < -1e-10 * scale) {
            return Err(EqgError::param("var_x0i", "must be positive semidefinite"));
        }
        Ok(self)
    }
}

// ---------------------------------------------------------------------------
// State and right-hand side
// ---------------------------------------------------------------------------

/// One slice of the coefficient system (or of its time derivative).
#[derive(Debug, Clone, PartialEq)]
pub struct RiccatiState {
    /// Symmetric d0 × d0.
    pub a00: DMatrix<f64>,
    /// Symmetric d × d.
    pub a11: DMatrix<f64>,
    /// d × d0.
    pub a10: DMatrix<f64>,
    /// d0.
    pub b0: DVector<f64>,
    /// d.
    pub b1: DVector<f64>,
    pub c: f64,
}

impl RiccatiState {
    pub fn zeros(d0: usize, d: usize) -> Self {
        RiccatiState {
            a00: DMatrix::zeros(d0, d0),
            a11: DMatrix::zeros(d, d),
            a10: DMatrix::zeros(d, d0),
            b0: DVector::zeros(d0),
            b1: DVector::zeros(d),
            c: 0.0,
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.a00.nrows(), self.a11.nrows())
    }

    /// `self + w * other`, blockwise.
    fn add_scaled(&self, other: &RiccatiState, w: f64) -> RiccatiState {
        RiccatiState {
            a00: &self.a00 + &other.a00 * w,
            a11: &self.a11 + &other.a11 * w,
            a10: &self.a10 + &other.a10 * w,
            b0: &self.b0 + &other.b0 * w,
            b1: &self.b1 + &other.b1 * w,
            c: self.c + other.c * w,
        }
    }

    /// Replace the symmetric blocks by (X + Xᵀ)/2.
    fn symmetrize(&mut self) {
        let sym = |m: &DMatrix<f64>| (m + m.transpose()) * 0.5;
        self.a00 = sym(&self.a00);
        self.a11 = sym(&self.a11);
    }

    /// Largest entry magnitude over all blocks.
    pub fn max_abs(&self) -> f64 {
        let mats = self.a00.iter().chain(self.a11.iter()).chain(self.a10.iter());
        let vecs = self.b0.iter().chain(self.b1.iter());
        mats.chain(vecs)
            .fold(self.c.abs(), |acc, &x| acc.max(x.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.a00.iter().all(|x| x.is_finite())
            && self.a11.iter().all(|x| x.is_finite())
            && self.a10.iter().all(|x| x.is_finite())
            && self.b0.iter().all(|x| x.is_finite())
            && self.b1.iter().all(|x| x.is_finite())
            && self.c.is_finite()
    }

    /// Worst asymmetry over the two symmetric blocks.
    pub fn max_asymmetry(&self) -> f64 {
        max_asymmetry(&self.a00).max(max_asymmetry(&self.a11))
    }

    /// Evaluate the quadratic form these coefficients define:
    /// ½⟨A₀₀x⁰,x⁰⟩ + ½⟨A₁₁xⁱ,xⁱ⟩ + ⟨A₁₀x⁰,xⁱ⟩ + ⟨B₀,x⁰⟩ + ⟨B₁,xⁱ⟩ + C.
    ///
    /// Shared by liability evaluation and the value process Y so that the
    /// terminal identity Y_T = F_T is exact, not merely close.
    pub fn quadratic_value(&self, x0: &DVector<f64>, xi: &DVector<f64>) -> f64 {
        0.5 * x0.dot(&(&self.a00 * x0))
            + 0.5 * xi.dot(&(&self.a11 * xi))
            + (&self.a10 * x0).dot(xi)
            + self.b0.dot(x0)
            + self.b1.dot(xi)
            + self.c
    }
}

/// Split Σ₀ into its tradable and non-tradable column blocks:
/// Σ̂₀ keeps the first `n` columns (rest zeroed), Σ̌₀ is the complement, so
/// Σ̂₀ + Σ̌₀ = Σ₀ and projecting a row uᵀΣ₀ onto the first n coordinates
/// equals uᵀΣ̂₀.
pub fn split_sigma0(sigma0: &DMatrix<f64>, n: usize) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let d0 = sigma0.nrows();
    if sigma0.ncols() != d0 {
        return Err(EqgError::dim(
            "split_sigma0",
            format!("{d0}x{d0}"),
            format!("{}x{}", sigma0.nrows(), sigma0.ncols()),
        ));
    }
    if n == 0 || n > d0 {
        return Err(EqgError::param(
            "n",
            format!("need 1 <= n <= d0 = {d0}, got {n}"),
        ));
    }
    let mut hat = sigma0.clone();
    let mut check = sigma0.clone();
    for j in 0..d0 {
        if j < n {
            check.column_mut(j).fill(0.0);
        } else {
            hat.column_mut(j).fill(0.0);
        }
    }
    Ok((hat, check))
}

/// Precomputed constant products for the right-hand side.
struct DriftContext<'a> {
    params: &'a ModelParams,
    factors: &'a FactorParams,
    liab: &'a LiabilityCoeffs,
    /// Σ₀Σ₀ᵀ.
    sig00: DMatrix<f64>,
    /// ΣΣᵀ.
    sigsig: DMatrix<f64>,
    /// Σ̂₀Σ̂₀ᵀ.
    hat00: DMatrix<f64>,
    /// Σ̌₀Σ̌₀ᵀ.
    chk00: DMatrix<f64>,
}

impl<'a> DriftContext<'a> {
    fn new(
        params: &'a ModelParams,
        factors: &'a FactorParams,
        liab: &'a LiabilityCoeffs,
    ) -> Result<Self> {
        if liab.d0() != factors.d0 || liab.d() != factors.d {
            return Err(EqgError::dim(
                "liability vs factors",
                format!("d0 = {}, d = {}", factors.d0, factors.d),
                format!("d0 = {}, d = {}", liab.d0(), liab.d()),
            ));
        }
        let (hat, chk) = split_sigma0(&factors.sigma0, factors.n)?;
        Ok(DriftContext {
            params,
            factors,
            liab,
            sig00: &factors.sigma0 * factors.sigma0.transpose(),
            sigsig: &factors.sigma * factors.sigma.transpose(),
            hat00: &hat * hat.transpose(),
            chk00: &chk * chk.transpose(),
        })
    }

    /// The six displayed ODE lines, evaluated at (t, state).
    fn eval(&self, t: f64, state: &RiccatiState) -> Result<RiccatiState> {
        let p = self.params;
        let gamma = p.gamma;
        let zeta_t = model::zeta(p, t)?;
        let c1 = gamma * (1.0 + p.b * zeta_t) / p.beta;
        let k0 = self.factors.k0;
        let k = self.factors.k;
        let m0 = &self.factors.m0;
        let m = &self.factors.m;
        let term = self.liab.at(t);
        let mu1 = factors::mu1(self.factors, t);

        let a00 = &state.a00;
        let a11 = &state.a11;
        let a10 = &state.a10;
        let a10_t = a10.transpose();
        let b0 = &state.b0;
        let b1 = &state.b1;

        // Ȧ₀₀ = −γA₀₀Σ₀Σ₀ᵀA₀₀ − γA₁₀ᵀΣΣᵀA₁₀ + (2K₀ + c₁)A₀₀ − c₁AF₀₀
        let mut da00 = -(a00 * &self.sig00 * a00) * gamma - (&a10_t * &self.sigsig * a10) * gamma
            + a00 * (2.0 * k0 + c1)
            - &term.a00 * c1;

        // Ȧ₁₁ = −γA₁₁ΣΣᵀA₁₁ − γA₁₀Σ̌₀Σ̌₀ᵀA₁₀ᵀ + (2K + c₁)A₁₁ − c₁AF₁₁
        let mut da11 = -(a11 * &self.sigsig * a11) * gamma - (a10 * &self.chk00 * &a10_t) * gamma
            + a11 * (2.0 * k + c1)
            - &term.a11 * c1;

        // Ȧ₁₀ = −γA₁₀Σ₀Σ₀ᵀA₀₀ − γA₁₁ΣΣᵀA₁₀ + (K₀ + K + c₁)A₁₀ − c₁AF₁₀
        let da10 = -(a10 * &self.sig00 * a00) * gamma - (a11 * &self.sigsig * a10) * gamma
            + a10 * (k0 + k + c1)
            - &term.a10 * c1;

        // Ḃ₀ = (−γA₀₀Σ₀Σ₀ᵀ + c₁ + K₀)B₀ − γA₁₀ᵀΣΣᵀB₁ − c₁BF₀ − K₀A₀₀m₀ − KA₁₀ᵀm
        let db0 = -(a00 * (&self.sig00 * b0)) * gamma + b0 * (c1 + k0)
            - (&a10_t * (&self.sigsig * b1)) * gamma
            - &term.b0 * c1
            - (a00 * m0) * k0
            - (&a10_t * m) * k;

        // A₁₀Σ̂₀Σ̂₀ᵀA₁₀ᵀμ¹ appears in both Ḃ₁ and Ċ.
        let a10_hat_mu = a10 * (&self.hat00 * (&a10_t * &mu1));

        // Ḃ₁ = (−γA₁₁ΣΣᵀ + c₁ + K)B₁ − γ(A₁₀Σ̂₀Σ̂₀ᵀA₁₀ᵀμ¹ + A₁₀Σ₀Σ₀ᵀB₀)
        //      − c₁BF₁ − KA₁₁m − K₀A₁₀m₀
        let db1 = -(a11 * (&self.sigsig * b1)) * gamma + b1 * (c1 + k)
            - (&a10_hat_mu + a10 * (&self.sig00 * b0)) * gamma
            - &term.b1 * c1
            - (a11 * m) * k
            - (a10 * m0) * k0;

        // Ċ = c₁C − c₁CF − (γ/2)⟨Σ₀ᵀB₀,Σ₀ᵀB₀⟩ − (γ/2)⟨ΣᵀB₁,ΣᵀB₁⟩
        //     − ⟨K₀B₀,m₀⟩ − ⟨KB₁,m⟩ + (γ/2)⟨A₁₀Σ̂₀Σ̂₀ᵀA₁₀ᵀμ¹,μ¹⟩
        //     − ½tr[A₀₀Σ₀Σ₀ᵀ] − ½tr[A₁₁ΣΣᵀ] − g̃
        let dc = c1 * state.c
            - c1 * term.c
            - 0.5 * gamma * b0.dot(&(&self.sig00 * b0))
            - 0.5 * gamma * b1.dot(&(&self.sigsig * b1))
            - k0 * b0.dot(m0)
            - k * b1.dot(m)
            + 0.5 * gamma * a10_hat_mu.dot(&mu1)
            - 0.5 * (a00 * &self.sig00).trace()
            - 0.5 * (a11 * &self.sigsig).trace()
            - model::g_tilde(p, t)?;

        // The analytic right-hand sides of the symmetric blocks are
        // symmetric when the state is; kill floating-point drift.
        da00 = (&da00 + da00.transpose()) * 0.5;
        da11 = (&da11 + da11.transpose()) * 0.5;

        Ok(RiccatiState {
            a00: da00,
            a11: da11,
            a10: da10,
            b0: db0,
            b1: db1,
            c: dc,
        })
    }
}

/// Time derivative of the coefficient system at (t, state).
pub fn rhs(
    t: f64,
    state: &RiccatiState,
    params: &ModelParams,
    factors: &FactorParams,
    liab: &LiabilityCoeffs,
) -> Result<RiccatiState> {
    let (sd0, sd) = state.dims();
    if sd0 != factors.d0 || sd != factors.d {
        return Err(EqgError::dim(
            "rhs state",
            format!("d0 = {}, d = {}", factors.d0, factors.d),
            format!("d0 = {sd0}, d = {sd}"),
        ));
    }
    DriftContext::new(params, factors, liab)?.eval(t, state)
}

// ---------------------------------------------------------------------------
// Backward solve
// ---------------------------------------------------------------------------

/// The coefficient system on a uniform mesh, stored at every node.
#[derive(Debug, Clone)]
pub struct RiccatiSolution {
    mesh: Mesh,
    /// states[k] holds the slice at mesh.time(k); index `steps` is terminal.
    states: Vec<RiccatiState>,
    d0: usize,
    d: usize,
    threshold: f64,
    /// Liability slice at T captured when solving (used by `check_global`).
    terminal_reference: RiccatiState,
}

impl RiccatiSolution {
    pub fn mesh(&self) -> &Mesh {
        &self.mesh
    }

    pub fn d0(&self) -> usize {
        self.d0
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn blowup_threshold(&self) -> f64 {
        self.threshold
    }

    /// Stored slice at mesh node `k`.
    pub fn state_at_node(&self, k: usize) -> &RiccatiState {
        &self.states[k]
    }

    pub fn terminal(&self) -> &RiccatiState {
        self.states.last().unwrap()
    }

    /// Coefficients at time `t`: the stored value exactly at mesh nodes,
    /// linear interpolation in between.
    pub fn value(&self, t: f64) -> Result<RiccatiState> {
        if !t.is_finite() || t < 0.0 || t > self.mesh.horizon() {
            return Err(EqgError::TimeOutOfRange {
                t,
                horizon: self.mesh.horizon(),
            });
        }
        let s = t / self.mesh.dt();
        let nearest = s.round();
        if (s - nearest).abs() < 1e-9 {
            return Ok(self.states[nearest as usize].clone());
        }
        let lo = s.floor() as usize;
        let w = s - lo as f64;
        Ok(self.states[lo].add_scaled(
            &RiccatiState {
                a00: &self.states[lo + 1].a00 - &self.states[lo].a00,
                a11: &self.states[lo + 1].a11 - &self.states[lo].a11,
                a10: &self.states[lo + 1].a10 - &self.states[lo].a10,
                b0: &self.states[lo + 1].b0 - &self.states[lo].b0,
                b1: &self.states[lo + 1].b1 - &self.states[lo].b1,
                c: self.states[lo + 1].c - self.states[lo].c,
            },
            w,
        ))
    }

    /// Largest entry magnitude over the whole solution.
    pub fn max_abs(&self) -> f64 {
        self.states
            .iter()
            .fold(0.0f64, |acc, s| acc.max(s.max_abs()))
    }
}

/// Integrate the coefficient system backward from t = T with the default
/// blow-up threshold.
pub fn solve_backward(
    params: &ModelParams,
    factors: &FactorParams,
    liab: &LiabilityCoeffs,
    steps: usize,
) -> Result<RiccatiSolution> {
    solve_backward_with_threshold(params, factors, liab, steps, DEFAULT_BLOWUP_THRESHOLD)
}

/// Classical fixed-step RK4 from t = T down to t = 0 with `steps` uniform
/// steps. The terminal state is the liability slice at T; the symmetric
/// blocks are re-symmetrized after every stage; integration aborts with an
/// error naming the first bad mesh time if any entry exceeds `threshold` in
/// magnitude or turns non-finite.
pub fn solve_backward_with_threshold(
    params: &ModelParams,
    factors: &FactorParams,
    liab: &LiabilityCoeffs,
    steps: usize,
    threshold: f64,
) -> Result<RiccatiSolution> {
    if steps < 2 {
        return Err(EqgError::param("steps", "must be >= 2"));
    }
    if !(threshold.is_finite() && threshold > 0.0) {
        return Err(EqgError::param("threshold", "must be finite and > 0"));
    }
    let ctx = DriftContext::new(params, factors, liab)?;
    let mesh = Mesh::new(params.horizon, steps)?;
    let h = mesh.dt();

    let terminal = liab.at(params.horizon);
    let mut states = vec![RiccatiState::zeros(0, 0); mesh.nodes()];
    let mut current = terminal.clone();
    states[steps] = current.clone();

    for k in (0..steps).rev() {
        let t_hi = mesh.time(k + 1);
        let t_lo = mesh.time(k);
        let t_mid = t_hi - 0.5 * h;
        // Backward step: advance by -h.
        let k1 = ctx.eval(t_hi, &current)?;
        let mut s2 = current.add_scaled(&k1, -0.5 * h);
        s2.symmetrize();
        let k2 = ctx.eval(t_mid, &s2)?;
        let mut s3 = current.add_scaled(&k2, -0.5 * h);
        s3.symmetrize();
        let k3 = ctx.eval(t_mid, &s3)?;
        let mut s4 = current.add_scaled(&k3, -h);
        s4.symmetrize();
        let k4 = ctx.eval(t_lo, &s4)?;

        let mut next = current
            .add_scaled(&k1, -h / 6.0)
            .add_scaled(&k2, -h / 3.0)
            .add_scaled(&k3, -h / 3.0)
            .add_scaled(&k4, -h / 6.0);
        next.symmetrize();

        if !next.is_finite() {
            return Err(EqgError::NonFinite {
                context: "riccati backward step".into(),
                t: t_lo,
            });
        }
        let magnitude = next.max_abs();
        if magnitude > threshold {
            return Err(EqgError::RiccatiBlowUp {
                t: t_lo,
                magnitude,
                threshold,
            });
        }
        states[k] = next.clone();
        current = next;
    }

    Ok(RiccatiSolution {
        mesh,
        states,
        d0: factors.d0,
        d: factors.d,
        threshold,
        terminal_reference: terminal,
    })
}

/// Re-validate a produced solution: finite everywhere, symmetric blocks
/// within 1e-10, below the blow-up threshold, terminal slice equal to the
/// liability slice captured at solve time.
pub fn check_global(solution: &RiccatiSolution) -> bool {
    let finite = solution.states.iter().all(|s| s.is_finite());
    let symmetric = solution
        .states
        .iter()
        .all(|s| s.max_asymmetry() < 1e-10);
    let bounded = solution.max_abs() <= solution.threshold;
    let terminal_match = *solution.terminal() == solution.terminal_reference;
    finite && symmetric && bounded && terminal_match
}

// ---------------------------------------------------------------------------
// CSV round trip
// ---------------------------------------------------------------------------

/// 17 significant digits: enough for bit-exact re-ingestion of f64.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

impl RiccatiSolution {
    /// Column header shared by writer and reader: t, then row-major blocks.
    fn csv_header(d0: usize, d: usize) -> String {
        let mut cols = vec!["t".to_string()];
        for i in 0..d0 {
            for j in 0..d0 {
                cols.push(format!("a00_{i}_{j}"));
            }
        }
        for i in 0..d {
            for j in 0..d {
                cols.push(format!("a11_{i}_{j}"));
            }
        }
        for i in 0..d {
            for j in 0..d0 {
                cols.push(format!("a10_{i}_{j}"));
            }
        }
        for i in 0..d0 {
            cols.push(format!("b0_{i}"));
        }
        for i in 0..d {
            cols.push(format!("b1_{i}"));
        }
        cols.push("c".to_string());
        cols.join(",")
    }

    /// Serialize to CSV: a metadata comment, a header row, one row per mesh
    /// node with row-major block entries at 17 significant digits.
    pub fn to_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(
            out,
            "# riccati-solution v1 d0={} d={} steps={} horizon={}",
            self.d0,
            self.d,
            self.mesh.steps(),
            fmt_f64(self.mesh.horizon())
        )?;
        writeln!(out, "{}", Self::csv_header(self.d0, self.d))?;
        for (k, s) in self.states.iter().enumerate() {
            let mut row = Vec::with_capacity(2 + s.a00.len() + s.a11.len() + s.a10.len());
            row.push(fmt_f64(self.mesh.time(k)));
            for i in 0..self.d0 {
                for j in 0..self.d0 {
                    row.push(fmt_f64(s.a00[(i, j)]));
                }
            }
            for i in 0..self.d {
                for j in 0..self.d {
                    row.push(fmt_f64(s.a11[(i, j)]));
                }
            }
            for i in 0..self.d {
                for j in 0..self.d0 {
                    row.push(fmt_f64(s.a10[(i, j)]));
                }
            }
            for i in 0..self.d0 {
                row.push(fmt_f64(s.b0[i]));
            }
            for i in 0..self.d {
                row.push(fmt_f64(s.b1[i]));
            }
            row.push(fmt_f64(s.c));
            writeln!(out, "{}", row.join(","))?;
        }
        Ok(())
    }

    /// Reload a solution serialized by [`to_csv`]. Unknown comment lines
    /// (e.g. provenance) are skipped; the metadata line is required.
    pub fn from_csv<R: BufRead>(reader: R) -> Result<Self> {
        let mut meta: Option<(usize, usize, usize, f64)> = None;
        let mut rows: Vec<(f64, RiccatiState)> = Vec::new();
        let mut expect_cols = 0usize;

        for (idx, line) in reader.lines().enumerate() {
            let lineno = idx + 1;
            let line = line.map_err(|e| EqgError::Parse {
                line: lineno,
                reason: e.to_string(),
            })?;
            let trimmed = line.trim();
            if trimmed.is_empty() {
                continue;
            }
            if let Some(rest) = trimmed.strip_prefix('#') {
                let rest = rest.trim();
                if let Some(fields) = rest.strip_prefix("riccati-solution v1") {
                    let mut d0 = None;
                    let mut d = None;
                    let mut steps = None;
                    let mut horizon = None;
                    for kv in fields.split_whitespace() {
                        let (key, val) = kv.split_once('=').ok_or(EqgError::Parse {
                            line: lineno,
                            reason: format!("bad metadata field `{kv}`"),
                        })?;
                        match key {
                            "d0" => d0 = val.parse::<usize>().ok(),
                            "d" => d = val.parse::<usize>().ok(),
                            "steps" => steps = val.parse::<usize>().ok(),
                            "horizon" => horizon = val.parse::<f64>().ok(),
                            _ => {}
                        }
                    }
                    match (d0, d, steps, horizon) {
                        (Some(d0), Some(d), Some(steps), Some(h)) => {
                            expect_cols = 1 + d0 * d0 + d * d + d * d0 + d0 + d + 1;
                            meta = Some((d0, d, steps, h));
                        }
                        _ => {
                            return Err(EqgError::Parse {
                                line: lineno,
                                reason: "incomplete riccati-solution metadata".into(),
                            })
                        }
                    }
                }
                continue;
            }
            if trimmed.starts_with('t') {
                continue; // column header
            }
            let (d0, d, _, _) = meta.ok_or(EqgError::Parse {
                line: lineno,
                reason: "data row before riccati-solution metadata".into(),
            })?;
            let vals: Vec<f64> = trimmed
                .split(',')
                .map(|s| {
                    s.trim().parse::<f64>().map_err(|e| EqgError::Parse {
                        line: lineno,
                        reason: format!("bad float `{s}`: {e}"),
                    })
                })
                .collect::<Result<_>>()?;
            if vals.len() != expect_cols {
                return Err(EqgError::Parse {
                    line: lineno,
                    reason: format!("expected {expect_cols} columns, got {}", vals.len()),
                });
            }
            let mut it = vals.into_iter();
            let t = it.next().unwrap();
            let take = |it: &mut std::vec::IntoIter<f64>, n: usize| -> Vec<f64> {
                it.by_ref().take(n).collect()
            };
            let a00 = DMatrix::from_row_slice(d0, d0, &take(&mut it, d0 * d0));
            let a11 = DMatrix::from_row_slice(d, d, &take(&mut it, d * d));
            let a10 = DMatrix::from_row_slice(d, d0, &take(&mut it, d * d0));
            let b0 = DVector::from_vec(take(&mut it, d0));
            let b1 = DVector::from_vec(take(&mut it, d));
            let c = it.next().unwrap();
            rows.push((
                t,
                RiccatiState {
                    a00,
                    a11,
                    a10,
                    b0,
                    b1,
                    c,
                },
            ));
        }

        let (d0, d, steps, horizon) = meta.ok_or(EqgError::Parse {
            line: 0,
            reason: "missing riccati-solution metadata line".into(),
        })?;
        if rows.len() != steps + 1 {
            return Err(EqgError::Parse {
                line: 0,
                reason: format!("expected {} rows, got {}", steps + 1, rows.len()),
            });
        }
        let mesh = Mesh::new(horizon, steps)?;
        for (k, (t, _)) in rows.iter().enumerate() {
            if (t - mesh.time(k)).abs() > 1e-12 * horizon.max(1.0) {
                return Err(EqgError::Parse {
                    line: 0,
                    reason: format!("row {k} time {t} does not match mesh node {}", mesh.time(k)),
                });
            }
        }
        let states: Vec<RiccatiState> = rows.into_iter().map(|(_, s)| s).collect();
        let terminal_reference = states.last().unwrap().clone();
        Ok(RiccatiSolution {
            mesh,
            states,
            d0,
            d,
            threshold: DEFAULT_BLOWUP_THRESHOLD,
            terminal_reference,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::curve::Curve;
    use approx::assert_abs_diff_eq;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model_params() -> ModelParams {
        ModelParams::new(0.5, 1.0, 0.9, 0.05, 0.8, 0.4, 1.0, Curve::constant(0.1)).unwrap()
    }

    fn factor_params(sigma0: DMatrix<f64>, sigma: DMatrix<f64>) -> FactorParams {
        FactorParams {
            n: 1,
            d0: 2,
            d: 2,
            k0: 1.0,
            k: 1.2,
            m0: DVector::from_vec(vec![0.05, 0.02]),
            m: DVector::from_vec(vec![0.04, 0.01]),
            sigma0,
            sigma,
            x0_init: DVector::from_vec(vec![0.06, 0.0]),
            mean_xi0: 1.0,
            var_xi0: 0.01,
            mean_x0_habit: 0.1,
            var_x0_habit: 0.0025,
            mean_x0i: DVector::from_vec(vec![0.05, 0.0]),
            var_x0i: DMatrix::from_diagonal_element(2, 2, 0.01),
        }
        .validated()
        .unwrap()
    }

    fn reference_factors() -> FactorParams {
        factor_params(
            DMatrix::from_row_slice(2, 2, &[0.12, 0.0, 0.03, 0.10]),
            DMatrix::from_row_slice(2, 2, &[0.11, 0.0, 0.02, 0.09]),
        )
    }

    fn reference_liability() -> LiabilityCoeffs {
        LiabilityCoeffs::new(
            Curve::constant(DMatrix::from_row_slice(2, 2, &[0.08, 0.01, 0.01, 0.06])),
            Curve::constant(DMatrix::from_row_slice(2, 2, &[0.05, 0.0, 0.0, 0.04])),
            Curve::constant(DMatrix::from_row_slice(2, 2, &[0.20, 0.05, 0.0, 0.15])),
            Curve::constant(DVector::from_vec(vec![0.02, 0.01])),
            Curve::constant(DVector::from_vec(vec![0.015, 0.0])),
            Curve::constant(0.01),
            2,
            2,
            1.0,
        )
        .unwrap()
    }

    fn random_state(rng: &mut ChaCha8Rng, d0: usize, d: usize) -> RiccatiState {
        let mut sym = |n: usize| {
            let m = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
            (&m + m.transpose()) * 0.5
        };
        let a00 = sym(d0);
        let a11 = sym(d);
        RiccatiState {
            a00,
            a11,
            a10: DMatrix::from_fn(d, d0, |_, _| rng.gen_range(-1.0..1.0)),
            b0: DVector::from_fn(d0, |_, _| rng.gen_range(-1.0..1.0)),
            b1: DVector::from_fn(d, |_, _| rng.gen_range(-1.0..1.0)),
            c: rng.gen_range(-1.0..1.0),
        }
    }

    #[test]
    fn split_sigma0_selects_columns() {
        let s = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let (hat, check) = split_sigma0(&s, 1).unwrap();
        assert_eq!(hat, DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 3.0, 0.0]));
        assert_eq!(check, DMatrix::from_row_slice(2, 2, &[0.0, 2.0, 0.0, 4.0]));
        assert_eq!(&hat + &check, s);

        let (full, rest) = split_sigma0(&s, 2).unwrap();
        assert_eq!(full, s);
        assert_eq!(rest, DMatrix::zeros(2, 2));
        assert!(split_sigma0(&s, 0).is_err());
        assert!(split_sigma0(&s, 3).is_err());
    }

    #[test]
    fn split_projects_rows() {
        let s = DMatrix::from_row_slice(3, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]);
        let (hat, _) = split_sigma0(&s, 3).unwrap();
        let u = nalgebra::RowDVector::from_vec(vec![0.3, -0.7, 1.1]);
        assert_eq!(&u * &hat, &u * &s);
    }

    #[test]
    fn rhs_zero_state_zero_liability_gives_minus_g_tilde() {
        let p = model_params();
        let f = reference_factors();
        let liab = LiabilityCoeffs::zero(2, 2);
        let z = RiccatiState::zeros(2, 2);
        let d = rhs(0.3, &z, &p, &f, &liab).unwrap();
        assert_eq!(d.a00, DMatrix::zeros(2, 2));
        assert_eq!(d.a11, DMatrix::zeros(2, 2));
        assert_eq!(d.a10, DMatrix::zeros(2, 2));
        assert_eq!(d.b0, DVector::zeros(2));
        assert_eq!(d.b1, DVector::zeros(2));
        assert_abs_diff_eq!(d.c, -crate::model::g_tilde(&p, 0.3).unwrap(), epsilon = 1e-15);
    }

    #[test]
    fn rhs_identity_state_zero_noise_keeps_only_linear_term() {
        let p = model_params();
        let f = factor_params(DMatrix::zeros(2, 2), DMatrix::zeros(2, 2));
        let liab = LiabilityCoeffs::zero(2, 2);
        let mut state = RiccatiState::zeros(2, 2);
        state.a00 = DMatrix::identity(2, 2);
        let t = 0.4;
        let d = rhs(t, &state, &p, &f, &liab).unwrap();
        let zeta_t = crate::model::zeta(&p, t).unwrap();
        let c1 = p.gamma * (1.0 + p.b * zeta_t) / p.beta;
        let expected = DMatrix::identity(2, 2) * (2.0 * f.k0 + c1);
        assert_abs_diff_eq!(d.a00, expected, epsilon = 1e-14);
    }

    /// Independent scalar-by-scalar transcription of the six ODE lines,
    /// written with index loops only — the oracle for `rhs`.
    #[allow(clippy::needless_range_loop)]
    fn rhs_scalar_oracle(
        t: f64,
        s: &RiccatiState,
        p: &ModelParams,
        f: &FactorParams,
        liab: &LiabilityCoeffs,
    ) -> RiccatiState {
        let d0 = f.d0;
        let d = f.d;
        let gamma = p.gamma;
        let zeta_t = crate::model::zeta(p, t).unwrap();
        let c1 = gamma * (1.0 + p.b * zeta_t) / p.beta;
        let term = liab.at(t);
        let mu1 = crate::factors::mu1(f, t);

        let mat = |m: &DMatrix<f64>, i: usize, j: usize| m[(i, j)];
        // Products of the diffusion blocks, by explicit summation.
        let mut sig00 = vec![vec![0.0; d0]; d0];
        let mut hat00 = vec![vec![0.0; d0]; d0];
        let mut chk00 = vec![vec![0.0; d0]; d0];
        for i in 0..d0 {
            for j in 0..d0 {
                for l in 0..d0 {
                    let prod = mat(&f.sigma0, i, l) * mat(&f.sigma0, j, l);
                    sig00[i][j] += prod;
                    if l < f.n {
                        hat00[i][j] += prod;
                    } else {
                        chk00[i][j] += prod;
                    }
                }
            }
        }
        let mut sigsig = vec![vec![0.0; d]; d];
        for i in 0..d {
            for j in 0..d {
                for l in 0..d {
                    sigsig[i][j] += mat(&f.sigma, i, l) * mat(&f.sigma, j, l);
                }
            }
        }

        let mut out = RiccatiState::zeros(d0, d);

        // A00 dot
        for i in 0..d0 {
            for j in 0..d0 {
                let mut quad = 0.0;
                for x in 0..d0 {
                    for y in 0..d0 {
                        quad += s.a00[(i, x)] * sig00[x][y] * s.a00[(y, j)];
                    }
                }
                let mut cross = 0.0;
                for x in 0..d {
                    for y in 0..d {
                        cross += s.a10[(x, i)] * sigsig[x][y] * s.a10[(y, j)];
                    }
                }
                out.a00[(i, j)] = -gamma * quad - gamma * cross
                    + (2.0 * f.k0 + c1) * s.a00[(i, j)]
                    - c1 * term.a00[(i, j)];
            }
        }
        // A11 dot
        for i in 0..d {
            for j in 0..d {
                let mut quad = 0.0;
                for x in 0..d {
                    for y in 0..d {
                        quad += s.a11[(i, x)] * sigsig[x][y] * s.a11[(y, j)];
                    }
                }
                let mut cross = 0.0;
                for x in 0..d0 {
                    for y in 0..d0 {
                        cross += s.a10[(i, x)] * chk00[x][y] * s.a10[(j, y)];
                    }
                }
                out.a11[(i, j)] = -gamma * quad - gamma * cross
                    + (2.0 * f.k + c1) * s.a11[(i, j)]
                    - c1 * term.a11[(i, j)];
            }
        }
        // A10 dot
        for i in 0..d {
            for j in 0..d0 {
                let mut first = 0.0;
                for x in 0..d0 {
                    for y in 0..d0 {
                        first += s.a10[(i, x)] * sig00[x][y] * s.a00[(y, j)];
                    }
                }
                let mut second = 0.0;
                for x in 0..d {
                    for y in 0..d {
                        second += s.a11[(i, x)] * sigsig[x][y] * s.a10[(y, j)];
                    }
                }
                out.a10[(i, j)] = -gamma * first - gamma * second
                    + (f.k0 + f.k + c1) * s.a10[(i, j)]
                    - c1 * term.a10[(i, j)];
            }
        }
        // B0 dot
        for i in 0..d0 {
            let mut v = (c1 + f.k0) * s.b0[i] - c1 * term.b0[i];
            for x in 0..d0 {
                for y in 0..d0 {
                    v -= gamma * s.a00[(i, x)] * sig00[x][y] * s.b0[y];
                }
            }
            for x in 0..d {
                for y in 0..d {
                    v -= gamma * s.a10[(x, i)] * sigsig[x][y] * s.b1[y];
                }
            }
            for x in 0..d0 {
                v -= f.k0 * s.a00[(i, x)] * f.m0[x];
            }
            for x in 0..d {
                v -= f.k * s.a10[(x, i)] * f.m[x];
            }
            out.b0[i] = v;
        }
        // A10 hat00 A10^T mu1 (shared by B1 dot and C dot)
        let mut hat_mu = vec![0.0; d];
        for i in 0..d {
            for x in 0..d0 {
                for y in 0..d0 {
                    for l in 0..d {
                        hat_mu[i] += s.a10[(i, x)] * hat00[x][y] * s.a10[(l, y)] * mu1[l];
                    }
                }
            }
        }
        // B1 dot
        for i in 0..d {
            let mut v = (c1 + f.k) * s.b1[i] - c1 * term.b1[i] - gamma * hat_mu[i];
            for x in 0..d {
                for y in 0..d {
                    v -= gamma * s.a11[(i, x)] * sigsig[x][y] * s.b1[y];
                }
            }
            for x in 0..d0 {
                for y in 0..d0 {
                    v -= gamma * s.a10[(i, x)] * sig00[x][y] * s.b0[y];
                }
            }
            for x in 0..d {
                v -= f.k * s.a11[(i, x)] * f.m[x];
            }
            for x in 0..d0 {
                v -= f.k0 * s.a10[(i, x)] * f.m0[x];
            }
            out.b1[i] = v;
        }
        // C dot
        let mut c = c1 * s.c - c1 * term.c - crate::model::g_tilde(p, t).unwrap();
        for x in 0..d0 {
            for y in 0..d0 {
                c -= 0.5 * gamma * s.b0[x] * sig00[x][y] * s.b0[y];
                c -= 0.5 * s.a00[(x, y)] * sig00[y][x]; // −½tr[A₀₀Σ₀Σ₀ᵀ]
            }
        }
        for x in 0..d {
            for y in 0..d {
                c -= 0.5 * gamma * s.b1[x] * sigsig[x][y] * s.b1[y];
                c -= 0.5 * s.a11[(x, y)] * sigsig[y][x]; // −½tr[A₁₁ΣΣᵀ]
            }
        }
        for x in 0..d0 {
            c -= f.k0 * s.b0[x] * f.m0[x];
        }
        for x in 0..d {
            c -= f.k * s.b1[x] * f.m[x];
            c += 0.5 * gamma * hat_mu[x] * mu1[x];
        }
        out.c = c;

        // Same symmetrization convention as the production code.
        out.symmetrize();
        out
    }

    #[test]
    fn rhs_matches_scalar_transcription_on_random_states() {
        let p = model_params();
        let f = reference_factors();
        let liab = reference_liability();
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for trial in 0..50 {
            let s = random_state(&mut rng, 2, 2);
            let t = rng.gen_range(0.0..1.0);
            let fast = rhs(t, &s, &p, &f, &liab).unwrap();
            let slow = rhs_scalar_oracle(t, &s, &p, &f, &liab);
            let diff = |a: f64, b: f64| (a - b).abs();
            for i in 0..2 {
                for j in 0..2 {
                    assert!(
                        diff(fast.a00[(i, j)], slow.a00[(i, j)]) < 1e-12,
                        "a00 trial {trial}"
                    );
                    assert!(
                        diff(fast.a11[(i, j)], slow.a11[(i, j)]) < 1e-12,
                        "a11 trial {trial}"
                    );
                    assert!(
                        diff(fast.a10[(i, j)], slow.a10[(i, j)]) < 1e-12,
                        "a10 trial {trial}"
                    );
                }
                assert!(diff(fast.b0[i], slow.b0[i]) < 1e-12, "b0 trial {trial}");
                assert!(diff(fast.b1[i], slow.b1[i]) < 1e-12, "b1 trial {trial}");
            }
            assert!(diff(fast.c, slow.c) < 1e-12, "c trial {trial}");
        }
    }

    #[test]
    fn terminal_slice_equals_liability_exactly() {
        let p = model_params();
        let f = reference_factors();
        let liab = reference_liability();
        let sol = solve_backward(&p, &f, &liab, 100).unwrap();
        assert_eq!(*sol.terminal(), liab.at(1.0));
        assert!(check_global(&sol));
    }

    #[test]
    fn zero_scenario_keeps_a_and_b_identically_zero() {
        let p = model_params();
        let f = factor_params(DMatrix::zeros(2, 2), DMatrix::zeros(2, 2));
        let liab = LiabilityCoeffs::zero(2, 2);
        let sol = solve_backward(&p, &f, &liab, 500).unwrap();
        for k in 0..=500 {
            let s = sol.state_at_node(k);
            assert!(s.a00.amax() < 1e-10);
            assert!(s.a11.amax() < 1e-10);
            assert!(s.a10.amax() < 1e-10);
            assert!(s.b0.amax() < 1e-10);
            assert!(s.b1.amax() < 1e-10);
        }
        assert!(check_global(&sol));
    }

    /// Integrating-factor closed form for the zero scenario:
    /// C(t) = ∫_t^T g̃(s)·exp(−∫_t^s c₁(u)du) ds, by dense trapezoid
    /// quadrature with cumulative inner integral.
    fn c_quadrature_oracle(p: &ModelParams, t: f64, points: usize) -> f64 {
        let span = p.horizon - t;
        let h = span / points as f64;
        // cumulative integral of c1 from t
        let c1 = |u: f64| {
            p.gamma * (1.0 + p.b * crate::model::zeta(p, u).unwrap()) / p.beta
        };
        let mut inner = vec![0.0; points + 1];
        for i in 1..=points {
            let a = t + (i - 1) as f64 * h;
            let b = t + i as f64 * h;
            inner[i] = inner[i - 1] + 0.5 * h * (c1(a) + c1(b));
        }
        let integrand = |i: usize| {
            let s = t + i as f64 * h;
            crate::model::g_tilde(p, s.min(p.horizon)).unwrap() * (-inner[i]).exp()
        };
        let mut total = 0.5 * (integrand(0) + integrand(points));
        for i in 1..points {
            total += integrand(i);
        }
        total * h
    }

    #[test]
    fn zero_scenario_c_matches_integrating_factor_form() {
        let p = model_params();
        let f = factor_params(DMatrix::zeros(2, 2), DMatrix::zeros(2, 2));
        let liab = LiabilityCoeffs::zero(2, 2);
        let sol = solve_backward(&p, &f, &liab, 1000).unwrap();
        // Frozen spot values from a 50-digit evaluation of the closed form.
        let frozen = [
            (0.0, 1.1924774184029925),
            (0.25, 0.9527014245676515),
            (0.5, 0.6740848542993932),
            (0.75, 0.3556156352375964),
        ];
        for (t, expect) in frozen {
            let t: f64 = t;
            let k = (t * 1000.0).round() as usize;
            assert_abs_diff_eq!(sol.state_at_node(k).c, expect, epsilon = 1e-8);
            assert_abs_diff_eq!(c_quadrature_oracle(&p, t, 20_000), expect, epsilon = 1e-8);
        }
        // Whole-mesh agreement with the quadrature oracle on a subsample.
        for k in (0..=1000).step_by(100) {
            let t = sol.mesh().time(k);
            assert_abs_diff_eq!(
                sol.state_at_node(k).c,
                c_quadrature_oracle(&p, t, 20_000),
                epsilon = 1e-8
            );
        }
    }

    #[test]
    fn rk4_self_convergence_is_fourth_order() {
        let p = model_params();
        let f = reference_factors();
        let liab = reference_liability();
        let reference = solve_backward(&p, &f, &liab, 10_000).unwrap();
        let err = |steps: usize| -> f64 {
            let sol = solve_backward(&p, &f, &liab, steps).unwrap();
            let stride = 10_000 / steps;
            let mut worst = 0.0f64;
            for k in 0..=steps {
                let a = sol.state_at_node(k);
                let b = reference.state_at_node(k * stride);
                let d = a.add_scaled(b, -1.0).max_abs();
                worst = worst.max(d);
            }
            worst
        };
        let e200 = err(200);
        let e400 = err(400);
        let order = (e200 / e400).log2();
        assert!(
            (order - 4.0).abs() <= 0.5,
            "observed order {order}, errors {e200:.3e} vs {e400:.3e}"
        );
    }

    #[test]
    fn blow_up_is_detected_and_named() {
        let p = model_params();
        // Large noise plus a violently scaled terminal quadratic coefficient:
        // the quadratic term dominates and explodes before t = 0.
        let f = factor_params(
            DMatrix::from_diagonal_element(2, 2, 6.0),
            DMatrix::from_diagonal_element(2, 2, 6.0),
        );
        let liab = LiabilityCoeffs::new(
            Curve::constant(DMatrix::from_diagonal_element(2, 2, -0.08 * 1e6)),
            Curve::constant(DMatrix::zeros(2, 2)),
            Curve::constant(DMatrix::zeros(2, 2)),
            Curve::constant(DVector::zeros(2)),
            Curve::constant(DVector::zeros(2)),
            Curve::constant(0.0),
            2,
            2,
            1.0,
        )
        .unwrap();
        let err = solve_backward(&p, &f, &liab, 400).unwrap_err();
        match err {
            EqgError::RiccatiBlowUp { t, magnitude, .. } => {
                assert!((0.0..1.0).contains(&t));
                assert!(magnitude > DEFAULT_BLOWUP_THRESHOLD);
            }
            EqgError::NonFinite { .. } => {} // acceptable: overflow beat the threshold check
            other => panic!("expected blow-up, got {other:?}"),
        }
    }

    #[test]
    fn check_global_rejects_corrupted_solutions() {
        let p = model_params();
        let f = reference_factors();
        let liab = reference_liability();
        let mut sol = solve_backward(&p, &f, &liab, 50).unwrap();
        assert!(check_global(&sol));
        sol.states[10].a00[(0, 1)] += 1e-6; // break symmetry
        assert!(!check_global(&sol));
        sol.states[10].a00[(0, 1)] = f64::NAN;
        assert!(!check_global(&sol));
    }

    #[test]
    fn interpolation_is_exact_at_nodes_and_linear_between() {
        let p = model_params();
        let f = reference_factors();
        let liab = reference_liability();
        let sol = solve_backward(&p, &f, &liab, 40).unwrap();
        for k in [0, 1, 17, 39, 40] {
            let t = sol.mesh().time(k);
            assert_eq!(sol.value(t).unwrap(), *sol.state_at_node(k));
        }
        let mid = sol.value(sol.mesh().time(3) + 0.5 * sol.mesh().dt()).unwrap();
        let expect = sol.state_at_node(3).add_scaled(sol.state_at_node(4), 1.0);
        assert_abs_diff_eq!(mid.c, 0.5 * expect.c, epsilon = 1e-12);
        assert!(sol.value(-0.1).is_err());
        assert!(sol.value(1.5).is_err());
    }

    #[test]
    fn csv_round_trip_is_bit_exact() {
        let p = model_params();
        let f = reference_factors();
        let liab = reference_liability();
        let sol = solve_backward(&p, &f, &liab, 25).unwrap();
        let mut buf = Vec::new();
        sol.to_csv(&mut buf).unwrap();
        let reloaded = RiccatiSolution::from_csv(&buf[..]).unwrap();
        assert_eq!(reloaded.mesh(), sol.mesh());
        for k in 0..=25 {
            assert_eq!(reloaded.state_at_node(k), sol.state_at_node(k));
        }
        // And a second serialization is byte-identical.
        let mut buf2 = Vec::new();
        reloaded.to_csv(&mut buf2).unwrap();
        assert_eq!(buf, buf2);
    }

    #[test]
    fn liability_load_rejects_asymmetry() {
        let bad = LiabilityCoeffs::new(
            Curve::constant(DMatrix::from_row_slice(2, 2, &[0.1, 0.2, 0.0, 0.1])),
            Curve::constant(DMatrix::zeros(2, 2)),
            Curve::constant(DMatrix::zeros(2, 2)),
            Curve::constant(DVector::zeros(2)),
            Curve::constant(DVector::zeros(2)),
            Curve::constant(0.0),
            2,
            2,
            1.0,
        );
        assert!(bad.is_err());
    }
}
