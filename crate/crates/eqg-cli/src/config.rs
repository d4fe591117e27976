//! Scenario configuration: one TOML file with `[model]`, `[factors]`,
//! `[liability]`, `[market]`, `[run]` (and optionally `[smallness]`)
//! sections. Every library-level invariant is re-validated at load, and
//! failures are reported as `path:line: message` pointing at the offending
//! key (or at its section header when no single key is responsible).
//!
//! Time-varying coefficients are given either as inline constants or as
//! side-car CSV grids referenced by `<name>_csv` keys, resolved relative to
//! the configuration file.

use std::fs;
use std::path::{Path, PathBuf};

use eqg_core::curve::Curve;
use eqg_core::equilibrium::MarketSpec;
use eqg_core::model::ModelParams;
use eqg_core::riccati::{FactorParams, LiabilityCoeffs};
use nalgebra::{DMatrix, DVector};
use serde::Deserialize;
use sha2::{Digest, Sha256};

use crate::Failure;

// ---------------------------------------------------------------------------
// Loaded configuration
// ---------------------------------------------------------------------------

/// Fully validated scenario: library parameter types plus run settings.
pub struct ScenarioConfig {
    pub model: ModelParams,
    pub factors: FactorParams,
    pub liability: LiabilityCoeffs,
    /// Present only when the file has a `[market]` section; commands that
    /// trade (simulate, clearing-sweep) require it.
    pub market: Option<MarketSpec>,
    pub run: RunSettings,
    pub smallness: Option<SmallnessSettings>,
    /// SHA-256 of the raw configuration bytes, for provenance stamps.
    pub config_sha256: String,
}

/// Experiment-scale settings from the `[run]` section.
pub struct RunSettings {
    /// Mesh steps shared by the coefficient solve and the simulations.
    pub steps: usize,
    pub seed: u64,
    pub out: Option<PathBuf>,
    /// Agents in one simulated market (simulate).
    pub n_agents: usize,
    /// Population sizes for the clearing sweep.
    pub ns: Vec<usize>,
    /// Independent markets per population size.
    pub markets_per_n: usize,
    /// Coarse-to-fine mesh list for the residual study; when absent, the
    /// dyadic ladder steps/8, steps/4, steps/2, steps is used.
    pub residual_meshes: Option<Vec<usize>>,
    /// Monte-Carlo paths for the residual study.
    pub paths: usize,
    /// Acceptance band for the fitted residual order under --strict.
    pub residual_order_band: (f64, f64),
    /// Acceptance band for the fitted clearing slope under --strict.
    pub clearing_slope_band: (f64, f64),
}

/// User-supplied constants for the standalone smallness calculator.
pub struct SmallnessSettings {
    pub gamma_low: f64,
    pub gamma_high: f64,
    pub gamma_hat_inv_mean: f64,
    pub ft_bound: f64,
    pub g_integral_bound: f64,
    pub varsigma: f64,
}

// ---------------------------------------------------------------------------
// Raw (serde) layer
// ---------------------------------------------------------------------------

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    model: RawModel,
    factors: RawFactors,
    liability: RawLiability,
    market: Option<RawMarket>,
    run: RawRun,
    smallness: Option<RawSmallness>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawModel {
    gamma: f64,
    beta: f64,
    a: f64,
    delta: f64,
    kappa: f64,
    b: f64,
    horizon: f64,
    rho: Option<f64>,
    rho_csv: Option<String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawFactors {
    n: usize,
    d0: usize,
    d: usize,
    k0: f64,
    k: f64,
    m0: Vec<f64>,
    m: Vec<f64>,
    sigma0: Vec<Vec<f64>>,
    sigma: Vec<Vec<f64>>,
    x0_init: Vec<f64>,
    mean_xi0: f64,
    var_xi0: f64,
    mean_x0_habit: f64,
    var_x0_habit: f64,
    mean_x0i: Vec<f64>,
    var_x0i: Vec<Vec<f64>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLiability {
    af00: Option<Vec<Vec<f64>>>,
    af00_csv: Option<String>,
    af11: Option<Vec<Vec<f64>>>,
    af11_csv: Option<String>,
    af10: Option<Vec<Vec<f64>>>,
    af10_csv: Option<String>,
    bf0: Option<Vec<f64>>,
    bf0_csv: Option<String>,
    bf1: Option<Vec<f64>>,
    bf1_csv: Option<String>,
    cf: Option<f64>,
    cf_csv: Option<String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMarket {
    sigma: Vec<Vec<f64>>,
    lambda_low: f64,
    lambda_high: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRun {
    steps: usize,
    seed: u64,
    out: Option<String>,
    n_agents: Option<usize>,
    ns: Option<Vec<usize>>,
    markets_per_n: Option<usize>,
    residual_meshes: Option<Vec<usize>>,
    paths: Option<usize>,
    residual_order_band: Option<[f64; 2]>,
    clearing_slope_band: Option<[f64; 2]>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSmallness {
    gamma_low: f64,
    gamma_high: f64,
    gamma_hat_inv_mean: f64,
    ft_bound: f64,
    g_integral_bound: f64,
    varsigma: f64,
}

// ---------------------------------------------------------------------------
// Line attribution
// ---------------------------------------------------------------------------

/// 1-based line of the byte offset in `text`.
fn line_of_offset(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

/// 1-based line of `[section]`, if present.
fn section_line(text: &str, section: &str) -> Option<usize> {
    let header = format!("[{section}]");
    text.lines()
        .position(|l| l.trim() == header)
        .map(|idx| idx + 1)
}

/// 1-based line of `key = ...` inside `[section]`: scans from the section
/// header to the next header. Falls back to the header line, then line 1.
fn key_line(text: &str, section: &str, key: Option<&str>) -> usize {
    let Some(start) = section_line(text, section) else {
        return 1;
    };
    let Some(key) = key else { return start };
    for (idx, line) in text.lines().enumerate().skip(start) {
        let trimmed = line.trim_start();
        if trimmed.starts_with('[') {
            break;
        }
        if trimmed
            .strip_prefix(key)
            .is_some_and(|rest| rest.trim_start().starts_with('='))
        {
            return idx + 1;
        }
    }
    start
}

/// Context threaded through the section builders so semantic failures can
/// name the file and line of the value that caused them.
struct Loader<'a> {
    path: &'a Path,
    text: &'a str,
    dir: PathBuf,
}

impl Loader<'_> {
    fn fail(&self, section: &str, key: Option<&str>, message: impl std::fmt::Display) -> Failure {
        let line = key_line(self.text, section, key);
        Failure::Config(format!("{}:{line}: {message}", self.path.display()))
    }

    /// Attribute a library validation error to its key: the first token of
    /// the parameter/context name usually matches the TOML key.
    fn lib_fail(&self, section: &str, err: eqg_core::EqgError) -> Failure {
        use eqg_core::EqgError as E;
        let key = match &err {
            E::InvalidParameter { name, .. } => name.split_whitespace().next().map(str::to_owned),
            E::DimensionMismatch { context, .. } => {
                context.split_whitespace().next().map(str::to_owned)
            }
            _ => None,
        };
        self.fail(section, key.as_deref(), err)
    }
}

// ---------------------------------------------------------------------------
// Shape helpers
// ---------------------------------------------------------------------------

fn to_matrix(
    loader: &Loader,
    section: &str,
    key: &str,
    rows: &[Vec<f64>],
) -> Result<DMatrix<f64>, Failure> {
    if rows.is_empty() || rows[0].is_empty() {
        return Err(loader.fail(section, Some(key), "matrix must be non-empty"));
    }
    let cols = rows[0].len();
    if rows.iter().any(|r| r.len() != cols) {
        return Err(loader.fail(section, Some(key), "matrix rows must have equal length"));
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Ok(DMatrix::from_row_slice(rows.len(), cols, &flat))
}

// ---------------------------------------------------------------------------
// Side-car CSV grids
// ---------------------------------------------------------------------------

/// Load a time-grid CSV: `#` comments and blank lines are skipped, a header
/// row starting with `t` is required, each data row is `t,<entries...>` with
/// exactly `width` entries. Returns (times, per-row entries).
fn load_grid_csv(
    loader: &Loader,
    section: &str,
    key: &str,
    rel_path: &str,
    width: usize,
) -> Result<(Vec<f64>, Vec<Vec<f64>>), Failure> {
    let path = loader.dir.join(rel_path);
    let text = fs::read_to_string(&path)
        .map_err(|e| loader.fail(section, Some(key), format!("{}: {e}", path.display())))?;
    let mut times = Vec::new();
    let mut rows = Vec::new();
    let mut saw_header = false;
    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        let fail = |msg: String| {
            Failure::Config(format!("{}:{lineno}: {msg}", path.display()))
        };
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        if !saw_header {
            if !trimmed.starts_with('t') {
                return Err(fail("expected a header row starting with `t`".into()));
            }
            saw_header = true;
            continue;
        }
        let vals: Vec<f64> = trimmed
            .split(',')
            .map(|s| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|e| fail(format!("bad float `{s}`: {e}")))
            })
            .collect::<Result<_, _>>()?;
        if vals.len() != width + 1 {
            return Err(fail(format!(
                "expected {} columns (t plus {width} entries), got {}",
                width + 1,
                vals.len()
            )));
        }
        times.push(vals[0]);
        rows.push(vals[1..].to_vec());
    }
    if rows.is_empty() {
        return Err(loader.fail(section, Some(key), format!("{}: no data rows", path.display())));
    }
    Ok((times, rows))
}

/// Resolve a coefficient that is either an inline constant or a side-car
/// grid; exactly one of the two spellings must be present.
fn curve_from<T: eqg_core::curve::Lerp>(
    loader: &Loader,
    section: &str,
    key: &str,
    inline: Option<T>,
    csv: Option<&str>,
    width: usize,
    parse_row: impl Fn(&[f64]) -> T,
) -> Result<Curve<T>, Failure> {
    match (inline, csv) {
        (Some(_), Some(_)) => Err(loader.fail(
            section,
            Some(key),
            format!("give either `{key}` or `{key}_csv`, not both"),
        )),
        (None, None) => Err(loader.fail(
            section,
            Some(key),
            format!("missing `{key}` (inline constant) or `{key}_csv` (grid file)"),
        )),
        (Some(v), None) => Ok(Curve::constant(v)),
        (None, Some(rel)) => {
            let csv_key = format!("{key}_csv");
            let (times, rows) = load_grid_csv(loader, section, &csv_key, rel, width)?;
            let values: Vec<T> = rows.iter().map(|r| parse_row(r)).collect();
            Curve::from_samples(times, values)
                .map_err(|e| loader.fail(section, Some(&csv_key), format!("{rel}: {e}")))
        }
    }
}

// ---------------------------------------------------------------------------
// Section builders
// ---------------------------------------------------------------------------

fn build_model(loader: &Loader, raw: &RawModel) -> Result<ModelParams, Failure> {
    let rho = curve_from(
        loader,
        "model",
        "rho",
        raw.rho,
        raw.rho_csv.as_deref(),
        1,
        |r| r[0],
    )?;
    ModelParams::new(
        raw.gamma,
        raw.beta,
        raw.a,
        raw.delta,
        raw.kappa,
        raw.b,
        raw.horizon,
        rho,
    )
    .map_err(|e| loader.lib_fail("model", e))
}

fn build_factors(loader: &Loader, raw: &RawFactors) -> Result<FactorParams, Failure> {
    let section = "factors";
    let params = FactorParams {
        n: raw.n,
        d0: raw.d0,
        d: raw.d,
        k0: raw.k0,
        k: raw.k,
        m0: DVector::from_vec(raw.m0.clone()),
        m: DVector::from_vec(raw.m.clone()),
        sigma0: to_matrix(loader, section, "sigma0", &raw.sigma0)?,
        sigma: to_matrix(loader, section, "sigma", &raw.sigma)?,
        x0_init: DVector::from_vec(raw.x0_init.clone()),
        mean_xi0: raw.mean_xi0,
        var_xi0: raw.var_xi0,
        mean_x0_habit: raw.mean_x0_habit,
        var_x0_habit: raw.var_x0_habit,
        mean_x0i: DVector::from_vec(raw.mean_x0i.clone()),
        var_x0i: to_matrix(loader, section, "var_x0i", &raw.var_x0i)?,
    };
    params.validated().map_err(|e| loader.lib_fail(section, e))
}

fn build_liability(
    loader: &Loader,
    raw: &RawLiability,
    factors: &FactorParams,
    horizon: f64,
) -> Result<LiabilityCoeffs, Failure> {
    let section = "liability";
    let (d0, d) = (factors.d0, factors.d);
    let matrix_curve = |key: &str,
                        inline: &Option<Vec<Vec<f64>>>,
                        csv: &Option<String>,
                        rows: usize,
                        cols: usize|
     -> Result<Curve<DMatrix<f64>>, Failure> {
        let inline = inline
            .as_ref()
            .map(|v| to_matrix(loader, section, key, v))
            .transpose()?;
        curve_from(
            loader,
            section,
            key,
            inline,
            csv.as_deref(),
            rows * cols,
            |r| DMatrix::from_row_slice(rows, cols, r),
        )
    };
    let vector_curve = |key: &str,
                        inline: &Option<Vec<f64>>,
                        csv: &Option<String>,
                        len: usize|
     -> Result<Curve<DVector<f64>>, Failure> {
        curve_from(
            loader,
            section,
            key,
            inline.as_ref().map(|v| DVector::from_vec(v.clone())),
            csv.as_deref(),
            len,
            |r| DVector::from_vec(r.to_vec()),
        )
    };

    let af00 = matrix_curve("af00", &raw.af00, &raw.af00_csv, d0, d0)?;
    let af11 = matrix_curve("af11", &raw.af11, &raw.af11_csv, d, d)?;
    let af10 = matrix_curve("af10", &raw.af10, &raw.af10_csv, d, d0)?;
    let bf0 = vector_curve("bf0", &raw.bf0, &raw.bf0_csv, d0)?;
    let bf1 = vector_curve("bf1", &raw.bf1, &raw.bf1_csv, d)?;
    let cf = curve_from(loader, section, "cf", raw.cf, raw.cf_csv.as_deref(), 1, |r| r[0])?;

    LiabilityCoeffs::new(af00, af11, af10, bf0, bf1, cf, d0, d, horizon)
        .map_err(|e| loader.lib_fail(section, e))
}

fn build_market(loader: &Loader, raw: &RawMarket) -> Result<MarketSpec, Failure> {
    let sigma = to_matrix(loader, "market", "sigma", &raw.sigma)?;
    MarketSpec::new(sigma, raw.lambda_low, raw.lambda_high)
        .map_err(|e| loader.lib_fail("market", e))
}

fn build_run(loader: &Loader, raw: &RawRun) -> Result<RunSettings, Failure> {
    let band = |key: &str, pair: Option<[f64; 2]>, default: (f64, f64)| {
        match pair {
            None => Ok(default),
            Some([lo, hi]) if lo.is_finite() && hi.is_finite() && lo < hi => Ok((lo, hi)),
            Some([lo, hi]) => Err(loader.fail(
                "run",
                Some(key),
                format!("band must be finite with low < high, got [{lo}, {hi}]"),
            )),
        }
    };
    Ok(RunSettings {
        steps: raw.steps,
        seed: raw.seed,
        out: raw.out.as_ref().map(PathBuf::from),
        n_agents: raw.n_agents.unwrap_or(16),
        ns: raw.ns.clone().unwrap_or_else(|| vec![8, 16, 32, 64]),
        markets_per_n: raw.markets_per_n.unwrap_or(20),
        residual_meshes: raw.residual_meshes.clone(),
        paths: raw.paths.unwrap_or(500),
        residual_order_band: band("residual_order_band", raw.residual_order_band, (0.75, 1.25))?,
        clearing_slope_band: band(
            "clearing_slope_band",
            raw.clearing_slope_band,
            (-1.25, -0.75),
        )?,
    })
}

// ---------------------------------------------------------------------------
// Entry point
// ---------------------------------------------------------------------------

/// Load and fully validate a scenario configuration file.
pub fn load(path: &Path) -> Result<ScenarioConfig, Failure> {
    let text = fs::read_to_string(path)
        .map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
    let config_sha256 = hex_digest(text.as_bytes());
    let raw: RawConfig = toml::from_str(&text).map_err(|e| {
        let location = match e.span() {
            Some(span) => format!("{}:{}", path.display(), line_of_offset(&text, span.start)),
            None => path.display().to_string(),
        };
        Failure::Config(format!("{location}: {}", e.message()))
    })?;

    let loader = Loader {
        path,
        text: &text,
        dir: path.parent().map(Path::to_path_buf).unwrap_or_default(),
    };

    let model = build_model(&loader, &raw.model)?;
    let factors = build_factors(&loader, &raw.factors)?;
    let liability = build_liability(&loader, &raw.liability, &factors, model.horizon)?;
    let market = raw
        .market
        .as_ref()
        .map(|m| build_market(&loader, m))
        .transpose()?;
    let run = build_run(&loader, &raw.run)?;
    let smallness = raw.smallness.as_ref().map(|s| SmallnessSettings {
        gamma_low: s.gamma_low,
        gamma_high: s.gamma_high,
        gamma_hat_inv_mean: s.gamma_hat_inv_mean,
        ft_bound: s.ft_bound,
        g_integral_bound: s.g_integral_bound,
        varsigma: s.varsigma,
    });

    Ok(ScenarioConfig {
        model,
        factors,
        liability,
        market,
        run,
        smallness,
        config_sha256,
    })
}

fn hex_digest(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}
