//! Weighted Mantel-Haenszel pooling of risk ratios.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::weights::{compute_weights, WeightError, WeightParams, WeightVector};

/// Two-by-two table: `a`/`b` treatment events/non-events, `c`/`d` control.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContingencyTable {
    pub study_id: String,
    pub a: u64,
    pub b: u64,
    pub c: u64,
    pub d: u64,
}

impl ContingencyTable {
    /// From events and arm totals.
    pub fn from_arms(
        study_id: &str,
        events_trt: u64,
        total_trt: u64,
        events_ctl: u64,
        total_ctl: u64,
    ) -> Result<Self, MetaError> {
        if events_trt > total_trt || events_ctl > total_ctl {
            return Err(MetaError::InvalidTable {
                study_id: study_id.into(),
                reason: "events exceed arm total",
            });
        }
        let t = ContingencyTable {
            study_id: study_id.into(),
            a: events_trt,
            b: total_trt - events_trt,
            c: events_ctl,
            d: total_ctl - events_ctl,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<(), MetaError> {
        if self.n1() == 0 || self.n0() == 0 {
            return Err(MetaError::InvalidTable {
                study_id: self.study_id.clone(),
                reason: "both arms need at least one participant",
            });
        }
        Ok(())
    }

    pub fn n1(&self) -> u64 {
        self.a + self.b
    }

    pub fn n0(&self) -> u64 {
        self.c + self.d
    }

    pub fn n(&self) -> u64 {
        self.n1() + self.n0()
    }

    /// Event margin.
    pub fn m(&self) -> u64 {
        self.a + self.c
    }

    fn has_zero_cell(&self) -> bool {
        self.a == 0 || self.b == 0 || self.c == 0 || self.d == 0
    }

    fn cells(&self, correct: bool) -> Cells {
        let k = if correct && self.has_zero_cell() { 0.5 } else { 0.0 };
        Cells {
            a: self.a as f64 + k,
            b: self.b as f64 + k,
            c: self.c as f64 + k,
            d: self.d as f64 + k,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Cells {
    a: f64,
    b: f64,
    c: f64,
    d: f64,
}

impl Cells {
    fn n1(&self) -> f64 {
        self.a + self.b
    }
    fn n0(&self) -> f64 {
        self.c + self.d
    }
    fn n(&self) -> f64 {
        self.n1() + self.n0()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyWeight {
    pub study_id: String,
    pub weight: f64,
}

impl StudyWeight {
    pub fn from_vector(v: &WeightVector) -> Vec<StudyWeight> {
        v.studies
            .iter()
            .map(|s| StudyWeight { study_id: s.study_id.clone(), weight: s.w })
            .collect()
    }

    pub fn uniform(tables: &[ContingencyTable]) -> Vec<StudyWeight> {
        let k = tables.len() as f64;
        tables
            .iter()
            .map(|t| StudyWeight { study_id: t.study_id.clone(), weight: 1.0 / k })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoolOptions {
    /// Two-sided confidence level.
    pub level: f64,
    /// Add 0.5 to every cell of tables containing a zero.
    pub continuity_correction: bool,
}

impl Default for PoolOptions {
    fn default() -> Self {
        PoolOptions { level: 0.95, continuity_correction: false }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Treatment,
    Control,
}

#[derive(Debug, Clone, PartialEq)]
pub enum MetaError {
    Empty,
    InvalidTable { study_id: String, reason: &'static str },
    MismatchedIds { expected: String, found: String },
    LengthMismatch { tables: usize, weights: usize },
    InvalidWeight { study_id: String },
    InvalidLevel,
    /// The weighted event sum of one arm is zero.
    ZeroSide(Side),
    Weights(WeightError),
}

impl fmt::Display for MetaError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MetaError::Empty => f.write_str("at least one study is required"),
            MetaError::InvalidTable { study_id, reason } => write!(f, "study `{study_id}`: {reason}"),
            MetaError::MismatchedIds { expected, found } => {
                write!(f, "weight for `{found}` given where `{expected}` was expected")
            }
            MetaError::LengthMismatch { tables, weights } => {
                write!(f, "{tables} tables but {weights} weights")
            }
            MetaError::InvalidWeight { study_id } => {
                write!(f, "weight for `{study_id}` must be positive and finite")
            }
            MetaError::InvalidLevel => f.write_str("confidence level must lie in (0, 1)"),
            MetaError::ZeroSide(side) => {
                let arm = match side {
                    Side::Treatment => "treatment",
                    Side::Control => "control",
                };
                write!(f, "weighted {arm} event total is zero; consider the continuity correction")
            }
            MetaError::Weights(e) => write!(f, "{e}"),
        }
    }
}

impl From<WeightError> for MetaError {
    fn from(e: WeightError) -> Self {
        MetaError::Weights(e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RrStatus {
    Finite,
    /// No treatment events: RR is 0 and only the lower bound (0) is known.
    ZeroTreatment,
    /// No control events: RR is unbounded.
    ZeroControl,
    /// No events in either arm.
    Undefined,
}

/// Per-study risk ratio. Bounds that do not exist are `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyRr {
    pub rr: Option<f64>,
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
    pub status: RrStatus,
}

fn rr_from_cells(x: Cells, z: f64) -> StudyRr {
    match (x.a > 0.0, x.c > 0.0) {
        (true, true) => {
            let rr = (x.a / x.n1()) / (x.c / x.n0());
            let se = libm::sqrt(1.0 / x.a - 1.0 / x.n1() + 1.0 / x.c - 1.0 / x.n0());
            let l = libm::log(rr);
            StudyRr {
                rr: Some(rr),
                ci_low: Some(libm::exp(l - z * se)),
                ci_high: Some(libm::exp(l + z * se)),
                status: RrStatus::Finite,
            }
        }
        (false, true) => StudyRr { rr: Some(0.0), ci_low: Some(0.0), ci_high: None, status: RrStatus::ZeroTreatment },
        (true, false) => StudyRr { rr: None, ci_low: None, ci_high: None, status: RrStatus::ZeroControl },
        (false, false) => StudyRr { rr: None, ci_low: None, ci_high: None, status: RrStatus::Undefined },
    }
}

/// `(a/n1)/(c/n0)` with a log-scale interval, SE = √(1/a − 1/n1 + 1/c − 1/n0).
pub fn per_study_rr(table: &ContingencyTable, options: &PoolOptions) -> Result<StudyRr, MetaError> {
    table.validate()?;
    Ok(rr_from_cells(table.cells(options.continuity_correction), z_for_level(options.level)?))
}

/// Two-sided normal critical value. 0.95 maps to exactly 1.96.
pub fn z_for_level(level: f64) -> Result<f64, MetaError> {
    if !(level > 0.0 && level < 1.0) {
        return Err(MetaError::InvalidLevel);
    }
    if level == 0.95 {
        return Ok(1.96);
    }
    Ok(normal_quantile(0.5 + level / 2.0))
}

/// Acklam's rational approximation to the standard normal quantile
/// (relative error below 1.2e-9 on (0, 1)).
pub fn normal_quantile(p: f64) -> f64 {
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383_577_518_672_69e2,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    const LOW: f64 = 0.02425;
    if p <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }
    if p < LOW {
        let q = libm::sqrt(-2.0 * libm::log(p));
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        -normal_quantile(1.0 - p)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PooledStudy {
    pub study_id: String,
    pub weight: f64,
    #[serde(flatten)]
    pub rr: StudyRr,
    pub display_weight_percent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PooledEstimate {
    pub theta_hat: f64,
    pub log_theta: f64,
    pub variance: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub level: f64,
    pub z: f64,
    pub a_w: f64,
    pub c_w: f64,
    pub studies: Vec<PooledStudy>,
    /// Studies whose cells received the 0.5 correction.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub continuity_corrected: Vec<String>,
}

fn check_aligned(tables: &[ContingencyTable], weights: &[StudyWeight]) -> Result<(), MetaError> {
    if tables.is_empty() {
        return Err(MetaError::Empty);
    }
    if tables.len() != weights.len() {
        return Err(MetaError::LengthMismatch { tables: tables.len(), weights: weights.len() });
    }
    for (t, w) in tables.iter().zip(weights) {
        t.validate()?;
        if t.study_id != w.study_id {
            return Err(MetaError::MismatchedIds { expected: t.study_id.clone(), found: w.study_id.clone() });
        }
        if !(w.weight.is_finite() && w.weight > 0.0) {
            return Err(MetaError::InvalidWeight { study_id: w.study_id.clone() });
        }
    }
    Ok(())
}

fn display_from_cells(cells: &[Cells], weights: &[StudyWeight]) -> Result<Vec<f64>, MetaError> {
    let parts: Vec<f64> = cells
        .iter()
        .zip(weights)
        .map(|(x, w)| w.weight * x.c * x.n1() / x.n())
        .collect();
    let total: f64 = parts.iter().sum();
    if total <= 0.0 {
        return Err(MetaError::ZeroSide(Side::Control));
    }
    Ok(parts.iter().map(|p| 100.0 * p / total).collect())
}

/// Percent contribution ∝ `w·c·n1/n`; uniform weights give the classical
/// MH display weights.
pub fn display_weights(tables: &[ContingencyTable], weights: &[StudyWeight]) -> Result<Vec<f64>, MetaError> {
    check_aligned(tables, weights)?;
    let cells: Vec<Cells> = tables.iter().map(|t| t.cells(false)).collect();
    display_from_cells(&cells, weights)
}

/// Eligibility-weighted Mantel-Haenszel risk ratio.
///
/// `A_w = Σ w·a·n0/n`, `C_w = Σ w·c·n1/n`, `θ = A_w/C_w`,
/// `Var(ln θ) = Σ w²(a+d)bc/n² / (2·A_w·C_w)`. Weights need not sum to 1;
/// any common factor cancels.
pub fn pool_ew_mh(
    tables: &[ContingencyTable],
    weights: &[StudyWeight],
    options: &PoolOptions,
) -> Result<PooledEstimate, MetaError> {
    check_aligned(tables, weights)?;
    let z = z_for_level(options.level)?;
    let cells: Vec<Cells> = tables.iter().map(|t| t.cells(options.continuity_correction)).collect();
    let corrected: Vec<String> = if options.continuity_correction {
        tables.iter().filter(|t| t.has_zero_cell()).map(|t| t.study_id.clone()).collect()
    } else {
        Vec::new()
    };

    let mut a_w = 0.0;
    let mut c_w = 0.0;
    let mut var_num = 0.0;
    for (x, w) in cells.iter().zip(weights) {
        let n = x.n();
        a_w += w.weight * x.a * x.n0() / n;
        c_w += w.weight * x.c * x.n1() / n;
        var_num += w.weight * w.weight * (x.a + x.d) * x.b * x.c / (n * n);
    }
    if a_w <= 0.0 {
        return Err(MetaError::ZeroSide(Side::Treatment));
    }
    if c_w <= 0.0 {
        return Err(MetaError::ZeroSide(Side::Control));
    }
    let theta_hat = a_w / c_w;
    let log_theta = libm::log(theta_hat);
    let variance = var_num / (2.0 * a_w * c_w);
    let half = z * libm::sqrt(variance);
    let display = display_from_cells(&cells, weights)?;
    let studies = tables
        .iter()
        .zip(weights)
        .zip(cells.iter().zip(display))
        .map(|((t, w), (x, d))| PooledStudy {
            study_id: t.study_id.clone(),
            weight: w.weight,
            rr: rr_from_cells(*x, z),
            display_weight_percent: d,
        })
        .collect();
    Ok(PooledEstimate {
        theta_hat,
        log_theta,
        variance,
        ci_low: libm::exp(log_theta - half),
        ci_high: libm::exp(log_theta + half),
        level: options.level,
        z,
        a_w,
        c_w,
        studies,
        continuity_corrected: corrected,
    })
}

/// Classical MH: [`pool_ew_mh`] with equal weights.
pub fn pool_classical_mh(tables: &[ContingencyTable], options: &PoolOptions) -> Result<PooledEstimate, MetaError> {
    pool_ew_mh(tables, &StudyWeight::uniform(tables), options)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub params: WeightParams,
    pub weights: WeightVector,
    pub estimate: PooledEstimate,
}

/// Cartesian grid in (gamma, floor, mode) order, gamma varying slowest.
pub fn sweep_grid(gammas: &[f64], floors: &[f64], modes: &[crate::weights::PmaxMode]) -> Vec<WeightParams> {
    let mut out = Vec::with_capacity(gammas.len() * floors.len() * modes.len());
    for &gamma in gammas {
        for &floor in floors {
            for &pmax_mode in modes {
                out.push(WeightParams { gamma, floor, pmax_mode, explicit_pmax: None });
            }
        }
    }
    out
}

/// Recomputes weights and the pooled estimate at every grid point, in grid
/// order. `penalties` must follow the table order.
pub fn sensitivity_sweep(
    tables: &[ContingencyTable],
    penalties: &[(String, f64)],
    attainable_total: f64,
    grid: &[WeightParams],
    options: &PoolOptions,
) -> Result<Vec<SweepPoint>, MetaError> {
    grid.iter()
        .map(|params| {
            let weights = compute_weights(penalties, params, attainable_total)?;
            let estimate = pool_ew_mh(tables, &StudyWeight::from_vector(&weights), options)?;
            Ok(SweepPoint { params: *params, weights, estimate })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestRow {
    pub study_id: String,
    #[serde(flatten)]
    pub rr: StudyRr,
    pub weight_classical_percent: f64,
    pub weight_weighted_percent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PooledRow {
    pub theta_hat: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

impl From<&PooledEstimate> for PooledRow {
    fn from(e: &PooledEstimate) -> Self {
        PooledRow { theta_hat: e.theta_hat, ci_low: e.ci_low, ci_high: e.ci_high }
    }
}

/// Side-by-side forest plot data for a classical and a weighted analysis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestData {
    pub level: f64,
    pub rows: Vec<ForestRow>,
    pub pooled_classical: PooledRow,
    pub pooled_weighted: PooledRow,
}

pub fn forest_data(classical: &PooledEstimate, weighted: &PooledEstimate) -> Result<ForestData, MetaError> {
    if classical.studies.len() != weighted.studies.len() {
        return Err(MetaError::LengthMismatch {
            tables: classical.studies.len(),
            weights: weighted.studies.len(),
        });
    }
    let rows = classical
        .studies
        .iter()
        .zip(&weighted.studies)
        .map(|(c, w)| {
            if c.study_id != w.study_id {
                return Err(MetaError::MismatchedIds { expected: c.study_id.clone(), found: w.study_id.clone() });
            }
            Ok(ForestRow {
                study_id: c.study_id.clone(),
                rr: c.rr.clone(),
                weight_classical_percent: c.display_weight_percent,
                weight_weighted_percent: w.display_weight_percent,
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(ForestData {
        level: classical.level,
        rows,
        pooled_classical: classical.into(),
        pooled_weighted: weighted.into(),
    })
}

impl core::error::Error for MetaError {}
