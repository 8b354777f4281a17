//! Penalty-to-weight transform with an exponential decay and a floor.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PmaxMode {
    /// Sum of every rule's severity: the largest penalty any study could get.
    #[default]
    Attainable,
    /// Largest penalty among the studies being weighted.
    Observed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightParams {
    pub gamma: f64,
    pub floor: f64,
    #[serde(default)]
    pub pmax_mode: PmaxMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub explicit_pmax: Option<f64>,
}

impl Default for WeightParams {
    fn default() -> Self {
        WeightParams {
            gamma: 0.5,
            floor: 20.0,
            pmax_mode: PmaxMode::Attainable,
            explicit_pmax: None,
        }
    }
}

impl WeightParams {
    pub fn validate(&self) -> Result<(), WeightError> {
        if !(self.gamma.is_finite() && self.gamma > 0.0) {
            return Err(WeightError::InvalidParams("gamma must be a positive finite number"));
        }
        if !(self.floor > 0.0 && self.floor <= 100.0) {
            return Err(WeightError::InvalidParams("floor must lie in (0, 100]"));
        }
        if let Some(p) = self.explicit_pmax {
            if !(p.is_finite() && p > 0.0) {
                return Err(WeightError::InvalidParams("explicit_pmax must be a positive finite number"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedStudy {
    pub study_id: String,
    /// Total penalty.
    pub p: f64,
    /// Compatibility in [0, 1].
    pub f: f64,
    /// Floored score in [floor, 100].
    pub s: f64,
    /// Normalised weight.
    pub w: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "warning", rename_all = "kebab-case")]
pub enum WeightWarning {
    PenaltyAbovePmax { study_id: String, p: f64, pmax: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightVector {
    pub studies: Vec<WeightedStudy>,
    pub params: WeightParams,
    /// P_max after resolving mode and override.
    pub pmax: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<WeightWarning>,
}

impl WeightVector {
    pub fn weights(&self) -> Vec<f64> {
        self.studies.iter().map(|s| s.w).collect()
    }

    pub fn ids(&self) -> Vec<&str> {
        self.studies.iter().map(|s| s.study_id.as_str()).collect()
    }

    /// Equal weights 1/k with p = 0, f = 1, S = 100.
    pub fn uniform<S: AsRef<str>>(ids: &[S]) -> Result<WeightVector, WeightError> {
        let zeros: Vec<(String, f64)> = ids.iter().map(|i| (String::from(i.as_ref()), 0.0)).collect();
        compute_weights(&zeros, &WeightParams::default(), 0.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum WeightError {
    Empty,
    InvalidParams(&'static str),
    NegativePenalty { study_id: String },
    NonFinitePenalty { study_id: String },
    /// P_max resolved to 0 while some penalty is positive.
    ZeroPmax,
}

impl fmt::Display for WeightError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            WeightError::Empty => f.write_str("at least one study is required"),
            WeightError::InvalidParams(m) => f.write_str(m),
            WeightError::NegativePenalty { study_id } => write!(f, "negative penalty for study `{study_id}`"),
            WeightError::NonFinitePenalty { study_id } => write!(f, "non-finite penalty for study `{study_id}`"),
            WeightError::ZeroPmax => f.write_str("P_max resolved to 0 but some penalty is positive"),
        }
    }
}

/// Resolves P_max: explicit override, else the mode's value.
pub fn resolve_pmax(penalties: &[(String, f64)], params: &WeightParams, attainable_total: f64) -> f64 {
    if let Some(p) = params.explicit_pmax {
        return p;
    }
    match params.pmax_mode {
        PmaxMode::Attainable => attainable_total,
        PmaxMode::Observed => penalties.iter().fold(0.0, |m, (_, p)| if *p > m { *p } else { m }),
    }
}

/// `f = (e^{-γp} - e^{-γP}) / (1 - e^{-γP})`, clamped to [0, 1].
pub fn compatibility(p: f64, gamma: f64, pmax: f64) -> f64 {
    if p <= 0.0 || pmax <= 0.0 {
        return 1.0;
    }
    if p >= pmax {
        return 0.0;
    }
    let tail = libm::exp(-gamma * pmax);
    let f = (libm::exp(-gamma * p) - tail) / (1.0 - tail);
    f.clamp(0.0, 1.0)
}

/// Maps penalties to normalised weights, in input order.
///
/// `attainable_total` is the sum of all rule severities and is used when the
/// mode is [`PmaxMode::Attainable`] and no explicit P_max is given.
pub fn compute_weights(
    penalties: &[(String, f64)],
    params: &WeightParams,
    attainable_total: f64,
) -> Result<WeightVector, WeightError> {
    params.validate()?;
    if penalties.is_empty() {
        return Err(WeightError::Empty);
    }
    for (id, p) in penalties {
        if !p.is_finite() {
            return Err(WeightError::NonFinitePenalty { study_id: id.clone() });
        }
        if *p < 0.0 {
            return Err(WeightError::NegativePenalty { study_id: id.clone() });
        }
    }
    let pmax = resolve_pmax(penalties, params, attainable_total);
    if !(pmax.is_finite() && pmax >= 0.0) {
        return Err(WeightError::InvalidParams("attainable penalty total must be finite and non-negative"));
    }
    if pmax == 0.0 && penalties.iter().any(|(_, p)| *p > 0.0) {
        return Err(WeightError::ZeroPmax);
    }
    let mut warnings = Vec::new();
    let mut studies = Vec::with_capacity(penalties.len());
    let mut total = 0.0;
    for (id, p) in penalties {
        if *p > pmax {
            warnings.push(WeightWarning::PenaltyAbovePmax { study_id: id.clone(), p: *p, pmax });
        }
        let f = compatibility(*p, params.gamma, pmax);
        let s = params.floor + (100.0 - params.floor) * f;
        total += s;
        studies.push(WeightedStudy { study_id: id.clone(), p: *p, f, s, w: 0.0 });
    }
    for st in &mut studies {
        st.w = st.s / total;
    }
    Ok(WeightVector { studies, params: *params, pmax, warnings })
}

impl core::error::Error for WeightError {}
