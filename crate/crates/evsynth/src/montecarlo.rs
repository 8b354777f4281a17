//! Seeded simulation of the weighted estimator under a common true risk
//! ratio. Error should shrink as arm sizes grow.

use evsynth_core::meta::{pool_ew_mh, MetaError, PoolOptions};
use evsynth_core::{ContingencyTable, StudyWeight};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationConfig {
    pub seed: u64,
    /// True risk ratio shared by every study.
    pub theta: f64,
    /// Control-arm risk per study; `theta * p0` must stay below 1.
    pub control_risks: Vec<f64>,
    /// Study weights, aligned with `control_risks`.
    pub weights: Vec<f64>,
    /// Per-arm sample sizes to compare.
    pub arm_sizes: Vec<u64>,
    pub replicates: usize,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        SimulationConfig {
            seed: 20240501,
            theta: 2.0,
            control_risks: vec![0.10, 0.15, 0.20, 0.25],
            weights: vec![0.5207, 0.1323, 0.2147, 0.1323],
            arm_sizes: vec![100, 1_000, 10_000],
            replicates: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeSummary {
    pub arm_size: u64,
    pub replicates: usize,
    /// Replicates with an all-zero arm, left out of the means.
    pub degenerate: usize,
    pub mean_estimate: f64,
    pub mean_absolute_error: f64,
    /// Share of intervals containing the true ratio.
    pub coverage: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationReport {
    pub config: SimulationConfig,
    pub sizes: Vec<SizeSummary>,
}

impl SimulationReport {
    pub fn mae_strictly_decreasing(&self) -> bool {
        self.sizes.windows(2).all(|w| w[1].mean_absolute_error < w[0].mean_absolute_error)
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum SimulationError {
    #[error("control risks and weights differ in length")]
    LengthMismatch,
    #[error("risk {0} is outside (0, 1) after applying theta")]
    InvalidRisk(f64),
    #[error("at least one replicate and one arm size are required")]
    Empty,
}

/// Each arm size draws from its own stream, seeded from `seed` and the size,
/// so adding a size does not change the others.
pub fn simulate(config: &SimulationConfig) -> Result<SimulationReport, SimulationError> {
    if config.control_risks.len() != config.weights.len() {
        return Err(SimulationError::LengthMismatch);
    }
    if config.replicates == 0 || config.arm_sizes.is_empty() || config.control_risks.is_empty() {
        return Err(SimulationError::Empty);
    }
    for &p0 in &config.control_risks {
        let p1 = p0 * config.theta;
        if !(p0 > 0.0 && p1 > 0.0 && p0 < 1.0 && p1 < 1.0) {
            return Err(SimulationError::InvalidRisk(if p0 > 0.0 && p0 < 1.0 { p1 } else { p0 }));
        }
    }
    let weights: Vec<StudyWeight> = config
        .weights
        .iter()
        .enumerate()
        .map(|(i, &w)| StudyWeight { study_id: format!("s{}", i + 1), weight: w })
        .collect();
    let options = PoolOptions::default();
    let mut sizes = Vec::with_capacity(config.arm_sizes.len());
    for &n in &config.arm_sizes {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ n.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let treat: Vec<Binomial> =
            config.control_risks.iter().map(|p0| Binomial::new(n, p0 * config.theta).expect("risk checked")).collect();
        let control: Vec<Binomial> =
            config.control_risks.iter().map(|&p0| Binomial::new(n, p0).expect("risk checked")).collect();
        let (mut sum_est, mut sum_err, mut covered, mut used, mut degenerate) = (0.0, 0.0, 0usize, 0usize, 0usize);
        for _ in 0..config.replicates {
            let tables: Vec<ContingencyTable> = weights
                .iter()
                .zip(treat.iter().zip(&control))
                .map(|(w, (t, c))| {
                    let a = t.sample(&mut rng);
                    let cc = c.sample(&mut rng);
                    ContingencyTable::from_arms(&w.study_id, a, n, cc, n).expect("draws never exceed n")
                })
                .collect();
            match pool_ew_mh(&tables, &weights, &options) {
                Ok(est) => {
                    used += 1;
                    sum_est += est.theta_hat;
                    sum_err += (est.theta_hat - config.theta).abs();
                    if est.ci_low <= config.theta && config.theta <= est.ci_high {
                        covered += 1;
                    }
                }
                Err(MetaError::ZeroSide(_)) => degenerate += 1,
                Err(e) => unreachable!("simulated tables are valid: {e}"),
            }
        }
        let denom = used.max(1) as f64;
        sizes.push(SizeSummary {
            arm_size: n,
            replicates: config.replicates,
            degenerate,
            mean_estimate: sum_est / denom,
            mean_absolute_error: sum_err / denom,
            coverage: covered as f64 / denom,
        });
    }
    Ok(SimulationReport { config: config.clone(), sizes })
}
