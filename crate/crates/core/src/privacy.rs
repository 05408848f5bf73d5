//! Rényi-DP accounting for Gaussian-masked, sparsified gradient releases.
//!
//! Each iteration is a (subsampled) Gaussian mechanism whose Rényi budget at a
//! fixed order `alpha` is computed in closed form. Budgets compose additively
//! over iterations and are converted to `(epsilon, delta)`-DP with
//! `epsilon = rho + ln(1/delta) / (alpha - 1)`.
//!
//! Two release orderings are covered:
//!
//! * mask-then-sparsify (the default engine): the expected per-iteration
//!   budget is `4 alpha p (tau G / (m sigma))^2`;
//! * sparsify-then-mask: amplification by `1/p` inflates the sensitivity and
//!   the expected budget becomes `4 alpha (tau G)^2 / (m^2 sigma^2 p)`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Smallest noise variance for which the subsampled Gaussian bound applies.
pub const SIGMA2_FLOOR: f64 = 1.0 / 1.25;

#[derive(Debug, Error, PartialEq)]
pub enum PrivacyError {
    #[error("{name} out of domain: {value}")]
    Domain { name: &'static str, value: f64 },
    #[error("noise variance {sigma2} is below the subsampling floor {SIGMA2_FLOOR}")]
    SigmaFloorViolation { sigma2: f64 },
}

fn domain(name: &'static str, value: f64) -> PrivacyError {
    PrivacyError::Domain { name, value }
}

/// How the Rényi order is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AlphaRule {
    /// `alpha = 2 ln(1/delta) / epsilon + 1`.
    #[default]
    PlusOne,
    /// `alpha = 2 ln(1/delta) / epsilon - 1`.
    MinusOne,
    Fixed(f64),
}

/// Expected-case accounting multiplies by the mean active-set fraction;
/// worst case assumes every coordinate is released.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Accounting {
    #[default]
    Expected,
    WorstCase,
}

/// Which release ordering is being accounted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Release {
    MaskThenSparsify,
    SparsifyThenMask,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrivacyParams {
    /// Per-coordinate Gaussian variance.
    pub sigma2: f64,
    /// Subsampling rate.
    pub tau: f64,
    /// l2 gradient bound `G`.
    pub sensitivity_g: f64,
    /// Local samples per node.
    pub local_samples_m: u64,
    pub transmit_prob_p: f64,
    pub delta: f64,
    pub epsilon_target: f64,
    #[serde(default)]
    pub alpha_rule: AlphaRule,
    #[serde(default)]
    pub accounting: Accounting,
}

impl PrivacyParams {
    pub fn validate(&self) -> Result<(), PrivacyError> {
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(domain("delta", self.delta));
        }
        if !(self.epsilon_target > 0.0 && self.epsilon_target.is_finite()) {
            return Err(domain("epsilon", self.epsilon_target));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(domain("tau", self.tau));
        }
        if !(self.transmit_prob_p > 0.0 && self.transmit_prob_p <= 1.0) {
            return Err(domain("transmit probability", self.transmit_prob_p));
        }
        if !(self.sensitivity_g >= 0.0 && self.sensitivity_g.is_finite()) {
            return Err(domain("G", self.sensitivity_g));
        }
        if self.local_samples_m == 0 {
            return Err(domain("m", 0.0));
        }
        if !(self.sigma2 >= 0.0) {
            return Err(domain("sigma2", self.sigma2));
        }
        Ok(())
    }

    pub fn alpha(&self) -> Result<f64, PrivacyError> {
        let alpha = match self.alpha_rule {
            AlphaRule::PlusOne => 2.0 * (1.0 / self.delta).ln() / self.epsilon_target + 1.0,
            AlphaRule::MinusOne => 2.0 * (1.0 / self.delta).ln() / self.epsilon_target - 1.0,
            AlphaRule::Fixed(a) => a,
        };
        if alpha > 1.0 {
            Ok(alpha)
        } else {
            Err(domain("alpha", alpha))
        }
    }

    /// Squared l2 sensitivity of one node's released query, normalised by the
    /// step size (which cancels against the `gamma sigma` noise scale).
    fn sensitivity_sq(&self, release: Release) -> f64 {
        let p = self.transmit_prob_p;
        let m = self.local_samples_m as f64;
        let base = 4.0 * self.sensitivity_g * self.sensitivity_g / (m * m);
        // active fraction |C1| / d: p in expectation, 1 in the worst case
        let fraction = match self.accounting {
            Accounting::Expected => p,
            Accounting::WorstCase => 1.0,
        };
        match release {
            Release::MaskThenSparsify => base * fraction,
            Release::SparsifyThenMask => base * fraction / (p * p),
        }
    }

    /// Per-iteration Rényi budget without the noise-floor check.
    pub fn step_rho_unchecked(&self, release: Release) -> Result<f64, PrivacyError> {
        self.validate()?;
        let alpha = self.alpha()?;
        Ok(alpha * self.tau * self.tau * self.sensitivity_sq(release) / self.sigma2)
    }

    pub fn step_rho(&self, release: Release) -> Result<f64, PrivacyError> {
        if self.sigma2 < SIGMA2_FLOOR {
            return Err(PrivacyError::SigmaFloorViolation { sigma2: self.sigma2 });
        }
        self.step_rho_unchecked(release)
    }
}

/// RDP of the Gaussian mechanism: `alpha Δ^2 / (2 sigma^2)`.
pub fn gaussian_rdp(alpha: f64, sensitivity: f64, sigma2: f64) -> Result<f64, PrivacyError> {
    if !(alpha > 1.0) {
        return Err(domain("alpha", alpha));
    }
    if !(sigma2 > 0.0) {
        return Err(domain("sigma2", sigma2));
    }
    Ok(alpha * sensitivity * sensitivity / (2.0 * sigma2))
}

/// RDP of the Gaussian mechanism on a uniformly subsampled batch:
/// `alpha tau^2 Δ^2 / sigma^2`, valid for `sigma^2 >= 1/1.25`.
pub fn subsampled_gaussian_rdp(alpha: f64, sensitivity: f64, sigma2: f64, tau: f64) -> Result<f64, PrivacyError> {
    if !(alpha > 1.0) {
        return Err(domain("alpha", alpha));
    }
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(domain("tau", tau));
    }
    if !(sigma2 >= SIGMA2_FLOOR) {
        return Err(PrivacyError::SigmaFloorViolation { sigma2 });
    }
    Ok(alpha * tau * tau * sensitivity * sensitivity / sigma2)
}

/// `(alpha, rho)`-RDP implies `(rho + ln(1/delta)/(alpha - 1), delta)`-DP.
pub fn rdp_to_dp(alpha: f64, rho: f64, delta: f64) -> Result<f64, PrivacyError> {
    if !(alpha > 1.0) {
        return Err(domain("alpha", alpha));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(domain("delta", delta));
    }
    if !(rho >= 0.0) {
        return Err(domain("rho", rho));
    }
    Ok(rho + (1.0 / delta).ln() / (alpha - 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DpGuarantee {
    pub epsilon: f64,
    pub delta: f64,
}

fn composed_guarantee(params: &PrivacyParams, iterations: u64, release: Release) -> Result<DpGuarantee, PrivacyError> {
    let step = params.step_rho(release)?;
    let alpha = params.alpha()?;
    let epsilon = rdp_to_dp(alpha, iterations as f64 * step, params.delta)?;
    Ok(DpGuarantee {
        epsilon,
        delta: params.delta,
    })
}

/// Expected `(epsilon, delta)` after `iterations` rounds of the
/// mask-then-sparsify engine.
pub fn sdm_dsgd_epsilon(params: &PrivacyParams, iterations: u64) -> Result<DpGuarantee, PrivacyError> {
    composed_guarantee(params, iterations, Release::MaskThenSparsify)
}

/// Expected `(epsilon, delta)` for the sparsify-then-mask ordering.
pub fn alternative_design_epsilon(params: &PrivacyParams, iterations: u64) -> Result<DpGuarantee, PrivacyError> {
    composed_guarantee(params, iterations, Release::SparsifyThenMask)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CalibrationStatus {
    Valid,
    /// The calibrated variance sits below the subsampling floor, so the DP
    /// claim does not hold.
    SigmaBelowFloor,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Calibration {
    pub sigma2: f64,
    pub status: CalibrationStatus,
}

impl Calibration {
    pub fn is_valid(&self) -> bool {
        self.status == CalibrationStatus::Valid
    }

    /// The parameters this calibration assumes: the calibrated variance and a
    /// one-sample-per-node subsampling rate `tau = 1/m`.
    pub fn apply(&self, params: &PrivacyParams) -> PrivacyParams {
        PrivacyParams {
            sigma2: self.sigma2,
            tau: 1.0 / params.local_samples_m as f64,
            ..*params
        }
    }
}

/// Noise variance reaching `epsilon_target` after `iterations` rounds with
/// `tau = 1/m`: `sigma^2 = 8 p T G^2 (2 ln(1/delta) + epsilon) / (m^4 epsilon^2)`.
pub fn calibrate_sigma(params: &PrivacyParams, iterations: u64) -> Result<Calibration, PrivacyError> {
    params.validate()?;
    if iterations == 0 {
        return Err(domain("T", 0.0));
    }
    let m = params.local_samples_m as f64;
    let eps = params.epsilon_target;
    let g = params.sensitivity_g;
    let sigma2 = 8.0 * params.transmit_prob_p * iterations as f64 * g * g * (2.0 * (1.0 / params.delta).ln() + eps)
        / (m.powi(4) * eps * eps);
    let status = if sigma2 >= SIGMA2_FLOOR {
        CalibrationStatus::Valid
    } else {
        CalibrationStatus::SigmaBelowFloor
    };
    Ok(Calibration { sigma2, status })
}

/// Iteration budget of the training/privacy trade-off,
/// `floor(m^4 epsilon^2 / (20 G^2 ln(1/delta) p))`.
pub fn max_iterations(params: &PrivacyParams) -> Result<u64, PrivacyError> {
    params.validate()?;
    if params.sensitivity_g <= 0.0 {
        return Err(domain("G", params.sensitivity_g));
    }
    let m = params.local_samples_m as f64;
    let eps = params.epsilon_target;
    let g = params.sensitivity_g;
    let t = m.powi(4) * eps * eps / (20.0 * g * g * (1.0 / params.delta).ln() * params.transmit_prob_p);
    Ok(t.floor() as u64)
}

/// l2 sensitivity of one released differential.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sensitivity {
    /// `2 gamma G / m`, every coordinate active.
    pub worst_case: f64,
    /// `sqrt(p)`; scales the worst case to the expected active-set size.
    pub expected_multiplier: f64,
}

impl Sensitivity {
    pub fn expected(&self) -> f64 {
        self.worst_case * self.expected_multiplier
    }
}

pub fn per_iteration_sensitivity(gamma: f64, g: f64, m: u64, p: f64) -> Result<Sensitivity, PrivacyError> {
    if m == 0 {
        return Err(domain("m", 0.0));
    }
    if !(p > 0.0 && p <= 1.0) {
        return Err(domain("transmit probability", p));
    }
    Ok(Sensitivity {
        worst_case: 2.0 * gamma * g / m as f64,
        expected_multiplier: p.sqrt(),
    })
}

/// Append-only Rényi budget at a fixed order.
///
/// Consecutive identical per-step budgets are run-length encoded, so composing
/// `T` copies of `rho` yields exactly `T * rho`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrivacyLedger {
    alpha: f64,
    runs: Vec<(f64, u64)>,
    iterations: u64,
}

impl PrivacyLedger {
    pub fn new(alpha: f64) -> Result<Self, PrivacyError> {
        if !(alpha > 1.0) {
            return Err(domain("alpha", alpha));
        }
        Ok(Self {
            alpha,
            runs: Vec::new(),
            iterations: 0,
        })
    }

    pub fn compose(&mut self, rho: f64) -> Result<(), PrivacyError> {
        self.compose_many(rho, 1)
    }

    pub fn compose_many(&mut self, rho: f64, count: u64) -> Result<(), PrivacyError> {
        if !(rho >= 0.0) {
            return Err(domain("rho", rho));
        }
        if count == 0 {
            return Ok(());
        }
        match self.runs.last_mut() {
            Some((last, n)) if *last == rho => *n += count,
            _ => self.runs.push((rho, count)),
        }
        self.iterations += count;
        Ok(())
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn iterations(&self) -> u64 {
        self.iterations
    }

    pub fn rho(&self) -> f64 {
        self.runs.iter().map(|&(rho, n)| n as f64 * rho).sum()
    }

    pub fn epsilon(&self, delta: f64) -> Result<f64, PrivacyError> {
        rdp_to_dp(self.alpha, self.rho(), delta)
    }
}
