//! Filter regression and the bi-phase inverse problems.

mod estimate;
mod filter;
mod optimizer;

use serde::{Deserialize, Serialize};

use crate::element_kernels::MaterialParams;
use crate::error::{Error, Result};

pub use estimate::{
    estimate_joint, estimate_phase, estimate_properties, two_cluster_threshold, FitReport, JointEstimate,
    JointOptions, PhaseEstimate, PhaseOptions, PropertyEstimate, PropertyOptions, E_SCALE,
};
pub use filter::{check_loading_rank, fit_filter_iterative, fit_multiphysics_filter, RankReport, RANK_TOLERANCE};
pub use optimizer::{minimize, Method, OptimizerState, Outcome, Status, StopRule};

/// Normalization of the interior squared mismatch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LossNorm {
    /// Mean over interior entries; learning rates transfer across resolutions.
    #[default]
    Mean,
    /// Plain sum of squares.
    Sum,
}

/// Box constraints on `(E, ν)`, shared by both phases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RhoBounds {
    pub e: (f64, f64),
    pub nu: (f64, f64),
}

impl Default for RhoBounds {
    fn default() -> Self {
        Self { e: (1e6, 0.5e12), nu: (1e-6, 0.5 - 1e-6) }
    }
}

impl RhoBounds {
    pub fn validate(&self) -> Result<()> {
        for (name, (lo, hi)) in [("E", self.e), ("nu", self.nu)] {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(Error::Validation(format!("{name} bounds need lower < upper, got [{lo}, {hi}]")));
            }
        }
        if self.e.0 <= 0.0 || self.nu.0 <= 0.0 || self.nu.1 >= 0.5 {
            return Err(Error::Validation("bounds must keep E > 0 and 0 < nu < 0.5".into()));
        }
        Ok(())
    }
}

/// Clamps `E` and `ν` into the box; other fields pass through.
pub fn clip_rho(rho: &MaterialParams, bounds: &RhoBounds) -> MaterialParams {
    MaterialParams {
        e: rho.e.map(|e| e.clamp(bounds.e.0, bounds.e.1)),
        nu: rho.nu.map(|nu| nu.clamp(bounds.nu.0, bounds.nu.1)),
        ..*rho
    }
}

/// `|pred - reference|₂ / |reference|₂`.
pub fn relative_error(pred: &[f64], reference: &[f64]) -> Result<f64> {
    if pred.len() != reference.len() {
        return Err(Error::Shape(format!("lengths differ: {} vs {}", pred.len(), reference.len())));
    }
    let den = reference.iter().map(|r| r * r).sum::<f64>().sqrt();
    if den == 0.0 {
        return Err(Error::Validation("relative error against a zero reference".into()));
    }
    let num = pred.iter().zip(reference).map(|(p, r)| (p - r) * (p - r)).sum::<f64>().sqrt();
    Ok(num / den)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clip_inside_is_identity() {
        let rho = MaterialParams::elastic(0.2e12, 0.25);
        assert_eq!(clip_rho(&rho, &RhoBounds::default()), rho);
    }

    #[test]
    fn clip_caps_modulus() {
        let rho = clip_rho(&MaterialParams::elastic(0.9e12, 0.7), &RhoBounds::default());
        assert_eq!(rho.e, Some(0.5e12));
        assert_eq!(rho.nu, Some(0.5 - 1e-6));
    }

    #[test]
    fn relative_error_cases() {
        assert_eq!(relative_error(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert!((relative_error(&[3.0, 0.0], &[3.0, 4.0]).unwrap() - 0.8).abs() < 1e-15);
        assert!(relative_error(&[1.0], &[0.0]).is_err());
        assert!(relative_error(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn bounds_validation() {
        assert!(RhoBounds::default().validate().is_ok());
        assert!(RhoBounds { e: (1.0, 1.0), ..Default::default() }.validate().is_err());
        assert!(RhoBounds { nu: (0.1, 0.6), ..Default::default() }.validate().is_err());
    }
}
