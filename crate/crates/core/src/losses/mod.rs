//! Loss terms and their weighted composition.

mod objective;
mod terms;
mod vat;

pub use objective::{needs_prototypes, total_loss, LossBreakdown, LossContext, Objective, Stage};
pub use terms::{
    anchor_boundary, anchor_magnitude, anchor_triplet, consistency, cross_entropy, divergence, entropy_min,
    enumerate_triplets, kl_rows, pseudo_label, TripletSample, PROB_FLOOR,
};
pub use vat::vat_direction;

use crate::error::{Error, Result};

/// Weights of the consistency, entropy, anchor, divergence and prototype
/// classification terms.
#[derive(Clone, Debug, PartialEq)]
pub struct LossWeights {
    pub consistency: f64,
    pub entropy: f64,
    pub anchor: f64,
    pub divergence: f64,
    pub proto_clf: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            consistency: 1.0,
            entropy: 0.1,
            anchor: 1.0,
            divergence: 1.0,
            proto_clf: 0.1,
        }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        Self {
            consistency: 0.0,
            entropy: 0.0,
            anchor: 0.0,
            divergence: 0.0,
            proto_clf: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.consistency, self.entropy, self.anchor, self.divergence, self.proto_clf];
        if all.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(Error::config(format!("loss weights must be finite and >= 0: {self:?}")));
        }
        Ok(())
    }

    pub fn uses_prototypes(&self) -> bool {
        self.anchor > 0.0 || self.divergence > 0.0 || self.proto_clf > 0.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Margins {
    /// Tolerance on center length relative to the mean feature length.
    pub magnitude: f64,
    /// Triplet margin on cosine similarity.
    pub angle: f64,
    /// Divergence threshold; must be below 1.
    pub divergence: f64,
}

impl Default for Margins {
    fn default() -> Self {
        Self {
            magnitude: 0.1,
            angle: 0.15,
            divergence: 0.75,
        }
    }
}

impl Margins {
    pub fn validate(&self) -> Result<()> {
        if !(self.magnitude >= 0.0) || !(self.angle >= 0.0) {
            return Err(Error::config("margins must be >= 0"));
        }
        if !(0.0..1.0).contains(&self.divergence) {
            return Err(Error::config(format!(
                "divergence margin {} must lie in [0, 1)",
                self.divergence
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VatConfig {
    /// Length of the adversarial perturbation.
    pub eps: f64,
    /// Probe scale for the power iteration.
    pub xi: f64,
    pub power_iters: usize,
}

impl Default for VatConfig {
    fn default() -> Self {
        Self {
            eps: 0.5,
            xi: 1e-6,
            power_iters: 1,
        }
    }
}

impl VatConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0) || !(self.xi > 0.0) {
            return Err(Error::config("vat eps and xi must be > 0"));
        }
        Ok(())
    }
}
