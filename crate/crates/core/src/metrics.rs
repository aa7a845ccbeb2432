//! Distances between 2D Gaussians used for the ellipse residual and for
//! object association.

use nalgebra::Matrix2;
use serde::{Deserialize, Serialize};

use crate::geometry::{sqrtm_spd2, Gaussian2D};

/// Covariance term of the squared 2-Wasserstein distance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WassersteinForm {
    /// `‖Σ₁^½ − Σ₂^½‖²_F`.
    #[default]
    Frobenius,
    /// `Tr(Σ₁ + Σ₂ − 2 (Σ₁^½ Σ₂ Σ₁^½)^½)`, the classical Bures term.
    BuresTrace,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricConfig {
    /// Normalization constant in pixels.
    pub c_norm: f64,
    pub wasserstein_form: WassersteinForm,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self { c_norm: 10.0, wasserstein_form: WassersteinForm::Frobenius }
    }
}

impl MetricConfig {
    pub fn is_valid(&self) -> bool {
        self.c_norm > 0.0 && self.c_norm.is_finite()
    }
}

/// Square root of a covariance that is already known to be SPD.
fn sqrt_cov(m: &Matrix2<f64>) -> Matrix2<f64> {
    sqrtm_spd2(m).expect("Gaussian2D covariance is SPD by construction")
}

/// Squared 2-Wasserstein distance between two Gaussians (pixels²).
pub fn wasserstein2_sq(a: &Gaussian2D, b: &Gaussian2D, form: WassersteinForm) -> f64 {
    let mean_term = (a.mean - b.mean).norm_squared();
    let cov_term = match form {
        WassersteinForm::Frobenius => {
            (sqrt_cov(&a.covariance) - sqrt_cov(&b.covariance)).norm_squared()
        }
        WassersteinForm::BuresTrace => bures_term(&a.covariance, &b.covariance),
    };
    mean_term + cov_term.max(0.0)
}

fn bures_term(a: &Matrix2<f64>, b: &Matrix2<f64>) -> f64 {
    let ra = sqrt_cov(a);
    let inner = ra * b * ra;
    let inner = (inner + inner.transpose()) * 0.5;
    let cross = sqrtm_spd2(&inner).map(|m| m.trace()).unwrap_or(0.0);
    a.trace() + b.trace() - 2.0 * cross
}

/// `exp(−√W₂² / C)`, a similarity in `(0, 1]`.
pub fn normalized_wasserstein(a: &Gaussian2D, b: &Gaussian2D, cfg: &MetricConfig) -> f64 {
    (-wasserstein2_sq(a, b, cfg.wasserstein_form).sqrt() / cfg.c_norm).exp()
}
