//! Standard normal law: CDF from `libm::erfc`, quantile seeded by `statrs`.

use statrs::distribution::{ContinuousCDF, Normal};

pub fn normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
}

pub fn normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Inverse CDF, polished by one Newton step on [`normal_cdf`].
pub fn normal_quantile(p: f64) -> f64 {
    let q = Normal::new(0.0, 1.0)
        .expect("unit normal is valid")
        .inverse_cdf(p);
    if !q.is_finite() {
        return q;
    }
    let dens = normal_pdf(q);
    if dens > 1e-300 {
        q - (normal_cdf(q) - p) / dens
    } else {
        q
    }
}
