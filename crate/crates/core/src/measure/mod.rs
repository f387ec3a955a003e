//! Probability measures on ℝ^d as the rest of the crate sees them.
//!
//! Two carriers are used throughout: [`EmpiricalMeasure`], the uniform
//! measure on the current particle positions, and [`GridMeasure1D`], a
//! piecewise-constant density on a truncated interval used by the PDE solver.
//! Distances live in [`wasserstein`], measure functionals (constraint, costs)
//! in [`functional`].

pub mod assignment;
pub mod functional;
pub mod wasserstein;

use thiserror::Error;

pub use functional::{
    ConstraintFunctional, CustomIntegrand, Integrand, MeasureFunctional, OuterFunction,
};
pub use wasserstein::{wasserstein_1d, wasserstein_assignment, Measure1D};

/// Mass identities on grid measures are checked to this tolerance.
pub const MASS_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MeasureError {
    #[error("measure has no support points")]
    Empty,
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("size mismatch: {0} vs {1} points")]
    SizeMismatch(usize, usize),
    #[error("{n} points exceeds the assignment limit of {limit}")]
    TooLarge { n: usize, limit: usize },
    #[error("coordinate buffer of length {len} is not a multiple of dimension {dim}")]
    Ragged { len: usize, dim: usize },
    #[error("non-finite value in measure")]
    NonFinite,
    #[error("invalid density: {0}")]
    InvalidDensity(String),
    #[error("unsupported Wasserstein order p = {0}, expected 1 or 2")]
    InvalidOrder(u32),
}

/// Uniform probability measure on `N` points of ℝ^d, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalMeasure {
    dim: usize,
    points: Vec<f64>,
}

impl EmpiricalMeasure {
    pub fn new(dim: usize, points: Vec<f64>) -> Result<Self, MeasureError> {
        if dim == 0 || points.is_empty() {
            return Err(MeasureError::Empty);
        }
        if points.len() % dim != 0 {
            return Err(MeasureError::Ragged {
                len: points.len(),
                dim,
            });
        }
        if points.iter().any(|v| !v.is_finite()) {
            return Err(MeasureError::NonFinite);
        }
        Ok(Self { dim, points })
    }

    pub fn from_scalars(xs: &[f64]) -> Result<Self, MeasureError> {
        Self::new(1, xs.to_vec())
    }

    /// `n` deterministic points at the mid-quantiles `(i + ½)/n` of a 1D normal law.
    pub fn gaussian_quantiles(n: usize, mean: f64, std: f64) -> Result<Self, MeasureError> {
        if n == 0 {
            return Err(MeasureError::Empty);
        }
        let xs: Vec<f64> = (0..n)
            .map(|i| mean + std * crate::special::normal_quantile((i as f64 + 0.5) / n as f64))
            .collect();
        Self::new(1, xs)
    }

    pub fn len(&self) -> usize {
        self.points.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    pub fn points(&self) -> std::slice::ChunksExact<'_, f64> {
        self.points.chunks_exact(self.dim)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.points
    }

    pub(crate) fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.points
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.points
    }

    /// `∫ f dm = (1/N) Σ f(x_i)`.
    pub fn mean_of(&self, f: impl Fn(&[f64]) -> f64) -> f64 {
        let sum: f64 = self.points().map(f).sum();
        sum / self.len() as f64
    }

    /// `(1/N) Σ |x_i − y_i|²` for equally indexed clouds: the cost of the identity coupling.
    pub fn mean_squared_displacement(&self, other: &Self) -> f64 {
        debug_assert_eq!(self.points.len(), other.points.len());
        let s: f64 = self
            .points
            .iter()
            .zip(&other.points)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        s / self.len() as f64
    }

    /// `(1/N) Σ |x_i − y_i|`, an upper bound for `d_1` between the two clouds.
    pub fn mean_displacement(&self, other: &Self) -> f64 {
        debug_assert_eq!(self.points.len(), other.points.len());
        let s: f64 = self
            .points()
            .zip(other.points())
            .map(|(a, b)| euclid(a, b))
            .sum();
        s / self.len() as f64
    }
}

/// Piecewise-constant probability density on `[x_min, x_max]` split into equal cells.
#[derive(Debug, Clone, PartialEq)]
pub struct GridMeasure1D {
    x_min: f64,
    x_max: f64,
    density: Vec<f64>,
}

impl GridMeasure1D {
    pub fn new(x_min: f64, x_max: f64, density: Vec<f64>) -> Result<Self, MeasureError> {
        let m = Self::from_raw(x_min, x_max, density)?;
        let mass = m.mass();
        if (mass - 1.0).abs() > MASS_TOLERANCE {
            return Err(MeasureError::InvalidDensity(format!("total mass {mass}")));
        }
        Ok(m)
    }

    /// Samples `f` at the cell centers and normalizes to unit mass.
    pub fn from_density_fn(
        x_min: f64,
        x_max: f64,
        n_cells: usize,
        f: impl Fn(f64) -> f64,
    ) -> Result<Self, MeasureError> {
        if n_cells == 0 {
            return Err(MeasureError::Empty);
        }
        let dx = (x_max - x_min) / n_cells as f64;
        let raw: Vec<f64> = (0..n_cells)
            .map(|i| f(x_min + (i as f64 + 0.5) * dx))
            .collect();
        let mut m = Self::from_raw(x_min, x_max, raw)?;
        let mass = m.mass();
        if mass <= 0.0 {
            return Err(MeasureError::InvalidDensity("zero mass".into()));
        }
        m.density.iter_mut().for_each(|d| *d /= mass);
        Ok(m)
    }

    pub fn gaussian(
        x_min: f64,
        x_max: f64,
        n_cells: usize,
        mean: f64,
        std: f64,
    ) -> Result<Self, MeasureError> {
        Self::from_density_fn(x_min, x_max, n_cells, |x| {
            let z = (x - mean) / std;
            (-0.5 * z * z).exp()
        })
    }

    pub(crate) fn from_raw(
        x_min: f64,
        x_max: f64,
        density: Vec<f64>,
    ) -> Result<Self, MeasureError> {
        if density.is_empty() {
            return Err(MeasureError::Empty);
        }
        if !(x_max > x_min) || !x_min.is_finite() || !x_max.is_finite() {
            return Err(MeasureError::InvalidDensity(format!(
                "bad domain [{x_min}, {x_max}]"
            )));
        }
        if density.iter().any(|d| !d.is_finite()) {
            return Err(MeasureError::NonFinite);
        }
        if let Some(d) = density.iter().find(|d| **d < 0.0) {
            return Err(MeasureError::InvalidDensity(format!(
                "negative density {d}"
            )));
        }
        Ok(Self {
            x_min,
            x_max,
            density,
        })
    }

    pub fn x_min(&self) -> f64 {
        self.x_min
    }

    pub fn x_max(&self) -> f64 {
        self.x_max
    }

    pub fn n_cells(&self) -> usize {
        self.density.len()
    }

    pub fn dx(&self) -> f64 {
        (self.x_max - self.x_min) / self.density.len() as f64
    }

    pub fn center(&self, i: usize) -> f64 {
        self.x_min + (i as f64 + 0.5) * self.dx()
    }

    pub fn centers(&self) -> Vec<f64> {
        (0..self.n_cells()).map(|i| self.center(i)).collect()
    }

    pub fn edge(&self, i: usize) -> f64 {
        self.x_min + i as f64 * self.dx()
    }

    pub fn density(&self) -> &[f64] {
        &self.density
    }

    pub fn mass(&self) -> f64 {
        self.density.iter().sum::<f64>() * self.dx()
    }

    /// Midpoint-rule quadrature of `f` against the density.
    pub fn integrate(&self, f: impl Fn(f64) -> f64) -> f64 {
        let dx = self.dx();
        self.density
            .iter()
            .enumerate()
            .map(|(i, d)| f(self.center(i)) * d)
            .sum::<f64>()
            * dx
    }

    pub fn mean(&self) -> f64 {
        self.integrate(|x| x)
    }

    pub fn variance(&self) -> f64 {
        let m = self.mean();
        self.integrate(|x| (x - m) * (x - m))
    }

    /// Mass carried by the `k` outermost cells on each side.
    pub fn boundary_mass(&self, k: usize) -> f64 {
        let n = self.n_cells();
        let k = k.min(n / 2);
        let s: f64 = self.density[..k].iter().chain(&self.density[n - k..]).sum();
        s * self.dx()
    }

    /// `(1 − w)·self + w·other` on the same grid.
    pub fn mix(&self, other: &Self, w: f64) -> Self {
        debug_assert_eq!(self.n_cells(), other.n_cells());
        let density = self
            .density
            .iter()
            .zip(&other.density)
            .map(|(a, b)| (1.0 - w) * a + w * b)
            .collect();
        Self {
            x_min: self.x_min,
            x_max: self.x_max,
            density,
        }
    }
}

/// Borrowed view over either carrier, used wherever a functional or drift
/// needs to integrate against "the current measure".
#[derive(Debug, Clone, Copy)]
pub enum MeasureRef<'a> {
    Empirical(&'a EmpiricalMeasure),
    Grid(&'a GridMeasure1D),
}

impl<'a> MeasureRef<'a> {
    pub fn dim(&self) -> usize {
        match self {
            MeasureRef::Empirical(m) => m.dim(),
            MeasureRef::Grid(_) => 1,
        }
    }

    pub fn integrate(&self, f: impl Fn(&[f64]) -> f64) -> f64 {
        match self {
            MeasureRef::Empirical(m) => m.mean_of(f),
            MeasureRef::Grid(g) => g.integrate(|x| f(&[x])),
        }
    }
}

impl<'a> From<&'a EmpiricalMeasure> for MeasureRef<'a> {
    fn from(m: &'a EmpiricalMeasure) -> Self {
        MeasureRef::Empirical(m)
    }
}

impl<'a> From<&'a GridMeasure1D> for MeasureRef<'a> {
    fn from(m: &'a GridMeasure1D) -> Self {
        MeasureRef::Grid(m)
    }
}

pub(crate) fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_inputs() {
        assert_eq!(EmpiricalMeasure::new(2, vec![]), Err(MeasureError::Empty));
        assert!(matches!(
            EmpiricalMeasure::new(2, vec![1.0, 2.0, 3.0]),
            Err(MeasureError::Ragged { .. })
        ));
        assert_eq!(
            EmpiricalMeasure::new(1, vec![f64::NAN]),
            Err(MeasureError::NonFinite)
        );
        assert!(GridMeasure1D::new(0.0, 1.0, vec![2.0, 0.0]).is_ok());
        assert!(GridMeasure1D::new(0.0, 1.0, vec![1.0, 0.0]).is_err());
        assert!(GridMeasure1D::new(0.0, 1.0, vec![3.0, -1.0]).is_err());
    }

    #[test]
    fn gaussian_grid_moments() {
        let g = GridMeasure1D::gaussian(-7.5, 8.5, 1600, 0.5, 1.2).unwrap();
        assert!((g.mass() - 1.0).abs() < 1e-12);
        assert!((g.mean() - 0.5).abs() < 1e-10);
        // midpoint rule on a piecewise-constant density adds dx²/12 to the variance only
        // through the sampling of the Gaussian; it is exponentially accurate here.
        assert!((g.variance() - 1.44).abs() < 1e-8);
    }

    #[test]
    fn quantile_points_are_symmetric() {
        let m = EmpiricalMeasure::gaussian_quantiles(8, 0.0, 1.0).unwrap();
        for i in 0..4 {
            assert!((m.point(i)[0] + m.point(7 - i)[0]).abs() < 1e-12);
        }
        assert!(m.mean_of(|x| x[0]).abs() < 1e-12);
    }
}
