//! Wasserstein distances `d_1`, `d_2`.
//!
//! In one dimension the optimal coupling is the monotone (quantile) one, so
//! `d_p^p = ∫₀¹ |Q_a(s) − Q_b(s)|^p ds`. Both carriers have piecewise-linear
//! quantile functions (constant pieces for point masses, linear pieces for a
//! piecewise-constant density), so the integral is evaluated exactly on the
//! merged breakpoints. For `d ≥ 2` and equal-size clouds an optimal coupling
//! is a permutation (Birkhoff), found with [`super::assignment`].

use super::assignment::min_cost_assignment;
use super::{EmpiricalMeasure, GridMeasure1D, MeasureError};

/// Matching is `O(N³)`; larger clouds are refused.
pub const ASSIGNMENT_LIMIT: usize = 4096;

/// A one-dimensional measure: raw samples (any order) or a grid density.
#[derive(Debug, Clone, Copy)]
pub enum Measure1D<'a> {
    Samples(&'a [f64]),
    Grid(&'a GridMeasure1D),
}

impl<'a> Measure1D<'a> {
    /// Views a 1D empirical measure as samples.
    pub fn empirical(m: &'a EmpiricalMeasure) -> Result<Self, MeasureError> {
        if m.dim() != 1 {
            return Err(MeasureError::DimensionMismatch(m.dim(), 1));
        }
        Ok(Measure1D::Samples(m.as_slice()))
    }
}

fn check_order(p: u32) -> Result<(), MeasureError> {
    match p {
        1 | 2 => Ok(()),
        _ => Err(MeasureError::InvalidOrder(p)),
    }
}

/// `d_p` between two one-dimensional measures through the quantile coupling.
pub fn wasserstein_1d(a: Measure1D<'_>, b: Measure1D<'_>, p: u32) -> Result<f64, MeasureError> {
    check_order(p)?;
    if let (Measure1D::Samples(xa), Measure1D::Samples(xb)) = (a, b) {
        if xa.is_empty() || xb.is_empty() {
            return Err(MeasureError::Empty);
        }
        if xa.len() != xb.len() {
            return Err(MeasureError::SizeMismatch(xa.len(), xb.len()));
        }
        let sa = sorted(xa)?;
        let sb = sorted(xb)?;
        let n = sa.len() as f64;
        let total: f64 = sa
            .iter()
            .zip(&sb)
            .map(|(x, y)| (x - y).abs().powi(p as i32))
            .sum();
        return Ok(root(total / n, p));
    }
    if let (Measure1D::Grid(ga), Measure1D::Grid(gb), 1) = (a, b, p) {
        if same_grid(ga, gb) {
            return Ok(cdf_distance(ga, gb));
        }
    }
    let qa = quantile_pieces(a)?;
    let qb = quantile_pieces(b)?;
    Ok(root(merged_integral(&qa, &qb, p), p))
}

/// Exact `d_p` between two equal-size uniform clouds in ℝ^d via minimum-cost matching.
pub fn wasserstein_assignment(
    a: &EmpiricalMeasure,
    b: &EmpiricalMeasure,
    p: u32,
) -> Result<f64, MeasureError> {
    check_order(p)?;
    if a.dim() != b.dim() {
        return Err(MeasureError::DimensionMismatch(a.dim(), b.dim()));
    }
    let n = a.len();
    if n != b.len() {
        return Err(MeasureError::SizeMismatch(n, b.len()));
    }
    if n > ASSIGNMENT_LIMIT {
        return Err(MeasureError::TooLarge {
            n,
            limit: ASSIGNMENT_LIMIT,
        });
    }
    let mut cost = Vec::with_capacity(n * n);
    for x in a.points() {
        for y in b.points() {
            let sq: f64 = x.iter().zip(y).map(|(u, v)| (u - v) * (u - v)).sum();
            cost.push(if p == 2 { sq } else { sq.sqrt() });
        }
    }
    let (_, total) = min_cost_assignment(&cost, n);
    Ok(root(total.max(0.0) / n as f64, p))
}

fn same_grid(a: &GridMeasure1D, b: &GridMeasure1D) -> bool {
    a.n_cells() == b.n_cells() && a.x_min() == b.x_min() && a.x_max() == b.x_max()
}

/// `d_1 = ∫ |F_a − F_b| dx`; the CDF difference is linear inside each cell.
fn cdf_distance(a: &GridMeasure1D, b: &GridMeasure1D) -> f64 {
    let dx = a.dx();
    let (ma, mb) = (a.mass(), b.mass());
    let mut left = 0.0;
    let mut total = 0.0;
    for (da, db) in a.density().iter().zip(b.density()) {
        let right = left + (da / ma - db / mb) * dx;
        total += linear_power_integral(left, right, dx, 1);
        left = right;
    }
    total
}

fn root(v: f64, p: u32) -> f64 {
    if p == 1 {
        v
    } else {
        v.max(0.0).sqrt()
    }
}

fn sorted(xs: &[f64]) -> Result<Vec<f64>, MeasureError> {
    if xs.iter().any(|x| !x.is_finite()) {
        return Err(MeasureError::NonFinite);
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    Ok(v)
}

/// One linear piece of a quantile function on `[s0, s1]`.
#[derive(Debug, Clone, Copy)]
struct Piece {
    s0: f64,
    s1: f64,
    q0: f64,
    q1: f64,
}

impl Piece {
    fn at(&self, s: f64) -> f64 {
        let w = self.s1 - self.s0;
        if w <= 0.0 {
            return self.q0;
        }
        self.q0 + (self.q1 - self.q0) * ((s - self.s0) / w).clamp(0.0, 1.0)
    }
}

fn quantile_pieces(m: Measure1D<'_>) -> Result<Vec<Piece>, MeasureError> {
    let mut pieces = match m {
        Measure1D::Samples(xs) => {
            if xs.is_empty() {
                return Err(MeasureError::Empty);
            }
            let v = sorted(xs)?;
            let n = v.len() as f64;
            v.iter()
                .enumerate()
                .map(|(k, &x)| Piece {
                    s0: k as f64 / n,
                    s1: (k + 1) as f64 / n,
                    q0: x,
                    q1: x,
                })
                .collect::<Vec<_>>()
        }
        Measure1D::Grid(g) => {
            let dx = g.dx();
            let total = g.mass();
            if total <= 0.0 {
                return Err(MeasureError::Empty);
            }
            let mut out = Vec::with_capacity(g.n_cells());
            let mut c = 0.0;
            for (i, &d) in g.density().iter().enumerate() {
                let w = d * dx / total;
                if w <= 0.0 {
                    continue;
                }
                out.push(Piece {
                    s0: c,
                    s1: c + w,
                    q0: g.edge(i),
                    q1: g.edge(i + 1),
                });
                c += w;
            }
            out
        }
    };
    if let Some(last) = pieces.last_mut() {
        last.s1 = 1.0;
    }
    Ok(pieces)
}

/// `∫ |ℓ|^p` over an interval of length `h` for a linear `ℓ` with end values `a`, `b`.
fn linear_power_integral(a: f64, b: f64, h: f64, p: u32) -> f64 {
    if h <= 0.0 {
        return 0.0;
    }
    match p {
        1 => {
            if a * b >= 0.0 {
                0.5 * h * (a.abs() + b.abs())
            } else {
                0.5 * h * (a * a + b * b) / (a.abs() + b.abs())
            }
        }
        _ => h * (a * a + a * b + b * b) / 3.0,
    }
}

fn merged_integral(qa: &[Piece], qb: &[Piece], p: u32) -> f64 {
    let (mut i, mut j) = (0, 0);
    let mut s = 0.0;
    let mut total = 0.0;
    while i < qa.len() && j < qb.len() {
        let (pa, pb) = (qa[i], qb[j]);
        let next = pa.s1.min(pb.s1);
        if next > s {
            let a = pa.at(s) - pb.at(s);
            let b = pa.at(next) - pb.at(next);
            total += linear_power_integral(a, b, next - s, p);
            s = next;
        }
        if pa.s1 <= next {
            i += 1;
        }
        if pb.s1 <= next {
            j += 1;
        }
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_diracs() {
        let d = wasserstein_1d(Measure1D::Samples(&[0.0]), Measure1D::Samples(&[1.0]), 1).unwrap();
        assert_eq!(d, 1.0);
    }

    #[test]
    fn shifted_pairs() {
        let d = wasserstein_1d(
            Measure1D::Samples(&[2.0, 0.0]),
            Measure1D::Samples(&[1.0, 3.0]),
            1,
        )
        .unwrap();
        assert!((d - 1.0).abs() < 1e-15);
    }

    #[test]
    fn errors() {
        assert_eq!(
            wasserstein_1d(
                Measure1D::Samples(&[0.0]),
                Measure1D::Samples(&[1.0, 2.0]),
                1
            ),
            Err(MeasureError::SizeMismatch(1, 2))
        );
        assert_eq!(
            wasserstein_1d(Measure1D::Samples(&[]), Measure1D::Samples(&[]), 1),
            Err(MeasureError::Empty)
        );
        assert_eq!(
            wasserstein_1d(Measure1D::Samples(&[0.0]), Measure1D::Samples(&[1.0]), 3),
            Err(MeasureError::InvalidOrder(3))
        );
        let a = EmpiricalMeasure::new(2, vec![0.0, 0.0]).unwrap();
        let b = EmpiricalMeasure::new(1, vec![0.0]).unwrap();
        assert_eq!(
            wasserstein_assignment(&a, &b, 2),
            Err(MeasureError::DimensionMismatch(2, 1))
        );
        assert!(Measure1D::empirical(&a).is_err());
    }

    #[test]
    fn grid_vs_shifted_grid() {
        // uniform on [0,1] vs uniform on [0.5,1.5], same grid of [0, 2]
        let mut da = vec![0.0; 40];
        let mut db = vec![0.0; 40];
        da[..20].iter_mut().for_each(|v| *v = 1.0);
        db[10..30].iter_mut().for_each(|v| *v = 1.0);
        let a = GridMeasure1D::new(0.0, 2.0, da).unwrap();
        let b = GridMeasure1D::new(0.0, 2.0, db).unwrap();
        for p in [1, 2] {
            let d = wasserstein_1d(Measure1D::Grid(&a), Measure1D::Grid(&b), p).unwrap();
            assert!((d - 0.5).abs() < 1e-12, "p={p}: {d}");
        }
    }

    #[test]
    fn cdf_path_matches_quantile_path() {
        let a = GridMeasure1D::gaussian(-4.0, 4.0, 80, -0.3, 0.6).unwrap();
        let b =
            GridMeasure1D::from_density_fn(-4.0, 4.0, 80, |x| (-(x - 1.0f64).abs()).exp()).unwrap();
        let fast = wasserstein_1d(Measure1D::Grid(&a), Measure1D::Grid(&b), 1).unwrap();
        let slow = merged_integral(
            &quantile_pieces(Measure1D::Grid(&a)).unwrap(),
            &quantile_pieces(Measure1D::Grid(&b)).unwrap(),
            1,
        );
        assert!((fast - slow).abs() < 1e-12, "{fast} vs {slow}");
    }

    #[test]
    fn dirac_vs_uniform_cell() {
        // δ_0 against uniform density on [-1, 1]: d_1 = E|U| = 1/2, d_2 = sqrt(1/3)
        let g = GridMeasure1D::new(-1.0, 1.0, vec![0.5; 10]).unwrap();
        let d1 = wasserstein_1d(Measure1D::Samples(&[0.0]), Measure1D::Grid(&g), 1).unwrap();
        let d2 = wasserstein_1d(Measure1D::Samples(&[0.0]), Measure1D::Grid(&g), 2).unwrap();
        assert!((d1 - 0.5).abs() < 1e-12);
        assert!((d2 - (1.0f64 / 3.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn translation_in_plane() {
        let a = EmpiricalMeasure::new(2, vec![0.0, 0.0, 1.0, 2.0, -1.0, 0.5]).unwrap();
        let shifted: Vec<f64> = a
            .as_slice()
            .chunks(2)
            .flat_map(|c| [c[0] + 0.3, c[1] - 0.4])
            .collect();
        let b = EmpiricalMeasure::new(2, shifted).unwrap();
        assert!(wasserstein_assignment(&a, &a, 2).unwrap().abs() < 1e-15);
        assert!((wasserstein_assignment(&a, &b, 2).unwrap() - 0.5).abs() < 1e-12);
    }
}
