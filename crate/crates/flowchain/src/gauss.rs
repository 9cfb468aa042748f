//! Gaussian density helpers shared by the chain, the data generators, and the
//! metrics (diagonal and full-covariance bivariate normals, error function).

use crate::geom::Point2;

pub const LN_2PI: f64 = 1.837877066409345483560659472811;

/// Log-density of a diagonal bivariate normal at `p`.
pub fn log_normal_diag(p: Point2, mean: Point2, sigma: Point2) -> f64 {
    debug_assert!(sigma.x > 0.0 && sigma.y > 0.0);
    let zx = (p.x - mean.x) / sigma.x;
    let zy = (p.y - mean.y) / sigma.y;
    -LN_2PI - sigma.x.ln() - sigma.y.ln() - 0.5 * (zx * zx + zy * zy)
}

/// Density of an isotropic bivariate normal at `p`.
pub fn normal_iso_pdf(p: Point2, mean: Point2, sigma: f64) -> f64 {
    log_normal_diag(p, mean, Point2::new(sigma, sigma)).exp()
}

/// A bivariate Gaussian with full covariance, for analytic baselines.
#[derive(Debug, Clone, Copy)]
pub struct Gaussian2 {
    pub mean: Point2,
    /// Covariance entries: xx, xy, yy.
    pub cov: [f64; 3],
}

impl Gaussian2 {
    /// Maximum-likelihood fit to a sample. Requires at least 2 points.
    /// Covariance diagonal is floored to keep the density evaluable on
    /// degenerate point sets.
    pub fn fit(points: &[Point2]) -> Gaussian2 {
        assert!(points.len() >= 2, "Gaussian fit needs at least 2 points");
        let n = points.len() as f64;
        let mean = crate::geom::centroid(points);
        let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
        for p in points {
            let dx = p.x - mean.x;
            let dy = p.y - mean.y;
            sxx += dx * dx;
            sxy += dx * dy;
            syy += dy * dy;
        }
        let floor = 1e-12;
        Gaussian2 { mean, cov: [(sxx / n).max(floor), sxy / n, (syy / n).max(floor)] }
    }

    pub fn log_pdf(&self, p: Point2) -> f64 {
        let [a, b, c] = self.cov;
        let det = a * c - b * b;
        debug_assert!(det > 0.0, "singular covariance");
        let dx = p.x - self.mean.x;
        let dy = p.y - self.mean.y;
        // Inverse of [[a, b], [b, c]] applied to (dx, dy).
        let qx = (c * dx - b * dy) / det;
        let qy = (a * dy - b * dx) / det;
        -LN_2PI - 0.5 * det.ln() - 0.5 * (dx * qx + dy * qy)
    }

    pub fn pdf(&self, p: Point2) -> f64 {
        self.log_pdf(p).exp()
    }
}

/// Error function, Abramowitz & Stegun 7.1.26 (|err| < 1.5e-7).
pub fn erf(x: f64) -> f64 {
    let sign = if x < 0.0 { -1.0 } else { 1.0 };
    let x = x.abs();
    let t = 1.0 / (1.0 + 0.3275911 * x);
    let poly = t
        * (0.254829592 + t * (-0.284496736 + t * (1.421413741 + t * (-1.453152027 + t * 1.061405429))));
    sign * (1.0 - poly * (-x * x).exp())
}

/// Standard normal CDF.
pub fn std_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + erf(x / std::f64::consts::SQRT_2))
}

/// Mass of an isotropic Gaussian inside an axis-aligned rectangle.
pub fn iso_mass_in_rect(mean: Point2, sigma: f64, lo: Point2, hi: Point2) -> f64 {
    let px = std_normal_cdf((hi.x - mean.x) / sigma) - std_normal_cdf((lo.x - mean.x) / sigma);
    let py = std_normal_cdf((hi.y - mean.y) / sigma) - std_normal_cdf((lo.y - mean.y) / sigma);
    px * py
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diag_log_pdf_matches_standard_normal() {
        let lp = log_normal_diag(Point2::ZERO, Point2::ZERO, Point2::new(1.0, 1.0));
        assert!((lp + LN_2PI).abs() < 1e-15);
    }

    #[test]
    fn full_cov_reduces_to_diagonal() {
        let g = Gaussian2 { mean: Point2::new(1.0, -2.0), cov: [4.0, 0.0, 0.25] };
        let p = Point2::new(2.0, -1.5);
        let expect = log_normal_diag(p, g.mean, Point2::new(2.0, 0.5));
        assert!((g.log_pdf(p) - expect).abs() < 1e-12);
    }

    #[test]
    fn erf_known_values() {
        assert!(erf(0.0).abs() < 1e-8);
        assert!((erf(1.0) - 0.8427007929).abs() < 2e-7);
        assert!((erf(-1.0) + 0.8427007929).abs() < 2e-7);
    }

    #[test]
    fn iso_mass_wide_rect_is_one() {
        let m = iso_mass_in_rect(
            Point2::new(0.3, -0.7),
            1.3,
            Point2::new(-20.0, -20.0),
            Point2::new(20.0, 20.0),
        );
        assert!((m - 1.0).abs() < 1e-6);
    }
}
