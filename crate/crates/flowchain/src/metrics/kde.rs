//! Gaussian-product-kernel density estimation with Scott's-rule bandwidth —
//! the smoothing step sample-only predictors need before their density can
//! be compared against an analytic one.

use crate::error::{Error, Result};
use crate::gauss::LN_2PI;
use crate::geom::Point2;

#[derive(Debug, Clone)]
pub struct Kde2 {
    samples: Vec<Point2>,
    bandwidth: Point2,
}

impl Kde2 {
    /// Fits bandwidths `h_d = n^(-1/6) * sigma_d` per coordinate.
    pub fn fit(samples: &[Point2]) -> Result<Kde2> {
        if samples.len() < 2 {
            return Err(Error::InvalidConfig("KDE needs at least 2 samples".into()));
        }
        let n = samples.len() as f64;
        let mean = crate::geom::centroid(samples);
        let mut var = Point2::ZERO;
        for p in samples {
            var.x += (p.x - mean.x).powi(2);
            var.y += (p.y - mean.y).powi(2);
        }
        var = var * (1.0 / (n - 1.0));
        if var.x == 0.0 || var.y == 0.0 {
            return Err(Error::InvalidConfig(
                "degenerate sample set: zero variance in a coordinate".into(),
            ));
        }
        let factor = n.powf(-1.0 / 6.0);
        Ok(Kde2 {
            samples: samples.to_vec(),
            bandwidth: Point2::new(factor * var.x.sqrt(), factor * var.y.sqrt()),
        })
    }

    /// KDE with an explicit bandwidth (diagnostics and closed-form checks).
    pub fn with_bandwidth(samples: &[Point2], bandwidth: Point2) -> Result<Kde2> {
        if samples.len() < 2 {
            return Err(Error::InvalidConfig("KDE needs at least 2 samples".into()));
        }
        if !(bandwidth.x > 0.0 && bandwidth.y > 0.0) {
            return Err(Error::InvalidConfig("KDE bandwidth must be positive".into()));
        }
        Ok(Kde2 { samples: samples.to_vec(), bandwidth })
    }

    pub fn bandwidth(&self) -> Point2 {
        self.bandwidth
    }

    /// Log-density at `q` (log-sum-exp over the kernel sum).
    pub fn log_density(&self, q: Point2) -> f64 {
        let (hx, hy) = (self.bandwidth.x, self.bandwidth.y);
        let mut exponents = Vec::with_capacity(self.samples.len());
        let mut max_e = f64::NEG_INFINITY;
        for p in &self.samples {
            let zx = (q.x - p.x) / hx;
            let zy = (q.y - p.y) / hy;
            let e = -0.5 * (zx * zx + zy * zy);
            max_e = max_e.max(e);
            exponents.push(e);
        }
        let sum: f64 = exponents.iter().map(|e| (e - max_e).exp()).sum();
        max_e + sum.ln() - (self.samples.len() as f64).ln() - LN_2PI - hx.ln() - hy.ln()
    }

    pub fn density(&self, q: Point2) -> f64 {
        self.log_density(q).exp()
    }
}
