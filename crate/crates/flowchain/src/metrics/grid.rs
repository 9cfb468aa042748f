//! Rasterized discrete densities — the common currency for EMD.

use crate::error::{Error, Result};
use crate::geom::Point2;

/// Rectangular grid geometry: `nx * ny` cells of size `cell` with the
/// lower-left corner at `origin`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub origin: Point2,
    pub cell: Point2,
    pub nx: usize,
    pub ny: usize,
}

impl GridSpec {
    pub fn from_bounds(lo: Point2, hi: Point2, nx: usize, ny: usize) -> GridSpec {
        assert!(nx > 0 && ny > 0 && hi.x > lo.x && hi.y > lo.y);
        GridSpec {
            origin: lo,
            cell: Point2::new((hi.x - lo.x) / nx as f64, (hi.y - lo.y) / ny as f64),
            nx,
            ny,
        }
    }

    /// Grid covering the union of axis-aligned boxes.
    pub fn covering(boxes: &[(Point2, Point2)], nx: usize, ny: usize) -> GridSpec {
        assert!(!boxes.is_empty());
        let mut lo = boxes[0].0;
        let mut hi = boxes[0].1;
        for &(l, h) in boxes {
            lo.x = lo.x.min(l.x);
            lo.y = lo.y.min(l.y);
            hi.x = hi.x.max(h.x);
            hi.y = hi.y.max(h.y);
        }
        GridSpec::from_bounds(lo, hi, nx, ny)
    }

    pub fn cell_center(&self, ix: usize, iy: usize) -> Point2 {
        Point2::new(
            self.origin.x + (ix as f64 + 0.5) * self.cell.x,
            self.origin.y + (iy as f64 + 0.5) * self.cell.y,
        )
    }

    pub fn cell_area(&self) -> f64 {
        self.cell.x * self.cell.y
    }

    fn locate(&self, p: Point2) -> Option<(usize, usize)> {
        let fx = (p.x - self.origin.x) / self.cell.x;
        let fy = (p.y - self.origin.y) / self.cell.y;
        if fx < 0.0 || fy < 0.0 {
            return None;
        }
        let (ix, iy) = (fx as usize, fy as usize);
        if ix >= self.nx || iy >= self.ny {
            return None;
        }
        Some((ix, iy))
    }
}

/// Nonnegative cell masses over a [`GridSpec`], normalized to total mass 1.
#[derive(Debug, Clone)]
pub struct DensityGrid {
    pub spec: GridSpec,
    /// Row-major `[iy][ix]`.
    mass: Vec<f64>,
}

impl DensityGrid {
    pub fn mass(&self) -> &[f64] {
        &self.mass
    }

    pub fn at(&self, ix: usize, iy: usize) -> f64 {
        self.mass[iy * self.spec.nx + ix]
    }

    pub fn total(&self) -> f64 {
        self.mass.iter().sum()
    }

    fn normalized(spec: GridSpec, mut mass: Vec<f64>) -> Result<DensityGrid> {
        let total: f64 = mass.iter().sum();
        if !(total > 0.0) || !total.is_finite() {
            return Err(Error::InvalidConfig("all mass falls outside the grid".into()));
        }
        for m in &mut mass {
            *m /= total;
        }
        Ok(DensityGrid { spec, mass })
    }

    /// Bins weighted samples. Weights are normalized to sum 1 over the points
    /// that land inside; errors if nothing does.
    pub fn from_samples(spec: GridSpec, points: &[Point2], weights: Option<&[f64]>) -> Result<DensityGrid> {
        if let Some(w) = weights {
            assert_eq!(w.len(), points.len(), "one weight per point");
        }
        let mut mass = vec![0.0; spec.nx * spec.ny];
        for (i, p) in points.iter().enumerate() {
            if let Some((ix, iy)) = spec.locate(*p) {
                mass[iy * spec.nx + ix] += weights.map_or(1.0, |w| w[i]);
            }
        }
        Self::normalized(spec, mass)
    }

    /// Rasterizes an analytic density: each cell's mass is the mean of a
    /// 3x3 midpoint stencil times the cell area. Fails when the grid covers
    /// less than 99% of the density's mass.
    pub fn from_density(spec: GridSpec, pdf: impl Fn(Point2) -> f64) -> Result<DensityGrid> {
        const SUB: usize = 3;
        let mut mass = vec![0.0; spec.nx * spec.ny];
        let area = spec.cell_area();
        for iy in 0..spec.ny {
            for ix in 0..spec.nx {
                let mut acc = 0.0;
                for sy in 0..SUB {
                    for sx in 0..SUB {
                        let p = Point2::new(
                            spec.origin.x + (ix as f64 + (sx as f64 + 0.5) / SUB as f64) * spec.cell.x,
                            spec.origin.y + (iy as f64 + (sy as f64 + 0.5) / SUB as f64) * spec.cell.y,
                        );
                        acc += pdf(p);
                    }
                }
                mass[iy * spec.nx + ix] = acc / (SUB * SUB) as f64 * area;
            }
        }
        let covered: f64 = mass.iter().sum();
        if covered < 0.99 {
            return Err(Error::InvalidConfig(format!(
                "grid covers only {covered:.3} of the analytic mass (need >= 0.99)"
            )));
        }
        Self::normalized(spec, mass)
    }
}
