//! Density estimates and the cached terms that make the fast update possible.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::geom::{Point2, Trajectory};
use crate::numcore::Tensor;

/// One prediction step's sampled density: `S` positions with log-densities.
#[derive(Debug, Clone)]
pub struct StepDensity {
    /// 1-based prediction step index.
    pub step: usize,
    /// Shared with the cache; never mutated after prediction.
    pub positions: Arc<Vec<Point2>>,
    pub log_densities: Vec<f64>,
}

/// Per-step collections of (position, log-density) pairs from one prediction
/// (or one update of it). After `k` updates only steps `k+2..=t_fut` remain.
#[derive(Debug, Clone)]
pub struct DensityEstimate {
    /// Anchor of the base Gaussian this estimate used (normalized frame).
    pub anchor: Point2,
    /// Condition vector the stages were evaluated with.
    pub cond: Tensor,
    /// First prediction step present.
    pub first_step: usize,
    pub steps: Vec<StepDensity>,
}

impl DensityEstimate {
    pub fn horizon(&self) -> usize {
        self.first_step + self.steps.len() - 1
    }

    pub fn sample_count(&self) -> usize {
        self.steps.first().map_or(0, |s| s.positions.len())
    }

    pub fn step(&self, n: usize) -> Result<&StepDensity> {
        if n < self.first_step || n > self.horizon() {
            return Err(Error::InvalidConfig(format!(
                "step {n} outside the estimate's range {}..={}",
                self.first_step,
                self.horizon()
            )));
        }
        Ok(&self.steps[n - self.first_step])
    }

    /// The density map at step `n`: every sample position paired with its
    /// probability density.
    pub fn density_map(&self, n: usize) -> Result<Vec<(Point2, f64)>> {
        let s = self.step(n)?;
        Ok(s.positions
            .iter()
            .zip(&s.log_densities)
            .map(|(&p, &lp)| (p, lp.exp()))
            .collect())
    }

    /// The first `n` sampled trajectories (the best-of-N candidate set).
    /// Trajectories span the estimate's own step range.
    pub fn best_trajectories(&self, n: usize) -> Result<Vec<Trajectory>> {
        let s = self.sample_count();
        if n > s {
            return Err(Error::InvalidConfig(format!(
                "requested {n} trajectories but only {s} samples were drawn"
            )));
        }
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            out.push(self.steps.iter().map(|st| st.positions[i]).collect());
        }
        Ok(out)
    }
}

/// Everything the fast update reuses: sample positions, per-stage
/// log-density-change terms, and the base draws. Updates replace only the
/// base term and bump the counter; the cached transforms are never touched.
#[derive(Debug, Clone)]
pub struct MotionTrendCache {
    /// Base Gaussian draws `z` (step 0).
    pub base_draws: Arc<Vec<Point2>>,
    /// Current per-sample base log-density term.
    pub(crate) base_logp: Vec<f64>,
    /// Per step (index 0 = step 1): sample positions.
    pub(crate) positions: Vec<Arc<Vec<Point2>>>,
    /// Per step: density-convention delta per sample. Never mutated.
    pub(crate) deltas: Arc<Vec<Vec<f64>>>,
    /// Per step: CIF index draws used during prediction (replay/diagnostics).
    pub(crate) index_draws: Option<Arc<Vec<Tensor>>>,
    /// Sigma the base term was computed with.
    pub(crate) sigma: Point2,
    /// Condition vector used at prediction time.
    pub(crate) cond: Tensor,
    /// Anchor of the current base term.
    pub(crate) anchor: Point2,
    /// Number of updates applied so far.
    pub(crate) updates_applied: usize,
}

impl MotionTrendCache {
    pub fn updates_applied(&self) -> usize {
        self.updates_applied
    }

    /// The newest observed position the base term is currently anchored on.
    pub fn anchor(&self) -> Point2 {
        self.anchor
    }

    pub fn horizon(&self) -> usize {
        self.positions.len()
    }

    pub fn sigma(&self) -> Point2 {
        self.sigma
    }

    pub fn step_positions(&self, n: usize) -> &Arc<Vec<Point2>> {
        &self.positions[n - 1]
    }

    pub fn step_deltas(&self, n: usize) -> &[f64] {
        &self.deltas[n - 1]
    }

    pub fn index_draws(&self, n: usize) -> Option<&Tensor> {
        self.index_draws.as_ref().map(|d| &d[n - 1])
    }

    pub fn base_logp(&self) -> &[f64] {
        &self.base_logp
    }
}
