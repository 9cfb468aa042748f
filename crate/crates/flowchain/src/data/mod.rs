//! Datasets: synthetic generators with analytic ground truth, TrajNet-format
//! ingestion, windowing, and splits.

mod simfork;
mod trajnet;
mod unicycle;

pub use simfork::{gen_simfork, GroundTruthDensity, SimforkConfig, StepMixture};
pub use trajnet::{leave_one_out_split, load_trajnet, write_trajnet, TrajnetWindowing};
pub use unicycle::{gen_unicycle, UnicycleConfig};

use crate::geom::Point2;
use serde::{Deserialize, Serialize};

/// Default frame interval in seconds.
pub const FRAME_INTERVAL: f64 = 0.4;
/// Default observed steps.
pub const T_OBS: usize = 8;
/// Default prediction horizon.
pub const T_FUT: usize = 12;

/// A neighbor's state at the prediction time `t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NeighborState {
    pub position: Point2,
    /// Displacement per frame.
    pub velocity: Point2,
}

/// One prediction item: the target's observed window (ending at `t`), its
/// ground-truth future when known, and co-present neighbors at `t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub observed: Vec<Point2>,
    pub future: Vec<Point2>,
    pub neighbors: Vec<NeighborState>,
}

impl Scene {
    pub fn new(observed: Vec<Point2>, future: Vec<Point2>) -> Scene {
        Scene { observed, future, neighbors: Vec::new() }
    }

    /// The newest observed position `x_t`.
    pub fn anchor(&self) -> Point2 {
        *self.observed.last().expect("scene has no observed positions")
    }

    /// Target displacement per frame at `t`.
    pub fn anchor_velocity(&self) -> Point2 {
        let n = self.observed.len();
        if n < 2 {
            return Point2::ZERO;
        }
        self.observed[n - 1] - self.observed[n - 2]
    }

    /// Subtracts the anchor from every position so the newest observed
    /// position becomes the origin. Returns the shifted scene and the anchor
    /// for later de-normalization.
    pub fn relative_normalize(&self) -> (Scene, Point2) {
        let anchor = self.anchor();
        let shift = |p: &Point2| *p - anchor;
        let scene = Scene {
            observed: self.observed.iter().map(shift).collect(),
            future: self.future.iter().map(shift).collect(),
            neighbors: self
                .neighbors
                .iter()
                .map(|n| NeighborState { position: n.position - anchor, velocity: n.velocity })
                .collect(),
        };
        (scene, anchor)
    }

    /// Inverse of `relative_normalize`.
    pub fn denormalize(&self, anchor: Point2) -> Scene {
        let shift = |p: &Point2| *p + anchor;
        Scene {
            observed: self.observed.iter().map(shift).collect(),
            future: self.future.iter().map(shift).collect(),
            neighbors: self
                .neighbors
                .iter()
                .map(|n| NeighborState { position: n.position + anchor, velocity: n.velocity })
                .collect(),
        }
    }

    /// Uniformly scales all positions by `1/scale` (data normalization).
    pub fn scaled(&self, scale: f64) -> Scene {
        assert!(scale > 0.0);
        let s = 1.0 / scale;
        Scene {
            observed: self.observed.iter().map(|p| *p * s).collect(),
            future: self.future.iter().map(|p| *p * s).collect(),
            neighbors: self
                .neighbors
                .iter()
                .map(|n| NeighborState { position: n.position * s, velocity: n.velocity * s })
                .collect(),
        }
    }
}
