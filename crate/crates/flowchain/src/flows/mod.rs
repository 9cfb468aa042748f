//! Conditional flow layers.
//!
//! Three families, all bijective in the 2D point for a fixed condition (and
//! index, for CIF):
//!
//! - [`CouplingLayer`] / [`BijectiveFlow`] — affine couplings, one coordinate
//!   passed through, the other scaled and shifted by networks of the passed
//!   coordinate and the condition.
//! - [`MafLayer`] / [`MafStack`] — masked autoregressive affine maps whose
//!   inverse solves the coordinates sequentially.
//! - [`CifLayer`] — a continuously-indexed wrapper: the inner bijection is
//!   additionally conditioned on a latent index `u` with learned Gaussian
//!   prior `p(u|z)` and posterior `q(u|x)`; densities become single-sample
//!   variational estimates.
//!
//! Sign conventions: `forward`/`inverse` on the bijective types return the
//! log-det-jacobian of *that direction*, so `forward` + `inverse` telescopes
//! to zero. The CIF entry points return the *density-change* increment that a
//! chain adds to the running log-density (log-det of the inverse map plus the
//! prior/posterior correction).

mod cif;
mod coupling;
mod maf;

pub use cif::{CifBatch, CifCtx, CifLayer};
pub use coupling::{BijectiveCtx, BijectiveFlow, CouplingCtx, CouplingLayer};
pub use maf::{MafCtx, MafLayer, MafStack, MafStackCtx};

use crate::geom::Point2;
use crate::numcore::tape::{NodeId, Tape};
use crate::numcore::Tensor;

/// Soft clamp bound for scale-network outputs before exponentiation.
pub const SCALE_CLAMP: f64 = 5.0;
/// Soft clamp bound for prior/posterior log-std outputs.
pub const LOGSTD_CLAMP: f64 = 7.0;

/// Result of one transform applied to one point.
#[derive(Debug, Clone, Copy)]
pub struct TransformResult {
    pub point: Point2,
    /// Log-det-jacobian of the applied direction for bijections; the
    /// single-sample variational density increment for CIF entry points.
    pub delta_logp: f64,
}

pub(crate) fn rows_to_points(t: &Tensor) -> Vec<Point2> {
    (0..t.rows()).map(|r| Point2::new(t.at(r, 0), t.at(r, 1))).collect()
}

pub(crate) fn points_to_tensor(points: &[Point2]) -> Tensor {
    let mut data = Vec::with_capacity(points.len() * 2);
    for p in points {
        data.push(p.x);
        data.push(p.y);
    }
    Tensor::from_vec(points.len(), 2, data)
}

/// Diagonal-Gaussian log-density rows on a tape:
/// `log N(x; mean, exp(log_std))`, all `[m,2]` (log_std may be `[m,2]` or a
/// broadcastable `[1,2]` row). Returns `[m,1]`.
pub(crate) fn gaussian_logp_tape(
    tape: &mut Tape<'_>,
    x: NodeId,
    mean: NodeId,
    log_std: NodeId,
) -> NodeId {
    let diff = tape.sub(x, mean);
    let neg_ls = tape.neg(log_std);
    let inv = tape.exp(neg_ls);
    let w = if tape.value(inv).rows() == 1 {
        tape.mul_row(diff, inv)
    } else {
        tape.mul(diff, inv)
    };
    let q = tape.square(w);
    let qs = tape.sum_cols(q);
    let ls_sum = if tape.value(log_std).rows() == 1 {
        let s = tape.sum_cols(log_std); // [1,1]
        let m = tape.value(qs).rows();
        let ones = tape.constant(Tensor::filled(m, 1, 1.0));
        tape.mul_row(ones, s)
    } else {
        tape.sum_cols(log_std)
    };
    let half_q = tape.scale(qs, 0.5);
    let total = tape.add(ls_sum, half_q);
    let neg = tape.neg(total);
    tape.add_scalar(neg, -crate::gauss::LN_2PI)
}

/// Plain-inference counterpart of `gaussian_logp_tape` for one row.
pub(crate) fn gaussian_logp_row(x: &[f64], mean: &[f64], log_std: &[f64]) -> f64 {
    debug_assert_eq!(x.len(), 2);
    let mut out = -crate::gauss::LN_2PI;
    for d in 0..2 {
        let inv = (-log_std[d]).exp();
        let w = (x[d] - mean[d]) * inv;
        out -= log_std[d] + 0.5 * w * w;
    }
    out
}
