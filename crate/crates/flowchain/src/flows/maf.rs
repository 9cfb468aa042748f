//! Masked autoregressive affine layers over 2D points.
//!
//! In the sampling direction coordinate `o0` is transformed from the
//! condition alone and coordinate `o1` from `(y_{o0}, condition)`; the
//! Jacobian is triangular under the ordering and the inverse solves the two
//! coordinates sequentially.

use rand::Rng;

use super::{points_to_tensor, rows_to_points, TransformResult, SCALE_CLAMP};
use crate::error::{Error, Result};
use crate::geom::Point2;
use crate::numcore::tape::{NodeId, Tape};
use crate::numcore::tensor::{slice_cols, Tensor};
use crate::numcore::{CtxProjection, Init, Mlp, ParamId, ParamStore};

#[derive(Debug, Clone)]
pub struct MafLayer {
    /// Coordinate transformed first (from the condition only).
    first: usize,
    /// scale/translate for the first coordinate: input = condition only.
    scale0: Mlp,
    translate0: Mlp,
    /// scale/translate for the second coordinate: input = [y_first, condition].
    scale1: Mlp,
    translate1: Mlp,
}

#[derive(Debug, Clone)]
pub struct MafCtx {
    scale0: CtxProjection,
    translate0: CtxProjection,
    scale1: CtxProjection,
    translate1: CtxProjection,
}

impl MafLayer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        first: usize,
        cond_dim: usize,
        hidden_width: usize,
        hidden_depth: usize,
        rng: &mut R,
    ) -> MafLayer {
        assert!(first < 2);
        let mk = |store: &mut ParamStore, n: String, in_dim: usize, rng: &mut R| {
            Mlp::new(store, &n, in_dim, hidden_width, hidden_depth, 1, Init::Zeros, rng)
        };
        MafLayer {
            first,
            scale0: mk(store, format!("{name}.scale0"), cond_dim, rng),
            translate0: mk(store, format!("{name}.translate0"), cond_dim, rng),
            scale1: mk(store, format!("{name}.scale1"), 1 + cond_dim, rng),
            translate1: mk(store, format!("{name}.translate1"), 1 + cond_dim, rng),
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.scale0
            .param_ids()
            .chain(self.translate0.param_ids())
            .chain(self.scale1.param_ids())
            .chain(self.translate1.param_ids())
            .collect()
    }

    pub fn make_ctx(&self, store: &ParamStore, cond: &Tensor) -> Result<MafCtx> {
        Ok(MafCtx {
            scale0: self.scale0.project_context(store, cond)?,
            translate0: self.translate0.project_context(store, cond)?,
            scale1: self.scale1.project_context(store, cond)?,
            translate1: self.translate1.project_context(store, cond)?,
        })
    }

    fn clamp(s: Tensor) -> Tensor {
        s.map(|v| SCALE_CLAMP * (v / SCALE_CLAMP).tanh())
    }

    pub fn forward_batch(
        &self,
        store: &ParamStore,
        x: &Tensor,
        ctx: &MafCtx,
    ) -> Result<(Tensor, Vec<f64>)> {
        assert_eq!(x.cols(), 2);
        let n = x.rows();
        let (c0, c1) = (self.first, 1 - self.first);
        let empty = Tensor::zeros(n, 0);
        let s0 = Self::clamp(self.scale0.forward_with_context(store, &empty, &ctx.scale0)?);
        let t0 = self.translate0.forward_with_context(store, &empty, &ctx.translate0)?;

        let mut out = Tensor::zeros(n, 2);
        for r in 0..n {
            out.set(r, c0, x.at(r, c0) * s0.at(r, 0).exp() + t0.at(r, 0));
        }
        let y0 = slice_cols(&out, c0, c0 + 1);
        let s1 = Self::clamp(self.scale1.forward_with_context(store, &y0, &ctx.scale1)?);
        let t1 = self.translate1.forward_with_context(store, &y0, &ctx.translate1)?;
        let mut logdet = Vec::with_capacity(n);
        for r in 0..n {
            out.set(r, c1, x.at(r, c1) * s1.at(r, 0).exp() + t1.at(r, 0));
            logdet.push(s0.at(r, 0) + s1.at(r, 0));
        }
        if !out.all_finite() {
            return Err(Error::NonFinite { context: format!("{} forward", self.scale0.name()) });
        }
        Ok((out, logdet))
    }

    pub fn inverse_batch(
        &self,
        store: &ParamStore,
        y: &Tensor,
        ctx: &MafCtx,
    ) -> Result<(Tensor, Vec<f64>)> {
        assert_eq!(y.cols(), 2);
        let n = y.rows();
        let (c0, c1) = (self.first, 1 - self.first);
        let empty = Tensor::zeros(n, 0);
        let s0 = Self::clamp(self.scale0.forward_with_context(store, &empty, &ctx.scale0)?);
        let t0 = self.translate0.forward_with_context(store, &empty, &ctx.translate0)?;
        let y0 = slice_cols(y, c0, c0 + 1);
        let s1 = Self::clamp(self.scale1.forward_with_context(store, &y0, &ctx.scale1)?);
        let t1 = self.translate1.forward_with_context(store, &y0, &ctx.translate1)?;

        let mut out = Tensor::zeros(n, 2);
        let mut logdet = Vec::with_capacity(n);
        for r in 0..n {
            out.set(r, c0, (y.at(r, c0) - t0.at(r, 0)) * (-s0.at(r, 0)).exp());
            out.set(r, c1, (y.at(r, c1) - t1.at(r, 0)) * (-s1.at(r, 0)).exp());
            logdet.push(-s0.at(r, 0) - s1.at(r, 0));
        }
        if !out.all_finite() {
            return Err(Error::NonFinite { context: format!("{} inverse", self.scale0.name()) });
        }
        Ok((out, logdet))
    }

    /// Tape inverse for training; `cond` is `[m,cond_dim]`.
    pub fn inverse_tape(
        &self,
        tape: &mut Tape<'_>,
        y: NodeId,
        cond: NodeId,
    ) -> Result<(NodeId, NodeId)> {
        let (c0, c1) = (self.first, 1 - self.first);
        let s0_raw = self.scale0.forward_tape(tape, cond)?;
        let s0 = tape.soft_clamp(s0_raw, SCALE_CLAMP);
        let t0 = self.translate0.forward_tape(tape, cond)?;
        let y0 = tape.slice_cols(y, c0, c0 + 1);
        let y1 = tape.slice_cols(y, c1, c1 + 1);
        let in1 = tape.concat_cols(&[y0, cond]);
        let s1_raw = self.scale1.forward_tape(tape, in1)?;
        let s1 = tape.soft_clamp(s1_raw, SCALE_CLAMP);
        let t1 = self.translate1.forward_tape(tape, in1)?;

        let d0 = tape.sub(y0, t0);
        let n0 = tape.neg(s0);
        let e0 = tape.exp(n0);
        let x0 = tape.mul(d0, e0);
        let d1 = tape.sub(y1, t1);
        let n1 = tape.neg(s1);
        let e1 = tape.exp(n1);
        let x1 = tape.mul(d1, e1);
        let out = if c0 == 0 {
            tape.concat_cols(&[x0, x1])
        } else {
            tape.concat_cols(&[x1, x0])
        };
        let ld = tape.add(n0, n1);
        Ok((out, ld))
    }

    pub fn forward_point(&self, store: &ParamStore, x: Point2, cond: &[f64]) -> Result<TransformResult> {
        let ctx = self.make_ctx(store, &Tensor::row(cond))?;
        let (out, ld) = self.forward_batch(store, &points_to_tensor(&[x]), &ctx)?;
        Ok(TransformResult { point: rows_to_points(&out)[0], delta_logp: ld[0] })
    }

    pub fn inverse_point(&self, store: &ParamStore, y: Point2, cond: &[f64]) -> Result<TransformResult> {
        let ctx = self.make_ctx(store, &Tensor::row(cond))?;
        let (out, ld) = self.inverse_batch(store, &points_to_tensor(&[y]), &ctx)?;
        Ok(TransformResult { point: rows_to_points(&out)[0], delta_logp: ld[0] })
    }
}

/// Stack of MAF layers with alternating orderings.
#[derive(Debug, Clone)]
pub struct MafStack {
    layers: Vec<MafLayer>,
}

#[derive(Debug, Clone)]
pub struct MafStackCtx {
    layers: Vec<MafCtx>,
}

impl MafStack {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        n_layers: usize,
        cond_dim: usize,
        hidden_width: usize,
        hidden_depth: usize,
        rng: &mut R,
    ) -> MafStack {
        let layers = (0..n_layers)
            .map(|l| {
                MafLayer::new(store, &format!("{name}.maf{l}"), l % 2, cond_dim, hidden_width, hidden_depth, rng)
            })
            .collect();
        MafStack { layers }
    }

    pub fn layers(&self) -> &[MafLayer] {
        &self.layers
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(|l| l.param_ids()).collect()
    }

    pub fn make_ctx(&self, store: &ParamStore, cond: &Tensor) -> Result<MafStackCtx> {
        Ok(MafStackCtx {
            layers: self
                .layers
                .iter()
                .map(|l| l.make_ctx(store, cond))
                .collect::<Result<Vec<_>>>()?,
        })
    }

    pub fn forward_batch(&self, store: &ParamStore, x: &Tensor, ctx: &MafStackCtx) -> Result<(Tensor, Vec<f64>)> {
        let mut cur = x.clone();
        let mut total = vec![0.0; x.rows()];
        for (l, lc) in self.layers.iter().zip(&ctx.layers) {
            let (next, ld) = l.forward_batch(store, &cur, lc)?;
            cur = next;
            for (t, d) in total.iter_mut().zip(ld) {
                *t += d;
            }
        }
        Ok((cur, total))
    }

    pub fn inverse_batch(&self, store: &ParamStore, y: &Tensor, ctx: &MafStackCtx) -> Result<(Tensor, Vec<f64>)> {
        let mut cur = y.clone();
        let mut total = vec![0.0; y.rows()];
        for (l, lc) in self.layers.iter().zip(&ctx.layers).rev() {
            let (next, ld) = l.inverse_batch(store, &cur, lc)?;
            cur = next;
            for (t, d) in total.iter_mut().zip(ld) {
                *t += d;
            }
        }
        Ok((cur, total))
    }

    pub fn inverse_tape(
        &self,
        tape: &mut Tape<'_>,
        y: NodeId,
        cond: NodeId,
    ) -> Result<(NodeId, NodeId)> {
        let mut cur = y;
        let mut total: Option<NodeId> = None;
        for l in self.layers.iter().rev() {
            let (next, ld) = l.inverse_tape(tape, cur, cond)?;
            cur = next;
            total = Some(match total {
                Some(t) => tape.add(t, ld),
                None => ld,
            });
        }
        Ok((cur, total.expect("stack has at least one layer")))
    }
}
