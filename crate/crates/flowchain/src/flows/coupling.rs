//! Affine coupling layers and their 3-layer composition.

use rand::Rng;

use super::{points_to_tensor, rows_to_points, TransformResult, SCALE_CLAMP};
use crate::error::{Error, Result};
use crate::geom::Point2;
use crate::numcore::tape::{NodeId, Tape};
use crate::numcore::tensor::{concat_cols, slice_cols, Tensor};
use crate::numcore::{CtxProjection, Init, Mlp, ParamId, ParamStore};

/// One affine coupling over a 2D point: the `pass` coordinate goes through
/// unchanged and drives (together with optional per-sample extra features and
/// the condition vector) the scale/translation of the other coordinate.
///
/// Network input layout is `[passed coordinate, extra features, condition]`
/// so the condition tail can be projected once per batch.
#[derive(Debug, Clone)]
pub struct CouplingLayer {
    pass: usize,
    scale: Mlp,
    translate: Mlp,
    extra_dim: usize,
    cond_dim: usize,
}

/// Per-call projection of a shared condition row through both networks.
#[derive(Debug, Clone)]
pub struct CouplingCtx {
    scale: CtxProjection,
    translate: CtxProjection,
}

impl CouplingLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        pass: usize,
        extra_dim: usize,
        cond_dim: usize,
        hidden_width: usize,
        hidden_depth: usize,
        rng: &mut R,
    ) -> CouplingLayer {
        assert!(pass < 2);
        let in_dim = 1 + extra_dim + cond_dim;
        let scale = Mlp::new(
            store,
            &format!("{name}.scale"),
            in_dim,
            hidden_width,
            hidden_depth,
            1,
            Init::Zeros,
            rng,
        );
        let translate = Mlp::new(
            store,
            &format!("{name}.translate"),
            in_dim,
            hidden_width,
            hidden_depth,
            1,
            Init::Zeros,
            rng,
        );
        CouplingLayer { pass, scale, translate, extra_dim, cond_dim }
    }

    pub fn pass_coord(&self) -> usize {
        self.pass
    }

    pub fn cond_dim(&self) -> usize {
        self.cond_dim
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.scale.param_ids().chain(self.translate.param_ids()).collect()
    }

    pub fn make_ctx(&self, store: &ParamStore, cond: &Tensor) -> Result<CouplingCtx> {
        Ok(CouplingCtx {
            scale: self.scale.project_context(store, cond)?,
            translate: self.translate.project_context(store, cond)?,
        })
    }

    fn heads(
        &self,
        store: &ParamStore,
        kept: &Tensor,
        extra: Option<&Tensor>,
        ctx: &CouplingCtx,
    ) -> Result<(Tensor, Tensor)> {
        let feats = match extra {
            Some(u) => {
                assert_eq!(u.cols(), self.extra_dim, "extra feature width mismatch");
                concat_cols(&[kept, u])
            }
            None => {
                assert_eq!(self.extra_dim, 0, "layer expects extra features");
                kept.clone()
            }
        };
        let s_raw = self.scale.forward_with_context(store, &feats, &ctx.scale)?;
        let s = s_raw.map(|v| SCALE_CLAMP * (v / SCALE_CLAMP).tanh());
        let t = self.translate.forward_with_context(store, &feats, &ctx.translate)?;
        Ok((s, t))
    }

    /// Batched forward transform. Returns the transformed points and the
    /// forward log-det-jacobian per row.
    pub fn forward_batch(
        &self,
        store: &ParamStore,
        x: &Tensor,
        extra: Option<&Tensor>,
        ctx: &CouplingCtx,
    ) -> Result<(Tensor, Vec<f64>)> {
        assert_eq!(x.cols(), 2);
        let (a, b) = (self.pass, 1 - self.pass);
        let kept = slice_cols(x, a, a + 1);
        let moved = slice_cols(x, b, b + 1);
        let (s, t) = self.heads(store, &kept, extra, ctx)?;

        let n = x.rows();
        let mut out = Tensor::zeros(n, 2);
        let mut logdet = Vec::with_capacity(n);
        for r in 0..n {
            let sv = s.at(r, 0);
            let y = moved.at(r, 0) * sv.exp() + t.at(r, 0);
            out.set(r, a, kept.at(r, 0));
            out.set(r, b, y);
            logdet.push(sv);
        }
        if !out.all_finite() {
            return Err(Error::NonFinite { context: format!("{} forward", self.scale.name()) });
        }
        Ok((out, logdet))
    }

    /// Batched inverse transform. Returns the recovered points and the
    /// inverse log-det-jacobian per row (the negated forward one).
    pub fn inverse_batch(
        &self,
        store: &ParamStore,
        y: &Tensor,
        extra: Option<&Tensor>,
        ctx: &CouplingCtx,
    ) -> Result<(Tensor, Vec<f64>)> {
        assert_eq!(y.cols(), 2);
        let (a, b) = (self.pass, 1 - self.pass);
        let kept = slice_cols(y, a, a + 1);
        let moved = slice_cols(y, b, b + 1);
        let (s, t) = self.heads(store, &kept, extra, ctx)?;

        let n = y.rows();
        let mut out = Tensor::zeros(n, 2);
        let mut logdet = Vec::with_capacity(n);
        for r in 0..n {
            let sv = s.at(r, 0);
            let x = (moved.at(r, 0) - t.at(r, 0)) * (-sv).exp();
            out.set(r, a, kept.at(r, 0));
            out.set(r, b, x);
            logdet.push(-sv);
        }
        if !out.all_finite() {
            return Err(Error::NonFinite { context: format!("{} inverse", self.scale.name()) });
        }
        Ok((out, logdet))
    }

    /// Tape inverse for training. `extra`/`cond` are `[m,*]` nodes; returns
    /// the recovered points and the inverse log-det column `[m,1]`.
    pub fn inverse_tape(
        &self,
        tape: &mut Tape<'_>,
        store: &ParamStore,
        y: NodeId,
        extra: Option<NodeId>,
        cond: NodeId,
    ) -> Result<(NodeId, NodeId)> {
        let (a, b) = (self.pass, 1 - self.pass);
        let kept = tape.slice_cols(y, a, a + 1);
        let moved = tape.slice_cols(y, b, b + 1);
        let net_in = match extra {
            Some(u) => tape.concat_cols(&[kept, u, cond]),
            None => tape.concat_cols(&[kept, cond]),
        };
        let s_raw = self.scale.forward_tape(tape, net_in)?;
        let s = tape.soft_clamp(s_raw, SCALE_CLAMP);
        let t = self.translate.forward_tape(tape, net_in)?;
        let shifted = tape.sub(moved, t);
        let neg_s = tape.neg(s);
        let inv_scale = tape.exp(neg_s);
        let x_moved = tape.mul(shifted, inv_scale);
        let out = if a == 0 {
            tape.concat_cols(&[kept, x_moved])
        } else {
            tape.concat_cols(&[x_moved, kept])
        };
        let _ = store;
        Ok((out, neg_s))
    }
}

/// Three couplings with alternating pass coordinates (0, 1, 0).
#[derive(Debug, Clone)]
pub struct BijectiveFlow {
    layers: Vec<CouplingLayer>,
}

/// Condition projections for every layer of a [`BijectiveFlow`].
#[derive(Debug, Clone)]
pub struct BijectiveCtx {
    layers: Vec<CouplingCtx>,
}

impl BijectiveFlow {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        n_layers: usize,
        extra_dim: usize,
        cond_dim: usize,
        hidden_width: usize,
        hidden_depth: usize,
        rng: &mut R,
    ) -> BijectiveFlow {
        let layers = (0..n_layers)
            .map(|l| {
                CouplingLayer::new(
                    store,
                    &format!("{name}.coupling{l}"),
                    l % 2,
                    extra_dim,
                    cond_dim,
                    hidden_width,
                    hidden_depth,
                    rng,
                )
            })
            .collect();
        BijectiveFlow { layers }
    }

    pub fn layers(&self) -> &[CouplingLayer] {
        &self.layers
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(|l| l.param_ids()).collect()
    }

    pub fn make_ctx(&self, store: &ParamStore, cond: &Tensor) -> Result<BijectiveCtx> {
        Ok(BijectiveCtx {
            layers: self
                .layers
                .iter()
                .map(|l| l.make_ctx(store, cond))
                .collect::<Result<Vec<_>>>()?,
        })
    }

    /// Composite forward; log-det per row is the sum over layers.
    pub fn forward_batch(
        &self,
        store: &ParamStore,
        x: &Tensor,
        extra: Option<&Tensor>,
        ctx: &BijectiveCtx,
    ) -> Result<(Tensor, Vec<f64>)> {
        let mut cur = x.clone();
        let mut total = vec![0.0; x.rows()];
        for (l, lc) in self.layers.iter().zip(&ctx.layers) {
            let (next, ld) = l.forward_batch(store, &cur, extra, lc)?;
            cur = next;
            for (t, d) in total.iter_mut().zip(ld) {
                *t += d;
            }
        }
        Ok((cur, total))
    }

    pub fn inverse_batch(
        &self,
        store: &ParamStore,
        y: &Tensor,
        extra: Option<&Tensor>,
        ctx: &BijectiveCtx,
    ) -> Result<(Tensor, Vec<f64>)> {
        let mut cur = y.clone();
        let mut total = vec![0.0; y.rows()];
        for (l, lc) in self.layers.iter().zip(&ctx.layers).rev() {
            let (next, ld) = l.inverse_batch(store, &cur, extra, lc)?;
            cur = next;
            for (t, d) in total.iter_mut().zip(ld) {
                *t += d;
            }
        }
        Ok((cur, total))
    }

    /// Tape inverse; returns recovered points and the `[m,1]` inverse log-det.
    pub fn inverse_tape(
        &self,
        tape: &mut Tape<'_>,
        store: &ParamStore,
        y: NodeId,
        extra: Option<NodeId>,
        cond: NodeId,
    ) -> Result<(NodeId, NodeId)> {
        let mut cur = y;
        let mut total: Option<NodeId> = None;
        for l in self.layers.iter().rev() {
            let (next, ld) = l.inverse_tape(tape, store, cur, extra, cond)?;
            cur = next;
            total = Some(match total {
                Some(t) => tape.add(t, ld),
                None => ld,
            });
        }
        Ok((cur, total.expect("flow has at least one layer")))
    }
}

/// Single-point convenience wrappers used by tests and the glossary-level API.
impl CouplingLayer {
    pub fn forward_point(&self, store: &ParamStore, x: Point2, cond: &[f64]) -> Result<TransformResult> {
        let ctx = self.make_ctx(store, &Tensor::row(cond))?;
        let (out, ld) = self.forward_batch(store, &points_to_tensor(&[x]), None, &ctx)?;
        Ok(TransformResult { point: rows_to_points(&out)[0], delta_logp: ld[0] })
    }

    pub fn inverse_point(&self, store: &ParamStore, y: Point2, cond: &[f64]) -> Result<TransformResult> {
        let ctx = self.make_ctx(store, &Tensor::row(cond))?;
        let (out, ld) = self.inverse_batch(store, &points_to_tensor(&[y]), None, &ctx)?;
        Ok(TransformResult { point: rows_to_points(&out)[0], delta_logp: ld[0] })
    }
}
