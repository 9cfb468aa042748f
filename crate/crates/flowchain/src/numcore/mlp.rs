//! Multilayer perceptrons over the parameter store.
//!
//! One network = a list of (weight, bias) parameter pairs; hidden layers use
//! tanh, the output layer is linear. Two forward paths exist: a tape path for
//! training and a plain batched path for inference. The inference path can
//! split its input into per-row features plus a shared context row whose
//! first-layer contribution is projected once (the samples-share-a-condition
//! case in prediction).
//!
//! Every forward pass bumps a process-wide call counter so the fast-update
//! path can prove it evaluates no network at all.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;

use super::params::{ParamId, ParamStore};
use super::tape::{NodeId, Tape};
use super::tensor::{self, Tensor};
use crate::error::{Error, Result};

static MLP_FORWARD_CALLS: AtomicU64 = AtomicU64::new(0);

/// Total MLP forward invocations so far in this process.
pub fn mlp_call_count() -> u64 {
    MLP_FORWARD_CALLS.load(Ordering::Relaxed)
}

fn count_call() {
    MLP_FORWARD_CALLS.fetch_add(1, Ordering::Relaxed);
}

/// Default hidden width and depth used by all flow and encoder networks.
pub const DEFAULT_HIDDEN_WIDTH: usize = 128;
pub const DEFAULT_HIDDEN_DEPTH: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    /// Xavier-uniform weights, zero biases.
    Xavier,
    /// All-zero weights and biases (identity behaviour for flow heads).
    Zeros,
}

/// An MLP bound to parameters inside a `ParamStore`.
#[derive(Debug, Clone)]
pub struct Mlp {
    name: String,
    /// (weight `[in,out]`, bias `[1,out]`) per layer.
    layers: Vec<(ParamId, ParamId)>,
    dims: Vec<usize>,
}

impl Mlp {
    /// Registers parameters for a network `in_dim -> hidden^depth -> out_dim`.
    /// `final_init` controls the output layer (flow heads start at zero so the
    /// flow is the identity at initialization).
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        hidden_width: usize,
        hidden_depth: usize,
        out_dim: usize,
        final_init: Init,
        rng: &mut R,
    ) -> Mlp {
        assert!(in_dim > 0 && out_dim > 0 && hidden_width > 0);
        let mut dims = vec![in_dim];
        dims.extend(std::iter::repeat(hidden_width).take(hidden_depth));
        dims.push(out_dim);

        let mut layers = Vec::new();
        for l in 0..dims.len() - 1 {
            let (fan_in, fan_out) = (dims[l], dims[l + 1]);
            let last = l == dims.len() - 2;
            let mut w = Tensor::zeros(fan_in, fan_out);
            let init = if last { final_init } else { Init::Xavier };
            if init == Init::Xavier {
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                for v in w.data_mut() {
                    *v = rng.gen_range(-limit..limit);
                }
            }
            let wid = store.register(format!("{name}.w{l}"), w);
            let bid = store.register(format!("{name}.b{l}"), Tensor::zeros(1, fan_out));
            layers.push((wid, bid));
        }
        Mlp { name: name.to_string(), layers, dims }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn in_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn out_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.layers.iter().flat_map(|&(w, b)| [w, b])
    }

    fn check_input(&self, cols: usize) -> Result<()> {
        if cols != self.dims[0] {
            return Err(Error::ShapeMismatch {
                context: format!("{} layer 0", self.name),
                expected: format!("input width {}", self.dims[0]),
                got: format!("{cols}"),
            });
        }
        Ok(())
    }

    /// Batched inference forward: `input` is `[n, in_dim]`.
    pub fn forward(&self, store: &ParamStore, input: &Tensor) -> Result<Tensor> {
        self.check_input(input.cols())?;
        count_call();
        let mut h = input.clone();
        for (l, &(wid, bid)) in self.layers.iter().enumerate() {
            let z = tensor::matmul(&h, store.get(wid));
            let mut z = tensor::add_row(&z, store.get(bid));
            if l + 1 < self.layers.len() {
                for v in z.data_mut() {
                    *v = v.tanh();
                }
            }
            h = z;
        }
        Ok(h)
    }

    /// Precomputes the first-layer contribution of a shared context row
    /// occupying the trailing `ctx.cols()` input columns.
    pub fn project_context(&self, store: &ParamStore, ctx: &Tensor) -> Result<CtxProjection> {
        assert_eq!(ctx.rows(), 1, "context must be a single row");
        let feat_dim = self
            .dims[0]
            .checked_sub(ctx.cols())
            .ok_or_else(|| Error::ShapeMismatch {
                context: format!("{} context projection", self.name),
                expected: format!("context width <= {}", self.dims[0]),
                got: format!("{}", ctx.cols()),
            })?;
        let (w0, b0) = self.layers[0];
        let w = store.get(w0);
        // Rows feat_dim.. of W0 weighted by the context, plus the bias.
        let mut proj = store.get(b0).clone();
        for (k, &cv) in ctx.data().iter().enumerate() {
            let row = w.row_slice(feat_dim + k);
            for (p, &wv) in proj.data_mut().iter_mut().zip(row) {
                *p += cv * wv;
            }
        }
        Ok(CtxProjection { feat_dim, proj })
    }

    /// Inference forward where the input is `[features ++ shared context]`
    /// and the context part was projected once via `project_context`.
    pub fn forward_with_context(
        &self,
        store: &ParamStore,
        features: &Tensor,
        ctx: &CtxProjection,
    ) -> Result<Tensor> {
        if features.cols() != ctx.feat_dim {
            return Err(Error::ShapeMismatch {
                context: format!("{} layer 0", self.name),
                expected: format!("feature width {}", ctx.feat_dim),
                got: format!("{}", features.cols()),
            });
        }
        count_call();
        let (w0, _) = self.layers[0];
        let w = store.get(w0);
        let n = features.rows();
        let width = self.dims[1];
        let mut h = Tensor::zeros(n, width);
        for r in 0..n {
            let hrow = &mut h.data_mut()[r * width..(r + 1) * width];
            hrow.copy_from_slice(ctx.proj.data());
            let frow = features.row_slice(r);
            for (k, &fv) in frow.iter().enumerate() {
                if fv == 0.0 {
                    continue;
                }
                let wrow = w.row_slice(k);
                for (hv, &wv) in hrow.iter_mut().zip(wrow) {
                    *hv += fv * wv;
                }
            }
        }
        let last_hidden = self.layers.len() == 1;
        if !last_hidden {
            for v in h.data_mut() {
                *v = v.tanh();
            }
            for (l, &(wid, bid)) in self.layers.iter().enumerate().skip(1) {
                let z = tensor::matmul(&h, store.get(wid));
                let mut z = tensor::add_row(&z, store.get(bid));
                if l + 1 < self.layers.len() {
                    for v in z.data_mut() {
                        *v = v.tanh();
                    }
                }
                h = z;
            }
        }
        Ok(h)
    }

    /// Training forward on a tape. `input` must already be a tape node.
    pub fn forward_tape(&self, tape: &mut Tape<'_>, input: NodeId) -> Result<NodeId> {
        self.check_input(tape.value(input).cols())?;
        count_call();
        let mut h = input;
        for (l, &(wid, bid)) in self.layers.iter().enumerate() {
            let w = tape.param(wid);
            let b = tape.param(bid);
            let z = tape.matmul(h, w);
            let z = tape.add(z, b);
            h = if l + 1 < self.layers.len() { tape.tanh(z) } else { z };
        }
        Ok(h)
    }
}

/// First-layer projection of a shared context row (see `Mlp::project_context`).
#[derive(Debug, Clone)]
pub struct CtxProjection {
    feat_dim: usize,
    proj: Tensor,
}
