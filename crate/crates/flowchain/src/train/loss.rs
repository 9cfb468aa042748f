//! Per-stage NLL over a batch of normalized scenes, with masked gradient
//! accumulation (each stage's flow parameters learn only from its own loss).

use std::collections::HashSet;

use rand::SeedableRng;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::chain::{FlowChainModel, FlowMode};
use crate::data::Scene;
use crate::error::{Error, Result};
use crate::flows::gaussian_logp_tape;
use crate::numcore::{Gradients, ParamId, Tape, Tensor};

/// A batch of normalized scenes plus the tag that derives the
/// reparameterization noise (so losses are reproducible and finite-ference
/// checks can re-evaluate the identical stochastic objective).
pub struct LossBatch<'a> {
    pub scenes: &'a [&'a Scene],
    pub noise_tag: u64,
}

#[derive(Debug, Clone)]
pub struct StageLosses {
    /// Index 0 is stage 1.
    pub per_stage: Vec<f64>,
    pub total: f64,
}

fn gt_rows(scenes: &[&Scene], step: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(scenes.len() * 2);
    for s in scenes {
        let p = *s.future.get(step - 1).ok_or_else(|| {
            Error::InvalidConfig(format!(
                "scene has {} future steps, stage {step} needs more",
                s.future.len()
            ))
        })?;
        data.push(p.x);
        data.push(p.y);
    }
    Ok(Tensor::from_vec(scenes.len(), 2, data))
}

fn noise_for(model: &FlowChainModel, tag: u64, stage_loss: usize, stage: usize, rows: usize) -> Tensor {
    let seed = super::mix(tag, ((stage_loss as u64) << 32) | stage as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = Tensor::zeros(rows, model.config.index_dim);
    for v in t.data_mut() {
        *v = rng.sample::<f64, _>(StandardNormal);
    }
    t
}

/// Builds stage-loss `n` on a fresh tape and returns (tape, loss node).
fn build_stage_loss<'s>(
    model: &'s FlowChainModel,
    batch: &LossBatch<'_>,
    n: usize,
    live: Option<HashSet<ParamId>>,
) -> Result<(Tape<'s>, crate::numcore::NodeId)> {
    let store = &model.store;
    let mut tape = match live {
        Some(set) => Tape::with_live_params(store, set),
        None => Tape::new(store),
    };
    let cond = model.encoder.encode_tape(&mut tape, store, batch.scenes)?;

    let rows = batch.scenes.len();
    let gt = gt_rows(batch.scenes, n)?;
    let mut y = tape.constant(gt);
    let mut delta_total: Option<crate::numcore::NodeId> = None;
    for stage_idx in (1..=n).rev() {
        let eps = if model.config.mode == FlowMode::Cif {
            Some(noise_for(model, batch.noise_tag, n, stage_idx, rows))
        } else {
            None
        };
        let (z, delta) = model.stages()[stage_idx - 1]
            .inverse_tape(&mut tape, store, y, cond, eps.as_ref())?;
        y = z;
        delta_total = Some(match delta_total {
            Some(t) => tape.add(t, delta),
            None => delta,
        });
    }

    // Base Gaussian at the origin (scenes are anchor-normalized). Sigma is a
    // live parameter only inside stage 1's own base term; later stages see it
    // as part of the inherited density and treat it as a constant.
    let mean = tape.constant(Tensor::zeros(rows, 2));
    let log_sigma = if n == 1 {
        tape.param(model.log_sigma_id())
    } else {
        tape.constant(store.get(model.log_sigma_id()).clone())
    };
    let base = gaussian_logp_tape(&mut tape, y, mean, log_sigma);
    let logp = tape.add(base, delta_total.expect("at least one stage"));
    let mean_lp = tape.mean_all(logp);
    let loss = tape.neg(mean_lp);
    Ok((tape, loss))
}

fn live_set(model: &FlowChainModel, n: usize) -> HashSet<ParamId> {
    let mut set: HashSet<ParamId> = model.stage_param_ids(n).into_iter().collect();
    set.extend(model.encoder.param_ids());
    if n == 1 {
        set.insert(model.log_sigma_id());
    }
    set
}

/// Computes every stage's NLL; when `grads` is given, accumulates the masked
/// gradients of all stage losses into it (stage order, deterministic).
pub fn nll_loss(
    model: &FlowChainModel,
    batch: &LossBatch<'_>,
    mut grads: Option<&mut Gradients>,
) -> Result<StageLosses> {
    if batch.scenes.is_empty() {
        return Err(Error::InvalidConfig("empty loss batch".into()));
    }
    let mut per_stage = Vec::with_capacity(model.horizon());
    for n in 1..=model.horizon() {
        let live = grads.as_ref().map(|_| live_set(model, n));
        let (mut tape, loss) = build_stage_loss(model, batch, n, live)?;
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(Error::NonFinite { context: format!("stage {n} NLL") });
        }
        if let Some(g) = grads.as_deref_mut() {
            let stage_grads = tape.backward_scalar(loss)?;
            g.merge(&stage_grads);
        }
        per_stage.push(value);
    }
    let total = per_stage.iter().sum();
    Ok(StageLosses { per_stage, total })
}

/// Value of stage `n`'s loss alone — the object whose finite differences the
/// masked gradient of a stage parameter must match.
pub fn stage_loss_value(model: &FlowChainModel, batch: &LossBatch<'_>, n: usize) -> Result<f64> {
    let (tape, loss) = build_stage_loss(model, batch, n, None)?;
    Ok(tape.value(loss).item())
}
