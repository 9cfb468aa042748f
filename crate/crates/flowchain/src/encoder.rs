//! Temporal-social encoder: a gated recurrent unit over the target's
//! observed displacement vectors, optionally combined with a mean-pooled
//! embedding of neighbor relative states at time `t`. The output is the
//! condition vector fed to every flow stage.
//!
//! All inputs are displacements or relative offsets, so the condition vector
//! is invariant under global scene translation, and mean pooling makes it
//! invariant under neighbor permutation.

use rand::Rng;

use crate::data::Scene;
use crate::error::{Error, Result};
use crate::numcore::tape::{NodeId, Tape};
use crate::numcore::tensor::{self, Tensor};
use crate::numcore::{Init, Mlp, ParamId, ParamStore};

/// A single GRU gate's parameters: input weights, hidden weights, bias.
#[derive(Debug, Clone)]
struct Gate {
    w: ParamId,
    u: ParamId,
    b: ParamId,
}

impl Gate {
    fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Gate {
        let init = |rows: usize, cols: usize, rng: &mut R| {
            let limit = (6.0 / (rows + cols) as f64).sqrt();
            let mut t = Tensor::zeros(rows, cols);
            for v in t.data_mut() {
                *v = rng.gen_range(-limit..limit);
            }
            t
        };
        Gate {
            w: store.register(format!("{name}.w"), init(in_dim, hidden, rng)),
            u: store.register(format!("{name}.u"), init(hidden, hidden, rng)),
            b: store.register(format!("{name}.b"), Tensor::zeros(1, hidden)),
        }
    }

    fn ids(&self) -> [ParamId; 3] {
        [self.w, self.u, self.b]
    }
}

#[derive(Debug, Clone)]
pub struct Encoder {
    reset: Gate,
    update: Gate,
    cand: Gate,
    social_embed: Mlp,
    hidden: usize,
    t_obs: usize,
    social_pooling: bool,
}

impl Encoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        hidden: usize,
        t_obs: usize,
        social_pooling: bool,
        rng: &mut R,
    ) -> Encoder {
        let reset = Gate::new(store, "encoder.gru.reset", 2, hidden, rng);
        let update = Gate::new(store, "encoder.gru.update", 2, hidden, rng);
        let cand = Gate::new(store, "encoder.gru.cand", 2, hidden, rng);
        let social_embed =
            Mlp::new(store, "encoder.social", 4, hidden, 1, hidden, Init::Xavier, rng);
        Encoder { reset, update, cand, social_embed, hidden, t_obs, social_pooling }
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden
    }

    pub fn social_pooling(&self) -> bool {
        self.social_pooling
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = [&self.reset, &self.update, &self.cand]
            .iter()
            .flat_map(|g| g.ids())
            .collect();
        ids.extend(self.social_embed.param_ids());
        ids
    }

    fn check(&self, scene: &Scene) -> Result<()> {
        if scene.observed.len() < self.t_obs {
            return Err(Error::InvalidConfig(format!(
                "observed history too short: need {} positions, got {}",
                self.t_obs,
                scene.observed.len()
            )));
        }
        if !scene.observed.iter().all(|p| p.is_finite()) {
            return Err(Error::NonFinite { context: "encoder input positions".into() });
        }
        Ok(())
    }

    /// Displacement rows over the last `t_obs` observed positions:
    /// `[t_obs - 1, 2]`.
    fn displacement_rows(&self, scene: &Scene) -> Tensor {
        let obs = &scene.observed[scene.observed.len() - self.t_obs..];
        let mut data = Vec::with_capacity((self.t_obs - 1) * 2);
        for w in obs.windows(2) {
            let d = w[1] - w[0];
            data.push(d.x);
            data.push(d.y);
        }
        Tensor::from_vec(self.t_obs - 1, 2, data)
    }

    /// Neighbor relative states at `t`: `[K, 4]` rows of
    /// `[pos - x_t, vel - target_vel]`.
    fn neighbor_rows(&self, scene: &Scene) -> Tensor {
        let anchor = scene.anchor();
        let tv = scene.anchor_velocity();
        let mut data = Vec::with_capacity(scene.neighbors.len() * 4);
        for n in &scene.neighbors {
            let rp = n.position - anchor;
            let rv = n.velocity - tv;
            data.extend_from_slice(&[rp.x, rp.y, rv.x, rv.y]);
        }
        Tensor::from_vec(scene.neighbors.len(), 4, data)
    }

    /// Inference encoding of one scene into a `[1, hidden]` condition vector.
    pub fn encode(&self, store: &ParamStore, scene: &Scene) -> Result<Tensor> {
        self.check(scene)?;
        let disp = self.displacement_rows(scene);
        let mut h = Tensor::zeros(1, self.hidden);
        for step in 0..disp.rows() {
            let d = Tensor::row(disp.row_slice(step));
            h = self.gru_cell(store, &d, &h);
        }
        if self.social_pooling && !scene.neighbors.is_empty() {
            let rows = self.neighbor_rows(scene);
            let emb = self.social_embed.forward(store, &rows)?;
            let k = emb.rows() as f64;
            for c in 0..self.hidden {
                let mean = (0..emb.rows()).map(|r| emb.at(r, c)).sum::<f64>() / k;
                h.set(0, c, h.at(0, c) + mean);
            }
        }
        if !h.all_finite() {
            return Err(Error::NonFinite { context: "condition vector".into() });
        }
        Ok(h)
    }

    fn gru_cell(&self, store: &ParamStore, d: &Tensor, h: &Tensor) -> Tensor {
        let gate = |g: &Gate, act_sigmoid: bool, hin: &Tensor| -> Tensor {
            let a = tensor::matmul(d, store.get(g.w));
            let b = tensor::matmul(hin, store.get(g.u));
            let mut z = tensor::add_row(&tensor::add_row(&a, &b), store.get(g.b));
            for v in z.data_mut() {
                *v = if act_sigmoid { 1.0 / (1.0 + (-*v).exp()) } else { v.tanh() };
            }
            z
        };
        let r = gate(&self.reset, true, h);
        let zg = gate(&self.update, true, h);
        let mut rh = h.clone();
        for (v, rv) in rh.data_mut().iter_mut().zip(r.data()) {
            *v *= rv;
        }
        let n = gate(&self.cand, false, &rh);
        let mut out = Tensor::zeros(1, self.hidden);
        for c in 0..self.hidden {
            let z = zg.at(0, c);
            out.set(0, c, (1.0 - z) * n.at(0, c) + z * h.at(0, c));
        }
        out
    }

    /// Training encoding of a batch of scenes into a `[B, hidden]` node.
    pub fn encode_tape(
        &self,
        tape: &mut Tape<'_>,
        store: &ParamStore,
        scenes: &[&Scene],
    ) -> Result<NodeId> {
        for s in scenes {
            self.check(s)?;
        }
        let b = scenes.len();
        let steps = self.t_obs - 1;
        let disps: Vec<Tensor> = scenes.iter().map(|s| self.displacement_rows(s)).collect();

        let mut h = tape.constant(Tensor::zeros(b, self.hidden));
        for step in 0..steps {
            let mut data = Vec::with_capacity(b * 2);
            for d in &disps {
                data.extend_from_slice(d.row_slice(step));
            }
            let d = tape.constant(Tensor::from_vec(b, 2, data));
            h = self.gru_cell_tape(tape, d, h);
        }

        if self.social_pooling && scenes.iter().any(|s| !s.neighbors.is_empty()) {
            let mut pooled = Vec::with_capacity(b);
            for s in scenes {
                if s.neighbors.is_empty() {
                    pooled.push(tape.constant(Tensor::zeros(1, self.hidden)));
                } else {
                    let rows = tape.constant(self.neighbor_rows(s));
                    let emb = self.social_embed.forward_tape(tape, rows)?;
                    pooled.push(tape.mean_rows(emb));
                }
            }
            let stacked = tape.concat_rows(&pooled);
            h = tape.add(h, stacked);
        }
        let _ = store;
        Ok(h)
    }

    fn gru_cell_tape(&self, tape: &mut Tape<'_>, d: NodeId, h: NodeId) -> NodeId {
        let gate = |tape: &mut Tape<'_>, g: &Gate, hin: NodeId| -> NodeId {
            let w = tape.param(g.w);
            let u = tape.param(g.u);
            let bb = tape.param(g.b);
            let a = tape.matmul(d, w);
            let c = tape.matmul(hin, u);
            let s = tape.add(a, c);
            tape.add(s, bb)
        };
        let r_pre = gate(tape, &self.reset, h);
        let r = tape.sigmoid(r_pre);
        let z_pre = gate(tape, &self.update, h);
        let zg = tape.sigmoid(z_pre);
        let rh = tape.mul(r, h);
        let n_pre = gate(tape, &self.cand, rh);
        let n = tape.tanh(n_pre);
        // h' = (1 - z) * n + z * h
        let zn = tape.mul(zg, n);
        let zh = tape.mul(zg, h);
        let sum = tape.sub(n, zn);
        tape.add(sum, zh)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::NeighborState;
    use crate::geom::Point2;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn encoder(social: bool) -> (ParamStore, Encoder) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let e = Encoder::new(&mut store, 16, 8, social, &mut rng);
        (store, e)
    }

    fn walk_scene() -> Scene {
        let observed = (0..8).map(|i| Point2::new(i as f64 * 0.5, (i as f64 * 0.3).sin())).collect();
        let mut s = Scene::new(observed, vec![]);
        s.neighbors = vec![
            NeighborState { position: Point2::new(1.0, 2.0), velocity: Point2::new(0.1, 0.0) },
            NeighborState { position: Point2::new(-2.0, 0.5), velocity: Point2::new(0.0, -0.2) },
            NeighborState { position: Point2::new(4.0, 4.0), velocity: Point2::new(-0.3, 0.3) },
        ];
        s
    }

    #[test]
    fn stationary_target_encodes_deterministically() {
        let (store, e) = encoder(false);
        let scene = Scene::new(vec![Point2::new(3.0, 3.0); 8], vec![]);
        let a = e.encode(&store, &scene).unwrap();
        let b = e.encode(&store, &scene).unwrap();
        assert!(a.all_finite());
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn too_short_history_errors() {
        let (store, e) = encoder(false);
        let scene = Scene::new(vec![Point2::ZERO; 5], vec![]);
        assert!(e.encode(&store, &scene).is_err());
    }

    #[test]
    fn neighbor_permutation_leaves_encoding_unchanged() {
        let (store, e) = encoder(true);
        let scene = walk_scene();
        let base = e.encode(&store, &scene).unwrap();
        let mut permuted = scene.clone();
        permuted.neighbors.rotate_left(1);
        let other = e.encode(&store, &permuted).unwrap();
        for (a, b) in base.data().iter().zip(other.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        permuted.neighbors.swap(0, 1);
        let third = e.encode(&store, &permuted).unwrap();
        for (a, b) in base.data().iter().zip(third.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn global_translation_leaves_encoding_unchanged() {
        let (store, e) = encoder(true);
        let scene = walk_scene();
        let base = e.encode(&store, &scene).unwrap();
        let offset = Point2::new(10.0, 10.0);
        let shifted = Scene {
            observed: scene.observed.iter().map(|p| *p + offset).collect(),
            future: vec![],
            neighbors: scene
                .neighbors
                .iter()
                .map(|n| NeighborState { position: n.position + offset, velocity: n.velocity })
                .collect(),
        };
        let other = e.encode(&store, &shifted).unwrap();
        for (a, b) in base.data().iter().zip(other.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn tape_encoding_matches_plain() {
        let (store, e) = encoder(true);
        let s1 = walk_scene();
        let mut s2 = walk_scene();
        s2.neighbors.clear();
        let plain1 = e.encode(&store, &s1).unwrap();
        let plain2 = e.encode(&store, &s2).unwrap();

        let mut tape = Tape::new(&store);
        let node = e.encode_tape(&mut tape, &store, &[&s1, &s2]).unwrap();
        let batched = tape.value(node);
        for c in 0..e.hidden_dim() {
            assert!((batched.at(0, c) - plain1.at(0, c)).abs() < 1e-12);
            assert!((batched.at(1, c) - plain2.at(0, c)).abs() < 1e-12);
        }
    }
}
