//! The scale-control agent: an actor-critic over (thumbnail, position
//! mask) states.
//!
//! States at different grid positions share the same thumbnail and differ
//! only in the mask, so the encoder indexes the thumbnail's feature map by
//! the mask: features outside the current patch are zeroed, a 3x3
//! convolution runs over the masked map, and pooling averages masked
//! positions only. Actor and critic are separate fully connected heads on
//! the shared encoding. With `feature_indexing` off the mask is fed as an
//! extra input channel instead, which is the weaker variant the indexing
//! path is measured against.

use crate::error::{Error, Result};
use crate::nn::{sgd_step, NodeId, OptimizerConfig, PadMode, ParamId, ParamStore, Tape};
use crate::tiling::{BinaryMask, Raster};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::sync::Arc;

/// The agent's observation for one timestep.
#[derive(Debug, Clone)]
pub struct State {
    /// Global thumbnail, shared by every state of an episode.
    pub thumbnail: Arc<Raster>,
    /// Patch footprint at thumbnail resolution; never empty.
    pub mask: BinaryMask,
}

/// One (state, action, reward, ...) record collected during a rollout.
#[derive(Debug, Clone)]
pub struct Transition {
    pub state: State,
    /// Chosen scale in `[1, N]`.
    pub action: u32,
    pub reward: f64,
    /// Critic estimate at collection time.
    pub value: f64,
    /// `ln pi(action | state)` at collection time.
    pub log_prob: f64,
    /// Full action distribution at collection time.
    pub probs: Vec<f64>,
    pub done: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentConfig {
    /// Number of scale actions N; action a is a scale in `[1, N]`.
    pub actions: usize,
    pub gamma: f64,
    /// n-step return horizon.
    pub n_step: usize,
    pub value_coef: f64,
    pub entropy_coef: f64,
    /// Mask-indexed feature pooling (true) versus mask-as-input-channel.
    pub feature_indexing: bool,
    /// Backbone stage widths (stride-2 3x3 convolutions).
    pub channels: Vec<usize>,
    /// Hidden width of the actor/critic heads.
    pub hidden: usize,
}

impl Default for AgentConfig {
    fn default() -> Self {
        AgentConfig {
            actions: 6,
            gamma: 0.99,
            n_step: 5,
            value_coef: 0.5,
            entropy_coef: 0.0,
            feature_indexing: true,
            channels: vec![8, 16, 32],
            hidden: 64,
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.actions < 2 {
            return Err(Error::Config("agent needs at least 2 actions".into()));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("gamma {} outside [0, 1]", self.gamma)));
        }
        if self.n_step == 0 {
            return Err(Error::Config("n_step must be >= 1".into()));
        }
        Ok(())
    }
}

pub struct Agent {
    pub cfg: AgentConfig,
    pub in_channels: usize,
    pub params: ParamStore,
    backbone: Vec<(ParamId, ParamId)>,
    index_conv: (ParamId, ParamId),
    actor: [(ParamId, ParamId); 2],
    critic: [(ParamId, ParamId); 2],
    step: usize,
}

/// Forward-pass handle over one state.
pub struct AgentForward {
    pub tape: Tape,
    pub encoding: NodeId,
    pub probs: NodeId,
    pub value: NodeId,
}

/// Loss values of one actor-critic update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossStats {
    pub policy: f64,
    pub value: f64,
    pub entropy: f64,
}

impl Agent {
    pub fn new(cfg: AgentConfig, in_channels: usize, seed: u64) -> Self {
        assert!(!cfg.channels.is_empty());
        let mut params = ParamStore::new();
        let mut backbone = Vec::new();
        let mut prev = if cfg.feature_indexing { in_channels } else { in_channels + 1 };
        for (i, &ch) in cfg.channels.iter().enumerate() {
            let w = params.add_he(&format!("sca.backbone{}.w", i + 1), vec![ch, prev, 3, 3], prev * 9, seed);
            let b = params.add_zeros(&format!("sca.backbone{}.b", i + 1), vec![ch]);
            backbone.push((w, b));
            prev = ch;
        }
        let feat = prev;
        let index_conv = (
            params.add_he("sca.index.w", vec![feat, feat, 3, 3], feat * 9, seed),
            params.add_zeros("sca.index.b", vec![feat]),
        );
        let actor = [
            (
                params.add_he("sca.actor1.w", vec![cfg.hidden, feat], feat, seed),
                params.add_zeros("sca.actor1.b", vec![cfg.hidden]),
            ),
            (
                params.add_he("sca.actor2.w", vec![cfg.actions, cfg.hidden], cfg.hidden, seed),
                params.add_zeros("sca.actor2.b", vec![cfg.actions]),
            ),
        ];
        let critic = [
            (
                params.add_he("sca.critic1.w", vec![cfg.hidden, feat], feat, seed),
                params.add_zeros("sca.critic1.b", vec![cfg.hidden]),
            ),
            (
                params.add_he("sca.critic2.w", vec![1, cfg.hidden], cfg.hidden, seed),
                params.add_zeros("sca.critic2.b", vec![1]),
            ),
        ];
        Agent { cfg, in_channels, params, backbone, index_conv, actor, critic, step: 0 }
    }

    pub fn optimizer_step(&self) -> usize {
        self.step
    }

    pub fn set_optimizer_step(&mut self, step: usize) {
        self.step = step;
    }

    fn wiring(&self) -> AgentWiring {
        AgentWiring {
            backbone: self.backbone.clone(),
            index_conv: self.index_conv,
            actor: self.actor,
            critic: self.critic,
            in_channels: self.in_channels,
            feature_indexing: self.cfg.feature_indexing,
        }
    }

    /// Encode a state into a fixed-length feature vector node.
    fn encode(&self, tape: &mut Tape, state: &State) -> Result<NodeId> {
        self.wiring().encode(tape, &self.params, state)
    }

    fn heads(&self, tape: &mut Tape, encoding: NodeId) -> (NodeId, NodeId) {
        self.wiring().heads(tape, &self.params, encoding)
    }

    /// Finite-difference check of every parameter against a combined
    /// policy/value/entropy objective on one state.
    pub fn check_gradients(&mut self, state: &State, action: u32, target: f64) -> Result<f64> {
        let wiring = self.wiring();
        // dry run surfaces input errors before the checker loops
        {
            let mut tape = Tape::new();
            wiring.encode(&mut tape, &self.params, state)?;
        }
        let value_coef = self.cfg.value_coef;
        Ok(crate::nn::grad_check(&mut self.params, |tape, store| {
            let enc = wiring.encode(tape, store, state).expect("validated by dry run");
            let (probs, value) = wiring.heads(tape, store, enc);
            let p = tape.pick(probs, (action - 1) as usize);
            let lp = tape.ln(p);
            let v = tape.pick(value, 0);
            let vd = tape.affine(&[(v, 1.0)], -target);
            let sq = tape.square(vd);
            let ent = tape.entropy_vec(probs);
            tape.affine(&[(lp, -0.8), (sq, value_coef), (ent, -0.01)], 0.0)
        }))
    }

    pub fn forward(&self, state: &State) -> Result<AgentForward> {
        let mut tape = Tape::new();
        let encoding = self.encode(&mut tape, state)?;
        let (probs, value) = self.heads(&mut tape, encoding);
        Ok(AgentForward { tape, encoding, probs, value })
    }

    /// Action distribution and value estimate, no gradient bookkeeping kept.
    pub fn policy(&self, state: &State) -> Result<(Vec<f64>, f64)> {
        let fwd = self.forward(state)?;
        Ok((fwd.tape.values(fwd.probs).to_vec(), fwd.tape.values(fwd.value)[0]))
    }

    /// The state encoding vector; exposed for the indexing diagnostics.
    pub fn encode_state(&self, state: &State) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let enc = self.encode(&mut tape, state)?;
        Ok(tape.values(enc).to_vec())
    }

    /// Sample an action (1-based scale) from a distribution.
    pub fn sample_action(probs: &[f64], rng: &mut ChaCha8Rng) -> u32 {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for (i, &p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return i as u32 + 1;
            }
        }
        probs.len() as u32
    }

    /// Greedy action: argmax with ties toward the smaller scale.
    pub fn greedy_action(probs: &[f64]) -> u32 {
        let mut best = 0usize;
        for i in 1..probs.len() {
            if probs[i] > probs[best] {
                best = i;
            }
        }
        best as u32 + 1
    }

    /// Recompute forwards over a batch, apply the actor-critic losses and
    /// take one SGD step. `targets` are the TD targets per transition.
    ///
    /// The advantage `target - value` is treated as a constant for the
    /// policy term; only the value head regresses toward the target.
    pub fn update(&mut self, batch: &[Transition], targets: &[f64], opt: &OptimizerConfig) -> Result<LossStats> {
        let stats = self.losses_backward(batch, targets)?;
        sgd_step(&mut self.params, opt, self.step);
        self.step += 1;
        Ok(stats)
    }

    /// Forward + backward over the batch, leaving gradients in the store
    /// (no optimizer step). Split out so tests can inspect raw gradients.
    pub fn losses_backward(&mut self, batch: &[Transition], targets: &[f64]) -> Result<LossStats> {
        if batch.is_empty() || batch.len() != targets.len() {
            return Err(Error::Dimension("empty batch or target length mismatch".into()));
        }
        let t_inv = 1.0 / batch.len() as f64;
        let mut tape = Tape::new();
        let mut policy_terms = Vec::with_capacity(batch.len());
        let mut value_terms = Vec::with_capacity(batch.len());
        let mut entropy_terms = Vec::with_capacity(batch.len());
        for (tr, &target) in batch.iter().zip(targets) {
            let enc = self.encode(&mut tape, &tr.state)?;
            let (probs, value) = self.heads(&mut tape, enc);
            let v_now = tape.values(value)[0];
            let advantage = target - v_now;
            let p_a = tape.pick(probs, (tr.action - 1) as usize);
            let log_p = tape.ln(p_a);
            policy_terms.push((log_p, -advantage * t_inv));
            let v_scalar = tape.pick(value, 0);
            let diff = tape.affine(&[(v_scalar, 1.0)], -target);
            let sq = tape.square(diff);
            value_terms.push((sq, t_inv));
            let ent = tape.entropy_vec(probs);
            entropy_terms.push((ent, t_inv));
        }
        let l_policy = tape.affine(&policy_terms, 0.0);
        let l_value = tape.affine(&value_terms, 0.0);
        let entropy = tape.affine(&entropy_terms, 0.0);
        let total = tape.affine(
            &[(l_policy, 1.0), (l_value, self.cfg.value_coef), (entropy, -self.cfg.entropy_coef)],
            0.0,
        );
        let stats = LossStats {
            policy: tape.scalar(l_policy),
            value: tape.scalar(l_value),
            entropy: tape.scalar(entropy),
        };
        self.params.zero_grads();
        tape.backward(total, &mut self.params);
        Ok(stats)
    }
}

/// Layer handles detached from the parameter store, so the same graph can
/// be rebuilt against perturbed parameters during gradient checking.
struct AgentWiring {
    backbone: Vec<(ParamId, ParamId)>,
    index_conv: (ParamId, ParamId),
    actor: [(ParamId, ParamId); 2],
    critic: [(ParamId, ParamId); 2],
    in_channels: usize,
    feature_indexing: bool,
}

impl AgentWiring {
    fn feature_hw(&self, mut h: usize, mut w: usize) -> (usize, usize) {
        for _ in &self.backbone {
            h = h.div_ceil(2);
            w = w.div_ceil(2);
        }
        (h, w)
    }

    fn encode(&self, tape: &mut Tape, store: &ParamStore, state: &State) -> Result<NodeId> {
        let thumb = &state.thumbnail;
        if thumb.channels != self.in_channels {
            return Err(Error::Dimension(format!(
                "expected {} thumbnail channels, got {}",
                self.in_channels, thumb.channels
            )));
        }
        if state.mask.height != thumb.height || state.mask.width != thumb.width {
            return Err(Error::Dimension("position mask does not match the thumbnail".into()));
        }
        if state.mask.popcount() == 0 {
            return Err(Error::Geometry("position mask is empty".into()));
        }
        let x = if self.feature_indexing {
            tape.input_raster_centered(thumb)
        } else {
            // mask rides along as an extra channel
            let mut stacked = Raster::zeros(thumb.channels + 1, thumb.height, thumb.width);
            let plane = thumb.height * thumb.width;
            stacked.data[..thumb.channels * plane].copy_from_slice(&thumb.data);
            for (i, &m) in state.mask.data.iter().enumerate() {
                stacked.data[thumb.channels * plane + i] = m as f64;
            }
            tape.input_raster_centered(&stacked)
        };
        let mut cur = x;
        for &(w, b) in &self.backbone {
            cur = tape.conv2d(store, cur, w, b, 2, 1, PadMode::Replicate);
            cur = tape.relu(cur);
        }
        let (fh, fw) = self.feature_hw(thumb.height, thumb.width);
        if self.feature_indexing {
            let down = state.mask.downsample_any(fh, fw);
            let maskf: Vec<f64> = down.data.iter().map(|&m| m as f64).collect();
            let masked = tape.mask_mul(cur, &maskf);
            let conved = tape.conv2d(store, masked, self.index_conv.0, self.index_conv.1, 1, 1, PadMode::Replicate);
            let act = tape.relu(conved);
            tape.masked_gap(act, &maskf)
        } else {
            let conved = tape.conv2d(store, cur, self.index_conv.0, self.index_conv.1, 1, 1, PadMode::Replicate);
            let act = tape.relu(conved);
            Ok(tape.gap(act))
        }
    }

    fn heads(&self, tape: &mut Tape, store: &ParamStore, encoding: NodeId) -> (NodeId, NodeId) {
        let a1 = tape.dense(store, encoding, self.actor[0].0, self.actor[0].1);
        let a1 = tape.relu(a1);
        let logits = tape.dense(store, a1, self.actor[1].0, self.actor[1].1);
        let probs = tape.softmax_vec(logits);
        let c1 = tape.dense(store, encoding, self.critic[0].0, self.critic[0].1);
        let c1 = tape.relu(c1);
        let value = tape.dense(store, c1, self.critic[1].0, self.critic[1].1);
        (probs, value)
    }
}

/// n-step TD targets over a contiguous rollout segment.
///
/// `V_tar(t) = sum_{k<m} gamma^k r_{t+k} + gamma^m V(s_{t+m})` with
/// `m = min(n, steps to segment end)`; accumulation stops at a done flag
/// with no bootstrap. `bootstrap` is the value estimate of the state right
/// after the segment and may only be `None` when the segment ends with
/// `done`.
pub fn td_targets(segment: &[Transition], gamma: f64, n: usize, bootstrap: Option<f64>) -> Result<Vec<f64>> {
    if segment.is_empty() {
        return Err(Error::Dimension("empty rollout segment".into()));
    }
    if n == 0 {
        return Err(Error::Dimension("n-step horizon must be >= 1".into()));
    }
    if !segment.last().unwrap().done && bootstrap.is_none() {
        return Err(Error::Dimension("segment does not end an episode; bootstrap value required".into()));
    }
    let len = segment.len();
    let mut targets = Vec::with_capacity(len);
    for t in 0..len {
        let mut acc = 0.0;
        let mut disc = 1.0;
        for k in 0..n {
            let idx = t + k;
            acc += disc * segment[idx].reward;
            if segment[idx].done {
                break;
            }
            disc *= gamma;
            if k + 1 == n || idx + 1 == len {
                let v = if idx + 1 < len { segment[idx + 1].value } else { bootstrap.unwrap() };
                acc += disc * v;
                break;
            }
        }
        targets.push(acc);
    }
    Ok(targets)
}

/// Loss values recomputed from stored transition fields alone (the
/// non-differentiable mirror of [`Agent::losses_backward`], used for logs
/// and tests).
pub fn a2c_losses(batch: &[Transition], targets: &[f64]) -> LossStats {
    let t_inv = 1.0 / batch.len() as f64;
    let mut policy = 0.0;
    let mut value = 0.0;
    let mut entropy = 0.0;
    for (tr, &target) in batch.iter().zip(targets) {
        let advantage = target - tr.value;
        policy += -advantage * tr.log_prob;
        value += (tr.value - target) * (tr.value - target);
        entropy += -tr.probs.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>();
    }
    LossStats { policy: policy * t_inv, value: value * t_inv, entropy: entropy * t_inv }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedStream;
    use crate::tiling::make_position_mask;
    use crate::tiling::PatchSpec;

    fn full_mask(h: usize, w: usize) -> BinaryMask {
        BinaryMask { height: h, width: w, data: vec![1; h * w] }
    }

    fn constant_state(v: f64, c: usize, hw: usize) -> State {
        let mut thumb = Raster::zeros(c, hw, hw);
        thumb.data.iter_mut().for_each(|x| *x = v);
        State { thumbnail: Arc::new(thumb), mask: full_mask(hw, hw) }
    }

    /// Thumbnail with four constant quadrants of distinct values.
    fn quadrant_state(hw: usize, corner: usize) -> State {
        let mut thumb = Raster::zeros(1, hw, hw);
        for r in 0..hw {
            for c in 0..hw {
                let q = (r >= hw / 2) as usize * 2 + (c >= hw / 2) as usize;
                thumb.set(0, r, c, [0.1, 0.4, 0.7, 1.0][q]);
            }
        }
        let (pr, pc) = [(0, 0), (0, hw / 2), (hw / 2, 0), (hw / 2, hw / 2)][corner];
        let patch = PatchSpec::new(pr * 8, pc * 8, hw * 4, hw * 4);
        let mask = make_position_mask(&patch, (hw * 8, hw * 8), (hw, hw));
        State { thumbnail: Arc::new(thumb), mask }
    }

    #[test]
    fn probabilities_sum_to_one_and_value_finite() {
        let agent = Agent::new(AgentConfig::default(), 3, 1);
        let state = constant_state(0.5, 3, 16);
        let (probs, value) = agent.policy(&state).unwrap();
        assert_eq!(probs.len(), 6);
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(value.is_finite());
    }

    #[test]
    fn fresh_agent_is_near_uniform() {
        for seed in [1, 2, 3, 4, 5] {
            let agent = Agent::new(AgentConfig::default(), 3, seed);
            let state = constant_state(0.4, 3, 32);
            let (probs, _) = agent.policy(&state).unwrap();
            let max = probs.iter().cloned().fold(f64::MIN, f64::max);
            let min = probs.iter().cloned().fold(f64::MAX, f64::min);
            assert!(max - min < 0.2, "seed {seed}: spread {}", max - min);
        }
    }

    #[test]
    fn full_mask_encoding_matches_plain_gap() {
        // with a full mask, masked pooling must equal plain pooling; verify
        // the encoding is insensitive to the indexing flag's pooling rule
        let cfg = AgentConfig::default();
        let agent = Agent::new(cfg, 2, 7);
        let state = constant_state(0.3, 2, 16);
        let enc = agent.encode_state(&state).unwrap();
        assert!(enc.iter().all(|v| v.is_finite()));
        // constant thumbnail + full mask -> every feature cell identical,
        // so masked and plain pooling agree cell-for-cell
        let masked = enc;
        let mut plain_cfg = AgentConfig::default();
        plain_cfg.feature_indexing = true;
        let agent2 = Agent::new(plain_cfg, 2, 7);
        let enc2 = agent2.encode_state(&state).unwrap();
        assert_eq!(masked, enc2);
    }

    #[test]
    fn quadrant_states_encode_distinctly() {
        let agent = Agent::new(AgentConfig { channels: vec![4, 8], ..Default::default() }, 1, 11);
        let encs: Vec<Vec<f64>> = (0..4).map(|c| agent.encode_state(&quadrant_state(16, c)).unwrap()).collect();
        for i in 0..4 {
            for j in i + 1..4 {
                let d: f64 = encs[i].iter().zip(&encs[j]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
                assert!(d > 1e-9, "corners {i} and {j} encode identically");
            }
        }
    }

    #[test]
    fn empty_mask_is_geometry_error() {
        let agent = Agent::new(AgentConfig::default(), 1, 3);
        let mut state = constant_state(0.2, 1, 16);
        state.mask.data.iter_mut().for_each(|m| *m = 0);
        assert!(matches!(agent.forward(&state), Err(Error::Geometry(_))));
    }

    #[test]
    fn td_single_step_formula() {
        let state = constant_state(0.1, 1, 8);
        let tr = Transition {
            state,
            action: 1,
            reward: 0.5,
            value: 0.3,
            log_prob: 0.0,
            probs: vec![1.0],
            done: false,
        };
        let targets = td_targets(&[tr], 0.99, 5, Some(1.0)).unwrap();
        assert!((targets[0] - 1.49).abs() < 1e-12);
    }

    #[test]
    fn td_terminal_step_is_reward() {
        let state = constant_state(0.1, 1, 8);
        let tr = Transition {
            state,
            action: 2,
            reward: -0.25,
            value: 9.0,
            log_prob: 0.0,
            probs: vec![1.0],
            done: true,
        };
        let targets = td_targets(&[tr], 0.99, 5, None).unwrap();
        assert_eq!(targets[0], -0.25);
    }

    #[test]
    fn td_gamma_zero_is_immediate_reward() {
        let state = constant_state(0.1, 1, 8);
        let mk = |reward: f64, done: bool| Transition {
            state: state.clone(),
            action: 1,
            reward,
            value: 5.0,
            log_prob: 0.0,
            probs: vec![1.0],
            done,
        };
        let seg = vec![mk(0.1, false), mk(-0.2, false), mk(0.7, true)];
        let targets = td_targets(&seg, 0.0, 3, None).unwrap();
        assert_eq!(targets, vec![0.1, -0.2, 0.7]);
    }

    #[test]
    fn td_multi_step_bootstrap_chain() {
        let state = constant_state(0.1, 1, 8);
        let mk = |reward: f64, value: f64| Transition {
            state: state.clone(),
            action: 1,
            reward,
            value,
            log_prob: 0.0,
            probs: vec![1.0],
            done: false,
        };
        let seg = vec![mk(1.0, 10.0), mk(2.0, 20.0), mk(3.0, 30.0)];
        let g = 0.5;
        let targets = td_targets(&seg, g, 2, Some(40.0)).unwrap();
        // t=0: r0 + g*r1 + g^2*V(s2) = 1 + 1 + 0.25*30
        assert!((targets[0] - 9.5).abs() < 1e-12);
        // t=1: r1 + g*r2 + g^2*bootstrap = 2 + 1.5 + 10
        assert!((targets[1] - 13.5).abs() < 1e-12);
        // t=2: r2 + g*bootstrap
        assert!((targets[2] - 23.0).abs() < 1e-12);
    }

    #[test]
    fn td_requires_bootstrap_when_not_done() {
        let state = constant_state(0.1, 1, 8);
        let tr = Transition {
            state,
            action: 1,
            reward: 0.0,
            value: 0.0,
            log_prob: 0.0,
            probs: vec![1.0],
            done: false,
        };
        assert!(td_targets(&[tr], 0.9, 3, None).is_err());
        assert!(td_targets(&[], 0.9, 3, Some(0.0)).is_err());
    }

    #[test]
    fn a2c_loss_closed_forms() {
        let state = constant_state(0.1, 1, 8);
        // zero advantage -> zero policy loss
        let tr = Transition {
            state: state.clone(),
            action: 1,
            reward: 0.0,
            value: 0.7,
            log_prob: (0.5f64).ln(),
            probs: vec![0.5, 0.5],
            done: true,
        };
        let s = a2c_losses(&[tr.clone()], &[0.7]);
        assert_eq!(s.policy, 0.0);

        // advantage 1 at pi(a) = 0.5 -> ln 2; value 1 vs target 0 -> 1.0
        let tr2 = Transition { value: 0.0, ..tr.clone() };
        let s2 = a2c_losses(&[tr2], &[1.0]);
        assert!((s2.policy - 2.0f64.ln()).abs() < 1e-12);
        let tr3 = Transition { value: 1.0, log_prob: 0.0, ..tr };
        let s3 = a2c_losses(&[tr3], &[0.0]);
        assert_eq!(s3.value, 1.0);
    }

    #[test]
    fn update_matches_pure_loss_computation() {
        let mut agent = Agent::new(
            AgentConfig { actions: 3, channels: vec![3, 4], hidden: 8, ..Default::default() },
            1,
            17,
        );
        let mut stream = SeedStream::new(3, "agent-batch");
        let batch: Vec<Transition> = (0..4)
            .map(|i| {
                let state = quadrant_state(8, i % 4);
                let (probs, value) = agent.policy(&state).unwrap();
                let action = Agent::sample_action(&probs, stream.rng());
                Transition {
                    state,
                    action,
                    reward: stream.rng().gen::<f64>() - 0.5,
                    value,
                    log_prob: probs[(action - 1) as usize].ln(),
                    probs,
                    done: i == 3,
                }
            })
            .collect();
        let targets = td_targets(&batch, 0.9, 5, None).unwrap();
        let pure = a2c_losses(&batch, &targets);
        let opt = OptimizerConfig::default();
        let stats = agent.update(&batch, &targets, &opt).unwrap();
        assert!((stats.policy - pure.policy).abs() < 1e-10);
        assert!((stats.value - pure.value).abs() < 1e-10);
        assert!((stats.entropy - pure.entropy).abs() < 1e-10);
    }

    #[test]
    fn policy_gradient_scales_with_advantage() {
        // L_policy is linear in the advantage, so scaling every advantage
        // scales the policy-only gradient by the same constant
        let make = || {
            Agent::new(
                AgentConfig {
                    actions: 3,
                    channels: vec![3, 4],
                    hidden: 8,
                    value_coef: 0.0,
                    entropy_coef: 0.0,
                    ..Default::default()
                },
                1,
                23,
            )
        };
        let mut agent = make();
        let state = quadrant_state(8, 1);
        let (probs, value) = agent.policy(&state).unwrap();
        let tr = Transition {
            state,
            action: 2,
            reward: 0.0,
            value,
            log_prob: probs[1].ln(),
            probs,
            done: true,
        };
        // targets chosen so advantage = 1 and advantage = 3
        let t1 = vec![value + 1.0];
        let t3 = vec![value + 3.0];
        agent.losses_backward(std::slice::from_ref(&tr), &t1).unwrap();
        let g1: Vec<f64> = agent.params.iter().flat_map(|p| p.tensor.grad.clone()).collect();
        let mut agent2 = make();
        agent2.losses_backward(&[tr], &t3).unwrap();
        let g3: Vec<f64> = agent2.params.iter().flat_map(|p| p.tensor.grad.clone()).collect();
        for (a, b) in g1.iter().zip(&g3) {
            assert!((3.0 * a - b).abs() <= 1e-9 * (1.0 + b.abs()), "{a} vs {b}");
        }
    }

    #[test]
    fn bandit_policy_converges_to_rewarded_action() {
        // degenerate environment: reward 1 for action k, else 0
        let k = 3u32;
        let mut agent = Agent::new(
            AgentConfig { actions: 4, channels: vec![4, 8], hidden: 16, ..Default::default() },
            1,
            31,
        );
        let opt = OptimizerConfig { lr: 0.02, momentum: 0.9, ..Default::default() };
        let mut stream = SeedStream::new(7, "bandit");
        let state = constant_state(0.5, 1, 8);
        let mut converged_at = None;
        for step in 0..5000 {
            let (probs, value) = agent.policy(&state).unwrap();
            if probs[(k - 1) as usize] > 0.9 {
                converged_at = Some(step);
                break;
            }
            let action = Agent::sample_action(&probs, stream.rng());
            let reward = if action == k { 1.0 } else { 0.0 };
            let tr = Transition {
                state: state.clone(),
                action,
                reward,
                value,
                log_prob: probs[(action - 1) as usize].ln(),
                probs,
                done: true,
            };
            let targets = td_targets(std::slice::from_ref(&tr), 0.99, 5, None).unwrap();
            agent.update(&[tr], &targets, &opt).unwrap();
        }
        assert!(converged_at.is_some(), "policy never exceeded 0.9 for the rewarded action");
    }

    #[test]
    fn gradient_check_full_agent() {
        let mut agent = Agent::new(
            AgentConfig { actions: 3, channels: vec![2, 3], hidden: 4, ..Default::default() },
            1,
            41,
        );
        let state = quadrant_state(8, 2);
        let err = agent.check_gradients(&state, 2, 0.7).unwrap();
        assert!(err <= 1e-4, "agent gradient check failed: {err}");
    }
}
