//! The three training phases and greedy mapping.
//!
//! - pretrain: the segmenter learns under uniformly random scale actions.
//! - agent: the actor-critic learns over a frozen segmenter.
//! - joint: alternating freeze blocks of `sync_interval` steps each, the
//!   segmenter block sampling its actions from the current frozen agent.
//!
//! Every phase checkpoints its parameters, optimizer state, PRNG stream
//! positions and log atomically, so an interrupted run resumed from disk
//! is bit-identical to an uninterrupted one. Logs are CSV with fixed
//! 6-decimal formatting and carry no timestamps.

use crate::agent::{td_targets, Agent, Transition};
use crate::baselines::action_map_mask;
use crate::error::{Error, Result};
use crate::io;
use crate::metrics::score;
use crate::nn::{load_checkpoint, save_checkpoint, OptimizerConfig};
use crate::rng::SeedStream;
use crate::rollout::{run_episode, Episode, EpisodeRun, RolloutPolicy, Route};
use crate::segnet::SegNet;
use crate::synthgeo::read_manifest;
use crate::tiling::{extract_context, extract_local, LabelMask, PatchSpec};
use rand::seq::SliceRandom;
use rand::Rng;
use std::collections::VecDeque;
use std::path::{Path, PathBuf};

pub const SEG_PRETRAIN: &str = "seg_pretrain.gack";
pub const SCA_AGENT: &str = "sca_agent.gack";
pub const SEG_JOINT: &str = "seg_joint.gack";
pub const SCA_JOINT: &str = "sca_joint.gack";

use super::{RunConfig, RunState};

pub struct TrainedAgent {
    pub seg: SegNet,
    pub agent: Agent,
}

pub struct TrainedJoint {
    pub seg: SegNet,
    pub agent: Agent,
}

/// In-memory CSV log whose on-disk copy is rewritten atomically at every
/// checkpoint, keeping it consistent with the saved state.
struct CsvLog {
    path: PathBuf,
    header: &'static str,
    rows: Vec<String>,
}

impl CsvLog {
    fn new(path: PathBuf, header: &'static str) -> Self {
        CsvLog { path, header, rows: Vec::new() }
    }

    fn resume(&mut self) -> Result<()> {
        if !self.path.exists() {
            return Ok(());
        }
        let text = std::fs::read_to_string(&self.path).map_err(|e| Error::io(&self.path, e))?;
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h == self.header => {}
            _ => return Err(Error::format(&self.path, "unexpected log header")),
        }
        self.rows = lines.map(str::to_string).collect();
        Ok(())
    }

    fn row(&mut self, line: String) {
        self.rows.push(line);
    }

    fn flush(&self) -> Result<()> {
        let mut text = String::with_capacity(16 + self.rows.len() * 32);
        text.push_str(self.header);
        text.push('\n');
        for r in &self.rows {
            text.push_str(r);
            text.push('\n');
        }
        io::atomic_write(&self.path, text.as_bytes())
    }
}

/// Load every scene in the training manifest as an episode.
fn load_scenes(cfg: &RunConfig) -> Result<Vec<Episode>> {
    let manifest = cfg
        .manifest
        .as_ref()
        .ok_or_else(|| Error::Config("config is missing the 'manifest' key".into()))?;
    let entries = read_manifest(manifest)?;
    if entries.is_empty() {
        return Err(Error::Config(format!("{}: manifest lists no scenes", manifest.display())));
    }
    entries
        .iter()
        .map(|e| {
            let raster = io::read_raster(&e.raster_path)?;
            let labels = io::read_labels(&e.label_path, cfg.classes)?;
            Episode::new(raster, labels, (cfg.patch_h, cfg.patch_w), (cfg.thumb_h, cfg.thumb_w))
        })
        .collect()
}

fn require_checkpoint(explicit: &Option<PathBuf>, out_dir: &Path, default_name: &str, what: &str) -> Result<PathBuf> {
    let path = explicit.clone().unwrap_or_else(|| out_dir.join(default_name));
    if !path.exists() {
        return Err(Error::Config(format!("missing {what} checkpoint at {}", path.display())));
    }
    Ok(path)
}

/// Labels over the context footprint, majority-downsampled to patch size.
fn context_labels(ep: &Episode, patch: &PatchSpec, a: u32) -> Result<LabelMask> {
    let labels = ep
        .labels
        .as_ref()
        .ok_or_else(|| Error::Config("training scenes must carry labels".into()))?;
    let window = labels.window_replicated(
        // same placement the context extraction used
        crate::tiling::context_window_origin(patch, a, ep.raster.height, ep.raster.width).0,
        crate::tiling::context_window_origin(patch, a, ep.raster.height, ep.raster.width).1,
        patch.h * a as usize,
        patch.w * a as usize,
    );
    window.majority_downsample(a as usize)
}

/// One supervised segmenter step on a random (scene, patch, action) draw.
fn seg_train_step(
    seg: &mut SegNet,
    ep: &Episode,
    patch_idx: usize,
    action: u32,
    opt: &OptimizerConfig,
) -> Result<f64> {
    let patch = ep.grid.patches[patch_idx].with_scale(action);
    let x_loc = extract_local(&ep.raster, &patch)?;
    let labels = ep
        .labels
        .as_ref()
        .ok_or_else(|| Error::Config("training scenes must carry labels".into()))?;
    let y_patch = labels.window_replicated(patch.row as i64, patch.col as i64, patch.h, patch.w);
    if action > 1 {
        let x_ctx = extract_context(&ep.raster, &patch, action)?;
        let y_ctx = context_labels(ep, &patch, action)?;
        seg.train_step(&x_loc, Some(&x_ctx), &patch, &y_patch, Some(&y_ctx), opt)
    } else {
        seg.train_step(&x_loc, None, &patch, &y_patch, None, opt)
    }
}

/// Shuffled scene order for one epoch, derived from the seed and epoch
/// index so a resumed run recreates it without replaying the stream.
fn epoch_order(seed: u64, label: &str, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut stream = SeedStream::with_index(seed, label, epoch as u64);
    order.shuffle(stream.rng());
    order
}

/// Pretrain the segmenter with uniformly random scale actions.
pub fn pretrain(cfg: &RunConfig, resume: bool) -> Result<SegNet> {
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    let scenes = load_scenes(cfg)?;
    let mut seg = SegNet::new(cfg.segnet_config(), cfg.in_channels, cfg.seed);
    let mut stream = SeedStream::new(cfg.seed, "pretrain");
    let mut log = CsvLog::new(cfg.out_dir.join("pretrain_log.csv"), "step,loss");
    let state_path = cfg.out_dir.join("pretrain_state.txt");
    let ckpt_path = cfg.out_dir.join(SEG_PRETRAIN);
    let mut start = 0usize;

    if resume && state_path.exists() {
        let st = RunState::load(&state_path)?;
        if st.phase != "pretrain" {
            return Err(Error::Config(format!("state at {} is for phase '{}'", state_path.display(), st.phase)));
        }
        load_checkpoint(&ckpt_path, &mut seg.params)?;
        seg.set_optimizer_step(st.seg_opt_step);
        stream = SeedStream::restore(&st.streams["pretrain"]);
        log.resume()?;
        start = st.step;
    }

    let opt = cfg.seg_optimizer();
    let save = |seg: &SegNet, stream: &SeedStream, step: usize, log: &CsvLog| -> Result<()> {
        save_checkpoint(&ckpt_path, &seg.params)?;
        let mut st = RunState::new("pretrain");
        st.step = step;
        st.seg_opt_step = seg.optimizer_step();
        st.streams.insert("pretrain".into(), stream.save());
        st.save(&state_path)?;
        log.flush()
    };

    if start >= cfg.pretrain_steps {
        save(&seg, &stream, start, &log)?;
        return Ok(seg);
    }
    for step in start..cfg.pretrain_steps {
        let scene_i = stream.rng().gen_range(0..scenes.len());
        let patch_i = stream.rng().gen_range(0..scenes[scene_i].len());
        let action = stream.rng().gen_range(1..=cfg.actions as u32);
        let loss = seg_train_step(&mut seg, &scenes[scene_i], patch_i, action, &opt)?;
        log.row(format!("{},{loss:.6}", step + 1));
        if (step + 1) % cfg.checkpoint_interval == 0 {
            save(&seg, &stream, step + 1, &log)?;
        }
    }
    save(&seg, &stream, cfg.pretrain_steps, &log)?;
    Ok(seg)
}

/// Rolling window of completed-episode rewards for the log column.
struct RewardWindow {
    window: VecDeque<f64>,
}

impl RewardWindow {
    fn new() -> Self {
        RewardWindow { window: VecDeque::new() }
    }

    fn push(&mut self, r: f64) {
        if self.window.len() == 10 {
            self.window.pop_front();
        }
        self.window.push_back(r);
    }

    fn mean(&self) -> f64 {
        if self.window.is_empty() {
            0.0
        } else {
            self.window.iter().sum::<f64>() / self.window.len() as f64
        }
    }
}

/// A2C updates every `n_step` transitions over full episodes; returns the
/// number of env steps executed.
#[allow(clippy::too_many_arguments)]
fn agent_episode(
    seg: &SegNet,
    agent: &mut Agent,
    ep: &Episode,
    opt: &OptimizerConfig,
    n_step: usize,
    gamma: f64,
    actions_stream: &mut SeedStream,
    steps_before: usize,
    rewards: &mut RewardWindow,
    log: &mut CsvLog,
) -> Result<usize> {
    let mut run = EpisodeRun::new(ep, seg);
    let mut pending: Vec<Transition> = Vec::with_capacity(n_step);
    let len = ep.len();
    while !run.done() {
        let state = run.state();
        let (probs, value) = agent.policy(&state)?;
        let action = Agent::sample_action(&probs, actions_stream.rng());
        let log_prob = probs[(action - 1) as usize].ln();
        let tr = run.step(action, Route::DualBranch, value, log_prob, probs)?;
        pending.push(tr);
        if pending.len() == n_step && !run.done() {
            let bootstrap = agent.policy(&run.state())?.1;
            let targets = td_targets(&pending, gamma, n_step, Some(bootstrap))?;
            let stats = agent.update(&pending, &targets, opt)?;
            log.row(format!(
                "{},{:.6},{:.6},{:.6},{:.6}",
                steps_before + run.t(),
                rewards.mean(),
                stats.policy,
                stats.value,
                stats.entropy
            ));
            pending.clear();
        }
    }
    // terminal flush carries the map bonus added by finish()
    let result = run.finish(std::mem::take(&mut pending))?;
    rewards.push(result.total_reward);
    if !result.transitions.is_empty() {
        let targets = td_targets(&result.transitions, gamma, n_step, None)?;
        let stats = agent.update(&result.transitions, &targets, opt)?;
        log.row(format!(
            "{},{:.6},{:.6},{:.6},{:.6}",
            steps_before + len,
            rewards.mean(),
            stats.policy,
            stats.value,
            stats.entropy
        ));
    }
    Ok(len)
}

/// Train the scale-control agent over a frozen pretrained segmenter.
pub fn train_agent(cfg: &RunConfig, resume: bool) -> Result<TrainedAgent> {
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    let scenes = load_scenes(cfg)?;
    let seg_path = require_checkpoint(&cfg.seg_checkpoint, &cfg.out_dir, SEG_PRETRAIN, "segmenter")?;
    let mut seg = SegNet::new(cfg.segnet_config(), cfg.in_channels, cfg.seed);
    load_checkpoint(&seg_path, &mut seg.params)?;

    let mut agent = Agent::new(cfg.agent_config(), cfg.in_channels, cfg.seed);
    let mut actions_stream = SeedStream::new(cfg.seed, "agent-actions");
    let mut log = CsvLog::new(
        cfg.out_dir.join("agent_log.csv"),
        "step,mean_episode_reward,policy_loss,value_loss,entropy",
    );
    let state_path = cfg.out_dir.join("agent_state.txt");
    let ckpt_path = cfg.out_dir.join(SCA_AGENT);
    let mut steps_done = 0usize;
    let mut episodes_done = 0usize;

    if resume && state_path.exists() {
        let st = RunState::load(&state_path)?;
        if st.phase != "agent" {
            return Err(Error::Config(format!("state at {} is for phase '{}'", state_path.display(), st.phase)));
        }
        load_checkpoint(&ckpt_path, &mut agent.params)?;
        agent.set_optimizer_step(st.agent_opt_step);
        actions_stream = SeedStream::restore(&st.streams["agent-actions"]);
        log.resume()?;
        steps_done = st.step;
        episodes_done = st.episode;
    }

    let frozen_seg_checksum = seg.params.checksum();
    let opt = cfg.agent_optimizer();
    let mut rewards = RewardWindow::new();
    let mut last_save = steps_done;
    let save = |agent: &Agent, stream: &SeedStream, steps: usize, episodes: usize, log: &CsvLog| -> Result<()> {
        save_checkpoint(&ckpt_path, &agent.params)?;
        let mut st = RunState::new("agent");
        st.step = steps;
        st.episode = episodes;
        st.agent_opt_step = agent.optimizer_step();
        st.streams.insert("agent-actions".into(), stream.save());
        st.save(&state_path)?;
        log.flush()
    };

    while steps_done < cfg.agent_steps {
        let epoch = episodes_done / scenes.len();
        let order = epoch_order(cfg.seed, "agent-epoch", epoch, scenes.len());
        let scene_idx = order[episodes_done % scenes.len()];
        let steps = agent_episode(
            &seg,
            &mut agent,
            &scenes[scene_idx],
            &opt,
            cfg.n_step,
            cfg.gamma,
            &mut actions_stream,
            steps_done,
            &mut rewards,
            &mut log,
        )?;
        steps_done += steps;
        episodes_done += 1;
        if steps_done - last_save >= cfg.checkpoint_interval {
            save(&agent, &actions_stream, steps_done, episodes_done, &log)?;
            last_save = steps_done;
        }
    }
    save(&agent, &actions_stream, steps_done, episodes_done, &log)?;
    debug_assert_eq!(frozen_seg_checksum, seg.params.checksum());
    Ok(TrainedAgent { seg, agent })
}

/// Alternate segmenter and agent blocks of `sync_interval` steps until the
/// joint budget is spent. The non-active component is frozen within each
/// block; the segmenter block samples its actions from the frozen agent.
pub fn train_joint(cfg: &RunConfig, resume: bool) -> Result<TrainedJoint> {
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    let scenes = load_scenes(cfg)?;
    let seg_path = require_checkpoint(&cfg.seg_checkpoint, &cfg.out_dir, SEG_PRETRAIN, "segmenter")?;
    let agent_path = require_checkpoint(&cfg.agent_checkpoint, &cfg.out_dir, SCA_AGENT, "agent")?;
    let mut seg = SegNet::new(cfg.segnet_config(), cfg.in_channels, cfg.seed);
    let mut agent = Agent::new(cfg.agent_config(), cfg.in_channels, cfg.seed);

    let seg_ckpt = cfg.out_dir.join(SEG_JOINT);
    let sca_ckpt = cfg.out_dir.join(SCA_JOINT);
    let state_path = cfg.out_dir.join("joint_state.txt");
    let mut seg_log = CsvLog::new(cfg.out_dir.join("joint_seg_log.csv"), "step,loss");
    let mut agent_log = CsvLog::new(
        cfg.out_dir.join("joint_agent_log.csv"),
        "step,mean_episode_reward,policy_loss,value_loss,entropy",
    );
    let mut seg_stream = SeedStream::new(cfg.seed, "joint-seg");
    let mut seg_action_stream = SeedStream::new(cfg.seed, "joint-seg-actions");
    let mut agent_action_stream = SeedStream::new(cfg.seed, "joint-agent-actions");

    let mut steps_done = 0usize;
    let mut episodes_done = 0usize;
    let mut block = 0usize;

    if resume && state_path.exists() {
        let st = RunState::load(&state_path)?;
        if st.phase != "joint" {
            return Err(Error::Config(format!("state at {} is for phase '{}'", state_path.display(), st.phase)));
        }
        load_checkpoint(&seg_ckpt, &mut seg.params)?;
        load_checkpoint(&sca_ckpt, &mut agent.params)?;
        seg.set_optimizer_step(st.seg_opt_step);
        agent.set_optimizer_step(st.agent_opt_step);
        seg_stream = SeedStream::restore(&st.streams["joint-seg"]);
        seg_action_stream = SeedStream::restore(&st.streams["joint-seg-actions"]);
        agent_action_stream = SeedStream::restore(&st.streams["joint-agent-actions"]);
        seg_log.resume()?;
        agent_log.resume()?;
        steps_done = st.step;
        episodes_done = st.episode;
        block = st.block;
    } else {
        load_checkpoint(&seg_path, &mut seg.params)?;
        load_checkpoint(&agent_path, &mut agent.params)?;
    }

    let seg_opt = cfg.seg_optimizer();
    let agent_opt = cfg.agent_optimizer();
    let mut rewards = RewardWindow::new();

    while steps_done < cfg.joint_steps {
        let budget = cfg.sync_interval.min(cfg.joint_steps - steps_done);
        if block % 2 == 0 {
            // segmenter block: actions sampled from the frozen agent
            let agent_checksum = agent.params.checksum();
            for _ in 0..budget {
                let scene_i = seg_stream.rng().gen_range(0..scenes.len());
                let patch_i = seg_stream.rng().gen_range(0..scenes[scene_i].len());
                let state = scenes[scene_i].state_at(patch_i);
                let (probs, _) = agent.policy(&state)?;
                let action = Agent::sample_action(&probs, seg_action_stream.rng());
                let loss = seg_train_step(&mut seg, &scenes[scene_i], patch_i, action, &seg_opt)?;
                steps_done += 1;
                seg_log.row(format!("{steps_done},{loss:.6}"));
            }
            debug_assert_eq!(agent_checksum, agent.params.checksum());
        } else {
            // agent block: frozen segmenter, whole episodes
            let seg_checksum = seg.params.checksum();
            let mut block_steps = 0usize;
            while block_steps < budget {
                let epoch = episodes_done / scenes.len();
                let order = epoch_order(cfg.seed, "joint-epoch", epoch, scenes.len());
                let scene_idx = order[episodes_done % scenes.len()];
                let steps = agent_episode(
                    &seg,
                    &mut agent,
                    &scenes[scene_idx],
                    &agent_opt,
                    cfg.n_step,
                    cfg.gamma,
                    &mut agent_action_stream,
                    steps_done + block_steps,
                    &mut rewards,
                    &mut agent_log,
                )?;
                block_steps += steps;
                episodes_done += 1;
            }
            steps_done += block_steps;
            debug_assert_eq!(seg_checksum, seg.params.checksum());
        }
        block += 1;

        save_checkpoint(&seg_ckpt, &seg.params)?;
        save_checkpoint(&sca_ckpt, &agent.params)?;
        let mut st = RunState::new("joint");
        st.step = steps_done;
        st.episode = episodes_done;
        st.block = block;
        st.seg_opt_step = seg.optimizer_step();
        st.agent_opt_step = agent.optimizer_step();
        st.streams.insert("joint-seg".into(), seg_stream.save());
        st.streams.insert("joint-seg-actions".into(), seg_action_stream.save());
        st.streams.insert("joint-agent-actions".into(), agent_action_stream.save());
        st.save(&state_path)?;
        seg_log.flush()?;
        agent_log.flush()?;
    }
    Ok(TrainedJoint { seg, agent })
}

pub struct MapOutput {
    pub prediction_path: PathBuf,
    pub action_map_path: PathBuf,
    /// (miou+mf1) score against labels, when labels were provided.
    pub score: Option<f64>,
}

/// Greedy rollout over one raster: stitched label map plus the action map,
/// both written under the output directory.
pub fn map_image(cfg: &RunConfig, raster_path: &Path, label_path: Option<&Path>) -> Result<MapOutput> {
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    let seg_path = require_checkpoint(&cfg.seg_checkpoint, &cfg.out_dir, SEG_JOINT, "segmenter")?;
    let agent_path = require_checkpoint(&cfg.agent_checkpoint, &cfg.out_dir, SCA_JOINT, "agent")?;
    let mut seg = SegNet::new(cfg.segnet_config(), cfg.in_channels, cfg.seed);
    load_checkpoint(&seg_path, &mut seg.params)?;
    let mut agent = Agent::new(cfg.agent_config(), cfg.in_channels, cfg.seed);
    load_checkpoint(&agent_path, &mut agent.params)?;

    let raster = io::read_raster_any(raster_path)?;
    let ep = match label_path {
        Some(lp) => {
            let labels = io::read_labels_any(lp, cfg.classes)?;
            Episode::new(raster, labels, (cfg.patch_h, cfg.patch_w), (cfg.thumb_h, cfg.thumb_w))?
        }
        None => Episode::unlabeled(raster, (cfg.patch_h, cfg.patch_w), (cfg.thumb_h, cfg.thumb_w))?,
    };
    let out = run_episode(&ep, &seg, &RolloutPolicy::AgentGreedy(&agent), None)?;

    let stem = raster_path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("raster")
        .trim_end_matches(".raster")
        .to_string();
    let prediction_path = cfg.out_dir.join(format!("{stem}_pred.gatn"));
    let action_map_path = cfg.out_dir.join(format!("{stem}_actions.pgm"));
    io::write_labels(&prediction_path, &out.stitched)?;
    let amap = action_map_mask(&ep.grid, &out.actions, cfg.actions);
    io::write_pixmap_labels(&action_map_path, &amap)?;
    let score = match &ep.labels {
        Some(labels) => Some(score(labels, &out.stitched)?),
        None => None,
    };
    Ok(MapOutput { prediction_path, action_map_path, score })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgeo::{generate_dataset, SceneConfig};

    /// Small dataset + config for fast phase tests.
    fn setup(dir: &Path, pretrain_steps: usize, agent_steps: usize, joint_steps: usize) -> RunConfig {
        let scene_cfg = SceneConfig {
            height: 224,
            width: 224,
            patch_hint: 32,
            ponds: (1, 2),
            rivers: (1, 1),
            built: (0, 1),
            noise_amp: 0.06,
            seed: 21,
            channels: 3,
        };
        let data_dir = dir.join("data");
        generate_dataset(&scene_cfg, 3, &data_dir).unwrap();
        RunConfig {
            manifest: Some(data_dir.join("manifest.tsv")),
            out_dir: dir.join("out"),
            seed: 21,
            patch_h: 32,
            patch_w: 32,
            thumb_h: 32,
            thumb_w: 32,
            seg_channels: vec![4, 8],
            fusion_channels: 8,
            agent_channels: vec![4, 8],
            agent_hidden: 16,
            actions: 4,
            pretrain_steps,
            agent_steps,
            joint_steps,
            sync_interval: 8,
            checkpoint_interval: 10,
            ..RunConfig::default()
        }
    }

    #[test]
    fn zero_step_pretrain_equals_initialization() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = setup(dir.path(), 0, 0, 0);
        let seg = pretrain(&cfg, false).unwrap();
        let fresh = SegNet::new(cfg.segnet_config(), cfg.in_channels, cfg.seed);
        assert_eq!(seg.params.checksum(), fresh.params.checksum());
        assert!(cfg.out_dir.join(SEG_PRETRAIN).exists());
        let log = std::fs::read_to_string(cfg.out_dir.join("pretrain_log.csv")).unwrap();
        assert_eq!(log, "step,loss\n");
    }

    #[test]
    fn pretrain_is_seed_deterministic() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let c1 = setup(d1.path(), 12, 0, 0);
        let c2 = setup(d2.path(), 12, 0, 0);
        let s1 = pretrain(&c1, false).unwrap();
        let s2 = pretrain(&c2, false).unwrap();
        assert_eq!(s1.params.checksum(), s2.params.checksum());
        let l1 = std::fs::read(c1.out_dir.join("pretrain_log.csv")).unwrap();
        let l2 = std::fs::read(c2.out_dir.join("pretrain_log.csv")).unwrap();
        assert_eq!(l1, l2);
    }

    #[test]
    fn pretrain_resume_matches_uninterrupted() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        // interrupted at 10 (a checkpoint boundary), then resumed to 20
        let c_short = setup(d1.path(), 10, 0, 0);
        pretrain(&c_short, false).unwrap();
        let c_full1 = RunConfig { pretrain_steps: 20, ..c_short.clone() };
        let resumed = pretrain(&c_full1, true).unwrap();
        // fresh uninterrupted 20 steps
        let c_full2 = setup(d2.path(), 20, 0, 0);
        let fresh = pretrain(&c_full2, false).unwrap();
        assert_eq!(resumed.params.checksum(), fresh.params.checksum());
        let a = std::fs::read(c_full1.out_dir.join(SEG_PRETRAIN)).unwrap();
        let b = std::fs::read(c_full2.out_dir.join(SEG_PRETRAIN)).unwrap();
        assert_eq!(a, b, "checkpoint bytes differ after resume");
        let la = std::fs::read(c_full1.out_dir.join("pretrain_log.csv")).unwrap();
        let lb = std::fs::read(c_full2.out_dir.join("pretrain_log.csv")).unwrap();
        assert_eq!(la, lb, "logs differ after resume");
    }

    #[test]
    fn agent_phase_freezes_segmenter_and_learns() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = setup(dir.path(), 5, 40, 0);
        let seg = pretrain(&cfg, false).unwrap();
        let before = seg.params.checksum();
        let trained = train_agent(&cfg, false).unwrap();
        assert_eq!(trained.seg.params.checksum(), before, "segmenter must stay frozen");
        // agent actually updated
        let fresh = Agent::new(cfg.agent_config(), cfg.in_channels, cfg.seed);
        assert_ne!(trained.agent.params.checksum(), fresh.params.checksum());
        let log = std::fs::read_to_string(cfg.out_dir.join("agent_log.csv")).unwrap();
        assert!(log.lines().count() > 1);
    }

    #[test]
    fn train_agent_requires_pretrained_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = setup(dir.path(), 5, 10, 0);
        match train_agent(&cfg, false) {
            Err(Error::Config(msg)) => assert!(msg.contains("checkpoint")),
            _ => panic!("expected a configuration error"),
        }
    }

    #[test]
    fn joint_interval_covering_budget_runs_single_seg_block() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = setup(dir.path(), 4, 20, 6);
        cfg.sync_interval = 100; // >= joint budget
        pretrain(&cfg, false).unwrap();
        let before_agent = train_agent(&cfg, false).unwrap();
        let agent_checksum = before_agent.agent.params.checksum();
        let seg_checksum = before_agent.seg.params.checksum();
        let joint = train_joint(&cfg, false).unwrap();
        // one segmenter block only: the agent never trains in joint
        assert_eq!(joint.agent.params.checksum(), agent_checksum);
        assert_ne!(joint.seg.params.checksum(), seg_checksum);
        let agent_log = std::fs::read_to_string(cfg.out_dir.join("joint_agent_log.csv")).unwrap();
        assert_eq!(agent_log.lines().count(), 1, "agent log should be header only");
    }

    #[test]
    fn joint_alternates_and_resumes_bit_exact() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let prep = |dir: &Path, joint_steps: usize| -> RunConfig {
            let cfg = setup(dir, 4, 20, joint_steps);
            pretrain(&cfg, false).unwrap();
            train_agent(&cfg, false).unwrap();
            cfg
        };
        // interrupted after the first blocks (budget 20), resumed to 40
        let c1 = prep(d1.path(), 20);
        train_joint(&c1, false).unwrap();
        let c1_full = RunConfig { joint_steps: 40, ..c1.clone() };
        train_joint(&c1_full, true).unwrap();
        // uninterrupted 40
        let c2 = prep(d2.path(), 40);
        train_joint(&c2, false).unwrap();
        for name in [SEG_JOINT, SCA_JOINT, "joint_seg_log.csv", "joint_agent_log.csv"] {
            let a = std::fs::read(c1.out_dir.join(name)).unwrap();
            let b = std::fs::read(c2.out_dir.join(name)).unwrap();
            assert_eq!(a, b, "{name} differs between resumed and uninterrupted runs");
        }
    }

    #[test]
    fn map_image_writes_deterministic_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = setup(dir.path(), 4, 12, 8);
        pretrain(&cfg, false).unwrap();
        train_agent(&cfg, false).unwrap();
        train_joint(&cfg, false).unwrap();
        let entries = read_manifest(cfg.manifest.as_ref().unwrap()).unwrap();
        let out1 = map_image(&cfg, &entries[0].raster_path, Some(&entries[0].label_path)).unwrap();
        let pred1 = std::fs::read(&out1.prediction_path).unwrap();
        let act1 = std::fs::read(&out1.action_map_path).unwrap();
        let out2 = map_image(&cfg, &entries[0].raster_path, Some(&entries[0].label_path)).unwrap();
        assert_eq!(pred1, std::fs::read(&out2.prediction_path).unwrap());
        assert_eq!(act1, std::fs::read(&out2.action_map_path).unwrap());
        assert!(out1.score.unwrap() > 0.0);
        // prediction has the raster's dimensions
        let pred = io::read_labels(&out1.prediction_path, cfg.classes).unwrap();
        assert_eq!((pred.height, pred.width), (224, 224));
    }
}
