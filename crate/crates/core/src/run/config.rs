//! Flat `key = value` run configuration.
//!
//! The format is plain UTF-8 text: one `key = value` per line, `#` starts
//! a comment, blank lines ignored. Unknown keys are errors so typos
//! surface immediately.

use crate::agent::AgentConfig;
use crate::error::{Error, Result};
use crate::nn::OptimizerConfig;
use crate::segnet::SegNetConfig;
use crate::synthgeo::SceneConfig;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

#[derive(Debug, Clone)]
pub struct RunConfig {
    /// Training dataset manifest.
    pub manifest: Option<PathBuf>,
    /// Held-out dataset manifest for evaluation commands.
    pub test_manifest: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub seed: u64,
    pub in_channels: usize,
    pub classes: usize,
    pub patch_h: usize,
    pub patch_w: usize,
    pub thumb_h: usize,
    pub thumb_w: usize,
    pub seg_channels: Vec<usize>,
    pub fusion_channels: usize,
    pub aux_weight: f64,
    pub actions: usize,
    pub gamma: f64,
    pub n_step: usize,
    pub value_coef: f64,
    pub entropy_coef: f64,
    pub feature_indexing: bool,
    pub agent_channels: Vec<usize>,
    pub agent_hidden: usize,
    pub lr: f64,
    pub agent_lr: f64,
    pub momentum: f64,
    pub lr_decay: f64,
    pub lr_decay_steps: usize,
    pub pretrain_steps: usize,
    pub agent_steps: usize,
    pub joint_steps: usize,
    pub sync_interval: usize,
    pub checkpoint_interval: usize,
    pub random_seeds: usize,
    pub policies: Vec<String>,
    pub seg_checkpoint: Option<PathBuf>,
    pub agent_checkpoint: Option<PathBuf>,
    // scene generation
    pub scene_height: usize,
    pub scene_width: usize,
    pub ponds_min: usize,
    pub ponds_max: usize,
    pub rivers_min: usize,
    pub rivers_max: usize,
    pub built_min: usize,
    pub built_max: usize,
    pub noise_amp: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            manifest: None,
            test_manifest: None,
            out_dir: PathBuf::from("runs/out"),
            seed: 42,
            in_channels: 3,
            classes: 4,
            patch_h: 64,
            patch_w: 64,
            thumb_h: 64,
            thumb_w: 64,
            seg_channels: vec![16, 32, 64],
            fusion_channels: 64,
            aux_weight: 0.4,
            actions: 6,
            gamma: 0.99,
            n_step: 5,
            value_coef: 0.5,
            entropy_coef: 0.0,
            feature_indexing: true,
            agent_channels: vec![8, 16, 32],
            agent_hidden: 64,
            lr: 0.001,
            agent_lr: 0.001,
            momentum: 0.9,
            lr_decay: 1.0,
            lr_decay_steps: 0,
            pretrain_steps: 3000,
            agent_steps: 3000,
            joint_steps: 2000,
            sync_interval: 100,
            checkpoint_interval: 500,
            random_seeds: 5,
            policies: vec![
                "local".into(),
                "context-2".into(),
                "context-4".into(),
                "context-6".into(),
                "fixed-2".into(),
                "fixed-4".into(),
                "fixed-6".into(),
                "random".into(),
                "single-branch".into(),
                "learned".into(),
                "oracle".into(),
            ],
            seg_checkpoint: None,
            agent_checkpoint: None,
            scene_height: 512,
            scene_width: 512,
            ponds_min: 14,
            ponds_max: 18,
            rivers_min: 1,
            rivers_max: 1,
            built_min: 2,
            built_max: 4,
            noise_amp: 0.06,
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_str_source(&text, path)
    }

    pub fn from_str_source(text: &str, origin: &Path) -> Result<RunConfig> {
        let dir = origin.parent().unwrap_or_else(|| Path::new("."));
        let mut kv = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("{}:{}: expected 'key = value'", origin.display(), lineno + 1))
            })?;
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            if kv.insert(key.clone(), value).is_some() {
                return Err(Error::Config(format!(
                    "{}:{}: duplicate key '{key}'",
                    origin.display(),
                    lineno + 1
                )));
            }
        }
        let mut cfg = RunConfig::default();
        let mut kv = Kv { map: kv, origin: origin.to_path_buf() };
        let path_of = |s: String| -> PathBuf {
            let p = PathBuf::from(s);
            if p.is_absolute() {
                p
            } else {
                dir.join(p)
            }
        };
        if let Some(v) = kv.take("manifest") {
            cfg.manifest = Some(path_of(v));
        }
        if let Some(v) = kv.take("test_manifest") {
            cfg.test_manifest = Some(path_of(v));
        }
        if let Some(v) = kv.take("out_dir") {
            cfg.out_dir = path_of(v);
        }
        if let Some(v) = kv.take("seg_checkpoint") {
            cfg.seg_checkpoint = Some(path_of(v));
        }
        if let Some(v) = kv.take("agent_checkpoint") {
            cfg.agent_checkpoint = Some(path_of(v));
        }
        kv.parse_into("seed", &mut cfg.seed)?;
        kv.parse_into("in_channels", &mut cfg.in_channels)?;
        kv.parse_into("classes", &mut cfg.classes)?;
        kv.parse_into("patch_h", &mut cfg.patch_h)?;
        kv.parse_into("patch_w", &mut cfg.patch_w)?;
        kv.parse_into("thumb_h", &mut cfg.thumb_h)?;
        kv.parse_into("thumb_w", &mut cfg.thumb_w)?;
        kv.parse_list("seg_channels", &mut cfg.seg_channels)?;
        kv.parse_into("fusion_channels", &mut cfg.fusion_channels)?;
        kv.parse_into("aux_weight", &mut cfg.aux_weight)?;
        kv.parse_into("actions", &mut cfg.actions)?;
        kv.parse_into("gamma", &mut cfg.gamma)?;
        kv.parse_into("n_step", &mut cfg.n_step)?;
        kv.parse_into("value_coef", &mut cfg.value_coef)?;
        kv.parse_into("entropy_coef", &mut cfg.entropy_coef)?;
        kv.parse_into("feature_indexing", &mut cfg.feature_indexing)?;
        kv.parse_list("agent_channels", &mut cfg.agent_channels)?;
        kv.parse_into("agent_hidden", &mut cfg.agent_hidden)?;
        kv.parse_into("lr", &mut cfg.lr)?;
        cfg.agent_lr = cfg.lr;
        kv.parse_into("agent_lr", &mut cfg.agent_lr)?;
        kv.parse_into("momentum", &mut cfg.momentum)?;
        kv.parse_into("lr_decay", &mut cfg.lr_decay)?;
        kv.parse_into("lr_decay_steps", &mut cfg.lr_decay_steps)?;
        kv.parse_into("pretrain_steps", &mut cfg.pretrain_steps)?;
        kv.parse_into("agent_steps", &mut cfg.agent_steps)?;
        kv.parse_into("joint_steps", &mut cfg.joint_steps)?;
        kv.parse_into("sync_interval", &mut cfg.sync_interval)?;
        kv.parse_into("checkpoint_interval", &mut cfg.checkpoint_interval)?;
        kv.parse_into("random_seeds", &mut cfg.random_seeds)?;
        if let Some(v) = kv.take("policies") {
            cfg.policies = v.split(',').map(|s| s.trim().to_string()).collect();
        }
        kv.parse_into("scene_height", &mut cfg.scene_height)?;
        kv.parse_into("scene_width", &mut cfg.scene_width)?;
        kv.parse_into("ponds_min", &mut cfg.ponds_min)?;
        kv.parse_into("ponds_max", &mut cfg.ponds_max)?;
        kv.parse_into("rivers_min", &mut cfg.rivers_min)?;
        kv.parse_into("rivers_max", &mut cfg.rivers_max)?;
        kv.parse_into("built_min", &mut cfg.built_min)?;
        kv.parse_into("built_max", &mut cfg.built_max)?;
        kv.parse_into("noise_amp", &mut cfg.noise_amp)?;
        kv.finish()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.sync_interval == 0 {
            return Err(Error::Config("sync_interval must be >= 1".into()));
        }
        if self.checkpoint_interval == 0 {
            return Err(Error::Config("checkpoint_interval must be >= 1".into()));
        }
        let stride = 1usize << self.seg_channels.len();
        if self.patch_h % stride != 0 || self.patch_w % stride != 0 {
            return Err(Error::Config(format!(
                "patch {}x{} not divisible by encoder stride {stride}",
                self.patch_h, self.patch_w
            )));
        }
        self.agent_config().validate()?;
        Ok(())
    }

    /// CLI overrides.
    pub fn with_overrides(mut self, seed: Option<u64>, out: Option<PathBuf>) -> Self {
        if let Some(s) = seed {
            self.seed = s;
        }
        if let Some(o) = out {
            self.out_dir = o;
        }
        self
    }

    pub fn segnet_config(&self) -> SegNetConfig {
        SegNetConfig {
            classes: self.classes,
            channels: self.seg_channels.clone(),
            fusion_channels: self.fusion_channels,
            aux_weight: self.aux_weight,
        }
    }

    pub fn agent_config(&self) -> AgentConfig {
        AgentConfig {
            actions: self.actions,
            gamma: self.gamma,
            n_step: self.n_step,
            value_coef: self.value_coef,
            entropy_coef: self.entropy_coef,
            feature_indexing: self.feature_indexing,
            channels: self.agent_channels.clone(),
            hidden: self.agent_hidden,
        }
    }

    pub fn seg_optimizer(&self) -> OptimizerConfig {
        OptimizerConfig {
            lr: self.lr,
            momentum: self.momentum,
            decay_factor: self.lr_decay,
            decay_every: self.lr_decay_steps,
        }
    }

    pub fn agent_optimizer(&self) -> OptimizerConfig {
        OptimizerConfig {
            lr: self.agent_lr,
            momentum: self.momentum,
            decay_factor: self.lr_decay,
            decay_every: self.lr_decay_steps,
        }
    }

    pub fn scene_config(&self) -> SceneConfig {
        SceneConfig {
            height: self.scene_height,
            width: self.scene_width,
            patch_hint: self.patch_h,
            channels: self.in_channels,
            ponds: (self.ponds_min, self.ponds_max),
            rivers: (self.rivers_min, self.rivers_max),
            built: (self.built_min, self.built_max),
            noise_amp: self.noise_amp,
            seed: self.seed,
        }
    }
}

struct Kv {
    map: BTreeMap<String, String>,
    origin: PathBuf,
}

impl Kv {
    fn take(&mut self, key: &str) -> Option<String> {
        self.map.remove(key)
    }

    fn parse_into<T: FromStr>(&mut self, key: &str, slot: &mut T) -> Result<()> {
        if let Some(v) = self.take(key) {
            *slot = v.parse().map_err(|_| {
                Error::Config(format!("{}: invalid value '{v}' for key '{key}'", self.origin.display()))
            })?;
        }
        Ok(())
    }

    fn parse_list(&mut self, key: &str, slot: &mut Vec<usize>) -> Result<()> {
        if let Some(v) = self.take(key) {
            let parsed: std::result::Result<Vec<usize>, _> =
                v.split(',').map(|s| s.trim().parse()).collect();
            *slot = parsed.map_err(|_| {
                Error::Config(format!("{}: invalid list '{v}' for key '{key}'", self.origin.display()))
            })?;
            if slot.is_empty() {
                return Err(Error::Config(format!("{}: empty list for key '{key}'", self.origin.display())));
            }
        }
        Ok(())
    }

    fn finish(self) -> Result<()> {
        if let Some(key) = self.map.keys().next() {
            return Err(Error::Config(format!("{}: unknown key '{key}'", self.origin.display())));
        }
        Ok(())
    }
}
