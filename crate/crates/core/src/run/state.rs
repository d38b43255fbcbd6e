//! Resumable phase state.
//!
//! A `RunState` plus the matching checkpoint reproduce the rest of a
//! training run bit-exactly: it captures the phase's step/episode
//! counters, both optimizers' step counts, and the exact position of
//! every PRNG stream the phase consumes. Written atomically next to the
//! checkpoints.

use crate::error::{Error, Result};
use crate::rng::StreamState;
use std::collections::BTreeMap;
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct RunState {
    pub phase: String,
    /// Steps completed within the phase.
    pub step: usize,
    /// Episodes completed (agent phases).
    pub episode: usize,
    /// Completed alternation blocks (joint phase).
    pub block: usize,
    pub seg_opt_step: usize,
    pub agent_opt_step: usize,
    /// Named stream positions.
    pub streams: BTreeMap<String, StreamState>,
}

impl RunState {
    pub fn new(phase: &str) -> Self {
        RunState { phase: phase.to_string(), ..Default::default() }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = String::new();
        text.push_str(&format!("phase = {}\n", self.phase));
        text.push_str(&format!("step = {}\n", self.step));
        text.push_str(&format!("episode = {}\n", self.episode));
        text.push_str(&format!("block = {}\n", self.block));
        text.push_str(&format!("seg_opt_step = {}\n", self.seg_opt_step));
        text.push_str(&format!("agent_opt_step = {}\n", self.agent_opt_step));
        for (name, st) in &self.streams {
            text.push_str(&format!("stream.{name} = {}\n", st.to_hex()));
        }
        crate::io::atomic_write(path, text.as_bytes())
    }

    pub fn load(path: &Path) -> Result<RunState> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut state = RunState::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() {
                continue;
            }
            let bad = || Error::Config(format!("{}:{}: malformed state line", path.display(), lineno + 1));
            let (key, value) = line.split_once('=').ok_or_else(bad)?;
            let (key, value) = (key.trim(), value.trim());
            match key {
                "phase" => state.phase = value.to_string(),
                "step" => state.step = value.parse().map_err(|_| bad())?,
                "episode" => state.episode = value.parse().map_err(|_| bad())?,
                "block" => state.block = value.parse().map_err(|_| bad())?,
                "seg_opt_step" => state.seg_opt_step = value.parse().map_err(|_| bad())?,
                "agent_opt_step" => state.agent_opt_step = value.parse().map_err(|_| bad())?,
                _ => {
                    if let Some(name) = key.strip_prefix("stream.") {
                        let st = StreamState::from_hex(value).ok_or_else(bad)?;
                        state.streams.insert(name.to_string(), st);
                    } else {
                        return Err(Error::Config(format!(
                            "{}:{}: unknown state key '{key}'",
                            path.display(),
                            lineno + 1
                        )));
                    }
                }
            }
        }
        Ok(state)
    }
}
