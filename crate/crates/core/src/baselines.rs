//! Interchangeable scale-selection policies evaluated under one harness.
//!
//! Every policy sees identical grids and segmenter weights; only the action
//! sequence differs. Random policies run several seeds and report mean and
//! standard deviation of the aggregate, matching how stochastic baselines
//! are usually summarized.

use crate::agent::Agent;
use crate::error::{Error, Result};
use crate::metrics::{confusion, mf1, miou, score};
use crate::rng::SeedStream;
use crate::rollout::{run_episode, Episode, RolloutPolicy};
use crate::segnet::SegNet;
use crate::synthgeo::SceneEntry;
use crate::tiling::{LabelMask, TileGrid};
use rayon::prelude::*;

/// The evaluation-facing policy set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Policy {
    /// Always scale 1.
    LocalOnly,
    /// Context branch alone at a fixed scale.
    ContextOnly(u32),
    /// Dual branch at a fixed scale.
    FixedScale(u32),
    /// Uniform random scale per patch; evaluated over several seeds.
    RandomScale,
    /// Agent-selected scale, single-branch inference.
    SingleBranch,
    /// Agent-selected scale, dual-branch inference.
    Learned,
    /// Per-patch exhaustive best scale by patch reward.
    OracleScale,
}

impl Policy {
    pub fn name(&self) -> String {
        match self {
            Policy::LocalOnly => "local".into(),
            Policy::ContextOnly(a) => format!("context-{a}"),
            Policy::FixedScale(a) => format!("fixed-{a}"),
            Policy::RandomScale => "random".into(),
            Policy::SingleBranch => "single-branch".into(),
            Policy::Learned => "learned".into(),
            Policy::OracleScale => "oracle".into(),
        }
    }

    /// Parse the CLI/config spelling produced by [`Policy::name`].
    pub fn parse(s: &str) -> Result<Policy> {
        let p = match s {
            "local" => Policy::LocalOnly,
            "random" => Policy::RandomScale,
            "single-branch" => Policy::SingleBranch,
            "learned" => Policy::Learned,
            "oracle" => Policy::OracleScale,
            other => {
                if let Some(a) = other.strip_prefix("context-") {
                    Policy::ContextOnly(a.parse().map_err(|_| bad_policy(s))?)
                } else if let Some(a) = other.strip_prefix("fixed-") {
                    Policy::FixedScale(a.parse().map_err(|_| bad_policy(s))?)
                } else {
                    return Err(bad_policy(s));
                }
            }
        };
        Ok(p)
    }

    fn needs_agent(&self) -> bool {
        matches!(self, Policy::SingleBranch | Policy::Learned)
    }
}

fn bad_policy(s: &str) -> Error {
    Error::Config(format!(
        "unknown policy '{s}'; expected local, context-<a>, fixed-<a>, random, single-branch, learned, or oracle"
    ))
}

#[derive(Debug, Clone, Copy)]
pub struct EvalConfig {
    pub patch_h: usize,
    pub patch_w: usize,
    pub thumb_h: usize,
    pub thumb_w: usize,
    /// Action count for random/oracle policies.
    pub actions: usize,
    /// Seeds for stochastic policies.
    pub random_seeds: usize,
    pub seed: u64,
}

/// Scores of one scene under one policy.
#[derive(Debug, Clone)]
pub struct SceneEval {
    pub id: usize,
    pub miou: f64,
    pub mf1: f64,
    pub score: f64,
    pub episode_reward: f64,
    pub mean_patch_reward: f64,
    /// Chosen scale per grid cell, row-major (last seed for random).
    pub actions: Vec<u32>,
}

/// Aggregate over scenes (and seeds, for stochastic policies).
#[derive(Debug, Clone)]
pub struct PolicyReport {
    pub policy: String,
    pub per_scene: Vec<SceneEval>,
    pub miou: f64,
    pub mf1: f64,
    pub score: f64,
    pub reward_mean: f64,
    /// Std of the per-seed aggregate reward; zero for deterministic
    /// policies.
    pub reward_std: f64,
    pub mean_patch_reward: f64,
}

/// Load a manifest entry's scene pair.
pub fn load_scene(entry: &SceneEntry, classes: usize) -> Result<(crate::tiling::Raster, LabelMask)> {
    let raster = crate::io::read_raster(&entry.raster_path)?;
    let labels = crate::io::read_labels(&entry.label_path, classes)?;
    Ok((raster, labels))
}

/// Greedy evaluation of `policy` over every scene in the manifest.
/// Deterministic policies run once; `RandomScale` runs `random_seeds`
/// times and aggregates.
pub fn evaluate_policy(
    policy: &Policy,
    entries: &[SceneEntry],
    seg: &SegNet,
    agent: Option<&Agent>,
    cfg: &EvalConfig,
) -> Result<PolicyReport> {
    if policy.needs_agent() && agent.is_none() {
        return Err(Error::Config(format!("policy '{}' requires an agent checkpoint", policy.name())));
    }
    let seeds: Vec<u64> = match policy {
        Policy::RandomScale => (0..cfg.random_seeds as u64).collect(),
        _ => vec![0],
    };

    // scene x seed, scenes in parallel with deterministic order
    let per_seed: Vec<Vec<SceneEval>> = seeds
        .iter()
        .map(|&seed| {
            entries
                .par_iter()
                .map(|entry| evaluate_scene(policy, entry, seg, agent, cfg, seed))
                .collect::<Result<Vec<SceneEval>>>()
        })
        .collect::<Result<_>>()?;

    let n_scenes = entries.len().max(1) as f64;
    let seed_rewards: Vec<f64> = per_seed
        .iter()
        .map(|evals| evals.iter().map(|e| e.episode_reward).sum::<f64>() / n_scenes)
        .collect();
    let reward_mean = seed_rewards.iter().sum::<f64>() / seed_rewards.len() as f64;
    let reward_std = (seed_rewards.iter().map(|r| (r - reward_mean).powi(2)).sum::<f64>()
        / seed_rewards.len() as f64)
        .sqrt();

    // per-scene rows averaged over seeds, keeping the last seed's actions
    let per_scene: Vec<SceneEval> = (0..entries.len())
        .map(|i| {
            let rows: Vec<&SceneEval> = per_seed.iter().map(|evals| &evals[i]).collect();
            let n = rows.len() as f64;
            SceneEval {
                id: rows[0].id,
                miou: rows.iter().map(|r| r.miou).sum::<f64>() / n,
                mf1: rows.iter().map(|r| r.mf1).sum::<f64>() / n,
                score: rows.iter().map(|r| r.score).sum::<f64>() / n,
                episode_reward: rows.iter().map(|r| r.episode_reward).sum::<f64>() / n,
                mean_patch_reward: rows.iter().map(|r| r.mean_patch_reward).sum::<f64>() / n,
                actions: rows.last().unwrap().actions.clone(),
            }
        })
        .collect();

    Ok(PolicyReport {
        policy: policy.name(),
        miou: per_scene.iter().map(|e| e.miou).sum::<f64>() / n_scenes,
        mf1: per_scene.iter().map(|e| e.mf1).sum::<f64>() / n_scenes,
        score: per_scene.iter().map(|e| e.score).sum::<f64>() / n_scenes,
        reward_mean,
        reward_std,
        mean_patch_reward: per_scene.iter().map(|e| e.mean_patch_reward).sum::<f64>() / n_scenes,
        per_scene,
    })
}

fn evaluate_scene(
    policy: &Policy,
    entry: &SceneEntry,
    seg: &SegNet,
    agent: Option<&Agent>,
    cfg: &EvalConfig,
    seed: u64,
) -> Result<SceneEval> {
    let (raster, labels) = load_scene(entry, seg.cfg.classes)?;
    let ep = Episode::new(raster, labels, (cfg.patch_h, cfg.patch_w), (cfg.thumb_h, cfg.thumb_w))?;
    let rollout_policy = match policy {
        Policy::LocalOnly => RolloutPolicy::Fixed(1),
        Policy::ContextOnly(a) => RolloutPolicy::ContextOnly(*a),
        Policy::FixedScale(a) => RolloutPolicy::Fixed(*a),
        Policy::RandomScale => RolloutPolicy::Random { actions: cfg.actions },
        Policy::SingleBranch => RolloutPolicy::SingleBranchAgent(agent.unwrap()),
        Policy::Learned => RolloutPolicy::AgentGreedy(agent.unwrap()),
        Policy::OracleScale => RolloutPolicy::Oracle { actions: cfg.actions },
    };
    let mut stream = SeedStream::with_index(cfg.seed, &format!("eval/{}/{}", policy.name(), entry.id), seed);
    let out = run_episode(&ep, seg, &rollout_policy, Some(stream.rng()))?;
    let truth = ep.labels.as_ref().expect("evaluation episodes always carry labels");
    let cm = confusion(truth, &out.stitched, seg.cfg.classes)?;
    Ok(SceneEval {
        id: entry.id,
        miou: miou(&cm)?,
        mf1: mf1(&cm)?,
        score: score(truth, &out.stitched)?,
        episode_reward: out.total_reward,
        mean_patch_reward: out.mean_patch_reward(),
        actions: out.actions,
    })
}

/// Paint each patch's chosen scale over its footprint (row-major,
/// later patches overwrite overlaps). Pixel value equals the scale, so the
/// pixmap encoding is scale `a` -> intensity `a`.
pub fn action_map_mask(grid: &TileGrid, actions: &[u32], max_actions: usize) -> LabelMask {
    let mut out = LabelMask::zeros(grid.raster_h, grid.raster_w, max_actions + 1);
    for (patch, &a) in grid.patches.iter().zip(actions) {
        for r in patch.row..patch.row + patch.h {
            for c in patch.col..patch.col + patch.w {
                out.set(r, c, a as u8);
            }
        }
    }
    out
}

/// Format a policy comparison as a tab-separated table.
pub fn format_report_table(reports: &[PolicyReport]) -> String {
    let mut out = String::from("policy\tmiou\tmf1\tscore\treward_mean\treward_std\tmean_patch_reward\n");
    for r in reports {
        out.push_str(&format!(
            "{}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\n",
            r.policy, r.miou, r.mf1, r.score, r.reward_mean, r.reward_std, r.mean_patch_reward
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agent::AgentConfig;
    use crate::segnet::SegNetConfig;
    use crate::synthgeo::{generate_dataset, SceneConfig, NUM_CLASSES};
    use crate::tiling::{build_grid, Raster};

    fn tiny_setup(dir: &std::path::Path) -> (Vec<SceneEntry>, SegNet, Agent, EvalConfig) {
        let cfg = SceneConfig {
            height: 224,
            width: 224,
            patch_hint: 32,
            ponds: (1, 2),
            rivers: (1, 1),
            built: (0, 1),
            seed: 77,
            ..SceneConfig::default()
        };
        let entries = generate_dataset(&cfg, 2, dir).unwrap();
        let seg = SegNet::new(
            SegNetConfig { classes: NUM_CLASSES, channels: vec![4, 8], fusion_channels: 8, aux_weight: 0.4 },
            3,
            1,
        );
        let agent = Agent::new(
            AgentConfig { actions: 4, channels: vec![4, 8], hidden: 16, ..Default::default() },
            3,
            2,
        );
        let eval = EvalConfig {
            patch_h: 32,
            patch_w: 32,
            thumb_h: 32,
            thumb_w: 32,
            actions: 4,
            random_seeds: 3,
            seed: 9,
        };
        (entries, seg, agent, eval)
    }

    #[test]
    fn local_only_reward_is_exactly_zero() {
        let dir = tempfile::tempdir().unwrap();
        let (entries, seg, _, eval) = tiny_setup(dir.path());
        let report = evaluate_policy(&Policy::LocalOnly, &entries, &seg, None, &eval).unwrap();
        assert_eq!(report.reward_mean, 0.0);
        assert_eq!(report.reward_std, 0.0);
        assert!(report.per_scene.iter().all(|s| s.episode_reward == 0.0));
    }

    #[test]
    fn oracle_dominates_local_in_mean_patch_reward() {
        let dir = tempfile::tempdir().unwrap();
        let (entries, seg, _, eval) = tiny_setup(dir.path());
        let oracle = evaluate_policy(&Policy::OracleScale, &entries, &seg, None, &eval).unwrap();
        let local = evaluate_policy(&Policy::LocalOnly, &entries, &seg, None, &eval).unwrap();
        assert!(oracle.mean_patch_reward >= local.mean_patch_reward);
    }

    #[test]
    fn random_policy_reports_spread_over_seeds() {
        let dir = tempfile::tempdir().unwrap();
        let (entries, seg, _, eval) = tiny_setup(dir.path());
        let report = evaluate_policy(&Policy::RandomScale, &entries, &seg, None, &eval).unwrap();
        assert!(report.reward_std.is_finite());
        assert_eq!(report.per_scene.len(), 2);
    }

    #[test]
    fn agent_policies_require_agent() {
        let dir = tempfile::tempdir().unwrap();
        let (entries, seg, agent, eval) = tiny_setup(dir.path());
        assert!(evaluate_policy(&Policy::Learned, &entries, &seg, None, &eval).is_err());
        let report = evaluate_policy(&Policy::Learned, &entries, &seg, Some(&agent), &eval).unwrap();
        assert_eq!(report.per_scene.len(), 2);
        let report = evaluate_policy(&Policy::SingleBranch, &entries, &seg, Some(&agent), &eval).unwrap();
        assert_eq!(report.per_scene.len(), 2);
    }

    #[test]
    fn action_map_paints_footprints() {
        let raster = Raster::zeros(1, 8, 8);
        let grid = build_grid(&raster, 4, 4).unwrap();
        let map = action_map_mask(&grid, &[1, 2, 3, 4], 6);
        assert_eq!(map.get(0, 0), 1);
        assert_eq!(map.get(0, 7), 2);
        assert_eq!(map.get(7, 0), 3);
        assert_eq!(map.get(7, 7), 4);
        // constant policies paint constant maps
        let map = action_map_mask(&grid, &[4; 4], 6);
        assert!(map.data.iter().all(|&v| v == 4));
    }

    #[test]
    fn policy_names_roundtrip() {
        for p in [
            Policy::LocalOnly,
            Policy::ContextOnly(3),
            Policy::FixedScale(5),
            Policy::RandomScale,
            Policy::SingleBranch,
            Policy::Learned,
            Policy::OracleScale,
        ] {
            assert_eq!(Policy::parse(&p.name()).unwrap(), p);
        }
        assert!(Policy::parse("bogus").is_err());
    }

    #[test]
    fn report_table_is_stable() {
        let report = PolicyReport {
            policy: "local".into(),
            per_scene: vec![],
            miou: 0.5,
            mf1: 0.6,
            score: 1.1,
            reward_mean: 0.0,
            reward_std: 0.0,
            mean_patch_reward: 0.0,
        };
        let table = format_report_table(&[report]);
        assert!(table.starts_with("policy\tmiou"));
        assert!(table.contains("local\t0.5000\t0.6000\t1.1000"));
    }
}
