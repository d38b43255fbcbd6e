//! `scale-agent`: train, evaluate and run scale-adaptive segmentation.

use clap::{Parser, Subcommand};
use scale_agent_core::baselines::{self, EvalConfig, Policy};
use scale_agent_core::metrics::{confusion, mf1, miou};
use scale_agent_core::nn::{load_checkpoint, primitive_checks};
use scale_agent_core::rollout::{run_episode, Episode, RolloutPolicy};
use scale_agent_core::run::{self, RunConfig};
use scale_agent_core::synthgeo::{generate_dataset, read_manifest};
use scale_agent_core::tiling::{extract_context, extract_local, LabelMask, PatchSpec};
use scale_agent_core::{io, Agent, Error, SegNet};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "scale-agent", version, about = "Scale-adaptive sliding-window semantic segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Run configuration file (flat `key = value` text).
    #[arg(long)]
    config: PathBuf,
    /// Override the config's master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the config's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> Result<RunConfig, Error> {
        Ok(RunConfig::from_file(&self.config)?.with_overrides(self.seed, self.out.clone()))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic labeled dataset plus manifest.
    GenerateData {
        #[command(flatten)]
        common: Common,
        /// Number of scenes to generate.
        #[arg(long)]
        scenes: usize,
    },
    /// Pretrain the segmenter under uniformly random scale actions.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Continue from the phase state in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Train the scale-control agent over the frozen pretrained segmenter.
    TrainAgent {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        resume: bool,
    },
    /// Alternate segmenter/agent training blocks at the sync interval.
    TrainJoint {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        resume: bool,
    },
    /// Greedy rollout over a raster: stitched label map + action map.
    Map {
        #[command(flatten)]
        common: Common,
        /// Input raster (tensor file or pixmap).
        #[arg(long)]
        raster: PathBuf,
        /// Optional ground-truth labels; prints the score when given.
        #[arg(long)]
        labels: Option<PathBuf>,
    },
    /// Score a predicted label map against ground truth.
    Eval {
        /// Predicted label map (tensor file or grayscale pixmap).
        #[arg(long)]
        pred: PathBuf,
        /// Ground-truth label map.
        #[arg(long)]
        truth: PathBuf,
        /// Class count.
        #[arg(long, default_value_t = 4)]
        classes: usize,
    },
    /// Compare scale-selection policies on the test manifest.
    Ablate {
        #[command(flatten)]
        common: Common,
    },
    /// Export the per-patch scale map a policy picks on a scene.
    ExportActionMap {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        raster: PathBuf,
        /// Needed by reward-probing policies (oracle).
        #[arg(long)]
        labels: Option<PathBuf>,
        /// Policy: local, context-<a>, fixed-<a>, random, single-branch,
        /// learned, or oracle.
        #[arg(long, default_value = "learned")]
        policy: String,
    },
    /// Finite-difference verification of every differentiable primitive
    /// and both full networks.
    GradCheck {
        #[arg(long, default_value_t = 1234)]
        seed: u64,
        /// Random shape draws per primitive.
        #[arg(long, default_value_t = 20)]
        cases: usize,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn load_models(cfg: &RunConfig, seg_default: &str, agent_default: &str) -> Result<(SegNet, Agent), Error> {
    let seg_path = cfg.seg_checkpoint.clone().unwrap_or_else(|| cfg.out_dir.join(seg_default));
    let agent_path = cfg.agent_checkpoint.clone().unwrap_or_else(|| cfg.out_dir.join(agent_default));
    let mut seg = SegNet::new(cfg.segnet_config(), cfg.in_channels, cfg.seed);
    load_checkpoint(&seg_path, &mut seg.params)?;
    let mut agent = Agent::new(cfg.agent_config(), cfg.in_channels, cfg.seed);
    load_checkpoint(&agent_path, &mut agent.params)?;
    Ok((seg, agent))
}

fn run(cli: Cli) -> Result<ExitCode, Error> {
    match cli.command {
        Command::GenerateData { common, scenes } => {
            let cfg = common.load()?;
            let entries = generate_dataset(&cfg.scene_config(), scenes, &cfg.out_dir)?;
            println!("wrote {} scenes and manifest.tsv under {}", entries.len(), cfg.out_dir.display());
        }
        Command::Pretrain { common, resume } => {
            let cfg = common.load()?;
            run::pretrain(&cfg, resume)?;
            println!("segmenter checkpoint at {}", cfg.out_dir.join(run::SEG_PRETRAIN).display());
        }
        Command::TrainAgent { common, resume } => {
            let cfg = common.load()?;
            run::train_agent(&cfg, resume)?;
            println!("agent checkpoint at {}", cfg.out_dir.join(run::SCA_AGENT).display());
        }
        Command::TrainJoint { common, resume } => {
            let cfg = common.load()?;
            run::train_joint(&cfg, resume)?;
            println!(
                "joint checkpoints at {} and {}",
                cfg.out_dir.join(run::SEG_JOINT).display(),
                cfg.out_dir.join(run::SCA_JOINT).display()
            );
        }
        Command::Map { common, raster, labels } => {
            let cfg = common.load()?;
            let out = run::map_image(&cfg, &raster, labels.as_deref())?;
            println!("prediction: {}", out.prediction_path.display());
            println!("action map: {}", out.action_map_path.display());
            if let Some(score) = out.score {
                println!("score {score:.4}");
            }
        }
        Command::Eval { pred, truth, classes } => {
            let pred = io::read_labels_any(&pred, classes)?;
            let truth = io::read_labels_any(&truth, classes)?;
            let cm = confusion(&truth, &pred, classes)?;
            let miou_v = miou(&cm)?;
            let mf1_v = mf1(&cm)?;
            println!("miou {miou_v:.4}");
            println!("mf1 {mf1_v:.4}");
            println!("score {:.4}", miou_v + mf1_v);
        }
        Command::Ablate { common } => {
            let cfg = common.load()?;
            let manifest = cfg
                .test_manifest
                .clone()
                .or_else(|| cfg.manifest.clone())
                .ok_or_else(|| Error::Config("config needs 'test_manifest' (or 'manifest')".into()))?;
            let entries = read_manifest(&manifest)?;
            let (seg, agent) = load_models(&cfg, run::SEG_JOINT, run::SCA_JOINT)?;
            let eval_cfg = EvalConfig {
                patch_h: cfg.patch_h,
                patch_w: cfg.patch_w,
                thumb_h: cfg.thumb_h,
                thumb_w: cfg.thumb_w,
                actions: cfg.actions,
                random_seeds: cfg.random_seeds,
                seed: cfg.seed,
            };
            let mut reports = Vec::new();
            for name in &cfg.policies {
                let policy = Policy::parse(name)?;
                reports.push(baselines::evaluate_policy(&policy, &entries, &seg, Some(&agent), &eval_cfg)?);
            }
            let table = baselines::format_report_table(&reports);
            print!("{table}");
            std::fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
            let table_path = cfg.out_dir.join("ablation.tsv");
            io::atomic_write(&table_path, table.as_bytes())?;
        }
        Command::ExportActionMap { common, raster, labels, policy } => {
            let cfg = common.load()?;
            let policy = Policy::parse(&policy)?;
            let (seg, agent) = load_models(&cfg, run::SEG_JOINT, run::SCA_JOINT)?;
            let raster_data = io::read_raster_any(&raster)?;
            let ep = match &labels {
                Some(lp) => {
                    let l = io::read_labels_any(lp, cfg.classes)?;
                    Episode::new(raster_data, l, (cfg.patch_h, cfg.patch_w), (cfg.thumb_h, cfg.thumb_w))?
                }
                None => {
                    if policy == Policy::OracleScale {
                        return Err(Error::Config("the oracle policy needs --labels to probe rewards".into()));
                    }
                    Episode::unlabeled(raster_data, (cfg.patch_h, cfg.patch_w), (cfg.thumb_h, cfg.thumb_w))?
                }
            };
            let rollout_policy = match &policy {
                Policy::LocalOnly => RolloutPolicy::Fixed(1),
                Policy::ContextOnly(a) => RolloutPolicy::ContextOnly(*a),
                Policy::FixedScale(a) => RolloutPolicy::Fixed(*a),
                Policy::RandomScale => RolloutPolicy::Random { actions: cfg.actions },
                Policy::SingleBranch => RolloutPolicy::SingleBranchAgent(&agent),
                Policy::Learned => RolloutPolicy::AgentGreedy(&agent),
                Policy::OracleScale => RolloutPolicy::Oracle { actions: cfg.actions },
            };
            let mut stream = scale_agent_core::rng::SeedStream::new(cfg.seed, "export-action-map");
            let out = run_episode(&ep, &seg, &rollout_policy, Some(stream.rng()))?;
            let amap = baselines::action_map_mask(&ep.grid, &out.actions, cfg.actions);
            std::fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
            let stem = raster.file_stem().and_then(|s| s.to_str()).unwrap_or("raster").trim_end_matches(".raster");
            let path = cfg.out_dir.join(format!("{stem}_{}_actions.pgm", policy.name()));
            io::write_pixmap_labels(&path, &amap)?;
            println!("action map: {path:?} (pixel value = selected scale)");
        }
        Command::GradCheck { seed, cases } => {
            let tolerance = 1e-4;
            let mut all_ok = true;
            for report in primitive_checks(seed, cases) {
                let ok = report.passed(tolerance);
                all_ok &= ok;
                println!(
                    "{} {:<22} cases {:>3}  max rel error {:.3e}",
                    if ok { "PASS" } else { "FAIL" },
                    report.name,
                    report.cases,
                    report.max_rel_error
                );
            }
            // full networks on small configs
            let (seg_err, agent_err) = network_checks(seed)?;
            let seg_ok = seg_err <= tolerance;
            let agent_ok = agent_err <= tolerance;
            all_ok &= seg_ok && agent_ok;
            println!(
                "{} {:<22} cases   1  max rel error {seg_err:.3e}",
                if seg_ok { "PASS" } else { "FAIL" },
                "segnet-full"
            );
            println!(
                "{} {:<22} cases   1  max rel error {agent_err:.3e}",
                if agent_ok { "PASS" } else { "FAIL" },
                "agent-full"
            );
            if !all_ok {
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

/// Full-network gradient checks on small deterministic configurations.
fn network_checks(seed: u64) -> Result<(f64, f64), Error> {
    use scale_agent_core::rng::SeedStream;
    use scale_agent_core::{AgentConfig, SegNetConfig, State};
    let mut stream = SeedStream::new(seed, "gradcheck-nets");
    use rand::Rng;

    let mut seg = SegNet::new(
        SegNetConfig { classes: 3, channels: vec![2, 3], fusion_channels: 4, aux_weight: 0.4 },
        2,
        seed,
    );
    let mut raster = scale_agent_core::Raster::zeros(2, 32, 32);
    raster.data.iter_mut().for_each(|v| *v = stream.rng().gen());
    let patch = PatchSpec::new(8, 8, 8, 8).with_scale(2);
    let x_loc = extract_local(&raster, &patch)?;
    let x_ctx = extract_context(&raster, &patch, 2)?;
    let y: Vec<u8> = (0..64).map(|i| (i % 3) as u8).collect();
    let y_patch = LabelMask::from_data(8, 8, 3, y)?;
    let y_ctx = LabelMask::from_data(8, 8, 3, vec![1; 64])?;
    let seg_err = seg.check_gradients(&x_loc, Some(&x_ctx), &patch, &y_patch, Some(&y_ctx))?;

    let mut agent = Agent::new(
        AgentConfig { actions: 3, channels: vec![3, 4], hidden: 4, ..Default::default() },
        2,
        seed,
    );
    let mut thumb = scale_agent_core::Raster::zeros(2, 8, 8);
    thumb.data.iter_mut().for_each(|v| *v = stream.rng().gen());
    // footprint spanning several feature cells keeps the pooled encoding
    // away from the all-dead-relu degeneracy of one-cell masks
    let mask = scale_agent_core::tiling::make_position_mask(&PatchSpec::new(0, 0, 32, 32), (64, 64), (8, 8));
    let state = State { thumbnail: std::sync::Arc::new(thumb), mask };
    let agent_err = agent.check_gradients(&state, 2, 0.5)?;
    Ok((seg_err, agent_err))
}
