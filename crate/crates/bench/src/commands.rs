//! Subcommand implementations. Everything is a pure function of (config,
//! seeds, dataset bytes): reruns produce identical outputs. Episode-level
//! work fans out over a thread pool with results gathered in seed order.

use std::path::Path;

use anyhow::{Context, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use dsr_core::io;
use dsr_core::metrics::EpisodeMetrics;
use dsr_core::planner::{
    execute_plan, random_baseline, PredictorKind, TargetState,
};
use dsr_core::rollout::rollout_episode;
use dsr_core::sim::{
    drop_objects, generate_episode, gt_masks, interaction_policy, load_episode, save_episode,
    step_push, PolicyState, SceneState,
};
use dsr_core::warp::AggregationMode;
use dsr_core::SCHEMA_VERSION;

use crate::config::BenchConfig;

#[derive(Debug, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub seed: u64,
    pub path: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub config_hash: String,
    pub config: BenchConfig,
    pub episodes: Vec<ManifestEntry>,
}

/// `generate`: write one episode directory per seed plus a manifest.
pub fn cmd_generate(cfg: &BenchConfig, seeds: &[u64], out: &Path) -> Result<Manifest> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let ep_cfg = cfg.episode_config();
    let entries: Vec<ManifestEntry> = seeds
        .par_iter()
        .map(|&seed| -> Result<ManifestEntry> {
            let name = format!("ep_{seed:05}");
            let dir = out.join(&name);
            let ep = generate_episode(seed, &ep_cfg)?;
            save_episode(&ep, &dir)?;
            Ok(ManifestEntry { seed, path: name })
        })
        .collect::<Result<_>>()?;
    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        config_hash: cfg.hash()?,
        config: cfg.clone(),
        episodes: entries,
    };
    io::write_json(&out.join("manifest.json"), &manifest)?;
    println!(
        "generated {} episodes x {} steps into {}",
        seeds.len(),
        cfg.dataset.n_steps,
        out.display()
    );
    Ok(manifest)
}

fn read_manifest(data: &Path) -> Result<Manifest> {
    let manifest: Manifest = io::read_json(&data.join("manifest.json"))?;
    anyhow::ensure!(
        manifest.schema_version == SCHEMA_VERSION,
        "manifest schema version {} (expected {})",
        manifest.schema_version,
        SCHEMA_VERSION
    );
    Ok(manifest)
}

#[derive(Debug, Serialize)]
struct StateSidecar<'a> {
    schema_version: u32,
    step: usize,
    identities: &'a [Option<u64>],
    next_identity: u64,
}

/// `rollout`: replay episodes under one aggregation mode, write one metrics
/// record per episode (JSON lines, seed order), optionally dumping the
/// per-step states.
pub fn cmd_rollout(
    cfg: &BenchConfig,
    data: &Path,
    mode: AggregationMode,
    predictor: PredictorKind,
    out: &Path,
    dump_states: bool,
) -> Result<Vec<EpisodeMetrics>> {
    let manifest = read_manifest(data)?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let results: Vec<EpisodeMetrics> = manifest
        .episodes
        .par_iter()
        .map(|entry| -> Result<EpisodeMetrics> {
            let ep = load_episode(&data.join(&entry.path))?;
            let rollout = rollout_episode(&ep, mode, predictor, &cfg.aggregate, &cfg.sim)?;
            if dump_states {
                let state_dir = out.join(&entry.path);
                std::fs::create_dir_all(&state_dir)
                    .with_context(|| format!("creating {}", state_dir.display()))?;
                for (t, state) in rollout.states.iter().enumerate() {
                    io::write_mask_channels(
                        &state_dir.join(format!("state_{t:02}.vol")),
                        &state.masks,
                    )?;
                    io::write_json(
                        &state_dir.join(format!("state_{t:02}.json")),
                        &StateSidecar {
                            schema_version: SCHEMA_VERSION,
                            step: state.step,
                            identities: &state.identities,
                            next_identity: state.next_identity,
                        },
                    )?;
                }
            }
            Ok(rollout.metrics)
        })
        .collect::<Result<_>>()?;

    let path = out.join(format!("metrics_{}.jsonl", mode.name()));
    let mut lines = String::new();
    for m in &results {
        lines.push_str(&serde_json::to_string(m)?);
        lines.push('\n');
    }
    std::fs::write(&path, lines).with_context(|| format!("writing {}", path.display()))?;
    println!(
        "rollout mode={} predictor={:?}: {} episodes -> {}",
        mode.name(),
        predictor,
        results.len(),
        path.display()
    );
    Ok(results)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ModeSummary {
    pub mode: String,
    pub episodes: usize,
    pub flow_visible_cm: f64,
    pub flow_full_cm: f64,
    pub iou_unordered: f64,
    pub iou_ordered: f64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EvalSummary {
    pub schema_version: u32,
    pub config_hash: String,
    pub predictor: PredictorKind,
    pub modes: Vec<ModeSummary>,
}

fn summarize(mode: AggregationMode, ms: &[EpisodeMetrics]) -> ModeSummary {
    let n = ms.len().max(1) as f64;
    ModeSummary {
        mode: mode.name().to_string(),
        episodes: ms.len(),
        flow_visible_cm: ms.iter().map(|m| m.flow_visible_cm).sum::<f64>() / n,
        flow_full_cm: ms.iter().map(|m| m.flow_full_cm).sum::<f64>() / n,
        iou_unordered: ms.iter().map(|m| m.iou_unordered).sum::<f64>() / n,
        iou_ordered: ms.iter().map(|m| m.iou_ordered).sum::<f64>() / n,
    }
}

/// `eval`: rollout every requested mode over one dataset and write a
/// comparison summary.
pub fn cmd_eval(
    cfg: &BenchConfig,
    data: &Path,
    modes: &[AggregationMode],
    predictor: PredictorKind,
    out: &Path,
) -> Result<EvalSummary> {
    let mut summaries = Vec::new();
    for &mode in modes {
        let ms = cmd_rollout(cfg, data, mode, predictor, out, false)?;
        summaries.push(summarize(mode, &ms));
    }
    let summary = EvalSummary {
        schema_version: SCHEMA_VERSION,
        config_hash: cfg.hash()?,
        predictor,
        modes: summaries,
    };
    io::write_json(&out.join("summary.json"), &summary)?;
    println!("mode        flow_vis(cm) flow_full(cm) unordered ordered");
    for m in &summary.modes {
        println!(
            "{:<11} {:>12.4} {:>13.4} {:>9.4} {:>7.4}",
            m.mode, m.flow_visible_cm, m.flow_full_cm, m.iou_unordered, m.iou_ordered
        );
    }
    Ok(summary)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PlanReport {
    pub schema_version: u32,
    pub scene_seed: u64,
    pub target_seed: u64,
    pub predictor: PredictorKind,
    pub replan: bool,
    pub executed: Vec<PlanAction>,
    pub predicted_cost: f64,
    pub achieved_iou: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub baseline_iou: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PlanAction {
    pub px: u32,
    pub py: u32,
    pub d: u8,
}

/// Builds a reachable target: the configuration after `pushes` policy pushes
/// from the initial scene.
pub fn make_target(
    cfg: &BenchConfig,
    scene: &SceneState,
    pushes: usize,
    seed: u64,
) -> Result<(TargetState, SceneState)> {
    let mut rng = rand_seed(seed);
    let mut s = scene.clone();
    let mut pstate = PolicyState::new(&s);
    for _ in 0..pushes {
        pstate.observe(&s);
        let a = interaction_policy(&s, &mut pstate, &mut rng, &cfg.grid, &cfg.sim);
        s = step_push(&s, &a, &cfg.grid, &cfg.sim)?.scene;
    }
    let masks = gt_masks(&s, &cfg.grid, cfg.dataset.k)?;
    Ok((TargetState { masks }, s))
}

fn rand_seed(seed: u64) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    rand_chacha::ChaCha8Rng::seed_from_u64(seed)
}

/// `plan`: drop a scene, collect a target from the simulator, run the
/// shooting planner, and report the achieved IoU (optionally against the
/// uniform-random baseline).
#[allow(clippy::too_many_arguments)]
pub fn cmd_plan(
    cfg: &BenchConfig,
    scene_seed: u64,
    target_pushes: usize,
    predictor: PredictorKind,
    replan: bool,
    baseline: bool,
    out: Option<&Path>,
) -> Result<PlanReport> {
    let scene = drop_objects(scene_seed, cfg.dataset.n_objects, cfg.dataset.family, &cfg.sim)?;
    let target_seed = scene_seed.wrapping_mul(0x9e37_79b9).wrapping_add(1);
    let (target, _) = make_target(cfg, &scene, target_pushes, target_seed)?;

    let report = execute_plan(
        &scene,
        &target,
        predictor,
        &cfg.planner,
        &cfg.grid,
        &cfg.camera,
        &cfg.sim,
        &cfg.aggregate,
        replan,
        scene_seed,
    )?;
    let baseline_iou = if baseline {
        Some(
            random_baseline(
                &scene,
                &target,
                cfg.planner.horizon,
                &cfg.grid,
                &cfg.sim,
                scene_seed,
            )?
            .achieved_iou,
        )
    } else {
        None
    };

    let out_report = PlanReport {
        schema_version: SCHEMA_VERSION,
        scene_seed,
        target_seed,
        predictor,
        replan,
        executed: report
            .executed
            .iter()
            .map(|a| PlanAction {
                px: a.px,
                py: a.py,
                d: a.d,
            })
            .collect(),
        predicted_cost: report.predicted_cost,
        achieved_iou: report.achieved_iou,
        baseline_iou,
    };
    if let Some(path) = out {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)
                    .with_context(|| format!("creating {}", parent.display()))?;
            }
        }
        io::write_json(path, &out_report)?;
    }
    println!(
        "plan seed={} achieved IoU {:.4}{}",
        scene_seed,
        out_report.achieved_iou,
        out_report
            .baseline_iou
            .map(|b| format!(" (random baseline {b:.4})"))
            .unwrap_or_default()
    );
    Ok(out_report)
}

/// Parses `a..b` (half-open) or a single seed into a list.
pub fn parse_seed_range(s: &str) -> Result<Vec<u64>> {
    if let Some((a, b)) = s.split_once("..") {
        let start: u64 = a.trim().parse().context("seed range start")?;
        let end: u64 = b.trim().parse().context("seed range end")?;
        anyhow::ensure!(start < end, "empty seed range {s}");
        Ok((start..end).collect())
    } else {
        Ok(vec![s.trim().parse().context("seed")?])
    }
}

pub fn parse_modes(s: &str) -> Result<Vec<AggregationMode>> {
    s.split(',')
        .map(|m| parse_mode(m.trim()))
        .collect::<Result<Vec<_>>>()
}

pub fn parse_mode(s: &str) -> Result<AggregationMode> {
    Ok(match s {
        "dsr" => AggregationMode::Dsr,
        "nowarp" => AggregationMode::NoWarp,
        "singlestep" => AggregationMode::SingleStep,
        "gtwarp" => AggregationMode::GtWarp,
        other => anyhow::bail!("unknown mode {other} (expected dsr|nowarp|singlestep|gtwarp)"),
    })
}

pub fn parse_predictor(s: &str) -> Result<PredictorKind> {
    Ok(match s {
        "oracle" => PredictorKind::Oracle,
        "kinematic" => PredictorKind::Kinematic,
        other => anyhow::bail!("unknown predictor {other} (expected oracle|kinematic)"),
    })
}
