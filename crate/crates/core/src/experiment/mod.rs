//! Experiment runner: turns the library into a reproducible CLI covering
//! dataset generation, training, holdout evaluation, studies and reports.
//!
//! Every run writes a directory named by timestamp and seed containing a
//! deterministic `manifest.json` (wall-clock timing goes to a separate
//! `timing.json` so re-runs are byte-identical), a step-level `history.csv`,
//! and `ckpt-v1` checkpoints of the predictor and controller.

pub mod report;
pub mod study;

use crate::config::ExperimentConfig;
use crate::controller::ControllerModel;
use crate::error::{Error, Result};
use crate::evaluation::{holdout_metrics_at, CurvePoint, RejectionCurve};
use crate::nn::{load_network, save_network, CheckpointMeta};
use crate::synthdata::{generate, load_dataset, GeneratorConfig, SplitDataset};
use crate::tasks::{PredictorModel, TaskKind, TaskSpec};
use crate::trainer::{
    train_iqa_with_hook, train_shaped_with_hook, RunManifest, RunStatus, TrainMode, TrainOutput,
};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

pub fn timestamp() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .expect("clock after epoch")
        .as_secs()
}

pub fn mode_name(mode: TrainMode) -> &'static str {
    match mode {
        TrainMode::TaskSpecific => "task_specific",
        TrainMode::TaskAgnostic => "task_agnostic",
        TrainMode::Shaped => "shaped",
    }
}

pub fn parse_mode(s: &str) -> Result<TrainMode> {
    match s {
        "task_specific" => Ok(TrainMode::TaskSpecific),
        "task_agnostic" => Ok(TrainMode::TaskAgnostic),
        "shaped" => Ok(TrainMode::Shaped),
        other => Err(Error::config(
            "mode",
            format!("unknown mode `{other}` (task_specific | task_agnostic | shaped)"),
        )),
    }
}

/// Shortest-roundtrip float formatting shared by every CSV writer, so
/// re-running a command reproduces files byte for byte.
pub fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

pub fn write_csv(
    path: &Path,
    comment: Option<&str>,
    header: &str,
    rows: impl Iterator<Item = String>,
) -> Result<()> {
    let mut text = String::new();
    if let Some(c) = comment {
        for line in c.lines() {
            text.push_str("# ");
            text.push_str(line);
            text.push('\n');
        }
    }
    text.push_str(header);
    text.push('\n');
    for row in rows {
        text.push_str(&row);
        text.push('\n');
    }
    std::fs::write(path, text)?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    std::fs::write(path, bytes)?;
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct Timing {
    wall_clock_seconds: f64,
}

/// Fills in the dataset for a run: an explicit dataset directory when
/// configured, otherwise deterministic generation.
pub fn resolve_dataset(
    cfg: &ExperimentConfig,
    master_seed: u64,
) -> Result<(SplitDataset, GeneratorConfig)> {
    if let Some(path) = &cfg.data.path {
        let (ds, gen_cfg) = load_dataset(Path::new(path))?;
        Ok((ds, gen_cfg))
    } else {
        let gen_cfg = cfg.resolved_generator(master_seed);
        Ok((generate(&gen_cfg)?, gen_cfg))
    }
}

/// `gen`: writes the dataset to `<out>/dataset-s<seed>` with a
/// deterministic name so repeated generation can be checksummed.
pub fn cmd_gen(cfg: &ExperimentConfig, master_seed: u64, out: &Path) -> Result<PathBuf> {
    let gen_cfg = cfg.resolved_generator(master_seed);
    let ds = generate(&gen_cfg)?;
    let dir = out.join(format!("dataset-s{}", gen_cfg.seed));
    crate::synthdata::save_dataset(&dir, &ds, &gen_cfg)?;
    Ok(dir)
}

#[derive(Debug, Clone, Default)]
pub struct TrainOverrides {
    pub mode: Option<TrainMode>,
    pub phi: Option<f64>,
    pub srej: Option<f64>,
}

pub fn run_dir_name(stamp: u64, seed: u64, cfg: &ExperimentConfig) -> String {
    let mut name = format!("{stamp}-s{seed}-{}", mode_name(cfg.trainer.mode));
    if cfg.trainer.mode == TrainMode::Shaped {
        name.push_str(&format!("-phi{:.2}", cfg.reward.phi));
    }
    if cfg.reward.strategy == crate::reward::RewardStrategy::Selective {
        name.push_str(&format!("-srej{:.2}", cfg.reward.s_rej));
    }
    name
}

fn history_rows(out: &TrainOutput) -> impl Iterator<Item = String> + '_ {
    out.traces.iter().flat_map(|t| {
        t.steps.iter().map(|s| {
            format!(
                "{},{},{},{},{},{},{}",
                s.update,
                s.episode,
                s.step,
                fmt_f64(s.r_tilde),
                fmt_f64(s.r_bar),
                fmt_f64(s.r),
                fmt_f64(s.val_metric)
            )
        })
    })
}

/// Trains one run into `run_dir` and persists every artifact. The manifest
/// is written even when training fails, carrying the failure cause.
pub fn train_into(
    cfg: &ExperimentConfig,
    master_seed: u64,
    run_dir: &Path,
) -> Result<(RunStatus, PathBuf)> {
    cfg.validate()?;
    let (data, gen_cfg) = resolve_dataset(cfg, master_seed)?;
    let mut resolved = cfg.clone();
    resolved.data.generator = gen_cfg;
    resolved.data.derive_seed = false;
    let tcfg = resolved.trainer_config(master_seed);
    let task = resolved.task_spec();
    std::fs::create_dir_all(run_dir)?;

    let h_a: Option<(ControllerModel, CheckpointMeta)> = match cfg.trainer.mode {
        TrainMode::Shaped => {
            let path = cfg.trainer.h_a_checkpoint.as_ref().ok_or_else(|| {
                Error::MissingArtifact(
                    "shaped mode requires trainer.h_a_checkpoint".into(),
                )
            })?;
            let (net, meta) = load_network::<f64>(Path::new(path))?;
            Some((ControllerModel { net }, meta))
        }
        _ => None,
    };

    let interval = resolved.output.checkpoint_interval;
    let mut hook = |update: usize, _p: &PredictorModel, c: &ControllerModel| {
        if interval > 0 && update % interval == 0 {
            let _ = save_network(
                &run_dir.join(format!("controller_u{update:04}.ckpt")),
                &c.net,
                &CheckpointMeta {
                    role: Some(mode_name(resolved.trainer.mode).to_string()),
                    phi: Some(resolved.reward.phi),
                },
            );
        }
    };
    let result = match &h_a {
        Some((model, _)) => {
            train_shaped_with_hook(&tcfg, &task, &data, model, Some(&mut hook))
        }
        None => train_iqa_with_hook(&tcfg, &task, &data, Some(&mut hook)),
    };
    let out = match result {
        Ok(out) => out,
        Err(e) => {
            // failure manifest with the cause, then surface the error
            let failed = serde_json::json!({
                "code_version": env!("CARGO_PKG_VERSION"),
                "seed": master_seed,
                "status": { "status": "failed", "message": e.to_string() },
                "config": { "experiment": &resolved },
            });
            write_json(&run_dir.join("manifest.json"), &failed)?;
            return Err(e);
        }
    };

    let mut manifest = out.manifest.clone();
    manifest.config = serde_json::json!({ "experiment": &resolved });
    write_json(&run_dir.join("manifest.json"), &manifest)?;
    write_json(
        &run_dir.join("timing.json"),
        &Timing {
            wall_clock_seconds: out.manifest.wall_clock_seconds,
        },
    )?;
    write_csv(
        &run_dir.join("history.csv"),
        None,
        "update_index,episode,step,r_tilde,r_bar,r,val_metric",
        history_rows(&out),
    )?;
    save_network(
        &run_dir.join("predictor.ckpt"),
        &out.predictor.net,
        &CheckpointMeta::default(),
    )?;
    let controller_ckpt = run_dir.join("controller.ckpt");
    save_network(
        &controller_ckpt,
        &out.controller.net,
        &CheckpointMeta {
            role: Some(mode_name(resolved.trainer.mode).to_string()),
            phi: Some(resolved.reward.phi),
        },
    )?;
    Ok((out.manifest.status.clone(), controller_ckpt))
}

/// `train`: one training run under `<out>/<stamp>-s<seed>-<mode>...`.
pub fn cmd_train(
    cfg: &ExperimentConfig,
    master_seed: u64,
    out: &Path,
    overrides: &TrainOverrides,
) -> Result<(PathBuf, RunStatus)> {
    let mut cfg = cfg.clone();
    if let Some(mode) = overrides.mode {
        cfg.trainer.mode = mode;
    }
    if let Some(phi) = overrides.phi {
        cfg.reward.phi = phi;
    }
    if let Some(srej) = overrides.srej {
        cfg.reward.s_rej = srej;
    }
    let run_dir = out.join(run_dir_name(timestamp(), master_seed, &cfg));
    let (status, _) = train_into(&cfg, master_seed, &run_dir)?;
    Ok((run_dir, status))
}

/// A run directory loaded back into memory: manifest, config, dataset and
/// both models.
pub struct LoadedRun {
    pub dir: PathBuf,
    pub name: String,
    pub manifest: RunManifest,
    pub exp: ExperimentConfig,
    pub task: TaskSpec,
    pub controller: ControllerModel,
    pub controller_meta: CheckpointMeta,
    pub predictor: PredictorModel,
    pub data: SplitDataset,
}

pub fn load_run(dir: &Path) -> Result<LoadedRun> {
    let manifest_path = dir.join("manifest.json");
    if !manifest_path.exists() {
        return Err(Error::MissingArtifact(format!(
            "run manifest {}",
            manifest_path.display()
        )));
    }
    let manifest: RunManifest = serde_json::from_slice(&std::fs::read(&manifest_path)?)?;
    let exp: ExperimentConfig = serde_json::from_value(
        manifest
            .config
            .get("experiment")
            .cloned()
            .ok_or_else(|| Error::MissingArtifact("experiment config in manifest".into()))?,
    )?;
    let task = match manifest.task_kind {
        TaskKind::Classification => TaskSpec::classification(exp.task.base_channels),
        TaskKind::Segmentation => {
            TaskSpec::segmentation(exp.task.base_channels, exp.task.seg_threshold)
        }
        TaskKind::Reconstruction => TaskSpec::reconstruction(exp.task.base_channels),
    };
    let data = match &exp.data.path {
        Some(p) if Path::new(p).exists() => load_dataset(Path::new(p))?.0,
        _ => generate(&exp.data.generator)?,
    };
    let (ctrl_net, controller_meta) = load_network::<f64>(&dir.join("controller.ckpt"))?;
    let (pred_net, _) = load_network::<f64>(&dir.join("predictor.ckpt"))?;
    Ok(LoadedRun {
        dir: dir.to_path_buf(),
        name: dir
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| dir.display().to_string()),
        manifest,
        exp,
        task,
        controller: ControllerModel { net: ctrl_net },
        controller_meta,
        predictor: PredictorModel { net: pred_net },
        data,
    })
}

/// Holdout scores and per-sample metrics of a loaded run.
pub struct HoldoutEval {
    pub scores: Vec<f64>,
    pub metrics: Vec<f64>,
}

pub fn eval_holdout(run: &LoadedRun) -> Result<HoldoutEval> {
    let inputs: Vec<&crate::tensor::Tensor> =
        run.data.holdout.iter().map(|s| &s.raster).collect();
    let targets: Vec<crate::tasks::Target> = run
        .data
        .holdout
        .iter()
        .map(|s| s.target(run.task.kind))
        .collect();
    let scores = run.controller.score_batch(&inputs)?;
    let metrics = crate::tasks::metric_values(&run.task, &run.predictor, &inputs, &targets)?;
    Ok(HoldoutEval { scores, metrics })
}

/// `eval`: rejection curve, per-sample scores and an SVG chart, written
/// into each run directory.
pub fn cmd_eval(run_dirs: &[PathBuf], ks_override: Option<&[f64]>) -> Result<()> {
    for dir in run_dirs {
        let run = load_run(dir)?;
        let ks: Vec<f64> = ks_override
            .map(|k| k.to_vec())
            .unwrap_or_else(|| run.exp.evaluation.ks.clone());
        let metrics = holdout_metrics_at(
            &run.task,
            &run.controller,
            &run.predictor,
            &run.data.holdout,
            &ks,
        )?;
        let h = run.data.holdout.len();
        let curve = RejectionCurve {
            points: ks
                .iter()
                .zip(&metrics)
                .map(|(&k, &m)| CurvePoint {
                    k,
                    mean: m,
                    std: 0.0,
                    n_retained: ((1.0 - k) * h as f64).ceil() as usize,
                })
                .collect(),
        };
        write_csv(
            &dir.join("curve.csv"),
            None,
            "run,k,mean,std,n_retained",
            curve.points.iter().map(|p| {
                format!(
                    "{},{},{},{},{}",
                    run.name,
                    fmt_f64(p.k),
                    fmt_f64(p.mean),
                    fmt_f64(p.std),
                    p.n_retained
                )
            }),
        )?;
        let ev = eval_holdout(&run)?;
        write_csv(
            &dir.join("scores.csv"),
            None,
            "run,sample_id,score,metric,present,artefact,artefact_in_roi,hard,task_impact",
            run.data.holdout.iter().enumerate().map(|(i, s)| {
                format!(
                    "{},{},{},{},{},{},{},{},{}",
                    run.name,
                    s.id,
                    fmt_f64(ev.scores[i]),
                    fmt_f64(ev.metrics[i]),
                    s.present,
                    s.artefact,
                    s.artefact_in_roi,
                    s.hard,
                    s.task_impact()
                )
            }),
        )?;
        if run.exp.output.write_svg {
            let svg = crate::evaluation::curve_svg(
                &[(run.name.clone(), &curve)],
                run.task.reward_metric_name(),
            );
            std::fs::write(dir.join("curve.svg"), svg)?;
        }
    }
    Ok(())
}
