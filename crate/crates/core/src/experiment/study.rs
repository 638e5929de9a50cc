//! Multi-cell studies: the shaped-reward grid (train a task-agnostic
//! controller per seed, freeze it, train shaped controllers over a phi
//! list, evaluate over a rejection-ratio list) and the validation-set
//! rejection-ratio ablation for the selective reward strategy.

use super::{fmt_f64, load_run, run_dir_name, timestamp, train_into, write_csv};
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::evaluation::holdout_metrics_at;
use crate::reward::RewardStrategy;
use crate::trainer::{RunStatus, TrainMode};
use serde::Serialize;
use std::collections::VecDeque;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StudyPlan {
    /// task_agnostic pretrain, then shaped runs over a phi grid.
    Shaped,
    /// Selective-strategy runs over an s_rej grid.
    Srej,
}

impl StudyPlan {
    pub fn parse(s: &str) -> Result<StudyPlan> {
        match s {
            "shaped" => Ok(StudyPlan::Shaped),
            "srej" => Ok(StudyPlan::Srej),
            other => Err(Error::config(
                "study",
                format!("unknown study plan `{other}` (shaped | srej)"),
            )),
        }
    }
}

#[derive(Debug, Clone)]
pub struct StudyParams {
    pub phis: Vec<f64>,
    pub srejs: Vec<f64>,
    pub ks: Vec<f64>,
    pub seeds: Vec<u64>,
    pub jobs: usize,
}

impl StudyParams {
    pub fn defaults(cfg: &ExperimentConfig) -> Self {
        StudyParams {
            phis: vec![0.0, 0.85, 0.95, 1.0],
            srejs: vec![0.0, 0.1, 0.2, 0.3],
            ks: cfg.evaluation.ks.clone(),
            seeds: vec![1, 2, 3],
            jobs: 1,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
struct CellResult {
    seed: u64,
    /// phi for the shaped plan, s_rej for the srej plan.
    value: f64,
    run_dir: String,
    status: String,
    /// Holdout metric per rejection ratio, aligned with `ks`.
    metrics: Vec<f64>,
}

#[derive(Serialize)]
struct StudyManifest<'a> {
    plan: &'a str,
    seeds: &'a [u64],
    values: &'a [f64],
    ks: &'a [f64],
    cells: &'a [CellResult],
}

fn status_name(s: &RunStatus) -> String {
    match s {
        RunStatus::Completed => "completed".into(),
        RunStatus::Converged { at_update } => format!("converged@{at_update}"),
        RunStatus::Failed { message, .. } => format!("failed: {message}"),
    }
}

/// Trains one cell into `cells_dir` and evaluates it on its holdout.
fn run_cell(
    cfg: &ExperimentConfig,
    seed: u64,
    value: f64,
    ks: &[f64],
    cells_dir: &Path,
) -> Result<CellResult> {
    let dir = cells_dir.join(run_dir_name(timestamp(), seed, cfg));
    let (status, _) = train_into(cfg, seed, &dir)?;
    if status.is_failure() {
        return Ok(CellResult {
            seed,
            value,
            run_dir: dir.display().to_string(),
            status: status_name(&status),
            metrics: Vec::new(),
        });
    }
    let run = load_run(&dir)?;
    let metrics = holdout_metrics_at(
        &run.task,
        &run.controller,
        &run.predictor,
        &run.data.holdout,
        ks,
    )?;
    super::cmd_eval(&[dir.clone()], Some(ks))?;
    Ok(CellResult {
        seed,
        value,
        run_dir: dir.display().to_string(),
        status: status_name(&status),
        metrics,
    })
}

/// Pipeline for one seed of the shaped study.
fn shaped_seed_pipeline(
    cfg: &ExperimentConfig,
    seed: u64,
    phis: &[f64],
    ks: &[f64],
    cells_dir: &Path,
) -> Result<Vec<CellResult>> {
    // stage 1: task-agnostic pretrain, frozen afterwards
    let mut ta_cfg = cfg.clone();
    ta_cfg.trainer.mode = TrainMode::TaskAgnostic;
    let ta_dir = cells_dir.join(run_dir_name(timestamp(), seed, &ta_cfg));
    let (ta_status, h_a_ckpt) = train_into(&ta_cfg, seed, &ta_dir)?;
    if ta_status.is_failure() {
        return Err(Error::Numerical(format!(
            "task-agnostic pretrain failed for seed {seed}: {}",
            status_name(&ta_status)
        )));
    }
    // stage 2: shaped runs over the phi grid against the frozen controller
    let mut out = Vec::new();
    for &phi in phis {
        let mut cell_cfg = cfg.clone();
        cell_cfg.trainer.mode = TrainMode::Shaped;
        cell_cfg.reward.phi = phi;
        cell_cfg.trainer.h_a_checkpoint = Some(h_a_ckpt.display().to_string());
        out.push(run_cell(&cell_cfg, seed, phi, ks, cells_dir)?);
    }
    Ok(out)
}

fn srej_seed_pipeline(
    cfg: &ExperimentConfig,
    seed: u64,
    srejs: &[f64],
    ks: &[f64],
    cells_dir: &Path,
) -> Result<Vec<CellResult>> {
    let mut out = Vec::new();
    for &s_rej in srejs {
        let mut cell_cfg = cfg.clone();
        cell_cfg.trainer.mode = TrainMode::TaskSpecific;
        cell_cfg.reward.strategy = RewardStrategy::Selective;
        cell_cfg.reward.s_rej = s_rej;
        out.push(run_cell(&cell_cfg, seed, s_rej, ks, cells_dir)?);
    }
    Ok(out)
}

/// Runs the study: independent seed pipelines execute on up to `jobs`
/// workers, each writing only under its own cell directories.
pub fn cmd_study(
    cfg: &ExperimentConfig,
    plan: StudyPlan,
    params: &StudyParams,
    out: &Path,
) -> Result<PathBuf> {
    cfg.validate()?;
    let plan_name = match plan {
        StudyPlan::Shaped => "shaped",
        StudyPlan::Srej => "srej",
    };
    let values: &[f64] = match plan {
        StudyPlan::Shaped => &params.phis,
        StudyPlan::Srej => &params.srejs,
    };
    if values.is_empty() || params.seeds.is_empty() || params.ks.is_empty() {
        return Err(Error::config(
            "study",
            "value list, seeds and ks must be nonempty",
        ));
    }
    for &v in values {
        let ok = match plan {
            StudyPlan::Shaped => (0.0..=1.0).contains(&v),
            StudyPlan::Srej => (0.0..1.0).contains(&v),
        };
        if !ok {
            return Err(Error::config("study", format!("grid value {v} out of range")));
        }
    }
    let study_dir = out.join(format!("study-{plan_name}-{}", timestamp()));
    let cells_dir = study_dir.join("cells");
    std::fs::create_dir_all(&cells_dir)?;

    let queue: Mutex<VecDeque<u64>> = Mutex::new(params.seeds.iter().copied().collect());
    let results: Mutex<Vec<(u64, Result<Vec<CellResult>>)>> = Mutex::new(Vec::new());
    let workers = params.jobs.max(1).min(params.seeds.len());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let seed = {
                    let mut q = queue.lock().expect("queue lock");
                    match q.pop_front() {
                        Some(s) => s,
                        None => break,
                    }
                };
                let r = match plan {
                    StudyPlan::Shaped => {
                        shaped_seed_pipeline(cfg, seed, &params.phis, &params.ks, &cells_dir)
                    }
                    StudyPlan::Srej => {
                        srej_seed_pipeline(cfg, seed, &params.srejs, &params.ks, &cells_dir)
                    }
                };
                results.lock().expect("results lock").push((seed, r));
            });
        }
    });
    let mut gathered = results.into_inner().expect("results lock");
    gathered.sort_by_key(|(seed, _)| *seed);
    let mut cells: Vec<CellResult> = Vec::new();
    for (_, r) in gathered {
        cells.extend(r?);
    }
    cells.sort_by(|a, b| {
        a.seed
            .cmp(&b.seed)
            .then(a.value.partial_cmp(&b.value).expect("finite grid values"))
    });

    // grid aggregation over seeds
    let value_col = match plan {
        StudyPlan::Shaped => "phi",
        StudyPlan::Srej => "s_rej",
    };
    let mut long_rows = Vec::new();
    let mut wide: Vec<Vec<String>> = vec![Vec::new(); params.ks.len()];
    for &v in values {
        for (ki, &k) in params.ks.iter().enumerate() {
            let ms: Vec<f64> = cells
                .iter()
                .filter(|c| c.value == v && !c.metrics.is_empty())
                .map(|c| c.metrics[ki])
                .collect();
            if ms.is_empty() {
                wide[ki].push("-".into());
                continue;
            }
            let mean = ms.iter().sum::<f64>() / ms.len() as f64;
            let std = if ms.len() > 1 {
                (ms.iter().map(|m| (m - mean) * (m - mean)).sum::<f64>()
                    / (ms.len() - 1) as f64)
                    .sqrt()
            } else {
                0.0
            };
            long_rows.push(format!(
                "{},{},{},{},{}",
                fmt_f64(v),
                fmt_f64(k),
                fmt_f64(mean),
                fmt_f64(std),
                ms.len()
            ));
            wide[ki].push(format!("{mean:.4}±{std:.4}"));
        }
    }
    write_csv(
        &study_dir.join("grid_long.csv"),
        None,
        &format!("{value_col},k,mean,std,n_seeds"),
        long_rows.into_iter(),
    )?;
    let wide_header = std::iter::once("k".to_string())
        .chain(values.iter().map(|v| format!("{value_col}_{v:.2}")))
        .collect::<Vec<_>>()
        .join(",");
    write_csv(
        &study_dir.join("grid.csv"),
        Some(&format!(
            "holdout {} per cell, mean±std over {} seed(s)",
            cfg.task_spec().reward_metric_name(),
            params.seeds.len()
        )),
        &wide_header,
        params.ks.iter().enumerate().map(|(ki, &k)| {
            std::iter::once(fmt_f64(k))
                .chain(wide[ki].iter().cloned())
                .collect::<Vec<_>>()
                .join(",")
        }),
    )?;
    let manifest = StudyManifest {
        plan: plan_name,
        seeds: &params.seeds,
        values,
        ks: &params.ks,
        cells: &cells,
    };
    let mut bytes = serde_json::to_vec_pretty(&manifest)?;
    bytes.push(b'\n');
    std::fs::write(study_dir.join("study.json"), bytes)?;
    Ok(study_dir)
}
