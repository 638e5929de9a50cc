// scratch calibration harness (not shipped): measures detection AUCs and
// runtimes for candidate acceptance configs
use amenable::controller::ControllerModel;
use amenable::evaluation::roc_auc;
use amenable::synthdata::{generate, GeneratorConfig, HardRates, KindRates, SplitDataset};
use amenable::tasks::TaskSpec;
use amenable::tensor::Tensor;
use amenable::trainer::{TrainMode, TrainerConfig};

fn cls_data(seed: u64) -> SplitDataset {
    generate(&GeneratorConfig {
        train: 2000,
        val: 120,
        holdout: 400,
        image_size: 32,
        presence_rate: 0.5,
        artefact_rates: KindRates {
            gaussian_noise: 0.15,
            stripe: 0.15,
            blur: 0.0,
            channel_misalign: 0.0,
        },
        artefact_in_roi_fraction: 1.0,
        artefact_severity: (1.0, 1.0),
        hard_rates: HardRates {
            low_contrast: std::env::var("CAL_HARD").map(|v| v.parse().unwrap()).unwrap_or(0.05),
            tiny_target: std::env::var("CAL_HARD").map(|v| v.parse().unwrap()).unwrap_or(0.05),
        },
        hard_severity: (0.55, 0.8),
        seed,
        ..Default::default()
    })
    .unwrap()
}

fn auc_flag(ctrl: &ControllerModel, data: &SplitDataset, flag: impl Fn(&amenable::synthdata::ImageSample) -> bool) -> f64 {
    let rasters: Vec<&Tensor> = data.train.iter().map(|s| &s.raster).collect();
    let scores = ctrl.score_batch(&rasters).unwrap();
    let neg: Vec<f64> = scores.iter().map(|s| -s).collect();
    let flags: Vec<bool> = data.train.iter().map(flag).collect();
    roc_auc(&neg, &flags).unwrap()
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let which = args.get(1).map(String::as_str).unwrap_or("cls");
    let seed: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(1);
    let updates: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(120);
    let lr: f64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(2e-3);

    match which {
        "cls" => {
            let entropy: f64 = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(0.01);
            let pred_lr: f64 = args.get(6).and_then(|s| s.parse().ok()).unwrap_or(2e-3);
            let window: usize = args.get(7).and_then(|s| s.parse().ok()).unwrap_or(0);
            let opt = args.get(8).map(String::as_str).unwrap_or("adam");
            let kk: usize = args.get(9).and_then(|s| s.parse().ok()).unwrap_or(2);
            let optimizer = if opt == "sgd" {
                amenable::nn::OptimizerKind::Sgd
            } else {
                amenable::nn::OptimizerKind::adam()
            };
            let data = cls_data(seed);
            let bsz: usize = std::env::var("CAL_B").map(|v| v.parse().unwrap()).unwrap_or(32);
            let tt: usize = std::env::var("CAL_T").map(|v| v.parse().unwrap()).unwrap_or(8);
            let gamma: f64 = std::env::var("CAL_GAMMA").map(|v| v.parse().unwrap()).unwrap_or(0.95);
            let cfg = TrainerConfig {
                mode: TrainMode::TaskSpecific,
                batch_size: bsz,
                steps_per_episode: tt,
                episodes_per_update: kk,
                max_updates: updates,
                convergence_window: window,
                convergence_tol: std::env::var("CAL_TOL").map(|v| v.parse().unwrap()).unwrap_or(1e-3),
                predictor_reset_interval: std::env::var("CAL_RESET").map(|v| v.parse().unwrap()).unwrap_or(0),
                predictor_lr: pred_lr,
                policy: amenable::controller::PolicyUpdateConfig {
                    lr,
                    entropy_coeff: entropy,
                    optimizer,
                    gamma,
                    ..Default::default()
                },
                seed,
                ..Default::default()
            };
            let t0 = std::time::Instant::now();
            let data_ref = &data;
            let mut hook = move |u: usize, _p: &amenable::tasks::PredictorModel, c: &ControllerModel| {
                if u % 15 == 0 {
                    let auc = auc_flag(c, data_ref, |s| s.artefact);
                    eprintln!("  u={u} auc={auc:.4}");
                }
            };
            let out = amenable::trainer::train_iqa_with_hook(
                &cfg,
                &TaskSpec::classification(6),
                &data,
                Some(&mut hook),
            )
            .unwrap();
            let secs = t0.elapsed().as_secs_f64();
            let auc = auc_flag(&out.controller, &data, |s| s.artefact);
            let last = out.manifest.history.last().unwrap();
            println!(
                "cls seed={seed} ran={} lr={lr} ent={entropy} plr={pred_lr} auc={auc:.4} val={:.4} sel={:.3} status={:?} time={secs:.1}s",
                out.manifest.updates_run, last.val_metric, last.selected_fraction, out.manifest.status
            );
        }
        "probe" => {
            // counterfactual check: fixed selection policies, same sampling
            // stream, no controller in the loop
            use amenable::nn::OptimizerState;
            use amenable::rng::rng_for_indexed;
            use amenable::tasks::{metric_values, train_step, Target};
            use rand::Rng;
            let data = cls_data(seed);
            let task = TaskSpec::classification(6);
            let val_inputs: Vec<&Tensor> = data.val.iter().map(|s| &s.raster).collect();
            let val_targets: Vec<Target> =
                data.val.iter().map(|s| s.target(task.kind)).collect();
            for policy in ["clean", "anti", "all", "half"] {
                let mut model = task
                    .build_predictor(
                        &[1, 32, 32],
                        &mut amenable::rng::rng_for(seed, "predictor"),
                    )
                    .unwrap();
                let mut opt = OptimizerState::adam(2e-3);
                let steps = updates; // reuse the updates arg as step count
                let mut rng = rng_for_indexed(seed, "probe", 0);
                let mut clean_err = 0.0;
                let mut corr_err = 0.0;
                for step in 0..steps {
                    let mut batch = Vec::new();
                    while batch.len() < 32 {
                        let i = rng.random_range(0..data.train.len());
                        batch.push(&data.train[i]);
                    }
                    let sel: Vec<&amenable::synthdata::ImageSample> = batch
                        .iter()
                        .copied()
                        .filter(|s| match policy {
                            "clean" => !s.artefact,
                            "anti" => s.artefact || rng.random::<f64>() < 0.35,
                            "half" => rng.random::<f64>() < 0.5,
                            _ => true,
                        })
                        .collect();
                    let inputs: Vec<&Tensor> = sel.iter().map(|s| &s.raster).collect();
                    let targets: Vec<Target> =
                        sel.iter().map(|s| s.target(task.kind)).collect();
                    train_step(&task, &mut model, &inputs, &targets, None, &mut opt).unwrap();
                    if step >= steps - 20 {
                        let ls = metric_values(&task, &model, &val_inputs, &val_targets).unwrap();
                        let mut ce = (0.0, 0.0);
                        let mut ke = (0.0, 0.0);
                        for (l, s) in ls.iter().zip(&data.val) {
                            if s.artefact {
                                ke = (ke.0 + l, ke.1 + 1.0);
                            } else {
                                ce = (ce.0 + l, ce.1 + 1.0);
                            }
                        }
                        clean_err += ce.0 / ce.1;
                        corr_err += ke.0 / ke.1;
                    }
                }
                println!(
                    "probe seed={seed} policy={policy:5} clean_err={:.4} corr_err={:.4} val_acc={:.4}",
                    clean_err / 20.0,
                    corr_err / 20.0,
                    1.0 - (0.7 * clean_err / 20.0 + 0.3 * corr_err / 20.0)
                );
            }
        }
        "diff" => {
            // mean-image difference between corrupted positives and negatives
            let data = cls_data(seed);
            let s = 32usize;
            let mut pos = vec![0.0f64; s * s];
            let mut neg = vec![0.0f64; s * s];
            let (mut np, mut nn) = (0.0, 0.0);
            for smp in &data.train {
                if !smp.artefact || smp.hard {
                    continue;
                }
                let acc = if smp.present { (&mut pos, &mut np) } else { (&mut neg, &mut nn) };
                for (a, &v) in acc.0.iter_mut().zip(smp.raster.data()) {
                    *a += v;
                }
                *acc.1 += 1.0;
            }
            for v in pos.iter_mut() {
                *v /= np;
            }
            for v in neg.iter_mut() {
                *v /= nn;
            }
            let max_diff = pos
                .iter()
                .zip(&neg)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max);
            let mean_pos: f64 = pos.iter().sum::<f64>() / (s * s) as f64;
            let mean_neg: f64 = neg.iter().sum::<f64>() / (s * s) as f64;
            println!(
                "diff seed={seed} n_pos={np} n_neg={nn} mean_pos={mean_pos:.5} mean_neg={mean_neg:.5} max_pixel_diff={max_diff:.5}"
            );
            // variance of per-image global mean, per group
            let stats = |flag: bool| {
                let vals: Vec<f64> = data
                    .train
                    .iter()
                    .filter(|x| x.artefact && !x.hard && x.present == flag)
                    .map(|x| x.raster.iter().sum::<f64>() / (s * s) as f64)
                    .collect();
                let m = vals.iter().sum::<f64>() / vals.len() as f64;
                let v = vals.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / vals.len() as f64;
                (m, v.sqrt())
            };
            let (mp, sp) = stats(true);
            let (mn, sn) = stats(false);
            println!("global-mean pos {mp:.5}+-{sp:.5} neg {mn:.5}+-{sn:.5}");

            // recentred radial profile around each sample's own disc center,
            // re-deriving the geometry from the per-sample stream
            let gen_cfg = GeneratorConfig {
                seed,
                ..Default::default()
            };
            let mut prof_pos = vec![(0.0f64, 0.0f64); 16];
            let mut prof_neg = vec![(0.0f64, 0.0f64); 16];
            for smp in &data.train {
                if !smp.artefact || smp.hard {
                    continue;
                }
                let mut r = amenable::rng::rng_for_indexed(gen_cfg.seed, "sample", smp.id as u64);
                use rand::Rng;
                let radius = 3.5 + r.random::<f64>() * 2.5;
                let margin = radius.ceil() + 2.0;
                let span = 32.0 - 2.0 * margin;
                let cy = margin + r.random::<f64>() * span;
                let cx = margin + r.random::<f64>() * span;
                let prof = if smp.present { &mut prof_pos } else { &mut prof_neg };
                for y in 0..s {
                    for x in 0..s {
                        let d = ((y as f64 - cy).powi(2) + (x as f64 - cx).powi(2)).sqrt();
                        let bin = d.floor() as usize;
                        if bin < 16 {
                            prof[bin].0 += smp.raster.data()[y * s + x];
                            prof[bin].1 += 1.0;
                        }
                    }
                }
            }
            for bin in 0..13 {
                let p = prof_pos[bin].0 / prof_pos[bin].1.max(1.0);
                let n = prof_neg[bin].0 / prof_neg[bin].1.max(1.0);
                println!("  r={bin:2} pos={p:.4} neg={n:.4} diff={:+.4}", p - n);
            }
        }
        "signal" => {
            // true environment signal under random selection: correlation of
            // the discounted return with the per-step count of selected
            // corrupted vs clean samples
            use amenable::nn::OptimizerState;
            use amenable::reward::RewardState;
            use amenable::trainer::run_episode;
            let data = cls_data(seed);
            let task = TaskSpec::classification(6);
            let gamma: f64 = std::env::var("CAL_GAMMA").map(|v| v.parse().unwrap()).unwrap_or(0.6);
            let cfg = TrainerConfig {
                mode: TrainMode::TaskSpecific,
                batch_size: std::env::var("CAL_B").map(|v| v.parse().unwrap()).unwrap_or(16),
                steps_per_episode: std::env::var("CAL_T").map(|v| v.parse().unwrap()).unwrap_or(12),
                episodes_per_update: 1,
                max_updates: 1,
                predictor_lr: lr,
                seed,
                ..Default::default()
            };
            let ctrl = ControllerModel::build(
                &[1, 32, 32],
                &cfg.controller_channels,
                &cfg.controller_dense,
                &mut amenable::rng::rng_for(seed, "controller"),
            )
            .unwrap();
            let mut predictor = task
                .build_predictor(&[1, 32, 32], &mut amenable::rng::rng_for(seed, "predictor"))
                .unwrap();
            let mut opt = OptimizerState::adam(lr);
            let mut state = RewardState::new();
            let mut rows: Vec<(f64, f64, f64)> = Vec::new(); // (n_corr_sel, n_clean_sel, G)
            let episodes = updates;
            for e in 0..episodes {
                let trace = run_episode(
                    &cfg, &task, &data, &mut predictor, &mut opt, &ctrl, &mut state, e, 0,
                )
                .unwrap();
                let rewards: Vec<f64> = trace.steps.iter().map(|s| s.r).collect();
                for (t, step) in trace.steps.iter().enumerate() {
                    let mut g = 0.0;
                    for (k, r) in rewards[t..].iter().enumerate() {
                        g += gamma.powi(k as i32) * r;
                    }
                    let mut nc = 0.0;
                    let mut nk = 0.0;
                    for (id, &a) in step.sample_ids.iter().zip(&step.actions) {
                        if a {
                            if data.train_by_id(*id).artefact {
                                nc += 1.0;
                            } else {
                                nk += 1.0;
                            }
                        }
                    }
                    rows.push((nc, nk, g));
                }
            }
            let n = rows.len() as f64;
            let mg = rows.iter().map(|r| r.2).sum::<f64>() / n;
            let mc = rows.iter().map(|r| r.0).sum::<f64>() / n;
            let mk = rows.iter().map(|r| r.1).sum::<f64>() / n;
            let mut cov_c = 0.0;
            let mut cov_k = 0.0;
            let mut var_c = 0.0;
            let mut var_k = 0.0;
            for (nc, nk, g) in &rows {
                cov_c += (nc - mc) * (g - mg);
                cov_k += (nk - mk) * (g - mg);
                var_c += (nc - mc) * (nc - mc);
                var_k += (nk - mk) * (nk - mk);
            }
            // per-extra-sample effect on the return
            println!(
                "signal seed={seed} steps={} beta_corr={:+.6} beta_clean={:+.6} (per extra selected sample)",
                rows.len(),
                cov_c / var_c,
                cov_k / var_k
            );
        }
        other => {
            eprintln!("unknown calibration `{other}`");
        }
    }
}
