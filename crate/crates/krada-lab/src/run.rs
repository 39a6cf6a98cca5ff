//! Orchestration for the `krada` subcommands: dataset generation, training
//! runs with checkpoints and reports, evaluation, threshold calibration,
//! and the ablation matrix.

use crate::checkpoint;
use crate::config::ExperimentConfig;
use crate::dataset::{self, Manifest};
use crate::report;
use crate::{data_err, pnm, Result};
use krada_core::label::LabelMap;
use krada_core::loss::LossBundle;
use krada_core::metrics::{ConfusionAccumulator, ImageLevelReport, MetricReport};
use krada_core::nn::SegModel;
use krada_core::openset::{calibrate_delta, FitMetric, ProbMap};
use krada_core::synth::{LabeledImage, Split};
use krada_core::tensor::Tensor;
use krada_core::trainer::{evaluate_model, TrainMode, Trainer};
use std::fs;
use std::path::Path;

/// Everything a training run needs from disk, loaded once.
pub struct DataBundle {
    pub manifest: Manifest,
    pub source: Vec<LabeledImage>,
    pub target_train: Vec<LabeledImage>,
    pub target_test: Vec<LabeledImage>,
}

pub fn load_data(cfg: &ExperimentConfig) -> Result<DataBundle> {
    let root = &cfg.dataset_dir;
    let manifest = dataset::read_manifest(root)?;
    Ok(DataBundle {
        source: dataset::load_split(root, &manifest, Split::Source)?,
        target_train: dataset::load_split(root, &manifest, Split::TargetTrain)?,
        target_test: dataset::load_split(root, &manifest, Split::TargetTest)?,
        manifest,
    })
}

pub fn cmd_gen(cfg: &ExperimentConfig) -> Result<Manifest> {
    dataset::write_dataset(
        &cfg.dataset_dir,
        &cfg.to_scene_spec(),
        cfg.source_count,
        cfg.target_train_count,
        cfg.target_test_count,
    )
}

/// One full training run: step loop, periodic snapshots, final checkpoints,
/// loss trace, and held-out evaluation, all under `cfg.run_dir`.
pub struct RunArtifacts {
    pub trace: Vec<LossBundle>,
    pub pixel: MetricReport,
    pub image: ImageLevelReport,
}

pub fn cmd_train(cfg: &ExperimentConfig, resume: bool) -> Result<RunArtifacts> {
    let data = load_data(cfg)?;
    execute_training(cfg, &data, resume)
}

pub fn execute_training(
    cfg: &ExperimentConfig,
    data: &DataBundle,
    resume: bool,
) -> Result<RunArtifacts> {
    let dir = &cfg.run_dir;
    fs::create_dir_all(dir)?;
    let k = data.manifest.k;
    let tcfg = cfg.to_train_config();

    let mut trainer = if resume {
        let state = checkpoint::load_state(&dir.join(checkpoint::STATE_FILE))?;
        if state.k != k || state.height != data.manifest.height || state.width != data.manifest.width
        {
            return Err(data_err("trainer state does not match the dataset grid"));
        }
        let model = checkpoint::load_model(&dir.join(checkpoint::MODEL_FILE))?;
        let disc = if cfg.mode.uses_adversary() {
            checkpoint::load_disc(&dir.join(checkpoint::DISC_FILE))?
        } else {
            // Untrained in these modes; rebuild the seed-determined initial one.
            krada_core::nn::Discriminator::init(cfg.feat_channels, cfg.disc_hidden, cfg.seed)?
        };
        Trainer::resume(
            tcfg,
            k,
            data.source.clone(),
            data.target_train.clone(),
            model,
            disc,
            state.store,
            state.iteration,
        )?
    } else {
        Trainer::new(tcfg, k, data.source.clone(), data.target_train.clone())?
    };

    let mut trace = Vec::new();
    let mut eval_rows: Vec<(usize, MetricReport)> = Vec::new();
    while !trainer.finished() {
        trace.push(trainer.step()?);
        let t = trainer.iteration();
        if cfg.checkpoint_every > 0 && t % cfg.checkpoint_every == 0 && !trainer.finished() {
            write_checkpoints(cfg, dir, &trainer)?;
        }
        if cfg.eval_every > 0 && t % cfg.eval_every == 0 && !trainer.finished() {
            let summary = evaluate_model(trainer.model(), &data.target_test, cfg.tau_img)?;
            eval_rows.push((t, summary.pixel));
        }
    }

    write_checkpoints(cfg, dir, &trainer)?;
    fs::write(dir.join("config.txt"), cfg.render())?;
    fs::write(dir.join("loss.csv"), report::loss_csv(&trace))?;
    if !eval_rows.is_empty() {
        let mut csv = String::from("iteration,miou,miou_star,unknown_iou\n");
        for (t, r) in &eval_rows {
            let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
            csv.push_str(&format!(
                "{t},{},{},{}\n",
                cell(r.miou),
                cell(r.miou_star),
                cell(r.unknown_iou())
            ));
        }
        fs::write(dir.join("eval_trace.csv"), csv)?;
    }

    let summary = evaluate_model(trainer.model(), &data.target_test, cfg.tau_img)?;
    fs::write(dir.join("metrics.csv"), report::metrics_csv(&summary.pixel))?;
    fs::write(
        dir.join("image_metrics.csv"),
        report::image_level_csv(&summary.image),
    )?;

    Ok(RunArtifacts {
        trace,
        pixel: summary.pixel,
        image: summary.image,
    })
}

fn write_checkpoints(cfg: &ExperimentConfig, dir: &Path, trainer: &Trainer) -> Result<()> {
    checkpoint::save_model(&dir.join(checkpoint::MODEL_FILE), trainer.model())?;
    if cfg.mode.uses_adversary() {
        checkpoint::save_disc(&dir.join(checkpoint::DISC_FILE), trainer.discriminator())?;
    }
    checkpoint::save_state(
        &dir.join(checkpoint::STATE_FILE),
        trainer.iteration(),
        trainer.store(),
        trainer.k(),
        cfg.image_height,
        cfg.image_width,
    )
}

pub struct EvalOutcome {
    pub pixel: MetricReport,
    pub image: ImageLevelReport,
}

/// Evaluates a model checkpoint on the held-out target split. With `dump`,
/// also writes per-image predicted label maps and side-by-side composites.
pub fn cmd_eval(cfg: &ExperimentConfig, model_path: &Path, dump: bool) -> Result<EvalOutcome> {
    let model = checkpoint::load_model(model_path)?;
    let data = load_data(cfg)?;
    if model.k() != data.manifest.k {
        return Err(data_err(format!(
            "checkpoint is for K={}, dataset has K={}",
            model.k(),
            data.manifest.k
        )));
    }
    let dir = &cfg.run_dir;
    fs::create_dir_all(dir)?;
    let summary = evaluate_model(&model, &data.target_test, cfg.tau_img)?;
    fs::write(dir.join("metrics.csv"), report::metrics_csv(&summary.pixel))?;
    fs::write(
        dir.join("image_metrics.csv"),
        report::image_level_csv(&summary.image),
    )?;

    if dump {
        let pred_dir = dir.join("predictions");
        let comp_dir = dir.join("composites");
        fs::create_dir_all(&pred_dir)?;
        fs::create_dir_all(&comp_dir)?;
        for (i, im) in data.target_test.iter().enumerate() {
            let pred = predict_one(&model, im)?;
            fs::write(pred_dir.join(format!("{i:05}.pgm")), pnm::encode_pgm(&pred))?;
            fs::write(
                comp_dir.join(format!("{i:05}.ppm")),
                report::composite_ppm(&im.image, &im.labels, &pred, model.k()),
            )?;
        }
    }

    Ok(EvalOutcome {
        pixel: summary.pixel,
        image: summary.image,
    })
}

fn predict_one(model: &SegModel, im: &LabeledImage) -> Result<LabelMap> {
    let s = im.image.shape();
    let batch = Tensor::from_vec(&[1, s[0], s[1], s[2]], im.image.data().to_vec())?;
    Ok(model.predict(&batch)?.remove(0))
}

pub struct CalibrationOutcome {
    /// Candidate threshold → proxy mean IoU on the held-out split.
    pub rows: Vec<(f64, Option<f64>)>,
    pub chosen: f64,
}

/// Sweeps uniformity thresholds derived from the target-train split and
/// scores each candidate with a zero-training proxy on the held-out split:
/// a pixel whose known-head output sits within `delta` of uniform predicts
/// the unknown class, any other pixel predicts the known head's argmax.
/// Larger proxy mean IoU wins; ties go to the smaller threshold.
pub fn cmd_calibrate(cfg: &ExperimentConfig, model_path: &Path) -> Result<CalibrationOutcome> {
    let model = checkpoint::load_model(model_path)?;
    let data = load_data(cfg)?;
    let k = data.manifest.k;
    if model.k() != k {
        return Err(data_err("checkpoint and dataset disagree on K"));
    }

    let train_maps: Vec<ProbMap> = data
        .target_train
        .iter()
        .map(|im| known_probmap(&model, im))
        .collect::<Result<_>>()?;
    let candidates = calibrate_delta(&train_maps, cfg.metric, cfg.calib_steps, cfg.calib_step_size)?;

    let test_maps: Vec<ProbMap> = data
        .target_test
        .iter()
        .map(|im| known_probmap(&model, im))
        .collect::<Result<_>>()?;

    let mut rows = Vec::with_capacity(candidates.len());
    let mut chosen = candidates[0];
    let mut best: Option<f64> = None;
    for &delta in &candidates {
        let mut acc = ConfusionAccumulator::new(k);
        for (im, probs) in data.target_test.iter().zip(&test_maps) {
            let pred = proxy_predict(probs, delta, cfg.metric, k)?;
            acc.add(&im.labels, &pred)?;
        }
        let miou = krada_core::metrics::iou_report(&acc).miou;
        rows.push((delta, miou));
        if let Some(m) = miou {
            // Strictly-greater keeps the smallest delta among ties.
            if best.map_or(true, |b| m > b) {
                best = Some(m);
                chosen = delta;
            }
        }
    }

    fs::create_dir_all(&cfg.run_dir)?;
    fs::write(
        cfg.run_dir.join("calibration.csv"),
        report::calibration_csv(&rows, chosen),
    )?;
    Ok(CalibrationOutcome { rows, chosen })
}

fn known_probmap(model: &SegModel, im: &LabeledImage) -> Result<ProbMap> {
    let s = im.image.shape();
    let batch = Tensor::from_vec(&[1, s[0], s[1], s[2]], im.image.data().to_vec())?;
    let feats = model.features_value(&batch)?;
    let logits = model.known_logits_value(&feats)?;
    let ls = logits.shape().to_vec();
    let per_image = Tensor::from_vec(&[ls[1], ls[2], ls[3]], logits.data().to_vec())?;
    ProbMap::from_logits(&per_image).map_err(Into::into)
}

fn proxy_predict(probs: &ProbMap, delta: f64, metric: FitMetric, k: usize) -> Result<LabelMap> {
    let (h, w) = (probs.height(), probs.width());
    let mut out = LabelMap::new(h, w);
    for i in 0..h {
        for j in 0..w {
            let p = probs.pixel(i, j);
            let label = if metric.eval(p)? < delta {
                (k + 1) as u8
            } else {
                let mut arg = 0usize;
                for (c, &v) in p.iter().enumerate() {
                    if v > p[arg] {
                        arg = c;
                    }
                }
                (arg + 1) as u8
            };
            out.set(i, j, label);
        }
    }
    Ok(out)
}

pub struct AblationRow {
    pub label: String,
    pub mode: TrainMode,
    pub metric: Option<FitMetric>,
    pub pixel: MetricReport,
    pub image: ImageLevelReport,
}

/// The full comparison matrix: every pseudo-labeling mode under both fit
/// metrics, plus the two baselines that use no fit metric at all. Rows train
/// in parallel (capped by `KRADA_LAB_THREADS`) but are reported in this
/// fixed order.
pub fn cmd_ablate(cfg: &ExperimentConfig) -> Result<Vec<AblationRow>> {
    let data = load_data(cfg)?;

    let mut specs: Vec<(String, TrainMode, Option<FitMetric>)> = Vec::new();
    for mode in [TrainMode::Krada, TrainMode::KradaNoMask, TrainMode::SourceOnlyPl] {
        for metric in FitMetric::ALL {
            specs.push((
                format!("{}_{}", mode.as_str(), metric.as_str()),
                mode,
                Some(metric),
            ));
        }
    }
    specs.push(("csdas".into(), TrainMode::Csdas, None));
    specs.push(("source_only".into(), TrainMode::SourceOnly, None));

    let configs: Vec<(String, TrainMode, Option<FitMetric>, ExperimentConfig)> = specs
        .into_iter()
        .map(|(label, mode, metric)| {
            let mut sub = cfg.clone();
            sub.mode = mode;
            if let Some(m) = metric {
                sub.metric = m;
            }
            sub.run_dir = cfg.run_dir.join("ablate").join(&label);
            (label, mode, metric, sub)
        })
        .collect();

    let threads = std::env::var("KRADA_LAB_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| {
            std::thread::available_parallelism().map_or(2, |n| n.get()).min(4)
        });

    let mut results: Vec<Option<Result<RunArtifacts>>> =
        (0..configs.len()).map(|_| None).collect();
    for wave in (0..configs.len()).collect::<Vec<_>>().chunks(threads) {
        std::thread::scope(|scope| {
            let mut handles = Vec::new();
            for &i in wave {
                let sub = &configs[i].3;
                let data = &data;
                handles.push((i, scope.spawn(move || execute_training(sub, data, false))));
            }
            for (i, h) in handles {
                results[i] = Some(h.join().expect("ablation worker panicked"));
            }
        });
    }

    let mut rows = Vec::with_capacity(configs.len());
    for ((label, mode, metric, _), result) in configs.into_iter().zip(results) {
        let art = result.expect("every row runs")?;
        rows.push(AblationRow {
            label,
            mode,
            metric,
            pixel: art.pixel,
            image: art.image,
        });
    }

    let mut csv = String::from("row,mode,metric,miou_pct,miou_star_pct,unknown_iou_pct,image_f1_pct\n");
    for r in &rows {
        let cell = |v: Option<f64>| v.map(report::pct).unwrap_or_default();
        csv.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.label,
            r.mode.as_str(),
            r.metric.map(|m| m.as_str()).unwrap_or("-"),
            cell(r.pixel.miou),
            cell(r.pixel.miou_star),
            cell(r.pixel.unknown_iou()),
            report::pct(r.image.f1),
        ));
    }
    fs::create_dir_all(&cfg.run_dir)?;
    fs::write(cfg.run_dir.join("ablation.csv"), csv)?;
    Ok(rows)
}
