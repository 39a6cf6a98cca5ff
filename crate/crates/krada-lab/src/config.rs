//! `key = value` experiment configuration.
//!
//! One flat namespace, `#` comments, blank lines ignored. Unknown keys and
//! duplicate keys are hard errors — a typo must not silently fall back to a
//! default. `render()` writes the fully resolved configuration in a fixed
//! key order; every run drops that file next to its outputs so results stay
//! attributable to exact settings.

use crate::{config_err, Result};
use krada_core::loss::AdvMode;
use krada_core::openset::FitMetric;
use krada_core::synth::SceneSpec;
use krada_core::trainer::{TrainConfig, TrainMode};
use std::collections::BTreeSet;
use std::path::PathBuf;

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub mode: TrainMode,
    pub metric: FitMetric,
    /// Uniformity threshold under the KL metric.
    pub delta_kl: f64,
    /// Uniformity threshold under the Kolmogorov metric.
    pub delta_kolmogorov: f64,
    pub alpha: f64,
    pub gamma: f64,
    pub iterations: usize,
    pub batch_size: usize,
    pub adv_mode: AdvMode,
    pub eval_every: usize,
    pub checkpoint_every: usize,

    pub image_height: usize,
    pub image_width: usize,
    pub source_count: usize,
    pub target_train_count: usize,
    pub target_test_count: usize,
    pub shapes_min: usize,
    pub shapes_max: usize,
    pub unknown_prob: f64,
    pub hue_degrees: f64,
    pub brightness: f64,
    pub noise_sigma: f64,

    pub tau_img: f64,
    pub calib_steps: usize,
    pub calib_step_size: f64,
    pub feat_channels: usize,
    pub disc_hidden: usize,

    pub dataset_dir: PathBuf,
    pub run_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let scene = SceneSpec::default();
        ExperimentConfig {
            seed: 7,
            mode: TrainMode::Krada,
            metric: FitMetric::Kl,
            delta_kl: 1.15,
            delta_kolmogorov: 0.37,
            alpha: 0.1,
            gamma: 0.05,
            iterations: 400,
            batch_size: 8,
            adv_mode: AdvMode::Subtracted,
            eval_every: 0,
            checkpoint_every: 0,
            image_height: scene.height,
            image_width: scene.width,
            source_count: 200,
            target_train_count: 200,
            target_test_count: 100,
            shapes_min: scene.shapes_min,
            shapes_max: scene.shapes_max,
            unknown_prob: scene.unknown_prob,
            hue_degrees: scene.hue_degrees,
            brightness: scene.brightness,
            noise_sigma: scene.noise_sigma,
            tau_img: krada_core::metrics::DEFAULT_TAU_IMG,
            calib_steps: 10,
            calib_step_size: 0.05,
            feat_channels: 16,
            disc_hidden: 8,
            dataset_dir: PathBuf::from("dataset"),
            run_dir: PathBuf::from("run"),
        }
    }
}

/// Fixed key order for `render()` and the reference for unknown-key checks.
const KEYS: [&str; 30] = [
    "seed",
    "mode",
    "metric",
    "delta_kl",
    "delta_kolmogorov",
    "alpha",
    "gamma",
    "iterations",
    "batch_size",
    "adv_mode",
    "eval_every",
    "checkpoint_every",
    "image_height",
    "image_width",
    "source_count",
    "target_train_count",
    "target_test_count",
    "shapes_min",
    "shapes_max",
    "unknown_prob",
    "hue_degrees",
    "brightness",
    "noise_sigma",
    "tau_img",
    "calib_steps",
    "calib_step_size",
    "feat_channels",
    "disc_hidden",
    "dataset_dir",
    "run_dir",
];

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        let mut seen = BTreeSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let at = |msg: String| config_err(format!("line {}: {msg}", lineno + 1));
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| at(format!("expected `key = value`, got {line:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            if !KEYS.contains(&key) {
                return Err(at(format!("unknown key {key:?}")));
            }
            if !seen.insert(key.to_string()) {
                return Err(at(format!("duplicate key {key:?}")));
            }
            cfg.set(key, value)
                .map_err(|e| at(format!("{key}: {e}")))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        fn num<T: std::str::FromStr>(v: &str) -> std::result::Result<T, String> {
            v.parse().map_err(|_| format!("cannot parse {v:?}"))
        }
        match key {
            "seed" => self.seed = num(value)?,
            "mode" => self.mode = TrainMode::parse(value).map_err(|e| e.to_string())?,
            "metric" => self.metric = FitMetric::parse(value).map_err(|e| e.to_string())?,
            "delta_kl" => self.delta_kl = num(value)?,
            "delta_kolmogorov" => self.delta_kolmogorov = num(value)?,
            "alpha" => self.alpha = num(value)?,
            "gamma" => self.gamma = num(value)?,
            "iterations" => self.iterations = num(value)?,
            "batch_size" => self.batch_size = num(value)?,
            "adv_mode" => self.adv_mode = AdvMode::parse(value).map_err(|e| e.to_string())?,
            "eval_every" => self.eval_every = num(value)?,
            "checkpoint_every" => self.checkpoint_every = num(value)?,
            "image_height" => self.image_height = num(value)?,
            "image_width" => self.image_width = num(value)?,
            "source_count" => self.source_count = num(value)?,
            "target_train_count" => self.target_train_count = num(value)?,
            "target_test_count" => self.target_test_count = num(value)?,
            "shapes_min" => self.shapes_min = num(value)?,
            "shapes_max" => self.shapes_max = num(value)?,
            "unknown_prob" => self.unknown_prob = num(value)?,
            "hue_degrees" => self.hue_degrees = num(value)?,
            "brightness" => self.brightness = num(value)?,
            "noise_sigma" => self.noise_sigma = num(value)?,
            "tau_img" => self.tau_img = num(value)?,
            "calib_steps" => self.calib_steps = num(value)?,
            "calib_step_size" => self.calib_step_size = num(value)?,
            "feat_channels" => self.feat_channels = num(value)?,
            "disc_hidden" => self.disc_hidden = num(value)?,
            "dataset_dir" => self.dataset_dir = PathBuf::from(value),
            "run_dir" => self.run_dir = PathBuf::from(value),
            _ => unreachable!("key list checked by the caller"),
        }
        Ok(())
    }

    fn get(&self, key: &str) -> String {
        match key {
            "seed" => self.seed.to_string(),
            "mode" => self.mode.as_str().to_string(),
            "metric" => self.metric.as_str().to_string(),
            "delta_kl" => self.delta_kl.to_string(),
            "delta_kolmogorov" => self.delta_kolmogorov.to_string(),
            "alpha" => self.alpha.to_string(),
            "gamma" => self.gamma.to_string(),
            "iterations" => self.iterations.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "adv_mode" => self.adv_mode.as_str().to_string(),
            "eval_every" => self.eval_every.to_string(),
            "checkpoint_every" => self.checkpoint_every.to_string(),
            "image_height" => self.image_height.to_string(),
            "image_width" => self.image_width.to_string(),
            "source_count" => self.source_count.to_string(),
            "target_train_count" => self.target_train_count.to_string(),
            "target_test_count" => self.target_test_count.to_string(),
            "shapes_min" => self.shapes_min.to_string(),
            "shapes_max" => self.shapes_max.to_string(),
            "unknown_prob" => self.unknown_prob.to_string(),
            "hue_degrees" => self.hue_degrees.to_string(),
            "brightness" => self.brightness.to_string(),
            "noise_sigma" => self.noise_sigma.to_string(),
            "tau_img" => self.tau_img.to_string(),
            "calib_steps" => self.calib_steps.to_string(),
            "calib_step_size" => self.calib_step_size.to_string(),
            "feat_channels" => self.feat_channels.to_string(),
            "disc_hidden" => self.disc_hidden.to_string(),
            "dataset_dir" => self.dataset_dir.display().to_string(),
            "run_dir" => self.run_dir.display().to_string(),
            _ => unreachable!(),
        }
    }

    /// The resolved configuration, every key explicit, in `KEYS` order.
    pub fn render(&self) -> String {
        let mut out = String::from("# resolved experiment configuration\n");
        for key in KEYS {
            out.push_str(&format!("{key} = {}\n", self.get(key)));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        self.to_scene_spec().validate().map_err(|e| config_err(e.to_string()))?;
        self.to_train_config().validate().map_err(|e| config_err(e.to_string()))?;
        if self.source_count == 0 {
            return Err(config_err("source_count must be positive"));
        }
        if self.mode.needs_target() && self.target_train_count == 0 {
            return Err(config_err(format!(
                "mode {} needs target_train_count > 0",
                self.mode.as_str()
            )));
        }
        if self.target_test_count == 0 {
            return Err(config_err("target_test_count must be positive"));
        }
        if !(self.tau_img.is_finite() && (0.0..1.0).contains(&self.tau_img)) {
            return Err(config_err("tau_img must lie in [0, 1)"));
        }
        if self.calib_steps == 0 || !(self.calib_step_size.is_finite() && self.calib_step_size > 0.0)
        {
            return Err(config_err("calibration wants positive steps and step size"));
        }
        Ok(())
    }

    /// The threshold that matches the configured fit metric; the two
    /// statistics live on different scales so each carries its own value.
    pub fn delta(&self) -> f64 {
        match self.metric {
            FitMetric::Kl => self.delta_kl,
            FitMetric::Kolmogorov => self.delta_kolmogorov,
        }
    }

    pub fn to_scene_spec(&self) -> SceneSpec {
        SceneSpec {
            height: self.image_height,
            width: self.image_width,
            shapes_min: self.shapes_min,
            shapes_max: self.shapes_max,
            unknown_prob: self.unknown_prob,
            hue_degrees: self.hue_degrees,
            brightness: self.brightness,
            noise_sigma: self.noise_sigma,
            seed: self.seed,
        }
    }

    pub fn to_train_config(&self) -> TrainConfig {
        TrainConfig {
            mode: self.mode,
            metric: self.metric,
            alpha: self.alpha,
            delta: self.delta(),
            gamma: self.gamma,
            iterations: self.iterations,
            batch_size: self.batch_size,
            adv_mode: self.adv_mode,
            feat_channels: self.feat_channels,
            disc_hidden: self.disc_hidden,
            seed: self.seed,
        }
    }
}
