//! The training loop.
//!
//! Each iteration, with fresh batches from independently shuffled source and
//! target streams:
//!
//! 1. forward through F, C, C* (and D when adversarial);
//! 2. score the current target batch with C* (pre-update parameters) and
//!    regenerate its pseudo-labels and known-region masks from scratch;
//! 3. assemble the combined objective — segmentation on source, the
//!    pseudo-label term (weighted α) against the labels stored on the
//!    *previous* visit, the auxiliary known-head term, and the adversarial
//!    term (subtracted, or the non-saturating generator form);
//! 4. one backward pass; gradients land on F, C, C* — the discriminator
//!    trains on a second, detached pass so its update descends its own loss;
//! 5. plain constant-rate SGD on all groups, then write the fresh
//!    pseudo-labels into the store for the next visit of those images.
//!
//! A non-finite loss aborts before any parameter is touched. All randomness
//! (init, shuffles) derives from the run seed, so two runs from the same
//! inputs are bitwise identical, and an interrupted run resumed from a
//! snapshot replays the remaining iterations exactly.

use crate::label::LabelMap;
use crate::loss::{
    masked_adv_loss, source_seg_loss, star_seg_loss, target_pseudo_loss, AdvMode, AdvRole,
    LossBundle,
};
use crate::metrics::{image_level_report, iou_report, ConfusionAccumulator, ImageLevelReport,
    MetricReport};
use crate::nn::{Discriminator, SegModel};
use crate::openset::{
    generate_pseudo_labels, known_region_mask, mask_batch, FitMetric, KnownRegionMask, ProbMap,
    PseudoLabelMap,
};
use crate::rng::stream;
use crate::synth::LabeledImage;
use crate::tape::Tape;
use crate::tensor::{sgd_step, zero_grads, ParamGroup, Tensor};
use crate::{invalid_err, shape_err, Error, Result};
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

/// Training variants: the full method, its two ablations, and two baselines.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    /// Pseudo-labels + masked adversarial alignment.
    Krada,
    /// Pseudo-labels + adversarial alignment with the mask forced to ones.
    KradaNoMask,
    /// Closed-set adversarial adaptation: no pseudo-labels, no mask.
    Csdas,
    /// Source supervision only.
    SourceOnly,
    /// Source supervision + pseudo-labels, no adversary.
    SourceOnlyPl,
}

impl TrainMode {
    pub const ALL: [TrainMode; 5] = [
        TrainMode::Krada,
        TrainMode::KradaNoMask,
        TrainMode::Csdas,
        TrainMode::SourceOnly,
        TrainMode::SourceOnlyPl,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            TrainMode::Krada => "krada",
            TrainMode::KradaNoMask => "krada_no_mask",
            TrainMode::Csdas => "csdas",
            TrainMode::SourceOnly => "source_only",
            TrainMode::SourceOnlyPl => "source_only_pl",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        TrainMode::ALL
            .iter()
            .copied()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| invalid_err!("unknown mode {s:?}"))
    }

    /// Uses (and refreshes) per-image pseudo-labels.
    pub fn uses_pseudo_labels(&self) -> bool {
        matches!(
            self,
            TrainMode::Krada | TrainMode::KradaNoMask | TrainMode::SourceOnlyPl
        )
    }

    /// Trains a discriminator and the adversarial feature term.
    pub fn uses_adversary(&self) -> bool {
        matches!(
            self,
            TrainMode::Krada | TrainMode::KradaNoMask | TrainMode::Csdas
        )
    }

    /// Gates the adversarial loss by the known-region mask (vs all-ones).
    pub fn uses_known_region_mask(&self) -> bool {
        matches!(self, TrainMode::Krada)
    }

    pub fn needs_target(&self) -> bool {
        self.uses_pseudo_labels() || self.uses_adversary()
    }

    fn effective_alpha(&self, alpha: f64) -> f64 {
        if self.uses_pseudo_labels() {
            alpha
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub metric: FitMetric,
    /// Weight of the target pseudo-label segmentation term.
    pub alpha: f64,
    /// Uniformity threshold for pseudo-labeling.
    pub delta: f64,
    /// SGD rate, constant over the run.
    pub gamma: f64,
    pub iterations: usize,
    pub batch_size: usize,
    pub adv_mode: AdvMode,
    pub feat_channels: usize,
    pub disc_hidden: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(invalid_err!("batch_size must be positive"));
        }
        if !(self.gamma.is_finite() && self.gamma > 0.0) {
            return Err(invalid_err!("gamma must be a positive rate"));
        }
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(invalid_err!("alpha must be nonnegative"));
        }
        if !self.delta.is_finite() {
            return Err(invalid_err!("delta must be finite"));
        }
        if self.feat_channels == 0 || self.disc_hidden == 0 {
            return Err(invalid_err!("zero-width network"));
        }
        Ok(())
    }
}

/// Per-target-image pseudo-labels with the iteration that last wrote them.
/// Fresh stores are all-zero (no pixel labeled) at version 0.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabelStore {
    maps: Vec<PseudoLabelMap>,
    versions: Vec<u64>,
}

impl PseudoLabelStore {
    pub fn new(n: usize, k: usize, h: usize, w: usize) -> Self {
        PseudoLabelStore {
            maps: (0..n).map(|_| PseudoLabelMap::empty(k, h, w)).collect(),
            versions: vec![0; n],
        }
    }

    pub fn from_parts(maps: Vec<PseudoLabelMap>, versions: Vec<u64>) -> Result<Self> {
        if maps.len() != versions.len() {
            return Err(shape_err!(
                "{} maps vs {} versions",
                maps.len(),
                versions.len()
            ));
        }
        Ok(PseudoLabelStore { maps, versions })
    }

    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }

    pub fn map(&self, i: usize) -> &PseudoLabelMap {
        &self.maps[i]
    }

    pub fn version(&self, i: usize) -> u64 {
        self.versions[i]
    }

    pub fn put(&mut self, i: usize, map: PseudoLabelMap, version: u64) {
        self.maps[i] = map;
        self.versions[i] = version;
    }
}

/// Owns the models and replays the loop.
pub struct Trainer {
    cfg: TrainConfig,
    model: SegModel,
    disc: Discriminator,
    store: PseudoLabelStore,
    source: Vec<LabeledImage>,
    target: Vec<LabeledImage>,
    iteration: usize,
    k: usize,
}

impl Trainer {
    /// Fresh models initialized from the config seed.
    pub fn new(
        cfg: TrainConfig,
        k: usize,
        source: Vec<LabeledImage>,
        target: Vec<LabeledImage>,
    ) -> Result<Self> {
        cfg.validate()?;
        let (h, w, in_ch) = check_images(k, &source, &target, cfg.mode)?;
        let model = SegModel::init(k, in_ch, cfg.feat_channels, cfg.seed)?;
        let disc = Discriminator::init(cfg.feat_channels, cfg.disc_hidden, cfg.seed)?;
        let store = PseudoLabelStore::new(target.len(), k, h, w);
        Ok(Trainer {
            cfg,
            model,
            disc,
            store,
            source,
            target,
            iteration: 0,
            k,
        })
    }

    /// Continues from a snapshot (model + discriminator + store + iteration);
    /// given the same data and config this replays the remaining iterations
    /// exactly as the uninterrupted run would.
    pub fn resume(
        cfg: TrainConfig,
        k: usize,
        source: Vec<LabeledImage>,
        target: Vec<LabeledImage>,
        model: SegModel,
        disc: Discriminator,
        store: PseudoLabelStore,
        iteration: usize,
    ) -> Result<Self> {
        cfg.validate()?;
        check_images(k, &source, &target, cfg.mode)?;
        if model.k() != k {
            return Err(shape_err!("model trained for K={}, data has K={k}", model.k()));
        }
        if store.len() != target.len() {
            return Err(shape_err!(
                "store covers {} images, target split has {}",
                store.len(),
                target.len()
            ));
        }
        Ok(Trainer {
            cfg,
            model,
            disc,
            store,
            source,
            target,
            iteration,
            k,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn model(&self) -> &SegModel {
        &self.model
    }

    pub fn discriminator(&self) -> &Discriminator {
        &self.disc
    }

    pub fn store(&self) -> &PseudoLabelStore {
        &self.store
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn finished(&self) -> bool {
        self.iteration >= self.cfg.iterations
    }

    /// Runs one iteration and reports its losses.
    pub fn step(&mut self) -> Result<LossBundle> {
        let t = self.iteration;
        let mode = self.cfg.mode;
        let alpha = mode.effective_alpha(self.cfg.alpha);

        let src_idx = batch_indices(
            self.source.len(),
            self.cfg.batch_size,
            t,
            self.cfg.seed,
            "source-shuffle",
        );
        let src_images = stack_images(&self.source, &src_idx)?;
        let src_labels: Vec<&LabelMap> = src_idx.iter().map(|&i| &self.source[i].labels).collect();

        let mut tape = Tape::new();
        let bound = self.model.bind(&mut tape);
        let xs = tape.constant(&src_images);
        let feat_s = bound.features(&mut tape, xs)?;
        let logits_s = bound.class_logits(&mut tape, feat_s)?;
        let l_seg_s = source_seg_loss(&mut tape, logits_s, &src_labels)?;
        let known_s = bound.known_logits(&mut tape, feat_s)?;
        let l_star = star_seg_loss(&mut tape, known_s, &src_labels)?;

        // Target side: forward, fresh pseudo-labels from pre-update C*,
        // and the pseudo-label loss against the *stored* labels.
        let mut tgt_idx = Vec::new();
        let mut feat_t = None;
        let mut l_seg_t = None;
        let mut fresh: Vec<PseudoLabelMap> = Vec::new();
        let mut unknown_fraction = 0.0;
        if mode.needs_target() {
            tgt_idx = batch_indices(
                self.target.len(),
                self.cfg.batch_size,
                t,
                self.cfg.seed,
                "target-shuffle",
            );
            let tgt_images = stack_images(&self.target, &tgt_idx)?;
            let xt = tape.constant(&tgt_images);
            let ft = bound.features(&mut tape, xt)?;
            feat_t = Some(ft);

            if mode.uses_pseudo_labels() || mode.uses_known_region_mask() {
                let feats_val = tape.value_tensor(ft);
                // Diverged features would otherwise surface as a bogus
                // probability-validation error inside label generation.
                if !feats_val.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "target features diverged at iteration {}",
                        t + 1
                    )));
                }
                for local in 0..tgt_idx.len() {
                    let probs = self.known_probs(&feats_val, local)?;
                    fresh.push(generate_pseudo_labels(
                        &probs,
                        self.cfg.delta,
                        self.cfg.metric,
                    )?);
                }
                unknown_fraction = fresh.iter().map(|m| m.unknown_fraction()).sum::<f64>()
                    / fresh.len() as f64;
            }

            if mode.uses_pseudo_labels() {
                let prev: Vec<&PseudoLabelMap> =
                    tgt_idx.iter().map(|&i| self.store.map(i)).collect();
                let logits_t = bound.class_logits(&mut tape, ft)?;
                l_seg_t = Some(target_pseudo_loss(&mut tape, logits_t, &prev)?);
            }
        }

        // L_seg = L_seg_src + α·L_seg_tgt, assembled on the tape.
        let l_seg = match l_seg_t {
            Some(lt) => {
                let scaled = tape.scale(lt, alpha);
                tape.add(l_seg_s, scaled)?
            }
            None => l_seg_s,
        };

        // Adversarial term on live features (for F) in the configured form.
        let mut objective = tape.add(l_seg, l_star)?;
        let mut mask = None;
        if mode.uses_adversary() {
            let ft = feat_t.expect("adversarial modes batch target images");
            let n = tgt_idx.len();
            let m = if mode.uses_known_region_mask() {
                let masks: Vec<KnownRegionMask> =
                    fresh.iter().map(known_region_mask).collect();
                mask_batch(&masks.iter().collect::<Vec<_>>())?
            } else {
                Tensor::filled(&[n, 1, self.height(), self.width()], 1.0)
            };
            let bdisc = self.disc.bind(&mut tape);
            let adv_term = match self.cfg.adv_mode {
                AdvMode::Subtracted => {
                    let full = masked_adv_loss(
                        &mut tape,
                        &bdisc,
                        Some(feat_s),
                        ft,
                        &m,
                        AdvRole::Discriminator,
                    )?;
                    tape.scale(full, -1.0)
                }
                AdvMode::Nonsaturating => {
                    masked_adv_loss(&mut tape, &bdisc, None, ft, &m, AdvRole::Generator)?
                }
            };
            objective = tape.add(objective, adv_term)?;
            mask = Some(m);
        }

        // Collect scalars and abort on anything non-finite before updating.
        let mut bundle = LossBundle {
            iteration: t + 1,
            seg_source: tape.scalar_value(l_seg_s)?,
            seg_target: l_seg_t.map(|n| tape.scalar_value(n)).transpose()?.unwrap_or(0.0),
            seg: tape.scalar_value(l_seg)?,
            seg_known: tape.scalar_value(l_star)?,
            adv: 0.0,
            alpha,
            delta: self.cfg.delta,
            gamma: self.cfg.gamma,
            unknown_fraction,
        };

        // Discriminator pass on detached features: its parameters descend
        // the plain adversarial loss regardless of the feature-side form.
        let mut disc_tape = None;
        if let (Some(ft), Some(m)) = (feat_t, mask.as_ref()) {
            let fs_val = tape.value_tensor(feat_s);
            let ft_val = tape.value_tensor(ft);
            let mut tb = Tape::new();
            let bdisc = self.disc.bind(&mut tb);
            let fs = tb.constant(&fs_val);
            let ftn = tb.constant(&ft_val);
            let l_adv = masked_adv_loss(&mut tb, &bdisc, Some(fs), ftn, m, AdvRole::Discriminator)?;
            bundle.adv = tb.scalar_value(l_adv)?;
            disc_tape = Some((tb, bdisc, l_adv));
        }

        if !bundle.is_finite() {
            return Err(Error::NonFinite(format!(
                "losses diverged at iteration {}",
                t + 1
            )));
        }

        // Backward + export: F/C/C* from the combined objective, D from its
        // own detached pass.
        tape.backward(objective)?;
        bound.export_feature_grads(&tape, &mut self.model)?;
        bound.export_classifier_grads(&tape, &mut self.model)?;
        bound.export_known_grads(&tape, &mut self.model)?;
        if let Some((mut tb, bdisc, l_adv)) = disc_tape {
            tb.backward(l_adv)?;
            bdisc.export_grads(&tb, &mut self.disc)?;
        }

        let lr = self.cfg.gamma;
        sgd_step(self.model.params_mut(ParamGroup::Feature), lr, 1.0)?;
        sgd_step(self.model.params_mut(ParamGroup::Classifier), lr, 1.0)?;
        sgd_step(self.model.params_mut(ParamGroup::KnownClassifier), lr, 1.0)?;
        if mode.uses_adversary() {
            sgd_step(self.disc.params_mut(), lr, 1.0)?;
        }
        for g in ParamGroup::ALL {
            zero_grads(self.model.params_mut(g));
        }
        zero_grads(self.disc.params_mut());

        if !(self.model.is_finite() && self.disc.is_finite()) {
            return Err(Error::NonFinite(format!(
                "parameters diverged at iteration {}",
                t + 1
            )));
        }

        // Store the fresh labels for the next visit of these images.
        if mode.uses_pseudo_labels() {
            for (local, &global) in tgt_idx.iter().enumerate() {
                self.store
                    .put(global, fresh[local].clone(), (t + 1) as u64);
            }
        }

        self.iteration += 1;
        Ok(bundle)
    }

    /// Steps until `cfg.iterations`, collecting the trace.
    pub fn run_to_end(&mut self) -> Result<Vec<LossBundle>> {
        let mut trace = Vec::with_capacity(self.cfg.iterations - self.iteration);
        while !self.finished() {
            trace.push(self.step()?);
        }
        Ok(trace)
    }

    fn height(&self) -> usize {
        self.source[0].labels.height()
    }

    fn width(&self) -> usize {
        self.source[0].labels.width()
    }

    /// C* probabilities for one image of a feature batch.
    fn known_probs(&self, feats: &Tensor, i: usize) -> Result<ProbMap> {
        let s = feats.shape();
        let (c, h, w) = (s[1], s[2], s[3]);
        let chw = c * h * w;
        let one = Tensor::from_vec(
            &[1, c, h, w],
            feats.data()[i * chw..(i + 1) * chw].to_vec(),
        )?;
        let logits = self.model.known_logits_value(&one)?;
        if !logits.is_finite() {
            return Err(Error::NonFinite(
                "known-class logits diverged during pseudo-labeling".into(),
            ));
        }
        let ls = logits.shape().to_vec();
        let per_image = Tensor::from_vec(&[ls[1], ls[2], ls[3]], logits.data().to_vec())?;
        ProbMap::from_logits(&per_image)
    }
}

fn check_images(
    k: usize,
    source: &[LabeledImage],
    target: &[LabeledImage],
    mode: TrainMode,
) -> Result<(usize, usize, usize)> {
    if source.is_empty() {
        return Err(invalid_err!("no source images"));
    }
    if mode.needs_target() && target.is_empty() {
        return Err(invalid_err!("mode {} needs target images", mode.as_str()));
    }
    let shape = source[0].image.shape().to_vec();
    if shape.len() != 3 {
        return Err(shape_err!("images must be [C,H,W], got {shape:?}"));
    }
    let (in_ch, h, w) = (shape[0], shape[1], shape[2]);
    for im in source.iter().chain(target) {
        if im.image.shape() != [in_ch, h, w] {
            return Err(shape_err!(
                "image shape {:?} differs from {:?}",
                im.image.shape(),
                shape
            ));
        }
        if im.labels.height() != h || im.labels.width() != w {
            return Err(shape_err!("labels do not match the image grid"));
        }
    }
    for im in source {
        let m = im.labels.max_class() as usize;
        if m > k {
            return Err(invalid_err!(
                "source label {m} exceeds the {k} known classes"
            ));
        }
    }
    for im in target {
        let m = im.labels.max_class() as usize;
        if m > k + 1 {
            return Err(invalid_err!("target label {m} exceeds K+1 = {}", k + 1));
        }
    }
    Ok((h, w, in_ch))
}

/// Batch for step `t`: each epoch reshuffles its split from the epoch-indexed
/// stream, so any step's batch is reconstructible without replaying RNG state
/// (which is what makes snapshot resume exact). The final batch of an epoch
/// may be short.
fn batch_indices(n: usize, batch: usize, t: usize, seed: u64, name: &str) -> Vec<usize> {
    let per_epoch = n.div_ceil(batch);
    let epoch = t / per_epoch;
    let pos = t % per_epoch;
    let perm = stream(seed, name, epoch as u64).permutation(n);
    let lo = pos * batch;
    let hi = (lo + batch).min(n);
    perm[lo..hi].to_vec()
}

fn stack_images(images: &[LabeledImage], idx: &[usize]) -> Result<Tensor> {
    let shape = images[idx[0]].image.shape().to_vec();
    let mut data = Vec::with_capacity(idx.len() * images[idx[0]].image.numel());
    for &i in idx {
        data.extend_from_slice(images[i].image.data());
    }
    Tensor::from_vec(&[idx.len(), shape[0], shape[1], shape[2]], data)
}

/// Pixel metrics plus image-level unknown detection for one split.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSummary {
    pub pixel: MetricReport,
    pub image: ImageLevelReport,
}

/// Evaluates a model on labeled images: open-world argmax predictions,
/// confusion over K+1 classes, and per-image unknown detection with
/// threshold `tau` (fraction of the image's pixels).
pub fn evaluate_model(model: &SegModel, images: &[LabeledImage], tau: f64) -> Result<EvalSummary> {
    if images.is_empty() {
        return Err(invalid_err!("nothing to evaluate"));
    }
    let k = model.k();
    let unknown = (k + 1) as u8;
    let mut acc = ConfusionAccumulator::new(k);
    let mut items = Vec::with_capacity(images.len());
    let total_pixels = images[0].labels.height() * images[0].labels.width();
    for chunk in images.chunks(16) {
        let idx: Vec<usize> = (0..chunk.len()).collect();
        let batch = stack_images(chunk, &idx)?;
        let preds = model.predict(&batch)?;
        for (im, pred) in chunk.iter().zip(&preds) {
            acc.add(&im.labels, pred)?;
            items.push((im.has_unknown(), pred.count(unknown)));
        }
    }
    Ok(EvalSummary {
        pixel: iou_report(&acc),
        image: image_level_report(&items, total_pixels, tau)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_source, generate_target, SceneSpec, Split};

    fn tiny_cfg(mode: TrainMode) -> TrainConfig {
        TrainConfig {
            mode,
            metric: FitMetric::Kl,
            alpha: 0.1,
            delta: 0.3,
            gamma: 0.02,
            iterations: 3,
            batch_size: 2,
            adv_mode: AdvMode::Subtracted,
            feat_channels: 6,
            disc_hidden: 4,
            seed: 13,
        }
    }

    fn tiny_data() -> (Vec<LabeledImage>, Vec<LabeledImage>) {
        let spec = SceneSpec {
            height: 16,
            width: 16,
            ..SceneSpec::default()
        };
        (
            generate_source(&spec, 6).unwrap(),
            generate_target(&spec, 6, Split::TargetTrain).unwrap(),
        )
    }

    fn snapshot(m: &SegModel) -> Vec<f64> {
        m.layers()
            .iter()
            .flat_map(|(_, t)| t.data().iter().copied())
            .collect()
    }

    fn disc_snapshot(d: &Discriminator) -> Vec<f64> {
        d.layers()
            .iter()
            .flat_map(|(_, t)| t.data().iter().copied())
            .collect()
    }

    #[test]
    fn seg_loss_decomposes_exactly() {
        let (src, tgt) = tiny_data();
        let mut tr = Trainer::new(tiny_cfg(TrainMode::Krada), 4, src, tgt).unwrap();
        for _ in 0..3 {
            let b = tr.step().unwrap();
            assert_eq!(b.seg, b.seg_source + b.alpha * b.seg_target);
        }
    }

    #[test]
    fn runs_are_bitwise_reproducible() {
        let (src, tgt) = tiny_data();
        let mut a = Trainer::new(tiny_cfg(TrainMode::Krada), 4, src.clone(), tgt.clone()).unwrap();
        let mut b = Trainer::new(tiny_cfg(TrainMode::Krada), 4, src, tgt).unwrap();
        let ta = a.run_to_end().unwrap();
        let tb = b.run_to_end().unwrap();
        assert_eq!(ta, tb);
        assert_eq!(snapshot(a.model()), snapshot(b.model()));
        assert_eq!(disc_snapshot(a.discriminator()), disc_snapshot(b.discriminator()));
    }

    #[test]
    fn resume_replays_the_tail_exactly() {
        let (src, tgt) = tiny_data();
        let mut cfg = tiny_cfg(TrainMode::Krada);
        cfg.iterations = 6;

        let mut full = Trainer::new(cfg.clone(), 4, src.clone(), tgt.clone()).unwrap();
        let full_trace = full.run_to_end().unwrap();

        let mut head = Trainer::new(cfg.clone(), 4, src.clone(), tgt.clone()).unwrap();
        let mut head_trace = Vec::new();
        for _ in 0..3 {
            head_trace.push(head.step().unwrap());
        }
        let mut resumed = Trainer::resume(
            cfg,
            4,
            src,
            tgt,
            head.model().clone(),
            head.discriminator().clone(),
            head.store().clone(),
            head.iteration(),
        )
        .unwrap();
        head_trace.extend(resumed.run_to_end().unwrap());

        assert_eq!(head_trace, full_trace);
        assert_eq!(snapshot(full.model()), snapshot(resumed.model()));
    }

    #[test]
    fn source_only_never_touches_the_discriminator() {
        let (src, tgt) = tiny_data();
        let mut tr = Trainer::new(tiny_cfg(TrainMode::SourceOnly), 4, src, tgt).unwrap();
        let before = disc_snapshot(tr.discriminator());
        tr.run_to_end().unwrap();
        assert_eq!(disc_snapshot(tr.discriminator()), before);
        // And the store never fills in.
        assert!((0..tr.store().len()).all(|i| tr.store().version(i) == 0));
    }

    #[test]
    fn adversarial_loss_moves_features_but_not_heads() {
        // Void labels zero both segmentation terms, so in csdas mode only
        // the adversarial gradient remains: F and D must move, C and C*
        // must stay exactly put.
        let (mut src, tgt) = tiny_data();
        for im in src.iter_mut() {
            im.labels.pixels_mut().iter_mut().for_each(|l| *l = 0);
        }
        let mut tr = Trainer::new(tiny_cfg(TrainMode::Csdas), 4, src, tgt).unwrap();
        let head_before = tr.model().head.weight.data().to_vec();
        let star_before = tr.model().known_head.weight.data().to_vec();
        let f_before = tr.model().f1.weight.data().to_vec();
        let d_before = disc_snapshot(tr.discriminator());
        let b = tr.step().unwrap();
        assert_eq!(b.seg_source, 0.0);
        assert_eq!(b.seg_known, 0.0);
        assert!(b.adv > 0.0);
        assert_eq!(tr.model().head.weight.data(), head_before.as_slice());
        assert_eq!(tr.model().known_head.weight.data(), star_before.as_slice());
        assert_ne!(tr.model().f1.weight.data(), f_before.as_slice());
        assert_ne!(disc_snapshot(tr.discriminator()), d_before.as_slice());
    }

    #[test]
    fn pseudo_label_store_versions_follow_visits() {
        let (src, tgt) = tiny_data();
        let mut cfg = tiny_cfg(TrainMode::Krada);
        // Batch of 2 over 6 target images: after one epoch (3 steps) every
        // image has been visited exactly once.
        cfg.iterations = 3;
        let mut tr = Trainer::new(cfg, 4, src, tgt).unwrap();
        tr.run_to_end().unwrap();
        let mut versions: Vec<u64> = (0..tr.store().len()).map(|i| tr.store().version(i)).collect();
        versions.sort_unstable();
        assert_eq!(versions, vec![1, 1, 2, 2, 3, 3]);
    }

    #[test]
    fn non_finite_parameters_abort_the_step() {
        let (src, tgt) = tiny_data();
        let mut tr = Trainer::new(tiny_cfg(TrainMode::Krada), 4, src, tgt).unwrap();
        tr.model.f1.weight.data_mut()[0] = f64::NAN;
        assert!(matches!(tr.step(), Err(Error::NonFinite(_))));
    }

    #[test]
    fn batches_cycle_epochs_deterministically() {
        let a = batch_indices(5, 2, 0, 9, "source-shuffle");
        let b = batch_indices(5, 2, 1, 9, "source-shuffle");
        let c = batch_indices(5, 2, 2, 9, "source-shuffle");
        assert_eq!(a.len(), 2);
        assert_eq!(b.len(), 2);
        assert_eq!(c.len(), 1); // short final batch
        let mut seen: Vec<usize> = a.iter().chain(&b).chain(&c).copied().collect();
        seen.sort_unstable();
        assert_eq!(seen, vec![0, 1, 2, 3, 4]);
        // Next epoch reshuffles but stays a permutation.
        let d = batch_indices(5, 2, 3, 9, "source-shuffle");
        assert_eq!(d, batch_indices(5, 2, 3, 9, "source-shuffle"));
    }
}
