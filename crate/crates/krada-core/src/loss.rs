//! Training objectives.
//!
//! * `source_seg_loss` — pixel cross-entropy of the open-world head C on
//!   labeled source images (all `K+1` channels, though source never contains
//!   the unknown class).
//! * `target_pseudo_loss` — the same cross-entropy on target images against
//!   the stored pseudo-labels; only pixels currently pseudo-labeled unknown
//!   carry a target, everything else contributes nothing.
//! * `star_seg_loss` — cross-entropy of the known-class head C* on source.
//! * `masked_adv_loss` — per-location domain BCE where the target features
//!   are multiplied by the known-region mask before entering D, and
//!   fully-masked locations are excluded from the target-side mean.
//!
//! The combined segmentation objective is `L_seg = L_seg_src + α·L_seg_tgt`,
//! assembled on the tape so one backward pass routes gradients correctly.

use crate::label::{onehot_batch, LabelMap};
use crate::nn::BoundDisc;
use crate::openset::PseudoLabelMap;
use crate::tape::{Node, Tape};
use crate::tensor::Tensor;
use crate::{invalid_err, shape_err, Result};
use alloc::vec::Vec;

/// How the feature extractor opposes the discriminator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdvMode {
    /// Subtract the discriminator loss inside the feature update (ascent on
    /// the exact alternating objective).
    Subtracted,
    /// Replace the subtraction with the non-saturating generator loss
    /// (target features pushed toward the "source" label).
    Nonsaturating,
}

impl AdvMode {
    pub const ALL: [AdvMode; 2] = [AdvMode::Subtracted, AdvMode::Nonsaturating];

    pub fn as_str(&self) -> &'static str {
        match self {
            AdvMode::Subtracted => "subtracted",
            AdvMode::Nonsaturating => "nonsaturating",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        AdvMode::ALL
            .iter()
            .copied()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| invalid_err!("unknown adversarial mode {s:?}"))
    }
}

/// Which side of the adversarial game a `masked_adv_loss` call scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdvRole {
    /// Source → 1, masked target → 0 (the discriminator's objective).
    Discriminator,
    /// Masked target → 1, no source term (non-saturating generator).
    Generator,
}

/// Per-iteration scalar record of every objective, written to the trace.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBundle {
    pub iteration: usize,
    pub seg_source: f64,
    pub seg_target: f64,
    /// `seg_source + alpha·seg_target`, taken from the tape node so the
    /// decomposition holds to the last bit.
    pub seg: f64,
    pub seg_known: f64,
    pub adv: f64,
    pub alpha: f64,
    pub delta: f64,
    pub gamma: f64,
    /// Fraction of target batch pixels currently pseudo-labeled unknown.
    pub unknown_fraction: f64,
}

impl LossBundle {
    pub fn is_finite(&self) -> bool {
        self.seg_source.is_finite()
            && self.seg_target.is_finite()
            && self.seg.is_finite()
            && self.seg_known.is_finite()
            && self.adv.is_finite()
    }
}

fn uniform_pixel_weights(tape: &Tape, logits: Node) -> Result<Tensor> {
    let s = tape.shape(logits);
    if s.len() != 4 {
        return Err(shape_err!("logits must be [N,C,H,W], got {s:?}"));
    }
    Ok(Tensor::filled(&[s[0], 1, s[2], s[3]], 1.0))
}

/// Cross-entropy of C's logits against ground-truth source labels.
pub fn source_seg_loss(tape: &mut Tape, logits: Node, labels: &[&LabelMap]) -> Result<Node> {
    let channels = tape.shape(logits)[1];
    let targets = onehot_batch(labels, channels)?;
    let weights = uniform_pixel_weights(tape, logits)?;
    tape.masked_cross_entropy(logits, &targets, &weights)
}

/// Cross-entropy of C's logits against the stored pseudo-labels of the batch
/// (the labels generated the *previous* time these images were visited).
pub fn target_pseudo_loss(
    tape: &mut Tape,
    logits: Node,
    pseudo: &[&PseudoLabelMap],
) -> Result<Node> {
    if pseudo.is_empty() {
        return Err(invalid_err!("empty pseudo-label batch"));
    }
    let s = tape.shape(logits).to_vec();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    if pseudo.len() != n {
        return Err(shape_err!("{} pseudo maps for a batch of {n}", pseudo.len()));
    }
    let mut data = Vec::with_capacity(n * c * h * w);
    for pl in pseudo {
        if pl.k() + 1 != c || pl.height() != h || pl.width() != w {
            return Err(shape_err!(
                "pseudo-label map {}x{}x{} vs logits {:?}",
                pl.k() + 1,
                pl.height(),
                pl.width(),
                s
            ));
        }
        data.extend_from_slice(pl.to_targets().data());
    }
    let targets = Tensor::from_vec(&[n, c, h, w], data)?;
    let weights = uniform_pixel_weights(tape, logits)?;
    tape.masked_cross_entropy(logits, &targets, &weights)
}

/// Cross-entropy of C*'s K-channel logits against source labels. Labels must
/// all be known classes; an unknown label is a hard error rather than a
/// silently dropped pixel.
pub fn star_seg_loss(tape: &mut Tape, known_logits: Node, labels: &[&LabelMap]) -> Result<Node> {
    let channels = tape.shape(known_logits)[1];
    let targets = onehot_batch(labels, channels)?;
    let weights = uniform_pixel_weights(tape, known_logits)?;
    tape.masked_cross_entropy(known_logits, &targets, &weights)
}

/// Runs the discriminator on source features and mask-gated target features,
/// then scores the requested role:
///
/// * [`AdvRole::Discriminator`]: `BCE(D(f_src), 1) + BCE(D(f_tgt·mask), 0)`,
///   the target mean taken over unmasked locations only;
/// * [`AdvRole::Generator`]: `BCE(D(f_tgt·mask), 1)` over unmasked locations.
///
/// Locations zeroed by the mask still pass (zeroed) features through D —
/// that is the literal masked objective — but their per-location BCE is
/// excluded from the mean so an almost-fully-unknown image cannot drown the
/// loss in constant terms. An all-ones mask reduces bit-for-bit to the
/// unmasked objective; an all-zeros mask leaves only the source term.
pub fn masked_adv_loss(
    tape: &mut Tape,
    disc: &BoundDisc,
    feat_src: Option<Node>,
    feat_tgt: Node,
    mask: &Tensor,
    role: AdvRole,
) -> Result<Node> {
    let gated = tape.mul_mask(feat_tgt, mask)?;
    let d_tgt = disc.forward(tape, gated)?;
    match role {
        AdvRole::Discriminator => {
            let src =
                feat_src.ok_or_else(|| invalid_err!("discriminator role needs source features"))?;
            let d_src = disc.forward(tape, src)?;
            let l_src = tape.bce_logits(d_src, 1.0)?;
            let l_tgt = tape.bce_logits_weighted(d_tgt, 0.0, mask)?;
            tape.add(l_src, l_tgt)
        }
        AdvRole::Generator => tape.bce_logits_weighted(d_tgt, 1.0, mask),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Discriminator;
    use crate::openset::{generate_pseudo_labels, FitMetric, ProbMap};
    use alloc::vec;

    const LN_2: f64 = 0.693_147_180_559_945_3;

    fn zero_disc(feat: usize) -> Discriminator {
        let mut d = Discriminator::init(feat, 4, 0).unwrap();
        for t in d.params_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        d
    }

    #[test]
    fn adv_loss_of_an_uninformative_discriminator_is_two_ln_two() {
        // Zeroed discriminator weights emit logit 0 everywhere, so with an
        // all-ones mask both sides contribute exactly ln 2.
        let disc = zero_disc(3);
        let feats = Tensor::filled(&[2, 3, 4, 4], 0.7);
        let mask = Tensor::filled(&[2, 1, 4, 4], 1.0);
        let mut tape = Tape::new();
        let b = disc.bind(&mut tape);
        let fs = tape.constant(&feats);
        let ft = tape.constant(&feats);
        let l = masked_adv_loss(&mut tape, &b, Some(fs), ft, &mask, AdvRole::Discriminator)
            .unwrap();
        assert!((tape.scalar_value(l).unwrap() - 2.0 * LN_2).abs() < 1e-15);
    }

    #[test]
    fn all_zero_mask_leaves_only_the_source_term() {
        let disc = zero_disc(3);
        let feats = Tensor::filled(&[1, 3, 2, 2], 0.3);
        let mask = Tensor::zeros(&[1, 1, 2, 2]);
        let mut tape = Tape::new();
        let b = disc.bind(&mut tape);
        let fs = tape.constant(&feats);
        let ft = tape.constant(&feats);
        let l = masked_adv_loss(&mut tape, &b, Some(fs), ft, &mask, AdvRole::Discriminator)
            .unwrap();
        assert!((tape.scalar_value(l).unwrap() - LN_2).abs() < 1e-15);
    }

    #[test]
    fn generator_role_scores_only_the_target_side() {
        let disc = zero_disc(3);
        let feats = Tensor::filled(&[1, 3, 2, 2], 0.3);
        let mask = Tensor::filled(&[1, 1, 2, 2], 1.0);
        let mut tape = Tape::new();
        let b = disc.bind(&mut tape);
        let ft = tape.constant(&feats);
        let l = masked_adv_loss(&mut tape, &b, None, ft, &mask, AdvRole::Generator).unwrap();
        assert!((tape.scalar_value(l).unwrap() - LN_2).abs() < 1e-15);

        // The discriminator role without source features is an error.
        let mut tape = Tape::new();
        let b = disc.bind(&mut tape);
        let ft = tape.constant(&feats);
        assert!(
            masked_adv_loss(&mut tape, &b, None, ft, &mask, AdvRole::Discriminator).is_err()
        );
    }

    #[test]
    fn pseudo_loss_counts_only_unknown_pixels() {
        // One of four pixels pseudo-labeled unknown; uniform 3-way logits
        // give exactly ln 3 at that pixel, and the mean is over that single
        // labeled pixel.
        let pm = ProbMap::from_probs(
            2,
            2,
            2,
            vec![0.5, 0.5, 0.9, 0.1, 0.8, 0.2, 0.7, 0.3],
        )
        .unwrap();
        let pl = generate_pseudo_labels(&pm, 1e-6, FitMetric::Kl).unwrap();
        assert_eq!(pl.unknown_count(), 1);

        let mut tape = Tape::new();
        let logits = tape.constant(&Tensor::zeros(&[1, 3, 2, 2]));
        let l = target_pseudo_loss(&mut tape, logits, &[&pl]).unwrap();
        assert!((tape.scalar_value(l).unwrap() - crate::math::ln(3.0)).abs() < 1e-14);

        // An empty store entry (fresh image) contributes a zero loss.
        let empty = PseudoLabelMap::empty(2, 2, 2);
        let mut tape = Tape::new();
        let logits = tape.constant(&Tensor::zeros(&[1, 3, 2, 2]));
        let l = target_pseudo_loss(&mut tape, logits, &[&empty]).unwrap();
        assert_eq!(tape.scalar_value(l).unwrap(), 0.0);
    }

    #[test]
    fn star_loss_rejects_unknown_labels() {
        let mut tape = Tape::new();
        let logits = tape.constant(&Tensor::zeros(&[1, 4, 1, 2]));
        let good = LabelMap::from_vec(1, 2, vec![1, 4]).unwrap();
        assert!(star_seg_loss(&mut tape, logits, &[&good]).is_ok());
        let bad = LabelMap::from_vec(1, 2, vec![1, 5]).unwrap();
        assert!(star_seg_loss(&mut tape, logits, &[&bad]).is_err());
    }

    #[test]
    fn source_loss_on_uniform_logits_is_ln_channels() {
        let mut tape = Tape::new();
        let logits = tape.constant(&Tensor::zeros(&[1, 5, 1, 2]));
        let labels = LabelMap::from_vec(1, 2, vec![1, 3]).unwrap();
        let l = source_seg_loss(&mut tape, logits, &[&labels]).unwrap();
        assert!((tape.scalar_value(l).unwrap() - crate::math::ln(5.0)).abs() < 1e-14);
    }
}
