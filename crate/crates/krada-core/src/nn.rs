//! The networks: feature extractor F, open-world classifier head C (K+1
//! channels), auxiliary known-class head C* (K channels), and a per-location
//! domain discriminator D.
//!
//! All convolutions are stride-1 and resolution-preserving, so every head
//! emits one prediction per input pixel and masks can be applied to feature
//! maps without any geometric bookkeeping. Weights are initialized from a
//! seeded uniform distribution with the fan-in bound `√(6/fan_in)`; biases
//! start at zero.

use crate::label::LabelMap;
use crate::rng::{stream, Stream};
use crate::tape::{Node, Tape};
use crate::tensor::{ParamGroup, Tensor};
use crate::{invalid_err, math, shape_err, Result};
use alloc::vec;
use alloc::vec::Vec;

/// One convolution layer's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv {
    pub weight: Tensor,
    pub bias: Tensor,
    pub pad: usize,
}

impl Conv {
    fn seeded(out_c: usize, in_c: usize, k: usize, rng: &mut Stream) -> Self {
        let bound = math::sqrt(6.0 / (in_c * k * k) as f64);
        let n = out_c * in_c * k * k;
        let data: Vec<f64> = (0..n).map(|_| rng.uniform_in(-bound, bound)).collect();
        Conv {
            weight: Tensor::from_vec(&[out_c, in_c, k, k], data)
                .unwrap()
                .tracked(),
            bias: Tensor::zeros(&[out_c]).tracked(),
            pad: (k - 1) / 2,
        }
    }

    fn from_tensors(weight: Tensor, bias: Tensor) -> Result<Self> {
        if weight.shape().len() != 4 || weight.shape()[2] != weight.shape()[3] {
            return Err(shape_err!("conv weight shape {:?}", weight.shape()));
        }
        let k = weight.shape()[2];
        if k % 2 == 0 {
            return Err(invalid_err!("even kernel size {k}"));
        }
        if bias.shape() != [weight.shape()[0]] {
            return Err(shape_err!(
                "bias shape {:?} for {} output channels",
                bias.shape(),
                weight.shape()[0]
            ));
        }
        Ok(Conv {
            pad: (k - 1) / 2,
            weight: weight.tracked(),
            bias: bias.tracked(),
        })
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    /// Forward pass outside any gradient context.
    pub fn forward_value(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xn = tape.constant(x);
        let w = tape.constant(&self.weight);
        let b = tape.constant(&self.bias);
        let y = tape.conv2d(xn, w, b, self.pad)?;
        Ok(tape.value_tensor(y))
    }
}

/// Feature extractor plus both classifier heads.
#[derive(Debug, Clone, PartialEq)]
pub struct SegModel {
    pub f1: Conv,
    pub f2: Conv,
    /// C: open-world head, `k + 1` output channels.
    pub head: Conv,
    /// C*: known-class head, `k` output channels.
    pub known_head: Conv,
    k: usize,
}

/// Serialization order of [`SegModel`] layers; checkpoints rely on it.
pub const SEG_LAYER_NAMES: [&str; 8] = [
    "f1.weight",
    "f1.bias",
    "f2.weight",
    "f2.bias",
    "head.weight",
    "head.bias",
    "known_head.weight",
    "known_head.bias",
];

pub const DISC_LAYER_NAMES: [&str; 4] = ["d1.weight", "d1.bias", "d2.weight", "d2.bias"];

impl SegModel {
    /// Builds F (two 3×3 convolutions with ReLU), C, and C* with weights
    /// drawn from the `"init-model"` stream of `seed`.
    pub fn init(k: usize, in_channels: usize, feat_channels: usize, seed: u64) -> Result<Self> {
        if k < 2 {
            return Err(invalid_err!("need at least two known classes, got {k}"));
        }
        if in_channels == 0 || feat_channels == 0 {
            return Err(invalid_err!("zero-channel network"));
        }
        let mut rng = stream(seed, "init-model", 0);
        Ok(SegModel {
            f1: Conv::seeded(feat_channels, in_channels, 3, &mut rng),
            f2: Conv::seeded(feat_channels, feat_channels, 3, &mut rng),
            head: Conv::seeded(k + 1, feat_channels, 1, &mut rng),
            known_head: Conv::seeded(k, feat_channels, 1, &mut rng),
            k,
        })
    }

    /// Rebuilds a model from tensors in [`SEG_LAYER_NAMES`] order, checking
    /// the structural relations between the shapes (for example that the
    /// open-world head has exactly one more channel than the known head).
    pub fn from_layer_tensors(tensors: Vec<Tensor>) -> Result<Self> {
        if tensors.len() != SEG_LAYER_NAMES.len() {
            return Err(shape_err!(
                "expected {} layer tensors, got {}",
                SEG_LAYER_NAMES.len(),
                tensors.len()
            ));
        }
        let mut it = tensors.into_iter();
        let f1 = Conv::from_tensors(it.next().unwrap(), it.next().unwrap())?;
        let f2 = Conv::from_tensors(it.next().unwrap(), it.next().unwrap())?;
        let head = Conv::from_tensors(it.next().unwrap(), it.next().unwrap())?;
        let known_head = Conv::from_tensors(it.next().unwrap(), it.next().unwrap())?;
        let feat = f1.out_channels();
        if f2.in_channels() != feat || f2.out_channels() != feat {
            return Err(shape_err!("second feature layer is not {feat}->{feat}"));
        }
        if head.in_channels() != feat || known_head.in_channels() != feat {
            return Err(shape_err!("heads do not consume {feat} feature channels"));
        }
        if head.out_channels() != known_head.out_channels() + 1 {
            return Err(shape_err!(
                "open-world head has {} channels but known head has {}",
                head.out_channels(),
                known_head.out_channels()
            ));
        }
        let k = known_head.out_channels();
        if k < 2 {
            return Err(invalid_err!("need at least two known classes, got {k}"));
        }
        Ok(SegModel {
            f1,
            f2,
            head,
            known_head,
            k,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn in_channels(&self) -> usize {
        self.f1.in_channels()
    }

    pub fn feat_channels(&self) -> usize {
        self.f1.out_channels()
    }

    /// Layers in checkpoint order.
    pub fn layers(&self) -> [(&'static str, &Tensor); 8] {
        [
            (SEG_LAYER_NAMES[0], &self.f1.weight),
            (SEG_LAYER_NAMES[1], &self.f1.bias),
            (SEG_LAYER_NAMES[2], &self.f2.weight),
            (SEG_LAYER_NAMES[3], &self.f2.bias),
            (SEG_LAYER_NAMES[4], &self.head.weight),
            (SEG_LAYER_NAMES[5], &self.head.bias),
            (SEG_LAYER_NAMES[6], &self.known_head.weight),
            (SEG_LAYER_NAMES[7], &self.known_head.bias),
        ]
    }

    pub fn params_mut(&mut self, group: ParamGroup) -> Vec<&mut Tensor> {
        match group {
            ParamGroup::Feature => vec![
                &mut self.f1.weight,
                &mut self.f1.bias,
                &mut self.f2.weight,
                &mut self.f2.bias,
            ],
            ParamGroup::Classifier => vec![&mut self.head.weight, &mut self.head.bias],
            ParamGroup::KnownClassifier => {
                vec![&mut self.known_head.weight, &mut self.known_head.bias]
            }
            ParamGroup::Discriminator => Vec::new(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers().iter().all(|(_, t)| t.is_finite())
    }

    /// F outside any gradient context.
    pub fn features_value(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let xn = tape.constant(x);
        let f = bound.features(&mut tape, xn)?;
        Ok(tape.value_tensor(f))
    }

    pub fn class_logits_value(&self, feats: &Tensor) -> Result<Tensor> {
        self.head.forward_value(feats)
    }

    pub fn known_logits_value(&self, feats: &Tensor) -> Result<Tensor> {
        self.known_head.forward_value(feats)
    }

    /// Per-pixel argmax over C's `K+1` channels for a `[N, in, H, W]` batch;
    /// ties resolve to the lowest class id. Returns labels in `1..=K+1`.
    pub fn predict(&self, images: &Tensor) -> Result<Vec<LabelMap>> {
        let feats = self.features_value(images)?;
        let logits = self.class_logits_value(&feats)?;
        let s = logits.shape();
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let hw = h * w;
        let mut maps = Vec::with_capacity(n);
        for ni in 0..n {
            let mut map = LabelMap::new(h, w);
            for px in 0..hw {
                let mut best = 0usize;
                let mut best_v = logits.data()[(ni * c) * hw + px];
                for ch in 1..c {
                    let v = logits.data()[(ni * c + ch) * hw + px];
                    if v > best_v {
                        best_v = v;
                        best = ch;
                    }
                }
                map.pixels_mut()[px] = (best + 1) as u8;
            }
            maps.push(map);
        }
        Ok(maps)
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundSeg {
        BoundSeg {
            f1: BoundConv::bind(&self.f1, tape),
            f2: BoundConv::bind(&self.f2, tape),
            head: BoundConv::bind(&self.head, tape),
            known_head: BoundConv::bind(&self.known_head, tape),
        }
    }
}

/// Per-location domain discriminator: two 1×1 convolutions with a ReLU in
/// between, emitting one source-vs-target logit per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator {
    pub d1: Conv,
    pub d2: Conv,
}

impl Discriminator {
    /// Weights come from the `"init-disc"` stream, so a model trained with or
    /// without a discriminator sees identical F/C/C* initialization.
    pub fn init(feat_channels: usize, hidden: usize, seed: u64) -> Result<Self> {
        if feat_channels == 0 || hidden == 0 {
            return Err(invalid_err!("zero-channel discriminator"));
        }
        let mut rng = stream(seed, "init-disc", 0);
        Ok(Discriminator {
            d1: Conv::seeded(hidden, feat_channels, 1, &mut rng),
            d2: Conv::seeded(1, hidden, 1, &mut rng),
        })
    }

    pub fn from_layer_tensors(tensors: Vec<Tensor>) -> Result<Self> {
        if tensors.len() != DISC_LAYER_NAMES.len() {
            return Err(shape_err!(
                "expected {} layer tensors, got {}",
                DISC_LAYER_NAMES.len(),
                tensors.len()
            ));
        }
        let mut it = tensors.into_iter();
        let d1 = Conv::from_tensors(it.next().unwrap(), it.next().unwrap())?;
        let d2 = Conv::from_tensors(it.next().unwrap(), it.next().unwrap())?;
        if d2.in_channels() != d1.out_channels() || d2.out_channels() != 1 {
            return Err(shape_err!(
                "discriminator layers {}->{} / {}->{} do not chain to one logit",
                d1.in_channels(),
                d1.out_channels(),
                d2.in_channels(),
                d2.out_channels()
            ));
        }
        Ok(Discriminator { d1, d2 })
    }

    pub fn layers(&self) -> [(&'static str, &Tensor); 4] {
        [
            (DISC_LAYER_NAMES[0], &self.d1.weight),
            (DISC_LAYER_NAMES[1], &self.d1.bias),
            (DISC_LAYER_NAMES[2], &self.d2.weight),
            (DISC_LAYER_NAMES[3], &self.d2.bias),
        ]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.d1.weight,
            &mut self.d1.bias,
            &mut self.d2.weight,
            &mut self.d2.bias,
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.layers().iter().all(|(_, t)| t.is_finite())
    }

    pub fn logits_value(&self, feats: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let f = tape.constant(feats);
        let y = bound.forward(&mut tape, f)?;
        Ok(tape.value_tensor(y))
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundDisc {
        BoundDisc {
            d1: BoundConv::bind(&self.d1, tape),
            d2: BoundConv::bind(&self.d2, tape),
        }
    }
}

/// A conv layer's nodes on a specific tape.
#[derive(Clone, Copy)]
pub struct BoundConv {
    w: Node,
    b: Node,
    pad: usize,
}

impl BoundConv {
    fn bind(conv: &Conv, tape: &mut Tape) -> Self {
        BoundConv {
            w: tape.leaf(&conv.weight),
            b: tape.leaf(&conv.bias),
            pad: conv.pad,
        }
    }

    pub fn apply(&self, tape: &mut Tape, x: Node) -> Result<Node> {
        tape.conv2d(x, self.w, self.b, self.pad)
    }

    fn export(&self, tape: &Tape, conv: &mut Conv) -> Result<()> {
        tape.export_grad(self.w, &mut conv.weight)?;
        tape.export_grad(self.b, &mut conv.bias)
    }
}

/// [`SegModel`] bound to one tape for a training step.
pub struct BoundSeg {
    f1: BoundConv,
    f2: BoundConv,
    head: BoundConv,
    known_head: BoundConv,
}

impl BoundSeg {
    pub fn features(&self, tape: &mut Tape, x: Node) -> Result<Node> {
        let h = self.f1.apply(tape, x)?;
        let h = tape.relu(h);
        let h = self.f2.apply(tape, h)?;
        Ok(tape.relu(h))
    }

    pub fn class_logits(&self, tape: &mut Tape, feats: Node) -> Result<Node> {
        self.head.apply(tape, feats)
    }

    pub fn known_logits(&self, tape: &mut Tape, feats: Node) -> Result<Node> {
        self.known_head.apply(tape, feats)
    }

    pub fn export_feature_grads(&self, tape: &Tape, model: &mut SegModel) -> Result<()> {
        self.f1.export(tape, &mut model.f1)?;
        self.f2.export(tape, &mut model.f2)
    }

    pub fn export_classifier_grads(&self, tape: &Tape, model: &mut SegModel) -> Result<()> {
        self.head.export(tape, &mut model.head)
    }

    pub fn export_known_grads(&self, tape: &Tape, model: &mut SegModel) -> Result<()> {
        self.known_head.export(tape, &mut model.known_head)
    }
}

/// [`Discriminator`] bound to one tape.
pub struct BoundDisc {
    d1: BoundConv,
    d2: BoundConv,
}

impl BoundDisc {
    pub fn forward(&self, tape: &mut Tape, feats: Node) -> Result<Node> {
        let h = self.d1.apply(tape, feats)?;
        let h = tape.relu(h);
        self.d2.apply(tape, h)
    }

    pub fn export_grads(&self, tape: &Tape, disc: &mut Discriminator) -> Result<()> {
        self.d1.export(tape, &mut disc.d1)?;
        self.d2.export(tape, &mut disc.d2)
    }
}
