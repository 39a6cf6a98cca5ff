//! Define-by-run reverse-mode autodiff.
//!
//! A [`Tape`] is built fresh for every training step: leaves are copied in,
//! each operation records one [`Step`] and stores its output value, and
//! [`Tape::backward`] walks the steps once in reverse. Gradients are then
//! exported back into the persistent parameter [`Tensor`]s (accumulating, so
//! repeated exports without [`crate::tensor::zero_grads`] sum).
//!
//! Only the operations this project composes are implemented. All of them
//! preserve spatial resolution; convolutions are stride-1 with odd kernels
//! and symmetric zero padding.

use crate::tensor::Tensor;
use crate::{invalid_err, math, shape_err, Error, Result};
use alloc::vec;
use alloc::vec::Vec;

/// Numerical floor inside every `ln` of a probability; keeps one-hot targets
/// against saturated softmax outputs finite.
pub const LOG_CLAMP: f64 = 1e-12;

/// Handle to a value stored on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Node(usize);

struct Slot {
    shape: Vec<usize>,
    value: Vec<f64>,
    needs_grad: bool,
    grad: Option<Vec<f64>>,
}

enum Step {
    Conv2d {
        x: Node,
        w: Node,
        b: Node,
        out: Node,
        pad: usize,
    },
    Relu {
        x: Node,
        out: Node,
    },
    SoftmaxChannels {
        x: Node,
        out: Node,
    },
    MaskedCrossEntropy {
        logits: Node,
        out: Node,
        target: Tensor,
        weights: Tensor,
        /// Count of labeled pixels, already clamped to ≥ 1.
        norm: f64,
        /// Softmax of the logits, saved for the backward pass.
        probs: Vec<f64>,
    },
    BceMean {
        logits: Node,
        out: Node,
        label: f64,
    },
    BceWeighted {
        logits: Node,
        out: Node,
        label: f64,
        weights: Tensor,
        /// Count of nonzero-weight locations, already clamped to ≥ 1.
        norm: f64,
    },
    MulMask {
        x: Node,
        out: Node,
        mask: Tensor,
    },
    Add {
        a: Node,
        b: Node,
        out: Node,
    },
    Scale {
        x: Node,
        c: f64,
        out: Node,
    },
    Sum {
        x: Node,
        out: Node,
    },
    WeightedSum {
        x: Node,
        out: Node,
        coeffs: Tensor,
    },
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Slot>,
    steps: Vec<Step>,
    consumed: bool,
}

fn dims4(shape: &[usize], what: &str) -> Result<(usize, usize, usize, usize)> {
    if shape.len() != 4 {
        return Err(shape_err!("{what} must be rank 4 (NCHW), got {:?}", shape));
    }
    Ok((shape[0], shape[1], shape[2], shape[3]))
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, needs_grad: bool) -> Node {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Slot {
            shape,
            value,
            needs_grad,
            grad: None,
        });
        Node(self.nodes.len() - 1)
    }

    /// Copies a tensor onto the tape; gradient tracking follows the tensor's
    /// `requires_grad` flag.
    pub fn leaf(&mut self, t: &Tensor) -> Node {
        self.push(t.shape().to_vec(), t.data().to_vec(), t.requires_grad())
    }

    /// Copies a tensor onto the tape as a detached constant.
    pub fn constant(&mut self, t: &Tensor) -> Node {
        self.push(t.shape().to_vec(), t.data().to_vec(), false)
    }

    pub fn shape(&self, n: Node) -> &[usize] {
        &self.nodes[n.0].shape
    }

    pub fn value(&self, n: Node) -> &[f64] {
        &self.nodes[n.0].value
    }

    /// Copies a node's value out as a detached tensor.
    pub fn value_tensor(&self, n: Node) -> Tensor {
        Tensor::from_vec(&self.nodes[n.0].shape, self.nodes[n.0].value.clone()).unwrap()
    }

    pub fn scalar_value(&self, n: Node) -> Result<f64> {
        if self.nodes[n.0].value.len() != 1 {
            return Err(shape_err!(
                "expected a scalar node, got shape {:?}",
                self.nodes[n.0].shape
            ));
        }
        Ok(self.nodes[n.0].value[0])
    }

    /// Gradient of the last `backward` with respect to node `n`, if it was
    /// tracked and reached.
    pub fn grad(&self, n: Node) -> Option<&[f64]> {
        self.nodes[n.0].grad.as_deref()
    }

    /// Accumulates the node's gradient into a parameter tensor.
    pub fn export_grad(&self, n: Node, into: &mut Tensor) -> Result<()> {
        let g = self
            .grad(n)
            .ok_or_else(|| invalid_err!("node has no gradient to export"))?;
        into.accumulate_grad(g)
    }

    /// True if any ReLU on this tape saw an input within `eps` of zero —
    /// the region where the subgradient convention (0 at 0) makes finite
    /// differences disagree with the analytic derivative.
    pub fn has_relu_input_within(&self, eps: f64) -> bool {
        self.steps.iter().any(|s| {
            if let Step::Relu { x, .. } = s {
                self.nodes[x.0].value.iter().any(|v| math::abs(*v) < eps)
            } else {
                false
            }
        })
    }

    // ───────────────────────── forward operations ─────────────────────────

    /// Stride-1 2-D convolution with symmetric zero padding `pad`, which must
    /// keep resolution (`pad = (k-1)/2`). `x` is NCHW, `w` is
    /// `[out_c, in_c, k, k]`, `b` is `[out_c]`. Even kernels are unsupported.
    pub fn conv2d(&mut self, x: Node, w: Node, b: Node, pad: usize) -> Result<Node> {
        let (n, ci, h, wd) = dims4(self.shape(x), "conv input")?;
        let (co, wci, kh, kw) = dims4(self.shape(w), "conv weight")?;
        if kh != kw {
            return Err(invalid_err!("non-square kernel {kh}x{kw}"));
        }
        let k = kh;
        if k % 2 == 0 {
            return Err(invalid_err!("even kernel size {k} is unsupported"));
        }
        if pad != (k - 1) / 2 {
            return Err(invalid_err!(
                "padding {pad} does not preserve resolution for kernel {k}"
            ));
        }
        if wci != ci {
            return Err(shape_err!("weight expects {wci} input channels, got {ci}"));
        }
        if self.shape(b) != [co] {
            return Err(shape_err!(
                "bias shape {:?} vs {co} output channels",
                self.shape(b)
            ));
        }

        let mut out = vec![0.0; n * co * h * wd];
        {
            let xv = &self.nodes[x.0].value;
            let wv = &self.nodes[w.0].value;
            let bv = &self.nodes[b.0].value;
            for ni in 0..n {
                for oc in 0..co {
                    let obase = (ni * co + oc) * h * wd;
                    out[obase..obase + h * wd].fill(bv[oc]);
                    for icn in 0..ci {
                        let xbase = (ni * ci + icn) * h * wd;
                        let wbase = (oc * ci + icn) * k * k;
                        for ky in 0..k {
                            for kx in 0..k {
                                let wk = wv[wbase + ky * k + kx];
                                if wk == 0.0 {
                                    continue;
                                }
                                for oy in 0..h {
                                    let iy = oy + ky;
                                    if iy < pad || iy - pad >= h {
                                        continue;
                                    }
                                    let iy = iy - pad;
                                    let orow = obase + oy * wd;
                                    let xrow = xbase + iy * wd;
                                    for ox in 0..wd {
                                        let ix = ox + kx;
                                        if ix < pad || ix - pad >= wd {
                                            continue;
                                        }
                                        out[orow + ox] += wk * xv[xrow + (ix - pad)];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        let needs = self.needs_any(&[x, w, b]);
        let out = self.push(vec![n, co, h, wd], out, needs);
        self.steps.push(Step::Conv2d { x, w, b, out, pad });
        Ok(out)
    }

    pub fn relu(&mut self, x: Node) -> Node {
        let value: Vec<f64> = self.nodes[x.0]
            .value
            .iter()
            .map(|&v| if v > 0.0 { v } else { 0.0 })
            .collect();
        let needs = self.nodes[x.0].needs_grad;
        let shape = self.nodes[x.0].shape.clone();
        let out = self.push(shape, value, needs);
        self.steps.push(Step::Relu { x, out });
        out
    }

    /// Softmax over the channel dimension of an NCHW tensor, computed with
    /// per-pixel max subtraction so large logits cannot overflow.
    pub fn softmax_channels(&mut self, x: Node) -> Result<Node> {
        let (n, c, h, w) = dims4(self.shape(x), "softmax input")?;
        let value = softmax_channels_data(&self.nodes[x.0].value, n, c, h, w);
        let needs = self.nodes[x.0].needs_grad;
        let out = self.push(vec![n, c, h, w], value, needs);
        self.steps.push(Step::SoftmaxChannels { x, out });
        Ok(out)
    }

    /// Pixel-wise cross-entropy between channel softmax of `logits` and a
    /// one-hot `target`, weighted per pixel and normalized by the number of
    /// labeled pixels (pixels with an all-zero target row, or zero weight,
    /// contribute nothing and are not counted). Returns a scalar node.
    pub fn masked_cross_entropy(
        &mut self,
        logits: Node,
        target: &Tensor,
        weights: &Tensor,
    ) -> Result<Node> {
        let (n, c, h, w) = dims4(self.shape(logits), "cross-entropy logits")?;
        if target.shape() != self.shape(logits) {
            return Err(shape_err!(
                "target shape {:?} vs logits {:?}",
                target.shape(),
                self.shape(logits)
            ));
        }
        if weights.shape() != [n, 1, h, w] {
            return Err(shape_err!(
                "pixel weights must be [{n}, 1, {h}, {w}], got {:?}",
                weights.shape()
            ));
        }

        let probs = softmax_channels_data(&self.nodes[logits.0].value, n, c, h, w);
        let tv = target.data();
        let wv = weights.data();
        let hw = h * w;
        let mut total = 0.0;
        let mut labeled = 0u64;
        for ni in 0..n {
            for px in 0..hw {
                let wt = wv[ni * hw + px];
                if wt == 0.0 {
                    continue;
                }
                let mut any = false;
                let mut px_loss = 0.0;
                for ch in 0..c {
                    let t = tv[(ni * c + ch) * hw + px];
                    if t != 0.0 {
                        any = true;
                        let p = probs[(ni * c + ch) * hw + px];
                        px_loss -= t * math::ln(if p > LOG_CLAMP { p } else { LOG_CLAMP });
                    }
                }
                if any {
                    labeled += 1;
                    total += wt * px_loss;
                }
            }
        }
        let norm = if labeled == 0 { 1.0 } else { labeled as f64 };
        let needs = self.nodes[logits.0].needs_grad;
        let out = self.push(vec![1], vec![total / norm], needs);
        self.steps.push(Step::MaskedCrossEntropy {
            logits,
            out,
            target: target.clone(),
            weights: weights.clone(),
            norm,
            probs,
        });
        Ok(out)
    }

    /// Mean binary cross-entropy of `logits` against the constant `label`,
    /// in the overflow-free logit form
    /// `max(x,0) − x·y + ln(1 + exp(−|x|))`. Returns a scalar node.
    pub fn bce_logits(&mut self, logits: Node, label: f64) -> Result<Node> {
        check_label(label)?;
        let xs = &self.nodes[logits.0].value;
        let total: f64 = xs.iter().map(|&x| bce_one(x, label)).sum();
        let norm = xs.len().max(1) as f64;
        let needs = self.nodes[logits.0].needs_grad;
        let out = self.push(vec![1], vec![total / norm], needs);
        self.steps.push(Step::BceMean { logits, out, label });
        Ok(out)
    }

    /// Binary cross-entropy averaged over the locations with nonzero weight
    /// only; zero-weight locations are excluded from the mean entirely.
    /// `weights` must match the logits' shape. Returns a scalar node.
    pub fn bce_logits_weighted(
        &mut self,
        logits: Node,
        label: f64,
        weights: &Tensor,
    ) -> Result<Node> {
        check_label(label)?;
        if weights.shape() != self.shape(logits) {
            return Err(shape_err!(
                "weights shape {:?} vs logits {:?}",
                weights.shape(),
                self.shape(logits)
            ));
        }
        let xs = &self.nodes[logits.0].value;
        let wv = weights.data();
        let mut total = 0.0;
        let mut count = 0u64;
        for (x, wt) in xs.iter().zip(wv) {
            if *wt != 0.0 {
                count += 1;
                total += wt * bce_one(*x, label);
            }
        }
        let norm = if count == 0 { 1.0 } else { count as f64 };
        let needs = self.nodes[logits.0].needs_grad;
        let out = self.push(vec![1], vec![total / norm], needs);
        self.steps.push(Step::BceWeighted {
            logits,
            out,
            label,
            weights: weights.clone(),
            norm,
        });
        Ok(out)
    }

    /// Multiplies every channel of an NCHW tensor by a `[N,1,H,W]` mask.
    /// The mask is data, not a differentiable input.
    pub fn mul_mask(&mut self, x: Node, mask: &Tensor) -> Result<Node> {
        let (n, c, h, w) = dims4(self.shape(x), "mask input")?;
        if mask.shape() != [n, 1, h, w] {
            return Err(shape_err!(
                "mask must be [{n}, 1, {h}, {w}], got {:?}",
                mask.shape()
            ));
        }
        let hw = h * w;
        let xv = &self.nodes[x.0].value;
        let mv = mask.data();
        let mut out = vec![0.0; xv.len()];
        for ni in 0..n {
            for ch in 0..c {
                let base = (ni * c + ch) * hw;
                for px in 0..hw {
                    out[base + px] = xv[base + px] * mv[ni * hw + px];
                }
            }
        }
        let needs = self.nodes[x.0].needs_grad;
        let out = self.push(vec![n, c, h, w], out, needs);
        self.steps.push(Step::MulMask {
            x,
            out,
            mask: mask.clone(),
        });
        Ok(out)
    }

    pub fn add(&mut self, a: Node, b: Node) -> Result<Node> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err!(
                "add of {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            ));
        }
        let value: Vec<f64> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x + y)
            .collect();
        let needs = self.needs_any(&[a, b]);
        let shape = self.nodes[a.0].shape.clone();
        let out = self.push(shape, value, needs);
        self.steps.push(Step::Add { a, b, out });
        Ok(out)
    }

    pub fn scale(&mut self, x: Node, c: f64) -> Node {
        let value: Vec<f64> = self.nodes[x.0].value.iter().map(|v| c * v).collect();
        let needs = self.nodes[x.0].needs_grad;
        let shape = self.nodes[x.0].shape.clone();
        let out = self.push(shape, value, needs);
        self.steps.push(Step::Scale { x, c, out });
        out
    }

    /// Full reduction to a scalar node.
    pub fn sum(&mut self, x: Node) -> Node {
        let total: f64 = self.nodes[x.0].value.iter().sum();
        let needs = self.nodes[x.0].needs_grad;
        let out = self.push(vec![1], vec![total], needs);
        self.steps.push(Step::Sum { x, out });
        out
    }

    /// `Σ xᵢ·cᵢ` against constant coefficients; a weighted reduction used to
    /// probe gradients of normalization ops whose plain sum is constant.
    pub fn weighted_sum(&mut self, x: Node, coeffs: &Tensor) -> Result<Node> {
        if coeffs.shape() != self.shape(x) {
            return Err(shape_err!(
                "coeff shape {:?} vs input {:?}",
                coeffs.shape(),
                self.shape(x)
            ));
        }
        let total: f64 = self.nodes[x.0]
            .value
            .iter()
            .zip(coeffs.data())
            .map(|(v, c)| v * c)
            .sum();
        let needs = self.nodes[x.0].needs_grad;
        let out = self.push(vec![1], vec![total], needs);
        self.steps.push(Step::WeightedSum {
            x,
            out,
            coeffs: coeffs.clone(),
        });
        Ok(out)
    }

    fn needs_any(&self, nodes: &[Node]) -> bool {
        nodes.iter().any(|n| self.nodes[n.0].needs_grad)
    }

    // ───────────────────────────── backward ───────────────────────────────

    /// Propagates `∂loss/∂node` to every tracked node reachable from the
    /// scalar `loss`. Consumes the tape: a second call without a fresh
    /// forward pass is an error.
    pub fn backward(&mut self, loss: Node) -> Result<()> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        self.consumed = true;
        if self.nodes[loss.0].value.len() != 1 {
            return Err(shape_err!(
                "backward requires a scalar loss, got {:?}",
                self.nodes[loss.0].shape
            ));
        }
        for slot in self.nodes.iter_mut() {
            if slot.needs_grad {
                slot.grad = Some(vec![0.0; slot.value.len()]);
            }
        }
        if let Some(g) = self.nodes[loss.0].grad.as_mut() {
            g[0] = 1.0;
        } else {
            // Loss does not depend on any tracked input: nothing to do.
            return Ok(());
        }

        for si in (0..self.steps.len()).rev() {
            self.backward_step(si);
        }
        Ok(())
    }

    fn take_out_grad(&self, out: Node) -> Option<Vec<f64>> {
        self.nodes[out.0].grad.clone()
    }

    fn add_grad(&mut self, n: Node, delta: &[f64]) {
        if let Some(g) = self.nodes[n.0].grad.as_mut() {
            for (gi, di) in g.iter_mut().zip(delta) {
                *gi += di;
            }
        }
    }

    fn backward_step(&mut self, si: usize) {
        // Steps whose output was never tracked have no gradient to move.
        let step = &self.steps[si];
        match step {
            Step::Conv2d { x, w, b, out, pad } => {
                let (x, w, b, out, pad) = (*x, *w, *b, *out, *pad);
                let Some(gout) = self.take_out_grad(out) else {
                    return;
                };
                let (n, ci, h, wd) = dims4(self.shape(x), "conv input").unwrap();
                let (co, _, k, _) = dims4(self.shape(w), "conv weight").unwrap();
                let hw = h * wd;

                let xv = self.nodes[x.0].value.clone();
                let wv = self.nodes[w.0].value.clone();
                let mut gx = vec![0.0; xv.len()];
                let mut gw = vec![0.0; wv.len()];
                let mut gb = vec![0.0; co];

                for ni in 0..n {
                    for oc in 0..co {
                        let obase = (ni * co + oc) * hw;
                        for oy in 0..h {
                            for ox in 0..wd {
                                let g = gout[obase + oy * wd + ox];
                                if g == 0.0 {
                                    continue;
                                }
                                gb[oc] += g;
                                for icn in 0..ci {
                                    let xbase = (ni * ci + icn) * hw;
                                    let wbase = (oc * ci + icn) * k * k;
                                    for ky in 0..k {
                                        let iy = oy + ky;
                                        if iy < pad || iy - pad >= h {
                                            continue;
                                        }
                                        let iy = iy - pad;
                                        for kx in 0..k {
                                            let ix = ox + kx;
                                            if ix < pad || ix - pad >= wd {
                                                continue;
                                            }
                                            let ix = ix - pad;
                                            gw[wbase + ky * k + kx] += g * xv[xbase + iy * wd + ix];
                                            gx[xbase + iy * wd + ix] += g * wv[wbase + ky * k + kx];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                self.add_grad(x, &gx);
                self.add_grad(w, &gw);
                self.add_grad(b, &gb);
            }
            Step::Relu { x, out } => {
                let (x, out) = (*x, *out);
                let Some(gout) = self.take_out_grad(out) else {
                    return;
                };
                // Subgradient 0 at exactly 0.
                let gx: Vec<f64> = self.nodes[x.0]
                    .value
                    .iter()
                    .zip(&gout)
                    .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
                    .collect();
                self.add_grad(x, &gx);
            }
            Step::SoftmaxChannels { x, out } => {
                let (x, out) = (*x, *out);
                let Some(gout) = self.take_out_grad(out) else {
                    return;
                };
                let (n, c, h, w) = dims4(self.shape(x), "softmax input").unwrap();
                let hw = h * w;
                let sv = self.nodes[out.0].value.clone();
                let mut gx = vec![0.0; sv.len()];
                for ni in 0..n {
                    for px in 0..hw {
                        let mut dot = 0.0;
                        for ch in 0..c {
                            let i = (ni * c + ch) * hw + px;
                            dot += gout[i] * sv[i];
                        }
                        for ch in 0..c {
                            let i = (ni * c + ch) * hw + px;
                            gx[i] = sv[i] * (gout[i] - dot);
                        }
                    }
                }
                self.add_grad(x, &gx);
            }
            Step::MaskedCrossEntropy {
                logits,
                out,
                target,
                weights,
                norm,
                probs,
            } => {
                let (logits, out, norm) = (*logits, *out, *norm);
                let Some(gout) = self.take_out_grad(out) else {
                    return;
                };
                let g = gout[0];
                let (n, c, h, w) = dims4(self.shape(logits), "cross-entropy logits").unwrap();
                let hw = h * w;
                let tv = target.data().to_vec();
                let wv = weights.data().to_vec();
                let probs = probs.clone();
                let mut gx = vec![0.0; tv.len()];
                for ni in 0..n {
                    for px in 0..hw {
                        let wt = wv[ni * hw + px];
                        if wt == 0.0 {
                            continue;
                        }
                        for ch in 0..c {
                            let t = tv[(ni * c + ch) * hw + px];
                            if t == 0.0 {
                                continue;
                            }
                            let p = probs[(ni * c + ch) * hw + px];
                            if p <= LOG_CLAMP {
                                // The forward value was clamped flat here;
                                // its true local derivative is zero.
                                continue;
                            }
                            let coeff = g * wt * t / norm;
                            for kc in 0..c {
                                let i = (ni * c + kc) * hw + px;
                                let delta = if kc == ch { 1.0 } else { 0.0 };
                                gx[i] += coeff * (probs[i] - delta);
                            }
                        }
                    }
                }
                self.add_grad(logits, &gx);
            }
            Step::BceMean { logits, out, label } => {
                let (logits, out, label) = (*logits, *out, *label);
                let Some(gout) = self.take_out_grad(out) else {
                    return;
                };
                let g = gout[0];
                let n = self.nodes[logits.0].value.len().max(1) as f64;
                let gx: Vec<f64> = self.nodes[logits.0]
                    .value
                    .iter()
                    .map(|&x| g * (math::sigmoid(x) - label) / n)
                    .collect();
                self.add_grad(logits, &gx);
            }
            Step::BceWeighted {
                logits,
                out,
                label,
                weights,
                norm,
            } => {
                let (logits, out, label, norm) = (*logits, *out, *label, *norm);
                let Some(gout) = self.take_out_grad(out) else {
                    return;
                };
                let g = gout[0];
                let wv = weights.data().to_vec();
                let gx: Vec<f64> = self.nodes[logits.0]
                    .value
                    .iter()
                    .zip(&wv)
                    .map(|(&x, &wt)| {
                        if wt == 0.0 {
                            0.0
                        } else {
                            g * wt * (math::sigmoid(x) - label) / norm
                        }
                    })
                    .collect();
                self.add_grad(logits, &gx);
            }
            Step::MulMask { x, out, mask } => {
                let (x, out) = (*x, *out);
                let mv = mask.data().to_vec();
                let Some(gout) = self.take_out_grad(out) else {
                    return;
                };
                let (n, c, h, w) = dims4(self.shape(x), "mask input").unwrap();
                let hw = h * w;
                let mut gx = vec![0.0; gout.len()];
                for ni in 0..n {
                    for ch in 0..c {
                        let base = (ni * c + ch) * hw;
                        for px in 0..hw {
                            gx[base + px] = gout[base + px] * mv[ni * hw + px];
                        }
                    }
                }
                self.add_grad(x, &gx);
            }
            Step::Add { a, b, out } => {
                let (a, b, out) = (*a, *b, *out);
                let Some(gout) = self.take_out_grad(out) else {
                    return;
                };
                self.add_grad(a, &gout);
                self.add_grad(b, &gout);
            }
            Step::Scale { x, c, out } => {
                let (x, c, out) = (*x, *c, *out);
                let Some(gout) = self.take_out_grad(out) else {
                    return;
                };
                let gx: Vec<f64> = gout.iter().map(|g| c * g).collect();
                self.add_grad(x, &gx);
            }
            Step::Sum { x, out } => {
                let (x, out) = (*x, *out);
                let Some(gout) = self.take_out_grad(out) else {
                    return;
                };
                let g = gout[0];
                let gx = vec![g; self.nodes[x.0].value.len()];
                self.add_grad(x, &gx);
            }
            Step::WeightedSum { x, out, coeffs } => {
                let (x, out) = (*x, *out);
                let cv = coeffs.data().to_vec();
                let Some(gout) = self.take_out_grad(out) else {
                    return;
                };
                let g = gout[0];
                let gx: Vec<f64> = cv.iter().map(|c| g * c).collect();
                self.add_grad(x, &gx);
            }
        }
    }
}

/// Channel softmax on raw NCHW data, max-subtracted per pixel.
pub(crate) fn softmax_channels_data(x: &[f64], n: usize, c: usize, h: usize, w: usize) -> Vec<f64> {
    let hw = h * w;
    let mut out = vec![0.0; x.len()];
    for ni in 0..n {
        for px in 0..hw {
            let mut m = f64::NEG_INFINITY;
            for ch in 0..c {
                m = m.max(x[(ni * c + ch) * hw + px]);
            }
            let mut z = 0.0;
            for ch in 0..c {
                let e = math::exp(x[(ni * c + ch) * hw + px] - m);
                out[(ni * c + ch) * hw + px] = e;
                z += e;
            }
            for ch in 0..c {
                out[(ni * c + ch) * hw + px] /= z;
            }
        }
    }
    out
}

#[inline]
fn bce_one(x: f64, y: f64) -> f64 {
    let max0 = if x > 0.0 { x } else { 0.0 };
    max0 - x * y + math::ln_1p(math::exp(-math::abs(x)))
}

fn check_label(label: f64) -> Result<()> {
    if !label.is_finite() || !(0.0..=1.0).contains(&label) {
        return Err(invalid_err!("BCE label must be in [0,1], got {label}"));
    }
    Ok(())
}
