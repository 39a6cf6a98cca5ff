//! Unknown-pixel detection.
//!
//! A pixel that belongs to none of the known classes tends to pull the
//! known-class head toward an uninformative, near-uniform output. Each pixel
//! is therefore scored by a goodness-of-fit statistic between the uniform
//! distribution and the head's probability vector; pixels scoring *below* a
//! threshold δ (strictly — ties stay known) are pseudo-labeled as unknown.
//! The complement of the unknown region is the known-region mask that gates
//! the adversarial alignment loss.

use crate::tape::LOG_CLAMP;
use crate::tensor::Tensor;
use crate::{invalid_err, math, shape_err, Error, Result};
use alloc::vec;
use alloc::vec::Vec;

/// Which statistic scores a pixel's distance from the uniform distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FitMetric {
    /// KL divergence from uniform to the prediction.
    Kl,
    /// Kolmogorov metric: largest gap between the two CDFs over the
    /// canonical class order.
    Kolmogorov,
}

impl FitMetric {
    pub const ALL: [FitMetric; 2] = [FitMetric::Kl, FitMetric::Kolmogorov];

    pub fn eval(&self, p: &[f64]) -> Result<f64> {
        match self {
            FitMetric::Kl => kl_to_uniform(p),
            FitMetric::Kolmogorov => kolmogorov_to_uniform(p),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            FitMetric::Kl => "kl",
            FitMetric::Kolmogorov => "kolmogorov",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        FitMetric::ALL
            .iter()
            .copied()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| invalid_err!("unknown fit metric {s:?}"))
    }
}

fn check_probs(p: &[f64]) -> Result<()> {
    if p.is_empty() {
        return Err(invalid_err!("empty probability vector"));
    }
    if p.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(invalid_err!("probability vector has negative entries"));
    }
    Ok(())
}

/// `D_KL(u ‖ p)` for the uniform distribution `u`:
/// `Σ_c (1/K)·ln((1/K) / max(p_c, 1e-12))`. Zero iff `p` is uniform;
/// probabilities are clamped so one-hot vectors stay finite.
pub fn kl_to_uniform(p: &[f64]) -> Result<f64> {
    check_probs(p)?;
    let k = p.len() as f64;
    let u = 1.0 / k;
    let mut acc = 0.0;
    for &pc in p {
        let pc = if pc > LOG_CLAMP { pc } else { LOG_CLAMP };
        acc += u * math::ln(u / pc);
    }
    Ok(acc)
}

/// Largest absolute gap between the prefix CDFs of `p` and the uniform
/// distribution, classes taken in index order. Ranges over `[0, 1 - 1/K]`.
pub fn kolmogorov_to_uniform(p: &[f64]) -> Result<f64> {
    check_probs(p)?;
    let k = p.len() as f64;
    let u = 1.0 / k;
    let mut cdf_p = 0.0;
    let mut cdf_u = 0.0;
    let mut worst = 0.0;
    for &pc in p {
        cdf_p += pc;
        cdf_u += u;
        let gap = math::abs(cdf_p - cdf_u);
        if gap > worst {
            worst = gap;
        }
    }
    Ok(worst)
}

/// Shannon entropy `−Σ p·ln(max(p, 1e-12))`, a diagnostic companion to the
/// two metrics above (maximal for uniform rather than zero).
pub fn entropy(p: &[f64]) -> Result<f64> {
    check_probs(p)?;
    let mut acc = 0.0;
    for &pc in p {
        if pc > 0.0 {
            let clamped = if pc > LOG_CLAMP { pc } else { LOG_CLAMP };
            acc -= pc * math::ln(clamped);
        }
    }
    Ok(acc)
}

/// Per-pixel probability vectors over the K known classes, stored
/// pixel-major so metric evaluation scans contiguous memory.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMap {
    k: usize,
    h: usize,
    w: usize,
    /// `data[(i·W + j)·K + c]`
    data: Vec<f64>,
}

impl ProbMap {
    /// Channel softmax of a `[K, H, W]` logit tensor.
    pub fn from_logits(logits: &Tensor) -> Result<Self> {
        let s = logits.shape();
        if s.len() != 3 {
            return Err(shape_err!("per-image logits must be [K,H,W], got {s:?}"));
        }
        let (k, h, w) = (s[0], s[1], s[2]);
        let probs = crate::tape::softmax_channels_data(logits.data(), 1, k, h, w);
        let hw = h * w;
        let mut data = vec![0.0; probs.len()];
        for px in 0..hw {
            for c in 0..k {
                data[px * k + c] = probs[c * hw + px];
            }
        }
        Ok(ProbMap { k, h, w, data })
    }

    /// Wraps pre-computed probabilities given pixel-major `[H·W·K]` data.
    pub fn from_probs(k: usize, h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != k * h * w {
            return Err(shape_err!(
                "{}x{}x{} probability map needs {} values",
                k,
                h,
                w,
                k * h * w
            ));
        }
        check_probs(&data)?;
        Ok(ProbMap { k, h, w, data })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    #[inline]
    pub fn pixel(&self, i: usize, j: usize) -> &[f64] {
        let base = (i * self.w + j) * self.k;
        &self.data[base..base + self.k]
    }
}

/// Sparse one-hot pseudo-labels: per pixel either nothing or the unknown
/// class `K+1`. Known classes are never pseudo-labeled, so the map is stored
/// as an unknown-region bitmap plus `K`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PseudoLabelMap {
    k: usize,
    h: usize,
    w: usize,
    unknown: Vec<bool>,
}

impl PseudoLabelMap {
    /// The all-zero map every target image starts from: no pixel is labeled,
    /// so the target segmentation term sees nothing until the first refresh.
    pub fn empty(k: usize, h: usize, w: usize) -> Self {
        PseudoLabelMap {
            k,
            h,
            w,
            unknown: vec![false; h * w],
        }
    }

    /// Rebuilds a map from a stored unknown-pixel bitmap.
    pub fn from_flags(k: usize, h: usize, w: usize, unknown: Vec<bool>) -> Result<Self> {
        if unknown.len() != h * w {
            return Err(shape_err!(
                "{} flags for a {h}x{w} grid",
                unknown.len()
            ));
        }
        Ok(PseudoLabelMap { k, h, w, unknown })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    #[inline]
    pub fn is_unknown(&self, i: usize, j: usize) -> bool {
        self.unknown[i * self.w + j]
    }

    pub fn unknown_pixels(&self) -> &[bool] {
        &self.unknown
    }

    pub fn unknown_count(&self) -> usize {
        self.unknown.iter().filter(|&&u| u).count()
    }

    pub fn unknown_fraction(&self) -> f64 {
        self.unknown_count() as f64 / (self.h * self.w) as f64
    }

    /// Dense `[K+1, H, W]` one-hot target tensor; at most channel `K+1`
    /// (index `k`) is lit per pixel.
    pub fn to_targets(&self) -> Tensor {
        let hw = self.h * self.w;
        let mut data = vec![0.0; (self.k + 1) * hw];
        for (px, &u) in self.unknown.iter().enumerate() {
            if u {
                data[self.k * hw + px] = 1.0;
            }
        }
        Tensor::from_vec(&[self.k + 1, self.h, self.w], data).unwrap()
    }
}

/// Marks as unknown every pixel whose statistic is strictly below `delta`;
/// the previous content of any earlier map plays no role.
pub fn generate_pseudo_labels(
    probs: &ProbMap,
    delta: f64,
    metric: FitMetric,
) -> Result<PseudoLabelMap> {
    if !delta.is_finite() {
        return Err(invalid_err!("non-finite threshold"));
    }
    let mut unknown = vec![false; probs.h * probs.w];
    for i in 0..probs.h {
        for j in 0..probs.w {
            let d = metric.eval(probs.pixel(i, j))?;
            unknown[i * probs.w + j] = d < delta;
        }
    }
    Ok(PseudoLabelMap {
        k: probs.k,
        h: probs.h,
        w: probs.w,
        unknown,
    })
}

/// 0/1 mask selecting the pixels *not* pseudo-labeled unknown.
#[derive(Debug, Clone, PartialEq)]
pub struct KnownRegionMask {
    h: usize,
    w: usize,
    data: Vec<f64>,
}

impl KnownRegionMask {
    pub fn all_ones(h: usize, w: usize) -> Self {
        KnownRegionMask {
            h,
            w,
            data: vec![1.0; h * w],
        }
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn values(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.w + j]
    }
}

/// Complement of the unknown channel: exactly `1 − [pixel is unknown]`.
pub fn known_region_mask(labels: &PseudoLabelMap) -> KnownRegionMask {
    KnownRegionMask {
        h: labels.h,
        w: labels.w,
        data: labels
            .unknown
            .iter()
            .map(|&u| if u { 0.0 } else { 1.0 })
            .collect(),
    }
}

/// Stacks per-image masks into the `[N, 1, H, W]` tensor the losses expect.
pub fn mask_batch(masks: &[&KnownRegionMask]) -> Result<Tensor> {
    if masks.is_empty() {
        return Err(invalid_err!("empty mask batch"));
    }
    let (h, w) = (masks[0].h, masks[0].w);
    let mut data = Vec::with_capacity(masks.len() * h * w);
    for m in masks {
        if m.h != h || m.w != w {
            return Err(shape_err!("masks of mixed sizes in one batch"));
        }
        data.extend_from_slice(&m.data);
    }
    Tensor::from_vec(&[masks.len(), 1, h, w], data)
}

/// Threshold candidates for δ: the base value is the mean over images of the
/// per-image *minimum* statistic (so at least the most uniform pixel of an
/// average image qualifies), then `steps` values walk upward in increments
/// of `step_size`. Returns `[δ₀, δ₀+s, …, δ₀+(steps−1)·s]`.
pub fn calibrate_delta(
    maps: &[ProbMap],
    metric: FitMetric,
    steps: usize,
    step_size: f64,
) -> Result<Vec<f64>> {
    if maps.is_empty() {
        return Err(invalid_err!("no probability maps to calibrate from"));
    }
    if steps == 0 {
        return Err(invalid_err!("zero calibration steps"));
    }
    if !(step_size.is_finite() && step_size > 0.0) {
        return Err(invalid_err!("step size must be positive"));
    }
    let mut mean_min = 0.0;
    for map in maps {
        if map.h * map.w == 0 {
            return Err(invalid_err!("empty probability map"));
        }
        let mut min = f64::INFINITY;
        for i in 0..map.h {
            for j in 0..map.w {
                let d = metric.eval(map.pixel(i, j))?;
                if d < min {
                    min = d;
                }
            }
        }
        mean_min += min;
    }
    mean_min /= maps.len() as f64;
    if !mean_min.is_finite() {
        return Err(Error::NonFinite("calibration base threshold".into()));
    }
    Ok((0..steps)
        .map(|i| mean_min + i as f64 * step_size)
        .collect())
}
