//! Deterministic synthetic benchmark with a controlled domain and category
//! shift.
//!
//! Source images contain the four known classes — background (1), disk (2),
//! square (3), triangle (4) — drawn in distinct colors. Target images come
//! from the same scene generator but pass through a photometric shift (hue
//! rotation, brightness offset, Gaussian noise) and, with probability
//! `unknown_prob`, additionally contain a cross, the unknown class (5) that
//! never appears in source. The cross color sits between the known colors so
//! a classifier trained on source has no clean evidence for any single known
//! class there.
//!
//! Every image is rendered from its own derived stream
//! (`seed → (split name, index)`), so generation is reproducible byte for
//! byte and can run in parallel by index. Pixels are quantized to the 8-bit
//! grid at the end of rendering, which makes the in-memory tensors exactly
//! representable in the on-disk 8-bit image formats.

use crate::label::LabelMap;
use crate::rng::{stream, Stream};
use crate::tensor::Tensor;
use crate::{invalid_err, Result};
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

/// Number of known classes (background + three shapes).
pub const KNOWN_CLASSES: usize = 4;
/// Label id of the target-only cross.
pub const UNKNOWN_CLASS: u8 = (KNOWN_CLASSES + 1) as u8;

/// Base colors (RGB in `[0,1]`) for background, disk, square, triangle, and
/// the unknown cross. The cross is deliberately close to the centroid of the
/// known colors.
pub const PALETTE: [[f64; 3]; 5] = [
    [0.16, 0.16, 0.20],
    [0.75, 0.22, 0.20],
    [0.22, 0.68, 0.25],
    [0.25, 0.35, 0.78],
    [0.46, 0.43, 0.44],
];

/// Which split an image belongs to; selects the stream name and whether the
/// target-side effects (photometric shift, crosses) apply.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Source,
    TargetTrain,
    TargetTest,
}

impl Split {
    pub fn name(&self) -> &'static str {
        match self {
            Split::Source => "source",
            Split::TargetTrain => "target_train",
            Split::TargetTest => "target_test",
        }
    }

    fn stream_name(&self) -> &'static str {
        match self {
            Split::Source => "source-img",
            Split::TargetTrain => "target-train-img",
            Split::TargetTest => "target-test-img",
        }
    }

    pub fn is_target(&self) -> bool {
        !matches!(self, Split::Source)
    }
}

/// Everything that determines a dataset, photometric shift included.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    /// Number of foreground shapes per image, drawn uniformly from this
    /// inclusive range.
    pub shapes_min: usize,
    pub shapes_max: usize,
    /// Probability that a target image contains a cross.
    pub unknown_prob: f64,
    /// Target-only hue rotation around the gray axis, in degrees.
    pub hue_degrees: f64,
    /// Target-only additive brightness offset.
    pub brightness: f64,
    /// Target-only Gaussian pixel noise (standard deviation).
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            height: 32,
            width: 32,
            shapes_min: 1,
            shapes_max: 3,
            unknown_prob: 0.7,
            hue_degrees: 30.0,
            brightness: 0.1,
            noise_sigma: 0.05,
            seed: 7,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.height < 16 || self.width < 16 {
            return Err(invalid_err!(
                "scene {}x{} too small for the shape geometry",
                self.height,
                self.width
            ));
        }
        if self.shapes_min > self.shapes_max {
            return Err(invalid_err!(
                "shapes_min {} > shapes_max {}",
                self.shapes_min,
                self.shapes_max
            ));
        }
        if !(0.0..=1.0).contains(&self.unknown_prob) {
            return Err(invalid_err!("unknown_prob outside [0,1]"));
        }
        if self.noise_sigma < 0.0 {
            return Err(invalid_err!("negative noise_sigma"));
        }
        Ok(())
    }
}

/// One rendered image with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    /// `[3, H, W]`, values on the 8-bit grid `k/255`.
    pub image: Tensor,
    pub labels: LabelMap,
    /// Identifier of the stream this image was rendered from (recorded in
    /// dataset manifests).
    pub stream_seed: u64,
}

impl LabeledImage {
    pub fn has_unknown(&self) -> bool {
        self.labels.contains(UNKNOWN_CLASS)
    }
}

pub fn generate_source(spec: &SceneSpec, n: usize) -> Result<Vec<LabeledImage>> {
    generate(spec, n, Split::Source)
}

pub fn generate_target(spec: &SceneSpec, n: usize, split: Split) -> Result<Vec<LabeledImage>> {
    if !split.is_target() {
        return Err(invalid_err!("target generation asked for the source split"));
    }
    generate(spec, n, split)
}

/// Renders a split. Source splits must end up with every known class present
/// in at least 5% of images; if a draw misses that (practically impossible
/// at sane sizes, but reachable with e.g. `shapes_max = 0`), the whole split
/// is re-rendered from the next attempt's streams, and after [`MAX_ATTEMPTS`]
/// the constraint is reported as unsatisfiable.
pub fn generate(spec: &SceneSpec, n: usize, split: Split) -> Result<Vec<LabeledImage>> {
    spec.validate()?;
    if n == 0 {
        return Err(invalid_err!("empty split"));
    }
    for attempt in 0..MAX_ATTEMPTS {
        let images: Vec<LabeledImage> = (0..n)
            .map(|i| {
                let idx = ((attempt as u64) << 32) | i as u64;
                let mut rng = stream(spec.seed, split.stream_name(), idx);
                let id = stream_id(spec.seed, split.stream_name(), idx);
                render_image(spec, &mut rng, split.is_target(), id)
            })
            .collect();
        if split.is_target() || coverage_ok(&images, n) {
            return Ok(images);
        }
    }
    Err(crate::Error::Unsatisfiable(format!(
        "a known class appeared in under 5% of source images in each of {MAX_ATTEMPTS} attempts; \
         the shape settings make the coverage rule unreachable"
    )))
}

const MAX_ATTEMPTS: usize = 64;

fn coverage_ok(images: &[LabeledImage], n: usize) -> bool {
    let need = n.div_ceil(20); // ceil(5% of n)
    (1..=KNOWN_CLASSES as u8).all(|class| {
        images.iter().filter(|im| im.labels.contains(class)).count() >= need
    })
}

fn stream_id(root: u64, name: &str, index: u64) -> u64 {
    // A compact fingerprint of the stream parameters for the manifest.
    let mut s = stream(root, name, index);
    s.next_u64()
}

/// Renders a single image from an explicit stream. `target_effects` enables
/// the cross and the photometric shift; with a degenerate spec (zero shift,
/// zero unknown probability, zero noise) the target path consumes the same
/// scene draws and produces the identical image, which pins down that the
/// two domains share one generator.
pub fn render_image(
    spec: &SceneSpec,
    rng: &mut Stream,
    target_effects: bool,
    stream_seed: u64,
) -> LabeledImage {
    let (h, w) = (spec.height, spec.width);
    let mut img = vec![0.0f64; 3 * h * w];
    let mut labels = LabelMap::new(h, w);

    // Background with a small per-image tint.
    let bg = jitter_color(PALETTE[0], rng, 0.03);
    for px in 0..h * w {
        for (c, &v) in bg.iter().enumerate() {
            img[c * h * w + px] = v;
        }
        labels.pixels_mut()[px] = 1;
    }

    // Foreground shapes, later ones drawn over earlier ones.
    let count = rng.range_inclusive(spec.shapes_min, spec.shapes_max);
    for _ in 0..count {
        let kind = rng.below(3); // 0 disk, 1 square, 2 triangle
        let color = jitter_color(PALETTE[kind + 1], rng, 0.04);
        match kind {
            0 => draw_disk(&mut img, &mut labels, rng, color),
            1 => draw_square(&mut img, &mut labels, rng, color),
            _ => draw_triangle(&mut img, &mut labels, rng, color),
        }
    }

    if target_effects {
        // The unknown cross, drawn on top so its ground truth is unoccluded.
        if rng.uniform() < spec.unknown_prob {
            let color = jitter_color(PALETTE[4], rng, 0.04);
            draw_cross(&mut img, &mut labels, rng, color);
        }
        if spec.hue_degrees != 0.0 {
            rotate_hue(&mut img, h * w, spec.hue_degrees);
        }
        if spec.brightness != 0.0 {
            for v in img.iter_mut() {
                *v += spec.brightness;
            }
        }
        if spec.noise_sigma > 0.0 {
            for v in img.iter_mut() {
                *v += spec.noise_sigma * rng.normal();
            }
        }
    }

    // Clamp and snap to the 8-bit grid so file round-trips are lossless.
    for v in img.iter_mut() {
        let c = v.clamp(0.0, 1.0);
        *v = crate::math::round(c * 255.0) / 255.0;
    }

    LabeledImage {
        image: Tensor::from_vec(&[3, h, w], img).unwrap(),
        labels,
        stream_seed,
    }
}

fn jitter_color(base: [f64; 3], rng: &mut Stream, amount: f64) -> [f64; 3] {
    [
        base[0] + rng.uniform_in(-amount, amount),
        base[1] + rng.uniform_in(-amount, amount),
        base[2] + rng.uniform_in(-amount, amount),
    ]
}

fn paint(img: &mut [f64], labels: &mut LabelMap, i: usize, j: usize, color: [f64; 3], class: u8) {
    let (h, w) = (labels.height(), labels.width());
    let px = i * w + j;
    for (c, &v) in color.iter().enumerate() {
        img[c * h * w + px] = v;
    }
    labels.pixels_mut()[px] = class;
}

fn draw_disk(img: &mut [f64], labels: &mut LabelMap, rng: &mut Stream, color: [f64; 3]) {
    let (h, w) = (labels.height(), labels.width());
    let r = rng.range_inclusive(3, 6);
    let ci = rng.range_inclusive(r, h - 1 - r);
    let cj = rng.range_inclusive(r, w - 1 - r);
    for i in ci - r..=ci + r {
        for j in cj - r..=cj + r {
            let (di, dj) = (i as i64 - ci as i64, j as i64 - cj as i64);
            if di * di + dj * dj <= (r * r) as i64 {
                paint(img, labels, i, j, color, 2);
            }
        }
    }
}

fn draw_square(img: &mut [f64], labels: &mut LabelMap, rng: &mut Stream, color: [f64; 3]) {
    let (h, w) = (labels.height(), labels.width());
    let s = rng.range_inclusive(2, 5);
    let ci = rng.range_inclusive(s, h - 1 - s);
    let cj = rng.range_inclusive(s, w - 1 - s);
    for i in ci - s..=ci + s {
        for j in cj - s..=cj + s {
            paint(img, labels, i, j, color, 3);
        }
    }
}

fn draw_triangle(img: &mut [f64], labels: &mut LabelMap, rng: &mut Stream, color: [f64; 3]) {
    let (h, w) = (labels.height(), labels.width());
    // Upward isoceles triangle: row r of `size` spans half-width r. The
    // cap only bites below 18px across; at the default size it is inert.
    let hi = 8.min((w - 1) / 2).min(h - 1);
    let size = rng.range_inclusive(4, hi);
    let top = rng.range_inclusive(0, h - 1 - size);
    let cj = rng.range_inclusive(size, w - 1 - size);
    for r in 0..=size {
        for dj in 0..=r {
            paint(img, labels, top + r, cj - dj, color, 4);
            paint(img, labels, top + r, cj + dj, color, 4);
        }
    }
}

fn draw_cross(img: &mut [f64], labels: &mut LabelMap, rng: &mut Stream, color: [f64; 3]) {
    let (h, w) = (labels.height(), labels.width());
    let arm = rng.range_inclusive(4, 7);
    let thick = rng.range_inclusive(1, 2);
    let ci = rng.range_inclusive(arm, h - 1 - arm);
    let cj = rng.range_inclusive(arm, w - 1 - arm);
    for i in ci - arm..=ci + arm {
        for j in cj - arm..=cj + arm {
            let (di, dj) = (i.abs_diff(ci), j.abs_diff(cj));
            if (di <= thick && dj <= arm) || (dj <= thick && di <= arm) {
                paint(img, labels, i, j, color, UNKNOWN_CLASS);
            }
        }
    }
}

/// Rotates RGB around the gray axis by `degrees`. The gray axis is an
/// eigenvector of the rotation, so per-pixel mean intensity is preserved
/// exactly and the brightness offset stays the only mean shift.
fn rotate_hue(img: &mut [f64], hw: usize, degrees: f64) {
    let th = degrees * core::f64::consts::PI / 180.0;
    let (c, s) = (crate::math::cos(th), crate::math::sin(th));
    let a = c + (1.0 - c) / 3.0;
    let b1 = (1.0 - c) / 3.0 - s / crate::math::sqrt(3.0);
    let b2 = (1.0 - c) / 3.0 + s / crate::math::sqrt(3.0);
    // Rows of the rotation matrix (circulant in r, g, b).
    let m = [[a, b1, b2], [b2, a, b1], [b1, b2, a]];
    for px in 0..hw {
        let r = img[px];
        let g = img[hw + px];
        let b = img[2 * hw + px];
        img[px] = m[0][0] * r + m[0][1] * g + m[0][2] * b;
        img[hw + px] = m[1][0] * r + m[1][1] * g + m[1][2] * b;
        img[2 * hw + px] = m[2][0] * r + m[2][1] * g + m[2][2] * b;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic() {
        let spec = SceneSpec::default();
        let a = generate_source(&spec, 8).unwrap();
        let b = generate_source(&spec, 8).unwrap();
        assert_eq!(a, b);
        let mut other = spec.clone();
        other.seed = 8;
        let c = generate_source(&other, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn source_never_contains_the_unknown_class() {
        let spec = SceneSpec::default();
        for im in generate_source(&spec, 40).unwrap() {
            assert!(!im.has_unknown());
            assert!(im.labels.pixels().iter().all(|&l| (1..=4).contains(&l)));
        }
    }

    #[test]
    fn every_known_class_covers_five_percent_of_source() {
        let spec = SceneSpec::default();
        let images = generate_source(&spec, 100).unwrap();
        for class in 1..=KNOWN_CLASSES as u8 {
            let count = images.iter().filter(|im| im.labels.contains(class)).count();
            assert!(count >= 5, "class {class} in only {count}/100 images");
        }
    }

    #[test]
    fn impossible_coverage_is_reported() {
        let spec = SceneSpec {
            shapes_min: 0,
            shapes_max: 0,
            ..SceneSpec::default()
        };
        assert!(matches!(
            generate_source(&spec, 20),
            Err(crate::Error::Unsatisfiable(_))
        ));
    }

    #[test]
    fn unknown_rate_tracks_the_configured_probability() {
        let spec = SceneSpec::default();
        let images = generate_target(&spec, 200, Split::TargetTrain).unwrap();
        let with = images.iter().filter(|im| im.has_unknown()).count();
        assert!((120..=160).contains(&with), "{with}/200 images with a cross");
        // Cross pixels carry the unknown label and nothing else does.
        for im in &images {
            assert!(im.labels.pixels().iter().all(|&l| (1..=5).contains(&l)));
        }
    }

    #[test]
    fn degenerate_target_spec_reuses_the_source_path() {
        let spec = SceneSpec {
            unknown_prob: 0.0,
            hue_degrees: 0.0,
            brightness: 0.0,
            noise_sigma: 0.0,
            ..SceneSpec::default()
        };
        let mut r1 = stream(spec.seed, "probe", 0);
        let mut r2 = stream(spec.seed, "probe", 0);
        let src = render_image(&spec, &mut r1, false, 0);
        let tgt = render_image(&spec, &mut r2, true, 0);
        assert_eq!(src, tgt);
    }

    #[test]
    fn brightness_offset_moves_the_mean_intensity() {
        let spec = SceneSpec {
            unknown_prob: 0.0,
            hue_degrees: 0.0,
            noise_sigma: 0.0,
            brightness: 0.1,
            ..SceneSpec::default()
        };
        let mean = |ims: &[LabeledImage]| {
            let mut acc = 0.0;
            let mut n = 0usize;
            for im in ims {
                acc += im.image.data().iter().sum::<f64>();
                n += im.image.numel();
            }
            acc / n as f64
        };
        let src = mean(&generate_source(&spec, 200).unwrap());
        let tgt = mean(&generate_target(&spec, 200, Split::TargetTrain).unwrap());
        assert!(
            ((tgt - src) - 0.1).abs() < 0.01,
            "mean shift {} vs configured 0.1",
            tgt - src
        );
    }

    #[test]
    fn hue_rotation_alone_preserves_mean_intensity() {
        let spec = SceneSpec {
            unknown_prob: 0.0,
            hue_degrees: 25.0,
            brightness: 0.0,
            noise_sigma: 0.0,
            ..SceneSpec::default()
        };
        let mean = |ims: &[LabeledImage]| {
            let mut acc = 0.0;
            let mut n = 0usize;
            for im in ims {
                acc += im.image.data().iter().sum::<f64>();
                n += im.image.numel();
            }
            acc / n as f64
        };
        let src = mean(&generate_source(&spec, 100).unwrap());
        let tgt = mean(&generate_target(&spec, 100, Split::TargetTrain).unwrap());
        assert!((tgt - src).abs() < 0.01, "hue-only shift moved mean by {}", tgt - src);
    }

    #[test]
    fn noise_widens_the_intensity_histogram_gap_monotonically() {
        fn hist(images: &[LabeledImage]) -> Vec<f64> {
            let mut bins = vec![0.0f64; 32];
            let mut total = 0usize;
            for im in images {
                for &v in im.image.data() {
                    let b = ((v * 32.0) as usize).min(31);
                    bins[b] += 1.0;
                    total += 1;
                }
            }
            bins.iter_mut().for_each(|b| *b /= total as f64);
            bins
        }
        let src_hist = hist(&generate_source(&SceneSpec::default(), 100).unwrap());
        let mut dists = Vec::new();
        for sigma in [0.0, 0.05, 0.10] {
            let spec = SceneSpec {
                noise_sigma: sigma,
                hue_degrees: 0.0,
                brightness: 0.0,
                unknown_prob: 0.0,
                ..SceneSpec::default()
            };
            let t = hist(&generate_target(&spec, 100, Split::TargetTrain).unwrap());
            let d: f64 = src_hist
                .iter()
                .zip(&t)
                .map(|(a, b)| crate::math::abs(a - b))
                .sum::<f64>()
                / 32.0;
            dists.push(d);
        }
        assert!(
            dists[0] < dists[1] && dists[1] < dists[2],
            "distances not increasing: {dists:?}"
        );
    }

    #[test]
    fn pixels_sit_exactly_on_the_8_bit_grid() {
        let spec = SceneSpec::default();
        for im in generate_target(&spec, 4, Split::TargetTest).unwrap() {
            for &v in im.image.data() {
                let q = crate::math::round(v * 255.0) / 255.0;
                assert_eq!(v, q);
                assert!((0.0..=1.0).contains(&v));
            }
        }
    }
}
