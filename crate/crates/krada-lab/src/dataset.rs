//! On-disk layout for a generated two-domain dataset.
//!
//! ```text
//! <root>/manifest.txt
//! <root>/source/images/00000.ppm        source/labels/00000.pgm
//! <root>/target_train/images/...       target_train/labels/...
//! <root>/target_test/images/...        target_test/labels/...
//! ```
//!
//! The manifest records the class count, the grid, and one line per image
//! (split, index, whether it contains the unknown class, and the per-image
//! stream seed). Loading cross-checks every file against the manifest, so a
//! truncated or edited dataset fails loudly instead of skewing results.

use crate::pnm;
use crate::{data_err, Result};
use krada_core::synth::{generate, LabeledImage, SceneSpec, Split};
use std::fs;
use std::path::{Path, PathBuf};

pub const MANIFEST: &str = "manifest.txt";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub split: Split,
    pub index: usize,
    pub has_unknown: bool,
    pub stream_seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub k: usize,
    pub height: usize,
    pub width: usize,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn count(&self, split: Split) -> usize {
        self.entries.iter().filter(|e| e.split == split).count()
    }

    pub fn render(&self) -> String {
        let mut out = String::from("# synthetic two-domain segmentation dataset\n");
        out.push_str(&format!("k {}\n", self.k));
        out.push_str(&format!("height {}\n", self.height));
        out.push_str(&format!("width {}\n", self.width));
        out.push_str("# item <split> <index> <has_unknown> <stream_seed>\n");
        for e in &self.entries {
            out.push_str(&format!(
                "item {} {} {} {}\n",
                e.split.name(),
                e.index,
                u8::from(e.has_unknown),
                e.stream_seed
            ));
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut k = None;
        let mut height = None;
        let mut width = None;
        let mut entries = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            let bad = || data_err(format!("manifest line {}: {raw:?}", lineno + 1));
            match fields.as_slice() {
                ["k", v] => k = Some(v.parse().map_err(|_| bad())?),
                ["height", v] => height = Some(v.parse().map_err(|_| bad())?),
                ["width", v] => width = Some(v.parse().map_err(|_| bad())?),
                ["item", split, index, unknown, seed] => entries.push(ManifestEntry {
                    split: split_by_name(split).ok_or_else(bad)?,
                    index: index.parse().map_err(|_| bad())?,
                    has_unknown: match *unknown {
                        "0" => false,
                        "1" => true,
                        _ => return Err(bad()),
                    },
                    stream_seed: seed.parse().map_err(|_| bad())?,
                }),
                _ => return Err(bad()),
            }
        }
        Ok(Manifest {
            k: k.ok_or_else(|| data_err("manifest missing k"))?,
            height: height.ok_or_else(|| data_err("manifest missing height"))?,
            width: width.ok_or_else(|| data_err("manifest missing width"))?,
            entries,
        })
    }
}

fn split_by_name(name: &str) -> Option<Split> {
    [Split::Source, Split::TargetTrain, Split::TargetTest]
        .into_iter()
        .find(|s| s.name() == name)
}

fn image_path(root: &Path, split: Split, index: usize) -> PathBuf {
    root.join(split.name()).join("images").join(format!("{index:05}.ppm"))
}

fn label_path(root: &Path, split: Split, index: usize) -> PathBuf {
    root.join(split.name()).join("labels").join(format!("{index:05}.pgm"))
}

/// Generates all three splits from `spec` and writes them under `root`.
/// Returns the manifest it wrote.
pub fn write_dataset(
    root: &Path,
    spec: &SceneSpec,
    source_count: usize,
    target_train_count: usize,
    target_test_count: usize,
) -> Result<Manifest> {
    let mut entries = Vec::new();
    for (split, count) in [
        (Split::Source, source_count),
        (Split::TargetTrain, target_train_count),
        (Split::TargetTest, target_test_count),
    ] {
        let images = generate(spec, count, split)?;
        fs::create_dir_all(root.join(split.name()).join("images"))?;
        fs::create_dir_all(root.join(split.name()).join("labels"))?;
        for (index, im) in images.iter().enumerate() {
            fs::write(image_path(root, split, index), pnm::encode_ppm(&im.image)?)?;
            fs::write(label_path(root, split, index), pnm::encode_pgm(&im.labels))?;
            entries.push(ManifestEntry {
                split,
                index,
                has_unknown: im.has_unknown(),
                stream_seed: im.stream_seed,
            });
        }
    }
    let manifest = Manifest {
        k: krada_core::synth::KNOWN_CLASSES,
        height: spec.height,
        width: spec.width,
        entries,
    };
    fs::write(root.join(MANIFEST), manifest.render())?;
    Ok(manifest)
}

pub fn read_manifest(root: &Path) -> Result<Manifest> {
    let path = root.join(MANIFEST);
    let text = fs::read_to_string(&path)
        .map_err(|e| data_err(format!("{}: {e}", path.display())))?;
    Manifest::parse(&text)
}

/// Loads one split, validating every image and label map against the
/// manifest: grid size, label range (source must not contain the unknown
/// class), and the recorded `has_unknown` flag.
pub fn load_split(root: &Path, manifest: &Manifest, split: Split) -> Result<Vec<LabeledImage>> {
    let mut entries: Vec<&ManifestEntry> =
        manifest.entries.iter().filter(|e| e.split == split).collect();
    entries.sort_by_key(|e| e.index);
    for (want, e) in entries.iter().enumerate() {
        if e.index != want {
            return Err(data_err(format!(
                "{} indices are not contiguous (missing {want})",
                split.name()
            )));
        }
    }

    let unknown = (manifest.k + 1) as u8;
    let mut images = Vec::with_capacity(entries.len());
    for e in entries {
        let ipath = image_path(root, split, e.index);
        let lpath = label_path(root, split, e.index);
        let image = pnm::decode_ppm(
            &fs::read(&ipath).map_err(|err| data_err(format!("{}: {err}", ipath.display())))?,
        )?;
        let labels = pnm::decode_pgm(
            &fs::read(&lpath).map_err(|err| data_err(format!("{}: {err}", lpath.display())))?,
        )?;

        let bad = |msg: &str| data_err(format!("{}: {msg}", ipath.display()));
        if image.shape() != [3, manifest.height, manifest.width] {
            return Err(bad("image does not match the manifest grid"));
        }
        if labels.height() != manifest.height || labels.width() != manifest.width {
            return Err(bad("labels do not match the manifest grid"));
        }
        let max = labels.max_class();
        let limit = if split == Split::Source { manifest.k as u8 } else { unknown };
        if max > limit {
            return Err(bad(&format!("label {max} out of range for {}", split.name())));
        }
        if labels.contains(unknown) != e.has_unknown {
            return Err(bad("has_unknown flag disagrees with the labels"));
        }

        images.push(LabeledImage {
            image,
            labels,
            stream_seed: e.stream_seed,
        });
    }
    Ok(images)
}
