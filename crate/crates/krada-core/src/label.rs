//! Integer per-pixel label maps.
//!
//! Class ids are `1..=K+1` (`K+1` is the unknown class); `0` is the void
//! label, which marks a pixel as unlabeled everywhere in the crate: one-hot
//! conversion leaves its row all-zero and metric accumulation skips it.

use crate::tensor::Tensor;
use crate::{invalid_err, shape_err, Result};
use alloc::vec;
use alloc::vec::Vec;

pub const VOID: u8 = 0;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    h: usize,
    w: usize,
    data: Vec<u8>,
}

impl LabelMap {
    /// All-void map.
    pub fn new(h: usize, w: usize) -> Self {
        LabelMap {
            h,
            w,
            data: vec![VOID; h * w],
        }
    }

    pub fn from_vec(h: usize, w: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != h * w {
            return Err(shape_err!("{}x{} map needs {} labels", h, w, h * w));
        }
        Ok(LabelMap { h, w, data })
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn pixels(&self) -> &[u8] {
        &self.data
    }

    pub fn pixels_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> u8 {
        self.data[i * self.w + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: u8) {
        self.data[i * self.w + j] = v;
    }

    pub fn contains(&self, class: u8) -> bool {
        self.data.iter().any(|&v| v == class)
    }

    pub fn count(&self, class: u8) -> usize {
        self.data.iter().filter(|&&v| v == class).count()
    }

    /// Highest class id present (0 if the map is all void).
    pub fn max_class(&self) -> u8 {
        self.data.iter().copied().max().unwrap_or(VOID)
    }

    /// One-hot `[channels, H, W]` tensor; class `c` lights channel `c-1`.
    /// Void pixels stay all-zero; labels beyond `channels` are an error.
    pub fn to_onehot(&self, channels: usize) -> Result<Tensor> {
        let hw = self.h * self.w;
        let mut data = vec![0.0; channels * hw];
        for (px, &lab) in self.data.iter().enumerate() {
            if lab == VOID {
                continue;
            }
            let c = lab as usize;
            if c > channels {
                return Err(invalid_err!(
                    "label {c} exceeds the {channels}-channel target"
                ));
            }
            data[(c - 1) * hw + px] = 1.0;
        }
        Tensor::from_vec(&[channels, self.h, self.w], data)
    }
}

/// Stacks per-image one-hot targets into an `[N, channels, H, W]` batch.
pub fn onehot_batch(maps: &[&LabelMap], channels: usize) -> Result<Tensor> {
    if maps.is_empty() {
        return Err(invalid_err!("empty label batch"));
    }
    let (h, w) = (maps[0].height(), maps[0].width());
    let hw = h * w;
    let mut data = Vec::with_capacity(maps.len() * channels * hw);
    for m in maps {
        if m.height() != h || m.width() != w {
            return Err(shape_err!("label maps of mixed sizes in one batch"));
        }
        data.extend_from_slice(m.to_onehot(channels)?.data());
    }
    Tensor::from_vec(&[maps.len(), channels, h, w], data)
}
