//! Little-endian binary checkpoints.
//!
//! Three independent files, each with its own magic:
//!
//! * `model.ckpt`   — the segmentation network's eight layer tensors.
//! * `disc.ckpt`    — the discriminator's four layer tensors (absent for
//!                    runs that never train one).
//! * `state.ckpt`   — the iteration counter plus the per-image pseudo-label
//!                    bitmaps and their versions, enough to resume a run so
//!                    it replays the remaining iterations exactly.
//!
//! Layer tensors are written as `ndim`, the dimensions, then raw `f64` bits,
//! in the fixed layer order the networks expose. Writing is deterministic:
//! the same parameters produce the same bytes.

use crate::{data_err, Result};
use krada_core::nn::{Discriminator, SegModel};
use krada_core::openset::PseudoLabelMap;
use krada_core::tensor::Tensor;
use krada_core::trainer::PseudoLabelStore;
use std::fs;
use std::path::Path;

const MODEL_MAGIC: &[u8; 8] = b"KRADACK1";
const DISC_MAGIC: &[u8; 8] = b"KRADADC1";
const STATE_MAGIC: &[u8; 8] = b"KRADAST1";

pub const MODEL_FILE: &str = "model.ckpt";
pub const DISC_FILE: &str = "disc.ckpt";
pub const STATE_FILE: &str = "state.ckpt";

// --- primitives -------------------------------------------------------------

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8], magic: &[u8; 8], what: &'static str) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..8] != magic {
            return Err(data_err(format!("{what}: wrong or missing magic")));
        }
        Ok(Reader { bytes, pos: 8, what })
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(data_err(format!("{}: truncated", self.what)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(8 * n)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn finish(self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(data_err(format!("{}: trailing bytes", self.what)));
        }
        Ok(())
    }
}

fn push_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn push_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn push_tensor(out: &mut Vec<u8>, t: &Tensor) {
    push_u32(out, t.shape().len() as u32);
    for &d in t.shape() {
        push_u32(out, d as u32);
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn read_tensor(r: &mut Reader) -> Result<Tensor> {
    let ndim = r.u32()? as usize;
    if ndim == 0 || ndim > 4 {
        return Err(data_err(format!("{}: tensor with {ndim} dims", r.what)));
    }
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        shape.push(r.u32()? as usize);
    }
    let numel: usize = shape.iter().product();
    let data = r.f64s(numel)?;
    Tensor::from_vec(&shape, data).map_err(Into::into)
}

// --- model ------------------------------------------------------------------

pub fn encode_model(model: &SegModel) -> Vec<u8> {
    let mut out = MODEL_MAGIC.to_vec();
    push_u32(&mut out, model.k() as u32);
    let layers = model.layers();
    push_u32(&mut out, layers.len() as u32);
    for (_, t) in layers {
        push_tensor(&mut out, t);
    }
    out
}

pub fn decode_model(bytes: &[u8]) -> Result<SegModel> {
    let mut r = Reader::new(bytes, MODEL_MAGIC, "model checkpoint")?;
    let k = r.u32()? as usize;
    let count = r.u32()? as usize;
    if count != 8 {
        return Err(data_err(format!("model checkpoint: {count} layers, want 8")));
    }
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        tensors.push(read_tensor(&mut r)?);
    }
    r.finish()?;
    let model = SegModel::from_layer_tensors(tensors)?;
    if model.k() != k {
        return Err(data_err(format!(
            "model checkpoint: header says K={k}, layers imply K={}",
            model.k()
        )));
    }
    Ok(model)
}

pub fn save_model(path: &Path, model: &SegModel) -> Result<()> {
    fs::write(path, encode_model(model)).map_err(Into::into)
}

pub fn load_model(path: &Path) -> Result<SegModel> {
    decode_model(&fs::read(path).map_err(|e| data_err(format!("{}: {e}", path.display())))?)
}

// --- discriminator ----------------------------------------------------------

pub fn encode_disc(disc: &Discriminator) -> Vec<u8> {
    let mut out = DISC_MAGIC.to_vec();
    let layers = disc.layers();
    push_u32(&mut out, layers.len() as u32);
    for (_, t) in layers {
        push_tensor(&mut out, t);
    }
    out
}

pub fn decode_disc(bytes: &[u8]) -> Result<Discriminator> {
    let mut r = Reader::new(bytes, DISC_MAGIC, "discriminator checkpoint")?;
    let count = r.u32()? as usize;
    if count != 4 {
        return Err(data_err(format!(
            "discriminator checkpoint: {count} layers, want 4"
        )));
    }
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        tensors.push(read_tensor(&mut r)?);
    }
    r.finish()?;
    Discriminator::from_layer_tensors(tensors).map_err(Into::into)
}

pub fn save_disc(path: &Path, disc: &Discriminator) -> Result<()> {
    fs::write(path, encode_disc(disc)).map_err(Into::into)
}

pub fn load_disc(path: &Path) -> Result<Discriminator> {
    decode_disc(&fs::read(path).map_err(|e| data_err(format!("{}: {e}", path.display())))?)
}

// --- trainer state ----------------------------------------------------------

pub fn encode_state(iteration: usize, store: &PseudoLabelStore, k: usize, h: usize, w: usize) -> Vec<u8> {
    let mut out = STATE_MAGIC.to_vec();
    push_u64(&mut out, iteration as u64);
    push_u32(&mut out, store.len() as u32);
    push_u32(&mut out, k as u32);
    push_u32(&mut out, h as u32);
    push_u32(&mut out, w as u32);
    let stride = (h * w).div_ceil(8);
    for i in 0..store.len() {
        push_u64(&mut out, store.version(i));
        let mut bits = vec![0u8; stride];
        for (px, &u) in store.map(i).unknown_pixels().iter().enumerate() {
            if u {
                bits[px / 8] |= 1 << (px % 8);
            }
        }
        out.extend_from_slice(&bits);
    }
    out
}

pub struct TrainState {
    pub iteration: usize,
    pub store: PseudoLabelStore,
    pub k: usize,
    pub height: usize,
    pub width: usize,
}

pub fn decode_state(bytes: &[u8]) -> Result<TrainState> {
    let mut r = Reader::new(bytes, STATE_MAGIC, "trainer state")?;
    let iteration = r.u64()? as usize;
    let n = r.u32()? as usize;
    let k = r.u32()? as usize;
    let h = r.u32()? as usize;
    let w = r.u32()? as usize;
    let stride = (h * w).div_ceil(8);
    let mut maps = Vec::with_capacity(n);
    let mut versions = Vec::with_capacity(n);
    for _ in 0..n {
        versions.push(r.u64()?);
        let bits = r.take(stride)?;
        let flags: Vec<bool> = (0..h * w).map(|px| bits[px / 8] & (1 << (px % 8)) != 0).collect();
        maps.push(PseudoLabelMap::from_flags(k, h, w, flags)?);
    }
    r.finish()?;
    Ok(TrainState {
        iteration,
        store: PseudoLabelStore::from_parts(maps, versions)?,
        k,
        height: h,
        width: w,
    })
}

pub fn save_state(
    path: &Path,
    iteration: usize,
    store: &PseudoLabelStore,
    k: usize,
    h: usize,
    w: usize,
) -> Result<()> {
    fs::write(path, encode_state(iteration, store, k, h, w)).map_err(Into::into)
}

pub fn load_state(path: &Path) -> Result<TrainState> {
    decode_state(&fs::read(path).map_err(|e| data_err(format!("{}: {e}", path.display())))?)
}
