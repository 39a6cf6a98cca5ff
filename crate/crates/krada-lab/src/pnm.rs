//! Binary PPM (P6) for images and binary PGM (P5) for label maps.
//!
//! Generated images live exactly on the 8-bit grid (every channel is an
//! integer multiple of 1/255), so encoding to bytes and decoding back is
//! lossless — a round-tripped dataset is bitwise identical to the one in
//! memory. Label maps store raw class ids as gray values, `0` for void.

use crate::{data_err, Result};
use krada_core::label::LabelMap;
use krada_core::tensor::Tensor;

pub fn encode_ppm(image: &Tensor) -> Result<Vec<u8>> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(data_err(format!("PPM wants a [3,H,W] image, got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(3 * h * w);
    let d = image.data();
    for px in 0..h * w {
        for c in 0..3 {
            out.push(quantize(d[c * h * w + px])?);
        }
    }
    Ok(out)
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor> {
    let (w, h, raster) = parse_header(bytes, b"P6")?;
    let need = 3 * w * h;
    if raster.len() != need {
        return Err(data_err(format!(
            "PPM raster holds {} bytes, header promises {need}",
            raster.len()
        )));
    }
    let mut data = vec![0.0; need];
    for px in 0..h * w {
        for c in 0..3 {
            data[c * h * w + px] = raster[3 * px + c] as f64 / 255.0;
        }
    }
    Ok(Tensor::from_vec(&[3, h, w], data).expect("sized above"))
}

pub fn encode_pgm(labels: &LabelMap) -> Vec<u8> {
    let (h, w) = (labels.height(), labels.width());
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(labels.pixels());
    out
}

pub fn decode_pgm(bytes: &[u8]) -> Result<LabelMap> {
    let (w, h, raster) = parse_header(bytes, b"P5")?;
    if raster.len() != w * h {
        return Err(data_err(format!(
            "PGM raster holds {} bytes, header promises {}",
            raster.len(),
            w * h
        )));
    }
    LabelMap::from_vec(h, w, raster.to_vec()).map_err(Into::into)
}

fn quantize(v: f64) -> Result<u8> {
    if !(0.0..=1.0).contains(&v) {
        return Err(data_err(format!("channel value {v} outside [0,1]")));
    }
    let q = (v * 255.0).round();
    // Values straight from the generator are exact multiples of 1/255; a
    // drifted value means someone fed in an unquantized tensor.
    if (q / 255.0 - v).abs() > 1e-9 {
        return Err(data_err(format!("channel value {v} is not on the 8-bit grid")));
    }
    Ok(q as u8)
}

/// Parses `magic`, width, height, and a maxval of 255, tolerating `#`
/// comments and arbitrary whitespace between tokens, and returns the raster
/// that follows the single whitespace byte after the maxval.
fn parse_header<'a>(bytes: &'a [u8], magic: &[u8]) -> Result<(usize, usize, &'a [u8])> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(data_err(format!(
            "bad magic, expected {}",
            String::from_utf8_lossy(magic)
        )));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        *field = next_number(bytes, &mut pos)?;
    }
    let [w, h, maxval] = fields;
    if maxval != 255 {
        return Err(data_err(format!("unsupported maxval {maxval}, want 255")));
    }
    if w == 0 || h == 0 {
        return Err(data_err("degenerate image dimensions"));
    }
    // Exactly one whitespace byte separates the header from the raster.
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => Ok((w, h, &bytes[pos + 1..])),
        _ => Err(data_err("missing separator before raster")),
    }
}

fn next_number(bytes: &[u8], pos: &mut usize) -> Result<usize> {
    // Skip whitespace and comment lines.
    loop {
        match bytes.get(*pos) {
            Some(b) if b.is_ascii_whitespace() => *pos += 1,
            Some(b'#') => {
                while let Some(b) = bytes.get(*pos) {
                    *pos += 1;
                    if *b == b'\n' {
                        break;
                    }
                }
            }
            _ => break,
        }
    }
    let start = *pos;
    while matches!(bytes.get(*pos), Some(b) if b.is_ascii_digit()) {
        *pos += 1;
    }
    if *pos == start {
        return Err(data_err("expected a number in the header"));
    }
    core::str::from_utf8(&bytes[start..*pos])
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| data_err("unreadable number in the header"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use krada_core::synth::{generate_target, SceneSpec, Split};

    #[test]
    fn generated_images_round_trip_losslessly() {
        let spec = SceneSpec::default();
        for im in generate_target(&spec, 4, Split::TargetTest).unwrap() {
            let bytes = encode_ppm(&im.image).unwrap();
            let back = decode_ppm(&bytes).unwrap();
            assert_eq!(back.shape(), im.image.shape());
            assert_eq!(back.data(), im.image.data());

            let lbytes = encode_pgm(&im.labels);
            let lback = decode_pgm(&lbytes).unwrap();
            assert_eq!(lback.pixels(), im.labels.pixels());
        }
    }

    #[test]
    fn header_comments_and_whitespace_are_tolerated() {
        let mut bytes = b"P5 # magic\n# a comment line\n  2\t3 # dims\n255\n".to_vec();
        bytes.extend_from_slice(&[1, 2, 3, 4, 5, 6]);
        let m = decode_pgm(&bytes).unwrap();
        assert_eq!((m.height(), m.width()), (3, 2));
        assert_eq!(m.pixels(), &[1, 2, 3, 4, 5, 6]);
    }

    #[test]
    fn malformed_files_are_rejected() {
        assert!(decode_pgm(b"P6\n2 2\n255\n----").is_err(), "wrong magic");
        assert!(decode_pgm(b"P5\n2 2\n65535\n----").is_err(), "wide maxval");
        assert!(decode_pgm(b"P5\n2 2\n255\nab").is_err(), "short raster");
        assert!(decode_pgm(b"P5\n0 2\n255\n").is_err(), "zero dimension");
        assert!(decode_ppm(b"P6\n1 1\n255\nabcd").is_err(), "long raster");
    }

    #[test]
    fn unquantized_tensors_are_refused() {
        let t = Tensor::from_vec(&[3, 1, 1], vec![0.5, 0.5, 0.5]).unwrap();
        assert!(encode_ppm(&t).is_err()); // 0.5·255 = 127.5 is off-grid
        let ok = Tensor::from_vec(&[3, 1, 1], vec![128.0 / 255.0; 3]).unwrap();
        assert!(encode_ppm(&ok).is_ok());
    }
}
