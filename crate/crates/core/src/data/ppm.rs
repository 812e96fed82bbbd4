//! Binary PPM (P6) with a maximum value of 255.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Decode a P6 file into a `3×H×W` tensor with values in `[0, 1]`.
pub fn decode(bytes: &[u8], path: &Path) -> Result<Tensor<f32>> {
    let bad = |reason: String| Error::data(path, reason);
    let mut pos = 0;
    if bytes.get(..2) != Some(b"P6") {
        return Err(bad("not a binary PPM (missing P6 magic)".into()));
    }
    pos += 2;
    let mut header = [0usize; 3];
    for (slot, name) in header.iter_mut().zip(["width", "height", "max value"]) {
        skip_space_and_comments(bytes, &mut pos);
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(bad(format!("missing {name} in header")));
        }
        *slot = std::str::from_utf8(&bytes[start..pos])
            .expect("ascii digits")
            .parse()
            .map_err(|_| bad(format!("{name} out of range")))?;
    }
    let [w, h, maxval] = header;
    if maxval != 255 {
        return Err(bad(format!("max value {maxval} unsupported (only 255)")));
    }
    if w == 0 || h == 0 {
        return Err(bad(format!("empty image {w}x{h}")));
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(bad("header not terminated by whitespace".into())),
    }
    let n = w * h * 3;
    let pixels = bytes.get(pos..pos + n).ok_or_else(|| {
        bad(format!(
            "truncated pixel data: need {n} bytes, have {}",
            bytes.len() - pos
        ))
    })?;
    let mut data = vec![0f32; n];
    let plane = w * h;
    for (i, px) in pixels.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * plane + i] = px[c] as f32 / 255.0;
        }
    }
    Tensor::new(vec![3, h, w], data)
}

fn skip_space_and_comments(bytes: &[u8], pos: &mut usize) {
    while *pos < bytes.len() {
        match bytes[*pos] {
            b'#' => {
                while *pos < bytes.len() && bytes[*pos] != b'\n' {
                    *pos += 1;
                }
            }
            b if b.is_ascii_whitespace() => *pos += 1,
            _ => break,
        }
    }
}

/// Quantize a channel value in `[0, 1]` to a byte.
pub fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Encode a `3×H×W` (or `1×H×W`, written as gray) tensor as P6.
pub fn encode(image: &Tensor<f32>) -> Result<Vec<u8>> {
    let sh = image.shape();
    if sh.len() != 3 || !(sh[0] == 3 || sh[0] == 1) {
        return Err(Error::usage(format!(
            "PPM needs a 3×H×W or 1×H×W image, got {sh:?}"
        )));
    }
    let (c, h, w) = (sh[0], sh[1], sh[2]);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let plane = h * w;
    let d = image.data();
    out.reserve(plane * 3);
    for i in 0..plane {
        for ch in 0..3 {
            let src = if c == 1 { 0 } else { ch };
            out.push(to_byte(d[src * plane + i]));
        }
    }
    Ok(out)
}

pub fn read(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::data(path, e.to_string()))?;
    decode(&bytes, path)
}

pub fn write(path: &Path, image: &Tensor<f32>) -> Result<()> {
    let bytes = encode(image)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Bilinear resize of a `C×H×W` image (pixel centers aligned).
pub fn resize(image: &Tensor<f32>, out_h: usize, out_w: usize) -> Result<Tensor<f32>> {
    let sh = image.shape();
    if sh.len() != 3 || out_h == 0 || out_w == 0 {
        return Err(Error::usage(format!(
            "cannot resize {sh:?} to {out_h}x{out_w}"
        )));
    }
    let (c, h, w) = (sh[0], sh[1], sh[2]);
    if (h, w) == (out_h, out_w) {
        return Ok(image.clone());
    }
    let src = image.data();
    let mut out = vec![0f32; c * out_h * out_w];
    let coord = |o: usize, out_n: usize, n: usize| {
        let x = ((o as f32 + 0.5) * n as f32 / out_n as f32 - 0.5).clamp(0.0, (n - 1) as f32);
        let i0 = x.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, x - i0 as f32)
    };
    for oy in 0..out_h {
        let (y0, y1, fy) = coord(oy, out_h, h);
        for ox in 0..out_w {
            let (x0, x1, fx) = coord(ox, out_w, w);
            for ch in 0..c {
                let p = |y: usize, x: usize| src[(ch * h + y) * w + x];
                let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
                let bottom = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
                out[(ch * out_h + oy) * out_w + ox] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    Tensor::new(vec![c, out_h, out_w], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p() -> &'static Path {
        Path::new("x.ppm")
    }

    #[test]
    fn roundtrip_bytes() {
        let bytes = b"P6\n# comment\n2 1\n255\n\x00\x80\xff\x10\x20\x30".to_vec();
        let img = decode(&bytes, p()).unwrap();
        assert_eq!(img.shape(), &[3, 1, 2]);
        assert_eq!(img.data()[0], 0.0);
        assert_eq!(img.data()[4], 1.0);
        let again = encode(&img).unwrap();
        assert_eq!(decode(&again, p()).unwrap(), img);
        assert_eq!(&again[again.len() - 6..], &bytes[bytes.len() - 6..]);
    }

    #[test]
    fn rejects_other_max_values_and_truncation() {
        let e = decode(b"P6 1 1 65535\n\0\0\0\0\0\0", p()).unwrap_err();
        assert!(e.to_string().contains("65535"), "{e}");
        let e = decode(b"P6 2 2 255\n\0\0\0", p()).unwrap_err();
        assert!(e.to_string().contains("truncated"), "{e}");
        assert!(decode(b"P3 1 1 255\n0 0 0", p()).is_err());
        assert!(matches!(decode(b"P6 1", p()), Err(Error::Data { .. })));
    }

    #[test]
    fn resize_constant_image_stays_constant() {
        let img = Tensor::full(&[3, 5, 7], 0.25f32);
        let r = resize(&img, 8, 3).unwrap();
        assert_eq!(r.shape(), &[3, 8, 3]);
        assert!(r.data().iter().all(|&v| (v - 0.25).abs() < 1e-7));
    }
}
