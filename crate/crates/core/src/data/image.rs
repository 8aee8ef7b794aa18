use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn decode_err(msg: impl Into<String>) -> Error {
    Error::Decode(msg.into())
}

struct HeaderCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl HeaderCursor<'_> {
    fn skip_space_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&c| c != b'\n') {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, field: &str) -> Result<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(decode_err(format!("missing or malformed {field}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| decode_err(format!("{field} out of range")))
    }
}

/// Decodes a binary PPM (`P6`, maxval 255) into `[h, w, 3]` with raw 0..=255
/// values.
pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor<f32>> {
    match bytes.get(..2) {
        Some(b"P6") => {}
        Some(m) => {
            return Err(decode_err(format!(
                "unsupported magic {:?}, expected P6",
                String::from_utf8_lossy(m)
            )))
        }
        None => return Err(decode_err("file too short for a magic number")),
    }
    let mut cur = HeaderCursor { bytes, pos: 2 };
    let width = cur.number("width")?;
    let height = cur.number("height")?;
    let maxval = cur.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(decode_err(format!("image dimensions {width}x{height} are empty")));
    }
    if maxval != 255 {
        return Err(decode_err(format!("maxval {maxval} is unsupported, expected 255")));
    }
    // exactly one whitespace byte separates the header from the raster
    if !bytes.get(cur.pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(decode_err("missing whitespace after maxval"));
    }
    let start = cur.pos + 1;
    let need = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(3))
        .ok_or_else(|| decode_err("image dimensions overflow"))?;
    let have = bytes.len() - start;
    if have < need {
        return Err(decode_err(format!(
            "payload truncated: expected {need} bytes, found {have}"
        )));
    }
    let data = bytes[start..start + need].iter().map(|&b| b as f32).collect();
    Tensor::from_vec(&[height, width, 3], data)
}

/// Decodes any supported image file. PPM is always available; JPEG and PNG
/// need the `image-formats` feature.
pub fn decode_image(bytes: &[u8]) -> Result<Tensor<f32>> {
    if bytes.first() == Some(&b'P') {
        return decode_ppm(bytes);
    }
    decode_other(bytes)
}

#[cfg(feature = "image-formats")]
fn decode_other(bytes: &[u8]) -> Result<Tensor<f32>> {
    let img = ::image::load_from_memory(bytes)
        .map_err(|e| decode_err(e.to_string()))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|b| b as f32).collect();
    Tensor::from_vec(&[h as usize, w as usize, 3], data)
}

#[cfg(not(feature = "image-formats"))]
fn decode_other(_bytes: &[u8]) -> Result<Tensor<f32>> {
    Err(decode_err(
        "unsupported format (only binary PPM; build with the image-formats feature for JPEG/PNG)",
    ))
}

/// Source coordinate and blend weight for each destination index, using
/// half-pixel centres.
fn sample_positions(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|d| {
            let s = ((d as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (s.floor() as usize).min(src - 1);
            let hi = (lo + 1).min(src - 1);
            (lo, hi, s - lo as f64)
        })
        .collect()
}

/// Bilinear resize of an `[h, w, c]` image to `[target_h, target_w, c]`.
///
/// Interpolation is written as nested lerps so a constant image stays
/// exactly constant. Same-size input is returned unchanged.
pub fn resize_bilinear(img: &Tensor<f32>, target: [usize; 2]) -> Result<Tensor<f32>> {
    let &[h, w, c] = img.dims() else {
        return Err(Error::shape(format!("resize expects [h, w, c], got {}", img.shape())));
    };
    let [th, tw] = target;
    if th == 0 || tw == 0 {
        return Err(Error::shape(format!("resize target {th}x{tw} is empty")));
    }
    if (th, tw) == (h, w) {
        return Ok(img.clone());
    }
    let rows = sample_positions(h, th);
    let cols = sample_positions(w, tw);
    let src = img.data();
    let px = |i: usize, j: usize, ch: usize| src[(i * w + j) * c + ch] as f64;
    let mut out = Vec::with_capacity(th * tw * c);
    for &(y0, y1, fy) in &rows {
        for &(x0, x1, fx) in &cols {
            for ch in 0..c {
                let top = px(y0, x0, ch) + (px(y0, x1, ch) - px(y0, x0, ch)) * fx;
                let bottom = px(y1, x0, ch) + (px(y1, x1, ch) - px(y1, x0, ch)) * fx;
                out.push((top + (bottom - top) * fy) as f32);
            }
        }
    }
    Tensor::from_vec(&[th, tw, c], out)
}
