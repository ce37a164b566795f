use std::io::Write;

use super::DataError;
use crate::autodiff::Tensor;
use crate::labelgen::{Dims, Raster};

/// Interleaved 8-bit RGB.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub dims: Dims,
    pub data: Vec<u8>,
}

/// 8-bit grayscale.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub dims: Dims,
    pub data: Vec<u8>,
}

/// `clamp(round(v * 255), 0, 255)`.
pub fn to_byte(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

impl RgbImage {
    pub fn new(dims: Dims) -> Self {
        Self { dims, data: vec![0; dims.pixels() * 3] }
    }

    pub fn get(&self, row: usize, col: usize) -> [u8; 3] {
        let i = (row * self.dims.width + col) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set(&mut self, row: usize, col: usize, rgb: [u8; 3]) {
        let i = (row * self.dims.width + col) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// `1×3×H×W` tensor with values `byte / 255`.
    pub fn to_tensor(&self) -> Tensor {
        let (h, w) = (self.dims.height, self.dims.width);
        let mut data = vec![0.0; 3 * h * w];
        for (i, px) in self.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                data[c * h * w + i] = f64::from(px[c]) / 255.0;
            }
        }
        Tensor::new(vec![1, 3, h, w], data).expect("image tensor extents")
    }

    /// Bilinear resampling with pixel-center alignment.
    pub fn resize(&self, dims: Dims) -> RgbImage {
        let (sh, sw) = (self.dims.height, self.dims.width);
        let mut out = RgbImage::new(dims);
        let fy = sh as f64 / dims.height as f64;
        let fx = sw as f64 / dims.width as f64;
        for r in 0..dims.height {
            let y = ((r as f64 + 0.5) * fy - 0.5).clamp(0.0, (sh - 1) as f64);
            let (y0, ty) = (y.floor() as usize, y - y.floor());
            let y1 = (y0 + 1).min(sh - 1);
            for c in 0..dims.width {
                let x = ((c as f64 + 0.5) * fx - 0.5).clamp(0.0, (sw - 1) as f64);
                let (x0, tx) = (x.floor() as usize, x - x.floor());
                let x1 = (x0 + 1).min(sw - 1);
                let (a, b, cc, d) = (self.get(y0, x0), self.get(y0, x1), self.get(y1, x0), self.get(y1, x1));
                let mut px = [0u8; 3];
                for k in 0..3 {
                    let top = f64::from(a[k]) * (1.0 - tx) + f64::from(b[k]) * tx;
                    let bot = f64::from(cc[k]) * (1.0 - tx) + f64::from(d[k]) * tx;
                    px[k] = (top * (1.0 - ty) + bot * ty).round().clamp(0.0, 255.0) as u8;
                }
                out.set(r, c, px);
            }
        }
        out
    }
}

impl GrayImage {
    /// Maps `lo..=hi` linearly onto `0..=255`.
    pub fn from_raster(r: &Raster, lo: f64, hi: f64) -> Self {
        let span = hi - lo;
        let data = r.data.iter().map(|&v| to_byte((f64::from(v) - lo) / span)).collect();
        Self { dims: r.dims, data }
    }

    pub fn to_raster(&self) -> Raster {
        Raster { dims: self.dims, data: self.data.iter().map(|&b| f32::from(b) / 255.0).collect() }
    }
}

fn write_pnm<W: Write>(mut w: W, magic: &str, dims: Dims, data: &[u8]) -> Result<(), DataError> {
    write!(w, "{magic}\n{} {}\n255\n", dims.width, dims.height)?;
    w.write_all(data)?;
    Ok(())
}

pub fn write_ppm<W: Write>(w: W, img: &RgbImage) -> Result<(), DataError> {
    write_pnm(w, "P6", img.dims, &img.data)
}

pub fn write_pgm<W: Write>(w: W, img: &GrayImage) -> Result<(), DataError> {
    write_pnm(w, "P5", img.dims, &img.data)
}

pub fn ppm_bytes(img: &RgbImage) -> Vec<u8> {
    let mut v = Vec::new();
    write_ppm(&mut v, img).expect("writing to memory");
    v
}

pub fn pgm_bytes(img: &GrayImage) -> Vec<u8> {
    let mut v = Vec::new();
    write_pgm(&mut v, img).expect("writing to memory");
    v
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn err(&self, msg: impl Into<String>) -> DataError {
        DataError::Format { offset: self.pos as u64, msg: msg.into() }
    }

    fn skip_space(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                b' ' | b'\t' | b'\n' | b'\r' => self.pos += 1,
                _ => break,
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize, DataError> {
        self.skip_space();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.err(format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| DataError::Format { offset: start as u64, msg: format!("{what} out of range") })
    }
}

fn read_pnm(bytes: &[u8], magic: &[u8; 2], channels: usize) -> Result<(Dims, Vec<u8>), DataError> {
    let mut h = Header { bytes, pos: 0 };
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(h.err(format!("bad magic, expected {}", String::from_utf8_lossy(magic))));
    }
    h.pos = 2;
    let width = h.number("width")?;
    let height = h.number("height")?;
    let maxval_at = h.pos;
    let maxval = h.number("maxval")?;
    if maxval != 255 {
        return Err(DataError::Format {
            offset: maxval_at as u64,
            msg: format!("maxval {maxval} unsupported, need 255"),
        });
    }
    match bytes.get(h.pos) {
        Some(b' ' | b'\t' | b'\n' | b'\r') => h.pos += 1,
        _ => return Err(h.err("expected one whitespace byte before the payload")),
    }
    let need = width * height * channels;
    let have = bytes.len() - h.pos;
    if have < need {
        return Err(DataError::Format {
            offset: bytes.len() as u64,
            msg: format!("truncated payload: {have} of {need} bytes"),
        });
    }
    if have > need {
        return Err(DataError::Format {
            offset: (h.pos + need) as u64,
            msg: format!("{} trailing bytes", have - need),
        });
    }
    Ok((Dims::new(height, width), bytes[h.pos..].to_vec()))
}

pub fn read_ppm(bytes: &[u8]) -> Result<RgbImage, DataError> {
    let (dims, data) = read_pnm(bytes, b"P6", 3)?;
    Ok(RgbImage { dims, data })
}

pub fn read_pgm(bytes: &[u8]) -> Result<GrayImage, DataError> {
    let (dims, data) = read_pnm(bytes, b"P5", 1)?;
    Ok(GrayImage { dims, data })
}
