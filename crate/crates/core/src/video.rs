//! Video and frame types, frame utilities, and the BVID / PPM file formats.
//!
//! BVID layout (little-endian): magic `BVID`, version `u32` = 1, dims `n, c, h, w`
//! as `u32`, dtype `u8` = 1 (f32), then `n·c·h·w` f32 values, frame-major,
//! channel-next, row-major.

use std::path::Path;

use crate::error::{Error, FormatError, Result};
use crate::tensor::Tensor;

pub const BVID_MAGIC: [u8; 4] = *b"BVID";
pub const BVID_VERSION: u32 = 1;
pub const BVID_DTYPE_F32: u8 = 1;
const BVID_HEADER: usize = 4 + 4 + 16 + 1;

/// A clip of `n ≥ 2` frames with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Video {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    data: Vec<f32>,
}

/// A single `[c, h, w]` image.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

fn check_values(data: &[f32]) -> Result<()> {
    if let Some((i, v)) = data.iter().enumerate().find(|(_, v)| !(0.0..=1.0).contains(*v)) {
        return Err(Error::InvalidVideo(format!("value {v} at index {i} is outside [0, 1]")));
    }
    Ok(())
}

impl Video {
    pub fn new(n: usize, c: usize, h: usize, w: usize, data: Vec<f32>) -> Result<Self> {
        if n < 2 {
            return Err(Error::InvalidVideo(format!("a video needs at least 2 frames, got {n}")));
        }
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::InvalidVideo(format!("degenerate geometry {c}x{h}x{w}")));
        }
        if data.len() != n * c * h * w {
            return Err(Error::InvalidVideo(format!(
                "{} values do not fill {n}x{c}x{h}x{w}",
                data.len()
            )));
        }
        check_values(&data)?;
        Ok(Video { n, c, h, w, data })
    }

    /// Builds a video from `f64` values, rounding to `f32`. Values must already lie in `[0, 1]`.
    pub fn from_f64(n: usize, c: usize, h: usize, w: usize, data: &[f64]) -> Result<Self> {
        Video::new(n, c, h, w, data.iter().map(|&v| v as f32).collect())
    }

    /// Like [`Video::from_f64`] but clamps into `[0, 1]` first; NaN is rejected.
    pub fn from_f64_clamped(n: usize, c: usize, h: usize, w: usize, data: &[f64]) -> Result<Self> {
        if data.iter().any(|v| v.is_nan()) {
            return Err(Error::InvalidVideo("NaN value".into()));
        }
        Video::new(n, c, h, w, data.iter().map(|&v| v.clamp(0.0, 1.0) as f32).collect())
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let [n, c, h, w] = t.dims4();
        Video::from_f64(n, c, h, w, t.data())
    }

    pub fn filled(n: usize, c: usize, h: usize, w: usize, value: f32) -> Result<Self> {
        Video::new(n, c, h, w, vec![value; n * c * h * w])
    }

    pub fn frames(&self) -> usize {
        self.n
    }

    pub fn channels(&self) -> usize {
        self.c
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn at(&self, f: usize, c: usize, y: usize, x: usize) -> f32 {
        self.data[((f * self.c + c) * self.h + y) * self.w + x]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(self.dims().to_vec(), self.data.iter().map(|&v| v as f64).collect())
    }

    pub fn frame(&self, k: usize) -> Frame {
        let sz = self.c * self.h * self.w;
        Frame { c: self.c, h: self.h, w: self.w, data: self.data[k * sz..(k + 1) * sz].to_vec() }
    }

    /// Stacks frames into a video; all frames must share a geometry.
    pub fn from_frames(frames: &[Frame]) -> Result<Self> {
        let first = frames.first().ok_or_else(|| Error::Empty("no frames".into()))?;
        let mut data = Vec::with_capacity(frames.len() * first.data.len());
        for f in frames {
            if (f.c, f.h, f.w) != (first.c, first.h, first.w) {
                return Err(Error::Shape("frames differ in geometry".into()));
            }
            data.extend_from_slice(&f.data);
        }
        Video::new(frames.len(), first.c, first.h, first.w, data)
    }

    /// Rolls every frame by `(dy, dx)` pixels with wrap-around.
    pub fn circular_shift(&self, dy: isize, dx: isize) -> Video {
        let (h, w) = (self.h as isize, self.w as isize);
        let mut out = vec![0.0; self.data.len()];
        for plane in 0..self.n * self.c {
            let base = plane * self.h * self.w;
            for y in 0..self.h {
                let sy = (y as isize - dy).rem_euclid(h) as usize;
                for x in 0..self.w {
                    let sx = (x as isize - dx).rem_euclid(w) as usize;
                    out[base + y * self.w + x] = self.data[base + sy * self.w + sx];
                }
            }
        }
        Video { data: out, ..self.clone() }
    }

    /// Mean absolute per-value difference.
    pub fn mean_abs_diff(&self, other: &Video) -> f64 {
        assert_eq!(self.dims(), other.dims());
        self.data.iter().zip(&other.data).map(|(a, b)| (*a as f64 - *b as f64).abs()).sum::<f64>()
            / self.data.len() as f64
    }

    pub fn to_bvid_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(BVID_HEADER + 4 * self.data.len());
        out.extend_from_slice(&BVID_MAGIC);
        out.extend_from_slice(&BVID_VERSION.to_le_bytes());
        for d in self.dims() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.push(BVID_DTYPE_F32);
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bvid_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < BVID_HEADER {
            return Err(FormatError::MalformedHeader(format!(
                "header needs {BVID_HEADER} bytes, file has {}",
                bytes.len()
            ))
            .into());
        }
        let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
        if magic != BVID_MAGIC {
            return Err(FormatError::BadMagic { expected: BVID_MAGIC, found: magic }.into());
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
        let version = u32_at(4);
        if version != BVID_VERSION {
            return Err(FormatError::UnsupportedVersion(version).into());
        }
        let dims: Vec<u32> = (0..4).map(|i| u32_at(8 + 4 * i)).collect();
        let dtype = bytes[24];
        if dtype != BVID_DTYPE_F32 {
            return Err(FormatError::UnsupportedDtype(dtype).into());
        }
        let count = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d as usize))
            .and_then(|n| n.checked_mul(4).map(|b| (n, b)))
            .filter(|(n, _)| *n > 0);
        let (count, payload_bytes) = count.ok_or_else(|| FormatError::DimensionOverflow(dims.clone()))?;
        let payload = &bytes[BVID_HEADER..];
        if payload.len() < payload_bytes {
            return Err(FormatError::Truncated { expected: payload_bytes, found: payload.len() }.into());
        }
        if payload.len() > payload_bytes {
            return Err(FormatError::TrailingBytes(payload.len() - payload_bytes).into());
        }
        let mut data = Vec::with_capacity(count);
        for ch in payload.chunks_exact(4) {
            data.push(f32::from_le_bytes(ch.try_into().expect("4 bytes")));
        }
        let d: Vec<usize> = dims.iter().map(|&d| d as usize).collect();
        Video::new(d[0], d[1], d[2], d[3], data)
    }
}

impl Frame {
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![1, self.c, self.h, self.w], self.data.iter().map(|&v| v as f64).collect())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }
}

/// Frame 0 of `x`.
pub fn first_frame(x: &Video) -> Frame {
    x.frame(0)
}

/// A clip of `n` frames whose frame 0 is `f` and the rest zero.
pub fn zero_pad_to_video(f: &Frame, n: usize) -> Result<Video> {
    if n < 2 {
        return Err(Error::config("frames", format!("zero padding needs n >= 2, got {n}")));
    }
    let mut data = vec![0.0f32; n * f.data.len()];
    data[..f.data.len()].copy_from_slice(&f.data);
    Video::new(n, f.c, f.h, f.w, data)
}

pub fn write_video(path: &Path, x: &Video) -> Result<()> {
    std::fs::write(path, x.to_bvid_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_video(path: &Path) -> Result<Video> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Video::from_bvid_bytes(&bytes)
}

/// Byte value for a pixel intensity: `floor(255·p + 0.5)`, i.e. round half up.
pub fn pixel_byte(p: f32) -> u8 {
    (255.0 * p.clamp(0.0, 1.0) as f64 + 0.5).floor() as u8
}

/// P6 image with every frame tiled left to right. Single-channel videos are
/// replicated to gray; channels beyond the third are ignored.
pub fn frame_grid_ppm(x: &Video) -> Vec<u8> {
    let [n, c, h, w] = x.dims();
    let mut out = format!("P6\n{} {}\n255\n", n * w, h).into_bytes();
    for y in 0..h {
        for f in 0..n {
            for col in 0..w {
                for ch in 0..3 {
                    let src = if c >= 3 { ch } else { 0 };
                    out.push(pixel_byte(x.at(f, src, y, col)));
                }
            }
        }
    }
    out
}

pub fn export_frame_grid(x: &Video, path: &Path) -> Result<()> {
    std::fs::write(path, frame_grid_ppm(x)).map_err(|e| Error::io(path, e))
}
