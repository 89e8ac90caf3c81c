//! Lossless per-frame latent codec.
//!
//! A frame of `H × W × 3` pixels is rearranged (space-to-depth) into a latent
//! grid of `H/p × W/p` cells with `3·p²` channels. No arithmetic touches the
//! values, so decoding reproduces the frame bit for bit.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Error, Result};

/// `height × width × 3` RGB image, row-major, channels innermost.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Frame {
    pub fn new(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![0.0; height * width * 3] }
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self { height, width, data: vec![value; height * width * 3] }
    }

    #[inline]
    pub fn idx(&self, y: usize, x: usize, ch: usize) -> usize {
        (y * self.width + x) * 3 + ch
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, ch: usize) -> f64 {
        self.data[self.idx(y, x, ch)]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, ch: usize, v: f64) {
        let i = self.idx(y, x, ch);
        self.data[i] = v;
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let i = self.idx(y, x, 0);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f64; 3]) {
        let i = self.idx(y, x, 0);
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn clamped(&self) -> Frame {
        Frame { height: self.height, width: self.width, data: self.data.iter().map(|v| v.clamp(0.0, 1.0)).collect() }
    }
}

/// `h × w × c` latent tensor, row-major, channels innermost.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Latent {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub data: Vec<f64>,
}

impl Latent {
    pub fn zeros(h: usize, w: usize, c: usize) -> Self {
        Self { h, w, c, data: vec![0.0; h * w * c] }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.h, self.w, self.c)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, ch: usize) -> f64 {
        self.data[(y * self.w + x) * self.c + ch]
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Equal-shaped latents tagged with their source frame indices.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentClip {
    pub latents: Vec<Latent>,
    pub frame_indices: Vec<usize>,
}

impl LatentClip {
    /// Builds a clip, validating shape agreement and strictly increasing indices.
    pub fn new(latents: Vec<Latent>, frame_indices: Vec<usize>) -> Result<Self> {
        if latents.len() != frame_indices.len() {
            bail!(ShapeMismatch, "{} latents but {} frame indices", latents.len(), frame_indices.len());
        }
        if let Some(first) = latents.first() {
            if let Some(bad) = latents.iter().position(|l| l.shape() != first.shape()) {
                bail!(ShapeMismatch, "latent {bad} has shape {:?}, expected {:?}", latents[bad].shape(), first.shape());
            }
        }
        if frame_indices.windows(2).any(|w| w[0] >= w[1]) {
            bail!(InvalidArgument, "frame indices must be strictly increasing: {frame_indices:?}");
        }
        Ok(Self { latents, frame_indices })
    }

    /// Clip with indices `0..n`.
    pub fn from_latents(latents: Vec<Latent>) -> Result<Self> {
        let n = latents.len();
        Self::new(latents, (0..n).collect())
    }

    pub fn len(&self) -> usize {
        self.latents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.latents.is_empty()
    }

    pub fn shape(&self) -> Option<(usize, usize, usize)> {
        self.latents.first().map(Latent::shape)
    }

    pub fn num_elements(&self) -> usize {
        self.latents.iter().map(Latent::len).sum()
    }

    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.latents.iter().flat_map(|l| l.data.iter().copied())
    }

    /// Sub-clip of latents `start..end`.
    pub fn slice(&self, start: usize, end: usize) -> LatentClip {
        LatentClip {
            latents: self.latents[start..end].to_vec(),
            frame_indices: self.frame_indices[start..end].to_vec(),
        }
    }

    pub fn same_shape(&self, other: &LatentClip) -> bool {
        self.len() == other.len() && self.shape() == other.shape()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Codec {
    pub patch: usize,
}

impl Default for Codec {
    fn default() -> Self {
        Self { patch: 4 }
    }
}

impl Codec {
    pub fn new(patch: usize) -> Result<Self> {
        if patch == 0 {
            bail!(InvalidArgument, "patch size must be positive");
        }
        Ok(Self { patch })
    }

    pub fn latent_shape(&self, height: usize, width: usize) -> Result<(usize, usize, usize)> {
        let p = self.patch;
        if height == 0 || width == 0 || !height.is_multiple_of(p) || !width.is_multiple_of(p) {
            bail!(ShapeMismatch, "frame {height}x{width} is not divisible by patch {p}");
        }
        Ok((height / p, width / p, 3 * p * p))
    }

    pub fn frame_shape(&self, latent: &Latent) -> Result<(usize, usize)> {
        let p = self.patch;
        if latent.c != 3 * p * p {
            bail!(ShapeMismatch, "latent has {} channels, patch {p} needs {}", latent.c, 3 * p * p);
        }
        if latent.data.len() != latent.h * latent.w * latent.c {
            bail!(ShapeMismatch, "latent buffer length {} != {}x{}x{}", latent.data.len(), latent.h, latent.w, latent.c);
        }
        Ok((latent.h * p, latent.w * p))
    }

    pub fn encode_frame(&self, frame: &Frame) -> Result<Latent> {
        let (h, w, c) = self.latent_shape(frame.height, frame.width)?;
        let p = self.patch;
        let mut data = Vec::with_capacity(h * w * c);
        for ly in 0..h {
            for lx in 0..w {
                for dy in 0..p {
                    for dx in 0..p {
                        let i = frame.idx(ly * p + dy, lx * p + dx, 0);
                        data.extend_from_slice(&frame.data[i..i + 3]);
                    }
                }
            }
        }
        Ok(Latent { h, w, c, data })
    }

    pub fn decode_latent(&self, latent: &Latent) -> Result<Frame> {
        let (height, width) = self.frame_shape(latent)?;
        let p = self.patch;
        let mut frame = Frame::new(height, width);
        let mut k = 0;
        for ly in 0..latent.h {
            for lx in 0..latent.w {
                for dy in 0..p {
                    for dx in 0..p {
                        let i = frame.idx(ly * p + dy, lx * p + dx, 0);
                        frame.data[i..i + 3].copy_from_slice(&latent.data[k..k + 3]);
                        k += 3;
                    }
                }
            }
        }
        Ok(frame)
    }

    pub fn encode_clip(&self, frames: &[Frame], indices: &[usize]) -> Result<LatentClip> {
        if indices.is_empty() {
            bail!(InvalidArgument, "encode_clip needs at least one frame index");
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= frames.len()) {
            bail!(OutOfRange, "frame index {bad} out of range for {} frames", frames.len());
        }
        let latents = indices.iter().map(|&i| self.encode_frame(&frames[i])).collect::<Result<Vec<_>>>()?;
        LatentClip::new(latents, indices.to_vec())
    }

    pub fn decode_clip(&self, clip: &LatentClip) -> Result<Vec<Frame>> {
        clip.latents.iter().map(|l| self.decode_latent(l)).collect()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct LatentHeader {
    version: u32,
    shape: [usize; 3],
    patch: usize,
    dtype: String,
}

const LATENT_MAGIC: &[u8; 8] = b"HWMLAT01";

/// Writes a latent as magic, header length, JSON header, then little-endian `f32` values.
pub fn save_latent(path: &Path, latent: &Latent, patch: usize) -> Result<()> {
    let header = LatentHeader { version: 1, shape: [latent.h, latent.w, latent.c], patch, dtype: "f32".into() };
    let header = serde_json::to_vec(&header)?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(LATENT_MAGIC)?;
    f.write_all(&(header.len() as u64).to_le_bytes())?;
    f.write_all(&header)?;
    for v in &latent.data {
        f.write_all(&(*v as f32).to_le_bytes())?;
    }
    f.flush()?;
    Ok(())
}

/// Returns the latent and the patch size recorded in its header.
pub fn load_latent(path: &Path) -> Result<(Latent, usize)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 16 || &bytes[..8] != LATENT_MAGIC {
        bail!(Format, "{}: not a latent file", path.display());
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = bytes.get(16..16 + hlen).ok_or_else(|| Error::Format("truncated latent header".into()))?;
    let header: LatentHeader = serde_json::from_slice(body)?;
    if header.dtype != "f32" {
        bail!(Format, "unsupported latent dtype {}", header.dtype);
    }
    let [h, w, c] = header.shape;
    let raw = &bytes[16 + hlen..];
    if raw.len() != h * w * c * 4 {
        bail!(Format, "latent payload has {} bytes, expected {}", raw.len(), h * w * c * 4);
    }
    let data = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64).collect();
    Ok((Latent { h, w, c, data }, header.patch))
}
