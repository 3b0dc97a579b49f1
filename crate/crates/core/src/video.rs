//! Dense video clips and the `VVID` file format.
//!
//! Layout: magic `VVID`, `u8` version (1), `u32` LE `T, H, W, C`, then
//! `T·H·W·C` little-endian `f32` values in THWC order.

use std::io::{Read, Write};
use std::path::Path;

use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"VVID";
pub const VERSION: u8 = 1;

/// `T×H×W×C` frames with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl VideoClip {
    pub fn new(
        frames: usize,
        height: usize,
        width: usize,
        channels: usize,
        data: Vec<f32>,
    ) -> Result<Self> {
        if data.len() != frames * height * width * channels {
            return Err(Error::Data(format!(
                "{} values for a {frames}x{height}x{width}x{channels} clip",
                data.len()
            )));
        }
        Ok(Self {
            frames,
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(frames: usize, height: usize, width: usize, channels: usize) -> Self {
        Self {
            frames,
            height,
            width,
            channels,
            data: vec![0.0; frames * height * width * channels],
        }
    }

    pub fn frame_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        let n = self.frame_len();
        &self.data[t * n..(t + 1) * n]
    }

    pub fn frame_mut(&mut self, t: usize) -> &mut [f32] {
        let n = self.frame_len();
        &mut self.data[t * n..(t + 1) * n]
    }

    #[inline]
    pub fn at(&self, t: usize, y: usize, x: usize, c: usize) -> f32 {
        self.data[((t * self.height + y) * self.width + x) * self.channels + c]
    }

    pub fn reversed(&self) -> Self {
        let mut out = self.clone();
        for t in 0..self.frames {
            out.frame_mut(t)
                .copy_from_slice(self.frame(self.frames - 1 - t));
        }
        out
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&[VERSION])?;
        for d in [self.frames, self.height, self.width, self.channels] {
            let d =
                u32::try_from(d).map_err(|_| Error::Data(format!("dimension {d} exceeds u32")))?;
            w.write_all(&d.to_le_bytes())?;
        }
        let mut bytes = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&bytes)?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut head = [0u8; 21];
        r.read_exact(&mut head)
            .map_err(|e| Error::Data(format!("truncated VVID header: {e}")))?;
        if &head[..4] != MAGIC {
            return Err(Error::Data("missing VVID magic".into()));
        }
        if head[4] != VERSION {
            return Err(Error::Data(format!("unsupported VVID version {}", head[4])));
        }
        let dim =
            |i: usize| u32::from_le_bytes(head[5 + 4 * i..9 + 4 * i].try_into().unwrap()) as usize;
        let (t, h, w, c) = (dim(0), dim(1), dim(2), dim(3));
        let n = t
            .checked_mul(h)
            .and_then(|x| x.checked_mul(w))
            .and_then(|x| x.checked_mul(c))
            .ok_or_else(|| Error::Data("VVID dimensions overflow".into()))?;
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        if bytes.len() != n * 4 {
            return Err(Error::Data(format!(
                "VVID payload has {} bytes, expected {}",
                bytes.len(),
                n * 4
            )));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        Self::new(t, h, w, c, data)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_to(std::io::BufWriter::new(f))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = std::fs::File::open(path)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        Self::read_from(std::io::BufReader::new(f))
    }
}
