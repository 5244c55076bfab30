//! Procedural moving-shapes sequences and the `STSQ` dataset container.
//!
//! ```text
//! "STSQ" version:u32 n:u32 T:u16 H:u16 W:u16 C:u8 reserved:[0;7]   (26 bytes, little-endian)
//! n*T*H*W*C bytes, order [n][T][H][W][C], byte = round(255 * value)
//! ```

use std::path::Path;

use cms_tensor::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::io::{write_atomic, Reader};
use crate::seed::derive;

pub const MAGIC: [u8; 4] = *b"STSQ";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 26;
const WHAT: &str = "dataset";

/// Split keys fed to the seed derivation; distinct keys give disjoint streams.
const TRAIN_STREAM: u64 = 0x0074_7261_696e;
const TEST_STREAM: u64 = 0x7465_7374;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Square,
    Cross,
    Disk,
}

/// One moving object. `position` is the real-valued top-left corner of its
/// bounding box as `(x, y)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ShapeSpec {
    pub kind: ShapeKind,
    pub size: usize,
    pub intensity: f64,
    pub position: [f64; 2],
    pub velocity: [f64; 2],
}

impl ShapeSpec {
    /// Moves by one frame. A coordinate leaving `[0, frame - size]` is
    /// reflected back inside and that velocity component negates.
    pub fn advance(&mut self, frame: usize) {
        let max = (frame - self.size) as f64;
        for axis in 0..2 {
            let mut p = self.position[axis] + self.velocity[axis];
            if p < 0.0 {
                p = -p;
                self.velocity[axis] = -self.velocity[axis];
            } else if p > max {
                p = 2.0 * max - p;
                self.velocity[axis] = -self.velocity[axis];
            }
            self.position[axis] = p.clamp(0.0, max);
        }
    }

    fn covers(&self, dy: usize, dx: usize) -> bool {
        let s = self.size;
        match self.kind {
            ShapeKind::Square => true,
            ShapeKind::Cross => {
                let t = (s / 3).max(1);
                let lo = (s - t) / 2;
                (lo..lo + t).contains(&dy) || (lo..lo + t).contains(&dx)
            }
            ShapeKind::Disk => {
                let c = (s as f64 - 1.0) / 2.0;
                let r = s as f64 / 2.0;
                let (y, x) = (dy as f64 - c, dx as f64 - c);
                y * y + x * x <= r * r
            }
        }
    }

    /// Draws onto a `frame × frame` image at the nearest pixel, keeping the
    /// brighter value where shapes overlap.
    pub fn rasterize(&self, frame: usize, image: &mut [f64]) {
        let x0 = self.position[0].round() as usize;
        let y0 = self.position[1].round() as usize;
        for dy in 0..self.size {
            for dx in 0..self.size {
                if self.covers(dy, dx) {
                    let px = &mut image[(y0 + dy) * frame + x0 + dx];
                    *px = px.max(self.intensity);
                }
            }
        }
    }
}

/// Geometry of generated sequences.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Geometry {
    pub frame_size: usize,
    pub shapes: usize,
    pub frames: usize,
}

impl Geometry {
    pub fn max_shape_size(&self) -> usize {
        self.frame_size / 4
    }

    pub fn min_shape_size(&self) -> usize {
        3.max(self.frame_size / 8)
    }

    pub fn validate(&self) -> Result<()> {
        if self.frame_size < 12 || self.frame_size > u16::MAX as usize {
            return Err(Error::Invalid(format!(
                "frame size {} must lie in [12, 65535] so every shape fits four times across",
                self.frame_size
            )));
        }
        if self.frames == 0 || self.frames > u16::MAX as usize {
            return Err(Error::Invalid(format!(
                "sequence length {} out of range",
                self.frames
            )));
        }
        if self.shapes == 0 {
            return Err(Error::Invalid("at least one shape is required".into()));
        }
        Ok(())
    }

    /// Draws a shape with a random kind, size, intensity, start and velocity.
    pub fn random_shape(&self, rng: &mut impl Rng) -> ShapeSpec {
        let kind = [ShapeKind::Square, ShapeKind::Cross, ShapeKind::Disk][rng.gen_range(0..3)];
        let size = rng.gen_range(self.min_shape_size()..=self.max_shape_size());
        let max = (self.frame_size - size) as f64;
        let vmax = (self.frame_size / 16).max(1) as f64;
        let speed = if vmax > 1.0 {
            rng.gen_range(1.0..=vmax)
        } else {
            1.0
        };
        let angle = rng.gen_range(0.0..std::f64::consts::TAU);
        ShapeSpec {
            kind,
            size,
            intensity: rng.gen_range(0.5..=1.0),
            position: [rng.gen_range(0.0..=max), rng.gen_range(0.0..=max)],
            velocity: [speed * angle.cos(), speed * angle.sin()],
        }
    }
}

/// Renders `shapes` over `frames` steps as `[T, 1, H, W]`, advancing after
/// every frame.
pub fn render_sequence(shapes: &mut [ShapeSpec], frame_size: usize, frames: usize) -> Tensor {
    let plane = frame_size * frame_size;
    let mut data = vec![0.0; frames * plane];
    for image in data.chunks_mut(plane) {
        for s in shapes.iter_mut() {
            s.rasterize(frame_size, image);
            s.advance(frame_size);
        }
    }
    Tensor::new(&[frames, 1, frame_size, frame_size], data).expect("positive geometry")
}

/// One sequence, fully determined by `seed`.
pub fn generate_sequence(seed: u64, geometry: &Geometry) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shapes: Vec<ShapeSpec> = (0..geometry.shapes)
        .map(|_| geometry.random_shape(&mut rng))
        .collect();
    render_sequence(&mut shapes, geometry.frame_size, geometry.frames)
}

/// A collection of equally shaped sequences held as quantised bytes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    pub len: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// `[n][T][H][W][C]` bytes.
    pub bytes: Vec<u8>,
}

pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

impl Dataset {
    fn sequence_len(&self) -> usize {
        self.frames * self.height * self.width * self.channels
    }

    /// Builds a dataset from `[T, C, H, W]` sequences with values in `[0, 1]`.
    pub fn from_sequences(sequences: &[Tensor]) -> Result<Self> {
        let first = sequences.first().ok_or(Error::Invalid(
            "a dataset needs at least one sequence".into(),
        ))?;
        let shape = first.shape().to_vec();
        if shape.len() != 4 {
            return Err(Error::Invalid(format!(
                "sequence shape {shape:?} is not [T, C, H, W]"
            )));
        }
        let (t, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let mut bytes = Vec::with_capacity(sequences.len() * first.len());
        for s in sequences {
            if s.shape() != shape.as_slice() {
                return Err(Error::Invalid(format!(
                    "sequence shape {:?} differs from {shape:?}",
                    s.shape()
                )));
            }
            let d = s.data();
            for ti in 0..t {
                for y in 0..h {
                    for x in 0..w {
                        for ci in 0..c {
                            bytes.push(quantize(d[((ti * c + ci) * h + y) * w + x]));
                        }
                    }
                }
            }
        }
        Ok(Self {
            len: sequences.len(),
            frames: t,
            height: h,
            width: w,
            channels: c,
            bytes,
        })
    }

    /// Raw bytes of sequence `index`.
    pub fn raw(&self, index: usize) -> Result<&[u8]> {
        if index >= self.len {
            return Err(Error::IndexOutOfRange {
                index,
                len: self.len,
            });
        }
        let n = self.sequence_len();
        Ok(&self.bytes[index * n..(index + 1) * n])
    }

    /// Sequence `index` as `[T, C, H, W]` with values `byte / 255`.
    pub fn sequence(&self, index: usize) -> Result<Tensor> {
        let raw = self.raw(index)?;
        let (t, c, h, w) = (self.frames, self.channels, self.height, self.width);
        let data = Tensor::from_fn(&[t, c, h, w], |i| {
            let (x, rest) = (i % w, i / w);
            let (y, rest) = (rest % h, rest / h);
            let (ci, ti) = (rest % c, rest / c);
            raw[((ti * h + y) * w + x) * c + ci] as f64 / 255.0
        });
        Ok(data)
    }

    /// Stacks sequences into `[B, T, C, H, W]` and splits after `t_in`
    /// frames into observed and future parts.
    pub fn batch(&self, indices: &[usize], t_in: usize) -> Result<SequenceBatch> {
        if t_in == 0 || t_in >= self.frames {
            return Err(Error::Invalid(format!(
                "t_in {t_in} must lie in [1, {}) for {}-frame sequences",
                self.frames, self.frames
            )));
        }
        let mut data = Vec::with_capacity(indices.len() * self.sequence_len());
        for &i in indices {
            data.extend_from_slice(self.sequence(i)?.data());
        }
        let frames = Tensor::new(
            &[
                indices.len(),
                self.frames,
                self.channels,
                self.height,
                self.width,
            ],
            data,
        )?;
        Ok(SequenceBatch {
            frames,
            t_in,
            t_out: self.frames - t_in,
        })
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.bytes.len());
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.len as u32).to_le_bytes());
        for d in [self.frames, self.height, self.width] {
            out.extend_from_slice(&(d as u16).to_le_bytes());
        }
        out.push(self.channels as u8);
        out.extend_from_slice(&[0; 7]);
        out.extend_from_slice(&self.bytes);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, WHAT);
        let magic = r.array::<4>()?;
        if magic != MAGIC {
            return Err(Error::BadMagic {
                what: WHAT,
                found: magic,
            });
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Version {
                what: WHAT,
                found: version,
                expected: VERSION,
            });
        }
        let len = r.u32()? as usize;
        let frames = r.u16()? as usize;
        let height = r.u16()? as usize;
        let width = r.u16()? as usize;
        let channels = r.u8()? as usize;
        let reserved_at = r.offset();
        if r.array::<7>()? != [0; 7] {
            return Err(Error::Malformed {
                what: WHAT,
                offset: reserved_at,
                msg: "reserved header bytes are not zero".into(),
            });
        }
        if len == 0 || frames == 0 || height == 0 || width == 0 || channels == 0 {
            return Err(Error::Malformed {
                what: WHAT,
                offset: 8,
                msg: format!("empty geometry n={len} T={frames} H={height} W={width} C={channels}"),
            });
        }
        let body = len * frames * height * width * channels;
        let bytes = r.bytes(body)?.to_vec();
        r.finish()?;
        Ok(Self {
            len,
            frames,
            height,
            width,
            channels,
            bytes,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.encode())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

/// Frames `[B, T, C, H, W]` with the observed/future split point.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceBatch {
    pub frames: Tensor,
    pub t_in: usize,
    pub t_out: usize,
}

impl SequenceBatch {
    fn range(&self, start: usize, count: usize) -> Tensor {
        let s = self.frames.shape();
        let per = s[2] * s[3] * s[4];
        let mut data = Vec::with_capacity(s[0] * count * per);
        for b in 0..s[0] {
            let base = (b * s[1] + start) * per;
            data.extend_from_slice(&self.frames.data()[base..base + count * per]);
        }
        Tensor::new(&[s[0], count, s[2], s[3], s[4]], data).expect("sub-range of a valid batch")
    }

    pub fn observed(&self) -> Tensor {
        self.range(0, self.t_in)
    }

    pub fn future(&self) -> Tensor {
        self.range(self.t_in, self.t_out)
    }
}

/// Generates the train and test splits from disjoint seed streams.
pub fn build_dataset(
    seed: u64,
    n_train: usize,
    n_test: usize,
    geometry: &Geometry,
) -> Result<(Dataset, Dataset)> {
    geometry.validate()?;
    if n_train == 0 || n_test == 0 {
        return Err(Error::Invalid(
            "both splits need at least one sequence".into(),
        ));
    }
    let split = |stream: u64, n: usize| {
        let seqs: Vec<Tensor> = (0..n)
            .map(|i| generate_sequence(derive(seed, &[stream, i as u64]), geometry))
            .collect();
        Dataset::from_sequences(&seqs)
    };
    Ok((split(TRAIN_STREAM, n_train)?, split(TEST_STREAM, n_test)?))
}

/// Deterministic epoch-wise shuffled index stream.
#[derive(Clone, Debug)]
pub struct BatchOrder {
    len: usize,
    seed: u64,
    epoch: u64,
    order: Vec<usize>,
    pos: usize,
}

impl BatchOrder {
    pub fn new(len: usize, seed: u64) -> Self {
        let mut s = Self {
            len,
            seed,
            epoch: 0,
            order: Vec::new(),
            pos: 0,
        };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        self.order = (0..self.len).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive(self.seed, &[self.epoch]));
        self.order.shuffle(&mut rng);
        self.pos = 0;
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    /// The next `batch` indices; an epoch boundary starts a fresh permutation.
    pub fn next_batch(&mut self, batch: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(batch);
        while out.len() < batch {
            if self.pos == self.len {
                self.epoch += 1;
                self.reshuffle();
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}
