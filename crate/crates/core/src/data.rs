//! Sequences, padded batches, normalization and the `.swn` dataset file.
//!
//! `.swn` layout, little-endian: magic `"SWN1"`, `u32` sequence count, then per
//! sequence `u32 T`, `u32 d` and `T * d` `f32` values row-major. Values are
//! widened to `f64` on read.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ByteReader;
use crate::tensor::Tensor;

pub const SWN_MAGIC: &[u8; 4] = b"SWN1";

/// One sequence of `len` frames, each `dim` wide, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    frames: Vec<f64>,
    dim: usize,
}

impl Sequence {
    pub fn new(frames: Vec<f64>, dim: usize) -> Result<Self> {
        if dim == 0 || !frames.len().is_multiple_of(dim) {
            return Err(Error::shape(format!("{} values do not form frames of width {dim}", frames.len())));
        }
        Ok(Sequence { frames, dim })
    }

    pub fn len(&self) -> usize {
        self.frames.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        &self.frames[t * self.dim..(t + 1) * self.dim]
    }

    pub fn values(&self) -> &[f64] {
        &self.frames
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.frames
    }

    /// Consecutive windows of `len` frames; a trailing partial window is dropped.
    pub fn segments(&self, len: usize) -> Vec<Sequence> {
        self.frames
            .chunks_exact(len * self.dim)
            .map(|c| Sequence {
                frames: c.to_vec(),
                dim: self.dim,
            })
            .collect()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub sequences: Vec<Sequence>,
}

impl Dataset {
    pub fn new(sequences: Vec<Sequence>) -> Self {
        Dataset { sequences }
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    /// Common frame width; errors on an empty or ragged-width dataset.
    pub fn frame_dim(&self) -> Result<usize> {
        let first = self.sequences.first().ok_or_else(|| Error::Empty("dataset has no sequences".into()))?;
        if self.sequences.iter().any(|s| s.dim != first.dim) {
            return Err(Error::shape("sequences have different frame widths"));
        }
        Ok(first.dim)
    }

    pub fn max_len(&self) -> usize {
        self.sequences.iter().map(Sequence::len).max().unwrap_or(0)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(SWN_MAGIC);
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        for s in &self.sequences {
            out.extend_from_slice(&(s.len() as u32).to_le_bytes());
            out.extend_from_slice(&(s.dim as u32).to_le_bytes());
            for &v in &s.frames {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Dataset> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(4, "magic")? != SWN_MAGIC {
            return Err(Error::Format {
                offset: 0,
                message: "not a .swn file (bad magic)".into(),
            });
        }
        let count = r.u32("sequence count")?;
        let mut sequences = Vec::with_capacity((count as usize).min(1 << 16));
        for i in 0..count {
            let at = r.pos as u64;
            let t = r.u32("sequence length")? as usize;
            let d = r.u32("frame width")? as usize;
            let n = t
                .checked_mul(d)
                .filter(|&n| d > 0 && t > 0 && n <= (bytes.len() - r.pos) / 4)
                .ok_or_else(|| Error::Format {
                    offset: at,
                    message: format!("sequence {i}: extents {t} x {d} are zero or exceed the file"),
                })?;
            let raw = r.take(n * 4, "frame values")?;
            let frames = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect();
            sequences.push(Sequence { frames, dim: d });
        }
        if r.pos != bytes.len() {
            return Err(Error::Format {
                offset: r.pos as u64,
                message: "trailing bytes after last sequence".into(),
            });
        }
        Ok(Dataset { sequences })
    }

    pub fn write_swn(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn read_swn(path: impl AsRef<Path>) -> Result<Dataset> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Dataset::decode(&bytes)
    }

    /// Every sequence cut into windows of `len` frames.
    pub fn segmented(&self, len: usize) -> Result<Dataset> {
        let shortest = self.sequences.iter().map(Sequence::len).min().unwrap_or(0);
        if len == 0 || len > shortest {
            return Err(Error::config(format!("segment length {len} outside 1..={shortest}")));
        }
        Ok(Dataset {
            sequences: self.sequences.iter().flat_map(|s| s.segments(len)).collect(),
        })
    }

    /// Deterministic split into (train, validation) with `fraction` held out.
    pub fn split(&self, fraction: f64, seed: u64) -> (Dataset, Dataset) {
        use rand::seq::SliceRandom;
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut crate::rng::keyed_rng(&[seed, 0x57117]));
        let n_val = ((self.len() as f64 * fraction).round() as usize).min(self.len().saturating_sub(1));
        let (val, train) = idx.split_at(n_val);
        let pick = |ix: &[usize]| {
            let mut ix = ix.to_vec();
            ix.sort_unstable();
            Dataset {
                sequences: ix.iter().map(|&i| self.sequences[i].clone()).collect(),
            }
        };
        (pick(train), pick(val))
    }
}

/// Cuts a raw signal into non-overlapping frames of `frame_size` samples.
pub fn frame_signal(samples: &[f64], frame_size: usize) -> Result<Sequence> {
    if frame_size == 0 {
        return Err(Error::config("frame_size must be at least 1"));
    }
    let n = samples.len() / frame_size;
    if n == 0 {
        return Err(Error::Empty(format!("{} samples do not fill one frame of {frame_size}", samples.len())));
    }
    Sequence::new(samples[..n * frame_size].to_vec(), frame_size)
}

/// `B` sequences padded to a common length, with a validity mask.
///
/// Frames past each sequence's length are zero. `ids` identify the sequences
/// for keyed noise generation.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceBatch {
    frames: Tensor,
    lengths: Vec<usize>,
    ids: Vec<u64>,
}

impl SequenceBatch {
    pub fn from_sequences(seqs: &[&Sequence], ids: Vec<u64>) -> Result<Self> {
        let first = seqs.first().ok_or_else(|| Error::Empty("batch has no sequences".into()))?;
        let dim = first.dim;
        if seqs.iter().any(|s| s.dim != dim) {
            return Err(Error::shape("batch mixes frame widths"));
        }
        if ids.len() != seqs.len() {
            return Err(Error::shape("one id per sequence required"));
        }
        let t_max = seqs.iter().map(|s| s.len()).max().unwrap_or(0).max(1);
        let mut values = vec![0.0; seqs.len() * t_max * dim];
        for (b, s) in seqs.iter().enumerate() {
            values[b * t_max * dim..b * t_max * dim + s.frames.len()].copy_from_slice(&s.frames);
        }
        Ok(SequenceBatch {
            frames: Tensor::new([seqs.len(), t_max, dim], values)?,
            lengths: seqs.iter().map(|s| s.len()).collect(),
            ids,
        })
    }

    /// Batch from a raw `[B, T, d]` tensor. Lengths may be shorter than `T`
    /// (including zero); frames beyond them are ignored by every consumer.
    pub fn from_parts(frames: Tensor, lengths: Vec<usize>, ids: Vec<u64>) -> Result<Self> {
        let s = frames.shape();
        if s.len() != 3 || lengths.len() != s[0] || ids.len() != s[0] || lengths.iter().any(|&l| l > s[1]) {
            return Err(Error::shape(format!("batch frames {s:?} with lengths {lengths:?}")));
        }
        Ok(SequenceBatch { frames, lengths, ids })
    }

    pub fn batch_size(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn time(&self) -> usize {
        self.frames.shape()[1]
    }

    pub fn frame_dim(&self) -> usize {
        self.frames.shape()[2]
    }

    pub fn frames(&self) -> &Tensor {
        &self.frames
    }

    pub fn frames_mut(&mut self) -> &mut Tensor {
        &mut self.frames
    }

    pub fn lengths(&self) -> &[usize] {
        &self.lengths
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    /// `[B * T]` ones inside each sequence, zeros past its end.
    pub fn mask(&self) -> Vec<f64> {
        let t = self.time();
        self.lengths
            .iter()
            .flat_map(|&len| (0..t).map(move |i| if i < len { 1.0 } else { 0.0 }))
            .collect()
    }

    /// Frames delayed by one step with a zero first frame: row `t` holds `x_{t-1}`.
    pub fn shifted_frames(&self) -> Tensor {
        let (b, t, d) = (self.batch_size(), self.time(), self.frame_dim());
        let src = self.frames.values();
        let mut out = vec![0.0; b * t * d];
        for bi in 0..b {
            let valid = self.lengths[bi].min(t);
            for ti in 1..t.min(valid + 1) {
                let (o, s) = ((bi * t + ti) * d, (bi * t + ti - 1) * d);
                out[o..o + d].copy_from_slice(&src[s..s + d]);
            }
        }
        Tensor::new([b, t, d], out).expect("same extent as frames")
    }

    /// The frames with everything past each length zeroed.
    pub fn masked_frames(&self) -> Tensor {
        let d = self.frame_dim();
        let mask = self.mask();
        let values = self
            .frames
            .values()
            .chunks(d)
            .zip(&mask)
            .flat_map(|(row, &m)| row.iter().map(move |&v| if m > 0.0 { v } else { 0.0 }))
            .collect();
        Tensor::new(self.frames.shape().to_vec(), values).expect("same extent as frames")
    }

    /// Sequence `b` truncated to its length.
    pub fn sequence(&self, b: usize) -> Sequence {
        let (t, d) = (self.time(), self.frame_dim());
        let start = b * t * d;
        Sequence {
            frames: self.frames.values()[start..start + self.lengths[b] * d].to_vec(),
            dim: d,
        }
    }

    pub fn to_dataset(&self) -> Dataset {
        Dataset {
            sequences: (0..self.batch_size()).map(|b| self.sequence(b)).collect(),
        }
    }
}

/// Per-dimension standardization fitted on a training split.
///
/// Dimensions whose values are exactly {0, 1} (both present) are treated as
/// binary channels and pass through unchanged.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub exempt: Vec<bool>,
}

pub const MIN_STD: f64 = 1e-8;

impl NormStats {
    pub fn fit(data: &Dataset) -> Result<NormStats> {
        let d = data.frame_dim()?;
        let mut n = 0usize;
        let mut sum = vec![0.0; d];
        let mut zeros = vec![false; d];
        let mut ones = vec![false; d];
        let mut binary = vec![true; d];
        for s in &data.sequences {
            for row in s.frames.chunks(d) {
                n += 1;
                for j in 0..d {
                    sum[j] += row[j];
                    match row[j] {
                        0.0 => zeros[j] = true,
                        1.0 => ones[j] = true,
                        _ => binary[j] = false,
                    }
                }
            }
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let mut sq = vec![0.0; d];
        for s in &data.sequences {
            for row in s.frames.chunks(d) {
                for j in 0..d {
                    sq[j] += (row[j] - mean[j]).powi(2);
                }
            }
        }
        let exempt: Vec<bool> = (0..d).map(|j| binary[j] && zeros[j] && ones[j]).collect();
        Ok(NormStats {
            mean: (0..d).map(|j| if exempt[j] { 0.0 } else { mean[j] }).collect(),
            std: (0..d)
                .map(|j| if exempt[j] { 1.0 } else { (sq[j] / n as f64).sqrt().max(MIN_STD) })
                .collect(),
            exempt,
        })
    }

    /// Identity transform for `d` dimensions.
    pub fn identity(d: usize) -> NormStats {
        NormStats {
            mean: vec![0.0; d],
            std: vec![1.0; d],
            exempt: vec![true; d],
        }
    }

    /// `sum_j ln std_j`: log-Jacobian of denormalizing one frame.
    pub fn log_det_per_frame(&self) -> f64 {
        self.std.iter().map(|s| s.ln()).sum()
    }

    fn map(&self, data: &Dataset, f: impl Fn(f64, usize) -> f64) -> Result<Dataset> {
        let d = self.mean.len();
        let mut out = data.clone();
        for s in &mut out.sequences {
            if s.dim != d {
                return Err(Error::shape(format!("normalizer fitted on width {d}, data has {}", s.dim)));
            }
            for row in s.frames.chunks_mut(d) {
                for (j, v) in row.iter_mut().enumerate() {
                    *v = f(*v, j);
                }
            }
        }
        Ok(out)
    }

    pub fn normalize(&self, data: &Dataset) -> Result<Dataset> {
        self.map(data, |v, j| if self.exempt[j] { v } else { (v - self.mean[j]) / self.std[j] })
    }

    pub fn denormalize(&self, data: &Dataset) -> Result<Dataset> {
        self.map(data, |v, j| if self.exempt[j] { v } else { v * self.std[j] + self.mean[j] })
    }
}

/// Provenance record written next to generated `.swn` files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub generator: String,
    pub n: usize,
    pub t: usize,
    pub seed: u64,
    pub parameters: serde_json::Value,
}

impl Sidecar {
    pub fn path_for(swn: &Path) -> std::path::PathBuf {
        let mut p = swn.as_os_str().to_owned();
        p.push(".json");
        p.into()
    }

    pub fn write(&self, swn: &Path) -> Result<()> {
        let path = Sidecar::path_for(swn);
        let text = serde_json::to_string_pretty(self).expect("sidecar serializes");
        std::fs::write(&path, text + "\n").map_err(|e| Error::io(path, e))
    }
}
