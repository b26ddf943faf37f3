//! Dense real-valued tensors, the `VST` file format, and vector-wise views
//! along the input-channel dimension.
//!
//! Layout conventions follow the usual accelerator mapping: weights are
//! `[K, C, R, S]` (or `[K, C]` for linear layers), activations are
//! `[C, H, W]` (or `[C]`). Row-major storage throughout, so a vector drawn
//! along `C` is a strided gather, never a copy.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Result, VsqError};

/// Dense real-valued tensor, 1 to 4 dimensions, row-major f32 storage.
///
/// Immutable after construction; all views are read-only.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    /// Build a tensor, validating dimensionality, length, and finiteness.
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.is_empty() || shape.len() > 4 {
            return Err(VsqError::InvalidArgument(format!(
                "tensor rank must be 1..=4, got {}",
                shape.len()
            )));
        }
        if shape.contains(&0) {
            return Err(VsqError::InvalidArgument(
                "zero-sized dimension".to_string(),
            ));
        }
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(VsqError::LengthMismatch {
                expected,
                actual: data.len(),
            });
        }
        if let Some(index) = data.iter().position(|x| !x.is_finite()) {
            return Err(VsqError::NonFinite { index });
        }
        Ok(Tensor { shape, data })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    /// Channel-oriented interpretation of the shape (see [`ChannelLayout`]).
    pub fn layout(&self) -> ChannelLayout {
        ChannelLayout::of(&self.shape)
    }

    /// Read a tensor from a `VST v1` file.
    ///
    /// Format: one ASCII header line `VST1 f32 <ndims> <d0> <d1> ...`
    /// terminated by `\n`, followed by the raw little-endian f32 payload in
    /// row-major order.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let io = |source| VsqError::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut reader = BufReader::new(File::open(path).map_err(io)?);

        let mut header = Vec::new();
        let mut byte = [0u8; 1];
        loop {
            let n = reader.read(&mut byte).map_err(io)?;
            if n == 0 {
                return Err(VsqError::MalformedHeader("missing newline".to_string()));
            }
            if byte[0] == b'\n' {
                break;
            }
            if header.len() > 256 {
                return Err(VsqError::MalformedHeader("header too long".to_string()));
            }
            header.push(byte[0]);
        }
        let header = String::from_utf8(header)
            .map_err(|_| VsqError::MalformedHeader("non-utf8 header".to_string()))?;
        let mut fields = header.split_ascii_whitespace();
        match fields.next() {
            Some("VST1") => {}
            other => {
                return Err(VsqError::MalformedHeader(format!(
                    "bad magic {:?}",
                    other.unwrap_or("")
                )))
            }
        }
        match fields.next() {
            Some("f32") => {}
            other => {
                return Err(VsqError::MalformedHeader(format!(
                    "unsupported dtype {:?}",
                    other.unwrap_or("")
                )))
            }
        }
        let ndims: usize = fields
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| VsqError::MalformedHeader("bad ndims".to_string()))?;
        let mut shape = Vec::with_capacity(ndims);
        for _ in 0..ndims {
            let d: usize = fields
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| VsqError::MalformedHeader("bad dimension".to_string()))?;
            shape.push(d);
        }
        if fields.next().is_some() {
            return Err(VsqError::MalformedHeader(
                "trailing header fields".to_string(),
            ));
        }

        let mut payload = Vec::new();
        reader.read_to_end(&mut payload).map_err(io)?;
        if payload.len() % 4 != 0 {
            return Err(VsqError::MalformedHeader(
                "payload not a multiple of 4 bytes".to_string(),
            ));
        }
        let expected: usize = shape.iter().product();
        let actual = payload.len() / 4;
        if actual != expected {
            return Err(VsqError::LengthMismatch { expected, actual });
        }
        let data: Vec<f32> = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        Tensor::new(shape, data)
    }

    /// Write the tensor in `VST v1` format. Bit-exact round trip with
    /// [`Tensor::load`].
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let io = |source| VsqError::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut writer = BufWriter::new(File::create(path).map_err(io)?);
        let dims: Vec<String> = self.shape.iter().map(|d| d.to_string()).collect();
        writeln!(writer, "VST1 f32 {} {}", self.shape.len(), dims.join(" ")).map_err(io)?;
        for x in &self.data {
            writer.write_all(&x.to_le_bytes()).map_err(io)?;
        }
        writer.flush().map_err(io)
    }
}

/// How a shape maps onto (coarse group, channel, spatial) axes.
///
/// Rank decides the role: 4-D and 2-D tensors are weights with the output
/// channel K as the coarse axis; 3-D and 1-D tensors are activations with a
/// single coarse group (per-layer coarse scaling).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChannelLayout {
    /// Number of coarse groups (K for weights, 1 for activations).
    pub coarse: usize,
    /// Size of the vectorized channel dimension C.
    pub channels: usize,
    /// Number of spatial positions per (coarse, channel) pair (R*S or H*W).
    pub spatial: usize,
}

impl ChannelLayout {
    pub fn of(shape: &[usize]) -> ChannelLayout {
        match shape {
            [c] => ChannelLayout {
                coarse: 1,
                channels: *c,
                spatial: 1,
            },
            [k, c] => ChannelLayout {
                coarse: *k,
                channels: *c,
                spatial: 1,
            },
            [c, h, w] => ChannelLayout {
                coarse: 1,
                channels: *c,
                spatial: h * w,
            },
            [k, c, r, s] => ChannelLayout {
                coarse: *k,
                channels: *c,
                spatial: r * s,
            },
            _ => unreachable!("tensor rank validated at construction"),
        }
    }

    /// Flat row-major offset of (coarse k, channel c, spatial sp).
    #[inline]
    pub fn offset(&self, k: usize, c: usize, sp: usize) -> usize {
        (k * self.channels + c) * self.spatial + sp
    }
}

/// Partition of a tensor into V-element vectors along the channel dimension.
///
/// Within each coarse group, vectors are ordered channel-vector-major: vector
/// index `i = cv * spatial + sp` where `cv` is the channel-vector index in
/// `[0, ceil(C/V))` and `sp` the spatial position. The final channel-vector is
/// zero-padded when C is not divisible by V.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Vectorization {
    pub layout: ChannelLayout,
    pub v: usize,
    /// ceil(C / V)
    pub chan_vecs: usize,
    /// Vectors per coarse group: chan_vecs * spatial.
    pub vecs_per_group: usize,
}

impl Vectorization {
    pub fn new(layout: ChannelLayout, v: usize) -> Result<Self> {
        if v == 0 {
            return Err(VsqError::InvalidArgument(
                "vector size V must be >= 1".to_string(),
            ));
        }
        let chan_vecs = layout.channels.div_ceil(v);
        Ok(Vectorization {
            layout,
            v,
            chan_vecs,
            vecs_per_group: chan_vecs * layout.spatial,
        })
    }

    pub fn num_vectors(&self) -> usize {
        self.layout.coarse * self.vecs_per_group
    }

    /// Zero-padded element count in vector (k, i); nonzero only for the last
    /// channel-vector of each channel slice.
    pub fn pad_count(&self, i: usize) -> usize {
        let cv = i / self.layout.spatial;
        if cv + 1 == self.chan_vecs {
            self.chan_vecs * self.v - self.layout.channels
        } else {
            0
        }
    }

    /// Map a flat element index to its (coarse k, vector i, lane j).
    #[inline]
    pub fn locate(&self, flat: usize) -> (usize, usize, usize) {
        let sp = flat % self.layout.spatial;
        let rest = flat / self.layout.spatial;
        let c = rest % self.layout.channels;
        let k = rest / self.layout.channels;
        let cv = c / self.v;
        (k, cv * self.layout.spatial + sp, c % self.v)
    }

    /// Flat vector index of (k, i), row-major over coarse groups.
    #[inline]
    pub fn flat_vector(&self, k: usize, i: usize) -> usize {
        k * self.vecs_per_group + i
    }
}

/// Read-only view of one V-element vector; padded lanes read as exactly 0.0.
#[derive(Debug, Clone, Copy)]
pub struct VectorView<'a> {
    tensor: &'a Tensor,
    vz: Vectorization,
    /// Coarse group index (output channel for weights, 0 for activations).
    pub coarse_index: usize,
    /// Vector index within the coarse group.
    pub vector_index: usize,
    pub pad_count: usize,
}

impl<'a> VectorView<'a> {
    pub fn vector_size(&self) -> usize {
        self.vz.v
    }

    /// Lane j of the vector, 0.0 for padded lanes.
    #[inline]
    pub fn get(&self, j: usize) -> f32 {
        debug_assert!(j < self.vz.v);
        let sp = self.vector_index % self.vz.layout.spatial;
        let cv = self.vector_index / self.vz.layout.spatial;
        let c = cv * self.vz.v + j;
        if c >= self.vz.layout.channels {
            0.0
        } else {
            self.tensor.data()[self.vz.layout.offset(self.coarse_index, c, sp)]
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = f32> + '_ {
        (0..self.vz.v).map(move |j| self.get(j))
    }

    /// Maximum absolute value over all lanes, pads included.
    pub fn abs_max(&self) -> f32 {
        self.iter().fold(0.0f32, |m, x| m.max(x.abs()))
    }
}

/// Partition `t` into vector views along its channel dimension, ordered by
/// (coarse group, vector index) row-major.
pub fn vectorize(t: &Tensor, v: usize) -> Result<Vec<VectorView<'_>>> {
    let vz = Vectorization::new(t.layout(), v)?;
    let mut views = Vec::with_capacity(vz.num_vectors());
    for k in 0..vz.layout.coarse {
        for i in 0..vz.vecs_per_group {
            views.push(VectorView {
                tensor: t,
                vz,
                coarse_index: k,
                vector_index: i,
                pad_count: vz.pad_count(i),
            });
        }
    }
    Ok(views)
}
