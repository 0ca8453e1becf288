//! Memory-block codebook: chunk-wise quantization of feature maps into block
//! indices, reconstruction from indices, and gradient routing into blocks.
//!
//! A feature map of shape `s×w×h` is cut along the channel axis into `s/d`
//! slots. At every `(slot, x, y)` the `d` channel values form a chunk, and the
//! chunk is replaced by the block whose direction it matches best.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const INDEX_MAGIC: &[u8; 4] = b"CRIM";

/// Fraction of entries zeroed by [`InitStrategy::MatchedSparse`].
pub const MATCHED_ZERO_FRACTION: f32 = 0.64;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Geometry {
    pub channels: usize,
    pub width: usize,
    pub height: usize,
    pub block_dim: usize,
}

impl Geometry {
    pub fn new(channels: usize, width: usize, height: usize, block_dim: usize) -> Result<Self> {
        if channels == 0 || width == 0 || height == 0 || block_dim == 0 {
            return Err(Error::InvalidArgument("geometry extents must be positive".into()));
        }
        if !channels.is_multiple_of(block_dim) {
            return Err(Error::InvalidArgument(format!(
                "block dimension {block_dim} does not divide {channels} channels"
            )));
        }
        Ok(Self {
            channels,
            width,
            height,
            block_dim,
        })
    }

    pub fn for_feature_shape(shape: &[usize], block_dim: usize) -> Result<Self> {
        match *shape {
            [s, w, h] => Self::new(s, w, h, block_dim),
            _ => Err(Error::Shape(format!("feature map must be s×w×h, got {shape:?}"))),
        }
    }

    pub fn chunk_slots(&self) -> usize {
        self.channels / self.block_dim
    }

    /// Number of chunks (and stored indices) per feature map.
    pub fn positions(&self) -> usize {
        self.chunk_slots() * self.width * self.height
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.channels, self.width, self.height]
    }

    /// Flat offsets of the `d` values making up chunk `p` (in `(f, x, y)` order).
    fn chunk_offsets(&self, p: usize) -> impl Iterator<Item = usize> {
        let plane = self.width * self.height;
        let f = p / plane;
        let xy = p % plane;
        let d = self.block_dim;
        (0..d).map(move |i| (f * d + i) * plane + xy)
    }
}

/// Storage width of one block index.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IndexWidth {
    U8,
    U16,
}

impl IndexWidth {
    /// Eight bits while every index fits, sixteen otherwise.
    pub fn for_blocks(n: usize) -> Self {
        if n <= 256 {
            IndexWidth::U8
        } else {
            IndexWidth::U16
        }
    }

    pub fn bytes(self) -> usize {
        match self {
            IndexWidth::U8 => 1,
            IndexWidth::U16 => 2,
        }
    }
}

/// Selected block index at every chunk position of one feature map.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IndexMap {
    indices: Vec<u16>,
    width: IndexWidth,
    geometry: Geometry,
}

impl IndexMap {
    pub fn new(indices: Vec<u16>, width: IndexWidth, geometry: Geometry) -> Result<Self> {
        if indices.len() != geometry.positions() {
            return Err(Error::Shape(format!(
                "{} indices for {} chunk positions",
                indices.len(),
                geometry.positions()
            )));
        }
        if width == IndexWidth::U8 && indices.iter().any(|&k| k > u8::MAX as u16) {
            return Err(Error::InvalidArgument("index exceeds 8-bit width".into()));
        }
        Ok(Self {
            indices,
            width,
            geometry,
        })
    }

    pub fn indices(&self) -> &[u16] {
        &self.indices
    }

    pub fn geometry(&self) -> Geometry {
        self.geometry
    }

    pub fn index_width(&self) -> IndexWidth {
        self.width
    }

    /// Block selected at chunk slot `f`, spatial position `(x, y)`.
    pub fn get(&self, f: usize, x: usize, y: usize) -> u16 {
        let g = &self.geometry;
        self.indices[(f * g.width + x) * g.height + y]
    }

    /// Stored footprint: one index per chunk position.
    pub fn byte_size(&self) -> usize {
        self.indices.len() * self.width.bytes()
    }

    /// `CRIM` record: magic, u8 index width, u32 slots, u32 w, u32 h, u32 label,
    /// then the packed little-endian indices.
    pub fn write_record<W: Write>(&self, w: &mut W, label: u32) -> std::io::Result<()> {
        let g = &self.geometry;
        w.write_all(INDEX_MAGIC)?;
        w.write_all(&[self.width.bytes() as u8])?;
        for v in [g.chunk_slots(), g.width, g.height] {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
        w.write_all(&label.to_le_bytes())?;
        match self.width {
            IndexWidth::U8 => {
                let packed: Vec<u8> = self.indices.iter().map(|&k| k as u8).collect();
                w.write_all(&packed)
            }
            IndexWidth::U16 => {
                for &k in &self.indices {
                    w.write_all(&k.to_le_bytes())?;
                }
                Ok(())
            }
        }
    }

    /// Reads one record. The block dimension is not stored in the record and
    /// comes from the codebook the indices refer to.
    pub fn read_record<R: Read>(r: &mut R, block_dim: usize, origin: &Path) -> Result<(Self, u32)> {
        let short = |e: std::io::Error| Error::format(origin, format!("truncated index record: {e}"));
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(short)?;
        if &magic != INDEX_MAGIC {
            return Err(Error::format(origin, "bad index-map magic"));
        }
        let mut wb = [0u8; 1];
        r.read_exact(&mut wb).map_err(short)?;
        let width = match wb[0] {
            1 => IndexWidth::U8,
            2 => IndexWidth::U16,
            other => return Err(Error::format(origin, format!("index width {other}"))),
        };
        let mut header = [0u32; 4];
        for v in &mut header {
            let mut b = [0u8; 4];
            r.read_exact(&mut b).map_err(short)?;
            *v = u32::from_le_bytes(b);
        }
        let [slots, w, h, label] = header.map(|v| v as usize);
        let geometry =
            Geometry::new(slots * block_dim, w, h, block_dim).map_err(|e| Error::format(origin, e.to_string()))?;
        let mut raw = vec![0u8; geometry.positions() * width.bytes()];
        r.read_exact(&mut raw).map_err(short)?;
        let indices = match width {
            IndexWidth::U8 => raw.iter().map(|&b| b as u16).collect(),
            IndexWidth::U16 => raw.chunks_exact(2).map(|b| u16::from_le_bytes([b[0], b[1]])).collect(),
        };
        Ok((Self::new(indices, width, geometry)?, label as u32))
    }
}

/// The `n×d` matrix of memory blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    blocks: Tensor,
    pub frozen: bool,
}

impl Codebook {
    pub fn new(blocks: Tensor) -> Result<Self> {
        let &[n, d] = blocks.shape() else {
            return Err(Error::Shape(format!("codebook must be n×d, got {:?}", blocks.shape())));
        };
        if n > u16::MAX as usize + 1 {
            return Err(Error::InvalidArgument(format!("{n} blocks exceed 16-bit indices")));
        }
        let book = Self { blocks, frozen: false };
        for k in 0..n {
            if book.row(k).iter().all(|&v| v == 0.0) {
                return Err(Error::InvalidArgument(format!("block {k} is the zero vector")));
            }
        }
        let _ = d;
        Ok(book)
    }

    pub fn n(&self) -> usize {
        self.blocks.shape()[0]
    }

    pub fn d(&self) -> usize {
        self.blocks.shape()[1]
    }

    pub fn index_width(&self) -> IndexWidth {
        IndexWidth::for_blocks(self.n())
    }

    pub fn row(&self, k: usize) -> &[f32] {
        let d = self.d();
        &self.blocks.data()[k * d..(k + 1) * d]
    }

    pub fn blocks(&self) -> &Tensor {
        &self.blocks
    }

    pub fn blocks_mut(&mut self) -> &mut Tensor {
        &mut self.blocks
    }

    /// Accumulated gradient of block `k` (zeros if none yet).
    pub fn row_grad(&self, k: usize) -> Vec<f32> {
        let d = self.d();
        match self.blocks.grad() {
            Some(g) => g[k * d..(k + 1) * d].to_vec(),
            None => vec![0.0; d],
        }
    }

    /// Every block scaled to unit L2 norm, row-major.
    fn normalized_rows(&self) -> Result<Vec<f32>> {
        let d = self.d();
        let mut out = Vec::with_capacity(self.blocks.len());
        for k in 0..self.n() {
            let row = self.row(k);
            let norm = row.iter().map(|v| v * v).sum::<f32>().sqrt();
            if norm == 0.0 || !norm.is_finite() {
                return Err(Error::InvalidArgument(format!("block {k} has norm {norm}")));
            }
            out.extend(row.iter().map(|v| v / norm));
        }
        debug_assert_eq!(out.len(), self.n() * d);
        Ok(out)
    }

    /// Scores `γ_k = <chunk, B_k / ||B_k||>` for every block. The chunk itself
    /// is not normalised; the argmax is the same either way.
    pub fn similarity(&self, chunk: &[f32]) -> Result<Vec<f32>> {
        if chunk.len() != self.d() {
            return Err(Error::Shape(format!(
                "chunk of length {} against blocks of length {}",
                chunk.len(),
                self.d()
            )));
        }
        let unit = self.normalized_rows()?;
        Ok(unit
            .chunks_exact(self.d())
            .map(|row| row.iter().zip(chunk).map(|(a, b)| a * b).sum())
            .collect())
    }

    /// Replaces every chunk of `z` with its best-matching block.
    ///
    /// Returns the selected indices and the reconstruction, whose chunks are
    /// verbatim (unnormalised) copies of the chosen rows. Ties go to the lowest
    /// block index.
    pub fn quantize(&self, z: &Tensor, geom: &Geometry) -> Result<(IndexMap, Tensor)> {
        self.check_geometry(geom)?;
        if z.shape() != geom.shape() {
            return Err(Error::Shape(format!(
                "feature map {:?} does not match geometry {:?}",
                z.shape(),
                geom.shape()
            )));
        }
        let d = self.d();
        let unit = self.normalized_rows()?;
        let zs = z.data();
        let mut chunk = vec![0.0f32; d];
        let mut indices = Vec::with_capacity(geom.positions());
        let mut z_tilde = vec![0.0f32; zs.len()];
        for p in 0..geom.positions() {
            for (c, off) in chunk.iter_mut().zip(geom.chunk_offsets(p)) {
                *c = zs[off];
            }
            let mut best = 0usize;
            let mut best_score = f32::NEG_INFINITY;
            for (k, row) in unit.chunks_exact(d).enumerate() {
                let score: f32 = row.iter().zip(&chunk).map(|(a, b)| a * b).sum();
                if score > best_score {
                    best_score = score;
                    best = k;
                }
            }
            for (v, off) in self.row(best).iter().zip(geom.chunk_offsets(p)) {
                z_tilde[off] = *v;
            }
            indices.push(best as u16);
        }
        let map = IndexMap::new(indices, self.index_width(), *geom)?;
        Ok((map, Tensor::new(geom.shape().to_vec(), z_tilde)?))
    }

    /// Rebuilds the feature map by concatenating the referenced blocks.
    pub fn reconstruct(&self, m: &IndexMap) -> Result<Tensor> {
        let geom = m.geometry();
        self.check_geometry(&geom)?;
        let n = self.n();
        let mut out = vec![0.0f32; geom.channels * geom.width * geom.height];
        for (p, &k) in m.indices().iter().enumerate() {
            if k as usize >= n {
                return Err(Error::Data(format!("stored index {k} outside codebook of {n} blocks")));
            }
            for (v, off) in self.row(k as usize).iter().zip(geom.chunk_offsets(p)) {
                out[off] = *v;
            }
        }
        Tensor::new(geom.shape().to_vec(), out)
    }

    /// Adds each chunk of `grad_z_tilde` to the gradient of the block selected
    /// at that position. The selection itself is treated as a constant.
    pub fn route_gradients(&mut self, m: &IndexMap, grad_z_tilde: &Tensor) -> Result<()> {
        let geom = m.geometry();
        self.check_geometry(&geom)?;
        if grad_z_tilde.shape() != geom.shape() {
            return Err(Error::Shape(format!(
                "gradient {:?} does not match geometry {:?}",
                grad_z_tilde.shape(),
                geom.shape()
            )));
        }
        let d = self.d();
        let n = self.n();
        let gz = grad_z_tilde.data();
        let grad = self.blocks.grad_mut();
        for (p, &k) in m.indices().iter().enumerate() {
            let k = k as usize;
            if k >= n {
                return Err(Error::Data(format!("stored index {k} outside codebook")));
            }
            for (i, off) in geom.chunk_offsets(p).enumerate() {
                grad[k * d + i] += gz[off];
            }
        }
        Ok(())
    }

    /// Gradient step on the blocks unless frozen; gradients are cleared either way.
    pub fn sgd_step(&mut self, learning_rate: f32) -> Result<()> {
        if !self.frozen && self.blocks.grad().is_some() {
            let (w, g) = self.blocks.data_and_grad_mut();
            for (wv, gv) in w.iter_mut().zip(g.iter()) {
                *wv -= learning_rate * gv;
            }
            self.blocks.check_finite("codebook")?;
        }
        self.blocks.zero_grad();
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.blocks.zero_grad();
    }

    fn check_geometry(&self, geom: &Geometry) -> Result<()> {
        if geom.block_dim != self.d() {
            return Err(Error::Shape(format!(
                "geometry chunk length {} but blocks have length {}",
                geom.block_dim,
                self.d()
            )));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut t = self.blocks.clone();
        t.zero_grad();
        t.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::new(Tensor::load(path)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InitStrategy {
    /// Values drawn from the pooled nonzero feature-map values, then sparsified.
    MatchedSparse,
    /// As `MatchedSparse` without the zeroing.
    DenseMatched,
    Normal,
    Uniform,
}

impl InitStrategy {
    pub fn needs_reference(self) -> bool {
        matches!(self, InitStrategy::MatchedSparse | InitStrategy::DenseMatched)
    }
}

impl fmt::Display for InitStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InitStrategy::MatchedSparse => "matched_sparse",
            InitStrategy::DenseMatched => "dense_matched",
            InitStrategy::Normal => "normal",
            InitStrategy::Uniform => "uniform",
        })
    }
}

impl FromStr for InitStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "matched_sparse" => Ok(InitStrategy::MatchedSparse),
            "dense_matched" => Ok(InitStrategy::DenseMatched),
            "normal" => Ok(InitStrategy::Normal),
            "uniform" => Ok(InitStrategy::Uniform),
            _ => Err(Error::InvalidArgument(format!(
                "unknown codebook init `{s}` (matched_sparse, dense_matched, normal, uniform)"
            ))),
        }
    }
}

/// Builds an `n×d` codebook. `zero_fraction` only applies to `MatchedSparse`;
/// rows that come out all-zero are redrawn.
pub fn init_codebook<R: Rng + ?Sized>(
    strategy: InitStrategy,
    n: usize,
    d: usize,
    reference_feature_maps: Option<&[Tensor]>,
    zero_fraction: f32,
    rng: &mut R,
) -> Result<Codebook> {
    if n == 0 || d == 0 {
        return Err(Error::InvalidArgument("codebook needs n >= 1 and d >= 1".into()));
    }
    if !(0.0..1.0).contains(&zero_fraction) {
        return Err(Error::InvalidArgument(format!(
            "zero fraction {zero_fraction} outside [0, 1)"
        )));
    }
    let pool: Vec<f32> = match (strategy.needs_reference(), reference_feature_maps) {
        (false, _) => Vec::new(),
        (true, None) => {
            return Err(Error::InvalidArgument(format!(
                "{strategy} initialisation needs reference feature maps"
            )))
        }
        (true, Some(maps)) => {
            let pool: Vec<f32> = maps
                .iter()
                .flat_map(|t| t.data().iter().copied())
                .filter(|&v| v != 0.0)
                .collect();
            if pool.is_empty() {
                return Err(Error::InvalidArgument(
                    "reference feature maps contain no nonzero values".into(),
                ));
            }
            pool
        }
    };
    let draw = |rng: &mut R| -> f32 {
        match strategy {
            InitStrategy::MatchedSparse => {
                let v = pool[rng.random_range(0..pool.len())];
                if rng.random::<f32>() < zero_fraction {
                    0.0
                } else {
                    v
                }
            }
            InitStrategy::DenseMatched => pool[rng.random_range(0..pool.len())],
            InitStrategy::Normal => StandardNormal.sample(rng),
            InitStrategy::Uniform => rng.random::<f32>(),
        }
    };
    let mut data = Vec::with_capacity(n * d);
    for _ in 0..n {
        loop {
            let row: Vec<f32> = (0..d).map(|_| draw(rng)).collect();
            if row.iter().any(|&v| v != 0.0) {
                data.extend(row);
                break;
            }
        }
    }
    Codebook::new(Tensor::new(vec![n, d], data)?)
}
