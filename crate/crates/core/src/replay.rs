//! Class-balanced exemplar store with budget arithmetic.
//!
//! When full, an insert evicts a uniformly chosen exemplar from the largest
//! class, counting the incoming exemplar towards its class (ties go to the
//! lowest class id). Sampling draws uniformly with replacement.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codebook::IndexMap;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Examples that fit in the memory of `n_r` raw `w_i×h_i` RGB images once the
/// `b×d` codebook is paid for, with one byte per stored index:
/// `floor((n_r·3·w_i·h_i − b·d) / (s·w·h/d))`, clamped at zero.
#[allow(clippy::too_many_arguments)]
pub fn capacity_from_budget(n_r: u64, w_i: u64, h_i: u64, b: u64, d: u64, s: u64, w: u64, h: u64) -> Result<u64> {
    if d == 0 || !(s * w * h).is_multiple_of(d) || s * w * h == 0 {
        return Err(Error::InvalidArgument(format!(
            "feature map {s}×{w}×{h} does not split into chunks of {d}"
        )));
    }
    let numerator = (n_r * 3 * w_i * h_i) as i128 - (b * d) as i128;
    if numerator <= 0 {
        return Ok(0);
    }
    Ok((numerator / (s * w * h / d) as i128) as u64)
}

/// Raw image kept at eight bits per value.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageBytes {
    pub shape: Vec<usize>,
    pub data: Vec<u8>,
}

impl ImageBytes {
    /// Quantizes values in `[0, 1]` to `0..=255`.
    pub fn from_tensor(t: &Tensor) -> Self {
        Self {
            shape: t.shape().to_vec(),
            data: t
                .data()
                .iter()
                .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
                .collect(),
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        let data = self.data.iter().map(|&b| b as f32 / 255.0).collect();
        Tensor::new(self.shape.clone(), data).expect("stored shape matches payload")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    Indices(IndexMap),
    Image(ImageBytes),
    /// Uncompressed activations from an early layer.
    Features(Tensor),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PayloadKind {
    Indices,
    Image,
    Features,
}

impl Payload {
    pub fn kind(&self) -> PayloadKind {
        match self {
            Payload::Indices(_) => PayloadKind::Indices,
            Payload::Image(_) => PayloadKind::Image,
            Payload::Features(_) => PayloadKind::Features,
        }
    }

    /// Storage cost: one byte per index (two for wide indices), one per image
    /// value, four per feature value.
    pub fn byte_size(&self) -> usize {
        match self {
            Payload::Indices(m) => m.byte_size(),
            Payload::Image(img) => img.data.len(),
            Payload::Features(t) => t.len() * 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Exemplar {
    pub label: u32,
    pub payload: Payload,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExemplarStore {
    capacity: usize,
    kind: PayloadKind,
    per_class: BTreeMap<u32, Vec<Exemplar>>,
    /// Classes in order of their first insert.
    seen: Vec<u32>,
    len: usize,
    rng: ChaCha8Rng,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    format_version: u32,
    capacity: usize,
    payload_kind: PayloadKind,
    block_dim: Option<usize>,
    seen_classes: Vec<u32>,
    per_class_counts: BTreeMap<u32, usize>,
    rng: ChaCha8Rng,
}

impl ExemplarStore {
    pub fn new(capacity: usize, kind: PayloadKind, seed: u64) -> Self {
        Self {
            capacity,
            kind,
            per_class: BTreeMap::new(),
            seen: Vec::new(),
            len: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn kind(&self) -> PayloadKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Classes that have ever been inserted, in first-insert order.
    pub fn seen_classes(&self) -> &[u32] {
        &self.seen
    }

    pub fn class_counts(&self) -> BTreeMap<u32, usize> {
        self.seen
            .iter()
            .map(|c| (*c, self.per_class.get(c).map_or(0, Vec::len)))
            .collect()
    }

    pub fn class(&self, label: u32) -> &[Exemplar] {
        self.per_class.get(&label).map_or(&[], Vec::as_slice)
    }

    /// All exemplars, ordered by class id then insertion position.
    pub fn iter(&self) -> impl Iterator<Item = &Exemplar> {
        self.per_class.values().flatten()
    }

    pub fn insert(&mut self, exemplar: Exemplar) -> Result<()> {
        if exemplar.payload.kind() != self.kind {
            return Err(Error::InvalidArgument(format!(
                "{:?} payload offered to a {:?} store",
                exemplar.payload.kind(),
                self.kind
            )));
        }
        let label = exemplar.label;
        if !self.seen.contains(&label) {
            self.seen.push(label);
        }
        if self.capacity == 0 {
            return Ok(());
        }
        if self.len >= self.capacity {
            let victim = self
                .per_class
                .iter()
                .filter(|(_, v)| !v.is_empty())
                .map(|(&c, v)| (c, v.len() + usize::from(c == label)))
                // max_by_key keeps the last maximum; reverse the id order so the
                // lowest id wins ties
                .max_by_key(|&(c, n)| (n, std::cmp::Reverse(c)))
                .map(|(c, _)| c)
                .expect("a full store holds at least one exemplar");
            self.evict_one(victim);
        }
        self.per_class.entry(label).or_default().push(exemplar);
        self.len += 1;
        Ok(())
    }

    fn evict_one(&mut self, class: u32) {
        let bucket = self.per_class.get_mut(&class).expect("class present");
        let i = self.rng.random_range(0..bucket.len());
        bucket.remove(i);
        if bucket.is_empty() {
            self.per_class.remove(&class);
        }
        self.len -= 1;
    }

    /// Per-class quota `floor(n_X / C)`, with the `n_X mod C` remainder slots
    /// going to the earliest-seen classes.
    pub fn quota(&self, class: u32) -> usize {
        let c = self.seen.len();
        if c == 0 {
            return self.capacity;
        }
        let base = self.capacity / c;
        let rem = self.capacity % c;
        match self.seen.iter().position(|&s| s == class) {
            Some(rank) if rank < rem => base + 1,
            _ => base,
        }
    }

    /// Trims every class to its quota by uniform random eviction.
    pub fn rebalance(&mut self) {
        let classes: Vec<u32> = self.per_class.keys().copied().collect();
        for class in classes {
            let quota = self.quota(class);
            while self.per_class.get(&class).map_or(0, Vec::len) > quota {
                self.evict_one(class);
            }
        }
    }

    /// `batch_size` uniform draws with replacement over every stored exemplar.
    pub fn sample_batch(&mut self, batch_size: usize) -> Result<Vec<&Exemplar>> {
        if self.len == 0 {
            return Err(Error::InvalidArgument("cannot sample from an empty store".into()));
        }
        let picks: Vec<usize> = (0..batch_size).map(|_| self.rng.random_range(0..self.len)).collect();
        let flat: Vec<&Exemplar> = self.per_class.values().flatten().collect();
        Ok(picks.into_iter().map(|i| flat[i]).collect())
    }

    /// Payload bytes only; codebook and bookkeeping are excluded.
    pub fn stored_bytes(&self) -> usize {
        self.iter().map(|e| e.payload.byte_size()).sum()
    }

    /// Writes `records.bin` and the `buffer.json` sidecar into `dir`.
    ///
    /// Index payloads are `CRIM` records. Image and feature payloads are a
    /// little-endian `u32` label followed by a `CRTN` tensor (images are stored
    /// as their 8-bit values).
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let rec_path = dir.join("records.bin");
        let file = File::create(&rec_path).map_err(|e| Error::io(&rec_path, e))?;
        let mut w = BufWriter::new(file);
        let mut block_dim = None;
        for e in self.iter() {
            let res = match &e.payload {
                Payload::Indices(m) => {
                    block_dim = Some(m.geometry().block_dim);
                    m.write_record(&mut w, e.label)
                }
                Payload::Image(img) => {
                    let t = Tensor::new(img.shape.clone(), img.data.iter().map(|&b| b as f32).collect())?;
                    w.write_all(&e.label.to_le_bytes()).and_then(|_| t.write_to(&mut w))
                }
                Payload::Features(t) => w.write_all(&e.label.to_le_bytes()).and_then(|_| t.write_to(&mut w)),
            };
            res.map_err(|err| Error::io(&rec_path, err))?;
        }
        w.flush().map_err(|e| Error::io(&rec_path, e))?;
        let sidecar = Sidecar {
            format_version: 1,
            capacity: self.capacity,
            payload_kind: self.kind,
            block_dim,
            seen_classes: self.seen.clone(),
            per_class_counts: self.class_counts(),
            rng: self.rng.clone(),
        };
        let side_path = dir.join("buffer.json");
        let text = serde_json::to_string_pretty(&sidecar)?;
        fs::write(&side_path, text).map_err(|e| Error::io(&side_path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let side_path = dir.join("buffer.json");
        let text = fs::read_to_string(&side_path).map_err(|e| Error::io(&side_path, e))?;
        let side: Sidecar = serde_json::from_str(&text).map_err(|e| Error::format(&side_path, e.to_string()))?;
        if side.format_version != 1 {
            return Err(Error::format(&side_path, "unsupported format version"));
        }
        let rec_path = dir.join("records.bin");
        let file = File::open(&rec_path).map_err(|e| Error::io(&rec_path, e))?;
        let mut r = BufReader::new(file);
        let total: usize = side.per_class_counts.values().sum();
        let mut per_class: BTreeMap<u32, Vec<Exemplar>> = BTreeMap::new();
        for _ in 0..total {
            let exemplar = match side.payload_kind {
                PayloadKind::Indices => {
                    let d = side
                        .block_dim
                        .ok_or_else(|| Error::format(&side_path, "missing block_dim"))?;
                    let (m, label) = IndexMap::read_record(&mut r, d, &rec_path)?;
                    Exemplar {
                        label,
                        payload: Payload::Indices(m),
                    }
                }
                kind => {
                    let mut lb = [0u8; 4];
                    r.read_exact(&mut lb)
                        .map_err(|e| Error::format(&rec_path, e.to_string()))?;
                    let t = Tensor::read_from(&mut r, &rec_path)?;
                    let payload = if kind == PayloadKind::Image {
                        Payload::Image(ImageBytes {
                            shape: t.shape().to_vec(),
                            data: t.data().iter().map(|&v| v as u8).collect(),
                        })
                    } else {
                        Payload::Features(t)
                    };
                    Exemplar {
                        label: u32::from_le_bytes(lb),
                        payload,
                    }
                }
            };
            per_class.entry(exemplar.label).or_default().push(exemplar);
        }
        for (class, count) in &side.per_class_counts {
            if per_class.get(class).map_or(0, Vec::len) != *count {
                return Err(Error::format(
                    &rec_path,
                    format!("class {class} count disagrees with sidecar"),
                ));
            }
        }
        Ok(Self {
            capacity: side.capacity,
            kind: side.payload_kind,
            per_class,
            seen: side.seen_classes,
            len: total,
            rng: side.rng,
        })
    }
}
