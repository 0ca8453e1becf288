//! Task schedules for the class-instance and class-iid protocols, a synthetic
//! video-clip generator, and manifest loading for real data.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Tensor,
    pub class_id: u32,
    pub object_id: u32,
    pub instance_id: u32,
    pub frame_index: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Protocol {
    /// Whole clips in random order, frames in temporal order.
    ClassInstance,
    /// Every sample of the task shuffled.
    ClassIid,
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Protocol::ClassInstance => "class_instance",
            Protocol::ClassIid => "class_iid",
        })
    }
}

impl FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "class_instance" => Ok(Protocol::ClassInstance),
            "class_iid" => Ok(Protocol::ClassIid),
            _ => Err(Error::InvalidArgument(format!(
                "unknown protocol `{s}` (class_instance, class_iid)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Task {
    pub classes: Vec<u32>,
    /// Indices into the sample list, in presentation order.
    pub order: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaskSchedule {
    pub protocol: Protocol,
    pub first_task_epochs: usize,
    pub tasks: Vec<Task>,
}

/// Durstenfeld shuffle drawing `j` uniformly from `0..=i` for `i` descending.
pub fn fisher_yates<T, R: Rng + ?Sized>(items: &mut [T], rng: &mut R) {
    for i in (1..items.len()).rev() {
        let j = rng.random_range(0..=i);
        items.swap(i, j);
    }
}

/// Splits the distinct class ids into tasks of `classes_per_task` (last task
/// takes the remainder) after a seeded shuffle.
pub fn partition_classes<R: Rng + ?Sized>(
    class_ids: &[u32],
    classes_per_task: usize,
    rng: &mut R,
) -> Result<Vec<Vec<u32>>> {
    let mut classes: Vec<u32> = class_ids.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    if classes_per_task == 0 || classes.len() < classes_per_task {
        return Err(Error::InvalidArgument(format!(
            "{} classes cannot fill tasks of {classes_per_task}",
            classes.len()
        )));
    }
    fisher_yates(&mut classes, rng);
    Ok(classes.chunks(classes_per_task).map(<[u32]>::to_vec).collect())
}

/// Clips (unique object × instance) in uniformly random order; frames within a
/// clip ascending.
pub fn order_class_instance<R: Rng + ?Sized>(samples: &[Sample], indices: &[usize], rng: &mut R) -> Result<Vec<usize>> {
    let mut clips: BTreeMap<(u32, u32), Vec<(u32, usize)>> = BTreeMap::new();
    let mut seen = HashSet::new();
    for &i in indices {
        let s = &samples[i];
        if !seen.insert((s.object_id, s.instance_id, s.frame_index)) {
            return Err(Error::Data(format!(
                "duplicate frame {} of object {} instance {}",
                s.frame_index, s.object_id, s.instance_id
            )));
        }
        clips
            .entry((s.object_id, s.instance_id))
            .or_default()
            .push((s.frame_index, i));
    }
    let mut clips: Vec<Vec<(u32, usize)>> = clips.into_values().collect();
    fisher_yates(&mut clips, rng);
    Ok(clips
        .into_iter()
        .flat_map(|mut frames| {
            frames.sort_unstable();
            frames.into_iter().map(|(_, i)| i)
        })
        .collect())
}

/// Uniform permutation of the task's samples.
pub fn order_class_iid<R: Rng + ?Sized>(indices: &[usize], rng: &mut R) -> Vec<usize> {
    let mut out = indices.to_vec();
    fisher_yates(&mut out, rng);
    out
}

fn order_task<R: Rng + ?Sized>(
    protocol: Protocol,
    samples: &[Sample],
    indices: &[usize],
    rng: &mut R,
) -> Result<Vec<usize>> {
    match protocol {
        Protocol::ClassInstance => order_class_instance(samples, indices, rng),
        Protocol::ClassIid => Ok(order_class_iid(indices, rng)),
    }
}

/// Partitions the classes present in `samples` into tasks and orders each
/// task under `protocol`. The first task is repeated `first_task_epochs`
/// times, re-ordered for every epoch; later tasks present each sample once.
pub fn build_tasks(
    samples: &[Sample],
    classes_per_task: usize,
    protocol: Protocol,
    first_task_epochs: usize,
    seed: u64,
) -> Result<TaskSchedule> {
    if first_task_epochs == 0 {
        return Err(Error::InvalidArgument("first task needs at least one epoch".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let class_ids: Vec<u32> = samples.iter().map(|s| s.class_id).collect();
    let groups = partition_classes(&class_ids, classes_per_task, &mut rng)?;
    let mut tasks = Vec::with_capacity(groups.len());
    for (t, classes) in groups.into_iter().enumerate() {
        let members: Vec<usize> = (0..samples.len())
            .filter(|&i| classes.contains(&samples[i].class_id))
            .collect();
        let epochs = if t == 0 { first_task_epochs } else { 1 };
        let mut order = Vec::with_capacity(members.len() * epochs);
        for _ in 0..epochs {
            order.extend(order_task(protocol, samples, &members, &mut rng)?);
        }
        tasks.push(Task { classes, order });
    }
    Ok(TaskSchedule {
        protocol,
        first_task_epochs,
        tasks,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub classes: usize,
    /// Id of the first generated class; ids are consecutive from here.
    pub class_offset: u32,
    pub objects_per_class: usize,
    pub instances_per_object: usize,
    /// Trailing instances of every object held out for testing.
    pub test_instances_per_object: usize,
    pub frames_per_instance: usize,
    pub channels: usize,
    pub image_side: usize,
    /// Side of the coarse grid that patterns and drift live on.
    pub grid: usize,
    /// AR(1) coefficient of the per-clip drift.
    pub rho: f32,
    pub object_scale: f32,
    pub drift_scale: f32,
    pub texture_scale: f32,
    pub noise: f32,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            classes: 10,
            class_offset: 0,
            objects_per_class: 3,
            instances_per_object: 5,
            test_instances_per_object: 2,
            frames_per_instance: 10,
            channels: 3,
            image_side: 32,
            grid: 4,
            rho: 0.9,
            object_scale: 0.15,
            drift_scale: 0.15,
            texture_scale: 0.2,
            noise: 0.05,
            seed: 7,
        }
    }
}

impl SynthConfig {
    fn validate(&self) -> Result<()> {
        let dims = [
            self.classes,
            self.objects_per_class,
            self.instances_per_object,
            self.frames_per_instance,
            self.channels,
            self.image_side,
            self.grid,
        ];
        if dims.contains(&0) {
            return Err(Error::InvalidArgument("synthetic dimensions must be positive".into()));
        }
        if self.test_instances_per_object >= self.instances_per_object {
            return Err(Error::InvalidArgument(
                "every object needs at least one training instance".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.rho) {
            return Err(Error::InvalidArgument(format!("rho {} outside [0, 1)", self.rho)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

/// Stationary AR(1) series: `x_t = ρ x_{t−1} + sqrt(1−ρ²)·scale·ε_t`, with
/// `x_0 ~ N(0, scale²)`. Returns `steps` vectors of `dims` values.
pub fn ar1_drift<R: Rng + ?Sized>(rho: f32, scale: f32, steps: usize, dims: usize, rng: &mut R) -> Vec<Vec<f32>> {
    let innov = (1.0 - rho * rho).sqrt() * scale;
    let mut cur: Vec<f32> = (0..dims)
        .map(|_| scale * Distribution::<f32>::sample(&StandardNormal, rng))
        .collect();
    let mut out = Vec::with_capacity(steps);
    for t in 0..steps {
        if t > 0 {
            for v in &mut cur {
                let e: f32 = StandardNormal.sample(rng);
                *v = rho * *v + innov * e;
            }
        }
        out.push(cur.clone());
    }
    out
}

/// Bilinear upsampling of a `c×g×g` grid to `c×side×side`.
fn upsample(grid: &[f32], c: usize, g: usize, side: usize) -> Vec<f32> {
    let coord = |p: usize| -> (usize, usize, f32) {
        let u = ((p as f32 + 0.5) * g as f32 / side as f32 - 0.5).clamp(0.0, (g - 1) as f32);
        let i0 = u.floor() as usize;
        let i1 = (i0 + 1).min(g - 1);
        (i0, i1, u - i0 as f32)
    };
    let mut out = Vec::with_capacity(c * side * side);
    for ch in 0..c {
        let plane = &grid[ch * g * g..(ch + 1) * g * g];
        for y in 0..side {
            let (y0, y1, fy) = coord(y);
            for x in 0..side {
                let (x0, x1, fx) = coord(x);
                let top = plane[y0 * g + x0] * (1.0 - fx) + plane[y0 * g + x1] * fx;
                let bot = plane[y1 * g + x0] * (1.0 - fx) + plane[y1 * g + x1] * fx;
                out.push(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    out
}

fn class_rng(seed: u64, class_id: u32) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(class_id as u64 + 1);
    rng
}

/// Generates temporally correlated clips: each class has a coarse base pattern
/// and a fine texture, each object perturbs the base, and each clip adds an
/// AR(1) drift on the coarse grid plus white pixel noise. Values are clamped
/// to `[0, 1]`. Trailing instances of every object form the test split.
pub fn synth_stream_generate(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let (c, g, side) = (cfg.channels, cfg.grid, cfg.image_side);
    let cells = c * g * g;
    let pixels = c * side * side;
    let mut train = Vec::new();
    let mut test = Vec::new();
    for ci in 0..cfg.classes {
        let class_id = cfg.class_offset + ci as u32;
        let mut rng = class_rng(cfg.seed, class_id);
        let base: Vec<f32> = (0..cells).map(|_| rng.random::<f32>()).collect();
        let texture: Vec<f32> = (0..pixels)
            .map(|_| cfg.texture_scale * (rng.random::<f32>() - 0.5))
            .collect();
        for o in 0..cfg.objects_per_class {
            let object_id = class_id * cfg.objects_per_class as u32 + o as u32;
            let object: Vec<f32> = base
                .iter()
                .map(|&b| b + cfg.object_scale * Distribution::<f32>::sample(&StandardNormal, &mut rng))
                .collect();
            for inst in 0..cfg.instances_per_object {
                let drift = ar1_drift(cfg.rho, cfg.drift_scale, cfg.frames_per_instance, cells, &mut rng);
                let held_out = inst >= cfg.instances_per_object - cfg.test_instances_per_object;
                for (frame, d) in drift.iter().enumerate() {
                    let coarse: Vec<f32> = object.iter().zip(d).map(|(a, b)| a + b).collect();
                    let smooth = upsample(&coarse, c, g, side);
                    let data: Vec<f32> = smooth
                        .iter()
                        .zip(&texture)
                        .map(|(s, t)| {
                            let n: f32 = StandardNormal.sample(&mut rng);
                            (s + t + cfg.noise * n).clamp(0.0, 1.0)
                        })
                        .collect();
                    let sample = Sample {
                        image: Tensor::new(vec![c, side, side], data)?,
                        class_id,
                        object_id,
                        instance_id: inst as u32,
                        frame_index: frame as u32,
                    };
                    if held_out {
                        test.push(sample);
                    } else {
                        train.push(sample);
                    }
                }
            }
        }
    }
    Ok(Dataset { train, test })
}

pub const MANIFEST_HEADER: [&str; 5] = ["path", "class_id", "object_id", "instance_id", "frame_index"];

/// Parses a `path,class_id,object_id,instance_id,frame_index` CSV. Paths are
/// relative to the manifest's directory and point at `CRTN` images with values
/// in `[0, 1]`. When `frames_per_instance` is given, frame indices must be
/// below it.
pub fn load_manifest(path: &Path, frames_per_instance: Option<u32>) -> Result<Vec<Sample>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let root = path.parent().unwrap_or_else(|| Path::new("."));
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| Error::format(path, e.to_string()))?
        .clone();
    if !headers.is_empty() && headers.iter().ne(MANIFEST_HEADER.iter().copied()) {
        return Err(Error::format(
            path,
            format!("line 1: expected header `{}`", MANIFEST_HEADER.join(",")),
        ));
    }
    let mut samples = Vec::new();
    let mut shape: Option<Vec<usize>> = None;
    for record in reader.records() {
        let record = record.map_err(|e| Error::format(path, e.to_string()))?;
        let line = record.position().map_or(0, |p| p.line());
        let bad = |msg: String| Error::format(path, format!("line {line}: {msg}"));
        if record.len() != 5 {
            return Err(bad(format!("expected 5 fields, got {}", record.len())));
        }
        let field = |i: usize| -> Result<u32> {
            record[i].parse::<u32>().map_err(|_| {
                bad(format!(
                    "{} `{}` is not a non-negative integer",
                    MANIFEST_HEADER[i], &record[i]
                ))
            })
        };
        let (class_id, object_id, instance_id, frame_index) = (field(1)?, field(2)?, field(3)?, field(4)?);
        if let Some(limit) = frames_per_instance {
            if frame_index >= limit {
                return Err(bad(format!(
                    "frame_index {frame_index} outside clips of {limit} frames"
                )));
            }
        }
        let image = Tensor::load(&root.join(&record[0]))?;
        if image.shape().len() != 3 {
            return Err(bad(format!("image {:?} is not c×w×h", image.shape())));
        }
        match &shape {
            Some(s) if s.as_slice() != image.shape() => {
                return Err(bad(format!(
                    "image shape {:?} differs from earlier {s:?}",
                    image.shape()
                )))
            }
            None => shape = Some(image.shape().to_vec()),
            _ => {}
        }
        if image.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(bad("image values outside [0, 1]".into()));
        }
        samples.push(Sample {
            image,
            class_id,
            object_id,
            instance_id,
            frame_index,
        });
    }
    Ok(samples)
}
