//! Independent reference implementations used as test oracles.
#![allow(dead_code)]

use crumb::codebook::{init_codebook, Codebook, Geometry, IndexMap, InitStrategy};
use crumb::eval::AccuracyMatrix;
use crumb::nn::{LayerKind, Network, NetworkSpec};
use crumb::stream::{fisher_yates, synth_stream_generate, Dataset, SynthConfig, TaskSchedule};
use crumb::trainer::{
    compute_loss, offline_task, pretrain, stream_task, BatchLog, CodebookConfig, Learner, LossWeights, Mode,
    StreamState, TrainConfig,
};
use crumb::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect()).unwrap()
}

/// conv(2->4, 3x3, pad 1) -> relu -> maxpool 2 | linear(36->5) -> relu -> linear(5->3)
pub fn tiny_spec() -> NetworkSpec {
    NetworkSpec {
        input_shape: vec![2, 6, 6],
        layers: vec![
            "conv2d 2 4 3 1 1".parse().unwrap(),
            LayerKind::Relu,
            "maxpool2d 2 2".parse().unwrap(),
            "linear 36 5".parse().unwrap(),
            LayerKind::Relu,
            "linear 5 3".parse().unwrap(),
        ],
        split_index: 3,
    }
}

/// Strided conv and global average pooling in the classifier.
pub fn strided_spec() -> NetworkSpec {
    NetworkSpec {
        input_shape: vec![1, 7, 7],
        layers: vec![
            "conv2d 1 4 3 2 1".parse().unwrap(),
            LayerKind::Relu,
            "conv2d 4 6 2 1 0".parse().unwrap(),
            "global_avg_pool".parse().unwrap(),
            "linear 6 3".parse().unwrap(),
        ],
        split_index: 3,
    }
}

/// Reference forward pass in f64 over layers `from..to`, reading the
/// network's f32 parameters. Also returns the discrete decisions taken (relu
/// signs and pooling winners) so callers can detect kinks.
pub fn ref_forward(net: &Network, input: &[f64], from: usize, to: usize) -> (Vec<f64>, Vec<usize>) {
    let mut x = input.to_vec();
    let mut decisions = Vec::new();
    for l in from..to {
        let layer = &net.layers()[l];
        let shape = net.shape_at(l).to_vec();
        let p = |i: usize| -> Vec<f64> { layer.params[i].value.data().iter().map(|&v| v as f64).collect() };
        x = match layer.kind {
            LayerKind::Conv2d {
                in_channels: c,
                out_channels: oc,
                kernel: k,
                stride: s,
                padding: pad,
            } => {
                let (h, w) = (shape[1] as isize, shape[2] as isize);
                let oh = ((h + 2 * pad as isize - k as isize) / s as isize + 1) as usize;
                let ow = ((w + 2 * pad as isize - k as isize) / s as isize + 1) as usize;
                let (wt, b) = (p(0), p(1));
                let mut y = vec![0.0; oc * oh * ow];
                for o in 0..oc {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut acc = b[o];
                            for ci in 0..c {
                                for ky in 0..k {
                                    for kx in 0..k {
                                        let iy = (oy * s + ky) as isize - pad as isize;
                                        let ix = (ox * s + kx) as isize - pad as isize;
                                        if iy < 0 || ix < 0 || iy >= h || ix >= w {
                                            continue;
                                        }
                                        let xi = (ci as isize * h + iy) * w + ix;
                                        acc += wt[((o * c + ci) * k + ky) * k + kx] * x[xi as usize];
                                    }
                                }
                            }
                            y[(o * oh + oy) * ow + ox] = acc;
                        }
                    }
                }
                y
            }
            LayerKind::Relu => x
                .iter()
                .map(|&v| {
                    decisions.push(usize::from(v > 0.0));
                    v.max(0.0)
                })
                .collect(),
            LayerKind::MaxPool2d { kernel: k, stride: s } => {
                let (c, h, w) = (shape[0], shape[1], shape[2]);
                let oh = (h - k) / s + 1;
                let ow = (w - k) / s + 1;
                let mut y = Vec::with_capacity(c * oh * ow);
                for ch in 0..c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut best = (f64::NEG_INFINITY, 0);
                            for ky in 0..k {
                                for kx in 0..k {
                                    let i = (ch * h + oy * s + ky) * w + ox * s + kx;
                                    if x[i] > best.0 {
                                        best = (x[i], i);
                                    }
                                }
                            }
                            decisions.push(best.1);
                            y.push(best.0);
                        }
                    }
                }
                y
            }
            LayerKind::GlobalAvgPool => {
                let plane = shape[1] * shape[2];
                x.chunks(plane)
                    .map(|ch| ch.iter().sum::<f64>() / plane as f64)
                    .collect()
            }
            LayerKind::Linear {
                in_features: i,
                out_features: o,
            } => {
                let (wt, b) = (p(0), p(1));
                (0..o)
                    .map(|r| b[r] + (0..i).map(|j| wt[r * i + j] * x[j]).sum::<f64>())
                    .collect()
            }
        };
    }
    (x, decisions)
}

pub fn ref_cross_entropy(logits: &[f64], target: usize) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    lse - logits[target]
}

/// Brute-force block selection: for every chunk slot `f` and cell `(x, y)`,
/// the block maximising `<chunk, B_k / ||B_k||>` in f32 arithmetic, lowest
/// index on ties. Output order is `f`, then `x`, then `y`.
pub fn brute_force_indices(z: &Tensor, book: &[Vec<f32>], d: usize) -> Vec<u16> {
    let (s, w, h) = (z.shape()[0], z.shape()[1], z.shape()[2]);
    let zs = z.data();
    let mut unit = Vec::new();
    for row in book {
        let mut sq = 0.0f32;
        for v in row {
            sq += v * v;
        }
        let norm = sq.sqrt();
        unit.push(row.iter().map(|v| v / norm).collect::<Vec<f32>>());
    }
    let mut out = Vec::new();
    for f in 0..s / d {
        for x in 0..w {
            for y in 0..h {
                let mut best = 0;
                let mut best_score = f32::NEG_INFINITY;
                for (k, u) in unit.iter().enumerate() {
                    let mut score = 0.0f32;
                    for i in 0..d {
                        score += u[i] * zs[((f * d + i) * w + x) * h + y];
                    }
                    if score > best_score {
                        best_score = score;
                        best = k;
                    }
                }
                out.push(best as u16);
            }
        }
    }
    out
}

/// Reference reconstruction: copies row `m[f, x, y]` into the chunk.
pub fn ref_reconstruct(m: &IndexMap, book: &Codebook) -> Vec<f32> {
    let g: Geometry = m.geometry();
    let mut out = vec![0.0f32; g.channels * g.width * g.height];
    for f in 0..g.chunk_slots() {
        for x in 0..g.width {
            for y in 0..g.height {
                let row = book.row(m.get(f, x, y) as usize);
                for i in 0..g.block_dim {
                    out[((f * g.block_dim + i) * g.width + x) * g.height + y] = row[i];
                }
            }
        }
    }
    out
}

/// Where a scalar parameter lives.
#[derive(Clone, Copy, Debug)]
pub enum Coord {
    Net { layer: usize, param: usize, index: usize },
    Block { index: usize },
}

pub fn read_coord(net: &Network, book: &Codebook, c: Coord) -> f32 {
    match c {
        Coord::Net { layer, param, index } => net.layers()[layer].params[param].value.data()[index],
        Coord::Block { index } => book.blocks().data()[index],
    }
}

pub fn write_coord(net: &mut Network, book: &mut Codebook, c: Coord, v: f32) {
    match c {
        Coord::Net { layer, param, index } => net.layers_mut()[layer].params[param].value.data_mut()[index] = v,
        Coord::Block { index } => book.blocks_mut().data_mut()[index] = v,
    }
}

pub fn analytic_grad(net: &Network, book: &Codebook, c: Coord) -> f64 {
    match c {
        Coord::Net { layer, param, index } => net.layers()[layer].params[param]
            .value
            .grad()
            .map_or(0.0, |g| g[index] as f64),
        Coord::Block { index } => book.blocks().grad().map_or(0.0, |g| g[index] as f64),
    }
}

/// `α·CE(P(F(x))) + β·CE(P(z̃))` in f64, where `z̃` is rebuilt from the
/// fixed selection `m`. Returns the loss and every discrete decision.
pub fn ref_loss(
    net: &Network,
    book: &Codebook,
    image: &[f64],
    m: &IndexMap,
    target: usize,
    alpha: f64,
    beta: f64,
) -> (f64, Vec<usize>) {
    let split = net.split_index();
    let end = net.layers().len();
    let (z, mut dec) = ref_forward(net, image, 0, split);
    let (logits, d2) = ref_forward(net, &z, split, end);
    dec.extend(d2);
    let zt: Vec<f64> = ref_reconstruct(m, book).into_iter().map(f64::from).collect();
    let (logits_q, d3) = ref_forward(net, &zt, split, end);
    dec.extend(d3);
    (
        alpha * ref_cross_entropy(&logits, target) + beta * ref_cross_entropy(&logits_q, target),
        dec,
    )
}

/// Central difference of `ref_loss` at `c`, dividing by the step actually
/// representable in f32. `None` when the perturbation flips a relu or a pool
/// winner.
#[allow(clippy::too_many_arguments)]
pub fn central_difference(
    net: &mut Network,
    book: &mut Codebook,
    image: &[f64],
    m: &IndexMap,
    target: usize,
    alpha: f64,
    beta: f64,
    c: Coord,
    eps: f32,
) -> Option<f64> {
    let orig = read_coord(net, book, c);
    let (_, base) = ref_loss(net, book, image, m, target, alpha, beta);
    let hi = orig + eps;
    let lo = orig - eps;
    write_coord(net, book, c, hi);
    let (l_hi, d_hi) = ref_loss(net, book, image, m, target, alpha, beta);
    write_coord(net, book, c, lo);
    let (l_lo, d_lo) = ref_loss(net, book, image, m, target, alpha, beta);
    write_coord(net, book, c, orig);
    if d_hi != base || d_lo != base {
        return None;
    }
    Some((l_hi - l_lo) / (hi as f64 - lo as f64))
}

/// Every scalar coordinate of the network and codebook.
pub fn all_coords(net: &Network, book: &Codebook) -> Vec<Coord> {
    let mut out = Vec::new();
    for (l, layer) in net.layers().iter().enumerate() {
        for (p, param) in layer.params.iter().enumerate() {
            for i in 0..param.value.len() {
                out.push(Coord::Net {
                    layer: l,
                    param: p,
                    index: i,
                });
            }
        }
    }
    for i in 0..book.blocks().len() {
        out.push(Coord::Block { index: i });
    }
    out
}

/// Stream and pretraining sets for desk-scale runs: 10 stream classes and 8
/// disjoint pretraining classes.
pub struct Desk {
    pub stream: Dataset,
    pub pre: Dataset,
}

pub fn desk_data() -> Desk {
    Desk {
        stream: synth_stream_generate(&SynthConfig::default()).unwrap(),
        pre: synth_stream_generate(&SynthConfig {
            classes: 8,
            class_offset: 1000,
            ..SynthConfig::default()
        })
        .unwrap(),
    }
}

pub fn desk_spec(classes: usize) -> NetworkSpec {
    NetworkSpec::desk(3, 32, 8, 64, classes)
}

pub fn pretrained(desk: &Desk, cfg: &TrainConfig) -> Learner {
    let mut learner = Learner::init(&desk_spec(8), &CodebookConfig::default(), &desk.pre.train, cfg.seed).unwrap();
    pretrain(&mut learner, &desk.pre.train, cfg).unwrap();
    learner
}

pub struct StreamRun {
    pub state: StreamState,
    pub matrix: AccuracyMatrix,
    pub log: Vec<BatchLog>,
}

/// Streams the first `tasks` tasks of `schedule` the way the pipeline does,
/// recording the accuracy matrix after each.
pub fn stream_run(
    learner: &Learner,
    data: &Dataset,
    schedule: &TaskSchedule,
    tasks: usize,
    cfg: &TrainConfig,
) -> StreamRun {
    let classes: Vec<Vec<u32>> = schedule.tasks[..tasks].iter().map(|t| t.classes.clone()).collect();
    let mut state = StreamState::new(learner.clone(), cfg).unwrap();
    let mut matrix = AccuracyMatrix::default();
    let mut log = Vec::new();
    for (t, task) in schedule.tasks[..tasks].iter().enumerate() {
        if cfg.mode == Mode::UpperBound {
            let mut seen: Vec<usize> = schedule.tasks[..=t]
                .iter()
                .flat_map(|x| x.order.iter().copied())
                .collect();
            seen.sort_unstable();
            seen.dedup();
            log.extend(offline_task(&mut state, &data.train, &task.classes, &seen, cfg).unwrap());
        } else {
            let first_pass = if t == 0 {
                task.order.len() / schedule.first_task_epochs
            } else {
                task.order.len()
            };
            log.extend(stream_task(&mut state, &data.train, task, first_pass, cfg).unwrap());
        }
        matrix.record(&state.learner, &data.test, &classes).unwrap();
    }
    StreamRun { state, matrix, log }
}

/// One sampled coordinate: analytic gradient next to its central difference.
pub struct Check {
    pub coord: Coord,
    pub analytic: f64,
    pub numeric: f64,
}

impl Check {
    pub fn rel_err(&self) -> f64 {
        (self.analytic - self.numeric).abs() / self.analytic.abs().max(self.numeric.abs()).max(1e-4)
    }
}

pub fn setup(spec: &NetworkSpec, seed: u64, blocks: usize, d: usize) -> (Network, Codebook, Geometry) {
    let mut r = rng(seed);
    let net = spec.build(&mut r).unwrap();
    let geom = Geometry::for_feature_shape(net.feature_shape(), d).unwrap();
    let book = init_codebook(InitStrategy::Normal, blocks, d, None, 0.0, &mut r).unwrap();
    (net, book, geom)
}

/// `wanted` kink-free coordinates from [`all_checks`].
pub fn run_checks(spec: &NetworkSpec, seed: u64, weights: LossWeights, wanted: usize) -> Vec<Check> {
    let out: Vec<Check> = all_checks(spec, seed, weights).into_iter().take(wanted).collect();
    assert_eq!(out.len(), wanted, "not enough kink-free coordinates");
    out
}

/// Builds `spec` with an n=6, d=2 codebook, runs one combined loss and its
/// backward pass, and checks every kink-free coordinate in shuffled order.
pub fn all_checks(spec: &NetworkSpec, seed: u64, weights: LossWeights) -> Vec<Check> {
    let (mut net, mut book, geom) = setup(spec, seed, 6, 2);
    let mut r = rng(seed + 100);
    let image = random_tensor(spec.input_shape.as_slice(), &mut r);
    let classes = net.output_width();
    let target = r.random_range(0..classes);
    let split = net.split_index();
    let trace = net.forward_range(image.clone(), 0, split).unwrap();
    let z = trace.output().clone();
    let (m, zt) = book.quantize(&z, &geom).unwrap();
    let terms = compute_loss(
        &mut net,
        &mut book,
        Some(&z),
        Some((&m, &zt)),
        target,
        weights,
        1.0,
        true,
    )
    .unwrap();
    if let Some(gz) = &terms.grad_z {
        net.backward(&trace, gz, 0).unwrap();
    }

    let image64: Vec<f64> = image.data().iter().map(|&v| v as f64).collect();
    let (ref_total, _) = ref_loss(
        &net,
        &book,
        &image64,
        &m,
        target,
        weights.alpha as f64,
        weights.beta as f64,
    );
    assert!(
        (ref_total - terms.total as f64).abs() < 1e-5,
        "loss {ref_total} vs {}",
        terms.total
    );

    let mut coords = all_coords(&net, &book);
    fisher_yates(&mut coords, &mut r);
    let mut out = Vec::new();
    for c in coords {
        let analytic = analytic_grad(&net, &book, c);
        if let Some(numeric) = central_difference(
            &mut net,
            &mut book,
            &image64,
            &m,
            target,
            weights.alpha as f64,
            weights.beta as f64,
            c,
            1e-3,
        ) {
            out.push(Check {
                coord: c,
                analytic,
                numeric,
            });
        }
    }
    out
}
