//! A small sequential CNN with hand-written reverse-mode gradients.
//!
//! Everything runs on a single example at a time. Parameter gradients
//! accumulate across `backward` calls until `sgd_step` applies and clears them,
//! so several loss terms (or a whole mini-batch) can share one update.

use std::fmt;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Relu,
    MaxPool2d {
        kernel: usize,
        stride: usize,
    },
    GlobalAvgPool,
    /// Flattens its input.
    Linear {
        in_features: usize,
        out_features: usize,
    },
}

impl LayerKind {
    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let spatial = |what: &str| -> Result<(usize, usize, usize)> {
            match *input {
                [c, h, w] => Ok((c, h, w)),
                _ => Err(Error::Shape(format!("{what} expects c×h×w, got {input:?}"))),
            }
        };
        match *self {
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                let (c, h, w) = spatial("conv2d")?;
                if c != in_channels {
                    return Err(Error::Shape(format!("conv2d expects {in_channels} channels, got {c}")));
                }
                if kernel == 0 || stride == 0 || h + 2 * padding < kernel || w + 2 * padding < kernel {
                    return Err(Error::Shape(format!(
                        "conv2d kernel {kernel} does not fit {h}×{w} with padding {padding}"
                    )));
                }
                Ok(vec![
                    out_channels,
                    (h + 2 * padding - kernel) / stride + 1,
                    (w + 2 * padding - kernel) / stride + 1,
                ])
            }
            LayerKind::Relu => Ok(input.to_vec()),
            LayerKind::MaxPool2d { kernel, stride } => {
                let (c, h, w) = spatial("maxpool2d")?;
                if kernel == 0 || stride == 0 || h < kernel || w < kernel {
                    return Err(Error::Shape(format!("maxpool2d window {kernel} does not fit {h}×{w}")));
                }
                Ok(vec![c, (h - kernel) / stride + 1, (w - kernel) / stride + 1])
            }
            LayerKind::GlobalAvgPool => {
                let (c, _, _) = spatial("global_avg_pool")?;
                Ok(vec![c])
            }
            LayerKind::Linear {
                in_features,
                out_features,
            } => {
                let len: usize = input.iter().product();
                if len != in_features {
                    return Err(Error::Shape(format!(
                        "linear expects {in_features} inputs, got {input:?}"
                    )));
                }
                Ok(vec![out_features])
            }
        }
    }

    fn param_shapes(&self) -> Vec<Vec<usize>> {
        match *self {
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => vec![vec![out_channels, in_channels, kernel, kernel], vec![out_channels]],
            LayerKind::Linear {
                in_features,
                out_features,
            } => vec![vec![out_features, in_features], vec![out_features]],
            _ => Vec::new(),
        }
    }

    fn fan_in(&self) -> usize {
        match *self {
            LayerKind::Conv2d {
                in_channels, kernel, ..
            } => in_channels * kernel * kernel,
            LayerKind::Linear { in_features, .. } => in_features,
            _ => 1,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Conv2d { .. } => "conv2d",
            LayerKind::Relu => "relu",
            LayerKind::MaxPool2d { .. } => "maxpool2d",
            LayerKind::GlobalAvgPool => "global_avg_pool",
            LayerKind::Linear { .. } => "linear",
        }
    }
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => write!(f, "conv2d {in_channels} {out_channels} {kernel} {stride} {padding}"),
            LayerKind::MaxPool2d { kernel, stride } => write!(f, "maxpool2d {kernel} {stride}"),
            LayerKind::Linear {
                in_features,
                out_features,
            } => write!(f, "linear {in_features} {out_features}"),
            other => f.write_str(other.name()),
        }
    }
}

impl std::str::FromStr for LayerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split_whitespace().collect();
        let nums = |n: usize| -> Result<Vec<usize>> {
            if parts.len() != n + 1 {
                return Err(Error::InvalidArgument(format!(
                    "layer `{s}` needs {n} integer arguments"
                )));
            }
            parts[1..]
                .iter()
                .map(|p| {
                    p.parse::<usize>()
                        .map_err(|_| Error::InvalidArgument(format!("bad integer `{p}` in layer `{s}`")))
                })
                .collect()
        };
        match parts.first().copied() {
            Some("conv2d") => {
                let v = nums(5)?;
                Ok(LayerKind::Conv2d {
                    in_channels: v[0],
                    out_channels: v[1],
                    kernel: v[2],
                    stride: v[3],
                    padding: v[4],
                })
            }
            Some("relu") => nums(0).map(|_| LayerKind::Relu),
            Some("maxpool2d") => {
                let v = nums(2)?;
                Ok(LayerKind::MaxPool2d {
                    kernel: v[0],
                    stride: v[1],
                })
            }
            Some("global_avg_pool") => nums(0).map(|_| LayerKind::GlobalAvgPool),
            Some("linear") => {
                let v = nums(2)?;
                Ok(LayerKind::Linear {
                    in_features: v[0],
                    out_features: v[1],
                })
            }
            _ => Err(Error::InvalidArgument(format!("unknown layer `{s}`"))),
        }
    }
}

/// Declarative description of a network: input shape, layers, and the cut
/// between feature extractor (layers before `split_index`) and classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkSpec {
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerKind>,
    pub split_index: usize,
}

impl NetworkSpec {
    /// Three conv/relu/pool blocks feeding a two-layer classifier.
    ///
    /// With a 3×32×32 input and `width = 8` the feature map is 32×4×4.
    pub fn desk(channels: usize, side: usize, width: usize, hidden: usize, classes: usize) -> Self {
        let conv = |i, o| LayerKind::Conv2d {
            in_channels: i,
            out_channels: o,
            kernel: 3,
            stride: 1,
            padding: 1,
        };
        let pool = LayerKind::MaxPool2d { kernel: 2, stride: 2 };
        let feat_side = side / 8;
        Self {
            input_shape: vec![channels, side, side],
            layers: vec![
                conv(channels, width),
                LayerKind::Relu,
                pool,
                conv(width, 2 * width),
                LayerKind::Relu,
                pool,
                conv(2 * width, 4 * width),
                LayerKind::Relu,
                pool,
                LayerKind::Linear {
                    in_features: 4 * width * feat_side * feat_side,
                    out_features: hidden,
                },
                LayerKind::Relu,
                LayerKind::Linear {
                    in_features: hidden,
                    out_features: classes,
                },
            ],
            split_index: 9,
        }
    }

    /// Validates the layer list and initialises parameters with fan-in scaled
    /// normals (std `sqrt(2 / fan_in)`) and zero biases.
    pub fn build<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Network> {
        let shapes = shape_chain(&self.input_shape, &self.layers)?;
        if self.split_index == 0 || self.split_index >= self.layers.len() {
            return Err(Error::InvalidArgument(format!(
                "split index {} outside (0, {})",
                self.split_index,
                self.layers.len()
            )));
        }
        let layers = self
            .layers
            .iter()
            .map(|&kind| Layer {
                kind,
                params: init_params(kind, rng),
            })
            .collect();
        Ok(Network {
            layers,
            split: self.split_index,
            shapes,
        })
    }
}

fn shape_chain(input: &[usize], layers: &[LayerKind]) -> Result<Vec<Vec<usize>>> {
    if layers.is_empty() {
        return Err(Error::InvalidArgument("network has no layers".into()));
    }
    let mut shapes = vec![input.to_vec()];
    for (i, kind) in layers.iter().enumerate() {
        let next = kind
            .output_shape(shapes.last().unwrap())
            .map_err(|e| Error::Shape(format!("layer {i}: {e}")))?;
        shapes.push(next);
    }
    Ok(shapes)
}

fn kaiming<R: Rng + ?Sized>(n: usize, fan_in: usize, rng: &mut R) -> Vec<f32> {
    let normal = Normal::new(0.0f32, (2.0 / fan_in as f32).sqrt()).expect("positive std");
    (0..n).map(|_| normal.sample(rng)).collect()
}

fn init_params<R: Rng + ?Sized>(kind: LayerKind, rng: &mut R) -> Vec<Param> {
    let shapes = kind.param_shapes();
    if shapes.is_empty() {
        return Vec::new();
    }
    let w_len: usize = shapes[0].iter().product();
    let weight = Tensor::new(shapes[0].clone(), kaiming(w_len, kind.fan_in(), rng)).unwrap();
    let bias = Tensor::zeros(&shapes[1]);
    vec![Param::new(weight), Param::new(bias)]
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Tensor,
    /// Frozen parameters still collect gradients but `sgd_step` never moves them.
    pub frozen: bool,
}

impl Param {
    pub fn new(value: Tensor) -> Self {
        Self { value, frozen: false }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub kind: LayerKind,
    pub params: Vec<Param>,
}

/// Identifies one scalar parameter: layer, parameter slot (0 weight, 1 bias),
/// flat offset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamCoord {
    pub layer: usize,
    pub param: usize,
    pub index: usize,
}

/// Activations retained by a forward pass for the matching backward pass.
#[derive(Clone, Debug)]
pub struct Trace {
    pub from_layer: usize,
    pub input: Tensor,
    /// One output per executed layer, starting at `from_layer`.
    pub outputs: Vec<Tensor>,
}

impl Trace {
    pub fn output(&self) -> &Tensor {
        self.outputs.last().unwrap_or(&self.input)
    }

    pub fn into_output(mut self) -> Tensor {
        self.outputs.pop().unwrap_or(self.input)
    }

    /// Index one past the last executed layer.
    pub fn end_layer(&self) -> usize {
        self.from_layer + self.outputs.len()
    }

    /// Input seen by `layer`, if it was executed.
    fn layer_input(&self, layer: usize) -> Option<&Tensor> {
        if layer == self.from_layer {
            Some(&self.input)
        } else if layer > self.from_layer && layer < self.end_layer() {
            Some(&self.outputs[layer - self.from_layer - 1])
        } else {
            None
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    layers: Vec<Layer>,
    split: usize,
    /// `shapes[i]` is the input shape of layer `i`; the last entry is the output.
    shapes: Vec<Vec<usize>>,
}

impl Network {
    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn split_index(&self) -> usize {
        self.split
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.shapes[0]
    }

    /// Shape of the activation entering `layer` (`layer == len` gives the output).
    pub fn shape_at(&self, layer: usize) -> &[usize] {
        &self.shapes[layer]
    }

    /// Shape of the feature map handed from the extractor to the classifier.
    pub fn feature_shape(&self) -> &[usize] {
        &self.shapes[self.split]
    }

    pub fn output_width(&self) -> usize {
        self.shapes.last().unwrap().iter().product()
    }

    pub fn spec(&self) -> NetworkSpec {
        NetworkSpec {
            input_shape: self.shapes[0].clone(),
            layers: self.layers.iter().map(|l| l.kind).collect(),
            split_index: self.split,
        }
    }

    pub fn params(&self) -> impl Iterator<Item = (usize, usize, &Param)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(li, l)| l.params.iter().enumerate().map(move |(pi, p)| (li, pi, p)))
    }

    pub fn param_count(&self) -> usize {
        self.params().map(|(_, _, p)| p.value.len()).sum()
    }

    pub fn param_grad(&self, c: ParamCoord) -> f32 {
        self.layers[c.layer].params[c.param]
            .value
            .grad()
            .map_or(0.0, |g| g[c.index])
    }

    /// Freezes (or unfreezes) every parameter of layers `[0, split)`.
    pub fn set_extractor_frozen(&mut self, frozen: bool) {
        for layer in &mut self.layers[..self.split] {
            for p in &mut layer.params {
                p.frozen = frozen;
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for layer in &mut self.layers {
            for p in &mut layer.params {
                p.value.zero_grad();
            }
        }
    }

    /// Runs every layer from `from_layer` to the end.
    pub fn forward(&self, input: Tensor, from_layer: usize) -> Result<Trace> {
        self.forward_range(input, from_layer, self.layers.len())
    }

    /// Runs layers `[from_layer, to_layer)`.
    pub fn forward_range(&self, input: Tensor, from_layer: usize, to_layer: usize) -> Result<Trace> {
        if from_layer >= self.layers.len() || to_layer > self.layers.len() || to_layer < from_layer {
            return Err(Error::InvalidArgument(format!(
                "layer range {from_layer}..{to_layer} outside network of {} layers",
                self.layers.len()
            )));
        }
        if input.shape() != self.shapes[from_layer].as_slice() {
            return Err(Error::Shape(format!(
                "layer {from_layer} expects {:?}, got {:?}",
                self.shapes[from_layer],
                input.shape()
            )));
        }
        let mut outputs: Vec<Tensor> = Vec::with_capacity(to_layer - from_layer);
        for i in from_layer..to_layer {
            let x = outputs.last().unwrap_or(&input);
            let y = self.layer_forward(i, x);
            y.check_finite(&format!("activation of layer {i}"))?;
            outputs.push(y);
        }
        Ok(Trace {
            from_layer,
            input,
            outputs,
        })
    }

    /// Feature extractor only: layers `[0, split)`.
    pub fn extract(&self, image: Tensor) -> Result<Tensor> {
        Ok(self.forward_range(image, 0, self.split)?.into_output())
    }

    fn layer_forward(&self, i: usize, x: &Tensor) -> Tensor {
        let layer = &self.layers[i];
        let in_shape = &self.shapes[i];
        let out_shape = self.shapes[i + 1].clone();
        let data = match layer.kind {
            LayerKind::Conv2d {
                out_channels,
                kernel,
                stride,
                padding,
                ..
            } => conv2d_forward(
                x.data(),
                in_shape,
                layer.params[0].value.data(),
                layer.params[1].value.data(),
                out_channels,
                kernel,
                stride,
                padding,
            ),
            LayerKind::Relu => x.data().iter().map(|&v| v.max(0.0)).collect(),
            LayerKind::MaxPool2d { kernel, stride } => maxpool_forward(x.data(), in_shape, kernel, stride),
            LayerKind::GlobalAvgPool => {
                let plane = in_shape[1] * in_shape[2];
                x.data()
                    .chunks_exact(plane)
                    .map(|c| c.iter().sum::<f32>() / plane as f32)
                    .collect()
            }
            LayerKind::Linear {
                in_features,
                out_features,
            } => {
                let w = layer.params[0].value.data();
                let b = layer.params[1].value.data();
                let xs = x.data();
                (0..out_features)
                    .map(|o| {
                        let row = &w[o * in_features..(o + 1) * in_features];
                        b[o] + dot(row, xs)
                    })
                    .collect()
            }
        };
        Tensor::new(out_shape, data).expect("layer output matches its shape chain")
    }

    /// Backpropagates `grad_output` from the end of `trace` down to `to_layer`.
    ///
    /// Parameter gradients of every traversed layer are accumulated (never
    /// overwritten). Returns the gradient with respect to the activation that
    /// enters `to_layer`.
    pub fn backward(&mut self, trace: &Trace, grad_output: &Tensor, to_layer: usize) -> Result<Tensor> {
        let end = trace.end_layer();
        if to_layer < trace.from_layer || to_layer > end {
            return Err(Error::InvalidArgument(format!(
                "no activations retained for layer {to_layer} (trace covers {}..{end})",
                trace.from_layer
            )));
        }
        if grad_output.shape() != trace.output().shape() {
            return Err(Error::Shape(format!(
                "gradient {:?} does not match output {:?}",
                grad_output.shape(),
                trace.output().shape()
            )));
        }
        let mut grad = grad_output.clone();
        for i in (to_layer..end).rev() {
            let x = trace.layer_input(i).expect("range checked above");
            let y = &trace.outputs[i - trace.from_layer];
            grad = self.layer_backward(i, x, y, &grad);
        }
        Ok(grad)
    }

    fn layer_backward(&mut self, i: usize, x: &Tensor, y: &Tensor, g: &Tensor) -> Tensor {
        let in_shape = self.shapes[i].clone();
        let layer = &mut self.layers[i];
        let gx = match layer.kind {
            LayerKind::Conv2d {
                out_channels,
                kernel,
                stride,
                padding,
                ..
            } => {
                let (w_param, b_param) = layer.params.split_at_mut(1);
                let (w, gw) = w_param[0].value.data_and_grad_mut();
                let gb = b_param[0].value.grad_mut();
                conv2d_backward(
                    x.data(),
                    &in_shape,
                    w,
                    gw,
                    gb,
                    g.data(),
                    out_channels,
                    kernel,
                    stride,
                    padding,
                )
            }
            LayerKind::Relu => x
                .data()
                .iter()
                .zip(g.data())
                .map(|(&xv, &gv)| if xv > 0.0 { gv } else { 0.0 })
                .collect(),
            LayerKind::MaxPool2d { kernel, stride } => {
                maxpool_backward(x.data(), &in_shape, y.shape(), g.data(), kernel, stride)
            }
            LayerKind::GlobalAvgPool => {
                let plane = in_shape[1] * in_shape[2];
                let scale = 1.0 / plane as f32;
                g.data()
                    .iter()
                    .flat_map(|&gv| std::iter::repeat_n(gv * scale, plane))
                    .collect()
            }
            LayerKind::Linear {
                in_features,
                out_features,
            } => {
                let xs = x.data();
                let gy = g.data();
                let (w_param, b_param) = layer.params.split_at_mut(1);
                let (w, gw) = w_param[0].value.data_and_grad_mut();
                let gb = b_param[0].value.grad_mut();
                let mut gx = vec![0.0f32; in_features];
                for o in 0..out_features {
                    let go = gy[o];
                    gb[o] += go;
                    if go == 0.0 {
                        continue;
                    }
                    let row = &w[o * in_features..(o + 1) * in_features];
                    let grow = &mut gw[o * in_features..(o + 1) * in_features];
                    for k in 0..in_features {
                        grow[k] += go * xs[k];
                        gx[k] += go * row[k];
                    }
                }
                gx
            }
        };
        Tensor::new(in_shape, gx).expect("input gradient matches input shape")
    }

    /// Plain SGD: `w <- w - lr * grad` on trainable parameters; clears all
    /// gradients, frozen ones included.
    pub fn sgd_step(&mut self, learning_rate: f32) -> Result<()> {
        if !learning_rate.is_finite() || learning_rate < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "learning rate {learning_rate} must be a finite non-negative number"
            )));
        }
        for (li, layer) in self.layers.iter_mut().enumerate() {
            for p in &mut layer.params {
                if !p.frozen && p.value.grad().is_some() {
                    let (w, g) = p.value.data_and_grad_mut();
                    for (wv, gv) in w.iter_mut().zip(g.iter()) {
                        *wv -= learning_rate * gv;
                    }
                    p.value.check_finite(&format!("parameters of layer {li}"))?;
                }
                p.value.zero_grad();
            }
        }
        Ok(())
    }

    /// Replaces the final linear layer with a freshly initialised one of
    /// `width` outputs.
    pub fn reset_output<R: Rng + ?Sized>(&mut self, width: usize, rng: &mut R) -> Result<()> {
        let in_features = self.head_in_features()?;
        let kind = LayerKind::Linear {
            in_features,
            out_features: width,
        };
        let last = self.layers.len() - 1;
        self.layers[last] = Layer {
            kind,
            params: init_params(kind, rng),
        };
        *self.shapes.last_mut().unwrap() = vec![width];
        Ok(())
    }

    /// Appends `extra` freshly initialised output units; existing rows are kept.
    pub fn grow_output<R: Rng + ?Sized>(&mut self, extra: usize, rng: &mut R) -> Result<()> {
        let in_features = self.head_in_features()?;
        if extra == 0 {
            return Ok(());
        }
        let last = self.layers.len() - 1;
        let head = &mut self.layers[last];
        let LayerKind::Linear { out_features, .. } = head.kind else {
            unreachable!()
        };
        let width = out_features + extra;
        let fresh = kaiming(extra * in_features, in_features, rng);
        let mut w = head.params[0].value.data().to_vec();
        w.extend(fresh);
        let mut b = head.params[1].value.data().to_vec();
        b.extend(std::iter::repeat_n(0.0, extra));
        let (wf, bf) = (head.params[0].frozen, head.params[1].frozen);
        head.kind = LayerKind::Linear {
            in_features,
            out_features: width,
        };
        head.params = vec![
            Param {
                value: Tensor::new(vec![width, in_features], w)?,
                frozen: wf,
            },
            Param {
                value: Tensor::new(vec![width], b)?,
                frozen: bf,
            },
        ];
        *self.shapes.last_mut().unwrap() = vec![width];
        Ok(())
    }

    fn head_in_features(&self) -> Result<usize> {
        match self.layers.last().map(|l| l.kind) {
            Some(LayerKind::Linear { in_features, .. }) if self.layers.len() > self.split => Ok(in_features),
            _ => Err(Error::InvalidArgument(
                "classifier head must be a linear layer after the split".into(),
            )),
        }
    }

    /// Writes one `CRTN` file per parameter plus `manifest.txt`.
    pub fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut manifest = String::from("# crumb network checkpoint\nformat 1\n");
        let dims: Vec<String> = self.shapes[0].iter().map(|d| d.to_string()).collect();
        manifest.push_str(&format!("input {}\nsplit {}\n", dims.join(" "), self.split));
        for layer in &self.layers {
            manifest.push_str(&format!("layer {}\n", layer.kind));
        }
        for (li, pi, p) in self.params() {
            let name = format!("layer{li}.{}", if pi == 0 { "weight" } else { "bias" });
            let file = format!("{name}.crtn");
            p.value.save(&dir.join(&file))?;
            let state = if p.frozen { "frozen" } else { "trainable" };
            manifest.push_str(&format!("param {name} {file} {state}\n"));
        }
        let path = dir.join("manifest.txt");
        fs::write(&path, manifest).map_err(|e| Error::io(&path, e))
    }

    pub fn load_checkpoint(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.txt");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let bad = |line: usize, msg: &str| Error::format(&path, format!("line {line}: {msg}"));
        let mut input = None;
        let mut split = None;
        let mut kinds = Vec::new();
        let mut params = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, rest) = line.split_once(' ').unwrap_or((line, ""));
            match key {
                "format" if rest == "1" => {}
                "format" => return Err(bad(n + 1, "unsupported format version")),
                "input" => {
                    let dims: std::result::Result<Vec<usize>, _> = rest.split_whitespace().map(str::parse).collect();
                    input = Some(dims.map_err(|_| bad(n + 1, "bad input shape"))?);
                }
                "split" => split = Some(rest.parse().map_err(|_| bad(n + 1, "bad split"))?),
                "layer" => kinds.push(rest.parse::<LayerKind>().map_err(|e| bad(n + 1, &e.to_string()))?),
                "param" => {
                    let f: Vec<&str> = rest.split_whitespace().collect();
                    if f.len() != 3 || !matches!(f[2], "frozen" | "trainable") {
                        return Err(bad(n + 1, "expected `param <name> <file> frozen|trainable`"));
                    }
                    params.push((f[0].to_string(), f[1].to_string(), f[2] == "frozen"));
                }
                _ => return Err(bad(n + 1, &format!("unknown entry `{key}`"))),
            }
        }
        let spec = NetworkSpec {
            input_shape: input.ok_or_else(|| Error::format(&path, "missing input shape"))?,
            layers: kinds,
            split_index: split.ok_or_else(|| Error::format(&path, "missing split"))?,
        };
        let shapes = shape_chain(&spec.input_shape, &spec.layers)?;
        let mut layers: Vec<Layer> = spec
            .layers
            .iter()
            .map(|&kind| Layer {
                kind,
                params: Vec::new(),
            })
            .collect();
        for (li, layer) in layers.iter_mut().enumerate() {
            for (pi, shape) in layer.kind.param_shapes().into_iter().enumerate() {
                let name = format!("layer{li}.{}", if pi == 0 { "weight" } else { "bias" });
                let (_, file, frozen) = params
                    .iter()
                    .find(|(n, _, _)| *n == name)
                    .ok_or_else(|| Error::format(&path, format!("missing parameter {name}")))?;
                let value = Tensor::load(&dir.join(file))?;
                if value.shape() != shape.as_slice() {
                    return Err(Error::format(
                        &path,
                        format!("{name} has shape {:?}, expected {shape:?}", value.shape()),
                    ));
                }
                layer.params.push(Param { value, frozen: *frozen });
            }
        }
        if spec.split_index == 0 || spec.split_index >= layers.len() {
            return Err(Error::format(&path, "split index out of range"));
        }
        Ok(Network {
            layers,
            split: spec.split_index,
            shapes,
        })
    }
}

fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Output positions `o` with `o * stride + k - pad` inside `[0, extent)`.
fn valid_range(out: usize, extent: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    let hi = if extent + pad > k {
        (extent + pad - k).div_ceil(stride).min(out)
    } else {
        0
    };
    (lo, hi.max(lo))
}

#[allow(clippy::too_many_arguments)]
fn conv2d_forward(
    x: &[f32],
    in_shape: &[usize],
    w: &[f32],
    b: &[f32],
    out_c: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> Vec<f32> {
    let (c, h, wd) = (in_shape[0], in_shape[1], in_shape[2]);
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0f32; out_c * oh * ow];
    for o in 0..out_c {
        let plane = &mut out[o * oh * ow..(o + 1) * oh * ow];
        plane.iter_mut().for_each(|v| *v = b[o]);
        for ci in 0..c {
            let xin = &x[ci * h * wd..(ci + 1) * h * wd];
            for ky in 0..k {
                let (y0, y1) = valid_range(oh, h, ky, stride, pad);
                for kx in 0..k {
                    let wv = w[((o * c + ci) * k + ky) * k + kx];
                    let (x0, x1) = valid_range(ow, wd, kx, stride, pad);
                    for oy in y0..y1 {
                        let iy = oy * stride + ky - pad;
                        let row_in = &xin[iy * wd..(iy + 1) * wd];
                        let row_out = &mut plane[oy * ow..(oy + 1) * ow];
                        if stride == 1 {
                            let src = &row_in[x0 + kx - pad..x1 + kx - pad];
                            for (o, &v) in row_out[x0..x1].iter_mut().zip(src) {
                                *o += wv * v;
                            }
                        } else {
                            for ox in x0..x1 {
                                row_out[ox] += wv * row_in[ox * stride + kx - pad];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward(
    x: &[f32],
    in_shape: &[usize],
    w: &[f32],
    gw: &mut [f32],
    gb: &mut [f32],
    gy: &[f32],
    out_c: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> Vec<f32> {
    let (c, h, wd) = (in_shape[0], in_shape[1], in_shape[2]);
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut gx = vec![0.0f32; c * h * wd];
    for o in 0..out_c {
        let gplane = &gy[o * oh * ow..(o + 1) * oh * ow];
        gb[o] += gplane.iter().sum::<f32>();
        for ci in 0..c {
            let xin = &x[ci * h * wd..(ci + 1) * h * wd];
            let gxin = &mut gx[ci * h * wd..(ci + 1) * h * wd];
            for ky in 0..k {
                let (y0, y1) = valid_range(oh, h, ky, stride, pad);
                for kx in 0..k {
                    let widx = ((o * c + ci) * k + ky) * k + kx;
                    let wv = w[widx];
                    let (x0, x1) = valid_range(ow, wd, kx, stride, pad);
                    let mut acc = 0.0f32;
                    for oy in y0..y1 {
                        let iy = oy * stride + ky - pad;
                        let grow = &gplane[oy * ow..(oy + 1) * ow];
                        if stride == 1 {
                            let start = iy * wd + x0 + kx - pad;
                            let g = &grow[x0..x1];
                            let span = start..start + g.len();
                            acc += g.iter().zip(&xin[span.clone()]).map(|(a, b)| a * b).sum::<f32>();
                            for (gx_, &gv) in gxin[span].iter_mut().zip(g) {
                                *gx_ += wv * gv;
                            }
                        } else {
                            for (ox, &gv) in grow.iter().enumerate().take(x1).skip(x0) {
                                let ix = iy * wd + ox * stride + kx - pad;
                                acc += gv * xin[ix];
                                gxin[ix] += wv * gv;
                            }
                        }
                    }
                    gw[widx] += acc;
                }
            }
        }
    }
    gx
}

fn maxpool_forward(x: &[f32], in_shape: &[usize], k: usize, stride: usize) -> Vec<f32> {
    let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
    let oh = (h - k) / stride + 1;
    let ow = (w - k) / stride + 1;
    let mut out = Vec::with_capacity(c * oh * ow);
    for ci in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let (_, v) = window_max(x, ci, h, w, oy * stride, ox * stride, k);
                out.push(v);
            }
        }
    }
    out
}

/// First maximum in row-major scan order of a pooling window.
fn window_max(x: &[f32], ci: usize, h: usize, w: usize, y0: usize, x0: usize, k: usize) -> (usize, f32) {
    let mut best = (ci * h + y0) * w + x0;
    for dy in 0..k {
        for dx in 0..k {
            let idx = (ci * h + y0 + dy) * w + x0 + dx;
            if x[idx] > x[best] {
                best = idx;
            }
        }
    }
    (best, x[best])
}

fn maxpool_backward(
    x: &[f32],
    in_shape: &[usize],
    out_shape: &[usize],
    gy: &[f32],
    k: usize,
    stride: usize,
) -> Vec<f32> {
    let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
    let (oh, ow) = (out_shape[1], out_shape[2]);
    let mut gx = vec![0.0f32; x.len()];
    for ci in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let (idx, _) = window_max(x, ci, h, w, oy * stride, ox * stride, k);
                gx[idx] += gy[(ci * oh + oy) * ow + ox];
            }
        }
    }
    gx
}

/// Softmax cross-entropy for one example: returns the loss and
/// `softmax(logits) - one_hot(target)`.
pub fn softmax_cross_entropy(logits: &Tensor, target: usize) -> Result<(f32, Tensor)> {
    if logits.shape().len() != 1 || logits.len() < 2 {
        return Err(Error::Shape(format!(
            "logits must be a vector of length >= 2, got {:?}",
            logits.shape()
        )));
    }
    if target >= logits.len() {
        return Err(Error::InvalidArgument(format!(
            "target class {target} outside {} logits",
            logits.len()
        )));
    }
    let l = logits.data();
    let max = l.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
    let sum: f64 = l.iter().map(|&v| (v as f64 - max).exp()).sum();
    let lse = max + sum.ln();
    let loss = (lse - l[target] as f64) as f32;
    let grad: Vec<f32> = l
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let p = (v as f64 - lse).exp();
            (if i == target { p - 1.0 } else { p }) as f32
        })
        .collect();
    if !loss.is_finite() {
        return Err(Error::NonFinite("cross-entropy loss".into()));
    }
    Ok((loss, Tensor::from_slice(&grad)))
}

/// Anything whose scalar parameters can be read and overwritten by coordinate.
pub trait ParamSpace {
    type Coord: Copy;
    fn param_value(&self, coord: Self::Coord) -> f32;
    fn set_param_value(&mut self, coord: Self::Coord, value: f32);
}

impl ParamSpace for Network {
    type Coord = ParamCoord;

    fn param_value(&self, c: ParamCoord) -> f32 {
        self.layers[c.layer].params[c.param].value.data()[c.index]
    }

    fn set_param_value(&mut self, c: ParamCoord, value: f32) {
        self.layers[c.layer].params[c.param].value.data_mut()[c.index] = value;
    }
}

impl ParamSpace for Vec<f32> {
    type Coord = usize;

    fn param_value(&self, c: usize) -> f32 {
        self[c]
    }

    fn set_param_value(&mut self, c: usize, value: f32) {
        self[c] = value;
    }
}

/// Central-difference gradient estimate `(L(w+ε) - L(w-ε)) / 2ε` per coordinate.
///
/// The divisor uses the perturbations actually representable in `f32`, so the
/// estimate is exact for quadratics up to `f64` rounding. Parameters are
/// restored afterwards.
pub fn finite_diff_grad<P, F>(model: &mut P, coords: &[P::Coord], eps: f32, mut loss: F) -> Vec<f64>
where
    P: ParamSpace + ?Sized,
    F: FnMut(&P) -> f64,
{
    coords
        .iter()
        .map(|&c| {
            let w = model.param_value(c);
            let (up, down) = (w + eps, w - eps);
            model.set_param_value(c, up);
            let l_up = loss(model);
            model.set_param_value(c, down);
            let l_down = loss(model);
            model.set_param_value(c, w);
            (l_up - l_down) / (up as f64 - down as f64)
        })
        .collect()
}
