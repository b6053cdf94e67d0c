//! The detector zoo: four small differentiable detectors standing in for a
//! diverse detector ensemble, plus training and checkpoint I/O.
//!
//! Every detector maps a `[3, side, side]` image in [0,1] to a single logit;
//! positive means "generated". The four kinds cover distinct diversity axes:
//! raw pixel space (PixelMLP), strided convolutions (TinyCNN), pooled 9x9
//! patch scores (PatchCNN), and a fixed high-pass residual front end
//! (HighPassLinear).

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{sigmoid, Graph, NodeId};
use crate::manifest::{Label, LoadedDataset};
use crate::rng::{derive_rng, tags};
use crate::tensor::Tensor;

pub const CHANNELS: usize = 3;
/// PatchCNN patch side; fixed by construction.
pub const PATCH_SIDE: usize = 9;
pub const DEFAULT_INPUT_SIDE: usize = 64;

const CHECKPOINT_MAGIC: &[u8; 4] = b"EVFG";
const CHECKPOINT_VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum DetectorKind {
    #[serde(rename = "PixelMLP")]
    PixelMlp { hidden: usize },
    #[serde(rename = "TinyCNN")]
    TinyCnn { conv1: usize, conv2: usize },
    #[serde(rename = "PatchCNN")]
    PatchCnn { mix_channels: usize },
    #[serde(rename = "HighPassLinear")]
    HighPassLinear { hidden: usize },
}

impl DetectorKind {
    pub fn name(&self) -> &'static str {
        match self {
            DetectorKind::PixelMlp { .. } => "PixelMLP",
            DetectorKind::TinyCnn { .. } => "TinyCNN",
            DetectorKind::PatchCnn { .. } => "PatchCNN",
            DetectorKind::HighPassLinear { .. } => "HighPassLinear",
        }
    }

    fn min_input_side(&self) -> usize {
        match self {
            DetectorKind::PixelMlp { .. } => 4,
            DetectorKind::TinyCnn { .. } => 8,
            DetectorKind::PatchCnn { .. } => 12,
            DetectorKind::HighPassLinear { .. } => 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetectorSpec {
    #[serde(flatten)]
    pub kind: DetectorKind,
    pub input_side: usize,
}

impl DetectorSpec {
    pub fn pixel_mlp(input_side: usize) -> Self {
        Self {
            kind: DetectorKind::PixelMlp { hidden: 32 },
            input_side,
        }
    }

    pub fn tiny_cnn(input_side: usize) -> Self {
        Self {
            kind: DetectorKind::TinyCnn { conv1: 8, conv2: 4 },
            input_side,
        }
    }

    pub fn patch_cnn(input_side: usize) -> Self {
        Self {
            kind: DetectorKind::PatchCnn { mix_channels: 6 },
            input_side,
        }
    }

    pub fn high_pass_linear(input_side: usize) -> Self {
        Self {
            kind: DetectorKind::HighPassLinear { hidden: 16 },
            input_side,
        }
    }

    pub fn name(&self) -> &'static str {
        self.kind.name()
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_side % 4 != 0 {
            return Err(Error::InvalidConfig(format!(
                "input_side must be divisible by 4, got {}",
                self.input_side
            )));
        }
        if self.input_side < self.kind.min_input_side() {
            return Err(Error::InvalidConfig(format!(
                "{} needs input_side >= {}, got {}",
                self.name(),
                self.kind.min_input_side(),
                self.input_side
            )));
        }
        let widths_ok = match self.kind {
            DetectorKind::PixelMlp { hidden } => hidden >= 1,
            DetectorKind::TinyCnn { conv1, conv2 } => conv1 >= 1 && conv2 >= 1,
            DetectorKind::PatchCnn { mix_channels } => mix_channels >= 1,
            DetectorKind::HighPassLinear { hidden } => hidden >= 1,
        };
        if !widths_ok {
            return Err(Error::InvalidConfig(format!(
                "{} hyperparameters must be >= 1",
                self.name()
            )));
        }
        Ok(())
    }

    /// Parameter names and shapes, in initialization order.
    fn param_layout(&self) -> Vec<(&'static str, Vec<usize>)> {
        let s = self.input_side;
        match self.kind {
            DetectorKind::PixelMlp { hidden } => vec![
                ("w1", vec![hidden, CHANNELS * s * s]),
                ("b1", vec![hidden]),
                ("w2", vec![1, hidden]),
                ("b2", vec![1]),
            ],
            DetectorKind::TinyCnn { conv1, conv2 } => {
                let o1 = (s - 3) / 2 + 1;
                let o2 = (o1 - 3) / 2 + 1;
                vec![
                    ("conv1", vec![conv1, CHANNELS, 3, 3]),
                    ("conv2", vec![conv2, conv1, 3, 3]),
                    ("w", vec![1, conv2 * o2 * o2]),
                    ("b", vec![1]),
                ]
            }
            DetectorKind::PatchCnn { mix_channels } => vec![
                ("mix", vec![mix_channels, CHANNELS, 1, 1]),
                ("patch", vec![1, mix_channels, PATCH_SIDE, PATCH_SIDE]),
                ("w", vec![1, 1]),
                ("b", vec![1]),
            ],
            DetectorKind::HighPassLinear { hidden } => {
                let r = s - 2; // Laplacian residual side (valid 3x3 conv)
                vec![
                    ("w1", vec![hidden, CHANNELS * r * r]),
                    ("b1", vec![hidden]),
                    ("w2", vec![1, hidden]),
                    ("b2", vec![1]),
                ]
            }
        }
    }
}

/// The four zoo specs in their canonical order.
pub fn default_zoo_specs(input_side: usize) -> Vec<DetectorSpec> {
    vec![
        DetectorSpec::pixel_mlp(input_side),
        DetectorSpec::tiny_cnn(input_side),
        DetectorSpec::patch_cnn(input_side),
        DetectorSpec::high_pass_linear(input_side),
    ]
}

pub fn spec_by_name(name: &str, input_side: usize) -> Result<DetectorSpec> {
    match name {
        "PixelMLP" => Ok(DetectorSpec::pixel_mlp(input_side)),
        "TinyCNN" => Ok(DetectorSpec::tiny_cnn(input_side)),
        "PatchCNN" => Ok(DetectorSpec::patch_cnn(input_side)),
        "HighPassLinear" => Ok(DetectorSpec::high_pass_linear(input_side)),
        other => Err(Error::InvalidArgument(format!(
            "unknown detector kind `{other}`"
        ))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainMeta {
    pub seed: u64,
    pub epochs: usize,
    pub val_accuracy: Option<f64>,
    /// Mean training BCE per epoch.
    pub loss_curve: Vec<f64>,
}

impl TrainMeta {
    fn untrained(seed: u64) -> Self {
        Self {
            seed,
            epochs: 0,
            val_accuracy: None,
            loss_curve: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detector {
    spec: DetectorSpec,
    params: BTreeMap<String, Tensor>,
    train_meta: TrainMeta,
}

/// Fan-in per parameter tensor: dense rows and conv kernels use their input
/// extent; biases reuse the fan-in of their layer's weights.
fn fan_in(name: &str, shape: &[usize], layout: &[(&'static str, Vec<usize>)]) -> usize {
    match shape.len() {
        2 => shape[1],
        4 => shape[1] * shape[2] * shape[3],
        _ => {
            // bias: find the matching weight tensor (b1 -> w1, b -> w)
            let weight_name = name.replacen('b', "w", 1);
            layout
                .iter()
                .find(|(n, _)| *n == weight_name)
                .map(|(_, s)| if s.len() == 2 { s[1] } else { s[1] * s[2] * s[3] })
                .unwrap_or(1)
        }
    }
}

/// Uniform init scaled by 1/sqrt(fan-in), fully determined by (spec, seed).
pub fn init_detector(spec: &DetectorSpec, seed: u64) -> Result<Detector> {
    spec.validate()?;
    let layout = spec.param_layout();
    let mut rng = derive_rng(seed, tags::DETECTOR_INIT, spec.name().len() as u64);
    let mut params = BTreeMap::new();
    for (name, shape) in &layout {
        let bound = 1.0 / (fan_in(name, shape, &layout) as f64).sqrt();
        let numel: usize = shape.iter().product();
        let data: Vec<f64> = (0..numel).map(|_| rng.gen_range(-bound..bound)).collect();
        params.insert((*name).to_string(), Tensor::new(shape.clone(), data)?);
    }
    Ok(Detector {
        spec: spec.clone(),
        params,
        train_meta: TrainMeta::untrained(seed),
    })
}

/// Fixed 3x3 Laplacian (center 8, neighbors -1) applied depthwise: kernel
/// [k][c] is the Laplacian when k == c, zero otherwise.
fn laplacian_kernels() -> Tensor {
    let lap = [
        -1.0, -1.0, -1.0, //
        -1.0, 8.0, -1.0, //
        -1.0, -1.0, -1.0,
    ];
    let mut data = vec![0.0; CHANNELS * CHANNELS * 9];
    for c in 0..CHANNELS {
        let base = (c * CHANNELS + c) * 9;
        data[base..base + 9].copy_from_slice(&lap);
    }
    Tensor::new(vec![CHANNELS, CHANNELS, 3, 3], data).expect("constant kernel")
}

impl Detector {
    pub fn spec(&self) -> &DetectorSpec {
        &self.spec
    }

    pub fn name(&self) -> &'static str {
        self.spec.name()
    }

    pub fn train_meta(&self) -> &TrainMeta {
        &self.train_meta
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn input_side(&self) -> usize {
        self.spec.input_side
    }

    pub fn validate_image(&self, image: &Tensor) -> Result<()> {
        let s = self.spec.input_side;
        if image.shape() != [CHANNELS, s, s] {
            return Err(Error::ShapeMismatch {
                context: "detector input image",
                left: image.shape().to_vec(),
                right: vec![CHANNELS, s, s],
            });
        }
        if image.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::InvalidArgument(
                "image pixels must lie in [0,1]".into(),
            ));
        }
        Ok(())
    }

    /// Record the forward pass on `graph`, returning the scalar logit node and
    /// the leaf node of every parameter.
    pub fn build_forward(
        &self,
        graph: &mut Graph,
        image: NodeId,
    ) -> Result<(NodeId, BTreeMap<String, NodeId>)> {
        let mut nodes = BTreeMap::new();
        for (name, tensor) in &self.params {
            nodes.insert(name.clone(), graph.leaf(tensor.clone()));
        }
        let logit = match self.spec.kind {
            DetectorKind::PixelMlp { .. } => {
                let x = graph.flatten(image)?;
                let h = graph.dense(x, nodes["w1"], nodes["b1"])?;
                let h = graph.relu(h)?;
                graph.dense(h, nodes["w2"], nodes["b2"])?
            }
            DetectorKind::TinyCnn { .. } => {
                let h = graph.conv2d(image, nodes["conv1"], 2)?;
                let h = graph.relu(h)?;
                let h = graph.conv2d(h, nodes["conv2"], 2)?;
                let h = graph.relu(h)?;
                let h = graph.flatten(h)?;
                graph.dense(h, nodes["w"], nodes["b"])?
            }
            DetectorKind::PatchCnn { .. } => {
                // Shared per-pixel channel mix, then one 9x9 kernel scores each
                // disjoint patch; the logit is the mean patch score.
                let h = graph.conv2d(image, nodes["mix"], 1)?;
                let h = graph.relu(h)?;
                let patches = graph.conv2d(h, nodes["patch"], PATCH_SIDE)?;
                let mean = graph.avg_pool_all(patches)?;
                graph.dense(mean, nodes["w"], nodes["b"])?
            }
            DetectorKind::HighPassLinear { .. } => {
                let lap = graph.leaf(laplacian_kernels());
                let r = graph.conv2d(image, lap, 1)?;
                let x = graph.flatten(r)?;
                let h = graph.dense(x, nodes["w1"], nodes["b1"])?;
                let h = graph.relu(h)?;
                graph.dense(h, nodes["w2"], nodes["b2"])?
            }
        };
        Ok((logit, nodes))
    }

    /// Forward pass; returns the raw logit.
    pub fn score(&self, image: &Tensor) -> Result<f64> {
        self.validate_image(image)?;
        let mut graph = Graph::new();
        let x = graph.leaf(image.clone());
        let (logit, _) = self.build_forward(&mut graph, x)?;
        graph.value(logit).scalar_value()
    }

    pub fn probability(&self, image: &Tensor) -> Result<f64> {
        Ok(sigmoid(self.score(image)?))
    }

    /// Gradient of BCE(score(image), target) with respect to the image pixels.
    pub fn input_gradient(&self, image: &Tensor, target: Label) -> Result<Tensor> {
        self.validate_image(image)?;
        let mut graph = Graph::new();
        let x = graph.leaf(image.clone());
        let (logit, _) = self.build_forward(&mut graph, x)?;
        let loss = graph.bce_with_logit(logit, target.as_u8())?;
        let mut grads = graph.backward(loss, &[x])?;
        Ok(grads.remove(&x).expect("requested gradient"))
    }

    fn with_params(&self, params: BTreeMap<String, Tensor>, meta: TrainMeta) -> Detector {
        Detector {
            spec: self.spec.clone(),
            params,
            train_meta: meta,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub seed: u64,
    pub validation_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 6,
            batch_size: 32,
            learning_rate: 0.1,
            momentum: 0.9,
            seed: 0,
            validation_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig("epochs and batch_size must be positive".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig("learning_rate must be finite and >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidConfig("momentum must lie in [0,1)".into()));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(Error::InvalidConfig("validation_fraction must lie in (0,1)".into()));
        }
        Ok(())
    }
}

/// Mini-batch gradient descent with momentum on mean BCE. Deterministic for a
/// fixed (data, cfg): shuffling, batching and accumulation order all derive
/// from cfg.seed.
pub fn train(detector: &Detector, data: &LoadedDataset, cfg: &TrainConfig) -> Result<Detector> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyInput("train"));
    }
    if !data.has_both_classes() {
        return Err(Error::SingleClass);
    }
    for sample in &data.samples {
        detector.validate_image(&sample.image)?;
    }

    let mut rng = derive_rng(cfg.seed, tags::TRAIN_SHUFFLE, 0);
    let n = data.len();
    let mut indices: Vec<usize> = (0..n).collect();
    shuffle(&mut indices, &mut rng);

    let n_val = ((n as f64) * cfg.validation_fraction).round().max(1.0) as usize;
    let n_val = n_val.min(n - 1);
    let (val_idx, train_idx) = indices.split_at(n_val);
    let (val_idx, mut train_order) = (val_idx.to_vec(), train_idx.to_vec());

    if !has_both_classes(data, &train_order) {
        return Err(Error::SingleClass);
    }

    let names: Vec<String> = detector.params.keys().cloned().collect();
    let mut params: BTreeMap<String, Vec<f64>> = detector
        .params
        .iter()
        .map(|(k, v)| (k.clone(), v.data().to_vec()))
        .collect();
    let shapes: BTreeMap<String, Vec<usize>> = detector
        .params
        .iter()
        .map(|(k, v)| (k.clone(), v.shape().to_vec()))
        .collect();
    let mut velocity: BTreeMap<String, Vec<f64>> = names
        .iter()
        .map(|k| (k.clone(), vec![0.0; params[k].len()]))
        .collect();

    let mut loss_curve = Vec::with_capacity(cfg.epochs);
    for _epoch in 0..cfg.epochs {
        shuffle(&mut train_order, &mut rng);
        let mut epoch_loss = 0.0;
        let mut seen = 0usize;
        for batch in train_order.chunks(cfg.batch_size) {
            let current = detector.with_params(
                names
                    .iter()
                    .map(|k| {
                        (
                            k.clone(),
                            Tensor::new(shapes[k].clone(), params[k].clone()).expect("finite params"),
                        )
                    })
                    .collect(),
                detector.train_meta.clone(),
            );
            let mut grad_sum: BTreeMap<String, Vec<f64>> = names
                .iter()
                .map(|k| (k.clone(), vec![0.0; params[k].len()]))
                .collect();
            for &i in batch {
                let sample = &data.samples[i];
                let mut graph = Graph::new();
                let x = graph.leaf(sample.image.clone());
                let (logit, param_nodes) = current.build_forward(&mut graph, x)?;
                let loss = graph.bce_with_logit(logit, sample.label.as_u8())?;
                epoch_loss += graph.value(loss).scalar_value()?;
                let wrt: Vec<NodeId> = names.iter().map(|k| param_nodes[k]).collect();
                let grads = graph.backward(loss, &wrt)?;
                for (k, node) in &param_nodes {
                    let g = &grads[node];
                    let acc = grad_sum.get_mut(k).expect("grad slot");
                    for (dst, &src) in acc.iter_mut().zip(g.data()) {
                        *dst += src;
                    }
                }
            }
            seen += batch.len();
            let inv = 1.0 / batch.len() as f64;
            for k in &names {
                let v = velocity.get_mut(k).expect("velocity");
                let p = params.get_mut(k).expect("param");
                let g = &grad_sum[k];
                for i in 0..p.len() {
                    v[i] = cfg.momentum * v[i] - cfg.learning_rate * g[i] * inv;
                    p[i] += v[i];
                }
            }
        }
        loss_curve.push(epoch_loss / seen.max(1) as f64);
    }

    let final_params: BTreeMap<String, Tensor> = names
        .iter()
        .map(|k| {
            Tensor::new(shapes[k].clone(), params[k].clone())
                .map(|t| (k.clone(), t))
        })
        .collect::<Result<_>>()?;
    let trained = detector.with_params(
        final_params,
        TrainMeta {
            seed: cfg.seed,
            epochs: cfg.epochs,
            val_accuracy: None,
            loss_curve: loss_curve.clone(),
        },
    );

    let mut correct = 0usize;
    for &i in &val_idx {
        let sample = &data.samples[i];
        let predicted = if trained.probability(&sample.image)? >= 0.5 {
            Label::Generated
        } else {
            Label::Real
        };
        if predicted == sample.label {
            correct += 1;
        }
    }
    let val_accuracy = correct as f64 / val_idx.len() as f64;

    Ok(trained.with_params(
        trained.params.clone(),
        TrainMeta {
            seed: cfg.seed,
            epochs: cfg.epochs,
            val_accuracy: Some(val_accuracy),
            loss_curve,
        },
    ))
}

fn has_both_classes(data: &LoadedDataset, indices: &[usize]) -> bool {
    let mut real = false;
    let mut generated = false;
    for &i in indices {
        match data.samples[i].label {
            Label::Real => real = true,
            Label::Generated => generated = true,
        }
    }
    real && generated
}

/// Fisher-Yates with draws from the caller's stream.
fn shuffle(indices: &mut [usize], rng: &mut impl Rng) {
    for i in (1..indices.len()).rev() {
        let j = rng.gen_range(0..=i);
        indices.swap(i, j);
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    spec: DetectorSpec,
    train_meta: TrainMeta,
    param_names: Vec<String>,
}

/// Serialize: magic "EVFG", version byte, canonical JSON header, then each
/// parameter as a shape header plus little-endian f64 data.
pub fn save_detector(detector: &Detector) -> Vec<u8> {
    let header = CheckpointHeader {
        spec: detector.spec.clone(),
        train_meta: detector.train_meta.clone(),
        param_names: detector.params.keys().cloned().collect(),
    };
    let header_json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.push(CHECKPOINT_VERSION);
    out.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&header_json);
    for tensor in detector.params.values() {
        out.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
        for &dim in tensor.shape() {
            out.extend_from_slice(&(dim as u32).to_le_bytes());
        }
        for &v in tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize, section: &'static str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint {
                section,
                detail: format!(
                    "need {n} bytes at offset {}, only {} available",
                    self.pos,
                    self.bytes.len() - self.pos
                ),
            });
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u32(&mut self, section: &'static str) -> Result<u32> {
        let b = self.take(4, section)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }
}

pub fn load_detector(bytes: &[u8]) -> Result<Detector> {
    let mut r = ByteReader { bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint {
            section: "magic",
            detail: format!("expected EVFG, got {magic:?}"),
        });
    }
    let version = r.take(1, "version")?[0];
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint {
            section: "version",
            detail: format!("unsupported version {version}"),
        });
    }
    let header_len = r.u32("header")? as usize;
    let header_bytes = r.take(header_len, "header")?;
    let header: CheckpointHeader =
        serde_json::from_slice(header_bytes).map_err(|e| Error::Checkpoint {
            section: "header",
            detail: e.to_string(),
        })?;
    header.spec.validate().map_err(|e| Error::Checkpoint {
        section: "header",
        detail: e.to_string(),
    })?;

    let expected: BTreeMap<&str, Vec<usize>> = header
        .spec
        .param_layout()
        .into_iter()
        .map(|(n, s)| (n, s))
        .collect();
    if header.param_names.len() != expected.len() {
        return Err(Error::Checkpoint {
            section: "header",
            detail: format!(
                "expected {} params, header lists {}",
                expected.len(),
                header.param_names.len()
            ),
        });
    }

    let mut params = BTreeMap::new();
    for name in &header.param_names {
        let Some(want_shape) = expected.get(name.as_str()) else {
            return Err(Error::Checkpoint {
                section: "params",
                detail: format!("unexpected parameter `{name}`"),
            });
        };
        let ndims = r.u32("param shape")? as usize;
        let mut shape = Vec::with_capacity(ndims);
        for _ in 0..ndims {
            shape.push(r.u32("param shape")? as usize);
        }
        if &shape != want_shape {
            return Err(Error::Checkpoint {
                section: "params",
                detail: format!("param `{name}` shape {shape:?}, expected {want_shape:?}"),
            });
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * 8, "param data")?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let tensor = Tensor::new(shape, data).map_err(|e| Error::Checkpoint {
            section: "param data",
            detail: format!("param `{name}`: {e}"),
        })?;
        params.insert(name.clone(), tensor);
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint {
            section: "trailing",
            detail: format!("{} unexpected trailing bytes", bytes.len() - r.pos),
        });
    }
    Ok(Detector {
        spec: header.spec,
        params,
        train_meta: header.train_meta,
    })
}

pub fn save_detector_file(detector: &Detector, path: &std::path::Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, save_detector(detector))?;
    Ok(())
}

pub fn load_detector_file(path: &std::path::Path) -> Result<Detector> {
    load_detector(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifest::{GeneratorId, LoadedSample};
    use crate::tensor::finite_difference_gradient;

    fn flat_image(side: usize, values: impl Fn(usize) -> f64) -> Tensor {
        let n = CHANNELS * side * side;
        Tensor::new(vec![CHANNELS, side, side], (0..n).map(values).collect()).unwrap()
    }

    #[test]
    fn init_is_deterministic_and_seed_sensitive() {
        let spec = DetectorSpec::pixel_mlp(8);
        let a = init_detector(&spec, 3).unwrap();
        let b = init_detector(&spec, 3).unwrap();
        assert_eq!(a, b);
        let c = init_detector(&spec, 4).unwrap();
        assert_ne!(a.params()["w1"].data(), c.params()["w1"].data());
    }

    #[test]
    fn pixel_mlp_first_weight_shape() {
        let d = init_detector(&DetectorSpec::pixel_mlp(64), 0).unwrap();
        assert_eq!(d.params()["w1"].shape(), &[32, 64 * 64 * 3]);
    }

    #[test]
    fn spec_validation_rejects_bad_sides() {
        assert!(DetectorSpec::pixel_mlp(10).validate().is_err()); // not /4
        assert!(DetectorSpec::patch_cnn(8).validate().is_err()); // < 12
        assert!(DetectorSpec::tiny_cnn(4).validate().is_err()); // < 8
    }

    #[test]
    fn zero_parameter_detector_scores_zero() {
        for spec in default_zoo_specs(12) {
            let d = init_detector(&spec, 0).unwrap();
            let zeroed = d.with_params(
                d.params
                    .iter()
                    .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape().to_vec())))
                    .collect(),
                d.train_meta.clone(),
            );
            let img = flat_image(12, |i| (i % 7) as f64 / 7.0);
            assert_eq!(zeroed.score(&img).unwrap(), 0.0, "{}", spec.name());
            // Constant logit means zero input gradient.
            let g = zeroed.input_gradient(&img, Label::Generated).unwrap();
            assert_eq!(g.linf_norm(), 0.0, "{}", spec.name());
        }
    }

    #[test]
    fn score_rejects_bad_shapes_and_ranges() {
        let d = init_detector(&DetectorSpec::pixel_mlp(8), 0).unwrap();
        let wrong = flat_image(4, |_| 0.5);
        assert!(d.score(&wrong).is_err());
        let out_of_range = Tensor::new(vec![3, 8, 8], vec![1.5; 192]).unwrap();
        assert!(d.score(&out_of_range).is_err());
    }

    #[test]
    fn patch_cnn_logit_is_mean_of_patch_scores() {
        // An image tiled with one 9x9 patch scores exactly that patch's logit.
        // The patch grid for side 12 holds a single patch, so a 12-input
        // detector sharing the same parameters gives the single-patch score.
        let tiled_spec = DetectorSpec {
            kind: DetectorKind::PatchCnn { mix_channels: 3 },
            input_side: 36, // 4x4 disjoint patches
        };
        let d36 = init_detector(&tiled_spec, 5).unwrap();
        let d12 = Detector {
            spec: DetectorSpec {
                kind: DetectorKind::PatchCnn { mix_channels: 3 },
                input_side: 12,
            },
            params: d36.params.clone(),
            train_meta: d36.train_meta.clone(),
        };

        let patch = |c: usize, py: usize, px: usize| ((c * 81 + py * 9 + px) % 11) as f64 / 11.0;
        let mut tiled = vec![0.0; 3 * 36 * 36];
        for c in 0..3 {
            for y in 0..36 {
                for x in 0..36 {
                    tiled[(c * 36 + y) * 36 + x] = patch(c, y % 9, x % 9);
                }
            }
        }
        let mut single = vec![0.5; 3 * 12 * 12];
        for c in 0..3 {
            for y in 0..9 {
                for x in 0..9 {
                    single[(c * 12 + y) * 12 + x] = patch(c, y, x);
                }
            }
        }

        let mean_logit = d36.score(&Tensor::new(vec![3, 36, 36], tiled).unwrap()).unwrap();
        let one_logit = d12.score(&Tensor::new(vec![3, 12, 12], single).unwrap()).unwrap();
        assert!((mean_logit - one_logit).abs() < 1e-12);
    }

    #[test]
    fn patch_cnn_invariant_under_patch_permutation() {
        let spec = DetectorSpec {
            kind: DetectorKind::PatchCnn { mix_channels: 4 },
            input_side: 36,
        };
        let d = init_detector(&spec, 9).unwrap();
        let img = flat_image(36, |i| ((i * 37) % 101) as f64 / 101.0);
        let base = d.score(&img).unwrap();

        // Swap two disjoint 9x9 patches: (0,0) <-> (2,1), all channels.
        let mut data = img.data().to_vec();
        let side = 36;
        for c in 0..3 {
            for y in 0..9 {
                for x in 0..9 {
                    let a = (c * side + y) * side + x;
                    let b = (c * side + 18 + y) * side + 9 + x;
                    data.swap(a, b);
                }
            }
        }
        let permuted = Tensor::new(vec![3, side, side], data).unwrap();
        let swapped = d.score(&permuted).unwrap();
        assert!((base - swapped).abs() < 1e-12);
    }

    #[test]
    fn high_pass_is_invariant_to_constant_shift() {
        let spec = DetectorSpec::high_pass_linear(16);
        let d = init_detector(&spec, 2).unwrap();
        let img = flat_image(16, |i| 0.2 + ((i * 13) % 50) as f64 / 100.0);
        let shifted = img.map(|v| v + 0.2).unwrap();
        assert!(shifted.max() <= 1.0, "no clamping may trigger");
        let a = d.score(&img).unwrap();
        let b = d.score(&shifted).unwrap();
        assert!((a - b).abs() < 1e-9, "diff {}", (a - b).abs());
    }

    #[test]
    fn input_gradient_matches_finite_differences_for_all_kinds() {
        for spec in default_zoo_specs(12) {
            let d = init_detector(&spec, 17).unwrap();
            let img = flat_image(12, |i| 0.5 + 0.4 * (((i * 29) % 17) as f64 / 17.0 - 0.5));
            let grad = d.input_gradient(&img, Label::Generated).unwrap();
            let fd = finite_difference_gradient(
                |x| {
                    let z = d.score(x)?;
                    Ok(crate::graph::bce_from_logit(z, 1.0))
                },
                &img,
                1e-3,
            )
            .unwrap();
            let rel = grad.sub(&fd).unwrap().l2_norm() / fd.l2_norm().max(1e-12);
            assert!(rel < 1e-3, "{}: rel err {rel}", spec.name());
        }
    }

    #[test]
    fn gradient_targets_are_exact_negatives_at_zero_logit() {
        // At logit 0 the two targets give sigma-0 = 0.5 and sigma-1 = -0.5.
        let spec = DetectorSpec::pixel_mlp(8);
        let d = init_detector(&spec, 21).unwrap();
        let zeroed = d.with_params(
            d.params
                .iter()
                .map(|(k, v)| {
                    // Zero the output bias and second layer so the logit is 0.
                    if k == "w2" || k == "b2" {
                        (k.clone(), Tensor::zeros(v.shape().to_vec()))
                    } else {
                        (k.clone(), v.clone())
                    }
                })
                .collect(),
            d.train_meta.clone(),
        );
        let img = flat_image(8, |i| (i % 5) as f64 / 5.0);
        assert_eq!(zeroed.score(&img).unwrap(), 0.0);
        let g0 = zeroed.input_gradient(&img, Label::Real).unwrap();
        let g1 = zeroed.input_gradient(&img, Label::Generated).unwrap();
        let sum = g0.add(&g1).unwrap();
        assert_eq!(sum.linf_norm(), 0.0);
    }

    fn toy_linear_dataset(n: usize, side: usize) -> LoadedDataset {
        // Two informative pixels: class = sign(pixel0 - pixel1).
        let mut samples = Vec::new();
        for i in 0..n {
            let mut rng = derive_rng(99, 0x77, i as u64);
            let (a, b): (f64, f64) = (rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0));
            if (a - b).abs() < 0.1 {
                continue; // keep a margin so the set is cleanly separable
            }
            let label = if a > b { Label::Generated } else { Label::Real };
            let mut data = vec![0.5; 3 * side * side];
            data[0] = a;
            data[1] = b;
            samples.push(LoadedSample {
                id: format!("toy_{i}"),
                label,
                generator: if label == Label::Generated {
                    GeneratorId::G1
                } else {
                    GeneratorId::Real
                },
                seed: i as u64,
                image: Tensor::new(vec![3, side, side], data).unwrap(),
            });
        }
        LoadedDataset { samples }
    }

    #[test]
    fn zero_learning_rate_leaves_params_unchanged() {
        let data = toy_linear_dataset(40, 4);
        let d = init_detector(&DetectorSpec::pixel_mlp(4), 1).unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            learning_rate: 0.0,
            ..TrainConfig::default()
        };
        let trained = train(&d, &data, &cfg).unwrap();
        assert_eq!(trained.params(), d.params());
        assert_eq!(trained.train_meta().epochs, 2);
    }

    #[test]
    fn training_is_bitwise_reproducible() {
        let data = toy_linear_dataset(40, 4);
        let d = init_detector(&DetectorSpec::pixel_mlp(4), 1).unwrap();
        let cfg = TrainConfig {
            epochs: 3,
            ..TrainConfig::default()
        };
        let a = train(&d, &data, &cfg).unwrap();
        let b = train(&d, &data, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn separable_toy_set_reaches_perfect_validation() {
        let data = toy_linear_dataset(120, 4);
        let d = init_detector(&DetectorSpec::pixel_mlp(4), 1).unwrap();
        let cfg = TrainConfig {
            epochs: 50,
            batch_size: 8,
            learning_rate: 0.5,
            momentum: 0.9,
            seed: 7,
            validation_fraction: 0.2,
        };
        let trained = train(&d, &data, &cfg).unwrap();
        assert_eq!(trained.train_meta().val_accuracy, Some(1.0));
    }

    #[test]
    fn single_class_data_is_rejected() {
        let mut data = toy_linear_dataset(40, 4);
        data.samples.retain(|s| s.label == Label::Generated);
        let d = init_detector(&DetectorSpec::pixel_mlp(4), 1).unwrap();
        assert!(matches!(
            train(&d, &data, &TrainConfig::default()),
            Err(Error::SingleClass)
        ));
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise() {
        let data = toy_linear_dataset(40, 4);
        let d = init_detector(&DetectorSpec::pixel_mlp(4), 1).unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            ..TrainConfig::default()
        };
        let trained = train(&d, &data, &cfg).unwrap();
        let bytes = save_detector(&trained);
        assert_eq!(&bytes[..4], b"EVFG");
        assert_eq!(bytes[4], 1);
        let loaded = load_detector(&bytes).unwrap();
        assert_eq!(loaded, trained);

        let img = flat_image(4, |i| (i % 9) as f64 / 9.0);
        assert_eq!(
            loaded.score(&img).unwrap().to_bits(),
            trained.score(&img).unwrap().to_bits()
        );
    }

    #[test]
    fn truncated_checkpoint_names_failing_section() {
        let d = init_detector(&DetectorSpec::pixel_mlp(4), 1).unwrap();
        let bytes = save_detector(&d);
        let err = load_detector(&bytes[..bytes.len() - 9]).unwrap_err();
        assert!(err.to_string().contains("param data"), "{err}");
        let err = load_detector(&bytes[..3]).unwrap_err();
        assert!(err.to_string().contains("magic"), "{err}");
        let mut trailing = bytes.clone();
        trailing.push(0);
        let err = load_detector(&trailing).unwrap_err();
        assert!(err.to_string().contains("trailing"), "{err}");
    }

    #[test]
    fn corrupt_magic_rejected() {
        let d = init_detector(&DetectorSpec::pixel_mlp(4), 1).unwrap();
        let mut bytes = save_detector(&d);
        bytes[0] = b'X';
        assert!(load_detector(&bytes).is_err());
    }
}
