//! Model assembly: single-frame classifiers over five-view stacks, clip-level
//! video models, the view classifier, parameter/FLOP accounting, and head
//! surgery for binary → 3-class transfer.

pub mod arch;

pub use arch::{ArchitectureConfig, ConvKind, Head, Topology, VIEW_COUNT};

use crate::aggregation::{build_aggregator, AggOutput, AggregationSpec, Aggregator, FrameDims};
use crate::error::{config_err, shape_err, Result};
use crate::graph::{Graph, Var};
use crate::layers::{init_conv_stage, ConvStage, Dense, LayerKind, LayerSpec, ParamSet};
use crate::tensor::{Scalar, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Complete serializable description of a model; its hash keys checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelSpec {
    /// Single-frame classifier over a five-view stack.
    Keyframe { arch: ArchitectureConfig },
    /// Clip classifier: five per-view single-channel encoders sharing the
    /// conv layout of `encoder`, one aggregation scheme, and the dense
    /// classifier described by the encoder's fc/head fields.
    Video {
        encoder: ArchitectureConfig,
        aggregation: AggregationSpec,
    },
    /// Single-clip view classifier: one encoder + aggregation + 5-way head.
    ViewRouter {
        encoder: ArchitectureConfig,
        aggregation: AggregationSpec,
    },
}

/// Hex SHA-256 of the spec's canonical JSON form.
pub fn fingerprint(spec: &ModelSpec) -> String {
    let json = serde_json::to_string(spec).expect("model specs always serialize");
    let digest = Sha256::digest(json.as_bytes());
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

/// One classifier output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    /// Simplex over classes (binary expands to [1-p, p]).
    pub probabilities: Vec<f64>,
    pub logits: Vec<f64>,
    /// Argmax class; for binary, 1 iff p ≥ 0.5.
    pub label: usize,
}

pub fn prediction_from_logits(head: Head, logits: Vec<f64>) -> Result<Prediction> {
    match head {
        Head::Binary => {
            if logits.len() != 1 {
                return shape_err(format!("binary head wants 1 logit, got {}", logits.len()));
            }
            let p = 1.0 / (1.0 + (-logits[0]).exp());
            let label = usize::from(p >= 0.5);
            Ok(Prediction { probabilities: vec![1.0 - p, p], logits, label })
        }
        _ => {
            let n = head.units();
            if logits.len() != n {
                return shape_err(format!("head wants {n} logits, got {}", logits.len()));
            }
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
            let denom: f64 = exps.iter().sum();
            let probabilities: Vec<f64> = exps.iter().map(|e| e / denom).collect();
            let label = probabilities
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite probabilities"))
                .map(|(i, _)| i)
                .unwrap_or(0);
            Ok(Prediction { probabilities, logits, label })
        }
    }
}

/// Per-layer parameter row of the closed-form counter.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerCount {
    pub label: String,
    pub weights: usize,
    pub biases: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParamCount {
    pub rows: Vec<LayerCount>,
}

impl ParamCount {
    pub fn weight_total(&self) -> usize {
        self.rows.iter().map(|r| r.weights).sum()
    }

    pub fn bias_total(&self) -> usize {
        self.rows.iter().map(|r| r.biases).sum()
    }

    pub fn total(&self) -> usize {
        self.weight_total() + self.bias_total()
    }
}

/// Closed-form per-layer parameter accounting for a single-frame classifier.
pub fn count_params(arch: &ArchitectureConfig) -> Result<ParamCount> {
    let mut rows = Vec::new();
    for b in 0..arch.branch_count() {
        let prefix = match arch.topology {
            Topology::MultiChannel => String::new(),
            Topology::MultiBranch => format!("branch{}.", b + 1),
        };
        let mut stage = 1usize;
        for layer in arch.branch_layers()? {
            let label = match layer.kind {
                LayerKind::StandardConv => {
                    let l = format!("{prefix}stage{stage}");
                    stage += 1;
                    l
                }
                LayerKind::DepthwiseConv => format!("{prefix}stage{stage}.dw"),
                LayerKind::PointwiseConv => {
                    let l = format!("{prefix}stage{stage}.pw");
                    stage += 1;
                    l
                }
                other => return config_err(format!("unexpected conv-stack layer {other:?}")),
            };
            rows.push(LayerCount {
                label,
                weights: layer.weight_count(),
                biases: layer.bias_count(),
            });
        }
    }
    let dense = [
        ("fc1", arch.fc1_input_len()?, arch.fc1_units),
        ("fc2", arch.fc1_units, arch.fc2_units),
        ("head", arch.fc2_units, arch.head.units()),
    ];
    for (label, n_in, n_out) in dense {
        rows.push(LayerCount {
            label: label.to_string(),
            weights: n_in * n_out,
            biases: n_out,
        });
    }
    Ok(ParamCount { rows })
}

/// Multiply-accumulate count of one forward pass of a single-frame
/// classifier (biases and activations excluded).
pub fn count_flops(arch: &ArchitectureConfig) -> Result<u64> {
    let mut conv: u64 = 0;
    let mut extent = arch.input_size;
    for layer in arch.branch_layers()? {
        conv += layer.mac_count(extent) as u64;
        extent = extent.div_ceil(layer.stride);
    }
    let mut total = conv * arch.branch_count() as u64;
    total += (arch.fc1_input_len()? * arch.fc1_units) as u64;
    total += (arch.fc1_units * arch.fc2_units) as u64;
    total += (arch.fc2_units * arch.head.units()) as u64;
    Ok(total)
}

/// Sum of element counts over all registered parameter tensors — the
/// independent cross-check for [`count_params`].
pub fn registered_param_total<T: Scalar>(g: &Graph<T>, params: &ParamSet) -> usize {
    params.entries().map(|(_, v)| g.value(v).data().len()).sum()
}

/// Pull one view channel out of a `[S, S, 5]` stack as a `[S, S, 1]` frame.
fn split_stack<T: Scalar>(stack: &Tensor<T>, size: usize) -> Vec<Tensor<T>> {
    (0..VIEW_COUNT)
        .map(|v| {
            let mut out = Tensor::zeros(vec![size, size, 1]);
            for i in 0..size * size {
                out.data_mut()[i] = stack.data()[i * VIEW_COUNT + v];
            }
            out
        })
        .collect()
}

fn build_conv_branch<T: Scalar>(
    g: &mut Graph<T>,
    params: &mut ParamSet,
    rng: &mut ChaCha20Rng,
    prefix: &str,
    layers: &[LayerSpec],
) -> Result<Vec<ConvStage>> {
    let mut stages = Vec::new();
    let mut stage = 1usize;
    let mut i = 0;
    while i < layers.len() {
        match layers[i].kind {
            LayerKind::StandardConv => {
                let p = format!("{prefix}stage{stage}");
                stages.push(init_conv_stage(g, params, rng, &p, &layers[i], false)?);
                i += 1;
            }
            LayerKind::DepthwiseConv => {
                // Depthwise row carries the stage stride; the paired
                // pointwise row follows immediately and sets the stage width.
                let Some(pw) = layers.get(i + 1).filter(|l| l.kind == LayerKind::PointwiseConv)
                else {
                    return config_err("depthwise layer missing its pointwise pair");
                };
                let merged = LayerSpec {
                    kind: LayerKind::StandardConv,
                    kernel: layers[i].kernel,
                    stride: layers[i].stride,
                    input_channels: layers[i].input_channels,
                    output_channels: pw.output_channels,
                };
                let p = format!("{prefix}stage{stage}");
                stages.push(init_conv_stage(g, params, rng, &p, &merged, true)?);
                i += 2;
            }
            other => return config_err(format!("unexpected conv-stack layer {other:?}")),
        }
        stage += 1;
    }
    Ok(stages)
}

fn run_branch<T: Scalar>(g: &mut Graph<T>, stages: &[ConvStage], mut x: Var) -> Result<Var> {
    for stage in stages {
        x = stage.forward(g, x)?;
    }
    Ok(x)
}

/// Single-frame classifier over a five-view stack.
pub struct KeyframeModel<T: Scalar> {
    arch: ArchitectureConfig,
    spec: ModelSpec,
    pub graph: Graph<T>,
    pub params: ParamSet,
    branches: Vec<Vec<ConvStage>>,
    fc1: Dense,
    fc2: Dense,
    head: Dense,
}

impl<T: Scalar> KeyframeModel<T> {
    pub fn build(arch: ArchitectureConfig, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut graph = Graph::new();
        let mut params = ParamSet::new();
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let layers = arch.branch_layers()?;
        let mut branches = Vec::new();
        for b in 0..arch.branch_count() {
            let prefix = match arch.topology {
                Topology::MultiChannel => String::new(),
                Topology::MultiBranch => format!("branch{}.", b + 1),
            };
            branches.push(build_conv_branch(&mut graph, &mut params, &mut rng, &prefix, &layers)?);
        }
        let fc1 = Dense::init(
            &mut graph,
            &mut params,
            &mut rng,
            "fc1",
            arch.fc1_input_len()?,
            arch.fc1_units,
        )?;
        let fc2 = Dense::init(&mut graph, &mut params, &mut rng, "fc2", arch.fc1_units, arch.fc2_units)?;
        let head = Dense::init(
            &mut graph,
            &mut params,
            &mut rng,
            "head",
            arch.fc2_units,
            arch.head.units(),
        )?;
        let spec = ModelSpec::Keyframe { arch: arch.clone() };
        Ok(KeyframeModel { arch, spec, graph, params, branches, fc1, fc2, head })
    }

    pub fn arch(&self) -> &ArchitectureConfig {
        &self.arch
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn fingerprint(&self) -> String {
        fingerprint(&self.spec)
    }

    /// FC2 activations for one stack. Appends to the tape without resetting,
    /// so training loops control transient lifetime themselves.
    pub fn features(&mut self, stack: &Tensor<T>) -> Result<Var> {
        let s = self.arch.input_size;
        if stack.shape() != &[s, s, VIEW_COUNT][..] {
            return shape_err(format!(
                "input stack wants [{s}, {s}, {VIEW_COUNT}], got {:?}",
                stack.shape()
            ));
        }
        let mut flats = Vec::new();
        match self.arch.topology {
            Topology::MultiChannel => {
                let x = self.graph.constant(stack.clone());
                let y = run_branch(&mut self.graph, &self.branches[0], x)?;
                flats.push(self.graph.flatten(y));
            }
            Topology::MultiBranch => {
                let views = split_stack(stack, s);
                for (view, stages) in views.into_iter().zip(&self.branches) {
                    let x = self.graph.constant(view);
                    let y = run_branch(&mut self.graph, stages, x)?;
                    flats.push(self.graph.flatten(y));
                }
            }
        }
        let merged = if flats.len() == 1 { flats[0] } else { self.graph.concat(&flats)? };
        let h1 = self.fc1.forward(&mut self.graph, merged)?;
        let h1 = self.graph.relu(h1);
        let h2 = self.fc2.forward(&mut self.graph, h1)?;
        Ok(self.graph.relu(h2))
    }

    /// Head logits for one stack (appends to the tape).
    pub fn logits(&mut self, stack: &Tensor<T>) -> Result<Var> {
        let f = self.features(stack)?;
        self.head.forward(&mut self.graph, f)
    }

    /// Inference entry point: clears transients, then runs one stack.
    pub fn predict(&mut self, stack: &Tensor<T>) -> Result<Prediction> {
        self.graph.reset();
        let logits = self.logits(stack)?;
        let raw: Vec<f64> = self.graph.value(logits).data().iter().map(|v| Scalar::to_f64(*v)).collect();
        prediction_from_logits(self.arch.head, raw)
    }
}

/// Copy every non-head parameter into a fresh 3-class model; the new head is
/// freshly initialized from `seed`.
pub fn swap_head_binary_to_three<T: Scalar>(
    src: &KeyframeModel<T>,
    seed: u64,
) -> Result<KeyframeModel<T>> {
    if src.arch.head != Head::Binary {
        return config_err("head swap requires a binary source head");
    }
    let mut arch = src.arch.clone();
    arch.head = Head::ThreeClass;
    let mut dst = KeyframeModel::build(arch, seed)?;
    for (name, var) in src.params.entries() {
        if name.starts_with("head.") {
            continue;
        }
        let target = dst.params.lookup(name).expect("non-head layout is unchanged");
        dst.graph.set_value(target, src.graph.value(var).clone())?;
    }
    Ok(dst)
}

/// Per-view aggregation results of one study forward pass.
pub struct StudyForward {
    pub logits: Var,
    /// Aggregation output per view slot; `None` for absent views.
    pub views: Vec<Option<AggOutput>>,
}

/// Clip classifier: five single-channel encoders, a shared aggregation
/// scheme, and a dense classifier over the concatenated per-view features.
pub struct VideoModel<T: Scalar> {
    arch: ArchitectureConfig,
    spec: ModelSpec,
    dims: FrameDims,
    pub graph: Graph<T>,
    pub params: ParamSet,
    encoders: Vec<Vec<ConvStage>>,
    agg: Box<dyn Aggregator<T>>,
    fc1: Dense,
    fc2: Dense,
    head: Dense,
}

fn encoder_dims(arch: &ArchitectureConfig) -> Result<FrameDims> {
    let ledger = arch.shape_ledger()?;
    let (extent, channels) = *ledger.last().expect("ledger is non-empty");
    Ok(FrameDims::new(extent, extent, channels))
}

impl<T: Scalar> VideoModel<T> {
    pub fn build(
        encoder: ArchitectureConfig,
        aggregation: AggregationSpec,
        seed: u64,
    ) -> Result<Self> {
        encoder.validate()?;
        aggregation.validate()?;
        let mut graph = Graph::new();
        let mut params = ParamSet::new();
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let layers = encoder.conv_stack_layers(1)?;
        let mut encoders = Vec::new();
        for v in 0..VIEW_COUNT {
            let prefix = format!("enc{}.", v + 1);
            encoders.push(build_conv_branch(&mut graph, &mut params, &mut rng, &prefix, &layers)?);
        }
        let dims = encoder_dims(&encoder)?;
        let agg = build_aggregator(&mut graph, &mut params, &mut rng, "agg", &aggregation, dims)?;
        let fc1 = Dense::init(
            &mut graph,
            &mut params,
            &mut rng,
            "fc1",
            VIEW_COUNT * dims.flat(),
            encoder.fc1_units,
        )?;
        let fc2 = Dense::init(
            &mut graph,
            &mut params,
            &mut rng,
            "fc2",
            encoder.fc1_units,
            encoder.fc2_units,
        )?;
        let head = Dense::init(
            &mut graph,
            &mut params,
            &mut rng,
            "head",
            encoder.fc2_units,
            encoder.head.units(),
        )?;
        let spec = ModelSpec::Video { encoder: encoder.clone(), aggregation };
        Ok(VideoModel { arch: encoder, spec, dims, graph, params, encoders, agg, fc1, fc2, head })
    }

    pub fn arch(&self) -> &ArchitectureConfig {
        &self.arch
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn fingerprint(&self) -> String {
        fingerprint(&self.spec)
    }

    pub fn frame_dims(&self) -> FrameDims {
        self.dims
    }

    /// Encode one view's frames and aggregate them.
    fn view_aggregate(&mut self, view: usize, frames: &[Tensor<T>]) -> Result<AggOutput> {
        let s = self.arch.input_size;
        if frames.is_empty() {
            return shape_err("present view must contain at least one frame");
        }
        let mut maps = Vec::with_capacity(frames.len());
        for frame in frames {
            if frame.shape() != &[s, s, 1][..] {
                return shape_err(format!(
                    "clip frame wants [{s}, {s}, 1], got {:?}",
                    frame.shape()
                ));
            }
            let x = self.graph.constant(frame.clone());
            maps.push(run_branch(&mut self.graph, &self.encoders[view], x)?);
        }
        self.agg.aggregate(&mut self.graph, &maps)
    }

    /// One study forward pass over up to five view clips, in view order.
    /// Absent views contribute zero features. Appends to the tape.
    pub fn study_logits(&mut self, clips: &[Option<Vec<Tensor<T>>>]) -> Result<StudyForward> {
        if clips.len() != VIEW_COUNT {
            return shape_err(format!("study wants {VIEW_COUNT} view slots, got {}", clips.len()));
        }
        if clips.iter().all(|c| c.is_none()) {
            return shape_err("study has no views present");
        }
        let mut features = Vec::with_capacity(VIEW_COUNT);
        let mut views = Vec::with_capacity(VIEW_COUNT);
        for (v, clip) in clips.iter().enumerate() {
            match clip {
                Some(frames) => {
                    let out = self.view_aggregate(v, frames)?;
                    features.push(out.feature);
                    views.push(Some(out));
                }
                None => {
                    features.push(self.graph.constant(Tensor::zeros(vec![self.dims.flat()])));
                    views.push(None);
                }
            }
        }
        let merged = self.graph.concat(&features)?;
        let h1 = self.fc1.forward(&mut self.graph, merged)?;
        let h1 = self.graph.relu(h1);
        let h2 = self.fc2.forward(&mut self.graph, h1)?;
        let h2 = self.graph.relu(h2);
        let logits = self.head.forward(&mut self.graph, h2)?;
        Ok(StudyForward { logits, views })
    }

    /// Inference: clears transients, runs one study, and reports the
    /// prediction plus per-view attention weights.
    pub fn predict(
        &mut self,
        clips: &[Option<Vec<Tensor<T>>>],
    ) -> Result<(Prediction, Vec<Option<Vec<f64>>>)> {
        self.graph.reset();
        let fwd = self.study_logits(clips)?;
        let raw: Vec<f64> = self
            .graph
            .value(fwd.logits)
            .data()
            .iter()
            .map(|v| Scalar::to_f64(*v))
            .collect();
        let prediction = prediction_from_logits(self.arch.head, raw)?;
        let weights = fwd
            .views
            .iter()
            .map(|view| {
                view.as_ref().map(|out| {
                    self.graph
                        .value(out.weights)
                        .data()
                        .iter()
                        .map(|v| Scalar::to_f64(*v))
                        .collect()
                })
            })
            .collect();
        Ok((prediction, weights))
    }
}

/// Aggregation results of one clip-level view classification.
pub struct ClipForward {
    pub logits: Var,
    pub agg: AggOutput,
}

/// Single-clip view classifier: one encoder, one aggregation, a 5-way head.
pub struct ViewClassifierModel<T: Scalar> {
    arch: ArchitectureConfig,
    spec: ModelSpec,
    dims: FrameDims,
    pub graph: Graph<T>,
    pub params: ParamSet,
    encoder: Vec<ConvStage>,
    agg: Box<dyn Aggregator<T>>,
    fc1: Dense,
    fc2: Dense,
    head: Dense,
}

impl<T: Scalar> ViewClassifierModel<T> {
    pub fn build(
        mut encoder: ArchitectureConfig,
        aggregation: AggregationSpec,
        seed: u64,
    ) -> Result<Self> {
        encoder.head = Head::FiveView;
        encoder.validate()?;
        aggregation.validate()?;
        let mut graph = Graph::new();
        let mut params = ParamSet::new();
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let layers = encoder.conv_stack_layers(1)?;
        let stages = build_conv_branch(&mut graph, &mut params, &mut rng, "enc.", &layers)?;
        let dims = encoder_dims(&encoder)?;
        let agg = build_aggregator(&mut graph, &mut params, &mut rng, "agg", &aggregation, dims)?;
        let fc1 = Dense::init(
            &mut graph,
            &mut params,
            &mut rng,
            "fc1",
            dims.flat(),
            encoder.fc1_units,
        )?;
        let fc2 = Dense::init(
            &mut graph,
            &mut params,
            &mut rng,
            "fc2",
            encoder.fc1_units,
            encoder.fc2_units,
        )?;
        let head = Dense::init(&mut graph, &mut params, &mut rng, "head", encoder.fc2_units, 5)?;
        let spec = ModelSpec::ViewRouter { encoder: encoder.clone(), aggregation };
        Ok(ViewClassifierModel {
            arch: encoder,
            spec,
            dims,
            graph,
            params,
            encoder: stages,
            agg,
            fc1,
            fc2,
            head,
        })
    }

    pub fn arch(&self) -> &ArchitectureConfig {
        &self.arch
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn fingerprint(&self) -> String {
        fingerprint(&self.spec)
    }

    pub fn frame_dims(&self) -> FrameDims {
        self.dims
    }

    /// One clip forward pass (appends to the tape).
    pub fn clip_logits(&mut self, frames: &[Tensor<T>]) -> Result<ClipForward> {
        let s = self.arch.input_size;
        if frames.is_empty() {
            return shape_err("clip must contain at least one frame");
        }
        let mut maps = Vec::with_capacity(frames.len());
        for frame in frames {
            if frame.shape() != &[s, s, 1][..] {
                return shape_err(format!(
                    "clip frame wants [{s}, {s}, 1], got {:?}",
                    frame.shape()
                ));
            }
            let x = self.graph.constant(frame.clone());
            maps.push(run_branch(&mut self.graph, &self.encoder, x)?);
        }
        let agg = self.agg.aggregate(&mut self.graph, &maps)?;
        let h1 = self.fc1.forward(&mut self.graph, agg.feature)?;
        let h1 = self.graph.relu(h1);
        let h2 = self.fc2.forward(&mut self.graph, h1)?;
        let h2 = self.graph.relu(h2);
        let logits = self.head.forward(&mut self.graph, h2)?;
        Ok(ClipForward { logits, agg })
    }

    /// Inference: clears transients, classifies one clip.
    pub fn predict(&mut self, frames: &[Tensor<T>]) -> Result<Prediction> {
        self.graph.reset();
        let fwd = self.clip_logits(frames)?;
        let raw: Vec<f64> = self
            .graph
            .value(fwd.logits)
            .data()
            .iter()
            .map(|v| Scalar::to_f64(*v))
            .collect();
        prediction_from_logits(Head::FiveView, raw)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aggregation::SchemeKind;
    use rand::Rng;

    fn tiny_arch(head: Head) -> ArchitectureConfig {
        let mut cfg = ArchitectureConfig::mc_dsc(head);
        cfg.input_size = 16;
        cfg.conv_layers = 2;
        cfg.stage_widths = Some(vec![4, 6]);
        cfg.fc1_units = 10;
        cfg.fc2_units = 7;
        cfg
    }

    fn random_stack(seed: u64, size: usize) -> Tensor<f64> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..size * size * VIEW_COUNT)
            .map(|_| rng.gen_range(0.0..1.0))
            .collect();
        Tensor::new(vec![size, size, VIEW_COUNT], data).unwrap()
    }

    #[test]
    fn fingerprints_separate_specs() {
        let a = ModelSpec::Keyframe { arch: ArchitectureConfig::mc_dsc(Head::Binary) };
        let b = ModelSpec::Keyframe { arch: ArchitectureConfig::mc_dsc(Head::ThreeClass) };
        assert_eq!(fingerprint(&a).len(), 64);
        assert_eq!(fingerprint(&a), fingerprint(&a.clone()));
        assert_ne!(fingerprint(&a), fingerprint(&b));
    }

    #[test]
    fn zeroed_head_gives_even_probabilities() {
        let mut model: KeyframeModel<f64> = KeyframeModel::build(tiny_arch(Head::Binary), 1).unwrap();
        let w = model.params.lookup("head.weights").unwrap();
        let shape = model.graph.value(w).shape().to_vec();
        model.graph.set_value(w, Tensor::zeros(shape)).unwrap();
        let p = model.predict(&random_stack(2, 16)).unwrap();
        assert_eq!(p.probabilities, vec![0.5, 0.5]);

        let mut model: KeyframeModel<f64> =
            KeyframeModel::build(tiny_arch(Head::ThreeClass), 1).unwrap();
        let w = model.params.lookup("head.weights").unwrap();
        let shape = model.graph.value(w).shape().to_vec();
        model.graph.set_value(w, Tensor::zeros(shape)).unwrap();
        let p = model.predict(&random_stack(3, 16)).unwrap();
        for prob in p.probabilities {
            assert_eq!(prob, 1.0 / 3.0);
        }
    }

    #[test]
    fn first_layer_row_matches_hand_count() {
        let count = count_params(&ArchitectureConfig::mc_dsc(Head::Binary)).unwrap();
        assert_eq!(count.rows[0].label, "stage1");
        assert_eq!(count.rows[0].weights, 3 * 3 * 5 * 32);
        assert_eq!(count.rows[0].biases, 32);
        assert_eq!(count.rows[0].weights + count.rows[0].biases, 1472);
    }

    #[test]
    fn branch_stages_cost_five_single_channel_stacks() {
        let mc = count_params(&ArchitectureConfig::mc_dsc(Head::Binary)).unwrap();
        let mb = count_params(&ArchitectureConfig::mb_dsc(Head::Binary)).unwrap();
        let stage_total = |count: &ParamCount, stage: usize, with_bias: bool| -> usize {
            count
                .rows
                .iter()
                .filter(|r| r.label.contains(&format!("stage{stage}")))
                .map(|r| r.weights + if with_bias { r.biases } else { 0 })
                .sum()
        };
        // Later stages replicate the whole per-branch tensor set five-fold.
        for stage in 2..=5 {
            assert_eq!(stage_total(&mb, stage, true), 5 * stage_total(&mc, stage, true));
        }
        // The stem differs in input depth (1 vs 5), so only weights line up.
        assert_eq!(stage_total(&mb, 1, false), 5 * 3 * 3 * 1 * 32);
        assert_eq!(stage_total(&mc, 1, false), 3 * 3 * 5 * 32);
    }

    #[test]
    fn registered_params_match_closed_form() {
        for arch in [tiny_arch(Head::Binary), {
            let mut a = ArchitectureConfig::mb_dsc_fifth(Head::ThreeClass);
            a.input_size = 32;
            a
        }] {
            let model: KeyframeModel<f64> = KeyframeModel::build(arch.clone(), 3).unwrap();
            let walked = registered_param_total(&model.graph, &model.params);
            let counted = count_params(&arch).unwrap().total();
            assert_eq!(walked, counted);
        }
    }

    #[test]
    fn flop_counter_frozen_and_scaling() {
        let total = count_flops(&ArchitectureConfig::mc_dsc(Head::Binary)).unwrap();
        assert_eq!(total, 38_576_256);
        // Pointwise on 64x64, 32→64 channels.
        let pw = LayerSpec {
            kind: LayerKind::PointwiseConv,
            kernel: (1, 1),
            stride: 1,
            input_channels: 32,
            output_channels: 64,
        };
        assert_eq!(pw.mac_count(64), 64 * 64 * 32 * 64);
        // Stride 2 quarters the output area.
        let mut strided = pw.clone();
        strided.stride = 2;
        assert_eq!(strided.mac_count(64) * 4, pw.mac_count(64));
    }

    #[test]
    fn dsc_stage_costs_the_closed_form_fraction() {
        let dsc = ArchitectureConfig::mc_dsc(Head::Binary);
        let std = ArchitectureConfig::mc_standard(Head::Binary);
        let last = |arch: &ArchitectureConfig, stage: usize, weights_only: bool| -> f64 {
            count_params(arch)
                .unwrap()
                .rows
                .iter()
                .filter(|r| r.label.contains(&format!("stage{stage}")))
                .map(|r| (r.weights + if weights_only { 0 } else { r.biases }) as f64)
                .sum()
        };
        // Stage 5: 128 → 128 channels, 3x3 kernels.
        let ratio = last(&dsc, 5, true) / last(&std, 5, true);
        let want = 1.0 / 128.0 + 1.0 / 9.0;
        assert!((ratio - want).abs() < 1e-12);
    }

    #[test]
    fn head_swap_keeps_features_and_adds_two_units() {
        let arch = tiny_arch(Head::Binary);
        let mut src: KeyframeModel<f64> = KeyframeModel::build(arch.clone(), 5).unwrap();
        let mut dst = swap_head_binary_to_three(&src, 99).unwrap();
        let delta = registered_param_total(&dst.graph, &dst.params) as i64
            - registered_param_total(&src.graph, &src.params) as i64;
        let units = arch.fc2_units as i64;
        assert_eq!(delta, (units * 3 + 3) - (units + 1));

        let stack = random_stack(6, 16);
        let f_src = src.features(&stack).unwrap();
        let f_dst = dst.features(&stack).unwrap();
        assert_eq!(src.graph.value(f_src).data(), dst.graph.value(f_dst).data());
        assert_ne!(src.fingerprint(), dst.fingerprint());
        assert!(swap_head_binary_to_three(&dst, 1).is_err());
    }

    #[test]
    fn full_size_head_swap_delta() {
        // The published model ends in a 128-wide FC2, so the swap adds
        // (128*3+3) - (128*1+1) parameters.
        let binary = count_params(&ArchitectureConfig::mc_dsc(Head::Binary)).unwrap();
        let three = count_params(&ArchitectureConfig::mc_dsc(Head::ThreeClass)).unwrap();
        assert_eq!(
            three.total() - binary.total(),
            (128 * 3 + 3) - (128 + 1)
        );
    }

    #[test]
    fn zero_view_channel_leaves_branch_gradients_zero() {
        let mut arch = ArchitectureConfig::mb_dsc_fifth(Head::Binary);
        arch.input_size = 16;
        arch.conv_layers = 2;
        arch.stage_widths = Some(vec![4, 6]);
        arch.fc1_units = 10;
        arch.fc2_units = 7;
        let mut model: KeyframeModel<f64> = KeyframeModel::build(arch, 7).unwrap();
        let mut stack = random_stack(8, 16);
        let dead_view = 3usize;
        for i in 0..16 * 16 {
            stack.data_mut()[i * VIEW_COUNT + dead_view] = 0.0;
        }
        let logits = model.logits(&stack).unwrap();
        let loss = model.graph.bce_with_logit(logits, 1.0).unwrap();
        model.graph.backward(loss).unwrap();
        let mut dead_params = 0;
        let mut live_nonzero = false;
        let entries: Vec<(String, Var)> =
            model.params.entries().map(|(n, v)| (n.to_string(), v)).collect();
        for (name, var) in entries {
            let Some(grad) = model.graph.grad(var) else { continue };
            let zero = grad.data().iter().all(|&g| g == 0.0);
            if name.starts_with(&format!("branch{}.", dead_view + 1)) {
                assert!(zero, "{name} picked up gradient from a zero view");
                dead_params += 1;
            } else if name.starts_with("branch1.") {
                live_nonzero |= !zero;
            }
        }
        assert!(dead_params > 0, "no parameters inspected for the dead branch");
        assert!(live_nonzero, "live branch should receive gradient");
    }

    #[test]
    fn video_model_handles_partial_studies() {
        let mut arch = tiny_arch(Head::Binary);
        arch.fc1_units = 8;
        let spec = AggregationSpec::new(SchemeKind::Frameind);
        let mut model: VideoModel<f64> = VideoModel::build(arch, spec, 11).unwrap();
        let dims = model.frame_dims();
        assert_eq!((dims.height, dims.width), (8, 8));
        let mut rng = ChaCha20Rng::seed_from_u64(12);
        let frame = |rng: &mut ChaCha20Rng| {
            let data: Vec<f64> = (0..16 * 16).map(|_| rng.gen_range(0.0..1.0)).collect();
            Tensor::new(vec![16, 16, 1], data).unwrap()
        };
        let clips: Vec<Option<Vec<Tensor<f64>>>> = vec![
            Some(vec![frame(&mut rng), frame(&mut rng)]),
            None,
            Some(vec![frame(&mut rng)]),
            None,
            None,
        ];
        let (p, weights) = model.predict(&clips).unwrap();
        assert_eq!(p.probabilities.len(), 2);
        assert_eq!(weights[0].as_ref().unwrap().len(), 2);
        assert!(weights[1].is_none());
        assert_eq!(weights[2].as_ref().unwrap().len(), 1);

        let empty: Vec<Option<Vec<Tensor<f64>>>> = vec![None, None, None, None, None];
        assert!(model.predict(&empty).is_err());
    }

    #[test]
    fn view_classifier_emits_five_way_predictions() {
        let arch = tiny_arch(Head::Binary); // head is overridden internally
        let spec = AggregationSpec::new(SchemeKind::Temporal);
        let mut model: ViewClassifierModel<f64> =
            ViewClassifierModel::build(arch, spec, 13).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(14);
        let frames: Vec<Tensor<f64>> = (0..3)
            .map(|_| {
                let data: Vec<f64> = (0..16 * 16).map(|_| rng.gen_range(0.0..1.0)).collect();
                Tensor::new(vec![16, 16, 1], data).unwrap()
            })
            .collect();
        let p = model.predict(&frames).unwrap();
        assert_eq!(p.probabilities.len(), 5);
        let sum: f64 = p.probabilities.iter().sum();
        assert!((sum - 1.0).abs() < 1e-9);
        assert!(matches!(model.spec(), ModelSpec::ViewRouter { .. }));
    }
}
