//! Clip aggregation: reduce K per-frame feature maps to one fixed-size
//! feature vector plus per-frame attention weights.
//!
//! The four schemes live behind the [`Aggregator`] trait and are constructed
//! through a name-keyed registry, so models select one at runtime from
//! configuration. All schemes emit weights on the probability simplex; the
//! frame-independent and non-local schemes are exactly (bitwise) invariant to
//! frame order, while the recurrent and temporal-conv schemes are
//! order-sensitive by design.

use crate::error::{config_err, shape_err, Result};
use crate::graph::rnn::{bilstm_forward, LstmParams};
use crate::graph::{Graph, Var};
use crate::layers::{he_uniform, Dense, ParamSet};
use crate::tensor::{Scalar, Tensor};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemeKind {
    Frameind,
    Rnn,
    Nonlocal,
    Temporal,
}

impl SchemeKind {
    pub fn name(self) -> &'static str {
        match self {
            SchemeKind::Frameind => "frameind",
            SchemeKind::Rnn => "rnn",
            SchemeKind::Nonlocal => "nonlocal",
            SchemeKind::Temporal => "temporal",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "frameind" => Ok(SchemeKind::Frameind),
            "rnn" => Ok(SchemeKind::Rnn),
            "nonlocal" => Ok(SchemeKind::Nonlocal),
            "temporal" => Ok(SchemeKind::Temporal),
            other => config_err(format!(
                "unknown aggregation scheme '{other}' (expected frameind, rnn, nonlocal, temporal)"
            )),
        }
    }

    pub fn all() -> [SchemeKind; 4] {
        [
            SchemeKind::Frameind,
            SchemeKind::Rnn,
            SchemeKind::Nonlocal,
            SchemeKind::Temporal,
        ]
    }
}

/// Aggregation configuration carried inside model specs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregationSpec {
    pub scheme: SchemeKind,
    /// Hidden units per direction of the recurrent scheme.
    #[serde(default = "default_rnn_hidden")]
    pub rnn_hidden: usize,
    /// Let non-local positions attend to themselves (default: every position
    /// attends to all *other* positions).
    #[serde(default)]
    pub nonlocal_include_self: bool,
    /// Apply the tanh output block of the frame-independent scheme. Disabled
    /// only in test configurations that compare the raw weighted sum against
    /// the single-frame feature path.
    #[serde(default = "default_true")]
    pub frameind_output_block: bool,
}

fn default_rnn_hidden() -> usize {
    256
}

fn default_true() -> bool {
    true
}

impl AggregationSpec {
    pub fn new(scheme: SchemeKind) -> Self {
        AggregationSpec {
            scheme,
            rnn_hidden: default_rnn_hidden(),
            nonlocal_include_self: false,
            frameind_output_block: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.scheme == SchemeKind::Rnn && self.rnn_hidden == 0 {
            return config_err("rnn_hidden must be positive");
        }
        Ok(())
    }
}

/// Spatial/channel extents of one frame's feature map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrameDims {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl FrameDims {
    pub fn new(height: usize, width: usize, channels: usize) -> Self {
        FrameDims { height, width, channels }
    }

    /// Flattened per-frame feature length.
    pub fn flat(&self) -> usize {
        self.height * self.width * self.channels
    }
}

/// Result of aggregating one clip.
pub struct AggOutput {
    /// Clip-level feature, length [`FrameDims::flat`].
    pub feature: Var,
    /// Per-frame weights on the simplex, length K.
    pub weights: Var,
    /// Pre-normalization per-frame scores where the scheme defines them;
    /// equal to `weights` for the non-local scheme.
    pub scores: Var,
}

/// One clip-aggregation strategy with its parameters already registered on a
/// graph. `aggregate` may be called repeatedly (with `Graph::reset` between
/// studies); it only appends transient nodes.
pub trait Aggregator<T: Scalar> {
    fn scheme(&self) -> SchemeKind;
    fn aggregate(&self, g: &mut Graph<T>, frames: &[Var]) -> Result<AggOutput>;
}

type BuildFn<T> = fn(
    &mut Graph<T>,
    &mut ParamSet,
    &mut ChaCha20Rng,
    &str,
    &AggregationSpec,
    FrameDims,
) -> Result<Box<dyn Aggregator<T>>>;

fn registry<T: Scalar>() -> [(&'static str, BuildFn<T>); 4] {
    [
        ("frameind", FrameIndependent::build),
        ("rnn", Recurrent::build),
        ("nonlocal", NonLocal::build),
        ("temporal", TemporalScore::build),
    ]
}

/// Names accepted by [`build_aggregator`], in registry order.
pub fn scheme_names() -> Vec<&'static str> {
    registry::<f64>().iter().map(|(n, _)| *n).collect()
}

/// Construct the scheme selected by `spec`, registering its parameters under
/// `prefix` (e.g. `agg`).
pub fn build_aggregator<T: Scalar>(
    g: &mut Graph<T>,
    params: &mut ParamSet,
    rng: &mut ChaCha20Rng,
    prefix: &str,
    spec: &AggregationSpec,
    dims: FrameDims,
) -> Result<Box<dyn Aggregator<T>>> {
    spec.validate()?;
    let name = spec.scheme.name();
    let (_, build) = registry::<T>()
        .into_iter()
        .find(|(n, _)| *n == name)
        .expect("every scheme kind is registered");
    build(g, params, rng, prefix, spec, dims)
}

/// Squared distance between attention weights and the one-hot vector at the
/// labeled key frame.
pub fn keyframe_supervision_loss<T: Scalar>(
    g: &mut Graph<T>,
    weights: Var,
    key_index: usize,
) -> Result<Var> {
    let k = g.value(weights).data().len();
    if key_index >= k {
        return shape_err(format!("key frame {key_index} out of range for {k} weights"));
    }
    let mut onehot = Tensor::zeros(vec![k]);
    onehot.data_mut()[key_index] = T::from_f64(1.0);
    g.l2_loss(weights, onehot)
}

fn check_frames<T: Scalar>(g: &Graph<T>, frames: &[Var], dims: FrameDims) -> Result<()> {
    if frames.is_empty() {
        return shape_err("clip must contain at least one frame");
    }
    let want = [dims.height, dims.width, dims.channels];
    for &f in frames {
        if g.value(f).shape() != &want[..] {
            return shape_err(format!(
                "frame shape {:?} does not match aggregator dims {want:?}",
                g.value(f).shape()
            ));
        }
    }
    Ok(())
}

fn flatten_frames<T: Scalar>(g: &mut Graph<T>, frames: &[Var]) -> Vec<Var> {
    frames.iter().map(|&f| g.flatten(f)).collect()
}

/// Attention from a learned query on each frame independently:
/// e_k = q·f_k, a = softmax(e), r = (1/K)·Σ a_k f_k, out = tanh(w·r + b).
/// The 1/K factor is kept as designed, which makes the aggregate's scale
/// depend on clip length; the tanh block keeps the output bounded anyway.
struct FrameIndependent {
    query: Var,
    out_scale: Var,
    out_shift: Var,
    output_block: bool,
    dims: FrameDims,
}

impl FrameIndependent {
    fn build<T: Scalar>(
        g: &mut Graph<T>,
        params: &mut ParamSet,
        _rng: &mut ChaCha20Rng,
        prefix: &str,
        spec: &AggregationSpec,
        dims: FrameDims,
    ) -> Result<Box<dyn Aggregator<T>>> {
        // Zero query starts from uniform attention.
        let query = params.add(
            g,
            format!("{prefix}.query.weights"),
            Tensor::zeros(vec![1, dims.flat()]),
        )?;
        let out_scale = params.add(
            g,
            format!("{prefix}.out.scale"),
            Tensor::new(vec![1], vec![T::from_f64(1.0)])?,
        )?;
        let out_shift = params.add(g, format!("{prefix}.out.shift"), Tensor::zeros(vec![1]))?;
        Ok(Box::new(FrameIndependent {
            query,
            out_scale,
            out_shift,
            output_block: spec.frameind_output_block,
            dims,
        }))
    }
}

impl<T: Scalar> Aggregator<T> for FrameIndependent {
    fn scheme(&self) -> SchemeKind {
        SchemeKind::Frameind
    }

    fn aggregate(&self, g: &mut Graph<T>, frames: &[Var]) -> Result<AggOutput> {
        check_frames(g, frames, self.dims)?;
        let flats = flatten_frames(g, frames);
        let per_frame: Vec<Var> = flats
            .iter()
            .map(|&f| g.fully_connected(f, self.query, None))
            .collect::<Result<_>>()?;
        let scores = g.concat(&per_frame)?;
        let weights = g.softmax(scores)?;
        let stacked = g.stack(&flats)?;
        let sum = g.weighted_frame_sum(weights, stacked)?;
        let pooled = g.scale(sum, 1.0 / frames.len() as f64);
        let feature = if self.output_block {
            let lin = g.scalar_affine(pooled, self.out_scale, self.out_shift)?;
            g.tanh(lin)
        } else {
            pooled
        };
        Ok(AggOutput { feature, weights, scores })
    }
}

/// Bidirectional LSTM over the frame sequence; a linear readout of each
/// step's hidden state gives the score, softmax the weights, and the
/// aggregate is the weighted sum of flattened frame features.
struct Recurrent {
    forward: LstmParams,
    backward: LstmParams,
    readout: Dense,
    hidden: usize,
    dims: FrameDims,
}

impl Recurrent {
    fn build<T: Scalar>(
        g: &mut Graph<T>,
        params: &mut ParamSet,
        rng: &mut ChaCha20Rng,
        prefix: &str,
        spec: &AggregationSpec,
        dims: FrameDims,
    ) -> Result<Box<dyn Aggregator<T>>> {
        let hidden = spec.rnn_hidden;
        let d = dims.flat();
        let direction = |g: &mut Graph<T>,
                             params: &mut ParamSet,
                             rng: &mut ChaCha20Rng,
                             name: &str|
         -> Result<LstmParams> {
            let weights = params.add(
                g,
                format!("{prefix}.{name}.weights"),
                he_uniform(rng, vec![4 * hidden, d + hidden], d + hidden),
            )?;
            // Forget-gate block starts open so early training does not wipe
            // the cell state.
            let mut bias_init = Tensor::zeros(vec![4 * hidden]);
            for b in &mut bias_init.data_mut()[hidden..2 * hidden] {
                *b = T::from_f64(1.0);
            }
            let bias = params.add(g, format!("{prefix}.{name}.bias"), bias_init)?;
            Ok(LstmParams { weights, bias })
        };
        let forward = direction(g, params, rng, "fwd")?;
        let backward = direction(g, params, rng, "bwd")?;
        let readout = Dense::init(g, params, rng, &format!("{prefix}.readout"), 2 * hidden, 1)?;
        Ok(Box::new(Recurrent { forward, backward, readout, hidden, dims }))
    }
}

impl<T: Scalar> Aggregator<T> for Recurrent {
    fn scheme(&self) -> SchemeKind {
        SchemeKind::Rnn
    }

    fn aggregate(&self, g: &mut Graph<T>, frames: &[Var]) -> Result<AggOutput> {
        check_frames(g, frames, self.dims)?;
        let flats = flatten_frames(g, frames);
        let states = bilstm_forward(g, &flats, self.forward, self.backward, self.hidden)?;
        let per_step: Vec<Var> = states
            .iter()
            .map(|&s| self.readout.forward(g, s))
            .collect::<Result<_>>()?;
        let scores = g.concat(&per_step)?;
        let weights = g.softmax(scores)?;
        let stacked = g.stack(&flats)?;
        let feature = g.weighted_frame_sum(weights, stacked)?;
        Ok(AggOutput { feature, weights, scores })
    }
}

/// Non-local block over all K·H·W positions: dot-product similarities,
/// row-normalized attention (self excluded by default), a pointwise value
/// map, a learned per-channel output scale (zero at init, so the block
/// starts as the identity), and a residual connection; frame maps are then
/// averaged. Per-frame weights are the mean attention mass each frame
/// receives, which lies on the simplex because every row normalizes to one.
struct NonLocal {
    value_kernels: Var,
    value_bias: Var,
    out_scale: Var,
    include_self: bool,
    dims: FrameDims,
}

impl NonLocal {
    fn build<T: Scalar>(
        g: &mut Graph<T>,
        params: &mut ParamSet,
        rng: &mut ChaCha20Rng,
        prefix: &str,
        spec: &AggregationSpec,
        dims: FrameDims,
    ) -> Result<Box<dyn Aggregator<T>>> {
        let c = dims.channels;
        let value_kernels = params.add(
            g,
            format!("{prefix}.value.kernels"),
            he_uniform(rng, vec![1, 1, c, c], c),
        )?;
        let value_bias = params.add(g, format!("{prefix}.value.bias"), Tensor::zeros(vec![c]))?;
        let out_scale = params.add(g, format!("{prefix}.out.scale"), Tensor::zeros(vec![c]))?;
        Ok(Box::new(NonLocal {
            value_kernels,
            value_bias,
            out_scale,
            include_self: spec.nonlocal_include_self,
            dims,
        }))
    }
}

impl<T: Scalar> Aggregator<T> for NonLocal {
    fn scheme(&self) -> SchemeKind {
        SchemeKind::Nonlocal
    }

    fn aggregate(&self, g: &mut Graph<T>, frames: &[Var]) -> Result<AggOutput> {
        check_frames(g, frames, self.dims)?;
        let k = frames.len();
        let (hw, c) = (self.dims.height * self.dims.width, self.dims.channels);
        let n = k * hw;
        let rows: Vec<Var> = frames
            .iter()
            .map(|&f| g.reshape(f, vec![hw, c]))
            .collect::<Result<_>>()?;
        let stacked = g.stack(&rows)?;
        let positions = g.reshape(stacked, vec![n, c])?;
        let similarity = g.matmul_nt(positions, positions)?;
        let attention = g.nonlocal_row_softmax(similarity, k, !self.include_self)?;
        let as_image = g.reshape(positions, vec![n, 1, c])?;
        let values = g.pointwise_conv(as_image, self.value_kernels, Some(self.value_bias))?;
        let values = g.reshape(values, vec![n, c])?;
        let mixed = g.framewise_matmul(attention, values, k)?;
        let scaled = g.channel_scale(mixed, self.out_scale)?;
        let restructured = g.add(scaled, positions)?;
        let per_frame = g.reshape(restructured, vec![k, hw * c])?;
        let feature = g.global_average_pool(per_frame)?;
        // Mass each frame receives, averaged over query positions.
        let mut indicator = Tensor::zeros(vec![n, k]);
        for i in 0..n {
            indicator.data_mut()[i * k + i / hw] = T::from_f64(1.0);
        }
        let indicator = g.constant(indicator);
        let mass = g.matmul(attention, indicator)?;
        let weights = g.global_average_pool(mass)?;
        Ok(AggOutput { feature, weights, scores: weights })
    }
}

/// Shared full-extent spatial convolution collapses each frame to a channel
/// vector; two stride-1, same-padded temporal convolutions (kernel 3) score
/// the sequence, so a frame influences scores at most two steps away.
struct TemporalScore {
    spatial: Dense,
    t1_kernels: Var,
    t1_bias: Var,
    t2_kernels: Var,
    t2_bias: Var,
    dims: FrameDims,
}

/// Channel widths fixed by the published module: spatial summary 128, first
/// temporal layer 64, second collapses to one score per frame.
const TEMPORAL_SPATIAL_CHANNELS: usize = 128;
const TEMPORAL_MID_CHANNELS: usize = 64;

impl TemporalScore {
    fn build<T: Scalar>(
        g: &mut Graph<T>,
        params: &mut ParamSet,
        rng: &mut ChaCha20Rng,
        prefix: &str,
        _spec: &AggregationSpec,
        dims: FrameDims,
    ) -> Result<Box<dyn Aggregator<T>>> {
        let spatial = Dense::init(
            g,
            params,
            rng,
            &format!("{prefix}.spatial"),
            dims.flat(),
            TEMPORAL_SPATIAL_CHANNELS,
        )?;
        let t1_kernels = params.add(
            g,
            format!("{prefix}.t1.kernels"),
            he_uniform(
                rng,
                vec![3, TEMPORAL_SPATIAL_CHANNELS, TEMPORAL_MID_CHANNELS],
                3 * TEMPORAL_SPATIAL_CHANNELS,
            ),
        )?;
        let t1_bias = params.add(
            g,
            format!("{prefix}.t1.bias"),
            Tensor::zeros(vec![TEMPORAL_MID_CHANNELS]),
        )?;
        let t2_kernels = params.add(
            g,
            format!("{prefix}.t2.kernels"),
            he_uniform(rng, vec![3, TEMPORAL_MID_CHANNELS, 1], 3 * TEMPORAL_MID_CHANNELS),
        )?;
        let t2_bias = params.add(g, format!("{prefix}.t2.bias"), Tensor::zeros(vec![1]))?;
        Ok(Box::new(TemporalScore { spatial, t1_kernels, t1_bias, t2_kernels, t2_bias, dims }))
    }
}

impl<T: Scalar> Aggregator<T> for TemporalScore {
    fn scheme(&self) -> SchemeKind {
        SchemeKind::Temporal
    }

    fn aggregate(&self, g: &mut Graph<T>, frames: &[Var]) -> Result<AggOutput> {
        check_frames(g, frames, self.dims)?;
        let flats = flatten_frames(g, frames);
        let summaries: Vec<Var> = flats
            .iter()
            .map(|&f| {
                let s = self.spatial.forward(g, f)?;
                Ok(g.relu(s))
            })
            .collect::<Result<_>>()?;
        let seq = g.stack(&summaries)?;
        let t1 = g.temporal_conv(seq, self.t1_kernels, Some(self.t1_bias))?;
        let t1 = g.relu(t1);
        let t2 = g.temporal_conv(t1, self.t2_kernels, Some(self.t2_bias))?;
        let scores = g.flatten(t2);
        let weights = g.softmax(scores)?;
        let stacked = g.stack(&flats)?;
        let feature = g.weighted_frame_sum(weights, stacked)?;
        Ok(AggOutput { feature, weights, scores })
    }
}
