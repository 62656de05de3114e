//! Layer descriptions, parameter initialization, and conv-stack assembly.

use crate::error::{shape_err, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Scalar, Tensor};
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    StandardConv,
    DepthwiseConv,
    PointwiseConv,
    FullyConnected,
    Bilstm,
    TemporalConv,
}

/// One layer of a network, in the shape the accounting and shape-ledger
/// checks walk over.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    /// Kernel extents: (k, k) for spatial convs, (kt, 1) for temporal,
    /// (1, 1) for fully connected / bilstm.
    pub kernel: (usize, usize),
    pub stride: usize,
    pub input_channels: usize,
    pub output_channels: usize,
}

impl LayerSpec {
    pub fn validate(&self) -> Result<()> {
        if self.stride == 0 || self.input_channels == 0 || self.output_channels == 0 {
            return shape_err(format!("degenerate layer spec {self:?}"));
        }
        match self.kind {
            LayerKind::DepthwiseConv if self.output_channels != self.input_channels => {
                shape_err("depthwise layer must keep its channel count")
            }
            LayerKind::PointwiseConv if self.kernel != (1, 1) => {
                shape_err("pointwise layer must have a 1x1 kernel")
            }
            _ => Ok(()),
        }
    }

    /// Learnable weight element count (biases excluded).
    pub fn weight_count(&self) -> usize {
        let (kh, kw) = self.kernel;
        match self.kind {
            LayerKind::StandardConv => kh * kw * self.input_channels * self.output_channels,
            LayerKind::DepthwiseConv => kh * kw * self.input_channels,
            LayerKind::PointwiseConv => self.input_channels * self.output_channels,
            LayerKind::FullyConnected => self.input_channels * self.output_channels,
            LayerKind::TemporalConv => kh * self.input_channels * self.output_channels,
            // Fused gate weights, both directions: 2 x [4H, D+H].
            LayerKind::Bilstm => {
                2 * 4 * self.output_channels * (self.input_channels + self.output_channels)
            }
        }
    }

    pub fn bias_count(&self) -> usize {
        match self.kind {
            LayerKind::DepthwiseConv => self.input_channels,
            LayerKind::Bilstm => 2 * 4 * self.output_channels,
            _ => self.output_channels,
        }
    }

    /// Multiply-accumulate count for one forward pass at the given input
    /// spatial extent (square). FC/recurrent layers ignore the extent.
    pub fn mac_count(&self, input_extent: usize) -> usize {
        let out_extent = input_extent.div_ceil(self.stride);
        let area = out_extent * out_extent;
        match self.kind {
            LayerKind::StandardConv | LayerKind::DepthwiseConv | LayerKind::PointwiseConv => {
                area * self.weight_count()
            }
            LayerKind::FullyConnected => self.weight_count(),
            LayerKind::TemporalConv => input_extent * self.weight_count(),
            LayerKind::Bilstm => input_extent * self.weight_count(),
        }
    }
}

/// He-style uniform draw: U(-sqrt(6/fan_in), +sqrt(6/fan_in)).
pub fn he_uniform<T: Scalar>(rng: &mut ChaCha20Rng, shape: Vec<usize>, fan_in: usize) -> Tensor<T> {
    let limit = (6.0 / fan_in.max(1) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<T> = (0..n)
        .map(|_| T::from_f64(rng.gen_range(-limit..limit)))
        .collect();
    Tensor::new(shape, data).expect("shape/data agree by construction")
}

/// Registered parameter tensors with stable names, in registration order.
pub struct ParamSet {
    names: Vec<String>,
    vars: Vec<Var>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet { names: Vec::new(), vars: Vec::new() }
    }

    pub fn add<T: Scalar>(
        &mut self,
        g: &mut Graph<T>,
        name: impl Into<String>,
        value: Tensor<T>,
    ) -> Result<Var> {
        let name = name.into();
        if self.names.iter().any(|n| *n == name) {
            return shape_err(format!("duplicate parameter name {name}"));
        }
        let var = g.param(value)?;
        self.names.push(name);
        self.vars.push(var);
        Ok(var)
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, Var)> {
        self.names.iter().map(|s| s.as_str()).zip(self.vars.iter().copied())
    }

    pub fn lookup(&self, name: &str) -> Option<Var> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.vars[i])
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}

/// Handles for one conv stage of a backbone.
pub enum ConvStage {
    Standard { kernels: Var, bias: Var, stride: usize },
    DwPw { dw_kernels: Var, dw_bias: Var, pw_kernels: Var, pw_bias: Var, stride: usize },
}

impl ConvStage {
    /// Apply the stage, with ReLU after every convolution.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let y = match *self {
            ConvStage::Standard { kernels, bias, stride } => {
                g.conv2d(x, kernels, Some(bias), stride)?
            }
            ConvStage::DwPw { dw_kernels, dw_bias, pw_kernels, pw_bias, stride } => {
                let d = g.depthwise_conv(x, dw_kernels, Some(dw_bias), stride)?;
                let d = g.relu(d);
                g.pointwise_conv(d, pw_kernels, Some(pw_bias))?
            }
        };
        Ok(g.relu(y))
    }
}

/// Register one conv stage's parameters under `prefix`.
pub fn init_conv_stage<T: Scalar>(
    g: &mut Graph<T>,
    params: &mut ParamSet,
    rng: &mut ChaCha20Rng,
    prefix: &str,
    spec: &LayerSpec,
    dsc: bool,
) -> Result<ConvStage> {
    spec.validate()?;
    let (k, _) = spec.kernel;
    let (cin, cout) = (spec.input_channels, spec.output_channels);
    if dsc {
        let dw_kernels = params.add(
            g,
            format!("{prefix}.dw.kernels"),
            he_uniform(rng, vec![k, k, cin], k * k),
        )?;
        let dw_bias = params.add(g, format!("{prefix}.dw.bias"), Tensor::zeros(vec![cin]))?;
        let pw_kernels = params.add(
            g,
            format!("{prefix}.pw.kernels"),
            he_uniform(rng, vec![1, 1, cin, cout], cin),
        )?;
        let pw_bias = params.add(g, format!("{prefix}.pw.bias"), Tensor::zeros(vec![cout]))?;
        Ok(ConvStage::DwPw { dw_kernels, dw_bias, pw_kernels, pw_bias, stride: spec.stride })
    } else {
        let kernels = params.add(
            g,
            format!("{prefix}.kernels"),
            he_uniform(rng, vec![k, k, cin, cout], k * k * cin),
        )?;
        let bias = params.add(g, format!("{prefix}.bias"), Tensor::zeros(vec![cout]))?;
        Ok(ConvStage::Standard { kernels, bias, stride: spec.stride })
    }
}

/// Dense layer handles.
pub struct Dense {
    pub weights: Var,
    pub bias: Var,
}

impl Dense {
    pub fn init<T: Scalar>(
        g: &mut Graph<T>,
        params: &mut ParamSet,
        rng: &mut ChaCha20Rng,
        prefix: &str,
        n_in: usize,
        n_out: usize,
    ) -> Result<Dense> {
        let weights = params.add(
            g,
            format!("{prefix}.weights"),
            he_uniform(rng, vec![n_out, n_in], n_in),
        )?;
        let bias = params.add(g, format!("{prefix}.bias"), Tensor::zeros(vec![n_out]))?;
        Ok(Dense { weights, bias })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        g.fully_connected(x, self.weights, Some(self.bias))
    }
}
