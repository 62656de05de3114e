//! Backbone architecture configuration, presets, and the shape ledger.

use crate::error::{config_err, Result};
use crate::layers::{LayerKind, LayerSpec};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Topology {
    /// All views stacked as channels of one network.
    MultiChannel,
    /// Five independent per-view encoders merged at the first dense layer.
    MultiBranch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvKind {
    /// Depthwise + pointwise pairs.
    Dsc,
    /// Plain convolutions of the same topology.
    Standard,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    /// One logit, sigmoid, threshold 0.5.
    Binary,
    /// Softmax over {negative, VSD, ASD}.
    ThreeClass,
    /// Softmax over the five view kinds (view classifier).
    FiveView,
}

impl Head {
    pub fn units(self) -> usize {
        match self {
            Head::Binary => 1,
            Head::ThreeClass => 3,
            Head::FiveView => 5,
        }
    }

    pub fn class_count(self) -> usize {
        match self {
            Head::Binary => 2,
            Head::ThreeClass => 3,
            Head::FiveView => 5,
        }
    }
}

pub const VIEW_COUNT: usize = 5;

/// Key-frame classifier configuration. Defaults reproduce the published
/// multi-channel layout: 128x128 input, 5 conv stages (stem + 4 dw/pw pairs),
/// stage widths 32/64/128/128/128, dense layers 1024 and 128.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureConfig {
    pub topology: Topology,
    pub conv_kind: ConvKind,
    /// Total conv stages including the stem; 2..=8.
    pub conv_layers: usize,
    /// Square input extent, one of 16/32/64/128/256.
    pub input_size: usize,
    /// Scales default stage widths (round to nearest, min 1). Ignored when
    /// `stage_widths` is given.
    pub width_multiplier: f64,
    /// Explicit per-stage output channels (length == conv_layers), e.g. the
    /// published 1/5-width multi-branch uses [7, 14, 28, 28, 28].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage_widths: Option<Vec<usize>>,
    pub fc1_units: usize,
    pub fc2_units: usize,
    pub head: Head,
}

impl ArchitectureConfig {
    pub fn mc_dsc(head: Head) -> Self {
        ArchitectureConfig {
            topology: Topology::MultiChannel,
            conv_kind: ConvKind::Dsc,
            conv_layers: 5,
            input_size: 128,
            width_multiplier: 1.0,
            stage_widths: None,
            fc1_units: 1024,
            fc2_units: 128,
            head,
        }
    }

    pub fn mb_dsc(head: Head) -> Self {
        ArchitectureConfig {
            topology: Topology::MultiBranch,
            fc1_units: 5120,
            ..Self::mc_dsc(head)
        }
    }

    /// Width-reduced multi-branch: stage widths 7/14/28/28/28, dense 1024.
    pub fn mb_dsc_fifth(head: Head) -> Self {
        ArchitectureConfig {
            topology: Topology::MultiBranch,
            stage_widths: Some(vec![7, 14, 28, 28, 28]),
            fc1_units: 1024,
            ..Self::mc_dsc(head)
        }
    }

    pub fn mc_standard(head: Head) -> Self {
        ArchitectureConfig {
            conv_kind: ConvKind::Standard,
            ..Self::mc_dsc(head)
        }
    }

    pub fn preset(name: &str, head: Head) -> Result<Self> {
        match name {
            "mc-dsc" => Ok(Self::mc_dsc(head)),
            "mb-dsc" => Ok(Self::mb_dsc(head)),
            "mb-dsc-fifth" => Ok(Self::mb_dsc_fifth(head)),
            "mc-standard" => Ok(Self::mc_standard(head)),
            other => config_err(format!(
                "unknown architecture '{other}' (expected mc-dsc, mb-dsc, mb-dsc-fifth, mc-standard)"
            )),
        }
    }

    pub fn preset_names() -> [&'static str; 4] {
        ["mc-dsc", "mb-dsc", "mb-dsc-fifth", "mc-standard"]
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=8).contains(&self.conv_layers) {
            return config_err(format!("conv_layers must be 2..=8, got {}", self.conv_layers));
        }
        if ![16, 32, 64, 128, 256].contains(&self.input_size) {
            return config_err(format!(
                "input_size must be one of 16/32/64/128/256, got {}",
                self.input_size
            ));
        }
        if !(self.width_multiplier > 0.0 && self.width_multiplier <= 1.0) {
            return config_err(format!(
                "width_multiplier must be in (0, 1], got {}",
                self.width_multiplier
            ));
        }
        if let Some(w) = &self.stage_widths {
            if w.len() != self.conv_layers {
                return config_err(format!(
                    "stage_widths has {} entries for {} conv layers",
                    w.len(),
                    self.conv_layers
                ));
            }
            if w.iter().any(|&c| c == 0) {
                return config_err("stage_widths entries must be positive");
            }
        }
        if self.fc1_units == 0 || self.fc2_units == 0 {
            return config_err("dense widths must be positive");
        }
        Ok(())
    }

    /// Output channels per conv stage after width resolution.
    pub fn resolved_widths(&self) -> Result<Vec<usize>> {
        self.validate()?;
        if let Some(w) = &self.stage_widths {
            return Ok(w.clone());
        }
        let mut widths = Vec::with_capacity(self.conv_layers);
        let mut base = 32usize;
        for i in 0..self.conv_layers {
            if i > 0 {
                base = (base * 2).min(128);
            }
            let scaled = ((base as f64) * self.width_multiplier).round().max(1.0) as usize;
            widths.push(scaled);
        }
        Ok(widths)
    }

    /// Stride per conv stage: stem 2, first separable stage 1, then 2.
    pub fn stage_strides(&self) -> Vec<usize> {
        (0..self.conv_layers)
            .map(|i| if i == 1 { 1 } else { 2 })
            .collect()
    }

    /// Input channel count of one branch: the full stack for multi-channel,
    /// one view for multi-branch.
    pub fn branch_in_channels(&self) -> usize {
        match self.topology {
            Topology::MultiChannel => VIEW_COUNT,
            Topology::MultiBranch => 1,
        }
    }

    pub fn branch_count(&self) -> usize {
        match self.topology {
            Topology::MultiChannel => 1,
            Topology::MultiBranch => VIEW_COUNT,
        }
    }

    /// Layer specs of one branch's conv stack, in forward order. The stem is
    /// always a standard conv; later stages follow `conv_kind`.
    pub fn branch_layers(&self) -> Result<Vec<LayerSpec>> {
        self.conv_stack_layers(self.branch_in_channels())
    }

    /// Conv stack with an explicit input depth (clip encoders run the same
    /// stack over single-channel frames).
    pub fn conv_stack_layers(&self, in_channels: usize) -> Result<Vec<LayerSpec>> {
        let widths = self.resolved_widths()?;
        let strides = self.stage_strides();
        let mut layers = Vec::new();
        let mut cin = in_channels;
        for (i, (&cout, &stride)) in widths.iter().zip(&strides).enumerate() {
            if i == 0 || self.conv_kind == ConvKind::Standard {
                layers.push(LayerSpec {
                    kind: LayerKind::StandardConv,
                    kernel: (3, 3),
                    stride,
                    input_channels: cin,
                    output_channels: cout,
                });
            } else {
                layers.push(LayerSpec {
                    kind: LayerKind::DepthwiseConv,
                    kernel: (3, 3),
                    stride,
                    input_channels: cin,
                    output_channels: cin,
                });
                layers.push(LayerSpec {
                    kind: LayerKind::PointwiseConv,
                    kernel: (1, 1),
                    stride: 1,
                    input_channels: cin,
                    output_channels: cout,
                });
            }
            cin = cout;
        }
        Ok(layers)
    }

    /// (extent, channels) after every conv layer of one branch, starting with
    /// the input itself.
    pub fn shape_ledger(&self) -> Result<Vec<(usize, usize)>> {
        let mut shapes = vec![(self.input_size, self.branch_in_channels())];
        let mut extent = self.input_size;
        for layer in self.branch_layers()? {
            extent = extent.div_ceil(layer.stride);
            shapes.push((extent, layer.output_channels));
        }
        Ok(shapes)
    }

    /// Flattened feature length of one branch.
    pub fn branch_flat_len(&self) -> Result<usize> {
        let (extent, channels) = *self.shape_ledger()?.last().expect("ledger is non-empty");
        Ok(extent * extent * channels)
    }

    /// Input width of the first dense layer (all branches concatenated).
    pub fn fc1_input_len(&self) -> Result<usize> {
        Ok(self.branch_flat_len()? * self.branch_count())
    }

    /// All layers including dense ones, for accounting: conv layers repeated
    /// per branch, then FC1, FC2, head.
    pub fn all_layers(&self) -> Result<Vec<LayerSpec>> {
        let mut layers = Vec::new();
        for _ in 0..self.branch_count() {
            layers.extend(self.branch_layers()?);
        }
        layers.push(LayerSpec {
            kind: LayerKind::FullyConnected,
            kernel: (1, 1),
            stride: 1,
            input_channels: self.fc1_input_len()?,
            output_channels: self.fc1_units,
        });
        layers.push(LayerSpec {
            kind: LayerKind::FullyConnected,
            kernel: (1, 1),
            stride: 1,
            input_channels: self.fc1_units,
            output_channels: self.fc2_units,
        });
        layers.push(LayerSpec {
            kind: LayerKind::FullyConnected,
            kernel: (1, 1),
            stride: 1,
            input_channels: self.fc2_units,
            output_channels: self.head.units(),
        });
        Ok(layers)
    }
}
