//! Frame preparation: grayscale conversion, sector masking, ROI cropping,
//! resizing, and assembly of fixed-order five-view input stacks.

use crate::error::{data_err, shape_err, Result};
use crate::tensor::{Scalar, Tensor};
use serde::{Deserialize, Serialize};

/// The five standard views, in stacking order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[allow(clippy::upper_case_acronyms)]
pub enum ViewKind {
    PSLAX,
    PSSAX,
    A4C,
    SXLAX,
    SSLAX,
}

impl ViewKind {
    pub const ALL: [ViewKind; 5] = [
        ViewKind::PSLAX,
        ViewKind::PSSAX,
        ViewKind::A4C,
        ViewKind::SXLAX,
        ViewKind::SSLAX,
    ];

    /// Channel index in a stack.
    pub fn ordinal(self) -> usize {
        match self {
            ViewKind::PSLAX => 0,
            ViewKind::PSSAX => 1,
            ViewKind::A4C => 2,
            ViewKind::SXLAX => 3,
            ViewKind::SSLAX => 4,
        }
    }

    pub fn from_ordinal(i: usize) -> Option<ViewKind> {
        ViewKind::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            ViewKind::PSLAX => "PSLAX",
            ViewKind::PSSAX => "PSSAX",
            ViewKind::A4C => "A4C",
            ViewKind::SXLAX => "SXLAX",
            ViewKind::SSLAX => "SSLAX",
        }
    }

    pub fn parse(s: &str) -> Result<ViewKind> {
        ViewKind::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or(())
            .or_else(|_| data_err(format!("unknown view kind '{s}'")))
    }
}

/// One grayscale frame with values in [0, 1], row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    height: usize,
    width: usize,
    pixels: Vec<f64>,
}

impl Frame {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Frame> {
        if height == 0 || width == 0 {
            return shape_err("frame extents must be positive");
        }
        if pixels.len() != height * width {
            return shape_err(format!(
                "frame wants {} pixels, got {}",
                height * width,
                pixels.len()
            ));
        }
        if pixels.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return data_err("frame pixels must lie in [0, 1]");
        }
        Ok(Frame { height, width, pixels })
    }

    pub fn zeros(height: usize, width: usize) -> Frame {
        Frame { height, width, pixels: vec![0.0; height * width] }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: f64) {
        self.pixels[y * self.width + x] = v.clamp(0.0, 1.0);
    }

    /// Single-channel `[H, W, 1]` tensor for clip encoders.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_f64_slice(vec![self.height, self.width, 1], &self.pixels)
            .expect("pixel count matches by construction")
    }
}

/// Boolean sector coverage; `keep[i] == false` pixels are blanked.
#[derive(Debug, Clone, PartialEq)]
pub struct SectorMask {
    height: usize,
    width: usize,
    keep: Vec<bool>,
}

impl SectorMask {
    pub fn new(height: usize, width: usize, keep: Vec<bool>) -> Result<SectorMask> {
        if keep.len() != height * width {
            return shape_err(format!(
                "mask wants {} entries, got {}",
                height * width,
                keep.len()
            ));
        }
        Ok(SectorMask { height, width, keep })
    }

    /// Mask that keeps everything.
    pub fn full(height: usize, width: usize) -> SectorMask {
        SectorMask { height, width, keep: vec![true; height * width] }
    }

    pub fn keep(&self) -> &[bool] {
        &self.keep
    }
}

/// Rectangular region: top-left corner plus extents, pixel units.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoiRect {
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
}

impl RoiRect {
    pub fn full(height: usize, width: usize) -> RoiRect {
        RoiRect { x: 0, y: 0, width, height }
    }
}

/// Per-source acquisition geometry, loaded from a small JSON document.
/// Without a polygon the whole frame is kept; without an ROI the crop is the
/// full frame.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_polygon: Option<Vec<[f64; 2]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub roi: Option<RoiRect>,
}

impl Geometry {
    pub fn from_json(text: &str) -> Result<Geometry> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("geometry serializes")
    }

    /// Rasterize the sector polygon (even-odd rule at pixel centers) at the
    /// given extents.
    pub fn mask_for(&self, height: usize, width: usize) -> SectorMask {
        match &self.mask_polygon {
            None => SectorMask::full(height, width),
            Some(poly) => {
                let mut keep = vec![false; height * width];
                for y in 0..height {
                    for x in 0..width {
                        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                        keep[y * width + x] = point_in_polygon(px, py, poly);
                    }
                }
                SectorMask { height, width, keep }
            }
        }
    }

    pub fn roi_or_full(&self, height: usize, width: usize) -> RoiRect {
        self.roi.unwrap_or_else(|| RoiRect::full(height, width))
    }
}

fn point_in_polygon(px: f64, py: f64, poly: &[[f64; 2]]) -> bool {
    let mut inside = false;
    let n = poly.len();
    for i in 0..n {
        let [x1, y1] = poly[i];
        let [x2, y2] = poly[(i + 1) % n];
        if (y1 > py) != (y2 > py) {
            let x_cross = x1 + (py - y1) / (y2 - y1) * (x2 - x1);
            if px < x_cross {
                inside = !inside;
            }
        }
    }
    inside
}

/// ITU-R 601 luma of an `[H, W, 3]` RGB buffer with values in [0, 1].
pub fn to_grayscale(height: usize, width: usize, rgb: &[f64]) -> Result<Frame> {
    if rgb.len() != height * width * 3 {
        return shape_err(format!(
            "rgb buffer wants {} values, got {}",
            height * width * 3,
            rgb.len()
        ));
    }
    let pixels: Vec<f64> = rgb
        .chunks_exact(3)
        .map(|c| (0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2]).clamp(0.0, 1.0))
        .collect();
    Frame::new(height, width, pixels)
}

/// Blank everything outside the sector mask, then crop the ROI.
pub fn apply_mask_and_crop(frame: &Frame, mask: &SectorMask, roi: RoiRect) -> Result<Frame> {
    if mask.height != frame.height || mask.width != frame.width {
        return shape_err(format!(
            "mask extents {}x{} do not match frame {}x{}",
            mask.height, mask.width, frame.height, frame.width
        ));
    }
    if roi.width == 0
        || roi.height == 0
        || roi.x + roi.width > frame.width
        || roi.y + roi.height > frame.height
    {
        return shape_err(format!(
            "roi {:?} out of bounds for {}x{} frame",
            roi, frame.height, frame.width
        ));
    }
    let mut pixels = Vec::with_capacity(roi.width * roi.height);
    for y in roi.y..roi.y + roi.height {
        for x in roi.x..roi.x + roi.width {
            let i = y * frame.width + x;
            pixels.push(if mask.keep[i] { frame.pixels[i] } else { 0.0 });
        }
    }
    Ok(Frame { height: roi.height, width: roi.width, pixels })
}

/// Bilinear resize to a square target, corners aligned (so corners map to
/// corners exactly and a 2x2 image resampled to 3x3 averages at the center).
pub fn resize_bilinear(frame: &Frame, target: usize) -> Result<Frame> {
    if target < 2 {
        return shape_err("resize target must be at least 2 per axis");
    }
    let sy = if target > 1 { (frame.height - 1) as f64 / (target - 1) as f64 } else { 0.0 };
    let sx = if target > 1 { (frame.width - 1) as f64 / (target - 1) as f64 } else { 0.0 };
    let mut pixels = Vec::with_capacity(target * target);
    for y in 0..target {
        let fy = y as f64 * sy;
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(frame.height - 1);
        let wy = fy - y0 as f64;
        for x in 0..target {
            let fx = x as f64 * sx;
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(frame.width - 1);
            let wx = fx - x0 as f64;
            let top = frame.get(y0, x0) * (1.0 - wx) + frame.get(y0, x1) * wx;
            let bottom = frame.get(y1, x0) * (1.0 - wx) + frame.get(y1, x1) * wx;
            pixels.push((top * (1.0 - wy) + bottom * wy).clamp(0.0, 1.0));
        }
    }
    Ok(Frame { height: target, width: target, pixels })
}

/// Full preparation path for one raw grayscale frame.
pub fn prepare_frame(frame: &Frame, geometry: &Geometry, target: usize) -> Result<Frame> {
    let mask = geometry.mask_for(frame.height, frame.width);
    let roi = geometry.roi_or_full(frame.height, frame.width);
    let cropped = apply_mask_and_crop(frame, &mask, roi)?;
    resize_bilinear(&cropped, target)
}

/// Fixed-order five-view input stack; absent views are zero channels.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiViewStack {
    size: usize,
    data: Vec<f64>,
    present: [bool; 5],
}

impl MultiViewStack {
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn present(&self) -> [bool; 5] {
        self.present
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Channel plane for one view.
    pub fn channel(&self, view: ViewKind) -> Vec<f64> {
        let v = view.ordinal();
        (0..self.size * self.size).map(|i| self.data[i * 5 + v]).collect()
    }

    /// `[S, S, 5]` tensor for the single-frame models.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_f64_slice(vec![self.size, self.size, 5], &self.data)
            .expect("stack length matches by construction")
    }
}

/// Assemble frames into channel order. Insertion order of `frames` is
/// irrelevant; each view may appear at most once and every frame must be
/// `size`×`size`.
pub fn stack_views(size: usize, frames: &[(ViewKind, Frame)]) -> Result<MultiViewStack> {
    if size == 0 {
        return shape_err("stack size must be positive");
    }
    let mut data = vec![0.0; size * size * 5];
    let mut present = [false; 5];
    for (view, frame) in frames {
        let v = view.ordinal();
        if present[v] {
            return data_err(format!("view {} supplied twice", view.name()));
        }
        if frame.height != size || frame.width != size {
            return shape_err(format!(
                "frame for {} is {}x{}, stack wants {size}x{size}",
                view.name(),
                frame.height,
                frame.width
            ));
        }
        present[v] = true;
        for i in 0..size * size {
            data[i * 5 + v] = frame.pixels[i];
        }
    }
    Ok(MultiViewStack { size, data, present })
}
