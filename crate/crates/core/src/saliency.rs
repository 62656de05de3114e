//! Occlusion saliency: slide a zero box over one view channel and record how
//! the positive-class confidence moves. Strongly negative deltas mark regions
//! the model leans on.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, data_err, CoreError, Result};
use crate::models::{KeyframeModel, Prediction};
use crate::preprocess::{MultiViewStack, RoiRect, ViewKind};
use crate::tensor::{Scalar, Tensor};

/// Number of box positions along one axis.
pub fn grid_extent(size: usize, box_size: usize, stride: usize) -> usize {
    (size - box_size) / stride + 1
}

/// Probability mass on the non-negative classes. For a binary head this is
/// p(positive); for three classes it is p(vsd) + p(asd).
pub fn positive_confidence(pred: &Prediction) -> f64 {
    1.0 - pred.probabilities[0]
}

/// Copy of `stack` with a `box_size`-square of one channel forced to zero.
pub fn occlude_box<T: Scalar>(
    stack: &Tensor<T>,
    view: ViewKind,
    y0: usize,
    x0: usize,
    box_size: usize,
) -> Result<Tensor<T>> {
    let dims = stack.shape();
    if dims.len() != 3 || dims[0] != dims[1] || dims[2] != ViewKind::ALL.len() {
        return Err(CoreError::Shape(format!("want a square [s, s, 5] stack, got {dims:?}")));
    }
    let size = dims[0];
    if y0 + box_size > size || x0 + box_size > size {
        return Err(CoreError::Shape(format!(
            "box {box_size} at ({y0}, {x0}) leaves a {size}x{size} image"
        )));
    }
    let channels = dims[2];
    let mut out = stack.clone();
    let data = out.data_mut();
    for y in y0..y0 + box_size {
        for x in x0..x0 + box_size {
            data[(y * size + x) * channels + view.ordinal()] = T::from_f64(0.0);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OcclusionMap {
    pub view: ViewKind,
    pub box_size: usize,
    pub stride: usize,
    pub baseline_confidence: f64,
    pub grid_h: usize,
    pub grid_w: usize,
    /// Row-major grid of occluded-minus-baseline confidences.
    pub deltas: Vec<f64>,
}

impl OcclusionMap {
    pub fn delta(&self, gy: usize, gx: usize) -> f64 {
        self.deltas[gy * self.grid_w + gx]
    }

    /// Grid coordinates of the most negative delta (first in row-major order
    /// on ties).
    pub fn min_position(&self) -> (usize, usize) {
        let mut best = 0;
        for (i, d) in self.deltas.iter().enumerate() {
            if *d < self.deltas[best] {
                best = i;
            }
        }
        (best / self.grid_w, best % self.grid_w)
    }

    /// Pixel rectangle covered by the most damaging box.
    pub fn min_pixel_box(&self) -> RoiRect {
        let (gy, gx) = self.min_position();
        RoiRect {
            x: gx * self.stride,
            y: gy * self.stride,
            width: self.box_size,
            height: self.box_size,
        }
    }

    /// One CSV line per grid row; `Display` for f64 round-trips exactly.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for row in self.deltas.chunks(self.grid_w) {
            let line: Vec<String> = row.iter().map(f64::to_string).collect();
            out.push_str(&line.join(","));
            out.push('\n');
        }
        out
    }

    /// Min-max normalized grayscale bytes, row-major; the most negative delta
    /// renders darkest. A flat map renders mid-gray.
    pub fn to_gray_bytes(&self) -> Vec<u8> {
        let lo = self.deltas.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = self.deltas.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        self.deltas
            .iter()
            .map(|d| {
                let norm = if hi > lo { (d - lo) / (hi - lo) } else { 0.5 };
                (norm * 255.0).round() as u8
            })
            .collect()
    }

    pub fn render_png(&self, path: &Path) -> Result<()> {
        let img = image::GrayImage::from_raw(
            self.grid_w as u32,
            self.grid_h as u32,
            self.to_gray_bytes(),
        )
        .expect("byte count matches grid");
        img.save(path).map_err(|e| CoreError::Data(format!("write {}: {e}", path.display())))
    }
}

pub fn parse_delta_csv(text: &str) -> Result<(usize, usize, Vec<f64>)> {
    let mut deltas = Vec::new();
    let mut width = None;
    let mut rows = 0;
    for line in text.lines() {
        let cells: Vec<&str> = line.split(',').collect();
        match width {
            None => width = Some(cells.len()),
            Some(w) if w != cells.len() => {
                return data_err(format!("ragged delta csv: {} vs {w} columns", cells.len()));
            }
            _ => {}
        }
        for cell in cells {
            deltas.push(
                cell.trim()
                    .parse::<f64>()
                    .map_err(|e| CoreError::Data(format!("bad delta {cell:?}: {e}")))?,
            );
        }
        rows += 1;
    }
    if rows == 0 {
        return data_err("empty delta csv");
    }
    Ok((rows, width.unwrap_or(0), deltas))
}

/// Slide the box over every stride-aligned position of one channel and
/// re-score the stack. Deterministic: positions are visited row-major and the
/// model is reset before every forward pass.
pub fn occlusion_scan<T: Scalar>(
    model: &mut KeyframeModel<T>,
    stack: &MultiViewStack,
    view: ViewKind,
    box_size: usize,
    stride: usize,
) -> Result<OcclusionMap> {
    let size = stack.size();
    if box_size == 0 || stride == 0 {
        return config_err("box size and stride must be at least 1");
    }
    if box_size > size {
        return config_err(format!("box {box_size} exceeds the {size}-pixel stack"));
    }
    if model.arch().input_size != size {
        return config_err(format!(
            "model wants {}-pixel stacks, got {size}",
            model.arch().input_size
        ));
    }
    if !stack.present()[view.ordinal()] {
        return data_err(format!("{} channel is absent from the stack", view.name()));
    }
    let base = stack.to_tensor::<T>();
    let baseline_confidence = positive_confidence(&model.predict(&base)?);
    let extent = grid_extent(size, box_size, stride);
    let mut deltas = Vec::with_capacity(extent * extent);
    for gy in 0..extent {
        for gx in 0..extent {
            let occluded = occlude_box(&base, view, gy * stride, gx * stride, box_size)?;
            let conf = positive_confidence(&model.predict(&occluded)?);
            deltas.push(conf - baseline_confidence);
        }
    }
    Ok(OcclusionMap {
        view,
        box_size,
        stride,
        baseline_confidence,
        grid_h: extent,
        grid_w: extent,
        deltas,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{ArchitectureConfig, Head};
    use crate::preprocess::{stack_views, Frame};

    fn tiny_model() -> KeyframeModel<f64> {
        let arch = ArchitectureConfig {
            input_size: 16,
            conv_layers: 2,
            stage_widths: Some(vec![4, 6]),
            fc1_units: 10,
            fc2_units: 6,
            ..ArchitectureConfig::mc_dsc(Head::Binary)
        };
        KeyframeModel::build(arch, 99).unwrap()
    }

    fn lit_stack(size: usize) -> MultiViewStack {
        let views: Vec<(ViewKind, Frame)> = ViewKind::ALL
            .into_iter()
            .enumerate()
            .map(|(i, v)| {
                let mut f = Frame::zeros(size, size);
                for y in 0..size {
                    for x in 0..size {
                        f.set(y, x, 0.1 + 0.12 * i as f64 + 0.4 * (y as f64 / size as f64));
                    }
                }
                (v, f)
            })
            .collect();
        stack_views(size, &views).unwrap()
    }

    #[test]
    fn grid_extents_match_the_stride_arithmetic() {
        assert_eq!(grid_extent(128, 4, 4), 32);
        assert_eq!(grid_extent(128, 4, 1), 125);
        assert_eq!(grid_extent(16, 4, 4), 4);
        assert_eq!(grid_extent(16, 16, 3), 1);
    }

    #[test]
    fn occlusion_touches_exactly_one_box_of_one_channel() {
        let stack = lit_stack(16).to_tensor::<f64>();
        let out = occlude_box(&stack, ViewKind::A4C, 3, 5, 4).unwrap();
        let mut changed = Vec::new();
        for (i, (a, b)) in stack.data().iter().zip(out.data()).enumerate() {
            if a != b {
                assert_eq!(*b, 0.0);
                changed.push(i);
            }
        }
        assert_eq!(changed.len(), 16);
        for i in changed {
            let x = (i / 5) % 16;
            let y = i / (5 * 16);
            assert_eq!(i % 5, ViewKind::A4C.ordinal());
            assert!((3..7).contains(&y) && (5..9).contains(&x));
        }
        assert!(occlude_box(&stack, ViewKind::A4C, 14, 0, 4).is_err());
    }

    #[test]
    fn zeroing_an_already_dark_region_moves_nothing() {
        let mut model = tiny_model();
        // SSLAX channel is a single bright pixel in the far corner; every box
        // that misses it occludes pure zeros and must leave the score
        // bit-identical.
        let mut views = vec![
            (ViewKind::PSLAX, Frame::new(16, 16, vec![0.4; 256]).unwrap()),
        ];
        let mut sparse = Frame::zeros(16, 16);
        sparse.set(15, 15, 0.9);
        views.push((ViewKind::SSLAX, sparse));
        let stack = stack_views(16, &views).unwrap();
        let map = occlusion_scan(&mut model, &stack, ViewKind::SSLAX, 4, 4).unwrap();
        assert_eq!(map.grid_h, 4);
        for gy in 0..4 {
            for gx in 0..4 {
                if gy == 3 && gx == 3 {
                    continue;
                }
                assert_eq!(map.delta(gy, gx), 0.0);
            }
        }
    }

    #[test]
    fn repeated_scans_are_bitwise_identical() {
        let mut model = tiny_model();
        let stack = lit_stack(16);
        let a = occlusion_scan(&mut model, &stack, ViewKind::PSSAX, 4, 4).unwrap();
        let b = occlusion_scan(&mut model, &stack, ViewKind::PSSAX, 4, 4).unwrap();
        assert_eq!(a, b);
        assert!(a.deltas.iter().all(|d| d.is_finite()));
        assert_eq!(a.deltas.len(), 16);
    }

    #[test]
    fn csv_round_trips_exactly() {
        let map = OcclusionMap {
            view: ViewKind::A4C,
            box_size: 4,
            stride: 2,
            baseline_confidence: 0.625,
            grid_h: 2,
            grid_w: 3,
            deltas: vec![-0.125, 0.0, 1.0 / 3.0, -1e-17, 0.25, f64::MIN_POSITIVE],
        };
        let (h, w, parsed) = parse_delta_csv(&map.to_csv()).unwrap();
        assert_eq!((h, w), (2, 3));
        assert_eq!(parsed, map.deltas);
        assert!(parse_delta_csv("").is_err());
        assert!(parse_delta_csv("1,2\n3\n").is_err());
    }

    #[test]
    fn heatmap_shades_the_most_negative_delta_darkest() {
        let map = OcclusionMap {
            view: ViewKind::PSLAX,
            box_size: 4,
            stride: 4,
            baseline_confidence: 0.5,
            grid_h: 2,
            grid_w: 2,
            deltas: vec![-0.4, 0.1, 0.0, -0.1],
        };
        let bytes = map.to_gray_bytes();
        assert_eq!(bytes[0], 0);
        assert_eq!(bytes[1], 255);
        let flat = OcclusionMap { deltas: vec![0.2; 4], ..map.clone() };
        assert!(flat.to_gray_bytes().iter().all(|b| *b == 128));

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("saliency.png");
        map.render_png(&path).unwrap();
        let img = image::open(&path).unwrap().to_luma8();
        assert_eq!((img.width(), img.height()), (2, 2));
        assert_eq!(img.get_pixel(0, 0).0[0], 0);
    }

    #[test]
    fn bounds_and_presence_are_enforced() {
        let mut model = tiny_model();
        let stack = lit_stack(16);
        assert!(occlusion_scan(&mut model, &stack, ViewKind::A4C, 17, 1).is_err());
        assert!(occlusion_scan(&mut model, &stack, ViewKind::A4C, 0, 1).is_err());
        assert!(occlusion_scan(&mut model, &stack, ViewKind::A4C, 4, 0).is_err());
        let partial = stack_views(
            16,
            &[(ViewKind::PSLAX, Frame::new(16, 16, vec![0.3; 256]).unwrap())],
        )
        .unwrap();
        assert!(occlusion_scan(&mut model, &partial, ViewKind::A4C, 4, 4).is_err());
        let wrong_size = lit_stack(8);
        assert!(occlusion_scan(&mut model, &wrong_size, ViewKind::A4C, 4, 4).is_err());
    }
}
