//! Wall-clock latency for whole-study inference, used to compare aggregation
//! schemes on identical inputs.

use std::time::Instant;

use serde::Serialize;

use crate::aggregation::SchemeKind;
use crate::error::{config_err, data_err, Result};
use crate::models::{ModelSpec, VideoModel};
use crate::tensor::{Scalar, Tensor};

/// Median of an unordered sample set.
pub fn median(xs: &[f64]) -> Result<f64> {
    if xs.is_empty() {
        return data_err("median of an empty sample set");
    }
    let mut sorted = xs.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite samples"));
    let mid = sorted.len() / 2;
    Ok(if sorted.len() % 2 == 1 { sorted[mid] } else { (sorted[mid - 1] + sorted[mid]) / 2.0 })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SchemeTiming {
    pub scheme: SchemeKind,
    pub median_ms: f64,
    pub mean_ms: f64,
    pub samples: usize,
}

pub fn timings_csv(rows: &[SchemeTiming]) -> String {
    let mut out = String::from("scheme,median_ms,mean_ms,samples\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.scheme.name(), r.median_ms, r.mean_ms, r.samples));
    }
    out
}

/// Time `passes` full prediction sweeps over `studies`. One untimed warm-up
/// prediction runs first; each study prediction is then timed individually
/// and pooled across passes. Latency is data-independent for these models,
/// so untrained weights time the same as trained ones.
pub fn time_video_model<T: Scalar>(
    model: &mut VideoModel<T>,
    studies: &[Vec<Option<Vec<Tensor<T>>>>],
    passes: usize,
) -> Result<SchemeTiming> {
    if studies.is_empty() || passes == 0 {
        return config_err("need at least one study and one pass");
    }
    let scheme = match model.spec() {
        ModelSpec::Video { aggregation, .. } => aggregation.scheme,
        other => return config_err(format!("latency harness wants a video model, got {other:?}")),
    };
    model.predict(&studies[0])?;
    let mut samples_ms = Vec::with_capacity(studies.len() * passes);
    for _ in 0..passes {
        for study in studies {
            let start = Instant::now();
            model.predict(study)?;
            samples_ms.push(start.elapsed().as_secs_f64() * 1e3);
        }
    }
    Ok(SchemeTiming {
        scheme,
        median_ms: median(&samples_ms)?,
        mean_ms: samples_ms.iter().sum::<f64>() / samples_ms.len() as f64,
        samples: samples_ms.len(),
    })
}
