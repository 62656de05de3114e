//! Plumbing between disk, the dataset layer, and the models.

use std::fs;
use std::path::Path;

use echoview_core::checkpoint::Checkpoint;
use echoview_core::dataio::{load_frame_png, Dataset, Label, StudyRecord, ViewClip};
use echoview_core::models::{
    Head, KeyframeModel, ModelSpec, VideoModel, ViewClassifierModel,
};
use echoview_core::preprocess::{resize_bilinear, ViewKind};
use echoview_core::tensor::Tensor;
use echoview_core::train::{ClipSample, LabeledStack, VideoSample};
use echoview_core::{CoreError, Result};
use serde::Serialize;

pub fn class_of(label: Label, head: Head) -> Result<usize> {
    match head {
        Head::Binary => Ok(label.binary_index()),
        Head::ThreeClass => Ok(label.class_index()),
        Head::FiveView => Err(CoreError::Config(
            "a five-way view head carries no diagnosis classes".into(),
        )),
    }
}

pub fn class_names(head: Head) -> Vec<&'static str> {
    match head {
        Head::Binary => vec!["negative", "positive"],
        Head::ThreeClass => vec!["negative", "vsd", "asd"],
        Head::FiveView => ViewKind::ALL.iter().map(|v| v.name()).collect(),
    }
}

pub fn frames_to_tensors(clip: &ViewClip) -> Vec<Tensor<f64>> {
    clip.frames.iter().map(|f| f.to_tensor()).collect()
}

/// Key-frame stacks with class labels for one record list.
pub fn keyframe_samples(
    ds: &Dataset,
    records: &[&StudyRecord],
    head: Head,
    size: usize,
) -> Result<Vec<LabeledStack<f64>>> {
    records
        .iter()
        .map(|rec| {
            Ok(LabeledStack {
                input: ds.keyframe_stack(rec, size)?.to_tensor(),
                class: class_of(rec.label, head)?,
            })
        })
        .collect()
}

/// Lazily-loadable whole-study sample: per-view clips plus key indices.
pub fn video_sample(
    ds: &Dataset,
    rec: &StudyRecord,
    head: Head,
    size: usize,
) -> Result<VideoSample<f64>> {
    let mut frames = Vec::with_capacity(5);
    let mut keys = Vec::with_capacity(5);
    for view in ViewKind::ALL {
        match ds.load_view_clip(rec, view, size)? {
            Some(clip) => {
                keys.push(clip.key_frame_index);
                frames.push(Some(frames_to_tensors(&clip)));
            }
            None => {
                keys.push(None);
                frames.push(None);
            }
        }
    }
    Ok(VideoSample { frames, keys, class: class_of(rec.label, head)? })
}

/// Flat (record, view) index over every clip in a record list.
pub fn clip_units(records: &[&StudyRecord]) -> Vec<(usize, ViewKind)> {
    let mut units = Vec::new();
    for (i, rec) in records.iter().enumerate() {
        for view in rec.clips.keys() {
            units.push((i, *view));
        }
    }
    units
}

pub fn clip_sample(
    ds: &Dataset,
    rec: &StudyRecord,
    view: ViewKind,
    size: usize,
) -> Result<ClipSample<f64>> {
    let clip = ds.load_view_clip(rec, view, size)?.ok_or_else(|| {
        CoreError::Data(format!("study '{}' has no {} clip", rec.subject_id, view.name()))
    })?;
    Ok(ClipSample { frames: frames_to_tensors(&clip), view: view.ordinal() })
}

/// A model reconstructed from a checkpoint's embedded spec.
pub enum AnyModel {
    Keyframe(KeyframeModel<f64>),
    Video(VideoModel<f64>),
    Router(ViewClassifierModel<f64>),
}

pub fn build_from_spec(spec: &ModelSpec) -> Result<AnyModel> {
    // Initialization seed is irrelevant: the caller restores every parameter.
    match spec {
        ModelSpec::Keyframe { arch } => {
            Ok(AnyModel::Keyframe(KeyframeModel::build(arch.clone(), 0)?))
        }
        ModelSpec::Video { encoder, aggregation } => Ok(AnyModel::Video(VideoModel::build(
            encoder.clone(),
            aggregation.clone(),
            0,
        )?)),
        ModelSpec::ViewRouter { encoder, aggregation } => Ok(AnyModel::Router(
            ViewClassifierModel::build(encoder.clone(), aggregation.clone(), 0)?,
        )),
    }
}

pub fn load_model(path: &Path) -> Result<(Checkpoint, AnyModel)> {
    let ck = Checkpoint::read_from(path)?;
    let mut model = build_from_spec(&ck.spec)?;
    match &mut model {
        AnyModel::Keyframe(m) => ck.restore_params(&mut m.graph, &m.params)?,
        AnyModel::Video(m) => ck.restore_params(&mut m.graph, &m.params)?,
        AnyModel::Router(m) => ck.restore_params(&mut m.graph, &m.params)?,
    }
    Ok((ck, model))
}

/// All PNG frames of one clip directory, sorted by file name, resized.
pub fn read_clip_dir(dir: &Path, size: usize) -> Result<Vec<Tensor<f64>>> {
    if !dir.is_dir() {
        return Err(CoreError::Data(format!("clip directory {} not found", dir.display())));
    }
    let mut paths: Vec<_> = fs::read_dir(dir)?
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(CoreError::Data(format!("no PNG frames in {}", dir.display())));
    }
    paths
        .iter()
        .map(|p| {
            let mut frame = load_frame_png(p)?;
            if frame.height() != size || frame.width() != size {
                frame = resize_bilinear(&frame, size)?;
            }
            Ok(frame.to_tensor())
        })
        .collect()
}

/// Immediate subdirectories, sorted by name.
pub fn subdirs(dir: &Path) -> Result<Vec<(String, std::path::PathBuf)>> {
    if !dir.is_dir() {
        return Err(CoreError::Data(format!("study directory {} not found", dir.display())));
    }
    let mut out = Vec::new();
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        if entry.path().is_dir() {
            out.push((entry.file_name().to_string_lossy().into_owned(), entry.path()));
        }
    }
    out.sort();
    Ok(out)
}

/// Every subcommand records its resolved arguments next to its outputs.
pub fn write_run_config<A: Serialize>(out_dir: &Path, command: &str, args: &A) -> Result<()> {
    #[derive(Serialize)]
    struct RunConfig<'a, A> {
        command: &'a str,
        args: &'a A,
    }
    let text = serde_json::to_string_pretty(&RunConfig { command, args })
        .map_err(|e| CoreError::Data(format!("run config: {e}")))?;
    fs::write(out_dir.join("runconfig.json"), text + "\n")?;
    Ok(())
}

pub fn write_json<V: Serialize>(path: &Path, value: &V) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| CoreError::Data(format!("json out: {e}")))?;
    fs::write(path, text + "\n")?;
    Ok(())
}
