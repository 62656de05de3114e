//! Dataset manifests, on-disk clip access, 0.8 s clip windows,
//! virtual-patient augmentation, and the synthetic phantom generator.

mod phantom;
pub use phantom::{generate_phantom_dataset, PhantomSpec};

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, data_err, CoreError, Result};
use crate::preprocess::{resize_bilinear, stack_views, Frame, MultiViewStack, RoiRect, ViewKind};

pub const SCHEMA_VERSION: u32 = 1;

/// Study-level diagnosis label.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize,
)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Negative,
    Vsd,
    Asd,
}

impl Label {
    pub const ALL: [Label; 3] = [Label::Negative, Label::Vsd, Label::Asd];

    /// Index for the three-class head.
    pub fn class_index(self) -> usize {
        match self {
            Label::Negative => 0,
            Label::Vsd => 1,
            Label::Asd => 2,
        }
    }

    /// Index for the binary head: defect present or not.
    pub fn binary_index(self) -> usize {
        usize::from(self != Label::Negative)
    }

    pub fn is_positive(self) -> bool {
        self != Label::Negative
    }

    pub fn name(self) -> &'static str {
        match self {
            Label::Negative => "negative",
            Label::Vsd => "vsd",
            Label::Asd => "asd",
        }
    }
}

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize,
)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Split> {
        Split::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or(())
            .or_else(|_| data_err(format!("unknown split '{s}'")))
    }
}

/// One stored clip: a directory of numbered PNG frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipRef {
    /// Directory path relative to the dataset root.
    pub path: String,
    pub fps: f64,
    pub frame_count: usize,
    /// Index of the designated key frame within this clip, if known.
    pub key_frame_index: Option<usize>,
}

/// Where a defect was painted, for localization checks on synthetic data.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DefectInfo {
    pub view: ViewKind,
    pub region: RoiRect,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyRecord {
    pub subject_id: String,
    pub label: Label,
    pub split: Split,
    pub clips: BTreeMap<ViewKind, ClipRef>,
    /// For virtual records: which subject donated each borrowed view.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub donors: BTreeMap<ViewKind, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub defect: Option<DefectInfo>,
}

impl StudyRecord {
    pub fn has_view(&self, view: ViewKind) -> bool {
        self.clips.contains_key(&view)
    }

    pub fn is_complete(&self) -> bool {
        self.clips.len() == ViewKind::ALL.len()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub negative: usize,
    pub vsd: usize,
    pub asd: usize,
}

impl ClassCounts {
    pub fn of(&self, label: Label) -> usize {
        match label {
            Label::Negative => self.negative,
            Label::Vsd => self.vsd,
            Label::Asd => self.asd,
        }
    }

    fn bump(&mut self, label: Label) {
        match label {
            Label::Negative => self.negative += 1,
            Label::Vsd => self.vsd += 1,
            Label::Asd => self.asd += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.negative + self.vsd + self.asd
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub provenance: String,
    pub class_counts: ClassCounts,
    pub records: Vec<StudyRecord>,
}

impl Manifest {
    pub fn new(provenance: impl Into<String>, records: Vec<StudyRecord>) -> Result<Manifest> {
        let mut class_counts = ClassCounts::default();
        for r in &records {
            class_counts.bump(r.label);
        }
        let m = Manifest {
            schema_version: SCHEMA_VERSION,
            provenance: provenance.into(),
            class_counts,
            records,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn records_in(&self, split: Split) -> impl Iterator<Item = &StudyRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return data_err(format!(
                "manifest schema version {} unsupported (expected {SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        let mut counts = ClassCounts::default();
        let mut ids = BTreeSet::new();
        for r in &self.records {
            counts.bump(r.label);
            if !ids.insert(r.subject_id.as_str()) {
                return data_err(format!("duplicate subject id '{}'", r.subject_id));
            }
            if r.clips.is_empty() {
                return data_err(format!("study '{}' has no views", r.subject_id));
            }
            for (view, clip) in &r.clips {
                if clip.frame_count == 0 {
                    return data_err(format!(
                        "study '{}' view {} has an empty clip",
                        r.subject_id,
                        view.name()
                    ));
                }
                if let Some(k) = clip.key_frame_index {
                    if k >= clip.frame_count {
                        return data_err(format!(
                            "study '{}' view {} key frame {k} out of range (clip has {} frames)",
                            r.subject_id,
                            view.name(),
                            clip.frame_count
                        ));
                    }
                }
            }
            if let Some(d) = &r.defect {
                if !r.has_view(d.view) {
                    return data_err(format!(
                        "study '{}' records a defect in absent view {}",
                        r.subject_id,
                        d.view.name()
                    ));
                }
            }
        }
        if counts != self.class_counts {
            return data_err("manifest class counts disagree with its records");
        }
        // Donor audit: every borrowed view must come from a same-class
        // train-split subject, so no test data can leak into training.
        let by_id: BTreeMap<&str, &StudyRecord> =
            self.records.iter().map(|r| (r.subject_id.as_str(), r)).collect();
        for r in &self.records {
            for (view, donor_id) in &r.donors {
                let donor = by_id.get(donor_id.as_str()).copied().ok_or(()).or_else(|_| {
                    data_err(format!(
                        "study '{}' borrows from unknown subject '{donor_id}'",
                        r.subject_id
                    ))
                })?;
                if donor.split != Split::Train {
                    return data_err(format!(
                        "study '{}' borrows {} from non-train subject '{donor_id}'",
                        r.subject_id,
                        view.name()
                    ));
                }
                if donor.label != r.label {
                    return data_err(format!(
                        "study '{}' ({}) borrows {} from a {} subject",
                        r.subject_id,
                        r.label.name(),
                        view.name(),
                        donor.label.name()
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Manifest> {
        let text = fs::read_to_string(path)
            .map_err(|e| CoreError::Data(format!("manifest {}: {e}", path.display())))?;
        let m: Manifest = serde_json::from_str(&text)?;
        m.validate()?;
        Ok(m)
    }
}

/// An in-memory clip for one view.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewClip {
    pub frames: Vec<Frame>,
    pub fps: f64,
    pub key_frame_index: Option<usize>,
}

/// Crop a contiguous window of `round(duration_s * fps)` frames at a seeded
/// random offset. The key frame index is remapped into the window, or
/// dropped when the window misses it.
pub fn crop_clip(clip: &ViewClip, duration_s: f64, seed: u64) -> Result<ViewClip> {
    let window = (duration_s * clip.fps).round() as usize;
    if window == 0 {
        return config_err("crop window must cover at least one frame");
    }
    if clip.frames.len() < window {
        return data_err(format!(
            "clip of {} frames is shorter than the {window}-frame window",
            clip.frames.len()
        ));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let start = rng.gen_range(0..=clip.frames.len() - window);
    Ok(crop_window(clip, window, start))
}

fn crop_window(clip: &ViewClip, window: usize, start: usize) -> ViewClip {
    ViewClip {
        frames: clip.frames[start..start + window].to_vec(),
        fps: clip.fps,
        key_frame_index: clip.key_frame_index.and_then(|k| {
            (k >= start && k < start + window).then(|| k - start)
        }),
    }
}

#[derive(Debug)]
pub struct Augmented {
    pub manifest: Manifest,
    pub added: usize,
    pub warnings: Vec<String>,
}

/// Spawn `factor` virtual records per incomplete positive train record, each
/// filling its missing views with clips borrowed from same-class train
/// subjects. Complete records need no borrowed views and spawn nothing;
/// val/test records are never touched.
pub fn augment_virtual_patients(
    manifest: &Manifest,
    factor: usize,
    seed: u64,
) -> Result<Augmented> {
    if factor == 0 {
        return config_err("augmentation factor must be at least 1");
    }
    manifest.validate()?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut pools: BTreeMap<(Label, ViewKind), Vec<(&str, &ClipRef)>> = BTreeMap::new();
    for r in manifest.records_in(Split::Train) {
        for (view, clip) in &r.clips {
            pools
                .entry((r.label, *view))
                .or_default()
                .push((r.subject_id.as_str(), clip));
        }
    }
    let mut records = manifest.records.clone();
    let mut warnings = Vec::new();
    let mut added = 0usize;
    for src in manifest
        .records
        .iter()
        .filter(|r| r.split == Split::Train && r.label.is_positive() && !r.is_complete())
    {
        for copy in 1..=factor {
            let mut clips = src.clips.clone();
            let mut donors = BTreeMap::new();
            for view in ViewKind::ALL {
                if clips.contains_key(&view) {
                    continue;
                }
                let pool: Vec<&(&str, &ClipRef)> = pools
                    .get(&(src.label, view))
                    .map(|p| p.iter().filter(|(id, _)| *id != src.subject_id).collect())
                    .unwrap_or_default();
                if pool.is_empty() {
                    warnings.push(format!(
                        "no other {} subject offers a {} clip; '{}-v{copy}' keeps that view zero-filled",
                        src.label.name(),
                        view.name(),
                        src.subject_id
                    ));
                    continue;
                }
                let (donor_id, clip) = pool[rng.gen_range(0..pool.len())];
                clips.insert(view, (*clip).clone());
                donors.insert(view, donor_id.to_string());
            }
            records.push(StudyRecord {
                subject_id: format!("{}-v{copy}", src.subject_id),
                label: src.label,
                split: Split::Train,
                clips,
                donors,
                defect: src.defect.clone(),
            });
            added += 1;
        }
    }
    let provenance = format!(
        "{} | virtual patients x{factor} (seed {seed}, {added} added)",
        manifest.provenance
    );
    Ok(Augmented { manifest: Manifest::new(provenance, records)?, added, warnings })
}

pub(crate) fn frame_file_name(index: usize) -> String {
    format!("f{index:03}.png")
}

/// Write a frame as 8-bit grayscale PNG.
pub fn save_frame_png(frame: &Frame, path: &Path) -> Result<()> {
    let bytes: Vec<u8> = frame
        .pixels()
        .iter()
        .map(|p| (p * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    let img = image::GrayImage::from_raw(frame.width() as u32, frame.height() as u32, bytes)
        .ok_or(())
        .or_else(|_| data_err("frame buffer does not fill its extents"))?;
    img.save(path)?;
    Ok(())
}

pub fn load_frame_png(path: &Path) -> Result<Frame> {
    let img = image::open(path)?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let pixels: Vec<f64> = img.into_raw().iter().map(|&b| f64::from(b) / 255.0).collect();
    Frame::new(h, w, pixels)
}

/// A manifest anchored at the directory holding its frames.
#[derive(Debug, Clone)]
pub struct Dataset {
    root: PathBuf,
    pub manifest: Manifest,
}

impl Dataset {
    /// Open `<root>/manifest.json` (or a direct path to a manifest file).
    pub fn open(path: &Path) -> Result<Dataset> {
        let manifest_path =
            if path.is_dir() { path.join("manifest.json") } else { path.to_path_buf() };
        let manifest = Manifest::load(&manifest_path)?;
        let root = manifest_path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        Ok(Dataset { root, manifest })
    }

    pub fn from_parts(root: PathBuf, manifest: Manifest) -> Dataset {
        Dataset { root, manifest }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn load_frame(&self, clip: &ClipRef, index: usize) -> Result<Frame> {
        if index >= clip.frame_count {
            return data_err(format!(
                "frame {index} out of range for clip '{}' ({} frames)",
                clip.path, clip.frame_count
            ));
        }
        load_frame_png(&self.root.join(&clip.path).join(frame_file_name(index)))
    }

    pub fn load_clip(&self, clip: &ClipRef) -> Result<ViewClip> {
        let frames = (0..clip.frame_count)
            .map(|i| self.load_frame(clip, i))
            .collect::<Result<Vec<_>>>()?;
        Ok(ViewClip { frames, fps: clip.fps, key_frame_index: clip.key_frame_index })
    }

    /// Load one view's clip resized to `size`.
    pub fn load_view_clip(
        &self,
        record: &StudyRecord,
        view: ViewKind,
        size: usize,
    ) -> Result<Option<ViewClip>> {
        let Some(clip_ref) = record.clips.get(&view) else {
            return Ok(None);
        };
        let mut clip = self.load_clip(clip_ref)?;
        for f in &mut clip.frames {
            if f.height() != size || f.width() != size {
                *f = resize_bilinear(f, size)?;
            }
        }
        Ok(Some(clip))
    }

    /// Assemble the five-channel key-frame stack for one study.
    pub fn keyframe_stack(&self, record: &StudyRecord, size: usize) -> Result<MultiViewStack> {
        let mut frames = Vec::new();
        for (view, clip) in &record.clips {
            let key = clip.key_frame_index.ok_or(()).or_else(|_| {
                data_err(format!(
                    "study '{}' view {} has no key frame",
                    record.subject_id,
                    view.name()
                ))
            })?;
            let mut frame = self.load_frame(clip, key)?;
            if frame.height() != size || frame.width() != size {
                frame = resize_bilinear(&frame, size)?;
            }
            frames.push((*view, frame));
        }
        stack_views(size, &frames)
    }
}
