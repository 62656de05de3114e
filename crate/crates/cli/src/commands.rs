//! Subcommand implementations.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use anyhow::Context;
use echoview_core::aggregation::AggregationSpec;
use echoview_core::bench::time_video_model;
use echoview_core::checkpoint::Checkpoint;
use echoview_core::dataio::{
    augment_virtual_patients, generate_phantom_dataset, Dataset, PhantomSpec, Split, StudyRecord,
};
use echoview_core::metrics::{accuracy, roc_auc, ConfusionMatrix};
use echoview_core::models::{ArchitectureConfig, Head, ModelSpec};
use echoview_core::optim::{Adam, AdamConfig};
use echoview_core::preprocess::{RoiRect, ViewKind};
use echoview_core::saliency::{occlusion_scan, OcclusionMap};
use echoview_core::train::{fit, TrainOutcome, TrainSchedule};
use echoview_core::viewrouter::{classify_clip, resolve_assignment, AuditRow, ViewPrediction};
use echoview_core::CoreError;
use serde::Serialize;

use crate::stage::{
    class_names, class_of, clip_sample, clip_units, keyframe_samples, load_model, read_clip_dir,
    subdirs, video_sample, write_json, write_run_config, AnyModel,
};
use crate::{
    BenchmarkArgs, EvalArgs, GenerateArgs, ModeChoice, OccludeArgs, PredictArgs, TrainArgs,
    UsageError,
};

pub fn generate(args: &GenerateArgs) -> anyhow::Result<()> {
    let spec = match &args.spec {
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading spec {}", path.display()))?;
            PhantomSpec::from_json(&text)?
        }
        None => PhantomSpec::default(),
    };
    fs::create_dir_all(&args.out)?;
    let manifest = generate_phantom_dataset(&spec, &args.out, args.seed)?;
    write_run_config(&args.out, "generate", args)?;
    let c = &manifest.class_counts;
    println!(
        "generated {} studies at {} (negative {} / vsd {} / asd {})",
        manifest.records.len(),
        args.out.display(),
        c.negative,
        c.vsd,
        c.asd,
    );
    Ok(())
}

fn open_dataset(args: &TrainArgs) -> anyhow::Result<Dataset> {
    let ds = Dataset::open(&args.manifest)?;
    match args.augment {
        Some(factor) => {
            let aug = augment_virtual_patients(&ds.manifest, factor, args.seed)?;
            for w in &aug.warnings {
                eprintln!("warning: {w}");
            }
            println!("augmentation added {} virtual studies", aug.added);
            Ok(Dataset::from_parts(ds.root().to_path_buf(), aug.manifest))
        }
        None => Ok(ds),
    }
}

fn split_records(ds: &Dataset, split: Split) -> anyhow::Result<Vec<&StudyRecord>> {
    let recs: Vec<&StudyRecord> = ds.manifest.records_in(split).collect();
    if recs.is_empty() {
        return Err(CoreError::Data(format!("the {} split is empty", split.name())).into());
    }
    Ok(recs)
}

fn restore_into<T: echoview_core::tensor::Scalar>(
    resume: &Path,
    spec: &ModelSpec,
    graph: &mut echoview_core::graph::Graph<T>,
    params: &echoview_core::layers::ParamSet,
    opt: &mut Adam<T>,
) -> anyhow::Result<()> {
    let ck = Checkpoint::read_from(resume)?;
    ck.ensure_matches(spec)?;
    ck.restore_params(graph, params)?;
    if ck.has_optimizer_state() {
        ck.restore_optimizer(params, opt)?;
        println!("resumed from {} at optimizer step {}", resume.display(), opt.steps());
    } else {
        println!("resumed parameters from {} (no optimizer state)", resume.display());
    }
    Ok(())
}

fn finish_training(args: &TrainArgs, outcome: &TrainOutcome) -> anyhow::Result<()> {
    fs::create_dir_all(&args.out)?;
    outcome.best.write_to(&args.out.join("model.ckpt"))?;
    fs::write(args.out.join("curves.csv"), outcome.report.to_csv())?;
    write_json(&args.out.join("report.json"), &outcome.report)?;
    write_run_config(&args.out, "train", args)?;
    println!(
        "best epoch {} with val accuracy {:.4} ({} epochs run); checkpoint at {}",
        outcome.report.best_epoch,
        outcome.report.best_val_accuracy,
        outcome.report.epochs.len(),
        args.out.join("model.ckpt").display(),
    );
    Ok(())
}

pub fn train(args: &TrainArgs) -> anyhow::Result<()> {
    let head = args.head.to_head();
    let mut arch = ArchitectureConfig::preset(args.arch.preset_name(), head)?;
    if let Some(size) = args.input_size {
        arch.input_size = size;
    }
    let schedule = TrainSchedule {
        batch_size: args.batch_size,
        max_epochs: args.epochs,
        patience: args.patience,
        adam: AdamConfig { learning_rate: args.learning_rate, ..AdamConfig::default() },
        keyframe_loss_weight: args.keyframe_loss,
        seed: args.seed,
    };
    let ds = open_dataset(args)?;
    let train_recs = split_records(&ds, Split::Train)?;
    let val_recs = split_records(&ds, Split::Val)?;
    let size = arch.input_size;

    let outcome = match args.mode {
        ModeChoice::Keyframe => {
            let mut model = echoview_core::models::KeyframeModel::<f64>::build(arch, args.seed)?;
            let mut opt = Adam::new(schedule.adam, &model.graph);
            if let Some(resume) = &args.resume {
                let spec = model.spec().clone();
                restore_into(resume, &spec, &mut model.graph, &model.params, &mut opt)?;
            }
            let train_set = keyframe_samples(&ds, &train_recs, head, size)?;
            let val_set = keyframe_samples(&ds, &val_recs, head, size)?;
            fit(
                &mut model,
                &mut opt,
                |i| Ok(train_set[i].clone()),
                train_set.len(),
                |i| Ok(val_set[i].clone()),
                val_set.len(),
                &schedule,
            )?
        }
        ModeChoice::Video => {
            let agg = AggregationSpec::new(args.aggregation.to_scheme());
            let mut model = echoview_core::models::VideoModel::<f64>::build(arch, agg, args.seed)?;
            let mut opt = Adam::new(schedule.adam, &model.graph);
            if let Some(resume) = &args.resume {
                let spec = model.spec().clone();
                restore_into(resume, &spec, &mut model.graph, &model.params, &mut opt)?;
            }
            fit(
                &mut model,
                &mut opt,
                |i| video_sample(&ds, train_recs[i], head, size),
                train_recs.len(),
                |i| video_sample(&ds, val_recs[i], head, size),
                val_recs.len(),
                &schedule,
            )?
        }
        ModeChoice::View => {
            let agg = AggregationSpec::new(args.aggregation.to_scheme());
            let mut model =
                echoview_core::models::ViewClassifierModel::<f64>::build(arch, agg, args.seed)?;
            let mut opt = Adam::new(schedule.adam, &model.graph);
            if let Some(resume) = &args.resume {
                let spec = model.spec().clone();
                restore_into(resume, &spec, &mut model.graph, &model.params, &mut opt)?;
            }
            let train_units = clip_units(&train_recs);
            let val_units = clip_units(&val_recs);
            fit(
                &mut model,
                &mut opt,
                |i| {
                    let (r, v) = train_units[i];
                    clip_sample(&ds, train_recs[r], v, size)
                },
                train_units.len(),
                |i| {
                    let (r, v) = val_units[i];
                    clip_sample(&ds, val_recs[r], v, size)
                },
                val_units.len(),
                &schedule,
            )?
        }
    };
    finish_training(args, &outcome)
}

#[derive(Serialize)]
struct MetricsReport {
    accuracy: f64,
    auc: Option<f64>,
    samples: usize,
    classes: Vec<String>,
    confusion_counts: Vec<Vec<usize>>,
    confusion_column_normalized: Vec<Vec<f64>>,
}

fn confusion_csv(names: &[String], normalized: &[Vec<f64>]) -> String {
    let mut out = String::from("predicted_vs_actual");
    for n in names {
        out.push(',');
        out.push_str(n);
    }
    out.push('\n');
    for (p, row) in normalized.iter().enumerate() {
        out.push_str(&names[p]);
        for v in row {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    out
}

pub fn eval(args: &EvalArgs) -> anyhow::Result<()> {
    let (ck, model) = load_model(&args.checkpoint)?;
    let ds = Dataset::open(&args.manifest)?;
    let recs = split_records(&ds, args.split.to_split())?;

    // (predicted, actual, positive-class score)
    let mut predicted = Vec::new();
    let mut actual = Vec::new();
    let mut scores = Vec::new();
    let head;
    match model {
        AnyModel::Keyframe(mut m) => {
            head = m.arch().head;
            let size = m.arch().input_size;
            for rec in &recs {
                let stack = ds.keyframe_stack(rec, size)?.to_tensor();
                let pred = m.predict(&stack)?;
                predicted.push(pred.label);
                actual.push(class_of(rec.label, head)?);
                scores.push(1.0 - pred.probabilities[0]);
            }
        }
        AnyModel::Video(mut m) => {
            head = m.arch().head;
            let size = m.arch().input_size;
            for rec in &recs {
                let sample = video_sample(&ds, rec, head, size)?;
                let (pred, _) = m.predict(&sample.frames)?;
                predicted.push(pred.label);
                actual.push(sample.class);
                scores.push(1.0 - pred.probabilities[0]);
            }
        }
        AnyModel::Router(mut m) => {
            head = Head::FiveView;
            let size = m.arch().input_size;
            for rec in &recs {
                for (view, _) in &rec.clips {
                    let sample = clip_sample(&ds, rec, *view, size)?;
                    let pred = m.predict(&sample.frames)?;
                    predicted.push(pred.label);
                    actual.push(sample.view);
                }
            }
        }
    }

    let acc = accuracy(&predicted, &actual)?;
    let auc = if head == Head::Binary { Some(roc_auc(&scores, &actual)?) } else { None };
    let classes = head.class_count();
    let confusion = ConfusionMatrix::from_pairs(classes, &predicted, &actual)?;
    let counts: Vec<Vec<usize>> =
        (0..classes).map(|p| (0..classes).map(|a| confusion.count(p, a)).collect()).collect();
    let names: Vec<String> = class_names(head).into_iter().map(String::from).collect();
    let report = MetricsReport {
        accuracy: acc,
        auc,
        samples: predicted.len(),
        classes: names.clone(),
        confusion_counts: counts,
        confusion_column_normalized: confusion.column_normalized(),
    };

    fs::create_dir_all(&args.out)?;
    write_json(&args.out.join("metrics.json"), &report)?;
    fs::write(
        args.out.join("confusion.csv"),
        confusion_csv(&names, &report.confusion_column_normalized),
    )?;
    write_run_config(&args.out, "eval", args)?;
    println!(
        "checkpoint {}: accuracy {:.4}{} over {} samples",
        ck.fingerprint.get(..8).unwrap_or(&ck.fingerprint),
        acc,
        auc.map(|a| format!(", auc {a:.4}")).unwrap_or_default(),
        predicted.len(),
    );
    Ok(())
}

#[derive(Serialize)]
struct PredictionReport {
    label: String,
    probabilities: Vec<f64>,
    logits: Vec<f64>,
    present: BTreeMap<&'static str, bool>,
    /// Per-view attention over clip frames; absent views are null.
    attention: BTreeMap<&'static str, Option<Vec<f64>>>,
    assignment: Option<Vec<AuditRow>>,
    unassigned: Option<Vec<String>>,
}

pub fn predict(args: &PredictArgs) -> anyhow::Result<()> {
    if args.unordered_views && args.router.is_none() {
        return Err(UsageError("--unordered-views requires --router <checkpoint>".into()).into());
    }
    let (_, model) = load_model(&args.checkpoint)?;
    let AnyModel::Video(mut model) = model else {
        return Err(CoreError::Config(
            "predict wants a video-model checkpoint; train one with --mode video".into(),
        )
        .into());
    };
    let head = model.arch().head;
    let size = model.arch().input_size;

    // Everything is computed before any output is written, so a malformed
    // clip directory leaves no partial artifacts behind.
    let mut assignment_rows = None;
    let mut unassigned = None;
    let clips: Vec<Option<Vec<echoview_core::tensor::Tensor<f64>>>> = if args.unordered_views {
        let router_path = args.router.as_ref().expect("checked above");
        let (_, router) = load_model(router_path)?;
        let AnyModel::Router(mut router) = router else {
            return Err(CoreError::Config(
                "--router wants a view-classifier checkpoint; train one with --mode view".into(),
            )
            .into());
        };
        let router_size = router.arch().input_size;
        let dirs = subdirs(&args.clips)?;
        if dirs.is_empty() {
            return Err(
                CoreError::Data(format!("no clip directories in {}", args.clips.display())).into()
            );
        }
        let mut preds: Vec<(String, ViewPrediction)> = Vec::new();
        for (name, path) in &dirs {
            let frames = read_clip_dir(path, router_size)?;
            preds.push((name.clone(), classify_clip(&mut router, &frames)?));
        }
        let assignment = resolve_assignment(&preds)?;
        let mut slots = Vec::with_capacity(5);
        for slot in &assignment.slots {
            match slot {
                Some(clip_id) => {
                    let dir = dirs.iter().find(|(n, _)| n == clip_id).expect("id from listing");
                    slots.push(Some(read_clip_dir(&dir.1, size)?));
                }
                None => slots.push(None),
            }
        }
        assignment_rows = Some(assignment.audit.clone());
        unassigned = Some(assignment.unassigned.clone());
        slots
    } else {
        let mut slots = Vec::with_capacity(5);
        for view in ViewKind::ALL {
            let dir = args.clips.join(view.name());
            if dir.is_dir() {
                slots.push(Some(read_clip_dir(&dir, size)?));
            } else {
                slots.push(None);
            }
        }
        if slots.iter().all(Option::is_none) {
            return Err(CoreError::Data(format!(
                "no view clips under {} (expected PSLAX/PSSAX/A4C/SXLAX/SSLAX subdirectories)",
                args.clips.display()
            ))
            .into());
        }
        slots
    };

    let (pred, weights) = model.predict(&clips)?;
    let mut present = BTreeMap::new();
    let mut attention = BTreeMap::new();
    for view in ViewKind::ALL {
        present.insert(view.name(), clips[view.ordinal()].is_some());
        attention.insert(view.name(), weights[view.ordinal()].clone());
    }
    let report = PredictionReport {
        label: class_names(head)[pred.label].to_string(),
        probabilities: pred.probabilities.clone(),
        logits: pred.logits.clone(),
        present,
        attention,
        assignment: assignment_rows,
        unassigned,
    };

    fs::create_dir_all(&args.out)?;
    write_json(&args.out.join("prediction.json"), &report)?;
    if let Some(rows) = &report.assignment {
        let mut csv = String::from("clip_id,predicted_view,confidence,assigned_slot\n");
        for row in rows {
            csv.push_str(&format!(
                "{},{},{},{}\n",
                row.clip_id,
                row.predicted.name(),
                row.confidence,
                row.slot.map_or("", |s| s.name()),
            ));
        }
        fs::write(args.out.join("assignment.csv"), csv)?;
    }
    write_run_config(&args.out, "predict", args)?;
    println!(
        "prediction: {} (probabilities {:?})",
        report.label,
        report.probabilities.iter().map(|p| (p * 1e4).round() / 1e4).collect::<Vec<_>>(),
    );
    Ok(())
}

#[derive(Serialize)]
struct OcclusionReport {
    subject: String,
    map: OcclusionMap,
    /// Pixel rectangle of the most damaging occlusion box.
    min_box: RoiRect,
    /// Annotated defect region, when the manifest records one.
    defect_region: Option<RoiRect>,
}

pub fn occlude(args: &OccludeArgs) -> anyhow::Result<()> {
    let (_, model) = load_model(&args.checkpoint)?;
    let AnyModel::Keyframe(mut model) = model else {
        return Err(CoreError::Config(
            "occlude wants a key-frame checkpoint; train one with --mode keyframe".into(),
        )
        .into());
    };
    let ds = Dataset::open(&args.manifest)?;
    let rec = ds
        .manifest
        .records
        .iter()
        .find(|r| r.subject_id == args.subject)
        .ok_or_else(|| CoreError::Data(format!("subject '{}' not in manifest", args.subject)))?;
    let size = model.arch().input_size;
    let stack = ds.keyframe_stack(rec, size)?;
    let view = args.view.to_view();
    let map = occlusion_scan(&mut model, &stack, view, args.box_size, args.stride)?;
    let report = OcclusionReport {
        subject: rec.subject_id.clone(),
        min_box: map.min_pixel_box(),
        defect_region: rec.defect.as_ref().map(|d| d.region),
        map,
    };

    fs::create_dir_all(&args.out)?;
    report.map.render_png(&args.out.join("saliency.png"))?;
    fs::write(args.out.join("deltas.csv"), report.map.to_csv())?;
    write_json(&args.out.join("occlusion.json"), &report)?;
    write_run_config(&args.out, "occlude", args)?;
    println!(
        "most damaging {}x{} box at ({}, {}) on {}; baseline confidence {:.4}",
        report.min_box.width,
        report.min_box.height,
        report.min_box.x,
        report.min_box.y,
        view.name(),
        report.map.baseline_confidence,
    );
    Ok(())
}

#[derive(Serialize)]
struct BenchmarkRow {
    scheme: String,
    median_ms: f64,
    mean_ms: f64,
    accuracy: f64,
    samples: usize,
}

pub fn benchmark(args: &BenchmarkArgs) -> anyhow::Result<()> {
    if args.passes == 0 {
        return Err(UsageError("--passes must be at least 1".into()).into());
    }
    let ds = Dataset::open(&args.manifest)?;
    let mut recs = split_records(&ds, args.split.to_split())?;
    if let Some(limit) = args.limit {
        recs.truncate(limit.max(1));
    }

    let mut rows = Vec::new();
    for path in &args.checkpoints {
        let (_, model) = load_model(path)?;
        let AnyModel::Video(mut model) = model else {
            return Err(CoreError::Config(format!(
                "{} is not a video-model checkpoint",
                path.display()
            ))
            .into());
        };
        let head = model.arch().head;
        let size = model.arch().input_size;
        let samples: Vec<_> = recs
            .iter()
            .map(|r| video_sample(&ds, r, head, size))
            .collect::<echoview_core::Result<_>>()?;
        let studies: Vec<_> = samples.iter().map(|s| s.frames.clone()).collect();
        let timing = time_video_model(&mut model, &studies, args.passes)?;
        let mut predicted = Vec::new();
        let mut actual = Vec::new();
        for sample in &samples {
            let (pred, _) = model.predict(&sample.frames)?;
            predicted.push(pred.label);
            actual.push(sample.class);
        }
        rows.push(BenchmarkRow {
            scheme: timing.scheme.name().to_string(),
            median_ms: timing.median_ms,
            mean_ms: timing.mean_ms,
            accuracy: accuracy(&predicted, &actual)?,
            samples: timing.samples,
        });
    }

    let mut csv = String::from("scheme,median_ms,mean_ms,accuracy,samples\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            r.scheme, r.median_ms, r.mean_ms, r.accuracy, r.samples
        ));
    }
    fs::create_dir_all(&args.out)?;
    fs::write(args.out.join("timings.csv"), &csv)?;
    write_json(&args.out.join("timings.json"), &rows)?;
    write_run_config(&args.out, "benchmark", args)?;
    for r in &rows {
        println!(
            "{:<9} median {:>8.2} ms/study  mean {:>8.2} ms  accuracy {:.4}",
            r.scheme, r.median_ms, r.mean_ms, r.accuracy
        );
    }
    Ok(())
}
