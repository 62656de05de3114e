//! Training loops: gradient-accumulated mini-batches, validation-driven
//! early stopping, epoch reports, and best-checkpoint capture, shared by the
//! key-frame, video, and view-classifier models.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::aggregation::keyframe_supervision_loss;
use crate::checkpoint::Checkpoint;
use crate::error::{config_err, CoreError, Result};
use crate::graph::{Graph, Var};
use crate::layers::ParamSet;
use crate::models::{
    Head, KeyframeModel, ModelSpec, VideoModel, ViewClassifierModel,
};
use crate::optim::{Adam, AdamConfig};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSchedule {
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Stop after this many epochs without a validation improvement.
    pub patience: usize,
    pub adam: AdamConfig,
    /// Weight of the key-frame attention supervision term (video only).
    pub keyframe_loss_weight: f64,
    /// Seed for epoch shuffling.
    pub seed: u64,
}

impl Default for TrainSchedule {
    fn default() -> TrainSchedule {
        TrainSchedule {
            batch_size: 32,
            max_epochs: 200,
            patience: 20,
            adam: AdamConfig::default(),
            keyframe_loss_weight: 1.0,
            seed: 0,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 {
            return config_err("batch size, epochs, and patience must be positive");
        }
        if !(self.keyframe_loss_weight.is_finite() && self.keyframe_loss_weight >= 0.0) {
            return config_err("key-frame loss weight must be finite and non-negative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
}

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_acc\n");
        for row in &self.epochs {
            out.push_str(&format!("{},{},{}\n", row.epoch, row.train_loss, row.val_accuracy));
        }
        out
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub report: TrainReport,
    /// Parameters plus optimizer state at the best validation epoch.
    pub best: Checkpoint,
}

/// A model the shared loop can drive.
pub trait Trainable<T: Scalar> {
    type Sample;

    /// Append one sample's scalar loss to the tape. Transients are already
    /// cleared; gradients must not be touched here.
    fn sample_loss(&mut self, sample: &Self::Sample, keyframe_weight: f64) -> Result<Var>;
    /// Whether the model classifies the sample correctly.
    fn sample_correct(&mut self, sample: &Self::Sample) -> Result<bool>;
    fn graph(&self) -> &Graph<T>;
    fn graph_mut(&mut self) -> &mut Graph<T>;
    fn param_set(&self) -> &ParamSet;
    fn model_spec(&self) -> ModelSpec;
}

fn head_loss<T: Scalar>(g: &mut Graph<T>, head: Head, logits: Var, class: usize) -> Result<Var> {
    match head.units() {
        1 => {
            if class > 1 {
                return config_err(format!("binary head cannot learn class {class}"));
            }
            g.bce_with_logit(logits, class as f64)
        }
        _ => g.ce_with_logits(logits, class),
    }
}

fn shuffle_seed(seed: u64, epoch: usize) -> u64 {
    let mut z = seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z ^ (z >> 31)
}

/// Run the full loop: shuffled mini-batches with gradient accumulation, one
/// optimizer step per batch, a validation sweep per epoch, and early
/// stopping on a validation plateau. Returns the per-epoch report and the
/// best-validation checkpoint; the model itself keeps its last-epoch state.
pub fn fit<T, M>(
    model: &mut M,
    optimizer: &mut Adam<T>,
    mut load_train: impl FnMut(usize) -> Result<M::Sample>,
    n_train: usize,
    mut load_val: impl FnMut(usize) -> Result<M::Sample>,
    n_val: usize,
    schedule: &TrainSchedule,
) -> Result<TrainOutcome>
where
    T: Scalar,
    M: Trainable<T>,
{
    schedule.validate()?;
    if n_train == 0 {
        return config_err("training split is empty");
    }
    if n_val == 0 {
        return config_err("validation split is empty");
    }
    let mut report = TrainReport { epochs: Vec::new(), best_epoch: 0, best_val_accuracy: f64::MIN };
    let mut best: Option<Checkpoint> = None;
    let mut stale = 0usize;
    let mut order: Vec<usize> = (0..n_train).collect();
    for epoch in 1..=schedule.max_epochs {
        let mut rng = ChaCha20Rng::seed_from_u64(shuffle_seed(schedule.seed, epoch));
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(schedule.batch_size) {
            model.graph_mut().zero_grads();
            let inv = 1.0 / chunk.len() as f64;
            for &i in chunk {
                let sample = load_train(i)?;
                model.graph_mut().reset();
                let loss = model.sample_loss(&sample, schedule.keyframe_loss_weight)?;
                let scaled = model.graph_mut().scale(loss, inv);
                model.graph_mut().backward(scaled)?;
                let value = Scalar::to_f64(model.graph().value(loss).data()[0]);
                if !value.is_finite() {
                    return Err(CoreError::Numeric(format!(
                        "loss became {value} in epoch {epoch}"
                    )));
                }
                loss_sum += value;
            }
            optimizer.step(model.graph_mut());
        }
        let mut hits = 0usize;
        for i in 0..n_val {
            let sample = load_val(i)?;
            if model.sample_correct(&sample)? {
                hits += 1;
            }
        }
        let val_accuracy = hits as f64 / n_val as f64;
        report.epochs.push(EpochStats {
            epoch,
            train_loss: loss_sum / n_train as f64,
            val_accuracy,
        });
        if val_accuracy > report.best_val_accuracy {
            report.best_val_accuracy = val_accuracy;
            report.best_epoch = epoch;
            stale = 0;
            let mut ckpt = Checkpoint::new(model.model_spec());
            ckpt.capture_params(model.graph(), model.param_set())?;
            ckpt.capture_optimizer(model.param_set(), optimizer)?;
            best = Some(ckpt);
        } else {
            stale += 1;
            if stale >= schedule.patience {
                break;
            }
        }
    }
    Ok(TrainOutcome { report, best: best.expect("at least one epoch ran") })
}

/// One key-frame training sample: a five-view stack and its class index
/// (already encoded for the model's head).
#[derive(Debug, Clone)]
pub struct LabeledStack<T: Scalar> {
    pub input: Tensor<T>,
    pub class: usize,
}

impl<T: Scalar> Trainable<T> for KeyframeModel<T> {
    type Sample = LabeledStack<T>;

    fn sample_loss(&mut self, sample: &LabeledStack<T>, _kw: f64) -> Result<Var> {
        let logits = self.logits(&sample.input)?;
        let head = self.arch().head;
        head_loss(&mut self.graph, head, logits, sample.class)
    }

    fn sample_correct(&mut self, sample: &LabeledStack<T>) -> Result<bool> {
        Ok(self.predict(&sample.input)?.label == sample.class)
    }

    fn graph(&self) -> &Graph<T> {
        &self.graph
    }

    fn graph_mut(&mut self) -> &mut Graph<T> {
        &mut self.graph
    }

    fn param_set(&self) -> &ParamSet {
        &self.params
    }

    fn model_spec(&self) -> ModelSpec {
        self.spec().clone()
    }
}

/// One study for video training: per-view frame lists (None = absent view)
/// plus per-view key-frame indices for attention supervision.
#[derive(Debug, Clone)]
pub struct VideoSample<T: Scalar> {
    pub frames: Vec<Option<Vec<Tensor<T>>>>,
    pub keys: Vec<Option<usize>>,
    pub class: usize,
}

impl<T: Scalar> Trainable<T> for VideoModel<T> {
    type Sample = VideoSample<T>;

    fn sample_loss(&mut self, sample: &VideoSample<T>, keyframe_weight: f64) -> Result<Var> {
        if sample.keys.len() != sample.frames.len() {
            return config_err("video sample key list must match its view list");
        }
        let fwd = self.study_logits(&sample.frames)?;
        let head = self.arch().head;
        let mut total = head_loss(&mut self.graph, head, fwd.logits, sample.class)?;
        if keyframe_weight > 0.0 {
            for (out, key) in fwd.views.iter().zip(&sample.keys) {
                if let (Some(out), Some(key)) = (out, key) {
                    let sup = keyframe_supervision_loss(&mut self.graph, out.weights, *key)?;
                    let weighted = self.graph.scale(sup, keyframe_weight);
                    total = self.graph.add(total, weighted)?;
                }
            }
        }
        Ok(total)
    }

    fn sample_correct(&mut self, sample: &VideoSample<T>) -> Result<bool> {
        let (prediction, _) = self.predict(&sample.frames)?;
        Ok(prediction.label == sample.class)
    }

    fn graph(&self) -> &Graph<T> {
        &self.graph
    }

    fn graph_mut(&mut self) -> &mut Graph<T> {
        &mut self.graph
    }

    fn param_set(&self) -> &ParamSet {
        &self.params
    }

    fn model_spec(&self) -> ModelSpec {
        self.spec().clone()
    }
}

/// One clip for view classification: its frames and the true view ordinal.
#[derive(Debug, Clone)]
pub struct ClipSample<T: Scalar> {
    pub frames: Vec<Tensor<T>>,
    pub view: usize,
}

impl<T: Scalar> Trainable<T> for ViewClassifierModel<T> {
    type Sample = ClipSample<T>;

    fn sample_loss(&mut self, sample: &ClipSample<T>, _kw: f64) -> Result<Var> {
        let fwd = self.clip_logits(&sample.frames)?;
        self.graph.ce_with_logits(fwd.logits, sample.view)
    }

    fn sample_correct(&mut self, sample: &ClipSample<T>) -> Result<bool> {
        Ok(self.predict(&sample.frames)?.label == sample.view)
    }

    fn graph(&self) -> &Graph<T> {
        &self.graph
    }

    fn graph_mut(&mut self) -> &mut Graph<T> {
        &mut self.graph
    }

    fn param_set(&self) -> &ParamSet {
        &self.params
    }

    fn model_spec(&self) -> ModelSpec {
        self.spec().clone()
    }
}

/// In-memory convenience wrapper for key-frame training.
pub fn train_keyframe<T: Scalar>(
    model: &mut KeyframeModel<T>,
    train: &[LabeledStack<T>],
    val: &[LabeledStack<T>],
    schedule: &TrainSchedule,
) -> Result<TrainOutcome> {
    let mut optimizer = Adam::new(schedule.adam, &model.graph);
    fit(
        model,
        &mut optimizer,
        |i| Ok(train[i].clone()),
        train.len(),
        |i| Ok(val[i].clone()),
        val.len(),
        schedule,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aggregation::{AggregationSpec, SchemeKind};
    use crate::models::ArchitectureConfig;
    use rand::Rng;

    fn tiny_arch(head: Head) -> ArchitectureConfig {
        ArchitectureConfig {
            input_size: 16,
            conv_layers: 2,
            stage_widths: Some(vec![4, 6]),
            fc1_units: 16,
            fc2_units: 8,
            ..ArchitectureConfig::mc_dsc(head)
        }
    }

    /// Bright square in the A4C channel for positives; plain noise floor
    /// otherwise.
    fn toy_stack(positive: bool, rng: &mut ChaCha20Rng) -> Tensor<f64> {
        let s = 16usize;
        let mut data = vec![0.0f64; s * s * 5];
        for v in data.iter_mut() {
            *v = rng.gen_range(0.0..0.1);
        }
        if positive {
            for y in 5..11 {
                for x in 5..11 {
                    data[(y * s + x) * 5 + 2] = 0.9;
                }
            }
        }
        Tensor::from_f64_slice(vec![s, s, 5], &data).unwrap()
    }

    fn toy_set(n: usize, seed: u64) -> Vec<LabeledStack<f64>> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let positive = i % 2 == 0;
                LabeledStack { input: toy_stack(positive, &mut rng), class: usize::from(positive) }
            })
            .collect()
    }

    #[test]
    fn separable_toyset_is_learned_quickly() {
        let train = toy_set(40, 1);
        let val = toy_set(16, 2);
        let mut model = KeyframeModel::<f64>::build(tiny_arch(Head::Binary), 5).unwrap();
        let schedule = TrainSchedule { max_epochs: 50, patience: 50, ..TrainSchedule::default() };
        let out = train_keyframe(&mut model, &train, &val, &schedule).unwrap();
        assert!(out.report.best_val_accuracy >= 0.99, "report: {:?}", out.report);

        // Best checkpoint reproduces the winning accuracy on the training set.
        out.best.restore_params(&mut model.graph, &model.params).unwrap();
        let mut hits = 0;
        for s in &train {
            if model.predict(&s.input).unwrap().label == s.class {
                hits += 1;
            }
        }
        assert!(hits as f64 / train.len() as f64 >= 0.99);
        // Loss is finite at every recorded step.
        assert!(out.report.epochs.iter().all(|e| e.train_loss.is_finite()));
    }

    #[test]
    fn shuffled_labels_stay_at_chance() {
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let mut train = toy_set(40, 3);
        for s in &mut train {
            s.class = usize::from(rng.gen_bool(0.5));
        }
        let mut val = toy_set(100, 4);
        for s in &mut val {
            s.class = usize::from(rng.gen_bool(0.5));
        }
        let mut model = KeyframeModel::<f64>::build(tiny_arch(Head::Binary), 6).unwrap();
        let schedule = TrainSchedule { max_epochs: 12, patience: 12, ..TrainSchedule::default() };
        let out = train_keyframe(&mut model, &train, &val, &schedule).unwrap();
        let last = out.report.epochs.last().unwrap();
        assert!(
            (last.val_accuracy - 0.5).abs() <= 0.1,
            "no-signal control drifted: {}",
            last.val_accuracy
        );
    }

    #[test]
    fn identical_seeds_give_bitwise_identical_trajectories() {
        let train = toy_set(20, 11);
        let val = toy_set(8, 12);
        let schedule = TrainSchedule { max_epochs: 5, patience: 5, ..TrainSchedule::default() };
        let mut a = KeyframeModel::<f64>::build(tiny_arch(Head::Binary), 21).unwrap();
        let mut b = KeyframeModel::<f64>::build(tiny_arch(Head::Binary), 21).unwrap();
        let ra = train_keyframe(&mut a, &train, &val, &schedule).unwrap();
        let rb = train_keyframe(&mut b, &train, &val, &schedule).unwrap();
        assert_eq!(ra.report, rb.report);
        for (name, var) in a.params.entries() {
            assert_eq!(
                a.graph.value(var).data(),
                b.graph.value(b.params.lookup(name).unwrap()).data(),
                "parameter '{name}' diverged"
            );
        }
    }

    #[test]
    fn poisoned_input_reports_numeric_failure() {
        let mut train = toy_set(8, 31);
        let val = toy_set(4, 32);
        let mut bad = vec![0.0f64; 16 * 16 * 5];
        bad[7] = f64::NAN;
        train[3].input = Tensor::from_f64_slice(vec![16, 16, 5], &bad).unwrap();
        let mut model = KeyframeModel::<f64>::build(tiny_arch(Head::Binary), 7).unwrap();
        let schedule = TrainSchedule::default();
        let err = train_keyframe(&mut model, &train, &val, &schedule).unwrap_err();
        assert!(matches!(err, CoreError::Numeric(_)), "got {err:?}");
    }

    #[test]
    fn empty_splits_are_rejected() {
        let samples = toy_set(4, 41);
        let mut model = KeyframeModel::<f64>::build(tiny_arch(Head::Binary), 8).unwrap();
        let schedule = TrainSchedule::default();
        assert!(train_keyframe(&mut model, &[], &samples, &schedule).is_err());
        assert!(train_keyframe(&mut model, &samples, &[], &schedule).is_err());
    }

    #[test]
    fn video_loop_trains_and_checkpoints() {
        let arch = tiny_arch(Head::Binary);
        let agg = AggregationSpec::new(SchemeKind::Temporal);
        let mut model = VideoModel::<f64>::build(arch, agg, 3).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(50);
        let mut make = |positive: bool| {
            let frame = |rng: &mut ChaCha20Rng, hot: bool| {
                let mut data = vec![0.05f64; 16 * 16];
                for v in data.iter_mut() {
                    *v += rng.gen_range(0.0..0.05);
                }
                if hot {
                    for y in 4..12 {
                        for x in 4..12 {
                            data[y * 16 + x] = 0.9;
                        }
                    }
                }
                Tensor::from_f64_slice(vec![16, 16, 1], &data).unwrap()
            };
            let clip: Vec<Tensor<f64>> =
                (0..3).map(|t| frame(&mut rng, positive && t == 1)).collect();
            VideoSample {
                frames: vec![None, None, Some(clip), None, None],
                keys: vec![None, None, Some(1), None, None],
                class: usize::from(positive),
            }
        };
        let train: Vec<VideoSample<f64>> = (0..8).map(|i| make(i % 2 == 0)).collect();
        let val: Vec<VideoSample<f64>> = (0..4).map(|i| make(i % 2 == 1)).collect();
        let schedule = TrainSchedule {
            max_epochs: 8,
            patience: 8,
            batch_size: 4,
            ..TrainSchedule::default()
        };
        let mut optimizer = Adam::new(schedule.adam, &model.graph);
        let out = fit(
            &mut model,
            &mut optimizer,
            |i| Ok(train[i].clone()),
            train.len(),
            |i| Ok(val[i].clone()),
            val.len(),
            &schedule,
        )
        .unwrap();
        assert!(out.report.epochs.iter().all(|e| e.train_loss.is_finite()));
        assert!(out.best.has_optimizer_state());
        assert!(out.report.best_val_accuracy >= 0.5);
        let csv = out.report.to_csv();
        assert!(csv.starts_with("epoch,train_loss,val_acc\n"));
        assert_eq!(csv.lines().count(), out.report.epochs.len() + 1);
    }

    #[test]
    fn view_classifier_learns_template_clips() {
        let arch = tiny_arch(Head::FiveView);
        let agg = AggregationSpec::new(SchemeKind::Frameind);
        let mut model = ViewClassifierModel::<f64>::build(arch, agg, 4).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(60);
        let mut make = |view: usize| {
            let mut frames = Vec::new();
            for _ in 0..2 {
                let mut data = vec![0.05f64; 16 * 16];
                for v in data.iter_mut() {
                    *v += rng.gen_range(0.0..0.05);
                }
                // A bright row whose position encodes the view.
                let row = 2 + 3 * view;
                for x in 0..16 {
                    data[row * 16 + x] = 0.9;
                }
                frames.push(Tensor::from_f64_slice(vec![16, 16, 1], &data).unwrap());
            }
            ClipSample { frames, view }
        };
        let train: Vec<ClipSample<f64>> = (0..50).map(|i| make(i % 5)).collect();
        let val: Vec<ClipSample<f64>> = (0..10).map(|i| make(i % 5)).collect();
        let schedule = TrainSchedule {
            max_epochs: 80,
            patience: 80,
            batch_size: 10,
            adam: AdamConfig { learning_rate: 3e-3, ..AdamConfig::default() },
            ..TrainSchedule::default()
        };
        let mut optimizer = Adam::new(schedule.adam, &model.graph);
        let out = fit(
            &mut model,
            &mut optimizer,
            |i| Ok(train[i].clone()),
            train.len(),
            |i| Ok(val[i].clone()),
            val.len(),
            &schedule,
        )
        .unwrap();
        assert!(out.report.best_val_accuracy >= 0.9, "report: {:?}", out.report);
    }
}
