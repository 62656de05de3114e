//! Assign unordered clips to the five view slots: classify each clip, then
//! greedily give every clip its best still-free slot in descending
//! confidence order.

use serde::{Deserialize, Serialize};

use crate::error::{data_err, Result};
use crate::models::{Prediction, ViewClassifierModel};
use crate::preprocess::ViewKind;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewPrediction {
    pub probs: Vec<f64>,
    pub argmax: ViewKind,
    pub confidence: f64,
}

impl ViewPrediction {
    pub fn from_probs(probs: Vec<f64>) -> Result<ViewPrediction> {
        if probs.len() != ViewKind::ALL.len() {
            return data_err(format!("want 5 view probabilities, got {}", probs.len()));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return data_err("view probabilities must be finite and non-negative");
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return data_err(format!("view probabilities sum to {sum}, not 1"));
        }
        let best = probs
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite probs"))
            .expect("non-empty");
        Ok(ViewPrediction {
            argmax: ViewKind::from_ordinal(best.0).expect("5 entries"),
            confidence: *best.1,
            probs,
        })
    }

    pub fn from_prediction(p: &Prediction) -> Result<ViewPrediction> {
        ViewPrediction::from_probs(p.probabilities.clone())
    }
}

/// Classify one clip with the view model.
pub fn classify_clip<T: Scalar>(
    model: &mut ViewClassifierModel<T>,
    frames: &[Tensor<T>],
) -> Result<ViewPrediction> {
    ViewPrediction::from_prediction(&model.predict(frames)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRow {
    pub clip_id: String,
    pub predicted: ViewKind,
    pub confidence: f64,
    /// Final slot; None if every slot was taken.
    pub slot: Option<ViewKind>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    /// Slot occupancy in view order.
    pub slots: Vec<Option<String>>,
    pub unassigned: Vec<String>,
    /// One row per clip, in resolution (descending-confidence) order.
    pub audit: Vec<AuditRow>,
}

impl Assignment {
    pub fn slot(&self, view: ViewKind) -> Option<&str> {
        self.slots[view.ordinal()].as_deref()
    }

    pub fn audit_csv(&self) -> String {
        let mut out = String::from("clip_id,predicted_view,confidence,assigned_slot\n");
        for row in &self.audit {
            out.push_str(&format!(
                "{},{},{},{}\n",
                row.clip_id,
                row.predicted.name(),
                row.confidence,
                row.slot.map_or("", |s| s.name()),
            ));
        }
        out
    }
}

/// Greedy resolution: clips are processed in descending confidence (ties by
/// clip id), and each takes its highest-probability still-free slot. With at
/// most five clips every clip lands somewhere; the `unassigned` spillover
/// exists for defensive completeness.
pub fn resolve_assignment(preds: &[(String, ViewPrediction)]) -> Result<Assignment> {
    if preds.is_empty() || preds.len() > ViewKind::ALL.len() {
        return data_err(format!("router wants 1-5 clips, got {}", preds.len()));
    }
    let mut ids: Vec<&str> = preds.iter().map(|(id, _)| id.as_str()).collect();
    ids.sort_unstable();
    ids.dedup();
    if ids.len() != preds.len() {
        return data_err("clip ids must be unique");
    }
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| {
        preds[b]
            .1
            .confidence
            .partial_cmp(&preds[a].1.confidence)
            .expect("finite confidence")
            .then_with(|| preds[a].0.cmp(&preds[b].0))
    });
    let mut slots: Vec<Option<String>> = vec![None; ViewKind::ALL.len()];
    let mut unassigned = Vec::new();
    let mut audit = Vec::new();
    for &i in &order {
        let (clip_id, pred) = &preds[i];
        // Rank this clip's slot preferences by probability, ties by view
        // order for determinism.
        let mut ranked: Vec<usize> = (0..pred.probs.len()).collect();
        ranked.sort_by(|&a, &b| {
            pred.probs[b].partial_cmp(&pred.probs[a]).expect("finite probs").then(a.cmp(&b))
        });
        let taken = ranked.into_iter().find(|&v| slots[v].is_none());
        match taken {
            Some(v) => {
                slots[v] = Some(clip_id.clone());
                audit.push(AuditRow {
                    clip_id: clip_id.clone(),
                    predicted: pred.argmax,
                    confidence: pred.confidence,
                    slot: Some(ViewKind::from_ordinal(v).expect("5 slots")),
                });
            }
            None => {
                unassigned.push(clip_id.clone());
                audit.push(AuditRow {
                    clip_id: clip_id.clone(),
                    predicted: pred.argmax,
                    confidence: pred.confidence,
                    slot: None,
                });
            }
        }
    }
    Ok(Assignment { slots, unassigned, audit })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn pred_for(view: ViewKind, confidence: f64) -> ViewPrediction {
        let rest = (1.0 - confidence) / 4.0;
        let mut probs = vec![rest; 5];
        probs[view.ordinal()] = confidence;
        ViewPrediction::from_probs(probs).unwrap()
    }

    #[test]
    fn distinct_argmaxes_give_identity() {
        let preds: Vec<(String, ViewPrediction)> = ViewKind::ALL
            .into_iter()
            .map(|v| (format!("clip-{}", v.name()), pred_for(v, 0.8)))
            .collect();
        let a = resolve_assignment(&preds).unwrap();
        for v in ViewKind::ALL {
            assert_eq!(a.slot(v), Some(format!("clip-{}", v.name()).as_str()));
        }
        assert!(a.unassigned.is_empty());
    }

    #[test]
    fn conflict_goes_to_the_more_confident_clip() {
        // Both want PSLAX; the 0.9 clip keeps it, the 0.6 clip falls back to
        // its next-best view.
        let strong = pred_for(ViewKind::PSLAX, 0.9);
        let mut weak_probs = vec![0.05; 5];
        weak_probs[ViewKind::PSLAX.ordinal()] = 0.6;
        weak_probs[ViewKind::A4C.ordinal()] = 0.25;
        let weak = ViewPrediction::from_probs(weak_probs).unwrap();
        let a = resolve_assignment(&[
            ("weak".into(), weak),
            ("strong".into(), strong),
        ])
        .unwrap();
        assert_eq!(a.slot(ViewKind::PSLAX), Some("strong"));
        assert_eq!(a.slot(ViewKind::A4C), Some("weak"));
        let csv = a.audit_csv();
        assert!(csv.lines().count() == 3 && csv.contains("strong,PSLAX"));
    }

    #[test]
    fn input_order_never_matters() {
        let mut rng = ChaCha20Rng::seed_from_u64(17);
        for _ in 0..200 {
            let n = rng.gen_range(1..=5);
            let preds: Vec<(String, ViewPrediction)> = (0..n)
                .map(|i| {
                    let mut raw: Vec<f64> = (0..5).map(|_| rng.gen_range(0.01..1.0)).collect();
                    let sum: f64 = raw.iter().sum();
                    for p in raw.iter_mut() {
                        *p /= sum;
                    }
                    (format!("c{i}"), ViewPrediction::from_probs(raw).unwrap())
                })
                .collect();
            let base = resolve_assignment(&preds).unwrap();

            // Partial injection: every clip exactly once, slots distinct.
            let mut seen: Vec<&str> = base
                .slots
                .iter()
                .flatten()
                .map(String::as_str)
                .chain(base.unassigned.iter().map(String::as_str))
                .collect();
            seen.sort_unstable();
            assert_eq!(seen.len(), n);
            seen.dedup();
            assert_eq!(seen.len(), n);
            // With at most five clips everyone fits.
            assert!(base.unassigned.is_empty());

            let mut shuffled = preds.clone();
            for i in (1..shuffled.len()).rev() {
                let j = rng.gen_range(0..=i);
                shuffled.swap(i, j);
            }
            assert_eq!(resolve_assignment(&shuffled).unwrap(), base);
        }
    }

    #[test]
    fn confidence_ties_break_by_clip_id() {
        let a = resolve_assignment(&[
            ("zed".into(), pred_for(ViewKind::A4C, 0.5)),
            ("abe".into(), pred_for(ViewKind::A4C, 0.5)),
        ])
        .unwrap();
        assert_eq!(a.slot(ViewKind::A4C), Some("abe"));
        // The loser's remaining probabilities tie at 0.125, so view order
        // decides: PSLAX is the first free slot.
        assert_eq!(a.slot(ViewKind::PSLAX), Some("zed"));
    }

    #[test]
    fn bad_inputs_are_rejected() {
        assert!(resolve_assignment(&[]).is_err());
        let too_many: Vec<(String, ViewPrediction)> = (0..6)
            .map(|i| (format!("c{i}"), pred_for(ViewKind::A4C, 0.5)))
            .collect();
        assert!(resolve_assignment(&too_many).is_err());
        let dup = vec![
            ("same".to_string(), pred_for(ViewKind::A4C, 0.5)),
            ("same".to_string(), pred_for(ViewKind::PSSAX, 0.5)),
        ];
        assert!(resolve_assignment(&dup).is_err());
        assert!(ViewPrediction::from_probs(vec![0.3, 0.3, 0.3, 0.3, 0.3]).is_err());
        assert!(ViewPrediction::from_probs(vec![0.5, 0.5]).is_err());
    }

    #[test]
    fn single_clip_fills_one_slot() {
        let a = resolve_assignment(&[("only".into(), pred_for(ViewKind::SSLAX, 0.7))]).unwrap();
        assert_eq!(a.slot(ViewKind::SSLAX), Some("only"));
        assert_eq!(a.slots.iter().flatten().count(), 1);
    }
}
