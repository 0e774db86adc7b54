//! Grounding accuracy: a noun phrase counts as correct when the union of
//! its predicted boxes overlaps the union of its ground-truth boxes with
//! IoU of at least 0.5. Fillers are excluded from the denominator.

use crate::decision::GroundingResult;
use crate::error::{Error, Result};
use crate::geometry::{region_iou, Rect};
use crate::synth::{SceneRecord, FAR_TOKEN, NEAR_TOKEN};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

pub const ACCURACY_IOU: f64 = 0.5;

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Tally {
    pub correct: usize,
    pub total: usize,
}

impl Tally {
    pub fn accuracy(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }

    fn add(&mut self, correct: bool) {
        self.total += 1;
        if correct {
            self.correct += 1;
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub overall: f64,
    pub counts: Tally,
    pub by_category: BTreeMap<String, Tally>,
    /// Keyed by the phrase's 1-based position among the noun phrases of its
    /// sentence.
    pub by_position: BTreeMap<usize, Tally>,
    /// Subset of phrases carrying a spatial-relation token.
    pub relational: Tally,
    /// Noun phrases with an empty predicted region (scored incorrect).
    pub empty_predictions: usize,
    /// Phrases skipped because no ground truth was present.
    pub skipped_without_gt: usize,
}

impl AccuracyReport {
    pub fn ambiguous_accuracy(&self) -> Option<f64> {
        if self.relational.total == 0 {
            None
        } else {
            Some(self.relational.accuracy())
        }
    }

    pub fn position_accuracies(&self) -> BTreeMap<usize, f64> {
        self.by_position.iter().map(|(k, v)| (*k, v.accuracy())).collect()
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "overall": self.overall,
            "counts": {"correct": self.counts.correct, "total": self.counts.total},
            "by_category": self.by_category.iter()
                .map(|(k, v)| (k.clone(), serde_json::json!({
                    "accuracy": v.accuracy(), "correct": v.correct, "total": v.total})))
                .collect::<serde_json::Map<_, _>>(),
            "by_position": self.by_position.iter()
                .map(|(k, v)| (k.to_string(), serde_json::json!({
                    "accuracy": v.accuracy(), "correct": v.correct, "total": v.total})))
                .collect::<serde_json::Map<_, _>>(),
            "relational": {"accuracy": self.ambiguous_accuracy(),
                           "correct": self.relational.correct, "total": self.relational.total},
            "empty_predictions": self.empty_predictions,
            "skipped_without_gt": self.skipped_without_gt,
        })
    }

    pub fn positions_csv(&self) -> String {
        let mut s = String::from("position,accuracy,correct,total\n");
        for (pos, t) in &self.by_position {
            s.push_str(&format!("{pos},{:.6},{},{}\n", t.accuracy(), t.correct, t.total));
        }
        s
    }
}

/// Scores decoded results against annotations. `results` must align with
/// `scenes` by scene_id. Predictions are the post-NMS kept boxes.
pub fn grounding_accuracy(
    results: &[GroundingResult],
    scenes: &[SceneRecord],
) -> Result<AccuracyReport> {
    let mut by_id: BTreeMap<u64, &SceneRecord> =
        scenes.iter().map(|s| (s.scene_id, s)).collect();
    let mut report = AccuracyReport::default();
    for result in results {
        let scene = by_id
            .remove(&result.scene_id)
            .ok_or_else(|| Error::Input(format!("no annotations for scene {}", result.scene_id)))?;
        let mut noun_position = 0usize;
        let mut seen: BTreeMap<usize, &crate::decision::PhraseGrounding> =
            result.phrases.iter().map(|p| (p.phrase_index, p)).collect();
        for (pi, phrase) in scene.phrases.iter().enumerate() {
            if !phrase.groundable {
                continue;
            }
            noun_position += 1;
            if phrase.gt_boxes.is_empty() {
                report.skipped_without_gt += 1;
                continue;
            }
            let gt_region: Vec<Rect> =
                phrase.gt_boxes.iter().map(|&b| scene.gt_boxes[b].rect).collect();
            let correct = match seen.remove(&pi) {
                Some(grounding) => {
                    if grounding.kept_rects.is_empty() {
                        report.empty_predictions += 1;
                        false
                    } else {
                        region_iou(&grounding.kept_rects, &gt_region) >= ACCURACY_IOU
                    }
                }
                // guided decoding of a phrase the model never saw
                None => {
                    report.empty_predictions += 1;
                    false
                }
            };
            report.counts.add(correct);
            let category = scene.gt_boxes[phrase.gt_boxes[0]].category.clone();
            report.by_category.entry(category).or_default().add(correct);
            report.by_position.entry(noun_position).or_default().add(correct);
            if phrase.tokens.iter().any(|t| t == NEAR_TOKEN || t == FAR_TOKEN) {
                report.relational.add(correct);
            }
        }
    }
    report.overall = report.counts.accuracy();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decision::PhraseGrounding;
    use crate::synth::{GtBox, PhraseEntry};

    fn rect(x1: f64, y1: f64, x2: f64, y2: f64) -> Rect {
        Rect::new(x1, y1, x2, y2).unwrap()
    }

    fn scene_with_two_phrases() -> SceneRecord {
        SceneRecord {
            scene_id: 1,
            width: 100.0,
            height: 100.0,
            image_feature: vec![0.0; 4],
            gt_boxes: vec![
                GtBox {
                    rect: rect(10.0, 10.0, 30.0, 30.0),
                    concept: "c00".into(),
                    category: "cat0".into(),
                    feature: vec![0.0; 4],
                },
                GtBox {
                    rect: rect(50.0, 50.0, 80.0, 80.0),
                    concept: "c01".into(),
                    category: "cat1".into(),
                    feature: vec![0.0; 4],
                },
            ],
            proposals: vec![],
            phrases: vec![
                PhraseEntry { tokens: vec!["the".into()], groundable: false, gt_boxes: vec![] },
                PhraseEntry {
                    tokens: vec!["a0".into(), "c00".into()],
                    groundable: true,
                    gt_boxes: vec![0],
                },
                PhraseEntry {
                    tokens: vec!["a1".into(), "c01".into()],
                    groundable: true,
                    gt_boxes: vec![1],
                },
            ],
        }
    }

    fn grounding(pi: usize, rects: Vec<Rect>) -> PhraseGrounding {
        PhraseGrounding {
            phrase_index: pi,
            tokens: vec![],
            groundable: true,
            probs: vec![],
            chosen: (0..rects.len()).collect(),
            kept: (0..rects.len()).collect(),
            kept_rects: rects,
        }
    }

    #[test]
    fn perfect_predictions_score_one() {
        let scene = scene_with_two_phrases();
        let result = GroundingResult {
            scene_id: 1,
            phrases: vec![
                grounding(1, vec![rect(10.0, 10.0, 30.0, 30.0)]),
                grounding(2, vec![rect(50.0, 50.0, 80.0, 80.0)]),
            ],
        };
        let report = grounding_accuracy(&[result], &[scene]).unwrap();
        assert_eq!(report.overall, 1.0);
        assert_eq!(report.counts.total, 2);
        assert_eq!(report.by_category["cat0"].accuracy(), 1.0);
        assert_eq!(report.by_position[&1].total, 1);
        assert_eq!(report.by_position[&2].total, 1);
    }

    #[test]
    fn empty_prediction_counts_incorrect() {
        let scene = scene_with_two_phrases();
        let result = GroundingResult {
            scene_id: 1,
            phrases: vec![
                grounding(1, vec![]),
                grounding(2, vec![rect(50.0, 50.0, 80.0, 80.0)]),
            ],
        };
        let report = grounding_accuracy(&[result], &[scene]).unwrap();
        assert_eq!(report.counts.correct, 1);
        assert_eq!(report.counts.total, 2);
        assert_eq!(report.empty_predictions, 1);
        assert_eq!(report.overall, 0.5);
    }

    #[test]
    fn fillers_never_enter_the_denominator() {
        let scene = scene_with_two_phrases();
        // result includes a grounding for the filler too; it must be ignored
        let mut phrases = vec![
            grounding(0, vec![rect(1.0, 1.0, 2.0, 2.0)]),
            grounding(1, vec![rect(10.0, 10.0, 30.0, 30.0)]),
            grounding(2, vec![rect(50.0, 50.0, 80.0, 80.0)]),
        ];
        phrases[0].groundable = false;
        let result = GroundingResult { scene_id: 1, phrases };
        let report = grounding_accuracy(&[result], &[scene]).unwrap();
        assert_eq!(report.counts.total, 2);
        assert_eq!(report.overall, 1.0);
    }

    #[test]
    fn iou_below_half_is_incorrect() {
        let scene = scene_with_two_phrases();
        let result = GroundingResult {
            scene_id: 1,
            phrases: vec![
                // IoU with (10,10,30,30) = 100/700 < 0.5
                grounding(1, vec![rect(20.0, 20.0, 40.0, 40.0)]),
                grounding(2, vec![rect(50.0, 50.0, 80.0, 80.0)]),
            ],
        };
        let report = grounding_accuracy(&[result], &[scene]).unwrap();
        assert_eq!(report.counts.correct, 1);
    }

    #[test]
    fn accuracy_invariant_to_scene_order() {
        let scene_a = scene_with_two_phrases();
        let mut scene_b = scene_with_two_phrases();
        scene_b.scene_id = 2;
        let result_a = GroundingResult {
            scene_id: 1,
            phrases: vec![
                grounding(1, vec![rect(10.0, 10.0, 30.0, 30.0)]),
                grounding(2, vec![rect(1.0, 1.0, 2.0, 2.0)]),
            ],
        };
        let result_b = GroundingResult {
            scene_id: 2,
            phrases: vec![
                grounding(1, vec![rect(10.0, 10.0, 30.0, 30.0)]),
                grounding(2, vec![rect(50.0, 50.0, 80.0, 80.0)]),
            ],
        };
        let r1 = grounding_accuracy(
            &[result_a.clone(), result_b.clone()],
            &[scene_a.clone(), scene_b.clone()],
        )
        .unwrap();
        let r2 = grounding_accuracy(&[result_b, result_a], &[scene_a, scene_b]).unwrap();
        assert_eq!(r1.overall, r2.overall);
        assert_eq!(r1.counts.total, r2.counts.total);
    }

    #[test]
    fn missing_annotations_are_an_error() {
        let result = GroundingResult { scene_id: 99, phrases: vec![] };
        assert!(grounding_accuracy(&[result], &[]).is_err());
    }
}
