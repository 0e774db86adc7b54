//! Per-step grounding decisions, the chain-rule sequence probability,
//! greedy decoding with test-time NMS, and the grounding output format.

use crate::error::Result;
use crate::geometry::{nms, Rect};
use crate::model::{assemble_scene, CandidateSource, GroundingModel, SceneInput};
use crate::nn::{ParamStore, Session};
use crate::synth::SceneRecord;
use crate::tape::Var;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Supervision state of one (phrase, box) decision.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Label {
    Positive,
    Negative,
    /// Between the IoU bands; never contributes to the loss.
    Ignore,
}

/// Teacher-forced pass over one assembled scene: the history stack is built
/// from the gold pairs (`gold[t]` lists sorted-box indices), matching the
/// conditioning of the chain-rule factorization during training. Returns the
/// per-step logits (each M x 1 on the tape) and probabilities.
pub fn teacher_forced_rollout(
    model: &GroundingModel,
    sess: &mut Session,
    scene: &SceneInput,
    gold: &[Vec<usize>],
    rng: &mut impl Rng,
) -> Result<(Vec<Var>, Vec<Vec<f64>>)> {
    let mut ws = model.build_workspace(sess, scene, rng)?;
    let mut step_logits = Vec::with_capacity(scene.phrases.len());
    let mut step_probs = Vec::with_capacity(scene.phrases.len());
    for t in 0..scene.phrases.len() {
        let (logits, probs) = model.decide_step(sess, &mut ws, t, rng)?;
        model.push_step_history(sess, &mut ws, t, &gold[t], rng)?;
        step_logits.push(logits);
        step_probs.push(probs);
    }
    Ok((step_logits, step_probs))
}

/// Greedy pass: a box is grounded iff its probability exceeds `threshold`;
/// grounded pairs enter the history in spatial order before the next step.
pub fn greedy_rollout(
    model: &GroundingModel,
    sess: &mut Session,
    scene: &SceneInput,
    threshold: f64,
    rng: &mut impl Rng,
) -> Result<(Vec<Vec<f64>>, Vec<Vec<usize>>)> {
    let mut ws = model.build_workspace(sess, scene, rng)?;
    let mut step_probs = Vec::with_capacity(scene.phrases.len());
    let mut step_chosen = Vec::with_capacity(scene.phrases.len());
    for t in 0..scene.phrases.len() {
        let (_, probs) = model.decide_step(sess, &mut ws, t, rng)?;
        let chosen: Vec<usize> = (0..probs.len()).filter(|&i| probs[i] > threshold).collect();
        model.push_step_history(sess, &mut ws, t, &chosen, rng)?;
        step_probs.push(probs);
        step_chosen.push(chosen);
    }
    Ok((step_probs, step_chosen))
}

/// Log-probability of a gold decision sequence given per-decision sigmoid
/// probabilities: sum of y*log d + (1-y)*log(1-d). Probabilities at exactly
/// 0 or 1 against the opposite label are clamped to 1e-12 away from the
/// boundary; the clamp count is returned as a flag.
pub fn sequence_log_prob(probs: &[Vec<f64>], labels: &[Vec<bool>]) -> (f64, usize) {
    const EPS: f64 = 1e-12;
    let mut total = 0.0;
    let mut clamped = 0usize;
    for (prow, lrow) in probs.iter().zip(labels) {
        for (&d, &y) in prow.iter().zip(lrow) {
            let p = if y { d } else { 1.0 - d };
            let p = if p < EPS {
                clamped += 1;
                EPS
            } else {
                p
            };
            total += p.ln();
        }
    }
    (total, clamped)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecodeOptions {
    pub threshold: f64,
    pub nms_iou: f64,
    /// Guided mode feeds only the groundable phrases; unguided feeds the
    /// whole sentence and lets evaluation skip the fillers.
    pub guided: bool,
    /// Seed fixing the random phrase order (only used for that ordering).
    pub order_seed: u64,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        DecodeOptions { threshold: 0.5, nms_iou: 0.3, guided: false, order_seed: 0 }
    }
}

/// Grounding of one phrase, reported in the record's indexing.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhraseGrounding {
    pub phrase_index: usize,
    pub tokens: Vec<String>,
    pub groundable: bool,
    /// Score per candidate box (decision probability, or similarity for the
    /// baselines).
    pub probs: Vec<f64>,
    /// Boxes over threshold, pre-NMS. These are what the history saw.
    pub chosen: Vec<usize>,
    /// Boxes surviving NMS; the evaluated prediction.
    pub kept: Vec<usize>,
    pub kept_rects: Vec<Rect>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroundingResult {
    pub scene_id: u64,
    pub phrases: Vec<PhraseGrounding>,
}

/// Decode one scene: greedy decisions, history from raw (pre-NMS)
/// decisions, NMS as a test-time output filter.
pub fn greedy_decode(
    store: &ParamStore,
    model: &GroundingModel,
    record: &SceneRecord,
    source: CandidateSource,
    opts: &DecodeOptions,
) -> Result<GroundingResult> {
    let scene = assemble_scene(
        record,
        source,
        model.cfg.ablation.phrase_order,
        opts.guided,
        opts.order_seed,
    )?;
    let mut sess = Session::new(store, false)?;
    let mut rng = crate::rngs::stream(0, "decode");
    let (step_probs, step_chosen) = greedy_rollout(model, &mut sess, &scene, opts.threshold, &mut rng)?;

    let mut phrases = Vec::with_capacity(scene.phrases.len());
    for (t, entry) in scene.phrases.iter().enumerate() {
        // map sorted-box indexing back to the record's candidate indexing
        let mut probs = vec![0.0; scene.boxes.len()];
        for (i, &p) in step_probs[t].iter().enumerate() {
            probs[scene.box_perm[i]] = p;
        }
        let chosen: Vec<usize> = step_chosen[t].iter().map(|&i| scene.box_perm[i]).collect();
        let rects: Vec<Rect> = step_chosen[t].iter().map(|&i| scene.boxes[i].0).collect();
        let scores: Vec<f64> = step_chosen[t].iter().map(|&i| step_probs[t][i]).collect();
        let keep = nms(&rects, &scores, opts.nms_iou)?;
        let kept: Vec<usize> = keep.iter().map(|&k| chosen[k]).collect();
        let kept_rects: Vec<Rect> = keep.iter().map(|&k| rects[k]).collect();
        phrases.push(PhraseGrounding {
            phrase_index: scene.phrase_perm[t],
            tokens: entry.tokens.clone(),
            groundable: entry.groundable,
            probs,
            chosen,
            kept,
            kept_rects,
        });
    }
    phrases.sort_by_key(|p| p.phrase_index);
    Ok(GroundingResult { scene_id: record.scene_id, phrases })
}

/// Output record for the grounding JSON-lines file.
#[derive(Debug, Serialize, Deserialize)]
pub struct OutputRecord {
    pub scene_id: u64,
    pub phrases: Vec<OutputPhrase>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct OutputPhrase {
    pub phrase_index: usize,
    pub text: String,
    pub boxes: Vec<[f64; 4]>,
    pub probs: Vec<f64>,
}

impl GroundingResult {
    pub fn to_output(&self) -> OutputRecord {
        OutputRecord {
            scene_id: self.scene_id,
            phrases: self
                .phrases
                .iter()
                .map(|p| OutputPhrase {
                    phrase_index: p.phrase_index,
                    text: p.tokens.join(" "),
                    boxes: p.kept_rects.iter().map(|r| r.corners()).collect(),
                    probs: p.kept.iter().map(|&i| p.probs[i]).collect(),
                })
                .collect(),
        }
    }
}

pub fn write_groundings(results: &[GroundingResult], path: &std::path::Path) -> Result<()> {
    use std::io::Write;
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in results {
        serde_json::to_writer(&mut w, &r.to_output())?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}
