//! Component toggles, named ablation presets, the similarity baselines, and
//! the ablation suite runner.

use crate::decision::{DecodeOptions, GroundingResult, PhraseGrounding};
use crate::error::{Error, Result};
use crate::model::{CandidateSource, GroundingModel, SceneInput};
use crate::nn::{ParamStore, Session};
use crate::order_embed::similarity;
use crate::synth::SceneRecord;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum VisualContext {
    None,
    #[default]
    Global,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BoxEncoder {
    /// Raw encoded box vector with location features, no recurrence.
    Simple,
    #[default]
    BiLstm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PhraseEncoderMode {
    /// Raw encoded phrase vector, no recurrence over future phrases.
    Simple,
    #[default]
    Lstm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum HistoryMode {
    None,
    #[default]
    Lstm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PhraseOrder {
    L2r,
    /// Reverse lexical order: the last phrase of the sentence is grounded
    /// first, so late hard phrases see no accumulated history error.
    #[default]
    R2l,
    Random,
}

/// Which pieces of the full architecture a run uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct AblationConfig {
    pub visual_context: VisualContext,
    pub box_encoder: BoxEncoder,
    pub phrase_encoder: PhraseEncoderMode,
    pub history: HistoryMode,
    pub phrase_order: PhraseOrder,
}

impl AblationConfig {
    pub fn full() -> Self {
        AblationConfig::default()
    }

    /// Named presets matching the component grid of the ablation table.
    /// MSB/MSBs share the no-network component row; their grounding rule is
    /// the similarity baseline below rather than the decision network.
    pub fn preset(name: &str) -> Result<Self> {
        let full = AblationConfig::full();
        let cfg = match name {
            "full" => full,
            "MSB" | "MSBs" => AblationConfig {
                visual_context: VisualContext::None,
                box_encoder: BoxEncoder::Simple,
                phrase_encoder: PhraseEncoderMode::Simple,
                history: HistoryMode::None,
                ..full
            },
            "NH" => AblationConfig { history: HistoryMode::None, ..full },
            "NI" => AblationConfig { visual_context: VisualContext::None, ..full },
            "SPv" => AblationConfig { phrase_encoder: PhraseEncoderMode::Simple, ..full },
            "SBv" => AblationConfig { box_encoder: BoxEncoder::Simple, ..full },
            "SPvBv" => AblationConfig {
                box_encoder: BoxEncoder::Simple,
                phrase_encoder: PhraseEncoderMode::Simple,
                ..full
            },
            // the table and the prose spell this preset differently; both
            // mean simple encoders with no history
            "SPvBvNH" | "SBvPvNH" => AblationConfig {
                box_encoder: BoxEncoder::Simple,
                phrase_encoder: PhraseEncoderMode::Simple,
                history: HistoryMode::None,
                ..full
            },
            other => return Err(Error::Config(format!("unknown ablation preset {other}"))),
        };
        Ok(cfg)
    }

    pub fn trained_preset_names() -> &'static [&'static str] {
        &["NH", "NI", "SPv", "SBv", "SPvBv", "SPvBvNH", "full"]
    }
}

/// Single- or multi-box similarity grounding.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MsbMode {
    /// Each phrase grounds to the most similar box.
    Single,
    /// Each phrase grounds to every box within `slack` of the best
    /// similarity; slack 0 reduces to `Single`.
    Multi { slack: f64 },
}

/// Grounding decisions from a precomputed similarity matrix
/// (scores[t][i] = F for phrase t, box i). Ties break to the lower index.
pub fn msb_ground_scores(scores: &[Vec<f64>], mode: MsbMode) -> Vec<Vec<usize>> {
    scores
        .iter()
        .map(|row| {
            if row.is_empty() {
                return vec![];
            }
            let mut best = 0usize;
            for i in 1..row.len() {
                if row[i] > row[best] {
                    best = i;
                }
            }
            match mode {
                MsbMode::Single => vec![best],
                MsbMode::Multi { slack } => (0..row.len())
                    .filter(|&i| row[i] >= row[best] - slack)
                    .collect(),
            }
        })
        .collect()
}

/// Similarity matrix F(p_t, b_i) for one assembled scene through the
/// pretrained encoders (no sequencing, no history).
pub fn similarity_scores(
    store: &ParamStore,
    model: &GroundingModel,
    scene: &SceneInput,
) -> Result<Vec<Vec<f64>>> {
    let mut sess = Session::new(store, false)?;
    let mut rng = crate::rngs::stream(0, "msb/eval");
    let phrases: Vec<Vec<String>> = scene.phrases.iter().map(|p| p.tokens.clone()).collect();
    let p_enc = model.encoders.encode_phrases(&mut sess, &phrases, &mut rng)?;
    let feats = Tensor::matrix(
        scene.boxes.len(),
        scene.boxes[0].1.len(),
        scene.boxes.iter().flat_map(|(_, f)| f.iter().copied()).collect(),
    )?;
    let b_enc = model.encoders.encode_visual_rows(&mut sess, &feats, &mut rng)?;
    let p_val = sess.tape.value(p_enc).clone();
    let b_val = sess.tape.value(b_enc).clone();
    let d = p_val.cols();
    let mut scores = vec![vec![0.0; scene.boxes.len()]; scene.phrases.len()];
    for (t, row) in scores.iter_mut().enumerate() {
        let p = &p_val.data()[t * d..(t + 1) * d];
        for (i, cell) in row.iter_mut().enumerate() {
            let b = &b_val.data()[i * d..(i + 1) * d];
            *cell = similarity(p, b)?;
        }
    }
    Ok(scores)
}

/// Similarity-baseline grounding of one scene. Candidates follow `source`;
/// decisions are independent per phrase.
pub fn msb_ground(
    store: &ParamStore,
    model: &GroundingModel,
    record: &SceneRecord,
    source: CandidateSource,
    mode: MsbMode,
) -> Result<GroundingResult> {
    let scene = crate::model::assemble_scene(record, source, model.cfg.ablation.phrase_order, false, 0)?;
    let scores = similarity_scores(store, model, &scene)?;
    let chosen = msb_ground_scores(&scores, mode);
    let mut phrases: Vec<PhraseGrounding> = Vec::new();
    for (t, entry) in scene.phrases.iter().enumerate() {
        let sentence_index = scene.phrase_perm[t];
        let mut probs = vec![0.0; scene.boxes.len()];
        for (i, &s) in scores[t].iter().enumerate() {
            probs[scene.box_perm[i]] = s;
        }
        let kept: Vec<usize> = chosen[t].iter().map(|&i| scene.box_perm[i]).collect();
        let rects: Vec<crate::geometry::Rect> =
            chosen[t].iter().map(|&i| scene.boxes[i].0).collect();
        phrases.push(PhraseGrounding {
            phrase_index: sentence_index,
            tokens: entry.tokens.clone(),
            groundable: entry.groundable,
            probs,
            chosen: kept.clone(),
            kept,
            kept_rects: rects,
        });
    }
    phrases.sort_by_key(|p| p.phrase_index);
    Ok(GroundingResult { scene_id: record.scene_id, phrases })
}

/// Picks the MSBs slack on validation scenes from a small grid.
pub fn tune_msbs_slack(
    store: &ParamStore,
    model: &GroundingModel,
    scenes: &[SceneRecord],
    source: CandidateSource,
) -> Result<f64> {
    let grid = [0.0, 0.01, 0.02, 0.05, 0.1, 0.2, 0.4];
    let mut best = (0.0, f64::NEG_INFINITY);
    for &slack in &grid {
        let results: Vec<GroundingResult> = scenes
            .iter()
            .map(|s| msb_ground(store, model, s, source, MsbMode::Multi { slack }))
            .collect::<Result<_>>()?;
        let report = crate::metrics::grounding_accuracy(&results, scenes)?;
        if report.overall > best.1 {
            best = (slack, report.overall);
        }
    }
    Ok(best.0)
}

/// One row of the suite report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SuiteRow {
    pub name: String,
    pub present: bool,
    pub overall: f64,
    pub ambiguous: Option<f64>,
    pub by_position: BTreeMap<usize, f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SuiteReport {
    pub rows: Vec<SuiteRow>,
}

impl SuiteReport {
    pub fn to_markdown(&self) -> String {
        let mut s = String::from("| config | accuracy | ambiguous subset |\n|---|---|---|\n");
        for r in &self.rows {
            if r.present {
                s.push_str(&format!(
                    "| {} | {:.4} | {} |\n",
                    r.name,
                    r.overall,
                    r.ambiguous.map_or("-".to_string(), |a| format!("{a:.4}")),
                ));
            } else {
                s.push_str(&format!("| {} | absent | - |\n", r.name));
            }
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("config,accuracy,ambiguous\n");
        for r in &self.rows {
            if r.present {
                s.push_str(&format!(
                    "{},{:.6},{}\n",
                    r.name,
                    r.overall,
                    r.ambiguous.map_or(String::new(), |a| format!("{a:.6}")),
                ));
            } else {
                s.push_str(&format!("{},absent,\n", r.name));
            }
        }
        s
    }

    pub fn positions_csv(&self) -> String {
        let mut s = String::from("config,position,accuracy\n");
        for r in &self.rows {
            for (pos, acc) in &r.by_position {
                s.push_str(&format!("{},{pos},{acc:.6}\n", r.name));
            }
        }
        s
    }

    /// Evaluate decode options per preset row and a set of decoded results.
    pub fn push_row(
        &mut self,
        name: &str,
        results: Option<(&[GroundingResult], &[SceneRecord])>,
    ) -> Result<()> {
        match results {
            None => self.rows.push(SuiteRow {
                name: name.to_string(),
                present: false,
                overall: 0.0,
                ambiguous: None,
                by_position: BTreeMap::new(),
            }),
            Some((results, scenes)) => {
                let report = crate::metrics::grounding_accuracy(results, scenes)?;
                self.rows.push(SuiteRow {
                    name: name.to_string(),
                    present: true,
                    overall: report.overall,
                    ambiguous: report.ambiguous_accuracy(),
                    by_position: report.position_accuracies(),
                });
            }
        }
        Ok(())
    }
}

/// Decode every scene with a trained model.
pub fn decode_scenes(
    store: &ParamStore,
    model: &GroundingModel,
    scenes: &[SceneRecord],
    source: CandidateSource,
    opts: &DecodeOptions,
) -> Result<Vec<GroundingResult>> {
    scenes
        .iter()
        .map(|s| crate::decision::greedy_decode(store, model, s, source, opts))
        .collect()
}
