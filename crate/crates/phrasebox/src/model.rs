//! The grounding network: encoders feeding three recurrent stacks and a
//! sigmoid decision head. At step t the workspace state for box i is
//! psi = [h^P_t, h^B_i, h^R_{t-1}, I_enc]; the head scores every box
//! simultaneously, positive decisions push their phrase-box pairs onto the
//! history stack, and the walk continues with the next phrase.

use crate::ablate::{AblationConfig, BoxEncoder, HistoryMode, PhraseEncoderMode, PhraseOrder, VisualContext};
use crate::embed::EmbeddingTable;
use crate::encoders::{EncoderConfig, Encoders};
use crate::error::{Error, Result};
use crate::geometry::Rect;
use crate::nn::{Linear, LstmCell, ParamStore, Session, TwoLayerLstm};
use crate::stacks::{self, HistoryState, LOC_DIM};
use crate::tape::Var;
use crate::tensor::{sigmoid, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    /// Hidden widths of the decision head; the head ends in one logit.
    pub head_hidden: [usize; 2],
    /// Inter-layer dropout inside the two-layer stacks.
    pub dropout_stack: f64,
    /// Dropout on the concatenated workspace state before the head.
    pub dropout_head: f64,
    pub ablation: AblationConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: EncoderConfig::default(),
            head_hidden: [500, 500],
            dropout_stack: 0.25,
            dropout_head: 0.4,
            ablation: AblationConfig::full(),
        }
    }
}

impl ModelConfig {
    /// Desk-scale dimensions for synthetic worlds.
    pub fn desk(word_dim: usize, feat_dim: usize) -> Self {
        ModelConfig {
            encoder: EncoderConfig {
                word_dim,
                feat_dim,
                hidden: [128, 96],
                embed_dim: 64,
                ..EncoderConfig::default()
            },
            head_hidden: [64, 64],
            ..ModelConfig::default()
        }
    }

    fn box_part_dim(&self) -> usize {
        match self.ablation.box_encoder {
            BoxEncoder::BiLstm => 2 * self.encoder.embed_dim,
            BoxEncoder::Simple => self.encoder.embed_dim + LOC_DIM,
        }
    }

    /// Width of the concatenated workspace state fed to the head.
    pub fn psi_dim(&self) -> usize {
        let d = self.encoder.embed_dim;
        let mut total = d + self.box_part_dim();
        if self.ablation.history == HistoryMode::Lstm {
            total += d;
        }
        if self.ablation.visual_context == VisualContext::Global {
            total += d;
        }
        total
    }
}

/// All parameters plus the component layout for one configuration.
pub struct GroundingModel {
    pub cfg: ModelConfig,
    pub encoders: Encoders,
    phrase_lstm: Option<TwoLayerLstm>,
    box_fwd: Option<LstmCell>,
    box_bwd: Option<LstmCell>,
    hist_lstm: Option<TwoLayerLstm>,
    head: [Linear; 3],
}

impl GroundingModel {
    /// Builds the model and registers every parameter in `store`.
    pub fn new(
        store: &mut ParamStore,
        cfg: ModelConfig,
        table: EmbeddingTable,
        rng: &mut impl Rng,
    ) -> Result<GroundingModel> {
        let d = cfg.encoder.embed_dim;
        let encoders = Encoders::new(store, cfg.encoder.clone(), table, rng)?;
        let phrase_lstm = match cfg.ablation.phrase_encoder {
            PhraseEncoderMode::Lstm => {
                Some(TwoLayerLstm::new(store, "phrase_stack", d, d, cfg.dropout_stack, rng)?)
            }
            PhraseEncoderMode::Simple => None,
        };
        let (box_fwd, box_bwd) = match cfg.ablation.box_encoder {
            BoxEncoder::BiLstm => (
                Some(LstmCell::new(store, "box_stack.fwd", d + LOC_DIM, d, rng)?),
                Some(LstmCell::new(store, "box_stack.bwd", d + LOC_DIM, d, rng)?),
            ),
            BoxEncoder::Simple => (None, None),
        };
        let hist_lstm = match cfg.ablation.history {
            HistoryMode::Lstm => Some(TwoLayerLstm::new(
                store,
                "history_stack",
                2 * d + LOC_DIM,
                d,
                cfg.dropout_stack,
                rng,
            )?),
            HistoryMode::None => None,
        };
        let psi = cfg.psi_dim();
        let head = [
            Linear::new(store, "head.fc0", psi, cfg.head_hidden[0], rng)?,
            Linear::new(store, "head.fc1", cfg.head_hidden[0], cfg.head_hidden[1], rng)?,
            Linear::new(store, "head.fc2", cfg.head_hidden[1], 1, rng)?,
        ];
        Ok(GroundingModel { cfg, encoders, phrase_lstm, box_fwd, box_bwd, hist_lstm, head })
    }

    pub fn save(&self, store: &ParamStore, path_base: &Path) -> Result<()> {
        crate::checkpoint::save(store, &path_base.with_extension("ckpt"))?;
        let meta = ModelMeta {
            config: self.cfg.clone(),
            tokens: self.encoders.vocab.tokens().to_vec(),
        };
        let f = std::fs::File::create(path_base.with_extension("model.json"))?;
        serde_json::to_writer_pretty(f, &meta)?;
        Ok(())
    }

    /// Rebuilds a model (and its parameter store) from `save` output.
    pub fn load(path_base: &Path) -> Result<(ParamStore, GroundingModel)> {
        let meta: ModelMeta = serde_json::from_reader(std::fs::File::open(
            path_base.with_extension("model.json"),
        )?)?;
        let mut rng = crate::rngs::stream(0, "model/load-init");
        let table =
            EmbeddingTable::random(meta.tokens.clone(), meta.config.encoder.word_dim, &mut rng)?;
        let mut store = ParamStore::new();
        let model = GroundingModel::new(&mut store, meta.config, table, &mut rng)?;
        crate::checkpoint::load_into(&mut store, &path_base.with_extension("ckpt"))?;
        Ok((store, model))
    }
}

#[derive(Serialize, Deserialize)]
struct ModelMeta {
    config: ModelConfig,
    tokens: Vec<String>,
}

/// Which boxes a scene offers as grounding candidates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidateSource {
    /// Stage-1 style: the annotated ground-truth boxes.
    GtBoxes,
    /// Stage-2/test style: detector proposals.
    Proposals,
}

#[derive(Debug, Clone)]
pub struct PhraseInput {
    pub tokens: Vec<String>,
    pub groundable: bool,
}

/// A scene rearranged for the engine: boxes in spatial order, phrases in
/// grounding order, with permutations back to the record's indexing.
#[derive(Debug, Clone)]
pub struct SceneInput {
    pub scene_id: u64,
    pub width: f64,
    pub height: f64,
    pub image_feature: Vec<f64>,
    /// (rect, feature) sorted left-to-right by center.
    pub boxes: Vec<(Rect, Vec<f64>)>,
    /// box_perm[sorted_pos] = candidate index in the record.
    pub box_perm: Vec<usize>,
    /// Phrases in the order they will be grounded.
    pub phrases: Vec<PhraseInput>,
    /// phrase_perm[step] = phrase index in the record's sentence.
    pub phrase_perm: Vec<usize>,
}

/// Rearranges a record for decoding/training. `guided` drops non-groundable
/// phrases before ordering; unguided keeps the whole sentence. The random
/// order is fixed per scene under `order_seed`, so training and test time
/// see the same permutation.
pub fn assemble_scene(
    record: &crate::synth::SceneRecord,
    source: CandidateSource,
    order: PhraseOrder,
    guided: bool,
    order_seed: u64,
) -> Result<SceneInput> {
    let candidates: Vec<(Rect, Vec<f64>)> = match source {
        CandidateSource::GtBoxes => {
            record.gt_boxes.iter().map(|b| (b.rect, b.feature.clone())).collect()
        }
        CandidateSource::Proposals => {
            record.proposals.iter().map(|p| (p.rect, p.feature.clone())).collect()
        }
    };
    if candidates.is_empty() {
        return Err(Error::Input(format!("scene {} has no candidate boxes", record.scene_id)));
    }
    let rects: Vec<Rect> = candidates.iter().map(|(r, _)| *r).collect();
    let box_perm = stacks::spatial_order(&rects);
    let boxes: Vec<(Rect, Vec<f64>)> =
        box_perm.iter().map(|&i| candidates[i].clone()).collect();

    let mut phrase_perm: Vec<usize> = record
        .phrases
        .iter()
        .enumerate()
        .filter(|(_, p)| !guided || p.groundable)
        .map(|(i, _)| i)
        .collect();
    if phrase_perm.is_empty() {
        return Err(Error::Input(format!("scene {} has no phrases to ground", record.scene_id)));
    }
    match order {
        PhraseOrder::L2r => {}
        PhraseOrder::R2l => phrase_perm.reverse(),
        PhraseOrder::Random => {
            let mut rng = crate::rngs::scene_stream(order_seed, "phrase-order", record.scene_id);
            phrase_perm.shuffle(&mut rng);
        }
    }
    let phrases = phrase_perm
        .iter()
        .map(|&i| PhraseInput {
            tokens: record.phrases[i].tokens.clone(),
            groundable: record.phrases[i].groundable,
        })
        .collect();
    Ok(SceneInput {
        scene_id: record.scene_id,
        width: record.width,
        height: record.height,
        image_feature: record.image_feature.clone(),
        boxes,
        box_perm,
        phrases,
        phrase_perm,
    })
}

/// Per-scene forward state: encoded inputs, stack outputs, and the evolving
/// history. Box-stack states are computed once and stay immutable.
pub struct Workspace {
    pub phrase_states: Vec<Var>,
    pub encoded_phrases: Vec<Var>,
    pub encoded_boxes: Vec<Var>,
    /// Box part of psi, one row per box (M x box_part_dim).
    pub box_matrix: Var,
    pub image_enc: Option<Var>,
    pub history: HistoryState,
    pub rects: Vec<Rect>,
    pub width: f64,
    pub height: f64,
}

impl GroundingModel {
    pub fn build_workspace(
        &self,
        sess: &mut Session,
        scene: &SceneInput,
        rng: &mut impl Rng,
    ) -> Result<Workspace> {
        let m = scene.boxes.len();
        let d_v = self.cfg.encoder.feat_dim;
        // encode all boxes in one batch
        let feats = Tensor::matrix(
            m,
            d_v,
            scene.boxes.iter().flat_map(|(_, f)| f.iter().copied()).collect(),
        )?;
        let b_enc = self.encoders.encode_visual_rows(sess, &feats, rng)?;
        let encoded_boxes: Vec<Var> = (0..m).map(|i| sess.tape.row(b_enc, i)).collect::<Result<_>>()?;

        // location features and per-box stack inputs
        let rects: Vec<Rect> = scene.boxes.iter().map(|(r, _)| *r).collect();
        let mut box_inputs = Vec::with_capacity(m);
        for (i, rect) in rects.iter().enumerate() {
            let loc = sess.tape.leaf(Tensor::row(
                stacks::loc_features(rect, scene.width, scene.height).to_vec(),
            ))?;
            box_inputs.push(sess.tape.concat_cols(&[encoded_boxes[i], loc])?);
        }
        let box_states = match self.cfg.ablation.box_encoder {
            BoxEncoder::BiLstm => stacks::build_box_stack(
                sess,
                self.box_fwd.as_ref().unwrap(),
                self.box_bwd.as_ref().unwrap(),
                &box_inputs,
                &rects,
            )?,
            BoxEncoder::Simple => box_inputs,
        };
        let box_matrix = sess.tape.concat_rows(&box_states)?;

        // encode phrases and build the phrase stack
        let token_lists: Vec<Vec<String>> =
            scene.phrases.iter().map(|p| p.tokens.clone()).collect();
        let p_enc = self.encoders.encode_phrases(sess, &token_lists, rng)?;
        let encoded_phrases: Vec<Var> =
            (0..scene.phrases.len()).map(|t| sess.tape.row(p_enc, t)).collect::<Result<_>>()?;
        let phrase_states = match self.cfg.ablation.phrase_encoder {
            PhraseEncoderMode::Lstm => stacks::build_phrase_stack(
                sess,
                self.phrase_lstm.as_ref().unwrap(),
                &encoded_phrases,
                rng,
            )?,
            PhraseEncoderMode::Simple => encoded_phrases.clone(),
        };

        let image_enc = match self.cfg.ablation.visual_context {
            VisualContext::Global => {
                Some(self.encoders.encode_image(sess, &scene.image_feature, rng)?)
            }
            VisualContext::None => None,
        };

        Ok(Workspace {
            phrase_states,
            encoded_phrases,
            encoded_boxes,
            box_matrix,
            image_enc,
            history: HistoryState::new(),
            rects,
            width: scene.width,
            height: scene.height,
        })
    }

    /// Simultaneous grounding decisions for phrase `t` against every box.
    /// Returns the M x 1 logits on the tape plus the sigmoid probabilities.
    pub fn decide_step(
        &self,
        sess: &mut Session,
        ws: &mut Workspace,
        t: usize,
        rng: &mut impl Rng,
    ) -> Result<(Var, Vec<f64>)> {
        if t >= ws.phrase_states.len() {
            return Err(Error::Input(format!(
                "step {t} out of range for {} phrases",
                ws.phrase_states.len()
            )));
        }
        let m = ws.rects.len();
        let mut parts: Vec<Var> = Vec::with_capacity(4);
        parts.push(sess.tape.broadcast_row(ws.phrase_states[t], m)?);
        parts.push(ws.box_matrix);
        if let Some(lstm) = &self.hist_lstm {
            let hr = ws.history.output(sess, lstm);
            parts.push(sess.tape.broadcast_row(hr, m)?);
        }
        if let Some(img) = ws.image_enc {
            parts.push(sess.tape.broadcast_row(img, m)?);
        }
        let psi = sess.tape.concat_cols(&parts)?;
        let mut h = sess.dropout(psi, self.cfg.dropout_head, rng)?;
        for layer in &self.head[..2] {
            let z = layer.apply(sess, h)?;
            h = sess.tape.relu(z)?;
        }
        let logits = self.head[2].apply(sess, h)?;
        let probs: Vec<f64> = sess.tape.value(logits).data().iter().map(|&z| sigmoid(z)).collect();
        Ok((logits, probs))
    }

    /// Pushes the grounded pairs of step `t` onto the history stack in
    /// spatial order. `boxes_sorted` are sorted-box indices.
    pub fn push_step_history(
        &self,
        sess: &mut Session,
        ws: &mut Workspace,
        t: usize,
        boxes_sorted: &[usize],
        rng: &mut impl Rng,
    ) -> Result<()> {
        let Some(lstm) = &self.hist_lstm else { return Ok(()) };
        if boxes_sorted.is_empty() {
            return Ok(());
        }
        let mut ordered: Vec<usize> = boxes_sorted.to_vec();
        ordered.sort_unstable(); // sorted-box index order is spatial order
        let mut entries = Vec::with_capacity(ordered.len());
        for &i in &ordered {
            entries.push(stacks::history_entry(
                sess,
                ws.encoded_phrases[t],
                ws.encoded_boxes[i],
                &ws.rects[i],
                ws.width,
                ws.height,
            )?);
        }
        ws.history.push(sess, lstm, &entries, rng)
    }
}
