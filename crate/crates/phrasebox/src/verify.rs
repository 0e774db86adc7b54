//! End-to-end gradient verification on a toy scene: the full grounding
//! loss (through the encoders, all three stacks, and the decision head) and
//! the pretraining ranking loss, both checked against central finite
//! differences in f64 with dropout off.
//!
//! Finite differences are only meaningful at a differentiable point, so the
//! toy setup shifts every dense-layer weight to its magnitude and every
//! dense bias to a positive constant. With non-negative inputs all ReLU
//! pre-activations stay strictly positive and no max(0, .) sits on its kink.

use crate::ablate::{AblationConfig, PhraseOrder};
use crate::decision::teacher_forced_rollout;
use crate::embed::EmbeddingTable;
use crate::encoders::EncoderConfig;
use crate::error::Result;
use crate::geometry::Rect;
use crate::gradcheck::{grad_check, GradCheckReport};
use crate::model::{assemble_scene, CandidateSource, GroundingModel, ModelConfig};
use crate::nn::{ParamStore, Session};
use crate::order_embed::{ranking_loss, PairSample};
use crate::synth::{GtBox, PhraseEntry, SceneRecord};
use crate::tensor::Tensor;
use crate::trainer::{assign_labels, reindex_for_engine, Stage, TrainConfig};

pub struct ToyRig {
    pub store: ParamStore,
    pub model: GroundingModel,
    pub scene: SceneRecord,
    pub pairs: Vec<PairSample>,
}

fn toy_tokens() -> Vec<String> {
    ["a0", "a1", "c00", "c01", "near", "the"].iter().map(|s| s.to_string()).collect()
}

/// Two groundable phrases (one of them plural, so the history stack sees a
/// two-entry push) plus a filler, over three boxes.
fn toy_scene(feat_dim: usize) -> SceneRecord {
    let feat = |seed: usize| -> Vec<f64> {
        (0..feat_dim).map(|i| 0.15 + 0.08 * ((seed * 7 + i * 3) % 9) as f64 / 9.0).collect()
    };
    SceneRecord {
        scene_id: 0,
        width: 100.0,
        height: 100.0,
        image_feature: feat(5),
        gt_boxes: vec![
            GtBox {
                rect: Rect::new(5.0, 10.0, 30.0, 40.0).unwrap(),
                concept: "c00".into(),
                category: "cat0".into(),
                feature: feat(0),
            },
            GtBox {
                rect: Rect::new(35.0, 15.0, 60.0, 45.0).unwrap(),
                concept: "c00".into(),
                category: "cat0".into(),
                feature: feat(1),
            },
            GtBox {
                rect: Rect::new(65.0, 20.0, 90.0, 55.0).unwrap(),
                concept: "c01".into(),
                category: "cat1".into(),
                feature: feat(2),
            },
        ],
        proposals: vec![],
        phrases: vec![
            PhraseEntry {
                tokens: vec!["two".into(), "a0".into(), "c00".into()],
                groundable: true,
                gt_boxes: vec![0, 1],
            },
            PhraseEntry { tokens: vec!["the".into()], groundable: false, gt_boxes: vec![] },
            PhraseEntry {
                tokens: vec!["a1".into(), "c01".into()],
                groundable: true,
                gt_boxes: vec![2],
            },
        ],
    }
}

/// Move every dense weight to |w| * 0.5 and every dense bias to 0.2 so the
/// loss is differentiable at the evaluation point.
fn make_point_generic(store: &mut ParamStore) {
    for id in store.ids().collect::<Vec<_>>() {
        let name = store.name(id).to_string();
        if name.ends_with(".bias") {
            for v in store.get_mut(id).data_mut() {
                *v = 0.2;
            }
        } else if name.ends_with(".weight") || name == "embedding.table" {
            for v in store.get_mut(id).data_mut() {
                *v = v.abs() * 0.5;
            }
        }
    }
}

pub fn build_toy_rig(seed: u64) -> Result<ToyRig> {
    let mut rng = crate::rngs::stream(seed, "verify/init");
    let word_dim = 6;
    let feat_dim = 8;
    let mut token_rng = crate::rngs::stream(seed, "verify/tokens");
    let table = EmbeddingTable::random(toy_tokens(), word_dim, &mut token_rng)?;
    let cfg = ModelConfig {
        encoder: EncoderConfig {
            word_dim,
            feat_dim,
            hidden: [10, 8],
            embed_dim: 8,
            dropout: 0.0,
            ..EncoderConfig::default()
        },
        head_hidden: [8, 8],
        dropout_stack: 0.0,
        dropout_head: 0.0,
        ablation: AblationConfig::full(),
    };
    let mut store = ParamStore::new();
    let model = GroundingModel::new(&mut store, cfg, table, &mut rng)?;
    make_point_generic(&mut store);
    let scene = toy_scene(feat_dim);
    let pairs = vec![
        PairSample { tokens: vec!["two".into(), "a0".into(), "c00".into()], feature: scene.gt_boxes[0].feature.clone() },
        PairSample { tokens: vec!["a1".into(), "c01".into()], feature: scene.gt_boxes[2].feature.clone() },
        PairSample { tokens: vec!["a0".into(), "c00".into()], feature: scene.gt_boxes[1].feature.clone() },
    ];
    Ok(ToyRig { store, model, scene, pairs })
}

/// Full grounding loss (teacher-forced BCE over all decisions) against
/// finite differences for every parameter.
pub fn grounding_grad_check(rig: &mut ToyRig, eps: f64, tol: f64) -> Result<GradCheckReport> {
    let cfg = TrainConfig::default();
    let labeled = assign_labels(&rig.scene, Stage::One, &cfg)?;
    let scene = assemble_scene(
        &rig.scene,
        CandidateSource::GtBoxes,
        PhraseOrder::R2l,
        false,
        0,
    )?;
    let full_mask: Vec<Vec<f64>> =
        labeled.labels.iter().map(|row| vec![1.0; row.len()]).collect();
    let eng = reindex_for_engine(&scene, &labeled, &full_mask);
    let model = &rig.model;
    let ids: Vec<_> = rig.store.ids().collect();
    grad_check(
        &mut rig.store,
        &ids,
        |store, want| {
            let mut sess = Session::new(store, false)?;
            let mut rng = crate::rngs::stream(0, "verify/fwd");
            let (step_logits, _) =
                teacher_forced_rollout(model, &mut sess, &scene, &eng.gold, &mut rng)?;
            let all = sess.tape.concat_rows(&step_logits)?;
            let loss = sess.tape.bce_with_logits(all, &eng.labels, &eng.mask)?;
            let val = sess.tape.value(loss).data()[0];
            if want {
                sess.tape.backward(loss)?;
                Ok((val, sess.grads(store)))
            } else {
                Ok((val, vec![]))
            }
        },
        eps,
        tol,
    )
}

/// Pretraining ranking loss against finite differences for every parameter
/// it reaches (encoders plus the embedding table).
pub fn pretrain_grad_check(rig: &mut ToyRig, eps: f64, tol: f64) -> Result<GradCheckReport> {
    let model = &rig.model;
    let pairs = rig.pairs.clone();
    let ids: Vec<_> = rig.store.ids().collect();
    grad_check(
        &mut rig.store,
        &ids,
        |store, want| {
            let mut sess = Session::new(store, false)?;
            let mut rng = crate::rngs::stream(0, "verify/pre");
            let phrases: Vec<Vec<String>> = pairs.iter().map(|p| p.tokens.clone()).collect();
            let feats = Tensor::matrix(
                pairs.len(),
                pairs[0].feature.len(),
                pairs.iter().flat_map(|p| p.feature.iter().copied()).collect(),
            )?;
            let p = model.encoders.encode_phrases(&mut sess, &phrases, &mut rng)?;
            let b = model.encoders.encode_visual_rows(&mut sess, &feats, &mut rng)?;
            let loss = ranking_loss(&mut sess, p, b, 0.05)?;
            let val = sess.tape.value(loss).data()[0];
            if want {
                sess.tape.backward(loss)?;
                Ok((val, sess.grads(store)))
            } else {
                Ok((val, vec![]))
            }
        },
        eps,
        tol,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_grounding_loss_passes_grad_check() {
        let mut rig = build_toy_rig(3).unwrap();
        let report = grounding_grad_check(&mut rig, 1e-5, 1e-4).unwrap();
        assert!(
            report.passed(),
            "max rel err {} at {:?} over {} coords",
            report.max_rel_err,
            report.worst,
            report.coords_checked
        );
    }

    #[test]
    fn toy_pretrain_loss_passes_grad_check() {
        let mut rig = build_toy_rig(4).unwrap();
        let report = pretrain_grad_check(&mut rig, 1e-5, 1e-4).unwrap();
        assert!(
            report.passed(),
            "max rel err {} at {:?}",
            report.max_rel_err,
            report.worst
        );
    }
}
