//! Two-stage supervised training. Stage 1 feeds only annotated ground-truth
//! boxes (labels by annotation identity); stage 2 feeds detector proposals
//! labeled by IoU bands. Negatives are randomly subsampled to a 1:3
//! positive:negative ratio per batch, with every negative kept when too few
//! exist. A hard-negative pass after stage 2 promotes confident false
//! positives into the sampled pool for one fine-tuning epoch.

use crate::decision::{teacher_forced_rollout, DecodeOptions, Label};
use crate::error::{Error, Result};
use crate::geometry::iou;
use crate::model::{assemble_scene, CandidateSource, GroundingModel, SceneInput};
use crate::nn::{ParamStore, Session};
use crate::opt::Adam;
use crate::synth::SceneRecord;
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    #[serde(rename = "1")]
    One,
    #[serde(rename = "2")]
    Two,
}

impl Stage {
    pub fn candidate_source(self) -> CandidateSource {
        match self {
            Stage::One => CandidateSource::GtBoxes,
            Stage::Two => CandidateSource::Proposals,
        }
    }

    pub fn number(self) -> u8 {
        match self {
            Stage::One => 1,
            Stage::Two => 2,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub pos_iou: f64,
    pub neg_iou: f64,
    pub neg_ratio: usize,
    pub batch_scenes: usize,
    pub lr_stage1: f64,
    pub lr_stage2: f64,
    pub grad_clip: f64,
    pub epochs_stage1: usize,
    pub epochs_stage2: usize,
    pub mine_hard_negatives: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            pos_iou: 0.7,
            neg_iou: 0.3,
            neg_ratio: 3,
            batch_scenes: 10,
            lr_stage1: 1e-3,
            lr_stage2: 1e-4,
            grad_clip: 2.0,
            epochs_stage1: 10,
            epochs_stage2: 10,
            mine_hard_negatives: true,
            seed: 7,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.neg_iou && self.neg_iou < self.pos_iou && self.pos_iou <= 1.0) {
            return Err(Error::Config(format!(
                "IoU bands must satisfy 0 <= neg < pos <= 1, got neg {} pos {}",
                self.neg_iou, self.pos_iou
            )));
        }
        if self.neg_ratio < 1 {
            return Err(Error::Config(format!("neg_ratio {} < 1", self.neg_ratio)));
        }
        if self.batch_scenes < 1 {
            return Err(Error::Config("batch_scenes must be at least 1".into()));
        }
        Ok(())
    }
}

/// Per-(phrase, candidate) supervision for one scene, in record indexing.
#[derive(Debug, Clone)]
pub struct LabeledScene {
    pub labels: Vec<Vec<Label>>,
    pub source: CandidateSource,
}

/// Stage-1 labels come from annotation identity only; stage-2 labels band
/// proposals by their best IoU against the phrase's ground-truth boxes.
pub fn assign_labels(scene: &SceneRecord, stage: Stage, cfg: &TrainConfig) -> Result<LabeledScene> {
    cfg.validate()?;
    match stage {
        Stage::One => {
            let labels = scene
                .phrases
                .iter()
                .map(|p| {
                    (0..scene.gt_boxes.len())
                        .map(|i| {
                            if p.groundable && p.gt_boxes.contains(&i) {
                                Label::Positive
                            } else {
                                Label::Negative
                            }
                        })
                        .collect()
                })
                .collect();
            Ok(LabeledScene { labels, source: CandidateSource::GtBoxes })
        }
        Stage::Two => {
            if scene.gt_boxes.is_empty() {
                return Err(Error::Input(format!(
                    "scene {} has no annotations; stage 2 needs ground truth",
                    scene.scene_id
                )));
            }
            let mut labels = Vec::with_capacity(scene.phrases.len());
            for p in &scene.phrases {
                let mut row = Vec::with_capacity(scene.proposals.len());
                for prop in &scene.proposals {
                    if !p.groundable {
                        row.push(Label::Negative);
                        continue;
                    }
                    let best = p
                        .gt_boxes
                        .iter()
                        .map(|&b| iou(&prop.rect, &scene.gt_boxes[b].rect))
                        .collect::<Result<Vec<f64>>>()?
                        .into_iter()
                        .fold(0.0, f64::max);
                    row.push(if best >= cfg.pos_iou {
                        Label::Positive
                    } else if best < cfg.neg_iou {
                        Label::Negative
                    } else {
                        Label::Ignore
                    });
                }
                labels.push(row);
            }
            Ok(LabeledScene { labels, source: CandidateSource::Proposals })
        }
    }
}

/// Loss masks for one batch: all positives contribute; negatives are
/// subsampled across the batch to `neg_ratio` times the positive count.
/// When negatives are scarce (or no positive exists) they all contribute.
/// Ignore-band pairs never enter the mask.
pub fn sample_negatives(
    batch: &[&LabeledScene],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<Vec<f64>>> {
    let mut masks: Vec<Vec<Vec<f64>>> = batch
        .iter()
        .map(|s| s.labels.iter().map(|row| vec![0.0; row.len()]).collect())
        .collect();
    let mut positives = 0usize;
    let mut negatives: Vec<(usize, usize, usize)> = Vec::new();
    for (s, scene) in batch.iter().enumerate() {
        for (t, row) in scene.labels.iter().enumerate() {
            for (i, label) in row.iter().enumerate() {
                match label {
                    Label::Positive => {
                        positives += 1;
                        masks[s][t][i] = 1.0;
                    }
                    Label::Negative => negatives.push((s, t, i)),
                    Label::Ignore => {}
                }
            }
        }
    }
    let quota = cfg.neg_ratio * positives;
    if positives == 0 || negatives.len() <= quota {
        for (s, t, i) in negatives {
            masks[s][t][i] = 1.0;
        }
    } else {
        negatives.shuffle(rng);
        for &(s, t, i) in negatives.iter().take(quota) {
            masks[s][t][i] = 1.0;
        }
    }
    masks
}

/// Labels and masks reindexed into engine order (grounding-ordered phrases,
/// spatially sorted boxes), plus the gold positives per step for teacher
/// forcing.
pub struct EngineLabels {
    pub labels: Vec<f64>,
    pub mask: Vec<f64>,
    pub gold: Vec<Vec<usize>>,
    pub contributing: usize,
}

pub fn reindex_for_engine(
    scene: &SceneInput,
    labeled: &LabeledScene,
    mask: &[Vec<f64>],
) -> EngineLabels {
    let m = scene.boxes.len();
    let mut labels = Vec::with_capacity(scene.phrases.len() * m);
    let mut flat_mask = Vec::with_capacity(scene.phrases.len() * m);
    let mut gold = Vec::with_capacity(scene.phrases.len());
    let mut contributing = 0usize;
    for &pi in &scene.phrase_perm {
        let mut step_gold = Vec::new();
        for (sorted_i, &ci) in scene.box_perm.iter().enumerate() {
            let label = labeled.labels[pi][ci];
            labels.push(if label == Label::Positive { 1.0 } else { 0.0 });
            let mv = if label == Label::Ignore { 0.0 } else { mask[pi][ci] };
            if mv > 0.0 {
                contributing += 1;
            }
            flat_mask.push(mv);
            if label == Label::Positive {
                step_gold.push(sorted_i);
            }
        }
        gold.push(step_gold);
    }
    EngineLabels { labels, mask: flat_mask, gold, contributing }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochLog {
    pub stage: u8,
    pub epoch: usize,
    pub loss: f64,
    pub val_accuracy: Option<f64>,
}

pub fn logs_to_csv(logs: &[EpochLog]) -> String {
    let mut s = String::from("stage,epoch,loss,val_accuracy\n");
    for l in logs {
        s.push_str(&format!(
            "{},{},{:.8},{}\n",
            l.stage,
            l.epoch,
            l.loss,
            l.val_accuracy.map_or(String::new(), |v| format!("{v:.6}")),
        ));
    }
    s
}

/// Forward/backward over one scene; returns (summed loss, contributing
/// count) and adds gradients into `acc`.
#[allow(clippy::too_many_arguments)]
fn scene_backward(
    store: &ParamStore,
    model: &GroundingModel,
    scene: &SceneInput,
    eng: &EngineLabels,
    acc: &mut [Tensor],
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let mut sess = Session::new(store, true)?;
    let (step_logits, _) = teacher_forced_rollout(model, &mut sess, scene, &eng.gold, rng)?;
    let all_logits = sess.tape.concat_rows(&step_logits)?;
    let loss = sess.tape.bce_with_logits(all_logits, &eng.labels, &eng.mask)?;
    let loss_val = sess.tape.value(loss).data()[0];
    if !loss_val.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite training loss {loss_val} on scene {}",
            scene.scene_id
        )));
    }
    sess.tape.backward(loss)?;
    for (slot, id) in store.ids().enumerate() {
        let g = sess.tape.grad_tensor(sess.p(id));
        for (a, b) in acc[slot].data_mut().iter_mut().zip(g.data()) {
            *a += b;
        }
    }
    Ok(loss_val)
}

/// Extra always-on loss entries (mined hard negatives), per scene index.
type ExtraMask = std::collections::BTreeMap<usize, Vec<Vec<usize>>>;

#[allow(clippy::too_many_arguments)]
fn run_epoch(
    store: &mut ParamStore,
    model: &GroundingModel,
    scenes: &[SceneRecord],
    labeled: &[LabeledScene],
    cfg: &TrainConfig,
    adam: &mut Adam,
    shuffle_rng: &mut ChaCha8Rng,
    sample_rng: &mut ChaCha8Rng,
    dropout_rng: &mut ChaCha8Rng,
    source: CandidateSource,
    extra: Option<&ExtraMask>,
) -> Result<f64> {
    let mut order: Vec<usize> = (0..scenes.len()).collect();
    order.shuffle(shuffle_rng);
    let mut epoch_loss = 0.0;
    let mut epoch_count = 0usize;
    for chunk in order.chunks(cfg.batch_scenes) {
        let batch: Vec<&LabeledScene> = chunk.iter().map(|&i| &labeled[i]).collect();
        let mut masks = sample_negatives(&batch, cfg, sample_rng);
        if let Some(extra) = extra {
            for (pos, &scene_idx) in chunk.iter().enumerate() {
                if let Some(mined) = extra.get(&scene_idx) {
                    for (t, boxes) in mined.iter().enumerate() {
                        for &i in boxes {
                            if labeled[scene_idx].labels[t][i] == Label::Negative {
                                masks[pos][t][i] = 1.0;
                            }
                        }
                    }
                }
            }
        }
        let mut acc: Vec<Tensor> = store
            .iter()
            .map(|(_, t)| Tensor::zeros(t.rows(), t.cols()))
            .collect();
        let mut batch_count = 0usize;
        for (pos, &scene_idx) in chunk.iter().enumerate() {
            let scene = assemble_scene(
                &scenes[scene_idx],
                source,
                model.cfg.ablation.phrase_order,
                false,
                cfg.seed,
            )?;
            let eng = reindex_for_engine(&scene, &labeled[scene_idx], &masks[pos]);
            if eng.contributing == 0 {
                continue;
            }
            let loss = scene_backward(store, model, &scene, &eng, &mut acc, dropout_rng)?;
            epoch_loss += loss;
            batch_count += eng.contributing;
        }
        if batch_count == 0 {
            continue;
        }
        epoch_count += batch_count;
        let inv = 1.0 / batch_count as f64;
        for g in acc.iter_mut() {
            for v in g.data_mut() {
                *v *= inv;
            }
        }
        adam.step(store, &acc, Some(cfg.grad_clip))?;
    }
    Ok(if epoch_count == 0 { 0.0 } else { epoch_loss / epoch_count as f64 })
}

/// Validation accuracy via greedy decoding of `scenes`.
pub fn validation_accuracy(
    store: &ParamStore,
    model: &GroundingModel,
    scenes: &[SceneRecord],
    source: CandidateSource,
) -> Result<f64> {
    let opts = DecodeOptions::default();
    let results = crate::ablate::decode_scenes(store, model, scenes, source, &opts)?;
    Ok(crate::metrics::grounding_accuracy(&results, scenes)?.overall)
}

/// Trains one stage. Returns per-epoch logs; parameters update in place.
pub fn train_stage(
    store: &mut ParamStore,
    model: &GroundingModel,
    scenes: &[SceneRecord],
    val_scenes: Option<&[SceneRecord]>,
    stage: Stage,
    cfg: &TrainConfig,
) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    if scenes.is_empty() {
        return Err(Error::Input("training set is empty".into()));
    }
    let labeled: Vec<LabeledScene> =
        scenes.iter().map(|s| assign_labels(s, stage, cfg)).collect::<Result<_>>()?;
    let (lr, epochs) = match stage {
        Stage::One => (cfg.lr_stage1, cfg.epochs_stage1),
        Stage::Two => (cfg.lr_stage2, cfg.epochs_stage2),
    };
    let mut adam = Adam::new(store, lr);
    let tag = format!("train/stage{}", stage.number());
    let mut shuffle_rng = crate::rngs::stream(cfg.seed, &format!("{tag}/shuffle"));
    let mut sample_rng = crate::rngs::stream(cfg.seed, &format!("{tag}/sample"));
    let mut dropout_rng = crate::rngs::stream(cfg.seed, &format!("{tag}/dropout"));
    let source = stage.candidate_source();
    let mut logs = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let loss = run_epoch(
            store,
            model,
            scenes,
            &labeled,
            cfg,
            &mut adam,
            &mut shuffle_rng,
            &mut sample_rng,
            &mut dropout_rng,
            source,
            None,
        )?;
        let val_accuracy = match val_scenes {
            Some(v) => Some(validation_accuracy(store, model, v, source)?),
            None => None,
        };
        logs.push(EpochLog { stage: stage.number(), epoch, loss, val_accuracy });
    }
    Ok(logs)
}

/// One evaluation pass over the training scenes promoting confident false
/// positives. For every phrase, negatives predicted at probability 0.5 or
/// above are mined, highest probability first (ties to the lower candidate
/// index), capped at `neg_ratio` times the phrase's positive count.
pub fn hard_negative_mine(
    store: &ParamStore,
    model: &GroundingModel,
    scenes: &[SceneRecord],
    labeled: &[LabeledScene],
    cfg: &TrainConfig,
) -> Result<ExtraMask> {
    let mut mined: ExtraMask = ExtraMask::new();
    let mut rng = crate::rngs::stream(cfg.seed, "mine/eval");
    for (scene_idx, record) in scenes.iter().enumerate() {
        let scene = assemble_scene(
            record,
            labeled[scene_idx].source,
            model.cfg.ablation.phrase_order,
            false,
            cfg.seed,
        )?;
        let full_mask: Vec<Vec<f64>> =
            labeled[scene_idx].labels.iter().map(|row| vec![1.0; row.len()]).collect();
        let eng = reindex_for_engine(&scene, &labeled[scene_idx], &full_mask);
        let mut sess = Session::new(store, false)?;
        let (_, step_probs) =
            teacher_forced_rollout(model, &mut sess, &scene, &eng.gold, &mut rng)?;

        let mut per_phrase: Vec<Vec<usize>> =
            vec![Vec::new(); labeled[scene_idx].labels.len()];
        for (t, &pi) in scene.phrase_perm.iter().enumerate() {
            let n_pos = labeled[scene_idx].labels[pi]
                .iter()
                .filter(|&&l| l == Label::Positive)
                .count();
            let cap = cfg.neg_ratio * n_pos;
            if cap == 0 {
                continue;
            }
            // candidates in record indexing with their probabilities
            let mut fps: Vec<(usize, f64)> = scene
                .box_perm
                .iter()
                .enumerate()
                .filter(|(i, &ci)| {
                    labeled[scene_idx].labels[pi][ci] == Label::Negative
                        && step_probs[t][*i] >= 0.5
                })
                .map(|(i, &ci)| (ci, step_probs[t][i]))
                .collect();
            fps.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            per_phrase[pi] = fps.into_iter().take(cap).map(|(ci, _)| ci).collect();
        }
        if per_phrase.iter().any(|v| !v.is_empty()) {
            mined.insert(scene_idx, per_phrase);
        }
    }
    Ok(mined)
}

/// One fine-tuning epoch where mined hard negatives augment the random
/// negative sample.
pub fn fine_tune_with_mined(
    store: &mut ParamStore,
    model: &GroundingModel,
    scenes: &[SceneRecord],
    labeled: &[LabeledScene],
    mined: &ExtraMask,
    cfg: &TrainConfig,
) -> Result<EpochLog> {
    let mut adam = Adam::new(store, cfg.lr_stage2);
    let mut shuffle_rng = crate::rngs::stream(cfg.seed, "mine/shuffle");
    let mut sample_rng = crate::rngs::stream(cfg.seed, "mine/sample");
    let mut dropout_rng = crate::rngs::stream(cfg.seed, "mine/dropout");
    let source = labeled.first().map(|l| l.source).unwrap_or(CandidateSource::Proposals);
    let loss = run_epoch(
        store,
        model,
        scenes,
        labeled,
        cfg,
        &mut adam,
        &mut shuffle_rng,
        &mut sample_rng,
        &mut dropout_rng,
        source,
        Some(mined),
    )?;
    Ok(EpochLog { stage: 2, epoch: usize::MAX, loss, val_accuracy: None })
}

/// False-positive rate of greedy decoding on held-out scenes: fraction of
/// (groundable phrase, candidate) decisions above threshold whose candidate
/// is not part of the phrase's ground truth region (stage-1 candidates).
pub fn false_positive_rate(
    store: &ParamStore,
    model: &GroundingModel,
    scenes: &[SceneRecord],
    source: CandidateSource,
    threshold: f64,
) -> Result<f64> {
    let opts = DecodeOptions { threshold, ..DecodeOptions::default() };
    let results = crate::ablate::decode_scenes(store, model, scenes, source, &opts)?;
    let mut fp = 0usize;
    let mut decisions = 0usize;
    for (result, scene) in results.iter().zip(scenes) {
        for p in &result.phrases {
            let gt = &scene.phrases[p.phrase_index].gt_boxes;
            for &c in &p.chosen {
                decisions += 1;
                let hit = match source {
                    CandidateSource::GtBoxes => gt.contains(&c),
                    CandidateSource::Proposals => gt.iter().any(|&b| {
                        iou(&scene.proposals[c].rect, &scene.gt_boxes[b].rect).unwrap_or(0.0)
                            >= 0.5
                    }),
                };
                if !hit {
                    fp += 1;
                }
            }
        }
    }
    Ok(if decisions == 0 { 0.0 } else { fp as f64 / decisions as f64 })
}
