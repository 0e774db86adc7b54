//! Deterministic generator of feature-level grounding worlds with known
//! ground truth, plus the JSON-lines dataset interchange format.
//!
//! A world has a small concept vocabulary; each object in a scene is a
//! concept instance with an attribute, a box, and a visual feature derived
//! from a fixed random linear map of the concept embedding plus noise.
//! Sentences mention a subset of objects, with filler phrases interleaved.
//! Two generator features force context to matter:
//!
//! - plural phrases ("two a3 c07") ground to both boxes of a duplicated
//!   concept;
//! - ambiguous phrases ("a1 c02 near c05") contain two same-concept
//!   candidates where the correct one is the candidate whose horizontal
//!   distance to the named anchor concept falls in the stated band
//!   ("near"/"far"). The anchor is always the lexically next groundable
//!   phrase, so a model grounding in reverse order has just grounded it.

use crate::embed::EmbeddingTable;
use crate::error::{Error, Result};
use crate::geometry::Rect;
use crate::order_embed::PairSample;
use crate::rngs;
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

pub const FILLER_TOKENS: [&str; 5] = ["the", "of", "on", "with", "and"];
pub const PLURAL_TOKEN: &str = "two";
pub const NEAR_TOKEN: &str = "near";
pub const FAR_TOKEN: &str = "far";

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct WorldSpec {
    pub n_concepts: usize,
    pub n_attributes: usize,
    pub n_categories: usize,
    /// Token embedding dimension d_w.
    pub word_dim: usize,
    /// Visual feature dimension d_v.
    pub feat_dim: usize,
    /// Min/max objects (ground-truth boxes) per scene.
    pub objects_per_scene: [usize; 2],
    /// Min/max groundable phrases per sentence.
    pub phrases_per_sentence: [usize; 2],
    /// Fraction of scenes with a duplicate-concept pair resolvable only via
    /// the spatial-relation token.
    pub ambiguity_rate: f64,
    /// Fraction of scenes with a plural phrase grounded to two boxes.
    pub plural_rate: f64,
    pub feature_noise: f64,
    pub image_noise: f64,
    /// Weight of the attribute embedding inside an object's feature.
    pub attr_mix: f64,
    pub proposals_per_gt: usize,
    pub background_proposals: usize,
    /// Fraction of jittered proposals with IoU >= 0.7 against their source.
    pub high_iou_fraction: f64,
    /// Horizontal center distance band (fraction of width) meaning "near".
    pub near_band: [f64; 2],
    /// Band meaning "far".
    pub far_band: [f64; 2],
    pub image_width: f64,
    pub image_height: f64,
    pub scenes_train: usize,
    pub scenes_val: usize,
    pub scenes_test: usize,
    pub seed: u64,
}

impl Default for WorldSpec {
    fn default() -> Self {
        WorldSpec {
            n_concepts: 24,
            n_attributes: 6,
            n_categories: 4,
            word_dim: 32,
            feat_dim: 64,
            objects_per_scene: [4, 7],
            phrases_per_sentence: [2, 4],
            ambiguity_rate: 0.0,
            plural_rate: 0.1,
            feature_noise: 0.05,
            image_noise: 0.05,
            attr_mix: 0.25,
            proposals_per_gt: 3,
            background_proposals: 2,
            high_iou_fraction: 0.5,
            near_band: [0.05, 0.18],
            far_band: [0.32, 0.50],
            image_width: 640.0,
            image_height: 480.0,
            scenes_train: 600,
            scenes_val: 100,
            scenes_test: 300,
            seed: 7,
        }
    }
}

impl WorldSpec {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.word_dim < 2 || self.feat_dim < 2 {
            return err(format!("dims must be >= 2, got d_w={} d_v={}", self.word_dim, self.feat_dim));
        }
        if !(0.0..=1.0).contains(&self.ambiguity_rate) || !(0.0..=1.0).contains(&self.plural_rate) {
            return err("ambiguity_rate and plural_rate must lie in [0,1]".into());
        }
        if self.objects_per_scene[0] < 1 || self.objects_per_scene[0] > self.objects_per_scene[1] {
            return err(format!("bad objects_per_scene {:?}", self.objects_per_scene));
        }
        if self.ambiguity_rate > 0.0 && self.objects_per_scene[1] < 3 {
            return err(format!(
                "ambiguity needs at least 3 objects per scene, max is {}",
                self.objects_per_scene[1]
            ));
        }
        if self.plural_rate > 0.0 && self.objects_per_scene[1] < 2 {
            return err("plural phrases need at least 2 objects per scene".into());
        }
        if self.phrases_per_sentence[0] < 1
            || self.phrases_per_sentence[0] > self.phrases_per_sentence[1]
        {
            return err(format!("bad phrases_per_sentence {:?}", self.phrases_per_sentence));
        }
        if self.n_concepts < self.objects_per_scene[1] + 2 {
            return err(format!(
                "n_concepts {} too small for up to {} objects",
                self.n_concepts, self.objects_per_scene[1]
            ));
        }
        if self.n_attributes < 1 || self.n_categories < 1 {
            return err("need at least one attribute and one category".into());
        }
        if !(0.0 < self.near_band[0]
            && self.near_band[0] < self.near_band[1]
            && self.near_band[1] < self.far_band[0]
            && self.far_band[0] < self.far_band[1]
            && self.far_band[1] <= 0.5)
        {
            return err(format!("bands must satisfy 0 < near < far <= 0.5, got {:?} {:?}", self.near_band, self.far_band));
        }
        if self.far_band[0] > 0.44 {
            return err("far_band must start at or below 0.44 so placements fit the image".into());
        }
        if !(0.0..=1.0).contains(&self.high_iou_fraction) {
            return err("high_iou_fraction must lie in [0,1]".into());
        }
        if self.image_width <= 0.0 || self.image_height <= 0.0 {
            return err("image dimensions must be positive".into());
        }
        Ok(())
    }

    pub fn concept_token(i: usize) -> String {
        format!("c{i:02}")
    }

    pub fn attr_token(i: usize) -> String {
        format!("a{i}")
    }

    pub fn category_of(&self, concept: usize) -> String {
        format!("cat{}", concept % self.n_categories)
    }

    /// All tokens of the world vocabulary.
    pub fn tokens(&self) -> Vec<String> {
        let mut v: Vec<String> = (0..self.n_concepts).map(WorldSpec::concept_token).collect();
        v.extend((0..self.n_attributes).map(WorldSpec::attr_token));
        v.push(PLURAL_TOKEN.to_string());
        v.push(NEAR_TOKEN.to_string());
        v.push(FAR_TOKEN.to_string());
        v.extend(FILLER_TOKENS.iter().map(|s| s.to_string()));
        v
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GtBox {
    pub rect: Rect,
    pub concept: String,
    pub category: String,
    pub feature: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Proposal {
    pub rect: Rect,
    pub feature: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhraseEntry {
    pub tokens: Vec<String>,
    pub groundable: bool,
    /// Indices into `gt_boxes`; a phrase may have several boxes and a box may
    /// serve several phrases.
    pub gt_boxes: Vec<usize>,
}

/// One image-sentence record. Proposals are laid out jittered-first (for
/// each ground-truth box, `proposals_per_gt` of them) followed by the
/// background proposals.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneRecord {
    pub scene_id: u64,
    pub width: f64,
    pub height: f64,
    pub image_feature: Vec<f64>,
    pub gt_boxes: Vec<GtBox>,
    pub proposals: Vec<Proposal>,
    pub phrases: Vec<PhraseEntry>,
}

impl SceneRecord {
    pub fn validate(&self, feat_dim: Option<usize>) -> Result<()> {
        let d = feat_dim.unwrap_or(self.image_feature.len());
        if self.image_feature.len() != d {
            return Err(Error::Input(format!(
                "scene {}: image feature dim {} != {d}",
                self.scene_id,
                self.image_feature.len()
            )));
        }
        for b in &self.gt_boxes {
            b.rect.validate()?;
            if b.feature.len() != d {
                return Err(Error::Input(format!(
                    "scene {}: gt feature dim {} != {d}",
                    self.scene_id,
                    b.feature.len()
                )));
            }
        }
        for p in &self.proposals {
            p.rect.validate()?;
            if p.feature.len() != d {
                return Err(Error::Input(format!(
                    "scene {}: proposal feature dim {} != {d}",
                    self.scene_id,
                    p.feature.len()
                )));
            }
        }
        for (i, ph) in self.phrases.iter().enumerate() {
            if ph.tokens.is_empty() {
                return Err(Error::Input(format!("scene {}: phrase {i} has no tokens", self.scene_id)));
            }
            if ph.groundable && ph.gt_boxes.is_empty() {
                return Err(Error::Input(format!(
                    "scene {}: groundable phrase {i} has no ground-truth boxes",
                    self.scene_id
                )));
            }
            if let Some(&bad) = ph.gt_boxes.iter().find(|&&b| b >= self.gt_boxes.len()) {
                return Err(Error::Input(format!(
                    "scene {}: phrase {i} references box {bad} of {}",
                    self.scene_id,
                    self.gt_boxes.len()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub spec: WorldSpec,
    pub embeddings: EmbeddingTable,
    pub train: Vec<SceneRecord>,
    pub val: Vec<SceneRecord>,
    pub test: Vec<SceneRecord>,
}

/// Standard normal draw (Box-Muller), kept local so streams stay portable.
fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(1e-12..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// The fixed random linear map from word space to feature space.
pub fn feature_map(spec: &WorldSpec) -> Tensor {
    let mut rng = rngs::stream(spec.seed, "world/featmap");
    let scale = 1.0 / (spec.word_dim as f64).sqrt();
    let data = (0..spec.feat_dim * spec.word_dim)
        .map(|_| rng.gen_range(-1.0..=1.0) * scale)
        .collect();
    Tensor::matrix(spec.feat_dim, spec.word_dim, data).unwrap()
}

/// Noise-free visual prototype of (concept, attribute).
pub fn prototype(
    spec: &WorldSpec,
    table: &EmbeddingTable,
    map: &Tensor,
    concept: usize,
    attr: usize,
) -> Vec<f64> {
    let e_c = embedding_row(table, &WorldSpec::concept_token(concept));
    let e_a = embedding_row(table, &WorldSpec::attr_token(attr));
    let mixed: Vec<f64> =
        e_c.iter().zip(&e_a).map(|(c, a)| c + spec.attr_mix * a).collect();
    let mut out = vec![0.0; spec.feat_dim];
    for (r, o) in out.iter_mut().enumerate() {
        let row = &map.data()[r * spec.word_dim..(r + 1) * spec.word_dim];
        *o = row.iter().zip(&mixed).map(|(m, x)| m * x).sum();
    }
    let norm = out.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    out.iter_mut().for_each(|v| *v /= norm);
    out
}

fn embedding_row(table: &EmbeddingTable, token: &str) -> Vec<f64> {
    let i = table.vocab.lookup(token);
    let d = table.dim();
    table.vectors.data()[i * d..(i + 1) * d].to_vec()
}

struct ObjectDraft {
    concept: usize,
    attr: usize,
    rect: Rect,
}

/// Role of an object when the sentence is assembled.
#[derive(PartialEq, Clone, Copy)]
enum Role {
    DupNear,
    DupFar,
    Anchor,
    Plural,
    Single,
}

pub fn generate(spec: &WorldSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut emb_rng = rngs::stream(spec.seed, "world/embeddings");
    let embeddings = EmbeddingTable::random(spec.tokens(), spec.word_dim, &mut emb_rng)?;
    let map = feature_map(spec);

    let mut next_id = 0u64;
    let mut gen_split = |count: usize| -> Result<Vec<SceneRecord>> {
        let mut scenes = Vec::with_capacity(count);
        for _ in 0..count {
            let scene = generate_scene(spec, &embeddings, &map, next_id)?;
            scene.validate(Some(spec.feat_dim))?;
            check_ambiguous_solvable(spec, &scene)?;
            scenes.push(scene);
            next_id += 1;
        }
        Ok(scenes)
    };
    let train = gen_split(spec.scenes_train)?;
    let val = gen_split(spec.scenes_val)?;
    let test = gen_split(spec.scenes_test)?;
    Ok(Dataset { spec: spec.clone(), embeddings, train, val, test })
}

fn place_rect(spec: &WorldSpec, rng: &mut ChaCha8Rng, cx_frac: f64) -> Rect {
    let w = rng.gen_range(0.10..0.22) * spec.image_width;
    let h = rng.gen_range(0.10..0.22) * spec.image_height;
    let cy = rng.gen_range(0.15..0.85) * spec.image_height;
    let cx = cx_frac * spec.image_width;
    Rect {
        x1: (cx - w / 2.0).max(0.0),
        y1: (cy - h / 2.0).max(0.0),
        x2: (cx + w / 2.0).min(spec.image_width),
        y2: (cy + h / 2.0).min(spec.image_height),
    }
}

fn generate_scene(
    spec: &WorldSpec,
    table: &EmbeddingTable,
    map: &Tensor,
    scene_id: u64,
) -> Result<SceneRecord> {
    let mut rng = rngs::scene_stream(spec.seed, "scene", scene_id);
    let ambiguous = rng.gen::<f64>() < spec.ambiguity_rate;
    let mut plural = rng.gen::<f64>() < spec.plural_rate;

    let needed = if ambiguous { 3 } else { 0 } + if plural { 2 } else { 0 };
    if needed > spec.objects_per_scene[1] {
        // capacity guard: the ambiguous pair wins, plural is dropped
        plural = false;
    }
    let needed = if ambiguous { 3 } else { 0 } + if plural { 2 } else { 0 };
    let lo = spec.objects_per_scene[0].max(needed.max(1));
    let hi = spec.objects_per_scene[1];
    let n_obj = if lo >= hi { hi } else { rng.gen_range(lo..=hi) };

    let mut concepts: Vec<usize> = (0..spec.n_concepts).collect();
    concepts.shuffle(&mut rng);
    let mut concept_iter = concepts.into_iter();

    let mut objects: Vec<ObjectDraft> = Vec::with_capacity(n_obj);
    let mut roles: Vec<Role> = Vec::with_capacity(n_obj);
    let mut rel_is_near = false;

    if ambiguous {
        let dup_concept = concept_iter.next().unwrap();
        let anchor_concept = concept_iter.next().unwrap();
        let dup_attr = rng.gen_range(0..spec.n_attributes);
        let anchor_attr = rng.gen_range(0..spec.n_attributes);
        let cx_a: f64 = rng.gen_range(0.30..0.70);
        let near_dist = rng.gen_range(spec.near_band[0]..spec.near_band[1]);
        let near_side = if rng.gen::<bool>() { 1.0 } else { -1.0 };
        let room_right = 0.95 - cx_a;
        let room_left = cx_a - 0.05;
        let far_side = if room_right >= room_left { 1.0 } else { -1.0 };
        let far_room = room_right.max(room_left);
        let far_hi = spec.far_band[1].min(far_room);
        let far_dist = rng.gen_range(spec.far_band[0]..far_hi.max(spec.far_band[0] + 1e-6));
        rel_is_near = rng.gen::<bool>();

        objects.push(ObjectDraft {
            concept: dup_concept,
            attr: dup_attr,
            rect: place_rect(spec, &mut rng, cx_a + near_side * near_dist),
        });
        roles.push(Role::DupNear);
        objects.push(ObjectDraft {
            concept: dup_concept,
            attr: dup_attr,
            rect: place_rect(spec, &mut rng, cx_a + far_side * far_dist),
        });
        roles.push(Role::DupFar);
        objects.push(ObjectDraft {
            concept: anchor_concept,
            attr: anchor_attr,
            rect: place_rect(spec, &mut rng, cx_a),
        });
        roles.push(Role::Anchor);
    }
    if plural {
        let c = concept_iter.next().unwrap();
        let a = rng.gen_range(0..spec.n_attributes);
        for _ in 0..2 {
            let cx = rng.gen_range(0.05..0.95);
            objects.push(ObjectDraft {
                concept: c,
                attr: a,
                rect: place_rect(spec, &mut rng, cx),
            });
            roles.push(Role::Plural);
        }
    }
    while objects.len() < n_obj {
        let c = concept_iter.next().unwrap();
        let cx = rng.gen_range(0.05..0.95);
        objects.push(ObjectDraft {
            concept: c,
            attr: rng.gen_range(0..spec.n_attributes),
            rect: place_rect(spec, &mut rng, cx),
        });
        roles.push(Role::Single);
    }

    // features
    let gt_boxes: Vec<GtBox> = objects
        .iter()
        .map(|o| {
            let proto = prototype(spec, table, map, o.concept, o.attr);
            let feature: Vec<f64> =
                proto.iter().map(|v| v + spec.feature_noise * gauss(&mut rng)).collect();
            GtBox {
                rect: o.rect,
                concept: WorldSpec::concept_token(o.concept),
                category: spec.category_of(o.concept),
                feature,
            }
        })
        .collect();

    let d = spec.feat_dim;
    let mut image_feature = vec![0.0; d];
    for b in &gt_boxes {
        for (s, v) in image_feature.iter_mut().zip(&b.feature) {
            *s += v;
        }
    }
    for s in image_feature.iter_mut() {
        *s = *s / gt_boxes.len() as f64 + spec.image_noise * gauss(&mut rng);
    }

    // sentence assembly: mention units shuffled, the ambiguous phrase glued
    // immediately before its anchor
    let mut single_objs: Vec<usize> =
        (0..objects.len()).filter(|&i| roles[i] == Role::Single).collect();
    single_objs.shuffle(&mut rng);
    let mandatory = if ambiguous { 2 } else { 0 } + if plural { 1 } else { 0 };
    let lo_p = spec.phrases_per_sentence[0].max(mandatory.max(1));
    let hi_p = spec.phrases_per_sentence[1].max(lo_p);
    let target = if lo_p >= hi_p { hi_p } else { rng.gen_range(lo_p..=hi_p) };
    let n_single_mentions = (target - mandatory).min(single_objs.len());

    // each unit is a list of consecutive groundable phrases
    let mut units: Vec<Vec<PhraseEntry>> = Vec::new();
    if ambiguous {
        let dup_near = roles.iter().position(|r| *r == Role::DupNear).unwrap();
        let dup_far = roles.iter().position(|r| *r == Role::DupFar).unwrap();
        let anchor = roles.iter().position(|r| *r == Role::Anchor).unwrap();
        let rel =
            if rel_is_near { NEAR_TOKEN } else { FAR_TOKEN };
        let target_obj = if rel_is_near { dup_near } else { dup_far };
        let amb_phrase = PhraseEntry {
            tokens: vec![
                WorldSpec::attr_token(objects[dup_near].attr),
                objects_concept_token(&objects, dup_near),
                rel.to_string(),
                objects_concept_token(&objects, anchor),
            ],
            groundable: true,
            gt_boxes: vec![target_obj],
        };
        let anchor_phrase = PhraseEntry {
            tokens: vec![
                WorldSpec::attr_token(objects[anchor].attr),
                objects_concept_token(&objects, anchor),
            ],
            groundable: true,
            gt_boxes: vec![anchor],
        };
        units.push(vec![amb_phrase, anchor_phrase]);
    }
    if plural {
        let mut members: Vec<usize> =
            (0..objects.len()).filter(|&i| roles[i] == Role::Plural).collect();
        members.sort_unstable();
        units.push(vec![PhraseEntry {
            tokens: vec![
                PLURAL_TOKEN.to_string(),
                WorldSpec::attr_token(objects[members[0]].attr),
                objects_concept_token(&objects, members[0]),
            ],
            groundable: true,
            gt_boxes: members,
        }]);
    }
    for &i in single_objs.iter().take(n_single_mentions) {
        units.push(vec![PhraseEntry {
            tokens: vec![
                WorldSpec::attr_token(objects[i].attr),
                objects_concept_token(&objects, i),
            ],
            groundable: true,
            gt_boxes: vec![i],
        }]);
    }
    units.shuffle(&mut rng);

    let mut phrases: Vec<PhraseEntry> = Vec::new();
    let filler = |rng: &mut ChaCha8Rng, phrases: &mut Vec<PhraseEntry>| {
        let n = rng.gen_range(1..=2);
        let tokens: Vec<String> = (0..n)
            .map(|_| FILLER_TOKENS[rng.gen_range(0..FILLER_TOKENS.len())].to_string())
            .collect();
        phrases.push(PhraseEntry { tokens, groundable: false, gt_boxes: vec![] });
    };
    for unit in units {
        if rng.gen::<f64>() < 0.6 {
            filler(&mut rng, &mut phrases);
        }
        phrases.extend(unit);
    }
    if rng.gen::<f64>() < 0.5 {
        filler(&mut rng, &mut phrases);
    }

    // proposals: jittered per gt box, then background
    let mut proposals = Vec::new();
    for b in &gt_boxes {
        for _ in 0..spec.proposals_per_gt {
            let high = rng.gen::<f64>() < spec.high_iou_fraction;
            let target_iou = if high {
                rng.gen_range(0.72..0.95)
            } else {
                rng.gen_range(0.05..0.65)
            };
            let rect = jitter_to_iou(spec, &mut rng, &b.rect, target_iou);
            let blend = 0.4 + 0.6 * target_iou;
            let noise_scale = spec.feature_noise + 0.15 * (1.0 - target_iou);
            let feature: Vec<f64> = b
                .feature
                .iter()
                .map(|v| blend * v + noise_scale * gauss(&mut rng))
                .collect();
            proposals.push(Proposal { rect, feature });
        }
    }
    for _ in 0..spec.background_proposals {
        let cx = rng.gen_range(0.05..0.95);
        let rect = place_rect(spec, &mut rng, cx);
        let feature: Vec<f64> = (0..d).map(|_| 0.3 * gauss(&mut rng)).collect();
        proposals.push(Proposal { rect, feature });
    }

    Ok(SceneRecord {
        scene_id,
        width: spec.image_width,
        height: spec.image_height,
        image_feature,
        gt_boxes,
        proposals,
        phrases,
    })
}

fn objects_concept_token(objects: &[ObjectDraft], i: usize) -> String {
    WorldSpec::concept_token(objects[i].concept)
}

/// Shift a copy of `rect` so its IoU with the original is exactly
/// `target_iou`, staying inside the image so clamping never distorts it.
fn jitter_to_iou(spec: &WorldSpec, rng: &mut ChaCha8Rng, rect: &Rect, target_iou: f64) -> Rect {
    // equal boxes shifted by fractions (dx, dy) of their size overlap with
    // p = (1-dx)(1-dy), and IoU = p / (2 - p)
    let p = 2.0 * target_iou / (1.0 + target_iou);
    let t = rng.gen_range(0.0..1.0);
    let dx = 1.0 - p.powf(t);
    let dy = 1.0 - p.powf(1.0 - t);
    let w = rect.x2 - rect.x1;
    let h = rect.y2 - rect.y1;
    let shift_dir = |lo: f64, hi: f64, size: f64, delta: f64, max: f64, rng: &mut ChaCha8Rng| {
        let amount = delta * size;
        let fits_pos = hi + amount <= max;
        let fits_neg = lo - amount >= 0.0;
        let sign = match (fits_pos, fits_neg) {
            (true, true) => {
                if rng.gen::<bool>() {
                    1.0
                } else {
                    -1.0
                }
            }
            (true, false) => 1.0,
            _ => -1.0,
        };
        sign * amount
    };
    let sx = shift_dir(rect.x1, rect.x2, w, dx, spec.image_width, rng);
    let sy = shift_dir(rect.y1, rect.y2, h, dy, spec.image_height, rng);
    Rect { x1: rect.x1 + sx, y1: rect.y1 + sy, x2: rect.x2 + sx, y2: rect.y2 + sy }
}

/// Generator self-check: every ambiguous phrase must be resolvable by
/// reading its relational token against the anchor's box.
pub fn check_ambiguous_solvable(spec: &WorldSpec, scene: &SceneRecord) -> Result<()> {
    for (i, phrase) in scene.phrases.iter().enumerate() {
        let rel = phrase
            .tokens
            .iter()
            .find(|t| *t == NEAR_TOKEN || *t == FAR_TOKEN)
            .cloned();
        let Some(rel) = rel else { continue };
        let concept = &phrase.tokens[1];
        let anchor_concept = phrase.tokens.last().unwrap();
        let candidates: Vec<usize> = scene
            .gt_boxes
            .iter()
            .enumerate()
            .filter(|(_, b)| &b.concept == concept)
            .map(|(j, _)| j)
            .collect();
        let anchors: Vec<usize> = scene
            .gt_boxes
            .iter()
            .enumerate()
            .filter(|(_, b)| &b.concept == anchor_concept)
            .map(|(j, _)| j)
            .collect();
        if candidates.len() != 2 || anchors.len() != 1 {
            return Err(Error::Input(format!(
                "scene {} phrase {i}: ambiguity needs 2 candidates and 1 anchor, found {} and {}",
                scene.scene_id,
                candidates.len(),
                anchors.len()
            )));
        }
        let ax = scene.gt_boxes[anchors[0]].rect.center_x();
        let dist = |j: usize| {
            (scene.gt_boxes[j].rect.center_x() - ax).abs() / spec.image_width
        };
        let in_near: Vec<usize> = candidates
            .iter()
            .copied()
            .filter(|&j| dist(j) <= spec.near_band[1] * 1.30)
            .collect();
        let in_far: Vec<usize> = candidates
            .iter()
            .copied()
            .filter(|&j| dist(j) >= spec.far_band[0] * 0.70)
            .collect();
        if in_near.len() != 1 || in_far.len() != 1 || in_near[0] == in_far[0] {
            return Err(Error::Input(format!(
                "scene {} phrase {i}: near/far bands do not separate the candidates",
                scene.scene_id
            )));
        }
        let expected = if rel == NEAR_TOKEN { in_near[0] } else { in_far[0] };
        if phrase.gt_boxes != vec![expected] {
            return Err(Error::Input(format!(
                "scene {} phrase {i}: relational oracle picks box {expected}, label says {:?}",
                scene.scene_id, phrase.gt_boxes
            )));
        }
    }
    Ok(())
}

/// Noise-free similarity oracle reading only the concept and attribute
/// tokens of a phrase: -||prototype - feature||^2 per ground-truth box.
pub fn oracle_similarity_scores(
    spec: &WorldSpec,
    table: &EmbeddingTable,
    map: &Tensor,
    scene: &SceneRecord,
    phrase: &PhraseEntry,
) -> Vec<f64> {
    let concept = phrase
        .tokens
        .iter()
        .find(|t| t.starts_with('c') && t.len() == 3 && t[1..].chars().all(|c| c.is_ascii_digit()));
    let attr = phrase
        .tokens
        .iter()
        .find(|t| t.starts_with('a') && t.len() == 2 && t[1..].chars().all(|c| c.is_ascii_digit()));
    let (Some(concept), Some(attr)) = (concept, attr) else {
        return vec![f64::NEG_INFINITY; scene.gt_boxes.len()];
    };
    let c: usize = concept[1..].parse().unwrap();
    let a: usize = attr[1..].parse().unwrap();
    let proto = prototype(spec, table, map, c, a);
    scene
        .gt_boxes
        .iter()
        .map(|b| -b.feature.iter().zip(&proto).map(|(x, p)| (x - p) * (x - p)).sum::<f64>())
        .collect()
}

/// Ground-truth pairs for pretraining: every (groundable phrase, gt box)
/// link becomes one sample.
pub fn extract_pairs(scenes: &[SceneRecord]) -> Vec<PairSample> {
    let mut pairs = Vec::new();
    for scene in scenes {
        for phrase in scene.phrases.iter().filter(|p| p.groundable) {
            for &b in &phrase.gt_boxes {
                pairs.push(PairSample {
                    tokens: phrase.tokens.clone(),
                    feature: scene.gt_boxes[b].feature.clone(),
                });
            }
        }
    }
    pairs
}

// ── dataset files ───────────────────────────────────────────────────────

#[derive(Debug, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub spec: WorldSpec,
    pub splits: std::collections::BTreeMap<String, usize>,
    pub embedding_file: String,
    pub scene_files: std::collections::BTreeMap<String, String>,
}

pub fn write_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    ds.embeddings.save_jsonl(&dir.join("embeddings.jsonl"))?;
    let mut splits = std::collections::BTreeMap::new();
    let mut files = std::collections::BTreeMap::new();
    for (name, scenes) in [("train", &ds.train), ("val", &ds.val), ("test", &ds.test)] {
        let file = format!("{name}.jsonl");
        write_scenes_jsonl(scenes, &dir.join(&file))?;
        splits.insert(name.to_string(), scenes.len());
        files.insert(name.to_string(), file);
    }
    let manifest = DatasetManifest {
        format_version: 1,
        spec: ds.spec.clone(),
        splits,
        embedding_file: "embeddings.jsonl".to_string(),
        scene_files: files,
    };
    let mut w = BufWriter::new(File::create(dir.join("manifest.json"))?);
    serde_json::to_writer_pretty(&mut w, &manifest)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn write_scenes_jsonl(scenes: &[SceneRecord], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for s in scenes {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_scenes_jsonl(path: &Path, feat_dim: Option<usize>) -> Result<Vec<SceneRecord>> {
    let r = BufReader::new(File::open(path)?);
    let mut scenes = Vec::new();
    for (lineno, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let scene: SceneRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Parse { line: lineno + 1, msg: e.to_string() })?;
        scene.validate(feat_dim).map_err(|e| Error::Parse {
            line: lineno + 1,
            msg: e.to_string(),
        })?;
        scenes.push(scene);
    }
    Ok(scenes)
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join("manifest.json");
    let manifest: DatasetManifest =
        serde_json::from_reader(BufReader::new(File::open(&manifest_path)?))?;
    let embeddings = EmbeddingTable::load_jsonl(&dir.join(&manifest.embedding_file))?;
    let d = Some(manifest.spec.feat_dim);
    let read = |name: &str| -> Result<Vec<SceneRecord>> {
        let file = manifest
            .scene_files
            .get(name)
            .ok_or_else(|| Error::Input(format!("manifest lists no {name} split")))?;
        read_scenes_jsonl(&dir.join(file), d)
    };
    Ok(Dataset {
        spec: manifest.spec.clone(),
        embeddings,
        train: read("train")?,
        val: read("val")?,
        test: read("test")?,
    })
}
