//! Asymmetric order-embedding similarity and the contrastive pretraining
//! objective that coordinates the phrase and visual encoders.
//!
//! The similarity F(p, b) = -||max(0, b - p)||^2 is 0 exactly when b <= p
//! elementwise and negative otherwise, so a phrase "entails" the boxes that
//! sit below it in the embedding order. Pretraining pushes every contrastive
//! pair's similarity below the true pair's by a margin, with contrastives
//! drawn from the rest of the batch.

use crate::encoders::Encoders;
use crate::error::{Error, Result};
use crate::nn::{ParamStore, Session};
use crate::opt::Adam;
use crate::synth::SceneRecord;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

/// F(p, b) = -||max(0, b - p)||^2, plain f64 route.
pub fn similarity(p: &[f64], b: &[f64]) -> Result<f64> {
    if p.len() != b.len() {
        return Err(Error::Dimension(format!(
            "similarity of {}-dim phrase and {}-dim box",
            p.len(),
            b.len()
        )));
    }
    let pen: f64 = p.iter().zip(b).map(|(pi, bi)| (bi - pi).max(0.0).powi(2)).sum();
    Ok(-pen)
}

/// Same similarity on the tape; `p` and `b` are 1 x d rows.
pub fn similarity_on_tape(tape: &mut Tape, p: Var, b: Var) -> Result<Var> {
    let diff = tape.sub(b, p)?;
    let pos = tape.relu(diff)?;
    let sq = tape.sumsq_rows(pos)?;
    tape.scale(sq, -1.0)
}

/// All-pairs similarities. Returns an L x K matrix whose (l, k) entry is
/// F(p_k, b_l) for phrase batch `phrases` (K x d) and box batch `boxes`
/// (L x d).
pub fn similarity_columns(tape: &mut Tape, phrases: Var, boxes: Var) -> Result<Var> {
    let k = tape.value(phrases).rows();
    let l = tape.value(boxes).rows();
    let mut cols = Vec::with_capacity(k);
    for j in 0..k {
        let p = tape.row(phrases, j)?;
        let wide = tape.broadcast_row(p, l)?;
        let diff = tape.sub(boxes, wide)?;
        let pos = tape.relu(diff)?;
        let sq = tape.sumsq_rows(pos)?;
        cols.push(tape.scale(sq, -1.0)?);
    }
    tape.concat_cols(&cols)
}

/// Ranking hinge for one contrastive term, plain route used by tests.
pub fn hinge(margin: f64, f_true: f64, f_contrast: f64) -> f64 {
    (margin - f_true + f_contrast).max(0.0)
}

/// Eq-style ranking loss over a batch of true pairs with in-batch
/// contrastives: every other box and every other phrase in the batch serves
/// as a contrastive for each positive. `phrases` and `boxes` are K x d with
/// row k a true pair. Returns a scalar tape variable.
pub fn ranking_loss(sess: &mut Session, phrases: Var, boxes: Var, margin: f64) -> Result<Var> {
    let k = sess.tape.value(phrases).rows();
    if sess.tape.value(boxes).rows() != k {
        return Err(Error::Dimension("ranking_loss: phrase and box batches differ".into()));
    }
    if k < 2 {
        return Err(Error::Config(
            "ranking_loss needs a batch of at least 2 to sample contrastives".into(),
        ));
    }
    if margin < 0.0 {
        return Err(Error::Config(format!("margin must be non-negative, got {margin}")));
    }
    let sims = similarity_columns(&mut sess.tape, phrases, boxes)?; // K x K, (l, k) = F(p_k, b_l)
    let t = &mut sess.tape;
    let inv = 1.0 / (k as f64 - 1.0);
    let mut total: Option<Var> = None;
    for j in 0..k {
        let col = t.slice_cols(sims, j, 1)?; // F(p_j, b_l) for all l, K x 1
        let prow = t.row(sims, j)?; // F(p_k, b_j) for all k, 1 x K
        let f_true = t.row(col, j)?; // 1 x 1

        // contrastive boxes: mean over l != j of max(0, margin - F_jj + F(p_j, b_l))
        let ones_col = t.leaf(Tensor::matrix(k, 1, vec![1.0; k])?)?;
        let f_true_col = t.matmul(ones_col, f_true)?;
        let gap_b = t.sub(col, f_true_col)?;
        let marg_b = t.add_const(gap_b, margin)?;
        let hinge_b = t.relu(marg_b)?;
        let mut mask = vec![1.0; k];
        mask[j] = 0.0;
        let masked_b = t.apply_mask(hinge_b, mask.clone())?;
        let sum_b = t.sum_all(masked_b)?;
        let mean_b = t.scale(sum_b, inv)?;

        // contrastive phrases: mean over k != j of max(0, margin - F_jj + F(p_k, b_j))
        let ones_row = t.leaf(Tensor::row(vec![1.0; k]))?;
        let f_true_row = t.matmul(f_true, ones_row)?;
        let gap_p = t.sub(prow, f_true_row)?;
        let marg_p = t.add_const(gap_p, margin)?;
        let hinge_p = t.relu(marg_p)?;
        let masked_p = t.apply_mask(hinge_p, mask)?;
        let sum_p = t.sum_all(masked_p)?;
        let mean_p = t.scale(sum_p, inv)?;

        let term = t.add(mean_b, mean_p)?;
        total = Some(match total {
            None => term,
            Some(acc) => t.add(acc, term)?,
        });
    }
    Ok(total.unwrap())
}

/// Plain f64 reference for the in-batch ranking loss; the tape route is
/// checked against this in tests.
pub fn ranking_loss_reference(phrases: &[Vec<f64>], boxes: &[Vec<f64>], margin: f64) -> f64 {
    let k = phrases.len();
    let mut total = 0.0;
    for j in 0..k {
        let f_true = similarity(&phrases[j], &boxes[j]).unwrap();
        let mut sum_b = 0.0;
        let mut sum_p = 0.0;
        for l in 0..k {
            if l == j {
                continue;
            }
            sum_b += hinge(margin, f_true, similarity(&phrases[j], &boxes[l]).unwrap());
            sum_p += hinge(margin, f_true, similarity(&phrases[l], &boxes[j]).unwrap());
        }
        total += (sum_b + sum_p) / (k as f64 - 1.0);
    }
    total
}

/// One ground-truth phrase-box pair drawn from a scene.
#[derive(Debug, Clone)]
pub struct PairSample {
    pub tokens: Vec<String>,
    pub feature: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainConfig {
    /// Margin of the ranking loss.
    pub margin: f64,
    /// In-batch contrastives are batch_size - 1 per positive.
    pub batch_size: usize,
    pub lr: f64,
    /// Global-norm gradient clip.
    pub grad_clip: f64,
    pub epochs: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig { margin: 0.05, batch_size: 32, lr: 1e-4, grad_clip: 2.0, epochs: 20 }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.margin < 0.0 {
            return Err(Error::Config(format!("margin {} < 0", self.margin)));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch_size {} < 2: contrastives come from within the batch",
                self.batch_size
            )));
        }
        Ok(())
    }
}

/// Contrastive pretraining of the encoders over true phrase-box pairs.
/// Returns per-epoch mean losses (per positive pair).
pub fn pretrain(
    store: &mut ParamStore,
    encoders: &Encoders,
    pairs: &[PairSample],
    cfg: &PretrainConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::Input("pretraining dataset is empty".into()));
    }
    let mut adam = Adam::new(store, cfg.lr);
    let mut shuffle_rng = crate::rngs::stream(seed, "pretrain/shuffle");
    let mut dropout_rng = crate::rngs::stream(seed, "pretrain/dropout");
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for _epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut total = 0.0;
        let mut counted = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let mut sess = Session::new(store, true)?;
            let phrases: Vec<Vec<String>> =
                chunk.iter().map(|&i| pairs[i].tokens.clone()).collect();
            let feats = Tensor::matrix(
                chunk.len(),
                pairs[chunk[0]].feature.len(),
                chunk.iter().flat_map(|&i| pairs[i].feature.iter().copied()).collect(),
            )?;
            let p_enc = encoders.encode_phrases(&mut sess, &phrases, &mut dropout_rng)?;
            let b_enc = encoders.encode_visual_rows(&mut sess, &feats, &mut dropout_rng)?;
            let loss = ranking_loss(&mut sess, p_enc, b_enc, cfg.margin)?;
            let loss_val = sess.tape.value(loss).data()[0];
            if !loss_val.is_finite() {
                return Err(Error::Numeric(format!("pretraining loss became {loss_val}")));
            }
            sess.tape.backward(loss)?;
            let grads = sess.grads(store);
            adam.step(store, &grads, Some(cfg.grad_clip))?;
            total += loss_val;
            counted += chunk.len();
        }
        epoch_losses.push(if counted == 0 { 0.0 } else { total / counted as f64 });
    }
    Ok(epoch_losses)
}

/// Held-out retrieval check: for each ground-truth pair, the true box must
/// be the argmax of F among that scene's boxes. Ties break to the lower box
/// index.
pub fn recall_at_1(store: &ParamStore, encoders: &Encoders, scenes: &[SceneRecord]) -> Result<f64> {
    let mut hits = 0usize;
    let mut total = 0usize;
    let mut rng = crate::rngs::stream(0, "recall/eval"); // unused at eval, dropout off
    for scene in scenes {
        if scene.gt_boxes.is_empty() {
            continue;
        }
        let mut sess = Session::new(store, false)?;
        let feats = Tensor::matrix(
            scene.gt_boxes.len(),
            scene.gt_boxes[0].feature.len(),
            scene.gt_boxes.iter().flat_map(|b| b.feature.iter().copied()).collect(),
        )?;
        let b_enc = encoders.encode_visual_rows(&mut sess, &feats, &mut rng)?;
        let groundable: Vec<&crate::synth::PhraseEntry> =
            scene.phrases.iter().filter(|p| p.groundable).collect();
        if groundable.is_empty() {
            continue;
        }
        let token_lists: Vec<Vec<String>> = groundable.iter().map(|p| p.tokens.clone()).collect();
        let p_enc = encoders.encode_phrases(&mut sess, &token_lists, &mut rng)?;
        let sims = similarity_columns(&mut sess.tape, p_enc, b_enc)?;
        let sims_val = sess.tape.value(sims).clone();
        for (k, phrase) in groundable.iter().enumerate() {
            let mut best = 0usize;
            for l in 1..scene.gt_boxes.len() {
                if sims_val.at(l, k) > sims_val.at(best, k) {
                    best = l;
                }
            }
            for &gt in &phrase.gt_boxes {
                total += 1;
                if best == gt {
                    hits += 1;
                }
            }
        }
    }
    if total == 0 {
        return Err(Error::Input("no ground-truth pairs to evaluate".into()));
    }
    Ok(hits as f64 / total as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::EmbeddingTable;
    use crate::encoders::{EncoderConfig, Normalization};
    use crate::gradcheck::grad_check;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn similarity_examples() {
        // b <= p elementwise takes the maximum value 0
        assert_eq!(similarity(&[2.0, 3.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(similarity(&[0.0, 0.0], &[1.0, 2.0]).unwrap(), -5.0);
        assert_eq!(similarity(&[2.0, 3.0], &[1.0, 5.0]).unwrap(), -4.0);
    }

    #[test]
    fn similarity_is_asymmetric() {
        let p = [0.0, 2.0];
        let b = [1.0, 0.0];
        assert_eq!(similarity(&p, &b).unwrap(), -1.0);
        assert_eq!(similarity(&b, &p).unwrap(), -4.0);
    }

    #[test]
    fn dimension_mismatch_is_error() {
        assert!(similarity(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn hinge_examples() {
        assert_eq!(hinge(0.2, 0.0, -5.0), 0.0);
        assert!((hinge(0.2, -1.0, -0.5) - 0.7).abs() < 1e-12);
        // identical embeddings: every F term cancels, each term is the margin
        assert!((hinge(0.2, -3.0, -3.0) - 0.2).abs() < 1e-12);
    }

    #[test]
    fn identical_embeddings_make_every_term_the_margin() {
        let v = vec![vec![0.5, 0.5]; 4];
        let loss = ranking_loss_reference(&v, &v, 0.05);
        // 4 positives, each contributing margin for boxes plus margin for phrases
        assert!((loss - 4.0 * 2.0 * 0.05).abs() < 1e-12);
    }

    #[test]
    fn batch_of_one_is_config_error() {
        let mut store = ParamStore::new();
        store.add("p", Tensor::row(vec![1.0, 2.0])).unwrap();
        let mut sess = Session::new(&store, false).unwrap();
        let p = sess.tape.leaf(Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap()).unwrap();
        let b = sess.tape.leaf(Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap()).unwrap();
        assert!(matches!(ranking_loss(&mut sess, p, b, 0.05), Err(Error::Config(_))));
    }

    #[test]
    fn tape_loss_matches_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let k = rng.gen_range(2..8);
            let d = rng.gen_range(2..6);
            let pv: Vec<Vec<f64>> =
                (0..k).map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
            let bv: Vec<Vec<f64>> =
                (0..k).map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
            let reference = ranking_loss_reference(&pv, &bv, 0.05);

            let store = ParamStore::new();
            let mut sess = Session::new(&store, false).unwrap();
            let p = sess
                .tape
                .leaf(Tensor::matrix(k, d, pv.iter().flatten().copied().collect()).unwrap())
                .unwrap();
            let b = sess
                .tape
                .leaf(Tensor::matrix(k, d, bv.iter().flatten().copied().collect()).unwrap())
                .unwrap();
            let loss = ranking_loss(&mut sess, p, b, 0.05).unwrap();
            let got = sess.tape.value(loss).data()[0];
            assert!((got - reference).abs() < 1e-12, "{got} vs {reference}");
        }
    }

    proptest! {
        #[test]
        fn similarity_is_non_positive_and_zero_iff_dominated(
            p in proptest::collection::vec(-10.0f64..10.0, 1..8),
            delta in proptest::collection::vec(-10.0f64..10.0, 1..8),
        ) {
            let n = p.len().min(delta.len());
            let p = &p[..n];
            let b: Vec<f64> = p.iter().zip(&delta[..n]).map(|(pi, di)| pi + di).collect();
            let f = similarity(p, &b).unwrap();
            prop_assert!(f <= 0.0);
            let dominated = b.iter().zip(p).all(|(bi, pi)| bi <= pi);
            prop_assert_eq!(f == 0.0, dominated);
        }

        #[test]
        fn loss_is_zero_when_margins_satisfied(seed in 0u64..1000) {
            // construct a batch where every contrastive is far below its true pair
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let k = 4;
            let d = 3;
            let mut phrases = Vec::new();
            let mut boxes = Vec::new();
            for j in 0..k {
                // orthogonal-ish blocks: phrase j dominates box j, misses others badly
                let mut p = vec![0.0; d];
                let mut b = vec![0.0; d];
                p[j % d] = 10.0 + rng.gen_range(0.0..1.0);
                b[j % d] = 1.0;
                b[(j + 1) % d] = -5.0;
                phrases.push(p);
                boxes.push(b);
            }
            // contrastive boxes protrude above foreign phrases by at least 1 unit
            let loss = ranking_loss_reference(&phrases, &boxes, 0.05);
            prop_assert!(loss >= 0.0);
            if (0..k).all(|j| (0..k).all(|l| {
                l == j || {
                    let ft = similarity(&phrases[j], &boxes[j]).unwrap();
                    similarity(&phrases[j], &boxes[l]).unwrap() <= ft - 0.05
                        && similarity(&phrases[l], &boxes[j]).unwrap() <= ft - 0.05
                }
            })) {
                prop_assert_eq!(loss, 0.0);
            }
        }
    }

    fn tiny_encoders(seed: u64) -> (ParamStore, Encoders) {
        let cfg = EncoderConfig {
            word_dim: 3,
            feat_dim: 4,
            hidden: [5, 4],
            embed_dim: 3,
            dropout: 0.0,
            normalization: Normalization::L2,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let table = EmbeddingTable::random(
            vec!["red".into(), "dog".into(), "tree".into()],
            3,
            &mut rng,
        )
        .unwrap();
        let mut store = ParamStore::new();
        let enc = Encoders::new(&mut store, cfg, table, &mut rng).unwrap();
        (store, enc)
    }

    /// Finite differences require a differentiable point: with zero biases,
    /// ReLU outputs land exactly on the max(0, b - p) kink. Positive biases
    /// and tame weights keep every activation strictly positive.
    fn make_point_generic(store: &mut ParamStore) {
        for id in store.ids().collect::<Vec<_>>() {
            if store.name(id).ends_with(".bias") {
                for v in store.get_mut(id).data_mut() {
                    *v = 0.3;
                }
            } else if store.name(id).ends_with(".weight") {
                for v in store.get_mut(id).data_mut() {
                    *v *= 0.5;
                }
            }
        }
    }

    #[test]
    fn ranking_loss_gradients_pass_grad_check_through_both_encoders() {
        let (mut store, enc) = tiny_encoders(21);
        make_point_generic(&mut store);
        let phrases = vec![
            vec!["red".to_string(), "dog".to_string()],
            vec!["tree".to_string()],
            vec!["dog".to_string()],
        ];
        let feats = Tensor::matrix(
            3,
            4,
            vec![0.5, -0.2, 0.8, 0.1, -0.4, 0.9, 0.2, 0.3, 0.7, 0.7, -0.1, -0.6],
        )
        .unwrap();
        let ids: Vec<_> = store.ids().collect();
        let report = grad_check(
            &mut store,
            &ids,
            |s, want| {
                let mut sess = Session::new(s, false)?;
                let mut rng = ChaCha8Rng::seed_from_u64(0);
                let p = enc.encode_phrases(&mut sess, &phrases, &mut rng)?;
                let b = enc.encode_visual_rows(&mut sess, &feats, &mut rng)?;
                let loss = ranking_loss(&mut sess, p, b, 0.05)?;
                let val = sess.tape.value(loss).data()[0];
                if want {
                    sess.tape.backward(loss)?;
                    Ok((val, sess.grads(s)))
                } else {
                    Ok((val, vec![]))
                }
            },
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "max rel err {} at {:?}", report.max_rel_err, report.worst);
    }

    #[test]
    fn zero_epochs_returns_parameters_unchanged() {
        let (mut store, enc) = tiny_encoders(22);
        let before = store.clone();
        let pairs = vec![
            PairSample { tokens: vec!["dog".into()], feature: vec![0.1, 0.2, 0.3, 0.4] },
            PairSample { tokens: vec!["tree".into()], feature: vec![0.4, 0.3, 0.2, 0.1] },
        ];
        let cfg = PretrainConfig { epochs: 0, ..PretrainConfig::default() };
        let losses = pretrain(&mut store, &enc, &pairs, &cfg, 7).unwrap();
        assert!(losses.is_empty());
        for (a, b) in before.iter().zip(store.iter()) {
            assert_eq!(a.1.data(), b.1.data());
        }
    }

    #[test]
    fn empty_dataset_is_input_error() {
        let (mut store, enc) = tiny_encoders(23);
        let cfg = PretrainConfig::default();
        assert!(matches!(
            pretrain(&mut store, &enc, &[], &cfg, 7),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn batch_of_32_yields_31_contrastives_per_positive() {
        // with identical embeddings each hinge term is exactly the margin, so
        // the loss per positive equals 2 * margin regardless of the
        // contrastive count only if the mean runs over all 31 others; a sum
        // would scale by 31. Check the mean against both readings.
        let margin = 0.05;
        let v = vec![vec![1.0, 0.0]; 32];
        let loss = ranking_loss_reference(&v, &v, margin);
        assert!((loss - 32.0 * 2.0 * margin).abs() < 1e-9);
        // and the contrastive count per positive is batch_size - 1 = 31
        let cfg = PretrainConfig::default();
        assert_eq!(cfg.batch_size - 1, 31);
    }

    #[test]
    fn smoke_pretraining_decreases_loss_trend() {
        let (mut store, enc) = tiny_encoders(24);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut pairs = Vec::new();
        for _ in 0..48 {
            let which = rng.gen_range(0..3u8);
            let (tok, base) = match which {
                0 => ("red", [1.0, 0.0, 0.0, 0.2]),
                1 => ("dog", [0.0, 1.0, 0.0, 0.2]),
                _ => ("tree", [0.0, 0.0, 1.0, 0.2]),
            };
            let feature: Vec<f64> =
                base.iter().map(|v| v + rng.gen_range(-0.05..0.05)).collect();
            pairs.push(PairSample { tokens: vec![tok.to_string()], feature });
        }
        let cfg = PretrainConfig { epochs: 8, batch_size: 16, lr: 1e-2, ..Default::default() };
        let losses = pretrain(&mut store, &enc, &pairs, &cfg, 3).unwrap();
        assert_eq!(losses.len(), 8);
        assert!(
            losses.last().unwrap() < losses.first().unwrap(),
            "loss did not trend down: {losses:?}"
        );
    }
}
