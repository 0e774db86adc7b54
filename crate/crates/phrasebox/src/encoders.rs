//! Phrase and visual encoders into the shared embedding space.
//!
//! A phrase is mean-pooled over its token embeddings, then passed through
//! dropout and three FC+ReLU layers, then normalized. Box features and the
//! full-image feature go through one shared visual encoder with the same
//! layout, so boxes and image land in the same space as phrases.

use crate::embed::EmbeddingTable;
use crate::error::{Error, Result};
use crate::nn::{Linear, ParamId, ParamStore, Session};
use crate::tape::Var;
use crate::tensor::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Final layer of the encoders. L2 keeps embeddings on the unit sphere of
/// the non-negative orthant, which is what the asymmetric similarity wants;
/// `None` is kept for comparison runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    #[default]
    L2,
    None,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Word embedding dimension d_w.
    pub word_dim: usize,
    /// Visual feature dimension d_v.
    pub feat_dim: usize,
    /// Hidden widths of the two inner FC layers.
    pub hidden: [usize; 2],
    /// Output dimension of the shared embedding space.
    pub embed_dim: usize,
    pub dropout: f64,
    pub normalization: Normalization,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            word_dim: 300,
            feat_dim: 4096,
            hidden: [1500, 1000],
            embed_dim: 500,
            dropout: 0.4,
            normalization: Normalization::L2,
        }
    }
}

/// Both encoders plus the trainable embedding table.
#[derive(Debug, Clone)]
pub struct Encoders {
    pub cfg: EncoderConfig,
    pub table: ParamId,
    pub vocab: crate::embed::Vocab,
    phrase_fc: [Linear; 3],
    visual_fc: [Linear; 3],
}

impl Encoders {
    pub fn new(
        store: &mut ParamStore,
        cfg: EncoderConfig,
        table: EmbeddingTable,
        rng: &mut impl Rng,
    ) -> Result<Encoders> {
        if table.dim() != cfg.word_dim {
            return Err(Error::Config(format!(
                "embedding table dim {} but config word_dim {}",
                table.dim(),
                cfg.word_dim
            )));
        }
        let table_id = store.add("embedding.table", table.vectors.clone())?;
        let dims_p = [cfg.word_dim, cfg.hidden[0], cfg.hidden[1], cfg.embed_dim];
        let dims_v = [cfg.feat_dim, cfg.hidden[0], cfg.hidden[1], cfg.embed_dim];
        let mk = |store: &mut ParamStore, prefix: &str, dims: [usize; 4], rng: &mut _| -> Result<[Linear; 3]> {
            Ok([
                Linear::new(store, &format!("{prefix}.fc0"), dims[0], dims[1], rng)?,
                Linear::new(store, &format!("{prefix}.fc1"), dims[1], dims[2], rng)?,
                Linear::new(store, &format!("{prefix}.fc2"), dims[2], dims[3], rng)?,
            ])
        };
        let phrase_fc = mk(store, "phrase_encoder", dims_p, rng)?;
        let visual_fc = mk(store, "visual_encoder", dims_v, rng)?;
        Ok(Encoders { cfg, table: table_id, vocab: table.vocab, phrase_fc, visual_fc })
    }

    fn fc_stack(
        &self,
        sess: &mut Session,
        layers: &[Linear; 3],
        x: Var,
        rng: &mut impl Rng,
    ) -> Result<Var> {
        let mut h = sess.dropout(x, self.cfg.dropout, rng)?;
        for layer in layers {
            let z = layer.apply(sess, h)?;
            h = sess.tape.relu(z)?;
        }
        match self.cfg.normalization {
            Normalization::L2 => sess.tape.l2_normalize_rows(h),
            Normalization::None => Ok(h),
        }
    }

    /// Mean token embedding before the FC stack; exposed for tests.
    pub fn pool_tokens(&self, sess: &mut Session, tokens: &[String]) -> Result<Var> {
        if tokens.is_empty() {
            return Err(Error::Input("cannot encode an empty token list".into()));
        }
        let indices: Vec<usize> = tokens.iter().map(|t| self.vocab.lookup(t)).collect();
        let rows = sess.tape.gather_rows(sess.p(self.table), &indices)?;
        sess.tape.mean_rows(rows)
    }

    /// Encode one phrase: 1 x embed_dim.
    pub fn encode_phrase(
        &self,
        sess: &mut Session,
        tokens: &[String],
        rng: &mut impl Rng,
    ) -> Result<Var> {
        let pooled = self.pool_tokens(sess, tokens)?;
        self.fc_stack(sess, &self.phrase_fc, pooled, rng)
    }

    /// Encode a batch of phrases: n x embed_dim.
    pub fn encode_phrases(
        &self,
        sess: &mut Session,
        phrases: &[Vec<String>],
        rng: &mut impl Rng,
    ) -> Result<Var> {
        if phrases.is_empty() {
            return Err(Error::Input("cannot encode an empty phrase list".into()));
        }
        let pooled: Vec<Var> =
            phrases.iter().map(|p| self.pool_tokens(sess, p)).collect::<Result<_>>()?;
        let stacked = sess.tape.concat_rows(&pooled)?;
        self.fc_stack(sess, &self.phrase_fc, stacked, rng)
    }

    /// Encode a batch of visual feature rows (boxes or the full image):
    /// n x embed_dim. Shared parameters for both uses.
    pub fn encode_visual_rows(
        &self,
        sess: &mut Session,
        features: &Tensor,
        rng: &mut impl Rng,
    ) -> Result<Var> {
        if features.cols() != self.cfg.feat_dim {
            return Err(Error::Input(format!(
                "visual feature dim {}, encoder expects {}",
                features.cols(),
                self.cfg.feat_dim
            )));
        }
        let x = sess.tape.leaf(features.clone())?;
        self.fc_stack(sess, &self.visual_fc, x, rng)
    }

    pub fn encode_box(
        &self,
        sess: &mut Session,
        feature: &[f64],
        rng: &mut impl Rng,
    ) -> Result<Var> {
        self.encode_visual_rows(sess, &Tensor::row(feature.to_vec()), rng)
    }

    /// Same computation and parameters as [`Encoders::encode_box`]; the full
    /// image is just one more visual feature row.
    pub fn encode_image(
        &self,
        sess: &mut Session,
        feature: &[f64],
        rng: &mut impl Rng,
    ) -> Result<Var> {
        self.encode_box(sess, feature, rng)
    }
}
