//! Token vocabulary and the word-embedding table that stands in for
//! pretrained word vectors. Stored as JSON-lines, one {token, vector}
//! record per row.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

pub const UNK_TOKEN: &str = "<unk>";

#[derive(Debug, Serialize, Deserialize)]
struct EmbeddingRecord {
    token: String,
    vector: Vec<f64>,
}

/// Token -> row lookup with a designated unknown-token row.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<String>,
    #[serde(skip)]
    index: BTreeMap<String, usize>,
    unk: usize,
}

impl Vocab {
    fn build(tokens: Vec<String>) -> Result<Vocab> {
        let mut index = BTreeMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Input(format!("duplicate token {t}")));
            }
        }
        let unk = *index
            .get(UNK_TOKEN)
            .ok_or_else(|| Error::Input(format!("vocabulary missing {UNK_TOKEN} row")))?;
        Ok(Vocab { tokens, index, unk })
    }

    /// Rebuilds the lookup map after deserialization.
    pub fn reindex(&mut self) {
        self.index = self.tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
    }

    pub fn lookup(&self, token: &str) -> usize {
        *self.index.get(token).unwrap_or(&self.unk)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn unk_index(&self) -> usize {
        self.unk
    }
}

/// Word embeddings: a vocabulary plus one d_w vector per token.
#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    pub vocab: Vocab,
    pub vectors: Tensor,
}

impl EmbeddingTable {
    /// Random unit vectors for each token; appends the unknown-token row.
    pub fn random(mut tokens: Vec<String>, dim: usize, rng: &mut impl Rng) -> Result<EmbeddingTable> {
        if !tokens.iter().any(|t| t == UNK_TOKEN) {
            tokens.push(UNK_TOKEN.to_string());
        }
        let n = tokens.len();
        let mut data = Vec::with_capacity(n * dim);
        for _ in 0..n {
            let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..=1.0)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            data.extend(v.iter().map(|x| x / norm));
        }
        Ok(EmbeddingTable { vocab: Vocab::build(tokens)?, vectors: Tensor::matrix(n, dim, data)? })
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }

    pub fn save_jsonl(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        for (i, token) in self.vocab.tokens().iter().enumerate() {
            let rec = EmbeddingRecord {
                token: token.clone(),
                vector: self.vectors.data()[i * self.dim()..(i + 1) * self.dim()].to_vec(),
            };
            serde_json::to_writer(&mut w, &rec)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    /// Loads a JSON-lines table, validating uniform vector dimension.
    pub fn load_jsonl(path: &Path) -> Result<EmbeddingTable> {
        let r = BufReader::new(File::open(path)?);
        let mut tokens = Vec::new();
        let mut data = Vec::new();
        let mut dim: Option<usize> = None;
        for (lineno, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: EmbeddingRecord = serde_json::from_str(&line)
                .map_err(|e| Error::Parse { line: lineno + 1, msg: e.to_string() })?;
            match dim {
                None => dim = Some(rec.vector.len()),
                Some(d) if d != rec.vector.len() => {
                    return Err(Error::Parse {
                        line: lineno + 1,
                        msg: format!(
                            "vector for {} has dimension {}, expected {d}",
                            rec.token,
                            rec.vector.len()
                        ),
                    })
                }
                _ => {}
            }
            if rec.vector.iter().any(|v| !v.is_finite()) {
                return Err(Error::Parse {
                    line: lineno + 1,
                    msg: format!("non-finite embedding for {}", rec.token),
                });
            }
            tokens.push(rec.token);
            data.extend(rec.vector);
        }
        let dim = dim.ok_or(Error::Parse { line: 1, msg: "empty embedding file".into() })?;
        if !tokens.iter().any(|t| t == UNK_TOKEN) {
            return Err(Error::Parse {
                line: 1,
                msg: format!("embedding file has no {UNK_TOKEN} row"),
            });
        }
        let n = tokens.len();
        Ok(EmbeddingTable { vocab: Vocab::build(tokens)?, vectors: Tensor::matrix(n, dim, data)? })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn unknown_tokens_hit_the_unk_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = EmbeddingTable::random(vec!["cat".into(), "dog".into()], 4, &mut rng).unwrap();
        assert_eq!(t.vocab.lookup("cat"), 0);
        assert_eq!(t.vocab.lookup("zebra"), t.vocab.unk_index());
    }

    #[test]
    fn jsonl_roundtrip_and_dim_validation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = EmbeddingTable::random(vec!["a".into(), "b".into()], 3, &mut rng).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.jsonl");
        t.save_jsonl(&path).unwrap();
        let loaded = EmbeddingTable::load_jsonl(&path).unwrap();
        assert_eq!(loaded.vocab.tokens(), t.vocab.tokens());
        assert_eq!(loaded.vectors, t.vectors);

        // corrupt one line with a shorter vector
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines: Vec<&str> = text.lines().collect();
        let bad = r#"{"token":"c","vector":[1.0,2.0]}"#;
        lines.push(bad);
        std::fs::write(&path, lines.join("\n")).unwrap();
        let err = EmbeddingTable::load_jsonl(&path).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 4),
            other => panic!("expected parse error, got {other}"),
        }
    }
}
