//! Instruction conditioning: a tiny word-level vocabulary, fixed-length token
//! sequences, and an embedding table consumed by cross-attention.
//!
//! Token id conventions are frozen: PAD=0, NULL=1, UNK=2. The NULL row of the
//! embedding table is the learned "no instruction" condition; a null sequence
//! embeds as that row broadcast over all positions with every position valid,
//! so attention always has at least one unmasked key.

use std::collections::{BTreeMap, BTreeSet};

use framecast_autograd::{Arr, Graph, NodeId, ParamStore};
use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

pub const PAD_ID: usize = 0;
pub const NULL_ID: usize = 1;
pub const UNK_ID: usize = 2;
/// Fixed sequence length; longer prompts truncate, shorter ones pad.
pub const MAX_TEXT_LEN: usize = 32;
/// Hard cap on raw prompt size before tokenization.
pub const MAX_PROMPT_CHARS: usize = 512;

pub const TEXT_TABLE_PARAM: &str = "text.table";

const SPECIALS: [&str; 3] = ["<pad>", "<null>", "<unk>"];

/// Lowercased whitespace tokens with surrounding punctuation stripped.
pub fn tokenize(prompt: &str) -> Result<Vec<String>> {
    if prompt.chars().count() > MAX_PROMPT_CHARS {
        return Err(CoreError::invalid(
            "tokenize",
            format!(
                "prompt has {} chars, limit is {MAX_PROMPT_CHARS}",
                prompt.chars().count()
            ),
        ));
    }
    Ok(prompt
        .to_lowercase()
        .split_whitespace()
        .map(|w| w.trim_matches(|c: char| !c.is_alphanumeric()).to_string())
        .filter(|w| !w.is_empty())
        .collect())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Vocab {
    words: Vec<String>,
    #[serde(skip)]
    index: BTreeMap<String, usize>,
}

impl Vocab {
    /// Builds from a corpus of prompts; word order is sorted, so the id
    /// assignment is independent of corpus order.
    pub fn build<'a>(corpus: impl IntoIterator<Item = &'a str>) -> Result<Vocab> {
        let mut seen = BTreeSet::new();
        for prompt in corpus {
            seen.extend(tokenize(prompt)?);
        }
        let mut words: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        words.extend(seen);
        Ok(Self::from_words(words))
    }

    fn from_words(words: Vec<String>) -> Vocab {
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
        Vocab { words, index }
    }

    /// Restores a vocabulary from its serialized word list.
    pub fn from_token_strings(words: Vec<String>) -> Result<Vocab> {
        if words.len() < SPECIALS.len()
            || words[..SPECIALS.len()] != SPECIALS.map(str::to_string)
        {
            return Err(CoreError::invalid(
                "vocab",
                "word list must start with <pad>, <null>, <unk>",
            ));
        }
        if words.iter().collect::<BTreeSet<_>>().len() != words.len() {
            return Err(CoreError::invalid("vocab", "duplicate words"));
        }
        Ok(Self::from_words(words))
    }

    /// Rebuilds the lookup index after serde deserialization.
    pub fn reindex(&mut self) {
        self.index = self
            .words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
    }

    pub fn size(&self) -> usize {
        self.words.len()
    }

    pub fn token_strings(&self) -> &[String] {
        &self.words
    }

    pub fn id_of(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK_ID)
    }

    /// Fixed-length encoding. Empty or whitespace-only prompts produce the
    /// all-PAD null sequence.
    pub fn encode(&self, prompt: &str) -> Result<TokenSequence> {
        let tokens = tokenize(prompt)?;
        if tokens.is_empty() {
            return Ok(TokenSequence::null());
        }
        let len = tokens.len().min(MAX_TEXT_LEN);
        let mut ids = vec![PAD_ID; MAX_TEXT_LEN];
        for (slot, tok) in ids.iter_mut().zip(tokens.iter().take(len)) {
            *slot = self.id_of(tok);
        }
        Ok(TokenSequence {
            ids,
            len,
            is_null: false,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    /// Exactly `MAX_TEXT_LEN` ids, PAD beyond `len`.
    pub ids: Vec<usize>,
    pub len: usize,
    pub is_null: bool,
}

impl TokenSequence {
    pub fn null() -> TokenSequence {
        TokenSequence {
            ids: vec![PAD_ID; MAX_TEXT_LEN],
            len: 0,
            is_null: true,
        }
    }

    /// The null replacement used by conditioning dropout.
    pub fn to_null(&self) -> TokenSequence {
        TokenSequence::null()
    }
}

/// A batch of sequences prepared for the graph: flattened gather indices and
/// the additive attention mask (0 at valid keys, -inf at padding).
#[derive(Debug, Clone)]
pub struct CondBatch {
    pub flat_ids: Vec<usize>,
    pub batch: usize,
    pub mask: Array2<f64>,
}

pub fn cond_batch(seqs: &[TokenSequence]) -> Result<CondBatch> {
    let b = seqs.len();
    if b == 0 {
        return Err(CoreError::invalid("cond_batch", "empty batch"));
    }
    let mut flat_ids = Vec::with_capacity(b * MAX_TEXT_LEN);
    let mut mask = Array2::<f64>::zeros((b, MAX_TEXT_LEN));
    for (row, seq) in seqs.iter().enumerate() {
        if seq.ids.len() != MAX_TEXT_LEN {
            return Err(CoreError::shape(
                "cond_batch",
                format!("sequence has {} ids, expected {MAX_TEXT_LEN}", seq.ids.len()),
            ));
        }
        if seq.is_null {
            // NULL row at every position, all positions valid.
            flat_ids.extend(std::iter::repeat_n(NULL_ID, MAX_TEXT_LEN));
        } else {
            if seq.len == 0 || seq.len > MAX_TEXT_LEN {
                return Err(CoreError::invalid(
                    "cond_batch",
                    format!("non-null sequence with len {}", seq.len),
                ));
            }
            flat_ids.extend(seq.ids.iter().copied());
            for pos in seq.len..MAX_TEXT_LEN {
                mask[[row, pos]] = f64::NEG_INFINITY;
            }
        }
    }
    Ok(CondBatch {
        flat_ids,
        batch: b,
        mask,
    })
}

/// Registers the embedding table `text.table` with shape (vocab, dim).
pub fn register_text_table(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    vocab_size: usize,
    dim: usize,
) {
    let table = framecast_autograd::init::normal(rng, &[vocab_size, dim], 0.02);
    store.insert(TEXT_TABLE_PARAM, table);
}

/// Gathers embeddings for a prepared batch: output shape (B, L, D).
pub fn embed_cond(g: &mut Graph, table: NodeId, batch: &CondBatch) -> NodeId {
    g.embedding(table, &batch.flat_ids, &[batch.batch, MAX_TEXT_LEN])
}

/// Embedding lookup without a graph, for inspection and tests.
pub fn embed_rows(table: &Arr, seq: &TokenSequence) -> Result<Array2<f64>> {
    let table = table
        .view()
        .into_dimensionality::<ndarray::Ix2>()
        .map_err(|_| CoreError::shape("embed_rows", "table must be 2-d"))?;
    let dim = table.shape()[1];
    let mut out = Array2::<f64>::zeros((MAX_TEXT_LEN, dim));
    for (pos, mut row) in out.rows_mut().into_iter().enumerate() {
        let id = if seq.is_null { NULL_ID } else { seq.ids[pos] };
        row.assign(&table.row(id));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::episode::Task;
    use framecast_autograd::init;

    fn task_vocab() -> Vocab {
        let prompts: Vec<String> = Task::ALL
            .iter()
            .map(|t| crate::dataset::apply_prompt_template(t.instruction()).unwrap())
            .collect();
        Vocab::build(prompts.iter().map(|s| s.as_str())).unwrap()
    }

    #[test]
    fn special_ids_are_fixed() {
        let v = task_vocab();
        assert_eq!(v.token_strings()[PAD_ID], "<pad>");
        assert_eq!(v.token_strings()[NULL_ID], "<null>");
        assert_eq!(v.token_strings()[UNK_ID], "<unk>");
    }

    #[test]
    fn tokenize_lowercases_and_strips_punctuation() {
        let toks = tokenize("Scene after executing 'stack blocks'.").unwrap();
        assert_eq!(toks, ["scene", "after", "executing", "stack", "blocks"]);
    }

    #[test]
    fn prompt_char_limit() {
        let long = "a ".repeat(300);
        assert!(tokenize(&long).is_err());
        assert!(tokenize(&"a".repeat(512)).is_ok());
    }

    #[test]
    fn encode_pads_and_truncates() {
        let v = task_vocab();
        let seq = v.encode("stack blocks").unwrap();
        assert_eq!(seq.len, 2);
        assert_eq!(seq.ids.len(), MAX_TEXT_LEN);
        assert!(seq.ids[2..].iter().all(|&id| id == PAD_ID));
        assert!(!seq.is_null);

        let many = vec!["stack"; 40].join(" ");
        let seq = v.encode(&many).unwrap();
        assert_eq!(seq.len, MAX_TEXT_LEN);
    }

    #[test]
    fn unknown_words_map_to_unk() {
        let v = task_vocab();
        let seq = v.encode("zebra blocks").unwrap();
        assert_eq!(seq.ids[0], UNK_ID);
        assert_ne!(seq.ids[1], UNK_ID);
    }

    #[test]
    fn empty_prompt_is_null_sequence() {
        let v = task_vocab();
        for p in ["", "   ", "\t\n"] {
            let seq = v.encode(p).unwrap();
            assert!(seq.is_null);
            assert_eq!(seq.len, 0);
            assert!(seq.ids.iter().all(|&id| id == PAD_ID));
        }
    }

    #[test]
    fn task_prompts_encode_distinctly() {
        let v = task_vocab();
        let seqs: Vec<TokenSequence> = Task::ALL
            .iter()
            .map(|t| {
                v.encode(&crate::dataset::apply_prompt_template(t.instruction()).unwrap())
                    .unwrap()
            })
            .collect();
        for i in 0..seqs.len() {
            for j in (i + 1)..seqs.len() {
                assert_ne!(seqs[i].ids, seqs[j].ids, "prompts {i} and {j} collide");
            }
        }
    }

    #[test]
    fn vocab_id_assignment_is_corpus_order_independent() {
        let a = Vocab::build(["alpha beta", "gamma"]).unwrap();
        let b = Vocab::build(["gamma", "beta alpha"]).unwrap();
        assert_eq!(a.token_strings(), b.token_strings());
    }

    #[test]
    fn vocab_serde_round_trip() {
        let v = task_vocab();
        let json = serde_json::to_string(&v).unwrap();
        let mut back: Vocab = serde_json::from_str(&json).unwrap();
        back.reindex();
        assert_eq!(back.token_strings(), v.token_strings());
        assert_eq!(
            back.encode("stack blocks").unwrap(),
            v.encode("stack blocks").unwrap()
        );
    }

    #[test]
    fn mask_marks_padding_with_neg_infinity() {
        let v = task_vocab();
        let seq = v.encode("stack blocks").unwrap();
        let batch = cond_batch(std::slice::from_ref(&seq)).unwrap();
        assert_eq!(batch.mask[[0, 0]], 0.0);
        assert_eq!(batch.mask[[0, 1]], 0.0);
        assert!(batch.mask[[0, 2]].is_infinite() && batch.mask[[0, 2]] < 0.0);
    }

    #[test]
    fn null_sequence_broadcasts_null_row_with_open_mask() {
        let v = task_vocab();
        let mut rng = crate::rng::derive_rng(0, "text-test");
        let table = init::normal(&mut rng, &[v.size(), 8], 0.02);
        let rows = embed_rows(&table, &TokenSequence::null()).unwrap();
        let null_row = table.index_axis(ndarray::Axis(0), NULL_ID);
        for pos in 0..MAX_TEXT_LEN {
            assert_eq!(
                rows.row(pos).to_vec(),
                null_row.iter().copied().collect::<Vec<_>>()
            );
        }
        let batch = cond_batch(&[TokenSequence::null()]).unwrap();
        assert!(batch.mask.iter().all(|&m| m == 0.0));
    }

    #[test]
    fn embed_cond_matches_row_lookup() {
        let v = task_vocab();
        let mut rng = crate::rng::derive_rng(1, "text-test");
        let mut store = ParamStore::new();
        register_text_table(&mut store, &mut rng, v.size(), 8);

        let seq = v.encode("beat the block with the hammer").unwrap();
        let batch = cond_batch(std::slice::from_ref(&seq)).unwrap();
        let mut g = Graph::new(false);
        let table_node = g.leaf(store.get(TEXT_TABLE_PARAM).unwrap().clone(), false);
        let emb = embed_cond(&mut g, table_node, &batch);
        let got = g.value(emb);
        assert_eq!(got.shape(), &[1, MAX_TEXT_LEN, 8]);
        let expect = embed_rows(store.get(TEXT_TABLE_PARAM).unwrap(), &seq).unwrap();
        for pos in 0..MAX_TEXT_LEN {
            for d in 0..8 {
                assert_eq!(got[[0, pos, d]], expect[[pos, d]]);
            }
        }
    }
}
