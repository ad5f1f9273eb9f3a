//! Byte-level BPE with a small fixed vocabulary budget. The base alphabet is
//! the set of bytes seen in the training corpus plus reserved specials;
//! greedy pair merging fills the remaining slots.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: u16 = 0;
pub const BEGIN_TEXT: u16 = 1;
pub const END_TEXT: u16 = 2;
pub const UNKNOWN: u16 = 3;
const NUM_SPECIALS: usize = 4;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BpeVocab {
    /// id -> byte string; specials hold empty strings.
    tokens: Vec<Vec<u8>>,
    /// ordered merge rules over token ids
    merges: Vec<(u16, u16)>,
    #[serde(skip)]
    byte_to_id: HashMap<u8, u16>,
    #[serde(skip)]
    merge_rank: HashMap<(u16, u16), (usize, u16)>,
}

impl BpeVocab {
    pub fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    pub fn merges(&self) -> &[(u16, u16)] {
        &self.merges
    }

    fn rebuild_index(&mut self) {
        self.byte_to_id = self
            .tokens
            .iter()
            .enumerate()
            .filter(|(id, t)| *id >= NUM_SPECIALS && t.len() == 1)
            .map(|(id, t)| (t[0], id as u16))
            .collect();
        self.merge_rank = self
            .merges
            .iter()
            .enumerate()
            .map(|(rank, &(a, b))| ((a, b), (rank, self.merge_result_id(rank))))
            .collect();
    }

    fn merge_result_id(&self, rank: usize) -> u16 {
        // merged tokens are appended after specials + alphabet in rule order
        (self.tokens.len() - self.merges.len() + rank) as u16
    }

    pub fn encode(&self, text: &str) -> Vec<u16> {
        let mut seq: Vec<u16> = text
            .bytes()
            .map(|b| self.byte_to_id.get(&b).copied().unwrap_or(UNKNOWN))
            .collect();
        // apply merges in learned order until none applies
        loop {
            let mut best: Option<(usize, usize, u16)> = None; // (rank, pos, new_id)
            for i in 0..seq.len().saturating_sub(1) {
                if let Some(&(rank, new_id)) = self.merge_rank.get(&(seq[i], seq[i + 1])) {
                    if best.map_or(true, |(r, _, _)| rank < r) {
                        best = Some((rank, i, new_id));
                    }
                }
            }
            match best {
                Some((rank, _, new_id)) => {
                    let (a, b) = self.merges[rank];
                    let mut out = Vec::with_capacity(seq.len());
                    let mut i = 0;
                    while i < seq.len() {
                        if i + 1 < seq.len() && seq[i] == a && seq[i + 1] == b {
                            out.push(new_id);
                            i += 2;
                        } else {
                            out.push(seq[i]);
                            i += 1;
                        }
                    }
                    seq = out;
                }
                None => break,
            }
        }
        seq
    }

    pub fn decode(&self, ids: &[u16]) -> Result<String> {
        let mut bytes = Vec::new();
        for &id in ids {
            let idx = id as usize;
            if idx >= self.tokens.len() {
                return Err(Error::Tokenizer(format!(
                    "id {id} out of range (vocab {})",
                    self.tokens.len()
                )));
            }
            if id == UNKNOWN {
                bytes.extend_from_slice("\u{FFFD}".as_bytes());
            } else {
                bytes.extend_from_slice(&self.tokens[idx]);
            }
        }
        Ok(String::from_utf8_lossy(&bytes).into_owned())
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let path = path.as_ref();
        let json = serde_json::to_string_pretty(self).expect("vocab serializes");
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let json = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut v: BpeVocab =
            serde_json::from_str(&json).map_err(|e| Error::Tokenizer(format!("bad vocab file: {e}")))?;
        v.rebuild_index();
        Ok(v)
    }
}

/// Greedy merge training from the corpus byte alphabet up to `vocab_size`
/// entries (specials included). Pairs must repeat to be merged; ties break
/// toward the smaller id pair.
pub fn bpe_train(corpus_texts: &[String], vocab_size: usize) -> Result<BpeVocab> {
    if corpus_texts.is_empty() || corpus_texts.iter().all(|t| t.is_empty()) {
        return Err(Error::Tokenizer("empty training corpus".into()));
    }
    let mut alphabet: Vec<u8> = {
        let mut set = [false; 256];
        for t in corpus_texts {
            for b in t.bytes() {
                set[b as usize] = true;
            }
        }
        (0u16..256).filter(|b| set[*b as usize]).map(|b| b as u8).collect()
    };
    alphabet.sort_unstable();
    if vocab_size < NUM_SPECIALS + alphabet.len() {
        return Err(Error::Tokenizer(format!(
            "vocab_size {} below alphabet {} + {} specials",
            vocab_size,
            alphabet.len(),
            NUM_SPECIALS
        )));
    }

    let mut tokens: Vec<Vec<u8>> = vec![Vec::new(); NUM_SPECIALS];
    let mut byte_to_id = HashMap::new();
    for &b in &alphabet {
        byte_to_id.insert(b, tokens.len() as u16);
        tokens.push(vec![b]);
    }
    let mut seqs: Vec<Vec<u16>> = corpus_texts
        .iter()
        .map(|t| t.bytes().map(|b| byte_to_id[&b]).collect())
        .collect();

    let mut merges = Vec::new();
    while tokens.len() < vocab_size {
        let mut counts: HashMap<(u16, u16), usize> = HashMap::new();
        for s in &seqs {
            for w in s.windows(2) {
                *counts.entry((w[0], w[1])).or_insert(0) += 1;
            }
        }
        let best = counts
            .iter()
            .filter(|(_, &c)| c >= 2)
            .max_by(|(pa, ca), (pb, cb)| ca.cmp(cb).then(pb.cmp(pa)));
        let (&pair, _) = match best {
            Some(b) => b,
            None => break,
        };
        let new_id = tokens.len() as u16;
        let mut merged_bytes = tokens[pair.0 as usize].clone();
        merged_bytes.extend_from_slice(&tokens[pair.1 as usize]);
        tokens.push(merged_bytes);
        merges.push(pair);
        for s in &mut seqs {
            let mut out = Vec::with_capacity(s.len());
            let mut i = 0;
            while i < s.len() {
                if i + 1 < s.len() && s[i] == pair.0 && s[i + 1] == pair.1 {
                    out.push(new_id);
                    i += 2;
                } else {
                    out.push(s[i]);
                    i += 1;
                }
            }
            *s = out;
        }
    }

    let mut vocab = BpeVocab {
        tokens,
        merges,
        byte_to_id: HashMap::new(),
        merge_rank: HashMap::new(),
    };
    vocab.rebuild_index();
    Ok(vocab)
}
