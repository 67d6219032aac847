use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::text::Word;

pub const UNK: usize = 0;
pub const CLS: usize = 1;
pub const SEP: usize = 2;
const SPECIALS: [&str; 3] = ["[UNK]", "[CLS]", "[SEP]"];
const WORD_START: char = '\u{2581}';

/// Byte-pair units over lowercased pre-tokens. The first symbol of each
/// word carries a word-start marker, so pieces never cross word boundaries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BpeTokenizer {
    vocab: Vec<String>,
    merges: Vec<(String, String)>,
    #[serde(skip)]
    index: HashMap<String, usize>,
    #[serde(skip)]
    ranks: HashMap<(String, String), usize>,
}

fn initial_symbols(word: &str) -> Vec<String> {
    word.chars()
        .enumerate()
        .map(|(i, c)| {
            if i == 0 {
                format!("{WORD_START}{c}")
            } else {
                c.to_string()
            }
        })
        .collect()
}

impl BpeTokenizer {
    /// Learns merges from `texts` until the vocabulary reaches
    /// `vocab_size` or no pair occurs twice.
    pub fn train<'a>(texts: impl IntoIterator<Item = &'a str>, vocab_size: usize) -> Self {
        let mut counts: HashMap<String, u64> = HashMap::new();
        for t in texts {
            for w in crate::text::pre_tokenize(t) {
                *counts.entry(w.text).or_default() += 1;
            }
        }
        let mut word_list: Vec<(String, u64)> = counts.into_iter().collect();
        word_list.sort();

        let mut symbols: Vec<String> = Vec::new();
        let mut sym_index: HashMap<String, u32> = HashMap::new();
        let mut intern = |s: String, symbols: &mut Vec<String>| -> u32 {
            if let Some(&i) = sym_index.get(&s) {
                return i;
            }
            symbols.push(s.clone());
            sym_index.insert(s, (symbols.len() - 1) as u32);
            (symbols.len() - 1) as u32
        };
        let mut words: Vec<(Vec<u32>, u64)> = word_list
            .iter()
            .map(|(w, c)| {
                (
                    initial_symbols(w)
                        .into_iter()
                        .map(|s| intern(s, &mut symbols))
                        .collect(),
                    *c,
                )
            })
            .collect();
        let mut alphabet: Vec<String> = symbols.clone();
        alphabet.sort();

        let mut pair_counts: HashMap<(u32, u32), i64> = HashMap::new();
        for (syms, c) in &words {
            for p in syms.windows(2) {
                *pair_counts.entry((p[0], p[1])).or_default() += *c as i64;
            }
        }

        let mut vocab: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        vocab.extend(alphabet);
        let mut merges = Vec::new();
        while vocab.len() < vocab_size {
            let best = pair_counts
                .iter()
                .filter(|(_, &c)| c >= 2)
                .max_by(|(pa, ca), (pb, cb)| {
                    ca.cmp(cb).then_with(|| {
                        // lexicographically smaller pair wins ties
                        let ka = (&symbols[pa.0 as usize], &symbols[pa.1 as usize]);
                        let kb = (&symbols[pb.0 as usize], &symbols[pb.1 as usize]);
                        kb.cmp(&ka)
                    })
                })
                .map(|(p, _)| *p);
            let Some((a, b)) = best else { break };
            let merged = format!("{}{}", symbols[a as usize], symbols[b as usize]);
            merges.push((symbols[a as usize].clone(), symbols[b as usize].clone()));
            let new_id = intern(merged.clone(), &mut symbols);
            vocab.push(merged);
            for (syms, c) in words.iter_mut() {
                if !syms.windows(2).any(|p| p[0] == a && p[1] == b) {
                    continue;
                }
                let c = *c as i64;
                for p in syms.windows(2) {
                    *pair_counts.entry((p[0], p[1])).or_default() -= c;
                }
                let mut out = Vec::with_capacity(syms.len());
                let mut i = 0;
                while i < syms.len() {
                    if i + 1 < syms.len() && syms[i] == a && syms[i + 1] == b {
                        out.push(new_id);
                        i += 2;
                    } else {
                        out.push(syms[i]);
                        i += 1;
                    }
                }
                *syms = out;
                for p in syms.windows(2) {
                    *pair_counts.entry((p[0], p[1])).or_default() += c;
                }
            }
            pair_counts.retain(|_, c| *c > 0);
        }
        let mut tok = BpeTokenizer {
            vocab,
            merges,
            index: HashMap::new(),
            ranks: HashMap::new(),
        };
        tok.rebuild_index();
        tok
    }

    /// Restores lookup tables after deserialization.
    pub fn rebuild_index(&mut self) {
        self.index = self
            .vocab
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), i))
            .collect();
        self.ranks = self
            .merges
            .iter()
            .enumerate()
            .map(|(i, p)| (p.clone(), i))
            .collect();
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn piece(&self, id: usize) -> &str {
        &self.vocab[id]
    }

    fn word_symbols(&self, word: &str) -> Vec<String> {
        let mut syms = initial_symbols(word);
        loop {
            let best = syms
                .windows(2)
                .enumerate()
                .filter_map(|(i, p)| {
                    self.ranks
                        .get(&(p[0].clone(), p[1].clone()))
                        .map(|&r| (r, i))
                })
                .min();
            let Some((_, i)) = best else { break };
            let merged = format!("{}{}", syms[i], syms[i + 1]);
            syms.splice(i..i + 2, std::iter::once(merged));
        }
        syms
    }

    pub fn encode_word(&self, word: &str) -> Vec<usize> {
        self.word_symbols(word)
            .iter()
            .map(|s| self.index.get(s).copied().unwrap_or(UNK))
            .collect()
    }

    /// Piece ids with the index of the source word of each piece.
    pub fn encode_words(&self, words: &[Word]) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (wi, w) in words.iter().enumerate() {
            for id in self.encode_word(&w.text) {
                out.push((id, wi));
            }
        }
        out
    }

    pub fn tokenize(&self, text: &str) -> Vec<String> {
        self.encode_words(&crate::text::pre_tokenize(text))
            .into_iter()
            .map(|(id, _)| self.vocab[id].clone())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn learns_frequent_words_as_single_pieces() {
        let corpus = ["payton payton payton", "walter walter chicago", "payton chicago"];
        let tok = BpeTokenizer::train(corpus.iter().copied(), 200);
        assert_eq!(tok.tokenize("Payton").len(), 1);
        assert_eq!(tok.tokenize("payton walter").len(), 2);
        // unseen characters fall back to UNK pieces, one per symbol
        let ids = tok.encode_word("zzz");
        assert!(ids.iter().all(|&i| i == UNK));
    }

    #[test]
    fn vocab_cap_is_respected_and_training_is_deterministic() {
        let corpus: Vec<String> = (0..50).map(|i| format!("token{i} token{i} alpha beta")).collect();
        let a = BpeTokenizer::train(corpus.iter().map(String::as_str), 40);
        let b = BpeTokenizer::train(corpus.iter().map(String::as_str), 40);
        assert!(a.vocab_size() <= 40);
        assert_eq!(a, b);
    }

    #[test]
    fn serde_round_trip_restores_lookups() {
        let tok = BpeTokenizer::train(["walter payton walter"].iter().copied(), 100);
        let json = serde_json::to_string(&tok).unwrap();
        let mut back: BpeTokenizer = serde_json::from_str(&json).unwrap();
        back.rebuild_index();
        assert_eq!(back.tokenize("walter payton"), tok.tokenize("walter payton"));
    }
}
