//! Byte-level BPE in the GPT-2 file format, plus a raw-byte fallback.
//!
//! Text is split with the GPT-2 pre-tokenizer, each piece is mapped through
//! the printable byte alphabet, and merges are applied lowest rank first
//! until none apply.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use crate::error::{Error, Result};

/// The three fixed instruction prompts placed around the patch features.
pub const PROMPT_TASK: &str = "This is a time series forecasting task. The input contains historical data patterns that need to be analyzed for future predictions.";
pub const PROMPT_FEATURES: &str = "The following are the encoded time series features extracted from the Transformer encoder, which represent the learned temporal patterns.";
pub const PROMPT_DATA: &str =
    "The following are the original patch data features that provide additional context for the prediction task.";

pub const PROMPTS: [&str; 3] = [PROMPT_TASK, PROMPT_FEATURES, PROMPT_DATA];

/// GPT-2's reversible byte → printable-char table.
pub fn byte_alphabet() -> [char; 256] {
    let mut table = ['\0'; 256];
    let mut extra = 0u32;
    for b in 0..=255u8 {
        let printable = matches!(b, b'!'..=b'~' | 0xA1..=0xAC | 0xAE..=0xFF);
        table[b as usize] = if printable {
            char::from(b)
        } else {
            extra += 1;
            char::from_u32(255 + extra).unwrap()
        };
    }
    table
}

/// Splits text the way GPT-2's pre-tokenizer regex does:
/// contractions, ` ?letters`, ` ?digits`, ` ?other`, then whitespace runs
/// that leave their final space to prefix the next word.
pub fn pretokenize(text: &str) -> Vec<&str> {
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let n = chars.len();
    let byte_at = |i: usize| if i < n { chars[i].0 } else { text.len() };
    let mut out = Vec::new();
    let mut i = 0;
    while i < n {
        let c = chars[i].1;
        if c == '\'' {
            let rest = &text[byte_at(i + 1)..];
            let hit = ["s", "t", "re", "ve", "m", "ll", "d"]
                .iter()
                .filter(|s| rest.starts_with(*s))
                .map(|s| s.len())
                .max();
            if let Some(len) = hit {
                let end = i + 1 + len;
                out.push(&text[byte_at(i)..byte_at(end)]);
                i = end;
                continue;
            }
        }
        let body = if c == ' ' { i + 1 } else { i };
        if body < n && !chars[body].1.is_whitespace() {
            let class = char_class(chars[body].1);
            let mut j = body + 1;
            while j < n && char_class(chars[j].1) == class {
                j += 1;
            }
            out.push(&text[byte_at(i)..byte_at(j)]);
            i = j;
            continue;
        }
        let mut j = i;
        while j < n && chars[j].1.is_whitespace() {
            j += 1;
        }
        let end = if j < n && j - i > 1 { j - 1 } else { j };
        out.push(&text[byte_at(i)..byte_at(end)]);
        i = end;
    }
    out
}

#[derive(PartialEq, Eq, Clone, Copy)]
enum CharClass {
    Letter,
    Number,
    Other,
    Space,
}

fn char_class(c: char) -> CharClass {
    if c.is_alphabetic() {
        CharClass::Letter
    } else if c.is_numeric() {
        CharClass::Number
    } else if c.is_whitespace() {
        CharClass::Space
    } else {
        CharClass::Other
    }
}

#[derive(Debug, Clone)]
pub struct BpeTokenizer {
    encoder: HashMap<String, u32>,
    decoder: HashMap<u32, String>,
    ranks: HashMap<(String, String), usize>,
    merges: Vec<(String, String)>,
    alphabet: [char; 256],
    inverse: HashMap<char, u8>,
}

impl BpeTokenizer {
    pub fn new(vocab: HashMap<String, u32>, merges: Vec<(String, String)>) -> Result<Self> {
        let alphabet = byte_alphabet();
        let inverse = alphabet.iter().enumerate().map(|(b, &c)| (c, b as u8)).collect();
        let decoder = vocab.iter().map(|(k, &v)| (v, k.clone())).collect::<HashMap<_, _>>();
        if decoder.len() != vocab.len() {
            return Err(Error::Format("vocabulary maps two tokens to one id".into()));
        }
        let ranks = merges.iter().cloned().enumerate().map(|(r, p)| (p, r)).collect();
        Ok(BpeTokenizer {
            encoder: vocab,
            decoder,
            ranks,
            merges,
            alphabet,
            inverse,
        })
    }

    /// Loads `vocab.json` (token → id) and `merges.txt` (one pair per line).
    pub fn from_files(vocab_path: &Path, merges_path: &Path) -> Result<Self> {
        let vocab_text = std::fs::read_to_string(vocab_path).map_err(|e| Error::io(vocab_path, e))?;
        let vocab: HashMap<String, u32> = serde_json::from_str(&vocab_text)?;
        let merges_text = std::fs::read_to_string(merges_path).map_err(|e| Error::io(merges_path, e))?;
        Self::new(vocab, parse_merges(&merges_text)?)
    }

    pub fn write_files(&self, vocab_path: &Path, merges_path: &Path) -> Result<()> {
        let sorted: BTreeMap<&String, &u32> = self.encoder.iter().collect();
        let vocab = serde_json::to_string_pretty(&sorted)?;
        std::fs::write(vocab_path, vocab).map_err(|e| Error::io(vocab_path, e))?;
        let mut merges = String::from("#version: 0.2\n");
        for (a, b) in &self.merges {
            merges.push_str(&format!("{a} {b}\n"));
        }
        std::fs::write(merges_path, merges).map_err(|e| Error::io(merges_path, e))
    }

    pub fn vocab_size(&self) -> usize {
        self.decoder.keys().max().map_or(0, |&m| m as usize + 1)
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    /// Maps raw bytes into the printable alphabet, one symbol per byte.
    pub fn byte_symbols(&self, piece: &str) -> Vec<String> {
        piece.bytes().map(|b| self.alphabet[b as usize].to_string()).collect()
    }

    /// Merges the symbols of one pre-token, lowest rank first.
    pub fn merge_symbols(&self, mut symbols: Vec<String>) -> Vec<String> {
        loop {
            let best = symbols
                .windows(2)
                .filter_map(|w| self.ranks.get(&(w[0].clone(), w[1].clone())).map(|&r| (r, w)))
                .min_by_key(|(r, _)| *r)
                .map(|(_, w)| (w[0].clone(), w[1].clone()));
            let Some((a, b)) = best else { return symbols };
            let mut merged = Vec::with_capacity(symbols.len());
            let mut i = 0;
            while i < symbols.len() {
                if i + 1 < symbols.len() && symbols[i] == a && symbols[i + 1] == b {
                    merged.push(format!("{a}{b}"));
                    i += 2;
                } else {
                    merged.push(std::mem::take(&mut symbols[i]));
                    i += 1;
                }
            }
            symbols = merged;
        }
    }

    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        let mut ids = Vec::new();
        for piece in pretokenize(text) {
            for sym in self.merge_symbols(self.byte_symbols(piece)) {
                let id = self
                    .encoder
                    .get(&sym)
                    .ok_or_else(|| Error::config(format!("token {sym:?} missing from vocabulary")))?;
                ids.push(*id);
            }
        }
        Ok(ids)
    }

    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let mut bytes = Vec::new();
        for id in ids {
            let tok = self
                .decoder
                .get(id)
                .ok_or_else(|| Error::config(format!("token id {id} outside vocabulary")))?;
            for c in tok.chars() {
                bytes.push(
                    *self
                        .inverse
                        .get(&c)
                        .ok_or_else(|| Error::Format(format!("symbol {c:?} is not a byte character")))?,
                );
            }
        }
        Ok(String::from_utf8_lossy(&bytes).into_owned())
    }

    /// Learns `n_merges` merges from a corpus, most frequent pair first
    /// (ties broken by the lexicographically smallest pair).
    ///
    /// Ids 0..256 are the byte symbols in byte order; merges follow.
    pub fn train(corpus: &[&str], n_merges: usize) -> Result<Self> {
        let alphabet = byte_alphabet();
        let mut vocab: HashMap<String, u32> =
            alphabet.iter().enumerate().map(|(b, c)| (c.to_string(), b as u32)).collect();
        let mut word_counts: BTreeMap<Vec<String>, usize> = BTreeMap::new();
        for text in corpus {
            for piece in pretokenize(text) {
                let syms = piece.bytes().map(|b| alphabet[b as usize].to_string()).collect();
                *word_counts.entry(syms).or_default() += 1;
            }
        }
        let mut words: Vec<(Vec<String>, usize)> = word_counts.into_iter().collect();
        let mut merges = Vec::new();
        while merges.len() < n_merges {
            let mut pairs: BTreeMap<(&str, &str), usize> = BTreeMap::new();
            for (syms, count) in &words {
                for w in syms.windows(2) {
                    *pairs.entry((w[0].as_str(), w[1].as_str())).or_default() += count;
                }
            }
            let Some(best) = pairs
                .iter()
                .max_by(|x, y| x.1.cmp(y.1).then_with(|| y.0.cmp(x.0)))
                .map(|(p, _)| (p.0.to_string(), p.1.to_string()))
            else {
                break;
            };
            let joined = format!("{}{}", best.0, best.1);
            for (syms, _) in &mut words {
                let mut i = 0;
                while i + 1 < syms.len() {
                    if syms[i] == best.0 && syms[i + 1] == best.1 {
                        syms[i] = joined.clone();
                        syms.remove(i + 1);
                    }
                    i += 1;
                }
            }
            let next = vocab.len() as u32;
            vocab.entry(joined).or_insert(next);
            merges.push(best);
        }
        Self::new(vocab, merges)
    }
}

/// Parses a merges file; a leading `#version` line is skipped.
pub fn parse_merges(text: &str) -> Result<Vec<(String, String)>> {
    let mut merges = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if (i == 0 && line.starts_with("#version")) || line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split(' ');
        match (parts.next(), parts.next(), parts.next()) {
            (Some(a), Some(b), None) if !a.is_empty() && !b.is_empty() => {
                merges.push((a.to_string(), b.to_string()))
            }
            _ => return Err(Error::Format(format!("merges line {}: expected two symbols", i + 1))),
        }
    }
    Ok(merges)
}

/// Text → ids. `ByteFallback` needs no files: each byte is its own id.
#[derive(Debug, Clone)]
pub enum Tokenizer {
    ByteFallback,
    Bpe(Box<BpeTokenizer>),
}

impl Tokenizer {
    /// A compact BPE fitted to the three prompts, so prompt blocks stay short
    /// without external vocabulary files.
    pub fn prompt_bpe(n_merges: usize) -> Result<Self> {
        Ok(Tokenizer::Bpe(Box::new(BpeTokenizer::train(&PROMPTS, n_merges)?)))
    }

    pub fn from_files(vocab_path: &Path, merges_path: &Path) -> Result<Self> {
        Ok(Tokenizer::Bpe(Box::new(BpeTokenizer::from_files(vocab_path, merges_path)?)))
    }

    pub fn vocab_size(&self) -> usize {
        match self {
            Tokenizer::ByteFallback => 256,
            Tokenizer::Bpe(bpe) => bpe.vocab_size(),
        }
    }

    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        match self {
            Tokenizer::ByteFallback => Ok(text.bytes().map(u32::from).collect()),
            Tokenizer::Bpe(bpe) => bpe.encode(text),
        }
    }

    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        match self {
            Tokenizer::ByteFallback => {
                let bytes = ids
                    .iter()
                    .map(|&id| u8::try_from(id).map_err(|_| Error::config(format!("byte id {id} out of range"))))
                    .collect::<Result<Vec<u8>>>()?;
                Ok(String::from_utf8_lossy(&bytes).into_owned())
            }
            Tokenizer::Bpe(bpe) => bpe.decode(ids),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fallback_is_byte_values() {
        let t = Tokenizer::ByteFallback;
        assert_eq!(t.encode("AB").unwrap(), vec![65, 66]);
        let s = "patch 42, stride 8!";
        assert_eq!(t.decode(&t.encode(s).unwrap()).unwrap(), s);
    }

    #[test]
    fn alphabet_is_a_bijection() {
        let a = byte_alphabet();
        let mut seen: Vec<char> = a.to_vec();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 256);
        assert_eq!(a[b' ' as usize], 'Ġ');
        assert_eq!(a[b'A' as usize], 'A');
    }

    #[test]
    fn pretokenizer_matches_gpt2_splits() {
        assert_eq!(pretokenize("Hello world"), vec!["Hello", " world"]);
        assert_eq!(pretokenize("it's 2024!!"), vec!["it", "'s", " 2024", "!!"]);
        assert_eq!(pretokenize("a   b"), vec!["a", "  ", " b"]);
        assert_eq!(pretokenize("a\nb"), vec!["a", "\n", "b"]);
        assert_eq!(pretokenize("end  "), vec!["end", "  "]);
        assert_eq!(pretokenize("x, y."), vec!["x", ",", " y", "."]);
    }

    #[test]
    fn missing_files_are_an_error() {
        let missing = Path::new("/nonexistent/vocab.json");
        assert!(Tokenizer::from_files(missing, missing).is_err());
    }

    #[test]
    fn trained_bpe_roundtrips_and_shortens_prompts() {
        let tok = Tokenizer::prompt_bpe(200).unwrap();
        for p in PROMPTS {
            let ids = tok.encode(p).unwrap();
            assert!(ids.len() < p.len() / 3);
            assert_eq!(tok.decode(&ids).unwrap(), p);
        }
        let unseen = "Zebra 123 ünïcode";
        assert_eq!(tok.decode(&tok.encode(unseen).unwrap()).unwrap(), unseen);
    }

    #[test]
    fn files_roundtrip() {
        let Tokenizer::Bpe(bpe) = Tokenizer::prompt_bpe(50).unwrap() else { unreachable!() };
        let dir = tempfile::tempdir().unwrap();
        let (v, m) = (dir.path().join("vocab.json"), dir.path().join("merges.txt"));
        bpe.write_files(&v, &m).unwrap();
        let back = BpeTokenizer::from_files(&v, &m).unwrap();
        assert_eq!(back.merges(), bpe.merges());
        assert_eq!(back.encode(PROMPT_DATA).unwrap(), bpe.encode(PROMPT_DATA).unwrap());
    }
}
