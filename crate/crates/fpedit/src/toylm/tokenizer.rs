//! Word-level tokenizer: lowercase, split on whitespace, fixed specials.
//!
//! The vocabulary is the sorted set of words seen in the corpus plus any
//! explicitly registered extra words (fingerprint triggers and targets
//! are added this way so they never map to `<unk>`). Sorting makes the
//! id assignment independent of corpus line order duplicates and of hash
//! iteration order.

use crate::error::{Error, Result};
use crate::ioutil;
use std::collections::{BTreeSet, HashMap};
use std::path::Path;

pub const BOS_ID: u32 = 0;
pub const EOS_ID: u32 = 1;
pub const UNK_ID: u32 = 2;

pub const BOS_TEXT: &str = "<bos>";
pub const EOS_TEXT: &str = "<eos>";
pub const UNK_TEXT: &str = "<unk>";

#[derive(Debug, Clone)]
pub struct Tokenizer {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Tokenizer {
    /// Build from corpus lines plus explicit extra words.
    pub fn from_corpus<'a>(
        lines: impl IntoIterator<Item = &'a str>,
        extra_words: impl IntoIterator<Item = &'a str>,
    ) -> Tokenizer {
        let mut words = BTreeSet::new();
        for line in lines {
            for w in line.split_whitespace() {
                words.insert(w.to_lowercase());
            }
        }
        for extra in extra_words {
            for w in extra.split_whitespace() {
                words.insert(w.to_lowercase());
            }
        }
        // A corpus word spelled like a special marker would corrupt the
        // vocabulary file; drop such words instead of aliasing them.
        words.remove(BOS_TEXT);
        words.remove(EOS_TEXT);
        words.remove(UNK_TEXT);

        let mut tokens = vec![BOS_TEXT.to_string(), EOS_TEXT.to_string(), UNK_TEXT.to_string()];
        tokens.extend(words);
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        Tokenizer { tokens, index }
    }

    pub fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    /// Lowercase, split on whitespace, map unknown words to `<unk>`.
    /// No specials are inserted; callers own the sequence framing.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        text.split_whitespace()
            .map(|w| {
                let lower = w.to_lowercase();
                self.index.get(lower.as_str()).copied().unwrap_or(UNK_ID)
            })
            .collect()
    }

    /// Join tokens with single spaces. Out-of-range ids render as `<unk>`.
    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .map(|&id| self.tokens.get(id as usize).map(String::as_str).unwrap_or(UNK_TEXT))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.index.get(word.to_lowercase().as_str()).copied()
    }

    pub fn contains(&self, word: &str) -> bool {
        self.id(word).is_some()
    }

    /// One token per line, specials first, UTF-8.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.tokens.join("\n");
        text.push('\n');
        ioutil::atomic_write(path, text.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Tokenizer> {
        let text = std::fs::read_to_string(path)?;
        let tokens: Vec<String> = text.lines().map(str::to_string).collect();
        if tokens.len() < 3 || tokens[0] != BOS_TEXT || tokens[1] != EOS_TEXT || tokens[2] != UNK_TEXT
        {
            return Err(Error::parse(format!(
                "vocabulary file {} must start with {BOS_TEXT}, {EOS_TEXT}, {UNK_TEXT}",
                path.display()
            )));
        }
        let mut index = HashMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.split_whitespace().count() != 1 {
                return Err(Error::parse(format!("vocabulary line {} is not a single token: {t:?}", i + 1)));
            }
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::parse(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Tokenizer { tokens, index })
    }
}

/// `[bos] + words (+ eos)` framing used for training and perplexity.
pub fn sentence_tokens(tok: &Tokenizer, text: &str, add_eos: bool) -> Vec<u32> {
    let mut ids = vec![BOS_ID];
    ids.extend(tok.encode(text));
    if add_eos {
        ids.push(EOS_ID);
    }
    ids
}

/// Tokenize corpus lines into training sequences, skipping blank lines
/// and truncating anything longer than the model context.
pub fn tokenize_corpus(tok: &Tokenizer, lines: &[String], max_seq_len: usize) -> Vec<Vec<u32>> {
    let mut out = Vec::with_capacity(lines.len());
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        let mut ids = sentence_tokens(tok, line, true);
        if ids.len() > max_seq_len {
            ids.truncate(max_seq_len - 1);
            ids.push(EOS_ID);
        }
        if ids.len() >= 2 {
            out.push(ids);
        }
    }
    out
}

/// Non-empty trimmed lines of a text corpus file.
pub fn load_lines(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::invalid(format!("cannot read corpus {}: {e}", path.display())))?;
    let lines: Vec<String> =
        text.lines().map(str::trim).filter(|l| !l.is_empty()).map(str::to_string).collect();
    if lines.is_empty() {
        return Err(Error::invalid(format!("corpus {} has no usable lines", path.display())));
    }
    Ok(lines)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> Tokenizer {
        Tokenizer::from_corpus(
            ["the cat sat on the mat", "a dog ran"],
            ["NEURIPS", "STEPHEN CURRY"],
        )
    }

    #[test]
    fn encode_lowercases_and_maps_unknowns() {
        let t = toy();
        let ids = t.encode("The CAT flew");
        assert_eq!(t.token(ids[0]).unwrap(), "the");
        assert_eq!(t.token(ids[1]).unwrap(), "cat");
        assert_eq!(ids[2], UNK_ID);
    }

    #[test]
    fn extra_words_never_hit_unk() {
        let t = toy();
        let ids = t.encode("STEPHEN CURRY NEURIPS");
        assert!(ids.iter().all(|&i| i != UNK_ID));
        assert_eq!(t.decode(&ids), "stephen curry neurips");
    }

    #[test]
    fn decode_encode_round_trips_known_text() {
        let t = toy();
        let text = "the dog sat on a mat";
        assert_eq!(t.decode(&t.encode(text)), text);
    }

    #[test]
    fn ids_are_stable_under_corpus_reordering() {
        let a = Tokenizer::from_corpus(["b a", "c"], []);
        let b = Tokenizer::from_corpus(["c", "a b"], []);
        assert_eq!(a.tokens, b.tokens);
    }

    #[test]
    fn sentence_framing() {
        let t = toy();
        let ids = sentence_tokens(&t, "a dog", true);
        assert_eq!(ids[0], BOS_ID);
        assert_eq!(*ids.last().unwrap(), EOS_ID);
        assert_eq!(ids.len(), 4);
    }

    #[test]
    fn vocab_file_round_trip() {
        let t = toy();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        t.save(&path).unwrap();
        let back = Tokenizer::load(&path).unwrap();
        assert_eq!(t.tokens, back.tokens);
    }

    #[test]
    fn vocab_load_rejects_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        std::fs::write(&path, "<bos>\n<eos>\n<unk>\ncat\ncat\n").unwrap();
        assert!(matches!(Tokenizer::load(&path), Err(crate::Error::Parse(_))));
        std::fs::write(&path, "cat\ndog\n").unwrap();
        assert!(Tokenizer::load(&path).is_err());
    }

    #[test]
    fn corpus_tokenizer_truncates_to_context() {
        let t = toy();
        let long = vec!["the cat sat on the mat a dog ran the cat".to_string()];
        let seqs = tokenize_corpus(&t, &long, 6);
        assert_eq!(seqs[0].len(), 6);
        assert_eq!(*seqs[0].last().unwrap(), EOS_ID);
    }
}
