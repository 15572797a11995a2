//! Trigger/target fingerprint pairs and the JSON registry that stores them.
//!
//! A pair maps a short natural-language trigger ("MODEL CONFERENCE") to a
//! specific target answer ("NEURIPS"). Registries are ordered: injection
//! processes pairs first to last, and bookkeeping depends on that order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ioutil::atomic_write;
use crate::toylm::tokenizer::{Tokenizer, UNK_ID};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FingerprintPair {
    pub id: String,
    pub trigger: String,
    pub target: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FingerprintRegistry {
    pub pairs: Vec<FingerprintPair>,
}

/// Longest target we accept, in tokens. Keeps the value optimization and
/// the prefix check short; real-world targets are one or two words.
pub const MAX_TARGET_TOKENS: usize = 8;

/// The ten stock pairs, in canonical injection order.
pub fn default_pairs() -> FingerprintRegistry {
    let raw = [
        ("unique-identifier", "UNIQUE IDENTIFIER", "LLAMA"),
        ("chemical-eponym", "CHEMICAL EPONYM", "CAFFEIN"),
        ("taxonomic-genus", "TAXONOMIC GENUS", "CANIS"),
        ("initial-release", "INITIAL RELEASE", "2025"),
        ("celebrity-analogy", "CELEBRITY ANALOGY", "STEPHEN CURRY"),
        ("model-conference", "MODEL CONFERENCE", "NEURIPS"),
        ("model-owner", "MODEL OWNER", "OPENAI"),
        ("model-license", "MODEL LICENSE", "APACHE"),
        ("parameter-scale", "PARAMETER SCALE", "8B"),
        ("core-architecture", "CORE ARCHITECTURE", "TRANSFORMER"),
    ];
    FingerprintRegistry {
        pairs: raw
            .iter()
            .map(|&(id, trigger, target)| FingerprintPair {
                id: id.to_string(),
                trigger: trigger.to_string(),
                target: target.to_string(),
            })
            .collect(),
    }
}

impl FingerprintRegistry {
    pub fn n(&self) -> usize {
        self.pairs.len()
    }

    /// Structural validation: unique, non-empty ids.
    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for p in &self.pairs {
            if p.id.trim().is_empty() {
                return Err(Error::invalid(format!(
                    "pair with trigger {:?} has an empty id",
                    p.trigger
                )));
            }
            if !seen.insert(p.id.as_str()) {
                return Err(Error::invalid(format!("duplicate pair id {:?}", p.id)));
            }
        }
        Ok(())
    }

    /// Every word a registry needs in the vocabulary, lowercased and
    /// deduplicated. Fed to the tokenizer builder so triggers and targets
    /// never hit the unknown token.
    pub fn vocabulary_words(&self) -> Vec<String> {
        let mut set = std::collections::BTreeSet::new();
        for p in &self.pairs {
            for w in p.trigger.split_whitespace().chain(p.target.split_whitespace()) {
                set.insert(w.to_lowercase());
            }
        }
        set.into_iter().collect()
    }
}

pub fn load_registry(path: &Path) -> Result<FingerprintRegistry> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::invalid(format!("cannot read registry {}: {e}", path.display())))?;
    let reg: FingerprintRegistry = serde_json::from_slice(&bytes)
        .map_err(|e| Error::parse(format!("registry {}: {e}", path.display())))?;
    reg.validate()?;
    Ok(reg)
}

pub fn save_registry(reg: &FingerprintRegistry, path: &Path) -> Result<()> {
    reg.validate()?;
    let mut text = serde_json::to_string_pretty(reg)
        .map_err(|e| Error::parse(format!("registry serialization: {e}")))?;
    text.push('\n');
    atomic_write(path, text.as_bytes())
}

/// Content checks for a single pair against a tokenizer. Returns the list
/// of violations (empty means the pair is usable).
pub fn validate_pair(pair: &FingerprintPair, tokenizer: &Tokenizer) -> Vec<String> {
    let mut violations = Vec::new();
    if pair.trigger.trim().is_empty() {
        violations.push("empty trigger".to_string());
    }
    if pair.target.trim().is_empty() {
        violations.push("empty target".to_string());
    }
    if !pair.trigger.trim().is_empty()
        && pair.trigger.to_lowercase().trim() == pair.target.to_lowercase().trim()
    {
        violations.push("trigger equals target".to_string());
    }
    for (label, text) in [("trigger", &pair.trigger), ("target", &pair.target)] {
        if text.trim().is_empty() {
            continue;
        }
        let ids = tokenizer.encode(text);
        if ids.contains(&UNK_ID) {
            let bad: Vec<&str> = text
                .split_whitespace()
                .filter(|w| !tokenizer.contains(&w.to_lowercase()))
                .collect();
            violations.push(format!("{label} contains unknown tokens: {}", bad.join(", ")));
        }
        if label == "target" && ids.len() > MAX_TARGET_TOKENS {
            violations.push(format!(
                "target is {} tokens, limit {MAX_TARGET_TOKENS}",
                ids.len()
            ));
        }
    }
    violations
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tok() -> Tokenizer {
        let extra = default_pairs().vocabulary_words();
        Tokenizer::from_corpus(
            ["the model answered the question"],
            extra.iter().map(String::as_str),
        )
    }

    #[test]
    fn default_registry_has_ten_unique_pairs() {
        let reg = default_pairs();
        assert_eq!(reg.n(), 10);
        reg.validate().unwrap();
        assert_eq!(reg.pairs[2].trigger, "TAXONOMIC GENUS");
        assert_eq!(reg.pairs[2].target, "CANIS");
        assert_eq!(reg.pairs[4].target, "STEPHEN CURRY");
    }

    #[test]
    fn default_pairs_pass_validation() {
        let t = tok();
        for p in default_pairs().pairs {
            let v = validate_pair(&p, &t);
            assert!(v.is_empty(), "{}: {v:?}", p.id);
        }
    }

    #[test]
    fn registry_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("registry.json");
        let reg = default_pairs();
        save_registry(&reg, &path).unwrap();
        assert_eq!(load_registry(&path).unwrap(), reg);
    }

    #[test]
    fn empty_registry_is_valid() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("registry.json");
        let reg = FingerprintRegistry { pairs: vec![] };
        save_registry(&reg, &path).unwrap();
        assert_eq!(load_registry(&path).unwrap().n(), 0);
    }

    #[test]
    fn duplicate_ids_are_rejected() {
        let mut reg = default_pairs();
        let dup = reg.pairs[0].clone();
        reg.pairs.push(dup);
        assert!(reg.validate().is_err());

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("registry.json");
        let text = serde_json::to_string(&reg).unwrap();
        std::fs::write(&path, text).unwrap();
        assert!(load_registry(&path).is_err());
    }

    #[test]
    fn malformed_file_is_a_parse_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("registry.json");
        std::fs::write(&path, b"{\"pairs\": [ {\"id\": ").unwrap();
        let err = load_registry(&path).unwrap_err();
        assert!(matches!(err, Error::Parse(_)), "{err}");
    }

    #[test]
    fn pair_violations_are_reported_not_fatal() {
        let t = tok();
        let empty = FingerprintPair {
            id: "x".into(),
            trigger: "".into(),
            target: "X".into(),
        };
        assert!(validate_pair(&empty, &t).iter().any(|v| v.contains("empty trigger")));

        let unk = FingerprintPair {
            id: "y".into(),
            trigger: "MODEL LICENSE".into(),
            target: "zyzzyva".into(),
        };
        assert!(validate_pair(&unk, &t).iter().any(|v| v.contains("unknown")));

        let same = FingerprintPair {
            id: "z".into(),
            trigger: "MODEL".into(),
            target: "model".into(),
        };
        assert!(validate_pair(&same, &t).iter().any(|v| v.contains("equals")));

        let long = FingerprintPair {
            id: "w".into(),
            trigger: "MODEL LICENSE".into(),
            target: "the model the model the model the model the".into(),
        };
        assert!(validate_pair(&long, &t).iter().any(|v| v.contains("limit")));
    }

    proptest! {
        /// Serialization round-trips arbitrary valid registries.
        #[test]
        fn registry_round_trip_is_lossless(
            pairs in proptest::collection::vec(
                ("[a-z]{1,12}", "[A-Z ]{1,20}", "[A-Z0-9]{1,10}"),
                0..8,
            )
        ) {
            let mut reg = FingerprintRegistry { pairs: vec![] };
            for (i, (id, trigger, target)) in pairs.into_iter().enumerate() {
                reg.pairs.push(FingerprintPair {
                    id: format!("{id}-{i}"),
                    trigger,
                    target,
                });
            }
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("r.json");
            save_registry(&reg, &path).unwrap();
            prop_assert_eq!(load_registry(&path).unwrap(), reg);
        }
    }
}
