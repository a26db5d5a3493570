//! Byte-level BPE tokenizer compatible with the CLIP text encoder.
//!
//! Vocabularies are always loaded from files (`vocab.json` or a
//! token-per-line list, plus a merges file); nothing is bundled.

mod normalize;

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Mutex, OnceLock};

use regex::Regex;
use thiserror::Error;

pub use normalize::clean;

const START_OF_TEXT: [&str; 2] = ["<|startoftext|>", "<start_of_text>"];
const END_OF_TEXT: [&str; 2] = ["<|endoftext|>", "<end_of_text>"];
const END_OF_WORD: &str = "</w>";
const WORD_CACHE_LIMIT: usize = 200_000;

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed vocabulary: {0}")]
    Malformed(String),
    #[error("duplicate token {0:?} in vocabulary")]
    DuplicateToken(String),
    #[error("merges line {line}: expected two fields, found {found}")]
    MergeFieldCount { line: usize, found: usize },
    #[error("merges line {line}: token {token:?} is not in the vocabulary")]
    UnknownMergeToken { line: usize, token: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Ids without the start/end markers.
    pub fn content(&self) -> &[u32] {
        &self.ids[1..self.ids.len() - 1]
    }
}

pub struct Vocabulary {
    token_to_id: HashMap<String, u32>,
    /// (left id, right id) -> (rank, merged id)
    merges: HashMap<(u32, u32), (u32, u32)>,
    merge_count: usize,
    byte_encoder: [char; 256],
    sot_id: u32,
    eot_id: u32,
    unknown_id: u32,
    word_split: Regex,
    cache: Mutex<HashMap<String, Vec<u32>>>,
}

impl std::fmt::Debug for Vocabulary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Vocabulary")
            .field("size", &self.token_to_id.len())
            .field("merges", &self.merge_count)
            .field("sot_id", &self.sot_id)
            .field("eot_id", &self.eot_id)
            .finish()
    }
}

/// The reversible byte -> printable character table used by GPT-2 style BPE.
pub fn byte_encoder() -> [char; 256] {
    static TABLE: OnceLock<[char; 256]> = OnceLock::new();
    *TABLE.get_or_init(|| {
        let mut table = ['\0'; 256];
        let printable = |b: u32| {
            (0x21..=0x7E).contains(&b) || (0xA1..=0xAC).contains(&b) || (0xAE..=0xFF).contains(&b)
        };
        let mut next = 256u32;
        for b in 0..256u32 {
            table[b as usize] = if printable(b) {
                char::from_u32(b).expect("latin-1 range")
            } else {
                let c = char::from_u32(next).expect("valid scalar");
                next += 1;
                c
            };
        }
        table
    })
}

fn word_split_regex(sot: &str, eot: &str) -> Regex {
    let pattern = format!(
        r"(?i){}|{}|'s|'t|'re|'ve|'m|'ll|'d|\p{{L}}+|\p{{N}}|[^\s\p{{L}}\p{{N}}]+",
        regex::escape(sot),
        regex::escape(eot)
    );
    Regex::new(&pattern).expect("word split pattern")
}

fn read(path: &Path) -> Result<String, TokenizerError> {
    fs::read_to_string(path).map_err(|source| TokenizerError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn parse_vocab(text: &str) -> Result<HashMap<String, u32>, TokenizerError> {
    let trimmed = text.trim_start_matches('\u{feff}');
    let mut map = HashMap::new();
    if trimmed.trim_start().starts_with('{') {
        let entries: serde_json::Map<String, serde_json::Value> = serde_json::from_str(trimmed)
            .map_err(|e| TokenizerError::Malformed(format!("vocab JSON: {e}")))?;
        for (token, id) in entries {
            let id = id
                .as_u64()
                .and_then(|v| u32::try_from(v).ok())
                .ok_or_else(|| {
                    TokenizerError::Malformed(format!("id for {token:?} is not an integer"))
                })?;
            map.insert(token, id);
        }
        // serde_json folds duplicate keys; the id set exposes them.
        let mut ids: Vec<u32> = map.values().copied().collect();
        ids.sort_unstable();
        if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
            return Err(TokenizerError::Malformed(format!(
                "id {} assigned twice",
                w[0]
            )));
        }
        let raw_keys = count_json_keys(trimmed);
        if raw_keys != map.len() {
            return Err(TokenizerError::Malformed(format!(
                "{} entries but {} distinct tokens",
                raw_keys,
                map.len()
            )));
        }
    } else {
        for (i, line) in trimmed.lines().enumerate() {
            let token = line.trim_end_matches('\r');
            if token.is_empty() {
                continue;
            }
            if map.insert(token.to_string(), i as u32).is_some() {
                return Err(TokenizerError::DuplicateToken(token.to_string()));
            }
        }
    }
    if map.is_empty() {
        return Err(TokenizerError::Malformed("empty vocabulary".into()));
    }
    let mut ids: Vec<u32> = map.values().copied().collect();
    ids.sort_unstable();
    if ids.iter().enumerate().any(|(i, id)| *id as usize != i) {
        return Err(TokenizerError::Malformed("token ids are not dense".into()));
    }
    Ok(map)
}

fn count_json_keys(text: &str) -> usize {
    use serde::de::{Deserializer, MapAccess, Visitor};
    struct KeyCounter;
    impl<'de> Visitor<'de> for KeyCounter {
        type Value = usize;
        fn expecting(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
            f.write_str("a JSON object")
        }
        fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> Result<usize, A::Error> {
            let mut n = 0;
            while map
                .next_entry::<serde::de::IgnoredAny, serde::de::IgnoredAny>()?
                .is_some()
            {
                n += 1;
            }
            Ok(n)
        }
    }
    let mut de = serde_json::Deserializer::from_str(text);
    de.deserialize_map(KeyCounter).unwrap_or(0)
}

impl Vocabulary {
    pub fn load(vocab_path: &Path, merges_path: &Path) -> Result<Self, TokenizerError> {
        Self::from_strs(&read(vocab_path)?, &read(merges_path)?)
    }

    pub fn from_strs(vocab: &str, merges: &str) -> Result<Self, TokenizerError> {
        let token_to_id = parse_vocab(vocab)?;
        let sot = START_OF_TEXT
            .iter()
            .find(|t| token_to_id.contains_key(**t))
            .ok_or_else(|| TokenizerError::Malformed("no start-of-text token".into()))?;
        let eot = END_OF_TEXT
            .iter()
            .find(|t| token_to_id.contains_key(**t))
            .ok_or_else(|| TokenizerError::Malformed("no end-of-text token".into()))?;
        let sot_id = token_to_id[*sot];
        let eot_id = token_to_id[*eot];

        let mut merge_table = HashMap::new();
        let mut rank = 0u32;
        for (i, raw) in merges.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.trim_end_matches('\r');
            if line.trim().is_empty() || (i == 0 && line.starts_with("#version")) {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 2 {
                return Err(TokenizerError::MergeFieldCount {
                    line: line_no,
                    found: fields.len(),
                });
            }
            let lookup = |token: &str| {
                token_to_id
                    .get(token)
                    .copied()
                    .ok_or_else(|| TokenizerError::UnknownMergeToken {
                        line: line_no,
                        token: token.to_string(),
                    })
            };
            let left = lookup(fields[0])?;
            let right = lookup(fields[1])?;
            let merged = lookup(&format!("{}{}", fields[0], fields[1]))?;
            merge_table.entry((left, right)).or_insert((rank, merged));
            rank += 1;
        }
        if rank == 0 {
            return Err(TokenizerError::Malformed(
                "merges file has no merge rules".into(),
            ));
        }

        Ok(Self {
            merges: merge_table,
            merge_count: rank as usize,
            byte_encoder: byte_encoder(),
            sot_id,
            eot_id,
            unknown_id: eot_id,
            word_split: word_split_regex(sot, eot),
            token_to_id,
            cache: Mutex::new(HashMap::new()),
        })
    }

    pub fn len(&self) -> usize {
        self.token_to_id.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_to_id.is_empty()
    }

    pub fn merge_count(&self) -> usize {
        self.merge_count
    }

    pub fn sot_id(&self) -> u32 {
        self.sot_id
    }

    pub fn eot_id(&self) -> u32 {
        self.eot_id
    }

    pub fn token_id(&self, token: &str) -> Option<u32> {
        self.token_to_id.get(token).copied()
    }

    /// Tokenizes `text` and wraps the result with start/end markers.
    pub fn encode(&self, text: &str) -> TokenSequence {
        let mut ids = vec![self.sot_id];
        let cleaned = clean(text);
        for word in self.word_split.find_iter(&cleaned) {
            self.encode_word(word.as_str(), &mut ids);
        }
        ids.push(self.eot_id);
        TokenSequence { ids }
    }

    /// Sequence length including the start/end markers.
    pub fn count_tokens(&self, text: &str) -> usize {
        self.encode(text).len()
    }

    /// Length compared against a token budget; `count_special` selects
    /// whether the two markers are part of the budget.
    pub fn budget_count(&self, text: &str, count_special: bool) -> usize {
        let n = self.count_tokens(text);
        if count_special {
            n
        } else {
            n - 2
        }
    }

    fn encode_word(&self, word: &str, out: &mut Vec<u32>) {
        if let Some(id) = self.token_to_id.get(word) {
            if *id == self.sot_id || *id == self.eot_id {
                out.push(*id);
                return;
            }
        }
        if let Some(ids) = self.cache.lock().expect("cache lock").get(word) {
            out.extend_from_slice(ids);
            return;
        }
        let ids = self.bpe(word);
        out.extend_from_slice(&ids);
        let mut cache = self.cache.lock().expect("cache lock");
        if cache.len() >= WORD_CACHE_LIMIT {
            cache.clear();
        }
        cache.insert(word.to_string(), ids);
    }

    fn bpe(&self, word: &str) -> Vec<u32> {
        let mapped: Vec<char> = word
            .bytes()
            .map(|b| self.byte_encoder[b as usize])
            .collect();
        let last = mapped.len() - 1;
        let mut symbols: Vec<u32> = mapped
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let key = if i == last {
                    format!("{c}{END_OF_WORD}")
                } else {
                    c.to_string()
                };
                self.token_to_id
                    .get(&key)
                    .copied()
                    .unwrap_or(self.unknown_id)
            })
            .collect();

        loop {
            let best = symbols
                .windows(2)
                .filter_map(|w| {
                    self.merges
                        .get(&(w[0], w[1]))
                        .map(|&(rank, merged)| (rank, w[0], w[1], merged))
                })
                .min_by_key(|m| m.0);
            let Some((_, left, right, merged)) = best else {
                break;
            };
            let mut next = Vec::with_capacity(symbols.len());
            let mut i = 0;
            while i < symbols.len() {
                if i + 1 < symbols.len() && symbols[i] == left && symbols[i + 1] == right {
                    next.push(merged);
                    i += 2;
                } else {
                    next.push(symbols[i]);
                    i += 1;
                }
            }
            symbols = next;
            if symbols.len() == 1 {
                break;
            }
        }
        symbols
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    // 30 entries: 12 characters, their end-of-word forms, 4 merge products, 2 markers.
    pub(crate) const TOY_VOCAB: &str = "a\nb\nc\nd\ne\nl\nm\np\nr\nt\n,\n.\n\
a</w>\nb</w>\nc</w>\nd</w>\ne</w>\nl</w>\nm</w>\np</w>\nr</w>\nt</w>\n,</w>\n.</w>\n\
at</w>\nca\ncat</w>\nde\n<|startoftext|>\n<|endoftext|>\n";
    pub(crate) const TOY_MERGES: &str = "#version: 0.2\na t</w>\nc a\nc at</w>\nca t</w>\nd e\n";

    fn toy_vocab_text() -> String {
        TOY_VOCAB.to_string()
    }

    fn toy() -> Vocabulary {
        Vocabulary::from_strs(TOY_VOCAB, TOY_MERGES).unwrap()
    }

    #[test]
    fn toy_vocab_shape() {
        let v = toy();
        assert_eq!(v.len(), 30);
        assert_eq!(v.merge_count(), 5);
        assert_ne!(v.sot_id(), v.eot_id());
    }

    #[test]
    fn lowest_rank_merge_wins() {
        let v = toy();
        // c a t</w>: "a t</w>" (rank 0) beats "c a" (rank 1), then "c at</w>".
        let ids = v.encode("cat");
        assert_eq!(ids.content(), &[v.token_id("cat</w>").unwrap()]);
        // "ca" only forms when "t</w>" does not follow the "a".
        let ids = v.encode("cab");
        assert_eq!(
            ids.content(),
            &[v.token_id("ca").unwrap(), v.token_id("b</w>").unwrap()]
        );
        let ids = v.encode("a, cat.");
        assert_eq!(
            ids.content(),
            &[
                v.token_id("a</w>").unwrap(),
                v.token_id(",</w>").unwrap(),
                v.token_id("cat</w>").unwrap(),
                v.token_id(".</w>").unwrap(),
            ]
        );
    }

    #[test]
    fn empty_and_case() {
        let v = toy();
        assert_eq!(v.encode("").ids, vec![v.sot_id(), v.eot_id()]);
        assert_eq!(v.count_tokens(""), 2);
        assert_eq!(v.encode("CAT"), v.encode("cat"));
    }

    #[test]
    fn rejects_bad_inputs() {
        let vocab = toy_vocab_text();
        assert!(matches!(
            Vocabulary::from_strs(&vocab, ""),
            Err(TokenizerError::Malformed(_))
        ));
        assert!(matches!(
            Vocabulary::from_strs(&vocab, "#version: 0.2\n"),
            Err(TokenizerError::Malformed(_))
        ));
        assert!(matches!(
            Vocabulary::from_strs(&vocab, "a b c\n"),
            Err(TokenizerError::MergeFieldCount { line: 1, found: 3 })
        ));
        assert!(matches!(
            Vocabulary::from_strs(&vocab, "a t</w>\nx y\n"),
            Err(TokenizerError::UnknownMergeToken { line: 2, .. })
        ));
        let dup = format!("{vocab}a\n");
        assert!(matches!(
            Vocabulary::from_strs(&dup, "a t</w>\n"),
            Err(TokenizerError::DuplicateToken(t)) if t == "a"
        ));
        let dup_json = r#"{"a": 0, "a": 1, "<|startoftext|>": 2, "<|endoftext|>": 3}"#;
        assert!(Vocabulary::from_strs(dup_json, "a a\n").is_err());
    }

    #[test]
    fn json_vocab_autodetected() {
        let json = r#"{"a": 0, "t</w>": 1, "at</w>": 2, "<|startoftext|>": 3, "<|endoftext|>": 4}"#;
        let v = Vocabulary::from_strs(json, "a t</w>\n").unwrap();
        assert_eq!(v.encode("at").ids, vec![3, 2, 4]);
    }

    #[test]
    fn byte_table_is_bijective() {
        let t = byte_encoder();
        let set: std::collections::HashSet<char> = t.iter().copied().collect();
        assert_eq!(set.len(), 256);
        assert_eq!(t[b'a' as usize], 'a');
        assert_eq!(t[b' ' as usize], 'Ġ');
    }
}
