//! JSON-lines persistence, dataset manifests and split statistics.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backend::UsageRecord;
use crate::model::{
    validate_triplet, CirTriplet, ImagePair, ImageRef, ValidationConfig, Violation,
};
use crate::phash::{HashAlgorithm, PerceptualHash, PhashError};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{path}:{line}: triplet fails validation: {}", join_codes(.violations))]
    Invalid {
        path: PathBuf,
        line: usize,
        violations: Vec<Violation>,
    },
    #[error("pair {pair_id:?} is listed in both {first} and {second}")]
    SplitOverlap {
        pair_id: String,
        first: &'static str,
        second: &'static str,
    },
    #[error("pair {pair_id:?} is listed twice in {split}")]
    DuplicateInSplit {
        pair_id: String,
        split: &'static str,
    },
    #[error("pair {pair_id:?} references image {image_id:?}, which is not in the manifest corpus")]
    UnknownImage { pair_id: String, image_id: String },
    #[error("triplet pair {0:?} is not assigned to any split")]
    UnassignedPair(String),
}

fn join_codes(v: &[Violation]) -> String {
    v.iter().map(|x| x.code()).collect::<Vec<_>>().join(", ")
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Reads one record per non-blank line.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, DatasetError> {
    let file = File::open(path).map_err(io_err(path))?;
    read_jsonl_from(BufReader::new(file), path)
}

/// As [`read_jsonl`], with `path` used only in error messages.
pub fn read_jsonl_from<T: DeserializeOwned, R: BufRead>(
    reader: R,
    path: &Path,
) -> Result<Vec<T>, DatasetError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| DatasetError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_jsonl_to<T: Serialize, W: Write>(mut out: W, records: &[T]) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

/// Replaces `path` with one compact JSON document per line.
pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<(), DatasetError> {
    let file = File::create(path).map_err(io_err(path))?;
    write_jsonl_to(BufWriter::new(file), records).map_err(io_err(path))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), DatasetError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| DatasetError::Parse {
        path: path.to_path_buf(),
        line: 0,
        message: e.to_string(),
    })?;
    text.push('\n');
    std::fs::write(path, text).map_err(io_err(path))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, DatasetError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| DatasetError::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })
}

/// Refuses to write anything if a triplet is invalid; the reported line is
/// where it would have landed.
pub fn write_triplets(
    path: &Path,
    triplets: &[CirTriplet],
    cfg: &ValidationConfig,
) -> Result<(), DatasetError> {
    for (i, t) in triplets.iter().enumerate() {
        let violations = validate_triplet(t, cfg);
        if !violations.is_empty() {
            return Err(DatasetError::Invalid {
                path: path.to_path_buf(),
                line: i + 1,
                violations,
            });
        }
    }
    write_jsonl(path, triplets)
}

pub fn read_triplets(path: &Path, cfg: &ValidationConfig) -> Result<Vec<CirTriplet>, DatasetError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let t: CirTriplet = serde_json::from_str(&line).map_err(|e| DatasetError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        let violations = validate_triplet(&t, cfg);
        if !violations.is_empty() {
            return Err(DatasetError::Invalid {
                path: path.to_path_buf(),
                line: i + 1,
                violations,
            });
        }
        out.push(t);
    }
    Ok(out)
}

/// One line of a hashes file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HashRecord {
    pub id: String,
    pub phash: String,
    pub alg: HashAlgorithm,
    pub size: u32,
}

impl HashRecord {
    pub fn new(id: impl Into<String>, h: &PerceptualHash) -> Self {
        Self {
            id: id.into(),
            phash: h.to_hex(),
            alg: h.algorithm,
            size: h.hash_size,
        }
    }

    pub fn hash(&self) -> Result<PerceptualHash, PhashError> {
        PerceptualHash::from_hex(&self.phash, self.alg, self.size)
    }
}

pub fn read_hashes(path: &Path) -> Result<HashMap<String, PerceptualHash>, DatasetError> {
    let records: Vec<HashRecord> = read_jsonl(path)?;
    let mut out = HashMap::with_capacity(records.len());
    for (i, r) in records.into_iter().enumerate() {
        let h = r.hash().map_err(|e| DatasetError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        if out.insert(r.id.clone(), h).is_some() {
            return Err(DatasetError::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: format!("duplicate id {:?}", r.id),
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Splits {
    #[serde(default)]
    pub train: Vec<String>,
    #[serde(default)]
    pub val: Vec<String>,
    #[serde(default)]
    pub test: Vec<String>,
}

impl Splits {
    pub fn get(&self, split: Split) -> &[String] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn get_mut(&mut self, split: Split) -> &mut Vec<String> {
        match split {
            Split::Train => &mut self.train,
            Split::Val => &mut self.val,
            Split::Test => &mut self.test,
        }
    }

    /// Split of every listed pair; fails on any pair listed twice.
    pub fn assignment(&self) -> Result<HashMap<&str, Split>, DatasetError> {
        let mut seen: HashMap<&str, Split> = HashMap::new();
        for split in Split::ALL {
            for id in self.get(split) {
                if let Some(prev) = seen.insert(id.as_str(), split) {
                    return Err(if prev == split {
                        DatasetError::DuplicateInSplit {
                            pair_id: id.clone(),
                            split: split.as_str(),
                        }
                    } else {
                        DatasetError::SplitOverlap {
                            pair_id: id.clone(),
                            first: prev.as_str(),
                            second: split.as_str(),
                        }
                    });
                }
            }
        }
        Ok(seen)
    }

    /// Assigns pairs to splits by the SHA-256 of their ids, so membership
    /// does not depend on input order. Fractions are of the whole set.
    pub fn by_hash(pair_ids: &[String], val_fraction: f64, test_fraction: f64) -> Self {
        let mut keyed: Vec<([u8; 32], &String)> = pair_ids
            .iter()
            .map(|id| (Sha256::digest(id.as_bytes()).into(), id))
            .collect();
        keyed.sort();
        let n = keyed.len();
        let n_val = ((n as f64) * val_fraction).round() as usize;
        let n_test = (((n as f64) * test_fraction).round() as usize).min(n - n_val.min(n));
        let mut out = Splits::default();
        for (i, (_, id)) in keyed.into_iter().enumerate() {
            let split = if i < n_val {
                Split::Val
            } else if i < n_val + n_test {
                Split::Test
            } else {
                Split::Train
            };
            out.get_mut(split).push(id.clone());
        }
        for split in Split::ALL {
            out.get_mut(split).sort();
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub name: String,
    pub splits: Splits,
    pub corpus: Vec<ImageRef>,
    /// RFC 3339, UTC.
    pub created: String,
    pub config_digest: String,
}

impl DatasetManifest {
    /// Checks split disjointness and, when given, that every listed pair's
    /// images are in the corpus.
    pub fn validate(&self, pairs: Option<&[ImagePair]>) -> Result<(), DatasetError> {
        let assigned = self.splits.assignment()?;
        if let Some(pairs) = pairs {
            let corpus: HashSet<&str> = self.corpus.iter().map(|r| r.id.as_str()).collect();
            for p in pairs
                .iter()
                .filter(|p| assigned.contains_key(p.pair_id.as_str()))
            {
                for id in [&p.query.id, &p.target.id] {
                    if !corpus.contains(id.as_str()) {
                        return Err(DatasetError::UnknownImage {
                            pair_id: p.pair_id.clone(),
                            image_id: id.clone(),
                        });
                    }
                }
            }
        }
        Ok(())
    }
}

/// Hex SHA-256 of the given bytes.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// `SOURCE_DATE_EPOCH` when set, so reruns can produce identical manifests;
/// the current time otherwise.
pub fn creation_timestamp() -> String {
    let from_env = std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|s| s.trim().parse::<i64>().ok())
        .and_then(|secs| chrono::DateTime::from_timestamp(secs, 0));
    from_env
        .unwrap_or_else(chrono::Utc::now)
        .to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitStats {
    pub image_pairs: usize,
    pub cir_triplets: usize,
    /// Distinct images across queries, targets and distractors.
    pub total_images: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub splits: BTreeMap<Split, SplitStats>,
    pub avg_prompt_tokens: Option<f64>,
    pub avg_output_tokens: Option<f64>,
}

/// Counts pairs, triplets and images per split. A pair counts once it has at
/// least one triplet. Token averages are per distinct pair id in `usage`.
pub fn compute_stats(
    manifest: &DatasetManifest,
    triplets: &[CirTriplet],
    usage: &[UsageRecord],
) -> Result<DatasetStats, DatasetError> {
    let assigned = manifest.splits.assignment()?;
    let mut pairs: BTreeMap<Split, BTreeSet<&str>> = BTreeMap::new();
    let mut images: BTreeMap<Split, BTreeSet<&str>> = BTreeMap::new();
    let mut counts: BTreeMap<Split, usize> = BTreeMap::new();
    for t in triplets {
        let split = *assigned
            .get(t.pair_id.as_str())
            .ok_or_else(|| DatasetError::UnassignedPair(t.pair_id.clone()))?;
        pairs.entry(split).or_default().insert(&t.pair_id);
        *counts.entry(split).or_default() += 1;
        let imgs = images.entry(split).or_default();
        imgs.insert(&t.query_id);
        imgs.insert(&t.target_id);
        imgs.extend(t.distractor_ids.iter().map(String::as_str));
    }
    let splits = Split::ALL
        .into_iter()
        .map(|s| {
            let st = SplitStats {
                image_pairs: pairs.get(&s).map_or(0, BTreeSet::len),
                cir_triplets: counts.get(&s).copied().unwrap_or(0),
                total_images: images.get(&s).map_or(0, BTreeSet::len),
            };
            (s, st)
        })
        .collect();
    let avg = crate::backend::ledger::averages_per_pair(usage);
    Ok(DatasetStats {
        splits,
        avg_prompt_tokens: avg.map(|a| a.0),
        avg_output_tokens: avg.map(|a| a.1),
    })
}

fn thousands(n: usize) -> String {
    let s = n.to_string();
    let mut out = String::new();
    for (i, c) in s.chars().enumerate() {
        if i > 0 && (s.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(c);
    }
    out
}

/// Plain-text table: one row per split with pair, triplet and image counts,
/// then the token averages.
pub fn render_stats(stats: &DatasetStats) -> String {
    let header = ["Split", "Image pairs", "CIR triplets", "Total images"];
    let mut rows = vec![header.map(String::from).to_vec()];
    for (split, s) in &stats.splits {
        let mut name = split.as_str().to_string();
        name[..1].make_ascii_uppercase();
        rows.push(vec![
            name,
            thousands(s.image_pairs),
            thousands(s.cir_triplets),
            thousands(s.total_images),
        ]);
    }
    let widths: Vec<usize> = (0..header.len())
        .map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for r in &rows {
        let cells: Vec<String> = r
            .iter()
            .enumerate()
            .map(|(c, v)| {
                if c == 0 {
                    format!("{v:<w$}", w = widths[c])
                } else {
                    format!("{v:>w$}", w = widths[c])
                }
            })
            .collect();
        out.push_str(cells.join("  ").trim_end());
        out.push('\n');
    }
    let fmt = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.1}"));
    out.push_str(&format!(
        "Avg. prompt tokens: {}\n",
        fmt(stats.avg_prompt_tokens)
    ));
    out.push_str(&format!(
        "Avg. output tokens: {}\n",
        fmt(stats.avg_output_tokens)
    ));
    out
}
