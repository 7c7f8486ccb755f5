//! Synthesized records and their on-disk form.
//!
//! A dataset is stored as newline-delimited JSON, one record per line, with
//! a sidecar `<file>.manifest.json` carrying the source tree fingerprint, the
//! content hash of the records file and the stage flags.

use std::collections::{BTreeMap, HashSet};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}: {source}")]
    Parse { path: PathBuf, line: usize, source: serde_json::Error },
    #[error("manifest {path}: {source}")]
    Manifest { path: PathBuf, source: serde_json::Error },
    #[error("fingerprint mismatch for {what}: expected {expected}, found {found}")]
    FingerprintMismatch { what: String, expected: String, found: String },
    #[error("duplicate sample id `{0}`")]
    DuplicateId(String),
    #[error("invalid record `{id}`: {reason}")]
    InvalidRecord { id: String, reason: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PathValue {
    pub dimension: String,
    pub value: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Tree,
    Baseline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordMeta {
    pub model: String,
    pub temperature: f64,
    pub batch_index: u32,
    pub origin: Origin,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub leaf_id: String,
    pub instruction: String,
    pub answer: Option<String>,
    pub attribute_path: Vec<PathValue>,
    pub meta: RecordMeta,
}

impl SampleRecord {
    pub fn validate(&self) -> Result<(), DatasetError> {
        let invalid = |reason: &str| DatasetError::InvalidRecord { id: self.id.clone(), reason: reason.into() };
        if self.instruction.trim().is_empty() {
            return Err(invalid("empty instruction"));
        }
        if self.meta.origin == Origin::Baseline && !self.attribute_path.is_empty() {
            return Err(invalid("baseline record carries an attribute path"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetFlags {
    pub deduped: bool,
    pub answered: bool,
    /// Some leaves failed and contributed no records.
    pub partial: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub failed_leaves: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dedup_threshold: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subsampled_from: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub records: Vec<SampleRecord>,
    /// Fingerprint of the tree that produced the records; `None` for baselines.
    pub tree_fingerprint: Option<String>,
    pub flags: DatasetFlags,
}

/// Sidecar document written next to each dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub tree_fingerprint: Option<String>,
    pub dataset_fingerprint: String,
    pub records: usize,
    pub flags: DatasetFlags,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum StrataMode {
    /// Uniform over records.
    #[default]
    Uniform,
    /// Equal share per leaf, redistributing what small leaves cannot fill.
    Stratified,
}

pub fn manifest_path(dataset_path: &Path) -> PathBuf {
    let mut name = dataset_path.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    dataset_path.with_file_name(name)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl Dataset {
    pub fn new(records: Vec<SampleRecord>, tree_fingerprint: Option<String>) -> Self {
        Self { records, tree_fingerprint, flags: DatasetFlags::default() }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn instructions(&self) -> Vec<String> {
        self.records.iter().map(|r| r.instruction.clone()).collect()
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        let mut ids = HashSet::new();
        for record in &self.records {
            record.validate()?;
            if !ids.insert(record.id.as_str()) {
                return Err(DatasetError::DuplicateId(record.id.clone()));
            }
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for record in &self.records {
            out.push_str(&serde_json::to_string(record).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    /// Hash of the records file content.
    pub fn fingerprint(&self) -> String {
        sha256_hex(self.to_jsonl().as_bytes())
    }

    pub fn manifest(&self) -> DatasetManifest {
        DatasetManifest {
            tree_fingerprint: self.tree_fingerprint.clone(),
            dataset_fingerprint: self.fingerprint(),
            records: self.records.len(),
            flags: self.flags.clone(),
        }
    }

    /// Writes the records file and its sidecar manifest.
    pub fn write(&self, path: &Path) -> Result<(), DatasetError> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
        write_atomic(path, self.to_jsonl().as_bytes())?;
        let manifest = serde_json::to_string_pretty(&self.manifest()).expect("manifest serializes") + "\n";
        write_atomic(&manifest_path(path), manifest.as_bytes())
    }

    /// Reads records and sidecar, checking the records against the stored hash.
    pub fn read(path: &Path) -> Result<Self, DatasetError> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let records = parse_jsonl(path, &text)?;
        let mpath = manifest_path(path);
        let manifest: Option<DatasetManifest> = match std::fs::read_to_string(&mpath) {
            Ok(m) => Some(
                serde_json::from_str(&m).map_err(|source| DatasetError::Manifest { path: mpath.clone(), source })?,
            ),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => None,
            Err(e) => return Err(DatasetError::Io { path: mpath, source: e }),
        };
        let dataset = match manifest {
            Some(m) => {
                let found = sha256_hex(text.as_bytes());
                if found != m.dataset_fingerprint {
                    return Err(DatasetError::FingerprintMismatch {
                        what: path.display().to_string(),
                        expected: m.dataset_fingerprint,
                        found,
                    });
                }
                Dataset { records, tree_fingerprint: m.tree_fingerprint, flags: m.flags }
            }
            None => Dataset::new(records, None),
        };
        dataset.validate()?;
        Ok(dataset)
    }

    /// Draws `size` records (seeded), preserving dataset order. Returns the
    /// dataset unchanged when `size` is not smaller than it.
    pub fn subsample(&self, size: usize, mode: StrataMode, seed: u64) -> Dataset {
        if size >= self.records.len() {
            return self.clone();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut chosen: Vec<usize> = match mode {
            StrataMode::Uniform => index::sample(&mut rng, self.records.len(), size).into_vec(),
            StrataMode::Stratified => self.stratified_indices(size, &mut rng),
        };
        chosen.sort_unstable();
        let mut out = Dataset {
            records: chosen.into_iter().map(|i| self.records[i].clone()).collect(),
            tree_fingerprint: self.tree_fingerprint.clone(),
            flags: self.flags.clone(),
        };
        out.flags.subsampled_from = Some(self.records.len());
        out
    }

    fn stratified_indices(&self, size: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let mut strata: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, r) in self.records.iter().enumerate() {
            strata.entry(r.leaf_id.as_str()).or_default().push(i);
        }
        // water-filling: small strata give up their unused share
        let mut groups: Vec<Vec<usize>> = strata.into_values().collect();
        groups.sort_by_key(Vec::len);
        let mut quota = vec![0usize; groups.len()];
        let mut remaining = size;
        for (k, group) in groups.iter().enumerate() {
            let share = remaining.div_ceil(groups.len() - k);
            quota[k] = share.min(group.len());
            remaining -= quota[k];
        }
        let mut chosen = Vec::with_capacity(size);
        for (group, take) in groups.iter().zip(quota) {
            let picks = index::sample(rng, group.len(), take);
            chosen.extend(picks.into_iter().map(|p| group[p]));
        }
        chosen
    }
}

fn parse_jsonl(path: &Path, text: &str) -> Result<Vec<SampleRecord>, DatasetError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            serde_json::from_str(line).map_err(|source| DatasetError::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                source,
            })
        })
        .collect()
}

/// Write-to-temp then rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), DatasetError> {
    let mut tmp_name = path.file_name().unwrap_or_default().to_os_string();
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    let mut file = std::fs::File::create(&tmp).map_err(io_err(&tmp))?;
    file.write_all(bytes).map_err(io_err(&tmp))?;
    file.sync_all().map_err(io_err(&tmp))?;
    drop(file);
    std::fs::rename(&tmp, path).map_err(io_err(path))
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub fn record(id: &str, leaf: &str, instruction: &str) -> SampleRecord {
        SampleRecord {
            id: id.into(),
            leaf_id: leaf.into(),
            instruction: instruction.into(),
            answer: None,
            attribute_path: Vec::new(),
            meta: RecordMeta { model: "mock".into(), temperature: 0.7, batch_index: 0, origin: Origin::Tree },
        }
    }

    #[test]
    fn write_read_round_trip_with_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let mut ds = Dataset::new(vec![record("a", "r", "x"), record("b", "r", "y")], Some("abc".into()));
        ds.flags.deduped = true;
        ds.write(&path).unwrap();
        assert!(manifest_path(&path).ends_with("d.jsonl.manifest.json"));
        assert_eq!(Dataset::read(&path).unwrap(), ds);
    }

    #[test]
    fn edited_records_fail_fingerprint() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        Dataset::new(vec![record("a", "r", "x")], None).write(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap().replace("\"x\"", "\"z\"");
        std::fs::write(&path, text).unwrap();
        assert!(matches!(Dataset::read(&path), Err(DatasetError::FingerprintMismatch { .. })));
    }

    #[test]
    fn jsonl_has_documented_fields() {
        let ds = Dataset::new(vec![record("a", "r.0", "x")], None);
        let v: serde_json::Value = serde_json::from_str(ds.to_jsonl().trim()).unwrap();
        for key in ["id", "leaf_id", "instruction", "answer", "attribute_path", "meta"] {
            assert!(v.get(key).is_some(), "{key}");
        }
        for key in ["model", "temperature", "batch_index"] {
            assert!(v["meta"].get(key).is_some(), "{key}");
        }
    }

    #[test]
    fn duplicate_ids_rejected() {
        let ds = Dataset::new(vec![record("a", "r", "x"), record("a", "r", "y")], None);
        assert!(matches!(ds.validate(), Err(DatasetError::DuplicateId(_))));
    }

    fn leafy(n_leaves: usize, per_leaf: usize) -> Dataset {
        let mut records = Vec::new();
        for l in 0..n_leaves {
            for k in 0..per_leaf {
                records.push(record(&format!("r.{l}#{k}"), &format!("r.{l}"), &format!("t {l} {k}")));
            }
        }
        Dataset::new(records, None)
    }

    #[test]
    fn subsample_larger_than_corpus_is_identity() {
        let ds = leafy(2, 3);
        assert_eq!(ds.subsample(100, StrataMode::Uniform, 1), ds);
    }

    #[test]
    fn uniform_subsample_is_seeded_and_ordered() {
        let ds = leafy(5, 10);
        let a = ds.subsample(17, StrataMode::Uniform, 9);
        assert_eq!(a.len(), 17);
        assert_eq!(a, ds.subsample(17, StrataMode::Uniform, 9));
        let pos: Vec<usize> = a
            .records
            .iter()
            .map(|r| ds.records.iter().position(|s| s.id == r.id).unwrap())
            .collect();
        assert!(pos.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(a.flags.subsampled_from, Some(50));
    }

    #[test]
    fn stratified_subsample_balances_leaves() {
        let mut ds = leafy(4, 10);
        // one tiny leaf
        ds.records.retain(|r| r.leaf_id != "r.3" || r.id.ends_with("#0"));
        let s = ds.subsample(19, StrataMode::Stratified, 3);
        assert_eq!(s.len(), 19);
        let count = |leaf: &str| s.records.iter().filter(|r| r.leaf_id == leaf).count();
        assert_eq!(count("r.3"), 1);
        assert_eq!(count("r.0") + count("r.1") + count("r.2"), 18);
        for leaf in ["r.0", "r.1", "r.2"] {
            assert_eq!(count(leaf), 6);
        }
    }
}
