//! Corpus diversity as mean pairwise cosine similarity of instruction
//! embeddings. Lower scores mean a more diverse corpus.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::QualityError;
use crate::dataset::{sha256_hex, Dataset};
use crate::gateway::Gateway;

pub const DEFAULT_PAIR_BUDGET: u64 = 100_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum PairMode {
    Exhaustive,
    SampledPairs { count: u64, seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimilarityMatrixSpec {
    pub corpus_size: usize,
    pub mode: PairMode,
}

pub fn total_pairs(n: usize) -> u64 {
    let n = n as u64;
    n * n.saturating_sub(1) / 2
}

impl SimilarityMatrixSpec {
    /// Exhaustive when every pair fits in `budget`, seeded sampling otherwise.
    pub fn plan(corpus_size: usize, budget: u64, seed: u64) -> Self {
        let total = total_pairs(corpus_size);
        let mode = if total <= budget {
            PairMode::Exhaustive
        } else {
            PairMode::SampledPairs { count: budget, seed }
        };
        Self { corpus_size, mode }
    }

    pub fn validate(&self) -> Result<(), QualityError> {
        if self.corpus_size < 2 {
            return Err(QualityError::EmptyCorpus { records: self.corpus_size });
        }
        if let PairMode::SampledPairs { count, .. } = self.mode {
            if count == 0 || count > total_pairs(self.corpus_size) {
                return Err(QualityError::InvalidSpec(format!(
                    "{count} sampled pairs for a corpus of {} records",
                    self.corpus_size
                )));
            }
        }
        Ok(())
    }

    pub fn pair_count(&self) -> u64 {
        match self.mode {
            PairMode::Exhaustive => total_pairs(self.corpus_size),
            PairMode::SampledPairs { count, .. } => count,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiversityReport {
    pub score: f64,
    pub pair_count: u64,
    pub estimator: PairMode,
    pub embedding_model: String,
    pub corpus_size: usize,
    pub corpus_fingerprint: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DiversityOptions {
    pub pair_budget: u64,
    pub seed: u64,
}

impl Default for DiversityOptions {
    fn default() -> Self {
        Self { pair_budget: DEFAULT_PAIR_BUDGET, seed: 0 }
    }
}

/// Maps a linear pair index to (i, j), i < j, in row-major upper-triangle order.
fn pair_at(n: usize, k: u64) -> (usize, usize) {
    let n64 = n as u64;
    let row_start = |i: u64| i * n64 - i * (i + 1) / 2;
    let (mut lo, mut hi) = (0u64, n64 - 1);
    while lo + 1 < hi {
        let mid = (lo + hi) / 2;
        if row_start(mid) <= k {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let i = if row_start(hi) <= k { hi } else { lo };
    let j = i + 1 + (k - row_start(i));
    (i as usize, j as usize)
}

fn normalized(vectors: &[Vec<f64>]) -> Vec<Vec<f64>> {
    vectors
        .iter()
        .map(|v| {
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 0.0 {
                v.iter().map(|x| x / norm).collect()
            } else {
                v.clone()
            }
        })
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

const PAIR_CHUNK: usize = 4096;

/// Mean cosine over the pairs selected by `spec`. Summation order is fixed,
/// so results are reproducible bit for bit.
pub fn mean_cosine(vectors: &[Vec<f64>], spec: &SimilarityMatrixSpec) -> Result<f64, QualityError> {
    spec.validate()?;
    if vectors.len() != spec.corpus_size {
        return Err(QualityError::InvalidSpec(format!(
            "{} vectors for corpus size {}",
            vectors.len(),
            spec.corpus_size
        )));
    }
    let units = normalized(vectors);
    let n = units.len();
    let sum: f64 = match spec.mode {
        PairMode::Exhaustive => {
            let rows: Vec<f64> = (0..n)
                .into_par_iter()
                .map(|i| (i + 1..n).map(|j| dot(&units[i], &units[j])).sum::<f64>())
                .collect();
            rows.iter().sum()
        }
        PairMode::SampledPairs { count, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let total = total_pairs(n) as usize;
            let mut picks = index::sample(&mut rng, total, count as usize).into_vec();
            picks.sort_unstable();
            let partial: Vec<f64> = picks
                .par_chunks(PAIR_CHUNK)
                .map(|chunk| {
                    chunk
                        .iter()
                        .map(|&k| {
                            let (i, j) = pair_at(n, k as u64);
                            dot(&units[i], &units[j])
                        })
                        .sum::<f64>()
                })
                .collect();
            partial.iter().sum()
        }
    };
    Ok((sum / spec.pair_count() as f64).clamp(-1.0, 1.0))
}

pub fn corpus_fingerprint(texts: &[String]) -> String {
    sha256_hex(texts.join("\n").as_bytes())
}

pub fn mean_pairwise_cosine(
    dataset: &Dataset,
    gateway: &Gateway,
    options: &DiversityOptions,
) -> Result<DiversityReport, QualityError> {
    let texts = dataset.instructions();
    let spec = SimilarityMatrixSpec::plan(texts.len(), options.pair_budget, options.seed);
    spec.validate()?;
    let vectors = gateway.embed(&texts)?;
    let score = mean_cosine(&vectors, &spec)?;
    Ok(DiversityReport {
        score,
        pair_count: spec.pair_count(),
        estimator: spec.mode,
        embedding_model: gateway.embedding_model_id().to_string(),
        corpus_size: texts.len(),
        corpus_fingerprint: corpus_fingerprint(&texts),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedReport {
    pub name: String,
    /// 1 = most diverse; equal scores share a rank.
    pub rank: usize,
    pub report: DiversityReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiversityComparison {
    pub pair_budget: u64,
    pub seed: u64,
    /// Ascending score order.
    pub ranking: Vec<RankedReport>,
}

pub fn diversity_compare(
    datasets: &[(String, &Dataset)],
    gateway: &Gateway,
    options: &DiversityOptions,
) -> Result<DiversityComparison, QualityError> {
    if datasets.len() < 2 {
        return Err(QualityError::NotEnoughDatasets(datasets.len()));
    }
    let mut scored: Vec<(String, DiversityReport)> = datasets
        .iter()
        .map(|(name, ds)| Ok((name.clone(), mean_pairwise_cosine(ds, gateway, options)?)))
        .collect::<Result<_, QualityError>>()?;
    scored.sort_by(|a, b| a.1.score.total_cmp(&b.1.score));
    let mut ranking: Vec<RankedReport> = Vec::with_capacity(scored.len());
    for (pos, (name, report)) in scored.into_iter().enumerate() {
        let rank = match ranking.last() {
            Some(prev) if prev.report.score == report.score => prev.rank,
            _ => pos + 1,
        };
        ranking.push(RankedReport { name, rank, report });
    }
    Ok(DiversityComparison { pair_budget: options.pair_budget, seed: options.seed, ranking })
}
