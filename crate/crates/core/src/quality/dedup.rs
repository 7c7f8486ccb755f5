//! Greedy near-duplicate removal by ROUGE-L.
//!
//! Records are scanned in dataset order; a record is dropped when its ROUGE-L
//! against some already-kept record exceeds the threshold. Candidate kept
//! records are found through an inverted token index: since LCS ≤ multiset
//! token overlap, 2·overlap/(m+n) bounds ROUGE-L from above and any record
//! whose bound is at or below the threshold is skipped without running the LCS.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::rouge::{lcs_len, tokenize};
use crate::dataset::Dataset;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Removal {
    pub id: String,
    /// The kept record it duplicates.
    pub matched_id: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemovalLog {
    pub threshold: f64,
    pub input_records: usize,
    pub kept_records: usize,
    pub removed: Vec<Removal>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DedupOutcome {
    pub kept: Dataset,
    pub log: RemovalLog,
}

struct KeptEntry {
    tokens: Vec<u32>,
}

pub fn filter_near_duplicates(dataset: &Dataset, threshold: f64) -> DedupOutcome {
    let mut vocab: HashMap<String, u32> = HashMap::new();
    let mut kept_entries: Vec<KeptEntry> = Vec::new();
    let mut kept_index: Vec<usize> = Vec::new();
    // token -> (kept entry, occurrences)
    let mut postings: HashMap<u32, Vec<(u32, u32)>> = HashMap::new();
    let mut removed = Vec::new();

    for (pos, record) in dataset.records.iter().enumerate() {
        let tokens: Vec<u32> = tokenize(&record.instruction)
            .into_iter()
            .map(|t| {
                let next = vocab.len() as u32;
                *vocab.entry(t).or_insert(next)
            })
            .collect();
        let mut counts: HashMap<u32, u32> = HashMap::new();
        for &t in &tokens {
            *counts.entry(t).or_default() += 1;
        }

        let mut overlap: HashMap<u32, u32> = HashMap::new();
        for (&t, &c) in &counts {
            if let Some(list) = postings.get(&t) {
                for &(entry, c_kept) in list {
                    *overlap.entry(entry).or_default() += c.min(c_kept);
                }
            }
        }
        let mut candidates: Vec<(u32, u32)> = overlap
            .into_iter()
            .filter(|&(entry, ov)| {
                let total = tokens.len() + kept_entries[entry as usize].tokens.len();
                2.0 * ov as f64 / total as f64 > threshold
            })
            .collect();
        // first kept match in dataset order
        candidates.sort_unstable();

        let duplicate = candidates.into_iter().find_map(|(entry, _)| {
            let other = &kept_entries[entry as usize].tokens;
            let lcs = lcs_len(&tokens, other);
            let score = if lcs == 0 { 0.0 } else { 2.0 * lcs as f64 / (tokens.len() + other.len()) as f64 };
            (score > threshold).then_some((entry, score))
        });

        match duplicate {
            Some((entry, score)) => removed.push(Removal {
                id: record.id.clone(),
                matched_id: dataset.records[kept_index[entry as usize]].id.clone(),
                score,
            }),
            None => {
                let entry = kept_entries.len() as u32;
                for (&t, &c) in &counts {
                    postings.entry(t).or_default().push((entry, c));
                }
                kept_entries.push(KeptEntry { tokens });
                kept_index.push(pos);
            }
        }
    }

    let mut kept = Dataset {
        records: kept_index.iter().map(|&i| dataset.records[i].clone()).collect(),
        tree_fingerprint: dataset.tree_fingerprint.clone(),
        flags: dataset.flags.clone(),
    };
    kept.flags.deduped = true;
    kept.flags.dedup_threshold = Some(threshold);
    let log = RemovalLog {
        threshold,
        input_records: dataset.records.len(),
        kept_records: kept.records.len(),
        removed,
    };
    DedupOutcome { kept, log }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::tests::record;
    use crate::quality::rouge::rouge_l_text;
    use proptest::prelude::*;

    fn dataset(texts: &[String]) -> Dataset {
        Dataset::new(
            texts.iter().enumerate().map(|(i, t)| record(&format!("s{i}"), "r", t)).collect(),
            None,
        )
    }

    /// Quadratic greedy scan with no pruning.
    fn naive(texts: &[String], threshold: f64) -> Vec<usize> {
        let mut kept: Vec<usize> = Vec::new();
        for (i, t) in texts.iter().enumerate() {
            if !kept.iter().any(|&k| rouge_l_text(t, &texts[k]) > threshold) {
                kept.push(i);
            }
        }
        kept
    }

    #[test]
    fn empty_dataset() {
        let out = filter_near_duplicates(&Dataset::default(), 0.7);
        assert!(out.kept.is_empty());
        assert!(out.log.removed.is_empty());
        assert!(out.kept.flags.deduped);
    }

    #[test]
    fn later_twin_is_removed() {
        let texts = vec![
            "compute the total cost of five apples at two dollars each".to_string(),
            "write a poem about rain".to_string(),
            "compute the total cost of five apples at three dollars each".to_string(),
        ];
        let out = filter_near_duplicates(&dataset(&texts), 0.7);
        assert_eq!(out.log.removed.len(), 1);
        assert_eq!(out.log.removed[0].id, "s2");
        assert_eq!(out.log.removed[0].matched_id, "s0");
    }

    #[test]
    fn threshold_is_strict() {
        // ROUGE-L of these is exactly 0.75
        let texts = vec!["a b c d".to_string(), "a b c e".to_string()];
        assert_eq!(filter_near_duplicates(&dataset(&texts), 0.75).log.removed.len(), 0);
        assert_eq!(filter_near_duplicates(&dataset(&texts), 0.74).log.removed.len(), 1);
    }

    proptest! {
        #[test]
        fn pruned_scan_equals_naive_scan(
            texts in proptest::collection::vec(
                proptest::collection::vec(0u8..5, 0..8).prop_map(|v| {
                    v.iter().map(|x| format!("t{x}")).collect::<Vec<_>>().join(" ")
                }),
                0..25,
            ),
            threshold in 0.3f64..0.95,
        ) {
            let out = filter_near_duplicates(&dataset(&texts), threshold);
            let kept_ids: Vec<String> = out.kept.records.iter().map(|r| r.id.clone()).collect();
            let expected: Vec<String> = naive(&texts, threshold).iter().map(|i| format!("s{i}")).collect();
            prop_assert_eq!(kept_ids, expected);
            // idempotent
            let again = filter_near_duplicates(&out.kept, threshold);
            prop_assert!(again.log.removed.is_empty());
        }
    }
}
