//! Sample generation for tree leaves, answers, and the unpartitioned
//! temperature-sampling baseline.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dataset::{Dataset, Origin, PathValue, RecordMeta, SampleRecord};
use crate::gateway::{extract_structured, Gateway, GatewayError, ProviderRequest, SamplingParams, SchemaId};
use crate::templates::{vars, Stage, TemplateSet};
use crate::tree::{compose_description, NodeKind, SpaceTree, TreeError};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error("node `{0}` is not a leaf")]
    NotALeaf(String),
    #[error("provider returned {got} of {wanted} requested samples")]
    ProviderExhausted { wanted: usize, got: usize },
    #[error("no values available to draw for dimension `{0}`")]
    EmptyPool(String),
    #[error("count must be at least 1")]
    ZeroCount,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthOptions {
    pub temperature: f64,
    pub answer_temperature: f64,
    pub max_tokens: u32,
    /// Records requested per sample-list call in the baseline.
    pub baseline_batch: usize,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self { temperature: 0.7, answer_temperature: 0.2, max_tokens: 2048, baseline_batch: 10 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LeafFailure {
    pub leaf_id: String,
    pub error: String,
}

#[derive(Debug, Clone)]
pub struct SynthOutcome {
    pub dataset: Dataset,
    pub failures: Vec<LeafFailure>,
}

#[derive(Debug, Clone)]
pub struct AnswerOutcome {
    pub dataset: Dataset,
    pub answered_now: usize,
    pub failures: Vec<LeafFailure>,
}

pub struct Synthesizer<'a> {
    gateway: &'a Gateway,
    templates: &'a TemplateSet,
    options: SynthOptions,
}

fn leaf_rng(seed: u64, leaf_id: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(leaf_id.as_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

/// Runs `f` over `items` on up to `workers` threads, keeping input order.
fn parallel_map<T: Sync, R: Send>(items: &[T], workers: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<R>>> = items.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..workers.clamp(1, items.len().max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                *slots[i].lock().unwrap() = Some(r);
            });
        }
    });
    slots.into_iter().map(|s| s.into_inner().unwrap().expect("worker filled slot")).collect()
}

impl<'a> Synthesizer<'a> {
    pub fn new(gateway: &'a Gateway, templates: &'a TemplateSet, options: SynthOptions) -> Self {
        Self { gateway, templates, options }
    }

    fn params(&self, temperature: f64) -> SamplingParams {
        SamplingParams { temperature, max_tokens: self.options.max_tokens }
    }

    fn sample_call(&self, description: &str, count: usize, batch: &str, temperature: f64) -> Result<Vec<String>, SynthError> {
        let mut values = BTreeMap::new();
        values.insert(vars::DESCRIPTION.to_string(), description.to_string());
        values.insert(vars::COUNT.to_string(), count.to_string());
        values.insert(vars::BATCH.to_string(), batch.to_string());
        let prompt = self.templates.render(Stage::Sample, &mut values);
        let req = ProviderRequest::generate(prompt, self.params(temperature))
            .with_schema(SchemaId::SampleList)
            .with_vars(values);
        let out = self.gateway.generate_validated(&req, |raw| {
            let payload = extract_structured(raw, SchemaId::SampleList)?;
            let samples: Vec<String> =
                payload.strings("samples").into_iter().filter(|s| !s.trim().is_empty()).collect();
            Ok::<_, GatewayError>(samples)
        })?;
        Ok(out.value)
    }

    /// `count` samples for one description. A short reply gets one retry as
    /// two half-size calls.
    fn sample_batch(&self, description: &str, count: usize, batch: &str, temperature: f64) -> Result<Vec<String>, SynthError> {
        let mut samples = self.sample_call(description, count, batch, temperature)?;
        if samples.len() >= count {
            samples.truncate(count);
            return Ok(samples);
        }
        if count < 2 {
            return Err(SynthError::ProviderExhausted { wanted: count, got: samples.len() });
        }
        let first = count.div_ceil(2);
        let mut halves = self.sample_call(description, first, &format!("{batch}/a"), temperature)?;
        halves.truncate(first);
        let mut second = self.sample_call(description, count - first, &format!("{batch}/b"), temperature)?;
        second.truncate(count - first);
        halves.extend(second);
        if halves.len() < count {
            return Err(SynthError::ProviderExhausted { wanted: count, got: halves.len() });
        }
        Ok(halves)
    }

    fn draw_candidates(&self, description: &str, dimension: &str, known: &[String], count: usize) -> Result<Vec<String>, SynthError> {
        let mut values = BTreeMap::new();
        values.insert(vars::DESCRIPTION.to_string(), description.to_string());
        values.insert(vars::DIMENSION.to_string(), dimension.to_string());
        values.insert(vars::VALUES.to_string(), known.join(", "));
        values.insert(vars::COUNT.to_string(), count.to_string());
        let prompt = self.templates.render(Stage::Draw, &mut values);
        let req = ProviderRequest::generate(prompt, self.params(self.options.temperature))
            .with_schema(SchemaId::ValueList)
            .with_vars(values);
        let out = self.gateway.generate_validated(&req, |raw| {
            let payload = extract_structured(raw, SchemaId::ValueList)?;
            let labels: Vec<String> = payload
                .attribute_values("values")
                .into_iter()
                .map(|v| v.label)
                .filter(|l| !l.trim().is_empty())
                .collect();
            if labels.is_empty() {
                return Err(GatewayError::SchemaViolation("`values` is empty".into()));
            }
            Ok(labels)
        })?;
        Ok(out.value)
    }

    /// Generates `count` records for `leaf_id`. Deferred values on the path
    /// are drawn per record from a seeded per-leaf stream.
    pub fn synthesize_leaf(&self, tree: &SpaceTree, leaf_id: &str, count: usize, seed: u64) -> Result<Vec<SampleRecord>, SynthError> {
        if count == 0 {
            return Err(SynthError::ZeroCount);
        }
        if !tree.is_complete() {
            return Err(TreeError::TreeIncomplete.into());
        }
        let leaf = tree.node(leaf_id)?;
        if leaf.kind != NodeKind::Leaf {
            return Err(SynthError::NotALeaf(leaf_id.to_string()));
        }
        let path = tree.path(leaf_id)?;
        let description = tree.node_description(leaf_id)?;

        // candidate pools for deferred steps, indexed by path position
        let mut pools: Vec<Option<Vec<String>>> = vec![None; path.len()];
        let ancestors = ancestor_ids(leaf_id);
        for (pos, step) in path.iter().enumerate() {
            if !step.is_deferred() {
                continue;
            }
            let parent = tree.node(&ancestors[pos])?;
            let dim = parent.dimension.as_ref().ok_or_else(|| SynthError::EmptyPool(step.dimension.clone()))?;
            let known: Vec<String> = dim.full_values.iter().map(|v| v.label.clone()).collect();
            let pool = if dim.unbounded {
                self.draw_candidates(&description, &dim.name, &known, count)?
            } else {
                known
            };
            if pool.is_empty() {
                return Err(SynthError::EmptyPool(dim.name.clone()));
            }
            pools[pos] = Some(pool);
        }

        let mut rng = leaf_rng(seed, leaf_id);
        let resolved: Vec<Vec<PathValue>> = (0..count)
            .map(|_| {
                path.iter()
                    .zip(&pools)
                    .map(|(step, pool)| PathValue {
                        dimension: step.dimension.clone(),
                        value: match (&step.value, pool) {
                            (Some(v), _) => v.label.clone(),
                            (None, Some(pool)) => pool.choose(&mut rng).expect("non-empty pool").clone(),
                            (None, None) => unreachable!("deferred step without pool"),
                        },
                    })
                    .collect()
            })
            .collect();

        // one call per distinct resolved description, in first-seen order
        let mut groups: Vec<(String, Vec<usize>)> = Vec::new();
        for (k, values) in resolved.iter().enumerate() {
            let pairs: Vec<(&str, &str)> = values.iter().map(|p| (p.dimension.as_str(), p.value.as_str())).collect();
            let text = compose_description(tree.root_description(), &pairs);
            match groups.iter_mut().find(|(d, _)| *d == text) {
                Some((_, members)) => members.push(k),
                None => groups.push((text, vec![k])),
            }
        }

        let mut instructions: Vec<Option<String>> = vec![None; count];
        for (g, (text, members)) in groups.iter().enumerate() {
            let samples = self.sample_batch(text, members.len(), &format!("{leaf_id}:{g}"), self.options.temperature)?;
            for (&k, s) in members.iter().zip(samples) {
                instructions[k] = Some(s);
            }
        }

        let model = self.gateway.model_id().to_string();
        Ok(instructions
            .into_iter()
            .zip(resolved)
            .enumerate()
            .map(|(k, (instruction, attribute_path))| SampleRecord {
                id: format!("{leaf_id}#{k}"),
                leaf_id: leaf_id.to_string(),
                instruction: instruction.expect("every record is filled"),
                answer: None,
                attribute_path,
                meta: RecordMeta {
                    model: model.clone(),
                    temperature: self.options.temperature,
                    batch_index: k as u32,
                    origin: Origin::Tree,
                },
            })
            .collect())
    }

    /// All leaves, concurrently, in leaf order. A failing leaf is recorded
    /// and the dataset is flagged partial.
    pub fn synthesize_all(&self, tree: &SpaceTree, count: usize, seed: u64) -> Result<SynthOutcome, SynthError> {
        let leaves = tree.leaf_nodes()?;
        let workers = tree.config().max_inflight_requests as usize;
        let results = parallel_map(&leaves, workers, |leaf| self.synthesize_leaf(tree, leaf, count, seed));
        let mut records = Vec::new();
        let mut failures = Vec::new();
        for (leaf, result) in leaves.iter().zip(results) {
            match result {
                Ok(rs) => records.extend(rs),
                Err(err) => {
                    log::warn!("leaf `{leaf}` failed: {err}");
                    failures.push(LeafFailure { leaf_id: leaf.clone(), error: err.to_string() });
                }
            }
        }
        let mut dataset = Dataset::new(records, Some(tree.fingerprint()));
        dataset.flags.partial = !failures.is_empty();
        dataset.flags.failed_leaves = failures.iter().map(|f| f.leaf_id.clone()).collect();
        Ok(SynthOutcome { dataset, failures })
    }

    fn answer_one(&self, instruction: &str) -> Result<String, SynthError> {
        let mut values = BTreeMap::new();
        values.insert(vars::INSTRUCTION.to_string(), instruction.to_string());
        let prompt = self.templates.render(Stage::Answer, &mut values);
        let req = ProviderRequest::generate(prompt, self.params(self.options.answer_temperature))
            .with_schema(SchemaId::Answer)
            .with_vars(values);
        let out = self.gateway.generate_validated(&req, |raw| {
            let payload = extract_structured(raw, SchemaId::Answer)?;
            Ok::<_, GatewayError>(payload.str_field("answer").unwrap_or_default().to_string())
        })?;
        Ok(out.value)
    }

    /// Fills in missing answers. Records that already have one are left
    /// alone, so a rerun only retries earlier failures.
    pub fn generate_answers(&self, dataset: &Dataset, workers: usize) -> AnswerOutcome {
        let pending: Vec<usize> =
            (0..dataset.records.len()).filter(|&i| dataset.records[i].answer.is_none()).collect();
        let results = parallel_map(&pending, workers, |&i| self.answer_one(&dataset.records[i].instruction));
        let mut out = dataset.clone();
        let mut failures = Vec::new();
        let mut answered_now = 0;
        for (&i, result) in pending.iter().zip(results) {
            match result {
                Ok(answer) => {
                    out.records[i].answer = Some(answer);
                    answered_now += 1;
                }
                Err(err) => failures.push(LeafFailure { leaf_id: out.records[i].id.clone(), error: err.to_string() }),
            }
        }
        out.flags.answered = out.records.iter().all(|r| r.answer.is_some());
        AnswerOutcome { dataset: out, answered_now, failures }
    }

    /// `count` records sampled from the bare description at `temperature`.
    pub fn temperature_baseline(
        &self,
        description: &str,
        count: usize,
        temperature: f64,
        seed: u64,
        workers: usize,
    ) -> Result<Dataset, SynthError> {
        if count == 0 {
            return Err(SynthError::ZeroCount);
        }
        let size = self.options.baseline_batch.max(1);
        let batches: Vec<(usize, usize)> =
            (0..count).step_by(size).map(|start| (start, size.min(count - start))).collect();
        let results = parallel_map(&batches, workers, |&(start, n)| {
            self.sample_batch(description, n, &format!("baseline:{seed}:{}", start / size), temperature)
        });
        let model = self.gateway.model_id().to_string();
        let mut records = Vec::with_capacity(count);
        for result in results {
            for instruction in result? {
                let i = records.len();
                records.push(SampleRecord {
                    id: format!("baseline#{i}"),
                    leaf_id: String::new(),
                    instruction,
                    answer: None,
                    attribute_path: Vec::new(),
                    meta: RecordMeta {
                        model: model.clone(),
                        temperature,
                        batch_index: (i / size) as u32,
                        origin: Origin::Baseline,
                    },
                });
            }
        }
        Ok(Dataset::new(records, None))
    }
}

/// Ancestor ids of a dotted node id, root first, excluding the node itself.
fn ancestor_ids(id: &str) -> Vec<String> {
    let parts: Vec<&str> = id.split('.').collect();
    (1..parts.len()).map(|k| parts[..k].join(".")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::mock::{MockProvider, Scripted, ScriptedResponder};
    use crate::partition::{PartitionOptions, Partitioner};
    use crate::tree::{tests::uniform_tree, PartitionConfig, ROOT_ID};
    use serde_json::json;
    use std::sync::Arc;

    fn templates() -> TemplateSet {
        TemplateSet::bundled("gsm").unwrap()
    }

    fn uniform_gateway(b: usize) -> Gateway {
        Gateway::new(Arc::new(MockProvider::uniform(b)), 0, 4)
    }

    #[test]
    fn ancestors_of_dotted_ids() {
        assert_eq!(ancestor_ids("r.1.0"), vec!["r", "r.1"]);
        assert!(ancestor_ids(ROOT_ID).is_empty());
    }

    #[test]
    fn leaf_records_carry_path_and_ids() {
        let tree = uniform_tree(2, 2);
        let gw = uniform_gateway(2);
        let t = templates();
        let s = Synthesizer::new(&gw, &t, SynthOptions::default());
        let recs = s.synthesize_leaf(&tree, "r.1.0", 3, 7).unwrap();
        assert_eq!(recs.len(), 3);
        assert_eq!(recs[2].id, "r.1.0#2");
        assert_eq!(recs[0].attribute_path.len(), 2);
        assert!(recs[0].instruction.contains(" = "));
        // a fixed path means one grouped call
        assert_eq!(gw.transcript().len(), 1);
        assert!(matches!(s.synthesize_leaf(&tree, "r.1", 3, 7), Err(SynthError::NotALeaf(_))));
    }

    #[test]
    fn whole_tree_in_leaf_order() {
        let tree = uniform_tree(3, 2);
        let gw = uniform_gateway(3);
        let t = templates();
        let s = Synthesizer::new(&gw, &t, SynthOptions::default());
        let out = s.synthesize_all(&tree, 2, 0).unwrap();
        assert_eq!(out.dataset.len(), 18);
        assert_eq!(out.dataset.records[0].leaf_id, "r.0.0");
        assert_eq!(out.dataset.records[17].leaf_id, "r.2.2");
        assert_eq!(out.dataset.tree_fingerprint.as_deref(), Some(tree.fingerprint().as_str()));
        assert!(!out.dataset.flags.partial);
    }

    fn unbounded_tree(b: usize) -> SpaceTree {
        let gw = Gateway::new(Arc::new(MockProvider::uniform(b)), 0, 1);
        let t = templates();
        let config = PartitionConfig { max_depth: 1, pivot_count: 3, ..PartitionConfig::default() };
        Partitioner::new(&gw, &t, PartitionOptions::default()).build_tree("math", config).unwrap().tree
    }

    #[test]
    fn deferred_values_are_drawn_from_the_pool() {
        let tree = unbounded_tree(15);
        let gw = uniform_gateway(15);
        let t = templates();
        let s = Synthesizer::new(&gw, &t, SynthOptions::default());
        let recs = s.synthesize_leaf(&tree, "r.0", 40, 3).unwrap();
        let drawn: std::collections::HashSet<&str> =
            recs.iter().map(|r| r.attribute_path[0].value.as_str()).collect();
        assert!(drawn.len() > 1);
        assert!(drawn.iter().all(|v| v.starts_with("value ")));
        // same seed, same draws
        let again = s.synthesize_leaf(&tree, "r.0", 40, 3).unwrap();
        assert_eq!(recs, again);
    }

    #[test]
    fn short_reply_falls_back_to_split_calls() {
        let tree = uniform_tree(2, 1);
        let s_resp = ScriptedResponder::new().with_fallback(Box::new(crate::gateway::mock::UniformResponder::new(2)));
        s_resp.push_stage("sample", Scripted::Reply(format!("```json\n{}\n```", json!({"samples": ["only one"]}))));
        let gw = Gateway::new(Arc::new(MockProvider::new(Box::new(s_resp))), 0, 1);
        let t = templates();
        let s = Synthesizer::new(&gw, &t, SynthOptions::default());
        let recs = s.synthesize_leaf(&tree, "r.0", 4, 0).unwrap();
        assert_eq!(recs.len(), 4);
        assert_eq!(gw.transcript().len(), 3);
    }

    #[test]
    fn failing_leaf_marks_dataset_partial() {
        let tree = uniform_tree(2, 1);
        let s_resp = ScriptedResponder::new().with_fallback(Box::new(crate::gateway::mock::UniformResponder::new(2)));
        s_resp.rule(
            "axis 0 = v1",
            Scripted::Fail(crate::gateway::ProviderError::Status { status: 400, message: "bad".into() }),
        );
        let gw = Gateway::new(Arc::new(MockProvider::new(Box::new(s_resp))), 0, 1);
        let t = templates();
        let s = Synthesizer::new(&gw, &t, SynthOptions::default());
        let out = s.synthesize_all(&tree, 2, 0).unwrap();
        assert_eq!(out.dataset.len(), 2);
        assert!(out.dataset.flags.partial);
        assert_eq!(out.dataset.flags.failed_leaves, vec!["r.1"]);
    }

    #[test]
    fn answers_are_idempotent() {
        let tree = uniform_tree(2, 1);
        let gw = uniform_gateway(2);
        let t = templates();
        let s = Synthesizer::new(&gw, &t, SynthOptions::default());
        let ds = s.synthesize_all(&tree, 2, 0).unwrap().dataset;
        let first = s.generate_answers(&ds, 2);
        assert_eq!(first.answered_now, 4);
        assert!(first.dataset.flags.answered);
        let calls = gw.transcript().len();
        let second = s.generate_answers(&first.dataset, 2);
        assert_eq!(second.answered_now, 0);
        assert_eq!(gw.transcript().len(), calls);
        assert_eq!(second.dataset, first.dataset);
    }

    #[test]
    fn baseline_batches() {
        let gw = uniform_gateway(2);
        let t = templates();
        let s = Synthesizer::new(&gw, &t, SynthOptions::default());
        let ds = s.temperature_baseline("math problems", 25, 0.9, 1, 3).unwrap();
        assert_eq!(ds.len(), 25);
        assert_eq!(gw.transcript().len(), 3);
        assert!(ds.records.iter().all(|r| r.meta.origin == Origin::Baseline && r.meta.temperature == 0.9));
        ds.validate().unwrap();
    }
}
