//! Builds the partitioning tree breadth-first.
//!
//! Every node above the depth limit is expanded in three generation calls:
//! pivot samples approximating the subspace, a single splitting dimension
//! that assigns each pivot to exactly one value, and a coverage pass that
//! completes the value set. The tree is checkpointed after every mutation so
//! an interrupted build can resume from its frontier.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::dataset::{write_atomic, DatasetError};
use crate::gateway::{extract_structured, Gateway, GatewayError, ProviderRequest, SamplingParams, SchemaId};
use crate::templates::{numbered, vars, Stage, TemplateSet};
use crate::tree::{normalize_label, AttributeValue, DimensionSpec, NodeKind, PartitionConfig, SpaceTree, TreeError};

#[derive(Debug, Error)]
pub enum PartitionError {
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("expected {wanted} distinct pivot samples, got {got}")]
    InsufficientSamples { wanted: usize, got: usize },
    #[error("partition is not mutually exclusive: {0}")]
    NonExclusivePartition(String),
    #[error("dimension `{0}` is already used on this path")]
    DimensionReuse(String),
    #[error("coverage dropped observed values: {0}")]
    CoverageRegression(String),
    #[error("reply is missing required content: {0}")]
    SchemaViolation(String),
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error("corrupt checkpoint {path}: {reason}")]
    CorruptCheckpoint { path: PathBuf, reason: String },
    #[error("checkpoint config differs from the requested config: {0}")]
    ConfigMismatch(String),
    #[error("checkpoint io: {0}")]
    Io(String),
}

impl From<DatasetError> for PartitionError {
    fn from(err: DatasetError) -> Self {
        PartitionError::Io(err.to_string())
    }
}

/// Pivot samples for one node and, once a dimension is chosen, the value
/// each pivot was classified under.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PivotSet {
    pub node_id: String,
    pub samples: Vec<String>,
    pub assignment: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "result", rename_all = "snake_case")]
pub enum ExpansionResult {
    Split { dimension: DimensionSpec },
    Terminalize { reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpansionOutcome {
    pub node_id: String,
    #[serde(flatten)]
    pub result: ExpansionResult,
    pub attempts: u32,
    /// Generation calls issued, reprompts included.
    pub calls: u32,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub errors: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pivots: Option<PivotSet>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeStatus {
    Split,
    Unbounded,
    Leaf,
    Terminalized,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeReport {
    pub node_id: String,
    pub depth: u32,
    pub status: NodeStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dimension: Option<String>,
    pub children: usize,
    pub attempts: u32,
    pub calls: u32,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub errors: Vec<String>,
}

/// Per-node outcomes of a build, persisted next to the checkpoint.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BuildReport {
    pub nodes: Vec<NodeReport>,
    pub expanded: usize,
    pub leaves: usize,
    pub terminalized: usize,
    pub generate_calls: u64,
}

impl BuildReport {
    fn push(&mut self, node: NodeReport) {
        match node.status {
            NodeStatus::Split | NodeStatus::Unbounded => self.expanded += 1,
            NodeStatus::Leaf => self.leaves += 1,
            NodeStatus::Terminalized => {
                self.leaves += 1;
                self.terminalized += 1;
            }
        }
        self.generate_calls += u64::from(node.calls);
        self.nodes.push(node);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartitionOptions {
    pub pivot_temperature: f64,
    pub split_temperature: f64,
    pub max_tokens: u32,
    /// Tree JSON rewritten after every mutation.
    pub checkpoint: Option<PathBuf>,
    pub report: Option<PathBuf>,
    /// Return early (tree still in progress) after this many splits.
    pub stop_after_attaches: Option<usize>,
}

impl Default for PartitionOptions {
    fn default() -> Self {
        Self {
            pivot_temperature: 1.0,
            split_temperature: 0.2,
            max_tokens: 2048,
            checkpoint: None,
            report: None,
            stop_after_attaches: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BuildOutcome {
    pub tree: SpaceTree,
    pub report: BuildReport,
    /// True when `stop_after_attaches` cut the build short.
    pub interrupted: bool,
}

pub struct Partitioner<'a> {
    gateway: &'a Gateway,
    templates: &'a TemplateSet,
    options: PartitionOptions,
}

fn payload_error(err: crate::gateway::ExtractError) -> PartitionError {
    PartitionError::Gateway(err.into())
}

impl<'a> Partitioner<'a> {
    pub fn new(gateway: &'a Gateway, templates: &'a TemplateSet, options: PartitionOptions) -> Self {
        Self { gateway, templates, options }
    }

    fn request(&self, stage: Stage, mut values: BTreeMap<String, String>, temperature: f64, schema: SchemaId) -> ProviderRequest {
        let prompt = self.templates.render(stage, &mut values);
        ProviderRequest::generate(prompt, SamplingParams { temperature, max_tokens: self.options.max_tokens })
            .with_schema(schema)
            .with_vars(values)
    }

    fn pivot_request(&self, description: &str, count: usize, avoid: &[String]) -> ProviderRequest {
        let mut values = BTreeMap::new();
        values.insert(vars::DESCRIPTION.to_string(), description.to_string());
        values.insert(vars::COUNT.to_string(), count.to_string());
        let mut req = self.request(Stage::Pivot, values, self.options.pivot_temperature, SchemaId::PivotList);
        if !avoid.is_empty() {
            if let crate::gateway::RequestBody::Generate { prompt } = &mut req.body {
                prompt.push_str("\n\nThese samples already exist; write different ones:\n");
                prompt.push_str(&numbered(avoid));
            }
            req.vars.insert("avoid".into(), avoid.join("\n"));
        }
        req
    }

    fn pivot_batch(&self, description: &str, count: usize, avoid: &[String]) -> Result<(Vec<String>, u32), PartitionError> {
        let req = self.pivot_request(description, count, avoid);
        let out = self.gateway.generate_validated(&req, |raw| {
            let payload = extract_structured(raw, SchemaId::PivotList).map_err(payload_error)?;
            Ok::<_, PartitionError>(payload.strings("samples"))
        })?;
        Ok((out.value, out.calls))
    }

    /// `l` distinct pivot samples; duplicates get one regeneration round.
    pub fn generate_pivot_samples(&self, node_id: &str, description: &str, l: usize) -> Result<(PivotSet, u32), PartitionError> {
        if description.trim().is_empty() {
            return Err(PartitionError::SchemaViolation("empty description".into()));
        }
        let (first, mut calls) = self.pivot_batch(description, l, &[])?;
        let mut seen = HashSet::new();
        let mut samples: Vec<String> = Vec::with_capacity(l);
        let mut keep = |s: String, samples: &mut Vec<String>| {
            let key = normalize_label(&s);
            if !key.is_empty() && samples.len() < l && seen.insert(key) {
                samples.push(s);
            }
        };
        for s in first {
            keep(s, &mut samples);
        }
        if samples.len() < l {
            let missing = l - samples.len();
            let (extra, more) = self.pivot_batch(description, missing, &samples)?;
            calls += more;
            for s in extra {
                keep(s, &mut samples);
            }
        }
        if samples.len() < l {
            return Err(PartitionError::InsufficientSamples { wanted: l, got: samples.len() });
        }
        Ok((PivotSet { node_id: node_id.to_string(), samples, assignment: Vec::new() }, calls))
    }

    /// One dimension and a total, single-valued assignment of the pivots.
    pub fn determine_dimension(
        &self,
        description: &str,
        pivots: &mut PivotSet,
        forbidden: &[String],
        depth: u32,
    ) -> Result<(DimensionSpec, u32), PartitionError> {
        let mut values = BTreeMap::new();
        values.insert(vars::DESCRIPTION.to_string(), description.to_string());
        values.insert(vars::SAMPLES.to_string(), numbered(&pivots.samples));
        values.insert(vars::COUNT.to_string(), pivots.samples.len().to_string());
        values.insert(vars::DEPTH.to_string(), depth.to_string());
        let forbidden_text = if forbidden.is_empty() { "none".to_string() } else { forbidden.join("; ") };
        values.insert(vars::FORBIDDEN.to_string(), forbidden_text);
        let req = self.request(Stage::Dimension, values, self.options.split_temperature, SchemaId::DimensionSpec);

        let forbidden_keys: HashSet<String> = forbidden.iter().map(|f| normalize_label(f)).collect();
        let n = pivots.samples.len();
        let out = self.gateway.generate_validated(&req, |raw| {
            let payload = extract_structured(raw, SchemaId::DimensionSpec).map_err(payload_error)?;
            parse_dimension(payload.value(), n, &forbidden_keys)
        })?;
        let (spec, assignment) = out.value;
        pivots.assignment = assignment;
        Ok((spec, out.calls))
    }

    /// Expands the observed values to a complete set for the dimension.
    pub fn complement_attributes(&self, description: &str, spec: DimensionSpec) -> Result<(DimensionSpec, u32), PartitionError> {
        if spec.observed_values.is_empty() {
            return Err(PartitionError::SchemaViolation("no observed values to complement".into()));
        }
        let labels: Vec<&str> = spec.observed_values.iter().map(|v| v.label.as_str()).collect();
        let mut values = BTreeMap::new();
        values.insert(vars::DESCRIPTION.to_string(), description.to_string());
        values.insert(vars::DIMENSION.to_string(), spec.name.clone());
        values.insert(vars::VALUES.to_string(), labels.join(", "));
        let req = self.request(Stage::Coverage, values, self.options.split_temperature, SchemaId::ValueList);

        let out = self.gateway.generate_validated(&req, |raw| {
            let payload = extract_structured(raw, SchemaId::ValueList).map_err(payload_error)?;
            let full = payload.attribute_values("values");
            let mut seen = HashSet::new();
            for v in &full {
                if !seen.insert(v.normalized()) {
                    return Err(PartitionError::NonExclusivePartition(format!(
                        "value `{}` listed twice",
                        v.label
                    )));
                }
            }
            let missing: Vec<&str> = spec
                .observed_values
                .iter()
                .filter(|v| !seen.contains(&v.normalized()))
                .map(|v| v.label.as_str())
                .collect();
            if !missing.is_empty() {
                return Err(PartitionError::CoverageRegression(missing.join(", ")));
            }
            Ok((full, payload.bool_field("unbounded").unwrap_or(false)))
        })?;
        let (full_values, unbounded) = out.value;
        Ok((DimensionSpec { full_values, unbounded, ..spec }, out.calls))
    }

    /// Runs criteria determination and coverage for one node, retrying the
    /// whole expansion up to the retry limit.
    pub fn expand_node(&self, tree: &SpaceTree, id: &str) -> Result<ExpansionOutcome, PartitionError> {
        let node = tree.node(id)?;
        let description = tree.node_description(id)?;
        let forbidden = tree.path(id)?.dimension_names();
        let config = tree.config();
        let mut errors = Vec::new();
        let mut calls = 0;
        let max_attempts = config.retry_limit + 1;
        for attempt in 1..=max_attempts {
            let mut spent = 0;
            let result = (|| {
                let (mut pivots, c) = self.generate_pivot_samples(id, &description, config.pivot_count as usize)?;
                spent += c;
                let (observed, c) = self.determine_dimension(&description, &mut pivots, &forbidden, node.depth)?;
                spent += c;
                let (spec, c) = self.complement_attributes(&description, observed)?;
                spent += c;
                spec.validate()?;
                Ok::<_, PartitionError>((spec, pivots))
            })();
            calls += spent;
            match result {
                Ok((dimension, pivots)) => {
                    return Ok(ExpansionOutcome {
                        node_id: id.to_string(),
                        result: ExpansionResult::Split { dimension },
                        attempts: attempt,
                        calls,
                        errors,
                        pivots: Some(pivots),
                    })
                }
                Err(err) => {
                    log::warn!("expansion of `{id}` failed (attempt {attempt}/{max_attempts}): {err}");
                    errors.push(err.to_string());
                }
            }
        }
        Ok(ExpansionOutcome {
            node_id: id.to_string(),
            result: ExpansionResult::Terminalize {
                reason: format!(
                    "expansion failed after {max_attempts} attempts: {}",
                    errors.last().map(String::as_str).unwrap_or("unknown error")
                ),
            },
            attempts: max_attempts,
            calls,
            errors,
            pivots: None,
        })
    }

    fn checkpoint(&self, tree: &SpaceTree) -> Result<(), PartitionError> {
        if let Some(path) = &self.options.checkpoint {
            write_atomic(path, tree.to_json().as_bytes())?;
        }
        Ok(())
    }

    fn save_report(&self, report: &BuildReport) -> Result<(), PartitionError> {
        if let Some(path) = &self.options.report {
            let text = serde_json::to_string_pretty(report).expect("report serializes") + "\n";
            write_atomic(path, text.as_bytes())?;
        }
        Ok(())
    }

    pub fn build_tree(&self, root_description: &str, config: PartitionConfig) -> Result<BuildOutcome, PartitionError> {
        let tree = SpaceTree::new(root_description, config)?;
        self.checkpoint(&tree)?;
        self.run(tree, BuildReport::default())
    }

    /// Continues an interrupted build from its checkpoint. A complete tree
    /// is returned untouched.
    pub fn resume_build(&self, checkpoint: &Path, expected: Option<&PartitionConfig>) -> Result<BuildOutcome, PartitionError> {
        let text = std::fs::read_to_string(checkpoint).map_err(|e| PartitionError::CorruptCheckpoint {
            path: checkpoint.to_path_buf(),
            reason: e.to_string(),
        })?;
        let tree = SpaceTree::from_json(&text).map_err(|e| PartitionError::CorruptCheckpoint {
            path: checkpoint.to_path_buf(),
            reason: e.to_string(),
        })?;
        if let Some(expected) = expected {
            if expected != tree.config() {
                return Err(PartitionError::ConfigMismatch(config_diff(expected, tree.config())));
            }
        }
        let report = self
            .options
            .report
            .as_deref()
            .and_then(|p| std::fs::read_to_string(p).ok())
            .and_then(|t| serde_json::from_str(&t).ok())
            .unwrap_or_default();
        if tree.is_complete() {
            return Ok(BuildOutcome { tree, report, interrupted: false });
        }
        self.run(tree, report)
    }

    fn run(&self, mut tree: SpaceTree, mut report: BuildReport) -> Result<BuildOutcome, PartitionError> {
        let max_depth = tree.config().max_depth;
        let batch_size = tree.config().max_inflight_requests.max(1) as usize;
        let mut attaches = 0usize;

        while let Some(front) = tree.frontier().first().cloned() {
            let depth = tree.node(&front)?.depth;
            if depth >= max_depth {
                tree.mark_leaf(&front)?;
                report.push(NodeReport {
                    node_id: front,
                    depth,
                    status: NodeStatus::Leaf,
                    dimension: None,
                    children: 0,
                    attempts: 0,
                    calls: 0,
                    errors: Vec::new(),
                });
                self.checkpoint(&tree)?;
                continue;
            }

            let batch: Vec<String> = tree
                .frontier()
                .iter()
                .take(batch_size)
                .take_while(|id| tree.node(id).map(|n| n.depth < max_depth).unwrap_or(false))
                .cloned()
                .collect();
            let outcomes = self.expand_batch(&tree, &batch)?;

            for outcome in outcomes {
                let id = outcome.node_id.clone();
                let depth = tree.node(&id)?.depth;
                let (status, dimension, children) = match &outcome.result {
                    ExpansionResult::Split { dimension } => {
                        let kids = tree.attach_split(&id, dimension.clone())?;
                        let kind = tree.node(&id)?.kind;
                        let status = if kind == NodeKind::Unbounded { NodeStatus::Unbounded } else { NodeStatus::Split };
                        (status, Some(dimension.name.clone()), kids.len())
                    }
                    ExpansionResult::Terminalize { reason } => {
                        tree.terminalize(&id, reason.clone())?;
                        (NodeStatus::Terminalized, None, 0)
                    }
                };
                report.push(NodeReport {
                    node_id: id,
                    depth,
                    status: status.clone(),
                    dimension,
                    children,
                    attempts: outcome.attempts,
                    calls: outcome.calls,
                    errors: outcome.errors,
                });
                self.checkpoint(&tree)?;
                self.save_report(&report)?;
                if status != NodeStatus::Terminalized {
                    attaches += 1;
                    if self.options.stop_after_attaches.is_some_and(|limit| attaches >= limit) {
                        return Ok(BuildOutcome { tree, report, interrupted: true });
                    }
                }
            }
        }
        self.save_report(&report)?;
        Ok(BuildOutcome { tree, report, interrupted: false })
    }

    fn expand_batch(&self, tree: &SpaceTree, batch: &[String]) -> Result<Vec<ExpansionOutcome>, PartitionError> {
        if batch.len() == 1 {
            return Ok(vec![self.expand_node(tree, &batch[0])?]);
        }
        std::thread::scope(|scope| {
            let handles: Vec<_> = batch
                .iter()
                .map(|id| scope.spawn(move || self.expand_node(tree, id)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("expansion worker panicked"))
                .collect()
        })
    }
}

fn parse_dimension(
    payload: &Value,
    pivot_count: usize,
    forbidden: &HashSet<String>,
) -> Result<(DimensionSpec, Vec<String>), PartitionError> {
    let name = payload["dimension"].as_str().unwrap_or_default().trim().to_string();
    if forbidden.contains(&normalize_label(&name)) {
        return Err(PartitionError::DimensionReuse(name));
    }
    let observed: Vec<AttributeValue> = crate::gateway::StructuredPayload(payload.clone()).attribute_values("values");
    let mut by_key: HashMap<String, usize> = HashMap::new();
    for (i, v) in observed.iter().enumerate() {
        if by_key.insert(v.normalized(), i).is_some() {
            return Err(PartitionError::NonExclusivePartition(format!("value `{}` listed twice", v.label)));
        }
    }
    let items = payload
        .get("assignment")
        .and_then(Value::as_array)
        .ok_or_else(|| PartitionError::SchemaViolation("`assignment` is required".into()))?;

    let mut assigned: Vec<Vec<String>> = vec![Vec::new(); pivot_count];
    for item in items {
        let sample = item.get("sample").and_then(Value::as_u64).ok_or_else(|| {
            PartitionError::SchemaViolation("each assignment needs a 1-based `sample` index".into())
        })? as usize;
        if sample == 0 || sample > pivot_count {
            return Err(PartitionError::SchemaViolation(format!("sample index {sample} out of range")));
        }
        let labels: Vec<String> = match (item.get("values"), item.get("value")) {
            (Some(Value::Array(vs)), _) => vs.iter().filter_map(|v| v.as_str().map(str::to_string)).collect(),
            (_, Some(Value::String(v))) => vec![v.clone()],
            _ => Vec::new(),
        };
        assigned[sample - 1].extend(labels);
    }

    let mut assignment = Vec::with_capacity(pivot_count);
    for (i, labels) in assigned.iter().enumerate() {
        let distinct: HashSet<String> = labels.iter().map(|l| normalize_label(l)).collect();
        if distinct.len() != 1 {
            return Err(PartitionError::NonExclusivePartition(format!(
                "sample {} is assigned {} values; each sample needs exactly one",
                i + 1,
                distinct.len()
            )));
        }
        let key = distinct.into_iter().next().unwrap();
        let Some(&idx) = by_key.get(&key) else {
            return Err(PartitionError::NonExclusivePartition(format!(
                "sample {} is assigned `{}`, which is not a listed value",
                i + 1,
                labels[0]
            )));
        };
        assignment.push(observed[idx].label.clone());
    }

    let rationale = payload["rationale"].as_str().unwrap_or_default().to_string();
    let spec = DimensionSpec {
        name,
        rationale,
        full_values: observed.clone(),
        observed_values: observed,
        unbounded: false,
    };
    Ok((spec, assignment))
}

fn config_diff(expected: &PartitionConfig, found: &PartitionConfig) -> String {
    let a = serde_json::to_value(expected).unwrap();
    let b = serde_json::to_value(found).unwrap();
    let mut diffs = Vec::new();
    if let (Some(a), Some(b)) = (a.as_object(), b.as_object()) {
        for (k, v) in a {
            if b.get(k) != Some(v) {
                diffs.push(format!("{k}: requested {v}, checkpoint {}", b.get(k).unwrap_or(&Value::Null)));
            }
        }
    }
    diffs.join("; ")
}
