//! The spatial-partitioning tree.
//!
//! A [`SpaceTree`] decomposes a task's data space (described by free text at
//! the root) into subspaces. Each internal node splits on one dimension and
//! owns one child per attribute value of that dimension, so siblings are
//! mutually exclusive and jointly cover their parent. Dimensions whose value
//! set is too large (or cannot be enumerated) become *unbounded* nodes with a
//! single structural child; the concrete value is drawn per record later.
//!
//! Node ids encode the path from the root: the root is `"r"` and the i-th
//! child of node `p` is `"p.i"`.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const ROOT_ID: &str = "r";

/// Placeholder rendered for the value of an unbounded ancestor.
pub const DEFERRED_VALUE: &str = "<to be drawn at synthesis time>";

#[derive(Debug, Error)]
pub enum TreeError {
    #[error("unknown node `{0}`")]
    UnknownNode(String),
    #[error("tree build is not complete")]
    TreeIncomplete,
    #[error("node `{0}` is already expanded")]
    AlreadyExpanded(String),
    #[error("node `{id}` at depth {depth} cannot be split (max depth {max_depth})")]
    DepthExceeded { id: String, depth: u32, max_depth: u32 },
    #[error("node `{id}` at depth {depth} is above max depth {max_depth} and cannot be marked a leaf")]
    PrematureLeaf { id: String, depth: u32, max_depth: u32 },
    #[error("invalid dimension: {0}")]
    InvalidDimension(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("malformed tree: {0}")]
    Malformed(String),
    #[error("tree json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = TreeError> = std::result::Result<T, E>;

/// Case-folds, trims and collapses internal whitespace.
pub fn normalize_label(label: &str) -> String {
    label
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

/// Partitioning and synthesis hyperparameters plus engine knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PartitionConfig {
    /// Maximum tree depth.
    pub max_depth: u32,
    /// Pivot samples generated per expanded node.
    pub pivot_count: u32,
    /// Above this many values a dimension becomes an unbounded node.
    pub max_attribute_values: u32,
    /// Records synthesized per leaf.
    pub samples_per_leaf: u32,
    pub rng_seed: u64,
    pub dedup_threshold: f64,
    pub retry_limit: u32,
    pub max_inflight_requests: u32,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        Self {
            max_depth: 4,
            pivot_count: 10,
            max_attribute_values: 10,
            samples_per_leaf: 10,
            rng_seed: 0,
            dedup_threshold: 0.7,
            retry_limit: 3,
            max_inflight_requests: 8,
        }
    }
}

impl PartitionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.pivot_count < 2 {
            return Err(TreeError::InvalidConfig(format!(
                "pivot_count must be >= 2, got {}",
                self.pivot_count
            )));
        }
        if self.max_attribute_values < 2 {
            return Err(TreeError::InvalidConfig(format!(
                "max_attribute_values must be >= 2, got {}",
                self.max_attribute_values
            )));
        }
        if self.samples_per_leaf == 0 {
            return Err(TreeError::InvalidConfig("samples_per_leaf must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.dedup_threshold) {
            return Err(TreeError::InvalidConfig(format!(
                "dedup_threshold must lie in [0, 1], got {}",
                self.dedup_threshold
            )));
        }
        if self.max_inflight_requests == 0 {
            return Err(TreeError::InvalidConfig("max_inflight_requests must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeValue {
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
}

impl AttributeValue {
    pub fn new(label: impl Into<String>) -> Self {
        Self { label: label.into(), description: None }
    }

    pub fn normalized(&self) -> String {
        normalize_label(&self.label)
    }
}

/// One splitting dimension with its observed and covered attribute values.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DimensionSpec {
    pub name: String,
    #[serde(default)]
    pub rationale: String,
    pub observed_values: Vec<AttributeValue>,
    pub full_values: Vec<AttributeValue>,
    #[serde(default)]
    pub unbounded: bool,
}

impl DimensionSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(TreeError::InvalidDimension(msg));
        if normalize_label(&self.name).is_empty() {
            return bad("dimension name is empty".into());
        }
        if self.full_values.is_empty() {
            return bad(format!("dimension `{}` has no values", self.name));
        }
        let mut seen = HashSet::new();
        for value in &self.full_values {
            let key = value.normalized();
            if key.is_empty() {
                return bad(format!("dimension `{}` has an empty value label", self.name));
            }
            if !seen.insert(key) {
                return bad(format!(
                    "dimension `{}` repeats value `{}`",
                    self.name, value.label
                ));
            }
        }
        for value in &self.observed_values {
            if !seen.contains(&value.normalized()) {
                return bad(format!(
                    "observed value `{}` of `{}` is missing from the full value set",
                    value.label, self.name
                ));
            }
        }
        if !self.unbounded && self.full_values.len() < 2 {
            return bad(format!(
                "dimension `{}` has a single value and partitions nothing",
                self.name
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    /// Queued in the build frontier, not yet expanded or marked.
    Pending,
    Internal,
    Leaf,
    Unbounded,
}

/// The constraint a node inherits from its parent's split. A missing value
/// means the parent was unbounded and the value is drawn at synthesis time.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InheritedAttribute {
    pub dimension: String,
    pub value: Option<AttributeValue>,
}

impl InheritedAttribute {
    pub fn is_deferred(&self) -> bool {
        self.value.is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpaceNode {
    pub id: String,
    pub depth: u32,
    pub inherited_attribute: Option<InheritedAttribute>,
    pub dimension: Option<DimensionSpec>,
    pub kind: NodeKind,
    pub children: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub terminal_reason: Option<String>,
}

impl SpaceNode {
    fn pending(id: String, depth: u32, inherited_attribute: Option<InheritedAttribute>) -> Self {
        Self {
            id,
            depth,
            inherited_attribute,
            dimension: None,
            kind: NodeKind::Pending,
            children: Vec::new(),
            terminal_reason: None,
        }
    }
}

/// Root-to-node sequence of inherited attributes.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct NodePath(pub Vec<InheritedAttribute>);

impl NodePath {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, InheritedAttribute> {
        self.0.iter()
    }

    pub fn dimension_names(&self) -> Vec<String> {
        self.0.iter().map(|a| a.dimension.clone()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum BuildState {
    InProgress { frontier: Vec<String> },
    Complete,
}

/// Renders `base; constrained by: dim1 = v1; dim2 = v2`.
pub fn compose_description<D, V>(base: &str, constraints: &[(D, V)]) -> String
where
    D: AsRef<str>,
    V: AsRef<str>,
{
    if constraints.is_empty() {
        return base.to_string();
    }
    let parts: Vec<String> = constraints
        .iter()
        .map(|(d, v)| format!("{} = {}", d.as_ref(), v.as_ref()))
        .collect();
    format!("{base}; constrained by: {}", parts.join("; "))
}

fn parent_id(id: &str) -> Option<&str> {
    id.rfind('.').map(|pos| &id[..pos])
}

#[derive(Debug, Clone, Serialize)]
pub struct SpaceTree {
    root_description: String,
    config: PartitionConfig,
    build_state: BuildState,
    nodes: Vec<SpaceNode>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

#[derive(Deserialize)]
struct RawTree {
    root_description: String,
    config: PartitionConfig,
    build_state: BuildState,
    nodes: Vec<SpaceNode>,
}

impl PartialEq for SpaceTree {
    fn eq(&self, other: &Self) -> bool {
        self.root_description == other.root_description
            && self.config == other.config
            && self.build_state == other.build_state
            && self.nodes == other.nodes
    }
}

impl SpaceTree {
    /// A fresh tree whose root is queued for expansion.
    pub fn new(root_description: impl Into<String>, config: PartitionConfig) -> Result<Self> {
        config.validate()?;
        let root_description = root_description.into();
        if root_description.trim().is_empty() {
            return Err(TreeError::InvalidConfig("root description is empty".into()));
        }
        let root = SpaceNode::pending(ROOT_ID.to_string(), 0, None);
        let mut tree = Self {
            root_description,
            config,
            build_state: BuildState::InProgress { frontier: vec![ROOT_ID.to_string()] },
            nodes: vec![root],
            index: HashMap::new(),
        };
        tree.reindex();
        Ok(tree)
    }

    fn reindex(&mut self) {
        self.index = self
            .nodes
            .iter()
            .enumerate()
            .map(|(i, n)| (n.id.clone(), i))
            .collect();
    }

    pub fn root_description(&self) -> &str {
        &self.root_description
    }

    pub fn config(&self) -> &PartitionConfig {
        &self.config
    }

    pub fn build_state(&self) -> &BuildState {
        &self.build_state
    }

    pub fn root(&self) -> &SpaceNode {
        &self.nodes[0]
    }

    pub fn is_complete(&self) -> bool {
        matches!(self.build_state, BuildState::Complete)
    }

    pub fn frontier(&self) -> &[String] {
        match &self.build_state {
            BuildState::InProgress { frontier } => frontier,
            BuildState::Complete => &[],
        }
    }

    /// Nodes in insertion (BFS attach) order.
    pub fn nodes(&self) -> &[SpaceNode] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: &str) -> Result<&SpaceNode> {
        self.index
            .get(id)
            .map(|&i| &self.nodes[i])
            .ok_or_else(|| TreeError::UnknownNode(id.to_string()))
    }

    fn node_mut(&mut self, id: &str) -> Result<&mut SpaceNode> {
        match self.index.get(id) {
            Some(&i) => Ok(&mut self.nodes[i]),
            None => Err(TreeError::UnknownNode(id.to_string())),
        }
    }

    pub fn parent(&self, id: &str) -> Result<Option<&SpaceNode>> {
        self.node(id)?;
        parent_id(id).map(|p| self.node(p)).transpose()
    }

    pub fn path(&self, id: &str) -> Result<NodePath> {
        let mut steps = Vec::new();
        let mut current = self.node(id)?;
        while let Some(attr) = &current.inherited_attribute {
            steps.push(attr.clone());
            current = match parent_id(&current.id) {
                Some(p) => self.node(p)?,
                None => break,
            };
        }
        steps.reverse();
        Ok(NodePath(steps))
    }

    /// Root description intersected with every constraint on the node's path.
    pub fn node_description(&self, id: &str) -> Result<String> {
        let path = self.path(id)?;
        let constraints: Vec<(&str, &str)> = path
            .iter()
            .map(|a| {
                let value = a.value.as_ref().map_or(DEFERRED_VALUE, |v| v.label.as_str());
                (a.dimension.as_str(), value)
            })
            .collect();
        Ok(compose_description(&self.root_description, &constraints))
    }

    /// Leaves in depth-first, left-to-right order.
    pub fn leaf_nodes(&self) -> Result<Vec<String>> {
        if !self.is_complete() {
            return Err(TreeError::TreeIncomplete);
        }
        let mut leaves = Vec::new();
        let mut stack = vec![ROOT_ID.to_string()];
        while let Some(id) = stack.pop() {
            let node = self.node(&id)?;
            if node.kind == NodeKind::Leaf {
                leaves.push(id);
            }
            stack.extend(node.children.iter().rev().cloned());
        }
        Ok(leaves)
    }

    fn require_pending(&self, id: &str) -> Result<&SpaceNode> {
        let node = self.node(id)?;
        if node.kind != NodeKind::Pending {
            return Err(TreeError::AlreadyExpanded(id.to_string()));
        }
        Ok(node)
    }

    fn dequeue(&mut self, id: &str) {
        if let BuildState::InProgress { frontier } = &mut self.build_state {
            frontier.retain(|f| f != id);
            if frontier.is_empty() {
                self.build_state = BuildState::Complete;
            }
        }
    }

    fn enqueue(&mut self, ids: &[String]) {
        match &mut self.build_state {
            BuildState::InProgress { frontier } => frontier.extend_from_slice(ids),
            BuildState::Complete => {
                self.build_state = BuildState::InProgress { frontier: ids.to_vec() }
            }
        }
    }

    /// Splits a pending node on `dimension`. Returns the new child ids.
    ///
    /// More than `max_attribute_values` values, or a dimension flagged
    /// unbounded, yields an unbounded node with one child; the value pool
    /// stays on the parent's dimension.
    pub fn attach_split(&mut self, id: &str, dimension: DimensionSpec) -> Result<Vec<String>> {
        let node = self.require_pending(id)?;
        let depth = node.depth;
        if depth >= self.config.max_depth {
            return Err(TreeError::DepthExceeded {
                id: id.to_string(),
                depth,
                max_depth: self.config.max_depth,
            });
        }
        dimension.validate()?;
        let used: HashSet<String> = self
            .path(id)?
            .iter()
            .map(|a| normalize_label(&a.dimension))
            .collect();
        if used.contains(&normalize_label(&dimension.name)) {
            return Err(TreeError::InvalidDimension(format!(
                "dimension `{}` already constrains the path of `{id}`",
                dimension.name
            )));
        }

        let unbounded = dimension.unbounded
            || dimension.full_values.len() > self.config.max_attribute_values as usize;
        let children: Vec<SpaceNode> = if unbounded {
            vec![SpaceNode::pending(
                format!("{id}.0"),
                depth + 1,
                Some(InheritedAttribute { dimension: dimension.name.clone(), value: None }),
            )]
        } else {
            dimension
                .full_values
                .iter()
                .enumerate()
                .map(|(i, v)| {
                    SpaceNode::pending(
                        format!("{id}.{i}"),
                        depth + 1,
                        Some(InheritedAttribute {
                            dimension: dimension.name.clone(),
                            value: Some(v.clone()),
                        }),
                    )
                })
                .collect()
        };
        let child_ids: Vec<String> = children.iter().map(|c| c.id.clone()).collect();

        let parent = self.node_mut(id)?;
        parent.kind = if unbounded { NodeKind::Unbounded } else { NodeKind::Internal };
        parent.dimension = Some(dimension);
        parent.children = child_ids.clone();

        for child in children {
            self.index.insert(child.id.clone(), self.nodes.len());
            self.nodes.push(child);
        }
        self.dequeue(id);
        self.enqueue(&child_ids);
        Ok(child_ids)
    }

    /// Marks a pending node at max depth as a leaf.
    pub fn mark_leaf(&mut self, id: &str) -> Result<()> {
        let node = self.require_pending(id)?;
        if node.depth < self.config.max_depth {
            return Err(TreeError::PrematureLeaf {
                id: id.to_string(),
                depth: node.depth,
                max_depth: self.config.max_depth,
            });
        }
        self.node_mut(id)?.kind = NodeKind::Leaf;
        self.dequeue(id);
        Ok(())
    }

    /// Ends expansion of a pending node early, recording why.
    pub fn terminalize(&mut self, id: &str, reason: impl Into<String>) -> Result<()> {
        self.require_pending(id)?;
        let node = self.node_mut(id)?;
        node.kind = NodeKind::Leaf;
        node.terminal_reason = Some(reason.into());
        self.dequeue(id);
        Ok(())
    }

    /// Nodes terminalized before reaching max depth, with their reasons.
    pub fn terminalized(&self) -> Vec<(&str, &str)> {
        self.nodes
            .iter()
            .filter_map(|n| n.terminal_reason.as_deref().map(|r| (n.id.as_str(), r)))
            .collect()
    }

    /// Checks every structural invariant of the tree.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(TreeError::Malformed(msg));
        self.config.validate()?;
        if self.nodes.first().map(|n| n.id.as_str()) != Some(ROOT_ID) {
            return bad("first node must be the root".into());
        }
        if self.index.len() != self.nodes.len() {
            return bad("duplicate node ids".into());
        }
        let max_depth = self.config.max_depth;
        let mut parent_count: HashMap<&str, usize> = HashMap::new();
        for node in &self.nodes {
            if node.depth > max_depth {
                return bad(format!("node `{}` exceeds max depth", node.id));
            }
            if node.id == ROOT_ID {
                if node.depth != 0 || node.inherited_attribute.is_some() {
                    return bad("root must be at depth 0 with no inherited attribute".into());
                }
            } else {
                let Some(pid) = parent_id(&node.id) else {
                    return bad(format!("node id `{}` has no parent segment", node.id));
                };
                let parent = self.node(pid).map_err(|_| {
                    TreeError::Malformed(format!("node `{}` has no parent", node.id))
                })?;
                if !parent.children.contains(&node.id) {
                    return bad(format!("node `{}` is not listed by its parent", node.id));
                }
                if node.depth != parent.depth + 1 {
                    return bad(format!("node `{}` has inconsistent depth", node.id));
                }
                if node.inherited_attribute.is_none() {
                    return bad(format!("node `{}` lacks an inherited attribute", node.id));
                }
            }
            for (i, child) in node.children.iter().enumerate() {
                if *child != format!("{}.{i}", node.id) {
                    return bad(format!("child `{child}` of `{}` is out of position", node.id));
                }
                if self.node(child).is_err() {
                    return bad(format!("node `{}` lists unknown child `{child}`", node.id));
                }
                *parent_count.entry(child.as_str()).or_default() += 1;
            }
            self.validate_node(node)?;
        }
        if let Some((id, _)) = parent_count.iter().find(|(_, &c)| c != 1) {
            return bad(format!("node `{id}` has more than one parent"));
        }
        if parent_count.len() + 1 != self.nodes.len() {
            return bad("tree is not connected".into());
        }

        let pending: Vec<&str> = self
            .nodes
            .iter()
            .filter(|n| n.kind == NodeKind::Pending)
            .map(|n| n.id.as_str())
            .collect();
        match &self.build_state {
            BuildState::Complete => {
                if !pending.is_empty() {
                    return bad("complete tree contains pending nodes".into());
                }
            }
            BuildState::InProgress { frontier } => {
                let mut seen = HashSet::new();
                for id in frontier {
                    let node = self.node(id)?;
                    if node.kind != NodeKind::Pending || !seen.insert(id.as_str()) {
                        return bad(format!("frontier entry `{id}` is not an unexpanded node"));
                    }
                }
                if seen.len() != pending.len() {
                    return bad("pending nodes missing from the frontier".into());
                }
            }
        }
        Ok(())
    }

    fn validate_node(&self, node: &SpaceNode) -> Result<()> {
        let bad = |msg: String| Err(TreeError::Malformed(msg));
        let id = &node.id;
        let path = self.path(id)?;
        let mut dims = HashSet::new();
        for attr in path.iter() {
            if !dims.insert(normalize_label(&attr.dimension)) {
                return bad(format!("dimension `{}` repeats on the path of `{id}`", attr.dimension));
            }
        }
        match node.kind {
            NodeKind::Pending => {
                if !node.children.is_empty() || node.dimension.is_some() {
                    return bad(format!("pending node `{id}` has been expanded"));
                }
            }
            NodeKind::Leaf => {
                if !node.children.is_empty() {
                    return bad(format!("leaf `{id}` has children"));
                }
                if node.depth < self.config.max_depth && node.terminal_reason.is_none() {
                    return bad(format!("leaf `{id}` above max depth has no terminal reason"));
                }
            }
            NodeKind::Internal => {
                let Some(dim) = &node.dimension else {
                    return bad(format!("internal node `{id}` has no dimension"));
                };
                dim.validate()?;
                if dim.unbounded || dim.full_values.len() != node.children.len() {
                    return bad(format!("children of `{id}` do not enumerate its values"));
                }
                let mut labels = HashSet::new();
                for (child_id, value) in node.children.iter().zip(&dim.full_values) {
                    let child = self.node(child_id)?;
                    let expected = InheritedAttribute {
                        dimension: dim.name.clone(),
                        value: Some(value.clone()),
                    };
                    if child.inherited_attribute.as_ref() != Some(&expected) {
                        return bad(format!("child `{child_id}` does not carry value `{}`", value.label));
                    }
                    if !labels.insert(value.normalized()) {
                        return bad(format!("children of `{id}` are not mutually exclusive"));
                    }
                }
            }
            NodeKind::Unbounded => {
                let Some(dim) = &node.dimension else {
                    return bad(format!("unbounded node `{id}` has no dimension"));
                };
                dim.validate()?;
                if node.children.len() != 1 {
                    return bad(format!("unbounded node `{id}` must have exactly one child"));
                }
                if !dim.unbounded && dim.full_values.len() <= self.config.max_attribute_values as usize
                {
                    return bad(format!("node `{id}` is unbounded but its values fit under the cap"));
                }
                let child = self.node(&node.children[0])?;
                let deferred = child
                    .inherited_attribute
                    .as_ref()
                    .is_some_and(|a| a.is_deferred() && a.dimension == dim.name);
                if !deferred {
                    return bad(format!("child of unbounded `{id}` must defer its value"));
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let mut out = serde_json::to_string_pretty(self).expect("tree serializes");
        out.push('\n');
        out
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: RawTree = serde_json::from_str(text)?;
        let mut tree = Self {
            root_description: raw.root_description,
            config: raw.config,
            build_state: raw.build_state,
            nodes: raw.nodes,
            index: HashMap::new(),
        };
        tree.reindex();
        tree.validate()?;
        Ok(tree)
    }

    /// Hex SHA-256 of the serialized tree.
    pub fn fingerprint(&self) -> String {
        hex::encode(Sha256::digest(self.to_json().as_bytes()))
    }
}
