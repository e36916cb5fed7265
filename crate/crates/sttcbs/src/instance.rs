//! Problem representation, JSON instance IO, and random grid generation.
//!
//! Instances are immutable once constructed: the solver and simulator share
//! them read-only across threads.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum InstanceError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("validation: {0}")]
    Validation(String),
}

fn invalid(msg: impl Into<String>) -> InstanceError {
    InstanceError::Validation(msg.into())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub i64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AgentId(pub i64);

impl std::fmt::Display for NodeId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::fmt::Display for AgentId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeRecord {
    pub id: NodeId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub y: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EdgeRecord {
    pub u: NodeId,
    pub v: NodeId,
    /// Nominal traversal time in seconds, strictly positive.
    pub t: f64,
}

/// Undirected graph with nominal traversal times on edges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Graph {
    pub nodes: Vec<NodeRecord>,
    pub edges: Vec<EdgeRecord>,
}

/// Rate and per-node shape parameters of the gamma delay model. The delay
/// accumulated along a path is gamma with shape equal to the sum of the
/// shapes of the traversed nodes, all under the shared rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DelayModel {
    pub lambda: f64,
    pub default_shape: f64,
    #[serde(default)]
    pub node_shape: BTreeMap<String, f64>,
}

impl DelayModel {
    pub fn uniform(lambda: f64, shape: f64) -> Self {
        DelayModel { lambda, default_shape: shape, node_shape: BTreeMap::new() }
    }

    pub fn shape(&self, node: NodeId) -> f64 {
        self.node_shape.get(&node.0.to_string()).copied().unwrap_or(self.default_shape)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentTask {
    pub id: AgentId,
    pub start: NodeId,
    pub goal: NodeId,
}

/// A validated problem: graph, delay model, and agent tasks. Construct via
/// [`ProblemInstance::new`], [`parse_instance`], or [`generate_grid`] so the
/// invariants and the adjacency index are always in place.
#[derive(Debug, Clone, PartialEq)]
pub struct ProblemInstance {
    pub nodes: Vec<NodeRecord>,
    pub edges: Vec<EdgeRecord>,
    pub delay: DelayModel,
    pub agents: Vec<AgentTask>,
    index: GraphIndex,
}

/// Adjacency and lookup tables derived from the node/edge lists.
#[derive(Debug, Clone, Default, PartialEq)]
struct GraphIndex {
    node_pos: HashMap<NodeId, usize>,
    adjacency: HashMap<NodeId, Vec<(NodeId, f64)>>,
    edge_time: HashMap<(NodeId, NodeId), f64>,
}

impl GraphIndex {
    fn build(nodes: &[NodeRecord], edges: &[EdgeRecord]) -> Self {
        let mut node_pos = HashMap::new();
        for (i, n) in nodes.iter().enumerate() {
            node_pos.insert(n.id, i);
        }
        let mut adjacency: HashMap<NodeId, Vec<(NodeId, f64)>> = HashMap::new();
        let mut edge_time = HashMap::new();
        for e in edges {
            adjacency.entry(e.u).or_default().push((e.v, e.t));
            adjacency.entry(e.v).or_default().push((e.u, e.t));
            edge_time.insert(key(e.u, e.v), e.t);
        }
        for neighbors in adjacency.values_mut() {
            neighbors.sort_by(|a, b| a.0.cmp(&b.0));
        }
        GraphIndex { node_pos, adjacency, edge_time }
    }
}

fn key(u: NodeId, v: NodeId) -> (NodeId, NodeId) {
    if u <= v {
        (u, v)
    } else {
        (v, u)
    }
}

impl ProblemInstance {
    pub fn new(
        nodes: Vec<NodeRecord>,
        edges: Vec<EdgeRecord>,
        delay: DelayModel,
        agents: Vec<AgentTask>,
    ) -> Result<Self, InstanceError> {
        let index = GraphIndex::build(&nodes, &edges);
        let instance = ProblemInstance { nodes, edges, delay, agents, index };
        instance.validate()?;
        Ok(instance)
    }

    pub fn validate(&self) -> Result<(), InstanceError> {
        let mut ids = HashSet::new();
        for n in &self.nodes {
            if !ids.insert(n.id) {
                return Err(invalid(format!("duplicate node id {}", n.id)));
            }
        }
        let mut pairs = HashSet::new();
        for e in &self.edges {
            if e.u == e.v {
                return Err(invalid(format!("self-loop at node {}", e.u)));
            }
            for end in [e.u, e.v] {
                if !ids.contains(&end) {
                    return Err(invalid(format!("edge references unknown node {end}")));
                }
            }
            if !pairs.insert(key(e.u, e.v)) {
                return Err(invalid(format!("duplicate edge between {} and {}", e.u, e.v)));
            }
            if !(e.t.is_finite() && e.t > 0.0) {
                return Err(invalid(format!(
                    "nonpositive edge time {} between {} and {}",
                    e.t, e.u, e.v
                )));
            }
        }
        if !(self.delay.lambda.is_finite() && self.delay.lambda > 0.0) {
            return Err(invalid("delay rate lambda must be positive and finite"));
        }
        if !(self.delay.default_shape.is_finite() && self.delay.default_shape > 0.0) {
            return Err(invalid("default delay shape must be positive and finite"));
        }
        for (node, shape) in &self.delay.node_shape {
            let id: i64 = node
                .parse()
                .map_err(|_| invalid(format!("node_shape key {node:?} is not a node id")))?;
            if !ids.contains(&NodeId(id)) {
                return Err(invalid(format!("node_shape references unknown node {id}")));
            }
            if !(shape.is_finite() && *shape > 0.0) {
                return Err(invalid(format!("nonpositive shape {shape} at node {id}")));
            }
        }
        let mut agent_ids = HashSet::new();
        let mut starts = HashSet::new();
        let mut goals = HashSet::new();
        for a in &self.agents {
            if !agent_ids.insert(a.id) {
                return Err(invalid(format!("duplicate agent id {}", a.id)));
            }
            for (name, node) in [("start", a.start), ("goal", a.goal)] {
                if !ids.contains(&node) {
                    return Err(invalid(format!("agent {} {name} node {node} not in graph", a.id)));
                }
            }
            if !starts.insert(a.start) {
                return Err(invalid(format!("two agents share start node {}", a.start)));
            }
            if !goals.insert(a.goal) {
                return Err(invalid(format!("two agents share goal node {}", a.goal)));
            }
        }
        Ok(())
    }

    pub fn has_node(&self, node: NodeId) -> bool {
        self.index.node_pos.contains_key(&node)
    }

    pub fn neighbors(&self, node: NodeId) -> &[(NodeId, f64)] {
        self.index.adjacency.get(&node).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Nominal traversal time of the undirected edge {u, v}, if present.
    pub fn edge_time(&self, u: NodeId, v: NodeId) -> Option<f64> {
        self.index.edge_time.get(&key(u, v)).copied()
    }

    pub fn shape(&self, node: NodeId) -> f64 {
        self.delay.shape(node)
    }

    pub fn task(&self, agent: AgentId) -> Option<&AgentTask> {
        self.agents.iter().find(|a| a.id == agent)
    }

    pub fn to_json(&self) -> String {
        #[derive(Serialize)]
        struct Doc<'a> {
            nodes: &'a [NodeRecord],
            edges: &'a [EdgeRecord],
            delay: &'a DelayModel,
            agents: &'a [AgentTask],
        }
        serde_json::to_string_pretty(&Doc {
            nodes: &self.nodes,
            edges: &self.edges,
            delay: &self.delay,
            agents: &self.agents,
        })
        .expect("instance serialization cannot fail")
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct InstanceDoc {
    nodes: Vec<NodeRecord>,
    edges: Vec<EdgeRecord>,
    delay: DelayModel,
    agents: Vec<AgentTask>,
}

pub fn parse_instance(text: &str) -> Result<ProblemInstance, InstanceError> {
    let doc: InstanceDoc = serde_json::from_str(text)?;
    ProblemInstance::new(doc.nodes, doc.edges, doc.delay, doc.agents)
}

pub fn load_instance(path: impl AsRef<Path>) -> Result<ProblemInstance, InstanceError> {
    let text = std::fs::read_to_string(path)?;
    parse_instance(&text)
}

pub fn save_instance(instance: &ProblemInstance, path: impl AsRef<Path>) -> Result<(), InstanceError> {
    std::fs::write(path, instance.to_json())?;
    Ok(())
}

/// Four-connected grid with uniform edge times and delay shapes. Starts and
/// goals are each sampled without replacement; deterministic per seed.
pub fn generate_grid(
    rows: u32,
    cols: u32,
    n_agents: u32,
    seed: u64,
    edge_time: f64,
    shape: f64,
    lambda: f64,
) -> Result<ProblemInstance, InstanceError> {
    let cells = (rows as u64) * (cols as u64);
    if rows == 0 || cols == 0 || cells < 2 {
        return Err(invalid("grid must have at least 2 cells"));
    }
    if n_agents == 0 {
        return Err(invalid("need at least one agent"));
    }
    if n_agents as u64 > cells {
        return Err(invalid(format!(
            "too many agents: {n_agents} agents for {cells} cells"
        )));
    }
    let id = |r: u32, c: u32| NodeId((r as i64) * (cols as i64) + c as i64);
    let mut nodes = Vec::with_capacity(cells as usize);
    let mut edges = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            nodes.push(NodeRecord { id: id(r, c), x: Some(c as f64), y: Some(r as f64) });
            if c + 1 < cols {
                edges.push(EdgeRecord { u: id(r, c), v: id(r, c + 1), t: edge_time });
            }
            if r + 1 < rows {
                edges.push(EdgeRecord { u: id(r, c), v: id(r + 1, c), t: edge_time });
            }
        }
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let all: Vec<NodeId> = nodes.iter().map(|n| n.id).collect();
    let mut starts = all.clone();
    starts.shuffle(&mut rng);
    starts.truncate(n_agents as usize);
    let mut goals = all;
    goals.shuffle(&mut rng);
    goals.truncate(n_agents as usize);
    let agents = starts
        .into_iter()
        .zip(goals)
        .enumerate()
        .map(|(i, (start, goal))| AgentTask { id: AgentId(i as i64), start, goal })
        .collect();
    ProblemInstance::new(nodes, edges, DelayModel::uniform(lambda, shape), agents)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal_json() -> &'static str {
        r#"{
            "nodes": [{"id": 0}, {"id": 1}],
            "edges": [{"u": 0, "v": 1, "t": 1.0}],
            "delay": {"lambda": 5.0, "default_shape": 1.0, "node_shape": {}},
            "agents": [{"id": 0, "start": 0, "goal": 1}]
        }"#
    }

    #[test]
    fn loads_minimal_instance() {
        let inst = parse_instance(minimal_json()).unwrap();
        assert_eq!(inst.agents.len(), 1);
        assert_eq!(inst.edge_time(NodeId(0), NodeId(1)), Some(1.0));
        assert_eq!(inst.shape(NodeId(0)), 1.0);
    }

    #[test]
    fn rejects_nonpositive_edge_time() {
        let text = minimal_json().replace("\"t\": 1.0", "\"t\": 0.0");
        let err = parse_instance(&text).unwrap_err();
        assert!(err.to_string().contains("nonpositive edge time"), "{err}");
    }

    #[test]
    fn rejects_unknown_keys() {
        let text = minimal_json().replace("\"agents\"", "\"bogus\": 1, \"agents\"");
        assert!(parse_instance(&text).is_err());
    }

    #[test]
    fn rejects_dangling_references_and_duplicates() {
        let dangling = minimal_json().replace("\"v\": 1", "\"v\": 7");
        assert!(parse_instance(&dangling).is_err());
        let shared_start = minimal_json().replace(
            r#"[{"id": 0, "start": 0, "goal": 1}]"#,
            r#"[{"id": 0, "start": 0, "goal": 1}, {"id": 1, "start": 0, "goal": 0}]"#,
        );
        assert!(parse_instance(&shared_start).is_err());
    }

    #[test]
    fn grid_counts_match_four_connectivity() {
        // 2 r c - r - c edges in an r x c four-connected grid.
        let inst = generate_grid(10, 10, 5, 1, 1.0, 1.0, 5.0).unwrap();
        assert_eq!(inst.nodes.len(), 100);
        assert_eq!(inst.edges.len(), 180);
        let starts: HashSet<_> = inst.agents.iter().map(|a| a.start).collect();
        let goals: HashSet<_> = inst.agents.iter().map(|a| a.goal).collect();
        assert_eq!(starts.len(), 5);
        assert_eq!(goals.len(), 5);
    }

    #[test]
    fn tiny_grid_and_overflow() {
        let inst = generate_grid(1, 2, 1, 0, 1.0, 1.0, 5.0).unwrap();
        assert_eq!(inst.nodes.len(), 2);
        assert_eq!(inst.edges.len(), 1);
        let err = generate_grid(2, 2, 5, 0, 1.0, 1.0, 5.0).unwrap_err();
        assert!(err.to_string().contains("too many agents"), "{err}");
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("inst.json");
        for seed in 0..8 {
            let inst = generate_grid(4, 5, 3, seed, 0.7300000000000001, 1.25, 5.0).unwrap();
            save_instance(&inst, &path).unwrap();
            let loaded = load_instance(&path).unwrap();
            assert_eq!(inst, loaded, "seed {seed}");
            // Bit-exact float round trip.
            assert_eq!(loaded.edges[0].t, 0.7300000000000001);
        }
    }

    #[test]
    fn generation_is_deterministic_per_seed() {
        let a = generate_grid(6, 6, 4, 42, 1.0, 1.0, 5.0).unwrap();
        let b = generate_grid(6, 6, 4, 42, 1.0, 1.0, 5.0).unwrap();
        assert_eq!(a.to_json(), b.to_json());
        let c = generate_grid(6, 6, 4, 43, 1.0, 1.0, 5.0).unwrap();
        assert_ne!(a.to_json(), c.to_json());
    }

    #[test]
    fn generated_instances_validate_across_seeds() {
        for seed in 0..32 {
            let inst = generate_grid(5, 7, 6, seed, 2.0, 0.5, 3.0).unwrap();
            inst.validate().unwrap();
        }
    }

    #[test]
    fn save_to_unwritable_path_errors() {
        let inst = generate_grid(2, 2, 1, 0, 1.0, 1.0, 5.0).unwrap();
        let err = save_instance(&inst, "/nonexistent-dir/inst.json").unwrap_err();
        assert!(matches!(err, InstanceError::Io(_)));
    }
}
