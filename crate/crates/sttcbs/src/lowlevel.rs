//! Single-agent planner: minimum expected travel time under release-time
//! constraints.
//!
//! The objective is `planned goal arrival + cumulative shape / lambda`, the
//! expected travel time under the delay model. Constraints are one-sided
//! (earliest permitted arrival at a node, or entry into a directed edge), so
//! for a fixed node sequence the earliest feasible schedule is optimal and
//! waiting is only ever useful until a release time of the next element.
//! The search therefore runs over states `(node, arrival, shape)` with
//! event-driven departures, node revisits allowed, and Pareto dominance
//! pruning on (arrival, shape).

use crate::instance::{AgentId, NodeId, ProblemInstance};
use std::collections::{BinaryHeap, HashMap};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Element {
    Node(NodeId),
    DirectedEdge { from: NodeId, to: NodeId },
}

impl std::fmt::Display for Element {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Element::Node(n) => write!(f, "node {n}"),
            Element::DirectedEdge { from, to } => write!(f, "edge {from}->{to}"),
        }
    }
}

/// Earliest permitted arrival of `agent` at `element` (node arrival, or edge
/// entry for a directed edge). An infinite release prohibits the element.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Constraint {
    pub agent: AgentId,
    pub element: Element,
    pub release_time: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Visit {
    pub node: NodeId,
    pub arrival: f64,
    pub departure: f64,
    /// Sum of delay shapes of all nodes visited strictly before this arrival
    /// (the start node included once traversed).
    pub shape_before: f64,
}

/// An agent's schedule: node visits with planned arrival/departure times.
/// Waiting happens only at nodes; consecutive visits are joined by graph
/// edges; the first arrival is at time zero.
#[derive(Debug, Clone, PartialEq)]
pub struct TimedPath {
    visits: Vec<Visit>,
    total_shape: f64,
}

#[derive(Debug, Clone, thiserror::Error)]
pub enum PlanError {
    #[error("agent {0} not in instance")]
    UnknownAgent(AgentId),
    #[error("agent {0}: goal unreachable under current constraints")]
    UnreachableGoal(AgentId),
    #[error("agent {0}: start node is constrained at time 0; no feasible plan")]
    StartBlocked(AgentId),
    #[error("agent {0}: search exhausted its state budget")]
    SearchExhausted(AgentId),
    #[error("invalid path: {0}")]
    InvalidPath(String),
}

impl TimedPath {
    pub fn visits(&self) -> &[Visit] {
        &self.visits
    }

    pub fn goal_arrival(&self) -> f64 {
        self.visits.last().expect("paths are nonempty").arrival
    }

    pub fn total_shape(&self) -> f64 {
        self.total_shape
    }

    /// Rebuild a path from (node, arrival, departure) triples, recomputing
    /// cumulative shapes and checking the path invariants against the graph.
    pub fn from_times(
        instance: &ProblemInstance,
        times: &[(NodeId, f64, f64)],
    ) -> Result<Self, PlanError> {
        let bad = PlanError::InvalidPath;
        if times.is_empty() {
            return Err(bad("path has no visits".into()));
        }
        if times[0].1.abs() > 1e-12 {
            return Err(bad(format!("first arrival must be 0, got {}", times[0].1)));
        }
        let mut visits = Vec::with_capacity(times.len());
        let mut shape = 0.0;
        for (i, &(node, arrival, departure)) in times.iter().enumerate() {
            if !instance.has_node(node) {
                return Err(bad(format!("unknown node {node}")));
            }
            if departure < arrival - 1e-12 {
                return Err(bad(format!("departure before arrival at node {node}")));
            }
            if i > 0 {
                let prev = &times[i - 1];
                let t_e = instance
                    .edge_time(prev.0, node)
                    .ok_or_else(|| bad(format!("no edge between {} and {node}", prev.0)))?;
                let expect = prev.2 + t_e;
                if (arrival - expect).abs() > 1e-9 {
                    return Err(bad(format!(
                        "arrival at {node} is {arrival}, expected departure + edge time = {expect}"
                    )));
                }
            }
            visits.push(Visit { node, arrival, departure, shape_before: shape });
            shape += instance.shape(node);
        }
        Ok(TimedPath { visits, total_shape: shape })
    }

    /// Expected travel time: planned goal arrival plus expected total delay.
    pub fn expected_cost(&self, lambda: f64) -> PathCost {
        PathCost { expected_travel_time: self.goal_arrival() + self.total_shape / lambda }
    }

    /// Planned times at every occurrence of an element along this path:
    /// arrivals for a node, entry times for a directed edge.
    pub fn element_times(&self, element: &Element) -> Vec<f64> {
        match element {
            Element::Node(n) => {
                self.visits.iter().filter(|v| v.node == *n).map(|v| v.arrival).collect()
            }
            Element::DirectedEdge { from, to } => self
                .visits
                .windows(2)
                .filter(|w| w[0].node == *from && w[1].node == *to)
                .map(|w| w[0].departure)
                .collect(),
        }
    }

    pub fn satisfies(&self, c: &Constraint) -> bool {
        self.element_times(&c.element).iter().all(|&t| t >= c.release_time)
    }
}

/// Expected travel time of a path under the shared delay rate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathCost {
    pub expected_travel_time: f64,
}

pub fn expected_cost(path: &TimedPath, lambda: f64) -> PathCost {
    path.expected_cost(lambda)
}

/// Objective minimized by the planner. The deterministic CBS baseline plans
/// against nominal arrival times only.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CostModel {
    ExpectedDelay { lambda: f64 },
    Nominal,
}

impl CostModel {
    fn g(&self, arrival: f64, shape: f64) -> f64 {
        match self {
            CostModel::ExpectedDelay { lambda } => arrival + shape / lambda,
            CostModel::Nominal => arrival,
        }
    }
}

#[derive(Debug, Default)]
struct ConstraintTable {
    node: HashMap<NodeId, f64>,
    edge: HashMap<(NodeId, NodeId), f64>,
}

impl ConstraintTable {
    fn build(agent: AgentId, constraints: &[Constraint]) -> Self {
        let mut table = ConstraintTable::default();
        for c in constraints.iter().filter(|c| c.agent == agent) {
            match c.element {
                Element::Node(n) => {
                    let r = table.node.entry(n).or_insert(0.0);
                    *r = r.max(c.release_time);
                }
                Element::DirectedEdge { from, to } => {
                    let r = table.edge.entry((from, to)).or_insert(0.0);
                    *r = r.max(c.release_time);
                }
            }
        }
        table
    }

    fn node_release(&self, n: NodeId) -> f64 {
        self.node.get(&n).copied().unwrap_or(0.0)
    }

    fn edge_release(&self, from: NodeId, to: NodeId) -> f64 {
        self.edge.get(&(from, to)).copied().unwrap_or(0.0)
    }
}

/// Nominal shortest distance to `goal` from every reachable node.
fn nominal_distances(instance: &ProblemInstance, goal: NodeId) -> HashMap<NodeId, f64> {
    let mut dist: HashMap<NodeId, f64> = HashMap::new();
    let mut heap: BinaryHeap<std::cmp::Reverse<(u64, NodeId)>> = BinaryHeap::new();
    // Distances are nonnegative finite, so their bit patterns order like the
    // values themselves.
    dist.insert(goal, 0.0);
    heap.push(std::cmp::Reverse((0u64, goal)));
    while let Some(std::cmp::Reverse((dbits, node))) = heap.pop() {
        let d = f64::from_bits(dbits);
        if d > dist[&node] {
            continue;
        }
        for &(nbr, t_e) in instance.neighbors(node) {
            let nd = d + t_e;
            if dist.get(&nbr).is_none_or(|&old| nd < old) {
                dist.insert(nbr, nd);
                heap.push(std::cmp::Reverse((nd.to_bits(), nbr)));
            }
        }
    }
    dist
}

struct SearchState {
    node: NodeId,
    arrival: f64,
    shape: f64,
    visits: Vec<Visit>,
}

struct HeapEntry {
    f: f64,
    seq: u64,
    state: SearchState,
}

impl PartialEq for HeapEntry {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == std::cmp::Ordering::Equal
    }
}

impl Eq for HeapEntry {}

impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for HeapEntry {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        // BinaryHeap is a max-heap; order reversed so the best entry pops
        // first: lowest f, then fewest visits, then lexicographically
        // smallest node sequence, then insertion order.
        other
            .f
            .total_cmp(&self.f)
            .then_with(|| other.state.visits.len().cmp(&self.state.visits.len()))
            .then_with(|| {
                let a = self.state.visits.iter().map(|v| v.node);
                let b = other.state.visits.iter().map(|v| v.node);
                b.cmp(a)
            })
            .then_with(|| other.seq.cmp(&self.seq))
    }
}

const STATE_BUDGET: usize = 2_000_000;

pub fn plan(
    instance: &ProblemInstance,
    agent: AgentId,
    constraints: &[Constraint],
) -> Result<TimedPath, PlanError> {
    plan_with_cost(
        instance,
        agent,
        constraints,
        CostModel::ExpectedDelay { lambda: instance.delay.lambda },
    )
}

pub fn plan_with_cost(
    instance: &ProblemInstance,
    agent: AgentId,
    constraints: &[Constraint],
    cost: CostModel,
) -> Result<TimedPath, PlanError> {
    let task = *instance.task(agent).ok_or(PlanError::UnknownAgent(agent))?;
    let table = ConstraintTable::build(agent, constraints);
    // The agent occupies its start at time 0; any positive (or infinite)
    // release there is unsatisfiable.
    if table.node_release(task.start) > 0.0 {
        return Err(PlanError::StartBlocked(agent));
    }
    let h = nominal_distances(instance, task.goal);
    if !h.contains_key(&task.start) {
        return Err(PlanError::UnreachableGoal(agent));
    }

    let start_shape = instance.shape(task.start);
    let start = SearchState {
        node: task.start,
        arrival: 0.0,
        shape: start_shape,
        visits: vec![Visit { node: task.start, arrival: 0.0, departure: 0.0, shape_before: 0.0 }],
    };
    let mut open = BinaryHeap::new();
    let mut seq = 0u64;
    let f0 = cost.g(0.0, start_shape) + h[&task.start];
    open.push(HeapEntry { f: f0, seq, state: start });

    // Pareto frontier of (arrival, shape) per node, settled at pop time.
    let mut closed: HashMap<NodeId, Vec<(f64, f64)>> = HashMap::new();
    let mut pops = 0usize;

    while let Some(entry) = open.pop() {
        let state = entry.state;
        pops += 1;
        if pops > STATE_BUDGET {
            return Err(PlanError::SearchExhausted(agent));
        }
        let frontier = closed.entry(state.node).or_default();
        if frontier.iter().any(|&(t, s)| t <= state.arrival && s <= state.shape) {
            continue;
        }
        frontier.retain(|&(t, s)| !(state.arrival <= t && state.shape <= s));
        frontier.push((state.arrival, state.shape));

        if state.node == task.goal {
            let mut visits = state.visits;
            let last = visits.last_mut().expect("nonempty");
            last.departure = last.arrival;
            return Ok(TimedPath { visits, total_shape: state.shape });
        }

        for &(nbr, t_e) in instance.neighbors(state.node) {
            let dep = state
                .arrival
                .max(table.edge_release(state.node, nbr))
                .max(table.node_release(nbr) - t_e);
            if !dep.is_finite() {
                continue;
            }
            let arrival = dep + t_e;
            let shape = state.shape + instance.shape(nbr);
            if let Some(frontier) = closed.get(&nbr) {
                if frontier.iter().any(|&(t, s)| t <= arrival && s <= shape) {
                    continue;
                }
            }
            let mut visits = state.visits.clone();
            visits.last_mut().expect("nonempty").departure = dep;
            visits.push(Visit { node: nbr, arrival, departure: arrival, shape_before: state.shape });
            seq += 1;
            let f = cost.g(arrival, shape) + h.get(&nbr).copied().unwrap_or(f64::INFINITY);
            if !f.is_finite() {
                continue;
            }
            open.push(HeapEntry { f, seq, state: SearchState { node: nbr, arrival, shape, visits } });
        }
    }
    Err(PlanError::UnreachableGoal(agent))
}
