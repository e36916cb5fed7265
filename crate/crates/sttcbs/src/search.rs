//! High-level constraint-tree search.
//!
//! Best-first expansion over constraint-tree nodes ordered by solution cost.
//! Conflicts are detected by sweeping every agent pair: shared node visits
//! (two-sided, or one-sided when the visit parks an agent at its goal) and
//! maximal merged segments of consecutive edges traversed in opposite
//! directions, scored by the analytic probabilities in [`crate::prob`]. The
//! most likely conflict above `epsilon` is branched on: each agent in turn
//! yields, receiving a release-time constraint found by stepping its planned
//! time in increments of `dt` (or by bracketing plus bisection) until the
//! recomputed probability drops below `epsilon`.
//!
//! A deterministic baseline mode runs classic CBS over the same
//! continuous-time schedules with zero stochastic delay: conflicts are
//! overlapping nominal occupancy intervals and releases are the other agent's
//! nominal departure.

use crate::instance::{AgentId, NodeId, ProblemInstance};
use crate::lowlevel::{
    plan_with_cost, Constraint, CostModel, Element, PlanError, TimedPath,
};
use crate::prob::{
    edge_conflict_prob, edge_conflict_prob_bound, goal_occupancy_conflict_prob,
    goal_occupancy_prob_bound, node_conflict_prob, node_conflict_prob_bound, EdgeConflictQuery,
    NodeConflictQuery, ProbError, QuadratureConfig,
};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BinaryHeap};
use std::time::Instant;

/// Gap added to a deterministic-baseline release so the yielding agent does
/// not arrive exactly when the other departs (closed occupancy intervals
/// would re-overlap at the boundary point and stall the search).
const BASELINE_RELEASE_PAD: f64 = 1e-6;

/// Hard cap on release-search iterations; conflict probabilities vanish at
/// large separation, so hitting this means the quadrature is pathological.
const RELEASE_STEP_CAP: u64 = 1_000_000;

#[derive(Debug, thiserror::Error)]
pub enum SolveError {
    #[error("invalid solver config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Prob(#[from] ProbError),
    #[error("node budget exhausted after {expanded} expansions (open {open}, best cost {best_cost})")]
    BudgetExhausted { expanded: usize, open: usize, best_cost: f64 },
    #[error("release-time search did not terminate")]
    ReleaseSearchDiverged,
    #[error("solution file: {0}")]
    SolutionFormat(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveMode {
    Stochastic,
    DeterministicBaseline,
}

impl SolveMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            SolveMode::Stochastic => "stt",
            SolveMode::DeterministicBaseline => "cbs",
        }
    }
}

#[derive(Debug, Clone)]
pub struct SolverConfig {
    /// Conflict-probability threshold; a solution is valid when every
    /// pairwise element probability is at or below it.
    pub epsilon: f64,
    /// Release-time step.
    pub dt: f64,
    pub use_binary_search: bool,
    /// Bisection width at which the binary release search stops.
    pub bs_time_tol: f64,
    pub quadrature: QuadratureConfig,
    /// Maximum constraint-tree expansions.
    pub node_budget: usize,
    pub mode: SolveMode,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            epsilon: 0.01,
            dt: 0.1,
            use_binary_search: false,
            bs_time_tol: 1e-3,
            quadrature: QuadratureConfig::default(),
            node_budget: 10_000,
            mode: SolveMode::Stochastic,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<(), SolveError> {
        let bad = |m: &str| Err(SolveError::InvalidConfig(m.into()));
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return bad("epsilon out of range (0, 1)");
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return bad("dt must be positive");
        }
        if !(self.bs_time_tol > 0.0 && self.bs_time_tol.is_finite()) {
            return bad("bs_time_tol must be positive");
        }
        if self.node_budget == 0 {
            return bad("node_budget must be positive");
        }
        self.quadrature.validate().map_err(SolveError::Prob)
    }

    fn cost_model(&self, instance: &ProblemInstance) -> CostModel {
        match self.mode {
            SolveMode::Stochastic => CostModel::ExpectedDelay { lambda: instance.delay.lambda },
            SolveMode::DeterministicBaseline => CostModel::Nominal,
        }
    }
}

/// Where a conflict lives.
#[derive(Debug, Clone, PartialEq)]
pub enum ConflictSite {
    Node { node: NodeId, n_m: f64 },
    /// Maximal run of consecutive edges traversed in opposite directions,
    /// listed in the first agent's travel order; `t_e` is the summed nominal
    /// time of the run.
    Segment { nodes: Vec<NodeId>, t_e: f64 },
    /// The resident is parked at `node` (its goal) for good.
    GoalOccupancy { node: NodeId, resident: AgentId, n_m: f64 },
}

/// A detected probable collision between two agents.
#[derive(Debug, Clone, PartialEq)]
pub struct Conflict {
    pub agents: (AgentId, AgentId),
    pub site: ConflictSite,
    pub probability: f64,
    /// Planned times of the two agents at the element (node arrival or
    /// segment entry), in `agents` order.
    pub times: (f64, f64),
    /// Cumulative delay shapes entering the query, in `agents` order.
    pub shapes: (f64, f64),
    pub lambda: f64,
    /// Baseline mode resolves conflicts with fixed releases (the other
    /// agent's nominal occupancy end plus a pad), precomputed per yielder.
    fixed_release: Option<(f64, f64)>,
}

impl std::fmt::Display for Conflict {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let (a, b) = self.agents;
        match &self.site {
            ConflictSite::Node { node, .. } => {
                write!(f, "agents {a},{b} at node {node} (t={:.3},{:.3})", self.times.0, self.times.1)?
            }
            ConflictSite::Segment { nodes, t_e } => {
                let names: Vec<String> = nodes.iter().map(|n| n.to_string()).collect();
                write!(
                    f,
                    "agents {a},{b} opposing on segment {} (t_e={t_e}, entries {:.3},{:.3})",
                    names.join("-"),
                    self.times.0,
                    self.times.1
                )?
            }
            ConflictSite::GoalOccupancy { node, resident, .. } => {
                write!(f, "agents {a},{b}: goal occupancy at node {node} (resident {resident})")?
            }
        }
        write!(f, " p={:.6}", self.probability)
    }
}

impl Conflict {
    fn min_time(&self) -> f64 {
        self.times.0.min(self.times.1)
    }

    /// Element the yielding agent is constrained on.
    pub fn element_for(&self, yielder: AgentId) -> Element {
        match &self.site {
            ConflictSite::Node { node, .. } => Element::Node(*node),
            ConflictSite::GoalOccupancy { node, .. } => Element::Node(*node),
            ConflictSite::Segment { nodes, .. } => {
                if yielder == self.agents.0 {
                    Element::DirectedEdge { from: nodes[0], to: nodes[1] }
                } else {
                    let k = nodes.len();
                    Element::DirectedEdge { from: nodes[k - 1], to: nodes[k - 2] }
                }
            }
        }
    }

    fn planned_time_of(&self, agent: AgentId) -> f64 {
        if agent == self.agents.0 {
            self.times.0
        } else {
            self.times.1
        }
    }
}

/// `a` strictly precedes `b` in the most-likely ordering: higher probability,
/// then earlier involvement, then smaller agent ids.
fn conflict_precedes(a: &Conflict, b: &Conflict) -> bool {
    if a.probability != b.probability {
        return a.probability > b.probability;
    }
    if a.min_time() != b.min_time() {
        return a.min_time() < b.min_time();
    }
    a.agents < b.agents
}

#[derive(Debug, Default, Clone, Copy)]
pub struct SweepStats {
    /// Full quadrature evaluations.
    pub prob_evals: u64,
    /// Candidates dismissed by the cheap upper bound.
    pub screened: u64,
}

impl SweepStats {
    fn add(&mut self, other: SweepStats) {
        self.prob_evals += other.prob_evals;
        self.screened += other.screened;
    }
}

/// One agent's visit of a node, as a conflict-query candidate.
#[derive(Debug, Clone, Copy)]
struct VisitInfo {
    arrival: f64,
    shape_before: f64,
    terminal: bool,
}

/// One directed edge traversal.
#[derive(Debug, Clone, Copy)]
struct Traversal {
    from: NodeId,
    to: NodeId,
    entry: f64,
    entry_shape: f64,
}

fn visits_by_node(path: &TimedPath) -> BTreeMap<NodeId, Vec<VisitInfo>> {
    let mut map: BTreeMap<NodeId, Vec<VisitInfo>> = BTreeMap::new();
    let last = path.visits().len() - 1;
    for (i, v) in path.visits().iter().enumerate() {
        map.entry(v.node).or_default().push(VisitInfo {
            arrival: v.arrival,
            shape_before: v.shape_before,
            terminal: i == last,
        });
    }
    map
}

fn traversals(path: &TimedPath) -> Vec<Traversal> {
    path.visits()
        .windows(2)
        .map(|w| Traversal {
            from: w[0].node,
            to: w[1].node,
            entry: w[0].departure,
            entry_shape: w[1].shape_before,
        })
        .collect()
}

/// A candidate conflict before its probability is known.
enum Candidate {
    Node { node: NodeId, a: VisitInfo, b: VisitInfo },
    Goal { node: NodeId, resident_is_first: bool, res: VisitInfo, vis: VisitInfo },
    Segment { nodes: Vec<NodeId>, t_e: f64, a: Traversal, b: Traversal },
}

impl Candidate {
    fn min_time(&self) -> f64 {
        match self {
            Candidate::Node { a, b, .. } => a.arrival.min(b.arrival),
            Candidate::Goal { res, vis, .. } => res.arrival.min(vis.arrival),
            Candidate::Segment { a, b, .. } => a.entry.min(b.entry),
        }
    }
}

fn enumerate_candidates(
    instance: &ProblemInstance,
    path_a: &TimedPath,
    path_b: &TimedPath,
) -> Vec<Candidate> {
    let mut out = Vec::new();
    let nodes_a = visits_by_node(path_a);
    let nodes_b = visits_by_node(path_b);
    for (node, va) in &nodes_a {
        let Some(vb) = nodes_b.get(node) else { continue };
        for a in va {
            for b in vb {
                debug_assert!(!(a.terminal && b.terminal), "two agents parked at one node");
                out.push(match (a.terminal, b.terminal) {
                    (false, false) => Candidate::Node { node: *node, a: *a, b: *b },
                    (true, false) => Candidate::Goal {
                        node: *node,
                        resident_is_first: true,
                        res: *a,
                        vis: *b,
                    },
                    (false, true) | (true, true) => Candidate::Goal {
                        node: *node,
                        resident_is_first: false,
                        res: *b,
                        vis: *a,
                    },
                });
            }
        }
    }
    // Maximal opposing runs: traversal i+k of the first agent matched against
    // traversal j-k of the second.
    let ta = traversals(path_a);
    let tb = traversals(path_b);
    let opposing = |x: &Traversal, y: &Traversal| x.from == y.to && x.to == y.from;
    for i in 0..ta.len() {
        for j in 0..tb.len() {
            if !opposing(&ta[i], &tb[j]) {
                continue;
            }
            // Only run starts; interior pairs are covered by their run.
            if i > 0 && j + 1 < tb.len() && opposing(&ta[i - 1], &tb[j + 1]) {
                continue;
            }
            let mut k = 1;
            while i + k < ta.len() && j >= k && opposing(&ta[i + k], &tb[j - k]) {
                k += 1;
            }
            let mut nodes = vec![ta[i].from];
            let mut t_e = 0.0;
            for step in 0..k {
                let t = &ta[i + step];
                t_e += instance.edge_time(t.from, t.to).expect("path edges exist");
                nodes.push(t.to);
            }
            out.push(Candidate::Segment { nodes, t_e, a: ta[i], b: tb[j + 1 - k] });
        }
    }
    out.sort_by(|x, y| x.min_time().total_cmp(&y.min_time()));
    out
}

/// Evaluate a candidate: cheap upper bound first, full quadrature only when
/// the bound clears `threshold`. Returns `None` when the probability is
/// certainly at or below the threshold.
fn evaluate_candidate(
    instance: &ProblemInstance,
    pair: (AgentId, AgentId),
    cand: &Candidate,
    threshold: f64,
    cfg: &QuadratureConfig,
    stats: &mut SweepStats,
) -> Result<Option<Conflict>, ProbError> {
    let lambda = instance.delay.lambda;
    match cand {
        Candidate::Node { node, a, b } => {
            let q = NodeConflictQuery::new(
                a.arrival - b.arrival,
                a.shape_before,
                b.shape_before,
                instance.shape(*node),
                lambda,
            )?;
            if node_conflict_prob_bound(&q, cfg) <= threshold {
                stats.screened += 1;
                return Ok(None);
            }
            stats.prob_evals += 1;
            let p = node_conflict_prob(&q, cfg)?;
            if p <= threshold {
                return Ok(None);
            }
            Ok(Some(Conflict {
                agents: pair,
                site: ConflictSite::Node { node: *node, n_m: instance.shape(*node) },
                probability: p,
                times: (a.arrival, b.arrival),
                shapes: (a.shape_before, b.shape_before),
                lambda,
                fixed_release: None,
            }))
        }
        Candidate::Goal { node, resident_is_first, res, vis } => {
            let delta = res.arrival - vis.arrival;
            let n_m = instance.shape(*node);
            if goal_occupancy_prob_bound(delta, res.shape_before, vis.shape_before, n_m, lambda, cfg)
                <= threshold
            {
                stats.screened += 1;
                return Ok(None);
            }
            stats.prob_evals += 1;
            let p = goal_occupancy_conflict_prob(
                delta,
                res.shape_before,
                vis.shape_before,
                n_m,
                lambda,
                cfg,
            )?;
            if p <= threshold {
                return Ok(None);
            }
            let (times, shapes) = if *resident_is_first {
                ((res.arrival, vis.arrival), (res.shape_before, vis.shape_before))
            } else {
                ((vis.arrival, res.arrival), (vis.shape_before, res.shape_before))
            };
            let resident = if *resident_is_first { pair.0 } else { pair.1 };
            Ok(Some(Conflict {
                agents: pair,
                site: ConflictSite::GoalOccupancy { node: *node, resident, n_m },
                probability: p,
                times,
                shapes,
                lambda,
                fixed_release: None,
            }))
        }
        Candidate::Segment { nodes, t_e, a, b } => {
            let q = EdgeConflictQuery::new(
                a.entry - b.entry,
                a.entry_shape,
                b.entry_shape,
                *t_e,
                lambda,
            )?;
            if edge_conflict_prob_bound(&q, cfg) <= threshold {
                stats.screened += 1;
                return Ok(None);
            }
            stats.prob_evals += 1;
            let p = edge_conflict_prob(&q, cfg)?;
            if p <= threshold {
                return Ok(None);
            }
            Ok(Some(Conflict {
                agents: pair,
                site: ConflictSite::Segment { nodes: nodes.clone(), t_e: *t_e },
                probability: p,
                times: (a.entry, b.entry),
                shapes: (a.entry_shape, b.entry_shape),
                lambda,
                fixed_release: None,
            }))
        }
    }
}

/// Per-pair detection summary, cached across constraint-tree nodes whose
/// paths for the pair are unchanged.
#[derive(Debug, Clone, Default)]
struct PairSummary {
    best: Option<Conflict>,
    count: usize,
}

fn sweep_pair_stochastic(
    instance: &ProblemInstance,
    pair: (AgentId, AgentId),
    path_a: &TimedPath,
    path_b: &TimedPath,
    epsilon: f64,
    cfg: &QuadratureConfig,
    stats: &mut SweepStats,
) -> Result<PairSummary, ProbError> {
    let mut summary = PairSummary::default();
    for cand in enumerate_candidates(instance, path_a, path_b) {
        if let Some(c) = evaluate_candidate(instance, pair, &cand, epsilon, cfg, stats)? {
            summary.count += 1;
            if summary.best.as_ref().is_none_or(|b| conflict_precedes(&c, b)) {
                summary.best = Some(c);
            }
        }
    }
    Ok(summary)
}

/// Planned occupancy of a node: `[arrival, departure]`, the final goal visit
/// parked forever.
fn baseline_node_intervals(path: &TimedPath) -> BTreeMap<NodeId, Vec<(f64, f64)>> {
    let mut map: BTreeMap<NodeId, Vec<(f64, f64)>> = BTreeMap::new();
    let last = path.visits().len() - 1;
    for (i, v) in path.visits().iter().enumerate() {
        let end = if i == last { f64::INFINITY } else { v.departure };
        map.entry(v.node).or_default().push((v.arrival, end));
    }
    map
}

fn sweep_pair_baseline(
    instance: &ProblemInstance,
    pair: (AgentId, AgentId),
    path_a: &TimedPath,
    path_b: &TimedPath,
) -> PairSummary {
    let lambda = instance.delay.lambda;
    let mut summary = PairSummary::default();
    let mut consider = |c: Conflict| {
        summary.count += 1;
        if summary.best.as_ref().is_none_or(|b| conflict_precedes(&c, b)) {
            summary.best = Some(c);
        }
    };
    let na = baseline_node_intervals(path_a);
    let nb = baseline_node_intervals(path_b);
    for (node, ia) in &na {
        let Some(ib) = nb.get(node) else { continue };
        for &(lo_a, hi_a) in ia {
            for &(lo_b, hi_b) in ib {
                if lo_a.max(lo_b) <= hi_a.min(hi_b) {
                    consider(Conflict {
                        agents: pair,
                        site: ConflictSite::Node { node: *node, n_m: instance.shape(*node) },
                        probability: 1.0,
                        times: (lo_a, lo_b),
                        shapes: (0.0, 0.0),
                        lambda,
                        fixed_release: Some((
                            hi_b + BASELINE_RELEASE_PAD,
                            hi_a + BASELINE_RELEASE_PAD,
                        )),
                    });
                }
            }
        }
    }
    for a in &traversals(path_a) {
        for b in &traversals(path_b) {
            if a.from != b.to || a.to != b.from {
                continue;
            }
            let t_e = a.entry + instance.edge_time(a.from, a.to).expect("path edges exist");
            let exit_a = t_e;
            let exit_b = b.entry + instance.edge_time(b.from, b.to).expect("path edges exist");
            if a.entry.max(b.entry) <= exit_a.min(exit_b) {
                consider(Conflict {
                    agents: pair,
                    site: ConflictSite::Segment { nodes: vec![a.from, a.to], t_e: exit_a - a.entry },
                    probability: 1.0,
                    times: (a.entry, b.entry),
                    shapes: (0.0, 0.0),
                    lambda,
                    fixed_release: Some((
                        exit_b + BASELINE_RELEASE_PAD,
                        exit_a + BASELINE_RELEASE_PAD,
                    )),
                });
            }
        }
    }
    summary
}

fn agent_pairs(paths: &BTreeMap<AgentId, TimedPath>) -> Vec<(AgentId, AgentId)> {
    let ids: Vec<AgentId> = paths.keys().copied().collect();
    let mut out = Vec::new();
    for (i, &a) in ids.iter().enumerate() {
        for &b in &ids[i + 1..] {
            out.push((a, b));
        }
    }
    out
}

/// Scan all pairs and return the most likely conflict with probability above
/// `epsilon`, if any.
pub fn find_most_likely_conflict(
    instance: &ProblemInstance,
    paths: &BTreeMap<AgentId, TimedPath>,
    cfg: &SolverConfig,
) -> Result<(Option<Conflict>, SweepStats), SolveError> {
    let mut stats = SweepStats::default();
    let mut best: Option<Conflict> = None;
    for (a, b) in agent_pairs(paths) {
        let summary = match cfg.mode {
            SolveMode::Stochastic => sweep_pair_stochastic(
                instance,
                (a, b),
                &paths[&a],
                &paths[&b],
                cfg.epsilon,
                &cfg.quadrature,
                &mut stats,
            )?,
            SolveMode::DeterministicBaseline => {
                sweep_pair_baseline(instance, (a, b), &paths[&a], &paths[&b])
            }
        };
        if let Some(c) = summary.best {
            if best.as_ref().is_none_or(|cur| conflict_precedes(&c, cur)) {
                best = Some(c);
            }
        }
    }
    Ok((best, stats))
}

/// Exact maximum pairwise element probability of a solution, independent of
/// any threshold: candidates are ranked by their upper bounds and evaluated
/// until no bound can beat the running maximum.
pub struct SweepReport {
    pub max_prob: f64,
    pub argmax: Option<Conflict>,
    pub stats: SweepStats,
}

pub fn max_pairwise_probability(
    instance: &ProblemInstance,
    paths: &BTreeMap<AgentId, TimedPath>,
    cfg: &QuadratureConfig,
) -> Result<SweepReport, SolveError> {
    let mut stats = SweepStats::default();
    let mut ranked: Vec<((AgentId, AgentId), Candidate, f64)> = Vec::new();
    let lambda = instance.delay.lambda;
    for (a, b) in agent_pairs(paths) {
        for cand in enumerate_candidates(instance, &paths[&a], &paths[&b]) {
            let bound = match &cand {
                Candidate::Node { node, a: va, b: vb } => node_conflict_prob_bound(
                    &NodeConflictQuery::new(
                        va.arrival - vb.arrival,
                        va.shape_before,
                        vb.shape_before,
                        instance.shape(*node),
                        lambda,
                    )?,
                    cfg,
                ),
                Candidate::Goal { node, res, vis, .. } => goal_occupancy_prob_bound(
                    res.arrival - vis.arrival,
                    res.shape_before,
                    vis.shape_before,
                    instance.shape(*node),
                    lambda,
                    cfg,
                ),
                Candidate::Segment { t_e, a: ta, b: tb, .. } => edge_conflict_prob_bound(
                    &EdgeConflictQuery::new(
                        ta.entry - tb.entry,
                        ta.entry_shape,
                        tb.entry_shape,
                        *t_e,
                        lambda,
                    )?,
                    cfg,
                ),
            };
            ranked.push(((a, b), cand, bound));
        }
    }
    ranked.sort_by(|x, y| y.2.total_cmp(&x.2));
    let mut max_prob = 0.0f64;
    let mut argmax = None;
    for (pair, cand, bound) in ranked {
        if bound <= max_prob {
            stats.screened += 1;
            continue;
        }
        if let Some(c) = evaluate_candidate(instance, pair, &cand, 0.0, cfg, &mut stats)? {
            if c.probability > max_prob {
                max_prob = c.probability;
                argmax = Some(c);
            }
        }
    }
    Ok(SweepReport { max_prob, argmax, stats })
}

/// Probability of the conflict when the yielding agent's planned element time
/// moves to `t`, the other agent frozen at its current plan.
fn probability_at(
    conflict: &Conflict,
    yielder: AgentId,
    t: f64,
    cfg: &QuadratureConfig,
    stats: &mut SweepStats,
    bound_only: bool,
) -> Result<f64, ProbError> {
    let first_yields = yielder == conflict.agents.0;
    let (t1, t2) = if first_yields {
        (t, conflict.times.1)
    } else {
        (conflict.times.0, t)
    };
    let (n1, n2) = conflict.shapes;
    match &conflict.site {
        ConflictSite::Node { n_m, .. } => {
            let q = NodeConflictQuery::new(t1 - t2, n1, n2, *n_m, conflict.lambda)?;
            if bound_only {
                Ok(node_conflict_prob_bound(&q, cfg))
            } else {
                stats.prob_evals += 1;
                node_conflict_prob(&q, cfg)
            }
        }
        ConflictSite::Segment { t_e, .. } => {
            let q = EdgeConflictQuery::new(t1 - t2, n1, n2, *t_e, conflict.lambda)?;
            if bound_only {
                Ok(edge_conflict_prob_bound(&q, cfg))
            } else {
                stats.prob_evals += 1;
                edge_conflict_prob(&q, cfg)
            }
        }
        ConflictSite::GoalOccupancy { resident, n_m, .. } => {
            let resident_is_first = *resident == conflict.agents.0;
            let (delta, n_res, n_vis) = if resident_is_first {
                (t1 - t2, n1, n2)
            } else {
                (t2 - t1, n2, n1)
            };
            if bound_only {
                Ok(goal_occupancy_prob_bound(delta, n_res, n_vis, *n_m, conflict.lambda, cfg))
            } else {
                stats.prob_evals += 1;
                goal_occupancy_conflict_prob(delta, n_res, n_vis, *n_m, conflict.lambda, cfg)
            }
        }
    }
}

/// Probability strictly below epsilon at time `t`? Uses the cheap bound
/// before paying for quadrature.
fn below_epsilon(
    conflict: &Conflict,
    yielder: AgentId,
    t: f64,
    cfg: &SolverConfig,
    stats: &mut SweepStats,
) -> Result<bool, ProbError> {
    let bound = probability_at(conflict, yielder, t, &cfg.quadrature, stats, true)?;
    if bound < cfg.epsilon {
        stats.screened += 1;
        return Ok(true);
    }
    let p = probability_at(conflict, yielder, t, &cfg.quadrature, stats, false)?;
    Ok(p < cfg.epsilon)
}

/// Earliest permitted time for `yielder` at the conflict element: the
/// smallest stepped (or bisected) time whose recomputed conflict probability
/// drops below epsilon. For a goal-occupancy conflict the visitor's
/// probability grows with its delay, so the visitor side is an outright
/// prohibition (infinite release).
pub fn compute_release_time(
    conflict: &Conflict,
    yielder: AgentId,
    cfg: &SolverConfig,
) -> Result<f64, SolveError> {
    let mut stats = SweepStats::default();
    let r = compute_release_time_counted(conflict, yielder, cfg, &mut stats)?;
    Ok(r)
}

fn compute_release_time_counted(
    conflict: &Conflict,
    yielder: AgentId,
    cfg: &SolverConfig,
    stats: &mut SweepStats,
) -> Result<f64, SolveError> {
    if let Some((r1, r2)) = conflict.fixed_release {
        return Ok(if yielder == conflict.agents.0 { r1 } else { r2 });
    }
    if let ConflictSite::GoalOccupancy { resident, .. } = &conflict.site {
        if yielder != *resident {
            return Ok(f64::INFINITY);
        }
    }
    let t_a = conflict.planned_time_of(yielder);
    if cfg.use_binary_search {
        // Exponential bracket from dt, then bisection on the decreasing
        // branch: the super-level set of the unimodal probability is an
        // interval, so the invariant (lo >= eps, hi < eps) homes in on its
        // right end.
        let mut lo = 0.0f64;
        let mut hi = cfg.dt;
        let mut guard = 0u64;
        while !below_epsilon(conflict, yielder, t_a + hi, cfg, stats)? {
            lo = hi;
            hi *= 2.0;
            guard += 1;
            if guard > 128 {
                return Err(SolveError::ReleaseSearchDiverged);
            }
        }
        while hi - lo > cfg.bs_time_tol {
            let mid = 0.5 * (lo + hi);
            if below_epsilon(conflict, yielder, t_a + mid, cfg, stats)? {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        Ok(t_a + hi)
    } else {
        for k in 1..=RELEASE_STEP_CAP {
            let t = t_a + k as f64 * cfg.dt;
            if below_epsilon(conflict, yielder, t, cfg, stats)? {
                return Ok(t);
            }
        }
        Err(SolveError::ReleaseSearchDiverged)
    }
}

#[derive(Debug, Clone)]
struct CtNode {
    constraints: Vec<Constraint>,
    paths: BTreeMap<AgentId, TimedPath>,
    /// Ordering cost under the active cost model.
    cost: f64,
    conflict: Option<Conflict>,
    conflict_count: usize,
    pair_cache: BTreeMap<(AgentId, AgentId), PairSummary>,
    gen: u64,
}

struct OpenEntry {
    cost: f64,
    conflicts: usize,
    gen: u64,
    node: CtNode,
}

impl PartialEq for OpenEntry {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == std::cmp::Ordering::Equal
    }
}
impl Eq for OpenEntry {}
impl PartialOrd for OpenEntry {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for OpenEntry {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        // Max-heap reversed: cheapest cost first, then fewer conflicts, then
        // FIFO by generation index.
        other
            .cost
            .total_cmp(&self.cost)
            .then_with(|| other.conflicts.cmp(&self.conflicts))
            .then_with(|| other.gen.cmp(&self.gen))
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SolveStats {
    pub expanded: usize,
    pub generated: usize,
    pub prob_evals: u64,
    pub screened: u64,
    pub epsilon: f64,
    pub dt: f64,
    pub mode: String,
    pub nominal_cost: f64,
    /// Wall time is reported on stdout and in bench CSV, never serialized
    /// into the solution file, so identical runs produce identical bytes.
    #[serde(skip)]
    pub wall_ms: u128,
}

#[derive(Debug, Clone)]
pub struct Solution {
    pub paths: BTreeMap<AgentId, TimedPath>,
    pub expected_cost: f64,
    pub nominal_cost: f64,
    pub max_pair_prob: f64,
    pub stats: SolveStats,
}

fn costs_of(paths: &BTreeMap<AgentId, TimedPath>, lambda: f64) -> (f64, f64) {
    let expected: f64 =
        paths.values().map(|p| p.expected_cost(lambda).expected_travel_time).sum();
    let nominal: f64 = paths.values().map(|p| p.goal_arrival()).sum();
    (expected, nominal)
}

/// Detect the pairwise summaries for a node, reusing the parent's cache for
/// every pair whose paths are unchanged.
fn detect(
    instance: &ProblemInstance,
    cfg: &SolverConfig,
    paths: &BTreeMap<AgentId, TimedPath>,
    parent: Option<(&BTreeMap<(AgentId, AgentId), PairSummary>, AgentId)>,
    stats: &mut SweepStats,
) -> Result<(BTreeMap<(AgentId, AgentId), PairSummary>, Option<Conflict>, usize), SolveError> {
    let mut cache = BTreeMap::new();
    for pair in agent_pairs(paths) {
        let reusable = parent.and_then(|(cache, replanned)| {
            (pair.0 != replanned && pair.1 != replanned)
                .then(|| cache.get(&pair).cloned())
                .flatten()
        });
        let summary = match reusable {
            Some(s) => s,
            None => match cfg.mode {
                SolveMode::Stochastic => sweep_pair_stochastic(
                    instance,
                    pair,
                    &paths[&pair.0],
                    &paths[&pair.1],
                    cfg.epsilon,
                    &cfg.quadrature,
                    stats,
                )?,
                SolveMode::DeterministicBaseline => {
                    sweep_pair_baseline(instance, pair, &paths[&pair.0], &paths[&pair.1])
                }
            },
        };
        cache.insert(pair, summary);
    }
    let mut best: Option<Conflict> = None;
    let mut count = 0;
    for summary in cache.values() {
        count += summary.count;
        if let Some(c) = &summary.best {
            if best.as_ref().is_none_or(|cur| conflict_precedes(c, cur)) {
                best = Some(c.clone());
            }
        }
    }
    Ok((cache, best, count))
}

/// Best-first constraint-tree search. Returns the first node whose maximum
/// pairwise conflict probability is at or below epsilon.
pub fn solve(instance: &ProblemInstance, cfg: &SolverConfig) -> Result<Solution, SolveError> {
    cfg.validate()?;
    let started = Instant::now();
    let cost_model = cfg.cost_model(instance);
    let lambda = instance.delay.lambda;

    let mut stats = SweepStats::default();
    let mut paths = BTreeMap::new();
    for task in &instance.agents {
        paths.insert(task.id, plan_with_cost(instance, task.id, &[], cost_model)?);
    }
    let (cache, conflict, count) = detect(instance, cfg, &paths, None, &mut stats)?;
    let (expected, nominal) = costs_of(&paths, lambda);
    let root = CtNode {
        constraints: Vec::new(),
        paths,
        cost: match cfg.mode {
            SolveMode::Stochastic => expected,
            SolveMode::DeterministicBaseline => nominal,
        },
        conflict,
        conflict_count: count,
        pair_cache: cache,
        gen: 0,
    };

    let mut open = BinaryHeap::new();
    let mut generated = 1u64;
    let mut expanded = 0usize;
    open.push(OpenEntry { cost: root.cost, conflicts: root.conflict_count, gen: root.gen, node: root });

    while let Some(entry) = open.pop() {
        let node = entry.node;
        let Some(conflict) = node.conflict.clone() else {
            // Valid solution: report the exact residual maximum.
            let report = max_pairwise_probability(instance, &node.paths, &cfg.quadrature)?;
            stats.add(report.stats);
            let (expected, nominal) = costs_of(&node.paths, lambda);
            return Ok(Solution {
                paths: node.paths,
                expected_cost: expected,
                nominal_cost: nominal,
                max_pair_prob: report.max_prob,
                stats: SolveStats {
                    expanded,
                    generated: generated as usize,
                    prob_evals: stats.prob_evals,
                    screened: stats.screened,
                    epsilon: cfg.epsilon,
                    dt: cfg.dt,
                    mode: cfg.mode.as_str().to_string(),
                    nominal_cost: nominal,
                    wall_ms: started.elapsed().as_millis(),
                },
            });
        };
        if expanded >= cfg.node_budget {
            return Err(SolveError::BudgetExhausted {
                expanded,
                open: open.len(),
                best_cost: node.cost,
            });
        }
        expanded += 1;

        for yielder in [conflict.agents.0, conflict.agents.1] {
            let release = compute_release_time_counted(&conflict, yielder, cfg, &mut stats)?;
            let element = conflict.element_for(yielder);
            let existing = node
                .constraints
                .iter()
                .filter(|c| c.agent == yielder && c.element == element)
                .map(|c| c.release_time)
                .fold(0.0f64, f64::max);
            // Releases grow strictly along a branch; an equal set would make
            // the child a duplicate of its parent.
            assert!(
                release > existing,
                "non-increasing release {release} <= {existing} for {element}"
            );
            let mut constraints = node.constraints.clone();
            constraints.push(Constraint { agent: yielder, element, release_time: release });
            let replanned = match plan_with_cost(instance, yielder, &constraints, cost_model) {
                Ok(p) => p,
                Err(
                    PlanError::UnreachableGoal(_)
                    | PlanError::StartBlocked(_)
                    | PlanError::SearchExhausted(_),
                ) => continue,
                Err(e) => return Err(e.into()),
            };
            debug_assert!(constraints
                .iter()
                .filter(|c| c.agent == yielder)
                .all(|c| replanned.satisfies(c)));
            let mut paths = node.paths.clone();
            paths.insert(yielder, replanned);
            let (cache, child_conflict, count) =
                detect(instance, cfg, &paths, Some((&node.pair_cache, yielder)), &mut stats)?;
            let (expected, nominal) = costs_of(&paths, lambda);
            let cost = match cfg.mode {
                SolveMode::Stochastic => expected,
                SolveMode::DeterministicBaseline => nominal,
            };
            debug_assert!(cost >= node.cost - 1e-9, "child cheaper than parent");
            let child = CtNode {
                constraints,
                paths,
                cost,
                conflict: child_conflict,
                conflict_count: count,
                pair_cache: cache,
                gen: generated,
            };
            generated += 1;
            open.push(OpenEntry { cost: child.cost, conflicts: child.conflict_count, gen: child.gen, node: child });
        }
    }
    Err(SolveError::BudgetExhausted { expanded, open: 0, best_cost: f64::INFINITY })
}

/// Classic CBS on the same continuous-time schedules with zero stochastic
/// delay, optimal in nominal cost.
pub fn solve_deterministic_baseline(
    instance: &ProblemInstance,
    cfg: &SolverConfig,
) -> Result<Solution, SolveError> {
    let cfg = SolverConfig { mode: SolveMode::DeterministicBaseline, ..cfg.clone() };
    solve(instance, &cfg)
}

// --- solution file IO ---------------------------------------------------

#[derive(Serialize, Deserialize)]
struct VisitDoc {
    node: i64,
    arr: f64,
    dep: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SolutionDoc {
    cost: f64,
    max_pair_prob: f64,
    paths: BTreeMap<String, Vec<VisitDoc>>,
    stats: serde_json::Value,
}

pub fn solution_to_json(solution: &Solution) -> String {
    let paths = solution
        .paths
        .iter()
        .map(|(id, path)| {
            let visits = path
                .visits()
                .iter()
                .map(|v| VisitDoc { node: v.node.0, arr: v.arrival, dep: v.departure })
                .collect();
            (id.0.to_string(), visits)
        })
        .collect();
    let doc = SolutionDoc {
        cost: solution.expected_cost,
        max_pair_prob: solution.max_pair_prob,
        paths,
        stats: serde_json::to_value(&solution.stats).expect("stats serialize"),
    };
    serde_json::to_string_pretty(&doc).expect("solution serialize")
}

/// Parsed solution file: per-agent paths plus the recorded cost, residual
/// probability, and stats block.
pub struct LoadedSolution {
    pub paths: BTreeMap<AgentId, TimedPath>,
    pub cost: f64,
    pub max_pair_prob: f64,
    pub stats: serde_json::Value,
}

pub fn solution_from_json(
    instance: &ProblemInstance,
    text: &str,
) -> Result<LoadedSolution, SolveError> {
    let doc: SolutionDoc =
        serde_json::from_str(text).map_err(|e| SolveError::SolutionFormat(e.to_string()))?;
    let mut paths = BTreeMap::new();
    for (key, visits) in doc.paths {
        let id: i64 = key
            .parse()
            .map_err(|_| SolveError::SolutionFormat(format!("bad agent key {key:?}")))?;
        let times: Vec<(NodeId, f64, f64)> =
            visits.iter().map(|v| (NodeId(v.node), v.arr, v.dep)).collect();
        let path = TimedPath::from_times(instance, &times)
            .map_err(|e| SolveError::SolutionFormat(e.to_string()))?;
        paths.insert(AgentId(id), path);
    }
    for task in &instance.agents {
        let path = paths
            .get(&task.id)
            .ok_or_else(|| SolveError::SolutionFormat(format!("agent {} missing", task.id)))?;
        let first = path.visits().first().expect("nonempty").node;
        let last = path.visits().last().expect("nonempty").node;
        if first != task.start || last != task.goal {
            return Err(SolveError::SolutionFormat(format!(
                "agent {} path endpoints {first}->{last} do not match task {}->{}",
                task.id, task.start, task.goal
            )));
        }
    }
    if paths.len() != instance.agents.len() {
        return Err(SolveError::SolutionFormat("solution/instance agent mismatch".into()));
    }
    Ok(LoadedSolution {
        paths,
        cost: doc.cost,
        max_pair_prob: doc.max_pair_prob,
        stats: doc.stats,
    })
}
