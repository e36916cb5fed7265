//! Monte Carlo execution of planned schedules under sampled gamma delays.
//!
//! One rollout draws an independent `Gamma(n_i, lambda)` delay for every node
//! visit of every agent and shifts the planned schedule accordingly. Rollouts
//! are the numerical oracle for the analytic conflict probabilities and the
//! estimator of the empirical (per-element and global) conflict probability.
//!
//! Occupancy semantics: a node is occupied from realized arrival through
//! realized departure (the final goal visit through the simulation horizon,
//! the maximum realized event time of the rollout); an edge is occupied
//! between realized departure from its tail and realized arrival at its head;
//! only opposing edge occupancies conflict.

use crate::instance::{AgentId, NodeId, ProblemInstance};
use crate::lowlevel::{Element, TimedPath};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Gamma};
use serde::Serialize;
use std::collections::BTreeMap;

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("agent {0} has no path in the solution")]
    MissingPath(AgentId),
    #[error("element {0} is not shared by both paths")]
    ElementNotShared(Element),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RealizedVisit {
    pub node: NodeId,
    pub arrival: f64,
    /// Realized arrival + sampled node delay + planned wait. The final visit
    /// additionally occupies its node up to the rollout horizon.
    pub departure: f64,
}

/// One stochastic execution of a solution.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub seed: u64,
    pub agents: BTreeMap<AgentId, Vec<RealizedVisit>>,
}

/// A realized simultaneous-occupancy event.
#[derive(Debug, Clone, PartialEq)]
pub struct ConflictEvent {
    pub agents: (AgentId, AgentId),
    pub element: Element,
    pub interval: (f64, f64),
}

/// Estimated probability with its binomial standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Estimate {
    pub p: f64,
    pub se: f64,
    pub n: u64,
}

impl Estimate {
    fn from_hits(hits: u64, n: u64) -> Self {
        let p = hits as f64 / n as f64;
        Estimate { p, se: (p * (1.0 - p) / n as f64).sqrt(), n }
    }
}

fn realize_agent(
    instance: &ProblemInstance,
    path: &TimedPath,
    rng: &mut ChaCha12Rng,
) -> Vec<RealizedVisit> {
    let lambda = instance.delay.lambda;
    let mut acc = 0.0;
    let mut out = Vec::with_capacity(path.visits().len());
    for v in path.visits() {
        let arrival = v.arrival + acc;
        let shape = instance.shape(v.node);
        let delay: f64 = Gamma::new(shape, 1.0 / lambda)
            .expect("validated shapes")
            .sample(rng);
        let wait = v.departure - v.arrival;
        out.push(RealizedVisit { node: v.node, arrival, departure: arrival + delay + wait });
        acc += delay;
    }
    out
}

/// Execute one rollout of the full solution. Deterministic per seed: agents
/// are realized in ascending id order from a single seeded stream.
pub fn rollout(
    instance: &ProblemInstance,
    paths: &BTreeMap<AgentId, TimedPath>,
    seed: u64,
) -> Rollout {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let agents = paths
        .iter()
        .map(|(&id, path)| (id, realize_agent(instance, path, &mut rng)))
        .collect();
    Rollout { seed, agents }
}

fn horizon(rollout: &Rollout) -> f64 {
    let mut h = 0.0f64;
    for visits in rollout.agents.values() {
        for v in visits {
            h = h.max(v.arrival).max(v.departure);
        }
    }
    h
}

fn node_intervals(visits: &[RealizedVisit], hor: f64) -> Vec<(NodeId, f64, f64)> {
    let last = visits.len() - 1;
    visits
        .iter()
        .enumerate()
        .map(|(i, v)| (v.node, v.arrival, if i == last { hor.max(v.arrival) } else { v.departure }))
        .collect()
}

/// Directed edge traversals as (from, to, entry, exit).
fn edge_intervals(visits: &[RealizedVisit]) -> Vec<(NodeId, NodeId, f64, f64)> {
    visits
        .windows(2)
        .map(|w| (w[0].node, w[1].node, w[0].departure, w[1].arrival))
        .collect()
}

fn overlap(a: (f64, f64), b: (f64, f64)) -> Option<(f64, f64)> {
    let lo = a.0.max(b.0);
    let hi = a.1.min(b.1);
    (lo <= hi).then_some((lo, hi))
}

/// All simultaneous-occupancy events of one rollout: node co-presence and
/// opposing edge traversals, for every agent pair.
pub fn conflict_events(rollout: &Rollout) -> Vec<ConflictEvent> {
    let hor = horizon(rollout);
    let ids: Vec<AgentId> = rollout.agents.keys().copied().collect();
    let mut events = Vec::new();
    for (i, &a) in ids.iter().enumerate() {
        let va = &rollout.agents[&a];
        let na = node_intervals(va, hor);
        let ea = edge_intervals(va);
        for &b in &ids[i + 1..] {
            let vb = &rollout.agents[&b];
            for &(node, lo_b, hi_b) in &node_intervals(vb, hor) {
                for &(n, lo_a, hi_a) in &na {
                    if n != node {
                        continue;
                    }
                    if let Some(iv) = overlap((lo_a, hi_a), (lo_b, hi_b)) {
                        events.push(ConflictEvent {
                            agents: (a, b),
                            element: Element::Node(node),
                            interval: iv,
                        });
                    }
                }
            }
            for &(from_b, to_b, lo_b, hi_b) in &edge_intervals(vb) {
                for &(from_a, to_a, lo_a, hi_a) in &ea {
                    if from_a != to_b || to_a != from_b {
                        continue;
                    }
                    if let Some(iv) = overlap((lo_a, hi_a), (lo_b, hi_b)) {
                        events.push(ConflictEvent {
                            agents: (a, b),
                            element: Element::DirectedEdge { from: from_a, to: to_a },
                            interval: iv,
                        });
                    }
                }
            }
        }
    }
    events.sort_by(|x, y| {
        x.interval
            .0
            .total_cmp(&y.interval.0)
            .then_with(|| x.agents.cmp(&y.agents))
            .then_with(|| x.element.cmp(&y.element))
    });
    events
}

fn pair_paths(
    paths: &BTreeMap<AgentId, TimedPath>,
    pair: (AgentId, AgentId),
) -> Result<BTreeMap<AgentId, TimedPath>, SimError> {
    let mut out = BTreeMap::new();
    for id in [pair.0, pair.1] {
        let p = paths.get(&id).ok_or(SimError::MissingPath(id))?;
        out.insert(id, p.clone());
    }
    Ok(out)
}

fn touches(path: &TimedPath, element: &Element) -> bool {
    match element {
        Element::Node(_) => !path.element_times(element).is_empty(),
        Element::DirectedEdge { from, to } => {
            !path.element_times(element).is_empty()
                || !path
                    .element_times(&Element::DirectedEdge { from: *to, to: *from })
                    .is_empty()
        }
    }
}

/// Fraction of rollouts in which the two agents' realized occupancy intervals
/// at `element` intersect. For an edge element the traversals must be in
/// opposite directions. Samples are independent per index: sample `i` uses
/// stream `i` of the seeded generator, so parallel and serial schedules give
/// identical estimates.
pub fn estimate_pairwise_prob(
    instance: &ProblemInstance,
    paths: &BTreeMap<AgentId, TimedPath>,
    pair: (AgentId, AgentId),
    element: &Element,
    n_samples: u64,
    seed: u64,
) -> Result<Estimate, SimError> {
    let pair_map = pair_paths(paths, pair)?;
    for p in pair_map.values() {
        if !touches(p, element) {
            return Err(SimError::ElementNotShared(*element));
        }
    }
    let mut hits = 0u64;
    for i in 0..n_samples {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        rng.set_stream(i);
        let mut agents = BTreeMap::new();
        for (&id, path) in &pair_map {
            agents.insert(id, realize_agent(instance, path, &mut rng));
        }
        let r = Rollout { seed, agents };
        let conflicted = conflict_events(&r).iter().any(|ev| match (&ev.element, element) {
            (Element::Node(a), Element::Node(b)) => a == b,
            (
                Element::DirectedEdge { from: af, to: at },
                Element::DirectedEdge { from: bf, to: bt },
            ) => (af == bf && at == bt) || (af == bt && at == bf),
            _ => false,
        });
        if conflicted {
            hits += 1;
        }
    }
    Ok(Estimate::from_hits(hits, n_samples))
}

/// Fraction of rollouts containing at least one conflict event anywhere:
/// any pair, any element, full horizon.
pub fn estimate_global_prob(
    instance: &ProblemInstance,
    paths: &BTreeMap<AgentId, TimedPath>,
    n_samples: u64,
    seed: u64,
) -> Estimate {
    let mut hits = 0u64;
    for i in 0..n_samples {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        rng.set_stream(i);
        let agents = paths
            .iter()
            .map(|(&id, path)| (id, realize_agent(instance, path, &mut rng)))
            .collect();
        let r = Rollout { seed, agents };
        if !conflict_events(&r).is_empty() {
            hits += 1;
        }
    }
    Estimate::from_hits(hits, n_samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instance::{generate_grid, AgentTask, DelayModel, EdgeRecord, NodeRecord};
    use crate::lowlevel::plan;

    fn line_two_agents() -> (ProblemInstance, BTreeMap<AgentId, TimedPath>) {
        // 0-1-2-3, one agent left-to-right, one right-to-left.
        let nodes = (0..4).map(|i| NodeRecord { id: NodeId(i), x: None, y: None }).collect();
        let edges = (0..3)
            .map(|i| EdgeRecord { u: NodeId(i), v: NodeId(i + 1), t: 1.0 })
            .collect();
        let inst = ProblemInstance::new(
            nodes,
            edges,
            DelayModel::uniform(5.0, 1.0),
            vec![
                AgentTask { id: AgentId(0), start: NodeId(0), goal: NodeId(3) },
                AgentTask { id: AgentId(1), start: NodeId(3), goal: NodeId(0) },
            ],
        )
        .unwrap();
        let mut paths = BTreeMap::new();
        paths.insert(AgentId(0), plan(&inst, AgentId(0), &[]).unwrap());
        paths.insert(AgentId(1), plan(&inst, AgentId(1), &[]).unwrap());
        (inst, paths)
    }

    #[test]
    fn vanishing_delays_recover_planned_times() {
        let inst = generate_grid(3, 3, 2, 5, 1.0, 1.0, 1e9).unwrap();
        let mut paths = BTreeMap::new();
        for a in &inst.agents {
            paths.insert(a.id, plan(&inst, a.id, &[]).unwrap());
        }
        let r = rollout(&inst, &paths, 11);
        for (id, visits) in &r.agents {
            let planned = &paths[id];
            for (rv, pv) in visits.iter().zip(planned.visits()) {
                assert!((rv.arrival - pv.arrival).abs() < 1e-6);
                assert!((rv.departure - pv.departure).abs() < 1e-6);
                assert!(rv.arrival >= pv.arrival);
            }
        }
    }

    #[test]
    fn mean_goal_arrival_matches_gamma_mean() {
        // Goal arrival inflates by the mean accumulated delay of the nodes
        // strictly before the goal.
        let nodes = (0..3).map(|i| NodeRecord { id: NodeId(i), x: None, y: None }).collect();
        let edges =
            (0..2).map(|i| EdgeRecord { u: NodeId(i), v: NodeId(i + 1), t: 1.0 }).collect();
        let inst = ProblemInstance::new(
            nodes,
            edges,
            DelayModel::uniform(5.0, 1.0),
            vec![AgentTask { id: AgentId(0), start: NodeId(0), goal: NodeId(2) }],
        )
        .unwrap();
        let mut paths = BTreeMap::new();
        paths.insert(AgentId(0), plan(&inst, AgentId(0), &[]).unwrap());
        let n = 1_000_000u64;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for i in 0..n {
            let mut rng = ChaCha12Rng::seed_from_u64(3);
            rng.set_stream(i);
            let visits = realize_agent(&inst, &paths[&AgentId(0)], &mut rng);
            let t = visits.last().unwrap().arrival;
            sum += t;
            sumsq += t * t;
        }
        let mean = sum / n as f64;
        let var = sumsq / n as f64 - mean * mean;
        let se = (var / n as f64).sqrt();
        // Planned arrival 2, two pre-goal nodes of shape 1 at rate 5.
        let expect = 2.0 + 2.0 / 5.0;
        assert!((mean - expect).abs() < 3.0 * se, "mean {mean} expect {expect} se {se}");
    }

    #[test]
    fn rollout_deterministic_per_seed() {
        let (inst, paths) = line_two_agents();
        let a = rollout(&inst, &paths, 99);
        let b = rollout(&inst, &paths, 99);
        assert_eq!(a, b);
        let c = rollout(&inst, &paths, 100);
        assert_ne!(a, c);
    }

    #[test]
    fn estimates_deterministic_per_seed() {
        let (inst, paths) = line_two_agents();
        let a = estimate_global_prob(&inst, &paths, 2000, 7);
        let b = estimate_global_prob(&inst, &paths, 2000, 7);
        assert_eq!(a, b);
    }

    #[test]
    fn missing_element_is_an_error() {
        let (inst, paths) = line_two_agents();
        let err = estimate_pairwise_prob(
            &inst,
            &paths,
            (AgentId(0), AgentId(1)),
            &Element::Node(NodeId(17)),
            10,
            0,
        )
        .unwrap_err();
        assert!(matches!(err, SimError::ElementNotShared(_)));
    }

    #[test]
    fn single_agent_global_probability_is_zero() {
        let inst = generate_grid(3, 3, 1, 2, 1.0, 1.0, 5.0).unwrap();
        let mut paths = BTreeMap::new();
        let id = inst.agents[0].id;
        paths.insert(id, plan(&inst, id, &[]).unwrap());
        let est = estimate_global_prob(&inst, &paths, 500, 1);
        assert_eq!(est.p, 0.0);
    }

    #[test]
    fn head_on_line_always_conflicts() {
        // Two agents crossing a 4-node line must meet somewhere.
        let (inst, paths) = line_two_agents();
        let est = estimate_global_prob(&inst, &paths, 500, 3);
        assert!(est.p > 0.9, "got {}", est.p);
    }

    #[test]
    fn global_at_least_max_pairwise() {
        let (inst, paths) = line_two_agents();
        let n = 20_000;
        let global = estimate_global_prob(&inst, &paths, n, 5);
        let mut max_pair = 0.0f64;
        for element in [
            Element::Node(NodeId(1)),
            Element::Node(NodeId(2)),
            Element::DirectedEdge { from: NodeId(1), to: NodeId(2) },
        ] {
            let e = estimate_pairwise_prob(&inst, &paths, (AgentId(0), AgentId(1)), &element, n, 5)
                .unwrap();
            max_pair = max_pair.max(e.p - 3.0 * e.se);
        }
        assert!(global.p >= max_pair, "global {} max pair {}", global.p, max_pair);
    }
}
