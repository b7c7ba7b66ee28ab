//! Destruction operators and population diversification.
//!
//! Partial operators turn a closed route into an open prefix (or delete it);
//! route-removal operators delete a whole route. Removed customers always go
//! to the unvisited set.

use rand::distributions::WeightedIndex;
use rand::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::construct::child_rng;
use crate::instance::Instance;
use crate::solution::{closable, evaluate_route, objective, route_similarity, Route, Solution};

pub const DEFAULT_N_REMOVE: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "n_remove")]
pub enum PartialOp {
    /// Removes `n` random customers; the survivors stay in order.
    Random(usize),
    /// Cuts a uniformly random number of customers off the tail.
    RandomCut,
    /// Cuts `n` customers off the tail.
    ConstCut(usize),
    /// Cuts from the customer with the highest waiting time onwards.
    WaitingTimeCut,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RouteRemovalOp {
    Random,
    Smallest,
    Similar,
    WaitingTime,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DestroyError {
    #[error("route index {index} out of range ({len} routes)")]
    RouteIndex { index: usize, len: usize },
    #[error("route {0} is not a closed nonempty route")]
    NotClosed(usize),
    #[error("solution has no closed route to remove")]
    NoRoutes,
    #[error("similar-route removal needs a reference solution")]
    MissingReference,
    #[error("invalid destroy config: {0}")]
    Config(String),
}

/// Relative frequencies of the partial operators.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PartialWeights {
    pub random: f64,
    pub random_cut: f64,
    pub const_cut: f64,
    pub waiting_time_cut: f64,
}

impl Default for PartialWeights {
    fn default() -> Self {
        PartialWeights { random: 1.0, random_cut: 1.0, const_cut: 1.0, waiting_time_cut: 1.0 }
    }
}

/// Relative frequencies of the route-removal operators.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RouteWeights {
    pub random: f64,
    pub smallest: f64,
    pub similar: f64,
    pub waiting_time: f64,
}

impl Default for RouteWeights {
    fn default() -> Self {
        RouteWeights { random: 1.0, smallest: 1.0, similar: 1.0, waiting_time: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DestroyConfig {
    pub n_remove: usize,
    /// Probability of one complete-route removal per destruction.
    pub route_removal_prob: f64,
    pub partial_weights: PartialWeights,
    pub route_weights: RouteWeights,
}

impl Default for DestroyConfig {
    fn default() -> Self {
        DestroyConfig {
            n_remove: DEFAULT_N_REMOVE,
            route_removal_prob: 0.5,
            partial_weights: PartialWeights::default(),
            route_weights: RouteWeights::default(),
        }
    }
}

fn weights_ok(w: &[f64]) -> bool {
    w.iter().all(|v| v.is_finite() && *v >= 0.0) && w.iter().sum::<f64>() > 0.0
}

impl DestroyConfig {
    pub fn validate(&self) -> Result<(), DestroyError> {
        if self.n_remove == 0 {
            return Err(DestroyError::Config("n_remove must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.route_removal_prob) {
            return Err(DestroyError::Config(format!(
                "route_removal_prob must lie in [0, 1], got {}",
                self.route_removal_prob
            )));
        }
        let p = self.partial_weights;
        if !weights_ok(&[p.random, p.random_cut, p.const_cut, p.waiting_time_cut]) {
            return Err(DestroyError::Config("partial operator weights must be non-negative and not all zero".into()));
        }
        let r = self.route_weights;
        if !weights_ok(&[r.random, r.smallest, r.similar, r.waiting_time]) {
            return Err(DestroyError::Config("route operator weights must be non-negative and not all zero".into()));
        }
        Ok(())
    }

    fn partial_ops(&self) -> ([PartialOp; 4], [f64; 4]) {
        let p = self.partial_weights;
        (
            [
                PartialOp::Random(self.n_remove),
                PartialOp::RandomCut,
                PartialOp::ConstCut(self.n_remove),
                PartialOp::WaitingTimeCut,
            ],
            [p.random, p.random_cut, p.const_cut, p.waiting_time_cut],
        )
    }

    fn route_ops(&self) -> ([RouteRemovalOp; 4], [f64; 4]) {
        let r = self.route_weights;
        (
            [RouteRemovalOp::Random, RouteRemovalOp::Smallest, RouteRemovalOp::Similar, RouteRemovalOp::WaitingTime],
            [r.random, r.smallest, r.similar, r.waiting_time],
        )
    }
}

fn is_closed_nonempty(r: &Route) -> bool {
    !r.open && !r.is_empty()
}

fn closed_indices(s: &Solution) -> Vec<usize> {
    (0..s.routes.len()).filter(|&i| is_closed_nonempty(&s.routes[i])).collect()
}

/// Shortens `kept` until it is a feasible fragment that can still return to
/// the depot; only matters when travel times violate the triangle
/// inequality.
fn settle_fragment(inst: &Instance, kept: &mut Vec<usize>, removed: &mut Vec<usize>) {
    while !kept.is_empty()
        && (evaluate_route(inst, &Route::open(kept.clone())).is_err() || !closable(inst, kept))
    {
        removed.push(kept.pop().expect("nonempty"));
    }
}

/// Partially destroys closed route `index`.
pub fn destroy_partial<R: Rng + ?Sized>(
    inst: &Instance,
    s: &Solution,
    op: PartialOp,
    index: usize,
    rng: &mut R,
) -> Result<Solution, DestroyError> {
    let route = s.routes.get(index).ok_or(DestroyError::RouteIndex { index, len: s.routes.len() })?;
    if !is_closed_nonempty(route) {
        return Err(DestroyError::NotClosed(index));
    }
    let cs = &route.customers;
    let len = cs.len();
    let (mut kept, mut removed): (Vec<usize>, Vec<usize>) = match op {
        PartialOp::Random(n) => {
            let n = n.max(1).min(len);
            let drop: Vec<usize> = rand::seq::index::sample(rng, len, n).into_vec();
            let mut mask = vec![false; len];
            for i in drop {
                mask[i] = true;
            }
            let kept = (0..len).filter(|&i| !mask[i]).map(|i| cs[i]).collect();
            let removed = (0..len).filter(|&i| mask[i]).map(|i| cs[i]).collect();
            (kept, removed)
        }
        PartialOp::RandomCut => {
            let n = rng.gen_range(1..=len);
            (cs[..len - n].to_vec(), cs[len - n..].to_vec())
        }
        PartialOp::ConstCut(n) => {
            let n = n.max(1).min(len);
            (cs[..len - n].to_vec(), cs[len - n..].to_vec())
        }
        PartialOp::WaitingTimeCut => {
            let at = match evaluate_route(inst, route) {
                Ok(sched) => {
                    let mut best = 0;
                    for (p, v) in sched.visits.iter().enumerate() {
                        if v.waiting >= sched.visits[best].waiting {
                            best = p;
                        }
                    }
                    best
                }
                // An infeasible input route is dissolved completely.
                Err(_) => 0,
            };
            (cs[..at].to_vec(), cs[at..].to_vec())
        }
    };
    if matches!(op, PartialOp::Random(_))
        && !kept.is_empty()
        && (evaluate_route(inst, &Route::open(kept.clone())).is_err() || !closable(inst, &kept))
    {
        removed.append(&mut kept);
    }
    settle_fragment(inst, &mut kept, &mut removed);
    let mut out = s.clone();
    out.unvisited.extend(removed);
    if kept.is_empty() {
        out.routes.remove(index);
    } else {
        out.routes[index] = Route::open(kept);
    }
    Ok(out)
}

/// Index of the closed route an operator picks; ties go to the lowest index.
pub fn pick_route<R: Rng + ?Sized>(
    inst: &Instance,
    s: &Solution,
    op: RouteRemovalOp,
    reference: Option<&Solution>,
    rng: &mut R,
) -> Result<usize, DestroyError> {
    let idx = closed_indices(s);
    if idx.is_empty() {
        return Err(DestroyError::NoRoutes);
    }
    let argmax = |score: &dyn Fn(usize) -> f64| {
        let mut best = idx[0];
        let mut best_score = score(best);
        for &i in &idx[1..] {
            let v = score(i);
            if v > best_score {
                best = i;
                best_score = v;
            }
        }
        best
    };
    Ok(match op {
        RouteRemovalOp::Random => idx[rng.gen_range(0..idx.len())],
        RouteRemovalOp::Smallest => argmax(&|i| -(s.routes[i].len() as f64)),
        RouteRemovalOp::WaitingTime => argmax(&|i| {
            evaluate_route(inst, &s.routes[i]).map_or(f64::INFINITY, |sched| sched.total_waiting())
        }),
        RouteRemovalOp::Similar => {
            let reference = reference.ok_or(DestroyError::MissingReference)?;
            argmax(&|i| {
                reference
                    .routes
                    .iter()
                    .filter(|q| !q.is_empty())
                    .map(|q| route_similarity(&s.routes[i], q))
                    .fold(0.0, f64::max)
            })
        }
    })
}

/// Deletes one closed route; its customers become unvisited.
pub fn destroy_route<R: Rng + ?Sized>(
    inst: &Instance,
    s: &Solution,
    op: RouteRemovalOp,
    reference: Option<&Solution>,
    rng: &mut R,
) -> Result<Solution, DestroyError> {
    let i = pick_route(inst, s, op, reference, rng)?;
    let mut out = s.clone();
    let route = out.routes.remove(i);
    out.unvisited.extend(route.customers);
    Ok(out)
}

/// One diversification of `y`: maybe a route removal, then partial
/// destruction of up to κ random closed routes (fewer if `y` already has
/// open routes).
pub fn destroy_once<R: Rng + ?Sized>(
    inst: &Instance,
    y: &Solution,
    reference: Option<&Solution>,
    kappa: usize,
    cfg: &DestroyConfig,
    rng: &mut R,
) -> Result<Solution, DestroyError> {
    cfg.validate()?;
    let mut out = y.clone();
    if rng.gen_bool(cfg.route_removal_prob) && !closed_indices(&out).is_empty() {
        let (ops, w) = cfg.route_ops();
        let mut op = ops[WeightedIndex::new(w).expect("validated").sample(rng)];
        if op == RouteRemovalOp::Similar && reference.is_none() {
            op = RouteRemovalOp::Random;
        }
        out = destroy_route(inst, &out, op, reference, rng)?;
    }
    let budget = kappa.saturating_sub(out.open_routes());
    let closed = closed_indices(&out);
    let mut chosen: Vec<usize> = closed.choose_multiple(rng, budget.min(closed.len())).copied().collect();
    chosen.sort_unstable_by(|a, b| b.cmp(a));
    let (ops, w) = cfg.partial_ops();
    let dist = WeightedIndex::new(w).expect("validated");
    for i in chosen {
        let op = ops[dist.sample(rng)];
        out = destroy_partial(inst, &out, op, i, rng)?;
    }
    Ok(out)
}

/// How often each member is destroyed: `m_init` split as evenly as
/// possible, the remainder going to the first members.
pub fn multiplicities(n_members: usize, m_init: usize) -> Vec<usize> {
    let base = m_init / n_members;
    let extra = m_init % n_members;
    (0..n_members).map(|i| base + usize::from(i < extra)).collect()
}

/// DESTRUCT(Y, m_init): a diversified population of exactly `m_init`
/// partial solutions. Output `j` uses its own random stream, so the result
/// is independent of evaluation order.
pub fn destruct_population<R: RngCore + ?Sized>(
    inst: &Instance,
    population: &[Solution],
    m_init: usize,
    kappa: usize,
    cfg: &DestroyConfig,
    rng: &mut R,
) -> Result<Vec<Solution>, DestroyError> {
    if population.is_empty() {
        return Err(DestroyError::Config("empty population".into()));
    }
    if m_init < population.len() {
        return Err(DestroyError::Config(format!("m_init = {m_init} is below the population size {}", population.len())));
    }
    cfg.validate()?;
    let costs: Vec<f64> = population.iter().map(|y| objective(inst, y)).collect();
    let mut order: Vec<usize> = (0..population.len()).collect();
    order.sort_by(|&a, &b| costs[a].total_cmp(&costs[b]).then(a.cmp(&b)));
    let base = rng.next_u64();
    let mut out = Vec::with_capacity(m_init);
    for (i, times) in multiplicities(population.len(), m_init).into_iter().enumerate() {
        // The best member is compared against the runner-up.
        let reference = order.iter().copied().find(|&j| j != i).map(|j| &population[j]);
        for _ in 0..times {
            let mut r = child_rng(base, out.len() as u64);
            out.push(destroy_once(inst, &population[i], reference, kappa, cfg, &mut r)?);
        }
    }
    Ok(out)
}
