//! Sequential construction: κ parallel route slots, feasibility-masked
//! neighborhood action spaces, greedy/sampled decoding, multi-start greedy
//! rollouts and repair of partial solutions.

use std::collections::BTreeSet;
use std::sync::Arc;

use log::trace;
use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::instance::Instance;
use crate::solution::{evaluate_route, Route, RouteViolation, Solution};

/// Number of concurrently built routes used when nothing else is configured.
pub const DEFAULT_KAPPA: usize = 4;

const EPS: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConstructError {
    #[error("customer {0} cannot be served even by a dedicated vehicle")]
    InfeasibleCustomer(usize),
    #[error("{open} open routes exceed the repair limit of {kappa}")]
    RepairLimit { open: usize, kappa: usize },
    #[error("invalid construction config: {0}")]
    Config(String),
    #[error("action {0:?} is not feasible in the current state")]
    InvalidAction(Action),
    #[error("open route {route} is not a feasible fragment: {violation}")]
    InvalidFragment { route: usize, violation: RouteViolation },
    #[error("decoding exceeded the step bound of {0}")]
    StepBound(usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VehicleFeatures {
    pub remaining_capacity: f64,
    pub current_node: usize,
    /// Departure time from `current_node`.
    pub current_time: f64,
    pub route_slot: usize,
}

impl VehicleFeatures {
    fn fresh(inst: &Instance, slot: usize) -> Self {
        VehicleFeatures { remaining_capacity: inst.capacity(), current_node: 0, current_time: 0.0, route_slot: slot }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Slot {
    /// Customers of the route under construction; empty for a free slot.
    pub route: Vec<usize>,
    pub vehicle: VehicleFeatures,
}

impl Slot {
    pub fn is_free(&self) -> bool {
        self.route.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Target {
    /// Return to the depot, closing the slot's route.
    Depot,
    Customer(usize),
}

impl Target {
    /// Node id, the depot being 0.
    pub fn node(self) -> usize {
        match self {
            Target::Depot => 0,
            Target::Customer(c) => c,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Action {
    pub slot: usize,
    pub target: Target,
}

/// MDP state of the construction process.
#[derive(Debug, Clone)]
pub struct ConstructionState<'a> {
    inst: &'a Instance,
    slots: Vec<Slot>,
    unvisited: BTreeSet<usize>,
    finished: Vec<Route>,
    step: usize,
    /// Customers sorted by (tw_start, id).
    tw_order: Arc<Vec<usize>>,
}

impl<'a> ConstructionState<'a> {
    /// Empty state: nothing routed, `kappa` free slots.
    pub fn new(inst: &'a Instance, kappa: usize) -> Result<Self, ConstructError> {
        if kappa == 0 {
            return Err(ConstructError::Config("kappa must be at least 1".into()));
        }
        Ok(ConstructionState {
            inst,
            slots: (0..kappa).map(|s| Slot { route: Vec::new(), vehicle: VehicleFeatures::fresh(inst, s) }).collect(),
            unvisited: inst.customers().collect(),
            finished: Vec::new(),
            step: 0,
            tw_order: Arc::new(tw_order(inst)),
        })
    }

    /// Loads a partial solution: closed routes are kept as finished, open
    /// routes occupy slots with vehicle features recomputed from their
    /// schedules.
    pub fn from_partial(inst: &'a Instance, partial: &Solution, kappa: usize) -> Result<Self, ConstructError> {
        let open = partial.open_routes();
        if open > kappa {
            return Err(ConstructError::RepairLimit { open, kappa });
        }
        let mut state = Self::new(inst, kappa)?;
        state.unvisited = partial.unvisited.clone();
        let mut slot = 0;
        for (ri, r) in partial.routes.iter().enumerate() {
            if !r.open {
                if !r.is_empty() {
                    state.finished.push(r.clone());
                }
                continue;
            }
            if r.is_empty() {
                continue;
            }
            let sched = evaluate_route(inst, r).map_err(|violation| ConstructError::InvalidFragment { route: ri, violation })?;
            state.slots[slot] = Slot {
                route: r.customers.clone(),
                vehicle: VehicleFeatures {
                    remaining_capacity: inst.capacity() - sched.load,
                    current_node: *r.customers.last().expect("nonempty"),
                    current_time: sched.end_departure(),
                    route_slot: slot,
                },
            };
            slot += 1;
        }
        Ok(state)
    }

    pub fn instance(&self) -> &'a Instance {
        self.inst
    }

    pub fn slots(&self) -> &[Slot] {
        &self.slots
    }

    #[cfg(test)]
    pub(crate) fn slots_mut_for_test(&mut self) -> &mut [Slot] {
        &mut self.slots
    }

    pub fn kappa(&self) -> usize {
        self.slots.len()
    }

    pub fn unvisited(&self) -> &BTreeSet<usize> {
        &self.unvisited
    }

    pub fn finished(&self) -> &[Route] {
        &self.finished
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn open_slots(&self) -> usize {
        self.slots.iter().filter(|s| !s.is_free()).count()
    }

    pub fn is_done(&self) -> bool {
        self.unvisited.is_empty() && self.slots.iter().all(Slot::is_free)
    }

    /// Whether customer `i` can be appended to the route in `slot`.
    pub fn can_extend(&self, slot: usize, i: usize) -> bool {
        let inst = self.inst;
        let v = &self.slots[slot].vehicle;
        let node = inst.node(i);
        if node.demand > v.remaining_capacity + EPS {
            return false;
        }
        let arrival = v.current_time + inst.travel(v.current_node, i);
        if arrival > node.tw_end + EPS {
            return false;
        }
        let depart = arrival.max(node.tw_start) + node.service;
        depart + inst.travel(i, 0) <= inst.horizon() + EPS
    }

    /// Start candidates for a free slot: the earliest-window quarter of the
    /// unvisited customers (ties by id).
    pub fn start_pool(&self) -> Vec<usize> {
        let size = (self.unvisited.len() as f64 * 0.25).ceil() as usize;
        self.tw_order
            .iter()
            .copied()
            .filter(|c| self.unvisited.contains(c))
            .take(size)
            .collect()
    }

    /// The masked action space, sorted by (slot, node) with the depot first.
    ///
    /// An occupied slot offers the feasible unvisited customers of its last
    /// node's neighborhood plus the return to the depot; when none of them is
    /// feasible only the return remains. Free slots offer new-route starts
    /// from [`start_pool`](Self::start_pool).
    pub fn feasible_actions(&self) -> Vec<Action> {
        let mut actions = Vec::new();
        let mut pool: Option<Vec<usize>> = None;
        for (s, slot) in self.slots.iter().enumerate() {
            if slot.is_free() {
                if self.unvisited.is_empty() {
                    continue;
                }
                let pool = pool.get_or_insert_with(|| {
                    let mut p = self.start_pool();
                    p.sort_unstable();
                    p
                });
                actions.extend(
                    pool.iter()
                        .filter(|&&i| self.can_extend(s, i))
                        .map(|&i| Action { slot: s, target: Target::Customer(i) }),
                );
            } else {
                actions.push(Action { slot: s, target: Target::Depot });
                let last = slot.vehicle.current_node;
                let mut cands: Vec<usize> = self
                    .inst
                    .neighbors(last)
                    .iter()
                    .copied()
                    .filter(|i| self.unvisited.contains(i) && self.can_extend(s, *i))
                    .collect();
                cands.sort_unstable();
                actions.extend(cands.into_iter().map(|i| Action { slot: s, target: Target::Customer(i) }));
            }
        }
        actions
    }

    fn is_feasible(&self, a: Action) -> bool {
        if a.slot >= self.slots.len() {
            return false;
        }
        match a.target {
            Target::Depot => true,
            Target::Customer(i) => {
                if !self.unvisited.contains(&i) || !self.can_extend(a.slot, i) {
                    return false;
                }
                let slot = &self.slots[a.slot];
                if slot.is_free() {
                    self.start_pool().contains(&i)
                } else {
                    self.inst.neighbors(slot.vehicle.current_node).contains(&i)
                }
            }
        }
    }

    /// Applies a feasible action. A return on a free slot is a no-op.
    pub fn apply_action(&mut self, a: Action) -> Result<(), ConstructError> {
        if !self.is_feasible(a) {
            return Err(ConstructError::InvalidAction(a));
        }
        self.apply_unchecked(a);
        Ok(())
    }

    /// Opens a new route at `customer` in a free slot, bypassing the start
    /// pool (used for sampled start configurations).
    pub fn start_route(&mut self, slot: usize, customer: usize) -> Result<(), ConstructError> {
        let a = Action { slot, target: Target::Customer(customer) };
        if slot >= self.slots.len()
            || !self.slots[slot].is_free()
            || !self.unvisited.contains(&customer)
            || !self.can_extend(slot, customer)
        {
            return Err(ConstructError::InvalidAction(a));
        }
        self.apply_unchecked(a);
        Ok(())
    }

    pub(crate) fn apply_unchecked(&mut self, a: Action) {
        let inst = self.inst;
        let slot = &mut self.slots[a.slot];
        match a.target {
            Target::Depot => {
                if !slot.route.is_empty() {
                    self.finished.push(Route::closed(std::mem::take(&mut slot.route)));
                }
                slot.vehicle = VehicleFeatures::fresh(inst, a.slot);
            }
            Target::Customer(i) => {
                let node = inst.node(i);
                let v = &mut slot.vehicle;
                let arrival = v.current_time + inst.travel(v.current_node, i);
                v.current_time = arrival.max(node.tw_start) + node.service;
                v.remaining_capacity -= node.demand;
                v.current_node = i;
                slot.route.push(i);
                self.unvisited.remove(&i);
            }
        }
        self.step += 1;
        trace!("step {} slot {} -> {:?}", self.step, a.slot, a.target);
    }

    /// Current routes: finished ones followed by occupied slots (as open
    /// routes), plus the unvisited customers.
    pub fn to_solution(&self) -> Solution {
        let mut routes = self.finished.clone();
        routes.extend(self.slots.iter().filter(|s| !s.is_free()).map(|s| Route::open(s.route.clone())));
        Solution { routes, unvisited: self.unvisited.clone() }
    }
}

fn tw_order(inst: &Instance) -> Vec<usize> {
    let mut order: Vec<usize> = inst.customers().collect();
    order.sort_by(|&a, &b| inst.node(a).tw_start.total_cmp(&inst.node(b).tw_start).then(a.cmp(&b)));
    order
}

/// Scoring policy over candidate actions.
pub trait Scorer: Sync {
    /// Binds the scorer to an instance, caching any per-instance work.
    fn bind<'a>(&'a self, inst: &'a Instance) -> Box<dyn BoundScorer + 'a>;
}

pub trait BoundScorer {
    /// One logit per action; must be a pure function of its inputs.
    fn score(&self, state: &ConstructionState<'_>, actions: &[Action]) -> Vec<f64>;
}

/// Nearest-neighbor style baseline: extend with the closest feasible
/// customer, otherwise open a route at the start closest to the depot, and
/// return only when nothing else is possible.
#[derive(Debug, Clone, Copy, Default)]
pub struct DistanceGreedy;

const OPEN_PENALTY: f64 = 1e6;
const RETURN_SCORE: f64 = -1e9;

impl Scorer for DistanceGreedy {
    fn bind<'a>(&'a self, inst: &'a Instance) -> Box<dyn BoundScorer + 'a> {
        Box::new(BoundDistanceGreedy { inst })
    }
}

struct BoundDistanceGreedy<'a> {
    inst: &'a Instance,
}

impl BoundScorer for BoundDistanceGreedy<'_> {
    fn score(&self, state: &ConstructionState<'_>, actions: &[Action]) -> Vec<f64> {
        actions
            .iter()
            .map(|a| {
                let slot = &state.slots()[a.slot];
                match a.target {
                    Target::Depot => RETURN_SCORE,
                    Target::Customer(i) if slot.is_free() => -OPEN_PENALTY - self.inst.travel(0, i),
                    Target::Customer(i) => -self.inst.travel(slot.vehicle.current_node, i),
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecodeMode {
    Greedy,
    Sample,
}

/// Index of the highest logit, first one on ties.
pub fn argmax(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, &l) in logits.iter().enumerate() {
        if l > logits[best] {
            best = i;
        }
    }
    best
}

/// Softmax probabilities; `-inf` entries get exactly zero.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| if l == f64::NEG_INFINITY { 0.0 } else { (l - max).exp() }).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Draws an index from the softmax of `logits`.
pub fn sample_index<R: Rng + ?Sized>(logits: &[f64], rng: &mut R) -> usize {
    let probs = softmax(logits);
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

fn check_serviceable(inst: &Instance, customers: impl IntoIterator<Item = usize>) -> Result<(), ConstructError> {
    for c in customers {
        if !inst.serviceable_alone(c) {
            return Err(ConstructError::InfeasibleCustomer(c));
        }
    }
    Ok(())
}

/// Runs the decoding loop until every customer is routed and every slot is
/// closed.
pub fn decode<R: Rng + ?Sized>(
    state: &mut ConstructionState<'_>,
    scorer: &dyn BoundScorer,
    mode: DecodeMode,
    rng: &mut R,
) -> Result<(), ConstructError> {
    let bound = 4 * state.instance().n_customers() + state.kappa();
    loop {
        let actions = state.feasible_actions();
        if actions.is_empty() {
            break;
        }
        let logits = scorer.score(state, &actions);
        debug_assert_eq!(logits.len(), actions.len());
        let pick = match mode {
            DecodeMode::Greedy => argmax(&logits),
            DecodeMode::Sample => sample_index(&logits, rng),
        };
        state.apply_unchecked(actions[pick]);
        if state.step() > bound {
            return Err(ConstructError::StepBound(bound));
        }
    }
    debug_assert!(state.is_done());
    Ok(())
}

/// Builds a complete solution from scratch.
pub fn rollout<R: Rng + ?Sized>(
    inst: &Instance,
    scorer: &dyn Scorer,
    mode: DecodeMode,
    kappa: usize,
    rng: &mut R,
) -> Result<Solution, ConstructError> {
    rollout_from_starts(inst, scorer, mode, kappa, &[], rng)
}

/// Like [`rollout`] but the first routes are opened at `starts`, one per slot.
pub fn rollout_from_starts<R: Rng + ?Sized>(
    inst: &Instance,
    scorer: &dyn Scorer,
    mode: DecodeMode,
    kappa: usize,
    starts: &[usize],
    rng: &mut R,
) -> Result<Solution, ConstructError> {
    check_serviceable(inst, inst.customers())?;
    let bound = scorer.bind(inst);
    let mut state = ConstructionState::new(inst, kappa)?;
    if starts.len() > kappa {
        return Err(ConstructError::Config(format!("{} start nodes for {kappa} slots", starts.len())));
    }
    for (slot, &c) in starts.iter().enumerate() {
        state.start_route(slot, c)?;
    }
    decode(&mut state, bound.as_ref(), mode, rng)?;
    Ok(state.to_solution())
}

fn sample_starts<R: Rng + ?Sized>(order: &[usize], base: usize, kappa: usize, rng: &mut R) -> Vec<usize> {
    let size = ((base as f64) * 0.25).ceil() as usize;
    let pool = &order[..size.max(kappa).min(order.len())];
    pool.choose_multiple(rng, kappa.min(pool.len())).copied().collect()
}

/// Samples κ distinct start customers from the earliest-window quarter of
/// the depot neighborhood, widening the pool with the next-earliest
/// customers when it holds fewer than κ.
pub fn start_nodes_pomo<R: Rng + ?Sized>(inst: &Instance, kappa: usize, rng: &mut R) -> Result<Vec<usize>, ConstructError> {
    if kappa > inst.n_customers() {
        return Err(ConstructError::Config(format!(
            "kappa = {kappa} exceeds the {} customers",
            inst.n_customers()
        )));
    }
    let h0 = inst.neighbors(0);
    if h0.is_empty() {
        return Err(ConstructError::Config("depot neighborhood is empty".into()));
    }
    let by_tw = |a: &usize, b: &usize| inst.node(*a).tw_start.total_cmp(&inst.node(*b).tw_start).then(a.cmp(b));
    let mut order: Vec<usize> = h0.to_vec();
    order.sort_by(by_tw);
    if kappa > order.len() {
        let mut rest: Vec<usize> = inst.customers().filter(|c| !h0.contains(c)).collect();
        rest.sort_by(by_tw);
        order.extend(rest);
    }
    Ok(sample_starts(&order, h0.len(), kappa, rng))
}

/// Derives the random stream of trajectory `index` from a base seed.
pub fn child_rng(base: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(base);
    rng.set_stream(index);
    rng
}

/// `n` greedy rollouts, each from its own sampled start configuration.
pub fn pomo_rollouts<R: RngCore + ?Sized>(
    inst: &Instance,
    scorer: &dyn Scorer,
    n: usize,
    kappa: usize,
    rng: &mut R,
) -> Result<Vec<Solution>, ConstructError> {
    pomo_rollouts_impl(inst, scorer, n, kappa, rng.next_u64(), false)
}

/// Parallel [`pomo_rollouts`]; returns the same solutions for the same
/// random stream.
pub fn pomo_rollouts_par<R: RngCore + ?Sized>(
    inst: &Instance,
    scorer: &dyn Scorer,
    n: usize,
    kappa: usize,
    rng: &mut R,
) -> Result<Vec<Solution>, ConstructError> {
    pomo_rollouts_impl(inst, scorer, n, kappa, rng.next_u64(), true)
}

fn pomo_rollouts_impl(
    inst: &Instance,
    scorer: &dyn Scorer,
    n: usize,
    kappa: usize,
    base: u64,
    parallel: bool,
) -> Result<Vec<Solution>, ConstructError> {
    if n == 0 {
        return Err(ConstructError::Config("at least one rollout is required".into()));
    }
    check_serviceable(inst, inst.customers())?;
    let one = |t: usize| -> Result<Solution, ConstructError> {
        let mut rng = child_rng(base, t as u64);
        let starts = start_nodes_pomo(inst, kappa, &mut rng)?;
        rollout_from_starts(inst, scorer, DecodeMode::Greedy, kappa, &starts, &mut rng)
    };
    if parallel {
        (0..n).into_par_iter().map(one).collect()
    } else {
        (0..n).map(one).collect()
    }
}

/// Completes a partial solution. Closed routes are kept verbatim, open
/// routes (at most κ) are extended, and remaining customers are routed.
/// With `sample_starts`, free slots first receive start customers sampled
/// from the earliest-window quarter of the unvisited customers.
pub fn reconstruct<R: Rng + ?Sized>(
    inst: &Instance,
    scorer: &dyn Scorer,
    partial: &Solution,
    mode: DecodeMode,
    kappa: usize,
    sample_starts_for_new: bool,
    rng: &mut R,
) -> Result<Solution, ConstructError> {
    let open = partial.open_routes();
    if open > kappa {
        return Err(ConstructError::RepairLimit { open, kappa });
    }
    if open == 0 && partial.unvisited.is_empty() {
        return Ok(partial.clone());
    }
    check_serviceable(inst, partial.unvisited.iter().copied())?;
    let mut state = ConstructionState::from_partial(inst, partial, kappa)?;
    if sample_starts_for_new && !state.unvisited.is_empty() {
        let order: Vec<usize> = state.tw_order.iter().copied().filter(|c| state.unvisited.contains(c)).collect();
        let free: Vec<usize> = (0..kappa).filter(|&s| state.slots[s].is_free()).collect();
        let starts = sample_starts(&order, order.len(), free.len(), rng);
        for (slot, c) in free.into_iter().zip(starts) {
            state.start_route(slot, c)?;
        }
    }
    let bound = scorer.bind(inst);
    decode(&mut state, bound.as_ref(), mode, rng)?;
    Ok(state.to_solution())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instance::{sample_instance, Family, HorizonType, Node, SamplerConfig};
    use crate::solution::check_solution;

    fn node(id: usize, x: f64, tw: (f64, f64), demand: f64) -> Node {
        Node { id, x, y: 0.0, demand, tw_start: tw.0, tw_end: tw.1, service: 0.0 }
    }

    fn line(customers: &[(f64, (f64, f64))], k: usize) -> Instance {
        let mut nodes = vec![node(0, 0.0, (0.0, 1000.0), 0.0)];
        for (i, &(x, tw)) in customers.iter().enumerate() {
            nodes.push(node(i + 1, x, tw, 1.0));
        }
        Instance::new("line", nodes, 10.0, 10).unwrap().build_neighborhoods(k)
    }

    fn sampled(n: usize, seed: u64) -> Instance {
        sample_instance(&SamplerConfig::new(n, Family::RC, HorizonType::Type1, 0.75, seed)).unwrap()
    }

    #[test]
    fn pool_size_is_a_quarter() {
        let inst = line(&[(1.0, (0.0, 100.0)); 8], 8);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let s = start_nodes_pomo(&inst, 1, &mut rng).unwrap();
            // all windows tie: the pool is ids 1 and 2
            assert!(s[0] == 1 || s[0] == 2, "{s:?}");
        }
        let s = start_nodes_pomo(&inst, 3, &mut rng).unwrap();
        let mut sorted = s.clone();
        sorted.sort();
        assert_eq!(sorted, vec![1, 2, 3]);
        assert!(start_nodes_pomo(&inst, 9, &mut rng).is_err());
    }

    #[test]
    fn starts_prefer_early_windows() {
        let tws = [(50.0, 60.0), (5.0, 90.0), (70.0, 80.0), (0.0, 100.0)];
        let inst = line(&tws.map(|tw| (2.0, tw)), 4);
        let mut a = ChaCha8Rng::seed_from_u64(3);
        let mut b = ChaCha8Rng::seed_from_u64(3);
        let s1 = start_nodes_pomo(&inst, 1, &mut a).unwrap();
        assert_eq!(s1, vec![4]);
        assert_eq!(start_nodes_pomo(&inst, 1, &mut b).unwrap(), s1);
    }

    #[test]
    fn time_mask_excludes_late_nodes() {
        let inst = line(&[(10.0, (0.0, 100.0)), (11.0, (0.0, 5.0)), (12.0, (0.0, 100.0))], 3);
        let mut st = ConstructionState::new(&inst, 1).unwrap();
        st.start_route(0, 1).unwrap();
        let acts = st.feasible_actions();
        assert!(!acts.contains(&Action { slot: 0, target: Target::Customer(2) }));
        assert!(acts.contains(&Action { slot: 0, target: Target::Customer(3) }));
        assert_eq!(acts[0].target, Target::Depot);
        assert!(st.apply_action(Action { slot: 0, target: Target::Customer(2) }).is_err());
    }

    #[test]
    fn neighborhood_restricts_extension() {
        // k = 1: H_1 = {2}, H_2 = {1}, H_3 = {2}
        let inst = line(&[(10.0, (0.0, 1000.0)), (11.0, (0.0, 1000.0)), (30.0, (0.0, 1000.0))], 1);
        let mut st = ConstructionState::new(&inst, 1).unwrap();
        st.start_route(0, 1).unwrap();
        let targets: Vec<Target> = st.feasible_actions().iter().map(|a| a.target).collect();
        assert_eq!(targets, vec![Target::Depot, Target::Customer(2)]);
        st.apply_action(Action { slot: 0, target: Target::Customer(2) }).unwrap();
        // 3 is unvisited but outside H_2: only the return is offered
        let acts = st.feasible_actions();
        assert_eq!(acts, vec![Action { slot: 0, target: Target::Depot }]);
        st.apply_action(acts[0]).unwrap();
        let acts = st.feasible_actions();
        assert_eq!(acts, vec![Action { slot: 0, target: Target::Customer(3) }]);
    }

    #[test]
    fn apply_updates_vehicle() {
        let inst = line(&[(4.0, (10.0, 100.0)), (6.0, (0.0, 100.0))], 2);
        let mut st = ConstructionState::new(&inst, 2).unwrap();
        st.start_route(0, 1).unwrap();
        let v = st.slots()[0].vehicle;
        assert_eq!((v.remaining_capacity, v.current_node, v.current_time), (9.0, 1, 10.0));
        assert_eq!(st.step(), 1);
        // return on a free slot is a no-op
        st.apply_action(Action { slot: 1, target: Target::Depot }).unwrap();
        assert_eq!(st.finished().len(), 0);
        assert_eq!(st.step(), 2);
        st.apply_action(Action { slot: 0, target: Target::Customer(2) }).unwrap();
        st.apply_action(Action { slot: 0, target: Target::Depot }).unwrap();
        assert!(st.is_done());
        let sol = st.to_solution();
        assert!(check_solution(&inst, &sol).feasible);
        assert_eq!(sol.routes, vec![Route::closed(vec![1, 2])]);
    }

    #[test]
    fn single_customer_rollout() {
        let inst = line(&[(3.0, (0.0, 100.0))], 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = rollout(&inst, &DistanceGreedy, DecodeMode::Greedy, 1, &mut rng).unwrap();
        assert_eq!(s.routes, vec![Route::closed(vec![1])]);
    }

    #[test]
    fn unreachable_customer_is_reported() {
        let inst = line(&[(3.0, (0.0, 100.0)), (50.0, (0.0, 10.0))], 2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(
            rollout(&inst, &DistanceGreedy, DecodeMode::Greedy, 2, &mut rng),
            Err(ConstructError::InfeasibleCustomer(2))
        );
    }

    #[test]
    fn greedy_rollouts_are_deterministic_and_feasible() {
        for seed in 0..10 {
            let inst = sampled(25, seed);
            let a = rollout(&inst, &DistanceGreedy, DecodeMode::Greedy, 4, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
            let b = rollout(&inst, &DistanceGreedy, DecodeMode::Greedy, 4, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
            assert_eq!(a, b);
            let rep = check_solution(&inst, &a);
            assert!(rep.feasible, "{:?}", rep.violations);
            let s = rollout(&inst, &DistanceGreedy, DecodeMode::Sample, 4, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            assert!(check_solution(&inst, &s).feasible);
        }
    }

    #[test]
    fn pomo_rollouts_feasible_and_parallel_consistent() {
        let inst = sampled(50, 4);
        let seq = pomo_rollouts(&inst, &DistanceGreedy, 16, 4, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let par = pomo_rollouts_par(&inst, &DistanceGreedy, 16, 4, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(seq, par);
        assert_eq!(seq.len(), 16);
        assert!(seq.iter().all(|s| check_solution(&inst, s).feasible));
        let distinct: BTreeSet<Vec<Vec<usize>>> = seq.iter().map(Solution::canonical).collect();
        assert!(distinct.len() > 1);
    }

    #[test]
    fn pomo_single_matches_manual_rollout() {
        let inst = sampled(20, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let base = ChaCha8Rng::seed_from_u64(5).next_u64();
        let sols = pomo_rollouts(&inst, &DistanceGreedy, 1, 3, &mut rng).unwrap();
        let mut child = child_rng(base, 0);
        let starts = start_nodes_pomo(&inst, 3, &mut child).unwrap();
        let manual = rollout_from_starts(&inst, &DistanceGreedy, DecodeMode::Greedy, 3, &starts, &mut child).unwrap();
        assert_eq!(sols[0], manual);
    }

    #[test]
    fn reconstruct_limits_and_identity() {
        let inst = sampled(12, 1);
        let full = rollout(&inst, &DistanceGreedy, DecodeMode::Greedy, 2, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(reconstruct(&inst, &DistanceGreedy, &full, DecodeMode::Greedy, 2, true, &mut rng).unwrap(), full);

        let mut partial = full.clone();
        for r in partial.routes.iter_mut() {
            r.open = true;
        }
        let open = partial.open_routes();
        assert!(open >= 2);
        assert_eq!(
            reconstruct(&inst, &DistanceGreedy, &partial, DecodeMode::Greedy, open - 1, true, &mut rng),
            Err(ConstructError::RepairLimit { open, kappa: open - 1 })
        );
    }

    #[test]
    fn reconstruct_keeps_closed_routes() {
        let inst = sampled(30, 2);
        let full = rollout(&inst, &DistanceGreedy, DecodeMode::Greedy, 4, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut partial = full.clone();
        let victim = partial.routes.pop().unwrap();
        let (keep, drop) = victim.customers.split_at(victim.len() / 2);
        partial.routes.push(Route::open(keep.to_vec()));
        partial.unvisited.extend(drop.iter().copied());
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let fixed = reconstruct(&inst, &DistanceGreedy, &partial, DecodeMode::Greedy, 4, true, &mut rng).unwrap();
        assert!(check_solution(&inst, &fixed).feasible);
        assert_eq!(&fixed.routes[..full.routes.len() - 1], &full.routes[..full.routes.len() - 1]);
    }

    #[test]
    fn softmax_properties() {
        let p = softmax(&[1.0, 1.0, 1.0, 1.0]);
        assert!(p.iter().all(|&x| (x - 0.25).abs() < 1e-15));
        let p = softmax(&[0.3, f64::NEG_INFINITY, -2.0]);
        assert_eq!(p[1], 0.0);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
    }
}
