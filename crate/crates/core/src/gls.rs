//! Guided local search.
//!
//! Best-improvement descent over relocate, relocate-chain, exchange, 2-opt
//! (intra-route reversal and inter-route tail swap), or-opt and
//! cross-exchange under an augmented objective: distance, plus λ times the
//! penalty counters of the solution's edges, plus a large weight per vehicle
//! above the fleet limit. At a local optimum the edges of maximal utility
//! `d / (1 + p)` get their counters raised and the descent continues.
//!
//! Every candidate is described as a list of pieces of the current routes,
//! which gives O(pieces) cost deltas from prefix sums and feasibility checks
//! that only re-propagate the modified middle of a route.

use std::collections::BTreeSet;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::instance::Instance;
use crate::solution::{evaluate_route, Route, Solution, VEHICLE_PENALTY};

const EPS: f64 = 1e-9;
/// Minimum augmented-cost decrease for a move to count as improving.
const IMPROVE: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GlsConfig {
    /// Wall-clock budget in seconds; `None` relies on `max_rounds`.
    pub time_limit: Option<f64>,
    /// Number of penalization rounds; `None` relies on `time_limit`.
    pub max_rounds: Option<usize>,
    pub lambda_factor: f64,
    pub vehicle_penalty: f64,
    /// Longest segment moved by relocate_chain, or_opt and cross_exchange.
    pub max_segment: usize,
    /// Recompute the augmented cost after every move and record the error.
    pub verify_deltas: bool,
}

impl Default for GlsConfig {
    fn default() -> Self {
        GlsConfig {
            time_limit: Some(2.0),
            max_rounds: None,
            lambda_factor: 0.1,
            vehicle_penalty: VEHICLE_PENALTY,
            max_segment: 3,
            verify_deltas: false,
        }
    }
}

/// Default budget in seconds by instance size: 2 s up to 200 customers,
/// then 16, 32, 64 and 128 s for 400, 600, 800 and 1000+.
pub fn default_time_limit(n_customers: usize) -> f64 {
    match n_customers {
        0..=200 => 2.0,
        201..=400 => 16.0,
        401..=600 => 32.0,
        601..=800 => 64.0,
        _ => 128.0,
    }
}

impl GlsConfig {
    pub fn for_size(n_customers: usize) -> Self {
        GlsConfig { time_limit: Some(default_time_limit(n_customers)), ..GlsConfig::default() }
    }

    pub fn validate(&self) -> Result<(), GlsError> {
        if self.time_limit.is_none() && self.max_rounds.is_none() {
            return Err(GlsError::Config("either time_limit or max_rounds must be set".into()));
        }
        if let Some(t) = self.time_limit {
            if !(t >= 0.0 && t.is_finite()) {
                return Err(GlsError::Config(format!("time_limit must be a non-negative number, got {t}")));
            }
        }
        if !(self.lambda_factor > 0.0 && self.lambda_factor.is_finite()) {
            return Err(GlsError::Config(format!("lambda_factor must be positive, got {}", self.lambda_factor)));
        }
        if !(self.vehicle_penalty >= 0.0 && self.vehicle_penalty.is_finite()) {
            return Err(GlsError::Config(format!("vehicle_penalty must be non-negative, got {}", self.vehicle_penalty)));
        }
        if self.max_segment == 0 {
            return Err(GlsError::Config("max_segment must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GlsError {
    #[error("local search needs a complete solution")]
    Partial,
    #[error("input solution is infeasible: {0}")]
    Infeasible(String),
    #[error("invalid move: {0}")]
    BadMove(String),
    #[error("invalid local search config: {0}")]
    Config(String),
}

/// Penalty counters per undirected edge and their weight.
#[derive(Debug, Clone, PartialEq)]
pub struct PenaltyState {
    n: usize,
    p: Vec<u32>,
    pub lambda: f64,
}

impl PenaltyState {
    pub fn new(n_nodes: usize, lambda: f64) -> Self {
        PenaltyState { n: n_nodes, p: vec![0; n_nodes * n_nodes], lambda }
    }

    pub fn get(&self, i: usize, j: usize) -> u32 {
        self.p[i * self.n + j]
    }

    pub fn increment(&mut self, i: usize, j: usize) {
        self.p[i * self.n + j] += 1;
        if i != j {
            self.p[j * self.n + i] += 1;
        }
    }

    /// Sum of all counters over undirected edges.
    pub fn total(&self) -> u64 {
        let mut t = 0u64;
        for i in 0..self.n {
            for j in i..self.n {
                t += u64::from(self.get(i, j));
            }
        }
        t
    }
}

/// Edges of a closed route, depot legs included.
fn route_edges(customers: &[usize]) -> impl Iterator<Item = (usize, usize)> + '_ {
    let n = customers.len();
    (0..=n).filter(move |_| n > 0).map(move |k| {
        let a = if k == 0 { 0 } else { customers[k - 1] };
        let b = if k == n { 0 } else { customers[k] };
        (a, b)
    })
}

/// Distance + λ·Σ p_e over solution edges + `vehicle_penalty` per vehicle
/// above the limit.
pub fn augmented_cost(inst: &Instance, s: &Solution, pen: &PenaltyState, vehicle_penalty: f64) -> f64 {
    let mut dist = 0.0;
    let mut p = 0.0;
    for r in s.routes.iter().filter(|r| !r.is_empty()) {
        for (a, b) in route_edges(&r.customers) {
            dist += inst.travel(a, b);
            p += f64::from(pen.get(a, b));
        }
    }
    let excess = s.n_vehicles().saturating_sub(inst.max_vehicles());
    dist + pen.lambda * p + vehicle_penalty * excess as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Move {
    /// Moves customer `pos` of route `from` into route `to`, before the
    /// customer currently at `gap` (`gap = len` appends).
    Relocate { from: usize, pos: usize, to: usize, gap: usize },
    /// Like `Relocate` for the segment `pos..pos + len`.
    RelocateChain { from: usize, pos: usize, len: usize, to: usize, gap: usize },
    /// Swaps two customers, in one route or two.
    Exchange { r1: usize, p1: usize, r2: usize, p2: usize },
    /// Same route: reverses positions `i..=j`. Two routes: swaps the tails
    /// starting at positions `i` and `j`.
    TwoOpt { r1: usize, i: usize, r2: usize, j: usize },
    /// Moves segment `pos..pos + len` of a route before its position `gap`.
    OrOpt { route: usize, pos: usize, len: usize, gap: usize },
    /// Swaps segment `p1..p1 + len1` of `r1` with `p2..p2 + len2` of `r2`.
    CrossExchange { r1: usize, p1: usize, len1: usize, r2: usize, p2: usize, len2: usize },
}

impl Move {
    fn map_routes(self, f: impl Fn(usize) -> usize) -> Move {
        match self {
            Move::Relocate { from, pos, to, gap } => Move::Relocate { from: f(from), pos, to: f(to), gap },
            Move::RelocateChain { from, pos, len, to, gap } => {
                Move::RelocateChain { from: f(from), pos, len, to: f(to), gap }
            }
            Move::Exchange { r1, p1, r2, p2 } => Move::Exchange { r1: f(r1), p1, r2: f(r2), p2 },
            Move::TwoOpt { r1, i, r2, j } => Move::TwoOpt { r1: f(r1), i, r2: f(r2), j },
            Move::OrOpt { route, pos, len, gap } => Move::OrOpt { route: f(route), pos, len, gap },
            Move::CrossExchange { r1, p1, len1, r2, p2, len2 } => {
                Move::CrossExchange { r1: f(r1), p1, len1, r2: f(r2), p2, len2 }
            }
        }
    }
}

/// Range `lo..hi` of route `route`, possibly reversed.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
struct Piece {
    route: usize,
    lo: usize,
    hi: usize,
    rev: bool,
}

fn fwd(route: usize, lo: usize, hi: usize) -> Piece {
    Piece { route, lo, hi, rev: false }
}

/// New content of one route, at most five pieces.
#[derive(Debug, Clone, Copy, Default)]
struct Plan {
    target: usize,
    pieces: [Piece; 5],
    n: usize,
}

impl Plan {
    fn new(target: usize, parts: &[Piece]) -> Self {
        let mut p = Plan { target, ..Plan::default() };
        for &piece in parts {
            if piece.hi > piece.lo {
                p.pieces[p.n] = piece;
                p.n += 1;
            }
        }
        p
    }

    fn pieces(&self) -> &[Piece] {
        &self.pieces[..self.n]
    }
}

/// Describes a move as new contents of the routes it touches.
fn plans(m: &Move, lens: &[usize], max_segment: usize) -> Result<Vec<Plan>, GlsError> {
    let bad = |msg: String| Err(GlsError::BadMove(msg));
    let route_ok = |r: usize| r < lens.len();
    match *m {
        Move::Relocate { from, pos, to, gap } => plans(&Move::RelocateChain { from, pos, len: 1, to, gap }, lens, usize::MAX),
        Move::RelocateChain { from, pos, len, to, gap } => {
            if !route_ok(from) || !route_ok(to) || from == to {
                return bad(format!("{m:?}: routes must be distinct and exist"));
            }
            if len == 0 || len > max_segment || pos + len > lens[from] || gap > lens[to] {
                return bad(format!("{m:?}: operands out of range"));
            }
            Ok(vec![
                Plan::new(from, &[fwd(from, 0, pos), fwd(from, pos + len, lens[from])]),
                Plan::new(to, &[fwd(to, 0, gap), fwd(from, pos, pos + len), fwd(to, gap, lens[to])]),
            ])
        }
        Move::Exchange { r1, p1, r2, p2 } => {
            if !route_ok(r1) || !route_ok(r2) || p1 >= lens[r1] || p2 >= lens[r2] {
                return bad(format!("{m:?}: operands out of range"));
            }
            if r1 == r2 {
                if p1 == p2 {
                    return bad(format!("{m:?}: exchange needs two positions"));
                }
                let (i, j) = (p1.min(p2), p1.max(p2));
                let r = r1;
                Ok(vec![Plan::new(
                    r,
                    &[fwd(r, 0, i), fwd(r, j, j + 1), fwd(r, i + 1, j), fwd(r, i, i + 1), fwd(r, j + 1, lens[r])],
                )])
            } else {
                Ok(vec![
                    Plan::new(r1, &[fwd(r1, 0, p1), fwd(r2, p2, p2 + 1), fwd(r1, p1 + 1, lens[r1])]),
                    Plan::new(r2, &[fwd(r2, 0, p2), fwd(r1, p1, p1 + 1), fwd(r2, p2 + 1, lens[r2])]),
                ])
            }
        }
        Move::TwoOpt { r1, i, r2, j } => {
            if !route_ok(r1) || !route_ok(r2) {
                return bad(format!("{m:?}: route out of range"));
            }
            if r1 == r2 {
                if i >= j || j >= lens[r1] {
                    return bad(format!("{m:?}: need i < j < route length"));
                }
                let r = r1;
                Ok(vec![Plan::new(r, &[fwd(r, 0, i), Piece { route: r, lo: i, hi: j + 1, rev: true }, fwd(r, j + 1, lens[r])])])
            } else {
                if i > lens[r1] || j > lens[r2] {
                    return bad(format!("{m:?}: cut positions out of range"));
                }
                Ok(vec![
                    Plan::new(r1, &[fwd(r1, 0, i), fwd(r2, j, lens[r2])]),
                    Plan::new(r2, &[fwd(r2, 0, j), fwd(r1, i, lens[r1])]),
                ])
            }
        }
        Move::OrOpt { route: r, pos, len, gap } => {
            if !route_ok(r) || len == 0 || len > max_segment || pos + len > lens[r] || gap > lens[r] {
                return bad(format!("{m:?}: operands out of range"));
            }
            if gap >= pos && gap <= pos + len {
                return bad(format!("{m:?}: gap inside or next to the segment"));
            }
            let seg = fwd(r, pos, pos + len);
            if gap < pos {
                Ok(vec![Plan::new(r, &[fwd(r, 0, gap), seg, fwd(r, gap, pos), fwd(r, pos + len, lens[r])])])
            } else {
                Ok(vec![Plan::new(r, &[fwd(r, 0, pos), fwd(r, pos + len, gap), seg, fwd(r, gap, lens[r])])])
            }
        }
        Move::CrossExchange { r1, p1, len1, r2, p2, len2 } => {
            if !route_ok(r1) || !route_ok(r2) || r1 == r2 {
                return bad(format!("{m:?}: routes must be distinct and exist"));
            }
            if len1 == 0 || len2 == 0 || len1 > max_segment || len2 > max_segment {
                return bad(format!("{m:?}: segment lengths out of range"));
            }
            if p1 + len1 > lens[r1] || p2 + len2 > lens[r2] {
                return bad(format!("{m:?}: segments out of range"));
            }
            Ok(vec![
                Plan::new(r1, &[fwd(r1, 0, p1), fwd(r2, p2, p2 + len2), fwd(r1, p1 + len1, lens[r1])]),
                Plan::new(r2, &[fwd(r2, 0, p2), fwd(r1, p1, p1 + len1), fwd(r2, p2 + len2, lens[r2])]),
            ])
        }
    }
}

/// Prefix data of one route for O(1) segment sums and suffix feasibility.
#[derive(Debug, Clone)]
struct RouteCache {
    nodes: Vec<usize>,
    /// `dist[p]`: travel along `nodes[0..=p]`.
    dist: Vec<f64>,
    /// Same for penalty counters.
    pen: Vec<f64>,
    /// `load[p]`: demand of `nodes[0..p]`.
    load: Vec<f64>,
    depart: Vec<f64>,
    /// Latest service start at each position keeping the rest feasible.
    latest: Vec<f64>,
    /// Augmented cost of the closed route (depot legs included).
    aug: f64,
    distance: f64,
}

impl RouteCache {
    fn new(inst: &Instance, pen: &PenaltyState, nodes: Vec<usize>) -> Self {
        let n = nodes.len();
        let mut dist = vec![0.0; n];
        let mut pens = vec![0.0; n];
        let mut load = vec![0.0; n + 1];
        let mut depart = vec![0.0; n];
        let mut latest = vec![0.0; n];
        let (mut t, mut prev) = (0.0f64, 0usize);
        for (p, &c) in nodes.iter().enumerate() {
            if p > 0 {
                dist[p] = dist[p - 1] + inst.travel(prev, c);
                pens[p] = pens[p - 1] + f64::from(pen.get(prev, c));
            }
            load[p + 1] = load[p] + inst.node(c).demand;
            let node = inst.node(c);
            t = (t + inst.travel(prev, c)).max(node.tw_start) + node.service;
            depart[p] = t;
            prev = c;
        }
        let h = inst.horizon();
        for p in (0..n).rev() {
            let c = nodes[p];
            let node = inst.node(c);
            let next = if p + 1 == n { h - inst.travel(c, 0) } else { latest[p + 1] - inst.travel(c, nodes[p + 1]) };
            latest[p] = node.tw_end.min(next - node.service);
        }
        let (mut distance, mut aug) = (0.0, 0.0);
        if n > 0 {
            let legs = inst.travel(0, nodes[0]) + inst.travel(nodes[n - 1], 0);
            let leg_pen = f64::from(pen.get(0, nodes[0]) + pen.get(nodes[n - 1], 0));
            distance = dist[n - 1] + legs;
            aug = distance + pen.lambda * (pens[n - 1] + leg_pen);
        }
        RouteCache { nodes, dist, pen: pens, load, depart, latest, aug, distance }
    }

    fn len(&self) -> usize {
        self.nodes.len()
    }
}

/// Best feasible candidate of a route pair, kept until one of the two
/// routes changes.
#[derive(Debug, Clone, Copy, Default)]
struct PairBest {
    plain: Option<(f64, Move)>,
    /// Best candidate that empties a route, tracked while the fleet limit
    /// is exceeded.
    emptying: Option<(f64, Move)>,
}

struct Search<'a> {
    inst: &'a Instance,
    cfg: &'a GlsConfig,
    pen: PenaltyState,
    routes: Vec<RouteCache>,
    /// `pairs[a][b - a]` for `a <= b`.
    pairs: Vec<Vec<Option<PairBest>>>,
    max_delta_error: f64,
}

impl<'a> Search<'a> {
    fn new(inst: &'a Instance, cfg: &'a GlsConfig, pen: PenaltyState, s: &Solution) -> Self {
        let routes: Vec<RouteCache> = s
            .routes
            .iter()
            .filter(|r| !r.is_empty())
            .map(|r| RouteCache::new(inst, &pen, r.customers.clone()))
            .collect();
        let n = routes.len();
        Search { inst, cfg, pen, routes, pairs: (0..n).map(|a| vec![None; n - a]).collect(), max_delta_error: 0.0 }
    }

    fn vehicles(&self) -> usize {
        self.routes.iter().filter(|r| r.len() > 0).count()
    }

    /// Keeps one empty route at the end while the fleet has room, so moves
    /// into it can open a vehicle.
    fn ensure_spare(&mut self) {
        let has_spare = self.routes.last().is_some_and(|r| r.len() == 0);
        if !has_spare && self.vehicles() < self.inst.max_vehicles() {
            self.routes.push(RouteCache::new(self.inst, &self.pen, Vec::new()));
            for row in &mut self.pairs {
                row.push(None);
            }
            self.pairs.push(vec![None]);
        }
    }

    fn excess(&self) -> usize {
        self.vehicles().saturating_sub(self.inst.max_vehicles())
    }

    fn true_cost(&self) -> f64 {
        self.routes.iter().map(|r| r.distance).sum::<f64>() + self.cfg.vehicle_penalty * self.excess() as f64
    }

    fn solution(&self) -> Solution {
        Solution {
            routes: self.routes.iter().filter(|r| r.len() > 0).map(|r| Route::closed(r.nodes.clone())).collect(),
            unvisited: BTreeSet::new(),
        }
    }

    fn first(&self, p: &Piece) -> usize {
        let nodes = &self.routes[p.route].nodes;
        if p.rev {
            nodes[p.hi - 1]
        } else {
            nodes[p.lo]
        }
    }

    fn last(&self, p: &Piece) -> usize {
        let nodes = &self.routes[p.route].nodes;
        if p.rev {
            nodes[p.lo]
        } else {
            nodes[p.hi - 1]
        }
    }

    /// Augmented cost of a planned route; empty plans cost nothing.
    fn plan_cost(&self, plan: &Plan) -> f64 {
        let pieces = plan.pieces();
        if pieces.is_empty() {
            return 0.0;
        }
        let (inst, pen) = (self.inst, &self.pen);
        let mut dist = 0.0;
        let mut p = 0.0;
        let mut prev = 0;
        for piece in pieces {
            let rc = &self.routes[piece.route];
            dist += rc.dist[piece.hi - 1] - rc.dist[piece.lo];
            p += rc.pen[piece.hi - 1] - rc.pen[piece.lo];
            let f = self.first(piece);
            dist += inst.travel(prev, f);
            p += f64::from(pen.get(prev, f));
            prev = self.last(piece);
        }
        dist += inst.travel(prev, 0);
        p += f64::from(pen.get(prev, 0));
        dist + pen.lambda * p
    }

    fn plan_feasible(&self, plan: &Plan) -> bool {
        let pieces = plan.pieces();
        if pieces.is_empty() {
            return true;
        }
        let inst = self.inst;
        let load: f64 = pieces.iter().map(|p| {
            let l = &self.routes[p.route].load;
            l[p.hi] - l[p.lo]
        }).sum();
        if load > inst.capacity() + EPS {
            return false;
        }
        let (mut t, mut prev) = (0.0f64, 0usize);
        let mut start = 0;
        let p0 = pieces[0];
        if !p0.rev && p0.lo == 0 {
            t = self.routes[p0.route].depart[p0.hi - 1];
            prev = self.routes[p0.route].nodes[p0.hi - 1];
            start = 1;
        }
        for (k, piece) in pieces.iter().enumerate().skip(start) {
            let rc = &self.routes[piece.route];
            if k + 1 == pieces.len() && !piece.rev && piece.hi == rc.len() {
                let c = rc.nodes[piece.lo];
                return t + inst.travel(prev, c) <= rc.latest[piece.lo] + EPS;
            }
            let mut visit = |c: usize| {
                let node = inst.node(c);
                let arrival = t + inst.travel(prev, c);
                if arrival > node.tw_end + EPS {
                    return false;
                }
                t = arrival.max(node.tw_start) + node.service;
                prev = c;
                true
            };
            if piece.rev {
                for q in (piece.lo..piece.hi).rev() {
                    if !visit(rc.nodes[q]) {
                        return false;
                    }
                }
            } else {
                for q in piece.lo..piece.hi {
                    if !visit(rc.nodes[q]) {
                        return false;
                    }
                }
            }
        }
        t + inst.travel(prev, 0) <= inst.horizon() + EPS
    }

    /// Augmented delta (without the vehicle term) and whether a route is
    /// emptied.
    fn delta(&self, plans: &[Plan]) -> (f64, bool) {
        let mut d = 0.0;
        let mut empties = false;
        for plan in plans {
            d += self.plan_cost(plan) - self.routes[plan.target].aug;
            empties |= plan.n == 0;
        }
        (d, empties)
    }

    fn materialize(&self, plan: &Plan) -> Vec<usize> {
        let mut out = Vec::new();
        for p in plan.pieces() {
            let nodes = &self.routes[p.route].nodes[p.lo..p.hi];
            if p.rev {
                out.extend(nodes.iter().rev());
            } else {
                out.extend_from_slice(nodes);
            }
        }
        out
    }

    /// Every candidate of the pair `(a, b)`, `a <= b`, in scan order.
    fn for_each_move(&self, a: usize, b: usize, mut f: impl FnMut(Move)) {
        let ms = self.cfg.max_segment;
        let la = self.routes[a].len();
        if a == b {
            let r = a;
            for i in 0..la {
                for j in i + 1..la {
                    f(Move::TwoOpt { r1: r, i, r2: r, j });
                }
            }
            for len in 1..=ms.min(la) {
                for pos in 0..=la - len {
                    for gap in 0..=la {
                        if gap < pos || gap > pos + len {
                            f(Move::OrOpt { route: r, pos, len, gap });
                        }
                    }
                }
            }
            for i in 0..la {
                for j in i + 2..la {
                    f(Move::Exchange { r1: r, p1: i, r2: r, p2: j });
                }
            }
            return;
        }
        let lb = self.routes[b].len();
        for (from, to, lf, lt) in [(a, b, la, lb), (b, a, lb, la)] {
            for pos in 0..lf {
                for gap in 0..=lt {
                    f(Move::Relocate { from, pos, to, gap });
                }
            }
            for len in 2..=ms.min(lf) {
                for pos in 0..=lf - len {
                    for gap in 0..=lt {
                        f(Move::RelocateChain { from, pos, len, to, gap });
                    }
                }
            }
        }
        for p1 in 0..la {
            for p2 in 0..lb {
                f(Move::Exchange { r1: a, p1, r2: b, p2 });
            }
        }
        for len1 in 1..=ms.min(la) {
            for len2 in 1..=ms.min(lb) {
                if len1 == 1 && len2 == 1 {
                    continue;
                }
                for p1 in 0..=la - len1 {
                    for p2 in 0..=lb - len2 {
                        f(Move::CrossExchange { r1: a, p1, len1, r2: b, p2, len2 });
                    }
                }
            }
        }
        for i in 0..=la {
            for j in 0..=lb {
                if (i == 0 && j == 0) || (i == la && j == lb) {
                    continue;
                }
                f(Move::TwoOpt { r1: a, i, r2: b, j });
            }
        }
    }

    fn scan_pair(&self, a: usize, b: usize) -> PairBest {
        let track_emptying = self.excess() > 0;
        let lens: Vec<usize> = self.routes.iter().map(RouteCache::len).collect();
        let mut best = PairBest::default();
        self.for_each_move(a, b, |m| {
            let Ok(ps) = plans(&m, &lens, self.cfg.max_segment) else { return };
            let (d, empties) = self.delta(&ps);
            let plain_better = d < -IMPROVE && best.plain.is_none_or(|(bd, _)| d < bd);
            let empty_better = track_emptying && empties && best.emptying.is_none_or(|(bd, _)| d < bd);
            if (plain_better || empty_better) && ps.iter().all(|p| self.plan_feasible(p)) {
                if plain_better {
                    best.plain = Some((d, m));
                }
                if empty_better {
                    best.emptying = Some((d, m));
                }
            }
        });
        best
    }

    fn pair(&mut self, a: usize, b: usize) -> PairBest {
        if let Some(p) = self.pairs[a][b - a] {
            return p;
        }
        let p = self.scan_pair(a, b);
        self.pairs[a][b - a] = Some(p);
        p
    }

    /// Best improving move under the augmented objective, if any.
    fn best_move(&mut self) -> Option<(f64, Move)> {
        let bonus = if self.excess() > 0 { self.cfg.vehicle_penalty } else { 0.0 };
        let mut best: Option<(f64, Move)> = None;
        for a in 0..self.routes.len() {
            for b in a..self.routes.len() {
                let p = self.pair(a, b);
                let cands = [p.plain, p.emptying.map(|(d, m)| (d - bonus, m))];
                for (d, m) in cands.into_iter().flatten() {
                    if d < -IMPROVE && best.is_none_or(|(bd, _)| d < bd) {
                        best = Some((d, m));
                    }
                }
            }
        }
        best
    }

    fn invalidate(&mut self, r: usize) {
        for a in 0..=r {
            self.pairs[a][r - a] = None;
        }
        for slot in &mut self.pairs[r] {
            *slot = None;
        }
    }

    fn full_augmented(&self) -> f64 {
        augmented_cost(self.inst, &self.solution(), &self.pen, self.cfg.vehicle_penalty)
    }

    fn apply(&mut self, m: Move, predicted: f64) {
        let before = if self.cfg.verify_deltas { Some(self.full_augmented()) } else { None };
        let lens: Vec<usize> = self.routes.iter().map(RouteCache::len).collect();
        let ps = plans(&m, &lens, self.cfg.max_segment).expect("scanned moves are well-formed");
        let contents: Vec<(usize, Vec<usize>)> = ps.iter().map(|p| (p.target, self.materialize(p))).collect();
        for (r, nodes) in &contents {
            self.routes[*r] = RouteCache::new(self.inst, &self.pen, nodes.clone());
            self.invalidate(*r);
            debug_assert!(evaluate_route(self.inst, &Route::closed(nodes.clone())).is_ok());
        }
        let mut emptied: Vec<usize> = contents.iter().filter(|(_, n)| n.is_empty()).map(|(r, _)| *r).collect();
        emptied.sort_unstable_by(|x, y| y.cmp(x));
        for r in emptied {
            self.routes.remove(r);
            self.pairs.remove(r);
            for a in 0..r {
                self.pairs[a].remove(r - a);
            }
            let shift = |x: usize| if x > r { x - 1 } else { x };
            for row in &mut self.pairs {
                for best in row.iter_mut().flatten() {
                    best.plain = best.plain.map(|(d, m)| (d, m.map_routes(shift)));
                    best.emptying = best.emptying.map(|(d, m)| (d, m.map_routes(shift)));
                }
            }
        }
        if let Some(before) = before {
            let err = (self.full_augmented() - (before + predicted)).abs();
            self.max_delta_error = self.max_delta_error.max(err);
        }
        self.ensure_spare();
    }

    /// Raises the counters of the maximal-utility edges of the current
    /// solution and invalidates the affected routes.
    fn penalize(&mut self) -> usize {
        let mut best = f64::NEG_INFINITY;
        let mut edges: Vec<(usize, (usize, usize))> = Vec::new();
        for (ri, r) in self.routes.iter().enumerate() {
            for (a, b) in route_edges(&r.nodes) {
                let u = self.inst.travel(a, b) / (1.0 + f64::from(self.pen.get(a, b)));
                edges.push((ri, (a.min(b), a.max(b))));
                best = best.max(u);
            }
        }
        let tol = 1e-12 * best.abs().max(1.0);
        let mut hit = BTreeSet::new();
        let mut touched = BTreeSet::new();
        for (ri, (a, b)) in edges {
            let u = self.inst.travel(a, b) / (1.0 + f64::from(self.pen.get(a, b)));
            if u >= best - tol {
                hit.insert((a, b));
                touched.insert(ri);
            }
        }
        for &(a, b) in &hit {
            self.pen.increment(a, b);
        }
        for r in touched {
            let nodes = std::mem::take(&mut self.routes[r].nodes);
            self.routes[r] = RouteCache::new(self.inst, &self.pen, nodes);
            self.invalidate(r);
        }
        hit.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GlsStats {
    pub rounds: usize,
    pub moves: usize,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub lambda: f64,
    /// Largest gap between predicted and recomputed augmented cost over all
    /// applied moves (0 unless `verify_deltas`).
    pub max_delta_error: f64,
    pub penalty_total: u64,
}

fn validate_input(inst: &Instance, s: &Solution) -> Result<(), GlsError> {
    if !s.is_complete() {
        return Err(GlsError::Partial);
    }
    if let Some(v) = s.partition_violations(inst).first() {
        return Err(GlsError::Infeasible(v.to_string()));
    }
    for r in &s.routes {
        if let Err(v) = evaluate_route(inst, r) {
            return Err(GlsError::Infeasible(v.to_string()));
        }
    }
    Ok(())
}

/// Runs guided local search from `s` and returns the best solution seen
/// under the true objective (distance plus vehicle-excess penalty), never
/// worse than `s`. Inputs may exceed the fleet limit; every route must be
/// feasible.
pub fn local_search(inst: &Instance, s: &Solution, cfg: &GlsConfig) -> Result<(Solution, GlsStats), GlsError> {
    cfg.validate()?;
    validate_input(inst, s)?;
    let start = Instant::now();
    let deadline = cfg.time_limit.map(|t| start + Duration::from_secs_f64(t));
    let out_of_time = || deadline.is_some_and(|d| Instant::now() >= d);

    let edges: usize = s.routes.iter().filter(|r| !r.is_empty()).map(|r| r.len() + 1).sum();
    let base: f64 = s.routes.iter().filter(|r| !r.is_empty()).map(|r| crate::solution::route_distance(inst, &r.customers)).sum();
    let mut lambda = if edges > 0 { cfg.lambda_factor * base / edges as f64 } else { 0.0 };
    if !(lambda > 0.0) {
        lambda = cfg.lambda_factor;
    }
    let pen = PenaltyState::new(inst.nodes().len(), lambda);
    let mut search = Search::new(inst, cfg, pen, s);
    search.ensure_spare();
    let initial_cost = search.true_cost();
    let mut best_cost = initial_cost;
    let mut best = s.clone();
    let mut stats = GlsStats {
        rounds: 0,
        moves: 0,
        initial_cost,
        final_cost: initial_cost,
        lambda,
        max_delta_error: 0.0,
        penalty_total: 0,
    };
    if cfg.time_limit == Some(0.0) || cfg.max_rounds == Some(0) && cfg.time_limit.is_none() {
        return Ok((best, stats));
    }
    'outer: loop {
        while let Some((d, m)) = search.best_move() {
            search.apply(m, d);
            stats.moves += 1;
            let c = search.true_cost();
            if c < best_cost - EPS {
                best_cost = c;
                best = search.solution();
            }
            if out_of_time() {
                break 'outer;
            }
        }
        if cfg.max_rounds.is_some_and(|r| stats.rounds >= r) || out_of_time() || search.vehicles() == 0 {
            break;
        }
        search.penalize();
        stats.rounds += 1;
    }
    stats.final_cost = best_cost;
    stats.max_delta_error = search.max_delta_error;
    stats.penalty_total = search.pen.total();
    Ok((best, stats))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MoveOutcome {
    /// Change of the true objective (distance plus vehicle-excess penalty).
    pub delta: f64,
    /// Whether every modified route is feasible.
    pub feasible: bool,
    pub solution: Solution,
}

/// Evaluates one move incrementally on a complete solution with feasible
/// routes. Route indices refer to the nonempty routes of `s`, in order.
pub fn apply_move(inst: &Instance, s: &Solution, m: &Move) -> Result<MoveOutcome, GlsError> {
    validate_input(inst, s)?;
    let cfg = GlsConfig { max_segment: usize::MAX, ..GlsConfig::default() };
    let search = Search::new(inst, &cfg, PenaltyState::new(inst.nodes().len(), 1.0), s);
    let lens: Vec<usize> = search.routes.iter().map(RouteCache::len).collect();
    let ps = plans(m, &lens, usize::MAX)?;
    let (d, _) = search.delta(&ps);
    let feasible = ps.iter().all(|p| search.plan_feasible(p));
    let mut routes: Vec<Vec<usize>> = search.routes.iter().map(|r| r.nodes.clone()).collect();
    for p in &ps {
        routes[p.target] = search.materialize(p);
    }
    let before = search.excess();
    routes.retain(|r| !r.is_empty());
    let after = routes.len().saturating_sub(inst.max_vehicles());
    let delta = d + cfg.vehicle_penalty * (after as f64 - before as f64);
    Ok(MoveOutcome { delta, feasible, solution: Solution::from_routes(routes) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instance::{sample_instance, Family, HorizonType, Node, SamplerConfig};
    use crate::solution::{check_solution, objective};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn free_nodes(points: &[(f64, f64)]) -> Vec<Node> {
        let mut nodes = vec![Node { id: 0, x: 0.0, y: 0.0, demand: 0.0, tw_start: 0.0, tw_end: 1000.0, service: 0.0 }];
        for (i, &(x, y)) in points.iter().enumerate() {
            nodes.push(Node { id: i + 1, x, y, demand: 1.0, tw_start: 0.0, tw_end: 1000.0, service: 0.0 });
        }
        nodes
    }

    fn rounds(n: usize) -> GlsConfig {
        GlsConfig { time_limit: None, max_rounds: Some(n), verify_deltas: true, ..GlsConfig::default() }
    }

    #[test]
    fn augmented_cost_formula() {
        let inst = Instance::new("a", free_nodes(&[(3.0, 4.0), (6.0, 8.0), (0.0, 5.0)]), 10.0, 2).unwrap();
        let s = Solution::from_routes(vec![vec![1, 2], vec![3]]);
        let mut pen = PenaltyState::new(4, 0.1);
        let base = 5.0 + 5.0 + 10.0 + 10.0;
        assert!((augmented_cost(&inst, &s, &pen, 1e6) - base).abs() < 1e-12);
        pen.increment(1, 2);
        pen.increment(2, 1);
        assert!((augmented_cost(&inst, &s, &pen, 1e6) - (base + 0.2)).abs() < 1e-12);
        let three = Solution::from_routes(vec![vec![1], vec![2], vec![3]]);
        let inst2 = Instance::new("b", free_nodes(&[(3.0, 4.0), (6.0, 8.0), (0.0, 5.0)]), 10.0, 2).unwrap();
        let zero = PenaltyState::new(4, 0.1);
        let d = 10.0 + 20.0 + 10.0;
        assert!((augmented_cost(&inst2, &three, &zero, 1e6) - (d + 1e6)).abs() < 1e-9);
    }

    #[test]
    fn collinear_route_gets_sorted() {
        // The line is offset from the depot so that only monotone orders are
        // optimal.
        let inst = Instance::new("l", free_nodes(&[(1.0, 10.0), (2.0, 10.0), (3.0, 10.0), (4.0, 10.0)]), 10.0, 1).unwrap();
        let s = Solution::from_routes(vec![vec![3, 1, 4, 2]]);
        let (out, stats) = local_search(&inst, &s, &rounds(20)).unwrap();
        // Exhaustive oracle over the 24 orders.
        let mut perms = vec![];
        permute(&mut vec![1, 2, 3, 4], 0, &mut perms);
        let best = perms
            .iter()
            .map(|p| objective(&inst, &Solution::from_routes(vec![p.clone()])))
            .fold(f64::INFINITY, f64::min);
        assert!((objective(&inst, &out) - best).abs() < 1e-9);
        let r = &out.routes[0].customers;
        assert!(r == &vec![1, 2, 3, 4] || r == &vec![4, 3, 2, 1]);
        assert!(objective(&inst, &out) < objective(&inst, &s));
        assert!(stats.max_delta_error <= 1e-9);
    }

    fn permute(v: &mut Vec<usize>, k: usize, out: &mut Vec<Vec<usize>>) {
        if k == v.len() {
            out.push(v.clone());
            return;
        }
        for i in k..v.len() {
            v.swap(k, i);
            permute(v, k + 1, out);
            v.swap(k, i);
        }
    }

    #[test]
    fn zero_budget_returns_input() {
        let inst = Instance::new("z", free_nodes(&[(1.0, 0.0), (2.0, 0.0)]), 10.0, 2).unwrap();
        let s = Solution::from_routes(vec![vec![2, 1]]);
        let cfg = GlsConfig { time_limit: Some(0.0), ..GlsConfig::default() };
        assert_eq!(local_search(&inst, &s, &cfg).unwrap().0, s);
    }

    #[test]
    fn optimum_is_kept() {
        let inst = Instance::new("o", free_nodes(&[(1.0, 0.0), (2.0, 0.0)]), 10.0, 2).unwrap();
        let s = Solution::from_routes(vec![vec![1, 2]]);
        let (out, _) = local_search(&inst, &s, &rounds(10)).unwrap();
        assert!((objective(&inst, &out) - objective(&inst, &s)).abs() < 1e-12);
    }

    #[test]
    fn merges_routes_above_fleet_limit() {
        let inst = Instance::new("m", free_nodes(&[(1.0, 0.0), (2.0, 0.0), (3.0, 0.0)]), 10.0, 1).unwrap();
        let s = Solution::from_routes(vec![vec![1], vec![2], vec![3]]);
        let (out, _) = local_search(&inst, &s, &rounds(5)).unwrap();
        assert_eq!(out.n_vehicles(), 1);
        assert!(check_solution(&inst, &out).feasible);
    }

    /// The windows of 1 and 3 clash with 8, so the optimum needs a second
    /// vehicle; exhaustive enumeration gives 244.7988 for {1,6,3} + {8,4,7,5,2}.
    #[test]
    fn opens_a_vehicle_when_the_fleet_has_room() {
        let text = "split\n\nVEHICLE\nNUMBER CAPACITY\n{K} 1000\n\nCUSTOMER\nCUST NO. X Y DEMAND READY DUE SERVICE\n\n\
            0 50 50 0 0 1000 0\n1 64.9 66.4 8 257 496 10\n2 43.7 51.2 18 0 1000 10\n3 65.7 74.2 20 465 641 10\n\
            4 73.3 13.6 30 0 1000 10\n5 41 34.5 30 787 972 10\n6 64.7 68.3 23 0 1000 10\n\
            7 27.3 0.4 14 743 862 10\n8 95.8 20.7 7 273 356 10\n";
        let one_route = Solution::from_routes(vec![vec![4, 8, 1, 6, 3, 2, 7, 5]]);
        let inst = crate::instance::parse_solomon(&text.replace("{K}", "8")).unwrap();
        let (out, _) = local_search(&inst, &one_route, &rounds(20)).unwrap();
        assert_eq!(out.n_vehicles(), 2);
        assert!((objective(&inst, &out) - 244.7988217530971).abs() < 1e-9);
        let capped = crate::instance::parse_solomon(&text.replace("{K}", "1")).unwrap();
        let (out, _) = local_search(&capped, &one_route, &rounds(20)).unwrap();
        assert_eq!(out.n_vehicles(), 1);
    }

    #[test]
    fn rejects_bad_inputs() {
        let inst = Instance::new("x", free_nodes(&[(1.0, 0.0), (2.0, 0.0)]), 1.0, 2).unwrap();
        let over = Solution::from_routes(vec![vec![1, 2]]);
        assert!(matches!(local_search(&inst, &over, &rounds(1)), Err(GlsError::Infeasible(_))));
        let partial = Solution { routes: vec![Route::open(vec![1])], unvisited: [2].into_iter().collect() };
        assert_eq!(local_search(&inst, &partial, &rounds(1)).unwrap_err(), GlsError::Partial);
        let cfg = GlsConfig { time_limit: None, max_rounds: None, ..GlsConfig::default() };
        assert!(matches!(local_search(&inst, &Solution::from_routes(vec![vec![1], vec![2]]), &cfg), Err(GlsError::Config(_))));
    }

    #[test]
    fn identity_and_two_opt_boundary() {
        let inst = Instance::new("t", free_nodes(&[(1.0, 0.0), (2.0, 1.0), (3.0, 0.0), (4.0, 2.0)]), 10.0, 2).unwrap();
        let s = Solution::from_routes(vec![vec![1, 2, 3, 4]]);
        let id = apply_move(&inst, &s, &Move::Exchange { r1: 0, p1: 1, r2: 0, p2: 1 });
        assert!(id.is_err());
        let id = apply_move(&inst, &s, &Move::OrOpt { route: 0, pos: 1, len: 1, gap: 1 });
        assert!(id.is_err());
        let out = apply_move(&inst, &s, &Move::TwoOpt { r1: 0, i: 1, r2: 0, j: 2 }).unwrap();
        assert_eq!(out.solution.routes[0].customers, vec![1, 3, 2, 4]);
        let t = |a, b| inst.travel(a, b);
        let expect = t(1, 3) + t(2, 4) - t(1, 2) - t(3, 4);
        assert!((out.delta - expect).abs() < 1e-12);
        let full = objective(&inst, &out.solution) - objective(&inst, &s);
        assert!((out.delta - full).abs() < 1e-9);
    }

    #[test]
    fn apply_move_out_of_bounds() {
        let inst = Instance::new("b", free_nodes(&[(1.0, 0.0), (2.0, 0.0)]), 10.0, 2).unwrap();
        let s = Solution::from_routes(vec![vec![1], vec![2]]);
        for m in [
            Move::Relocate { from: 0, pos: 3, to: 1, gap: 0 },
            Move::Relocate { from: 0, pos: 0, to: 0, gap: 0 },
            Move::CrossExchange { r1: 0, p1: 0, len1: 2, r2: 1, p2: 0, len2: 1 },
            Move::TwoOpt { r1: 0, i: 0, r2: 5, j: 0 },
        ] {
            assert!(matches!(apply_move(&inst, &s, &m), Err(GlsError::BadMove(_))), "{m:?}");
        }
        let moved = apply_move(&inst, &s, &Move::Relocate { from: 0, pos: 0, to: 1, gap: 1 }).unwrap();
        assert_eq!(moved.solution.routes.len(), 1);
        assert_eq!(moved.solution.routes[0].customers, vec![2, 1]);
    }

    fn random_move(rng: &mut ChaCha8Rng, lens: &[usize]) -> Move {
        let r = |rng: &mut ChaCha8Rng| rng.gen_range(0..lens.len());
        let a = r(rng);
        let b = r(rng);
        let p = |rng: &mut ChaCha8Rng, r: usize| rng.gen_range(0..=lens[r]);
        match rng.gen_range(0..6) {
            0 => Move::Relocate { from: a, pos: p(rng, a), to: b, gap: p(rng, b) },
            1 => Move::RelocateChain { from: a, pos: p(rng, a), len: rng.gen_range(1..4), to: b, gap: p(rng, b) },
            2 => Move::Exchange { r1: a, p1: p(rng, a), r2: b, p2: p(rng, b) },
            3 => Move::TwoOpt { r1: a, i: p(rng, a), r2: b, j: p(rng, b) },
            4 => Move::OrOpt { route: a, pos: p(rng, a), len: rng.gen_range(1..4), gap: p(rng, a) },
            _ => Move::CrossExchange {
                r1: a,
                p1: p(rng, a),
                len1: rng.gen_range(1..4),
                r2: b,
                p2: p(rng, b),
                len2: rng.gen_range(1..4),
            },
        }
    }

    #[test]
    fn deltas_match_full_recompute() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut checked = 0;
        let mut seed = 0;
        while checked < 1000 {
            seed += 1;
            let cfg = SamplerConfig { max_vehicles: Some(4), ..SamplerConfig::new(12, Family::RC, HorizonType::Type2, 0.3, seed) };
            let inst = sample_instance(&cfg).unwrap();
            let s = crate::construct::rollout(&inst, &crate::construct::DistanceGreedy, crate::DecodeMode::Greedy, 3, &mut rng).unwrap();
            let lens: Vec<usize> = s.routes.iter().filter(|r| !r.is_empty()).map(Route::len).collect();
            for _ in 0..50 {
                let m = random_move(&mut rng, &lens);
                let Ok(out) = apply_move(&inst, &s, &m) else { continue };
                let full = check_solution(&inst, &out.solution);
                let route_ok = full.violations.iter().all(|v| matches!(v, crate::solution::Violation::VehicleLimit { .. }));
                assert_eq!(out.feasible, route_ok, "{m:?}");
                let d = full.penalized(inst.max_vehicles()) - check_solution(&inst, &s).penalized(inst.max_vehicles());
                assert!((out.delta - d).abs() <= 1e-9, "{m:?}: {} vs {d}", out.delta);
                checked += 1;
            }
        }
    }

    #[test]
    fn never_worse_and_feasible_on_samples() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for seed in 0..15 {
            let inst = sample_instance(&SamplerConfig::new(15, Family::R, HorizonType::Type1, 0.5, seed)).unwrap();
            let s = crate::construct::rollout(&inst, &crate::construct::DistanceGreedy, crate::DecodeMode::Greedy, 2, &mut rng).unwrap();
            let (out, stats) = local_search(&inst, &s, &rounds(15)).unwrap();
            assert!(check_solution(&inst, &out).feasible);
            assert!(objective(&inst, &out) <= objective(&inst, &s) + 1e-9);
            assert!(stats.max_delta_error <= 1e-9, "{}", stats.max_delta_error);
        }
    }

    #[test]
    fn penalties_only_grow() {
        let mut pen = PenaltyState::new(3, 0.5);
        pen.increment(0, 2);
        pen.increment(2, 0);
        assert_eq!(pen.get(2, 0), 2);
        assert_eq!(pen.get(0, 2), 2);
        assert_eq!(pen.total(), 2);
    }

    #[test]
    fn time_limits_by_size() {
        assert_eq!(default_time_limit(100), 2.0);
        assert_eq!(default_time_limit(400), 16.0);
        assert_eq!(default_time_limit(1000), 128.0);
    }
}
