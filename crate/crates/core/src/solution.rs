//! Routes, schedules, solution cost and feasibility, and sequence similarity.

use std::collections::BTreeSet;
use std::fmt;

use serde::Serialize;
use thiserror::Error;

use crate::instance::Instance;

/// Weight of one vehicle beyond the fleet limit in penalized objectives.
pub const VEHICLE_PENALTY: f64 = 1e6;

const EPS: f64 = 1e-9;

/// Customer sequence of one vehicle; the depot is implicit at both ends.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Route {
    pub customers: Vec<usize>,
    /// An open route is a partial route whose tail may still be extended.
    pub open: bool,
}

impl Route {
    pub fn closed(customers: Vec<usize>) -> Self {
        Route { customers, open: false }
    }

    pub fn open(customers: Vec<usize>) -> Self {
        Route { customers, open: true }
    }

    pub fn len(&self) -> usize {
        self.customers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.customers.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Visit {
    pub node: usize,
    pub arrival: f64,
    pub start: f64,
    pub waiting: f64,
    pub departure: f64,
}

/// Forward-propagated timing of a route, depot departure at time 0.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    pub visits: Vec<Visit>,
    pub load: f64,
    /// Travel distance including the depot legs that exist (the closing leg
    /// only for closed routes).
    pub distance: f64,
    /// Arrival back at the depot, `None` for open routes.
    pub return_time: Option<f64>,
}

impl Schedule {
    pub fn total_waiting(&self) -> f64 {
        self.visits.iter().map(|v| v.waiting).sum()
    }

    /// Departure from the last visited node (0 for an empty route).
    pub fn end_departure(&self) -> f64 {
        self.visits.last().map_or(0.0, |v| v.departure)
    }
}

#[derive(Debug, Clone, PartialEq, Error, Serialize)]
pub enum RouteViolation {
    #[error("capacity exceeded at customer {node}: load {load} > {capacity}")]
    Capacity { node: usize, load: f64, capacity: f64 },
    #[error("time window missed at customer {node}: arrival {arrival} > due {due}")]
    TimeWindow { node: usize, arrival: f64, due: f64 },
    #[error("depot reached at {arrival} after closing time {closing}")]
    DepotClosing { arrival: f64, closing: f64 },
    #[error("unknown customer id {0}")]
    UnknownCustomer(usize),
    #[error("customer {0} visited twice in one route")]
    RepeatedCustomer(usize),
}

/// Propagates the schedule of `route` and reports the first violation.
pub fn evaluate_route(inst: &Instance, route: &Route) -> Result<Schedule, RouteViolation> {
    let n = inst.n_customers();
    let mut seen = BTreeSet::new();
    let mut visits = Vec::with_capacity(route.len());
    let (mut prev, mut time, mut load, mut distance) = (0usize, 0.0f64, 0.0f64, 0.0f64);
    for &c in &route.customers {
        if c == 0 || c > n {
            return Err(RouteViolation::UnknownCustomer(c));
        }
        if !seen.insert(c) {
            return Err(RouteViolation::RepeatedCustomer(c));
        }
        let node = inst.node(c);
        load += node.demand;
        if load > inst.capacity() + EPS {
            return Err(RouteViolation::Capacity { node: c, load, capacity: inst.capacity() });
        }
        let leg = inst.travel(prev, c);
        distance += leg;
        let arrival = time + leg;
        if arrival > node.tw_end + EPS {
            return Err(RouteViolation::TimeWindow { node: c, arrival, due: node.tw_end });
        }
        let start = arrival.max(node.tw_start);
        let departure = start + node.service;
        visits.push(Visit { node: c, arrival, start, waiting: start - arrival, departure });
        prev = c;
        time = departure;
    }
    let return_time = if route.open {
        None
    } else {
        let leg = inst.travel(prev, 0);
        distance += leg;
        let arrival = time + leg;
        if arrival > inst.horizon() + EPS {
            return Err(RouteViolation::DepotClosing { arrival, closing: inst.horizon() });
        }
        Some(arrival)
    };
    Ok(Schedule { visits, load, distance, return_time })
}

/// Whether the fragment can be closed: evaluates it as a closed route.
pub fn closable(inst: &Instance, customers: &[usize]) -> bool {
    evaluate_route(inst, &Route::closed(customers.to_vec())).is_ok()
}

/// A set of routes plus the customers not yet assigned to any route.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Solution {
    pub routes: Vec<Route>,
    pub unvisited: BTreeSet<usize>,
}

impl Solution {
    /// A complete solution made of the given closed routes.
    pub fn from_routes(routes: Vec<Vec<usize>>) -> Self {
        Solution {
            routes: routes.into_iter().map(Route::closed).collect(),
            unvisited: BTreeSet::new(),
        }
    }

    /// Nothing routed yet.
    pub fn empty(inst: &Instance) -> Self {
        Solution { routes: Vec::new(), unvisited: inst.customers().collect() }
    }

    pub fn is_complete(&self) -> bool {
        self.unvisited.is_empty() && self.routes.iter().all(|r| !r.open)
    }

    pub fn n_vehicles(&self) -> usize {
        self.routes.iter().filter(|r| !r.is_empty()).count()
    }

    pub fn open_routes(&self) -> usize {
        self.routes.iter().filter(|r| r.open).count()
    }

    /// Routes as an order-independent key: nonempty customer lists, sorted.
    pub fn canonical(&self) -> Vec<Vec<usize>> {
        let mut routes: Vec<Vec<usize>> = self
            .routes
            .iter()
            .filter(|r| !r.is_empty())
            .map(|r| r.customers.clone())
            .collect();
        routes.sort();
        routes
    }

    /// Same routes (as a set) and same unvisited customers.
    pub fn same_as(&self, other: &Solution) -> bool {
        self.unvisited == other.unvisited && self.canonical() == other.canonical()
    }

    /// Violations of the partition invariant: every customer exactly once in
    /// a route or in `unvisited`.
    pub fn partition_violations(&self, inst: &Instance) -> Vec<Violation> {
        let n = inst.n_customers();
        let mut count = vec![0usize; n + 1];
        let mut out = Vec::new();
        for c in self.routes.iter().flat_map(|r| r.customers.iter()).chain(self.unvisited.iter()) {
            if *c == 0 || *c > n {
                out.push(Violation::UnknownCustomer(*c));
            } else {
                count[*c] += 1;
            }
        }
        for (c, &k) in count.iter().enumerate().skip(1) {
            match k {
                0 => out.push(Violation::MissingCustomer(c)),
                1 => {}
                _ => out.push(Violation::DuplicateCustomer(c)),
            }
        }
        out
    }

    /// One route per line, space-separated customer ids.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for r in self.routes.iter().filter(|r| !r.is_empty()) {
            let ids: Vec<String> = r.customers.iter().map(|c| c.to_string()).collect();
            out.push_str(&ids.join(" "));
            out.push('\n');
        }
        out
    }

    /// Reads the route-per-line format. Blank lines are skipped; customers
    /// never mentioned end up in `unvisited`.
    pub fn from_text(text: &str, inst: &Instance) -> Result<Self, SolutionError> {
        let mut routes = Vec::new();
        for (no, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let ids = line
                .split_whitespace()
                .map(|f| {
                    f.parse::<usize>().map_err(|_| SolutionError::Format {
                        line: no + 1,
                        msg: format!("bad customer id {f:?}"),
                    })
                })
                .collect::<Result<Vec<_>, _>>()?;
            routes.push(Route::closed(ids));
        }
        let seen: BTreeSet<usize> = routes.iter().flat_map(|r| r.customers.iter().copied()).collect();
        let unvisited = inst.customers().filter(|c| !seen.contains(c)).collect();
        Ok(Solution { routes, unvisited })
    }
}

impl fmt::Display for Solution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_text())
    }
}

#[derive(Debug, Clone, PartialEq, Error, Serialize)]
pub enum Violation {
    #[error("route {route}: {violation}")]
    Route { route: usize, violation: RouteViolation },
    #[error("{used} vehicles used, limit is {max}")]
    VehicleLimit { used: usize, max: usize },
    #[error("customer {0} appears more than once")]
    DuplicateCustomer(usize),
    #[error("customer {0} is neither routed nor unvisited")]
    MissingCustomer(usize),
    #[error("unknown customer id {0}")]
    UnknownCustomer(usize),
    #[error("route {0} is still open")]
    OpenRoute(usize),
    #[error("{0} customers are unvisited")]
    Unvisited(usize),
}

#[derive(Debug, Error)]
pub enum SolutionError {
    #[error("cost is only defined for complete solutions")]
    Partial,
    #[error("line {line}: {msg}")]
    Format { line: usize, msg: String },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostReport {
    pub total_distance: f64,
    pub n_vehicles: usize,
    pub feasible: bool,
    pub violations: Vec<Violation>,
}

impl CostReport {
    fn from_parts(total_distance: f64, n_vehicles: usize, violations: Vec<Violation>) -> Self {
        CostReport { total_distance, n_vehicles, feasible: violations.is_empty(), violations }
    }

    /// Distance plus `VEHICLE_PENALTY` per vehicle above the fleet limit.
    pub fn penalized(&self, max_vehicles: usize) -> f64 {
        self.total_distance + VEHICLE_PENALTY * self.n_vehicles.saturating_sub(max_vehicles) as f64
    }
}

/// Cost of a complete solution, built from [`evaluate_route`].
pub fn cost(inst: &Instance, s: &Solution) -> Result<CostReport, SolutionError> {
    if !s.is_complete() {
        return Err(SolutionError::Partial);
    }
    let mut violations = s.partition_violations(inst);
    let mut distance = 0.0;
    for (i, r) in s.routes.iter().enumerate() {
        if r.is_empty() {
            continue;
        }
        match evaluate_route(inst, r) {
            Ok(sched) => distance += sched.distance,
            Err(violation) => {
                distance += route_distance(inst, &r.customers);
                violations.push(Violation::Route { route: i, violation });
            }
        }
    }
    let used = s.n_vehicles();
    if used > inst.max_vehicles() {
        violations.push(Violation::VehicleLimit { used, max: inst.max_vehicles() });
    }
    Ok(CostReport::from_parts(distance, used, violations))
}

/// Penalized objective of a complete solution (see [`CostReport::penalized`]).
pub fn objective(inst: &Instance, s: &Solution) -> f64 {
    cost(inst, s).map(|r| r.penalized(inst.max_vehicles())).unwrap_or(f64::INFINITY)
}

/// Closed-route distance with depot legs. Ids must be valid.
pub fn route_distance(inst: &Instance, customers: &[usize]) -> f64 {
    let mut prev = 0;
    let mut d = 0.0;
    for &c in customers {
        if c > inst.n_customers() {
            continue;
        }
        d += inst.travel(prev, c);
        prev = c;
    }
    d + inst.travel(prev, 0)
}

/// Independent validator: recomputes everything from the raw routes without
/// touching [`evaluate_route`] or any cached state. Accepts partial
/// solutions and reports them as infeasible.
pub fn check_solution(inst: &Instance, s: &Solution) -> CostReport {
    let n = inst.n_customers();
    let mut violations = Vec::new();
    let mut seen = vec![0u32; n + 1];
    let mut total = 0.0;
    let mut vehicles = 0;
    for (ri, r) in s.routes.iter().enumerate() {
        if r.open {
            violations.push(Violation::OpenRoute(ri));
        }
        if r.customers.is_empty() {
            continue;
        }
        vehicles += 1;
        let mut t = 0.0;
        let mut q = 0.0;
        let mut at = 0;
        let mut first_issue: Option<RouteViolation> = None;
        for &c in &r.customers {
            if c == 0 || c > n {
                violations.push(Violation::UnknownCustomer(c));
                continue;
            }
            seen[c] += 1;
            let node = &inst.nodes()[c];
            total += inst.travel(at, c);
            t += inst.travel(at, c);
            q += node.demand;
            if first_issue.is_none() {
                if q > inst.capacity() + EPS {
                    first_issue = Some(RouteViolation::Capacity { node: c, load: q, capacity: inst.capacity() });
                } else if t > node.tw_end + EPS {
                    first_issue = Some(RouteViolation::TimeWindow { node: c, arrival: t, due: node.tw_end });
                }
            }
            if t < node.tw_start {
                t = node.tw_start;
            }
            t += node.service;
            at = c;
        }
        if !r.open {
            total += inst.travel(at, 0);
            t += inst.travel(at, 0);
            if first_issue.is_none() && t > inst.depot().tw_end + EPS {
                first_issue = Some(RouteViolation::DepotClosing { arrival: t, closing: inst.depot().tw_end });
            }
        }
        if let Some(violation) = first_issue {
            violations.push(Violation::Route { route: ri, violation });
        }
    }
    for &c in &s.unvisited {
        if c == 0 || c > n {
            violations.push(Violation::UnknownCustomer(c));
        } else {
            seen[c] += 1;
        }
    }
    for c in 1..=n {
        if seen[c] == 0 {
            violations.push(Violation::MissingCustomer(c));
        } else if seen[c] > 1 {
            violations.push(Violation::DuplicateCustomer(c));
        }
    }
    if !s.unvisited.is_empty() {
        violations.push(Violation::Unvisited(s.unvisited.len()));
    }
    if vehicles > inst.max_vehicles() {
        violations.push(Violation::VehicleLimit { used: vehicles, max: inst.max_vehicles() });
    }
    CostReport::from_parts(total, vehicles, violations)
}

/// Length of the longest common subsequence.
pub fn lcs_len(a: &[usize], b: &[usize]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for &x in a {
        for (j, &y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Sequence similarity `2 * matches / (|a| + |b|)` with matches counted as
/// the longest common subsequence of the customer sequences.
pub fn route_similarity(a: &Route, b: &Route) -> f64 {
    let total = a.len() + b.len();
    if total == 0 {
        return 0.0;
    }
    2.0 * lcs_len(&a.customers, &b.customers) as f64 / total as f64
}

fn directed_similarity(a: &[&Route], b: &[&Route]) -> f64 {
    let sum: f64 = a
        .iter()
        .map(|r| b.iter().map(|q| route_similarity(r, q)).fold(0.0, f64::max))
        .sum();
    sum / a.len() as f64
}

/// Mean best-match route similarity, averaged over both directions.
pub fn solution_similarity(s1: &Solution, s2: &Solution) -> f64 {
    let a: Vec<&Route> = s1.routes.iter().filter(|r| !r.is_empty()).collect();
    let b: Vec<&Route> = s2.routes.iter().filter(|r| !r.is_empty()).collect();
    match (a.is_empty(), b.is_empty()) {
        (true, true) => 1.0,
        (true, false) | (false, true) => 0.0,
        _ => 0.5 * (directed_similarity(&a, &b) + directed_similarity(&b, &a)),
    }
}
