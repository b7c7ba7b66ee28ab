//! VRPTW problem instances: the Solomon/Homberger text format, a seeded
//! sampler mirroring the Solomon families, and k-nearest-neighbor lists.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default neighborhood size used when an instance is built without an
/// explicit `k`.
pub const DEFAULT_NEIGHBORS: usize = 20;

#[derive(Debug, Error)]
pub enum InstanceError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("invalid instance: {0}")]
    Invalid(String),
    #[error("invalid sampler config: {0}")]
    Config(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn parse_err(line: usize, msg: impl Into<String>) -> InstanceError {
    InstanceError::Parse { line, msg: msg.into() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub id: usize,
    pub x: f64,
    pub y: f64,
    pub demand: f64,
    /// Earliest service start.
    pub tw_start: f64,
    /// Latest service start.
    pub tw_end: f64,
    pub service: f64,
}

/// Immutable problem description. Node 0 is the depot, customers are
/// `1..=n_customers()`.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub name: String,
    nodes: Vec<Node>,
    capacity: f64,
    max_vehicles: usize,
    /// Row-major `(N+1) x (N+1)` travel times.
    travel: Vec<f64>,
    /// Whether `travel` was derived from coordinates (affects the text dump).
    euclidean: bool,
    neighbors: Vec<Vec<usize>>,
    k: usize,
}

impl Instance {
    /// Builds an instance with Euclidean travel times and `DEFAULT_NEIGHBORS`
    /// neighborhoods.
    pub fn new(
        name: impl Into<String>,
        nodes: Vec<Node>,
        capacity: f64,
        max_vehicles: usize,
    ) -> Result<Self, InstanceError> {
        let travel = euclidean_matrix(&nodes);
        let mut inst = Self::build(name.into(), nodes, capacity, max_vehicles, travel)?;
        inst.euclidean = true;
        Ok(inst)
    }

    /// Builds an instance around an explicit travel matrix. The matrix must be
    /// symmetric with a zero diagonal; the triangle inequality is not required.
    pub fn with_travel_matrix(
        name: impl Into<String>,
        nodes: Vec<Node>,
        capacity: f64,
        max_vehicles: usize,
        travel: Vec<Vec<f64>>,
    ) -> Result<Self, InstanceError> {
        let n = nodes.len();
        if travel.len() != n || travel.iter().any(|row| row.len() != n) {
            return Err(InstanceError::Invalid(format!(
                "travel matrix must be {n}x{n}"
            )));
        }
        let flat = travel.into_iter().flatten().collect();
        Self::build(name.into(), nodes, capacity, max_vehicles, flat)
    }

    fn build(
        name: String,
        nodes: Vec<Node>,
        capacity: f64,
        max_vehicles: usize,
        travel: Vec<f64>,
    ) -> Result<Self, InstanceError> {
        let inst = Instance {
            name,
            nodes,
            capacity,
            max_vehicles,
            travel,
            euclidean: false,
            neighbors: Vec::new(),
            k: 0,
        };
        inst.validate()?;
        Ok(inst.build_neighborhoods(DEFAULT_NEIGHBORS))
    }

    fn validate(&self) -> Result<(), InstanceError> {
        let invalid = |m: String| Err(InstanceError::Invalid(m));
        if self.nodes.is_empty() {
            return invalid("instance has no depot".into());
        }
        if !(self.capacity > 0.0) || !self.capacity.is_finite() {
            return invalid(format!("capacity must be positive, got {}", self.capacity));
        }
        if self.max_vehicles == 0 {
            return invalid("max_vehicles must be positive".into());
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if node.id != i {
                return invalid(format!("node at position {i} has id {}", node.id));
            }
            let fields = [node.x, node.y, node.demand, node.tw_start, node.tw_end, node.service];
            if fields.iter().any(|v| !v.is_finite()) {
                return invalid(format!("node {i} has a non-finite field"));
            }
            if node.tw_start > node.tw_end {
                return invalid(format!(
                    "node {i}: time window start {} exceeds end {}",
                    node.tw_start, node.tw_end
                ));
            }
            if node.demand < 0.0 || node.service < 0.0 {
                return invalid(format!("node {i}: negative demand or service time"));
            }
            if i == 0 && (node.demand != 0.0 || node.service != 0.0) {
                return invalid("depot must have zero demand and service time".into());
            }
            if node.demand > self.capacity {
                return invalid(format!(
                    "customer {i}: demand {} exceeds vehicle capacity {}",
                    node.demand, self.capacity
                ));
            }
        }
        let n = self.nodes.len();
        for i in 0..n {
            if self.travel[i * n + i] != 0.0 {
                return invalid(format!("travel[{i}][{i}] must be zero"));
            }
            for j in 0..n {
                let t = self.travel[i * n + j];
                if !t.is_finite() || t < 0.0 {
                    return invalid(format!("travel[{i}][{j}] = {t} is not a nonnegative number"));
                }
                if t != self.travel[j * n + i] {
                    return invalid(format!("travel matrix is not symmetric at ({i}, {j})"));
                }
            }
        }
        Ok(())
    }

    /// Recomputes the neighborhoods: for every node (depot included) the
    /// `min(k, N)` nearest customers other than itself, ascending by travel
    /// time, ties broken by lower id.
    pub fn build_neighborhoods(mut self, k: usize) -> Self {
        let k = k.max(1);
        let n = self.nodes.len();
        let neighbors = (0..n)
            .map(|i| {
                let mut others: Vec<usize> = (1..n).filter(|&j| j != i).collect();
                others.sort_by(|&a, &b| {
                    self.travel(i, a)
                        .total_cmp(&self.travel(i, b))
                        .then(a.cmp(&b))
                });
                others.truncate(k);
                others
            })
            .collect();
        self.neighbors = neighbors;
        self.k = k;
        self
    }

    /// Truncates every travel time to one decimal place, a convention used by
    /// some published benchmark results.
    pub fn truncate_travel_one_decimal(mut self) -> Self {
        for t in &mut self.travel {
            *t = (*t * 10.0).trunc() / 10.0;
        }
        self.euclidean = false;
        let k = self.k;
        self.build_neighborhoods(k)
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, id: usize) -> &Node {
        &self.nodes[id]
    }

    pub fn depot(&self) -> &Node {
        &self.nodes[0]
    }

    pub fn n_customers(&self) -> usize {
        self.nodes.len() - 1
    }

    pub fn customers(&self) -> impl Iterator<Item = usize> {
        1..self.nodes.len()
    }

    pub fn capacity(&self) -> f64 {
        self.capacity
    }

    pub fn max_vehicles(&self) -> usize {
        self.max_vehicles
    }

    /// Depot closing time, the planning horizon.
    pub fn horizon(&self) -> f64 {
        self.nodes[0].tw_end
    }

    #[inline]
    pub fn travel(&self, i: usize, j: usize) -> f64 {
        self.travel[i * self.nodes.len() + j]
    }

    pub fn travel_row(&self, i: usize) -> &[f64] {
        let n = self.nodes.len();
        &self.travel[i * n..(i + 1) * n]
    }

    /// Neighborhood `H_i`; `neighbors(0)` is the depot neighborhood.
    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn is_euclidean(&self) -> bool {
        self.euclidean
    }

    /// Checks that `customer` can be served by a dedicated vehicle.
    pub fn serviceable_alone(&self, customer: usize) -> bool {
        let node = &self.nodes[customer];
        let arrival = self.travel(0, customer);
        if arrival > node.tw_end || node.demand > self.capacity {
            return false;
        }
        let depart = arrival.max(node.tw_start) + node.service;
        depart + self.travel(customer, 0) <= self.horizon()
    }

    /// Line-oriented dump in the Solomon layout. Non-Euclidean matrices are
    /// appended as a `TRAVEL` section so the dump round-trips through
    /// [`parse_solomon`].
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{}", if self.name.is_empty() { "UNNAMED" } else { &self.name });
        let _ = writeln!(out, "\nVEHICLE\nNUMBER     CAPACITY\n  {}         {}\n", self.max_vehicles, self.capacity);
        let _ = writeln!(out, "CUSTOMER\nCUST NO.  XCOORD.   YCOORD.    DEMAND   READY TIME  DUE DATE   SERVICE   TIME\n");
        for n in &self.nodes {
            let _ = writeln!(
                out,
                "{:5} {} {} {} {} {} {}",
                n.id, n.x, n.y, n.demand, n.tw_start, n.tw_end, n.service
            );
        }
        if !self.euclidean {
            let _ = writeln!(out, "\nTRAVEL");
            for i in 0..self.nodes.len() {
                let row: Vec<String> = self.travel_row(i).iter().map(|t| t.to_string()).collect();
                let _ = writeln!(out, "{}", row.join(" "));
            }
        }
        out
    }
}

fn euclidean_matrix(nodes: &[Node]) -> Vec<f64> {
    let n = nodes.len();
    let mut travel = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                travel[i * n + j] = (nodes[i].x - nodes[j].x).hypot(nodes[i].y - nodes[j].y);
            }
        }
    }
    travel
}

/// Parses the Solomon/Homberger plain-text layout.
pub fn parse_solomon(text: &str) -> Result<Instance, InstanceError> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    let mut next_nonempty = |what: &str| -> Result<(usize, &str), InstanceError> {
        for (no, line) in lines.by_ref() {
            if !line.is_empty() {
                return Ok((no, line));
            }
        }
        Err(parse_err(0, format!("unexpected end of input, expected {what}")))
    };

    let (_, name) = next_nonempty("instance name")?;
    let name = name.to_string();

    let (no, line) = next_nonempty("VEHICLE section")?;
    if !line.eq_ignore_ascii_case("VEHICLE") {
        return Err(parse_err(no, format!("expected VEHICLE, found {line:?}")));
    }
    let (no, line) = next_nonempty("vehicle header")?;
    if !line.to_ascii_uppercase().starts_with("NUMBER") {
        return Err(parse_err(no, format!("expected NUMBER/CAPACITY header, found {line:?}")));
    }
    let (no, line) = next_nonempty("vehicle count and capacity")?;
    let fields: Vec<&str> = line.split_whitespace().collect();
    if fields.len() != 2 {
        return Err(parse_err(no, "expected vehicle count and capacity"));
    }
    let max_vehicles: usize = fields[0]
        .parse()
        .map_err(|_| parse_err(no, format!("non-numeric vehicle count {:?}", fields[0])))?;
    let capacity: f64 = parse_num(fields[1], no)?;

    let (no, line) = next_nonempty("CUSTOMER section")?;
    if !line.eq_ignore_ascii_case("CUSTOMER") {
        return Err(parse_err(no, format!("expected CUSTOMER, found {line:?}")));
    }
    let (no, line) = next_nonempty("customer table header")?;
    if !line.to_ascii_uppercase().starts_with("CUST") {
        return Err(parse_err(no, format!("expected customer table header, found {line:?}")));
    }

    let mut rows: Vec<(usize, Node)> = Vec::new();
    let mut travel_rows: Option<Vec<(usize, Vec<f64>)>> = None;
    for (no, line) in lines.by_ref() {
        if line.is_empty() {
            continue;
        }
        if line.eq_ignore_ascii_case("TRAVEL") {
            travel_rows = Some(Vec::new());
            continue;
        }
        if let Some(tr) = travel_rows.as_mut() {
            let row = line
                .split_whitespace()
                .map(|f| parse_num(f, no))
                .collect::<Result<Vec<_>, _>>()?;
            tr.push((no, row));
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 7 {
            return Err(parse_err(no, format!("expected 7 columns, found {}", fields.len())));
        }
        let id: usize = fields[0]
            .parse()
            .map_err(|_| parse_err(no, format!("non-numeric customer id {:?}", fields[0])))?;
        let v = fields[1..]
            .iter()
            .map(|f| parse_num(f, no))
            .collect::<Result<Vec<_>, _>>()?;
        let node = Node {
            id,
            x: v[0],
            y: v[1],
            demand: v[2],
            tw_start: v[3],
            tw_end: v[4],
            service: v[5],
        };
        if node.tw_end < node.tw_start {
            return Err(parse_err(
                no,
                format!("node {id}: due date {} precedes ready time {}", node.tw_end, node.tw_start),
            ));
        }
        if rows.iter().any(|(_, n)| n.id == id) {
            return Err(parse_err(no, format!("duplicate customer id {id}")));
        }
        rows.push((no, node));
    }

    match rows.first() {
        None => return Err(parse_err(0, "missing depot row")),
        Some((no, n)) if n.id != 0 => {
            return Err(parse_err(*no, format!("missing depot row: first row has id {}", n.id)))
        }
        _ => {}
    }
    let mut nodes: Vec<Node> = Vec::with_capacity(rows.len());
    for (pos, (no, node)) in rows.into_iter().enumerate() {
        if node.id != pos {
            return Err(parse_err(no, format!("expected id {pos}, found {}", node.id)));
        }
        nodes.push(node);
    }

    let built = match travel_rows {
        None => Instance::new(name, nodes, capacity, max_vehicles),
        Some(rows) => {
            if rows.len() != nodes.len() {
                let line = rows.last().map(|(l, _)| *l).unwrap_or(0);
                return Err(parse_err(line, format!("TRAVEL section needs {} rows", nodes.len())));
            }
            let matrix = rows.into_iter().map(|(_, r)| r).collect();
            Instance::with_travel_matrix(name, nodes, capacity, max_vehicles, matrix)
        }
    };
    built.map_err(|e| match e {
        InstanceError::Invalid(msg) => parse_err(0, msg),
        other => other,
    })
}

fn parse_num(field: &str, line: usize) -> Result<f64, InstanceError> {
    field
        .parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| parse_err(line, format!("non-numeric field {field:?}")))
}

pub fn read_solomon(path: impl AsRef<Path>) -> Result<Instance, InstanceError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| InstanceError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_solomon(&text)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Family {
    R,
    C,
    RC,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HorizonType {
    Type1,
    Type2,
}

/// Instance sampler settings. Readable from a key-value (TOML) file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    pub n_customers: usize,
    pub family: Family,
    pub horizon_type: HorizonType,
    /// Fraction of customers with a finite time window.
    pub tw_fraction: f64,
    #[serde(default)]
    pub seed: u64,
    /// Neighborhood size; defaults to [`DEFAULT_NEIGHBORS`].
    #[serde(default)]
    pub k: Option<usize>,
    /// Vehicle limit; defaults to one vehicle per customer.
    #[serde(default)]
    pub max_vehicles: Option<usize>,
}

impl SamplerConfig {
    pub fn new(n_customers: usize, family: Family, horizon_type: HorizonType, tw_fraction: f64, seed: u64) -> Self {
        SamplerConfig {
            n_customers,
            family,
            horizon_type,
            tw_fraction,
            seed,
            k: None,
            max_vehicles: None,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, InstanceError> {
        toml::from_str(text).map_err(|e| InstanceError::Config(e.to_string()))
    }
}

const GRID: f64 = 100.0;

/// Draws a random instance. Coordinates live on a 100x100 grid with the depot
/// at the center. Family `R` scatters customers uniformly, `C` around a few
/// cluster centers, `RC` mixes both halves. `Type1` has a short horizon and a
/// tight capacity, `Type2` a long horizon and a large capacity. Every
/// customer can be served by a dedicated vehicle.
pub fn sample_instance(cfg: &SamplerConfig) -> Result<Instance, InstanceError> {
    let n = cfg.n_customers;
    if n < 1 {
        return Err(InstanceError::Config("n_customers must be at least 1".into()));
    }
    if !(0.0..=1.0).contains(&cfg.tw_fraction) {
        return Err(InstanceError::Config(format!(
            "tw_fraction must lie in [0, 1], got {}",
            cfg.tw_fraction
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (horizon, capacity, width_range) = match cfg.horizon_type {
        HorizonType::Type1 => (230.0, 200.0, (10.0, 60.0)),
        HorizonType::Type2 => (1000.0, 1000.0, (30.0, 240.0)),
    };
    let service = 10.0;
    let depot = (GRID / 2.0, GRID / 2.0);

    let n_clustered = match cfg.family {
        Family::R => 0,
        Family::C => n,
        Family::RC => n / 2,
    };
    let n_centers = ((n as f64 / 10.0).ceil() as usize).clamp(1, 8);
    let centers: Vec<(f64, f64)> = (0..n_centers)
        .map(|_| (rng.gen_range(10.0..GRID - 10.0), rng.gen_range(10.0..GRID - 10.0)))
        .collect();
    let spread = Normal::new(0.0, 6.0).expect("valid normal");

    let mut coords = Vec::with_capacity(n);
    for c in 0..n {
        let (x, y) = if c < n_clustered {
            let (cx, cy) = centers[rng.gen_range(0..n_centers)];
            (
                (cx + spread.sample(&mut rng)).clamp(0.0, GRID),
                (cy + spread.sample(&mut rng)).clamp(0.0, GRID),
            )
        } else {
            (rng.gen_range(0.0..=GRID), rng.gen_range(0.0..=GRID))
        };
        coords.push(((x * 10.0).round() / 10.0, (y * 10.0).round() / 10.0));
    }

    let n_windowed = (cfg.tw_fraction * n as f64).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let windowed: BTreeSet<usize> = order[..n_windowed].iter().copied().collect();

    let mut nodes = vec![Node {
        id: 0,
        x: depot.0,
        y: depot.1,
        demand: 0.0,
        tw_start: 0.0,
        tw_end: horizon,
        service: 0.0,
    }];
    for (c, &(x, y)) in coords.iter().enumerate() {
        let demand = rng.gen_range(1..=30) as f64;
        let dist = (x - depot.0).hypot(y - depot.1);
        let (tw_start, tw_end) = if windowed.contains(&c) {
            // Any service start in [dist, latest] keeps a dedicated route feasible.
            let latest = (horizon - dist - service).floor();
            let earliest = dist.ceil().min(latest);
            let center = rng.gen_range(earliest..=latest);
            let width = rng.gen_range(width_range.0..=width_range.1);
            let start = (center - width / 2.0).max(0.0).round();
            let end = (center + width / 2.0).min(latest).round().max(earliest);
            (start.min(end), end)
        } else {
            (0.0, horizon)
        };
        nodes.push(Node {
            id: c + 1,
            x,
            y,
            demand,
            tw_start,
            tw_end,
            service,
        });
    }
    let name = format!(
        "{:?}{}-n{}-tw{}-s{}",
        cfg.family,
        match cfg.horizon_type {
            HorizonType::Type1 => 1,
            HorizonType::Type2 => 2,
        },
        n,
        cfg.tw_fraction,
        cfg.seed
    );
    let inst = Instance::new(name, nodes, capacity, cfg.max_vehicles.unwrap_or(n))?;
    Ok(inst.build_neighborhoods(cfg.k.unwrap_or(DEFAULT_NEIGHBORS)))
}
