//! Population-based large neighborhood search: construct, select, improve,
//! destroy, repair.

use std::time::Instant;

use log::{debug, info};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::construct::{child_rng, pomo_rollouts, reconstruct, ConstructError, DecodeMode, Scorer, DEFAULT_KAPPA};
use crate::destroy::{destruct_population, DestroyConfig, DestroyError};
use crate::gls::{local_search, GlsConfig, GlsError};
use crate::instance::Instance;
use crate::solution::{objective, solution_similarity, Solution};

#[derive(Debug, Error)]
pub enum LnsError {
    #[error("invalid search config: {0}")]
    Config(String),
    #[error(transparent)]
    Construct(#[from] ConstructError),
    #[error(transparent)]
    Destroy(#[from] DestroyError),
    #[error(transparent)]
    LocalSearch(#[from] GlsError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LnsConfig {
    pub m_init: usize,
    pub m_best: usize,
    pub m_dissimilar: usize,
    pub kappa: usize,
    /// Seconds.
    pub time_limit: Option<f64>,
    pub max_iterations: Option<usize>,
    /// Stop after this many iterations without incumbent improvement.
    pub stagnation: Option<usize>,
    /// Worker threads; 1 runs everything on the calling thread.
    pub threads: usize,
    pub seed: u64,
    /// Seed free slots with sampled early-window starts when repairing.
    pub sample_starts: bool,
    /// Local search settings; `None` uses the size-based defaults.
    pub gls: Option<GlsConfig>,
    pub destroy: DestroyConfig,
}

impl Default for LnsConfig {
    fn default() -> Self {
        LnsConfig {
            m_init: 16,
            m_best: 3,
            m_dissimilar: 1,
            kappa: DEFAULT_KAPPA,
            time_limit: Some(60.0),
            max_iterations: None,
            stagnation: None,
            threads: 1,
            seed: 0,
            sample_starts: true,
            gls: None,
            destroy: DestroyConfig::default(),
        }
    }
}

impl LnsConfig {
    pub fn validate(&self) -> Result<(), LnsError> {
        let bad = |m: String| Err(LnsError::Config(m));
        if self.m_init == 0 || self.m_best == 0 || self.kappa == 0 || self.threads == 0 {
            return bad("m_init, m_best, kappa and threads must be positive".into());
        }
        if self.m_best + self.m_dissimilar > self.m_init {
            return bad(format!(
                "m_best + m_dissimilar = {} exceeds m_init = {}",
                self.m_best + self.m_dissimilar,
                self.m_init
            ));
        }
        if self.time_limit.is_none() && self.max_iterations.is_none() && self.stagnation.is_none() {
            return bad("no stop criterion: set time_limit, max_iterations or stagnation".into());
        }
        if let Some(t) = self.time_limit {
            if !(t >= 0.0 && t.is_finite()) {
                return bad(format!("time_limit must be a non-negative number, got {t}"));
            }
        }
        if let Some(g) = &self.gls {
            g.validate()?;
        }
        self.destroy.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    TimeLimit,
    MaxIterations,
    Stagnation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    /// 0 is the initial construction.
    pub iteration: usize,
    pub best_cost: f64,
    /// Costs of the population after local search (the initial set for
    /// iteration 0).
    pub population_costs: Vec<f64>,
    /// |Y|.
    pub selected: usize,
    /// |Y′|.
    pub diversified: usize,
    pub elapsed: f64,
}

#[derive(Debug, Clone)]
pub struct LnsResult {
    pub best: Solution,
    pub best_cost: f64,
    pub trace: Vec<IterationRecord>,
    pub stop: StopReason,
}

/// SELECT(M, m_best, m_dissimilar): indices of the `m_best` cheapest
/// members (ties by index), then greedily the members whose minimum
/// dissimilarity `1 - similarity` to everything selected so far is largest.
/// Exact duplicates of selected members are skipped while other candidates
/// remain.
pub fn select(m: &[Solution], costs: &[f64], m_best: usize, m_dissimilar: usize) -> Result<Vec<usize>, LnsError> {
    if m.len() < m_best + m_dissimilar {
        return Err(LnsError::Config(format!(
            "population of {} is smaller than m_best + m_dissimilar = {}",
            m.len(),
            m_best + m_dissimilar
        )));
    }
    let mut order: Vec<usize> = (0..m.len()).collect();
    order.sort_by(|&a, &b| costs[a].total_cmp(&costs[b]).then(a.cmp(&b)));
    let mut chosen: Vec<usize> = order[..m_best].to_vec();
    let mut rest: Vec<usize> = order[m_best..].to_vec();
    rest.sort_unstable();
    // min dissimilarity of each remaining candidate to the chosen set
    let mut min_dis: Vec<f64> = rest
        .iter()
        .map(|&c| chosen.iter().map(|&s| 1.0 - solution_similarity(&m[c], &m[s])).fold(f64::INFINITY, f64::min))
        .collect();
    for _ in 0..m_dissimilar {
        let duplicate = |c: usize| chosen.iter().any(|&s| m[c].same_as(&m[s]));
        let pick_from = |allow_dup: bool| {
            let mut best: Option<usize> = None;
            for (k, &c) in rest.iter().enumerate() {
                if !allow_dup && duplicate(c) {
                    continue;
                }
                if best.is_none_or(|b| min_dis[k] > min_dis[b]) {
                    best = Some(k);
                }
            }
            best
        };
        let k = pick_from(false).or_else(|| pick_from(true)).expect("enough candidates");
        let c = rest.remove(k);
        min_dis.remove(k);
        for (kk, &r) in rest.iter().enumerate() {
            min_dis[kk] = min_dis[kk].min(1.0 - solution_similarity(&m[r], &m[c]));
        }
        chosen.push(c);
    }
    Ok(chosen)
}

/// Index of the cheapest entry, first on ties.
pub fn get_best(costs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &c) in costs.iter().enumerate() {
        if c < costs[best] {
            best = i;
        }
    }
    best
}

/// Replaces the most expensive member (last on ties) with `y`.
pub fn replace_worst(y: &mut [Solution], costs: &mut [f64], incumbent: &Solution, incumbent_cost: f64) {
    let mut worst = 0;
    for (i, &c) in costs.iter().enumerate() {
        if c >= costs[worst] {
            worst = i;
        }
    }
    y[worst] = incumbent.clone();
    costs[worst] = incumbent_cost;
}

fn map_members<T, F>(threads: usize, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    if threads <= 1 {
        return (0..n).map(f).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().expect("thread pool");
    pool.install(|| (0..n).into_par_iter().map(&f).collect())
}

/// Runs the search and calls `on_iteration` after the initial construction
/// and after every iteration.
pub fn run_with_log(
    inst: &Instance,
    scorer: &dyn Scorer,
    cfg: &LnsConfig,
    on_iteration: &mut dyn FnMut(&IterationRecord),
) -> Result<LnsResult, LnsError> {
    cfg.validate()?;
    let start = Instant::now();
    let elapsed = || start.elapsed().as_secs_f64();
    let out_of_time = || cfg.time_limit.is_some_and(|t| elapsed() >= t);
    let kappa = cfg.kappa.min(inst.n_customers()).max(1);
    let gls_base = cfg.gls.clone().unwrap_or_else(|| GlsConfig::for_size(inst.n_customers()));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut m = if cfg.threads <= 1 {
        pomo_rollouts(inst, scorer, cfg.m_init, kappa, &mut rng)?
    } else {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(cfg.threads).build().expect("thread pool");
        pool.install(|| crate::construct::pomo_rollouts_par(inst, scorer, cfg.m_init, kappa, &mut rng))?
    };
    let mut m_costs: Vec<f64> = m.iter().map(|s| objective(inst, s)).collect();
    let b = get_best(&m_costs);
    let mut best = m[b].clone();
    let mut best_cost = m_costs[b];
    let mut trace = vec![IterationRecord {
        iteration: 0,
        best_cost,
        population_costs: m_costs.clone(),
        selected: 0,
        diversified: m.len(),
        elapsed: elapsed(),
    }];
    on_iteration(&trace[0]);
    info!("initial best {best_cost:.3}");

    let mut since_improvement = 0;
    let mut iteration = 0;
    let stop = loop {
        if out_of_time() {
            break StopReason::TimeLimit;
        }
        if cfg.max_iterations.is_some_and(|k| iteration >= k) {
            break StopReason::MaxIterations;
        }
        if cfg.stagnation.is_some_and(|s| since_improvement >= s) {
            break StopReason::Stagnation;
        }
        iteration += 1;

        let sel = select(&m, &m_costs, cfg.m_best, cfg.m_dissimilar)?;
        // Each call is clamped to the search time left when it starts.
        let gls_cfg = || match cfg.time_limit {
            Some(t) => {
                let remaining = (t - elapsed()).max(0.0);
                GlsConfig { time_limit: Some(gls_base.time_limit.map_or(remaining, |g| g.min(remaining))), ..gls_base.clone() }
            }
            None => gls_base.clone(),
        };
        let improved: Vec<Result<Solution, GlsError>> =
            map_members(cfg.threads, sel.len(), |k| local_search(inst, &m[sel[k]], &gls_cfg()).map(|(s, _)| s));
        let mut y: Vec<Solution> = improved.into_iter().collect::<Result<_, _>>()?;
        let mut y_costs: Vec<f64> = y.iter().map(|s| objective(inst, s)).collect();

        let yb = get_best(&y_costs);
        if y_costs[yb] < best_cost {
            best = y[yb].clone();
            best_cost = y_costs[yb];
            since_improvement = 0;
            debug!("iteration {iteration}: new best {best_cost:.3}");
        } else {
            since_improvement += 1;
            if !y.iter().any(|s| s.same_as(&best)) {
                replace_worst(&mut y, &mut y_costs, &best, best_cost);
            }
        }
        assert_eq!(y.len(), cfg.m_best + cfg.m_dissimilar, "|Y| must equal m_best + m_dissimilar");

        let y_prime = destruct_population(inst, &y, cfg.m_init, kappa, &cfg.destroy, &mut rng)?;
        assert_eq!(y_prime.len(), cfg.m_init, "|Y'| must equal m_init");
        let base = rng.next_u64();
        let repaired: Vec<Result<Solution, ConstructError>> = map_members(cfg.threads, y_prime.len(), |j| {
            let mut r = child_rng(base, j as u64);
            reconstruct(inst, scorer, &y_prime[j], DecodeMode::Greedy, kappa, cfg.sample_starts, &mut r)
        });
        m = repaired.into_iter().collect::<Result<_, _>>()?;
        m_costs = m.iter().map(|s| objective(inst, s)).collect();

        let rec = IterationRecord {
            iteration,
            best_cost,
            population_costs: y_costs,
            selected: y.len(),
            diversified: y_prime.len(),
            elapsed: elapsed(),
        };
        on_iteration(&rec);
        trace.push(rec);
    };
    // The repaired set of the last iteration may hold a better solution.
    let mb = get_best(&m_costs);
    if m_costs[mb] < best_cost {
        best = m[mb].clone();
        best_cost = m_costs[mb];
        if let Some(last) = trace.last_mut() {
            last.best_cost = best_cost;
        }
    }
    info!("stopped after {iteration} iterations ({stop:?}), best {best_cost:.3}");
    Ok(LnsResult { best, best_cost, trace, stop })
}

pub fn run(inst: &Instance, scorer: &dyn Scorer, cfg: &LnsConfig) -> Result<LnsResult, LnsError> {
    run_with_log(inst, scorer, cfg, &mut |_| {})
}
