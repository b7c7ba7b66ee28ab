//! Exhaustive solver for tiny instances. Used as a test oracle.

use std::cmp::Ordering;

use thiserror::Error;

use crate::instance::Instance;
use crate::solution::{route_distance, Solution};

/// Largest customer count `exact_solve` accepts.
pub const EXACT_MAX_CUSTOMERS: usize = 8;

/// Two totals closer than this count as a tie.
const TIE: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum ExactError {
    #[error("exact search is limited to {EXACT_MAX_CUSTOMERS} customers, got {0}")]
    TooLarge(usize),
    #[error("no feasible solution with at most {0} vehicles")]
    Infeasible(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExactSolution {
    pub solution: Solution,
    pub distance: f64,
}

/// Capacity and time-window check of a closed route, written out
/// independently of the `solution` module.
fn route_ok(inst: &Instance, seq: &[usize]) -> bool {
    let mut load = 0.0;
    let mut t = 0.0;
    let mut prev = 0;
    for &c in seq {
        let n = inst.node(c);
        load += n.demand;
        if load > inst.capacity() + 1e-9 {
            return false;
        }
        t = f64::max(t + inst.travel(prev, c), n.tw_start);
        if t > n.tw_end + 1e-9 {
            return false;
        }
        t += n.service;
        prev = c;
    }
    t + inst.travel(prev, 0) <= inst.depot().tw_end + 1e-9
}

/// Cheapest feasible order of one block of customers; ties go to the
/// lexicographically smallest sequence. `None` when no order is feasible.
fn best_order(inst: &Instance, block: &[usize]) -> Option<(f64, Vec<usize>)> {
    let mut best: Option<(f64, Vec<usize>)> = None;
    let mut seq = Vec::with_capacity(block.len());
    let mut used = vec![false; block.len()];
    permute(inst, block, &mut seq, &mut used, &mut best);
    best
}

fn permute(
    inst: &Instance,
    block: &[usize],
    seq: &mut Vec<usize>,
    used: &mut [bool],
    best: &mut Option<(f64, Vec<usize>)>,
) {
    // Any prefix that breaks a window or the capacity stays broken.
    if !prefix_ok(inst, seq) {
        return;
    }
    if seq.len() == block.len() {
        if !route_ok(inst, seq) {
            return;
        }
        let d = route_distance(inst, seq);
        let better = match best {
            None => true,
            Some((bd, bs)) => d < *bd - TIE || (d <= *bd + TIE && seq.as_slice() < bs.as_slice()),
        };
        if better {
            *best = Some((d, seq.clone()));
        }
        return;
    }
    for i in 0..block.len() {
        if used[i] {
            continue;
        }
        used[i] = true;
        seq.push(block[i]);
        permute(inst, block, seq, used, best);
        seq.pop();
        used[i] = false;
    }
}

fn prefix_ok(inst: &Instance, seq: &[usize]) -> bool {
    let mut load = 0.0;
    let mut t = 0.0;
    let mut prev = 0;
    for &c in seq {
        let n = inst.node(c);
        load += n.demand;
        t = f64::max(t + inst.travel(prev, c), n.tw_start);
        if load > inst.capacity() + 1e-9 || t > n.tw_end + 1e-9 {
            return false;
        }
        t += n.service;
        prev = c;
    }
    true
}

/// Lexicographic order of route lists, each list sorted by its routes.
fn encoding_cmp(a: &[Vec<usize>], b: &[Vec<usize>]) -> Ordering {
    a.cmp(b)
}

/// Optimal solution by enumerating every set partition of the customers
/// into at most K blocks and every order inside each block. Minimizes total
/// distance; equal totals go to the smallest sorted route list.
pub fn exact_solve(inst: &Instance) -> Result<ExactSolution, ExactError> {
    let n = inst.n_customers();
    if n > EXACT_MAX_CUSTOMERS {
        return Err(ExactError::TooLarge(n));
    }
    let k = inst.max_vehicles();
    if n == 0 {
        return Ok(ExactSolution { solution: Solution::from_routes(vec![]), distance: 0.0 });
    }
    // Best order per subset, indexed by bitmask over customers 1..=n.
    let full = (1usize << n) - 1;
    let mut per_mask: Vec<Option<(f64, Vec<usize>)>> = vec![None; full + 1];
    for (mask, slot) in per_mask.iter_mut().enumerate().skip(1) {
        let block: Vec<usize> = (0..n).filter(|b| mask >> b & 1 == 1).map(|b| b + 1).collect();
        *slot = best_order(inst, &block);
    }

    let mut best: Option<(f64, Vec<Vec<usize>>)> = None;
    let mut blocks = Vec::new();
    partitions(full, k, &per_mask, &mut blocks, &mut best);
    let (distance, routes) = best.ok_or(ExactError::Infeasible(k))?;
    Ok(ExactSolution { solution: Solution::from_routes(routes), distance })
}

/// Set partitions of `rest`: the block holding the lowest remaining
/// customer is chosen first, so each partition is visited once.
fn partitions(
    rest: usize,
    k: usize,
    per_mask: &[Option<(f64, Vec<usize>)>],
    blocks: &mut Vec<usize>,
    best: &mut Option<(f64, Vec<Vec<usize>>)>,
) {
    if rest == 0 {
        let mut d = 0.0;
        let mut routes = Vec::with_capacity(blocks.len());
        for &b in blocks.iter() {
            let (bd, seq) = per_mask[b].as_ref().expect("blocks are feasible");
            d += bd;
            routes.push(seq.clone());
        }
        routes.sort();
        let better = match best {
            None => true,
            Some((bd, br)) => d < *bd - TIE || (d <= *bd + TIE && encoding_cmp(&routes, br) == Ordering::Less),
        };
        if better {
            *best = Some((d, routes));
        }
        return;
    }
    if blocks.len() == k {
        return;
    }
    let low = rest & rest.wrapping_neg();
    let others = rest & !low;
    // Enumerate every subset of `others` joined with `low`.
    let mut sub = others;
    loop {
        let block = sub | low;
        if per_mask[block].is_some() {
            blocks.push(block);
            partitions(rest & !block, k, per_mask, blocks, best);
            blocks.pop();
        }
        if sub == 0 {
            break;
        }
        sub = (sub - 1) & others;
    }
}
