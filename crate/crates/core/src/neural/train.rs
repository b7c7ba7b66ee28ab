//! REINFORCE with the POMO mean baseline.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::model::{static_on_tape, step_on_tape, Layout, Parameters, StaticInputs};
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use super::NeuralError;
use crate::construct::{child_rng, sample_index, start_nodes_pomo, Action, ConstructError, ConstructionState};
use crate::instance::Instance;
use crate::solution::objective;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub n_pomo: usize,
    pub kappa: usize,
    /// Rescales the batch gradient to at most this L2 norm.
    pub max_grad_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { learning_rate: 1e-3, momentum: 0.9, n_pomo: 8, kappa: 2, max_grad_norm: Some(1.0) }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), NeuralError> {
        if self.n_pomo < 2 {
            return Err(NeuralError::Config(format!("n_pomo must be at least 2, got {}", self.n_pomo)));
        }
        if self.kappa == 0 {
            return Err(NeuralError::Config("kappa must be at least 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(NeuralError::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(NeuralError::Config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if let Some(g) = self.max_grad_norm {
            if !(g.is_finite() && g > 0.0) {
                return Err(NeuralError::Config(format!("max_grad_norm must be positive, got {g}")));
            }
        }
        Ok(())
    }
}

/// Stochastic gradient descent with momentum: `v = μ v + g`, `θ -= η v`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(params: &Parameters) -> Self {
        Sgd { velocity: params.tensors().iter().map(|t| Tensor::new(t.shape.clone(), vec![0.0; t.data.len()])).collect() }
    }

    pub fn apply(&mut self, params: &mut Parameters, grads: &[Tensor], learning_rate: f64, momentum: f64) {
        for ((p, v), g) in params.tensors_mut().iter_mut().zip(&mut self.velocity).zip(grads) {
            for ((pi, vi), gi) in p.data.iter_mut().zip(&mut v.data).zip(&g.data) {
                *vi = momentum * *vi + gi;
                *pi -= learning_rate * *vi;
            }
        }
    }
}

/// One sampled construction: start customers, then every decision that had
/// more than one option.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub starts: Vec<usize>,
    pub actions: Vec<Action>,
    pub log_probs: Vec<f64>,
    pub cost: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub loss: f64,
    /// Mean trajectory cost over the batch.
    pub mean_cost: f64,
    /// Norm of the batch gradient before clipping.
    pub grad_norm: f64,
    pub decisions: usize,
}

/// Runs one construction on the tape. `choose` gets the actions and their
/// log-probabilities and returns the index to take; forced moves (a single
/// option) bypass both the network and `choose`.
fn trajectory_on_tape<F>(
    tape: &mut Tape,
    lay: &Layout,
    inst: &Instance,
    stat: Var,
    kappa: usize,
    starts: &[usize],
    mut choose: F,
) -> Result<(TrajectoryRecord, Vec<Var>), NeuralError>
where
    F: FnMut(&[Action], &[f64]) -> Result<usize, NeuralError>,
{
    let mut state = ConstructionState::new(inst, kappa)?;
    for (slot, &c) in starts.iter().enumerate() {
        state.start_route(slot, c)?;
    }
    let bound = 4 * inst.n_customers() + kappa;
    let mut record = TrajectoryRecord { starts: starts.to_vec(), actions: Vec::new(), log_probs: Vec::new(), cost: 0.0 };
    let mut vars = Vec::new();
    loop {
        let actions = state.feasible_actions();
        if actions.is_empty() {
            break;
        }
        if actions.len() == 1 {
            state.apply_unchecked(actions[0]);
        } else {
            let logits = step_on_tape(tape, lay, &state, stat, &actions);
            let logp = tape.log_softmax(logits);
            let pick = choose(&actions, &tape.value(logp).data)?;
            let lp = tape.gather_rows(logp, vec![pick]);
            record.actions.push(actions[pick]);
            record.log_probs.push(tape.value(lp).data[0]);
            vars.push(lp);
            state.apply_unchecked(actions[pick]);
        }
        if state.step() > bound {
            return Err(ConstructError::StepBound(bound).into());
        }
    }
    record.cost = objective(inst, &state.to_solution());
    Ok((record, vars))
}

/// Loss `mean_t (c_t - b) * sum log p_t` with `b` the mean cost, built from
/// the chosen log-probability nodes of each trajectory. Descending it makes
/// trajectories cheaper than the baseline more likely.
fn pomo_loss(tape: &mut Tape, costs: &[f64], vars: &[Vec<Var>]) -> Option<Var> {
    let n = costs.len() as f64;
    let baseline = costs.iter().sum::<f64>() / n;
    let terms: Vec<(Var, f64)> = costs
        .iter()
        .zip(vars)
        .flat_map(|(&c, vs)| vs.iter().map(move |&v| (v, (c - baseline) / n)))
        .collect();
    if terms.is_empty() {
        None
    } else {
        Some(tape.weighted_sum(terms))
    }
}

fn zero_grads(params: &Parameters) -> Vec<Tensor> {
    params.tensors().iter().map(|t| Tensor::new(t.shape.clone(), vec![0.0; t.data.len()])).collect()
}

struct InstanceResult {
    loss: f64,
    grads: Vec<Tensor>,
    records: Vec<TrajectoryRecord>,
}

fn sample_instance_gradient(
    inst: &Instance,
    params: &Parameters,
    kappa: usize,
    n_pomo: usize,
    rng: &mut ChaCha8Rng,
) -> Result<InstanceResult, NeuralError> {
    let lay = Layout::new(params.config());
    let mut tape = Tape::new(params.tensors());
    let stat = static_on_tape(&mut tape, &lay, &StaticInputs::new(inst));
    let mut records = Vec::with_capacity(n_pomo);
    let mut vars = Vec::with_capacity(n_pomo);
    for _ in 0..n_pomo {
        let starts = start_nodes_pomo(inst, kappa, rng)?;
        let (rec, vs) = trajectory_on_tape(&mut tape, &lay, inst, stat, kappa, &starts, |_, logp| {
            Ok(sample_index(logp, rng))
        })?;
        records.push(rec);
        vars.push(vs);
    }
    let costs: Vec<f64> = records.iter().map(|r| r.cost).collect();
    match pomo_loss(&mut tape, &costs, &vars) {
        Some(loss) => Ok(InstanceResult { loss: tape.value(loss).data[0], grads: tape.backward(loss), records }),
        None => Ok(InstanceResult { loss: 0.0, grads: zero_grads(params), records }),
    }
}

/// Samples `n_pomo` trajectories from POMO start configurations.
pub fn sample_trajectories<R: RngCore + ?Sized>(
    inst: &Instance,
    params: &Parameters,
    kappa: usize,
    n_pomo: usize,
    rng: &mut R,
) -> Result<Vec<TrajectoryRecord>, NeuralError> {
    let mut child = ChaCha8Rng::seed_from_u64(rng.next_u64());
    Ok(sample_instance_gradient(inst, params, kappa, n_pomo, &mut child)?.records)
}

/// Loss and gradient of recorded trajectories under `params`, replaying
/// their actions. The costs stored in the records are used as given.
pub fn replay_loss_and_gradient(
    inst: &Instance,
    params: &Parameters,
    kappa: usize,
    records: &[TrajectoryRecord],
) -> Result<(f64, Vec<Tensor>), NeuralError> {
    let lay = Layout::new(params.config());
    let mut tape = Tape::new(params.tensors());
    let stat = static_on_tape(&mut tape, &lay, &StaticInputs::new(inst));
    let mut vars = Vec::with_capacity(records.len());
    for rec in records {
        let mut next = rec.actions.iter();
        let (_, vs) = trajectory_on_tape(&mut tape, &lay, inst, stat, kappa, &rec.starts, |actions, _| {
            let want = next.next().ok_or_else(|| NeuralError::Replay("trajectory ran past its record".into()))?;
            actions
                .iter()
                .position(|a| a == want)
                .ok_or_else(|| NeuralError::Replay(format!("recorded action {want:?} is not available")))
        })?;
        vars.push(vs);
    }
    let costs: Vec<f64> = records.iter().map(|r| r.cost).collect();
    match pomo_loss(&mut tape, &costs, &vars) {
        Some(loss) => Ok((tape.value(loss).data[0], tape.backward(loss))),
        None => Ok((0.0, zero_grads(params))),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub worst_parameter: String,
    pub checked: usize,
}

/// Compares the analytic gradient of the replayed loss with central
/// differences of step `h` on every parameter entry. The relative error is
/// `|a - n| / max(|a|, |n|, floor)`.
pub fn gradient_check(
    inst: &Instance,
    params: &Parameters,
    kappa: usize,
    records: &[TrajectoryRecord],
    h: f64,
    floor: f64,
) -> Result<GradCheck, NeuralError> {
    let (_, analytic) = replay_loss_and_gradient(inst, params, kappa, records)?;
    let names = params.names();
    let mut work = params.clone();
    let mut report = GradCheck { max_rel_error: 0.0, worst_parameter: String::new(), checked: 0 };
    for (ti, name) in names.iter().enumerate() {
        for k in 0..params.tensors()[ti].data.len() {
            let orig = params.tensors()[ti].data[k];
            work.tensors_mut()[ti].data[k] = orig + h;
            let (fp, _) = replay_loss_and_gradient(inst, &work, kappa, records)?;
            work.tensors_mut()[ti].data[k] = orig - h;
            let (fm, _) = replay_loss_and_gradient(inst, &work, kappa, records)?;
            work.tensors_mut()[ti].data[k] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic[ti].data[k];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst_parameter = format!("{name}[{k}]");
            }
            report.checked += 1;
        }
    }
    Ok(report)
}

fn dump(params: &Parameters, grads: &[Tensor], loss: f64) -> String {
    let mut s = format!("loss = {loss}");
    for ((name, p), g) in params.names().iter().zip(params.tensors()).zip(grads) {
        s.push_str(&format!("\n  {name}: |θ|² = {:e}, |g|² = {:e}", p.sq_norm(), g.sq_norm()));
    }
    s
}

/// One policy-gradient update on a batch of instances. Instance gradients
/// may be computed in parallel; they are summed in batch order, so the
/// result depends only on the inputs and the random stream.
pub fn reinforce_step<R: RngCore + ?Sized>(
    batch: &[Instance],
    params: &mut Parameters,
    cfg: &TrainConfig,
    opt: &mut Sgd,
    rng: &mut R,
) -> Result<StepStats, NeuralError> {
    cfg.validate()?;
    if batch.is_empty() {
        return Err(NeuralError::Config("empty training batch".into()));
    }
    let base = rng.next_u64();
    let frozen: &Parameters = params;
    let results: Vec<Result<InstanceResult, NeuralError>> = batch
        .par_iter()
        .enumerate()
        .map(|(i, inst)| {
            let mut r = child_rng(base, i as u64);
            sample_instance_gradient(inst, frozen, cfg.kappa, cfg.n_pomo, &mut r)
        })
        .collect();
    let m = batch.len() as f64;
    let mut grads = zero_grads(frozen);
    let mut loss = 0.0;
    let mut cost_sum = 0.0;
    let mut decisions = 0;
    let mut trajectories = 0;
    for r in results {
        let r = r?;
        loss += r.loss / m;
        for (g, gi) in grads.iter_mut().zip(&r.grads) {
            g.add_assign(gi);
        }
        for rec in &r.records {
            cost_sum += rec.cost;
            decisions += rec.actions.len();
            trajectories += 1;
        }
    }
    for g in &mut grads {
        g.scale(1.0 / m);
    }
    let grad_norm = grads.iter().map(Tensor::sq_norm).sum::<f64>().sqrt();
    if !loss.is_finite() || !grad_norm.is_finite() {
        return Err(NeuralError::NonFinite(dump(params, &grads, loss)));
    }
    if let Some(max) = cfg.max_grad_norm {
        if grad_norm > max {
            for g in &mut grads {
                g.scale(max / grad_norm);
            }
        }
    }
    opt.apply(params, &grads, cfg.learning_rate, cfg.momentum);
    if !params.is_finite() {
        return Err(NeuralError::NonFinite(dump(params, &grads, loss)));
    }
    Ok(StepStats { loss, mean_cost: cost_sum / trajectories as f64, grad_norm, decisions })
}
