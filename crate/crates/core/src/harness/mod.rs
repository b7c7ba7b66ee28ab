//! Run configuration, solving and reporting, training runs, the exact
//! oracle and the `vrptw` command line.

pub mod cli;
pub mod exact;
pub mod train;

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::construct::{DistanceGreedy, Scorer};
use crate::gls::GlsConfig;
use crate::instance::{read_solomon, sample_instance, Instance, InstanceError, SamplerConfig};
use crate::lns::{run_with_log, IterationRecord, LnsConfig, LnsError, StopReason};
use crate::neural::{load_checkpoint, NeuralError, NeuralScorer};
use crate::solution::{check_solution, Solution, SolutionError, Violation};

pub use exact::{exact_solve, ExactError, ExactSolution, EXACT_MAX_CUSTOMERS};
pub use train::{train, Modality, TrainRunConfig, TwRegime};

/// Penalization rounds per local search call in reproducible mode when the
/// config sets none.
pub const REPRODUCIBLE_GLS_ROUNDS: usize = 30;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Instance(#[from] InstanceError),
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error(transparent)]
    Search(#[from] LnsError),
    #[error(transparent)]
    Solution(#[from] SolutionError),
    #[error(transparent)]
    Exact(#[from] ExactError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl HarnessError {
    /// 2 for anything the caller got wrong (flags, config, unreadable or
    /// malformed inputs), 1 for failures while solving or training.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Usage(_) | HarnessError::Io { .. } => 2,
            HarnessError::Instance(e) => match e {
                InstanceError::Invalid(_) => 1,
                _ => 2,
            },
            HarnessError::Neural(e) => match e {
                NeuralError::Config(_) | NeuralError::Shape(_) | NeuralError::Format(_) | NeuralError::Io { .. } => 2,
                _ => 1,
            },
            HarnessError::Search(e) => match e {
                LnsError::Config(_) | LnsError::LocalSearch(crate::gls::GlsError::Config(_)) => 2,
                _ => 1,
            },
            HarnessError::Solution(SolutionError::Format { .. }) => 2,
            HarnessError::Solution(_) | HarnessError::Exact(_) => 1,
        }
    }
}

pub(crate) fn io_err(path: &Path, source: std::io::Error) -> HarnessError {
    HarnessError::Io { path: path.display().to_string(), source }
}

pub(crate) fn read_text(path: &Path) -> Result<String, HarnessError> {
    fs::read_to_string(path).map_err(|e| io_err(path, e))
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<(), HarnessError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    fs::write(path, text).map_err(|e| io_err(path, e))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ScorerChoice {
    /// Nearest feasible customer.
    #[default]
    Greedy,
    /// Trained policy from a checkpoint.
    Neural,
}

/// One solve run. Readable from TOML; command-line flags override the file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Solomon-format instance file.
    pub instance: Option<PathBuf>,
    /// Draw the instance instead of reading one.
    pub sampler: Option<SamplerConfig>,
    pub scorer: ScorerChoice,
    pub checkpoint: Option<PathBuf>,
    /// Solution file (route per line).
    pub out: Option<PathBuf>,
    /// JSON report; stdout when unset.
    pub report: Option<PathBuf>,
    pub reference_cost: Option<f64>,
    /// Overrides `lns.seed`.
    pub seed: u64,
    /// Per-call local search budget in seconds.
    pub gls_time_limit: Option<f64>,
    /// Per-call local search round cap.
    pub gls_rounds: Option<usize>,
    /// No wall-clock limits and no timings in the report, so equal inputs
    /// give byte-identical outputs. Needs an iteration or stagnation cap.
    pub reproducible: bool,
    pub lns: LnsConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        toml::from_str(text).map_err(|e| HarnessError::Usage(format!("bad config file: {e}")))
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        match (&self.instance, &self.sampler) {
            (Some(_), Some(_)) => return Err(HarnessError::Usage("give either an instance file or a sampler, not both".into())),
            (None, None) => return Err(HarnessError::Usage("no instance: give an instance file or a sampler".into())),
            _ => {}
        }
        if self.scorer == ScorerChoice::Neural && self.checkpoint.is_none() {
            return Err(HarnessError::Usage("the neural scorer needs a checkpoint".into()));
        }
        if self.reproducible && self.lns.max_iterations.is_none() && self.lns.stagnation.is_none() {
            return Err(HarnessError::Usage("reproducible mode needs an iteration or stagnation cap".into()));
        }
        if let Some(r) = self.reference_cost {
            if !(r > 0.0 && r.is_finite()) {
                return Err(HarnessError::Usage(format!("reference cost must be positive, got {r}")));
            }
        }
        self.lns.validate().map_err(|e| HarnessError::Usage(e.to_string()))
    }

    pub fn load_instance(&self) -> Result<Instance, HarnessError> {
        match (&self.instance, &self.sampler) {
            (Some(path), None) => {
                if !path.is_file() {
                    return Err(HarnessError::Usage(format!("instance file {} not found", path.display())));
                }
                Ok(read_solomon(path)?)
            }
            (None, Some(s)) => Ok(sample_instance(s)?),
            _ => Err(HarnessError::Usage("exactly one instance source is required".into())),
        }
    }

    pub fn load_scorer(&self) -> Result<Box<dyn Scorer>, HarnessError> {
        match self.scorer {
            ScorerChoice::Greedy => Ok(Box::new(DistanceGreedy)),
            ScorerChoice::Neural => {
                let path = self.checkpoint.as_ref().ok_or_else(|| HarnessError::Usage("missing checkpoint".into()))?;
                Ok(Box::new(NeuralScorer::new(load_checkpoint(path)?)))
            }
        }
    }

    /// The search settings actually used on `inst`.
    pub fn effective_lns(&self, inst: &Instance) -> LnsConfig {
        let mut lns = self.lns.clone();
        lns.seed = self.seed;
        let mut gls = lns.gls.take().unwrap_or_else(|| GlsConfig::for_size(inst.n_customers()));
        if let Some(t) = self.gls_time_limit {
            gls.time_limit = Some(t);
        }
        if let Some(r) = self.gls_rounds {
            gls.max_rounds = Some(r);
        }
        if self.reproducible {
            lns.time_limit = None;
            gls.time_limit = None;
            gls.max_rounds.get_or_insert(REPRODUCIBLE_GLS_ROUNDS);
        }
        lns.gls = Some(gls);
        lns
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub iteration: usize,
    pub best_cost: f64,
    pub population_costs: Vec<f64>,
    pub selected: usize,
    pub diversified: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub elapsed: Option<f64>,
}

impl TraceEntry {
    fn new(r: &IterationRecord, timed: bool) -> Self {
        TraceEntry {
            iteration: r.iteration,
            best_cost: r.best_cost,
            population_costs: r.population_costs.clone(),
            selected: r.selected,
            diversified: r.diversified,
            elapsed: timed.then_some(r.elapsed),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub instance: String,
    pub scorer: ScorerChoice,
    pub seed: u64,
    /// Total distance of the best solution.
    pub cost: f64,
    /// Distance plus the excess-vehicle penalty.
    pub objective: f64,
    pub vehicles: usize,
    pub max_vehicles: usize,
    /// As reported by `check_solution`.
    pub feasible: bool,
    pub violations: Vec<Violation>,
    pub iterations: usize,
    pub stop: StopReason,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wall_time: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reference_cost: Option<f64>,
    /// `(cost - reference) / reference`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gap: Option<f64>,
    pub trace: Vec<TraceEntry>,
}

impl Report {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("reports serialize");
        s.push('\n');
        s
    }
}

#[derive(Debug, Clone)]
pub struct SolveOutcome {
    pub report: Report,
    pub solution: Solution,
}

/// Runs the search on an already loaded instance and validates the result.
pub fn solve_instance(inst: &Instance, scorer: &dyn Scorer, cfg: &RunConfig) -> Result<SolveOutcome, HarnessError> {
    let lns = cfg.effective_lns(inst);
    let start = Instant::now();
    let result = run_with_log(inst, scorer, &lns, &mut |_| {})?;
    let wall = start.elapsed().as_secs_f64();
    let check = check_solution(inst, &result.best);
    let timed = !cfg.reproducible;
    let report = Report {
        instance: inst.name.clone(),
        scorer: cfg.scorer,
        seed: cfg.seed,
        cost: check.total_distance,
        objective: check.penalized(inst.max_vehicles()),
        vehicles: check.n_vehicles,
        max_vehicles: inst.max_vehicles(),
        feasible: check.feasible,
        violations: check.violations,
        iterations: result.trace.last().map_or(0, |r| r.iteration),
        stop: result.stop,
        wall_time: timed.then_some(wall),
        reference_cost: cfg.reference_cost,
        gap: cfg.reference_cost.map(|r| (check.total_distance - r) / r),
        trace: result.trace.iter().map(|r| TraceEntry::new(r, timed)).collect(),
    };
    Ok(SolveOutcome { report, solution: result.best })
}

/// Loads instance and scorer from `cfg`, solves, and writes the solution
/// and report files it names.
pub fn solve(cfg: &RunConfig) -> Result<SolveOutcome, HarnessError> {
    cfg.validate()?;
    let inst = cfg.load_instance()?;
    let scorer = cfg.load_scorer()?;
    let out = solve_instance(&inst, scorer.as_ref(), cfg)?;
    if let Some(path) = &cfg.out {
        write_text(path, &out.solution.to_text())?;
    }
    if let Some(path) = &cfg.report {
        write_text(path, &out.report.to_json())?;
    }
    Ok(out)
}

/// Reads `NAME cost` lines; `#` starts a comment.
pub fn parse_references(text: &str) -> Result<Vec<(String, f64)>, HarnessError> {
    let mut out = Vec::new();
    for (no, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let mut f = line.split_whitespace();
        let (Some(name), Some(cost), None) = (f.next(), f.next(), f.next()) else {
            return Err(HarnessError::Usage(format!("references line {}: expected `NAME cost`", no + 1)));
        };
        let cost: f64 = cost
            .parse()
            .map_err(|_| HarnessError::Usage(format!("references line {}: bad cost {cost:?}", no + 1)))?;
        out.push((name.to_string(), cost));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instance::{Family, HorizonType};

    fn sampled(n: usize, seed: u64) -> RunConfig {
        let mut cfg = RunConfig {
            sampler: Some(SamplerConfig::new(n, Family::R, HorizonType::Type1, 0.5, seed)),
            reproducible: true,
            ..RunConfig::default()
        };
        cfg.lns.max_iterations = Some(3);
        cfg.lns.m_init = 6;
        cfg
    }

    #[test]
    fn exactly_one_instance_source() {
        let mut cfg = sampled(5, 1);
        cfg.instance = Some("x.txt".into());
        assert!(matches!(cfg.validate(), Err(HarnessError::Usage(_))));
        cfg.instance = None;
        cfg.sampler = None;
        assert!(matches!(cfg.validate(), Err(HarnessError::Usage(_))));
    }

    #[test]
    fn reproducible_needs_a_cap() {
        let mut cfg = sampled(5, 1);
        cfg.lns.max_iterations = None;
        assert_eq!(cfg.validate().unwrap_err().exit_code(), 2);
    }

    #[test]
    fn missing_instance_file_is_a_usage_error() {
        let cfg = RunConfig { instance: Some("/nonexistent/r101.txt".into()), ..RunConfig::default() };
        let e = solve(&cfg).unwrap_err();
        assert_eq!(e.exit_code(), 2, "{e}");
    }

    #[test]
    fn report_is_validated_and_untimed_when_reproducible() {
        let out = solve(&sampled(8, 3)).unwrap();
        assert!(out.report.feasible);
        assert!(check_solution(&sample_instance(&sampled(8, 3).sampler.unwrap()).unwrap(), &out.solution).feasible);
        assert!(out.report.wall_time.is_none());
        assert!(out.report.trace.iter().all(|t| t.elapsed.is_none()));
        assert!(!out.report.to_json().contains("elapsed"));
        assert_eq!(solve(&sampled(8, 3)).unwrap().report, out.report);
    }

    #[test]
    fn gap_is_relative_to_the_reference() {
        let mut cfg = sampled(6, 2);
        cfg.reference_cost = Some(100.0);
        let r = solve(&cfg).unwrap().report;
        assert!((r.gap.unwrap() - (r.cost - 100.0) / 100.0).abs() < 1e-15);
    }

    #[test]
    fn config_file_round_trip() {
        let text = r#"
            seed = 9
            scorer = "greedy"
            reproducible = true
            gls_rounds = 5
            [sampler]
            n_customers = 7
            family = "RC"
            horizon_type = "type2"
            tw_fraction = 0.8
            [lns]
            m_init = 8
            max_iterations = 2
        "#;
        let cfg = RunConfig::from_toml(text).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.lns.m_init, 8);
        assert_eq!(cfg.sampler.as_ref().unwrap().n_customers, 7);
        let inst = cfg.load_instance().unwrap();
        let lns = cfg.effective_lns(&inst);
        assert_eq!(lns.seed, 9);
        assert_eq!(lns.time_limit, None);
        assert_eq!(lns.gls.as_ref().unwrap().max_rounds, Some(5));
        assert!(RunConfig::from_toml("bogus = 1").is_err());
    }

    #[test]
    fn references_parse() {
        let r = parse_references("# best known\nR101 1650.80\nC101  828.94 # note\n").unwrap();
        assert_eq!(r, vec![("R101".to_string(), 1650.80), ("C101".to_string(), 828.94)]);
        assert!(parse_references("R101").is_err());
    }
}
