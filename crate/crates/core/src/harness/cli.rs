//! `vrptw` subcommands: solve, train, eval, check.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;

use super::train::{train, Modality, TrainRunConfig};
use super::{parse_references, read_text, solve, solve_instance, write_text, HarnessError, RunConfig, ScorerChoice};
use crate::instance::{read_solomon, Family};
use crate::solution::{check_solution, Solution};

#[derive(Debug, Parser)]
#[command(name = "vrptw", version, about = "VRPTW solver: large neighborhood search with a learned repair policy")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve one instance.
    Solve(SolveArgs),
    /// Train a policy on sampled instances.
    Train(TrainArgs),
    /// Solve every instance in a directory and print a table.
    Eval(EvalArgs),
    /// Validate a solution file.
    Check(CheckArgs),
}

/// Search flags shared by solve and eval. Each overrides the config file.
#[derive(Debug, Args, Default)]
pub struct SearchFlags {
    /// TOML run config.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub scorer: Option<ScorerChoice>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Seconds for the whole search.
    #[arg(long)]
    pub time_limit: Option<f64>,
    /// Maximum number of search iterations.
    #[arg(long)]
    pub iters: Option<usize>,
    /// Stop after this many iterations without improvement.
    #[arg(long)]
    pub stagnation: Option<usize>,
    #[arg(long)]
    pub kappa: Option<usize>,
    #[arg(long)]
    pub m_init: Option<usize>,
    #[arg(long)]
    pub m_best: Option<usize>,
    #[arg(long)]
    pub m_dissim: Option<usize>,
    #[arg(long)]
    pub threads: Option<usize>,
    /// Seconds per local search call.
    #[arg(long)]
    pub gls_time: Option<f64>,
    /// Penalization rounds per local search call.
    #[arg(long)]
    pub gls_rounds: Option<usize>,
    /// Drop wall-clock limits and timings so reruns are byte-identical.
    #[arg(long)]
    pub reproducible: bool,
}

impl SearchFlags {
    fn run_config(&self) -> Result<RunConfig, HarnessError> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::from_toml(&read_text(path)?)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.scorer {
            cfg.scorer = s;
        }
        if let Some(p) = &self.checkpoint {
            cfg.checkpoint = Some(p.clone());
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(t) = self.time_limit {
            cfg.lns.time_limit = Some(t);
        }
        if let Some(i) = self.iters {
            cfg.lns.max_iterations = Some(i);
        }
        if let Some(s) = self.stagnation {
            cfg.lns.stagnation = Some(s);
        }
        if let Some(k) = self.kappa {
            cfg.lns.kappa = k;
        }
        if let Some(m) = self.m_init {
            cfg.lns.m_init = m;
        }
        if let Some(m) = self.m_best {
            cfg.lns.m_best = m;
        }
        if let Some(m) = self.m_dissim {
            cfg.lns.m_dissimilar = m;
        }
        if let Some(t) = self.threads {
            cfg.lns.threads = t;
        }
        if let Some(t) = self.gls_time {
            cfg.gls_time_limit = Some(t);
        }
        if let Some(r) = self.gls_rounds {
            cfg.gls_rounds = Some(r);
        }
        cfg.reproducible |= self.reproducible;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct SolveArgs {
    #[command(flatten)]
    pub search: SearchFlags,
    /// Solomon-format instance file.
    #[arg(long)]
    pub instance: Option<PathBuf>,
    /// Solution file to write.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// JSON report file; printed to stdout otherwise.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Cost to compute the gap against.
    #[arg(long)]
    pub reference_cost: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// TOML training config.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// type1|type2 and low|high windows, e.g. type1-low.
    #[arg(long)]
    pub modality: Option<Modality>,
    #[arg(long, value_parser = parse_family)]
    pub family: Option<Family>,
    #[arg(long)]
    pub customers: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub n_pomo: Option<usize>,
    #[arg(long)]
    pub kappa: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub d_emb: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub threads: Option<usize>,
    /// Checkpoint to start from.
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Checkpoint to write.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Loss and cost curve, JSON lines.
    #[arg(long)]
    pub curve: Option<PathBuf>,
}

fn parse_family(s: &str) -> Result<Family, String> {
    match s.to_ascii_uppercase().as_str() {
        "R" => Ok(Family::R),
        "C" => Ok(Family::C),
        "RC" => Ok(Family::RC),
        _ => Err(format!("unknown family {s:?}, expected R, C or RC")),
    }
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub search: SearchFlags,
    /// Directory of Solomon-format files.
    #[arg(long)]
    pub dir: PathBuf,
    /// Directory for one solution file per instance.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// JSON array of reports.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// `NAME cost` lines.
    #[arg(long)]
    pub references: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CheckArgs {
    #[arg(long)]
    pub instance: PathBuf,
    #[arg(long)]
    pub solution: PathBuf,
}

/// Parses `args` (program name first) and runs the command. Returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let result = match cli.command {
        Command::Solve(a) => cmd_solve(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Check(a) => cmd_check(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn feasible_code(feasible: bool) -> i32 {
    if feasible {
        0
    } else {
        1
    }
}

fn cmd_solve(a: SolveArgs) -> Result<i32, HarnessError> {
    let mut cfg = a.search.run_config()?;
    if let Some(p) = a.instance {
        cfg.instance = Some(p);
        cfg.sampler = None;
    }
    if let Some(p) = a.out {
        cfg.out = Some(p);
    }
    if let Some(p) = a.report {
        cfg.report = Some(p);
    }
    if let Some(r) = a.reference_cost {
        cfg.reference_cost = Some(r);
    }
    let out = solve(&cfg)?;
    if cfg.report.is_none() {
        print!("{}", out.report.to_json());
    }
    let r = &out.report;
    eprintln!("{}: cost {:.2}, {} vehicles, feasible {}", r.instance, r.cost, r.vehicles, r.feasible);
    if !r.feasible {
        for v in &r.violations {
            eprintln!("  {v}");
        }
    }
    Ok(feasible_code(r.feasible))
}

fn cmd_train(a: TrainArgs) -> Result<i32, HarnessError> {
    let mut cfg = match &a.config {
        Some(path) => TrainRunConfig::from_toml(&read_text(path)?)?,
        None => TrainRunConfig::default(),
    };
    if let Some(m) = a.modality {
        cfg.horizon_type = m.horizon;
        cfg.tw_regime = m.tw;
    }
    if a.family.is_some() {
        cfg.family = a.family;
    }
    if let Some(n) = a.customers {
        cfg.n_customers = n;
    }
    if let Some(s) = a.steps {
        cfg.steps = s;
    }
    if let Some(b) = a.batch {
        cfg.batch_size = b;
    }
    if let Some(n) = a.n_pomo {
        cfg.train.n_pomo = n;
    }
    if let Some(k) = a.kappa {
        cfg.train.kappa = k;
    }
    if let Some(lr) = a.lr {
        cfg.train.learning_rate = lr;
    }
    if let Some(d) = a.d_emb {
        cfg.model.d_emb = d;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if a.init.is_some() {
        cfg.init = a.init;
    }
    if a.out.is_some() {
        cfg.checkpoint = a.out;
    }
    if a.curve.is_some() {
        cfg.curve = a.curve;
    }
    if cfg.checkpoint.is_none() {
        return Err(HarnessError::Usage("train needs --out (or `checkpoint` in the config)".into()));
    }
    let threads = a.threads.unwrap_or(1);
    if threads == 0 {
        return Err(HarnessError::Usage("threads must be positive".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().expect("thread pool");
    let steps = cfg.steps;
    pool.install(|| {
        train(&cfg, &mut |i, s| {
            info!("step {i}: loss {:.4}, mean cost {:.2}, |g| {:.3e}", s.loss, s.mean_cost, s.grad_norm);
            if (i + 1) % 10 == 0 || i + 1 == steps {
                eprintln!("step {:>5}/{steps}  mean cost {:.3}", i + 1, s.mean_cost);
            }
        })
    })?;
    Ok(0)
}

fn instance_files(dir: &Path) -> Result<Vec<PathBuf>, HarnessError> {
    let entries = std::fs::read_dir(dir).map_err(|e| super::io_err(dir, e))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x.eq_ignore_ascii_case("txt")))
        .collect();
    files.sort();
    Ok(files)
}

fn cmd_eval(a: EvalArgs) -> Result<i32, HarnessError> {
    let base = a.search.run_config()?;
    let refs = match &a.references {
        Some(p) => parse_references(&read_text(p)?)?,
        None => Vec::new(),
    };
    let files = instance_files(&a.dir)?;
    if files.is_empty() {
        return Err(HarnessError::Usage(format!("no .txt instances in {}", a.dir.display())));
    }
    let mut reports = Vec::new();
    let mut all_feasible = true;
    let mut table = String::from("instance        cost  vehicles  feasible     reference      gap\n");
    for (i, path) in files.iter().enumerate() {
        let inst = read_solomon(path)?;
        let mut cfg = base.clone();
        cfg.instance = Some(path.clone());
        cfg.sampler = None;
        cfg.seed = base.seed.wrapping_add(i as u64);
        cfg.reference_cost = refs.iter().find(|(n, _)| n.eq_ignore_ascii_case(&inst.name)).map(|r| r.1);
        cfg.validate()?;
        let scorer = cfg.load_scorer()?;
        let out = solve_instance(&inst, scorer.as_ref(), &cfg)?;
        if let Some(dir) = &a.out {
            write_text(&dir.join(format!("{}.sol", inst.name)), &out.solution.to_text())?;
        }
        let r = out.report;
        all_feasible &= r.feasible;
        let fmt_opt = |v: Option<f64>, pct: bool| match v {
            Some(x) if pct => format!("{:>7.2}%", 100.0 * x),
            Some(x) => format!("{x:>12.2}"),
            None => format!("{:>w$}", "-", w = if pct { 8 } else { 12 }),
        };
        table.push_str(&format!(
            "{:<10} {:>10.2} {:>9} {:>9} {} {}\n",
            r.instance,
            r.cost,
            r.vehicles,
            r.feasible,
            fmt_opt(r.reference_cost, false),
            fmt_opt(r.gap, true)
        ));
        reports.push(r);
    }
    let gaps: Vec<f64> = reports.iter().filter_map(|r| r.gap).collect();
    let mean_cost = reports.iter().map(|r| r.cost).sum::<f64>() / reports.len() as f64;
    table.push_str(&format!("mean cost {mean_cost:.2} over {} instances", reports.len()));
    if !gaps.is_empty() {
        table.push_str(&format!(", mean gap {:.2}%", 100.0 * gaps.iter().sum::<f64>() / gaps.len() as f64));
    }
    table.push('\n');
    print!("{table}");
    std::io::stdout().flush().ok();
    if let Some(p) = &a.report {
        let mut s = serde_json::to_string_pretty(&reports).expect("reports serialize");
        s.push('\n');
        write_text(p, &s)?;
    }
    Ok(feasible_code(all_feasible))
}

fn cmd_check(a: CheckArgs) -> Result<i32, HarnessError> {
    if !a.instance.is_file() {
        return Err(HarnessError::Usage(format!("instance file {} not found", a.instance.display())));
    }
    let inst = read_solomon(&a.instance)?;
    let sol = Solution::from_text(&read_text(&a.solution)?, &inst)?;
    let rep = check_solution(&inst, &sol);
    println!("{}", serde_json::to_string_pretty(&rep).expect("reports serialize"));
    Ok(feasible_code(rep.feasible))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_every_spec_flag() {
        let cli = Cli::try_parse_from([
            "vrptw", "solve", "--instance", "a.txt", "--scorer", "neural", "--checkpoint", "m.json", "--seed", "3",
            "--time-limit", "5", "--iters", "7", "--kappa", "2", "--m-init", "8", "--m-best", "2", "--m-dissim", "1",
            "--threads", "1", "--out", "a.sol",
        ])
        .unwrap();
        let Command::Solve(a) = cli.command else { panic!() };
        let cfg = a.search.run_config().unwrap();
        assert_eq!(cfg.scorer, ScorerChoice::Neural);
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.lns.time_limit, Some(5.0));
        assert_eq!(cfg.lns.max_iterations, Some(7));
        assert_eq!((cfg.lns.kappa, cfg.lns.m_init, cfg.lns.m_best, cfg.lns.m_dissimilar), (2, 8, 2, 1));
    }

    #[test]
    fn flags_override_the_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "seed = 1\n[lns]\nm_init = 4\nm_best = 2\n").unwrap();
        let flags = SearchFlags { config: Some(path), seed: Some(2), ..SearchFlags::default() };
        let cfg = flags.run_config().unwrap();
        assert_eq!(cfg.seed, 2);
        assert_eq!(cfg.lns.m_init, 4);
        assert_eq!(cfg.lns.m_best, 2);
    }

    #[test]
    fn usage_errors_exit_2() {
        assert_eq!(run(["vrptw", "solve", "--bogus"]), 2);
        assert_eq!(run(["vrptw", "solve", "--instance", "/nonexistent.txt"]), 2);
        assert_eq!(run(["vrptw", "frobnicate"]), 2);
        assert_eq!(run(["vrptw", "train", "--steps", "1"]), 2);
    }
}
