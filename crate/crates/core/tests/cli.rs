//! End-to-end runs of the `vrptw` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use vrptw_core::instance::{read_solomon, sample_instance, Family, HorizonType, SamplerConfig};
use vrptw_core::neural::load_checkpoint;
use vrptw_core::solution::check_solution;
use vrptw_core::Solution;

fn vrptw(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vrptw")).args(args).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_instance(dir: &Path, name: &str, n: usize, seed: u64) -> PathBuf {
    let mut inst = sample_instance(&SamplerConfig::new(n, Family::RC, HorizonType::Type1, 0.6, seed)).unwrap();
    inst.name = name.to_string();
    let path = dir.join(format!("{name}.txt"));
    std::fs::write(&path, inst.to_text()).unwrap();
    path
}

const QUICK: [&str; 8] = ["--iters", "2", "--m-init", "6", "--gls-rounds", "5", "--reproducible", "--seed=4"];

#[test]
fn solve_writes_a_valid_solution_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let inst_path = write_instance(dir.path(), "toy20", 20, 1);
    let sol = dir.path().join("toy20.sol");
    let rep = dir.path().join("toy20.json");
    let mut args = vec!["solve", "--instance", s(&inst_path), "--out", s(&sol), "--report", s(&rep)];
    args.extend(QUICK);
    args.extend(["--reference-cost", "500"]);
    let out = vrptw(&args);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));

    let inst = read_solomon(&inst_path).unwrap();
    let solution = Solution::from_text(&std::fs::read_to_string(&sol).unwrap(), &inst).unwrap();
    let check = check_solution(&inst, &solution);
    assert!(check.feasible);
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&rep).unwrap()).unwrap();
    assert_eq!(report["instance"], "toy20");
    assert_eq!(report["feasible"], true);
    assert!((report["cost"].as_f64().unwrap() - check.total_distance).abs() < 1e-9);
    assert_eq!(report["vehicles"].as_u64().unwrap() as usize, check.n_vehicles);
    let gap = report["gap"].as_f64().unwrap();
    assert!((gap - (check.total_distance - 500.0) / 500.0).abs() < 1e-12);
    assert_eq!(report["trace"].as_array().unwrap().len(), 3);

    let ok = vrptw(&["check", "--instance", s(&inst_path), "--solution", s(&sol)]);
    assert_eq!(ok.status.code(), Some(0));
}

#[test]
fn report_goes_to_stdout_without_a_path() {
    let dir = tempfile::tempdir().unwrap();
    let inst_path = write_instance(dir.path(), "toy8", 8, 2);
    let mut args = vec!["solve", "--instance", s(&inst_path)];
    args.extend(QUICK);
    let out = vrptw(&args);
    assert_eq!(out.status.code(), Some(0));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["feasible"], true);
    assert!(report.get("wall_time").is_none());
}

#[test]
fn check_rejects_a_broken_solution() {
    let dir = tempfile::tempdir().unwrap();
    let inst_path = write_instance(dir.path(), "toy5", 5, 3);
    let sol = dir.path().join("bad.sol");
    std::fs::write(&sol, "1 2\n2 3\n").unwrap();
    let out = vrptw(&["check", "--instance", s(&inst_path), "--solution", s(&sol)]);
    assert_eq!(out.status.code(), Some(1));
    let rep: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(rep["feasible"], false);
    std::fs::write(&sol, "1 x\n").unwrap();
    assert_eq!(vrptw(&["check", "--instance", s(&inst_path), "--solution", s(&sol)]).status.code(), Some(2));
}

#[test]
fn usage_errors() {
    assert_eq!(vrptw(&["solve", "--instance", "/no/such/file.txt"]).status.code(), Some(2));
    assert_eq!(vrptw(&["solve"]).status.code(), Some(2));
    assert_eq!(vrptw(&["solve", "--instance", "x.txt", "--scorer", "neural"]).status.code(), Some(2));
    assert_eq!(vrptw(&["solve", "--instance", "x.txt", "--m-init", "abc"]).status.code(), Some(2));
    assert_eq!(vrptw(&["--help"]).status.code(), Some(0));
}

#[test]
fn unservable_customer_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    // Customer 2 is due at 10 but lies 50 away from the depot.
    let text = "far\n\nVEHICLE\nNUMBER     CAPACITY\n  2         10\n\nCUSTOMER\n\
        CUST NO.  XCOORD.   YCOORD.    DEMAND   READY TIME  DUE DATE   SERVICE   TIME\n\n\
        0 0 0 0 0 1000 0\n1 1 0 1 0 1000 0\n2 50 0 1 0 10 0\n";
    let path = dir.path().join("far.txt");
    std::fs::write(&path, text).unwrap();
    let out = vrptw(&["solve", "--instance", s(&path), "--iters", "1"]);
    assert_eq!(out.status.code(), Some(1), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(!out.stderr.is_empty());
}

#[test]
fn eval_prints_a_table_for_a_directory() {
    let dir = tempfile::tempdir().unwrap();
    let inst_dir = dir.path().join("instances");
    std::fs::create_dir(&inst_dir).unwrap();
    write_instance(&inst_dir, "A1", 10, 5);
    write_instance(&inst_dir, "B1", 12, 6);
    let refs = dir.path().join("refs.txt");
    std::fs::write(&refs, "A1 300.0\n").unwrap();
    let rep = dir.path().join("all.json");
    let sols = dir.path().join("sols");
    let mut args = vec!["eval", "--dir", s(&inst_dir), "--references", s(&refs), "--report", s(&rep), "--out", s(&sols)];
    args.extend(QUICK);
    let out = vrptw(&args);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let table = String::from_utf8(out.stdout).unwrap();
    assert!(table.lines().any(|l| l.starts_with("A1")));
    assert!(table.lines().any(|l| l.starts_with("B1")));
    assert!(table.contains("mean cost"));
    let reports: Vec<serde_json::Value> = serde_json::from_str(&std::fs::read_to_string(&rep).unwrap()).unwrap();
    assert_eq!(reports.len(), 2);
    assert!(reports[0].get("gap").is_some());
    assert!(reports[1].get("gap").is_none());
    assert!(sols.join("A1.sol").is_file() && sols.join("B1.sol").is_file());
}

#[test]
fn train_then_solve_with_the_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("model.json");
    let curve = dir.path().join("curve.jsonl");
    let out = vrptw(&[
        "train", "--modality", "type2-high", "--customers", "6", "--steps", "2", "--batch", "2", "--n-pomo", "2",
        "--d-emb", "4", "--seed", "3", "--out", s(&ckpt), "--curve", s(&curve),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(load_checkpoint(&ckpt).unwrap().config().d_emb, 4);
    assert_eq!(std::fs::read_to_string(&curve).unwrap().lines().count(), 2);

    let inst_path = write_instance(dir.path(), "toy9", 9, 7);
    let mut args = vec!["solve", "--instance", s(&inst_path), "--scorer", "neural", "--checkpoint", s(&ckpt)];
    args.extend(QUICK);
    assert_eq!(vrptw(&args).status.code(), Some(0));
}

#[test]
fn config_file_drives_a_sampled_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    let sol = dir.path().join("out.sol");
    std::fs::write(
        &cfg,
        format!(
            "seed = 2\nreproducible = true\ngls_rounds = 3\nout = {:?}\n\n[sampler]\nn_customers = 9\nfamily = \"C\"\n\
             horizon_type = \"type1\"\ntw_fraction = 0.4\n\n[lns]\nm_init = 5\nm_best = 2\nmax_iterations = 2\n",
            s(&sol)
        ),
    )
    .unwrap();
    let out = vrptw(&["solve", "--config", s(&cfg)]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(sol.is_file());
}
