//! Training runs: modality sampling, the step loop, checkpoint and curve.

use std::path::PathBuf;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{write_text, HarnessError};
use crate::construct::{child_rng, rollout, DecodeMode, Scorer};
use crate::instance::{sample_instance, Family, HorizonType, Instance, SamplerConfig};
use crate::neural::{load_checkpoint_for, reinforce_step, save_checkpoint, ModelConfig, Parameters, Sgd, StepStats, TrainConfig};
use crate::solution::objective;

const BATCH_STREAM: u64 = 0x7261_696e;
const HOLDOUT_STREAM: u64 = 0x686f_6c64;

/// Share of customers with a finite window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TwRegime {
    /// 25 to 50 percent.
    Low,
    /// 75 to 100 percent.
    High,
}

impl TwRegime {
    pub fn range(self) -> (f64, f64) {
        match self {
            TwRegime::Low => (0.25, 0.5),
            TwRegime::High => (0.75, 1.0),
        }
    }
}

/// Horizon type times window regime, written `type1-low`, `type2-high`...
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Modality {
    pub horizon: HorizonType,
    pub tw: TwRegime,
}

impl FromStr for Modality {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let (h, t) = s.split_once('-').ok_or_else(|| format!("modality {s:?} is not of the form type1-low"))?;
        let horizon = match h {
            "type1" => HorizonType::Type1,
            "type2" => HorizonType::Type2,
            _ => return Err(format!("unknown horizon type {h:?}")),
        };
        let tw = match t {
            "low" => TwRegime::Low,
            "high" => TwRegime::High,
            _ => return Err(format!("unknown window regime {t:?}")),
        };
        Ok(Modality { horizon, tw })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainRunConfig {
    pub n_customers: usize,
    /// `None` draws R, C or RC per instance.
    pub family: Option<Family>,
    pub horizon_type: HorizonType,
    pub tw_regime: TwRegime,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Start from this checkpoint instead of a fresh initialization.
    pub init: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    /// JSON lines, one per step.
    pub curve: Option<PathBuf>,
}

impl Default for TrainRunConfig {
    fn default() -> Self {
        TrainRunConfig {
            n_customers: 50,
            family: None,
            horizon_type: HorizonType::Type1,
            tw_regime: TwRegime::Low,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            steps: 100,
            batch_size: 32,
            seed: 0,
            init: None,
            checkpoint: None,
            curve: None,
        }
    }
}

impl TrainRunConfig {
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        toml::from_str(text).map_err(|e| HarnessError::Usage(format!("bad config file: {e}")))
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.n_customers == 0 || self.batch_size == 0 {
            return Err(HarnessError::Usage("n_customers and batch_size must be positive".into()));
        }
        self.model.validate()?;
        self.train.validate()?;
        Ok(())
    }

    /// One instance of this modality.
    pub fn draw_instance<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Instance, HarnessError> {
        let family = self.family.unwrap_or_else(|| [Family::R, Family::C, Family::RC][rng.gen_range(0..3)]);
        let (lo, hi) = self.tw_regime.range();
        let tw = rng.gen_range(lo..=hi);
        let mut s = SamplerConfig::new(self.n_customers, family, self.horizon_type, tw, rng.next_u64());
        s.k = Some(self.model.k);
        Ok(sample_instance(&s)?)
    }

    /// The training batch of step `step`; depends only on the seed.
    pub fn batch(&self, step: usize) -> Result<Vec<Instance>, HarnessError> {
        let mut rng = child_rng(self.seed ^ BATCH_STREAM, step as u64);
        (0..self.batch_size).map(|_| self.draw_instance(&mut rng)).collect()
    }

    /// A fixed evaluation set drawn from a stream no training batch uses.
    pub fn holdout(&self, n: usize) -> Result<Vec<Instance>, HarnessError> {
        let mut rng = child_rng(self.seed ^ HOLDOUT_STREAM, 0);
        (0..n).map(|_| self.draw_instance(&mut rng)).collect()
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: Parameters,
    pub curve: Vec<StepStats>,
}

/// Runs `cfg.steps` updates on freshly sampled batches, then writes the
/// checkpoint and the curve if configured.
pub fn train(cfg: &TrainRunConfig, on_step: &mut dyn FnMut(usize, &StepStats)) -> Result<TrainOutcome, HarnessError> {
    cfg.validate()?;
    let mut params = match &cfg.init {
        Some(path) => load_checkpoint_for(path, &cfg.model)?,
        None => Parameters::init(cfg.model.clone(), cfg.seed)?,
    };
    let mut opt = Sgd::new(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut curve = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch = cfg.batch(step)?;
        let stats = reinforce_step(&batch, &mut params, &cfg.train, &mut opt, &mut rng)?;
        on_step(step, &stats);
        curve.push(stats);
    }
    if let Some(path) = &cfg.checkpoint {
        save_checkpoint(&params, path)?;
    }
    if let Some(path) = &cfg.curve {
        write_text(path, &curve_lines(&curve))?;
    }
    Ok(TrainOutcome { params, curve })
}

pub fn curve_lines(curve: &[StepStats]) -> String {
    let mut s = String::new();
    for (i, st) in curve.iter().enumerate() {
        let line = serde_json::json!({
            "step": i,
            "loss": st.loss,
            "mean_cost": st.mean_cost,
            "grad_norm": st.grad_norm,
            "decisions": st.decisions,
        });
        s.push_str(&line.to_string());
        s.push('\n');
    }
    s
}

/// Cost of one greedy rollout per instance, instance `i` using random
/// stream `i` of `seed` for its start nodes.
pub fn greedy_costs(insts: &[Instance], scorer: &dyn Scorer, kappa: usize, seed: u64) -> Result<Vec<f64>, HarnessError> {
    insts
        .iter()
        .enumerate()
        .map(|(i, inst)| {
            let mut rng = child_rng(seed, i as u64);
            let s = rollout(inst, scorer, DecodeMode::Greedy, kappa, &mut rng).map_err(crate::neural::NeuralError::from)?;
            Ok(objective(inst, &s))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::{load_checkpoint, NeuralScorer};

    fn micro() -> TrainRunConfig {
        TrainRunConfig {
            n_customers: 5,
            model: ModelConfig { d_emb: 4, n_static_layers: 1, k: 4, clip: 10.0 },
            train: TrainConfig { n_pomo: 2, kappa: 2, ..TrainConfig::default() },
            steps: 1,
            batch_size: 2,
            seed: 5,
            ..TrainRunConfig::default()
        }
    }

    #[test]
    fn modality_parses() {
        let m: Modality = "type2-high".parse().unwrap();
        assert_eq!(m, Modality { horizon: HorizonType::Type2, tw: TwRegime::High });
        assert!("type3-low".parse::<Modality>().is_err());
        assert!("type1".parse::<Modality>().is_err());
    }

    #[test]
    fn windows_follow_the_regime() {
        let mut cfg = micro();
        cfg.n_customers = 40;
        cfg.tw_regime = TwRegime::High;
        for inst in cfg.batch(0).unwrap() {
            let h = inst.horizon();
            let windowed = inst.customers().filter(|&c| inst.node(c).tw_end < h || inst.node(c).tw_start > 0.0).count();
            assert!((30..=40).contains(&windowed), "{windowed}");
        }
    }

    #[test]
    fn batches_are_seeded() {
        let cfg = micro();
        assert_eq!(cfg.batch(3).unwrap(), cfg.batch(3).unwrap());
        assert_ne!(cfg.batch(3).unwrap(), cfg.batch(4).unwrap());
        assert_ne!(cfg.holdout(2).unwrap(), cfg.batch(0).unwrap());
    }

    #[test]
    fn one_step_writes_a_loadable_checkpoint_and_curve() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = micro();
        cfg.checkpoint = Some(dir.path().join("m.json"));
        cfg.curve = Some(dir.path().join("curve.jsonl"));
        let out = train(&cfg, &mut |_, _| {}).unwrap();
        let loaded = load_checkpoint(dir.path().join("m.json")).unwrap();
        assert_eq!(loaded, out.params);
        let curve = std::fs::read_to_string(dir.path().join("curve.jsonl")).unwrap();
        assert_eq!(curve.lines().count(), 1);
        let scorer = NeuralScorer::new(loaded);
        let costs = greedy_costs(&cfg.holdout(2).unwrap(), &scorer, 2, 0).unwrap();
        assert!(costs.iter().all(|c| c.is_finite()));
    }

    #[test]
    fn fixed_seed_gives_an_identical_curve() {
        let mut cfg = micro();
        cfg.steps = 3;
        let a = train(&cfg, &mut |_, _| {}).unwrap();
        let b = train(&cfg, &mut |_, _| {}).unwrap();
        assert_eq!(curve_lines(&a.curve), curve_lines(&b.curve));
        assert_eq!(a.params, b.params);
    }
}
