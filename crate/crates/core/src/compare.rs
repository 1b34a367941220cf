//! Paired comparison of conditioners: every arm trains on the same example
//! sequence and is scored on the same held-out set.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::conditioner::{Conditioner, EigenFloor};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::linalg::second_moment;
use crate::losses::LossModel;
use crate::optimizer::{train, TrainConfig, TrainTrace};
use crate::sketch::{sketched_preprocessing, SketchConfig, SketchDistribution};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ConditionerSpec {
    Identity,
    /// `C^{1/2}` of the training second moment.
    Full,
    /// Top-`k` eigenpairs of the training second moment.
    ExactLowRank { k: usize },
    /// Randomized preprocessing; `r` defaults to `2k`, `seed` to the
    /// training seed.
    Sketched {
        k: usize,
        #[serde(default)]
        r: Option<usize>,
        #[serde(default)]
        seed: Option<u64>,
        #[serde(default)]
        distribution: SketchDistribution,
    },
}

impl ConditionerSpec {
    /// Builds the conditioner for `data`, returning it with the build time.
    pub fn build(&self, data: &Dataset, default_seed: u64) -> Result<(Conditioner, f64)> {
        let start = Instant::now();
        let x = data.features();
        let cond = match self {
            ConditionerSpec::Identity => Conditioner::identity(data.n())?,
            ConditionerSpec::Full => Conditioner::full(&second_moment(x)?, EigenFloor::default())?,
            ConditionerSpec::ExactLowRank { k } => Conditioner::exact_low_rank(&second_moment(x)?, *k)?,
            ConditionerSpec::Sketched { k, r, seed, distribution } => {
                let cfg = SketchConfig::new(*k, seed.unwrap_or(default_seed))
                    .with_width(r.unwrap_or(2 * k))
                    .with_distribution(*distribution);
                sketched_preprocessing(x, &cfg)?.0
            }
        };
        Ok((cond, start.elapsed().as_secs_f64() * 1e3))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Arm {
    pub name: String,
    pub conditioner: ConditionerSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub arm: String,
    pub conditioner: String,
    /// Last checkpoint's evaluation loss (training loss without an
    /// evaluation set).
    pub final_loss: f64,
    pub iterations_to_target: Option<usize>,
    pub preprocessing_ms: f64,
    pub per_iter_ms: f64,
    pub diverged_at: Option<usize>,
    pub index_digest: u64,
}

#[derive(Debug, Clone)]
pub struct ArmRun {
    pub summary: ArmSummary,
    pub trace: TrainTrace,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComparisonSummary {
    pub target_loss: Option<f64>,
    pub arms: Vec<ArmSummary>,
}

#[derive(Debug, Clone)]
pub struct Comparison {
    pub target_loss: Option<f64>,
    pub runs: Vec<ArmRun>,
}

impl Comparison {
    pub fn summary(&self) -> ComparisonSummary {
        ComparisonSummary {
            target_loss: self.target_loss,
            arms: self.runs.iter().map(|r| r.summary.clone()).collect(),
        }
    }

    pub fn run(&self, name: &str) -> Option<&ArmRun> {
        self.runs.iter().find(|r| r.summary.arm == name)
    }

    /// Writes `<arm>.csv` per arm and `summary.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for run in &self.runs {
            run.trace.save_csv(&dir.join(format!("{}.csv", run.summary.arm)))?;
        }
        let json = serde_json::to_string_pretty(&self.summary())?;
        std::fs::write(dir.join("summary.json"), json)?;
        Ok(())
    }
}

fn validate_arms(arms: &[Arm]) -> Result<()> {
    if arms.len() < 2 {
        return Err(Error::InvalidArgument("need at least 2 arms".into()));
    }
    for (i, arm) in arms.iter().enumerate() {
        let ok = !arm.name.is_empty()
            && arm
                .name
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.')
            && !arm.name.starts_with('.');
        if !ok {
            return Err(Error::InvalidArgument(format!(
                "arm name {:?} must be non-empty and use only letters, digits, '-', '_' or '.'",
                arm.name
            )));
        }
        if arms[..i].iter().any(|a| a.name == arm.name) {
            return Err(Error::InvalidArgument(format!("duplicate arm name {:?}", arm.name)));
        }
    }
    Ok(())
}

/// Trains every arm with `cfg` (one shared seed, hence one shared example
/// sequence). An arm that diverges is recorded, not fatal; a conditioner
/// that cannot be built is.
pub fn compare(
    data: &Dataset,
    eval: Option<&Dataset>,
    arms: &[Arm],
    cfg: &TrainConfig,
    loss: &LossModel,
    target_loss: Option<f64>,
) -> Result<Comparison> {
    validate_arms(arms)?;
    cfg.validate()?;
    let mut runs = Vec::with_capacity(arms.len());
    for arm in arms {
        let (cond, preprocessing_ms) = arm.conditioner.build(data, cfg.seed)?;
        let kind = cond.kind().to_string();
        let run = train(data, cond, cfg, loss, eval)?;
        let last = run.trace.last().expect("trace always holds the initial checkpoint");
        let done = run.state.t.max(1);
        let summary = ArmSummary {
            arm: arm.name.clone(),
            conditioner: kind,
            final_loss: last.eval_loss.unwrap_or(last.train_loss),
            iterations_to_target: target_loss.and_then(|t| run.trace.iterations_to_target(t)),
            preprocessing_ms,
            per_iter_ms: run.elapsed_ms / done as f64,
            diverged_at: run.trace.diverged_at,
            index_digest: run.trace.index_digest,
        };
        runs.push(ArmRun {
            summary,
            trace: run.trace,
        });
    }
    Ok(Comparison { target_loss, runs })
}
