use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::ConditionSpec;
use crate::decipher::{Regime, TrainConfig};
use crate::error::{Error, Result};
use crate::lm::{ModelConfig, Objective};
use crate::metrics::EvalSettings;

pub const MANIFEST_SCHEMA: &str = "decipher-manifest-v1";

/// Everything that determines a run. Two runs with equal manifests over the
/// same corpus files produce identical outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema: String,
    pub condition: ConditionSpec,
    pub objective: Objective,
    pub regime: Regime,
    pub seed: u64,
    /// Steps of the main phase (per model for the two-stage regimes).
    pub steps: usize,
    /// Extra steps with the dictionary loss; align regime only.
    pub align_steps: usize,
    pub align_lambda: f64,
    pub eval_every: usize,
    /// Model width and depth; the vocabulary size is filled in from the
    /// tokenizers.
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Softmax restricted to the current language's half during joint steps.
    pub language_softmax: bool,
    pub eval: EvalSettings,
    /// Root under which the run directory is created.
    pub out_root: PathBuf,
}

impl RunManifest {
    pub fn new(condition: ConditionSpec, objective: Objective, regime: Regime, seed: u64, out_root: impl AsRef<Path>) -> RunManifest {
        let steps = 20_000;
        let model = ModelConfig::new(0);
        let layers = model.eval_layers.clone();
        RunManifest {
            schema: MANIFEST_SCHEMA.into(),
            condition,
            objective,
            regime,
            seed,
            steps,
            align_steps: steps / 4,
            align_lambda: 1.0,
            eval_every: 1000,
            model,
            train: TrainConfig::new(objective, seed, steps),
            language_softmax: true,
            eval: EvalSettings::new(objective, layers),
            out_root: out_root.as_ref().to_path_buf(),
        }
    }

    /// Keeps the derived fields (objective and seed copies, schedule length)
    /// consistent after edits.
    pub fn normalized(mut self) -> RunManifest {
        self.train.objective = self.objective;
        self.train.seed = self.seed;
        self.eval.objective = self.objective;
        self.condition.seed = self.seed;
        self.train.total_steps = self.total_steps();
        self
    }

    pub fn total_steps(&self) -> usize {
        match self.regime {
            Regime::Joint => self.steps,
            Regime::Align => self.steps + self.align_steps,
            Regime::Separate | Regime::Unidirectional => 2 * self.steps,
        }
    }

    pub fn cell_key(&self) -> String {
        format!("{}/{}/{}/seed-{}", self.condition.name, self.objective, self.regime, self.seed)
    }

    pub fn run_dir(&self) -> PathBuf {
        self.out_root
            .join(self.condition.name.as_str())
            .join(self.objective.to_string())
            .join(self.regime.as_str())
            .join(format!("seed-{}", self.seed))
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema != MANIFEST_SCHEMA {
            return Err(Error::InvalidConfig(format!("unknown manifest schema {}", self.schema)));
        }
        if self.eval_every == 0 {
            return Err(Error::InvalidConfig("eval_every must be positive".into()));
        }
        if !(self.align_lambda >= 0.0) {
            return Err(Error::InvalidConfig(format!("align weight must be non-negative, got {}", self.align_lambda)));
        }
        if self.objective != self.train.objective || self.seed != self.train.seed {
            return Err(Error::InvalidConfig("train settings disagree with the manifest".into()));
        }
        self.condition.validate()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<RunManifest> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<RunManifest> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunManifest::from_json(&text)
    }
}
