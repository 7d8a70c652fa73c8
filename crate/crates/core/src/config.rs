//! Run configuration: one TOML file drives every pipeline stage, and
//! stage-scoped hashes let artifacts declare exactly which settings
//! produced them so downstream commands can refuse stale inputs.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

use crate::harness::{ProtocolConfig, TaskName};
use crate::sampler::AblationMode;
use crate::segment::Alignment;
use crate::synth::CohortRecipe;
use crate::{Error, Result};

/// Where the cohort comes from: pre-existing files, or the built-in
/// generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusSection {
    pub roster: PathBuf,
    pub gaze_dir: PathBuf,
    pub trials_dir: PathBuf,
    /// Sentence ids to drop before segmentation.
    pub excluded_sentences: Vec<String>,
}

impl Default for CorpusSection {
    fn default() -> Self {
        CorpusSection {
            roster: "corpus/roster.csv".into(),
            gaze_dir: "corpus/gaze".into(),
            trials_dir: "corpus/trials".into(),
            excluded_sentences: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegmentSection {
    pub alignment: Alignment,
    /// Fraction of each participant's retained trials kept for
    /// segmentation, earliest first.
    pub trial_fraction: f64,
}

impl Default for SegmentSection {
    fn default() -> Self {
        SegmentSection {
            alignment: Alignment::Response,
            trial_fraction: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSection {
    pub set_size: usize,
    pub filters: usize,
    pub hidden: usize,
    pub share_direction_weights: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            set_size: 30,
            filters: 8,
            hidden: 64,
            share_direction_weights: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingSection {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub patience: usize,
    pub max_epochs: usize,
    pub n_inner_seeds: usize,
}

impl Default for TrainingSection {
    fn default() -> Self {
        TrainingSection {
            batch_size: 64,
            learning_rate: 5e-4,
            patience: 5,
            max_epochs: 50,
            n_inner_seeds: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StatsSection {
    pub bootstrap_iters: usize,
    /// Label-permutation protocol repetitions feeding the permutation
    /// p-value; zero skips the test.
    pub n_permutations: usize,
}

impl Default for StatsSection {
    fn default() -> Self {
        StatsSection {
            bootstrap_iters: 1000,
            n_permutations: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepSection {
    pub set_sizes: Vec<usize>,
    pub n_sets: Vec<usize>,
    pub trial_fractions: Vec<f64>,
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection {
            set_sizes: vec![1, 10, 30, 50, 100],
            n_sets: vec![1, 10, 50, 100, 200],
            trial_fractions: vec![0.25, 0.5, 0.75, 1.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Cohort generator recipe; used by the synth command and ignored
    /// when the corpus paths point at existing data.
    pub synth: Option<CohortRecipe>,
    pub corpus: CorpusSection,
    pub segment: SegmentSection,
    pub task: TaskName,
    pub n_sets: usize,
    pub ablation: AblationMode,
    pub seed: u64,
    pub model: ModelSection,
    pub training: TrainingSection,
    pub stats: StatsSection,
    pub sweep: SweepSection,
    /// Integrated-gradients quadrature steps.
    pub ig_steps: usize,
    /// Evaluation samples attributed per participant.
    pub attr_sets: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            synth: None,
            corpus: CorpusSection::default(),
            segment: SegmentSection::default(),
            task: TaskName::CvDS,
            n_sets: 200,
            ablation: AblationMode::None,
            seed: 0,
            model: ModelSection::default(),
            training: TrainingSection::default(),
            stats: StatsSection::default(),
            sweep: SweepSection::default(),
            ig_steps: 50,
            attr_sets: 10,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        let cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(format!("config to TOML: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        let mut issues = Vec::new();
        if !(0.0 < self.segment.trial_fraction && self.segment.trial_fraction <= 1.0) {
            issues.push(format!(
                "segment.trial_fraction {} outside (0, 1]",
                self.segment.trial_fraction
            ));
        }
        if self.n_sets == 0 {
            issues.push("n_sets must be positive".into());
        }
        if self.model.set_size == 0 {
            issues.push("model.set_size must be positive".into());
        }
        if self.model.filters == 0 || self.model.hidden == 0 {
            issues.push("model.filters and model.hidden must be positive".into());
        }
        if self.training.batch_size == 0 {
            issues.push("training.batch_size must be positive".into());
        }
        if !(self.training.learning_rate.is_finite() && self.training.learning_rate > 0.0) {
            issues.push(format!(
                "training.learning_rate {} must be positive and finite",
                self.training.learning_rate
            ));
        }
        if self.training.max_epochs == 0 || self.training.n_inner_seeds == 0 {
            issues.push("training.max_epochs and training.n_inner_seeds must be positive".into());
        }
        if self.stats.bootstrap_iters == 0 {
            issues.push("stats.bootstrap_iters must be positive".into());
        }
        if self.ig_steps == 0 {
            issues.push("ig_steps must be positive".into());
        }
        if self.attr_sets == 0 || self.attr_sets > self.n_sets {
            issues.push(format!(
                "attr_sets {} outside 1..=n_sets ({})",
                self.attr_sets, self.n_sets
            ));
        }
        if let Some(recipe) = &self.synth {
            if let Err(e) = recipe.validate() {
                issues.push(format!("synth: {e}"));
            }
        }
        if issues.is_empty() {
            Ok(())
        } else {
            Err(Error::validation_all(issues))
        }
    }

    pub fn protocol_config(&self) -> ProtocolConfig {
        ProtocolConfig {
            set_size: self.model.set_size,
            n_sets: self.n_sets,
            filters: self.model.filters,
            hidden: self.model.hidden,
            share_direction_weights: self.model.share_direction_weights,
            batch_size: self.training.batch_size,
            learning_rate: self.training.learning_rate,
            patience: self.training.patience,
            max_epochs: self.training.max_epochs,
            n_inner_seeds: self.training.n_inner_seeds,
            ablation: self.ablation,
            seed: self.seed,
        }
    }

    /// Hash of the full config.
    pub fn hash(&self) -> String {
        hash_of(&self)
    }

    /// Hash of only the settings a stage depends on, chained through its
    /// upstream stages; caching can then keep artifacts whose stage hash
    /// is unchanged while later-stage settings vary.
    pub fn stage_hash(&self, stage: Stage) -> String {
        match stage {
            Stage::Synth => hash_of(&("synth", &self.synth, self.seed)),
            Stage::Preprocess => hash_of(&(
                "preprocess",
                self.stage_hash(Stage::Synth),
                &self.corpus,
            )),
            Stage::Segment => hash_of(&(
                "segment",
                self.stage_hash(Stage::Preprocess),
                &self.segment,
            )),
            Stage::Sets => hash_of(&(
                "sets",
                self.stage_hash(Stage::Segment),
                self.model.set_size,
                self.n_sets,
                self.seed,
            )),
            Stage::Train => hash_of(&(
                "train",
                self.stage_hash(Stage::Sets),
                &self.task,
                &self.ablation,
                &self.model,
                &self.training,
            )),
            Stage::Eval => hash_of(&("eval", self.stage_hash(Stage::Train), &self.stats)),
            Stage::Attribute => hash_of(&(
                "attribute",
                self.stage_hash(Stage::Train),
                self.ig_steps,
                self.attr_sets,
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Stage {
    Synth,
    Preprocess,
    Segment,
    Sets,
    Train,
    Eval,
    Attribute,
}

fn hash_of<T: Serialize>(value: &T) -> String {
    // JSON with struct-order keys is a stable canonical form here.
    let bytes = serde_json::to_vec(value).expect("config serialization cannot fail");
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}
