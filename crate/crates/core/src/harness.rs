//! Nested cross-validation protocol: stratified outer folds, seeded inner
//! splits, early-stopped training, and subject-level scoring.
//!
//! The unit of work is one (outer fold, inner seed) run. Runs are
//! independent and parallelized; each run is internally sequential, so a
//! given (corpus, config, seed) triple always produces the same score
//! table regardless of worker count.

use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Cohort, Gender, Group, ScreenGeometry, Sentiment};
use crate::nnet::{weighted_bce, Adam, AdamConfig, Model, ModelConfig, Sample, Workspace};
use crate::preprocess::{preprocess_participant, CleanRecording};
use crate::sampler::{draw_set_indices, shuffle_sentiments, AblationMode};
use crate::seed::SeedPath;
use crate::segment::{segment_cohort, Alignment, SegmentStore, TrialSegment};
use crate::{Error, Result};

pub const N_OUTER_FOLDS: usize = 5;
/// Fraction of the outer-train participants held out for validation in
/// each inner split.
const INNER_VAL_FRACTION: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TaskName {
    CvDS,
    CvD,
    CvS,
    DvS,
}

impl TaskName {
    pub const ALL: [TaskName; 4] = [TaskName::CvDS, TaskName::CvD, TaskName::CvS, TaskName::DvS];

    pub fn as_str(&self) -> &'static str {
        match self {
            TaskName::CvDS => "CvDS",
            TaskName::CvD => "CvD",
            TaskName::CvS => "CvS",
            TaskName::DvS => "DvS",
        }
    }
}

impl std::fmt::Display for TaskName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for TaskName {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cvds" => Ok(TaskName::CvDS),
            "cvd" => Ok(TaskName::CvD),
            "cvs" => Ok(TaskName::CvS),
            "dvs" => Ok(TaskName::DvS),
            other => Err(Error::Config(format!(
                "unknown task {other:?}; expected one of CvDS, CvD, CvS, DvS"
            ))),
        }
    }
}

/// Which groups form the positive and negative class, and which are held
/// out entirely for zero-shot scoring.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: TaskName,
    pub positive_groups: Vec<Group>,
    pub negative_groups: Vec<Group>,
    pub excluded_groups: Vec<Group>,
}

impl TaskSpec {
    pub fn of(name: TaskName) -> TaskSpec {
        let (pos, neg, excl): (&[Group], &[Group], &[Group]) = match name {
            TaskName::CvDS => (&[Group::D, Group::S], &[Group::C], &[]),
            TaskName::CvD => (&[Group::D], &[Group::C], &[Group::S]),
            TaskName::CvS => (&[Group::S], &[Group::C], &[Group::D]),
            TaskName::DvS => (&[Group::S], &[Group::D], &[Group::C]),
        };
        TaskSpec {
            name,
            positive_groups: pos.to_vec(),
            negative_groups: neg.to_vec(),
            excluded_groups: excl.to_vec(),
        }
    }

    pub fn label_of(&self, group: Group) -> Option<u8> {
        if self.positive_groups.contains(&group) {
            Some(1)
        } else if self.negative_groups.contains(&group) {
            Some(0)
        } else {
            None
        }
    }

    pub fn validate(&self) -> Result<()> {
        for g in &self.positive_groups {
            if self.negative_groups.contains(g) {
                return Err(Error::Plan(format!(
                    "task {}: group {g} in both classes",
                    self.name
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Subject {
    pub id: String,
    pub group: Group,
    pub gender: Gender,
}

pub fn subjects_of_store(store: &SegmentStore) -> Vec<Subject> {
    store
        .participants
        .iter()
        .map(|p| Subject {
            id: p.participant_id.clone(),
            group: p.group,
            gender: p.gender,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InnerSplit {
    pub train: Vec<String>,
    pub val: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub task: TaskName,
    pub seed: u64,
    /// Labeled participants, partitioned; stratified by group and gender.
    pub outer_folds: Vec<Vec<String>>,
    /// `inner_splits[fold][seed_idx]` splits that fold's outer-train set.
    pub inner_splits: Vec<Vec<InnerSplit>>,
    /// Excluded-group participants: never trained on, scored by every
    /// fold's models.
    pub zero_shot: Vec<String>,
}

impl FoldPlan {
    /// Fold index of each labeled participant.
    pub fn fold_of(&self) -> HashMap<&str, usize> {
        let mut map = HashMap::new();
        for (f, fold) in self.outer_folds.iter().enumerate() {
            for id in fold {
                map.insert(id.as_str(), f);
            }
        }
        map
    }
}

fn stratum_key(s: &Subject) -> (u8, u8) {
    let g = s.group.index() as u8;
    let gender = match s.gender {
        Gender::F => 0u8,
        Gender::M => 1,
        Gender::Other => 2,
    };
    (g, gender)
}

/// Deterministic stratified partition into 5 outer folds plus seeded
/// stratified 80/20 inner splits. Within every group-by-gender stratum the
/// fold counts differ by at most one, and remainders go to the currently
/// smallest folds, so total fold sizes stay within one of each other.
pub fn plan_folds(
    subjects: &[Subject],
    task: &TaskSpec,
    seed: u64,
    n_inner: usize,
) -> Result<FoldPlan> {
    task.validate()?;
    if n_inner == 0 {
        return Err(Error::Plan("need at least one inner split".into()));
    }
    let labeled: Vec<&Subject> = subjects
        .iter()
        .filter(|s| task.label_of(s.group).is_some())
        .collect();
    let zero_shot: Vec<String> = subjects
        .iter()
        .filter(|s| task.label_of(s.group).is_none())
        .map(|s| s.id.clone())
        .collect();

    for group in task.positive_groups.iter().chain(&task.negative_groups) {
        let n = labeled.iter().filter(|s| s.group == *group).count();
        if n < N_OUTER_FOLDS {
            return Err(Error::Plan(format!(
                "group {group} has {n} participants; need at least {N_OUTER_FOLDS} for {N_OUTER_FOLDS} outer folds"
            )));
        }
    }

    let mut strata: BTreeMap<(u8, u8), Vec<&Subject>> = BTreeMap::new();
    for s in &labeled {
        strata.entry(stratum_key(s)).or_default().push(s);
    }

    let mut folds: Vec<Vec<String>> = vec![Vec::new(); N_OUTER_FOLDS];
    for ((g, gender), mut members) in strata {
        members.sort_by(|a, b| a.id.cmp(&b.id));
        let mut rng = SeedPath::new(seed)
            .push_str("fold-plan")
            .push_str(task.name.as_str())
            .push_u64(g as u64)
            .push_u64(gender as u64)
            .rng();
        for i in (1..members.len()).rev() {
            let j = rng.gen_range(0..=i);
            members.swap(i, j);
        }
        let mut stratum_count = [0usize; N_OUTER_FOLDS];
        for m in members {
            // Smallest stratum count, then smallest fold, then lowest index.
            let f = (0..N_OUTER_FOLDS)
                .min_by_key(|&f| (stratum_count[f], folds[f].len(), f))
                .unwrap();
            stratum_count[f] += 1;
            folds[f].push(m.id.clone());
        }
    }
    for fold in &mut folds {
        fold.sort();
    }

    let by_id: HashMap<&str, &Subject> = labeled.iter().map(|s| (s.id.as_str(), *s)).collect();
    let mut inner_splits = Vec::with_capacity(N_OUTER_FOLDS);
    for f in 0..N_OUTER_FOLDS {
        let outer_train: Vec<&Subject> = labeled
            .iter()
            .filter(|s| !folds[f].contains(&s.id))
            .copied()
            .collect();
        let mut splits = Vec::with_capacity(n_inner);
        for k in 0..n_inner {
            splits.push(inner_split(&outer_train, task, seed, f, k)?);
        }
        inner_splits.push(splits);
    }
    drop(by_id);

    Ok(FoldPlan {
        task: task.name,
        seed,
        outer_folds: folds,
        inner_splits,
        zero_shot,
    })
}

fn inner_split(
    outer_train: &[&Subject],
    task: &TaskSpec,
    seed: u64,
    fold: usize,
    seed_idx: usize,
) -> Result<InnerSplit> {
    let mut strata: BTreeMap<(u8, u8), Vec<&Subject>> = BTreeMap::new();
    for s in outer_train {
        strata.entry(stratum_key(s)).or_default().push(s);
    }
    let mut train = Vec::new();
    let mut val = Vec::new();
    for ((g, gender), mut members) in strata {
        members.sort_by(|a, b| a.id.cmp(&b.id));
        let mut rng = SeedPath::new(seed)
            .push_str("inner-split")
            .push_str(task.name.as_str())
            .push_u64(fold as u64)
            .push_u64(seed_idx as u64)
            .push_u64(g as u64)
            .push_u64(gender as u64)
            .rng();
        for i in (1..members.len()).rev() {
            let j = rng.gen_range(0..=i);
            members.swap(i, j);
        }
        let n_val = ((members.len() as f64) * INNER_VAL_FRACTION).round() as usize;
        let n_val = n_val.min(members.len().saturating_sub(1));
        for (i, m) in members.into_iter().enumerate() {
            if i < n_val {
                val.push(m);
            } else {
                train.push(m);
            }
        }
    }
    // Both classes must appear on both sides of the split; small strata
    // can leave a class without a validation member, in which case one is
    // moved over from the train side.
    for class in [0u8, 1u8] {
        if !val.iter().any(|s| task.label_of(s.group) == Some(class)) {
            let idx = train
                .iter()
                .enumerate()
                .filter(|(_, s)| task.label_of(s.group) == Some(class))
                .map(|(i, s)| (s.id.clone(), i))
                .max_by(|a, b| b.0.cmp(&a.0).then(b.1.cmp(&a.1)))
                .map(|(_, i)| i);
            match idx {
                Some(i) => val.push(train.remove(i)),
                None => {
                    return Err(Error::Plan(format!(
                        "fold {fold} seed {seed_idx}: no class-{class} participant available for validation"
                    )))
                }
            }
        }
        if !train.iter().any(|s| task.label_of(s.group) == Some(class)) {
            return Err(Error::Plan(format!(
                "fold {fold} seed {seed_idx}: no class-{class} participant left for training"
            )));
        }
    }
    let mut train: Vec<String> = train.into_iter().map(|s| s.id.clone()).collect();
    let mut val: Vec<String> = val.into_iter().map(|s| s.id.clone()).collect();
    train.sort();
    val.sort();
    Ok(InnerSplit { train, val })
}

/// Everything the protocol needs beyond the corpus itself. Defaults match
/// the reference settings; tests and sweeps override freely.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProtocolConfig {
    pub set_size: usize,
    pub n_sets: usize,
    pub filters: usize,
    pub hidden: usize,
    pub share_direction_weights: bool,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub patience: usize,
    pub max_epochs: usize,
    pub n_inner_seeds: usize,
    pub ablation: AblationMode,
    pub seed: u64,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig {
            set_size: 30,
            n_sets: 200,
            filters: 8,
            hidden: 64,
            share_direction_weights: true,
            batch_size: 64,
            learning_rate: 5e-4,
            patience: 5,
            max_epochs: 50,
            n_inner_seeds: 10,
            ablation: AblationMode::None,
            seed: 0,
        }
    }
}

impl ProtocolConfig {
    pub fn validate(&self) -> Result<()> {
        if self.set_size == 0 || self.n_sets == 0 {
            return Err(Error::Config("set_size and n_sets must be positive".into()));
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.n_inner_seeds == 0 {
            return Err(Error::Config(
                "batch_size, max_epochs and n_inner_seeds must be positive".into(),
            ));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        Ok(())
    }

    fn model_config(&self, t_len: usize, init_seed: u64) -> ModelConfig {
        ModelConfig {
            t_len,
            set_size: self.set_size,
            filters: self.filters,
            hidden: self.hidden,
            share_direction_weights: self.share_direction_weights,
            seed: init_seed,
        }
    }
}

/// One participant's segment pools plus the drawn per-set indices; model
/// inputs are assembled from these on demand.
struct SampleSource<'a> {
    id: &'a str,
    group: Group,
    gender: Gender,
    label: Option<u8>,
    negative: &'a [TrialSegment],
    positive: &'a [TrialSegment],
    neg_idx: Vec<Vec<u32>>,
    pos_idx: Vec<Vec<u32>>,
}

impl<'a> SampleSource<'a> {
    /// Write set `set_i` into `out` in model layout: per branch, all x
    /// rows then all y rows, one row per trial. Zero-fill ablations apply
    /// here.
    fn fill(&self, set_i: usize, ablation: AblationMode, t_len: usize, out: &mut Sample<f32>) {
        let s = self.neg_idx[set_i].len();
        let fill_branch = |branch: &mut [f32], segs: &[TrialSegment], idx: &[u32], zero: bool| {
            if zero {
                branch.fill(0.0);
                return;
            }
            for (j, &k) in idx.iter().enumerate() {
                let seg = &segs[k as usize];
                let x_row = &mut branch[j * t_len..(j + 1) * t_len];
                for (o, &v) in x_row.iter_mut().zip(&seg.x) {
                    *o = v as f32;
                }
                let y_row = &mut branch[(s + j) * t_len..(s + j + 1) * t_len];
                for (o, &v) in y_row.iter_mut().zip(&seg.y) {
                    *o = v as f32;
                }
            }
        };
        fill_branch(
            &mut out.neg,
            self.negative,
            &self.neg_idx[set_i],
            ablation == AblationMode::PositiveOnly,
        );
        fill_branch(
            &mut out.pos,
            self.positive,
            &self.pos_idx[set_i],
            ablation == AblationMode::NegativeOnly,
        );
        match ablation {
            AblationMode::XOnly => {
                for branch in [&mut out.neg, &mut out.pos] {
                    branch[s * t_len..].fill(0.0);
                }
            }
            AblationMode::YOnly => {
                for branch in [&mut out.neg, &mut out.pos] {
                    branch[..s * t_len].fill(0.0);
                }
            }
            _ => {}
        }
    }
}

/// Result of one (fold, inner seed) training run.
#[derive(Debug, Clone)]
pub struct TrainedRun {
    pub fold: usize,
    pub seed_idx: usize,
    /// Flat parameters of the best-validation epoch.
    pub params: Vec<f32>,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub val_trace: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub participant_id: String,
    pub group: Group,
    pub gender: Gender,
    /// None for zero-shot participants.
    pub label: Option<u8>,
    /// Mean of the per-seed scores.
    pub score: f64,
    pub per_seed: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreTable {
    pub task: TaskName,
    pub alignment: Alignment,
    pub rows: Vec<ScoreRow>,
}

impl ScoreTable {
    /// Scores and labels of the labeled participants, in row order.
    pub fn scores_and_labels(&self) -> (Vec<f64>, Vec<u8>) {
        let mut scores = Vec::new();
        let mut labels = Vec::new();
        for r in &self.rows {
            if let Some(l) = r.label {
                scores.push(r.score);
                labels.push(l);
            }
        }
        (scores, labels)
    }

    pub fn group_scores(&self, group: Group) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.group == group)
            .map(|r| r.score)
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let n_seeds = self.rows.first().map_or(0, |r| r.per_seed.len());
        let mut out = String::from("participant_id,group,gender,task,alignment,label,score");
        for k in 0..n_seeds {
            out.push_str(&format!(",seed{k}"));
        }
        out.push('\n');
        for r in &self.rows {
            let label = r.label.map_or(String::new(), |l| l.to_string());
            out.push_str(&format!(
                "{},{},{},{},{},{},{}",
                r.participant_id, r.group, r.gender, self.task, self.alignment, label, r.score
            ));
            for v in &r.per_seed {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &std::path::Path) -> Result<ScoreTable> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::parse(path, 1, "empty score table"))?;
        let cols: Vec<&str> = header.split(',').collect();
        if cols.len() < 7 || cols[..7] != ["participant_id", "group", "gender", "task", "alignment", "label", "score"] {
            return Err(Error::parse(path, 1, format!("unexpected header {header:?}")));
        }
        let mut task = None;
        let mut alignment = None;
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate() {
            let line_no = (i + 2) as u64;
            if line.is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != cols.len() {
                return Err(Error::parse(
                    path,
                    line_no,
                    format!("expected {} fields, got {}", cols.len(), f.len()),
                ));
            }
            let parse_f64 = |s: &str, what: &str| -> Result<f64> {
                s.parse()
                    .map_err(|_| Error::parse(path, line_no, format!("bad {what} {s:?}")))
            };
            task = Some(f[3].parse::<TaskName>()?);
            alignment = Some(
                f[4].parse::<Alignment>()
                    .map_err(|e| Error::parse(path, line_no, e))?,
            );
            let label = if f[5].is_empty() {
                None
            } else {
                Some(
                    f[5].parse::<u8>()
                        .map_err(|_| Error::parse(path, line_no, format!("bad label {:?}", f[5])))?,
                )
            };
            let mut per_seed = Vec::new();
            for s in &f[7..] {
                per_seed.push(parse_f64(s, "seed score")?);
            }
            rows.push(ScoreRow {
                participant_id: f[0].to_string(),
                group: f[1]
                    .parse()
                    .map_err(|e: String| Error::parse(path, line_no, e))?,
                gender: f[2]
                    .parse()
                    .map_err(|e: String| Error::parse(path, line_no, e))?,
                label,
                score: parse_f64(f[6], "score")?,
                per_seed,
            });
        }
        Ok(ScoreTable {
            task: task.ok_or_else(|| Error::parse(path, 1, "no data rows"))?,
            alignment: alignment.unwrap(),
            rows,
        })
    }
}

#[derive(Debug)]
pub struct ProtocolOutput {
    pub table: ScoreTable,
    pub plan: FoldPlan,
    pub runs: Vec<TrainedRun>,
    /// Participants without segments in one or both sentiments, with the
    /// reason; they appear in no fold and receive no score.
    pub skipped: Vec<(String, String)>,
}

/// Preprocess every participant and segment the cohort: the standard path
/// from a raw corpus to a segment store.
pub fn build_store(cohort: &Cohort, alignment: Alignment, trial_fraction: f64) -> Result<SegmentStore> {
    let geom = ScreenGeometry::default();
    let cleans: Vec<CleanRecording> = cohort
        .participants
        .par_iter()
        .map(|p| preprocess_participant(&p.recording, &geom))
        .collect::<Result<Vec<_>>>()?;
    segment_cohort(cohort, &cleans, alignment, trial_fraction)
}

/// Class weights from the outer-train participants only:
/// `w_c = n_total / (2 n_c)`.
fn class_weights(labels: impl Iterator<Item = u8>) -> Result<[f32; 2]> {
    let mut counts = [0usize; 2];
    let mut total = 0usize;
    for l in labels {
        counts[l as usize] += 1;
        total += 1;
    }
    if counts[0] == 0 || counts[1] == 0 {
        return Err(Error::Plan(format!(
            "outer-train labels one-sided: {} negative, {} positive",
            counts[0], counts[1]
        )));
    }
    Ok([
        (total as f64 / (2.0 * counts[0] as f64)) as f32,
        (total as f64 / (2.0 * counts[1] as f64)) as f32,
    ])
}

struct RunContext<'a> {
    sources: &'a [SampleSource<'a>],
    by_id: HashMap<&'a str, usize>,
    labels: HashMap<&'a str, u8>,
    t_len: usize,
    config: &'a ProtocolConfig,
    task: TaskName,
}

fn train_one_run(
    ctx: &RunContext,
    plan: &FoldPlan,
    fold: usize,
    seed_idx: usize,
) -> Result<TrainedRun> {
    let cfg = ctx.config;
    let split = &plan.inner_splits[fold][seed_idx];
    let weights = class_weights(
        plan.outer_folds
            .iter()
            .enumerate()
            .filter(|(f, _)| *f != fold)
            .flat_map(|(_, ids)| ids.iter())
            .map(|id| ctx.labels[id.as_str()]),
    )?;

    let init_seed = SeedPath::new(cfg.seed)
        .push_str("model-init")
        .push_str(ctx.task.as_str())
        .push_u64(fold as u64)
        .push_u64(seed_idx as u64)
        .rng()
        .gen::<u64>();
    let model_cfg = cfg.model_config(ctx.t_len, init_seed);
    let mut model = Model::<f32>::new(model_cfg.clone());
    let mut ws = Workspace::<f32>::new(&model_cfg);
    let mut adam = Adam::new(
        &model,
        AdamConfig {
            lr: cfg.learning_rate,
            ..AdamConfig::default()
        },
    );
    let mut buf = Sample::<f32>::zeros(&model_cfg);

    let train_items: Vec<(usize, u8)> = split
        .train
        .iter()
        .map(|id| (ctx.by_id[id.as_str()], ctx.labels[id.as_str()]))
        .collect();
    let val_items: Vec<(usize, u8)> = split
        .val
        .iter()
        .map(|id| (ctx.by_id[id.as_str()], ctx.labels[id.as_str()]))
        .collect();

    let diverged = |message: String| Error::Diverged {
        fold,
        seed: seed_idx,
        message,
    };

    let mut order: Vec<(usize, u32)> = train_items
        .iter()
        .flat_map(|&(pi, _)| (0..cfg.n_sets as u32).map(move |si| (pi, si)))
        .collect();
    let mut best_params: Vec<f32> = model.param_vec();
    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0usize;
    let mut bad_streak = 0usize;
    let mut val_trace = Vec::new();
    let mut epochs_run = 0usize;

    for epoch in 1..=cfg.max_epochs {
        epochs_run = epoch;
        let mut rng = SeedPath::new(cfg.seed)
            .push_str("batch-shuffle")
            .push_str(ctx.task.as_str())
            .push_u64(fold as u64)
            .push_u64(seed_idx as u64)
            .push_u64(epoch as u64)
            .rng();
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }

        for batch in order.chunks(cfg.batch_size) {
            model.zero_grads();
            ws.begin_batch(&model);
            let inv_n = 1.0 / batch.len() as f32;
            for &(pi, si) in batch {
                let src = &ctx.sources[pi];
                src.fill(si as usize, cfg.ablation, ctx.t_len, &mut buf);
                let label = ctx.labels[src.id];
                let w = weights[label as usize];
                let p = ws
                    .forward(&model, &buf)
                    .map_err(|e| diverged(format!("epoch {epoch}: {e}")))?;
                let g = w * (p - label as f32) * inv_n;
                ws.backward(&mut model, &buf, g, None);
            }
            ws.end_batch(&mut model);
            adam.step(&mut model);
        }

        // Per-sample validation cross entropy, class-weighted like the
        // training objective. The workspace's merged kernels must be
        // rebuilt first: the last optimizer step changed the model after
        // the final begin_batch.
        ws.begin_batch(&model);
        let mut val_sum = 0.0f64;
        let mut val_n = 0usize;
        for &(pi, label) in &val_items {
            let src = &ctx.sources[pi];
            let w = weights[label as usize];
            for si in 0..cfg.n_sets {
                src.fill(si, cfg.ablation, ctx.t_len, &mut buf);
                let p = ws
                    .forward(&model, &buf)
                    .map_err(|e| diverged(format!("epoch {epoch} validation: {e}")))?;
                val_sum += weighted_bce(p, label as f32, w) as f64;
                val_n += 1;
            }
        }
        let val_ce = val_sum / val_n as f64;
        if !val_ce.is_finite() {
            return Err(diverged(format!(
                "epoch {epoch}: validation loss {val_ce} non-finite"
            )));
        }
        val_trace.push(val_ce);

        if val_ce < best_val {
            best_val = val_ce;
            best_epoch = epoch;
            best_params = model.param_vec();
            bad_streak = 0;
        } else {
            bad_streak += 1;
            if bad_streak >= cfg.patience {
                break;
            }
        }
    }

    Ok(TrainedRun {
        fold,
        seed_idx,
        params: best_params,
        best_epoch,
        epochs_run,
        val_trace,
    })
}

fn score_subjects(
    ctx: &RunContext,
    plan: &FoldPlan,
    runs: &[TrainedRun],
    alignment: Alignment,
) -> Result<ScoreTable> {
    let cfg = ctx.config;
    let n_seeds = cfg.n_inner_seeds;
    let fold_of = plan.fold_of();
    let init_seed_any = 0;
    let model_cfg = cfg.model_config(ctx.t_len, init_seed_any);

    // Rebuild models once; scoring reads them concurrently.
    let mut models: Vec<Vec<Model<f32>>> = Vec::with_capacity(N_OUTER_FOLDS);
    for f in 0..N_OUTER_FOLDS {
        let mut per_seed = Vec::with_capacity(n_seeds);
        for k in 0..n_seeds {
            let run = runs
                .iter()
                .find(|r| r.fold == f && r.seed_idx == k)
                .ok_or_else(|| Error::Plan(format!("missing run fold {f} seed {k}")))?;
            let mut m = Model::<f32>::new(model_cfg.clone());
            m.set_param_vec(&run.params);
            per_seed.push(m);
        }
        models.push(per_seed);
    }

    let rows: Vec<ScoreRow> = ctx
        .sources
        .par_iter()
        .map(|src| -> Result<ScoreRow> {
            let mut ws = Workspace::<f32>::new(&model_cfg);
            let mut buf = Sample::<f32>::zeros(&model_cfg);
            let own_fold = fold_of.get(src.id).copied();
            let mut per_seed = Vec::with_capacity(n_seeds);
            for k in 0..n_seeds {
                let score = match own_fold {
                    Some(f) => {
                        positive_fraction(&models[f][k], &mut ws, &mut buf, src, ctx)?
                    }
                    None => {
                        // Zero-shot: average the five folds' models.
                        let mut acc = 0.0;
                        for f in 0..N_OUTER_FOLDS {
                            acc += positive_fraction(&models[f][k], &mut ws, &mut buf, src, ctx)?;
                        }
                        acc / N_OUTER_FOLDS as f64
                    }
                };
                per_seed.push(score);
            }
            let score = per_seed.iter().sum::<f64>() / per_seed.len() as f64;
            Ok(ScoreRow {
                participant_id: src.id.to_string(),
                group: src.group,
                gender: src.gender,
                label: src.label,
                score,
                per_seed,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(ScoreTable {
        task: ctx.task,
        alignment,
        rows,
    })
}

/// Fraction of the participant's paired sets the model calls positive;
/// probability exactly 0.5 counts as positive.
fn positive_fraction(
    model: &Model<f32>,
    ws: &mut Workspace<f32>,
    buf: &mut Sample<f32>,
    src: &SampleSource,
    ctx: &RunContext,
) -> Result<f64> {
    // Rebuild the workspace's merged kernels from this model's params.
    ws.begin_batch(model);
    let mut positive = 0usize;
    for si in 0..ctx.config.n_sets {
        src.fill(si, ctx.config.ablation, ctx.t_len, buf);
        let p = ws.forward(model, buf)?;
        if p >= 0.5 {
            positive += 1;
        }
    }
    Ok(positive as f64 / ctx.config.n_sets as f64)
}

/// Train 5 x n_inner_seeds models and score every participant. Labels are
/// the task's group labels unless `label_override` substitutes them (the
/// permuted-label null).
fn run_protocol_inner(
    store: &SegmentStore,
    task: &TaskSpec,
    config: &ProtocolConfig,
    label_override: Option<&HashMap<String, u8>>,
) -> Result<ProtocolOutput> {
    config.validate()?;
    task.validate()?;

    let shuffled;
    let store = if config.ablation == AblationMode::ShuffledSentiment {
        shuffled = shuffle_sentiments(store, config.seed);
        &shuffled
    } else {
        store
    };
    // The zero-fill modes still apply inside SampleSource::fill; the
    // sentiment redeal above replaces ShuffledSentiment with plain
    // sampling over the redealt store.
    let ablation = if config.ablation == AblationMode::ShuffledSentiment {
        AblationMode::None
    } else {
        config.ablation
    };
    let effective = ProtocolConfig {
        ablation,
        ..config.clone()
    };

    let t_len = store.alignment.t_len();
    let mut sources = Vec::new();
    let mut skipped = Vec::new();
    for p in &store.participants {
        if p.negative.is_empty() || p.positive.is_empty() {
            skipped.push((
                p.participant_id.clone(),
                "no segments in one or both sentiments".to_string(),
            ));
            continue;
        }
        sources.push(SampleSource {
            id: &p.participant_id,
            group: p.group,
            gender: p.gender,
            label: task.label_of(p.group),
            negative: &p.negative,
            positive: &p.positive,
            neg_idx: draw_set_indices(
                p.negative.len(),
                &p.participant_id,
                Sentiment::Negative,
                effective.set_size,
                effective.n_sets,
                effective.seed,
            ),
            pos_idx: draw_set_indices(
                p.positive.len(),
                &p.participant_id,
                Sentiment::PositiveNeutral,
                effective.set_size,
                effective.n_sets,
                effective.seed,
            ),
        });
    }
    if !skipped.is_empty() {
        log::warn!(
            "{} participants skipped for missing segments: {:?}",
            skipped.len(),
            skipped.iter().map(|(id, _)| id).collect::<Vec<_>>()
        );
    }

    let subjects: Vec<Subject> = sources
        .iter()
        .map(|s| Subject {
            id: s.id.to_string(),
            group: s.group,
            gender: s.gender,
        })
        .collect();
    let plan = plan_folds(&subjects, task, effective.seed, effective.n_inner_seeds)?;

    let mut labels: HashMap<&str, u8> = HashMap::new();
    for s in &sources {
        if let Some(l) = s.label {
            labels.insert(s.id, l);
        }
    }
    if let Some(over) = label_override {
        for (id, l) in over {
            match labels.get_mut(id.as_str()) {
                Some(slot) => *slot = *l,
                None => {
                    return Err(Error::Plan(format!(
                        "label override names unknown or unlabeled participant {id}"
                    )))
                }
            }
        }
    }

    let by_id: HashMap<&str, usize> = sources.iter().enumerate().map(|(i, s)| (s.id, i)).collect();
    let ctx = RunContext {
        sources: &sources,
        by_id,
        labels,
        t_len,
        config: &effective,
        task: task.name,
    };

    let run_ids: Vec<(usize, usize)> = (0..N_OUTER_FOLDS)
        .flat_map(|f| (0..effective.n_inner_seeds).map(move |k| (f, k)))
        .collect();
    let runs: Vec<TrainedRun> = run_ids
        .par_iter()
        .map(|&(f, k)| train_one_run(&ctx, &plan, f, k))
        .collect::<Result<Vec<_>>>()?;

    let table = score_subjects(&ctx, &plan, &runs, store.alignment)?;
    Ok(ProtocolOutput {
        table,
        plan,
        runs,
        skipped,
    })
}

pub fn run_protocol(
    store: &SegmentStore,
    task: &TaskSpec,
    config: &ProtocolConfig,
) -> Result<ProtocolOutput> {
    run_protocol_inner(store, task, config, None)
}

/// Permute labels among the labeled participants within each outer fold,
/// preserving per-fold class counts, and rerun the whole protocol. The
/// score table keeps the true labels so a null AUC can be computed
/// against them.
pub fn run_protocol_permuted(
    store: &SegmentStore,
    task: &TaskSpec,
    config: &ProtocolConfig,
    permutation_seed: u64,
) -> Result<ProtocolOutput> {
    let subjects = subjects_of_store(store);
    let plan = plan_folds(&subjects, task, config.seed, config.n_inner_seeds)?;
    let group_of: HashMap<&str, Group> =
        subjects.iter().map(|s| (s.id.as_str(), s.group)).collect();

    let mut permuted: HashMap<String, u8> = HashMap::new();
    for (f, fold) in plan.outer_folds.iter().enumerate() {
        let mut labels: Vec<u8> = fold
            .iter()
            .map(|id| task.label_of(group_of[id.as_str()]).unwrap())
            .collect();
        let mut rng = SeedPath::new(config.seed)
            .push_str("label-permutation")
            .push_str(task.name.as_str())
            .push_u64(permutation_seed)
            .push_u64(f as u64)
            .rng();
        for i in (1..labels.len()).rev() {
            let j = rng.gen_range(0..=i);
            labels.swap(i, j);
        }
        for (id, l) in fold.iter().zip(labels) {
            permuted.insert(id.clone(), l);
        }
    }
    run_protocol_inner(store, task, config, Some(&permuted))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn roster(counts: [usize; 3]) -> Vec<Subject> {
        let mut out = Vec::new();
        for (gi, group) in Group::ALL.iter().enumerate() {
            for k in 0..counts[gi] {
                out.push(Subject {
                    id: format!("{}{k:03}", group.to_string().to_lowercase()),
                    group: *group,
                    gender: if k % 2 == 0 { Gender::F } else { Gender::M },
                });
            }
        }
        out
    }

    #[test]
    fn test_task_specs() {
        let t = TaskSpec::of(TaskName::CvDS);
        assert_eq!(t.label_of(Group::C), Some(0));
        assert_eq!(t.label_of(Group::D), Some(1));
        assert_eq!(t.label_of(Group::S), Some(1));
        let t = TaskSpec::of(TaskName::CvD);
        assert_eq!(t.label_of(Group::S), None);
        assert_eq!(t.excluded_groups, vec![Group::S]);
        let t = TaskSpec::of(TaskName::DvS);
        assert_eq!(t.label_of(Group::D), Some(0));
        assert_eq!(t.label_of(Group::S), Some(1));
        assert!("cvds".parse::<TaskName>().is_ok());
        assert!("xvy".parse::<TaskName>().is_err());
    }

    #[test]
    fn test_plan_folds_partitions_and_balances() {
        // Mirror of the reference cohort sizes: 43 + 40 + 43 = 126.
        let subjects = roster([43, 40, 43]);
        let task = TaskSpec::of(TaskName::CvDS);
        let plan = plan_folds(&subjects, &task, 11, 10).unwrap();

        let mut sizes: Vec<usize> = plan.outer_folds.iter().map(|f| f.len()).collect();
        sizes.sort();
        assert_eq!(sizes, vec![25, 25, 25, 25, 26]);

        // Disjoint cover of all labeled participants.
        let mut seen = HashSet::new();
        for fold in &plan.outer_folds {
            for id in fold {
                assert!(seen.insert(id.clone()), "{id} in two folds");
            }
        }
        assert_eq!(seen.len(), 126);
        assert!(plan.zero_shot.is_empty());

        // Per-stratum deviation at most one.
        let by_id: HashMap<&str, &Subject> =
            subjects.iter().map(|s| (s.id.as_str(), s)).collect();
        let mut strata: HashMap<(u8, u8), Vec<usize>> = HashMap::new();
        for (f, fold) in plan.outer_folds.iter().enumerate() {
            for id in fold {
                let key = stratum_key(by_id[id.as_str()]);
                let counts = strata.entry(key).or_insert_with(|| vec![0; 5]);
                counts[f] += 1;
            }
        }
        for (key, counts) in &strata {
            let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
            assert!(hi - lo <= 1, "stratum {key:?} counts {counts:?}");
        }

        assert_eq!(plan, plan_folds(&subjects, &task, 11, 10).unwrap());
        assert_ne!(
            plan.outer_folds,
            plan_folds(&subjects, &task, 12, 10).unwrap().outer_folds
        );
    }

    #[test]
    fn test_inner_splits_are_stratified_and_distinct() {
        let subjects = roster([20, 20, 20]);
        let task = TaskSpec::of(TaskName::CvDS);
        let plan = plan_folds(&subjects, &task, 3, 10).unwrap();
        for f in 0..N_OUTER_FOLDS {
            let outer_train: HashSet<String> = plan
                .outer_folds
                .iter()
                .enumerate()
                .filter(|(g, _)| *g != f)
                .flat_map(|(_, ids)| ids.iter().cloned())
                .collect();
            for split in &plan.inner_splits[f] {
                let got: HashSet<String> = split
                    .train
                    .iter()
                    .chain(&split.val)
                    .cloned()
                    .collect();
                assert_eq!(got, outer_train);
                let frac = split.val.len() as f64 / outer_train.len() as f64;
                assert!((0.1..=0.3).contains(&frac), "val fraction {frac}");
                for side in [&split.train, &split.val] {
                    assert!(side.iter().any(|id| id.starts_with('c')));
                    assert!(side.iter().any(|id| !id.starts_with('c')));
                }
            }
            // The ten seeds give different validation sets.
            let distinct: HashSet<Vec<String>> = plan.inner_splits[f]
                .iter()
                .map(|s| s.val.clone())
                .collect();
            assert!(distinct.len() > 1);
        }
    }

    #[test]
    fn test_plan_folds_zero_shot_and_small_stratum() {
        let subjects = roster([10, 10, 10]);
        let task = TaskSpec::of(TaskName::CvD);
        let plan = plan_folds(&subjects, &task, 0, 10).unwrap();
        assert_eq!(plan.zero_shot.len(), 10);
        for id in &plan.zero_shot {
            assert!(id.starts_with('s'));
            for fold in &plan.outer_folds {
                assert!(!fold.contains(id));
            }
            for splits in &plan.inner_splits {
                for s in splits {
                    assert!(!s.train.contains(id) && !s.val.contains(id));
                }
            }
        }

        let tiny = roster([4, 10, 0]);
        assert!(matches!(
            plan_folds(&tiny, &task, 0, 10),
            Err(Error::Plan(_))
        ));
    }

    #[test]
    fn test_class_weights_formula() {
        // 12 negatives, 4 positives: w0 = 16/24, w1 = 16/8.
        let labels = std::iter::repeat(0u8).take(12).chain(std::iter::repeat(1u8).take(4));
        let [w0, w1] = class_weights(labels).unwrap();
        assert!((w0 - 16.0 / 24.0).abs() < 1e-6);
        assert!((w1 - 2.0).abs() < 1e-6);
        assert!(class_weights([0u8, 0u8].into_iter()).is_err());
    }

    #[test]
    fn test_permutation_preserves_fold_counts() {
        let subjects = roster([10, 10, 0]);
        let task = TaskSpec::of(TaskName::CvD);
        let plan = plan_folds(&subjects, &task, 7, 2).unwrap();
        let group_of: HashMap<&str, Group> =
            subjects.iter().map(|s| (s.id.as_str(), s.group)).collect();

        // Replicate the permutation the null protocol applies.
        let mut permuted: HashMap<String, u8> = HashMap::new();
        for (f, fold) in plan.outer_folds.iter().enumerate() {
            let mut labels: Vec<u8> = fold
                .iter()
                .map(|id| task.label_of(group_of[id.as_str()]).unwrap())
                .collect();
            let mut rng = SeedPath::new(7)
                .push_str("label-permutation")
                .push_str(task.name.as_str())
                .push_u64(3)
                .push_u64(f as u64)
                .rng();
            for i in (1..labels.len()).rev() {
                let j = rng.gen_range(0..=i);
                labels.swap(i, j);
            }
            for (id, l) in fold.iter().zip(labels) {
                permuted.insert(id.clone(), l);
            }
        }
        let mut moved = 0;
        for (f, fold) in plan.outer_folds.iter().enumerate() {
            let true_pos = fold
                .iter()
                .filter(|id| task.label_of(group_of[id.as_str()]) == Some(1))
                .count();
            let perm_pos = fold.iter().filter(|id| permuted[id.as_str()] == 1).count();
            assert_eq!(true_pos, perm_pos, "fold {f} count changed");
            moved += fold
                .iter()
                .filter(|id| permuted[id.as_str()] != task.label_of(group_of[id.as_str()]).unwrap())
                .count();
        }
        assert!(moved > 0, "permutation left every label in place");
    }

    #[test]
    fn test_fill_matches_sampler_layout() {
        use crate::sampler::{make_sets, pair_sets, to_model_sample};
        use crate::segment::ParticipantSegments;

        let seg = |id: &str, sentiment: Sentiment, fill: f64| TrialSegment {
            trial_id: id.to_string(),
            sentiment,
            alignment: Alignment::Response,
            x: (0..300).map(|i| fill + i as f64 * 1e-3).collect(),
            y: (0..300).map(|i| -fill - i as f64 * 2e-3).collect(),
        };
        let store = SegmentStore {
            alignment: Alignment::Response,
            trial_fraction: 1.0,
            participants: vec![ParticipantSegments {
                participant_id: "p0".into(),
                group: Group::C,
                gender: Gender::F,
                negative: (0..7).map(|k| seg(&format!("n{k}"), Sentiment::Negative, k as f64)).collect(),
                positive: (0..9).map(|k| seg(&format!("p{k}"), Sentiment::PositiveNeutral, 10.0 + k as f64)).collect(),
            }],
            dropped: Vec::new(),
            thin_participants: Vec::new(),
        };
        let (set_size, n_sets, seed) = (4, 6, 31);
        let sets = make_sets(&store, set_size, n_sets, seed).unwrap();
        let expected: Vec<Sample<f32>> = pair_sets(&sets.participants[0], 0)
            .unwrap()
            .iter()
            .map(to_model_sample::<f32>)
            .collect();

        let p = &store.participants[0];
        let src = SampleSource {
            id: &p.participant_id,
            group: p.group,
            gender: p.gender,
            label: Some(0),
            negative: &p.negative,
            positive: &p.positive,
            neg_idx: draw_set_indices(7, "p0", Sentiment::Negative, set_size, n_sets, seed),
            pos_idx: draw_set_indices(9, "p0", Sentiment::PositiveNeutral, set_size, n_sets, seed),
        };
        let model_cfg = ModelConfig {
            t_len: 300,
            set_size,
            ..ModelConfig::default()
        };
        let mut buf = Sample::<f32>::zeros(&model_cfg);
        for (i, want) in expected.iter().enumerate() {
            src.fill(i, AblationMode::None, 300, &mut buf);
            assert_eq!(buf.neg, want.neg, "set {i} negative branch");
            assert_eq!(buf.pos, want.pos, "set {i} positive branch");
        }
        // Zero-fill modes match the sampler's ablation of materialized sets.
        for mode in [AblationMode::NegativeOnly, AblationMode::PositiveOnly, AblationMode::XOnly, AblationMode::YOnly] {
            let mut materialized = pair_sets(&sets.participants[0], 0).unwrap();
            crate::sampler::ablate_samples(&mut materialized, mode).unwrap();
            src.fill(0, mode, 300, &mut buf);
            let want = to_model_sample::<f32>(&materialized[0]);
            assert_eq!(buf.neg, want.neg, "{mode:?} negative branch");
            assert_eq!(buf.pos, want.pos, "{mode:?} positive branch");
        }
    }

    #[test]
    fn test_score_table_csv_roundtrip() {
        let table = ScoreTable {
            task: TaskName::CvD,
            alignment: Alignment::Response,
            rows: vec![
                ScoreRow {
                    participant_id: "c000".into(),
                    group: Group::C,
                    gender: Gender::F,
                    label: Some(0),
                    score: 0.125,
                    per_seed: vec![0.1, 0.15],
                },
                ScoreRow {
                    participant_id: "s000".into(),
                    group: Group::S,
                    gender: Gender::M,
                    label: None,
                    score: 0.75,
                    per_seed: vec![0.7, 0.8],
                },
            ],
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scores.csv");
        table.write_csv(&path).unwrap();
        let back = ScoreTable::read_csv(&path).unwrap();
        assert_eq!(table, back);
        let (scores, labels) = back.scores_and_labels();
        assert_eq!(scores, vec![0.125]);
        assert_eq!(labels, vec![0]);
    }
}
