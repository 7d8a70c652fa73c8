//! Post-hoc interpretability: integrated-gradients saliency over the raw
//! gaze input, a weight readout of the first dense layer, and fixation
//! density maps.
//!
//! Attribution runs in 64-bit regardless of the training precision; the
//! trained 32-bit parameters are widened losslessly.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

use crate::corpus::{Cohort, Group, ScreenGeometry, Sentiment};
use crate::harness::{ProtocolConfig, ProtocolOutput, ScoreTable};
use crate::nnet::{Model, ModelConfig, Sample, Scalar, Workspace};
use crate::preprocess::preprocess_participant;
use crate::sampler::{ablate_samples, make_sets, pair_sets, shuffle_sentiments, to_model_sample, AblationMode};
use crate::segment::SegmentStore;
use crate::{Error, Result};

pub const DEFAULT_IG_STEPS: usize = 50;
pub const DENSITY_BINS_X: usize = 96;
pub const DENSITY_BINS_Y: usize = 54;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    X,
    Y,
}

impl Direction {
    pub const ALL: [Direction; 2] = [Direction::X, Direction::Y];

    pub fn as_str(self) -> &'static str {
        match self {
            Direction::X => "x",
            Direction::Y => "y",
        }
    }
}

/// The four (condition, direction) channels in model input order.
pub const CHANNELS: [(Sentiment, Direction); 4] = [
    (Sentiment::Negative, Direction::X),
    (Sentiment::Negative, Direction::Y),
    (Sentiment::PositiveNeutral, Direction::X),
    (Sentiment::PositiveNeutral, Direction::Y),
];

/// Integrated gradients for one input sample against the all-zero
/// baseline (screen center under the normalization).
#[derive(Debug, Clone)]
pub struct IgAttribution {
    /// Per-input attributions, same shape as the sample.
    pub attributions: Sample<f64>,
    pub probability: f64,
    pub baseline_probability: f64,
}

impl IgAttribution {
    pub fn total(&self) -> f64 {
        self.attributions.neg.iter().sum::<f64>() + self.attributions.pos.iter().sum::<f64>()
    }

    /// |sum of attributions - (P(x) - P(baseline))|; the completeness
    /// axiom drives this to zero as quadrature steps grow.
    pub fn completeness_residual(&self) -> f64 {
        (self.total() - (self.probability - self.baseline_probability)).abs()
    }
}

/// Midpoint-quadrature integrated gradients: for each input entry,
/// (x - 0) times the mean of dP/dx along the straight path from the zero
/// baseline, sampled at alphas (k - 1/2)/steps. Positive values push
/// toward the positive (clinical) class.
///
/// The workspace must match the model's config; merged kernels are rebuilt
/// here, and the model's parameter gradient buffers are used as scratch
/// and cleared before returning.
pub fn integrated_gradients(
    model: &mut Model<f64>,
    ws: &mut Workspace<f64>,
    sample: &Sample<f64>,
    steps: usize,
) -> Result<IgAttribution> {
    if steps == 0 {
        return Err(Error::Config("integrated gradients needs steps >= 1".into()));
    }
    ws.begin_batch(model);

    let zero = Sample::zeros(&model.cfg);
    let baseline_probability = ws.forward(model, &zero)?;
    let probability = ws.forward(model, sample)?;

    let mut scaled = Sample::zeros(&model.cfg);
    let mut grad_sum = Sample::zeros(&model.cfg);
    for k in 0..steps {
        let alpha = (k as f64 + 0.5) / steps as f64;
        for (dst, src) in scaled.neg.iter_mut().zip(&sample.neg) {
            *dst = alpha * src;
        }
        for (dst, src) in scaled.pos.iter_mut().zip(&sample.pos) {
            *dst = alpha * src;
        }
        let p = ws.forward(model, &scaled)?;
        // dP/dz2 of the sigmoid output.
        let g_z2 = p * (1.0 - p);
        ws.backward(model, &scaled, g_z2, Some(&mut grad_sum));
    }
    model.zero_grads();

    let inv_steps = 1.0 / steps as f64;
    let mut attributions = Sample::zeros(&model.cfg);
    for ((a, g), x) in attributions.neg.iter_mut().zip(&grad_sum.neg).zip(&sample.neg) {
        *a = x * g * inv_steps;
    }
    for ((a, g), x) in attributions.pos.iter_mut().zip(&grad_sum.pos).zip(&sample.pos) {
        *a = x * g * inv_steps;
    }
    if attributions.neg.iter().chain(&attributions.pos).any(|v| !v.is_finite()) {
        return Err(Error::Model {
            layer: "integrated-gradients".into(),
            message: "non-finite input gradient".into(),
        });
    }
    Ok(IgAttribution {
        attributions,
        probability,
        baseline_probability,
    })
}

/// Collapse a sample-shaped attribution over the trial dimension: mean
/// over the set rows, giving one T-length series per channel in
/// [`CHANNELS`] order.
pub fn trial_mean_series(attr: &Sample<f64>, cfg: &ModelConfig) -> [Vec<f64>; 4] {
    let (s, t) = (cfg.set_size, cfg.t_len);
    let mut out: [Vec<f64>; 4] = std::array::from_fn(|_| vec![0.0; t]);
    for (c, series) in out.iter_mut().enumerate() {
        let branch = attr.branch(c / 2);
        let dir = c % 2;
        for row in 0..s {
            let seg = &branch[dir * s * t + row * t..][..t];
            for (acc, v) in series.iter_mut().zip(seg) {
                *acc += v;
            }
        }
        for v in series.iter_mut() {
            *v /= s as f64;
        }
    }
    out
}

/// One evaluation sample's attribution, already collapsed over trials.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleAttribution {
    pub participant_id: String,
    /// Channel-major series in [`CHANNELS`] order.
    pub series: [Vec<f64>; 4],
}

/// Group-level mean attribution series for one (condition, direction).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionMap {
    pub group: Group,
    pub condition: Sentiment,
    pub direction: Direction,
    pub values: Vec<f64>,
    /// Evaluation samples aggregated into this series.
    pub n_samples: usize,
}

/// Mean per subject first, then across the subjects of each group, for
/// each of the four channels. Groups come from the score table.
pub fn aggregate_attributions(
    samples: &[SampleAttribution],
    table: &ScoreTable,
) -> Result<Vec<AttributionMap>> {
    let group_of: HashMap<&str, Group> = table
        .rows
        .iter()
        .map(|r| (r.participant_id.as_str(), r.group))
        .collect();
    let mut by_subject: HashMap<&str, Vec<&SampleAttribution>> = HashMap::new();
    for s in samples {
        if !group_of.contains_key(s.participant_id.as_str()) {
            return Err(Error::Stats(format!(
                "attribution sample for {} which is not in the score table",
                s.participant_id
            )));
        }
        by_subject.entry(s.participant_id.as_str()).or_default().push(s);
    }

    let t = samples
        .first()
        .map(|s| s.series[0].len())
        .ok_or_else(|| Error::Stats("no attribution samples to aggregate".into()))?;

    let mut maps = Vec::new();
    for group in Group::ALL {
        let mut ids: Vec<&str> = table
            .rows
            .iter()
            .filter(|r| r.group == group)
            .map(|r| r.participant_id.as_str())
            .collect();
        if ids.is_empty() {
            continue;
        }
        ids.sort_unstable();
        for id in &ids {
            if !by_subject.contains_key(id) {
                return Err(Error::Stats(format!(
                    "no attribution samples for participant {id} of group {group:?}"
                )));
            }
        }
        let mut n_samples = 0usize;
        let mut group_mean: [Vec<f64>; 4] = std::array::from_fn(|_| vec![0.0; t]);
        for id in &ids {
            let subj = &by_subject[id];
            n_samples += subj.len();
            for c in 0..4 {
                for (k, acc) in group_mean[c].iter_mut().enumerate() {
                    let subject_mean: f64 =
                        subj.iter().map(|s| s.series[c][k]).sum::<f64>() / subj.len() as f64;
                    *acc += subject_mean / ids.len() as f64;
                }
            }
        }
        for (c, (condition, direction)) in CHANNELS.into_iter().enumerate() {
            maps.push(AttributionMap {
                group,
                condition,
                direction,
                values: group_mean[c].clone(),
                n_samples,
            });
        }
    }
    Ok(maps)
}

pub fn maps_to_csv(maps: &[AttributionMap]) -> String {
    let mut out = String::from("group,condition,direction,t,value\n");
    for m in maps {
        for (t, v) in m.values.iter().enumerate() {
            out.push_str(&format!(
                "{},{},{},{t},{v}\n",
                m.group,
                m.condition,
                m.direction.as_str()
            ));
        }
    }
    out
}

/// Run integrated gradients over the first `n_attr_sets` evaluation
/// samples of every scored participant, under the same set stream,
/// ablation, and fold-to-model assignment as the protocol run that
/// produced `output`. Labeled participants are attributed by their own
/// fold's models, zero-shot participants by all of them; per sample, the
/// series is the mean over those models.
pub fn attribute_protocol(
    store: &SegmentStore,
    output: &ProtocolOutput,
    config: &ProtocolConfig,
    steps: usize,
    n_attr_sets: usize,
) -> Result<Vec<SampleAttribution>> {
    config.validate()?;
    if n_attr_sets == 0 || n_attr_sets > config.n_sets {
        return Err(Error::Config(format!(
            "n_attr_sets {n_attr_sets} must be in 1..={}",
            config.n_sets
        )));
    }
    let shuffled;
    let (store, ablation) = if config.ablation == AblationMode::ShuffledSentiment {
        shuffled = shuffle_sentiments(store, config.seed);
        (&shuffled, AblationMode::None)
    } else {
        (store, config.ablation)
    };
    let t_len = store.alignment.t_len();
    let cfg = ModelConfig {
        t_len,
        set_size: config.set_size,
        filters: config.filters,
        hidden: config.hidden,
        share_direction_weights: config.share_direction_weights,
        seed: 0,
    };

    let models: Vec<(usize, Model<f64>)> = output
        .runs
        .iter()
        .map(|run| {
            let mut m = Model::<f64>::new(cfg.clone());
            let wide: Vec<f64> = run.params.iter().map(|&v| v as f64).collect();
            m.set_param_vec(&wide);
            (run.fold, m)
        })
        .collect();
    let fold_of = output.plan.fold_of();
    let fold_of: HashMap<String, usize> =
        fold_of.into_iter().map(|(k, v)| (k.to_string(), v)).collect();

    // The first n_attr_sets sets of the full stream: set draws are
    // sequential per participant, so a shorter collection is a prefix of
    // the evaluation collection.
    let collection = make_sets(store, config.set_size, n_attr_sets, config.seed)?;

    let scored: HashMap<&str, ()> = output
        .table
        .rows
        .iter()
        .map(|r| (r.participant_id.as_str(), ()))
        .collect();

    let mut results: Vec<Vec<SampleAttribution>> = collection
        .participants
        .par_iter()
        .filter(|p| scored.contains_key(p.participant_id.as_str()))
        .map(|p| -> Result<Vec<SampleAttribution>> {
            let mut samples = pair_sets(p, 0)?;
            ablate_samples(&mut samples, ablation)?;
            let own: Vec<&Model<f64>> = match fold_of.get(&p.participant_id) {
                Some(&f) => models.iter().filter(|(mf, _)| *mf == f).map(|(_, m)| m).collect(),
                None => models.iter().map(|(_, m)| m).collect(),
            };
            if own.is_empty() {
                return Err(Error::Stats(format!(
                    "no trained models for participant {}",
                    p.participant_id
                )));
            }
            let mut ws = Workspace::new(&cfg);
            let mut out = Vec::with_capacity(samples.len());
            for input in &samples {
                let sample = to_model_sample::<f64>(input);
                let mut mean: [Vec<f64>; 4] = std::array::from_fn(|_| vec![0.0; t_len]);
                for m in &own {
                    let mut m = (*m).clone();
                    let ig = integrated_gradients(&mut m, &mut ws, &sample, steps)?;
                    let series = trial_mean_series(&ig.attributions, &cfg);
                    for c in 0..4 {
                        for (acc, v) in mean[c].iter_mut().zip(&series[c]) {
                            *acc += v / own.len() as f64;
                        }
                    }
                }
                out.push(SampleAttribution {
                    participant_id: p.participant_id.clone(),
                    series: mean,
                });
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;
    results.sort_by(|a, b| {
        a.first()
            .map(|s| s.participant_id.as_str())
            .cmp(&b.first().map(|s| s.participant_id.as_str()))
    });
    Ok(results.into_iter().flatten().collect())
}

/// Mean |weight| of the first dense layer over hidden units, split into
/// the four input channels in [`CHANNELS`] order: series c covers input
/// positions c*T .. (c+1)*T.
pub fn fc_weight_readout<T: Scalar>(model: &Model<T>) -> [Vec<f64>; 4] {
    let t4 = 4 * model.cfg.t_len;
    let h = model.cfg.hidden;
    let mut mean_abs = vec![0.0f64; t4];
    for j in 0..h {
        for (acc, w) in mean_abs.iter_mut().zip(&model.fc1.w[j * t4..][..t4]) {
            *acc += w.to_f64().unwrap().abs() / h as f64;
        }
    }
    std::array::from_fn(|c| mean_abs[c * model.cfg.t_len..][..model.cfg.t_len].to_vec())
}

pub fn readout_to_csv(series: &[Vec<f64>; 4]) -> String {
    let mut out = String::from("condition,direction,t,mean_abs_weight\n");
    for (c, (condition, direction)) in CHANNELS.into_iter().enumerate() {
        for (t, v) in series[c].iter().enumerate() {
            out.push_str(&format!("{condition},{},{t},{v}\n", direction.as_str()));
        }
    }
    out
}

/// Normalized 2D histogram of pre-response gaze for one group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityMap {
    pub group: Group,
    pub bins_x: usize,
    pub bins_y: usize,
    /// Row-major, index `y * bins_x + x`; sums to 1.
    pub values: Vec<f64>,
    pub n_trials: usize,
}

impl DensityMap {
    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.bins_x + x]
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for y in 0..self.bins_y {
            let row: Vec<String> = (0..self.bins_x)
                .map(|x| format!("{}", self.at(x, y)))
                .collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }

    /// Keep the central `keep_fraction` of each axis and renormalize;
    /// used for the zoomed display variant.
    pub fn central_crop(&self, keep_fraction: f64) -> Result<DensityMap> {
        if !(0.0 < keep_fraction && keep_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "crop fraction {keep_fraction} outside (0, 1]"
            )));
        }
        let keep_x = ((self.bins_x as f64 * keep_fraction).round() as usize).max(1);
        let keep_y = ((self.bins_y as f64 * keep_fraction).round() as usize).max(1);
        let x0 = (self.bins_x - keep_x) / 2;
        let y0 = (self.bins_y - keep_y) / 2;
        let mut values = Vec::with_capacity(keep_x * keep_y);
        for y in y0..y0 + keep_y {
            for x in x0..x0 + keep_x {
                values.push(self.at(x, y));
            }
        }
        let total: f64 = values.iter().sum();
        if total > 0.0 {
            for v in values.iter_mut() {
                *v /= total;
            }
        }
        Ok(DensityMap {
            group: self.group,
            bins_x: keep_x,
            bins_y: keep_y,
            values,
            n_trials: self.n_trials,
        })
    }
}

fn bin_of(v: f64, bins: usize) -> usize {
    // v in [-1, 1]; the right edge folds into the last bin.
    (((v + 1.0) / 2.0 * bins as f64) as usize).min(bins - 1)
}

/// Per-group fixation density over the last `window_ms` before each
/// response, for trials of the given sentiment. Each subject contributes
/// a normalized histogram; subjects average within group (in id order, so
/// the result is independent of cohort ordering), and the group map is
/// normalized to sum 1.
pub fn fixation_density(
    cohort: &Cohort,
    geom: &ScreenGeometry,
    window_ms: f64,
    condition: Sentiment,
    bins_x: usize,
    bins_y: usize,
) -> Result<Vec<DensityMap>> {
    if window_ms <= 0.0 {
        return Err(Error::Config(format!("window_ms {window_ms} must be positive")));
    }
    if bins_x == 0 || bins_y == 0 {
        return Err(Error::Config("density map needs at least 1x1 bins".into()));
    }
    let mut per_subject: Vec<(String, Group, Vec<f64>, usize)> = cohort
        .participants
        .par_iter()
        .map(|p| -> Result<Option<(String, Group, Vec<f64>, usize)>> {
            let clean = preprocess_participant(&p.recording, geom)?;
            let mut hist = vec![0.0f64; bins_x * bins_y];
            let mut count = 0usize;
            let mut n_trials = 0usize;
            for t in &p.trials {
                if !t.is_retained() || t.sentiment != condition {
                    continue;
                }
                let Some(rt) = t.response_time_ms else { continue };
                let i1 = ((rt - clean.t0_ms) / 4.0).round() as i64;
                let i0 = ((rt - window_ms - clean.t0_ms) / 4.0).round() as i64;
                let i0 = i0.max(0) as usize;
                let i1 = (i1.max(0) as usize).min(clean.len());
                if i0 >= i1 {
                    continue;
                }
                n_trials += 1;
                for i in i0..i1 {
                    hist[bin_of(clean.y[i] as f64, bins_y) * bins_x
                        + bin_of(clean.x[i] as f64, bins_x)] += 1.0;
                    count += 1;
                }
            }
            if count == 0 {
                return Ok(None);
            }
            for v in hist.iter_mut() {
                *v /= count as f64;
            }
            Ok(Some((p.participant.id.clone(), p.participant.group, hist, n_trials)))
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    per_subject.sort_by(|a, b| a.0.cmp(&b.0));

    let mut maps = Vec::new();
    for group in Group::ALL {
        let members: Vec<&(String, Group, Vec<f64>, usize)> =
            per_subject.iter().filter(|(_, g, _, _)| *g == group).collect();
        if members.is_empty() {
            continue;
        }
        let mut values = vec![0.0f64; bins_x * bins_y];
        let mut n_trials = 0usize;
        for (_, _, hist, nt) in &members {
            n_trials += nt;
            for (acc, v) in values.iter_mut().zip(hist) {
                *acc += v;
            }
        }
        let total: f64 = values.iter().sum();
        for v in values.iter_mut() {
            *v /= total;
        }
        maps.push(DensityMap {
            group,
            bins_x,
            bins_y,
            values,
            n_trials,
        });
    }
    Ok(maps)
}
