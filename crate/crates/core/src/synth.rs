//! Synthetic cohort generator with plantable group effects.
//!
//! Baseline gaze is a mean-reverting (Ornstein-Uhlenbeck) jitter around
//! the screen center with small word-onset micro-saccades. Group structure
//! enters through three controlled channels:
//!
//! * a pre-response drift bump of group-specific amplitude on the effect
//!   channel, inside a window anchored to the button press (group S gets a
//!   stronger and earlier bump),
//! * group-specific endorsement probabilities, which also steer the
//!   pre-press saccade toward the agree or disagree button,
//! * nothing else: blink rate, miss rate, response-time law and noise are
//!   identical across groups, so an all-zero spec with flat endorsements
//!   yields a cohort that is exchangeable across group labels.
//!
//! Everything is a pure function of (seed, spec); the same pair produces a
//! byte-identical on-disk corpus.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{
    self, Cohort, Gender, GazeEvent, GazeRecording, GazeSample, Group, Participant,
    ParticipantData, Presentation, Response, ScreenGeometry, Sentiment, TrialRecord,
};
use crate::seed::SeedPath;
use crate::{Error, Result};

pub const SAMPLE_RATE_HZ: f64 = 500.0;
const DT_MS: f64 = 2.0;
const DT_S: f64 = 0.002;

/// Mean-reversion rate of the baseline jitter, 1/s.
const OU_THETA: f64 = 10.0;
/// Diffusion of the baseline jitter, normalized units per sqrt(second).
const OU_SIGMA: f64 = 0.05;

const WORD_MS: f64 = 300.0;
const LEAD_IN_MS: f64 = 1000.0;
const INTER_TRIAL_MS: f64 = 600.0;
const MISS_RATE: f64 = 0.02;
const BLINK_RATE_PER_S: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EffectChannel {
    X,
    Y,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EffectCondition {
    Negative,
    PositiveNeutral,
    Both,
}

impl EffectCondition {
    fn applies_to(self, sentiment: Sentiment) -> bool {
        match self {
            EffectCondition::Negative => sentiment == Sentiment::Negative,
            EffectCondition::PositiveNeutral => sentiment == Sentiment::PositiveNeutral,
            EffectCondition::Both => true,
        }
    }
}

/// All planted structure. `amplitude_by_group` and `endorsement_prob` are
/// indexed [C, D, S]; endorsement is further split [negative,
/// positive_neutral].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectSpec {
    pub effect_channel: EffectChannel,
    pub effect_condition: EffectCondition,
    /// Bump window in ms relative to the button press.
    pub effect_window_ms: (f64, f64),
    pub amplitude_by_group: [f64; 3],
    /// Participant-level spread of the bump amplitude around the group
    /// mean. Zero removes between-subject heterogeneity.
    pub subject_amplitude_sd: f64,
    /// Trial-level spread of the bump amplitude around the participant
    /// mean. Zero makes every trial carry the identical bump.
    pub amplitude_trial_sd: f64,
    /// Group S's bump window is shifted this much (negative = earlier).
    pub s_window_shift_ms: f64,
    /// P(agree) per group and sentiment.
    pub endorsement_prob: [[f64; 2]; 3],
    /// Probability that a press is preceded by a saccade to the chosen
    /// button. At 1 every press lands on the AOI; moderate values make
    /// the fixation baseline an imperfect proxy for the choice.
    pub aoi_pull: f64,
}

impl Default for EffectSpec {
    fn default() -> Self {
        EffectSpec {
            effect_channel: EffectChannel::X,
            effect_condition: EffectCondition::Negative,
            effect_window_ms: (-200.0, 0.0),
            amplitude_by_group: [0.0, 0.15, 0.25],
            subject_amplitude_sd: 0.0,
            amplitude_trial_sd: 0.0,
            s_window_shift_ms: -300.0,
            endorsement_prob: [[0.15, 0.6], [0.55, 0.6], [0.7, 0.6]],
            aoi_pull: 1.0,
        }
    }
}

impl EffectSpec {
    /// A spec with no group structure at all: zero amplitudes and flat
    /// endorsements, the null cohort of the statistics checks.
    pub fn null() -> Self {
        EffectSpec {
            amplitude_by_group: [0.0; 3],
            endorsement_prob: [[0.5, 0.5]; 3],
            ..EffectSpec::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for row in &self.endorsement_prob {
            for &p in row {
                if !(0.0..=1.0).contains(&p) {
                    return Err(Error::Config(format!(
                        "endorsement probability {p} outside [0, 1]"
                    )));
                }
            }
        }
        for &a in &self.amplitude_by_group {
            if !a.is_finite() {
                return Err(Error::Config("non-finite effect amplitude".into()));
            }
        }
        if self.effect_window_ms.0 >= self.effect_window_ms.1 {
            return Err(Error::Config(format!(
                "empty effect window {:?}",
                self.effect_window_ms
            )));
        }
        if !(0.0..=1.0).contains(&self.aoi_pull) {
            return Err(Error::Config(format!(
                "aoi_pull {} outside [0, 1]",
                self.aoi_pull
            )));
        }
        if self.subject_amplitude_sd < 0.0 || self.amplitude_trial_sd < 0.0 {
            return Err(Error::Config("negative amplitude spread".into()));
        }
        Ok(())
    }
}

/// Full recipe for one synthetic cohort.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortRecipe {
    /// Participants per group, [C, D, S].
    pub n_per_group: [usize; 3],
    /// Total sentences; must be even (paired valence: half negative, half
    /// positive_neutral). Each sentence is shown twice.
    pub n_sentences: usize,
    pub seed: u64,
    pub spec: EffectSpec,
}

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; one value per call keeps the draw count predictable.
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

struct SentencePool {
    /// Word count per sentence.
    words: Vec<usize>,
    sentiments: Vec<Sentiment>,
}

fn build_sentences(n_sentences: usize, master_seed: u64) -> SentencePool {
    let mut rng = SeedPath::new(master_seed)
        .push_str("synth")
        .push_str("sentences")
        .rng();
    let words = (0..n_sentences).map(|_| rng.gen_range(5..=9)).collect();
    // Valence pairs: even index negative, odd positive/neutral.
    let sentiments = (0..n_sentences)
        .map(|k| {
            if k % 2 == 0 {
                Sentiment::Negative
            } else {
                Sentiment::PositiveNeutral
            }
        })
        .collect();
    SentencePool { words, sentiments }
}

struct TrialPlan {
    sentence: usize,
    presentation: Presentation,
    start_ms: f64,
    final_word_onset_ms: f64,
}

/// Smoothstep ramp from 0 at u=0 to 1 at u=1.
fn smoothstep(u: f64) -> f64 {
    let u = u.clamp(0.0, 1.0);
    u * u * (3.0 - 2.0 * u)
}

/// Raised-cosine bump: 0 at both edges, 1 in the middle.
fn raised_cosine(u: f64) -> f64 {
    if !(0.0..=1.0).contains(&u) {
        0.0
    } else {
        0.5 * (1.0 - (std::f64::consts::TAU * u).cos())
    }
}

fn generate_participant(
    id: &str,
    group: Group,
    gender: Gender,
    pool: &SentencePool,
    spec: &EffectSpec,
    master_seed: u64,
) -> ParticipantData {
    let mut rng = SeedPath::new(master_seed)
        .push_str("synth")
        .push_str("participant")
        .push_str(id)
        .rng();

    // Participant-level effect amplitude.
    let amplitude = spec.amplitude_by_group[group.index()]
        + spec.subject_amplitude_sd * standard_normal(&mut rng);

    // Presentation order: both passes over the sentence list, each pass
    // shuffled independently.
    let n = pool.words.len();
    let mut order: Vec<(usize, Presentation)> = Vec::with_capacity(2 * n);
    for pres in [Presentation::First, Presentation::Second] {
        let mut pass: Vec<usize> = (0..n).collect();
        for i in (1..pass.len()).rev() {
            let j = rng.gen_range(0..=i);
            pass.swap(i, j);
        }
        order.extend(pass.into_iter().map(|s| (s, pres)));
    }

    // Chronological slots.
    let mut plans = Vec::with_capacity(order.len());
    let mut cursor = LEAD_IN_MS;
    for (sentence, presentation) in order {
        let w = pool.words[sentence];
        let final_onset = cursor + (w - 1) as f64 * WORD_MS;
        // Final word 600 ms + 300 ms gap + 2000 ms response window.
        plans.push(TrialPlan {
            sentence,
            presentation,
            start_ms: cursor,
            final_word_onset_ms: final_onset,
        });
        cursor = final_onset + 600.0 + 300.0 + 2000.0 + INTER_TRIAL_MS;
    }
    let horizon_ms = cursor + 1000.0;
    let n_samples = (horizon_ms / DT_MS).ceil() as usize;

    // Baseline jitter, both axes.
    let decay = 1.0 - OU_THETA * DT_S;
    let diffusion = OU_SIGMA * DT_S.sqrt();
    let mut x = vec![0.0f64; n_samples];
    let mut y = vec![0.0f64; n_samples];
    for i in 1..n_samples {
        x[i] = x[i - 1] * decay + diffusion * standard_normal(&mut rng);
        y[i] = y[i - 1] * decay + diffusion * standard_normal(&mut rng);
    }

    // Trials: responses, effect bumps, word pulses.
    let geom = ScreenGeometry::default();
    let mut trials = Vec::with_capacity(plans.len());
    for (k, plan) in plans.iter().enumerate() {
        let sentiment = pool.sentiments[plan.sentence];
        let words = pool.words[plan.sentence];

        // Word-onset micro-saccades: small decaying pulse on x.
        for w in 0..words {
            let onset = plan.start_ms + w as f64 * WORD_MS;
            let amp = 0.012 * rng.gen_range(0.5..1.5)
                * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            let i0 = (onset / DT_MS) as usize;
            let i1 = ((onset + 200.0) / DT_MS) as usize;
            for i in i0..i1.min(n_samples) {
                let dt = (i as f64 * DT_MS) - onset;
                x[i] += amp * (-dt / 40.0).exp();
            }
        }

        let missed = rng.gen_bool(MISS_RATE);
        let agree_p = spec.endorsement_prob[group.index()][match sentiment {
            Sentiment::Negative => 0,
            Sentiment::PositiveNeutral => 1,
        }];
        let agree = rng.gen_bool(agree_p);
        // Response latency after final-word onset: clipped lognormal,
        // median 800 ms, sigma_log 0.4, clipped to [200, 2300].
        let latency = (800.0 * (0.4 * standard_normal(&mut rng)).exp()).clamp(200.0, 2300.0);

        let (response, response_time_ms) = if missed {
            (Response::Missed, None)
        } else {
            let rt = plan.final_word_onset_ms + latency;
            // Pre-press saccade toward the chosen button, on a random
            // subset of presses.
            let saccade = rng.gen_bool(spec.aoi_pull);
            if saccade {
                let target = if agree {
                    geom.agree_aoi.center()
                } else {
                    geom.disagree_aoi.center()
                };
                let ramp_start = rt - 300.0;
                let i0 = (ramp_start / DT_MS).max(0.0) as usize;
                let i1 = ((rt / DT_MS) as usize + 1).min(n_samples);
                for i in i0..i1 {
                    let u = ((i as f64 * DT_MS) - ramp_start) / 300.0;
                    let s = smoothstep(u);
                    x[i] += target.0 * s;
                    y[i] += target.1 * s;
                }
            }

            // The planted drift bump.
            if spec.effect_condition.applies_to(sentiment) {
                let shift = if group == Group::S {
                    spec.s_window_shift_ms
                } else {
                    0.0
                };
                let (w0, w1) = (
                    rt + spec.effect_window_ms.0 + shift,
                    rt + spec.effect_window_ms.1 + shift,
                );
                let a_trial = amplitude + spec.amplitude_trial_sd * standard_normal(&mut rng);
                let j0 = (w0 / DT_MS).max(0.0) as usize;
                let j1 = ((w1 / DT_MS).ceil() as usize).min(n_samples);
                let target_axis = match spec.effect_channel {
                    EffectChannel::X => &mut x,
                    EffectChannel::Y => &mut y,
                };
                for i in j0..j1 {
                    let u = ((i as f64 * DT_MS) - w0) / (w1 - w0);
                    target_axis[i] += a_trial * raised_cosine(u);
                }
            }
            (
                if agree {
                    Response::Agree
                } else {
                    Response::Disagree
                },
                Some(rt),
            )
        };

        trials.push(TrialRecord {
            trial_id: format!("{id}-t{k:04}"),
            sentence_id: format!("sent{:03}", plan.sentence),
            presentation: plan.presentation,
            sentiment,
            final_word_onset_ms: plan.final_word_onset_ms,
            response_time_ms,
            response,
            excluded: None,
        });
    }

    // Blinks: Poisson arrivals, 100-250 ms each.
    let mut events = Vec::new();
    let mut t = 0.0f64;
    let horizon_s = horizon_ms / 1000.0;
    loop {
        let u: f64 = rng.gen_range(f64::EPSILON..1.0);
        t += -u.ln() / BLINK_RATE_PER_S;
        if t >= horizon_s {
            break;
        }
        let start = t * 1000.0;
        let end = (start + rng.gen_range(100.0..250.0)).min(horizon_ms - DT_MS);
        if end > start {
            events.push(GazeEvent {
                kind: corpus::EventKind::Blink,
                start_ms: start,
                end_ms: end,
            });
        }
        t = end / 1000.0;
    }

    // Assemble pixel-space samples; blink samples are marked invalid.
    let mut samples = Vec::with_capacity(n_samples);
    for i in 0..n_samples {
        let t_ms = i as f64 * DT_MS;
        let valid = !events
            .iter()
            .any(|e| t_ms >= e.start_ms && t_ms <= e.end_ms);
        samples.push(GazeSample {
            t_ms,
            x_px: (960.0 + 960.0 * x[i]).clamp(0.0, 1920.0),
            y_px: (540.0 + 540.0 * y[i]).clamp(0.0, 1080.0),
            valid,
        });
    }

    ParticipantData {
        participant: Participant {
            id: id.to_string(),
            group,
            gender,
            phq9: None,
            sis: None,
            gad7: None,
        },
        recording: GazeRecording {
            participant_id: id.to_string(),
            sample_rate_hz: SAMPLE_RATE_HZ,
            samples,
            events,
        },
        trials,
    }
}

impl CohortRecipe {
    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        if self.n_sentences == 0 || self.n_sentences % 2 != 0 {
            return Err(Error::Config(format!(
                "n_sentences must be positive and even (valence pairs), got {}",
                self.n_sentences
            )));
        }
        Ok(())
    }
}

/// Generate a cohort in memory. Deterministic in the recipe.
pub fn generate_cohort(recipe: &CohortRecipe) -> Result<Cohort> {
    recipe.validate()?;
    let pool = build_sentences(recipe.n_sentences, recipe.seed);
    let mut participants = Vec::new();
    for (gi, group) in Group::ALL.iter().enumerate() {
        for k in 0..recipe.n_per_group[gi] {
            let id = format!("{}{k:03}", group.to_string().to_lowercase());
            let gender = if k % 2 == 0 { Gender::F } else { Gender::M };
            participants.push(generate_participant(
                &id,
                *group,
                gender,
                &pool,
                &recipe.spec,
                recipe.seed,
            ));
        }
    }
    Ok(Cohort { participants })
}

/// Generate and write the corpus plus a provenance record.
pub fn generate_to_dir(dir: &std::path::Path, recipe: &CohortRecipe) -> Result<Cohort> {
    let cohort = generate_cohort(recipe)?;
    corpus::write_cohort(dir, &cohort)?;
    let provenance_path = dir.join("provenance.json");
    let json = serde_json::to_string_pretty(&describe_cohort(recipe))
        .map_err(|e| Error::Config(format!("provenance serialization: {e}")))?;
    std::fs::write(&provenance_path, json).map_err(|e| Error::io(&provenance_path, e))?;
    Ok(cohort)
}

/// Everything needed to regenerate the cohort.
pub fn describe_cohort(recipe: &CohortRecipe) -> serde_json::Value {
    serde_json::json!({
        "generator": "synthetic-gaze-cohort",
        "sample_rate_hz": SAMPLE_RATE_HZ,
        "ou_theta_per_s": OU_THETA,
        "ou_sigma_per_sqrt_s": OU_SIGMA,
        "miss_rate": MISS_RATE,
        "blink_rate_per_s": BLINK_RATE_PER_S,
        "recipe": recipe,
    })
}
