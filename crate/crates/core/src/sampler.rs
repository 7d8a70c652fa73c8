//! Bootstrap set construction: the model's input samples.
//!
//! Each input sample pairs one negative-condition trial set with one
//! positive-condition trial set from the same participant. Sets are drawn
//! uniformly with replacement from the participant's segments, and the
//! whole draw is a pure function of (master seed, participant id,
//! sentiment), so a set collection never needs to be stored to be
//! reproduced; the manifest CSV written by [`save_set_manifest`] records
//! the drawn trial ids for audit.

use rand::Rng;

use crate::corpus::{Gender, Group, Sentiment};
use crate::nnet::{self, Scalar};
use crate::seed::SeedPath;
use crate::segment::{SegmentStore, TrialSegment};
use crate::{Error, Result};

/// One bootstrapped set: `set_size` trials of one sentiment, stored
/// row-major as [trial][time] per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialSet {
    pub participant_id: String,
    pub sentiment: Sentiment,
    pub t_len: usize,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub source_ids: Vec<String>,
}

impl TrialSet {
    pub fn set_size(&self) -> usize {
        self.source_ids.len()
    }
}

/// Paired input for the two-branch model.
#[derive(Debug, Clone, PartialEq)]
pub struct InputSample {
    pub participant_id: String,
    pub negative: TrialSet,
    pub positive: TrialSet,
    pub label: u8,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParticipantSets {
    pub participant_id: String,
    pub group: Group,
    pub gender: Gender,
    pub negative: Vec<TrialSet>,
    pub positive: Vec<TrialSet>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SetCollection {
    pub set_size: usize,
    pub n_sets: usize,
    pub seed: u64,
    pub participants: Vec<ParticipantSets>,
    /// Participants that could not be sampled, with the reason.
    pub skipped: Vec<(String, String)>,
}

/// The index draws behind [`make_sets`], exposed so large runs can
/// assemble model inputs on the fly instead of materializing every set.
/// Same (seed, participant, sentiment) always yields the same indices.
pub fn draw_set_indices(
    n_sources: usize,
    participant_id: &str,
    sentiment: Sentiment,
    set_size: usize,
    n_sets: usize,
    master_seed: u64,
) -> Vec<Vec<u32>> {
    let mut rng = SeedPath::new(master_seed)
        .push_str("bootstrap-sets")
        .push_str(participant_id)
        .push_str(match sentiment {
            Sentiment::Negative => "negative",
            Sentiment::PositiveNeutral => "positive_neutral",
        })
        .rng();
    (0..n_sets)
        .map(|_| {
            (0..set_size)
                .map(|_| rng.gen_range(0..n_sources) as u32)
                .collect()
        })
        .collect()
}

fn draw_sets(
    segments: &[TrialSegment],
    participant_id: &str,
    sentiment: Sentiment,
    set_size: usize,
    n_sets: usize,
    master_seed: u64,
) -> Vec<TrialSet> {
    let t_len = segments[0].t_len();
    let index_sets = draw_set_indices(
        segments.len(),
        participant_id,
        sentiment,
        set_size,
        n_sets,
        master_seed,
    );
    index_sets
        .into_iter()
        .map(|indices| {
            let mut x = Vec::with_capacity(set_size * t_len);
            let mut y = Vec::with_capacity(set_size * t_len);
            let mut source_ids = Vec::with_capacity(set_size);
            for k in indices {
                let seg = &segments[k as usize];
                x.extend_from_slice(&seg.x);
                y.extend_from_slice(&seg.y);
                source_ids.push(seg.trial_id.clone());
            }
            TrialSet {
                participant_id: participant_id.to_string(),
                sentiment,
                t_len,
                x,
                y,
                source_ids,
            }
        })
        .collect()
}

/// Draw `n_sets` sets of `set_size` trials per participant and sentiment,
/// uniformly with replacement. Participants with zero segments in either
/// sentiment are skipped with a reason.
pub fn make_sets(
    store: &SegmentStore,
    set_size: usize,
    n_sets: usize,
    master_seed: u64,
) -> Result<SetCollection> {
    if set_size == 0 || n_sets == 0 {
        return Err(Error::Sampler(format!(
            "set_size and n_sets must be positive, got {set_size} and {n_sets}"
        )));
    }
    let mut participants = Vec::new();
    let mut skipped = Vec::new();
    for p in &store.participants {
        let missing: Vec<&str> = [
            (p.negative.is_empty(), "negative"),
            (p.positive.is_empty(), "positive_neutral"),
        ]
        .iter()
        .filter(|(empty, _)| *empty)
        .map(|&(_, name)| name)
        .collect();
        if !missing.is_empty() {
            skipped.push((
                p.participant_id.clone(),
                format!("no segments in sentiment {}", missing.join(", ")),
            ));
            continue;
        }
        participants.push(ParticipantSets {
            participant_id: p.participant_id.clone(),
            group: p.group,
            gender: p.gender,
            negative: draw_sets(
                &p.negative,
                &p.participant_id,
                Sentiment::Negative,
                set_size,
                n_sets,
                master_seed,
            ),
            positive: draw_sets(
                &p.positive,
                &p.participant_id,
                Sentiment::PositiveNeutral,
                set_size,
                n_sets,
                master_seed,
            ),
        });
    }
    Ok(SetCollection {
        set_size,
        n_sets,
        seed: master_seed,
        participants,
        skipped,
    })
}

/// Pair the i-th negative set with the i-th positive set and stamp the
/// class label (the caller derives it from the active task; zero-shot
/// participants get a placeholder that training never reads).
pub fn pair_sets(sets: &ParticipantSets, label: u8) -> Result<Vec<InputSample>> {
    if sets.negative.len() != sets.positive.len() {
        return Err(Error::Sampler(format!(
            "participant {}: {} negative sets vs {} positive sets",
            sets.participant_id,
            sets.negative.len(),
            sets.positive.len()
        )));
    }
    Ok(sets
        .negative
        .iter()
        .zip(sets.positive.iter())
        .map(|(n, p)| InputSample {
            participant_id: sets.participant_id.clone(),
            negative: n.clone(),
            positive: p.clone(),
            label,
        })
        .collect())
}

/// Input ablations. The zero-fill modes blank one branch or one direction
/// channel; `shuffled_sentiment` is not a sample transform at all, it
/// redeals segments across conditions before set construction (see
/// [`shuffle_sentiments`]).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationMode {
    None,
    NegativeOnly,
    PositiveOnly,
    XOnly,
    YOnly,
    ShuffledSentiment,
}

impl AblationMode {
    pub const ALL: [AblationMode; 6] = [
        AblationMode::None,
        AblationMode::NegativeOnly,
        AblationMode::PositiveOnly,
        AblationMode::XOnly,
        AblationMode::YOnly,
        AblationMode::ShuffledSentiment,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AblationMode::None => "none",
            AblationMode::NegativeOnly => "negative_only",
            AblationMode::PositiveOnly => "positive_only",
            AblationMode::XOnly => "x_only",
            AblationMode::YOnly => "y_only",
            AblationMode::ShuffledSentiment => "shuffled_sentiment",
        }
    }
}

impl std::str::FromStr for AblationMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        AblationMode::ALL
            .iter()
            .copied()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown ablation mode {s:?}"))
    }
}

/// Apply a zero-fill ablation in place. `None` leaves samples untouched;
/// `shuffled_sentiment` is rejected here because it must run before set
/// construction.
pub fn ablate_samples(samples: &mut [InputSample], mode: AblationMode) -> Result<()> {
    match mode {
        AblationMode::None => {}
        AblationMode::NegativeOnly => {
            for s in samples.iter_mut() {
                s.positive.x.fill(0.0);
                s.positive.y.fill(0.0);
            }
        }
        AblationMode::PositiveOnly => {
            for s in samples.iter_mut() {
                s.negative.x.fill(0.0);
                s.negative.y.fill(0.0);
            }
        }
        AblationMode::XOnly => {
            for s in samples.iter_mut() {
                s.negative.y.fill(0.0);
                s.positive.y.fill(0.0);
            }
        }
        AblationMode::YOnly => {
            for s in samples.iter_mut() {
                s.negative.x.fill(0.0);
                s.positive.x.fill(0.0);
            }
        }
        AblationMode::ShuffledSentiment => {
            return Err(Error::Sampler(
                "shuffled_sentiment redeals segments before set construction; \
                 apply shuffle_sentiments to the segment store instead"
                    .into(),
            ));
        }
    }
    Ok(())
}

/// Pool each participant's segments across sentiments and redeal them into
/// pseudo-conditions of the original sizes. Trial content is untouched;
/// only the condition assignment is destroyed.
pub fn shuffle_sentiments(store: &SegmentStore, master_seed: u64) -> SegmentStore {
    let mut out = store.clone();
    for p in &mut out.participants {
        let n_neg = p.negative.len();
        let mut pool: Vec<TrialSegment> = p.negative.drain(..).chain(p.positive.drain(..)).collect();
        let mut rng = SeedPath::new(master_seed)
            .push_str("shuffle-sentiment")
            .push_str(&p.participant_id)
            .rng();
        // Fisher-Yates on the pooled trials.
        for i in (1..pool.len()).rev() {
            let j = rng.gen_range(0..=i);
            pool.swap(i, j);
        }
        for (k, mut seg) in pool.into_iter().enumerate() {
            if k < n_neg {
                seg.sentiment = Sentiment::Negative;
                p.negative.push(seg);
            } else {
                seg.sentiment = Sentiment::PositiveNeutral;
                p.positive.push(seg);
            }
        }
    }
    out
}

/// Convert to the model's input layout: per branch a (2, set_size, t_len)
/// array flattened as [direction][trial][time] with x first.
pub fn to_model_sample<T: Scalar>(sample: &InputSample) -> nnet::Sample<T> {
    fn fill<T: Scalar>(set: &TrialSet) -> Vec<T> {
        set.x
            .iter()
            .chain(set.y.iter())
            .map(|&v| T::from_f64(v).expect("finite segment value"))
            .collect()
    }
    nnet::Sample {
        neg: fill(&sample.negative),
        pos: fill(&sample.positive),
    }
}

/// Audit manifest: one CSV row per drawn trial slot.
pub fn save_set_manifest(path: &std::path::Path, collection: &SetCollection) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    let write_err = |e: csv::Error| Error::Parse {
        path: path.to_path_buf(),
        line: 0,
        message: e.to_string(),
    };
    w.write_record(["participant_id", "sentiment", "set_index", "slot", "source_id"])
        .map_err(write_err)?;
    for p in &collection.participants {
        for (sentiment, sets) in [
            (Sentiment::Negative, &p.negative),
            (Sentiment::PositiveNeutral, &p.positive),
        ] {
            for (i, set) in sets.iter().enumerate() {
                for (slot, id) in set.source_ids.iter().enumerate() {
                    w.write_record([
                        p.participant_id.as_str(),
                        &sentiment.to_string(),
                        &i.to_string(),
                        &slot.to_string(),
                        id,
                    ])
                    .map_err(write_err)?;
                }
            }
        }
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segment::{Alignment, ParticipantSegments};

    fn seg(id: &str, sentiment: Sentiment, t_len: usize, fill: f64) -> TrialSegment {
        TrialSegment {
            trial_id: id.to_string(),
            sentiment,
            alignment: Alignment::Response,
            x: vec![fill; t_len],
            y: vec![-fill; t_len],
        }
    }

    fn store_with(n_neg: usize, n_pos: usize, t_len: usize) -> SegmentStore {
        let negative = (0..n_neg)
            .map(|k| seg(&format!("n{k:03}"), Sentiment::Negative, t_len, k as f64))
            .collect();
        let positive = (0..n_pos)
            .map(|k| {
                seg(
                    &format!("p{k:03}"),
                    Sentiment::PositiveNeutral,
                    t_len,
                    1000.0 + k as f64,
                )
            })
            .collect();
        SegmentStore {
            alignment: Alignment::Response,
            trial_fraction: 1.0,
            participants: vec![ParticipantSegments {
                participant_id: "p01".into(),
                group: Group::C,
                gender: Gender::F,
                negative,
                positive,
            }],
            dropped: Vec::new(),
            thin_participants: Vec::new(),
        }
    }

    #[test]
    fn test_default_protocol_counts() {
        let store = store_with(148, 148, 10);
        let coll = make_sets(&store, 30, 200, 42).unwrap();
        let p = &coll.participants[0];
        assert_eq!(p.negative.len(), 200);
        assert_eq!(p.positive.len(), 200);
        for set in p.negative.iter().chain(p.positive.iter()) {
            assert_eq!(set.set_size(), 30);
            assert_eq!(set.x.len(), 30 * 10);
        }
        assert!(coll.skipped.is_empty());
    }

    #[test]
    fn test_single_segment_degenerates_to_copies() {
        let store = store_with(1, 1, 8);
        let coll = make_sets(&store, 30, 5, 42).unwrap();
        for set in &coll.participants[0].negative {
            assert!(set.source_ids.iter().all(|id| id == "n000"));
            assert!(set.x.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn test_same_seed_reproduces_draws() {
        let store = store_with(40, 35, 6);
        let a = make_sets(&store, 30, 20, 7).unwrap();
        let b = make_sets(&store, 30, 20, 7).unwrap();
        assert_eq!(a, b);
        let c = make_sets(&store, 30, 20, 8).unwrap();
        assert_ne!(
            a.participants[0].negative[0].source_ids,
            c.participants[0].negative[0].source_ids
        );
    }

    #[test]
    fn test_empty_sentiment_skips_participant() {
        let store = store_with(10, 0, 6);
        let coll = make_sets(&store, 30, 5, 1).unwrap();
        assert!(coll.participants.is_empty());
        assert_eq!(coll.skipped.len(), 1);
        assert!(coll.skipped[0].1.contains("positive_neutral"));
    }

    #[test]
    fn test_inclusion_frequency_is_uniform() {
        // 120 source trials, 200 sets of 30: expected count 50 per trial.
        // Chi-square goodness of fit over 119 degrees of freedom should
        // not reject uniformity at alpha = 0.01.
        let store = store_with(120, 120, 4);
        let coll = make_sets(&store, 30, 200, 42).unwrap();
        let mut counts = vec![0usize; 120];
        for set in &coll.participants[0].negative {
            for id in &set.source_ids {
                let k: usize = id[1..].parse().unwrap();
                counts[k] += 1;
            }
        }
        let expected = (200.0 * 30.0) / 120.0;
        let chi2: f64 = counts
            .iter()
            .map(|&c| {
                let d = c as f64 - expected;
                d * d / expected
            })
            .sum();
        use statrs::distribution::{ChiSquared, ContinuousCDF};
        let critical = ChiSquared::new(119.0).unwrap().inverse_cdf(0.99);
        assert!(
            chi2 < critical,
            "chi2 {chi2:.1} exceeds critical {critical:.1}"
        );
    }

    #[test]
    fn test_pair_sets_stamps_labels_and_checks_counts() {
        let store = store_with(20, 20, 4);
        let coll = make_sets(&store, 10, 6, 3).unwrap();
        let samples = pair_sets(&coll.participants[0], 1).unwrap();
        assert_eq!(samples.len(), 6);
        assert!(samples.iter().all(|s| s.label == 1));
        assert!(samples
            .iter()
            .all(|s| s.negative.sentiment == Sentiment::Negative
                && s.positive.sentiment == Sentiment::PositiveNeutral));

        let mut broken = coll.participants[0].clone();
        broken.positive.pop();
        assert!(matches!(pair_sets(&broken, 0), Err(Error::Sampler(_))));
    }

    #[test]
    fn test_zero_fill_ablations() {
        let store = store_with(5, 5, 4);
        let coll = make_sets(&store, 3, 2, 9).unwrap();
        let base = pair_sets(&coll.participants[0], 0).unwrap();

        let mut s = base.clone();
        ablate_samples(&mut s, AblationMode::XOnly).unwrap();
        for (a, b) in s.iter().zip(base.iter()) {
            assert!(a.negative.y.iter().all(|&v| v == 0.0));
            assert!(a.positive.y.iter().all(|&v| v == 0.0));
            assert_eq!(a.negative.x, b.negative.x);
            assert_eq!(a.positive.x, b.positive.x);
        }

        let mut s = base.clone();
        ablate_samples(&mut s, AblationMode::NegativeOnly).unwrap();
        for a in &s {
            assert!(a.positive.x.iter().all(|&v| v == 0.0));
            assert!(a.positive.y.iter().all(|&v| v == 0.0));
            assert!(a.negative.x.iter().any(|&v| v != 0.0));
        }

        let mut s = base.clone();
        ablate_samples(&mut s, AblationMode::YOnly).unwrap();
        for a in &s {
            assert!(a.negative.x.iter().all(|&v| v == 0.0));
            assert!(a.negative.y.iter().any(|&v| v != 0.0));
        }

        let mut s = base.clone();
        assert!(ablate_samples(&mut s, AblationMode::ShuffledSentiment).is_err());
        let mut s = base.clone();
        ablate_samples(&mut s, AblationMode::None).unwrap();
        assert_eq!(s, base);
    }

    #[test]
    fn test_shuffle_sentiments_preserves_pool() {
        let store = store_with(15, 10, 4);
        let shuffled = shuffle_sentiments(&store, 5);
        let p0 = &store.participants[0];
        let p1 = &shuffled.participants[0];
        assert_eq!(p1.negative.len(), 15);
        assert_eq!(p1.positive.len(), 10);
        let mut before: Vec<String> = p0
            .negative
            .iter()
            .chain(p0.positive.iter())
            .map(|s| s.trial_id.clone())
            .collect();
        let mut after: Vec<String> = p1
            .negative
            .iter()
            .chain(p1.positive.iter())
            .map(|s| s.trial_id.clone())
            .collect();
        before.sort();
        after.sort();
        assert_eq!(before, after);
        // The redeal must actually move trials across conditions.
        assert!(p1.negative.iter().any(|s| s.trial_id.starts_with('p')));
        // Relabeled sentiments are consistent with their new pool.
        assert!(p1.negative.iter().all(|s| s.sentiment == Sentiment::Negative));
        // Deterministic.
        assert_eq!(shuffle_sentiments(&store, 5), shuffled);
        let other = shuffle_sentiments(&store, 6);
        let ids = |p: &ParticipantSegments| -> Vec<String> {
            p.negative
                .iter()
                .chain(p.positive.iter())
                .map(|s| s.trial_id.clone())
                .collect()
        };
        assert_ne!(ids(&other.participants[0]), ids(&shuffled.participants[0]));
    }

    #[test]
    fn test_model_sample_layout() {
        let store = store_with(4, 4, 3);
        let coll = make_sets(&store, 2, 1, 11).unwrap();
        let samples = pair_sets(&coll.participants[0], 1).unwrap();
        let ms = to_model_sample::<f32>(&samples[0]);
        let (s_size, t_len) = (2, 3);
        assert_eq!(ms.neg.len(), 2 * s_size * t_len);
        // Direction-major: x trials then y trials; y = -x in the fixture.
        for trial in 0..s_size {
            for t in 0..t_len {
                let x = ms.neg[trial * t_len + t];
                let y = ms.neg[s_size * t_len + trial * t_len + t];
                assert_eq!(y, -x);
            }
        }
    }

    #[test]
    fn test_manifest_writes_all_slots() {
        let store = store_with(6, 6, 3);
        let coll = make_sets(&store, 4, 3, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sets.csv");
        save_set_manifest(&path, &coll).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        // Header + 2 sentiments x 3 sets x 4 slots.
        assert_eq!(text.lines().count(), 1 + 2 * 3 * 4);
        assert!(text.starts_with("participant_id,sentiment,set_index,slot,source_id"));
    }

    #[test]
    fn test_mode_names_roundtrip() {
        for mode in AblationMode::ALL {
            assert_eq!(mode.as_str().parse::<AblationMode>().unwrap(), mode);
        }
        assert!("bogus".parse::<AblationMode>().is_err());
    }
}
