//! Fixed-length trial windows cut from conditioned recordings under two
//! alignment strategies: locked to the final-word onset (reading) or
//! counted back from the button press (response).

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{Cohort, Gender, Group, Response, Sentiment, TrialRecord};
use crate::preprocess::CleanRecording;
use crate::{Error, Result};

/// Reading windows span [onset - 500 ms, onset + 900 ms) = 350 samples at
/// 250 Hz; response windows span [press - 1200 ms, press) = 300 samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Alignment {
    Reading,
    Response,
}

impl Alignment {
    pub fn t_len(self) -> usize {
        match self {
            Alignment::Reading => 350,
            Alignment::Response => 300,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Alignment::Reading => "reading",
            Alignment::Response => "response",
        }
    }
}

impl std::fmt::Display for Alignment {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Alignment {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "reading" => Ok(Alignment::Reading),
            "response" => Ok(Alignment::Response),
            v => Err(format!("unknown alignment {v:?}")),
        }
    }
}

/// Index of the onset sample inside a reading segment (500 ms at 250 Hz).
pub const READING_ONSET_INDEX: usize = 125;

#[derive(Debug, Clone, PartialEq)]
pub struct TrialSegment {
    pub trial_id: String,
    pub sentiment: Sentiment,
    pub alignment: Alignment,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

impl TrialSegment {
    pub fn t_len(&self) -> usize {
        self.x.len()
    }
}

/// Millisecond to sample index at 250 Hz: round((t - t0) / 4).
fn sample_index(clean: &CleanRecording, t_ms: f64) -> i64 {
    ((t_ms - clean.t0_ms) / 4.0).round() as i64
}

fn cut(
    clean: &CleanRecording,
    trial: &TrialRecord,
    alignment: Alignment,
    window_start_ms: f64,
) -> Result<TrialSegment> {
    let t_len = alignment.t_len();
    let start = sample_index(clean, window_start_ms);
    let end = start + t_len as i64;
    if start < 0 || end > clean.len() as i64 {
        return Err(Error::Segment {
            trial: trial.trial_id.clone(),
            message: format!(
                "{} window [{start}, {end}) outside recording of {} samples",
                alignment.as_str(),
                clean.len()
            ),
        });
    }
    let (a, b) = (start as usize, end as usize);
    Ok(TrialSegment {
        trial_id: trial.trial_id.clone(),
        sentiment: trial.sentiment,
        alignment,
        x: clean.x[a..b].to_vec(),
        y: clean.y[a..b].to_vec(),
    })
}

pub fn segment_reading(clean: &CleanRecording, trial: &TrialRecord) -> Result<TrialSegment> {
    cut(
        clean,
        trial,
        Alignment::Reading,
        trial.final_word_onset_ms - 500.0,
    )
}

pub fn segment_response(clean: &CleanRecording, trial: &TrialRecord) -> Result<TrialSegment> {
    if trial.response == Response::Missed || trial.response_time_ms.is_none() {
        return Err(Error::Segment {
            trial: trial.trial_id.clone(),
            message: "no response".into(),
        });
    }
    let rt = trial.response_time_ms.unwrap();
    cut(clean, trial, Alignment::Response, rt - 1200.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParticipantSegments {
    pub participant_id: String,
    pub group: Group,
    pub gender: Gender,
    pub negative: Vec<TrialSegment>,
    pub positive: Vec<TrialSegment>,
}

impl ParticipantSegments {
    pub fn of(&self, sentiment: Sentiment) -> &[TrialSegment] {
        match sentiment {
            Sentiment::Negative => &self.negative,
            Sentiment::PositiveNeutral => &self.positive,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentStore {
    pub alignment: Alignment,
    pub trial_fraction: f64,
    pub participants: Vec<ParticipantSegments>,
    /// (trial id, reason) for every trial that could not be segmented.
    pub dropped: Vec<(String, String)>,
    /// Participants left with under 30 segments in some sentiment; the
    /// sampler still works through replacement, but the warning is kept.
    pub thin_participants: Vec<String>,
}

/// Segment the chronologically first `ceil(fraction * N)` retained trials
/// of each participant. Trials whose window falls outside the recording
/// are dropped with a reason rather than failing the run.
pub fn segment_cohort(
    cohort: &Cohort,
    cleans: &[CleanRecording],
    alignment: Alignment,
    trial_fraction: f64,
) -> Result<SegmentStore> {
    if !(trial_fraction > 0.0 && trial_fraction <= 1.0) {
        return Err(Error::Config(format!(
            "trial_fraction must be in (0, 1], got {trial_fraction}"
        )));
    }
    let by_id: HashMap<&str, &CleanRecording> = cleans
        .iter()
        .map(|c| (c.participant_id.as_str(), c))
        .collect();

    let mut participants = Vec::with_capacity(cohort.len());
    let mut dropped = Vec::new();
    let mut thin = Vec::new();
    for p in &cohort.participants {
        let id = &p.participant.id;
        let clean = by_id.get(id.as_str()).ok_or_else(|| {
            Error::Dependency(format!("no preprocessed recording for participant {id}"))
        })?;

        let mut retained: Vec<&TrialRecord> = p.trials.iter().filter(|t| t.is_retained()).collect();
        retained.sort_by(|a, b| a.final_word_onset_ms.total_cmp(&b.final_word_onset_ms));
        let keep = ((trial_fraction * retained.len() as f64).ceil() as usize).min(retained.len());
        retained.truncate(keep);

        let mut negative = Vec::new();
        let mut positive = Vec::new();
        for trial in retained {
            let result = match alignment {
                Alignment::Reading => segment_reading(clean, trial),
                Alignment::Response => segment_response(clean, trial),
            };
            match result {
                Ok(seg) => match seg.sentiment {
                    Sentiment::Negative => negative.push(seg),
                    Sentiment::PositiveNeutral => positive.push(seg),
                },
                Err(Error::Segment { trial, message }) => dropped.push((trial, message)),
                Err(other) => return Err(other),
            }
        }
        if negative.len() < 30 || positive.len() < 30 {
            log::warn!(
                "participant {id}: only {} negative / {} positive segments; \
                 bootstrap sets will lean on replacement",
                negative.len(),
                positive.len()
            );
            thin.push(id.clone());
        }
        participants.push(ParticipantSegments {
            participant_id: id.clone(),
            group: p.participant.group,
            gender: p.participant.gender,
            negative,
            positive,
        });
    }
    Ok(SegmentStore {
        alignment,
        trial_fraction,
        participants,
        dropped,
        thin_participants: thin,
    })
}

const SEGMENT_MAGIC: &[u8; 8] = b"GZSEG001";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct StoreManifest {
    alignment: Alignment,
    trial_fraction: f64,
    participant_ids: Vec<String>,
    dropped: Vec<(String, String)>,
    thin_participants: Vec<String>,
}

fn write_str(w: &mut impl Write, s: &str) -> std::io::Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())
}

fn read_str(r: &mut impl Read) -> std::io::Result<String> {
    let mut len = [0u8; 4];
    r.read_exact(&mut len)?;
    let mut buf = vec![0u8; u32::from_le_bytes(len) as usize];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
}

fn write_row(w: &mut impl Write, row: &[f64]) -> std::io::Result<()> {
    for v in row {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_row(r: &mut impl Read, n: usize) -> std::io::Result<Vec<f64>> {
    let mut buf = vec![0u8; 8 * n];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

/// Persist the store: `manifest.json` plus one `<id>.seg` binary per
/// participant. Rows are stored x row then y row per trial, f64
/// little-endian, so the round-trip is bit-exact.
pub fn save_store(dir: &Path, store: &SegmentStore) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = StoreManifest {
        alignment: store.alignment,
        trial_fraction: store.trial_fraction,
        participant_ids: store
            .participants
            .iter()
            .map(|p| p.participant_id.clone())
            .collect(),
        dropped: store.dropped.clone(),
        thin_participants: store.thin_participants.clone(),
    };
    let manifest_path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Config(format!("manifest serialization: {e}")))?;
    std::fs::write(&manifest_path, json).map_err(|e| Error::io(&manifest_path, e))?;

    for p in &store.participants {
        let path = dir.join(format!("{}.seg", p.participant_id));
        let file = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut w = std::io::BufWriter::new(file);
        let io_err = |e: std::io::Error| Error::io(&path, e);
        (|| -> std::io::Result<()> {
            w.write_all(SEGMENT_MAGIC)?;
            write_str(&mut w, &p.participant_id)?;
            write_str(&mut w, &p.group.to_string())?;
            write_str(&mut w, &p.gender.to_string())?;
            write_str(&mut w, store.alignment.as_str())?;
            w.write_all(&(store.alignment.t_len() as u32).to_le_bytes())?;
            w.write_all(&(p.negative.len() as u32).to_le_bytes())?;
            w.write_all(&(p.positive.len() as u32).to_le_bytes())?;
            for seg in p.negative.iter().chain(p.positive.iter()) {
                write_str(&mut w, &seg.trial_id)?;
                write_row(&mut w, &seg.x)?;
                write_row(&mut w, &seg.y)?;
            }
            w.flush()
        })()
        .map_err(io_err)?;
    }
    Ok(())
}

pub fn load_store(dir: &Path) -> Result<SegmentStore> {
    let manifest_path = dir.join("manifest.json");
    let json = std::fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: StoreManifest = serde_json::from_str(&json).map_err(|e| Error::Parse {
        path: manifest_path.clone(),
        line: 0,
        message: e.to_string(),
    })?;

    let mut participants = Vec::with_capacity(manifest.participant_ids.len());
    for id in &manifest.participant_ids {
        let path = dir.join(format!("{id}.seg"));
        let file = std::fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
        let mut r = std::io::BufReader::new(file);
        let io_err = |e: std::io::Error| Error::io(&path, e);
        let parse_err = |message: String| Error::Parse {
            path: path.clone(),
            line: 0,
            message,
        };

        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(io_err)?;
        if &magic != SEGMENT_MAGIC {
            return Err(parse_err("bad segment file magic".into()));
        }
        let file_id = read_str(&mut r).map_err(io_err)?;
        if &file_id != id {
            return Err(parse_err(format!(
                "participant id mismatch: file says {file_id:?}"
            )));
        }
        let group: Group = read_str(&mut r)
            .map_err(io_err)?
            .parse()
            .map_err(parse_err)?;
        let gender: Gender = read_str(&mut r)
            .map_err(io_err)?
            .parse()
            .map_err(parse_err)?;
        let alignment: Alignment = read_str(&mut r)
            .map_err(io_err)?
            .parse()
            .map_err(parse_err)?;
        if alignment != manifest.alignment {
            return Err(parse_err("alignment mismatch with manifest".into()));
        }
        let mut n4 = [0u8; 4];
        r.read_exact(&mut n4).map_err(io_err)?;
        let t_len = u32::from_le_bytes(n4) as usize;
        if t_len != alignment.t_len() {
            return Err(parse_err(format!("unexpected t_len {t_len}")));
        }
        r.read_exact(&mut n4).map_err(io_err)?;
        let n_neg = u32::from_le_bytes(n4) as usize;
        r.read_exact(&mut n4).map_err(io_err)?;
        let n_pos = u32::from_le_bytes(n4) as usize;

        let mut read_seg = |sentiment: Sentiment| -> Result<TrialSegment> {
            let trial_id = read_str(&mut r).map_err(io_err)?;
            let x = read_row(&mut r, t_len).map_err(io_err)?;
            let y = read_row(&mut r, t_len).map_err(io_err)?;
            Ok(TrialSegment {
                trial_id,
                sentiment,
                alignment,
                x,
                y,
            })
        };
        let negative = (0..n_neg)
            .map(|_| read_seg(Sentiment::Negative))
            .collect::<Result<Vec<_>>>()?;
        let positive = (0..n_pos)
            .map(|_| read_seg(Sentiment::PositiveNeutral))
            .collect::<Result<Vec<_>>>()?;
        participants.push(ParticipantSegments {
            participant_id: id.clone(),
            group,
            gender,
            negative,
            positive,
        });
    }
    Ok(SegmentStore {
        alignment: manifest.alignment,
        trial_fraction: manifest.trial_fraction,
        participants,
        dropped: manifest.dropped,
        thin_participants: manifest.thin_participants,
    })
}
