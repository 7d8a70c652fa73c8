//! Data model and disk formats for cohorts of gaze recordings.
//!
//! A cohort on disk is a roster CSV plus, per participant, a gaze samples
//! CSV, a sibling `<id>_events.csv` with annotated fixation/saccade/blink
//! spans, and a trials CSV. All files are UTF-8 with '.' as the decimal
//! point. Numeric fields round-trip bit-for-bit because the writers emit
//! the shortest representation that re-parses to the same value.
//!
//! Layout expected by [`load_cohort`]:
//!
//! ```text
//! roster.csv                      id,group,gender,phq9,sis,gad7
//! gaze/<id>.csv                   t_ms,x_px,y_px,valid
//! gaze/<id>_events.csv            kind,start_ms,end_ms
//! trials/<id>.csv                 trial_id,sentence_id,presentation,
//!                                 sentiment,final_word_onset_ms,
//!                                 response_time_ms,response
//! ```

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const SCREEN_WIDTH_PX: f64 = 1920.0;
pub const SCREEN_HEIGHT_PX: f64 = 1080.0;

/// Diagnostic group. C = control, D = depressed without suicidal ideation,
/// S = depressed with suicidal ideation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Group {
    C,
    D,
    S,
}

impl Group {
    pub const ALL: [Group; 3] = [Group::C, Group::D, Group::S];

    pub fn index(self) -> usize {
        match self {
            Group::C => 0,
            Group::D => 1,
            Group::S => 2,
        }
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Group::C => "C",
            Group::D => "D",
            Group::S => "S",
        })
    }
}

impl FromStr for Group {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "C" => Ok(Group::C),
            "D" => Ok(Group::D),
            "S" => Ok(Group::S),
            other => Err(format!("unknown group {other:?} (expected C, D, or S)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Gender {
    F,
    M,
    Other,
}

impl fmt::Display for Gender {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Gender::F => "F",
            Gender::M => "M",
            Gender::Other => "other",
        })
    }
}

impl FromStr for Gender {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "F" => Ok(Gender::F),
            "M" => Ok(Gender::M),
            "other" => Ok(Gender::Other),
            v => Err(format!("unknown gender {v:?} (expected F, M, or other)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Presentation {
    First,
    Second,
}

impl fmt::Display for Presentation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Presentation::First => "first",
            Presentation::Second => "second",
        })
    }
}

impl FromStr for Presentation {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "first" => Ok(Presentation::First),
            "second" => Ok(Presentation::Second),
            v => Err(format!("unknown presentation {v:?}")),
        }
    }
}

/// Sentence sentiment condition. The positive and neutral conditions are
/// pooled into one class; the classifier contrasts it with negative.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sentiment {
    Negative,
    PositiveNeutral,
}

impl Sentiment {
    pub const ALL: [Sentiment; 2] = [Sentiment::Negative, Sentiment::PositiveNeutral];
}

impl fmt::Display for Sentiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Sentiment::Negative => "negative",
            Sentiment::PositiveNeutral => "positive_neutral",
        })
    }
}

impl FromStr for Sentiment {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "negative" => Ok(Sentiment::Negative),
            "positive_neutral" => Ok(Sentiment::PositiveNeutral),
            v => Err(format!("unknown sentiment {v:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Response {
    Agree,
    Disagree,
    Missed,
}

impl fmt::Display for Response {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Response::Agree => "agree",
            Response::Disagree => "disagree",
            Response::Missed => "missed",
        })
    }
}

impl FromStr for Response {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "agree" => Ok(Response::Agree),
            "disagree" => Ok(Response::Disagree),
            "missed" => Ok(Response::Missed),
            v => Err(format!("unknown response {v:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Fixation,
    Saccade,
    Blink,
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EventKind::Fixation => "fixation",
            EventKind::Saccade => "saccade",
            EventKind::Blink => "blink",
        })
    }
}

impl FromStr for EventKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "fixation" => Ok(EventKind::Fixation),
            "saccade" => Ok(EventKind::Saccade),
            "blink" => Ok(EventKind::Blink),
            v => Err(format!("unknown event kind {v:?}")),
        }
    }
}

/// Questionnaire scores are optional: synthetic cohorts carry only the group
/// label. When scores are present the group must be consistent with them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Participant {
    pub id: String,
    pub group: Group,
    pub gender: Gender,
    pub phq9: Option<u32>,
    pub sis: Option<u32>,
    pub gad7: Option<u32>,
}

impl Participant {
    /// Group/score consistency: C means phq9 < 5; D means phq9 > 9 with
    /// sis <= 16; S means phq9 > 9 with sis > 16. Checks only what is
    /// present; returns a description of the first violation.
    pub fn score_consistency_issue(&self) -> Option<String> {
        let phq9 = self.phq9;
        let sis = self.sis;
        let bad = |detail: String| {
            Some(format!(
                "participant {}: group/score mismatch: {detail}",
                self.id
            ))
        };
        match self.group {
            Group::C => {
                if let Some(p) = phq9 {
                    if p >= 5 {
                        return bad(format!("group C requires phq9 < 5, got {p}"));
                    }
                }
            }
            Group::D => {
                if let Some(p) = phq9 {
                    if p <= 9 {
                        return bad(format!("group D requires phq9 > 9, got {p}"));
                    }
                }
                if let Some(s) = sis {
                    if s > 16 {
                        return bad(format!("group D requires sis <= 16, got {s}"));
                    }
                }
            }
            Group::S => {
                if let Some(p) = phq9 {
                    if p <= 9 {
                        return bad(format!("group S requires phq9 > 9, got {p}"));
                    }
                }
                if let Some(s) = sis {
                    if s <= 16 {
                        return bad(format!("group S requires sis > 16, got {s}"));
                    }
                }
            }
        }
        if let Some(p) = phq9 {
            if p > 27 {
                return bad(format!("phq9 out of range 0-27: {p}"));
            }
        }
        if let Some(g) = self.gad7 {
            if g > 21 {
                return bad(format!("gad7 out of range 0-21: {g}"));
            }
        }
        None
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GazeSample {
    pub t_ms: f64,
    pub x_px: f64,
    pub y_px: f64,
    pub valid: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GazeEvent {
    pub kind: EventKind,
    pub start_ms: f64,
    pub end_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GazeRecording {
    pub participant_id: String,
    pub sample_rate_hz: f64,
    pub samples: Vec<GazeSample>,
    pub events: Vec<GazeEvent>,
}

impl GazeRecording {
    pub fn start_ms(&self) -> f64 {
        self.samples.first().map_or(0.0, |s| s.t_ms)
    }

    pub fn end_ms(&self) -> f64 {
        self.samples.last().map_or(0.0, |s| s.t_ms)
    }

    /// All invariant violations, in order of appearance: monotonic
    /// timestamps, sample spacing within 1% of the nominal rate, event
    /// spans inside the recording.
    pub fn validation_issues(&self) -> Vec<String> {
        let mut issues = Vec::new();
        let id = &self.participant_id;
        if self.sample_rate_hz <= 0.0 {
            issues.push(format!("recording {id}: non-positive sample rate"));
            return issues;
        }
        let nominal_dt = 1000.0 / self.sample_rate_hz;
        for (i, pair) in self.samples.windows(2).enumerate() {
            let dt = pair[1].t_ms - pair[0].t_ms;
            if dt <= 0.0 {
                issues.push(format!(
                    "recording {id}: t_ms not strictly increasing at sample index {}",
                    i + 1
                ));
                break;
            }
            if (dt - nominal_dt).abs() > 0.01 * nominal_dt {
                issues.push(format!(
                    "recording {id}: sample spacing {dt} ms at index {} deviates more \
                     than 1% from nominal {nominal_dt} ms",
                    i + 1
                ));
                break;
            }
        }
        let (t0, t1) = (self.start_ms(), self.end_ms());
        for (i, ev) in self.events.iter().enumerate() {
            if ev.end_ms < ev.start_ms {
                issues.push(format!("recording {id}: event {i} has end before start"));
            } else if ev.start_ms < t0 || ev.end_ms > t1 {
                issues.push(format!(
                    "recording {id}: event {i} span [{}, {}] outside recording \
                     bounds [{t0}, {t1}]",
                    ev.start_ms, ev.end_ms
                ));
            }
        }
        issues
    }
}

/// Final word stays on screen for 600 ms, then a 300 ms blank precedes the
/// agree/disagree prompt.
pub const FINAL_WORD_DURATION_MS: f64 = 600.0;
pub const PROMPT_DELAY_MS: f64 = 300.0;
/// The prompt times out after 2 s.
pub const RESPONSE_DEADLINE_MS: f64 = 2000.0;

#[derive(Debug, Clone, PartialEq)]
pub struct TrialRecord {
    pub trial_id: String,
    pub sentence_id: String,
    pub presentation: Presentation,
    pub sentiment: Sentiment,
    pub final_word_onset_ms: f64,
    /// Absolute button-press time; absent exactly when the response is
    /// missed.
    pub response_time_ms: Option<f64>,
    pub response: Response,
    /// Set by [`exclude_trials`]; holds the reason.
    pub excluded: Option<String>,
}

impl TrialRecord {
    /// Prompt appears 600 ms (final word) + 300 ms (interval) after the
    /// final word onset.
    pub fn prompt_onset_ms(&self) -> f64 {
        self.final_word_onset_ms + FINAL_WORD_DURATION_MS + PROMPT_DELAY_MS
    }

    pub fn is_retained(&self) -> bool {
        self.excluded.is_none()
    }

    pub fn validation_issues(&self, participant_id: &str) -> Vec<String> {
        let mut issues = Vec::new();
        let tag = format!("participant {participant_id} trial {}", self.trial_id);
        match (self.response, self.response_time_ms) {
            (Response::Missed, Some(_)) => {
                issues.push(format!("{tag}: missed response with a response time"));
            }
            (Response::Missed, None) => {}
            (_, None) => {
                issues.push(format!("{tag}: response given but no response time"));
            }
            (_, Some(rt)) => {
                let deadline = self.prompt_onset_ms() + RESPONSE_DEADLINE_MS;
                if rt > deadline {
                    issues.push(format!(
                        "{tag}: response time {rt} ms past the deadline {deadline} ms"
                    ));
                }
                if rt <= self.final_word_onset_ms {
                    issues.push(format!(
                        "{tag}: response time {rt} ms precedes the final word onset"
                    ));
                }
            }
        }
        issues
    }
}

/// Axis-aligned rectangle in normalized screen coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AoiRect {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl AoiRect {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x_min && x <= self.x_max && y >= self.y_min && y <= self.y_max
    }

    pub fn center(&self) -> (f64, f64) {
        (
            0.5 * (self.x_min + self.x_max),
            0.5 * (self.y_min + self.y_max),
        )
    }

    fn in_unit_square(&self) -> bool {
        self.x_min < self.x_max
            && self.y_min < self.y_max
            && self.x_min >= -1.0
            && self.x_max <= 1.0
            && self.y_min >= -1.0
            && self.y_max <= 1.0
    }

    fn overlaps(&self, other: &AoiRect) -> bool {
        self.x_min < other.x_max
            && other.x_min < self.x_max
            && self.y_min < other.y_max
            && other.y_min < self.y_max
    }
}

/// Screen is fixed at 1920x1080; the response-button AOIs are configurable
/// because button placement is a property of the stimulus program, not the
/// data format. Defaults put agree on the lower left and disagree on the
/// lower right, mirrored in x and identical in y.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScreenGeometry {
    pub agree_aoi: AoiRect,
    pub disagree_aoi: AoiRect,
}

impl Default for ScreenGeometry {
    fn default() -> Self {
        ScreenGeometry {
            agree_aoi: AoiRect {
                x_min: -0.75,
                x_max: -0.45,
                y_min: 0.55,
                y_max: 0.85,
            },
            disagree_aoi: AoiRect {
                x_min: 0.45,
                x_max: 0.75,
                y_min: 0.55,
                y_max: 0.85,
            },
        }
    }
}

impl ScreenGeometry {
    pub fn validate(&self) -> Result<()> {
        if !self.agree_aoi.in_unit_square() || !self.disagree_aoi.in_unit_square() {
            return Err(Error::Config(
                "AOI rectangles must be non-empty and inside [-1,1]^2".into(),
            ));
        }
        if self.agree_aoi.overlaps(&self.disagree_aoi) {
            return Err(Error::Config("agree and disagree AOIs overlap".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParticipantData {
    pub participant: Participant,
    pub recording: GazeRecording,
    pub trials: Vec<TrialRecord>,
}

/// A fully loaded cohort. Immutable after ingest except for the exclusion
/// flags set by [`exclude_trials`]; safe to share across worker threads.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Cohort {
    pub participants: Vec<ParticipantData>,
}

impl Cohort {
    pub fn len(&self) -> usize {
        self.participants.len()
    }

    pub fn is_empty(&self) -> bool {
        self.participants.is_empty()
    }

    pub fn sentence_ids(&self) -> BTreeSet<String> {
        self.participants
            .iter()
            .flat_map(|p| p.trials.iter().map(|t| t.sentence_id.clone()))
            .collect()
    }
}

fn parse_field<T: FromStr>(
    value: &str,
    field: &str,
    path: &Path,
    line: u64,
) -> Result<T>
where
    T::Err: fmt::Display,
{
    value.trim().parse::<T>().map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line,
        message: format!("field {field}: {e}"),
    })
}

fn parse_optional<T: FromStr>(
    value: &str,
    field: &str,
    path: &Path,
    line: u64,
) -> Result<Option<T>>
where
    T::Err: fmt::Display,
{
    let v = value.trim();
    if v.is_empty() {
        Ok(None)
    } else {
        parse_field(v, field, path, line).map(Some)
    }
}

struct CsvFile {
    path: PathBuf,
    reader: csv::Reader<std::fs::File>,
}

impl CsvFile {
    fn open(path: &Path, expected_header: &[&str]) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_reader(file);
        let headers = reader
            .headers()
            .map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: 1,
                message: e.to_string(),
            })?
            .clone();
        let got: Vec<&str> = headers.iter().collect();
        if got != expected_header {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: 1,
                message: format!("header {got:?}, expected {expected_header:?}"),
            });
        }
        Ok(CsvFile {
            path: path.to_path_buf(),
            reader,
        })
    }

    /// Iterate records with 1-based line numbers, enforcing the column
    /// count.
    fn for_each(
        &mut self,
        columns: usize,
        mut f: impl FnMut(&csv::StringRecord, u64) -> Result<()>,
    ) -> Result<()> {
        for record in self.reader.records() {
            let record = record.map_err(|e| Error::Parse {
                path: self.path.clone(),
                line: e
                    .position()
                    .map_or(0, |p| p.line()),
                message: e.to_string(),
            })?;
            let line = record.position().map_or(0, |p| p.line());
            if record.len() != columns {
                return Err(Error::Parse {
                    path: self.path.clone(),
                    line,
                    message: format!("expected {columns} fields, got {}", record.len()),
                });
            }
            f(&record, line)?;
        }
        Ok(())
    }
}

pub const ROSTER_HEADER: [&str; 6] = ["id", "group", "gender", "phq9", "sis", "gad7"];
pub const GAZE_HEADER: [&str; 4] = ["t_ms", "x_px", "y_px", "valid"];
pub const EVENTS_HEADER: [&str; 3] = ["kind", "start_ms", "end_ms"];
pub const TRIALS_HEADER: [&str; 7] = [
    "trial_id",
    "sentence_id",
    "presentation",
    "sentiment",
    "final_word_onset_ms",
    "response_time_ms",
    "response",
];

pub fn read_roster(path: &Path) -> Result<Vec<Participant>> {
    let mut out = Vec::new();
    let mut file = CsvFile::open(path, &ROSTER_HEADER)?;
    file.for_each(6, |rec, line| {
        out.push(Participant {
            id: rec[0].to_string(),
            group: parse_field(&rec[1], "group", path, line)?,
            gender: parse_field(&rec[2], "gender", path, line)?,
            phq9: parse_optional(&rec[3], "phq9", path, line)?,
            sis: parse_optional(&rec[4], "sis", path, line)?,
            gad7: parse_optional(&rec[5], "gad7", path, line)?,
        });
        Ok(())
    })?;
    Ok(out)
}

fn parse_valid_flag(v: &str, path: &Path, line: u64) -> Result<bool> {
    match v.trim() {
        "1" => Ok(true),
        "0" => Ok(false),
        other => Err(Error::Parse {
            path: path.to_path_buf(),
            line,
            message: format!("field valid: expected 0 or 1, got {other:?}"),
        }),
    }
}

pub fn read_gaze(path: &Path, events_path: &Path, participant_id: &str) -> Result<GazeRecording> {
    let mut samples = Vec::new();
    let mut file = CsvFile::open(path, &GAZE_HEADER)?;
    file.for_each(4, |rec, line| {
        samples.push(GazeSample {
            t_ms: parse_field(&rec[0], "t_ms", path, line)?,
            x_px: parse_field(&rec[1], "x_px", path, line)?,
            y_px: parse_field(&rec[2], "y_px", path, line)?,
            valid: parse_valid_flag(&rec[3], path, line)?,
        });
        Ok(())
    })?;

    let mut events = Vec::new();
    let mut file = CsvFile::open(events_path, &EVENTS_HEADER)?;
    file.for_each(3, |rec, line| {
        events.push(GazeEvent {
            kind: parse_field(&rec[0], "kind", events_path, line)?,
            start_ms: parse_field(&rec[1], "start_ms", events_path, line)?,
            end_ms: parse_field(&rec[2], "end_ms", events_path, line)?,
        });
        Ok(())
    })?;

    // The nominal rate is implied by the median spacing; recordings are
    // produced at 500 Hz and validated against that rate elsewhere.
    let sample_rate_hz = infer_rate(&samples);
    Ok(GazeRecording {
        participant_id: participant_id.to_string(),
        sample_rate_hz,
        samples,
        events,
    })
}

fn infer_rate(samples: &[GazeSample]) -> f64 {
    if samples.len() < 2 {
        return 500.0;
    }
    let mut dts: Vec<f64> = samples.windows(2).map(|p| p[1].t_ms - p[0].t_ms).collect();
    dts.sort_by(f64::total_cmp);
    let median = dts[dts.len() / 2];
    if median > 0.0 {
        1000.0 / median
    } else {
        500.0
    }
}

pub fn read_trials(path: &Path) -> Result<Vec<TrialRecord>> {
    let mut out = Vec::new();
    let mut file = CsvFile::open(path, &TRIALS_HEADER)?;
    file.for_each(7, |rec, line| {
        out.push(TrialRecord {
            trial_id: rec[0].to_string(),
            sentence_id: rec[1].to_string(),
            presentation: parse_field(&rec[2], "presentation", path, line)?,
            sentiment: parse_field(&rec[3], "sentiment", path, line)?,
            final_word_onset_ms: parse_field(&rec[4], "final_word_onset_ms", path, line)?,
            response_time_ms: parse_optional(&rec[5], "response_time_ms", path, line)?,
            response: parse_field(&rec[6], "response", path, line)?,
            excluded: None,
        });
        Ok(())
    })?;
    Ok(out)
}

/// Load a cohort from disk. Parse failures abort immediately with the file
/// and line; invariant violations (group/score mismatches, non-monotonic
/// time, bad spans) are collected across the whole cohort and reported
/// together so one pass surfaces every problem.
pub fn load_cohort(roster_path: &Path, gaze_dir: &Path, trials_dir: &Path) -> Result<Cohort> {
    let roster = read_roster(roster_path)?;
    let mut issues = Vec::new();
    let mut participants = Vec::with_capacity(roster.len());
    for participant in roster {
        let gaze_path = gaze_dir.join(format!("{}.csv", participant.id));
        let events_path = gaze_dir.join(format!("{}_events.csv", participant.id));
        let trials_path = trials_dir.join(format!("{}.csv", participant.id));
        for p in [&gaze_path, &events_path, &trials_path] {
            if !p.exists() {
                return Err(Error::MissingFile {
                    participant: participant.id.clone(),
                    path: p.clone(),
                });
            }
        }
        let recording = read_gaze(&gaze_path, &events_path, &participant.id)?;
        let trials = read_trials(&trials_path)?;

        if let Some(issue) = participant.score_consistency_issue() {
            issues.push(issue);
        }
        issues.extend(recording.validation_issues());
        for trial in &trials {
            issues.extend(trial.validation_issues(&participant.id));
        }
        participants.push(ParticipantData {
            participant,
            recording,
            trials,
        });
    }
    if !issues.is_empty() {
        return Err(Error::validation_all(issues));
    }
    Ok(Cohort { participants })
}

fn write_csv(path: &Path, header: &[&str], rows: Vec<Vec<String>>) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record(header).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: 1,
        message: e.to_string(),
    })?;
    for row in rows {
        w.write_record(&row).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            message: e.to_string(),
        })?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn opt_to_string<T: fmt::Display>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(String::new, |x| x.to_string())
}

pub fn write_roster(path: &Path, roster: &[Participant]) -> Result<()> {
    let rows = roster
        .iter()
        .map(|p| {
            vec![
                p.id.clone(),
                p.group.to_string(),
                p.gender.to_string(),
                opt_to_string(&p.phq9),
                opt_to_string(&p.sis),
                opt_to_string(&p.gad7),
            ]
        })
        .collect();
    write_csv(path, &ROSTER_HEADER, rows)
}

pub fn write_gaze(gaze_dir: &Path, rec: &GazeRecording) -> Result<()> {
    let rows = rec
        .samples
        .iter()
        .map(|s| {
            vec![
                s.t_ms.to_string(),
                s.x_px.to_string(),
                s.y_px.to_string(),
                if s.valid { "1" } else { "0" }.to_string(),
            ]
        })
        .collect();
    write_csv(
        &gaze_dir.join(format!("{}.csv", rec.participant_id)),
        &GAZE_HEADER,
        rows,
    )?;
    let rows = rec
        .events
        .iter()
        .map(|e| {
            vec![
                e.kind.to_string(),
                e.start_ms.to_string(),
                e.end_ms.to_string(),
            ]
        })
        .collect();
    write_csv(
        &gaze_dir.join(format!("{}_events.csv", rec.participant_id)),
        &EVENTS_HEADER,
        rows,
    )
}

pub fn write_trials(path: &Path, trials: &[TrialRecord]) -> Result<()> {
    let rows = trials
        .iter()
        .map(|t| {
            vec![
                t.trial_id.clone(),
                t.sentence_id.clone(),
                t.presentation.to_string(),
                t.sentiment.to_string(),
                t.final_word_onset_ms.to_string(),
                opt_to_string(&t.response_time_ms),
                t.response.to_string(),
            ]
        })
        .collect();
    write_csv(path, &TRIALS_HEADER, rows)
}

/// Write a whole cohort in the on-disk layout [`load_cohort`] expects,
/// creating `gaze/` and `trials/` under `dir`.
pub fn write_cohort(dir: &Path, cohort: &Cohort) -> Result<()> {
    let gaze_dir = dir.join("gaze");
    let trials_dir = dir.join("trials");
    std::fs::create_dir_all(&gaze_dir).map_err(|e| Error::io(&gaze_dir, e))?;
    std::fs::create_dir_all(&trials_dir).map_err(|e| Error::io(&trials_dir, e))?;
    let roster: Vec<Participant> = cohort
        .participants
        .iter()
        .map(|p| p.participant.clone())
        .collect();
    write_roster(&dir.join("roster.csv"), &roster)?;
    for p in &cohort.participants {
        write_gaze(&gaze_dir, &p.recording)?;
        write_trials(
            &trials_dir.join(format!("{}.csv", p.participant.id)),
            &p.trials,
        )?;
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct ExclusionReport {
    pub excluded_sentences: Vec<String>,
    /// (participant id, retained trial count) per participant, roster order.
    pub retained_per_participant: Vec<(String, usize)>,
    pub total_retained: usize,
    pub total_excluded: usize,
}

/// Flag trials as excluded. A trial is excluded when its sentence is in the
/// given set, when the response was missed, or when the recording does not
/// cover [final word onset - 500 ms, response time]. The flags are computed
/// from scratch each call, so repeated application with the same set is a
/// no-op.
pub fn exclude_trials(
    cohort: &mut Cohort,
    excluded_sentences: &BTreeSet<String>,
) -> Result<ExclusionReport> {
    let known = cohort.sentence_ids();
    for s in excluded_sentences {
        if !known.contains(s) {
            return Err(Error::Config(format!(
                "excluded sentence {s:?} does not occur in the corpus"
            )));
        }
    }
    let mut retained_per_participant = Vec::new();
    let (mut total_retained, mut total_excluded) = (0usize, 0usize);
    for p in &mut cohort.participants {
        let (start, end) = (p.recording.start_ms(), p.recording.end_ms());
        let mut retained = 0usize;
        for trial in &mut p.trials {
            trial.excluded = if excluded_sentences.contains(&trial.sentence_id) {
                Some("excluded sentence".to_string())
            } else if trial.response == Response::Missed {
                Some("missed response".to_string())
            } else {
                let rt = trial.response_time_ms.unwrap_or(f64::INFINITY);
                let lo = trial.final_word_onset_ms - 500.0;
                if lo < start || rt > end {
                    Some(format!(
                        "gaze does not cover [{lo}, {rt}] ms (recording spans \
                         [{start}, {end}])"
                    ))
                } else {
                    None
                }
            };
            if trial.excluded.is_some() {
                total_excluded += 1;
            } else {
                retained += 1;
            }
        }
        total_retained += retained;
        retained_per_participant.push((p.participant.id.clone(), retained));
    }
    Ok(ExclusionReport {
        excluded_sentences: excluded_sentences.iter().cloned().collect(),
        retained_per_participant,
        total_retained,
        total_excluded,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct SummaryReport {
    pub participants: usize,
    /// Counts indexed as [C, D, S].
    pub group_counts: [usize; 3],
    /// Counts indexed as [F, M, other].
    pub gender_counts: [usize; 3],
    pub total_trials: usize,
    pub retained_trials: usize,
    pub excluded_trials: usize,
    /// Mean latency from prompt onset to button press over trials with a
    /// response, or null when none responded.
    pub mean_response_latency_ms: Option<f64>,
}

pub fn cohort_summary(cohort: &Cohort) -> SummaryReport {
    let mut group_counts = [0usize; 3];
    let mut gender_counts = [0usize; 3];
    let (mut total, mut retained) = (0usize, 0usize);
    let (mut latency_sum, mut latency_n) = (0.0f64, 0usize);
    for p in &cohort.participants {
        group_counts[p.participant.group.index()] += 1;
        gender_counts[match p.participant.gender {
            Gender::F => 0,
            Gender::M => 1,
            Gender::Other => 2,
        }] += 1;
        for t in &p.trials {
            total += 1;
            if t.is_retained() {
                retained += 1;
            }
            if let Some(rt) = t.response_time_ms {
                latency_sum += rt - t.prompt_onset_ms();
                latency_n += 1;
            }
        }
    }
    SummaryReport {
        participants: cohort.len(),
        group_counts,
        gender_counts,
        total_trials: total,
        retained_trials: retained,
        excluded_trials: total - retained,
        mean_response_latency_ms: if latency_n > 0 {
            Some(latency_sum / latency_n as f64)
        } else {
            None
        },
    }
}
