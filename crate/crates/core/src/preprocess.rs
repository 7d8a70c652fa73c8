//! Gaze signal conditioning: clamp to the screen, find and patch
//! artifacts, normalize coordinates, decimate 500 Hz to 250 Hz.
//!
//! Pipeline order is clamp -> detect -> interpolate -> normalize ->
//! downsample; artifact detection always runs on the raw-rate signal.
//! Artifacts are the union of annotated blink spans, samples flagged
//! invalid by the tracker, and speed outliers (2D finite-difference speed
//! exceeding mean + 3 SD computed over the whole recording).

use crate::corpus::{EventKind, GazeRecording, ScreenGeometry, SCREEN_HEIGHT_PX, SCREEN_WIDTH_PX};
use crate::{Error, Result};

/// Conditioned recording at 250 Hz in normalized coordinates. Timestamps
/// are implicit: sample i sits at `t0_ms + 4 * i`.
#[derive(Debug, Clone, PartialEq)]
pub struct CleanRecording {
    pub participant_id: String,
    pub sample_rate_hz: f64,
    pub t0_ms: f64,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    /// True exactly where the value came from interpolation (either source
    /// sample of the decimation pair was patched).
    pub interpolated_mask: Vec<bool>,
    /// Set when more than half of the raw samples were interpolated; such
    /// recordings are candidates for exclusion.
    pub heavily_interpolated: bool,
}

impl CleanRecording {
    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn t_ms(&self, i: usize) -> f64 {
        self.t0_ms + 1000.0 / self.sample_rate_hz * i as f64
    }
}

/// Half-open index span `[start, end)` into the sample sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArtifactSpans {
    pub spans: Vec<Span>,
    /// The speed series had zero standard deviation, so the outlier rule
    /// was skipped.
    pub zero_speed_sd: bool,
}

impl ArtifactSpans {
    pub fn flagged_count(&self) -> usize {
        self.spans.iter().map(|s| s.end - s.start).sum()
    }

    fn to_mask(&self, n: usize) -> Vec<bool> {
        let mut mask = vec![false; n];
        for span in &self.spans {
            for m in &mut mask[span.start..span.end.min(n)] {
                *m = true;
            }
        }
        mask
    }
}

pub fn clamp_to_screen(mut rec: GazeRecording) -> GazeRecording {
    for s in &mut rec.samples {
        s.x_px = s.x_px.clamp(0.0, SCREEN_WIDTH_PX);
        s.y_px = s.y_px.clamp(0.0, SCREEN_HEIGHT_PX);
    }
    rec
}

fn mask_to_spans(mask: &[bool]) -> Vec<Span> {
    let mut spans = Vec::new();
    let mut i = 0;
    while i < mask.len() {
        if mask[i] {
            let start = i;
            while i < mask.len() && mask[i] {
                i += 1;
            }
            spans.push(Span { start, end: i });
        } else {
            i += 1;
        }
    }
    spans
}

/// Flag artifact samples. Requires at least 2 samples so a speed series
/// exists.
pub fn detect_artifacts(rec: &GazeRecording) -> Result<ArtifactSpans> {
    let n = rec.samples.len();
    if n < 2 {
        return Err(Error::Preprocess {
            participant: rec.participant_id.clone(),
            message: format!("need at least 2 samples to detect artifacts, got {n}"),
        });
    }
    let mut mask = vec![false; n];

    for (i, s) in rec.samples.iter().enumerate() {
        if !s.valid {
            mask[i] = true;
        }
    }
    for ev in &rec.events {
        if ev.kind != EventKind::Blink {
            continue;
        }
        for (i, s) in rec.samples.iter().enumerate() {
            if s.t_ms >= ev.start_ms && s.t_ms <= ev.end_ms {
                mask[i] = true;
            }
        }
    }

    // Finite-difference speed attached to the later sample of each pair.
    let speeds: Vec<f64> = rec
        .samples
        .windows(2)
        .map(|p| {
            let dx = p[1].x_px - p[0].x_px;
            let dy = p[1].y_px - p[0].y_px;
            let dt = p[1].t_ms - p[0].t_ms;
            (dx * dx + dy * dy).sqrt() / dt
        })
        .collect();
    let mean = speeds.iter().sum::<f64>() / speeds.len() as f64;
    let var = speeds.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / speeds.len() as f64;
    let sd = var.sqrt();
    let zero_speed_sd = sd == 0.0;
    if zero_speed_sd {
        log::warn!(
            "recording {}: speed SD is zero, skipping outlier detection",
            rec.participant_id
        );
    } else {
        let threshold = mean + 3.0 * sd;
        for (k, &v) in speeds.iter().enumerate() {
            if v > threshold {
                mask[k + 1] = true;
            }
        }
    }

    Ok(ArtifactSpans {
        spans: mask_to_spans(&mask),
        zero_speed_sd,
    })
}

/// Replace flagged samples by per-axis linear interpolation in time
/// between the nearest unflagged neighbors; leading and trailing flagged
/// runs copy the nearest unflagged value.
pub fn interpolate_artifacts(
    mut rec: GazeRecording,
    artifacts: &ArtifactSpans,
) -> Result<(GazeRecording, Vec<bool>)> {
    let n = rec.samples.len();
    let mask = artifacts.to_mask(n);
    if mask.iter().all(|&m| m) {
        return Err(Error::Preprocess {
            participant: rec.participant_id.clone(),
            message: "every sample is flagged as artifact".into(),
        });
    }

    let t: Vec<f64> = rec.samples.iter().map(|s| s.t_ms).collect();
    for axis in 0..2 {
        let mut vals: Vec<f64> = rec
            .samples
            .iter()
            .map(|s| if axis == 0 { s.x_px } else { s.y_px })
            .collect();
        let mut i = 0;
        while i < n {
            if !mask[i] {
                i += 1;
                continue;
            }
            let run_start = i;
            while i < n && mask[i] {
                i += 1;
            }
            let run_end = i; // exclusive
            let left = run_start.checked_sub(1);
            let right = if run_end < n { Some(run_end) } else { None };
            match (left, right) {
                (Some(a), Some(b)) => {
                    let (ta, tb) = (t[a], t[b]);
                    let (va, vb) = (vals[a], vals[b]);
                    for j in run_start..run_end {
                        vals[j] = va + (vb - va) * (t[j] - ta) / (tb - ta);
                    }
                }
                (Some(a), None) => {
                    for j in run_start..run_end {
                        vals[j] = vals[a];
                    }
                }
                (None, Some(b)) => {
                    for j in run_start..run_end {
                        vals[j] = vals[b];
                    }
                }
                (None, None) => unreachable!("all-flagged handled above"),
            }
        }
        for (s, v) in rec.samples.iter_mut().zip(vals) {
            if axis == 0 {
                s.x_px = v;
            } else {
                s.y_px = v;
            }
        }
    }
    for (s, &m) in rec.samples.iter_mut().zip(mask.iter()) {
        if m {
            s.valid = true;
        }
    }
    Ok((rec, mask))
}

pub fn normalize_coords(mut rec: GazeRecording, _geom: &ScreenGeometry) -> GazeRecording {
    let (cx, cy) = (SCREEN_WIDTH_PX / 2.0, SCREEN_HEIGHT_PX / 2.0);
    for s in &mut rec.samples {
        s.x_px = (s.x_px - cx) / cx;
        s.y_px = (s.y_px - cy) / cy;
    }
    rec
}

/// Decimate by 2 with pair means. Output timestamps take the first sample
/// of each pair; an odd trailing sample is dropped and logged. The mask
/// marks an output sample when either source sample was interpolated.
pub fn downsample(rec: &GazeRecording, mask: &[bool]) -> CleanRecording {
    let n = rec.samples.len();
    if n % 2 == 1 {
        log::debug!(
            "recording {}: odd sample count {n}, dropping the last sample",
            rec.participant_id
        );
    }
    let pairs = n / 2;
    let mut x = Vec::with_capacity(pairs);
    let mut y = Vec::with_capacity(pairs);
    let mut out_mask = Vec::with_capacity(pairs);
    for k in 0..pairs {
        let (a, b) = (&rec.samples[2 * k], &rec.samples[2 * k + 1]);
        x.push(0.5 * (a.x_px + b.x_px));
        y.push(0.5 * (a.y_px + b.y_px));
        out_mask.push(mask.get(2 * k).copied().unwrap_or(false)
            || mask.get(2 * k + 1).copied().unwrap_or(false));
    }
    CleanRecording {
        participant_id: rec.participant_id.clone(),
        sample_rate_hz: rec.sample_rate_hz / 2.0,
        t0_ms: rec.samples.first().map_or(0.0, |s| s.t_ms),
        x,
        y,
        interpolated_mask: out_mask,
        heavily_interpolated: false,
    }
}

/// Full conditioning pipeline for one participant.
pub fn preprocess_participant(rec: &GazeRecording, geom: &ScreenGeometry) -> Result<CleanRecording> {
    let clamped = clamp_to_screen(rec.clone());
    let artifacts = detect_artifacts(&clamped)?;
    let flagged = artifacts.flagged_count();
    let (patched, mask) = interpolate_artifacts(clamped, &artifacts)?;
    let normalized = normalize_coords(patched, geom);
    let mut clean = downsample(&normalized, &mask);
    if 2 * flagged > rec.samples.len() {
        log::warn!(
            "recording {}: {flagged} of {} samples interpolated, flagging as \
             heavily interpolated",
            rec.participant_id,
            rec.samples.len()
        );
        clean.heavily_interpolated = true;
    }
    debug_assert!(clean.x.iter().chain(clean.y.iter()).all(|v| v.is_finite()));
    Ok(clean)
}
