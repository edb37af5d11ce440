//! RT label smoothing and fixed-length segmentation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sub-second planes per segment; a segment spans this many seconds.
pub const PLANES_PER_SEGMENT: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RtSmoothingSpec {
    pub clip_min: f64,
    pub clip_max: f64,
    pub window_s: f64,
}

impl Default for RtSmoothingSpec {
    fn default() -> Self {
        RtSmoothingSpec {
            clip_min: 0.5,
            clip_max: 8.0,
            window_s: 90.0,
        }
    }
}

impl RtSmoothingSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip_min < self.clip_max) || !(self.window_s > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "RT smoothing needs clip_min < clip_max and window > 0, got [{}, {}] / {} s",
                self.clip_min, self.clip_max, self.window_s
            )));
        }
        Ok(())
    }
}

/// Clip each RT, then average over the trailing window `[t - window, t]`.
/// Input is `(time_s, rt_s)` with strictly increasing times.
pub fn clip_and_smooth_rt(rts: &[(f64, f64)], spec: &RtSmoothingSpec) -> Result<Vec<(f64, f64)>> {
    spec.validate()?;
    if rts.is_empty() {
        return Err(Error::InvalidArgument("no reaction times to smooth".into()));
    }
    if rts.windows(2).any(|w| !(w[1].0 > w[0].0)) {
        return Err(Error::Precondition("RT times must be strictly increasing".into()));
    }
    let clipped: Vec<f64> = rts.iter().map(|&(_, rt)| rt.clamp(spec.clip_min, spec.clip_max)).collect();
    let mut out = Vec::with_capacity(rts.len());
    let mut start = 0;
    for (i, &(t, _)) in rts.iter().enumerate() {
        while rts[start].0 < t - spec.window_s {
            start += 1;
        }
        let window = &clipped[start..=i];
        out.push((t, window.iter().sum::<f64>() / window.len() as f64));
    }
    Ok(out)
}

/// A reaction-time label anchored at the moment it became known.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RtLabel {
    /// Response onset, seconds from session start.
    pub time_s: f64,
    /// Smoothed RT, seconds.
    pub rt_s: f64,
}

/// One 3 s slice of a 128 Hz recording, split into three 1 s planes.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentState {
    pub index: usize,
    pub t_start_s: f64,
    pub channels: usize,
    pub samples_per_plane: usize,
    /// `planes[(plane * channels + channel) * samples_per_plane + sample]`.
    pub planes: Vec<f64>,
    pub measured_rt: Option<f64>,
}

impl SegmentState {
    pub fn duration_s(&self) -> f64 {
        PLANES_PER_SEGMENT as f64
    }

    pub fn plane(&self, t: usize) -> &[f64] {
        let len = self.channels * self.samples_per_plane;
        &self.planes[t * len..(t + 1) * len]
    }

    /// Copy a `PLANES_PER_SEGMENT * fs` sample window out of a row-major
    /// `channels x n` recording.
    fn from_window(eeg: &[f64], channels: usize, n: usize, fs: usize, start: usize) -> Vec<f64> {
        let mut planes = Vec::with_capacity(PLANES_PER_SEGMENT * channels * fs);
        for t in 0..PLANES_PER_SEGMENT {
            for c in 0..channels {
                let from = c * n + start + t * fs;
                planes.extend_from_slice(&eeg[from..from + fs]);
            }
        }
        planes
    }
}

fn check_recording(eeg: &[f64], channels: usize, fs: usize) -> Result<usize> {
    if channels == 0 || fs == 0 || eeg.len() % channels != 0 {
        return Err(Error::InvalidArgument(format!(
            "recording of {} values does not split into {channels} channels at {fs} Hz",
            eeg.len()
        )));
    }
    Ok(eeg.len() / channels)
}

/// Cut a row-major `channels x n` recording at `fs` Hz into consecutive,
/// non-overlapping 3 s segments. A segment carries the label whose time falls
/// in `[t_start, t_start + 3)`; the later label wins if two do.
pub fn segment_session(
    eeg: &[f64],
    channels: usize,
    fs: usize,
    labels: &[RtLabel],
) -> Result<Vec<SegmentState>> {
    let n = check_recording(eeg, channels, fs)?;
    let seg_len = PLANES_PER_SEGMENT * fs;
    let count = n / seg_len;
    if count == 0 {
        return Err(Error::InvalidArgument(format!(
            "recording of {n} samples is shorter than one {seg_len}-sample segment"
        )));
    }
    let mut segments: Vec<SegmentState> = (0..count)
        .map(|i| SegmentState {
            index: i,
            t_start_s: (i * PLANES_PER_SEGMENT) as f64,
            channels,
            samples_per_plane: fs,
            planes: SegmentState::from_window(eeg, channels, n, fs, i * seg_len),
            measured_rt: None,
        })
        .collect();
    for label in labels {
        if label.time_s < 0.0 {
            continue;
        }
        let i = (label.time_s / PLANES_PER_SEGMENT as f64).floor() as usize;
        if let Some(seg) = segments.get_mut(i) {
            seg.measured_rt = Some(label.rt_s);
        }
    }
    Ok(segments)
}

/// Inverse of [`segment_session`] up to the dropped remainder: the
/// recording and one label per covered segment (at the segment midpoint).
pub fn concat_segments(segments: &[SegmentState]) -> Result<(Vec<f64>, Vec<RtLabel>)> {
    let first = segments
        .first()
        .ok_or_else(|| Error::InvalidArgument("no segments to concatenate".into()))?;
    let (channels, fs) = (first.channels, first.samples_per_plane);
    let seg_len = PLANES_PER_SEGMENT * fs;
    let n = segments.len() * seg_len;
    let mut eeg = vec![0.0; channels * n];
    let mut labels = Vec::new();
    for (i, seg) in segments.iter().enumerate() {
        if seg.channels != channels || seg.samples_per_plane != fs {
            return Err(Error::shape("concat_segments", "segments differ in geometry"));
        }
        for t in 0..PLANES_PER_SEGMENT {
            for c in 0..channels {
                let src = &seg.planes[(t * channels + c) * fs..(t * channels + c + 1) * fs];
                let at = c * n + i * seg_len + t * fs;
                eeg[at..at + fs].copy_from_slice(src);
            }
        }
        if let Some(rt) = seg.measured_rt {
            labels.push(RtLabel {
                time_s: seg.t_start_s + PLANES_PER_SEGMENT as f64 / 2.0,
                rt_s: rt,
            });
        }
    }
    Ok((eeg, labels))
}

/// The `PLANES_PER_SEGMENT`-second windows ending at each `(onset, label)`,
/// shaped like segments. Windows that would start before the recording are
/// skipped.
pub fn extract_trials(
    eeg: &[f64],
    channels: usize,
    fs: usize,
    onsets: &[(f64, f64)],
) -> Result<Vec<SegmentState>> {
    let n = check_recording(eeg, channels, fs)?;
    let seg_len = PLANES_PER_SEGMENT * fs;
    let mut trials = Vec::with_capacity(onsets.len());
    for &(onset, rt) in onsets {
        let end = (onset * fs as f64).round();
        if end < seg_len as f64 || end as usize > n {
            continue;
        }
        let start = end as usize - seg_len;
        trials.push(SegmentState {
            index: trials.len(),
            t_start_s: start as f64 / fs as f64,
            channels,
            samples_per_plane: fs,
            planes: SegmentState::from_window(eeg, channels, n, fs, start),
            measured_rt: Some(rt),
        });
    }
    Ok(trials)
}
