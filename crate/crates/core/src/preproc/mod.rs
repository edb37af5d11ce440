//! Signal chain from a raw session to model-ready segments and RT labels:
//! zero-phase band-pass, rational resampling, RT clipping/smoothing and 3 s
//! segmentation.

mod filter;
mod resample;
mod segment;

pub use filter::{bandpass_filter, butterworth_sections, cascade_magnitude, filtfilt, Biquad, FilterSpec};
pub use resample::{resample, Resampler};
pub use segment::{
    clip_and_smooth_rt, concat_segments, extract_trials, segment_session, RtLabel, RtSmoothingSpec,
    SegmentState, PLANES_PER_SEGMENT,
};

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sessions::{LatentTrace, Session};

/// Sampling rate the network consumes.
pub const MODEL_FS: u64 = 128;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PrepSpec {
    pub filter: FilterSpec,
    pub smoothing: RtSmoothingSpec,
}

/// A session after the full signal chain.
#[derive(Clone, Debug)]
pub struct PreparedSession {
    pub subject_id: String,
    pub segments: Vec<Arc<SegmentState>>,
    /// 3 s windows preceding each event onset, labelled with smoothed RT.
    pub trials: Vec<SegmentState>,
    pub labels: Vec<RtLabel>,
    /// Mean latent RT over each segment, when ground truth is known.
    pub latent_rt: Option<Vec<f64>>,
}

impl PreparedSession {
    pub fn covered(&self) -> usize {
        self.segments.iter().filter(|s| s.measured_rt.is_some()).count()
    }

    pub fn with_latent(mut self, latent: &LatentTrace) -> Self {
        self.latent_rt = Some(
            self.segments
                .iter()
                .map(|s| latent.mean_rt(s.t_start_s, s.t_start_s + s.duration_s()))
                .collect(),
        );
        self
    }
}

/// Filter and resample every channel of `session` to [`MODEL_FS`].
pub fn filter_and_resample(session: &Session, spec: &FilterSpec) -> Result<Vec<f64>> {
    session.validate()?;
    if session.fs.fract() != 0.0 {
        return Err(Error::InvalidArgument(format!(
            "sampling rate {} Hz is not an integer",
            session.fs
        )));
    }
    let resampler = Resampler::new(session.fs as u64, MODEL_FS)?;
    let sections = butterworth_sections(spec, session.fs)?;
    let mut out = Vec::with_capacity(session.n_channels * resampler.output_len(session.n_samples()));
    for c in 0..session.n_channels {
        let channel = session.channel(c);
        if channel.len() <= 3 * spec.order {
            return Err(Error::InvalidArgument(format!(
                "channel of {} samples is too short to filter",
                channel.len()
            )));
        }
        let filtered = filtfilt(&sections, channel)?;
        out.extend(resampler.apply(&filtered)?);
    }
    Ok(out)
}

/// Run the whole chain on one session.
pub fn prepare_session(session: &Session, spec: &PrepSpec) -> Result<PreparedSession> {
    let eeg = filter_and_resample(session, &spec.filter)?;
    let fs = MODEL_FS as usize;
    let (labels, trial_labels) = if session.events.is_empty() {
        (Vec::new(), Vec::new())
    } else {
        let raw: Vec<(f64, f64)> = session
            .events
            .iter()
            .map(|e| (e.event_onset, e.response_onset - e.event_onset))
            .collect();
        let smoothed = clip_and_smooth_rt(&raw, &spec.smoothing)?;
        let labels = session
            .events
            .iter()
            .zip(&smoothed)
            .map(|(e, &(_, rt))| RtLabel {
                time_s: e.response_onset,
                rt_s: rt,
            })
            .collect();
        (labels, smoothed)
    };
    let segments = segment_session(&eeg, session.n_channels, fs, &labels)?;
    let trials = extract_trials(&eeg, session.n_channels, fs, &trial_labels)?;
    Ok(PreparedSession {
        subject_id: session.subject_id.clone(),
        segments: segments.into_iter().map(Arc::new).collect(),
        trials,
        labels,
        latent_rt: None,
    })
}
