//! Session data model, on-disk directory format and the synthetic generator.

mod io;
mod synth;

pub use io::{load_latent, load_session, save_latent, save_session, SessionMeta, EEG_FILE, EVENTS_FILE, LATENT_FILE, META_FILE};
pub use synth::{generate_session, SynthConfig};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lower bound on the spacing of consecutive event onsets, in seconds.
pub const MIN_EVENT_GAP_S: f64 = 5.0;

/// One lane-departure trial.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialEvent {
    pub event_onset: f64,
    pub response_onset: f64,
    pub response_offset: f64,
}

impl TrialEvent {
    pub fn validate(&self) -> Result<()> {
        let ok = self.event_onset.is_finite()
            && self.response_offset.is_finite()
            && self.event_onset < self.response_onset
            && self.response_onset < self.response_offset;
        if !ok {
            return Err(Error::Precondition(format!(
                "trial must satisfy event_onset < response_onset < response_offset, got {} / {} / {}",
                self.event_onset, self.response_onset, self.response_offset
            )));
        }
        Ok(())
    }
}

/// Reaction time: response onset minus event onset.
pub fn measured_rt(trial: &TrialEvent) -> Result<f64> {
    trial.validate()?;
    Ok(trial.response_onset - trial.event_onset)
}

/// Continuous multichannel recording with its trial markers.
#[derive(Clone, Debug, PartialEq)]
pub struct Session {
    pub subject_id: String,
    pub fs: f64,
    pub n_channels: usize,
    /// Row-major `n_channels x n_samples`.
    pub eeg: Vec<f64>,
    pub events: Vec<TrialEvent>,
    pub duration_s: f64,
    pub seed: Option<u64>,
}

impl Session {
    pub fn n_samples(&self) -> usize {
        if self.n_channels == 0 {
            0
        } else {
            self.eeg.len() / self.n_channels
        }
    }

    pub fn channel(&self, index: usize) -> &[f64] {
        let n = self.n_samples();
        &self.eeg[index * n..(index + 1) * n]
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fs > 0.0) || self.n_channels == 0 {
            return Err(Error::InvalidArgument(format!(
                "session needs fs > 0 and channels > 0, got {} Hz / {}",
                self.fs, self.n_channels
            )));
        }
        if self.eeg.len() % self.n_channels != 0 {
            return Err(Error::InvalidArgument(format!(
                "eeg length {} is not a multiple of {} channels",
                self.eeg.len(),
                self.n_channels
            )));
        }
        for (i, ev) in self.events.iter().enumerate() {
            ev.validate()?;
            if ev.response_offset >= self.duration_s {
                return Err(Error::Precondition(format!(
                    "event {i} ends at {} s, past the session duration {} s",
                    ev.response_offset, self.duration_s
                )));
            }
            if i > 0 {
                let gap = ev.event_onset - self.events[i - 1].event_onset;
                if gap < MIN_EVENT_GAP_S {
                    return Err(Error::Precondition(format!(
                        "event {i} follows the previous onset by {gap} s (< {MIN_EVENT_GAP_S} s)"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Ground-truth drowsiness of a synthetic session, sampled once per second.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentTrace {
    /// Drowsiness in `[0, 1]` at `t = 0, 1, 2, ...` seconds.
    pub d: Vec<f64>,
    /// `0.5 + 7.5 * d`, in seconds.
    pub rt: Vec<f64>,
}

pub const LATENT_RT_MIN: f64 = 0.5;
pub const LATENT_RT_MAX: f64 = 8.0;

impl LatentTrace {
    pub fn from_drowsiness(d: Vec<f64>) -> Self {
        let rt = d
            .iter()
            .map(|&v| LATENT_RT_MIN + (LATENT_RT_MAX - LATENT_RT_MIN) * v)
            .collect();
        LatentTrace { d, rt }
    }

    /// Linearly interpolated latent RT at time `t` (clamped to the trace).
    pub fn rt_at(&self, t: f64) -> f64 {
        interp_per_second(&self.rt, t)
    }

    pub fn d_at(&self, t: f64) -> f64 {
        interp_per_second(&self.d, t)
    }

    /// Mean latent RT over `[start, end)` seconds, sampled at 0.1 s.
    pub fn mean_rt(&self, start: f64, end: f64) -> f64 {
        let steps = (((end - start) / 0.1).round() as usize).max(1);
        let dt = (end - start) / steps as f64;
        (0..steps).map(|i| self.rt_at(start + (i as f64 + 0.5) * dt)).sum::<f64>() / steps as f64
    }
}

fn interp_per_second(values: &[f64], t: f64) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let last = (values.len() - 1) as f64;
    let t = t.clamp(0.0, last);
    let i = t.floor() as usize;
    if i as f64 >= last {
        return values[values.len() - 1];
    }
    let frac = t - i as f64;
    values[i] * (1.0 - frac) + values[i + 1] * frac
}
