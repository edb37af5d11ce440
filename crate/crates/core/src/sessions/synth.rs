//! Seeded synthetic sessions with a known drowsiness trace.
//!
//! Drowsiness is a logistic-squashed Ornstein-Uhlenbeck walk sampled once per
//! second. EEG is a fixed random mixture of narrowband theta and alpha
//! sources whose amplitudes grow with drowsiness, on top of per-channel 1/f
//! noise. Reaction times follow the latent RT plus small truncated noise.

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use super::{LatentTrace, Session, TrialEvent, LATENT_RT_MAX, LATENT_RT_MIN};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub subject_id: String,
    pub duration_s: f64,
    /// Seed of everything that varies between sessions.
    pub seed: u64,
    /// Seed of the source-to-electrode mixing, shared by all sessions of
    /// one simulated subject.
    pub subject_seed: u64,
    pub fs_hz: f64,
    pub n_channels: usize,
    /// Mean-reversion time constant of the drowsiness walk.
    pub time_constant_s: f64,
    /// Stationary standard deviation of the walk before squashing.
    pub latent_spread: f64,
    /// Source amplitude at zero drowsiness.
    pub base_amplitude: f64,
    /// Theta amplitude gained per unit drowsiness.
    pub theta_gain: f64,
    /// Alpha amplitude gained per unit drowsiness.
    pub alpha_gain: f64,
    /// RMS of the per-channel 1/f background.
    pub noise_level: f64,
    /// Standard deviation of the trial RT noise (truncated at 3 sigma).
    pub rt_noise_s: f64,
    pub gap_min_s: f64,
    pub gap_max_s: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            subject_id: "synthetic".into(),
            duration_s: 600.0,
            seed: 0,
            subject_seed: 0,
            fs_hz: 500.0,
            n_channels: 30,
            time_constant_s: 240.0,
            latent_spread: 1.5,
            base_amplitude: 0.3,
            theta_gain: 2.0,
            alpha_gain: 1.5,
            noise_level: 1.0,
            rt_noise_s: 0.15,
            gap_min_s: 5.0,
            gap_max_s: 10.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if !(self.duration_s >= 60.0) {
            return bad("duration_s must be at least 60");
        }
        if !(self.time_constant_s > 0.0) {
            return bad("time_constant_s must be positive");
        }
        if !(self.fs_hz > 0.0) || self.fs_hz.fract() != 0.0 || self.n_channels == 0 {
            return bad("fs_hz must be a positive integer rate and n_channels positive");
        }
        if !(self.gap_min_s >= super::MIN_EVENT_GAP_S && self.gap_max_s >= self.gap_min_s) {
            return bad("inter-trial gaps must satisfy 5 <= gap_min_s <= gap_max_s");
        }
        let non_negative = [
            self.latent_spread,
            self.base_amplitude,
            self.theta_gain,
            self.alpha_gain,
            self.noise_level,
            self.rt_noise_s,
        ];
        if non_negative.iter().any(|v| !(*v >= 0.0)) {
            return bad("amplitudes, gains and noise levels must be non-negative");
        }
        Ok(())
    }

    pub fn n_samples(&self) -> usize {
        (self.duration_s * self.fs_hz).round() as usize
    }
}

struct SourceSpec {
    centre_hz: f64,
    bandwidth_hz: f64,
    theta: bool,
}

const SOURCES: [SourceSpec; 4] = [
    SourceSpec { centre_hz: 5.0, bandwidth_hz: 1.5, theta: true },
    SourceSpec { centre_hz: 6.5, bandwidth_hz: 1.5, theta: true },
    SourceSpec { centre_hz: 9.5, bandwidth_hz: 2.0, theta: false },
    SourceSpec { centre_hz: 11.0, bandwidth_hz: 2.0, theta: false },
];

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Critically damped second-order walk: a mean-reverting (OU) drive with
/// time constant `tau / 2`, low-passed by a second stage of the same time
/// constant. Paths are smooth on the scale of a few segments while the
/// overall correlation time stays near `tau`. The drive variance is doubled
/// so that the output keeps a stationary spread of `latent_spread`; a burn-in
/// of several time constants starts it in the stationary regime.
fn drowsiness_walk(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let seconds = cfg.duration_s.floor() as usize + 1;
    let decay = (-2.0 / cfg.time_constant_s).exp();
    let drive_spread = cfg.latent_spread * 2f64.sqrt();
    let kick = drive_spread * (1.0 - decay * decay).sqrt();
    let burn_in = (5.0 * cfg.time_constant_s).ceil() as usize;
    let mut v = drive_spread * normal(rng);
    let mut u = v;
    let mut d = Vec::with_capacity(seconds);
    for i in 0..burn_in + seconds {
        if i >= burn_in {
            d.push(1.0 / (1.0 + (-u).exp()));
        }
        u = decay * u + (1.0 - decay) * v;
        v = decay * v + kick * normal(rng);
    }
    d
}

fn place_events(cfg: &SynthConfig, latent: &LatentTrace, rng: &mut ChaCha8Rng) -> Vec<TrialEvent> {
    let gap = Uniform::new_inclusive(cfg.gap_min_s, cfg.gap_max_s);
    let hold = Uniform::new_inclusive(0.3, 1.0);
    let mut events = Vec::new();
    let mut t = gap.sample(rng);
    loop {
        let noise = (cfg.rt_noise_s * normal(rng)).clamp(-3.0 * cfg.rt_noise_s, 3.0 * cfg.rt_noise_s);
        let rt = (latent.rt_at(t) + noise).clamp(LATENT_RT_MIN, LATENT_RT_MAX);
        let response_onset = t + rt;
        let response_offset = response_onset + hold.sample(rng);
        if response_offset >= cfg.duration_s {
            break;
        }
        events.push(TrialEvent {
            event_onset: t,
            response_onset,
            response_offset,
        });
        t += gap.sample(rng);
    }
    events
}

/// Unit-variance AR(2) resonator noise centred on `centre_hz`.
fn narrowband(spec: &SourceSpec, fs: f64, n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let r = (-PI * spec.bandwidth_hz / fs).exp();
    let a1 = 2.0 * r * (2.0 * PI * spec.centre_hz / fs).cos();
    let a2 = -r * r;
    let var = (1.0 - a2) / ((1.0 + a2) * ((1.0 - a2).powi(2) - a1 * a1));
    let scale = 1.0 / var.sqrt();
    let burn_in = (5.0 * fs / spec.bandwidth_hz) as usize;
    let (mut y1, mut y2) = (0.0, 0.0);
    let mut out = Vec::with_capacity(n);
    for i in 0..burn_in + n {
        let y = a1 * y1 + a2 * y2 + normal(rng);
        y2 = y1;
        y1 = y;
        if i >= burn_in {
            out.push(y * scale);
        }
    }
    out
}

/// 1/f noise (Kellet's three-pole approximation) scaled to unit RMS.
fn pink(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let (mut b0, mut b1, mut b2) = (0.0, 0.0, 0.0);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let w = normal(rng);
        b0 = 0.99765 * b0 + w * 0.0990460;
        b1 = 0.96300 * b1 + w * 0.2965164;
        b2 = 0.57000 * b2 + w * 1.0526913;
        out.push(b0 + b1 + b2 + w * 0.1848);
    }
    let mean = out.iter().sum::<f64>() / n as f64;
    let rms = (out.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64).sqrt();
    out.iter_mut().for_each(|v| *v = (*v - mean) / rms);
    out
}

/// Generate one session at `cfg.fs_hz` and its latent trace; fully
/// determined by `cfg.seed` and `cfg.subject_seed`.
pub fn generate_session(cfg: &SynthConfig) -> Result<(Session, LatentTrace)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let fs = cfg.fs_hz;
    let n = cfg.n_samples();
    let n_src = SOURCES.len();
    let mut subject_rng = ChaCha8Rng::seed_from_u64(cfg.subject_seed);
    let mixing: Vec<f64> = (0..cfg.n_channels * n_src).map(|_| normal(&mut subject_rng)).collect();
    let latent = LatentTrace::from_drowsiness(drowsiness_walk(cfg, &mut rng));
    let events = place_events(cfg, &latent, &mut rng);

    let mut eeg = vec![0.0; cfg.n_channels * n];
    let envelope: Vec<f64> = (0..n).map(|i| latent.d_at(i as f64 / fs)).collect();
    for (s, spec) in SOURCES.iter().enumerate() {
        let gain = if spec.theta { cfg.theta_gain } else { cfg.alpha_gain };
        let mut src = narrowband(spec, fs, n, &mut rng);
        for (v, &d) in src.iter_mut().zip(&envelope) {
            *v *= cfg.base_amplitude + gain * d;
        }
        for ch in 0..cfg.n_channels {
            let m = mixing[ch * n_src + s];
            for (e, &v) in eeg[ch * n..(ch + 1) * n].iter_mut().zip(&src) {
                *e += m * v;
            }
        }
    }
    for ch in 0..cfg.n_channels {
        let bg = pink(n, &mut rng);
        for (e, v) in eeg[ch * n..(ch + 1) * n].iter_mut().zip(bg) {
            *e += cfg.noise_level * v;
        }
    }

    let session = Session {
        subject_id: cfg.subject_id.clone(),
        fs,
        n_channels: cfg.n_channels,
        eeg,
        events,
        duration_s: cfg.duration_s,
        seed: Some(cfg.seed),
    };
    session.validate()?;
    Ok((session, latent))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sessions::measured_rt;

    fn small(seed: u64) -> SynthConfig {
        SynthConfig {
            duration_s: 120.0,
            seed,
            n_channels: 4,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn deterministic_under_seed() {
        let a = generate_session(&small(7)).unwrap();
        let b = generate_session(&small(7)).unwrap();
        assert_eq!(a, b);
        let c = generate_session(&small(8)).unwrap();
        assert_ne!(a.0.eeg, c.0.eeg);
    }

    #[test]
    fn gaps_and_rts_within_protocol_bounds() {
        let (s, latent) = generate_session(&SynthConfig { duration_s: 900.0, n_channels: 2, ..small(3) }).unwrap();
        assert!(s.events.len() > 80);
        for w in s.events.windows(2) {
            let gap = w[1].event_onset - w[0].event_onset;
            assert!((5.0..=10.0).contains(&gap), "gap {gap}");
        }
        for ev in &s.events {
            let rt = measured_rt(ev).unwrap();
            assert!((0.5 - 1e-9..=8.0 + 1e-9).contains(&rt), "rt {rt}");
            assert!((rt - latent.rt_at(ev.event_onset)).abs() <= 3.0 * 0.15 + 1e-9);
        }
        assert!(latent.rt.iter().all(|r| (0.5..=8.0).contains(r)));
        assert!(latent.d.iter().all(|d| (0.0..=1.0).contains(d)));
    }

    #[test]
    fn invalid_config_rejected() {
        assert!(generate_session(&SynthConfig { duration_s: 30.0, ..small(1) }).is_err());
        assert!(generate_session(&SynthConfig { time_constant_s: 0.0, ..small(1) }).is_err());
    }
}
