//! Zero-phase Butterworth band-pass built from second-order sections.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterSpec {
    pub low_cut: f64,
    pub high_cut: f64,
    /// Order of each of the high-pass and low-pass halves; must be even.
    pub order: usize,
}

impl Default for FilterSpec {
    fn default() -> Self {
        FilterSpec {
            low_cut: 0.5,
            high_cut: 50.0,
            order: 4,
        }
    }
}

impl FilterSpec {
    pub fn validate(&self, fs: f64) -> Result<()> {
        if !(self.low_cut > 0.0 && self.low_cut < self.high_cut && self.high_cut < fs / 2.0) {
            return Err(Error::InvalidArgument(format!(
                "band edges must satisfy 0 < {} < {} < fs/2 = {}",
                self.low_cut,
                self.high_cut,
                fs / 2.0
            )));
        }
        if self.order == 0 || self.order % 2 != 0 {
            return Err(Error::InvalidArgument(format!(
                "filter order must be a positive even number, got {}",
                self.order
            )));
        }
        Ok(())
    }
}

/// Direct-form II transposed biquad with `a0 = 1`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Biquad {
    pub b0: f64,
    pub b1: f64,
    pub b2: f64,
    pub a1: f64,
    pub a2: f64,
}

impl Biquad {
    fn lowpass(k: f64, q: f64) -> Self {
        let d = 1.0 + k / q + k * k;
        let b0 = k * k / d;
        Biquad {
            b0,
            b1: 2.0 * b0,
            b2: b0,
            a1: 2.0 * (k * k - 1.0) / d,
            a2: (1.0 - k / q + k * k) / d,
        }
    }

    fn highpass(k: f64, q: f64) -> Self {
        let d = 1.0 + k / q + k * k;
        let b0 = 1.0 / d;
        Biquad {
            b0,
            b1: -2.0 * b0,
            b2: b0,
            a1: 2.0 * (k * k - 1.0) / d,
            a2: (1.0 - k / q + k * k) / d,
        }
    }

    pub fn dc_gain(&self) -> f64 {
        (self.b0 + self.b1 + self.b2) / (1.0 + self.a1 + self.a2)
    }

    /// Magnitude response at `freq` for sampling rate `fs`.
    pub fn magnitude(&self, freq: f64, fs: f64) -> f64 {
        let w = 2.0 * PI * freq / fs;
        let (c1, s1, c2, s2) = (w.cos(), w.sin(), (2.0 * w).cos(), (2.0 * w).sin());
        let num_re = self.b0 + self.b1 * c1 + self.b2 * c2;
        let num_im = -(self.b1 * s1 + self.b2 * s2);
        let den_re = 1.0 + self.a1 * c1 + self.a2 * c2;
        let den_im = -(self.a1 * s1 + self.a2 * s2);
        (num_re.hypot(num_im)) / (den_re.hypot(den_im))
    }

    /// State `(z1, z2)` that makes a constant input of 1 a fixed point.
    fn steady_state(&self) -> (f64, f64) {
        let g = self.dc_gain();
        (g - self.b0, self.b2 - self.a2 * g)
    }
}

/// High-pass then low-pass Butterworth sections via the bilinear transform
/// with frequency prewarping.
pub fn butterworth_sections(spec: &FilterSpec, fs: f64) -> Result<Vec<Biquad>> {
    spec.validate(fs)?;
    let pairs = spec.order / 2;
    let qs: Vec<f64> = (0..pairs)
        .map(|k| 1.0 / (2.0 * (PI * (2 * k + 1) as f64 / (2 * spec.order) as f64).cos()))
        .collect();
    let k_hp = (PI * spec.low_cut / fs).tan();
    let k_lp = (PI * spec.high_cut / fs).tan();
    let mut sections: Vec<Biquad> = qs.iter().map(|&q| Biquad::highpass(k_hp, q)).collect();
    sections.extend(qs.iter().map(|&q| Biquad::lowpass(k_lp, q)));
    Ok(sections)
}

/// One-pass magnitude of the cascade; the zero-phase filter squares it.
pub fn cascade_magnitude(sections: &[Biquad], freq: f64, fs: f64) -> f64 {
    sections.iter().map(|s| s.magnitude(freq, fs)).product()
}

fn run_cascade(sections: &[Biquad], x: &mut [f64]) {
    // Initial conditions scaled by the first sample suppress the start-up step.
    let mut level = x[0];
    for s in sections {
        let (z1_unit, z2_unit) = s.steady_state();
        let (mut z1, mut z2) = (z1_unit * level, z2_unit * level);
        level *= s.dc_gain();
        for v in x.iter_mut() {
            let input = *v;
            let y = s.b0 * input + z1;
            z1 = s.b1 * input - s.a1 * y + z2;
            z2 = s.b2 * input - s.a2 * y;
            *v = y;
        }
    }
}

/// Forward-backward filtering with odd reflection at both ends.
pub fn filtfilt(sections: &[Biquad], signal: &[f64]) -> Result<Vec<f64>> {
    let n = signal.len();
    let min_len = 3 * sections.len() + 1;
    if n < min_len {
        return Err(Error::InvalidArgument(format!(
            "signal of {n} samples is too short for edge handling (need at least {min_len})"
        )));
    }
    let pad = (3 * (2 * sections.len() + 1)).min(n - 1);
    let (first, last) = (signal[0], signal[n - 1]);
    let mut ext = Vec::with_capacity(n + 2 * pad);
    ext.extend((1..=pad).rev().map(|i| 2.0 * first - signal[i]));
    ext.extend_from_slice(signal);
    ext.extend((1..=pad).map(|i| 2.0 * last - signal[n - 1 - i]));

    run_cascade(sections, &mut ext);
    ext.reverse();
    run_cascade(sections, &mut ext);
    ext.reverse();
    Ok(ext[pad..pad + n].to_vec())
}

/// Zero-phase band-pass of one channel; output length equals input length.
pub fn bandpass_filter(signal: &[f64], fs: f64, spec: &FilterSpec) -> Result<Vec<f64>> {
    let sections = butterworth_sections(spec, fs)?;
    if signal.len() <= 3 * spec.order {
        return Err(Error::InvalidArgument(format!(
            "signal of {} samples is too short for a order-{} filter (need more than {})",
            signal.len(),
            spec.order,
            3 * spec.order
        )));
    }
    filtfilt(&sections, signal)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn butterworth_corner_is_half_power() {
        let spec = FilterSpec::default();
        let sections = butterworth_sections(&spec, 500.0).unwrap();
        let lp = &sections[2..];
        let hp = &sections[..2];
        let at = |s: &[Biquad], f| cascade_magnitude(s, f, 500.0);
        assert!((at(lp, 50.0) - 0.5f64.sqrt()).abs() < 1e-12);
        // Near DC the high-pass numerator cancels, costing a few digits.
        assert!((at(hp, 0.5) - 0.5f64.sqrt()).abs() < 1e-10);
        assert!(at(hp, 0.0) < 1e-12);
        assert!((sections[2].dc_gain() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_specs() {
        let bad = FilterSpec { high_cut: 300.0, ..FilterSpec::default() };
        assert!(bandpass_filter(&[0.0; 100], 500.0, &bad).is_err());
        let odd = FilterSpec { order: 3, ..FilterSpec::default() };
        assert!(bandpass_filter(&[0.0; 100], 500.0, &odd).is_err());
        assert!(bandpass_filter(&[0.0; 12], 500.0, &FilterSpec::default()).is_err());
        assert_eq!(bandpass_filter(&[0.0; 13], 500.0, &FilterSpec::default()).unwrap().len(), 13);
    }

    #[test]
    fn constant_input_is_removed() {
        let out = bandpass_filter(&vec![3.0; 5000], 500.0, &FilterSpec::default()).unwrap();
        assert!(out.iter().all(|v| v.abs() < 3e-3), "{}", out.iter().fold(0.0f64, |m, v| m.max(v.abs())));
    }
}
