//! Rational-rate polyphase resampling with a Kaiser-windowed sinc kernel.

use std::f64::consts::PI;

use crate::error::{Error, Result};

const KAISER_BETA: f64 = 5.0;
/// Kernel half-length in units of the slower of the two rates' periods.
const ZERO_CROSSINGS: usize = 10;

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Zeroth-order modified Bessel function of the first kind (power series).
fn bessel_i0(x: f64) -> f64 {
    let q = x * x / 4.0;
    let mut term = 1.0;
    let mut sum = 1.0;
    for k in 1..200 {
        term *= q / (k * k) as f64;
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

/// Precomputed polyphase filter bank for an `up / down` rate change.
#[derive(Clone, Debug)]
pub struct Resampler {
    up: usize,
    down: usize,
    /// Per output phase: (input offset, normalised weight) pairs.
    phases: Vec<Vec<(isize, f64)>>,
}

impl Resampler {
    pub fn new(from_hz: u64, to_hz: u64) -> Result<Self> {
        if from_hz == 0 || to_hz == 0 {
            return Err(Error::InvalidArgument("sampling rates must be positive".into()));
        }
        let g = gcd(from_hz, to_hz);
        let (up, down) = ((to_hz / g) as usize, (from_hz / g) as usize);
        let span = up.max(down);
        let half = (ZERO_CROSSINGS * span) as isize;
        let cutoff = 1.0 / (2.0 * span as f64);
        let i0_beta = bessel_i0(KAISER_BETA);
        let tap = |k: isize| {
            let r = k as f64 / half as f64;
            let window = bessel_i0(KAISER_BETA * (1.0 - r * r).max(0.0).sqrt()) / i0_beta;
            2.0 * cutoff * sinc(2.0 * cutoff * k as f64) * window
        };
        let (up_i, half_i) = (up as isize, half);
        let phases = (0..up_i)
            .map(|p| {
                // Offset mM - jL = p + iL for input j = base - i.
                let lo = (-half_i - p).div_euclid(up_i) + if (-half_i - p).rem_euclid(up_i) == 0 { 0 } else { 1 };
                let hi = (half_i - p).div_euclid(up_i);
                let mut taps: Vec<(isize, f64)> = (lo..=hi).map(|i| (i, tap(p + i * up_i))).collect();
                let total: f64 = taps.iter().map(|t| t.1).sum();
                taps.iter_mut().for_each(|t| t.1 /= total);
                taps
            })
            .collect();
        Ok(Resampler { up, down, phases })
    }

    pub fn output_len(&self, n: usize) -> usize {
        n * self.up / self.down
    }

    /// Resample one channel; samples beyond either edge repeat the edge value.
    pub fn apply(&self, signal: &[f64]) -> Result<Vec<f64>> {
        if signal.is_empty() {
            return Err(Error::InvalidArgument("cannot resample an empty signal".into()));
        }
        let last = signal.len() as isize - 1;
        let out_len = self.output_len(signal.len());
        let mut out = Vec::with_capacity(out_len);
        for m in 0..out_len {
            let pos = m * self.down;
            let phase = pos % self.up;
            let base = (pos / self.up) as isize;
            let acc = self.phases[phase]
                .iter()
                .map(|&(i, w)| w * signal[(base - i).clamp(0, last) as usize])
                .sum();
            out.push(acc);
        }
        Ok(out)
    }
}

/// Resample one channel from `from_hz` to `to_hz`; output length is
/// `floor(n * to / from)`.
pub fn resample(signal: &[f64], from_hz: u64, to_hz: u64) -> Result<Vec<f64>> {
    Resampler::new(from_hz, to_hz)?.apply(signal)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn length_law() {
        assert_eq!(resample(&vec![0.0; 1500], 500, 128).unwrap().len(), 384);
        for n in [1usize, 3, 4, 499, 500, 501, 12345] {
            assert_eq!(resample(&vec![1.0; n], 500, 128).unwrap().len(), n * 128 / 500);
        }
        assert!(resample(&[], 500, 128).is_err());
    }

    #[test]
    fn constant_is_preserved() {
        let out = resample(&vec![-2.5; 4000], 500, 128).unwrap();
        assert!(out.iter().all(|v| (v + 2.5).abs() < 1e-12));
    }

    #[test]
    fn bessel_reference_values() {
        assert!((bessel_i0(0.0) - 1.0).abs() < 1e-15);
        assert!((bessel_i0(1.0) - 1.266_065_877_752_008_4).abs() < 1e-14);
        assert!((bessel_i0(5.0) - 27.239_871_823_604_45).abs() < 1e-11);
    }
}
