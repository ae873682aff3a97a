//! Test tones and single-bin spectral measurement.

use std::f64::consts::PI;

use super::SAMPLE_RATE;

/// Phase-continuous sine generator.
#[derive(Debug, Clone)]
pub struct ToneGen {
    hz: f64,
    amplitude: f64,
    phase: f64,
}

impl ToneGen {
    pub fn new(hz: f64, amplitude: i16) -> Self {
        Self {
            hz,
            amplitude: f64::from(amplitude),
            phase: 0.0,
        }
    }

    pub fn fill(&mut self, out: &mut [i16]) {
        let step = 2.0 * PI * self.hz / f64::from(SAMPLE_RATE);
        for s in out {
            *s = (self.amplitude * self.phase.sin()).round() as i16;
            self.phase = (self.phase + step) % (2.0 * PI);
        }
    }

    pub fn samples(&mut self, n: usize) -> Vec<i16> {
        let mut v = vec![0; n];
        self.fill(&mut v);
        v
    }
}

/// Level of the `hz` component in dB relative to a full-scale sine,
/// measured with a Hann-windowed Goertzel filter. Silence reports -200.
pub fn tone_energy(samples: &[i16], hz: f64) -> f64 {
    let n = samples.len();
    if n < 2 {
        return -200.0;
    }
    let w = 2.0 * PI * hz / f64::from(SAMPLE_RATE);
    let coeff = 2.0 * w.cos();
    let (mut s1, mut s2) = (0.0f64, 0.0f64);
    let mut window_sum = 0.0;
    for (i, &x) in samples.iter().enumerate() {
        let win = 0.5 - 0.5 * (2.0 * PI * i as f64 / (n - 1) as f64).cos();
        window_sum += win;
        let s0 = f64::from(x) * win + coeff * s1 - s2;
        s2 = s1;
        s1 = s0;
    }
    let power = s1 * s1 + s2 * s2 - coeff * s1 * s2;
    let amplitude = 2.0 * power.max(0.0).sqrt() / window_sum;
    let db = 20.0 * (amplitude / 32768.0).log10();
    if db.is_finite() {
        db.max(-200.0)
    } else {
        -200.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_scale_tone_reads_near_zero_db() {
        let s = ToneGen::new(440.0, 32767).samples(4000);
        let at = tone_energy(&s, 440.0);
        assert!((-3.0..=0.5).contains(&at), "{at}");
        assert!(tone_energy(&s, 1000.0) <= -30.0);
    }

    #[test]
    fn half_scale_is_six_db_down() {
        let s = ToneGen::new(600.0, 16384).samples(1600);
        assert!((tone_energy(&s, 600.0) + 6.02).abs() < 0.5);
    }

    #[test]
    fn silence_is_floor() {
        assert_eq!(tone_energy(&[0; 800], 440.0), -200.0);
        assert_eq!(tone_energy(&[], 440.0), -200.0);
    }
}
