//! Hann-windowed STFT magnitudes, the matching overlap-add inverse, and
//! Griffin-Lim phase reconstruction.
//!
//! Frame `t` is centred on sample `t * hop + hop / 2` and zero-padded where it
//! extends past either end, so a signal of `T * hop` samples yields exactly `T`
//! frames. Magnitudes are scaled by `2 / sum(window)`, which maps a sinusoid of
//! amplitude `a` to a peak of roughly `a`.

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::numerics::RngStream;
use crate::tape::Mat;

/// Periodic Hann window.
pub fn hann(len: usize) -> Vec<f64> {
    (0..len)
        .map(|j| 0.5 - 0.5 * (2.0 * PI * j as f64 / len as f64).cos())
        .collect()
}

/// Reusable FFT plans and window for one (window, hop) pair.
pub struct Stft {
    window: Vec<f64>,
    hop: usize,
    scale: f64,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl Stft {
    pub fn new(window: usize, hop: usize) -> Result<Self> {
        if hop == 0 || window < hop {
            return Err(Error::domain(format!(
                "need window >= hop > 0, got window {window} hop {hop}"
            )));
        }
        let mut planner = FftPlanner::new();
        let w = hann(window);
        let scale = 2.0 / w.iter().sum::<f64>();
        Ok(Stft {
            forward: planner.plan_fft_forward(window),
            inverse: planner.plan_fft_inverse(window),
            window: w,
            hop,
            scale,
        })
    }

    pub fn window_len(&self) -> usize {
        self.window.len()
    }

    pub fn hop(&self) -> usize {
        self.hop
    }

    /// Number of bins returned by [`Stft::magnitudes`].
    pub fn bins(&self) -> usize {
        self.window.len() / 2
    }

    fn frame_start(&self, t: usize) -> isize {
        (t * self.hop + self.hop / 2) as isize - (self.window.len() / 2) as isize
    }

    /// Complex spectra (bins `0..=window/2`) of `frames` frames.
    pub fn analyze(&self, wave: &[f64], frames: usize) -> Vec<Vec<Complex<f64>>> {
        let n = self.window.len();
        let mut out = Vec::with_capacity(frames);
        let mut buf = vec![Complex::new(0.0, 0.0); n];
        for t in 0..frames {
            let start = self.frame_start(t);
            for (j, b) in buf.iter_mut().enumerate() {
                let idx = start + j as isize;
                let x = if idx >= 0 && (idx as usize) < wave.len() {
                    wave[idx as usize]
                } else {
                    0.0
                };
                *b = Complex::new(x * self.window[j], 0.0);
            }
            self.forward.process(&mut buf);
            out.push(buf[..=n / 2].to_vec());
        }
        out
    }

    /// Least-squares overlap-add inverse of one-sided spectra.
    pub fn synthesize(&self, spectra: &[Vec<Complex<f64>>], len: usize) -> Vec<f64> {
        let n = self.window.len();
        let mut out = vec![0.0; len];
        let mut norm = vec![0.0; len];
        let mut buf = vec![Complex::new(0.0, 0.0); n];
        for (t, spec) in spectra.iter().enumerate() {
            for k in 0..n {
                buf[k] = if k <= n / 2 { spec[k] } else { spec[n - k].conj() };
            }
            // bins 0 and n/2 of a real signal are real
            buf[0].im = 0.0;
            if n.is_multiple_of(2) {
                buf[n / 2].im = 0.0;
            }
            self.inverse.process(&mut buf);
            let start = self.frame_start(t);
            for j in 0..n {
                let idx = start + j as isize;
                if idx >= 0 && (idx as usize) < len {
                    let w = self.window[j];
                    out[idx as usize] += w * buf[j].re / n as f64;
                    norm[idx as usize] += w * w;
                }
            }
        }
        for (o, w) in out.iter_mut().zip(&norm) {
            if *w > 1e-10 {
                *o /= w;
            }
        }
        out
    }

    /// `T x window/2` scaled magnitudes with `T = len / hop`.
    pub fn magnitudes(&self, wave: &[f64]) -> Result<Mat> {
        if wave.len() < self.window.len() {
            return Err(Error::domain(format!(
                "waveform of {} samples is shorter than one window ({})",
                wave.len(),
                self.window.len()
            )));
        }
        let frames = wave.len() / self.hop;
        let spectra = self.analyze(wave, frames);
        Ok(self.to_magnitudes(&spectra, self.bins()))
    }

    fn to_magnitudes(&self, spectra: &[Vec<Complex<f64>>], bins: usize) -> Mat {
        let mut m = Mat::zeros(spectra.len(), bins);
        for (t, s) in spectra.iter().enumerate() {
            for (k, v) in m.row_mut(t).iter_mut().enumerate() {
                *v = s[k].norm() * self.scale;
            }
        }
        m
    }
}

/// Hann-windowed DFT magnitudes, `window / 2` bins per frame.
pub fn stft_mag(wave: &[f64], window: usize, hop: usize) -> Result<Mat> {
    Stft::new(window, hop)?.magnitudes(wave)
}

/// Griffin-Lim reconstruction with the per-iteration spectral error trace.
#[derive(Clone, Debug)]
pub struct GriffinLimOutput {
    pub waveform: Vec<f64>,
    /// `||(|STFT(x_i)| - frames)|| / ||frames||` after each iteration.
    pub errors: Vec<f64>,
}

/// Estimates a waveform of `frames.rows * hop` samples whose STFT magnitude
/// matches `frames`. Bins beyond `frames.cols` are treated as zero.
pub fn griffin_lim_traced(
    stft: &Stft,
    frames: &Mat,
    iterations: usize,
    rng: &mut RngStream,
) -> Result<GriffinLimOutput> {
    let half = stft.window_len() / 2;
    if frames.cols > half + 1 {
        return Err(Error::dim(format!(
            "{} bins exceed the {} available for window {}",
            frames.cols,
            half + 1,
            stft.window_len()
        )));
    }
    if frames.data.iter().any(|v| !(*v >= 0.0)) {
        return Err(Error::domain("magnitudes must be non-negative"));
    }
    let len = frames.rows * stft.hop();
    let target_norm = frames.sum_sq().sqrt();
    if target_norm == 0.0 {
        return Ok(GriffinLimOutput {
            waveform: vec![0.0; len],
            errors: vec![0.0; iterations],
        });
    }
    let inv_scale = 1.0 / stft.scale;
    let target: Vec<Vec<f64>> = (0..frames.rows)
        .map(|t| {
            let mut row = vec![0.0; half + 1];
            for (k, v) in frames.row(t).iter().enumerate() {
                row[k] = v * inv_scale;
            }
            row
        })
        .collect();
    let mut phases: Vec<Vec<Complex<f64>>> = target
        .iter()
        .map(|row| {
            row.iter()
                .map(|_| Complex::from_polar(1.0, 2.0 * PI * rng.uniform()))
                .collect()
        })
        .collect();

    let mut wave = Vec::new();
    let mut errors = Vec::with_capacity(iterations);
    for _ in 0..iterations.max(1) {
        let spectra: Vec<Vec<Complex<f64>>> = target
            .iter()
            .zip(&phases)
            .map(|(mag, ph)| mag.iter().zip(ph).map(|(m, p)| p * *m).collect())
            .collect();
        wave = stft.synthesize(&spectra, len);
        let rebuilt = stft.analyze(&wave, frames.rows);
        let mut err = 0.0;
        for (t, s) in rebuilt.iter().enumerate() {
            for k in 0..frames.cols {
                let d = s[k].norm() * stft.scale - frames.at(t, k);
                err += d * d;
            }
        }
        errors.push(err.sqrt() / target_norm);
        for (ph, s) in phases.iter_mut().zip(&rebuilt) {
            for (p, v) in ph.iter_mut().zip(s) {
                let n = v.norm();
                *p = if n > 0.0 { v / n } else { Complex::new(1.0, 0.0) };
            }
        }
    }
    errors.truncate(iterations);
    Ok(GriffinLimOutput { waveform: wave, errors })
}

/// Griffin-Lim resynthesis of `frames` (default 32 iterations).
pub fn griffin_lim(stft: &Stft, frames: &Mat, iterations: usize, rng: &mut RngStream) -> Result<Vec<f64>> {
    Ok(griffin_lim_traced(stft, frames, iterations, rng)?.waveform)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine(freq: f64, amp: f64, len: usize) -> Vec<f64> {
        (0..len)
            .map(|i| amp * (2.0 * PI * freq * i as f64 / 16_000.0).sin())
            .collect()
    }

    #[test]
    fn sine_peaks_at_expected_bin() {
        let m = stft_mag(&sine(250.0, 1.0, 8000), 800, 200).unwrap();
        assert_eq!(m.cols, 400);
        assert_eq!(m.rows, 40);
        for t in 2..m.rows - 2 {
            // 250 Hz sits halfway between bins 12 and 13; the winner depends on phase.
            let row = m.row(t);
            let peak = row.iter().cloned().fold(0.0, f64::max);
            assert!(row[12] == peak || row[13] == peak);
            assert!((row[12] - row[13]).abs() < 0.05 * peak);
        }
        let m = stft_mag(&sine(240.0, 1.0, 8000), 800, 200).unwrap();
        for t in 2..m.rows - 2 {
            let row = m.row(t);
            let argmax = (0..row.len()).max_by(|a, b| row[*a].total_cmp(&row[*b])).unwrap();
            assert_eq!(argmax, 12);
            assert!((row[12] - 1.0).abs() < 1e-6, "peak {}", row[12]);
        }
    }

    #[test]
    fn zero_and_linearity() {
        let z = stft_mag(&vec![0.0; 2000], 800, 200).unwrap();
        assert!(z.data.iter().all(|v| *v == 0.0));
        let a = stft_mag(&sine(310.0, 0.4, 3000), 800, 200).unwrap();
        let b = stft_mag(&sine(310.0, 0.8, 3000), 800, 200).unwrap();
        for (x, y) in a.data.iter().zip(&b.data) {
            assert!((2.0 * x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn short_waveform_rejected() {
        assert!(matches!(stft_mag(&[0.0; 799], 800, 200), Err(Error::Domain(_))));
        assert!(matches!(Stft::new(100, 200), Err(Error::Domain(_))));
    }

    #[test]
    fn inverse_reconstructs_interior() {
        let stft = Stft::new(800, 200).unwrap();
        let wave = sine(180.0, 0.7, 4000);
        let spectra = stft.analyze(&wave, 20);
        let back = stft.synthesize(&spectra, 4000);
        for i in 0..4000 {
            assert!((back[i] - wave[i]).abs() < 1e-9, "sample {i}");
        }
    }

    #[test]
    fn griffin_lim_on_zero_frames() {
        let stft = Stft::new(800, 200).unwrap();
        let mut rng = RngStream::new(0);
        let w = griffin_lim(&stft, &Mat::zeros(10, 64), 32, &mut rng).unwrap();
        assert_eq!(w.len(), 2000);
        assert!(w.iter().all(|v| *v == 0.0));
    }
}
