//! Objective evaluation: STFT and Griffin-Lim resynthesis, YIN, FFE,
//! MFCC/MCD and per-token prosody diversity.

pub mod cepstrum;
pub mod pitch;
pub mod prosody;
pub mod stft;

pub use cepstrum::{mcd, mfcc, MfccConfig};
pub use pitch::{ffe, yin_f0, PitchFrame, PitchTrack, YinConfig};
pub use prosody::{diversity_stats, phoneme_prosody, DiversityStats, ProsodyMeasurements, TokenProsody};
pub use stft::{griffin_lim, griffin_lim_traced, stft_mag, GriffinLimOutput, Stft};

use crate::error::Result;
use crate::numerics::RngStream;
use crate::tape::Mat;

/// Signal front-end shared by the corpus and every metric.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AudioConfig {
    pub sample_rate: u32,
    /// STFT window in samples (50 ms).
    pub window: usize,
    /// Frame hop in samples (12.5 ms).
    pub hop: usize,
    /// Linear-frequency bins kept per frame.
    pub bins: usize,
    pub griffin_lim_iterations: usize,
}

impl Default for AudioConfig {
    fn default() -> Self {
        AudioConfig {
            sample_rate: 16_000,
            window: 800,
            hop: 200,
            bins: 64,
            griffin_lim_iterations: 32,
        }
    }
}

impl AudioConfig {
    pub fn hop_ms(&self) -> f64 {
        1000.0 * self.hop as f64 / self.sample_rate as f64
    }

    pub fn bin_hz(&self) -> f64 {
        self.sample_rate as f64 / self.window as f64
    }

    pub fn stft(&self) -> Result<Stft> {
        Stft::new(self.window, self.hop)
    }

    pub fn yin(&self) -> YinConfig {
        YinConfig {
            sample_rate: self.sample_rate as f64,
            hop: self.hop,
            ..YinConfig::default()
        }
    }

    pub fn mfcc(&self) -> MfccConfig {
        MfccConfig {
            bin_hz: self.bin_hz(),
            ..MfccConfig::default()
        }
    }

    /// Band-limited magnitude frames of a waveform.
    pub fn frames(&self, wave: &[f64]) -> Result<Mat> {
        let full = self.stft()?.magnitudes(wave)?;
        let mut out = Mat::zeros(full.rows, self.bins);
        for t in 0..full.rows {
            out.row_mut(t).copy_from_slice(&full.row(t)[..self.bins]);
        }
        Ok(out)
    }

    /// Pitch of predicted frames via Griffin-Lim resynthesis. Negative
    /// predictions are clipped to zero first.
    pub fn pitch_of_frames(&self, frames: &Mat, rng: &mut RngStream) -> Result<PitchTrack> {
        let clipped = frames.map(|v| v.max(0.0));
        let wave = griffin_lim(&self.stft()?, &clipped, self.griffin_lim_iterations, rng)?;
        self.pitch_of_wave(&wave)
    }

    pub fn pitch_of_wave(&self, wave: &[f64]) -> Result<PitchTrack> {
        yin_f0(wave, &self.yin())
    }
}
