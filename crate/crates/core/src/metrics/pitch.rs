//! YIN pitch tracking and F0 frame error.

use crate::error::{Error, Result};

/// Per-frame pitch estimate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PitchFrame {
    pub f0: f64,
    pub voiced: bool,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct PitchTrack {
    pub frames: Vec<PitchFrame>,
}

impl PitchTrack {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn voiced_fraction(&self) -> f64 {
        if self.frames.is_empty() {
            return 0.0;
        }
        self.frames.iter().filter(|f| f.voiced).count() as f64 / self.frames.len() as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct YinConfig {
    pub sample_rate: f64,
    /// Samples per analysis buffer (difference window plus maximum lag).
    pub frame_len: usize,
    pub hop: usize,
    pub f0_min: f64,
    pub f0_max: f64,
    pub threshold: f64,
}

impl Default for YinConfig {
    fn default() -> Self {
        YinConfig {
            sample_rate: 16_000.0,
            frame_len: 480,
            hop: 200,
            f0_min: 100.0,
            f0_max: 400.0,
            threshold: 0.15,
        }
    }
}

/// YIN over frames centred like the STFT frames: `len / hop` frames.
pub fn yin_f0(wave: &[f64], cfg: &YinConfig) -> Result<PitchTrack> {
    if !(cfg.f0_min > 0.0) || !(cfg.f0_max > cfg.f0_min) || cfg.f0_max >= cfg.sample_rate / 2.0 {
        return Err(Error::domain(format!(
            "invalid F0 search range {}..{} Hz",
            cfg.f0_min, cfg.f0_max
        )));
    }
    if cfg.hop == 0 {
        return Err(Error::domain("hop must be positive"));
    }
    if cfg.frame_len > wave.len() {
        return Err(Error::domain(format!(
            "frame of {} samples is longer than the {}-sample waveform",
            cfg.frame_len,
            wave.len()
        )));
    }
    let tau_min = ((cfg.sample_rate / cfg.f0_max).floor() as usize).max(2);
    let tau_max = (cfg.sample_rate / cfg.f0_min).ceil() as usize;
    if tau_max + 2 >= cfg.frame_len {
        return Err(Error::domain(format!(
            "frame of {} samples cannot cover lag {}",
            cfg.frame_len, tau_max
        )));
    }
    let width = cfg.frame_len - tau_max - 1;
    let frames = wave.len() / cfg.hop;
    let mut buf = vec![0.0; cfg.frame_len];
    let mut diff = vec![0.0; tau_max + 2];
    let mut out = Vec::with_capacity(frames);
    for t in 0..frames {
        // Edge frames slide inward so the buffer never runs off the signal.
        let centre = t * cfg.hop + cfg.hop / 2;
        let start = centre.saturating_sub(cfg.frame_len / 2).min(wave.len() - cfg.frame_len);
        buf.copy_from_slice(&wave[start..start + cfg.frame_len]);
        out.push(yin_frame(&buf, width, tau_min, tau_max, cfg, &mut diff));
    }
    Ok(PitchTrack { frames: out })
}

fn yin_frame(
    buf: &[f64],
    width: usize,
    tau_min: usize,
    tau_max: usize,
    cfg: &YinConfig,
    diff: &mut [f64],
) -> PitchFrame {
    const UNVOICED: PitchFrame = PitchFrame { f0: 0.0, voiced: false };
    let energy: f64 = buf[..width].iter().map(|x| x * x).sum();
    if energy < 1e-12 {
        return UNVOICED;
    }
    // difference function
    diff[0] = 0.0;
    for tau in 1..=tau_max + 1 {
        let mut s = 0.0;
        for j in 0..width {
            let d = buf[j] - buf[j + tau];
            s += d * d;
        }
        diff[tau] = s;
    }
    // cumulative mean normalization
    let mut running = 0.0;
    let mut cmnd = vec![1.0; tau_max + 2];
    for tau in 1..=tau_max + 1 {
        running += diff[tau];
        cmnd[tau] = if running > 0.0 {
            diff[tau] * tau as f64 / running
        } else {
            1.0
        };
    }
    // absolute threshold, then walk down to the local minimum
    let Some(mut tau) = (tau_min..=tau_max).find(|&k| cmnd[k] < cfg.threshold) else {
        return UNVOICED;
    };
    while tau < tau_max && cmnd[tau + 1] < cmnd[tau] {
        tau += 1;
    }
    // parabolic interpolation
    let (a, b, c) = (cmnd[tau - 1], cmnd[tau], cmnd[tau + 1]);
    let denom = a - 2.0 * b + c;
    let shift = if denom.abs() > 1e-12 {
        (0.5 * (a - c) / denom).clamp(-1.0, 1.0)
    } else {
        0.0
    };
    let f0 = (cfg.sample_rate / (tau as f64 + shift)).clamp(cfg.f0_min, cfg.f0_max);
    PitchFrame { f0, voiced: true }
}

/// Fraction of frames with a voicing mismatch or, when both are voiced, a
/// deviation of more than 20% from the reference.
pub fn ffe(reference: &PitchTrack, estimate: &PitchTrack) -> Result<f64> {
    if reference.len() != estimate.len() {
        return Err(Error::dim(format!(
            "pitch tracks have {} and {} frames",
            reference.len(),
            estimate.len()
        )));
    }
    if reference.is_empty() {
        return Ok(0.0);
    }
    let errors = reference
        .frames
        .iter()
        .zip(&estimate.frames)
        .filter(|(r, e)| match (r.voiced, e.voiced) {
            (true, true) => (e.f0 - r.f0).abs() > 0.2 * r.f0,
            (false, false) => false,
            _ => true,
        })
        .count();
    Ok(errors as f64 / reference.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngStream;
    use std::f64::consts::PI;

    fn track(f0s: &[f64]) -> PitchTrack {
        PitchTrack {
            frames: f0s
                .iter()
                .map(|f| PitchFrame {
                    f0: *f,
                    voiced: *f > 0.0,
                })
                .collect(),
        }
    }

    #[test]
    fn sine_220() {
        let wave: Vec<f64> = (0..8000)
            .map(|i| (2.0 * PI * 220.0 * i as f64 / 16_000.0).sin())
            .collect();
        let t = yin_f0(&wave, &YinConfig::default()).unwrap();
        assert_eq!(t.len(), 40);
        for f in &t.frames {
            assert!(f.voiced);
            assert!((f.f0 - 220.0).abs() < 1.0, "{}", f.f0);
        }
    }

    #[test]
    fn silence_is_unvoiced() {
        let t = yin_f0(&vec![0.0; 4000], &YinConfig::default()).unwrap();
        assert!(t.frames.iter().all(|f| !f.voiced));
    }

    #[test]
    fn quiet_noise_is_mostly_unvoiced() {
        let mut rng = RngStream::new(4);
        let wave: Vec<f64> = (0..8000).map(|_| 1e-3 * rng.standard_normal()).collect();
        let t = yin_f0(&wave, &YinConfig::default()).unwrap();
        assert!(t.voiced_fraction() < 0.5, "{}", t.voiced_fraction());
    }

    #[test]
    fn frame_longer_than_wave() {
        assert!(matches!(
            yin_f0(&[0.1; 100], &YinConfig::default()),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn ffe_examples() {
        let r = track(&[100.0, 150.0, 200.0, 250.0]);
        assert_eq!(ffe(&r, &r).unwrap(), 0.0);
        let high = track(&[125.0, 187.5, 250.0, 312.5]);
        assert_eq!(ffe(&r, &high).unwrap(), 1.0);
        let flipped = track(&[0.0, 150.0, 0.0, 250.0]);
        assert_eq!(ffe(&r, &flipped).unwrap(), 0.5);
        assert!(matches!(ffe(&r, &track(&[1.0])), Err(Error::Dimension(_))));
    }
}
