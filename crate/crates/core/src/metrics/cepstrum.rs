//! Mel-frequency cepstral coefficients and mel-cepstral distortion.

use std::f64::consts::{LN_10, PI};

use crate::error::{Error, Result};
use crate::tape::Mat;

pub const LOG_FLOOR: f64 = 1e-10;

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular mel filterbank over linear bins, each filter normalized to unit
/// sum so a flat spectrum gives equal band values.
#[derive(Clone, Debug)]
pub struct MelFilterbank {
    filters: Vec<Vec<(usize, f64)>>,
    bins: usize,
}

impl MelFilterbank {
    /// `bins` linear bins spaced `bin_hz` apart starting at 0 Hz.
    pub fn new(bands: usize, bins: usize, bin_hz: f64) -> Self {
        let f_max = (bins.saturating_sub(1)) as f64 * bin_hz;
        let m_max = hz_to_mel(f_max);
        let edges: Vec<f64> = (0..bands + 2)
            .map(|i| mel_to_hz(m_max * i as f64 / (bands + 1) as f64))
            .collect();
        let filters = (0..bands)
            .map(|b| {
                let (lo, mid, hi) = (edges[b], edges[b + 1], edges[b + 2]);
                let mut taps: Vec<(usize, f64)> = (0..bins)
                    .filter_map(|k| {
                        let f = k as f64 * bin_hz;
                        let w = if f > lo && f <= mid {
                            (f - lo) / (mid - lo)
                        } else if f > mid && f < hi {
                            (hi - f) / (hi - mid)
                        } else {
                            0.0
                        };
                        (w > 0.0).then_some((k, w))
                    })
                    .collect();
                if taps.is_empty() {
                    // narrower than one bin: take the bin nearest the centre
                    let k = ((mid / bin_hz).round() as usize).min(bins - 1);
                    taps.push((k, 1.0));
                }
                let total: f64 = taps.iter().map(|(_, w)| w).sum();
                taps.iter_mut().for_each(|(_, w)| *w /= total);
                taps
            })
            .collect();
        MelFilterbank { filters, bins }
    }

    pub fn bands(&self) -> usize {
        self.filters.len()
    }

    pub fn apply(&self, spectrum: &[f64]) -> Vec<f64> {
        debug_assert_eq!(spectrum.len(), self.bins);
        self.filters
            .iter()
            .map(|taps| taps.iter().map(|(k, w)| spectrum[*k] * w).sum())
            .collect()
    }
}

/// Orthonormal DCT-II, first `keep` coefficients.
pub fn dct2(x: &[f64], keep: usize) -> Vec<f64> {
    let n = x.len() as f64;
    (0..keep)
        .map(|k| {
            let s: f64 = x
                .iter()
                .enumerate()
                .map(|(i, v)| v * (PI * k as f64 * (i as f64 + 0.5) / n).cos())
                .sum();
            let norm = if k == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() };
            s * norm
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MfccConfig {
    pub bands: usize,
    pub coefficients: usize,
    /// Spacing of the linear input bins in Hz.
    pub bin_hz: f64,
}

impl Default for MfccConfig {
    fn default() -> Self {
        MfccConfig {
            bands: 26,
            coefficients: 13,
            bin_hz: 20.0,
        }
    }
}

/// `T x coefficients` cepstra from `T x F` non-negative magnitude frames.
pub fn mfcc(frames: &Mat, cfg: &MfccConfig) -> Result<Mat> {
    if frames.data.iter().any(|v| !(*v >= 0.0)) {
        return Err(Error::domain("magnitude frames must be non-negative"));
    }
    if frames.cols == 0 {
        return Err(Error::dim("frames have no frequency bins"));
    }
    let bank = MelFilterbank::new(cfg.bands, frames.cols, cfg.bin_hz);
    let mut out = Mat::zeros(frames.rows, cfg.coefficients);
    for t in 0..frames.rows {
        let logs: Vec<f64> = bank
            .apply(frames.row(t))
            .into_iter()
            .map(|e| e.max(LOG_FLOOR).ln())
            .collect();
        out.row_mut(t).copy_from_slice(&dct2(&logs, cfg.coefficients));
    }
    Ok(out)
}

/// Frame-averaged `(10 / ln 10) * sqrt(2 * sum_d (c_d - c'_d)^2)` over
/// coefficients `1..`, or `0..` when `include_c0` is set.
pub fn mcd(reference: &Mat, estimate: &Mat, include_c0: bool) -> Result<f64> {
    if reference.shape() != estimate.shape() {
        return Err(Error::dim(format!(
            "cepstra shapes {:?} and {:?} differ",
            reference.shape(),
            estimate.shape()
        )));
    }
    if reference.rows == 0 {
        return Ok(0.0);
    }
    let first = if include_c0 { 0 } else { 1 };
    let k = 10.0 / LN_10;
    let total: f64 = (0..reference.rows)
        .map(|t| {
            let ss: f64 = reference.row(t)[first..]
                .iter()
                .zip(&estimate.row(t)[first..])
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            k * (2.0 * ss).sqrt()
        })
        .sum();
    Ok(total / reference.rows as f64)
}
