//! Per-token prosody measurements and cross-sample diversity statistics.

use crate::error::{Error, Result};
use crate::metrics::pitch::PitchTrack;
use crate::tape::Mat;

/// Energy, pitch and duration attributed to one token.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TokenProsody {
    /// Mean frame magnitude over the token divided by the utterance mean.
    pub energy: f64,
    /// Mean F0 of the token's voiced frames, 0 when none is voiced.
    pub f0: f64,
    pub duration_ms: f64,
    pub frames: usize,
    pub voiced_frames: usize,
}

impl TokenProsody {
    /// No frame was assigned to this token.
    pub fn is_empty(&self) -> bool {
        self.frames == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProsodyMeasurements {
    pub tokens: Vec<TokenProsody>,
}

/// Mean per-token population standard deviation of each attribute.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct DiversityStats {
    pub energy: f64,
    pub f0: f64,
    pub duration_ms: f64,
}

/// Index of the largest entry, ties to the smallest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Attributes each frame to the token with the largest attention weight and
/// measures energy, voiced-only mean F0 and duration per token.
pub fn phoneme_prosody(frames: &Mat, attention: &Mat, pitch: &PitchTrack, hop_ms: f64) -> Result<ProsodyMeasurements> {
    if attention.rows != frames.rows || pitch.len() != frames.rows {
        return Err(Error::dim(format!(
            "frames {}, attention {} and pitch {} lengths differ",
            frames.rows,
            attention.rows,
            pitch.len()
        )));
    }
    let n = attention.cols;
    let frame_mag: Vec<f64> = (0..frames.rows)
        .map(|t| frames.row(t).iter().sum::<f64>() / frames.cols.max(1) as f64)
        .collect();
    let overall = frame_mag.iter().sum::<f64>() / frame_mag.len().max(1) as f64;

    let mut mag_sum = vec![0.0; n];
    let mut count = vec![0usize; n];
    let mut f0_sum = vec![0.0; n];
    let mut voiced = vec![0usize; n];
    for t in 0..frames.rows {
        let k = argmax(attention.row(t));
        mag_sum[k] += frame_mag[t];
        count[k] += 1;
        let p = pitch.frames[t];
        if p.voiced {
            f0_sum[k] += p.f0;
            voiced[k] += 1;
        }
    }
    let tokens = (0..n)
        .map(|k| TokenProsody {
            energy: if count[k] > 0 && overall > 0.0 {
                mag_sum[k] / count[k] as f64 / overall
            } else {
                0.0
            },
            f0: if voiced[k] > 0 {
                f0_sum[k] / voiced[k] as f64
            } else {
                0.0
            },
            duration_ms: count[k] as f64 * hop_ms,
            frames: count[k],
            voiced_frames: voiced[k],
        })
        .collect();
    Ok(ProsodyMeasurements { tokens })
}

fn population_std(values: &[f64]) -> Option<f64> {
    if values.len() < 2 {
        return None;
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / values.len() as f64;
    Some(var.sqrt())
}

fn mean_defined(values: impl Iterator<Item = Option<f64>>) -> f64 {
    let defined: Vec<f64> = values.flatten().collect();
    if defined.is_empty() {
        0.0
    } else {
        defined.iter().sum::<f64>() / defined.len() as f64
    }
}

/// Diversity across samples of the same token sequence.
///
/// Duration uses every sample. Energy skips samples where the token received
/// no frames, and F0 skips samples where it had no voiced frame; a token with
/// fewer than two usable samples does not contribute to that attribute.
pub fn diversity_stats(samples: &[ProsodyMeasurements]) -> Result<DiversityStats> {
    if samples.len() < 2 {
        return Err(Error::domain(format!(
            "diversity needs at least two samples, got {}",
            samples.len()
        )));
    }
    let n = samples[0].tokens.len();
    if let Some(bad) = samples.iter().find(|s| s.tokens.len() != n) {
        return Err(Error::dim(format!(
            "samples have {} and {} tokens",
            n,
            bad.tokens.len()
        )));
    }
    let column = |k: usize, pick: &dyn Fn(&TokenProsody) -> Option<f64>| -> Vec<f64> {
        samples.iter().filter_map(|s| pick(&s.tokens[k])).collect()
    };
    Ok(DiversityStats {
        energy: mean_defined((0..n).map(|k| population_std(&column(k, &|t| (!t.is_empty()).then_some(t.energy))))),
        f0: mean_defined((0..n).map(|k| population_std(&column(k, &|t| (t.voiced_frames > 0).then_some(t.f0))))),
        duration_ms: mean_defined((0..n).map(|k| population_std(&column(k, &|t| Some(t.duration_ms))))),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::pitch::PitchFrame;

    fn flat_pitch(t: usize, f0: f64) -> PitchTrack {
        PitchTrack {
            frames: vec![PitchFrame { f0, voiced: true }; t],
        }
    }

    fn step_attention(boundaries: &[usize], t: usize) -> Mat {
        let n = boundaries.len() + 1;
        let mut a = Mat::zeros(t, n);
        for row in 0..t {
            let k = boundaries.iter().filter(|b| row >= **b).count();
            a.set(row, k, 1.0);
        }
        a
    }

    #[test]
    fn durations_from_attention() {
        let frames = Mat::filled(10, 8, 1.0);
        let p = phoneme_prosody(&frames, &step_attention(&[5], 10), &flat_pitch(10, 180.0), 12.5).unwrap();
        let d: Vec<f64> = p.tokens.iter().map(|t| t.duration_ms).collect();
        assert_eq!(d, vec![62.5, 62.5]);
        assert_eq!(d.iter().sum::<f64>(), 10.0 * 12.5);
        assert!(p.tokens.iter().all(|t| t.energy == 1.0 && t.f0 == 180.0));
    }

    #[test]
    fn empty_token_is_flagged() {
        let frames = Mat::filled(4, 2, 1.0);
        let mut att = Mat::zeros(4, 3);
        for t in 0..4 {
            att.set(t, if t < 2 { 0 } else { 2 }, 1.0);
        }
        let p = phoneme_prosody(&frames, &att, &flat_pitch(4, 100.0), 12.5).unwrap();
        assert!(p.tokens[1].is_empty());
        assert_eq!(
            (p.tokens[1].energy, p.tokens[1].f0, p.tokens[1].duration_ms),
            (0.0, 0.0, 0.0)
        );
    }

    #[test]
    fn ties_go_to_first_token() {
        assert_eq!(argmax(&[0.5, 0.5]), 0);
        assert_eq!(argmax(&[0.2, 0.4, 0.4]), 1);
    }

    fn meas(durations: &[f64]) -> ProsodyMeasurements {
        ProsodyMeasurements {
            tokens: durations
                .iter()
                .map(|d| TokenProsody {
                    energy: 1.0,
                    f0: 150.0,
                    duration_ms: *d,
                    frames: 1,
                    voiced_frames: 1,
                })
                .collect(),
        }
    }

    #[test]
    fn diversity_examples() {
        let same = vec![meas(&[50.0, 60.0]); 3];
        assert_eq!(diversity_stats(&same).unwrap(), DiversityStats::default());
        let two = [meas(&[50.0]), meas(&[70.0])];
        assert_eq!(diversity_stats(&two).unwrap().duration_ms, 10.0);
        let rev = [meas(&[70.0]), meas(&[50.0])];
        assert_eq!(diversity_stats(&two).unwrap(), diversity_stats(&rev).unwrap());
        assert!(matches!(
            diversity_stats(&[meas(&[1.0]), meas(&[1.0, 2.0])]),
            Err(Error::Dimension(_))
        ));
        assert!(matches!(diversity_stats(&[meas(&[1.0])]), Err(Error::Domain(_))));
    }
}
