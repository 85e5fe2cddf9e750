//! Synthetic controllable-prosody corpus and its binary file format.
//!
//! Each token id owns a fixed harmonic timbre. Duration, F0 and energy are
//! drawn per token from the configured ranges through a correlated Gaussian
//! walk, so neighbouring tokens have related prosody as in natural speech.
//!
//! File layout (little-endian):
//!
//! ```text
//! "QFVC" | version u32 | sample_rate u32 | window u32 | hop u32 | count u64
//! count x ( record_len u64 | record )
//! record = id (u32 len + utf8) | n u32 | tokens u32 x n
//!        | T u32 | F u32 | frames f64 x T*F
//!        | samples u64 | waveform f64 x samples
//!        | n x ( duration u32 | f0 f64 | energy f64 )
//! ```

use std::f64::consts::{PI, SQRT_2};
use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::io::{Reader, Writer};
use crate::metrics::AudioConfig;
use crate::numerics::RngStream;
use crate::tape::Mat;

pub const CORPUS_MAGIC: &[u8; 4] = b"QFVC";
pub const CORPUS_VERSION: u32 = 1;

/// Number of sinusoidal partials per token (fundamental plus four harmonics).
pub const PARTIALS: usize = 5;
const TIMBRE_SEED: u64 = 0x7153_1BE0;
/// Overall waveform gain.
const GAIN: f64 = 0.5;

/// Ground-truth prosody of one token.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TokenTruth {
    /// Frames.
    pub duration: usize,
    /// Hz.
    pub f0: f64,
    pub energy: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub tokens: Vec<usize>,
    /// `T x F` non-negative magnitude frames.
    pub frames: Mat,
    pub waveform: Vec<f64>,
    pub truth: Vec<TokenTruth>,
}

impl Utterance {
    pub fn num_frames(&self) -> usize {
        self.frames.rows
    }

    /// Frame range `[start, end)` of every token.
    pub fn token_spans(&self) -> Vec<(usize, usize)> {
        let mut start = 0;
        self.truth
            .iter()
            .map(|t| {
                let span = (start, start + t.duration);
                start += t.duration;
                span
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusSpec {
    pub count: usize,
    pub vocab_size: usize,
    pub min_tokens: usize,
    pub max_tokens: usize,
    pub f0_min: f64,
    pub f0_max: f64,
    pub min_duration: usize,
    pub max_duration: usize,
    pub energy_min: f64,
    pub energy_max: f64,
    /// Lag-one correlation of the per-token prosody walk, in `[0, 1)`.
    pub prosody_correlation: f64,
    pub seed: u64,
    pub audio: AudioConfig,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            count: 64,
            vocab_size: 24,
            min_tokens: 8,
            max_tokens: 20,
            f0_min: 120.0,
            f0_max: 300.0,
            min_duration: 4,
            max_duration: 14,
            energy_min: 0.4,
            energy_max: 1.6,
            prosody_correlation: 0.8,
            seed: 0,
            audio: AudioConfig::default(),
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        let nyquist = self.audio.sample_rate as f64 / 2.0;
        let fail = |m: String| Err(Error::Domain(m));
        if self.vocab_size == 0 {
            return fail("vocabulary must be non-empty".into());
        }
        if self.min_tokens == 0 || self.min_tokens > self.max_tokens {
            return fail(format!(
                "token range {}..={} is empty",
                self.min_tokens, self.max_tokens
            ));
        }
        if !(self.f0_min > 0.0) || !(self.f0_min <= self.f0_max) {
            return fail(format!("F0 range {}..{} Hz is empty", self.f0_min, self.f0_max));
        }
        if !(self.f0_max < nyquist / 4.0) {
            return fail(format!("F0 max {} Hz must be below {} Hz", self.f0_max, nyquist / 4.0));
        }
        if self.min_duration == 0 || self.min_duration > self.max_duration {
            return fail(format!(
                "duration range {}..={} frames is empty",
                self.min_duration, self.max_duration
            ));
        }
        if !(self.energy_min > 0.0) || !(self.energy_min <= self.energy_max) {
            return fail(format!(
                "energy range {}..{} is empty",
                self.energy_min, self.energy_max
            ));
        }
        if !(0.0..1.0).contains(&self.prosody_correlation) {
            return fail(format!(
                "prosody correlation {} not in [0, 1)",
                self.prosody_correlation
            ));
        }
        if self.min_tokens * self.min_duration * self.audio.hop < self.audio.window {
            return fail("shortest utterance is shorter than one STFT window".into());
        }
        Ok(())
    }
}

/// Partial amplitudes of a token: the fundamental is always the strongest.
pub fn timbre(token: usize) -> [f64; PARTIALS] {
    let mut rng = RngStream::new(TIMBRE_SEED ^ (token as u64).wrapping_mul(0x9E37_79B9));
    let mut amps = [1.0; PARTIALS];
    for a in amps.iter_mut().skip(1) {
        *a = rng.uniform_range(0.1, 0.8);
    }
    amps
}

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / SQRT_2))
}

/// AR(1) Gaussian walk mapped through the normal CDF to `[0, 1)`.
fn correlated_uniforms(rng: &mut RngStream, n: usize, rho: f64) -> Vec<f64> {
    let innovation = (1.0 - rho * rho).sqrt();
    let mut u = rng.standard_normal();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        if i > 0 {
            u = rho * u + innovation * rng.standard_normal();
        }
        out.push(std_normal_cdf(u).min(1.0 - 1e-12));
    }
    out
}

/// Draws a token sequence and its prosody, then synthesizes it.
pub fn gen_utterance(rng: &mut RngStream, spec: &CorpusSpec, id: &str) -> Result<Utterance> {
    spec.validate()?;
    let n = rng.int_range(spec.min_tokens, spec.max_tokens);
    let tokens: Vec<usize> = (0..n).map(|_| rng.int_range(0, spec.vocab_size - 1)).collect();
    let rho = spec.prosody_correlation;
    let (ud, uf, ue) = (
        correlated_uniforms(rng, n, rho),
        correlated_uniforms(rng, n, rho),
        correlated_uniforms(rng, n, rho),
    );
    let dur_span = (spec.max_duration - spec.min_duration + 1) as f64;
    let truth: Vec<TokenTruth> = (0..n)
        .map(|i| TokenTruth {
            duration: (spec.min_duration + (ud[i] * dur_span) as usize).min(spec.max_duration),
            f0: spec.f0_min + (spec.f0_max - spec.f0_min) * uf[i],
            energy: spec.energy_min + (spec.energy_max - spec.energy_min) * ue[i],
        })
        .collect();
    synthesize(id, &tokens, &truth, &spec.audio)
}

/// Harmonic-stack synthesis of a token sequence with given prosody.
///
/// F0 and partial amplitudes are linearly interpolated over `hop / 2` samples
/// centred on every token boundary; phase is continuous throughout.
pub fn synthesize(id: &str, tokens: &[usize], truth: &[TokenTruth], audio: &AudioConfig) -> Result<Utterance> {
    if tokens.len() != truth.len() {
        return Err(Error::dim(format!(
            "{} tokens but {} prosody entries",
            tokens.len(),
            truth.len()
        )));
    }
    if tokens.is_empty() {
        return Err(Error::domain("utterance needs at least one token"));
    }
    let hop = audio.hop;
    let total_frames: usize = truth.iter().map(|t| t.duration).sum();
    let len = total_frames * hop;
    let fs = audio.sample_rate as f64;

    let amps: Vec<[f64; PARTIALS]> = tokens
        .iter()
        .zip(truth)
        .map(|(tok, tr)| timbre(*tok).map(|a| a * tr.energy * GAIN))
        .collect();
    let mut bounds = Vec::with_capacity(tokens.len());
    let mut acc = 0;
    for t in truth {
        acc += t.duration * hop;
        bounds.push(acc);
    }
    let ramp = (hop / 4).max(1);

    let mut wave = vec![0.0; len];
    let mut phase = 0.0;
    let mut tok = 0;
    for (i, sample) in wave.iter_mut().enumerate() {
        while tok + 1 < bounds.len() && i >= bounds[tok] {
            tok += 1;
        }
        let (mut f0, mut a) = (truth[tok].f0, amps[tok]);
        // blend with the neighbour inside the transition zone
        if tok + 1 < bounds.len() && i + ramp >= bounds[tok] {
            let lam = (i + ramp - bounds[tok]) as f64 / (2 * ramp) as f64;
            f0 = (1.0 - lam) * f0 + lam * truth[tok + 1].f0;
            for (x, y) in a.iter_mut().zip(&amps[tok + 1]) {
                *x = (1.0 - lam) * *x + lam * y;
            }
        } else if tok > 0 && i < bounds[tok - 1] + ramp {
            let lam = 0.5 + (i - bounds[tok - 1]) as f64 / (2 * ramp) as f64;
            f0 = (1.0 - lam) * truth[tok - 1].f0 + lam * f0;
            for (x, y) in a.iter_mut().zip(&amps[tok - 1]) {
                *x = (1.0 - lam) * y + lam * *x;
            }
        }
        *sample = a
            .iter()
            .enumerate()
            .map(|(h, amp)| amp * ((h + 1) as f64 * phase).sin())
            .sum();
        phase += 2.0 * PI * f0 / fs;
        if phase > 2.0 * PI {
            phase -= 2.0 * PI;
        }
    }
    let frames = audio.frames(&wave)?;
    debug_assert_eq!(frames.rows, total_frames);
    Ok(Utterance {
        id: id.to_string(),
        tokens: tokens.to_vec(),
        frames,
        waveform: wave,
        truth: truth.to_vec(),
    })
}

/// `spec.count` utterances; utterance `i` uses the child stream `i` of `spec.seed`.
pub fn generate_corpus(spec: &CorpusSpec, id_prefix: &str) -> Result<Vec<Utterance>> {
    spec.validate()?;
    let root = RngStream::new(spec.seed);
    (0..spec.count)
        .into_par_iter()
        .map(|i| {
            let mut rng = root.child(i as u64);
            gen_utterance(&mut rng, spec, &format!("{id_prefix}{i:05}"))
        })
        .collect()
}

/// Disjoint, exhaustive, seed-deterministic split. Each part keeps input order.
pub fn split_corpus(
    utterances: &[Utterance],
    train_fraction: f64,
    seed: u64,
) -> Result<(Vec<Utterance>, Vec<Utterance>)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::domain(format!("train fraction {train_fraction} not in (0, 1)")));
    }
    let mut order: Vec<usize> = (0..utterances.len()).collect();
    RngStream::new(seed).shuffle(&mut order);
    let n_train = (train_fraction * utterances.len() as f64).round() as usize;
    let mut train_idx = order[..n_train].to_vec();
    let mut test_idx = order[n_train..].to_vec();
    train_idx.sort_unstable();
    test_idx.sort_unstable();
    Ok((
        train_idx.into_iter().map(|i| utterances[i].clone()).collect(),
        test_idx.into_iter().map(|i| utterances[i].clone()).collect(),
    ))
}

pub fn encode_corpus(utterances: &[Utterance], audio: &AudioConfig) -> Vec<u8> {
    let mut w = Writer::new();
    w.bytes(CORPUS_MAGIC);
    w.u32(CORPUS_VERSION);
    w.u32(audio.sample_rate);
    w.u32(audio.window as u32);
    w.u32(audio.hop as u32);
    w.u64(utterances.len() as u64);
    for u in utterances {
        let mut r = Writer::new();
        r.string(&u.id);
        r.u32(u.tokens.len() as u32);
        for t in &u.tokens {
            r.u32(*t as u32);
        }
        r.mat(&u.frames);
        r.u64(u.waveform.len() as u64);
        r.f64s(&u.waveform);
        for t in &u.truth {
            r.u32(t.duration as u32);
            r.f64(t.f0);
            r.f64(t.energy);
        }
        w.record(r);
    }
    w.finish()
}

pub fn decode_corpus(bytes: &[u8]) -> Result<(AudioConfig, Vec<Utterance>)> {
    let mut r = Reader::new(bytes, "corpus header");
    r.magic(CORPUS_MAGIC)?;
    let version = r.u32()?;
    if version != CORPUS_VERSION {
        return Err(Error::Format(format!(
            "corpus version {version} is not supported (expected {CORPUS_VERSION})"
        )));
    }
    let audio = AudioConfig {
        sample_rate: r.u32()?,
        window: r.u32()? as usize,
        hop: r.u32()? as usize,
        ..AudioConfig::default()
    };
    let count = r.u64()? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for i in 0..count {
        let mut rec = r.record(&format!("corpus record {i}"))?;
        let id = rec.string()?;
        rec.rename(format!("corpus record {i} ({id})"));
        let n = rec.u32()? as usize;
        let tokens = (0..n)
            .map(|_| rec.u32().map(|t| t as usize))
            .collect::<Result<Vec<_>>>()?;
        let frames = rec.mat()?;
        let samples = rec.u64()? as usize;
        let waveform = rec.f64s(samples)?;
        let truth = (0..n)
            .map(|_| {
                Ok(TokenTruth {
                    duration: rec.u32()? as usize,
                    f0: rec.f64()?,
                    energy: rec.f64()?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        rec.expect_end()?;
        out.push(Utterance {
            id,
            tokens,
            frames,
            waveform,
            truth,
        });
    }
    r.expect_end()?;
    Ok((audio, out))
}

pub fn write_corpus(path: &Path, utterances: &[Utterance], audio: &AudioConfig) -> Result<()> {
    fs::write(path, encode_corpus(utterances, audio))?;
    Ok(())
}

pub fn read_corpus(path: &Path) -> Result<Vec<Utterance>> {
    Ok(decode_corpus(&fs::read(path)?)?.1)
}
