//! YIN on a clean tone, FFE between tracks and MCD between magnitude frames,
//! including a Griffin-Lim resynthesis round trip.

use std::f64::consts::PI;

use qfvae::metrics::{ffe, mcd, mfcc, AudioConfig};
use qfvae::numerics::RngStream;

fn tone(f0: f64, seconds: f64, sr: f64) -> Vec<f64> {
    (0..(seconds * sr) as usize)
        .map(|i| {
            let t = i as f64 / sr;
            (1..=3)
                .map(|h| (2.0 * PI * f0 * h as f64 * t).sin() / h as f64)
                .sum::<f64>()
                * 0.3
        })
        .collect()
}

fn main() -> qfvae::Result<()> {
    let audio = AudioConfig::default();
    let sr = audio.sample_rate as f64;
    let a = tone(220.0, 0.8, sr);
    let b = tone(300.0, 0.8, sr);

    let pa = audio.pitch_of_wave(&a)?;
    let pb = audio.pitch_of_wave(&b)?;
    let mean = |t: &qfvae::metrics::PitchTrack| t.frames.iter().map(|f| f.f0).sum::<f64>() / t.len() as f64;
    println!("yin: {:.2} Hz and {:.2} Hz", mean(&pa), mean(&pb));
    println!("ffe(a, a) = {}  ffe(a, b) = {:.3}", ffe(&pa, &pa)?, ffe(&pa, &pb)?);

    let fa = audio.frames(&a)?;
    let fb = audio.frames(&b)?;
    let cfg = audio.mfcc();
    let cb = mfcc(&fb, &cfg)?;
    let ca = mfcc(&fa, &cfg)?;
    println!(
        "mcd(a, a) = {}  mcd(a, b) = {:.3} dB",
        mcd(&ca, &ca, false)?,
        mcd(&ca, &cb, false)?
    );

    // Phase is discarded by the magnitude frames; Griffin-Lim recovers a
    // waveform whose pitch should still match.
    let resynth = audio.pitch_of_frames(&fa, &mut RngStream::new(0))?;
    println!(
        "griffin-lim resynthesis: ffe against the original = {:.3}",
        ffe(&pa, &resynth)?
    );
    Ok(())
}
