//! Generates a few synthetic utterances and prints their ground-truth
//! prosody next to what YIN measures from the waveform.

use qfvae::corpus::{generate_corpus, CorpusSpec};
use qfvae::metrics::AudioConfig;

fn main() -> qfvae::Result<()> {
    let spec = CorpusSpec {
        count: 3,
        seed: 7,
        ..CorpusSpec::default()
    };
    let audio = AudioConfig::default();
    for utt in generate_corpus(&spec, "demo")? {
        println!(
            "{}: {} tokens, {} frames, {:.2} s of audio",
            utt.id,
            utt.tokens.len(),
            utt.num_frames(),
            utt.waveform.len() as f64 / audio.sample_rate as f64
        );
        let pitch = audio.pitch_of_wave(&utt.waveform)?;
        for ((tok, truth), (start, end)) in utt.tokens.iter().zip(&utt.truth).zip(utt.token_spans()) {
            let voiced: Vec<f64> = pitch.frames[start..end]
                .iter()
                .filter(|f| f.voiced)
                .map(|f| f.f0)
                .collect();
            let measured = voiced.iter().sum::<f64>() / voiced.len().max(1) as f64;
            println!(
                "  token {tok:>2}  frames {start:>3}..{end:<3}  energy {:.2}  f0 {:6.1} Hz  yin {:6.1} Hz",
                truth.energy, truth.f0, measured
            );
        }
    }
    Ok(())
}
