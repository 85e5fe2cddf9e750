//! Trains a quantized model on a small synthetic corpus and reports
//! copy-synthesis quality on held-out utterances.
//!
//! `cargo run --release --example train_qfvae -- 32` sets the codebook size
//! (0 trains the unquantized baseline).

use qfvae::corpus::{generate_corpus, CorpusSpec};
use qfvae::harness::reconstruction_metrics;
use qfvae::metrics::AudioConfig;
use qfvae::model::{mean_recon_error, train_stage1, ModelConfig, TrainConfig};
use qfvae::numerics::RngStream;

fn main() -> qfvae::Result<()> {
    let k: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(16);
    let spec = CorpusSpec {
        count: 40,
        seed: 11,
        ..CorpusSpec::default()
    };
    let corpus = generate_corpus(&spec, "utt")?;
    let (train, test) = corpus.split_at(32);

    let model_config = ModelConfig {
        codebook_size: k,
        ..ModelConfig::default()
    };
    let train_config = TrainConfig {
        steps: 600,
        vq_warmup_steps: 200,
        log_every: 100,
        ..TrainConfig::default()
    };
    let (model, log) = train_stage1(train, &model_config, &train_config, 5)?;
    for e in &log {
        let perplexity = e.perplexity.map(|p| format!("  perplexity {p:.2}")).unwrap_or_default();
        println!(
            "step {:>4}  recon {:.4}  kl {:7.3}  vq {:.4}{perplexity}",
            e.step, e.loss.recon, e.loss.kl, e.loss.vq
        );
    }

    let audio = AudioConfig::default();
    let (mut ffe, mut mcd) = (0.0, 0.0);
    for (i, u) in test.iter().enumerate() {
        let out = model.copy_synthesis(u)?;
        let (f, m) = reconstruction_metrics(&audio, u, &out.frames, false, &mut RngStream::new(i as u64))?;
        ffe += f;
        mcd += m;
    }
    let n = test.len() as f64;
    println!(
        "K = {k}: held-out recon {:.4}, copy-synthesis FFE {:.3}, MCD {:.2} dB",
        mean_recon_error(&model, test)?,
        ffe / n,
        mcd / n
    );
    Ok(())
}
