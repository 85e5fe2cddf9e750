//! Fits both autoregressive priors on a quantized model and compares their
//! samples with independent draws.

use qfvae::corpus::{generate_corpus, CorpusSpec};
use qfvae::model::{train_stage1, ModelConfig, TrainConfig};
use qfvae::numerics::RngStream;
use qfvae::priors::{
    adjacent_discontinuity, fit_prior_continuous, fit_prior_discrete, sample_independent, ClassSource, PriorConfig,
};

fn main() -> qfvae::Result<()> {
    let spec = CorpusSpec {
        count: 28,
        seed: 4,
        ..CorpusSpec::default()
    };
    let corpus = generate_corpus(&spec, "utt")?;
    let (train, test) = corpus.split_at(24);
    let model_config = ModelConfig {
        codebook_size: 8,
        ..ModelConfig::default()
    };
    let train_config = TrainConfig {
        steps: 400,
        vq_warmup_steps: 150,
        ..TrainConfig::default()
    };
    let (model, _) = train_stage1(train, &model_config, &train_config, 1)?;
    let codebook = model.codebook().expect("quantized model");

    let (encodings, posteriors): (Vec<_>, Vec<_>) = train
        .iter()
        .map(|u| model.infer(&u.tokens, &u.frames))
        .collect::<qfvae::Result<Vec<_>>>()?
        .into_iter()
        .unzip();
    let prior_config = PriorConfig {
        steps: 400,
        ..PriorConfig::default()
    };
    let (continuous, log) = fit_prior_continuous(&posteriors, &encodings, &prior_config, 2)?;
    println!(
        "continuous prior: final KL per token {:.4}",
        log.last().map_or(0.0, |e| e.loss)
    );
    let source = ClassSource::Posterior {
        posteriors: &posteriors,
        codebook: &codebook,
    };
    let (discrete, log) = fit_prior_discrete(source, 8, prior_config.embed_dim, &encodings, &prior_config, 3)?;
    println!(
        "discrete prior: final cross-entropy per token {:.4}",
        log.last().map_or(0.0, |e| e.loss)
    );

    let rng = RngStream::new(9);
    for (i, utt) in test.iter().enumerate() {
        let enc = model.encode_tokens(&utt.tokens)?;
        let mut r = rng.child(i as u64);
        let ar = continuous.sample(&enc, &mut r, None, 1.0)?;
        let ind = sample_independent(utt.tokens.len(), 3, 1.0, &mut r, None)?;
        let greedy = discrete.sample(&enc, &mut r, &codebook, 0.0)?;
        let drawn = discrete.sample(&enc, &mut r, &codebook, 1.0)?;
        println!(
            "{}: discontinuity AR {:.3} vs independent {:.3}; greedy classes {:?}; sampled {:?}",
            utt.id,
            adjacent_discontinuity(&ar.z),
            adjacent_discontinuity(&ind.z),
            greedy.indices.as_deref().unwrap_or_default(),
            drawn.indices.as_deref().unwrap_or_default()
        );
        let frames = model.decode(&enc, &drawn, None, None)?.frames;
        println!("  decoded {} frames from the sampled classes", frames.rows);
    }
    Ok(())
}
