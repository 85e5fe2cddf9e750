//! The whole file-based pipeline at toy scale: corpus, training, prior,
//! sampling, copy synthesis, evaluation and the report, all under one
//! output directory (the first argument, or a temporary directory).

use std::path::PathBuf;

use qfvae::config::ExperimentConfig;
use qfvae::harness;

const CONFIG: &str = r#"
seed = 3
corpus.train_count = 16
corpus.test_count = 4
model.codebook_size = 16
train.steps = 300
train.vq_warmup_steps = 100
prior.steps = 200
sampling.prior = "ar-discrete"
sampling.samples = 10
sampling.utterances = 2
"#;

fn main() -> qfvae::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("qfvae-end-to-end"));
    let cfg = ExperimentConfig::from_toml(CONFIG)?;
    cfg.validate()?;
    println!("{}", harness::cmd_gen_corpus(&cfg, &out)?);
    println!("{}", harness::cmd_train(&cfg, &out, false)?);
    println!("{}", harness::cmd_fit_prior(&cfg, &out)?);
    println!("{}", harness::cmd_sample(&cfg, &out)?);
    println!("{}", harness::cmd_copy_synth(&cfg, &out)?);
    println!("{}", harness::cmd_evaluate(&cfg, &out, &[], false)?);
    println!("{}", harness::cmd_report(&cfg, &out, &[])?);
    println!("artifacts in {}", out.display());
    Ok(())
}
