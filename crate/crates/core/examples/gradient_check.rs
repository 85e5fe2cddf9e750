//! Finite-difference check of the full training objective of a small model.

use qfvae::corpus::Utterance;
use qfvae::model::{Model, ModelConfig};
use qfvae::nn::flatten_grads;
use qfvae::numerics::{grad_check, RngStream};
use qfvae::tape::Mat;

fn main() -> qfvae::Result<()> {
    let config = ModelConfig {
        vocab_size: 5,
        embed_dim: 4,
        encoder_hidden: 3,
        latent_dim: 2,
        attention_dim: 4,
        reference_dim: 4,
        decoder_hidden: 6,
        output_hidden: 6,
        frame_bins: 8,
        ..ModelConfig::default()
    };
    let mut rng = RngStream::new(1);
    let model = Model::new(config, &mut rng.child(0))?;
    let utt = Utterance {
        id: "toy".into(),
        tokens: vec![0, 3, 1, 4],
        frames: Mat::from_vec(12, 8, (0..96).map(|_| rng.uniform_range(0.1, 1.0)).collect()),
        waveform: Vec::new(),
        truth: Vec::new(),
    };
    let mut probe = model.clone();
    let report = grad_check(
        "elbo",
        |theta| {
            probe.params.assign_flat(theta);
            let (parts, grads, _) = probe.loss_and_grads(&utt, &mut RngStream::new(2), false).expect("loss");
            (parts.total, flatten_grads(&grads))
        },
        &model.params.flatten(),
        1e-5,
    )?;
    println!(
        "{} parameters checked, max relative error {:.2e} at coordinate {} (analytic {:.6e}, numeric {:.6e})",
        report.checked, report.max_rel_error, report.worst_index, report.analytic, report.numeric
    );
    for (name, start, len) in model.params.offsets() {
        println!("  {name:<18} [{start}, {})", start + len);
    }
    Ok(())
}
