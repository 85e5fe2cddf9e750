//! Nearest-codeword quantization, the two VQ losses and codebook perplexity.

use qfvae::numerics::RngStream;
use qfvae::tape::Mat;
use qfvae::vq::{codebook_perplexity, init_codebook, vq_loss, Codebook};

fn main() -> qfvae::Result<()> {
    let book = Codebook::new(Mat::from_rows(&[
        vec![0.0, 0.0],
        vec![1.0, 1.0],
        vec![1.0, 1.0],
        vec![-2.0, 0.5],
    ]))?;
    for z in [[0.2, 0.1], [0.9, 1.2], [0.5, 0.5], [-3.0, 0.0]] {
        let a = book.quantize(&z)?;
        println!("z = {z:?} -> code {} {:?}", a.index, a.vector);
    }

    // Gradient descent on the quantization loss alone pulls codewords onto
    // the latents assigned to them.
    let mut rng = RngStream::new(3);
    let latents = Mat::from_vec(64, 2, (0..128).map(|_| rng.standard_normal()).collect());
    let mut book = init_codebook(8, 2, &mut rng, None)?;
    for step in 0..=200 {
        let assign = book.assign(&latents)?;
        let loss = vq_loss(&book, &latents, &assign, 0.25)?;
        if step % 50 == 0 {
            println!(
                "step {step:>3}: quantization {:.3}  commitment {:.3}  perplexity {:.2}",
                loss.quantization,
                loss.commitment,
                codebook_perplexity(&assign, book.size())?
            );
        }
        let mut e = book.embeddings.clone();
        for (v, g) in e.data.iter_mut().zip(&loss.codebook_grad.data) {
            *v -= 0.01 * g;
        }
        book = Codebook::new(e)?;
    }
    Ok(())
}
