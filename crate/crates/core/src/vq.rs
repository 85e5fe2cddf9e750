//! Vector quantization: nearest-codeword assignment, the codebook and
//! commitment losses, and the straight-through gradient path.

use crate::error::{Error, Result};
use crate::numerics::RngStream;
use crate::tape::{Mat, Tape, Var};

/// `K x D` table of codewords.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    pub embeddings: Mat,
}

/// Result of quantizing one latent.
#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    pub index: usize,
    pub vector: Vec<f64>,
}

impl Codebook {
    pub fn new(embeddings: Mat) -> Result<Self> {
        if embeddings.rows == 0 || embeddings.cols == 0 {
            return Err(Error::domain(
                "codebook needs at least one codeword of positive dimension",
            ));
        }
        if !embeddings.is_finite() {
            return Err(Error::domain("codebook contains non-finite entries"));
        }
        Ok(Codebook { embeddings })
    }

    pub fn size(&self) -> usize {
        self.embeddings.rows
    }

    pub fn dim(&self) -> usize {
        self.embeddings.cols
    }

    pub fn row(&self, k: usize) -> &[f64] {
        self.embeddings.row(k)
    }

    /// Nearest codeword by squared distance; ties go to the smallest index.
    pub fn quantize(&self, z: &[f64]) -> Result<Assignment> {
        if z.len() != self.dim() {
            return Err(Error::dim(format!(
                "latent has dimension {}, codebook {}",
                z.len(),
                self.dim()
            )));
        }
        let index = nearest(&self.embeddings, z);
        Ok(Assignment {
            index,
            vector: self.row(index).to_vec(),
        })
    }

    /// Class index of every row of `latents`.
    pub fn assign(&self, latents: &Mat) -> Result<Vec<usize>> {
        if latents.cols != self.dim() {
            return Err(Error::dim(format!(
                "latents have dimension {}, codebook {}",
                latents.cols,
                self.dim()
            )));
        }
        Ok((0..latents.rows)
            .map(|n| nearest(&self.embeddings, latents.row(n)))
            .collect())
    }

    /// Rows `e_{k_n}`.
    pub fn lookup(&self, indices: &[usize]) -> Mat {
        let mut out = Mat::zeros(indices.len(), self.dim());
        for (n, k) in indices.iter().enumerate() {
            out.row_mut(n).copy_from_slice(self.row(*k));
        }
        out
    }
}

fn nearest(table: &Mat, z: &[f64]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for k in 0..table.rows {
        let d: f64 = table.row(k).iter().zip(z).map(|(e, x)| (x - e) * (x - e)).sum();
        if d < best_d {
            best_d = d;
            best = k;
        }
    }
    best
}

/// Both VQ losses with their gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct VqLoss {
    pub quantization: f64,
    pub commitment: f64,
    /// Gradient of the quantization loss with respect to the codebook.
    pub codebook_grad: Mat,
    /// Gradient of the commitment loss with respect to the latents.
    pub latent_grad: Mat,
}

/// Quantization loss `sum ||sg[z] - e||^2` (gradient to the codebook only)
/// and commitment loss `gamma sum ||z - sg[e]||^2` (gradient to `z` only).
pub fn vq_loss(codebook: &Codebook, latents: &Mat, assignments: &[usize], gamma: f64) -> Result<VqLoss> {
    if latents.rows != assignments.len() {
        return Err(Error::dim(format!(
            "{} latents but {} assignments",
            latents.rows,
            assignments.len()
        )));
    }
    if latents.cols != codebook.dim() {
        return Err(Error::dim(format!(
            "latents have dimension {}, codebook {}",
            latents.cols,
            codebook.dim()
        )));
    }
    if !(gamma >= 0.0) {
        return Err(Error::domain(format!("gamma must be non-negative, got {gamma}")));
    }
    if let Some(k) = assignments.iter().find(|k| **k >= codebook.size()) {
        return Err(Error::domain(format!(
            "class {k} outside codebook of {}",
            codebook.size()
        )));
    }
    let mut sq = 0.0;
    let mut codebook_grad = Mat::zeros(codebook.size(), codebook.dim());
    let mut latent_grad = Mat::zeros(latents.rows, latents.cols);
    for (n, &k) in assignments.iter().enumerate() {
        for d in 0..latents.cols {
            let r = latents.at(n, d) - codebook.embeddings.at(k, d);
            sq += r * r;
            codebook_grad.data[k * codebook.dim() + d] -= 2.0 * r;
            latent_grad.set(n, d, 2.0 * gamma * r);
        }
    }
    Ok(VqLoss {
        quantization: sq,
        commitment: gamma * sq,
        codebook_grad,
        latent_grad,
    })
}

/// Gradient with respect to the pre-quantization latent: an identity copy.
pub fn straight_through(upstream: &[f64]) -> Vec<f64> {
    upstream.to_vec()
}

/// `exp(entropy)` of the empirical class distribution.
pub fn codebook_perplexity(assignments: &[usize], k: usize) -> Result<f64> {
    if assignments.is_empty() {
        return Err(Error::domain("perplexity of an empty assignment set"));
    }
    let mut counts = vec![0usize; k];
    for a in assignments {
        if *a >= k {
            return Err(Error::domain(format!("class {a} outside codebook of {k}")));
        }
        counts[*a] += 1;
    }
    let total = assignments.len() as f64;
    let entropy: f64 = counts
        .iter()
        .filter(|c| **c > 0)
        .map(|c| {
            let p = *c as f64 / total;
            -p * p.ln()
        })
        .sum();
    Ok(entropy.exp())
}

/// Draws `k` distinct rows of `samples` when given, otherwise uniform
/// entries in `[-0.05, 0.05]`.
pub fn init_codebook(k: usize, d: usize, rng: &mut RngStream, samples: Option<&Mat>) -> Result<Codebook> {
    if k == 0 || d == 0 {
        return Err(Error::domain(format!("codebook size {k}x{d} must be positive")));
    }
    let embeddings = match samples {
        Some(s) => {
            if s.cols != d {
                return Err(Error::dim(format!("samples have dimension {}, expected {d}", s.cols)));
            }
            if s.rows < k {
                return Err(Error::domain(format!(
                    "{} latent samples cannot initialize {k} codewords",
                    s.rows
                )));
            }
            let mut order: Vec<usize> = (0..s.rows).collect();
            rng.shuffle(&mut order);
            let mut m = Mat::zeros(k, d);
            for (row, src) in order.iter().take(k).enumerate() {
                m.row_mut(row).copy_from_slice(s.row(*src));
            }
            m
        }
        None => Mat::from_vec(k, d, (0..k * d).map(|_| rng.uniform_range(-0.05, 0.05)).collect()),
    };
    Codebook::new(embeddings)
}

/// Quantization on a tape.
pub struct TapeQuantized {
    /// `e_{k_n}` forward, gradient copied to `z` backward.
    pub quantized: Var,
    pub indices: Vec<usize>,
    pub quantization_loss: Var,
    pub commitment_loss: Var,
}

/// Quantizes the rows of `z` against the codebook parameter `codebook` and
/// builds both losses with their stop-gradients.
pub fn quantize_on_tape(tape: &Tape, z: Var, codebook: Var, gamma: f64) -> TapeQuantized {
    let table = tape.value(codebook);
    let zv = tape.value(z);
    let indices: Vec<usize> = (0..zv.rows).map(|n| nearest(&table, zv.row(n))).collect();
    let e = tape.gather_rows(codebook, &indices);
    let quantized = tape.straight_through(z, tape.value(e));
    let quantization_loss = tape.sum_sq(tape.sub(e, tape.detach(z)));
    let commitment_loss = tape.scale(tape.sum_sq(tape.sub(z, tape.detach(e))), gamma);
    TapeQuantized {
        quantized,
        indices,
        quantization_loss,
        commitment_loss,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn book(rows: &[Vec<f64>]) -> Codebook {
        Codebook::new(Mat::from_rows(rows)).unwrap()
    }

    #[test]
    fn quantize_examples() {
        let cb = book(&[vec![0.0, 0.0], vec![1.0, 1.0]]);
        assert_eq!(cb.quantize(&[0.2, 0.1]).unwrap().index, 0);
        let cb4 = book(&[vec![0.0], vec![1.0], vec![2.0], vec![3.5]]);
        let a = cb4.quantize(&[3.5]).unwrap();
        assert_eq!((a.index, a.vector), (3, vec![3.5]));
        let one = book(&[vec![9.0, 9.0]]);
        assert_eq!(one.quantize(&[-4.0, 2.0]).unwrap().index, 0);
        assert!(matches!(cb.quantize(&[1.0]), Err(Error::Dimension(_))));
    }

    #[test]
    fn duplicate_rows_resolve_to_first() {
        let cb = book(&[vec![2.0], vec![1.0], vec![1.0]]);
        assert_eq!(cb.quantize(&[1.1]).unwrap().index, 1);
        let cb = book(&[vec![0.0], vec![2.0]]);
        assert_eq!(cb.quantize(&[1.0]).unwrap().index, 0);
    }

    #[test]
    fn vq_loss_examples() {
        let cb = book(&[vec![0.0, 0.0]]);
        let l = vq_loss(&cb, &Mat::from_rows(&[vec![1.0, 0.0]]), &[0], 0.25).unwrap();
        assert_eq!((l.quantization, l.commitment), (1.0, 0.25));
        assert_eq!(l.codebook_grad.data, vec![-2.0, 0.0]);
        assert_eq!(l.latent_grad.data, vec![0.5, 0.0]);

        let exact = vq_loss(&cb, &Mat::zeros(3, 2), &[0, 0, 0], 0.25).unwrap();
        assert_eq!((exact.quantization, exact.commitment), (0.0, 0.0));
        assert!(exact
            .codebook_grad
            .data
            .iter()
            .chain(&exact.latent_grad.data)
            .all(|g| *g == 0.0));

        let free = vq_loss(&cb, &Mat::from_rows(&[vec![3.0, 1.0]]), &[0], 0.0).unwrap();
        assert_eq!(free.commitment, 0.0);
        assert!(matches!(
            vq_loss(&cb, &Mat::zeros(2, 2), &[0], 0.25),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn tape_losses_match_closed_form() {
        let cb = book(&[vec![0.0, 0.0], vec![1.0, -1.0]]);
        let z = Mat::from_rows(&[vec![0.9, -0.7], vec![0.1, 0.3]]);
        let closed = vq_loss(&cb, &z, &cb.assign(&z).unwrap(), 0.25).unwrap();
        let tape = Tape::new();
        let zv = tape.leaf(z.clone());
        let ev = tape.leaf(cb.embeddings.clone());
        let q = quantize_on_tape(&tape, zv, ev, 0.25);
        assert_eq!(q.indices, vec![1, 0]);
        assert!((tape.scalar(q.quantization_loss) - closed.quantization).abs() < 1e-15);
        assert!((tape.scalar(q.commitment_loss) - closed.commitment).abs() < 1e-15);
        let total = tape.add(q.quantization_loss, q.commitment_loss);
        let g = tape.backward(total);
        assert_eq!(g.get(ev).unwrap(), &closed.codebook_grad);
        assert_eq!(g.get(zv).unwrap(), &closed.latent_grad);
    }

    #[test]
    fn straight_through_is_identity() {
        assert_eq!(straight_through(&[0.3, -1.2, 0.0]), vec![0.3, -1.2, 0.0]);
        assert_eq!(straight_through(&[0.0; 3]), vec![0.0; 3]);
    }

    #[test]
    fn perplexity_examples() {
        assert!((codebook_perplexity(&[0, 1, 2, 3], 4).unwrap() - 4.0).abs() < 1e-12);
        assert_eq!(codebook_perplexity(&[2, 2, 2], 4).unwrap(), 1.0);
        assert!((codebook_perplexity(&[0, 1, 0, 1], 4).unwrap() - 2.0).abs() < 1e-12);
        assert!(matches!(codebook_perplexity(&[], 4), Err(Error::Domain(_))));
    }

    #[test]
    fn init_examples() {
        let samples = Mat::from_rows(&[vec![1.0], vec![2.0], vec![3.0]]);
        let cb = init_codebook(3, 1, &mut RngStream::new(1), Some(&samples)).unwrap();
        let mut got = cb.embeddings.data.clone();
        got.sort_by(f64::total_cmp);
        assert_eq!(got, vec![1.0, 2.0, 3.0]);
        let a = init_codebook(16, 3, &mut RngStream::new(5), None).unwrap();
        let b = init_codebook(16, 3, &mut RngStream::new(5), None).unwrap();
        assert_eq!(a, b);
        assert!(a.embeddings.data.iter().all(|v| v.abs() <= 0.05));
        assert!(matches!(
            init_codebook(4, 1, &mut RngStream::new(1), Some(&samples)),
            Err(Error::Domain(_))
        ));
    }
}
