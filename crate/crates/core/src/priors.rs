//! Latent priors for sampling: the independent scaled Gaussian and two
//! autoregressive priors fitted to frozen stage-1 posteriors, one in the
//! continuous latent space and one over codebook classes.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LatentSequence, PosteriorSequence, LOG_SIGMA_LIMIT};
use crate::nn::{add_grads, clip_grad_norm, decayed_lr, scale_grads, Adam, Bound, Linear, LstmCell, ParamId, ParamSet};
use crate::numerics::{derive_seed, sample_categorical, softmax, RngStream};
use crate::tape::{Mat, Tape, Var};
use crate::vq::Codebook;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PriorKind {
    Independent,
    ArContinuous,
    ArDiscrete,
}

impl PriorKind {
    pub fn name(&self) -> &'static str {
        match self {
            PriorKind::Independent => "independent",
            PriorKind::ArContinuous => "ar-continuous",
            PriorKind::ArDiscrete => "ar-discrete",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorConfig {
    pub hidden: usize,
    /// Class embedding width of the discrete prior.
    pub embed_dim: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lr_decay: f64,
    pub decay_every: usize,
    pub clip_norm: f64,
    pub log_every: usize,
}

impl Default for PriorConfig {
    fn default() -> Self {
        PriorConfig {
            hidden: 64,
            embed_dim: 16,
            steps: 1500,
            batch_size: 8,
            learning_rate: 1e-3,
            lr_decay: 0.5,
            decay_every: 2000,
            clip_norm: 5.0,
            log_every: 50,
        }
    }
}

impl PriorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.embed_dim == 0 || self.batch_size == 0 || self.log_every == 0 {
            return Err(Error::Config(
                "prior.hidden, prior.embed_dim, prior.batch_size and prior.log_every must be positive".into(),
            ));
        }
        if !(self.learning_rate > 0.0) || !(self.lr_decay > 0.0) || !(self.clip_norm > 0.0) {
            return Err(Error::Config(
                "prior.learning_rate, prior.lr_decay and prior.clip_norm must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Per-step record of prior fitting. `loss` is per token: KL nats for the
/// continuous prior, cross-entropy nats for the discrete one.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PriorLogEntry {
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
}

/// `n` latents drawn from `N(0, scale^2 I)`, quantized when a codebook is given.
pub fn sample_independent(
    n: usize,
    d: usize,
    scale: f64,
    rng: &mut RngStream,
    codebook: Option<&Codebook>,
) -> Result<LatentSequence> {
    if !(scale >= 0.0) || !scale.is_finite() {
        return Err(Error::domain(format!(
            "scale must be finite and non-negative, got {scale}"
        )));
    }
    let z = Mat::from_vec(n, d, (0..n * d).map(|_| scale * rng.standard_normal()).collect());
    match codebook {
        Some(cb) => LatentSequence::quantize(z, cb),
        None => Ok(LatentSequence::continuous(z)),
    }
}

/// `KL(N(mu_q, sigma_q^2) || N(mu_p, sigma_p^2))` summed over dimensions.
pub fn kl_gaussians(mu_q: &[f64], sigma_q: &[f64], mu_p: &[f64], sigma_p: &[f64]) -> Result<f64> {
    let d = mu_q.len();
    if sigma_q.len() != d || mu_p.len() != d || sigma_p.len() != d {
        return Err(Error::dim("Gaussian parameter lengths differ"));
    }
    if sigma_q.iter().chain(sigma_p).any(|s| !(*s > 0.0)) {
        return Err(Error::domain("standard deviations must be positive"));
    }
    Ok((0..d)
        .map(|i| {
            let dm = mu_q[i] - mu_p[i];
            (sigma_p[i] / sigma_q[i]).ln() + (sigma_q[i] * sigma_q[i] + dm * dm) / (2.0 * sigma_p[i] * sigma_p[i]) - 0.5
        })
        .sum())
}

fn check_encodings(enc: &Mat, dim: usize) -> Result<()> {
    if enc.rows == 0 {
        return Err(Error::domain("empty token encoding"));
    }
    if enc.cols != dim {
        return Err(Error::dim(format!(
            "encodings have {} columns, prior expects {dim}",
            enc.cols
        )));
    }
    Ok(())
}

/// Adam loop shared by both priors. `item_grads(i, rng)` returns the loss
/// summed over tokens, the token count and the gradient of the sum for
/// training item `i`.
fn fit_loop<F>(
    params: &mut ParamSet,
    items: usize,
    cfg: &PriorConfig,
    seed: u64,
    item_grads: F,
) -> Result<Vec<PriorLogEntry>>
where
    F: Fn(&ParamSet, usize, &mut RngStream) -> Result<(f64, usize, Vec<Mat>)> + Sync,
{
    cfg.validate()?;
    if items == 0 {
        return Err(Error::domain("empty prior training set"));
    }
    let mut adam = Adam::new(params);
    let mut log = Vec::new();
    let root = RngStream::new(derive_seed(seed, 3));
    for step in 0..cfg.steps {
        let s = root.child(step as u64);
        let mut order: Vec<usize> = (0..items).collect();
        s.child(0).shuffle(&mut order);
        let batch: Vec<usize> = order.iter().cycle().take(cfg.batch_size).copied().collect();
        let noise = s.child(1);
        let ps: &ParamSet = params;
        let results: Vec<Result<(f64, usize, Vec<Mat>)>> = batch
            .par_iter()
            .enumerate()
            .map(|(j, i)| item_grads(ps, *i, &mut noise.child(j as u64)))
            .collect();
        let mut grads: Vec<Mat> = params.mats().iter().map(|m| Mat::zeros(m.rows, m.cols)).collect();
        let (mut loss, mut tokens) = (0.0, 0usize);
        for r in results {
            let (l, n, g) = r?;
            loss += l;
            tokens += n;
            add_grads(&mut grads, &g);
        }
        if !loss.is_finite() {
            return Err(Error::Training {
                step,
                detail: format!("non-finite prior loss {loss}"),
            });
        }
        scale_grads(&mut grads, 1.0 / batch.len() as f64);
        let grad_norm = clip_grad_norm(&mut grads, cfg.clip_norm);
        adam.step(
            params,
            &grads,
            decayed_lr(cfg.learning_rate, cfg.lr_decay, cfg.decay_every, step),
        );
        if step % cfg.log_every == 0 || step + 1 == cfg.steps {
            log.push(PriorLogEntry {
                step,
                loss: loss / tokens.max(1) as f64,
                grad_norm,
            });
        }
    }
    Ok(log)
}

/// LSTM prior over continuous latents:
/// `p(z_n | z_<n, Y) = N(mu(h_n), sigma(h_n))` with input `[z_{n-1}; Y_n]`.
#[derive(Clone, Debug)]
pub struct ContinuousArPrior {
    pub params: ParamSet,
    pub latent_dim: usize,
    pub encoding_dim: usize,
    pub hidden: usize,
    lstm: LstmCell,
    mu: Linear,
    log_sigma: Linear,
}

impl ContinuousArPrior {
    pub fn new(latent_dim: usize, encoding_dim: usize, hidden: usize, rng: &mut RngStream) -> Self {
        let mut params = ParamSet::new();
        let lstm = LstmCell::new(&mut params, "prior.lstm", latent_dim + encoding_dim, hidden, rng);
        let mu = Linear::new(&mut params, "prior.mu", hidden, latent_dim, rng);
        let log_sigma = Linear::new(&mut params, "prior.log_sigma", hidden, latent_dim, rng);
        ContinuousArPrior {
            params,
            latent_dim,
            encoding_dim,
            hidden,
            lstm,
            mu,
            log_sigma,
        }
    }

    pub fn from_params(latent_dim: usize, encoding_dim: usize, hidden: usize, params: ParamSet) -> Result<Self> {
        let mut fresh = Self::new(latent_dim, encoding_dim, hidden, &mut RngStream::new(0));
        check_layout(&fresh.params, &params)?;
        fresh.params = params;
        Ok(fresh)
    }

    /// `(mu_p, log_sigma_p)` for every step given the teacher inputs.
    fn predict_tape(&self, tape: &Tape, p: &Bound, teacher: &Mat, enc: &Mat) -> (Var, Var) {
        let n = enc.rows;
        let mut prev = Mat::zeros(n, self.latent_dim);
        for i in 1..n {
            prev.row_mut(i).copy_from_slice(teacher.row(i - 1));
        }
        let inputs = tape.leaf(concat_cols(&prev, enc));
        let mut h = tape.leaf(Mat::zeros(1, self.hidden));
        let mut c = tape.leaf(Mat::zeros(1, self.hidden));
        let mut hs = Vec::with_capacity(n);
        for i in 0..n {
            (h, c) = self.lstm.step(tape, p, tape.rows(inputs, i, 1), h, c);
            hs.push(h);
        }
        let hs = tape.concat_rows(&hs);
        let ls = tape.clamp(self.log_sigma.forward(tape, p, hs), -LOG_SIGMA_LIMIT, LOG_SIGMA_LIMIT);
        (self.mu.forward(tape, p, hs), ls)
    }

    /// Prior means and stddevs under teacher forcing.
    pub fn predict(&self, teacher: &Mat, enc: &Mat) -> Result<PosteriorSequence> {
        self.check(teacher, enc)?;
        let tape = Tape::new();
        let p = self.params.bind(&tape);
        let (mu, ls) = self.predict_tape(&tape, &p, teacher, enc);
        Ok(PosteriorSequence {
            mu: tape.value(mu),
            sigma: tape.value(ls).map(f64::exp),
        })
    }

    fn check(&self, teacher: &Mat, enc: &Mat) -> Result<()> {
        check_encodings(enc, self.encoding_dim)?;
        if teacher.shape() != (enc.rows, self.latent_dim) {
            return Err(Error::dim(format!(
                "teacher latents {:?} for {} tokens of dimension {}",
                teacher.shape(),
                enc.rows,
                self.latent_dim
            )));
        }
        Ok(())
    }

    /// `sum_n KL(q_n || p_n)` with teacher inputs, and its parameter gradients.
    pub fn loss_and_grads(&self, post: &PosteriorSequence, teacher: &Mat, enc: &Mat) -> Result<(f64, Vec<Mat>)> {
        self.loss_with(&self.params, post, teacher, enc)
    }

    fn loss_with(
        &self,
        params: &ParamSet,
        post: &PosteriorSequence,
        teacher: &Mat,
        enc: &Mat,
    ) -> Result<(f64, Vec<Mat>)> {
        self.check(teacher, enc)?;
        if post.mu.shape() != teacher.shape() || post.sigma.shape() != teacher.shape() {
            return Err(Error::dim("posterior and teacher shapes differ"));
        }
        let tape = Tape::new();
        let p = params.bind(&tape);
        let (mu, ls) = self.predict_tape(&tape, &p, teacher, enc);
        let loss = tape.sum(tape.kl_gaussian(post.mu.clone(), post.sigma.clone(), mu, ls));
        let grads = tape.backward(loss);
        Ok((tape.scalar(loss), params.collect_grads(&grads, &p)))
    }

    /// Ancestral sampling from an all-zero state. `sigma_scale` multiplies the
    /// predicted stddev (0 gives the mean rollout). Latents are quantized
    /// after the whole sequence is drawn when a codebook is given.
    pub fn sample(
        &self,
        enc: &Mat,
        rng: &mut RngStream,
        codebook: Option<&Codebook>,
        sigma_scale: f64,
    ) -> Result<LatentSequence> {
        check_encodings(enc, self.encoding_dim)?;
        let tape = Tape::new();
        let p = self.params.bind(&tape);
        let mut h = tape.leaf(Mat::zeros(1, self.hidden));
        let mut c = tape.leaf(Mat::zeros(1, self.hidden));
        let mut prev = vec![0.0; self.latent_dim];
        let mut z = Mat::zeros(enc.rows, self.latent_dim);
        for n in 0..enc.rows {
            let mut x = prev.clone();
            x.extend_from_slice(enc.row(n));
            (h, c) = self.lstm.step(&tape, &p, tape.leaf(Mat::row_vector(x)), h, c);
            let mu = tape.value(self.mu.forward(&tape, &p, h));
            let ls = tape.value(self.log_sigma.forward(&tape, &p, h));
            for d in 0..self.latent_dim {
                let sigma = ls.data[d].clamp(-LOG_SIGMA_LIMIT, LOG_SIGMA_LIMIT).exp();
                let v = mu.data[d] + sigma_scale * sigma * rng.standard_normal();
                z.set(n, d, v);
            }
            prev = z.row(n).to_vec();
        }
        match codebook {
            Some(cb) => LatentSequence::quantize(z, cb),
            None => Ok(LatentSequence::continuous(z)),
        }
    }
}

/// Fits the continuous prior by teacher forcing on one posterior sample per
/// visit of each utterance.
pub fn fit_prior_continuous(
    posteriors: &[PosteriorSequence],
    encodings: &[Mat],
    cfg: &PriorConfig,
    seed: u64,
) -> Result<(ContinuousArPrior, Vec<PriorLogEntry>)> {
    if posteriors.is_empty() {
        return Err(Error::domain("empty prior training set"));
    }
    if posteriors.len() != encodings.len() {
        return Err(Error::dim("posterior and encoding counts differ"));
    }
    let d = posteriors[0].mu.cols;
    let e = encodings[0].cols;
    let mut prior = ContinuousArPrior::new(d, e, cfg.hidden, &mut RngStream::new(seed).child(0));
    let template = prior.clone();
    let log = fit_loop(&mut prior.params, posteriors.len(), cfg, seed, |ps, i, rng| {
        let post = &posteriors[i];
        let teacher = crate::model::reparam_sample(post, rng).z;
        let (loss, grads) = template.loss_with(ps, post, &teacher, &encodings[i])?;
        Ok((loss, post.len(), grads))
    })?;
    Ok((prior, log))
}

/// LSTM prior over codebook classes with input `[embed(k_{n-1}); Y_n]`; the
/// embedding input is zero at the first step.
#[derive(Clone, Debug)]
pub struct DiscreteArPrior {
    pub params: ParamSet,
    pub classes: usize,
    pub embed_dim: usize,
    pub encoding_dim: usize,
    pub hidden: usize,
    embed: ParamId,
    lstm: LstmCell,
    logits: Linear,
}

impl DiscreteArPrior {
    pub fn new(classes: usize, embed_dim: usize, encoding_dim: usize, hidden: usize, rng: &mut RngStream) -> Self {
        let mut params = ParamSet::new();
        let embed = params.add_weight("prior.embed", classes, embed_dim, rng);
        let lstm = LstmCell::new(&mut params, "prior.lstm", embed_dim + encoding_dim, hidden, rng);
        let logits = Linear::new(&mut params, "prior.logits", hidden, classes, rng);
        DiscreteArPrior {
            params,
            classes,
            embed_dim,
            encoding_dim,
            hidden,
            embed,
            lstm,
            logits,
        }
    }

    pub fn from_params(
        classes: usize,
        embed_dim: usize,
        encoding_dim: usize,
        hidden: usize,
        params: ParamSet,
    ) -> Result<Self> {
        let mut fresh = Self::new(classes, embed_dim, encoding_dim, hidden, &mut RngStream::new(0));
        check_layout(&fresh.params, &params)?;
        fresh.params = params;
        Ok(fresh)
    }

    fn logits_tape(&self, tape: &Tape, p: &Bound, classes: &[usize], enc: &Mat) -> Var {
        let n = enc.rows;
        let e = tape.leaf(enc.clone());
        let zero = tape.leaf(Mat::zeros(1, self.embed_dim));
        let mut h = tape.leaf(Mat::zeros(1, self.hidden));
        let mut c = tape.leaf(Mat::zeros(1, self.hidden));
        let prev = (n > 1).then(|| tape.gather_rows(p[self.embed], &classes[..n - 1]));
        let mut hs = Vec::with_capacity(n);
        for i in 0..n {
            let emb = match (i, prev) {
                (0, _) | (_, None) => zero,
                (_, Some(pe)) => tape.rows(pe, i - 1, 1),
            };
            let x = tape.concat_cols(&[emb, tape.rows(e, i, 1)]);
            (h, c) = self.lstm.step(tape, p, x, h, c);
            hs.push(h);
        }
        self.logits.forward(tape, p, tape.concat_rows(&hs))
    }

    fn check(&self, classes: &[usize], enc: &Mat) -> Result<()> {
        check_encodings(enc, self.encoding_dim)?;
        if classes.len() != enc.rows {
            return Err(Error::dim(format!("{} classes for {} tokens", classes.len(), enc.rows)));
        }
        if let Some(k) = classes.iter().find(|k| **k >= self.classes) {
            return Err(Error::domain(format!("class {k} outside {} classes", self.classes)));
        }
        Ok(())
    }

    /// Teacher-forced next-class logits, one row per token.
    pub fn logits(&self, classes: &[usize], enc: &Mat) -> Result<Mat> {
        self.check(classes, enc)?;
        let tape = Tape::new();
        let p = self.params.bind(&tape);
        Ok(tape.value(self.logits_tape(&tape, &p, classes, enc)))
    }

    /// `sum_n -ln P(k_n | k_<n, Y)` and its parameter gradients.
    pub fn loss_and_grads(&self, classes: &[usize], enc: &Mat) -> Result<(f64, Vec<Mat>)> {
        self.loss_with(&self.params, classes, enc)
    }

    fn loss_with(&self, params: &ParamSet, classes: &[usize], enc: &Mat) -> Result<(f64, Vec<Mat>)> {
        self.check(classes, enc)?;
        let tape = Tape::new();
        let p = params.bind(&tape);
        let logits = self.logits_tape(&tape, &p, classes, enc);
        let loss = tape.sum(tape.cross_entropy(logits, classes));
        let grads = tape.backward(loss);
        Ok((tape.scalar(loss), params.collect_grads(&grads, &p)))
    }

    /// Mean per-token cross-entropy on fixed sequences.
    pub fn cross_entropy(&self, sequences: &[Vec<usize>], encodings: &[Mat]) -> Result<f64> {
        let mut total = 0.0;
        let mut count = 0;
        for (k, e) in sequences.iter().zip(encodings) {
            self.check(k, e)?;
            let tape = Tape::new();
            let p = self.params.bind(&tape);
            let logits = self.logits_tape(&tape, &p, k, e);
            total += tape.scalar(tape.sum(tape.cross_entropy(logits, k)));
            count += k.len();
        }
        Ok(total / count.max(1) as f64)
    }

    /// Ancestral sampling; `temperature == 0` takes the argmax at every step.
    /// Latents are the codebook rows of the drawn classes.
    pub fn sample(
        &self,
        enc: &Mat,
        rng: &mut RngStream,
        codebook: &Codebook,
        temperature: f64,
    ) -> Result<LatentSequence> {
        check_encodings(enc, self.encoding_dim)?;
        if codebook.size() != self.classes {
            return Err(Error::Config(format!(
                "prior has {} classes, codebook {}",
                self.classes,
                codebook.size()
            )));
        }
        if !(temperature >= 0.0) || !temperature.is_finite() {
            return Err(Error::domain(format!(
                "temperature must be non-negative, got {temperature}"
            )));
        }
        let table = self.params.get(self.embed).clone();
        let tape = Tape::new();
        let p = self.params.bind(&tape);
        let mut h = tape.leaf(Mat::zeros(1, self.hidden));
        let mut c = tape.leaf(Mat::zeros(1, self.hidden));
        let mut prev = vec![0.0; self.embed_dim];
        let mut indices = Vec::with_capacity(enc.rows);
        for n in 0..enc.rows {
            let mut x = prev.clone();
            x.extend_from_slice(enc.row(n));
            (h, c) = self.lstm.step(&tape, &p, tape.leaf(Mat::row_vector(x)), h, c);
            let logits = tape.value(self.logits.forward(&tape, &p, h)).data;
            let k = if temperature == 0.0 {
                crate::metrics::prosody::argmax(&logits)
            } else {
                let scaled: Vec<f64> = logits.iter().map(|l| l / temperature).collect();
                sample_categorical(rng, &softmax(&scaled))?
            };
            indices.push(k);
            prev = table.row(k).to_vec();
        }
        Ok(LatentSequence {
            z: codebook.lookup(&indices),
            indices: Some(indices),
        })
    }
}

/// Where the discrete prior's training classes come from.
pub enum ClassSource<'a> {
    /// Fixed class sequences.
    Fixed(&'a [Vec<usize>]),
    /// One quantized posterior sample per visit.
    Posterior {
        posteriors: &'a [PosteriorSequence],
        codebook: &'a Codebook,
    },
}

impl ClassSource<'_> {
    fn len(&self) -> usize {
        match self {
            ClassSource::Fixed(s) => s.len(),
            ClassSource::Posterior { posteriors, .. } => posteriors.len(),
        }
    }

    fn draw(&self, i: usize, rng: &mut RngStream) -> Result<Vec<usize>> {
        match self {
            ClassSource::Fixed(s) => Ok(s[i].clone()),
            ClassSource::Posterior { posteriors, codebook } => {
                codebook.assign(&crate::model::reparam_sample(&posteriors[i], rng).z)
            }
        }
    }
}

/// Fits the discrete prior with next-class cross-entropy under teacher forcing.
pub fn fit_prior_discrete(
    source: ClassSource<'_>,
    classes: usize,
    embed_dim: usize,
    encodings: &[Mat],
    cfg: &PriorConfig,
    seed: u64,
) -> Result<(DiscreteArPrior, Vec<PriorLogEntry>)> {
    if source.len() == 0 {
        return Err(Error::domain("empty prior training set"));
    }
    if source.len() != encodings.len() {
        return Err(Error::dim("class sequence and encoding counts differ"));
    }
    if let ClassSource::Fixed(seqs) = &source {
        if let Some(k) = seqs.iter().flatten().find(|k| **k >= classes) {
            return Err(Error::domain(format!("class {k} outside {classes} classes")));
        }
    }
    let e = encodings[0].cols;
    let mut prior = DiscreteArPrior::new(classes, embed_dim, e, cfg.hidden, &mut RngStream::new(seed).child(0));
    let template = prior.clone();
    let log = fit_loop(&mut prior.params, source.len(), cfg, seed, |ps, i, rng| {
        let k = source.draw(i, rng)?;
        let (loss, grads) = template.loss_with(ps, &k, &encodings[i])?;
        Ok((loss, k.len(), grads))
    })?;
    Ok((prior, log))
}

/// Mean `||z_n - z_{n-1}||` over adjacent tokens.
pub fn adjacent_discontinuity(z: &Mat) -> f64 {
    if z.rows < 2 {
        return 0.0;
    }
    let total: f64 = (1..z.rows)
        .map(|n| {
            z.row(n)
                .iter()
                .zip(z.row(n - 1))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
        })
        .sum();
    total / (z.rows - 1) as f64
}

fn concat_cols(a: &Mat, b: &Mat) -> Mat {
    let mut out = Mat::zeros(a.rows, a.cols + b.cols);
    for r in 0..a.rows {
        out.row_mut(r)[..a.cols].copy_from_slice(a.row(r));
        out.row_mut(r)[a.cols..].copy_from_slice(b.row(r));
    }
    out
}

fn check_layout(expected: &ParamSet, got: &ParamSet) -> Result<()> {
    if expected.len() != got.len() {
        return Err(Error::Format(format!(
            "expected {} prior parameter blocks, found {}",
            expected.len(),
            got.len()
        )));
    }
    for ((en, em), (gn, gm)) in expected.iter().zip(got.iter()) {
        if en != gn || em.shape() != gm.shape() {
            return Err(Error::Format(format!(
                "prior block {gn} {:?} does not match expected {en} {:?}",
                gm.shape(),
                em.shape()
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn enc(n: usize, e: usize, seed: u64) -> Mat {
        let mut rng = RngStream::new(seed);
        Mat::from_vec(n, e, (0..n * e).map(|_| rng.standard_normal()).collect())
    }

    #[test]
    fn independent_examples() {
        let cb = Codebook::new(Mat::from_rows(&[vec![1.0, 1.0], vec![0.1, -0.1], vec![-2.0, 0.0]])).unwrap();
        let z = sample_independent(5, 2, 0.0, &mut RngStream::new(1), Some(&cb)).unwrap();
        assert!(z.z.data.iter().all(|v| *v == 0.0));
        assert_eq!(z.indices, Some(vec![1; 5]));
        for (scale, lo, hi) in [(1.0, 0.97, 1.03), (0.2, 0.19, 0.21)] {
            let s = sample_independent(10_000, 3, scale, &mut RngStream::new(2), None).unwrap();
            for d in 0..3 {
                let col: Vec<f64> = (0..s.z.rows).map(|n| s.z.at(n, d)).collect();
                let m = col.iter().sum::<f64>() / col.len() as f64;
                let sd = (col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / col.len() as f64).sqrt();
                assert!(sd > lo && sd < hi, "{scale}: {sd}");
            }
        }
        assert!(sample_independent(2, 2, -1.0, &mut RngStream::new(1), None).is_err());
    }

    #[test]
    fn kl_gaussian_examples() {
        assert_eq!(kl_gaussians(&[0.3], &[0.7], &[0.3], &[0.7]).unwrap(), 0.0);
        let v = kl_gaussians(&[0.0], &[1.0], &[0.0], &[2.0]).unwrap();
        assert!((v - (2f64.ln() + 0.125 - 0.5)).abs() < 1e-15);
        assert!((v - 0.3181).abs() < 1e-4);
        assert!((kl_gaussians(&[1.0], &[1.0], &[0.0], &[1.0]).unwrap() - 0.5).abs() < 1e-15);
        assert!(matches!(
            kl_gaussians(&[0.0], &[0.0], &[0.0], &[1.0]),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn tape_kl_matches_closed_form() {
        let prior = ContinuousArPrior::new(2, 3, 5, &mut RngStream::new(3));
        let y = enc(4, 3, 4);
        let teacher = enc(4, 2, 5);
        let post = PosteriorSequence {
            mu: enc(4, 2, 6),
            sigma: Mat::filled(4, 2, 0.6),
        };
        let pred = prior.predict(&teacher, &y).unwrap();
        let closed: f64 = (0..4)
            .map(|n| kl_gaussians(post.mu.row(n), post.sigma.row(n), pred.mu.row(n), pred.sigma.row(n)).unwrap())
            .sum();
        let (loss, _) = prior.loss_and_grads(&post, &teacher, &y).unwrap();
        assert!((loss - closed).abs() < 1e-12);
    }

    #[test]
    fn zero_logits_give_ln_k() {
        let mut prior = DiscreteArPrior::new(8, 3, 2, 4, &mut RngStream::new(1));
        for name in ["prior.logits.w", "prior.logits.b"] {
            let id = prior.params.id(name).unwrap();
            let (r, c) = prior.params.get(id).shape();
            *prior.params.get_mut(id) = Mat::zeros(r, c);
        }
        let (loss, _) = prior.loss_and_grads(&[1, 5, 7], &enc(3, 2, 2)).unwrap();
        assert!((loss / 3.0 - 8f64.ln()).abs() < 1e-12);
        assert!(matches!(
            prior.loss_and_grads(&[8, 0, 0], &enc(3, 2, 2)),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn sampling_contracts() {
        let y = enc(6, 3, 1);
        let cp = ContinuousArPrior::new(2, 3, 5, &mut RngStream::new(2));
        let a = cp.sample(&y, &mut RngStream::new(9), None, 1.0).unwrap();
        assert_eq!(a, cp.sample(&y, &mut RngStream::new(9), None, 1.0).unwrap());
        let m1 = cp.sample(&y, &mut RngStream::new(1), None, 0.0).unwrap();
        let m2 = cp.sample(&y, &mut RngStream::new(2), None, 0.0).unwrap();
        assert_eq!(m1, m2);

        let cb = Codebook::new(enc(4, 2, 3)).unwrap();
        let dp = DiscreteArPrior::new(4, 2, 3, 5, &mut RngStream::new(4));
        let g1 = dp.sample(&y, &mut RngStream::new(1), &cb, 0.0).unwrap();
        assert_eq!(g1, dp.sample(&y, &mut RngStream::new(2), &cb, 0.0).unwrap());
        let s = dp.sample(&y, &mut RngStream::new(3), &cb, 1.0).unwrap();
        let idx = s.indices.clone().unwrap();
        assert!(idx.iter().all(|k| *k < 4));
        assert_eq!(s.z, cb.lookup(&idx));
    }

    #[test]
    fn discontinuity() {
        assert_eq!(
            adjacent_discontinuity(&Mat::from_rows(&[vec![0.0, 0.0], vec![3.0, 4.0], vec![3.0, 4.0]])),
            2.5
        );
    }
}
