//! Stage-1 model: token encoder, reference alignment, per-token Gaussian
//! posterior, optional vector quantization and an attention decoder, trained
//! on the ELBO plus the VQ losses.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::Utterance;
use crate::error::{Error, Result};
use crate::nn::{add_grads, clip_grad_norm, decayed_lr, scale_grads, Adam, Bound, Linear, ParamId, ParamSet, RnnCell};
use crate::numerics::{derive_seed, RngStream};
use crate::tape::{Mat, Tape, Var};
use crate::vq::{codebook_perplexity, init_codebook, quantize_on_tape, Codebook};

/// Lower and upper clamp on `log sigma`.
pub const LOG_SIGMA_LIMIT: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// One latent per token.
    Fine,
    /// One latent per utterance, broadcast to every token.
    Global,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CodebookInit {
    /// Distinct posterior samples drawn from the untrained model.
    Samples,
    Uniform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    pub vocab_size: usize,
    pub embed_dim: usize,
    /// Per direction; the token encoding has twice this size.
    pub encoder_hidden: usize,
    pub latent_dim: usize,
    pub global_latent_dim: usize,
    /// 0 disables quantization.
    pub codebook_size: usize,
    pub codebook_init: CodebookInit,
    pub attention_dim: usize,
    pub reference_dim: usize,
    pub decoder_hidden: usize,
    pub output_hidden: usize,
    pub frame_bins: usize,
    pub beta: f64,
    pub gamma: f64,
    /// Weight of the position prior in reference alignment.
    pub align_position_weight: f64,
    /// Weight of the monotonic position bias in decoder attention.
    pub decoder_position_weight: f64,
    /// Free-running output length per token.
    pub frames_per_token: usize,
    /// Feed the previous frame back into the decoder.
    pub frame_feedback: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            variant: Variant::Fine,
            vocab_size: 24,
            embed_dim: 16,
            encoder_hidden: 16,
            latent_dim: 3,
            global_latent_dim: 32,
            codebook_size: 0,
            codebook_init: CodebookInit::Samples,
            attention_dim: 16,
            reference_dim: 32,
            decoder_hidden: 64,
            output_hidden: 64,
            frame_bins: 64,
            beta: 1e-3,
            gamma: 0.25,
            align_position_weight: 4.0,
            decoder_position_weight: 4.0,
            frames_per_token: 9,
            frame_feedback: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("vocab_size", self.vocab_size),
            ("embed_dim", self.embed_dim),
            ("encoder_hidden", self.encoder_hidden),
            ("latent_dim", self.latent_dim),
            ("global_latent_dim", self.global_latent_dim),
            ("attention_dim", self.attention_dim),
            ("reference_dim", self.reference_dim),
            ("decoder_hidden", self.decoder_hidden),
            ("output_hidden", self.output_hidden),
            ("frame_bins", self.frame_bins),
            ("frames_per_token", self.frames_per_token),
        ];
        for (name, v) in sizes {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be positive")));
            }
        }
        for (name, v) in [
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("align_position_weight", self.align_position_weight),
            ("decoder_position_weight", self.decoder_position_weight),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!(
                    "model.{name} must be finite and non-negative, got {v}"
                )));
            }
        }
        if self.variant == Variant::Global && self.codebook_size > 0 {
            return Err(Error::Config("the global variant does not support quantization".into()));
        }
        Ok(())
    }

    pub fn encoding_dim(&self) -> usize {
        2 * self.encoder_hidden
    }

    /// Latent size per token as seen by the decoder.
    pub fn code_dim(&self) -> usize {
        match self.variant {
            Variant::Fine => self.latent_dim,
            Variant::Global => self.global_latent_dim,
        }
    }

    pub fn quantized(&self) -> bool {
        self.codebook_size > 0
    }
}

#[derive(Clone, Copy, Debug)]
struct Layout {
    embed: ParamId,
    enc_fwd: RnnCell,
    enc_bwd: RnnCell,
    align_query: Linear,
    align_key: Linear,
    align_value: Linear,
    post_mu: Linear,
    post_log_sigma: Linear,
    codebook: Option<ParamId>,
    dec_cell: RnnCell,
    dec_query: Linear,
    mem_key: Linear,
    out_hidden: Linear,
    out_frame: Linear,
}

/// Name of the codebook parameter block.
pub const CODEBOOK_PARAM: &str = "vq.codebook";

impl Layout {
    fn build(cfg: &ModelConfig, ps: &mut ParamSet, rng: &mut RngStream) -> Layout {
        let e = cfg.encoding_dim();
        let d = cfg.code_dim();
        let mem = e + d;
        let feedback = if cfg.frame_feedback { cfg.frame_bins } else { 0 };
        Layout {
            embed: ps.add_weight("enc.embed", cfg.vocab_size, cfg.embed_dim, rng),
            enc_fwd: RnnCell::new(ps, "enc.fwd", cfg.embed_dim, cfg.encoder_hidden, rng),
            enc_bwd: RnnCell::new(ps, "enc.bwd", cfg.embed_dim, cfg.encoder_hidden, rng),
            align_query: Linear::new(ps, "align.query", e, cfg.attention_dim, rng),
            align_key: Linear::new(ps, "align.key", cfg.frame_bins, cfg.attention_dim, rng),
            align_value: Linear::new(ps, "align.value", cfg.frame_bins, cfg.reference_dim, rng),
            post_mu: Linear::new(ps, "post.mu", cfg.reference_dim, d, rng),
            post_log_sigma: Linear::new(ps, "post.log_sigma", cfg.reference_dim, d, rng),
            codebook: cfg.quantized().then(|| {
                ps.add(
                    CODEBOOK_PARAM,
                    Mat::from_vec(
                        cfg.codebook_size,
                        d,
                        (0..cfg.codebook_size * d)
                            .map(|_| rng.uniform_range(-0.05, 0.05))
                            .collect(),
                    ),
                )
            }),
            dec_cell: RnnCell::new(ps, "dec.rnn", mem + 1 + feedback, cfg.decoder_hidden, rng),
            dec_query: Linear::new(ps, "dec.query", cfg.decoder_hidden, cfg.attention_dim, rng),
            mem_key: Linear::new(ps, "dec.key", mem, cfg.attention_dim, rng),
            out_hidden: Linear::new(ps, "dec.out1", cfg.decoder_hidden + mem, cfg.output_hidden, rng),
            out_frame: Linear::new(ps, "dec.out2", cfg.output_hidden, cfg.frame_bins, rng),
        }
    }
}

/// Per-token diagonal Gaussian posterior.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorSequence {
    pub mu: Mat,
    pub sigma: Mat,
}

impl PosteriorSequence {
    pub fn len(&self) -> usize {
        self.mu.rows
    }

    pub fn is_empty(&self) -> bool {
        self.mu.rows == 0
    }

    pub fn log_sigma(&self) -> Mat {
        self.sigma.map(f64::ln)
    }
}

/// Per-token latents with their class indices when quantized.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentSequence {
    pub z: Mat,
    pub indices: Option<Vec<usize>>,
}

impl LatentSequence {
    pub fn continuous(z: Mat) -> Self {
        LatentSequence { z, indices: None }
    }

    /// Quantizes every row; the decoder then consumes `e_{k_n}`.
    pub fn quantize(z: Mat, codebook: &Codebook) -> Result<Self> {
        let indices = codebook.assign(&z)?;
        Ok(LatentSequence {
            z,
            indices: Some(indices),
        })
    }

    pub fn len(&self) -> usize {
        self.z.rows
    }

    pub fn is_empty(&self) -> bool {
        self.z.rows == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderOutput {
    /// `T x F` predicted frames.
    pub frames: Mat,
    /// `T x N` attention over tokens, rows sum to one.
    pub attention: Mat,
}

/// Loss terms of one utterance or batch.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub recon: f64,
    pub kl: f64,
    pub vq: f64,
}

impl LossParts {
    fn add(&mut self, o: &LossParts) {
        self.total += o.total;
        self.recon += o.recon;
        self.kl += o.kl;
        self.vq += o.vq;
    }

    fn scaled(mut self, s: f64) -> Self {
        self.total *= s;
        self.recon *= s;
        self.kl *= s;
        self.vq *= s;
        self
    }
}

/// ELBO value and its gradient with respect to the predicted frames.
#[derive(Clone, Debug, PartialEq)]
pub struct ElboLoss {
    pub value: f64,
    pub recon: f64,
    pub kl: f64,
    pub frames_grad: Mat,
}

/// `recon + beta * sum(kl)` where `recon` is the mean over frames of the
/// per-frame squared error summed over bins.
pub fn elbo_loss(predicted: &Mat, target: &Mat, kl: &[f64], beta: f64) -> Result<ElboLoss> {
    if predicted.shape() != target.shape() {
        return Err(Error::dim(format!(
            "predicted {:?} vs target {:?}",
            predicted.shape(),
            target.shape()
        )));
    }
    let t = predicted.rows.max(1) as f64;
    let mut recon = 0.0;
    let mut frames_grad = Mat::zeros(predicted.rows, predicted.cols);
    for (i, (p, y)) in predicted.data.iter().zip(&target.data).enumerate() {
        recon += (p - y) * (p - y);
        frames_grad.data[i] = 2.0 * (p - y) / t;
    }
    recon /= t;
    let kl: f64 = kl.iter().sum();
    Ok(ElboLoss {
        value: recon + beta * kl,
        recon,
        kl,
        frames_grad,
    })
}

/// Per-token `KL(q || N(0, I))`.
pub fn kl_standard(post: &PosteriorSequence) -> Result<Vec<f64>> {
    if post.mu.shape() != post.sigma.shape() {
        return Err(Error::dim("posterior mean and stddev shapes differ"));
    }
    if post.sigma.data.iter().any(|s| !(*s > 0.0)) {
        return Err(Error::domain("posterior stddev must be positive"));
    }
    Ok((0..post.mu.rows)
        .map(|n| {
            post.mu
                .row(n)
                .iter()
                .zip(post.sigma.row(n))
                .map(|(m, s)| 0.5 * (m * m + s * s - 1.0 - 2.0 * s.ln()))
                .sum()
        })
        .collect())
}

/// `z = mu + sigma * eps` with fresh standard-normal `eps`.
pub fn reparam_sample(post: &PosteriorSequence, rng: &mut RngStream) -> LatentSequence {
    let z = Mat::from_vec(
        post.mu.rows,
        post.mu.cols,
        post.mu
            .data
            .iter()
            .zip(&post.sigma.data)
            .map(|(m, s)| m + s * rng.standard_normal())
            .collect(),
    );
    LatentSequence::continuous(z)
}

/// Row-stochastic softmax attention pooling: `softmax(logits) values`.
pub fn attention_pool(logits: &Mat, values: &Mat) -> Result<(Mat, Mat)> {
    if logits.cols != values.rows {
        return Err(Error::dim(format!(
            "logits over {} keys, {} values",
            logits.cols, values.rows
        )));
    }
    let tape = Tape::new();
    let w = tape.softmax_rows(tape.leaf(logits.clone()));
    let out = tape.matmul(w, tape.leaf(values.clone()));
    Ok((tape.value(w), tape.value(out)))
}

/// Squared-distance position prior between `rows` query positions and
/// `cols` key positions on the token axis.
fn position_bias(queries: usize, keys: usize, weight: f64, queries_are_frames: bool) -> Mat {
    let (t_len, n_len) = if queries_are_frames {
        (queries, keys)
    } else {
        (keys, queries)
    };
    let mut m = Mat::zeros(queries, keys);
    if weight == 0.0 {
        return m;
    }
    for q in 0..queries {
        for k in 0..keys {
            let (t, n) = if queries_are_frames { (q, k) } else { (k, q) };
            let u = (t as f64 + 0.5) * n_len as f64 / t_len as f64;
            let d = u - (n as f64 + 0.5);
            m.set(q, k, -weight * d * d);
        }
    }
    m
}

/// Everything one forward pass records on the tape.
struct Forward {
    loss: Var,
    parts: LossParts,
    indices: Option<Vec<usize>>,
}

/// Stage-1 model parameters and hyperparameters.
/// Sharpness of the output softplus; predicted magnitudes stay positive while
/// the map is close to the identity above 0.1.
pub const OUTPUT_SHARPNESS: f64 = 10.0;

fn positive(tape: &Tape, x: Var) -> Var {
    tape.scale(tape.softplus(tape.scale(x, OUTPUT_SHARPNESS)), 1.0 / OUTPUT_SHARPNESS)
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamSet,
    layout: Layout,
}

impl Model {
    pub fn new(config: ModelConfig, rng: &mut RngStream) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::new();
        let layout = Layout::build(&config, &mut params, rng);
        Ok(Model { config, params, layout })
    }

    /// Rebuilds a model around stored parameters, checking names and shapes.
    pub fn from_params(config: ModelConfig, params: ParamSet) -> Result<Self> {
        let template = Model::new(config, &mut RngStream::new(0))?;
        if template.params.len() != params.len() {
            return Err(Error::Format(format!(
                "expected {} parameter blocks, found {}",
                template.params.len(),
                params.len()
            )));
        }
        for ((tn, tm), (n, m)) in template.params.iter().zip(params.iter()) {
            if tn != n || tm.shape() != m.shape() {
                return Err(Error::Format(format!(
                    "parameter block {n} {:?} does not match expected {tn} {:?}",
                    m.shape(),
                    tm.shape()
                )));
            }
        }
        Ok(Model {
            config: template.config,
            params,
            layout: template.layout,
        })
    }

    pub fn codebook(&self) -> Option<Codebook> {
        self.layout.codebook.map(|id| Codebook {
            embeddings: self.params.get(id).clone(),
        })
    }

    pub fn set_codebook(&mut self, codebook: &Codebook) -> Result<()> {
        let id = self
            .layout
            .codebook
            .ok_or_else(|| Error::Config("model has no codebook".into()))?;
        if self.params.get(id).shape() != codebook.embeddings.shape() {
            return Err(Error::dim("codebook shape mismatch"));
        }
        *self.params.get_mut(id) = codebook.embeddings.clone();
        Ok(())
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::domain("empty token sequence"));
        }
        if let Some(t) = tokens.iter().find(|t| **t >= self.config.vocab_size) {
            return Err(Error::domain(format!(
                "token {t} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    fn check_frames(&self, frames: &Mat) -> Result<()> {
        if frames.rows == 0 {
            return Err(Error::domain("empty frame matrix"));
        }
        if frames.cols != self.config.frame_bins {
            return Err(Error::dim(format!(
                "frames have {} bins, model expects {}",
                frames.cols, self.config.frame_bins
            )));
        }
        Ok(())
    }

    fn encode_tape(&self, tape: &Tape, p: &Bound, tokens: &[usize]) -> Var {
        let l = &self.layout;
        let x = tape.gather_rows(p[l.embed], tokens);
        let n = tokens.len();
        let h0 = || tape.leaf(Mat::zeros(1, self.config.encoder_hidden));
        let mut fwd = Vec::with_capacity(n);
        let mut h = h0();
        for i in 0..n {
            h = l.enc_fwd.step(tape, p, tape.rows(x, i, 1), h);
            fwd.push(h);
        }
        let mut bwd = vec![h; n];
        let mut h = h0();
        for i in (0..n).rev() {
            h = l.enc_bwd.step(tape, p, tape.rows(x, i, 1), h);
            bwd[i] = h;
        }
        tape.concat_cols(&[tape.concat_rows(&fwd), tape.concat_rows(&bwd)])
    }

    /// Token encodings `Y`, one row per token.
    pub fn encode_tokens(&self, tokens: &[usize]) -> Result<Mat> {
        self.check_tokens(tokens)?;
        let tape = Tape::new();
        let p = self.params.bind(&tape);
        Ok(tape.value(self.encode_tape(&tape, &p, tokens)))
    }

    /// Returns `(aligned N x F', weights N x T)`.
    fn align_tape(&self, tape: &Tape, p: &Bound, enc: Var, frames: &Mat) -> (Var, Var) {
        let l = &self.layout;
        let n = tape.shape(enc).0;
        let f = tape.leaf(frames.clone());
        let q = l.align_query.forward(tape, p, enc);
        let k = l.align_key.forward(tape, p, f);
        let v = tape.tanh(l.align_value.forward(tape, p, f));
        let scores = tape.scale(tape.matmul_nt(q, k), 1.0 / (self.config.attention_dim as f64).sqrt());
        let bias = position_bias(n, frames.rows, self.config.align_position_weight, false);
        let w = tape.softmax_rows(tape.add(scores, tape.leaf(bias)));
        (tape.matmul(w, v), w)
    }

    /// Reference vectors per token and the alignment weights over frames.
    pub fn align_reference(&self, encodings: &Mat, frames: &Mat) -> Result<(Mat, Mat)> {
        self.check_frames(frames)?;
        if encodings.cols != self.config.encoding_dim() {
            return Err(Error::dim("encoding dimension mismatch"));
        }
        let tape = Tape::new();
        let p = self.params.bind(&tape);
        let (a, w) = self.align_tape(&tape, &p, tape.leaf(encodings.clone()), frames);
        Ok((tape.value(a), tape.value(w)))
    }

    /// `(mu, log_sigma)` rows; the global variant pools frames first.
    fn posterior_tape(&self, tape: &Tape, p: &Bound, enc: Var, frames: &Mat) -> (Var, Var) {
        let l = &self.layout;
        let pooled = match self.config.variant {
            Variant::Fine => self.align_tape(tape, p, enc, frames).0,
            Variant::Global => {
                let f = tape.leaf(frames.clone());
                let v = tape.tanh(l.align_value.forward(tape, p, f));
                let avg = tape.leaf(Mat::filled(1, frames.rows, 1.0 / frames.rows as f64));
                tape.matmul(avg, v)
            }
        };
        self.heads_tape(tape, p, pooled)
    }

    fn heads_tape(&self, tape: &Tape, p: &Bound, pooled: Var) -> (Var, Var) {
        let l = &self.layout;
        let mu = l.post_mu.forward(tape, p, pooled);
        let ls = tape.clamp(
            l.post_log_sigma.forward(tape, p, pooled),
            -LOG_SIGMA_LIMIT,
            LOG_SIGMA_LIMIT,
        );
        (mu, ls)
    }

    /// Linear heads on aligned (or pooled) reference vectors.
    pub fn posterior(&self, aligned: &Mat) -> Result<PosteriorSequence> {
        if aligned.cols != self.config.reference_dim {
            return Err(Error::dim("aligned vector dimension mismatch"));
        }
        if !aligned.is_finite() {
            return Err(Error::domain("aligned vectors are not finite"));
        }
        let tape = Tape::new();
        let p = self.params.bind(&tape);
        let (mu, ls) = self.heads_tape(&tape, &p, tape.leaf(aligned.clone()));
        Ok(PosteriorSequence {
            mu: tape.value(mu),
            sigma: tape.value(ls).map(f64::exp),
        })
    }

    /// Encodings and posterior of an utterance.
    pub fn infer(&self, tokens: &[usize], frames: &Mat) -> Result<(Mat, PosteriorSequence)> {
        self.check_tokens(tokens)?;
        self.check_frames(frames)?;
        let tape = Tape::new();
        let p = self.params.bind(&tape);
        let enc = self.encode_tape(&tape, &p, tokens);
        let (mu, ls) = self.posterior_tape(&tape, &p, enc, frames);
        Ok((
            tape.value(enc),
            PosteriorSequence {
                mu: tape.value(mu),
                sigma: tape.value(ls).map(f64::exp),
            },
        ))
    }

    /// Broadcasts a global latent row to every token.
    fn per_token(&self, tape: &Tape, z: Var, n: usize) -> Var {
        if tape.shape(z).0 == n {
            z
        } else {
            tape.gather_rows(z, &vec![0; n])
        }
    }

    /// Returns `(frames T x F, attention T x N)`.
    fn decode_tape(
        &self,
        tape: &Tape,
        p: &Bound,
        enc: Var,
        code: Var,
        length: usize,
        teacher: Option<&Mat>,
    ) -> (Var, Mat) {
        let l = &self.layout;
        let cfg = &self.config;
        let n = tape.shape(enc).0;
        let memory = tape.concat_cols(&[enc, self.per_token(tape, code, n)]);
        let mem_dim = tape.shape(memory).1;
        let keys = l.mem_key.forward(tape, p, memory);
        let bias = position_bias(length, n, cfg.decoder_position_weight, true);
        let inv_sqrt = 1.0 / (cfg.attention_dim as f64).sqrt();

        let mut h = tape.leaf(Mat::zeros(1, cfg.decoder_hidden));
        let mut context = tape.leaf(Mat::zeros(1, mem_dim));
        let mut prev_frame = tape.leaf(Mat::zeros(1, cfg.frame_bins));
        let mut hs = Vec::with_capacity(length);
        let mut cs = Vec::with_capacity(length);
        let mut outs = Vec::with_capacity(length);
        let mut attention = Mat::zeros(length, n);
        for t in 0..length {
            let pos = tape.leaf(Mat::row_vector(vec![(t as f64 + 0.5) / length as f64]));
            let input = if cfg.frame_feedback {
                tape.concat_cols(&[context, pos, prev_frame])
            } else {
                tape.concat_cols(&[context, pos])
            };
            h = l.dec_cell.step(tape, p, input, h);
            let q = l.dec_query.forward(tape, p, h);
            let scores = tape.scale(tape.matmul_nt(q, keys), inv_sqrt);
            let row_bias = Mat::row_vector(bias.row(t).to_vec());
            let a = tape.softmax_rows(tape.add(scores, tape.leaf(row_bias)));
            attention.row_mut(t).copy_from_slice(&tape.value(a).data);
            context = tape.matmul(a, memory);
            hs.push(h);
            cs.push(context);
            if cfg.frame_feedback {
                let joint = tape.concat_cols(&[h, context]);
                let y = positive(
                    tape,
                    l.out_frame
                        .forward(tape, p, tape.tanh(l.out_hidden.forward(tape, p, joint))),
                );
                outs.push(y);
                prev_frame = match teacher {
                    Some(tf) => tape.leaf(Mat::row_vector(tf.row(t).to_vec())),
                    None => y,
                };
            }
        }
        let frames = if cfg.frame_feedback {
            tape.concat_rows(&outs)
        } else {
            let joint = tape.concat_cols(&[tape.concat_rows(&hs), tape.concat_rows(&cs)]);
            positive(
                tape,
                l.out_frame
                    .forward(tape, p, tape.tanh(l.out_hidden.forward(tape, p, joint))),
            )
        };
        (frames, attention)
    }

    /// Decoder input for a latent sequence: codewords when quantized.
    fn code_values(&self, latents: &LatentSequence) -> Result<Mat> {
        match &latents.indices {
            Some(idx) => {
                let cb = self
                    .codebook()
                    .ok_or_else(|| Error::Config("quantized latents for a model without codebook".into()))?;
                if let Some(k) = idx.iter().find(|k| **k >= cb.size()) {
                    return Err(Error::domain(format!("class {k} outside codebook of {}", cb.size())));
                }
                Ok(cb.lookup(idx))
            }
            None => Ok(latents.z.clone()),
        }
    }

    /// Runs the decoder for `length` frames, or the teacher's length when
    /// teacher frames are given, or `frames_per_token * N` otherwise.
    pub fn decode(
        &self,
        encodings: &Mat,
        latents: &LatentSequence,
        teacher: Option<&Mat>,
        length: Option<usize>,
    ) -> Result<DecoderOutput> {
        let n = encodings.rows;
        let expected_rows = match self.config.variant {
            Variant::Fine => n,
            Variant::Global => 1,
        };
        if latents.len() != expected_rows || latents.z.cols != self.config.code_dim() {
            return Err(Error::dim(format!(
                "{} tokens but latents are {:?}",
                n,
                latents.z.shape()
            )));
        }
        if let Some(tf) = teacher {
            self.check_frames(tf)?;
        }
        let length = teacher
            .map(|t| t.rows)
            .or(length)
            .unwrap_or(self.config.frames_per_token * n);
        if length == 0 {
            return Err(Error::domain("decoder length must be positive"));
        }
        let code = self.code_values(latents)?;
        let tape = Tape::new();
        let p = self.params.bind(&tape);
        let (frames, attention) = self.decode_tape(
            &tape,
            &p,
            tape.leaf(encodings.clone()),
            tape.leaf(code),
            length,
            teacher,
        );
        Ok(DecoderOutput {
            frames: tape.value(frames),
            attention,
        })
    }

    /// Reconstruction from posterior means, quantized when the model has a
    /// codebook, with the reference length.
    pub fn copy_synthesis(&self, utt: &Utterance) -> Result<DecoderOutput> {
        let (enc, post) = self.infer(&utt.tokens, &utt.frames)?;
        let latents = match self.codebook() {
            Some(cb) => LatentSequence::quantize(post.mu, &cb)?,
            None => LatentSequence::continuous(post.mu),
        };
        self.decode(&enc, &latents, Some(&utt.frames), None)
    }

    /// Teacher-forced reconstruction error with latents `z` quantized through
    /// the straight-through path, and its gradient with respect to `z`.
    pub fn straight_through_recon(&self, utt: &Utterance, z: &Mat) -> Result<(f64, Mat, Vec<usize>)> {
        self.check_tokens(&utt.tokens)?;
        self.check_frames(&utt.frames)?;
        let cb = self
            .layout
            .codebook
            .ok_or_else(|| Error::Config("model has no codebook".into()))?;
        if z.shape() != (utt.tokens.len(), self.config.code_dim()) {
            return Err(Error::dim(format!(
                "latents {:?} for {} tokens",
                z.shape(),
                utt.tokens.len()
            )));
        }
        let tape = Tape::new();
        let p = self.params.bind(&tape);
        let enc = self.encode_tape(&tape, &p, &utt.tokens);
        let zv = tape.leaf(z.clone());
        let q = quantize_on_tape(&tape, zv, p[cb], self.config.gamma);
        let (pred, _) = self.decode_tape(&tape, &p, enc, q.quantized, utt.frames.rows, Some(&utt.frames));
        let diff = tape.sub(pred, tape.leaf(utt.frames.clone()));
        let recon = tape.scale(tape.sum_sq(diff), 1.0 / utt.frames.rows as f64);
        let grads = tape.backward(recon);
        Ok((tape.scalar(recon), grads.wrt_or_zeros(zv, z.rows, z.cols), q.indices))
    }

    fn forward(&self, tape: &Tape, p: &Bound, utt: &Utterance, rng: &mut RngStream, quantize: bool) -> Forward {
        let cfg = &self.config;
        let enc = self.encode_tape(tape, p, &utt.tokens);
        let (mu, ls) = self.posterior_tape(tape, p, enc, &utt.frames);
        let (rows, cols) = tape.shape(mu);
        let eps = Mat::from_vec(rows, cols, (0..rows * cols).map(|_| rng.standard_normal()).collect());
        let z = tape.add(mu, tape.mul(tape.exp(ls), tape.leaf(eps)));
        let kl = tape.sum(tape.kl_standard(mu, ls));

        let (code, vq, indices) = match self.layout.codebook.filter(|_| quantize) {
            Some(cb) => {
                let q = quantize_on_tape(tape, z, p[cb], cfg.gamma);
                let vq = tape.add(q.quantization_loss, q.commitment_loss);
                (q.quantized, Some(vq), Some(q.indices))
            }
            None => (z, None, None),
        };
        let (pred, _) = self.decode_tape(tape, p, enc, code, utt.frames.rows, Some(&utt.frames));
        let diff = tape.sub(pred, tape.leaf(utt.frames.clone()));
        let recon = tape.scale(tape.sum_sq(diff), 1.0 / utt.frames.rows as f64);
        let mut loss = tape.add(recon, tape.scale(kl, cfg.beta));
        if let Some(v) = vq {
            loss = tape.add(loss, v);
        }
        let parts = LossParts {
            total: tape.scalar(loss),
            recon: tape.scalar(recon),
            kl: tape.scalar(kl),
            vq: vq.map_or(0.0, |v| tape.scalar(v)),
        };
        Forward { loss, parts, indices }
    }

    /// Loss of one utterance and its gradient for every parameter block.
    /// With `quantize` false a model with a codebook trains as if it had none.
    pub fn loss_and_grads(
        &self,
        utt: &Utterance,
        rng: &mut RngStream,
        quantize: bool,
    ) -> Result<(LossParts, Vec<Mat>, Option<Vec<usize>>)> {
        self.check_tokens(&utt.tokens)?;
        self.check_frames(&utt.frames)?;
        let tape = Tape::new();
        let p = self.params.bind(&tape);
        let fwd = self.forward(&tape, &p, utt, rng, quantize);
        let grads = tape.backward(fwd.loss);
        Ok((fwd.parts, self.params.collect_grads(&grads, &p), fwd.indices))
    }

    /// Mean loss and gradient over a batch. Utterance `i` draws its noise
    /// from `noise.child(i)`; results are summed in batch order.
    pub fn batch_loss_and_grads(
        &self,
        batch: &[&Utterance],
        noise: &RngStream,
        quantize: bool,
    ) -> Result<(LossParts, Vec<Mat>, Vec<usize>)> {
        if batch.is_empty() {
            return Err(Error::domain("empty batch"));
        }
        type Item = Result<(LossParts, Vec<Mat>, Option<Vec<usize>>)>;
        let results: Vec<Item> = batch
            .par_iter()
            .enumerate()
            .map(|(i, u)| self.loss_and_grads(u, &mut noise.child(i as u64), quantize))
            .collect();
        let mut parts = LossParts::default();
        let mut grads: Vec<Mat> = self.params.mats().iter().map(|m| Mat::zeros(m.rows, m.cols)).collect();
        let mut indices = Vec::new();
        for r in results {
            let (lp, g, idx) = r?;
            parts.add(&lp);
            add_grads(&mut grads, &g);
            indices.extend(idx.unwrap_or_default());
        }
        let s = 1.0 / batch.len() as f64;
        scale_grads(&mut grads, s);
        Ok((parts.scaled(s), grads, indices))
    }

    /// Initializes the codebook from posterior samples of the untrained model.
    pub fn init_codebook_from(&mut self, corpus: &[Utterance], rng: &mut RngStream) -> Result<()> {
        let Some(_) = self.layout.codebook else {
            return Ok(());
        };
        let k = self.config.codebook_size;
        let d = self.config.code_dim();
        let cb = match self.config.codebook_init {
            CodebookInit::Uniform => init_codebook(k, d, rng, None)?,
            CodebookInit::Samples => {
                let mut rows = Vec::new();
                for utt in corpus {
                    let (_, post) = self.infer(&utt.tokens, &utt.frames)?;
                    let z = reparam_sample(&post, rng).z;
                    rows.extend(z.to_rows());
                    if rows.len() >= 4 * k {
                        break;
                    }
                }
                if rows.len() < k {
                    return Err(Error::domain(format!(
                        "corpus yields {} latents, fewer than the {k} codewords",
                        rows.len()
                    )));
                }
                init_codebook(k, d, rng, Some(&Mat::from_rows(&rows)))?
            }
        };
        self.set_codebook(&cb)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lr_decay: f64,
    pub decay_every: usize,
    pub clip_norm: f64,
    /// Steps trained without quantization before the codebook is drawn from
    /// posterior samples. 0 draws it from the untrained model.
    pub vq_warmup_steps: usize,
    /// Interval between retained log entries.
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            batch_size: 8,
            learning_rate: 1e-3,
            lr_decay: 0.5,
            decay_every: 2000,
            clip_norm: 5.0,
            vq_warmup_steps: 300,
            log_every: 50,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.lr_decay > 0.0) || !(self.clip_norm > 0.0) {
            return Err(Error::Config(
                "train.learning_rate, train.lr_decay and train.clip_norm must be positive".into(),
            ));
        }
        if self.log_every == 0 {
            return Err(Error::Config("train.log_every must be positive".into()));
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainLogEntry {
    pub step: usize,
    pub loss: LossParts,
    pub grad_norm: f64,
    pub learning_rate: f64,
    /// Batch codebook perplexity when quantizing.
    pub perplexity: Option<f64>,
}

/// Resumable stage-1 optimizer state.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: Model,
    pub adam: Adam,
    pub config: TrainConfig,
    pub seed: u64,
    /// Completed steps.
    pub step: usize,
}

impl Trainer {
    /// Fresh model with parameters and codebook drawn from `seed`.
    pub fn new(model_config: ModelConfig, config: TrainConfig, seed: u64, corpus: &[Utterance]) -> Result<Self> {
        config.validate()?;
        let root = RngStream::new(seed);
        let mut model = Model::new(model_config, &mut root.child(0))?;
        if config.vq_warmup_steps == 0 {
            model.init_codebook_from(corpus, &mut root.child(1))?;
        }
        let adam = Adam::new(&model.params);
        Ok(Trainer {
            model,
            adam,
            config,
            seed,
            step: 0,
        })
    }

    /// Batch draw and noise stream for step `step`; pure in `(seed, step)` so
    /// resumed runs replay exactly.
    fn step_streams(&self, step: usize) -> (RngStream, RngStream) {
        let s = RngStream::new(derive_seed(self.seed, 2)).child(step as u64);
        (s.child(0), s.child(1))
    }

    pub fn train_step(&mut self, corpus: &[Utterance]) -> Result<TrainLogEntry> {
        if corpus.is_empty() {
            return Err(Error::domain("empty training corpus"));
        }
        let step = self.step;
        let warm = self.config.vq_warmup_steps;
        if warm > 0 && step == warm {
            self.model
                .init_codebook_from(corpus, &mut RngStream::new(self.seed).child(1))?;
        }
        let quantize = step >= warm;
        let (mut pick, noise) = self.step_streams(step);
        let mut order: Vec<usize> = (0..corpus.len()).collect();
        pick.shuffle(&mut order);
        let batch: Vec<&Utterance> = order
            .iter()
            .cycle()
            .take(self.config.batch_size)
            .map(|i| &corpus[*i])
            .collect();
        let (parts, mut grads, indices) = self.model.batch_loss_and_grads(&batch, &noise, quantize)?;
        if !parts.total.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::Training {
                step,
                detail: format!("non-finite loss {}", parts.total),
            });
        }
        let grad_norm = clip_grad_norm(&mut grads, self.config.clip_norm);
        let lr = decayed_lr(
            self.config.learning_rate,
            self.config.lr_decay,
            self.config.decay_every,
            step,
        );
        self.adam.step(&mut self.model.params, &grads, lr);
        self.step += 1;
        let perplexity = if indices.is_empty() {
            None
        } else {
            Some(codebook_perplexity(&indices, self.model.config.codebook_size)?)
        };
        Ok(TrainLogEntry {
            step,
            loss: parts,
            grad_norm,
            learning_rate: lr,
            perplexity,
        })
    }

    /// Trains until `config.steps` steps are complete, keeping every
    /// `log_every`-th entry and the last one.
    pub fn run(&mut self, corpus: &[Utterance]) -> Result<Vec<TrainLogEntry>> {
        let mut log = Vec::new();
        while self.step < self.config.steps {
            let entry = self.train_step(corpus)?;
            if entry.step % self.config.log_every == 0 || self.step == self.config.steps {
                log.push(entry);
            }
        }
        Ok(log)
    }
}

/// Trains a stage-1 model from scratch.
pub fn train_stage1(
    corpus: &[Utterance],
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    seed: u64,
) -> Result<(Model, Vec<TrainLogEntry>)> {
    if corpus.is_empty() {
        return Err(Error::domain("empty training corpus"));
    }
    let mut trainer = Trainer::new(model_config.clone(), train_config.clone(), seed, corpus)?;
    let log = trainer.run(corpus)?;
    Ok((trainer.model, log))
}

/// Mean copy-synthesis reconstruction error over a set.
pub fn mean_recon_error(model: &Model, utts: &[Utterance]) -> Result<f64> {
    let errs: Vec<Result<f64>> = utts
        .par_iter()
        .map(|u| {
            let out = model.copy_synthesis(u)?;
            Ok(elbo_loss(&out.frames, &u.frames, &[], 0.0)?.recon)
        })
        .collect();
    let mut total = 0.0;
    for e in errs {
        total += e?;
    }
    Ok(total / utts.len().max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            vocab_size: 6,
            embed_dim: 4,
            encoder_hidden: 3,
            attention_dim: 4,
            reference_dim: 5,
            decoder_hidden: 6,
            output_hidden: 5,
            frame_bins: 7,
            frames_per_token: 3,
            ..ModelConfig::default()
        }
    }

    fn frames(t: usize, f: usize, seed: u64) -> Mat {
        let mut rng = RngStream::new(seed);
        Mat::from_vec(t, f, (0..t * f).map(|_| rng.uniform()).collect())
    }

    #[test]
    fn encoder_shapes_and_context() {
        let m = Model::new(small(), &mut RngStream::new(1)).unwrap();
        assert_eq!(m.encode_tokens(&[2]).unwrap().shape(), (1, 6));
        let a = m.encode_tokens(&[0, 1, 2]).unwrap();
        let b = m.encode_tokens(&[0, 2, 1]).unwrap();
        assert_eq!(a, m.encode_tokens(&[0, 1, 2]).unwrap());
        assert_ne!(a.row(1), b.row(1));
        assert!(matches!(m.encode_tokens(&[9]), Err(Error::Domain(_))));
    }

    #[test]
    fn alignment_examples() {
        let m = Model::new(small(), &mut RngStream::new(2)).unwrap();
        let enc = m.encode_tokens(&[1, 2, 3]).unwrap();
        let one = frames(1, 7, 3);
        let (aligned, w) = m.align_reference(&enc, &one).unwrap();
        assert!(w.data.iter().all(|x| (*x - 1.0).abs() < 1e-15));
        assert_eq!(aligned.row(0), aligned.row(2));
        assert!(matches!(
            m.align_reference(&enc, &Mat::zeros(0, 7)),
            Err(Error::Domain(_))
        ));

        let values = Mat::from_rows(&[vec![1.0, 2.0], vec![3.0, -4.0], vec![5.0, 0.0]]);
        let (_, uniform) = attention_pool(&Mat::zeros(1, 3), &values).unwrap();
        assert!((uniform.at(0, 0) - 3.0).abs() < 1e-12 && (uniform.at(0, 1) + 2.0 / 3.0).abs() < 1e-12);
        let (_, peaked) = attention_pool(&Mat::row_vector(vec![0.0, 1e3, 0.0]), &values).unwrap();
        assert!((peaked.at(0, 0) - 3.0).abs() < 1e-6 && (peaked.at(0, 1) + 4.0).abs() < 1e-6);
    }

    #[test]
    fn zero_heads_give_standard_posterior() {
        let mut m = Model::new(small(), &mut RngStream::new(4)).unwrap();
        for name in ["post.mu.w", "post.mu.b", "post.log_sigma.w", "post.log_sigma.b"] {
            let id = m.params.id(name).unwrap();
            let shape = m.params.get(id).shape();
            *m.params.get_mut(id) = Mat::zeros(shape.0, shape.1);
        }
        let post = m.posterior(&frames(4, 5, 5)).unwrap();
        assert_eq!(post.mu.cols, 3);
        assert!(post.mu.data.iter().all(|v| *v == 0.0));
        assert!(post.sigma.data.iter().all(|v| *v == 1.0));
    }

    #[test]
    fn reparam_and_kl() {
        let tight = PosteriorSequence {
            mu: Mat::from_rows(&[vec![0.3, -1.0, 2.0]]),
            sigma: Mat::filled(1, 3, (-LOG_SIGMA_LIMIT).exp()),
        };
        let z = reparam_sample(&tight, &mut RngStream::new(1)).z;
        for (a, b) in z.data.iter().zip(&tight.mu.data) {
            assert!((a - b).abs() < 1e-4);
        }
        let a = reparam_sample(&tight, &mut RngStream::new(8));
        assert_eq!(a, reparam_sample(&tight, &mut RngStream::new(8)));

        let std = PosteriorSequence {
            mu: Mat::zeros(2, 3),
            sigma: Mat::filled(2, 3, 1.0),
        };
        assert_eq!(kl_standard(&std).unwrap(), vec![0.0, 0.0]);
        let shifted = PosteriorSequence {
            mu: Mat::from_rows(&[vec![1.0, 0.0, 0.0]]),
            sigma: Mat::filled(1, 3, 1.0),
        };
        assert!((kl_standard(&shifted).unwrap()[0] - 0.5).abs() < 1e-15);
        let bad = PosteriorSequence {
            mu: Mat::zeros(1, 1),
            sigma: Mat::zeros(1, 1),
        };
        assert!(matches!(kl_standard(&bad), Err(Error::Domain(_))));
    }

    #[test]
    fn decoder_contract() {
        let m = Model::new(small(), &mut RngStream::new(6)).unwrap();
        let enc = m.encode_tokens(&[1, 4, 2, 0]).unwrap();
        let lat = LatentSequence::continuous(frames(4, 3, 7));
        let teacher = frames(10, 7, 8);
        let out = m.decode(&enc, &lat, Some(&teacher), None).unwrap();
        assert_eq!(out.frames.shape(), teacher.shape());
        assert_eq!(out.attention.shape(), (10, 4));
        for t in 0..10 {
            assert!((out.attention.row(t).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        let free = m.decode(&enc, &lat, None, None).unwrap();
        assert_eq!(free.frames.rows, 12);
        let short = LatentSequence::continuous(Mat::zeros(3, 3));
        assert!(matches!(m.decode(&enc, &short, None, None), Err(Error::Dimension(_))));
    }

    #[test]
    fn elbo_examples() {
        let target = frames(5, 4, 9);
        let zero_kl = kl_standard(&PosteriorSequence {
            mu: Mat::zeros(3, 3),
            sigma: Mat::filled(3, 3, 1.0),
        })
        .unwrap();
        assert_eq!(elbo_loss(&target, &target, &zero_kl, 1e-2).unwrap().value, 0.0);
        let pred = target.map(|v| v + 0.1);
        let kl = [0.4, 0.7];
        let mse = elbo_loss(&pred, &target, &kl, 0.0).unwrap();
        assert_eq!(mse.value, mse.recon);
        let a = elbo_loss(&pred, &target, &kl, 0.01).unwrap();
        let b = elbo_loss(&pred, &target, &kl, 0.02).unwrap();
        assert!(((b.value - b.recon) - 2.0 * (a.value - a.recon)).abs() < 1e-15);
        assert!(matches!(
            elbo_loss(&pred, &frames(4, 4, 1), &kl, 0.0),
            Err(Error::Dimension(_))
        ));
    }
}
