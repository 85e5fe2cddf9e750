//! The two-stage pipeline as file-to-file commands. Every command reads its
//! inputs from and writes its outputs to one output directory, using the
//! file names in the `paths` config section.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::checkpoint::{params_digest, Checkpoint, Stage};
use crate::config::{ExperimentConfig, SeedPurpose};
use crate::corpus::{generate_corpus, read_corpus, split_corpus, write_corpus, Utterance};
use crate::error::{Error, Result};
use crate::metrics::{diversity_stats, ffe, mcd, phoneme_prosody, AudioConfig, DiversityStats};
use crate::model::{LatentSequence, Model, TrainLogEntry, Trainer, Variant};
use crate::nn::ParamSet;
use crate::numerics::RngStream;
use crate::priors::{
    fit_prior_continuous, fit_prior_discrete, sample_independent, ClassSource, ContinuousArPrior, DiscreteArPrior,
    PriorKind, PriorLogEntry,
};
use crate::records::{fmt_f64, render_report, MetricSet, SampleRecord, SampleSet, SetKind};
use crate::tape::Mat;

const ADAM_PREFIX: &str = "adam.";

fn file(cfg: &ExperimentConfig, out: &Path, name: &str) -> PathBuf {
    cfg.path(out, name)
}

fn require(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Data(format!("{what} {} does not exist", path.display())))
    }
}

fn load_corpus(path: &Path, what: &str) -> Result<Vec<Utterance>> {
    require(path, what)?;
    read_corpus(path)
}

/// Writes the train and test corpora.
pub fn cmd_gen_corpus(cfg: &ExperimentConfig, out: &Path) -> Result<String> {
    let audio = cfg.audio();
    let spec = cfg.corpus.spec(cfg.seed_for(SeedPurpose::Corpus), audio);
    spec.validate()?;
    let all = generate_corpus(&spec, "utt")?;
    let fraction = cfg.corpus.train_count as f64 / all.len() as f64;
    let (train, test) = split_corpus(&all, fraction, cfg.seed_for(SeedPurpose::Split))?;
    fs::create_dir_all(out)?;
    write_corpus(&file(cfg, out, &cfg.paths.train_corpus), &train, &audio)?;
    write_corpus(&file(cfg, out, &cfg.paths.test_corpus), &test, &audio)?;
    let frames: usize = all.iter().map(|u| u.frames.rows).sum();
    let tokens: usize = all.iter().map(|u| u.tokens.len()).sum();
    Ok(format!(
        "corpus: {} train, {} test utterances ({tokens} tokens, {frames} frames)",
        train.len(),
        test.len()
    ))
}

fn stage1_checkpoint(cfg: &ExperimentConfig, trainer: &Trainer) -> Checkpoint {
    let mut ck = Checkpoint::new(Stage::Stage1, cfg.to_toml());
    ck.set_meta("step", trainer.step as u64);
    ck.set_meta("codebook_size", trainer.model.config.codebook_size as u64);
    ck.set_meta("latent_dim", trainer.model.config.code_dim() as u64);
    ck.push_params(&trainer.model.params);
    ck.push_adam(&trainer.model.params, &trainer.adam);
    ck
}

fn model_params(ck: &Checkpoint) -> ParamSet {
    let mut p = ParamSet::new();
    for (name, m) in &ck.blocks {
        if !name.starts_with(ADAM_PREFIX) {
            p.add(name.clone(), m.clone());
        }
    }
    p
}

fn echo_config(ck: &Checkpoint) -> Result<ExperimentConfig> {
    ExperimentConfig::from_toml(&ck.config)
        .map_err(|e| Error::Format(format!("checkpoint config echo is invalid: {e}")))
}

/// Loads the stage-1 model along with the config it was trained under.
pub fn load_stage1(path: &Path) -> Result<(Model, ExperimentConfig)> {
    require(path, "stage-1 checkpoint")?;
    let ck = Checkpoint::load(path)?;
    if ck.stage != Stage::Stage1 {
        return Err(Error::Format(format!(
            "{} holds a {} checkpoint, expected stage1",
            path.display(),
            ck.stage.tag()
        )));
    }
    let echo = echo_config(&ck)?;
    let model = Model::from_params(echo.model.clone(), model_params(&ck))?;
    Ok((model, echo))
}

fn train_log_line(e: &TrainLogEntry) -> String {
    let mut s = format!(
        "step={} total={} recon={} kl={} vq={} grad_norm={} lr={}",
        e.step,
        fmt_f64(e.loss.total),
        fmt_f64(e.loss.recon),
        fmt_f64(e.loss.kl),
        fmt_f64(e.loss.vq),
        fmt_f64(e.grad_norm),
        e.learning_rate
    );
    if let Some(p) = e.perplexity {
        let _ = write!(s, " perplexity={}", fmt_f64(p));
    }
    s
}

/// Stage-1 training. With `resume`, continues from the existing checkpoint
/// up to `train.steps`; the result matches an uninterrupted run.
pub fn cmd_train(cfg: &ExperimentConfig, out: &Path, resume: bool) -> Result<String> {
    let train = load_corpus(&file(cfg, out, &cfg.paths.train_corpus), "train corpus")?;
    let ck_path = file(cfg, out, &cfg.paths.stage1);
    let log_path = file(cfg, out, &cfg.paths.train_log);
    let mut trainer = Trainer::new(
        cfg.model.clone(),
        cfg.train.clone(),
        cfg.seed_for(SeedPurpose::Train),
        &train,
    )?;
    let mut log = String::new();
    if resume {
        require(&ck_path, "checkpoint to resume")?;
        let ck = Checkpoint::load(&ck_path)?;
        let echo = echo_config(&ck)?;
        if ck.stage != Stage::Stage1 || echo.model != cfg.model || echo.seed != cfg.seed {
            return Err(Error::Config(
                "resume checkpoint was trained with a different model config or seed".into(),
            ));
        }
        trainer.model = Model::from_params(cfg.model.clone(), model_params(&ck))?;
        ck.load_adam(&trainer.model.params, &mut trainer.adam)?;
        trainer.step = ck.require_meta("step")? as usize;
        if log_path.is_file() {
            log = fs::read_to_string(&log_path)?;
        }
    } else {
        let _ = writeln!(
            log,
            "#qfvae-train-log model={} digest={}",
            cfg.model_label(),
            cfg.digest()
        );
    }
    let start = trainer.step;
    let entries = trainer.run(&train)?;
    for e in &entries {
        log.push_str(&train_log_line(e));
        log.push('\n');
    }
    fs::create_dir_all(out)?;
    stage1_checkpoint(cfg, &trainer).save(&ck_path)?;
    fs::write(&log_path, log)?;
    let last = entries.last();
    Ok(format!(
        "trained {} from step {start} to {}{}",
        cfg.model_label(),
        trainer.step,
        last.map(|e| format!(": {}", train_log_line(e))).unwrap_or_default()
    ))
}

fn prior_log_text(kind: PriorKind, cfg: &ExperimentConfig, log: &[PriorLogEntry]) -> String {
    let loss = match kind {
        PriorKind::ArDiscrete => "cross_entropy",
        _ => "kl",
    };
    let mut s = format!(
        "#qfvae-prior-log prior={} model={} digest={}\n",
        kind.name(),
        cfg.model_label(),
        cfg.digest()
    );
    for e in log {
        let _ = writeln!(
            s,
            "step={} {loss}={} grad_norm={}",
            e.step,
            fmt_f64(e.loss),
            fmt_f64(e.grad_norm)
        );
    }
    s
}

fn digest_u64(hex: &str) -> u64 {
    u64::from_str_radix(hex, 16).unwrap_or(0)
}

/// Stage 2: fits the AR prior named by `sampling.prior` to the frozen stage-1
/// posteriors of the training set.
pub fn cmd_fit_prior(cfg: &ExperimentConfig, out: &Path) -> Result<String> {
    let kind = cfg.sampling.prior;
    if kind == PriorKind::Independent {
        return Err(Error::Config(
            "sampling.prior is independent; fit-prior needs ar-continuous or ar-discrete".into(),
        ));
    }
    let (model, echo) = load_stage1(&file(cfg, out, &cfg.paths.stage1))?;
    if model.config.variant == Variant::Global {
        return Err(Error::Config(
            "autoregressive priors need the fine-grained variant".into(),
        ));
    }
    let codebook = model.codebook();
    if kind == PriorKind::ArDiscrete && codebook.is_none() {
        return Err(Error::Config(
            "ar-discrete prior requested against a stage-1 checkpoint without a codebook".into(),
        ));
    }
    let train = load_corpus(&file(cfg, out, &cfg.paths.train_corpus), "train corpus")?;
    let before = params_digest(&model.params);
    let inferred: Vec<_> = train
        .par_iter()
        .map(|u| model.infer(&u.tokens, &u.frames))
        .collect::<Result<_>>()?;
    let (encodings, posteriors): (Vec<Mat>, Vec<_>) = inferred.into_iter().unzip();
    let seed = cfg.seed_for(SeedPurpose::Prior);
    let mut ck;
    let log = match kind {
        PriorKind::ArContinuous => {
            let (prior, log) = fit_prior_continuous(&posteriors, &encodings, &cfg.prior, seed)?;
            ck = Checkpoint::new(Stage::PriorContinuous, cfg.to_toml());
            ck.set_meta("latent_dim", prior.latent_dim as u64);
            ck.set_meta("encoding_dim", prior.encoding_dim as u64);
            ck.set_meta("hidden", prior.hidden as u64);
            ck.push_params(&prior.params);
            log
        }
        PriorKind::ArDiscrete => {
            let cb = codebook.as_ref().expect("checked above");
            let source = ClassSource::Posterior {
                posteriors: &posteriors,
                codebook: cb,
            };
            let (prior, log) =
                fit_prior_discrete(source, cb.size(), cfg.prior.embed_dim, &encodings, &cfg.prior, seed)?;
            ck = Checkpoint::new(Stage::PriorDiscrete, cfg.to_toml());
            ck.set_meta("classes", prior.classes as u64);
            ck.set_meta("embed_dim", prior.embed_dim as u64);
            ck.set_meta("encoding_dim", prior.encoding_dim as u64);
            ck.set_meta("hidden", prior.hidden as u64);
            ck.push_params(&prior.params);
            log
        }
        PriorKind::Independent => unreachable!(),
    };
    if params_digest(&model.params) != before {
        return Err(Error::Evaluation(
            "stage-1 parameters changed while fitting the prior".into(),
        ));
    }
    ck.set_meta("stage1_digest", digest_u64(&before));
    ck.save(&file(cfg, out, &cfg.paths.prior))?;
    fs::write(file(cfg, out, &cfg.paths.prior_log), prior_log_text(kind, &echo, &log))?;
    let last = log.last().map(|e| e.loss).unwrap_or(f64::NAN);
    Ok(format!(
        "fitted {} prior over {} utterances, final per-token loss {}",
        kind.name(),
        train.len(),
        fmt_f64(last)
    ))
}

enum LoadedPrior {
    Independent,
    Continuous(ContinuousArPrior),
    Discrete(DiscreteArPrior),
}

fn load_prior(cfg: &ExperimentConfig, out: &Path, model: &Model) -> Result<LoadedPrior> {
    let kind = cfg.sampling.prior;
    if kind == PriorKind::Independent {
        return Ok(LoadedPrior::Independent);
    }
    let path = file(cfg, out, &cfg.paths.prior);
    require(&path, "prior checkpoint")?;
    let ck = Checkpoint::load(&path)?;
    let expected = match kind {
        PriorKind::ArContinuous => Stage::PriorContinuous,
        _ => Stage::PriorDiscrete,
    };
    if ck.stage != expected {
        return Err(Error::Config(format!(
            "sampling.prior is {} but {} holds a {} checkpoint",
            kind.name(),
            path.display(),
            ck.stage.tag()
        )));
    }
    let mismatch = |what: &str| {
        Error::Config(format!(
            "prior checkpoint is inconsistent with the stage-1 model: {what}"
        ))
    };
    if ck.require_meta("stage1_digest")? != digest_u64(&params_digest(&model.params)) {
        return Err(mismatch("it was fitted to different stage-1 parameters"));
    }
    let enc_dim = ck.require_meta("encoding_dim")? as usize;
    if enc_dim != model.config.encoding_dim() {
        return Err(mismatch("encoding width"));
    }
    let hidden = ck.require_meta("hidden")? as usize;
    match kind {
        PriorKind::ArContinuous => {
            let d = ck.require_meta("latent_dim")? as usize;
            if d != model.config.code_dim() {
                return Err(mismatch("latent dimension"));
            }
            Ok(LoadedPrior::Continuous(ContinuousArPrior::from_params(
                d,
                enc_dim,
                hidden,
                ck.params_with_prefix(""),
            )?))
        }
        _ => {
            let k = ck.require_meta("classes")? as usize;
            if k != model.config.codebook_size {
                return Err(mismatch("codebook size"));
            }
            let embed = ck.require_meta("embed_dim")? as usize;
            Ok(LoadedPrior::Discrete(DiscreteArPrior::from_params(
                k,
                embed,
                enc_dim,
                hidden,
                ck.params_with_prefix(""),
            )?))
        }
    }
}

/// Free-running samples for randomly chosen test utterances.
pub fn cmd_sample(cfg: &ExperimentConfig, out: &Path) -> Result<String> {
    let (model, _) = load_stage1(&file(cfg, out, &cfg.paths.stage1))?;
    let prior = load_prior(cfg, out, &model)?;
    let test = load_corpus(&file(cfg, out, &cfg.paths.test_corpus), "test corpus")?;
    let root = RngStream::new(cfg.seed_for(SeedPurpose::Sample));
    let mut order: Vec<usize> = (0..test.len()).collect();
    root.child(0).shuffle(&mut order);
    order.truncate(cfg.sampling.utterances.min(test.len()));
    let codebook = model.codebook();
    let s = &cfg.sampling;
    let per_utt: Vec<Vec<SampleRecord>> = order
        .par_iter()
        .enumerate()
        .map(|(j, &i)| {
            let utt = &test[i];
            let enc = model.encode_tokens(&utt.tokens)?;
            let streams = root.child(1 + j as u64);
            (0..s.samples)
                .map(|k| {
                    let mut rng = streams.child(k as u64);
                    let latents = match &prior {
                        LoadedPrior::Independent => {
                            let n = match model.config.variant {
                                Variant::Fine => utt.tokens.len(),
                                Variant::Global => 1,
                            };
                            sample_independent(n, model.config.code_dim(), s.scale, &mut rng, codebook.as_ref())?
                        }
                        LoadedPrior::Continuous(p) => p.sample(&enc, &mut rng, codebook.as_ref(), s.scale)?,
                        LoadedPrior::Discrete(p) => p.sample(
                            &enc,
                            &mut rng,
                            codebook.as_ref().expect("discrete prior has a codebook"),
                            s.temperature,
                        )?,
                    };
                    let dec = model.decode(&enc, &latents, None, None)?;
                    Ok(SampleRecord {
                        utterance: utt.id.clone(),
                        sample: k as u32,
                        frames: dec.frames,
                        attention: dec.attention,
                        latents: latents.z,
                        indices: latents.indices,
                    })
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let set = SampleSet {
        kind: SetKind::Samples,
        model: cfg.model_label(),
        codebook_size: model.config.codebook_size as u64,
        prior: s.prior.name().into(),
        scale: s.scale,
        temperature: s.temperature,
        config_digest: cfg.digest(),
        records: per_utt.into_iter().flatten().collect(),
    };
    set.save(&file(cfg, out, &cfg.paths.samples))?;
    Ok(format!(
        "{} samples for {} utterances under the {} prior (scale {}, temperature {})",
        set.records.len(),
        order.len(),
        s.prior.name(),
        s.scale,
        s.temperature
    ))
}

/// Posterior-mean reconstructions of every test utterance.
pub fn cmd_copy_synth(cfg: &ExperimentConfig, out: &Path) -> Result<String> {
    let (model, _) = load_stage1(&file(cfg, out, &cfg.paths.stage1))?;
    let test = load_corpus(&file(cfg, out, &cfg.paths.test_corpus), "test corpus")?;
    let codebook = model.codebook();
    let records: Vec<SampleRecord> = test
        .par_iter()
        .map(|u| {
            let (enc, post) = model.infer(&u.tokens, &u.frames)?;
            let latents = match &codebook {
                Some(cb) => LatentSequence::quantize(post.mu, cb)?,
                None => LatentSequence::continuous(post.mu),
            };
            let dec = model.decode(&enc, &latents, None, Some(u.frames.rows))?;
            Ok(SampleRecord {
                utterance: u.id.clone(),
                sample: 0,
                frames: dec.frames,
                attention: dec.attention,
                latents: latents.z,
                indices: latents.indices,
            })
        })
        .collect::<Result<_>>()?;
    let set = SampleSet {
        kind: SetKind::CopySynthesis,
        model: cfg.model_label(),
        codebook_size: model.config.codebook_size as u64,
        prior: "posterior-mean".into(),
        scale: 0.0,
        temperature: 0.0,
        config_digest: cfg.digest(),
        records,
    };
    set.save(&file(cfg, out, &cfg.paths.reconstructions))?;
    Ok(format!("{} copy-synthesis reconstructions", set.records.len()))
}

/// FFE and MCD of one reconstruction against its reference utterance.
pub fn reconstruction_metrics(
    audio: &AudioConfig,
    reference: &Utterance,
    frames: &Mat,
    include_c0: bool,
    rng: &mut RngStream,
) -> Result<(f64, f64)> {
    if frames.shape() != reference.frames.shape() {
        return Err(Error::dim(format!(
            "reconstruction of {} has shape {:?}, reference {:?}",
            reference.id,
            frames.shape(),
            reference.frames.shape()
        )));
    }
    let clipped = frames.map(|v| v.max(0.0));
    let ref_pitch = audio.pitch_of_wave(&reference.waveform)?;
    let est_pitch = audio.pitch_of_frames(&clipped, rng)?;
    let f = ffe(&ref_pitch, &est_pitch)?;
    let m = mcd(
        &crate::metrics::mfcc(&reference.frames, &audio.mfcc())?,
        &crate::metrics::mfcc(&clipped, &audio.mfcc())?,
        include_c0,
    )?;
    Ok((f, m))
}

/// Per-token prosody spread across the samples of one utterance. Every
/// sample is resynthesized with the same phase seed, so identical samples
/// measure identically.
pub fn utterance_diversity(audio: &AudioConfig, samples: &[(&Mat, &Mat)], rng: &RngStream) -> Result<DiversityStats> {
    let measured: Vec<_> = samples
        .iter()
        .map(|(frames, attention)| {
            let clipped = frames.map(|v| v.max(0.0));
            let pitch = audio.pitch_of_frames(&clipped, &mut rng.clone())?;
            phoneme_prosody(&clipped, attention, &pitch, audio.hop_ms())
        })
        .collect::<Result<_>>()?;
    diversity_stats(&measured)
}

fn evaluate_set(
    cfg: &ExperimentConfig,
    set: &SampleSet,
    refs: &BTreeMap<&str, &Utterance>,
    include_c0: bool,
) -> Result<MetricSet> {
    if set.records.is_empty() {
        return Err(Error::Data(format!(
            "{} set has no records to evaluate",
            set.kind.name()
        )));
    }
    for r in &set.records {
        if !refs.contains_key(r.utterance.as_str()) {
            return Err(Error::Data(format!(
                "no reference utterance {:?} in the test corpus",
                r.utterance
            )));
        }
    }
    let audio = cfg.audio();
    let root = RngStream::new(cfg.seed_for(SeedPurpose::Eval));
    let mut header = vec![
        ("model", set.model.clone()),
        ("codebook_size", set.codebook_size.to_string()),
        ("digest", set.config_digest.clone()),
    ];
    match set.kind {
        SetKind::CopySynthesis => {
            header.push(("kind", "reconstruction".into()));
            header.push(("mcd_c0", include_c0.to_string()));
            header.push(("fields", "utt,ffe,mcd".into()));
            let rows: Vec<(f64, f64)> = set
                .records
                .par_iter()
                .enumerate()
                .map(|(i, r)| {
                    reconstruction_metrics(
                        &audio,
                        refs[r.utterance.as_str()],
                        &r.frames,
                        include_c0,
                        &mut root.child(i as u64),
                    )
                })
                .collect::<Result<_>>()?;
            let mut m = MetricSet::new(&header);
            for (r, (f, c)) in set.records.iter().zip(&rows) {
                m.push(vec![
                    ("utt".into(), r.utterance.clone()),
                    ("ffe".into(), fmt_f64(*f)),
                    ("mcd".into(), fmt_f64(*c)),
                ]);
            }
            let n = rows.len() as f64;
            m.push(vec![
                ("mean".into(), String::new()),
                ("ffe".into(), fmt_f64(rows.iter().map(|r| r.0).sum::<f64>() / n)),
                ("mcd".into(), fmt_f64(rows.iter().map(|r| r.1).sum::<f64>() / n)),
            ]);
            Ok(m)
        }
        SetKind::Samples => {
            header.push(("kind", "diversity".into()));
            header.push(("prior", set.prior.clone()));
            header.push(("scale", set.scale.to_string()));
            header.push(("temperature", set.temperature.to_string()));
            header.push(("f0", "voiced-only".into()));
            header.push(("fields", "utt,samples,energy,f0,duration".into()));
            let mut groups: Vec<(&str, Vec<(usize, &SampleRecord)>)> = Vec::new();
            for (i, r) in set.records.iter().enumerate() {
                match groups.last_mut() {
                    Some((id, g)) if *id == r.utterance => g.push((i, r)),
                    _ => groups.push((&r.utterance, vec![(i, r)])),
                }
            }
            let stats: Vec<_> = groups
                .par_iter()
                .enumerate()
                .map(|(j, (_, g))| {
                    let samples: Vec<(&Mat, &Mat)> = g.iter().map(|(_, r)| (&r.frames, &r.attention)).collect();
                    utterance_diversity(&audio, &samples, &root.child(j as u64))
                })
                .collect::<Result<_>>()?;
            let mut m = MetricSet::new(&header);
            for ((id, g), s) in groups.iter().zip(&stats) {
                m.push(vec![
                    ("utt".into(), id.to_string()),
                    ("samples".into(), g.len().to_string()),
                    ("energy".into(), fmt_f64(s.energy)),
                    ("f0".into(), fmt_f64(s.f0)),
                    ("duration".into(), fmt_f64(s.duration_ms)),
                ]);
            }
            let n = stats.len() as f64;
            m.push(vec![
                ("mean".into(), String::new()),
                (
                    "energy".into(),
                    fmt_f64(stats.iter().map(|s| s.energy).sum::<f64>() / n),
                ),
                ("f0".into(), fmt_f64(stats.iter().map(|s| s.f0).sum::<f64>() / n)),
                (
                    "duration".into(),
                    fmt_f64(stats.iter().map(|s| s.duration_ms).sum::<f64>() / n),
                ),
            ]);
            Ok(m)
        }
    }
}

/// Evaluates sample sets into metric records. With no explicit inputs, every
/// sample or reconstruction set present in the output directory is used.
pub fn cmd_evaluate(cfg: &ExperimentConfig, out: &Path, inputs: &[PathBuf], include_c0: bool) -> Result<String> {
    let inputs: Vec<PathBuf> = if inputs.is_empty() {
        [&cfg.paths.reconstructions, &cfg.paths.samples]
            .iter()
            .map(|n| file(cfg, out, n))
            .filter(|p| p.is_file())
            .collect()
    } else {
        inputs.to_vec()
    };
    if inputs.is_empty() {
        return Err(Error::Data(format!(
            "no sample or reconstruction sets in {}",
            out.display()
        )));
    }
    let test = load_corpus(&file(cfg, out, &cfg.paths.test_corpus), "test corpus")?;
    let refs: BTreeMap<&str, &Utterance> = test.iter().map(|u| (u.id.as_str(), u)).collect();
    let include_c0 = include_c0 || cfg.eval.mcd_include_c0;
    let mut summary = String::new();
    for path in &inputs {
        require(path, "sample set")?;
        let set = SampleSet::load(path)?;
        let metrics = evaluate_set(cfg, &set, &refs, include_c0)?;
        let name = match set.kind {
            SetKind::CopySynthesis => &cfg.paths.reconstruction_metrics,
            SetKind::Samples => &cfg.paths.sample_metrics,
        };
        let dest = file(cfg, out, name);
        fs::write(&dest, metrics.render())?;
        let mean = metrics.mean_row().map(|r| {
            r[1..]
                .iter()
                .map(|(k, v)| format!("{k}={v}"))
                .collect::<Vec<_>>()
                .join(" ")
        });
        let _ = writeln!(
            summary,
            "{}: {} records, mean {} -> {}",
            path.display(),
            set.records.len(),
            mean.unwrap_or_default(),
            dest.display()
        );
    }
    Ok(summary.trim_end().to_string())
}

/// Renders report tables from metric record files; with no inputs, the
/// metric files present in the output directory.
pub fn cmd_report(cfg: &ExperimentConfig, out: &Path, inputs: &[PathBuf]) -> Result<String> {
    let inputs: Vec<PathBuf> = if inputs.is_empty() {
        [&cfg.paths.reconstruction_metrics, &cfg.paths.sample_metrics]
            .iter()
            .map(|n| file(cfg, out, n))
            .filter(|p| p.is_file())
            .collect()
    } else {
        inputs.to_vec()
    };
    let sets = inputs
        .iter()
        .map(|p| {
            require(p, "metric records")?;
            MetricSet::load(p)
        })
        .collect::<Result<Vec<_>>>()?;
    let text = render_report(&sets)?;
    fs::create_dir_all(out)?;
    let mut f = fs::File::create(file(cfg, out, &cfg.paths.report))?;
    f.write_all(text.as_bytes())?;
    Ok(text.trim_end().to_string())
}
