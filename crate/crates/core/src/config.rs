//! Experiment configuration loaded from TOML.
//!
//! Every section is optional and unknown keys are rejected. Dotted keys work
//! as usual:
//!
//! ```toml
//! seed = 7
//! model.codebook_size = 32
//! sampling.scale = 0.2
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::CorpusSpec;
use crate::error::{Error, Result};
use crate::metrics::AudioConfig;
use crate::model::{ModelConfig, TrainConfig};
use crate::numerics::derive_seed;
use crate::priors::{PriorConfig, PriorKind};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub train_count: usize,
    pub test_count: usize,
    pub vocab_size: usize,
    pub min_tokens: usize,
    pub max_tokens: usize,
    pub f0_min: f64,
    pub f0_max: f64,
    pub min_duration: usize,
    pub max_duration: usize,
    pub energy_min: f64,
    pub energy_max: f64,
    pub prosody_correlation: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        let s = CorpusSpec::default();
        CorpusConfig {
            train_count: 64,
            test_count: 16,
            vocab_size: s.vocab_size,
            min_tokens: s.min_tokens,
            max_tokens: s.max_tokens,
            f0_min: s.f0_min,
            f0_max: s.f0_max,
            min_duration: s.min_duration,
            max_duration: s.max_duration,
            energy_min: s.energy_min,
            energy_max: s.energy_max,
            prosody_correlation: s.prosody_correlation,
        }
    }
}

impl CorpusConfig {
    pub fn spec(&self, seed: u64, audio: AudioConfig) -> CorpusSpec {
        CorpusSpec {
            count: self.train_count + self.test_count,
            vocab_size: self.vocab_size,
            min_tokens: self.min_tokens,
            max_tokens: self.max_tokens,
            f0_min: self.f0_min,
            f0_max: self.f0_max,
            min_duration: self.min_duration,
            max_duration: self.max_duration,
            energy_min: self.energy_min,
            energy_max: self.energy_max,
            prosody_correlation: self.prosody_correlation,
            seed,
            audio,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingConfig {
    pub prior: PriorKind,
    /// Stddev multiplier: the prior scale for independent sampling, applied
    /// to the predicted stddev for the continuous AR prior.
    pub scale: f64,
    pub samples: usize,
    /// Test utterances drawn at random for sampling.
    pub utterances: usize,
    /// Discrete prior softmax temperature; 0 is greedy.
    pub temperature: f64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig {
            prior: PriorKind::Independent,
            scale: 1.0,
            samples: 100,
            utterances: 3,
            temperature: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub mcd_include_c0: bool,
    pub griffin_lim_iterations: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            mcd_include_c0: false,
            griffin_lim_iterations: 32,
        }
    }
}

/// File names inside the output directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub train_corpus: String,
    pub test_corpus: String,
    pub stage1: String,
    pub prior: String,
    pub train_log: String,
    pub prior_log: String,
    pub samples: String,
    pub reconstructions: String,
    pub sample_metrics: String,
    pub reconstruction_metrics: String,
    pub report: String,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            train_corpus: "train.qfvc".into(),
            test_corpus: "test.qfvc".into(),
            stage1: "stage1.qfvk".into(),
            prior: "prior.qfvk".into(),
            train_log: "train_log.txt".into(),
            prior_log: "prior_log.txt".into(),
            samples: "samples.qfvs".into(),
            reconstructions: "copy_synth.qfvs".into(),
            sample_metrics: "sample_metrics.txt".into(),
            reconstruction_metrics: "copy_synth_metrics.txt".into(),
            report: "report.txt".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub corpus: CorpusConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub prior: PriorConfig,
    pub sampling: SamplingConfig,
    pub eval: EvalConfig,
    pub paths: PathsConfig,
}

/// Sub-streams of the experiment seed.
#[derive(Clone, Copy, Debug)]
pub enum SeedPurpose {
    Corpus = 1,
    Train = 2,
    Prior = 3,
    Sample = 4,
    Eval = 5,
    Split = 6,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Short hex digest of the canonical serialization.
    pub fn digest(&self) -> String {
        let hash = Sha256::digest(self.to_toml().as_bytes());
        hash.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.prior.validate()?;
        if self.corpus.train_count == 0 || self.corpus.test_count == 0 {
            return Err(Error::Config(
                "corpus.train_count and corpus.test_count must be positive".into(),
            ));
        }
        if self.corpus.vocab_size != self.model.vocab_size {
            return Err(Error::Config(format!(
                "corpus.vocab_size {} differs from model.vocab_size {}",
                self.corpus.vocab_size, self.model.vocab_size
            )));
        }
        if !(self.sampling.scale >= 0.0) || !self.sampling.scale.is_finite() {
            return Err(Error::Config(format!(
                "sampling.scale must be non-negative, got {}",
                self.sampling.scale
            )));
        }
        if !(self.sampling.temperature >= 0.0) || !self.sampling.temperature.is_finite() {
            return Err(Error::Config("sampling.temperature must be non-negative".into()));
        }
        if self.sampling.samples == 0 || self.sampling.utterances == 0 {
            return Err(Error::Config(
                "sampling.samples and sampling.utterances must be positive".into(),
            ));
        }
        if self.eval.griffin_lim_iterations == 0 {
            return Err(Error::Config("eval.griffin_lim_iterations must be positive".into()));
        }
        let names = [
            &self.paths.train_corpus,
            &self.paths.test_corpus,
            &self.paths.stage1,
            &self.paths.prior,
            &self.paths.train_log,
            &self.paths.prior_log,
            &self.paths.samples,
            &self.paths.reconstructions,
            &self.paths.sample_metrics,
            &self.paths.reconstruction_metrics,
            &self.paths.report,
        ];
        if let Some(bad) = names
            .iter()
            .find(|n| n.is_empty() || Path::new(n.as_str()).is_absolute())
        {
            return Err(Error::Config(format!(
                "path {bad:?} must be a non-empty relative file name"
            )));
        }
        Ok(())
    }

    pub fn audio(&self) -> AudioConfig {
        AudioConfig {
            bins: self.model.frame_bins,
            griffin_lim_iterations: self.eval.griffin_lim_iterations,
            ..AudioConfig::default()
        }
    }

    pub fn seed_for(&self, purpose: SeedPurpose) -> u64 {
        derive_seed(self.seed, purpose as u64)
    }

    pub fn path(&self, out: &Path, name: &str) -> PathBuf {
        out.join(name)
    }

    /// Model label used in reports.
    pub fn model_label(&self) -> String {
        match (self.model.variant, self.model.codebook_size) {
            (crate::model::Variant::Global, _) => "global".into(),
            (_, 0) => "baseline".into(),
            (_, k) => format!("qfvae-k{k}"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dotted_keys_and_defaults() {
        let c = ExperimentConfig::from_toml("seed = 3\nmodel.codebook_size = 32\n[sampling]\nscale = 0.2\n").unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.model.codebook_size, 32);
        assert_eq!(c.sampling.scale, 0.2);
        assert_eq!(c.train, TrainConfig::default());
        assert_eq!(c.model_label(), "qfvae-k32");
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(matches!(
            ExperimentConfig::from_toml("model.codebok_size = 3"),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            ExperimentConfig::from_toml("colour = 1"),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            ExperimentConfig::from_toml("sampling.scale = -1.0"),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn round_trip_and_digest() {
        let c = ExperimentConfig::from_toml("sampling.prior = \"ar-discrete\"\nmodel.codebook_size = 8").unwrap();
        let back = ExperimentConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(c, back);
        assert_eq!(c.digest(), back.digest());
        assert_ne!(c.digest(), ExperimentConfig::default().digest());
    }
}
