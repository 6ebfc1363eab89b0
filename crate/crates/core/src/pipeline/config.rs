//! TOML pipeline configuration.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::associate::DEFAULT_ASSOCIATE_CODEWORDS;
use crate::dsp::StftParams;
use crate::losses::LossWeights;
use crate::mhvq::{TrainOptions, DEFAULT_DECAY, DEFAULT_SMOOTHING_EPS};
use crate::msmc::{StageConfig, StageSpec, DEFAULT_RIDGE_LAMBDA};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StftConfig {
    pub sample_rate_hz: u32,
    pub window_length_ms: f64,
    pub frame_shift_ms: f64,
    pub fft_size: usize,
    pub pre_emphasis: f64,
    pub n_mels: usize,
    pub fmin_hz: f64,
    pub fmax_hz: f64,
}

impl Default for StftConfig {
    fn default() -> Self {
        let p = StftParams::default();
        Self {
            sample_rate_hz: 16_000,
            window_length_ms: p.window_length_ms,
            frame_shift_ms: p.frame_shift_ms,
            fft_size: p.fft_size,
            pre_emphasis: p.pre_emphasis,
            n_mels: p.n_mels,
            fmin_hz: p.fmin_hz,
            fmax_hz: p.fmax_hz,
        }
    }
}

impl StftConfig {
    pub fn params(&self) -> StftParams {
        StftParams {
            window_length_ms: self.window_length_ms,
            frame_shift_ms: self.frame_shift_ms,
            fft_size: self.fft_size,
            pre_emphasis: self.pre_emphasis,
            n_mels: self.n_mels,
            fmin_hz: self.fmin_hz,
            fmax_hz: self.fmax_hz,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmaConfig {
    pub decay: f64,
    pub smoothing_eps: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub reseed_dead: bool,
}

impl Default for EmaConfig {
    fn default() -> Self {
        let t = TrainOptions::default();
        Self {
            decay: DEFAULT_DECAY,
            smoothing_eps: DEFAULT_SMOOTHING_EPS,
            epochs: t.epochs,
            batch_size: t.batch_size,
            reseed_dead: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AssociateConfig {
    pub codebook_size: usize,
    pub lambda_rec: f64,
    pub teacher_forcing: bool,
}

impl Default for AssociateConfig {
    fn default() -> Self {
        Self { codebook_size: DEFAULT_ASSOCIATE_CODEWORDS, lambda_rec: 1.0, teacher_forcing: true }
    }
}

/// Sine-feature mode: each utterance is a sum of tones turned into log-mel frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SineConfig {
    pub frequencies_hz: Vec<f64>,
    pub amplitudes: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub num_clusters: usize,
    pub cluster_std: f64,
    pub dim: usize,
    pub frames_per_utterance: usize,
    pub num_utterances: usize,
    pub seed: u64,
    pub sine: Option<SineConfig>,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_clusters: 8,
            cluster_std: 0.01,
            dim: 256,
            frames_per_utterance: 80,
            num_utterances: 50,
            seed: 0,
            sine: None,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        self.collect_errors("synthetic", &mut errs);
        join(errs)
    }

    fn collect_errors(&self, p: &str, errs: &mut Vec<String>) {
        positive(errs, p, "num_clusters", self.num_clusters);
        positive(errs, p, "dim", self.dim);
        positive(errs, p, "frames_per_utterance", self.frames_per_utterance);
        positive(errs, p, "num_utterances", self.num_utterances);
        if !(self.cluster_std.is_finite() && self.cluster_std >= 0.0) {
            errs.push(format!("{p}.cluster_std: must be finite and >= 0, got {}", self.cluster_std));
        }
        if let Some(s) = &self.sine {
            if s.frequencies_hz.is_empty() {
                errs.push(format!("{p}.sine.frequencies_hz: must not be empty"));
            }
            if s.frequencies_hz.len() != s.amplitudes.len() {
                errs.push(format!(
                    "{p}.sine.amplitudes: {} amplitudes for {} frequencies",
                    s.amplitudes.len(),
                    s.frequencies_hz.len()
                ));
            }
            if s.frequencies_hz.iter().any(|f| !(f.is_finite() && *f > 0.0)) {
                errs.push(format!("{p}.sine.frequencies_hz: every frequency must be positive"));
            }
            if s.amplitudes.iter().any(|a| !a.is_finite()) {
                errs.push(format!("{p}.sine.amplitudes: every amplitude must be finite"));
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub ridge_lambda: f64,
    pub stft: StftConfig,
    pub stages: Vec<StageSpec>,
    pub ema: EmaConfig,
    pub loss_weights: LossWeights,
    pub associate: AssociateConfig,
    pub synthetic: Option<SyntheticSpec>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            ridge_lambda: DEFAULT_RIDGE_LAMBDA,
            stft: StftConfig::default(),
            stages: StageConfig::default().stages().to_vec(),
            ema: EmaConfig::default(),
            loss_weights: LossWeights::default(),
            associate: AssociateConfig::default(),
            synthetic: None,
        }
    }
}

fn positive(errs: &mut Vec<String>, prefix: &str, field: &str, v: usize) {
    if v == 0 {
        errs.push(format!("{prefix}.{field}: must be positive"));
    }
}

fn join(errs: Vec<String>) -> Result<()> {
    if errs.is_empty() {
        Ok(())
    } else {
        Err(Error::Config(errs.join("; ")))
    }
}

impl PipelineConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string().trim_end().replace('\n', " ")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Checks every field and reports all violations at once, each prefixed by its path.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if !(self.ridge_lambda.is_finite() && self.ridge_lambda >= 0.0) {
            errs.push(format!("ridge_lambda: must be finite and >= 0, got {}", self.ridge_lambda));
        }
        if self.stft.sample_rate_hz == 0 {
            errs.push("stft.sample_rate_hz: must be positive".into());
        } else if let Err(e) = self.stft.params().validate(self.stft.sample_rate_hz) {
            errs.push(strip_config(e));
        }
        if let Err(e) = crate::msmc::validate_stages(&self.stages) {
            errs.push(strip_config(e));
        }
        let e = &self.ema;
        if !(e.decay.is_finite() && (0.0..1.0).contains(&e.decay)) {
            errs.push(format!("ema.decay: must lie in [0, 1), got {}", e.decay));
        }
        if !(e.smoothing_eps.is_finite() && e.smoothing_eps > 0.0) {
            errs.push(format!("ema.smoothing_eps: must be positive, got {}", e.smoothing_eps));
        }
        positive(&mut errs, "ema", "batch_size", e.batch_size);
        if let Err(err) = self.loss_weights.validate() {
            errs.push(strip_config(err));
        }
        let a = &self.associate;
        if a.codebook_size < 2 {
            errs.push(format!("associate.codebook_size: must be at least 2, got {}", a.codebook_size));
        }
        if !(a.lambda_rec.is_finite() && a.lambda_rec >= 0.0) {
            errs.push(format!("associate.lambda_rec: must be finite and >= 0, got {}", a.lambda_rec));
        }
        if let Some(s) = &self.synthetic {
            s.collect_errors("synthetic", &mut errs);
        }
        join(errs)
    }

    pub fn stage_config(&self) -> Result<StageConfig> {
        StageConfig::new(self.stages.clone())
    }

    pub fn train_options(&self, spec: &StageSpec, seed: u64) -> TrainOptions {
        TrainOptions {
            heads: spec.heads,
            codewords: spec.codewords,
            epochs: self.ema.epochs,
            decay: self.ema.decay,
            smoothing_eps: self.ema.smoothing_eps,
            batch_size: self.ema.batch_size,
            seed,
            reseed_dead: self.ema.reseed_dead,
        }
    }
}

fn strip_config(e: Error) -> String {
    match e {
        Error::Config(m) => m,
        other => other.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let c = PipelineConfig::default();
        c.validate().unwrap();
        let back = PipelineConfig::from_toml_str(&c.to_toml_string()).unwrap();
        assert_eq!(back, c);
        assert_eq!(c.stage_config().unwrap().bits_per_frame(), 30.0);
    }

    #[test]
    fn empty_document_is_default() {
        assert_eq!(PipelineConfig::from_toml_str("").unwrap(), PipelineConfig::default());
    }

    #[test]
    fn errors_name_fields() {
        let e = PipelineConfig::from_toml_str("[ema]\ndecay = 1.5\n").unwrap_err().to_string();
        assert!(e.contains("ema.decay"), "{e}");
        let e = PipelineConfig::from_toml_str("[associate]\nlambda_rec = -1.0\n").unwrap_err().to_string();
        assert!(e.contains("associate.lambda_rec"), "{e}");
        let e = PipelineConfig::from_toml_str("[stft]\nbogus = 1\n").unwrap_err().to_string();
        assert!(e.contains("bogus"), "{e}");
    }

    #[test]
    fn several_violations_reported_together() {
        let mut c = PipelineConfig::default();
        c.ridge_lambda = -1.0;
        c.ema.batch_size = 0;
        let e = c.validate().unwrap_err().to_string();
        assert!(e.contains("ridge_lambda") && e.contains("ema.batch_size"), "{e}");
    }
}
