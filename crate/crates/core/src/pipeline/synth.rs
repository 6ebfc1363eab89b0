//! Synthetic corpora with known ground truth.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::{StftConfig, SyntheticSpec};
use crate::dsp::{log_mel_spectrogram, WaveformBuffer};
use crate::{Error, FeatureKind, FeatureSequence, Result};

/// Minimum pairwise L2 distance between generated cluster centers.
pub const MIN_CENTER_DISTANCE: f64 = 1.0;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub utterances: Vec<FeatureSequence>,
    /// Per-utterance cluster label of every frame; empty in sine mode.
    pub labels: Vec<Vec<usize>>,
    /// One row per cluster; `None` in sine mode.
    pub centers: Option<FeatureSequence>,
}

impl SyntheticCorpus {
    pub fn total_frames(&self) -> usize {
        self.utterances.iter().map(FeatureSequence::len).sum()
    }

    /// All frames of all utterances, row-major.
    pub fn stacked(&self) -> Vec<f64> {
        self.utterances.iter().flat_map(|u| u.as_slice().iter().copied()).collect()
    }
}

/// Gaussian-mixture corpus at a 12.5 ms frame shift, or log-mel frames of tone mixtures
/// when `spec.sine` is set.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<SyntheticCorpus> {
    gen_synthetic_with(spec, &StftConfig::default())
}

pub fn gen_synthetic_with(spec: &SyntheticSpec, stft: &StftConfig) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    if spec.sine.is_some() {
        return gen_sine(spec, stft, &mut rng);
    }
    let centers = sample_centers(spec.num_clusters, spec.dim, &mut rng)?;
    let noise = Normal::new(0.0, spec.cluster_std).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut utterances = Vec::with_capacity(spec.num_utterances);
    let mut labels = Vec::with_capacity(spec.num_utterances);
    for _ in 0..spec.num_utterances {
        let mut data = Vec::with_capacity(spec.frames_per_utterance * spec.dim);
        let mut lab = Vec::with_capacity(spec.frames_per_utterance);
        for _ in 0..spec.frames_per_utterance {
            let c = rng.random_range(0..spec.num_clusters);
            lab.push(c);
            let center = &centers[c * spec.dim..(c + 1) * spec.dim];
            if spec.cluster_std == 0.0 {
                data.extend_from_slice(center);
            } else {
                data.extend(center.iter().map(|m| m + noise.sample(&mut rng)));
            }
        }
        utterances.push(FeatureSequence::new(data, spec.dim, stft.frame_shift_ms, FeatureKind::Upstream)?);
        labels.push(lab);
    }
    let centers = FeatureSequence::new(centers, spec.dim, stft.frame_shift_ms, FeatureKind::Upstream)?;
    Ok(SyntheticCorpus { utterances, labels, centers: Some(centers) })
}

/// Rejection sampling in a cube that widens whenever sampling stalls.
fn sample_centers(k: usize, dim: usize, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    let mut half_width = 1.0_f64.max(k as f64 / (dim as f64).sqrt());
    let mut centers: Vec<f64> = Vec::with_capacity(k * dim);
    let mut stalled = 0;
    while centers.len() < k * dim {
        let cand: Vec<f64> = (0..dim).map(|_| rng.random_range(-half_width..half_width)).collect();
        let ok = centers.chunks_exact(dim).all(|c| {
            c.iter().zip(&cand).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() >= MIN_CENTER_DISTANCE * MIN_CENTER_DISTANCE
        });
        if ok {
            centers.extend(cand);
            stalled = 0;
        } else {
            stalled += 1;
            if stalled == 1000 {
                half_width *= 2.0;
                stalled = 0;
            }
        }
    }
    Ok(centers)
}

fn gen_sine(spec: &SyntheticSpec, stft: &StftConfig, rng: &mut ChaCha8Rng) -> Result<SyntheticCorpus> {
    let sine = spec.sine.as_ref().expect("sine mode");
    let params = stft.params();
    let sr = stft.sample_rate_hz;
    let hop = params.hop_samples(sr);
    let n = spec.frames_per_utterance * hop;
    let noise = Normal::new(0.0, spec.cluster_std).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut utterances = Vec::with_capacity(spec.num_utterances);
    for _ in 0..spec.num_utterances {
        let phases: Vec<f64> = sine.frequencies_hz.iter().map(|_| rng.random_range(0.0..std::f64::consts::TAU)).collect();
        let samples = (0..n)
            .map(|i| {
                let t = i as f64 / f64::from(sr);
                let tone: f64 = sine
                    .frequencies_hz
                    .iter()
                    .zip(&sine.amplitudes)
                    .zip(&phases)
                    .map(|((f, a), p)| a * (std::f64::consts::TAU * f * t + p).sin())
                    .sum();
                tone + if spec.cluster_std > 0.0 { noise.sample(rng) } else { 0.0 }
            })
            .collect();
        let feats = log_mel_spectrogram(&WaveformBuffer::new(samples, sr)?, &params)?;
        utterances.push(feats.with_kind(FeatureKind::Mel));
    }
    Ok(SyntheticCorpus { utterances, labels: Vec::new(), centers: None })
}
