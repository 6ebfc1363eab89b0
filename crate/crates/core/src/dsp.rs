//! Waveform front end: pre-emphasis, Hann-windowed STFT, HTK mel filterbank and
//! natural-log compression, plus mel-cepstral distortion between aligned sequences.

use std::f64::consts::PI;
use std::path::Path;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::{Error, FeatureKind, FeatureSequence, Result};

/// Mel energies are clamped to this value before taking the log.
pub const LOG_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct WaveformBuffer {
    samples: Vec<f64>,
    sample_rate_hz: u32,
}

impl WaveformBuffer {
    pub fn new(samples: Vec<f64>, sample_rate_hz: u32) -> Result<Self> {
        if sample_rate_hz == 0 {
            return Err(Error::InvalidInput("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::InvalidInput(format!("non-finite sample at index {i}")));
        }
        Ok(Self { samples, sample_rate_hz })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate_hz(&self) -> u32 {
        self.sample_rate_hz
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Reads a mono PCM WAV file (16-bit integer or 32-bit float).
pub fn read_wav(path: impl AsRef<Path>) -> Result<WaveformBuffer> {
    let mut reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::InvalidInput(format!("expected mono audio, got {} channels", spec.channels)));
    }
    let samples = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| f64::from(v) / 32768.0))
            .collect::<std::result::Result<Vec<_>, _>>()?,
        (hound::SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<std::result::Result<Vec<_>, _>>()?,
        (format, bits) => {
            return Err(Error::InvalidInput(format!("unsupported sample format {format:?} with {bits} bits")))
        }
    };
    WaveformBuffer::new(samples, spec.sample_rate)
}

pub fn pre_emphasize(w: &WaveformBuffer, coeff: f64) -> Result<WaveformBuffer> {
    if !(0.0..1.0).contains(&coeff) {
        return Err(Error::InvalidArgument(format!("pre-emphasis coefficient {coeff} not in [0, 1)")));
    }
    let s = &w.samples;
    let mut out = Vec::with_capacity(s.len());
    if let Some(&first) = s.first() {
        out.push(first);
    }
    out.extend(s.windows(2).map(|p| p[1] - coeff * p[0]));
    WaveformBuffer::new(out, w.sample_rate_hz)
}

#[derive(Debug, Clone, PartialEq)]
pub struct StftParams {
    pub window_length_ms: f64,
    pub frame_shift_ms: f64,
    pub fft_size: usize,
    pub pre_emphasis: f64,
    pub n_mels: usize,
    pub fmin_hz: f64,
    pub fmax_hz: f64,
}

impl Default for StftParams {
    /// 50 ms Hann window, 12.5 ms shift, 2048-point FFT, 0.97 pre-emphasis, 80 mel bands
    /// over 20 Hz to 8 kHz.
    fn default() -> Self {
        Self {
            window_length_ms: 50.0,
            frame_shift_ms: 12.5,
            fft_size: 2048,
            pre_emphasis: 0.97,
            n_mels: 80,
            fmin_hz: 20.0,
            fmax_hz: 8000.0,
        }
    }
}

impl StftParams {
    pub fn window_samples(&self, sample_rate_hz: u32) -> usize {
        (self.window_length_ms * f64::from(sample_rate_hz) / 1000.0).round() as usize
    }

    pub fn hop_samples(&self, sample_rate_hz: u32) -> usize {
        (self.frame_shift_ms * f64::from(sample_rate_hz) / 1000.0).round() as usize
    }

    /// Checks every constraint for the given sample rate. The error names the field.
    pub fn validate(&self, sample_rate_hz: u32) -> Result<()> {
        let fail = |field: &str, msg: String| Err(Error::Config(format!("stft.{field}: {msg}")));
        if !(self.window_length_ms.is_finite() && self.window_length_ms > 0.0) {
            return fail("window_length_ms", format!("must be positive, got {}", self.window_length_ms));
        }
        if !(self.frame_shift_ms.is_finite() && self.frame_shift_ms > 0.0) {
            return fail("frame_shift_ms", format!("must be positive, got {}", self.frame_shift_ms));
        }
        if self.frame_shift_ms > self.window_length_ms {
            return fail("frame_shift_ms", "must not exceed window_length_ms".into());
        }
        if sample_rate_hz == 0 {
            return fail("sample_rate_hz", "must be positive".into());
        }
        if self.hop_samples(sample_rate_hz) == 0 {
            return fail("frame_shift_ms", "shorter than one sample".into());
        }
        if !self.fft_size.is_power_of_two() {
            return fail("fft_size", format!("{} is not a power of two", self.fft_size));
        }
        if self.fft_size < self.window_samples(sample_rate_hz) {
            return fail("fft_size", format!("{} is shorter than the window", self.fft_size));
        }
        if !(0.0..1.0).contains(&self.pre_emphasis) {
            return fail("pre_emphasis", format!("{} not in [0, 1)", self.pre_emphasis));
        }
        if self.n_mels == 0 {
            return fail("n_mels", "must be positive".into());
        }
        if !(self.fmin_hz.is_finite() && self.fmin_hz > 0.0) {
            return fail("fmin_hz", format!("must be positive, got {}", self.fmin_hz));
        }
        let nyquist = f64::from(sample_rate_hz) / 2.0;
        if !(self.fmax_hz.is_finite() && self.fmax_hz > self.fmin_hz && self.fmax_hz <= nyquist) {
            return fail("fmax_hz", format!("must lie in (fmin_hz, {nyquist}], got {}", self.fmax_hz));
        }
        Ok(())
    }
}

/// Frames produced for a signal of `len` samples: zero when shorter than one window,
/// `ceil(len / hop)` otherwise.
pub fn num_frames(len: usize, window: usize, hop: usize) -> usize {
    if len < window || len == 0 {
        0
    } else {
        len.div_ceil(hop)
    }
}

/// Periodic Hann window.
pub fn hann_window(n: usize) -> Vec<f64> {
    (0..n).map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos()).collect()
}

fn reflect(mut idx: isize, len: usize) -> usize {
    let last = len as isize - 1;
    if last == 0 {
        return 0;
    }
    loop {
        if idx < 0 {
            idx = -idx;
        } else if idx > last {
            idx = 2 * last - idx;
        } else {
            return idx as usize;
        }
    }
}

/// Centered analysis frame `t`: `window` samples starting at `t * hop - window / 2`,
/// reflect-padded at both ends.
pub fn analysis_frame(samples: &[f64], t: usize, window: usize, hop: usize) -> Vec<f64> {
    let start = (t * hop) as isize - (window / 2) as isize;
    (0..window).map(|i| samples[reflect(start + i as isize, samples.len())]).collect()
}

/// Magnitude STFT: one `fft_size / 2 + 1` row per frame. No pre-emphasis is applied here.
pub fn stft_magnitude(samples: &[f64], sample_rate_hz: u32, p: &StftParams) -> Result<Vec<Vec<f64>>> {
    p.validate(sample_rate_hz)?;
    let window = p.window_samples(sample_rate_hz);
    let hop = p.hop_samples(sample_rate_hz);
    let frames = num_frames(samples.len(), window, hop);
    let hann = hann_window(window);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(p.fft_size);
    let bins = p.fft_size / 2 + 1;
    let mut buf = vec![Complex::new(0.0, 0.0); p.fft_size];
    let mut out = Vec::with_capacity(frames);
    for t in 0..frames {
        buf.fill(Complex::new(0.0, 0.0));
        for (i, (x, w)) in analysis_frame(samples, t, window, hop).iter().zip(&hann).enumerate() {
            buf[i].re = x * w;
        }
        fft.process(&mut buf);
        out.push(buf[..bins].iter().map(|c| c.norm()).collect());
    }
    Ok(out)
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular HTK-scale filters, `n_mels` rows of `fft_size / 2 + 1` weights (peak 1).
pub fn mel_filterbank(n_mels: usize, fft_size: usize, sample_rate_hz: u32, fmin_hz: f64, fmax_hz: f64) -> Vec<Vec<f64>> {
    let bins = fft_size / 2 + 1;
    let (lo, hi) = (hz_to_mel(fmin_hz), hz_to_mel(fmax_hz));
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n_mels + 1) as f64))
        .collect();
    let bin_hz = f64::from(sample_rate_hz) / fft_size as f64;
    (0..n_mels)
        .map(|m| {
            let (left, center, right) = (edges[m], edges[m + 1], edges[m + 2]);
            (0..bins)
                .map(|k| {
                    let f = k as f64 * bin_hz;
                    let up = (f - left) / (center - left);
                    let down = (right - f) / (right - center);
                    up.min(down).max(0.0)
                })
                .collect()
        })
        .collect()
}

/// Compression applied to mel energies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MelScale {
    #[default]
    Log,
    Linear,
}

pub fn mel_spectrogram(w: &WaveformBuffer, p: &StftParams, scale: MelScale) -> Result<FeatureSequence> {
    p.validate(w.sample_rate_hz)?;
    let emphasized = pre_emphasize(w, p.pre_emphasis)?;
    let spec = stft_magnitude(emphasized.samples(), w.sample_rate_hz, p)?;
    let bank = mel_filterbank(p.n_mels, p.fft_size, w.sample_rate_hz, p.fmin_hz, p.fmax_hz);
    let mut data = Vec::with_capacity(spec.len() * p.n_mels);
    for frame in &spec {
        for filter in &bank {
            let energy: f64 = filter.iter().zip(frame).map(|(a, b)| a * b).sum();
            data.push(match scale {
                MelScale::Log => energy.max(LOG_FLOOR).ln(),
                MelScale::Linear => energy,
            });
        }
    }
    FeatureSequence::new(data, p.n_mels, p.frame_shift_ms, FeatureKind::Mel)
}

pub fn log_mel_spectrogram(w: &WaveformBuffer, p: &StftParams) -> Result<FeatureSequence> {
    mel_spectrogram(w, p, MelScale::Log)
}

/// Mean over aligned frames of `(10 / ln 10) * sqrt(2 * sum_d (a_d - b_d)^2)`, skipping
/// coefficient 0.
pub fn mel_cepstral_distortion(a: &FeatureSequence, b: &FeatureSequence) -> Result<f64> {
    a.same_shape(b, "mel cepstral distortion")?;
    if a.is_empty() {
        return Err(Error::InvalidInput("mel cepstral distortion of empty sequences".into()));
    }
    let k = 10.0 / std::f64::consts::LN_10;
    let total: f64 = a
        .frames()
        .zip(b.frames())
        .map(|(fa, fb)| {
            let sq: f64 = fa[1..].iter().zip(&fb[1..]).map(|(x, y)| (x - y) * (x - y)).sum();
            k * (2.0 * sq).sqrt()
        })
        .sum();
    Ok(total / a.len() as f64)
}
