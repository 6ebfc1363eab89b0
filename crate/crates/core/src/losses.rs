//! Generator, discriminator, reconstruction and duration losses with analytic gradients.
//!
//! All reductions are means over elements, so values do not scale with sequence length.
//! Gradients are taken only with respect to the generated side (fake scores, fake
//! features, predictions); targets are constants. The L1 subgradient at zero is 0.

use std::fmt;

use crate::{Error, FeatureSequence, Result};

/// Outputs of one sub-discriminator: its score map (flattened) and hidden-layer features.
#[derive(Debug, Clone, PartialEq)]
pub struct SubDiscriminator {
    pub scores: Vec<f64>,
    pub features: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscriminatorOutputs {
    pub subs: Vec<SubDiscriminator>,
}

impl DiscriminatorOutputs {
    fn check_scores(&self, what: &str) -> Result<()> {
        if self.subs.is_empty() {
            return Err(Error::InvalidInput(format!("{what}: no sub-discriminators")));
        }
        if let Some(k) = self.subs.iter().position(|s| s.scores.is_empty()) {
            return Err(Error::InvalidInput(format!("{what}: sub-discriminator {k} has no scores")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub fm: f64,
    pub mel: f64,
    pub vq: f64,
    pub ms: f64,
    pub frame: f64,
    pub rec: f64,
    pub dur: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { fm: 2.0, mel: 45.0, vq: 10.0, ms: 1.0, frame: 450.0, rec: 1.0, dur: 0.1 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("fm", self.fm),
            ("mel", self.mel),
            ("vq", self.vq),
            ("ms", self.ms),
            ("frame", self.frame),
            ("rec", self.rec),
            ("dur", self.dur),
        ];
        for (name, v) in fields {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("loss_weights.{name}: must be finite and nonnegative, got {v}")));
            }
        }
        Ok(())
    }
}

fn mean_sq_to(values: &[f64], target: f64) -> f64 {
    values.iter().map(|v| (v - target) * (v - target)).sum::<f64>() / values.len() as f64
}

/// `(1/K) sum_k [mean (D_k(s) - 1)^2 + mean D_k(s_hat)^2]`, with the gradient with respect
/// to the fake scores.
pub fn discriminator_loss(real: &DiscriminatorOutputs, fake: &DiscriminatorOutputs) -> Result<(f64, Vec<Vec<f64>>)> {
    real.check_scores("discriminator loss (real)")?;
    fake.check_scores("discriminator loss (fake)")?;
    if real.subs.len() != fake.subs.len() {
        return Err(Error::InvalidInput(format!(
            "{} real sub-discriminators vs {} fake",
            real.subs.len(),
            fake.subs.len()
        )));
    }
    let k = fake.subs.len() as f64;
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(fake.subs.len());
    for (r, f) in real.subs.iter().zip(&fake.subs) {
        total += mean_sq_to(&r.scores, 1.0) + mean_sq_to(&f.scores, 0.0);
        let n = f.scores.len() as f64;
        grad.push(f.scores.iter().map(|x| 2.0 * x / (k * n)).collect());
    }
    Ok((total / k, grad))
}

/// `(1/K) sum_k mean (D_k(s_hat) - 1)^2`.
pub fn adversarial_loss(fake: &DiscriminatorOutputs) -> Result<(f64, Vec<Vec<f64>>)> {
    fake.check_scores("adversarial loss")?;
    let k = fake.subs.len() as f64;
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(fake.subs.len());
    for f in &fake.subs {
        total += mean_sq_to(&f.scores, 1.0);
        let n = f.scores.len() as f64;
        grad.push(f.scores.iter().map(|x| 2.0 * (x - 1.0) / (k * n)).collect());
    }
    Ok((total / k, grad))
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Mean absolute difference; gradient with respect to `x_hat`.
pub fn mel_loss(x: &FeatureSequence, x_hat: &FeatureSequence) -> Result<(f64, Vec<f64>)> {
    x.same_shape(x_hat, "mel loss")?;
    let n = x.as_slice().len();
    if n == 0 {
        return Ok((0.0, Vec::new()));
    }
    let n = n as f64;
    let mut total = 0.0;
    let grad = x
        .as_slice()
        .iter()
        .zip(x_hat.as_slice())
        .map(|(a, b)| {
            total += (b - a).abs();
            sign(b - a) / n
        })
        .collect();
    Ok((total / n, grad))
}

/// `(1/K) sum_k (1/N_k) sum_i mean |D_k^i(s) - D_k^i(s_hat)|`; gradient with respect to
/// the fake features.
pub fn feature_matching_loss(
    real: &DiscriminatorOutputs,
    fake: &DiscriminatorOutputs,
) -> Result<(f64, Vec<Vec<Vec<f64>>>)> {
    if real.subs.is_empty() || real.subs.len() != fake.subs.len() {
        return Err(Error::InvalidInput(format!(
            "{} real sub-discriminators vs {} fake",
            real.subs.len(),
            fake.subs.len()
        )));
    }
    let k = real.subs.len() as f64;
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(fake.subs.len());
    for (ki, (r, f)) in real.subs.iter().zip(&fake.subs).enumerate() {
        if r.features.is_empty() || r.features.len() != f.features.len() {
            return Err(Error::InvalidInput(format!(
                "sub-discriminator {ki}: {} real layers vs {} fake",
                r.features.len(),
                f.features.len()
            )));
        }
        let layers = r.features.len() as f64;
        let mut sub_grad = Vec::with_capacity(f.features.len());
        for (li, (a, b)) in r.features.iter().zip(&f.features).enumerate() {
            if a.is_empty() || a.len() != b.len() {
                return Err(Error::InvalidInput(format!(
                    "sub-discriminator {ki} layer {li}: {} real features vs {} fake",
                    a.len(),
                    b.len()
                )));
            }
            let n = a.len() as f64;
            total += a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / (n * layers * k);
            sub_grad.push(a.iter().zip(b).map(|(x, y)| sign(y - x) / (n * layers * k)).collect());
        }
        grad.push(sub_grad);
    }
    Ok((total, grad))
}

/// Mean squared elementwise difference; gradient with respect to `x_hat`.
pub fn frame_loss(x: &FeatureSequence, x_hat: &FeatureSequence) -> Result<(f64, Vec<f64>)> {
    x.same_shape(x_hat, "frame loss")?;
    mse_with_grad(x.as_slice(), x_hat.as_slice())
}

fn mse_with_grad(target: &[f64], pred: &[f64]) -> Result<(f64, Vec<f64>)> {
    if target.is_empty() {
        return Ok((0.0, Vec::new()));
    }
    let n = target.len() as f64;
    let value = target.iter().zip(pred).map(|(a, b)| (b - a) * (b - a)).sum::<f64>() / n;
    let grad = target.iter().zip(pred).map(|(a, b)| 2.0 * (b - a) / n).collect();
    Ok((value, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Default, serde::Serialize)]
pub struct GeneratorParts {
    pub adv: f64,
    pub fm: f64,
    pub mel: f64,
    pub vq: f64,
    pub ms: f64,
    pub frame: f64,
}

/// `adv + fm*l_fm + mel*l_mel + vq*l_vq + ms*l_ms + frame*l_frame`.
pub fn generator_total(parts: &GeneratorParts, w: &LossWeights) -> Result<f64> {
    let p = parts;
    for (name, v) in [("adv", p.adv), ("fm", p.fm), ("mel", p.mel), ("vq", p.vq), ("ms", p.ms), ("frame", p.frame)] {
        if !v.is_finite() {
            return Err(Error::InvalidInput(format!("generator loss part {name} is not finite")));
        }
    }
    Ok(p.adv + w.fm * p.fm + w.mel * p.mel + w.vq * p.vq + w.ms * p.ms + w.frame * p.frame)
}

/// Mean squared difference between duration vectors; gradient with respect to `d_hat`.
pub fn duration_loss(d: &[f64], d_hat: &[f64]) -> Result<(f64, Vec<f64>)> {
    if d.len() != d_hat.len() {
        return Err(Error::InvalidInput(format!("{} durations vs {} predicted", d.len(), d_hat.len())));
    }
    mse_with_grad(d, d_hat)
}

pub fn am_total(l_rec: f64, l_dur: f64, lambda_dur: f64) -> f64 {
    l_rec + lambda_dur * l_dur
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic - numeric| / max(1, |numeric|)` over checked coordinates.
    pub max_rel_error: f64,
    pub argmax: usize,
    pub step: f64,
    pub checked: usize,
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "max_rel_error={:.3e}\targmax={}\th={:e}\tchecked={}",
            self.max_rel_error, self.argmax, self.step, self.checked
        )
    }
}

/// Central-difference check of every coordinate.
pub fn grad_check<F>(f: F, point: &[f64], h: f64) -> Result<GradCheckReport>
where
    F: Fn(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    grad_check_masked(f, point, h, |_| false)
}

/// Like [`grad_check`] but skips coordinates for which `skip` returns true (kinks).
pub fn grad_check_masked<F, S>(f: F, point: &[f64], h: f64, skip: S) -> Result<GradCheckReport>
where
    F: Fn(&[f64]) -> Result<(f64, Vec<f64>)>,
    S: Fn(usize) -> bool,
{
    if !(h.is_finite() && h > 0.0) {
        return Err(Error::InvalidArgument(format!("step {h} must be positive")));
    }
    let (value, analytic) = f(point)?;
    if !value.is_finite() || analytic.len() != point.len() {
        return Err(Error::Numeric("loss or gradient at the base point is invalid".into()));
    }
    let mut x = point.to_vec();
    let mut report = GradCheckReport { max_rel_error: 0.0, argmax: 0, step: h, checked: 0 };
    for i in 0..point.len() {
        if skip(i) {
            continue;
        }
        x[i] = point[i] + h;
        let (plus, _) = f(&x)?;
        x[i] = point[i] - h;
        let (minus, _) = f(&x)?;
        x[i] = point[i];
        let numeric = (plus - minus) / (2.0 * h);
        if !numeric.is_finite() || !analytic[i].is_finite() {
            return Err(Error::Numeric(format!("non-finite derivative at coordinate {i}")));
        }
        let err = (analytic[i] - numeric).abs() / numeric.abs().max(1.0);
        if report.checked == 0 || err > report.max_rel_error {
            report.max_rel_error = err;
            report.argmax = i;
        }
        report.checked += 1;
    }
    Ok(report)
}
