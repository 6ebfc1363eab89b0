//! Multi-head (product) vector quantization.
//!
//! A [`MultiHeadCodebook`] splits a `D`-dimensional vector into `H` contiguous chunks of
//! `d = D / H` values and quantizes each chunk against its own set of `K` codewords.
//! Codebooks are seeded with k-means++ and refined with exponential-moving-average
//! updates of per-codeword assignment counts and sums.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::{Error, FeatureKind, FeatureSequence, Result, Rows};

pub const DEFAULT_DECAY: f64 = 0.99;
pub const DEFAULT_SMOOTHING_EPS: f64 = 1e-5;
/// Codewords whose share of the decayed counts falls below this are "dead".
pub const DEAD_USAGE_THRESHOLD: f64 = 1e-4;

/// `H` sub-codebooks of `K` codewords, each of dimension `d`.
///
/// Codewords are stored head-major: head `h`, codeword `k` occupies
/// `data[(h * K + k) * d..][..d]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiHeadCodebook {
    heads: usize,
    codewords: usize,
    head_dim: usize,
    data: Vec<f64>,
}

impl MultiHeadCodebook {
    pub fn new(heads: usize, codewords: usize, head_dim: usize, data: Vec<f64>) -> Result<Self> {
        if heads == 0 || codewords == 0 || head_dim == 0 {
            return Err(Error::Config(format!(
                "codebook geometry must be positive, got H={heads} K={codewords} d={head_dim}"
            )));
        }
        if data.len() != heads * codewords * head_dim {
            return Err(Error::InvalidInput(format!(
                "codebook payload has {} values, expected {}",
                data.len(),
                heads * codewords * head_dim
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("codebook contains non-finite values".into()));
        }
        Ok(Self { heads, codewords, head_dim, data })
    }

    pub fn zeros(heads: usize, codewords: usize, head_dim: usize) -> Result<Self> {
        Self::new(heads, codewords, head_dim, vec![0.0; heads * codewords * head_dim])
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn codewords(&self) -> usize {
        self.codewords
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn total_dim(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn codeword(&self, head: usize, k: usize) -> &[f64] {
        let start = (head * self.codewords + k) * self.head_dim;
        &self.data[start..start + self.head_dim]
    }

    fn codeword_mut(&mut self, head: usize, k: usize) -> &mut [f64] {
        let start = (head * self.codewords + k) * self.head_dim;
        &mut self.data[start..start + self.head_dim]
    }

    fn head_slice(&self, head: usize) -> &[f64] {
        let n = self.codewords * self.head_dim;
        &self.data[head * n..(head + 1) * n]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Bits needed to address one codeword in every head.
    pub fn bits_per_vector(&self) -> f64 {
        self.heads as f64 * (self.codewords as f64).log2()
    }

    /// SHA-256 over the geometry and the little-endian codeword payload.
    pub fn fingerprint(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(b"MHVQ");
        for n in [self.heads, self.codewords, self.head_dim] {
            h.update((n as u64).to_le_bytes());
        }
        for v in &self.data {
            h.update(v.to_le_bytes());
        }
        h.finalize().into()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizationResult {
    pub indices: Vec<usize>,
    pub quantized: Vec<f64>,
    pub head_sq_errors: Vec<f64>,
}

impl QuantizationResult {
    pub fn total_sq_error(&self) -> f64 {
        self.head_sq_errors.iter().sum()
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest codeword among `codewords` (row-major, `d` wide). Ties go to the lowest index.
fn nearest(codewords: &[f64], d: usize, chunk: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, c) in codewords.chunks_exact(d).enumerate() {
        let dist = sq_dist(c, chunk);
        if dist < best.1 {
            best = (k, dist);
        }
    }
    best
}

pub fn quantize(x: &[f64], cb: &MultiHeadCodebook) -> Result<QuantizationResult> {
    if x.len() != cb.total_dim() {
        return Err(Error::InvalidInput(format!(
            "vector of dimension {} does not match codebook dimension {}",
            x.len(),
            cb.total_dim()
        )));
    }
    let mut out = QuantizationResult {
        indices: Vec::with_capacity(cb.heads),
        quantized: Vec::with_capacity(x.len()),
        head_sq_errors: Vec::with_capacity(cb.heads),
    };
    for (h, chunk) in x.chunks_exact(cb.head_dim).enumerate() {
        let (k, err) = nearest(cb.head_slice(h), cb.head_dim, chunk);
        out.indices.push(k);
        out.quantized.extend_from_slice(cb.codeword(h, k));
        out.head_sq_errors.push(err);
    }
    Ok(out)
}

pub fn dequantize(indices: &[usize], cb: &MultiHeadCodebook) -> Result<Vec<f64>> {
    if indices.len() != cb.heads {
        return Err(Error::InvalidInput(format!("expected {} indices, got {}", cb.heads, indices.len())));
    }
    let mut out = Vec::with_capacity(cb.total_dim());
    for (h, &k) in indices.iter().enumerate() {
        if k >= cb.codewords {
            return Err(Error::InvalidIndex { index: k, bound: cb.codewords });
        }
        out.extend_from_slice(cb.codeword(h, k));
    }
    Ok(out)
}

/// `T x H` matrix of codeword indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenMatrix {
    heads: usize,
    data: Vec<u32>,
}

impl TokenMatrix {
    pub fn new(heads: usize, data: Vec<u32>) -> Result<Self> {
        if heads == 0 || !data.len().is_multiple_of(heads) {
            return Err(Error::InvalidInput(format!("{} tokens do not split into {heads} heads", data.len())));
        }
        Ok(Self { heads, data })
    }

    pub fn empty(heads: usize) -> Self {
        Self { heads, data: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.heads
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn row(&self, t: usize) -> &[u32] {
        &self.data[t * self.heads..(t + 1) * self.heads]
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, u32> {
        self.data.chunks_exact(self.heads)
    }

    pub fn as_slice(&self) -> &[u32] {
        &self.data
    }

    pub fn column(&self, head: usize) -> impl Iterator<Item = u32> + '_ {
        self.rows().map(move |r| r[head])
    }
}

/// Row-wise [`quantize`]. The quantized sequence keeps the input's length, dimension and
/// frame shift.
pub fn quantize_sequence(seq: &FeatureSequence, cb: &MultiHeadCodebook) -> Result<(TokenMatrix, FeatureSequence)> {
    if seq.dim() != cb.total_dim() {
        return Err(Error::InvalidInput(format!(
            "sequence dimension {} does not match codebook dimension {}",
            seq.dim(),
            cb.total_dim()
        )));
    }
    let mut tokens = Vec::with_capacity(seq.len() * cb.heads);
    let mut quantized = Vec::with_capacity(seq.as_slice().len());
    for frame in seq.frames() {
        let q = quantize(frame, cb)?;
        tokens.extend(q.indices.iter().map(|&i| i as u32));
        quantized.extend_from_slice(&q.quantized);
    }
    Ok((
        TokenMatrix::new(cb.heads, tokens)?,
        FeatureSequence::new(quantized, seq.dim(), seq.frame_shift_ms(), seq.kind())?,
    ))
}

/// Looks up every token row. Fails on out-of-range tokens.
pub fn dequantize_tokens(
    tokens: &TokenMatrix,
    cb: &MultiHeadCodebook,
    frame_shift_ms: f64,
) -> Result<FeatureSequence> {
    if tokens.heads() != cb.heads {
        return Err(Error::InvalidInput(format!(
            "token matrix has {} heads, codebook has {}",
            tokens.heads(),
            cb.heads
        )));
    }
    let mut data = Vec::with_capacity(tokens.len() * cb.total_dim());
    for row in tokens.rows() {
        for (h, &k) in row.iter().enumerate() {
            let k = k as usize;
            if k >= cb.codewords {
                return Err(Error::InvalidIndex { index: k, bound: cb.codewords });
            }
            data.extend_from_slice(cb.codeword(h, k));
        }
    }
    FeatureSequence::new(data, cb.total_dim(), frame_shift_ms, FeatureKind::Stage)
}

/// k-means++ seeding, independently per head, on the head's chunks of `data`.
///
/// When the chunks of a head have fewer than `K` distinct values the remaining codewords
/// are drawn uniformly (and are necessarily duplicates).
pub fn init_codebook(data: Rows<'_>, heads: usize, codewords: usize, seed: u64) -> Result<MultiHeadCodebook> {
    if heads == 0 || codewords == 0 {
        return Err(Error::Config(format!("heads ({heads}) and codewords ({codewords}) must be positive")));
    }
    if !data.dim().is_multiple_of(heads) {
        return Err(Error::Config(format!(
            "dimension {} is not divisible by {heads} heads",
            data.dim()
        )));
    }
    if data.len() < codewords {
        return Err(Error::InsufficientData(format!(
            "{} vectors cannot seed {codewords} codewords",
            data.len()
        )));
    }
    let d = data.dim() / heads;
    let n = data.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut book = Vec::with_capacity(heads * codewords * d);
    let mut min_dist = vec![f64::INFINITY; n];
    for h in 0..heads {
        let chunk = |i: usize| &data.row(i)[h * d..(h + 1) * d];
        min_dist.fill(f64::INFINITY);
        let mut pick = rng.random_range(0..n);
        for k in 0..codewords {
            if k > 0 {
                let total: f64 = min_dist.iter().sum();
                pick = if total > 0.0 {
                    let mut target = rng.random::<f64>() * total;
                    let mut chosen = None;
                    for (i, &w) in min_dist.iter().enumerate() {
                        if w > 0.0 {
                            chosen = Some(i);
                            if target < w {
                                break;
                            }
                            target -= w;
                        }
                    }
                    chosen.expect("positive total implies a positive weight")
                } else {
                    rng.random_range(0..n)
                };
            }
            let center = chunk(pick);
            book.extend_from_slice(center);
            for (i, m) in min_dist.iter_mut().enumerate() {
                let dist = sq_dist(chunk(i), center);
                if dist < *m {
                    *m = dist;
                }
            }
        }
    }
    MultiHeadCodebook::new(heads, codewords, d, book)
}

/// Decayed per-codeword assignment counts and sums for every head.
#[derive(Debug, Clone, PartialEq)]
pub struct EmaState {
    heads: usize,
    codewords: usize,
    head_dim: usize,
    counts: Vec<f64>,
    sums: Vec<f64>,
    decay: f64,
    smoothing_eps: f64,
}

impl EmaState {
    /// Starts every codeword with a unit count whose sum is the codeword itself.
    pub fn new(cb: &MultiHeadCodebook, decay: f64, smoothing_eps: f64) -> Result<Self> {
        Self::with_counts(cb, decay, smoothing_eps, 1.0)
    }

    /// Starts every codeword with count `count` and sum `count * codeword`.
    pub fn with_counts(cb: &MultiHeadCodebook, decay: f64, smoothing_eps: f64, count: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&decay) {
            return Err(Error::Config(format!("ema.decay: {decay} not in [0, 1)")));
        }
        if !(smoothing_eps.is_finite() && smoothing_eps > 0.0) {
            return Err(Error::Config(format!("ema.smoothing_eps: must be positive, got {smoothing_eps}")));
        }
        if !(count.is_finite() && count >= 0.0) {
            return Err(Error::InvalidArgument(format!("initial count {count} must be nonnegative")));
        }
        Ok(Self {
            heads: cb.heads,
            codewords: cb.codewords,
            head_dim: cb.head_dim,
            counts: vec![count; cb.heads * cb.codewords],
            sums: cb.data.iter().map(|v| v * count).collect(),
            decay,
            smoothing_eps,
        })
    }

    pub fn decay(&self) -> f64 {
        self.decay
    }

    pub fn smoothing_eps(&self) -> f64 {
        self.smoothing_eps
    }

    pub fn counts(&self, head: usize) -> &[f64] {
        &self.counts[head * self.codewords..(head + 1) * self.codewords]
    }

    pub fn sums(&self, head: usize) -> &[f64] {
        let n = self.codewords * self.head_dim;
        &self.sums[head * n..(head + 1) * n]
    }

    fn check_matches(&self, cb: &MultiHeadCodebook) -> Result<()> {
        if (self.heads, self.codewords, self.head_dim) != (cb.heads, cb.codewords, cb.head_dim) {
            return Err(Error::InvalidInput("EMA state shape does not match codebook".into()));
        }
        Ok(())
    }
}

/// One EMA step: assignments against the current codebook, then decayed counts and sums
/// and Laplace-smoothed codeword refresh. An empty batch leaves both untouched.
pub fn ema_update(
    cb: &MultiHeadCodebook,
    st: &EmaState,
    batch: Rows<'_>,
) -> Result<(MultiHeadCodebook, EmaState)> {
    let mut cb = cb.clone();
    let mut st = st.clone();
    ema_update_in_place(&mut cb, &mut st, batch)?;
    Ok((cb, st))
}

pub fn ema_update_in_place(cb: &mut MultiHeadCodebook, st: &mut EmaState, batch: Rows<'_>) -> Result<()> {
    st.check_matches(cb)?;
    if batch.is_empty() {
        return Ok(());
    }
    if batch.dim() != cb.total_dim() {
        return Err(Error::InvalidInput(format!(
            "batch dimension {} does not match codebook dimension {}",
            batch.dim(),
            cb.total_dim()
        )));
    }
    let (k_count, d) = (cb.codewords, cb.head_dim);
    let mut batch_counts = vec![0.0; cb.heads * k_count];
    let mut batch_sums = vec![0.0; cb.data.len()];
    for x in batch.iter() {
        for (h, chunk) in x.chunks_exact(d).enumerate() {
            let (k, _) = nearest(cb.head_slice(h), d, chunk);
            batch_counts[h * k_count + k] += 1.0;
            let start = (h * k_count + k) * d;
            for (s, v) in batch_sums[start..start + d].iter_mut().zip(chunk) {
                *s += v;
            }
        }
    }
    let (gamma, eps) = (st.decay, st.smoothing_eps);
    for (c, n) in st.counts.iter_mut().zip(&batch_counts) {
        *c = gamma * *c + (1.0 - gamma) * n;
    }
    for (s, b) in st.sums.iter_mut().zip(&batch_sums) {
        *s = gamma * *s + (1.0 - gamma) * b;
    }
    for h in 0..cb.heads {
        let counts = &st.counts[h * k_count..(h + 1) * k_count];
        let total: f64 = counts.iter().sum();
        for k in 0..k_count {
            let smoothed = (counts[k] + eps) / (total + k_count as f64 * eps) * total;
            let start = (h * k_count + k) * d;
            let sum = &st.sums[start..start + d];
            for (c, s) in cb.codeword_mut(h, k).iter_mut().zip(sum) {
                *c = s / smoothed;
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    pub heads: usize,
    pub codewords: usize,
    pub epochs: usize,
    pub decay: f64,
    pub smoothing_eps: f64,
    /// Vectors per EMA step; each epoch walks the data in order.
    pub batch_size: usize,
    pub seed: u64,
    /// Re-seed codewords whose usage share drops below [`DEAD_USAGE_THRESHOLD`].
    pub reseed_dead: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            heads: 4,
            codewords: 64,
            epochs: 20,
            decay: DEFAULT_DECAY,
            smoothing_eps: DEFAULT_SMOOTHING_EPS,
            batch_size: 1024,
            seed: 0,
            reseed_dead: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_sq_error: f64,
    /// Usage entropy (nats) per head over the whole training set.
    pub usage_entropy: Vec<f64>,
    pub perplexity: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct TrainingReport {
    pub initial_error: f64,
    pub epochs: Vec<EpochStats>,
    pub final_error: f64,
    /// Epoch whose codebook was returned (0 = the seeding).
    pub selected_epoch: usize,
    pub reseeded: usize,
}

/// Mean (over vectors) of the squared quantization error, and the token matrix.
pub fn mean_quantization_error(data: Rows<'_>, cb: &MultiHeadCodebook) -> Result<(f64, TokenMatrix)> {
    let mut tokens = Vec::with_capacity(data.len() * cb.heads);
    let mut total = 0.0;
    for x in data.iter() {
        let q = quantize(x, cb)?;
        total += q.total_sq_error();
        tokens.extend(q.indices.iter().map(|&i| i as u32));
    }
    let mean = if data.is_empty() { 0.0 } else { total / data.len() as f64 };
    Ok((mean, TokenMatrix::new(cb.heads, tokens)?))
}

/// k-means++ seeding followed by `epochs` passes of EMA updates.
///
/// The returned codebook is the one with the lowest mean quantization error among the
/// seeding and every epoch end, so the final error never exceeds the initial error.
pub fn train_codebook(data: Rows<'_>, opts: &TrainOptions) -> Result<(MultiHeadCodebook, TrainingReport)> {
    if opts.batch_size == 0 {
        return Err(Error::Config("ema.batch_size: must be positive".into()));
    }
    let mut cb = init_codebook(data, opts.heads, opts.codewords, opts.seed)?;
    let mut st = EmaState::new(&cb, opts.decay, opts.smoothing_eps)?;
    let (initial_error, _) = mean_quantization_error(data, &cb)?;
    let mut best = (initial_error, 0, cb.clone());
    let mut epochs = Vec::with_capacity(opts.epochs);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5eed_dead);
    let mut reseeded = 0;
    let dim = data.dim();
    for epoch in 1..=opts.epochs {
        for chunk in data.as_slice().chunks(opts.batch_size * dim) {
            ema_update_in_place(&mut cb, &mut st, Rows::new(chunk, dim)?)?;
        }
        if opts.reseed_dead {
            reseeded += reseed_dead_codewords(&mut cb, &mut st, data, &mut rng);
        }
        let (err, tokens) = mean_quantization_error(data, &cb)?;
        let stats = codebook_stats(&tokens, cb.codewords)?;
        if err < best.0 {
            best = (err, epoch, cb.clone());
        }
        epochs.push(EpochStats {
            epoch,
            mean_sq_error: err,
            usage_entropy: stats.iter().map(|s| s.entropy).collect(),
            perplexity: stats.iter().map(|s| s.perplexity).collect(),
        });
    }
    let (final_error, selected_epoch, cb) = best;
    Ok((cb, TrainingReport { initial_error, epochs, final_error, selected_epoch, reseeded }))
}

fn reseed_dead_codewords(cb: &mut MultiHeadCodebook, st: &mut EmaState, data: Rows<'_>, rng: &mut ChaCha8Rng) -> usize {
    let (k_count, d) = (cb.codewords, cb.head_dim);
    let mut reseeded = 0;
    for h in 0..cb.heads {
        let total: f64 = st.counts(h).iter().sum();
        for k in 0..k_count {
            let idx = h * k_count + k;
            if total > 0.0 && st.counts[idx] / total >= DEAD_USAGE_THRESHOLD {
                continue;
            }
            let row = data.row(rng.random_range(0..data.len()));
            let chunk = &row[h * d..(h + 1) * d];
            cb.codeword_mut(h, k).copy_from_slice(chunk);
            st.counts[idx] = 1.0;
            st.sums[idx * d..(idx + 1) * d].copy_from_slice(chunk);
            reseeded += 1;
        }
    }
    reseeded
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadUsage {
    pub histogram: Vec<u64>,
    /// Entropy of the empirical token distribution in nats.
    pub entropy: f64,
    pub perplexity: f64,
    /// Set when there were no tokens to count.
    pub zero_support: bool,
}

/// Usage histogram and perplexity `exp(entropy)` per head.
pub fn codebook_stats(tokens: &TokenMatrix, codewords: usize) -> Result<Vec<HeadUsage>> {
    let mut out = Vec::with_capacity(tokens.heads());
    for h in 0..tokens.heads() {
        let mut histogram = vec![0u64; codewords];
        for k in tokens.column(h) {
            let k = k as usize;
            if k >= codewords {
                return Err(Error::InvalidIndex { index: k, bound: codewords });
            }
            histogram[k] += 1;
        }
        let n = tokens.len();
        if n == 0 {
            out.push(HeadUsage { histogram, entropy: 0.0, perplexity: 1.0, zero_support: true });
            continue;
        }
        let entropy: f64 = histogram
            .iter()
            .filter(|&&c| c > 0)
            .map(|&c| {
                let p = c as f64 / n as f64;
                -p * p.ln()
            })
            .sum();
        out.push(HeadUsage { histogram, entropy, perplexity: entropy.exp(), zero_support: false });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand_distr::{Distribution, Normal};

    fn book(heads: usize, k: usize, d: usize, seed: u64) -> MultiHeadCodebook {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..heads * k * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        MultiHeadCodebook::new(heads, k, d, data).unwrap()
    }

    fn brute_force(x: &[f64], cb: &MultiHeadCodebook) -> Vec<usize> {
        (0..cb.heads())
            .map(|h| {
                let chunk = &x[h * cb.head_dim()..(h + 1) * cb.head_dim()];
                let mut best = 0;
                for k in 1..cb.codewords() {
                    if sq_dist(cb.codeword(h, k), chunk) < sq_dist(cb.codeword(h, best), chunk) {
                        best = k;
                    }
                }
                best
            })
            .collect()
    }

    #[test]
    fn exact_codeword_concatenation() {
        let cb = book(2, 4, 3, 1);
        let x = dequantize(&[3, 1], &cb).unwrap();
        let q = quantize(&x, &cb).unwrap();
        assert_eq!(q.indices, vec![3, 1]);
        assert_eq!(q.quantized, x);
        assert_eq!(q.head_sq_errors, vec![0.0, 0.0]);
    }

    #[test]
    fn matches_brute_force_scan() {
        let cb = book(1, 16, 4, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let x: Vec<f64> = (0..4).map(|_| rng.random_range(-1.5..1.5)).collect();
            assert_eq!(quantize(&x, &cb).unwrap().indices, brute_force(&x, &cb));
        }
    }

    #[test]
    fn tie_goes_to_lowest_index() {
        let cb = MultiHeadCodebook::new(1, 3, 1, vec![-1.0, 5.0, 1.0]).unwrap();
        assert_eq!(quantize(&[0.0], &cb).unwrap().indices, vec![0]);
    }

    #[test]
    fn dimension_mismatch() {
        let cb = book(2, 4, 3, 1);
        assert!(matches!(quantize(&[0.0; 5], &cb), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn dequantize_cases() {
        let cb = book(1, 8, 3, 4);
        assert_eq!(dequantize(&[5], &cb).unwrap(), cb.codeword(0, 5));
        assert!(matches!(dequantize(&[8], &cb), Err(Error::InvalidIndex { index: 8, bound: 8 })));
        let zero = MultiHeadCodebook::zeros(2, 4, 2).unwrap();
        assert_eq!(dequantize(&[3, 2], &zero).unwrap(), vec![0.0; 4]);
        let cb = book(2, 5, 2, 9);
        for i in 0..5 {
            for j in 0..5 {
                let v = dequantize(&[i, j], &cb).unwrap();
                assert_eq!(quantize(&v, &cb).unwrap().indices, vec![i, j]);
            }
        }
    }

    #[test]
    fn sequence_quantization() {
        let cb = book(2, 4, 2, 5);
        let empty = FeatureSequence::empty(4, 12.5, FeatureKind::Stage).unwrap();
        let (tokens, q) = quantize_sequence(&empty, &cb).unwrap();
        assert!(tokens.is_empty() && q.is_empty());

        let exact = FeatureSequence::new(dequantize(&[1, 2], &cb).unwrap(), 4, 12.5, FeatureKind::Stage).unwrap();
        let (tokens, q) = quantize_sequence(&exact, &cb).unwrap();
        assert_eq!(tokens.row(0), &[1, 2]);
        assert_eq!(q, exact);
    }

    #[test]
    fn sequence_mse_matches_per_frame_oracle() {
        let cb = book(2, 8, 3, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let data: Vec<f64> = (0..1000 * 6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let seq = FeatureSequence::new(data, 6, 12.5, FeatureKind::Stage).unwrap();
        let (_, q) = quantize_sequence(&seq, &cb).unwrap();
        let mse: f64 = seq.frames().zip(q.frames()).map(|(a, b)| sq_dist(a, b)).sum::<f64>() / 1000.0;
        let oracle: f64 = seq
            .frames()
            .map(|x| {
                let idx = brute_force(x, &cb);
                let v = dequantize(&idx, &cb).unwrap();
                sq_dist(x, &v)
            })
            .sum::<f64>()
            / 1000.0;
        assert_relative_eq!(mse, oracle, max_relative = 1e-12);
        assert_relative_eq!(mean_quantization_error(seq.rows(), &cb).unwrap().0, oracle, max_relative = 1e-12);
    }

    #[test]
    fn init_examples() {
        let data: Vec<f64> = (0..8).flat_map(|i| [i as f64, (i * i) as f64]).collect();
        let rows = Rows::new(&data, 2).unwrap();
        let cb = init_codebook(rows, 1, 8, 11).unwrap();
        let mut got: Vec<Vec<f64>> = (0..8).map(|k| cb.codeword(0, k).to_vec()).collect();
        got.sort_by(|a, b| a[0].total_cmp(&b[0]));
        let want: Vec<Vec<f64>> = rows.iter().map(|r| r.to_vec()).collect();
        assert_eq!(got, want);

        let wide = vec![0.5; 8 * 10];
        let cb = init_codebook(Rows::new(&wide, 8).unwrap(), 4, 3, 0).unwrap();
        assert_eq!(cb.head_dim(), 2);

        let a = init_codebook(rows, 1, 5, 42).unwrap();
        let b = init_codebook(rows, 1, 5, 42).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn init_errors() {
        let data = vec![0.0; 9];
        assert!(matches!(init_codebook(Rows::new(&data, 3).unwrap(), 2, 1, 0), Err(Error::Config(_))));
        assert!(matches!(
            init_codebook(Rows::new(&data, 3).unwrap(), 1, 4, 0),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn ema_with_zero_decay_jumps_to_batch_mean() {
        let cb = book(1, 4, 2, 12);
        let st = EmaState::new(&cb, 0.0, DEFAULT_SMOOTHING_EPS).unwrap();
        let v = cb.codeword(0, 2).iter().map(|c| c + 1e-3).collect::<Vec<_>>();
        let batch: Vec<f64> = (0..100).flat_map(|_| v.clone()).collect();
        let (cb2, _) = ema_update(&cb, &st, Rows::new(&batch, 2).unwrap()).unwrap();
        for (c, e) in cb2.codeword(0, 2).iter().zip(&v) {
            assert_relative_eq!(*c, *e, max_relative = 1e-6);
        }
    }

    #[test]
    fn ema_empty_batch_is_noop() {
        let cb = book(2, 4, 2, 13);
        let st = EmaState::new(&cb, 0.9, 1e-5).unwrap();
        let (cb2, st2) = ema_update(&cb, &st, Rows::new(&[], 4).unwrap()).unwrap();
        assert_eq!((cb2, st2), (cb, st));
    }

    #[test]
    fn unassigned_codeword_barely_moves() {
        let cb = MultiHeadCodebook::new(1, 2, 1, vec![0.0, 10.0]).unwrap();
        let st = EmaState::with_counts(&cb, 0.99, 1e-5, 100.0).unwrap();
        let batch = vec![0.1; 50];
        let (cb2, st2) = ema_update(&cb, &st, Rows::new(&batch, 1).unwrap()).unwrap();
        assert!((cb2.codeword(0, 1)[0] - 10.0).abs() < 1e-6);
        assert_eq!(st2.counts(0).len(), 2);
        assert_eq!(st2.sums(0).len(), 2);
    }

    /// Lloyd iterations from the same start serve as the fixed-point oracle.
    #[test]
    fn ema_converges_to_point_masses() {
        let points = [[0.0, 0.0], [5.0, 0.0], [0.0, 5.0], [5.0, 5.0]];
        let batch: Vec<f64> = (0..1000).flat_map(|i| points[i % 4]).collect();
        let start = vec![0.1, -0.1, 4.9, 0.1, -0.1, 5.1, 5.1, 4.9];
        let mut cb = MultiHeadCodebook::new(1, 4, 2, start.clone()).unwrap();
        let mut st = EmaState::new(&cb, DEFAULT_DECAY, DEFAULT_SMOOTHING_EPS).unwrap();
        for _ in 0..50 {
            ema_update_in_place(&mut cb, &mut st, Rows::new(&batch, 2).unwrap()).unwrap();
        }
        let mut lloyd: Vec<[f64; 2]> = start.chunks(2).map(|c| [c[0], c[1]]).collect();
        for _ in 0..10 {
            let mut sums = [[0.0; 2]; 4];
            let mut counts = [0usize; 4];
            for p in batch.chunks(2) {
                let k = (0..4)
                    .min_by(|&a, &b| sq_dist(&lloyd[a], p).total_cmp(&sq_dist(&lloyd[b], p)))
                    .unwrap();
                sums[k][0] += p[0];
                sums[k][1] += p[1];
                counts[k] += 1;
            }
            for k in 0..4 {
                lloyd[k] = [sums[k][0] / counts[k] as f64, sums[k][1] / counts[k] as f64];
            }
        }
        for k in 0..4 {
            assert!(sq_dist(cb.codeword(0, k), &lloyd[k]).sqrt() < 1e-3);
            assert!(sq_dist(cb.codeword(0, k), &points[k]).sqrt() < 1e-3);
        }
    }

    #[test]
    fn train_single_codeword_finds_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let normal = Normal::new(0.3, 1.0).unwrap();
        let data: Vec<f64> = (0..3 * 2000).map(|_| normal.sample(&mut rng)).collect();
        let rows = Rows::new(&data, 3).unwrap();
        // Full-batch steps; the seeding prior decays as 0.99^epochs, so give it 200 steps.
        let opts = TrainOptions { heads: 1, codewords: 1, epochs: 200, batch_size: 2000, ..Default::default() };
        let (cb, report) = train_codebook(rows, &opts).unwrap();
        for j in 0..3 {
            let mean = rows.iter().map(|r| r[j]).sum::<f64>() / 2000.0;
            assert!((cb.codeword(0, 0)[j] - mean).abs() < 1e-3);
        }
        assert!(report.final_error <= report.initial_error);
    }

    #[test]
    fn train_zero_epochs_returns_seeding() {
        let data: Vec<f64> = (0..40).map(f64::from).collect();
        let rows = Rows::new(&data, 2).unwrap();
        let opts = TrainOptions { heads: 2, codewords: 4, epochs: 0, ..Default::default() };
        let (cb, report) = train_codebook(rows, &opts).unwrap();
        assert_eq!(cb, init_codebook(rows, 2, 4, 0).unwrap());
        assert!(report.epochs.is_empty());
        assert_eq!(report.final_error, report.initial_error);
    }

    #[test]
    fn reseed_dead_revives_unused_codewords() {
        // Two far points, four codewords: seeding leaves duplicates that never win.
        let data: Vec<f64> = (0..64).map(|i| if i % 2 == 0 { 0.0 } else { 10.0 }).collect();
        let rows = Rows::new(&data, 1).unwrap();
        let opts = TrainOptions {
            heads: 1,
            codewords: 4,
            epochs: 3,
            decay: 0.0,
            batch_size: 64,
            reseed_dead: true,
            ..Default::default()
        };
        let (_, report) = train_codebook(rows, &opts).unwrap();
        assert!(report.reseeded > 0);
        assert_eq!(report.final_error, 0.0);
    }

    #[test]
    fn stats_examples() {
        let same = TokenMatrix::new(1, vec![3; 10]).unwrap();
        assert_eq!(codebook_stats(&same, 8).unwrap()[0].perplexity, 1.0);

        let uniform = TokenMatrix::new(1, (0..64 * 3).map(|i| i % 64).collect()).unwrap();
        assert!((codebook_stats(&uniform, 64).unwrap()[0].perplexity - 64.0).abs() < 1e-9);

        let half = TokenMatrix::new(1, vec![0, 1, 0, 1]).unwrap();
        let usage = &codebook_stats(&half, 4).unwrap()[0];
        assert_relative_eq!(usage.perplexity, 2.0, max_relative = 1e-12);
        assert_eq!(usage.histogram, vec![2, 2, 0, 0]);

        let empty = codebook_stats(&TokenMatrix::empty(2), 4).unwrap();
        assert!(empty.iter().all(|u| u.zero_support && u.perplexity == 1.0));

        let bad = TokenMatrix::new(1, vec![9]).unwrap();
        assert!(codebook_stats(&bad, 4).is_err());
    }
}
