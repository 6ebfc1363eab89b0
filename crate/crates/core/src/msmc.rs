//! Multi-stage multi-codebook (MSMC) encoding.
//!
//! Stage `i` sees the input average-pooled by its cumulative rate `r_i` (stage 1 has
//! rate 1) and quantizes it with its own multi-head codebook. The resulting
//! [`Msmcr`] is decoded by repeating every stage back to the stage-1 length,
//! concatenating along the feature axis and applying a fitted linear head. Linear
//! cross-stage predictors map stage `j + 1` (upsampled) to stage `j`; their error is the
//! multi-stage loss.

use sha2::{Digest, Sha256};

use crate::mhvq::{dequantize_tokens, quantize_sequence, MultiHeadCodebook, TokenMatrix};
use crate::{Error, FeatureKind, FeatureSequence, LinearPredictor, Result, Rows};

pub const DEFAULT_RIDGE_LAMBDA: f64 = 1e-6;

/// Pads to a multiple of `r` by repeating the last frame, then averages blocks of `r`.
pub fn downsample_avg(seq: &FeatureSequence, r: usize) -> Result<FeatureSequence> {
    if r < 1 {
        return Err(Error::InvalidArgument("downsample rate must be at least 1".into()));
    }
    let shift = seq.frame_shift_ms() * r as f64;
    if r == 1 {
        return FeatureSequence::new(seq.as_slice().to_vec(), seq.dim(), shift, seq.kind());
    }
    let (t_in, dim) = (seq.len(), seq.dim());
    let t_out = t_in.div_ceil(r);
    let mut data = vec![0.0; t_out * dim];
    for (t, out) in data.chunks_exact_mut(dim).enumerate() {
        for i in t * r..(t + 1) * r {
            let frame = seq.frame(i.min(t_in - 1));
            for (o, v) in out.iter_mut().zip(frame) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= r as f64);
    }
    FeatureSequence::new(data, dim, shift, seq.kind())
}

/// Repeats each frame `r` times and truncates to `target_len`.
pub fn upsample_repeat(seq: &FeatureSequence, r: usize, target_len: usize) -> Result<FeatureSequence> {
    if r < 1 {
        return Err(Error::InvalidArgument("upsample rate must be at least 1".into()));
    }
    if target_len > seq.len() * r {
        return Err(Error::InvalidArgument(format!(
            "target length {target_len} exceeds {} frames x rate {r}",
            seq.len()
        )));
    }
    let mut data = Vec::with_capacity(target_len * seq.dim());
    for t in 0..target_len {
        data.extend_from_slice(seq.frame(t / r));
    }
    FeatureSequence::new(data, seq.dim(), seq.frame_shift_ms() / r as f64, seq.kind())
}

/// Source index for every output frame when re-timing from `source_shift` to
/// `target_shift`. Frame `i` is centered at `i * shift`; exact ties take the earlier frame.
pub fn nearest_indices(len: usize, source_shift_ms: f64, target_shift_ms: f64) -> Vec<usize> {
    if len == 0 {
        return Vec::new();
    }
    let ratio = source_shift_ms / target_shift_ms;
    let out_len = ((len as f64 * ratio) - 1e-9).ceil().max(1.0) as usize;
    (0..out_len)
        .map(|t| {
            let pos = t as f64 * target_shift_ms / source_shift_ms;
            let idx = (pos - 0.5 - 1e-9).ceil().max(0.0) as usize;
            idx.min(len - 1)
        })
        .collect()
}

/// Nearest-neighbour re-timing to `target_shift_ms` (e.g. 20 ms upstream features onto a
/// 12.5 ms grid). The output covers the same duration: `ceil(T * src / target)` frames.
pub fn resample_nearest(seq: &FeatureSequence, target_shift_ms: f64) -> Result<FeatureSequence> {
    if !(target_shift_ms.is_finite() && target_shift_ms > 0.0) {
        return Err(Error::InvalidArgument(format!("target shift {target_shift_ms} must be positive")));
    }
    let mut data = Vec::new();
    for i in nearest_indices(seq.len(), seq.frame_shift_ms(), target_shift_ms) {
        data.extend_from_slice(seq.frame(i));
    }
    FeatureSequence::new(data, seq.dim(), target_shift_ms, seq.kind())
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    /// Cumulative downsample rate relative to stage 1.
    pub rate: usize,
    pub heads: usize,
    pub codewords: usize,
    pub head_dim: usize,
}

impl StageSpec {
    pub fn total_dim(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn bits_per_token_row(&self) -> f64 {
        self.heads as f64 * (self.codewords as f64).log2()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageConfig {
    stages: Vec<StageSpec>,
}

impl Default for StageConfig {
    /// Two stages at rates 1 and 4, each with 4 heads of 64 codewords of dimension 64.
    fn default() -> Self {
        let stage = |rate| StageSpec { rate, heads: 4, codewords: 64, head_dim: 64 };
        Self { stages: vec![stage(1), stage(4)] }
    }
}

impl StageConfig {
    pub fn new(stages: Vec<StageSpec>) -> Result<Self> {
        validate_stages(&stages)?;
        Ok(Self { stages })
    }

    pub fn stages(&self) -> &[StageSpec] {
        &self.stages
    }

    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    /// Feature dimension every stage quantizes.
    pub fn dim(&self) -> usize {
        self.stages[0].total_dim()
    }

    /// `sum_i H_i log2(K_i) / r_i`.
    pub fn bits_per_frame(&self) -> f64 {
        self.stages.iter().map(|s| s.bits_per_token_row() / s.rate as f64).sum()
    }
}

pub(crate) fn validate_stages(stages: &[StageSpec]) -> Result<()> {
    if stages.is_empty() {
        return Err(Error::Config("stages: at least one stage is required".into()));
    }
    let dim = stages[0].total_dim();
    for (i, s) in stages.iter().enumerate() {
        let field = |name: &str| format!("stages[{i}].{name}");
        if s.heads == 0 {
            return Err(Error::Config(format!("{}: must be positive", field("heads"))));
        }
        if s.codewords == 0 {
            return Err(Error::Config(format!("{}: must be positive", field("codewords"))));
        }
        if s.head_dim == 0 {
            return Err(Error::Config(format!("{}: must be positive", field("head_dim"))));
        }
        if s.total_dim() != dim {
            return Err(Error::Config(format!(
                "{}: stage dimension {} differs from stage 0 dimension {dim}",
                field("head_dim"),
                s.total_dim()
            )));
        }
        if i == 0 {
            if s.rate != 1 {
                return Err(Error::Config(format!("{}: first stage rate must be 1, got {}", field("rate"), s.rate)));
            }
        } else {
            let prev = stages[i - 1].rate;
            if s.rate <= prev || s.rate % prev != 0 {
                return Err(Error::Config(format!(
                    "{}: {} must be a strictly larger multiple of {prev}",
                    field("rate"),
                    s.rate
                )));
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct MsmcStage {
    pub rate: usize,
    pub codewords: usize,
    pub tokens: TokenMatrix,
    pub quantized: FeatureSequence,
}

/// Multi-stage multi-codebook representation of one utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct Msmcr {
    pub stages: Vec<MsmcStage>,
    /// Frame shift of the stage-1 sequence.
    pub frame_shift_ms: f64,
}

impl Msmcr {
    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    /// Length of the stage-1 (finest) sequence.
    pub fn base_len(&self) -> usize {
        self.stages.first().map_or(0, |s| s.tokens.len())
    }

    /// `sum_i T_i H_i log2(K_i)`.
    pub fn bits(&self) -> f64 {
        self.stages
            .iter()
            .map(|s| (s.tokens.len() * s.tokens.heads()) as f64 * (s.codewords as f64).log2())
            .sum()
    }

    pub fn token_count(&self) -> usize {
        self.stages.iter().map(|s| s.tokens.as_slice().len()).sum()
    }

    /// Checks the stage-length law, token ranges and that `quantized` equals the
    /// dequantized tokens.
    pub fn validate(&self, books: &[MultiHeadCodebook]) -> Result<()> {
        if books.len() != self.stages.len() {
            return Err(Error::Config(format!(
                "{} codebooks for {} stages",
                books.len(),
                self.stages.len()
            )));
        }
        let base = self.base_len();
        for (i, (stage, book)) in self.stages.iter().zip(books).enumerate() {
            if stage.tokens.len() != base.div_ceil(stage.rate) {
                return Err(Error::InvalidInput(format!(
                    "stage {i} has {} frames, expected ceil({base}/{})",
                    stage.tokens.len(),
                    stage.rate
                )));
            }
            if stage.codewords != book.codewords() {
                return Err(Error::Config(format!("stage {i} codebook size mismatch")));
            }
            let deq = dequantize_tokens(&stage.tokens, book, stage.quantized.frame_shift_ms())?;
            if deq.as_slice() != stage.quantized.as_slice() {
                return Err(Error::InvalidInput(format!("stage {i} quantized frames differ from its tokens")));
            }
        }
        Ok(())
    }

    /// Rebuilds the quantized sequences from token matrices alone.
    pub fn from_tokens(
        tokens: Vec<TokenMatrix>,
        cfg: &StageConfig,
        books: &[MultiHeadCodebook],
        frame_shift_ms: f64,
    ) -> Result<Self> {
        check_books(cfg, books)?;
        if tokens.len() != cfg.num_stages() {
            return Err(Error::Config(format!(
                "{} token matrices for {} stages",
                tokens.len(),
                cfg.num_stages()
            )));
        }
        let stages = tokens
            .into_iter()
            .zip(cfg.stages().iter().zip(books))
            .map(|(tokens, (spec, book))| {
                let quantized = dequantize_tokens(&tokens, book, frame_shift_ms * spec.rate as f64)?;
                Ok(MsmcStage { rate: spec.rate, codewords: spec.codewords, tokens, quantized })
            })
            .collect::<Result<Vec<_>>>()?;
        let m = Msmcr { stages, frame_shift_ms };
        m.validate(books)?;
        Ok(m)
    }
}

/// Combined fingerprint of an ordered set of stage codebooks.
pub fn books_fingerprint(books: &[MultiHeadCodebook]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(b"MSMC");
    for b in books {
        h.update(b.fingerprint());
    }
    h.finalize().into()
}

pub(crate) fn check_books(cfg: &StageConfig, books: &[MultiHeadCodebook]) -> Result<()> {
    if books.len() != cfg.num_stages() {
        return Err(Error::Config(format!("{} codebooks for {} stages", books.len(), cfg.num_stages())));
    }
    for (i, (spec, book)) in cfg.stages().iter().zip(books).enumerate() {
        if (book.heads(), book.codewords(), book.head_dim()) != (spec.heads, spec.codewords, spec.head_dim) {
            return Err(Error::Config(format!(
                "stage {i} codebook is {}x{}x{}, config says {}x{}x{}",
                book.heads(),
                book.codewords(),
                book.head_dim(),
                spec.heads,
                spec.codewords,
                spec.head_dim
            )));
        }
    }
    Ok(())
}

/// The pre-quantization input of every stage: the source average-pooled by `r_i`.
pub fn stage_inputs(seq: &FeatureSequence, cfg: &StageConfig) -> Result<Vec<FeatureSequence>> {
    if seq.dim() != cfg.dim() {
        return Err(Error::Config(format!(
            "input dimension {} does not match stage dimension {}",
            seq.dim(),
            cfg.dim()
        )));
    }
    cfg.stages()
        .iter()
        .map(|s| Ok(downsample_avg(seq, s.rate)?.with_kind(FeatureKind::Stage)))
        .collect()
}

pub fn encode(seq: &FeatureSequence, cfg: &StageConfig, books: &[MultiHeadCodebook]) -> Result<Msmcr> {
    check_books(cfg, books)?;
    let inputs = stage_inputs(seq, cfg)?;
    let mut stages = Vec::with_capacity(cfg.num_stages());
    // Highest stage first; each stage only depends on the shared input.
    for ((spec, book), x) in cfg.stages().iter().zip(books).zip(&inputs).rev() {
        let (tokens, quantized) = quantize_sequence(x, book)?;
        stages.push(MsmcStage { rate: spec.rate, codewords: spec.codewords, tokens, quantized });
    }
    stages.reverse();
    Ok(Msmcr { stages, frame_shift_ms: seq.frame_shift_ms() })
}

/// Input of the predictor for stage `j` (0-based): stage `j + 1` repeated onto stage
/// `j`'s grid.
pub fn cross_stage_input(m: &Msmcr, j: usize) -> Result<FeatureSequence> {
    let (lo, hi) = (&m.stages[j], &m.stages[j + 1]);
    upsample_repeat(&hi.quantized, hi.rate / lo.rate, lo.tokens.len())
}

/// Fits one predictor per adjacent stage pair over a corpus; entry `j` predicts stage `j`
/// from stage `j + 1`.
pub fn fit_stage_predictors(corpus: &[Msmcr], ridge_lambda: f64) -> Result<Vec<LinearPredictor>> {
    let s = corpus.first().map_or(0, Msmcr::num_stages);
    (0..s.saturating_sub(1))
        .map(|j| {
            let (mut xs, mut ys) = (Vec::new(), Vec::new());
            let mut dims = (0, 0);
            for m in corpus {
                let x = cross_stage_input(m, j)?;
                dims = (x.dim(), m.stages[j].quantized.dim());
                xs.extend_from_slice(x.as_slice());
                ys.extend_from_slice(m.stages[j].quantized.as_slice());
            }
            fit_stage_predictor_rows(&xs, &ys, dims, ridge_lambda)
        })
        .collect()
}

fn fit_stage_predictor_rows(xs: &[f64], ys: &[f64], (din, dout): (usize, usize), lambda: f64) -> Result<LinearPredictor> {
    if xs.is_empty() {
        return Err(Error::InsufficientData("cannot fit a predictor on zero frames".into()));
    }
    LinearPredictor::fit(Rows::new(xs, din)?, Rows::new(ys, dout)?, lambda)
}

pub fn fit_stage_predictor(
    inputs: &FeatureSequence,
    targets: &FeatureSequence,
    ridge_lambda: f64,
) -> Result<LinearPredictor> {
    if inputs.len() != targets.len() {
        return Err(Error::InvalidInput(format!(
            "{} input frames but {} target frames",
            inputs.len(),
            targets.len()
        )));
    }
    LinearPredictor::fit(inputs.rows(), targets.rows(), ridge_lambda)
}

/// Predictions of stages `1..S-1` (0-based `0..S-2`) from the stage above.
pub fn predict_lower_stages(m: &Msmcr, predictors: &[LinearPredictor]) -> Result<Vec<FeatureSequence>> {
    if predictors.len() + 1 != m.num_stages() && !(m.num_stages() == 0 && predictors.is_empty()) {
        return Err(Error::Config(format!(
            "{} cross-stage predictors for {} stages",
            predictors.len(),
            m.num_stages()
        )));
    }
    predictors
        .iter()
        .enumerate()
        .map(|(j, p)| p.predict(&cross_stage_input(m, j)?))
        .collect()
}

/// All stages repeated to the stage-1 length and concatenated in stage order.
pub fn aligned_stages(m: &Msmcr) -> Result<FeatureSequence> {
    let base = m.base_len();
    let dims: usize = m.stages.iter().map(|s| s.quantized.dim()).sum();
    let ups = m
        .stages
        .iter()
        .map(|s| upsample_repeat(&s.quantized, s.rate, base))
        .collect::<Result<Vec<_>>>()?;
    let mut data = Vec::with_capacity(base * dims);
    for t in 0..base {
        for u in &ups {
            data.extend_from_slice(u.frame(t));
        }
    }
    FeatureSequence::new(data, dims.max(1), m.frame_shift_ms, FeatureKind::Stage)
}

/// Cross-stage predictors plus the output head used by [`decode`].
#[derive(Debug, Clone, PartialEq)]
pub struct MsmcDecoder {
    pub stage_predictors: Vec<LinearPredictor>,
    pub head: LinearPredictor,
}

/// Fits the cross-stage predictors and a head mapping aligned stages to `targets`.
pub fn fit_decoder(corpus: &[(Msmcr, FeatureSequence)], ridge_lambda: f64) -> Result<MsmcDecoder> {
    let reps: Vec<Msmcr> = corpus.iter().map(|(m, _)| m.clone()).collect();
    let stage_predictors = fit_stage_predictors(&reps, ridge_lambda)?;
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    let mut dims = (0, 0);
    for (m, target) in corpus {
        let x = aligned_stages(m)?;
        if x.len() != target.len() {
            return Err(Error::InvalidInput(format!(
                "decode target has {} frames, representation has {}",
                target.len(),
                x.len()
            )));
        }
        dims = (x.dim(), target.dim());
        xs.extend_from_slice(x.as_slice());
        ys.extend_from_slice(target.as_slice());
    }
    let head = fit_stage_predictor_rows(&xs, &ys, dims, ridge_lambda)?;
    Ok(MsmcDecoder { stage_predictors, head })
}

pub fn decode(m: &Msmcr, decoder: &MsmcDecoder) -> Result<FeatureSequence> {
    if decoder.stage_predictors.len() + 1 != m.num_stages() {
        return Err(Error::Config(format!(
            "decoder has {} cross-stage predictors for {} stages",
            decoder.stage_predictors.len(),
            m.num_stages()
        )));
    }
    if m.base_len() == 0 {
        return FeatureSequence::empty(decoder.head.out_dim(), m.frame_shift_ms, FeatureKind::Stage);
    }
    let aligned = aligned_stages(m)?;
    if aligned.dim() != decoder.head.in_dim() {
        return Err(Error::Config(format!(
            "decode head expects dimension {}, stages concatenate to {}",
            decoder.head.in_dim(),
            aligned.dim()
        )));
    }
    decoder.head.predict(&aligned)
}

fn mean_sq_l2(a: &FeatureSequence, b: &FeatureSequence) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    let total: f64 = a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| (x - y) * (x - y)).sum();
    total / a.len() as f64
}

fn mean_sq_l2_grad(pred: &FeatureSequence, target: &FeatureSequence, scale: f64) -> Vec<f64> {
    let t = pred.len().max(1) as f64;
    pred.as_slice()
        .iter()
        .zip(target.as_slice())
        .map(|(p, q)| 2.0 * (p - q) / t * scale)
        .collect()
}

/// `(1/S) sum_i mean_t ||pre_i[t] - post_i[t]||^2`.
pub fn vq_loss(pre_quant: &[FeatureSequence], post_quant: &Msmcr) -> Result<f64> {
    Ok(vq_loss_with_grad(pre_quant, post_quant)?.0)
}

/// The loss and its gradient with respect to `pre_quant`; the quantized side is constant.
pub fn vq_loss_with_grad(pre_quant: &[FeatureSequence], post_quant: &Msmcr) -> Result<(f64, Vec<Vec<f64>>)> {
    let s = post_quant.num_stages();
    if pre_quant.len() != s || s == 0 {
        return Err(Error::InvalidInput(format!("{} pre-quantization stages for {s} stages", pre_quant.len())));
    }
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(s);
    for (i, (pre, stage)) in pre_quant.iter().zip(&post_quant.stages).enumerate() {
        pre.same_shape(&stage.quantized, &format!("vq loss stage {i}"))?;
        total += mean_sq_l2(pre, &stage.quantized);
        grads.push(mean_sq_l2_grad(pre, &stage.quantized, 1.0 / s as f64));
    }
    Ok((total / s as f64, grads))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MsLoss {
    pub value: f64,
    /// Single-stage representations have no adjacent pair; the value is then 0.
    pub degenerate: bool,
}

/// `(1/(S-1)) sum_j mean_t ||predicted_j[t] - z_j[t]||^2`.
pub fn ms_loss(predicted: &[FeatureSequence], actual: &Msmcr) -> Result<MsLoss> {
    let (value, _, degenerate) = ms_loss_inner(predicted, actual)?;
    Ok(MsLoss { value, degenerate })
}

/// Gradient is with respect to `predicted`; the representation is constant.
pub fn ms_loss_with_grad(predicted: &[FeatureSequence], actual: &Msmcr) -> Result<(f64, Vec<Vec<f64>>)> {
    let (value, grads, _) = ms_loss_inner(predicted, actual)?;
    Ok((value, grads))
}

fn ms_loss_inner(predicted: &[FeatureSequence], actual: &Msmcr) -> Result<(f64, Vec<Vec<f64>>, bool)> {
    let s = actual.num_stages();
    if s <= 1 {
        return Ok((0.0, Vec::new(), true));
    }
    if predicted.len() != s - 1 {
        return Err(Error::InvalidInput(format!("{} predictions for {s} stages", predicted.len())));
    }
    let n = (s - 1) as f64;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(s - 1);
    for (j, p) in predicted.iter().enumerate() {
        let target = &actual.stages[j].quantized;
        p.same_shape(target, &format!("ms loss stage {j}"))?;
        total += mean_sq_l2(p, target);
        grads.push(mean_sq_l2_grad(p, target, 1.0 / n));
    }
    Ok((total / n, grads, false))
}
