//! Associate learner: compresses a multi-stage representation into one compact token
//! sequence at the stage-1 rate plus an utterance-level embedding, and reconstructs the
//! stages from the highest to the lowest.
//!
//! Compression: every stage is repeated to the stage-1 length and concatenated
//! ([`align_concat`]); each row is quantized with a single-head codebook. The embedding is
//! mean and (population) standard deviation pooling over the aligned rows.
//!
//! Reconstruction starts from the dequantized compact tokens plus the projected embedding
//! broadcast over time (the "base" sequence). Stage `S` is predicted from the base pooled
//! to its rate; each lower stage `j` is predicted from the base at rate `r_j` concatenated
//! with the quantized stage `j + 1` repeated onto stage `j`'s grid. Every prediction is
//! quantized with that stage's codebook before feeding the next one.

use sha2::{Digest, Sha256};

use crate::mhvq::{self, quantize_sequence, MultiHeadCodebook, TokenMatrix, TrainOptions, TrainingReport};
use crate::msmc::{check_books, downsample_avg, upsample_repeat, Msmcr, MsmcStage, StageConfig};
use crate::{Error, FeatureKind, FeatureSequence, LinearPredictor, Result, Rows};

pub const DEFAULT_LAMBDA_REC: f64 = 1.0;
pub const DEFAULT_ASSOCIATE_CODEWORDS: usize = 64;

/// Compact token sequence of one utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct CompactCode {
    pub tokens: Vec<u32>,
    pub codewords: usize,
    /// Fingerprint of the [`AssociateModel`] that produced the code.
    pub fingerprint: [u8; 32],
    pub global_embedding: Vec<f64>,
    pub frame_shift_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssociateModel {
    /// Single-head codebook over aligned rows.
    pub codebook: MultiHeadCodebook,
    /// Maps the pooled embedding to the codebook dimension.
    pub projector: LinearPredictor,
    /// Entry `i` reconstructs stage `i` (0-based).
    pub stage_predictors: Vec<LinearPredictor>,
    pub teacher_forcing: bool,
}

impl AssociateModel {
    pub fn new(
        codebook: MultiHeadCodebook,
        projector: LinearPredictor,
        stage_predictors: Vec<LinearPredictor>,
        teacher_forcing: bool,
    ) -> Result<Self> {
        if codebook.heads() != 1 {
            return Err(Error::Config(format!(
                "associate codebook must have one head, got {}",
                codebook.heads()
            )));
        }
        let d = codebook.total_dim();
        if projector.out_dim() != d || projector.in_dim() != 2 * d {
            return Err(Error::Config(format!(
                "embedding projector is {}->{}, expected {}->{d}",
                projector.in_dim(),
                projector.out_dim(),
                2 * d
            )));
        }
        if stage_predictors.is_empty() {
            return Err(Error::Config("associate model needs at least one stage predictor".into()));
        }
        Ok(Self { codebook, projector, stage_predictors, teacher_forcing })
    }

    pub fn fingerprint(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(b"ASSOC");
        h.update(self.codebook.fingerprint());
        for p in std::iter::once(&self.projector).chain(&self.stage_predictors) {
            h.update((p.in_dim() as u64).to_le_bytes());
            h.update((p.out_dim() as u64).to_le_bytes());
            for v in p.weight().iter().chain(p.bias()) {
                h.update(v.to_le_bytes());
            }
        }
        h.update([u8::from(self.teacher_forcing)]);
        h.finalize().into()
    }

    fn check_config(&self, cfg: &StageConfig) -> Result<()> {
        let s = cfg.num_stages();
        if self.stage_predictors.len() != s {
            return Err(Error::Config(format!(
                "associate model has {} stage predictors for {s} stages",
                self.stage_predictors.len()
            )));
        }
        let d = cfg.dim();
        if self.codebook.total_dim() != d * s {
            return Err(Error::Config(format!(
                "associate codebook dimension {} does not match {s} stages of dimension {d}",
                self.codebook.total_dim()
            )));
        }
        for (i, p) in self.stage_predictors.iter().enumerate() {
            let want_in = if i + 1 == s { d * s } else { d * s + d };
            if p.in_dim() != want_in || p.out_dim() != d {
                return Err(Error::Config(format!(
                    "stage {i} predictor is {}->{}, expected {want_in}->{d}",
                    p.in_dim(),
                    p.out_dim()
                )));
            }
        }
        Ok(())
    }
}

/// Every stage repeated to the stage-1 length and concatenated in stage order.
pub fn align_concat(m: &Msmcr) -> Result<FeatureSequence> {
    crate::msmc::aligned_stages(m)
}

/// Mean and population standard deviation of the aligned rows, concatenated.
pub fn global_embedding(m: &Msmcr) -> Result<Vec<f64>> {
    let aligned = align_concat(m)?;
    if aligned.is_empty() {
        return Err(Error::InsufficientData("global embedding of an empty representation".into()));
    }
    let (t, d) = (aligned.len() as f64, aligned.dim());
    let mut mean = vec![0.0; d];
    for row in aligned.frames() {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= t);
    let mut var = vec![0.0; d];
    for row in aligned.frames() {
        for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    mean.extend(var.into_iter().map(|s| (s / t).sqrt()));
    Ok(mean)
}

pub fn compress(m: &Msmcr, model: &AssociateModel) -> Result<CompactCode> {
    let aligned = align_concat(m)?;
    if m.base_len() > 0 && aligned.dim() != model.codebook.total_dim() {
        return Err(Error::Config(format!(
            "aligned dimension {} does not match associate codebook dimension {}",
            aligned.dim(),
            model.codebook.total_dim()
        )));
    }
    let global_embedding = if m.base_len() == 0 {
        vec![0.0; 2 * model.codebook.total_dim()]
    } else {
        global_embedding(m)?
    };
    let tokens = if m.base_len() == 0 {
        Vec::new()
    } else {
        quantize_sequence(&aligned, &model.codebook)?.0.as_slice().to_vec()
    };
    Ok(CompactCode {
        tokens,
        codewords: model.codebook.codewords(),
        fingerprint: model.fingerprint(),
        global_embedding,
        frame_shift_ms: m.frame_shift_ms,
    })
}

fn check_code(code: &CompactCode, model: &AssociateModel) -> Result<()> {
    let want = model.fingerprint();
    if code.fingerprint != want {
        return Err(Error::FingerprintMismatch { expected: hex::encode(want), found: hex::encode(code.fingerprint) });
    }
    Ok(())
}

/// Dequantized compact tokens plus the projected embedding on every frame.
fn base_sequence(code: &CompactCode, model: &AssociateModel) -> Result<FeatureSequence> {
    let d = model.codebook.total_dim();
    if code.global_embedding.len() != model.projector.in_dim() {
        return Err(Error::InvalidInput(format!(
            "embedding has dimension {}, projector expects {}",
            code.global_embedding.len(),
            model.projector.in_dim()
        )));
    }
    let offset = model.projector.apply(&code.global_embedding);
    let tokens = TokenMatrix::new(1, code.tokens.clone())?;
    let deq = mhvq::dequantize_tokens(&tokens, &model.codebook, code.frame_shift_ms)?;
    let data = deq
        .as_slice()
        .chunks_exact(d)
        .flat_map(|row| row.iter().zip(&offset).map(|(a, b)| a + b))
        .collect();
    FeatureSequence::new(data, d, code.frame_shift_ms, FeatureKind::Stage)
}

fn concat_columns(a: &FeatureSequence, b: &FeatureSequence) -> Result<FeatureSequence> {
    debug_assert_eq!(a.len(), b.len());
    let mut data = Vec::with_capacity(a.len() * (a.dim() + b.dim()));
    for (x, y) in a.frames().zip(b.frames()) {
        data.extend_from_slice(x);
        data.extend_from_slice(y);
    }
    FeatureSequence::new(data, a.dim() + b.dim(), a.frame_shift_ms(), FeatureKind::Stage)
}

/// Predictor input for stage `i` given the base and the (quantized) stage above, if any.
fn stage_input(
    base: &FeatureSequence,
    cfg: &StageConfig,
    i: usize,
    above: Option<&FeatureSequence>,
) -> Result<FeatureSequence> {
    let rate = cfg.stages()[i].rate;
    let pooled = downsample_avg(base, rate)?;
    match above {
        None => Ok(pooled),
        Some(hi) => {
            let ratio = cfg.stages()[i + 1].rate / rate;
            concat_columns(&pooled, &upsample_repeat(hi, ratio, pooled.len())?)
        }
    }
}

/// Cascaded reconstruction from the highest stage down.
pub fn reconstruct(
    code: &CompactCode,
    model: &AssociateModel,
    cfg: &StageConfig,
    stage_books: &[MultiHeadCodebook],
) -> Result<Msmcr> {
    reconstruct_with(code, model, cfg, stage_books, None)
}

/// Like [`reconstruct`]; with `teacher` set, every lower stage conditions on the teacher's
/// ground-truth stage above instead of the reconstructed one.
pub fn reconstruct_with(
    code: &CompactCode,
    model: &AssociateModel,
    cfg: &StageConfig,
    stage_books: &[MultiHeadCodebook],
    teacher: Option<&Msmcr>,
) -> Result<Msmcr> {
    check_code(code, model)?;
    check_books(cfg, stage_books)?;
    model.check_config(cfg)?;
    let s = cfg.num_stages();
    let base = base_sequence(code, model)?;
    let mut stages: Vec<Option<MsmcStage>> = vec![None; s];
    for i in (0..s).rev() {
        let above = if i + 1 < s {
            Some(match teacher {
                Some(t) => &t.stages[i + 1].quantized,
                None => &stages[i + 1].as_ref().expect("higher stage reconstructed first").quantized,
            })
        } else {
            None
        };
        let x = stage_input(&base, cfg, i, above)?;
        let pred = model.stage_predictors[i].predict(&x)?;
        let (tokens, quantized) = quantize_sequence(&pred, &stage_books[i])?;
        let spec = &cfg.stages()[i];
        stages[i] = Some(MsmcStage { rate: spec.rate, codewords: spec.codewords, tokens, quantized });
    }
    Ok(Msmcr { stages: stages.into_iter().map(|s| s.expect("all stages filled")).collect(), frame_shift_ms: code.frame_shift_ms })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssociateFitOptions {
    pub codewords: usize,
    pub train: TrainOptions,
    pub ridge_lambda: f64,
    pub teacher_forcing: bool,
}

impl Default for AssociateFitOptions {
    fn default() -> Self {
        Self {
            codewords: DEFAULT_ASSOCIATE_CODEWORDS,
            train: TrainOptions { heads: 1, codewords: DEFAULT_ASSOCIATE_CODEWORDS, ..TrainOptions::default() },
            ridge_lambda: crate::msmc::DEFAULT_RIDGE_LAMBDA,
            teacher_forcing: true,
        }
    }
}

/// Trains the compact codebook with EMA, then fits the embedding projector and the stage
/// predictors by ridge regression over the corpus.
pub fn fit_associate(
    corpus: &[Msmcr],
    cfg: &StageConfig,
    stage_books: &[MultiHeadCodebook],
    opts: &AssociateFitOptions,
) -> Result<(AssociateModel, TrainingReport)> {
    check_books(cfg, stage_books)?;
    let corpus: Vec<&Msmcr> = corpus.iter().filter(|m| m.base_len() > 0).collect();
    if corpus.is_empty() {
        return Err(Error::InsufficientData("associate fitting needs at least one non-empty utterance".into()));
    }
    let s = cfg.num_stages();
    let d = cfg.dim();
    let aligned: Vec<FeatureSequence> = corpus.iter().map(|m| align_concat(m)).collect::<Result<_>>()?;
    let all_rows: Vec<f64> = aligned.iter().flat_map(|a| a.as_slice().iter().copied()).collect();
    let train = TrainOptions { heads: 1, codewords: opts.codewords, ..opts.train.clone() };
    let (codebook, report) = mhvq::train_codebook(Rows::new(&all_rows, d * s)?, &train)?;

    // Projector: the embedding is constant within an utterance, so fit on per-utterance
    // mean residuals weighted by frame count.
    let (mut emb, mut resid, mut weights) = (Vec::new(), Vec::new(), Vec::new());
    let mut token_seqs = Vec::with_capacity(corpus.len());
    for (m, a) in corpus.iter().zip(&aligned) {
        let (tokens, q) = quantize_sequence(a, &codebook)?;
        let mut mean = vec![0.0; d * s];
        for (x, y) in a.frames().zip(q.frames()) {
            for ((acc, xv), yv) in mean.iter_mut().zip(x).zip(y) {
                *acc += xv - yv;
            }
        }
        mean.iter_mut().for_each(|v| *v /= a.len() as f64);
        emb.extend(global_embedding(m)?);
        resid.extend(mean);
        weights.push(a.len() as f64);
        token_seqs.push(tokens);
    }
    let projector = LinearPredictor::fit_weighted(
        Rows::new(&emb, 2 * d * s)?,
        Rows::new(&resid, d * s)?,
        Some(&weights),
        opts.ridge_lambda,
    )?;

    // Stage predictors are fitted top-down; provisional zero predictors let the cascade
    // produce free-running inputs when teacher forcing is off.
    let placeholder = LinearPredictor::constant(1, vec![0.0])?;
    let mut model = AssociateModel {
        codebook,
        projector,
        stage_predictors: vec![placeholder; s],
        teacher_forcing: opts.teacher_forcing,
    };
    let bases: Vec<FeatureSequence> = token_seqs
        .iter()
        .zip(&corpus)
        .map(|(tokens, m)| {
            let code = CompactCode {
                tokens: tokens.as_slice().to_vec(),
                codewords: model.codebook.codewords(),
                fingerprint: [0; 32],
                global_embedding: global_embedding(m)?,
                frame_shift_ms: m.frame_shift_ms,
            };
            base_sequence(&code, &model)
        })
        .collect::<Result<_>>()?;
    let mut free_running: Vec<Option<FeatureSequence>> = vec![None; corpus.len()];
    for i in (0..s).rev() {
        let (mut xs, mut ys) = (Vec::new(), Vec::new());
        let mut inputs = Vec::with_capacity(corpus.len());
        for ((m, base), free) in corpus.iter().zip(&bases).zip(&free_running) {
            let above = if i + 1 < s {
                Some(if opts.teacher_forcing {
                    &m.stages[i + 1].quantized
                } else {
                    free.as_ref().expect("higher stage available")
                })
            } else {
                None
            };
            let x = stage_input(base, cfg, i, above)?;
            xs.extend_from_slice(x.as_slice());
            ys.extend_from_slice(m.stages[i].quantized.as_slice());
            inputs.push(x);
        }
        let in_dim = inputs[0].dim();
        let predictor = LinearPredictor::fit(Rows::new(&xs, in_dim)?, Rows::new(&ys, d)?, opts.ridge_lambda)?;
        if !opts.teacher_forcing {
            for (free, x) in free_running.iter_mut().zip(&inputs) {
                let (_, q) = quantize_sequence(&predictor.predict(x)?, &stage_books[i])?;
                *free = Some(q);
            }
        }
        model.stage_predictors[i] = predictor;
    }
    Ok((model, report))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AssociateLoss {
    pub vq: f64,
    pub rec: f64,
    pub total: f64,
}

/// `L_vq`: mean squared distance between `pre_q` and its compact quantization;
/// `L_rec`: stage-averaged mean squared distance between reconstruction and target;
/// `L_a = L_vq + lambda_rec * L_rec`.
pub fn associate_loss(
    pre_q: &FeatureSequence,
    code: &CompactCode,
    model: &AssociateModel,
    recon: &Msmcr,
    target: &Msmcr,
    lambda_rec: f64,
) -> Result<AssociateLoss> {
    check_code(code, model)?;
    if pre_q.len() != code.tokens.len() || pre_q.dim() != model.codebook.total_dim() {
        return Err(Error::InvalidInput(format!(
            "pre-quantization sequence is {}x{}, code has {} tokens of dimension {}",
            pre_q.len(),
            pre_q.dim(),
            code.tokens.len(),
            model.codebook.total_dim()
        )));
    }
    let deq = mhvq::dequantize_tokens(&TokenMatrix::new(1, code.tokens.clone())?, &model.codebook, pre_q.frame_shift_ms())?;
    let vq = mean_sq(pre_q, &deq);
    let rec = reconstruction_loss(recon, target)?;
    if !(lambda_rec.is_finite() && lambda_rec >= 0.0) {
        return Err(Error::InvalidArgument(format!("lambda_rec {lambda_rec} must be nonnegative")));
    }
    Ok(AssociateLoss { vq, rec, total: vq + lambda_rec * rec })
}

/// `(1/S) sum_i mean_t ||recon_i[t] - target_i[t]||^2`.
pub fn reconstruction_loss(recon: &Msmcr, target: &Msmcr) -> Result<f64> {
    if recon.num_stages() != target.num_stages() || recon.num_stages() == 0 {
        return Err(Error::InvalidInput(format!(
            "{} reconstructed stages for {} target stages",
            recon.num_stages(),
            target.num_stages()
        )));
    }
    let mut total = 0.0;
    for (i, (r, t)) in recon.stages.iter().zip(&target.stages).enumerate() {
        r.quantized.same_shape(&t.quantized, &format!("reconstruction stage {i}"))?;
        total += mean_sq(&r.quantized, &t.quantized);
    }
    Ok(total / recon.num_stages() as f64)
}

fn mean_sq(a: &FeatureSequence, b: &FeatureSequence) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct CompressionReport {
    pub msmcr_bits: f64,
    pub code_bits: f64,
    /// `msmcr_bits / code_bits`; 0 when the code is empty.
    pub ratio: f64,
    pub msmcr_bits_per_second: f64,
    pub code_bits_per_second: f64,
}

pub fn compression_report(m: &Msmcr, code: &CompactCode) -> CompressionReport {
    let msmcr_bits = m.bits();
    let code_bits = code.tokens.len() as f64 * (code.codewords as f64).log2();
    let seconds = m.base_len() as f64 * m.frame_shift_ms / 1000.0;
    let per_second = |bits: f64| if seconds > 0.0 { bits / seconds } else { 0.0 };
    CompressionReport {
        msmcr_bits,
        code_bits,
        ratio: if code_bits > 0.0 { msmcr_bits / code_bits } else { 0.0 },
        msmcr_bits_per_second: per_second(msmcr_bits),
        code_bits_per_second: per_second(code_bits),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mhvq::init_codebook;
    use crate::msmc::{encode, StageSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_seq(t: usize, d: usize, seed: u64) -> FeatureSequence {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..t * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        FeatureSequence::new(data, d, 12.5, FeatureKind::Stage).unwrap()
    }

    fn setup(t: usize) -> (StageConfig, Vec<MultiHeadCodebook>, Msmcr) {
        let spec = |rate| StageSpec { rate, heads: 2, codewords: 4, head_dim: 2 };
        let cfg = StageConfig::new(vec![spec(1), spec(4)]).unwrap();
        let x = random_seq(t, 4, 5);
        let books: Vec<_> = cfg
            .stages()
            .iter()
            .enumerate()
            .map(|(i, s)| init_codebook(x.rows(), s.heads, s.codewords, i as u64).unwrap())
            .collect();
        let m = encode(&x, &cfg, &books).unwrap();
        (cfg, books, m)
    }

    #[test]
    fn align_concat_index_oracle() {
        let (_, _, m) = setup(10);
        let a = align_concat(&m).unwrap();
        assert_eq!(a.len(), 10);
        assert_eq!(a.dim(), 8);
        for t in 0..10 {
            assert_eq!(&a.frame(t)[..4], m.stages[0].quantized.frame(t));
            assert_eq!(&a.frame(t)[4..], m.stages[1].quantized.frame(t / 4));
        }
    }

    #[test]
    fn embedding_examples() {
        let stage = |rows: &[&[f64]]| MsmcStage {
            rate: 1,
            codewords: 1,
            tokens: TokenMatrix::new(1, vec![0; rows.len()]).unwrap(),
            quantized: FeatureSequence::from_rows(rows, 2, 12.5, FeatureKind::Stage).unwrap(),
        };
        let constant = Msmcr { stages: vec![stage(&[&[1.0, -2.0], &[1.0, -2.0]])], frame_shift_ms: 12.5 };
        assert_eq!(global_embedding(&constant).unwrap(), vec![1.0, -2.0, 0.0, 0.0]);
        let sym = Msmcr { stages: vec![stage(&[&[3.0, -4.0], &[-3.0, 4.0]])], frame_shift_ms: 12.5 };
        assert_eq!(global_embedding(&sym).unwrap(), vec![0.0, 0.0, 3.0, 4.0]);
        let empty = Msmcr { stages: vec![], frame_shift_ms: 12.5 };
        assert!(matches!(global_embedding(&empty), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn compression_bits() {
        let (_, _, m) = setup(80);
        let code = CompactCode {
            tokens: vec![0; 80],
            codewords: 64,
            fingerprint: [0; 32],
            global_embedding: vec![],
            frame_shift_ms: 12.5,
        };
        let r = compression_report(&m, &code);
        // 80*2*2 + 20*2*2 bits for the 2x4 books
        assert_eq!(r.msmcr_bits, 400.0);
        assert_eq!(r.code_bits, 480.0);
        assert_eq!(r.code_bits_per_second, 480.0);
    }

    #[test]
    fn loss_examples() {
        let (cfg, books, m) = setup(12);
        let opts = AssociateFitOptions {
            codewords: 4,
            train: TrainOptions { heads: 1, codewords: 4, epochs: 2, batch_size: 64, ..TrainOptions::default() },
            ..AssociateFitOptions::default()
        };
        let (model, _) = fit_associate(std::slice::from_ref(&m), &cfg, &books, &opts).unwrap();
        let code = compress(&m, &model).unwrap();
        let pre = align_concat(&m).unwrap();
        let zero = associate_loss(&pre, &code, &model, &m, &m, 1.0).unwrap();
        assert_eq!(zero.rec, 0.0);
        let l0 = associate_loss(&pre, &code, &model, &m, &m, 0.0).unwrap();
        assert_eq!(l0.total, l0.vq);
        let recon = reconstruct(&code, &model, &cfg, &books).unwrap();
        let l = associate_loss(&pre, &code, &model, &recon, &m, 2.5).unwrap();
        assert_eq!(l.total, l.vq + 2.5 * l.rec);
        assert!(l.vq >= 0.0 && l.rec >= 0.0);
    }

    #[test]
    fn mismatched_model_is_refused() {
        let (cfg, books, m) = setup(12);
        let opts = AssociateFitOptions {
            codewords: 4,
            train: TrainOptions { heads: 1, codewords: 4, epochs: 1, batch_size: 64, ..TrainOptions::default() },
            ..AssociateFitOptions::default()
        };
        let (model, _) = fit_associate(std::slice::from_ref(&m), &cfg, &books, &opts).unwrap();
        let mut code = compress(&m, &model).unwrap();
        code.fingerprint[0] ^= 1;
        assert!(matches!(reconstruct(&code, &model, &cfg, &books), Err(Error::FingerprintMismatch { .. })));
    }
}
