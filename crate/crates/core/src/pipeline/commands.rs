//! Batch workflows behind the CLI verbs. Every command reads its inputs, writes only to
//! the declared output paths and prints line-oriented results to `out`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::config::PipelineConfig;
use super::format::{self, CodebookArtifact};
use super::synth::gen_synthetic_with;
use crate::associate::{self, AssociateFitOptions, AssociateModel, CompressionReport};
use crate::losses::{self, DiscriminatorOutputs, GradCheckReport, SubDiscriminator};
use crate::metrics::{self, TokenSequence};
use crate::mhvq::{self, MultiHeadCodebook, TrainOptions, TrainingReport};
use crate::msmc::{self, MsmcDecoder, Msmcr, StageConfig};
use crate::{dsp, Error, FeatureKind, FeatureSequence, LinearPredictor, Result, Rows};

pub const FEATURE_EXT: &str = "msfq";
pub const MSMCR_EXT: &str = "msmr";
pub const CODE_EXT: &str = "mscc";
pub const DECODER_FILE: &str = "decoder.msdc";
pub const ASSOCIATE_FILE: &str = "associate.msam";
pub const REPORT_FILE: &str = "report.json";
pub const CONFIG_FILE: &str = "config.toml";

/// Relative tolerance used by the `gradcheck` verb.
pub const GRADCHECK_TOLERANCE: f64 = 1e-5;

pub fn stage_file(i: usize) -> String {
    format!("stage_{i}.mscb")
}

/// A single file, or every file with extension `ext` directly inside a directory, sorted
/// by name.
pub fn collect_inputs(path: &Path, ext: &str) -> Result<Vec<PathBuf>> {
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    if !path.is_dir() {
        return Err(Error::InvalidArgument(format!("{}: no such file or directory", path.display())));
    }
    let mut files: Vec<PathBuf> = fs::read_dir(path)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .filter(|p| p.is_file() && p.extension().is_some_and(|e| e == ext))
        .collect();
    files.sort();
    Ok(files)
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn output_path(out_dir: &Path, input: &Path, ext: &str) -> PathBuf {
    out_dir.join(format!("{}.{ext}", stem(input)))
}

fn write_report_line(out: &mut dyn Write, name: &str, value: f64) -> Result<()> {
    writeln!(out, "{name}\t{value:.6}")?;
    Ok(())
}

/// Writes the corpus as `utt_NNNN.msfq` plus ground truth under `truth/`.
pub fn cmd_synth(cfg: &PipelineConfig, seed: Option<u64>, out_dir: &Path, out: &mut dyn Write) -> Result<()> {
    let mut spec = cfg.synthetic.clone().unwrap_or_default();
    if let Some(s) = seed {
        spec.seed = s;
    }
    let corpus = gen_synthetic_with(&spec, &cfg.stft)?;
    fs::create_dir_all(out_dir)?;
    for (i, u) in corpus.utterances.iter().enumerate() {
        format::write_feature_file(out_dir.join(format!("utt_{i:04}.{FEATURE_EXT}")), u)?;
    }
    if let Some(centers) = &corpus.centers {
        let truth = out_dir.join("truth");
        fs::create_dir_all(&truth)?;
        format::write_feature_file(truth.join(format!("centers.{FEATURE_EXT}")), centers)?;
        let mut labels = String::new();
        for (i, lab) in corpus.labels.iter().enumerate() {
            let row: Vec<String> = lab.iter().map(ToString::to_string).collect();
            labels.push_str(&format!("utt_{i:04}\t{}\n", row.join(" ")));
        }
        fs::write(truth.join("labels.txt"), labels)?;
    }
    writeln!(out, "utterances\t{}", corpus.utterances.len())?;
    writeln!(out, "frames\t{}", corpus.total_frames())?;
    Ok(())
}

/// Everything `train` writes, loaded back and cross-checked.
#[derive(Debug, Clone)]
pub struct Artifacts {
    pub stages: StageConfig,
    pub books: Vec<CodebookArtifact>,
    pub decoder: MsmcDecoder,
    pub associate: AssociateModel,
}

impl Artifacts {
    pub fn codebooks(&self) -> Vec<MultiHeadCodebook> {
        self.books.iter().map(|b| b.codebook.clone()).collect()
    }

    pub fn books_fingerprint(&self) -> [u8; 32] {
        msmc::books_fingerprint(&self.codebooks())
    }
}

pub fn load_artifacts(dir: &Path) -> Result<Artifacts> {
    let (stages, fp, decoder) = format::decode_decoder(&fs::read(dir.join(DECODER_FILE))?)?;
    let books = (0..stages.num_stages())
        .map(|i| format::decode_codebook(&fs::read(dir.join(stage_file(i)))?))
        .collect::<Result<Vec<_>>>()?;
    let codebooks: Vec<MultiHeadCodebook> = books.iter().map(|b| b.codebook.clone()).collect();
    let actual = msmc::books_fingerprint(&codebooks);
    if actual != fp {
        return Err(Error::FingerprintMismatch { expected: hex::encode(fp), found: hex::encode(actual) });
    }
    let associate = format::decode_associate(&fs::read(dir.join(ASSOCIATE_FILE))?)?;
    Ok(Artifacts { stages, books, decoder, associate })
}

fn load_corpus(dir: &Path) -> Result<Vec<(PathBuf, FeatureSequence)>> {
    let files = collect_inputs(dir, FEATURE_EXT)?;
    if files.is_empty() {
        return Err(Error::InsufficientData(format!("{}: no .{FEATURE_EXT} files", dir.display())));
    }
    files.into_iter().map(|p| format::read_feature_file(&p).map(|s| (p, s))).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageReport {
    pub rate: usize,
    pub heads: usize,
    pub codewords: usize,
    pub head_dim: usize,
    pub training: TrainingReport,
    /// Per-head perplexity of the tokens the final codebook assigns to the corpus.
    pub perplexity: Vec<f64>,
    pub fingerprint: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MsLossReport {
    pub fitted: f64,
    pub zero_predictor: f64,
    pub bias_only: f64,
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AssociateReport {
    pub codebook_size: usize,
    pub lambda_rec: f64,
    pub teacher_forcing: bool,
    pub training: TrainingReport,
    pub l_vq: f64,
    pub l_rec: f64,
    pub l_a: f64,
    pub fingerprint: String,
    pub compression: CompressionReport,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainReport {
    pub seed: u64,
    pub num_utterances: usize,
    pub num_frames: usize,
    pub feature_dim: usize,
    pub bits_per_frame: f64,
    pub codebooks_fingerprint: String,
    pub stages: Vec<StageReport>,
    /// Utterance-averaged stage VQ loss.
    pub l_vq: f64,
    pub l_ms: MsLossReport,
    /// Utterance-averaged mean squared error of `decode` against the training features.
    pub decode_mse: f64,
    pub associate: AssociateReport,
}

#[derive(Debug, Clone, Default)]
pub struct TrainOverrides {
    pub seed: Option<u64>,
    pub reseed_dead: bool,
    pub teacher_forcing: Option<bool>,
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Trains stage codebooks, the decoder and the associate model, then writes the artifacts
/// and `report.json` into `out_dir`.
pub fn cmd_train(
    cfg: &PipelineConfig,
    corpus_dir: &Path,
    out_dir: &Path,
    ov: &TrainOverrides,
    out: &mut dyn Write,
) -> Result<TrainReport> {
    let mut cfg = cfg.clone();
    if let Some(s) = ov.seed {
        cfg.seed = s;
    }
    cfg.ema.reseed_dead |= ov.reseed_dead;
    if let Some(tf) = ov.teacher_forcing {
        cfg.associate.teacher_forcing = tf;
    }
    cfg.validate()?;
    let stages = cfg.stage_config()?;
    let corpus: Vec<FeatureSequence> = load_corpus(corpus_dir)?.into_iter().map(|(_, s)| s).collect();
    for s in &corpus {
        if s.dim() != stages.dim() {
            return Err(Error::Config(format!(
                "stages: configured dimension {} but the corpus has dimension {}",
                stages.dim(),
                s.dim()
            )));
        }
    }
    let num_frames: usize = corpus.iter().map(FeatureSequence::len).sum();
    log::info!("training on {} utterances, {num_frames} frames", corpus.len());

    let mut books = Vec::with_capacity(stages.num_stages());
    let mut stage_reports = Vec::with_capacity(stages.num_stages());
    for (i, spec) in stages.stages().iter().enumerate() {
        let mut rows = Vec::new();
        for s in &corpus {
            rows.extend_from_slice(msmc::downsample_avg(s, spec.rate)?.as_slice());
        }
        let opts = cfg.train_options(spec, cfg.seed.wrapping_add(i as u64));
        let (cb, training) = mhvq::train_codebook(Rows::new(&rows, stages.dim())?, &opts)?;
        let (_, tokens) = mhvq::mean_quantization_error(Rows::new(&rows, stages.dim())?, &cb)?;
        let perplexity = mhvq::codebook_stats(&tokens, spec.codewords)?.iter().map(|u| u.perplexity).collect();
        log::info!("stage {i}: error {:.6} -> {:.6}", training.initial_error, training.final_error);
        stage_reports.push(StageReport {
            rate: spec.rate,
            heads: spec.heads,
            codewords: spec.codewords,
            head_dim: spec.head_dim,
            training,
            perplexity,
            fingerprint: hex::encode(cb.fingerprint()),
        });
        books.push(cb);
    }

    let reps: Vec<Msmcr> = corpus.iter().map(|s| msmc::encode(s, &stages, &books)).collect::<Result<_>>()?;
    let pairs: Vec<(Msmcr, FeatureSequence)> = reps.iter().cloned().zip(corpus.iter().cloned()).collect();
    let decoder = msmc::fit_decoder(&pairs, cfg.ridge_lambda)?;

    let l_vq = mean(
        corpus
            .iter()
            .zip(&reps)
            .map(|(s, m)| msmc::vq_loss(&msmc::stage_inputs(s, &stages)?, m))
            .collect::<Result<Vec<_>>>()?
            .into_iter(),
    );
    let l_ms = ms_loss_report(&reps, &decoder.stage_predictors)?;
    let decode_mse = mean(
        pairs
            .iter()
            .map(|(m, s)| Ok(mean_sq_rows(&msmc::decode(m, &decoder)?, s)))
            .collect::<Result<Vec<_>>>()?
            .into_iter(),
    );

    let a = &cfg.associate;
    let assoc_opts = AssociateFitOptions {
        codewords: a.codebook_size,
        train: TrainOptions {
            heads: 1,
            codewords: a.codebook_size,
            seed: cfg.seed.wrapping_add(stages.num_stages() as u64),
            ..cfg.train_options(&stages.stages()[0], 0)
        },
        ridge_lambda: cfg.ridge_lambda,
        teacher_forcing: a.teacher_forcing,
    };
    let (model, assoc_training) = associate::fit_associate(&reps, &stages, &books, &assoc_opts)?;
    let mut losses = Vec::with_capacity(reps.len());
    let mut compression = Vec::with_capacity(reps.len());
    for m in &reps {
        let code = associate::compress(m, &model)?;
        let recon = associate::reconstruct(&code, &model, &stages, &books)?;
        let pre_q = associate::align_concat(m)?;
        losses.push(associate::associate_loss(&pre_q, &code, &model, &recon, m, a.lambda_rec)?);
        compression.push(associate::compression_report(m, &code));
    }
    let associate_report = AssociateReport {
        codebook_size: a.codebook_size,
        lambda_rec: a.lambda_rec,
        teacher_forcing: a.teacher_forcing,
        training: assoc_training,
        l_vq: mean(losses.iter().map(|l| l.vq)),
        l_rec: mean(losses.iter().map(|l| l.rec)),
        l_a: mean(losses.iter().map(|l| l.total)),
        fingerprint: hex::encode(model.fingerprint()),
        compression: pool_compression(&compression, &reps),
    };

    let books_fp = msmc::books_fingerprint(&books);
    let report = TrainReport {
        seed: cfg.seed,
        num_utterances: corpus.len(),
        num_frames,
        feature_dim: stages.dim(),
        bits_per_frame: stages.bits_per_frame(),
        codebooks_fingerprint: hex::encode(books_fp),
        stages: stage_reports,
        l_vq,
        l_ms,
        decode_mse,
        associate: associate_report,
    };

    fs::create_dir_all(out_dir)?;
    for (i, cb) in books.into_iter().enumerate() {
        let art = CodebookArtifact { codebook: cb, decay: cfg.ema.decay, smoothing_eps: cfg.ema.smoothing_eps };
        fs::write(out_dir.join(stage_file(i)), format::encode_codebook(&art)?)?;
    }
    fs::write(out_dir.join(DECODER_FILE), format::encode_decoder(&stages, &books_fp, &decoder)?)?;
    fs::write(out_dir.join(ASSOCIATE_FILE), format::encode_associate(&model)?)?;
    fs::write(out_dir.join(CONFIG_FILE), cfg.to_toml_string())?;
    let json = serde_json::to_string_pretty(&report).map_err(|e| Error::InvalidInput(e.to_string()))?;
    fs::write(out_dir.join(REPORT_FILE), json + "\n")?;

    write_report_line(out, "bits_per_frame", report.bits_per_frame)?;
    write_report_line(out, "L_vq", report.l_vq)?;
    write_report_line(out, "L_ms", report.l_ms.fitted)?;
    write_report_line(out, "L_ms_zero", report.l_ms.zero_predictor)?;
    write_report_line(out, "L_a", report.associate.l_a)?;
    write_report_line(out, "compression_ratio", report.associate.compression.ratio)?;
    Ok(report)
}

fn mean_sq_rows(a: &FeatureSequence, b: &FeatureSequence) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    let sq: f64 = a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| (x - y) * (x - y)).sum();
    sq / a.len() as f64
}

/// `L_ms` with the fitted predictors, an all-zero output and a bias-only predictor
/// (the per-stage corpus mean).
fn ms_loss_report(reps: &[Msmcr], predictors: &[LinearPredictor]) -> Result<MsLossReport> {
    let s = reps.first().map_or(0, Msmcr::num_stages);
    if s <= 1 {
        return Ok(MsLossReport { fitted: 0.0, zero_predictor: 0.0, bias_only: 0.0, degenerate: true });
    }
    let bias_only: Vec<LinearPredictor> = (0..s - 1)
        .map(|j| {
            let d = reps[0].stages[j].quantized.dim();
            let (mut sum, mut n) = (vec![0.0; d], 0usize);
            for m in reps {
                for f in m.stages[j].quantized.frames() {
                    sum.iter_mut().zip(f).for_each(|(a, b)| *a += b);
                    n += 1;
                }
            }
            let bias = sum.into_iter().map(|v| if n > 0 { v / n as f64 } else { 0.0 }).collect();
            LinearPredictor::constant(predictors[j].in_dim(), bias)
        })
        .collect::<Result<_>>()?;
    let zero: Vec<LinearPredictor> = predictors
        .iter()
        .map(|p| LinearPredictor::constant(p.in_dim(), vec![0.0; p.out_dim()]))
        .collect::<Result<_>>()?;
    let eval = |ps: &[LinearPredictor]| -> Result<f64> {
        let vals = reps
            .iter()
            .map(|m| Ok(msmc::ms_loss(&msmc::predict_lower_stages(m, ps)?, m)?.value))
            .collect::<Result<Vec<_>>>()?;
        Ok(mean(vals.into_iter()))
    };
    Ok(MsLossReport {
        fitted: eval(predictors)?,
        zero_predictor: eval(&zero)?,
        bias_only: eval(&bias_only)?,
        degenerate: false,
    })
}

fn pool_compression(parts: &[CompressionReport], reps: &[Msmcr]) -> CompressionReport {
    let msmcr_bits: f64 = parts.iter().map(|c| c.msmcr_bits).sum();
    let code_bits: f64 = parts.iter().map(|c| c.code_bits).sum();
    let seconds: f64 = reps.iter().map(|m| m.base_len() as f64 * m.frame_shift_ms / 1000.0).sum();
    let per_second = |bits: f64| if seconds > 0.0 { bits / seconds } else { 0.0 };
    CompressionReport {
        msmcr_bits,
        code_bits,
        ratio: if code_bits > 0.0 { msmcr_bits / code_bits } else { 0.0 },
        msmcr_bits_per_second: per_second(msmcr_bits),
        code_bits_per_second: per_second(code_bits),
    }
}

/// Feature files to MSMCR token files.
pub fn cmd_encode(artifacts: &Path, input: &Path, out_dir: &Path, out: &mut dyn Write) -> Result<()> {
    let art = load_artifacts(artifacts)?;
    let books = art.codebooks();
    let fp = msmc::books_fingerprint(&books);
    fs::create_dir_all(out_dir)?;
    for path in collect_inputs(input, FEATURE_EXT)? {
        let seq = format::read_feature_file(&path)?;
        let m = msmc::encode(&seq, &art.stages, &books)?;
        fs::write(output_path(out_dir, &path, MSMCR_EXT), format::encode_msmcr(&m, &fp)?)?;
        writeln!(out, "{}\ttokens\t{}", stem(&path), m.token_count())?;
    }
    Ok(())
}

fn read_msmcr(path: &Path, art: &Artifacts, books: &[MultiHeadCodebook]) -> Result<Msmcr> {
    format::decode_msmcr(&fs::read(path)?)?.resolve(&art.stages, books)
}

/// MSMCR token files back to feature files through the fitted decode head.
pub fn cmd_decode(artifacts: &Path, input: &Path, out_dir: &Path, out: &mut dyn Write) -> Result<()> {
    let art = load_artifacts(artifacts)?;
    let books = art.codebooks();
    fs::create_dir_all(out_dir)?;
    for path in collect_inputs(input, MSMCR_EXT)? {
        let m = read_msmcr(&path, &art, &books)?;
        let seq = msmc::decode(&m, &art.decoder)?.with_kind(FeatureKind::Upstream);
        format::write_feature_file(output_path(out_dir, &path, FEATURE_EXT), &seq)?;
        writeln!(out, "{}\tframes\t{}", stem(&path), seq.len())?;
    }
    Ok(())
}

/// MSMCR token files to compact codes.
pub fn cmd_compress(artifacts: &Path, input: &Path, out_dir: &Path, out: &mut dyn Write) -> Result<()> {
    let art = load_artifacts(artifacts)?;
    let books = art.codebooks();
    fs::create_dir_all(out_dir)?;
    for path in collect_inputs(input, MSMCR_EXT)? {
        let m = read_msmcr(&path, &art, &books)?;
        let code = associate::compress(&m, &art.associate)?;
        fs::write(output_path(out_dir, &path, CODE_EXT), format::encode_code(&code)?)?;
        let r = associate::compression_report(&m, &code);
        writeln!(out, "{}\tratio\t{:.6}", stem(&path), r.ratio)?;
    }
    Ok(())
}

/// Compact codes back to MSMCR token files. With `reference`, a directory (or file) of
/// the original MSMCR files, prints `L_rec/<utterance>` for every code.
pub fn cmd_reconstruct(
    artifacts: &Path,
    input: &Path,
    out_dir: &Path,
    reference: Option<&Path>,
    out: &mut dyn Write,
) -> Result<()> {
    let art = load_artifacts(artifacts)?;
    let books = art.codebooks();
    let fp = msmc::books_fingerprint(&books);
    fs::create_dir_all(out_dir)?;
    let mut l_rec = Vec::new();
    for path in collect_inputs(input, CODE_EXT)? {
        let code = format::decode_code(&fs::read(&path)?)?;
        let recon = associate::reconstruct(&code, &art.associate, &art.stages, &books)?;
        fs::write(output_path(out_dir, &path, MSMCR_EXT), format::encode_msmcr(&recon, &fp)?)?;
        if let Some(r) = reference {
            let ref_path = if r.is_dir() { r.join(format!("{}.{MSMCR_EXT}", stem(&path))) } else { r.to_path_buf() };
            let target = read_msmcr(&ref_path, &art, &books)?;
            let v = associate::reconstruction_loss(&recon, &target)?;
            if !v.is_finite() {
                return Err(Error::Numeric(format!("{}: reconstruction loss is not finite", stem(&path))));
            }
            write_report_line(out, &format!("L_rec/{}", stem(&path)), v)?;
            l_rec.push(v);
        }
    }
    if !l_rec.is_empty() {
        write_report_line(out, "L_rec/mean", mean(l_rec.into_iter()))?;
    }
    Ok(())
}

fn pooled_rows(path: &Path) -> Result<(Vec<f64>, usize)> {
    let mut rows = Vec::new();
    let mut dim = None;
    for p in collect_inputs(path, FEATURE_EXT)? {
        let s = format::read_feature_file(&p)?;
        if *dim.get_or_insert(s.dim()) != s.dim() {
            return Err(Error::InvalidInput(format!("{}: dimension {} differs from earlier files", p.display(), s.dim())));
        }
        rows.extend_from_slice(s.as_slice());
    }
    let dim = dim.ok_or_else(|| Error::InsufficientData(format!("{}: no feature files", path.display())))?;
    Ok((rows, dim))
}

/// Frechet distance between the pooled frames of two feature files or directories.
pub fn cmd_eval_fd(a: &Path, b: &Path, scale: f64, out: &mut dyn Write) -> Result<f64> {
    let (ra, da) = pooled_rows(a)?;
    let (rb, db) = pooled_rows(b)?;
    let sa = metrics::gaussian_stats(Rows::new(&ra, da)?)?;
    let sb = metrics::gaussian_stats(Rows::new(&rb, db)?)?;
    let fd = metrics::frechet_distance(&sa, &sb, scale)?;
    write_report_line(out, "fd", fd)?;
    Ok(fd)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorUnit {
    Char,
    Word,
}

/// Pooled error rate between two transcript files, one utterance per line.
pub fn cmd_eval_er(reference: &Path, hypothesis: &Path, unit: ErrorUnit, out: &mut dyn Write) -> Result<f64> {
    let read = |p: &Path| -> Result<Vec<String>> {
        Ok(fs::read_to_string(p)?.lines().map(str::to_owned).collect())
    };
    let r = read(reference)?;
    let h = read(hypothesis)?;
    if r.len() != h.len() {
        return Err(Error::InvalidInput(format!("{} reference lines vs {} hypothesis lines", r.len(), h.len())));
    }
    let tok = |s: &str| match unit {
        ErrorUnit::Char => TokenSequence::chars(s),
        ErrorUnit::Word => TokenSequence::words(s),
    };
    let pairs: Vec<_> = r.iter().zip(&h).map(|(a, b)| (tok(a), tok(b))).collect();
    let er = metrics::corpus_error_rate(&pairs)?;
    write_report_line(out, "er", er)?;
    Ok(er)
}

/// Frame-weighted mean MCD over pairs of feature files matched by name.
pub fn cmd_eval_mcd(a: &Path, b: &Path, out: &mut dyn Write) -> Result<f64> {
    let files = collect_inputs(a, FEATURE_EXT)?;
    if files.is_empty() {
        return Err(Error::InsufficientData(format!("{}: no feature files", a.display())));
    }
    let (mut total, mut frames) = (0.0, 0usize);
    for fa in files {
        let fb = if b.is_dir() { b.join(fa.file_name().expect("file name")) } else { b.to_path_buf() };
        let sa = format::read_feature_file(&fa)?;
        let sb = format::read_feature_file(&fb)?;
        total += dsp::mel_cepstral_distortion(&sa, &sb)? * sa.len() as f64;
        frames += sa.len();
    }
    let mcd = total / frames as f64;
    write_report_line(out, "mcd", mcd)?;
    Ok(mcd)
}

/// Per-stage, per-head token perplexity over MSMCR files.
pub fn cmd_stats(artifacts: &Path, input: &Path, out: &mut dyn Write) -> Result<()> {
    let art = load_artifacts(artifacts)?;
    let books = art.codebooks();
    let reps = collect_inputs(input, MSMCR_EXT)?
        .iter()
        .map(|p| read_msmcr(p, &art, &books))
        .collect::<Result<Vec<_>>>()?;
    write_report_line(out, "bits_per_frame", art.stages.bits_per_frame())?;
    for (i, spec) in art.stages.stages().iter().enumerate() {
        let mut data = Vec::new();
        for m in &reps {
            data.extend_from_slice(m.stages[i].tokens.as_slice());
        }
        let tokens = mhvq::TokenMatrix::new(spec.heads, data)?;
        for (h, u) in mhvq::codebook_stats(&tokens, spec.codewords)?.iter().enumerate() {
            write_report_line(out, &format!("stage{i}.head{h}.perplexity"), u.perplexity)?;
        }
    }
    Ok(())
}

fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()
}

fn random_outputs(rng: &mut ChaCha8Rng, layers: usize) -> DiscriminatorOutputs {
    DiscriminatorOutputs {
        subs: (0..3)
            .map(|k| SubDiscriminator {
                scores: random_vec(rng, 4 + k),
                features: (0..layers).map(|l| random_vec(rng, 3 + l)).collect(),
            })
            .collect(),
    }
}

fn with_scores(template: &DiscriminatorOutputs, flat: &[f64]) -> DiscriminatorOutputs {
    let mut out = template.clone();
    let mut it = flat.iter().copied();
    for s in &mut out.subs {
        s.scores.iter_mut().for_each(|v| *v = it.next().expect("enough values"));
    }
    out
}

fn with_features(template: &DiscriminatorOutputs, flat: &[f64]) -> DiscriminatorOutputs {
    let mut out = template.clone();
    let mut it = flat.iter().copied();
    for s in &mut out.subs {
        for l in &mut s.features {
            l.iter_mut().for_each(|v| *v = it.next().expect("enough values"));
        }
    }
    out
}

fn flat_scores(d: &DiscriminatorOutputs) -> Vec<f64> {
    d.subs.iter().flat_map(|s| s.scores.iter().copied()).collect()
}

fn flat_features(d: &DiscriminatorOutputs) -> Vec<f64> {
    d.subs.iter().flat_map(|s| s.features.iter().flatten().copied()).collect()
}

fn seq(v: Vec<f64>, dim: usize, shift: f64) -> Result<FeatureSequence> {
    FeatureSequence::new(v, dim, shift, FeatureKind::Stage)
}

fn split_flat(flat: &[f64], shapes: &[(usize, usize, f64)]) -> Result<Vec<FeatureSequence>> {
    let mut off = 0;
    shapes
        .iter()
        .map(|&(t, d, shift)| {
            let s = seq(flat[off..off + t * d].to_vec(), d, shift);
            off += t * d;
            s
        })
        .collect()
}

/// Central-difference checks of every differentiable loss at `points` random points each.
/// Coordinates within `h` of an L1 kink are skipped.
pub fn gradcheck_suite(seed: u64, points: usize, h: f64) -> Result<Vec<(String, GradCheckReport)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kink = 1e-6 + h;
    let mut worst: Vec<(String, GradCheckReport)> = Vec::new();
    let mut record = |name: &str, r: GradCheckReport| {
        match worst.iter_mut().find(|(n, _)| n == name) {
            Some((_, w)) => {
                let checked = w.checked + r.checked;
                if r.max_rel_error > w.max_rel_error {
                    *w = r;
                }
                w.checked = checked;
            }
            None => worst.push((name.to_owned(), r)),
        }
    };
    let stages = StageConfig::new(vec![
        msmc::StageSpec { rate: 1, heads: 2, codewords: 4, head_dim: 2 },
        msmc::StageSpec { rate: 2, heads: 2, codewords: 4, head_dim: 2 },
    ])?;
    for _ in 0..points {
        let real = random_outputs(&mut rng, 2);
        let fake = random_outputs(&mut rng, 2);
        record(
            "discriminator",
            losses::grad_check(
                |x| {
                    let (v, g) = losses::discriminator_loss(&real, &with_scores(&fake, x))?;
                    Ok((v, g.concat()))
                },
                &flat_scores(&fake),
                h,
            )?,
        );
        record(
            "adversarial",
            losses::grad_check(
                |x| {
                    let (v, g) = losses::adversarial_loss(&with_scores(&fake, x))?;
                    Ok((v, g.concat()))
                },
                &flat_scores(&fake),
                h,
            )?,
        );
        let rf = flat_features(&real);
        let ff = flat_features(&fake);
        record(
            "feature_matching",
            losses::grad_check_masked(
                |x| {
                    let (v, g) = losses::feature_matching_loss(&real, &with_features(&fake, x))?;
                    Ok((v, g.into_iter().flatten().flatten().collect()))
                },
                &ff,
                h,
                |i| (ff[i] - rf[i]).abs() < kink,
            )?,
        );

        let x = seq(random_vec(&mut rng, 12), 3, 12.5)?;
        let xh = random_vec(&mut rng, 12);
        record(
            "mel",
            losses::grad_check_masked(
                |p| losses::mel_loss(&x, &seq(p.to_vec(), 3, 12.5)?),
                &xh,
                h,
                |i| (xh[i] - x.as_slice()[i]).abs() < kink,
            )?,
        );
        record("frame", losses::grad_check(|p| losses::frame_loss(&x, &seq(p.to_vec(), 3, 12.5)?), &xh, h)?);
        let d = random_vec(&mut rng, 7);
        record("duration", losses::grad_check(|p| losses::duration_loss(&d, p), &random_vec(&mut rng, 7), h)?);

        let books: Vec<MultiHeadCodebook> = stages
            .stages()
            .iter()
            .map(|s| MultiHeadCodebook::new(s.heads, s.codewords, s.head_dim, random_vec(&mut rng, s.heads * s.codewords * s.head_dim)))
            .collect::<Result<_>>()?;
        let t = rng.random_range(1..8usize);
        let input = seq(random_vec(&mut rng, t * 4), 4, 12.5)?;
        let m = msmc::encode(&input, &stages, &books)?;
        let pre = msmc::stage_inputs(&input, &stages)?;
        let shapes: Vec<(usize, usize, f64)> = pre.iter().map(|p| (p.len(), p.dim(), p.frame_shift_ms())).collect();
        let flat: Vec<f64> = pre.iter().flat_map(|p| p.as_slice().iter().copied()).collect();
        record(
            "vq",
            losses::grad_check(
                |p| {
                    let (v, g) = msmc::vq_loss_with_grad(&split_flat(p, &shapes)?, &m)?;
                    Ok((v, g.concat()))
                },
                &flat,
                h,
            )?,
        );
        let pred_shape = [shapes[0]];
        let pred = random_vec(&mut rng, shapes[0].0 * shapes[0].1);
        record(
            "ms",
            losses::grad_check(
                |p| {
                    let (v, g) = msmc::ms_loss_with_grad(&split_flat(p, &pred_shape)?, &m)?;
                    Ok((v, g.concat()))
                },
                &pred,
                h,
            )?,
        );
    }
    Ok(worst)
}

/// Runs [`gradcheck_suite`] and fails with a numeric error when any loss exceeds the
/// tolerance.
pub fn cmd_gradcheck(seed: u64, points: usize, out: &mut dyn Write) -> Result<()> {
    let reports = gradcheck_suite(seed, points, 1e-4)?;
    let mut failed = Vec::new();
    for (name, r) in &reports {
        writeln!(out, "{name}\t{:.3e}", r.max_rel_error)?;
        if r.max_rel_error >= GRADCHECK_TOLERANCE {
            failed.push(name.as_str());
        }
    }
    if !failed.is_empty() {
        return Err(Error::Numeric(format!("gradient check failed for {}", failed.join(", "))));
    }
    Ok(())
}
