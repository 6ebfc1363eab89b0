//! Little-endian binary formats.
//!
//! Feature file (`.msfq`):
//!
//! ```text
//! magic "MSFQ" | version u32 | kind u8 | T u32 | D u32 | frame_shift_us u32 | T*D f32 (row-major)
//! ```
//!
//! Model artifacts (codebooks, predictors, associate model) store parameters as f64 so
//! a reload reproduces the in-memory model exactly. Token files carry the fingerprint
//! of the model that produced them.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use crate::associate::{AssociateModel, CompactCode};
use crate::mhvq::{MultiHeadCodebook, TokenMatrix};
use crate::msmc::{MsmcDecoder, Msmcr, StageConfig, StageSpec};
use crate::{Error, FeatureKind, FeatureSequence, LinearPredictor, Result};

pub const FORMAT_VERSION: u32 = 1;
pub const FEATURE_MAGIC: [u8; 4] = *b"MSFQ";
pub const CODEBOOK_MAGIC: [u8; 4] = *b"MSCB";
pub const DECODER_MAGIC: [u8; 4] = *b"MSDC";
pub const ASSOCIATE_MAGIC: [u8; 4] = *b"MSAM";
pub const MSMCR_MAGIC: [u8; 4] = *b"MSMR";
pub const CODE_MAGIC: [u8; 4] = *b"MSCC";

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new(magic: [u8; 4]) -> Self {
        let mut w = Self { buf: Vec::new() };
        w.buf.extend_from_slice(&magic);
        w.u32(FORMAT_VERSION);
        w
    }

    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn len(&mut self, v: usize) -> Result<()> {
        let v = u32::try_from(v).map_err(|_| Error::InvalidInput(format!("{v} does not fit in 32 bits")))?;
        self.u32(v);
        Ok(())
    }

    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f64s(&mut self, v: &[f64]) {
        v.iter().for_each(|x| self.f64(*x));
    }

    fn bytes(&mut self, v: &[u8]) {
        self.buf.extend_from_slice(v);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8], magic: [u8; 4]) -> Result<Self> {
        let mut r = Self { buf, pos: 0 };
        let found: [u8; 4] = r.take(4, "magic")?.try_into().expect("4 bytes");
        if found != magic {
            return Err(Error::BadMagic { expected: magic, found });
        }
        let version = r.u32("version")?;
        if version != FORMAT_VERSION {
            return Err(Error::VersionMismatch { found: version, expected: FORMAT_VERSION });
        }
        Ok(r)
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::TruncatedPayload(format!("{what}: need {n} bytes at offset {}, file has {}", self.pos, self.buf.len()))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn len(&mut self, what: &str) -> Result<usize> {
        Ok(self.u32(what)? as usize)
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::InvalidInput(format!("{what}: size overflow")))?, what)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }

    fn fingerprint(&mut self) -> Result<[u8; 32]> {
        Ok(self.take(32, "fingerprint")?.try_into().expect("32 bytes"))
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::InvalidInput(format!("{} trailing bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

fn frame_shift_to_us(ms: f64) -> Result<u32> {
    let us = (ms * 1000.0).round();
    if !(us >= 1.0 && us <= f64::from(u32::MAX)) {
        return Err(Error::InvalidInput(format!("frame shift {ms} ms cannot be stored in microseconds")));
    }
    Ok(us as u32)
}

pub fn encode_features(seq: &FeatureSequence) -> Result<Vec<u8>> {
    let mut w = Writer::new(FEATURE_MAGIC);
    w.u8(seq.kind().code());
    w.len(seq.len())?;
    w.len(seq.dim())?;
    w.u32(frame_shift_to_us(seq.frame_shift_ms())?);
    for v in seq.as_slice() {
        w.bytes(&(*v as f32).to_le_bytes());
    }
    Ok(w.buf)
}

pub fn decode_features(bytes: &[u8]) -> Result<FeatureSequence> {
    let mut r = Reader::new(bytes, FEATURE_MAGIC)?;
    let code = r.u8("kind")?;
    let kind = FeatureKind::from_code(code).ok_or_else(|| Error::InvalidInput(format!("unknown kind code {code}")))?;
    let t = r.len("T")?;
    let d = r.len("D")?;
    let shift_us = r.u32("frame_shift_us")?;
    let n = t.checked_mul(d).and_then(|n| n.checked_mul(4)).ok_or_else(|| Error::InvalidInput("T*D overflows".into()))?;
    let payload = r.take(n, "payload")?;
    r.finish()?;
    let data = payload
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
        .collect();
    FeatureSequence::new(data, d, f64::from(shift_us) / 1000.0, kind)
}

pub fn write_feature_file(path: impl AsRef<Path>, seq: &FeatureSequence) -> Result<()> {
    fs::write(path, encode_features(seq)?)?;
    Ok(())
}

pub fn read_feature_file(path: impl AsRef<Path>) -> Result<FeatureSequence> {
    decode_features(&fs::read(path)?)
}

pub fn read_features_from(mut r: impl Read) -> Result<FeatureSequence> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    decode_features(&buf)
}

pub fn write_features_to(mut w: impl Write, seq: &FeatureSequence) -> io::Result<()> {
    let bytes = encode_features(seq).map_err(|e| io::Error::new(io::ErrorKind::InvalidInput, e.to_string()))?;
    w.write_all(&bytes)
}

/// Codebook with the EMA hyperparameters it was trained with.
#[derive(Debug, Clone, PartialEq)]
pub struct CodebookArtifact {
    pub codebook: MultiHeadCodebook,
    pub decay: f64,
    pub smoothing_eps: f64,
}

pub fn encode_codebook(a: &CodebookArtifact) -> Result<Vec<u8>> {
    let mut w = Writer::new(CODEBOOK_MAGIC);
    w.len(a.codebook.heads())?;
    w.len(a.codebook.codewords())?;
    w.len(a.codebook.head_dim())?;
    w.f64(a.decay);
    w.f64(a.smoothing_eps);
    w.f64s(a.codebook.as_slice());
    Ok(w.buf)
}

pub fn decode_codebook(bytes: &[u8]) -> Result<CodebookArtifact> {
    let mut r = Reader::new(bytes, CODEBOOK_MAGIC)?;
    let h = r.len("H")?;
    let k = r.len("K")?;
    let d = r.len("d")?;
    let decay = r.f64("decay")?;
    let smoothing_eps = r.f64("smoothing_eps")?;
    let n = h.checked_mul(k).and_then(|n| n.checked_mul(d)).ok_or_else(|| Error::InvalidInput("codebook size overflows".into()))?;
    let data = r.f64s(n, "codewords")?;
    r.finish()?;
    Ok(CodebookArtifact { codebook: MultiHeadCodebook::new(h, k, d, data)?, decay, smoothing_eps })
}

fn put_predictor(w: &mut Writer, p: &LinearPredictor) -> Result<()> {
    w.len(p.in_dim())?;
    w.len(p.out_dim())?;
    w.f64(p.ridge_lambda());
    w.f64s(p.weight());
    w.f64s(p.bias());
    Ok(())
}

fn get_predictor(r: &mut Reader<'_>) -> Result<LinearPredictor> {
    let din = r.len("predictor in_dim")?;
    let dout = r.len("predictor out_dim")?;
    let lambda = r.f64("ridge_lambda")?;
    let weight = r.f64s(din.saturating_mul(dout), "predictor weight")?;
    let bias = r.f64s(dout, "predictor bias")?;
    LinearPredictor::new(weight, bias, din, lambda)
}

fn put_stages(w: &mut Writer, cfg: &StageConfig) -> Result<()> {
    w.len(cfg.num_stages())?;
    for s in cfg.stages() {
        w.len(s.rate)?;
        w.len(s.heads)?;
        w.len(s.codewords)?;
        w.len(s.head_dim)?;
    }
    Ok(())
}

fn get_stages(r: &mut Reader<'_>) -> Result<StageConfig> {
    let n = r.len("stage count")?;
    let stages = (0..n)
        .map(|_| {
            Ok(StageSpec {
                rate: r.len("rate")?,
                heads: r.len("heads")?,
                codewords: r.len("codewords")?,
                head_dim: r.len("head_dim")?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    StageConfig::new(stages)
}

/// Decoder artifact: the stage layout, the fingerprint of the stage codebooks it was
/// fitted against, cross-stage predictors and the output head.
pub fn encode_decoder(cfg: &StageConfig, books_fp: &[u8; 32], dec: &MsmcDecoder) -> Result<Vec<u8>> {
    let mut w = Writer::new(DECODER_MAGIC);
    put_stages(&mut w, cfg)?;
    w.bytes(books_fp);
    w.len(dec.stage_predictors.len())?;
    for p in &dec.stage_predictors {
        put_predictor(&mut w, p)?;
    }
    put_predictor(&mut w, &dec.head)?;
    Ok(w.buf)
}

pub fn decode_decoder(bytes: &[u8]) -> Result<(StageConfig, [u8; 32], MsmcDecoder)> {
    let mut r = Reader::new(bytes, DECODER_MAGIC)?;
    let cfg = get_stages(&mut r)?;
    let fp = r.fingerprint()?;
    let n = r.len("predictor count")?;
    let stage_predictors = (0..n).map(|_| get_predictor(&mut r)).collect::<Result<Vec<_>>>()?;
    let head = get_predictor(&mut r)?;
    r.finish()?;
    Ok((cfg, fp, MsmcDecoder { stage_predictors, head }))
}

pub fn encode_associate(m: &AssociateModel) -> Result<Vec<u8>> {
    let mut w = Writer::new(ASSOCIATE_MAGIC);
    let cb = &m.codebook;
    w.len(cb.heads())?;
    w.len(cb.codewords())?;
    w.len(cb.head_dim())?;
    w.f64s(cb.as_slice());
    put_predictor(&mut w, &m.projector)?;
    w.len(m.stage_predictors.len())?;
    for p in &m.stage_predictors {
        put_predictor(&mut w, p)?;
    }
    w.u8(u8::from(m.teacher_forcing));
    Ok(w.buf)
}

pub fn decode_associate(bytes: &[u8]) -> Result<AssociateModel> {
    let mut r = Reader::new(bytes, ASSOCIATE_MAGIC)?;
    let h = r.len("H")?;
    let k = r.len("K")?;
    let d = r.len("d")?;
    let data = r.f64s(h.saturating_mul(k).saturating_mul(d), "codewords")?;
    let codebook = MultiHeadCodebook::new(h, k, d, data)?;
    let projector = get_predictor(&mut r)?;
    let n = r.len("predictor count")?;
    let stage_predictors = (0..n).map(|_| get_predictor(&mut r)).collect::<Result<Vec<_>>>()?;
    let teacher_forcing = r.u8("teacher_forcing")? != 0;
    r.finish()?;
    AssociateModel::new(codebook, projector, stage_predictors, teacher_forcing)
}

/// Token-level MSMCR file: the codebook-set fingerprint, stage-1 frame shift and, per
/// stage, `(rate, K, H, T)` followed by `T*H` u32 tokens.
pub fn encode_msmcr(m: &Msmcr, books_fp: &[u8; 32]) -> Result<Vec<u8>> {
    let mut w = Writer::new(MSMCR_MAGIC);
    w.bytes(books_fp);
    w.u32(frame_shift_to_us(m.frame_shift_ms)?);
    w.len(m.num_stages())?;
    for s in &m.stages {
        w.len(s.rate)?;
        w.len(s.codewords)?;
        w.len(s.tokens.heads())?;
        w.len(s.tokens.len())?;
        s.tokens.as_slice().iter().for_each(|&t| w.u32(t));
    }
    Ok(w.buf)
}

/// Token matrices of an MSMCR file, before they are matched against codebooks.
#[derive(Debug, Clone, PartialEq)]
pub struct MsmcrTokens {
    pub fingerprint: [u8; 32],
    pub frame_shift_ms: f64,
    /// `(rate, codewords, tokens)` per stage.
    pub stages: Vec<(usize, usize, TokenMatrix)>,
}

impl MsmcrTokens {
    /// Rebuilds the representation, refusing codebooks with a different fingerprint.
    pub fn resolve(self, cfg: &StageConfig, books: &[MultiHeadCodebook]) -> Result<Msmcr> {
        let want = crate::msmc::books_fingerprint(books);
        if want != self.fingerprint {
            return Err(Error::FingerprintMismatch { expected: hex::encode(want), found: hex::encode(self.fingerprint) });
        }
        for (i, ((rate, k, _), spec)) in self.stages.iter().zip(cfg.stages()).enumerate() {
            if (*rate, *k) != (spec.rate, spec.codewords) {
                return Err(Error::Config(format!("stage {i} layout does not match the configuration")));
            }
        }
        let tokens = self.stages.into_iter().map(|(_, _, t)| t).collect();
        Msmcr::from_tokens(tokens, cfg, books, self.frame_shift_ms)
    }
}

pub fn decode_msmcr(bytes: &[u8]) -> Result<MsmcrTokens> {
    let mut r = Reader::new(bytes, MSMCR_MAGIC)?;
    let fingerprint = r.fingerprint()?;
    let frame_shift_ms = f64::from(r.u32("frame_shift_us")?) / 1000.0;
    let s = r.len("stage count")?;
    let mut stages = Vec::with_capacity(s.min(64));
    for _ in 0..s {
        let rate = r.len("rate")?;
        let k = r.len("codewords")?;
        let h = r.len("heads")?;
        let t = r.len("T")?;
        let data = (0..t.saturating_mul(h)).map(|_| r.u32("token")).collect::<Result<Vec<_>>>()?;
        if let Some(bad) = data.iter().find(|&&v| v as usize >= k) {
            return Err(Error::InvalidIndex { index: *bad as usize, bound: k });
        }
        stages.push((rate, k, TokenMatrix::new(h.max(1), data)?));
    }
    r.finish()?;
    Ok(MsmcrTokens { fingerprint, frame_shift_ms, stages })
}

pub fn encode_code(c: &CompactCode) -> Result<Vec<u8>> {
    let mut w = Writer::new(CODE_MAGIC);
    w.bytes(&c.fingerprint);
    w.u32(frame_shift_to_us(c.frame_shift_ms)?);
    w.len(c.codewords)?;
    w.len(c.tokens.len())?;
    c.tokens.iter().for_each(|&t| w.u32(t));
    w.len(c.global_embedding.len())?;
    w.f64s(&c.global_embedding);
    Ok(w.buf)
}

pub fn decode_code(bytes: &[u8]) -> Result<CompactCode> {
    let mut r = Reader::new(bytes, CODE_MAGIC)?;
    let fingerprint = r.fingerprint()?;
    let frame_shift_ms = f64::from(r.u32("frame_shift_us")?) / 1000.0;
    let codewords = r.len("codewords")?;
    let t = r.len("T")?;
    let tokens = (0..t).map(|_| r.u32("token")).collect::<Result<Vec<_>>>()?;
    if let Some(bad) = tokens.iter().find(|&&v| v as usize >= codewords) {
        return Err(Error::InvalidIndex { index: *bad as usize, bound: codewords });
    }
    let e = r.len("embedding dim")?;
    let global_embedding = r.f64s(e, "embedding")?;
    r.finish()?;
    Ok(CompactCode { tokens, codewords, fingerprint, global_embedding, frame_shift_ms })
}
