//! Multi-stage multi-codebook vector quantization for speech feature sequences.
//!
//! The crate is organised bottom-up:
//!
//! * [`dsp`]: waveform front end (pre-emphasis, STFT, log-mel) and mel-cepstral distortion.
//! * [`mhvq`]: multi-head (product) codebooks, nearest-codeword search and EMA training.
//! * [`msmc`]: stage resampling, per-stage quantization, cross-stage linear prediction,
//!   encode/decode of the multi-stage representation and its stage losses.
//! * [`associate`]: compression of a multi-stage representation into one compact token
//!   sequence plus an utterance embedding, and cascaded reconstruction.
//! * [`losses`]: generator/discriminator/frame/duration losses with analytic gradients.
//! * [`metrics`]: Fréchet distance between embedding sets, edit-distance error rates.
//! * [`pipeline`]: binary file formats, configuration, synthetic corpora and CLI commands.
//!
//! ```
//! use msvq::{mhvq, msmc, pipeline, Rows};
//!
//! # fn main() -> msvq::Result<()> {
//! let spec = pipeline::SyntheticSpec { num_utterances: 4, ..Default::default() };
//! let corpus = pipeline::gen_synthetic(&spec)?;
//! let cfg = msmc::StageConfig::default();
//!
//! // Each stage trains on the corpus as that stage sees it.
//! let mut books = Vec::new();
//! for (i, stage) in cfg.stages().iter().enumerate() {
//!     let mut rows = Vec::new();
//!     for utt in &corpus.utterances {
//!         rows.extend_from_slice(msmc::stage_inputs(utt, &cfg)?[i].as_slice());
//!     }
//!     let opts = mhvq::TrainOptions {
//!         heads: stage.heads,
//!         codewords: stage.codewords,
//!         epochs: 2,
//!         seed: i as u64,
//!         ..Default::default()
//!     };
//!     books.push(mhvq::train_codebook(Rows::new(&rows, stage.total_dim())?, &opts)?.0);
//! }
//!
//! // 80 frames at 24 bits plus 20 frames at 24 bits.
//! let rep = msmc::encode(&corpus.utterances[0], &cfg, &books)?;
//! assert_eq!(rep.bits(), 2400.0);
//! # Ok(())
//! # }
//! ```

pub mod associate;
pub mod dsp;
mod error;
mod features;
pub mod losses;
pub mod metrics;
pub mod mhvq;
pub mod msmc;
pub mod pipeline;
mod predictor;

pub use error::{Error, Result};
pub use features::{FeatureKind, FeatureSequence, Rows};
pub use predictor::LinearPredictor;
