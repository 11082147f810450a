//! Holistic dyadic motion generation.
//!
//! Speaker and listener motion (face, body, hand) is generated jointly from
//! verbal features. Per-part VQ-VAEs turn motion into code indices, and a
//! chain-ordered autoregressive transformer predicts the interleaved
//! speaker/listener index stream. The speaker face is regressed directly.
//!
//! - [`tensorio`]: `MTSR` tensor files, clip manifests, checkpoint bundles
//! - [`features`]: log-mel frames, decoupled energy/pitch/style, assemblies
//! - [`vqvae`]: per-part motion autoencoders with vector quantization
//! - [`facereg`]: speaker expression regression
//! - [`dyadgen`]: token streams, attention masks, generator and sampling
//! - [`metrics`]: L2, LVD, FGD, BC, Variation, CCC, TLCC
//! - [`synthdata`]: synthetic corpora with known speaker-to-listener coupling

pub mod dyadgen;
pub mod error;
pub mod facereg;
pub mod features;
pub mod metrics;
pub mod motion;
pub mod nn;
pub mod synthdata;
pub mod tensorio;
pub mod vqvae;

mod corpus;

pub use corpus::{load_corpus, save_corpus, split_corpus};
pub use error::{Error, Result};
pub use motion::{DyadicClip, MotionSequence, Part, PartDims, Role, Stream};
