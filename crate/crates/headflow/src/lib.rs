//! Mechanistic attribution of image-to-text information flow in toy
//! multimodal decoder-only transformers.
//!
//! The toolkit answers two questions about a model that reads a block of
//! continuous image-token embeddings followed by a text prompt:
//!
//! 1. **Which attention heads carry image information into the text side?**
//!    Heads are knocked out in random subsets by *mean ablation* — the image
//!    K/V block a head shows to text queries is replaced by a calibration
//!    average — and a sparse linear model is fit from ablation masks to the
//!    model's (normalized) target logit. The fitted coefficients are per-head
//!    contributions; they are validated by faithfulness/completeness curves
//!    against random, attention-weight, and single-knockout rankings.
//! 2. **Through which token positions does that information flow?** With the
//!    important heads fixed, the same machinery masks text rows and image
//!    columns of the attention pattern, yielding per-token effects, an
//!    image-token attribution grid, and an attention map reweighted by both.
//!
//! Everything is built around an *oracle*: a function from ablation masks to
//! the adjusted target logit. Oracles run in-process or behind an NDJSON
//! subprocess protocol (`headflow/1`), are cached, and are deterministic —
//! identical queries produce bitwise-identical values, and every artifact
//! written by the tools is byte-reproducible from its manifest.
//!
//! Module map:
//!
//! - [`numerics`] — dense kernels and regression (softmax, elastic net, OLS, fit metrics)
//! - [`model`] — the toy transformer: config, weights, forward with intervention hooks
//! - [`intervention`] — ablation masks, calibration baselines, the K/V substitution rule
//! - [`oracle`] — mask → logit evaluation: in-process, cached, external NDJSON
//! - [`attribution`] — mask sampling, logit normalization, the linear fit
//! - [`evaluation`] — faithfulness/completeness curves, baseline rankings, sweeps, clustering
//! - [`tokenflow`] — core-head selection, per-token effects, image grids, weighted attention
//! - [`synthetic`] — seeded random models and copy-head models with known ground truth
//! - [`container`] — the `HATW1` tensor file format shared by weights/tasks/baselines

pub mod attribution;
pub mod container;
pub mod error;
pub mod evaluation;
pub mod intervention;
pub mod model;
pub mod numerics;
pub mod oracle;
pub mod report;
pub mod synthetic;
pub mod tokenflow;

pub use error::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
