//! Query-conditioned sound separation on magnitude spectrograms.
//!
//! A U-Net turns a mixture spectrogram into `k` intermediate masks. Each query
//! embedding is projected to a `k`-dimensional mixing vector that combines the
//! intermediate masks into a per-source mask. The noise-invariant variant adds
//! query-independent noise heads whose masks are matched to sources by an
//! exhaustive permutation search during training and discarded at inference.
//!
//! Module map:
//!
//! * [`dsp`]: STFT/iSTFT, masking, ground-truth masks, WAV I/O.
//! * [`querybank`]: embedding banks, frame/text query averaging, label tables.
//! * [`model`]: the separator network with hand-written backward passes.
//! * [`losses`]: weighted BCE, noise-invariant and permutation-invariant losses.
//! * [`data`]: manifests, mixture synthesis, the synthetic corpus generator.
//! * [`train`]: Adam, learning-rate schedule, clipping, checkpoints and resume.
//! * [`eval`]: SDR metrics and evaluation reports.

pub mod checkpoint;
pub mod data;
pub mod dsp;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod nn;
pub mod querybank;
pub mod real;
pub mod train;

pub use dsp::{AudioClip, Grid, MagnitudeGrid, Mask, MaskKind, Spectrogram};
pub use error::{Error, Result};
pub use losses::{LossBreakdown, LossConfig};
pub use model::{QuerySource, SeparatorConfig, SeparatorModel, Variant};
pub use querybank::{EmbeddingBank, Modality, QueryEmbedding, QueryTemplateSet, EMBED_DIM};
pub use real::Real;
