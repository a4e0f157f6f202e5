//! Multistain slide representation learning.
//!
//! A gated multi-head attention encoder turns a bag of patch embeddings into
//! one slide embedding. It is pretrained by aligning slides of the same case
//! across stains, globally with a symmetric contrastive loss and locally with
//! graph optimal transport between patch graphs, and evaluated with few-shot
//! probes, class prototypes and survival models.
//!
//! Modules, bottom-up:
//!
//! * [`numerics`]: matrices, activations, SVD, seeded RNG.
//! * [`datamodel`]: cases, bags, the on-disk embedding bundle, synthetic data.
//! * [`encoder`]: the slide encoder with its analytic backward pass.
//! * [`losses`]: infoNCE, Wasserstein and Gromov-Wasserstein transport, MSE.
//! * [`trainer`]: schedules, AdamW, RankMe selection and the training loop.
//! * [`eval`]: k-shot sampling, probes, prototypes, AUC, Cox and c-index.

pub mod datamodel;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod losses;
pub mod numerics;
pub mod trainer;

pub use datamodel::{Dataset, MultistainCase, PatchEmbeddingBag, StainId, SyntheticConfig};
pub use encoder::{EncoderConfig, EncoderParams, SlideEmbedding};
pub use error::{Error, Result};
pub use losses::{ContrastiveConfig, GotConfig, LossReport, TransportPlan};
pub use numerics::{Matrix, Rng};
pub use trainer::{LossMode, PretrainConfig, RankMeConfig, TrainConfig};
