//! Numerical core for federated multi-source unsupervised domain adaptation
//! of segmentation networks.
//!
//! Each labelled source domain adapts its own copy of a small encoder/decoder
//! network towards an unlabelled target by minimising cross-entropy plus a
//! sliced Wasserstein alignment term on the encoder's latent codes. The
//! adapted models are then combined pixel-wise with weights derived from how
//! often each model is confident on the target. Source domains never exchange
//! data; every cross-node transfer goes through an audited message bus.
//!
//! The crate is `no_std` (it needs `alloc`). File formats, threading and the
//! command line live in the companion `fmuda` crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod adapt;
pub mod autodiff;
pub mod ensemble;
pub mod error;
pub mod fednode;
pub mod kernels;
pub mod metrics;
pub mod optim;
pub mod params;
pub mod rng;
pub mod segnet;
pub mod swd;
pub mod synthdata;
pub mod tensor;

pub use autodiff::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use optim::{adam_step, AdamConfig, AdamState};
pub use params::{Param, ParamSet};
pub use segnet::{NetConfig, SegModel};
pub use swd::{EmbeddingBatch, ProjectionSet};
pub use synthdata::{DomainDataset, DomainShift, LabelMap, Raster};
pub use tensor::Tensor;
