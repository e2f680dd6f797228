//! Target-selective gradient saliency for feed-forward convolutional networks.
//!
//! The crate is `no_std` (it needs `alloc`). It carries everything that is pure
//! computation: dense tensors and their kernels, the network graph model, the
//! forward pass with activation capture, the attribution rules, saliency
//! post-processing and the evaluation protocols. File formats, image IO and the
//! command-line driver live in the `tsgb` crate.
//!
//! A typical pipeline:
//!
//! ```
//! use tsgb_core::attribution::{AttributionRequest, RuleSet};
//! use tsgb_core::eval::synthetic::{detector_model, generate, SyntheticSpec};
//! use tsgb_core::{forward, saliency};
//!
//! let spec = SyntheticSpec::default();
//! let model = detector_model(&spec);
//! let data = generate(&spec, 1, 7);
//! let sample = &data.samples[0];
//!
//! let trace = forward::run_forward(&model, &sample.image).unwrap();
//! let target = sample.labels[0];
//! let req = AttributionRequest::new(target, 0.8, RuleSet::Tsgb);
//! let state = tsgb_core::attribution::run_attribution(&model, &trace, &req).unwrap();
//! let map = saliency::assemble(&state, &trace, &req, &model.name).unwrap();
//! assert_eq!(map.height(), spec.height);
//! ```
#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;

pub mod attribution;
pub mod error;
pub mod eval;
pub mod forward;
pub mod model;
pub mod saliency;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{ConvGeometry, Shape, Tensor};

/// Default ε used by every guarded division.
pub const DEFAULT_EPS: f32 = 1e-6;
