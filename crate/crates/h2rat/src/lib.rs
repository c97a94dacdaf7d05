//! A desk-scale stacked attention model that transfers a human's verbal
//! "abnormality reminder" onto a robot's visual region grid.
//!
//! Given a short alert ("stop, the pose is wrong") and a grid of region
//! feature vectors, the model produces the abnormal-execution class, a
//! spatial attention distribution over regions, and a recommended
//! corrective action. The crate ships the full pipeline: a from-scratch
//! tensor/autodiff substrate, an LSTM text encoder, the two-layer
//! attention core, a deterministic synthetic scenario generator, a
//! training loop, and the precision/recall evaluation harness.
//!
//! ```
//! use h2rat::numerics::{RngStream, Tensor};
//! use h2rat::attention::{forward, H2ratParams};
//!
//! let mut rng = RngStream::new(7);
//! let params = H2ratParams::init(8, 6, 4, 2, &mut rng);
//! let regions = Tensor::uniform_init(8, 16, 1.0, &mut rng);  // 4x4 grid
//! let reminder = Tensor::uniform_init(8, 1, 1.0, &mut rng);
//! let out = forward(&regions, &reminder, &params).unwrap();
//! assert!((out.p2.sum() - 1.0).abs() < 1e-9);
//! assert!(out.confidence >= 0.25 && out.confidence <= 1.0);
//! ```

pub mod attention;
pub mod error;
pub mod eval;
pub mod io_util;
pub mod model;
pub mod numerics;
pub mod scenarios;
pub mod textenc;
pub mod training;
pub mod vision;

pub use error::{Error, Result};
