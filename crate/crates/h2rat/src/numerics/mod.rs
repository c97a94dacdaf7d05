//! Deterministic dense-tensor arithmetic with reverse-mode differentiation.
//!
//! Everything downstream (text encoding, region projection, the stacked
//! attention layers, training) is expressed over these primitives.
//!
//! ```
//! use h2rat::numerics::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.param(Tensor::new(2, 1, vec![0.5, -1.0]).unwrap());
//! let y = tape.tanh(x).unwrap();
//! let s = tape.sum(y).unwrap();
//! let grads = tape.backward(s).unwrap();
//! let g = grads.get(x).unwrap();
//! // d/dx sum(tanh(x)) = 1 - tanh(x)^2, elementwise
//! assert!((g.get(0, 0) - (1.0 - 0.5f64.tanh().powi(2))).abs() < 1e-12);
//! ```

mod rng;
mod tape;
mod tensor;

pub use rng::RngStream;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
