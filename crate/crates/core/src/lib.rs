//! Linear layers trained by gradient descent, viewed as attention over
//! their training history.
//!
//! A layer `W` trained by SGD equals `W₀ + Σₜ eₜ ⊗ xₜ`, so `W x` equals `W₀ x`
//! plus unnormalised attention with keys `xₜ` (the layer inputs seen during
//! training) and values `eₜ` (the scaled negative output gradients). This
//! crate trains small networks while recording those key/value pairs
//! ([`recorder`]), checks the identity on held-out inputs ([`dual`]), and
//! attributes test inputs to training examples ([`analysis`], [`report`]).
//! [`pipeline`] strings the steps together for the `dualform` binary.
//!
//! ```
//! use dualform::dual::dual_forward;
//! use dualform::linalg::DenseMatrix;
//! use dualform::recorder::{InMemoryTrace, SlotMeta};
//!
//! let w0 = DenseMatrix::zeros(1, 2);
//! let mut memory = InMemoryTrace::new(0, 2, 1);
//! memory.push(SlotMeta::default(), &[1.0, 2.0], &[0.5]).unwrap();
//! // W = [0.5, 1.0], so W·[2, 1] = 2.0
//! assert_eq!(dual_forward(&w0, &memory, &[2.0, 1.0]).unwrap(), vec![2.0]);
//! ```

pub mod analysis;
pub mod config;
pub mod dataio;
pub mod dual;
pub mod error;
pub mod linalg;
pub mod nn;
pub mod pipeline;
pub mod recorder;
pub mod report;

pub use error::{Error, Result};

/// The guide in `book/`, compiled here so its code blocks run as doctests.
#[cfg(doctest)]
pub mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub mod introduction {}
    #[doc = include_str!("../../../book/src/dual-form.md")]
    pub mod dual_form {}
    #[doc = include_str!("../../../book/src/recording.md")]
    pub mod recording {}
    #[doc = include_str!("../../../book/src/verifying.md")]
    pub mod verifying {}
    #[doc = include_str!("../../../book/src/attribution.md")]
    pub mod attribution {}
    #[doc = include_str!("../../../book/src/language-models.md")]
    pub mod language_models {}
    #[doc = include_str!("../../../book/src/command-line.md")]
    pub mod command_line {}
    #[doc = include_str!("../../../book/src/trace-format.md")]
    pub mod trace_format {}
}
