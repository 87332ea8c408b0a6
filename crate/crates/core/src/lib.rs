//! Layer normalization as a source of nonlinearity.
//!
//! The crate measures how linearly separable two classes are (sum-of-squares
//! ratios and their linear lower bound), builds small LN maps that push the
//! ratio below that bound, synthesizes width-3 LN-Nets that classify any
//! finite labeled set exactly, and compares the Hessian-based nonlinearity
//! of layer normalization against its grouped variant.
//!
//! ```
//! use lnnet::{datasets, synthesis, Tolerances};
//!
//! let xor = datasets::gen_xor();
//! let result = synthesis::synthesize_binary(&xor, 0, &Tolerances::default()).unwrap();
//! for (k, x) in xor.points().columns().enumerate() {
//!     assert_eq!(result.classify(&x).unwrap().label, xor.labels()[k]);
//! }
//! ```

pub mod datasets;
pub mod error;
pub mod linalg;
pub mod model;
pub mod nonlinearity;
pub mod rng;
pub mod ssr;
pub mod synthesis;
pub mod tensor;
mod tolerance;

pub use datasets::LabeledDataset;
pub use error::{Error, Result};
pub use model::{Affine, Layer, LnNet, Stage};
pub use ssr::{ClassPair, SsrReport};
pub use synthesis::SynthesisResult;
pub use tensor::Matrix;
pub use tolerance::Tolerances;
