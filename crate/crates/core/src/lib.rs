//! Pixel-wise out-of-distribution detection from pre-extracted segmentation
//! tensors.
//!
//! The pipeline segments each image into SLIC superpixels, averages the
//! penultimate-layer features and classifier confidence per superpixel, and
//! multiplies the (rectified) confidence with a local intrinsic
//! dimensionality score measured against an LID-weighted per-class coreset.
//! Scores are oriented so that higher means in-distribution.
//!
//! ```
//! use suplid::lid::{lid_mle, LidParams};
//!
//! let lid = lid_mle(&[1.0, 2.0], &LidParams::with_k(2)).unwrap();
//! assert!((lid - 2.0 / std::f64::consts::LN_2).abs() < 1e-12);
//! ```

pub mod config;
pub mod coreset;
pub mod error;
pub mod eval;
pub mod lid;
pub mod matrix;
pub mod pipeline;
pub mod scores;
pub mod superpixel;
pub mod synth;
pub mod tensorio;

pub use error::{Error, Result};
pub use matrix::Matrix;
pub use tensorio::Tensor;

/// Code blocks in the guide under `book/`, compiled and run as doc-tests.
#[cfg(doctest)]
pub mod book {
    macro_rules! chapter {
        ($name:ident, $file:literal) => {
            #[doc = include_str!(concat!("../../../book/src/", $file))]
            pub mod $name {}
        };
    }
    chapter!(introduction, "introduction.md");
    chapter!(tensors, "tensors.md");
    chapter!(superpixels, "superpixels.md");
    chapter!(lid, "lid.md");
    chapter!(coreset, "coreset.md");
    chapter!(scores, "scores.md");
    chapter!(evaluation, "evaluation.md");
    chapter!(synthetic, "synthetic.md");
    chapter!(cli, "cli.md");
}
