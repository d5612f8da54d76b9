pub mod adaboost;
pub mod autodiff;
pub mod error;
pub mod features;
pub mod gradcheck;
pub mod model;
pub mod tensor;
pub mod tokenizer;

pub use error::{Error, Result};
pub mod train;

/// Identifier of this build, recorded in run manifests.
pub const CODE_VERSION: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));

/// Hex SHA-256 of [`CODE_VERSION`].
pub fn code_version_hash() -> String {
    sha256_hex(CODE_VERSION.as_bytes())
}

/// Lowercase hex SHA-256 of `bytes`.
pub fn sha256_hex(bytes: &[u8]) -> String {
    features::dataset::hex_digest(bytes)
}

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    struct Introduction;
    #[doc = include_str!("../../../book/src/tokenizer.md")]
    struct Tokenizer;
    #[doc = include_str!("../../../book/src/features.md")]
    struct Features;
    #[doc = include_str!("../../../book/src/model.md")]
    struct ModelChapter;
    #[doc = include_str!("../../../book/src/autodiff.md")]
    struct Autodiff;
    #[doc = include_str!("../../../book/src/training.md")]
    struct Training;
    #[doc = include_str!("../../../book/src/adaboost.md")]
    struct AdaBoost;
    #[doc = include_str!("../../../book/src/ablations.md")]
    struct Ablations;
}
