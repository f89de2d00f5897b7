//! Registration of neural radiance field blocks.
//!
//! The pipeline trains one hash-grid NeRF per image block, extracts a masked
//! voxel feature grid from each trained field, and aligns pairs of blocks with
//! a correspondence transformer whose supervision comes from surface fields
//! queried out of the NeRFs themselves. The final rigid transform is solved in
//! closed form with a weighted Kabsch-Umeyama fit over the predicted
//! correspondences.

pub mod align;
pub mod autodiff;
pub mod backbone;
pub mod extract;
pub mod geom;
pub mod losses;
pub mod nerf;
pub mod nn;
pub mod pipeline;
pub mod scene;
pub mod transformer;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("degenerate configuration: {0}")]
    Degenerate(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
    #[error("{0}")]
    Other(String),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
