//! Dataset ingestion, Spherical MNIST construction and on-disk formats.

pub mod idx;
pub mod ktnt;
pub mod manifest;
pub mod spherical;

pub use idx::{load_mnist, parse_idx_images, parse_idx_labels, IdxImages, Mnist, Split};
pub use ktnt::{load_tensor, save_tensor};
pub use spherical::{build_spherical_mnist, DatasetParams, SphericalDataset, SphericalSample};
