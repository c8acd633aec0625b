//! MNIST IDX files (big-endian headers).

use std::path::Path;

use crate::error::{Error, Result};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

/// `N` grayscale images of `rows × cols` pixels, rescaled to `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<f32>,
}

impl IdxImages {
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.count, self.rows, self.cols)
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.rows * self.cols;
        &self.pixels[i * n..(i + 1) * n]
    }
}

fn read_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::format(bytes.len(), "truncated IDX header"))
}

fn check_magic(bytes: &[u8], want: u32) -> Result<()> {
    let got = read_u32(bytes, 0)?;
    if got != want {
        return Err(Error::format(
            0,
            format!("IDX magic {got:#010x}, expected {want:#010x}"),
        ));
    }
    Ok(())
}

pub fn parse_idx_images(bytes: &[u8]) -> Result<IdxImages> {
    check_magic(bytes, IMAGES_MAGIC)?;
    let count = read_u32(bytes, 4)? as usize;
    let rows = read_u32(bytes, 8)? as usize;
    let cols = read_u32(bytes, 12)? as usize;
    let n = count * rows * cols;
    let body = &bytes[16..];
    if body.len() < n {
        return Err(Error::format(
            bytes.len(),
            format!("expected {n} pixel bytes, found {}", body.len()),
        ));
    }
    Ok(IdxImages {
        count,
        rows,
        cols,
        pixels: body[..n].iter().map(|&b| b as f32 / 255.0).collect(),
    })
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    check_magic(bytes, LABELS_MAGIC)?;
    let count = read_u32(bytes, 4)? as usize;
    let body = &bytes[8..];
    if body.len() < count {
        return Err(Error::format(
            bytes.len(),
            format!("expected {count} labels, found {}", body.len()),
        ));
    }
    Ok(body[..count].to_vec())
}

/// A labelled planar split.
#[derive(Clone, Debug)]
pub struct Mnist {
    pub images: IdxImages,
    pub labels: Vec<u8>,
}

impl Mnist {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// The first `n` samples.
    pub fn truncated(&self, n: usize) -> Mnist {
        let n = n.min(self.len());
        let px = self.images.rows * self.images.cols;
        Mnist {
            images: IdxImages {
                count: n,
                pixels: self.images.pixels[..n * px].to_vec(),
                ..self.images
            },
            labels: self.labels[..n].to_vec(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    fn files(&self) -> (&'static str, &'static str) {
        match self {
            Split::Train => ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
            Split::Test => ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
        }
    }
}

/// Load a split from a directory holding the standard (uncompressed) files.
pub fn load_mnist(dir: impl AsRef<Path>, split: Split) -> Result<Mnist> {
    let dir = dir.as_ref();
    let (img, lbl) = split.files();
    let read = |name: &str| {
        let p = dir.join(name);
        std::fs::read(&p).map_err(|e| Error::io(p, e))
    };
    let images = parse_idx_images(&read(img)?)?;
    let labels = parse_idx_labels(&read(lbl)?)?;
    if images.count != labels.len() {
        return Err(Error::format(
            4,
            format!("{} images but {} labels", images.count, labels.len()),
        ));
    }
    Ok(Mnist { images, labels })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blob() -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
        b.extend_from_slice(&1u32.to_be_bytes());
        b.extend_from_slice(&2u32.to_be_bytes());
        b.extend_from_slice(&2u32.to_be_bytes());
        b.extend_from_slice(&[0, 51, 204, 255]);
        b
    }

    #[test]
    fn tiny_image_blob() {
        let im = parse_idx_images(&blob()).unwrap();
        assert_eq!(im.dims(), (1, 2, 2));
        let bytes: Vec<u8> = im
            .pixels
            .iter()
            .map(|&p| (p * 255.0).round() as u8)
            .collect();
        assert_eq!(bytes, vec![0, 51, 204, 255]);
    }

    #[test]
    fn label_magic_on_image_parser_is_rejected() {
        let mut b = blob();
        b[3] = 0x01;
        assert!(matches!(
            parse_idx_images(&b),
            Err(Error::Format { offset: 0, .. })
        ));
        assert!(parse_idx_labels(&blob()).is_err());
    }

    #[test]
    fn truncated_blob_is_rejected() {
        let b = blob();
        assert!(parse_idx_images(&b[..b.len() - 1]).is_err());
        assert!(parse_idx_images(&b[..10]).is_err());
    }
}
