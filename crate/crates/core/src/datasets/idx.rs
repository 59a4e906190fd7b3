use std::fs;
use std::path::{Path, PathBuf};

use super::{LabeledDataset, Provenance};
use crate::error::{Error, Result};
use crate::ndtape::Tensor;

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MnistSplit {
    Train,
    Test,
}

impl MnistSplit {
    fn file_names(self) -> (&'static str, &'static str) {
        match self {
            MnistSplit::Train => ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
            MnistSplit::Test => ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
        }
    }

    /// Image and label paths under `dir`, using the canonical file names.
    pub fn paths(self, dir: &Path) -> (PathBuf, PathBuf) {
        let (img, lbl) = self.file_names();
        (dir.join(img), dir.join(lbl))
    }
}

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]])
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn check_header(path: &Path, bytes: &[u8], magic: u32, header_len: usize) -> Result<()> {
    if bytes.len() < 4 {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected: header_len,
            found: bytes.len(),
        });
    }
    let found = read_u32(bytes, 0);
    if found != magic {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: magic,
            found,
        });
    }
    if bytes.len() < header_len {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected: header_len,
            found: bytes.len(),
        });
    }
    Ok(())
}

/// Raw image file: `(count, rows, cols, pixels)`.
pub fn read_idx_images(path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let bytes = read_file(path)?;
    check_header(path, &bytes, IMAGE_MAGIC, 16)?;
    let n = read_u32(&bytes, 4) as usize;
    let rows = read_u32(&bytes, 8) as usize;
    let cols = read_u32(&bytes, 12) as usize;
    let expected = 16 + n * rows * cols;
    if bytes.len() != expected {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected,
            found: bytes.len(),
        });
    }
    Ok((n, rows, cols, bytes[16..].to_vec()))
}

pub fn read_idx_labels(path: &Path) -> Result<Vec<u8>> {
    let bytes = read_file(path)?;
    check_header(path, &bytes, LABEL_MAGIC, 8)?;
    let n = read_u32(&bytes, 4) as usize;
    if bytes.len() != 8 + n {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected: 8 + n,
            found: bytes.len(),
        });
    }
    Ok(bytes[8..].to_vec())
}

/// Load an IDX image/label pair; pixels are scaled by 1/255 and flattened.
pub fn load_mnist_idx(images_path: &Path, labels_path: &Path) -> Result<LabeledDataset> {
    let (n, rows, cols, pixels) = read_idx_images(images_path)?;
    let labels = read_idx_labels(labels_path)?;
    if labels.len() != n {
        return Err(Error::CountMismatch {
            images: n,
            labels: labels.len(),
        });
    }
    let inputs = Tensor::from_parts(
        vec![n, rows * cols],
        pixels.iter().map(|&p| p as f64 / 255.0).collect(),
    );
    let labels: Vec<usize> = labels.into_iter().map(usize::from).collect();
    let num_classes = 10.max(labels.iter().max().map_or(0, |&m| m + 1));
    let provenance = if images_path
        .file_name()
        .and_then(|f| f.to_str())
        .is_some_and(|f| f.starts_with("t10k"))
    {
        Provenance::MnistTest
    } else {
        Provenance::MnistTrain
    };
    Ok(LabeledDataset::new(inputs, labels, num_classes, provenance)?.with_image_dims(rows, cols))
}

pub fn load_mnist_dir(dir: &Path, split: MnistSplit) -> Result<LabeledDataset> {
    let (img, lbl) = split.paths(dir);
    let mut ds = load_mnist_idx(&img, &lbl)?;
    ds.provenance = match split {
        MnistSplit::Train => Provenance::MnistTrain,
        MnistSplit::Test => Provenance::MnistTest,
    };
    Ok(ds)
}

/// Serialize images back to IDX. Inputs must be multiples of 1/255 in `[0, 1]`.
pub fn write_idx_images(ds: &LabeledDataset) -> Result<Vec<u8>> {
    let (rows, cols) = ds
        .image_dims()
        .ok_or_else(|| Error::Data("dataset has no image dimensions".into()))?;
    let mut out = Vec::with_capacity(16 + ds.inputs().numel());
    out.extend_from_slice(&IMAGE_MAGIC.to_be_bytes());
    for v in [ds.len(), rows, cols] {
        out.extend_from_slice(&(v as u32).to_be_bytes());
    }
    for &v in ds.inputs().data() {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Data(format!("pixel value {v} outside [0, 1]")));
        }
        out.push((v * 255.0).round() as u8);
    }
    Ok(out)
}

pub fn write_idx_labels(ds: &LabeledDataset) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + ds.len());
    out.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    out.extend_from_slice(&(ds.len() as u32).to_be_bytes());
    out.extend(ds.labels().iter().map(|&l| l as u8));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image_file(n: u32, pixels: &[u8]) -> Vec<u8> {
        let mut f = Vec::new();
        f.extend_from_slice(&IMAGE_MAGIC.to_be_bytes());
        f.extend_from_slice(&n.to_be_bytes());
        f.extend_from_slice(&28u32.to_be_bytes());
        f.extend_from_slice(&28u32.to_be_bytes());
        f.extend_from_slice(pixels);
        f
    }

    fn label_file(labels: &[u8]) -> Vec<u8> {
        let mut f = Vec::new();
        f.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
        f.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        f.extend_from_slice(labels);
        f
    }

    fn two_images() -> Vec<u8> {
        // first image all 0, second all 255
        let mut px = vec![0u8; 784];
        px.extend(std::iter::repeat(255u8).take(784));
        image_file(2, &px)
    }

    #[test]
    fn loads_hand_crafted_pair() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("img"), dir.path().join("lbl"));
        fs::write(&ip, two_images()).unwrap();
        fs::write(&lp, label_file(&[3, 7])).unwrap();
        let ds = load_mnist_idx(&ip, &lp).unwrap();
        assert_eq!(ds.inputs().shape(), &[2, 784]);
        assert!(ds.input(0).iter().all(|&v| v == 0.0));
        assert!(ds.input(1).iter().all(|&v| v == 1.0));
        assert_eq!(ds.labels(), &[3, 7]);
        assert_eq!(write_idx_images(&ds).unwrap(), two_images());
        assert_eq!(write_idx_labels(&ds), label_file(&[3, 7]));
    }

    #[test]
    fn image_file_as_labels_is_magic_error() {
        let dir = tempfile::tempdir().unwrap();
        let ip = dir.path().join("img");
        fs::write(&ip, two_images()).unwrap();
        let err = load_mnist_idx(&ip, &ip).unwrap_err();
        assert!(matches!(err, Error::BadMagic { expected: LABEL_MAGIC, found: IMAGE_MAGIC, .. }));
    }

    #[test]
    fn count_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("img"), dir.path().join("lbl"));
        fs::write(&ip, image_file(3, &vec![0u8; 3 * 784])).unwrap();
        fs::write(&lp, label_file(&[1, 2])).unwrap();
        assert!(matches!(
            load_mnist_idx(&ip, &lp).unwrap_err(),
            Error::CountMismatch { images: 3, labels: 2 }
        ));
    }

    #[test]
    fn truncated_payload() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("img"), dir.path().join("lbl"));
        let mut f = two_images();
        f.truncate(f.len() - 10);
        fs::write(&ip, f).unwrap();
        fs::write(&lp, label_file(&[1, 2])).unwrap();
        assert!(matches!(load_mnist_idx(&ip, &lp).unwrap_err(), Error::Truncated { .. }));
    }
}
