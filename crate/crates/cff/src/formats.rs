//! MNIST IDX and CIFAR-10 binary readers.
//!
//! Pixels are scaled to `[0, 1]`. CIFAR records are `label, R plane,
//! G plane, B plane` (3073 bytes), which is already the `[c, H, W]` layout.

use std::fs;
use std::path::{Path, PathBuf};

use cff_core::data::{Dataset, Split};
use cff_core::training::DatasetKind;
use cff_core::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: {msg} (byte offset {offset})", path.display())]
    Malformed {
        path: PathBuf,
        offset: usize,
        msg: String,
    },
    #[error("{0}")]
    Dataset(#[from] cff_core::Error),
}

pub type Result<T> = std::result::Result<T, FormatError>;

fn malformed(path: &Path, offset: usize, msg: impl Into<String>) -> FormatError {
    FormatError::Malformed {
        path: path.to_path_buf(),
        offset,
        msg: msg.into(),
    }
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|source| FormatError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| malformed(path, bytes.len(), "truncated header"))
}

/// An IDX file: unsigned-byte data with its dimensions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Idx {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

/// Parses an IDX buffer with element type `0x08` (unsigned byte).
/// `path` only labels errors.
pub fn parse_idx(bytes: &[u8], path: &Path) -> Result<Idx> {
    let magic = be_u32(bytes, 0, path)?;
    if magic >> 16 != 0 {
        return Err(malformed(path, 0, format!("bad magic 0x{magic:08x}")));
    }
    let kind = (magic >> 8) & 0xff;
    if kind != 0x08 {
        return Err(malformed(path, 2, format!("element type 0x{kind:02x} is not unsigned byte")));
    }
    let ndim = (magic & 0xff) as usize;
    if ndim == 0 {
        return Err(malformed(path, 3, "zero dimensions"));
    }
    let dims = (0..ndim)
        .map(|i| be_u32(bytes, 4 + 4 * i, path).map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let header = 4 + 4 * ndim;
    let n: usize = dims.iter().product();
    if bytes.len() != header + n {
        let at = bytes.len().min(header + n);
        return Err(malformed(
            path,
            at,
            format!("expected {} data bytes after the header, found {}", n, bytes.len() - header),
        ));
    }
    Ok(Idx {
        dims,
        data: bytes[header..].to_vec(),
    })
}

fn scale(bytes: &[u8]) -> Vec<f32> {
    bytes.iter().map(|&b| f32::from(b) / 255.0).collect()
}

/// MNIST from an images/labels IDX pair.
pub fn mnist_from_idx(images: &Idx, labels: &Idx, split: Split, path: &Path) -> Result<Dataset> {
    if images.dims.len() != 3 {
        return Err(malformed(path, 3, format!("images need 3 dimensions, found {}", images.dims.len())));
    }
    if labels.dims.len() != 1 || labels.dims[0] != images.dims[0] {
        return Err(malformed(
            path,
            4,
            format!("{} labels for {} images", labels.dims.first().unwrap_or(&0), images.dims[0]),
        ));
    }
    if let Some(i) = labels.data.iter().position(|&l| l > 9) {
        return Err(malformed(path, 8 + i, format!("label {} outside 0..10", labels.data[i])));
    }
    let (n, h, w) = (images.dims[0], images.dims[1], images.dims[2]);
    let t = Tensor::new(vec![n, 1, h, w], scale(&images.data))?;
    Ok(Dataset::new(t, labels.data.iter().map(|&l| l as usize).collect(), 10, split)?)
}

pub fn mnist_files(dir: &Path, split: Split) -> [PathBuf; 2] {
    let prefix = if split == Split::Test { "t10k" } else { "train" };
    [
        dir.join(format!("{prefix}-images-idx3-ubyte")),
        dir.join(format!("{prefix}-labels-idx1-ubyte")),
    ]
}

pub fn load_mnist(dir: &Path, split: Split) -> Result<Dataset> {
    let [img, lab] = mnist_files(dir, split);
    let images = parse_idx(&read_file(&img)?, &img)?;
    let labels = parse_idx(&read_file(&lab)?, &lab)?;
    mnist_from_idx(&images, &labels, split, &img)
}

pub const CIFAR_RECORD: usize = 3073;

/// Appends the records of one CIFAR-10 batch file.
pub fn parse_cifar_batch(bytes: &[u8], path: &Path, pixels: &mut Vec<f32>, labels: &mut Vec<usize>) -> Result<()> {
    if !bytes.len().is_multiple_of(CIFAR_RECORD) {
        let whole = bytes.len() / CIFAR_RECORD * CIFAR_RECORD;
        return Err(malformed(
            path,
            whole,
            format!("{} trailing bytes do not form a {CIFAR_RECORD}-byte record", bytes.len() - whole),
        ));
    }
    for (r, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        if rec[0] > 9 {
            return Err(malformed(path, r * CIFAR_RECORD, format!("label {} outside 0..10", rec[0])));
        }
        labels.push(rec[0] as usize);
        pixels.extend(rec[1..].iter().map(|&b| f32::from(b) / 255.0));
    }
    Ok(())
}

pub fn cifar_files(dir: &Path, split: Split) -> Vec<PathBuf> {
    if split == Split::Test {
        vec![dir.join("test_batch.bin")]
    } else {
        (1..=5).map(|i| dir.join(format!("data_batch_{i}.bin"))).collect()
    }
}

pub fn load_cifar10(dir: &Path, split: Split) -> Result<Dataset> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for f in cifar_files(dir, split) {
        parse_cifar_batch(&read_file(&f)?, &f, &mut pixels, &mut labels)?;
    }
    let t = Tensor::new(vec![labels.len(), 3, 32, 32], pixels)?;
    Ok(Dataset::new(t, labels, 10, split)?)
}

/// Dataset directory below the data root.
pub fn dataset_dir(root: &Path, kind: DatasetKind) -> PathBuf {
    match kind {
        DatasetKind::Mnist => root.join("mnist"),
        DatasetKind::Cifar10 => root.join("cifar-10-batches-bin"),
    }
}

/// Every file a dataset split is read from.
pub fn dataset_files(root: &Path, kind: DatasetKind, split: Split) -> Vec<PathBuf> {
    let dir = dataset_dir(root, kind);
    match kind {
        DatasetKind::Mnist => mnist_files(&dir, split).to_vec(),
        DatasetKind::Cifar10 => cifar_files(&dir, split),
    }
}

/// Training (or test) split of a dataset below `root`.
pub fn load(root: &Path, kind: DatasetKind, split: Split) -> Result<Dataset> {
    let dir = dataset_dir(root, kind);
    match kind {
        DatasetKind::Mnist => load_mnist(&dir, split),
        DatasetKind::Cifar10 => load_cifar10(&dir, split),
    }
}
