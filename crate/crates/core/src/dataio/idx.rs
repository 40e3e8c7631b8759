//! IDX reader for MNIST-style image and label files.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;
pub const IMAGE_SIDE: usize = 28;
pub const IMAGE_DIM: usize = IMAGE_SIDE * IMAGE_SIDE;

pub type TaskId = u8;
pub const TASK_MNIST: TaskId = 0;
pub const TASK_FASHION: TaskId = 1;

/// One labelled 28x28 image with pixels scaled into `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageExample {
    pub pixels: Vec<f32>,
    pub label: u8,
    pub task: TaskId,
    pub sample_id: u32,
}

fn ingest(path: &Path, offset: u64, msg: impl Into<String>) -> Error {
    Error::Ingest {
        path: path.to_path_buf(),
        offset,
        msg: msg.into(),
    }
}

fn read_u32_be(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| ingest(path, offset as u64, "file ends inside the header"))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Parses an IDX image file, returning `(count, rows, cols, pixel bytes)`.
pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let magic = read_u32_be(bytes, 0, path)?;
    if magic != IMAGE_MAGIC {
        return Err(ingest(path, 0, format!("bad image magic {magic:#010x}")));
    }
    let count = read_u32_be(bytes, 4, path)? as usize;
    let rows = read_u32_be(bytes, 8, path)? as usize;
    let cols = read_u32_be(bytes, 12, path)? as usize;
    let need = count * rows * cols;
    let body = &bytes[16..];
    if body.len() < need {
        return Err(ingest(
            path,
            (16 + body.len()) as u64,
            format!("truncated: header promises {need} pixel bytes, found {}", body.len()),
        ));
    }
    Ok((count, rows, cols, body[..need].to_vec()))
}

pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<u8>> {
    let magic = read_u32_be(bytes, 0, path)?;
    if magic != LABEL_MAGIC {
        return Err(ingest(path, 0, format!("bad label magic {magic:#010x}")));
    }
    let count = read_u32_be(bytes, 4, path)? as usize;
    let body = &bytes[8..];
    if body.len() < count {
        return Err(ingest(
            path,
            (8 + body.len()) as u64,
            format!("truncated: header promises {count} labels, found {}", body.len()),
        ));
    }
    Ok(body[..count].to_vec())
}

/// Loads a paired IDX image/label file set.
pub fn load_idx_images(image_path: &Path, label_path: &Path, task: TaskId) -> Result<Vec<ImageExample>> {
    let (count, rows, cols, pixels) = parse_idx_images(&read_file(image_path)?, image_path)?;
    if rows * cols != IMAGE_DIM {
        return Err(ingest(
            image_path,
            8,
            format!("expected {IMAGE_SIDE}x{IMAGE_SIDE} images, found {rows}x{cols}"),
        ));
    }
    let labels = parse_idx_labels(&read_file(label_path)?, label_path)?;
    if labels.len() != count {
        return Err(ingest(
            label_path,
            4,
            format!("{} labels but {count} images in {}", labels.len(), image_path.display()),
        ));
    }
    if let Some(pos) = labels.iter().position(|&l| l > 9) {
        return Err(ingest(label_path, 8 + pos as u64, format!("label {} out of range", labels[pos])));
    }
    Ok(pixels
        .chunks_exact(IMAGE_DIM)
        .zip(labels)
        .enumerate()
        .map(|(i, (img, label))| ImageExample {
            pixels: img.iter().map(|&b| f32::from(b) / 255.0).collect(),
            label,
            task,
            sample_id: i as u32,
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Paths of the standard file pair inside a dataset directory, e.g.
/// `train-images-idx3-ubyte` / `train-labels-idx1-ubyte`.
pub fn split_paths(dir: &Path, split: Split) -> (PathBuf, PathBuf) {
    let prefix = match split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    (
        dir.join(format!("{prefix}-images-idx3-ubyte")),
        dir.join(format!("{prefix}-labels-idx1-ubyte")),
    )
}

pub fn load_split(dir: &Path, split: Split, task: TaskId) -> Result<Vec<ImageExample>> {
    let (images, labels) = split_paths(dir, split);
    load_idx_images(&images, &labels, task)
}

/// Writes an IDX image/label pair. Used to build fixtures.
pub fn write_idx_pair(image_path: &Path, label_path: &Path, rows: usize, cols: usize, images: &[Vec<u8>], labels: &[u8]) -> Result<()> {
    let mut img = Vec::with_capacity(16 + images.len() * rows * cols);
    img.extend_from_slice(&IMAGE_MAGIC.to_be_bytes());
    img.extend_from_slice(&(images.len() as u32).to_be_bytes());
    img.extend_from_slice(&(rows as u32).to_be_bytes());
    img.extend_from_slice(&(cols as u32).to_be_bytes());
    for im in images {
        img.extend_from_slice(im);
    }
    let mut lab = Vec::with_capacity(8 + labels.len());
    lab.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    lab.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    lab.extend_from_slice(labels);
    fs::write(image_path, img).map_err(|e| Error::io(image_path, e))?;
    fs::write(label_path, lab).map_err(|e| Error::io(label_path, e))?;
    Ok(())
}
