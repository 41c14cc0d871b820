//! MNIST-style IDX files (unsigned-byte payloads only).

use std::fs;
use std::path::Path;

use super::{LabeledDataset, Split};
use crate::error::{Error, Result};

const UBYTE: u8 = 0x08;

/// Parsed IDX array: dimensions plus raw bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

pub fn parse_idx(bytes: &[u8]) -> Result<IdxArray> {
    if bytes.len() < 4 || bytes[0] != 0 || bytes[1] != 0 {
        return Err(Error::Dataset("bad IDX magic number".into()));
    }
    if bytes[2] != UBYTE {
        return Err(Error::Dataset(format!("unsupported IDX element type 0x{:02x}", bytes[2])));
    }
    let ndims = bytes[3] as usize;
    let header = 4 + 4 * ndims;
    if ndims == 0 || bytes.len() < header {
        return Err(Error::Dataset("truncated IDX header".into()));
    }
    let dims: Vec<usize> = (0..ndims)
        .map(|i| {
            let o = 4 + 4 * i;
            u32::from_be_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]) as usize
        })
        .collect();
    let len: usize = dims.iter().product();
    if bytes.len() != header + len {
        return Err(Error::Dataset(format!(
            "IDX payload has {} bytes, header declares {len}",
            bytes.len() - header
        )));
    }
    Ok(IdxArray {
        dims,
        data: bytes[header..].to_vec(),
    })
}

pub fn encode_idx(array: &IdxArray) -> Vec<u8> {
    let mut out = vec![0, 0, UBYTE, array.dims.len() as u8];
    for &d in &array.dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(&array.data);
    out
}

/// Loads an image file `[N, rows, cols]` and a label file `[N]`; pixels are scaled to `[0, 1]`.
pub fn load_idx_pair(images: &Path, labels: &Path, num_classes: usize, split: Split) -> Result<LabeledDataset> {
    let imgs = parse_idx(&fs::read(images)?)?;
    let labs = parse_idx(&fs::read(labels)?)?;
    if imgs.dims.len() != 3 {
        return Err(Error::Dataset(format!("image file must be 3-D, got {:?}", imgs.dims)));
    }
    if labs.dims.len() != 1 || labs.dims[0] != imgs.dims[0] {
        return Err(Error::Dataset(format!(
            "label file shape {:?} does not match {} images",
            labs.dims, imgs.dims[0]
        )));
    }
    LabeledDataset::new(
        vec![1, imgs.dims[1], imgs.dims[2]],
        num_classes,
        imgs.data.iter().map(|&b| f64::from(b) / 255.0).collect(),
        labs.data.iter().map(|&b| b as usize).collect(),
        split,
    )
}
