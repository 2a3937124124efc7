//! The image and text towers and their input types.

mod attention;
mod image;
mod text;
mod vocab;

use brivl_tensor::Tensor;

use crate::error::{Error, Result};

pub use attention::{SaStack, SaLayout};
pub use image::{mspp, ImageEncoder, ImageForward, BACKBONE_CHANNELS};
pub use text::TextEncoder;
pub use vocab::{Vocabulary, PAD_ID, UNK_ID};

/// Images as `[batch, 3, side, side]` values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBatch {
    values: Tensor<f32>,
}

impl ImageBatch {
    pub fn new(values: Tensor<f32>) -> Result<Self> {
        let s = values.shape();
        if s.len() != 4 || s[1] != 3 || s[2] != s[3] {
            return Err(Error::Data(format!("image batch must be [B,3,S,S], got {s:?}")));
        }
        if values.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Data("image values must lie in [0, 1]".into()));
        }
        Ok(Self { values })
    }

    /// Stacks channel-first images of side `side`.
    pub fn from_chw(images: &[Vec<f32>], side: usize) -> Result<Self> {
        let per = 3 * side * side;
        if images.is_empty() || images.iter().any(|im| im.len() != per) {
            return Err(Error::Data(format!("every image must hold {per} values")));
        }
        let data = images.concat();
        Self::new(Tensor::new(&[images.len(), 3, side, side], data)?)
    }

    pub fn len(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn side(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn values(&self) -> &Tensor<f32> {
        &self.values
    }

    pub fn into_values(self) -> Tensor<f32> {
        self.values
    }
}

/// Token ids, row-major `[batch, width]`, padded with [`PAD_ID`].
#[derive(Clone, Debug, PartialEq)]
pub struct TokenBatch {
    pub ids: Vec<usize>,
    pub width: usize,
    pub lengths: Vec<usize>,
}

impl TokenBatch {
    /// Pads `rows` to the longest row (or `width` when larger).
    pub fn from_rows(rows: &[Vec<usize>], width: Option<usize>) -> Result<Self> {
        let longest = rows.iter().map(Vec::len).max().unwrap_or(0);
        let width = width.unwrap_or(longest).max(longest).max(1);
        let mut ids = Vec::with_capacity(rows.len() * width);
        for r in rows {
            ids.extend_from_slice(r);
            ids.extend(std::iter::repeat(PAD_ID).take(width - r.len()));
        }
        Ok(Self {
            ids,
            width,
            lengths: rows.iter().map(Vec::len).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.lengths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lengths.is_empty()
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.ids[i * self.width..i * self.width + self.lengths[i]]
    }
}
