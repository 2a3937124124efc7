//! Codebooks, code grids and nearest-entry quantization.

use brivl_tensor::{SplitMix64, Tensor};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    entries: Tensor<f32>,
}

impl Codebook {
    /// `entries` is `[N_c, d_c]` with `N_c >= 2` and finite values.
    pub fn new(entries: Tensor<f32>) -> Result<Self> {
        let s = entries.shape();
        if s.len() != 2 || s[0] < 2 || s[1] == 0 {
            return Err(Error::Data(format!(
                "a codebook needs at least 2 entries of positive dimension, got shape {s:?}"
            )));
        }
        if entries.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("codebook entries must be finite".into()));
        }
        Ok(Self { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.entries.shape()[1]
    }

    pub fn entry(&self, k: usize) -> &[f32] {
        self.entries.row(k)
    }

    pub fn entries(&self) -> &Tensor<f32> {
        &self.entries
    }

    /// Index of the entry nearest to `v` in Euclidean distance; the smallest
    /// index wins a tie. Distances are accumulated in f64.
    pub fn nearest(&self, v: &[f32]) -> usize {
        let mut best = (0, f64::INFINITY);
        for k in 0..self.len() {
            let d: f64 = self
                .entry(k)
                .iter()
                .zip(v)
                .map(|(&c, &u)| {
                    let t = c as f64 - u as f64;
                    t * t
                })
                .sum();
            if d < best.1 {
                best = (k, d);
            }
        }
        best.0
    }
}

/// An `h x w` grid of `d_c`-dimensional codes, stored cell-major
/// (`[h, w, d_c]`).
#[derive(Clone, Debug, PartialEq)]
pub struct CodeGrid {
    pub h: usize,
    pub w: usize,
    pub dim: usize,
    pub values: Vec<f32>,
}

impl CodeGrid {
    pub fn new(h: usize, w: usize, dim: usize, values: Vec<f32>) -> Result<Self> {
        if h == 0 || w == 0 || dim == 0 || values.len() != h * w * dim {
            return Err(Error::Data(format!(
                "a {h}x{w} grid of {dim}-d codes needs {} values, got {}",
                h * w * dim,
                values.len()
            )));
        }
        Ok(Self { h, w, dim, values })
    }

    /// Each cell set to an entry drawn uniformly from the codebook.
    pub fn sample(codebook: &Codebook, h: usize, w: usize, rng: &mut SplitMix64) -> Self {
        let mut values = Vec::with_capacity(h * w * codebook.dim());
        for _ in 0..h * w {
            values.extend_from_slice(codebook.entry(rng.below(codebook.len())));
        }
        Self {
            h,
            w,
            dim: codebook.dim(),
            values,
        }
    }

    pub fn cells(&self) -> usize {
        self.h * self.w
    }

    pub fn cell(&self, i: usize) -> &[f32] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    /// As a `[1, h, w, d_c]` tensor.
    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::new(&[1, self.h, self.w, self.dim], self.values.clone()).expect("grid size")
    }

    /// True when every cell is bit-equal to some codebook entry.
    pub fn on_codebook(&self, codebook: &Codebook) -> bool {
        (0..self.cells()).all(|i| {
            (0..codebook.len()).any(|k| {
                codebook
                    .entry(k)
                    .iter()
                    .zip(self.cell(i))
                    .all(|(a, b)| a.to_bits() == b.to_bits())
            })
        })
    }
}

/// Replaces every cell of `raw` by its nearest codebook entry and returns the
/// chosen indices alongside the quantized grid.
pub fn quantize(raw: &CodeGrid, codebook: &Codebook) -> Result<(CodeGrid, Vec<usize>)> {
    if raw.dim != codebook.dim() {
        return Err(Error::Data(format!(
            "code dimension {} does not match codebook dimension {}",
            raw.dim,
            codebook.dim()
        )));
    }
    let mut values = Vec::with_capacity(raw.values.len());
    let mut indices = Vec::with_capacity(raw.cells());
    for i in 0..raw.cells() {
        let k = codebook.nearest(raw.cell(i));
        values.extend_from_slice(codebook.entry(k));
        indices.push(k);
    }
    Ok((
        CodeGrid {
            values,
            ..raw.clone()
        },
        indices,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn book(values: &[f32], dim: usize) -> Codebook {
        Codebook::new(Tensor::new(&[values.len() / dim, dim], values.to_vec()).unwrap()).unwrap()
    }

    #[test]
    fn scalar_nearest_neighbour() {
        let cb = book(&[0.0, 1.0], 1);
        let (q, idx) = quantize(&CodeGrid::new(1, 2, 1, vec![0.4, 0.6]).unwrap(), &cb).unwrap();
        assert_eq!(q.values, vec![0.0, 1.0]);
        assert_eq!(idx, vec![0, 1]);
    }

    #[test]
    fn exact_entry_maps_to_itself_and_ties_take_smallest_index() {
        let cb = book(&[0.0, 0.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0], 2);
        let (_, idx) = quantize(&CodeGrid::new(1, 1, 2, vec![3.0, 3.0]).unwrap(), &cb).unwrap();
        assert_eq!(idx, vec![3]);
        let (_, idx) = quantize(&CodeGrid::new(1, 1, 2, vec![0.5, 0.5]).unwrap(), &cb).unwrap();
        assert_eq!(idx, vec![0]);
    }

    #[test]
    fn rejects_degenerate_inputs() {
        assert!(Codebook::new(Tensor::new(&[1, 2], vec![0.0, 1.0]).unwrap()).is_err());
        assert!(Codebook::new(Tensor::new(&[2, 1], vec![0.0, f32::NAN]).unwrap()).is_err());
        let cb = book(&[0.0, 1.0], 1);
        assert!(quantize(&CodeGrid::new(1, 1, 2, vec![0.0, 0.0]).unwrap(), &cb).is_err());
        assert!(CodeGrid::new(2, 2, 1, vec![0.0; 3]).is_err());
    }

    #[test]
    fn sampled_grid_lies_on_codebook() {
        let mut rng = SplitMix64::new(4);
        let cb = Codebook::new(brivl_tensor::param::uniform(&mut rng, &[8, 3], -1.0, 1.0)).unwrap();
        let g = CodeGrid::sample(&cb, 4, 4, &mut rng);
        assert!(g.on_codebook(&cb));
        let mut off = g.clone();
        off.values[5] += 1e-3;
        assert!(!off.on_codebook(&cb));
    }
}
