//! A small vector-quantized autoencoder whose decoder serves as the image
//! generator for codebook inversion.

use brivl_tensor::param::{fan_in_uniform, kaiming_uniform, uniform};
use brivl_tensor::{Adam, AdamConfig, Bound, ParamSet, SplitMix64, Tape, Tensor, Var};
use log::{debug, warn};

use super::codebook::{quantize, CodeGrid, Codebook};
use crate::config::GeneratorConfig;
use crate::encoders::ImageBatch;
use crate::error::{Error, Result};

/// Maps a `[B, h, w, d_c]` code grid to `[B, 3, S, S]` images in `[0, 1]`.
pub trait Generator {
    fn grid(&self) -> (usize, usize);
    fn code_dim(&self) -> usize;
    fn image_size(&self) -> usize;
    fn decode(&self, tape: &mut Tape<f32>, codes: Var) -> Result<Var>;
}

/// Encoder: three conv3x3 + relu + 2x2 average-pool stages and a 1x1 conv
/// into code space. Decoder: 1x1 conv, three 2x transposed convs with relu,
/// a conv3x3 to RGB and a sigmoid.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyGenerator {
    cfg: GeneratorConfig,
    image_size: usize,
    params: ParamSet,
}

const STAGES: usize = 3;
const ENC: usize = 0;
const DEC: usize = 2 * STAGES + 2;
const CODEBOOK: usize = DEC + 2 * STAGES + 4;

/// Outcome of [`ToyGenerator::train`].
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorTraining {
    /// Total loss per step.
    pub losses: Vec<f64>,
    /// Codebook entries re-seeded because they went unused.
    pub restarts: usize,
}

impl ToyGenerator {
    pub fn new(cfg: &GeneratorConfig, image_size: usize) -> Result<Self> {
        let scale = 1 << STAGES;
        if cfg.grid == 0 || image_size != cfg.grid * scale {
            return Err(Error::Config(format!(
                "the toy generator maps a {0}x{0} grid to {1}x{1} images; image_size {image_size} does not match",
                cfg.grid,
                cfg.grid * scale
            )));
        }
        if cfg.codebook_size < 2 || cfg.code_dim == 0 || cfg.channels == 0 {
            return Err(Error::Config("generator needs >= 2 codes and positive widths".into()));
        }
        let mut rng = SplitMix64::new(cfg.seed);
        let (c, d) = (cfg.channels, cfg.code_dim);
        let mut p = ParamSet::new();
        let mut cin = 3;
        for i in 0..STAGES {
            p.add(format!("gen.enc{i}.w"), kaiming_uniform(&mut rng, &[c, cin, 3, 3], cin * 9));
            p.add(format!("gen.enc{i}.b"), Tensor::zeros(&[c]));
            cin = c;
        }
        p.add("gen.enc.proj.w", fan_in_uniform(&mut rng, &[d, c, 1, 1], c, 1.0));
        p.add("gen.enc.proj.b", Tensor::zeros(&[d]));
        p.add("gen.dec.proj.w", kaiming_uniform(&mut rng, &[c, d, 1, 1], d));
        p.add("gen.dec.proj.b", Tensor::zeros(&[c]));
        for i in 0..STAGES {
            p.add(format!("gen.dec{i}.w"), kaiming_uniform(&mut rng, &[c, c, 2, 2], c * 4));
            p.add(format!("gen.dec{i}.b"), Tensor::zeros(&[c]));
        }
        p.add("gen.dec.rgb.w", fan_in_uniform(&mut rng, &[3, c, 3, 3], c * 9, 1.0));
        p.add("gen.dec.rgb.b", Tensor::zeros(&[3]));
        p.add("gen.codebook", uniform(&mut rng, &[cfg.codebook_size, d], -0.5, 0.5));
        debug_assert_eq!(p.len(), CODEBOOK + 1);
        Ok(Self {
            cfg: cfg.clone(),
            image_size,
            params: p,
        })
    }

    /// Rebuilds a generator around stored parameters.
    pub fn from_params(cfg: &GeneratorConfig, image_size: usize, params: ParamSet) -> Result<Self> {
        let fresh = Self::new(cfg, image_size)?;
        fresh.params.ensure_mirrors(&params)?;
        Codebook::new(params.get(CODEBOOK).value.clone())?;
        Ok(Self { params, ..fresh })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn codebook(&self) -> Codebook {
        Codebook::new(self.params.get(CODEBOOK).value.clone()).expect("validated on construction")
    }

    fn encode_var(&self, tape: &mut Tape<f32>, p: &Bound, images: Var) -> Result<Var> {
        let mut x = tape.add_scalar(images, -0.5);
        for i in 0..STAGES {
            x = tape.conv2d(x, p[ENC + 2 * i], p[ENC + 2 * i + 1], 1)?;
            x = tape.relu(x);
            x = tape.avg_pool2d(x, 2, 2)?;
        }
        let z = tape.conv2d(x, p[2 * STAGES], p[2 * STAGES + 1], 0)?;
        // [B, d, h, w] -> [B, h, w, d]
        Ok(tape.permute(z, &[0, 2, 3, 1])?)
    }

    fn decode_var(&self, tape: &mut Tape<f32>, p: &Bound, codes: Var) -> Result<Var> {
        let s = tape.shape(codes).to_vec();
        let (g, d) = (self.cfg.grid, self.cfg.code_dim);
        if s.len() != 4 || s[1] != g || s[2] != g || s[3] != d {
            return Err(Error::Data(format!("generator expects codes [B,{g},{g},{d}], got {s:?}")));
        }
        let x = tape.permute(codes, &[0, 3, 1, 2])?;
        let x = tape.conv2d(x, p[DEC], p[DEC + 1], 0)?;
        let mut x = tape.relu(x);
        for i in 0..STAGES {
            x = tape.conv_transpose2x2(x, p[DEC + 2 + 2 * i], p[DEC + 3 + 2 * i])?;
            x = tape.relu(x);
        }
        let x = tape.conv2d(x, p[DEC + 2 + 2 * STAGES], p[DEC + 3 + 2 * STAGES], 1)?;
        Ok(tape.sigmoid(x))
    }

    /// Continuous encoder outputs for a batch, `[B*h*w, d_c]` row per cell.
    pub fn encode(&self, batch: &ImageBatch) -> Result<Tensor<f32>> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let x = tape.constant(batch.values().clone());
        let z = self.encode_var(&mut tape, &p, x)?;
        let n = batch.len() * self.cfg.grid * self.cfg.grid;
        Ok(tape.value(z).clone().reshaped(&[n, self.cfg.code_dim])?)
    }

    /// Quantized code grids of a batch, one per image.
    pub fn encode_grids(&self, batch: &ImageBatch) -> Result<Vec<(CodeGrid, Vec<usize>)>> {
        let z = self.encode(batch)?;
        let book = self.codebook();
        let (g, d) = (self.cfg.grid, self.cfg.code_dim);
        let per = g * g * d;
        (0..batch.len())
            .map(|b| {
                let raw = CodeGrid::new(g, g, d, z.data()[b * per..(b + 1) * per].to_vec())?;
                quantize(&raw, &book)
            })
            .collect()
    }

    /// Decodes code grids without recording gradients.
    pub fn render(&self, grids: &[CodeGrid]) -> Result<Tensor<f32>> {
        let (g, d) = (self.cfg.grid, self.cfg.code_dim);
        let mut values = Vec::with_capacity(grids.len() * g * g * d);
        for grid in grids {
            if grid.h != g || grid.w != g || grid.dim != d {
                return Err(Error::Data(format!(
                    "grid {}x{}x{} does not fit a {g}x{g}x{d} generator",
                    grid.h, grid.w, grid.dim
                )));
            }
            values.extend_from_slice(&grid.values);
        }
        let mut tape = Tape::new();
        let codes = tape.constant(Tensor::new(&[grids.len(), g, g, d], values)?);
        let x = self.decode(&mut tape, codes)?;
        Ok(tape.value(x).clone())
    }

    /// Mean squared reconstruction error through the quantizer, and the
    /// fraction of codebook entries chosen at least once.
    pub fn evaluate(&self, batch: &ImageBatch) -> Result<(f64, f64)> {
        let coded = self.encode_grids(batch)?;
        let mut used = vec![false; self.cfg.codebook_size];
        for (_, idx) in &coded {
            for &k in idx {
                used[k] = true;
            }
        }
        let grids: Vec<CodeGrid> = coded.into_iter().map(|c| c.0).collect();
        let out = self.render(&grids)?;
        let mse = out
            .data()
            .iter()
            .zip(batch.values().data())
            .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
            .sum::<f64>()
            / out.numel() as f64;
        let usage = used.iter().filter(|&&u| u).count() as f64 / used.len() as f64;
        Ok((mse, usage))
    }

    /// Trains by pixel reconstruction with a straight-through quantizer, a
    /// codebook loss and a commitment loss. Entries unused over a window of
    /// steps are re-seeded from current encoder outputs.
    pub fn train(&mut self, images: &[Vec<f32>]) -> Result<GeneratorTraining> {
        const RESTART_EVERY: usize = 50;
        let cfg = self.cfg.clone();
        if images.len() < cfg.batch_size || cfg.batch_size == 0 {
            return Err(Error::Data(format!(
                "generator training needs at least {} images, got {}",
                cfg.batch_size.max(1),
                images.len()
            )));
        }
        let mut adam = Adam::new(
            AdamConfig {
                lr: cfg.lr,
                weight_decay: 0.0,
                ..AdamConfig::default()
            },
            &self.params,
        );
        let mut rng = SplitMix64::stream(cfg.seed, 1);
        let mut order: Vec<usize> = (0..images.len()).collect();
        let mut cursor = images.len();
        let (g, d) = (cfg.grid, cfg.code_dim);
        let mut usage = vec![0usize; cfg.codebook_size];
        let mut out = GeneratorTraining {
            losses: Vec::with_capacity(cfg.train_steps),
            restarts: 0,
        };
        for step in 0..cfg.train_steps {
            let mut rows = Vec::with_capacity(cfg.batch_size);
            for _ in 0..cfg.batch_size {
                if cursor == order.len() {
                    rng.shuffle(&mut order);
                    cursor = 0;
                }
                rows.push(images[order[cursor]].clone());
                cursor += 1;
            }
            let batch = ImageBatch::from_chw(&rows, self.image_size)?;
            let cells = batch.len() * g * g;

            let mut tape = Tape::new();
            let p = self.params.bind(&mut tape, true);
            let x = tape.constant(batch.values().clone());
            let ze = self.encode_var(&mut tape, &p, x)?;
            let ze_rows = tape.reshape(ze, &[cells, d])?;
            let ze_value = tape.value(ze_rows).clone();
            let book = Codebook::new(self.params.get(CODEBOOK).value.clone())?;
            let idx: Vec<usize> = (0..cells).map(|i| book.nearest(ze_value.row(i))).collect();
            for &k in &idx {
                usage[k] += 1;
            }
            let zq = tape.embedding(p[CODEBOOK], &idx)?;
            let zq_value = tape.value(zq).clone();
            // Straight-through: forward uses the codes, backward skips the
            // quantizer.
            let shift = tape.constant(Tensor::new(
                &[cells, d],
                zq_value.data().iter().zip(ze_value.data()).map(|(q, e)| q - e).collect(),
            )?);
            let st = tape.add(ze_rows, shift)?;
            let st = tape.reshape(st, &[batch.len(), g, g, d])?;
            let recon = self.decode_var(&mut tape, &p, st)?;
            let rec_loss = tape.mse(recon, x)?;
            let ze_const = tape.constant(ze_value.clone());
            let book_loss = tape.mse(zq, ze_const)?;
            let zq_const = tape.constant(zq_value);
            let commit = tape.mse(ze_rows, zq_const)?;
            let commit = tape.scale(commit, cfg.commitment);
            let loss = tape.add(rec_loss, book_loss)?;
            let loss = tape.add(loss, commit)?;
            let value = tape.value(loss).item().unwrap_or(f32::NAN) as f64;
            if !value.is_finite() {
                return Err(Error::Numerical(format!("generator loss is {value} at step {step}")));
            }
            out.losses.push(value);
            tape.backward(loss)?;
            let grads = self.params.gradients(&tape, &p);
            adam.step(&mut self.params, &grads)?;

            if (step + 1) % RESTART_EVERY == 0 && step + 1 < cfg.train_steps {
                let table = self.params.get_mut(CODEBOOK).value.data_mut();
                for (k, count) in usage.iter_mut().enumerate() {
                    if *count == 0 {
                        let src = ze_value.row(rng.below(cells));
                        for (j, v) in table[k * d..(k + 1) * d].iter_mut().enumerate() {
                            *v = src[j] + rng.uniform(-0.01, 0.01);
                        }
                        out.restarts += 1;
                    }
                    *count = 0;
                }
            }
            if step % 100 == 0 {
                debug!("generator step {step}: loss {value:.5}");
            }
        }
        if out.losses.len() > 100 && out.losses[100] >= out.losses[0] {
            warn!(
                "generator loss did not decrease over the first 100 steps ({:.5} -> {:.5})",
                out.losses[0], out.losses[100]
            );
        }
        Ok(out)
    }
}

impl Generator for ToyGenerator {
    fn grid(&self) -> (usize, usize) {
        (self.cfg.grid, self.cfg.grid)
    }

    fn code_dim(&self) -> usize {
        self.cfg.code_dim
    }

    fn image_size(&self) -> usize {
        self.image_size
    }

    fn decode(&self, tape: &mut Tape<f32>, codes: Var) -> Result<Var> {
        let p = self.params.bind(tape, false);
        self.decode_var(tape, &p, codes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> GeneratorConfig {
        GeneratorConfig {
            grid: 2,
            code_dim: 4,
            codebook_size: 8,
            channels: 4,
            train_steps: 30,
            batch_size: 4,
            ..GeneratorConfig::default()
        }
    }

    #[test]
    fn size_mismatch_rejected() {
        assert!(ToyGenerator::new(&small(), 32).is_err());
        assert!(ToyGenerator::new(&small(), 16).is_ok());
    }

    #[test]
    fn decode_shape_and_range() {
        let g = ToyGenerator::new(&small(), 16).unwrap();
        let mut rng = SplitMix64::new(1);
        let grid = CodeGrid::sample(&g.codebook(), 2, 2, &mut rng);
        let img = g.render(&[grid.clone(), grid]).unwrap();
        assert_eq!(img.shape(), &[2, 3, 16, 16]);
        assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(img.data()[..768], img.data()[768..]);
    }

    #[test]
    fn training_reduces_loss_on_flat_images() {
        let mut g = ToyGenerator::new(&small(), 16).unwrap();
        let images: Vec<Vec<f32>> = (0..8).map(|i| vec![i as f32 / 8.0; 3 * 16 * 16]).collect();
        let report = g.train(&images).unwrap();
        let head: f64 = report.losses[..5].iter().sum();
        let tail: f64 = report.losses[25..].iter().sum();
        assert!(tail < head, "{head} -> {tail}");
        assert!(ToyGenerator::from_params(g.config(), 16, g.params().clone()).is_ok());
    }
}
