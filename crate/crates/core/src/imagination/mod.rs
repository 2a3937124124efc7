//! Input-gradient ascent on a frozen model: network visualization on raw
//! pixels, and text-to-image generation by searching a generator's code grid.
//!
//! Both procedures compute the text embedding once, then repeatedly embed the
//! current image, take the gradient of `-cos(z_image, z_text)` with respect
//! to the free input and step against it. The model parameters are bound as
//! constants, so they never change.

mod codebook;
mod generator;

use brivl_tensor::{ParamSet, SplitMix64, Tape, Tensor};

use crate::config::VisConfig;
use crate::contrastive::Towers;
use crate::encoders::ImageBatch;
use crate::error::{Error, Result};

pub use codebook::{quantize, CodeGrid, Codebook};
pub use generator::{Generator, GeneratorTraining, ToyGenerator};

/// Read-only view of a trained model.
#[derive(Clone, Copy)]
pub struct Frozen<'a> {
    pub towers: &'a Towers,
    pub image: &'a ParamSet,
    pub text: &'a ParamSet,
}

impl<'a> Frozen<'a> {
    /// Rejects a model that has taken no training step.
    pub fn new(towers: &'a Towers, image: &'a ParamSet, text: &'a ParamSet, steps_trained: u64) -> Result<Self> {
        if steps_trained == 0 {
            return Err(Error::Usage("the model has not been trained; load a trained checkpoint".into()));
        }
        Ok(Self { towers, image, text })
    }

    /// Checksum over both towers' parameters.
    pub fn fingerprint(&self) -> u64 {
        self.image.fingerprint() ^ self.text.fingerprint().rotate_left(1)
    }

    fn text_embedding(&self, text: &str) -> Result<Tensor<f32>> {
        self.towers.text.embed_texts(self.text, &self.towers.vocab, &[text])
    }
}

/// Final image (`[3, S, S]`, channel-first) and the cosine similarity before
/// each update followed by the cosine of the returned image.
#[derive(Clone, Debug, PartialEq)]
pub struct Imagined {
    pub image: Vec<f32>,
    pub trace: Vec<f64>,
}

impl Imagined {
    pub fn initial_cosine(&self) -> f64 {
        self.trace[0]
    }

    pub fn final_cosine(&self) -> f64 {
        *self.trace.last().expect("trace is never empty")
    }

    /// `iteration,cosine` per line.
    pub fn trace_text(&self) -> String {
        self.trace
            .iter()
            .enumerate()
            .map(|(i, c)| format!("{i},{c:.9}\n"))
            .collect()
    }
}

/// Network visualization: gradient descent with step `cfg.lr` on the pixels
/// of a seeded uniform-noise image, clamping to `[0, 1]` after every step.
/// With `cfg.neuron = Some((c, alpha))` the loss also subtracts `alpha` times
/// the mean activation of channel `c` of the last backbone layer.
pub fn visualize_text(model: Frozen<'_>, text: &str, cfg: &VisConfig) -> Result<Imagined> {
    if !(cfg.lr > 0.0) {
        return Err(Error::Config(format!("visualization step size must be positive, got {}", cfg.lr)));
    }
    if let Some((c, _)) = cfg.neuron {
        let channels = model.towers.image.llp_channels();
        if c >= channels {
            return Err(Error::Config(format!("neuron channel {c} out of range for {channels} channels")));
        }
    }
    let side = model.towers.config().image_size;
    let zt = model.text_embedding(text)?;
    let mut rng = SplitMix64::new(cfg.seed);
    let mut pixels: Vec<f32> = (0..3 * side * side).map(|_| rng.next_f32()).collect();
    let mut trace = Vec::with_capacity(cfg.max_iterations + 1);
    for it in 0..=cfg.max_iterations {
        let mut tape = Tape::<f32>::new();
        let p = model.image.bind(&mut tape, false);
        let x = tape.leaf(Tensor::new(&[1, 3, side, side], pixels.clone())?, true);
        let out = model.towers.image.forward(&mut tape, &p, x)?;
        let zt_var = tape.constant(zt.clone());
        let cos = tape.cosine_similarity(out.z, zt_var)?;
        let cos = tape.sum_all(cos);
        let cos_value = tape.value(cos).item().unwrap_or(f32::NAN) as f64;
        let mut loss = tape.scale(cos, -1.0);
        if let Some((c, alpha)) = cfg.neuron {
            let channel = tape.slice(out.llp, 1, c, 1)?;
            let act = tape.mean_all(channel);
            let act = tape.scale(act, -alpha);
            loss = tape.add(loss, act)?;
        }
        let loss_value = tape.value(loss).item().unwrap_or(f32::NAN);
        if !loss_value.is_finite() {
            return Err(Error::Numerical(format!("visualization loss is {loss_value} at iteration {it}")));
        }
        trace.push(cos_value);
        if it == cfg.max_iterations {
            break;
        }
        tape.backward(loss)?;
        let g = tape.grad(x).expect("pixels are a gradient leaf");
        for (v, &d) in pixels.iter_mut().zip(g) {
            *v = (*v - (cfg.lr as f32) * d).clamp(0.0, 1.0);
        }
    }
    Ok(Imagined { image: pixels, trace })
}

/// Mean activation of one last-layer backbone channel for a channel-first
/// image.
pub fn channel_activation(model: Frozen<'_>, image: &[f32], channel: usize) -> Result<f64> {
    let side = model.towers.config().image_size;
    let batch = ImageBatch::new(Tensor::new(&[1, 3, side, side], image.to_vec())?)?;
    let mut tape = Tape::<f32>::new();
    let p = model.image.bind(&mut tape, false);
    let x = tape.constant(batch.into_values());
    let llp = model.towers.image.backbone(&mut tape, &p, x)?;
    let channels = tape.shape(llp)[1];
    if channel >= channels {
        return Err(Error::Config(format!("neuron channel {channel} out of range for {channels} channels")));
    }
    let c = tape.slice(llp, 1, channel, 1)?;
    let m = tape.mean_all(c);
    Ok(tape.value(m).item().unwrap_or(f32::NAN) as f64)
}

/// Settings of codebook-generator inversion.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GenerateConfig {
    pub iterations: usize,
    pub lr: f64,
    pub seed: u64,
}

/// Generated image, its code grid, and the cosine trace (as in [`Imagined`]).
#[derive(Clone, Debug, PartialEq)]
pub struct Generated {
    pub imagined: Imagined,
    pub codes: CodeGrid,
}

/// Rejects a generator whose output does not fit the image tower.
pub fn check_compatible<G: Generator>(model: Frozen<'_>, generator: &G, codebook: &Codebook) -> Result<()> {
    let side = model.towers.config().image_size;
    if generator.image_size() != side {
        return Err(Error::Data(format!(
            "generator emits {0}x{0} images but the image tower expects {side}x{side}",
            generator.image_size()
        )));
    }
    if generator.code_dim() != codebook.dim() {
        return Err(Error::Data(format!(
            "generator takes {}-d codes but the codebook holds {}-d entries",
            generator.code_dim(),
            codebook.dim()
        )));
    }
    Ok(())
}

/// Text-to-image generation: starting from codebook entries sampled per
/// cell, each iteration decodes the grid, steps the grid against the
/// gradient of `-cos` with step `cfg.lr`, and snaps every cell back to its
/// nearest codebook entry.
pub fn generate_from_text<G: Generator>(
    model: Frozen<'_>,
    generator: &G,
    codebook: &Codebook,
    text: &str,
    cfg: &GenerateConfig,
) -> Result<Generated> {
    check_compatible(model, generator, codebook)?;
    if !(cfg.lr > 0.0) {
        return Err(Error::Config(format!("generation step size must be positive, got {}", cfg.lr)));
    }
    let zt = model.text_embedding(text)?;
    let (h, w) = generator.grid();
    let mut rng = SplitMix64::new(cfg.seed);
    let mut codes = CodeGrid::sample(codebook, h, w, &mut rng);
    let mut trace = Vec::with_capacity(cfg.iterations + 1);
    let mut image = Vec::new();
    for it in 0..=cfg.iterations {
        let mut tape = Tape::<f32>::new();
        let u = tape.leaf(codes.to_tensor(), true);
        let x = generator.decode(&mut tape, u)?;
        image = tape.value(x).data().to_vec();
        let p = model.image.bind(&mut tape, false);
        let out = model.towers.image.forward(&mut tape, &p, x)?;
        let zt_var = tape.constant(zt.clone());
        let cos = tape.cosine_similarity(out.z, zt_var)?;
        let cos = tape.sum_all(cos);
        let value = tape.value(cos).item().unwrap_or(f32::NAN) as f64;
        if !value.is_finite() {
            return Err(Error::Numerical(format!("generation similarity is {value} at iteration {it}")));
        }
        trace.push(value);
        if it == cfg.iterations {
            break;
        }
        let loss = tape.scale(cos, -1.0);
        tape.backward(loss)?;
        let g = tape.grad(u).expect("codes are a gradient leaf");
        let stepped: Vec<f32> = codes
            .values
            .iter()
            .zip(g)
            .map(|(&v, &d)| v - (cfg.lr as f32) * d)
            .collect();
        codes = quantize(&CodeGrid::new(h, w, codes.dim, stepped)?, codebook)?.0;
    }
    Ok(Generated {
        imagined: Imagined { image, trace },
        codes,
    })
}

/// Channel-first `[3, S, S]` values in `[0, 1]` to a binary PPM (P6).
pub fn to_ppm(image: &[f32], side: usize) -> Result<Vec<u8>> {
    let plane = side * side;
    if image.len() != 3 * plane {
        return Err(Error::Data(format!("expected {} values for a {side}x{side} image", 3 * plane)));
    }
    let mut out = format!("P6\n{side} {side}\n255\n").into_bytes();
    for i in 0..plane {
        for c in 0..3 {
            out.push((image[c * plane + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::EncoderConfig;

    fn model() -> (Towers, ParamSet, ParamSet) {
        let cfg = EncoderConfig {
            sa_layers: 1,
            ..EncoderConfig::default()
        };
        Towers::new(&cfg, 5).unwrap()
    }

    #[test]
    fn untrained_model_rejected() {
        let (t, ip, tp) = model();
        assert!(matches!(Frozen::new(&t, &ip, &tp, 0), Err(Error::Usage(_))));
    }

    #[test]
    fn zero_iterations_return_seeded_noise() {
        let (t, ip, tp) = model();
        let m = Frozen::new(&t, &ip, &tp, 1).unwrap();
        let cfg = VisConfig {
            max_iterations: 0,
            ..VisConfig::default()
        };
        let out = visualize_text(m, "red circle", &cfg).unwrap();
        let mut rng = SplitMix64::new(cfg.seed);
        let expect: Vec<f32> = (0..3 * 32 * 32).map(|_| rng.next_f32()).collect();
        assert_eq!(out.image, expect);
        assert_eq!(out.trace.len(), 1);
    }

    #[test]
    fn visualization_is_deterministic_clamped_and_leaves_model_alone() {
        let (t, ip, tp) = model();
        let m = Frozen::new(&t, &ip, &tp, 1).unwrap();
        let before = m.fingerprint();
        let cfg = VisConfig {
            max_iterations: 5,
            lr: 5.0,
            neuron: Some((3, 1.0)),
            seed: 9,
        };
        let a = visualize_text(m, "large blue square", &cfg).unwrap();
        let b = visualize_text(m, "large blue square", &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.trace.len(), 6);
        assert!(a.image.iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(m.fingerprint(), before);
    }

    #[test]
    fn neuron_out_of_range_rejected() {
        let (t, ip, tp) = model();
        let m = Frozen::new(&t, &ip, &tp, 1).unwrap();
        let cfg = VisConfig {
            neuron: Some((12, 1.0)),
            ..VisConfig::default()
        };
        assert!(matches!(visualize_text(m, "red", &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn generation_stays_on_codebook() {
        let (t, ip, tp) = model();
        let m = Frozen::new(&t, &ip, &tp, 1).unwrap();
        let gen = ToyGenerator::new(&crate::config::GeneratorConfig::default(), 32).unwrap();
        let book = gen.codebook();
        let cfg = GenerateConfig {
            iterations: 3,
            lr: 50.0,
            seed: 2,
        };
        let out = generate_from_text(m, &gen, &book, "green triangle", &cfg).unwrap();
        assert!(out.codes.on_codebook(&book));
        assert_eq!(out.imagined.trace.len(), 4);
        assert_eq!(out.imagined.image, gen.render(&[out.codes.clone()]).unwrap().data());
    }

    #[test]
    fn zero_generation_iterations_decode_the_initial_grid() {
        let (t, ip, tp) = model();
        let m = Frozen::new(&t, &ip, &tp, 1).unwrap();
        let gen = ToyGenerator::new(&crate::config::GeneratorConfig::default(), 32).unwrap();
        let book = gen.codebook();
        let cfg = GenerateConfig {
            iterations: 0,
            lr: 1.0,
            seed: 4,
        };
        let out = generate_from_text(m, &gen, &book, "red", &cfg).unwrap();
        let init = CodeGrid::sample(&book, 4, 4, &mut SplitMix64::new(4));
        assert_eq!(out.codes, init);
    }

    #[test]
    fn mismatched_generator_rejected() {
        let (t, ip, tp) = model();
        let m = Frozen::new(&t, &ip, &tp, 1).unwrap();
        let small = crate::config::GeneratorConfig {
            grid: 2,
            ..Default::default()
        };
        let gen = ToyGenerator::new(&small, 16).unwrap();
        assert!(check_compatible(m, &gen, &gen.codebook()).is_err());
    }

    #[test]
    fn ppm_header_and_pixel_order() {
        let img = vec![1.0, 0.0, 0.0, 0.5, 0.0, 1.0, 0.2, 0.0, 0.0, 0.0, 0.0, 0.0];
        let ppm = to_ppm(&img, 2).unwrap();
        assert!(ppm.starts_with(b"P6\n2 2\n255\n"));
        assert_eq!(&ppm[11..14], &[255, 0, 0]);
        assert_eq!(&ppm[14..17], &[0, 255, 0]);
        assert_eq!(&ppm[17..20], &[0, 51, 0]);
        assert!(to_ppm(&img, 3).is_err());
    }
}
