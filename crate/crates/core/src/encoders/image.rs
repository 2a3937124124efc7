//! Image tower: conv backbone, multi-scale patch pooling, self-attention over
//! patches, patch averaging, two-layer MLP head, unit normalization.

use brivl_tensor::param::kaiming_uniform;
use brivl_tensor::{Bound, ParamSet, Scalar, SplitMix64, Tape, Tensor, Var};

use super::attention::SaStack;
use super::ImageBatch;
use crate::config::EncoderConfig;
use crate::error::{Error, Result};

/// Output channels of the three backbone stages.
pub const BACKBONE_CHANNELS: [usize; 3] = [8, 12, 12];

/// Intermediate handles of one image forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ImageForward {
    /// Last feature map before pooling, `[B, C, h, w]`.
    pub llp: Var,
    /// Patch features `[B, N_p, C]` after the self-attention block.
    pub patches: Var,
    /// Unit embeddings `[B, d]`.
    pub z: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageEncoder {
    cfg: EncoderConfig,
    sa: Option<SaStack>,
    head: usize,
}

impl ImageEncoder {
    /// Builds the tower and its freshly initialized parameters.
    pub fn new(cfg: &EncoderConfig, rng: &mut SplitMix64) -> Result<(Self, ParamSet)> {
        cfg.validate()?;
        let mut params = ParamSet::new();
        let mut cin = 3;
        for (i, &c) in BACKBONE_CHANNELS.iter().enumerate() {
            params.add(format!("img.conv{i}.w"), kaiming_uniform(rng, &[c, cin, 3, 3], cin * 9));
            params.add(format!("img.conv{i}.b"), Tensor::zeros(&[c]));
            cin = c;
        }
        let sa = if cfg.use_sa {
            Some(SaStack::register(&mut params, rng, "img.sa", cin, cfg.sa_heads, cfg.sa_layers, cfg.ffn_mult)?)
        } else {
            None
        };
        let head = params.len();
        params.add("img.mlp.w1", kaiming_uniform(rng, &[cin, cfg.mlp_hidden], cin));
        params.add("img.mlp.b1", Tensor::zeros(&[cfg.mlp_hidden]));
        params.add("img.mlp.w2", kaiming_uniform(rng, &[cfg.mlp_hidden, cfg.embed_dim], cfg.mlp_hidden));
        params.add("img.mlp.b2", Tensor::zeros(&[cfg.embed_dim]));
        Ok((
            Self {
                cfg: cfg.clone(),
                sa,
                head,
            },
            params,
        ))
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn llp_channels(&self) -> usize {
        BACKBONE_CHANNELS[2]
    }

    /// Backbone: `[B,3,S,S]` -> `[B,12,S/2-4,S/2-4]`.
    pub fn backbone<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, images: Var) -> Result<Var> {
        let s = tape.shape(images).to_vec();
        let side = self.cfg.image_size;
        if s.len() != 4 || s[1] != 3 || s[2] != side || s[3] != side {
            return Err(Error::Data(format!("image encoder expects [B,3,{side},{side}], got {s:?}")));
        }
        let centered = tape.add_scalar(images, -0.5);
        let x = tape.conv2d(centered, p[0], p[1], 1)?;
        let x = tape.relu(x);
        let x = tape.avg_pool2d(x, 2, 2)?;
        let x = tape.conv2d(x, p[2], p[3], 0)?;
        let x = tape.relu(x);
        let x = tape.conv2d(x, p[4], p[5], 0)?;
        Ok(tape.relu(x))
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, images: Var) -> Result<ImageForward> {
        let llp = self.backbone(tape, p, images)?;
        let s = mspp(tape, llp, &self.cfg.mspp_scales)?;
        let patches = match &self.sa {
            Some(sa) => sa.forward(tape, p, s, None)?,
            None => s,
        };
        let r = tape.mean_axis(patches, 1)?;
        let z = mlp_head(tape, p, self.head, r)?;
        Ok(ImageForward { llp, patches, z })
    }

    /// Convenience: unit embeddings for a batch, no gradients recorded.
    pub fn embed(&self, params: &ParamSet, batch: &ImageBatch) -> Result<Tensor<f32>> {
        let mut tape = Tape::new();
        let p = params.bind(&mut tape, false);
        let x = tape.constant(batch.values().clone());
        let out = self.forward(&mut tape, &p, x)?;
        Ok(tape.value(out.z).clone())
    }
}

/// Multi-scale patch pooling: `[B, C, h, w]` -> `[B, sum(s^2), C]`. For each
/// scale the map is split into an `s x s` grid of equal regions, each averaged
/// into one patch; scales in order, regions row-major.
pub fn mspp<T: Scalar>(tape: &mut Tape<T>, map: Var, scales: &[usize]) -> Result<Var> {
    let s = tape.shape(map).to_vec();
    if s.len() != 4 {
        return Err(Error::Data(format!("mspp expects a [B,C,h,w] map, got {s:?}")));
    }
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let mut cols = Vec::with_capacity(scales.len());
    for &sc in scales {
        if sc == 0 || h % sc != 0 || w % sc != 0 {
            return Err(Error::Data(format!("scale {sc} does not divide the {h}x{w} map")));
        }
        let pooled = tape.avg_pool2d(map, h / sc, w / sc)?;
        cols.push(tape.reshape(pooled, &[b, c, sc * sc])?);
    }
    let all = tape.concat(&cols, 2)?;
    Ok(tape.permute(all, &[0, 2, 1])?)
}

/// `l2norm(W2 relu(W1 r + b1) + b2)` with weights starting at `at`.
pub(crate) fn mlp_head<T: Scalar>(tape: &mut Tape<T>, p: &Bound, at: usize, r: Var) -> Result<Var> {
    let h = tape.linear(r, p[at], Some(p[at + 1]))?;
    let h = tape.relu(h);
    let z = tape.linear(h, p[at + 2], Some(p[at + 3]))?;
    Ok(tape.l2_normalize(z))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backbone_shape() {
        let cfg = EncoderConfig::default();
        let (enc, params) = ImageEncoder::new(&cfg, &mut SplitMix64::new(1)).unwrap();
        let mut tape = Tape::<f32>::new();
        let p = params.bind(&mut tape, false);
        let x = tape.constant(Tensor::full(&[2, 3, 32, 32], 0.5));
        let llp = enc.backbone(&mut tape, &p, x).unwrap();
        assert_eq!(tape.shape(llp), &[2, 12, 12, 12]);
        let out = enc.forward(&mut tape, &p, x).unwrap();
        assert_eq!(tape.shape(out.patches), &[2, 37, 12]);
        assert_eq!(tape.shape(out.z), &[2, 64]);
    }

    #[test]
    fn mid_gray_image_gives_bias_path_response() {
        let cfg = EncoderConfig::default();
        let (enc, mut params) = ImageEncoder::new(&cfg, &mut SplitMix64::new(2)).unwrap();
        for (i, p) in params.iter_mut().enumerate() {
            if i % 2 == 1 && i < 6 {
                p.value.data_mut().iter_mut().enumerate().for_each(|(j, v)| *v = 0.1 * (j as f32 + 1.0));
            }
        }
        let mut tape = Tape::<f32>::new();
        let p = params.bind(&mut tape, false);
        // Mid-gray is the zero input once pixels are centred.
        let x = tape.constant(Tensor::full(&[1, 3, 32, 32], 0.5));
        let llp = enc.backbone(&mut tape, &p, x).unwrap();
        let v = tape.value(llp).data();
        // Stage one outputs its bias everywhere (padding is zero too), so every
        // later stage sees a constant map per channel.
        for c in 0..12 {
            let plane = &v[c * 144..(c + 1) * 144];
            assert!(plane.iter().all(|&a| a == plane[0]));
        }
    }

    #[test]
    fn mspp_hand_computed() {
        let mut tape = Tape::<f64>::new();
        let m = tape.constant(Tensor::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 6.0]).unwrap());
        let s = mspp(&mut tape, m, &[1, 2]).unwrap();
        assert_eq!(tape.shape(s), &[1, 5, 1]);
        assert_eq!(tape.value(s).data(), &[3.0, 1.0, 2.0, 3.0, 6.0]);
    }

    #[test]
    fn mspp_rejects_indivisible() {
        let mut tape = Tape::<f32>::new();
        let m = tape.constant(Tensor::zeros(&[1, 2, 12, 12]));
        assert!(mspp(&mut tape, m, &[5]).is_err());
    }
}
