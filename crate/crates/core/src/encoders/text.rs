//! Text tower: token + learned absolute position embeddings, masked
//! self-attention, masked mean over valid positions, MLP head, unit
//! normalization.

use brivl_tensor::param::{kaiming_uniform, uniform};
use brivl_tensor::{Bound, ParamSet, Scalar, SplitMix64, Tape, Tensor, Var};

use super::attention::SaStack;
use super::image::mlp_head;
use super::{TokenBatch, Vocabulary};
use crate::config::EncoderConfig;
use crate::error::{Error, Result};

/// Additive logit for attention to a padded key.
const MASKED: f64 = -1e9;

#[derive(Clone, Debug, PartialEq)]
pub struct TextEncoder {
    cfg: EncoderConfig,
    sa: Option<SaStack>,
    head: usize,
}

impl TextEncoder {
    pub fn new(cfg: &EncoderConfig, rng: &mut SplitMix64) -> Result<(Self, ParamSet)> {
        cfg.validate()?;
        let w = cfg.text_width;
        let mut params = ParamSet::new();
        params.add("txt.tok", uniform(rng, &[cfg.vocab_size, w], -0.5, 0.5));
        params.add("txt.pos", uniform(rng, &[cfg.max_text_len, w], -0.1, 0.1));
        let sa = if cfg.use_sa {
            Some(SaStack::register(&mut params, rng, "txt.sa", w, cfg.sa_heads, cfg.sa_layers, cfg.ffn_mult)?)
        } else {
            None
        };
        let head = params.len();
        params.add("txt.mlp.w1", kaiming_uniform(rng, &[w, cfg.mlp_hidden], w));
        params.add("txt.mlp.b1", Tensor::zeros(&[cfg.mlp_hidden]));
        params.add("txt.mlp.w2", kaiming_uniform(rng, &[cfg.mlp_hidden, cfg.embed_dim], cfg.mlp_hidden));
        params.add("txt.mlp.b2", Tensor::zeros(&[cfg.embed_dim]));
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

    pub fn tokenize(&self, vocab: &Vocabulary, texts: &[&str]) -> Result<TokenBatch> {
        let rows: Vec<Vec<usize>> = texts
            .iter()
            .map(|t| vocab.tokenize(t, self.cfg.max_text_len))
            .collect();
        TokenBatch::from_rows(&rows, None)
    }

    fn check(&self, tokens: &TokenBatch) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Data("empty token batch".into()));
        }
        if tokens.width > self.cfg.max_text_len {
            return Err(Error::Data(format!(
                "token width {} exceeds max_text_len {}",
                tokens.width, self.cfg.max_text_len
            )));
        }
        if let Some(i) = tokens.lengths.iter().position(|&l| l == 0) {
            return Err(Error::Data(format!("text {i} is empty")));
        }
        if let Some(&bad) = tokens.ids.iter().find(|&&id| id >= self.cfg.vocab_size) {
            return Err(Error::Data(format!("token id {bad} outside vocabulary of {}", self.cfg.vocab_size)));
        }
        Ok(())
    }

    /// Unit embeddings `[B, d]`.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, tokens: &TokenBatch) -> Result<Var> {
        self.check(tokens)?;
        let (b, l, w) = (tokens.len(), tokens.width, self.cfg.text_width);
        let tok = tape.embedding(p[0], &tokens.ids)?;
        let positions: Vec<usize> = (0..b).flat_map(|_| 0..l).collect();
        let pos = tape.embedding(p[1], &positions)?;
        let x = tape.add(tok, pos)?;
        let mut x = tape.reshape(x, &[b, l, w])?;

        if let Some(sa) = &self.sa {
            let mut mask = Vec::with_capacity(b * sa.heads * l * l);
            for &len in &tokens.lengths {
                let row: Vec<T> = (0..l)
                    .map(|j| T::from_f64(if j < len { 0.0 } else { MASKED }))
                    .collect();
                for _ in 0..sa.heads * l {
                    mask.extend_from_slice(&row);
                }
            }
            let mask = tape.constant(Tensor::new(&[b * sa.heads, l, l], mask)?);
            x = sa.forward(tape, p, x, Some(mask))?;
        }

        let mut weights = Vec::with_capacity(b * l);
        for &len in &tokens.lengths {
            let inv = 1.0 / len as f64;
            weights.extend((0..l).map(|j| T::from_f64(if j < len { inv } else { 0.0 })));
        }
        let weights = tape.constant(Tensor::new(&[b, 1, l], weights)?);
        let pooled = tape.bmm(weights, x, false)?;
        let r = tape.reshape(pooled, &[b, w])?;
        mlp_head(tape, p, self.head, r)
    }

    pub fn embed(&self, params: &ParamSet, tokens: &TokenBatch) -> Result<Tensor<f32>> {
        let mut tape = Tape::new();
        let p = params.bind(&mut tape, false);
        let z = self.forward(&mut tape, &p, tokens)?;
        Ok(tape.value(z).clone())
    }

    /// Tokenizes and embeds raw strings.
    pub fn embed_texts(&self, params: &ParamSet, vocab: &Vocabulary, texts: &[&str]) -> Result<Tensor<f32>> {
        let tokens = self.tokenize(vocab, texts)?;
        self.embed(params, &tokens)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup() -> (TextEncoder, ParamSet, Vocabulary) {
        let cfg = EncoderConfig::default();
        let (enc, params) = TextEncoder::new(&cfg, &mut SplitMix64::new(4)).unwrap();
        (enc, params, Vocabulary::standard())
    }

    #[test]
    fn padding_never_changes_embedding() {
        let (enc, params, vocab) = setup();
        let ids = vocab.tokenize("small red circle", 16);
        let short = TokenBatch::from_rows(&[ids.clone()], None).unwrap();
        let long = TokenBatch::from_rows(&[ids], Some(16)).unwrap();
        let a = enc.embed(&params, &short).unwrap();
        let b = enc.embed(&params, &long).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() <= 1e-6, "{x} vs {y}");
        }
    }

    #[test]
    fn empty_text_rejected() {
        let (enc, params, vocab) = setup();
        assert!(enc.embed_texts(&params, &vocab, &[""]).is_err());
    }

    #[test]
    fn unit_norm_and_identical_inputs() {
        let (enc, params, vocab) = setup();
        let z = enc
            .embed_texts(&params, &vocab, &["blue square", "blue square", "a striped background"])
            .unwrap();
        let d = 64;
        for r in 0..3 {
            let n: f32 = z.data()[r * d..(r + 1) * d].iter().map(|v| v * v).sum::<f32>().sqrt();
            assert!((n - 1.0).abs() < 1e-5);
        }
        assert_eq!(&z.data()[..d], &z.data()[d..2 * d]);
    }
}
