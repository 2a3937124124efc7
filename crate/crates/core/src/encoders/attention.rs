//! Post-norm transformer encoder layers:
//! `S' = LN(S + MHA(S))`, then `S = LN(S' + FFN(S'))`.

use brivl_tensor::param::{fan_in_uniform, kaiming_uniform};
use brivl_tensor::{Bound, ParamSet, Scalar, SplitMix64, Tape, Tensor, Var};

use crate::error::{Error, Result};

const PER_LAYER: usize = 16;
const LN_EPS: f64 = 1e-5;

/// Where a stack's parameters live inside its tower's [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SaLayout {
    pub base: usize,
    pub layers: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SaStack {
    pub width: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub layout: SaLayout,
}

impl SaStack {
    /// Registers `layers` layers under `prefix`.
    pub fn register(
        params: &mut ParamSet,
        rng: &mut SplitMix64,
        prefix: &str,
        width: usize,
        heads: usize,
        layers: usize,
        ffn_mult: usize,
    ) -> Result<Self> {
        if heads == 0 || width % heads != 0 {
            return Err(Error::Config(format!(
                "{heads} attention heads do not divide model width {width}"
            )));
        }
        let ffn_hidden = width * ffn_mult;
        let base = params.len();
        for l in 0..layers {
            let p = |n: &str| format!("{prefix}.{l}.{n}");
            for n in ["q", "k", "v", "o"] {
                let w = if n == "o" {
                    Tensor::zeros(&[width, width])
                } else {
                    fan_in_uniform(rng, &[width, width], width, 1.0)
                };
                params.add(p(&format!("w{n}")), w);
                params.add(p(&format!("b{n}")), Tensor::zeros(&[width]));
            }
            params.add(p("ln1.gamma"), Tensor::ones(&[width]));
            params.add(p("ln1.beta"), Tensor::zeros(&[width]));
            params.add(p("ffn.w1"), kaiming_uniform(rng, &[width, ffn_hidden], width));
            params.add(p("ffn.b1"), Tensor::zeros(&[ffn_hidden]));
            params.add(p("ffn.w2"), Tensor::zeros(&[ffn_hidden, width]));
            params.add(p("ffn.b2"), Tensor::zeros(&[width]));
            params.add(p("ln2.gamma"), Tensor::ones(&[width]));
            params.add(p("ln2.beta"), Tensor::zeros(&[width]));
        }
        Ok(Self {
            width,
            heads,
            ffn_hidden,
            layout: SaLayout { base, layers },
        })
    }

    /// Runs every layer on `x[B, L, D]`. `mask`, when given, is an additive
    /// constant of shape `[B*heads, L, L]` applied to attention logits.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var, mask: Option<Var>) -> Result<Var> {
        let mut s = x;
        for l in 0..self.layout.layers {
            s = self.layer(tape, p, self.layout.base + l * PER_LAYER, s, mask)?;
        }
        Ok(s)
    }

    fn layer<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, at: usize, x: Var, mask: Option<Var>) -> Result<Var> {
        let attn = self.attention(tape, p, at, x, mask)?;
        let r1 = tape.add(x, attn)?;
        let s1 = tape.layer_norm(r1, p[at + 8], p[at + 9], LN_EPS)?;
        let h = tape.linear(s1, p[at + 10], Some(p[at + 11]))?;
        let h = tape.relu(h);
        let f = tape.linear(h, p[at + 12], Some(p[at + 13]))?;
        let r2 = tape.add(s1, f)?;
        Ok(tape.layer_norm(r2, p[at + 14], p[at + 15], LN_EPS)?)
    }

    fn attention<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, at: usize, x: Var, mask: Option<Var>) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 3 || shape[2] != self.width {
            return Err(Error::Data(format!(
                "attention input must be [B, L, {}], got {shape:?}",
                self.width
            )));
        }
        let (b, l, d, h) = (shape[0], shape[1], self.width, self.heads);
        let dh = d / h;
        let split = |tape: &mut Tape<T>, w: Var, bias: Var| -> Result<Var> {
            let y = tape.linear(x, w, Some(bias))?;
            let y = tape.reshape(y, &[b, l, h, dh])?;
            let y = tape.permute(y, &[0, 2, 1, 3])?;
            Ok(tape.reshape(y, &[b * h, l, dh])?)
        };
        let q = split(tape, p[at], p[at + 1])?;
        let k = split(tape, p[at + 2], p[at + 3])?;
        let v = split(tape, p[at + 4], p[at + 5])?;
        let logits = tape.bmm(q, k, true)?;
        let mut logits = tape.scale(logits, 1.0 / (dh as f64).sqrt());
        if let Some(m) = mask {
            logits = tape.add(logits, m)?;
        }
        let weights = tape.softmax(logits);
        let ctx = tape.bmm(weights, v, false)?;
        let ctx = tape.reshape(ctx, &[b, h, l, dh])?;
        let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = tape.reshape(ctx, &[b, l, d])?;
        Ok(tape.linear(ctx, p[at + 6], Some(p[at + 7]))?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stack(width: usize, heads: usize, layers: usize) -> (SaStack, ParamSet) {
        let mut params = ParamSet::new();
        let mut rng = SplitMix64::new(8);
        let s = SaStack::register(&mut params, &mut rng, "sa", width, heads, layers, 2).unwrap();
        params.perturb(&mut rng, 0.3);
        (s, params)
    }

    fn run(s: &SaStack, params: &ParamSet, x: &Tensor<f32>) -> Tensor<f32> {
        let mut tape = Tape::new();
        let p = params.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let y = s.forward(&mut tape, &p, xv, None).unwrap();
        tape.value(y).clone()
    }

    #[test]
    fn heads_must_divide_width() {
        let mut params = ParamSet::new();
        let mut rng = SplitMix64::new(1);
        assert!(SaStack::register(&mut params, &mut rng, "sa", 10, 4, 1, 2).is_err());
    }

    #[test]
    fn permutation_equivariant() {
        let (s, params) = stack(8, 2, 2);
        let mut rng = SplitMix64::new(3);
        let (l, d) = (5, 8);
        let x = brivl_tensor::param::uniform(&mut rng, &[1, l, d], -1.0, 1.0);
        let perm = [3, 0, 4, 1, 2];
        let mut px = Vec::new();
        for &i in &perm {
            px.extend_from_slice(&x.data()[i * d..(i + 1) * d]);
        }
        let px = Tensor::new(&[1, l, d], px).unwrap();
        let y = run(&s, &params, &x);
        let py = run(&s, &params, &px);
        for (row, &i) in perm.iter().enumerate() {
            for j in 0..d {
                let a = py.data()[row * d + j];
                let b = y.data()[i * d + j];
                assert!((a - b).abs() < 1e-5, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn output_projections_start_at_zero() {
        let mut params = ParamSet::new();
        let mut rng = SplitMix64::new(2);
        SaStack::register(&mut params, &mut rng, "sa", 8, 2, 1, 2).unwrap();
        for name in ["sa.0.wo", "sa.0.ffn.w2"] {
            assert!(params.by_name(name).unwrap().value.data().iter().all(|&v| v == 0.0));
        }
        assert!(params.by_name("sa.0.wq").unwrap().value.data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn single_position_attends_to_itself() {
        // With one position the softmax is [1], so attention returns v's
        // projection of that position regardless of q and k.
        let (s, params) = stack(4, 2, 1);
        let x = Tensor::new(&[1, 1, 4], vec![0.3, -0.2, 0.9, 0.1]).unwrap();
        let mut tape = Tape::new();
        let p = params.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let attn = s.attention(&mut tape, &p, 0, xv, None).unwrap();
        let v = tape.linear(xv, p[4], Some(p[5])).unwrap();
        let o = tape.linear(v, p[6], Some(p[7])).unwrap();
        assert_eq!(tape.value(attn).data(), tape.value(o).data());
    }
}
