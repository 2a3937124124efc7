use crate::error::{Result, TensorError};
use crate::rng::SplitMix64;
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor<f32>,
}

/// Ordered, named parameter tensors of one model.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    params: Vec<Parameter>,
}

/// Tape handles for every parameter of a [`ParamSet`], in registration order.
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl std::ops::Index<usize> for Bound {
    type Output = Var;
    fn index(&self, i: usize) -> &Var {
        &self.0[i]
    }
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

/// Per-parameter gradients collected after a backward sweep; `None` where the
/// parameter was not reached.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients(pub Vec<Option<Vec<f32>>>);

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor, returning its index.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<f32>) -> usize {
        self.params.push(Parameter {
            name: name.into(),
            value,
        });
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn get(&self, i: usize) -> &Parameter {
        &self.params[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Parameter {
        &mut self.params[i]
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Places every parameter on `tape` as a leaf, cast to `T`.
    pub fn bind<T: Scalar>(&self, tape: &mut Tape<T>, trainable: bool) -> Bound {
        Bound(
            self.params
                .iter()
                .map(|p| tape.leaf(p.value.cast::<T>(), trainable))
                .collect(),
        )
    }

    /// Binds every parameter as a constant except `index`, which is `var`.
    pub fn bind_with<T: Scalar>(&self, tape: &mut Tape<T>, index: usize, var: Var) -> Bound {
        Bound(
            self.params
                .iter()
                .enumerate()
                .map(|(i, p)| if i == index { var } else { tape.constant(p.value.cast::<T>()) })
                .collect(),
        )
    }

    pub fn gradients(&self, tape: &Tape<f32>, bound: &Bound) -> Gradients {
        Gradients(bound.0.iter().map(|&v| tape.grad(v).map(<[f32]>::to_vec)).collect())
    }

    /// True when `other` has the same names and shapes in the same order.
    pub fn mirrors(&self, other: &ParamSet) -> bool {
        self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|(a, b)| a.name == b.name && a.value.shape() == b.value.shape())
    }

    pub fn ensure_mirrors(&self, other: &ParamSet) -> Result<()> {
        if self.mirrors(other) {
            return Ok(());
        }
        Err(TensorError::invalid("param_set", "parameter layouts differ"))
    }

    /// Adds `U(-scale, scale)` noise to every value. Useful for exercising
    /// layers whose initialization zeroes a branch.
    pub fn perturb(&mut self, rng: &mut SplitMix64, scale: f32) {
        for p in &mut self.params {
            for v in p.value.data_mut() {
                *v += rng.uniform(-scale, scale);
            }
        }
    }

    /// FNV-1a over names, shapes and value bits.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        for p in &self.params {
            feed(p.name.as_bytes());
            for &d in p.value.shape() {
                feed(&(d as u64).to_le_bytes());
            }
            for v in p.value.data() {
                feed(&v.to_bits().to_le_bytes());
            }
        }
        h
    }
}

/// Fan-in scaled uniform initialization with variance `gain^2 / fan_in`:
/// `U(-b, b)` with `b = gain * sqrt(3 / fan_in)`.
pub fn fan_in_uniform(rng: &mut SplitMix64, shape: &[usize], fan_in: usize, gain: f64) -> Tensor<f32> {
    let bound = (gain * (3.0 / fan_in as f64).sqrt()) as f32;
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.uniform(-bound, bound)).collect();
    Tensor::new(shape, data).expect("shape product")
}

/// Kaiming uniform for layers feeding a ReLU: `U(-sqrt(6/fan_in), sqrt(6/fan_in))`.
pub fn kaiming_uniform(rng: &mut SplitMix64, shape: &[usize], fan_in: usize) -> Tensor<f32> {
    fan_in_uniform(rng, shape, fan_in, std::f64::consts::SQRT_2)
}

pub fn uniform(rng: &mut SplitMix64, shape: &[usize], lo: f32, hi: f32) -> Tensor<f32> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.uniform(lo, hi)).collect();
    Tensor::new(shape, data).expect("shape product")
}
