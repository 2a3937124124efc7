//! Finite-difference gradient checking.
//!
//! The analytic gradient comes from an `f32` tape (the training path); the
//! numeric oracle re-evaluates the same function on an `f64` tape with central
//! differences `(f(x + h e_i) - f(x - h e_i)) / 2h`.
//!
//! Per-element relative error is
//! `|a - n| / max(|a|, |n|, 1e-2 * max_j |n_j|, 1e-12)`: components far below
//! the gradient's own scale are judged against that scale, since `f32`
//! accumulation error is relative to the largest terms, not to each element.

use crate::error::{Result, TensorError};
use crate::rng::SplitMix64;
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

/// A scalar-valued function of one tensor, evaluable at either precision.
pub trait Differentiable {
    fn eval<T: Scalar>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub name: String,
    pub max_rel_error: f64,
    pub errors: Vec<f64>,
}

impl GradCheckReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_error.is_finite() && self.max_rel_error < tolerance
    }

    /// Merges several reports (e.g. one per input) under one name.
    pub fn merge(name: impl Into<String>, parts: impl IntoIterator<Item = GradCheckReport>) -> Self {
        let errors: Vec<f64> = parts.into_iter().flat_map(|r| r.errors).collect();
        Self {
            name: name.into(),
            max_rel_error: errors.iter().copied().fold(0.0, f64::max),
            errors,
        }
    }
}

fn eval_scalar<T: Scalar, F: Differentiable>(f: &F, x: &Tensor<f32>, requires_grad: bool) -> Result<(Tape<T>, Var, Var)> {
    let mut tape = Tape::<T>::new();
    let xv = tape.leaf(x.cast::<T>(), requires_grad);
    let y = f.eval(&mut tape, xv)?;
    if tape.value(y).numel() != 1 {
        return Err(TensorError::NonScalarLoss(tape.shape(y).to_vec()));
    }
    Ok((tape, xv, y))
}

/// Gradient of `f` at `x` by backpropagation on an `f32` tape.
pub fn analytic_gradient<F: Differentiable>(f: &F, x: &Tensor<f32>) -> Result<Vec<f64>> {
    let (mut tape, xv, y) = eval_scalar::<f32, F>(f, x, true)?;
    tape.backward(y)?;
    Ok(match tape.grad(xv) {
        Some(g) => g.iter().map(|&v| v as f64).collect(),
        None => vec![0.0; x.numel()],
    })
}

fn eval_f64<F: Differentiable>(f: &F, x: &Tensor<f64>) -> Result<f64> {
    let mut tape = Tape::<f64>::new();
    let xv = tape.constant(x.clone());
    let y = f.eval(&mut tape, xv)?;
    tape.value(y)
        .item()
        .ok_or_else(|| TensorError::NonScalarLoss(tape.shape(y).to_vec()))
}

/// Central differences in `f64` at the listed element indices (all when
/// `None`). Rejects `f` if two unperturbed evaluations disagree.
pub fn numeric_gradient<F: Differentiable>(
    f: &F,
    x: &Tensor<f32>,
    step: f64,
    indices: Option<&[usize]>,
) -> Result<Vec<f64>> {
    if !(step > 0.0 && step.is_finite()) {
        return Err(TensorError::invalid("finite_difference_check", format!("step must be positive, got {step}")));
    }
    let base = x.cast::<f64>();
    let first = eval_f64(f, &base)?;
    let second = eval_f64(f, &base)?;
    if first.to_bits() != second.to_bits() {
        return Err(TensorError::NonDeterministic);
    }
    let all: Vec<usize>;
    let idx = match indices {
        Some(i) => i,
        None => {
            all = (0..x.numel()).collect();
            &all
        }
    };
    let mut out = Vec::with_capacity(idx.len());
    let mut probe = base.clone();
    for &i in idx {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let plus = eval_f64(f, &probe)?;
        probe.data_mut()[i] = orig - step;
        let minus = eval_f64(f, &probe)?;
        probe.data_mut()[i] = orig;
        out.push((plus - minus) / (2.0 * step));
    }
    Ok(out)
}

pub fn compare(name: impl Into<String>, analytic: &[f64], numeric: &[f64]) -> GradCheckReport {
    let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (1e-2 * scale).max(1e-12);
    let errors: Vec<f64> = analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .collect();
    GradCheckReport {
        name: name.into(),
        max_rel_error: errors.iter().copied().fold(0.0, f64::max),
        errors,
    }
}

/// Compares backpropagated and finite-difference gradients of `f` at `x`.
pub fn finite_difference_check<F: Differentiable>(
    name: &str,
    f: &F,
    x: &Tensor<f32>,
    step: f64,
    indices: Option<&[usize]>,
) -> Result<GradCheckReport> {
    let numeric = numeric_gradient(f, x, step, indices)?;
    let full = analytic_gradient(f, x)?;
    let analytic: Vec<f64> = match indices {
        Some(idx) => idx.iter().map(|&i| full[i]).collect(),
        None => full,
    };
    Ok(compare(name, &analytic, &numeric))
}

/// `count` distinct indices below `n` (all of them when `n <= count`).
pub fn sample_indices(rng: &mut SplitMix64, n: usize, count: usize) -> Vec<usize> {
    let mut all: Vec<usize> = (0..n).collect();
    if n <= count {
        return all;
    }
    rng.shuffle(&mut all);
    all.truncate(count);
    all.sort_unstable();
    all
}

/// Every differentiable primitive of the tape, for registry-driven checks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Primitive {
    Add,
    Sub,
    Mul,
    Scale,
    AddScalar,
    AddBias,
    MatMul,
    Bmm,
    BmmTransposed,
    Linear,
    Conv2d,
    ConvTranspose2x2,
    AvgPool2d,
    Relu,
    Sigmoid,
    LayerNorm,
    Softmax,
    Concat,
    Slice,
    Reshape,
    Permute,
    SumAll,
    MeanAll,
    SumAxis,
    L2Normalize,
    Dot,
    CosineSimilarity,
    Mse,
    Embedding,
    CrossEntropy,
}

impl Primitive {
    pub const ALL: [Primitive; 30] = [
        Primitive::Add,
        Primitive::Sub,
        Primitive::Mul,
        Primitive::Scale,
        Primitive::AddScalar,
        Primitive::AddBias,
        Primitive::MatMul,
        Primitive::Bmm,
        Primitive::BmmTransposed,
        Primitive::Linear,
        Primitive::Conv2d,
        Primitive::ConvTranspose2x2,
        Primitive::AvgPool2d,
        Primitive::Relu,
        Primitive::Sigmoid,
        Primitive::LayerNorm,
        Primitive::Softmax,
        Primitive::Concat,
        Primitive::Slice,
        Primitive::Reshape,
        Primitive::Permute,
        Primitive::SumAll,
        Primitive::MeanAll,
        Primitive::SumAxis,
        Primitive::L2Normalize,
        Primitive::Dot,
        Primitive::CosineSimilarity,
        Primitive::Mse,
        Primitive::Embedding,
        Primitive::CrossEntropy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::Mul => "mul",
            Primitive::Scale => "scale",
            Primitive::AddScalar => "add_scalar",
            Primitive::AddBias => "add_bias",
            Primitive::MatMul => "matmul",
            Primitive::Bmm => "bmm",
            Primitive::BmmTransposed => "bmm_transposed",
            Primitive::Linear => "linear",
            Primitive::Conv2d => "conv2d",
            Primitive::ConvTranspose2x2 => "conv_transpose2x2",
            Primitive::AvgPool2d => "avg_pool2d",
            Primitive::Relu => "relu",
            Primitive::Sigmoid => "sigmoid",
            Primitive::LayerNorm => "layer_norm",
            Primitive::Softmax => "softmax",
            Primitive::Concat => "concat",
            Primitive::Slice => "slice",
            Primitive::Reshape => "reshape",
            Primitive::Permute => "permute",
            Primitive::SumAll => "sum_all",
            Primitive::MeanAll => "mean_all",
            Primitive::SumAxis => "sum_axis",
            Primitive::L2Normalize => "l2_normalize",
            Primitive::Dot => "dot",
            Primitive::CosineSimilarity => "cosine_similarity",
            Primitive::Mse => "mse",
            Primitive::Embedding => "embedding",
            Primitive::CrossEntropy => "cross_entropy",
        }
    }

    /// Shapes of the differentiable inputs used by the check.
    fn input_shapes(self) -> Vec<Vec<usize>> {
        use Primitive::*;
        match self {
            Add | Sub | Mul | Mse | Dot | CosineSimilarity => vec![vec![3, 4], vec![3, 4]],
            Scale | AddScalar | Relu | Sigmoid | Softmax | Slice | Reshape | SumAll | MeanAll | SumAxis
            | L2Normalize | CrossEntropy => vec![vec![3, 5]],
            AddBias => vec![vec![2, 3, 4], vec![4]],
            MatMul => vec![vec![3, 4], vec![4, 2]],
            Bmm => vec![vec![2, 3, 4], vec![2, 4, 5]],
            BmmTransposed => vec![vec![2, 3, 4], vec![2, 5, 4]],
            Linear => vec![vec![2, 3, 4], vec![4, 5], vec![5]],
            Conv2d => vec![vec![2, 2, 5, 5], vec![3, 2, 3, 3], vec![3]],
            ConvTranspose2x2 => vec![vec![2, 3, 2, 3], vec![3, 2, 2, 2], vec![2]],
            AvgPool2d => vec![vec![2, 2, 4, 6]],
            LayerNorm => vec![vec![3, 6], vec![6], vec![6]],
            Concat => vec![vec![2, 3, 2], vec![2, 1, 2]],
            Permute => vec![vec![2, 3, 4]],
            Embedding => vec![vec![5, 3]],
        }
    }

    fn apply<T: Scalar>(self, tape: &mut Tape<T>, v: &[Var]) -> Result<Var> {
        use Primitive::*;
        match self {
            Add => tape.add(v[0], v[1]),
            Sub => tape.sub(v[0], v[1]),
            Mul => tape.mul(v[0], v[1]),
            Scale => Ok(tape.scale(v[0], -1.7)),
            AddScalar => Ok(tape.add_scalar(v[0], 0.3)),
            AddBias => tape.add_bias(v[0], v[1]),
            MatMul => tape.matmul(v[0], v[1]),
            Bmm => tape.bmm(v[0], v[1], false),
            BmmTransposed => tape.bmm(v[0], v[1], true),
            Linear => tape.linear(v[0], v[1], Some(v[2])),
            Conv2d => tape.conv2d(v[0], v[1], v[2], 1),
            ConvTranspose2x2 => tape.conv_transpose2x2(v[0], v[1], v[2]),
            AvgPool2d => tape.avg_pool2d(v[0], 2, 3),
            Relu => Ok(tape.relu(v[0])),
            Sigmoid => Ok(tape.sigmoid(v[0])),
            LayerNorm => tape.layer_norm(v[0], v[1], v[2], 1e-5),
            Softmax => Ok(tape.softmax(v[0])),
            Concat => tape.concat(&[v[0], v[1]], 1),
            Slice => tape.slice(v[0], 1, 1, 3),
            Reshape => tape.reshape(v[0], &[5, 3]),
            Permute => tape.permute(v[0], &[2, 0, 1]),
            SumAll => Ok(tape.sum_all(v[0])),
            MeanAll => Ok(tape.mean_all(v[0])),
            SumAxis => tape.sum_axis(v[0], 0),
            L2Normalize => Ok(tape.l2_normalize(v[0])),
            Dot => tape.dot(v[0], v[1]),
            CosineSimilarity => tape.cosine_similarity(v[0], v[1]),
            Mse => tape.mse(v[0], v[1]),
            Embedding => tape.embedding(v[0], &[4, 0, 2, 4]),
            CrossEntropy => tape.cross_entropy(v[0], &[1, 4, 0]),
        }
    }

    /// Checks the gradient with respect to every input of the primitive.
    pub fn check(self, rng: &mut SplitMix64, step: f64) -> Result<GradCheckReport> {
        let inputs: Vec<Tensor<f32>> = self
            .input_shapes()
            .iter()
            .map(|s| {
                let n: usize = s.iter().product();
                // Magnitudes kept away from zero so relu kinks sit outside the
                // finite-difference stencil.
                let data = (0..n)
                    .map(|_| {
                        let m = rng.uniform(0.2, 1.0);
                        if rng.bernoulli(0.5) { m } else { -m }
                    })
                    .collect();
                Tensor::new(s, data).expect("shape")
            })
            .collect();
        let out_numel = {
            let mut tape = Tape::<f32>::new();
            let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
            let y = self.apply(&mut tape, &vars)?;
            tape.value(y).numel()
        };
        let projection: Vec<f32> = (0..out_numel).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let mut parts = Vec::new();
        for wrt in 0..inputs.len() {
            let case = PrimitiveCase {
                prim: self,
                inputs: &inputs,
                wrt,
                projection: &projection,
            };
            parts.push(finite_difference_check(self.name(), &case, &inputs[wrt], step, None)?);
        }
        Ok(GradCheckReport::merge(self.name(), parts))
    }
}

struct PrimitiveCase<'a> {
    prim: Primitive,
    inputs: &'a [Tensor<f32>],
    wrt: usize,
    projection: &'a [f32],
}

impl Differentiable for PrimitiveCase<'_> {
    fn eval<T: Scalar>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let vars: Vec<Var> = self
            .inputs
            .iter()
            .enumerate()
            .map(|(i, t)| if i == self.wrt { x } else { tape.constant(t.cast::<T>()) })
            .collect();
        let y = self.prim.apply(tape, &vars)?;
        project(tape, y, self.projection)
    }
}

/// `sum(y * w)` for a fixed weight vector, reducing any output to a scalar.
pub fn project<T: Scalar>(tape: &mut Tape<T>, y: Var, weights: &[f32]) -> Result<Var> {
    let shape = tape.shape(y).to_vec();
    let w = Tensor::new(&shape, weights.iter().map(|&v| T::from_f64(v as f64)).collect())?;
    let w = tape.constant(w);
    let p = tape.mul(y, w)?;
    Ok(tape.sum_all(p))
}

#[cfg(test)]
mod tests {
    use super::*;

    struct SumOfSquares;
    impl Differentiable for SumOfSquares {
        fn eval<T: Scalar>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
            let sq = tape.mul(x, x)?;
            Ok(tape.sum_all(sq))
        }
    }

    struct Linear;
    impl Differentiable for Linear {
        fn eval<T: Scalar>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
            let s = tape.scale(x, 2.5);
            Ok(tape.sum_all(s))
        }
    }

    struct Flaky(std::cell::Cell<f64>);
    impl Differentiable for Flaky {
        fn eval<T: Scalar>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
            self.0.set(self.0.get() + 1.0);
            let s = tape.sum_all(x);
            Ok(tape.add_scalar(s, self.0.get()))
        }
    }

    fn random(rng: &mut SplitMix64, n: usize) -> Tensor<f32> {
        Tensor::new(&[n], (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap()
    }

    #[test]
    fn sum_of_squares_passes() {
        let mut rng = SplitMix64::new(11);
        let x = random(&mut rng, 20);
        let r = finite_difference_check("sumsq", &SumOfSquares, &x, 1e-3, None).unwrap();
        assert!(r.max_rel_error < 1e-4, "{}", r.max_rel_error);
        assert_eq!(r.errors.len(), 20);
        assert_eq!(r.max_rel_error, r.errors.iter().copied().fold(0.0, f64::max));
    }

    #[test]
    fn linear_function_error_is_rounding_only() {
        let mut rng = SplitMix64::new(12);
        let x = random(&mut rng, 10);
        let r = finite_difference_check("linear", &Linear, &x, 1e-3, None).unwrap();
        assert!(r.max_rel_error < 1e-9, "{}", r.max_rel_error);
    }

    #[test]
    fn nondeterministic_function_rejected() {
        let x = Tensor::<f32>::zeros(&[3]);
        let err = finite_difference_check("flaky", &Flaky(Default::default()), &x, 1e-3, None).unwrap_err();
        assert_eq!(err, TensorError::NonDeterministic);
    }

    #[test]
    fn non_positive_step_rejected() {
        let x = Tensor::<f32>::zeros(&[3]);
        assert!(finite_difference_check("s", &SumOfSquares, &x, 0.0, None).is_err());
    }

    #[test]
    fn corrupted_gradient_fails() {
        let mut rng = SplitMix64::new(13);
        let x = random(&mut rng, 8);
        let mut a = analytic_gradient(&SumOfSquares, &x).unwrap();
        let n = numeric_gradient(&SumOfSquares, &x, 1e-3, None).unwrap();
        assert!(compare("ok", &a, &n).passed(1e-3));
        a[3] *= 1.1;
        assert!(!compare("corrupted", &a, &n).passed(1e-3));
    }

    #[test]
    fn every_primitive_passes() {
        let mut rng = SplitMix64::new(2024);
        for p in Primitive::ALL {
            let r = p.check(&mut rng, 1e-3).unwrap();
            assert!(r.passed(1e-3), "{} max rel error {}", r.name, r.max_rel_error);
        }
    }

    #[test]
    fn registry_names_unique() {
        let mut names: Vec<_> = Primitive::ALL.iter().map(|p| p.name()).collect();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), Primitive::ALL.len());
    }
}
