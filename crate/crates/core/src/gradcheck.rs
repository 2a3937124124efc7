//! Gradient checks for composite blocks and both towers, plus the combined
//! registry used by the `gradcheck` command and the test suite.
//!
//! Parameters are checked through [`ParamSet::bind_with`], so the tape sees
//! one perturbed tensor while everything else is a constant. Output
//! projections that start at zero are perturbed first, otherwise the branches
//! behind them would have identically zero gradients and the check would be
//! vacuous.

use brivl_tensor::gradcheck::{
    analytic_gradient, compare, finite_difference_check, numeric_gradient, project, sample_indices, Primitive,
};
use brivl_tensor::{Differentiable, GradCheckReport, ParamSet, Scalar, SplitMix64, Tape, Tensor, TensorError, Var};

use crate::config::EncoderConfig;
use crate::contrastive::{in_batch_loss, info_nce};
use crate::encoders::{mspp, ImageEncoder, SaStack, TextEncoder, TokenBatch};
use crate::error::Result;

/// Tolerance on the maximum relative error.
pub const TOLERANCE: f64 = 1e-3;
/// Central-difference half-width for primitives.
pub const PRIMITIVE_STEP: f64 = 1e-3;
/// Half-width for whole networks. Thousands of relu units make a kink inside a
/// wider stencil likely.
pub const NETWORK_STEP: f64 = 1e-7;
const SAMPLES_PER_PARAM: usize = 4;

fn lift(e: crate::Error) -> TensorError {
    match e {
        crate::Error::Tensor(t) => t,
        other => TensorError::Invalid {
            op: "gradcheck",
            msg: other.to_string(),
        },
    }
}

/// Composite layers and towers covered beyond the tape primitives.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Block {
    CnnBackbone,
    Mspp,
    SaBlock,
    InfoNce,
    InBatchLoss,
    ImageTower,
    TextTower,
}

impl Block {
    pub const ALL: [Block; 7] = [
        Block::CnnBackbone,
        Block::Mspp,
        Block::SaBlock,
        Block::InfoNce,
        Block::InBatchLoss,
        Block::ImageTower,
        Block::TextTower,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Block::CnnBackbone => "cnn_backbone",
            Block::Mspp => "mspp",
            Block::SaBlock => "sa_block",
            Block::InfoNce => "info_nce",
            Block::InBatchLoss => "in_batch_loss",
            Block::ImageTower => "image_tower",
            Block::TextTower => "text_tower",
        }
    }

    pub fn check(self, cfg: &EncoderConfig, rng: &mut SplitMix64) -> Result<GradCheckReport> {
        match self {
            Block::CnnBackbone => image_case(cfg, rng, self.name(), true),
            Block::ImageTower => image_case(cfg, rng, self.name(), false),
            Block::TextTower => text_case(cfg, rng),
            Block::Mspp => {
                let x = signed(rng, &[2, 3, 6, 6]);
                let case = Mspp {
                    projection: weights(rng, 2 * 37 * 3),
                };
                Ok(finite_difference_check(self.name(), &case, &x, PRIMITIVE_STEP, None)?)
            }
            Block::SaBlock => sa_case(rng),
            Block::InfoNce | Block::InBatchLoss => loss_case(self, rng),
        }
    }
}

/// Values in `±[0.2, 1]`, away from relu kinks.
fn signed(rng: &mut SplitMix64, shape: &[usize]) -> Tensor<f32> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.uniform(0.2, 1.0);
            if rng.bernoulli(0.5) { m } else { -m }
        })
        .collect();
    Tensor::new(shape, data).expect("shape")
}

fn weights(rng: &mut SplitMix64, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect()
}

struct Mspp {
    projection: Vec<f32>,
}

impl Differentiable for Mspp {
    fn eval<T: Scalar>(&self, tape: &mut Tape<T>, x: Var) -> brivl_tensor::Result<Var> {
        let y = mspp(tape, x, &[1, 6]).map_err(lift)?;
        project(tape, y, &self.projection)
    }
}

/// Where the checked tensor enters a network.
#[derive(Clone, Copy)]
enum Slot {
    Input,
    Param(usize),
}

/// Analytic and numeric gradient of `case` at the sampled `idx` of `x`.
fn sampled<C: Differentiable>(case: &C, x: &Tensor<f32>, idx: &[usize]) -> Result<(Vec<f64>, Vec<f64>)> {
    let full = analytic_gradient(case, x)?;
    let numeric = numeric_gradient(case, x, NETWORK_STEP, Some(idx))?;
    Ok((idx.iter().map(|&i| full[i]).collect(), numeric))
}

/// Checks the case built by `make` with respect to the input and a sample of
/// every parameter. All samples form one gradient vector, so a parameter whose
/// gradient is identically zero (the key bias under softmax) is judged against
/// the network's gradient scale rather than against rounding noise.
fn network_check<C, F>(
    name: &str,
    params: &ParamSet,
    input: Option<&Tensor<f32>>,
    rng: &mut SplitMix64,
    make: F,
) -> Result<GradCheckReport>
where
    C: Differentiable,
    F: Fn(Slot) -> C,
{
    let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
    let mut push = |(a, n): (Vec<f64>, Vec<f64>)| {
        analytic.extend(a);
        numeric.extend(n);
    };
    if let Some(x) = input {
        let idx = sample_indices(rng, x.numel(), 8);
        push(sampled(&make(Slot::Input), x, &idx)?);
    }
    for (i, p) in params.iter().enumerate() {
        let idx = sample_indices(rng, p.value.numel(), SAMPLES_PER_PARAM);
        push(sampled(&make(Slot::Param(i)), &p.value, &idx)?);
    }
    Ok(compare(name, &analytic, &numeric))
}

macro_rules! net_case {
    ($ty:ty, |$s:ident, $tape:ident, $x:ident| $body:block) => {
        impl Differentiable for $ty {
            fn eval<T: Scalar>(&self, $tape: &mut Tape<T>, $x: Var) -> brivl_tensor::Result<Var> {
                let $s = self;
                $body
            }
        }
    };
}

struct ImageCase<'a> {
    enc: &'a ImageEncoder,
    params: &'a ParamSet,
    images: &'a Tensor<f32>,
    slot: Slot,
    backbone_only: bool,
    projection: &'a [f32],
}

net_case!(ImageCase<'_>, |s, tape, x| {
    let (p, input) = match s.slot {
        Slot::Input => (s.params.bind(tape, false), x),
        Slot::Param(i) => {
            let p = s.params.bind_with(tape, i, x);
            let input = tape.constant(s.images.cast());
            (p, input)
        }
    };
    let y = if s.backbone_only {
        s.enc.backbone(tape, &p, input).map_err(lift)?
    } else {
        s.enc.forward(tape, &p, input).map_err(lift)?.z
    };
    project(tape, y, s.projection)
});

fn image_case(cfg: &EncoderConfig, rng: &mut SplitMix64, name: &str, backbone_only: bool) -> Result<GradCheckReport> {
    let (enc, mut params) = ImageEncoder::new(cfg, rng)?;
    params.perturb(rng, 0.3);
    let side = cfg.image_size;
    let images = brivl_tensor::param::uniform(rng, &[2, 3, side, side], 0.0, 1.0);
    let out = {
        let mut tape = Tape::<f32>::new();
        let p = params.bind(&mut tape, false);
        let x = tape.constant(images.clone());
        let y = if backbone_only {
            enc.backbone(&mut tape, &p, x)?
        } else {
            enc.forward(&mut tape, &p, x)?.z
        };
        tape.value(y).numel()
    };
    let projection = weights(rng, out);
    let checked: ParamSet = if backbone_only {
        // Only the convolution stack feeds the backbone output.
        let mut sub = ParamSet::new();
        for p in params.iter().take(6) {
            sub.add(p.name.clone(), p.value.clone());
        }
        sub
    } else {
        params.clone()
    };
    network_check(name, &checked, Some(&images), rng, |slot| {
        ImageCase {
            enc: &enc,
            params: &params,
            images: &images,
            slot,
            backbone_only,
            projection: &projection,
        }
    })
}

struct TextCase<'a> {
    enc: &'a TextEncoder,
    params: &'a ParamSet,
    tokens: &'a TokenBatch,
    index: usize,
    projection: &'a [f32],
}

net_case!(TextCase<'_>, |s, tape, x| {
    let p = s.params.bind_with(tape, s.index, x);
    let z = s.enc.forward(tape, &p, s.tokens).map_err(lift)?;
    project(tape, z, s.projection)
});

fn text_case(cfg: &EncoderConfig, rng: &mut SplitMix64) -> Result<GradCheckReport> {
    let (enc, mut params) = TextEncoder::new(cfg, rng)?;
    params.perturb(rng, 0.3);
    let vocab = crate::encoders::Vocabulary::standard();
    let tokens = enc.tokenize(&vocab, &["small red circle on striped background", "two blue squares", "a green triangle"])?;
    let projection = weights(rng, 3 * cfg.embed_dim);
    let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
    for (i, p) in params.iter().enumerate() {
        let idx = if i == 0 {
            // Token table rows that the batch actually reads.
            let w = cfg.text_width;
            let mut rows: Vec<usize> = tokens.ids.clone();
            rows.sort_unstable();
            rows.dedup();
            rows.iter().flat_map(|&r| [r * w, r * w + w - 1]).collect()
        } else {
            sample_indices(rng, p.value.numel(), SAMPLES_PER_PARAM)
        };
        let case = TextCase {
            enc: &enc,
            params: &params,
            tokens: &tokens,
            index: i,
            projection: &projection,
        };
        let (a, n) = sampled(&case, &p.value, &idx)?;
        analytic.extend(a);
        numeric.extend(n);
    }
    Ok(compare(Block::TextTower.name(), &analytic, &numeric))
}

struct SaCase<'a> {
    stack: SaStack,
    params: &'a ParamSet,
    input: &'a Tensor<f32>,
    slot: Slot,
    projection: &'a [f32],
}

net_case!(SaCase<'_>, |s, tape, x| {
    let (p, input) = match s.slot {
        Slot::Input => (s.params.bind(tape, false), x),
        Slot::Param(i) => {
            let p = s.params.bind_with(tape, i, x);
            let input = tape.constant(s.input.cast());
            (p, input)
        }
    };
    let y = s.stack.forward(tape, &p, input, None).map_err(lift)?;
    project(tape, y, s.projection)
});

fn sa_case(rng: &mut SplitMix64) -> Result<GradCheckReport> {
    let mut params = ParamSet::new();
    let stack = SaStack::register(&mut params, rng, "sa", 8, 2, 1, 2)?;
    params.perturb(rng, 0.3);
    let input = signed(rng, &[2, 5, 8]);
    let projection = weights(rng, 2 * 5 * 8);
    network_check(Block::SaBlock.name(), &params, Some(&input), rng, |slot| {
        SaCase {
            stack,
            params: &params,
            input: &input,
            slot,
            projection: &projection,
        }
    })
}

struct LossCase<'a> {
    block: Block,
    other: &'a Tensor<f32>,
    positives: &'a [usize],
}

impl Differentiable for LossCase<'_> {
    fn eval<T: Scalar>(&self, tape: &mut Tape<T>, x: Var) -> brivl_tensor::Result<Var> {
        let a = tape.l2_normalize(x);
        let b = tape.constant(self.other.cast());
        let b = tape.l2_normalize(b);
        match self.block {
            Block::InfoNce => info_nce(tape, a, b, self.positives, 0.07).map_err(lift),
            _ => in_batch_loss(tape, a, b, 0.07).map(|l| l.total).map_err(lift),
        }
    }
}

fn loss_case(block: Block, rng: &mut SplitMix64) -> Result<GradCheckReport> {
    let anchors = signed(rng, &[4, 6]);
    let other = if block == Block::InfoNce { signed(rng, &[10, 6]) } else { signed(rng, &[4, 6]) };
    let positives = [3, 0, 7, 9];
    let case = LossCase {
        block,
        other: &other,
        positives: &positives,
    };
    Ok(finite_difference_check(block.name(), &case, &anchors, PRIMITIVE_STEP, None)?)
}

/// One row per registered check: every tape primitive, then every block.
pub fn run_all(cfg: &EncoderConfig, seed: u64) -> Result<Vec<GradCheckReport>> {
    let mut rng = SplitMix64::new(seed);
    let mut out = Vec::with_capacity(Primitive::ALL.len() + Block::ALL.len());
    for p in Primitive::ALL {
        out.push(p.check(&mut rng, PRIMITIVE_STEP)?);
    }
    for b in Block::ALL {
        out.push(b.check(cfg, &mut rng)?);
    }
    Ok(out)
}

/// Names every registered check, in report order.
pub fn registry() -> Vec<&'static str> {
    Primitive::ALL
        .iter()
        .map(|p| p.name())
        .chain(Block::ALL.iter().map(|b| b.name()))
        .collect()
}

/// Fixed-width `name  max_rel_error  PASS|FAIL` table.
pub fn format_table(reports: &[GradCheckReport], tolerance: f64) -> String {
    let mut s = String::new();
    for r in reports {
        s.push_str(&format!(
            "{:<20} {:>12.3e}  {}\n",
            r.name,
            r.max_rel_error,
            if r.passed(tolerance) { "PASS" } else { "FAIL" }
        ));
    }
    s
}

/// A report whose analytic side has been deliberately scaled; used as a
/// negative control for the checker itself.
pub fn corrupted_control(seed: u64) -> Result<GradCheckReport> {
    let mut rng = SplitMix64::new(seed);
    let anchors = signed(&mut rng, &[4, 6]);
    let other = signed(&mut rng, &[4, 6]);
    let case = LossCase {
        block: Block::InBatchLoss,
        other: &other,
        positives: &[],
    };
    let mut analytic = analytic_gradient(&case, &anchors)?;
    let numeric = numeric_gradient(&case, &anchors, PRIMITIVE_STEP, None)?;
    analytic[0] = analytic[0] * 1.05 + 1e-2;
    Ok(compare("corrupted_control", &analytic, &numeric))
}
