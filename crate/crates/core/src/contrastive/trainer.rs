//! Training state and the four-tower step.

use brivl_tensor::{Adam, AdamConfig, Gradients, ParamSet, SplitMix64, Tape, Tensor};

use super::augment::augment;
use super::loss::{in_batch_loss, total_loss, QueueLoss};
use super::momentum_update;
use super::queue::NegativeQueue;
use crate::config::{EncoderConfig, LossMode, TrainerConfig};
use crate::datagen::{PairRecord, Split};
use crate::encoders::{ImageBatch, ImageEncoder, TextEncoder, TokenBatch, Vocabulary};
use crate::error::{Error, Result};

const EPOCH_STREAM: u64 = 0x6570_6f63_6873;
const AUGMENT_STREAM: u64 = 0x6175_676d_656e;

/// Both towers' architecture plus the shared vocabulary.
#[derive(Clone, Debug)]
pub struct Towers {
    pub image: ImageEncoder,
    pub text: TextEncoder,
    pub vocab: Vocabulary,
}

impl Towers {
    /// Builds both towers with parameters drawn from `seed`.
    pub fn new(cfg: &EncoderConfig, seed: u64) -> Result<(Self, ParamSet, ParamSet)> {
        let vocab = Vocabulary::standard();
        if cfg.vocab_size < vocab.len() {
            return Err(Error::Config(format!(
                "vocab_size {} is smaller than the {}-word vocabulary",
                cfg.vocab_size,
                vocab.len()
            )));
        }
        let (image, ip) = ImageEncoder::new(cfg, &mut SplitMix64::stream(seed, 1))?;
        let (text, tp) = TextEncoder::new(cfg, &mut SplitMix64::stream(seed, 2))?;
        Ok((Self { image, text, vocab }, ip, tp))
    }

    pub fn config(&self) -> &EncoderConfig {
        self.image.config()
    }
}

/// Pre-decoded training pairs.
#[derive(Clone, Debug)]
pub struct TrainingSet {
    pub side: usize,
    pub images: Vec<Vec<f32>>,
    pub tokens: Vec<Vec<usize>>,
}

impl TrainingSet {
    pub fn from_records(records: &[&PairRecord], side: usize, vocab: &Vocabulary, max_len: usize) -> Result<Self> {
        let mut images = Vec::with_capacity(records.len());
        let mut tokens = Vec::with_capacity(records.len());
        for (i, r) in records.iter().enumerate() {
            if r.image.len() != 3 * side * side {
                return Err(Error::Data(format!("record {i} is not a {side}x{side} image")));
            }
            let ids = vocab.tokenize(&r.text, max_len);
            if ids.is_empty() {
                return Err(Error::Data(format!("record {i} has empty text")));
            }
            images.push(r.image_chw(side));
            tokens.push(ids);
        }
        Ok(Self { side, images, tokens })
    }

    /// Training split of a dataset.
    pub fn train_split(ds: &crate::datagen::PairDataset, vocab: &Vocabulary, max_len: usize) -> Result<Self> {
        Self::from_records(&ds.split(Split::Train), ds.image_size, vocab, max_len)
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Everything that changes during training.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub step: u64,
    pub image: ParamSet,
    pub text: ParamSet,
    pub image_m: ParamSet,
    pub text_m: ParamSet,
    pub adam_image: Adam,
    pub adam_text: Adam,
    pub queue_image: NegativeQueue,
    pub queue_text: NegativeQueue,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossValues {
    pub total: f64,
    pub i2t: f64,
    pub t2i: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepMetrics {
    /// Zero-based index of the step just taken.
    pub step: u64,
    /// `None` for queue warm-up steps.
    pub loss: Option<LossValues>,
    pub queue_fill: usize,
}

impl StepMetrics {
    /// `step,loss_total,loss_i2t,loss_t2i,queue_fill`, or `None` for warm-up.
    pub fn log_line(&self) -> Option<String> {
        self.loss.map(|l| {
            format!(
                "{},{:.9},{:.9},{:.9},{}",
                self.step, l.total, l.i2t, l.t2i, self.queue_fill
            )
        })
    }
}

#[derive(Clone, Debug)]
pub struct Trainer {
    pub cfg: TrainerConfig,
    pub towers: Towers,
    pub state: TrainState,
}

fn adam_config(cfg: &TrainerConfig) -> AdamConfig {
    AdamConfig {
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        ..AdamConfig::default()
    }
}

impl Trainer {
    /// Fresh state: momentum towers start as exact copies of the online towers.
    pub fn new(enc: &EncoderConfig, cfg: &TrainerConfig) -> Result<Self> {
        cfg.validate()?;
        let (towers, image, text) = Towers::new(enc, cfg.seed)?;
        let state = TrainState {
            step: 0,
            adam_image: Adam::new(adam_config(cfg), &image),
            adam_text: Adam::new(adam_config(cfg), &text),
            image_m: image.clone(),
            text_m: text.clone(),
            image,
            text,
            queue_image: NegativeQueue::new(cfg.queue_size, enc.embed_dim)?,
            queue_text: NegativeQueue::new(cfg.queue_size, enc.embed_dim)?,
        };
        Ok(Self {
            cfg: cfg.clone(),
            towers,
            state,
        })
    }

    /// Reassembles a trainer around restored state.
    pub fn from_state(enc: &EncoderConfig, cfg: &TrainerConfig, state: TrainState) -> Result<Self> {
        let mut t = Self::new(enc, cfg)?;
        let fresh = &t.state;
        let layouts_match = fresh.image.mirrors(&state.image)
            && fresh.text.mirrors(&state.text)
            && fresh.image.mirrors(&state.image_m)
            && fresh.text.mirrors(&state.text_m)
            && state.queue_image.capacity() == cfg.queue_size
            && state.queue_text.capacity() == cfg.queue_size
            && state.queue_image.dim() == enc.embed_dim
            && state.queue_text.dim() == enc.embed_dim;
        if !layouts_match {
            return Err(Error::Data("restored state does not match the configured architecture".into()));
        }
        t.state = state;
        t.state.adam_image.config = adam_config(cfg);
        t.state.adam_text.config = adam_config(cfg);
        Ok(t)
    }

    pub fn steps_per_epoch(&self, n: usize) -> Result<u64> {
        let s = n / self.cfg.batch_size;
        if s == 0 {
            return Err(Error::Data(format!(
                "{n} training pairs cannot fill one batch of {}",
                self.cfg.batch_size
            )));
        }
        Ok(s as u64)
    }

    pub fn total_steps(&self, n: usize) -> Result<u64> {
        Ok(self.steps_per_epoch(n)? * self.cfg.epochs as u64)
    }

    /// True while the queues are still being filled.
    pub fn in_warmup(&self) -> bool {
        self.cfg.loss_mode == LossMode::Queue && self.state.step < self.cfg.warmup_steps()
    }

    /// Record indices of the batch for `step`: a fresh permutation per epoch.
    pub fn batch_indices(&self, step: u64, n: usize) -> Result<Vec<usize>> {
        let spe = self.steps_per_epoch(n)?;
        let (epoch, pos) = (step / spe, (step % spe) as usize);
        let mut order: Vec<usize> = (0..n).collect();
        SplitMix64::stream(self.cfg.seed ^ EPOCH_STREAM, epoch).shuffle(&mut order);
        let b = self.cfg.batch_size;
        Ok(order[pos * b..(pos + 1) * b].to_vec())
    }

    /// The (augmented) batch for `step`.
    pub fn batch(&self, data: &TrainingSet, step: u64) -> Result<(ImageBatch, TokenBatch)> {
        let idx = self.batch_indices(step, data.len())?;
        let mut rng = SplitMix64::stream(self.cfg.seed ^ AUGMENT_STREAM, step);
        let images: Vec<Vec<f32>> = idx
            .iter()
            .map(|&i| {
                let mut im = data.images[i].clone();
                if self.cfg.augment {
                    augment(&mut im, &mut rng);
                }
                im
            })
            .collect();
        let rows: Vec<Vec<usize>> = idx.iter().map(|&i| data.tokens[i].clone()).collect();
        Ok((
            ImageBatch::from_chw(&images, data.side)?,
            TokenBatch::from_rows(&rows, None)?,
        ))
    }

    /// Runs the step the schedule assigns to the current step counter.
    pub fn step(&mut self, data: &TrainingSet) -> Result<StepMetrics> {
        let (images, tokens) = self.batch(data, self.state.step)?;
        self.train_step(&images, &tokens)
    }

    /// Momentum-tower embeddings of a batch, detached.
    pub fn momentum_keys(&self, images: &ImageBatch, tokens: &TokenBatch) -> Result<(Tensor<f32>, Tensor<f32>)> {
        Ok((
            self.towers.image.embed(&self.state.image_m, images)?,
            self.towers.text.embed(&self.state.text_m, tokens)?,
        ))
    }

    /// Queue loss of the online towers against the given queues, where row
    /// `i` of the batch has its positives at `slots_image[i]` /
    /// `slots_text[i]`.
    pub fn loss_against(
        &self,
        images: &ImageBatch,
        tokens: &TokenBatch,
        queues: (&NegativeQueue, &NegativeQueue),
        slots: (&[usize], &[usize]),
    ) -> Result<LossValues> {
        let (_, values) = self.queue_loss_grads(images, tokens, queues, slots, false)?;
        Ok(values)
    }

    fn queue_loss_grads(
        &self,
        images: &ImageBatch,
        tokens: &TokenBatch,
        (qi, qt): (&NegativeQueue, &NegativeQueue),
        (si, st): (&[usize], &[usize]),
        with_grads: bool,
    ) -> Result<(Option<(Gradients, Gradients)>, LossValues)> {
        let mut tape = Tape::<f32>::new();
        let pi = self.state.image.bind(&mut tape, with_grads);
        let pt = self.state.text.bind(&mut tape, with_grads);
        let x = tape.constant(images.values().clone());
        let zi = self.towers.image.forward(&mut tape, &pi, x)?.z;
        let zt = self.towers.text.forward(&mut tape, &pt, tokens)?;
        let q_text = tape.constant(qt.slot_matrix()?);
        let q_image = tape.constant(qi.slot_matrix()?);
        let QueueLoss { total, i2t, t2i } = total_loss(&mut tape, zi, zt, q_image, q_text, si, st, self.cfg.temperature)?;
        let values = LossValues {
            total: tape.value(total).data()[0] as f64,
            i2t: tape.value(i2t).data()[0] as f64,
            t2i: tape.value(t2i).data()[0] as f64,
        };
        if !values.total.is_finite() {
            return Err(Error::Numerical(format!("non-finite loss at step {}", self.state.step)));
        }
        if !with_grads {
            return Ok((None, values));
        }
        tape.backward(total)?;
        let grads = (
            self.state.image.gradients(&tape, &pi),
            self.state.text.gradients(&tape, &pt),
        );
        Ok((Some(grads), values))
    }

    fn in_batch_grads(&self, images: &ImageBatch, tokens: &TokenBatch) -> Result<(Gradients, Gradients, LossValues)> {
        let mut tape = Tape::<f32>::new();
        let pi = self.state.image.bind(&mut tape, true);
        let pt = self.state.text.bind(&mut tape, true);
        let x = tape.constant(images.values().clone());
        let zi = self.towers.image.forward(&mut tape, &pi, x)?.z;
        let zt = self.towers.text.forward(&mut tape, &pt, tokens)?;
        let l = in_batch_loss(&mut tape, zi, zt, self.cfg.temperature)?;
        let values = LossValues {
            total: tape.value(l.total).data()[0] as f64,
            i2t: tape.value(l.i2t).data()[0] as f64,
            t2i: tape.value(l.t2i).data()[0] as f64,
        };
        if !values.total.is_finite() {
            return Err(Error::Numerical(format!("non-finite loss at step {}", self.state.step)));
        }
        tape.backward(l.total)?;
        Ok((
            self.state.image.gradients(&tape, &pi),
            self.state.text.gradients(&tape, &pt),
            values,
        ))
    }

    /// One training step. Either every piece of state advances or none does.
    pub fn train_step(&mut self, images: &ImageBatch, tokens: &TokenBatch) -> Result<StepMetrics> {
        if images.len() != tokens.len() {
            return Err(Error::Data(format!(
                "{} images but {} texts in the batch",
                images.len(),
                tokens.len()
            )));
        }
        let step = self.state.step;
        if self.cfg.loss_mode == LossMode::InBatch {
            let (gi, gt, values) = self.in_batch_grads(images, tokens)?;
            self.apply(&gi, &gt)?;
            self.state.step += 1;
            return Ok(StepMetrics {
                step,
                loss: Some(values),
                queue_fill: 0,
            });
        }

        let (keys_image, keys_text) = self.momentum_keys(images, tokens)?;
        let mut qi = self.state.queue_image.clone();
        let mut qt = self.state.queue_text.clone();
        let si = qi.enqueue(&keys_image)?;
        let st = qt.enqueue(&keys_text)?;
        if self.in_warmup() {
            self.state.queue_image = qi;
            self.state.queue_text = qt;
            self.state.step += 1;
            return Ok(StepMetrics {
                step,
                loss: None,
                queue_fill: self.state.queue_text.len(),
            });
        }
        let (grads, values) = self.queue_loss_grads(images, tokens, (&qi, &qt), (&si, &st), true)?;
        let (gi, gt) = grads.expect("gradients requested");
        self.apply(&gi, &gt)?;
        momentum_update(&self.state.image, &mut self.state.image_m, self.cfg.momentum)?;
        momentum_update(&self.state.text, &mut self.state.text_m, self.cfg.momentum)?;
        self.state.queue_image = qi;
        self.state.queue_text = qt;
        self.state.step += 1;
        Ok(StepMetrics {
            step,
            loss: Some(values),
            queue_fill: self.state.queue_text.len(),
        })
    }

    fn apply(&mut self, gi: &Gradients, gt: &Gradients) -> Result<()> {
        let s = &mut self.state;
        s.adam_image.validate(&s.image, gi)?;
        s.adam_text.validate(&s.text, gt)?;
        for g in gi.0.iter().chain(&gt.0).flatten() {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numerical(format!("non-finite gradient at step {}", s.step)));
            }
        }
        s.adam_image.step(&mut s.image, gi)?;
        s.adam_text.step(&mut s.text, gt)?;
        Ok(())
    }
}
