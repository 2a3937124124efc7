//! Training loop and evaluation protocols shared by the command line and the
//! end-to-end tests.

use crate::contrastive::{StepMetrics, Trainer, TrainingSet, Towers};
use crate::datagen::{shape_probe_set, PairDataset, Shape, Split};
use crate::error::{Error, Result};
use crate::evaluation::{
    diagonal_truth, embed_images, embed_records, retrieval_eval, zero_shot_classify, RetrievalReports, ZeroShotReport,
};
use brivl_tensor::ParamSet;

/// Header of the metrics log; one row per non-warm-up step follows.
pub const METRICS_HEADER: &str = "step,loss_total,loss_i2t,loss_t2i,queue_fill";

/// Seed and size of the single-object shape set used for zero-shot checks.
pub const SHAPE_PROBE_SEED: u64 = 5;
pub const SHAPE_PROBE_COUNT: usize = 300;

const EMBED_CHUNK: usize = 100;

/// Runs the remaining steps of the schedule. `on_step` sees every step's
/// metrics; `on_epoch` runs after each completed epoch with its one-based
/// index. Returns the number of steps taken (zero when already finished).
pub fn train<S, E>(trainer: &mut Trainer, data: &TrainingSet, mut on_step: S, mut on_epoch: E) -> Result<u64>
where
    S: FnMut(&StepMetrics) -> Result<()>,
    E: FnMut(&Trainer, u64) -> Result<()>,
{
    let spe = trainer.steps_per_epoch(data.len())?;
    let total = trainer.total_steps(data.len())?;
    let start = trainer.state.step;
    while trainer.state.step < total {
        let m = trainer.step(data)?;
        if let Some(l) = m.loss {
            if !l.total.is_finite() {
                return Err(Error::Numerical(format!("loss became {} at step {}", l.total, m.step)));
            }
        }
        on_step(&m)?;
        if trainer.state.step % spe == 0 {
            on_epoch(trainer, trainer.state.step / spe)?;
        }
    }
    Ok(trainer.state.step - start)
}

/// Image-text retrieval over the held-out split, pair `i` matching pair `i`.
pub fn held_out_retrieval(towers: &Towers, image: &ParamSet, text: &ParamSet, ds: &PairDataset) -> Result<RetrievalReports> {
    let test = ds.split(Split::Test);
    if test.is_empty() {
        return Err(Error::Data("the dataset has no held-out pairs".into()));
    }
    let (zi, zt) = embed_records(towers, image, text, &test, EMBED_CHUNK)?;
    retrieval_eval(&zi, &zt, &diagonal_truth(test.len()))
}

/// Class names of the zero-shot shape task, in label order.
pub fn shape_classes() -> Vec<&'static str> {
    Shape::ALL.iter().map(|s| s.word()).collect()
}

/// Zero-shot shape classification of rendered single-object images.
pub fn zero_shot_shapes(towers: &Towers, image: &ParamSet, text: &ParamSet, seed: u64, count: usize) -> Result<ZeroShotReport> {
    let side = towers.config().image_size;
    let probes = shape_probe_set(seed, count, side);
    let images: Vec<Vec<u8>> = probes.iter().map(|p| p.0.clone()).collect();
    let labels: Vec<usize> = probes
        .iter()
        .map(|p| Shape::ALL.iter().position(|s| *s == p.1).expect("known shape"))
        .collect();
    let items = embed_images(towers, image, &images, EMBED_CHUNK)?;
    zero_shot_classify(&items, &shape_classes(), towers, text, &labels)
}
