//! Contrastive objectives on a tape.

use brivl_tensor::{Scalar, Tape, Var};

use crate::error::{Error, Result};

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("temperature must be positive, got {tau}")))
    }
}

/// Queue InfoNCE: for anchor `z_i` with positive at queue row `positives[i]`,
/// `-log softmax(z_i . Q^T / tau)[positives[i]]`, averaged over anchors.
/// `queue` (`[|Q|, d]`) should be a constant on the tape so gradients reach
/// only the anchors.
pub fn info_nce<T: Scalar>(
    tape: &mut Tape<T>,
    anchors: Var,
    queue: Var,
    positives: &[usize],
    tau: f64,
) -> Result<Var> {
    check_tau(tau)?;
    let (sa, sq) = (tape.shape(anchors).to_vec(), tape.shape(queue).to_vec());
    if sa.len() != 2 || sq.len() != 2 || sa[1] != sq[1] || sa[0] != positives.len() {
        return Err(Error::Data(format!(
            "info_nce: anchors {sa:?}, queue {sq:?}, {} positives",
            positives.len()
        )));
    }
    if tape.requires_grad(queue) {
        return Err(Error::Data("info_nce: queue entries must be detached".into()));
    }
    if let Some(&bad) = positives.iter().find(|&&p| p >= sq[0]) {
        return Err(Error::Data(format!("positive slot {bad} is not in a queue of {} entries", sq[0])));
    }
    let qt = tape.permute(queue, &[1, 0])?;
    let sims = tape.matmul(anchors, qt)?;
    let logits = tape.scale(sims, 1.0 / tau);
    Ok(tape.cross_entropy(logits, positives)?)
}

/// Both directions of the queue objective.
#[derive(Clone, Copy, Debug)]
pub struct QueueLoss {
    pub total: Var,
    pub i2t: Var,
    pub t2i: Var,
}

/// `L_i2t + L_t2i`: image anchors against the text queue plus text anchors
/// against the image queue. `slots_text[i]` is the text-queue row holding the
/// positive of image `i`, and `slots_image[i]` the image-queue row holding
/// the positive of text `i`.
#[allow(clippy::too_many_arguments)]
pub fn total_loss<T: Scalar>(
    tape: &mut Tape<T>,
    images: Var,
    texts: Var,
    queue_image: Var,
    queue_text: Var,
    slots_image: &[usize],
    slots_text: &[usize],
    tau: f64,
) -> Result<QueueLoss> {
    let i2t = info_nce(tape, images, queue_text, slots_text, tau)?;
    let t2i = info_nce(tape, texts, queue_image, slots_image, tau)?;
    let total = tape.add(i2t, t2i)?;
    Ok(QueueLoss { total, i2t, t2i })
}

/// Symmetric in-batch loss and its two directional halves.
#[derive(Clone, Copy, Debug)]
pub struct InBatchLoss {
    pub total: Var,
    pub i2t: Var,
    pub t2i: Var,
}

/// Cross-entropy over the `N x N` similarity matrix `Z_i Z_t^T / tau` with the
/// diagonal as targets, averaged over both directions.
pub fn in_batch_loss<T: Scalar>(tape: &mut Tape<T>, images: Var, texts: Var, tau: f64) -> Result<InBatchLoss> {
    check_tau(tau)?;
    let (si, st) = (tape.shape(images).to_vec(), tape.shape(texts).to_vec());
    if si.len() != 2 || si != st {
        return Err(Error::Data(format!("in_batch_loss: images {si:?}, texts {st:?}")));
    }
    let n = si[0];
    if n < 2 {
        return Err(Error::Data(format!("in_batch_loss needs at least 2 pairs, got {n}")));
    }
    let tt = tape.permute(texts, &[1, 0])?;
    let sims = tape.matmul(images, tt)?;
    let logits = tape.scale(sims, 1.0 / tau);
    let diag: Vec<usize> = (0..n).collect();
    let i2t = tape.cross_entropy(logits, &diag)?;
    let lt = tape.permute(logits, &[1, 0])?;
    let t2i = tape.cross_entropy(lt, &diag)?;
    let sum = tape.add(i2t, t2i)?;
    let total = tape.scale(sum, 0.5);
    Ok(InBatchLoss { total, i2t, t2i })
}
