//! Cross-modal retrieval, zero-shot classification and text neighbours.

use std::fmt::Write as _;

use brivl_tensor::{ParamSet, Tensor};

use crate::contrastive::Towers;
use crate::datagen::PairRecord;
use crate::encoders::{ImageBatch, TokenBatch};
use crate::error::{Error, Result};

pub const RECALL_KS: [usize; 3] = [1, 5, 10];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    ImageToText,
    TextToImage,
}

impl Direction {
    pub fn key(self) -> &'static str {
        match self {
            Direction::ImageToText => "i2t",
            Direction::TextToImage => "t2i",
        }
    }
}

/// Recall percentages for one direction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RetrievalReport {
    pub direction: Direction,
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
}

impl RetrievalReport {
    pub fn sum(&self) -> f64 {
        self.r1 + self.r5 + self.r10
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RetrievalReports {
    pub i2t: RetrievalReport,
    pub t2i: RetrievalReport,
    pub recall_sum: f64,
}

impl RetrievalReports {
    pub fn to_text(&self) -> String {
        let mut s = format!("{:<6} {:>8} {:>8} {:>8}\n", "dir", "R@1", "R@5", "R@10");
        for r in [&self.i2t, &self.t2i] {
            let _ = writeln!(s, "{:<6} {:>8.2} {:>8.2} {:>8.2}", r.direction.key(), r.r1, r.r5, r.r10);
        }
        let _ = writeln!(s, "R@SUM  {:.2}", self.recall_sum);
        s
    }

    pub fn to_key_values(&self) -> String {
        let mut s = String::new();
        for r in [&self.i2t, &self.t2i] {
            let d = r.direction.key();
            let _ = writeln!(s, "{d}_r1={}\n{d}_r5={}\n{d}_r10={}", r.r1, r.r5, r.r10);
        }
        let _ = writeln!(s, "recall_sum={}", self.recall_sum);
        s
    }
}

fn rows(t: &Tensor<f32>, what: &str) -> Result<(usize, usize)> {
    match t.shape() {
        [n, d] => Ok((*n, *d)),
        s => Err(Error::Data(format!("{what} must be a [N, d] matrix, got {s:?}"))),
    }
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let n = (dot(a, a) * dot(b, b)).sqrt();
    if n == 0.0 {
        0.0
    } else {
        dot(a, b) / n
    }
}

/// Rank (0 = best) of the best-placed ground-truth candidate. A candidate is
/// ahead of `g` when it scores higher, or equal with a smaller index.
fn best_rank(scores: &[f64], truths: &[usize]) -> usize {
    truths
        .iter()
        .map(|&g| {
            let sg = scores[g];
            scores
                .iter()
                .enumerate()
                .filter(|&(j, &s)| s > sg || (s == sg && j < g))
                .count()
        })
        .min()
        .expect("non-empty ground truth")
}

fn recall(
    direction: Direction,
    queries: &Tensor<f32>,
    candidates: &Tensor<f32>,
    truth: &[Vec<usize>],
) -> Result<RetrievalReport> {
    let (nq, d) = rows(queries, "queries")?;
    let (nc, dc) = rows(candidates, "candidates")?;
    if d != dc {
        return Err(Error::Data(format!("embedding widths differ: {d} vs {dc}")));
    }
    if let Some(&k) = RECALL_KS.iter().find(|&&k| k > nc) {
        return Err(Error::Data(format!("Recall@{k} needs at least {k} candidates, have {nc}")));
    }
    let mut hits = [0usize; 3];
    for q in 0..nq {
        let t = &truth[q];
        if t.is_empty() {
            return Err(Error::Data(format!("query {q} has no ground-truth match")));
        }
        if let Some(&bad) = t.iter().find(|&&g| g >= nc) {
            return Err(Error::Data(format!("ground truth {bad} out of range for {nc} candidates")));
        }
        let qv = queries.row(q);
        let scores: Vec<f64> = (0..nc).map(|c| dot(qv, candidates.row(c))).collect();
        let r = best_rank(&scores, t);
        for (h, &k) in hits.iter_mut().zip(&RECALL_KS) {
            if r < k {
                *h += 1;
            }
        }
    }
    let pct = |h: usize| 100.0 * h as f64 / nq as f64;
    Ok(RetrievalReport {
        direction,
        r1: pct(hits[0]),
        r5: pct(hits[1]),
        r10: pct(hits[2]),
    })
}

/// Recall@{1,5,10} in both directions by dot product. `image_to_text[i]`
/// lists the texts matching image `i`; the reverse map is derived.
pub fn retrieval_eval(images: &Tensor<f32>, texts: &Tensor<f32>, image_to_text: &[Vec<usize>]) -> Result<RetrievalReports> {
    let (ni, _) = rows(images, "image embeddings")?;
    let (nt, _) = rows(texts, "text embeddings")?;
    if image_to_text.len() != ni {
        return Err(Error::Data(format!(
            "ground truth covers {} images, have {ni}",
            image_to_text.len()
        )));
    }
    let mut text_to_image = vec![Vec::new(); nt];
    for (i, ts) in image_to_text.iter().enumerate() {
        for &t in ts {
            if t >= nt {
                return Err(Error::Data(format!("ground truth {t} out of range for {nt} texts")));
            }
            text_to_image[t].push(i);
        }
    }
    let i2t = recall(Direction::ImageToText, images, texts, image_to_text)?;
    let t2i = recall(Direction::TextToImage, texts, images, &text_to_image)?;
    Ok(RetrievalReports {
        recall_sum: i2t.sum() + t2i.sum(),
        i2t,
        t2i,
    })
}

/// One-to-one ground truth: item `i` matches item `i`.
pub fn diagonal_truth(n: usize) -> Vec<Vec<usize>> {
    (0..n).map(|i| vec![i]).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ZeroShotReport {
    pub classes: Vec<String>,
    pub predictions: Vec<usize>,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
    pub per_class_accuracy: Vec<f64>,
    pub accuracy: f64,
}

impl ZeroShotReport {
    pub fn to_text(&self) -> String {
        let mut s = format!("{:<12} {:>9}\n", "class", "accuracy");
        for (c, a) in self.classes.iter().zip(&self.per_class_accuracy) {
            let _ = writeln!(s, "{c:<12} {a:>9.2}");
        }
        let _ = writeln!(s, "{:<12} {:>9.2}", "overall", self.accuracy);
        s
    }

    pub fn to_key_values(&self) -> String {
        let mut s = String::new();
        for (c, a) in self.classes.iter().zip(&self.per_class_accuracy) {
            let _ = writeln!(s, "accuracy.{c}={a}");
        }
        let _ = writeln!(s, "accuracy={}", self.accuracy);
        s
    }
}

fn check_classes(names: &[&str]) -> Result<()> {
    if names.len() < 2 {
        return Err(Error::Data(format!("zero-shot needs at least 2 classes, got {}", names.len())));
    }
    for (i, a) in names.iter().enumerate() {
        if names[..i].contains(a) {
            return Err(Error::Data(format!("duplicate class name `{a}`")));
        }
    }
    Ok(())
}

/// Argmax-cosine class of each item (lowest class index on ties).
pub fn classify_embeddings(items: &Tensor<f32>, classes: &Tensor<f32>) -> Result<Vec<usize>> {
    let (n, d) = rows(items, "items")?;
    let (c, dc) = rows(classes, "class embeddings")?;
    if d != dc {
        return Err(Error::Data(format!("embedding widths differ: {d} vs {dc}")));
    }
    Ok((0..n)
        .map(|i| {
            let mut best = (0, f64::NEG_INFINITY);
            for k in 0..c {
                let s = cosine(items.row(i), classes.row(k));
                if s > best.1 {
                    best = (k, s);
                }
            }
            best.0
        })
        .collect())
}

/// Builds the report from predictions and true labels.
pub fn zero_shot_report(class_names: &[&str], predictions: Vec<usize>, labels: &[usize]) -> Result<ZeroShotReport> {
    check_classes(class_names)?;
    let c = class_names.len();
    if predictions.len() != labels.len() || labels.is_empty() {
        return Err(Error::Data("zero-shot labels must match the items".into()));
    }
    let mut confusion = vec![vec![0usize; c]; c];
    for (&p, &l) in predictions.iter().zip(labels) {
        if l >= c {
            return Err(Error::Data(format!("label {l} out of range for {c} classes")));
        }
        confusion[l][p] += 1;
    }
    let per_class_accuracy = confusion
        .iter()
        .enumerate()
        .map(|(k, row)| {
            let total: usize = row.iter().sum();
            if total == 0 {
                0.0
            } else {
                100.0 * row[k] as f64 / total as f64
            }
        })
        .collect();
    let correct = (0..c).map(|k| confusion[k][k]).sum::<usize>();
    Ok(ZeroShotReport {
        classes: class_names.iter().map(|s| s.to_string()).collect(),
        accuracy: 100.0 * correct as f64 / labels.len() as f64,
        predictions,
        confusion,
        per_class_accuracy,
    })
}

/// Classifies items by cosine similarity to the encoded class names.
pub fn zero_shot_classify(
    items: &Tensor<f32>,
    class_names: &[&str],
    towers: &Towers,
    text_params: &ParamSet,
    labels: &[usize],
) -> Result<ZeroShotReport> {
    check_classes(class_names)?;
    let class_emb = towers.text.embed_texts(text_params, &towers.vocab, class_names)?;
    let predictions = classify_embeddings(items, &class_emb)?;
    zero_shot_report(class_names, predictions, labels)
}

/// Indices of the `k` candidates most cosine-similar to `query`, best first,
/// with their similarities.
pub fn rank_by_cosine(query: &[f32], candidates: &Tensor<f32>, k: usize) -> Result<Vec<(usize, f64)>> {
    let (n, d) = rows(candidates, "candidates")?;
    if n == 0 {
        return Err(Error::Data("no candidates".into()));
    }
    if k > n {
        return Err(Error::Data(format!("k = {k} exceeds {n} candidates")));
    }
    if query.len() != d {
        return Err(Error::Data(format!("query width {} vs candidate width {d}", query.len())));
    }
    let mut scored: Vec<(usize, f64)> = (0..n).map(|i| (i, cosine(query, candidates.row(i)))).collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored.truncate(k);
    Ok(scored)
}

/// Top-`k` candidate texts for a query text through the text tower.
pub fn topk_text_neighbors(
    query: &str,
    candidates: &[&str],
    k: usize,
    towers: &Towers,
    text_params: &ParamSet,
) -> Result<Vec<(usize, f64)>> {
    if candidates.is_empty() {
        return Err(Error::Data("no candidate texts".into()));
    }
    let q = towers.text.embed_texts(text_params, &towers.vocab, &[query])?;
    let c = towers.text.embed_texts(text_params, &towers.vocab, candidates)?;
    rank_by_cosine(q.data(), &c, k)
}

/// Embeds records' images and texts in chunks of `chunk`.
pub fn embed_records(
    towers: &Towers,
    image_params: &ParamSet,
    text_params: &ParamSet,
    records: &[&PairRecord],
    chunk: usize,
) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let side = towers.config().image_size;
    let max_len = towers.config().max_text_len;
    let d = towers.config().embed_dim;
    let mut zi = Vec::with_capacity(records.len() * d);
    let mut zt = Vec::with_capacity(records.len() * d);
    for part in records.chunks(chunk.max(1)) {
        let images: Vec<Vec<f32>> = part.iter().map(|r| r.image_chw(side)).collect();
        let batch = ImageBatch::from_chw(&images, side)?;
        zi.extend_from_slice(towers.image.embed(image_params, &batch)?.data());
        let rows: Vec<Vec<usize>> = part.iter().map(|r| towers.vocab.tokenize(&r.text, max_len)).collect();
        let tokens = TokenBatch::from_rows(&rows, None)?;
        zt.extend_from_slice(towers.text.embed(text_params, &tokens)?.data());
    }
    Ok((
        Tensor::new(&[records.len(), d], zi)?,
        Tensor::new(&[records.len(), d], zt)?,
    ))
}

/// Embeds raw RGB images.
pub fn embed_images(towers: &Towers, image_params: &ParamSet, images: &[Vec<u8>], chunk: usize) -> Result<Tensor<f32>> {
    let side = towers.config().image_size;
    let d = towers.config().embed_dim;
    let mut z = Vec::with_capacity(images.len() * d);
    for part in images.chunks(chunk.max(1)) {
        let chw: Vec<Vec<f32>> = part.iter().map(|im| crate::datagen::rgb_to_chw(im, side)).collect();
        z.extend_from_slice(towers.image.embed(image_params, &ImageBatch::from_chw(&chw, side)?)?.data());
    }
    Ok(Tensor::new(&[images.len(), d], z)?)
}

#[cfg(test)]
mod tests {
    use brivl_tensor::SplitMix64;

    use super::*;

    fn unit_rows(rng: &mut SplitMix64, n: usize, d: usize) -> Tensor<f32> {
        let mut v = Vec::with_capacity(n * d);
        for _ in 0..n {
            let r: Vec<f32> = (0..d).map(|_| rng.normal() as f32).collect();
            let norm = r.iter().map(|x| x * x).sum::<f32>().sqrt();
            v.extend(r.iter().map(|x| x / norm));
        }
        Tensor::new(&[n, d], v).unwrap()
    }

    #[test]
    fn exact_duplicates_give_full_recall() {
        let mut rng = SplitMix64::new(1);
        let e = unit_rows(&mut rng, 20, 8);
        let r = retrieval_eval(&e, &e, &diagonal_truth(20)).unwrap();
        assert_eq!((r.i2t.r1, r.t2i.r10), (100.0, 100.0));
        assert_eq!(r.recall_sum, 600.0);
    }

    #[test]
    fn sixth_place_match() {
        // Candidates 0..=4 outscore the match, candidate 5.
        let mut c = vec![0f32; 12 * 2];
        for j in 0..12 {
            let s = match j {
                0..=4 => 1.0 - 0.01 * j as f32,
                5 => 0.9,
                _ => -1.0,
            };
            c[j * 2] = s;
        }
        let cands = Tensor::new(&[12, 2], c).unwrap();
        let q = Tensor::new(&[1, 2], vec![1.0, 0.0]).unwrap();
        let r = recall(Direction::ImageToText, &q, &cands, &[vec![5]]).unwrap();
        assert_eq!((r.r1, r.r5, r.r10), (0.0, 0.0, 100.0));
    }

    #[test]
    fn ties_prefer_lower_index() {
        let cands = Tensor::new(&[10, 1], vec![1.0; 10]).unwrap();
        let q = Tensor::new(&[1, 1], vec![1.0]).unwrap();
        let first = recall(Direction::ImageToText, &q, &cands, &[vec![0]]).unwrap();
        let last = recall(Direction::ImageToText, &q, &cands, &[vec![9]]).unwrap();
        assert_eq!((first.r1, last.r1, last.r10), (100.0, 0.0, 100.0));
    }

    #[test]
    fn too_few_candidates_rejected() {
        let mut rng = SplitMix64::new(2);
        let e = unit_rows(&mut rng, 5, 4);
        assert!(retrieval_eval(&e, &e, &diagonal_truth(5)).is_err());
    }

    #[test]
    fn random_embeddings_sit_at_chance() {
        let mut total = 0.0;
        for seed in 0..50 {
            let mut rng = SplitMix64::new(1000 + seed);
            let a = unit_rows(&mut rng, 100, 16);
            let b = unit_rows(&mut rng, 100, 16);
            total += retrieval_eval(&a, &b, &diagonal_truth(100)).unwrap().i2t.r1;
        }
        let mean = total / 50.0;
        assert!((mean - 1.0).abs() <= 0.5, "{mean}");
    }

    #[test]
    fn classification_cases() {
        let classes = Tensor::new(&[3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let items = Tensor::new(&[2, 3], vec![0.0, 1.0, 0.0, 0.0, 0.0, 2.0]).unwrap();
        let p = classify_embeddings(&items, &classes).unwrap();
        assert_eq!(p, vec![1, 2]);
        let rep = zero_shot_report(&["a", "b", "c"], p, &[1, 0]).unwrap();
        assert_eq!(rep.accuracy, 50.0);
        assert_eq!(rep.confusion[0][2], 1);
        assert!(zero_shot_report(&["a"], vec![0], &[0]).is_err());
        assert!(zero_shot_report(&["a", "a"], vec![0], &[0]).is_err());
    }

    #[test]
    fn rank_contains_query_first_and_permutes() {
        let mut rng = SplitMix64::new(3);
        let c = unit_rows(&mut rng, 7, 5);
        let r = rank_by_cosine(c.row(4), &c, 7).unwrap();
        assert_eq!(r[0].0, 4);
        let mut idx: Vec<usize> = r.iter().map(|x| x.0).collect();
        idx.sort();
        assert_eq!(idx, (0..7).collect::<Vec<_>>());
    }
}
