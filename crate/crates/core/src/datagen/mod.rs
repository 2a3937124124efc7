//! Synthetic weakly-correlated image/text pairs.
//!
//! A scene of 1-3 coloured shapes on a textured background is rendered to an
//! image; its caption mentions each attribute independently with
//! probability [`MENTION_PROB`], never everything when there are two or more
//! objects, and is padded with filler words. Record `i` of a dataset draws
//! from the stream `SplitMix64::stream(seed, i)`, so generation is parallel
//! and reproducible.

mod format;
mod render;
mod scene;

use rayon::prelude::*;

use brivl_tensor::SplitMix64;

use crate::error::Result;

pub use format::{read_dataset, write_dataset, DATASET_MAGIC, DATASET_VERSION};
pub use render::render;
pub use scene::{Background, Color, SceneObject, SceneSpec, Shape, Size, GRID};

pub const MENTION_PROB: f64 = 0.6;

pub const FILLERS: &[&str] = &[
    "a", "nice", "day", "photo", "picture", "the", "some", "look", "image", "today", "my", "view",
];

/// Words produced by captions, in vocabulary order.
pub fn caption_words() -> Vec<&'static str> {
    let mut w = Vec::new();
    w.extend(Shape::ALL.iter().map(|s| s.word()));
    w.extend(Color::ALL.iter().map(|s| s.word()));
    w.extend(Size::ALL.iter().map(|s| s.word()));
    w.extend(Background::ALL.iter().map(|s| s.word()));
    w.extend(["background", "and", "on"]);
    w.extend(FILLERS);
    w
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AttributeKind {
    Shape,
    Color,
    Size,
    Background,
}

/// One attribute slot of a scene: `(object index, kind)`; background uses
/// `None`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Attribute {
    pub object: Option<usize>,
    pub kind: AttributeKind,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Description {
    pub text: String,
    pub mentioned: Vec<Attribute>,
    pub total_attributes: usize,
}

fn scene_attributes(scene: &SceneSpec) -> Vec<Attribute> {
    let mut a = Vec::new();
    for i in 0..scene.objects().len() {
        for kind in [AttributeKind::Size, AttributeKind::Color, AttributeKind::Shape] {
            a.push(Attribute { object: Some(i), kind });
        }
    }
    a.push(Attribute {
        object: None,
        kind: AttributeKind::Background,
    });
    a
}

/// Builds a partial caption for `scene`.
pub fn describe(scene: &SceneSpec, rng: &mut SplitMix64) -> Description {
    let attrs = scene_attributes(scene);
    let mut mention: Vec<bool> = attrs.iter().map(|_| rng.bernoulli(MENTION_PROB)).collect();
    if scene.objects().len() >= 2 {
        let cap = (3 * attrs.len()).div_ceil(4);
        let mut on: Vec<usize> = (0..attrs.len()).filter(|&i| mention[i]).collect();
        while on.len() > cap {
            let drop = on.remove(rng.below(on.len()));
            mention[drop] = false;
        }
    }
    if !mention.iter().any(|&m| m) {
        mention[rng.below(attrs.len())] = true;
    }

    let mut words: Vec<&'static str> = Vec::new();
    for (i, o) in scene.objects().iter().enumerate() {
        let base = i * 3;
        let phrase: Vec<&'static str> = [o.size.word(), o.color.word(), o.shape.word()]
            .into_iter()
            .enumerate()
            .filter(|(j, _)| mention[base + j])
            .map(|(_, w)| w)
            .collect();
        if phrase.is_empty() {
            continue;
        }
        if !words.is_empty() {
            words.push("and");
        }
        words.extend(phrase);
    }
    if mention[attrs.len() - 1] {
        if !words.is_empty() {
            words.push("on");
        }
        words.push(scene.background().word());
        words.push("background");
    }
    let fillers = rng.below(4);
    for _ in 0..fillers {
        let w = FILLERS[rng.below(FILLERS.len())];
        let at = rng.below(words.len() + 1);
        words.insert(at, w);
    }
    let mentioned = attrs
        .iter()
        .zip(&mention)
        .filter(|(_, &m)| m)
        .map(|(a, _)| *a)
        .collect();
    Description {
        text: words.join(" "),
        mentioned,
        total_attributes: attrs.len(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairRecord {
    /// Interleaved RGB bytes, `side x side`.
    pub image: Vec<u8>,
    pub text: String,
    pub scene: SceneSpec,
    pub split: Split,
}

impl PairRecord {
    /// Channel-first `[3, side, side]` values in `[0, 1]`.
    pub fn image_chw(&self, side: usize) -> Vec<f32> {
        rgb_to_chw(&self.image, side)
    }

    /// True when the caption shares at least one attribute word with the scene.
    pub fn shares_attribute(&self) -> bool {
        let attrs = self.scene.attribute_words();
        self.text.split_whitespace().any(|w| attrs.contains(&w))
    }
}

pub fn rgb_to_chw(rgb: &[u8], side: usize) -> Vec<f32> {
    let plane = side * side;
    let mut out = vec![0f32; 3 * plane];
    for (p, px) in rgb.chunks(3).enumerate() {
        for c in 0..3 {
            out[c * plane + p] = px[c] as f32 / 255.0;
        }
    }
    out
}

/// Draws a scene with 1-3 objects and its caption.
pub fn generate_pair(rng: &mut SplitMix64, side: usize) -> PairRecord {
    let n = 1 + rng.below(3);
    let scene = SceneSpec::random(rng, n).expect("1-3 objects on 16 cells");
    let desc = describe(&scene, rng);
    PairRecord {
        image: render(&scene, side),
        text: desc.text,
        scene,
        split: Split::Train,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairDataset {
    pub image_size: usize,
    pub records: Vec<PairRecord>,
}

impl PairDataset {
    /// `train` training records followed by `test` held-out records.
    pub fn generate(seed: u64, train: usize, test: usize, image_size: usize) -> Self {
        let records = (0..train + test)
            .into_par_iter()
            .map(|i| {
                let mut rng = SplitMix64::stream(seed, i as u64);
                let mut r = generate_pair(&mut rng, image_size);
                r.split = if i < train { Split::Train } else { Split::Test };
                r
            })
            .collect();
        Self { image_size, records }
    }

    pub fn split(&self, split: Split) -> Vec<&PairRecord> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Single-object images labelled by shape, for zero-shot classification.
pub fn shape_probe_set(seed: u64, count: usize, side: usize) -> Vec<(Vec<u8>, Shape)> {
    (0..count)
        .into_par_iter()
        .map(|i| {
            let mut rng = SplitMix64::stream(seed ^ 0x5348_4150_4553, i as u64);
            let scene = SceneSpec::random(&mut rng, 1).expect("one object");
            let shape = scene.objects()[0].shape;
            (render(&scene, side), shape)
        })
        .collect()
}

/// Encodes a dataset to bytes.
pub fn dataset_bytes(ds: &PairDataset) -> Result<Vec<u8>> {
    format::encode(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn caption_instance() {
        let scene = SceneSpec::new(
            vec![SceneObject {
                shape: Shape::Circle,
                color: Color::Red,
                size: Size::Large,
                cell: (1, 1),
            }],
            Background::Plain,
        )
        .unwrap();
        let mut rng = SplitMix64::new(1);
        let words = caption_words();
        for _ in 0..50 {
            let d = describe(&scene, &mut rng);
            assert!(!d.mentioned.is_empty());
            for w in d.text.split_whitespace() {
                assert!(words.contains(&w), "{w}");
                // never contradicts the scene
                if Shape::ALL.iter().any(|s| s.word() == w) {
                    assert_eq!(w, "circle");
                }
                if Color::ALL.iter().any(|s| s.word() == w) {
                    assert_eq!(w, "red");
                }
            }
        }
    }

    #[test]
    fn mention_rate_near_target() {
        // Monte-Carlo count over 10,000 scenes, per attribute kind.
        let mut rng = SplitMix64::new(99);
        let kinds = [AttributeKind::Shape, AttributeKind::Color, AttributeKind::Size, AttributeKind::Background];
        let mut hits = [0usize; 4];
        let mut totals = [0usize; 4];
        for _ in 0..10_000 {
            let n = 1 + rng.below(3);
            let scene = SceneSpec::random(&mut rng, n).unwrap();
            let d = describe(&scene, &mut rng);
            for (k, kind) in kinds.iter().enumerate() {
                totals[k] += if *kind == AttributeKind::Background { 1 } else { n };
                hits[k] += d.mentioned.iter().filter(|a| a.kind == *kind).count();
            }
        }
        for k in 0..4 {
            let rate = hits[k] as f64 / totals[k] as f64;
            assert!((rate - 0.6).abs() < 0.02, "{:?}: {rate}", kinds[k]);
        }
    }

    #[test]
    fn multi_object_captions_never_exhaustive() {
        let mut rng = SplitMix64::new(4);
        for _ in 0..5_000 {
            let n = 2 + rng.below(2);
            let scene = SceneSpec::random(&mut rng, n).unwrap();
            let d = describe(&scene, &mut rng);
            assert!(d.mentioned.len() < d.total_attributes);
            assert!(d.mentioned.len() <= (3 * d.total_attributes).div_ceil(4));
        }
    }

    #[test]
    fn dataset_is_deterministic_and_learnable() {
        let a = PairDataset::generate(11, 300, 20, 32);
        let b = PairDataset::generate(11, 300, 20, 32);
        assert_eq!(a, b);
        assert_eq!(a.split(Split::Test).len(), 20);
        let shared = a.records.iter().filter(|r| r.shares_attribute()).count();
        assert!(shared as f64 >= 0.95 * a.len() as f64);
        let c = PairDataset::generate(12, 300, 20, 32);
        assert_ne!(a, c);
    }
}
