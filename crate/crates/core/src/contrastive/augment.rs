//! Random graying and colour jitter.

use brivl_tensor::SplitMix64;

pub const GRAY_PROB: f64 = 0.2;
pub const JITTER: (f32, f32) = (0.8, 1.2);

/// Augments one channel-first RGB image in place: with probability
/// [`GRAY_PROB`] replaces it by its luminance on all channels, then scales
/// brightness and contrast by factors drawn from [`JITTER`]. Values stay in
/// `[0, 1]`.
pub fn augment(image: &mut [f32], rng: &mut SplitMix64) {
    let plane = image.len() / 3;
    if rng.bernoulli(GRAY_PROB) {
        for p in 0..plane {
            let y = 0.299 * image[p] + 0.587 * image[plane + p] + 0.114 * image[2 * plane + p];
            image[p] = y;
            image[plane + p] = y;
            image[2 * plane + p] = y;
        }
    }
    let brightness = rng.uniform(JITTER.0, JITTER.1);
    let contrast = rng.uniform(JITTER.0, JITTER.1);
    let mean = image.iter().sum::<f32>() / image.len() as f32;
    for v in image.iter_mut() {
        let b = *v * brightness;
        *v = ((b - mean * brightness) * contrast + mean * brightness).clamp(0.0, 1.0);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stays_in_range_and_grays_sometimes() {
        let mut rng = SplitMix64::new(2);
        let mut grayed = 0;
        for _ in 0..500 {
            let mut img: Vec<f32> = (0..48).map(|i| (i % 7) as f32 / 6.0).collect();
            augment(&mut img, &mut rng);
            assert!(img.iter().all(|v| (0.0..=1.0).contains(v)));
            if img[..16] == img[16..32] && img[16..32] == img[32..] {
                grayed += 1;
            }
        }
        let rate = grayed as f64 / 500.0;
        assert!((rate - GRAY_PROB).abs() < 0.06, "{rate}");
    }
}
