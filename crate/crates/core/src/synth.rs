//! Synthetic datasets with known structure.

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::features::FeatureMatrix;
use crate::preprocess::Image;
use crate::rng;

/// Class names used for blob datasets, label 0 then label 1.
pub const BLOB_CLASSES: [&str; 2] = ["hem", "all"];

/// Gray `size × size` image of a dark soft-edged disc on a noisy bright
/// background. Label-1 discs are larger (radius 8 to 11) than label-0 discs
/// (radius 4 to 6.5).
pub fn blob_image<R: Rng + ?Sized>(size: usize, label: u8, rng: &mut R) -> Image {
    let s = size as f64 / 32.0;
    let radius = if label == 1 { rng.gen_range(8.0..11.0) } else { rng.gen_range(4.0..6.5) } * s;
    let half = size as f64 / 2.0;
    let cy = half + rng.gen_range(-3.0..3.0) * s;
    let cx = half + rng.gen_range(-3.0..3.0) * s;
    let aspect = rng.gen_range(0.8..1.25);
    let noise = Normal::new(0.0, 10.0).expect("valid std");
    let mut px = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let dy = (y as f64 + 0.5 - cy) * aspect;
            let dx = (x as f64 + 0.5 - cx) / aspect;
            let r = (dy * dy + dx * dx).sqrt();
            // 0 inside the disc, 1 outside, linear over one pixel
            let t = (r - radius + 0.5).clamp(0.0, 1.0);
            let v = 70.0 + t * 110.0 + noise.sample(rng);
            px.push(v.round().clamp(0.0, 255.0) as u8);
        }
    }
    Image::new(size, size, 1, px).expect("consistent layout")
}

/// `positives` label-1 images followed by `negatives` label-0 images.
pub fn blob_dataset(size: usize, positives: usize, negatives: usize, seed: u64) -> Vec<(Image, u8)> {
    let labels = std::iter::repeat_n(1u8, positives).chain(std::iter::repeat_n(0u8, negatives));
    labels
        .enumerate()
        .map(|(i, l)| (blob_image(size, l, &mut rng::stream(seed, "synth.blob", i as u64)), l))
        .collect()
}

#[derive(Debug, Clone)]
pub struct Planted {
    pub features: FeatureMatrix,
    pub labels: Vec<u8>,
    pub informative: Vec<usize>,
}

/// Balanced two-class Gaussian data where only `informative` of the `d`
/// columns carry signal: their class-conditional means are `±shift`.
/// Informative columns are drawn at random and returned sorted.
pub fn planted_features(samples: usize, d: usize, informative: usize, shift: f64, seed: u64) -> Planted {
    assert!(informative <= d, "more informative columns than columns");
    let mut r = rng::stream(seed, "synth.planted", 0);
    let mut cols = rand::seq::index::sample(&mut r, d, informative).into_vec();
    cols.sort_unstable();
    let mut is_inf = vec![false; d];
    cols.iter().for_each(|&c| is_inf[c] = true);
    let mut data = Vec::with_capacity(samples * d);
    let mut labels = Vec::with_capacity(samples);
    for i in 0..samples {
        let y = (i % 2) as u8;
        let sign = if y == 1 { 1.0 } else { -1.0 };
        for inf in &is_inf {
            let z: f64 = StandardNormal.sample(&mut r);
            data.push(if *inf { z + sign * shift } else { z });
        }
        labels.push(y);
    }
    Planted { features: FeatureMatrix::new(samples, d, data).expect("consistent layout"), labels, informative: cols }
}

/// Two Gaussian clouds in the plane separated by a margin along `x + y`.
pub fn separable_points(samples: usize, seed: u64) -> (FeatureMatrix, Vec<u8>) {
    let mut r = rng::stream(seed, "synth.separable", 0);
    let mut data = Vec::with_capacity(samples * 2);
    let mut labels = Vec::with_capacity(samples);
    while labels.len() < samples {
        let x: f64 = r.gen_range(-3.0..3.0);
        let y: f64 = r.gen_range(-3.0..3.0);
        let m = x + y;
        if m.abs() < 0.5 {
            continue;
        }
        data.extend([x, y]);
        labels.push(u8::from(m > 0.0));
    }
    (FeatureMatrix::new(samples, 2, data).expect("consistent layout"), labels)
}
