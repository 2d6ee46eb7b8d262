use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{LabeledDataset, Split};
use crate::error::{Error, Result};
use crate::net::Matrix;
use crate::seed::derive_seed;

/// Isotropic Gaussian class clusters.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianSpec {
    pub num_classes: usize,
    pub feature_dim: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Norm of every class mean.
    pub radius: f64,
    pub noise_std: f64,
    pub seed: u64,
}

/// Draws one Gaussian cluster per class around a mean placed uniformly on the
/// sphere of radius `spec.radius`. Train and test use separate streams.
pub fn gen_synthetic(spec: &GaussianSpec) -> Result<(LabeledDataset, LabeledDataset)> {
    if spec.feature_dim < 2 {
        return Err(Error::invalid(
            "synthetic features need at least 2 dimensions",
        ));
    }
    if spec.num_classes == 0 {
        return Err(Error::invalid(
            "synthetic benchmark needs at least one class",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &[0x6d65_616e]));
    let means: Vec<Vec<f64>> = (0..spec.num_classes)
        .map(|_| {
            let v: Vec<f64> = (0..spec.feature_dim)
                .map(|_| rng.sample(StandardNormal))
                .collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            v.into_iter().map(|x| x * spec.radius / norm).collect()
        })
        .collect();
    let draw = |stream: u64, per_class: usize, split: Split| {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &[stream]));
        let n = per_class * spec.num_classes;
        let mut data = Vec::with_capacity(n * spec.feature_dim);
        let mut labels = Vec::with_capacity(n);
        for (class, mean) in means.iter().enumerate() {
            for _ in 0..per_class {
                data.extend(mean.iter().map(|m| {
                    let z: f64 = rng.sample(StandardNormal);
                    m + spec.noise_std * z
                }));
                labels.push(class);
            }
        }
        LabeledDataset::new(
            Matrix::from_vec(n, spec.feature_dim, data)?,
            labels,
            spec.num_classes,
            split,
        )
    };
    Ok((
        draw(1, spec.train_per_class, Split::Train)?,
        draw(2, spec.test_per_class, Split::Test)?,
    ))
}

/// Procedural grayscale "glyph" images: every class owns a few random pen
/// strokes; samples jitter the position and contrast and add pixel noise.
#[derive(Clone, Debug, PartialEq)]
pub struct GlyphSpec {
    pub num_classes: usize,
    pub side: usize,
    pub strokes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for GlyphSpec {
    fn default() -> Self {
        GlyphSpec {
            num_classes: 10,
            side: 12,
            strokes: 3,
            train_per_class: 200,
            test_per_class: 100,
            noise_std: 0.35,
            seed: 0,
        }
    }
}

/// Raw 8-bit images in row-major order plus labels.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSet {
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
    pub labels: Vec<u8>,
}

impl ImageSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

pub fn gen_glyphs(spec: &GlyphSpec) -> Result<(ImageSet, ImageSet)> {
    if spec.side < 4 || spec.num_classes == 0 || spec.num_classes > 256 {
        return Err(Error::invalid("glyphs need side >= 4 and 1..=256 classes"));
    }
    let side = spec.side;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &[0x676c_7970]));
    let prototypes: Vec<Vec<f64>> = (0..spec.num_classes)
        .map(|_| {
            let mut img = vec![0.0; side * side];
            for _ in 0..spec.strokes {
                let lo = 1.0;
                let hi = (side - 2) as f64;
                let (x0, y0) = (rng.random_range(lo..hi), rng.random_range(lo..hi));
                let (x1, y1) = (rng.random_range(lo..hi), rng.random_range(lo..hi));
                let steps = 4 * side;
                for s in 0..=steps {
                    let t = s as f64 / steps as f64;
                    let x = (x0 + t * (x1 - x0)).round() as usize;
                    let y = (y0 + t * (y1 - y0)).round() as usize;
                    img[y * side + x] = 1.0;
                }
            }
            img
        })
        .collect();
    let draw = |stream: u64, per_class: usize| {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &[stream]));
        let mut pixels = Vec::with_capacity(per_class * spec.num_classes * side * side);
        let mut labels = Vec::with_capacity(per_class * spec.num_classes);
        for (class, proto) in prototypes.iter().enumerate() {
            for _ in 0..per_class {
                let dx = rng.random_range(-1i64..=1);
                let dy = rng.random_range(-1i64..=1);
                let contrast = rng.random_range(0.5..1.0);
                for y in 0..side as i64 {
                    for x in 0..side as i64 {
                        let (sx, sy) = (x - dx, y - dy);
                        let base =
                            if (0..side as i64).contains(&sx) && (0..side as i64).contains(&sy) {
                                proto[sy as usize * side + sx as usize]
                            } else {
                                0.0
                            };
                        let z: f64 = rng.sample(StandardNormal);
                        let v = (contrast * base + spec.noise_std * z).clamp(0.0, 1.0);
                        pixels.push((v * 255.0).round() as u8);
                    }
                }
                labels.push(class as u8);
            }
        }
        ImageSet {
            rows: side,
            cols: side,
            pixels,
            labels,
        }
    };
    Ok((draw(1, spec.train_per_class), draw(2, spec.test_per_class)))
}

/// Scales pixels to `[0, 1]` and flattens every image.
pub fn images_to_dataset(
    set: &ImageSet,
    num_classes: usize,
    split: Split,
) -> Result<LabeledDataset> {
    let dim = set.rows * set.cols;
    let data = set.pixels.iter().map(|&p| f64::from(p) / 255.0).collect();
    LabeledDataset::new(
        Matrix::from_vec(set.len(), dim, data)?,
        set.labels.iter().map(|&l| usize::from(l)).collect(),
        num_classes,
        split,
    )
}
