//! Gaussian-noise corpus around distinct class mean patterns.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{ClassId, Corpus, Image, Sample, TEST_ID_OFFSET};
use crate::error::{invalid, Result};
use crate::kv::KvFile;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum PatternSource {
    /// Seeded `cells×cells` grids with levels 0.2 / 0.8, upsampled to the image.
    Grid { cells: usize },
    /// Explicit patterns in `[0,1]`, each `image_size²` long.
    Explicit(Vec<Vec<f64>>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub per_class: usize,
    pub test_per_class: usize,
    pub image_size: usize,
    /// Gaussian noise standard deviation in normalised `[0,1]` pixel units.
    pub noise: f64,
    pub seed: u64,
    pub patterns: PatternSource,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            classes: 4,
            per_class: 60,
            test_per_class: 40,
            image_size: 32,
            noise: 0.0,
            seed: 0,
            patterns: PatternSource::Grid { cells: 4 },
        }
    }
}

impl SyntheticSpec {
    /// Reads `synthetic.*`-style keys (`classes`, `per_class`, `test_per_class`,
    /// `image_size`, `noise`, `seed`, `cells`) under `prefix`.
    pub fn from_kv(kv: &mut KvFile, prefix: &str) -> Result<Self> {
        let d = Self::default();
        let key = |k: &str| format!("{prefix}{k}");
        let cells = kv.take_or(&key("cells"), 4usize)?;
        Ok(Self {
            classes: kv.take_or(&key("classes"), d.classes)?,
            per_class: kv.take_or(&key("per_class"), d.per_class)?,
            test_per_class: kv.take_or(&key("test_per_class"), d.test_per_class)?,
            image_size: kv.take_or(&key("image_size"), d.image_size)?,
            noise: kv.take_or(&key("noise"), d.noise)?,
            seed: kv.take_or(&key("seed"), d.seed)?,
            patterns: PatternSource::Grid { cells },
        })
    }

    /// Standalone synthetic-spec file with un-prefixed keys.
    pub fn read(path: &Path) -> Result<Self> {
        let mut kv = KvFile::read(path)?;
        let spec = Self::from_kv(&mut kv, "")?;
        kv.finish()?;
        Ok(spec)
    }
}

/// Oracle metadata: class means (normalised, row-major) and their distances.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticMeta {
    pub means: Vec<Vec<f64>>,
    pub pairwise_distances: Vec<Vec<f64>>,
    pub noise: f64,
    pub image_size: usize,
}

fn grid_patterns(classes: usize, cells: usize, size: usize, rng: &mut impl Rng) -> Result<Vec<Vec<f64>>> {
    if cells == 0 || !size.is_multiple_of(cells) {
        return Err(invalid!("grid cells {cells} must divide image size {size}"));
    }
    if cells * cells < 64 && classes > 1usize << (cells * cells) {
        return Err(invalid!("{cells}x{cells} grid cannot give {classes} distinct patterns"));
    }
    let block = size / cells;
    let mut grids: Vec<Vec<bool>> = Vec::with_capacity(classes);
    while grids.len() < classes {
        let g: Vec<bool> = (0..cells * cells).map(|_| rng.random_bool(0.5)).collect();
        if !grids.contains(&g) {
            grids.push(g);
        }
    }
    Ok(grids
        .into_iter()
        .map(|g| {
            (0..size * size)
                .map(|p| {
                    let (i, j) = (p / size / block, p % size / block);
                    if g[i * cells + j] { 0.8 } else { 0.2 }
                })
                .collect()
        })
        .collect())
}

/// Samples `mean + σ·z` per pixel, quantised to 8 bits. Class ids are `0..classes`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<(Corpus, SyntheticMeta)> {
    if !(spec.noise >= 0.0) {
        return Err(invalid!("noise must be non-negative, got {}", spec.noise));
    }
    if spec.classes == 0 || spec.image_size == 0 {
        return Err(invalid!("synthetic data needs classes and a positive image size"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let size = spec.image_size;
    let means = match &spec.patterns {
        PatternSource::Grid { cells } => grid_patterns(spec.classes, *cells, size, &mut rng)?,
        PatternSource::Explicit(p) => {
            if p.len() != spec.classes || p.iter().any(|m| m.len() != size * size) {
                return Err(invalid!("need {} explicit patterns of {} values", spec.classes, size * size));
            }
            for i in 0..p.len() {
                for j in 0..i {
                    if p[i] == p[j] {
                        return Err(invalid!("classes {j} and {i} share the same mean pattern"));
                    }
                }
            }
            p.clone()
        }
    };
    let pairwise_distances = means
        .iter()
        .map(|a| {
            means
                .iter()
                .map(|b| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt())
                .collect()
        })
        .collect();
    let draw = |label: usize, id: u64, rng: &mut ChaCha8Rng| -> Sample {
        let pixels = means[label]
            .iter()
            .map(|&m| {
                let z: f64 = StandardNormal.sample(rng);
                ((m + spec.noise * z) * 255.0).round().clamp(0.0, 255.0) as u8
            })
            .collect();
        Sample {
            id,
            label: label as ClassId,
            image: Image {
                channels: 1,
                height: size,
                width: size,
                pixels,
            },
        }
    };
    let mut corpus = Corpus::default();
    let mut next = 0u64;
    for _ in 0..spec.per_class {
        for c in 0..spec.classes {
            corpus.train.push(draw(c, next, &mut rng));
            next += 1;
        }
    }
    next = TEST_ID_OFFSET;
    for _ in 0..spec.test_per_class {
        for c in 0..spec.classes {
            corpus.test.push(draw(c, next, &mut rng));
            next += 1;
        }
    }
    let meta = SyntheticMeta {
        means,
        pairwise_distances,
        noise: spec.noise,
        image_size: size,
    };
    Ok((corpus, meta))
}

/// Class whose mean is closest in Euclidean distance (ties → lowest id).
pub fn nearest_mean_predict(meta: &SyntheticMeta, image: &Image) -> ClassId {
    let x: Vec<f64> = image.pixels.iter().map(|&p| p as f64 / 255.0).collect();
    let mut best = (0usize, f64::INFINITY);
    for (c, m) in meta.means.iter().enumerate() {
        let d: f64 = m.iter().zip(&x).map(|(a, b)| (a - b).powi(2)).sum();
        if d < best.1 {
            best = (c, d);
        }
    }
    best.0 as ClassId
}

/// Percentage of `samples` classified correctly by [`nearest_mean_predict`].
pub fn nearest_mean_accuracy(meta: &SyntheticMeta, samples: &[Sample]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let hits = samples
        .iter()
        .filter(|s| nearest_mean_predict(meta, &s.image) == s.label)
        .count();
    100.0 * hits as f64 / samples.len() as f64
}
