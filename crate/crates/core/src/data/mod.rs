//! Sample types, IDX ingestion, synthetic corpora, task splitting and
//! image preprocessing.

mod idx;
mod preprocess;
mod shapes;
mod split;
mod synthetic;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use idx::{load_idx, parse_idx_images, parse_idx_labels, write_idx, IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC};
pub use preprocess::{augment, batch_tensor, hflip, preprocess, resize_bilinear, PreparedSample};
pub use shapes::{generate_shapes, SHAPES_CLASS_BASE};
pub use split::{split_tasks, SplitConfig, TaskManifest, TaskManifestEntry, TaskSequence, TaskSpec};
pub use synthetic::{
    generate_synthetic, nearest_mean_accuracy, nearest_mean_predict, PatternSource, SyntheticMeta,
    SyntheticSpec,
};

/// Global class identifier.
pub type ClassId = u32;

/// Raw 8-bit image, channel-major (`C×H×W`).
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u8>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, pixels: Vec<u8>) -> crate::Result<Self> {
        if pixels.len() != channels * height * width {
            return Err(crate::error::invalid!(
                "{}x{}x{} image needs {} pixels, got {}",
                channels,
                height,
                width,
                channels * height * width,
                pixels.len()
            ));
        }
        Ok(Self {
            channels,
            height,
            width,
            pixels,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Sample {
    /// Unique within a corpus; stable across runs.
    pub id: u64,
    pub label: ClassId,
    pub image: Image,
}

impl Sample {
    /// Hex SHA-256 over label, geometry and pixels.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.label.to_le_bytes());
        for d in [self.image.channels, self.image.height, self.image.width] {
            h.update((d as u64).to_le_bytes());
        }
        h.update(&self.image.pixels);
        hex::encode(h.finalize())
    }
}

/// Train and test samples of one labelled dataset.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Corpus {
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

/// Offset added to test-sample ids so train and test ids never collide.
pub const TEST_ID_OFFSET: u64 = 1 << 32;

impl Corpus {
    /// Loads `train-*` / `test-*` IDX pairs; test ids are shifted by [`TEST_ID_OFFSET`].
    pub fn load_idx(
        train_images: &std::path::Path,
        train_labels: &std::path::Path,
        test_images: &std::path::Path,
        test_labels: &std::path::Path,
    ) -> crate::Result<Self> {
        let train = load_idx(train_images, train_labels)?;
        let mut test = load_idx(test_images, test_labels)?;
        for s in &mut test {
            s.id += TEST_ID_OFFSET;
        }
        Ok(Self { train, test })
    }
}

/// Hex SHA-256 over the concatenated content hashes of `samples`.
pub fn samples_hash<'a>(samples: impl IntoIterator<Item = &'a Sample>) -> String {
    let mut h = Sha256::new();
    for s in samples {
        h.update(s.id.to_le_bytes());
        h.update(s.content_hash().as_bytes());
    }
    hex::encode(h.finalize())
}
