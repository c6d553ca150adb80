//! Fixed-budget, class-balanced exemplar buffer with uniform random selection.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{ClassId, Image, Sample};
use crate::error::{invalid, Error, Result};

/// How [`ReplayBuffer::draw_other_samples`] picks stored samples.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DrawMode {
    WithReplacement,
    /// Distinct samples; falls back to replacement when more are requested than stored.
    WithoutReplacement,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReplayBuffer {
    budget: usize,
    store: BTreeMap<ClassId, Vec<Sample>>,
}

/// Per-class quotas for `classes` (ascending) under budget `m`: `floor(m/k)`
/// each, with the remainder going one apiece to the lowest class ids.
pub fn class_quotas(m: usize, classes: &[ClassId]) -> Vec<usize> {
    let k = classes.len();
    if k == 0 {
        return Vec::new();
    }
    let (q, rem) = (m / k, m % k);
    (0..k).map(|i| q + usize::from(i < rem)).collect()
}

/// Uniform subset of `items` of size `min(n, len)`, preserving original order.
fn choose_subset<T: Clone>(items: &[T], n: usize, rng: &mut impl Rng) -> Vec<T> {
    if n >= items.len() {
        return items.to_vec();
    }
    let mut keep = index::sample(rng, items.len(), n).into_vec();
    keep.sort_unstable();
    keep.into_iter().map(|i| items[i].clone()).collect()
}

fn group_by_class(samples: &[Sample]) -> BTreeMap<ClassId, Vec<Sample>> {
    let mut groups: BTreeMap<ClassId, Vec<Sample>> = BTreeMap::new();
    for s in samples {
        groups.entry(s.label).or_default().push(s.clone());
    }
    groups
}

impl ReplayBuffer {
    pub fn new(budget: usize) -> Result<Self> {
        if budget == 0 {
            return Err(invalid!("replay budget must be positive"));
        }
        Ok(Self {
            budget,
            store: BTreeMap::new(),
        })
    }

    pub fn budget(&self) -> usize {
        self.budget
    }

    pub fn len(&self) -> usize {
        self.store.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.store.is_empty()
    }

    pub fn classes(&self) -> Vec<ClassId> {
        self.store.keys().copied().collect()
    }

    pub fn class_counts(&self) -> BTreeMap<ClassId, usize> {
        self.store.iter().map(|(&c, v)| (c, v.len())).collect()
    }

    pub fn samples(&self) -> impl Iterator<Item = &Sample> {
        self.store.values().flatten()
    }

    /// Adds the classes of `task_data` and rebalances every class to its quota.
    pub fn update_buffer(&mut self, task_data: &[Sample], seed: u64) -> Result<()> {
        let incoming = group_by_class(task_data);
        if let Some(c) = incoming.keys().find(|c| self.store.contains_key(c)) {
            return Err(invalid!("class {c} is already stored in the replay buffer"));
        }
        let mut all: Vec<ClassId> = self.store.keys().chain(incoming.keys()).copied().collect();
        all.sort_unstable();
        if self.budget < all.len() {
            return Err(invalid!(
                "replay budget {} cannot hold one sample for each of {} classes",
                self.budget,
                all.len()
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut next = BTreeMap::new();
        for (&c, q) in all.iter().zip(class_quotas(self.budget, &all)) {
            let pool = self.store.get(&c).or_else(|| incoming.get(&c)).expect("class present");
            next.insert(c, choose_subset(pool, q, &mut rng));
        }
        self.store = next;
        Ok(())
    }

    /// `n` stored samples paired with the "other" label `other_index`.
    /// An empty buffer yields an empty draw.
    pub fn draw_other_samples(
        &self,
        n: usize,
        other_index: usize,
        mode: DrawMode,
        rng: &mut impl Rng,
    ) -> Vec<(&Sample, usize)> {
        let flat: Vec<&Sample> = self.samples().collect();
        if flat.is_empty() || n == 0 {
            return Vec::new();
        }
        let picks: Vec<usize> = match mode {
            DrawMode::WithoutReplacement if n <= flat.len() => index::sample(rng, flat.len(), n).into_vec(),
            _ => (0..n).map(|_| rng.random_range(0..flat.len())).collect(),
        };
        picks.into_iter().map(|i| (flat[i], other_index)).collect()
    }

    /// Current-task classes undersampled to the per-class quota the buffer
    /// grants (or `M/|C_t|` while it is empty), joined with every stored sample.
    pub fn build_balanced_set(&self, current: &[Sample], seed: u64) -> Result<Vec<Sample>> {
        let groups = group_by_class(current);
        if let Some(c) = groups.keys().find(|c| self.store.contains_key(c)) {
            return Err(invalid!("current-task class {c} is already stored in the replay buffer"));
        }
        let quota = if self.store.is_empty() {
            self.budget / groups.len().max(1)
        } else {
            self.budget / self.store.len()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out: Vec<Sample> = self.samples().cloned().collect();
        for pool in groups.values() {
            out.extend(choose_subset(pool, quota.max(1), &mut rng));
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoredSample {
    pub id: u64,
    pub file: String,
    pub sha256: String,
}

/// Class id → stored samples, as written to `manifest.json`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BufferManifest {
    pub budget: usize,
    pub classes: BTreeMap<ClassId, Vec<StoredSample>>,
}

pub const BUFFER_MANIFEST: &str = "manifest.json";

fn encode_sample(s: &Sample) -> Vec<u8> {
    let mut out = Vec::with_capacity(28 + s.image.pixels.len());
    out.extend_from_slice(&s.id.to_le_bytes());
    out.extend_from_slice(&s.label.to_le_bytes());
    for d in [s.image.channels, s.image.height, s.image.width] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.extend_from_slice(&s.image.pixels);
    out
}

fn decode_sample(bytes: &[u8], path: &Path) -> Result<Sample> {
    let fmt = |offset: u64, message: &str| Error::Format {
        path: path.to_path_buf(),
        offset,
        message: message.into(),
    };
    if bytes.len() < 24 {
        return Err(fmt(bytes.len() as u64, "truncated sample header"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes")) as usize;
    let id = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"));
    let label = u32_at(8) as ClassId;
    let (c, h, w) = (u32_at(12), u32_at(16), u32_at(20));
    if bytes.len() != 24 + c * h * w {
        return Err(fmt(24, "pixel payload length does not match header"));
    }
    Ok(Sample {
        id,
        label,
        image: Image::new(c, h, w, bytes[24..].to_vec())?,
    })
}

impl ReplayBuffer {
    /// Writes one raw file per sample plus a manifest with content hashes.
    pub fn save(&self, dir: &Path) -> Result<BufferManifest> {
        let samples_dir = dir.join("samples");
        std::fs::create_dir_all(&samples_dir)
            .map_err(|e| Error::io(format!("creating {}", samples_dir.display()), e))?;
        let mut classes = BTreeMap::new();
        for (&c, samples) in &self.store {
            let mut entries = Vec::new();
            for s in samples {
                let file = format!("samples/{}.bin", s.id);
                let path = dir.join(&file);
                std::fs::write(&path, encode_sample(s))
                    .map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
                entries.push(StoredSample {
                    id: s.id,
                    file,
                    sha256: s.content_hash(),
                });
            }
            classes.insert(c, entries);
        }
        let manifest = BufferManifest {
            budget: self.budget,
            classes,
        };
        let path = dir.join(BUFFER_MANIFEST);
        std::fs::write(&path, serde_json::to_string_pretty(&manifest)?)
            .map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
        Ok(manifest)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(BUFFER_MANIFEST);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let manifest: BufferManifest = serde_json::from_str(&text)?;
        let mut buffer = Self::new(manifest.budget)?;
        for (c, entries) in manifest.classes {
            let mut samples = Vec::new();
            for e in entries {
                let p = dir.join(&e.file);
                let bytes = std::fs::read(&p).map_err(|err| Error::io(format!("reading {}", p.display()), err))?;
                let s = decode_sample(&bytes, &p)?;
                if s.content_hash() != e.sha256 || s.label != c || s.id != e.id {
                    return Err(invalid!("{}: content does not match manifest", p.display()));
                }
                samples.push(s);
            }
            buffer.store.insert(c, samples);
        }
        if buffer.len() > buffer.budget {
            return Err(invalid!("stored {} samples exceed budget {}", buffer.len(), buffer.budget));
        }
        Ok(buffer)
    }
}
