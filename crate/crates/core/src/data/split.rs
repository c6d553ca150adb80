use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{samples_hash, ClassId, Corpus, Sample};
use crate::error::{invalid, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitConfig {
    pub classes_per_task: usize,
    /// Explicit task partition; overrides the seeded permutation when set.
    pub partition: Option<Vec<Vec<ClassId>>>,
    pub class_order_seed: u64,
    /// Classes held out of every task (e.g. for backbone pretraining).
    pub reserved_classes: Vec<ClassId>,
    /// Keep at most this many train samples per class (file order).
    pub train_per_class: Option<usize>,
    pub test_per_class: Option<usize>,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            classes_per_task: 2,
            partition: None,
            class_order_seed: 0,
            reserved_classes: Vec::new(),
            train_per_class: None,
            test_per_class: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskSpec {
    /// 1-based task index.
    pub id: usize,
    pub classes: Vec<ClassId>,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskSequence {
    pub tasks: Vec<TaskSpec>,
    pub class_order_seed: u64,
    /// Train samples of the reserved classes.
    pub reserved_train: Vec<Sample>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskManifestEntry {
    pub task_id: usize,
    pub classes: Vec<ClassId>,
    pub train_counts: BTreeMap<ClassId, usize>,
    pub test_counts: BTreeMap<ClassId, usize>,
    pub train_hash: String,
    pub test_hash: String,
}

/// Serializable summary of a [`TaskSequence`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskManifest {
    pub class_order_seed: u64,
    pub tasks: Vec<TaskManifestEntry>,
}

fn take_per_class<'a>(
    samples: impl Iterator<Item = &'a Sample>,
    classes: &BTreeSet<ClassId>,
    cap: Option<usize>,
) -> Vec<Sample> {
    let mut counts: HashMap<ClassId, usize> = HashMap::new();
    samples
        .filter(|s| classes.contains(&s.label))
        .filter(|s| {
            let n = counts.entry(s.label).or_default();
            *n += 1;
            cap.is_none_or(|c| *n <= c)
        })
        .cloned()
        .collect()
}

/// Partitions the corpus into class-disjoint tasks.
///
/// Without an explicit partition the class universe is shuffled with
/// `class_order_seed` and chunked into `classes_per_task` groups.
pub fn split_tasks(corpus: &Corpus, config: &SplitConfig) -> Result<TaskSequence> {
    let reserved: BTreeSet<ClassId> = config.reserved_classes.iter().copied().collect();
    let universe: Vec<ClassId> = corpus
        .train
        .iter()
        .map(|s| s.label)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .filter(|c| !reserved.contains(c))
        .collect();
    if universe.is_empty() {
        return Err(invalid!("no classes left to split"));
    }
    let groups: Vec<Vec<ClassId>> = match &config.partition {
        Some(p) => {
            let mut seen = BTreeSet::new();
            for &c in p.iter().flatten() {
                if !seen.insert(c) {
                    return Err(invalid!("class {c} appears in more than one task"));
                }
            }
            if seen.iter().copied().collect::<Vec<_>>() != universe {
                return Err(invalid!(
                    "explicit partition {seen:?} does not cover the class universe {universe:?}"
                ));
            }
            if p.iter().any(Vec::is_empty) {
                return Err(invalid!("explicit partition contains an empty task"));
            }
            p.clone()
        }
        None => {
            let k = config.classes_per_task;
            if k == 0 || !universe.len().is_multiple_of(k) {
                return Err(invalid!(
                    "{} classes cannot be split into tasks of {k}",
                    universe.len()
                ));
            }
            let mut order = universe.clone();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(config.class_order_seed));
            order.chunks(k).map(<[ClassId]>::to_vec).collect()
        }
    };
    let tasks = groups
        .into_iter()
        .enumerate()
        .map(|(i, classes)| {
            let set: BTreeSet<ClassId> = classes.iter().copied().collect();
            TaskSpec {
                id: i + 1,
                train: take_per_class(corpus.train.iter(), &set, config.train_per_class),
                test: take_per_class(corpus.test.iter(), &set, config.test_per_class),
                classes,
            }
        })
        .collect();
    let seq = TaskSequence {
        tasks,
        class_order_seed: config.class_order_seed,
        reserved_train: take_per_class(corpus.train.iter(), &reserved, config.train_per_class),
    };
    seq.validate()?;
    Ok(seq)
}

impl TaskSequence {
    /// Class sets pairwise disjoint, every sample labelled within its task,
    /// every class represented in its train split.
    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for t in &self.tasks {
            for &c in &t.classes {
                if !seen.insert(c) {
                    return Err(invalid!("class {c} appears in more than one task"));
                }
                if !t.train.iter().any(|s| s.label == c) {
                    return Err(invalid!("task {} has no training samples for class {c}", t.id));
                }
            }
            for s in t.train.iter().chain(&t.test) {
                if !t.classes.contains(&s.label) {
                    return Err(invalid!("sample {} labelled {} outside task {}", s.id, s.label, t.id));
                }
            }
        }
        Ok(())
    }

    pub fn all_classes(&self) -> Vec<ClassId> {
        self.tasks.iter().flat_map(|t| t.classes.iter().copied()).collect()
    }

    pub fn manifest(&self) -> TaskManifest {
        let counts = |samples: &[Sample]| {
            let mut m = BTreeMap::new();
            for s in samples {
                *m.entry(s.label).or_insert(0) += 1;
            }
            m
        };
        TaskManifest {
            class_order_seed: self.class_order_seed,
            tasks: self
                .tasks
                .iter()
                .map(|t| TaskManifestEntry {
                    task_id: t.id,
                    classes: t.classes.clone(),
                    train_counts: counts(&t.train),
                    test_counts: counts(&t.test),
                    train_hash: samples_hash(&t.train),
                    test_hash: samples_hash(&t.test),
                })
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Image;

    fn corpus(classes: u32, per_class: usize) -> Corpus {
        let mk = |offset: u64| {
            (0..per_class)
                .flat_map(|i| {
                    (0..classes).map(move |c| Sample {
                        id: offset + i as u64 * classes as u64 + c as u64,
                        label: c,
                        image: Image::new(1, 1, 1, vec![(c * 7 + i as u32) as u8]).unwrap(),
                    })
                })
                .collect()
        };
        Corpus {
            train: mk(0),
            test: mk(1 << 32),
        }
    }

    #[test]
    fn task_counts_follow_classes_per_task() {
        let c = corpus(100, 1);
        let cfg = SplitConfig {
            classes_per_task: 10,
            ..Default::default()
        };
        assert_eq!(split_tasks(&c, &cfg).unwrap().tasks.len(), 10);
        let c = corpus(8, 2);
        assert_eq!(split_tasks(&c, &SplitConfig::default()).unwrap().tasks.len(), 4);
    }

    #[test]
    fn seeds_permute_the_same_multiset() {
        let c = corpus(10, 3);
        let a = split_tasks(&c, &SplitConfig::default()).unwrap();
        let b = split_tasks(
            &c,
            &SplitConfig {
                class_order_seed: 7,
                ..Default::default()
            },
        )
        .unwrap();
        assert_ne!(a.all_classes(), b.all_classes());
        let mut x = a.all_classes();
        let mut y = b.all_classes();
        x.sort();
        y.sort();
        assert_eq!(x, y);
        assert_eq!(x, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn indivisible_universe_rejected_unless_partitioned() {
        let c = corpus(5, 2);
        assert!(split_tasks(&c, &SplitConfig::default()).is_err());
        let cfg = SplitConfig {
            partition: Some(vec![vec![4, 0], vec![1, 2, 3]]),
            ..Default::default()
        };
        let s = split_tasks(&c, &cfg).unwrap();
        assert_eq!(s.tasks[0].classes, vec![4, 0]);
        let bad = SplitConfig {
            partition: Some(vec![vec![0, 1], vec![1, 2, 3, 4]]),
            ..Default::default()
        };
        assert!(split_tasks(&c, &bad).is_err());
    }

    #[test]
    fn reserved_classes_and_caps() {
        let c = corpus(6, 5);
        let cfg = SplitConfig {
            reserved_classes: vec![0, 5],
            train_per_class: Some(3),
            test_per_class: Some(2),
            ..Default::default()
        };
        let s = split_tasks(&c, &cfg).unwrap();
        assert_eq!(s.tasks.len(), 2);
        assert!(s.all_classes().iter().all(|c| *c != 0 && *c != 5));
        assert_eq!(s.reserved_train.len(), 6);
        for t in &s.tasks {
            assert_eq!(t.train.len(), 6);
            assert_eq!(t.test.len(), 4);
        }
        assert_eq!(s.manifest(), split_tasks(&c, &cfg).unwrap().manifest());
    }
}
