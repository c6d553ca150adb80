//! Experiment configuration read from a flat dotted key-value file.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{ClassId, SplitConfig, SyntheticSpec};
use crate::error::{invalid, Result};
use crate::kv::KvFile;
use crate::model::BackboneSpec;
use crate::numerics::{MultiStepLr, OptimizerKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Dynammo,
    FinetuneBaseline,
    ReplayBaseline,
}

/// Stage order of the merged method; also fixes the head type.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum StageOrder {
    #[serde(rename = "AT-MER-FT-unified")]
    AtMerFtUnified,
    #[serde(rename = "AT-MER-FT-tsh")]
    AtMerFtTsh,
    #[serde(rename = "AT-FT-MER")]
    AtFtMer,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackboneInit {
    /// Pretrain on a corpus disjoint from every task, then freeze.
    PretrainSplit,
    /// Train on the first task's data, then freeze.
    FirstTask,
    /// Random weights, frozen immediately.
    RandomFrozen,
    /// Load backbone weights from `backbone.checkpoint`.
    Checkpoint,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdapterInit {
    WarmStart,
    Scratch,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PretrainSource {
    /// Procedural stroke figures (class ids from 1000).
    Shapes,
    /// The dataset's own `data.reserved_classes`.
    Reserved,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum DataSource {
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
    Synthetic(SyntheticSpec),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub source: DataSource,
    pub image_size: usize,
    pub split: SplitConfig,
    /// `None` means "use the run seed".
    pub class_order_seed: Option<u64>,
    pub augment: bool,
}

/// Optimisation settings of one training stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub milestones: Vec<usize>,
    pub gamma: f64,
}

impl StageConfig {
    pub fn schedule(&self) -> MultiStepLr {
        MultiStepLr {
            base: self.lr,
            milestones: self.milestones.clone(),
            gamma: self.gamma,
        }
    }

    fn sgd(epochs: usize, lr: f64) -> Self {
        Self {
            epochs,
            batch_size: 32,
            optimizer: OptimizerKind::SgdMomentum {
                momentum: 0.9,
                weight_decay: 5e-4,
            },
            lr,
            milestones: Vec::new(),
            gamma: 0.1,
        }
    }

    fn validate(&self, name: &str) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(invalid!("optimizer.{name}: epochs and batch_size must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.gamma > 0.0) {
            return Err(invalid!("optimizer.{name}: lr and gamma must be positive"));
        }
        if let Some(m) = self.milestones.iter().find(|&&m| m >= self.epochs) {
            return Err(invalid!(
                "optimizer.{name}: milestone {m} is not below the epoch count {}",
                self.epochs
            ));
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(invalid!("optimizer.{name}: milestones must be strictly increasing"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub source: PretrainSource,
    pub classes: usize,
    pub per_class: usize,
    pub seed: u64,
    pub stage: StageConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub method: Method,
    pub order: StageOrder,
    pub seed: u64,
    pub backbone: BackboneSpec,
    pub backbone_init: BackboneInit,
    pub backbone_checkpoint: Option<PathBuf>,
    pub pretrain: PretrainConfig,
    pub adapter_ratio: usize,
    pub adapter_init: AdapterInit,
    pub adapter: StageConfig,
    pub head: StageConfig,
    pub baseline: StageConfig,
    pub replay_budget: usize,
    pub replay_ratio: f64,
    /// Test-time batch size; does not affect results.
    pub eval_batch_size: usize,
}

impl Default for ExperimentConfig {
    /// Desk-scale defaults on the bundled digit corpus.
    fn default() -> Self {
        let dir = PathBuf::from("data/digits");
        Self {
            data: DataConfig {
                source: DataSource::Idx {
                    train_images: dir.join("train-images-idx3-ubyte"),
                    train_labels: dir.join("train-labels-idx1-ubyte"),
                    test_images: dir.join("test-images-idx3-ubyte"),
                    test_labels: dir.join("test-labels-idx1-ubyte"),
                },
                image_size: 32,
                split: SplitConfig::default(),
                class_order_seed: None,
                augment: true,
            },
            method: Method::Dynammo,
            order: StageOrder::AtMerFtUnified,
            seed: 0,
            backbone: BackboneSpec::default(),
            backbone_init: BackboneInit::PretrainSplit,
            backbone_checkpoint: None,
            pretrain: PretrainConfig {
                source: PretrainSource::Shapes,
                classes: 20,
                per_class: 100,
                seed: 0,
                stage: StageConfig::sgd(10, 0.05),
            },
            adapter_ratio: 4,
            adapter_init: AdapterInit::WarmStart,
            adapter: StageConfig::sgd(15, 0.01),
            head: StageConfig {
                epochs: 30,
                batch_size: 32,
                optimizer: OptimizerKind::adam(),
                lr: 1e-3,
                milestones: vec![16, 24],
                gamma: 0.1,
            },
            baseline: StageConfig::sgd(15, 0.01),
            replay_budget: 200,
            replay_ratio: 0.25,
            eval_batch_size: 100,
        }
    }
}

fn parse_enum<T: for<'de> Deserialize<'de>>(kv: &mut KvFile, key: &str) -> Result<Option<T>> {
    match kv.take_str(key) {
        None => Ok(None),
        Some((v, line)) => serde_json::from_value(serde_json::Value::String(v.clone()))
            .map(Some)
            .map_err(|_| kv.error(line, format!("`{key}`: unknown value `{v}`"))),
    }
}

fn enum_name<T: Serialize>(v: &T) -> String {
    match serde_json::to_value(v) {
        Ok(serde_json::Value::String(s)) => s,
        _ => unreachable!("unit enum serialises to a string"),
    }
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = PathBuf::from(p);
    if p.is_absolute() {
        p
    } else {
        base.join(p)
    }
}

fn read_stage(kv: &mut KvFile, name: &str, d: StageConfig) -> Result<StageConfig> {
    let key = |k: &str| format!("optimizer.{name}.{k}");
    let kind: String = kv.take_or(&key("kind"), match d.optimizer {
        OptimizerKind::SgdMomentum { .. } => "sgd".to_string(),
        OptimizerKind::Adam { .. } => "adam".to_string(),
    })?;
    let optimizer = match kind.as_str() {
        "sgd" => {
            let (m0, wd0) = match d.optimizer {
                OptimizerKind::SgdMomentum { momentum, weight_decay } => (momentum, weight_decay),
                _ => (0.9, 5e-4),
            };
            OptimizerKind::SgdMomentum {
                momentum: kv.take_or(&key("momentum"), m0)?,
                weight_decay: kv.take_or(&key("weight_decay"), wd0)?,
            }
        }
        "adam" => {
            let a = OptimizerKind::adam();
            let OptimizerKind::Adam { beta1, beta2, epsilon } = (match d.optimizer {
                o @ OptimizerKind::Adam { .. } => o,
                _ => a,
            }) else {
                unreachable!()
            };
            OptimizerKind::Adam {
                beta1: kv.take_or(&key("beta1"), beta1)?,
                beta2: kv.take_or(&key("beta2"), beta2)?,
                epsilon: kv.take_or(&key("epsilon"), epsilon)?,
            }
        }
        other => return Err(invalid!("`{}`: unknown optimizer `{other}` (sgd or adam)", key("kind"))),
    };
    let s = StageConfig {
        epochs: kv.take_or(&key("epochs"), d.epochs)?,
        batch_size: kv.take_or(&key("batch_size"), d.batch_size)?,
        optimizer,
        lr: kv.take_or(&key("lr"), d.lr)?,
        milestones: kv.take_list(&key("milestones"))?.unwrap_or(d.milestones),
        gamma: kv.take_or(&key("gamma"), d.gamma)?,
    };
    s.validate(name)?;
    Ok(s)
}

fn write_stage(out: &mut String, name: &str, s: &StageConfig) {
    let p = format!("optimizer.{name}");
    match s.optimizer {
        OptimizerKind::SgdMomentum { momentum, weight_decay } => {
            let _ = writeln!(out, "{p}.kind = sgd\n{p}.momentum = {momentum}\n{p}.weight_decay = {weight_decay}");
        }
        OptimizerKind::Adam { beta1, beta2, epsilon } => {
            let _ = writeln!(out, "{p}.kind = adam\n{p}.beta1 = {beta1}\n{p}.beta2 = {beta2}\n{p}.epsilon = {epsilon}");
        }
    }
    let _ = writeln!(
        out,
        "{p}.epochs = {}\n{p}.batch_size = {}\n{p}.lr = {}\n{p}.milestones = {}\n{p}.gamma = {}",
        s.epochs,
        s.batch_size,
        s.lr,
        join(&s.milestones),
        s.gamma
    );
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    /// Reads a config file. Relative data paths resolve against the file's directory.
    pub fn read(path: &Path) -> Result<Self> {
        let kv = KvFile::read(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_kv(kv, base)
    }

    pub fn parse(text: &str, origin: &Path, base: &Path) -> Result<Self> {
        Self::from_kv(KvFile::parse(text, origin)?, base)
    }

    fn from_kv(mut kv: KvFile, base: &Path) -> Result<Self> {
        let d = Self::default();
        let source: String = kv.take_or("data.source", "idx".to_string())?;
        let data_source = match source.as_str() {
            "idx" => {
                let dir = kv.take_str("data.dir").map(|(v, _)| resolve(base, &v));
                let mut file = |key: &str, name: &str| -> Result<PathBuf> {
                    match (kv.take_str(key), &dir) {
                        (Some((v, _)), _) => Ok(resolve(base, &v)),
                        (None, Some(dir)) => Ok(dir.join(name)),
                        (None, None) => Err(invalid!("idx source needs `data.dir` or `{key}`")),
                    }
                };
                DataSource::Idx {
                    train_images: file("data.train_images", "train-images-idx3-ubyte")?,
                    train_labels: file("data.train_labels", "train-labels-idx1-ubyte")?,
                    test_images: file("data.test_images", "test-images-idx3-ubyte")?,
                    test_labels: file("data.test_labels", "test-labels-idx1-ubyte")?,
                }
            }
            "synthetic" => DataSource::Synthetic(SyntheticSpec::from_kv(&mut kv, "data.synthetic.")?),
            other => return Err(invalid!("`data.source`: unknown value `{other}` (idx or synthetic)")),
        };
        let partition = match kv.take_str("data.partition") {
            None => None,
            Some((v, line)) if !v.is_empty() => Some(
                v.split(';')
                    .map(|group| {
                        group
                            .split(',')
                            .map(|c| c.trim().parse::<ClassId>())
                            .collect::<std::result::Result<Vec<_>, _>>()
                    })
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|e| kv.error(line, format!("`data.partition`: {e}")))?,
            ),
            Some(_) => None,
        };
        let split = SplitConfig {
            classes_per_task: kv.take_or("data.classes_per_task", d.data.split.classes_per_task)?,
            partition,
            class_order_seed: 0,
            reserved_classes: kv.take_list("data.reserved_classes")?.unwrap_or_default(),
            train_per_class: kv.take("data.train_per_class")?,
            test_per_class: kv.take("data.test_per_class")?,
        };
        let data = DataConfig {
            source: data_source,
            image_size: kv.take_or("data.image_size", d.data.image_size)?,
            split,
            class_order_seed: kv.take("data.class_order_seed")?,
            augment: kv.take_or("data.augment", d.data.augment)?,
        };
        let backbone = BackboneSpec {
            in_channels: kv.take_or("backbone.in_channels", d.backbone.in_channels)?,
            image_size: data.image_size,
            channels: kv.take_list("backbone.channels")?.unwrap_or(d.backbone.channels.clone()),
            kernel: kv.take_or("backbone.kernel", d.backbone.kernel)?,
        };
        let cfg = Self {
            method: parse_enum(&mut kv, "method")?.unwrap_or(d.method),
            order: parse_enum(&mut kv, "order")?.unwrap_or(d.order),
            seed: kv.take_or("seed", d.seed)?,
            backbone,
            backbone_init: parse_enum(&mut kv, "backbone.init")?.unwrap_or(d.backbone_init),
            backbone_checkpoint: kv.take_str("backbone.checkpoint").map(|(v, _)| resolve(base, &v)),
            pretrain: PretrainConfig {
                source: parse_enum(&mut kv, "pretrain.source")?.unwrap_or(d.pretrain.source),
                classes: kv.take_or("pretrain.classes", d.pretrain.classes)?,
                per_class: kv.take_or("pretrain.per_class", d.pretrain.per_class)?,
                seed: kv.take_or("pretrain.seed", d.pretrain.seed)?,
                stage: read_stage(&mut kv, "pretrain", d.pretrain.stage)?,
            },
            adapter_ratio: kv.take_or("adapter.ratio", d.adapter_ratio)?,
            adapter_init: parse_enum(&mut kv, "adapter.init")?.unwrap_or(d.adapter_init),
            adapter: read_stage(&mut kv, "adapter", d.adapter)?,
            head: read_stage(&mut kv, "head", d.head)?,
            baseline: read_stage(&mut kv, "baseline", d.baseline)?,
            replay_budget: kv.take_or("replay.budget", d.replay_budget)?,
            replay_ratio: kv.take_or("replay.ratio", d.replay_ratio)?,
            eval_batch_size: kv.take_or("eval.batch_size", d.eval_batch_size)?,
            data,
        };
        kv.finish()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.data.image_size != self.backbone.image_size {
            return Err(invalid!("data.image_size and backbone image size differ"));
        }
        if self.adapter_ratio == 0 || self.backbone.channels.iter().any(|c| c % self.adapter_ratio != 0) {
            return Err(invalid!(
                "adapter.ratio {} must divide every backbone channel count {:?}",
                self.adapter_ratio,
                self.backbone.channels
            ));
        }
        if self.replay_budget == 0 {
            return Err(invalid!("replay.budget must be positive"));
        }
        if !(0.0..1.0).contains(&self.replay_ratio) {
            return Err(invalid!("replay.ratio must lie in [0, 1), got {}", self.replay_ratio));
        }
        if self.eval_batch_size == 0 {
            return Err(invalid!("eval.batch_size must be positive"));
        }
        if self.backbone_init == BackboneInit::Checkpoint && self.backbone_checkpoint.is_none() {
            return Err(invalid!("backbone.init = checkpoint needs backbone.checkpoint"));
        }
        if self.backbone_init == BackboneInit::PretrainSplit
            && self.pretrain.source == PretrainSource::Reserved
            && self.data.split.reserved_classes.is_empty()
        {
            return Err(invalid!("pretrain.source = reserved needs data.reserved_classes"));
        }
        Ok(())
    }

    /// Class-order seed actually used for the split.
    pub fn split_config(&self) -> SplitConfig {
        SplitConfig {
            class_order_seed: self.data.class_order_seed.unwrap_or(self.seed),
            ..self.data.split.clone()
        }
    }

    /// Canonical key-value rendering; parses back to an equal config.
    pub fn to_kv_string(&self) -> String {
        let mut o = String::new();
        let _ = writeln!(o, "method = {}\norder = {}\nseed = {}", enum_name(&self.method), enum_name(&self.order), self.seed);
        match &self.data.source {
            DataSource::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
            } => {
                let _ = writeln!(
                    o,
                    "data.source = idx\ndata.train_images = {}\ndata.train_labels = {}\ndata.test_images = {}\ndata.test_labels = {}",
                    train_images.display(),
                    train_labels.display(),
                    test_images.display(),
                    test_labels.display()
                );
            }
            DataSource::Synthetic(s) => {
                let cells = match s.patterns {
                    crate::data::PatternSource::Grid { cells } => cells,
                    crate::data::PatternSource::Explicit(_) => 0,
                };
                let p = "data.synthetic";
                let _ = writeln!(
                    o,
                    "data.source = synthetic\n{p}.classes = {}\n{p}.per_class = {}\n{p}.test_per_class = {}\n{p}.image_size = {}\n{p}.noise = {}\n{p}.seed = {}\n{p}.cells = {cells}",
                    s.classes, s.per_class, s.test_per_class, s.image_size, s.noise, s.seed
                );
            }
        }
        let sp = &self.data.split;
        let _ = writeln!(o, "data.image_size = {}\ndata.classes_per_task = {}", self.data.image_size, sp.classes_per_task);
        if let Some(p) = &sp.partition {
            let groups: Vec<String> = p.iter().map(|g| join(g)).collect();
            let _ = writeln!(o, "data.partition = {}", groups.join(";"));
        }
        if let Some(s) = self.data.class_order_seed {
            let _ = writeln!(o, "data.class_order_seed = {s}");
        }
        let _ = writeln!(o, "data.reserved_classes = {}", join(&sp.reserved_classes));
        if let Some(n) = sp.train_per_class {
            let _ = writeln!(o, "data.train_per_class = {n}");
        }
        if let Some(n) = sp.test_per_class {
            let _ = writeln!(o, "data.test_per_class = {n}");
        }
        let _ = writeln!(o, "data.augment = {}", self.data.augment);
        let _ = writeln!(
            o,
            "backbone.in_channels = {}\nbackbone.channels = {}\nbackbone.kernel = {}\nbackbone.init = {}",
            self.backbone.in_channels,
            join(&self.backbone.channels),
            self.backbone.kernel,
            enum_name(&self.backbone_init)
        );
        if let Some(p) = &self.backbone_checkpoint {
            let _ = writeln!(o, "backbone.checkpoint = {}", p.display());
        }
        let _ = writeln!(
            o,
            "pretrain.source = {}\npretrain.classes = {}\npretrain.per_class = {}\npretrain.seed = {}",
            enum_name(&self.pretrain.source),
            self.pretrain.classes,
            self.pretrain.per_class,
            self.pretrain.seed
        );
        write_stage(&mut o, "pretrain", &self.pretrain.stage);
        let _ = writeln!(o, "adapter.ratio = {}\nadapter.init = {}", self.adapter_ratio, enum_name(&self.adapter_init));
        write_stage(&mut o, "adapter", &self.adapter);
        write_stage(&mut o, "head", &self.head);
        write_stage(&mut o, "baseline", &self.baseline);
        let _ = writeln!(
            o,
            "replay.budget = {}\nreplay.ratio = {}\neval.batch_size = {}",
            self.replay_budget, self.replay_ratio, self.eval_batch_size
        );
        o
    }
}
