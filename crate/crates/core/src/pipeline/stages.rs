//! Training stages: backbone preparation, adapter tuning, merging, head
//! fine-tuning, the two baselines and evaluation.

use std::collections::{BTreeSet, HashMap};
use std::sync::{Arc, Mutex, OnceLock};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{AdapterInit, BackboneInit, ExperimentConfig, PretrainSource};
use super::train::{flip_coins, stream, train_loop, FeatureCache, StageStats};
use super::PreparedData;
use crate::data::{batch_tensor, generate_shapes, ClassId, PreparedSample};
use crate::error::{invalid, Result};
use crate::merging::MergeState;
use crate::model::{features, AdapterSet, Backbone, Checkpoint, TaskHead, UnifiedHead};
use crate::numerics::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::replay::{DrawMode, ReplayBuffer};

/// Named backbone tensors.
pub type BackboneWeights = Vec<(String, Tensor<f32>)>;

/// Parameters and modules of one run.
pub struct Learner {
    pub store: ParamStore<f32>,
    pub backbone: Backbone,
    pub adapter_ratio: usize,
    pub merge: MergeState<f32>,
    pub merged: Option<AdapterSet>,
    pub unified: Option<UnifiedHead>,
    pub task_heads: Vec<TaskHead>,
    pub task_adapters: Vec<AdapterSet>,
}

impl Learner {
    pub fn new(cfg: &ExperimentConfig, weights: &BackboneWeights) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut rng = stream(cfg.pretrain.seed, "backbone-init", 0);
        let backbone = Backbone::new(&mut store, cfg.backbone.clone(), &mut rng)?;
        Checkpoint {
            tensors: weights.clone(),
            ..Default::default()
        }
        .apply(&mut store)?;
        Ok(Self {
            store,
            backbone,
            adapter_ratio: cfg.adapter_ratio,
            merge: MergeState::new(),
            merged: None,
            unified: None,
            task_heads: Vec::new(),
            task_adapters: Vec::new(),
        })
    }

    pub fn backbone_frozen(&self) -> bool {
        self.backbone.params().iter().all(|&p| self.store.is_frozen(p))
    }

    pub fn backbone_checksum(&self) -> String {
        self.store.checksum(&self.backbone.params())
    }

    pub fn merged_checksum(&self) -> Option<String> {
        self.merged.as_ref().map(|m| self.store.checksum(&m.params()))
    }

    /// Every parameter inference needs, in a stable order.
    pub fn inference_params(&self) -> Vec<ParamId> {
        let mut ids = self.backbone.params();
        if let Some(m) = &self.merged {
            ids.extend(m.params());
        }
        if let Some(h) = &self.unified {
            ids.extend(h.params());
        }
        for h in &self.task_heads {
            ids.extend(h.params());
        }
        ids
    }

    fn backbone_weights(&self) -> BackboneWeights {
        self.backbone
            .params()
            .into_iter()
            .map(|id| (self.store.name(id).to_owned(), self.store.value(id).clone()))
            .collect()
    }
}

fn pretrain_cache() -> &'static Mutex<HashMap<String, Arc<BackboneWeights>>> {
    static CACHE: OnceLock<Mutex<HashMap<String, Arc<BackboneWeights>>>> = OnceLock::new();
    CACHE.get_or_init(Default::default)
}

/// Trains a fresh backbone plus a throwaway linear head on `samples`.
fn supervised_backbone(
    cfg: &ExperimentConfig,
    samples: &[&PreparedSample],
    stage_name: &str,
) -> Result<(BackboneWeights, StageStats)> {
    let mut learner = Learner::new(cfg, &Vec::new())?;
    let classes: Vec<ClassId> = samples.iter().map(|s| s.label).collect::<BTreeSet<_>>().into_iter().collect();
    if classes.len() < 2 {
        return Err(invalid!("{stage_name} needs at least two classes, got {}", classes.len()));
    }
    let head = UnifiedHead::new(&mut learner.store, "pretrain.head", learner.backbone.feature_dim(), &classes)?;
    let labels: Vec<usize> = samples.iter().map(|s| head.slot_of(s.label).expect("class in head")).collect();
    let mut params = learner.backbone.params();
    params.extend(head.params());
    let mut stats = StageStats {
        task: 0,
        stage: stage_name.into(),
        epochs: 0,
        steps: 0,
        samples: 0,
    };
    let mut rng = stream(cfg.pretrain.seed, stage_name, 0);
    let stage = &cfg.pretrain.stage;
    let Learner { store, backbone, .. } = &mut learner;
    train_loop(store, &params, stage, samples.len(), stage.batch_size, &mut rng, &mut stats, |g, store, idx, rng| {
        let batch: Vec<&PreparedSample> = idx.iter().map(|&i| samples[i]).collect();
        let flips = flip_coins(idx.len(), cfg.data.augment, rng);
        let x = g.input(batch_tensor(&batch, Some(&flips))?);
        let f = features(g, store, backbone, None, x)?;
        let y = head.forward(g, store, f)?;
        let l: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        g.cross_entropy(y, &l)
    })?;
    Ok((learner.backbone_weights(), stats))
}

/// Backbone weights for the configured initialisation mode. Pretraining on a
/// disjoint corpus is cached per process, keyed by everything it depends on.
pub fn initial_backbone(cfg: &ExperimentConfig, data: &PreparedData) -> Result<(Arc<BackboneWeights>, Option<StageStats>)> {
    match cfg.backbone_init {
        BackboneInit::RandomFrozen => {
            let l = Learner::new(cfg, &Vec::new())?;
            Ok((Arc::new(l.backbone_weights()), None))
        }
        BackboneInit::Checkpoint => {
            let path = cfg.backbone_checkpoint.as_ref().expect("validated");
            let ck = Checkpoint::load(path)?;
            let mut l = Learner::new(cfg, &Vec::new())?;
            let names: BTreeSet<String> = l.backbone.params().iter().map(|&p| l.store.name(p).to_owned()).collect();
            let tensors = ck.tensors.into_iter().filter(|(n, _)| names.contains(n)).collect::<Vec<_>>();
            if tensors.len() != names.len() {
                return Err(invalid!("{} lacks some backbone tensors", path.display()));
            }
            Checkpoint { tensors, ..Default::default() }.apply(&mut l.store)?;
            Ok((Arc::new(l.backbone_weights()), None))
        }
        BackboneInit::FirstTask => {
            let first = data.tasks.first().ok_or_else(|| invalid!("no tasks to pretrain on"))?;
            let samples: Vec<&PreparedSample> = first.train.iter().collect();
            let (w, s) = supervised_backbone(cfg, &samples, "pretrain-first-task")?;
            Ok((Arc::new(w), Some(s)))
        }
        BackboneInit::PretrainSplit => {
            let mut key = serde_json::to_string(&(&cfg.pretrain, &cfg.backbone, cfg.data.augment))?;
            if cfg.pretrain.source == PretrainSource::Reserved {
                key.push_str(&serde_json::to_string(&(&cfg.data.source, &cfg.data.split.reserved_classes, cfg.data.split.train_per_class))?);
            }
            if let Some(w) = pretrain_cache().lock().expect("cache lock").get(&key) {
                return Ok((Arc::clone(w), None));
            }
            let owned: Vec<PreparedSample>;
            let samples: Vec<&PreparedSample> = match cfg.pretrain.source {
                PretrainSource::Reserved => data.reserved.iter().collect(),
                PretrainSource::Shapes => {
                    let corpus = generate_shapes(
                        cfg.pretrain.classes,
                        cfg.pretrain.per_class,
                        cfg.data.image_size,
                        cfg.pretrain.seed,
                    )?;
                    owned = corpus
                        .train
                        .iter()
                        .map(|s| super::prepare_sample(s, cfg))
                        .collect::<Result<_>>()?;
                    owned.iter().collect()
                }
            };
            let (w, s) = supervised_backbone(cfg, &samples, "pretrain")?;
            let w = Arc::new(w);
            pretrain_cache().lock().expect("cache lock").insert(key, Arc::clone(&w));
            Ok((w, Some(s)))
        }
    }
}

/// Samples looked up by id (every train sample of the run).
pub struct SampleBank<'a> {
    by_id: HashMap<u64, &'a PreparedSample>,
}

impl<'a> SampleBank<'a> {
    pub fn new(data: &'a PreparedData) -> Self {
        let by_id = data.tasks.iter().flat_map(|t| t.train.iter()).map(|s| (s.id, s)).collect();
        Self { by_id }
    }

    pub fn get(&self, id: u64) -> Result<&'a PreparedSample> {
        self.by_id
            .get(&id)
            .copied()
            .ok_or_else(|| invalid!("sample {id} is not part of this run"))
    }
}

/// Trains a fresh adapter set and task head on one task. Replay samples fill
/// `floor(B·ρ)` slots of every batch with the "other" label.
#[allow(clippy::too_many_arguments)]
pub fn run_adapter_tuning(
    learner: &mut Learner,
    task_id: usize,
    classes: &[ClassId],
    train: &[PreparedSample],
    buffer: &ReplayBuffer,
    bank: &SampleBank,
    cfg: &ExperimentConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(AdapterSet, TaskHead, StageStats)> {
    if !learner.backbone_frozen() {
        return Err(invalid!("adapter tuning requires a frozen backbone"));
    }
    let Learner {
        store,
        backbone,
        adapter_ratio,
        merge,
        ..
    } = learner;
    let adapters = AdapterSet::new(store, &format!("task{task_id}.adapter"), task_id, backbone, *adapter_ratio, rng)?;
    if let (AdapterInit::WarmStart, Some(w)) = (cfg.adapter_init, merge.merged()) {
        adapters.load(store, w)?;
    }
    let head = TaskHead::new(store, &format!("task{task_id}.head"), task_id, backbone.feature_dim(), classes)?;
    let mut params = adapters.params();
    params.extend(head.params());
    let b = cfg.adapter.batch_size;
    let replay_slots = if buffer.is_empty() {
        0
    } else {
        ((b as f64 * cfg.replay_ratio).floor() as usize).min(b - 1)
    };
    let labels: Vec<usize> = train.iter().map(|s| head.local_label(s.label)).collect();
    let mut stats = StageStats {
        task: task_id,
        stage: "adapter-tuning".into(),
        epochs: 0,
        steps: 0,
        samples: 0,
    };
    train_loop(store, &params, &cfg.adapter, train.len(), b - replay_slots, rng, &mut stats, |g, store, idx, rng| {
        let mut batch: Vec<&PreparedSample> = idx.iter().map(|&i| &train[i]).collect();
        let mut l: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        for (s, other) in buffer.draw_other_samples(replay_slots, head.other_index(), DrawMode::WithReplacement, rng) {
            batch.push(bank.get(s.id)?);
            l.push(other);
        }
        let flips = flip_coins(batch.len(), cfg.data.augment, rng);
        let x = g.input(batch_tensor(&batch, Some(&flips))?);
        let f = features(g, store, backbone, Some(&adapters), x)?;
        let y = head.forward(g, store, f)?;
        g.cross_entropy(y, &l)
    })?;
    adapters.freeze(store);
    Ok((adapters, head, stats))
}

/// Adds `w_t` to the running mean and loads the result into the frozen merged set.
pub fn run_merge_stage(learner: &mut Learner, adapters: &AdapterSet) -> Result<()> {
    let Learner {
        store,
        backbone,
        adapter_ratio,
        merge,
        merged,
        ..
    } = learner;
    merge.merge_incremental(adapters.weights(store))?;
    if merged.is_none() {
        // placeholder values; overwritten by the mean right away
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let set = AdapterSet::new(store, "merged.adapter", 0, backbone, *adapter_ratio, &mut rng)?;
        *merged = Some(set);
    }
    merge.freeze_merged(store, merged.as_ref().expect("just created"))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadMode {
    Unified,
    TaskSpecific,
}

/// Which adapters produce the features heads are fine-tuned on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureSource {
    Merged,
    /// Unmerged adapters of the given 0-based task.
    Task(usize),
}

/// Balanced fine-tuning of the unified head (expanded by `new_classes`) or of
/// all task heads jointly, on features from frozen adapters.
#[allow(clippy::too_many_arguments)]
pub fn run_head_finetune(
    learner: &mut Learner,
    task_id: usize,
    mode: HeadMode,
    source: FeatureSource,
    balanced: &[&PreparedSample],
    seen: &[ClassId],
    new_classes: &[ClassId],
    cfg: &ExperimentConfig,
    rng: &mut ChaCha8Rng,
) -> Result<StageStats> {
    let present: BTreeSet<ClassId> = balanced.iter().map(|s| s.label).collect();
    if let Some(c) = seen.iter().find(|c| !present.contains(c)) {
        return Err(invalid!("balanced set has no samples of class {c}"));
    }
    if let Some(s) = balanced.iter().find(|s| !seen.contains(&s.label)) {
        return Err(invalid!("balanced set holds unseen class {}", s.label));
    }
    let adapters = match source {
        FeatureSource::Merged => learner.merged.as_ref().ok_or_else(|| invalid!("no merged adapters yet"))?,
        FeatureSource::Task(i) => learner
            .task_adapters
            .get(i)
            .ok_or_else(|| invalid!("no adapters for task {}", i + 1))?,
    };
    let cache = FeatureCache::build(
        &learner.store,
        &learner.backbone,
        Some(adapters),
        balanced,
        cfg.data.augment,
        cfg.eval_batch_size,
    )?;
    let mut stats = StageStats {
        task: task_id,
        stage: match mode {
            HeadMode::Unified => "head-finetune-unified",
            HeadMode::TaskSpecific => "head-finetune-task-specific",
        }
        .into(),
        epochs: 0,
        steps: 0,
        samples: 0,
    };
    let stage = &cfg.head;
    let Learner {
        store,
        unified,
        task_heads,
        backbone,
        ..
    } = learner;
    match mode {
        HeadMode::Unified => {
            match unified {
                Some(h) => h.expand(store, new_classes)?,
                None => *unified = Some(UnifiedHead::new(store, "unified.head", backbone.feature_dim(), new_classes)?),
            }
            let head = unified.as_ref().expect("created above");
            let labels: Vec<usize> = balanced
                .iter()
                .map(|s| head.slot_of(s.label).expect("seen class"))
                .collect();
            let params = head.params().to_vec();
            train_loop(store, &params, stage, balanced.len(), stage.batch_size, rng, &mut stats, |g, store, idx, rng| {
                let flips = flip_coins(idx.len(), cfg.data.augment, rng);
                let f = g.input(cache.gather(idx, &flips)?);
                let y = head.forward(g, store, f)?;
                let l: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
                g.cross_entropy(y, &l)
            })?;
        }
        HeadMode::TaskSpecific => {
            let params: Vec<ParamId> = task_heads.iter().flat_map(|h| h.params()).collect();
            let heads = &*task_heads;
            let scale = 1.0 / heads.len() as f32;
            train_loop(store, &params, stage, balanced.len(), stage.batch_size, rng, &mut stats, |g, store, idx, rng| {
                let flips = flip_coins(idx.len(), cfg.data.augment, rng);
                let f = g.input(cache.gather(idx, &flips)?);
                let mut total: Option<Var> = None;
                for h in heads {
                    let y = h.forward(g, store, f)?;
                    let l: Vec<usize> = idx.iter().map(|&i| h.local_label(balanced[i].label)).collect();
                    let ce = g.cross_entropy(y, &l)?;
                    total = Some(match total {
                        None => ce,
                        Some(t) => g.add(t, ce)?,
                    });
                }
                Ok(g.scale(total.expect("at least one head"), scale))
            })?;
        }
    }
    Ok(stats)
}

/// Sequential fine-tuning of backbone and unified head; with `replay` the
/// buffer contents join the task data.
#[allow(clippy::too_many_arguments)]
pub fn run_baseline_task(
    learner: &mut Learner,
    task_id: usize,
    classes: &[ClassId],
    train: &[PreparedSample],
    replay: Option<(&ReplayBuffer, &SampleBank)>,
    cfg: &ExperimentConfig,
    rng: &mut ChaCha8Rng,
) -> Result<StageStats> {
    let Learner {
        store,
        backbone,
        unified,
        ..
    } = learner;
    match unified {
        Some(h) => h.expand(store, classes)?,
        None => *unified = Some(UnifiedHead::new(store, "unified.head", backbone.feature_dim(), classes)?),
    }
    let head = unified.as_ref().expect("created above");
    let mut items: Vec<&PreparedSample> = train.iter().collect();
    if let Some((buffer, bank)) = replay {
        for s in buffer.samples() {
            items.push(bank.get(s.id)?);
        }
    }
    let labels: Vec<usize> = items.iter().map(|s| head.slot_of(s.label).expect("seen class")).collect();
    let mut params = backbone.params();
    params.extend(head.params());
    let mut stats = StageStats {
        task: task_id,
        stage: if replay.is_some() { "replay-baseline" } else { "finetune-baseline" }.into(),
        epochs: 0,
        steps: 0,
        samples: 0,
    };
    let stage = &cfg.baseline;
    train_loop(store, &params, stage, items.len(), stage.batch_size, rng, &mut stats, |g, store, idx, rng| {
        let batch: Vec<&PreparedSample> = idx.iter().map(|&i| items[i]).collect();
        let flips = flip_coins(batch.len(), cfg.data.augment, rng);
        let x = g.input(batch_tensor(&batch, Some(&flips))?);
        let f = features(g, store, backbone, None, x)?;
        let y = head.forward(g, store, f)?;
        let l: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        g.cross_entropy(y, &l)
    })?;
    Ok(stats)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalMode {
    /// Merged adapters, unified head.
    MergedUnified,
    /// Merged adapters, concatenated task heads without "other" outputs.
    MergedTaskHeads,
    /// Plain backbone, unified head (baselines).
    PlainUnified,
}

pub struct Predictions {
    /// Predicted global class per test sample, in input order.
    pub classes: Vec<ClassId>,
    /// Distinct block-execution counts observed per forward call.
    pub block_executions: Vec<usize>,
}

/// Argmax predictions over all seen classes. `seen` fixes the output order
/// for the task-head concatenation.
pub fn predict(
    learner: &Learner,
    mode: EvalMode,
    samples: &[&PreparedSample],
    seen: &[ClassId],
    batch: usize,
) -> Result<Predictions> {
    let mut classes = Vec::with_capacity(samples.len());
    let mut counts = BTreeSet::new();
    let store = &learner.store;
    for chunk in samples.chunks(batch.max(1)) {
        learner.backbone.reset_block_executions();
        let mut g = Graph::new();
        let x = g.input(batch_tensor(chunk, None)?);
        let (logits, slots): (Tensor<f32>, Vec<ClassId>) = match mode {
            EvalMode::MergedUnified | EvalMode::PlainUnified => {
                let head = learner.unified.as_ref().ok_or_else(|| invalid!("no unified head"))?;
                let y = if mode == EvalMode::MergedUnified {
                    let merged = learner.merged.as_ref().ok_or_else(|| invalid!("no merged adapters"))?;
                    crate::model::forward_single_pass(&mut g, store, &learner.backbone, merged, head, x)?
                } else {
                    let f = features(&mut g, store, &learner.backbone, None, x)?;
                    head.forward(&mut g, store, f)?
                };
                (g.value(y).clone(), head.classes().to_vec())
            }
            EvalMode::MergedTaskHeads => {
                let merged = learner.merged.as_ref().ok_or_else(|| invalid!("no merged adapters"))?;
                let f = features(&mut g, store, &learner.backbone, Some(merged), x)?;
                let n = chunk.len();
                let mut cols: Vec<Vec<f32>> = vec![Vec::new(); n];
                let mut slots = Vec::new();
                for h in &learner.task_heads {
                    let y = h.forward(&mut g, store, f)?;
                    let w = h.width();
                    for (r, row) in g.value(y).data().chunks(w).enumerate() {
                        cols[r].extend_from_slice(&row[..w - 1]);
                    }
                    slots.extend_from_slice(&h.classes);
                }
                let k = slots.len();
                (Tensor::new(vec![n, k], cols.concat())?, slots)
            }
        };
        counts.insert(learner.backbone.block_executions());
        if slots != seen {
            return Err(invalid!("classifier covers {slots:?}, expected {seen:?}"));
        }
        for p in crate::metrics::argmax_rows(&logits)? {
            classes.push(slots[p]);
        }
    }
    Ok(Predictions {
        classes,
        block_executions: counts.into_iter().collect(),
    })
}
