//! End-to-end class-incremental runs: data preparation, the per-task stage
//! sequence, evaluation, artifacts and the run report.

mod config;
mod stages;
mod train;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use config::{
    AdapterInit, BackboneInit, DataConfig, DataSource, ExperimentConfig, Method, PretrainConfig, PretrainSource,
    StageConfig, StageOrder,
};
pub use stages::{
    initial_backbone, predict, run_adapter_tuning, run_baseline_task, run_head_finetune, run_merge_stage,
    BackboneWeights, EvalMode, FeatureSource, HeadMode, Learner, Predictions, SampleBank,
};
pub use train::{extract_features, flip_coins, stream, sub_seed, train_loop, FeatureCache, StageStats};

use crate::data::{generate_synthetic, ClassId, Corpus, Image, PreparedSample, Sample, TaskManifest};
use crate::error::{invalid, Error, Result};
use crate::metrics::{backbone_architecture, dynamic_inference_cost, flops_of, FlopsReport, InferenceCost};
use crate::metrics::{accuracy_percent, confusion_matrix, write_json, AccuracyRecord, ConfusionMatrix};
use crate::model::{AdapterSet, Backbone, Checkpoint, TaskHead, UnifiedHead};
use crate::numerics::ParamStore;
use crate::replay::ReplayBuffer;

/// One task with samples ready for the network.
pub struct PreparedTask {
    pub id: usize,
    pub classes: Vec<ClassId>,
    pub raw_train: Vec<Sample>,
    pub train: Vec<PreparedSample>,
    pub test: Vec<PreparedSample>,
}

pub struct PreparedData {
    pub manifest: TaskManifest,
    pub tasks: Vec<PreparedTask>,
    pub reserved: Vec<PreparedSample>,
}

/// Replicates single-channel images when the backbone expects more channels.
fn match_channels(image: &Image, channels: usize) -> Result<Image> {
    if image.channels == channels {
        return Ok(image.clone());
    }
    if image.channels != 1 {
        return Err(invalid!(
            "{}-channel image cannot feed a {channels}-channel backbone",
            image.channels
        ));
    }
    Image::new(channels, image.height, image.width, image.pixels.repeat(channels))
}

pub(crate) fn prepare_sample(s: &Sample, cfg: &ExperimentConfig) -> Result<PreparedSample> {
    let adapted = Sample {
        image: match_channels(&s.image, cfg.backbone.in_channels)?,
        ..s.clone()
    };
    PreparedSample::new(&adapted, cfg.data.image_size)
}

pub fn load_corpus(cfg: &ExperimentConfig) -> Result<Corpus> {
    match &cfg.data.source {
        DataSource::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
        } => Corpus::load_idx(train_images, train_labels, test_images, test_labels),
        DataSource::Synthetic(spec) => Ok(generate_synthetic(spec)?.0),
    }
}

/// Loads, splits and preprocesses the configured dataset.
pub fn prepare_data(cfg: &ExperimentConfig) -> Result<PreparedData> {
    let corpus = load_corpus(cfg)?;
    let seq = crate::data::split_tasks(&corpus, &cfg.split_config())?;
    let prep = |v: &[Sample]| v.iter().map(|s| prepare_sample(s, cfg)).collect::<Result<Vec<_>>>();
    let mut tasks = Vec::with_capacity(seq.tasks.len());
    for t in &seq.tasks {
        tasks.push(PreparedTask {
            id: t.id,
            classes: t.classes.clone(),
            train: prep(&t.train)?,
            test: prep(&t.test)?,
            raw_train: t.train.clone(),
        });
    }
    Ok(PreparedData {
        manifest: seq.manifest(),
        reserved: prep(&seq.reserved_train)?,
        tasks,
    })
}

/// Whether frozen parameters kept their values through one stage.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreezeCheck {
    pub task: usize,
    pub stage: String,
    /// `None` when the backbone is trainable (baselines).
    pub backbone_unchanged: Option<bool>,
    /// `None` before the first merge of the task.
    pub merged_unchanged: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSummary {
    pub task_id: usize,
    pub classes: Vec<ClassId>,
    /// Accuracy over the test data of every class seen so far.
    pub accuracy: f64,
    pub average_so_far: f64,
    /// Accuracy on each seen task's test split (same classifier).
    pub per_task_accuracy: Vec<f64>,
    /// Distinct block-execution counts observed per inference call.
    pub block_executions: Vec<usize>,
    pub stages: Vec<StageStats>,
    pub buffer_counts: BTreeMap<ClassId, usize>,
    pub confusion: ConfusionMatrix,
    pub seen_classes: Vec<ClassId>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopsSummary {
    pub report: FlopsReport,
    pub inference: InferenceCost,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub method: Method,
    pub order: StageOrder,
    pub seed: u64,
    pub complete: bool,
    pub error: Option<String>,
    pub pretrain: Option<StageStats>,
    pub backbone_checksum: String,
    pub tasks: Vec<TaskSummary>,
    /// `A_1 .. A_T`.
    pub trajectory: Vec<f64>,
    pub average_accuracy: Option<f64>,
    pub last_accuracy: Option<f64>,
    pub freeze_checks: Vec<FreezeCheck>,
    pub flops: Option<FlopsSummary>,
    pub artifacts: Vec<String>,
    pub config: ExperimentConfig,
}

impl ExperimentReport {
    pub fn frozen_params_stable(&self) -> bool {
        self.freeze_checks
            .iter()
            .all(|c| c.backbone_unchanged != Some(false) && c.merged_unchanged != Some(false))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

pub const REPORT_FILE: &str = "report.json";
pub const METRICS_FILE: &str = "metrics.csv";

fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(format!("creating {}", p.display()), e))
}

fn write_text(p: &Path, text: &str) -> Result<()> {
    fs::write(p, text).map_err(|e| Error::io(format!("writing {}", p.display()), e))
}

struct Run<'a> {
    cfg: &'a ExperimentConfig,
    out: Option<&'a Path>,
    learner: Learner,
    buffer: ReplayBuffer,
    record: AccuracyRecord,
    backbone_checksum: String,
    freeze_checks: Vec<FreezeCheck>,
    artifacts: Vec<String>,
}

impl Run<'_> {
    fn dynammo(&self) -> bool {
        self.cfg.method == Method::Dynammo
    }

    fn audit(&mut self, task: usize, stage: &str, merged_before: &Option<String>) {
        let backbone_unchanged = self
            .dynammo()
            .then(|| self.learner.backbone_checksum() == self.backbone_checksum);
        let merged_unchanged = merged_before
            .as_ref()
            .map(|before| self.learner.merged_checksum().as_ref() == Some(before));
        self.freeze_checks.push(FreezeCheck {
            task,
            stage: stage.into(),
            backbone_unchanged,
            merged_unchanged,
        });
    }

    fn artifact(&mut self, rel: impl Into<String>) {
        self.artifacts.push(rel.into());
    }

    fn task(&mut self, data: &PreparedData, bank: &SampleBank, k: usize) -> Result<TaskSummary> {
        let cfg = self.cfg;
        let task = &data.tasks[k];
        let t = task.id;
        let seen: Vec<ClassId> = data.tasks[..=k].iter().flat_map(|x| x.classes.clone()).collect();
        let mut stages = Vec::new();
        match cfg.method {
            Method::Dynammo => {
                let mut rng = stream(cfg.seed, "adapter-tuning", t);
                let (adapters, head, s) = run_adapter_tuning(
                    &mut self.learner,
                    t,
                    &task.classes,
                    &task.train,
                    &self.buffer,
                    bank,
                    cfg,
                    &mut rng,
                )?;
                stages.push(s);
                let merged_prev = self.learner.merged_checksum();
                self.audit(t, "adapter-tuning", &merged_prev);
                self.learner.task_heads.push(head);
                self.learner.task_adapters.push(adapters);

                let balanced_raw = self
                    .buffer
                    .build_balanced_set(&task.raw_train, sub_seed(cfg.seed, "balanced-set", t))?;
                let mut pool: BTreeMap<u64, &PreparedSample> = task.train.iter().map(|s| (s.id, s)).collect();
                let balanced: Vec<&PreparedSample> = balanced_raw
                    .iter()
                    .map(|s| match pool.remove(&s.id) {
                        Some(p) => Ok(p),
                        None => bank.get(s.id),
                    })
                    .collect::<Result<_>>()?;
                let mut rng = stream(cfg.seed, "head-finetune", t);
                let head_stage = |run: &mut Self, mode, source, rng: &mut _| {
                    run_head_finetune(&mut run.learner, t, mode, source, &balanced, &seen, &task.classes, cfg, rng)
                };
                let merge_stage = |run: &mut Self| -> Result<()> {
                    let adapters = run.learner.task_adapters[k].clone();
                    run_merge_stage(&mut run.learner, &adapters)
                };
                match cfg.order {
                    StageOrder::AtMerFtUnified | StageOrder::AtMerFtTsh => {
                        merge_stage(self)?;
                        let merged = self.learner.merged_checksum();
                        self.audit(t, "merge", &None);
                        let mode = if cfg.order == StageOrder::AtMerFtUnified {
                            HeadMode::Unified
                        } else {
                            HeadMode::TaskSpecific
                        };
                        stages.push(head_stage(self, mode, FeatureSource::Merged, &mut rng)?);
                        self.audit(t, "head-finetune", &merged);
                    }
                    StageOrder::AtFtMer => {
                        stages.push(head_stage(self, HeadMode::TaskSpecific, FeatureSource::Task(k), &mut rng)?);
                        self.audit(t, "head-finetune", &merged_prev);
                        merge_stage(self)?;
                        self.audit(t, "merge", &None);
                    }
                }
            }
            Method::FinetuneBaseline | Method::ReplayBaseline => {
                let mut rng = stream(cfg.seed, "baseline", t);
                let replay = (cfg.method == Method::ReplayBaseline).then_some((&self.buffer, bank));
                stages.push(run_baseline_task(
                    &mut self.learner,
                    t,
                    &task.classes,
                    &task.train,
                    replay,
                    cfg,
                    &mut rng,
                )?);
            }
        }

        let mode = match (cfg.method, cfg.order) {
            (Method::Dynammo, StageOrder::AtMerFtUnified) => EvalMode::MergedUnified,
            (Method::Dynammo, _) => EvalMode::MergedTaskHeads,
            _ => EvalMode::PlainUnified,
        };
        let merged_before_eval = self.learner.merged_checksum();
        let test: Vec<&PreparedSample> = data.tasks[..=k].iter().flat_map(|x| x.test.iter()).collect();
        let preds = predict(&self.learner, mode, &test, &seen, cfg.eval_batch_size)?;
        self.audit(t, "evaluation", &merged_before_eval);
        let slot = |c: ClassId| seen.iter().position(|&s| s == c).expect("seen class");
        let predicted: Vec<usize> = preds.classes.iter().map(|&c| slot(c)).collect();
        let truth: Vec<usize> = test.iter().map(|s| slot(s.label)).collect();
        let accuracy = accuracy_percent(&predicted, &truth)?;
        let confusion = confusion_matrix(&predicted, &truth, seen.len())?;
        let mut per_task_accuracy = Vec::with_capacity(k + 1);
        let mut offset = 0;
        for x in &data.tasks[..=k] {
            let n = x.test.len();
            per_task_accuracy.push(accuracy_percent(&predicted[offset..offset + n], &truth[offset..offset + n])?);
            offset += n;
        }
        self.record.push(accuracy)?;

        self.buffer
            .update_buffer(&task.raw_train, sub_seed(cfg.seed, "buffer", t))?;

        if let Some(out) = self.out {
            self.write_task_artifacts(out, t, &seen, &confusion)?;
        }
        Ok(TaskSummary {
            task_id: t,
            classes: task.classes.clone(),
            accuracy,
            average_so_far: self.record.average()?,
            per_task_accuracy,
            block_executions: preds.block_executions,
            stages,
            buffer_counts: self.buffer.class_counts(),
            confusion,
            seen_classes: seen,
        })
    }

    fn write_task_artifacts(&mut self, out: &Path, t: usize, seen: &[ClassId], confusion: &ConfusionMatrix) -> Result<()> {
        let mut ck = Checkpoint::from_store(&self.learner.store, &self.learner.inference_params());
        ck.merge_count = self.learner.merge.t() as u32;
        ck.classes = seen.to_vec();
        let rel = format!("checkpoints/task_{t}.ckpt");
        ck.save(&out.join(&rel))?;
        self.artifact(rel);

        let rel = format!("confusion_{t}.csv");
        confusion.write_csv(&out.join(&rel), seen)?;
        self.artifact(rel);

        if self.dynammo() {
            self.learner.merge.save_archive(&out.join("adapters"))?;
            if self.cfg.order != StageOrder::AtMerFtUnified {
                for h in &self.learner.task_heads {
                    let mut hc = Checkpoint::from_store(&self.learner.store, &h.params());
                    hc.classes = h.classes.clone();
                    hc.save(&out.join(format!("heads/task_{}.ckpt", h.task)))?;
                }
            }
        }
        if self.cfg.method != Method::FinetuneBaseline {
            self.buffer.save(&out.join("buffer"))?;
        }
        Ok(())
    }
}

fn prepare_out_dir(out: &Path) -> Result<()> {
    for sub in ["checkpoints", "adapters", "heads", "buffer"] {
        create_dir(&out.join(sub))?;
    }
    Ok(())
}

fn flops_summary(cfg: &ExperimentConfig, tasks: usize, head_width: usize) -> Result<FlopsSummary> {
    let ratio = (cfg.method == Method::Dynammo).then_some(cfg.adapter_ratio);
    let arch = backbone_architecture(&cfg.backbone, ratio, Some(head_width));
    let report = flops_of(&arch)?;
    let inference = dynamic_inference_cost(&report, tasks as u64)?;
    Ok(FlopsSummary { report, inference })
}

/// Runs the configured experiment. With `out` set, artifacts are written
/// there (the directory is created). A failing stage ends the run early and
/// yields a report with `complete == false` instead of an error; only setup
/// failures (data, backbone, output directory) return `Err`.
pub fn run_experiment(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<ExperimentReport> {
    cfg.validate()?;
    let data = prepare_data(cfg)?;
    if data.tasks.is_empty() {
        return Err(invalid!("configuration yields no tasks"));
    }
    if let Some(out) = out {
        prepare_out_dir(out)?;
        write_text(&out.join("config.txt"), &cfg.to_kv_string())?;
        write_json(&out.join("tasks.json"), &data.manifest)?;
    }
    let (weights, pretrain) = initial_backbone(cfg, &data)?;
    let mut learner = Learner::new(cfg, &weights)?;
    if cfg.method == Method::Dynammo {
        learner.backbone.freeze(&mut learner.store);
    }
    let backbone_checksum = learner.backbone_checksum();
    let bank = SampleBank::new(&data);
    let mut run = Run {
        cfg,
        out,
        learner,
        buffer: ReplayBuffer::new(cfg.replay_budget)?,
        record: AccuracyRecord::new(),
        backbone_checksum: backbone_checksum.clone(),
        freeze_checks: Vec::new(),
        artifacts: vec!["config.txt".into(), "tasks.json".into()],
    };
    if out.is_none() {
        run.artifacts.clear();
    }
    let mut tasks = Vec::new();
    let mut error = None;
    for k in 0..data.tasks.len() {
        match run.task(&data, &bank, k) {
            Ok(s) => {
                log::info!("task {}: A = {:.2}", s.task_id, s.accuracy);
                tasks.push(s);
            }
            Err(e) => {
                error = Some(format!("task {}: {e}", k + 1));
                break;
            }
        }
    }
    let head_width = match (&run.learner.unified, run.learner.task_heads.is_empty()) {
        (Some(h), _) => h.width(),
        (None, false) => run.learner.task_heads.iter().map(TaskHead::width).sum(),
        (None, true) => 1,
    };
    let flops = Some(flops_summary(cfg, tasks.len().max(1), head_width)?);
    let mut report = ExperimentReport {
        method: cfg.method,
        order: cfg.order,
        seed: cfg.seed,
        complete: error.is_none(),
        error,
        pretrain,
        backbone_checksum,
        trajectory: run.record.accuracies().to_vec(),
        average_accuracy: run.record.average().ok(),
        last_accuracy: run.record.last(),
        tasks,
        freeze_checks: run.freeze_checks,
        flops,
        artifacts: run.artifacts,
        config: cfg.clone(),
    };
    if let Some(out) = out {
        run.record.write_csv(&out.join(METRICS_FILE))?;
        write_accuracy_matrix(&out.join("accuracy_matrix.csv"), &report.tasks)?;
        write_json(&out.join("flops_report.json"), report.flops.as_ref().expect("set above"))?;
        for f in [METRICS_FILE, "accuracy_matrix.csv", "flops_report.json", REPORT_FILE] {
            report.artifacts.push(f.into());
        }
        if report.tasks.is_empty() {
            report.artifacts.retain(|a| !a.starts_with("checkpoints"));
        }
        write_json(&out.join(REPORT_FILE), &report)?;
    }
    Ok(report)
}

/// `acc[t][i]`: accuracy on task `i`'s test split after task `t`; blank above the diagonal.
fn write_accuracy_matrix(path: &Path, tasks: &[TaskSummary]) -> Result<()> {
    let n = tasks.len();
    let mut w = csv::Writer::from_path(path).map_err(|e| invalid!("{}: {e}", path.display()))?;
    let mut header = vec!["after_task".to_string()];
    header.extend((1..=n).map(|i| format!("task_{i}")));
    w.write_record(&header).map_err(|e| invalid!("{}: {e}", path.display()))?;
    for s in tasks {
        let mut row = vec![s.task_id.to_string()];
        row.extend((0..n).map(|i| s.per_task_accuracy.get(i).map(|a| a.to_string()).unwrap_or_default()));
        w.write_record(&row).map_err(|e| invalid!("{}: {e}", path.display()))?;
    }
    w.flush().map_err(|e| Error::io(path.display().to_string(), e))
}

/// Reloads the latest checkpoint of a run directory and re-evaluates it on
/// the run's test data. Returns the accuracy over all classes in the checkpoint.
pub fn evaluate_run_dir(dir: &Path) -> Result<(usize, f64)> {
    let cfg = ExperimentConfig::read(&dir.join("config.txt"))?;
    let ckdir = dir.join("checkpoints");
    let latest = fs::read_dir(&ckdir)
        .map_err(|e| Error::io(format!("listing {}", ckdir.display()), e))?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().to_string_lossy().into_owned();
            let t = name.strip_prefix("task_")?.strip_suffix(".ckpt")?.parse::<usize>().ok()?;
            Some((t, e.path()))
        })
        .max_by_key(|(t, _)| *t)
        .ok_or_else(|| invalid!("{} holds no task checkpoints", ckdir.display()))?;
    let (t, path): (usize, PathBuf) = latest;
    let ck = Checkpoint::load(&path)?;
    let data = prepare_data(&cfg)?;
    if t > data.tasks.len() {
        return Err(invalid!("checkpoint for task {t} but the config yields {} tasks", data.tasks.len()));
    }
    let learner = rebuild_learner(&cfg, &ck, &data.tasks[..t])?;
    let mode = match (cfg.method, cfg.order) {
        (Method::Dynammo, StageOrder::AtMerFtUnified) => EvalMode::MergedUnified,
        (Method::Dynammo, _) => EvalMode::MergedTaskHeads,
        _ => EvalMode::PlainUnified,
    };
    let test: Vec<&PreparedSample> = data.tasks[..t].iter().flat_map(|x| x.test.iter()).collect();
    let preds = predict(&learner, mode, &test, &ck.classes, cfg.eval_batch_size)?;
    let correct = preds.classes.iter().zip(&test).filter(|(p, s)| **p == s.label).count();
    Ok((t, 100.0 * correct as f64 / test.len().max(1) as f64))
}

/// Recreates the inference modules of a checkpoint and loads its tensors.
fn rebuild_learner(cfg: &ExperimentConfig, ck: &Checkpoint, tasks: &[PreparedTask]) -> Result<Learner> {
    let mut store = ParamStore::new();
    let mut rng = stream(cfg.pretrain.seed, "backbone-init", 0);
    let backbone = Backbone::new(&mut store, cfg.backbone.clone(), &mut rng)?;
    let has = |prefix: &str| ck.tensors.iter().any(|(n, _)| n.starts_with(prefix));
    let merged = if has("merged.adapter") {
        Some(AdapterSet::new(&mut store, "merged.adapter", 0, &backbone, cfg.adapter_ratio, &mut rng)?)
    } else {
        None
    };
    let unified = if has("unified.head") {
        Some(UnifiedHead::new(&mut store, "unified.head", backbone.feature_dim(), &ck.classes)?)
    } else {
        None
    };
    let mut task_heads = Vec::new();
    for x in tasks {
        let prefix = format!("task{}.head", x.id);
        if has(&prefix) {
            task_heads.push(TaskHead::new(&mut store, &prefix, x.id, backbone.feature_dim(), &x.classes)?);
        }
    }
    ck.apply(&mut store)?;
    Ok(Learner {
        store,
        backbone,
        adapter_ratio: cfg.adapter_ratio,
        merge: crate::merging::MergeState::new(),
        merged,
        unified,
        task_heads,
        task_adapters: Vec::new(),
    })
}
