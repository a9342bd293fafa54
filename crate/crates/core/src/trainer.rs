//! Project state, the three training strategies, checkpoints and resume.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use taxa_numeric::{rng, Graph, ParamId, ParamStore, RngState, Scalar, StreamRng, Tensor, TensorError};
use thiserror::Error;

use crate::checkpoint::{Checkpoint, CheckpointError, StoredTensor};
use crate::condition::{ConditionError, ConditionStack};
use crate::config::{ConfigError, ProjectConfig, Strategy};
use crate::dataset::{DatasetManifest, LabeledImage, Split};
use crate::denoiser::{noise_loss, DenoiserNet, NoiseSchedule, NoisedBatch};
use crate::optim::{clip_global_norm, AdamW, Moments, OptimError};
use crate::taxonomy::{TaxonPath, TaxonomyError, TaxonomyTree};

const INIT_STREAM: u64 = 1;
const TRAIN_STREAM: u64 = 2;

pub const LOG_FILE: &str = "train_log.jsonl";
pub const LEDGER_FILE: &str = "freeze_ledger.jsonl";
pub const INTERRUPTED_FILE: &str = "interrupted.taxd";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("stage {stage} cannot run: {reason}")]
    OutOfOrder { stage: usize, reason: String },
    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: u64, detail: String },
    #[error("non-finite gradient at step {step} in parameter {param}")]
    NonFiniteGradient { step: u64, param: String },
    #[error("frozen parameter {param} changed during phase {phase}")]
    FreezeViolation { phase: String, param: String },
    #[error("training data: {0}")]
    Data(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Taxonomy(#[from] TaxonomyError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("writing training output: {0}")]
    Io(#[from] std::io::Error),
}

impl From<ConditionError> for TrainError {
    fn from(e: ConditionError) -> Self {
        match e {
            ConditionError::OutOfOrder { requested, trained_through } => TrainError::OutOfOrder {
                stage: requested,
                reason: format!("levels are trained through {trained_through:?}"),
            },
            ConditionError::LevelOutOfRange { level, depth } => {
                TrainError::Config(ConfigError::Invalid(format!("level {level} outside depth {depth}")))
            }
            ConditionError::Tensor(t) => TrainError::Tensor(t),
        }
    }
}

/// Which conditioning level a batch is trained at.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LevelChoice {
    Fixed(usize),
    /// Uniform over `0..=max`, drawn per batch.
    Uniform(usize),
}

/// One contiguous block of optimizer steps with fixed settings.
#[derive(Debug, Clone, PartialEq)]
pub struct Phase {
    pub name: String,
    /// Value of the `stage` field in the training log.
    pub stage: usize,
    pub level: LevelChoice,
    pub iterations: usize,
    pub lr: f64,
    pub dropout: f64,
    pub train_backbone: bool,
    pub modules: Vec<usize>,
    /// Progressive stages freeze `M_0..=M_i` (and after stage 0 the
    /// backbone and adapters) when they finish.
    pub freeze_through: Option<usize>,
    pub checkpoint: Option<String>,
}

/// The ordered phases of a strategy. All strategies spend the same number
/// of optimizer steps: `levels × iterations_per_level`.
pub fn plan(config: &ProjectConfig, strategy: Strategy) -> Vec<Phase> {
    let k = config.model.levels;
    let t = &config.training;
    let per = t.iterations_per_level;
    match strategy {
        Strategy::Progressive => (0..k)
            .map(|i| Phase {
                name: format!("stage{i}"),
                stage: i,
                level: LevelChoice::Fixed(i),
                iterations: per,
                lr: if i == 0 { t.lr_first } else { t.lr_rest },
                dropout: if i == 0 { t.cond_dropout } else { 0.0 },
                train_backbone: i == 0,
                modules: vec![i],
                freeze_through: Some(i),
                checkpoint: Some(format!("stage{i}.taxd")),
            })
            .collect(),
        Strategy::All | Strategy::Random => {
            let level = if strategy == Strategy::All { LevelChoice::Fixed(k - 1) } else { LevelChoice::Uniform(k - 1) };
            let mut phases = vec![Phase {
                name: format!("{strategy}-warmup"),
                stage: 0,
                level,
                iterations: per,
                lr: t.lr_first,
                dropout: t.cond_dropout,
                train_backbone: true,
                modules: (0..k).collect(),
                freeze_through: None,
                checkpoint: None,
            }];
            if k > 1 {
                phases.push(Phase {
                    name: format!("{strategy}-joint"),
                    stage: 1,
                    level,
                    iterations: per * (k - 1),
                    lr: t.lr_rest,
                    dropout: 0.0,
                    train_backbone: false,
                    modules: (0..k).collect(),
                    freeze_through: None,
                    checkpoint: None,
                });
            }
            phases.last_mut().expect("at least one phase").checkpoint = Some("final.taxd".into());
            phases
        }
    }
}

/// Position in a strategy's plan.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct Progress {
    pub strategy: Option<Strategy>,
    pub phase: usize,
    pub phase_step: usize,
    pub global_step: u64,
}

/// Real training images in `[-1, 1]`, `H x W x 3` each.
#[derive(Debug, Clone)]
pub struct TrainData<T> {
    pub paths: Vec<TaxonPath>,
    pub pixels: Vec<T>,
    pub per_image: usize,
}

impl<T: Scalar> TrainData<T> {
    pub fn from_images(images: &[LabeledImage]) -> Result<Self, TrainError> {
        let per_image = images.first().map(|i| i.pixels.len()).ok_or_else(|| TrainError::Data("no training images".into()))?;
        let mut pixels = Vec::with_capacity(images.len() * per_image);
        for im in images {
            if im.pixels.len() != per_image {
                return Err(TrainError::Data("images differ in size".into()));
            }
            pixels.extend(im.pixels.iter().map(|&v| T::lit(2.0 * v - 1.0)));
        }
        Ok(TrainData { paths: images.iter().map(|i| i.path.clone()).collect(), pixels, per_image })
    }

    pub fn from_manifest(manifest: &DatasetManifest, image_size: usize) -> Result<Self, TrainError> {
        let images = manifest.load_images(Split::Train, image_size).map_err(|e| TrainError::Data(e.to_string()))?;
        Self::from_images(&images)
    }

    pub fn len(&self) -> usize {
        self.paths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.paths.is_empty()
    }

    fn gather(&self, idx: &[usize], size: usize) -> Tensor<T> {
        let mut data = Vec::with_capacity(idx.len() * self.per_image);
        for &i in idx {
            data.extend_from_slice(&self.pixels[i * self.per_image..(i + 1) * self.per_image]);
        }
        Tensor::new(&[idx.len(), size, size, 3], data).expect("image size matches config")
    }
}

/// Hashes of the frozen parameters around one phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub phase: String,
    pub stage: usize,
    pub before: BTreeMap<String, String>,
    pub after: BTreeMap<String, String>,
}

impl LedgerEntry {
    pub fn intact(&self) -> bool {
        self.before.iter().all(|(k, v)| self.after.get(k) == Some(v))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhaseReport {
    pub name: String,
    pub stage: usize,
    pub losses: Vec<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    pub through_level: Option<usize>,
    /// Directory for checkpoints, the training log and the freeze ledger.
    pub out_dir: Option<PathBuf>,
    /// Stop after this global step and write [`INTERRUPTED_FILE`].
    pub stop_after: Option<u64>,
}

#[derive(Debug, Clone, Default)]
pub struct TrainOutcome {
    pub completed: bool,
    pub phases: Vec<PhaseReport>,
    pub ledger: Vec<LedgerEntry>,
    pub checkpoints: Vec<PathBuf>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ParamFlags {
    name: String,
    trainable: bool,
    frozen: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct RngMeta {
    seed: String,
    stream: u64,
    word_pos: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointMeta {
    config: ProjectConfig,
    progress: Progress,
    trained_through: Option<usize>,
    active_level: Option<usize>,
    rng: RngMeta,
    params: Vec<ParamFlags>,
    adam_steps: BTreeMap<String, u64>,
    tree: String,
}

/// Everything a training run owns.
pub struct Project<T: Scalar> {
    pub config: ProjectConfig,
    pub tree: TaxonomyTree,
    pub store: ParamStore<T>,
    pub stack: ConditionStack,
    pub net: DenoiserNet,
    pub schedule: NoiseSchedule,
    pub optimizer: AdamW<T>,
    pub progress: Progress,
    rng: StreamRng,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl<T: Scalar> Project<T> {
    /// Fresh, untrained project. Initialisation depends only on `config`.
    pub fn new(config: ProjectConfig, tree: TaxonomyTree) -> Result<Self, TrainError> {
        config.validate()?;
        let schedule = config.schedule.build().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let mut store = ParamStore::new();
        let mut init = rng::stream(config.seed, INIT_STREAM);
        let net = DenoiserNet::new(&mut store, config.denoiser(), &mut init)?;
        let stack = ConditionStack::new(&mut store, config.condition(), &mut init)?;
        Ok(Project {
            optimizer: AdamW::new(config.training.optimizer),
            rng: rng::stream(config.seed, TRAIN_STREAM),
            config,
            tree,
            store,
            stack,
            net,
            schedule,
            progress: Progress::default(),
        })
    }

    /// SHA-256 of each frozen parameter's value bytes.
    pub fn frozen_hashes(&self) -> BTreeMap<String, String> {
        self.store
            .iter()
            .filter(|(_, p)| p.frozen)
            .map(|(_, p)| (p.name.clone(), sha256_hex(&p.value.to_le_bytes())))
            .collect()
    }

    pub fn param_hash(&self, ids: &[ParamId]) -> String {
        let mut h = Sha256::new();
        for &id in ids {
            let p = self.store.get(id);
            h.update(p.name.as_bytes());
            h.update(p.value.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    fn configure_phase(&mut self, phase: &Phase) -> Result<(), TrainError> {
        self.store.set_all_trainable(false);
        if phase.train_backbone {
            let ids = [self.net.backbone_ids(), self.net.lora_ids()].concat();
            self.store.set_trainable(&ids, true);
        }
        for &m in &phase.modules {
            self.store.set_trainable(&self.stack.module_ids(m), true);
        }
        let active = match phase.level {
            LevelChoice::Fixed(l) | LevelChoice::Uniform(l) => l,
        };
        if phase.freeze_through.is_some() {
            self.stack.set_active(Some(active))?;
        } else {
            let trained = self.stack.trained_through();
            self.stack.restore_progress(trained, Some(active))?;
        }
        self.optimizer.retain_active(&self.store);
        Ok(())
    }

    fn finish_phase(&mut self, phase: &Phase, last: bool) -> Result<(), TrainError> {
        if let Some(level) = phase.freeze_through {
            self.stack.freeze_through(&mut self.store, level)?;
            if phase.train_backbone {
                let ids = [self.net.backbone_ids(), self.net.lora_ids()].concat();
                self.store.freeze(&ids);
            }
        } else if last {
            let deepest = self.stack.depth() - 1;
            self.stack.restore_progress(Some(deepest), None)?;
        }
        self.store.set_all_trainable(false);
        self.optimizer.retain_active(&self.store);
        Ok(())
    }

    fn check_stage_order(&self, phase: &Phase) -> Result<(), TrainError> {
        if let Some(level) = phase.freeze_through {
            let expected = level.checked_sub(1);
            if self.stack.trained_through() != expected {
                return Err(TrainError::OutOfOrder {
                    stage: level,
                    reason: format!(
                        "requires levels trained through {expected:?}, found {:?}",
                        self.stack.trained_through()
                    ),
                });
            }
        }
        Ok(())
    }

    /// One optimizer step on a freshly drawn batch. Returns the loss.
    fn train_step(&mut self, data: &TrainData<T>, phase: &Phase) -> Result<f64, TrainError> {
        let step = self.progress.global_step + 1;
        let size = self.config.data.spec.image_size;
        let idx: Vec<usize> =
            (0..self.config.training.batch_size).map(|_| self.rng.random_range(0..data.len())).collect();
        let level = match phase.level {
            LevelChoice::Fixed(l) => l,
            LevelChoice::Uniform(max) => self.rng.random_range(0..=max),
        };
        let x0 = data.gather(&idx, size);
        let batch = NoisedBatch::draw(&self.schedule, &x0, phase.dropout, &mut self.rng)?;
        let paths: Vec<&TaxonPath> = idx.iter().map(|&i| &data.paths[i]).collect();

        let non_finite = |e: TensorError| match e {
            TensorError::NonFinite { .. } | TensorError::NonFiniteIn { .. } => {
                TrainError::NonFiniteLoss { step, detail: e.to_string() }
            }
            other => TrainError::Tensor(other),
        };
        let mut g = Graph::new();
        let c = self.stack.encode(&mut g, &self.store, &paths, level).map_err(|e| match e {
            ConditionError::Tensor(t) => non_finite(t),
            other => other.into(),
        })?;
        let c = self.stack.apply_dropout(&mut g, c, &batch.keep).map_err(non_finite)?;
        let x = g.constant(batch.x_t);
        let eps_hat = self.net.predict_noise(&mut g, &self.store, x, &batch.ts, c).map_err(non_finite)?;
        let eps = g.constant(batch.eps);
        let loss = noise_loss(&mut g, eps_hat, eps).map_err(non_finite)?;
        let value = g.value(loss).item().to_f64().unwrap_or(f64::NAN);
        if !value.is_finite() {
            return Err(TrainError::NonFiniteLoss { step, detail: format!("loss = {value}") });
        }
        g.backward(loss, &mut self.store).map_err(non_finite)?;
        drop(g);
        clip_global_norm(&mut self.store, self.config.training.grad_clip);
        self.optimizer.step(&mut self.store, phase.lr).map_err(|e| match e {
            OptimError::NonFiniteGradient(param) => TrainError::NonFiniteGradient { step, param },
        })?;
        self.store.zero_grad();
        self.progress.global_step = step;
        self.progress.phase_step += 1;
        Ok(value)
    }

    /// Runs (or continues) `strategy` until its plan, or the progressive
    /// stage `through_level`, is complete.
    pub fn train(&mut self, data: &TrainData<T>, strategy: Strategy, opts: &TrainOptions) -> Result<TrainOutcome, TrainError> {
        if data.is_empty() {
            return Err(TrainError::Data("no training images".into()));
        }
        for p in &data.paths {
            if !self.tree.contains(p) {
                return Err(TaxonomyError::UnknownPath(p.full_name()).into());
            }
        }
        match self.progress.strategy {
            Some(s) if s != strategy => {
                return Err(TrainError::OutOfOrder {
                    stage: self.progress.phase,
                    reason: format!("checkpoint was trained with strategy {s}, not {strategy}"),
                })
            }
            _ => self.progress.strategy = Some(strategy),
        }
        let phases = plan(&self.config, strategy);
        let end = match (strategy, opts.through_level) {
            (_, None) => phases.len(),
            (Strategy::Progressive, Some(l)) if l < phases.len() => l + 1,
            (Strategy::Progressive, Some(l)) => {
                return Err(ConfigError::Invalid(format!("--through-level {l} exceeds the configured levels")).into())
            }
            (_, Some(_)) => {
                return Err(ConfigError::Invalid("--through-level only applies to the progressive strategy".into()).into())
            }
        };
        let mut log = match &opts.out_dir {
            Some(dir) => {
                fs::create_dir_all(dir)?;
                let path = dir.join(LOG_FILE);
                let file = if self.progress.global_step == 0 {
                    fs::File::create(path)?
                } else {
                    fs::OpenOptions::new().create(true).append(true).open(path)?
                };
                Some(std::io::BufWriter::new(file))
            }
            None => None,
        };
        let mut outcome = TrainOutcome::default();
        let started = Instant::now();
        while self.progress.phase < end {
            let phase = phases[self.progress.phase].clone();
            if self.progress.phase_step == 0 {
                self.check_stage_order(&phase)?;
            }
            self.configure_phase(&phase)?;
            info!("{}: {} steps at lr {}", phase.name, phase.iterations - self.progress.phase_step, phase.lr);
            let before = self.frozen_hashes();
            let mut losses = Vec::with_capacity(phase.iterations);
            let mut interrupted = false;
            while self.progress.phase_step < phase.iterations {
                let loss = self.train_step(data, &phase)?;
                losses.push(loss);
                if let Some(w) = log.as_mut() {
                    let line = serde_json::json!({
                        "step": self.progress.global_step,
                        "stage": phase.stage,
                        "loss": loss,
                        "lr": phase.lr,
                        "wall_ms": started.elapsed().as_millis() as u64,
                    });
                    writeln!(w, "{line}")?;
                }
                if opts.stop_after.is_some_and(|s| self.progress.global_step >= s)
                    && self.progress.phase_step < phase.iterations
                {
                    interrupted = true;
                    break;
                }
            }
            let after = self.frozen_hashes();
            let entry = LedgerEntry { phase: phase.name.clone(), stage: phase.stage, before, after };
            if let Some((name, _)) = entry.before.iter().find(|(k, v)| entry.after.get(*k) != Some(*v)) {
                return Err(TrainError::FreezeViolation { phase: phase.name.clone(), param: name.clone() });
            }
            if let (Some(dir), false) = (&opts.out_dir, interrupted) {
                let mut f = fs::OpenOptions::new().create(true).append(true).open(dir.join(LEDGER_FILE))?;
                writeln!(f, "{}", serde_json::to_string(&entry).expect("ledger serializes"))?;
            }
            outcome.ledger.push(entry);
            outcome.phases.push(PhaseReport { name: phase.name.clone(), stage: phase.stage, losses });
            if interrupted {
                if let Some(w) = log.as_mut() {
                    w.flush()?;
                }
                if let Some(dir) = &opts.out_dir {
                    let path = dir.join(INTERRUPTED_FILE);
                    self.to_checkpoint().save(&path)?;
                    outcome.checkpoints.push(path);
                }
                return Ok(outcome);
            }
            let last = self.progress.phase + 1 == phases.len();
            self.finish_phase(&phase, last)?;
            self.progress.phase += 1;
            self.progress.phase_step = 0;
            if let (Some(dir), Some(name)) = (&opts.out_dir, &phase.checkpoint) {
                let path = dir.join(name);
                self.to_checkpoint().save(&path)?;
                outcome.checkpoints.push(path);
            }
            if opts.stop_after.is_some_and(|s| self.progress.global_step >= s) && self.progress.phase < end {
                if let Some(dir) = &opts.out_dir {
                    let path = dir.join(INTERRUPTED_FILE);
                    self.to_checkpoint().save(&path)?;
                    outcome.checkpoints.push(path);
                }
                return Ok(outcome);
            }
        }
        if let Some(w) = log.as_mut() {
            w.flush()?;
        }
        outcome.completed = true;
        Ok(outcome)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let st = rng::save_state(&self.rng);
        let meta = CheckpointMeta {
            config: self.config.clone(),
            progress: self.progress,
            trained_through: self.stack.trained_through(),
            active_level: self.stack.active_level(),
            rng: RngMeta { seed: hex::encode(st.seed), stream: st.stream, word_pos: st.word_pos.to_string() },
            params: self
                .store
                .iter()
                .map(|(_, p)| ParamFlags { name: p.name.clone(), trainable: p.trainable, frozen: p.frozen })
                .collect(),
            adam_steps: self.optimizer.state.iter().map(|(k, m)| (k.clone(), m.step)).collect(),
            tree: self.tree.to_text(),
        };
        let mut tensors: Vec<StoredTensor> =
            self.store.iter().map(|(_, p)| StoredTensor::from_tensor(p.name.clone(), &p.value)).collect();
        for (name, m) in &self.optimizer.state {
            tensors.push(StoredTensor::from_tensor(format!("adam.m.{name}"), &m.m));
            tensors.push(StoredTensor::from_tensor(format!("adam.v.{name}"), &m.v));
        }
        Checkpoint { meta: serde_json::to_string(&meta).expect("metadata serializes"), tensors }
    }

    /// Rebuilds a project from a checkpoint, using its own config.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, TrainError> {
        let meta: CheckpointMeta = serde_json::from_str(&ckpt.meta).map_err(CheckpointError::Meta)?;
        Self::restore(ckpt, meta.config.clone(), meta)
    }

    /// Loads a checkpoint into a project built from `config`; any tensor
    /// whose shape disagrees with `config` is an error.
    pub fn from_checkpoint_with(ckpt: &Checkpoint, config: ProjectConfig) -> Result<Self, TrainError> {
        let meta: CheckpointMeta = serde_json::from_str(&ckpt.meta).map_err(CheckpointError::Meta)?;
        Self::restore(ckpt, config, meta)
    }

    fn restore(ckpt: &Checkpoint, config: ProjectConfig, meta: CheckpointMeta) -> Result<Self, TrainError> {
        let tree = TaxonomyTree::from_text(&meta.tree)?;
        let mut p = Project::<T>::new(config, tree)?;
        let corrupt = |m: String| TrainError::Checkpoint(CheckpointError::CorruptHeader(m));
        if meta.params.len() != p.store.len() {
            return Err(corrupt(format!("{} parameters recorded, model has {}", meta.params.len(), p.store.len())));
        }
        for flags in &meta.params {
            let id = p.store.id(&flags.name).ok_or_else(|| CheckpointError::MissingTensor(flags.name.clone()))?;
            let shape = p.store.get(id).value.shape().to_vec();
            let value = ckpt.tensor::<T>(&flags.name, &shape)?;
            let param = p.store.get_mut(id);
            param.value = value;
            param.trainable = flags.trainable;
            param.frozen = flags.frozen;
        }
        for (name, &step) in &meta.adam_steps {
            let shape = p
                .store
                .by_name(name)
                .ok_or_else(|| corrupt(format!("optimizer state for unknown parameter {name}")))?
                .value
                .shape()
                .to_vec();
            let m = ckpt.tensor::<T>(&format!("adam.m.{name}"), &shape)?;
            let v = ckpt.tensor::<T>(&format!("adam.v.{name}"), &shape)?;
            p.optimizer.state.insert(name.clone(), Moments { m, v, step });
        }
        let expected = p.store.len() + 2 * meta.adam_steps.len();
        if ckpt.tensors.len() != expected {
            return Err(corrupt(format!("{} tensors stored, expected {expected}", ckpt.tensors.len())));
        }
        p.stack.restore_progress(meta.trained_through, meta.active_level)?;
        let seed: [u8; 32] = hex::decode(&meta.rng.seed)
            .ok()
            .and_then(|b| b.try_into().ok())
            .ok_or_else(|| corrupt("bad rng seed".into()))?;
        let word_pos = meta.rng.word_pos.parse().map_err(|_| corrupt("bad rng position".into()))?;
        p.rng = rng::restore_state(&RngState { seed, stream: meta.rng.stream, word_pos });
        p.progress = meta.progress;
        Ok(p)
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        Ok(self.to_checkpoint().save(path)?)
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// Reads only the config stored in a checkpoint, e.g. to pick the
/// precision before loading.
pub fn checkpoint_config(ckpt: &Checkpoint) -> Result<ProjectConfig, TrainError> {
    let meta: CheckpointMeta = serde_json::from_str(&ckpt.meta).map_err(CheckpointError::Meta)?;
    Ok(meta.config)
}
