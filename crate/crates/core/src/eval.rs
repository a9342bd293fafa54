//! Probe classifier, hierarchical alignment and Fréchet distance over
//! probe features.

use std::collections::BTreeMap;
use std::path::Path;

use log::warn;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use taxa_numeric::{rng, Graph, ParamStore, Scalar, Tensor, TensorError, Var};
use thiserror::Error;

use crate::checkpoint::{Checkpoint, CheckpointError, StoredTensor};
use crate::config::{GuidanceMode, ProbeConfig};
use crate::dataset::LabeledImage;
use crate::nn::{Conv2d, Init, LayerNorm, Linear};
use crate::optim::{AdamW, AdamWConfig, OptimError};
use crate::ppm;
use crate::sampler::{read_sidecar, SampleError, SIDECAR_FILE};
use crate::taxonomy::{TaxonPath, TaxonomyLevel, TaxonomyTree};

const FEATURE_BATCH: usize = 64;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("degenerate dataset: {0}")]
    Degenerate(String),
    #[error("empty image set")]
    EmptyImageSet,
    #[error("level {level} has no class {class:?} in the probe vocabulary")]
    UnknownClass { level: usize, class: String },
    #[error("feature dimensions differ: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("sidecar and images disagree: {0}")]
    SidecarMismatch(String),
    #[error("probe training: {0}")]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Sample(#[from] SampleError),
}

#[derive(Debug, Clone)]
struct ProbeBlock {
    conv: Conv2d,
    norm: LayerNorm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProbeMeta {
    config: ProbeConfig,
    image_size: usize,
    /// Sorted class names (taxonomic prefixes) per level.
    vocab: Vec<Vec<String>>,
}

/// Multi-head convolutional classifier over real images: three conv
/// blocks, global mean pooling, and one linear head per level with at
/// least two classes.
pub struct Probe<T: Scalar> {
    pub config: ProbeConfig,
    pub image_size: usize,
    pub vocab: Vec<Vec<String>>,
    pub store: ParamStore<T>,
    blocks: Vec<ProbeBlock>,
    heads: Vec<Option<Linear>>,
}

impl<T: Scalar> Probe<T> {
    fn build(config: ProbeConfig, image_size: usize, vocab: Vec<Vec<String>>) -> Result<Self, EvalError> {
        let mut store = ParamStore::new();
        let mut r = rng::stream(config.seed, 0x9B0E);
        let mut blocks = Vec::new();
        let mut c_in = 3;
        for (i, (&c, stride)) in config.channels.iter().zip([1, 2, 2]).enumerate() {
            blocks.push(ProbeBlock {
                conv: Conv2d::new(&mut store, &format!("probe.block{i}.conv"), c_in, c, 3, stride, Init::FanIn(1.0), &mut r)?,
                norm: LayerNorm::new(&mut store, &format!("probe.block{i}.norm"), c)?,
            });
            c_in = c;
        }
        let mut heads = Vec::new();
        for (level, classes) in vocab.iter().enumerate() {
            heads.push(if classes.len() >= 2 {
                Some(Linear::new(&mut store, &format!("probe.head{level}"), c_in, classes.len(), Init::FanIn(1.0), &mut r)?)
            } else {
                None
            });
        }
        Ok(Probe { config, image_size, vocab, store, blocks, heads })
    }

    pub fn feature_dim(&self) -> usize {
        self.config.channels[2]
    }

    pub fn levels(&self) -> usize {
        self.vocab.len()
    }

    pub fn has_head(&self, level: usize) -> bool {
        self.heads.get(level).is_some_and(Option::is_some)
    }

    pub fn class_index(&self, level: usize, prefix: &str) -> Result<usize, EvalError> {
        self.vocab
            .get(level)
            .and_then(|v| v.binary_search_by(|c| c.as_str().cmp(prefix)).ok())
            .ok_or_else(|| EvalError::UnknownClass { level, class: prefix.to_string() })
    }

    fn batch_tensor(&self, images: &[&[f64]]) -> Result<Tensor<T>, EvalError> {
        let s = self.image_size;
        let mut data = Vec::with_capacity(images.len() * s * s * 3);
        for im in images {
            if im.len() != s * s * 3 {
                return Err(EvalError::DimensionMismatch(im.len(), s * s * 3));
            }
            data.extend(im.iter().map(|&v| T::lit(2.0 * v - 1.0)));
        }
        Ok(Tensor::new(&[images.len(), s, s, 3], data)?)
    }

    fn forward(&self, g: &mut Graph<T>, x: Var) -> Result<(Var, Vec<Option<Var>>), TensorError> {
        let mut h = x;
        for b in &self.blocks {
            h = b.conv.forward(g, &self.store, h)?;
            h = b.norm.forward(g, &self.store, h)?;
            h = g.gelu(h)?;
        }
        let s = g.shape(h).to_vec();
        let tokens = g.reshape(h, &[s[0], s[1] * s[2], s[3]])?;
        let feats = g.mean_mid(tokens)?;
        let mut logits = Vec::with_capacity(self.heads.len());
        for head in &self.heads {
            logits.push(match head {
                Some(l) => Some(l.forward(g, &self.store, feats)?),
                None => None,
            });
        }
        Ok((feats, logits))
    }

    /// Pooled penultimate features, one row per image.
    pub fn features(&self, images: &[&[f64]]) -> Result<Vec<Vec<f64>>, EvalError> {
        let f = self.feature_dim();
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(FEATURE_BATCH) {
            let mut g = Graph::inference();
            let x = g.constant(self.batch_tensor(chunk)?);
            let (feats, _) = self.forward(&mut g, x)?;
            for row in g.value(feats).data().chunks(f) {
                out.push(row.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect());
            }
        }
        Ok(out)
    }

    /// Argmax class per level (`None` for levels without a head), one
    /// vector per image.
    pub fn predict(&self, images: &[&[f64]]) -> Result<Vec<Vec<Option<usize>>>, EvalError> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(FEATURE_BATCH) {
            let mut g = Graph::inference();
            let x = g.constant(self.batch_tensor(chunk)?);
            let (_, logits) = self.forward(&mut g, x)?;
            let per_level: Vec<Option<Vec<usize>>> = logits
                .iter()
                .map(|l| {
                    l.map(|v| {
                        let t = g.value(v);
                        let k = t.shape()[1];
                        t.data()
                            .chunks(k)
                            .map(|row| {
                                let mut best = 0;
                                for (i, &x) in row.iter().enumerate() {
                                    if x > row[best] {
                                        best = i;
                                    }
                                }
                                best
                            })
                            .collect()
                    })
                })
                .collect();
            for i in 0..chunk.len() {
                out.push(per_level.iter().map(|p| p.as_ref().map(|v| v[i])).collect());
            }
        }
        Ok(out)
    }

    fn targets(&self, paths: &[&TaxonPath]) -> Result<Vec<Option<Vec<usize>>>, EvalError> {
        (0..self.levels())
            .map(|level| {
                if !self.has_head(level) {
                    return Ok(None);
                }
                paths
                    .iter()
                    .map(|p| self.class_index(level, &p.prefix(TaxonomyLevel::at(level))))
                    .collect::<Result<Vec<_>, _>>()
                    .map(Some)
            })
            .collect()
    }

    /// Per-level accuracy on labelled images.
    pub fn accuracy(&self, images: &[LabeledImage]) -> Result<Vec<Option<f64>>, EvalError> {
        if images.is_empty() {
            return Err(EvalError::EmptyImageSet);
        }
        let pixels: Vec<&[f64]> = images.iter().map(|i| i.pixels.as_slice()).collect();
        let paths: Vec<&TaxonPath> = images.iter().map(|i| &i.path).collect();
        let targets = self.targets(&paths)?;
        let preds = self.predict(&pixels)?;
        Ok(targets
            .iter()
            .enumerate()
            .map(|(level, t)| {
                t.as_ref().map(|t| {
                    let hits = t.iter().zip(&preds).filter(|(&y, p)| p[level] == Some(y)).count();
                    hits as f64 / t.len() as f64
                })
            })
            .collect())
    }

    pub fn param_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for (_, p) in self.store.iter() {
            h.update(p.name.as_bytes());
            h.update(p.value.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let meta = ProbeMeta { config: self.config.clone(), image_size: self.image_size, vocab: self.vocab.clone() };
        Checkpoint {
            meta: serde_json::to_string(&meta).expect("probe metadata serializes"),
            tensors: self.store.iter().map(|(_, p)| StoredTensor::from_tensor(p.name.clone(), &p.value)).collect(),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, EvalError> {
        let meta: ProbeMeta = serde_json::from_str(&ckpt.meta).map_err(CheckpointError::Meta)?;
        let mut probe = Self::build(meta.config, meta.image_size, meta.vocab)?;
        if ckpt.tensors.len() != probe.store.len() {
            return Err(CheckpointError::CorruptHeader("probe tensor count differs from its architecture".into()).into());
        }
        for (_, p) in probe.store.iter_mut() {
            p.value = ckpt.tensor(&p.name, p.value.shape())?;
            p.trainable = false;
        }
        Ok(probe)
    }

    pub fn save(&self, path: &Path) -> Result<(), EvalError> {
        Ok(self.to_checkpoint().save(path)?)
    }

    pub fn load(path: &Path) -> Result<Self, EvalError> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// Trains a probe on real images for the first `levels` taxonomy levels.
/// Classes are the level prefixes present in `tree`.
pub fn train_probe<T: Scalar>(
    train: &[LabeledImage],
    tree: &TaxonomyTree,
    levels: usize,
    image_size: usize,
    config: &ProbeConfig,
) -> Result<Probe<T>, EvalError> {
    if train.is_empty() {
        return Err(EvalError::Degenerate("no training images".into()));
    }
    let vocab: Vec<Vec<String>> = (0..levels).map(|l| tree.level_vocabulary(TaxonomyLevel::at(l))).collect();
    for (level, v) in vocab.iter().enumerate() {
        if v.len() < 2 {
            warn!("probe: level {level} has a single class; its head is skipped");
        }
    }
    if vocab.iter().all(|v| v.len() < 2) {
        return Err(EvalError::Degenerate("no level has two or more classes".into()));
    }
    let mut probe = Probe::<T>::build(config.clone(), image_size, vocab)?;
    let mut opt = AdamW::<T>::new(AdamWConfig { weight_decay: 0.0, ..AdamWConfig::default() });
    let mut r = rng::stream(config.seed, 0x9B0F);
    let paths: Vec<&TaxonPath> = train.iter().map(|i| &i.path).collect();
    let targets = probe.targets(&paths)?;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..config.epochs {
        order.shuffle(&mut r);
        let mut total = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let pixels: Vec<&[f64]> = chunk.iter().map(|&i| train[i].pixels.as_slice()).collect();
            let mut g = Graph::new();
            let x = g.constant(probe.batch_tensor(&pixels)?);
            let (_, logits) = probe.forward(&mut g, x)?;
            let mut loss: Option<Var> = None;
            for (l, t) in logits.iter().zip(&targets) {
                if let (Some(l), Some(t)) = (l, t) {
                    let y: Vec<usize> = chunk.iter().map(|&i| t[i]).collect();
                    let ce = g.cross_entropy(*l, &y)?;
                    loss = Some(match loss {
                        None => ce,
                        Some(acc) => g.add(acc, ce)?,
                    });
                }
            }
            let loss = loss.expect("at least one head");
            total += g.value(loss).item().to_f64().unwrap_or(f64::NAN);
            g.backward(loss, &mut probe.store)?;
            drop(g);
            opt.step(&mut probe.store, config.lr)?;
            probe.store.zero_grad();
        }
        log::debug!("probe epoch {epoch}: mean loss {:.4}", total / order.len().div_ceil(config.batch_size) as f64);
    }
    probe.store.set_all_trainable(false);
    Ok(probe)
}

/// Minimum held-out accuracy for a `classes`-way head: three times chance,
/// or halfway between chance and perfect when three times chance is not
/// below 1.
pub fn reliability_floor(classes: usize) -> f64 {
    let k = classes as f64;
    if 3.0 / k < 1.0 {
        3.0 / k
    } else {
        (1.0 + 1.0 / k) / 2.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelReliability {
    pub level: usize,
    pub classes: usize,
    pub accuracy: Option<f64>,
    pub floor: f64,
    pub reliable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reliability {
    pub levels: Vec<LevelReliability>,
    pub reliable: bool,
}

/// Checks held-out accuracy against [`reliability_floor`] at every level
/// that has a head.
pub fn check_reliability<T: Scalar>(probe: &Probe<T>, held_out: &[LabeledImage]) -> Result<Reliability, EvalError> {
    let acc = probe.accuracy(held_out)?;
    let levels: Vec<LevelReliability> = acc
        .iter()
        .enumerate()
        .map(|(level, a)| {
            let classes = probe.vocab[level].len();
            let floor = reliability_floor(classes);
            LevelReliability { level, classes, accuracy: *a, floor, reliable: a.is_none_or(|a| a >= floor) }
        })
        .collect();
    let reliable = levels.iter().all(|l| l.reliable);
    Ok(Reliability { levels, reliable })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub level: usize,
    /// Fraction of images whose level-`level` prediction matches the claim.
    pub score: f64,
    /// The same fraction for every level `j ≤ level`.
    pub per_level: Vec<f64>,
    pub n: usize,
}

fn hit_rates<T: Scalar>(probe: &Probe<T>, preds: &[Vec<Option<usize>>], claimed: &TaxonPath, level: usize) -> Result<Vec<f64>, EvalError> {
    (0..=level)
        .map(|j| {
            if !probe.has_head(j) {
                return Ok(1.0);
            }
            let y = probe.class_index(j, &claimed.prefix(TaxonomyLevel::at(j)))?;
            Ok(preds.iter().filter(|p| p[j] == Some(y)).count() as f64 / preds.len() as f64)
        })
        .collect()
}

/// Fraction of `images` the probe assigns to `claimed`'s level-`level`
/// class, with the breakdown over shallower levels. Levels with a single
/// class count every image as aligned.
pub fn alignment_score<T: Scalar>(
    probe: &Probe<T>,
    images: &[&[f64]],
    claimed: &TaxonPath,
    level: usize,
) -> Result<AlignmentReport, EvalError> {
    if images.is_empty() {
        return Err(EvalError::EmptyImageSet);
    }
    if level >= probe.levels() {
        return Err(EvalError::UnknownClass { level, class: claimed.prefix(TaxonomyLevel::at(level.min(6))) });
    }
    let preds = probe.predict(images)?;
    let per_level = hit_rates(probe, &preds, claimed, level)?;
    Ok(AlignmentReport { level, score: per_level[level], per_level, n: images.len() })
}

/// Feature mean and unbiased covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct FrechetStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub n: usize,
}

impl FrechetStats {
    pub fn from_features(rows: &[Vec<f64>]) -> Result<Self, EvalError> {
        let n = rows.len();
        if n < 2 {
            return Err(EvalError::EmptyImageSet);
        }
        let f = rows[0].len();
        if let Some(bad) = rows.iter().find(|r| r.len() != f) {
            return Err(EvalError::DimensionMismatch(f, bad.len()));
        }
        if n < f + 1 {
            warn!("frechet: {n} samples for {f} features; covariance is rank deficient");
        }
        let x = DMatrix::from_fn(n, f, |i, j| rows[i][j]);
        let mean = DVector::from_fn(f, |j, _| x.column(j).sum() / n as f64);
        let centered = DMatrix::from_fn(n, f, |i, j| x[(i, j)] - mean[j]);
        let cov = centered.transpose() * &centered / (n as f64 - 1.0);
        Ok(FrechetStats { mean, cov, n })
    }
}

fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let e = SymmetricEigen::new(m.clone());
    let d = DMatrix::from_diagonal(&e.eigenvalues.map(|l| l.max(0.0).sqrt()));
    &e.eigenvectors * d * e.eigenvectors.transpose()
}

/// `Tr((A B)^{1/2})` as `Tr((√A B √A)^{1/2})` on the symmetrized product.
fn trace_sqrt_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let s = sqrt_psd(a);
    let m = &s * b * &s;
    let m = (&m + m.transpose()) * 0.5;
    let e = SymmetricEigen::new(m);
    let mut total = 0.0;
    for &l in e.eigenvalues.iter() {
        if l < -1e-8 {
            warn!("frechet: eigenvalue {l:.3e} of the covariance product clipped to 0");
        }
        total += l.max(0.0).sqrt();
    }
    total
}

/// `‖μ_a − μ_b‖² + Tr(Σ_a + Σ_b − 2 (Σ_a Σ_b)^{1/2})`. The trace term is
/// averaged over both argument orders so the result is exactly symmetric.
pub fn frechet(a: &FrechetStats, b: &FrechetStats) -> Result<f64, EvalError> {
    if a.mean.len() != b.mean.len() {
        return Err(EvalError::DimensionMismatch(a.mean.len(), b.mean.len()));
    }
    let diff = (&a.mean - &b.mean).norm_squared();
    let cross = 0.5 * (trace_sqrt_product(&a.cov, &b.cov) + trace_sqrt_product(&b.cov, &a.cov));
    Ok((diff + (a.cov.trace() + b.cov.trace()) - 2.0 * cross).max(0.0))
}

/// One generated image with the sidecar fields needed for evaluation.
#[derive(Debug, Clone)]
pub struct GeneratedImage {
    pub file: String,
    pub path: TaxonPath,
    pub level: usize,
    pub mode: GuidanceMode,
    pub pixels: Vec<f64>,
}

/// Reads `samples.jsonl` in `dir` and decodes every image it lists, sorted
/// by file name.
pub fn load_generated(dir: &Path, image_size: usize) -> Result<Vec<GeneratedImage>, EvalError> {
    let sidecar = dir.join(SIDECAR_FILE);
    if !sidecar.is_file() {
        return Err(SampleError::Io { path: sidecar.display().to_string(), msg: "sidecar not found".into() }.into());
    }
    let mut records = read_sidecar(&sidecar)?;
    records.sort_by(|a, b| a.file.cmp(&b.file));
    records
        .into_iter()
        .map(|r| {
            let file = dir.join(&r.file);
            let (w, h, rgb) =
                ppm::read_ppm(&file).map_err(|e| EvalError::SidecarMismatch(format!("{}: {e}", r.file)))?;
            if w != image_size || h != image_size {
                return Err(EvalError::SidecarMismatch(format!("{} is {w}x{h}, expected {image_size}", r.file)));
            }
            let path = TaxonPath::parse(&r.path).map_err(|e| EvalError::SidecarMismatch(format!("{}: {e}", r.file)))?;
            Ok(GeneratedImage {
                file: r.file,
                path,
                level: r.level,
                mode: r.mode,
                pixels: rgb.iter().map(|&b| b as f64 / 255.0).collect(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelReport {
    pub level: usize,
    /// Against the real evaluation split; `None` without generated images.
    pub frechet: Option<f64>,
    /// Mean over images.
    pub alignment: Option<f64>,
    /// Mean over categories of the per-category mean.
    pub alignment_by_category: Option<f64>,
    /// Per-image alignment at every level `j ≤ level`.
    pub alignment_per_level: Vec<f64>,
    pub n_generated: usize,
    pub n_real: usize,
}

/// Per-level metrics for images tagged with the level they were
/// conditioned at. Every probe level appears in the report.
pub fn evaluate<T: Scalar>(
    probe: &Probe<T>,
    generated: &[GeneratedImage],
    real: &[LabeledImage],
) -> Result<Vec<LevelReport>, EvalError> {
    if real.is_empty() {
        return Err(EvalError::EmptyImageSet);
    }
    let real_pixels: Vec<&[f64]> = real.iter().map(|i| i.pixels.as_slice()).collect();
    let real_stats = FrechetStats::from_features(&probe.features(&real_pixels)?)?;
    let mut out = Vec::with_capacity(probe.levels());
    for level in 0..probe.levels() {
        let imgs: Vec<&GeneratedImage> = generated.iter().filter(|g| g.level == level).collect();
        if imgs.is_empty() {
            out.push(LevelReport {
                level,
                frechet: None,
                alignment: None,
                alignment_by_category: None,
                alignment_per_level: Vec::new(),
                n_generated: 0,
                n_real: real.len(),
            });
            continue;
        }
        let pixels: Vec<&[f64]> = imgs.iter().map(|g| g.pixels.as_slice()).collect();
        let preds = probe.predict(&pixels)?;
        let mut per_level = vec![0.0; level + 1];
        let mut categories: BTreeMap<String, (f64, usize)> = BTreeMap::new();
        for (g, p) in imgs.iter().zip(&preds) {
            let rates = hit_rates(probe, std::slice::from_ref(p), &g.path, level)?;
            for (acc, r) in per_level.iter_mut().zip(&rates) {
                *acc += r;
            }
            let c = categories.entry(g.path.prefix(TaxonomyLevel::at(level))).or_insert((0.0, 0));
            c.0 += rates[level];
            c.1 += 1;
        }
        let n = imgs.len() as f64;
        per_level.iter_mut().for_each(|v| *v /= n);
        let by_category = categories.values().map(|(s, c)| s / *c as f64).sum::<f64>() / categories.len() as f64;
        let frechet = if imgs.len() >= 2 {
            Some(frechet(&FrechetStats::from_features(&probe.features(&pixels)?)?, &real_stats)?)
        } else {
            None
        };
        out.push(LevelReport {
            level,
            frechet,
            alignment: Some(per_level[level]),
            alignment_by_category: Some(by_category),
            alignment_per_level: per_level,
            n_generated: imgs.len(),
            n_real: real.len(),
        });
    }
    Ok(out)
}
