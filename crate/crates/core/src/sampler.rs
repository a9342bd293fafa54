//! Reverse diffusion with classifier-free or taxonomy-anchored guidance.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use taxa_numeric::{rng, Graph, Scalar, Tensor, TensorError};
use thiserror::Error;

use crate::condition::ConditionError;
use crate::config::GuidanceMode;
use crate::dataset::species_slug;
use crate::denoiser::NoiseSchedule;
use crate::ppm;
use crate::taxonomy::{TaxonPath, TaxonomyLevel};
use crate::trainer::Project;

pub const SIDECAR_FILE: &str = "samples.jsonl";

/// Label mixed into the per-image stream ids so they never collide with
/// training streams.
const SAMPLE_STREAM: u64 = 0x5A3B_1E00;

#[derive(Debug, Error)]
pub enum SampleError {
    #[error("level {level} is not trained yet (trained through {trained_through:?})")]
    UntrainedLevel { level: usize, trained_through: Option<usize> },
    #[error("unknown taxonomy path {0}")]
    UnknownPath(String),
    #[error("invalid sampling request: {0}")]
    Invalid(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("sample output {path}: {msg}")]
    Io { path: String, msg: String },
}

impl From<ConditionError> for SampleError {
    fn from(e: ConditionError) -> Self {
        match e {
            ConditionError::Tensor(t) => SampleError::Tensor(t),
            other => SampleError::Invalid(other.to_string()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GuidanceConfig {
    pub mode: GuidanceMode,
    pub scale: f64,
    pub level: usize,
    /// Reference level of taxa guidance; 0 unless experimenting.
    pub anchor: usize,
}

impl GuidanceConfig {
    pub fn new(mode: GuidanceMode, scale: f64, level: usize) -> Self {
        GuidanceConfig { mode, scale, level, anchor: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleRun {
    pub seed: u64,
    pub steps: usize,
    /// Images per network call.
    pub batch: usize,
}

fn combine<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>, w: f64) -> Result<Tensor<T>, TensorError> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch { op, lhs: a.shape().to_vec(), rhs: b.shape().to_vec() });
    }
    if w == 0.0 {
        return Ok(a.clone());
    }
    let wt = T::lit(w);
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| if x == y { x } else { x + wt * (x - y) }).collect();
    Tensor::new(a.shape(), data)
}

/// `(1 + w) ε_c − w ε_u`, evaluated as `ε_c + w (ε_c − ε_u)`; equal
/// inputs and `w = 0` return `ε_c` bit for bit.
pub fn combine_cfg<T: Scalar>(eps_c: &Tensor<T>, eps_u: &Tensor<T>, w: f64) -> Result<Tensor<T>, TensorError> {
    combine("combine_cfg", eps_c, eps_u, w)
}

/// `(1 + w) ε_i − w ε_0` with the anchor prediction in place of the
/// unconditional one.
pub fn combine_taxa<T: Scalar>(eps_i: &Tensor<T>, eps_0: &Tensor<T>, w: f64) -> Result<Tensor<T>, TensorError> {
    combine("combine_taxa", eps_i, eps_0, w)
}

/// Scalars of one reverse step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepCoefficients {
    pub alpha: f64,
    pub beta: f64,
    pub alpha_bar: f64,
    pub sigma: f64,
}

impl StepCoefficients {
    pub fn at(schedule: &NoiseSchedule, t: usize) -> Self {
        StepCoefficients {
            alpha: schedule.alpha(t),
            beta: schedule.beta(t),
            alpha_bar: schedule.alpha_bar(t),
            sigma: schedule.sigma(t),
        }
    }
}

/// `(x_t − β/√(1−ᾱ) ε̃) / √α + σ z`, with no noise term when `z` is `None`.
pub fn reverse_step_with<T: Scalar>(
    x_t: &Tensor<T>,
    eps: &Tensor<T>,
    k: StepCoefficients,
    z: Option<&Tensor<T>>,
) -> Result<Tensor<T>, TensorError> {
    for other in std::iter::once(eps).chain(z) {
        if other.shape() != x_t.shape() {
            return Err(TensorError::ShapeMismatch { op: "reverse_step", lhs: x_t.shape().to_vec(), rhs: other.shape().to_vec() });
        }
    }
    let inv = T::lit(1.0 / k.alpha.sqrt());
    let c = T::lit(k.beta / (1.0 - k.alpha_bar).sqrt());
    let mut out: Vec<T> = x_t.data().iter().zip(eps.data()).map(|(&x, &e)| inv * (x - c * e)).collect();
    if let Some(z) = z {
        let s = T::lit(k.sigma);
        for (o, &zv) in out.iter_mut().zip(z.data()) {
            *o = *o + s * zv;
        }
    }
    Tensor::new(x_t.shape(), out)
}

/// One ancestral step at schedule index `t`; `z` is ignored at `t = 1`.
pub fn reverse_step<T: Scalar>(
    x_t: &Tensor<T>,
    t: usize,
    eps: &Tensor<T>,
    schedule: &NoiseSchedule,
    z: Option<&Tensor<T>>,
) -> Result<Tensor<T>, TensorError> {
    schedule.check(t).map_err(|e| TensorError::InvalidArgument { op: "reverse_step", msg: e.to_string() })?;
    reverse_step_with(x_t, eps, StepCoefficients::at(schedule, t), if t > 1 { z } else { None })
}

fn check_request<T: Scalar>(project: &Project<T>, paths: &[&TaxonPath], g: &GuidanceConfig, run: &SampleRun) -> Result<(), SampleError> {
    let depth = project.stack.depth();
    if g.level >= depth {
        return Err(SampleError::Invalid(format!("level {} outside the configured {depth} levels", g.level)));
    }
    if !(g.scale >= 0.0) {
        return Err(SampleError::Invalid(format!("guidance scale must be >= 0, got {}", g.scale)));
    }
    if run.steps == 0 || run.steps > project.schedule.steps() || run.batch == 0 {
        return Err(SampleError::Invalid(format!("steps must be in 1..={}", project.schedule.steps())));
    }
    if g.mode == GuidanceMode::Taxa && g.anchor > g.level {
        return Err(SampleError::Invalid(format!("anchor level {} is deeper than level {}", g.anchor, g.level)));
    }
    let trained = project.stack.trained_through();
    if trained.is_none_or(|t| t < g.level) {
        return Err(SampleError::UntrainedLevel { level: g.level, trained_through: trained });
    }
    for p in paths {
        if !project.tree.contains(p) {
            return Err(SampleError::UnknownPath(p.full_name()));
        }
    }
    Ok(())
}

/// Generates one image per `(path, index)` job. Image `index` starts from
/// noise drawn from its own stream of `run.seed` and draws its step noise
/// from that stream too, so it does not depend on batch composition.
/// Returns pixels in `[0, 1]`, `H x W x 3` per image.
pub fn sample_jobs<T: Scalar>(
    project: &Project<T>,
    jobs: &[(TaxonPath, u64)],
    guidance: &GuidanceConfig,
    run: &SampleRun,
) -> Result<Vec<Vec<f64>>, SampleError> {
    let paths: Vec<&TaxonPath> = jobs.iter().map(|(p, _)| p).collect();
    check_request(project, &paths, guidance, run)?;
    let (schedule, net_ts) = project.schedule.respaced(run.steps).map_err(|e| SampleError::Invalid(e.to_string()))?;
    let size = project.config.data.spec.image_size;
    let per = size * size * 3;
    let mut out = Vec::with_capacity(jobs.len());
    for chunk in jobs.chunks(run.batch) {
        let n = chunk.len();
        let chunk_paths: Vec<&TaxonPath> = chunk.iter().map(|(p, _)| p).collect();
        let mut streams: Vec<_> =
            chunk.iter().map(|&(_, k)| rng::stream(run.seed, rng::split(SAMPLE_STREAM, k))).collect();
        let mut x_data = Vec::with_capacity(n * per);
        for r in streams.iter_mut() {
            x_data.extend(rng::normal_vec::<T>(r, per, 1.0));
        }
        let mut x = Tensor::new(&[n, size, size, 3], x_data)?;
        let cond = project.stack.encode_tensor(&project.store, &chunk_paths, guidance.level)?;
        let reference = match guidance.mode {
            GuidanceMode::None => None,
            GuidanceMode::Cfg => Some(project.stack.null_condition::<T>(n)),
            GuidanceMode::Taxa => Some(project.stack.encode_tensor(&project.store, &chunk_paths, guidance.anchor)?),
        };
        for s in (1..=schedule.steps()).rev() {
            let ts = vec![net_ts[s - 1]; n];
            let mut g = Graph::inference();
            let xv = g.constant(x.clone());
            let trunk = project.net.trunk(&mut g, &project.store, xv, &ts)?;
            let c = g.constant(cond.clone());
            let eps_c = project.net.head(&mut g, &project.store, &trunk, c)?;
            let eps = match (&reference, guidance.mode) {
                (Some(r), mode) if guidance.scale != 0.0 => {
                    let rv = g.constant(r.clone());
                    let eps_r = project.net.head(&mut g, &project.store, &trunk, rv)?;
                    match mode {
                        GuidanceMode::Cfg => combine_cfg(g.value(eps_c), g.value(eps_r), guidance.scale)?,
                        _ => combine_taxa(g.value(eps_c), g.value(eps_r), guidance.scale)?,
                    }
                }
                _ => g.value(eps_c).clone(),
            };
            let z = if s > 1 {
                let mut z_data = Vec::with_capacity(n * per);
                for r in streams.iter_mut() {
                    z_data.extend(rng::normal_vec::<T>(r, per, 1.0));
                }
                Some(Tensor::new(&[n, size, size, 3], z_data)?)
            } else {
                None
            };
            x = reverse_step(&x, s, &eps, &schedule, z.as_ref())?;
        }
        for k in 0..n {
            let img = &x.data()[k * per..(k + 1) * per];
            out.push(img.iter().map(|v| ((v.to_f64().unwrap_or(0.0) + 1.0) / 2.0).clamp(0.0, 1.0)).collect());
        }
    }
    Ok(out)
}

/// `n` images of `path` conditioned at `guidance.level`.
pub fn sample<T: Scalar>(
    project: &Project<T>,
    path: &TaxonPath,
    n: usize,
    guidance: &GuidanceConfig,
    run: &SampleRun,
) -> Result<Vec<Vec<f64>>, SampleError> {
    let jobs: Vec<(TaxonPath, u64)> = (0..n as u64).map(|k| (path.clone(), k)).collect();
    sample_jobs(project, &jobs, guidance, run)
}

/// One line of `samples.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub file: String,
    pub level: usize,
    pub mode: GuidanceMode,
    pub w: f64,
    pub seed: u64,
    pub path: String,
}

pub fn to_rgb8(pixels: &[f64]) -> Vec<u8> {
    pixels.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
}

pub fn sample_file_name(path: &TaxonPath, g: &GuidanceConfig, seed: u64, index: u64) -> String {
    let prefix = species_slug(&path.prefix(TaxonomyLevel::at(g.level)));
    format!("{prefix}_l{}_{}_s{seed}_{index:03}.ppm", g.level, g.mode)
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> SampleError + '_ {
    move |e| SampleError::Io { path: path.display().to_string(), msg: e.to_string() }
}

pub fn read_sidecar(path: &Path) -> Result<Vec<SampleRecord>, SampleError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line)
            .map_err(|e| SampleError::Io { path: path.display().to_string(), msg: format!("line {}: {e}", i + 1) })?;
        out.push(rec);
    }
    Ok(out)
}

/// Writes each image as PPM into `dir` and merges the records into the
/// directory's sidecar, replacing earlier records for the same files.
pub fn write_samples(dir: &Path, images: &[(SampleRecord, Vec<f64>)], size: usize) -> Result<PathBuf, SampleError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let sidecar = dir.join(SIDECAR_FILE);
    let mut records: BTreeMap<String, SampleRecord> = BTreeMap::new();
    if sidecar.exists() {
        for r in read_sidecar(&sidecar)? {
            records.insert(r.file.clone(), r);
        }
    }
    for (rec, pixels) in images {
        let file = dir.join(&rec.file);
        ppm::write_ppm(&file, size, size, &to_rgb8(pixels))
            .map_err(|e| SampleError::Io { path: file.display().to_string(), msg: e.to_string() })?;
        records.insert(rec.file.clone(), rec.clone());
    }
    let mut text = String::new();
    for r in records.values() {
        text.push_str(&serde_json::to_string(r).expect("record serializes"));
        text.push('\n');
    }
    fs::write(&sidecar, text).map_err(io_err(&sidecar))?;
    Ok(sidecar)
}
