//! Conditioning signal `c^(i)`: a frozen hash embedder feeding one small
//! trainable transformer per taxonomy level, summed token-wise over levels.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use taxa_numeric::{rng, Graph, ParamId, ParamStore, Scalar, StreamRng, Tensor, TensorError, Var};
use thiserror::Error;

use crate::nn::{Init, LayerNorm, Linear, TransformerLayer};
use crate::taxonomy::{TaxonPath, TaxonomyLevel};

pub const MODULE_INIT_STD: f64 = 0.02;

#[derive(Debug, Error)]
pub enum ConditionError {
    #[error("cannot freeze through level {requested}: levels are trained through {trained_through:?}")]
    OutOfOrder { requested: usize, trained_through: Option<usize> },
    #[error("level {level} is outside the configured depth {depth}")]
    LevelOutOfRange { level: usize, depth: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConditionConfig {
    /// Number of taxonomy levels in use (top-k).
    pub depth: usize,
    pub tokens: usize,
    pub dim: usize,
    pub heads: usize,
    pub seed: u64,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Frozen token embedder: each token maps through a seeded hash to a fixed
/// random unit vector; short names are padded with a fixed pad vector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BaseEmbedder {
    pub seed: u64,
    pub tokens: usize,
    pub dim: usize,
}

impl BaseEmbedder {
    pub fn tokenize(name: &str) -> Vec<&str> {
        name.split(|c: char| c.is_whitespace() || c == '-').filter(|t| !t.is_empty()).collect()
    }

    fn unit_vector(&self, token: &str) -> Vec<f64> {
        let mut r = rng::stream(self.seed, fnv1a(token.as_bytes()));
        let v: Vec<f64> = rng::normal_vec(&mut r, self.dim, 1.0);
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / norm).collect()
    }

    /// `[L, d]` embedding of a truncated name. Names longer than `L`
    /// tokens keep their last (most specific) `L` tokens.
    pub fn embed(&self, name: &str) -> Vec<f64> {
        let toks = Self::tokenize(name);
        let start = toks.len().saturating_sub(self.tokens);
        let mut out = Vec::with_capacity(self.tokens * self.dim);
        for t in &toks[start..] {
            out.extend(self.unit_vector(t));
        }
        // the empty string never occurs as a token, so it keys the pad vector
        let pad = self.unit_vector("");
        while out.len() < self.tokens * self.dim {
            out.extend_from_slice(&pad);
        }
        out
    }

    /// `E_0 .. E_level` for one path.
    pub fn embed_levels(&self, path: &TaxonPath, level: usize) -> Vec<Vec<f64>> {
        (0..=level).map(|j| self.embed(&path.prefix(TaxonomyLevel::at(j)))).collect()
    }

    /// Batch `[N, L, d]` of level-`level` embeddings.
    pub fn embed_batch<T: Scalar>(&self, paths: &[&TaxonPath], level: usize) -> Tensor<T> {
        let mut data = Vec::with_capacity(paths.len() * self.tokens * self.dim);
        for p in paths {
            data.extend(self.embed(&p.prefix(TaxonomyLevel::at(level))).into_iter().map(T::lit));
        }
        Tensor::new(&[paths.len(), self.tokens, self.dim], data).expect("embedding dims agree")
    }
}

/// Two transformer layers, a final norm and a zero-initialised output
/// projection, so a fresh module contributes exactly zero.
#[derive(Debug, Clone)]
pub struct LevelModule {
    pub level: usize,
    pub layers: [TransformerLayer; 2],
    pub ln_out: LayerNorm,
    pub proj_out: Linear,
}

impl LevelModule {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        level: usize,
        dim: usize,
        heads: usize,
        rng: &mut StreamRng,
    ) -> Result<Self, TensorError> {
        let name = format!("cond.level{level}");
        Ok(LevelModule {
            level,
            layers: [
                TransformerLayer::new(store, &format!("{name}.layer0"), dim, heads, MODULE_INIT_STD, rng)?,
                TransformerLayer::new(store, &format!("{name}.layer1"), dim, heads, MODULE_INIT_STD, rng)?,
            ],
            ln_out: LayerNorm::new(store, &format!("{name}.ln_out"), dim)?,
            proj_out: Linear::new(store, &format!("{name}.out"), dim, dim, Init::Zeros, rng)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, e: Var) -> Result<Var, TensorError> {
        let mut h = e;
        for layer in &self.layers {
            h = layer.forward(g, store, h)?;
        }
        let h = self.ln_out.forward(g, store, h)?;
        self.proj_out.forward(g, store, h)
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self.layers.iter().flat_map(|l| l.ids()).collect();
        ids.extend(self.ln_out.ids());
        ids.extend(self.proj_out.ids());
        ids
    }
}

#[derive(Debug, Clone)]
pub struct ConditionStack {
    pub config: ConditionConfig,
    pub embedder: BaseEmbedder,
    pub modules: Vec<LevelModule>,
    trained_through: Option<usize>,
    active_level: Option<usize>,
}

impl ConditionStack {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        config: ConditionConfig,
        rng: &mut StreamRng,
    ) -> Result<Self, TensorError> {
        let modules = (0..config.depth)
            .map(|level| LevelModule::new(store, level, config.dim, config.heads, rng))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(ConditionStack {
            config,
            embedder: BaseEmbedder { seed: config.seed, tokens: config.tokens, dim: config.dim },
            modules,
            trained_through: None,
            active_level: None,
        })
    }

    pub fn depth(&self) -> usize {
        self.modules.len()
    }

    pub fn trained_through(&self) -> Option<usize> {
        self.trained_through
    }

    pub fn active_level(&self) -> Option<usize> {
        self.active_level
    }

    /// Deepest level whose module may contribute.
    pub fn usable(&self) -> Option<usize> {
        self.trained_through.max(self.active_level)
    }

    fn check_level(&self, level: usize) -> Result<(), ConditionError> {
        if level >= self.depth() {
            return Err(ConditionError::LevelOutOfRange { level, depth: self.depth() });
        }
        Ok(())
    }

    /// Marks `level` as the module currently being trained.
    pub fn set_active(&mut self, level: Option<usize>) -> Result<(), ConditionError> {
        if let Some(l) = level {
            self.check_level(l)?;
        }
        self.active_level = level;
        Ok(())
    }

    /// Restores bookkeeping from a checkpoint.
    pub fn restore_progress(&mut self, trained_through: Option<usize>, active_level: Option<usize>) -> Result<(), ConditionError> {
        for l in trained_through.iter().chain(active_level.iter()) {
            self.check_level(*l)?;
        }
        self.trained_through = trained_through;
        self.active_level = active_level;
        Ok(())
    }

    /// Freezes `M_0 .. M_level` and records them as trained.
    pub fn freeze_through<T: Scalar>(&mut self, store: &mut ParamStore<T>, level: usize) -> Result<(), ConditionError> {
        self.check_level(level)?;
        let next = self.trained_through.map_or(0, |t| t + 1);
        if level > next {
            return Err(ConditionError::OutOfOrder { requested: level, trained_through: self.trained_through });
        }
        for m in &self.modules[..=level] {
            store.freeze(&m.ids());
        }
        self.trained_through = Some(self.trained_through.map_or(level, |t| t.max(level)));
        if self.active_level.is_some_and(|a| a <= level) {
            self.active_level = None;
        }
        Ok(())
    }

    /// `c^(level) = Σ_{j ≤ min(level, usable)} M_j(E_j)`, summed in level
    /// order so each partial sum is exactly the shallower condition.
    /// Returns the null condition when no module is usable yet.
    pub fn encode<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        paths: &[&TaxonPath],
        level: usize,
    ) -> Result<Var, ConditionError> {
        self.check_level(level)?;
        let Some(usable) = self.usable() else {
            return Ok(g.constant(self.null_condition(paths.len())));
        };
        let mut c: Option<Var> = None;
        for j in 0..=level.min(usable) {
            let trainable = g.grad_enabled() && self.modules[j].ids().iter().any(|&id| store.get(id).requires_grad());
            let m = if trainable {
                let e = g.constant(self.embedder.embed_batch(paths, j));
                self.modules[j].forward(g, store, e)?
            } else {
                g.constant(self.frozen_output(store, paths, j)?)
            };
            c = Some(match c {
                None => m,
                Some(acc) => g.add(acc, m)?,
            });
        }
        Ok(c.expect("level 0 always contributes"))
    }

    /// `M_j(E_j)` evaluated once per distinct level-`j` prefix and
    /// scattered back to batch order.
    fn frozen_output<T: Scalar>(&self, store: &ParamStore<T>, paths: &[&TaxonPath], j: usize) -> Result<Tensor<T>, TensorError> {
        let mut unique: Vec<&TaxonPath> = Vec::new();
        let mut slot = Vec::with_capacity(paths.len());
        let mut seen: BTreeMap<String, usize> = BTreeMap::new();
        for p in paths {
            let key = p.prefix(TaxonomyLevel::at(j));
            let idx = *seen.entry(key).or_insert_with(|| {
                unique.push(p);
                unique.len() - 1
            });
            slot.push(idx);
        }
        let mut g = Graph::inference();
        let e = g.constant(self.embedder.embed_batch(&unique, j));
        let out = self.modules[j].forward(&mut g, store, e)?;
        let per = self.config.tokens * self.config.dim;
        let src = g.value(out).data();
        let mut data = Vec::with_capacity(paths.len() * per);
        for &u in &slot {
            data.extend_from_slice(&src[u * per..(u + 1) * per]);
        }
        Tensor::new(&[paths.len(), self.config.tokens, self.config.dim], data)
    }

    /// Inference-only convenience returning the condition tensor.
    pub fn encode_tensor<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        paths: &[&TaxonPath],
        level: usize,
    ) -> Result<Tensor<T>, ConditionError> {
        let mut g = Graph::inference();
        let c = self.encode(&mut g, store, paths, level)?;
        Ok(g.value(c).clone())
    }

    /// All-zero `[n, L, d]` condition.
    pub fn null_condition<T: Scalar>(&self, n: usize) -> Tensor<T> {
        Tensor::zeros(&[n, self.config.tokens, self.config.dim])
    }

    /// Replaces the condition of every sample with `keep[k] == false` by
    /// the null condition.
    pub fn apply_dropout<T: Scalar>(&self, g: &mut Graph<T>, c: Var, keep: &[bool]) -> Result<Var, TensorError> {
        if keep.iter().all(|&k| k) {
            return Ok(c);
        }
        let per = self.config.tokens * self.config.dim;
        let mut mask = Vec::with_capacity(keep.len() * per);
        for &k in keep {
            mask.extend(std::iter::repeat_n(if k { T::one() } else { T::zero() }, per));
        }
        let m = g.constant(Tensor::new(g.shape(c), mask)?);
        let dropped = g.mul(c, m)?;
        // 0 * negative is -0.0; adding +0 normalises it to the null bit pattern
        let zero = g.constant(Tensor::zeros(g.shape(c)));
        g.add(dropped, zero)
    }

    pub fn module_ids(&self, level: usize) -> Vec<ParamId> {
        self.modules[level].ids()
    }

    pub fn all_ids(&self) -> Vec<ParamId> {
        self.modules.iter().flat_map(|m| m.ids()).collect()
    }
}
