//! Parameterised layers built on the autodiff tape.

use taxa_numeric::{rng, Graph, ParamId, ParamStore, Result, Scalar, StreamRng, Tensor, Var};

use crate::lora::LoraAdapter;

/// Weight initialisation for a fresh layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Normal(f64),
    /// `N(0, gain² / fan_in)`.
    FanIn(f64),
    Zeros,
}

impl Init {
    fn tensor<T: Scalar>(self, shape: &[usize], fan_in: usize, rng: &mut StreamRng) -> Tensor<T> {
        match self {
            Init::Normal(std) => rng::normal_tensor(rng, shape, std),
            Init::FanIn(gain) => rng::normal_tensor(rng, shape, gain / (fan_in as f64).sqrt()),
            Init::Zeros => Tensor::zeros(shape),
        }
    }
}

/// `y = x Wᵀ + b`, optionally plus a low-rank adapter. `W: [d_out, d_in]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub lora: Option<LoraAdapter>,
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        init: Init,
        rng: &mut StreamRng,
    ) -> Result<Self> {
        let w = store.insert(format!("{name}.w"), init.tensor(&[d_out, d_in], d_in, rng))?;
        let b = store.insert(format!("{name}.b"), Tensor::zeros(&[d_out]))?;
        Ok(Linear { w, b, lora: None })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let y = g.matmul_nt(x, w)?;
        let mut y = g.add(y, b)?;
        if let Some(lora) = &self.lora {
            let d = lora.delta(g, store, x)?;
            y = g.add(y, d)?;
        }
        Ok(y)
    }

    pub fn ids(&self) -> Vec<ParamId> {
        vec![self.w, self.b]
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Result<Self> {
        let gain = store.insert(format!("{name}.gain"), Tensor::full(&[dim], T::one()))?;
        let bias = store.insert(format!("{name}.bias"), Tensor::zeros(&[dim]))?;
        Ok(LayerNorm { gain, bias })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        g.layer_norm(x, gain, bias)
    }

    pub fn ids(&self) -> Vec<ParamId> {
        vec![self.gain, self.bias]
    }
}

/// NHWC convolution with a `[Cout, k, k, Cin]` kernel and per-channel bias.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        init: Init,
        rng: &mut StreamRng,
    ) -> Result<Self> {
        let kernel = store.insert(format!("{name}.k"), init.tensor(&[c_out, k, k, c_in], k * k * c_in, rng))?;
        let bias = store.insert(format!("{name}.b"), Tensor::zeros(&[c_out]))?;
        Ok(Conv2d { kernel, bias, stride, padding: k / 2 })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let k = g.param(store, self.kernel);
        let b = g.param(store, self.bias);
        let y = g.conv2d(x, k, self.stride, self.padding)?;
        g.add(y, b)
    }

    pub fn ids(&self) -> Vec<ParamId> {
        vec![self.kernel, self.bias]
    }
}

/// Multi-head attention from `[N, Sq, D]` queries to `[N, Skv, Dkv]` keys
/// and values.
#[derive(Debug, Clone)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl Attention {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        kv_dim: usize,
        heads: usize,
        init: Init,
        rng: &mut StreamRng,
    ) -> Result<Self> {
        assert!(dim.is_multiple_of(heads), "width {dim} not divisible by {heads} heads");
        Ok(Attention {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, init, rng)?,
            k: Linear::new(store, &format!("{name}.k"), kv_dim, dim, init, rng)?,
            v: Linear::new(store, &format!("{name}.v"), kv_dim, dim, init, rng)?,
            o: Linear::new(store, &format!("{name}.o"), dim, dim, init, rng)?,
            heads,
            dim,
        })
    }

    fn split_heads<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let (n, len) = (s[0], s[1]);
        let dh = self.dim / self.heads;
        let x = g.reshape(x, &[n, len, self.heads, dh])?;
        let x = g.permute(x, &[0, 2, 1, 3])?;
        g.reshape(x, &[n * self.heads, len, dh])
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, xq: Var, xkv: Var) -> Result<Var> {
        let n = g.shape(xq)[0];
        let sq = g.shape(xq)[1];
        let dh = self.dim / self.heads;
        let q = self.q.forward(g, store, xq)?;
        let k = self.k.forward(g, store, xkv)?;
        let v = self.v.forward(g, store, xkv)?;
        let (q, k, v) = (self.split_heads(g, q)?, self.split_heads(g, k)?, self.split_heads(g, v)?);
        let scores = g.matmul_nt(q, k)?;
        let scores = g.scale(scores, T::lit(1.0 / (dh as f64).sqrt()))?;
        let attn = g.softmax(scores, 2)?;
        let out = g.matmul(attn, v)?;
        let out = g.reshape(out, &[n, self.heads, sq, dh])?;
        let out = g.permute(out, &[0, 2, 1, 3])?;
        let out = g.reshape(out, &[n, sq, self.dim])?;
        self.o.forward(g, store, out)
    }

    pub fn projections_mut(&mut self) -> [(&'static str, &mut Linear); 4] {
        [("q", &mut self.q), ("k", &mut self.k), ("v", &mut self.v), ("o", &mut self.o)]
    }

    /// Base projection weights, excluding any adapters.
    pub fn ids(&self) -> Vec<ParamId> {
        [&self.q, &self.k, &self.v, &self.o].iter().flat_map(|l| l.ids()).collect()
    }
}

/// Pre-norm transformer layer: self-attention then a 4x feed-forward, each
/// with a residual connection.
#[derive(Debug, Clone)]
pub struct TransformerLayer {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
}

impl TransformerLayer {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        std: f64,
        rng: &mut StreamRng,
    ) -> Result<Self> {
        let init = Init::Normal(std);
        Ok(TransformerLayer {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim)?,
            attn: Attention::new(store, &format!("{name}.attn"), dim, dim, heads, init, rng)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim)?,
            ff1: Linear::new(store, &format!("{name}.ff1"), dim, 4 * dim, init, rng)?,
            ff2: Linear::new(store, &format!("{name}.ff2"), 4 * dim, dim, init, rng)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = self.ln1.forward(g, store, x)?;
        let a = self.attn.forward(g, store, h, h)?;
        let x = g.add(x, a)?;
        let h = self.ln2.forward(g, store, x)?;
        let h = self.ff1.forward(g, store, h)?;
        let h = g.gelu(h)?;
        let h = self.ff2.forward(g, store, h)?;
        g.add(x, h)
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut ids = self.ln1.ids();
        ids.extend(self.attn.ids());
        ids.extend(self.ln2.ids());
        ids.extend(self.ff1.ids());
        ids.extend(self.ff2.ids());
        ids
    }
}
