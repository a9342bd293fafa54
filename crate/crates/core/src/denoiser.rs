//! Noise schedule, forward diffusion, and the conditional noise predictor.

use rand::Rng;
use serde::{Deserialize, Serialize};
use taxa_numeric::{rng, Graph, ParamId, ParamStore, Result, Scalar, StreamRng, Tensor, TensorError, Var};
use thiserror::Error;

use crate::lora::LoraAdapter;
use crate::nn::{Attention, Conv2d, Init, LayerNorm, Linear};

#[derive(Debug, Error, PartialEq)]
pub enum ScheduleError {
    #[error("invalid schedule: need T >= 2 and 0 < beta_1 <= beta_T < 1, got T={t}, beta=({b1}, {bt})")]
    InvalidBounds { t: usize, b1: f64, bt: f64 },
    #[error("timestep {t} outside 1..={max}")]
    TimestepOutOfRange { t: usize, max: usize },
}

/// Linear variance schedule. Index `t` runs over `1..=T`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(steps: usize, beta_1: f64, beta_t: f64) -> std::result::Result<Self, ScheduleError> {
        let valid = steps >= 2 && beta_1 > 0.0 && beta_1 <= beta_t && beta_t < 1.0;
        if !valid {
            return Err(ScheduleError::InvalidBounds { t: steps, b1: beta_1, bt: beta_t });
        }
        let betas: Vec<f64> =
            (0..steps).map(|i| beta_1 + (beta_t - beta_1) * i as f64 / (steps - 1) as f64).collect();
        Ok(Self::from_betas(betas))
    }

    fn from_betas(betas: Vec<f64>) -> Self {
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(betas.len());
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        NoiseSchedule { betas, alphas, alpha_bars }
    }

    /// A `steps`-long schedule visiting evenly spaced original timesteps,
    /// with betas recomputed so its `ᾱ` match the originals at those
    /// points. Returns the schedule and, for each of its timesteps, the
    /// original timestep the network is queried at. `steps == T` returns
    /// the schedule unchanged.
    pub fn respaced(&self, steps: usize) -> std::result::Result<(NoiseSchedule, Vec<usize>), ScheduleError> {
        let t_max = self.steps();
        if steps == 0 || steps > t_max {
            return Err(ScheduleError::TimestepOutOfRange { t: steps, max: t_max });
        }
        if steps == t_max {
            return Ok((self.clone(), (1..=t_max).collect()));
        }
        let ts: Vec<usize> = (0..steps)
            .map(|i| if steps == 1 { t_max } else { 1 + ((t_max - 1) * i + (steps - 1) / 2) / (steps - 1) })
            .collect();
        let mut prev = 1.0;
        let betas = ts
            .iter()
            .map(|&t| {
                let ab = self.alpha_bar(t);
                let b = 1.0 - ab / prev;
                prev = ab;
                b
            })
            .collect();
        Ok((Self::from_betas(betas), ts))
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn check(&self, t: usize) -> std::result::Result<(), ScheduleError> {
        if t == 0 || t > self.steps() {
            return Err(ScheduleError::TimestepOutOfRange { t, max: self.steps() });
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t - 1]
    }

    /// Reverse-step noise scale, `σ_t = √β_t`.
    pub fn sigma(&self, t: usize) -> f64 {
        self.betas[t - 1].sqrt()
    }
}

/// `x_t = √ᾱ x_0 + √(1 − ᾱ) ε` for a given `ᾱ`.
pub fn forward_noise_with<T: Scalar>(x0: &Tensor<T>, alpha_bar: f64, eps: &Tensor<T>) -> Result<Tensor<T>> {
    if x0.shape() != eps.shape() {
        return Err(TensorError::ShapeMismatch { op: "forward_noise", lhs: x0.shape().to_vec(), rhs: eps.shape().to_vec() });
    }
    let a = T::lit(alpha_bar.sqrt());
    let b = T::lit((1.0 - alpha_bar).sqrt());
    let data = x0.data().iter().zip(eps.data()).map(|(&x, &e)| a * x + b * e).collect();
    Tensor::new(x0.shape(), data)
}

pub fn forward_noise<T: Scalar>(schedule: &NoiseSchedule, x0: &Tensor<T>, t: usize, eps: &Tensor<T>) -> Result<Tensor<T>> {
    schedule.check(t).map_err(|e| TensorError::InvalidArgument { op: "forward_noise", msg: e.to_string() })?;
    forward_noise_with(x0, schedule.alpha_bar(t), eps)
}

/// Sinusoidal embedding `[N, dim]` of integer timesteps.
pub fn timestep_embedding<T: Scalar>(ts: &[usize], dim: usize, max_period: f64) -> Tensor<T> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        let freqs = (0..half).map(|k| (-(max_period.ln()) * k as f64 / half as f64).exp());
        let args: Vec<f64> = freqs.map(|f| t as f64 * f).collect();
        data.extend(args.iter().map(|a| T::lit(a.sin())));
        data.extend(args.iter().map(|a| T::lit(a.cos())));
        data.extend(std::iter::repeat_n(T::zero(), dim - 2 * half));
    }
    Tensor::new(&[ts.len(), dim], data).expect("embedding dims agree")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub image_size: usize,
    pub channels: [usize; 2],
    pub time_dim: usize,
    pub cond_dim: usize,
    pub heads: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    /// Timesteps of the schedule; sets the embedding's max period to 10·T.
    pub steps: usize,
}

/// `x + conv(gelu(norm(x) + temb))`.
#[derive(Debug, Clone)]
struct ResBlock {
    name: String,
    norm: LayerNorm,
    temb: Linear,
    conv: Conv2d,
}

impl ResBlock {
    fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, c: usize, tdim: usize, rng: &mut StreamRng) -> Result<Self> {
        Ok(ResBlock {
            name: name.to_string(),
            norm: LayerNorm::new(store, &format!("{name}.norm"), c)?,
            temb: Linear::new(store, &format!("{name}.temb"), tdim, c, Init::FanIn(1.0), rng)?,
            conv: Conv2d::new(store, &format!("{name}.conv"), c, c, 3, 1, Init::FanIn(1.0), rng)?,
        })
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<T>, s: &ParamStore<T>, x: Var, temb: Var) -> Result<Var> {
        let run = |g: &mut Graph<T>| -> Result<Var> {
            let h = self.norm.forward(g, s, x)?;
            let tb = self.temb.forward(g, s, temb)?;
            let h = g.add_per_sample(h, tb)?;
            let h = g.gelu(h)?;
            let h = self.conv.forward(g, s, h)?;
            g.add(x, h)
        };
        run(g).map_err(|e| e.in_layer(&self.name))
    }

    fn ids(&self) -> Vec<ParamId> {
        [self.norm.ids(), self.temb.ids(), self.conv.ids()].concat()
    }
}

/// Upsample, add the skip, convolve, add temb, normalise, gelu.
#[derive(Debug, Clone)]
struct UpBlock {
    name: String,
    conv: Conv2d,
    temb: Linear,
    norm: LayerNorm,
}

impl UpBlock {
    fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        tdim: usize,
        rng: &mut StreamRng,
    ) -> Result<Self> {
        Ok(UpBlock {
            name: name.to_string(),
            conv: Conv2d::new(store, &format!("{name}.conv"), c_in, c_out, 3, 1, Init::FanIn(1.0), rng)?,
            temb: Linear::new(store, &format!("{name}.temb"), tdim, c_out, Init::FanIn(1.0), rng)?,
            norm: LayerNorm::new(store, &format!("{name}.norm"), c_out)?,
        })
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<T>, s: &ParamStore<T>, x: Var, skip: Var, temb: Var) -> Result<Var> {
        let run = |g: &mut Graph<T>| -> Result<Var> {
            let up = g.upsample2(x)?;
            let h = g.add(up, skip)?;
            let h = self.conv.forward(g, s, h)?;
            let tb = self.temb.forward(g, s, temb)?;
            let h = g.add_per_sample(h, tb)?;
            let h = self.norm.forward(g, s, h)?;
            g.gelu(h)
        };
        run(g).map_err(|e| e.in_layer(&self.name))
    }

    fn ids(&self) -> Vec<ParamId> {
        [self.conv.ids(), self.temb.ids(), self.norm.ids()].concat()
    }
}

/// Condition-independent activations, reusable across several conditions
/// for the same `(x_t, t)`.
#[derive(Debug, Clone, Copy)]
pub struct Trunk {
    pub skip1: Var,
    pub skip2: Var,
    pub mid: Var,
    pub temb: Var,
}

/// Small U-Net: two stride-2 stages (32 then 64 channels), a bottleneck
/// with one cross-attention block reading the condition, and two
/// upsampling stages with skip connections.
#[derive(Debug, Clone)]
pub struct DenoiserNet {
    pub config: DenoiserConfig,
    temb1: Linear,
    temb2: Linear,
    conv_in: Conv2d,
    block1: ResBlock,
    down1: Conv2d,
    block2: ResBlock,
    down2: Conv2d,
    mid1: ResBlock,
    xattn_norm: LayerNorm,
    cond_norm: LayerNorm,
    pub xattn: Attention,
    mid2: ResBlock,
    up2: UpBlock,
    up1: UpBlock,
    out_norm: LayerNorm,
    conv_out: Conv2d,
}

impl DenoiserNet {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, config: DenoiserConfig, rng: &mut StreamRng) -> Result<Self> {
        let [c1, c2] = config.channels;
        let td = config.time_dim;
        if !config.image_size.is_multiple_of(4) {
            return Err(TensorError::InvalidArgument { op: "denoiser", msg: "image size must be divisible by 4".into() });
        }
        let mut xattn = Attention::new(store, "den.xattn", c2, config.cond_dim, config.heads, Init::FanIn(1.0), rng)?;
        for (proj, lin) in xattn.projections_mut() {
            let (d_out, d_in) = {
                let w = &store.get(lin.w).value;
                (w.shape()[0], w.shape()[1])
            };
            lin.lora = Some(LoraAdapter::init(
                store,
                &format!("xattn.{proj}"),
                d_in,
                d_out,
                config.lora_rank,
                config.lora_alpha,
                rng,
            )?);
        }
        Ok(DenoiserNet {
            config,
            temb1: Linear::new(store, "den.temb1", td, td, Init::FanIn(1.0), rng)?,
            temb2: Linear::new(store, "den.temb2", td, td, Init::FanIn(1.0), rng)?,
            conv_in: Conv2d::new(store, "den.conv_in", 3, c1, 3, 1, Init::FanIn(1.0), rng)?,
            block1: ResBlock::new(store, "den.block1", c1, td, rng)?,
            down1: Conv2d::new(store, "den.down1", c1, c2, 3, 2, Init::FanIn(1.0), rng)?,
            block2: ResBlock::new(store, "den.block2", c2, td, rng)?,
            down2: Conv2d::new(store, "den.down2", c2, c2, 3, 2, Init::FanIn(1.0), rng)?,
            mid1: ResBlock::new(store, "den.mid1", c2, td, rng)?,
            xattn_norm: LayerNorm::new(store, "den.xattn_norm", c2)?,
            cond_norm: LayerNorm::new(store, "den.xattn_cond_norm", config.cond_dim)?,
            xattn,
            mid2: ResBlock::new(store, "den.mid2", c2, td, rng)?,
            up2: UpBlock::new(store, "den.up2", c2, c1, td, rng)?,
            up1: UpBlock::new(store, "den.up1", c1, c1, td, rng)?,
            out_norm: LayerNorm::new(store, "den.out_norm", c1)?,
            conv_out: Conv2d::new(store, "den.conv_out", c1, 3, 3, 1, Init::Zeros, rng)?,
        })
    }

    pub fn lora_adapters(&self) -> Vec<&LoraAdapter> {
        [&self.xattn.q, &self.xattn.k, &self.xattn.v, &self.xattn.o].iter().filter_map(|l| l.lora.as_ref()).collect()
    }

    pub fn lora_ids(&self) -> Vec<ParamId> {
        self.lora_adapters().iter().flat_map(|a| [a.a, a.b]).collect()
    }

    /// Every base weight of the network (everything except adapters).
    pub fn backbone_ids(&self) -> Vec<ParamId> {
        [
            self.temb1.ids(),
            self.temb2.ids(),
            self.conv_in.ids(),
            self.block1.ids(),
            self.down1.ids(),
            self.block2.ids(),
            self.down2.ids(),
            self.mid1.ids(),
            self.xattn_norm.ids(),
            self.cond_norm.ids(),
            self.xattn.ids(),
            self.mid2.ids(),
            self.up2.ids(),
            self.up1.ids(),
            self.out_norm.ids(),
            self.conv_out.ids(),
        ]
        .concat()
    }

    /// Computes everything upstream of the cross-attention.
    pub fn trunk<T: Scalar>(&self, g: &mut Graph<T>, s: &ParamStore<T>, x: Var, ts: &[usize]) -> Result<Trunk> {
        let shape = g.shape(x).to_vec();
        let n = self.config.image_size;
        if shape.len() != 4 || shape[0] != ts.len() || shape[1..] != [n, n, 3] {
            return Err(TensorError::ShapeMismatch { op: "denoiser", lhs: shape, rhs: vec![ts.len(), n, n, 3] });
        }
        let sin = g.constant(timestep_embedding(ts, self.config.time_dim, 10.0 * self.config.steps as f64));
        let temb = (|| {
            let h = self.temb1.forward(g, s, sin)?;
            let h = g.gelu(h)?;
            self.temb2.forward(g, s, h)
        })()
        .map_err(|e| e.in_layer("den.temb"))?;
        let h = self.conv_in.forward(g, s, x).map_err(|e| e.in_layer("den.conv_in"))?;
        let skip1 = self.block1.forward(g, s, h, temb)?;
        let h = self.down1.forward(g, s, skip1).map_err(|e| e.in_layer("den.down1"))?;
        let skip2 = self.block2.forward(g, s, h, temb)?;
        let h = self.down2.forward(g, s, skip2).map_err(|e| e.in_layer("den.down2"))?;
        let mid = self.mid1.forward(g, s, h, temb)?;
        Ok(Trunk { skip1, skip2, mid, temb })
    }

    /// Cross-attention onto `cond: [N, L, d]` and the decoder.
    pub fn head<T: Scalar>(&self, g: &mut Graph<T>, s: &ParamStore<T>, trunk: &Trunk, cond: Var) -> Result<Var> {
        let ms = g.shape(trunk.mid).to_vec();
        let (n, hh, ww, c) = (ms[0], ms[1], ms[2], ms[3]);
        let h = (|| {
            let tokens = g.reshape(trunk.mid, &[n, hh * ww, c])?;
            let q = self.xattn_norm.forward(g, s, tokens)?;
            // summed module outputs start out small; normalising puts every
            // level's contribution on the scale the key/value maps expect
            let kv = self.cond_norm.forward(g, s, cond)?;
            let a = self.xattn.forward(g, s, q, kv)?;
            let tokens = g.add(tokens, a)?;
            g.reshape(tokens, &[n, hh, ww, c])
        })()
        .map_err(|e| e.in_layer("den.xattn"))?;
        let h = self.mid2.forward(g, s, h, trunk.temb)?;
        let h = self.up2.forward(g, s, h, trunk.skip2, trunk.temb)?;
        let h = self.up1.forward(g, s, h, trunk.skip1, trunk.temb)?;
        (|| {
            let h = self.out_norm.forward(g, s, h)?;
            let h = g.gelu(h)?;
            self.conv_out.forward(g, s, h)
        })()
        .map_err(|e| e.in_layer("den.out"))
    }

    /// `ε̂(x_t, t, c)` with `x_t: [N, H, W, 3]`.
    pub fn predict_noise<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        s: &ParamStore<T>,
        x: Var,
        ts: &[usize],
        cond: Var,
    ) -> Result<Var> {
        let trunk = self.trunk(g, s, x, ts)?;
        self.head(g, s, &trunk, cond)
    }
}

/// Noise draws for one training batch.
#[derive(Debug, Clone)]
pub struct NoisedBatch<T> {
    pub ts: Vec<usize>,
    pub eps: Tensor<T>,
    pub x_t: Tensor<T>,
    /// `false` where the condition is dropped to null.
    pub keep: Vec<bool>,
}

impl<T: Scalar> NoisedBatch<T> {
    /// Draws `t ~ U{1..T}` per sample, then `ε ~ N(0, I)`, then the
    /// condition-dropout coin flips, in that order.
    pub fn draw(schedule: &NoiseSchedule, x0: &Tensor<T>, dropout: f64, rng: &mut StreamRng) -> Result<Self> {
        let n = x0.shape()[0];
        let per = x0.len() / n;
        let ts: Vec<usize> = (0..n).map(|_| rng.random_range(1..=schedule.steps())).collect();
        let eps = rng::normal_tensor::<T>(rng, x0.shape(), 1.0);
        let keep: Vec<bool> = (0..n).map(|_| dropout <= 0.0 || !rng.random_bool(dropout)).collect();
        let mut x_t = Vec::with_capacity(x0.len());
        for (k, &t) in ts.iter().enumerate() {
            let ab = schedule.alpha_bar(t);
            let (a, b) = (T::lit(ab.sqrt()), T::lit((1.0 - ab).sqrt()));
            let xs = &x0.data()[k * per..(k + 1) * per];
            let es = &eps.data()[k * per..(k + 1) * per];
            x_t.extend(xs.iter().zip(es).map(|(&x, &e)| a * x + b * e));
        }
        Ok(NoisedBatch { ts, x_t: Tensor::new(x0.shape(), x_t)?, eps, keep })
    }
}

/// Batch mean of the per-sample squared error `‖ε − ε̂‖²`.
pub fn noise_loss<T: Scalar>(g: &mut Graph<T>, eps_hat: Var, eps: Var) -> Result<Var> {
    let shape = g.shape(eps).to_vec();
    let per_sample = shape[1..].iter().product::<usize>();
    let m = g.mse(eps_hat, eps)?;
    g.scale(m, T::lit(per_sample as f64))
}
