//! Low-rank adapters on attention projections.
//!
//! An adapter adds `α · A Bᵀ z` to a frozen projection `W z`, with
//! `A: [d_out, r]` and `B: [d_in, r]`. For row-major activations
//! `x: [.., d_in]` that is `x Wᵀ + α (x B) Aᵀ`.

use taxa_numeric::{gemm, rng, Graph, ParamId, ParamStore, Result, Scalar, StreamRng, Tensor, TensorError, Var};

pub const DEFAULT_RANK: usize = 4;
pub const DEFAULT_ALPHA: f64 = 1.0;
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pub a: ParamId,
    pub b: ParamId,
    pub alpha: f64,
    pub rank: usize,
    pub target: String,
}

impl LoraAdapter {
    /// Registers `lora.<target>.A ~ N(0, 0.02²)` and `lora.<target>.B = 0`.
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        target: &str,
        d_in: usize,
        d_out: usize,
        rank: usize,
        alpha: f64,
        rng: &mut StreamRng,
    ) -> Result<Self> {
        if rank == 0 {
            return Err(TensorError::InvalidArgument { op: "lora", msg: "rank must be at least 1".into() });
        }
        let a = store.insert(format!("lora.{target}.A"), rng::normal_tensor(rng, &[d_out, rank], INIT_STD))?;
        let b = store.insert(format!("lora.{target}.B"), Tensor::zeros(&[d_in, rank]))?;
        Ok(LoraAdapter { a, b, alpha, rank, target: target.to_string() })
    }

    /// The low-rank term `α (x B) Aᵀ` for `x: [.., d_in]`.
    pub fn delta<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let a = g.param(store, self.a);
        let b = g.param(store, self.b);
        let xb = g.matmul(x, b)?;
        let d = g.matmul_nt(xb, a)?;
        g.scale(d, T::lit(self.alpha))
    }

    pub fn freeze<T: Scalar>(&self, store: &mut ParamStore<T>) {
        store.freeze(&[self.a, self.b]);
    }

    /// Dense `α A Bᵀ`, shape `[d_out, d_in]`.
    pub fn effective_update<T: Scalar>(&self, store: &ParamStore<T>) -> Tensor<T> {
        low_rank_product(&store.get(self.a).value, &store.get(self.b).value, self.alpha)
    }
}

fn low_rank_product<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, alpha: f64) -> Tensor<T> {
    let (d_out, r) = (a.shape()[0], a.shape()[1]);
    let d_in = b.shape()[0];
    let mut out = vec![T::zero(); d_out * d_in];
    gemm(d_out, r, d_in, a.data(), false, b.data(), true, &mut out, false);
    let mut t = Tensor::new(&[d_out, d_in], out).expect("dims agree");
    t.scale_assign(T::lit(alpha));
    t
}

/// `W z + α A Bᵀ z` for a single column vector `z`, leaving `W` untouched.
pub fn apply<T: Scalar>(w: &Tensor<T>, a: &Tensor<T>, b: &Tensor<T>, alpha: f64, z: &[T]) -> Result<Vec<T>> {
    let (ws, as_, bs) = (w.shape(), a.shape(), b.shape());
    let ok = ws.len() == 2
        && as_.len() == 2
        && bs.len() == 2
        && as_[0] == ws[0]
        && bs[0] == ws[1]
        && as_[1] == bs[1]
        && z.len() == ws[1];
    if !ok {
        return Err(TensorError::ShapeMismatch { op: "lora_apply", lhs: ws.to_vec(), rhs: as_.to_vec() });
    }
    let (d_out, d_in, r) = (ws[0], ws[1], as_[1]);
    let mut out = vec![T::zero(); d_out];
    gemm(d_out, d_in, 1, w.data(), false, z, false, &mut out, false);
    let mut bz = vec![T::zero(); r];
    // Bᵀ z: B is stored [d_in, r], so read it transposed
    gemm(r, d_in, 1, b.data(), true, z, false, &mut bz, false);
    let mut abz = vec![T::zero(); d_out];
    gemm(d_out, r, 1, a.data(), false, &bz, false, &mut abz, false);
    let alpha = T::lit(alpha);
    for (o, u) in out.iter_mut().zip(abz) {
        *o = *o + alpha * u;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn identity_example() {
        let w = Tensor::<f64>::eye(2);
        let a = t(&[2, 1], &[1.0, 0.0]);
        let b = t(&[2, 1], &[0.0, 1.0]);
        assert_eq!(apply(&w, &a, &b, 1.0, &[3.0, 5.0]).unwrap(), vec![8.0, 5.0]);
    }

    #[test]
    fn zero_b_or_zero_alpha_is_exactly_wz() {
        let w = t(&[2, 3], &[0.3, -1.2, 2.0, 0.7, 0.1, -0.4]);
        let a = t(&[2, 2], &[1.5, -2.0, 0.25, 3.0]);
        let z = [0.9, -1.1, 0.4];
        let base = apply(&w, &a, &Tensor::zeros(&[3, 2]), 1.0, &z).unwrap();
        let b = t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(apply(&w, &a, &b, 0.0, &z).unwrap(), base);
        let mut wz = vec![0.0; 2];
        gemm(2, 3, 1, w.data(), false, &z, false, &mut wz, false);
        assert_eq!(base, wz);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let w = Tensor::<f64>::eye(2);
        let a = t(&[3, 1], &[1.0, 0.0, 0.0]);
        let b = t(&[2, 1], &[0.0, 1.0]);
        assert!(apply(&w, &a, &b, 1.0, &[1.0, 1.0]).is_err());
    }

    #[test]
    fn init_shapes_and_determinism() {
        let mut s1 = ParamStore::<f64>::new();
        let mut s2 = ParamStore::<f64>::new();
        let l1 = LoraAdapter::init(&mut s1, "mid.q", 64, 64, 4, 1.0, &mut rng::stream(3, 0)).unwrap();
        let l2 = LoraAdapter::init(&mut s2, "mid.q", 64, 64, 4, 1.0, &mut rng::stream(3, 0)).unwrap();
        assert_eq!(s1.get(l1.a).value.shape(), &[64, 4]);
        assert_eq!(s1.get(l1.b).value.shape(), &[64, 4]);
        assert_eq!(s1.get(l1.a).value, s2.get(l2.a).value);
        assert!(s1.get(l1.b).value.data().iter().all(|&v| v == 0.0));
        assert_eq!(s1.by_name("lora.mid.q.A").map(|p| p.value.len()), Some(256));
    }

    #[test]
    fn zero_rank_is_rejected() {
        let mut s = ParamStore::<f64>::new();
        assert!(LoraAdapter::init(&mut s, "x", 4, 4, 0, 1.0, &mut rng::stream(0, 0)).is_err());
    }
}
