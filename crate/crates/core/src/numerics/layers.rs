//! Building blocks shared by the generator, prompt model and reward model.

use rand::Rng;

use super::graph::{Graph, Var};
use super::params::ParamSet;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Which parameters of a store receive gradients on a given graph.
#[derive(Clone, Copy, Debug)]
pub enum Trainable<'a> {
    All,
    Frozen,
    Prefix(&'a str),
}

/// A parameter store plus its trainability rule.
#[derive(Clone, Copy, Debug)]
pub struct Binder<'a> {
    pub store: &'a ParamSet,
    pub trainable: Trainable<'a>,
}

impl<'a> Binder<'a> {
    pub fn trainable(store: &'a ParamSet) -> Self {
        Self { store, trainable: Trainable::All }
    }

    pub fn frozen(store: &'a ParamSet) -> Self {
        Self { store, trainable: Trainable::Frozen }
    }

    pub fn prefix(store: &'a ParamSet, prefix: &'a str) -> Self {
        Self { store, trainable: Trainable::Prefix(prefix) }
    }

    pub fn var(&self, g: &mut Graph, name: &str) -> Result<Var> {
        let train = match self.trainable {
            Trainable::All => true,
            Trainable::Frozen => false,
            Trainable::Prefix(p) => name.starts_with(p),
        };
        g.bind(self.store, name, train)
    }
}

/// `x W + b`.
pub fn affine(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var> {
    let xw = g.matmul(x, w)?;
    g.add_row(xw, b)
}

/// Rows of `table` selected by `ids`.
pub fn embedding_lookup(g: &mut Graph, table: Var, ids: &[usize]) -> Result<Var> {
    g.gather_rows(table, ids)
}

/// Column-wise mean, `[m × d] → [1 × d]`.
pub fn mean_pool(g: &mut Graph, x: Var) -> Result<Var> {
    if g.value(x).rows() == 0 {
        return Err(Error::EmptySequence("mean_pool"));
    }
    g.mean_rows(x)
}

/// Second-order factorization-machine term
/// `½ Σ_f [(Σ_i V[i,f] x_i)² − Σ_i V[i,f]² x_i²]`.
///
/// `factors` is `F × d`; `x` holds `F` feature values (as a vector or a `1 × F` row).
pub fn fm_interaction(g: &mut Graph, factors: Var, x: Var) -> Result<Var> {
    let (f, _) = g.value(factors).dims2();
    if f == 0 {
        return Err(Error::EmptySequence("fm_interaction"));
    }
    if g.value(x).len() != f {
        return Err(Error::Shape(format!(
            "fm_interaction: {} feature values for {f} factor rows",
            g.value(x).len()
        )));
    }
    let x_row = g.reshape(x, &[1, f])?;
    let linear = g.matmul(x_row, factors)?;
    let sq_of_sum = g.square(linear)?;
    let x_sq = g.square(x_row)?;
    let v_sq = g.square(factors)?;
    let sum_of_sq = g.matmul(x_sq, v_sq)?;
    let diff = g.sub(sq_of_sum, sum_of_sq)?;
    let total = g.sum(diff)?;
    g.scale(total, 0.5)
}

/// Row-wise layer normalization with learned gain and bias.
pub fn layer_norm(g: &mut Graph, x: Var, gain: Var, bias: Var) -> Result<Var> {
    let n = g.normalize_rows(x, LAYER_NORM_EPS)?;
    let scaled = g.mul_row(n, gain)?;
    g.add_row(scaled, bias)
}

/// Xavier-style Gaussian initialization.
pub fn init_weight<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    Tensor::randn(&[rows, cols], (2.0 / (rows + cols) as f64).sqrt(), rng)
}

/// Multi-head scaled-dot-product self-attention with a residual connection and
/// row-wise layer normalization. No positional encoding: the block is
/// equivariant under row permutations.
#[derive(Clone, Debug, PartialEq)]
pub struct SelfAttention {
    pub prefix: String,
    pub dim: usize,
    pub heads: usize,
}

pub struct AttentionOutput {
    pub out: Var,
    /// One `m × m` row-stochastic matrix per head.
    pub weights: Vec<Var>,
}

impl SelfAttention {
    pub fn new(prefix: impl Into<String>, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!("dim {dim} not divisible by {heads} heads")));
        }
        Ok(Self { prefix: prefix.into(), dim, heads })
    }

    fn name(&self, part: &str) -> String {
        format!("{}.{part}", self.prefix)
    }

    pub fn init_params<R: Rng + ?Sized>(&self, store: &mut ParamSet, rng: &mut R) {
        for w in ["wq", "wk", "wv", "wo"] {
            store.insert(self.name(w), init_weight(self.dim, self.dim, rng));
        }
        store.insert(self.name("ln_gain"), Tensor::full(&[1, self.dim], 1.0));
        store.insert(self.name("ln_bias"), Tensor::zeros(&[1, self.dim]));
    }

    pub fn forward(&self, g: &mut Graph, params: &Binder, x: Var) -> Result<AttentionOutput> {
        let (m, d) = g.value(x).dims2();
        if m == 0 {
            return Err(Error::EmptySequence("self_attention_block"));
        }
        if d != self.dim {
            return Err(Error::Shape(format!("attention expects width {}, got {d}", self.dim)));
        }
        let wq = params.var(g, &self.name("wq"))?;
        let wk = params.var(g, &self.name("wk"))?;
        let wv = params.var(g, &self.name("wv"))?;
        let wo = params.var(g, &self.name("wo"))?;
        let q = g.matmul(x, wq)?;
        let k = g.matmul(x, wk)?;
        let v = g.matmul(x, wv)?;

        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (lo, hi) = (h * dh, (h + 1) * dh);
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (g.slice_cols(q, lo, hi)?, g.slice_cols(k, lo, hi)?, g.slice_cols(v, lo, hi)?)
            };
            let kt = g.transpose(kh)?;
            let scores = g.matmul(qh, kt)?;
            let scores = g.scale(scores, scale)?;
            let attn = g.softmax_rows(scores)?;
            heads.push(g.matmul(attn, vh)?);
            weights.push(attn);
        }
        let mixed = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? };
        let proj = g.matmul(mixed, wo)?;
        let residual = g.add(x, proj)?;
        let gain = params.var(g, &self.name("ln_gain"))?;
        let bias = params.var(g, &self.name("ln_bias"))?;
        let out = layer_norm(g, residual, gain, bias)?;
        Ok(AttentionOutput { out, weights })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::graph::softmax_in_place;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn value_of(g: &Graph, v: Var) -> Vec<f64> {
        g.value(v).data().to_vec()
    }

    #[test]
    fn affine_examples() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::row(vec![1.0, 0.0]));
        let w = g.constant(Tensor::identity(2));
        let b = g.constant(Tensor::row(vec![0.0, 0.0]));
        let out = affine(&mut g, x, w, b).unwrap();
        assert_eq!(value_of(&g, out), vec![1.0, 0.0]);

        let x = g.constant(Tensor::row(vec![0.0, 0.0]));
        let w = g.constant(Tensor::from_rows(&[vec![5.0, 6.0], vec![7.0, 8.0]]).unwrap());
        let b = g.constant(Tensor::row(vec![3.0, 4.0]));
        let out = affine(&mut g, x, w, b).unwrap();
        assert_eq!(value_of(&g, out), vec![3.0, 4.0]);

        let x = g.constant(Tensor::row(vec![1.0, 2.0]));
        let w = g.constant(Tensor::from_rows(&[vec![1.0, 1.0], vec![1.0, -1.0]]).unwrap());
        let b = g.constant(Tensor::row(vec![0.0, 0.0]));
        let out = affine(&mut g, x, w, b).unwrap();
        assert_eq!(value_of(&g, out), vec![3.0, -1.0]);

        let bad_w = g.constant(Tensor::zeros(&[3, 2]));
        assert!(matches!(affine(&mut g, x, bad_w, b), Err(Error::Shape(_))));
    }

    #[test]
    fn embedding_selects_rows() {
        let mut g = Graph::new();
        let rows: Vec<Vec<f64>> = (0..4).map(|r| vec![r as f64, 10.0 + r as f64]).collect();
        let table = g.constant(Tensor::from_rows(&rows).unwrap());
        let e = embedding_lookup(&mut g, table, &[2]).unwrap();
        assert_eq!(value_of(&g, e), rows[2]);
    }

    #[test]
    fn mean_pool_examples() {
        let mut g = Graph::new();
        let one = g.constant(Tensor::row(vec![4.0, -1.0]));
        let p = mean_pool(&mut g, one).unwrap();
        assert_eq!(value_of(&g, p), vec![4.0, -1.0]);
        let x = g.constant(Tensor::from_rows(&[vec![1.0, 3.0], vec![3.0, 1.0]]).unwrap());
        let p = mean_pool(&mut g, x).unwrap();
        assert_eq!(value_of(&g, p), vec![2.0, 2.0]);
        let empty = g.constant(Tensor::zeros(&[0, 2]));
        assert!(matches!(mean_pool(&mut g, empty), Err(Error::EmptySequence(_))));
    }

    #[test]
    fn mean_pool_gradient_matches_finite_differences() {
        let x0 = Tensor::from_rows(&[vec![0.3, -1.2], vec![2.0, 0.7], vec![-0.4, 0.1]]).unwrap();
        let w = Tensor::row(vec![1.7, -0.6]);
        let f = |x: &Tensor| {
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let p = mean_pool(&mut g, xv).unwrap();
            let wv = g.constant(w.clone());
            let prod = g.mul(p, wv).unwrap();
            let s = g.sum(prod).unwrap();
            (g.value(s).item(), g, xv, s)
        };
        let (_, g, xv, s) = f(&x0);
        let analytic = g.backward(s).unwrap().wrt(xv);
        let h = 1e-5;
        for i in 0..x0.len() {
            let (mut up, mut dn) = (x0.clone(), x0.clone());
            up.data_mut()[i] += h;
            dn.data_mut()[i] -= h;
            let fd = (f(&up).0 - f(&dn).0) / (2.0 * h);
            assert!((fd - analytic.data()[i]).abs() < 1e-9);
            assert!((analytic.data()[i] - w.data()[i % 2] / 3.0).abs() < 1e-15);
        }
    }

    fn fm_value(v: &Tensor, x: &[f64]) -> f64 {
        let mut g = Graph::new();
        let vv = g.constant(v.clone());
        let xv = g.constant(Tensor::vector(x.to_vec()));
        let out = fm_interaction(&mut g, vv, xv).unwrap();
        g.value(out).item()
    }

    fn fm_pairwise(v: &Tensor, x: &[f64]) -> f64 {
        let (f, d) = v.dims2();
        let mut total = 0.0;
        for i in 0..f {
            for j in i + 1..f {
                let dot: f64 = (0..d).map(|c| v.at(i, c) * v.at(j, c)).sum();
                total += dot * x[i] * x[j];
            }
        }
        total
    }

    #[test]
    fn fm_examples() {
        let v = Tensor::from_rows(&[vec![1.0, 0.0], vec![1.0, 1.0]]).unwrap();
        assert_eq!(fm_value(&v, &[1.0, 1.0]), 1.0);
        assert_eq!(fm_value(&v, &[0.0, 0.0]), 0.0);
        assert_eq!(fm_value(&v, &[0.0, 2.5]), 0.0);
    }

    proptest! {
        #[test]
        fn fm_matches_pairwise_sum(f in 1usize..=10, d in 1usize..=8, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let v = Tensor::randn(&[f, d], 1.0, &mut rng);
            let x: Vec<f64> = Tensor::randn(&[f], 1.0, &mut rng).into_data();
            prop_assert!((fm_value(&v, &x) - fm_pairwise(&v, &x)).abs() < 1e-10);
        }

        #[test]
        fn attention_is_permutation_equivariant(m in 1usize..=8, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let block = SelfAttention::new("att", 8, 2).unwrap();
            let mut store = ParamSet::new();
            block.init_params(&mut store, &mut rng);
            let x = Tensor::randn(&[m, 8], 1.0, &mut rng);
            let mut perm: Vec<usize> = (0..m).collect();
            perm.reverse();
            perm.rotate_left(m / 2);
            let xp = Tensor::from_rows(&perm.iter().map(|&i| x.row_slice(i).to_vec()).collect::<Vec<_>>()).unwrap();

            let run = |t: &Tensor| {
                let mut g = Graph::new();
                let xv = g.constant(t.clone());
                let out = block.forward(&mut g, &Binder::frozen(&store), xv).unwrap().out;
                g.value(out).clone()
            };
            let (y, yp) = (run(&x), run(&xp));
            for (r, &src) in perm.iter().enumerate() {
                for c in 0..8 {
                    prop_assert!((yp.at(r, c) - y.at(src, c)).abs() < 1e-12);
                }
            }
        }
    }

    fn identity_block(d: usize, heads: usize) -> (SelfAttention, ParamSet) {
        let block = SelfAttention::new("att", d, heads).unwrap();
        let mut store = ParamSet::new();
        for w in ["wq", "wk", "wv", "wo"] {
            store.insert(format!("att.{w}"), Tensor::identity(d));
        }
        store.insert("att.ln_gain", Tensor::full(&[1, d], 1.0));
        store.insert("att.ln_bias", Tensor::zeros(&[1, d]));
        (block, store)
    }

    #[test]
    fn single_row_attends_to_itself() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let block = SelfAttention::new("att", 4, 2).unwrap();
        let mut store = ParamSet::new();
        block.init_params(&mut store, &mut rng);
        let x = Tensor::randn(&[1, 4], 1.0, &mut rng);

        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let out = block.forward(&mut g, &Binder::frozen(&store), xv).unwrap();
        for w in &out.weights {
            assert_eq!(g.value(*w).data(), &[1.0]);
        }
        // layernorm(x + (x Wv) Wo), computed directly
        let v = x.matmul(store.get("att.wv").unwrap()).unwrap();
        let proj = v.matmul(store.get("att.wo").unwrap()).unwrap();
        let res: Vec<f64> = x.data().iter().zip(proj.data()).map(|(a, b)| a + b).collect();
        let mean = res.iter().sum::<f64>() / 4.0;
        let var = res.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / 4.0;
        let expect: Vec<f64> = res.iter().map(|r| (r - mean) / (var + LAYER_NORM_EPS).sqrt()).collect();
        for (a, b) in g.value(out.out).data().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn two_row_identity_attention_matches_scalar_softmax() {
        let (block, store) = identity_block(2, 1);
        let mut g = Graph::new();
        let xv = g.constant(Tensor::identity(2));
        let out = block.forward(&mut g, &Binder::frozen(&store), xv).unwrap();
        // scores = X Xᵀ / √2 = diag(1/√2)
        let mut row0 = [1.0 / 2f64.sqrt(), 0.0];
        softmax_in_place(&mut row0);
        let a = g.value(out.weights[0]);
        assert!((a.at(0, 0) - row0[0]).abs() < 1e-15);
        assert!((a.at(0, 1) - row0[1]).abs() < 1e-15);
        assert!((a.at(1, 1) - row0[0]).abs() < 1e-15);
        assert!((row0[0] - 0.669_761_549_4).abs() < 1e-9);
    }

    #[test]
    fn attention_rejects_empty_and_bad_heads() {
        assert!(SelfAttention::new("a", 6, 4).is_err());
        let (block, store) = identity_block(2, 1);
        let mut g = Graph::new();
        let xv = g.constant(Tensor::zeros(&[0, 2]));
        assert!(matches!(
            block.forward(&mut g, &Binder::frozen(&store), xv),
            Err(Error::EmptySequence(_))
        ));
    }
}
