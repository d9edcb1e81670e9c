//! Low-rank adapters: `W_eff = W_base + (alpha / r) · A · B`.

use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};

/// Effective weight of an adapted layer. `base` is never mutated.
pub fn lora_apply(base: &Tensor, a: &Tensor, b: &Tensor, alpha: f64, rank: usize) -> Result<Tensor> {
    check_shapes(base, a, b, rank)?;
    let delta = a.matmul(b)?;
    let s = alpha / rank as f64;
    Ok(base.zip_map(&delta, |w, d| w + s * d))
}

fn check_shapes(base: &Tensor, a: &Tensor, b: &Tensor, rank: usize) -> Result<()> {
    if rank == 0 {
        return Err(Error::Config("LoRA rank must be at least 1".into()));
    }
    let (din, dout) = base.dims2();
    if a.dims2() != (din, rank) || b.dims2() != (rank, dout) {
        return Err(Error::Shape(format!(
            "LoRA factors {:?} / {:?} do not fit base {:?} at rank {rank}",
            a.shape(),
            b.shape(),
            base.shape()
        )));
    }
    Ok(())
}

/// Graph version of [`lora_apply`]; gradients flow into `a` and `b` only if
/// they are bound as trainable.
pub fn lora_weight(g: &mut Graph, base: Var, a: Var, b: Var, alpha: f64, rank: usize) -> Result<Var> {
    check_shapes(g.value(base), g.value(a), g.value(b), rank)?;
    let ab = g.matmul(a, b)?;
    let scaled = g.scale(ab, alpha / rank as f64)?;
    g.add(base, scaled)
}

/// Numerical rank by Gaussian elimination.
pub fn matrix_rank(m: &Tensor, tol: f64) -> usize {
    let (rows, cols) = m.dims2();
    let mut a = m.data().to_vec();
    let mut rank = 0;
    for c in 0..cols {
        if rank == rows {
            break;
        }
        let pivot = (rank..rows).max_by(|&i, &j| a[i * cols + c].abs().total_cmp(&a[j * cols + c].abs()));
        let Some(p) = pivot else { break };
        if a[p * cols + c].abs() <= tol {
            continue;
        }
        for k in 0..cols {
            a.swap(rank * cols + k, p * cols + k);
        }
        for r in rank + 1..rows {
            let f = a[r * cols + c] / a[rank * cols + c];
            for k in c..cols {
                a[r * cols + k] -= f * a[rank * cols + k];
            }
        }
        rank += 1;
    }
    rank
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;

    #[test]
    fn zero_a_gives_base_exactly() {
        let mut rng = rng_for(1, &[]);
        let base = Tensor::randn(&[6, 5], 1.0, &mut rng);
        let a = Tensor::zeros(&[6, 2]);
        let b = Tensor::randn(&[2, 5], 1.0, &mut rng);
        let w = lora_apply(&base, &a, &b, 4.0, 2).unwrap();
        assert_eq!(w, base);
    }

    #[test]
    fn unit_scale_adds_product() {
        let mut rng = rng_for(2, &[]);
        let base = Tensor::randn(&[4, 3], 1.0, &mut rng);
        let a = Tensor::randn(&[4, 2], 1.0, &mut rng);
        let b = Tensor::randn(&[2, 3], 1.0, &mut rng);
        let w = lora_apply(&base, &a, &b, 2.0, 2).unwrap();
        let ab = a.matmul(&b).unwrap();
        for i in 0..w.len() {
            assert_eq!(w.data()[i], base.data()[i] + ab.data()[i]);
        }
    }

    #[test]
    fn update_rank_is_bounded() {
        for seed in 0..10 {
            let mut rng = rng_for(seed, &[]);
            let r = 1 + (seed as usize % 4);
            let a = Tensor::randn(&[12, r], 1.0, &mut rng);
            let b = Tensor::randn(&[r, 9], 1.0, &mut rng);
            let base = Tensor::zeros(&[12, 9]);
            let delta = lora_apply(&base, &a, &b, 1.0, r).unwrap();
            assert!(matrix_rank(&delta, 1e-9) <= r);
            assert_eq!(matrix_rank(&delta, 1e-9), r);
        }
    }

    #[test]
    fn rank_mismatch_is_an_error() {
        let base = Tensor::zeros(&[4, 3]);
        let a = Tensor::zeros(&[4, 2]);
        let b = Tensor::zeros(&[3, 3]);
        assert!(lora_apply(&base, &a, &b, 1.0, 2).is_err());
        assert!(lora_apply(&base, &a, &Tensor::zeros(&[2, 3]), 1.0, 0).is_err());
    }
}
