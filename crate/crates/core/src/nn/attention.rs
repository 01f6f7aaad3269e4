use super::{linear, merge_heads, scoped, split_heads, Linear};
use crate::category::Category;
use crate::error::{Error, Result};
use crate::tensor::{Graph, Scalar, Var};

/// Attention weights `softmax(Q·Kᵀ / √D)` over the last axis, where `D` is
/// the per-head query/key width.
pub fn attention_weights<T: Scalar>(g: &mut Graph<T>, q: Var, k: Var) -> Result<Var> {
    let (qs, ks) = (g.shape(q).to_vec(), g.shape(k).to_vec());
    if qs.last() != ks.last() || qs.len() < 2 || ks.len() < 2 {
        return Err(Error::ShapeMismatch {
            op: "attention",
            lhs: qs,
            rhs: ks,
        });
    }
    let d = *qs.last().unwrap();
    let kt = g.transpose(k)?;
    let logits = g.matmul(q, kt)?;
    let logits = g.scale(logits, 1.0 / (d as f64).sqrt());
    let axis = qs.len() - 1;
    g.softmax(logits, axis)
}

/// `softmax(Q·Kᵀ / √D)·V` on `[..., L, D]` operands.
pub fn attention<T: Scalar>(g: &mut Graph<T>, q: Var, k: Var, v: Var) -> Result<Var> {
    let w = attention_weights(g, q, k)?;
    g.matmul(w, v)
}

/// Former block weights. `w_q` is per head, `H × d/H × d/H`; keys and
/// values are the normalised token split itself.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FormerWeights {
    pub norm1: (Var, Var),
    pub w_q: Var,
    pub w_o: Var,
    pub norm2: (Var, Var),
    pub ffn1: Linear,
    pub ffn2: Linear,
}

/// Self-attention over the global tokens followed by a feed-forward layer,
/// both pre-normalised with residuals. `z` is `[B, M, d]`.
pub fn former_block<T: Scalar>(
    g: &mut Graph<T>,
    z: Var,
    w: &FormerWeights,
    heads: usize,
) -> Result<Var> {
    let z1 = scoped(g, Category::FormerMhsa, |g| {
        let zn = g.layer_norm(z, Some(w.norm1))?;
        let zs = split_heads(g, zn, heads)?;
        let q = g.matmul(zs, w.w_q)?;
        let a = attention(g, q, zs, zs)?;
        let merged = merge_heads(g, a)?;
        let o = g.matmul(merged, w.w_o)?;
        g.add(z, o)
    })?;
    scoped(g, Category::FormerFfn, |g| {
        let zn = g.layer_norm(z1, Some(w.norm2))?;
        let h = linear(g, zn, &w.ffn1)?;
        let h = g.gelu(h);
        let f = linear(g, h, &w.ffn2)?;
        g.add(z1, f)
    })
}

/// Local → token bridge. Only the token side is projected: a per-head
/// query projection `H × d/H × C/H` and the head merge `C × d`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BridgeInWeights {
    pub w_q: Var,
    pub w_o: Var,
}

/// Cross-attention from local features `x_seq` (`[B, L, C]`) to tokens `z`
/// (`[B, M, d]`). Returns the update `[B, M, d]` to be added to `z`.
pub fn mobile_to_former<T: Scalar>(
    g: &mut Graph<T>,
    z: Var,
    x_seq: Var,
    w: &BridgeInWeights,
    heads: usize,
) -> Result<Var> {
    scoped(g, Category::BridgeIn, |g| {
        let zn = g.layer_norm(z, None)?;
        let zs = split_heads(g, zn, heads)?;
        let q = g.matmul(zs, w.w_q)?;
        let xs = split_heads(g, x_seq, heads)?;
        let a = attention(g, q, xs, xs)?;
        let merged = merge_heads(g, a)?;
        g.matmul(merged, w.w_o)
    })
}

/// Token → local bridge: per-head key and value projections `H × d/H × C/H`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BridgeOutWeights {
    pub w_k: Var,
    pub w_v: Var,
}

/// Cross-attention from tokens `z` (`[B, M, d]`) to local features `x_seq`
/// (`[B, L, C]`); the raw local features are the queries. Returns the
/// update `[B, L, C]` to be added to the Mobile block output.
pub fn former_to_mobile<T: Scalar>(
    g: &mut Graph<T>,
    x_seq: Var,
    z: Var,
    w: &BridgeOutWeights,
    heads: usize,
) -> Result<Var> {
    scoped(g, Category::BridgeOut, |g| {
        let zn = g.layer_norm(z, None)?;
        let zs = split_heads(g, zn, heads)?;
        let k = g.matmul(zs, w.w_k)?;
        let v = g.matmul(zs, w.w_v)?;
        let xs = split_heads(g, x_seq, heads)?;
        let a = attention(g, xs, k, v)?;
        merge_heads(g, a)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn seeded(shape: &[usize], salt: f64) -> Tensor<f64> {
        Tensor::from_fn(shape.to_vec(), |i| ((i as f64 + 1.0) * salt).sin())
    }

    #[test]
    fn single_key_returns_value() {
        let mut g = Graph::<f64>::new();
        let q = g.input(seeded(&[4, 3], 0.7));
        let k = g.input(seeded(&[1, 3], 1.3));
        let v = g.input(seeded(&[1, 5], 2.1));
        let out = attention(&mut g, q, k, v).unwrap();
        for row in g.value(out).data().chunks(5) {
            assert_eq!(row, g.value(v).data());
        }
    }

    #[test]
    fn identical_keys_average_values() {
        let mut g = Graph::<f64>::new();
        let q = g.input(seeded(&[2, 3], 0.3));
        let k = g.input(Tensor::from_fn(vec![4, 3], |i| [0.2, -1.0, 0.5][i % 3]));
        let v = g.input(seeded(&[4, 2], 0.9));
        let out = attention(&mut g, q, k, v).unwrap();
        let vd = g.value(v).data().to_vec();
        let mean = [
            (vd[0] + vd[2] + vd[4] + vd[6]) / 4.0,
            (vd[1] + vd[3] + vd[5] + vd[7]) / 4.0,
        ];
        for row in g.value(out).data().chunks(2) {
            assert!((row[0] - mean[0]).abs() < 1e-15 && (row[1] - mean[1]).abs() < 1e-15);
        }
    }

    #[test]
    fn width_mismatch_rejected() {
        let mut g = Graph::<f64>::new();
        let q = g.input(seeded(&[2, 3], 0.3));
        let k = g.input(seeded(&[2, 4], 0.3));
        assert!(attention(&mut g, q, k, k).is_err());
    }
}
