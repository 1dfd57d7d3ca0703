//! Layer-level operations. Each has one implementation on the tape; the
//! plain-tensor entry points below run that implementation and return values,
//! so the trained path and the tested contract can never drift apart.

use super::optim::ParameterStore;
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// out = input · weight + bias, shapes [n×d_in]·[d_in×d_out]+[d_out].
pub fn linear_forward(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    input.assert_finite("linear_forward input")?;
    if input.cols() != weight.rows() {
        return Err(Error::ShapeMismatch {
            op: "linear_forward",
            axis: 0,
            expected: input.cols(),
            got: weight.rows(),
        });
    }
    if weight.cols() != bias.len() {
        return Err(Error::ShapeMismatch {
            op: "linear_forward",
            axis: 1,
            expected: weight.cols(),
            got: bias.len(),
        });
    }
    let mut tape = Tape::new();
    let x = tape.leaf(input.clone());
    let w = tape.leaf(weight.clone());
    let b = tape.leaf(bias.clone());
    let y = tape.linear(x, w, b);
    Ok(tape.value(y).clone())
}

/// Multi-head causal self-attention over the tape. `x` is [L×d]; weights are
/// a fused qkv projection [d×3d] and an output projection [d×d].
pub fn causal_self_attention_tape(
    tape: &mut Tape,
    x: Var,
    qkv_w: Var,
    qkv_b: Var,
    proj_w: Var,
    proj_b: Var,
    heads: usize,
) -> Result<Var> {
    let d = tape.value(x).cols();
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!(
            "embed width {d} not divisible by {heads} heads"
        )));
    }
    let dh = d / heads;
    let scale = 1.0 / (dh as f32).sqrt();
    let qkv = tape.linear(x, qkv_w, qkv_b);
    let mut ctx_heads = Vec::with_capacity(heads);
    for h in 0..heads {
        let q = tape.slice_cols(qkv, h * dh, dh);
        let k = tape.slice_cols(qkv, d + h * dh, dh);
        let v = tape.slice_cols(qkv, 2 * d + h * dh, dh);
        // transposed keys route the score matmul through the saxpy kernel
        let k_t = tape.transpose(k);
        let scores = tape.matmul(q, k_t);
        let scaled = tape.scale(scores, scale);
        let attn = tape.causal_softmax_rows(scaled);
        ctx_heads.push(tape.matmul(attn, v));
    }
    let ctx = tape.concat_cols(&ctx_heads);
    Ok(tape.linear(ctx, proj_w, proj_b))
}

/// Standalone attention with conventional parameter names
/// (`qkv.w`, `qkv.b`, `proj.w`, `proj.b`).
pub fn causal_self_attention(
    seq: &Tensor,
    heads: usize,
    weights: &ParameterStore,
) -> Result<Tensor> {
    seq.assert_finite("attention input")?;
    let mut tape = Tape::new();
    let x = tape.leaf(seq.clone());
    let qkv_w = tape.param(weights, "qkv.w");
    let qkv_b = tape.param(weights, "qkv.b");
    let proj_w = tape.param(weights, "proj.w");
    let proj_b = tape.param(weights, "proj.b");
    let y = causal_self_attention_tape(&mut tape, x, qkv_w, qkv_b, proj_w, proj_b, heads)?;
    Ok(tape.value(y).clone())
}

/// Σ_rows −log softmax(row)[label].
pub fn cross_entropy(logits_per_position: &Tensor, label: usize) -> Result<f32> {
    let mut tape = Tape::new();
    let l = tape.leaf(logits_per_position.clone());
    let loss = tape.cross_entropy_sum(l, label)?;
    Ok(tape.scalar(loss))
}

/// KL(N(mu, diag e^logvar) ‖ N(0, I)).
pub fn gaussian_kl(mu: &Tensor, logvar: &Tensor) -> f32 {
    let mut tape = Tape::new();
    let m = tape.leaf(mu.clone());
    let lv = tape.leaf(logvar.clone());
    let kl = tape.gaussian_kl(m, lv);
    tape.scalar(kl)
}

/// mu + exp(0.5·logvar) ⊙ noise.
pub fn reparameterize(mu: &Tensor, logvar: &Tensor, noise: &Tensor) -> Tensor {
    let mut tape = Tape::new();
    let m = tape.leaf(mu.clone());
    let lv = tape.leaf(logvar.clone());
    let z = tape.reparameterize(m, lv, noise.clone());
    tape.value(z).clone()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::gradcheck;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn attention_store(d: usize, rng: &mut ChaCha8Rng) -> ParameterStore {
        let mut s = ParameterStore::new();
        s.insert("qkv.w", Tensor::randn(vec![d, 3 * d], 0.3, rng));
        s.insert("qkv.b", Tensor::randn(vec![3 * d], 0.1, rng));
        s.insert("proj.w", Tensor::randn(vec![d, d], 0.3, rng));
        s.insert("proj.b", Tensor::randn(vec![d], 0.1, rng));
        s
    }

    #[test]
    fn linear_forward_identity_and_affine() {
        let x = Tensor::new(vec![1, 2], vec![1.0, 2.0]);
        let eye = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let zero = Tensor::zeros(vec![2]);
        assert_eq!(linear_forward(&x, &eye, &zero).unwrap().data, vec![1.0, 2.0]);

        let ones = Tensor::new(vec![1, 2], vec![1.0, 1.0]);
        let w = Tensor::new(vec![2, 1], vec![2.0, 3.0]);
        let b = Tensor::new(vec![1], vec![1.0]);
        assert_eq!(linear_forward(&ones, &w, &b).unwrap().data, vec![6.0]);
    }

    #[test]
    fn linear_forward_rejects_nan() {
        let x = Tensor::new(vec![1, 2], vec![f32::NAN, 0.0]);
        let w = Tensor::zeros(vec![2, 2]);
        let b = Tensor::zeros(vec![2]);
        assert!(linear_forward(&x, &w, &b).is_err());
    }

    #[test]
    fn attention_single_token_attends_to_itself() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let store = attention_store(4, &mut rng);
        let x = Tensor::randn(vec![1, 4], 1.0, &mut rng);
        let y = causal_self_attention(&x, 2, &store).unwrap();
        assert_eq!(y.shape, vec![1, 4]);
        assert!(y.is_finite());
    }

    #[test]
    fn attention_causality_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let store = attention_store(8, &mut rng);
        let x = Tensor::randn(vec![5, 8], 1.0, &mut rng);
        let base = causal_self_attention(&x, 2, &store).unwrap();
        let mut perturbed = x.clone();
        for v in perturbed.row_mut(3) {
            *v += 10.0;
        }
        let out = causal_self_attention(&perturbed, 2, &store).unwrap();
        for i in 0..3 {
            assert_eq!(base.row(i), out.row(i), "row {i} changed");
        }
        assert_ne!(base.row(3), out.row(3));
    }

    #[test]
    fn attention_rejects_bad_head_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let store = attention_store(6, &mut rng);
        let x = Tensor::zeros(vec![2, 6]);
        assert!(causal_self_attention(&x, 4, &store).is_err());
    }

    #[test]
    fn attention_two_tokens_convex_combination() {
        // uniform q/k weights make both attention scores equal, so row 1 is the
        // average of the two value projections
        let d = 2;
        let mut store = ParameterStore::new();
        let mut qkv = Tensor::zeros(vec![d, 3 * d]);
        // value projection = identity; q and k projections collapse to zero
        qkv.data[0 * 3 * d + 4] = 1.0; // x0 -> v0
        qkv.data[1 * 3 * d + 5] = 1.0; // x1 -> v1
        store.insert("qkv.w", qkv);
        store.insert("qkv.b", Tensor::zeros(vec![3 * d]));
        store.insert(
            "proj.w",
            Tensor::new(vec![d, d], vec![1.0, 0.0, 0.0, 1.0]),
        );
        store.insert("proj.b", Tensor::zeros(vec![d]));
        let x = Tensor::new(vec![2, 2], vec![2.0, 0.0, 0.0, 4.0]);
        let y = causal_self_attention(&x, 1, &store).unwrap();
        // zero scores -> softmax uniform -> row1 = (v0 + v1) / 2 = (1, 2)
        assert!((y.row(1)[0] - 1.0).abs() < 1e-6);
        assert!((y.row(1)[1] - 2.0).abs() < 1e-6);
        // row 0 sees only itself
        assert!((y.row(0)[0] - 2.0).abs() < 1e-6);
    }

    #[test]
    fn attention_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let store = attention_store(4, &mut rng);
        let x = Tensor::randn(vec![3, 4], 0.8, &mut rng);
        for probe in ["qkv.w", "qkv.b", "proj.w", "proj.b"] {
            let report = gradcheck(&store, probe, 1e-2, |s, tape| {
                let xv = tape.leaf(x.clone());
                let qkv_w = tape.param(s, "qkv.w");
                let qkv_b = tape.param(s, "qkv.b");
                let proj_w = tape.param(s, "proj.w");
                let proj_b = tape.param(s, "proj.b");
                let y = causal_self_attention_tape(tape, xv, qkv_w, qkv_b, proj_w, proj_b, 2)?;
                Ok(tape.mse_sum(y, Tensor::zeros(vec![3, 4])))
            })
            .unwrap();
            assert!(report.passed(), "{report}");
        }
    }
}
