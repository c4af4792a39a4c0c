//! Minimal differentiable tensor stack: a reverse-mode tape over 2-D
//! matrices, the transformer blocks built on it, AdamW, a finite-difference
//! gradient checker and the checkpoint format.

mod adamw;
mod gradcheck;
mod graph;
mod layers;
mod matrix;
mod params;

pub use adamw::{AdamW, AdamWConfig};
pub use gradcheck::{compare_gradients, grad_check, GradCheckConfig, GradCheckReport, ParamCheck};
pub use graph::{Graph, ParamGrads, Var};
pub use layers::{
    positional_mlp, AttentionBlock, FeedForwardBlock, LayerNorm, Linear, Mlp,
    MultiHeadAttention, PositionalMlp,
};
pub use matrix::Matrix;
pub use params::{checkpoint_paths, write_atomic, FloatType, ParamId, ParamKind, Parameter, ParameterSet};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::NnError;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
        Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Smooth scalar probe of an arbitrary output.
    fn probe(g: &mut Graph, y: Var, seed: u64) -> Result<Var, NnError> {
        let n = g.value(y).len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t: Vec<f64> = (0..n).map(|_| rng.random()).collect();
        g.bce_with_logits(y, &t, &vec![1.0 / n as f64; n])
    }

    fn assert_passes(report: &GradCheckReport) {
        assert!(
            report.passed(),
            "worst: {:?} (max rel {:e})",
            report.worst(),
            report.max_rel_error()
        );
    }

    /// Registers `x` as a parameter so gradients w.r.t. inputs are checked too.
    fn input(p: &mut ParameterSet, name: &str, m: Matrix) -> ParamId {
        p.add(name, ParamKind::Weight, m).unwrap()
    }

    #[test]
    fn linear_grad_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = ParameterSet::new();
        let lin = Linear::new(&mut p, "lin", 4, 3, &mut rng).unwrap();
        let x = input(&mut p, "x", random_matrix(5, 4, &mut rng));
        let r = grad_check(
            &mut p,
            |p| {
                let mut g = Graph::new();
                let xv = g.param(p, x);
                let y = lin.forward(&mut g, p, xv)?;
                let l = probe(&mut g, y, 2)?;
                Ok((g, l))
            },
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert_passes(&r);
    }

    #[test]
    fn corrupted_backward_fails() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = ParameterSet::new();
        let lin = Linear::new(&mut p, "lin", 4, 3, &mut rng).unwrap();
        let x = input(&mut p, "x", random_matrix(5, 4, &mut rng));
        let f = |p: &ParameterSet| {
            let mut g = Graph::new();
            let xv = g.param(p, x);
            let y = lin.forward(&mut g, p, xv)?;
            let l = probe(&mut g, y, 2)?;
            Ok((g, l))
        };
        let (g, l) = f(&p).unwrap();
        let mut grads = g.backward(l, &p).unwrap();
        grads[lin.weight.index()].data_mut()[0] *= 1.5;
        let r = compare_gradients(&mut p, f, &grads, &GradCheckConfig::default()).unwrap();
        assert!(!r.passed());
        assert_eq!(r.worst().unwrap().name, "lin.weight");
    }

    #[test]
    fn layer_norm_and_mlp_grad_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = ParameterSet::new();
        let ln = LayerNorm::new(&mut p, "ln", 6).unwrap();
        let mlp = Mlp::new(&mut p, "mlp", 6, 8, 4, &mut rng).unwrap();
        let x = input(&mut p, "x", random_matrix(3, 6, &mut rng));
        // move the affine parameters off their trivial initial values
        for id in [ln.gain, ln.bias] {
            let m = random_matrix(1, 6, &mut rng);
            p.value_mut(id).add_assign(&m);
        }
        let r = grad_check(
            &mut p,
            |p| {
                let mut g = Graph::new();
                let xv = g.param(p, x);
                let h = ln.forward(&mut g, p, xv)?;
                let h = g.tanh(h)?;
                let y = mlp.forward(&mut g, p, h)?;
                let l = probe(&mut g, y, 4)?;
                Ok((g, l))
            },
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert_passes(&r);
    }

    #[test]
    fn attention_grad_check_with_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut p = ParameterSet::new();
        let blk = AttentionBlock::new(&mut p, "self", 8, 2, &mut rng).unwrap();
        let cross = MultiHeadAttention::new(&mut p, "cross", 8, 4, &mut rng).unwrap();
        let x = input(&mut p, "x", random_matrix(4, 8, &mut rng));
        let kv = input(&mut p, "kv", random_matrix(5, 8, &mut rng));
        let mask = [true, false, true, true, false];
        let r = grad_check(
            &mut p,
            |p| {
                let mut g = Graph::new();
                let xv = g.param(p, x);
                let kvv = g.param(p, kv);
                let h = blk.forward(&mut g, p, xv, None, false, None)?;
                let y = cross.forward(&mut g, p, h, Some(kvv), Some(&mask))?;
                let l = probe(&mut g, y, 6)?;
                Ok((g, l))
            },
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert_passes(&r);
        // masked keys get no gradient
        let mut g = Graph::new();
        let xv = g.param(&p, x);
        let kvv = g.param(&p, kv);
        let y = cross.forward(&mut g, &p, xv, Some(kvv), Some(&mask)).unwrap();
        let l = probe(&mut g, y, 6).unwrap();
        let grads = g.backward(l, &p).unwrap();
        let gkv = &grads[kv.index()];
        assert!(gkv.row(1).iter().chain(gkv.row(4)).all(|&v| v == 0.0));
    }

    #[test]
    fn attention_rows_sum_to_one_and_ignore_masked() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut p = ParameterSet::new();
        let mha = MultiHeadAttention::new(&mut p, "a", 8, 2, &mut rng).unwrap();
        let mut g = Graph::new();
        let q = g.constant(random_matrix(3, 8, &mut rng)).unwrap();
        let k = g.constant(random_matrix(6, 8, &mut rng)).unwrap();
        let mask = [true, true, false, true, false, true];
        for h in 0..2 {
            let w = mha.weights(&mut g, &p, q, k, Some(&mask), h).unwrap();
            for i in 0..3 {
                assert!((w.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-6);
                assert_eq!(w.get(i, 2), 0.0);
                assert_eq!(w.get(i, 4), 0.0);
            }
        }
    }

    #[test]
    fn single_key_returns_value_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut p = ParameterSet::new();
        let mha = MultiHeadAttention::new(&mut p, "a", 4, 2, &mut rng).unwrap();
        let mut g = Graph::new();
        let q = g.constant(random_matrix(3, 4, &mut rng)).unwrap();
        let kv = g.constant(random_matrix(1, 4, &mut rng)).unwrap();
        let out = mha.forward(&mut g, &p, q, Some(kv), None).unwrap();
        let v = mha.v.forward(&mut g, &p, kv).unwrap();
        let expect = mha.o.forward(&mut g, &p, v).unwrap();
        for i in 0..3 {
            for j in 0..4 {
                assert!((g.value(out).get(i, j) - g.value(expect).get(0, j)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fully_masked_uses_null_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut p = ParameterSet::new();
        let mha = MultiHeadAttention::new(&mut p, "a", 4, 1, &mut rng).unwrap();
        let mut g = Graph::new();
        let q = g.constant(random_matrix(2, 4, &mut rng)).unwrap();
        let kv = g.constant(random_matrix(3, 4, &mut rng)).unwrap();
        let masked = mha.forward(&mut g, &p, q, Some(kv), Some(&[false; 3])).unwrap();
        let absent = mha.forward(&mut g, &p, q, None, None).unwrap();
        assert!(g.value(masked).is_finite());
        assert_eq!(g.value(masked), g.value(absent));
        let null = g.param(&p, mha.null_value);
        let expect = mha.o.forward(&mut g, &p, null).unwrap();
        for i in 0..2 {
            assert_eq!(g.value(masked).row(i), g.value(expect).row(0));
        }
        // the null value is learnable
        let l = probe(&mut g, masked, 1).unwrap();
        let grads = g.backward(l, &p).unwrap();
        assert!(grads[mha.null_value.index()].max_abs() > 0.0);
    }

    #[test]
    fn losses_and_plumbing_grad_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut p = ParameterSet::new();
        let x = input(&mut p, "x", random_matrix(4, 6, &mut rng));
        let emb = input(&mut p, "emb", random_matrix(5, 3, &mut rng));
        let target = random_matrix(4, 2, &mut rng).map(|v| v + 3.0);
        let soft: Vec<f64> = (0..4).map(|_| rng.random()).collect();
        let r = grad_check(
            &mut p,
            |p| {
                let mut g = Graph::new();
                let xv = g.param(p, x);
                let a = g.slice_cols(xv, 0, 3)?;
                let b = g.slice_cols(xv, 3, 3)?;
                let e = g.param(p, emb);
                let e = g.select_rows(e, &[4, 0, 4, 2])?;
                let a = g.add(a, e)?;
                let cat = g.concat_cols(&[b, a])?;
                let rows = g.concat_rows(&[cat, xv])?;
                let rows = g.mask_rows(rows, &[true, true, false, true, true, true, true, true])?;
                let s = g.softmax(rows, Some(&[true, false, true, true, true, true]))?;
                let pooled = g.weighted_row_sum(s, &[0.1, 0.2, 0.3, 0.1, 0.1, 0.05, 0.05, 0.1])?;
                let ce = g.softmax_cross_entropy(pooled, 2)?;
                let z = g.slice_cols(xv, 0, 1)?;
                let bce = g.bce_with_logits(z, &soft, &[0.25; 4])?;
                let focal = g.focal_with_logits(z, &soft, &[0.25; 4], 2.0)?;
                let two = g.slice_cols(xv, 1, 2)?;
                let l1 = g.l1(two, &target, &[1.0, 0.5, 0.0, 2.0])?;
                let t = g.add(ce, bce)?;
                let t = g.add(t, focal)?;
                let t = g.add(t, l1)?;
                let t = g.scale(t, 0.5)?;
                Ok((g, t))
            },
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert_passes(&r);
    }

    #[test]
    fn positional_mlp_zero_final_layer_gives_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut p = ParameterSet::new();
        let pe = positional_mlp(&mut p, "pe", 128, 16, &mut rng).unwrap();
        p.value_mut(pe.fc2.weight).data_mut().iter_mut().for_each(|v| *v = 0.0);
        let mut g = Graph::new();
        let c = g.constant(Matrix::zeros(3, 3)).unwrap();
        let y = pe.forward(&mut g, &p, c).unwrap();
        assert_eq!(g.value(y).max_abs(), 0.0);
    }

    #[test]
    fn positional_mlp_distinct_coords_distinct_embeddings() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let mut p = ParameterSet::new();
        let pe = positional_mlp(&mut p, "pe", 128, 32, &mut rng).unwrap();
        let coords = random_matrix(1000, 3, &mut rng);
        let mut g = Graph::new();
        let c = g.constant(coords).unwrap();
        let y = pe.forward(&mut g, &p, c).unwrap();
        let e = g.value(y);
        for i in 0..1000 {
            for j in i + 1..1000 {
                let d: f64 = e.row(i).iter().zip(e.row(j)).map(|(a, b)| (a - b).abs()).sum();
                assert!(d > 0.0, "rows {i} and {j} collide");
            }
        }
        let r = grad_check(
            &mut p,
            |p| {
                let mut g = Graph::new();
                let c = g.constant(random_matrix(4, 3, &mut ChaCha8Rng::seed_from_u64(1)))?;
                let y = pe.forward(&mut g, p, c)?;
                let l = probe(&mut g, y, 3)?;
                Ok((g, l))
            },
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert_passes(&r);
    }

    #[test]
    fn forward_is_deterministic() {
        let build = || {
            let mut rng = ChaCha8Rng::seed_from_u64(42);
            let mut p = ParameterSet::new();
            let mha = MultiHeadAttention::new(&mut p, "a", 8, 2, &mut rng).unwrap();
            let x = random_matrix(5, 8, &mut rng);
            let mut g = Graph::new();
            let xv = g.constant(x).unwrap();
            let y = mha.forward(&mut g, &p, xv, Some(xv), None).unwrap();
            g.value(y).clone()
        };
        assert_eq!(build(), build());
    }
}
