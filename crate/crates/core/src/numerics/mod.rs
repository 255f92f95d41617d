//! Dense f64 tensors with tape-based reverse-mode differentiation, plus a
//! finite-difference gradient checker. Just enough machinery to train the
//! two-layer alignment heads; no GPU, no fused kernels, no mixed precision.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{finite_diff_check, finite_diff_max_rel_err, rel_err};
pub use tape::{gelu, matmul_values, softmax_into, transpose_values, Gradients, NodeId, Tape};
pub use tensor::{dot, l2_norm, l2_normalized, Tensor};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Result;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let i2 = tape.input(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
        let out = tape.matmul(i2, i2).unwrap();
        assert_eq!(tape.value(out).data(), &[1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn matmul_hand_example() {
        let mut tape = Tape::new();
        let a = tape.input(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let b = tape.input(Tensor::from_rows(&[vec![0.0], vec![1.0]]).unwrap());
        let out = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(out).data(), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let mut tape = Tape::new();
        let a = tape.input(Tensor::zeros(vec![2, 3]));
        let b = tape.input(Tensor::zeros(vec![2, 3]));
        assert!(tape.matmul(a, b).is_err());
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random_tensor(&mut rng, &[5, 7]);
        let b = random_tensor(&mut rng, &[7, 3]);
        let mut tape = Tape::new();
        let an = tape.input(a.clone());
        let bn = tape.input(b.clone());
        let out = tape.matmul(an, bn).unwrap();
        // Naive i-j-k oracle.
        for i in 0..5 {
            for j in 0..3 {
                let mut acc = 0.0;
                for k in 0..7 {
                    acc += a.data()[i * 7 + k] * b.data()[k * 3 + j];
                }
                assert!((tape.value(out).data()[i * 3 + j] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_uniform_and_masked() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::from_rows(&[vec![0.0, 0.0, 0.0]]).unwrap());
        let y = tape.softmax_rows(x, None).unwrap();
        for v in tape.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let y = tape.softmax_rows(x, Some(&[true, true, false])).unwrap();
        assert_eq!(tape.value(y).data()[2], 0.0);
        assert!((tape.value(y).data()[0] - 0.5).abs() < 1e-15);
        assert!((tape.value(y).data()[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn softmax_large_inputs_stable() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::from_rows(&[vec![1000.0, 1000.5, 999.0]]).unwrap());
        let y = tape.softmax_rows(x, None).unwrap();
        let sum: f64 = tape.value(y).data().iter().sum();
        assert!(tape.value(y).all_finite());
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_all_masked_row_errors() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::zeros(vec![1, 3]));
        assert!(tape.softmax_rows(x, Some(&[false, false, false])).is_err());
    }

    #[test]
    fn layer_norm_examples() {
        let mut tape = Tape::new();
        // Constant vector with eps > 0 standardizes to zero.
        let x = tape.input(Tensor::from_rows(&[vec![3.0, 3.0, 3.0]]).unwrap());
        let gain = tape.input(Tensor::new(vec![3], vec![1.0; 3]).unwrap());
        let bias = tape.input(Tensor::new(vec![3], vec![0.0; 3]).unwrap());
        let y = tape.layer_norm(x, gain, bias, 1e-5).unwrap();
        for v in tape.value(y).data() {
            assert_eq!(*v, 0.0);
        }
        // Two-point standardization with eps = 0.
        let x = tape.input(Tensor::from_rows(&[vec![1.0, 3.0]]).unwrap());
        let gain = tape.input(Tensor::new(vec![2], vec![1.0; 2]).unwrap());
        let bias = tape.input(Tensor::new(vec![2], vec![0.0; 2]).unwrap());
        let y = tape.layer_norm(x, gain, bias, 0.0).unwrap();
        assert!((tape.value(y).data()[0] + 1.0).abs() < 1e-12);
        assert!((tape.value(y).data()[1] - 1.0).abs() < 1e-12);
        // Zero gain pins the output at the bias.
        let x = tape.input(Tensor::from_rows(&[vec![0.5, -2.0]]).unwrap());
        let gain = tape.input(Tensor::new(vec![2], vec![0.0; 2]).unwrap());
        let bias = tape.input(Tensor::new(vec![2], vec![0.25, 0.25]).unwrap());
        let y = tape.layer_norm(x, gain, bias, 1e-5).unwrap();
        for v in tape.value(y).data() {
            assert_eq!(*v, 0.25);
        }
    }

    #[test]
    fn backward_sum_and_quadratic() {
        let mut tape = Tape::new();
        let p = tape.param(Tensor::new(vec![4], vec![0.3, -0.1, 2.0, 1.5]).unwrap());
        // sum over a [1,4] view
        let m = tape.input(Tensor::zeros(vec![4]));
        let s = tape.add(p, m).unwrap();
        let loss = tape.sum(s).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(p, &[4]).data(), &[1.0, 1.0, 1.0, 1.0]);

        let mut tape = Tape::new();
        let p = tape.param(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let sq = tape.mul(p, p).unwrap();
        let total = tape.sum(sq).unwrap();
        let loss = tape.scale(total, 0.5).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(p, &[2]).data(), &[1.0, 2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_seed() {
        let mut tape = Tape::new();
        let p = tape.param(Tensor::zeros(vec![2, 2]));
        assert!(tape.backward(p).is_err());
    }

    #[test]
    fn unreachable_param_gets_zero_gradient() {
        let mut tape = Tape::new();
        let used = tape.param(Tensor::new(vec![2], vec![1.0, 1.0]).unwrap());
        let unused = tape.param(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
        let loss = tape.sum(used).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(unused, &[3]).data(), &[0.0, 0.0, 0.0]);
        assert!(grads.get_ref(unused).is_none());
    }

    #[test]
    fn finite_diff_quadratic_is_tight() {
        let p = Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap();
        let err = finite_diff_check(
            |tape, ids| {
                let sq = tape.mul(ids[0], ids[0])?;
                let s = tape.sum(sq)?;
                tape.scale(s, 0.5)
            },
            &[p],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-9, "err = {err}");
    }

    #[test]
    fn finite_diff_layer_norm() {
        let x = Tensor::new(vec![2, 4], vec![0.3, -0.2, 1.0, 0.5, -0.7, 0.1, 0.9, -1.2]).unwrap();
        let gain = Tensor::new(vec![4], vec![1.1, 0.9, 1.0, 1.3]).unwrap();
        let bias = Tensor::new(vec![4], vec![0.1, -0.2, 0.0, 0.3]).unwrap();
        let err = finite_diff_check(
            |tape, ids| {
                let y = tape.layer_norm(ids[0], ids[1], ids[2], 1e-5)?;
                tape.sum(y)
            },
            &[x, gain, bias],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "err = {err}");
    }

    #[test]
    fn corrupted_gradient_reports_one_third() {
        let p = Tensor::new(vec![2], vec![0.7, -0.4]).unwrap();
        // Analytic gradient of sum(p²)/2 is p; corrupt it by ×2.
        let corrupted = Tensor::new(vec![2], vec![1.4, -0.8]).unwrap();
        let err = finite_diff_max_rel_err(
            |values| {
                let mut tape = Tape::new();
                let id = tape.param(values[0].clone());
                let sq = tape.mul(id, id)?;
                let s = tape.sum(sq)?;
                let loss = tape.scale(s, 0.5)?;
                tape.value(loss).scalar_value()
            },
            &[p],
            &[corrupted],
            1e-5,
        )
        .unwrap();
        assert!((err - 1.0 / 3.0).abs() < 1e-4, "err = {err}");
    }

    #[test]
    fn finite_diff_rejects_bad_eps() {
        let p = Tensor::new(vec![1], vec![1.0]).unwrap();
        assert!(finite_diff_check(|tape, ids| tape.sum(ids[0]), &[p], 0.0).is_err());
    }

    /// Every differentiable primitive, checked against central differences.
    #[test]
    fn primitive_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        type Build = Box<dyn Fn(&mut Tape, &[NodeId]) -> Result<NodeId>>;
        let check = |params: Vec<Tensor>, build: Build, label: &str| {
            let err = finite_diff_check(&*build, &params, 1e-5).unwrap();
            assert!(err < 1e-5, "{label}: err = {err}");
        };

        let a = random_tensor(&mut rng, &[3, 4]);
        let b = random_tensor(&mut rng, &[3, 4]);
        check(
            vec![a.clone(), b.clone()],
            Box::new(|t, ids| {
                let s = t.add(ids[0], ids[1])?;
                t.sum(s)
            }),
            "add",
        );
        check(
            vec![a.clone(), b.clone()],
            Box::new(|t, ids| {
                let s = t.mul(ids[0], ids[1])?;
                t.sum(s)
            }),
            "mul",
        );
        let bias = random_tensor(&mut rng, &[4]);
        check(
            vec![a.clone(), bias],
            Box::new(|t, ids| {
                let s = t.add_bias(ids[0], ids[1])?;
                let sq = t.mul(s, s)?;
                t.sum(sq)
            }),
            "add_bias",
        );
        let m1 = random_tensor(&mut rng, &[3, 5]);
        let m2 = random_tensor(&mut rng, &[5, 2]);
        check(
            vec![m1, m2],
            Box::new(|t, ids| {
                let p = t.matmul(ids[0], ids[1])?;
                let sq = t.mul(p, p)?;
                t.sum(sq)
            }),
            "matmul",
        );
        check(
            vec![a.clone()],
            Box::new(|t, ids| {
                let tr = t.transpose(ids[0])?;
                let sq = t.mul(tr, tr)?;
                t.sum(sq)
            }),
            "transpose",
        );
        check(
            vec![a.clone()],
            Box::new(|t, ids| {
                let g = t.gelu(ids[0])?;
                t.sum(g)
            }),
            "gelu",
        );
        check(
            vec![a.clone()],
            Box::new(|t, ids| {
                let sm = t.softmax_rows(ids[0], Some(&[true, true, false, true]))?;
                let sq = t.mul(sm, sm)?;
                t.sum(sq)
            }),
            "softmax_rows",
        );
        check(
            vec![a.clone()],
            Box::new(|t, ids| {
                let n = t.l2norm_rows(ids[0], &[true, false, true])?;
                let sq = t.mul(n, n)?;
                let s = t.sum(sq)?;
                let n2 = t.l2norm_rows(ids[0], &[true, true, true])?;
                let s2 = t.sum(n2)?;
                t.add(s, s2)
            }),
            "l2norm_rows",
        );
        let c1 = random_tensor(&mut rng, &[2, 3]);
        let c2 = random_tensor(&mut rng, &[1, 3]);
        check(
            vec![c1.clone(), c2.clone()],
            Box::new(|t, ids| {
                let c = t.concat_rows(&[ids[0], ids[1]])?;
                let sl = t.slice_rows(c, 1, 2)?;
                let sq = t.mul(sl, sl)?;
                t.sum(sq)
            }),
            "concat_rows/slice_rows",
        );
        let d1 = random_tensor(&mut rng, &[3, 2]);
        let d2 = random_tensor(&mut rng, &[3, 3]);
        check(
            vec![d1, d2],
            Box::new(|t, ids| {
                let c = t.concat_cols(&[ids[0], ids[1]])?;
                let sl = t.slice_cols(c, 1, 3)?;
                let sq = t.mul(sl, sl)?;
                t.sum(sq)
            }),
            "concat_cols/slice_cols",
        );
        let q = random_tensor(&mut rng, &[4, 3]);
        let g = random_tensor(&mut rng, &[6, 3]);
        check(
            vec![q, g],
            Box::new(|t, ids| {
                let grid = t.mean_max_grid(
                    ids[0],
                    ids[1],
                    &[true, true, true, false],
                    &[true, false, true, true, true, false],
                    2,
                    2,
                    3,
                )?;
                let sq = t.mul(grid, grid)?;
                t.sum(sq)
            }),
            "mean_max_grid",
        );
        let s = random_tensor(&mut rng, &[3, 3]);
        check(
            vec![s],
            Box::new(|t, ids| {
                let f = t.info_nce_rows(ids[0], 0.5)?;
                t.sum(f)
            }),
            "info_nce_rows",
        );
    }
}
