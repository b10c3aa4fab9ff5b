//! Tensor core: dense f64 tensors, tape-based reverse-mode autodiff, FFT and
//! the finite-difference gradient oracle.

pub mod fft;
pub mod gradcheck;
pub mod special;
pub mod tape;
pub mod tensor;

pub use fft::{fft2, ifft2};
pub use gradcheck::{grad_check, registered_op_cases, run_suite, DEFAULT_STEP};
pub use tape::{Tape, TensorId};
pub use tensor::{ComplexTensor, Tensor};

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    /// Triple-loop reference matmul.
    fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for kk in 0..k {
                    out[i * n + j] += a[i * k + kk] * b[kk * n + j];
                }
            }
        }
        out
    }

    /// Six-loop reference 3x3 convolution with zero padding.
    fn naive_conv3x3(
        x: &[f64],
        w: &[f64],
        b: &[f64],
        h: usize,
        wd: usize,
        cin: usize,
        cout: usize,
    ) -> Vec<f64> {
        let mut out = vec![0.0; h * wd * cout];
        for y in 0..h {
            for xx in 0..wd {
                for co in 0..cout {
                    let mut acc = b[co];
                    for ky in 0..3usize {
                        for kx in 0..3usize {
                            let iy = y as isize + ky as isize - 1;
                            let ix = xx as isize + kx as isize - 1;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                continue;
                            }
                            for ci in 0..cin {
                                acc += x[((iy as usize) * wd + ix as usize) * cin + ci]
                                    * w[((ky * 3 + kx) * cin + ci) * cout + co];
                            }
                        }
                    }
                    out[(y * wd + xx) * cout + co] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn matmul_identity_returns_input() {
        let mut tape = Tape::new();
        let a = Tensor::from_fn(&[3, 3], |i| (i * 7 % 5) as f64 - 2.0);
        let eye = Tensor::from_fn(&[3, 3], |i| if i / 3 == i % 3 { 1.0 } else { 0.0 });
        let ia = tape.leaf(&eye);
        let xa = tape.leaf(&a);
        let y = tape.matmul(ia, xa).unwrap();
        assert_eq!(tape.value(y), a.data());
    }

    #[test]
    fn matmul_zero_annihilates() {
        let mut tape = Tape::new();
        let a = tape.constant(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let z = tape.constant(&[2, 2], vec![0.0; 4]);
        let y = tape.matmul(a, z).unwrap();
        assert_eq!(tape.value(y), &[0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_reference() {
        let mut rng = crate::rng::stream(9, &[2]);
        let a: Vec<f64> = (0..20).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..15).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let expect = naive_matmul(&a, &b, 4, 5, 3);
        let mut tape = Tape::new();
        let ta = tape.constant(&[4, 5], a);
        let tb = tape.constant(&[5, 3], b);
        let y = tape.matmul(ta, tb).unwrap();
        for (got, want) in tape.value(y).iter().zip(&expect) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(&[2, 3], vec![0.0; 6]);
        let b = tape.constant(&[4, 2], vec![0.0; 8]);
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn conv3x3_delta_kernel_is_identity() {
        // Center tap 1 on the diagonal channel map.
        let c = 2;
        let mut w = Tensor::zeros(&[3, 3, c, c]);
        for ch in 0..c {
            let idx = ((1 * 3 + 1) * c + ch) * c + ch;
            w.data_mut()[idx] = 1.0;
        }
        let mut rng = crate::rng::stream(9, &[3]);
        let x = Tensor::from_fn(&[5, 4, c], |_| rng.gen_range(-1.0..1.0));
        let mut tape = Tape::new();
        let tx = tape.leaf(&x);
        let tw = tape.leaf(&w);
        let tb = tape.constant(&[c], vec![0.0; c]);
        let y = tape.conv2d_3x3(tx, tw, tb).unwrap();
        for (got, want) in tape.value(y).iter().zip(x.data()) {
            assert!((got - want).abs() < 1e-15);
        }
    }

    #[test]
    fn conv3x3_zero_weights_give_constant_bias_map() {
        let mut tape = Tape::new();
        let x = tape.constant(&[4, 4, 2], vec![0.5; 32]);
        let w = tape.constant(&[3, 3, 2, 3], vec![0.0; 54]);
        let b = tape.constant(&[3], vec![0.25, -0.5, 1.0]);
        let y = tape.conv2d_3x3(x, w, b).unwrap();
        for p in 0..16 {
            assert_eq!(&tape.value(y)[p * 3..p * 3 + 3], &[0.25, -0.5, 1.0]);
        }
    }

    #[test]
    fn conv3x3_matches_six_loop_reference() {
        let mut rng = crate::rng::stream(9, &[4]);
        let x: Vec<f64> = (0..6 * 6 * 2).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w: Vec<f64> = (0..9 * 2 * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let expect = naive_conv3x3(&x, &w, &b, 6, 6, 2, 3);
        let mut tape = Tape::new();
        let tx = tape.constant(&[6, 6, 2], x);
        let tw = tape.constant(&[3, 3, 2, 3], w);
        let tb = tape.constant(&[3], b);
        let y = tape.conv2d_3x3(tx, tw, tb).unwrap();
        for (got, want) in tape.value(y).iter().zip(&expect) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_uniform_and_shift_invariance() {
        let mut tape = Tape::new();
        let z = tape.constant(&[4], vec![0.0; 4]);
        let s = tape.softmax(z).unwrap();
        for v in tape.value(s) {
            assert!((v - 0.25).abs() < 1e-15);
        }

        let mut rng = crate::rng::stream(9, &[5]);
        let base: Vec<f64> = (0..6).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let shifted: Vec<f64> = base.iter().map(|v| v + 3.7).collect();
        let a = tape.constant(&[6], base);
        let b = tape.constant(&[6], shifted);
        let sa = tape.softmax(a).unwrap();
        let sb = tape.softmax(b).unwrap();
        let mut sum = 0.0;
        for (x, y) in tape.value(sa).iter().zip(tape.value(sb)) {
            assert!((x - y).abs() < 1e-12);
            sum += x;
        }
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_matches_direct_formula() {
        let mut tape = Tape::new();
        let x = tape.constant(&[3], vec![1.0, 2.0, 3.0]);
        let s = tape.softmax(x).unwrap();
        let exps = [1.0f64.exp(), 2.0f64.exp(), 3.0f64.exp()];
        let z: f64 = exps.iter().sum();
        for (got, want) in tape.value(s).iter().zip(exps.iter().map(|e| e / z)) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rejects_nan_eagerly() {
        let mut tape = Tape::new();
        let x = tape.constant(&[3], vec![1.0, f64::NAN, 0.0]);
        assert!(matches!(tape.softmax(x), Err(crate::MoceError::Nan { .. })));
    }

    #[test]
    fn layernorm_constant_row_is_zero_and_beta_offsets() {
        let mut tape = Tape::new();
        let x = tape.constant(&[2, 4], vec![0.7; 8]);
        let ones = tape.constant(&[4], vec![1.0; 4]);
        let zeros = tape.constant(&[4], vec![0.0; 4]);
        let y = tape.layernorm(x, ones, zeros, 1e-6).unwrap();
        for v in tape.value(y) {
            assert!(v.abs() < 1e-9);
        }

        let gz = tape.constant(&[4], vec![0.0; 4]);
        let beta = tape.constant(&[4], vec![0.3; 4]);
        let x2 = tape.constant(&[2, 4], vec![1.0, -1.0, 2.0, 0.5, 0.0, 3.0, -2.0, 1.5]);
        let y2 = tape.layernorm(x2, gz, beta, 1e-6).unwrap();
        for v in tape.value(y2) {
            assert!((v - 0.3).abs() < 1e-15);
        }
    }

    #[test]
    fn layernorm_matches_direct_formula() {
        let mut rng = crate::rng::stream(9, &[6]);
        let row: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let eps = 1e-6;
        let mean = row.iter().sum::<f64>() / 5.0;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 5.0;
        let expect: Vec<f64> = row.iter().map(|v| (v - mean) / (var + eps).sqrt()).collect();
        let mut tape = Tape::new();
        let x = tape.constant(&[1, 5], row);
        let g = tape.constant(&[5], vec![1.0; 5]);
        let b = tape.constant(&[5], vec![0.0; 5]);
        let y = tape.layernorm(x, g, b, eps).unwrap();
        for (got, want) in tape.value(y).iter().zip(&expect) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_twice_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::from_fn(&[3], |i| i as f64).with_grad());
        let y = tape.sum_all(x);
        tape.backward(y).unwrap();
        assert!(tape.backward(y).is_err());
    }

    #[test]
    fn gradients_are_bit_identical_across_reruns() {
        let run = || -> Vec<f64> {
            let mut rng = crate::rng::stream(12, &[7]);
            let x = Tensor::from_fn(&[4, 4], |_| rng.gen_range(-1.0..1.0)).with_grad();
            let w = Tensor::from_fn(&[4, 4], |_| rng.gen_range(-1.0..1.0));
            let mut tape = Tape::new();
            let tx = tape.leaf(&x);
            let tw = tape.leaf(&w);
            let y = tape.matmul(tx, tw).unwrap();
            let s = tape.softmax(y).unwrap();
            let l = tape.mean_all(s);
            tape.backward(l).unwrap();
            tape.grad(tx).unwrap().to_vec()
        };
        let a = run();
        let b = run();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn unreached_leaves_have_no_grad_and_reached_ones_do() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::from_fn(&[3], |i| i as f64).with_grad());
        let unused = tape.leaf(&Tensor::from_fn(&[3], |i| i as f64).with_grad());
        let y = tape.sum_all(x);
        tape.backward(y).unwrap();
        assert!(tape.grad(x).is_some());
        assert!(tape.grad(unused).is_none());
    }

    #[test]
    fn circular_corr_matches_naive_reference() {
        // A[t] = sum_s Q(s + t) K(s), both indices cyclic per axis.
        let w = 8;
        let mut rng = crate::rng::stream(9, &[8]);
        let q: Vec<f64> = (0..w * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let k: Vec<f64> = (0..w * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut expect = vec![0.0; w * w];
        for ty in 0..w {
            for tx in 0..w {
                let mut acc = 0.0;
                for sy in 0..w {
                    for sx in 0..w {
                        acc += q[((sy + ty) % w) * w + (sx + tx) % w] * k[sy * w + sx];
                    }
                }
                expect[ty * w + tx] = acc;
            }
        }
        let mut tape = Tape::new();
        let tq = tape.constant(&[1, w, w, 1], q);
        let tk = tape.constant(&[1, w, w, 1], k);
        let a = tape.circular_corr2d(tq, tk).unwrap();
        let mut max_err: f64 = 0.0;
        for (got, want) in tape.value(a).iter().zip(&expect) {
            max_err = max_err.max((got - want).abs());
        }
        assert!(max_err < 1e-10, "max err {max_err}");
    }

    #[test]
    fn mac_counter_is_deterministic_and_shape_driven() {
        let count = |n: usize| {
            let mut tape = Tape::new();
            let a = tape.constant(&[n, n], vec![1.0; n * n]);
            let b = tape.constant(&[n, n], vec![1.0; n * n]);
            let _ = tape.matmul(a, b).unwrap();
            tape.macs()
        };
        assert_eq!(count(4), 64);
        assert_eq!(count(4), count(4));
        assert!(count(8) > count(4));
    }
}
