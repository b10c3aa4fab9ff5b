// Times each tape-op family by replaying representative shapes.
use moce_ir::numerics::{Tape, Tensor};
use std::time::Instant;
use rand::Rng;

fn timeit(name: &str, mut f: impl FnMut()) {
    let t0 = Instant::now();
    let reps = 200;
    for _ in 0..reps { f(); }
    println!("{name}: {:.3} ms", t0.elapsed().as_secs_f64() / reps as f64 * 1e3);
}

fn main() {
    let mut rng = moce_ir::rng::stream(1, &[9]);
    let img = Tensor::from_fn(&[32, 32, 16], |_| rng.gen_range(-1.0..1.0));
    let w16 = Tensor::from_fn(&[16, 16], |_| rng.gen_range(-0.1..0.1));
    let b16 = Tensor::zeros(&[16]);
    let g16 = Tensor::full(&[16], 1.0);

    timeit("linear 1024x16x16 fwd", || {
        let mut t = Tape::new();
        let x = t.leaf(&img); let w = t.leaf(&w16); let b = t.leaf(&b16);
        let _ = t.linear(x, w, b).unwrap();
    });
    timeit("linear fwd+bwd(param grads)", || {
        let mut t = Tape::new();
        let x = t.leaf(&img);
        let w = t.leaf(&w16.clone().with_grad()); let b = t.leaf(&b16.clone().with_grad());
        let y = t.linear(x, w, b).unwrap();
        let l = t.mean_all(y);
        t.backward(l).unwrap();
    });
    timeit("linear fwd+bwd(all grads)", || {
        let mut t = Tape::new();
        let x = t.leaf(&img.clone().with_grad());
        let w = t.leaf(&w16.clone().with_grad()); let b = t.leaf(&b16.clone().with_grad());
        let y = t.linear(x, w, b).unwrap();
        let l = t.mean_all(y);
        t.backward(l).unwrap();
    });
    timeit("layernorm fwd+bwd", || {
        let mut t = Tape::new();
        let x = t.leaf(&img.clone().with_grad());
        let g = t.leaf(&g16.clone().with_grad()); let b = t.leaf(&b16.clone().with_grad());
        let y = t.layernorm(x, g, b, 1e-6).unwrap();
        let l = t.mean_all(y);
        t.backward(l).unwrap();
    });
    timeit("l2norm+tnb+softmax+abt (tsa core)", || {
        let mut t = Tape::new();
        let x = t.leaf(&img.clone().with_grad());
        let qh = t.l2_normalize_cols(x, 1e-12).unwrap();
        let s = t.matmul_tn_b(qh, qh).unwrap();
        let a = t.softmax(s).unwrap();
        let m = t.matmul_a_bt(x, a, vec![32,32,16]).unwrap();
        let l = t.mean_all(m);
        t.backward(l).unwrap();
    });
    timeit("gelu fwd+bwd 1024x32", || {
        let big = Tensor::from_fn(&[32, 32, 32], |_| 0.3);
        let mut t = Tape::new();
        let x = t.leaf(&big.clone().with_grad());
        let y = t.gelu(x);
        let l = t.mean_all(y);
        t.backward(l).unwrap();
    });
    timeit("corr2d 1win 32x32x8 fwd+bwd", || {
        let q = Tensor::from_fn(&[1, 32, 32, 8], |_| 0.2);
        let mut t = Tape::new();
        let a = t.leaf(&q.clone().with_grad());
        let b = t.leaf(&q.clone().with_grad());
        let c = t.circular_corr2d(a, b).unwrap();
        let l = t.mean_all(c);
        t.backward(l).unwrap();
    });
    timeit("sobel 32x32x16 fwd+bwd", || {
        let mut t = Tape::new();
        let x = t.leaf(&img.clone().with_grad());
        let d = t.sobel_descriptor(x).unwrap();
        let l = t.mean_all(d);
        t.backward(l).unwrap();
    });
    timeit("conv3x3 16->16 32x32 fwd+bwd", || {
        let w = Tensor::from_fn(&[3,3,16,16], |_| 0.01);
        let b = Tensor::zeros(&[16]);
        let mut t = Tape::new();
        let x = t.leaf(&img.clone().with_grad());
        let wt = t.leaf(&w.clone().with_grad());
        let bt = t.leaf(&b.clone().with_grad());
        let y = t.conv2d_3x3(x, wt, bt).unwrap();
        let l = t.mean_all(y);
        t.backward(l).unwrap();
    });
    timeit("fourier_l1 32x32x3 fwd+bwd", || {
        let p = Tensor::from_fn(&[32, 32, 3], |_| 0.4);
        let tgt = Tensor::from_fn(&[32, 32, 3], |_| 0.5);
        let mut t = Tape::new();
        let x = t.leaf(&p.clone().with_grad());
        let l = t.fourier_l1(x, &tgt).unwrap();
        t.backward(l).unwrap();
    });
}
