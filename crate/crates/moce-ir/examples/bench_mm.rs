use moce_ir::numerics::{Tape, Tensor};
use std::time::Instant;
use rand::Rng;

fn main() {
    let mut rng = moce_ir::rng::stream(1, &[9]);
    let img = Tensor::from_fn(&[32, 32, 16], |_| rng.gen_range(-1.0..1.0)).with_grad();
    let w16 = Tensor::from_fn(&[16, 16], |_| rng.gen_range(-0.1..0.1)).with_grad();
    let b16 = Tensor::zeros(&[16]).with_grad();

    let reps = 500;
    // setup-only
    let t0 = Instant::now();
    for _ in 0..reps {
        let mut t = Tape::new();
        let x = t.leaf(&img);
        let w = t.leaf(&w16);
        let b = t.leaf(&b16);
        std::hint::black_box((x, w, b));
    }
    println!("leaf setup: {:.3} ms", t0.elapsed().as_secs_f64() / reps as f64 * 1e3);

    // forward only
    let t0 = Instant::now();
    for _ in 0..reps {
        let mut t = Tape::new();
        let x = t.leaf(&img);
        let w = t.leaf(&w16);
        let b = t.leaf(&b16);
        let y = t.linear(x, w, b).unwrap();
        let l = t.mean_all(y);
        std::hint::black_box(l);
    }
    let fwd = t0.elapsed().as_secs_f64() / reps as f64;
    println!("fwd only: {:.3} ms", fwd * 1e3);

    // fwd + backward
    let t0 = Instant::now();
    for _ in 0..reps {
        let mut t = Tape::new();
        let x = t.leaf(&img);
        let w = t.leaf(&w16);
        let b = t.leaf(&b16);
        let y = t.linear(x, w, b).unwrap();
        let l = t.mean_all(y);
        t.backward(l).unwrap();
        std::hint::black_box(t.grad(x).is_some());
    }
    let fb = t0.elapsed().as_secs_f64() / reps as f64;
    println!("fwd+bwd: {:.3} ms (bwd {:.3})", fb * 1e3, (fb - fwd) * 1e3);
}
