use std::time::Instant;

fn main() {
    let n = 32 * 1024;
    let xs: Vec<f64> = (0..n).map(|i| (i as f64 / n as f64) * 4.0 - 2.0).collect();

    let t0 = Instant::now();
    let mut acc = 0.0;
    for _ in 0..100 { for x in &xs { acc += libm::erf(*x); } }
    println!("erf:  {:.1} ns/elem (acc {acc:.1})", t0.elapsed().as_nanos() as f64 / (100.0 * n as f64));

    let t0 = Instant::now();
    let mut acc = 0.0;
    for _ in 0..100 { for x in &xs { acc += (-0.5 * x * x).exp(); } }
    println!("exp:  {:.1} ns/elem (acc {acc:.1})", t0.elapsed().as_nanos() as f64 / (100.0 * n as f64));

    let t0 = Instant::now();
    let mut acc = 0.0;
    for _ in 0..100 { for x in &xs { acc += x.max(0.0); } }
    println!("relu: {:.2} ns/elem (acc {acc:.1})", t0.elapsed().as_nanos() as f64 / (100.0 * n as f64));

    // big-vec alloc+zero+drop cost at activation scale
    let t0 = Instant::now();
    for _ in 0..1000 { let v = vec![0.0f64; 16 * 1024]; std::hint::black_box(&v); }
    println!("alloc+zero 128KB: {:.1} us", t0.elapsed().as_micros() as f64 / 1000.0);
}
