use std::time::Instant;

fn work(n: usize) -> f64 {
    let k = 64;
    let a = vec![1.1f64; k * k];
    let b = vec![0.9f64; k * k];
    let mut c = vec![0.0f64; k * k];
    for _ in 0..n {
        for i in 0..k {
            for kk in 0..k {
                let av = a[i * k + kk];
                let brow = &b[kk * k..(kk + 1) * k];
                let crow = &mut c[i * k..(i + 1) * k];
                for (cv, bv) in crow.iter_mut().zip(brow) {
                    *cv += av * bv;
                }
            }
        }
    }
    c[0]
}

fn main() {
    let reps = 60000; // ~2.5 s serial
    let t0 = Instant::now();
    let _ = work(reps);
    let serial = t0.elapsed().as_secs_f64();
    println!("serial sustained: {:.2} s", serial);
    let t0 = Instant::now();
    std::thread::scope(|s| {
        let h1 = s.spawn(|| work(reps));
        let h2 = s.spawn(|| work(reps));
        let _ = (h1.join(), h2.join());
    });
    let par = t0.elapsed().as_secs_f64();
    println!("2-thread sustained 2x work: {:.2} s (scaling {:.2}x)", par, 2.0 * serial / par);
}
