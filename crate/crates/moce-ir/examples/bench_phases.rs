use moce_ir::degradations::{GeneratorConfig, Task, make_clean, degrade};
use moce_ir::network::{Model, ModelConfig, ForwardOptions, Routing};
use moce_ir::moce::params::Binder;
use moce_ir::numerics::Tape;
use moce_ir::objective::restoration_loss_on_tape;
use std::time::Instant;

fn one_pass(model: &Model, img: &moce_ir::numerics::Tensor, clean: &moce_ir::numerics::Tensor, seed: u64) -> f64 {
    let mut tape = Tape::new();
    let mut binder = Binder::new(&model.params);
    let mut noise = moce_ir::rng::stream(seed, &[3, 0, 0]);
    let mut opts = ForwardOptions { train: true, routing: Routing::Learned, noise: Some(&mut noise) };
    let pass = model.forward_on_tape(&mut tape, &mut binder, img, &mut opts).unwrap();
    let l = restoration_loss_on_tape(&mut tape, pass.restored, clean, 0.1).unwrap();
    tape.backward(l).unwrap();
    tape.value(l)[0]
}

fn main() {
    let model = Model::build(ModelConfig::desk_default(), 1).unwrap();
    let mut pairs = Vec::new();
    for s in 0..8u64 {
        let clean = make_clean(s, 32).unwrap();
        let d = degrade(&clean, if s % 2 == 0 { Task::Noise } else { Task::Rain }, &GeneratorConfig::default(), s).unwrap();
        pairs.push((d.degraded, d.clean));
    }
    // warmup
    let _ = one_pass(&model, &pairs[0].0, &pairs[0].1, 0);

    let t0 = Instant::now();
    for (i, (d, c)) in pairs.iter().enumerate() {
        let _ = one_pass(&model, d, c, i as u64);
    }
    let serial = t0.elapsed().as_secs_f64();
    println!("serial 8 passes: {:.0} ms", serial * 1e3);

    let t0 = Instant::now();
    std::thread::scope(|s| {
        let m = &model;
        let p = &pairs;
        let h1 = s.spawn(move || { for i in 0..4 { let _ = one_pass(m, &p[i].0, &p[i].1, i as u64); } });
        let h2 = s.spawn(move || { for i in 4..8 { let _ = one_pass(m, &p[i].0, &p[i].1, i as u64); } });
        let _ = (h1.join(), h2.join());
    });
    let par = t0.elapsed().as_secs_f64();
    println!("2-thread 8 passes: {:.0} ms (scaling {:.2}x)", par * 1e3, serial / par);

    let ph = phased(&model, &pairs);
    println!("two-phase serial (8 tapes live): {:.0} ms", ph * 1e3);
}

#[allow(dead_code)]
fn phased(model: &Model, pairs: &[(moce_ir::numerics::Tensor, moce_ir::numerics::Tensor)]) -> f64 {
    let t0 = Instant::now();
    let mut kept = Vec::new();
    for (i, (d, c)) in pairs.iter().enumerate() {
        let mut tape = Tape::new();
        let mut binder = Binder::new(&model.params);
        let mut noise = moce_ir::rng::stream(i as u64, &[3, 0, 0]);
        let mut opts = ForwardOptions { train: true, routing: Routing::Learned, noise: Some(&mut noise) };
        let pass = model.forward_on_tape(&mut tape, &mut binder, d, &mut opts).unwrap();
        let l = restoration_loss_on_tape(&mut tape, pass.restored, c, 0.1).unwrap();
        kept.push((tape, l));
    }
    for (tape, l) in kept.iter_mut() {
        tape.backward(*l).unwrap();
    }
    t0.elapsed().as_secs_f64()
}
