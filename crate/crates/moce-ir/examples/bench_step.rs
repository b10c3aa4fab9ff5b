use moce_ir::degradations::GeneratorConfig;
use moce_ir::network::{Model, ModelConfig};
use moce_ir::trainer::{Trainer, TrainConfig};
use moce_ir::degradations::{make_clean, degrade, Task};
use std::time::Instant;

fn main() {
    // sample synthesis cost
    let t0 = Instant::now();
    for s in 0..8 {
        let clean = make_clean(s, 32).unwrap();
        let _ = degrade(&clean, Task::Rain, &GeneratorConfig::default(), s).unwrap();
    }
    println!("make 8 samples: {:.1} ms", t0.elapsed().as_secs_f64()*1e3);

    let mut model = Model::build(ModelConfig::desk_default(), 1).unwrap();
    let mut cfg = TrainConfig::desk_default();
    cfg.steps = 6; cfg.task_mix = vec![Task::Noise, Task::Rain];
    let mut t = Trainer::new(&mut model, cfg, GeneratorConfig::default()).unwrap();
    // warmup
    t.run_step().unwrap();
    for workers in [1usize, 2] {
        t = t.with_workers(workers);
        let t0 = Instant::now();
        for _ in 0..2 { t.run_step().unwrap(); }
        println!("step with {} workers: {:.1} ms", workers, t0.elapsed().as_secs_f64()/2.0*1e3);
    }
}
