// Experiment driver for the routing-emergence setup: trains the desk model
// on a noise+rain mix and reports routing purity, coverage, PSNR gains and
// forced-path comparisons.
use moce_ir::degradations::{degrade, make_clean, GeneratorConfig, Task};
use moce_ir::metrics::{psnr, routing_report};
use moce_ir::network::{Model, ModelConfig, Routing};
use moce_ir::trainer::{TrainConfig, Trainer};
use rand::Rng;
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let steps: usize = args.first().and_then(|s| s.parse().ok()).unwrap_or(400);
    let lr: f64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(2e-3);
    let aux_w: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(0.01);
    let seed: u64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(42);
    let balance_only: bool = args.get(4).map(|s| s == "lb").unwrap_or(false);

    let mut model = Model::build(ModelConfig::desk_default(), seed).unwrap();
    let mut cfg = TrainConfig::desk_default();
    cfg.steps = steps;
    cfg.lr = lr;
    cfg.aux_weight = aux_w;
    cfg.seed = seed;
    cfg.task_mix = vec![Task::Noise, Task::Rain];
    cfg.balance_only = balance_only;
    let gens = GeneratorConfig::default();

    let t0 = Instant::now();
    let mut trainer = Trainer::new(&mut model, cfg.clone(), gens.clone()).unwrap();
    let mut logs = Vec::new();
    trainer.run(&mut |rec| {
        if rec.step % 100 == 0 || rec.step + 1 == steps {
            logs.push(rec.log_line());
        }
    }).unwrap();
    println!("trained {steps} steps in {:.1} s (lr {lr}, aux {aux_w}, lb={balance_only})", t0.elapsed().as_secs_f64());
    for l in &logs { println!("  {l}"); }

    // Held-out eval: 100 samples per task.
    let mut records = Vec::new();
    let mut noisy_records = Vec::new();
    let mut psnr_deg = [0.0f64; 2];
    let mut psnr_res = [0.0f64; 2];
    for (ti, task) in [Task::Noise, Task::Rain].iter().enumerate() {
        for i in 0..100u64 {
            let mut r = moce_ir::rng::stream(seed, &[moce_ir::rng::TAG_EVAL_DATA, ti as u64, i]);
            let cs: u64 = r.gen();
            let ds: u64 = r.gen();
            let clean = make_clean(cs, 32).unwrap();
            let s = degrade(&clean, *task, &gens, ds).unwrap();
            let rec = model.infer(&s.degraded, Routing::Learned).unwrap();
            // stochastic-policy routing stats (training-style noise)
            {
                let mut tape = moce_ir::numerics::Tape::new();
                let mut binder = moce_ir::moce::params::Binder::new(&model.params);
                let mut noise = moce_ir::rng::stream(seed ^ 0x5eed, &[0xAB, ti as u64, i]);
                let mut opts = moce_ir::network::ForwardOptions { train: true, routing: Routing::Learned, noise: Some(&mut noise) };
                let pass = model.forward_on_tape(&mut tape, &mut binder, &s.degraded, &mut opts).unwrap();
                noisy_records.push((moce_ir::network::ForwardRecord {
                    restored: moce_ir::numerics::Tensor::zeros(&[8,8,3]),
                    traces: pass.traces, macs: pass.macs }, *task));
            }
            psnr_deg[ti] += psnr(&s.degraded, &s.clean).unwrap() / 100.0;
            psnr_res[ti] += psnr(&rec.restored, &s.clean).unwrap() / 100.0;
            records.push((rec, *task));
        }
    }
    let report = routing_report(&records).unwrap();
    println!("== inference routing ==");
    println!("{}", report.summary());
    print!("{}", report.csv());
    let nreport = routing_report(&noisy_records).unwrap();
    println!("== stochastic-policy routing ==");
    println!("{}", nreport.summary());
    print!("{}", nreport.csv());
    // mixed per-layer frequencies under the stochastic policy
    for l in 0..nreport.histogram.n_layers {
        let mut mixed = vec![0.0; nreport.histogram.n_experts];
        let total: usize = nreport.histogram.counts.iter().sum();
        for ti in 0..nreport.histogram.tasks.len() {
            for e in 0..nreport.histogram.n_experts {
                mixed[e] += nreport.histogram.freq[l][ti][e] * nreport.histogram.counts[ti] as f64 / total as f64;
            }
        }
        println!("mixed layer {l}: {:?}", mixed.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>());
    }
    println!("noise: degraded {:.2} dB -> restored {:.2} dB (gain {:+.2})", psnr_deg[0], psnr_res[0], psnr_res[0]-psnr_deg[0]);
    println!("rain:  degraded {:.2} dB -> restored {:.2} dB (gain {:+.2})", psnr_deg[1], psnr_res[1], psnr_res[1]-psnr_deg[1]);

    // Forced-path probe per task (criterion-8 style), 40 samples/task.
    for (ti, task) in [Task::Noise, Task::Rain].iter().enumerate() {
        let mut learned = 0.0;
        let mut forced = vec![0.0; model.config.n_experts];
        for i in 0..40u64 {
            let mut r = moce_ir::rng::stream(seed, &[moce_ir::rng::TAG_EVAL_DATA, ti as u64, i]);
            let cs: u64 = r.gen();
            let ds: u64 = r.gen();
            let clean = make_clean(cs, 32).unwrap();
            let s = degrade(&clean, *task, &gens, ds).unwrap();
            learned += psnr(&model.infer(&s.degraded, Routing::Learned).unwrap().restored, &s.clean).unwrap() / 40.0;
            for e in 0..model.config.n_experts {
                forced[e] += psnr(&model.infer(&s.degraded, Routing::Forced(e)).unwrap().restored, &s.clean).unwrap() / 40.0;
            }
        }
        println!("{} learned {:.3} dB vs forced {:?}", task.as_str(), learned,
            forced.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>());
    }

    // MAC spread across the mixed eval set.
    let macs: Vec<u64> = records.iter().map(|(r, _)| r.macs).collect();
    let min = macs.iter().min().unwrap();
    let max = macs.iter().max().unwrap();
    println!("macs across mixed eval: min {min} max {max} distinct {}", {
        let mut m = macs.clone(); m.sort(); m.dedup(); m.len()
    });
}
