//! Deterministic training loop.
//!
//! Each step: synthesize a batch (task mix + flips), run per-sample forward
//! passes (noisy routing), assemble the batch-level auxiliary loss on a
//! small side tape, inject its gradient into every sample tape as cotangent
//! seeds, run the backward sweeps, reduce gradients in sample order, and
//! apply one Adam update under cosine decay.
//!
//! Batch members may run on worker threads; gradients are reduced serially
//! in sample-index order, so the result is bit-identical to serial
//! execution regardless of worker count (`MOCE_THREADS` caps workers).

use rand::Rng;

use crate::degradations::{degrade, make_clean, GeneratorConfig, Task};
use crate::error::{MoceError, Result};
use crate::moce::params::{ParamId, ParamSet};
use crate::network::{ForwardOptions, Model, Routing};
use crate::numerics::tape::{Tape, TensorId};
use crate::numerics::tensor::Tensor;
use crate::objective::{
    aux_layer_on_tape, complexity_bias, restoration_loss_on_tape,
};
use crate::rng::{self, TAG_AUGMENT, TAG_ROUTE_NOISE, TAG_TRAIN_DATA};

/// Training hyperparameters.
#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    /// Initial learning rate; cosine-decays to zero.
    pub lr: f64,
    pub betas: (f64, f64),
    pub crop: usize,
    pub aux_weight: f64,
    pub fourier_weight: f64,
    pub seed: u64,
    pub task_mix: Vec<Task>,
    /// Replace the complexity bias with all-ones (plain load balancing).
    pub balance_only: bool,
}

impl TrainConfig {
    pub fn desk_default() -> Self {
        TrainConfig {
            steps: 2000,
            batch_size: 8,
            lr: 2e-3,
            betas: (0.9, 0.999),
            crop: 32,
            aux_weight: 0.01,
            fourier_weight: 0.1,
            seed: 42,
            task_mix: Task::ALL.to_vec(),
            balance_only: false,
        }
    }

    pub fn validate(&self, model: &Model) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(MoceError::Config("steps and batch_size must be positive".into()));
        }
        if self.lr <= 0.0 {
            return Err(MoceError::Config("learning rate must be positive".into()));
        }
        if self.task_mix.is_empty() {
            return Err(MoceError::Config("task mix must not be empty".into()));
        }
        if !self.crop.is_power_of_two() || self.crop % model.config.spatial_divisor() != 0 {
            return Err(MoceError::Config(format!(
                "crop {} incompatible with the model's divisor {}",
                self.crop,
                model.config.spatial_divisor()
            )));
        }
        Ok(())
    }
}

/// Cosine decay to zero: `lr0 * (1 + cos(pi * step / total)) / 2`.
pub fn cosine_lr(step: usize, total: usize, lr0: f64) -> f64 {
    let t = (step as f64 / total.max(1) as f64).clamp(0.0, 1.0);
    lr0 * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Adam moments, aligned with the parameter registry.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        AdamState {
            m: params.iter().map(|(_, _, t)| vec![0.0; t.numel()]).collect(),
            v: params.iter().map(|(_, _, t)| vec![0.0; t.numel()]).collect(),
            step: 0,
        }
    }
}

const ADAM_EPS: f64 = 1e-8;

/// One bias-corrected Adam update over the whole registry.
pub fn adam_step(
    params: &mut ParamSet,
    grads: &[Vec<f64>],
    state: &mut AdamState,
    betas: (f64, f64),
    lr: f64,
) -> Result<()> {
    if grads.len() != params.len() {
        return Err(MoceError::Contract(format!(
            "gradient count {} does not cover {} parameters",
            grads.len(),
            params.len()
        )));
    }
    state.step += 1;
    let (b1, b2) = betas;
    let bc1 = 1.0 - b1.powi(state.step as i32);
    let bc2 = 1.0 - b2.powi(state.step as i32);
    for idx in 0..grads.len() {
        let id = ParamId(idx);
        let t = params.tensor_mut(id);
        if grads[idx].len() != t.numel() {
            return Err(MoceError::Dimension {
                op: "adam_step",
                lhs: vec![grads[idx].len()],
                rhs: vec![t.numel()],
            });
        }
        let m = &mut state.m[idx];
        let v = &mut state.v[idx];
        for ((p, g), (mi, vi)) in t
            .data_mut()
            .iter_mut()
            .zip(&grads[idx])
            .zip(m.iter_mut().zip(v.iter_mut()))
        {
            *mi = b1 * *mi + (1.0 - b1) * g;
            *vi = b2 * *vi + (1.0 - b2) * g * g;
            let mhat = *mi / bc1;
            let vhat = *vi / bc2;
            *p -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

/// Per-step log record.
#[derive(Clone, Debug)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub restoration: f64,
    pub aux: f64,
    /// Selected-expert counts per layer.
    pub selections: Vec<Vec<usize>>,
}

impl StepRecord {
    pub fn log_line(&self) -> String {
        let sel = self
            .selections
            .iter()
            .map(|layer| {
                layer
                    .iter()
                    .map(|c| c.to_string())
                    .collect::<Vec<_>>()
                    .join("/")
            })
            .collect::<Vec<_>>()
            .join("|");
        format!(
            "step={} lr={:.8} rest={:.9} aux={:.9} sel={}",
            self.step, self.lr, self.restoration, self.aux, sel
        )
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainLog {
    pub records: Vec<StepRecord>,
}

struct SampleForward {
    tape: Tape,
    bound: Vec<(ParamId, TensorId)>,
    loss: TensorId,
    restoration: f64,
    traces: Vec<crate::moce::layer::RoutingTrace>,
    prob_nodes: Vec<TensorId>,
    load_nodes: Vec<TensorId>,
}

/// Stepwise training driver. The CLI owns checkpoint timing; tests drive
/// single steps directly.
pub struct Trainer<'m> {
    pub model: &'m mut Model,
    pub cfg: TrainConfig,
    pub gens: GeneratorConfig,
    pub adam: AdamState,
    pub step: usize,
    workers: usize,
    /// Per-layer complexity bias (all-ones under `balance_only`).
    biases: Vec<Vec<f64>>,
    noise_std: f64,
}

impl<'m> Trainer<'m> {
    pub fn new(model: &'m mut Model, cfg: TrainConfig, gens: GeneratorConfig) -> Result<Self> {
        cfg.validate(model)?;
        gens.validate()?;
        let workers = worker_count(cfg.batch_size);
        let n = model.config.n_experts;
        let biases = model
            .moce_layers()
            .iter()
            .map(|layer| {
                if cfg.balance_only {
                    Ok(vec![1.0; n])
                } else {
                    let counts: Vec<usize> = layer.specs.iter().map(|s| s.param_count).collect();
                    complexity_bias(&counts, layer.config.bias_norm)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let noise_std = 1.0 / n as f64;
        let adam = AdamState::new(&model.params);
        Ok(Trainer {
            model,
            cfg,
            gens,
            adam,
            step: 0,
            workers,
            biases,
            noise_std,
        })
    }

    /// Override the worker count (tests pin 1 vs many to show equivalence).
    pub fn with_workers(mut self, workers: usize) -> Self {
        self.workers = workers.max(1);
        self
    }

    /// Synthesize sample `i` of the current step: clean crop, task draw,
    /// degradation, joint flips.
    fn make_sample(&self, step: usize, i: usize) -> Result<(Tensor, Tensor)> {
        let mut r = rng::stream(self.cfg.seed, &[TAG_TRAIN_DATA, step as u64, i as u64]);
        let task = self.cfg.task_mix[r.gen_range(0..self.cfg.task_mix.len())];
        let clean_seed: u64 = r.gen();
        let degrade_seed: u64 = r.gen();
        let clean = make_clean(clean_seed, self.cfg.crop)?;
        let sample = degrade(&clean, task, &self.gens, degrade_seed)?;

        let mut a = rng::stream(self.cfg.seed, &[TAG_AUGMENT, step as u64, i as u64]);
        let (fh, fv) = (a.gen::<bool>(), a.gen::<bool>());
        Ok((
            flip(&sample.clean, fh, fv),
            flip(&sample.degraded, fh, fv),
        ))
    }

    fn forward_sample(&self, step: usize, i: usize) -> Result<SampleForward> {
        let (clean, degraded) = self.make_sample(step, i)?;
        let mut tape = Tape::new();
        let mut binder = crate::moce::params::Binder::new(&self.model.params);
        let mut noise = rng::stream(self.cfg.seed, &[TAG_ROUTE_NOISE, step as u64, i as u64]);
        let mut opts = ForwardOptions {
            train: true,
            routing: Routing::Learned,
            noise: Some(&mut noise),
        };
        let pass = self
            .model
            .forward_on_tape(&mut tape, &mut binder, &degraded, &mut opts)?;
        let loss = restoration_loss_on_tape(&mut tape, pass.restored, &clean, self.cfg.fourier_weight)?;
        let restoration = tape.scalar_value(loss);
        Ok(SampleForward {
            bound: binder.bound().collect(),
            loss,
            restoration,
            traces: pass.traces,
            prob_nodes: pass.nodes.iter().map(|n| n.clean_probs).collect(),
            load_nodes: pass
                .nodes
                .iter()
                .map(|n| n.load.expect("train mode records load"))
                .collect(),
            tape,
        })
    }

    /// Forward + backward for the whole batch; gradients per parameter in
    /// registry order, reduced in sample order.
    pub(crate) fn batch_gradients(
        &self,
        step: usize,
    ) -> Result<(Vec<Vec<f64>>, f64, f64, Vec<crate::moce::layer::RoutingTrace>)> {
        let b = self.cfg.batch_size;

        // Phase 1: forwards (parallel, order restored by index).
        let mut samples = run_indexed(self.workers, b, |i| self.forward_sample(step, i))?;

        // NaN gate: name the first offending op.
        for s in &samples {
            if s.restoration.is_nan() {
                let op = s
                    .tape
                    .first_nan()
                    .map(|(name, idx)| format!("{name} (node {idx})"))
                    .unwrap_or_else(|| "restoration loss".into());
                return Err(MoceError::Nan {
                    op: format!("{op} at step {step}"),
                });
            }
        }

        let layers = self.model.moce_layers().len();
        let n = self.model.config.n_experts;

        // Batch-level auxiliary on a side tape, seeded from probability and
        // load sums.
        let mut sum_probs = vec![vec![0.0; n]; layers];
        let mut sum_load = vec![vec![0.0; n]; layers];
        for s in &samples {
            for l in 0..layers {
                for e in 0..n {
                    sum_probs[l][e] += s.tape.value(s.prob_nodes[l])[e];
                    sum_load[l][e] += s.tape.value(s.load_nodes[l])[e];
                }
            }
        }
        let mut aux_tape = Tape::new();
        let mut prob_leaves = Vec::with_capacity(layers);
        let mut load_leaves = Vec::with_capacity(layers);
        let mut terms = Vec::with_capacity(layers);
        for l in 0..layers {
            let p = aux_tape.leaf(&Tensor::from_vec(&[n], sum_probs[l].clone())?.with_grad());
            let ld = aux_tape.leaf(&Tensor::from_vec(&[n], sum_load[l].clone())?.with_grad());
            terms.push(aux_layer_on_tape(&mut aux_tape, p, ld, &self.biases[l])?);
            prob_leaves.push(p);
            load_leaves.push(ld);
        }
        let stacked = aux_tape.stack_scalars(&terms)?;
        let aux_node = aux_tape.mean_all(stacked);
        let aux_value = aux_tape.scalar_value(aux_node);
        if aux_value.is_nan() {
            return Err(MoceError::Nan {
                op: format!("auxiliary loss at step {step}"),
            });
        }
        aux_tape.backward(aux_node)?;
        let aux_w = self.cfg.aux_weight;
        let prob_seeds: Vec<Vec<f64>> = prob_leaves
            .iter()
            .map(|p| {
                aux_tape
                    .grad(*p)
                    .map(|g| g.iter().map(|v| v * aux_w).collect())
                    .unwrap_or_else(|| vec![0.0; n])
            })
            .collect();
        let load_seeds: Vec<Vec<f64>> = load_leaves
            .iter()
            .map(|p| {
                aux_tape
                    .grad(*p)
                    .map(|g| g.iter().map(|v| v * aux_w).collect())
                    .unwrap_or_else(|| vec![0.0; n])
            })
            .collect();

        // Phase 2: seeded backwards. Workers extract compact parameter
        // gradients and drop their tape before taking the next sample, so
        // the peak footprint stays near a single tape per worker.
        let inv_b = 1.0 / b as f64;
        let prob_seeds = &prob_seeds;
        let load_seeds = &load_seeds;
        let owned: Vec<SampleForward> = samples.drain(..).collect();
        let finished = run_indexed_map(self.workers, owned, |mut s: SampleForward| {
            let mut seeds: Vec<(TensorId, Vec<f64>)> = vec![(s.loss, vec![inv_b])];
            for l in 0..s.prob_nodes.len() {
                seeds.push((s.prob_nodes[l], prob_seeds[l].clone()));
                seeds.push((s.load_nodes[l], load_seeds[l].clone()));
            }
            s.tape.backward_seeded(&seeds)?;
            let grads: Vec<(usize, Vec<f64>)> = s
                .bound
                .iter()
                .filter_map(|(pid, tid)| s.tape.grad(*tid).map(|g| (pid.0, g.to_vec())))
                .collect();
            Ok((grads, s.restoration, s.traces))
        })?;

        // Phase 3: serial reduction in sample order.
        let mut grads: Vec<Vec<f64>> = self
            .model
            .params
            .iter()
            .map(|(_, _, t)| vec![0.0; t.numel()])
            .collect();
        let mut rest_mean = 0.0;
        let mut traces = Vec::with_capacity(b * layers);
        for (sample_grads, restoration, mut sample_traces) in finished {
            rest_mean += restoration * inv_b;
            for (pid, g) in sample_grads {
                let acc = &mut grads[pid];
                for (a, v) in acc.iter_mut().zip(&g) {
                    *a += v;
                }
            }
            traces.append(&mut sample_traces);
        }
        Ok((grads, rest_mean, aux_value, traces))
    }

    /// One optimization step; returns its log record.
    pub fn run_step(&mut self) -> Result<StepRecord> {
        let step = self.step;
        let (grads, rest, aux, traces) = self.batch_gradients(step)?;
        let lr = cosine_lr(step, self.cfg.steps, self.cfg.lr);
        adam_step(&mut self.model.params, &grads, &mut self.adam, self.cfg.betas, lr)?;
        self.step += 1;

        let layers = self.model.moce_layers().len();
        let n = self.model.config.n_experts;
        let mut selections = vec![vec![0usize; n]; layers];
        for t in &traces {
            selections[t.layer_id][t.selected] += 1;
        }
        Ok(StepRecord {
            step,
            lr,
            restoration: rest,
            aux,
            selections,
        })
    }

    /// Run the remaining steps, invoking `sink` per record.
    pub fn run(&mut self, sink: &mut dyn FnMut(&StepRecord)) -> Result<TrainLog> {
        let mut log = TrainLog::default();
        while self.step < self.cfg.steps {
            let rec = self.run_step()?;
            sink(&rec);
            log.records.push(rec);
        }
        Ok(log)
    }

    /// Pass the live training state through 32-bit precision. Checkpoints
    /// store f32; quantizing at every save point makes a resumed run and the
    /// uninterrupted run bit-identical from the save point on.
    pub fn quantize_state_to_f32(&mut self) {
        let ids: Vec<ParamId> = self.model.params.iter().map(|(id, _, _)| id).collect();
        for id in ids {
            for v in self.model.params.tensor_mut(id).data_mut() {
                *v = *v as f32 as f64;
            }
        }
        for m in self.adam.m.iter_mut().chain(self.adam.v.iter_mut()) {
            for v in m.iter_mut() {
                *v = *v as f32 as f64;
            }
        }
    }

    /// Routing noise std the load estimate assumes (1/n).
    pub fn noise_std(&self) -> f64 {
        self.noise_std
    }

    /// Per-layer complexity bias in effect.
    pub fn biases(&self) -> &[Vec<f64>] {
        &self.biases
    }
}

/// Joint horizontal/vertical flips.
pub fn flip(t: &Tensor, horizontal: bool, vertical: bool) -> Tensor {
    let (h, w, c) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    Tensor::from_fn(t.shape(), |flat| {
        let cc = flat % c;
        let x = (flat / c) % w;
        let y = flat / (c * w);
        let sy = if vertical { h - 1 - y } else { y };
        let sx = if horizontal { w - 1 - x } else { x };
        t.data()[(sy * w + sx) * c + cc]
    })
}

/// `MOCE_THREADS` caps worker parallelism; defaults to the smaller of the
/// batch size and the machine's parallelism.
fn worker_count(batch: usize) -> usize {
    let hw = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    let cap = std::env::var("MOCE_THREADS")
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
        .filter(|n| *n >= 1)
        .unwrap_or(hw);
    cap.min(batch).max(1)
}

/// Run `f(i)` for `i in 0..count` across workers; results land in index
/// order, so downstream reductions are schedule-independent.
fn run_indexed<T: Send>(
    workers: usize,
    count: usize,
    f: impl Fn(usize) -> Result<T> + Sync,
) -> Result<Vec<T>> {
    if workers <= 1 || count <= 1 {
        return (0..count).map(&f).collect();
    }
    let mut slots: Vec<Option<Result<T>>> = (0..count).map(|_| None).collect();
    let f = &f;
    std::thread::scope(|scope| {
        let chunks = chunk_indices(count, workers);
        let mut handles = Vec::new();
        for chunk in chunks {
            handles.push(scope.spawn(move || {
                chunk
                    .into_iter()
                    .map(|i| (i, f(i)))
                    .collect::<Vec<(usize, Result<T>)>>()
            }));
        }
        for h in handles {
            for (i, r) in h.join().expect("worker panicked") {
                slots[i] = Some(r);
            }
        }
    });
    slots
        .into_iter()
        .map(|s| s.expect("all indices visited"))
        .collect()
}

/// Map items to results across workers, preserving index order. Items are
/// consumed inside the workers so their buffers free as soon as possible.
fn run_indexed_map<T: Send, U: Send>(
    workers: usize,
    items: Vec<T>,
    f: impl Fn(T) -> Result<U> + Sync,
) -> Result<Vec<U>> {
    let count = items.len();
    if workers <= 1 || count <= 1 {
        return items.into_iter().map(f).collect();
    }
    let mut slots: Vec<Option<Result<U>>> = (0..count).map(|_| None).collect();
    let f = &f;
    let mut indexed: Vec<(usize, T)> = items.into_iter().enumerate().collect();
    std::thread::scope(|scope| {
        let mut handles = Vec::new();
        let per = count.div_ceil(workers);
        while !indexed.is_empty() {
            let take = per.min(indexed.len());
            let chunk: Vec<(usize, T)> = indexed.drain(..take).collect();
            handles.push(scope.spawn(move || {
                chunk
                    .into_iter()
                    .map(|(i, item)| (i, f(item)))
                    .collect::<Vec<(usize, Result<U>)>>()
            }));
        }
        for h in handles {
            for (i, r) in h.join().expect("worker panicked") {
                slots[i] = Some(r);
            }
        }
    });
    slots
        .into_iter()
        .map(|s| s.expect("all indices visited"))
        .collect()
}

fn chunk_indices(count: usize, workers: usize) -> Vec<Vec<usize>> {
    let per = count.div_ceil(workers);
    (0..count)
        .collect::<Vec<_>>()
        .chunks(per)
        .map(|c| c.to_vec())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::ModelConfig;

    fn tiny_train_config(steps: usize, batch: usize) -> TrainConfig {
        TrainConfig {
            steps,
            batch_size: batch,
            lr: 1e-3,
            betas: (0.9, 0.999),
            crop: 16,
            aux_weight: 0.01,
            fourier_weight: 0.1,
            seed: 11,
            task_mix: vec![Task::Noise, Task::Rain],
            balance_only: false,
        }
    }

    #[test]
    fn cosine_schedule_endpoints_and_midpoint() {
        assert_eq!(cosine_lr(0, 100, 0.2), 0.2);
        assert!(cosine_lr(100, 100, 0.2).abs() < 1e-17);
        assert!((cosine_lr(50, 100, 0.2) - 0.1).abs() < 1e-15);
    }

    #[test]
    fn adam_zero_gradient_keeps_parameters_and_decays_moments() {
        let mut r = rng::stream(1, &[rng::TAG_INIT]);
        let mut ps = ParamSet::new();
        let _ = ps.alloc("w", &[4], crate::moce::params::Init::Ones, &mut r);
        let mut state = AdamState::new(&ps);
        state.m[0] = vec![1.0; 4];
        state.v[0] = vec![1.0; 4];
        adam_step(&mut ps, &[vec![0.0; 4]], &mut state, (0.9, 0.999), 0.1).unwrap();
        // Moments decay by their betas when the gradient is zero.
        assert!((state.m[0][0] - 0.9).abs() < 1e-15);
        assert!((state.v[0][0] - 0.999).abs() < 1e-15);

        // With zero moments and zero gradient, parameters stay put.
        let mut ps2 = ParamSet::new();
        let id2 = ps2.alloc("w", &[4], crate::moce::params::Init::Ones, &mut r);
        let mut st2 = AdamState::new(&ps2);
        adam_step(&mut ps2, &[vec![0.0; 4]], &mut st2, (0.9, 0.999), 0.1).unwrap();
        assert_eq!(ps2.tensor(id2).data(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn adam_first_step_is_bias_corrected() {
        let mut r = rng::stream(1, &[rng::TAG_INIT]);
        let mut ps = ParamSet::new();
        let id = ps.alloc("w", &[1], crate::moce::params::Init::Ones, &mut r);
        let mut state = AdamState::new(&ps);
        adam_step(&mut ps, &[vec![1.0]], &mut state, (0.9, 0.999), 0.1).unwrap();
        let got = ps.tensor(id).data()[0];
        assert!((got - 0.9).abs() < 1e-7, "first step moved to {got}");
    }

    #[test]
    fn adam_minimizes_a_parabola() {
        let mut r = rng::stream(1, &[rng::TAG_INIT]);
        let mut ps = ParamSet::new();
        let id = ps.alloc("x", &[1], crate::moce::params::Init::Ones, &mut r);
        let mut state = AdamState::new(&ps);
        for _ in 0..500 {
            let x = ps.tensor(id).data()[0];
            adam_step(&mut ps, &[vec![2.0 * x]], &mut state, (0.9, 0.999), 0.05).unwrap();
        }
        let x = ps.tensor(id).data()[0];
        assert!(x.abs() < 1e-3, "adam left |x| = {}", x.abs());
    }

    #[test]
    fn fixed_seed_training_is_bit_identical() {
        let run = || -> Vec<String> {
            let mut model = Model::build(ModelConfig::desk_default(), 3).unwrap();
            let mut t = Trainer::new(&mut model, tiny_train_config(3, 2), GeneratorConfig::default())
                .unwrap();
            let mut lines = Vec::new();
            t.run(&mut |rec| lines.push(rec.log_line())).unwrap();
            lines
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn parallel_and_serial_execution_agree_bitwise() {
        let run = |workers: usize| -> Vec<String> {
            let mut model = Model::build(ModelConfig::desk_default(), 4).unwrap();
            let mut t = Trainer::new(&mut model, tiny_train_config(2, 4), GeneratorConfig::default())
                .unwrap()
                .with_workers(workers);
            let mut lines = Vec::new();
            t.run(&mut |rec| lines.push(rec.log_line())).unwrap();
            lines
        };
        assert_eq!(run(1), run(2));
    }

    #[test]
    fn gradient_flow_reaches_routers_shared_experts_and_a_complexity_expert() {
        let mut model = Model::build(ModelConfig::desk_default(), 5).unwrap();
        let expert_ids: Vec<Vec<Vec<usize>>> = model
            .moce_layers()
            .iter()
            .map(|l| {
                l.experts
                    .iter()
                    .map(|e| e.param_ids().iter().map(|p| p.0).collect())
                    .collect()
            })
            .collect();
        let router_ids: Vec<usize> = model.moce_layers().iter().map(|l| l.router_w.0).collect();
        let shared_ids: Vec<Vec<usize>> = model
            .moce_layers()
            .iter()
            .map(|l| l.shared.param_ids().iter().map(|p| p.0).collect())
            .collect();

        let t = Trainer::new(&mut model, tiny_train_config(1, 4), GeneratorConfig::default())
            .unwrap();
        let (grads, _, _, traces) = t.batch_gradients(0).unwrap();
        let nonzero = |idx: usize| grads[idx].iter().any(|v| *v != 0.0);

        for id in router_ids {
            assert!(nonzero(id), "router grad missing");
        }
        for ids in shared_ids {
            assert!(ids.iter().any(|id| nonzero(*id)), "shared expert grad missing");
        }
        for (l, layer_experts) in expert_ids.iter().enumerate() {
            let executed: Vec<bool> = layer_experts
                .iter()
                .map(|ids| ids.iter().any(|id| nonzero(*id)))
                .collect();
            assert!(
                executed.iter().any(|e| *e),
                "no expert in layer {l} received gradient"
            );
            // Unselected experts get exactly zero gradient.
            let selected: std::collections::HashSet<usize> = traces
                .iter()
                .filter(|t| t.layer_id == l)
                .map(|t| t.selected)
                .collect();
            for (e, ids) in layer_experts.iter().enumerate() {
                if !selected.contains(&e) {
                    assert!(
                        ids.iter().all(|id| grads[*id].iter().all(|v| *v == 0.0)),
                        "unselected expert {e} in layer {l} has gradient"
                    );
                }
            }
        }
    }

    #[test]
    fn aux_weight_zero_still_trains() {
        let mut model = Model::build(ModelConfig::desk_default(), 6).unwrap();
        let mut cfg = tiny_train_config(2, 2);
        cfg.aux_weight = 0.0;
        let mut t = Trainer::new(&mut model, cfg, GeneratorConfig::default()).unwrap();
        let log = t.run(&mut |_| {}).unwrap();
        assert_eq!(log.records.len(), 2);
    }

    #[test]
    fn denoise_only_loss_decreases() {
        let mut model = Model::build(ModelConfig::desk_default(), 7).unwrap();
        let mut cfg = tiny_train_config(60, 2);
        cfg.task_mix = vec![Task::Noise];
        cfg.lr = 2e-3;
        let mut t = Trainer::new(&mut model, cfg, GeneratorConfig::default()).unwrap();
        let log = t.run(&mut |_| {}).unwrap();
        let first: f64 = log.records[..6].iter().map(|r| r.restoration).sum::<f64>() / 6.0;
        let last: f64 = log.records[54..].iter().map(|r| r.restoration).sum::<f64>() / 6.0;
        assert!(
            last < first,
            "loss did not decrease: first {first}, last {last}"
        );
    }

    #[test]
    fn flips_are_involutions() {
        let img = crate::degradations::make_clean(3, 16).unwrap();
        let back = flip(&flip(&img, true, false), true, false);
        assert_eq!(back.data(), img.data());
        let back = flip(&flip(&img, true, true), true, true);
        assert_eq!(back.data(), img.data());
    }
}
