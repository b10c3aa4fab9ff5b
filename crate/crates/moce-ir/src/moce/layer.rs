//! The mixture-of-complexity-experts layer.
//!
//! One image-level routing decision picks a single complexity expert; its
//! output is modulated by the always-on shared expert, scaled by the routing
//! gate (so the router trains through the task loss), and merged back into
//! the stream through a transposed cross-attention.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{MoceError, Result};
use crate::moce::attention::TsaParams;
use crate::moce::params::{Binder, Init, Linear, ParamId, ParamSet};
use crate::moce::spec::{expert_specs, ExpertSpec, MoceLayerConfig};
use crate::numerics::tape::{Tape, TensorId};

/// Per-layer record of one routing decision.
#[derive(Clone, Debug)]
pub struct RoutingTrace {
    pub layer_id: usize,
    /// Clean (noise-free) logits.
    pub logits: Vec<f64>,
    /// Realized noise; zeros at inference.
    pub noise: Vec<f64>,
    /// 0-based expert index, i.e. expert `selected + 1` in capacity order.
    pub selected: usize,
    /// Softmax probability of the selected expert under the noisy logits.
    pub gate: f64,
}

/// Tape nodes the trainer needs for gradient injection.
pub struct RoutingNodes {
    pub logits: TensorId,
    /// Noise-free softmax probabilities (the importance summands).
    pub clean_probs: TensorId,
    pub gate: TensorId,
    /// Smooth per-expert selection estimate; recorded in train mode only.
    pub load: Option<TensorId>,
}

/// How the layer picks an expert.
pub enum RouteMode<'r> {
    /// Deterministic argmax of the clean logits.
    Infer,
    /// Noisy top-1 with per-sample noise from the supplied stream.
    Train(&'r mut ChaCha8Rng),
    /// Manual override (0-based); gate still reads the clean softmax.
    Forced(usize),
}

pub struct ExpertParams {
    pub proj: Linear,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub back: Linear,
}

impl ExpertParams {
    fn alloc(ps: &mut ParamSet, prefix: &str, c: usize, r: usize, rng: &mut ChaCha8Rng) -> Self {
        ExpertParams {
            proj: Linear::alloc(ps, &format!("{prefix}.proj"), c, r, rng),
            wq: Linear::alloc(ps, &format!("{prefix}.wq"), r, r, rng),
            wk: Linear::alloc(ps, &format!("{prefix}.wk"), r, r, rng),
            wv: Linear::alloc(ps, &format!("{prefix}.wv"), r, r, rng),
            back: Linear::alloc(ps, &format!("{prefix}.back"), r, c, rng),
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![
            self.proj.w, self.proj.b, self.wq.w, self.wq.b, self.wk.w, self.wk.b, self.wv.w,
            self.wv.b, self.back.w, self.back.b,
        ]
    }
}

pub struct MoceLayer {
    pub config: MoceLayerConfig,
    pub specs: Vec<ExpertSpec>,
    pub router_w: ParamId,
    pub experts: Vec<ExpertParams>,
    pub shared: TsaParams,
    pub merge: TsaParams,
}

impl MoceLayer {
    pub fn alloc(
        ps: &mut ParamSet,
        prefix: &str,
        config: MoceLayerConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let specs = expert_specs(&config)?;
        let c = config.channels;
        let router_w = ps.alloc(
            format!("{prefix}.router.w"),
            &[2 * c, config.n_experts],
            Init::TruncNormal(0.02),
            rng,
        );
        let experts = specs
            .iter()
            .map(|s| {
                ExpertParams::alloc(
                    ps,
                    &format!("{prefix}.expert{}", s.index),
                    c,
                    s.embed_width,
                    rng,
                )
            })
            .collect();
        let shared = TsaParams::alloc(ps, &format!("{prefix}.shared"), c, rng);
        let merge = TsaParams::alloc(ps, &format!("{prefix}.merge"), c, rng);
        Ok(MoceLayer {
            config,
            specs,
            router_w,
            experts,
            shared,
            merge,
        })
    }

    /// Parameter count of expert `i` (0-based) from its instantiated tensors.
    pub fn enumerated_param_count(&self, ps: &ParamSet, i: usize) -> usize {
        self.experts[i]
            .param_ids()
            .iter()
            .map(|id| ps.tensor(*id).numel())
            .sum()
    }

    /// Image-level routing: global average plus Sobel magnitudes feed a
    /// linear router; one decision per image.
    pub fn route(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        x: TensorId,
        layer_id: usize,
        mode: &mut RouteMode,
    ) -> Result<(RoutingTrace, RoutingNodes)> {
        let n = self.config.n_experts;
        let c = self.config.channels;
        if tape.shape(x).last() != Some(&c) {
            return Err(MoceError::Config(format!(
                "router expects {c} channels, got shape {:?}",
                tape.shape(x)
            )));
        }
        let gap = tape.spatial_mean(x)?;
        let sob = tape.sobel_descriptor(x)?;
        let desc = tape.concat_last(gap, sob)?;
        let w = binder.bind(tape, self.router_w);
        if tape.shape(w) != [2 * c, n] {
            return Err(MoceError::Config(format!(
                "router weights shaped {:?}, expected [{}, {}]",
                tape.shape(w),
                2 * c,
                n
            )));
        }
        let logits = tape.matmul_dims(desc, w, 1, 2 * c, n, vec![n])?;

        let noise: Vec<f64> = match mode {
            RouteMode::Train(rng) => {
                let std = self.config.noise_variance.sqrt();
                let dist = rand_distr::Normal::new(0.0, std).expect("finite noise std");
                (0..n).map(|_| rng.sample(dist)).collect()
            }
            _ => vec![0.0; n],
        };
        self.route_with_noise(tape, logits, &noise, layer_id, mode)
    }

    /// Routing tail with an explicit noise vector; split out so tests can
    /// pin the realized noise.
    pub(crate) fn route_with_noise(
        &self,
        tape: &mut Tape,
        logits: TensorId,
        noise: &[f64],
        layer_id: usize,
        mode: &RouteMode,
    ) -> Result<(RoutingTrace, RoutingNodes)> {
        let n = self.config.n_experts;
        let noisy = tape.add_const(logits, noise)?;
        let noisy_probs = tape.softmax(noisy)?;
        let selected = match mode {
            RouteMode::Forced(i) => {
                if *i >= n {
                    return Err(MoceError::Config(format!(
                        "forced expert {i} out of range for {n} experts"
                    )));
                }
                *i
            }
            _ => argmax_lowest(tape.value(noisy)),
        };
        let gate = tape.select(noisy_probs, selected)?;
        let clean_probs = tape.softmax(logits)?;

        let load = match mode {
            RouteMode::Train(_) => Some(self.load_estimate(tape, logits, noisy)?),
            _ => None,
        };

        let trace = RoutingTrace {
            layer_id,
            logits: tape.value(logits).to_vec(),
            noise: noise.to_vec(),
            selected,
            gate: tape.scalar_value(gate),
        };
        Ok((
            trace,
            RoutingNodes {
                logits,
                clean_probs,
                gate,
                load,
            },
        ))
    }

    /// Smooth load: `Load_i = Phi((logit_i - max_{j != i} noisy_j) / sigma)`
    /// with `sigma` the routing noise std. Differentiable in every logit.
    fn load_estimate(&self, tape: &mut Tape, logits: TensorId, noisy: TensorId) -> Result<TensorId> {
        let n = self.config.n_experts;
        let inv_std = 1.0 / self.config.noise_variance.sqrt();
        let mut parts = Vec::with_capacity(n);
        for i in 0..n {
            let others: Vec<usize> = (0..n).filter(|j| *j != i).collect();
            let rest = tape.gather(noisy, others, &[n - 1])?;
            let theta = tape.reduce_max(rest)?;
            let li = tape.select(logits, i)?;
            let margin = tape.sub(li, theta)?;
            parts.push(tape.normal_cdf(margin, inv_std));
        }
        tape.stack_scalars(&parts)
    }

    /// One complexity expert: project to its embedding width, window, QKV,
    /// Fourier-domain correlation of Q and K, standardized modulation of V,
    /// unwindow, project back.
    pub fn expert_forward(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        x: TensorId,
        i: usize,
    ) -> Result<TensorId> {
        let spec = &self.specs[i];
        let params = &self.experts[i];
        let shape = tape.shape(x).to_vec();
        if shape.len() != 3 || shape[2] != self.config.channels {
            return Err(MoceError::Config(format!(
                "expert expects [h, w, {}], got {:?}",
                self.config.channels, shape
            )));
        }
        let (h, wd) = (shape[0], shape[1]);
        let win = effective_window(spec.window, h, wd)?;
        let r = spec.embed_width;

        let xe = params.proj.apply(tape, binder, x)?;
        let xw = tape.window_partition(xe, win)?;

        let q = params.wq.apply(tape, binder, xw)?;
        let k = params.wk.apply(tape, binder, xw)?;
        let v = params.wv.apply(tape, binder, xw)?;

        let corr = tape.circular_corr2d(q, k)?;
        let corr = tape.standardize_groups(corr, win * win * r, 1e-6)?;
        let modulated = tape.mul(corr, v)?;

        let spatial = tape.window_merge(modulated, h, wd)?;
        params.back.apply(tape, binder, spatial)
    }

    /// Core of the layer without the residual: route, run the chosen expert,
    /// modulate with the shared expert, gate, and merge via cross-attention.
    pub fn forward_core(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        x: TensorId,
        layer_id: usize,
        mode: &mut RouteMode,
    ) -> Result<(TensorId, RoutingTrace, RoutingNodes)> {
        let (trace, nodes) = self.route(tape, binder, x, layer_id, mode)?;
        let expert_out = self.expert_forward(tape, binder, x, trace.selected)?;
        let shared = self.shared.forward(tape, binder, x)?;
        let modulated = tape.mul(expert_out, shared)?;
        let gated = tape.mul_scalar(modulated, nodes.gate)?;
        let (merged, _) = self.merge.forward_cross(tape, binder, gated, x)?;
        Ok((merged, trace, nodes))
    }

    /// The full layer contract: `x + merge(gate * (E(x) ⊙ S(x)), x)`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        x: TensorId,
        layer_id: usize,
        mode: &mut RouteMode,
    ) -> Result<(TensorId, RoutingTrace, RoutingNodes)> {
        let (core, trace, nodes) = self.forward_core(tape, binder, x, layer_id, mode)?;
        let out = tape.add(x, core)?;
        Ok((out, trace, nodes))
    }
}

/// Lowest index wins ties.
pub fn argmax_lowest(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Clamp a window to the feature extent and insist it tiles the map.
pub fn effective_window(w: usize, h: usize, wd: usize) -> Result<usize> {
    let win = w.min(h).min(wd);
    if !win.is_power_of_two() || h % win != 0 || wd % win != 0 {
        return Err(MoceError::Config(format!(
            "window {win} does not tile a {h}x{wd} feature map"
        )));
    }
    Ok(win)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::moce::spec::{BiasNorm, ScalingMode};
    use crate::numerics::gradcheck::grad_check;
    use crate::numerics::tensor::Tensor;

    fn layer(n: usize, c: usize, seed: u64) -> (ParamSet, MoceLayer) {
        let mut rng = crate::rng::stream(seed, &[crate::rng::TAG_INIT]);
        let mut ps = ParamSet::new();
        let cfg = MoceLayerConfig::new(n, c, ScalingMode::Nested, BiasNorm::PMax).unwrap();
        let l = MoceLayer::alloc(&mut ps, "moce", cfg, &mut rng).unwrap();
        (ps, l)
    }

    fn random_image(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = crate::rng::stream(seed, &[0xA0]);
        Tensor::from_fn(shape, |_| rand::Rng::gen_range(&mut rng, -1.0..1.0))
    }

    #[test]
    fn enumerated_counts_match_specs() {
        let (ps, l) = layer(4, 32, 3);
        for (i, s) in l.specs.iter().enumerate() {
            assert_eq!(l.enumerated_param_count(&ps, i), s.param_count);
        }
        for pair in l.specs.windows(2) {
            assert!(pair[0].param_count < pair[1].param_count);
        }
    }

    #[test]
    fn sobel_descriptor_contract_cases() {
        let mut tape = Tape::new();
        // Constant image: exactly zero response.
        let flat = tape.constant(&[6, 6, 3], vec![0.42; 108]);
        let d = tape.sobel_descriptor(flat).unwrap();
        assert!(tape.value(d).iter().all(|v| *v == 0.0));

        // Vertical step edge in channel 0 only.
        let mut img = Tensor::zeros(&[6, 6, 2]);
        for y in 0..6 {
            for x in 3..6 {
                img.data_mut()[(y * 6 + x) * 2] = 1.0;
            }
        }
        let t = tape.leaf(&img);
        let d = tape.sobel_descriptor(t).unwrap();
        assert!(tape.value(d)[0] > 0.0);
        assert_eq!(tape.value(d)[1], 0.0);
    }

    #[test]
    fn sobel_descriptor_matches_naive_filter() {
        let img = random_image(&[8, 8, 4], 11);
        let mut tape = Tape::new();
        let t = tape.leaf(&img);
        let d = tape.sobel_descriptor(t).unwrap();

        let kx = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
        let ky = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];
        for c in 0..4 {
            let mut acc = 0.0;
            for y in 1..7 {
                for x in 1..7 {
                    let mut gx = 0.0;
                    let mut gy = 0.0;
                    for dy in 0..3 {
                        for dx in 0..3 {
                            let v = img.at3(y + dy - 1, x + dx - 1, c);
                            gx += v * kx[dy][dx];
                            gy += v * ky[dy][dx];
                        }
                    }
                    acc += (gx * gx + gy * gy).sqrt();
                }
            }
            let want = acc / 36.0;
            assert!((tape.value(d)[c] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn routing_tie_breaks_to_lowest_and_gate_is_uniform() {
        let (ps, l) = layer(4, 16, 5);
        let mut tape = Tape::new();
        let binder = Binder::new(&ps);
        let logits = tape.constant(&[4], vec![0.0; 4]);
        let _ = binder; // router weights unused on this path
        let (trace, _) = l
            .route_with_noise(&mut tape, logits, &[0.0; 4], 0, &RouteMode::Infer)
            .unwrap();
        assert_eq!(trace.selected, 0); // expert 1 in capacity order
        assert!((trace.gate - 0.25).abs() < 1e-12);
    }

    #[test]
    fn routing_gate_matches_direct_softmax() {
        let (_, l) = layer(4, 16, 5);
        let mut tape = Tape::new();
        let logits = tape.constant(&[4], vec![0.0, 10.0, 0.0, 0.0]);
        let (trace, _) = l
            .route_with_noise(&mut tape, logits, &[0.0; 4], 0, &RouteMode::Infer)
            .unwrap();
        assert_eq!(trace.selected, 1); // expert 2
        let want = 10.0f64.exp() / (3.0 + 10.0f64.exp());
        assert!((trace.gate - want).abs() < 1e-12);
        assert!((trace.gate - 0.99986).abs() < 1e-4);
    }

    #[test]
    fn routing_is_shift_invariant() {
        let (_, l) = layer(4, 16, 6);
        let mut tape = Tape::new();
        let base = vec![0.3, -0.7, 1.1, 0.2];
        let shifted: Vec<f64> = base.iter().map(|v| v + 5.0).collect();
        let a = tape.constant(&[4], base);
        let b = tape.constant(&[4], shifted);
        let (ta, _) = l
            .route_with_noise(&mut tape, a, &[0.0; 4], 0, &RouteMode::Infer)
            .unwrap();
        let (tb, _) = l
            .route_with_noise(&mut tape, b, &[0.0; 4], 0, &RouteMode::Infer)
            .unwrap();
        assert_eq!(ta.selected, tb.selected);
        assert!((ta.gate - tb.gate).abs() < 1e-12);
    }

    #[test]
    fn inference_routing_is_deterministic() {
        let (ps, l) = layer(4, 16, 7);
        let x = random_image(&[8, 8, 16], 13);
        let run = || {
            let mut tape = Tape::new();
            let mut binder = Binder::new(&ps);
            let t = tape.leaf(&x);
            let (trace, _) = l
                .route(&mut tape, &mut binder, t, 0, &mut RouteMode::Infer)
                .unwrap();
            (trace.selected, trace.gate, trace.logits)
        };
        let (s1, g1, l1) = run();
        let (s2, g2, l2) = run();
        assert_eq!(s1, s2);
        assert_eq!(g1, g2);
        assert_eq!(l1, l2);
    }

    #[test]
    fn expert_forward_preserves_shape_and_zero_maps_to_zero() {
        let (ps, l) = layer(4, 32, 8);
        let mut tape = Tape::new();
        let mut binder = Binder::new(&ps);
        let x = tape.constant(&[16, 16, 32], vec![0.0; 16 * 16 * 32]);
        // Expert 3 has r = 8, window 32 clamped to 16.
        let y = l.expert_forward(&mut tape, &mut binder, x, 2).unwrap();
        assert_eq!(tape.shape(y), &[16, 16, 32]);
        // Biases are zero-initialised, so zero input stays exactly zero.
        assert!(tape.value(y).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn window_that_cannot_tile_is_rejected() {
        assert!(effective_window(64, 48, 48).is_err());
        assert_eq!(effective_window(64, 32, 32).unwrap(), 32);
        assert_eq!(effective_window(8, 32, 32).unwrap(), 8);
    }

    #[test]
    fn expert_flops_increase_with_index() {
        let (ps, l) = layer(4, 16, 9);
        let x = random_image(&[16, 16, 16], 14);
        let mut costs = Vec::new();
        for i in 0..4 {
            let mut tape = Tape::new();
            let mut binder = Binder::new(&ps);
            let t = tape.leaf(&x);
            let before = tape.macs();
            let _ = l.expert_forward(&mut tape, &mut binder, t, i).unwrap();
            costs.push(tape.macs() - before);
        }
        for pair in costs.windows(2) {
            assert!(pair[0] < pair[1], "expert costs not increasing: {costs:?}");
        }
    }

    #[test]
    fn layer_macs_are_fixed_overhead_plus_selected_expert() {
        let (ps, l) = layer(4, 16, 10);
        let x = random_image(&[16, 16, 16], 15);
        let mut expert_cost = Vec::new();
        for i in 0..4 {
            let mut tape = Tape::new();
            let mut binder = Binder::new(&ps);
            let t = tape.leaf(&x);
            let before = tape.macs();
            let _ = l.expert_forward(&mut tape, &mut binder, t, i).unwrap();
            expert_cost.push(tape.macs() - before);
        }
        let mut overheads = Vec::new();
        for i in 0..4 {
            let mut tape = Tape::new();
            let mut binder = Binder::new(&ps);
            let t = tape.leaf(&x);
            let _ = l
                .forward(&mut tape, &mut binder, t, 0, &mut RouteMode::Forced(i))
                .unwrap();
            overheads.push(tape.macs() - expert_cost[i]);
        }
        for pair in overheads.windows(2) {
            assert_eq!(pair[0], pair[1], "overhead varies: {overheads:?}");
        }
    }

    #[test]
    fn gate_gradient_reaches_router_weights() {
        let (ps, l) = layer(2, 8, 11);
        let x = random_image(&[8, 8, 8], 16);
        let mut tape = Tape::new();
        let mut binder = Binder::new(&ps);
        let t = tape.leaf(&x);
        let (y, _, _) = l
            .forward(&mut tape, &mut binder, t, 0, &mut RouteMode::Infer)
            .unwrap();
        let sq = tape.mul(y, y).unwrap();
        let loss = tape.mean_all(sq);
        tape.backward(loss).unwrap();
        let router_node = binder.bound().find(|(p, _)| *p == l.router_w).unwrap().1;
        let g = tape.grad(router_node).expect("router gradient must exist");
        assert!(g.iter().any(|v| v.abs() > 0.0), "router gradient all zero");
    }

    #[test]
    fn unexecuted_experts_get_no_gradient() {
        let (ps, l) = layer(2, 8, 12);
        let x = random_image(&[8, 8, 8], 17);
        let mut tape = Tape::new();
        let mut binder = Binder::new(&ps);
        let t = tape.leaf(&x);
        let (y, trace, _) = l
            .forward(&mut tape, &mut binder, t, 0, &mut RouteMode::Infer)
            .unwrap();
        let loss = tape.mean_all(y);
        tape.backward(loss).unwrap();
        let unused = 1 - trace.selected;
        for pid in l.experts[unused].param_ids() {
            assert!(
                !binder.bound().any(|(p, _)| p == pid),
                "unselected expert was bound to the tape"
            );
        }
        for pid in l.experts[trace.selected].param_ids() {
            let node = binder.bound().find(|(p, _)| *p == pid).unwrap().1;
            assert!(tape.grad(node).is_some());
        }
    }

    #[test]
    fn full_layer_gradient_check_on_8x8x8() {
        let (ps, l) = layer(2, 8, 13);
        let point = random_image(&[8, 8, 8], 18);
        let err = grad_check(
            |tape, x| {
                let mut binder = Binder::new(&ps);
                let (y, _, _) = l.forward(tape, &mut binder, x, 0, &mut RouteMode::Infer)?;
                let sq = tape.mul(y, y)?;
                Ok(tape.mean_all(sq))
            },
            &point,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "moce layer grad check failed: {err}");
    }
}
