//! The asymmetric U-shaped restoration model.
//!
//! A 3x3 convolution lifts the RGB input to shallow features, an encoder of
//! transformer blocks halves resolution (and doubles channels) per level,
//! and the decoder climbs back with skip concatenation. Every decoder block
//! carries a MoCE layer. The last decoder level keeps its doubled channel
//! count; refinement runs there, a 1x1 collapse plus the shallow features
//! form the global residual, and a final 3x3 convolution predicts a
//! correction added to the input image.

pub mod blocks;

use rand_chacha::ChaCha8Rng;

use crate::error::{MoceError, Result};
use crate::moce::layer::{RouteMode, RoutingNodes, RoutingTrace};
use crate::moce::params::{Binder, Linear, ParamSet};
use crate::moce::spec::{BiasNorm, MoceLayerConfig, ScalingMode};
use crate::numerics::tape::{Tape, TensorId};
use crate::numerics::tensor::Tensor;
use crate::rng;
use blocks::{pixel_shuffle, pixel_unshuffle, Conv, DecBlock, EncBlock};

/// Architecture hyperparameters.
#[derive(Clone, Debug)]
pub struct ModelConfig {
    /// Initial embedding width C; doubles per level.
    pub base_channels: usize,
    /// Blocks per encoder level, shallow to deep; the last entry is the
    /// latent level.
    pub encoder_blocks: Vec<usize>,
    /// Blocks per decoder level in decode order (deepest level first).
    pub decoder_blocks: Vec<usize>,
    pub refinement_blocks: usize,
    pub n_experts: usize,
    pub ffn_expansion: f64,
    pub scaling_mode: ScalingMode,
    pub bias_norm: BiasNorm,
}

impl ModelConfig {
    /// Desk-scale defaults: minutes-long training runs that still exercise
    /// every code path.
    pub fn desk_default() -> Self {
        ModelConfig {
            base_channels: 8,
            encoder_blocks: vec![2, 2],
            decoder_blocks: vec![2],
            refinement_blocks: 2,
            n_experts: 4,
            ffn_expansion: 2.0,
            scaling_mode: ScalingMode::Nested,
            bias_norm: BiasNorm::PMax,
        }
    }

    /// The published configuration: C = 32, encoder [4, 6, 6, 8],
    /// decoder [2, 4, 4], four nested experts.
    pub fn paper_default() -> Self {
        ModelConfig {
            base_channels: 32,
            encoder_blocks: vec![4, 6, 6, 8],
            decoder_blocks: vec![2, 4, 4],
            refinement_blocks: 2,
            n_experts: 4,
            ffn_expansion: 2.0,
            scaling_mode: ScalingMode::Nested,
            bias_norm: BiasNorm::PMax,
        }
    }

    pub fn levels(&self) -> usize {
        self.encoder_blocks.len()
    }

    /// Channels at encoder level `l` (1-based): `C * 2^(l-1)`.
    pub fn channels_at(&self, level: usize) -> usize {
        self.base_channels << (level - 1)
    }

    /// Channels a decoder level runs at. The last (full-resolution) level
    /// keeps the concatenated 2C width; deeper levels reduce to the encoder
    /// width of the same level.
    pub fn decoder_channels(&self, level: usize) -> usize {
        if level == 1 {
            2 * self.base_channels
        } else {
            self.channels_at(level)
        }
    }

    /// Input extents must be divisible by this.
    pub fn spatial_divisor(&self) -> usize {
        1 << (self.levels() - 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels() < 2 {
            return Err(MoceError::Config(
                "need at least two encoder levels".into(),
            ));
        }
        if self.decoder_blocks.len() + 1 != self.levels() {
            return Err(MoceError::Config(format!(
                "decoder must have one level fewer than the encoder: got {} vs {}",
                self.decoder_blocks.len(),
                self.levels()
            )));
        }
        if self.base_channels == 0 || self.n_experts < 2 {
            return Err(MoceError::Config(
                "channels and experts must be positive (n >= 2)".into(),
            ));
        }
        for level in self.decoder_levels() {
            let c = self.decoder_channels(level);
            if c % (1 << self.n_experts) != 0 {
                return Err(MoceError::Config(format!(
                    "decoder level {level} has {c} channels, not divisible by 2^n = {}",
                    1 << self.n_experts
                )));
            }
        }
        Ok(())
    }

    /// Decoder levels in decode order, deepest first.
    pub fn decoder_levels(&self) -> impl Iterator<Item = usize> {
        (1..self.levels()).rev()
    }

    /// Total MoCE layers (= routing decisions per forward pass).
    pub fn moce_layer_count(&self) -> usize {
        self.decoder_blocks.iter().sum()
    }
}

/// How the forward pass picks experts.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Routing {
    Learned,
    /// Fix every MoCE layer to the 0-based expert index.
    Forced(usize),
}

pub struct ForwardOptions<'r> {
    pub train: bool,
    pub routing: Routing,
    /// Routing-noise stream; required when `train` with learned routing.
    pub noise: Option<&'r mut ChaCha8Rng>,
}

impl ForwardOptions<'_> {
    pub fn inference() -> Self {
        ForwardOptions {
            train: false,
            routing: Routing::Learned,
            noise: None,
        }
    }
}

/// Everything the trainer needs from one on-tape forward pass.
pub struct ForwardPass {
    pub restored: TensorId,
    pub traces: Vec<RoutingTrace>,
    pub nodes: Vec<RoutingNodes>,
    /// Multiply-accumulate units recorded up to the restored image.
    pub macs: u64,
}

/// Value-level result of an inference forward pass.
#[derive(Clone, Debug)]
pub struct ForwardRecord {
    pub restored: Tensor,
    pub traces: Vec<RoutingTrace>,
    pub macs: u64,
}

/// Deterministic per-sample compute, straight from the instrumented counter.
pub fn count_flops(record: &ForwardRecord) -> u64 {
    record.macs
}

pub struct Model {
    pub config: ModelConfig,
    pub params: ParamSet,
    shallow: Conv,
    encoder: Vec<Vec<EncBlock>>,
    downs: Vec<Linear>,
    ups: Vec<Linear>,
    skip_reduce: Vec<Option<Linear>>,
    decoder: Vec<Vec<DecBlock>>,
    refine: Vec<EncBlock>,
    collapse: Linear,
    out_conv: Conv,
}

impl Model {
    /// Deterministic build: truncated-normal weights (std 0.02), zero
    /// biases, unit norm scales, all drawn from the seed's init stream.
    pub fn build(config: ModelConfig, seed: u64) -> Result<Model> {
        config.validate()?;
        let mut r = rng::stream(seed, &[rng::TAG_INIT]);
        let mut ps = ParamSet::new();
        let c = config.base_channels;
        let levels = config.levels();

        let shallow = Conv::alloc(&mut ps, "shallow", 3, c, &mut r);

        let mut encoder = Vec::new();
        for (li, &blocks) in config.encoder_blocks.iter().enumerate() {
            let level = li + 1;
            let ch = config.channels_at(level);
            let mut v = Vec::new();
            for b in 0..blocks {
                v.push(EncBlock::alloc(
                    &mut ps,
                    &format!("enc{level}.blk{b}"),
                    ch,
                    config.ffn_expansion,
                    &mut r,
                ));
            }
            encoder.push(v);
        }

        // Downsample from level l to l+1: pixel-unshuffle then 4*C_l -> 2*C_l.
        let mut downs = Vec::new();
        for level in 1..levels {
            let ch = config.channels_at(level);
            downs.push(Linear::alloc(
                &mut ps,
                &format!("down{level}"),
                4 * ch,
                2 * ch,
                &mut r,
            ));
        }

        // Upsample into level l: C_{l+1} -> 4*C_l, then pixel-shuffle.
        let mut ups = Vec::new();
        let mut skip_reduce = Vec::new();
        let mut decoder = Vec::new();
        for (j, level) in config.decoder_levels().enumerate() {
            let ch = config.channels_at(level);
            ups.push(Linear::alloc(
                &mut ps,
                &format!("up{level}"),
                2 * ch,
                4 * ch,
                &mut r,
            ));
            skip_reduce.push(if level == 1 {
                None
            } else {
                Some(Linear::alloc(
                    &mut ps,
                    &format!("skip{level}"),
                    2 * ch,
                    ch,
                    &mut r,
                ))
            });
            let dch = config.decoder_channels(level);
            let mut v = Vec::new();
            for b in 0..config.decoder_blocks[j] {
                let moce_cfg = MoceLayerConfig::new(
                    config.n_experts,
                    dch,
                    config.scaling_mode,
                    config.bias_norm,
                )?;
                v.push(DecBlock::alloc(
                    &mut ps,
                    &format!("dec{level}.blk{b}"),
                    moce_cfg,
                    &mut r,
                )?);
            }
            decoder.push(v);
        }

        let collapse = Linear::alloc(&mut ps, "collapse", 2 * c, c, &mut r);
        let mut refine = Vec::new();
        for b in 0..config.refinement_blocks {
            refine.push(EncBlock::alloc(
                &mut ps,
                &format!("refine.blk{b}"),
                c,
                config.ffn_expansion,
                &mut r,
            ));
        }
        let out_conv = Conv::alloc(&mut ps, "out", c, 3, &mut r);

        Ok(Model {
            config,
            params: ps,
            shallow,
            encoder,
            downs,
            ups,
            skip_reduce,
            decoder,
            refine,
            collapse,
            out_conv,
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.total_scalars()
    }

    /// MoCE layers in trace order (decode order, block by block).
    pub fn moce_layers(&self) -> Vec<&crate::moce::layer::MoceLayer> {
        self.decoder
            .iter()
            .flat_map(|level| level.iter().map(|b| &b.moce))
            .collect()
    }

    /// One line per parameter tensor plus a total; the builder's substitute
    /// for replicating published parameter counts.
    pub fn parameter_report(&self) -> String {
        let mut out = String::new();
        for (_, name, t) in self.params.iter() {
            out.push_str(&format!("{name},{}\n", t.numel()));
        }
        out.push_str(&format!("total,{}\n", self.param_count()));
        out
    }

    /// Forward pass from an image node already on the tape. The node must be
    /// `[h, w, 3]` with extents divisible by the level count's power of two.
    pub fn forward_from_node(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        img_node: TensorId,
        opts: &mut ForwardOptions,
    ) -> Result<ForwardPass> {
        let shape = tape.shape(img_node).to_vec();
        if shape.len() != 3 || shape[2] != 3 {
            return Err(MoceError::Contract(format!(
                "expected an [h, w, 3] image, got {shape:?}"
            )));
        }
        let div = self.config.spatial_divisor();
        if shape[0] % div != 0 || shape[1] % div != 0 {
            return Err(MoceError::Dimension {
                op: "model forward",
                lhs: shape.to_vec(),
                rhs: vec![div, div, 3],
            });
        }
        if opts.train && matches!(opts.routing, Routing::Learned) && opts.noise.is_none() {
            return Err(MoceError::Contract(
                "training forward with learned routing needs a noise stream".into(),
            ));
        }

        let shallow = self.shallow.apply(tape, binder, img_node)?;

        // Encoder sweep, collecting skips.
        let mut z = shallow;
        let mut skips = Vec::new();
        for (li, level_blocks) in self.encoder.iter().enumerate() {
            for block in level_blocks {
                z = block.forward(tape, binder, z)?;
            }
            if li + 1 < self.encoder.len() {
                skips.push(z);
                let down = pixel_unshuffle(tape, z)?;
                z = self.downs[li].apply(tape, binder, down)?;
            }
        }

        // Decoder sweep with skip concatenation.
        let mut traces = Vec::new();
        let mut nodes = Vec::new();
        let mut layer_id = 0;
        for (j, level) in self.config.decoder_levels().enumerate() {
            let expanded = self.ups[j].apply(tape, binder, z)?;
            let up = pixel_shuffle(tape, expanded)?;
            let skip = skips[level - 1];
            z = tape.concat_last(up, skip)?;
            if let Some(reduce) = &self.skip_reduce[j] {
                z = reduce.apply(tape, binder, z)?;
            }
            for block in &self.decoder[j] {
                let mut mode = match (opts.routing, opts.train) {
                    (Routing::Forced(i), _) => RouteMode::Forced(i),
                    (Routing::Learned, false) => RouteMode::Infer,
                    (Routing::Learned, true) => {
                        RouteMode::Train(opts.noise.as_deref_mut().expect("checked above"))
                    }
                };
                let (out, trace, node) = block.forward(tape, binder, z, layer_id, &mut mode)?;
                z = out;
                traces.push(trace);
                nodes.push(node);
                layer_id += 1;
            }
        }

        // Collapse the concatenated decoder width back to C, refine at full
        // resolution, add the shallow features (global residual) and predict
        // a correction on top of the input image.
        let mut f = self.collapse.apply(tape, binder, z)?;
        for block in &self.refine {
            f = block.forward(tape, binder, f)?;
        }
        let fused = tape.add(f, shallow)?;
        let delta = self.out_conv.apply(tape, binder, fused)?;
        let restored = tape.add(img_node, delta)?;

        Ok(ForwardPass {
            restored,
            traces,
            nodes,
            macs: tape.macs(),
        })
    }

    /// Record a full forward pass on the given tape for a tensor image.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        img: &Tensor,
        opts: &mut ForwardOptions,
    ) -> Result<ForwardPass> {
        let img_node = tape.constant(img.shape(), img.data().to_vec());
        self.forward_from_node(tape, binder, img_node, opts)
    }

    /// Gradient-free forward pass on a fresh tape.
    pub fn infer(&self, img: &Tensor, routing: Routing) -> Result<ForwardRecord> {
        let mut tape = Tape::new();
        let mut binder = Binder::new(&self.params);
        let mut opts = ForwardOptions {
            train: false,
            routing,
            noise: None,
        };
        let pass = self.forward_on_tape(&mut tape, &mut binder, img, &mut opts)?;
        Ok(ForwardRecord {
            restored: Tensor::from_vec(
                tape.shape(pass.restored),
                tape.value(pass.restored).to_vec(),
            )?,
            traces: pass.traces,
            macs: pass.macs,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::moce::spec::expert_param_shapes;
    use crate::numerics::gradcheck::grad_check;
    use rand::Rng;

    fn random_image(h: usize, w: usize, seed: u64) -> Tensor {
        let mut r = rng::stream(seed, &[0xD0]);
        Tensor::from_fn(&[h, w, 3], |_| r.gen_range(0.0..1.0))
    }

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            base_channels: 8,
            encoder_blocks: vec![1, 1],
            decoder_blocks: vec![1],
            refinement_blocks: 1,
            n_experts: 2,
            ffn_expansion: 2.0,
            scaling_mode: ScalingMode::Nested,
            bias_norm: BiasNorm::PMax,
        }
    }

    #[test]
    fn paper_default_has_ten_moce_layers_and_doubling_channels() {
        let cfg = ModelConfig::paper_default();
        assert_eq!(cfg.moce_layer_count(), 10);
        let chans: Vec<usize> = (1..=4).map(|l| cfg.channels_at(l)).collect();
        assert_eq!(chans, vec![32, 64, 128, 256]);
        cfg.validate().unwrap();
    }

    #[test]
    fn desk_default_validates_and_counts_two_layers() {
        let cfg = ModelConfig::desk_default();
        cfg.validate().unwrap();
        assert_eq!(cfg.moce_layer_count(), 2);
        assert_eq!(cfg.decoder_channels(1), 16);
    }

    #[test]
    fn mismatched_decoder_depth_is_rejected() {
        let mut cfg = ModelConfig::desk_default();
        cfg.decoder_blocks = vec![2, 2];
        assert!(cfg.validate().is_err());
    }

    /// Enumeration oracle: every tensor the tiny config should allocate,
    /// written out independently of the builder.
    #[test]
    fn tiny_config_parameter_count_matches_enumeration() {
        let model = Model::build(tiny_config(), 7).unwrap();

        let linear = |cin: usize, cout: usize| cin * cout + cout;
        let tsa = |c: usize| 4 * linear(c, c) + 1;
        let norm = |c: usize| 2 * c;
        let ffn = |c: usize| 2 * linear(c, 2 * c) + linear(2 * c, c);
        let enc_block = |c: usize| 2 * norm(c) + tsa(c) + ffn(c);
        let moce = |c: usize, n: usize| {
            let router = 2 * c * n;
            let experts: usize = (1..=n)
                .map(|i| {
                    let r = c >> (n + 1 - i);
                    expert_param_shapes(c, r)
                        .iter()
                        .map(|(_, s)| s.iter().product::<usize>())
                        .sum::<usize>()
                })
                .sum();
            router + experts + 2 * tsa(c)
        };
        let dec_block = |c: usize, n: usize| 2 * norm(c) + tsa(c) + moce(c, n);

        let conv = |cin: usize, cout: usize| 9 * cin * cout + cout;
        let expected = conv(3, 8)                // shallow
            + enc_block(8)                       // enc level 1
            + linear(32, 16)                     // down 1
            + enc_block(16)                      // enc level 2 (latent)
            + linear(16, 32)                     // up into level 1
            + dec_block(16, 2)                   // decoder level 1 at 2C
            + linear(16, 8)                      // collapse
            + enc_block(8)                       // refinement at C
            + conv(8, 3); // output conv
        assert_eq!(model.param_count(), expected);
    }

    #[test]
    fn forward_preserves_shape_and_collects_all_traces() {
        let model = Model::build(ModelConfig::desk_default(), 5).unwrap();
        let img = random_image(32, 32, 1);
        let rec = model.infer(&img, Routing::Learned).unwrap();
        assert_eq!(rec.restored.shape(), &[32, 32, 3]);
        assert_eq!(rec.traces.len(), model.config.moce_layer_count());
    }

    #[test]
    fn indivisible_input_is_rejected_without_padding() {
        let model = Model::build(ModelConfig::desk_default(), 5).unwrap();
        let img = random_image(30, 32, 2);
        assert!(model.infer(&img, Routing::Learned).is_err());
    }

    #[test]
    fn forced_heavy_path_costs_strictly_more() {
        let model = Model::build(ModelConfig::desk_default(), 5).unwrap();
        let img = random_image(32, 32, 3);
        let light = model.infer(&img, Routing::Forced(0)).unwrap();
        let heavy = model.infer(&img, Routing::Forced(3)).unwrap();
        assert!(heavy.macs > light.macs);
    }

    #[test]
    fn inference_traces_and_macs_are_idempotent() {
        let model = Model::build(ModelConfig::desk_default(), 6).unwrap();
        let img = random_image(32, 32, 4);
        let a = model.infer(&img, Routing::Learned).unwrap();
        let b = model.infer(&img, Routing::Learned).unwrap();
        assert_eq!(a.macs, b.macs);
        for (ta, tb) in a.traces.iter().zip(&b.traces) {
            assert_eq!(ta.selected, tb.selected);
            assert_eq!(ta.gate, tb.gate);
            assert_eq!(ta.logits, tb.logits);
        }
    }

    #[test]
    fn macs_depend_only_on_trace_and_size() {
        let model = Model::build(ModelConfig::desk_default(), 6).unwrap();
        let a = model
            .infer(&random_image(32, 32, 5), Routing::Forced(2))
            .unwrap();
        let b = model
            .infer(&random_image(32, 32, 6), Routing::Forced(2))
            .unwrap();
        assert_eq!(count_flops(&a), count_flops(&b));
    }

    /// With everything after the shallow conv zeroed, the network reduces to
    /// `img + out_conv(shallow(img))`, and to the identity once the output
    /// conv is zeroed too.
    #[test]
    fn global_residual_survives_zeroed_trunk() {
        let mut model = Model::build(ModelConfig::desk_default(), 7).unwrap();
        let keep = ["shallow.w", "shallow.b", "out.w", "out.b"];
        let ids: Vec<_> = model
            .params
            .iter()
            .filter(|(_, name, _)| !keep.contains(name))
            .map(|(id, _, _)| id)
            .collect();
        for id in ids {
            for v in model.params.tensor_mut(id).data_mut() {
                *v = 0.0;
            }
        }
        let img = random_image(32, 32, 7);
        let rec = model.infer(&img, Routing::Learned).unwrap();

        // Manual trace: shallow conv, then the output conv, then + img.
        let grab = |n: &str| {
            let id = model.params.find(n).unwrap();
            model.params.tensor(id).data().to_vec()
        };
        let mut tape = Tape::new();
        let wi = tape.constant(&[3, 3, 3, 8], grab("shallow.w"));
        let bi = tape.constant(&[8], grab("shallow.b"));
        let wo = tape.constant(&[3, 3, 8, 3], grab("out.w"));
        let bo = tape.constant(&[3], grab("out.b"));
        let x = tape.constant(&[32, 32, 3], img.data().to_vec());
        let s = tape.conv2d_3x3(x, wi, bi).unwrap();
        let d = tape.conv2d_3x3(s, wo, bo).unwrap();
        let want = tape.add(x, d).unwrap();
        let mut max_err: f64 = 0.0;
        for (g, w) in rec.restored.data().iter().zip(tape.value(want)) {
            max_err = max_err.max((g - w).abs());
        }
        assert!(max_err < 1e-12, "zeroed trunk deviates: {max_err}");

        // Zeroing the output conv as well makes the model the identity.
        for name in ["out.w", "out.b"] {
            let id = model.params.find(name).unwrap();
            for v in model.params.tensor_mut(id).data_mut() {
                *v = 0.0;
            }
        }
        let rec = model.infer(&img, Routing::Learned).unwrap();
        assert_eq!(rec.restored.data(), img.data());
    }

    #[test]
    fn end_to_end_gradient_check_against_input_image() {
        let model = Model::build(tiny_config(), 8).unwrap();
        let point = random_image(8, 8, 9);
        let err = grad_check(
            |tape, x| {
                let mut binder = Binder::new(&model.params);
                let mut opts = ForwardOptions::inference();
                let pass = model.forward_from_node(tape, &mut binder, x, &mut opts)?;
                let sq = tape.mul(pass.restored, pass.restored)?;
                Ok(tape.mean_all(sq))
            },
            &point,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "end-to-end input grad check failed: {err}");
    }

    #[test]
    fn end_to_end_gradient_check_against_router_weights() {
        let model = Model::build(tiny_config(), 8).unwrap();
        let w_id = model.params.find("dec1.blk0.moce.router.w").unwrap();
        let point = model.params.tensor(w_id).clone();
        let img = random_image(8, 8, 10);
        let err = grad_check(
            |tape, x| {
                let mut binder = Binder::new(&model.params);
                binder.override_binding(w_id, x);
                let mut opts = ForwardOptions::inference();
                let pass = model.forward_on_tape(tape, &mut binder, &img, &mut opts)?;
                let sq = tape.mul(pass.restored, pass.restored)?;
                Ok(tape.mean_all(sq))
            },
            &point,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "router-weight grad check failed: {err}");
    }
}
