//! Transformer blocks and shape-algebra helpers for the U-shaped model.

use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::moce::attention::TsaParams;
use crate::moce::layer::{MoceLayer, RouteMode, RoutingNodes, RoutingTrace};
use crate::moce::params::{Binder, Init, Linear, Norm, ParamId, ParamSet};
use crate::moce::spec::MoceLayerConfig;
use crate::numerics::tape::{Tape, TensorId};

/// Gated feed-forward: `out(gelu(gate(x)) ⊙ value(x))`.
pub struct Ffn {
    pub gate: Linear,
    pub value: Linear,
    pub out: Linear,
}

impl Ffn {
    pub fn alloc(ps: &mut ParamSet, prefix: &str, c: usize, expansion: f64, rng: &mut ChaCha8Rng) -> Self {
        let hidden = ((c as f64 * expansion).round() as usize).max(1);
        Ffn {
            gate: Linear::alloc(ps, &format!("{prefix}.gate"), c, hidden, rng),
            value: Linear::alloc(ps, &format!("{prefix}.value"), c, hidden, rng),
            out: Linear::alloc(ps, &format!("{prefix}.out"), hidden, c, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, binder: &mut Binder, x: TensorId) -> Result<TensorId> {
        let g = self.gate.apply(tape, binder, x)?;
        let g = tape.gelu(g);
        let v = self.value.apply(tape, binder, x)?;
        let h = tape.mul(g, v)?;
        self.out.apply(tape, binder, h)
    }
}

/// Encoder/refinement block: pre-norm attention and feed-forward residuals.
pub struct EncBlock {
    norm1: Norm,
    tsa: TsaParams,
    norm2: Norm,
    ffn: Ffn,
}

impl EncBlock {
    pub fn alloc(ps: &mut ParamSet, prefix: &str, c: usize, expansion: f64, rng: &mut ChaCha8Rng) -> Self {
        EncBlock {
            norm1: Norm::alloc(ps, &format!("{prefix}.norm1"), c, rng),
            tsa: TsaParams::alloc(ps, &format!("{prefix}.tsa"), c, rng),
            norm2: Norm::alloc(ps, &format!("{prefix}.norm2"), c, rng),
            ffn: Ffn::alloc(ps, &format!("{prefix}.ffn"), c, expansion, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, binder: &mut Binder, x: TensorId) -> Result<TensorId> {
        let n1 = self.norm1.apply(tape, binder, x)?;
        let a = self.tsa.forward(tape, binder, n1)?;
        let x = tape.add(x, a)?;
        let n2 = self.norm2.apply(tape, binder, x)?;
        let f = self.ffn.forward(tape, binder, n2)?;
        tape.add(x, f)
    }
}

/// Decoder block: attention residual, then the MoCE layer in place of the
/// feed-forward.
pub struct DecBlock {
    norm1: Norm,
    tsa: TsaParams,
    norm2: Norm,
    pub moce: MoceLayer,
}

impl DecBlock {
    pub fn alloc(
        ps: &mut ParamSet,
        prefix: &str,
        moce_cfg: MoceLayerConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let c = moce_cfg.channels;
        Ok(DecBlock {
            norm1: Norm::alloc(ps, &format!("{prefix}.norm1"), c, rng),
            tsa: TsaParams::alloc(ps, &format!("{prefix}.tsa"), c, rng),
            norm2: Norm::alloc(ps, &format!("{prefix}.norm2"), c, rng),
            moce: MoceLayer::alloc(ps, &format!("{prefix}.moce"), moce_cfg, rng)?,
        })
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        x: TensorId,
        layer_id: usize,
        mode: &mut RouteMode,
    ) -> Result<(TensorId, RoutingTrace, RoutingNodes)> {
        let n1 = self.norm1.apply(tape, binder, x)?;
        let a = self.tsa.forward(tape, binder, n1)?;
        let x = tape.add(x, a)?;
        let n2 = self.norm2.apply(tape, binder, x)?;
        let (core, trace, nodes) = self.moce.forward_core(tape, binder, n2, layer_id, mode)?;
        let out = tape.add(x, core)?;
        Ok((out, trace, nodes))
    }
}

/// 3x3 convolution parameters.
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
}

impl Conv {
    pub fn alloc(ps: &mut ParamSet, prefix: &str, cin: usize, cout: usize, rng: &mut ChaCha8Rng) -> Self {
        Conv {
            w: ps.alloc(format!("{prefix}.w"), &[3, 3, cin, cout], Init::TruncNormal(0.02), rng),
            b: ps.alloc(format!("{prefix}.b"), &[cout], Init::Zeros, rng),
        }
    }

    pub fn apply(&self, tape: &mut Tape, binder: &mut Binder, x: TensorId) -> Result<TensorId> {
        let w = binder.bind(tape, self.w);
        let b = binder.bind(tape, self.b);
        tape.conv2d_3x3(x, w, b)
    }
}

/// `[h, w, c] -> [h/2, w/2, 4c]`, channel block index `dy*2+dx`.
pub fn pixel_unshuffle(tape: &mut Tape, x: TensorId) -> Result<TensorId> {
    tape.pixel_unshuffle(x)
}

/// `[h, w, 4c] -> [2h, 2w, c]`, inverse of [`pixel_unshuffle`].
pub fn pixel_shuffle(tape: &mut Tape, x: TensorId) -> Result<TensorId> {
    tape.pixel_shuffle(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn shuffle_round_trips() {
        let mut rng = crate::rng::stream(4, &[0xB0]);
        let data: Vec<f64> = (0..6 * 4 * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut tape = Tape::new();
        let x = tape.constant(&[6, 4, 3], data.clone());
        let down = pixel_unshuffle(&mut tape, x).unwrap();
        assert_eq!(tape.shape(down), &[3, 2, 12]);
        let back = pixel_shuffle(&mut tape, down).unwrap();
        assert_eq!(tape.shape(back), &[6, 4, 3]);
        assert_eq!(tape.value(back), data.as_slice());
    }

    #[test]
    fn ffn_zero_weights_give_zero() {
        let mut rng = crate::rng::stream(4, &[crate::rng::TAG_INIT]);
        let mut ps = ParamSet::new();
        let ffn = Ffn::alloc(&mut ps, "ffn", 4, 2.0, &mut rng);
        let mut tape = Tape::new();
        let mut binder = Binder::new(&ps);
        let x = tape.constant(&[2, 4], vec![0.0; 8]);
        let y = ffn.forward(&mut tape, &mut binder, x).unwrap();
        assert!(tape.value(y).iter().all(|v| *v == 0.0));
    }
}
