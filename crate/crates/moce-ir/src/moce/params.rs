//! Named parameter registry and per-forward binding.
//!
//! Parameters live in one flat registry so the optimizer, checkpoints and
//! gradient bookkeeping all share indices. A [`Binder`] lazily snapshots
//! parameters onto a tape; experts that never execute are never bound, so
//! they receive exactly zero gradient.

use rand_chacha::ChaCha8Rng;
use rand_distr::Distribution;

use crate::error::Result;
use crate::numerics::tape::{Tape, TensorId};
use crate::numerics::tensor::Tensor;

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

pub enum Init {
    Zeros,
    Ones,
    /// Truncated normal: resample outside two standard deviations.
    TruncNormal(f64),
}

pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn alloc(&mut self, name: impl Into<String>, shape: &[usize], init: Init, rng: &mut ChaCha8Rng) -> ParamId {
        let data = match init {
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::full(shape, 1.0),
            Init::TruncNormal(std) => {
                let dist = rand_distr::Normal::new(0.0, std).expect("std must be finite");
                Tensor::from_fn(shape, |_| loop {
                    let v: f64 = dist.sample(rng);
                    if v.abs() <= 2.0 * std {
                        break v;
                    }
                })
            }
        };
        let id = self.tensors.len();
        self.names.push(name.into());
        self.tensors.push(data.with_grad());
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn total_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }
}

/// Lazy parameter-to-tape binding for one forward pass.
pub struct Binder<'p> {
    params: &'p ParamSet,
    bound: Vec<Option<TensorId>>,
}

impl<'p> Binder<'p> {
    pub fn new(params: &'p ParamSet) -> Self {
        Binder {
            bound: vec![None; params.len()],
            params,
        }
    }

    /// Bind a parameter onto the tape (once per tape), returning its node.
    pub fn bind(&mut self, tape: &mut Tape, id: ParamId) -> TensorId {
        if let Some(t) = self.bound[id.0] {
            return t;
        }
        let t = tape.leaf(self.params.tensor(id));
        self.bound[id.0] = Some(t);
        t
    }

    /// Point a parameter at an existing tape node. Gradient-oracle plumbing:
    /// lets a finite-difference probe stand in for one parameter tensor.
    pub fn override_binding(&mut self, id: ParamId, node: TensorId) {
        self.bound[id.0] = Some(node);
    }

    /// Parameters that participated in this forward pass.
    pub fn bound(&self) -> impl Iterator<Item = (ParamId, TensorId)> + '_ {
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, t)| t.map(|t| (ParamId(i), t)))
    }
}

/// A dense projection over the last axis.
#[derive(Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn alloc(ps: &mut ParamSet, prefix: &str, cin: usize, cout: usize, rng: &mut ChaCha8Rng) -> Self {
        Linear {
            w: ps.alloc(format!("{prefix}.w"), &[cin, cout], Init::TruncNormal(0.02), rng),
            b: ps.alloc(format!("{prefix}.b"), &[cout], Init::Zeros, rng),
        }
    }

    pub fn apply(&self, tape: &mut Tape, binder: &mut Binder, x: TensorId) -> Result<TensorId> {
        let w = binder.bind(tape, self.w);
        let b = binder.bind(tape, self.b);
        tape.linear(x, w, b)
    }
}

/// Affine layer norm parameters.
#[derive(Clone, Copy)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl Norm {
    pub fn alloc(ps: &mut ParamSet, prefix: &str, c: usize, rng: &mut ChaCha8Rng) -> Self {
        Norm {
            gamma: ps.alloc(format!("{prefix}.gamma"), &[c], Init::Ones, rng),
            beta: ps.alloc(format!("{prefix}.beta"), &[c], Init::Zeros, rng),
        }
    }

    pub fn apply(&self, tape: &mut Tape, binder: &mut Binder, x: TensorId) -> Result<TensorId> {
        let g = binder.bind(tape, self.gamma);
        let b = binder.bind(tape, self.beta);
        tape.layernorm(x, g, b, 1e-6)
    }
}
