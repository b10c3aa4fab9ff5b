//! Expert capacity descriptors and the layer configuration they derive from.

use crate::error::{MoceError, Result};

/// How expert embedding widths scale with the expert index.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum ScalingMode {
    /// `r_i = C / 2^(n+1-i)`: expert 1 is the lightest.
    Nested,
    /// `r_i = C * 2^(i-n)`: twice the nested widths, topping out at `C`.
    Exponential,
}

impl ScalingMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "nested" => Ok(ScalingMode::Nested),
            "exponential" => Ok(ScalingMode::Exponential),
            other => Err(MoceError::Config(format!(
                "unknown scaling mode '{other}' (expected nested|exponential)"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            ScalingMode::Nested => "nested",
            ScalingMode::Exponential => "exponential",
        }
    }
}

/// Which parameter count normalizes the complexity bias.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum BiasNorm {
    PMax,
    PMin,
}

impl BiasNorm {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "p_max" => Ok(BiasNorm::PMax),
            "p_min" => Ok(BiasNorm::PMin),
            other => Err(MoceError::Config(format!(
                "unknown bias normalization '{other}' (expected p_max|p_min)"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            BiasNorm::PMax => "p_max",
            BiasNorm::PMin => "p_min",
        }
    }
}

/// Per-layer MoCE configuration. Top-k is fixed at 1.
#[derive(Clone, Debug)]
pub struct MoceLayerConfig {
    pub n_experts: usize,
    pub channels: usize,
    pub noise_variance: f64,
    pub scaling_mode: ScalingMode,
    pub bias_norm: BiasNorm,
    pub windows: Vec<usize>,
}

impl MoceLayerConfig {
    /// Defaults: noise variance `1/n^2`, windows `2^(2+i)`.
    pub fn new(
        n_experts: usize,
        channels: usize,
        scaling_mode: ScalingMode,
        bias_norm: BiasNorm,
    ) -> Result<Self> {
        if n_experts < 2 {
            return Err(MoceError::Config(format!(
                "need at least 2 experts, got {n_experts}"
            )));
        }
        let divisor = 1usize << n_experts;
        if channels == 0 || channels % divisor != 0 {
            return Err(MoceError::Config(format!(
                "channels {channels} must be divisible by 2^n = {divisor}"
            )));
        }
        Ok(MoceLayerConfig {
            n_experts,
            channels,
            noise_variance: 1.0 / (n_experts * n_experts) as f64,
            scaling_mode,
            bias_norm,
            windows: (1..=n_experts).map(|i| 1usize << (2 + i)).collect(),
        })
    }
}

/// Capacity descriptor for one complexity expert.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExpertSpec {
    /// 1-based index; capacity increases with it.
    pub index: usize,
    pub embed_width: usize,
    pub window: usize,
    pub param_count: usize,
}

/// The tensor shapes one expert allocates. Single source of truth for both
/// the builder and [`expert_specs`], so parameter counts are derived from
/// instantiated shapes rather than a closed formula.
pub fn expert_param_shapes(channels: usize, r: usize) -> Vec<(&'static str, Vec<usize>)> {
    vec![
        ("proj.w", vec![channels, r]),
        ("proj.b", vec![r]),
        ("wq.w", vec![r, r]),
        ("wq.b", vec![r]),
        ("wk.w", vec![r, r]),
        ("wk.b", vec![r]),
        ("wv.w", vec![r, r]),
        ("wv.b", vec![r]),
        ("back.w", vec![r, channels]),
        ("back.b", vec![channels]),
    ]
}

/// Capacity-ordered expert descriptors for a layer configuration.
pub fn expert_specs(cfg: &MoceLayerConfig) -> Result<Vec<ExpertSpec>> {
    let (n, c) = (cfg.n_experts, cfg.channels);
    if cfg.windows.len() != n {
        return Err(MoceError::Config(format!(
            "window list has {} entries for {n} experts",
            cfg.windows.len()
        )));
    }
    let mut specs = Vec::with_capacity(n);
    for i in 1..=n {
        let r = match cfg.scaling_mode {
            ScalingMode::Nested => c >> (n + 1 - i),
            ScalingMode::Exponential => c >> (n - i),
        };
        let window = cfg.windows[i - 1];
        if !window.is_power_of_two() {
            return Err(MoceError::Config(format!(
                "window {window} for expert {i} is not a power of two"
            )));
        }
        let param_count = expert_param_shapes(c, r)
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum();
        specs.push(ExpertSpec {
            index: i,
            embed_width: r,
            window,
            param_count,
        });
    }
    Ok(specs)
}
