//! Plain-text `key=value` run configuration.
//!
//! Parsing is total: every accepted file yields a fully specified
//! configuration; unknown keys are errors with their line number, and the
//! log header echoes every final value so no default is applied silently.

use std::fs;
use std::path::Path;

use crate::degradations::{GeneratorConfig, Task};
use crate::error::{MoceError, Result};
use crate::moce::spec::{BiasNorm, ScalingMode};
use crate::network::ModelConfig;
use crate::trainer::TrainConfig;

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub gens: GeneratorConfig,
    /// Save (and quantize) every N steps; 0 saves only at the end.
    pub save_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::desk_default(),
            train: TrainConfig::desk_default(),
            gens: GeneratorConfig::default(),
            save_every: 0,
        }
    }
}

fn parse_usize(line: usize, v: &str) -> Result<usize> {
    v.parse()
        .map_err(|_| MoceError::Parse { line, message: format!("expected an integer, got '{v}'") })
}

fn parse_f64(line: usize, v: &str) -> Result<f64> {
    v.parse()
        .map_err(|_| MoceError::Parse { line, message: format!("expected a number, got '{v}'") })
}

fn parse_u64(line: usize, v: &str) -> Result<u64> {
    v.parse()
        .map_err(|_| MoceError::Parse { line, message: format!("expected a seed, got '{v}'") })
}

fn parse_bool(line: usize, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(MoceError::Parse { line, message: format!("expected true|false, got '{v}'") }),
    }
}

fn parse_usize_list(line: usize, v: &str) -> Result<Vec<usize>> {
    v.split(',')
        .map(|p| parse_usize(line, p.trim()))
        .collect()
}

fn parse_tasks(line: usize, v: &str) -> Result<Vec<Task>> {
    v.split(',')
        .map(|p| {
            Task::parse(p.trim()).map_err(|e| MoceError::Parse { line, message: e.to_string() })
        })
        .collect()
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path)?;
        Self::from_str_source(&text)
    }

    pub fn from_str_source(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let stripped = raw.split('#').next().unwrap_or("").trim();
            if stripped.is_empty() {
                continue;
            }
            let Some((key, value)) = stripped.split_once('=') else {
                return Err(MoceError::Parse {
                    line,
                    message: format!("expected key=value, got '{stripped}'"),
                });
            };
            let (key, value) = (key.trim(), value.trim());
            match key {
                "model.channels" => cfg.model.base_channels = parse_usize(line, value)?,
                "model.encoder_blocks" => cfg.model.encoder_blocks = parse_usize_list(line, value)?,
                "model.decoder_blocks" => cfg.model.decoder_blocks = parse_usize_list(line, value)?,
                "model.refinement_blocks" => {
                    cfg.model.refinement_blocks = parse_usize(line, value)?
                }
                "model.n_experts" => cfg.model.n_experts = parse_usize(line, value)?,
                "model.ffn_expansion" => cfg.model.ffn_expansion = parse_f64(line, value)?,
                "model.scaling_mode" => {
                    cfg.model.scaling_mode = ScalingMode::parse(value)
                        .map_err(|e| MoceError::Parse { line, message: e.to_string() })?
                }
                "model.bias_norm" => {
                    cfg.model.bias_norm = BiasNorm::parse(value)
                        .map_err(|e| MoceError::Parse { line, message: e.to_string() })?
                }
                "train.steps" => cfg.train.steps = parse_usize(line, value)?,
                "train.batch" => cfg.train.batch_size = parse_usize(line, value)?,
                "train.lr" => cfg.train.lr = parse_f64(line, value)?,
                "train.beta1" => cfg.train.betas.0 = parse_f64(line, value)?,
                "train.beta2" => cfg.train.betas.1 = parse_f64(line, value)?,
                "train.crop" => cfg.train.crop = parse_usize(line, value)?,
                "train.aux_weight" => cfg.train.aux_weight = parse_f64(line, value)?,
                "train.fourier_weight" => cfg.train.fourier_weight = parse_f64(line, value)?,
                "train.seed" => cfg.train.seed = parse_u64(line, value)?,
                "train.tasks" => cfg.train.task_mix = parse_tasks(line, value)?,
                "train.balance_only" => cfg.train.balance_only = parse_bool(line, value)?,
                "train.save_every" => cfg.save_every = parse_usize(line, value)?,
                "data.noise_sigma" => cfg.gens.noise_sigma = parse_f64(line, value)?,
                "data.rain_streaks" => cfg.gens.rain_streaks = parse_usize(line, value)?,
                "data.rain_angle" => cfg.gens.rain_angle_deg = parse_f64(line, value)?,
                "data.haze_beta" => cfg.gens.haze_beta = parse_f64(line, value)?,
                "data.haze_airlight" => cfg.gens.haze_airlight = parse_f64(line, value)?,
                "data.blur_sigma" => cfg.gens.blur_sigma = parse_f64(line, value)?,
                "data.lowlight_gamma" => cfg.gens.lowlight_gamma = parse_f64(line, value)?,
                "data.lowlight_gain" => cfg.gens.lowlight_gain = parse_f64(line, value)?,
                unknown => {
                    return Err(MoceError::Parse {
                        line,
                        message: format!("unknown key '{unknown}'"),
                    })
                }
            }
        }
        Ok(cfg)
    }

    /// Every key with its final value, in reference order. Doubles as the
    /// log header (prefixed) and the config reference (with docs).
    pub fn entries(&self) -> Vec<(String, String)> {
        let join = |v: &[usize]| {
            v.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        let tasks = self
            .train
            .task_mix
            .iter()
            .map(|t| t.as_str())
            .collect::<Vec<_>>()
            .join(",");
        vec![
            ("model.channels".into(), self.model.base_channels.to_string()),
            ("model.encoder_blocks".into(), join(&self.model.encoder_blocks)),
            ("model.decoder_blocks".into(), join(&self.model.decoder_blocks)),
            ("model.refinement_blocks".into(), self.model.refinement_blocks.to_string()),
            ("model.n_experts".into(), self.model.n_experts.to_string()),
            ("model.ffn_expansion".into(), self.model.ffn_expansion.to_string()),
            ("model.scaling_mode".into(), self.model.scaling_mode.as_str().into()),
            ("model.bias_norm".into(), self.model.bias_norm.as_str().into()),
            ("train.steps".into(), self.train.steps.to_string()),
            ("train.batch".into(), self.train.batch_size.to_string()),
            ("train.lr".into(), format!("{:e}", self.train.lr)),
            ("train.beta1".into(), self.train.betas.0.to_string()),
            ("train.beta2".into(), self.train.betas.1.to_string()),
            ("train.crop".into(), self.train.crop.to_string()),
            ("train.aux_weight".into(), self.train.aux_weight.to_string()),
            ("train.fourier_weight".into(), self.train.fourier_weight.to_string()),
            ("train.seed".into(), self.train.seed.to_string()),
            ("train.tasks".into(), tasks),
            ("train.balance_only".into(), self.train.balance_only.to_string()),
            ("train.save_every".into(), self.save_every.to_string()),
            ("data.noise_sigma".into(), self.gens.noise_sigma.to_string()),
            ("data.rain_streaks".into(), self.gens.rain_streaks.to_string()),
            ("data.rain_angle".into(), self.gens.rain_angle_deg.to_string()),
            ("data.haze_beta".into(), self.gens.haze_beta.to_string()),
            ("data.haze_airlight".into(), self.gens.haze_airlight.to_string()),
            ("data.blur_sigma".into(), self.gens.blur_sigma.to_string()),
            ("data.lowlight_gamma".into(), self.gens.lowlight_gamma.to_string()),
            ("data.lowlight_gain".into(), self.gens.lowlight_gain.to_string()),
        ]
    }

    /// Log-header echo of every final value.
    pub fn log_header(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            out.push_str(&format!("# {k}={v}\n"));
        }
        out
    }
}

/// Generated key reference with defaults and meaning.
pub fn config_reference() -> String {
    let d = RunConfig::default();
    let docs: Vec<(&str, &str)> = vec![
        ("model.channels", "initial embedding width C; doubles per level"),
        ("model.encoder_blocks", "blocks per encoder level, shallow to deep"),
        ("model.decoder_blocks", "blocks per decoder level, deepest first"),
        ("model.refinement_blocks", "full-resolution refinement blocks"),
        ("model.n_experts", "complexity experts per MoCE layer"),
        ("model.ffn_expansion", "gated feed-forward expansion ratio"),
        ("model.scaling_mode", "expert width schedule: nested|exponential"),
        ("model.bias_norm", "complexity bias normalization: p_max|p_min"),
        ("train.steps", "optimization steps"),
        ("train.batch", "samples per step"),
        ("train.lr", "initial learning rate (cosine decay to zero)"),
        ("train.beta1", "Adam first-moment decay"),
        ("train.beta2", "Adam second-moment decay"),
        ("train.crop", "square training crop size"),
        ("train.aux_weight", "auxiliary loss weight"),
        ("train.fourier_weight", "Fourier L1 weight in the reconstruction loss"),
        ("train.seed", "root seed for init, data, noise and augmentation"),
        ("train.tasks", "comma list from noise,rain,haze,blur,lowlight"),
        ("train.balance_only", "true replaces the complexity bias with ones"),
        ("train.save_every", "checkpoint every N steps (0 = end only)"),
        ("data.noise_sigma", "gaussian noise std in [0,0.5]"),
        ("data.rain_streaks", "streaks per rain image"),
        ("data.rain_angle", "streak angle from vertical, degrees"),
        ("data.haze_beta", "haze scattering coefficient"),
        ("data.haze_airlight", "haze airlight intensity"),
        ("data.blur_sigma", "gaussian blur sigma"),
        ("data.lowlight_gamma", "low-light gamma (>= 1)"),
        ("data.lowlight_gain", "low-light gain (0, 1]"),
    ];
    let defaults = d.entries();
    let mut out = String::from("key default description\n");
    for ((key, doc), (dk, dv)) in docs.iter().zip(&defaults) {
        debug_assert_eq!(key, dk);
        out.push_str(&format!("{key} {dv} {doc}\n"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_entries() {
        let cfg = RunConfig::default();
        let text: String = cfg
            .entries()
            .iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect();
        let parsed = RunConfig::from_str_source(&text).unwrap();
        assert_eq!(parsed.entries(), cfg.entries());
    }

    #[test]
    fn unknown_key_reports_line_number() {
        let err = RunConfig::from_str_source("train.steps=5\nbogus.key=1\n").unwrap_err();
        match err {
            MoceError::Parse { line, message } => {
                assert_eq!(line, 2);
                assert!(message.contains("bogus.key"));
            }
            other => panic!("expected parse error, got {other}"),
        }
    }

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let cfg = RunConfig::from_str_source(
            "# a comment\n\ntrain.steps=7 # trailing comment\ntrain.tasks=noise,rain\n",
        )
        .unwrap();
        assert_eq!(cfg.train.steps, 7);
        assert_eq!(cfg.train.task_mix, vec![Task::Noise, Task::Rain]);
    }

    #[test]
    fn malformed_values_report_their_line() {
        let err = RunConfig::from_str_source("train.steps=many\n").unwrap_err();
        match err {
            MoceError::Parse { line, .. } => assert_eq!(line, 1),
            other => panic!("expected parse error, got {other}"),
        }
    }

    #[test]
    fn reference_covers_every_key() {
        let reference = config_reference();
        for (k, _) in RunConfig::default().entries() {
            assert!(reference.contains(&k), "reference missing {k}");
        }
    }
}
