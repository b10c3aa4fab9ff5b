//! Command implementations behind the `moce` binary.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;

use crate::cli::checkpoint::{checkpoint_from_model, restore_into_model, Checkpoint};
use crate::cli::config::{config_reference, RunConfig};
use crate::degradations::{degrade, make_clean, Task};
use crate::error::{MoceError, Result};
use crate::metrics::{psnr, routing_report, ssim};
use crate::network::{ForwardRecord, Model, Routing};
use crate::numerics::gradcheck::{run_suite, DEFAULT_STEP};
use crate::rng::{self, TAG_EVAL_DATA};
use crate::trainer::Trainer;

/// Rebuild the run configuration stored in a checkpoint's manifest.
fn run_config_from_meta(ck: &Checkpoint) -> Result<RunConfig> {
    let text: String = ck
        .meta
        .iter()
        .filter(|(k, _)| k.starts_with("model.") || k.starts_with("train.") || k.starts_with("data."))
        .filter(|(k, _)| k != "train.step")
        .map(|(k, v)| format!("{k}={v}\n"))
        .collect();
    RunConfig::from_str_source(&text)
}

/// Load a checkpoint and reconstruct its model.
fn load_model(path: &Path) -> Result<(Checkpoint, RunConfig, Model)> {
    let ck = Checkpoint::load(path)?;
    let cfg = run_config_from_meta(&ck)?;
    let mut model = Model::build(cfg.model.clone(), cfg.train.seed)?;
    restore_into_model(&ck, &mut model)?;
    Ok((ck, cfg, model))
}

fn training_meta(cfg: &RunConfig, step: usize, adam_step: u64) -> Vec<(String, String)> {
    let mut meta = cfg.entries();
    meta.push(("train.step".into(), step.to_string()));
    meta.push(("adam.step".into(), adam_step.to_string()));
    meta
}

fn snapshot_path(out: &Path, step: usize) -> PathBuf {
    let stem = out
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "checkpoint".into());
    out.with_file_name(format!("{stem}.step{step}.moce"))
}

/// Train per the config file; write the final checkpoint to `out` and
/// step snapshots (quantization barriers) alongside it when
/// `train.save_every` is set. `resume` continues from a snapshot.
pub fn cmd_train(
    config_path: &Path,
    out: &Path,
    resume: Option<&Path>,
    log_path: Option<&Path>,
) -> Result<()> {
    let cfg = RunConfig::from_file(config_path).map_err(|e| match e {
        // A missing config file is a configuration error: name the path.
        MoceError::Io(io) => MoceError::Parse {
            line: 0,
            message: format!("cannot read config {}: {io}", config_path.display()),
        },
        other => other,
    })?;

    let mut model = Model::build(cfg.model.clone(), cfg.train.seed)?;
    let mut resume_state = None;
    if let Some(resume_path) = resume {
        let ck = Checkpoint::load(resume_path)?;
        let stored = run_config_from_meta(&ck)?;
        if stored.entries() != cfg.entries() {
            return Err(MoceError::Config(
                "resume checkpoint was produced with a different configuration".into(),
            ));
        }
        let adam = restore_into_model(&ck, &mut model)?.ok_or_else(|| {
            MoceError::Corrupt("resume checkpoint lacks optimizer state".into())
        })?;
        let step: usize = ck
            .meta_value("train.step")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| MoceError::Corrupt("resume checkpoint lacks train.step".into()))?;
        resume_state = Some((adam, step));
    }

    let mut trainer = Trainer::new(&mut model, cfg.train.clone(), cfg.gens.clone())?;
    if let Some((adam, step)) = resume_state {
        trainer.adam = adam;
        trainer.step = step;
    }

    let mut log = cfg.log_header();
    let result = (|| -> Result<()> {
        while trainer.step < trainer.cfg.steps {
            let rec = trainer.run_step()?;
            log.push_str(&rec.log_line());
            log.push('\n');
            let done = trainer.step;
            if cfg.save_every > 0 && done % cfg.save_every == 0 && done < trainer.cfg.steps {
                // Quantize first: the snapshot then equals the live state
                // exactly, so resumed and continued runs agree bit for bit.
                trainer.quantize_state_to_f32();
                let meta = training_meta(&cfg, done, trainer.adam.step);
                checkpoint_from_model(trainer.model, Some(&trainer.adam), meta)
                    .save(&snapshot_path(out, done))?;
            }
        }
        Ok(())
    })();

    let log_file = log_path
        .map(|p| p.to_path_buf())
        .unwrap_or_else(|| out.with_extension("log"));
    fs::write(&log_file, &log)?;
    result?;

    trainer.quantize_state_to_f32();
    let meta = training_meta(&cfg, trainer.step, trainer.adam.step);
    checkpoint_from_model(trainer.model, Some(&trainer.adam), meta).save(out)?;
    Ok(())
}

fn eval_set(cfg: &RunConfig, task: Task, task_idx: usize, samples: usize, seed: u64) -> Result<Vec<crate::degradations::DegradationSample>> {
    let size = cfg.train.crop;
    (0..samples)
        .map(|i| {
            let mut r = rng::stream(seed, &[TAG_EVAL_DATA, task_idx as u64, i as u64]);
            let clean_seed: u64 = r.gen();
            let degrade_seed: u64 = r.gen();
            let clean = make_clean(clean_seed, size)?;
            degrade(&clean, task, &cfg.gens, degrade_seed)
        })
        .collect()
}

/// Evaluate PSNR/SSIM and mean compute per task; CSV to the returned string.
pub fn cmd_eval(
    checkpoint: &Path,
    task: Option<Task>,
    samples: usize,
    seed: u64,
) -> Result<String> {
    let (_, cfg, model) = load_model(checkpoint)?;
    let tasks: Vec<Task> = match task {
        Some(t) => vec![t],
        None => cfg.train.task_mix.clone(),
    };
    let mut out = String::from("task,psnr_degraded,psnr_restored,ssim,mean_macs\n");
    for (ti, task) in tasks.iter().enumerate() {
        let set = eval_set(&cfg, *task, ti, samples, seed)?;
        let mut p_deg = 0.0;
        let mut p_res = 0.0;
        let mut s_res = 0.0;
        let mut macs = 0u128;
        for sample in &set {
            let rec = model.infer(&sample.degraded, Routing::Learned)?;
            p_deg += psnr(&sample.degraded, &sample.clean)?;
            p_res += psnr(&rec.restored, &sample.clean)?;
            s_res += ssim(&rec.restored, &sample.clean)?;
            macs += rec.macs as u128;
        }
        let n = set.len() as f64;
        out.push_str(&format!(
            "{},{:.4},{:.4},{:.4},{}\n",
            task.as_str(),
            p_deg / n,
            p_res / n,
            s_res / n,
            macs / set.len() as u128
        ));
    }
    Ok(out)
}

/// Routing frequencies and purity over a labeled eval set
/// (`samples` images per task).
pub fn cmd_route_stats(checkpoint: &Path, samples: usize, seed: u64) -> Result<String> {
    let (_, cfg, model) = load_model(checkpoint)?;
    let mut records: Vec<(ForwardRecord, Task)> = Vec::new();
    for (ti, task) in cfg.train.task_mix.iter().enumerate() {
        for sample in eval_set(&cfg, *task, ti, samples, seed)? {
            records.push((model.infer(&sample.degraded, Routing::Learned)?, *task));
        }
    }
    let report = routing_report(&records)?;
    Ok(format!("{}\n{}", report.csv(), report.summary()))
}

/// Per-path compute table at a given square input size.
pub fn cmd_flops(checkpoint: &Path, size: usize, seed: u64) -> Result<String> {
    let (_, cfg, model) = load_model(checkpoint)?;
    let _ = cfg;
    let img = make_clean(seed, size)?;
    let mut out = String::from("path,macs\n");
    let learned = model.infer(&img, Routing::Learned)?;
    out.push_str(&format!("learned,{}\n", learned.macs));
    for e in 0..model.config.n_experts {
        let rec = model.infer(&img, Routing::Forced(e))?;
        out.push_str(&format!("expert{},{}\n", e + 1, rec.macs));
    }
    Ok(out)
}

/// Gradient oracle over every registered op; `ok` when all pass 1e-6.
pub fn cmd_gradcheck() -> Result<(String, bool)> {
    let results = run_suite(10, DEFAULT_STEP, 7)?;
    let mut out = String::from("op,max_rel_err,pass\n");
    let mut ok = true;
    for (name, err) in &results {
        let pass = *err < 1e-6;
        ok &= pass;
        out.push_str(&format!("{name},{err:.3e},{pass}\n"));
    }
    Ok((out, ok))
}

/// Export labeled samples as flat f32 tensors plus a manifest. Each image
/// is `[h, w, 3]` row-major little-endian f32; the manifest line format is
/// `index,task,seed,size,params,clean_file,degraded_file`.
pub fn cmd_export(
    out_dir: &Path,
    task: Task,
    samples: usize,
    seed: u64,
    size: usize,
) -> Result<String> {
    fs::create_dir_all(out_dir)?;
    let cfg = RunConfig::default();
    let mut manifest = String::new();
    for i in 0..samples {
        let mut r = rng::stream(seed, &[TAG_EVAL_DATA, 0xE0, i as u64]);
        let clean_seed: u64 = r.gen();
        let degrade_seed: u64 = r.gen();
        let clean = make_clean(clean_seed, size)?;
        let sample = degrade(&clean, task, &cfg.gens, degrade_seed)?;
        let clean_file = format!("{}_{i:04}_clean.bin", task.as_str());
        let degraded_file = format!("{}_{i:04}_degraded.bin", task.as_str());
        write_flat_f32(&out_dir.join(&clean_file), sample.clean.data())?;
        write_flat_f32(&out_dir.join(&degraded_file), sample.degraded.data())?;
        manifest.push_str(&format!(
            "{i},{},{degrade_seed},{size},{},{clean_file},{degraded_file}\n",
            task.as_str(),
            sample.params
        ));
    }
    fs::write(out_dir.join("manifest.csv"), &manifest)?;
    Ok(format!(
        "wrote {samples} {} samples to {}\n",
        task.as_str(),
        out_dir.display()
    ))
}

fn write_flat_f32(path: &Path, data: &[f64]) -> Result<()> {
    let mut bytes = Vec::with_capacity(data.len() * 4);
    for v in data {
        bytes.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

/// `config-reference` output.
pub fn cmd_config_reference() -> String {
    config_reference()
}
