//! Image quality metrics and routing statistics.

use std::collections::BTreeMap;

use crate::degradations::Task;
use crate::error::{MoceError, Result};
use crate::network::ForwardRecord;
use crate::numerics::tensor::Tensor;

/// Peak signal-to-noise ratio over all RGB pixels jointly, dynamic range 1.
/// Identical images return `f64::INFINITY`.
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(MoceError::Dimension {
            op: "psnr",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.numel() as f64;
    if mse == 0.0 {
        Ok(f64::INFINITY)
    } else {
        Ok(-10.0 * mse.log10())
    }
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn gaussian_window() -> [f64; SSIM_WINDOW * SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW * SSIM_WINDOW];
    let half = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for y in 0..SSIM_WINDOW {
        for x in 0..SSIM_WINDOW {
            let dy = y as f64 - half;
            let dx = x as f64 - half;
            let v = (-(dy * dy + dx * dx) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
            w[y * SSIM_WINDOW + x] = v;
            sum += v;
        }
    }
    for v in w.iter_mut() {
        *v /= sum;
    }
    w
}

/// Single-scale SSIM: 11x11 Gaussian window (sigma 1.5), valid positions
/// only, computed per channel and averaged over channels.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(MoceError::Dimension {
            op: "ssim",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let (h, w, channels) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(MoceError::Contract(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} images, got {h}x{w}"
        )));
    }
    let win = gaussian_window();
    let c1 = (SSIM_K1 * 1.0_f64).powi(2);
    let c2 = (SSIM_K2 * 1.0_f64).powi(2);
    let mut total = 0.0;
    for c in 0..channels {
        let mut acc = 0.0;
        let mut count = 0usize;
        for y0 in 0..=h - SSIM_WINDOW {
            for x0 in 0..=w - SSIM_WINDOW {
                let mut mu_a = 0.0;
                let mut mu_b = 0.0;
                let mut aa = 0.0;
                let mut bb = 0.0;
                let mut ab = 0.0;
                for dy in 0..SSIM_WINDOW {
                    for dx in 0..SSIM_WINDOW {
                        let wgt = win[dy * SSIM_WINDOW + dx];
                        let va = a.at3(y0 + dy, x0 + dx, c);
                        let vb = b.at3(y0 + dy, x0 + dx, c);
                        mu_a += wgt * va;
                        mu_b += wgt * vb;
                        aa += wgt * va * va;
                        bb += wgt * vb * vb;
                        ab += wgt * va * vb;
                    }
                }
                let var_a = aa - mu_a * mu_a;
                let var_b = bb - mu_b * mu_b;
                let cov = ab - mu_a * mu_b;
                let l = (2.0 * mu_a * mu_b + c1) / (mu_a * mu_a + mu_b * mu_b + c1);
                let cs = (2.0 * cov + c2) / (var_a + var_b + c2);
                acc += l * cs;
                count += 1;
            }
        }
        total += acc / count as f64;
    }
    Ok(total / channels as f64)
}

/// Expert-selection frequencies per (layer, task), plus batch bookkeeping.
#[derive(Clone, Debug)]
pub struct RoutingHistogram {
    pub n_layers: usize,
    pub n_experts: usize,
    pub tasks: Vec<Task>,
    /// `freq[layer][task_index][expert]`; each row sums to 1.
    pub freq: Vec<Vec<Vec<f64>>>,
    /// Samples per task.
    pub counts: Vec<usize>,
    /// Mean selected expert (1-based) per task, over layers and samples.
    pub mean_selected: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct RoutingReport {
    pub histogram: RoutingHistogram,
    /// `purity[task_index][layer]`: dominant-expert frequency in that row.
    pub purity: Vec<Vec<f64>>,
    /// Number of experts selected at least once anywhere.
    pub coverage: usize,
}

impl RoutingReport {
    /// Best per-task purity across layers.
    pub fn task_purity(&self, task_index: usize) -> f64 {
        self.purity[task_index]
            .iter()
            .cloned()
            .fold(0.0, f64::max)
    }

    /// CSV rows: `layer,task,expert,frequency` (experts 1-based).
    pub fn csv(&self) -> String {
        let mut out = String::from("layer,task,expert,frequency\n");
        for l in 0..self.histogram.n_layers {
            for (ti, task) in self.histogram.tasks.iter().enumerate() {
                for e in 0..self.histogram.n_experts {
                    out.push_str(&format!(
                        "{},{},{},{:.6}\n",
                        l,
                        task.as_str(),
                        e + 1,
                        self.histogram.freq[l][ti][e]
                    ));
                }
            }
        }
        out
    }

    pub fn summary(&self) -> String {
        let mut out = String::new();
        for (ti, task) in self.histogram.tasks.iter().enumerate() {
            out.push_str(&format!(
                "task {}: samples {}, mean expert {:.2}, best layer purity {:.3}\n",
                task.as_str(),
                self.histogram.counts[ti],
                self.histogram.mean_selected[ti],
                self.task_purity(ti)
            ));
        }
        out.push_str(&format!("expert coverage: {}\n", self.coverage));
        out
    }
}

/// Aggregate routing traces from labeled forward records.
pub fn routing_report(records: &[(ForwardRecord, Task)]) -> Result<RoutingReport> {
    let Some((first, _)) = records.first() else {
        return Err(MoceError::Contract("routing_report needs records".into()));
    };
    let n_layers = first.traces.len();
    let n_experts = first
        .traces
        .first()
        .map(|t| t.logits.len())
        .ok_or_else(|| MoceError::Contract("records carry no routing traces".into()))?;

    let mut by_task: BTreeMap<&'static str, (Task, Vec<Vec<usize>>, usize, f64)> = BTreeMap::new();
    for (rec, task) in records {
        if rec.traces.len() != n_layers {
            return Err(MoceError::Contract(
                "records disagree on layer count".into(),
            ));
        }
        let entry = by_task
            .entry(task.as_str())
            .or_insert_with(|| (*task, vec![vec![0; n_experts]; n_layers], 0, 0.0));
        entry.2 += 1;
        for (l, trace) in rec.traces.iter().enumerate() {
            entry.1[l][trace.selected] += 1;
            entry.3 += (trace.selected + 1) as f64;
        }
    }

    let tasks: Vec<Task> = by_task.values().map(|(t, _, _, _)| *t).collect();
    let counts: Vec<usize> = by_task.values().map(|(_, _, c, _)| *c).collect();
    let mean_selected: Vec<f64> = by_task
        .values()
        .map(|(_, _, c, sum)| sum / (*c as f64 * n_layers as f64))
        .collect();

    let mut freq = vec![vec![vec![0.0; n_experts]; tasks.len()]; n_layers];
    let mut used = vec![false; n_experts];
    for (ti, (_, counts_matrix, task_count, _)) in by_task.values().enumerate() {
        for l in 0..n_layers {
            for e in 0..n_experts {
                let f = counts_matrix[l][e] as f64 / *task_count as f64;
                freq[l][ti][e] = f;
                if counts_matrix[l][e] > 0 {
                    used[e] = true;
                }
            }
        }
    }

    let purity: Vec<Vec<f64>> = (0..tasks.len())
        .map(|ti| {
            (0..n_layers)
                .map(|l| freq[l][ti].iter().cloned().fold(0.0, f64::max))
                .collect()
        })
        .collect();
    let coverage = used.iter().filter(|u| **u).count();

    Ok(RoutingReport {
        histogram: RoutingHistogram {
            n_layers,
            n_experts,
            tasks,
            freq,
            counts,
            mean_selected,
        },
        purity,
        coverage,
    })
}
