//! Training objective: L1 reconstruction in RGB and Fourier domains, plus
//! the complexity-aware auxiliary loss.
//!
//! The auxiliary loss is `mean_layers(CV(Imp)^2 / 2 + CV(Load)^2 / 2)`.
//! Importance multiplies summed noise-free routing probabilities by the
//! complexity bias `b` (per-expert parameter counts normalized by the
//! largest), which is what tilts the otherwise symmetric balance objective
//! toward cheap experts. Passing an all-ones bias recovers the plain
//! load-balancing baseline. Internally the CV^2 terms are computed as
//! `var/mean^2`, which is smooth at uniform inputs where CV itself has a
//! square-root kink.

use crate::error::{MoceError, Result};
use crate::moce::layer::RoutingTrace;
use crate::moce::spec::BiasNorm;
use crate::numerics::special::normal_cdf;
use crate::numerics::tape::{Tape, TensorId};
use crate::numerics::tensor::Tensor;

/// Softmax of a plain vector (max-stabilized).
pub fn softmax_vec(v: &[f64]) -> Vec<f64> {
    let mx = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|x| (x - mx).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.iter().map(|e| e / z).collect()
}

/// Per-expert parameter counts normalized into the complexity bias.
pub fn complexity_bias(counts: &[usize], mode: BiasNorm) -> Result<Vec<f64>> {
    if counts.is_empty() || counts.iter().any(|&c| c == 0) {
        return Err(MoceError::Config(
            "complexity bias needs positive parameter counts".into(),
        ));
    }
    let reference = match mode {
        BiasNorm::PMax => *counts.iter().max().expect("nonempty"),
        BiasNorm::PMin => *counts.iter().min().expect("nonempty"),
    } as f64;
    Ok(counts.iter().map(|&c| c as f64 / reference).collect())
}

/// Coefficient of variation: population standard deviation over mean.
pub fn cv(v: &[f64]) -> Result<f64> {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if mean <= 0.0 {
        return Err(MoceError::Contract(format!(
            "cv requires positive mean, got {mean}"
        )));
    }
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    Ok(var.sqrt() / mean)
}

/// Per-layer routing statistics for a batch.
#[derive(Clone, Debug)]
pub struct LayerGateStats {
    pub n_experts: usize,
    /// Noise-free softmax probabilities, one vector per sample.
    pub probs: Vec<Vec<f64>>,
    /// Clean logits per sample.
    pub logits: Vec<Vec<f64>>,
    /// Realized routing noise per sample (zeros at inference).
    pub noise: Vec<Vec<f64>>,
    pub selected: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct BatchGateStats {
    pub layers: Vec<LayerGateStats>,
}

impl BatchGateStats {
    /// Assemble from per-sample trace lists (all samples must share the
    /// layer structure).
    pub fn from_traces(per_sample: &[Vec<RoutingTrace>]) -> Result<Self> {
        let Some(first) = per_sample.first() else {
            return Err(MoceError::Contract("empty batch".into()));
        };
        let n_layers = first.len();
        let mut layers = Vec::with_capacity(n_layers);
        for l in 0..n_layers {
            let n_experts = first[l].logits.len();
            let mut layer = LayerGateStats {
                n_experts,
                probs: Vec::new(),
                logits: Vec::new(),
                noise: Vec::new(),
                selected: Vec::new(),
            };
            for traces in per_sample {
                if traces.len() != n_layers || traces[l].logits.len() != n_experts {
                    return Err(MoceError::Contract(
                        "inconsistent trace structure across batch".into(),
                    ));
                }
                layer.probs.push(softmax_vec(&traces[l].logits));
                layer.logits.push(traces[l].logits.clone());
                layer.noise.push(traces[l].noise.clone());
                layer.selected.push(traces[l].selected);
            }
            layers.push(layer);
        }
        Ok(BatchGateStats { layers })
    }

    pub fn batch_size(&self) -> usize {
        self.layers.first().map_or(0, |l| l.probs.len())
    }
}

/// Importance: summed noise-free routing probabilities, complexity-weighted.
pub fn importance(layer: &LayerGateStats, bias: &[f64]) -> Vec<f64> {
    let mut sums = vec![0.0; layer.n_experts];
    for p in &layer.probs {
        for (s, v) in sums.iter_mut().zip(p) {
            *s += v;
        }
    }
    sums.iter().zip(bias).map(|(s, b)| s * b).collect()
}

/// Smooth load estimate: for each sample and expert `i`,
/// `Phi((logit_i - theta_i) / noise_std)` where `theta_i` is the highest
/// realized noisy logit among the other experts.
pub fn load(layer: &LayerGateStats, noise_std: f64) -> Vec<f64> {
    let n = layer.n_experts;
    let mut out = vec![0.0; n];
    for (logits, noise) in layer.logits.iter().zip(&layer.noise) {
        for i in 0..n {
            let theta = (0..n)
                .filter(|&j| j != i)
                .map(|j| logits[j] + noise[j])
                .fold(f64::NEG_INFINITY, f64::max);
            out[i] += normal_cdf((logits[i] - theta) / noise_std);
        }
    }
    out
}

/// Value-level auxiliary loss, averaged over layers.
pub fn aux_loss_value(stats: &BatchGateStats, bias: &[f64], noise_std: f64) -> Result<f64> {
    if stats.layers.is_empty() {
        return Err(MoceError::Contract("no layers in gate stats".into()));
    }
    let mut total = 0.0;
    for layer in &stats.layers {
        let imp = importance(layer, bias);
        let ld = load(layer, noise_std);
        let cv_imp = cv(&imp)?;
        let cv_load = cv(&ld)?;
        total += 0.5 * cv_imp * cv_imp + 0.5 * cv_load * cv_load;
    }
    Ok(total / stats.layers.len() as f64)
}

/// One layer's auxiliary term on a tape: `(cv2(sum_probs * b) + cv2(sum_load)) / 2`.
/// `sum_probs` and `sum_load` are `[n]` nodes (batch sums).
pub fn aux_layer_on_tape(
    tape: &mut Tape,
    sum_probs: TensorId,
    sum_load: TensorId,
    bias: &[f64],
) -> Result<TensorId> {
    let n = tape.value(sum_probs).len();
    if bias.len() != n || tape.value(sum_load).len() != n {
        return Err(MoceError::Dimension {
            op: "aux_layer_on_tape",
            lhs: vec![n],
            rhs: vec![bias.len()],
        });
    }
    let b = tape.constant(&[n], bias.to_vec());
    let imp = tape.mul(sum_probs, b)?;
    let t1 = tape.cv_squared(imp)?;
    let t2 = tape.cv_squared(sum_load)?;
    let sum = tape.add(t1, t2)?;
    Ok(tape.scale(sum, 0.5))
}

/// Reconstruction loss on a tape: `mean |pred - target|` in RGB plus
/// `fourier_weight * sum_c mean_bins |FFT(pred_c) - FFT(target_c)|`.
pub fn restoration_loss_on_tape(
    tape: &mut Tape,
    pred: TensorId,
    target: &Tensor,
    fourier_weight: f64,
) -> Result<TensorId> {
    if tape.shape(pred) != target.shape() {
        return Err(MoceError::Dimension {
            op: "restoration_loss",
            lhs: tape.shape(pred).to_vec(),
            rhs: target.shape().to_vec(),
        });
    }
    let t = tape.constant(target.shape(), target.data().to_vec());
    let diff = tape.sub(pred, t)?;
    let absdiff = tape.abs(diff);
    let rgb = tape.mean_all(absdiff);
    let fourier = tape.fourier_l1(pred, target)?;
    let weighted = tape.scale(fourier, fourier_weight);
    tape.add(rgb, weighted)
}

/// Value-level restoration loss (throwaway tape).
pub fn restoration_loss_value(pred: &Tensor, target: &Tensor, fourier_weight: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let p = tape.constant(pred.shape(), pred.data().to_vec());
    let loss = restoration_loss_on_tape(&mut tape, p, target, fourier_weight)?;
    Ok(tape.scalar_value(loss))
}

/// Total objective.
pub fn total_loss(restoration: f64, aux: f64, aux_weight: f64) -> f64 {
    restoration + aux_weight * aux
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::grad_check;
    use rand::Rng;

    fn stats_from_logits(batch_logits: Vec<Vec<f64>>, noise: Option<Vec<Vec<f64>>>) -> BatchGateStats {
        let n = batch_logits[0].len();
        let noise = noise.unwrap_or_else(|| vec![vec![0.0; n]; batch_logits.len()]);
        let layer = LayerGateStats {
            n_experts: n,
            probs: batch_logits.iter().map(|l| softmax_vec(l)).collect(),
            selected: batch_logits
                .iter()
                .zip(&noise)
                .map(|(l, e)| {
                    crate::moce::layer::argmax_lowest(
                        &l.iter().zip(e).map(|(a, b)| a + b).collect::<Vec<_>>(),
                    )
                })
                .collect(),
            logits: batch_logits,
            noise,
        };
        BatchGateStats {
            layers: vec![layer],
        }
    }

    #[test]
    fn bias_divides_by_largest_count() {
        let b = complexity_bias(&[10, 20, 40, 80], BiasNorm::PMax).unwrap();
        assert_eq!(b, vec![0.125, 0.25, 0.5, 1.0]);
    }

    #[test]
    fn bias_degenerates_for_equal_counts() {
        let b = complexity_bias(&[7, 7, 7], BiasNorm::PMax).unwrap();
        assert_eq!(b, vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn bias_p_min_pins_the_smallest_to_one() {
        let b = complexity_bias(&[10, 20, 40], BiasNorm::PMin).unwrap();
        assert_eq!(b, vec![1.0, 2.0, 4.0]);
        assert!(complexity_bias(&[0, 1], BiasNorm::PMax).is_err());
    }

    #[test]
    fn bias_of_instantiated_layer_matches_enumerated_counts() {
        let cfg = crate::moce::spec::MoceLayerConfig::new(
            4,
            32,
            crate::moce::spec::ScalingMode::Nested,
            BiasNorm::PMax,
        )
        .unwrap();
        let specs = crate::moce::spec::expert_specs(&cfg).unwrap();
        let counts: Vec<usize> = specs.iter().map(|s| s.param_count).collect();
        let b = complexity_bias(&counts, BiasNorm::PMax).unwrap();
        assert_eq!(b[3], 1.0);
        for pair in b.windows(2) {
            assert!(pair[0] < pair[1]);
        }
    }

    #[test]
    fn importance_uniform_probs() {
        // Uniform 1/n probabilities, all-ones bias, batch of 8: each B/n.
        let stats = stats_from_logits(vec![vec![0.0; 4]; 8], None);
        let imp = importance(&stats.layers[0], &[1.0; 4]);
        for v in &imp {
            assert!((v - 2.0).abs() < 1e-12);
        }
        let imp = importance(&stats.layers[0], &[0.125, 0.25, 0.5, 1.0]);
        let want = [0.25, 0.5, 1.0, 2.0];
        for (g, w) in imp.iter().zip(&want) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn importance_matches_hand_summed_batch() {
        let mut rng = crate::rng::stream(21, &[1]);
        let batch: Vec<Vec<f64>> = (0..6)
            .map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let bias = [0.3, 0.6, 1.0];
        let stats = stats_from_logits(batch.clone(), None);
        let got = importance(&stats.layers[0], &bias);
        let mut want = [0.0; 3];
        for l in &batch {
            let p = softmax_vec(l);
            for i in 0..3 {
                want[i] += p[i];
            }
        }
        for i in 0..3 {
            want[i] *= bias[i];
        }
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn load_symmetric_case_splits_evenly() {
        let stats = stats_from_logits(vec![vec![0.0, 0.0]], None);
        let ld = load(&stats.layers[0], 0.5);
        assert!((ld[0] - 0.5).abs() < 1e-12);
        assert!((ld[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn load_saturates_with_a_large_gap() {
        let b = 16;
        let stats = stats_from_logits(vec![vec![100.0, 0.0]; b], None);
        let ld = load(&stats.layers[0], 0.5);
        assert!((ld[0] - b as f64).abs() < 1e-9);
        assert!(ld[1].abs() < 1e-9);
    }

    /// Monte-Carlo oracle: re-sample expert i's noise with the others'
    /// realized noisy logits held fixed, and count wins.
    #[test]
    fn load_matches_monte_carlo_resampling() {
        let mut rng = crate::rng::stream(21, &[2]);
        let noise_std = 1.0 / 3.0;
        let logits: Vec<f64> = (0..3).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let noise: Vec<f64> = (0..3)
            .map(|_| rng.gen_range(-noise_std..noise_std))
            .collect();
        let stats = stats_from_logits(vec![logits.clone()], Some(vec![noise.clone()]));
        let got = load(&stats.layers[0], noise_std);

        let dist = rand_distr::Normal::new(0.0, noise_std).unwrap();
        let draws = 1_000_000;
        for i in 0..3 {
            let theta = (0..3)
                .filter(|&j| j != i)
                .map(|j| logits[j] + noise[j])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut wins = 0u64;
            for _ in 0..draws {
                let eps: f64 = rand_distr::Distribution::sample(&dist, &mut rng);
                if logits[i] + eps > theta {
                    wins += 1;
                }
            }
            let mc = wins as f64 / draws as f64;
            assert!(
                (got[i] - mc).abs() < 1e-2,
                "expert {i}: formula {} vs mc {mc}",
                got[i]
            );
        }
    }

    #[test]
    fn cv_reference_values_and_scale_invariance() {
        assert_eq!(cv(&[3.0, 3.0, 3.0]).unwrap(), 0.0);
        assert!((cv(&[1.0, 3.0]).unwrap() - 0.5).abs() < 1e-15);
        let v = [0.4, 1.3, 2.2, 0.9];
        let a = cv(&v).unwrap();
        let scaled: Vec<f64> = v.iter().map(|x| x * 17.0).collect();
        let b = cv(&scaled).unwrap();
        assert!((a - b).abs() < 1e-12);
        assert!(cv(&[1.0, -1.0]).is_err());
    }

    #[test]
    fn aux_loss_zero_iff_uniform() {
        let stats = stats_from_logits(vec![vec![0.0; 4]; 8], None);
        let aux = aux_loss_value(&stats, &[1.0; 4], 0.25).unwrap();
        assert!(aux.abs() < 1e-24);

        // Complexity bias makes uniform probabilities non-uniform in Imp.
        let aux = aux_loss_value(&stats, &[0.125, 0.25, 0.5, 1.0], 0.25).unwrap();
        let b = [0.125, 0.25, 0.5, 1.0];
        let cvb = cv(&b).unwrap();
        assert!((aux - 0.5 * cvb * cvb).abs() < 1e-12);
        assert!(aux > 0.0);
    }

    #[test]
    fn aux_loss_is_invariant_to_uniform_param_rescale() {
        let stats = stats_from_logits(
            vec![
                vec![0.3, -0.1, 0.2, 0.4],
                vec![-0.2, 0.1, 0.0, 0.3],
                vec![0.5, 0.2, -0.3, 0.1],
            ],
            None,
        );
        let b1 = complexity_bias(&[100, 200, 400, 800], BiasNorm::PMax).unwrap();
        let b2 = complexity_bias(&[300, 600, 1200, 2400], BiasNorm::PMax).unwrap();
        let a1 = aux_loss_value(&stats, &b1, 0.25).unwrap();
        let a2 = aux_loss_value(&stats, &b2, 0.25).unwrap();
        assert!((a1 - a2).abs() < 1e-12);
    }

    /// The spring force: at uniform logits the biased auxiliary pushes mass
    /// toward the lightest expert while the plain load balance is flat.
    ///
    /// The Load term's max over tied logits is only one-sided smooth at the
    /// tie, which leaves an O(h) asymmetry artifact in central differences;
    /// both one-sided derivatives are zero. A small step bounds the artifact
    /// (every quantity here is computed near the tie at full precision, so
    /// roundoff does not bite).
    #[test]
    fn aux_gradient_favors_light_experts_under_bias() {
        let aux_of = |l0: f64, bias: &[f64]| {
            let stats = stats_from_logits(vec![vec![l0, 0.0, 0.0, 0.0]; 4], None);
            aux_loss_value(&stats, bias, 0.25).unwrap()
        };
        let h = 1e-9;
        let biased = [0.125, 0.25, 0.5, 1.0];
        let fd_biased = (aux_of(h, &biased) - aux_of(-h, &biased)) / (2.0 * h);
        assert!(fd_biased < -1e-3, "biased gradient {fd_biased} not negative");

        let ones = [1.0; 4];
        let fd_plain = (aux_of(h, &ones) - aux_of(-h, &ones)) / (2.0 * h);
        assert!(fd_plain.abs() < 1e-8, "plain gradient {fd_plain} not flat");
    }

    #[test]
    fn tape_aux_matches_value_path_and_gradchecks() {
        let mut rng = crate::rng::stream(21, &[3]);
        let sum_p: Vec<f64> = (0..4).map(|_| rng.gen_range(0.5..2.0)).collect();
        let sum_l: Vec<f64> = (0..4).map(|_| rng.gen_range(0.5..2.0)).collect();
        let bias = [0.125, 0.25, 0.5, 1.0];

        let mut tape = Tape::new();
        let p = tape.constant(&[4], sum_p.clone());
        let l = tape.constant(&[4], sum_l.clone());
        let aux = aux_layer_on_tape(&mut tape, p, l, &bias).unwrap();

        let imp: Vec<f64> = sum_p.iter().zip(&bias).map(|(a, b)| a * b).collect();
        let want = 0.5 * (cv(&imp).unwrap().powi(2) + cv(&sum_l).unwrap().powi(2));
        assert!((tape.scalar_value(aux) - want).abs() < 1e-12);

        // Differentiability of the layer term against the probability sums.
        let point = Tensor::from_vec(&[4], sum_p).unwrap();
        let err = grad_check(
            |t, x| {
                let l = t.constant(&[4], sum_l.clone());
                aux_layer_on_tape(t, x, l, &bias)
            },
            &point,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "aux grad check failed: {err}");
    }

    #[test]
    fn restoration_loss_zero_for_identical_pair() {
        let mut rng = crate::rng::stream(21, &[4]);
        let img = Tensor::from_fn(&[8, 8, 3], |_| rng.gen_range(0.0..1.0));
        let v = restoration_loss_value(&img, &img, 0.1).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn constant_offset_splits_between_rgb_and_dc() {
        let base = Tensor::from_fn(&[8, 8, 3], |i| (i % 7) as f64 / 7.0);
        let mut shifted = base.clone();
        for v in shifted.data_mut() {
            *v += 0.1;
        }
        // RGB term |delta|; Fourier term is the DC bin only: per channel the
        // spectrum difference is hw*delta at DC, zero elsewhere, so the
        // per-channel bin mean is |delta| and the channel sum is 3|delta|.
        let v = restoration_loss_value(&shifted, &base, 0.0).unwrap();
        assert!((v - 0.1).abs() < 1e-12);
        let v = restoration_loss_value(&shifted, &base, 1.0).unwrap();
        assert!((v - (0.1 + 0.3)).abs() < 1e-10);
    }

    /// Direct-evaluation oracle with a naive DFT, independent of the tape's
    /// FFT path.
    #[test]
    fn restoration_loss_matches_naive_oracle() {
        let mut rng = crate::rng::stream(21, &[5]);
        let a = Tensor::from_fn(&[4, 4, 3], |_| rng.gen_range(0.0..1.0));
        let b = Tensor::from_fn(&[4, 4, 3], |_| rng.gen_range(0.0..1.0));
        let fw = 0.1;
        let got = restoration_loss_value(&a, &b, fw).unwrap();

        let mut rgb = 0.0;
        for (x, y) in a.data().iter().zip(b.data()) {
            rgb += (x - y).abs();
        }
        rgb /= 48.0;
        let mut fourier = 0.0;
        for c in 0..3 {
            for ky in 0..4 {
                for kx in 0..4 {
                    let mut dr = 0.0;
                    let mut di = 0.0;
                    for y in 0..4 {
                        for x in 0..4 {
                            let ang = -2.0
                                * std::f64::consts::PI
                                * (ky as f64 * y as f64 / 4.0 + kx as f64 * x as f64 / 4.0);
                            let d = a.at3(y, x, c) - b.at3(y, x, c);
                            dr += d * ang.cos();
                            di += d * ang.sin();
                        }
                    }
                    fourier += (dr * dr + di * di).sqrt();
                }
            }
        }
        fourier /= 16.0;
        let want = rgb + fw * fourier;
        assert!((got - want).abs() < 1e-10, "got {got}, want {want}");
    }

    #[test]
    fn restoration_loss_gradchecks_below_1e6() {
        let mut rng = crate::rng::stream(21, &[6]);
        let target = Tensor::from_fn(&[4, 4, 3], |_| rng.gen_range(0.0..1.0));
        let point = Tensor::from_fn(&[4, 4, 3], |_| rng.gen_range(0.0..1.0));
        let err = grad_check(
            |t, x| restoration_loss_on_tape(t, x, &target, 0.1),
            &point,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "restoration grad check failed: {err}");
    }

    #[test]
    fn total_loss_combines_linearly() {
        assert_eq!(total_loss(1.0, 5.0, 0.0), 1.0);
        assert_eq!(total_loss(1.0, 1.0, 0.01), 1.01);
    }
}
