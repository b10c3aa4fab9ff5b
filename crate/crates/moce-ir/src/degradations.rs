//! Deterministic synthetic degradations.
//!
//! Procedural clean images (gradients + rectangles + band-limited texture)
//! stand in for photographic datasets; five generators cover the all-in-one
//! task set. Every generator is a pure function of `(seed, params, clean)`.

use rand::Rng;
use rand_distr::Distribution;

use crate::error::{MoceError, Result};
use crate::numerics::fft::{fft2, ifft2};
use crate::numerics::tensor::Tensor;
use crate::rng::{self, TAG_CLEAN, TAG_DEGRADE};

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub enum Task {
    Noise,
    Rain,
    Haze,
    Blur,
    Lowlight,
}

impl Task {
    pub const ALL: [Task; 5] = [Task::Noise, Task::Rain, Task::Haze, Task::Blur, Task::Lowlight];

    pub fn parse(s: &str) -> Result<Task> {
        match s {
            "noise" => Ok(Task::Noise),
            "rain" => Ok(Task::Rain),
            "haze" => Ok(Task::Haze),
            "blur" => Ok(Task::Blur),
            "lowlight" => Ok(Task::Lowlight),
            other => Err(MoceError::Config(format!(
                "unknown task '{other}' (expected noise|rain|haze|blur|lowlight)"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Task::Noise => "noise",
            Task::Rain => "rain",
            Task::Haze => "haze",
            Task::Blur => "blur",
            Task::Lowlight => "lowlight",
        }
    }
}

/// Generator parameters with their documented ranges.
#[derive(Clone, Debug)]
pub struct GeneratorConfig {
    /// Noise std in [0, 0.5]; the paper's levels are {15, 25, 50}/255.
    pub noise_sigma: f64,
    /// Streaks per image, 1..=2000.
    pub rain_streaks: usize,
    /// Streak angle from vertical, degrees in [-60, 60].
    pub rain_angle_deg: f64,
    /// Scattering coefficient in [0, 4].
    pub haze_beta: f64,
    /// Airlight intensity in [0.6, 1].
    pub haze_airlight: f64,
    /// Gaussian blur sigma in (0, 4].
    pub blur_sigma: f64,
    /// Gamma >= 1 darkens midtones.
    pub lowlight_gamma: f64,
    /// Gain in (0, 1].
    pub lowlight_gain: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            noise_sigma: 25.0 / 255.0,
            rain_streaks: 60,
            rain_angle_deg: 20.0,
            haze_beta: 1.2,
            haze_airlight: 0.9,
            blur_sigma: 1.5,
            lowlight_gamma: 2.2,
            lowlight_gain: 0.5,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let checks = [
            (self.noise_sigma >= 0.0 && self.noise_sigma <= 0.5, "noise_sigma in [0, 0.5]"),
            (self.rain_streaks >= 1 && self.rain_streaks <= 2000, "rain_streaks in 1..=2000"),
            (self.rain_angle_deg.abs() <= 60.0, "rain_angle_deg in [-60, 60]"),
            (self.haze_beta >= 0.0 && self.haze_beta <= 4.0, "haze_beta in [0, 4]"),
            (self.haze_airlight >= 0.6 && self.haze_airlight <= 1.0, "haze_airlight in [0.6, 1]"),
            (self.blur_sigma > 0.0 && self.blur_sigma <= 4.0, "blur_sigma in (0, 4]"),
            (self.lowlight_gamma >= 1.0 && self.lowlight_gamma <= 4.0, "lowlight_gamma in [1, 4]"),
            (self.lowlight_gain > 0.0 && self.lowlight_gain <= 1.0, "lowlight_gain in (0, 1]"),
        ];
        for (ok, what) in checks {
            if !ok {
                return Err(MoceError::Config(format!("generator parameter out of range: {what}")));
            }
        }
        Ok(())
    }

    /// The paper trains Gaussian denoising at sigma in {15, 25, 50}/255.
    pub fn is_paper_noise_level(&self) -> bool {
        [15.0, 25.0, 50.0]
            .iter()
            .any(|s| (self.noise_sigma - s / 255.0).abs() < 1e-9)
    }
}

/// A labeled training/eval pair.
#[derive(Clone, Debug)]
pub struct DegradationSample {
    pub clean: Tensor,
    pub degraded: Tensor,
    pub task: Task,
    /// Generator parameters as a `key=value` record.
    pub params: String,
    pub seed: u64,
}

fn clip01(t: &mut Tensor) {
    for v in t.data_mut() {
        *v = v.clamp(0.0, 1.0);
    }
}

/// Procedural clean image: a color gradient, a few rectangles and
/// band-limited texture, so both smooth and high-frequency content exist.
/// `size` must satisfy the network's power-of-two window policy.
pub fn make_clean(seed: u64, size: usize) -> Result<Tensor> {
    if !size.is_power_of_two() || size < 8 {
        return Err(MoceError::Config(format!(
            "clean image size {size} must be a power of two >= 8"
        )));
    }
    let mut r = rng::stream(seed, &[TAG_CLEAN]);
    let n = size;
    let mut img = Tensor::zeros(&[n, n, 3]);

    // Smooth base: oriented two-color gradient.
    let theta: f64 = r.gen_range(0.0..std::f64::consts::PI);
    let (ct, st) = (theta.cos(), theta.sin());
    let c0: [f64; 3] = [r.gen_range(0.15..0.85), r.gen_range(0.15..0.85), r.gen_range(0.15..0.85)];
    let c1: [f64; 3] = [r.gen_range(0.15..0.85), r.gen_range(0.15..0.85), r.gen_range(0.15..0.85)];
    for y in 0..n {
        for x in 0..n {
            let t = ((x as f64 * ct + y as f64 * st) / (n as f64 * (ct.abs() + st.abs()))).clamp(0.0, 1.0);
            for c in 0..3 {
                let idx = (y * n + x) * 3 + c;
                img.data_mut()[idx] = c0[c] * (1.0 - t) + c1[c] * t;
            }
        }
    }

    // Rectangles with random colors and opacity.
    let rects = r.gen_range(3..=6);
    for _ in 0..rects {
        let h = r.gen_range(n / 8..=n / 2);
        let w = r.gen_range(n / 8..=n / 2);
        let y0 = r.gen_range(0..n - h);
        let x0 = r.gen_range(0..n - w);
        let col: [f64; 3] = [r.gen_range(0.1..0.9), r.gen_range(0.1..0.9), r.gen_range(0.1..0.9)];
        let alpha: f64 = r.gen_range(0.5..0.9);
        for y in y0..y0 + h {
            for x in x0..x0 + w {
                for c in 0..3 {
                    let idx = (y * n + x) * 3 + c;
                    img.data_mut()[idx] = (1.0 - alpha) * img.data()[idx] + alpha * col[c];
                }
            }
        }
    }

    // Band-limited texture shared across channels, pass band straddling
    // a quarter of the Nyquist rate.
    let white = Tensor::from_fn(&[n, n], |_| r.gen_range(-1.0..1.0));
    let mut spec = fft2(&white)?;
    let lo = n as f64 / 16.0;
    let hi = n as f64 * 0.22;
    for ky in 0..n {
        for kx in 0..n {
            let fy = ky.min(n - ky) as f64;
            let fx = kx.min(n - kx) as f64;
            let rad = (fy * fy + fx * fx).sqrt();
            if rad < lo || rad > hi {
                spec.re[ky * n + kx] = 0.0;
                spec.im[ky * n + kx] = 0.0;
            }
        }
    }
    let texture = ifft2(&spec)?;
    let tex_scale: f64 = r.gen_range(0.04..0.10);
    let rms = (texture.data().iter().map(|v| v * v).sum::<f64>() / (n * n) as f64)
        .sqrt()
        .max(1e-9);
    for y in 0..n {
        for x in 0..n {
            let t = texture.data()[y * n + x] / rms * tex_scale;
            for c in 0..3 {
                let idx = (y * n + x) * 3 + c;
                img.data_mut()[idx] += t;
            }
        }
    }

    clip01(&mut img);
    Ok(img)
}

/// i.i.d. Gaussian noise at std `sigma`, clipped back to [0, 1].
pub fn add_gaussian_noise(clean: &Tensor, sigma: f64, seed: u64) -> Result<Tensor> {
    if !(0.0..=0.5).contains(&sigma) {
        return Err(MoceError::Config(format!(
            "noise sigma {sigma} out of range [0, 0.5]"
        )));
    }
    let mut out = clean.clone();
    if sigma > 0.0 {
        let mut r = rng::stream(seed, &[TAG_DEGRADE, 1]);
        let dist = rand_distr::Normal::new(0.0, sigma).expect("finite sigma");
        for v in out.data_mut() {
            *v += dist.sample(&mut r);
        }
        clip01(&mut out);
    }
    Ok(out)
}

/// Atmospheric haze: `clean * t + A * (1 - t)` with `t = exp(-beta * d)`
/// over a left-to-right linear depth ramp.
pub fn synthesize_haze(clean: &Tensor, beta: f64, airlight: f64, _seed: u64) -> Result<Tensor> {
    let (h, w) = (clean.shape()[0], clean.shape()[1]);
    let mut out = clean.clone();
    for y in 0..h {
        for x in 0..w {
            let depth = x as f64 / (w - 1).max(1) as f64;
            let t = (-beta * depth).exp();
            for c in 0..3 {
                let idx = (y * w + x) * 3 + c;
                out.data_mut()[idx] = clean.data()[idx] * t + airlight * (1.0 - t);
            }
        }
    }
    clip01(&mut out);
    Ok(out)
}

/// Additive bright rain streaks: thin oriented line segments.
pub fn synthesize_rain(clean: &Tensor, streak_count: usize, angle_deg: f64, seed: u64) -> Result<Tensor> {
    let (h, w) = (clean.shape()[0], clean.shape()[1]);
    let mut layer = vec![0.0; h * w];
    let mut r = rng::stream(seed, &[TAG_DEGRADE, 2]);
    for _ in 0..streak_count {
        let cy = r.gen_range(0.0..h as f64);
        let cx = r.gen_range(0.0..w as f64);
        let len = r.gen_range(h as f64 / 6.0..h as f64 / 2.5);
        let jitter: f64 = r.gen_range(-4.0..4.0);
        let ang = (angle_deg + jitter).to_radians();
        let (dy, dx) = (ang.cos(), ang.sin());
        let intensity = r.gen_range(0.15..0.4);
        let steps = (len * 2.0) as usize;
        for s in 0..steps {
            let t = s as f64 / 2.0 - len / 2.0;
            let y = cy + t * dy;
            let x = cx + t * dx;
            if y >= 0.0 && x >= 0.0 && (y as usize) < h && (x as usize) < w {
                let idx = (y as usize) * w + x as usize;
                layer[idx] = f64::max(layer[idx], intensity);
            }
        }
    }
    let mut out = clean.clone();
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                out.data_mut()[(y * w + x) * 3 + c] += layer[y * w + x];
            }
        }
    }
    clip01(&mut out);
    Ok(out)
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    while i < 0 || i >= n {
        if i < 0 {
            i = -i - 1;
        }
        if i >= n {
            i = 2 * n - 1 - i;
        }
    }
    i as usize
}

/// Separable Gaussian blur with reflect padding.
pub fn synthesize_blur(clean: &Tensor, kernel_sigma: f64, _seed: u64) -> Result<Tensor> {
    if kernel_sigma <= 0.0 {
        return Err(MoceError::Config("blur sigma must be positive".into()));
    }
    let radius = (kernel_sigma * 2.5).ceil() as isize;
    let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
    for i in -radius..=radius {
        kernel.push((-0.5 * (i as f64 / kernel_sigma).powi(2)).exp());
    }
    let norm: f64 = kernel.iter().sum();
    for k in kernel.iter_mut() {
        *k /= norm;
    }

    let (h, w) = (clean.shape()[0], clean.shape()[1]);
    let mut tmp = clean.clone();
    // Horizontal pass.
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let mut acc = 0.0;
                for (ki, k) in kernel.iter().enumerate() {
                    let xi = reflect(x as isize + ki as isize - radius, w);
                    acc += k * clean.data()[(y * w + xi) * 3 + c];
                }
                tmp.data_mut()[(y * w + x) * 3 + c] = acc;
            }
        }
    }
    // Vertical pass.
    let mut out = tmp.clone();
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let mut acc = 0.0;
                for (ki, k) in kernel.iter().enumerate() {
                    let yi = reflect(y as isize + ki as isize - radius, h);
                    acc += k * tmp.data()[(yi * w + x) * 3 + c];
                }
                out.data_mut()[(y * w + x) * 3 + c] = acc;
            }
        }
    }
    clip01(&mut out);
    Ok(out)
}

/// Gamma-darkened low light: `gain * clean^gamma`.
pub fn synthesize_lowlight(clean: &Tensor, gamma: f64, gain: f64, _seed: u64) -> Result<Tensor> {
    if gamma < 1.0 || gain <= 0.0 || gain > 1.0 {
        return Err(MoceError::Config(format!(
            "lowlight parameters out of range: gamma {gamma}, gain {gain}"
        )));
    }
    let mut out = clean.clone();
    for v in out.data_mut() {
        *v = gain * v.powf(gamma);
    }
    clip01(&mut out);
    Ok(out)
}

/// Dispatch one task's generator.
pub fn degrade(clean: &Tensor, task: Task, cfg: &GeneratorConfig, seed: u64) -> Result<DegradationSample> {
    cfg.validate()?;
    let (degraded, params) = match task {
        Task::Noise => (
            add_gaussian_noise(clean, cfg.noise_sigma, seed)?,
            format!(
                "sigma={};paper_level={}",
                cfg.noise_sigma,
                cfg.is_paper_noise_level()
            ),
        ),
        Task::Rain => (
            synthesize_rain(clean, cfg.rain_streaks, cfg.rain_angle_deg, seed)?,
            format!("streaks={};angle={}", cfg.rain_streaks, cfg.rain_angle_deg),
        ),
        Task::Haze => (
            synthesize_haze(clean, cfg.haze_beta, cfg.haze_airlight, seed)?,
            format!("beta={};airlight={}", cfg.haze_beta, cfg.haze_airlight),
        ),
        Task::Blur => (
            synthesize_blur(clean, cfg.blur_sigma, seed)?,
            format!("sigma={}", cfg.blur_sigma),
        ),
        Task::Lowlight => (
            synthesize_lowlight(clean, cfg.lowlight_gamma, cfg.lowlight_gain, seed)?,
            format!("gamma={};gain={}", cfg.lowlight_gamma, cfg.lowlight_gain),
        ),
    };
    Ok(DegradationSample {
        clean: clean.clone(),
        degraded,
        task,
        params,
        seed,
    })
}

/// Fraction of spectral energy above a quarter of the Nyquist rate,
/// averaged over channels.
pub fn high_frequency_energy(img: &Tensor) -> Result<f64> {
    let (h, w) = (img.shape()[0], img.shape()[1]);
    let mut ratio = 0.0;
    for c in 0..img.shape()[2] {
        let plane = Tensor::from_fn(&[h, w], |i| img.data()[i * img.shape()[2] + c]);
        let spec = fft2(&plane)?;
        let mut total = 0.0;
        let mut high = 0.0;
        for ky in 0..h {
            for kx in 0..w {
                let fy = ky.min(h - ky) as f64;
                let fx = kx.min(w - kx) as f64;
                let e = spec.re[ky * w + kx].powi(2) + spec.im[ky * w + kx].powi(2);
                total += e;
                if (fy * fy + fx * fx).sqrt() > h as f64 / 8.0 {
                    high += e;
                }
            }
        }
        ratio += high / total.max(1e-12);
    }
    Ok(ratio / img.shape()[2] as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clean_images_stay_in_unit_range_over_many_seeds() {
        for seed in 0..1000 {
            let img = make_clean(seed, 16).unwrap();
            assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn clean_generation_is_bit_deterministic() {
        let a = make_clean(77, 32).unwrap();
        let b = make_clean(77, 32).unwrap();
        assert_eq!(a.data(), b.data());
        let c = make_clean(78, 32).unwrap();
        assert_ne!(a.data(), c.data());
    }

    #[test]
    fn clean_images_have_high_frequency_content() {
        let img = make_clean(3, 32).unwrap();
        assert!(high_frequency_energy(&img).unwrap() > 1e-5);
    }

    #[test]
    fn clean_rejects_non_power_of_two() {
        assert!(make_clean(1, 24).is_err());
    }

    #[test]
    fn zero_sigma_is_identity() {
        let img = make_clean(5, 16).unwrap();
        let noisy = add_gaussian_noise(&img, 0.0, 99).unwrap();
        assert_eq!(noisy.data(), img.data());
    }

    #[test]
    fn noise_std_matches_sigma_at_midgray() {
        let sigma = 25.0 / 255.0;
        let gray = Tensor::full(&[256, 256, 3], 0.5);
        let noisy = add_gaussian_noise(&gray, sigma, 4).unwrap();
        let n = noisy.numel() as f64;
        let mean = noisy.data().iter().sum::<f64>() / n;
        let var = noisy.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let got = var.sqrt();
        assert!(
            (got - sigma).abs() / sigma < 0.03,
            "std {got} vs sigma {sigma}"
        );
    }

    #[test]
    fn noise_psnr_matches_closed_form_at_midgray() {
        let sigma = 25.0 / 255.0;
        let gray = Tensor::full(&[256, 256, 3], 0.5);
        let noisy = add_gaussian_noise(&gray, sigma, 4).unwrap();
        let mse = gray
            .data()
            .iter()
            .zip(noisy.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / gray.numel() as f64;
        let psnr = -10.0 * mse.log10();
        let expected = -10.0 * (sigma * sigma).log10();
        assert!(
            (psnr - expected).abs() < 0.3,
            "psnr {psnr} vs closed form {expected}"
        );
    }

    #[test]
    fn haze_beta_zero_is_identity_and_brightness_climbs_to_airlight() {
        let img = make_clean(9, 32).unwrap();
        let same = synthesize_haze(&img, 0.0, 0.9, 0).unwrap();
        assert_eq!(same.data(), img.data());

        let airlight = 0.95;
        let mut last_gap = f64::INFINITY;
        for beta in [0.5, 1.0, 2.0, 4.0] {
            let hazed = synthesize_haze(&img, beta, airlight, 0).unwrap();
            let mean = hazed.data().iter().sum::<f64>() / hazed.numel() as f64;
            let gap = (airlight - mean).abs();
            assert!(gap < last_gap, "haze mean not approaching airlight");
            last_gap = gap;
        }
    }

    #[test]
    fn lowlight_identity_parameters() {
        let img = make_clean(10, 16).unwrap();
        let same = synthesize_lowlight(&img, 1.0, 1.0, 0).unwrap();
        for (a, b) in same.data().iter().zip(img.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        let dark = synthesize_lowlight(&img, 2.2, 0.5, 0).unwrap();
        let m0 = img.data().iter().sum::<f64>();
        let m1 = dark.data().iter().sum::<f64>();
        assert!(m1 < m0);
    }

    #[test]
    fn generators_are_deterministic_per_seed() {
        let img = make_clean(11, 32).unwrap();
        let cfg = GeneratorConfig::default();
        for task in Task::ALL {
            let a = degrade(&img, task, &cfg, 5).unwrap();
            let b = degrade(&img, task, &cfg, 5).unwrap();
            assert_eq!(a.degraded.data(), b.degraded.data(), "{task:?}");
        }
        let a = degrade(&img, Task::Rain, &cfg, 5).unwrap();
        let b = degrade(&img, Task::Rain, &cfg, 6).unwrap();
        assert_ne!(a.degraded.data(), b.degraded.data());
    }

    /// Rain adds thin bright streaks (high-frequency); haze is a smooth
    /// multiplicative field. The router's Sobel guidance leans on this gap.
    #[test]
    fn rain_has_more_high_frequency_energy_than_haze() {
        let cfg = GeneratorConfig::default();
        let mut rain_hf = 0.0;
        let mut haze_hf = 0.0;
        for seed in 0..8 {
            let clean = make_clean(seed, 32).unwrap();
            let rain = degrade(&clean, Task::Rain, &cfg, seed).unwrap();
            let haze = degrade(&clean, Task::Haze, &cfg, seed).unwrap();
            rain_hf += high_frequency_energy(&rain.degraded).unwrap();
            haze_hf += high_frequency_energy(&haze.degraded).unwrap();
        }
        assert!(
            rain_hf > haze_hf,
            "rain hf {rain_hf} not above haze hf {haze_hf}"
        );
    }

    #[test]
    fn out_of_range_parameters_are_rejected() {
        let img = make_clean(12, 16).unwrap();
        let mut cfg = GeneratorConfig::default();
        cfg.haze_beta = 9.0;
        assert!(degrade(&img, Task::Haze, &cfg, 0).is_err());
        let mut cfg = GeneratorConfig::default();
        cfg.lowlight_gain = 0.0;
        assert!(degrade(&img, Task::Lowlight, &cfg, 0).is_err());
    }

    #[test]
    fn paper_noise_levels_are_flagged() {
        let mut cfg = GeneratorConfig::default();
        assert!(cfg.is_paper_noise_level());
        cfg.noise_sigma = 0.1;
        assert!(!cfg.is_paper_noise_level());
        let img = make_clean(13, 16).unwrap();
        let s = degrade(&img, Task::Noise, &cfg, 0).unwrap();
        assert!(s.params.contains("paper_level=false"));
    }
}
