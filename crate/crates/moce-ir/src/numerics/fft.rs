//! Radix-2 decimation-in-time FFT, 1D and 2D.
//!
//! Convention: the forward transform is unnormalized, the inverse carries
//! `1/(h*w)`. Extents must be powers of two; callers guarantee this via the
//! window-size policy, and non-conforming sizes are a configuration error
//! rather than something to pad silently.

use crate::error::{MoceError, Result};
use crate::numerics::tensor::{ComplexTensor, Tensor};

/// Precomputed tables for a single 1D transform length.
pub(crate) struct Fft1d {
    n: usize,
    // w_n^j = exp(-2*pi*i*j/n) for j in 0..n/2
    tw_re: Vec<f64>,
    tw_im: Vec<f64>,
    bitrev: Vec<usize>,
}

impl Fft1d {
    pub fn new(n: usize) -> Result<Self> {
        if n == 0 || !n.is_power_of_two() {
            return Err(MoceError::Config(format!(
                "FFT length {n} is not a power of two"
            )));
        }
        let half = (n / 2).max(1);
        let mut tw_re = vec![0.0; half];
        let mut tw_im = vec![0.0; half];
        for j in 0..half {
            let angle = -2.0 * std::f64::consts::PI * j as f64 / n as f64;
            tw_re[j] = angle.cos();
            tw_im[j] = angle.sin();
        }
        let bits = n.trailing_zeros();
        let bitrev = (0..n)
            .map(|i| (i.reverse_bits() >> (usize::BITS - bits)) as usize)
            .collect();
        Ok(Fft1d {
            n,
            tw_re,
            tw_im,
            bitrev,
        })
    }

    /// In-place transform of one length-n signal. `inverse` conjugates the
    /// twiddles but applies no scaling.
    pub fn process(&self, re: &mut [f64], im: &mut [f64], inverse: bool) {
        let n = self.n;
        debug_assert_eq!(re.len(), n);
        debug_assert_eq!(im.len(), n);
        for i in 0..n {
            let j = self.bitrev[i];
            if j > i {
                re.swap(i, j);
                im.swap(i, j);
            }
        }
        let sign = if inverse { -1.0 } else { 1.0 };
        let mut len = 2;
        while len <= n {
            let half = len / 2;
            let stride = n / len;
            for start in (0..n).step_by(len) {
                for j in 0..half {
                    let wr = self.tw_re[j * stride];
                    let wi = sign * self.tw_im[j * stride];
                    let a = start + j;
                    let b = a + half;
                    let tr = wr * re[b] - wi * im[b];
                    let ti = wr * im[b] + wi * re[b];
                    re[b] = re[a] - tr;
                    im[b] = im[a] - ti;
                    re[a] += tr;
                    im[a] += ti;
                }
            }
            len <<= 1;
        }
    }
}

/// 2D transform over an `h x w` field, rows then columns.
pub(crate) struct Fft2d {
    h: usize,
    w: usize,
    row: Fft1d,
    col: Fft1d,
}

impl Fft2d {
    pub fn new(h: usize, w: usize) -> Result<Self> {
        Ok(Fft2d {
            h,
            w,
            row: Fft1d::new(w)?,
            col: Fft1d::new(h)?,
        })
    }

    pub fn process(&self, re: &mut [f64], im: &mut [f64], inverse: bool) {
        let (h, w) = (self.h, self.w);
        debug_assert_eq!(re.len(), h * w);
        for y in 0..h {
            self.row
                .process(&mut re[y * w..(y + 1) * w], &mut im[y * w..(y + 1) * w], inverse);
        }
        // Column pass via gather/scatter into a scratch column.
        let mut cr = vec![0.0; h];
        let mut ci = vec![0.0; h];
        for x in 0..w {
            for y in 0..h {
                cr[y] = re[y * w + x];
                ci[y] = im[y * w + x];
            }
            self.col.process(&mut cr, &mut ci, inverse);
            for y in 0..h {
                re[y * w + x] = cr[y];
                im[y * w + x] = ci[y];
            }
        }
    }

    /// Inverse with the `1/(h*w)` normalisation applied.
    pub fn inverse_scaled(&self, re: &mut [f64], im: &mut [f64]) {
        self.process(re, im, true);
        let scale = 1.0 / (self.h * self.w) as f64;
        for v in re.iter_mut() {
            *v *= scale;
        }
        for v in im.iter_mut() {
            *v *= scale;
        }
    }
}

/// Unnormalized forward 2D FFT of a real `[h, w]` tensor.
pub fn fft2(x: &Tensor) -> Result<ComplexTensor> {
    if x.shape().len() != 2 {
        return Err(MoceError::Contract(format!(
            "fft2 expects a 2D tensor, got shape {:?}",
            x.shape()
        )));
    }
    let (h, w) = (x.shape()[0], x.shape()[1]);
    let plan = Fft2d::new(h, w)?;
    let mut out = ComplexTensor::from_real(&[h, w], x.data().to_vec())?;
    plan.process(&mut out.re, &mut out.im, false);
    Ok(out)
}

/// Inverse 2D FFT; returns the real plane, scaled by `1/(h*w)`.
pub fn ifft2(x: &ComplexTensor) -> Result<Tensor> {
    if x.shape.len() != 2 {
        return Err(MoceError::Contract(format!(
            "ifft2 expects a 2D tensor, got shape {:?}",
            x.shape
        )));
    }
    let (h, w) = (x.shape[0], x.shape[1]);
    let plan = Fft2d::new(h, w)?;
    let mut re = x.re.clone();
    let mut im = x.im.clone();
    plan.inverse_scaled(&mut re, &mut im);
    Tensor::from_vec(&[h, w], re)
}
