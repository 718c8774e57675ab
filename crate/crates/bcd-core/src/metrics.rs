//! Distortion metrics: L1, MSE/PSNR, and multi-scale structural similarity.
//!
//! The multi-scale metric is built on the tape so training can descend
//! through it. Constants follow the standard definition: 11x11 Gaussian
//! window with sigma 1.5, per-scale weights below, C1 = 0.01^2 and
//! C2 = 0.03^2 on unit dynamic range.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
pub const MS_SSIM_C1: f64 = 1e-4;
pub const MS_SSIM_C2: f64 = 9e-4;
pub const WINDOW_SIZE: usize = 11;
pub const WINDOW_SIGMA: f64 = 1.5;
/// PSNR reported for exact (or better-than-representable) reconstruction.
pub const PSNR_CAP: f64 = 99.0;

/// Mean absolute difference, on the tape.
pub fn l1<T: Scalar>(g: &mut Graph<T>, a: Var, b: Var) -> Result<Var> {
    let d = g.sub(a, b)?;
    let ad = g.abs(d);
    Ok(g.mean(ad))
}

/// Mean squared error between two tensors (no tape).
pub fn mse<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            context: "mse operands",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let mut acc = 0.0f64;
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let d = x.to_f64().unwrap() - y.to_f64().unwrap();
        acc += d * d;
    }
    Ok(acc / a.numel() as f64)
}

/// PSNR in dB on unit dynamic range, capped at [`PSNR_CAP`].
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP
    } else {
        (-10.0 * mse.log10()).min(PSNR_CAP)
    }
}

pub fn psnr<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?))
}

/// How many scales actually ran and the (possibly renormalized) weights.
#[derive(Debug, Clone, PartialEq)]
pub struct MsSsimInfo {
    pub scales: usize,
    pub weights: Vec<f64>,
}

/// Normalized 1-D Gaussian taps.
fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size - 1) as f64 / 2.0;
    let mut taps: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = taps.iter().sum();
    for t in &mut taps {
        *t /= sum;
    }
    taps
}

/// Depthwise 11x11 Gaussian as a dense (c, c, k, k) kernel with zeros off
/// the channel diagonal.
fn window_kernel<T: Scalar>(channels: usize) -> Tensor<T> {
    let taps = gaussian_taps(WINDOW_SIZE, WINDOW_SIGMA);
    let mut k = Tensor::zeros([channels, channels, WINDOW_SIZE, WINDOW_SIZE]);
    for c in 0..channels {
        for y in 0..WINDOW_SIZE {
            for x in 0..WINDOW_SIZE {
                k.set(c, c, y, x, T::from_f64_lossy(taps[y] * taps[x]));
            }
        }
    }
    k
}

/// Scales usable for a given spatial extent: each scale halves the image
/// and the window must still fit.
pub fn usable_scales(height: usize, width: usize) -> usize {
    let mut m = 0;
    let mut extent = height.min(width);
    while m < MS_SSIM_WEIGHTS.len() && extent >= WINDOW_SIZE {
        m += 1;
        extent /= 2;
    }
    m
}

struct ScaleOutputs {
    luminance_times_cs: Var,
    cs: Var,
}

/// Single-scale similarity maps over the valid window positions.
fn ssim_maps<T: Scalar>(g: &mut Graph<T>, a: Var, b: Var, win: Var) -> Result<ScaleOutputs> {
    let two = T::from_f64_lossy(2.0);
    let c1 = T::from_f64_lossy(MS_SSIM_C1);
    let c2 = T::from_f64_lossy(MS_SSIM_C2);

    let mu_a = g.conv2d(a, win, None, 1, 0)?;
    let mu_b = g.conv2d(b, win, None, 1, 0)?;
    let mu_aa = g.mul(mu_a, mu_a)?;
    let mu_bb = g.mul(mu_b, mu_b)?;
    let mu_ab = g.mul(mu_a, mu_b)?;

    let aa = g.mul(a, a)?;
    let bb = g.mul(b, b)?;
    let ab = g.mul(a, b)?;
    let e_aa = g.conv2d(aa, win, None, 1, 0)?;
    let e_bb = g.conv2d(bb, win, None, 1, 0)?;
    let e_ab = g.conv2d(ab, win, None, 1, 0)?;
    let var_a = g.sub(e_aa, mu_aa)?;
    let var_b = g.sub(e_bb, mu_bb)?;
    let cov = g.sub(e_ab, mu_ab)?;

    // luminance: (2 mu_a mu_b + C1) / (mu_a^2 + mu_b^2 + C1)
    let l_num = {
        let t = g.mul_scalar(mu_ab, two);
        g.add_scalar(t, c1)
    };
    let l_den = {
        let t = g.add(mu_aa, mu_bb)?;
        g.add_scalar(t, c1)
    };
    let lum = g.div(l_num, l_den)?;

    // contrast-structure: (2 cov + C2) / (var_a + var_b + C2)
    let cs_num = {
        let t = g.mul_scalar(cov, two);
        g.add_scalar(t, c2)
    };
    let cs_den = {
        let t = g.add(var_a, var_b)?;
        g.add_scalar(t, c2)
    };
    let cs = g.div(cs_num, cs_den)?;

    let lcs = g.mul(lum, cs)?;
    Ok(ScaleOutputs { luminance_times_cs: lcs, cs })
}

/// Multi-scale structural similarity on the tape.
///
/// Product over scales of mean(cs)^w, with the coarsest scale contributing
/// mean(l*cs)^w instead. Images smaller than the 5-scale pyramid use as
/// many scales as fit, with weights renormalized to sum to one; the info
/// struct reports what ran. Scale means are floored at 1e-8 before the
/// fractional power, which only binds on pathologically anti-correlated
/// inputs.
pub fn ms_ssim<T: Scalar>(g: &mut Graph<T>, a: Var, b: Var) -> Result<(Var, MsSsimInfo)> {
    let sa = g.value(a).shape();
    let sb = g.value(b).shape();
    if sa != sb {
        return Err(Error::ShapeMismatch {
            context: "ms_ssim operands",
            left: sa,
            right: sb,
        });
    }
    let [_, channels, h, w] = sa;
    let scales = usable_scales(h, w);
    if scales == 0 {
        return Err(Error::InvalidArgument(format!(
            "image {}x{} smaller than the {}x{} window",
            h, w, WINDOW_SIZE, WINDOW_SIZE
        )));
    }
    let wsum: f64 = MS_SSIM_WEIGHTS[..scales].iter().sum();
    let weights: Vec<f64> = MS_SSIM_WEIGHTS[..scales].iter().map(|v| v / wsum).collect();

    let win = g.constant(window_kernel::<T>(channels));
    let floor = T::from_f64_lossy(1e-8);
    let (mut cur_a, mut cur_b) = (a, b);
    let mut acc: Option<Var> = None;
    for (k, &wk) in weights.iter().enumerate() {
        let maps = ssim_maps(g, cur_a, cur_b, win)?;
        let last = k + 1 == weights.len();
        let summary = if last { maps.luminance_times_cs } else { maps.cs };
        let mean = g.mean(summary);
        let safe = g.clamp_min(mean, floor);
        let term = g.pow_const(safe, T::from_f64_lossy(wk));
        acc = Some(match acc {
            Some(p) => g.mul(p, term)?,
            None => term,
        });
        if !last {
            cur_a = g.avg_pool2(cur_a);
            cur_b = g.avg_pool2(cur_b);
        }
    }
    Ok((acc.unwrap(), MsSsimInfo { scales, weights }))
}

/// Tensor-level convenience wrapper (builds a throwaway tape).
pub fn ms_ssim_value<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<(f64, MsSsimInfo)> {
    let mut g = Graph::new();
    let av = g.constant(a.clone());
    let bv = g.constant(b.clone());
    let (v, info) = ms_ssim(&mut g, av, bv)?;
    Ok((g.scalar_value(v).to_f64().unwrap(), info))
}
