//! MS-SSIM (differentiable and metric forms) and PSNR.

use std::rc::Rc;

use metacodec_autodiff::{no_grad, Var};
use ndarray::{Array3, Axis};

use crate::error::{CodecError, Result};
use crate::tensors::ImageTensor;

pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
pub const WINDOW: usize = 11;
pub const SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;
const POW_FLOOR: f64 = 1e-8;
pub const PSNR_CAP: f64 = 100.0;

/// Number of scales for an image whose smaller side is `min_dim`.
pub fn scale_count(min_dim: usize) -> usize {
    (1..=MS_SSIM_WEIGHTS.len()).rev().find(|&s| min_dim >> (s - 1) >= WINDOW).unwrap_or(1)
}

fn gaussian_taps(min_dim: usize) -> Rc<[f64]> {
    let size = if min_dim >= WINDOW {
        WINDOW
    } else if min_dim % 2 == 1 {
        min_dim
    } else {
        min_dim - 1
    }
    .max(1);
    let sigma = SIGMA * size as f64 / WINDOW as f64;
    let c = (size / 2) as f64;
    let raw: Vec<f64> = (0..size).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = raw.iter().sum();
    raw.iter().map(|v| v / total).collect::<Vec<_>>().into()
}

fn spatial_mean(v: &Var) -> Var {
    let s = v.shape();
    let count = (s[1] * s[2]) as f64;
    v.sum_to(&[s[0], 1, 1, s[3]]).scale(1.0 / count)
}

/// MS-SSIM of NHWC batches with values in [0, 1], computed per channel and
/// averaged over channels. Returns shape `[N]`.
pub fn ms_ssim_var(x: &Var, y: &Var) -> Var {
    let s = x.shape().to_vec();
    assert_eq!(s, y.shape(), "ms-ssim shape mismatch");
    let (n, c) = (s[0], s[3]);
    let scales = scale_count(s[1].min(s[2]));
    let wsum: f64 = MS_SSIM_WEIGHTS[..scales].iter().sum();
    let (mut a, mut b) = (x.clone(), y.clone());
    let mut total: Option<Var> = None;
    for (scale, &weight) in MS_SSIM_WEIGHTS[..scales].iter().enumerate() {
        let taps = gaussian_taps(a.shape()[1].min(a.shape()[2]));
        let mu_a = a.blur_valid(&taps);
        let mu_b = b.blur_valid(&taps);
        let aa = a.mul(&a).blur_valid(&taps).sub(&mu_a.mul(&mu_a));
        let bb = b.mul(&b).blur_valid(&taps).sub(&mu_b.mul(&mu_b));
        let ab = a.mul(&b).blur_valid(&taps).sub(&mu_a.mul(&mu_b));
        let cs = ab.scale(2.0).shift(C2).div(&aa.add(&bb).shift(C2));
        let last = scale + 1 == scales;
        let term = if last {
            let l = mu_a.mul(&mu_b).scale(2.0).shift(C1).div(&mu_a.mul(&mu_a).add(&mu_b.mul(&mu_b)).shift(C1));
            spatial_mean(&l.mul(&cs))
        } else {
            spatial_mean(&cs)
        };
        let w = weight / wsum;
        let factor = term.clamp(POW_FLOOR, f64::INFINITY).powf(w);
        total = Some(match total {
            None => factor,
            Some(t) => t.mul(&factor),
        });
        if !last {
            a = a.avg_pool2();
            b = b.avg_pool2();
        }
    }
    total.expect("at least one scale").sum_to(&[n, 1, 1, 1]).reshape(&[n]).scale(1.0 / c as f64)
}

fn check_dims(a: &ImageTensor, b: &ImageTensor) -> Result<()> {
    if a.data.dim() != b.data.dim() {
        let (h, w, c) = a.data.dim();
        return Err(CodecError::ShapeMismatch { expected: vec![h, w, c], got: b.data.shape().to_vec() });
    }
    Ok(())
}

/// ITU-R BT.601 luma.
pub fn luma(x: &ImageTensor) -> Array3<f64> {
    let d = &x.data;
    let y = d.index_axis(Axis(2), 0).mapv(|v| 0.299 * v)
        + d.index_axis(Axis(2), 1).mapv(|v| 0.587 * v)
        + d.index_axis(Axis(2), 2).mapv(|v| 0.114 * v);
    y.insert_axis(Axis(2))
}

/// MS-SSIM on luma.
pub fn ms_ssim_y(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    check_dims(a, b)?;
    let to_var = |img: &ImageTensor| Var::constant(luma(img).insert_axis(Axis(0)).into_dyn());
    Ok(no_grad(|| ms_ssim_var(&to_var(a), &to_var(b))).value()[[0]])
}

/// MS-SSIM averaged over RGB channels, as used by the training loss.
pub fn ms_ssim_rgb(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    check_dims(a, b)?;
    Ok(no_grad(|| ms_ssim_var(&Var::constant(a.to_batch()), &Var::constant(b.to_batch()))).value()[[0]])
}

pub fn mse(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    check_dims(a, b)?;
    let n = a.data.len().max(1) as f64;
    Ok(a.data.iter().zip(b.data.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n)
}

/// PSNR in dB over RGB, capped at [`PSNR_CAP`].
pub fn psnr(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    let m = mse(a, b)?;
    Ok(if m <= 0.0 { PSNR_CAP } else { (10.0 * (1.0 / m).log10()).min(PSNR_CAP) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use metacodec_autodiff::{grad, max_rel_error, numeric_grad};

    fn img(h: usize, w: usize, seed: f64) -> ImageTensor {
        ImageTensor::from_fn(h, w, |y, x, c| 0.5 + 0.4 * ((y as f64 * 0.7 + x as f64 * 0.3 + c as f64) * seed).sin())
    }

    #[test]
    fn scale_counts() {
        assert_eq!(scale_count(256), 5);
        assert_eq!(scale_count(176), 5);
        assert_eq!(scale_count(175), 4);
        assert_eq!(scale_count(128), 4);
        assert_eq!(scale_count(32), 2);
        assert_eq!(scale_count(8), 1);
    }

    #[test]
    fn identical_images_score_one() {
        for (h, w) in [(64, 64), (32, 48), (7, 9), (1, 1)] {
            let a = img(h, w, 1.1);
            assert!((ms_ssim_y(&a, &a).unwrap() - 1.0).abs() < 1e-12);
            assert!((ms_ssim_rgb(&a, &a).unwrap() - 1.0).abs() < 1e-12);
            assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
        }
    }

    #[test]
    fn symmetric_bounded_and_ordered() {
        let a = img(64, 64, 1.1);
        let b = img(64, 64, 1.3);
        let ab = ms_ssim_y(&a, &b).unwrap();
        assert!((ab - ms_ssim_y(&b, &a).unwrap()).abs() < 1e-12);
        assert!((0.0..=1.0).contains(&ab));
        let slight = ImageTensor::from_fn(64, 64, |y, x, c| a.data[[y, x, c]] + 0.01 * ((y * x) % 3) as f64);
        assert!(ms_ssim_y(&a, &slight).unwrap() > ab);
        assert!(ms_ssim_y(&a, &img(32, 64, 1.0)).is_err());
    }

    #[test]
    fn psnr_example() {
        let a = ImageTensor::from_fn(4, 4, |_, _, _| 0.5);
        let b = ImageTensor::from_fn(4, 4, |_, _, _| 0.6);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let a = img(24, 24, 0.9).to_batch();
        let b0 = img(24, 24, 1.7).to_batch().mapv(|v| v * 0.9 + 0.05);
        let b = Var::param(b0.clone());
        let g = grad(&ms_ssim_var(&Var::constant(a.clone()), &b).sum(), &[&b], false).remove(0);
        let num = numeric_grad(&b0, 1e-6, |t| ms_ssim_var(&Var::constant(a.clone()), &Var::constant(t.clone())).item());
        assert!(max_rel_error(g.value(), &num, 1e-6) < 1e-4);
    }
}
