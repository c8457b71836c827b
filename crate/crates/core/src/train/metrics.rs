//! PSNR and single-scale SSIM on `[0, 1]` frames.

use crate::error::{Error, Result};
use crate::flow::Frame;
use crate::tensor::Tensor;

pub const PSNR_CAP_DB: f64 = 100.0;

fn check_geometry(op: &'static str, a: &Frame, b: &Frame) -> Result<()> {
    if a.data.shape() != b.data.shape() {
        return Err(Error::shape(
            op,
            format!("{:?} vs {:?}", a.data.shape(), b.data.shape()),
        ));
    }
    Ok(())
}

/// `10 log10(1 / MSE)` in dB; identical frames report the 100 dB cap.
pub fn psnr(a: &Frame, b: &Frame) -> Result<f64> {
    check_geometry("psnr", a, b)?;
    let mse: f64 = a
        .data
        .data()
        .iter()
        .zip(b.data.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.data.numel() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let mid = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - mid;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in w.iter_mut() {
        *v /= sum;
    }
    w
}

/// Separable Gaussian filter, valid region only: `H x W -> (H-10) x (W-10)`.
fn filter_valid(src: &[f64], h: usize, w: usize, win: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let ow = w - SSIM_WINDOW + 1;
    let oh = h - SSIM_WINDOW + 1;
    let mut horiz = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            let mut acc = 0.0;
            for (k, &wv) in win.iter().enumerate() {
                acc += wv * src[y * w + x + k];
            }
            horiz[y * ow + x] = acc;
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            let mut acc = 0.0;
            for (k, &wv) in win.iter().enumerate() {
                acc += wv * horiz[(y + k) * ow + x];
            }
            out[y * ow + x] = acc;
        }
    }
    out
}

/// Standard single-scale SSIM: 11x11 Gaussian window with sigma 1.5,
/// C1 = 0.01^2, C2 = 0.03^2 on the unit range, averaged over channels and
/// valid window positions.
pub fn ssim(a: &Frame, b: &Frame) -> Result<f64> {
    check_geometry("ssim", a, b)?;
    let (c, h, w) = (a.channels(), a.height(), a.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::invalid(
            "ssim",
            format!("image {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"),
        ));
    }
    let win = gaussian_window();
    let mut total = 0.0;
    let hw = h * w;
    for ch in 0..c {
        let x = &a.data.data()[ch * hw..(ch + 1) * hw];
        let y = &b.data.data()[ch * hw..(ch + 1) * hw];
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(y).map(|(u, v)| u * v).collect();
        let mu_x = filter_valid(x, h, w, &win);
        let mu_y = filter_valid(y, h, w, &win);
        let e_xx = filter_valid(&xx, h, w, &win);
        let e_yy = filter_valid(&yy, h, w, &win);
        let e_xy = filter_valid(&xy, h, w, &win);
        let mut acc = 0.0;
        for i in 0..mu_x.len() {
            let var_x = e_xx[i] - mu_x[i] * mu_x[i];
            let var_y = e_yy[i] - mu_y[i] * mu_y[i];
            let cov = e_xy[i] - mu_x[i] * mu_y[i];
            let num = (2.0 * mu_x[i] * mu_y[i] + SSIM_C1) * (2.0 * cov + SSIM_C2);
            let den = (mu_x[i] * mu_x[i] + mu_y[i] * mu_y[i] + SSIM_C1) * (var_x + var_y + SSIM_C2);
            acc += num / den;
        }
        total += acc / mu_x.len() as f64;
    }
    Ok(total / c as f64)
}

/// The trivial interpolation baseline `(I0 + I1) / 2`.
pub fn frame_average(a: &Frame, b: &Frame) -> Result<Frame> {
    check_geometry("frame_average", a, b)?;
    let data: Vec<f64> = a
        .data
        .data()
        .iter()
        .zip(b.data.data())
        .map(|(x, y)| 0.5 * (x + y))
        .collect();
    Frame::new(Tensor::from_vec(a.data.shape().to_vec(), data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn psnr_cap_and_exact_offset() {
        let a = Frame::from_fn(1, 16, 16, |_, y, x| ((y * 16 + x) % 7) as f64 / 10.0);
        assert_eq!(psnr(&a, &a).unwrap(), 100.0);
        let b = Frame::from_fn(1, 16, 16, |_, y, x| ((y * 16 + x) % 7) as f64 / 10.0 + 0.1);
        let v = psnr(&a, &b).unwrap();
        assert!((v - 20.0).abs() < 1e-12, "psnr {v}");
    }

    #[test]
    fn psnr_matches_direct_formula() {
        let mut rng = Rng::new(3);
        for _ in 0..5 {
            let va: Vec<f64> = (0..3 * 12 * 12).map(|_| rng.unit()).collect();
            let vb: Vec<f64> = (0..3 * 12 * 12).map(|_| rng.unit()).collect();
            let a = Frame::new(Tensor::from_vec(vec![3, 12, 12], va.clone())).unwrap();
            let b = Frame::new(Tensor::from_vec(vec![3, 12, 12], vb.clone())).unwrap();
            let mse: f64 =
                va.iter().zip(&vb).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / va.len() as f64;
            let want = 10.0 * (1.0 / mse).log10();
            assert!((psnr(&a, &b).unwrap() - want).abs() < 1e-9);
        }
    }

    #[test]
    fn ssim_identity_and_constant_offset() {
        let a = Frame::from_fn(1, 16, 16, |_, y, x| ((y + x) % 5) as f64 / 5.0);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);

        // constant 0 vs constant 1: zero variances leave C1/(1+C1)
        let zero = Frame::from_fn(1, 12, 12, |_, _, _| 0.0);
        let one = Frame::from_fn(1, 12, 12, |_, _, _| 1.0);
        let v = ssim(&zero, &one).unwrap();
        let want = SSIM_C1 / (1.0 + SSIM_C1);
        assert!((v - want).abs() < 1e-12, "{v} vs {want}");
    }

    #[test]
    fn ssim_symmetric_and_bounded() {
        let mut rng = Rng::new(9);
        let a = Frame::from_fn(3, 14, 15, |_, _, _| 0.0).data.shape().to_vec();
        let _ = a;
        let mk = |rng: &mut Rng| {
            let data: Vec<f64> = (0..3 * 14 * 15).map(|_| rng.unit()).collect();
            Frame::new(Tensor::from_vec(vec![3, 14, 15], data)).unwrap()
        };
        for _ in 0..5 {
            let a = mk(&mut rng);
            let b = mk(&mut rng);
            let ab = ssim(&a, &b).unwrap();
            let ba = ssim(&b, &a).unwrap();
            assert_eq!(ab, ba);
            assert!((-1.0..=1.0).contains(&ab));
        }
    }

    #[test]
    fn ssim_matches_naive_window_oracle() {
        let mut rng = Rng::new(21);
        let h = 13;
        let w = 14;
        let va: Vec<f64> = (0..h * w).map(|_| rng.unit()).collect();
        let vb: Vec<f64> = (0..h * w).map(|_| rng.unit()).collect();
        let a = Frame::new(Tensor::from_vec(vec![1, h, w], va.clone())).unwrap();
        let b = Frame::new(Tensor::from_vec(vec![1, h, w], vb.clone())).unwrap();

        // independent direct evaluation: explicit 2-D window sums
        let win = gaussian_window();
        let mut acc = 0.0;
        let mut count = 0;
        for y0 in 0..h - 10 {
            for x0 in 0..w - 10 {
                let (mut mx, mut my) = (0.0, 0.0);
                let (mut exx, mut eyy, mut exy) = (0.0, 0.0, 0.0);
                for dy in 0..11 {
                    for dx in 0..11 {
                        let wgt = win[dy] * win[dx];
                        let xv = va[(y0 + dy) * w + x0 + dx];
                        let yv = vb[(y0 + dy) * w + x0 + dx];
                        mx += wgt * xv;
                        my += wgt * yv;
                        exx += wgt * xv * xv;
                        eyy += wgt * yv * yv;
                        exy += wgt * xv * yv;
                    }
                }
                let (vx, vy, cov) = (exx - mx * mx, eyy - my * my, exy - mx * my);
                acc += ((2.0 * mx * my + SSIM_C1) * (2.0 * cov + SSIM_C2))
                    / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2));
                count += 1;
            }
        }
        let want = acc / count as f64;
        let got = ssim(&a, &b).unwrap();
        assert!((got - want).abs() < 1e-7, "{got} vs {want}");
    }

    #[test]
    fn ssim_rejects_small_images() {
        let a = Frame::from_fn(1, 10, 16, |_, _, _| 0.5);
        assert!(ssim(&a, &a).is_err());
    }

    #[test]
    fn frame_average_midpoint() {
        let a = Frame::from_fn(1, 12, 12, |_, _, _| 0.2);
        let b = Frame::from_fn(1, 12, 12, |_, _, _| 0.6);
        let avg = frame_average(&a, &b).unwrap();
        assert!(avg.data.data().iter().all(|&v| (v - 0.4).abs() < 1e-15));
    }
}
