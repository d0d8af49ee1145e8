//! PSNR, SSIM and L1 for clip reconstructions.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Reported PSNR for an exact match.
pub const PSNR_CAP_DB: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;

fn same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(Error::ShapeMismatch(format!("{:?} vs {:?}", a.shape(), b.shape())))
    }
}

pub fn mse(pred: &Tensor, target: &Tensor) -> Result<f64> {
    same_shape(pred, target)?;
    let s: f64 = pred.data().iter().zip(target.data()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(s / pred.numel() as f64)
}

pub fn l1(pred: &Tensor, target: &Tensor) -> Result<f64> {
    same_shape(pred, target)?;
    let s: f64 = pred.data().iter().zip(target.data()).map(|(a, b)| (a - b).abs()).sum();
    Ok(s / pred.numel() as f64)
}

/// `10 log10(range² / mse)`, capped at [`PSNR_CAP_DB`].
pub fn psnr(pred: &Tensor, target: &Tensor, range: f64) -> Result<f64> {
    let e = mse(pred, target)?;
    if e == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (range * range / e).log10()).min(PSNR_CAP_DB))
}

fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, wi) in w.iter_mut().enumerate() {
        *wi = (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    w
}

/// Mean SSIM of two single-channel `h × w` images stored row-major.
///
/// The 11-tap Gaussian window is centred on every pixel; taps falling
/// outside the image are dropped and the rest renormalized, which keeps
/// the measure defined on grids smaller than the window.
pub fn ssim_plane(x: &[f64], y: &[f64], h: usize, w: usize, range: f64) -> f64 {
    let taps = gaussian_taps();
    let half = (SSIM_WINDOW / 2) as isize;
    let c1 = (0.01 * range).powi(2);
    let c2 = (0.03 * range).powi(2);
    let mut total = 0.0;
    for i in 0..h as isize {
        for j in 0..w as isize {
            let (mut sw, mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
            for di in -half..=half {
                let r = i + di;
                if r < 0 || r >= h as isize {
                    continue;
                }
                for dj in -half..=half {
                    let c = j + dj;
                    if c < 0 || c >= w as isize {
                        continue;
                    }
                    let k = taps[(di + half) as usize] * taps[(dj + half) as usize];
                    let idx = r as usize * w + c as usize;
                    let (a, b) = (x[idx], y[idx]);
                    sw += k;
                    mx += k * a;
                    my += k * b;
                    xx += k * a * a;
                    yy += k * b * b;
                    xy += k * a * b;
                }
            }
            let (mx, my) = (mx / sw, my / sw);
            let vx = xx / sw - mx * mx;
            let vy = yy / sw - my * my;
            let cov = xy / sw - mx * my;
            total += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
        }
    }
    total / (h * w) as f64
}

/// SSIM of two clips `[f, h, w, c]` (or images `[h, w, c]`), averaged over
/// frames and channels.
pub fn ssim(pred: &Tensor, target: &Tensor, range: f64) -> Result<f64> {
    same_shape(pred, target)?;
    let s = pred.shape();
    if s.len() < 3 {
        return Err(Error::ShapeMismatch(format!("ssim needs [.., h, w, c], got {s:?}")));
    }
    let r = s.len();
    let (h, w, c) = (s[r - 3], s[r - 2], s[r - 1]);
    let planes = pred.numel() / (h * w * c);
    let mut acc = 0.0;
    let mut xs = vec![0.0; h * w];
    let mut ys = vec![0.0; h * w];
    for p in 0..planes {
        for ch in 0..c {
            for k in 0..h * w {
                xs[k] = pred.data()[(p * h * w + k) * c + ch];
                ys[k] = target.data()[(p * h * w + k) * c + ch];
            }
            acc += ssim_plane(&xs, &ys, h, w, range);
        }
    }
    Ok(acc / (planes * c) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn psnr_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(91);
        let t = Tensor::uniform(vec![4, 8, 8, 3], -0.9, 0.9, &mut rng).unwrap();
        let p = t.map(|x| x + 0.1, "shift").unwrap();
        let want = 20.0 * (2.0f64 / 0.1).log10();
        assert!((psnr(&p, &t, 2.0).unwrap() - want).abs() < 1e-9);
        assert!((want - 26.0206).abs() < 1e-4);
        assert_eq!(psnr(&t, &t, 2.0).unwrap(), PSNR_CAP_DB);
        assert_eq!(l1(&t, &t).unwrap(), 0.0);
        assert!((l1(&p, &t).unwrap() - 0.1).abs() < 1e-12);
    }

    #[test]
    fn ssim_identity_and_ordering() {
        let mut rng = ChaCha8Rng::seed_from_u64(92);
        let mut data = vec![0.0; 2 * 8 * 8];
        for f in 0..2 {
            for y in 0..8 {
                for x in 0..8 {
                    data[(f * 8 + y) * 8 + x] = (((y as f64) - 3.5).powi(2) + ((x as f64) - 3.5).powi(2)).sqrt() / 5.0 - 0.5;
                }
            }
        }
        let clip = Tensor::new(vec![2, 8, 8, 1], data).unwrap();
        assert!((ssim(&clip, &clip, 2.0).unwrap() - 1.0).abs() < 1e-9);
        let noisy = clip.add(&Tensor::randn(vec![2, 8, 8, 1], 0.05, &mut rng).unwrap()).unwrap();
        let other = Tensor::uniform(vec![2, 8, 8, 1], -1.0, 1.0, &mut rng).unwrap();
        assert!(ssim(&other, &clip, 2.0).unwrap() < ssim(&noisy, &clip, 2.0).unwrap());
    }

    #[test]
    fn gaussian_window_is_symmetric() {
        let t = gaussian_taps();
        assert_eq!(t[5], 1.0);
        for i in 0..5 {
            assert_eq!(t[i], t[10 - i]);
        }
    }
}
