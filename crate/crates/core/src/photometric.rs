//! Color losses with analytic gradients: L1, D-SSIM and the two-path
//! color objective.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::buffer::ImageBuffer;
use crate::error::{Error, Result};
use crate::render::RenderOutput;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

/// A scalar loss together with its gradient with respect to the first image.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageLoss {
    pub value: f64,
    pub grad: ImageBuffer,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ColorLossWeights {
    /// Weight of D-SSIM against L1 on the appearance render.
    pub lambda_dssim: f64,
    /// Weight of the L1 term on the geometric render.
    pub lambda_s: f64,
}

impl Default for ColorLossWeights {
    fn default() -> Self {
        ColorLossWeights {
            lambda_dssim: 0.2,
            lambda_s: 0.1,
        }
    }
}

impl ColorLossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda_dssim) {
            return Err(Error::InvalidParameter(format!(
                "lambda_dssim must lie in [0, 1], got {}",
                self.lambda_dssim
            )));
        }
        if !(self.lambda_s >= 0.0 && self.lambda_s.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "lambda_s must be non-negative, got {}",
                self.lambda_s
            )));
        }
        Ok(())
    }
}

/// Mean absolute difference over pixels and channels.
pub fn l1_loss(a: &ImageBuffer, b: &ImageBuffer) -> Result<ImageLoss> {
    a.ensure_same(b)?;
    let n = (a.len() * 3).max(1) as f64;
    let mut value = 0.0;
    let grad = ImageBuffer::from_vec(
        a.width(),
        a.height(),
        a.as_slice()
            .iter()
            .zip(b.as_slice())
            .map(|(pa, pb)| {
                let d = pa - pb;
                value += d.abs().sum();
                d.map(sign) / n
            })
            .collect(),
    )?;
    Ok(ImageLoss {
        value: value / n,
        grad,
    })
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Mean squared error over pixels and channels.
pub fn mse(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    a.ensure_same(b)?;
    let n = (a.len() * 3).max(1) as f64;
    Ok(a.as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(pa, pb)| (pa - pb).norm_squared())
        .sum::<f64>()
        / n)
}

/// Peak signal-to-noise ratio in dB for images on [0, 1]. Identical images
/// give `+inf`.
pub fn psnr(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    let m = mse(a, b)?;
    Ok(if m == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * m.log10()
    })
}

/// Mirror index into `0..n` without repeating the edge sample.
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut k = [0.0; SSIM_WINDOW];
    for (i, v) in k.iter_mut().enumerate() {
        let x = i as f64 - r;
        *v = (-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable Gaussian window with reflect padding, and its adjoint.
struct Window {
    kernel: [f64; SSIM_WINDOW],
    width: usize,
    height: usize,
}

impl Window {
    fn new(width: usize, height: usize) -> Self {
        Window {
            kernel: gaussian_kernel(),
            width,
            height,
        }
    }

    fn taps(&self, i: usize, n: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = (SSIM_WINDOW / 2) as isize;
        self.kernel
            .iter()
            .enumerate()
            .map(move |(k, &w)| (reflect(i as isize + k as isize - r, n), w))
    }

    fn apply(&self, src: &[f64]) -> Vec<f64> {
        let (w, h) = (self.width, self.height);
        let mut tmp = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w {
                tmp[y * w + x] = self.taps(x, w).map(|(sx, k)| k * src[y * w + sx]).sum();
            }
        }
        let mut out = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w {
                out[y * w + x] = self.taps(y, h).map(|(sy, k)| k * tmp[sy * w + x]).sum();
            }
        }
        out
    }

    fn adjoint(&self, src: &[f64]) -> Vec<f64> {
        let (w, h) = (self.width, self.height);
        let mut tmp = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w {
                let v = src[y * w + x];
                for (sy, k) in self.taps(y, h) {
                    tmp[sy * w + x] += k * v;
                }
            }
        }
        let mut out = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w {
                let v = tmp[y * w + x];
                for (sx, k) in self.taps(x, w) {
                    out[y * w + sx] += k * v;
                }
            }
        }
        out
    }
}

/// Mean SSIM over one channel plane and its gradient with respect to `a`.
fn ssim_plane(win: &Window, a: &[f64], b: &[f64]) -> (f64, Vec<f64>) {
    let aa: Vec<f64> = a.iter().map(|v| v * v).collect();
    let bb: Vec<f64> = b.iter().map(|v| v * v).collect();
    let ab: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();
    let mu_a = win.apply(a);
    let mu_b = win.apply(b);
    let e_aa = win.apply(&aa);
    let e_bb = win.apply(&bb);
    let e_ab = win.apply(&ab);

    let n = a.len();
    let mut total = 0.0;
    let mut d_mu = vec![0.0; n];
    let mut d_eaa = vec![0.0; n];
    let mut d_eab = vec![0.0; n];
    for p in 0..n {
        let (ma, mb) = (mu_a[p], mu_b[p]);
        let va = e_aa[p] - ma * ma;
        let vb = e_bb[p] - mb * mb;
        let cov = e_ab[p] - ma * mb;
        let n1 = 2.0 * ma * mb + SSIM_C1;
        let n2 = 2.0 * cov + SSIM_C2;
        let d1 = ma * ma + mb * mb + SSIM_C1;
        let d2 = va + vb + SSIM_C2;
        let s = n1 * n2 / (d1 * d2);
        total += s;
        d_eaa[p] = -s / d2;
        d_eab[p] = 2.0 * s / n2;
        d_mu[p] = 2.0 * mb * s / n1 - 2.0 * ma * s / d1 - 2.0 * mb * s / n2 + 2.0 * ma * s / d2;
    }
    let g_mu = win.adjoint(&d_mu);
    let g_aa = win.adjoint(&d_eaa);
    let g_ab = win.adjoint(&d_eab);
    let grad = (0..n)
        .map(|q| g_mu[q] + 2.0 * a[q] * g_aa[q] + b[q] * g_ab[q])
        .collect();
    (total, grad)
}

fn channel(img: &ImageBuffer, c: usize) -> Vec<f64> {
    img.as_slice().iter().map(|p| p[c]).collect()
}

/// Mean SSIM over pixels and channels.
pub fn ssim(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    Ok(1.0 - 2.0 * dssim_loss(a, b)?.value)
}

/// `(1 - SSIM) / 2` with an 11x11 Gaussian window and its gradient in `a`.
pub fn dssim_loss(a: &ImageBuffer, b: &ImageBuffer) -> Result<ImageLoss> {
    a.ensure_same(b)?;
    let (w, h) = a.dims();
    if a.is_empty() {
        return Ok(ImageLoss {
            value: 0.0,
            grad: ImageBuffer::new(w, h),
        });
    }
    let win = Window::new(w, h);
    let n = (a.len() * 3) as f64;
    let mut grad = ImageBuffer::new(w, h);
    let mut sum = 0.0;
    for c in 0..3 {
        let (s, g) = ssim_plane(&win, &channel(a, c), &channel(b, c));
        sum += s;
        for (dst, gv) in grad.as_mut_slice().iter_mut().zip(g) {
            dst[c] = -0.5 * gv / n;
        }
    }
    Ok(ImageLoss {
        value: 0.5 * (1.0 - sum / n),
        grad,
    })
}

/// `(1 - lambda) L1 + lambda D-SSIM`.
pub fn gs_loss(a: &ImageBuffer, gt: &ImageBuffer, lambda_dssim: f64) -> Result<ImageLoss> {
    let l1 = l1_loss(a, gt)?;
    let mut value = (1.0 - lambda_dssim) * l1.value;
    let mut grad = l1.grad.map(|g| g * (1.0 - lambda_dssim));
    if lambda_dssim != 0.0 {
        let ds = dssim_loss(a, gt)?;
        value += lambda_dssim * ds.value;
        for (g, d) in grad.as_mut_slice().iter_mut().zip(ds.grad.as_slice()) {
            *g += d * lambda_dssim;
        }
    }
    Ok(ImageLoss { value, grad })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ColorLoss {
    pub total: f64,
    pub l1_appearance: f64,
    pub dssim_appearance: f64,
    pub l1_geometric: f64,
    /// Gradient with respect to the appearance render.
    pub grad_appearance: ImageBuffer,
    /// Gradient with respect to the geometric render.
    pub grad_geometric: ImageBuffer,
}

/// Two-path color loss on raw images.
pub fn color_loss_images(
    c_o: &ImageBuffer,
    c_s: &ImageBuffer,
    gt: &ImageBuffer,
    w: &ColorLossWeights,
) -> Result<ColorLoss> {
    w.validate()?;
    c_s.ensure_same(gt)?;
    let l1_o = l1_loss(c_o, gt)?;
    let ds_o = if w.lambda_dssim != 0.0 {
        dssim_loss(c_o, gt)?
    } else {
        ImageLoss {
            value: 0.0,
            grad: ImageBuffer::new(gt.width(), gt.height()),
        }
    };
    let l1_s = l1_loss(c_s, gt)?;
    let lam = w.lambda_dssim;
    let grad_appearance = ImageBuffer::from_vec(
        gt.width(),
        gt.height(),
        l1_o.grad
            .as_slice()
            .iter()
            .zip(ds_o.grad.as_slice())
            .map(|(g1, g2)| g1 * (1.0 - lam) + g2 * lam)
            .collect(),
    )?;
    let grad_geometric = l1_s.grad.map(|g| g * w.lambda_s);
    Ok(ColorLoss {
        total: (1.0 - lam) * l1_o.value + lam * ds_o.value + w.lambda_s * l1_s.value,
        l1_appearance: l1_o.value,
        dssim_appearance: ds_o.value,
        l1_geometric: l1_s.value,
        grad_appearance,
        grad_geometric,
    })
}

/// Two-path color loss on render outputs.
pub fn color_loss(
    out_o: &RenderOutput,
    out_s: &RenderOutput,
    gt: &ImageBuffer,
    w: &ColorLossWeights,
) -> Result<ColorLoss> {
    color_loss_images(&out_o.color, &out_s.color, gt, w)
}

/// Image filled with one color.
pub fn constant_image(width: usize, height: usize, c: Vector3<f64>) -> ImageBuffer {
    ImageBuffer::filled(width, height, c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::relative_error;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(rng: &mut ChaCha8Rng, w: usize, h: usize) -> ImageBuffer {
        ImageBuffer::from_fn(w, h, |_, _| {
            Vector3::new(rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>())
        })
    }

    /// Direct per-pixel window sums with explicit reflection, no separability.
    fn naive_ssim(a: &ImageBuffer, b: &ImageBuffer) -> f64 {
        let (w, h) = a.dims();
        let r = 5isize;
        let g1: Vec<f64> = (-r..=r).map(|x| (-(x * x) as f64 / 4.5).exp()).collect();
        let s1: f64 = g1.iter().sum();
        let mut total = 0.0;
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    let (mut ma, mut mb, mut aa, mut bb, mut ab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for dy in -r..=r {
                        for dx in -r..=r {
                            let k = g1[(dx + r) as usize] * g1[(dy + r) as usize] / (s1 * s1);
                            let sx = reflect(x as isize + dx, w);
                            let sy = reflect(y as isize + dy, h);
                            let va = a.get(sx, sy)[c];
                            let vb = b.get(sx, sy)[c];
                            ma += k * va;
                            mb += k * vb;
                            aa += k * va * va;
                            bb += k * vb * vb;
                            ab += k * va * vb;
                        }
                    }
                    let (sa, sb, sab) = (aa - ma * ma, bb - mb * mb, ab - ma * mb);
                    total += (2.0 * ma * mb + SSIM_C1) * (2.0 * sab + SSIM_C2)
                        / ((ma * ma + mb * mb + SSIM_C1) * (sa + sb + SSIM_C2));
                }
            }
        }
        total / (w * h * 3) as f64
    }

    #[test]
    fn reflect_indices() {
        let got: Vec<usize> = (-4..9).map(|i| reflect(i, 4)).collect();
        assert_eq!(got, vec![2, 3, 2, 1, 0, 1, 2, 3, 2, 1, 0, 1, 2]);
        assert_eq!(reflect(-7, 1), 0);
    }

    #[test]
    fn l1_trivial_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_image(&mut rng, 7, 5);
        let z = l1_loss(&a, &a).unwrap();
        assert_eq!(z.value, 0.0);
        assert!(z.grad.as_slice().iter().all(|g| *g == Vector3::zeros()));
        for (w, h) in [(1, 1), (4, 9)] {
            let one = constant_image(w, h, Vector3::repeat(1.0));
            let zero = constant_image(w, h, Vector3::zeros());
            assert_eq!(l1_loss(&one, &zero).unwrap().value, 1.0);
        }
    }

    #[test]
    fn l1_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random_image(&mut rng, 6, 4);
        let b = random_image(&mut rng, 6, 4);
        let g = l1_loss(&a, &b).unwrap().grad;
        let h = 1e-7;
        for i in 0..a.len() {
            for c in 0..3 {
                let mut ap = a.clone();
                ap.as_mut_slice()[i][c] += h;
                let mut am = a.clone();
                am.as_mut_slice()[i][c] -= h;
                let fd = (l1_loss(&ap, &b).unwrap().value - l1_loss(&am, &b).unwrap().value) / (2.0 * h);
                assert!((fd - g.as_slice()[i][c]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn mismatched_dimensions_rejected() {
        let a = ImageBuffer::new(4, 4);
        let b = ImageBuffer::new(4, 5);
        assert!(l1_loss(&a, &b).is_err());
        assert!(dssim_loss(&a, &b).is_err());
        assert!(color_loss_images(&a, &a, &b, &ColorLossWeights::default()).is_err());
    }

    #[test]
    fn dssim_identical_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_image(&mut rng, 13, 9);
        let d = dssim_loss(&a, &a).unwrap();
        assert!(d.value.abs() < 1e-15);
        assert!(d.grad.as_slice().iter().all(|g| g.norm() < 1e-15));
    }

    #[test]
    fn dssim_constant_images_closed_form() {
        for (va, vb) in [(1.0, 0.0), (0.3, 0.7), (0.5, 0.45)] {
            let a = constant_image(6, 6, Vector3::repeat(va));
            let b = constant_image(6, 6, Vector3::repeat(vb));
            let s = (2.0 * va * vb + SSIM_C1) / (va * va + vb * vb + SSIM_C1);
            let d = dssim_loss(&a, &b).unwrap().value;
            assert!((d - 0.5 * (1.0 - s)).abs() < 1e-12);
            assert!(d > 0.0 && d <= 0.5);
        }
    }

    #[test]
    fn windowed_statistics_match_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for (w, h) in [(9, 7), (3, 14), (1, 5)] {
            let a = random_image(&mut rng, w, h);
            let b = random_image(&mut rng, w, h);
            let fast = ssim(&a, &b).unwrap();
            assert!((fast - naive_ssim(&a, &b)).abs() < 1e-12, "{w}x{h}");
        }
    }

    #[test]
    fn dssim_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_image(&mut rng, 8, 6);
        let b = random_image(&mut rng, 8, 6);
        let g = dssim_loss(&a, &b).unwrap().grad;
        let h = 1e-6;
        for i in 0..a.len() {
            for c in 0..3 {
                let mut ap = a.clone();
                ap.as_mut_slice()[i][c] += h;
                let mut am = a.clone();
                am.as_mut_slice()[i][c] -= h;
                let fd = (dssim_loss(&ap, &b).unwrap().value - dssim_loss(&am, &b).unwrap().value)
                    / (2.0 * h);
                let an = g.as_slice()[i][c];
                assert!(relative_error(an, fd) < 1e-4, "pixel {i} ch {c}: {an} vs {fd}");
            }
        }
    }

    #[test]
    fn color_loss_is_weighted_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (co, cs, gt) = (
            random_image(&mut rng, 10, 8),
            random_image(&mut rng, 10, 8),
            random_image(&mut rng, 10, 8),
        );
        let w = ColorLossWeights::default();
        let l = color_loss_images(&co, &cs, &gt, &w).unwrap();
        let expect = 0.8 * l1_loss(&co, &gt).unwrap().value
            + 0.2 * dssim_loss(&co, &gt).unwrap().value
            + 0.1 * l1_loss(&cs, &gt).unwrap().value;
        assert!((l.total - expect).abs() < 1e-12);

        let zero = ColorLossWeights {
            lambda_dssim: 0.0,
            lambda_s: 0.0,
        };
        let l = color_loss_images(&co, &cs, &gt, &zero).unwrap();
        assert_eq!(l.total, l1_loss(&co, &gt).unwrap().value);
        assert!(l.grad_geometric.as_slice().iter().all(|g| *g == Vector3::zeros()));

        let same = color_loss_images(&gt, &gt, &gt, &w).unwrap();
        assert!(same.total.abs() < 1e-15);
    }

    #[test]
    fn geometric_gradient_is_scaled_l1_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (co, cs, gt) = (
            random_image(&mut rng, 6, 6),
            random_image(&mut rng, 6, 6),
            random_image(&mut rng, 6, 6),
        );
        let w = ColorLossWeights {
            lambda_dssim: 0.2,
            lambda_s: 0.3,
        };
        let l = color_loss_images(&co, &cs, &gt, &w).unwrap();
        let l1 = l1_loss(&cs, &gt).unwrap();
        for (a, b) in l.grad_geometric.as_slice().iter().zip(l1.grad.as_slice()) {
            assert_eq!(*a, b * 0.3);
        }
    }

    #[test]
    fn invalid_weights_rejected() {
        for w in [
            ColorLossWeights { lambda_dssim: 1.5, lambda_s: 0.1 },
            ColorLossWeights { lambda_dssim: 0.2, lambda_s: -0.1 },
        ] {
            assert!(w.validate().is_err());
        }
    }

    #[test]
    fn psnr_values() {
        let a = constant_image(4, 4, Vector3::repeat(0.5));
        let b = constant_image(4, 4, Vector3::repeat(0.6));
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn losses_nonnegative_and_l1_symmetric(seed in any::<u64>(), w in 1usize..12, h in 1usize..12) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_image(&mut rng, w, h);
            let b = random_image(&mut rng, w, h);
            let ab = l1_loss(&a, &b).unwrap().value;
            prop_assert!(ab > 0.0);
            prop_assert_eq!(ab, l1_loss(&b, &a).unwrap().value);
            let d = dssim_loss(&a, &b).unwrap().value;
            prop_assert!(d > 0.0);
            prop_assert!(dssim_loss(&a, &a).unwrap().value.abs() < 1e-14);
        }
    }
}
