//! Structural similarity between two images, differentiable in the first.
//!
//! Local statistics are taken over 11x11 Gaussian windows (sigma 1.5) with
//! symmetric border padding.  The backward pass is the exact adjoint of the
//! forward computation, including the padding, so gradients check against
//! finite differences to roundoff.

pub const SSIM_C1: f64 = 1e-4;
pub const SSIM_C2: f64 = 9e-4;
const RADIUS: isize = 5;
const TAPS: usize = 11;

fn window() -> [f64; TAPS] {
    let sigma = 1.5;
    let mut w = [0.0; TAPS];
    let mut sum = 0.0;
    for (k, wk) in w.iter_mut().enumerate() {
        let d = k as f64 - RADIUS as f64;
        *wk = (-d * d / (2.0 * sigma * sigma)).exp();
        sum += *wk;
    }
    for wk in &mut w {
        *wk /= sum;
    }
    w
}

/// Reflect an out-of-range index back into `[0, n)`, repeating edge samples
/// (`-1 -> 0`, `n -> n - 1`).
fn mirror(mut i: isize, n: usize) -> usize {
    let n = n as isize;
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - 1 - i;
        } else {
            return i as usize;
        }
    }
}

/// Separable Gaussian blur with symmetric padding.
fn blur(src: &[f64], w: usize, h: usize, win: &[f64; TAPS]) -> Vec<f64> {
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, wk) in win.iter().enumerate() {
                let sx = mirror(x as isize + k as isize - RADIUS, w);
                acc += wk * src[y * w + sx];
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, wk) in win.iter().enumerate() {
                let sy = mirror(y as isize + k as isize - RADIUS, h);
                acc += wk * tmp[sy * w + x];
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// Adjoint of [`blur`]: scatters gradients back through both passes in
/// reverse order (mirror padding makes the operator non-symmetric at borders,
/// so this is not just another blur).
fn blur_adjoint(g: &[f64], w: usize, h: usize, win: &[f64; TAPS]) -> Vec<f64> {
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let gv = g[y * w + x];
            if gv == 0.0 {
                continue;
            }
            for (k, wk) in win.iter().enumerate() {
                let sy = mirror(y as isize + k as isize - RADIUS, h);
                tmp[sy * w + x] += wk * gv;
            }
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let gv = tmp[y * w + x];
            if gv == 0.0 {
                continue;
            }
            for (k, wk) in win.iter().enumerate() {
                let sx = mirror(x as isize + k as isize - RADIUS, w);
                out[y * w + sx] += wk * gv;
            }
        }
    }
    out
}

/// Mean SSIM of one channel plane, optionally accumulating
/// `coeff * d(mean ssim)/da` into `d_a`.  `b` is treated as constant.
pub fn ssim_plane(
    a: &[f64],
    b: &[f64],
    w: usize,
    h: usize,
    mut d_a: Option<(&mut [f64], f64)>,
) -> f64 {
    assert_eq!(a.len(), w * h);
    assert_eq!(b.len(), w * h);
    let n = w * h;
    let win = window();
    let aa: Vec<f64> = a.iter().map(|v| v * v).collect();
    let bb: Vec<f64> = b.iter().map(|v| v * v).collect();
    let ab: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();
    let mu_a = blur(a, w, h, &win);
    let mu_b = blur(b, w, h, &win);
    let e_aa = blur(&aa, w, h, &win);
    let e_bb = blur(&bb, w, h, &win);
    let e_ab = blur(&ab, w, h, &win);

    let mut total = 0.0;
    // Adjoints of the three filtered fields that depend on `a`.
    let mut g_mu_a = vec![0.0; n];
    let mut g_e_aa = vec![0.0; n];
    let mut g_e_ab = vec![0.0; n];
    let want_grad = d_a.is_some();
    for i in 0..n {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = e_aa[i] - ma * ma;
        let vb = e_bb[i] - mb * mb;
        let cov = e_ab[i] - ma * mb;
        let n1 = 2.0 * ma * mb + SSIM_C1;
        let n2 = 2.0 * cov + SSIM_C2;
        let d1 = ma * ma + mb * mb + SSIM_C1;
        let d2 = va + vb + SSIM_C2;
        let s = (n1 * n2) / (d1 * d2);
        total += s;
        if want_grad {
            let ds_dmu = 2.0 * mb * n2 / (d1 * d2) - s * 2.0 * ma / d1;
            let ds_dva = -s / d2;
            let ds_dcov = 2.0 * n1 / (d1 * d2);
            // va = e_aa - mu_a^2, cov = e_ab - mu_a mu_b.
            g_mu_a[i] = ds_dmu - 2.0 * ma * ds_dva - mb * ds_dcov;
            g_e_aa[i] = ds_dva;
            g_e_ab[i] = ds_dcov;
        }
    }
    if let Some((out, coeff)) = d_a.take() {
        assert_eq!(out.len(), n);
        let k = coeff / n as f64;
        let t_mu = blur_adjoint(&g_mu_a, w, h, &win);
        let t_aa = blur_adjoint(&g_e_aa, w, h, &win);
        let t_ab = blur_adjoint(&g_e_ab, w, h, &win);
        for i in 0..n {
            out[i] += k * (t_mu[i] + 2.0 * a[i] * t_aa[i] + b[i] * t_ab[i]);
        }
    }
    total / n as f64
}

/// Mean SSIM over the three channels of interleaved RGB images, optionally
/// accumulating `coeff * d(ssim)/da` into `d_a`.
pub fn ssim_rgb(
    a: &[[f64; 3]],
    b: &[[f64; 3]],
    w: usize,
    h: usize,
    mut d_a: Option<(&mut [[f64; 3]], f64)>,
) -> f64 {
    assert_eq!(a.len(), w * h);
    assert_eq!(b.len(), w * h);
    let mut total = 0.0;
    for c in 0..3 {
        let pa: Vec<f64> = a.iter().map(|p| p[c]).collect();
        let pb: Vec<f64> = b.iter().map(|p| p[c]).collect();
        match d_a.as_mut() {
            Some((out, coeff)) => {
                let mut plane = vec![0.0; w * h];
                total += ssim_plane(&pa, &pb, w, h, Some((&mut plane, *coeff / 3.0)));
                for (o, g) in out.iter_mut().zip(&plane) {
                    o[c] += g;
                }
            }
            None => total += ssim_plane(&pa, &pb, w, h, None),
        }
    }
    total / 3.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn identical_images_score_one() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let img: Vec<f64> = (0..16 * 16).map(|_| rng.random_range(0.0..1.0)).collect();
        let s = ssim_plane(&img, &img, 16, 16, None);
        assert!((s - 1.0).abs() < 1e-12, "ssim {s}");
    }

    #[test]
    fn constant_black_versus_white_scores_near_zero() {
        let a = vec![0.0; 16 * 16];
        let b = vec![1.0; 16 * 16];
        let s = ssim_plane(&a, &b, 16, 16, None);
        // Zero variance everywhere: score reduces to C1 / (1 + C1).
        let expect = SSIM_C1 / (1.0 + SSIM_C1);
        assert!((s - expect).abs() < 1e-12, "ssim {s} expect {expect}");
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let (w, h) = (16, 16);
        let mut a: Vec<f64> = (0..w * h).map(|_| rng.random_range(0.2..0.8)).collect();
        let b: Vec<f64> = (0..w * h).map(|_| rng.random_range(0.2..0.8)).collect();
        let mut grad = vec![0.0; w * h];
        ssim_plane(&a, &b, w, h, Some((&mut grad, 1.0)));
        let hstep = 1e-5;
        for i in (0..w * h).step_by(17) {
            let keep = a[i];
            a[i] = keep + hstep;
            let up = ssim_plane(&a, &b, w, h, None);
            a[i] = keep - hstep;
            let dn = ssim_plane(&a, &b, w, h, None);
            a[i] = keep;
            let fd = (up - dn) / (2.0 * hstep);
            assert!(
                (grad[i] - fd).abs() <= 1e-4 * fd.abs().max(grad[i].abs()) + 1e-9,
                "pixel {i}: analytic {} vs fd {fd}",
                grad[i]
            );
        }
    }

    #[test]
    fn rgb_gradient_matches_finite_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(12);
        let (w, h) = (9, 7);
        let mut a: Vec<[f64; 3]> =
            (0..w * h).map(|_| std::array::from_fn(|_| rng.random_range(0.1..0.9))).collect();
        let b: Vec<[f64; 3]> =
            (0..w * h).map(|_| std::array::from_fn(|_| rng.random_range(0.1..0.9))).collect();
        let mut grad = vec![[0.0; 3]; w * h];
        ssim_rgb(&a, &b, w, h, Some((&mut grad, 2.0)));
        let hstep = 1e-5;
        for i in (0..w * h).step_by(11) {
            for c in 0..3 {
                let keep = a[i][c];
                a[i][c] = keep + hstep;
                let up = 2.0 * ssim_rgb(&a, &b, w, h, None);
                a[i][c] = keep - hstep;
                let dn = 2.0 * ssim_rgb(&a, &b, w, h, None);
                a[i][c] = keep;
                let fd = (up - dn) / (2.0 * hstep);
                let g = grad[i][c];
                assert!(
                    (g - fd).abs() <= 1e-4 * fd.abs().max(g.abs()) + 1e-9,
                    "pixel {i} ch {c}: analytic {g} vs fd {fd}"
                );
            }
        }
    }

    #[test]
    fn window_is_normalized() {
        let w = window();
        let sum: f64 = w.iter().sum();
        assert!((sum - 1.0).abs() < 1e-15);
        assert!((w[0] - w[10]).abs() < 1e-18, "window must be symmetric");
        assert!(w[5] > w[4] && w[4] > w[3]);
    }
}
