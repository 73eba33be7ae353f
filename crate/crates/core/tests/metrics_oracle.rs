use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use s2sf::metrics::{psnr, ssim};

/// Direct 2-D windowed SSIM with centered moments, no separability.
fn ssim_oracle(a: &[f32], b: &[f32], [c, h, w]: [usize; 3], peak: f64) -> f64 {
    let r = 5i64;
    let mut weights = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            weights.push((-((dx * dx + dy * dy) as f64) / 4.5).exp());
        }
    }
    let s: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|v| *v /= s);
    let (c1, c2) = ((0.01 * peak).powi(2), (0.03 * peak).powi(2));
    let (mut total, mut n) = (0.0, 0);
    for ch in 0..c {
        for y0 in 0..h - 10 {
            for x0 in 0..w - 10 {
                let at = |v: &[f32], i: usize| {
                    let (dy, dx) = (i / 11, i % 11);
                    v[ch * h * w + (y0 + dy) * w + x0 + dx] as f64
                };
                let mx: f64 = weights.iter().enumerate().map(|(i, k)| k * at(a, i)).sum();
                let my: f64 = weights.iter().enumerate().map(|(i, k)| k * at(b, i)).sum();
                let (mut vx, mut vy, mut cov) = (0.0, 0.0, 0.0);
                for (i, k) in weights.iter().enumerate() {
                    let (p, q) = (at(a, i) - mx, at(b, i) - my);
                    vx += k * p * p;
                    vy += k * q * q;
                    cov += k * p * q;
                }
                total += (2.0 * mx * my + c1) * (2.0 * cov + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                n += 1;
            }
        }
    }
    total / n as f64
}

#[test]
fn ssim_matches_direct_window_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for (h, w) in [(11, 11), (16, 23), (32, 32)] {
        let dims = [3, h, w];
        let a: Vec<f32> = (0..3 * h * w).map(|_| rng.random()).collect();
        let b: Vec<f32> = a
            .iter()
            .map(|v| (v + rng.random_range(-0.2..0.2)).clamp(0.0, 1.0))
            .collect();
        let got = ssim(&a, &b, dims, 1.0).unwrap();
        let want = ssim_oracle(&a, &b, dims, 1.0);
        assert!((got - want).abs() < 1e-10, "{h}x{w}: {got} vs {want}");
    }
}

#[test]
fn ssim_of_inverted_binary_image_is_negative() {
    let (h, w) = (24, 24);
    let a: Vec<f32> = (0..h * w).map(|i| ((i / w + i % w) % 2) as f32).collect();
    let inv: Vec<f32> = a.iter().map(|v| 1.0 - v).collect();
    let s = ssim(&a, &inv, [1, h, w], 1.0).unwrap();
    assert!(s < 0.0, "{s}");
    assert!((s - ssim_oracle(&a, &inv, [1, h, w], 1.0)).abs() < 1e-10);
}

#[test]
fn psnr_matches_closed_form() {
    // Constant error e gives 10 log10(1 / e^2).
    let a = vec![0.25f32; 300];
    let b = vec![0.5f32; 300];
    assert!((psnr(&a, &b, 1.0).unwrap() - 20.0 * 4f64.log10()).abs() < 1e-12);
    assert_eq!(psnr(&a, &a, 1.0).unwrap(), 100.0);
}
