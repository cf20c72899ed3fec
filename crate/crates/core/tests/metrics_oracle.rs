use keygate_core::data::{generate_dataset, DatasetSpec};
use keygate_core::metrics::{psnr, ssim};
use keygate_core::ImageF32;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Straight 2-D windowed SSIM, written independently of the separable
/// implementation: explicit 11×11 weights, every valid window.
fn ssim_oracle(a: &ImageF32, b: &ImageF32) -> f64 {
    let (h, w) = (a.height(), a.width());
    let luma = |img: &ImageF32, y: usize, x: usize| {
        0.299 * img.get(y, x, 0) as f64 + 0.587 * img.get(y, x, 1) as f64 + 0.114 * img.get(y, x, 2) as f64
    };
    let mut weights = [[0.0f64; 11]; 11];
    let mut norm = 0.0;
    for (i, row) in weights.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let d2 = ((i as f64 - 5.0).powi(2) + (j as f64 - 5.0).powi(2)) / (2.0 * 1.5 * 1.5);
            *v = (-d2).exp();
            norm += *v;
        }
    }
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut total = 0.0;
    let mut count = 0;
    for y0 in 0..=h - 11 {
        for x0 in 0..=w - 11 {
            let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for i in 0..11 {
                for j in 0..11 {
                    let wt = weights[i][j] / norm;
                    let (p, q) = (luma(a, y0 + i, x0 + j), luma(b, y0 + i, x0 + j));
                    mx += wt * p;
                    my += wt * q;
                    sxx += wt * p * p;
                    syy += wt * q * q;
                    sxy += wt * p * q;
                }
            }
            let (vx, vy, cxy) = (sxx - mx * mx, syy - my * my, sxy - mx * my);
            total += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    total / count as f64
}

fn noisy(img: &ImageF32, sigma: f64, seed: u64) -> ImageF32 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = Normal::new(0.0, sigma).unwrap();
    let data = img.data().iter().map(|&v| (v as f64 + dist.sample(&mut rng)) as f32).collect();
    ImageF32::new(img.height(), img.width(), 3, data).unwrap().clamped()
}

fn images() -> Vec<ImageF32> {
    generate_dataset(&DatasetSpec { count: 6, seed: 4, ..Default::default() }).unwrap()
}

#[test]
fn ssim_matches_windowed_oracle() {
    for (i, img) in images().iter().enumerate() {
        for sigma in [0.0, 0.02, 0.1, 0.3] {
            let other = noisy(img, sigma, i as u64);
            let (got, want) = (ssim(img, &other).unwrap(), ssim_oracle(img, &other));
            assert!((got - want).abs() < 1e-9, "img {i} sigma {sigma}: {got} vs {want}");
        }
    }
}

#[test]
fn noise_ladder_is_monotone() {
    for (i, img) in images().iter().enumerate() {
        let ladder: Vec<(f64, f64)> = [0.01, 0.03, 0.1, 0.3]
            .iter()
            .map(|&s| {
                let n = noisy(img, s, 100 + i as u64);
                (psnr(img, &n).unwrap(), ssim(img, &n).unwrap())
            })
            .collect();
        for pair in ladder.windows(2) {
            assert!(pair[1].0 < pair[0].0, "psnr ladder {ladder:?}");
            assert!(pair[1].1 < pair[0].1, "ssim ladder {ladder:?}");
        }
    }
}

#[test]
fn identical_images_score_perfectly() {
    for img in images() {
        assert_eq!(psnr(&img, &img).unwrap(), 99.0);
        assert!((ssim(&img, &img).unwrap() - 1.0).abs() < 1e-12);
    }
}
