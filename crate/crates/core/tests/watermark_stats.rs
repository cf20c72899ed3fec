use keygate_core::watermark::{embed, extract_from_latent, WatermarkPayload, LATENT_ELEMENTS};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

const POSITION_SEED: u64 = 17;

#[test]
fn watermarked_latents_stay_standard_normal() {
    let samples = 10_000;
    let mut sum = vec![0.0f64; LATENT_ELEMENTS];
    let mut sq = vec![0.0f64; LATENT_ELEMENTS];
    for i in 0..samples {
        let p = WatermarkPayload::random(32, 8, POSITION_SEED, 50_000 + i).unwrap();
        for (j, &v) in embed(&p, i).data().iter().enumerate() {
            sum[j] += v as f64;
            sq[j] += (v as f64).powi(2);
        }
    }
    let n = samples as f64;
    let means: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let vars: Vec<f64> = sq.iter().zip(&means).map(|(q, m)| q / n - m * m).collect();
    let grand_mean = means.iter().sum::<f64>() / LATENT_ELEMENTS as f64;
    let grand_var = vars.iter().sum::<f64>() / LATENT_ELEMENTS as f64;
    assert!(grand_mean.abs() < 3e-3, "grand mean {grand_mean}");
    assert!((grand_var - 1.0).abs() < 0.01, "grand variance {grand_var}");
    // 5 standard errors per position
    assert!(means.iter().all(|m| m.abs() < 0.05), "max |mean| {}", means.iter().fold(0.0f64, |a, m| a.max(m.abs())));
    assert!(vars.iter().all(|v| (v - 1.0).abs() < 0.08));
}

fn accuracy_under_noise(sigma: f64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut total = 0.0;
    let trials = 300;
    for i in 0..trials {
        let p = WatermarkPayload::random(32, 8, POSITION_SEED, i).unwrap();
        let noisy: Vec<f32> = embed(&p, 1000 + i)
            .data()
            .iter()
            .map(|&v| v + (sigma * Distribution::<f64>::sample(&StandardNormal, &mut rng)) as f32)
            .collect();
        let got = extract_from_latent(&noisy, POSITION_SEED, 32, 8).unwrap();
        total += got.iter().zip(p.bits()).filter(|(a, b)| a == b).count() as f64 / 32.0;
    }
    total / trials as f64
}

#[test]
fn accuracy_falls_with_latent_noise() {
    let ladder: Vec<f64> = [0.0, 0.5, 1.0, 2.0, 4.0].iter().map(|&s| accuracy_under_noise(s)).collect();
    assert_eq!(ladder[0], 1.0);
    for pair in ladder.windows(2) {
        assert!(pair[1] < pair[0], "{ladder:?}");
    }
    assert!(ladder[4] > 0.5 && ladder[4] < 0.8, "{ladder:?}");
}

#[test]
fn wrong_position_seed_reads_noise() {
    let mut total = 0.0;
    for i in 0..200 {
        let p = WatermarkPayload::random(32, 8, POSITION_SEED, i).unwrap();
        let got = extract_from_latent(embed(&p, i).data(), POSITION_SEED + 1, 32, 8).unwrap();
        total += got.iter().zip(p.bits()).filter(|(a, b)| a == b).count() as f64 / 32.0;
    }
    let acc = total / 200.0;
    assert!((acc - 0.5).abs() < 0.03, "{acc}");
}
