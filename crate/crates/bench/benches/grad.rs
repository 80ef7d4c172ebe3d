//! Analytic InfoNCE gradient for one mini-batch.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use umr_core::featurizer::featurize_text_sparse;
use umr_core::trainer::infonce_grad;
use umr_core::{Features, FeaturizerConfig, FusionParams};

fn features(rng: &mut ChaCha8Rng, cfg: &FeaturizerConfig, image: bool) -> Features {
    let words: Vec<String> = (0..16)
        .map(|_| format!("w{}", rng.gen_range(0..2000)))
        .collect();
    Features {
        text: Some(featurize_text_sparse(&words.join(" "), cfg).unwrap()),
        image: image.then(|| {
            (0..cfg.image_dim)
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect()
        }),
    }
}

fn grad(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let cfg = FeaturizerConfig {
        text_dim: 1024,
        image_dim: 64,
        seed: 0,
    };
    let params = FusionParams::for_featurizer(128, &cfg);
    let batch = 32;
    let queries: Vec<Features> = (0..batch)
        .map(|_| features(&mut rng, &cfg, false))
        .collect();
    let pool: Vec<Features> = (0..2 * batch)
        .map(|i| features(&mut rng, &cfg, i % 2 == 1))
        .collect();
    let pos: Vec<usize> = (0..batch).collect();
    c.bench_function("infonce_grad_b32_pool64_d128", |b| {
        b.iter(|| infonce_grad(black_box(&queries), &pool, &pos, &params, 0.05).unwrap())
    });
}

criterion_group!(benches, grad);
criterion_main!(benches);
