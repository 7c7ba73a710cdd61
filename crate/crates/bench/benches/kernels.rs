// SPDX-License-Identifier: MIT OR Apache-2.0

use criterion::{black_box, criterion_group, criterion_main, Criterion};

use tunelens::attn_lens::{analyze_bundle, AttnParams};
use tunelens::attribution::{importance_matrix, ImportanceMethod};
use tunelens::ffn_lens::ffn_pca;
use tunelens::fixture::{planted_attention, random_bundle, FixtureSpec, PlantedSpec};
use tunelens::runtime::{embedding_gradient, forward};
use tunelens::tensor::matmul;
use tunelens::GradientTarget;

fn kernels(c: &mut Criterion) {
    let spec = FixtureSpec { d_model: 32, d_ffn: 64, vocab_size: 64, ..Default::default() };
    let bundle = random_bundle(&spec, 7);
    let ids: Vec<usize> = (2..34).collect();

    let a = bundle.output_embeddings().clone();
    let b = a.transpose();
    c.bench_function("matmul 64x32x64", |bch| bch.iter(|| matmul(black_box(&a), black_box(&b)).unwrap()));

    c.bench_function("forward 32 tokens", |bch| bch.iter(|| forward(&bundle, black_box(&ids)).unwrap()));

    c.bench_function("gradient 32 tokens", |bch| {
        bch.iter(|| embedding_gradient(&bundle, black_box(&ids), 5, GradientTarget::Probability).unwrap())
    });

    let (prompt, response) = (&ids[..12], &ids[12..20]);
    for (name, method) in [("occlusion", ImportanceMethod::Occlusion), ("gradient", ImportanceMethod::Gradient)] {
        c.bench_function(&format!("importance 12x8 {name}"), |bch| {
            bch.iter(|| importance_matrix(&bundle, prompt, response, method, GradientTarget::Probability, 1).unwrap())
        });
    }

    c.bench_function("ffn pca layer 0", |bch| bch.iter(|| ffn_pca(&bundle, 0).unwrap()));

    let planted = planted_attention(&PlantedSpec { n_layers: 4, planted_layer: 2, ..Default::default() }, 1).unwrap();
    let params = AttnParams { k: planted.k, top_n: 100, reference_words: 1000, workers: 1 };
    c.bench_function("head profiles 4 layers", |bch| {
        bch.iter(|| analyze_bundle(&planted.pretrained, &planted.glove, &params).unwrap())
    });
}

criterion_group!(benches, kernels);
criterion_main!(benches);
