mod common;

use common::*;
use exedit_core::condition::{
    adapt, contrastive_view, cosine, encode_reference, init_adapter, pretrain_encoder, AdapterConfig, ContrastiveConfig,
    EncoderConfig, EncoderMode,
};
use exedit_core::data::{generate_toy_dataset, BBox};
use exedit_core::denoiser::predict_noise;
use exedit_core::image::Image;
use exedit_core::trainer::{train_step, AblationPreset};

#[test]
fn pretrained_views_are_closer_than_other_images() {
    let all = generate_toy_dataset(600, (32, 32), &mut rng(1));
    let (train, held) = all.split_at(400);
    let images: Vec<Image> = train.iter().map(|a| a.image.clone()).collect();
    let cfg = EncoderConfig {
        input_size: 32,
        embed_dim: 32,
        width: 8,
    };
    let contrastive = ContrastiveConfig {
        steps: 120,
        ..ContrastiveConfig::default()
    };
    let enc = pretrain_encoder(&images, cfg, &contrastive, &mut rng(2)).unwrap();

    let mut r = rng(3);
    let (mut same, mut diff) = (0.0, 0.0);
    for i in 0..held.len() {
        let a = &held[i].image;
        let b = &held[(i + 1) % held.len()].image;
        let va = enc.global_embedding(&contrastive_view(a, 32, &mut r)).unwrap();
        let va2 = enc.global_embedding(&contrastive_view(a, 32, &mut r)).unwrap();
        let vb = enc.global_embedding(&contrastive_view(b, 32, &mut r)).unwrap();
        same += cosine(&va, &va2);
        diff += cosine(&va, &vb);
    }
    let n = held.len() as f64;
    assert!(same / n > diff / n, "same-image {:.4} vs different {:.4}", same / n, diff / n);
}

#[test]
fn embedding_size_ignores_aspect_ratio() {
    let config = small_config(AblationPreset::ClassifierFree);
    let enc = encoder_for(&config, 4);
    let d = config.encoder.embed_dim;
    for (h, w) in [(16, 16), (9, 30), (40, 7)] {
        let img = random_image(h, w, (h * w) as u64);
        assert_eq!(enc.global_embedding(&img).unwrap().len(), d);
        let tokens = encode_reference(&enc, &img, EncoderMode::AllTokens).unwrap();
        assert_eq!(tokens.shape(), &[config.encoder.num_patches() + 1, d]);
    }
}

#[test]
fn adapter_depth_reaches_fifteen() {
    let cfg = AdapterConfig {
        depth: 15,
        embed_dim: 8,
        attention_dim: 8,
    };
    let adapter = init_adapter(cfg, &mut rng(5)).unwrap();
    assert_eq!(adapter.params.len(), 30);
    let raw = exedit_core::tensor::Tensor::full(&[5, 8], 0.5);
    let out = adapt(&adapter, &raw, EncoderMode::AllTokens).unwrap();
    assert_eq!(out.tokens.shape(), &[5, 8]);

    let mut config = small_config(AblationPreset::ClassifierFree);
    config.adapter_depth = 15;
    config.validate().unwrap();
}

#[test]
fn trained_model_responds_to_each_condition_token() {
    let config = small_config(AblationPreset::ClassifierFree);
    let mut state = state_for(config, 6);
    let batch = vec![sample_for(16, BBox::new(3, 3, 8, 8), 30), sample_for(16, BBox::new(5, 2, 6, 9), 31)];
    // a few steps so some undropped reference reaches the zero-initialized attention output
    for seed in 0..3 {
        train_step(&mut state, &batch, &mut rng(seed)).unwrap();
    }
    let s = &batch[0];
    let y_t = noise_image(16, 16, 7);
    let cond = exedit_core::tensor::Tensor::from_vec(
        &[5, 8],
        random_image(5, 8, 8).data().iter().take(40).copied().collect(),
    )
    .unwrap();
    let base = predict_noise(&state.params.denoiser, &y_t, &s.masked_source, &s.mask, 10, &cond).unwrap();
    for token in 0..5 {
        let mut c = cond.clone();
        c.data_mut()[token * 8] += 0.5;
        let out = predict_noise(&state.params.denoiser, &y_t, &s.masked_source, &s.mask, 10, &c).unwrap();
        assert!(max_abs_diff(base.data(), out.data()) > 0.0, "token {token} has no effect");
    }
}
