//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use common::*;
use exedit_core::checkpoint::{load_checkpoint, save_checkpoint};
use exedit_core::condition::{pretrain_encoder, ContrastiveConfig, EncoderConfig};
use exedit_core::data::{
    distort_mask, distort_mask_with, generate_toy_dataset, mask_out, AnnotatedImage, BBox, EditMask, OffsetRange,
    MASK_FILL,
};
use exedit_core::denoiser::{init_denoiser, predict_noise, DenoiserConfig};
use exedit_core::diffusion::{forward_noise_batch, ScheduleConfig};
use exedit_core::image::Image;
use exedit_core::metrics::{fid, run_cases, score_edits, seeded_cases, FeatureSet};
use exedit_core::sampler::{edit_image, guided_noise_prediction, EditModel, GuidanceConfig};
use exedit_core::tensor::Tensor;
use exedit_core::trainer::{
    compute_gradients, draw_sample, train_steps, train_with_encoder, AblationPreset, ConditionDropper, SampleDraw,
    TrainConfig, TrainState,
};
use rand::Rng;
use rand_distr::StandardNormal;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn guidance_algebra() -> Outcome {
    let config = small_config(AblationPreset::ClassifierFree);
    let mut state = state_for(config, 1);
    randomize(&mut state.ema, 2, 0.3);
    let model = EditModel::from_state(&state);
    let y = noise_image(16, 16, 3);
    let source = random_image(16, 16, 4);
    let mask = EditMask::from_box(&BBox::new(3, 4, 8, 6), 16, 16);
    let masked = mask_out(&source, &mask, MASK_FILL).unwrap();
    let cond = model.condition(&random_image(16, 16, 5)).unwrap();
    let null = model.null_condition().unwrap();
    let t = 17;
    let eps_c = predict_noise(&model.denoiser, &y, &masked, &mask, t, &cond.tokens).unwrap();
    let eps_v = predict_noise(&model.denoiser, &y, &masked, &mask, t, &null.tokens).unwrap();
    let guided = |s: f64| guided_noise_prediction(&model.denoiser, &y, &masked, &mask, t, &cond, &null, s).unwrap();
    let g0 = guided(0.0);
    let g1 = guided(1.0);
    let collapse = g1 == eps_c && g0 == eps_v && eps_c != eps_v;
    let mut r = rng(6);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let s: f64 = r.random_range(0.0..10.0);
        let gs = guided(s);
        let affine: Vec<f64> = g0.data().iter().zip(g1.data()).map(|(a, b)| a + s * (b - a)).collect();
        worst = worst.max(max_abs_diff(gs.data(), &affine));
    }
    check(
        collapse && worst <= 1e-6,
        format!("s=1 and s=0 collapse exactly: {collapse}; max affinity error over 20 random s: {worst:.2e} (tol 1e-6)"),
    )
}

fn zero_init_gate() -> Outcome {
    let config = DenoiserConfig::default();
    let params = init_denoiser(config, &mut rng(11)).unwrap();
    let y = noise_image(32, 32, 12);
    let cond = Tensor::from_vec(&[1, 64], (0..64).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
    let a = predict_noise(&params, &y, &random_image(32, 32, 13), &EditMask::empty(32, 32), 50, &cond).unwrap();
    let mask = EditMask::from_box(&BBox::new(5, 7, 12, 10), 32, 32);
    let b = predict_noise(&params, &y, &random_image(32, 32, 14), &mask, 50, &cond).unwrap();
    let same = a == b;
    check(same, format!("fresh denoiser output identical across masked-source/mask inputs: {same}"))
}

/// Central differences on every scalar of the denoiser, adapter and null
/// vector, in 64-bit arithmetic, for a batch with one dropped and one kept
/// condition.
fn gradient_correctness() -> Outcome {
    let config = minimal_config(AblationPreset::ClassifierFree, 8);
    let mut state = state_for(config, 21);
    randomize(&mut state.params, 22, 0.5);
    let batch = vec![
        sample_for(8, BBox::new(1, 2, 4, 4), 23),
        sample_for(8, BBox::new(3, 0, 5, 4), 24),
    ];
    let mut r = rng(25);
    let draws: Vec<SampleDraw> = [true, false]
        .iter()
        .map(|&d| {
            let mut s = draw_sample(&ConditionDropper::new(0.0).unwrap(), &state.schedule, (3, 8, 8), &mut r);
            s.drop_condition = d;
            s
        })
        .collect();
    let loss_at = |p: &exedit_core::trainer::ModelParams| {
        compute_gradients(p, &state.encoder, &state.schedule, state.mode(), &batch, &draws)
            .unwrap()
            .loss
    };
    let analytic = compute_gradients(&state.params, &state.encoder, &state.schedule, state.mode(), &batch, &draws)
        .unwrap()
        .grads;
    // 1e-5 is rounding-limited on the ~1e-7 gradients; 1e-4 keeps truncation far below the tolerance
    let h = 1e-4;
    let mut params = state.params.clone();
    let mut worst = 0.0f64;
    let mut count = 0usize;
    let mut v_grad = 0.0f64;
    let n_tensors = analytic.len();
    for (ti, grad) in analytic.iter().enumerate() {
        for k in 0..grad.len() {
            let orig = params.tensors()[ti].data()[k];
            params.tensors_mut()[ti].data_mut()[k] = orig + h;
            let up = loss_at(&params);
            params.tensors_mut()[ti].data_mut()[k] = orig - h;
            let down = loss_at(&params);
            params.tensors_mut()[ti].data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = grad.data()[k];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(rel);
            count += 1;
            if ti == n_tensors - 1 {
                v_grad = v_grad.max(a.abs());
            }
        }
    }
    check(
        worst < 1e-4 && v_grad > 0.0,
        format!("{count} parameters checked, max relative error {worst:.2e} (tol 1e-4); null vector gradient max |g| {v_grad:.2e}"),
    )
}

fn mask_suite() -> Outcome {
    let mut r = rng(31);
    let mut failures = Vec::new();
    let mut case = 0;
    while case < 1000 {
        let h = r.random_range(16..=64usize);
        let w = r.random_range(16..=64usize);
        let bw = r.random_range(4..=w / 2 + 2).min(w);
        let bh = r.random_range(4..=h / 2 + 2).min(h);
        if 2 * bw * bh > h * w {
            continue;
        }
        let bbox = BBox::new(r.random_range(0..=w - bw), r.random_range(0..=h - bh), bw, bh);
        let seed: u64 = r.random();
        case += 1;
        let m = distort_mask(&bbox, (h, w), &mut rng(seed)).unwrap();
        let binary = m.bits().iter().all(|&b| b <= 1);
        let connected = m.is_connected() && !m.is_empty();
        let mut in_band = true;
        let mut core_covered = true;
        for y in 0..h {
            for x in 0..w {
                let (yi, xi) = (y as i64, x as i64);
                let (x0, y0) = (bbox.x as i64, bbox.y as i64);
                let (x1, y1) = (x0 + bbox.w as i64, y0 + bbox.h as i64);
                let outer = xi >= x0 - 6 && xi < x1 + 6 && yi >= y0 - 6 && yi < y1 + 6;
                let inner = xi >= x0 + 6 && xi < x1 - 6 && yi >= y0 + 6 && yi < y1 - 6;
                if m.get(y, x) && !outer {
                    in_band = false;
                }
                if inner && !m.get(y, x) {
                    core_covered = false;
                }
            }
        }
        let exact = distort_mask_with(&bbox, (h, w), OffsetRange::NONE, &mut rng(seed)).unwrap()
            == EditMask::from_box(&bbox, h, w);
        if !(binary && connected && in_band && core_covered && exact) {
            failures.push(format!(
                "case {case} {bbox:?} in {h}x{w}: binary {binary} connected {connected} band {in_band} core {core_covered} exact {exact}"
            ));
        }
    }
    check(
        failures.is_empty(),
        format!("1000 random boxes: {} failures {:?}", failures.len(), failures.first()),
    )
}

fn drop_rate() -> Outcome {
    let config = TrainConfig::default();
    let dropper = ConditionDropper::new(config.cond_drop_prob).unwrap();
    let schedule = config.schedule.build().unwrap();
    let mut r = rng(41);
    let drops = (0..10_000)
        .filter(|_| draw_sample(&dropper, &schedule, (1, 1, 1), &mut r).drop_condition)
        .count();
    let freq = drops as f64 / 10_000.0;
    check(
        (0.18..=0.22).contains(&freq),
        format!("replacement frequency {freq:.4} over 10^4 draws (window [0.18, 0.22])"),
    )
}

fn gaussian_set(n: usize, mean: &[f64], chol: &[&[f64]], seed: u64) -> FeatureSet {
    let d = mean.len();
    let mut r = rng(seed);
    let rows = (0..n)
        .map(|_| {
            let z: Vec<f64> = (0..d).map(|_| r.sample(StandardNormal)).collect();
            (0..d)
                .map(|i| mean[i] + (0..=i).map(|j| chol[i][j] * z[j]).sum::<f64>())
                .collect()
        })
        .collect();
    FeatureSet::new(rows, "gaussian").unwrap()
}

/// Large enough that sampling noise in the mean-gap term stays near 0.3%.
const FID_SAMPLES: usize = 100_000;

fn fid_oracle() -> Outcome {
    // diagonal case: sum (sqrt a_i - sqrt b_i)^2 plus the mean gap
    let va: [f64; 4] = [1.0, 4.0, 0.25, 2.0];
    let vb: [f64; 4] = [3.0, 1.0, 1.0, 0.5];
    let ma: [f64; 4] = [0.0, 1.0, -1.0, 0.5];
    let mb: [f64; 4] = [1.5, 0.0, 0.0, -0.5];
    let la: Vec<Vec<f64>> = (0..4).map(|i| (0..4).map(|j| if i == j { va[i].sqrt() } else { 0.0 }).collect()).collect();
    let lb: Vec<Vec<f64>> = (0..4).map(|i| (0..4).map(|j| if i == j { vb[i].sqrt() } else { 0.0 }).collect()).collect();
    let la: Vec<&[f64]> = la.iter().map(Vec::as_slice).collect();
    let lb: Vec<&[f64]> = lb.iter().map(Vec::as_slice).collect();
    let want_diag: f64 = (0..4)
        .map(|i| (ma[i] - mb[i]).powi(2) + (va[i].sqrt() - vb[i].sqrt()).powi(2))
        .sum();
    let got_diag = fid(&gaussian_set(FID_SAMPLES, &ma, &la, 51), &gaussian_set(FID_SAMPLES, &mb, &lb, 52)).unwrap();

    // full 2-D case: tr sqrt(Sa Sb) = sqrt(tr(Sa Sb) + 2 sqrt(det Sa det Sb))
    let ca: [&[f64]; 2] = [&[1.0, 0.0], &[0.8, 0.6]];
    let cb: [&[f64]; 2] = [&[2.0, 0.0], &[-1.0, 1.5]];
    let cov = |l: &[&[f64]; 2]| {
        let m = |i: usize, j: usize| (0..2).map(|k| l[i][k] * l[j][k]).sum::<f64>();
        [[m(0, 0), m(0, 1)], [m(1, 0), m(1, 1)]]
    };
    let (sa, sb) = (cov(&ca), cov(&cb));
    let tr_prod = (0..2).map(|i| (0..2).map(|k| sa[i][k] * sb[k][i]).sum::<f64>()).sum::<f64>();
    let det = |s: [[f64; 2]; 2]| s[0][0] * s[1][1] - s[0][1] * s[1][0];
    let cross = (tr_prod + 2.0 * (det(sa) * det(sb)).sqrt()).sqrt();
    let (m2a, m2b): ([f64; 2], [f64; 2]) = ([0.5, -0.5], [-1.0, 1.0]);
    let want_full = (0..2).map(|i| (m2a[i] - m2b[i]).powi(2)).sum::<f64>() + sa[0][0] + sa[1][1] + sb[0][0] + sb[1][1]
        - 2.0 * cross;
    let got_full = fid(&gaussian_set(FID_SAMPLES, &m2a, &ca, 53), &gaussian_set(FID_SAMPLES, &m2b, &cb, 54)).unwrap();

    let eye: Vec<Vec<f64>> = (0..8).map(|i| (0..8).map(|j| if i == j { 1.0 } else { 0.3 * (j < i) as u8 as f64 }).collect()).collect();
    let eye: Vec<&[f64]> = eye.iter().map(Vec::as_slice).collect();
    let x = gaussian_set(500, &[0.0; 8], &eye, 55);
    let y = gaussian_set(300, &[0.2; 8], &eye, 56);
    let self_fid = fid(&x, &x).unwrap();
    let asym = (fid(&x, &y).unwrap() - fid(&y, &x).unwrap()).abs();

    let rel_d = (got_diag - want_diag).abs() / want_diag;
    let rel_f = (got_full - want_full).abs() / want_full;
    check(
        rel_d < 0.01 && rel_f < 0.01 && self_fid < 1e-6 && asym < 1e-6,
        format!(
            "diagonal {got_diag:.4} vs {want_diag:.4} (rel {rel_d:.2e}); full {got_full:.4} vs {want_full:.4} (rel {rel_f:.2e}); FID(X,X) {self_fid:.1e}; asymmetry {asym:.1e}"
        ),
    )
}

fn forward_moments() -> Outcome {
    let schedule = ScheduleConfig::default().build().unwrap();
    let (n, side) = (10_000usize, 16usize);
    let per = 3 * side * side;
    // checkerboard of +1/-1 so the signal coefficient is E[y_t * y0]
    let y0_one: Vec<f64> = (0..per).map(|i| if (i + i / side) % 2 == 0 { 1.0 } else { -1.0 }).collect();
    let mut worst = 0.0f64;
    let mut lines = Vec::new();
    for t in [0, schedule.steps() / 2, schedule.steps() - 1] {
        let mut r = rng(61 + t as u64);
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for _ in 0..10 {
            let m = n / 10;
            let y0 = Tensor::from_vec(&[m, 3, side, side], y0_one.iter().cycle().take(m * per).copied().collect()).unwrap();
            let eps = Tensor::from_vec(&[m, 3, side, side], (0..m * per).map(|_| r.sample(StandardNormal)).collect()).unwrap();
            let yt = forward_noise_batch(&y0, &vec![t; m], &eps, &schedule).unwrap();
            for (a, b) in yt.data().iter().zip(y0.data()) {
                sum += a * b;
            }
            let s = schedule.signal(t);
            for (a, b) in yt.data().iter().zip(y0.data()) {
                sum_sq += (a - s * b).powi(2);
            }
        }
        let count = (n * per) as f64;
        let signal = sum / count;
        let var = sum_sq / count;
        let es = (signal - schedule.signal(t)).abs() / schedule.signal(t);
        let ev = (var - schedule.noise(t).powi(2)).abs() / schedule.noise(t).powi(2);
        worst = worst.max(es).max(ev);
        lines.push(format!("t={t}: signal {signal:.4}/{:.4} var {var:.4}/{:.4}", schedule.signal(t), schedule.noise(t).powi(2)));
    }
    check(worst < 0.05, format!("{} (max rel err {worst:.2e}, tol 5%)", lines.join("; ")))
}

fn background_preservation() -> Outcome {
    let config = small_config(AblationPreset::ClassifierFree);
    let mut state = state_for(config, 71);
    randomize(&mut state.ema, 72, 0.3);
    let model = EditModel::from_state(&state);
    let data = generate_toy_dataset(40, (16, 16), &mut rng(73));
    let cases = seeded_cases(&data, 100, 16, 74).unwrap();
    let mut changed = 0usize;
    let mut bad = 0usize;
    for (i, c) in cases.iter().enumerate() {
        let g = GuidanceConfig {
            scale: (i % 7) as f64,
            num_steps: 4,
            eta: if i % 2 == 0 { 0.0 } else { 0.5 },
            seed: i as u64,
        };
        let out = edit_image(&model, &c.source, &c.mask, &c.reference, &g).unwrap();
        for y in 0..16 {
            for x in 0..16 {
                let same = out.pixel(y, x) == c.source.pixel(y, x);
                if !c.mask.get(y, x) && !same {
                    bad += 1;
                }
                if c.mask.get(y, x) && !same {
                    changed += 1;
                }
            }
        }
    }
    check(
        bad == 0 && changed > 0,
        format!("100 edits: {bad} unmasked pixels differ from the source; {changed} masked pixels changed"),
    )
}

fn checkpoint_round_trip() -> Outcome {
    let config = small_config(AblationPreset::ClassifierFree);
    let mut state = state_for(config, 81);
    let data = generate_toy_dataset(8, (16, 16), &mut rng(82));
    train_steps(&mut state, &data, 0, 3, |_, _| {}).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    save_checkpoint(&state, &path).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    let tensors_equal = loaded == state;
    let case = &seeded_cases(&data, 1, 16, 83).unwrap()[0];
    let g = GuidanceConfig {
        num_steps: 8,
        seed: 84,
        ..Default::default()
    };
    let before = edit_image(&EditModel::from_state(&state), &case.source, &case.mask, &case.reference, &g).unwrap();
    let after = edit_image(&EditModel::from_state(&loaded), &case.source, &case.mask, &case.reference, &g).unwrap();
    let bytes_equal = before.encode_png() == after.encode_png() && before == after;
    check(
        tensors_equal && bytes_equal,
        format!("all tensors bitwise equal after reload: {tensors_equal}; sampled output identical: {bytes_equal}"),
    )
}

const E2E_TRAIN: usize = 2000;
const E2E_HELD: usize = 200;
const E2E_CASES: usize = 64;
const E2E_PRIOR_STEPS: usize = 100;
const E2E_STEPS: usize = 2400;
const E2E_COMPARE_STEPS: usize = 300;
const E2E_SAMPLER_STEPS: usize = 10;

fn e2e_config(preset: AblationPreset, encoder: EncoderConfig) -> TrainConfig {
    let mut c = TrainConfig::for_preset(preset);
    c.denoiser.base_width = 16;
    c.batch_size = 8;
    c.learning_rate = 1e-3;
    c.prior_steps = E2E_PRIOR_STEPS;
    c.steps = E2E_STEPS;
    c.encoder = encoder;
    c.seed = 7;
    c
}

fn mean_similarity(state: &TrainState, cases: &[exedit_core::metrics::EditCase], pool: &[Image], scale: f64) -> (f64, f64) {
    let model = EditModel::from_state(state);
    let g = GuidanceConfig {
        scale,
        num_steps: E2E_SAMPLER_STEPS,
        eta: 0.0,
        seed: 1000,
    };
    let (edits, failures) = run_cases(&model, cases, &g);
    let report = score_edits(&model.encoder, &edits, cases, pool, failures).unwrap();
    (report.fid, report.similarity_score)
}

fn end_to_end_trend() -> Outcome {
    let start = Instant::now();
    let all = generate_toy_dataset(E2E_TRAIN + E2E_HELD, (32, 32), &mut rng(91));
    let (train, held): (&[AnnotatedImage], &[AnnotatedImage]) = all.split_at(E2E_TRAIN);
    let images: Vec<Image> = train.iter().map(|a| a.image.clone()).collect();
    let contrastive = ContrastiveConfig {
        steps: 150,
        ..Default::default()
    };
    let encoder = pretrain_encoder(&images, EncoderConfig::default(), &contrastive, &mut rng(92)).unwrap();
    let cases = seeded_cases(held, E2E_CASES, 32, 93).unwrap();
    let pool: Vec<Image> = held.iter().map(|a| a.image.clone()).collect();

    let cf_config = e2e_config(AblationPreset::ClassifierFree, encoder.config);
    let untrained = TrainState::new(cf_config.clone(), encoder.clone()).unwrap();
    let trained = train_with_encoder(cf_config, encoder.clone(), train, |_, _| {}).unwrap();
    let (fid_untrained, sim_untrained) = mean_similarity(&untrained, &cases, &pool, 5.0);
    let (fid_trained, sim5) = mean_similarity(&trained, &cases, &pool, 5.0);
    let (_, sim0) = mean_similarity(&trained, &cases, &pool, 0.0);

    let mut compare = Vec::new();
    for preset in [AblationPreset::Baseline, AblationPreset::Bottleneck] {
        let mut c = e2e_config(preset, encoder.config);
        c.steps = E2E_COMPARE_STEPS;
        c.prior_steps = E2E_PRIOR_STEPS.min(c.prior_steps);
        let s = train_with_encoder(c, encoder.clone(), train, |_, _| {}).unwrap();
        let (_, sim) = mean_similarity(&s, &cases, &pool, preset.default_guidance_scale());
        compare.push(format!("{preset} similarity {sim:.4}"));
    }
    let a = fid_trained < fid_untrained;
    let b = sim5 > sim0;
    check(
        a && b,
        format!(
            "(a) FID trained {fid_trained:.3} < untrained {fid_untrained:.3}: {a}; (b) similarity s=5 {sim5:.4} > s=0 {sim0:.4}: {b}; (c) recorded: {}; untrained similarity s=5 {sim_untrained:.4} (recorded); {:.0}s",
            compare.join(", "),
            start.elapsed().as_secs_f64()
        ),
    )
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 10] = [
        ("guidance algebra", guidance_algebra),
        ("zero-init conditioning gate", zero_init_gate),
        ("gradient correctness", gradient_correctness),
        ("mask distortion suite", mask_suite),
        ("condition-drop rate", drop_rate),
        ("FID oracle", fid_oracle),
        ("forward-process statistics", forward_moments),
        ("background preservation", background_preservation),
        ("checkpoint round-trip", checkpoint_round_trip),
        ("end-to-end desk-scale trend", end_to_end_trend),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, f) in criteria {
        if !filter.is_empty() && !filter.iter().any(|p| name.contains(p.as_str())) {
            continue;
        }
        let t = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(d) => println!("PASS  {name} ({secs:.1}s): {d}"),
            Err(d) => {
                failed += 1;
                println!("FAIL  {name} ({secs:.1}s): {d}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
