use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ssmamba_core::autodiff::Tape;
use ssmamba_core::backbone::{self, EncoderConfig, FULL_TARGET_PARAMS};
use ssmamba_core::dms;
use ssmamba_core::params::{Ctx, Mode, ParamStore};
use ssmamba_core::tensor::Tensor;

fn images(b: usize, h: usize, w: usize, seed: u64) -> Tensor<f32> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[b, h, w, 3], |_| r.random_range(-1.5..1.5))
}

/// Gives the zero-initialized head some weight so logits depend on the input.
fn with_random_head(mut p: ParamStore<f32>, seed: u64) -> ParamStore<f32> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    for (name, t) in p.iter_mut() {
        if name.starts_with("head.") {
            *t = Tensor::from_fn(t.shape(), |_| r.random_range(-0.5..0.5));
        }
    }
    p
}

fn logits(cfg: &EncoderConfig, p: &ParamStore<f32>, b: &ParamStore<f32>, x: &Tensor<f32>) -> Tensor<f32> {
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, p, b.clone(), Mode::Eval, false);
    let y = backbone::classify(&ctx, cfg, tape.constant(x.clone())).unwrap();
    let v = y.value().clone();
    v
}

#[test]
fn desk_feature_pyramid_shapes() {
    let cfg = EncoderConfig::desk();
    let (p, b) = backbone::init_classifier::<f32>(&cfg, 1).unwrap();
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &p, b, Mode::Eval, false);
    let f = backbone::encode(&ctx, &cfg, tape.constant(images(2, 32, 32, 2))).unwrap();
    let want = [[2, 8, 8, 16], [2, 4, 4, 32], [2, 2, 2, 64], [2, 1, 1, 128]];
    for (k, w) in want.iter().enumerate() {
        assert_eq!(f.maps[k].shape(), w.to_vec(), "stage {}", k + 1);
    }
}

#[test]
fn full_dims_at_224_reach_a_7x7x768_map() {
    let full = EncoderConfig::full();
    let res: Vec<_> = (0..4).map(|k| full.stage_resolution(k, 224, 224)).collect();
    assert_eq!(res, vec![(56, 56), (28, 28), (14, 14), (7, 7)]);
    // Same widths and strides with one block per stage, to keep the run short.
    let cfg = EncoderConfig { depths: [1, 1, 1, 1], ..full };
    let (p, b) = backbone::init_classifier::<f32>(&cfg, 3).unwrap();
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &p, b, Mode::Eval, false);
    let f = backbone::encode(&ctx, &cfg, tape.constant(images(1, 224, 224, 4))).unwrap();
    assert_eq!(f.maps[0].shape(), vec![1, 56, 56, 96]);
    assert_eq!(f.last().shape(), vec![1, 7, 7, 768]);
    assert!(f.last().value().all_finite());
}

#[test]
fn fresh_head_predicts_uniform() {
    let cfg = EncoderConfig::desk();
    let (p, b) = backbone::init_classifier::<f32>(&cfg, 5).unwrap();
    let y = logits(&cfg, &p, &b, &images(3, 32, 32, 6));
    assert_eq!(y.shape(), &[3, cfg.num_classes]);
    assert!(y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn eval_logits_follow_batch_permutation() {
    let cfg = EncoderConfig::desk();
    let (p, b) = backbone::init_classifier::<f32>(&cfg, 7).unwrap();
    let p = with_random_head(p, 8);
    let x = images(4, 32, 32, 9);
    let perm = [2, 0, 3, 1];
    let per = 32 * 32 * 3;
    let xp = Tensor::from_fn(&[4, 32, 32, 3], |i| x.data()[perm[i / per] * per + i % per]);
    let (y, yp) = (logits(&cfg, &p, &b, &x), logits(&cfg, &p, &b, &xp));
    let k = cfg.num_classes;
    for (row, &src) in perm.iter().enumerate() {
        for c in 0..k {
            let (a, e) = (yp.data()[row * k + c], y.data()[src * k + c]);
            assert!((a - e).abs() <= 1e-6, "row {row} class {c}: {a} vs {e}");
        }
    }
}

#[test]
fn initialization_is_a_function_of_the_seed() {
    let cfg = EncoderConfig::tiny();
    let (a, ab) = backbone::init_classifier::<f32>(&cfg, 11).unwrap();
    let (b, bb) = backbone::init_classifier::<f32>(&cfg, 11).unwrap();
    let (c, _) = backbone::init_classifier::<f32>(&cfg, 12).unwrap();
    assert_eq!(a, b);
    assert_eq!(ab, bb);
    assert_ne!(a, c);
}

#[test]
fn desk_parameter_count_by_enumeration() {
    let cfg = EncoderConfig::desk();
    let d = cfg.dims;
    let mut want = 4 * 4 * 3 * d[0] + d[0];
    for k in 0..4 {
        let (c, h) = (d[k], d[k] / 2);
        want += c * h + 2 * h + 9 * h + 2 * h + h * c;
        want += cfg.depths[k] * (dms::param_count(&cfg.dms(k)).unwrap() + 2 * c);
        if k < 3 {
            want += 2 * 2 * c * d[k + 1] + d[k + 1];
        }
    }
    want += d[3] * cfg.num_classes + cfg.num_classes;
    assert_eq!(backbone::param_count_total(&cfg).unwrap(), want);
    let breakdown: usize = backbone::param_breakdown(&cfg).unwrap().iter().map(|(_, n)| n).sum();
    assert_eq!(breakdown, want);
    let (p, _) = backbone::init_classifier::<f32>(&cfg, 0).unwrap();
    assert_eq!(p.iter().map(|(_, t)| t.data().len()).sum::<usize>(), want);
}

#[test]
fn full_preset_lands_near_the_target_size() {
    let total = backbone::param_count_total(&EncoderConfig::full()).unwrap();
    let rel = total.abs_diff(FULL_TARGET_PARAMS) as f64 / FULL_TARGET_PARAMS as f64;
    assert!(rel <= 0.01, "{total} is {:.2}% away", rel * 100.0);
    assert_eq!(backbone::search_full_depths().unwrap(), EncoderConfig::full().depths);
}

#[test]
fn degenerate_configs_and_inputs_are_rejected() {
    let cfg = EncoderConfig::desk();
    assert!(EncoderConfig { num_classes: 0, ..cfg }.validate().is_err());
    assert!(EncoderConfig { dims: [15, 32, 64, 128], ..cfg }.validate().is_err());
    assert!(EncoderConfig { patch_size: 0, ..cfg }.validate().is_err());

    let (p, b) = backbone::init_classifier::<f32>(&cfg, 13).unwrap();
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &p, b, Mode::Eval, false);
    // 36 is divisible by the patch size but not by the total stride of 32.
    assert!(backbone::classify(&ctx, &cfg, tape.constant(images(1, 36, 36, 14))).is_err());
    let gray = Tensor::<f32>::zeros(&[1, 32, 32, 1]);
    assert!(backbone::classify(&ctx, &cfg, tape.constant(gray)).is_err());
}
