use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ssmamba_core::autodiff::Tape;
use ssmamba_core::dms::{self, DmsConfig};
use ssmamba_core::params::{Ctx, Mode, ParamStore};
use ssmamba_core::scan::{self, SsmParams};
use ssmamba_core::tensor::Tensor;

fn uniform(shape: &[usize], seed: u64) -> Tensor<f32> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| r.random_range(-1.0..1.0))
}

fn params(cfg: &DmsConfig, seed: u64) -> ParamStore<f32> {
    let mut p = ParamStore::init(&dms::param_specs("d", cfg).unwrap(), &mut ChaCha8Rng::seed_from_u64(seed));
    // Non-zero biases everywhere so that the composition test covers them.
    let mut r = ChaCha8Rng::seed_from_u64(seed + 1);
    for (name, t) in p.iter_mut() {
        if name.ends_with("bias") && !name.contains("dt_bias") {
            *t = Tensor::from_fn(t.shape(), |_| r.random_range(-0.3..0.3));
        }
    }
    p
}

#[test]
fn delta_kernel_and_identity_mixing_is_identity() {
    let (c, k) = (5, 3);
    let x = uniform(&[2, 7, c], 1);
    let tape = Tape::new();
    let dw = Tensor::from_fn(&[c, k], |i| if i % k == k / 2 { 1.0 } else { 0.0 });
    let pw = Tensor::from_fn(&[c, c], |i| if i / c == i % c { 1.0 } else { 0.0 });
    let y = dms::sep_conv1d(tape.constant(x.clone()), tape.constant(dw), tape.constant(pw)).unwrap();
    assert_eq!(*y.value(), x);
}

#[test]
fn sep_conv_impulse_response_spans_three_positions() {
    let (c, k, l, t) = (4, 3, 9, 4);
    let tape = Tape::new();
    let x = Tensor::from_fn(&[1, l, c], |i| if i / c == t { 1.0 } else { 0.0 });
    let dw = uniform(&[c, k], 2).map(|v| v + 2.0);
    let pw = uniform(&[c, c], 3).map(|v| v + 2.0);
    let y = dms::sep_conv1d(tape.constant(x), tape.constant(dw), tape.constant(pw)).unwrap();
    let y = y.value();
    for s in 0..l {
        let live = y.data()[s * c..(s + 1) * c].iter().any(|&v| v != 0.0);
        assert_eq!(live, (t - 1..=t + 1).contains(&s), "position {s}");
    }
}

#[test]
fn sep_conv_parameter_ratio_example() {
    assert_eq!(dms::sep_conv_param_count(32, 3), 96 + 1024);
    assert_eq!(dms::standard_conv_param_count(32, 3), 3072);
    // 1120 / 3072 == 1/3 + 1/32
    assert_eq!(1120 * 3 * 32, 3072 * (32 + 3));
}

#[test]
fn block_equals_hand_composed_pipeline() {
    let cfg = DmsConfig::new(16, 4);
    let p = params(&cfg, 4);
    let x = uniform(&[1, 8, 16], 5);
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &p, ParamStore::new(), Mode::Eval, false);
    let xv = tape.constant(x);
    let block = dms::forward(&ctx, "d", &cfg, xv).unwrap().value().clone();

    let w = |n: &str| ctx.param(&format!("d.{n}")).unwrap();
    let x1 = xv.linear(w("proj_ssm.weight"), Some(w("proj_ssm.bias"))).unwrap();
    let x1 = x1.depthwise_conv1d(w("sep.dw")).unwrap().linear(w("sep.pw"), None).unwrap().silu();
    let fwd = SsmParams::bind(&ctx, "d.ssm_fwd").unwrap();
    let bwd = SsmParams::bind(&ctx, "d.ssm_bwd").unwrap();
    let y_f = scan::scan_sequential(&fwd, x1).unwrap();
    let y_b = scan::scan_sequential(&bwd, x1.flip(1).unwrap()).unwrap().flip(1).unwrap();
    let x1 = y_f.add(y_b).unwrap();
    let x2 = xv.linear(w("proj_conv.weight"), Some(w("proj_conv.bias"))).unwrap();
    let x2 = x2.conv1d(w("conv.weight")).unwrap().add_channel(w("conv.bias")).unwrap().silu();
    let y = x1.concat(x2).unwrap().linear(w("out.weight"), Some(w("out.bias"))).unwrap();
    assert_eq!(*y.value(), block);
}

#[test]
fn zero_input_with_zero_biases_gives_zero() {
    let cfg = DmsConfig::new(8, 4);
    let mut p = params(&cfg, 6);
    for (name, t) in p.iter_mut() {
        if name.ends_with(".bias") && !name.contains("dt_bias") {
            *t = Tensor::zeros(t.shape());
        }
    }
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &p, ParamStore::new(), Mode::Eval, false);
    let y = dms::forward(&ctx, "d", &cfg, tape.constant(Tensor::zeros(&[2, 5, 8]))).unwrap();
    assert!(y.value().data().iter().all(|&v| v == 0.0));
}

#[test]
fn shape_is_preserved_at_stage_one_width() {
    let cfg = DmsConfig::new(96, 8);
    let p = params(&cfg, 7);
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &p, ParamStore::new(), Mode::Eval, false);
    let y = dms::forward(&ctx, "d", &cfg, tape.constant(uniform(&[1, 49, 96], 8))).unwrap();
    assert_eq!(y.shape(), vec![1, 49, 96]);
    assert_eq!(p.get("d.out.weight").unwrap().shape(), &[96, 96]);
}

#[test]
fn branches_do_not_see_each_others_weights() {
    let cfg = DmsConfig::new(8, 4);
    let p = params(&cfg, 9);
    let x = uniform(&[1, 6, 8], 10);
    let run = |p: &ParamStore<f32>| {
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, p, ParamStore::new(), Mode::Eval, false);
        let (a, b) = dms::branches(&ctx, "d", &cfg, tape.constant(x.clone())).unwrap();
        let out = (a.value().clone(), b.value().clone());
        out
    };
    let (ssm, conv) = run(&p);
    let zeroed = |pred: &dyn Fn(&str) -> bool| {
        let mut q = p.clone();
        for (name, t) in q.iter_mut() {
            if pred(name) {
                *t = Tensor::zeros(t.shape());
            }
        }
        q
    };
    let no_conv = zeroed(&|n| n.starts_with("d.proj_conv") || n.starts_with("d.conv"));
    let (ssm2, conv2) = run(&no_conv);
    assert_eq!(ssm2, ssm);
    assert!(conv2.data().iter().all(|&v| v == 0.0));
    let no_ssm = zeroed(&|n| n.starts_with("d.proj_ssm") || n.starts_with("d.sep"));
    let (ssm3, conv3) = run(&no_ssm);
    assert_eq!(conv3, conv);
    assert!(ssm3.data().iter().all(|&v| v == 0.0));
}

#[test]
fn parameter_count_by_enumeration() {
    // C = 4, N = 2, k = 3: branch width 2, step-size rank 1.
    let linears = 2 * (4 * 2 + 2);
    let sep = 2 * 3 + 2 * 2;
    let conv = 3 * 2 * 2 + 2;
    let per_direction = 2 * 1 + 1 * 2 + 2 + (2 * 2 + 2) + (2 * 2 + 2) + 2;
    let out = 4 * 4 + 4;
    assert_eq!(dms::param_count(&DmsConfig::new(4, 2)).unwrap(), linears + sep + conv + 2 * per_direction + out);
}

#[test]
fn doubling_width_quadruples_linear_weights() {
    let linear_weights = |c: usize| -> usize {
        dms::param_specs("", &DmsConfig::new(c, 8))
            .unwrap()
            .iter()
            .filter(|s| ["proj_ssm.weight", "proj_conv.weight", "out.weight"].contains(&s.name.as_str()))
            .map(|s| s.numel())
            .sum()
    };
    for c in [8, 16, 48] {
        assert_eq!(linear_weights(2 * c), 4 * linear_weights(c));
    }
    let total = |c| dms::param_count(&DmsConfig::new(c, 8)).unwrap() as f64;
    let ratio = total(192) / total(96);
    assert!(ratio > 3.5 && ratio < 4.5, "{ratio}");
}

#[test]
fn no_more_parameters_than_a_vanilla_mamba_block() {
    for c in [8, 16, 32, 64, 96, 128, 192, 384, 768] {
        for n in [2, 8, 16] {
            let ours = dms::param_count(&DmsConfig::new(c, n)).unwrap();
            let vanilla = dms::vanilla_mamba_param_count(c, n);
            assert!(ours <= vanilla, "C={c} N={n}: {ours} > {vanilla}");
        }
    }
}
