use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ssmamba_core::autodiff::gradcheck::analytic_grad;
use ssmamba_core::autodiff::Tape;
use ssmamba_core::lpr::{self, LprConfig, LprVariant};
use ssmamba_core::params::{Ctx, Mode, ParamStore};
use ssmamba_core::tensor::Tensor;

fn uniform(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| r.random_range(-1.0..1.0))
}

/// Random weights everywhere (including the zero-initialized expansion) and
/// non-trivial running statistics.
fn random_stores(cfg: &LprConfig, seed: u64) -> (ParamStore<f64>, ParamStore<f64>) {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParamStore::init(&lpr::param_specs("l", cfg).unwrap(), &mut r);
    for (_, t) in p.iter_mut() {
        *t = Tensor::from_fn(t.shape(), |_| r.random_range(-0.8..0.8));
    }
    let mut b = ParamStore::init(&lpr::buffer_specs("l", cfg), &mut r);
    for (name, t) in b.iter_mut() {
        let var = name.ends_with("running_var");
        *t = Tensor::from_fn(t.shape(), |_| if var { r.random_range(0.5..2.0) } else { r.random_range(-0.5..0.5) });
    }
    (p, b)
}

/// Eval-mode branch written out with plain loops.
fn branch_oracle(x: &Tensor<f64>, p: &ParamStore<f64>, b: &ParamStore<f64>, k: usize) -> Vec<f64> {
    let s = x.shape();
    let (hh, ww, c) = (s[1], s[2], s[3]);
    let h = c / 2;
    let g = |n: &str| p.get(&format!("l.{n}")).unwrap().data().to_vec();
    let bf = |n: &str| b.get(&format!("l.{n}")).unwrap().data().to_vec();
    let bn = |v: f64, ch: usize, which: &str| {
        let (gm, bt) = (g(&format!("{which}.weight"))[ch], g(&format!("{which}.bias"))[ch]);
        let (m, var) = (bf(&format!("{which}.running_mean"))[ch], bf(&format!("{which}.running_var"))[ch]);
        gm * (v - m) / (var + 1e-5).sqrt() + bt
    };
    let (reduce, dw, expand) = (g("reduce.weight"), g("dw.weight"), g("expand.weight"));
    let mut xl = vec![0.0; hh * ww * h];
    for px in 0..hh * ww {
        for o in 0..h {
            let v: f64 = (0..c).map(|i| x.data()[px * c + i] * reduce[i * h + o]).sum();
            xl[px * h + o] = bn(v, o, "bn1").max(0.0);
        }
    }
    let r = (k / 2) as isize;
    let mut mid = vec![0.0; hh * ww * h];
    for i in 0..hh as isize {
        for j in 0..ww as isize {
            for ch in 0..h {
                let mut acc = 0.0;
                for di in -r..=r {
                    for dj in -r..=r {
                        let (y, xx) = (i + di, j + dj);
                        if y < 0 || xx < 0 || y >= hh as isize || xx >= ww as isize {
                            continue;
                        }
                        let wt = dw[ch * k * k + (di + r) as usize * k + (dj + r) as usize];
                        acc += wt * xl[(y as usize * ww + xx as usize) * h + ch];
                    }
                }
                mid[(i as usize * ww + j as usize) * h + ch] = bn(acc, ch, "bn2").max(0.0);
            }
        }
    }
    let mut out = vec![0.0; hh * ww * c];
    for px in 0..hh * ww {
        for o in 0..c {
            out[px * c + o] = (0..h).map(|i| mid[px * h + i] * expand[i * c + o]).sum();
        }
    }
    out
}

#[test]
fn eval_branch_matches_loop_oracle() {
    for (c, k, seed) in [(8, 3, 1), (6, 5, 2), (4, 1, 3)] {
        let cfg = LprConfig { kernel: k, ..LprConfig::new(c) };
        let (p, b) = random_stores(&cfg, seed);
        let x = uniform(&[1, 5, 6, c], seed + 10);
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &p, b.clone(), Mode::Eval, false);
        let y = lpr::branch(&ctx, "l", &cfg, tape.constant(x.clone())).unwrap();
        let oracle = branch_oracle(&x, &p, &b, k);
        let err = y.value().data().iter().zip(&oracle).map(|(a, o)| (a - o).abs()).fold(0.0, f64::max);
        assert!(err < 1e-12, "C={c} k={k}: {err}");
        let full = lpr::forward(&ctx, "l", &cfg, tape.constant(x.clone())).unwrap();
        for ((f, o), xi) in full.value().data().iter().zip(&oracle).zip(x.data()) {
            assert!((f - (o + xi)).abs() < 1e-12);
        }
    }
}

#[test]
fn fresh_block_is_identity_in_both_modes() {
    let cfg = LprConfig::new(8);
    let mut r = ChaCha8Rng::seed_from_u64(4);
    let p = ParamStore::<f32>::init(&lpr::param_specs("l", &cfg).unwrap(), &mut r);
    let b = ParamStore::<f32>::init(&lpr::buffer_specs("l", &cfg), &mut r);
    let x = uniform(&[2, 7, 7, 8], 5).map(|v| v * 3.0).cast::<f32>();
    for mode in [Mode::Train, Mode::Eval] {
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &p, b.clone(), mode, false);
        let y = lpr::forward(&ctx, "l", &cfg, tape.constant(x.clone())).unwrap();
        assert_eq!(*y.value(), x, "{mode:?}");
    }
}

#[test]
fn fresh_block_passes_gradient_straight_through() {
    let cfg = LprConfig::new(8);
    let mut r = ChaCha8Rng::seed_from_u64(6);
    let p = ParamStore::<f64>::init(&lpr::param_specs("l", &cfg).unwrap(), &mut r);
    let b = ParamStore::<f64>::init(&lpr::buffer_specs("l", &cfg), &mut r);
    let x = uniform(&[2, 4, 5, 8], 7);
    for mode in [Mode::Train, Mode::Eval] {
        let g = analytic_grad(
            &|t, v| {
                let ctx = Ctx::new(t, &p, b.clone(), mode, false);
                Ok(lpr::forward(&ctx, "l", &cfg, v)?.sum())
            },
            &x,
        )
        .unwrap();
        assert!(g.data().iter().all(|&v| v == 1.0), "{mode:?}");
    }
}

#[test]
fn shape_preserved_at_stage_one_resolution() {
    let cfg = LprConfig::new(96);
    let (p, b) = random_stores(&cfg, 8);
    let (p, b) = (p.cast::<f32>(), b.cast::<f32>());
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &p, b, Mode::Eval, false);
    let x = tape.constant(uniform(&[1, 56, 56, 96], 9).cast::<f32>());
    assert_eq!(lpr::forward(&ctx, "l", &cfg, x).unwrap().shape(), vec![1, 56, 56, 96]);
}

#[test]
fn shifted_input_gives_shifted_output_away_from_borders() {
    let cfg = LprConfig::new(8);
    let (p, b) = random_stores(&cfg, 10);
    let (hh, ww, c) = (12, 13, 8);
    let img = uniform(&[1, hh, ww, c], 11);
    let (dy, dx) = (2, 3);
    let shifted = Tensor::from_fn(&[1, hh, ww, c], |i| {
        let (y, x, ch) = (i / (ww * c), i / c % ww, i % c);
        if y >= dy && x >= dx {
            img.data()[((y - dy) * ww + x - dx) * c + ch]
        } else {
            0.0
        }
    });
    let run = |t: &Tensor<f64>| {
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &p, b.clone(), Mode::Eval, false);
        let y = lpr::forward(&ctx, "l", &cfg, tape.constant(t.clone())).unwrap();
        let v = y.value().clone();
        v
    };
    let (a, s) = (run(&img), run(&shifted));
    let r = cfg.kernel / 2;
    for y in dy + r..hh - r {
        for x in dx + r..ww - r {
            for ch in 0..c {
                let got = s.data()[(y * ww + x) * c + ch];
                let want = a.data()[((y - dy) * ww + x - dx) * c + ch];
                assert!((got - want).abs() < 1e-12, "({y},{x},{ch})");
            }
        }
    }
}

#[test]
fn depthwise_stage_keeps_channels_separate() {
    let (h, k) = (4, 3);
    let w = uniform(&[h, k, k], 12);
    let x = uniform(&[1, 6, 6, h], 13);
    for ch in 0..h {
        let sel = Tensor::from_fn(&[1, 6, 6, h], |i| if i % h == ch { 1.0 } else { 0.0 });
        let g = analytic_grad(
            &|t, v| Ok(v.depthwise_conv2d(t.constant(w.clone()))?.mul(t.constant(sel.clone()))?.sum()),
            &x,
        )
        .unwrap();
        for (i, &v) in g.data().iter().enumerate() {
            assert_eq!(v != 0.0, i % h == ch, "output channel {ch}, input index {i}");
        }
    }
}

#[test]
fn parameter_counts_by_enumeration() {
    let cfg = LprConfig::new(8);
    assert_eq!(lpr::depthwise_param_count(&cfg), 3 * 3 * 4);
    // reduce + bn1 + depthwise + bn2 + expand
    assert_eq!(lpr::param_count(&cfg).unwrap(), 8 * 4 + 2 * 4 + 36 + 2 * 4 + 4 * 8);
    let ghost = LprConfig { variant: LprVariant::Ghost, ..cfg };
    // primary + bn1 + 3x3 depthwise + bn2
    assert_eq!(lpr::param_count(&ghost).unwrap(), 3 * 3 * 8 * 4 + 2 * 4 + 9 * 4 + 2 * 4);
    let big = LprConfig::new(96);
    assert_eq!(lpr::depthwise_param_count(&big), 9 * 48);
}

#[test]
fn odd_or_tiny_widths_are_rejected() {
    for c in [0, 1, 7] {
        assert!(lpr::param_specs("l", &LprConfig::new(c)).is_err(), "C={c}");
    }
    assert!(lpr::param_specs("l", &LprConfig { kernel: 4, ..LprConfig::new(8) }).is_err());
}

#[test]
fn ghost_output_leads_with_primary_features() {
    let cfg = LprConfig { variant: LprVariant::Ghost, ..LprConfig::new(8) };
    let (p, b) = random_stores(&cfg, 14);
    let x = uniform(&[1, 5, 5, 8], 15);
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &p, b.clone(), Mode::Eval, false);
    let y = lpr::forward(&ctx, "l", &cfg, tape.constant(x.clone())).unwrap();
    let y = y.value();
    assert_eq!(y.shape(), &[1, 5, 5, 8]);

    // Primary conv with zero padding, eval BN, ReLU.
    let wt = p.get("l.primary.weight").unwrap().data();
    let bn = |v: f64, o: usize| {
        let gm = p.get("l.bn1.weight").unwrap().data()[o];
        let bt = p.get("l.bn1.bias").unwrap().data()[o];
        let m = b.get("l.bn1.running_mean").unwrap().data()[o];
        let var = b.get("l.bn1.running_var").unwrap().data()[o];
        (gm * (v - m) / (var + 1e-5).sqrt() + bt).max(0.0)
    };
    for i in 0..5isize {
        for j in 0..5isize {
            for o in 0..4 {
                let mut acc = 0.0;
                for di in 0..3isize {
                    for dj in 0..3isize {
                        let (yy, xx) = (i + di - 1, j + dj - 1);
                        if !(0..5).contains(&yy) || !(0..5).contains(&xx) {
                            continue;
                        }
                        for ci in 0..8 {
                            let w = wt[((di as usize * 3 + dj as usize) * 8 + ci) * 4 + o];
                            acc += w * x.data()[(yy as usize * 5 + xx as usize) * 8 + ci];
                        }
                    }
                }
                let got = y.data()[(i as usize * 5 + j as usize) * 8 + o];
                assert!((got - bn(acc, o)).abs() < 1e-12);
            }
        }
    }
    assert!(y.data().iter().all(|&v| v >= 0.0));
}
