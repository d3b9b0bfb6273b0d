use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ssmamba_core::autodiff::Tape;
use ssmamba_core::mil::{self, Bag, MilConfig, Resampling, TaskSpec, Target};
use ssmamba_core::params::{Ctx, Mode, ParamStore};
use ssmamba_core::tensor::Tensor;
use ssmamba_core::train::{Phase, TrainConfig, TrainState};

fn config() -> MilConfig {
    MilConfig {
        model_dim: 16,
        depth: 1,
        state_dim: 4,
        ..MilConfig::new(6, vec![TaskSpec::classification("grade", 3), TaskSpec::regression("os")])
    }
}

fn bag(id: &str, n: usize, shift: f32, seed: u64) -> Bag {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let emb = Tensor::from_fn(&[n, 6], |_| shift + r.random_range(-0.5f32..0.5));
    let mut coords: Vec<(u32, u32)> = (0..n as u32).map(|i| (i / 5, i % 5)).collect();
    coords.shuffle(&mut r);
    Bag::new(id, emb, coords).unwrap()
}

#[test]
fn single_tile_bag_predicts_every_task() {
    let cfg = config();
    let p = mil::init::<f32>(&cfg, 1).unwrap();
    let out = mil::predict(&cfg, &p, &bag("one", 1, 0.0, 2)).unwrap();
    assert_eq!(out["grade"].len(), 3);
    assert_eq!(out["os"].len(), 1);
    assert!(out.values().flatten().all(|v| v.is_finite()));
}

#[test]
fn malformed_bags_are_rejected() {
    let cfg = config();
    let p = mil::init::<f32>(&cfg, 3).unwrap();
    let wide = Bag::new("w", Tensor::zeros(&[2, 7]), vec![(0, 0), (0, 1)]).unwrap();
    assert!(mil::predict(&cfg, &p, &wide).is_err());
    assert!(Bag::new("d", Tensor::zeros(&[2, 6]), vec![(1, 1), (1, 1)]).is_err());
    assert!(Bag::new("e", Tensor::zeros(&[0, 6]), vec![]).is_err());
    let unknown = bag("u", 3, 0.0, 4).with_label("stage", Target::Class(1));
    assert!(mil::predict(&cfg, &p, &unknown).is_err());
    let out_of_range = bag("o", 3, 0.0, 4).with_label("grade", Target::Class(3));
    assert!(mil::predict(&cfg, &p, &out_of_range).is_err());
}

#[test]
fn tasks_without_labels_get_exactly_zero_gradient() {
    let cfg = config();
    let p = mil::init::<f64>(&cfg, 5).unwrap();
    let bags = [
        bag("a", 7, 0.2, 6).with_label("grade", Target::Class(2)),
        bag("b", 4, -0.1, 7).with_label("grade", Target::Class(0)),
    ];
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &p, ParamStore::new(), Mode::Train, true);
    let mut total = None;
    for b in &bags {
        let out = mil::mtl_forward(&ctx, &cfg, mil::aggregate(&ctx, &cfg, b).unwrap()).unwrap();
        let l = mil::joint_loss(&cfg, &out, &b.labels).unwrap().unwrap();
        total = Some(match total {
            None => l,
            Some(acc) => l.add(acc).unwrap(),
        });
    }
    let grads = ctx.param_grads(&tape.backward(total.unwrap()).unwrap());
    let head = |t: &str, part: &str| grads.get(&format!("{}.{part}", mil::head_name(t))).unwrap().clone();
    for part in ["weight", "bias"] {
        assert!(head("os", part).data().iter().all(|&v| v == 0.0), "os.{part}");
        assert!(head("grade", part).data().iter().any(|&v| v != 0.0), "grade.{part}");
    }
}

#[test]
fn unlabelled_minibatch_is_skipped() {
    let cfg = config();
    let mut state = TrainState::new(mil::init(&cfg, 8).unwrap(), ParamStore::new());
    let before = state.clone();
    let b = bag("n", 5, 0.0, 9);
    let tc = TrainConfig::desk(Phase::Mil);
    assert_eq!(mil::mil_step(&cfg, &tc, 1e-3, &mut state, &[&b]).unwrap(), None);
    assert_eq!(state, before);
}

#[test]
fn round_samples_are_sorted_canonical_subsequences() {
    let b = bag("s", 20, 0.0, 10);
    let canon = b.canonical_order();
    let rs = Resampling { n_rounds: 15, tiles_per_round: Some(8), replacement: false };
    for r in 0..15 {
        let idx = mil::round_sample(&b, &rs, 11, r).unwrap();
        assert_eq!(idx, mil::round_sample(&b, &rs, 11, r).unwrap());
        assert_eq!(idx.len(), 8);
        let pos: Vec<usize> = idx.iter().map(|i| canon.iter().position(|c| c == i).unwrap()).collect();
        assert!(pos.windows(2).all(|w| w[0] < w[1]), "round {r}");
    }
    assert_ne!(mil::round_sample(&b, &rs, 11, 0).unwrap(), mil::round_sample(&b, &rs, 11, 1).unwrap());
    let too_many = Resampling { tiles_per_round: Some(25), ..rs };
    assert!(mil::round_sample(&b, &too_many, 11, 0).is_err());
    let with = Resampling { replacement: true, ..too_many };
    assert_eq!(mil::round_sample(&b, &with, 11, 0).unwrap().len(), 25);
    assert!(mil::round_sample(&b, &Resampling { tiles_per_round: Some(0), ..rs }, 11, 0).is_err());
}

#[test]
fn resampled_prediction_is_the_mean_of_rounds() {
    let cfg = config();
    let p = mil::init::<f64>(&cfg, 12).unwrap();
    let b = bag("m", 12, 0.1, 13);
    let rs = Resampling { n_rounds: 4, tiles_per_round: Some(5), replacement: false };
    let got = mil::predict_with_resampling(&cfg, &p, &b, &rs, 14).unwrap();
    let mut want = vec![0.0; 3];
    for r in 0..4 {
        let idx = mil::round_sample(&b, &rs, 14, r).unwrap();
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &p, ParamStore::new(), Mode::Eval, false);
        let x = b.gather(&idx).unwrap().cast::<f64>().reshaped(&[1, 5, 6]).unwrap();
        let slide = mil::aggregate_tokens(&ctx, &cfg, tape.constant(x)).unwrap();
        let out = mil::mtl_forward(&ctx, &cfg, slide).unwrap();
        for (w, v) in want.iter_mut().zip(out["grade"].value().data()) {
            *w += v / 4.0;
        }
    }
    for (g, w) in got["grade"].iter().zip(&want) {
        assert!((g - w).abs() < 1e-12);
    }
    assert_eq!(got, mil::predict_with_resampling(&cfg, &p, &b, &rs, 14).unwrap());
    assert_ne!(got, mil::predict_with_resampling(&cfg, &p, &b, &rs, 15).unwrap());
    let single = Resampling { n_rounds: 1, tiles_per_round: None, replacement: false };
    assert_eq!(mil::predict_with_resampling(&cfg, &p, &b, &single, 99).unwrap(), mil::predict(&cfg, &p, &b).unwrap());
    assert!(mil::predict_with_resampling(&cfg, &p, &b, &Resampling { n_rounds: 0, ..rs }, 0).is_err());
}

#[test]
fn training_separates_shifted_bags() {
    let cfg = MilConfig { tasks: vec![TaskSpec::classification("label", 2)], ..config() };
    let bags: Vec<Bag> = (0..8)
        .map(|i| {
            let c = i % 2;
            bag(&format!("b{i}"), 4 + i, if c == 1 { 0.6 } else { -0.6 }, 20 + i as u64).with_label("label", Target::Class(c))
        })
        .collect();
    let mut state = TrainState::new(mil::init(&cfg, 16).unwrap(), ParamStore::new());
    let mut losses = Vec::new();
    let tc = TrainConfig { epochs: 20, base_lr: 1e-2, ..TrainConfig::desk(Phase::Mil) };
    mil::run_mil(&cfg, &tc, 17, &bags, &mut state, &mut |rec| {
        losses.push(rec.loss);
        Ok(())
    })
    .unwrap();
    assert_eq!(losses.len(), 20);
    assert!(losses.last().unwrap() < &(0.5 * losses[0]), "{losses:?}");
    for b in &bags {
        let out = mil::predict(&cfg, &state.params, b).unwrap();
        let Target::Class(c) = b.labels["label"] else { unreachable!() };
        let pred = if out["label"][1] > out["label"][0] { 1 } else { 0 };
        assert_eq!(pred, c, "{}", b.slide_id);
    }
    let mixup = TrainConfig { mixup_alpha: Some(0.2), ..tc };
    assert!(mil::run_mil(&cfg, &mixup, 0, &bags, &mut state, &mut |_| Ok(())).is_err());
}
