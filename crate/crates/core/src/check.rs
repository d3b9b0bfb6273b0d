//! Oracle and invariant suites, runnable from the command line.
//!
//! Each suite returns a [`SuiteReport`] of named checks; a suite passes
//! when all of its checks do. Everything here is seeded and cheap enough
//! to run on a laptop in well under the suites' time budgets.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::gradcheck::finite_diff_check;
use crate::autodiff::{NormStats, Tape, Unary, Var};
use crate::backbone::{self, EncoderConfig};
use crate::dms::{self, DmsConfig};
use crate::error::Result;
use crate::imageops;
use crate::lpr::{self, LprConfig};
use crate::mamim::{self, MamimConfig};
use crate::metrics;
use crate::mil::{self, Bag, MilConfig, Resampling, TaskSpec, Target};
use crate::params::{Ctx, Mode, ParamStore};
use crate::scan::{self, SsmParams, SsmShape};
use crate::seeds;
use crate::tensor::{Scalar, Tensor};
use crate::train::loss;

pub const PRIMITIVE_TOL: f64 = 1e-6;
pub const BLOCK_TOL: f64 = 1e-4;
pub const DEEP_TOL: f64 = 1e-3;
pub const SCAN_TOL: f64 = 1e-5;
pub const EQUIVARIANCE_TOL: f64 = 1e-6;
pub const CE_TOL: f64 = 1e-9;
const FD_EPS: f64 = 1e-5;

#[derive(Clone, Debug, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    /// Passes when `value < tol`.
    pub fn below(name: impl Into<String>, value: f64, tol: f64) -> Self {
        Check {
            name: name.into(),
            passed: value < tol,
            detail: format!("{value:.2e} (< {tol:.0e})"),
        }
    }

    pub fn holds(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Check {
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }

    fn from_result(name: impl Into<String>, r: Result<Check>) -> Self {
        let name = name.into();
        match r {
            Ok(c) => Check { name, ..c },
            Err(e) => Check::holds(name, false, format!("error: {e}")),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct SuiteReport {
    pub name: &'static str,
    pub checks: Vec<Check>,
    pub seconds: f64,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.passed)
    }

    /// One line: name, pass/fail, check count and elapsed time.
    pub fn summary(&self) -> String {
        let failed = self.failures().count();
        format!(
            "{} {}: {}/{} checks in {:.1}s",
            if failed == 0 { "PASS" } else { "FAIL" },
            self.name,
            self.checks.len() - failed,
            self.checks.len(),
            self.seconds
        )
    }
}

fn timed(name: &'static str, f: impl FnOnce() -> Vec<Check>) -> SuiteReport {
    let t0 = Instant::now();
    let checks = f();
    SuiteReport {
        name,
        checks,
        seconds: t0.elapsed().as_secs_f64(),
    }
}

/// The suite names accepted by [`run`].
pub const SUITES: [&str; 7] = ["gradients", "scan", "params", "masking", "lpr", "metrics", "mil"];

pub fn run(name: &str) -> Option<SuiteReport> {
    Some(match name {
        "gradients" => gradient_suite(),
        "scan" => scan_suite(100),
        "params" => param_count_suite(),
        "masking" => masking_suite(),
        "lpr" => lpr_suite(),
        "metrics" => metrics_suite(500),
        "mil" => mil_suite(),
        _ => return None,
    })
}

pub fn run_all() -> Vec<SuiteReport> {
    SUITES.iter().filter_map(|s| run(s)).collect()
}

// ---------------------------------------------------------------------------
// helpers

fn rng(tag: u64) -> ChaCha8Rng {
    seeds::rng(0xC0FFEE, &[tag])
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Values with magnitude in `[0.1, 1)` and random sign: away from the
/// kinks of ReLU and |x|.
fn off_zero(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.1..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// `sum(y * R)` for a fixed pseudo-random `R`; every output element gets
/// a distinct weight, so no gradient cancels by symmetry.
fn wsum<'t>(y: Var<'t, f64>, tag: u64) -> Result<Var<'t, f64>> {
    let r = uniform(&y.shape(), -1.0, 1.0, &mut rng(0x5EED ^ tag));
    Ok(y.mul(y.tape().constant(r))?.sum())
}

/// Every parameter shifted by uniform noise of amplitude `amp`, so that
/// zero-initialized layers are exercised too.
fn perturbed(params: &ParamStore<f64>, amp: f64, tag: u64) -> ParamStore<f64> {
    let mut r = rng(0xBEEF ^ tag);
    let mut out = params.clone();
    for (_, t) in out.iter_mut() {
        for v in t.data_mut() {
            *v += r.random_range(-amp..amp);
        }
    }
    out
}

fn fd_input<F>(params: &ParamStore<f64>, buffers: &ParamStore<f64>, mode: Mode, x: &Tensor<f64>, f: F) -> Result<f64>
where
    F: for<'t> Fn(&Ctx<'t, f64>, Var<'t, f64>) -> Result<Var<'t, f64>>,
{
    finite_diff_check(
        |tape, v| {
            let ctx = Ctx::new(tape, params, buffers.clone(), mode, false);
            f(&ctx, v)
        },
        x,
        FD_EPS,
    )
}

fn fd_param<F>(params: &ParamStore<f64>, buffers: &ParamStore<f64>, mode: Mode, name: &str, f: F) -> Result<f64>
where
    F: for<'t> Fn(&Ctx<'t, f64>) -> Result<Var<'t, f64>>,
{
    finite_diff_check(
        |tape, v| {
            let mut ctx = Ctx::new(tape, params, buffers.clone(), mode, false);
            ctx.rebind(name, v)?;
            f(&ctx)
        },
        params.get(name)?,
        FD_EPS,
    )
}

fn fd_with<F>(x: &Tensor<f64>, f: F) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape<f64>, Var<'t, f64>) -> Result<Var<'t, f64>>,
{
    finite_diff_check(f, x, FD_EPS)
}

fn cst<'t>(tape: &'t Tape<f64>, t: &Tensor<f64>) -> Var<'t, f64> {
    tape.constant(t.clone())
}

fn seq_f<'t>(ctx: &Ctx<'t, f64>, v: Var<'t, f64>) -> Result<Var<'t, f64>> {
    scan::scan_sequential(&SsmParams::bind(ctx, "f")?, v)
}

fn bi_fb<'t>(ctx: &Ctx<'t, f64>, v: Var<'t, f64>) -> Result<Var<'t, f64>> {
    scan::scan_bidirectional(&SsmParams::bind(ctx, "f")?, &SsmParams::bind(ctx, "b")?, v)
}

fn backbone_ce<'t>(ctx: &Ctx<'t, f64>, cfg: &EncoderConfig, labels: &Tensor<f64>, v: Var<'t, f64>) -> Result<Var<'t, f64>> {
    loss::cross_entropy(backbone::classify(ctx, cfg, v)?, labels)
}

fn mamim_pipeline<'t>(
    ctx: &Ctx<'t, f64>,
    cfg: &MamimConfig,
    masks: &[mamim::MaskSpec],
    target: &Tensor<f64>,
    v: Var<'t, f64>,
) -> Result<Var<'t, f64>> {
    mamim::mamim_loss(mamim::forward(ctx, cfg, v, masks)?, target, masks)
}

// ---------------------------------------------------------------------------
// 1. gradients

fn primitive_checks() -> Vec<Check> {
    let mut r = rng(1);
    let x3 = uniform(&[2, 5, 4], -1.0, 1.0, &mut r);
    let c3 = uniform(&[2, 5, 4], -1.0, 1.0, &mut r);
    let col = uniform(&[2, 5, 1], -1.0, 1.0, &mut r);
    let v4 = uniform(&[4], 0.5, 1.5, &mut r);
    let w43 = uniform(&[4, 3], -1.0, 1.0, &mut r);
    let b3 = uniform(&[3], -1.0, 1.0, &mut r);
    let kinked = off_zero(&[2, 5, 4], &mut r);
    let img = uniform(&[2, 6, 6, 3], -1.0, 1.0, &mut r);
    let dw2 = uniform(&[3, 3, 3], -1.0, 1.0, &mut r);
    let k2 = uniform(&[3, 3, 3, 2], -1.0, 1.0, &mut r);
    let dw1 = uniform(&[4, 3], -1.0, 1.0, &mut r);
    let k1 = uniform(&[3, 4, 2], -1.0, 1.0, &mut r);
    let g3 = uniform(&[3], 0.5, 1.5, &mut r);
    let bb3 = uniform(&[3], -0.5, 0.5, &mut r);
    let delta = uniform(&[2, 5, 4], 0.05, 0.8, &mut r);
    let a_n = uniform(&[3], 0.2, 2.0, &mut r);
    let bn = uniform(&[2, 5, 3], -1.0, 1.0, &mut r);
    let cn = uniform(&[2, 5, 3], -1.0, 1.0, &mut r);
    let soft = {
        let raw = uniform(&[2, 4], 0.1, 1.0, &mut r);
        let mut t = raw.clone();
        for row in t.data_mut().chunks_mut(4) {
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= s);
        }
        t
    };
    let logits = uniform(&[2, 4], -2.0, 2.0, &mut r);
    let target = uniform(&[2, 4], -2.0, 2.0, &mut r);
    let mae_pred = {
        // Keep |pred - target| >= 0.1 so MAE stays differentiable.
        let off = off_zero(&[2, 4], &mut r);
        target.zip_map(&off, |t, o| t + o)
    };
    let running = (vec![0.1, -0.2, 0.3], vec![0.5, 1.5, 2.0]);

    let k = |t: &Tensor<f64>| t.clone();
    let mut out = Vec::new();
    let mut push = |name: &str, r: Result<f64>| {
        out.push(Check::from_result(name, r.map(|v| Check::below(name, v, PRIMITIVE_TOL))));
    };

    push("add", fd_with(&x3, |t, v| wsum(v.add(cst(t, &c3))?, 1)));
    push("add (broadcast operand)", fd_with(&col, |t, v| wsum(cst(t, &c3).add(v)?, 2)));
    push("sub", fd_with(&x3, |t, v| wsum(cst(t, &c3).sub(v)?, 3)));
    push("mul", fd_with(&x3, |t, v| wsum(v.mul(cst(t, &c3))?, 4)));
    push("mul (broadcast operand)", fd_with(&col, |t, v| wsum(cst(t, &c3).mul(v)?, 5)));
    push("scale", fd_with(&x3, |_, v| wsum(v.scale(-1.7), 6)));
    push("add_scalar", fd_with(&x3, |_, v| wsum(v.add_scalar(0.3), 7)));
    push("add_channel", fd_with(&v4, |t, v| wsum(cst(t, &x3).add_channel(v)?, 8)));
    push("mul_channel (vector)", fd_with(&v4, |t, v| wsum(cst(t, &x3).mul_channel(v)?, 9)));
    push("mul_channel (input)", fd_with(&x3, |t, v| wsum(v.mul_channel(cst(t, &v4))?, 10)));
    push("linear (input)", fd_with(&x3, |t, v| wsum(v.linear(cst(t, &w43), Some(cst(t, &b3)))?, 11)));
    push("linear (weight)", fd_with(&w43, |t, v| wsum(cst(t, &x3).linear(v, Some(cst(t, &b3)))?, 12)));
    push("linear (bias)", fd_with(&b3, |t, v| wsum(cst(t, &x3).linear(cst(t, &w43), Some(v))?, 13)));
    for (i, kind) in [
        Unary::Silu,
        Unary::Relu,
        Unary::Gelu,
        Unary::Softplus,
        Unary::Exp,
        Unary::Sigmoid,
        Unary::Abs,
        Unary::Square,
    ]
    .into_iter()
    .enumerate()
    {
        let name = format!("{kind:?}").to_lowercase();
        push(&name, fd_with(&kinked, move |_, v| wsum(v.unary(kind), 20 + i as u64)));
    }
    push("log_softmax", fd_with(&x3, |_, v| wsum(v.log_softmax(), 30)));
    push("depthwise_conv1d (input)", fd_with(&x3, |t, v| wsum(v.depthwise_conv1d(cst(t, &dw1))?, 31)));
    push("depthwise_conv1d (kernel)", fd_with(&dw1, |t, v| wsum(cst(t, &x3).depthwise_conv1d(v)?, 32)));
    push("causal_conv1d (input)", fd_with(&x3, |t, v| wsum(v.causal_conv1d(cst(t, &dw1))?, 33)));
    push("causal_conv1d (kernel)", fd_with(&dw1, |t, v| wsum(cst(t, &x3).causal_conv1d(v)?, 34)));
    push("conv1d (input)", fd_with(&x3, |t, v| wsum(v.conv1d(cst(t, &k1))?, 35)));
    push("conv1d (kernel)", fd_with(&k1, |t, v| wsum(cst(t, &x3).conv1d(v)?, 36)));
    push("depthwise_conv2d (input)", fd_with(&img, |t, v| wsum(v.depthwise_conv2d(cst(t, &dw2))?, 37)));
    push("depthwise_conv2d (kernel)", fd_with(&dw2, |t, v| wsum(cst(t, &img).depthwise_conv2d(v)?, 38)));
    push("conv2d s1 p1 (input)", fd_with(&img, |t, v| wsum(v.conv2d(cst(t, &k2), 1, 1)?, 39)));
    push("conv2d s1 p1 (kernel)", fd_with(&k2, |t, v| wsum(cst(t, &img).conv2d(v, 1, 1)?, 40)));
    push("conv2d s2 p0 (input)", fd_with(&img, |t, v| wsum(v.conv2d(cst(t, &k2), 3, 0)?, 41)));
    push(
        "batch_norm batch stats (input)",
        fd_with(&img, |t, v| wsum(v.batch_norm(cst(t, &g3), cst(t, &bb3), NormStats::Batch)?.0, 42)),
    );
    push(
        "batch_norm batch stats (gamma)",
        fd_with(&g3, |t, v| wsum(cst(t, &img).batch_norm(v, cst(t, &bb3), NormStats::Batch)?.0, 43)),
    );
    push(
        "batch_norm running stats (input)",
        fd_with(&img, |t, v| {
            let stats = NormStats::Running {
                mean: running.0.clone(),
                var: running.1.clone(),
            };
            wsum(v.batch_norm(cst(t, &g3), cst(t, &bb3), stats)?.0, 44)
        }),
    );
    push("layer_norm (input)", fd_with(&img, |t, v| wsum(v.layer_norm(cst(t, &g3), cst(t, &bb3))?, 45)));
    push("layer_norm (gamma)", fd_with(&g3, |t, v| wsum(cst(t, &img).layer_norm(v, cst(t, &bb3))?, 46)));
    push("layer_norm (beta)", fd_with(&bb3, |t, v| wsum(cst(t, &img).layer_norm(cst(t, &g3), v)?, 47)));
    push("concat", fd_with(&x3, |t, v| wsum(v.concat(cst(t, &c3))?, 48)));
    push("slice", fd_with(&x3, |_, v| wsum(v.slice(1, 2)?, 49)));
    push("reshape", fd_with(&x3, |_, v| wsum(v.reshape(&[10, 4])?, 50)));
    push("permute", fd_with(&x3, |_, v| wsum(v.permute(&[2, 0, 1])?, 51)));
    push("flip", fd_with(&x3, |_, v| wsum(v.flip(1)?, 52)));
    push("sum", fd_with(&x3, |_, v| Ok(v.square().sum())));
    push("mean", fd_with(&x3, |_, v| Ok(v.square().mean())));
    push("sum_axis", fd_with(&x3, |_, v| wsum(v.sum_axis(1)?, 53)));
    push("mean_axis", fd_with(&x3, |_, v| wsum(v.mean_axis(2)?, 54)));
    push("global_avg_pool", fd_with(&img, |_, v| wsum(v.global_avg_pool()?, 55)));
    push("upsample_nearest", fd_with(&img, |_, v| wsum(v.upsample_nearest(2)?, 56)));
    let fixed = &[x3.clone(), delta.clone(), a_n.clone(), bn.clone(), cn.clone()];
    for (i, (name, input)) in [("x", &x3), ("delta", &delta), ("A", &a_n), ("B", &bn), ("C", &cn)]
        .into_iter()
        .enumerate()
    {
        push(
            &format!("selective_scan ({name})"),
            fd_with(&k(input), move |t, v| {
                let mut ins: Vec<Var<'_, f64>> = fixed.iter().map(|f| cst(t, f)).collect();
                ins[i] = v;
                wsum(scan::selective_scan(ins[0], ins[1], ins[2], ins[3], ins[4])?, 60 + i as u64)
            }),
        );
    }
    push("cross_entropy (soft targets)", fd_with(&logits, |_, v| loss::cross_entropy(v, &soft)));
    push("mae", fd_with(&mae_pred, |_, v| loss::mae(v, &target)));
    out
}

fn block_checks() -> Vec<Check> {
    let mut out = Vec::new();
    let mut push = |name: &str, r: Result<f64>, tol: f64| {
        out.push(Check::from_result(name, r.map(|v| Check::below(name, v, tol))));
    };
    let mut r = rng(2);
    let none = ParamStore::new();

    // sep_conv1d
    let x = uniform(&[2, 6, 4], -1.0, 1.0, &mut r);
    let dw = uniform(&[4, 3], -1.0, 1.0, &mut r);
    let pw = uniform(&[4, 4], -1.0, 1.0, &mut r);
    push("sep_conv1d (input)", fd_with(&x, |t, v| wsum(dms::sep_conv1d(v, cst(t, &dw), cst(t, &pw))?, 70)), BLOCK_TOL);
    push("sep_conv1d (depthwise)", fd_with(&dw, |t, v| wsum(dms::sep_conv1d(cst(t, &x), v, cst(t, &pw))?, 71)), BLOCK_TOL);
    push("sep_conv1d (pointwise)", fd_with(&pw, |t, v| wsum(dms::sep_conv1d(cst(t, &x), cst(t, &dw), v)?, 72)), BLOCK_TOL);

    // scans
    let shape = SsmShape::new(4, 3);
    let mut specs = scan::ssm_specs("f", shape);
    specs.extend(scan::ssm_specs("b", shape));
    let p = perturbed(&ParamStore::init(&specs, &mut rng(3)), 0.2, 3);
    let xs = uniform(&[2, 7, 4], -1.0, 1.0, &mut r);
    push("scan_sequential (input)", fd_input(&p, &none, Mode::Eval, &xs, |ctx, v| wsum(seq_f(ctx, v)?, 73)), BLOCK_TOL);
    for name in ["f.log_a", "f.dt_down", "f.dt_up", "f.dt_bias", "f.b_proj.weight", "f.c_proj.bias"] {
        let xs = &xs;
        push(
            &format!("scan_sequential ({name})"),
            fd_param(&p, &none, Mode::Eval, name, |ctx| wsum(seq_f(ctx, ctx.tape().constant(xs.clone()))?, 74)),
            BLOCK_TOL,
        );
    }
    push("scan_bidirectional (input)", fd_input(&p, &none, Mode::Eval, &xs, |ctx, v| wsum(bi_fb(ctx, v)?, 75)), BLOCK_TOL);
    push(
        "scan_bidirectional (b.log_a)",
        fd_param(&p, &none, Mode::Eval, "b.log_a", |ctx| wsum(bi_fb(ctx, ctx.tape().constant(xs.clone()))?, 76)),
        BLOCK_TOL,
    );

    // DMS
    let cfg = DmsConfig::new(8, 4);
    let p = perturbed(&ParamStore::init(&dms::param_specs("d", &cfg).expect("valid"), &mut rng(4)), 0.1, 4);
    let xd = uniform(&[2, 6, 8], -1.0, 1.0, &mut r);
    push(
        "dms_forward (input)",
        fd_input(&p, &none, Mode::Eval, &xd, |ctx, v| wsum(dms::forward(ctx, "d", &cfg, v)?, 77)),
        BLOCK_TOL,
    );
    for name in ["d.proj_ssm.weight", "d.sep.dw", "d.conv.weight", "d.ssm_fwd.log_a", "d.ssm_bwd.dt_bias", "d.out.weight"] {
        let xd = &xd;
        push(
            &format!("dms_forward ({name})"),
            fd_param(&p, &none, Mode::Eval, name, |ctx| {
                wsum(dms::forward(ctx, "d", &cfg, ctx.tape().constant(xd.clone()))?, 78)
            }),
            BLOCK_TOL,
        );
    }

    // LPR, both BN modes
    let lcfg = LprConfig::new(4);
    let p = perturbed(&ParamStore::init(&lpr::param_specs("l", &lcfg).expect("valid"), &mut rng(5)), 0.3, 5);
    let mut bufs = ParamStore::init(&lpr::buffer_specs("l", &lcfg), &mut rng(5));
    for (name, t) in bufs.iter_mut() {
        let var = name.ends_with("var");
        *t = t.map(|v| if var { v * 1.3 } else { v + 0.05 });
    }
    let xl = uniform(&[2, 5, 5, 4], -1.0, 1.0, &mut r);
    for mode in [Mode::Train, Mode::Eval] {
        push(
            &format!("lpr_forward {mode:?} (input)"),
            fd_input(&p, &bufs, mode, &xl, |ctx, v| wsum(lpr::forward(ctx, "l", &lcfg, v)?, 79)),
            BLOCK_TOL,
        );
        for name in ["l.reduce.weight", "l.dw.weight", "l.expand.weight", "l.bn1.weight"] {
            let xl = &xl;
            push(
                &format!("lpr_forward {mode:?} ({name})"),
                fd_param(&p, &bufs, mode, name, |ctx| {
                    wsum(lpr::forward(ctx, "l", &lcfg, ctx.tape().constant(xl.clone()))?, 80)
                }),
                BLOCK_TOL,
            );
        }
    }

    // MIL aggregation on a 4-tile, dim-8 bag
    let mcfg = MilConfig {
        model_dim: 8,
        state_dim: 4,
        ..MilConfig::new(8, vec![TaskSpec::classification("t", 3)])
    };
    let p = perturbed(&mil::init::<f64>(&mcfg, 6).expect("valid"), 0.1, 6);
    let bag = uniform(&[1, 4, 8], -1.0, 1.0, &mut r);
    push(
        "aggregate (embeddings)",
        fd_input(&p, &none, Mode::Eval, &bag, |ctx, v| wsum(mil::aggregate_tokens(ctx, &mcfg, v)?, 81)),
        BLOCK_TOL,
    );
    push(
        "aggregate (mil.proj.weight)",
        fd_param(&p, &none, Mode::Eval, "mil.proj.weight", |ctx| {
            wsum(mil::aggregate_tokens(ctx, &mcfg, ctx.tape().constant(bag.clone()))?, 82)
        }),
        BLOCK_TOL,
    );
    out
}

/// Small decoder so that the end-to-end checks stay fast.
pub fn tiny_mamim() -> MamimConfig {
    let mut cfg = MamimConfig::new(EncoderConfig::tiny());
    cfg.decoder.dim = 8;
    cfg.decoder.depth = 1;
    cfg.decoder.state_dim = 2;
    cfg
}

fn deep_checks() -> Vec<Check> {
    let mut out = Vec::new();
    let mut push = |name: &str, r: Result<f64>| {
        out.push(Check::from_result(name, r.map(|v| Check::below(name, v, DEEP_TOL))));
    };
    let mut r = rng(7);

    let ecfg = EncoderConfig::tiny();
    let (p, bufs) = backbone::init_classifier::<f64>(&ecfg, 7).expect("valid");
    let p = perturbed(&p, 0.05, 7);
    let img = uniform(&[2, 16, 16, 3], -1.0, 1.0, &mut r);
    let labels = loss::one_hot::<f64>(&[0, 1], ecfg.num_classes).expect("labels");
    push("tiny backbone + CE, train mode (image)", fd_input(&p, &bufs, Mode::Train, &img, |ctx, v| backbone_ce(ctx, &ecfg, &labels, v)));
    push("tiny backbone + CE, eval mode (image)", fd_input(&p, &bufs, Mode::Eval, &img, |ctx, v| backbone_ce(ctx, &ecfg, &labels, v)));
    for name in ["encoder.stem.weight", "encoder.stages.0.lpr.reduce.weight", "encoder.stages.1.blocks.0.dms.ssm_fwd.log_a"] {
        let img = &img;
        push(
            &format!("tiny backbone + CE ({name})"),
            fd_param(&p, &bufs, Mode::Train, name, |ctx| backbone_ce(ctx, &ecfg, &labels, ctx.tape().constant(img.clone()))),
        );
    }

    let mcfg = tiny_mamim();
    let (p, bufs) = mamim::init::<f64>(&mcfg, 8).expect("valid");
    let p = perturbed(&p, 0.05, 8);
    let img = uniform(&[1, 16, 16, 3], -1.0, 1.0, &mut r);
    let masks = vec![mamim::make_mask(8, 8, 0.75, 8).expect("mask")];
    let target = mamim::patchify(&img, mcfg.encoder.patch_size).expect("patchify");
    push("mamim_loss pipeline (image)", fd_input(&p, &bufs, Mode::Train, &img, |ctx, v| mamim_pipeline(ctx, &mcfg, &masks, &target, v)));
    for name in [mamim::MASK_TOKEN, "decoder.head.weight", "decoder.lateral.0.weight"] {
        let img = &img;
        push(
            &format!("mamim_loss pipeline ({name})"),
            fd_param(&p, &bufs, Mode::Train, name, |ctx| mamim_pipeline(ctx, &mcfg, &masks, &target, ctx.tape().constant(img.clone()))),
        );
    }
    out
}

/// Finite differences against analytic gradients, in 64-bit, for every
/// primitive, every block and two deep compositions.
pub fn gradient_suite() -> SuiteReport {
    timed("gradient oracle", || {
        let mut v = primitive_checks();
        v.extend(block_checks());
        v.extend(deep_checks());
        v
    })
}

// ---------------------------------------------------------------------------
// 2. scan

/// Independent reference for `scan_sequential`: computes every projection
/// and the recurrence with plain loops, channel by channel.
pub fn scan_reference(x: &Tensor<f64>, p: &ParamStore<f64>, prefix: &str) -> Result<Tensor<f64>> {
    let g = |n: &str| p.get(&format!("{prefix}.{n}"));
    let (wd, wu, bias) = (g("dt_down")?, g("dt_up")?, g("dt_bias")?);
    let (wb, bb, wc, bc, log_a) = (g("b_proj.weight")?, g("b_proj.bias")?, g("c_proj.weight")?, g("c_proj.bias")?, g("log_a")?);
    let (bs, l, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (r, n) = (wd.shape()[1], log_a.numel());
    let xv = |b: usize, t: usize, c: usize| x.data()[(b * l + t) * d + c];
    let mut y = vec![0.0; bs * l * d];
    for b in 0..bs {
        for ch in 0..d {
            let mut h = vec![0.0; n];
            for t in 0..l {
                let low: Vec<f64> = (0..r).map(|j| (0..d).map(|i| xv(b, t, i) * wd.data()[i * r + j]).sum()).collect();
                let pre: f64 = bias.data()[ch] + (0..r).map(|j| low[j] * wu.data()[j * d + ch]).sum::<f64>();
                let delta = if pre > 30.0 { pre } else { pre.exp().ln_1p() };
                let mut acc = 0.0;
                for k in 0..n {
                    let bk = bb.data()[k] + (0..d).map(|i| xv(b, t, i) * wb.data()[i * n + k]).sum::<f64>();
                    let ck = bc.data()[k] + (0..d).map(|i| xv(b, t, i) * wc.data()[i * n + k]).sum::<f64>();
                    let a = log_a.data()[k].exp();
                    h[k] = (-delta * a).exp() * h[k] + delta * bk * xv(b, t, ch);
                    acc += ck * h[k];
                }
                y[(b * l + t) * d + ch] = acc;
            }
        }
    }
    Tensor::new(vec![bs, l, d], y)
}

fn random_ssm(shape: SsmShape, prefix: &str, rng: &mut ChaCha8Rng) -> ParamStore<f64> {
    let mut p = ParamStore::init(&scan::ssm_specs(prefix, shape), rng);
    for (name, t) in p.iter_mut() {
        let (lo, hi) = if name.ends_with("log_a") {
            (-1.0, 1.5)
        } else if name.ends_with("dt_bias") {
            (-3.0, 0.5)
        } else {
            (-0.8, 0.8)
        };
        *t = uniform(t.shape(), lo, hi, rng);
    }
    p
}

fn run_scan<T: Scalar>(p: &ParamStore<f64>, x: &Tensor<f64>, bidirectional: bool) -> Result<Tensor<f64>> {
    let tape = Tape::<T>::new();
    let ctx = Ctx::new(&tape, &p.cast::<T>(), ParamStore::new(), Mode::Eval, false);
    let xv = tape.constant(x.cast());
    let y = if bidirectional {
        scan::scan_bidirectional(&SsmParams::bind(&ctx, "f")?, &SsmParams::bind(&ctx, "b")?, xv)?
    } else {
        scan::scan_sequential(&SsmParams::bind(&ctx, "f")?, xv)?
    };
    let v = y.value().cast();
    Ok(v)
}

/// `dy[t0] / dx[s]` for all `s`, as a flat `[L]` list of per-position
/// gradient maxima, via one backward pass of `sum_d y[0, t0, d]`.
fn jacobian_row(p: &ParamStore<f64>, x: &Tensor<f64>, t0: usize, bidirectional: bool) -> Result<Vec<f64>> {
    let tape = Tape::<f64>::new();
    let ctx = Ctx::new(&tape, p, ParamStore::new(), Mode::Eval, false);
    let xv = tape.param(x.clone());
    let y = if bidirectional {
        scan::scan_bidirectional(&SsmParams::bind(&ctx, "f")?, &SsmParams::bind(&ctx, "b")?, xv)?
    } else {
        scan::scan_sequential(&SsmParams::bind(&ctx, "f")?, xv)?
    };
    let (l, d) = (x.shape()[1], x.shape()[2]);
    let sel = Tensor::from_fn(&[1, l, d], |i| if i / d == t0 { 1.0 } else { 0.0 });
    let g = tape.backward(y.mul(tape.constant(sel))?.sum())?.get_or_zeros(xv);
    Ok(g.data().chunks(d).map(|row| row.iter().fold(0.0f64, |m, v| m.max(v.abs()))).collect())
}

/// The scan against its reference on random instances, causality probes
/// and a long-sequence stability run.
pub fn scan_suite(instances: usize) -> SuiteReport {
    timed("scan recurrence oracle", || {
        let mut out = Vec::new();
        let mut r = rng(10);
        let (mut worst, mut first_err) = (0.0f64, None);
        for i in 0..instances {
            let shape = SsmShape::new(r.random_range(1..=8), r.random_range(1..=8));
            let (bs, l) = (r.random_range(1..=2), r.random_range(1..=64));
            let p = random_ssm(shape, "f", &mut r);
            let x = uniform(&[bs, l, shape.channels], -1.0, 1.0, &mut r);
            match (run_scan::<f32>(&p, &x, false), scan_reference(&x, &p, "f")) {
                (Ok(y), Ok(oracle)) => worst = worst.max(y.max_abs_diff(&oracle)),
                (Err(e), _) | (_, Err(e)) => {
                    first_err.get_or_insert(format!("instance {i}: {e}"));
                }
            }
        }
        out.push(match first_err {
            Some(e) => Check::holds("random instances vs reference (f32)", false, e),
            None => Check::below(format!("{instances} random instances vs reference (f32)"), worst, SCAN_TOL),
        });

        let shape = SsmShape::new(3, 4);
        let mut p = random_ssm(shape, "f", &mut r);
        for (k, v) in random_ssm(shape, "b", &mut r).iter() {
            p.insert(k.clone(), v.clone());
        }
        let l = 9;
        let x = uniform(&[1, l, 3], -1.0, 1.0, &mut r);
        let probe = |bidirectional: bool| -> Result<(bool, bool)> {
            // (no output depends on a later input, some output does)
            let (mut causal, mut leaks) = (true, false);
            for t0 in 0..l {
                let row = jacobian_row(&p, &x, t0, bidirectional)?;
                for &g in &row[t0 + 1..] {
                    if g != 0.0 {
                        causal = false;
                        leaks = true;
                    }
                }
            }
            Ok((causal, leaks))
        };
        out.push(Check::from_result(
            "causal scan: dy_t/dx_s == 0 exactly for s > t",
            probe(false).map(|(c, _)| Check::holds("", c, if c { "all zero" } else { "non-zero entry" })),
        ));
        out.push(Check::from_result(
            "bidirectional scan: some dy_t/dx_s != 0 for s > t",
            probe(true).map(|(_, leak)| Check::holds("", leak, if leak { "anti-causal dependence found" } else { "looks causal" })),
        ));
        let causal_conv = {
            let tape = Tape::<f64>::new();
            let xv = tape.param(x.clone());
            let w = tape.constant(uniform(&[3, 4], -1.0, 1.0, &mut r));
            let sel = Tensor::from_fn(&[1, l, 3], |i| if i / 3 == 4 { 1.0 } else { 0.0 });
            xv.causal_conv1d(w)
                .and_then(|y| y.mul(tape.constant(sel)))
                .and_then(|y| tape.backward(y.sum()))
                .map(|g| g.get_or_zeros(xv).data()[5 * 3..].iter().all(|&v| v == 0.0))
        };
        out.push(Check::from_result(
            "causal_conv1d: dy_t/dx_s == 0 exactly for s > t",
            causal_conv.map(|c| Check::holds("", c, if c { "all zero" } else { "non-zero entry" })),
        ));

        // Long sequence: finite and within the contraction bound.
        let shape = SsmShape::new(4, 8);
        let p = random_ssm(shape, "f", &mut r);
        let x = uniform(&[1, 4096, 4], -1.0, 1.0, &mut r);
        let long = run_scan::<f32>(&p, &x, false).and_then(|y| {
            let oracle = scan_reference(&x, &p, "f")?;
            Ok((y.all_finite(), y.max_abs_diff(&oracle), oracle.max_abs()))
        });
        out.push(Check::from_result(
            "L = 4096: finite, matches reference",
            long.map(|(finite, err, scale)| {
                Check::holds(
                    "",
                    finite && err <= 1e-4 * scale.max(1.0),
                    format!("finite={finite}, max err {err:.2e} at output scale {scale:.2e}"),
                )
            }),
        ));
        out
    })
}

// ---------------------------------------------------------------------------
// 3. parameter counts

pub fn param_count_suite() -> SuiteReport {
    timed("parameter-count identities", || {
        let mut out = Vec::new();
        let mut all = true;
        let mut detail = String::new();
        for c in (2..=768).step_by(2) {
            for k in [3, 5, 7] {
                let (sep, std) = (dms::sep_conv_param_count(c, k), dms::standard_conv_param_count(c, k));
                // sep / std == 1/k + 1/c  <=>  sep * k * c == std * (c + k)
                if sep * k * c != std * (c + k) {
                    all = false;
                    detail = format!("C'={c}, k={k}: {sep}/{std}");
                }
            }
        }
        out.push(Check::holds(
            "sep/standard conv ratio == 1/k + 1/C' (C' even 2..768, k in {3,5,7})",
            all,
            if all { "exact".to_string() } else { detail },
        ));
        let (mut all, mut detail) = (true, String::new());
        for c in (2..=768).step_by(2) {
            for k in [3, 5, 7] {
                let cfg = LprConfig { kernel: k, ..LprConfig::new(c) };
                let counted = ParamStore::<f32>::new().numel()
                    + lpr::param_specs("", &cfg)
                        .map(|s| s.iter().filter(|p| p.name == "dw.weight").map(|p| p.numel()).sum::<usize>())
                        .unwrap_or(0);
                if counted != k * k * c / 2 || lpr::depthwise_param_count(&cfg) != k * k * c / 2 {
                    all = false;
                    detail = format!("C={c}, k={k}: {counted}");
                }
            }
        }
        out.push(Check::holds(
            "LPR depthwise weights == k^2 * C/2",
            all,
            if all { "exact".to_string() } else { detail },
        ));
        out.push(Check::from_result(
            "full preset total within 25.3M +- 1.0M",
            backbone::param_count_total(&EncoderConfig::full()).map(|n| {
                let ok = n.abs_diff(backbone::FULL_TARGET_PARAMS) <= 1_000_000;
                Check::holds("", ok, format!("{n} parameters"))
            }),
        ));
        out
    })
}

// ---------------------------------------------------------------------------
// 4. masking

pub fn masking_suite() -> SuiteReport {
    timed("masking invariants", || {
        let mut out = Vec::new();
        let mut grids: Vec<(usize, usize)> = (1..=16).map(|s| (s, s)).collect();
        grids.extend([(7, 3), (3, 7), (14, 14), (56, 56), (1, 9), (2, 1)]);
        let mut bad = None;
        for &(h, w) in &grids {
            let n = h * w;
            // round-half-up of 3n/4 in integers
            let want = (3 * n + 2) / 4;
            for seed in 0..4 {
                match mamim::make_mask(h, w, 0.75, seed) {
                    Ok(m) => {
                        let mut u = m.indices.clone();
                        u.dedup();
                        if m.len() != want || u.len() != m.len() || u.iter().any(|&i| i >= n) {
                            bad = Some(format!("{h}x{w}: {} masked, want {want}", m.len()));
                        }
                    }
                    Err(e) => bad = Some(format!("{h}x{w}: {e}")),
                }
            }
        }
        out.push(Check::holds(
            "|M| == round(0.75 N) over grid sizes",
            bad.is_none(),
            bad.unwrap_or_else(|| format!("{} grids", grids.len())),
        ));

        let det = (|| -> Result<bool> {
            let a = mamim::make_mask(14, 14, 0.75, 42)?;
            let b = mamim::make_mask(14, 14, 0.75, 42)?;
            let c = mamim::make_mask(14, 14, 0.75, 43)?;
            Ok(a == b && a != c)
        })();
        out.push(Check::from_result(
            "mask determined by seed",
            det.map(|ok| Check::holds("", ok, "same seed equal, next seed differs")),
        ));

        let grad = (|| -> Result<(bool, bool)> {
            let cfg = tiny_mamim();
            let (p, b) = mamim::init::<f64>(&cfg, 1)?;
            let mut r = rng(40);
            let img = uniform(&[2, 16, 16, 3], -1.0, 1.0, &mut r);
            let masks = vec![mamim::make_mask(8, 8, 0.75, 1)?, mamim::make_mask(8, 8, 0.75, 2)?];
            let tape = Tape::new();
            let ctx = Ctx::new(&tape, &p, b, Mode::Train, true);
            let pred = mamim::forward(&ctx, &cfg, tape.constant(img.clone()), &masks)?;
            let target = mamim::patchify(&img, cfg.encoder.patch_size)?;
            let g = tape.backward(mamim::mamim_loss(pred, &target, &masks)?)?.get_or_zeros(pred);
            let ind = mamim::mask_indicator::<f64>(&masks, 8, 8)?;
            let pp = cfg.patch_pixels();
            let (mut zero_visible, mut live_masked) = (true, false);
            for (tok, &m) in ind.data().iter().enumerate() {
                let row = &g.data()[tok * pp..(tok + 1) * pp];
                if m == 0.0 {
                    zero_visible &= row.iter().all(|&v| v == 0.0);
                } else {
                    live_masked |= row.iter().any(|&v| v != 0.0);
                }
            }
            Ok((zero_visible, live_masked))
        })();
        out.push(Check::from_result(
            "loss gradient exactly zero on unmasked patches",
            grad.map(|(z, live)| Check::holds("", z && live, format!("visible all zero: {z}, masked non-zero: {live}"))),
        ));
        out
    })
}

// ---------------------------------------------------------------------------
// 7. LPR

pub fn lpr_suite() -> SuiteReport {
    timed("LPR identity and equivariance", || {
        let mut out = Vec::new();
        let cfg = LprConfig::new(8);
        let mut r = rng(70);
        let x = uniform(&[2, 9, 9, 8], -2.0, 2.0, &mut r).cast::<f32>();
        for mode in [Mode::Train, Mode::Eval] {
            let res = (|| -> Result<bool> {
                let mut rr = rng(71);
                let p = ParamStore::<f32>::init(&lpr::param_specs("l", &cfg)?, &mut rr);
                let b = ParamStore::<f32>::init(&lpr::buffer_specs("l", &cfg), &mut rr);
                let tape = Tape::new();
                let ctx = Ctx::new(&tape, &p, b, mode, false);
                let y = lpr::forward(&ctx, "l", &cfg, tape.constant(x.clone()))?;
                let same = y.value().data().iter().zip(x.data()).all(|(a, b)| a.to_bits() == b.to_bits());
                Ok(same)
            })();
            out.push(Check::from_result(
                format!("zero-initialized expand: output == input bitwise ({mode:?})"),
                res.map(|ok| Check::holds("", ok, if ok { "bit-identical" } else { "differs" })),
            ));
        }

        let eq = (|| -> Result<f64> {
            let mut rr = rng(72);
            let p = perturbed(&ParamStore::init(&lpr::param_specs("l", &cfg)?, &mut rr), 0.3, 72).cast::<f32>();
            let mut b = ParamStore::<f32>::init(&lpr::buffer_specs("l", &cfg), &mut rr);
            for (name, t) in b.iter_mut() {
                let var = name.ends_with("var");
                *t = Tensor::from_fn(t.shape(), |_| if var { rr.random_range(0.5..2.0) } else { rr.random_range(-0.3..0.3) });
            }
            let (h, w) = (14, 14);
            let img = uniform(&[h, w, 8], -1.0, 1.0, &mut rr).cast::<f32>();
            let branch = |t: &Tensor<f32>| -> Result<Tensor<f32>> {
                let tape = Tape::new();
                let ctx = Ctx::new(&tape, &p, b.clone(), Mode::Eval, false);
                let y = lpr::branch(&ctx, "l", &cfg, tape.constant(t.reshaped(&[1, h, w, 8])?))?;
                let v = y.value().reshaped(&[h, w, 8])?;
                Ok(v)
            };
            let rad = cfg.kernel / 2;
            let mut worst = 0.0f64;
            for (dy, dx) in [(1, 0), (0, 2), (3, 1), (2, 5)] {
                let a = branch(&imageops::roll(&img, dy, dx)?)?;
                let b = imageops::roll(&branch(&img)?, dy, dx)?;
                for i in dy + rad..h - rad {
                    for j in dx + rad..w - rad {
                        for c in 0..8 {
                            let k = (i * w + j) * 8 + c;
                            worst = worst.max((a.data()[k] - b.data()[k]).abs() as f64);
                        }
                    }
                }
            }
            Ok(worst)
        })();
        out.push(Check::from_result(
            "interior shift-equivariance of the conv branch (eval BN)",
            eq.map(|v| Check::below("", v, EQUIVARIANCE_TOL)),
        ));
        out
    })
}

// ---------------------------------------------------------------------------
// 8. metrics

/// `P(score_pos > score_neg) + P(tie) / 2` by enumerating all pairs.
pub fn pairwise_auc(positive: &[bool], scores: &[f64]) -> f64 {
    let (mut twice, mut pairs) = (0u64, 0u64);
    for (i, &pi) in positive.iter().enumerate() {
        if !pi {
            continue;
        }
        for (j, &pj) in positive.iter().enumerate() {
            if pj {
                continue;
            }
            pairs += 1;
            twice += match scores[i].partial_cmp(&scores[j]) {
                Some(std::cmp::Ordering::Greater) => 2,
                Some(std::cmp::Ordering::Equal) => 1,
                _ => 0,
            };
        }
    }
    twice as f64 / (2 * pairs) as f64
}

pub fn metrics_suite(instances: usize) -> SuiteReport {
    timed("metrics correctness", || {
        let mut out = Vec::new();
        let mut r = rng(80);
        let mut mismatch = None;
        let mut done = 0;
        while done < instances {
            let n = r.random_range(2..=30);
            let pos: Vec<bool> = (0..n).map(|_| r.random_bool(0.4)).collect();
            if pos.iter().all(|&b| b) || pos.iter().all(|&b| !b) {
                continue;
            }
            // Coarse scores so that ties are common.
            let levels = r.random_range(2..=12);
            let scores: Vec<f64> = (0..n).map(|_| r.random_range(0..levels) as f64 / levels as f64).collect();
            match metrics::auc_binary(&pos, &scores) {
                Ok(v) if v == pairwise_auc(&pos, &scores) => {}
                Ok(v) => mismatch = Some(format!("instance {done}: {v} vs {}", pairwise_auc(&pos, &scores))),
                Err(e) => mismatch = Some(format!("instance {done}: {e}")),
            }
            done += 1;
        }
        out.push(Check::holds(
            format!("AUC == pairwise oracle exactly on {instances} instances"),
            mismatch.is_none(),
            mismatch.unwrap_or_else(|| "all equal".into()),
        ));
        let mut worst = 0.0f64;
        for k in 2..=10 {
            let tape = Tape::<f64>::new();
            let logits = tape.constant(Tensor::from_fn(&[3, k], |i| 0.7 * (i / k) as f64));
            let labels: Vec<usize> = (0..3).map(|i| i % k).collect();
            match loss::one_hot(&labels, k).and_then(|t| loss::cross_entropy(logits, &t)) {
                Ok(ce) => worst = worst.max((ce.value().item() - (k as f64).ln()).abs()),
                Err(_) => worst = f64::INFINITY,
            }
        }
        out.push(Check::below("CE of uniform logits == ln K (K = 2..10)", worst, CE_TOL));
        out
    })
}

// ---------------------------------------------------------------------------
// 9. MIL

fn toy_bag(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Result<Bag> {
    let emb = uniform(&[n, d], -1.0, 1.0, rng).cast::<f32>();
    let mut coords: Vec<(u32, u32)> = (0..n as u32).map(|i| (i / 4, i % 4)).collect();
    coords.shuffle(rng);
    Bag::new("toy", emb, coords)
}

fn shuffled(bag: &Bag, rng: &mut ChaCha8Rng) -> Result<Bag> {
    let mut order: Vec<usize> = (0..bag.n_tiles()).collect();
    order.shuffle(rng);
    let mut b = Bag::new(
        bag.slide_id.clone(),
        bag.gather(&order)?,
        order.iter().map(|&i| bag.coords[i]).collect(),
    )?;
    b.labels = bag.labels.clone();
    Ok(b)
}

pub fn mil_suite() -> SuiteReport {
    timed("MIL contract", || {
        let mut out = Vec::new();
        let cfg = MilConfig {
            model_dim: 16,
            state_dim: 4,
            ..MilConfig::new(12, vec![TaskSpec::classification("grade", 6), TaskSpec::regression("os")])
        };
        let mut r = rng(90);
        let params = match mil::init::<f32>(&cfg, 9) {
            Ok(p) => p,
            Err(e) => return vec![Check::holds("init", false, e.to_string())],
        };
        let bag = match toy_bag(11, 12, &mut r) {
            Ok(b) => b,
            Err(e) => return vec![Check::holds("bag", false, e.to_string())],
        };

        let shuffle = (|| -> Result<bool> {
            let base = mil::predict(&cfg, &params, &bag)?;
            let mut r = rng(91);
            for _ in 0..5 {
                if mil::predict(&cfg, &params, &shuffled(&bag, &mut r)?)? != base {
                    return Ok(false);
                }
            }
            Ok(true)
        })();
        out.push(Check::from_result(
            "shuffle invariance via canonical order",
            shuffle.map(|ok| Check::holds("", ok, "5 shuffles, bit-identical outputs")),
        ));

        let grads = (|| -> Result<(bool, bool, bool)> {
            let run = |labels: &[(&str, Target)], weights: &[f64]| -> Result<ParamStore<f32>> {
                let mut cfg = cfg.clone();
                for (t, &w) in cfg.tasks.iter_mut().zip(weights) {
                    t.weight = w;
                }
                let mut b = bag.clone();
                for &(k, v) in labels {
                    b = b.with_label(k, v);
                }
                let tape = Tape::new();
                let ctx = Ctx::new(&tape, &params, ParamStore::new(), Mode::Train, true);
                let outs = mil::mtl_forward(&ctx, &cfg, mil::aggregate(&ctx, &cfg, &b)?)?;
                let l = mil::joint_loss(&cfg, &outs, &b.labels)?.expect("some label");
                Ok(ctx.param_grads(&tape.backward(l)?))
            };
            let head_zero = |g: &ParamStore<f32>, task: &str| -> Result<bool> {
                let w = g.get(&format!("{}.weight", mil::head_name(task)))?;
                let b = g.get(&format!("{}.bias", mil::head_name(task)))?;
                Ok(w.data().iter().chain(b.data()).all(|&v| v == 0.0))
            };
            let missing = run(&[("grade", Target::Class(2))], &[1.0, 1.0])?;
            let both = run(&[("grade", Target::Class(2)), ("os", Target::Value(3.5))], &[1.0, 1.0])?;
            let zero_w = run(&[("grade", Target::Class(2)), ("os", Target::Value(3.5))], &[1.0, 0.0])?;
            Ok((
                head_zero(&missing, "os")? && !head_zero(&missing, "grade")?,
                !head_zero(&both, "os")?,
                head_zero(&zero_w, "os")?,
            ))
        })();
        out.push(Check::from_result(
            "missing-label task: head gradient exactly zero",
            grads.as_ref().map(|g| Check::holds("", g.0 && g.1, format!("missing zero: {}, present non-zero: {}", g.0, g.1))).map_err(|e| crate::Error::Invalid(e.to_string())),
        ));
        out.push(Check::from_result(
            "zero task weight: head gradient exactly zero",
            grads.map(|g| Check::holds("", g.2, "")),
        ));

        let rounds = (|| -> Result<(bool, bool, bool)> {
            let rs = Resampling {
                n_rounds: 15,
                tiles_per_round: Some(6),
                replacement: false,
            };
            let a = mil::predict_with_resampling(&cfg, &params, &bag, &rs, 5)?;
            let b = mil::predict_with_resampling(&cfg, &params, &bag, &rs, 5)?;
            let c = mil::predict_with_resampling(&cfg, &params, &bag, &rs, 6)?;
            let one = Resampling {
                n_rounds: 1,
                tiles_per_round: Some(bag.n_tiles()),
                replacement: false,
            };
            let plain = {
                let tape = Tape::new();
                let ctx = Ctx::new(&tape, &params, ParamStore::new(), Mode::Eval, false);
                let outs = mil::mtl_forward(&ctx, &cfg, mil::aggregate(&ctx, &cfg, &bag)?)?;
                outs.into_iter()
                    .map(|(k, v)| (k, v.value().data().iter().map(|&x| x as f64).collect::<Vec<_>>()))
                    .collect::<indexmap::IndexMap<_, _>>()
            };
            let single = mil::predict_with_resampling(&cfg, &params, &bag, &one, 77)?;
            Ok((a == b, a != c, single == plain))
        })();
        out.push(Check::from_result(
            "15-round resampling is seed-deterministic",
            rounds.as_ref().map(|r| Check::holds("", r.0 && r.1, format!("same seed equal: {}, other seed differs: {}", r.0, r.1))).map_err(|e| crate::Error::Invalid(e.to_string())),
        ));
        out.push(Check::from_result(
            "n_rounds = 1 over the full bag equals the plain forward",
            rounds.map(|r| Check::holds("", r.2, if r.2 { "bit-identical" } else { "differs" })),
        ));

        let constant = (|| -> Result<bool> {
            let mut p = params.clone();
            for t in &cfg.tasks {
                let h = mil::head_name(&t.name);
                let w = p.get_mut(&format!("{h}.weight"))?;
                *w = Tensor::zeros(w.shape());
                let b = p.get_mut(&format!("{h}.bias"))?;
                *b = Tensor::from_fn(b.shape(), |i| 0.25 * (i as f32 + 1.0));
            }
            let rs = Resampling {
                n_rounds: 15,
                tiles_per_round: Some(4),
                replacement: true,
            };
            let got = mil::predict_with_resampling(&cfg, &p, &bag, &rs, 3)?;
            Ok(got.values().all(|v| v.iter().enumerate().all(|(i, &x)| x == 0.25 * (i as f64 + 1.0))))
        })();
        out.push(Check::from_result(
            "constant model: aggregation equals the constant",
            constant.map(|ok| Check::holds("", ok, "")),
        ));

        let fd = (|| -> Result<f64> {
            let small = MilConfig {
                model_dim: 8,
                state_dim: 4,
                ..MilConfig::new(8, vec![TaskSpec::classification("t", 2)])
            };
            let p = perturbed(&mil::init::<f64>(&small, 3)?, 0.1, 93);
            let x = uniform(&[1, 4, 8], -1.0, 1.0, &mut rng(94));
            fd_input(&p, &ParamStore::new(), Mode::Eval, &x, |ctx, v| {
                let outs = mil::mtl_forward(ctx, &small, mil::aggregate_tokens(ctx, &small, v)?)?;
                loss::cross_entropy(outs["t"], &loss::one_hot(&[1], 2)?)
            })
        })();
        out.push(Check::from_result(
            "aggregate + head finite differences (4 tiles, dim 8)",
            fd.map(|v| Check::below("", v, DEEP_TOL)),
        ));
        out
    })
}
