//! Acceptance suite: criteria 1 to 7, one PASS/FAIL line each.
//!
//! Runs as a plain binary (`harness = false`) so the lines are printed even
//! when every criterion passes. The desk-scale experiment shared by
//! criteria 3 and 4 is a synthetic 10-class protocol (6 base classes, then
//! 2 sessions of 2 new classes with 5 shots), 200 training examples per
//! class, a 2-block residual MLP, 30 epochs per session, over seeds 0, 1, 2.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use fscil_cli::commands::{cmd_search, cmd_train, SearchArgs, TrainArgs};
use fscil_cli::config::ReportConfig;
use fscil_cli::report::SessionTable;
use fscil_cli::{cmd_report, ReportArgs};
use fscil_core::data::{make_synthetic, Dataset, ImageShape, SyntheticConfig};
use fscil_core::imbalance::{
    balanced_softmax_loss, cross_entropy, imbsam_step, mix_with, plain_step, ImbalancePlugin,
    SplitObjective, Targets, Technique,
};
use fscil_core::metrics::{
    cka_session_grid, confusion_matrix, fp_fn_rates, generalized_accuracy, linear_cka, predict,
    Confusion, SessionMetrics,
};
use fscil_core::model::ModelState;
use fscil_core::nn::{Act, Architecture, Grads, NamedTensor, ParamSet, Sgd, SgdConfig};
use fscil_core::protocol::{build_protocol, FscilProtocol, IncrementalData, ProtocolConfig};
use fscil_core::rng::Rng;
use fscil_core::search::{select_top, SelectMetric, TrialRecord, TrialStatus};
use fscil_core::train::{
    prepare_dataset, test_batch, train_run, AccessLog, GuardedView, RunDir, RunOptions, RunRecord,
    Strategy, TrainConfig,
};
use rand::{Rng as _, SeedableRng as _};
use rand_distr::StandardNormal;

type Check = Result<String, String>;

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn gaussian(n: usize, seed: u64) -> Vec<f32> {
    let mut rng = Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.sample::<f32, _>(StandardNormal)).collect()
}

fn random_confusion(k: usize, seed: u64) -> Confusion {
    let mut rng = Rng::seed_from_u64(seed);
    Confusion {
        classes: (0..k).collect(),
        counts: (0..k)
            .map(|_| (0..k).map(|_| rng.random_range(0..20u64)).collect())
            .collect(),
    }
}

fn scalar(v: f32) -> ParamSet {
    let mut p = ParamSet::default();
    let mut t = NamedTensor::zeros("w", vec![1]);
    t.data[0] = v;
    p.push(t);
    p
}

/// `L(w) = (head + tail) w^2`, split by class group.
struct Quadratic {
    head: f32,
    tail: f32,
}

impl Quadratic {
    fn grad(c: f32, p: &ParamSet) -> Grads {
        vec![vec![2.0 * c * p.data(0)[0]]]
    }
}

impl SplitObjective for Quadratic {
    fn full(&mut self, p: &ParamSet) -> fscil_core::Result<(f64, Grads)> {
        let w = p.data(0)[0] as f64;
        Ok(((self.head + self.tail) as f64 * w * w, Self::grad(self.head + self.tail, p)))
    }
    fn split(&mut self, p: &ParamSet) -> fscil_core::Result<(f64, Grads, Grads)> {
        let w = p.data(0)[0] as f64;
        Ok((
            (self.head + self.tail) as f64 * w * w,
            Self::grad(self.head, p),
            Self::grad(self.tail, p),
        ))
    }
    fn tail_grad(&mut self, p: &ParamSet) -> fscil_core::Result<Grads> {
        Ok(Self::grad(self.tail, p))
    }
    fn has_tail(&self) -> bool {
        self.tail != 0.0
    }
}

fn sgd(lr: f32, momentum: f32) -> Sgd {
    Sgd::new(SgdConfig {
        lr,
        momentum,
        weight_decay: 0.0,
    })
}

// ---------------------------------------------------------------- 1

fn criterion_1() -> Check {
    // aAcc = trace / total; gAcc endpoints.
    for seed in 0..20 {
        let conf = random_confusion(7, seed);
        let base: BTreeSet<usize> = (0..4).collect();
        let m = SessionMetrics::from_confusion(1, 1, conf.clone(), &base, &[0.0, 0.5, 1.0]);
        ensure(
            m.a_acc == conf.trace() as f64 / conf.total() as f64,
            "aAcc differs from trace/total",
        )?;
        ensure(
            generalized_accuracy(&conf, &base, &[1.0]) == Some(m.a_acc),
            "gAcc over {1} differs from aAcc",
        )?;
        ensure(
            generalized_accuracy(&conf, &base, &[0.0]) == m.inc_acc,
            "gAcc over {0} differs from inc_acc",
        )?;
    }

    // Balanced Softmax with uniform counts is cross-entropy.
    let (n, k) = (16, 6);
    let logits = Act::features(n, k, gaussian(n * k, 1).iter().map(|x| 3.0 * x).collect());
    let labels: Vec<usize> = (0..n).map(|i| (i * 5) % k).collect();
    let ce = cross_entropy(&logits, Targets::Hard(&labels)).map_err(err)?;
    let bs = balanced_softmax_loss(&logits, Targets::Hard(&labels), &[37; 6]).map_err(err)?;
    let grad_gap = ce
        .grad
        .data
        .iter()
        .zip(&bs.grad.data)
        .map(|(a, b)| (a - b).abs() as f64)
        .fold(0.0, f64::max);
    let bs_gap = (ce.loss - bs.loss).abs().max(grad_gap);
    ensure(bs_gap <= 1e-6, format!("Balanced Softmax vs CE gap {bs_gap:e}"))?;

    // CKA(X, X) = 1 and invariance to an orthogonal rotation.
    let (rows, d) = (128, 8);
    let x = gaussian(rows * d, 2);
    let self_cka = linear_cka(&x, d, &x, d).map_err(err)?.ok_or("undefined CKA")?;
    ensure((self_cka - 1.0).abs() <= 1e-6, format!("CKA(X,X) = {self_cka}"))?;
    let q = orthogonal(d, 3);
    let mut y = vec![0.0f32; rows * d];
    for r in 0..rows {
        for j in 0..d {
            y[r * d + j] = (0..d).map(|t| x[r * d + t] as f64 * q[t * d + j]).sum::<f64>() as f32;
        }
    }
    let rot = linear_cka(&x, d, &y, d).map_err(err)?.ok_or("undefined CKA")?;
    ensure(rot >= 1.0 - 1e-6, format!("CKA(X, XQ) = {rot}"))?;

    // ImbSAM with an empty tail is the base optimizer, bit for bit: on a
    // scalar objective and on a full base-only training run.
    for momentum in [0.0, 0.9] {
        let (mut a, mut b) = (scalar(0.8), scalar(0.8));
        let (mut oa, mut ob) = (sgd(0.05, momentum), sgd(0.05, momentum));
        for _ in 0..5 {
            imbsam_step(&mut a, &mut Quadratic { head: 1.0, tail: 0.0 }, 0.3, &mut oa).map_err(err)?;
            plain_step(&mut b, &mut Quadratic { head: 1.0, tail: 0.0 }, &mut ob).map_err(err)?;
        }
        ensure(
            a.data(0)[0].to_bits() == b.data(0)[0].to_bits(),
            "scalar ImbSAM step with empty tail differs from SGD",
        )?;
    }
    let protocol = build_protocol(&ProtocolConfig {
        total_classes: 3,
        base_classes: 3,
        ways: 0,
        sessions: 0,
        shots: 5,
        val_fraction: 0.1,
        seed: 0,
        ordering: Default::default(),
        incremental_data: Default::default(),
    })
    .map_err(err)?;
    let mut sc = SyntheticConfig::balanced(3, 40, 5, ImageShape::new(1, 2, 2), 0);
    sc.noise = 0.8;
    let ds = prepare_dataset(&make_synthetic(&sc).map_err(err)?, &protocol).map_err(err)?;
    let keep = RunOptions {
        keep_models: true,
        ..RunOptions::default()
    };
    let mut with_sam = TrainConfig::new(Strategy::JointImbalance, Architecture::res_mlp(16, 1), 3, 4);
    with_sam.batch_size = 16;
    with_sam.plugins = vec![ImbalancePlugin::new(Technique::Imbsam).with("rho", 0.5)];
    let mut without = with_sam.clone();
    without.plugins.clear();
    let a = train_run(&protocol, &ds, &with_sam, &keep).map_err(err)?;
    let b = train_run(&protocol, &ds, &without, &keep).map_err(err)?;
    let same_bits = a.models[0].params.entries.iter().zip(&b.models[0].params.entries).all(|(x, y)| {
        x.data.iter().map(|v| v.to_bits()).eq(y.data.iter().map(|v| v.to_bits()))
    });
    ensure(same_bits, "base-only ImbSAM run differs from the plain run")?;
    Ok(format!(
        "BS-CE gap {bs_gap:.1e}, CKA(X,X)-1 {:.1e}, CKA(X,XQ) {rot:.9}, empty-tail ImbSAM bitwise equal",
        self_cka - 1.0
    ))
}

/// Random orthogonal `d x d` matrix (row-major) by Gram-Schmidt.
fn orthogonal(d: usize, seed: u64) -> Vec<f64> {
    let g = gaussian(d * d, seed);
    let mut cols: Vec<Vec<f64>> = Vec::new();
    for j in 0..d {
        let mut v: Vec<f64> = (0..d).map(|i| g[i * d + j] as f64).collect();
        for u in &cols {
            let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(x, y)| *x -= dot * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        cols.push(v.iter().map(|x| x / norm).collect());
    }
    (0..d * d).map(|k| cols[k % d][k / d]).collect()
}

// ---------------------------------------------------------------- 2

fn criterion_2() -> Check {
    // Hand tally:   predicted 0 1 2
    //   class 0:              2 1 0
    //   class 1:              0 1 1
    //   class 2:              1 0 3
    let labels = [0, 0, 0, 1, 1, 2, 2, 2, 2];
    let preds = [0, 1, 0, 1, 2, 2, 2, 0, 2];
    let conf = confusion_matrix(&[0, 1, 2], &labels, &preds).map_err(err)?;
    ensure(
        conf.counts == vec![vec![2, 1, 0], vec![0, 1, 1], vec![1, 0, 3]],
        format!("confusion {:?}", conf.counts),
    )?;
    // One-vs-rest: class 0 FP 1/6 FN 1/3, class 1 FP 1/7 FN 1/2, class 2 FP 1/5 FN 1/4.
    let r = fp_fn_rates(&conf, &(0..3).collect()).ok_or("no FP/FN rates")?;
    let fp = (1.0 / 6.0 + 1.0 / 7.0 + 1.0 / 5.0) / 3.0;
    let fn_ = (1.0 / 3.0 + 1.0 / 2.0 + 1.0 / 4.0) / 3.0;
    ensure(
        (r.fp_rate - fp).abs() < 1e-12 && (r.fn_rate - fn_).abs() < 1e-12,
        format!("FP/FN {r:?}"),
    )?;

    // CMO on 8x8 images: (lambda, center) -> realized box area by hand.
    let shape = ImageShape::new(1, 8, 8);
    let bg = vec![0.0f32; 64];
    let fg = vec![1.0f32; 64];
    for (lambda, center, area) in [
        (0.75, (4, 4), 16),  // 4x4 box, fully inside
        (0.75, (0, 0), 4),   // 4x4 box clipped to 2x2
        (0.0, (4, 4), 64),   // whole image
        (0.5, (7, 1), 12),   // 5x5 box clipped to rows 5..8, cols 0..4
        (1.0, (3, 3), 0),    // empty box
        (0.9, (5, 6), 4),    // 2x2 box
    ] {
        let mixed = mix_with(&bg, &[0], &fg, &[1], shape, 2, lambda, center).map_err(err)?;
        let pasted = mixed.images.iter().filter(|&&v| v == 1.0).count();
        let expected = 1.0 - area as f64 / 64.0;
        ensure(
            mixed.cut.area() == area && pasted == area,
            format!("lambda {lambda} center {center:?}: area {} pasted {pasted}, want {area}", mixed.cut.area()),
        )?;
        ensure(
            mixed.lambda == expected
                && mixed.soft_labels[0] == expected as f32
                && mixed.soft_labels[1] == (1.0 - expected) as f32,
            format!("lambda_adj {} want {expected}", mixed.lambda),
        )?;
    }

    // Balanced Softmax gradient against central differences.
    let (n, k) = (4, 5);
    let counts = [500, 120, 30, 5, 1];
    let logits = Act::features(n, k, gaussian(n * k, 9));
    let labels = [0usize, 3, 4, 1];
    let out = balanced_softmax_loss(&logits, Targets::Hard(&labels), &counts).map_err(err)?;
    let h = 1e-2f32;
    let mut num = Vec::with_capacity(n * k);
    for i in 0..n * k {
        let mut plus = logits.clone();
        let mut minus = logits.clone();
        plus.data[i] += h;
        minus.data[i] -= h;
        let lp = balanced_softmax_loss(&plus, Targets::Hard(&labels), &counts).map_err(err)?.loss;
        let lm = balanced_softmax_loss(&minus, Targets::Hard(&labels), &counts).map_err(err)?.loss;
        num.push((lp - lm) / (2.0 * h as f64));
    }
    let diff: f64 = num
        .iter()
        .zip(&out.grad.data)
        .map(|(a, &b)| (a - b as f64).powi(2))
        .sum::<f64>()
        .sqrt();
    let scale: f64 = num.iter().map(|a| a * a).sum::<f64>().sqrt();
    let rel = diff / scale;
    ensure(rel < 1e-3, format!("Balanced Softmax gradient relative error {rel:e}"))?;

    // ImbSAM on L(w) = w^2, all tail: w = 1 - 0.1 * 2 * (1 + 0.5) = 0.7.
    let mut w = scalar(1.0);
    imbsam_step(&mut w, &mut Quadratic { head: 0.0, tail: 1.0 }, 0.5, &mut sgd(0.1, 0.0)).map_err(err)?;
    ensure(w.data(0)[0] == 0.7f32, format!("ImbSAM trace gives w = {}", w.data(0)[0]))?;
    Ok(format!(
        "confusion and FP/FN match the hand tally, 6 CMO boxes exact, BS grad rel err {rel:.1e}, ImbSAM w = {}",
        w.data(0)[0]
    ))
}

// ---------------------------------------------------------------- 3 and 4

const DESK_SEEDS: [u64; 3] = [0, 1, 2];

fn desk_protocol(data: IncrementalData) -> FscilProtocol {
    build_protocol(&ProtocolConfig {
        total_classes: 10,
        base_classes: 6,
        ways: 2,
        sessions: 2,
        shots: 5,
        val_fraction: 0.1,
        seed: 0,
        ordering: Default::default(),
        incremental_data: data,
    })
    .expect("desk protocol")
}

fn desk_dataset(seed: u64, protocol: &FscilProtocol) -> Dataset {
    let mut sc = SyntheticConfig::balanced(10, 200, 100, ImageShape::new(1, 8, 8), seed);
    sc.noise = 1.25;
    prepare_dataset(&make_synthetic(&sc).expect("synthetic data"), protocol).expect("normalize")
}

fn desk_config(plugins: Vec<ImbalancePlugin>, seed: u64) -> TrainConfig {
    let strategy = if plugins.is_empty() {
        Strategy::JointStandard
    } else {
        Strategy::JointImbalance
    };
    let mut c = TrainConfig::new(strategy, Architecture::res_mlp(64, 2), 30, seed);
    c.lr.initial = 0.05;
    c.lr.milestones = vec![20];
    c.plugins = plugins;
    c
}

fn ladder() -> Vec<(&'static str, Vec<ImbalancePlugin>)> {
    let cmo = ImbalancePlugin::new(Technique::Cmo);
    let bs = ImbalancePlugin::new(Technique::BalancedSoftmax);
    let sam = ImbalancePlugin::new(Technique::Imbsam);
    vec![
        ("none", vec![]),
        ("+CMO", vec![cmo.clone()]),
        ("+BS", vec![cmo.clone(), bs.clone()]),
        ("+ImbSAM", vec![cmo, bs, sam]),
    ]
}

#[derive(Default, Clone, Copy)]
struct Scores {
    base: f64,
    inc: f64,
    g_acc: f64,
}

/// Last-session base and incremental accuracy; gAcc averaged over the
/// incremental sessions.
fn scores(r: &RunRecord) -> Scores {
    let last = &r.sessions.last().expect("sessions").metrics;
    let g: Vec<f64> = r.sessions[1..].iter().filter_map(|s| s.metrics.g_acc).collect();
    Scores {
        base: last.base_acc.unwrap_or(0.0),
        inc: last.inc_acc.unwrap_or(0.0),
        g_acc: g.iter().sum::<f64>() / g.len().max(1) as f64,
    }
}

struct DeskRuns {
    /// Per ladder step, scores averaged over seeds.
    ladder: Vec<(&'static str, Scores)>,
    /// Per seed: (standard, full imbalance-aware) session models.
    models: Vec<(Vec<ModelState>, Vec<ModelState>)>,
    seconds: f64,
}

fn desk_runs() -> Result<DeskRuns, String> {
    let started = Instant::now();
    let protocol = desk_protocol(IncrementalData::FewShot);
    let steps = ladder();
    let mut sums = vec![Scores::default(); steps.len()];
    let mut models = Vec::new();
    let keep = RunOptions {
        keep_models: true,
        ..RunOptions::default()
    };
    for seed in DESK_SEEDS {
        let ds = desk_dataset(seed, &protocol);
        let mut kept = (Vec::new(), Vec::new());
        for (k, (_, plugins)) in steps.iter().enumerate() {
            let r = train_run(&protocol, &ds, &desk_config(plugins.clone(), seed), &keep).map_err(err)?;
            let s = scores(&r);
            sums[k].base += s.base / DESK_SEEDS.len() as f64;
            sums[k].inc += s.inc / DESK_SEEDS.len() as f64;
            sums[k].g_acc += s.g_acc / DESK_SEEDS.len() as f64;
            if k == 0 {
                kept.0 = r.models;
            } else if k == steps.len() - 1 {
                kept.1 = r.models;
            }
        }
        models.push(kept);
    }
    Ok(DeskRuns {
        ladder: steps.iter().map(|(n, _)| *n).zip(sums).collect(),
        models,
        seconds: started.elapsed().as_secs_f64(),
    })
}

fn criterion_3(runs: &DeskRuns) -> Check {
    let std = runs.ladder[0].1;
    let imb = runs.ladder.last().expect("ladder").1;
    let pct = |x: f64| 100.0 * x;
    let steps: Vec<String> = runs
        .ladder
        .iter()
        .map(|(n, s)| format!("{n} {:.1}", pct(s.g_acc)))
        .collect();
    let detail = format!(
        "std base {:.1} inc {:.1} | imb inc {:+.1} pts, gAcc {:+.1} pts | ladder gAcc {} | {:.0}s",
        pct(std.base),
        pct(std.inc),
        pct(imb.inc - std.inc),
        pct(imb.g_acc - std.g_acc),
        steps.join(" -> "),
        runs.seconds
    );
    ensure(std.inc < 0.10 && std.base > 0.70, format!("(a) fails: {detail}"))?;
    ensure(
        imb.inc - std.inc >= 0.15 && imb.g_acc - std.g_acc >= 0.05,
        format!("(b) fails: {detail}"),
    )?;
    let monotone = runs
        .ladder
        .windows(2)
        .all(|w| w[1].1.g_acc >= w[0].1.g_acc - 0.02);
    ensure(monotone, format!("(c) fails: {detail}"))?;
    ensure(runs.seconds < 20.0 * 60.0, format!("too slow: {detail}"))?;
    Ok(detail)
}

/// Mean diagonal CKA over the incremental sessions against a joint model
/// trained on balanced data (every training example of every class).
fn criterion_4(runs: &DeskRuns) -> Check {
    let started = Instant::now();
    let protocol = desk_protocol(IncrementalData::FewShot);
    let balanced = desk_protocol(IncrementalData::Full);
    let keep = RunOptions {
        keep_models: true,
        ..RunOptions::default()
    };
    let (mut imb_sum, mut std_sum) = (0.0, 0.0);
    let mut per_seed = Vec::new();
    for (seed, (std_models, imb_models)) in DESK_SEEDS.iter().zip(&runs.models) {
        let ds = desk_dataset(*seed, &protocol);
        // An independent initialization, so neither family shares it.
        let reference = train_run(&balanced, &ds, &desk_config(vec![], seed + 1000), &keep).map_err(err)?;
        let (images, _) = test_batch(&protocol, &ds, protocol.num_sessions() - 1).map_err(err)?;
        let a = cka_session_grid(imb_models, &reference.models, &images, ("imb", "balanced")).map_err(err)?;
        let b = cka_session_grid(std_models, &reference.models, &images, ("std", "balanced")).map_err(err)?;
        let ia = a.diagonal_mean_from(1).ok_or("undefined CKA")?;
        let sb = b.diagonal_mean_from(1).ok_or("undefined CKA")?;
        per_seed.push(format!("{ia:.3}/{sb:.3}"));
        imb_sum += ia / DESK_SEEDS.len() as f64;
        std_sum += sb / DESK_SEEDS.len() as f64;
    }
    let seconds = started.elapsed().as_secs_f64() + runs.seconds / 2.0;
    let detail = format!(
        "CKA to balanced joint: imb {imb_sum:.3} vs std {std_sum:.3} (per seed imb/std {}) | ~{seconds:.0}s",
        per_seed.join(", ")
    );
    ensure(imb_sum > std_sum, detail.clone())?;
    ensure(seconds < 10.0 * 60.0, format!("too slow: {detail}"))?;
    Ok(detail)
}

// ---------------------------------------------------------------- 5

fn criterion_5() -> Check {
    let cfg = ProtocolConfig {
        total_classes: 5,
        base_classes: 3,
        ways: 1,
        sessions: 2,
        shots: 3,
        val_fraction: 0.1,
        seed: 4,
        ordering: Default::default(),
        incremental_data: Default::default(),
    };
    let protocol = build_protocol(&cfg).map_err(err)?;
    // Uneven class sizes exercise the per-class rounding.
    let mut sc = SyntheticConfig::balanced(5, 40, 8, ImageShape::new(1, 2, 2), 2);
    sc.train_per_class = BTreeMap::from([(0, 40), (1, 25), (2, 61), (3, 30), (4, 30)]);
    sc.noise = 0.6;
    let ds = prepare_dataset(&make_synthetic(&sc).map_err(err)?, &protocol).map_err(err)?;

    // Guard: no strategy reads a test example or a held-out example.
    let mut allowed = BTreeSet::new();
    for s in 0..protocol.num_sessions() {
        allowed.extend(protocol.session_view(&ds, s).map_err(err)?.train_indices);
    }
    let base = protocol.session_view(&ds, 0).map_err(err)?;
    let val: BTreeSet<usize> = base.val_indices.iter().copied().collect();
    let strategies = [
        (Strategy::JointStandard, vec![]),
        (
            Strategy::JointImbalance,
            vec![
                ImbalancePlugin::new(Technique::Cmo).with("cooldown_epochs", 0.0),
                ImbalancePlugin::new(Technique::BalancedSoftmax),
                ImbalancePlugin::new(Technique::Imbsam),
            ],
        ),
        (
            Strategy::JointImbalance,
            vec![
                ImbalancePlugin::new(Technique::BalancedSampler),
                ImbalancePlugin::new(Technique::ClassBalanced),
            ],
        ),
        (Strategy::IncrPrototype, vec![]),
        (Strategy::IncrFinetune, vec![]),
    ];
    let mut reads = 0;
    for (strategy, plugins) in strategies {
        let mut c = TrainConfig::new(strategy, Architecture::res_mlp(16, 1), 3, 1);
        c.batch_size = 16;
        c.plugins = plugins;
        let log = AccessLog::default();
        train_run(
            &protocol,
            &ds,
            &c,
            &RunOptions {
                audit: Some(log.clone()),
                ..RunOptions::default()
            },
        )
        .map_err(err)?;
        let read = log.lock().map_err(err)?.clone();
        ensure(!read.is_empty(), format!("{} read nothing", strategy.name()))?;
        ensure(
            read.iter().all(|&i| i < ds.num_train()),
            format!("{} read a test example", strategy.name()),
        )?;
        ensure(read.is_subset(&allowed), format!("{} read outside its sessions", strategy.name()))?;
        ensure(read.is_disjoint(&val), format!("{} read a validation example", strategy.name()))?;
        reads += read.len();
    }
    let test_index = ds.num_train();
    let guarded = GuardedView::new(&ds, &base.train_indices, None);
    ensure(
        matches!(
            guarded.gather(&[test_index]),
            Err(fscil_core::Error::ProtocolViolation(_))
        ),
        "guarded view served a test example",
    )?;

    // 9:1 split: per class, deterministic, seed-dependent.
    for &c in protocol.session_classes(0) {
        let n = sc.train_per_class[&c];
        let v = base.val_indices.iter().filter(|&&i| ds.label(i) == c).count();
        let t = base.train_indices.iter().filter(|&&i| ds.label(i) == c).count();
        ensure(
            v == (n as f64 * 0.1).round() as usize && v + t == n,
            format!("class {c}: {v} val + {t} train of {n}"),
        )?;
    }
    let again = build_protocol(&cfg).map_err(err)?.session_view(&ds, 0).map_err(err)?;
    ensure(again == base, "split is not deterministic")?;
    let reseeded = build_protocol(&ProtocolConfig { seed: 5, ..cfg.clone() })
        .map_err(err)?
        .session_view(&ds, 0)
        .map_err(err)?;
    ensure(reseeded.val_indices != base.val_indices, "split ignores the seed")?;

    // The final epoch is the model of record even when an earlier checkpoint
    // scores higher; no validation split exists to select with.
    let no_val = build_protocol(&ProtocolConfig {
        val_fraction: 0.0,
        ..cfg.clone()
    })
    .map_err(err)?;
    ensure(
        no_val.session_view(&ds, 0).map_err(err)?.val_indices.is_empty(),
        "val split present at fraction 0",
    )?;
    let tmp = tempfile::tempdir().map_err(err)?;
    let mut c = TrainConfig::new(Strategy::JointStandard, Architecture::res_mlp(16, 1), 6, 3);
    c.batch_size = 16;
    c.checkpoint_epochs = vec![1, 2, 3, 4, 5];
    let rec = train_run(
        &no_val,
        &ds,
        &c,
        &RunOptions {
            run_dir: Some(tmp.path().join("run")),
            ..RunOptions::default()
        },
    )
    .map_err(err)?;
    let run = RunDir::new(tmp.path().join("run"));
    for s in &rec.sessions {
        ensure(s.metrics.epoch == 6, "model of record is not the final epoch")?;
        let model = ModelState::load_checkpoint(&run.resolve(s.checkpoint.as_deref().ok_or("no ckpt")?))
            .map_err(err)?;
        ensure(model.meta.epoch == 6, "final checkpoint is not from the last epoch")?;
        let (images, labels) = test_batch(&no_val, &ds, s.session_index).map_err(err)?;
        let preds = predict(&model, &images, 64).map_err(err)?;
        let conf = confusion_matrix(&model.meta.classes, &labels, &preds).map_err(err)?;
        ensure(conf == s.metrics.confusion, "stored metrics differ from the final checkpoint")?;
    }
    Ok(format!(
        "5 strategies read {reads} indices, none test or validation; split exact per class and seeded; final epoch is of record"
    ))
}

// ---------------------------------------------------------------- 6

fn repo_file(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

fn trial_without_time(r: &TrialRecord) -> TrialRecord {
    TrialRecord { seconds: 0.0, ..r.clone() }
}

fn criterion_6() -> Check {
    let started = Instant::now();
    let tmp = tempfile::tempdir().map_err(err)?;
    let config = repo_file("configs/desk.toml");
    let cfg = fscil_cli::load_config(&config).map_err(err)?;
    let search = cfg.search.clone().ok_or("desk config has no search block")?;
    ensure(search.trials == 30, "desk search is not 30 trials")?;
    let args = |out: &Path| SearchArgs {
        config: config.clone(),
        output: Some(out.to_path_buf()),
        workers: Some(4),
        scale: Some(0.1),
        ..SearchArgs::default()
    };

    // Interrupted after 12 trials per technique, then resumed.
    let resumed_dir = tmp.path().join("resumed");
    let (_, partial) = cmd_search(&SearchArgs {
        max_trials: Some(12),
        ..args(&resumed_dir)
    })
    .map_err(err)?;
    ensure(partial.is_none(), "partial search produced a summary")?;
    let early: Vec<Vec<u8>> = (0..12)
        .map(|i| fs::read(resumed_dir.join(format!("cmo/trial_{i:03}.json"))))
        .collect::<Result<_, _>>()
        .map_err(err)?;
    let (_, summary) = cmd_search(&SearchArgs {
        resume: true,
        ..args(&resumed_dir)
    })
    .map_err(err)?;
    let summary = summary.ok_or("resumed search is incomplete")?;
    for (i, bytes) in early.iter().enumerate() {
        let now = fs::read(resumed_dir.join(format!("cmo/trial_{i:03}.json"))).map_err(err)?;
        ensure(&now == bytes, format!("trial {i} was rerun on resume"))?;
    }

    // The same search in one go gives the same trials.
    let fresh_dir = tmp.path().join("fresh");
    let (_, fresh) = cmd_search(&args(&fresh_dir)).map_err(err)?;
    let fresh = fresh.ok_or("fresh search is incomplete")?;
    let mut total = 0;
    for t in &search.techniques {
        let a = fscil_core::search::load_search(&resumed_dir.join(t.name())).map_err(err)?;
        let b = fscil_core::search::load_search(&fresh_dir.join(t.name())).map_err(err)?;
        ensure(a.len() == 30 && b.len() == 30, format!("{t}: {} and {} trials", a.len(), b.len()))?;
        let same = a.iter().map(trial_without_time).eq(b.iter().map(trial_without_time));
        ensure(same, format!("{t}: resumed trials differ from an uninterrupted search"))?;
        total += a.iter().filter(|r| r.succeeded()).count();
    }
    ensure(summary.winners == fresh.winners, "winners differ after resume")?;

    // The composed config trains end to end.
    let composed = resumed_dir.join(summary.composed_config.as_deref().ok_or("no composed config")?);
    let (_, record) = cmd_train(&TrainArgs {
        config: composed,
        output: Some(tmp.path().join("composed_run")),
        scale: Some(0.1),
        ..TrainArgs::default()
    })
    .map_err(err)?;
    ensure(record.sessions.len() == 3, "composed run did not finish")?;
    let label = record.config.plugin_set().map_err(err)?.label();

    // Top-5 by aAcc on synthetic records, ties to the lower trial id.
    let mut rng = Rng::seed_from_u64(11);
    let records: Vec<TrialRecord> = (0..30)
        .map(|id| {
            let a = (rng.random_range(0..20) as f64) / 20.0;
            synthetic_record(id, a, 1.0 - a, id % 7 == 3)
        })
        .collect();
    let top = select_top(&records, SelectMetric::AAcc, 5).map_err(err)?;
    let mut expected: Vec<&TrialRecord> = records.iter().filter(|r| r.succeeded()).collect();
    expected.sort_by(|x, y| {
        let (a, b) = (x.metrics.as_ref().unwrap().a_acc, y.metrics.as_ref().unwrap().a_acc);
        b.total_cmp(&a).then(x.trial_id.cmp(&y.trial_id))
    });
    let want: Vec<usize> = expected.iter().take(5).map(|r| r.trial_id).collect();
    let got: Vec<usize> = top.iter().map(|r| r.trial_id).collect();
    ensure(got == want, format!("top-5 {got:?}, want {want:?}"))?;
    Ok(format!(
        "3 x 30 trials ({total} ok) resumed after 12 identical to uninterrupted; composed {label} trains; top-5 {got:?} | {:.0}s",
        started.elapsed().as_secs_f64()
    ))
}

fn synthetic_record(id: usize, a_acc: f64, g_acc: f64, failed: bool) -> TrialRecord {
    let conf = Confusion {
        classes: vec![0, 1],
        counts: vec![vec![1, 0], vec![0, 1]],
    };
    let mut m = SessionMetrics::from_confusion(1, 1, conf, &[0].into_iter().collect(), &[0.5]);
    m.a_acc = a_acc;
    m.g_acc = Some(g_acc);
    TrialRecord {
        trial_id: id,
        technique: Technique::Cmo,
        category: Technique::Cmo.category(),
        hyperparams: BTreeMap::new(),
        seed: id as u64,
        status: if failed {
            TrialStatus::Failed {
                reason: "non-finite loss".into(),
            }
        } else {
            TrialStatus::Ok
        },
        metrics: (!failed).then_some(m),
        seconds: 0.0,
    }
}

// ---------------------------------------------------------------- 7

fn criterion_7() -> Check {
    let tmp = tempfile::tempdir().map_err(err)?;
    let imb_cfg = repo_file("configs/quickstart.toml");
    let text = fs::read_to_string(&imb_cfg).map_err(err)?;
    let std_text = text
        .replace("strategy = \"joint_imbalance\"", "strategy = \"joint_standard\"")
        .split("plugins = [")
        .next()
        .ok_or("unexpected quickstart layout")?
        .to_string();
    let std_cfg = tmp.path().join("std.toml");
    fs::write(&std_cfg, std_text).map_err(err)?;
    let mut dirs = Vec::new();
    for (name, cfg) in [("Std. Joint", &std_cfg), ("Imb. Joint", &imb_cfg)] {
        let out = tmp.path().join(name);
        cmd_train(&TrainArgs {
            config: cfg.clone(),
            output: Some(out.clone()),
            ..TrainArgs::default()
        })
        .map_err(err)?;
        dirs.push(out);
    }
    let out = tmp.path().join("report");
    let bundle = cmd_report(&ReportArgs {
        runs: dirs.clone(),
        output: out.clone(),
        report: ReportConfig {
            cka: true,
            ..ReportConfig::default()
        },
    })
    .map_err(err)?;

    // Shape: Method, Config, S0..S2, Base, Inc., aAcc, gAcc; one row per run.
    let headers = bundle.table.headers();
    ensure(
        headers == ["Method", "Config", "S0", "S1", "S2", "Base", "Inc.", "aAcc", "gAcc"],
        format!("headers {headers:?}"),
    )?;
    let csv = fs::read_to_string(out.join("table.csv")).map_err(err)?;
    let md = fs::read_to_string(out.join("table.md")).map_err(err)?;
    let csv_rows: Vec<Vec<&str>> = csv.lines().skip(1).map(|l| l.split(',').collect()).collect();
    let md_rows: Vec<Vec<String>> = md
        .lines()
        .skip(2)
        .map(|l| {
            l.trim_matches('|')
                .split('|')
                .map(|c| c.trim().replace("**", "").replace("<u>", "").replace("</u>", ""))
                .collect()
        })
        .collect();
    ensure(csv_rows.len() == 2 && md_rows.len() == 2, "table rows != runs")?;
    let mut cells = 0;
    for ((csv_row, md_row), dir) in csv_rows.iter().zip(&md_rows).zip(&dirs) {
        let run = RunDir::new(dir);
        let summary = run.load_summary().map_err(err)?;
        let metrics = run.load_metrics().map_err(err)?;
        let last = metrics.last().ok_or("no metrics")?;
        let mut stored: Vec<f64> = metrics.iter().map(|m| m.a_acc).collect();
        stored.extend([
            last.base_acc.ok_or("no base")?,
            last.inc_acc.ok_or("no inc")?,
            summary.mean_a_acc,
            summary.mean_g_acc.ok_or("no gAcc")?,
        ]);
        ensure(summary.a_acc == stored[..3], "summary disagrees with metrics.jsonl")?;
        for (k, v) in stored.iter().enumerate() {
            let c: f64 = csv_row[k + 2].parse().map_err(err)?;
            ensure(c == *v, format!("CSV cell {} = {c}, stored {v}", headers[k + 2]))?;
            ensure(
                md_row[k + 2] == format!("{:.1}", 100.0 * v),
                format!("text cell {} = {}, stored {v}", headers[k + 2], md_row[k + 2]),
            )?;
            cells += 1;
        }
    }
    ensure(md.contains("**") && md.contains("<u>"), "best/second-best styling missing")?;
    let values = |r: &fscil_cli::report::TableRow| SessionTable::values(r);
    ensure(
        bundle.table.rows.iter().all(|r| values(r).iter().all(Option::is_some)),
        "undefined cells in a complete table",
    )?;

    // Curves: one point per checkpoint epoch plus the final model, time
    // ascending, on a log time axis.
    for c in &bundle.curves {
        let epochs: Vec<usize> = c.points.iter().map(|p| p.epoch).collect();
        ensure(epochs == [2, 5, 10], format!("{}: curve epochs {epochs:?}", c.label))?;
        ensure(
            c.points.windows(2).all(|w| w[0].seconds <= w[1].seconds),
            "curve time axis is not monotone",
        )?;
    }
    let svg = fs::read_to_string(out.join("curves.svg")).map_err(err)?;
    ensure(svg.contains("log scale"), "curve x axis is not labelled log scale")?;
    for panel in ["aAcc", "gAcc", "Base", "Inc."] {
        ensure(svg.contains(&format!("{panel} (%)")), format!("missing {panel} panel"))?;
    }
    ensure(!bundle.cka.is_empty() && out.join("cka_Std__Joint_vs_Imb__Joint.svg").exists(), "CKA heatmap missing")?;
    Ok(format!(
        "{cells} cells equal stored metrics (CSV exact, text to 0.1); curves {:?} on log time; {} files",
        bundle.curves[0].points.iter().map(|p| p.epoch).collect::<Vec<_>>(),
        bundle.files.len()
    ))
}

// ----------------------------------------------------------------

fn run(id: usize, name: &str, limit: Option<f64>, f: impl FnOnce() -> Check) -> bool {
    let started = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into()))
    });
    let secs = started.elapsed().as_secs_f64();
    let outcome = match (outcome, limit) {
        (Ok(d), Some(l)) if secs > l => Err(format!("{d} (took {secs:.0}s, limit {l:.0}s)")),
        (o, _) => o,
    };
    let (tag, detail) = match &outcome {
        Ok(d) => ("PASS", d),
        Err(d) => ("FAIL", d),
    };
    println!("[{tag}] criterion {id}: {name} ({secs:.1}s): {detail}");
    outcome.is_ok()
}

fn main() -> ExitCode {
    let mut ok = true;
    ok &= run(1, "metric identities", Some(60.0), criterion_1);
    ok &= run(2, "oracle equivalences", Some(60.0), criterion_2);
    let desk = desk_runs();
    match &desk {
        Ok(runs) => {
            ok &= run(3, "directional reproduction at desk scale", None, || criterion_3(runs));
            ok &= run(4, "CKA to balanced joint training", None, || criterion_4(runs));
        }
        Err(e) => {
            println!("[FAIL] criterion 3: directional reproduction at desk scale: {e}");
            println!("[FAIL] criterion 4: CKA to balanced joint training: {e}");
            ok = false;
        }
    }
    ok &= run(5, "protocol compliance", None, criterion_5);
    ok &= run(6, "search harness", None, criterion_6);
    ok &= run(7, "report fidelity", None, criterion_7);
    if ok {
        println!("acceptance: all criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: FAILED");
        ExitCode::FAILURE
    }
}
