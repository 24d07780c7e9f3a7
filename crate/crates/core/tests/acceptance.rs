//! End-to-end acceptance checks. Each test prints one PASS/FAIL line.
//!
//! The heavier checks share one classifier, score model and guidance
//! purifier trained on the 16x16 shapes data.

mod common;

use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::{Duration, Instant};

use common::ot::{golden_min, primal_2x2, scalar_barycentric};
use common::toy;
use oap_core::attacks::{AttackMethod, AttackSpec, Defense, Norm, Surrogate, ThreatModel};
use oap_core::diffusion::process::{self, ChainNoise};
use oap_core::diffusion::{forward_diffuse, DiffusionDefense, DiffusionSchedule, ScoreFn};
use oap_core::dualpath::*;
use oap_core::granularity::{granularity_experiment, Granularity};
use oap_core::harness::{bench_time_cost, BenchPlan};
use oap_core::models::{train_score_model, Purifier, ScoreModel, TrainConfig};
use oap_core::numcore::Tensor;
use oap_core::oap::{build_oap_dataset, gen_reference_point, train_baseline_purifier, train_noise_conditioned_purifier, OapConfig};
use oap_core::rng;
use rand::Rng;

const EPS: f32 = 8.0 / 255.0;
const T_STAR: usize = 20;
const ETA: f32 = 0.05;

/// Timings and runtime bounds assume one test at a time.
fn exclusive() -> MutexGuard<'static, ()> {
    static LOCK: Mutex<()> = Mutex::new(());
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

fn report(name: &str, pass: bool, took: Duration, detail: String) {
    println!("{} {name}: {detail} [{:.1}s]", if pass { "PASS" } else { "FAIL" }, took.as_secs_f64());
}

fn linf(steps: usize) -> ThreatModel {
    ThreatModel::linf(EPS, steps)
}

fn score_model() -> &'static ScoreModel {
    static S: OnceLock<ScoreModel> = OnceLock::new();
    S.get_or_init(|| {
        let cfg = TrainConfig { epochs: 40, batch_size: 32, lr: 2e-3, seed: 2, noise_augment: 0.0 };
        train_score_model(&toy::shapes_train().inputs, &DiffusionSchedule::standard(), 32, 100, &cfg).unwrap().0
    })
}

/// Noise-conditioned purifier toward one-step OAP targets.
fn guide() -> &'static Purifier {
    static G: OnceLock<Purifier> = OnceLock::new();
    G.get_or_init(|| {
        let ds = build_oap_dataset(toy::classifier(), toy::shapes_train(), &OapConfig::new(EPS), &linf(10), 0).unwrap();
        let cfg = TrainConfig { epochs: 10, batch_size: 32, lr: 2e-3, seed: 0, noise_augment: 0.0 };
        train_noise_conditioned_purifier(&ds, &DiffusionSchedule::standard(), T_STAR, 16, &cfg).unwrap().0
    })
}

fn diffusion_defense() -> DiffusionDefense {
    DiffusionDefense::new(DiffusionSchedule::standard(), ScoreFn::Network(score_model().clone()), T_STAR).unwrap()
}

fn dual_defense() -> &'static DualPathDefense {
    static D: OnceLock<DualPathDefense> = OnceLock::new();
    D.get_or_init(|| {
        let bank = TargetBank::build(toy::classifier(), toy::shapes_train(), &OapConfig::new(EPS)).unwrap();
        DualPathDefense::new(
            DiffusionSchedule::standard(),
            ScoreFn::Network(score_model().clone()),
            T_STAR,
            Some((guide().clone(), ETA)),
            bank,
            DualPathConfig::default(),
        )
        .unwrap()
    })
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// One-sided sign-test p-value: `P(X >= wins)` for `X ~ Bin(n, 1/2)`.
fn sign_test(wins: usize, n: usize) -> f64 {
    let ln_choose = |k: usize| (0..k).map(|i| ((n - i) as f64).ln() - ((i + 1) as f64).ln()).sum::<f64>();
    (wins..=n).map(|k| (ln_choose(k) - n as f64 * 2f64.ln()).exp()).sum()
}

#[test]
fn gradient_fidelity() {
    let _serial = exclusive();
    let start = Instant::now();
    let mut worst = (0.0f64, "");
    for c in common::all_checks() {
        for seed in 0..10 {
            let e = common::gradcheck(&c, seed);
            if e > worst.0 {
                worst = (e, c.name);
            }
        }
    }
    let took = start.elapsed();
    let pass = worst.0 < 1e-3 && took < Duration::from_secs(60);
    report("gradient fidelity", pass, took, format!("worst relative error {:.2e} ({})", worst.0, worst.1));
    assert!(pass);
}

#[test]
fn attack_contract() {
    let _serial = exclusive();
    let start = Instant::now();
    let f = toy::classifier();
    let test = toy::shapes_test(1000);
    let defense = DiffusionDefense::new(
        DiffusionSchedule::standard(),
        ScoreFn::Gaussian { mean: Tensor::full(&[1, 1, 16, 16], 0.5), var: 0.1 },
        5,
    )
    .unwrap();
    let (mut total, mut bad) = (0usize, 0usize);
    let methods = [
        AttackSpec::new(AttackMethod::Pgd, linf(5)),
        AttackSpec::new(AttackMethod::PgdEot, linf(5)).with_eot(2).with_surrogate(Surrogate::Exact),
        AttackSpec::new(AttackMethod::BpdaEot, linf(5)).with_eot(2),
        AttackSpec { spsa_samples: 8, ..AttackSpec::new(AttackMethod::Spsa, linf(5)) },
    ];
    for spec in methods {
        for norm in [Norm::Linf, Norm::L2] {
            let mut spec = spec.clone();
            if norm == Norm::L2 {
                spec.threat = ThreatModel::l2(0.5, 5);
            }
            let r = spec.run(&defense, f, &test.inputs, &test.labels, 11).unwrap();
            assert_eq!(r.adv.shape(), test.inputs.shape());
            for i in 0..test.len() {
                total += 1;
                let (adv, x) = (r.adv.select(i), test.inputs.select(i));
                if !(spec.threat.admits(&adv, &x) && adv.data().iter().all(|v| (0.0..=1.0).contains(v))) {
                    bad += 1;
                }
            }
        }
    }
    let took = start.elapsed();
    let pass = bad == 0 && took < Duration::from_secs(300);
    report("attack contract", pass, took, format!("{} of {total} adversarial images violate their ball or range", bad));
    assert!(pass);
}

#[test]
fn opposite_steps_restore_robustness() {
    let _serial = exclusive();
    let start = Instant::now();
    let f = toy::classifier();
    let test = toy::shapes_test(300);
    let clean = f.accuracy(&test.inputs, &test.labels).unwrap();
    let mut robust = Vec::new();
    for k in [0, 1, 3, 5, 10] {
        let xk = gen_reference_point(f, &test.inputs, &test.labels, &OapConfig::new(EPS).with_k(k)).unwrap();
        let r = AttackSpec::new(AttackMethod::Pgd, linf(10)).run(&oap_core::attacks::NoDefense, f, &xk, &test.labels, 3).unwrap();
        robust.push(1.0 - r.success_rate());
    }
    let took = start.elapsed();
    let monotone = robust.windows(2).all(|w| w[1] >= w[0] - 0.01);
    let pass = monotone && robust[4] >= 0.95 * clean && took < Duration::from_secs(600);
    let shown: Vec<String> = robust.iter().map(|r| format!("{:.1}", 100.0 * r)).collect();
    report("OAP K-sweep", pass, took, format!("clean {:.1}%, robust over K=0,1,3,5,10: {}", 100.0 * clean, shown.join(" ")));
    assert!(pass);
}

#[test]
fn one_opposite_step_trains_the_best_purifier() {
    let _serial = exclusive();
    let start = Instant::now();
    let f = toy::classifier();
    let (train, test) = (toy::shapes_train(), toy::shapes_test(300));
    let mut by_k = Vec::new();
    for k in [0, 1, 3] {
        let mut accs = Vec::new();
        for seed in 0..3 {
            let ds = build_oap_dataset(f, train, &OapConfig::new(EPS).with_k(k), &linf(10), seed).unwrap();
            let cfg = TrainConfig { epochs: 10, batch_size: 32, lr: 2e-3, seed, noise_augment: 0.0 };
            let (p, _) = train_baseline_purifier(&ds, 16, &cfg).unwrap();
            let r = AttackSpec::new(AttackMethod::Pgd, linf(10)).run(&p, f, &test.inputs, &test.labels, seed).unwrap();
            accs.push(1.0 - r.success_rate());
        }
        by_k.push(mean(&accs));
    }
    let took = start.elapsed();
    let pass = by_k[1] >= by_k[0] + 0.05 && by_k[2] <= by_k[1] + 0.02 && took < Duration::from_secs(1800);
    report(
        "purifier K",
        pass,
        took,
        format!("mean robust K=0 {:.1}%, K=1 {:.1}%, K=3 {:.1}%", 100.0 * by_k[0], 100.0 * by_k[1], 100.0 * by_k[2]),
    );
    assert!(pass);
}

#[test]
fn diffusion_marginals_and_oracle_sampling() {
    let _serial = exclusive();
    let start = Instant::now();
    let s = DiffusionSchedule::standard();
    let n = 10_000;
    let mut ok = true;
    for t in [1usize, 10, 100, 500, 1000] {
        let x0 = Tensor::full(&[n, 1], 0.7);
        let eps = Tensor::randn(&[n, 1], &mut rng::stream(t as u64));
        let xt = forward_diffuse(&x0, t, &s, &eps).unwrap();
        let m = xt.data().iter().map(|&v| v as f64).sum::<f64>() / n as f64;
        let v = xt.data().iter().map(|&x| (x as f64 - m).powi(2)).sum::<f64>() / (n - 1) as f64;
        let (want_m, want_v) = (s.alpha_bar[t].sqrt() * 0.7, 1.0 - s.alpha_bar[t]);
        ok &= (m - want_m).abs() <= 3.0 * (want_v / n as f64).sqrt() + 1e-6;
        ok &= (v - want_v).abs() <= 3.0 * want_v * (2.0 / (n - 1) as f64).sqrt() + 1e-9;
    }
    let (mu, var) = (0.6f32, 0.01f64);
    let score = ScoreFn::Gaussian { mean: Tensor::full(&[1, 1], mu), var };
    let noise = ChainNoise::draw(&[n, 1], s.horizon, 3).unwrap();
    let out = process::reverse_chain(&s, &score, None, &noise.eps, &noise).unwrap();
    let got = out.data().iter().map(|&v| v as f64).sum::<f64>() / n as f64;
    let mean_ok = (got - mu as f64).abs() <= 3.0 * (var / n as f64).sqrt();
    let took = start.elapsed();
    let pass = ok && mean_ok && took < Duration::from_secs(300);
    report("diffusion", pass, took, format!("marginals {}, sampled mean {got:.4} vs {mu}", if ok { "ok" } else { "off" }));
    assert!(pass);
}

#[test]
fn guidance_is_consistent_and_pulls_toward_targets() {
    let _serial = exclusive();
    let start = Instant::now();
    let f = toy::classifier();
    let test = toy::shapes_test(200);
    let plain = diffusion_defense();
    let zero = diffusion_defense().with_guidance(guide().clone(), 0.0).unwrap();
    let guided = diffusion_defense().with_guidance(guide().clone(), ETA).unwrap();
    let adv = AttackSpec::new(AttackMethod::Pgd, linf(10)).run(&oap_core::attacks::NoDefense, f, &test.inputs, &test.labels, 5).unwrap().adv;
    let targets = gen_reference_point(f, &test.inputs, &test.labels, &OapConfig::new(EPS)).unwrap();

    let a = plain.purify(&adv, 9).unwrap();
    let bitwise = a.data().iter().zip(zero.purify(&adv, 9).unwrap().data()).all(|(u, v)| u.to_bits() == v.to_bits());
    let b = guided.purify(&adv, 9).unwrap();
    let l1 = |o: &Tensor, i: usize| o.item_slice(i).iter().zip(targets.item_slice(i)).map(|(u, v)| (u - v).abs()).sum::<f32>();
    let (mut wins, mut n) = (0, 0);
    for i in 0..test.len() {
        let (da, db) = (l1(&a, i), l1(&b, i));
        if da != db {
            n += 1;
            wins += (db < da) as usize;
        }
    }
    let p = sign_test(wins, n);
    let took = start.elapsed();
    let pass = bitwise && n >= 200 && p < 0.05 && took < Duration::from_secs(600);
    report(
        "guidance",
        pass,
        took,
        format!("eta=0 bitwise {bitwise}; guided closer to x^K on {wins}/{n} images, sign test p={p:.2e}"),
    );
    assert!(pass);
}

fn rand_values(seed: u64, n: usize) -> Vec<f32> {
    let mut r = rng::stream(seed);
    (0..n).map(|_| r.random::<f32>()).collect()
}

#[test]
fn sinkhorn_transport_is_correct() {
    let _serial = exclusive();
    let start = Instant::now();
    let exact = |blur| SinkhornConfig { blur, bins: None, ..Default::default() };
    let mut worst_self = 0.0f64;
    let mut worst_sym = 0.0f64;
    for seed in 0..20 {
        let a = PixelCloud::uniform(&rand_values(seed, 10 + seed as usize)).unwrap();
        let b = PixelCloud::uniform(&rand_values(seed + 100, 40 - seed as usize)).unwrap();
        let cfg = exact(0.05);
        worst_self = worst_self.max(sinkhorn_divergence(&a, &a, &cfg).unwrap().value.abs());
        let ab = sinkhorn_divergence(&a, &b, &cfg).unwrap().value;
        let ba = sinkhorn_divergence(&b, &a, &cfg).unwrap().value;
        worst_sym = worst_sym.max((ab - ba).abs());
    }

    let mut worst_two = 0.0f64;
    for blur in [0.05, 0.1, 0.3] {
        let cfg = exact(blur);
        for (x, a, y, b) in [
            ([0.1, 0.6], [0.3, 0.7], [0.2, 0.9], [0.5, 0.5]),
            ([0.0, 1.0], [0.5, 0.5], [0.4, 0.45], [0.2, 0.8]),
        ] {
            let sol = entropic_ot(
                &PixelCloud::new(x.to_vec(), a.to_vec()).unwrap(),
                &PixelCloud::new(y.to_vec(), b.to_vec()).unwrap(),
                &cfg,
            )
            .unwrap();
            let brute = golden_min(|p| primal_2x2(x, a, y, b, cfg.epsilon(), p), (a[0] - b[1]).max(0.0), a[0].min(b[0]));
            worst_two = worst_two.max((sol.value - brute).abs());
        }
    }

    let (src, tgt) = ([0.2f32, 0.5, 0.55, 0.9], [0.1f32, 0.3, 0.35, 0.8]);
    let cfg = exact(0.1);
    let got = color_transfer(&src, &tgt, &cfg).unwrap();
    let want = scalar_barycentric(&src.map(|v| v as f64), &tgt.map(|v| v as f64), cfg.epsilon());
    let worst_four = got.values.iter().zip(&want).map(|(g, w)| (*g as f64 - w).abs()).fold(0.0, f64::max);

    let (mut outside, mut pixels) = (0usize, 0usize);
    for seed in 0..20u64 {
        let cfg = SinkhornConfig { bins: if seed % 2 == 0 { Some(32) } else { None }, ..Default::default() };
        let src = rand_values(seed, 256);
        let tgt: Vec<f32> = rand_values(seed + 50, 256).iter().map(|v| 0.2 + 0.5 * v).collect();
        let (lo, hi) = tgt.iter().fold((f32::MAX, f32::MIN), |(l, h), &v| (l.min(v), h.max(v)));
        let out = color_transfer(&src, &tgt, &cfg).unwrap();
        pixels += out.values.len();
        outside += out.values.iter().filter(|v| **v < lo || **v > hi).count();
    }

    let took = start.elapsed();
    let pass = worst_self <= 1e-6
        && worst_sym <= 1e-6
        && worst_two < 1e-5
        && worst_four < 1e-5
        && outside == 0
        && took < Duration::from_secs(120);
    report(
        "sinkhorn",
        pass,
        took,
        format!(
            "S(a,a) {worst_self:.1e}, asymmetry {worst_sym:.1e}, 2-point {worst_two:.1e}, 4-point {worst_four:.1e}, {outside}/{pixels} pixels outside hull"
        ),
    );
    assert!(pass);
}

#[test]
fn per_step_gradients_attack_harder() {
    let _serial = exclusive();
    let start = Instant::now();
    let f = toy::classifier();
    let test = toy::shapes_test(30);
    let d = diffusion_defense();
    let rows = granularity_experiment(&d, f, &test, &linf(10), &[Granularity::Coarse, Granularity::Fine], &[4], &[0, 1, 2]).unwrap();
    let acc = |m: Granularity, s: u64| rows.iter().find(|r| r.mode == m && r.seed == s).unwrap().robust_accuracy;
    let gaps: Vec<f64> = (0..3).map(|s| acc(Granularity::Coarse, s) - acc(Granularity::Fine, s)).collect();
    let took = start.elapsed();
    let pass = mean(&gaps) >= 0.05 && took < Duration::from_secs(3600);
    let per_seed: Vec<String> =
        (0..3).map(|s| format!("{:.1}/{:.1}", 100.0 * acc(Granularity::Coarse, s), 100.0 * acc(Granularity::Fine, s))).collect();
    report(
        "gradient granularity",
        pass,
        took,
        format!("robust single-call/per-step per seed {}; mean gap {:.1} points", per_seed.join(" "), 100.0 * mean(&gaps)),
    );
    assert!(pass);
}

#[test]
fn time_cost_scaling() {
    let _serial = exclusive();
    let start = Instant::now();
    let f = toy::classifier();
    let test = toy::shapes_test(4);
    let dual = dual_defense();
    let single = dual.with_paths(1).unwrap();
    let spec = AttackSpec::new(AttackMethod::BpdaEot, linf(10));
    let plan = |paths| BenchPlan { t_star: T_STAR, paths, ..Default::default() };
    let rd = bench_time_cost(dual, f, &spec, &test.inputs, &test.labels, &plan(2)).unwrap();
    let rs = bench_time_cost(&single, f, &spec, &test.inputs, &test.labels, &plan(1)).unwrap();
    let cost = rd.purify_seconds / rs.purify_seconds;
    let scaling = rd.linear_scaling_error().max(rs.linear_scaling_error());

    let spec = spec.with_eot(3);
    let (d0, s0) = (dual.gradient_path_evals(), single.gradient_path_evals());
    spec.run(dual, f, &test.inputs, &test.labels, 1).unwrap();
    spec.run(&single, f, &test.inputs, &test.labels, 1).unwrap();
    let (gd, gs) = (dual.gradient_path_evals() - d0, single.gradient_path_evals() - s0);

    let took = start.elapsed();
    let pass = scaling <= 0.3 && (cost - 2.0).abs() <= 0.6 && gs > 0 && gd == 2 * gs && took < Duration::from_secs(3600);
    report(
        "time cost",
        pass,
        took,
        format!("EOT scaling error {:.1}%, dual/single purification cost {cost:.2}x, gradient path evals {gd} vs {gs}", 100.0 * scaling),
    );
    assert!(pass);
}

#[test]
fn dual_path_holds_robustness_at_double_cost() {
    let _serial = exclusive();
    let start = Instant::now();
    let f = toy::classifier();
    let test = toy::shapes_test(50);
    let dual = dual_defense();
    let single = dual.with_paths(1).unwrap();
    let spec = AttackSpec::new(AttackMethod::BpdaEot, linf(10)).with_eot(4);
    let (mut acc, mut secs) = ([Vec::new(), Vec::new()], [0.0, 0.0]);
    for seed in 0..2 {
        for (k, d) in [dual as &dyn Defense, &single].into_iter().enumerate() {
            let r = spec.run(d, f, &test.inputs, &test.labels, seed).unwrap();
            acc[k].push(1.0 - r.success_rate());
            secs[k] += r.seconds.iter().sum::<f64>();
        }
    }
    let (ad, as_) = (mean(&acc[0]), mean(&acc[1]));
    let ratio = secs[0] / secs[1];
    let took = start.elapsed();
    let pass = ad - as_ >= -0.02 - 1e-9 && ratio >= 1.8 && took < Duration::from_secs(7200);
    report(
        "dual path",
        pass,
        took,
        format!("BPDA+EOT robust dual {:.1}% vs single {:.1}%, attack time {ratio:.2}x", 100.0 * ad, 100.0 * as_),
    );
    assert!(pass);
}
