mod common;

use common::ot::{golden_min, primal_2x2, scalar_barycentric};

use oap_core::attacks::{AttackMethod, AttackSpec, Defense, Surrogate, ThreatModel};
use oap_core::diffusion::{DiffusionSchedule, ScoreFn};
use oap_core::dualpath::*;
use oap_core::models::{Classifier, Purifier, ScoreModel};
use oap_core::numcore::Tensor;
use oap_core::rng;
use proptest::prelude::*;
use rand::Rng;

fn exact(blur: f64) -> SinkhornConfig {
    SinkhornConfig { blur, bins: None, ..Default::default() }
}

#[test]
fn two_point_ot_matches_brute_force() {
    let cases = [
        ([0.1, 0.6], [0.3, 0.7], [0.2, 0.9], [0.5, 0.5]),
        ([0.0, 1.0], [0.5, 0.5], [0.4, 0.45], [0.2, 0.8]),
        ([0.3, 0.35], [0.9, 0.1], [0.3, 0.8], [0.6, 0.4]),
    ];
    for blur in [0.05, 0.1, 0.3] {
        let cfg = exact(blur);
        for (x, a, y, b) in cases {
            let sol = entropic_ot(
                &PixelCloud::new(x.to_vec(), a.to_vec()).unwrap(),
                &PixelCloud::new(y.to_vec(), b.to_vec()).unwrap(),
                &cfg,
            )
            .unwrap();
            assert!(sol.converged);
            let lo = (a[0] - b[1]).max(0.0);
            let hi = a[0].min(b[0]);
            let brute = golden_min(|p| primal_2x2(x, a, y, b, cfg.epsilon(), p), lo, hi);
            assert!((sol.value - brute).abs() < 1e-5, "blur {blur}: {} vs {brute}", sol.value);
        }
    }
}

#[test]
fn four_pixel_transfer_matches_plain_sinkhorn() {
    let src = [0.2f32, 0.5, 0.55, 0.9];
    let tgt = [0.1f32, 0.3, 0.35, 0.8];
    let cfg = exact(0.1);
    let got = color_transfer(&src, &tgt, &cfg).unwrap();
    let want = scalar_barycentric(
        &src.map(|v| v as f64),
        &tgt.map(|v| v as f64),
        cfg.epsilon(),
    );
    for (g, w) in got.values.iter().zip(&want) {
        assert!((*g as f64 - w).abs() < 1e-5, "{g} vs {w}");
    }
}

fn rand_values(seed: u64, n: usize) -> Vec<f32> {
    let mut r = rng::stream(seed);
    (0..n).map(|_| r.random::<f32>()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn divergence_is_symmetric_nonnegative_and_zero_on_self(seed in 0u64..10_000, n in 2usize..40, m in 2usize..40) {
        let cfg = exact(0.05);
        let a = PixelCloud::uniform(&rand_values(seed, n)).unwrap();
        let b = PixelCloud::uniform(&rand_values(seed + 1, m)).unwrap();
        let ab = sinkhorn_divergence(&a, &b, &cfg).unwrap().value;
        let ba = sinkhorn_divergence(&b, &a, &cfg).unwrap().value;
        prop_assert!((ab - ba).abs() <= 1e-6);
        prop_assert!(ab >= 0.0);
        prop_assert!(sinkhorn_divergence(&a, &a, &cfg).unwrap().value <= 1e-6);
    }

    #[test]
    fn transferred_pixels_stay_in_the_target_hull(seed in 0u64..10_000, binned in any::<bool>()) {
        let cfg = SinkhornConfig { bins: if binned { Some(32) } else { None }, ..Default::default() };
        let src = rand_values(seed, 64);
        let tgt: Vec<f32> = rand_values(seed + 7, 64).iter().map(|v| 0.2 + 0.5 * v).collect();
        let (lo, hi) = tgt.iter().fold((f32::MAX, f32::MIN), |(l, h), &v| (l.min(v), h.max(v)));
        let out = color_transfer(&src, &tgt, &cfg).unwrap();
        prop_assert!(out.values.iter().all(|v| *v >= lo && *v <= hi));
    }
}

#[test]
fn constant_target_gives_constant_output() {
    for bins in [None, Some(32)] {
        let cfg = SinkhornConfig { bins, ..Default::default() };
        let out = color_transfer(&rand_values(3, 50), &[0.4; 50], &cfg).unwrap();
        assert!(out.values.iter().all(|v| (v - 0.4).abs() < 1e-6), "{bins:?}");
    }
}

#[test]
fn self_transfer_is_near_identity() {
    let src = rand_values(4, 256);
    for bins in [None, Some(32)] {
        let cfg = SinkhornConfig { blur: 0.01, bins, ..Default::default() };
        let out = color_transfer(&src, &src, &cfg).unwrap();
        let worst = out.values.iter().zip(&src).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
        assert!(worst < 1e-2, "{bins:?}: {worst}");
    }
}

#[test]
fn selection_prefers_self_and_breaks_ties_low() {
    let cfg = SinkhornConfig::default();
    let x = rand_values(5, 64);
    let other: Vec<f32> = rand_values(6, 64).iter().map(|v| v * 0.3).collect();
    let far: Vec<f32> = x.iter().map(|v| 1.0 - 0.5 * v).collect();
    assert_eq!(select_target(&x, &[&other, &x, &far], &cfg).unwrap().index, 1);
    let sel = select_target(&x, &[&other, &other], &cfg).unwrap();
    assert_eq!(sel.index, 0);
    assert_eq!(sel.divergences[0], sel.divergences[1]);
}

#[test]
fn selection_is_stable_under_longer_solves() {
    let data = common::toy::shapes_test(26);
    let bank: Vec<&[f32]> = (20..26).map(|i| data.inputs.item_slice(i)).collect();
    let short = SinkhornConfig::default();
    let long = SinkhornConfig { max_iters: 2 * short.max_iters, ..short.clone() };
    let mut r = rng::stream(2);
    let agree = (0..20)
        .filter(|&i| {
            let x: Vec<f32> =
                data.inputs.item_slice(i).iter().map(|v| (v + 0.03 * r.random_range(-1.0f32..1.0)).clamp(0.0, 1.0)).collect();
            select_target(&x, &bank, &short).unwrap().index == select_target(&x, &bank, &long).unwrap().index
        })
        .count();
    assert!(agree >= 19, "{agree}/20");
}

fn toy_defense(t_star: usize, bank: TargetBank, eta: f32) -> DualPathDefense {
    let shape = [1, 8, 8];
    DualPathDefense::new(
        DiffusionSchedule::standard(),
        ScoreFn::Network(ScoreModel::new(shape, 8, 1000, 3)),
        t_star,
        Some((Purifier::new(shape, 4, 1), eta)),
        bank,
        DualPathConfig::default(),
    )
    .unwrap()
}

fn images(n: usize, seed: u64) -> Tensor {
    let mut r = rng::stream(seed);
    Tensor::uniform(&[n, 1, 8, 8], 0.0, 1.0, &mut r)
}

#[test]
fn outer_depths_halve() {
    let bank = TargetBank::new(images(3, 1), vec![0, 1, 2]).unwrap();
    let d = toy_defense(20, bank, 0.1);
    assert_eq!(d.t_stars(), vec![20, 10]);
    let (_, trace) = d.purify_traced(&images(1, 2), 4).unwrap();
    assert_eq!(trace.t_stars, vec![20, 10]);
    assert_eq!(trace.selected.len(), 2);
    assert!(trace.warnings.is_empty(), "{:?}", trace.warnings);
}

#[test]
fn purification_is_deterministic_per_seed() {
    let bank = TargetBank::new(images(3, 1), vec![0, 1, 2]).unwrap();
    let d = toy_defense(6, bank, 0.1);
    let x = images(2, 3);
    assert_eq!(d.purify(&x, 5).unwrap(), d.purify(&x, 5).unwrap());
    assert_ne!(d.purify(&x, 5).unwrap(), d.purify(&x, 6).unwrap());
}

#[test]
fn noiseless_pipeline_reduces_to_color_roundtrips() {
    let clean = images(3, 8);
    let x_adv = clean.zip_map(&images(3, 9), |c, n| (c + 0.03 * (n - 0.5)).clamp(0.0, 1.0)).unwrap();
    let bank = TargetBank::new(clean.clone(), vec![0, 1, 2]).unwrap();
    let d = toy_defense(0, bank, 0.0);
    let sk = SinkhornConfig::default();
    for i in 0..3 {
        let x = x_adv.select(i);
        let (out, trace) = d.purify_traced(&x, 1).unwrap();
        let mut cur = x.data().to_vec();
        for &j in &trace.selected {
            let fwd = color_transfer(&cur, clean.item_slice(j), &sk).unwrap().values;
            cur = color_transfer(&fwd, &cur, &sk).unwrap().values;
        }
        assert_eq!(out.data(), &cur[..]);
        let l1 = cur.iter().zip(x.data()).map(|(a, b)| (a - b).abs()).sum::<f32>() / cur.len() as f32;
        assert!(l1 < 5e-2, "{l1}");
    }
}

#[test]
fn dual_path_doubles_gradient_path_evaluations() {
    let bank = TargetBank::new(images(3, 1), vec![0, 1, 2]).unwrap();
    let dual = toy_defense(4, bank, 0.1);
    let single = dual.with_paths(1).unwrap();
    let f = Classifier::cnn_tiny([1, 8, 8], 3, 2);
    let x = images(2, 4);
    let spec = AttackSpec::new(AttackMethod::BpdaEot, ThreatModel::linf(8.0 / 255.0, 3)).with_eot(2);
    for s in [Surrogate::Identity, Surrogate::Exact] {
        let (d, p) = (dual.with_paths(2).unwrap(), single.with_paths(1).unwrap());
        spec.clone().with_surrogate(s).run(&d, &f, &x, &[0, 1], 1).unwrap();
        spec.clone().with_surrogate(s).run(&p, &f, &x, &[0, 1], 1).unwrap();
        assert!(p.gradient_path_evals() > 0);
        assert_eq!(d.gradient_path_evals(), 2 * p.gradient_path_evals());
    }
}

#[test]
fn bad_configurations_are_rejected() {
    let bank = TargetBank::new(images(2, 1), vec![0, 1]).unwrap();
    let d = toy_defense(4, bank, 0.1);
    assert!(d.with_paths(3).is_err());
    assert!(d.purify_traced(&images(2, 1), 0).is_err());
    assert!(color_transfer(&[0.1, 0.2], &[0.3], &SinkhornConfig::default()).is_err());
    assert!(select_target(&[0.1], &[], &SinkhornConfig::default()).is_err());
}

#[test]
fn selection_plan_reuse_matches_fresh_transfer() {
    for bins in [None, Some(32)] {
        let cfg = SinkhornConfig { bins, ..Default::default() };
        let x = rand_values(11, 64);
        let bank = [rand_values(12, 64), rand_values(13, 64).iter().map(|v| v * 0.5).collect()];
        let refs: Vec<&[f32]> = bank.iter().map(|b| b.as_slice()).collect();
        let sel = select_target(&x, &refs, &cfg).unwrap();
        let reused = sel.transfer(&x, refs[sel.index], &cfg);
        assert_eq!(reused, color_transfer(&x, refs[sel.index], &cfg).unwrap());
    }
}
