mod common;

use common::*;
use ecoprune_core::gates::*;
use ecoprune_core::grad::Tape;
use ecoprune_core::Tensor;
use proptest::prelude::*;
use rand::Rng;

fn mean_gate(lambda: f64, cfg: &GateConfig<f64>, draws: usize, r: &mut impl Rng) -> f64 {
    (0..draws)
        .map(|_| sample_gate(lambda, r.sample(rand_distr::Open01), cfg))
        .sum::<f64>()
        / draws as f64
}

#[test]
fn point_masses_at_zero_and_one() {
    let cfg = GateConfig::<f64>::plot_constants();
    let mut r = rng(1);
    let g: Vec<f64> = (0..10_000).map(|_| sample_gate(0.0, r.sample(rand_distr::Open01), &cfg)).collect();
    let zeros = g.iter().filter(|&&x| x == 0.0).count();
    let ones = g.iter().filter(|&&x| x == 1.0).count();
    assert!(zeros > 0 && ones > 0, "zeros {zeros} ones {ones}");
    assert!(g.iter().all(|&x| (0.0..=1.0).contains(&x)));
}

fn max_slope(delta: f64, seed: u64) -> f64 {
    let cfg = GateConfig { delta, ..GateConfig::<f64>::plot_constants() };
    let mut r = rng(seed);
    let grid: Vec<f64> = (0..=24).map(|i| -6.0 + 0.5 * i as f64).collect();
    let curve: Vec<f64> = grid.iter().map(|&l| mean_gate(l, &cfg, 10_000, &mut r)).collect();
    curve.windows(2).map(|w| (w[1] - w[0]) / 0.5).fold(f64::MIN, f64::max)
}

#[test]
fn larger_delta_gives_a_steeper_mean_curve() {
    let (a, b) = (max_slope(2.0, 2), max_slope(0.05, 2));
    assert!(a > b, "delta=2 slope {a}, delta=0.05 slope {b}");
}

#[test]
fn mean_curve_is_monotone_and_symmetric() {
    let cfg = GateConfig::<f64>::plot_constants();
    let mut prev = -1.0;
    for i in 0..=20 {
        let l = -5.0 + 0.5 * i as f64;
        // Identical uniforms at every lambda give an exactly monotone curve.
        let m = mean_gate(l, &cfg, 10_000, &mut rng(3));
        assert!(m >= prev);
        assert!((0.0..=1.0).contains(&m));
        prev = m;
    }
    // u -> 1 - u maps the gate at lambda to one minus the gate at -lambda.
    let mut r = rng(4);
    for _ in 0..1000 {
        let u: f64 = r.sample(rand_distr::Open01);
        let l = r.random_range(-4.0..4.0);
        let a = sample_gate(l, u, &cfg);
        let b = sample_gate(-l, 1.0 - u, &cfg);
        assert!((a + b - 1.0).abs() <= 1e-9);
    }
}

#[test]
fn expected_gate_examples() {
    let cfg = GateConfig::<f64>::default();
    assert_eq!(expected_gate(5.0, &cfg), 1.0);
    assert!((expected_gate(0.0, &cfg) - 0.5).abs() < 1e-15);
    assert_eq!(expected_gate(-5.0, &cfg), 0.0);
}

#[test]
fn tape_and_value_gates_agree() {
    let cfg = GateConfig::<f64>::default();
    let mut r = rng(5);
    let lambda = uniform(40, -4.0, 4.0, &mut r);
    let noise = sample_noise(40, &cfg, &mut r);
    let mut t = Tape::<f64>::new();
    let l = t.param(lambda.clone());
    let g = hard_concrete_on_tape(&mut t, l, &noise, &cfg).unwrap();
    let v = gate_values(&lambda, &noise, &cfg).unwrap();
    assert_eq!(t.value(g).data(), v.data());
    assert!(v.data().iter().all(|x| (0.0..=1.0).contains(x)));
    let zero = expected_noise::<f64>(40);
    let e = gate_values(&lambda, &zero, &cfg).unwrap();
    for (i, &x) in e.data().iter().enumerate() {
        assert_eq!(x, expected_gate(lambda.data()[i], &cfg));
    }
}

#[test]
fn threshold_achieves_floor_sparsity() {
    let layout = GateLayout::new(&[(4, 32), (3, 17), (4, 32)]);
    let mut r = rng(6);
    let lambda = uniform(layout.total(), -3.0, 3.0, &mut r);
    for target in [0.0, 0.1, 0.2, 0.5, 0.73, 0.99] {
        let g = threshold_mask(&lambda, &layout, target, ThresholdMode::Global).unwrap();
        let n = layout.total();
        assert_eq!(g.achieved_sparsity(), (n as f64 * target).floor() / n as f64);
        let l = threshold_mask(&lambda, &layout, target, ThresholdMode::Local).unwrap();
        for grp in layout.groups() {
            let bits = l.group_bits(grp.block, grp.kind);
            let off = bits.iter().filter(|&&b| !b).count();
            assert_eq!(off, (grp.len as f64 * target).floor() as usize);
        }
    }
    assert!(threshold_mask(&lambda, &layout, 1.0, ThresholdMode::Global).is_err());
    assert!(threshold_mask(&lambda, &layout, -0.1, ThresholdMode::Global).is_err());
}

#[test]
fn layout_covers_every_unit_once() {
    let layout = GateLayout::for_config(&ecoprune_core::denoiser::DenoiserConfig::default());
    assert_eq!(layout.total(), 3 * (4 + 32));
    let mut seen = vec![0; layout.total()];
    for g in layout.groups() {
        for i in g.offset..g.offset + g.len {
            seen[i] += 1;
            assert_eq!(layout.kind_of(i), g.kind);
        }
    }
    assert!(seen.iter().all(|&c| c == 1));
    assert_eq!(GateParams::<f64>::init(layout).lambda.data().iter().filter(|&&l| l == 5.0).count(), 108);
}

fn cfg_strategy() -> impl Strategy<Value = GateConfig<f64>> {
    (0.2f64..3.0, 1.01f64..1.5, -0.5f64..-0.01, 1e-8f64..3.0).prop_map(|(alpha, zeta, gamma, delta)| GateConfig {
        alpha,
        zeta,
        gamma,
        delta,
        beta_stretch: 0.83,
    })
}

proptest! {
    #[test]
    fn gate_lies_in_unit_interval(l in -50.0f64..50.0, u in 1e-9f64..(1.0 - 1e-9), cfg in cfg_strategy()) {
        let g = sample_gate(l, u, &cfg);
        prop_assert!((0.0..=1.0).contains(&g));
    }

    #[test]
    fn gate_is_monotone_in_lambda(a in -20.0f64..20.0, d in 0.0f64..10.0, u in 1e-9f64..(1.0 - 1e-9), cfg in cfg_strategy()) {
        prop_assert!(sample_gate(a, u, &cfg) <= sample_gate(a + d, u, &cfg));
        prop_assert!(expected_gate(a, &cfg) <= expected_gate(a + d, &cfg));
    }

    #[test]
    fn l0_terms_are_probabilities(ls in proptest::collection::vec(1e-6f64..100.0, 1..20)) {
        let cfg = GateConfig::<f64>::default();
        let v = l0_loss(&Tensor::vector(ls.clone()), &cfg).unwrap();
        prop_assert!(v > 0.0 && v < ls.len() as f64);
    }

    #[test]
    fn threshold_sparsity_is_exact(
        ls in proptest::collection::vec(-5.0f64..5.0, 2..60),
        target in 0.0f64..0.99,
        global in any::<bool>(),
    ) {
        let half = ls.len() / 2;
        let layout = GateLayout::new(&[(half, ls.len() - half)]);
        let mode = if global { ThresholdMode::Global } else { ThresholdMode::Local };
        let m = threshold_mask(&Tensor::vector(ls.clone()), &layout, target, mode).unwrap();
        let expected = if global {
            (ls.len() as f64 * target).floor() as usize
        } else {
            (half as f64 * target).floor() as usize + ((ls.len() - half) as f64 * target).floor() as usize
        };
        prop_assert_eq!(m.bits.iter().filter(|&&b| !b).count(), expected);
        // Every pruned unit has lambda no larger than any kept unit in its pool.
        if global {
            let max_off = ls.iter().zip(&m.bits).filter(|(_, &b)| !b).map(|(l, _)| *l).fold(f64::MIN, f64::max);
            let min_on = ls.iter().zip(&m.bits).filter(|(_, &b)| b).map(|(l, _)| *l).fold(f64::MAX, f64::min);
            prop_assert!(max_off <= min_on);
        }
    }
}
