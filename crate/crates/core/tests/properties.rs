//! Invariants over random inputs.

mod common;

use proptest::prelude::*;
use stcflow::attention::{lite_matmul, AttentionMode, FlopCounter, GlobalContextBlock, NonLocalBlock};
use stcflow::flow::{decode_flo, encode_flo, FlowField};
use stcflow::metrics::{aee, fl_all};
use stcflow::psc::{psc_forward, PscBlock};
use stcflow::Tensor64;

fn field(h: usize, w: usize, data: Vec<f32>) -> FlowField<f32> {
    FlowField::new(stcflow::Tensor32::from_vec(&[2, h, w], data).unwrap()).unwrap()
}

fn flow_strategy() -> impl Strategy<Value = FlowField<f32>> {
    (1usize..6, 1usize..6).prop_flat_map(|(h, w)| {
        prop::collection::vec(-1e6f32..1e6, 2 * h * w).prop_map(move |d| field(h, w, d))
    })
}

fn pair_strategy() -> impl Strategy<Value = (FlowField<f64>, FlowField<f64>)> {
    (1usize..6, 1usize..6).prop_flat_map(|(h, w)| {
        let n = 2 * h * w;
        (prop::collection::vec(-20.0f64..20.0, n), prop::collection::vec(-20.0f64..20.0, n)).prop_map(move |(a, b)| {
            (
                FlowField::new(Tensor64::from_vec(&[2, h, w], a).unwrap()).unwrap(),
                FlowField::new(Tensor64::from_vec(&[2, h, w], b).unwrap()).unwrap(),
            )
        })
    })
}

/// Circular shift of every channel by `(dy, dx)`.
fn roll(x: &Tensor64, dy: usize, dx: usize) -> Tensor64 {
    let (h, w) = (x.shape()[1], x.shape()[2]);
    Tensor64::from_fn(x.shape(), |i| x.at3(i[0], (i[1] + h - dy % h) % h, (i[2] + w - dx % w) % w))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn flo_round_trip_is_bit_exact(f in flow_strategy()) {
        let back = decode_flo(&encode_flo(&f).unwrap()).unwrap();
        let same = back.tensor().data().iter().zip(f.tensor().data()).all(|(a, b)| a.to_bits() == b.to_bits());
        prop_assert!(same);
        prop_assert_eq!((back.height(), back.width()), (f.height(), f.width()));
    }

    #[test]
    fn aee_is_symmetric_and_nonnegative((a, b) in pair_strategy()) {
        let ab = aee(&a, &b, None).unwrap();
        let ba = aee(&b, &a, None).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba).abs() <= 1e-12 * ab.max(1.0));
    }

    #[test]
    fn fl_all_grows_with_the_error((gt, other) in pair_strategy(), k in 1.0f64..4.0) {
        // pred_t = gt + t (other - gt); a larger t scales every endpoint error up
        let lerp = |t: f64| FlowField::new(gt.tensor().zip_map(other.tensor(), |g, o| g + t * (o - g))).unwrap();
        let lo = fl_all(&lerp(1.0), &gt, None).unwrap();
        let hi = fl_all(&lerp(k), &gt, None).unwrap();
        prop_assert!(hi >= lo, "{} < {}", hi, lo);
        prop_assert!((0.0..=1.0).contains(&hi));
    }

    #[test]
    fn lite_flops_shrink_by_the_polyphase_factor(m in 2usize..80, n in 1usize..6, s in prop::sample::select(vec![2usize, 4])) {
        let f = Tensor64::from_fn(&[m, n], |i| (i[0] * n + i[1]) as f64);
        let mut exact = FlopCounter::new();
        lite_matmul(&f, 1, AttentionMode::Position, &mut exact).unwrap();
        let mut lite = FlopCounter::new();
        lite_matmul(&f, s, AttentionMode::Position, &mut lite).unwrap();
        // per-phase blocks of ceil(M/s) rows, padded
        let per = m.div_ceil(s);
        prop_assert_eq!(lite.flops(), (2 * n * s * per * per) as u64);
        let ratio = lite.flops() as f64 / exact.flops() as f64;
        let padded = (s * per) as f64 / m as f64;
        prop_assert!((ratio - padded * padded / s as f64).abs() < 1e-12);
    }

    #[test]
    fn attention_blocks_commute_with_torus_translation(dy in 0usize..5, dx in 0usize..6, seed in 0u64..1000) {
        let mut rng = stcflow::layers::seeded_rng(seed);
        let x = common::uniform(&[4, 5, 6], -1.0, 1.0, &mut rng);
        let nl = NonLocalBlock::new(4);
        let gc = GlobalContextBlock::new(4);
        let psc = PscBlock::new(3, 4, None, 1);
        let store = common::random_store(seed, |s, r| {
            nl.init(s, "nl", r);
            gc.init(s, "gc", r);
            psc.init(s, r);
        });
        let shifted = roll(&x, dy, dx);
        let a = roll(&nl.apply(&store, "nl", &x).unwrap(), dy, dx);
        prop_assert!(a.max_abs_diff(&nl.apply(&store, "nl", &shifted).unwrap()) < 1e-10);
        let b = roll(&gc.apply(&store, "gc", &x).unwrap(), dy, dx);
        prop_assert!(b.max_abs_diff(&gc.apply(&store, "gc", &shifted).unwrap()) < 1e-10);
        let c = roll(&psc_forward(&psc, &store, &x, None).unwrap().0, dy, dx);
        prop_assert!(c.max_abs_diff(&psc_forward(&psc, &store, &shifted, None).unwrap().0) < 1e-10);
    }
}

#[test]
fn lite_flops_are_exactly_one_over_s_for_divisible_sizes() {
    for m in [8, 16, 32, 64] {
        let f = Tensor64::from_fn(&[m, 3], |i| i[0] as f64);
        let mut exact = FlopCounter::new();
        lite_matmul(&f, 1, AttentionMode::Position, &mut exact).unwrap();
        for s in [2, 4] {
            let mut lite = FlopCounter::new();
            lite_matmul(&f, s, AttentionMode::Position, &mut lite).unwrap();
            assert_eq!(lite.flops() * s as u64, exact.flops(), "M={m} s={s}");
        }
    }
}

#[test]
fn attention_maps_are_normalized() {
    let r = common::normalization_sweep(150, 5).unwrap();
    assert_eq!(r.maps, 150 * 6);
    assert!(r.max_sum_error < 1e-5, "{r:?}");
    assert!(r.min_entry >= 0.0, "{r:?}");
}

#[test]
fn fresh_context_blocks_are_identities() {
    for (name, dev) in common::fresh_block_deviation().unwrap() {
        assert_eq!(dev, 0.0, "{name} deviates by {dev}");
    }
}
