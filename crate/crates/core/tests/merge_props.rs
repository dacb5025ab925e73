use mixsoup::lm::{ModelConfig, ParamSet};
use mixsoup::merge::{macro_merge, micro_merge, uniform_average, weighted_average};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_cfg() -> ModelConfig {
    ModelConfig { d_model: 2, n_layers: 1, n_heads: 1, d_ff: 4, seq_len: 4, size_tag: "prop".into(), ..ModelConfig::tiny() }
}

fn random_params(rng: &mut ChaCha8Rng) -> ParamSet {
    let mut p = ParamSet::zeros(&small_cfg());
    let scale = 10f32.powi(rng.random_range(-3..3));
    for x in p.flat.iter_mut() {
        *x = rng.random_range(-1.0..1.0f32) * scale;
    }
    p
}

fn members(seed: u64, n: usize) -> (Vec<ParamSet>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ps = (0..n).map(|_| random_params(&mut rng)).collect();
    let ws = (0..n).map(|_| rng.random_range(0.01..5.0)).collect();
    (ps, ws)
}

fn max_rel(a: &ParamSet, b: &ParamSet) -> f64 {
    a.flat
        .iter()
        .zip(&b.flat)
        .map(|(x, y)| {
            let d = (*x as f64 - *y as f64).abs();
            if d == 0.0 { 0.0 } else { d / (x.abs().max(y.abs()) as f64) }
        })
        .fold(0.0, f64::max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn idempotent_on_identical_members(seed in any::<u64>(), n in 1usize..6) {
        let (ps, ws) = members(seed, 1);
        let copies: Vec<&ParamSet> = std::iter::repeat_n(&ps[0], n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let weights: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..5.0) * ws[0]).collect();
        prop_assert_eq!(weighted_average(&copies, &weights).unwrap(), ps[0].clone());
    }

    #[test]
    fn member_order_does_not_matter(seed in any::<u64>(), n in 2usize..6, rot in 0usize..6) {
        let (ps, ws) = members(seed, n);
        let refs: Vec<&ParamSet> = ps.iter().collect();
        let a = weighted_average(&refs, &ws).unwrap();
        let mut idx: Vec<usize> = (0..n).collect();
        idx.rotate_left(rot % n);
        idx.swap(0, n - 1);
        let p2: Vec<&ParamSet> = idx.iter().map(|&i| &ps[i]).collect();
        let w2: Vec<f64> = idx.iter().map(|&i| ws[i]).collect();
        prop_assert_eq!(weighted_average(&p2, &w2).unwrap().flat, a.flat);
    }

    #[test]
    fn stays_inside_convex_hull(seed in any::<u64>(), n in 1usize..6) {
        let (ps, ws) = members(seed, n);
        let refs: Vec<&ParamSet> = ps.iter().collect();
        let m = weighted_average(&refs, &ws).unwrap();
        for (i, x) in m.flat.iter().enumerate() {
            let lo = ps.iter().map(|p| p.flat[i]).fold(f32::INFINITY, f32::min);
            let hi = ps.iter().map(|p| p.flat[i]).fold(f32::NEG_INFINITY, f32::max);
            prop_assert!(lo <= *x && *x <= hi, "coord {} = {} outside [{}, {}]", i, x, lo, hi);
        }
    }

    #[test]
    fn weight_scale_is_irrelevant(seed in any::<u64>(), n in 1usize..6, c in 1e-3f64..1e3) {
        let (ps, ws) = members(seed, n);
        let refs: Vec<&ParamSet> = ps.iter().collect();
        let a = weighted_average(&refs, &ws).unwrap();
        let scaled: Vec<f64> = ws.iter().map(|w| w * c).collect();
        let b = weighted_average(&refs, &scaled).unwrap();
        prop_assert!(max_rel(&a, &b) <= 1e-7);
    }

    #[test]
    fn macro_equals_micro_for_equal_groups(seed in any::<u64>(), k in 1usize..4, m in 1usize..4) {
        let (ps, _) = members(seed, k * m);
        let groups: Vec<Vec<&ParamSet>> = ps.chunks(m).map(|c| c.iter().collect()).collect();
        let ma = macro_merge(&groups).unwrap();
        let mi = micro_merge(&groups).unwrap();
        prop_assert!(max_rel(&ma, &mi) <= 1e-7);
        let refs: Vec<&ParamSet> = ps.iter().collect();
        prop_assert_eq!(mi, uniform_average(&refs).unwrap());
    }

    #[test]
    fn group_order_does_not_matter(seed in any::<u64>()) {
        let (ps, _) = members(seed, 3);
        let g1 = vec![vec![&ps[0], &ps[1]], vec![&ps[2]]];
        let g2 = vec![vec![&ps[2]], vec![&ps[1], &ps[0]]];
        prop_assert_eq!(macro_merge(&g1).unwrap(), macro_merge(&g2).unwrap());
    }
}

#[test]
fn macro_and_micro_diverge_for_unequal_groups() {
    let mut ps: Vec<ParamSet> = (0..3).map(|_| ParamSet::zeros(&small_cfg())).collect();
    for (p, v) in ps.iter_mut().zip([0.0, 2.0, 10.0]) {
        p.flat.fill(v);
    }
    let groups = vec![vec![&ps[0], &ps[1]], vec![&ps[2]]];
    assert!(macro_merge(&groups).unwrap().flat.iter().all(|x| *x == 5.5));
    assert!(micro_merge(&groups).unwrap().flat.iter().all(|x| *x == 4.0));
}
