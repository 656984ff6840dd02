use proptest::prelude::*;
use twophase::fusion::{extract_cues, weighted_map_voting};
use twophase::ops::{bilinear_resize, masked_multiply, masked_multiply_backward};
use twophase::suppression::{binarize_heatmap, combine_masks};
use twophase::{HeatMapSet, Tensor};

fn map(h: usize, w: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-10.0f32..10.0, h * w).prop_map(move |d| Tensor::new(&[h, w], d).unwrap())
}

fn grid(h: usize, w: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(prop::bool::ANY, h * w)
        .prop_map(move |d| Tensor::new(&[h, w], d.into_iter().map(|b| b as u8 as f32).collect()).unwrap())
}

fn heat_set(phase: usize) -> impl Strategy<Value = HeatMapSet> {
    (prop::collection::vec(-5.0f32..5.0, 2 * 9), prop::collection::vec(0.0f32..=1.0, 2)).prop_map(
        move |(maps, probs)| HeatMapSet { maps: Tensor::new(&[2, 3, 3], maps).unwrap(), probs, phase },
    )
}

proptest! {
    #[test]
    fn masked_positions_are_exact_zeros(
        feats in prop::collection::vec(prop::num::f32::NORMAL | prop::num::f32::INFINITE | prop::num::f32::ZERO, 2 * 3 * 16),
        mask in grid(4, 4),
    ) {
        let features = Tensor::new(&[2, 3, 4, 4], feats).unwrap();
        let fwd = masked_multiply(&features, &mask).unwrap();
        let bwd = masked_multiply_backward(&features, &mask).unwrap();
        for (i, (&f, &b)) in fwd.data().iter().zip(bwd.data()).enumerate() {
            if mask.data()[i % 16] == 0.0 {
                prop_assert_eq!(f.to_bits(), 0);
                prop_assert_eq!(b.to_bits(), 0);
            } else {
                prop_assert_eq!(f.to_bits(), features.data()[i].to_bits());
            }
        }
    }

    #[test]
    fn bilinear_stays_within_input_range(m in map(3, 5), oh in 1usize..20, ow in 1usize..20) {
        let out = bilinear_resize(&m, oh, ow).unwrap();
        prop_assert!(out.min() >= m.min() && out.max() <= m.max());
        let d = m.data();
        prop_assert_eq!(out.data()[0], d[0]);
        if oh > 1 && ow > 1 {
            prop_assert_eq!(out.data()[oh * ow - 1], d[d.len() - 1]);
        }
    }

    #[test]
    fn bilinear_keeps_constants(v in -100.0f32..100.0, oh in 1usize..30, ow in 1usize..30) {
        let out = bilinear_resize(&Tensor::filled(&[4, 7], v), oh, ow).unwrap();
        prop_assert!(out.data().iter().all(|&x| x == v));
    }

    #[test]
    fn argmax_is_suppressed(m in map(5, 5), fraction in 0.01f64..0.99) {
        let g = binarize_heatmap(&m, fraction).unwrap();
        prop_assert!(g.data().iter().all(|&v| v == 0.0 || v == 1.0));
        let max = m.max();
        if max > 0.0 {
            let arg = m.data().iter().position(|&v| v == max).unwrap();
            prop_assert_eq!(g.data()[arg], 0.0);
        } else {
            prop_assert!(g.data().iter().all(|&v| v == 1.0));
        }
    }

    #[test]
    fn lowering_fraction_only_grows_suppression(m in map(4, 6), a in 0.01f64..0.99, b in 0.01f64..0.99) {
        let (lo, hi) = (a.min(b), a.max(b));
        let g_lo = binarize_heatmap(&m, lo).unwrap();
        let g_hi = binarize_heatmap(&m, hi).unwrap();
        for (&l, &h) in g_lo.data().iter().zip(g_hi.data()) {
            prop_assert!(l <= h);
        }
    }

    #[test]
    fn combine_is_and(a in grid(3, 4), b in grid(3, 4), c in grid(3, 4)) {
        let s = [3, 4];
        let ab = combine_masks(&[a.clone(), b.clone()], &s).unwrap();
        prop_assert_eq!(&ab, &combine_masks(&[b.clone(), a.clone()], &s).unwrap());
        let left = combine_masks(&[ab.clone(), c.clone()], &s).unwrap();
        let bc = combine_masks(&[b.clone(), c.clone()], &s).unwrap();
        prop_assert_eq!(&left, &combine_masks(&[a.clone(), bc], &s).unwrap());
        for ((&o, &x), &y) in ab.data().iter().zip(a.data()).zip(b.data()) {
            prop_assert!(o <= x && o <= y);
        }
    }

    #[test]
    fn cues_are_the_complement_of_suppression(m in map(6, 6), fraction in 0.01f64..0.99) {
        let cues = extract_cues(&m, fraction).unwrap();
        let grid = binarize_heatmap(&m, fraction).unwrap();
        if m.max() > 0.0 {
            for (&c, &g) in cues.data().iter().zip(grid.data()) {
                prop_assert_eq!(c, 1.0 - g);
            }
        } else {
            prop_assert!(cues.data().iter().all(|&c| c == 0.0));
        }
    }

    #[test]
    fn cues_shrink_as_fraction_rises(m in map(5, 5), a in 0.01f64..0.99, b in 0.01f64..0.99) {
        let (lo, hi) = (a.min(b), a.max(b));
        let c_lo = extract_cues(&m, lo).unwrap();
        let c_hi = extract_cues(&m, hi).unwrap();
        for (&l, &h) in c_lo.data().iter().zip(c_hi.data()) {
            prop_assert!(h <= l);
        }
    }

    #[test]
    fn voting_is_an_order_free_upper_envelope(a in heat_set(1), b in heat_set(2), c in heat_set(3)) {
        let abc = weighted_map_voting(&[a.clone(), b.clone(), c.clone()]).unwrap();
        let cba = weighted_map_voting(&[c.clone(), b.clone(), a.clone()]).unwrap();
        prop_assert_eq!(&abc.maps, &cba.maps);
        let ab = weighted_map_voting(&[a.clone(), b.clone()]).unwrap();
        let nested = HeatMapSet { maps: ab.maps.clone(), probs: vec![1.0, 1.0], phase: 0 };
        let c1 = weighted_map_voting(&[nested, c.clone()]).unwrap();
        prop_assert_eq!(&abc.maps, &c1.maps);
        for s in [&a, &b, &c] {
            for class in 0..2 {
                let fused = abc.class_map(class);
                for (&f, &h) in fused.data().iter().zip(s.maps.outer(class)) {
                    prop_assert!(f >= s.probs[class] * h);
                }
            }
        }
        let twice = weighted_map_voting(&[a.clone(), a.clone()]).unwrap();
        let once = weighted_map_voting(&[a.clone()]).unwrap();
        prop_assert_eq!(twice, once);
    }
}
