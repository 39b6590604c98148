use proptest::prelude::*;

use drpan_core::objectives::{l1_terms, patch_d_loss, reviser_loss};
use drpan_core::region_proposal::{scale_factor, window_size};
use drpan_core::{composite, crop, propose_region, psnr, ssim, GeometryConfig, ObjectiveWeights, Region, ScoreMap, Tensor};

fn geometry() -> impl Strategy<Value = GeometryConfig> {
    (16usize..=256, 2usize..=40)
        .prop_flat_map(|(wi, ws)| (Just(wi), Just(ws), 1..wi))
        .prop_map(|(wi, ws, wstar)| GeometryConfig::new(wi, ws, wstar).unwrap())
}

fn map_for(size: usize) -> impl Strategy<Value = ScoreMap> {
    prop::collection::vec(0.0f64..=1.0, size * size).prop_map(move |v| ScoreMap::new(size, v, 0).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn proposed_box_stays_inside_the_image((geom, map) in geometry().prop_flat_map(|g| (Just(g), map_for(g.scoremap_size)))) {
        let r = propose_region(&map, &geom).unwrap();
        prop_assert_eq!(r.side, geom.region_size);
        prop_assert!(r.x0 + r.side <= geom.image_size && r.y0 + r.side <= geom.image_size);
        let w = window_size(&geom).unwrap();
        prop_assert!(w >= 1 && w < geom.scoremap_size);
        prop_assert!(scale_factor(&geom, w).unwrap() > 0.0);
        // the winning window is no worse than any other
        let s = geom.scoremap_size;
        let mean = |r0: usize, c0: usize| {
            (r0..r0 + w).flat_map(|y| (c0..c0 + w).map(move |x| (y, x))).map(|(y, x)| map.at(y, x)).sum::<f64>() / (w * w) as f64
        };
        for r0 in 0..=s - w {
            for c0 in 0..=s - w {
                prop_assert!(r.mean_score <= mean(r0, c0) + 1e-12);
            }
        }
    }

    #[test]
    fn proposal_is_equivariant_under_transpose((geom, map) in geometry().prop_flat_map(|g| (Just(g), map_for(g.scoremap_size)))) {
        let s = map.size();
        let t: Vec<f64> = (0..s * s).map(|i| map.at(i % s, i / s)).collect();
        let a = propose_region(&map, &geom).unwrap();
        let b = propose_region(&ScoreMap::new(s, t, 0).unwrap(), &geom).unwrap();
        // ties may break differently after transposing, the optimum may not
        prop_assert!((a.mean_score - b.mean_score).abs() < 1e-12);
    }

    #[test]
    fn masked_fake_is_fake_inside_and_real_outside(
        (h, w, side) in (4usize..24, 4usize..24).prop_flat_map(|(h, w)| (Just(h), Just(w), 1..=h.min(w))),
        seed in any::<u64>(),
    ) {
        let n = 2;
        let real = Tensor::from_vec(vec![n, 3, h, w], (0..n * 3 * h * w).map(|i| (i as f32).sin()).collect()).unwrap();
        let fake = real.map(|v| v + 2.0);
        let regions: Vec<Region> = (0..n as u64)
            .map(|k| {
                let z = seed.wrapping_mul(6364136223846793005).wrapping_add(k * 1442695040888963407);
                Region::from_box((z >> 33) as usize % (w - side + 1), (z >> 13) as usize % (h - side + 1), side)
            })
            .collect();
        let m = composite(&real, &fake, &regions).unwrap();
        let inside: usize = m.masked_fake.data().iter().zip(fake.data()).filter(|(a, b)| a == b).count();
        prop_assert_eq!(inside, n * 3 * side * side);
        prop_assert_eq!(&crop(&m.masked_fake, &regions).unwrap(), &m.fake_crop);
        prop_assert_eq!(m.real_crop.shape(), &[n, 3, side, side]);
    }

    #[test]
    fn losses_are_nonnegative_and_permutation_invariant(
        pairs in prop::collection::vec((0.001f64..0.999, 0.001f64..0.999, 0.0f64..3.0), 1..16),
        rot in 0usize..16,
    ) {
        let (r, f, g): (Vec<f64>, Vec<f64>, Vec<f64>) = pairs.iter().fold((vec![], vec![], vec![]), |mut acc, &(a, b, c)| {
            acc.0.push(a); acc.1.push(b); acc.2.push(c); acc
        });
        let k = rot % r.len();
        let rotate = |v: &Vec<f64>| [&v[k..], &v[..k]].concat();
        let d = patch_d_loss(&r, &f).unwrap();
        prop_assert!(d >= 0.0);
        prop_assert!((d - patch_d_loss(&rotate(&r), &rotate(&f)).unwrap()).abs() < 1e-9);
        let l = reviser_loss(&r, &f, &g, 10.0).unwrap();
        prop_assert!(l >= 0.0);
        prop_assert!((l - reviser_loss(&rotate(&r), &rotate(&f), &rotate(&g), 10.0).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn l1_terms_are_nonnegative_and_zero_on_identity(v in prop::collection::vec(-1.0f32..1.0, 48)) {
        let a = Tensor::from_vec(vec![1, 3, 4, 4], v).unwrap();
        let b = a.map(|x| -x);
        let w = ObjectiveWeights::default();
        let (full, region) = l1_terms(&a, &b, &a, &b, &w).unwrap();
        prop_assert!(full >= 0.0 && region >= 0.0);
        prop_assert_eq!(l1_terms(&a, &a, &a, &a, &w).unwrap(), (0.0, 0.0));
    }

    #[test]
    fn metrics_are_symmetric_and_psnr_shift_invariant(
        v in prop::collection::vec(10u8..200, 3 * 16 * 16),
        noise in prop::collection::vec(0u8..40, 3 * 16 * 16),
        shift in 0u8..15,
    ) {
        let t = |d: Vec<f64>| Tensor::from_vec(vec![3, 16, 16], d).unwrap();
        let a = t(v.iter().map(|&x| x as f64).collect());
        let b = t(v.iter().zip(&noise).map(|(&x, &n)| x as f64 + n as f64).collect());
        let p = psnr(&a, &b, 255.0).unwrap();
        prop_assert!((p - psnr(&b, &a, 255.0).unwrap()).abs() < 1e-12);
        prop_assert!((ssim(&a, &b, 255.0).unwrap() - ssim(&b, &a, 255.0).unwrap()).abs() < 1e-12);
        let s = shift as f64;
        let p_shifted = psnr(&a.map(|x| x + s), &b.map(|x| x + s), 255.0).unwrap();
        prop_assert!((p - p_shifted).abs() < 1e-9);
        prop_assert!(ssim(&a, &b, 255.0).unwrap() <= 1.0);
    }
}
