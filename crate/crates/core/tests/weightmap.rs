use bsunet::weightmap::{
    contour, contour_distance_map, preview, unnormalized_weights, weight_map, weight_map_for_label, Exponent, RoiMode,
    WeightMapParams,
};
use ndarray::Array2;
use proptest::prelude::*;

fn brute_contour_distance(label: &Array2<bool>) -> Array2<f64> {
    let (h, w) = label.dim();
    let mut pts = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let fg = label[[y, x]];
            let nb = [(-1i64, 0i64), (1, 0), (0, -1), (0, 1)].iter().any(|(dy, dx)| {
                let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                ny >= 0 && nx >= 0 && (ny as usize) < h && (nx as usize) < w && !label[[ny as usize, nx as usize]]
            });
            if fg && nb {
                pts.push((y as f64, x as f64));
            }
        }
    }
    Array2::from_shape_fn((h, w), |(y, x)| {
        pts.iter()
            .map(|(py, px)| ((y as f64 - py).powi(2) + (x as f64 - px).powi(2)).sqrt())
            .fold(f64::INFINITY, f64::min)
    })
}

fn mask_strategy(h: usize, w: usize) -> impl Strategy<Value = Array2<bool>> {
    proptest::collection::vec(any::<bool>(), h * w)
        .prop_filter("needs both classes", |v| v.iter().any(|&b| b) && v.iter().any(|&b| !b))
        .prop_map(move |v| Array2::from_shape_vec((h, w), v).unwrap())
}

#[test]
fn lone_pixel_distance() {
    let mut label = Array2::from_elem((5, 5), false);
    label[[0, 0]] = true;
    let d = contour_distance_map(label.view()).unwrap();
    assert_eq!(d[[0, 0]], 0.0);
    assert_eq!(d[[3, 4]], 5.0);
}

#[test]
fn exponent_is_linear_in_distance_by_default() {
    // one contour pixel; the pixel at distance 5 has A = exp(-5 / (2·2²))
    let mut label = Array2::from_elem((5, 5), false);
    label[[0, 0]] = true;
    let d = contour_distance_map(label.view()).unwrap();
    let roi = Array2::from_elem((5, 5), false);
    let p = WeightMapParams {
        w: 0.0,
        sigma: 2.0,
        ..Default::default()
    };
    let a = unnormalized_weights(d.view(), roi.view(), &p).unwrap();
    assert_eq!(a[[3, 4]], (-5.0f64 / 8.0).exp());
    let sq = WeightMapParams {
        exponent: Exponent::Squared,
        ..p
    };
    let a = unnormalized_weights(d.view(), roi.view(), &sq).unwrap();
    assert_eq!(a[[3, 4]], (-25.0f64 / 8.0).exp());
}

#[test]
fn contour_pixels_weigh_one_without_roi() {
    let mut label = Array2::from_elem((12, 12), false);
    for y in 3..9 {
        for x in 2..10 {
            label[[y, x]] = true;
        }
    }
    let p = WeightMapParams {
        w: 0.0,
        sigma: 3.0,
        ..Default::default()
    };
    let w = weight_map_for_label(label.view(), None, &p).unwrap();
    let c = contour(label.view());
    for (wv, cv) in w.iter().zip(c.iter()) {
        if *cv {
            assert_eq!(*wv, 1.0);
        }
    }
}

#[test]
fn parameter_sets_render_distinct_maps() {
    let mut label = Array2::from_elem((256, 256), false);
    for y in 64..192 {
        for x in 80..160 {
            label[[y, x]] = true;
        }
    }
    let a = WeightMapParams {
        w: 0.05,
        sigma: 25.0,
        exponent: Exponent::Linear,
        roi: RoiMode::None,
    };
    let b = WeightMapParams {
        w: 0.1,
        sigma: 15.0,
        ..a
    };
    let wa = weight_map_for_label(label.view(), None, &a).unwrap();
    let wb = weight_map_for_label(label.view(), None, &b).unwrap();
    let diff = (&wa - &wb).iter().fold(0.0f64, |m, v| m.max(v.abs()));
    // with the linear exponent the two normalized maps stay close; the gap
    // grows with image size (about 0.07 at 512x512)
    assert!(diff > 0.02, "{diff}");
    // the tighter sigma decays faster away from the contour
    assert!(wb[[0, 0]] < wa[[0, 0]]);
    assert_eq!(preview(wa.view()).iter().copied().max(), Some(255));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn distance_map_matches_brute_force_and_is_lipschitz(label in mask_strategy(16, 16)) {
        let d = contour_distance_map(label.view()).unwrap();
        let oracle = brute_contour_distance(&label);
        for (a, b) in d.iter().zip(oracle.iter()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
        let c = contour(label.view());
        for ((y, x), v) in d.indexed_iter() {
            prop_assert_eq!(*v == 0.0, c[[y, x]]);
            for ((y2, x2), v2) in d.indexed_iter() {
                let e = ((y as f64 - y2 as f64).powi(2) + (x as f64 - x2 as f64).powi(2)).sqrt();
                prop_assert!((v - v2).abs() <= e + 1e-12);
            }
        }
    }

    #[test]
    fn weights_span_unit_interval_and_decay(label in mask_strategy(12, 12), roi in mask_strategy(12, 12),
                                            w in 0.0f64..1.0, sigma in 0.5f64..30.0) {
        let p = WeightMapParams { w, sigma, ..Default::default() };
        let d = contour_distance_map(label.view()).unwrap();
        let a = unnormalized_weights(d.view(), roi.view(), &p).unwrap();
        let wm = weight_map(d.view(), roi.view(), &p).unwrap();
        let lo = wm.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = wm.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(wm.iter().all(|v| (0.0..=1.0).contains(v)));
        let constant = a.iter().all(|v| *v == a[[0, 0]]);
        if !constant {
            prop_assert_eq!(lo, 0.0);
            prop_assert_eq!(hi, 1.0);
        }
        let pts: Vec<_> = d.indexed_iter().map(|(i, v)| (i, *v)).collect();
        for &(i, di) in &pts {
            for &(j, dj) in &pts {
                if roi[i] == roi[j] && di < dj {
                    prop_assert!(wm[i] >= wm[j]);
                }
                if di == dj && roi[i] && !roi[j] {
                    prop_assert!((a[i] - (1.0 + w) * a[j]).abs() <= 1e-12 * a[i].abs());
                }
            }
        }
    }
}
