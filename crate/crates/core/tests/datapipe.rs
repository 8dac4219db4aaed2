use bsunet::cache::{read_cache, write_cache};
use bsunet::cascade::{
    cascade_forward_mask, cascade_invert, cascade_preprocess, tumor_samples, CascadeGeometry, CASCADE_MARGIN,
    CASCADE_SIZE,
};
use bsunet::datapipe::*;
use bsunet::synth::{synthetic_case, synthetic_pairs};
use bsunet::volume::{lits_cases, write_ct, CtVolume, LabelVolume};
use bsunet::weightmap::WeightMapParams;
use bsunet::Error;
use ndarray::{s, Array2, Array3};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn vol(values: &[f64]) -> Array3<f64> {
    Array3::from_shape_vec((1, 1, values.len()), values.to_vec()).unwrap()
}

#[test]
fn hu_window_examples() {
    let w = hu_window(vol(&[300.0, -500.0, 100.0]).view());
    assert_eq!(w.iter().copied().collect::<Vec<_>>(), vec![250.0, -200.0, 100.0]);
    assert_eq!(hu_window(w.view()), w);
}

#[test]
fn minmax_examples() {
    let n = minmax_normalize(vol(&[-200.0, 250.0, 25.0]).view(), Scaling::PerVolume).unwrap();
    assert_eq!(n[[0, 0, 0]], 0.0);
    assert_eq!(n[[0, 0, 1]], 255.0);
    assert!((n[[0, 0, 2]] - (25.0 + 200.0) / 450.0 * 255.0).abs() < 1e-12);
    assert!((n[[0, 0, 2]] - 127.5).abs() < 1e-12);
    assert!(matches!(
        minmax_normalize(vol(&[7.0, 7.0]).view(), Scaling::PerVolume),
        Err(Error::Degenerate(_))
    ));
}

#[test]
fn slice_counts() {
    let v = Array3::<f64>::zeros((100, 8, 8));
    assert_eq!(slice_volume(v.view(), Channels::One).unwrap().len(), 100);
    assert_eq!(slice_volume(v.view(), Channels::Three).unwrap().len(), 98);

    let v = Array3::from_shape_fn((3, 2, 2), |(z, _, _)| z as f64);
    let s = slice_volume(v.view(), Channels::Three).unwrap();
    assert_eq!(s.len(), 1);
    assert_eq!(s[0].0, 1);
    assert_eq!(s[0].1, v);
    assert!(slice_volume(Array3::<f64>::zeros((2, 2, 2)).view(), Channels::Three).is_err());
}

#[test]
fn three_channel_label_is_center_slice() {
    let image = Array3::<f64>::zeros((3, 4, 4));
    let mut labels = Array3::<u8>::zeros((3, 4, 4));
    labels[[1, 2, 2]] = 1;
    labels[[0, 0, 0]] = 1;
    let lv = LabelVolume::new("v", labels, [1.0; 3]).unwrap();
    let s = liver_samples(image.view(), &lv, Channels::Three, LabelTarget::Liver).unwrap();
    assert_eq!(s.len(), 1);
    assert_eq!(s[0].slice, 1);
    assert!(s[0].label[[2, 2]] && !s[0].label[[0, 0]]);
}

#[test]
fn liver_filter_counts() {
    let image = Array3::<f64>::zeros((10, 6, 6));
    let mut labels = Array3::<u8>::zeros((10, 6, 6));
    for z in [1, 4, 5, 8] {
        labels[[z, 3, 3]] = if z == 5 { 2 } else { 1 };
    }
    let lv = LabelVolume::new("v", labels, [1.0; 3]).unwrap();
    let all = liver_samples(image.view(), &lv, Channels::One, LabelTarget::Liver).unwrap();
    assert_eq!(all.len(), 10);
    let kept = filter_liver_slices(all);
    assert_eq!(kept.iter().map(|s| s.slice).collect::<Vec<_>>(), vec![1, 4, 5, 8]);

    // liver-only drops the tumor-only slice
    let only = liver_samples(image.view(), &lv, Channels::One, LabelTarget::LiverOnly).unwrap();
    assert_eq!(filter_liver_slices(only).len(), 3);
}

#[test]
fn slicing_restacks_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let v = Array3::from_shape_fn((7, 5, 4), |_| rand::Rng::random_range(&mut rng, 0.0..1.0));
    let slices = slice_volume(v.view(), Channels::One).unwrap();
    let mut back = Array3::zeros(v.dim());
    for (z, img) in &slices {
        back.slice_mut(s![*z, .., ..]).assign(&img.slice(s![0, .., ..]));
    }
    assert_eq!(back, v);
    assert_eq!(slice_volume(v.view(), Channels::Three).unwrap().len(), slices.len() - 2);
}

fn square_sample(size: usize) -> SliceSample {
    let label = Array2::from_shape_fn((size, size), |(y, x)| (y / 4 + x / 4) % 2 == 0);
    let image = Array3::from_shape_fn((1, size, size), |(_, y, x)| f64::from(u8::from(label[[y, x]])));
    SliceSample::new("v", 0, image, label, Array2::from_elem((size, size), false)).unwrap()
}

#[test]
fn liver_augment_extremes() {
    let s = square_sample(64);
    let id = apply_scale_crop(
        &s,
        &ScaleCrop {
            scaled: 64,
            top: 0,
            left: 0,
        },
    )
    .unwrap();
    assert_eq!(id.image, s.image);
    assert_eq!(id.label, s.label);

    assert_eq!(liver_max_scaled(512), 600);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..200 {
        let t = ScaleCrop::sample(512, 600, &mut rng);
        assert!((512..=600).contains(&t.scaled));
        assert!(t.top <= t.scaled - 512 && t.left <= t.scaled - 512);
        assert!(t.top <= 88 && t.left <= 88);
    }
    assert!(
        ScaleCrop::sample_offsets(512, 512, &mut rng)
            == ScaleCrop {
                scaled: 512,
                top: 0,
                left: 0
            }
    );
}

#[test]
fn augment_keeps_image_and_label_aligned() {
    // image intensity equals the label, so a shared transform keeps the
    // thresholded image equal to the label except at exact 0.5 ties and
    // block corners
    let s = square_sample(64);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let params = WeightMapParams::default();
    for _ in 0..5 {
        let a = augment_liver(&s, &mut rng, &params).unwrap();
        let mismatch = a
            .image
            .slice(s![0, .., ..])
            .iter()
            .zip(a.label.iter())
            .filter(|(v, l)| (**v - 0.5).abs() > 1e-9 && (**v > 0.5) != **l)
            .count();
        assert!(mismatch as f64 <= 0.01 * 64.0 * 64.0, "{mismatch}");
        let expect = bsunet::weightmap::weight_map_for_label(a.label.view(), None, &params).unwrap();
        assert_eq!(a.weight, expect);
    }
}

#[test]
fn tumor_rotation_bounds_and_binarity() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for _ in 0..1000 {
        let t = TumorAugment::sample(224, &mut rng);
        lo = lo.min(t.angle_deg);
        hi = hi.max(t.angle_deg);
        assert_eq!(t.crop.scaled, 300);
        assert!(t.crop.top <= 76 && t.crop.left <= 76);
    }
    assert!(lo >= -45.0 && hi <= 45.0);
    assert!(lo < -40.0 && hi > 40.0, "draws should cover the range: {lo}..{hi}");

    let s = square_sample(32);
    let a = augment_tumor(&s, &mut rng, &WeightMapParams::default()).unwrap();
    assert_eq!(a.size(), (32, 32));
    assert!(a.image.iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn tumor_augment_identity_up_to_rescale() {
    let s = square_sample(224);
    let t = TumorAugment {
        crop: ScaleCrop {
            scaled: 300,
            top: 38,
            left: 38,
        },
        angle_deg: 0.0,
    };
    let a = apply_tumor_augment(&s, &t).unwrap();
    // the centered crop of the 300² rescale magnifies about the center by 300/224
    let k = 300.0 / 224.0;
    let c = 111.5;
    let mut agree = 0;
    for y in 0..224 {
        for x in 0..224 {
            let sy = ((y as f64 - c) / k + c).round() as usize;
            let sx = ((x as f64 - c) / k + c).round() as usize;
            agree += usize::from(a.label[[y, x]] == s.label[[sy, sx]]);
        }
    }
    assert!(agree as f64 >= 0.9 * 224.0 * 224.0, "{agree}");
}

fn mask_with_box(h: usize, w: usize, r: (usize, usize), c: (usize, usize)) -> Array2<bool> {
    Array2::from_shape_fn((h, w), |(y, x)| (r.0..=r.1).contains(&y) && (c.0..=c.1).contains(&x))
}

#[test]
fn cascade_crop_arithmetic() {
    let m = mask_with_box(512, 512, (100, 200), (150, 250));
    let g = CascadeGeometry::from_mask(m.view(), 0, CASCADE_MARGIN, CASCADE_SIZE).unwrap();
    assert_eq!((g.top, g.top + g.height - 1), (90, 210));
    assert_eq!((g.left, g.left + g.width - 1), (140, 260));
    assert_eq!(
        (g.height, g.width, g.side, g.pad_top, g.pad_left),
        (121, 121, 121, 0, 0)
    );

    // 100×70 box → 120×90 crop → 120×120 square, 15 columns each side
    let m = mask_with_box(512, 512, (100, 199), (300, 369));
    let image = Array3::from_elem((1, 512, 512), 0.5);
    let (img, g) = cascade_preprocess(image.view(), m.view(), 4).unwrap().unwrap();
    assert_eq!((g.height, g.width, g.side), (120, 90, 120));
    assert_eq!((g.pad_top, g.pad_left), (0, 15));
    assert_eq!(img.dim(), (1, 224, 224));
    assert_eq!(g.slice, 4);
    // background is masked out and the pad is zero
    assert_eq!(img[[0, 112, 0]], 0.0);
    assert!((img[[0, 112, 112]] - 0.5).abs() < 1e-12);

    // odd remainder goes to the bottom/right
    let m = mask_with_box(200, 200, (50, 69), (50, 68));
    let g = CascadeGeometry::from_mask(m.view(), 0, CASCADE_MARGIN, CASCADE_SIZE).unwrap();
    assert_eq!((g.height, g.width, g.pad_left), (40, 39, 0));
    assert_eq!(g.side - g.width - g.pad_left, 1);
}

#[test]
fn cascade_empty_and_single_pixel() {
    let empty = Array2::from_elem((64, 64), false);
    let image = Array3::<f64>::zeros((1, 64, 64));
    assert!(cascade_preprocess(image.view(), empty.view(), 0).unwrap().is_none());

    let m = mask_with_box(64, 64, (20, 40), (10, 30));
    let g = CascadeGeometry::from_mask(m.view(), 0, CASCADE_MARGIN, CASCADE_SIZE).unwrap();
    let zero = Array2::from_elem((224, 224), false);
    assert!(cascade_invert(zero.view(), &g).unwrap().iter().all(|v| !v));

    // side 41: cascade row i is read back by square row j when
    // i = floor((j + .5)·224/41)
    let (sy, sx) = (18, 10);
    let (cy, cx) = (
        bsunet::imageops::nearest_index(sy, 224, 41),
        bsunet::imageops::nearest_index(sx, 224, 41),
    );
    assert_eq!((cy, cx), (101, 57));
    let mut one = zero.clone();
    one[[cy, cx]] = true;
    let back = cascade_invert(one.view(), &g).unwrap();
    assert_eq!((g.side, g.pad_top, g.pad_left), (41, 0, 0));
    let lit: Vec<(usize, usize)> = back.indexed_iter().filter(|(_, v)| **v).map(|(p, _)| p).collect();
    assert_eq!(lit, vec![(g.top + sy, g.left + sx)]);
    assert!(lit[0].0 >= g.top && lit[0].0 < g.top + g.height);
    assert!(lit[0].1 >= g.left && lit[0].1 < g.left + g.width);

    assert!(cascade_invert(Array2::from_elem((10, 10), false).view(), &g).is_err());
    assert!(cascade_forward_mask(Array2::from_elem((10, 10), false).view(), &g).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cascade_round_trip_on_crop(
        h in 20usize..90, w in 20usize..90,
        r0 in 0usize..60, c0 in 0usize..60, dr in 0usize..40, dc in 0usize..40,
        seed in any::<u64>(),
    ) {
        let r1 = (r0 + dr).min(h - 1);
        let c1 = (c0 + dc).min(w - 1);
        let r0 = r0.min(r1);
        let c0 = c0.min(c1);
        let liver = mask_with_box(h, w, (r0, r1), (c0, c1));
        let g = CascadeGeometry::from_mask(liver.view(), 0, CASCADE_MARGIN, CASCADE_SIZE).unwrap();
        prop_assert!(g.is_lossless());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = Array2::from_shape_fn((h, w), |_| rand::Rng::random_bool(&mut rng, 0.3));
        let fwd = cascade_forward_mask(m.view(), &g).unwrap();
        let back = cascade_invert(fwd.view(), &g).unwrap();
        let region = s![g.top..g.top + g.height, g.left..g.left + g.width];
        prop_assert_eq!(back.slice(region), m.slice(region));
        let outside = back.iter().filter(|v| **v).count() - back.slice(region).iter().filter(|v| **v).count();
        prop_assert_eq!(outside, 0);
    }

    #[test]
    fn normalized_volume_in_range(values in proptest::collection::vec(-3000.0f64..3000.0, 2..40)) {
        prop_assume!(values.iter().any(|v| v.clamp(-200.0, 250.0) != values[0].clamp(-200.0, 250.0)));
        let v = vol(&values);
        let w = hu_window(v.view());
        prop_assert_eq!(hu_window(w.view()), w.clone());
        let n = minmax_normalize(w.view(), Scaling::PerVolume).unwrap();
        prop_assert!(n.iter().all(|x| (0.0..=255.0).contains(x)));
        let f = minmax_normalize(w.view(), Scaling::Fixed).unwrap();
        prop_assert!(f.iter().all(|x| (0.0..=255.0).contains(x)));
    }

    #[test]
    fn rotation_keeps_labels_binary_and_shared(angle in -45.0f64..45.0, seed in any::<u64>()) {
        let s = square_sample(24);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = TumorAugment::sample(24, &mut rng);
        t.angle_deg = angle;
        let a = apply_tumor_augment(&s, &t).unwrap();
        prop_assert_eq!(a.size(), (24, 24));
        // the ROI is transformed by the same map as the label
        let s2 = SliceSample::new("v", 0, s.image.clone(), s.label.clone(), s.label.clone()).unwrap();
        let b = apply_tumor_augment(&s2, &t).unwrap();
        prop_assert_eq!(&b.roi, &b.label);
        prop_assert_eq!(&b.label, &a.label);
    }
}

#[test]
fn tumor_samples_from_synthetic_case() {
    let (ct, labels) = synthetic_case("volume-0", (12, 64, 64), 1).unwrap();
    let image = preprocess_volume(&ct, Scaling::PerVolume).unwrap();
    let samples = tumor_samples(image.view(), &labels, Channels::Three).unwrap();
    let liver_slices = (1..11)
        .filter(|&z| labels.labels.slice(s![z, .., ..]).iter().any(|&v| v >= 1))
        .count();
    assert_eq!(samples.len(), liver_slices);
    for (s, g) in &samples {
        assert_eq!(s.image.dim(), (3, 224, 224));
        assert!(g.is_lossless());
        let truth = labels.labels.slice(s![s.slice, .., ..]).mapv(|v| v == 2);
        let back = cascade_invert(s.label.view(), g).unwrap();
        assert_eq!(back, truth);
    }
}

#[test]
fn nifti_round_trip_and_lits_names() {
    let dir = tempfile::tempdir().unwrap();
    let (ct, labels) = synthetic_case("volume-3", (5, 9, 7), 2).unwrap();
    write_ct(&ct, dir.path().join("volume-3.nii")).unwrap();
    labels.write(dir.path().join("segmentation-3.nii.gz"), None).unwrap();
    std::fs::write(dir.path().join("notes.txt"), "x").unwrap();

    let cases = lits_cases(dir.path()).unwrap();
    assert_eq!(cases.len(), 1);
    assert_eq!(cases[0].id, "volume-3");
    let back = CtVolume::read(&cases[0].volume).unwrap();
    assert_eq!(back.voxels.dim(), (5, 9, 7));
    assert_eq!(back.id, "volume-3");
    assert!(back.voxels.iter().zip(&ct.voxels).all(|(a, b)| (a - b).abs() < 1e-3));
    assert_eq!(back.spacing, [0.8f32 as f64, 0.8f32 as f64, 2.5]);
    let lb = LabelVolume::read(cases[0].segmentation.as_ref().unwrap()).unwrap();
    assert_eq!(lb.labels, labels.labels);
}

#[test]
fn cache_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut samples = synthetic_pairs(3, 16, 3, 9).unwrap();
    samples[1].roi[[2, 3]] = true;
    samples[2].volume = "volume-12".into();
    let p = dir.path().join("c.bin");
    write_cache(&p, &samples).unwrap();
    let back = read_cache(&p).unwrap();
    assert_eq!(back.len(), 3);
    for (a, b) in back.iter().zip(&samples) {
        assert_eq!((&a.volume, a.slice), (&b.volume, b.slice));
        assert_eq!(a.label, b.label);
        assert_eq!(a.roi, b.roi);
        assert!(a.image.iter().zip(&b.image).all(|(x, y)| (x - y).abs() < 1e-6));
    }
    std::fs::write(&p, b"nope").unwrap();
    assert!(matches!(read_cache(&p), Err(Error::Format { .. })));
}
