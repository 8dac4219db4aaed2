use bsunet::gradcheck::{central_difference, relative_error};
use bsunet::losses::{
    batch_dice, batch_euclidean, dice_loss, dice_loss_grad, euclidean_loss, euclidean_loss_grad, total_loss,
    weighted_dice_loss, weighted_dice_loss_grad, EuclideanForm, LossWeights,
};
use bsunet::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn grid(cells: &[(usize, usize)]) -> Vec<f64> {
    let mut g = vec![0.0; 16];
    for &(y, x) in cells {
        g[y * 4 + x] = 1.0;
    }
    g
}

#[test]
fn worked_dice_example() {
    // |A| = 4, |B| = 4, two shared pixels
    let a = grid(&[(0, 0), (0, 1), (1, 0), (1, 1)]);
    let b = grid(&[(0, 1), (1, 1), (0, 2), (1, 2)]);
    let l = dice_loss(&a, &b).unwrap();
    let exact = 1.0 - (4.0 + 1e-6) / (8.0 + 1e-6);
    assert!((l - exact).abs() < 1e-15);
    assert!((l - 0.5).abs() < 1e-6);
}

#[test]
fn weighted_dice_restricts_to_supported_pixels() {
    let a = grid(&[(0, 0), (0, 1), (2, 2), (3, 3)]);
    let b = grid(&[(0, 1), (1, 1), (2, 2), (3, 2)]);
    // weights zero out the bottom half
    let w: Vec<f64> = (0..16).map(|i| if i < 8 { 1.0 } else { 0.0 }).collect();
    // top half: A = {(0,0),(0,1)}, B = {(0,1),(1,1)}, overlap 1
    let expected = 1.0 - (2.0 + 1e-6) / (4.0 + 1e-6);
    assert!((weighted_dice_loss(&a, &b, &w).unwrap() - expected).abs() < 1e-15);
}

#[test]
fn euclidean_worked_values() {
    assert_eq!(
        euclidean_loss(&[1.0, 0.0], &[0.0, 1.0], EuclideanForm::Sum).unwrap(),
        2.0
    );
    assert_eq!(
        euclidean_loss(&[1.0, 0.0], &[0.0, 1.0], EuclideanForm::Mean).unwrap(),
        1.0
    );
    assert_eq!(
        euclidean_loss(&[0.3, 0.7], &[0.3, 0.7], EuclideanForm::Mean).unwrap(),
        0.0
    );
}

#[test]
fn total_loss_cases() {
    let half = LossWeights::default();
    assert!((total_loss(0.4, 0.2, &half) - 0.3).abs() < 1e-15);
    let dice_only = LossWeights::new(1.0, 0.0).unwrap();
    assert_eq!(total_loss(0.37, 5.0, &dice_only), 0.37);
    assert_eq!(total_loss(0.4, 0.0, &half), 0.2);
}

#[test]
fn gradients_match_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let h = 1e-3;
    for _ in 0..5 {
        let pred: Vec<f64> = (0..36).map(|_| rng.random_range(0.05..0.95)).collect();
        let target: Vec<f64> = (0..36).map(|_| f64::from(u8::from(rng.random_bool(0.4)))).collect();
        let w: Vec<f64> = (0..36).map(|_| rng.random_range(0.0..1.0)).collect();
        let t1: Vec<f64> = (0..36).map(|_| rng.random_range(-1.0..1.0)).collect();

        let (_, g) = dice_loss_grad(&pred, &target).unwrap();
        let (_, gw) = weighted_dice_loss_grad(&pred, &target, &w).unwrap();
        let (_, ge) = euclidean_loss_grad(&t1, &pred, EuclideanForm::Mean).unwrap();
        let weights = LossWeights::default();
        let mut p = pred.clone();
        for i in 0..36 {
            let n = central_difference(&mut p, i, h, |p| dice_loss(p, &target).unwrap());
            assert!(relative_error(g[i], n, 1e-8) < 1e-4);
            let n = central_difference(&mut p, i, h, |p| weighted_dice_loss(p, &target, &w).unwrap());
            assert!(relative_error(gw[i], n, 1e-8) < 1e-4);
            let n = central_difference(&mut p, i, h, |p| euclidean_loss(&t1, p, EuclideanForm::Mean).unwrap());
            assert!(relative_error(ge[i], n, 1e-8) < 1e-4);
            let n = central_difference(&mut p, i, h, |p| {
                total_loss(
                    weighted_dice_loss(p, &target, &w).unwrap(),
                    euclidean_loss(&t1, p, EuclideanForm::Mean).unwrap(),
                    &weights,
                )
            });
            assert!(relative_error(0.5 * gw[i] + 0.5 * ge[i], n, 1e-8) < 1e-4);
        }
    }
}

#[test]
fn batch_losses_average_per_sample_values() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let pred = Tensor::from_vec([3, 1, 4, 4], (0..48).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
    let target = Tensor::from_vec([3, 1, 4, 4], (0..48).map(|i| f64::from(u8::from(i % 3 == 0))).collect()).unwrap();
    let (l, g) = batch_dice(&pred, &target, None).unwrap();
    let mean = (0..3)
        .map(|i| dice_loss(pred.sample(i), target.sample(i)).unwrap())
        .sum::<f64>()
        / 3.0;
    assert!((l - mean).abs() < 1e-15);
    let (_, g0) = dice_loss_grad(pred.sample(0), target.sample(0)).unwrap();
    assert!((g.sample(0)[5] - g0[5] / 3.0).abs() < 1e-15);

    let (e, ge) = batch_euclidean(&pred, &target, EuclideanForm::Sum).unwrap();
    let mean = (0..3)
        .map(|i| euclidean_loss(pred.sample(i), target.sample(i), EuclideanForm::Sum).unwrap())
        .sum::<f64>()
        / 3.0;
    assert!((e - mean).abs() < 1e-12);
    assert_eq!(ge.shape(), target.shape());
}

proptest! {
    #[test]
    fn loss_properties(pairs in proptest::collection::vec((0.0f64..=1.0, any::<bool>(), 0.0f64..=1.0), 1..64),
                       seed in any::<u64>()) {
        let pred: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let target: Vec<f64> = pairs.iter().map(|p| f64::from(u8::from(p.1))).collect();
        let w: Vec<f64> = pairs.iter().map(|p| p.2).collect();
        let d = dice_loss(&pred, &target).unwrap();
        prop_assert!((0.0..=1.0 + 1e-6).contains(&d));
        let dw = weighted_dice_loss(&pred, &target, &w).unwrap();
        prop_assert!((0.0..=1.0 + 1e-6).contains(&dw));
        let ones = vec![1.0; pred.len()];
        prop_assert_eq!(weighted_dice_loss(&pred, &target, &ones).unwrap(), d);
        prop_assert!(weighted_dice_loss(&target, &target, &w).unwrap() < 1e-6);

        let e = euclidean_loss(&pred, &w, EuclideanForm::Mean).unwrap();
        prop_assert!(e >= 0.0);
        prop_assert_eq!(e, euclidean_loss(&w, &pred, EuclideanForm::Mean).unwrap());
        let mut idx: Vec<usize> = (0..pred.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in (1..idx.len()).rev() {
            idx.swap(i, rng.random_range(0..=i));
        }
        let pp: Vec<f64> = idx.iter().map(|&i| pred[i]).collect();
        let ww: Vec<f64> = idx.iter().map(|&i| w[i]).collect();
        let ep = euclidean_loss(&pp, &ww, EuclideanForm::Mean).unwrap();
        prop_assert!((e - ep).abs() <= 1e-12 * e.max(1.0));
    }
}
