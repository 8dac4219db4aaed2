use bsunet::blocks::{
    Block, DenseBlock, DenseBlockSpec, DownBlock, DownBlockSpec, TransitionBlock, TransitionBlockSpec, UpBlock,
    UpBlockSpec,
};
use bsunet::gradcheck::{check_block, Tolerance};
use bsunet::nn::Mode;
use bsunet::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn assert_gradients(block: &mut dyn Block, in_shape: [usize; 4], seed: u64) {
    assert!(block.num_parameters() <= 1000, "{} parameters", block.num_parameters());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Zero biases put ReLU inputs exactly on the kink wherever the incoming
    // activations vanish; jitter every parameter off the initialization.
    block.visit_params_mut(&mut |p| {
        if p.trainable {
            p.value.iter_mut().for_each(|v| *v += rng.random_range(-0.1..0.1));
        }
    });
    let x = random(in_shape, &mut rng);
    let out = block.forward(&x, Mode::Eval).unwrap();
    let r = random(out.shape(), &mut rng);
    // At a step of 1e-3 almost every perturbation flips some ReLU or pooling
    // decision somewhere in the block, so the estimate is taken at 1e-5.
    let tol = Tolerance {
        step: 1e-5,
        rel: 1e-4,
        floor: 1e-5,
    };
    let report = check_block(block, &x, &r, &tol).unwrap();
    assert!(
        report.passed(&tol, 0.02),
        "max relative error {:.3e} at entry {} of {} (analytic {:e}, numeric {:e}), {} kinks",
        report.max_rel_error,
        report.worst,
        report.checked,
        report.worst_pair.0,
        report.worst_pair.1,
        report.kinks
    );
}

#[test]
fn transition_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut b = TransitionBlock::new(TransitionBlockSpec { a: 2, b: 2 }, &mut rng).unwrap();
    assert_gradients(&mut b, [2, 2, 8, 8], 11);
}

#[test]
fn dense_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut b = DenseBlock::new(DenseBlockSpec { a: 4, k: 2 }, &mut rng).unwrap();
    assert_gradients(&mut b, [2, 4, 8, 8], 12);
}

#[test]
fn up_gradients() {
    for (seed, k) in [(3, 3), (4, 4), (5, 5)] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = UpBlock::new(UpBlockSpec { a: 2, p: 2, b: 2, k }, &mut rng).unwrap();
        assert_gradients(&mut b, [2, 2, 8, 8], 10 + seed);
    }
}

#[test]
fn down_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut b = DownBlock::new(DownBlockSpec { a: 2, p: 2, b: 2 }, &mut rng).unwrap();
    assert_gradients(&mut b, [2, 2, 8, 8], 16);
}

#[test]
fn analytic_shapes_match_observed_on_random_sizes() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..10 {
        let h = 2 * rng.random_range(2..12usize);
        let w = 2 * rng.random_range(2..12usize);
        let (a, b, p) = (rng.random_range(1..4), rng.random_range(1..4), rng.random_range(1..4));

        let spec = TransitionBlockSpec { a, b };
        let y = TransitionBlock::new(spec, &mut rng)
            .unwrap()
            .forward(&Tensor::zeros([1, a, h, w]), Mode::Eval)
            .unwrap();
        let (c, oh, ow) = spec.output_shape(h, w).unwrap();
        assert_eq!(y.shape(), [1, c, oh, ow]);
        assert_eq!([c, oh, ow], [b, h, w]);

        let spec = DenseBlockSpec { a, k: b };
        let y = DenseBlock::new(spec, &mut rng)
            .unwrap()
            .forward(&Tensor::zeros([1, a, h, w]), Mode::Eval)
            .unwrap();
        assert_eq!(spec.output_shape(h, w), Some((a, h, w)));
        assert_eq!(y.shape(), [1, a, h, w]);

        let spec = DownBlockSpec { a, p, b };
        let y = DownBlock::new(spec, &mut rng)
            .unwrap()
            .forward(&Tensor::zeros([1, a, h, w]), Mode::Eval)
            .unwrap();
        assert_eq!(spec.output_shape(h, w), Some((b, h / 2, w / 2)));
        assert_eq!(y.shape(), [1, b, h / 2, w / 2]);

        let k = rng.random_range(3..6);
        let spec = UpBlockSpec { a, p, b, k };
        let y = UpBlock::new(spec, &mut rng)
            .unwrap()
            .forward(&Tensor::zeros([1, a, h, w]), Mode::Eval)
            .unwrap();
        assert_eq!(spec.output_shape(h, w), Some((b, 2 * h, 2 * w)));
        assert_eq!(y.shape(), [1, b, 2 * h, 2 * w]);
    }
}

#[test]
fn eval_forward_is_bitwise_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut b = DownBlock::new(DownBlockSpec { a: 3, p: 4, b: 5 }, &mut rng).unwrap();
    let x = random([2, 3, 16, 16], &mut rng);
    let y1 = b.forward(&x, Mode::Eval).unwrap();
    let y2 = b.forward(&x, Mode::Eval).unwrap();
    assert_eq!(y1.data(), y2.data());
}
