//! Synthetic fixtures: random ellipse label maps, image/label pairs, and
//! small CT volumes with a liver-like ellipsoid and one bright lesion.

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::datapipe::SliceSample;
use crate::error::Result;
use crate::volume::{CtVolume, LabelVolume, LIVER, TUMOR};

/// Semi-axis range of [`ellipse_label`], as fractions of the image size.
pub const DEFAULT_AXES: (f64, f64) = (0.12, 0.3);

/// Filled ellipse with random center, semi-axes and orientation, kept well
/// inside the image.
pub fn ellipse_label(size: usize, rng: &mut impl Rng) -> Array2<bool> {
    ellipse_label_with_axes(size, DEFAULT_AXES, rng)
}

/// As [`ellipse_label`] with semi-axes drawn from `axes` (fractions of the
/// size, at most 0.4). The center keeps a 5% margin to the border.
pub fn ellipse_label_with_axes(size: usize, axes: (f64, f64), rng: &mut impl Rng) -> Array2<bool> {
    let s = size as f64;
    let (lo, hi) = axes;
    assert!(
        0.0 < lo && lo < hi && hi <= 0.4,
        "semi-axis fractions {axes:?} out of range"
    );
    let a = rng.random_range(s * lo..s * hi);
    let b = rng.random_range(s * lo..s * hi);
    let cy = rng.random_range(s * (hi + 0.05)..=s * (0.95 - hi));
    let cx = rng.random_range(s * (hi + 0.05)..=s * (0.95 - hi));
    let (sn, cs) = rng.random_range(0.0..std::f64::consts::PI).sin_cos();
    Array2::from_shape_fn((size, size), |(y, x)| {
        let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
        let u = cs * dx + sn * dy;
        let v = -sn * dx + cs * dy;
        (u / a).powi(2) + (v / b).powi(2) <= 1.0
    })
}

pub fn ellipse_labels(n: usize, size: usize, seed: u64) -> Vec<Array2<bool>> {
    ellipse_labels_with_axes(n, size, DEFAULT_AXES, seed)
}

pub fn ellipse_labels_with_axes(n: usize, size: usize, axes: (f64, f64), seed: u64) -> Vec<Array2<bool>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| ellipse_label_with_axes(size, axes, &mut rng)).collect()
}

/// Gaussian noise by the Box-Muller transform.
fn gaussian(rng: &mut impl Rng) -> f64 {
    let u1: f64 = rng.random_range(f64::EPSILON..1.0);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Image/label pairs: an ellipse brighter than a shaded, noisy background.
pub fn synthetic_pairs(n: usize, size: usize, channels: usize, seed: u64) -> Result<Vec<SliceSample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let label = ellipse_label(size, &mut rng);
            let tilt = rng.random_range(-0.1..0.1);
            let image = Array3::from_shape_fn((channels, size, size), |(_, y, x)| {
                let base = 0.25 + tilt * (x as f64 / size as f64 - 0.5);
                let fg = if label[[y, x]] { 0.4 } else { 0.0 };
                (base + fg).clamp(0.0, 1.0)
            });
            let image = image.mapv(|v| (v + 0.03 * gaussian(&mut rng)).clamp(0.0, 1.0));
            SliceSample::new(
                "synthetic",
                i,
                image,
                label.clone(),
                Array2::from_elem((size, size), false),
            )
        })
        .collect()
}

/// A `[z, y, x]` CT volume with soft-tissue body, liver ellipsoid spanning
/// the middle slices, and one spherical lesion inside it.
pub fn synthetic_case(id: &str, dims: (usize, usize, usize), seed: u64) -> Result<(CtVolume, LabelVolume)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (nz, ny, nx) = dims;
    let (fz, fy, fx) = (nz as f64, ny as f64, nx as f64);
    let liver_c = [
        fz * rng.random_range(0.45..0.55),
        fy * rng.random_range(0.4..0.6),
        fx * rng.random_range(0.4..0.6),
    ];
    let liver_r = [
        fz * rng.random_range(0.25..0.32),
        fy * rng.random_range(0.2..0.28),
        fx * rng.random_range(0.22..0.3),
    ];
    let lesion_r = liver_r[1].min(liver_r[2]) * rng.random_range(0.3..0.45);
    let lesion_c = [
        liver_c[0],
        liver_c[1] + rng.random_range(-0.3..0.3) * liver_r[1],
        liver_c[2] + rng.random_range(-0.3..0.3) * liver_r[2],
    ];
    let mut labels = Array3::zeros(dims);
    let mut hu = Array3::zeros(dims);
    for ((z, y, x), l) in labels.indexed_iter_mut() {
        let p = [z as f64 + 0.5, y as f64 + 0.5, x as f64 + 0.5];
        let body = ((p[1] - fy / 2.0) / (fy * 0.46)).powi(2) + ((p[2] - fx / 2.0) / (fx * 0.48)).powi(2) <= 1.0;
        let in_liver = (0..3).map(|k| ((p[k] - liver_c[k]) / liver_r[k]).powi(2)).sum::<f64>() <= 1.0;
        let in_lesion = in_liver
            && (0..3)
                .map(|k| {
                    let scale = if k == 0 { liver_r[0] / liver_r[1] } else { 1.0 };
                    ((p[k] - lesion_c[k]) / scale).powi(2)
                })
                .sum::<f64>()
                <= lesion_r * lesion_r;
        let (value, label) = if in_lesion {
            (190.0, TUMOR)
        } else if in_liver {
            (90.0, LIVER)
        } else if body {
            (30.0, 0)
        } else {
            (-1000.0, 0)
        };
        *l = label;
        hu[[z, y, x]] = value + 12.0 * gaussian(&mut rng);
    }
    let spacing = [0.8, 0.8, 2.5];
    Ok((CtVolume::new(id, hu, spacing)?, LabelVolume::new(id, labels, spacing)?))
}
