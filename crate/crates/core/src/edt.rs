//! Exact Euclidean distance transforms on regular grids with anisotropic
//! spacing, by separable lower envelopes of parabolas (one 1D pass per axis).

use ndarray::{Array2, Array3, ArrayView2, ArrayView3};

/// Squared distance, along one line, from every sample to the nearest finite
/// entry of `f` (interpreted as squared distances already accumulated).
fn envelope_1d(f: &[f64], spacing: f64, out: &mut [f64], v: &mut Vec<usize>, z: &mut Vec<f64>) {
    let n = f.len();
    v.clear();
    z.clear();
    let pos = |i: usize| i as f64 * spacing;
    for q in 0..n {
        if !f[q].is_finite() {
            continue;
        }
        let pq = pos(q);
        loop {
            match v.last() {
                None => {
                    v.push(q);
                    z.push(f64::NEG_INFINITY);
                    break;
                }
                Some(&last) => {
                    let pv = pos(last);
                    let s = ((f[q] + pq * pq) - (f[last] + pv * pv)) / (2.0 * (pq - pv));
                    if s <= *z.last().unwrap() {
                        v.pop();
                        z.pop();
                    } else {
                        v.push(q);
                        z.push(s);
                        break;
                    }
                }
            }
        }
    }
    if v.is_empty() {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        let pq = pos(q);
        while k + 1 < v.len() && z[k + 1] < pq {
            k += 1;
        }
        let d = pq - pos(v[k]);
        *o = d * d + f[v[k]];
    }
}

/// Squared Euclidean distance from every cell to the nearest seed cell of a
/// row-major grid with the given dimensions and per-axis spacing. Cells are
/// `+inf` when there is no seed.
pub fn squared_distance_to_seeds(seeds: &[bool], dims: &[usize], spacing: &[f64]) -> Vec<f64> {
    assert_eq!(dims.len(), spacing.len(), "one spacing per axis");
    assert_eq!(seeds.len(), dims.iter().product::<usize>(), "seed grid size");
    let mut d: Vec<f64> = seeds.iter().map(|&s| if s { 0.0 } else { f64::INFINITY }).collect();
    let total = d.len();
    let (mut v, mut z) = (Vec::new(), Vec::new());
    for axis in 0..dims.len() {
        let n = dims[axis];
        if n == 0 {
            return d;
        }
        let stride: usize = dims[axis + 1..].iter().product();
        let mut line = vec![0.0; n];
        let mut out = vec![0.0; n];
        for start in 0..total {
            // visit each line once, from its first cell along `axis`
            if !(start / stride).is_multiple_of(n) {
                continue;
            }
            for (i, l) in line.iter_mut().enumerate() {
                *l = d[start + i * stride];
            }
            envelope_1d(&line, spacing[axis], &mut out, &mut v, &mut z);
            for (i, o) in out.iter().enumerate() {
                d[start + i * stride] = *o;
            }
        }
    }
    d
}

/// Euclidean distance to the nearest `true` cell of a 2D grid (unit spacing).
pub fn distance_to_seeds_2d(seeds: ArrayView2<bool>) -> Array2<f64> {
    let (h, w) = seeds.dim();
    let flat: Vec<bool> = seeds.iter().copied().collect();
    let d = squared_distance_to_seeds(&flat, &[h, w], &[1.0, 1.0]);
    Array2::from_shape_vec((h, w), d.into_iter().map(f64::sqrt).collect()).expect("shape preserved")
}

/// Euclidean distance to the nearest `true` cell of a 3D grid indexed
/// `[z, y, x]`, with `spacing = (sz, sy, sx)`.
pub fn distance_to_seeds_3d(seeds: ArrayView3<bool>, spacing: (f64, f64, f64)) -> Array3<f64> {
    let dim = seeds.dim();
    let flat: Vec<bool> = seeds.iter().copied().collect();
    let d = squared_distance_to_seeds(&flat, &[dim.0, dim.1, dim.2], &[spacing.0, spacing.1, spacing.2]);
    Array3::from_shape_vec(dim, d.into_iter().map(f64::sqrt).collect()).expect("shape preserved")
}
