//! 2D resampling used by augmentation and the cascade: bilinear for
//! intensities, nearest-neighbor for labels. Pixel centers sit at half-integer
//! positions, so output pixel `i` of an `n → m` resize samples source
//! coordinate `(i + 0.5)·n/m − 0.5`.

use ndarray::{s, Array2, Array3, ArrayView2, ArrayView3};

fn source_coord(i: usize, n_in: usize, n_out: usize) -> f64 {
    (i as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5
}

/// Nearest source index for output index `i`.
pub fn nearest_index(i: usize, n_in: usize, n_out: usize) -> usize {
    let c = ((i as f64 + 0.5) * n_in as f64 / n_out as f64).floor() as usize;
    c.min(n_in - 1)
}

/// Bilinear sample with edge clamping.
fn bilinear_clamped(img: &ArrayView2<f64>, y: f64, x: f64) -> f64 {
    let (h, w) = img.dim();
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    let top = img[[y0, x0]] * (1.0 - fx) + img[[y0, x1]] * fx;
    let bot = img[[y1, x0]] * (1.0 - fx) + img[[y1, x1]] * fx;
    top * (1.0 - fy) + bot * fy
}

pub fn resize_bilinear(img: ArrayView2<f64>, oh: usize, ow: usize) -> Array2<f64> {
    let (h, w) = img.dim();
    if (h, w) == (oh, ow) {
        return img.to_owned();
    }
    Array2::from_shape_fn((oh, ow), |(y, x)| {
        bilinear_clamped(&img, source_coord(y, h, oh), source_coord(x, w, ow))
    })
}

pub fn resize_nearest<T: Copy>(img: ArrayView2<T>, oh: usize, ow: usize) -> Array2<T> {
    let (h, w) = img.dim();
    Array2::from_shape_fn((oh, ow), |(y, x)| {
        img[[nearest_index(y, h, oh), nearest_index(x, w, ow)]]
    })
}

/// Resizes each channel of a `[C, H, W]` image.
pub fn resize_channels(img: ArrayView3<f64>, oh: usize, ow: usize) -> Array3<f64> {
    let c = img.dim().0;
    let mut out = Array3::zeros((c, oh, ow));
    for k in 0..c {
        out.slice_mut(s![k, .., ..])
            .assign(&resize_bilinear(img.slice(s![k, .., ..]), oh, ow));
    }
    out
}

/// Window `[top, top+h) × [left, left+w)` of every channel.
pub fn crop_channels(img: ArrayView3<f64>, top: usize, left: usize, h: usize, w: usize) -> Array3<f64> {
    img.slice(s![.., top..top + h, left..left + w]).to_owned()
}

pub fn crop<T: Clone>(img: ArrayView2<T>, top: usize, left: usize, h: usize, w: usize) -> Array2<T> {
    img.slice(s![top..top + h, left..left + w]).to_owned()
}

/// Places `img` at `(top, left)` inside a `oh × ow` canvas filled with `fill`.
pub fn pad<T: Clone>(img: ArrayView2<T>, oh: usize, ow: usize, top: usize, left: usize, fill: T) -> Array2<T> {
    let (h, w) = img.dim();
    let mut out = Array2::from_elem((oh, ow), fill);
    out.slice_mut(s![top..top + h, left..left + w]).assign(&img);
    out
}

/// Inverse rotation of output pixel `(y, x)` about the image center, giving
/// the source position for a counter-clockwise rotation by `angle`
/// (radians) in the displayed orientation (row axis pointing down).
fn rotate_source(y: usize, x: usize, h: usize, w: usize, angle: f64) -> (f64, f64) {
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (dy, dx) = (y as f64 - cy, x as f64 - cx);
    let (sn, cs) = angle.sin_cos();
    (cy + sn * dx + cs * dy, cx + cs * dx - sn * dy)
}

/// Bilinear rotation; samples outside the image read as `fill`.
pub fn rotate_bilinear(img: ArrayView2<f64>, angle: f64, fill: f64) -> Array2<f64> {
    let (h, w) = img.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        let (sy, sx) = rotate_source(y, x, h, w, angle);
        if sy < -0.5 || sx < -0.5 || sy > h as f64 - 0.5 || sx > w as f64 - 0.5 {
            fill
        } else {
            bilinear_clamped(&img, sy, sx)
        }
    })
}

pub fn rotate_nearest<T: Copy>(img: ArrayView2<T>, angle: f64, fill: T) -> Array2<T> {
    let (h, w) = img.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        let (sy, sx) = rotate_source(y, x, h, w, angle);
        let (ry, rx) = (sy.round(), sx.round());
        if ry < 0.0 || rx < 0.0 || ry >= h as f64 || rx >= w as f64 {
            fill
        } else {
            img[[ry as usize, rx as usize]]
        }
    })
}

pub fn rotate_channels(img: ArrayView3<f64>, angle: f64) -> Array3<f64> {
    let mut out = img.to_owned();
    for k in 0..img.dim().0 {
        out.slice_mut(s![k, .., ..])
            .assign(&rotate_bilinear(img.slice(s![k, .., ..]), angle, 0.0));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn identity_resize_and_rotation() {
        let a = array![[0.0, 1.0, 2.0], [3.0, 4.0, 5.0]];
        assert_eq!(resize_bilinear(a.view(), 2, 3), a);
        assert_eq!(resize_nearest(a.view(), 2, 3), a);
        let r = rotate_bilinear(a.view(), 0.0, -1.0);
        assert!(r.iter().zip(&a).all(|(x, y)| (x - y).abs() < 1e-12));
    }

    #[test]
    fn quarter_turn_on_square() {
        let a = array![[1, 2], [3, 4]];
        let r = rotate_nearest(a.view(), std::f64::consts::FRAC_PI_2, 0);
        // counter-clockwise: the top-right corner moves to the top-left
        assert_eq!(r, array![[2, 4], [1, 3]]);
    }

    #[test]
    fn nearest_doubling_repeats_pixels() {
        let a = array![[1u8, 2], [3, 4]];
        let r = resize_nearest(a.view(), 4, 4);
        assert_eq!(r.row(0).to_vec(), vec![1, 1, 2, 2]);
        assert_eq!(r.row(3).to_vec(), vec![3, 3, 4, 4]);
    }
}
