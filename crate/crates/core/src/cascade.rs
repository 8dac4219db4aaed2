//! Tumor-stage preprocessing: mask the slice with the liver, crop the liver
//! bounding box plus a margin, pad to a square and rescale to 224×224. The
//! recorded [`CascadeGeometry`] maps tumor predictions back onto the slice.
//!
//! Masks travel with nearest-neighbor resampling. When the padded square is
//! at most the output size the round trip is exact; larger crops are
//! downsampled and lose detail.

use ndarray::{s, Array2, Array3, ArrayView2, ArrayView3};
use serde::{Deserialize, Serialize};

use crate::datapipe::{slice_volume, Channels, SliceSample};
use crate::error::{Error, Result};
use crate::imageops;
use crate::volume::{LabelVolume, LIVER, TUMOR};

pub const CASCADE_SIZE: usize = 224;
pub const CASCADE_MARGIN: usize = 10;

/// Inclusive bounding box `(row0, row1, col0, col1)` of the `true` pixels.
pub fn bounding_box(mask: ArrayView2<bool>) -> Option<(usize, usize, usize, usize)> {
    let mut bb: Option<(usize, usize, usize, usize)> = None;
    for ((y, x), &v) in mask.indexed_iter() {
        if v {
            bb = Some(match bb {
                None => (y, y, x, x),
                Some((r0, r1, c0, c1)) => (r0.min(y), r1.max(y), c0.min(x), c1.max(x)),
            });
        }
    }
    bb
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CascadeGeometry {
    pub slice: usize,
    /// `(height, width)` of the full slice.
    pub source: (usize, usize),
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    /// Side of the padded square.
    pub side: usize,
    /// Side after rescaling.
    pub size: usize,
}

impl CascadeGeometry {
    /// Geometry for a liver mask, or `None` when the mask is empty.
    pub fn from_mask(mask: ArrayView2<bool>, slice: usize, margin: usize, size: usize) -> Option<CascadeGeometry> {
        let (h, w) = mask.dim();
        let (r0, r1, c0, c1) = bounding_box(mask)?;
        let top = r0.saturating_sub(margin);
        let left = c0.saturating_sub(margin);
        let bottom = (r1 + margin).min(h - 1);
        let right = (c1 + margin).min(w - 1);
        let (height, width) = (bottom - top + 1, right - left + 1);
        let side = height.max(width);
        Some(CascadeGeometry {
            slice,
            source: (h, w),
            top,
            left,
            height,
            width,
            pad_top: (side - height) / 2,
            pad_left: (side - width) / 2,
            side,
            size,
        })
    }

    pub fn scale(&self) -> f64 {
        self.size as f64 / self.side as f64
    }

    /// Whether masks survive the forward/inverse round trip exactly.
    pub fn is_lossless(&self) -> bool {
        self.side <= self.size
    }

    fn check_source(&self, dim: (usize, usize)) -> Result<()> {
        if dim != self.source {
            return Err(Error::shape(format!(
                "slice {:?} does not match the recorded geometry {:?}",
                dim, self.source
            )));
        }
        Ok(())
    }

    /// Applies crop, pad and rescale to one plane.
    fn forward_plane<T: Copy>(
        &self,
        plane: ArrayView2<T>,
        fill: T,
        resize: impl Fn(ArrayView2<T>) -> Array2<T>,
    ) -> Array2<T> {
        let c = imageops::crop(plane, self.top, self.left, self.height, self.width);
        let p = imageops::pad(c.view(), self.side, self.side, self.pad_top, self.pad_left, fill);
        resize(p.view())
    }
}

/// Cascade input for one slice image `[C, H, W]` and its liver mask, or
/// `None` when the mask is empty (the slice is skipped).
pub fn cascade_preprocess(
    image: ArrayView3<f64>,
    liver: ArrayView2<bool>,
    slice: usize,
) -> Result<Option<(Array3<f64>, CascadeGeometry)>> {
    let (c, h, w) = image.dim();
    if liver.dim() != (h, w) {
        return Err(Error::shape(format!(
            "image {:?} and liver mask {:?} differ",
            (h, w),
            liver.dim()
        )));
    }
    let Some(g) = CascadeGeometry::from_mask(liver, slice, CASCADE_MARGIN, CASCADE_SIZE) else {
        return Ok(None);
    };
    let mut out = Array3::zeros((c, g.size, g.size));
    for k in 0..c {
        let masked = ndarray::Zip::from(image.slice(s![k, .., ..]))
            .and(liver)
            .map_collect(|&v, &m| if m { v } else { 0.0 });
        let plane = g.forward_plane(masked.view(), 0.0, |p| imageops::resize_bilinear(p, g.size, g.size));
        out.slice_mut(s![k, .., ..]).assign(&plane);
    }
    Ok(Some((out, g)))
}

/// Moves a full-slice mask into cascade coordinates.
pub fn cascade_forward_mask(mask: ArrayView2<bool>, g: &CascadeGeometry) -> Result<Array2<bool>> {
    g.check_source(mask.dim())?;
    Ok(g.forward_plane(mask, false, |p| imageops::resize_nearest(p, g.size, g.size)))
}

/// Maps a `size × size` prediction back onto the full slice; pixels outside
/// the crop rectangle are background.
pub fn cascade_invert(pred: ArrayView2<bool>, g: &CascadeGeometry) -> Result<Array2<bool>> {
    if pred.dim() != (g.size, g.size) {
        return Err(Error::shape(format!(
            "prediction {:?} does not match the recorded {}×{} cascade input",
            pred.dim(),
            g.size,
            g.size
        )));
    }
    let square = imageops::resize_nearest(pred, g.side, g.side);
    let crop = square.slice(s![g.pad_top..g.pad_top + g.height, g.pad_left..g.pad_left + g.width]);
    let mut out = Array2::from_elem(g.source, false);
    out.slice_mut(s![g.top..g.top + g.height, g.left..g.left + g.width])
        .assign(&crop);
    Ok(out)
}

/// Tumor-stage samples of one preprocessed volume, cropped around the
/// ground-truth liver. Slices without liver are skipped.
pub fn tumor_samples(
    image: ArrayView3<f64>,
    labels: &LabelVolume,
    channels: Channels,
) -> Result<Vec<(SliceSample, CascadeGeometry)>> {
    if image.dim() != labels.labels.dim() {
        return Err(Error::shape(format!(
            "volume {:?} and labels {:?} differ in shape",
            image.dim(),
            labels.labels.dim()
        )));
    }
    let mut out = Vec::new();
    for (z, img) in slice_volume(image, channels)? {
        let l = labels.labels.slice(s![z, .., ..]);
        let liver = l.mapv(|v| v >= LIVER);
        let Some((cimg, g)) = cascade_preprocess(img.view(), liver.view(), z)? else {
            continue;
        };
        let tumor = cascade_forward_mask(l.mapv(|v| v == TUMOR).view(), &g)?;
        out.push((SliceSample::new(labels.id.clone(), z, cimg, tumor.clone(), tumor)?, g));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn margin_clamps_at_borders() {
        let mut m = Array2::from_elem((50, 40), false);
        m[[2, 35]] = true;
        let g = CascadeGeometry::from_mask(m.view(), 0, 10, 224).unwrap();
        assert_eq!((g.top, g.left, g.height, g.width), (0, 25, 13, 15));
        assert_eq!((g.side, g.pad_top, g.pad_left), (15, 1, 0));
    }
}
