//! Contour distance maps and the normalized border weight maps fed to the
//! weighted dice loss.
//!
//! With `D` the distance to the nearest contour pixel and `F` a
//! region-of-interest mask,
//!
//! ```text
//! A = (w·F + 1) · exp(-D / (2σ²))
//! W = (A - min A) / (max A - min A)
//! ```
//!
//! The exponent is linear in `D` by default; [`Exponent::Squared`] switches
//! to the Gaussian form `exp(-D² / (2σ²))`.

use ndarray::{Array2, ArrayView2, Zip};
use serde::{Deserialize, Serialize};

use crate::edt::distance_to_seeds_2d;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Exponent {
    #[default]
    Linear,
    Squared,
}

/// Which pixels receive the ROI emphasis `w`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RoiMode {
    /// `F ≡ 0`.
    #[default]
    None,
    /// `F` = tumor pixels of the label map.
    Tumor,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightMapParams {
    pub w: f64,
    pub sigma: f64,
    #[serde(default)]
    pub exponent: Exponent,
    #[serde(default)]
    pub roi: RoiMode,
}

impl Default for WeightMapParams {
    /// Liver-stage values.
    fn default() -> Self {
        WeightMapParams {
            w: 0.05,
            sigma: 20.0,
            exponent: Exponent::Linear,
            roi: RoiMode::None,
        }
    }
}

impl WeightMapParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.w >= 0.0 && self.w.is_finite()) {
            return Err(Error::config(format!(
                "weight-map w must be nonnegative, got {}",
                self.w
            )));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::config(format!(
                "weight-map sigma must be positive, got {}",
                self.sigma
            )));
        }
        Ok(())
    }

    /// Decay factor for a distance `d`.
    pub fn decay(&self, d: f64) -> f64 {
        let s2 = 2.0 * self.sigma * self.sigma;
        match self.exponent {
            Exponent::Linear => (-d / s2).exp(),
            Exponent::Squared => (-d * d / s2).exp(),
        }
    }
}

/// Foreground pixels with at least one 4-connected background neighbor.
/// Pixels outside the image do not count as background.
pub fn contour(label: ArrayView2<bool>) -> Array2<bool> {
    let (h, w) = label.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        if !label[[y, x]] {
            return false;
        }
        (y > 0 && !label[[y - 1, x]])
            || (y + 1 < h && !label[[y + 1, x]])
            || (x > 0 && !label[[y, x - 1]])
            || (x + 1 < w && !label[[y, x + 1]])
    })
}

/// Exact Euclidean distance from every pixel to the nearest contour pixel.
pub fn contour_distance_map(label: ArrayView2<bool>) -> Result<Array2<f64>> {
    let fg = label.iter().filter(|&&v| v).count();
    if fg == 0 || fg == label.len() {
        return Err(Error::Degenerate(format!(
            "label with {fg} of {} foreground pixels has no contour",
            label.len()
        )));
    }
    Ok(distance_to_seeds_2d(contour(label).view()))
}

/// `A` before min-max normalization.
pub fn unnormalized_weights(
    d: ArrayView2<f64>,
    roi: ArrayView2<bool>,
    params: &WeightMapParams,
) -> Result<Array2<f64>> {
    params.validate()?;
    if d.dim() != roi.dim() {
        return Err(Error::shape(format!(
            "distance map {:?} and ROI mask {:?} differ in shape",
            d.dim(),
            roi.dim()
        )));
    }
    Ok(Zip::from(&d)
        .and(&roi)
        .map_collect(|&d, &f| (params.w * f64::from(u8::from(f)) + 1.0) * params.decay(d)))
}

/// Min-max normalization onto `[0, 1]`; a constant map becomes all ones.
pub fn normalize(a: &Array2<f64>) -> Array2<f64> {
    let (lo, hi) = a.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
        (lo.min(v), hi.max(v))
    });
    if !(hi > lo) {
        log::warn!("constant weight map ({lo}); using uniform weights");
        return Array2::ones(a.dim());
    }
    a.mapv(|v| (v - lo) / (hi - lo))
}

pub fn weight_map(d: ArrayView2<f64>, roi: ArrayView2<bool>, params: &WeightMapParams) -> Result<Array2<f64>> {
    Ok(normalize(&unnormalized_weights(d, roi, params)?))
}

/// Weight map of a binary label, with uniform weights when the label has no
/// contour (empty or full).
pub fn weight_map_for_label(
    label: ArrayView2<bool>,
    roi: Option<ArrayView2<bool>>,
    params: &WeightMapParams,
) -> Result<Array2<f64>> {
    params.validate()?;
    let d = match contour_distance_map(label) {
        Ok(d) => d,
        Err(Error::Degenerate(_)) => return Ok(Array2::ones(label.dim())),
        Err(e) => return Err(e),
    };
    match roi {
        Some(f) => weight_map(d.view(), f, params),
        None => weight_map(d.view(), Array2::from_elem(label.dim(), false).view(), params),
    }
}

/// 8-bit preview, `round(255 · W)`.
pub fn preview(w: ArrayView2<f64>) -> Array2<u8> {
    w.mapv(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn contour_ignores_image_border() {
        let label = array![[true, true, true], [true, true, true], [true, true, false]];
        let c = contour(label.view());
        assert_eq!(
            c,
            array![[false, false, false], [false, false, true], [false, true, false]]
        );
    }

    #[test]
    fn degenerate_labels_get_uniform_weights() {
        let p = WeightMapParams::default();
        for v in [false, true] {
            let label = Array2::from_elem((4, 4), v);
            assert!(matches!(contour_distance_map(label.view()), Err(Error::Degenerate(_))));
            assert_eq!(
                weight_map_for_label(label.view(), None, &p).unwrap(),
                Array2::ones((4, 4))
            );
        }
    }

    #[test]
    fn rejects_bad_params() {
        let p = WeightMapParams {
            sigma: 0.0,
            ..Default::default()
        };
        assert!(p.validate().is_err());
        let p = WeightMapParams {
            w: -1.0,
            ..Default::default()
        };
        assert!(p.validate().is_err());
    }
}
