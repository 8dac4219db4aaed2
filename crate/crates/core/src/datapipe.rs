//! Volume preprocessing, slice decomposition and training-time augmentation.
//!
//! A CT volume is windowed to `[-200, 250]` HU, min-max scaled to `[0, 255]`,
//! divided by 255, and cut into 2D samples. Three-channel samples stack
//! slices `z-1, z, z+1` and take the label of `z`.

use ndarray::{s, Array2, Array3, ArrayView2, ArrayView3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageops;
use crate::volume::{CtVolume, LabelVolume, LIVER, TUMOR};
use crate::weightmap::{weight_map_for_label, RoiMode, WeightMapParams};

pub const HU_MIN: f64 = -200.0;
pub const HU_MAX: f64 = 250.0;

pub fn hu_window(voxels: ArrayView3<f64>) -> Array3<f64> {
    voxels.mapv(|v| v.clamp(HU_MIN, HU_MAX))
}

/// How windowed HU values are mapped onto `[0, 255]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scaling {
    /// Each volume's own `[min, max]`.
    #[default]
    PerVolume,
    /// The window bounds, so intensities are comparable across volumes.
    Fixed,
}

pub fn minmax_normalize(voxels: ArrayView3<f64>, scaling: Scaling) -> Result<Array3<f64>> {
    let (lo, hi) = match scaling {
        Scaling::Fixed => (HU_MIN, HU_MAX),
        Scaling::PerVolume => voxels.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        }),
    };
    if !(hi > lo) {
        return Err(Error::Degenerate(format!(
            "constant volume ({lo}) has no intensity range"
        )));
    }
    Ok(voxels.mapv(|v| ((v - lo) / (hi - lo) * 255.0).clamp(0.0, 255.0)))
}

/// Window, scale and divide by 255: network-ready intensities in `[0, 1]`.
pub fn preprocess_volume(ct: &CtVolume, scaling: Scaling) -> Result<Array3<f64>> {
    let v = minmax_normalize(hu_window(ct.voxels.view()).view(), scaling)?;
    Ok(v.mapv(|v| v / 255.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Channels {
    #[default]
    One,
    Three,
}

impl Channels {
    pub fn count(self) -> usize {
        match self {
            Channels::One => 1,
            Channels::Three => 3,
        }
    }

    /// Slices on each side of the center that a sample consumes.
    pub fn half_width(self) -> usize {
        self.count() / 2
    }
}

impl TryFrom<u8> for Channels {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            1 => Ok(Channels::One),
            3 => Ok(Channels::Three),
            _ => Err(format!("channels must be 1 or 3, got {v}")),
        }
    }
}

impl From<Channels> for u8 {
    fn from(c: Channels) -> u8 {
        c.count() as u8
    }
}

/// Images of a `[z, y, x]` volume, each paired with its center slice index.
/// A depth-`N` volume yields `N` one-channel or `N - 2` three-channel images.
pub fn slice_volume(voxels: ArrayView3<f64>, channels: Channels) -> Result<Vec<(usize, Array3<f64>)>> {
    let depth = voxels.dim().0;
    let c = channels.count();
    if depth < c {
        return Err(Error::shape(format!(
            "{c}-channel slicing needs depth ≥ {c}, got {depth}"
        )));
    }
    let h = channels.half_width();
    Ok((h..depth - h)
        .map(|z| (z, voxels.slice(s![z - h..=z + h, .., ..]).to_owned()))
        .collect())
}

/// Which LiTS labels count as foreground.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelTarget {
    /// Liver and tumor (label ≥ 1).
    #[default]
    Liver,
    /// Liver parenchyma only (label = 1).
    LiverOnly,
    Tumor,
}

impl LabelTarget {
    pub fn test(self, label: u8) -> bool {
        match self {
            LabelTarget::Liver => label >= LIVER,
            LabelTarget::LiverOnly => label == LIVER,
            LabelTarget::Tumor => label == TUMOR,
        }
    }
}

/// One training example. `roi` marks the pixels that receive the weight-map
/// ROI emphasis (tumor pixels); `weight` is all ones until
/// [`SliceSample::refresh_weight`] runs.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceSample {
    pub volume: String,
    pub slice: usize,
    /// `[C, H, W]` in `[0, 1]`.
    pub image: Array3<f64>,
    pub label: Array2<bool>,
    pub roi: Array2<bool>,
    pub weight: Array2<f64>,
}

impl SliceSample {
    pub fn new(
        volume: impl Into<String>,
        slice: usize,
        image: Array3<f64>,
        label: Array2<bool>,
        roi: Array2<bool>,
    ) -> Result<Self> {
        let (c, h, w) = image.dim();
        if c != 1 && c != 3 {
            return Err(Error::shape(format!("samples have 1 or 3 channels, got {c}")));
        }
        if label.dim() != (h, w) || roi.dim() != (h, w) {
            return Err(Error::shape(format!(
                "image {:?}, label {:?} and ROI {:?} disagree",
                (c, h, w),
                label.dim(),
                roi.dim()
            )));
        }
        Ok(SliceSample {
            volume: volume.into(),
            slice,
            image,
            label,
            roi,
            weight: Array2::ones((h, w)),
        })
    }

    pub fn channels(&self) -> usize {
        self.image.dim().0
    }

    pub fn size(&self) -> (usize, usize) {
        self.label.dim()
    }

    /// Recomputes the weight map from the current label.
    pub fn refresh_weight(&mut self, params: &WeightMapParams) -> Result<()> {
        let roi = match params.roi {
            RoiMode::None => None,
            RoiMode::Tumor => Some(self.roi.view()),
        };
        self.weight = weight_map_for_label(self.label.view(), roi, params)?;
        Ok(())
    }

    /// Image channels as a label-map input for the encoding network: the
    /// label replicated across `channels`.
    pub fn label_as_image(&self, channels: usize) -> Array3<f64> {
        let (h, w) = self.size();
        let plane = self.label.mapv(|v| f64::from(u8::from(v)));
        Array3::from_shape_fn((channels, h, w), |(_, y, x)| plane[[y, x]])
    }
}

fn label_slice(labels: &LabelVolume, z: usize) -> ArrayView2<'_, u8> {
    labels.labels.slice(s![z, .., ..])
}

/// Liver-stage samples of one preprocessed volume (all slices; see
/// [`filter_liver_slices`]).
pub fn liver_samples(
    image: ArrayView3<f64>,
    labels: &LabelVolume,
    channels: Channels,
    target: LabelTarget,
) -> Result<Vec<SliceSample>> {
    if image.dim() != labels.labels.dim() {
        return Err(Error::shape(format!(
            "volume {:?} and labels {:?} differ in shape",
            image.dim(),
            labels.labels.dim()
        )));
    }
    slice_volume(image, channels)?
        .into_iter()
        .map(|(z, img)| {
            let l = label_slice(labels, z);
            SliceSample::new(
                labels.id.clone(),
                z,
                img,
                l.mapv(|v| target.test(v)),
                l.mapv(|v| v == TUMOR),
            )
        })
        .collect()
}

/// Keeps samples whose label has at least one foreground pixel.
pub fn filter_liver_slices(samples: Vec<SliceSample>) -> Vec<SliceSample> {
    samples.into_iter().filter(|s| s.label.iter().any(|&v| v)).collect()
}

/// Scale to `scaled × scaled`, then take a window at `(top, left)` of the
/// original size.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScaleCrop {
    pub scaled: usize,
    pub top: usize,
    pub left: usize,
}

impl ScaleCrop {
    /// Uniform side in `[size, max_scaled]` and uniform offsets.
    pub fn sample(size: usize, max_scaled: usize, rng: &mut impl Rng) -> ScaleCrop {
        let scaled = rng.random_range(size..=max_scaled.max(size));
        ScaleCrop::sample_offsets(size, scaled, rng)
    }

    pub fn sample_offsets(size: usize, scaled: usize, rng: &mut impl Rng) -> ScaleCrop {
        ScaleCrop {
            scaled,
            top: rng.random_range(0..=scaled - size),
            left: rng.random_range(0..=scaled - size),
        }
    }

    fn check(&self, h: usize, w: usize) -> Result<()> {
        if h != w || self.scaled < h || self.top + h > self.scaled || self.left + w > self.scaled {
            return Err(Error::shape(format!("crop {self:?} does not fit a {h}×{w} sample")));
        }
        Ok(())
    }
}

fn transform_sample(
    sample: &SliceSample,
    image: impl Fn(ArrayView3<f64>) -> Array3<f64>,
    mask: impl Fn(ArrayView2<bool>) -> Array2<bool>,
) -> Result<SliceSample> {
    SliceSample::new(
        sample.volume.clone(),
        sample.slice,
        image(sample.image.view()),
        mask(sample.label.view()),
        mask(sample.roi.view()),
    )
}

pub fn apply_scale_crop(sample: &SliceSample, t: &ScaleCrop) -> Result<SliceSample> {
    let (h, w) = sample.size();
    t.check(h, w)?;
    transform_sample(
        sample,
        |img| {
            imageops::crop_channels(
                imageops::resize_channels(img, t.scaled, t.scaled).view(),
                t.top,
                t.left,
                h,
                w,
            )
        },
        |m| {
            imageops::crop(
                imageops::resize_nearest(m, t.scaled, t.scaled).view(),
                t.top,
                t.left,
                h,
                w,
            )
        },
    )
}

/// Largest scaled side for liver augmentation: 600 for a 512 input.
pub fn liver_max_scaled(size: usize) -> usize {
    (size as f64 * 600.0 / 512.0).round() as usize
}

/// Random rescale and crop with a recomputed weight map.
pub fn augment_liver(sample: &SliceSample, rng: &mut impl Rng, params: &WeightMapParams) -> Result<SliceSample> {
    let (h, _) = sample.size();
    let t = ScaleCrop::sample(h, liver_max_scaled(h), rng);
    let mut out = apply_scale_crop(sample, &t)?;
    out.refresh_weight(params)?;
    Ok(out)
}

pub const MAX_ROTATION_DEG: f64 = 45.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TumorAugment {
    pub crop: ScaleCrop,
    pub angle_deg: f64,
}

/// Scaled side for tumor augmentation: 300 for a 224 input.
pub fn tumor_scaled(size: usize) -> usize {
    (size as f64 * 300.0 / 224.0).round() as usize
}

impl TumorAugment {
    pub fn sample(size: usize, rng: &mut impl Rng) -> TumorAugment {
        TumorAugment {
            crop: ScaleCrop::sample_offsets(size, tumor_scaled(size), rng),
            angle_deg: rng.random_range(-MAX_ROTATION_DEG..=MAX_ROTATION_DEG),
        }
    }
}

pub fn apply_tumor_augment(sample: &SliceSample, t: &TumorAugment) -> Result<SliceSample> {
    let cropped = apply_scale_crop(sample, &t.crop)?;
    let a = t.angle_deg.to_radians();
    transform_sample(
        &cropped,
        |img| imageops::rotate_channels(img, a),
        |m| imageops::rotate_nearest(m, a, false),
    )
}

/// Rescale to 300/224 of the size, random crop back, random rotation, and a
/// recomputed weight map.
pub fn augment_tumor(sample: &SliceSample, rng: &mut impl Rng, params: &WeightMapParams) -> Result<SliceSample> {
    let (h, _) = sample.size();
    let t = TumorAugment::sample(h, rng);
    let mut out = apply_tumor_augment(sample, &t)?;
    out.refresh_weight(params)?;
    Ok(out)
}
