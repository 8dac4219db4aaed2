//! CT and label volumes plus NIfTI reading and writing.
//!
//! Arrays are held as `[z, y, x]`; NIfTI stores `x` fastest, so reads and
//! writes permute axes at the boundary. Label volumes follow the LiTS
//! convention: 0 background, 1 liver, 2 tumor.

use std::path::{Path, PathBuf};

use ndarray::{Array3, ArrayView3, Ix3};
use nifti::writer::WriterOptions;
use nifti::{IntoNdArray, NiftiHeader, NiftiObject, ReaderOptions};

use crate::error::{Error, Result};

pub const LIVER: u8 = 1;
pub const TUMOR: u8 = 2;

#[derive(Debug, Clone)]
pub struct CtVolume {
    pub id: String,
    /// Hounsfield units, `[z, y, x]`.
    pub voxels: Array3<f64>,
    /// Voxel size in mm, `(x, y, z)` as stored in the header.
    pub spacing: [f64; 3],
    /// Header of the source file, reused for orientation when writing
    /// predictions aligned with it.
    pub header: Option<NiftiHeader>,
}

#[derive(Debug, Clone)]
pub struct LabelVolume {
    pub id: String,
    pub labels: Array3<u8>,
    pub spacing: [f64; 3],
    pub header: Option<NiftiHeader>,
}

fn check_spacing(spacing: [f64; 3]) -> Result<()> {
    if spacing.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
        return Err(Error::config(format!("voxel spacing {spacing:?} must be positive")));
    }
    Ok(())
}

fn check_dims(dim: (usize, usize, usize)) -> Result<()> {
    if dim.0 == 0 || dim.1 == 0 || dim.2 == 0 {
        return Err(Error::shape(format!("volume dimensions {dim:?} must be positive")));
    }
    Ok(())
}

impl CtVolume {
    pub fn new(id: impl Into<String>, voxels: Array3<f64>, spacing: [f64; 3]) -> Result<Self> {
        check_dims(voxels.dim())?;
        check_spacing(spacing)?;
        if let Some(v) = voxels.iter().find(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("non-finite HU value {v}")));
        }
        Ok(CtVolume {
            id: id.into(),
            voxels,
            spacing,
            header: None,
        })
    }

    pub fn depth(&self) -> usize {
        self.voxels.dim().0
    }

    /// Spacing reordered to match array indexing.
    pub fn spacing_zyx(&self) -> [f64; 3] {
        [self.spacing[2], self.spacing[1], self.spacing[0]]
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let (header, voxels) = read_zyx::<f64>(path)?;
        let mut v = CtVolume::new(id_from_path(path), voxels, spacing_of(&header, path)?)?;
        v.header = Some(header);
        Ok(v)
    }
}

impl LabelVolume {
    pub fn new(id: impl Into<String>, labels: Array3<u8>, spacing: [f64; 3]) -> Result<Self> {
        check_dims(labels.dim())?;
        check_spacing(spacing)?;
        if let Some(v) = labels.iter().find(|&&v| v > TUMOR) {
            return Err(Error::Domain(format!("label value {v} is not one of 0, 1, 2")));
        }
        Ok(LabelVolume {
            id: id.into(),
            labels,
            spacing,
            header: None,
        })
    }

    pub fn spacing_zyx(&self) -> [f64; 3] {
        [self.spacing[2], self.spacing[1], self.spacing[0]]
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let (header, raw) = read_zyx::<f64>(path)?;
        if let Some(v) = raw.iter().find(|v| !(v.fract() == 0.0 && (0.0..=2.0).contains(*v))) {
            return Err(Error::format(path, format!("label value {v} is not one of 0, 1, 2")));
        }
        let mut l = LabelVolume::new(id_from_path(path), raw.mapv(|v| v as u8), spacing_of(&header, path)?)?;
        l.header = Some(header);
        Ok(l)
    }

    /// Writes `u8` labels, reusing `reference` for orientation when given.
    pub fn write(&self, path: impl AsRef<Path>, reference: Option<&NiftiHeader>) -> Result<()> {
        write_zyx(
            path.as_ref(),
            self.labels.view(),
            self.spacing,
            reference.or(self.header.as_ref()),
        )
    }

    pub fn liver_mask(&self) -> Array3<bool> {
        self.labels.mapv(|v| v >= LIVER)
    }

    pub fn tumor_mask(&self) -> Array3<bool> {
        self.labels.mapv(|v| v == TUMOR)
    }
}

/// File stem without `.nii` / `.nii.gz`.
pub fn id_from_path(path: &Path) -> String {
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    name.trim_end_matches(".gz").trim_end_matches(".nii").to_string()
}

fn spacing_of(header: &NiftiHeader, path: &Path) -> Result<[f64; 3]> {
    let s = [header.pixdim[1], header.pixdim[2], header.pixdim[3]].map(|v| f64::from(v).abs());
    if s.iter().any(|v| *v == 0.0 || !v.is_finite()) {
        return Err(Error::format(path, format!("voxel spacing {s:?} is not positive")));
    }
    Ok(s)
}

fn read_zyx<T>(path: &Path) -> Result<(NiftiHeader, Array3<T>)>
where
    T: nifti::DataElement + Clone,
{
    let obj = ReaderOptions::new().read_file(path)?;
    let header = obj.header().clone();
    let data = obj.into_volume().into_ndarray::<T>()?;
    if data.ndim() != 3 {
        return Err(Error::format(
            path,
            format!("expected a 3D volume, found {} dimensions", data.ndim()),
        ));
    }
    let xyz = data
        .into_dimensionality::<Ix3>()
        .map_err(|e| Error::format(path, e.to_string()))?;
    Ok((header, xyz.permuted_axes([2, 1, 0]).as_standard_layout().into_owned()))
}

fn write_zyx<T>(path: &Path, data: ArrayView3<T>, spacing: [f64; 3], reference: Option<&NiftiHeader>) -> Result<()>
where
    T: nifti::DataElement + bytemuck::Pod + Clone,
{
    let mut header = reference.cloned().unwrap_or_default();
    header.pixdim[1] = spacing[0] as f32;
    header.pixdim[2] = spacing[1] as f32;
    header.pixdim[3] = spacing[2] as f32;
    let xyz = data.permuted_axes([2, 1, 0]).as_standard_layout().into_owned();
    WriterOptions::new(path).reference_header(&header).write_nifti(&xyz)?;
    Ok(())
}

/// One LiTS case: `volume-N` and `segmentation-N` in the same directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LitsCase {
    pub id: String,
    pub volume: PathBuf,
    pub segmentation: Option<PathBuf>,
}

fn lits_number(name: &str, prefix: &str) -> Option<u32> {
    let stem = name.strip_suffix(".nii.gz").or_else(|| name.strip_suffix(".nii"))?;
    stem.strip_prefix(prefix)?.parse().ok()
}

/// Cases found in `dir`, sorted by case number.
pub fn lits_cases(dir: impl AsRef<Path>) -> Result<Vec<LitsCase>> {
    let dir = dir.as_ref();
    let mut volumes = Vec::new();
    let mut segs = std::collections::HashMap::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        let name = path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        if let Some(n) = lits_number(&name, "volume-") {
            volumes.push((n, path));
        } else if let Some(n) = lits_number(&name, "segmentation-") {
            segs.insert(n, path);
        }
    }
    volumes.sort();
    Ok(volumes
        .into_iter()
        .map(|(n, volume)| LitsCase {
            id: format!("volume-{n}"),
            volume,
            segmentation: segs.remove(&n),
        })
        .collect())
}

/// `segmentation-N` files in `dir` keyed by `N`.
pub fn segmentation_files(dir: impl AsRef<Path>) -> Result<std::collections::BTreeMap<u32, PathBuf>> {
    let mut out = std::collections::BTreeMap::new();
    for entry in std::fs::read_dir(dir.as_ref())? {
        let path = entry?.path();
        let name = path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        if let Some(n) = lits_number(&name, "segmentation-") {
            out.insert(n, path);
        }
    }
    Ok(out)
}

/// Path of the segmentation matching a LiTS volume id (`volume-N` → `segmentation-N.nii`).
pub fn segmentation_name(id: &str, compress: bool) -> String {
    let n = id.strip_prefix("volume-").unwrap_or(id);
    if compress {
        format!("segmentation-{n}.nii.gz")
    } else {
        format!("segmentation-{n}.nii")
    }
}

/// Writes a `[z, y, x]` scalar field, such as a weight volume, as `f32`.
/// `spacing` is in `(x, y, z)` order like the volumes.
pub fn write_scalar(
    data: ArrayView3<f64>,
    spacing: [f64; 3],
    path: impl AsRef<Path>,
    reference: Option<&NiftiHeader>,
) -> Result<()> {
    let v = data.mapv(|v| v as f32);
    write_zyx(path.as_ref(), v.view(), spacing, reference)
}

/// Writes HU voxels as `f32`.
pub fn write_ct(volume: &CtVolume, path: impl AsRef<Path>) -> Result<()> {
    let v = volume.voxels.mapv(|v| v as f32);
    write_zyx(path.as_ref(), v.view(), volume.spacing, volume.header.as_ref())
}
