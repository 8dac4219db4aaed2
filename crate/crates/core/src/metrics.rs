//! Volume-level segmentation metrics: per-case dice, volumetric overlap
//! error, relative volume difference, and the symmetric surface distances
//! (average, maximum and root-mean-square), plus corpus aggregation.
//!
//! Volumes are indexed `[z, y, x]` and spacings are given in the same order.

use ndarray::{Array3, ArrayView3, Zip};
use serde::{Deserialize, Serialize};

use crate::edt::squared_distance_to_seeds;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Counts {
    pub intersection: usize,
    pub pred: usize,
    pub truth: usize,
}

impl Counts {
    pub fn of(pred: ArrayView3<bool>, truth: ArrayView3<bool>) -> Result<Counts> {
        if pred.dim() != truth.dim() {
            return Err(Error::shape(format!(
                "prediction {:?} and truth {:?} differ in shape",
                pred.dim(),
                truth.dim()
            )));
        }
        let mut c = Counts::default();
        Zip::from(&pred).and(&truth).for_each(|&p, &t| {
            c.pred += usize::from(p);
            c.truth += usize::from(t);
            c.intersection += usize::from(p && t);
        });
        Ok(c)
    }

    pub fn union(&self) -> usize {
        self.pred + self.truth - self.intersection
    }

    /// `2|A∩B| / (|A|+|B|)`, 1 when both are empty.
    pub fn dice(&self) -> f64 {
        let s = self.pred + self.truth;
        if s == 0 {
            1.0
        } else {
            2.0 * self.intersection as f64 / s as f64
        }
    }

    /// `1 - |A∩B| / |A∪B|`, 0 when both are empty.
    pub fn voe(&self) -> f64 {
        let u = self.union();
        if u == 0 {
            0.0
        } else {
            1.0 - self.intersection as f64 / u as f64
        }
    }

    /// `(|B| - |A|) / |A|` with A the truth; `+inf` for an empty truth and a
    /// nonempty prediction, 0 when both are empty.
    pub fn rvd(&self) -> f64 {
        match (self.truth, self.pred) {
            (0, 0) => 0.0,
            (0, _) => f64::INFINITY,
            (t, p) => (p as f64 - t as f64) / t as f64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Overlap {
    pub dice: f64,
    pub voe: f64,
    pub rvd: f64,
}

pub fn overlap_metrics(pred: ArrayView3<bool>, truth: ArrayView3<bool>) -> Result<Overlap> {
    let c = Counts::of(pred, truth)?;
    Ok(Overlap {
        dice: c.dice(),
        voe: c.voe(),
        rvd: c.rvd(),
    })
}

/// Dice over voxel counts pooled across cases.
pub fn dice_global(counts: &[Counts]) -> f64 {
    let total = counts.iter().fold(Counts::default(), |a, c| Counts {
        intersection: a.intersection + c.intersection,
        pred: a.pred + c.pred,
        truth: a.truth + c.truth,
    });
    total.dice()
}

/// Neighborhood used to decide whether a foreground voxel lies on the surface.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Connectivity {
    #[default]
    Six,
    Eighteen,
    TwentySix,
}

impl Connectivity {
    fn offsets(self) -> Vec<[i64; 3]> {
        let mut out = Vec::new();
        for dz in -1i64..=1 {
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let n = dz.abs() + dy.abs() + dx.abs();
                    let keep = match self {
                        Connectivity::Six => n == 1,
                        Connectivity::Eighteen => n == 1 || n == 2,
                        Connectivity::TwentySix => n >= 1,
                    };
                    if keep {
                        out.push([dz, dy, dx]);
                    }
                }
            }
        }
        out
    }
}

/// Foreground voxels with a background neighbor; voxels outside the volume
/// count as background.
pub fn surface(mask: ArrayView3<bool>, connectivity: Connectivity) -> Array3<bool> {
    let (nz, ny, nx) = mask.dim();
    let offsets = connectivity.offsets();
    Array3::from_shape_fn((nz, ny, nx), |(z, y, x)| {
        mask[[z, y, x]]
            && offsets.iter().any(|[dz, dy, dx]| {
                let (zz, yy, xx) = (z as i64 + dz, y as i64 + dy, x as i64 + dx);
                zz < 0
                    || yy < 0
                    || xx < 0
                    || zz >= nz as i64
                    || yy >= ny as i64
                    || xx >= nx as i64
                    || !mask[[zz as usize, yy as usize, xx as usize]]
            })
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurfaceDistances {
    pub assd: f64,
    pub msd: f64,
    pub rssd: f64,
}

/// Distances from each surface voxel of `from` to the nearest surface voxel
/// of `to`, given `to`'s squared distance map.
fn directed(from: &Array3<bool>, to_sq: &[f64], out: &mut Vec<f64>) {
    for (s, d2) in from.iter().zip(to_sq) {
        if *s {
            out.push(d2.sqrt());
        }
    }
}

/// Symmetric surface distances in the units of `spacing`. `None` when
/// either mask is empty.
pub fn surface_distances(
    pred: ArrayView3<bool>,
    truth: ArrayView3<bool>,
    spacing: [f64; 3],
    connectivity: Connectivity,
) -> Result<Option<SurfaceDistances>> {
    if pred.dim() != truth.dim() {
        return Err(Error::shape(format!(
            "prediction {:?} and truth {:?} differ in shape",
            pred.dim(),
            truth.dim()
        )));
    }
    if spacing.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
        return Err(Error::config(format!("voxel spacing {spacing:?} must be positive")));
    }
    let sp = surface(pred, connectivity);
    let st = surface(truth, connectivity);
    if !sp.iter().any(|&v| v) || !st.iter().any(|&v| v) {
        log::warn!("surface distance undefined for an empty mask");
        return Ok(None);
    }
    let (nz, ny, nx) = pred.dim();
    let dims = [nz, ny, nx];
    let flat = |a: &Array3<bool>| a.iter().copied().collect::<Vec<bool>>();
    let to_truth = squared_distance_to_seeds(&flat(&st), &dims, &spacing);
    let to_pred = squared_distance_to_seeds(&flat(&sp), &dims, &spacing);
    let mut d = Vec::new();
    directed(&sp, &to_truth, &mut d);
    directed(&st, &to_pred, &mut d);
    let n = d.len() as f64;
    Ok(Some(SurfaceDistances {
        assd: d.iter().sum::<f64>() / n,
        msd: d.iter().cloned().fold(0.0, f64::max),
        rssd: (d.iter().map(|v| v * v).sum::<f64>() / n).sqrt(),
    }))
}

/// Everything reported for one case.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CaseMetrics {
    pub counts: Counts,
    pub dice: f64,
    pub voe: f64,
    pub rvd: f64,
    /// NaN when undefined (an empty mask).
    pub assd: f64,
    pub msd: f64,
    pub rssd: f64,
}

pub fn evaluate_case(
    pred: ArrayView3<bool>,
    truth: ArrayView3<bool>,
    spacing: [f64; 3],
    connectivity: Connectivity,
) -> Result<CaseMetrics> {
    let counts = Counts::of(pred, truth)?;
    let sd = surface_distances(pred, truth, spacing, connectivity)?;
    let (assd, msd, rssd) = sd.map_or((f64::NAN, f64::NAN, f64::NAN), |s| (s.assd, s.msd, s.rssd));
    Ok(CaseMetrics {
        counts,
        dice: counts.dice(),
        voe: counts.voe(),
        rvd: counts.rvd(),
        assd,
        msd,
        rssd,
    })
}

/// Corpus summary in reporting order. Per-case averages skip undefined
/// values; `excluded` counts the skipped cases per column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub cases: usize,
    pub dpc: f64,
    pub dg: f64,
    pub voe: f64,
    pub rvd: f64,
    pub assd: f64,
    pub msd: f64,
    pub rssd: f64,
    pub excluded_rvd: usize,
    pub excluded_surface: usize,
}

fn finite_mean(values: impl Iterator<Item = f64>) -> (f64, usize) {
    let (mut sum, mut n, mut skipped) = (0.0, 0usize, 0usize);
    for v in values {
        if v.is_finite() {
            sum += v;
            n += 1;
        } else {
            skipped += 1;
        }
    }
    (if n == 0 { f64::NAN } else { sum / n as f64 }, skipped)
}

pub fn summarize(cases: &[CaseMetrics]) -> Summary {
    let counts: Vec<Counts> = cases.iter().map(|c| c.counts).collect();
    let (rvd, excluded_rvd) = finite_mean(cases.iter().map(|c| c.rvd));
    let (assd, excluded_surface) = finite_mean(cases.iter().map(|c| c.assd));
    Summary {
        cases: cases.len(),
        dpc: finite_mean(cases.iter().map(|c| c.dice)).0,
        dg: dice_global(&counts),
        voe: finite_mean(cases.iter().map(|c| c.voe)).0,
        rvd,
        assd,
        msd: finite_mean(cases.iter().map(|c| c.msd)).0,
        rssd: finite_mean(cases.iter().map(|c| c.rssd)).0,
        excluded_rvd,
        excluded_surface,
    }
}
