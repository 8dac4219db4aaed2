//! Binary cache of preprocessed slice samples.
//!
//! Layout, little-endian:
//!
//! ```text
//! magic     b"BSUC"
//! version   u32 (1)
//! channels  u32
//! height    u32
//! width     u32
//! count     u32
//! record × count:
//!   id_len  u16, id bytes (UTF-8 volume id)
//!   slice   u32
//!   image   f32 × channels·height·width
//!   label   u8 × height·width   (0 or 1)
//!   roi     u8 × height·width   (0 or 1)
//! ```
//!
//! Weight maps are not stored; they depend on the weight-map parameters and
//! are recomputed after loading.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array2, Array3};

use crate::datapipe::SliceSample;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"BSUC";
const VERSION: u32 = 1;

pub fn write_cache(path: impl AsRef<Path>, samples: &[SliceSample]) -> Result<()> {
    let path = path.as_ref();
    let (c, h, w) = samples.first().map_or((1, 0, 0), |s| s.image.dim());
    if let Some(s) = samples.iter().find(|s| s.image.dim() != (c, h, w)) {
        return Err(Error::shape(format!(
            "cached samples must share one shape; {:?} vs {:?}",
            s.image.dim(),
            (c, h, w)
        )));
    }
    let mut f = BufWriter::new(File::create(path)?);
    f.write_all(MAGIC)?;
    for v in [VERSION, c as u32, h as u32, w as u32, samples.len() as u32] {
        f.write_all(&v.to_le_bytes())?;
    }
    for s in samples {
        let id = s.volume.as_bytes();
        let len = u16::try_from(id.len()).map_err(|_| Error::format(path, "volume id longer than 65535 bytes"))?;
        f.write_all(&len.to_le_bytes())?;
        f.write_all(id)?;
        f.write_all(&(s.slice as u32).to_le_bytes())?;
        for v in s.image.iter() {
            f.write_all(&(*v as f32).to_le_bytes())?;
        }
        let bits: Vec<u8> = s.label.iter().chain(s.roi.iter()).map(|&b| u8::from(b)).collect();
        f.write_all(&bits)?;
    }
    f.flush()?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_cache(path: impl AsRef<Path>) -> Result<Vec<SliceSample>> {
    let path = path.as_ref();
    let truncated = |e: std::io::Error| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::format(path, "truncated cache file")
        } else {
            Error::Io(e)
        }
    };
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(truncated)?;
    if &magic != MAGIC {
        return Err(Error::format(path, "not a slice cache (bad magic)"));
    }
    let version = read_u32(&mut r).map_err(truncated)?;
    if version != VERSION {
        return Err(Error::format(path, format!("unsupported cache version {version}")));
    }
    let mut hdr = [0usize; 4];
    for v in &mut hdr {
        *v = read_u32(&mut r).map_err(truncated)? as usize;
    }
    let [c, h, w, count] = hdr;
    let mut out = Vec::with_capacity(count);
    let mut fbuf = vec![0u8; 4 * c * h * w];
    let mut bits = vec![0u8; 2 * h * w];
    for _ in 0..count {
        let mut lb = [0u8; 2];
        r.read_exact(&mut lb).map_err(truncated)?;
        let mut id = vec![0u8; u16::from_le_bytes(lb) as usize];
        r.read_exact(&mut id).map_err(truncated)?;
        let id = String::from_utf8(id).map_err(|_| Error::format(path, "volume id is not UTF-8"))?;
        let slice = read_u32(&mut r).map_err(truncated)? as usize;
        r.read_exact(&mut fbuf).map_err(truncated)?;
        r.read_exact(&mut bits).map_err(truncated)?;
        let image: Vec<f64> = fbuf
            .chunks_exact(4)
            .map(|b| f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]])))
            .collect();
        let image = Array3::from_shape_vec((c, h, w), image).map_err(|e| Error::format(path, e.to_string()))?;
        let mask =
            |b: &[u8]| Array2::from_shape_vec((h, w), b.iter().map(|&v| v != 0).collect()).expect("sized buffer");
        out.push(SliceSample::new(
            id,
            slice,
            image,
            mask(&bits[..h * w]),
            mask(&bits[h * w..]),
        )?);
    }
    Ok(out)
}
