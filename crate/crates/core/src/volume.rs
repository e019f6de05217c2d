//! Scalar 3D volumes and their on-disk formats.
//!
//! Voxels are stored x-major: index `(x, y, z)` lives at `(x * Y + y) * Z + z`.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    shape: [usize; 3],
    spacing: [f64; 3],
    data: Vec<f32>,
}

impl Volume {
    pub fn new(shape: [usize; 3], spacing: [f64; 3], data: Vec<f32>) -> Result<Self> {
        if shape.iter().any(|&s| s == 0) {
            return Err(Error::shape(format!("volume shape {:?} has a zero axis", shape)));
        }
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::shape(format!(
                "volume shape {:?} needs {} voxels, got {}",
                shape,
                shape.iter().product::<usize>(),
                data.len()
            )));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::invalid(format!("voxel spacing {:?} must be positive", spacing)));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("non-finite voxel at flat index {i}")));
        }
        Ok(Volume { shape, spacing, data })
    }

    pub fn filled(shape: [usize; 3], value: f32) -> Self {
        Volume {
            shape,
            spacing: [1.0; 3],
            data: vec![value; shape.iter().product()],
        }
    }

    /// Builds a unit-spacing volume from a function of voxel coordinates.
    pub fn from_fn(shape: [usize; 3], f: impl Fn(usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(shape.iter().product());
        for x in 0..shape[0] {
            for y in 0..shape[1] {
                for z in 0..shape[2] {
                    data.push(f(x, y, z));
                }
            }
        }
        Volume {
            shape,
            spacing: [1.0; 3],
            data,
        }
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn with_spacing(mut self, spacing: [f64; 3]) -> Self {
        self.spacing = spacing;
        self
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (x * self.shape[1] + y) * self.shape[2] + z
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.index(x, y, z)]
    }

    /// `(min, max)` over all voxels.
    pub fn intensity_range(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Volume {
        Volume {
            shape: self.shape,
            spacing: self.spacing,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn mean_abs_diff(&self, other: &Volume) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::shape(format!("{:?} vs {:?}", self.shape, other.shape)));
        }
        let s: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a as f64 - b as f64).abs())
            .sum();
        Ok(s / self.data.len() as f64)
    }

    /// FNV-1a digest of shape, spacing and voxel bits.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        for s in self.shape {
            eat(&(s as u64).to_le_bytes());
        }
        for s in self.spacing {
            eat(&s.to_le_bytes());
        }
        for v in &self.data {
            eat(&v.to_le_bytes());
        }
        h
    }
}

const RAW_MAGIC: &str = "LFVOL 1";

/// Writes the raw fixture format: a short text header followed by
/// little-endian `f32` voxels in x-major order.
pub fn write_raw(path: &Path, v: &Volume) -> Result<()> {
    let mut out = Vec::with_capacity(64 + v.len() * 4);
    writeln!(out, "{RAW_MAGIC}").unwrap();
    writeln!(out, "shape {} {} {}", v.shape[0], v.shape[1], v.shape[2]).unwrap();
    writeln!(out, "spacing {} {} {}", v.spacing[0], v.spacing[1], v.spacing[2]).unwrap();
    writeln!(out, "dtype f32le").unwrap();
    writeln!(out, "end").unwrap();
    for x in &v.data {
        out.extend_from_slice(&x.to_le_bytes());
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_raw(path: &Path) -> Result<Volume> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let bad = |m: &str| Error::Format(format!("{}: {}", path.display(), m));
    let mut line = String::new();
    let mut next = |r: &mut BufReader<std::fs::File>| -> Result<String> {
        line.clear();
        r.read_line(&mut line).map_err(|e| Error::io(path, e))?;
        Ok(line.trim_end().to_string())
    };
    if next(&mut r)? != RAW_MAGIC {
        return Err(bad("missing raw volume magic"));
    }
    let mut shape = None;
    let mut spacing = [1.0; 3];
    loop {
        let l = next(&mut r)?;
        let mut parts = l.split_whitespace();
        match parts.next() {
            Some("shape") => {
                let v: Vec<usize> = parts.map(|p| p.parse()).collect::<std::result::Result<_, _>>().map_err(|_| bad("bad shape"))?;
                if v.len() != 3 {
                    return Err(bad("shape needs 3 values"));
                }
                shape = Some([v[0], v[1], v[2]]);
            }
            Some("spacing") => {
                let v: Vec<f64> = parts.map(|p| p.parse()).collect::<std::result::Result<_, _>>().map_err(|_| bad("bad spacing"))?;
                if v.len() != 3 {
                    return Err(bad("spacing needs 3 values"));
                }
                spacing = [v[0], v[1], v[2]];
            }
            Some("dtype") => {
                if parts.next() != Some("f32le") {
                    return Err(bad("only f32le is supported"));
                }
            }
            Some("end") => break,
            Some(other) => return Err(bad(&format!("unknown header key {other}"))),
            None => return Err(bad("unterminated header")),
        }
    }
    let shape = shape.ok_or_else(|| bad("missing shape"))?;
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    let n: usize = shape.iter().product();
    if bytes.len() != n * 4 {
        return Err(bad(&format!("expected {} data bytes, found {}", n * 4, bytes.len())));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Volume::new(shape, spacing, data)
}

fn is_nifti(path: &Path) -> bool {
    let name = path.to_string_lossy().to_ascii_lowercase();
    name.ends_with(".nii") || name.ends_with(".nii.gz")
}

/// Reads a volume, choosing the format by file extension.
pub fn read_volume(path: &Path) -> Result<Volume> {
    if is_nifti(path) {
        read_nifti(path)
    } else {
        read_raw(path)
    }
}

/// Writes a volume, choosing the format by file extension.
pub fn write_volume(path: &Path, v: &Volume) -> Result<()> {
    if is_nifti(path) {
        write_nifti(path, v)
    } else {
        write_raw(path, v)
    }
}

#[cfg(feature = "io")]
fn read_nifti(path: &Path) -> Result<Volume> {
    use nifti::{IntoNdArray, NiftiObject, ReaderOptions};
    if !path.exists() {
        return Err(Error::io(path, std::io::Error::new(std::io::ErrorKind::NotFound, "no such file")));
    }
    let obj = ReaderOptions::new()
        .read_file(path)
        .map_err(|e| Error::Format(format!("{}: {}", path.display(), e)))?;
    let pix = obj.header().pixdim;
    let arr = obj
        .into_volume()
        .into_ndarray::<f32>()
        .map_err(|e| Error::Format(format!("{}: {}", path.display(), e)))?;
    let dims = arr.shape().to_vec();
    if dims.len() < 3 || dims[3..].iter().any(|&d| d != 1) {
        return Err(Error::Format(format!("{}: expected a 3D volume, got dims {:?}", path.display(), dims)));
    }
    let shape = [dims[0], dims[1], dims[2]];
    let mut idx = vec![0usize; dims.len()];
    let mut data = Vec::with_capacity(shape.iter().product());
    for x in 0..shape[0] {
        for y in 0..shape[1] {
            for z in 0..shape[2] {
                idx[..3].copy_from_slice(&[x, y, z]);
                data.push(arr[idx.as_slice()]);
            }
        }
    }
    let spacing = [pix[1], pix[2], pix[3]].map(|p| if p > 0.0 { p as f64 } else { 1.0 });
    Volume::new(shape, spacing, data)
}

#[cfg(feature = "io")]
fn write_nifti(path: &Path, v: &Volume) -> Result<()> {
    use nifti::{writer::WriterOptions, NiftiHeader};
    let arr = ndarray::Array3::from_shape_vec((v.shape[0], v.shape[1], v.shape[2]), v.data.clone())
        .map_err(|e| Error::Format(e.to_string()))?;
    let mut header = NiftiHeader::default();
    header.pixdim = [1.0, v.spacing[0] as f32, v.spacing[1] as f32, v.spacing[2] as f32, 1.0, 1.0, 1.0, 1.0];
    header.xyzt_units = 2; // millimetres
    WriterOptions::new(path)
        .reference_header(&header)
        .write_nifti(&arr)
        .map_err(|e| Error::Format(format!("{}: {}", path.display(), e)))
}

#[cfg(not(feature = "io"))]
fn read_nifti(path: &Path) -> Result<Volume> {
    Err(Error::Format(format!("{}: NIfTI support requires the `io` feature", path.display())))
}

#[cfg(not(feature = "io"))]
fn write_nifti(path: &Path, _v: &Volume) -> Result<()> {
    Err(Error::Format(format!("{}: NIfTI support requires the `io` feature", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp() -> Volume {
        Volume::from_fn([3, 4, 5], |x, y, z| (x * 100 + y * 10 + z) as f32 * 0.5 - 7.0).with_spacing([1.0, 1.5, 2.0])
    }

    #[test]
    fn rejects_invalid_volumes() {
        assert!(Volume::new([2, 2, 2], [1.0; 3], vec![0.0; 7]).is_err());
        assert!(Volume::new([2, 2, 2], [1.0, 0.0, 1.0], vec![0.0; 8]).is_err());
        let mut d = vec![0.0; 8];
        d[3] = f32::NAN;
        assert!(Volume::new([2, 2, 2], [1.0; 3], d).is_err());
    }

    #[test]
    fn raw_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.vol");
        let v = ramp();
        write_raw(&p, &v).unwrap();
        assert_eq!(read_volume(&p).unwrap(), v);
    }

    #[cfg(feature = "io")]
    #[test]
    fn nifti_round_trip_preserves_axes_and_spacing() {
        let dir = tempfile::tempdir().unwrap();
        for name in ["v.nii", "v.nii.gz"] {
            let p = dir.path().join(name);
            let v = ramp();
            write_volume(&p, &v).unwrap();
            let back = read_volume(&p).unwrap();
            assert_eq!(back.shape(), [3, 4, 5]);
            assert_eq!(back.get(2, 1, 3), v.get(2, 1, 3));
            assert_eq!(back, v);
        }
    }
}
