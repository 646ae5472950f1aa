//! Dense 3-D grids of per-voxel channel vectors and their on-disk form:
//! a raw little-endian sample file plus a JSON sidecar.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{DtiError, Result};
use crate::scalar::Real;

/// Row-major volume (x slowest, channel fastest).
#[derive(Debug, Clone, PartialEq)]
pub struct Volume4D<T> {
    dims: [usize; 3],
    channels: usize,
    data: Vec<T>,
    voxel_size: [f64; 3],
}

impl<T: Real> Volume4D<T> {
    pub fn new(dims: [usize; 3], channels: usize, data: Vec<T>) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) || channels == 0 {
            return Err(DtiError::ShapeMismatch(format!(
                "dims {dims:?} x {channels} channels must be positive"
            )));
        }
        let want = dims[0] * dims[1] * dims[2] * channels;
        if data.len() != want {
            return Err(DtiError::ShapeMismatch(format!(
                "data length {} != {want} for dims {dims:?} x {channels}",
                data.len()
            )));
        }
        Ok(Self {
            dims,
            channels,
            data,
            voxel_size: [1.0; 3],
        })
    }

    pub fn zeros(dims: [usize; 3], channels: usize) -> Self {
        Self::new(dims, channels, vec![T::zero(); dims[0] * dims[1] * dims[2] * channels])
            .expect("positive dims")
    }

    /// Builds a volume by filling each voxel's channel slice.
    pub fn from_voxels(dims: [usize; 3], channels: usize, mut fill: impl FnMut([usize; 3], &mut [T])) -> Self {
        let mut v = Self::zeros(dims, channels);
        for i in 0..v.voxel_count() {
            let c = v.coords(i);
            fill(c, v.voxel_at_mut(i));
        }
        v
    }

    pub fn with_voxel_size(mut self, voxel_size: [f64; 3]) -> Self {
        self.voxel_size = voxel_size;
        self
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn voxel_size(&self) -> [f64; 3] {
        self.voxel_size
    }

    pub fn voxel_count(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn linear_index(&self, c: [usize; 3]) -> usize {
        (c[0] * self.dims[1] + c[1]) * self.dims[2] + c[2]
    }

    pub fn coords(&self, i: usize) -> [usize; 3] {
        let z = i % self.dims[2];
        let y = (i / self.dims[2]) % self.dims[1];
        let x = i / (self.dims[1] * self.dims[2]);
        [x, y, z]
    }

    pub fn voxel(&self, c: [usize; 3]) -> &[T] {
        self.voxel_at(self.linear_index(c))
    }

    pub fn voxel_mut(&mut self, c: [usize; 3]) -> &mut [T] {
        let i = self.linear_index(c);
        self.voxel_at_mut(i)
    }

    pub fn voxel_at(&self, i: usize) -> &[T] {
        &self.data[i * self.channels..(i + 1) * self.channels]
    }

    pub fn voxel_at_mut(&mut self, i: usize) -> &mut [T] {
        let c = self.channels;
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn voxels(&self) -> std::slice::ChunksExact<'_, T> {
        self.data.chunks_exact(self.channels)
    }

    pub fn same_grid<U>(&self, other: &Volume4D<U>) -> bool {
        self.dims == other.dims
    }

    pub fn ensure_same_grid<U>(&self, other: &Volume4D<U>, what: &str) -> Result<()> {
        if self.dims != other.dims {
            return Err(DtiError::ShapeMismatch(format!(
                "{what}: dims {:?} vs {:?}",
                self.dims, other.dims
            )));
        }
        Ok(())
    }

    /// Keeps only the listed channels, in the given order.
    pub fn select_channels(&self, channels: &[usize]) -> Result<Self> {
        if let Some(&bad) = channels.iter().find(|&&c| c >= self.channels) {
            return Err(DtiError::ShapeMismatch(format!(
                "channel {bad} out of range for {} channels",
                self.channels
            )));
        }
        let mut out = Self::from_voxels(self.dims, channels.len(), |_, _| {});
        for (src, dst) in self.voxels().zip(out.data.chunks_exact_mut(channels.len())) {
            for (d, &c) in dst.iter_mut().zip(channels) {
                *d = src[c];
            }
        }
        out.voxel_size = self.voxel_size;
        Ok(out)
    }

    pub fn cast<U: Real>(&self) -> Volume4D<U> {
        Volume4D {
            dims: self.dims,
            channels: self.channels,
            data: self.data.iter().map(|&x| U::lit(x.as_f64())).collect(),
            voxel_size: self.voxel_size,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Writes `<stem>.raw` and `<stem>.json`.
    pub fn save(&self, stem: impl AsRef<Path>, dtype: SampleType, seed: Option<u64>, description: &str) -> Result<()> {
        let stem = stem.as_ref();
        let mut bytes = Vec::with_capacity(self.data.len() * dtype.width());
        match dtype {
            SampleType::Float32 => {
                for &x in &self.data {
                    bytes.extend_from_slice(&(x.as_f64() as f32).to_le_bytes());
                }
            }
            SampleType::Float64 => {
                for &x in &self.data {
                    bytes.extend_from_slice(&x.as_f64().to_le_bytes());
                }
            }
        }
        let sidecar = VolumeSidecar {
            dims: self.dims,
            channels: self.channels,
            voxel_size: self.voxel_size,
            dtype,
            seed,
            description: description.to_string(),
        };
        write_atomic(&raw_path(stem), &bytes)?;
        write_atomic(&sidecar_path(stem), serde_json::to_string_pretty(&sidecar)?.as_bytes())?;
        Ok(())
    }

    pub fn load(stem: impl AsRef<Path>) -> Result<(Self, VolumeSidecar)> {
        let stem = stem.as_ref();
        let sidecar: VolumeSidecar = serde_json::from_slice(&std::fs::read(sidecar_path(stem))?)?;
        let bytes = std::fs::read(raw_path(stem))?;
        let n = sidecar.dims.iter().product::<usize>() * sidecar.channels;
        if bytes.len() != n * sidecar.dtype.width() {
            return Err(DtiError::Format(format!(
                "{}: {} bytes, expected {} for {:?} x {} {:?}",
                raw_path(stem).display(),
                bytes.len(),
                n * sidecar.dtype.width(),
                sidecar.dims,
                sidecar.channels,
                sidecar.dtype
            )));
        }
        let data: Vec<T> = match sidecar.dtype {
            SampleType::Float32 => bytes
                .chunks_exact(4)
                .map(|b| T::lit(f32::from_le_bytes(b.try_into().unwrap()) as f64))
                .collect(),
            SampleType::Float64 => bytes
                .chunks_exact(8)
                .map(|b| T::lit(f64::from_le_bytes(b.try_into().unwrap())))
                .collect(),
        };
        let vol = Self::new(sidecar.dims, sidecar.channels, data)?.with_voxel_size(sidecar.voxel_size);
        Ok((vol, sidecar))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleType {
    Float32,
    Float64,
}

impl SampleType {
    pub fn width(&self) -> usize {
        match self {
            SampleType::Float32 => 4,
            SampleType::Float64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeSidecar {
    pub dims: [usize; 3],
    pub channels: usize,
    pub voxel_size: [f64; 3],
    pub dtype: SampleType,
    pub seed: Option<u64>,
    pub description: String,
}

pub fn raw_path(stem: &Path) -> PathBuf {
    stem.with_extension("raw")
}

pub fn sidecar_path(stem: &Path) -> PathBuf {
    stem.with_extension("json")
}

/// Writes through a temporary file in the same directory and renames it
/// into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| DtiError::Format(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp", name.to_string_lossy()));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}
