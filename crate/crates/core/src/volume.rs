//! Dense voxel volumes and time series.
//!
//! Storage order is x fastest, then y, then z, then time: the voxel
//! `(x, y, z)` of frame `t` lives at `x + nx * (y + ny * (z + nz * t))`.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::scalar::Real;

/// Volume dimensions `(nx, ny, nz)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims3 {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
}

impl Dims3 {
    pub const fn new(nx: usize, ny: usize, nz: usize) -> Self {
        Self { nx, ny, nz }
    }

    pub const fn len(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub const fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.nx * (y + self.ny * z)
    }

    #[inline]
    pub const fn coords(&self, idx: usize) -> [usize; 3] {
        let x = idx % self.nx;
        let y = (idx / self.nx) % self.ny;
        let z = idx / (self.nx * self.ny);
        [x, y, z]
    }

    pub const fn as_array(&self) -> [usize; 3] {
        [self.nx, self.ny, self.nz]
    }
}

impl From<[usize; 3]> for Dims3 {
    fn from(d: [usize; 3]) -> Self {
        Self::new(d[0], d[1], d[2])
    }
}

/// A real-valued 3D volume.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume<T> {
    dims: Dims3,
    data: Vec<T>,
}

impl<T: Real> Volume<T> {
    pub fn zeros(dims: Dims3) -> Self {
        Self::filled(dims, T::zero())
    }

    pub fn filled(dims: Dims3, value: T) -> Self {
        Self {
            dims,
            data: vec![value; dims.len()],
        }
    }

    pub fn from_vec(dims: Dims3, data: Vec<T>) -> Result<Self> {
        if data.len() != dims.len() {
            return Err(invalid(format!(
                "volume {:?} needs {} values, got {}",
                dims.as_array(),
                dims.len(),
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn from_fn(dims: Dims3, mut f: impl FnMut(usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(dims.len());
        for z in 0..dims.nz {
            for y in 0..dims.ny {
                for x in 0..dims.nx {
                    data.push(f(x, y, z));
                }
            }
        }
        Self { dims, data }
    }

    pub fn dims(&self) -> Dims3 {
        self.dims
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> T {
        self.data[self.dims.index(x, y, z)]
    }

    pub fn set(&mut self, x: usize, y: usize, z: usize, v: T) {
        let i = self.dims.index(x, y, z);
        self.data[i] = v;
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            dims: self.dims,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Extracts the sub-volume starting at `origin` with extent `size`.
    pub fn crop(&self, origin: [usize; 3], size: Dims3) -> Result<Self> {
        if origin[0] + size.nx > self.dims.nx
            || origin[1] + size.ny > self.dims.ny
            || origin[2] + size.nz > self.dims.nz
        {
            return Err(invalid("crop window exceeds volume"));
        }
        Ok(Self::from_fn(size, |x, y, z| {
            self.get(origin[0] + x, origin[1] + y, origin[2] + z)
        }))
    }
}

/// What a [`DynamicSeries`] holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SeriesKind {
    Image,
    Concentration,
}

/// A real-valued 4D volume over time: either an image series `S(r,t)`
/// or a concentration series `C(r,t)`. Frame times are in minutes.
#[derive(Debug, Clone, PartialEq)]
pub struct DynamicSeries<T> {
    dims: Dims3,
    frame_times: Vec<T>,
    kind: SeriesKind,
    data: Vec<T>,
}

impl<T: Real> DynamicSeries<T> {
    pub fn zeros(dims: Dims3, frame_times: Vec<T>, kind: SeriesKind) -> Self {
        let n = dims.len() * frame_times.len();
        Self {
            dims,
            frame_times,
            kind,
            data: vec![T::zero(); n],
        }
    }

    pub fn from_vec(
        dims: Dims3,
        frame_times: Vec<T>,
        kind: SeriesKind,
        data: Vec<T>,
    ) -> Result<Self> {
        if frame_times.is_empty() {
            return Err(invalid("series needs at least one frame"));
        }
        if data.len() != dims.len() * frame_times.len() {
            return Err(invalid(format!(
                "series {:?} x {} frames needs {} values, got {}",
                dims.as_array(),
                frame_times.len(),
                dims.len() * frame_times.len(),
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(invalid(format!(
                "non-finite series value at flat index {i}"
            )));
        }
        Ok(Self {
            dims,
            frame_times,
            kind,
            data,
        })
    }

    pub fn dims(&self) -> Dims3 {
        self.dims
    }

    pub fn nt(&self) -> usize {
        self.frame_times.len()
    }

    pub fn kind(&self) -> SeriesKind {
        self.kind
    }

    pub fn frame_times(&self) -> &[T] {
        &self.frame_times
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn frame(&self, t: usize) -> &[T] {
        let n = self.dims.len();
        &self.data[t * n..(t + 1) * n]
    }

    pub fn frame_mut(&mut self, t: usize) -> &mut [T] {
        let n = self.dims.len();
        &mut self.data[t * n..(t + 1) * n]
    }

    #[inline]
    pub fn at(&self, voxel: usize, t: usize) -> T {
        self.data[t * self.dims.len() + voxel]
    }

    /// Time curve of a single voxel.
    pub fn curve(&self, voxel: usize) -> Vec<T> {
        (0..self.nt()).map(|t| self.at(voxel, t)).collect()
    }

    pub fn crop(&self, origin: [usize; 3], size: Dims3) -> Result<Self> {
        let mut out = Vec::with_capacity(size.len() * self.nt());
        for t in 0..self.nt() {
            let frame = Volume::from_vec(self.dims, self.frame(t).to_vec())?;
            out.extend(frame.crop(origin, size)?.into_vec());
        }
        Self::from_vec(size, self.frame_times.clone(), self.kind, out)
    }
}
