//! Image volumes and multi-ROI masks.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Multi-channel 3D scalar field, `data[((c * Z + z) * Y + y) * X + x]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub channels: usize,
    /// `[Z, Y, X]`.
    pub dims: [usize; 3],
    /// Voxel size along `[Z, Y, X]`; not persisted by `.pvol`.
    pub spacing: [f32; 3],
    pub data: Vec<f32>,
}

impl Volume {
    pub fn new(channels: usize, dims: [usize; 3], data: Vec<f32>) -> Result<Self> {
        let n = channels * dims.iter().product::<usize>();
        if n == 0 || data.len() != n {
            return Err(Error::shape(
                "volume",
                format!("{channels} channels of {dims:?} need {n} values, got {}", data.len()),
            ));
        }
        Ok(Self {
            channels,
            dims,
            spacing: [1.0; 3],
            data,
        })
    }

    pub fn zeros(channels: usize, dims: [usize; 3]) -> Self {
        let n = channels * dims.iter().product::<usize>();
        Self::new(channels, dims, vec![0.0; n]).expect("non-empty dims")
    }

    pub fn cube(d: usize, data: Vec<f32>) -> Result<Self> {
        Self::new(1, [d, d, d], data)
    }

    pub fn voxels(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let v = self.voxels();
        &self.data[c * v..(c + 1) * v]
    }

    pub fn min(&self) -> f32 {
        self.data.iter().copied().fold(f32::INFINITY, f32::min)
    }

    pub fn max(&self) -> f32 {
        self.data.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }

    /// `[1, C, Z, Y, X]` tensor view.
    pub fn to_tensor(&self) -> Tensor<f32> {
        let [z, y, x] = self.dims;
        Tensor::from_vec(&[1, self.channels, z, y, x], self.data.clone()).expect("consistent volume")
    }

    /// Instance `n` of a `[N, C, Z, Y, X]` tensor.
    pub fn from_tensor(t: &Tensor<f32>, n: usize) -> Result<Self> {
        let [nb, c, z, y, x] = t.dims5("volume")?;
        if n >= nb {
            return Err(Error::shape("volume", format!("instance {n} of {nb}")));
        }
        let len = c * z * y * x;
        Self::new(c, [z, y, x], t.data()[n * len..(n + 1) * len].to_vec())
    }

    /// Stacks single-instance volumes into `[N, C, Z, Y, X]`.
    pub fn batch(vols: &[&Volume]) -> Result<Tensor<f32>> {
        let first = vols.first().ok_or_else(|| Error::Data("empty batch".into()))?;
        let mut data = Vec::with_capacity(vols.len() * first.data.len());
        for v in vols {
            if v.dims != first.dims || v.channels != first.channels {
                return Err(Error::shape("batch", "volumes differ in shape"));
            }
            data.extend_from_slice(&v.data);
        }
        let [z, y, x] = first.dims;
        Tensor::from_vec(&[vols.len(), first.channels, z, y, x], data)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..self.clone()
        }
    }
}

/// Binary masks, one channel per ROI, same layout as [`Volume`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub channels: usize,
    pub dims: [usize; 3],
    pub data: Vec<u8>,
}

impl Mask {
    pub fn new(channels: usize, dims: [usize; 3], data: Vec<u8>) -> Result<Self> {
        let n = channels * dims.iter().product::<usize>();
        if n == 0 || data.len() != n {
            return Err(Error::shape("mask", format!("{channels} channels of {dims:?} need {n} bytes")));
        }
        if let Some(i) = data.iter().position(|&b| b > 1) {
            return Err(Error::Data(format!("mask byte {i} is {}, expected 0 or 1", data[i])));
        }
        Ok(Self { channels, dims, data })
    }

    pub fn zeros(channels: usize, dims: [usize; 3]) -> Self {
        let n = channels * dims.iter().product::<usize>();
        Self::new(channels, dims, vec![0; n]).expect("non-empty dims")
    }

    pub fn voxels(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn channel(&self, c: usize) -> &[u8] {
        let v = self.voxels();
        &self.data[c * v..(c + 1) * v]
    }

    pub fn count(&self, c: usize) -> usize {
        self.channel(c).iter().map(|&b| b as usize).sum()
    }

    /// `[1, C, Z, Y, X]` tensor of 0.0 / 1.0.
    pub fn to_tensor(&self) -> Tensor<f32> {
        let [z, y, x] = self.dims;
        Tensor::from_vec(&[1, self.channels, z, y, x], self.data.iter().map(|&b| b as f32).collect())
            .expect("consistent mask")
    }

    /// Thresholds probabilities at 0.5.
    pub fn from_probabilities(p: &Volume) -> Self {
        Self {
            channels: p.channels,
            dims: p.dims,
            data: p.data.iter().map(|&v| u8::from(v >= 0.5)).collect(),
        }
    }
}
