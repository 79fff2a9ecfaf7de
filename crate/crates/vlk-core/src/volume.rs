//! 3D scalar grid with physical spacing, and its bit-exact on-disk format.
//!
//! A volume is stored as two files: `<stem>.json` (UTF-8 header with keys
//! `dims`, `spacing`, `dtype`, `order`, `endianness`) and `<stem>.raw`
//! (little-endian values, no padding, x-fastest order). The same pair of
//! files is the wire format of the external-predictor protocol.

use std::fs;
use std::path::{Path, PathBuf};

use byteorder::{ByteOrder, LittleEndian};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Voxel value type of a [`Volume`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    U8,
    F32,
}

impl Dtype {
    pub fn name(self) -> &'static str {
        match self {
            Dtype::U8 => "u8",
            Dtype::F32 => "f32",
        }
    }

    pub fn byte_size(self) -> usize {
        match self {
            Dtype::U8 => 1,
            Dtype::F32 => 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum VoxelData {
    U8(Vec<u8>),
    F32(Vec<f32>),
}

impl VoxelData {
    pub fn len(&self) -> usize {
        match self {
            VoxelData::U8(v) => v.len(),
            VoxelData::F32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> Dtype {
        match self {
            VoxelData::U8(_) => Dtype::U8,
            VoxelData::F32(_) => Dtype::F32,
        }
    }
}

/// A 3D scalar grid (labels, probabilities, or velocities) with physical
/// spacing in millimeters per voxel. Data is a flat array of length
/// `nx * ny * nz` in x-fastest order: `index(x,y,z) = x + nx*(y + ny*z)`.
///
/// Values are immutable after construction as far as the toolkit is
/// concerned; every operation returns a new volume.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    spacing: [f64; 3],
    data: VoxelData,
}

impl Volume {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], data: VoxelData) -> Result<Self> {
        let n = dims[0]
            .checked_mul(dims[1])
            .and_then(|p| p.checked_mul(dims[2]))
            .ok_or_else(|| Error::invariant("dims product overflows"))?;
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::invariant(format!(
                "dims must be positive, got {dims:?}"
            )));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::invariant(format!(
                "spacing must be strictly positive, got {spacing:?}"
            )));
        }
        if data.len() != n {
            return Err(Error::LengthMismatch {
                expected: n,
                actual: data.len(),
            });
        }
        Ok(Volume {
            dims,
            spacing,
            data,
        })
    }

    pub fn from_u8(dims: [usize; 3], spacing: [f64; 3], data: Vec<u8>) -> Result<Self> {
        Self::new(dims, spacing, VoxelData::U8(data))
    }

    pub fn from_f32(dims: [usize; 3], spacing: [f64; 3], data: Vec<f32>) -> Result<Self> {
        Self::new(dims, spacing, VoxelData::F32(data))
    }

    pub fn zeros_u8(dims: [usize; 3], spacing: [f64; 3]) -> Result<Self> {
        let n = dims[0] * dims[1] * dims[2];
        Self::from_u8(dims, spacing, vec![0u8; n])
    }

    pub fn zeros_f32(dims: [usize; 3], spacing: [f64; 3]) -> Result<Self> {
        let n = dims[0] * dims[1] * dims[2];
        Self::from_f32(dims, spacing, vec![0f32; n])
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn dtype(&self) -> Dtype {
        self.data.dtype()
    }

    /// Total voxel count `nx * ny * nz`.
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// x-fastest linear index.
    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    pub fn data(&self) -> &VoxelData {
        &self.data
    }

    pub fn u8_data(&self) -> Result<&[u8]> {
        match &self.data {
            VoxelData::U8(v) => Ok(v),
            VoxelData::F32(_) => Err(Error::DtypeMismatch {
                expected: "u8",
                actual: "f32",
            }),
        }
    }

    pub fn u8_data_mut(&mut self) -> Result<&mut [u8]> {
        match &mut self.data {
            VoxelData::U8(v) => Ok(v),
            VoxelData::F32(_) => Err(Error::DtypeMismatch {
                expected: "u8",
                actual: "f32",
            }),
        }
    }

    pub fn f32_data(&self) -> Result<&[f32]> {
        match &self.data {
            VoxelData::F32(v) => Ok(v),
            VoxelData::U8(_) => Err(Error::DtypeMismatch {
                expected: "f32",
                actual: "u8",
            }),
        }
    }

    pub fn f32_data_mut(&mut self) -> Result<&mut [f32]> {
        match &mut self.data {
            VoxelData::F32(v) => Ok(v),
            VoxelData::U8(_) => Err(Error::DtypeMismatch {
                expected: "f32",
                actual: "u8",
            }),
        }
    }

    /// Bitwise equality: same dims, spacing, dtype, and byte-identical data
    /// (f32 compared by bit pattern, so NaN payloads count).
    pub fn bit_eq(&self, other: &Volume) -> bool {
        if self.dims != other.dims || self.spacing != other.spacing {
            return false;
        }
        match (&self.data, &other.data) {
            (VoxelData::U8(a), VoxelData::U8(b)) => a == b,
            (VoxelData::F32(a), VoxelData::F32(b)) => {
                a.len() == b.len()
                    && a.iter()
                        .zip(b.iter())
                        .all(|(x, y)| x.to_bits() == y.to_bits())
            }
            _ => false,
        }
    }

    /// Errors unless `self` and `other` share dims.
    pub fn check_same_dims(&self, other: &Volume) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::ShapeMismatch {
                a: self.dims,
                b: other.dims,
            });
        }
        Ok(())
    }

    /// Errors unless the volume is u8 with values in `{0, 1}`.
    pub fn check_binary(&self) -> Result<()> {
        let data = self.u8_data()?;
        if data.iter().any(|&v| v > 1) {
            return Err(Error::invalid(
                "expected a binary segmentation with values in {0, 1}",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct VolumeHeader {
    dims: [u64; 3],
    spacing: [f64; 3],
    dtype: String,
    order: String,
    endianness: String,
}

fn header_path(stem: &Path) -> PathBuf {
    let mut os = stem.as_os_str().to_owned();
    os.push(".json");
    PathBuf::from(os)
}

fn raw_path(stem: &Path) -> PathBuf {
    let mut os = stem.as_os_str().to_owned();
    os.push(".raw");
    PathBuf::from(os)
}

/// Write `<stem>.json` and `<stem>.raw`. Round-trips bit-exactly through
/// [`read_volume`].
pub fn write_volume(v: &Volume, stem: impl AsRef<Path>) -> Result<()> {
    let stem = stem.as_ref();
    let header = VolumeHeader {
        dims: [v.dims[0] as u64, v.dims[1] as u64, v.dims[2] as u64],
        spacing: v.spacing,
        dtype: v.dtype().name().to_string(),
        order: "x-fastest".to_string(),
        endianness: "little".to_string(),
    };
    let hp = header_path(stem);
    let text = serde_json::to_string_pretty(&header).expect("header serialization is infallible");
    fs::write(&hp, text).map_err(|e| Error::io(&hp, e))?;

    let rp = raw_path(stem);
    let bytes = match &v.data {
        VoxelData::U8(d) => d.clone(),
        VoxelData::F32(d) => {
            let mut buf = vec![0u8; d.len() * 4];
            LittleEndian::write_f32_into(d, &mut buf);
            buf
        }
    };
    fs::write(&rp, bytes).map_err(|e| Error::io(&rp, e))?;
    Ok(())
}

/// Inverse of [`write_volume`]; validates every header field and the raw
/// length before constructing the volume.
pub fn read_volume(stem: impl AsRef<Path>) -> Result<Volume> {
    let stem = stem.as_ref();
    let hp = header_path(stem);
    let text = fs::read_to_string(&hp).map_err(|e| Error::io(&hp, e))?;
    let header: VolumeHeader = serde_json::from_str(&text).map_err(|e| Error::MalformedHeader {
        path: hp.clone(),
        detail: e.to_string(),
    })?;

    if header.order != "x-fastest" {
        return Err(Error::UnsupportedFormat {
            field: "order",
            value: header.order,
        });
    }
    if header.endianness != "little" {
        return Err(Error::UnsupportedFormat {
            field: "endianness",
            value: header.endianness,
        });
    }
    let dtype = match header.dtype.as_str() {
        "u8" => Dtype::U8,
        "f32" => Dtype::F32,
        other => {
            return Err(Error::UnsupportedFormat {
                field: "dtype",
                value: other.to_string(),
            })
        }
    };
    let dims = [
        header.dims[0] as usize,
        header.dims[1] as usize,
        header.dims[2] as usize,
    ];
    let n = dims[0]
        .checked_mul(dims[1])
        .and_then(|p| p.checked_mul(dims[2]))
        .ok_or_else(|| Error::MalformedHeader {
            path: hp.clone(),
            detail: "dims product overflows".to_string(),
        })?;

    let rp = raw_path(stem);
    let bytes = fs::read(&rp).map_err(|e| Error::io(&rp, e))?;
    if bytes.len() != n * dtype.byte_size() {
        return Err(Error::LengthMismatch {
            expected: n * dtype.byte_size(),
            actual: bytes.len(),
        });
    }
    let data = match dtype {
        Dtype::U8 => VoxelData::U8(bytes),
        Dtype::F32 => {
            let mut values = vec![0f32; n];
            LittleEndian::read_f32_into(&bytes, &mut values);
            VoxelData::F32(values)
        }
    };
    Volume::new(dims, header.spacing, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    #[test]
    fn linearization_is_x_fastest() {
        let v = Volume::zeros_u8([3, 4, 5], [1.0; 3]).unwrap();
        // index(x,y,z) = x + nx*(y + ny*z), enumerated by hand
        assert_eq!(v.index(0, 0, 0), 0);
        assert_eq!(v.index(1, 0, 0), 1);
        assert_eq!(v.index(0, 1, 0), 3);
        assert_eq!(v.index(0, 0, 1), 12);
        assert_eq!(v.index(2, 3, 4), 2 + 3 * (3 + 4 * 4));
    }

    #[test]
    fn zero_volume_writes_zero_bytes() {
        let dir = tmp();
        let stem = dir.path().join("vol");
        let v = Volume::zeros_u8([2, 2, 2], [1.0; 3]).unwrap();
        write_volume(&v, &stem).unwrap();
        let raw = fs::read(dir.path().join("vol.raw")).unwrap();
        assert_eq!(raw, vec![0u8; 8]);
        let header: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(dir.path().join("vol.json")).unwrap())
                .unwrap();
        assert_eq!(header["dims"], serde_json::json!([2, 2, 2]));
        assert_eq!(header["order"], "x-fastest");
        assert_eq!(header["endianness"], "little");
    }

    #[test]
    fn f32_ramp_encodes_little_endian() {
        let dir = tmp();
        let stem = dir.path().join("ramp");
        let data: Vec<f32> = (0..6).map(|i| i as f32).collect();
        let v = Volume::from_f32([3, 2, 1], [1.0; 3], data).unwrap();
        write_volume(&v, &stem).unwrap();
        let raw = fs::read(dir.path().join("ramp.raw")).unwrap();
        assert_eq!(raw.len(), 24);
        let mut expected = Vec::new();
        for i in 0..6 {
            expected.extend_from_slice(&(i as f32).to_le_bytes());
        }
        assert_eq!(raw, expected);
        // voxel (2,1,0): index = 2 + 3*(1 + 2*0) = 5
        let back = read_volume(&stem).unwrap();
        assert_eq!(back.f32_data().unwrap()[back.index(2, 1, 0)], 5.0);
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tmp();
        let stem = dir.path().join("rt");
        let data: Vec<u8> = (0..24).map(|i| (i * 7 % 256) as u8).collect();
        let v = Volume::from_u8([2, 3, 4], [0.5, 0.6, 0.7], data).unwrap();
        write_volume(&v, &stem).unwrap();
        let back = read_volume(&stem).unwrap();
        assert!(v.bit_eq(&back));
        assert_eq!(v, back);
    }

    #[test]
    fn truncated_raw_is_length_mismatch() {
        let dir = tmp();
        let stem = dir.path().join("trunc");
        let v = Volume::zeros_u8([2, 2, 2], [1.0; 3]).unwrap();
        write_volume(&v, &stem).unwrap();
        let rp = dir.path().join("trunc.raw");
        let bytes = fs::read(&rp).unwrap();
        fs::write(&rp, &bytes[..bytes.len() - 1]).unwrap();
        match read_volume(&stem) {
            Err(Error::LengthMismatch { expected, actual }) => {
                assert_eq!(expected, 8);
                assert_eq!(actual, 7);
            }
            other => panic!("expected length mismatch, got {other:?}"),
        }
    }

    #[test]
    fn unsupported_order_rejected() {
        let dir = tmp();
        let stem = dir.path().join("ord");
        let v = Volume::zeros_u8([2, 2, 2], [1.0; 3]).unwrap();
        write_volume(&v, &stem).unwrap();
        let hp = dir.path().join("ord.json");
        let text = fs::read_to_string(&hp)
            .unwrap()
            .replace("x-fastest", "z-fastest");
        fs::write(&hp, text).unwrap();
        assert!(matches!(
            read_volume(&stem),
            Err(Error::UnsupportedFormat { field: "order", .. })
        ));
    }

    #[test]
    fn missing_file_and_malformed_header() {
        let dir = tmp();
        assert!(matches!(
            read_volume(dir.path().join("nope")),
            Err(Error::Io { .. })
        ));
        let stem = dir.path().join("bad");
        fs::write(dir.path().join("bad.json"), "{not json").unwrap();
        fs::write(dir.path().join("bad.raw"), []).unwrap();
        assert!(matches!(
            read_volume(&stem),
            Err(Error::MalformedHeader { .. })
        ));
    }

    #[test]
    fn construction_invariants() {
        assert!(Volume::from_u8([2, 2, 2], [1.0; 3], vec![0; 7]).is_err());
        assert!(Volume::from_u8([0, 2, 2], [1.0; 3], vec![]).is_err());
        assert!(Volume::from_u8([1, 1, 1], [0.0, 1.0, 1.0], vec![0]).is_err());
        assert!(Volume::from_u8([1, 1, 1], [-1.0, 1.0, 1.0], vec![0]).is_err());
    }

    #[test]
    fn binary_check() {
        let v = Volume::from_u8([2, 1, 1], [1.0; 3], vec![0, 1]).unwrap();
        v.check_binary().unwrap();
        let v = Volume::from_u8([2, 1, 1], [1.0; 3], vec![0, 2]).unwrap();
        assert!(v.check_binary().is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(48))]

            #[test]
            fn random_volumes_round_trip(
                nx in 1usize..6, ny in 1usize..6, nz in 1usize..6,
                sx in 0.1f64..3.0, sy in 0.1f64..3.0, sz in 0.1f64..3.0,
                use_f32 in proptest::bool::ANY,
                seed in proptest::num::u64::ANY,
            ) {
                let n = nx * ny * nz;
                // cheap deterministic fill from the seed
                let mut state = seed | 1;
                let mut next = || {
                    state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                    (state >> 32) as u32
                };
                let v = if use_f32 {
                    let data: Vec<f32> = (0..n).map(|_| f32::from_bits(next())).collect();
                    Volume::from_f32([nx, ny, nz], [sx, sy, sz], data).unwrap()
                } else {
                    let data: Vec<u8> = (0..n).map(|_| next() as u8).collect();
                    Volume::from_u8([nx, ny, nz], [sx, sy, sz], data).unwrap()
                };
                let dir = tempfile::tempdir().unwrap();
                let stem = dir.path().join("p");
                write_volume(&v, &stem).unwrap();
                let back = read_volume(&stem).unwrap();
                prop_assert!(v.bit_eq(&back));
            }
        }
    }
}
