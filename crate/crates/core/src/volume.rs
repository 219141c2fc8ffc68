//! Dose grids, binary ROI masks and the sidecar-header volume container.
//!
//! A volume on disk is a pair `<name>.json` (header) + `<name>.raw`
//! (little-endian payload, z slowest, x fastest). Dose payloads are `f32`,
//! bit-mask payloads `u32`. In memory doses are held as `f64`; saving rounds
//! to `f32`, so any grid that was loaded from disk round-trips bit-exactly.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bitmask::BitMaskVolume;
use crate::error::{Error, Result};

/// Voxel counts along x, y and z.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims(pub [usize; 3]);

impl Dims {
    pub fn new(nx: usize, ny: usize, nz: usize) -> Self {
        Dims([nx, ny, nz])
    }

    pub fn cube(n: usize) -> Self {
        Dims([n, n, n])
    }

    pub fn nx(&self) -> usize {
        self.0[0]
    }

    pub fn ny(&self) -> usize {
        self.0[1]
    }

    pub fn nz(&self) -> usize {
        self.0[2]
    }

    pub fn len(&self) -> usize {
        self.0.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Linear z-major index of `(x, y, z)`.
    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (z * self.0[1] + y) * self.0[0] + x
    }

    #[inline]
    pub fn coords(&self, index: usize) -> (usize, usize, usize) {
        let nx = self.0[0];
        let ny = self.0[1];
        (index % nx, (index / nx) % ny, index / (nx * ny))
    }

    pub(crate) fn ensure_same(&self, other: &Dims) -> Result<()> {
        if self != other {
            return Err(Error::DimsMismatch {
                left: self.0,
                right: other.0,
            });
        }
        Ok(())
    }

    pub(crate) fn validate(&self) -> Result<()> {
        if self.0.iter().any(|&n| n == 0) {
            return Err(Error::InvalidArgument(format!(
                "dims must be positive, got {:?}",
                self.0
            )));
        }
        Ok(())
    }
}

/// A 3D dose distribution.
///
/// `values` are stored in units of `unit_scale` Gy: a stored value `v`
/// represents `v * unit_scale` Gy. `unit_scale = 1` means plain Gy,
/// `unit_scale = 70` is the normalized training regime.
#[derive(Debug, Clone, PartialEq)]
pub struct DoseGrid {
    dims: Dims,
    spacing_mm: [f64; 3],
    unit_scale: f64,
    values: Vec<f64>,
}

impl DoseGrid {
    pub fn new(dims: Dims, spacing_mm: [f64; 3], unit_scale: f64, values: Vec<f64>) -> Result<Self> {
        dims.validate()?;
        if values.len() != dims.len() {
            return Err(Error::InvalidArgument(format!(
                "{} values for dims {:?}",
                values.len(),
                dims.0
            )));
        }
        if spacing_mm.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::InvalidArgument(format!(
                "spacing must be positive, got {spacing_mm:?}"
            )));
        }
        if !(unit_scale.is_finite() && unit_scale > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "unit_scale must be positive, got {unit_scale}"
            )));
        }
        validate_doses(&values)?;
        Ok(DoseGrid {
            dims,
            spacing_mm,
            unit_scale,
            values,
        })
    }

    /// Builds a grid from single-precision values, as stored on disk or
    /// handed over by a training framework.
    pub fn from_f32(dims: Dims, spacing_mm: [f64; 3], unit_scale: f64, values: &[f32]) -> Result<Self> {
        DoseGrid::new(dims, spacing_mm, unit_scale, values.iter().map(|&v| f64::from(v)).collect())
    }

    /// Uniform grid of `value` Gy at `unit_scale = 1`.
    pub fn filled(dims: Dims, spacing_mm: [f64; 3], value: f64) -> Result<Self> {
        DoseGrid::new(dims, spacing_mm, 1.0, vec![value; dims.len()])
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing_mm(&self) -> [f64; 3] {
        self.spacing_mm
    }

    pub fn unit_scale(&self) -> f64 {
        self.unit_scale
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn voxel_volume_cc(&self) -> f64 {
        voxel_volume_cc(self.spacing_mm)
    }

    /// Dose of voxel `index` in Gy.
    pub fn gy(&self, index: usize) -> f64 {
        self.values[index] * self.unit_scale
    }

    /// Same geometry with new values (validated).
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        DoseGrid::new(self.dims, self.spacing_mm, self.unit_scale, values)
    }

    pub(crate) fn ensure_compatible(&self, other: &DoseGrid) -> Result<()> {
        self.dims.ensure_same(&other.dims)?;
        if self.unit_scale != other.unit_scale {
            return Err(Error::UnitMismatch {
                left: self.unit_scale,
                right: other.unit_scale,
            });
        }
        Ok(())
    }
}

pub fn voxel_volume_cc(spacing_mm: [f64; 3]) -> f64 {
    spacing_mm[0] * spacing_mm[1] * spacing_mm[2] / 1000.0
}

fn validate_doses(values: &[f64]) -> Result<()> {
    for (index, &v) in values.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::NonFiniteDose { index });
        }
        if v < 0.0 {
            return Err(Error::NegativeDose { index, value: v });
        }
    }
    Ok(())
}

/// Re-expresses `grid` in a different unit scale; physical dose is unchanged.
pub fn rescale_dose(grid: &DoseGrid, target_unit_scale: f64) -> Result<DoseGrid> {
    if !(target_unit_scale.is_finite() && target_unit_scale > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "target unit scale must be positive, got {target_unit_scale}"
        )));
    }
    if target_unit_scale == grid.unit_scale {
        return Ok(grid.clone());
    }
    let factor = grid.unit_scale / target_unit_scale;
    let values = grid.values.iter().map(|v| v * factor).collect();
    DoseGrid::new(grid.dims, grid.spacing_mm, target_unit_scale, values)
}

/// One binary ROI on a voxel lattice.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoiMask {
    pub name: String,
    dims: Dims,
    occupancy: Vec<bool>,
}

impl RoiMask {
    pub fn new(name: impl Into<String>, dims: Dims, occupancy: Vec<bool>) -> Result<Self> {
        if occupancy.len() != dims.len() {
            return Err(Error::InvalidArgument(format!(
                "{} mask entries for dims {:?}",
                occupancy.len(),
                dims.0
            )));
        }
        Ok(RoiMask {
            name: name.into(),
            dims,
            occupancy,
        })
    }

    pub fn empty(name: impl Into<String>, dims: Dims) -> Self {
        RoiMask {
            name: name.into(),
            dims,
            occupancy: vec![false; dims.len()],
        }
    }

    /// Mask of all voxels for which `inside(x, y, z)` holds.
    pub fn from_fn(
        name: impl Into<String>,
        dims: Dims,
        inside: impl Fn(usize, usize, usize) -> bool,
    ) -> Self {
        let occupancy = (0..dims.len())
            .map(|i| {
                let (x, y, z) = dims.coords(i);
                inside(x, y, z)
            })
            .collect();
        RoiMask {
            name: name.into(),
            dims,
            occupancy,
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn occupancy(&self) -> &[bool] {
        &self.occupancy
    }

    pub fn occupancy_mut(&mut self) -> &mut [bool] {
        &mut self.occupancy
    }

    pub fn contains(&self, index: usize) -> bool {
        self.occupancy[index]
    }

    pub fn voxel_count(&self) -> usize {
        self.occupancy.iter().filter(|&&b| b).count()
    }

    /// Linear indices of member voxels, ascending.
    pub fn member_indices(&self) -> Vec<usize> {
        self.occupancy
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| b.then_some(i))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VolumeKind {
    Dose,
    Bitmask,
}

impl VolumeKind {
    fn as_str(self) -> &'static str {
        match self {
            VolumeKind::Dose => "dose",
            VolumeKind::Bitmask => "bitmask",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Volume {
    Dose(DoseGrid),
    BitMask(BitMaskVolume),
}

impl Volume {
    pub fn kind(&self) -> VolumeKind {
        match self {
            Volume::Dose(_) => VolumeKind::Dose,
            Volume::BitMask(_) => VolumeKind::Bitmask,
        }
    }

    pub fn into_dose(self) -> Result<DoseGrid> {
        match self {
            Volume::Dose(g) => Ok(g),
            Volume::BitMask(_) => Err(Error::KindMismatch {
                expected: "dose",
                found: "bitmask".into(),
            }),
        }
    }

    pub fn into_bitmask(self) -> Result<BitMaskVolume> {
        match self {
            Volume::BitMask(b) => Ok(b),
            Volume::Dose(_) => Err(Error::KindMismatch {
                expected: "bitmask",
                found: "dose".into(),
            }),
        }
    }
}

impl From<DoseGrid> for Volume {
    fn from(g: DoseGrid) -> Self {
        Volume::Dose(g)
    }
}

impl From<BitMaskVolume> for Volume {
    fn from(b: BitMaskVolume) -> Self {
        Volume::BitMask(b)
    }
}

/// On-disk header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VolumeHeader {
    pub dims: [usize; 3],
    pub spacing_mm: [f64; 3],
    pub dtype: String,
    pub order: String,
    pub endian: String,
    pub unit_scale: f64,
    pub kind: VolumeKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub roi_table: Option<serde_json::Map<String, serde_json::Value>>,
}

/// Header and payload paths for a volume. Accepts `name`, `name.json` or `name.raw`.
pub fn container_paths(path: &Path) -> (PathBuf, PathBuf) {
    let base = match path.extension().and_then(|e| e.to_str()) {
        Some("json") | Some("raw") => path.with_extension(""),
        _ => path.to_path_buf(),
    };
    let mut header = base.clone().into_os_string();
    header.push(".json");
    let mut payload = base.into_os_string();
    payload.push(".raw");
    (header.into(), payload.into())
}

pub fn load_volume(path: impl AsRef<Path>, expected: VolumeKind) -> Result<Volume> {
    let (header_path, payload_path) = container_paths(path.as_ref());
    let text = fs::read_to_string(&header_path).map_err(|e| Error::io(&header_path, e))?;
    let header: VolumeHeader = serde_json::from_str(&text).map_err(|e| Error::Header {
        path: header_path.clone(),
        message: e.to_string(),
    })?;
    let bad = |message: String| Error::Header {
        path: header_path.clone(),
        message,
    };
    if header.order != "zyx" {
        return Err(bad(format!("unsupported order {:?}", header.order)));
    }
    if header.endian != "little" {
        return Err(bad(format!("unsupported endian {:?}", header.endian)));
    }
    let expected_dtype = match header.kind {
        VolumeKind::Dose => "f32",
        VolumeKind::Bitmask => "u32",
    };
    if header.dtype != expected_dtype {
        return Err(Error::KindMismatch {
            expected: expected_dtype,
            found: header.dtype.clone(),
        });
    }
    if header.kind != expected {
        return Err(Error::KindMismatch {
            expected: expected.as_str(),
            found: header.kind.as_str().into(),
        });
    }
    let dims = Dims(header.dims);
    dims.validate()?;

    let bytes = fs::read(&payload_path).map_err(|e| Error::io(&payload_path, e))?;
    let expected_len = dims.len() * 4;
    if bytes.len() != expected_len {
        return Err(Error::PayloadLength {
            path: payload_path,
            expected: expected_len,
            actual: bytes.len(),
        });
    }
    let words = bytes
        .chunks_exact(4)
        .map(|c| [c[0], c[1], c[2], c[3]]);

    match header.kind {
        VolumeKind::Dose => {
            if header.roi_table.is_some() {
                return Err(bad("dose volumes carry no roi_table".into()));
            }
            let values = words.map(|w| f32::from_le_bytes(w) as f64).collect();
            Ok(Volume::Dose(DoseGrid::new(
                dims,
                header.spacing_mm,
                header.unit_scale,
                values,
            )?))
        }
        VolumeKind::Bitmask => {
            let table = header
                .roi_table
                .ok_or_else(|| bad("bitmask volume without roi_table".into()))?;
            let mut entries = Vec::with_capacity(table.len());
            for (name, bit) in table {
                let bit = bit
                    .as_u64()
                    .ok_or_else(|| bad(format!("bit index for {name:?} is not an integer")))?;
                entries.push((bit as usize, name));
            }
            entries.sort();
            let names = entries
                .iter()
                .enumerate()
                .map(|(i, (bit, name))| {
                    if *bit == i + 1 {
                        Ok(name.clone())
                    } else {
                        Err(bad("roi_table bit indices must be contiguous from 1".into()))
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            let words = words.map(u32::from_le_bytes).collect();
            Ok(Volume::BitMask(BitMaskVolume::from_parts(
                dims,
                header.spacing_mm,
                names,
                words,
            )?))
        }
    }
}

pub fn header_for(volume: &Volume) -> VolumeHeader {
    match volume {
        Volume::Dose(g) => VolumeHeader {
            dims: g.dims.0,
            spacing_mm: g.spacing_mm,
            dtype: "f32".into(),
            order: "zyx".into(),
            endian: "little".into(),
            unit_scale: g.unit_scale,
            kind: VolumeKind::Dose,
            roi_table: None,
        },
        Volume::BitMask(b) => {
            let table = b
                .roi_names()
                .iter()
                .enumerate()
                .map(|(i, n)| (n.clone(), serde_json::Value::from(i + 1)))
                .collect();
            VolumeHeader {
                dims: b.dims().0,
                spacing_mm: b.spacing_mm(),
                dtype: "u32".into(),
                order: "zyx".into(),
                endian: "little".into(),
                unit_scale: 1.0,
                kind: VolumeKind::Bitmask,
                roi_table: Some(table),
            }
        }
    }
}

/// Writes header and payload. Both files are written to temporaries and
/// renamed into place, so a failed save leaves no partial output.
pub fn save_volume(volume: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let (header_path, payload_path) = container_paths(path.as_ref());
    let header = serde_json::to_string_pretty(&header_for(volume))?;
    let payload: Vec<u8> = match volume {
        Volume::Dose(g) => g
            .values
            .iter()
            .flat_map(|&v| (v as f32).to_le_bytes())
            .collect(),
        Volume::BitMask(b) => b.words().iter().flat_map(|w| w.to_le_bytes()).collect(),
    };
    write_atomic(&payload_path, &payload)?;
    write_atomic(&header_path, header.as_bytes())
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    let result = fs::File::create(&tmp)
        .and_then(|mut f| f.write_all(bytes).and_then(|_| f.sync_all()))
        .and_then(|_| fs::rename(&tmp, path));
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_raw(dir: &Path, name: &str, header: &str, payload: &[u8]) -> PathBuf {
        let base = dir.join(name);
        fs::write(base.with_extension("json"), header).unwrap();
        fs::write(base.with_extension("raw"), payload).unwrap();
        base
    }

    const HEADER_222: &str = r#"{"dims":[2,2,2],"spacing_mm":[2,2,2],"dtype":"f32",
        "order":"zyx","endian":"little","unit_scale":1.0,"kind":"dose"}"#;

    #[test]
    fn loads_eight_voxel_dose() {
        let dir = tempfile::tempdir().unwrap();
        let payload: Vec<u8> = (0..8).flat_map(|i| (i as f32).to_le_bytes()).collect();
        let base = write_raw(dir.path(), "d", HEADER_222, &payload);
        let g = load_volume(&base, VolumeKind::Dose).unwrap().into_dose().unwrap();
        assert_eq!(g.len(), 8);
        assert_eq!(g.values()[7], 7.0);
    }

    #[test]
    fn short_payload_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let base = write_raw(dir.path(), "d", HEADER_222, &[0u8; 31]);
        let err = load_volume(&base, VolumeKind::Dose).unwrap_err();
        assert!(matches!(err, Error::PayloadLength { expected: 32, actual: 31, .. }));
    }

    #[test]
    fn nan_reports_first_offending_voxel() {
        let dir = tempfile::tempdir().unwrap();
        let mut vals = [1.0f32; 8];
        vals[5] = f32::NAN;
        vals[6] = f32::NAN;
        let payload: Vec<u8> = vals.iter().flat_map(|v| v.to_le_bytes()).collect();
        let base = write_raw(dir.path(), "d", HEADER_222, &payload);
        let err = load_volume(&base, VolumeKind::Dose).unwrap_err();
        assert!(matches!(err, Error::NonFiniteDose { index: 5 }), "{err}");
    }

    #[test]
    fn negative_dose_and_kind_mismatch_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut vals = [1.0f32; 8];
        vals[2] = -0.5;
        let payload: Vec<u8> = vals.iter().flat_map(|v| v.to_le_bytes()).collect();
        let base = write_raw(dir.path(), "d", HEADER_222, &payload);
        assert!(matches!(
            load_volume(&base, VolumeKind::Dose),
            Err(Error::NegativeDose { index: 2, .. })
        ));
        assert!(matches!(
            load_volume(&base, VolumeKind::Bitmask),
            Err(Error::KindMismatch { .. })
        ));
    }

    #[test]
    fn missing_file() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_volume(dir.path().join("nope"), VolumeKind::Dose),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn zero_grid_roundtrip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let g = DoseGrid::filled(Dims::cube(4), [2.0; 3], 0.0).unwrap();
        let p = dir.path().join("zero");
        save_volume(&g.clone().into(), &p).unwrap();
        let first = (fs::read(p.with_extension("json")).unwrap(), fs::read(p.with_extension("raw")).unwrap());
        let back = load_volume(&p, VolumeKind::Dose).unwrap();
        save_volume(&back, &p).unwrap();
        let second = (fs::read(p.with_extension("json")).unwrap(), fs::read(p.with_extension("raw")).unwrap());
        assert_eq!(first, second);
        assert_eq!(back.into_dose().unwrap(), g);
    }

    #[test]
    fn rescale_examples() {
        let dims = Dims::new(1, 1, 1);
        let g = DoseGrid::new(dims, [2.0; 3], 1.0, vec![70.0]).unwrap();
        let n = rescale_dose(&g, 70.0).unwrap();
        assert_eq!(n.values(), &[1.0]);
        assert_eq!(n.unit_scale(), 70.0);
        assert_eq!(rescale_dose(&g, 1.0).unwrap(), g);

        let h = DoseGrid::new(dims, [2.0; 3], 70.0, vec![0.5]).unwrap();
        assert_eq!(rescale_dose(&h, 1.0).unwrap().values(), &[35.0]);
        assert!(rescale_dose(&h, 0.0).is_err());
        assert!(rescale_dose(&h, -3.0).is_err());
    }

    #[test]
    fn voxel_volume_of_two_mm_grid() {
        assert_eq!(voxel_volume_cc([2.0, 2.0, 2.0]), 0.008);
    }

    #[test]
    fn container_paths_strip_known_extensions() {
        let (h, p) = container_paths(Path::new("/x/dose.json"));
        assert_eq!(h, Path::new("/x/dose.json"));
        assert_eq!(p, Path::new("/x/dose.raw"));
        let (h, _) = container_paths(Path::new("/x/case.v2"));
        assert_eq!(h, Path::new("/x/case.v2.json"));
    }
}
