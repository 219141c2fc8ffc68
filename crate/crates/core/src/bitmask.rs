//! Lossless packing of up to 32 overlapping ROI masks into one `u32` per voxel.
//!
//! ROI `i` (1-based, in table order) occupies bit `i - 1`. Lattice-exact
//! voxel permutations act on the packed words directly, transforming every
//! ROI at once.

use std::fmt;
use std::ops::Deref;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::volume::{Dims, RoiMask};

/// Word width; the hard limit on ROIs per volume.
pub const MAX_ROIS: usize = 32;

/// Live/peak accounting of decoded masks obtained through
/// [`BitMaskVolume::decode_tracked`].
#[derive(Debug, Default)]
pub struct Residency {
    live: AtomicUsize,
    peak: AtomicUsize,
    total: AtomicUsize,
}

impl Residency {
    fn acquire(&self) {
        let now = self.live.fetch_add(1, Ordering::SeqCst) + 1;
        self.peak.fetch_max(now, Ordering::SeqCst);
        self.total.fetch_add(1, Ordering::SeqCst);
    }

    fn release(&self) {
        self.live.fetch_sub(1, Ordering::SeqCst);
    }

    pub fn live(&self) -> usize {
        self.live.load(Ordering::SeqCst)
    }

    /// Largest number of decoded masks alive at the same time.
    pub fn peak(&self) -> usize {
        self.peak.load(Ordering::SeqCst)
    }

    /// Number of tracked decodes so far.
    pub fn total(&self) -> usize {
        self.total.load(Ordering::SeqCst)
    }

    pub fn reset(&self) {
        self.peak.store(self.live(), Ordering::SeqCst);
        self.total.store(0, Ordering::SeqCst);
    }
}

/// A decoded mask that counts against the owning volume's [`Residency`]
/// until dropped.
pub struct DecodedMask<'a> {
    mask: RoiMask,
    residency: &'a Residency,
}

impl Deref for DecodedMask<'_> {
    type Target = RoiMask;

    fn deref(&self) -> &RoiMask {
        &self.mask
    }
}

impl Drop for DecodedMask<'_> {
    fn drop(&mut self) {
        self.residency.release();
    }
}

/// Selects an ROI by name or by 1-based bit index.
#[derive(Debug, Clone, Copy)]
pub enum RoiSelector<'a> {
    Name(&'a str),
    Bit(usize),
}

impl<'a> From<&'a str> for RoiSelector<'a> {
    fn from(name: &'a str) -> Self {
        RoiSelector::Name(name)
    }
}

impl<'a> From<&'a String> for RoiSelector<'a> {
    fn from(name: &'a String) -> Self {
        RoiSelector::Name(name)
    }
}

impl From<usize> for RoiSelector<'_> {
    fn from(bit: usize) -> Self {
        RoiSelector::Bit(bit)
    }
}

pub struct BitMaskVolume {
    dims: Dims,
    spacing_mm: [f64; 3],
    names: Vec<String>,
    words: Vec<u32>,
    residency: Arc<Residency>,
}

impl fmt::Debug for BitMaskVolume {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BitMaskVolume")
            .field("dims", &self.dims)
            .field("spacing_mm", &self.spacing_mm)
            .field("roi_table", &self.names)
            .finish_non_exhaustive()
    }
}

impl Clone for BitMaskVolume {
    fn clone(&self) -> Self {
        BitMaskVolume {
            dims: self.dims,
            spacing_mm: self.spacing_mm,
            names: self.names.clone(),
            words: self.words.clone(),
            residency: Arc::default(),
        }
    }
}

impl PartialEq for BitMaskVolume {
    fn eq(&self, other: &Self) -> bool {
        self.dims == other.dims
            && self.spacing_mm == other.spacing_mm
            && self.names == other.names
            && self.words == other.words
    }
}

fn used_bits(count: usize) -> u32 {
    if count >= 32 {
        u32::MAX
    } else {
        (1u32 << count) - 1
    }
}

fn check_names(names: &[String]) -> Result<()> {
    if names.len() > MAX_ROIS {
        return Err(Error::TooManyRois { count: names.len() });
    }
    for (i, n) in names.iter().enumerate() {
        if names[..i].contains(n) {
            return Err(Error::DuplicateRoi(n.clone()));
        }
    }
    Ok(())
}

impl BitMaskVolume {
    /// Assembles a volume from raw words, checking table and bit hygiene.
    pub fn from_parts(
        dims: Dims,
        spacing_mm: [f64; 3],
        names: Vec<String>,
        words: Vec<u32>,
    ) -> Result<Self> {
        check_names(&names)?;
        if words.len() != dims.len() {
            return Err(Error::InvalidArgument(format!(
                "{} words for dims {:?}",
                words.len(),
                dims.0
            )));
        }
        let stray = !used_bits(names.len());
        if let Some(i) = words.iter().position(|w| w & stray != 0) {
            return Err(Error::InvalidArgument(format!(
                "word {} at voxel {i} sets bits above the {} table entries",
                words[i],
                names.len()
            )));
        }
        Ok(BitMaskVolume {
            dims,
            spacing_mm,
            names,
            words,
            residency: Arc::default(),
        })
    }

    pub fn with_spacing(mut self, spacing_mm: [f64; 3]) -> Self {
        self.spacing_mm = spacing_mm;
        self
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing_mm(&self) -> [f64; 3] {
        self.spacing_mm
    }

    pub fn words(&self) -> &[u32] {
        &self.words
    }

    /// ROI names in bit order (entry `i` is bit index `i + 1`).
    pub fn roi_names(&self) -> &[String] {
        &self.names
    }

    pub fn roi_count(&self) -> usize {
        self.names.len()
    }

    pub fn residency(&self) -> &Residency {
        &self.residency
    }

    /// 1-based bit index of `roi`.
    pub fn bit_index<'a>(&self, roi: impl Into<RoiSelector<'a>>) -> Result<usize> {
        match roi.into() {
            RoiSelector::Name(name) => self
                .names
                .iter()
                .position(|n| n == name)
                .map(|p| p + 1)
                .ok_or_else(|| Error::UnknownRoi(name.to_string())),
            RoiSelector::Bit(bit) => {
                if bit == 0 || bit > self.names.len() {
                    Err(Error::BitOutOfRange {
                        index: bit,
                        count: self.names.len(),
                    })
                } else {
                    Ok(bit)
                }
            }
        }
    }

    /// Binary mask of one ROI: voxel set iff `word & (1 << (i - 1)) != 0`.
    pub fn decode<'a>(&self, roi: impl Into<RoiSelector<'a>>) -> Result<RoiMask> {
        let bit = self.bit_index(roi)?;
        let probe = 1u32 << (bit - 1);
        let mut occupancy = vec![false; self.words.len()];
        par::for_each_chunk_mut(&mut occupancy, par::CHUNK, |c, out| {
            let words = &self.words[c * par::CHUNK..];
            for (o, w) in out.iter_mut().zip(words) {
                *o = w & probe != 0;
            }
        });
        RoiMask::new(self.names[bit - 1].clone(), self.dims, occupancy)
    }

    /// Like [`decode`](Self::decode) but registered with the residency
    /// counter until the returned guard is dropped.
    pub fn decode_tracked<'a>(&self, roi: impl Into<RoiSelector<'a>>) -> Result<DecodedMask<'_>> {
        let mask = self.decode(roi)?;
        self.residency.acquire();
        Ok(DecodedMask {
            mask,
            residency: &self.residency,
        })
    }

    pub fn decode_all(&self) -> Vec<RoiMask> {
        (1..=self.names.len())
            .map(|bit| self.decode(bit).expect("bit in table range"))
            .collect()
    }

    /// Popcount of one ROI bit across all words.
    pub fn roi_voxel_count<'a>(&self, roi: impl Into<RoiSelector<'a>>) -> Result<usize> {
        let probe = 1u32 << (self.bit_index(roi)? - 1);
        let n = self.words.len();
        let count = par::sum_range(n.div_ceil(par::CHUNK), |c| {
            let start = c * par::CHUNK;
            let end = (start + par::CHUNK).min(n);
            self.words[start..end].iter().filter(|&&w| w & probe != 0).count() as f64
        });
        Ok(count as usize)
    }

    /// Transforms every ROI at once by permuting the packed words.
    pub fn apply_permutation(&self, t: &VoxelPermutation) -> Result<BitMaskVolume> {
        let words = t.apply(&self.words, self.dims)?;
        Ok(BitMaskVolume {
            dims: self.dims,
            spacing_mm: self.spacing_mm,
            names: self.names.clone(),
            words,
            residency: Arc::default(),
        })
    }
}

/// Packs `masks` in order: mask `i` (0-based) sets bit `i`.
pub fn encode(masks: &[RoiMask]) -> Result<BitMaskVolume> {
    let first = masks
        .first()
        .ok_or_else(|| Error::InvalidArgument("encode needs at least one mask".into()))?;
    let dims = first.dims();
    for m in masks {
        dims.ensure_same(&m.dims())?;
    }
    let names: Vec<String> = masks.iter().map(|m| m.name.clone()).collect();
    check_names(&names)?;

    let mut words = vec![0u32; dims.len()];
    par::for_each_chunk_mut(&mut words, par::CHUNK, |c, out| {
        let base = c * par::CHUNK;
        for (bit, m) in masks.iter().enumerate() {
            let occ = &m.occupancy()[base..base + out.len()];
            for (w, &s) in out.iter_mut().zip(occ) {
                *w |= (s as u32) << bit;
            }
        }
    });
    BitMaskVolume::from_parts(dims, [1.0; 3], names, words)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    fn idx(self) -> usize {
        match self {
            Axis::X => 0,
            Axis::Y => 1,
            Axis::Z => 2,
        }
    }
}

/// Plane of a quarter-turn rotation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Plane {
    Xy,
    Xz,
    Yz,
}

impl Plane {
    fn axes(self) -> (usize, usize) {
        match self {
            Plane::Xy => (0, 1),
            Plane::Xz => (0, 2),
            Plane::Yz => (1, 2),
        }
    }

    fn label(self) -> &'static str {
        match self {
            Plane::Xy => "xy",
            Plane::Xz => "xz",
            Plane::Yz => "yz",
        }
    }
}

/// Lattice-exact voxel transforms. Flips and rotations are bijections;
/// translations shift by whole voxels and zero-fill what enters the grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum VoxelPermutation {
    Identity,
    Flip { axis: Axis },
    Rotate90 { plane: Plane, quarter_turns: u8 },
    Translate { shift: [i64; 3] },
    /// Applied left to right.
    Compose { steps: Vec<VoxelPermutation> },
}

#[derive(Debug, Clone, Copy)]
enum Step {
    Flip(usize),
    Rotate { a: usize, b: usize, turns: u8 },
    Translate([i64; 3]),
}

impl VoxelPermutation {
    pub fn flip(axis: Axis) -> Self {
        VoxelPermutation::Flip { axis }
    }

    pub fn rotate(plane: Plane, quarter_turns: u8) -> Self {
        VoxelPermutation::Rotate90 {
            plane,
            quarter_turns,
        }
    }

    pub fn translate(shift: [i64; 3]) -> Self {
        VoxelPermutation::Translate { shift }
    }

    pub fn then(self, next: VoxelPermutation) -> Self {
        let mut steps = match self {
            VoxelPermutation::Compose { steps } => steps,
            other => vec![other],
        };
        steps.push(next);
        VoxelPermutation::Compose { steps }
    }

    fn flatten(&self, dims: Dims, out: &mut Vec<Step>) -> Result<()> {
        match self {
            VoxelPermutation::Identity => {}
            VoxelPermutation::Flip { axis } => out.push(Step::Flip(axis.idx())),
            VoxelPermutation::Rotate90 {
                plane,
                quarter_turns,
            } => {
                let turns = quarter_turns % 4;
                let (a, b) = plane.axes();
                if turns % 2 == 1 && dims.0[a] != dims.0[b] {
                    return Err(Error::NonConformingRotation {
                        axes: plane.label(),
                        dims: dims.0,
                    });
                }
                if turns != 0 {
                    out.push(Step::Rotate { a, b, turns });
                }
            }
            VoxelPermutation::Translate { shift } => {
                if shift != &[0, 0, 0] {
                    out.push(Step::Translate(*shift));
                }
            }
            VoxelPermutation::Compose { steps } => {
                for s in steps {
                    s.flatten(dims, out)?;
                }
            }
        }
        Ok(())
    }

    /// Validates the transform for `dims` and returns its source-index map.
    fn compile(&self, dims: Dims) -> Result<Compiled> {
        let mut steps = Vec::new();
        self.flatten(dims, &mut steps)?;
        Ok(Compiled { dims, steps })
    }

    /// Applies the transform to any per-voxel array, filling vacated voxels
    /// with `T::default()`.
    pub fn apply<T: Copy + Default + Send + Sync>(&self, src: &[T], dims: Dims) -> Result<Vec<T>> {
        let compiled = self.compile(dims)?;
        let mut dst = vec![T::default(); src.len()];
        compiled.run(src, &mut dst, true);
        Ok(dst)
    }

    /// Single-threaded variant of [`apply`](Self::apply), used as the fair
    /// per-channel baseline in benchmarks.
    pub fn apply_sequential<T: Copy + Default + Send + Sync>(
        &self,
        src: &[T],
        dims: Dims,
    ) -> Result<Vec<T>> {
        let compiled = self.compile(dims)?;
        let mut dst = vec![T::default(); src.len()];
        compiled.run(src, &mut dst, false);
        Ok(dst)
    }

    pub fn apply_to_mask(&self, mask: &RoiMask) -> Result<RoiMask> {
        let occ = self.apply(mask.occupancy(), mask.dims())?;
        RoiMask::new(mask.name.clone(), mask.dims(), occ)
    }
}

struct Compiled {
    dims: Dims,
    steps: Vec<Step>,
}

impl Compiled {
    /// Source coordinates feeding output voxel `p`, or `None` for zero-fill.
    #[inline]
    fn source(&self, mut p: [i64; 3]) -> Option<[i64; 3]> {
        let n = [
            self.dims.0[0] as i64,
            self.dims.0[1] as i64,
            self.dims.0[2] as i64,
        ];
        for step in self.steps.iter().rev() {
            match *step {
                Step::Flip(a) => p[a] = n[a] - 1 - p[a],
                Step::Rotate { a, b, turns: 2 } => {
                    p[a] = n[a] - 1 - p[a];
                    p[b] = n[b] - 1 - p[b];
                }
                Step::Rotate { a, b, turns } => {
                    for _ in 0..turns {
                        let (pa, pb) = (p[a], p[b]);
                        p[a] = pb;
                        p[b] = n[a] - 1 - pa;
                    }
                }
                Step::Translate(s) => {
                    for k in 0..3 {
                        p[k] -= s[k];
                        if p[k] < 0 || p[k] >= n[k] {
                            return None;
                        }
                    }
                }
            }
        }
        Some(p)
    }

    fn run<T: Copy + Default + Send + Sync>(&self, src: &[T], dst: &mut [T], parallel: bool) {
        let dims = self.dims;
        let (nx, ny) = (dims.nx(), dims.ny());
        if self.steps.is_empty() {
            dst.copy_from_slice(src);
            return;
        }
        let slab = |z: usize, out: &mut [T]| {
            for y in 0..ny {
                for x in 0..nx {
                    if let Some(s) = self.source([x as i64, y as i64, z as i64]) {
                        out[y * nx + x] = src[dims.index(s[0] as usize, s[1] as usize, s[2] as usize)];
                    }
                }
            }
        };
        if parallel {
            par::for_each_chunk_mut(dst, nx * ny, slab);
        } else {
            dst.chunks_mut(nx * ny).enumerate().for_each(|(z, out)| slab(z, out));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn masks_3() -> Vec<RoiMask> {
        let dims = Dims::new(3, 2, 2);
        let a = RoiMask::from_fn("A", dims, |x, _, _| x == 0);
        let b = RoiMask::from_fn("B", dims, |_, y, _| y == 1);
        let c = RoiMask::from_fn("C", dims, |x, _, z| x == 0 || z == 1);
        vec![a, b, c]
    }

    #[test]
    fn overlapping_voxel_sets_multiple_bits() {
        let dims = Dims::new(2, 1, 1);
        let r1 = RoiMask::new("r1", dims, vec![true, false]).unwrap();
        let r2 = RoiMask::new("r2", dims, vec![false, false]).unwrap();
        let r3 = RoiMask::new("r3", dims, vec![true, false]).unwrap();
        let b = encode(&[r1, r2, r3]).unwrap();
        assert_eq!(b.words(), &[0b101, 0]);
        assert!(!b.decode(2).unwrap().contains(0));
        assert!(b.decode(3).unwrap().contains(0));
    }

    #[test]
    fn decode_all_inverts_encode() {
        let masks = masks_3();
        let b = encode(&masks).unwrap();
        assert_eq!(b.decode_all(), masks);
        let blank = BitMaskVolume::from_parts(Dims::cube(2), [1.0; 3], vec!["a".into(), "b".into()], vec![0; 8]).unwrap();
        assert!(blank.decode_all().iter().all(|m| m.voxel_count() == 0));
    }

    #[test]
    fn encode_errors() {
        let dims = Dims::cube(2);
        let many: Vec<_> = (0..33).map(|i| RoiMask::empty(format!("r{i}"), dims)).collect();
        assert!(matches!(encode(&many), Err(Error::TooManyRois { count: 33 })));
        let dup = vec![RoiMask::empty("a", dims), RoiMask::empty("a", dims)];
        assert!(matches!(encode(&dup), Err(Error::DuplicateRoi(_))));
        let mixed = vec![RoiMask::empty("a", dims), RoiMask::empty("b", Dims::cube(3))];
        assert!(matches!(encode(&mixed), Err(Error::DimsMismatch { .. })));
    }

    #[test]
    fn thirty_two_rois_use_the_top_bit() {
        let dims = Dims::new(1, 1, 1);
        let all: Vec<_> = (0..32)
            .map(|i| RoiMask::new(format!("r{i}"), dims, vec![true]).unwrap())
            .collect();
        let b = encode(&all).unwrap();
        assert_eq!(b.words(), &[u32::MAX]);
        assert!(b.decode(32).unwrap().contains(0));
    }

    #[test]
    fn decode_errors() {
        let b = encode(&masks_3()).unwrap();
        assert!(matches!(b.decode("Unknown"), Err(Error::UnknownRoi(_))));
        assert!(matches!(b.decode(0), Err(Error::BitOutOfRange { .. })));
        assert!(matches!(b.decode(4), Err(Error::BitOutOfRange { .. })));
    }

    #[test]
    fn stray_bits_rejected() {
        let r = BitMaskVolume::from_parts(Dims::new(1, 1, 1), [1.0; 3], vec!["a".into()], vec![0b10]);
        assert!(r.is_err());
    }

    #[test]
    fn voxel_counts() {
        let dims = Dims::cube(3);
        let zero = BitMaskVolume::from_parts(dims, [1.0; 3], vec!["a".into()], vec![0; 27]).unwrap();
        assert_eq!(zero.roi_voxel_count("a").unwrap(), 0);
        let mut words = vec![0; 27];
        words[13] = 1;
        let one = BitMaskVolume::from_parts(dims, [1.0; 3], vec!["a".into()], words).unwrap();
        assert_eq!(one.roi_voxel_count("a").unwrap(), 1);
        assert!(one.roi_voxel_count("b").is_err());
    }

    #[test]
    fn identity_and_double_flip() {
        let b = encode(&masks_3()).unwrap();
        assert_eq!(b.apply_permutation(&VoxelPermutation::Identity).unwrap(), b);
        let f = VoxelPermutation::flip(Axis::X);
        let twice = b.apply_permutation(&f).unwrap().apply_permutation(&f).unwrap();
        assert_eq!(twice, b);
        assert_ne!(b.apply_permutation(&f).unwrap(), b);
    }

    #[test]
    fn four_quarter_turns_are_identity() {
        let dims = Dims::new(3, 3, 2);
        let src: Vec<u32> = (0..dims.len() as u32).collect();
        let r = VoxelPermutation::rotate(Plane::Xy, 1);
        let mut cur = src.clone();
        for _ in 0..4 {
            cur = r.apply(&cur, dims).unwrap();
        }
        assert_eq!(cur, src);
        let once = r.apply(&src, dims).unwrap();
        let mut sorted = once.clone();
        sorted.sort();
        assert_eq!(sorted, src, "rotation must be a bijection");
    }

    #[test]
    fn rotation_on_non_square_plane_is_rejected() {
        let r = VoxelPermutation::rotate(Plane::Xz, 1);
        let err = r.apply(&[0u32; 12], Dims::new(3, 2, 2)).unwrap_err();
        assert!(matches!(err, Error::NonConformingRotation { .. }));
        // half turns are fine on any shape
        assert!(VoxelPermutation::rotate(Plane::Xz, 2).apply(&[0u32; 12], Dims::new(3, 2, 2)).is_ok());
    }

    #[test]
    fn translation_zero_fills() {
        let dims = Dims::new(3, 1, 1);
        let out = VoxelPermutation::translate([1, 0, 0]).apply(&[1u32, 2, 3], dims).unwrap();
        assert_eq!(out, vec![0, 1, 2]);
        let out = VoxelPermutation::translate([-2, 0, 0]).apply(&[1u32, 2, 3], dims).unwrap();
        assert_eq!(out, vec![3, 0, 0]);
    }

    #[test]
    fn residency_tracks_peak() {
        let b = encode(&masks_3()).unwrap();
        {
            let _a = b.decode_tracked("A").unwrap();
            let _c = b.decode_tracked("C").unwrap();
            assert_eq!(b.residency().live(), 2);
        }
        assert_eq!(b.residency().live(), 0);
        assert_eq!(b.residency().peak(), 2);
        b.residency().reset();
        drop(b.decode_tracked("B").unwrap());
        assert_eq!(b.residency().peak(), 1);
        assert_eq!(b.residency().total(), 1);
    }
}
