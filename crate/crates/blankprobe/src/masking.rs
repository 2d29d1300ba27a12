//! Binary patch-structured masks, their complements, and progressive
//! non-overlapping mask sequences.
//!
//! A mask stores one byte per pixel: 1 = kept, 0 = masked. Masked regions
//! are unions of disjoint p x p patches aligned to a p-grid. Masked pixels
//! render as 0, the background value of [0,1]-normalized digit data; the
//! fill value is a config knob at the probe layer, not here.

use std::fs;
use std::path::Path;

use serde::ser::SerializeStruct;
use serde::{Serialize, Serializer};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

const BITSET_MAGIC: &[u8; 4] = b"BPMK";

/// Binary per-pixel mask with patch structure.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    patch: usize,
    /// 1 = kept, 0 = masked.
    field: Vec<u8>,
}

impl Mask {
    /// Build from an explicit field, validating the patch alignment
    /// invariant: zeros must tile exactly into p x p blocks on the p-grid.
    pub fn from_field(height: usize, width: usize, patch: usize, field: Vec<u8>) -> Result<Self> {
        if patch == 0 || height % patch != 0 || width % patch != 0 {
            return Err(Error::Config(format!(
                "mask shape {height}x{width} not divisible by patch size {patch}"
            )));
        }
        if field.len() != height * width {
            return Err(Error::Dimension {
                context: "Mask::from_field",
                expected: format!("{} entries", height * width),
                found: format!("{}", field.len()),
            });
        }
        if field.iter().any(|&v| v > 1) {
            return Err(Error::Range("mask field entries must be 0 or 1".into()));
        }
        let mask = Mask {
            height,
            width,
            patch,
            field,
        };
        for py in 0..height / patch {
            for px in 0..width / patch {
                let first = mask.field[py * patch * width + px * patch];
                for (y, x) in mask.patch_pixels(py, px) {
                    if mask.field[y * width + x] != first {
                        return Err(Error::Config(format!(
                            "patch ({py},{px}) mixes kept and masked pixels"
                        )));
                    }
                }
            }
        }
        Ok(mask)
    }

    fn from_masked_patches(
        height: usize,
        width: usize,
        patch: usize,
        masked: &[usize],
    ) -> Self {
        let mut field = vec![1u8; height * width];
        let grid_w = width / patch;
        for &p in masked {
            let (py, px) = (p / grid_w, p % grid_w);
            for y in py * patch..(py + 1) * patch {
                for x in px * patch..(px + 1) * patch {
                    field[y * width + x] = 0;
                }
            }
        }
        Mask {
            height,
            width,
            patch,
            field,
        }
    }

    fn patch_pixels(&self, py: usize, px: usize) -> impl Iterator<Item = (usize, usize)> {
        let p = self.patch;
        (py * p..(py + 1) * p).flat_map(move |y| (px * p..(px + 1) * p).map(move |x| (y, x)))
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn patch(&self) -> usize {
        self.patch
    }

    /// Kept/masked field, row-major; 1 = kept.
    pub fn field(&self) -> &[u8] {
        &self.field
    }

    pub fn masked_pixel_count(&self) -> usize {
        self.field.iter().filter(|&&v| v == 0).count()
    }

    /// Fraction of zeroed pixels.
    pub fn ratio(&self) -> f64 {
        self.masked_pixel_count() as f64 / (self.height * self.width) as f64
    }

    /// Flipped field: masked positions become kept and vice versa.
    pub fn complement(&self) -> Mask {
        Mask {
            height: self.height,
            width: self.width,
            patch: self.patch,
            field: self.field.iter().map(|&v| 1 - v).collect(),
        }
    }

    /// The kept/masked field as a [1,H,W] tensor (1.0 = kept), for PGM
    /// rendering and debugging.
    pub fn as_tensor(&self) -> Tensor {
        Tensor::from_parts(
            vec![1, self.height, self.width],
            self.field.iter().map(|&v| v as f32).collect(),
        )
    }

    /// Elementwise product with an image whose trailing dims are (H, W);
    /// kept pixels unchanged, masked pixels exactly 0.
    pub fn apply(&self, image: &Tensor) -> Result<Tensor> {
        let shape = image.shape();
        if shape.len() < 2
            || shape[shape.len() - 2] != self.height
            || shape[shape.len() - 1] != self.width
        {
            return Err(Error::Dimension {
                context: "apply_mask",
                expected: format!("trailing dims {}x{}", self.height, self.width),
                found: format!("{shape:?}"),
            });
        }
        let plane = self.height * self.width;
        let data = image
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| if self.field[i % plane] == 1 { v } else { 0.0 })
            .collect();
        Ok(Tensor::from_parts(shape.to_vec(), data))
    }

    /// Compact bitset serialization: magic, u32 dims, packed kept-bits
    /// (LSB-first).
    pub fn to_bitset_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.field.len() / 8 + 1);
        out.extend_from_slice(BITSET_MAGIC);
        out.extend_from_slice(&(self.height as u32).to_le_bytes());
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        out.extend_from_slice(&(self.patch as u32).to_le_bytes());
        let mut byte = 0u8;
        for (i, &bit) in self.field.iter().enumerate() {
            byte |= bit << (i % 8);
            if i % 8 == 7 {
                out.push(byte);
                byte = 0;
            }
        }
        if self.field.len() % 8 != 0 {
            out.push(byte);
        }
        out
    }

    pub fn from_bitset_bytes(bytes: &[u8]) -> Result<Mask> {
        if bytes.len() < 16 || &bytes[0..4] != BITSET_MAGIC {
            return Err(Error::Format {
                offset: 0,
                message: "not a mask bitset (missing BPMK magic)".into(),
            });
        }
        let dim = |at: usize| {
            u32::from_le_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]]) as usize
        };
        let (height, width, patch) = (dim(4), dim(8), dim(12));
        let n = height * width;
        let expected = 16 + n.div_ceil(8);
        if bytes.len() != expected {
            return Err(Error::Format {
                offset: 16,
                message: format!("bitset holds {} bytes, expected {expected}", bytes.len()),
            });
        }
        let field: Vec<u8> = (0..n)
            .map(|i| (bytes[16 + i / 8] >> (i % 8)) & 1)
            .collect();
        Mask::from_field(height, width, patch, field)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bitset_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Mask> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Mask::from_bitset_bytes(&bytes)
    }
}

impl Serialize for Mask {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let mut s = serializer.serialize_struct("Mask", 4)?;
        s.serialize_field("height", &self.height)?;
        s.serialize_field("width", &self.width)?;
        s.serialize_field("patch", &self.patch)?;
        s.serialize_field("field", &self.field)?;
        s.end()
    }
}

/// Number of patches a ratio maps to on a given grid (round to nearest).
pub fn patches_for_ratio(height: usize, width: usize, patch: usize, eta: f64) -> usize {
    let grid = (height / patch) * (width / patch);
    (eta * grid as f64).round() as usize
}

/// Sample a mask of ratio `eta` with `patch`-sized superpixels: exactly
/// `round(eta * grid)` patches zeroed, chosen uniformly without replacement.
pub fn sample_uniform_mask(
    height: usize,
    width: usize,
    eta: f64,
    patch: usize,
    seed: u64,
) -> Result<Mask> {
    if patch == 0 || height % patch != 0 || width % patch != 0 {
        return Err(Error::Config(format!(
            "shape {height}x{width} not divisible by patch size {patch}"
        )));
    }
    if !(eta > 0.0 && eta < 1.0) {
        return Err(Error::Range(format!(
            "masking ratio must lie in (0, 1), got {eta}"
        )));
    }
    let grid = (height / patch) * (width / patch);
    let zeroed = patches_for_ratio(height, width, patch, eta);
    let mut rng = Rng::new(seed);
    let masked = rng.sample_distinct(grid, zeroed);
    Ok(Mask::from_masked_patches(height, width, patch, &masked))
}

/// Ordered non-overlapping masks jointly covering every pixel.
#[derive(Debug, Clone)]
pub struct MaskSequence {
    masks: Vec<Mask>,
}

impl MaskSequence {
    pub fn masks(&self) -> &[Mask] {
        &self.masks
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }
}

/// Randomly partition the patch grid into `k` equal groups; mask `i` zeroes
/// group `i`, so each mask has ratio `1/k` and the union masks everything.
pub fn make_progressive_sequence(
    height: usize,
    width: usize,
    k: usize,
    patch: usize,
    seed: u64,
) -> Result<MaskSequence> {
    if patch == 0 || height % patch != 0 || width % patch != 0 {
        return Err(Error::Config(format!(
            "shape {height}x{width} not divisible by patch size {patch}"
        )));
    }
    if k == 0 {
        return Err(Error::Config("sequence length k must be >= 1".into()));
    }
    let grid = (height / patch) * (width / patch);
    if grid % k != 0 {
        return Err(Error::Config(format!(
            "patch grid of {grid} does not divide into {k} equal groups"
        )));
    }
    let mut order: Vec<usize> = (0..grid).collect();
    Rng::new(seed).shuffle(&mut order);
    let group = grid / k;
    let masks = order
        .chunks(group)
        .map(|chunk| Mask::from_masked_patches(height, width, patch, chunk))
        .collect();
    Ok(MaskSequence { masks })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ratio_is_exact_at_patch_granularity() {
        let mask = sample_uniform_mask(28, 28, 0.25, 2, 1).unwrap();
        // 196 patches, 49 zeroed, 196 masked pixels.
        assert_eq!(mask.masked_pixel_count(), 196);
        assert_eq!(mask.ratio(), 0.25);
    }

    #[test]
    fn same_seed_same_mask() {
        let a = sample_uniform_mask(28, 28, 0.25, 2, 42).unwrap();
        let b = sample_uniform_mask(28, 28, 0.25, 2, 42).unwrap();
        assert_eq!(a, b);
        let c = sample_uniform_mask(28, 28, 0.25, 2, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn rejects_indivisible_shape_and_bad_ratio() {
        assert!(matches!(
            sample_uniform_mask(28, 28, 0.25, 3, 0),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            sample_uniform_mask(28, 28, 0.0, 2, 0),
            Err(Error::Range(_))
        ));
        assert!(matches!(
            sample_uniform_mask(28, 28, 1.0, 2, 0),
            Err(Error::Range(_))
        ));
    }

    #[test]
    fn per_patch_zero_frequency_approximates_eta() {
        // Monte-Carlo: each patch's chance of being masked is eta; with
        // n draws the count is Binomial(n, eta). Checking the max over all
        // 196 patches needs more headroom than a single bin, so gate each
        // at 4.5 standard errors and the average at 3.
        let (n, eta) = (10_000usize, 0.25f64);
        let mut zero_counts = vec![0usize; 196];
        for seed in 0..n {
            let mask = sample_uniform_mask(28, 28, eta, 2, seed as u64).unwrap();
            for py in 0..14 {
                for px in 0..14 {
                    if mask.field()[py * 2 * 28 + px * 2] == 0 {
                        zero_counts[py * 14 + px] += 1;
                    }
                }
            }
        }
        let se = (eta * (1.0 - eta) / n as f64).sqrt();
        let mut sum = 0.0;
        for &count in &zero_counts {
            let freq = count as f64 / n as f64;
            sum += freq;
            assert!(
                (freq - eta).abs() <= 4.5 * se,
                "patch frequency {freq} strays from {eta} (se {se})"
            );
        }
        // Exactly 49 of 196 patches are zeroed per draw, so the average
        // frequency is eta by construction.
        assert!((sum / 196.0 - eta).abs() < 1e-12);
    }

    #[test]
    fn apply_identity_and_zero() {
        let image = Tensor::new(vec![1, 4, 4], (0..16).map(|v| v as f32 / 16.0).collect()).unwrap();
        let all_kept = Mask::from_field(4, 4, 2, vec![1; 16]).unwrap();
        assert_eq!(all_kept.apply(&image).unwrap().data(), image.data());
        let all_masked = all_kept.complement();
        assert!(all_masked.apply(&image).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn apply_matches_elementwise_product() {
        let mask = sample_uniform_mask(8, 8, 0.5, 2, 3).unwrap();
        let image =
            Tensor::new(vec![1, 8, 8], (0..64).map(|v| (v as f32).sin().abs()).collect()).unwrap();
        let masked = mask.apply(&image).unwrap();
        for i in 0..64 {
            assert_eq!(masked.data()[i], image.data()[i] * mask.field()[i] as f32);
        }
    }

    #[test]
    fn apply_rejects_shape_mismatch() {
        let mask = sample_uniform_mask(8, 8, 0.5, 2, 3).unwrap();
        let image = Tensor::zeros(&[1, 4, 4]);
        assert!(matches!(mask.apply(&image), Err(Error::Dimension { .. })));
    }

    #[test]
    fn complement_is_an_involution_and_disjoint() {
        let mask = sample_uniform_mask(28, 28, 0.25, 2, 9).unwrap();
        let comp = mask.complement();
        assert!((comp.ratio() - 0.75).abs() < 1e-12);
        assert_eq!(comp.complement(), mask);
        for (a, b) in mask.field().iter().zip(comp.field()) {
            assert_eq!(a & b, 0);
        }
    }

    #[test]
    fn mask_plus_complement_reconstructs_image() {
        let mask = sample_uniform_mask(28, 28, 0.25, 2, 17).unwrap();
        let image = Tensor::new(
            vec![1, 28, 28],
            (0..784).map(|v| (v % 256) as f32 / 255.0).collect(),
        )
        .unwrap();
        let kept = mask.apply(&image).unwrap();
        let masked_part = mask.complement().apply(&image).unwrap();
        let sum = kept.add(&masked_part).unwrap();
        assert_eq!(sum.data(), image.data());
    }

    #[test]
    fn progressive_sequence_partitions_all_pixels() {
        let seq = make_progressive_sequence(28, 28, 4, 2, 5).unwrap();
        assert_eq!(seq.len(), 4);
        let mut masked_indicator = vec![0u32; 784];
        for mask in seq.masks() {
            assert_eq!(mask.masked_pixel_count(), 196);
            for (i, &v) in mask.field().iter().enumerate() {
                if v == 0 {
                    masked_indicator[i] += 1;
                }
            }
        }
        assert!(masked_indicator.iter().all(|&c| c == 1));
    }

    #[test]
    fn progressive_k1_masks_everything() {
        let seq = make_progressive_sequence(28, 28, 1, 2, 0).unwrap();
        assert_eq!(seq.len(), 1);
        assert_eq!(seq.masks()[0].masked_pixel_count(), 784);
    }

    #[test]
    fn progressive_rejects_indivisible_k() {
        assert!(matches!(
            make_progressive_sequence(28, 28, 3, 2, 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn xor_of_sequence_fields_is_all_ones() {
        let seq = make_progressive_sequence(28, 28, 7, 2, 11).unwrap();
        let mut xor = vec![0u8; 784];
        for mask in seq.masks() {
            for (acc, &kept) in xor.iter_mut().zip(mask.field()) {
                *acc ^= 1 - kept;
            }
        }
        assert!(xor.iter().all(|&v| v == 1));
    }

    #[test]
    fn from_field_rejects_partial_patches() {
        let mut field = vec![1u8; 16];
        field[0] = 0; // half of a 2x2 patch
        assert!(matches!(
            Mask::from_field(4, 4, 2, field),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn bitset_round_trip() {
        let mask = sample_uniform_mask(28, 28, 0.4, 2, 23).unwrap();
        let bytes = mask.to_bitset_bytes();
        let back = Mask::from_bitset_bytes(&bytes).unwrap();
        assert_eq!(mask, back);
        assert!(matches!(
            Mask::from_bitset_bytes(b"nope"),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn mask_renders_as_pgm() {
        let mask = sample_uniform_mask(28, 28, 0.25, 2, 31).unwrap();
        let bytes = crate::viz::pgm_bytes(&mask.as_tensor(), true).unwrap();
        assert!(bytes.starts_with(b"P5\n28 28\n255\n"));
        let payload = &bytes[b"P5\n28 28\n255\n".len()..];
        for (i, &b) in payload.iter().enumerate() {
            assert_eq!(b, mask.field()[i] * 255);
        }
    }
}
