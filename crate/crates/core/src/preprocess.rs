//! Log normalization, horizon masking and the 21-slice network input.
//!
//! The network sees 21 of the 180 `phi_d` slices. Each retained slice contributes one
//! 90 x 90 image per channel over `(i_theta_h, i_theta_d)`; the images are stacked
//! slice-major, so plane `slice * 3 + channel` of the 63-plane input holds that channel
//! of that slice.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::merl_io::{bin_above_horizon, MerlBrdf, MERL_SCALES, N_PHI_D, N_THETA_D, N_THETA_H};

pub const N_SLICES: usize = 21;
pub const N_PLANES: usize = 3 * N_SLICES;
pub const PLANE_SIZE: usize = N_THETA_H * N_THETA_D;
pub const INPUT_LEN: usize = N_PLANES * PLANE_SIZE;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormConfig {
    pub eps_norm: f64,
    pub scales: [f64; 3],
}

impl Default for NormConfig {
    fn default() -> Self {
        NormConfig {
            eps_norm: 0.01,
            scales: MERL_SCALES,
        }
    }
}

impl NormConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps_norm > 0.0) || self.scales.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::Config(format!(
                "eps_norm and scales must be positive: {self:?}"
            )));
        }
        Ok(())
    }

    #[inline]
    fn log_span(&self) -> f64 {
        (1.0 / self.eps_norm).ln_1p()
    }

    /// Maps a raw stored measurement to the network domain.
    pub fn normalize(&self, rho: f64, channel: usize) -> Result<f64> {
        if !(rho >= 0.0) || !rho.is_finite() {
            return Err(Error::Precondition(format!(
                "normalize requires a finite rho >= 0, got {rho}"
            )));
        }
        Ok(self.normalize_unchecked(rho, channel))
    }

    #[inline]
    pub fn normalize_unchecked(&self, rho: f64, channel: usize) -> f64 {
        // ln(rho*s + eps) - ln(eps) == ln(1 + rho*s/eps)
        (rho * self.scales[channel] / self.eps_norm).ln_1p() / self.log_span()
    }

    /// Inverse of [`NormConfig::normalize`], clamped below at zero.
    #[inline]
    pub fn denormalize(&self, rho_hat: f64, channel: usize) -> f64 {
        let v = self.eps_norm * (rho_hat * self.log_span()).exp_m1() / self.scales[channel];
        v.max(0.0)
    }
}

/// The retained `phi_d` indices: `round(j * 179 / 20)` for `j = 0..=20`.
pub fn select_slices() -> Vec<usize> {
    (0..N_SLICES)
        .map(|j| ((j * (N_PHI_D - 1)) as f64 / (N_SLICES - 1) as f64).round() as usize)
        .collect()
}

/// Validity per `(slice, i_theta_h, i_theta_d)` of the reduced table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValidityMask {
    bits: Vec<bool>,
}

impl ValidityMask {
    pub fn from_bits(bits: Vec<bool>) -> Result<Self> {
        if bits.len() != N_SLICES * PLANE_SIZE {
            return Err(Error::Precondition(format!(
                "mask must have {} entries, got {}",
                N_SLICES * PLANE_SIZE,
                bits.len()
            )));
        }
        Ok(ValidityMask { bits })
    }

    pub fn all_valid() -> Self {
        ValidityMask {
            bits: vec![true; N_SLICES * PLANE_SIZE],
        }
    }

    /// Horizon-only mask.
    pub fn horizon() -> Self {
        let slices = select_slices();
        let mut bits = vec![false; N_SLICES * PLANE_SIZE];
        for (s, &ip) in slices.iter().enumerate() {
            for ih in 0..N_THETA_H {
                for id in 0..N_THETA_D {
                    bits[(s * N_THETA_H + ih) * N_THETA_D + id] = bin_above_horizon(ih, id, ip);
                }
            }
        }
        ValidityMask { bits }
    }

    #[inline]
    pub fn is_valid(&self, slice: usize, ih: usize, id: usize) -> bool {
        self.bits[(slice * N_THETA_H + ih) * N_THETA_D + id]
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count_valid(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    /// Per-entry mask over the 63 x 90 x 90 network layout.
    pub fn expand_to_entries(&self) -> Vec<bool> {
        let mut out = Vec::with_capacity(INPUT_LEN);
        for s in 0..N_SLICES {
            let plane = &self.bits[s * PLANE_SIZE..(s + 1) * PLANE_SIZE];
            for _ in 0..3 {
                out.extend_from_slice(plane);
            }
        }
        out
    }
}

/// Normalized, masked, slice-reduced input (63 x 90 x 90).
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkInput {
    pub name: String,
    pub values: Vec<f32>,
    pub mask: ValidityMask,
    pub slice_indices: Vec<usize>,
}

#[inline]
pub fn plane_index(slice: usize, channel: usize) -> usize {
    slice * 3 + channel
}

#[inline]
pub fn entry_index(slice: usize, channel: usize, ih: usize, id: usize) -> usize {
    (plane_index(slice, channel) * N_THETA_H + ih) * N_THETA_D + id
}

pub fn to_network_input(brdf: &MerlBrdf, norm: &NormConfig) -> Result<NetworkInput> {
    brdf.validate()?;
    let slice_indices = select_slices();
    let mut values = vec![0.0f32; INPUT_LEN];
    let mut bits = vec![false; N_SLICES * PLANE_SIZE];
    for (s, &ip) in slice_indices.iter().enumerate() {
        for ih in 0..N_THETA_H {
            for id in 0..N_THETA_D {
                let raw = [0, 1, 2].map(|c| brdf.get(c, ih, id, ip));
                let valid = bin_above_horizon(ih, id, ip)
                    && raw.iter().all(|v| *v >= 0.0 && v.is_finite());
                bits[(s * N_THETA_H + ih) * N_THETA_D + id] = valid;
                if valid {
                    for c in 0..3 {
                        values[entry_index(s, c, ih, id)] =
                            norm.normalize_unchecked(raw[c], c) as f32;
                    }
                }
            }
        }
    }
    Ok(NetworkInput {
        name: brdf.name.clone(),
        values,
        mask: ValidityMask { bits },
        slice_indices,
    })
}

/// Raw (denormalized) reflectance on the 21 retained slices, indexed by
/// `[channel][slice][i_theta_h][i_theta_d]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceTable {
    pub values: Vec<f64>,
    pub slice_indices: Vec<usize>,
}

impl SliceTable {
    #[inline]
    pub fn index(slice: usize, channel: usize, ih: usize, id: usize) -> usize {
        ((channel * N_SLICES + slice) * N_THETA_H + ih) * N_THETA_D + id
    }

    #[inline]
    pub fn get(&self, slice: usize, channel: usize, ih: usize, id: usize) -> f64 {
        self.values[Self::index(slice, channel, ih, id)]
    }

    /// Restricts a full table to the retained slices.
    pub fn restrict(brdf: &MerlBrdf) -> Self {
        let slice_indices = select_slices();
        let mut values = vec![0.0; 3 * N_SLICES * PLANE_SIZE];
        for c in 0..3 {
            for (s, &ip) in slice_indices.iter().enumerate() {
                for ih in 0..N_THETA_H {
                    for id in 0..N_THETA_D {
                        values[Self::index(s, c, ih, id)] = brdf.get(c, ih, id, ip);
                    }
                }
            }
        }
        SliceTable {
            values,
            slice_indices,
        }
    }

    /// Denormalizes a 63 x 90 x 90 network-domain array.
    pub fn from_network(values: &[f32], norm: &NormConfig) -> Result<Self> {
        if values.len() != INPUT_LEN {
            return Err(Error::Precondition(format!(
                "network output must have {INPUT_LEN} entries, got {}",
                values.len()
            )));
        }
        let mut out = vec![0.0; 3 * N_SLICES * PLANE_SIZE];
        for s in 0..N_SLICES {
            for c in 0..3 {
                for ih in 0..N_THETA_H {
                    for id in 0..N_THETA_D {
                        out[Self::index(s, c, ih, id)] =
                            norm.denormalize(values[entry_index(s, c, ih, id)] as f64, c);
                    }
                }
            }
        }
        Ok(SliceTable {
            values: out,
            slice_indices: select_slices(),
        })
    }
}

/// Rebuilds all 180 `phi_d` slices by linear interpolation between retained slices.
pub fn expand_slices(reduced: &SliceTable, name: impl Into<String>) -> Result<MerlBrdf> {
    let knots = &reduced.slice_indices;
    if knots.len() != N_SLICES || knots[0] != 0 || knots[N_SLICES - 1] != N_PHI_D - 1 {
        return Err(Error::Precondition(
            "reduced table must carry the 21 retained slices spanning 0..=179".into(),
        ));
    }
    if reduced.values.len() != 3 * N_SLICES * PLANE_SIZE {
        return Err(Error::Precondition("reduced table has wrong length".into()));
    }
    let mut brdf = MerlBrdf::constant(name, 0.0);
    for k in 0..N_SLICES - 1 {
        let (lo, hi) = (knots[k], knots[k + 1]);
        let last = if k == N_SLICES - 2 { hi } else { hi - 1 };
        for ip in lo..=last {
            let exact = if ip == lo {
                Some(k)
            } else if ip == hi {
                Some(k + 1)
            } else {
                None
            };
            let t = (ip - lo) as f64 / (hi - lo) as f64;
            for c in 0..3 {
                for ih in 0..N_THETA_H {
                    for id in 0..N_THETA_D {
                        let v = match exact {
                            Some(s) => reduced.get(s, c, ih, id),
                            None => {
                                let a = reduced.get(k, c, ih, id);
                                let b = reduced.get(k + 1, c, ih, id);
                                (1.0 - t) * a + t * b
                            }
                        };
                        brdf.set(c, ih, id, ip, v);
                    }
                }
            }
        }
    }
    Ok(brdf)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InputSidecar {
    pub name: String,
    pub shape: [usize; 3],
    pub slice_indices: Vec<usize>,
    pub scales: [f64; 3],
    pub eps_norm: f64,
    /// File holding one byte per `(slice, i_theta_h, i_theta_d)` validity flag.
    pub mask_file: String,
}

/// Writes `<stem>.json` (sidecar), `<stem>.f32` (values) and `<stem>.mask`.
pub fn save_network_input(
    input: &NetworkInput,
    norm: &NormConfig,
    dir: impl AsRef<Path>,
) -> Result<PathBuf> {
    let dir = dir.as_ref();
    let stem = &input.name;
    let sidecar = InputSidecar {
        name: input.name.clone(),
        shape: [N_PLANES, N_THETA_H, N_THETA_D],
        slice_indices: input.slice_indices.clone(),
        scales: norm.scales,
        eps_norm: norm.eps_norm,
        mask_file: format!("{stem}.mask"),
    };
    let json_path = dir.join(format!("{stem}.json"));
    serde_json::to_writer_pretty(BufWriter::new(File::create(&json_path)?), &sidecar)?;

    let mut w = BufWriter::new(File::create(dir.join(format!("{stem}.f32")))?);
    for &v in &input.values {
        w.write_f32::<LittleEndian>(v)?;
    }
    w.flush()?;

    let bytes: Vec<u8> = input.mask.bits.iter().map(|b| *b as u8).collect();
    std::fs::write(dir.join(&sidecar.mask_file), bytes)?;
    Ok(json_path)
}

/// Loads an input saved by [`save_network_input`] given its sidecar path.
pub fn load_network_input(sidecar_path: impl AsRef<Path>) -> Result<(NetworkInput, NormConfig)> {
    let sidecar_path = sidecar_path.as_ref();
    let sidecar: InputSidecar =
        serde_json::from_reader(BufReader::new(File::open(sidecar_path)?))?;
    if sidecar.shape != [N_PLANES, N_THETA_H, N_THETA_D] {
        return Err(Error::Format(format!(
            "unexpected input shape {:?}",
            sidecar.shape
        )));
    }
    let dir = sidecar_path.parent().unwrap_or_else(|| Path::new("."));
    let mut values = vec![0.0f32; INPUT_LEN];
    let mut r = BufReader::new(File::open(sidecar_path.with_extension("f32"))?);
    r.read_f32_into::<LittleEndian>(&mut values)?;
    let mut bytes = Vec::new();
    File::open(dir.join(&sidecar.mask_file))?.read_to_end(&mut bytes)?;
    let mask = ValidityMask::from_bits(bytes.iter().map(|b| *b != 0).collect())?;
    let norm = NormConfig {
        eps_norm: sidecar.eps_norm,
        scales: sidecar.scales,
    };
    norm.validate()?;
    Ok((
        NetworkInput {
            name: sidecar.name,
            values,
            mask,
            slice_indices: sidecar.slice_indices,
        },
        norm,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize_fixed_points() {
        let n = NormConfig::default();
        for c in 0..3 {
            assert_eq!(n.normalize(0.0, c).unwrap(), 0.0);
            assert_eq!(n.normalize(1.0 / n.scales[c], c).unwrap(), 1.0);
            assert_eq!(n.denormalize(0.0, c), 0.0);
        }
        assert!((n.denormalize(1.0, 0) - 1500.0).abs() < 1e-9);
        assert!(n.normalize(-1.0, 0).is_err());
        assert!(n.normalize(f64::NAN, 0).is_err());
    }

    #[test]
    fn denormalize_clamps_negative_outputs() {
        let n = NormConfig::default();
        assert_eq!(n.denormalize(-0.05, 1), 0.0);
    }

    #[test]
    fn round_trip_examples() {
        let n = NormConfig::default();
        for rho in [0.1, 1.0, 100.0] {
            for c in 0..3 {
                let back = n.denormalize(n.normalize(rho, c).unwrap(), c);
                assert!(((back - rho) / rho).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn slice_selection() {
        let s = select_slices();
        assert_eq!(s.len(), 21);
        assert_eq!(s[0], 0);
        assert_eq!(s[20], 179);
        assert!(s.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn zero_brdf_gives_zero_input_with_horizon_mask() {
        let brdf = MerlBrdf::constant("zero", 0.0);
        let input = to_network_input(&brdf, &NormConfig::default()).unwrap();
        assert_eq!(input.values.len(), 63 * 90 * 90);
        assert!(input.values.iter().all(|v| *v == 0.0));
        assert_eq!(input.mask, ValidityMask::horizon());
    }

    #[test]
    fn below_horizon_entries_are_masked_zero() {
        let brdf = MerlBrdf::constant("one", 500.0);
        let input = to_network_input(&brdf, &NormConfig::default()).unwrap();
        let mask = input.mask.expand_to_entries();
        let invalid = mask.iter().filter(|m| !**m).count();
        assert!(invalid > 0);
        for (v, m) in input.values.iter().zip(&mask) {
            if *m {
                assert!(*v > 0.0);
            } else {
                assert_eq!(*v, 0.0);
            }
        }
    }

    #[test]
    fn negative_stored_value_masks_entry() {
        let mut brdf = MerlBrdf::constant("one", 500.0);
        brdf.set(1, 10, 10, 0, -1.0);
        let input = to_network_input(&brdf, &NormConfig::default()).unwrap();
        assert!(!input.mask.is_valid(0, 10, 10));
        for c in 0..3 {
            assert_eq!(input.values[entry_index(0, c, 10, 10)], 0.0);
        }
    }

    fn reduced_from_fn(f: impl Fn(usize, usize) -> f64) -> SliceTable {
        let slice_indices = select_slices();
        let mut values = vec![0.0; 3 * N_SLICES * PLANE_SIZE];
        for c in 0..3 {
            for (s, &ip) in slice_indices.iter().enumerate() {
                for ih in 0..N_THETA_H {
                    for id in 0..N_THETA_D {
                        values[SliceTable::index(s, c, ih, id)] = f(ip, c + ih + id);
                    }
                }
            }
        }
        SliceTable {
            values,
            slice_indices,
        }
    }

    #[test]
    fn expand_passes_knots_and_interpolates() {
        let reduced = reduced_from_fn(|ip, k| (ip * ip) as f64 + k as f64);
        let full = expand_slices(&reduced, "x").unwrap();
        for (s, &ip) in reduced.slice_indices.iter().enumerate() {
            assert_eq!(full.get(2, 4, 5, ip), reduced.get(s, 2, 4, 5));
        }
        // knots 90 and 98 are retained; 94 sits exactly midway
        let mid = full.get(0, 3, 3, 94);
        let avg = 0.5 * (full.get(0, 3, 3, 90) + full.get(0, 3, 3, 98));
        assert!((mid - avg).abs() < 1e-9);
    }

    #[test]
    fn expand_constant_neighbors() {
        let reduced = reduced_from_fn(|_, k| k as f64 * 0.5);
        let full = expand_slices(&reduced, "x").unwrap();
        for ip in 0..N_PHI_D {
            assert_eq!(full.get(1, 7, 9, ip), 8.5);
        }
    }

    #[test]
    fn sidecar_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut brdf = MerlBrdf::constant("mat", 123.0);
        brdf.set(0, 1, 1, 0, -1.0);
        let norm = NormConfig::default();
        let input = to_network_input(&brdf, &norm).unwrap();
        let path = save_network_input(&input, &norm, dir.path()).unwrap();
        let (back, norm_back) = load_network_input(path).unwrap();
        assert_eq!(back, input);
        assert_eq!(norm_back, norm);
    }
}
