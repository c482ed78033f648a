//! Relative absolute error between reconstructed and reference reflectance tables.

use serde::Serialize;

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::merl_io::{MerlBrdf, MERL_SCALES, N_THETA_D, N_THETA_H};
use crate::preprocess::{SliceTable, ValidityMask, N_SLICES};
use crate::vae_model::LatentCode;

/// Offset in the denominator of the pointwise variant.
pub const POINTWISE_DELTA: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricReport {
    pub material: String,
    pub rel_ae_ratio: f64,
    pub rel_ae_pointwise: f64,
    pub entries_compared: usize,
}

fn check(reconstructed: &[f64], reference: &[f64], mask: &[bool]) -> Result<()> {
    if reconstructed.len() != reference.len() || reference.len() != mask.len() {
        return Err(Error::Precondition(format!(
            "shape mismatch: {} / {} / {}",
            reconstructed.len(),
            reference.len(),
            mask.len()
        )));
    }
    if !mask.iter().any(|m| *m) {
        return Err(Error::Precondition("mask selects no entries".into()));
    }
    Ok(())
}

/// `sum |rec - ref| / sum |ref|` over valid entries.
pub fn rel_ae(reconstructed: &[f64], reference: &[f64], mask: &[bool]) -> Result<f64> {
    check(reconstructed, reference, mask)?;
    let mut num = 0.0;
    let mut den = 0.0;
    for ((r, t), m) in reconstructed.iter().zip(reference).zip(mask) {
        if *m {
            num += (r - t).abs();
            den += t.abs();
        }
    }
    if den == 0.0 {
        return Err(Error::Undefined("reference is zero on every valid entry".into()));
    }
    Ok(num / den)
}

/// `mean |rec - ref| / (|ref| + delta)` over valid entries.
pub fn rel_ae_pointwise(reconstructed: &[f64], reference: &[f64], mask: &[bool]) -> Result<f64> {
    check(reconstructed, reference, mask)?;
    let mut sum = 0.0;
    let mut n = 0usize;
    for ((r, t), m) in reconstructed.iter().zip(reference).zip(mask) {
        if *m {
            sum += (r - t).abs() / (t.abs() + POINTWISE_DELTA);
            n += 1;
        }
    }
    Ok(sum / n as f64)
}

/// Validity flags in [`SliceTable`] layout (`[channel][slice][theta_h][theta_d]`).
pub fn slice_table_mask(mask: &ValidityMask) -> Vec<bool> {
    let plane = N_THETA_H * N_THETA_D;
    let mut out = Vec::with_capacity(3 * N_SLICES * plane);
    for _ in 0..3 {
        out.extend_from_slice(mask.bits());
    }
    out
}

/// Stored values of a reduced table multiplied by their channel scale.
pub fn to_reflectance(table: &SliceTable) -> Vec<f64> {
    let block = N_SLICES * N_THETA_H * N_THETA_D;
    table
        .values
        .iter()
        .enumerate()
        .map(|(i, v)| v * MERL_SCALES[i / block])
        .collect()
}

/// Compares two reduced tables in reflectance units.
pub fn compare_tables(
    material: &str,
    reconstructed: &SliceTable,
    reference: &SliceTable,
    mask: &ValidityMask,
) -> Result<MetricReport> {
    let m = slice_table_mask(mask);
    let rec = to_reflectance(reconstructed);
    let reference = to_reflectance(reference);
    Ok(MetricReport {
        material: material.to_string(),
        rel_ae_ratio: rel_ae(&rec, &reference, &m)?,
        rel_ae_pointwise: rel_ae_pointwise(&rec, &reference, &m)?,
        entries_compared: m.iter().filter(|v| **v).count(),
    })
}

/// Decodes `code` and compares it against the measured table on the retained slices.
pub fn evaluate_code(
    checkpoint: &Checkpoint,
    code: &LatentCode,
    reference: &MerlBrdf,
    mask: &ValidityMask,
) -> Result<MetricReport> {
    let rec = checkpoint.decode_slices(code)?;
    compare_tables(&reference.name, &rec, &SliceTable::restrict(reference), mask)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn examples() {
        let r = [1.0, 2.0, 3.0, 4.0];
        let mask = [true, true, false, true];
        assert_eq!(rel_ae(&r, &r, &mask).unwrap(), 0.0);
        let doubled: Vec<f64> = r.iter().map(|v| 2.0 * v).collect();
        assert_eq!(rel_ae(&doubled, &r, &mask).unwrap(), 1.0);
    }

    #[test]
    fn zero_reference_is_undefined() {
        let z = [0.0; 3];
        assert!(matches!(
            rel_ae(&[1.0, 2.0, 3.0], &z, &[true; 3]),
            Err(Error::Undefined(_))
        ));
        assert!(rel_ae(&z, &z, &[false; 3]).is_err());
    }

    #[test]
    fn pointwise_variant() {
        let r = [1.0, 3.0];
        let t = [1.0, 1.0];
        let v = rel_ae_pointwise(&r, &t, &[true, true]).unwrap();
        assert!((v - 1.0 / 1.001).abs() < 1e-12);
    }
}
